//! The generalized factor-graph detector: weighted sum-product message passing
//! on the Ungerboeck-style graph, with the plain (unweighted) detector as the
//! all-ones special case.
//!
//! Messages are log-domain vectors over the `M` constellation points. Each
//! iteration is a flooding update: all variable-to-factor messages from the
//! previous factor-to-variable buffer, then all factor-to-variable messages
//! from the new variable-to-factor buffer. Before a message is multiplied by
//! its weight it is shifted so its maximum is zero and clamped below at
//! `-MESSAGE_CLAMP`; the shift is a per-message constant and does not change
//! any normalized output.

use alloc::vec::Vec;

use num_complex::Complex64;

use crate::error::{Error, Result};
use crate::logdomain::{log_sum_exp, normalize_in_place};
use crate::math;
use crate::modem::Constellation;
use crate::observation::{matched_filter_model, BlockContext, ObservationModel};

/// Lower clamp applied to max-shifted log-messages before weighting.
pub const MESSAGE_CLAMP: f64 = 60.0;

/// Whether NBP weights are per symbol position or shared across positions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum WeightTying {
    /// One weight set per position k (K-dependent).
    #[default]
    PerSymbol,
    /// One weight set per iteration, shared by all positions; valid for any K.
    Tied,
}

/// Shape of an NBP parameter block.
///
/// Per iteration and position the block holds `w_v` and `w_f` for each of the
/// `2 band` edges (offsets `-band..-1, 1..band` in that order), `κ₁..κ₃`, and
/// `λ` for the `band` lower neighbours `ℓ = k - d`, `d = 1..band`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NbpLayout {
    pub iterations: usize,
    pub block_len: usize,
    pub band: usize,
    pub tying: WeightTying,
}

impl NbpLayout {
    pub fn new(iterations: usize, block_len: usize, band: usize, tying: WeightTying) -> Result<Self> {
        if iterations == 0 {
            return Err(Error::InvalidArgument("at least one iteration is required".into()));
        }
        if block_len == 0 && tying == WeightTying::PerSymbol {
            return Err(Error::InvalidArgument("block length must be positive".into()));
        }
        Ok(Self {
            iterations,
            block_len,
            band,
            tying,
        })
    }

    /// Real values per (iteration, position): `5 band + 3`.
    pub fn per_position(&self) -> usize {
        5 * self.band + 3
    }

    fn positions(&self) -> usize {
        match self.tying {
            WeightTying::PerSymbol => self.block_len,
            WeightTying::Tied => 1,
        }
    }

    pub fn len(&self) -> usize {
        self.iterations * self.positions() * self.per_position()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    fn base(&self, n: usize, k: usize) -> usize {
        let kk = match self.tying {
            WeightTying::PerSymbol => k,
            WeightTying::Tied => 0,
        };
        (n * self.positions() + kk) * self.per_position()
    }

    /// Index of `w_v` for iteration `n` (0-based), position `k`, edge slot `e`.
    #[inline]
    pub fn w_v(&self, n: usize, k: usize, e: usize) -> usize {
        self.base(n, k) + e
    }

    #[inline]
    pub fn w_f(&self, n: usize, k: usize, e: usize) -> usize {
        self.base(n, k) + 2 * self.band + e
    }

    /// Index of `κ_{i+1}`, `i` in `0..3`.
    #[inline]
    pub fn kappa(&self, n: usize, k: usize, i: usize) -> usize {
        self.base(n, k) + 4 * self.band + i
    }

    /// Index of `λ` between `k` and `k - d`, `d` in `1..=band`.
    #[inline]
    pub fn lambda(&self, n: usize, k: usize, d: usize) -> usize {
        self.base(n, k) + 4 * self.band + 3 + d - 1
    }

    /// Checks that this block can drive a detector on `obs`.
    pub fn check(&self, obs: &ObservationModel) -> Result<()> {
        if self.band != obs.band() {
            return Err(Error::ShapeMismatch(alloc::format!(
                "parameters expect band {}, observation has band {}",
                self.band,
                obs.band()
            )));
        }
        if self.tying == WeightTying::PerSymbol && self.block_len != obs.block_len() {
            return Err(Error::ShapeMismatch(alloc::format!(
                "parameters expect K = {}, observation has K = {}",
                self.block_len,
                obs.block_len()
            )));
        }
        Ok(())
    }
}

/// Edge weights and factor weights of one detector unit.
#[derive(Debug, Clone, PartialEq)]
pub struct NbpParams {
    pub layout: NbpLayout,
    pub values: Vec<f64>,
}

impl NbpParams {
    pub fn from_values(layout: NbpLayout, values: Vec<f64>) -> Result<Self> {
        if values.len() != layout.len() {
            return Err(Error::ShapeMismatch(alloc::format!(
                "expected {} NBP values, got {}",
                layout.len(),
                values.len()
            )));
        }
        Ok(Self { layout, values })
    }
}

/// The all-ones parametrization, which turns the detector into plain SPA.
pub fn identity_params(layout: NbpLayout) -> NbpParams {
    NbpParams {
        layout,
        values: alloc::vec![1.0; layout.len()],
    }
}

/// Prior weights `w_p`, one per iteration.
#[derive(Debug, Clone, PartialEq)]
pub struct StageLink {
    pub w_p: Vec<f64>,
}

impl StageLink {
    pub fn ones(iterations: usize) -> Self {
        Self {
            w_p: alloc::vec![1.0; iterations],
        }
    }
}

/// Per-symbol normalized log-APPs, row-major `K × M`. Also used as a prior.
#[derive(Debug, Clone, PartialEq)]
pub struct DetectorOutput {
    block_len: usize,
    order: usize,
    log_app: Vec<f64>,
}

impl DetectorOutput {
    pub fn new(block_len: usize, order: usize, log_app: Vec<f64>) -> Result<Self> {
        if log_app.len() != block_len * order {
            return Err(Error::ShapeMismatch(alloc::format!(
                "expected {}×{} log-APPs, got {}",
                block_len,
                order,
                log_app.len()
            )));
        }
        if log_app.iter().any(|v| v.is_nan()) {
            return Err(Error::InvalidArgument("log-APP contains NaN".into()));
        }
        Ok(Self {
            block_len,
            order,
            log_app,
        })
    }

    pub(crate) fn from_raw(block_len: usize, order: usize, log_app: Vec<f64>) -> Self {
        Self {
            block_len,
            order,
            log_app,
        }
    }

    /// Uniform rows: the unbiased prior.
    pub fn uniform(block_len: usize, order: usize) -> Self {
        Self::from_raw(block_len, order, alloc::vec![-math::ln(order as f64); block_len * order])
    }

    pub fn block_len(&self) -> usize {
        self.block_len
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn row(&self, k: usize) -> &[f64] {
        &self.log_app[k * self.order..(k + 1) * self.order]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.log_app
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.log_app
    }

    /// Argmax per row (first index on ties).
    pub fn hard_decisions(&self) -> Vec<usize> {
        (0..self.block_len)
            .map(|k| {
                let row = self.row(k);
                let mut best = 0;
                for (i, &v) in row.iter().enumerate() {
                    if v > row[best] {
                        best = i;
                    }
                }
                best
            })
            .collect()
    }

    pub fn is_normalized(&self, tol: f64) -> bool {
        (0..self.block_len).all(|k| log_sum_exp(self.row(k)).abs() <= tol)
    }

    /// Largest absolute entry-wise difference between two outputs of the same shape.
    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        self.log_app
            .iter()
            .zip(&other.log_app)
            .map(|(a, b)| {
                if a == b {
                    0.0
                } else {
                    (a - b).abs()
                }
            })
            .fold(0.0, f64::max)
    }
}

/// `(κ₁/σ²)·Re{κ₂·2·x·conj(c) − κ₃·G_kk·|c|²}`.
pub fn factor_f_tilde(kappa: [f64; 3], x: Complex64, g_kk: Complex64, noise_var: f64, c: Complex64) -> f64 {
    let lin = 2.0 * (x * c.conj()).re;
    let quad = g_kk.re * c.norm_sqr();
    kappa[0] / noise_var * (kappa[1] * lin - kappa[2] * quad)
}

/// `λ·(−1/σ²)·(Re{G_kℓ·c_ℓ·conj(c_k)} + Re{G_ℓk·c_k·conj(c_ℓ)})`.
pub fn factor_i_tilde(
    lambda: f64,
    g_kl: Complex64,
    g_lk: Complex64,
    noise_var: f64,
    c_k: Complex64,
    c_l: Complex64,
) -> f64 {
    let a = (g_kl * c_l * c_k.conj()).re;
    let b = (g_lk * c_k * c_l.conj()).re;
    -lambda / noise_var * (a + b)
}

/// Graph dimensions shared by all kernels.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct Dims {
    pub k: usize,
    pub m: usize,
    pub band: usize,
}

impl Dims {
    #[inline]
    pub fn edges(&self) -> usize {
        2 * self.band
    }

    /// Neighbour offset `j` of edge slot `e`.
    #[inline]
    pub fn offset(&self, e: usize) -> i64 {
        let b = self.band as i64;
        if (e as i64) < b {
            e as i64 - b
        } else {
            e as i64 - b + 1
        }
    }

    /// Slot of the reverse edge (offset `-j`).
    #[inline]
    pub fn reverse(&self, e: usize) -> usize {
        self.edges() - 1 - e
    }

    #[inline]
    pub fn neighbor(&self, k: usize, e: usize) -> Option<usize> {
        let l = k as i64 + self.offset(e);
        if l >= 0 && l < self.k as i64 {
            Some(l as usize)
        } else {
            None
        }
    }

    #[inline]
    pub fn msg(&self, k: usize, e: usize) -> usize {
        (k * self.edges() + e) * self.m
    }

    pub fn msg_len(&self) -> usize {
        self.k * self.edges() * self.m
    }
}

/// Unweighted factor values derived from an observation model.
///
/// `lin[k][c] = 2 Re{x_k conj(c)}/σ²`, `quad[k][c] = Re{G_kk}|c|²/σ²`, and
/// `pair[k][d][a][b]` is the interference term between `c_k = a` and
/// `c_{k-d} = b` with unit `λ`.
#[derive(Debug, Clone, PartialEq)]
pub(crate) struct FactorTables {
    pub dims: Dims,
    pub lin: Vec<f64>,
    pub quad: Vec<f64>,
    pub pair: Vec<f64>,
}

impl FactorTables {
    pub fn new(obs: &ObservationModel, constellation: &Constellation) -> Self {
        let dims = Dims {
            k: obs.block_len(),
            m: constellation.order(),
            band: obs.band(),
        };
        let points = constellation.points();
        let s2 = obs.noise_var();
        let m = dims.m;
        let mut lin = alloc::vec![0.0; dims.k * m];
        let mut quad = alloc::vec![0.0; dims.k * m];
        let mut pair = alloc::vec![0.0; dims.k * dims.band * m * m];
        for k in 0..dims.k {
            let x = obs.x()[k];
            let gkk = obs.g(k, 0);
            for (c, p) in points.iter().enumerate() {
                lin[k * m + c] = 2.0 * (x * p.conj()).re / s2;
                quad[k * m + c] = gkk.re * p.norm_sqr() / s2;
            }
            for d in 1..=dims.band {
                if d > k {
                    break;
                }
                let gkl = obs.g(k, -(d as i64));
                let glk = obs.g(k - d, d as i64);
                let base = (k * dims.band + d - 1) * m * m;
                for (a, pa) in points.iter().enumerate() {
                    for (b, pb) in points.iter().enumerate() {
                        pair[base + a * m + b] = factor_i_tilde(1.0, gkl, glk, s2, *pa, *pb);
                    }
                }
            }
        }
        Self { dims, lin, quad, pair }
    }

    /// Offset into `pair` of the `M×M` table between `k` and `k - d`.
    #[inline]
    pub fn pair_base(&self, k: usize, d: usize) -> usize {
        (k * self.dims.band + d - 1) * self.dims.m * self.dims.m
    }
}

/// `ξ[k][c] = w_p·prior[k][c] + κ₁(κ₂·lin − κ₃·quad)` for iteration `n`.
pub(crate) fn xi_kernel(
    t: &FactorTables,
    layout: &NbpLayout,
    theta: &[f64],
    n: usize,
    prior: &[f64],
    w_p: f64,
    out: &mut [f64],
) {
    let m = t.dims.m;
    for k in 0..t.dims.k {
        let k1 = theta[layout.kappa(n, k, 0)];
        let k2 = theta[layout.kappa(n, k, 1)];
        let k3 = theta[layout.kappa(n, k, 2)];
        for c in 0..m {
            let i = k * m + c;
            let p = if w_p == 0.0 { 0.0 } else { w_p * prior[i] };
            out[i] = p + k1 * (k2 * t.lin[i] - k3 * t.quad[i]);
        }
    }
}

/// Variable-to-factor update of iteration `n`. `nu_prev = None` means the
/// initial constant messages `-ln M`.
pub(crate) fn var_kernel(
    dims: Dims,
    layout: &NbpLayout,
    theta: &[f64],
    n: usize,
    xi: &[f64],
    nu_prev: Option<&[f64]>,
    out: &mut [f64],
) {
    let m = dims.m;
    let e_count = dims.edges();
    let init = -math::ln(m as f64);
    let mut total = alloc::vec![0.0; m];
    let mut s = alloc::vec![0.0; m];
    for k in 0..dims.k {
        total.copy_from_slice(&xi[k * m..(k + 1) * m]);
        for e in 0..e_count {
            if dims.neighbor(k, e).is_none() {
                continue;
            }
            match nu_prev {
                Some(nu) => {
                    let o = dims.msg(k, e);
                    for c in 0..m {
                        total[c] += nu[o + c];
                    }
                }
                None => total.iter_mut().for_each(|v| *v += init),
            }
        }
        for e in 0..e_count {
            let o = dims.msg(k, e);
            if dims.neighbor(k, e).is_none() {
                out[o..o + m].iter_mut().for_each(|v| *v = 0.0);
                continue;
            }
            for c in 0..m {
                s[c] = total[c]
                    - match nu_prev {
                        Some(nu) => nu[o + c],
                        None => init,
                    };
            }
            let hi = s.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let w = theta[layout.w_v(n, k, e)];
            for c in 0..m {
                out[o + c] = w * (s[c] - hi).max(-MESSAGE_CLAMP);
            }
        }
    }
}

/// Interference value for the message on edge `e` of position `k`, for
/// `c_k = a` and neighbour value `b`.
#[inline]
pub(crate) fn edge_pair_value(t: &FactorTables, layout: &NbpLayout, theta: &[f64], n: usize, k: usize, e: usize) -> (usize, f64, bool) {
    let j = t.dims.offset(e);
    if j < 0 {
        let d = (-j) as usize;
        (t.pair_base(k, d), theta[layout.lambda(n, k, d)], false)
    } else {
        let d = j as usize;
        let l = k + d;
        (t.pair_base(l, d), theta[layout.lambda(n, l, d)], true)
    }
}

/// Factor-to-variable update of iteration `n`.
pub(crate) fn fac_kernel(
    t: &FactorTables,
    layout: &NbpLayout,
    theta: &[f64],
    n: usize,
    mu: &[f64],
    out: &mut [f64],
) {
    let dims = t.dims;
    let m = dims.m;
    let mut r = alloc::vec![0.0; m];
    let mut row = alloc::vec![0.0; m];
    for k in 0..dims.k {
        for e in 0..dims.edges() {
            let o = dims.msg(k, e);
            let Some(l) = dims.neighbor(k, e) else {
                out[o..o + m].iter_mut().for_each(|v| *v = 0.0);
                continue;
            };
            let (base, lambda, transposed) = edge_pair_value(t, layout, theta, n, k, e);
            let inc = dims.msg(l, dims.reverse(e));
            for a in 0..m {
                for b in 0..m {
                    let q = if transposed {
                        t.pair[base + b * m + a]
                    } else {
                        t.pair[base + a * m + b]
                    };
                    row[b] = lambda * q + mu[inc + b];
                }
                r[a] = log_sum_exp(&row);
            }
            let hi = r.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let w = theta[layout.w_f(n, k, e)];
            for a in 0..m {
                out[o + a] = w * (r[a] - hi).max(-MESSAGE_CLAMP);
            }
        }
    }
}

/// `ξ + Σ ν` per position, normalized.
pub(crate) fn readout_kernel(dims: Dims, xi: &[f64], nu: &[f64], out: &mut [f64]) {
    let m = dims.m;
    for k in 0..dims.k {
        let row = &mut out[k * m..(k + 1) * m];
        row.copy_from_slice(&xi[k * m..(k + 1) * m]);
        for e in 0..dims.edges() {
            if dims.neighbor(k, e).is_none() {
                continue;
            }
            let o = dims.msg(k, e);
            for c in 0..m {
                row[c] += nu[o + c];
            }
        }
        normalize_in_place(row);
    }
}

fn check_inputs(
    prior: &DetectorOutput,
    params: &NbpParams,
    link: &StageLink,
    obs: &ObservationModel,
    constellation: &Constellation,
) -> Result<()> {
    params.layout.check(obs)?;
    if params.values.len() != params.layout.len() {
        return Err(Error::ShapeMismatch("NBP value count does not match its layout".into()));
    }
    if link.w_p.len() != params.layout.iterations {
        return Err(Error::ShapeMismatch(alloc::format!(
            "{} prior weights for {} iterations",
            link.w_p.len(),
            params.layout.iterations
        )));
    }
    if prior.block_len() != obs.block_len() || prior.order() != constellation.order() {
        return Err(Error::ShapeMismatch("prior shape does not match the block".into()));
    }
    Ok(())
}

fn run(
    prior: &DetectorOutput,
    params: &NbpParams,
    link: &StageLink,
    obs: &ObservationModel,
    constellation: &Constellation,
    trace: bool,
) -> Result<Vec<DetectorOutput>> {
    check_inputs(prior, params, link, obs, constellation)?;
    let t = FactorTables::new(obs, constellation);
    let dims = t.dims;
    let layout = &params.layout;
    let theta = &params.values;
    let n_iter = layout.iterations;
    let mut xi = alloc::vec![0.0; dims.k * dims.m];
    let mut mu = alloc::vec![0.0; dims.msg_len()];
    let mut nu = alloc::vec![0.0; dims.msg_len()];
    let mut out = Vec::new();
    for n in 0..n_iter {
        xi_kernel(&t, layout, theta, n, prior.as_slice(), link.w_p[n], &mut xi);
        var_kernel(dims, layout, theta, n, &xi, if n == 0 { None } else { Some(&nu) }, &mut mu);
        fac_kernel(&t, layout, theta, n, &mu, &mut nu);
        if trace || n + 1 == n_iter {
            let next = (n + 1).min(n_iter - 1);
            let mut xr = alloc::vec![0.0; dims.k * dims.m];
            xi_kernel(&t, layout, theta, next, prior.as_slice(), link.w_p[next], &mut xr);
            let mut app = alloc::vec![0.0; dims.k * dims.m];
            readout_kernel(dims, &xr, &nu, &mut app);
            out.push(DetectorOutput::from_raw(dims.k, dims.m, app));
        }
    }
    Ok(out)
}

/// Runs the detector for `params.layout.iterations` flooding iterations.
pub fn gfg_detect(
    prior: &DetectorOutput,
    params: &NbpParams,
    link: &StageLink,
    obs: &ObservationModel,
    constellation: &Constellation,
) -> Result<DetectorOutput> {
    Ok(run(prior, params, link, obs, constellation, false)?.pop().expect("at least one iteration"))
}

/// Like [`gfg_detect`] but returns the readout after every iteration. After
/// iteration `n` the degree-1 term uses the parameters of iteration `n + 1`
/// (the last iteration's for `n = N`); the final entry equals [`gfg_detect`].
pub fn gfg_detect_trace(
    prior: &DetectorOutput,
    params: &NbpParams,
    link: &StageLink,
    obs: &ObservationModel,
    constellation: &Constellation,
) -> Result<Vec<DetectorOutput>> {
    run(prior, params, link, obs, constellation, true)
}

/// The plain Ungerboeck factor-graph detector with a uniform prior.
pub fn ufg_detect(ctx: &BlockContext, constellation: &Constellation, iterations: usize) -> Result<DetectorOutput> {
    let obs = matched_filter_model(ctx);
    let layout = NbpLayout::new(iterations, ctx.block_len, obs.band(), WeightTying::Tied)?;
    gfg_detect(
        &DetectorOutput::uniform(ctx.block_len, constellation.order()),
        &identity_params(layout),
        &StageLink::ones(iterations),
        &obs,
        constellation,
    )
}
