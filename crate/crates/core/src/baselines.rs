//! Reference detectors: symbol-wise MAP via the BCJR trellis, exhaustive MAP
//! for tiny blocks, and a linear MMSE equalizer with Gaussian soft output.
//!
//! BCJR and brute force work on the raw channel output `y` with branch metrics
//! `-|y_r - (h * č)_r|² / σ²`, independently of the factor-graph observation models.

use alloc::vec::Vec;

use num_complex::Complex64;

use crate::error::{Error, Result};
use crate::gfg::DetectorOutput;
use crate::logdomain::{log_sum_exp, normalize_in_place};
use crate::modem::Constellation;
use crate::observation::BlockContext;

/// Largest trellis (states) the BCJR detector accepts.
pub const MAX_TRELLIS_STATES: usize = 1 << 20;
/// Largest number of candidate sequences brute force accepts.
pub const MAX_SEQUENCES: usize = 1 << 20;
/// Largest forward-metric table (states × time steps) the BCJR detector allocates.
const MAX_TRELLIS_CELLS: usize = 1 << 28;

/// Default LMMSE filter order (the filter has `order + 1` taps).
pub const DEFAULT_LMMSE_ORDER: usize = 30;

fn boundary_indices(ctx: &BlockContext, constellation: &Constellation) -> Result<Vec<usize>> {
    ctx.boundary
        .iter()
        .map(|p| {
            let i = constellation.nearest(*p);
            if (constellation.point(i) - p).norm_sqr() > 1e-20 {
                Err(Error::InvalidArgument("boundary values must be constellation points".into()))
            } else {
                Ok(i)
            }
        })
        .collect()
}

fn prior_row<'a>(prior: Option<&'a DetectorOutput>, k: usize, m: usize, uniform: &'a [f64]) -> &'a [f64] {
    match prior {
        Some(p) => p.row(k),
        None => &uniform[..m],
    }
}

fn check_prior(prior: Option<&DetectorOutput>, ctx: &BlockContext, m: usize) -> Result<()> {
    if let Some(p) = prior {
        if p.block_len() != ctx.block_len || p.order() != m {
            return Err(Error::ShapeMismatch("prior shape does not match the block".into()));
        }
    }
    Ok(())
}

/// Number of trellis states `M^L`, if it fits in a `usize`.
pub fn trellis_states(order: usize, memory: usize) -> Option<usize> {
    order.checked_pow(memory as u32)
}

/// Exact symbol-wise log-APPs by forward-backward recursion on the channel trellis.
///
/// The state is the last `L` symbols packed in base `M`, newest in the least
/// significant digit. The trellis starts at the leading boundary state and
/// ends at the trailing one.
pub fn bcjr_detect(ctx: &BlockContext, constellation: &Constellation, prior: Option<&DetectorOutput>) -> Result<DetectorOutput> {
    let m = constellation.order();
    let l = ctx.memory();
    let k_len = ctx.block_len;
    check_prior(prior, ctx, m)?;
    if ctx.noise_var <= 0.0 {
        return Err(Error::InvalidArgument("BCJR needs a positive noise variance".into()));
    }
    let states = match trellis_states(m, l) {
        Some(s) if s <= MAX_TRELLIS_STATES => s,
        _ => {
            return Err(Error::StateSpaceTooLarge {
                states: trellis_states(m, l).map_or(u64::MAX, |s| s as u64),
                limit: MAX_TRELLIS_STATES as u64,
            })
        }
    };
    let steps = k_len + l;
    if states.saturating_mul(steps + 1) > MAX_TRELLIS_CELLS {
        return Err(Error::StateSpaceTooLarge {
            states: states as u64,
            limit: (MAX_TRELLIS_CELLS / (steps + 1)) as u64,
        });
    }
    let uniform = alloc::vec![-crate::math::ln(m as f64); m];
    let points = constellation.points();
    let h = &ctx.channel_taps;
    let inv_s2 = 1.0 / ctx.noise_var;

    if l == 0 {
        let mut out = Vec::with_capacity(k_len * m);
        for k in 0..k_len {
            let pr = prior_row(prior, k, m, &uniform);
            let mut row: Vec<f64> = (0..m)
                .map(|c| pr[c] - (ctx.y[k] - h[0] * points[c]).norm_sqr() * inv_s2)
                .collect();
            normalize_in_place(&mut row);
            out.extend(row);
        }
        return DetectorOutput::new(k_len, m, out);
    }

    let bidx = boundary_indices(ctx, constellation)?;
    let pack = |digits: &[usize]| digits.iter().fold(0usize, |acc, &d| acc * m + d);
    let start = pack(&bidx[..l]);
    let end = pack(&bidx[l..]);
    let top = states / m;

    // tail[s] = Σ_{i=1..L} h_i · point(digit i-1 of s)
    let mut tail = alloc::vec![Complex64::new(0.0, 0.0); states];
    for (s, t) in tail.iter_mut().enumerate() {
        let mut rest = s;
        for hi in h.iter().skip(1) {
            *t += hi * points[rest % m];
            rest /= m;
        }
    }
    let head: Vec<Complex64> = points.iter().map(|p| h[0] * p).collect();

    // Allowed new symbols and their log-priors at step t (emitting y_t).
    let step_symbols = |t: usize| -> Vec<(usize, f64)> {
        if t < k_len {
            let pr = prior_row(prior, t, m, &uniform);
            (0..m).map(|c| (c, pr[c])).collect()
        } else {
            alloc::vec![(bidx[l + t - k_len], 0.0)]
        }
    };
    let gamma = |t: usize, s: usize, c: usize| -> f64 { -(ctx.y[t] - head[c] - tail[s]).norm_sqr() * inv_s2 };

    let mut alpha = alloc::vec![f64::NEG_INFINITY; (steps + 1) * states];
    alpha[start] = 0.0;
    let mut terms = alloc::vec![0.0; m];
    for t in 0..steps {
        let syms = step_symbols(t);
        let (prev, next) = alpha.split_at_mut((t + 1) * states);
        let prev = &prev[t * states..];
        let next = &mut next[..states];
        for &(c, lp) in &syms {
            for hi_part in 0..top {
                // s' = hi_part * M + c; predecessors s = hi_part + a * M^{L-1}
                let sp = hi_part * m + c;
                for (a, term) in terms.iter_mut().enumerate() {
                    let s = hi_part + a * top;
                    *term = prev[s] + gamma(t, s, c) + lp;
                }
                next[sp] = log_sum_exp(&terms);
            }
        }
    }

    let mut beta = alloc::vec![f64::NEG_INFINITY; states];
    beta[end] = 0.0;
    let mut beta_prev = alloc::vec![f64::NEG_INFINITY; states];
    let mut out = alloc::vec![0.0; k_len * m];
    let mut sterms = alloc::vec![0.0; states];
    for t in (0..steps).rev() {
        let syms = step_symbols(t);
        let prev = &alpha[t * states..(t + 1) * states];
        if t < k_len {
            for &(c, lp) in &syms {
                for (s, st) in sterms.iter_mut().enumerate() {
                    let sp = (s % top) * m + c;
                    *st = prev[s] + gamma(t, s, c) + lp + beta[sp];
                }
                out[t * m + c] = log_sum_exp(&sterms);
            }
            normalize_in_place(&mut out[t * m..(t + 1) * m]);
        }
        let mut cterms = Vec::with_capacity(syms.len());
        for (s, bp) in beta_prev.iter_mut().enumerate() {
            cterms.clear();
            for &(c, lp) in &syms {
                let sp = (s % top) * m + c;
                cterms.push(gamma(t, s, c) + lp + beta[sp]);
            }
            *bp = log_sum_exp(&cterms);
        }
        core::mem::swap(&mut beta, &mut beta_prev);
    }
    DetectorOutput::new(k_len, m, out)
}

/// Exact marginals by enumerating every information sequence.
pub fn brute_force_map(ctx: &BlockContext, constellation: &Constellation, prior: Option<&DetectorOutput>) -> Result<DetectorOutput> {
    let m = constellation.order();
    let k_len = ctx.block_len;
    let l = ctx.memory();
    check_prior(prior, ctx, m)?;
    let total = match m.checked_pow(k_len as u32) {
        Some(t) if t <= MAX_SEQUENCES => t,
        _ => {
            return Err(Error::SearchSpaceTooLarge {
                candidates: m.checked_pow(k_len as u32).map_or(u64::MAX, |c| c as u64),
                limit: MAX_SEQUENCES as u64,
            })
        }
    };
    if ctx.noise_var <= 0.0 {
        return Err(Error::InvalidArgument("brute force needs a positive noise variance".into()));
    }
    let uniform = alloc::vec![-crate::math::ln(m as f64); m];
    let points = constellation.points();
    let mut ext = alloc::vec![Complex64::new(0.0, 0.0); k_len + 2 * l];
    ext[..l].copy_from_slice(&ctx.boundary[..l]);
    ext[l + k_len..].copy_from_slice(&ctx.boundary[l..]);
    let mut digits = alloc::vec![0usize; k_len];
    let mut metric = alloc::vec![0.0; total];
    for (idx, slot) in metric.iter_mut().enumerate() {
        let mut rest = idx;
        for k in (0..k_len).rev() {
            digits[k] = rest % m;
            rest /= m;
        }
        let mut lp = 0.0;
        for k in 0..k_len {
            ext[l + k] = points[digits[k]];
            lp += prior_row(prior, k, m, &uniform)[digits[k]];
        }
        let y_hat = crate::channel::convolve(&ctx.channel_taps, &ext);
        let ll: f64 = y_hat.iter().zip(&ctx.y).map(|(a, b)| (b - a).norm_sqr()).sum();
        *slot = lp - ll / ctx.noise_var;
    }
    let mut out = alloc::vec![0.0; k_len * m];
    let mut buckets: Vec<Vec<f64>> = alloc::vec![Vec::new(); m];
    for k in 0..k_len {
        buckets.iter_mut().for_each(|b| b.clear());
        let stride = m.pow((k_len - 1 - k) as u32);
        for (idx, &v) in metric.iter().enumerate() {
            buckets[(idx / stride) % m].push(v);
        }
        for c in 0..m {
            out[k * m + c] = log_sum_exp(&buckets[c]);
        }
        normalize_in_place(&mut out[k * m..(k + 1) * m]);
    }
    DetectorOutput::new(k_len, m, out)
}

/// An FIR MMSE equalizer `z_n = Σ_i f_i y'_{n-i}` with decision delay `delay`
/// and equalized gain `gain` at that delay, where `y'_n = y_{n-L}`.
#[derive(Debug, Clone, PartialEq)]
pub struct LmmseEqualizer {
    pub taps: Vec<Complex64>,
    pub delay: usize,
    pub gain: f64,
}

/// Solves `A x = b` for every column of `b` by Gauss-Jordan elimination with partial pivoting.
fn solve_in_place(a: &mut [Complex64], n: usize, b: &mut [Complex64], rhs: usize) -> Result<()> {
    for col in 0..n {
        let mut piv = col;
        let mut best = a[col * n + col].norm_sqr();
        for r in col + 1..n {
            let v = a[r * n + col].norm_sqr();
            if v > best {
                best = v;
                piv = r;
            }
        }
        if best < 1e-300 {
            return Err(Error::SingularSystem);
        }
        if piv != col {
            for c in 0..n {
                a.swap(col * n + c, piv * n + c);
            }
            for c in 0..rhs {
                b.swap(col * rhs + c, piv * rhs + c);
            }
        }
        let inv = Complex64::new(1.0, 0.0) / a[col * n + col];
        for r in 0..n {
            if r == col {
                continue;
            }
            let f = a[r * n + col] * inv;
            if f == Complex64::new(0.0, 0.0) {
                continue;
            }
            for c in col..n {
                let v = a[col * n + c];
                a[r * n + c] -= f * v;
            }
            for c in 0..rhs {
                let v = b[col * rhs + c];
                b[r * rhs + c] -= f * v;
            }
        }
    }
    for r in 0..n {
        let inv = Complex64::new(1.0, 0.0) / a[r * n + r];
        for c in 0..rhs {
            b[r * rhs + c] *= inv;
        }
    }
    Ok(())
}

/// `H_c`: the `(order+1) × (order+1+L)` channel matrix with `H_c[i][j] = h_{j-i}`.
fn stacked_channel(h: &[Complex64], order: usize) -> (usize, usize, Vec<Complex64>) {
    let rows = order + 1;
    let cols = rows + h.len() - 1;
    let mut hc = alloc::vec![Complex64::new(0.0, 0.0); rows * cols];
    for i in 0..rows {
        for (j, t) in h.iter().enumerate() {
            hc[i * cols + i + j] = *t;
        }
    }
    (rows, cols, hc)
}

/// `R = H_c H_cᴴ + σ² I` for unit-energy iid symbols.
pub fn lmmse_normal_matrix(h: &[Complex64], noise_var: f64, order: usize) -> Vec<Complex64> {
    let (rows, cols, hc) = stacked_channel(h, order);
    let mut r = alloc::vec![Complex64::new(0.0, 0.0); rows * rows];
    for i in 0..rows {
        for j in 0..rows {
            let mut acc = Complex64::new(0.0, 0.0);
            for c in 0..cols {
                acc += hc[i * cols + c] * hc[j * cols + c].conj();
            }
            if i == j {
                acc += noise_var;
            }
            r[i * rows + j] = acc;
        }
    }
    r
}

/// Wiener solution `R g = H_c e_Δ` for every delay; keeps the delay with the
/// largest equalized gain `q_Δ = g_Δᴴ H_c e_Δ`. The filter taps are `conj(g)`.
pub fn lmmse_equalizer(h: &[Complex64], noise_var: f64, order: usize) -> Result<LmmseEqualizer> {
    let (rows, cols, hc) = stacked_channel(h, order);
    let mut a = lmmse_normal_matrix(h, noise_var, order);
    let mut b = hc.clone();
    solve_in_place(&mut a, rows, &mut b, cols)?;
    let mut best = (0usize, f64::NEG_INFINITY);
    for d in 0..cols {
        let q: f64 = (0..rows).map(|i| (b[i * cols + d].conj() * hc[i * cols + d]).re).sum();
        if q > best.1 {
            best = (d, q);
        }
    }
    let (delay, gain) = best;
    if !(gain > 0.0) {
        return Err(Error::SingularSystem);
    }
    Ok(LmmseEqualizer {
        taps: (0..rows).map(|i| b[i * cols + delay].conj()).collect(),
        delay,
        gain,
    })
}

impl LmmseEqualizer {
    /// Unbiased estimates `ĉ_k = z_{L+k+Δ} / q_Δ` of the information symbols.
    pub fn equalize(&self, ctx: &BlockContext) -> Vec<Complex64> {
        let l = ctx.memory();
        let n_y = ctx.y.len() as i64;
        (0..ctx.block_len)
            .map(|k| {
                let n = (l + k + self.delay) as i64;
                let mut z = Complex64::new(0.0, 0.0);
                for (i, f) in self.taps.iter().enumerate() {
                    let r = n - i as i64 - l as i64;
                    if r >= 0 && r < n_y {
                        z += f * ctx.y[r as usize];
                    }
                }
                z / self.gain
            })
            .collect()
    }
}

/// LMMSE equalization followed by a Gaussian approximation of the estimation
/// error, whose variance is estimated from the hard decisions of the block.
pub fn lmmse_detect(ctx: &BlockContext, constellation: &Constellation, order: usize) -> Result<DetectorOutput> {
    let eq = lmmse_equalizer(&ctx.channel_taps, ctx.noise_var, order)?;
    lmmse_detect_with(&eq, ctx, constellation)
}

/// [`lmmse_detect`] with a precomputed equalizer.
pub fn lmmse_detect_with(eq: &LmmseEqualizer, ctx: &BlockContext, constellation: &Constellation) -> Result<DetectorOutput> {
    let est = eq.equalize(ctx);
    let m = constellation.order();
    let err: f64 = est
        .iter()
        .map(|z| (z - constellation.point(constellation.nearest(*z))).norm_sqr())
        .sum::<f64>()
        / est.len().max(1) as f64;
    let var = err.max(1e-12);
    let mut out = Vec::with_capacity(est.len() * m);
    for z in &est {
        let mut row: Vec<f64> = constellation.points().iter().map(|p| -(z - p).norm_sqr() / var).collect();
        normalize_in_place(&mut row);
        out.extend(row);
    }
    DetectorOutput::new(est.len(), m, out)
}
