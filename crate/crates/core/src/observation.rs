//! Observation models for the factor-graph detectors.
//!
//! A preprocessor `P` (FIR filter with taps `p`) turns the channel output into
//! `x̃ = P y` and the effective interference matrix `G̃ = P H`. The matched
//! filter `P = Hᴴ` yields the Ungerboeck model `x = Hᴴ y`, `G = HᴴH`.
//!
//! `P[c][r] = p[c - r + d]` with delay `d = floor((L_p - L) / 2)`; for
//! `p = conj(reverse(h))` this is exactly `Hᴴ`. Known boundary symbols are
//! folded into `x̃`, and rows/columns of `G̃` are restricted to the `K`
//! information symbols. Only offsets within the graph band are kept.

use alloc::vec::Vec;

use num_complex::Complex64;

use crate::channel::{ChannelModel, TransmissionBlock};
use crate::error::{Error, Result};
use crate::modem::Constellation;

const ZERO: Complex64 = Complex64::new(0.0, 0.0);

/// Which interference offsets the factor graph keeps.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum BandPolicy {
    /// Keep `|j| <= L`: the neighbour set of the Ungerboeck graph.
    #[default]
    Channel,
    /// Keep every non-zero offset of `P H`.
    Full,
}

/// How the observation model is produced from the channel output.
#[derive(Debug, Clone, PartialEq)]
pub enum Preprocessor {
    /// `P = Hᴴ`.
    Matched,
    /// `P` built directly from the taps.
    Generic(Vec<Complex64>),
    /// `P = P̃ Hᴴ`, i.e. the taps are convolved with the matched filter.
    Structured(Vec<Complex64>),
}

/// Everything a receiver knows about one block: channel, noise level, output, boundary points.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockContext {
    pub channel_taps: Vec<Complex64>,
    pub noise_var: f64,
    pub y: Vec<Complex64>,
    /// č values at the `L` leading and `L` trailing boundary positions.
    pub boundary: Vec<Complex64>,
    pub block_len: usize,
}

impl BlockContext {
    pub fn new(channel: &ChannelModel, block: &TransmissionBlock, constellation: &Constellation) -> Self {
        Self {
            channel_taps: channel.taps().to_vec(),
            noise_var: channel.noise_var(),
            y: block.observation.clone(),
            boundary: block.boundary_points(constellation, channel.memory()),
            block_len: block.block_len(),
        }
    }

    pub fn memory(&self) -> usize {
        self.channel_taps.len() - 1
    }

    /// č value at extended position `c` (0-based), for boundary positions only.
    fn boundary_at(&self, c: usize) -> Complex64 {
        let l = self.memory();
        if c < l {
            self.boundary[c]
        } else {
            self.boundary[l + c - l - self.block_len]
        }
    }
}

/// `conj(reverse(h))`: the taps of the matched filter.
pub fn matched_taps(h: &[Complex64]) -> Vec<Complex64> {
    h.iter().rev().map(|t| t.conj()).collect()
}

/// Plain linear convolution.
pub fn convolve_taps(a: &[Complex64], b: &[Complex64]) -> Vec<Complex64> {
    let mut out = alloc::vec![ZERO; a.len() + b.len() - 1];
    for (i, x) in a.iter().enumerate() {
        for (j, y) in b.iter().enumerate() {
            out[i + j] += x * y;
        }
    }
    out
}

/// Delay aligning a length-`L_p + 1` filter with a memory-`L` channel.
pub fn preprocessor_delay(preproc_memory: usize, channel_memory: usize) -> i64 {
    (preproc_memory as i64 - channel_memory as i64).div_euclid(2)
}

/// Interference offsets `j = ℓ - k` spanned by `P H`.
pub fn offset_range(preproc_memory: usize, channel_memory: usize) -> (i64, i64) {
    let d = preprocessor_delay(preproc_memory, channel_memory);
    (d - preproc_memory as i64, d + channel_memory as i64)
}

/// `x̃ = P y` and `G̃ = P H` on the information rows, before boundary handling.
#[derive(Debug, Clone, PartialEq)]
pub struct RawObservation {
    pub block_len: usize,
    pub memory: usize,
    /// Smallest and largest offset `j` stored per row.
    pub offsets: (i64, i64),
    pub x: Vec<Complex64>,
    /// Row-major, `g[k * span + (j - offsets.0)] = G̃[k][k + j]`, columns over the extended index.
    pub g: Vec<Complex64>,
}

impl RawObservation {
    fn span(&self) -> usize {
        (self.offsets.1 - self.offsets.0 + 1) as usize
    }

    pub fn get(&self, k: usize, j: i64) -> Complex64 {
        if j < self.offsets.0 || j > self.offsets.1 {
            return ZERO;
        }
        self.g[k * self.span() + (j - self.offsets.0) as usize]
    }
}

/// Computes `x̃ = P y` and the information rows of `G̃ = P H` in banded form.
pub fn raw_observation(taps: &[Complex64], ctx: &BlockContext) -> RawObservation {
    let l = ctx.memory() as i64;
    let lp = taps.len() as i64 - 1;
    let k_len = ctx.block_len;
    let d = preprocessor_delay(lp as usize, l as usize);
    let (jlo, jhi) = offset_range(lp as usize, l as usize);
    let span = (jhi - jlo + 1) as usize;
    let n_y = ctx.y.len() as i64;
    let h = &ctx.channel_taps;
    let mut x = alloc::vec![ZERO; k_len];
    let mut g = alloc::vec![ZERO; k_len * span];
    for k in 0..k_len {
        let c = k as i64 + l;
        // x̃_c = Σ_i p_i y_{c+d-i}
        let mut acc = ZERO;
        for (i, p) in taps.iter().enumerate() {
            let r = c + d - i as i64;
            if r >= 0 && r < n_y {
                acc += p * ctx.y[r as usize];
            }
        }
        x[k] = acc;
        // G̃_{c,c'} = Σ_r p_{c+d-r} h_{r-c'+L}
        for j in jlo..=jhi {
            let cp = c + j;
            let r_lo = 0.max(c + d - lp).max(cp - l);
            let r_hi = (n_y - 1).min(c + d).min(cp);
            let mut acc = ZERO;
            for r in r_lo..=r_hi {
                acc += taps[(c + d - r) as usize] * h[(r - cp + l) as usize];
            }
            g[k * span + (j - jlo) as usize] = acc;
        }
    }
    RawObservation {
        block_len: k_len,
        memory: l as usize,
        offsets: (jlo, jhi),
        x,
        g,
    }
}

/// Folds the known boundary symbols into `x̃`: `x̃_k -= Σ_{ℓ ∉ [1,K]} G̃_{k,ℓ} c_ℓ`.
pub fn absorb_boundary(raw: &RawObservation, ctx: &BlockContext) -> RawObservation {
    let mut out = raw.clone();
    let l = raw.memory as i64;
    let k_len = raw.block_len as i64;
    for k in 0..k_len {
        let c = k + l;
        let mut acc = ZERO;
        for j in raw.offsets.0..=raw.offsets.1 {
            let cp = c + j;
            let inside = cp >= l && cp < l + k_len;
            if inside || cp < 0 || cp >= k_len + 2 * l {
                continue;
            }
            acc += raw.get(k as usize, j) * ctx.boundary_at(cp as usize);
        }
        out.x[k as usize] -= acc;
    }
    out
}

/// Restricts `G̃` to information columns and offsets `|j| <= band`.
pub fn band_truncate(raw: &RawObservation, band: usize, noise_var: f64) -> ObservationModel {
    let k_len = raw.block_len;
    let width = 2 * band + 1;
    let mut g = alloc::vec![ZERO; k_len * width];
    for k in 0..k_len {
        for j in -(band as i64)..=band as i64 {
            let l = k as i64 + j;
            if l < 0 || l >= k_len as i64 {
                continue;
            }
            g[k * width + (j + band as i64) as usize] = raw.get(k, j);
        }
    }
    ObservationModel {
        block_len: k_len,
        band,
        noise_var,
        x: raw.x.clone(),
        g,
    }
}

/// The observation model consumed by the factor-graph detectors.
#[derive(Debug, Clone, PartialEq)]
pub struct ObservationModel {
    pub(crate) block_len: usize,
    pub(crate) band: usize,
    pub(crate) noise_var: f64,
    pub(crate) x: Vec<Complex64>,
    /// `g[k * (2 band + 1) + (j + band)] = G̃_{k,k+j}`; zero for absent neighbours.
    pub(crate) g: Vec<Complex64>,
}

impl ObservationModel {
    pub fn block_len(&self) -> usize {
        self.block_len
    }

    pub fn band(&self) -> usize {
        self.band
    }

    pub fn noise_var(&self) -> f64 {
        self.noise_var
    }

    pub fn x(&self) -> &[Complex64] {
        &self.x
    }

    /// `G̃_{k,k+j}` (zero outside the band or the block).
    pub fn g(&self, k: usize, j: i64) -> Complex64 {
        if j.unsigned_abs() as usize > self.band {
            return ZERO;
        }
        self.g[k * (2 * self.band + 1) + (j + self.band as i64) as usize]
    }

    /// The neighbour offsets `𝒥 = {-band..-1, 1..band}`.
    pub fn neighbor_set(&self) -> impl Iterator<Item = i64> {
        let b = self.band as i64;
        (-b..=b).filter(|&j| j != 0)
    }

    /// Replaces `G̃` by its conjugate transpose.
    pub fn conjugate_transposed(&self) -> Self {
        let mut out = self.clone();
        let b = self.band as i64;
        for k in 0..self.block_len {
            for j in -b..=b {
                let l = k as i64 + j;
                if l < 0 || l >= self.block_len as i64 {
                    continue;
                }
                out.g[k * (2 * self.band + 1) + (j + b) as usize] = self.g(l as usize, -j).conj();
            }
        }
        out
    }

    /// Scales `x̃`, `G̃` and `σ²` by the same positive factor.
    pub fn scaled(&self, factor: f64) -> Self {
        Self {
            block_len: self.block_len,
            band: self.band,
            noise_var: self.noise_var * factor,
            x: self.x.iter().map(|v| v * factor).collect(),
            g: self.g.iter().map(|v| v * factor).collect(),
        }
    }

    pub(crate) fn zeros_like(&self) -> Self {
        Self {
            block_len: self.block_len,
            band: self.band,
            noise_var: self.noise_var,
            x: alloc::vec![ZERO; self.x.len()],
            g: alloc::vec![ZERO; self.g.len()],
        }
    }
}

fn build(taps: &[Complex64], ctx: &BlockContext, band: usize) -> ObservationModel {
    let raw = raw_observation(taps, ctx);
    let absorbed = absorb_boundary(&raw, ctx);
    band_truncate(&absorbed, band, ctx.noise_var)
}

fn policy_band(policy: BandPolicy, preproc_memory: usize, channel_memory: usize) -> usize {
    match policy {
        BandPolicy::Channel => channel_memory,
        BandPolicy::Full => {
            let (lo, hi) = offset_range(preproc_memory, channel_memory);
            lo.unsigned_abs().max(hi.unsigned_abs()) as usize
        }
    }
}

/// Graph band for a preprocessor with `effective_taps` taps under `policy`.
pub fn graph_band(policy: BandPolicy, effective_taps: usize, channel_memory: usize) -> usize {
    policy_band(policy, effective_taps.saturating_sub(1), channel_memory)
}

/// Ungerboeck model `x = Hᴴ y`, `G = HᴴH`, band `L`.
pub fn matched_filter_model(ctx: &BlockContext) -> ObservationModel {
    build(&matched_taps(&ctx.channel_taps), ctx, ctx.memory())
}

/// `x̃ = P y`, `G̃ = P H` for a generic FIR preprocessor.
pub fn generalized_model(taps: &[Complex64], ctx: &BlockContext, policy: BandPolicy) -> Result<ObservationModel> {
    if taps.is_empty() || taps.iter().all(|t| *t == ZERO) {
        return Err(Error::DegeneratePreprocessor);
    }
    let band = policy_band(policy, taps.len() - 1, ctx.memory());
    Ok(build(taps, ctx, band))
}

/// Effective taps of the structured preprocessor `P̃ Hᴴ`.
pub fn structured_taps(p_tilde: &[Complex64], channel_taps: &[Complex64]) -> Vec<Complex64> {
    convolve_taps(p_tilde, &matched_taps(channel_taps))
}

/// `P = P̃ Hᴴ`: the taps are applied on top of the matched filter of the actual channel.
pub fn structured_model(p_tilde: &[Complex64], ctx: &BlockContext, policy: BandPolicy) -> Result<ObservationModel> {
    if p_tilde.is_empty() || p_tilde.iter().all(|t| *t == ZERO) {
        return Err(Error::DegeneratePreprocessor);
    }
    generalized_model(&structured_taps(p_tilde, &ctx.channel_taps), ctx, policy)
}

/// Builds the observation model for any preprocessor.
pub fn observation_model(pre: &Preprocessor, ctx: &BlockContext, policy: BandPolicy) -> Result<ObservationModel> {
    match pre {
        Preprocessor::Matched => Ok(matched_filter_model(ctx)),
        Preprocessor::Generic(p) => generalized_model(p, ctx, policy),
        Preprocessor::Structured(p) => structured_model(p, ctx, policy),
    }
}

/// Same as [`observation_model`] but without the degenerate-taps check; the map
/// from taps to model is linear, which the gradient code relies on.
pub(crate) fn linear_observation(pre: &Preprocessor, ctx: &BlockContext, policy: BandPolicy) -> ObservationModel {
    match pre {
        Preprocessor::Matched => matched_filter_model(ctx),
        Preprocessor::Generic(p) => build(p, ctx, policy_band(policy, p.len() - 1, ctx.memory())),
        Preprocessor::Structured(p) => {
            let eff = structured_taps(p, &ctx.channel_taps);
            build(&eff, ctx, policy_band(policy, eff.len() - 1, ctx.memory()))
        }
    }
}
