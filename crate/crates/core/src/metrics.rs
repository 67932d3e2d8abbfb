//! Bit-metric demapping, bit error rate and bit-wise mutual information.

use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::gfg::DetectorOutput;
use crate::logdomain::log_sum_exp;
use crate::math;
use crate::modem::Constellation;

/// LLR magnitude limit applied after scaling.
pub const LLR_CLIP: f64 = 50.0;

/// Lower and upper end of the α search bracket.
pub const ALPHA_BRACKET: (f64, f64) = (0.05, 20.0);

/// Per-bit LLRs `ln(P(b=0)/P(b=1))`, row-major `K × m`.
#[derive(Debug, Clone, PartialEq)]
pub struct LlrBlock {
    pub block_len: usize,
    pub bits_per_symbol: usize,
    pub alpha: f64,
    pub llr: Vec<f64>,
}

impl LlrBlock {
    pub fn get(&self, k: usize, i: usize) -> f64 {
        self.llr[k * self.bits_per_symbol + i]
    }
}

/// Summary of a detector's performance over a data set.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricReport {
    pub ber: f64,
    pub bmi: f64,
    pub alpha_used: f64,
    pub num_bits: u64,
    pub bit_errors: u64,
    pub num_blocks: usize,
}

fn clip(v: f64) -> f64 {
    v.clamp(-LLR_CLIP, LLR_CLIP)
}

/// Unclipped `max*_{c∈M_i^0} log_app(c) − max*_{c∈M_i^1} log_app(c)` for every (k, i).
pub(crate) fn raw_llrs(out: &DetectorOutput, constellation: &Constellation) -> Vec<f64> {
    let m = constellation.bits_per_symbol();
    let mut llr = Vec::with_capacity(out.block_len() * m);
    let mut buf = Vec::with_capacity(constellation.order());
    for k in 0..out.block_len() {
        let row = out.row(k);
        for i in 0..m {
            buf.clear();
            buf.extend(constellation.bit_subset(i, 0).iter().map(|&c| row[c]));
            let zero = log_sum_exp(&buf);
            buf.clear();
            buf.extend(constellation.bit_subset(i, 1).iter().map(|&c| row[c]));
            let one = log_sum_exp(&buf);
            llr.push(if zero == one { 0.0 } else { zero - one });
        }
    }
    llr
}

/// `α · (max* over bit-0 points − max* over bit-1 points)`, clipped to ±50.
pub fn bitwise_llr(out: &DetectorOutput, constellation: &Constellation, alpha: f64) -> LlrBlock {
    LlrBlock {
        block_len: out.block_len(),
        bits_per_symbol: constellation.bits_per_symbol(),
        alpha,
        llr: raw_llrs(out, constellation).into_iter().map(|v| clip(alpha * v)).collect(),
    }
}

/// Bit errors and compared bits of the hard decisions against `truth`.
pub fn bit_errors(out: &DetectorOutput, truth: &[usize], constellation: &Constellation) -> Result<(u64, u64)> {
    if truth.len() != out.block_len() {
        return Err(Error::ShapeMismatch(alloc::format!(
            "{} symbols against {} decisions",
            truth.len(),
            out.block_len()
        )));
    }
    let errors = out
        .hard_decisions()
        .iter()
        .zip(truth)
        .map(|(&a, &b)| (constellation.label(a) ^ constellation.label(b)).count_ones() as u64)
        .sum();
    Ok((errors, (truth.len() * constellation.bits_per_symbol()) as u64))
}

/// Bit error rate of the hard decisions (bits, not symbols).
pub fn ber(out: &DetectorOutput, truth: &[usize], constellation: &Constellation) -> Result<f64> {
    let (e, n) = bit_errors(out, truth, constellation)?;
    Ok(if n == 0 { 0.0 } else { e as f64 / n as f64 })
}

/// `log₂(1 + exp(−(1−2b)·L))`: the per-bit penalty of the estimator.
#[inline]
pub fn bit_penalty(llr: f64, bit: u8) -> f64 {
    let s = if bit == 0 { -llr } else { llr };
    math::softplus(s) / core::f64::consts::LN_2
}

/// Running sum of per-bit penalties over a data set, in a fixed order.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct BmiAccumulator {
    pub penalty: f64,
    pub symbols: u64,
    pub bits_per_symbol: usize,
}

impl BmiAccumulator {
    pub fn new(bits_per_symbol: usize) -> Self {
        Self {
            penalty: 0.0,
            symbols: 0,
            bits_per_symbol,
        }
    }

    pub fn add(&mut self, llrs: &LlrBlock, truth: &[usize], constellation: &Constellation) -> Result<()> {
        if truth.len() != llrs.block_len {
            return Err(Error::ShapeMismatch("truth length differs from LLR block".into()));
        }
        for (k, &c) in truth.iter().enumerate() {
            for i in 0..llrs.bits_per_symbol {
                self.penalty += bit_penalty(llrs.get(k, i), constellation.bit(c, i));
            }
        }
        self.symbols += truth.len() as u64;
        Ok(())
    }

    pub fn merge(&mut self, other: &Self) {
        self.penalty += other.penalty;
        self.symbols += other.symbols;
    }

    /// `m − penalty / (D·K)`.
    pub fn value(&self) -> f64 {
        if self.symbols == 0 {
            return 0.0;
        }
        self.bits_per_symbol as f64 - self.penalty / self.symbols as f64
    }
}

/// BMI estimate over a data set of LLR blocks and their transmitted symbols.
pub fn bmi_estimate(llrs: &[LlrBlock], truths: &[&[usize]], constellation: &Constellation) -> Result<f64> {
    if llrs.is_empty() || llrs.len() != truths.len() {
        return Err(Error::ShapeMismatch("need one truth vector per LLR block".into()));
    }
    let mut acc = BmiAccumulator::new(constellation.bits_per_symbol());
    for (l, t) in llrs.iter().zip(truths) {
        acc.add(l, t, constellation)?;
    }
    Ok(acc.value())
}

/// Signed LLRs at α = 1 towards the transmitted bit: `s = (1−2b)·L`, so that
/// the penalty is `log₂(1 + e^{−s})`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SignedLlrs {
    pub values: Vec<f64>,
    pub bits_per_symbol: usize,
}

impl SignedLlrs {
    pub fn new(bits_per_symbol: usize) -> Self {
        Self {
            values: Vec::new(),
            bits_per_symbol,
        }
    }

    /// Appends the unclipped α = 1 LLRs of one detector output.
    pub fn push(&mut self, out: &DetectorOutput, truth: &[usize], constellation: &Constellation) -> Result<()> {
        if truth.len() != out.block_len() {
            return Err(Error::ShapeMismatch("truth length differs from detector output".into()));
        }
        let raw = raw_llrs(out, constellation);
        let m = constellation.bits_per_symbol();
        for (k, &c) in truth.iter().enumerate() {
            for i in 0..m {
                let v = raw[k * m + i];
                self.values.push(if constellation.bit(c, i) == 0 { v } else { -v });
            }
        }
        Ok(())
    }

    pub fn extend(&mut self, other: &Self) {
        self.values.extend_from_slice(&other.values);
    }

    /// BMI with all LLRs scaled by `alpha` (clipping after scaling).
    pub fn bmi(&self, alpha: f64) -> f64 {
        if self.values.is_empty() {
            return 0.0;
        }
        let pen: f64 = self.values.iter().map(|&s| math::softplus(-clip(alpha * s))).sum::<f64>();
        let symbols = self.values.len() as f64 / self.bits_per_symbol as f64;
        self.bits_per_symbol as f64 - pen / core::f64::consts::LN_2 / symbols
    }
}

const INV_PHI: f64 = 0.618_033_988_749_894_8;

/// Maximizes the BMI over the LLR scaling α ∈ [0.05, 20]: a log-spaced grid
/// locates the best bracket, golden-section search refines it to 1e-3 in α.
/// Degenerate input (no LLRs or all zero) returns α = 1.
pub fn optimize_alpha(llrs: &SignedLlrs) -> (f64, f64) {
    let at_one = llrs.bmi(1.0);
    if llrs.values.iter().all(|&v| v == 0.0) {
        return (1.0, at_one);
    }
    let (lo, hi) = (math::ln(ALPHA_BRACKET.0), math::ln(ALPHA_BRACKET.1));
    let grid = 32;
    let f = |u: f64| llrs.bmi(math::exp(u));
    let pts: Vec<f64> = (0..=grid).map(|i| lo + (hi - lo) * i as f64 / grid as f64).collect();
    let vals: Vec<f64> = pts.iter().map(|&u| f(u)).collect();
    let mut best = 0;
    for i in 1..vals.len() {
        if vals[i] > vals[best] {
            best = i;
        }
    }
    let mut a = pts[best.saturating_sub(1)];
    let mut b = pts[(best + 1).min(grid)];
    let mut c = b - INV_PHI * (b - a);
    let mut d = a + INV_PHI * (b - a);
    let (mut fc, mut fd) = (f(c), f(d));
    while math::exp(b) - math::exp(a) > 1e-3 {
        if fc >= fd {
            b = d;
            d = c;
            fd = fc;
            c = b - INV_PHI * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + INV_PHI * (b - a);
            fd = f(d);
        }
    }
    let mut cands = [(math::exp(pts[best]), vals[best]), (math::exp(0.5 * (a + b)), f(0.5 * (a + b))), (1.0, at_one)];
    cands.sort_by(|x, y| y.1.partial_cmp(&x.1).unwrap_or(core::cmp::Ordering::Equal));
    cands[0]
}

/// Average over stages of the BMI estimate of each stage's outputs.
///
/// `stage_outputs[s][d]` is the stage-`s` output for block `d`.
pub fn multiloss(
    stage_outputs: &[Vec<DetectorOutput>],
    truths: &[&[usize]],
    constellation: &Constellation,
    alpha: f64,
) -> Result<f64> {
    if stage_outputs.is_empty() {
        return Err(Error::EmptyReduction);
    }
    let mut total = 0.0;
    for outs in stage_outputs {
        let llrs: Vec<LlrBlock> = outs.iter().map(|o| bitwise_llr(o, constellation, alpha)).collect();
        total += bmi_estimate(&llrs, truths, constellation)?;
    }
    Ok(total / stage_outputs.len() as f64)
}
