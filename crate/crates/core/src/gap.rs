//! The multi-stage, multi-branch detector: `S` serial stages of `B` parallel
//! detector units, each with its own preprocessor and weights. Branch outputs
//! of a stage are merged and passed as the prior of the next stage.

use alloc::vec::Vec;

use num_complex::Complex64;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::gfg::{gfg_detect, identity_params, DetectorOutput, NbpLayout, NbpParams, StageLink, WeightTying};
use crate::logdomain::normalize_in_place;
use crate::modem::Constellation;
use crate::observation::{
    graph_band, linear_observation, matched_taps, preprocessor_delay, BandPolicy, BlockContext, ObservationModel,
    Preprocessor,
};

/// Family of preprocessor used by every unit.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum PreprocessorKind {
    /// Fixed matched filter; no taps.
    #[default]
    Matched,
    /// Free FIR taps `p`.
    Generic,
    /// Free taps `p̃` applied on top of the matched filter of the actual channel.
    Structured,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GapConfig {
    pub stages: usize,
    pub branches: usize,
    pub iters_per_stage: usize,
    pub preprocessor: PreprocessorKind,
    /// Preprocessor memory `L_p`; units have `L_p + 1` taps.
    pub preproc_len: usize,
    pub band_policy: BandPolicy,
    pub tying: WeightTying,
}

impl GapConfig {
    /// The plain detector: one matched-filter unit with `iterations` iterations.
    pub fn ufg(iterations: usize) -> Self {
        Self {
            stages: 1,
            branches: 1,
            iters_per_stage: iterations,
            preprocessor: PreprocessorKind::Matched,
            preproc_len: 0,
            band_policy: BandPolicy::Channel,
            tying: WeightTying::PerSymbol,
        }
    }

    /// A single unit with a trainable preprocessor of memory `preproc_len`.
    pub fn gfg(iterations: usize, preprocessor: PreprocessorKind, preproc_len: usize) -> Self {
        Self {
            stages: 1,
            branches: 1,
            iters_per_stage: iterations,
            preprocessor,
            preproc_len,
            band_policy: BandPolicy::Channel,
            tying: WeightTying::PerSymbol,
        }
    }

    pub fn gap(stages: usize, branches: usize, iters_per_stage: usize, preprocessor: PreprocessorKind, preproc_len: usize) -> Self {
        Self {
            stages,
            branches,
            iters_per_stage,
            preprocessor,
            preproc_len,
            band_policy: BandPolicy::Channel,
            tying: WeightTying::PerSymbol,
        }
    }

    pub fn with_tying(mut self, tying: WeightTying) -> Self {
        self.tying = tying;
        self
    }

    pub fn with_band_policy(mut self, policy: BandPolicy) -> Self {
        self.band_policy = policy;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.stages == 0 || self.branches == 0 || self.iters_per_stage == 0 {
            return Err(Error::InvalidArgument("stages, branches and iterations must all be at least 1".into()));
        }
        Ok(())
    }

    pub fn units(&self) -> usize {
        self.stages * self.branches
    }

    /// Complex taps per unit.
    pub fn taps_per_unit(&self) -> usize {
        match self.preprocessor {
            PreprocessorKind::Matched => 0,
            _ => self.preproc_len + 1,
        }
    }

    /// Number of taps of the filter that is actually applied to `y`.
    pub fn effective_taps(&self, channel_memory: usize) -> usize {
        match self.preprocessor {
            PreprocessorKind::Matched => channel_memory + 1,
            PreprocessorKind::Generic => self.preproc_len + 1,
            PreprocessorKind::Structured => self.preproc_len + channel_memory + 1,
        }
    }

    /// Graph band of every unit for a channel of memory `channel_memory`.
    pub fn band(&self, channel_memory: usize) -> usize {
        match self.preprocessor {
            PreprocessorKind::Matched => channel_memory,
            _ => graph_band(self.band_policy, self.effective_taps(channel_memory), channel_memory),
        }
    }
}

/// Parameters of one (stage, branch) unit.
#[derive(Debug, Clone, PartialEq)]
pub struct UnitParams {
    pub nbp: NbpParams,
    pub link: StageLink,
    pub taps: Vec<Complex64>,
}

/// All trainable values of a detector, units in order `s·B + b`.
#[derive(Debug, Clone, PartialEq)]
pub struct GapParams {
    pub config: GapConfig,
    pub block_len: usize,
    pub channel_memory: usize,
    pub units: Vec<UnitParams>,
}

impl GapParams {
    /// Parameters for which every unit reproduces the plain detector: all
    /// weights one and taps equal to the matched filter of `channel_taps`.
    pub fn identity(config: GapConfig, block_len: usize, channel_taps: &[Complex64]) -> Result<Self> {
        config.validate()?;
        let memory = channel_taps.len() - 1;
        let layout = NbpLayout::new(config.iters_per_stage, block_len, config.band(memory), config.tying)?;
        let taps = identity_taps(&config, channel_taps)?;
        let unit = UnitParams {
            nbp: identity_params(layout),
            link: StageLink::ones(config.iters_per_stage),
            taps,
        };
        Ok(Self {
            config,
            block_len,
            channel_memory: memory,
            units: alloc::vec![unit; config.units()],
        })
    }

    /// All weights one, taps iid complex with standard-normal real and imaginary parts.
    pub fn random_taps<R: Rng + ?Sized>(config: GapConfig, block_len: usize, channel_memory: usize, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let layout = NbpLayout::new(config.iters_per_stage, block_len, config.band(channel_memory), config.tying)?;
        let units = (0..config.units())
            .map(|_| UnitParams {
                nbp: identity_params(layout),
                link: StageLink::ones(config.iters_per_stage),
                taps: (0..config.taps_per_unit())
                    .map(|_| Complex64::new(rng.sample(StandardNormal), rng.sample(StandardNormal)))
                    .collect(),
            })
            .collect();
        Ok(Self {
            config,
            block_len,
            channel_memory,
            units,
        })
    }

    pub fn unit(&self, stage: usize, branch: usize) -> &UnitParams {
        &self.units[stage * self.config.branches + branch]
    }

    pub fn nbp_layout(&self) -> NbpLayout {
        self.units[0].nbp.layout
    }

    /// Real values per unit in the flat vector.
    pub fn unit_len(&self) -> usize {
        self.nbp_layout().len() + self.config.iters_per_stage + 2 * self.config.taps_per_unit()
    }

    /// Total real parameter count `S·B·(|NBP| + N′ + 2(L_p + 1))`.
    pub fn len(&self) -> usize {
        self.config.units() * self.unit_len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Flat vector: per unit the NBP block, then `w_p`, then taps as (re, im) pairs.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.len());
        for u in &self.units {
            out.extend_from_slice(&u.nbp.values);
            out.extend_from_slice(&u.link.w_p);
            for t in &u.taps {
                out.push(t.re);
                out.push(t.im);
            }
        }
        out
    }

    /// Inverse of [`flatten`](Self::flatten).
    pub fn set_flat(&mut self, theta: &[f64]) -> Result<()> {
        if theta.len() != self.len() {
            return Err(Error::ShapeMismatch(alloc::format!(
                "expected {} parameters, got {}",
                self.len(),
                theta.len()
            )));
        }
        let nbp_len = self.nbp_layout().len();
        let mut pos = 0;
        for u in &mut self.units {
            u.nbp.values.copy_from_slice(&theta[pos..pos + nbp_len]);
            pos += nbp_len;
            let n = u.link.w_p.len();
            u.link.w_p.copy_from_slice(&theta[pos..pos + n]);
            pos += n;
            for t in u.taps.iter_mut() {
                *t = Complex64::new(theta[pos], theta[pos + 1]);
                pos += 2;
            }
        }
        Ok(())
    }

    /// Re-targets the parameters at a different block length (tied weights only).
    pub fn with_block_len(&self, block_len: usize) -> Result<Self> {
        if self.config.tying != WeightTying::Tied && block_len != self.block_len {
            return Err(Error::ShapeMismatch(alloc::format!(
                "per-symbol weights trained for K = {} cannot run at K = {}",
                self.block_len,
                block_len
            )));
        }
        let mut out = self.clone();
        out.block_len = block_len;
        for u in &mut out.units {
            u.nbp.layout.block_len = block_len;
        }
        Ok(out)
    }

    pub(crate) fn preprocessor(&self, unit: usize) -> Preprocessor {
        preprocessor_for(self.config.preprocessor, &self.units[unit].taps)
    }

    /// Observation model of unit `unit` on the block.
    pub fn unit_observation(&self, unit: usize, ctx: &BlockContext) -> Result<ObservationModel> {
        self.check_block(ctx)?;
        let pre = self.preprocessor(unit);
        if let Preprocessor::Generic(p) | Preprocessor::Structured(p) = &pre {
            if p.iter().all(|t| *t == Complex64::new(0.0, 0.0)) {
                return Err(Error::DegeneratePreprocessor);
            }
        }
        Ok(linear_observation(&pre, ctx, self.config.band_policy))
    }

    pub(crate) fn check_block(&self, ctx: &BlockContext) -> Result<()> {
        if ctx.memory() != self.channel_memory {
            return Err(Error::ShapeMismatch(alloc::format!(
                "parameters expect channel memory {}, block has {}",
                self.channel_memory,
                ctx.memory()
            )));
        }
        if self.config.tying == WeightTying::PerSymbol && ctx.block_len != self.block_len {
            return Err(Error::ShapeMismatch(alloc::format!(
                "parameters expect K = {}, block has K = {}",
                self.block_len,
                ctx.block_len
            )));
        }
        Ok(())
    }
}

pub(crate) fn preprocessor_for(kind: PreprocessorKind, taps: &[Complex64]) -> Preprocessor {
    match kind {
        PreprocessorKind::Matched => Preprocessor::Matched,
        PreprocessorKind::Generic => Preprocessor::Generic(taps.to_vec()),
        PreprocessorKind::Structured => Preprocessor::Structured(taps.to_vec()),
    }
}

/// Taps under which a unit's preprocessor equals the matched filter.
pub fn identity_taps(config: &GapConfig, channel_taps: &[Complex64]) -> Result<Vec<Complex64>> {
    let memory = channel_taps.len() - 1;
    let zero = Complex64::new(0.0, 0.0);
    match config.preprocessor {
        PreprocessorKind::Matched => Ok(Vec::new()),
        PreprocessorKind::Generic => {
            if config.preproc_len < memory {
                return Err(Error::InvalidArgument(alloc::format!(
                    "a preprocessor of memory {} cannot hold the matched filter of memory {}",
                    config.preproc_len,
                    memory
                )));
            }
            let d = preprocessor_delay(config.preproc_len, memory) as usize;
            let mut p = alloc::vec![zero; config.preproc_len + 1];
            for (i, t) in matched_taps(channel_taps).into_iter().enumerate() {
                p[d + i] = t;
            }
            Ok(p)
        }
        PreprocessorKind::Structured => {
            let mut p = alloc::vec![zero; config.preproc_len + 1];
            p[config.preproc_len / 2] = Complex64::new(1.0, 0.0);
            Ok(p)
        }
    }
}

/// Sums branch log-APPs entrywise and renormalizes each row.
pub fn merge_branches(outputs: &[DetectorOutput]) -> Result<DetectorOutput> {
    let first = outputs.first().ok_or(Error::EmptyReduction)?;
    let (k, m) = (first.block_len(), first.order());
    if outputs.iter().any(|o| o.block_len() != k || o.order() != m) {
        return Err(Error::ShapeMismatch("branch outputs differ in shape".into()));
    }
    let mut acc = first.as_slice().to_vec();
    for o in &outputs[1..] {
        for (a, v) in acc.iter_mut().zip(o.as_slice()) {
            *a += v;
        }
    }
    for row in acc.chunks_mut(m) {
        normalize_in_place(row);
    }
    DetectorOutput::new(k, m, acc)
}

/// The merged output of every stage.
pub fn intermediate_outputs(
    prior: &DetectorOutput,
    params: &GapParams,
    ctx: &BlockContext,
    constellation: &Constellation,
) -> Result<Vec<DetectorOutput>> {
    params.check_block(ctx)?;
    let cfg = &params.config;
    let mut current = prior.clone();
    let mut stages = Vec::with_capacity(cfg.stages);
    for s in 0..cfg.stages {
        let mut branch_out = Vec::with_capacity(cfg.branches);
        for b in 0..cfg.branches {
            let idx = s * cfg.branches + b;
            let unit = &params.units[idx];
            let obs = params.unit_observation(idx, ctx)?;
            branch_out.push(gfg_detect(&current, &unit.nbp, &unit.link, &obs, constellation)?);
        }
        current = merge_branches(&branch_out)?;
        stages.push(current.clone());
    }
    Ok(stages)
}

pub fn gap_detect(
    prior: &DetectorOutput,
    params: &GapParams,
    ctx: &BlockContext,
    constellation: &Constellation,
) -> Result<DetectorOutput> {
    Ok(intermediate_outputs(prior, params, ctx, constellation)?
        .pop()
        .expect("at least one stage"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::channel::{random_block, reference_channel, ChannelModel};
    use crate::gfg::ufg_detect;
    use crate::modem::make_bpsk;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn ctx(name: &str, k: usize, sigma2: f64, seed: u64) -> BlockContext {
        let cons = make_bpsk();
        let ch = ChannelModel::new(reference_channel(name).unwrap(), sigma2).unwrap();
        let blk = random_block(k, &ch, &cons, 0, seed);
        BlockContext::new(&ch, &blk, &cons)
    }

    #[test]
    fn merge_examples() {
        let q = DetectorOutput::new(1, 2, alloc::vec![0.8f64.ln(), 0.2f64.ln()]).unwrap();
        assert!(merge_branches(&[q.clone()]).unwrap().max_abs_diff(&q) < 1e-15);
        let two = merge_branches(&[q.clone(), q.clone()]).unwrap();
        assert!((two.row(0)[0].exp() - 0.64 / 0.68).abs() < 1e-12);
        assert!((two.row(0)[1].exp() - 0.04 / 0.68).abs() < 1e-12);
        assert!((0.64f64 / 0.68 - 0.9412).abs() < 1e-4);
        let u = DetectorOutput::uniform(1, 2);
        assert!(merge_branches(&[q.clone(), u]).unwrap().max_abs_diff(&q) < 1e-15);
        assert!(merge_branches(&[]).is_err());
        assert!(merge_branches(&[q, DetectorOutput::uniform(2, 2)]).is_err());
    }

    #[test]
    fn degenerate_configuration_is_the_plain_detector() {
        let c = ctx("proakis-b", 60, 0.1, 4);
        let cons = make_bpsk();
        let p = GapParams::identity(GapConfig::ufg(10), 60, &c.channel_taps).unwrap();
        let g = gap_detect(&DetectorOutput::uniform(60, 2), &p, &c, &cons).unwrap();
        let u = ufg_detect(&c, &cons, 10).unwrap();
        assert!(g.max_abs_diff(&u) < 1e-12);
    }

    #[test]
    fn identity_taps_reproduce_the_plain_detector() {
        let c = ctx("proakis-b", 40, 0.1, 5);
        let cons = make_bpsk();
        let u = ufg_detect(&c, &cons, 6).unwrap();
        for kind in [PreprocessorKind::Generic, PreprocessorKind::Structured] {
            for lp in [2, 5, 7] {
                for policy in [BandPolicy::Channel, BandPolicy::Full] {
                    let cfg = GapConfig::gfg(6, kind, lp).with_band_policy(policy);
                    let p = GapParams::identity(cfg, 40, &c.channel_taps).unwrap();
                    let g = gap_detect(&DetectorOutput::uniform(40, 2), &p, &c, &cons).unwrap();
                    assert!(g.max_abs_diff(&u) < 1e-9, "{kind:?} {lp} {policy:?}");
                }
            }
        }
    }

    #[test]
    fn muted_prior_decouples_stages() {
        let c = ctx("proakis-b", 30, 0.2, 6);
        let cons = make_bpsk();
        let cfg = GapConfig::gap(2, 1, 3, PreprocessorKind::Matched, 0);
        let mut p = GapParams::identity(cfg, 30, &c.channel_taps).unwrap();
        p.units[1].link.w_p = alloc::vec![0.0; 3];
        let a = intermediate_outputs(&DetectorOutput::uniform(30, 2), &p, &c, &cons).unwrap();
        let mut biased = DetectorOutput::uniform(30, 2).into_inner();
        for row in biased.chunks_mut(2) {
            row[0] = 0.9f64.ln();
            row[1] = 0.1f64.ln();
        }
        let prior = DetectorOutput::new(30, 2, biased).unwrap();
        let b = intermediate_outputs(&prior, &p, &c, &cons).unwrap();
        assert!(a[0].max_abs_diff(&b[0]) > 1e-3);
        assert!(a[1].max_abs_diff(&b[1]) < 1e-12);
    }

    #[test]
    fn cardinality_and_flat_round_trip() {
        let cfg = GapConfig::gap(5, 2, 4, PreprocessorKind::Generic, 9);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = GapParams::random_taps(cfg, 64, 4, &mut rng).unwrap();
        let nbp = 4 * 64 * (5 * 4 + 3);
        assert_eq!(p.len(), 10 * (nbp + 4 + 2 * 10));
        let flat = p.flatten();
        let mut q = GapParams::random_taps(cfg, 64, 4, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        assert_ne!(p, q);
        q.set_flat(&flat).unwrap();
        assert_eq!(p, q);
        assert!(q.set_flat(&flat[1..]).is_err());
    }

    #[test]
    fn tied_weights_run_at_any_block_length() {
        let cons = make_bpsk();
        let cfg = GapConfig::gfg(3, PreprocessorKind::Generic, 3).with_tying(WeightTying::Tied);
        let c = ctx("proakis-b", 64, 0.1, 1);
        let p = GapParams::identity(cfg, 64, &c.channel_taps).unwrap();
        let big = ctx("proakis-b", 200, 0.1, 2);
        let out = gap_detect(&DetectorOutput::uniform(200, 2), &p.with_block_len(200).unwrap(), &big, &cons).unwrap();
        assert_eq!(out.block_len(), 200);
        let per = GapParams::identity(GapConfig::gfg(3, PreprocessorKind::Generic, 3), 64, &c.channel_taps).unwrap();
        assert!(per.with_block_len(200).is_err());
        assert!(gap_detect(&DetectorOutput::uniform(200, 2), &per, &big, &cons).is_err());
    }

    #[test]
    fn invalid_configs() {
        assert!(GapConfig::gap(0, 1, 1, PreprocessorKind::Matched, 0).validate().is_err());
        assert!(GapConfig::gap(1, 0, 1, PreprocessorKind::Matched, 0).validate().is_err());
        let taps = reference_channel("proakis-c").unwrap();
        assert!(GapParams::identity(GapConfig::gfg(2, PreprocessorKind::Generic, 2), 8, &taps).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]

        #[test]
        fn merge_is_normalized_and_order_free(rows in proptest::collection::vec(proptest::collection::vec(-8.0..0.0f64, 4), 3)) {
            let outs: Vec<DetectorOutput> = rows
                .iter()
                .map(|r| {
                    let mut v = r.clone();
                    normalize_in_place(&mut v);
                    DetectorOutput::new(1, 4, v).unwrap()
                })
                .collect();
            let a = merge_branches(&outs).unwrap();
            let rev: Vec<DetectorOutput> = outs.iter().rev().cloned().collect();
            let b = merge_branches(&rev).unwrap();
            prop_assert!(a.is_normalized(1e-9));
            prop_assert!(a.max_abs_diff(&b) < 1e-12);
        }

        #[test]
        fn any_configuration_yields_normalized_rows(seed in 0u64..500, s in 1usize..3, b in 1usize..3, n in 1usize..3) {
            let cons = make_bpsk();
            let c = ctx("proakis-b", 16, 0.3, seed);
            let cfg = GapConfig::gap(s, b, n, PreprocessorKind::Generic, 3);
            let p = GapParams::random_taps(cfg, 16, 2, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
            let outs = intermediate_outputs(&DetectorOutput::uniform(16, 2), &p, &c, &cons).unwrap();
            prop_assert_eq!(outs.len(), s);
            let last = gap_detect(&DetectorOutput::uniform(16, 2), &p, &c, &cons).unwrap();
            prop_assert_eq!(&outs[s - 1], &last);
            prop_assert!(last.is_normalized(1e-9));
        }
    }
}
