//! End-to-end training of detector parameters with Adam on the BMI objective.

use alloc::vec::Vec;

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::channel::{noise_sigma, random_block, ChannelModel};
use crate::error::{Error, Result};
use crate::gap::{GapConfig, GapParams};
use crate::math;
use crate::modem::Constellation;
use crate::observation::BlockContext;
use crate::tape::block_penalties_and_gradient;

/// Training objective.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum LossKind {
    /// Negative BMI of the final stage.
    #[default]
    Bmi,
    /// Negative BMI averaged over all stages.
    Multiloss,
}

/// Eb/N0 of the training blocks, in dB.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum EbnoSampling {
    Fixed(f64),
    /// Drawn independently per block from `U[lo, hi]`.
    Uniform { lo: f64, hi: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// Which parameter groups receive updates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Trainable {
    /// `w_v`, `w_f`.
    pub edge_weights: bool,
    /// `κ`, `λ`.
    pub factor_weights: bool,
    /// `w_p`.
    pub prior_weights: bool,
    /// Preprocessor taps.
    pub taps: bool,
}

impl Trainable {
    pub const ALL: Self = Self {
        edge_weights: true,
        factor_weights: true,
        prior_weights: true,
        taps: true,
    };

    /// Only the preprocessor taps; the NBP block stays at all ones.
    pub const TAPS_ONLY: Self = Self {
        edge_weights: false,
        factor_weights: false,
        prior_weights: false,
        taps: true,
    };
}

impl Default for Trainable {
    fn default() -> Self {
        Self::ALL
    }
}

/// Starting point of the preprocessor taps.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum TapInit {
    /// iid standard-normal real and imaginary parts.
    #[default]
    Random,
    /// The taps that reproduce the plain detector ([`GapParams::identity`]).
    Identity,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub detector: GapConfig,
    pub channel_taps: Vec<Complex64>,
    pub constellation: Constellation,
    pub block_len: usize,
    pub batch_blocks: usize,
    pub steps: usize,
    pub ebno: EbnoSampling,
    pub loss: LossKind,
    pub adam: AdamConfig,
    pub trainable: Trainable,
    pub seed: u64,
    /// Constellation index sent at the block boundaries.
    pub boundary_symbol: usize,
    pub tap_init: TapInit,
    /// When set, the step size follows a cosine from `adam.learning_rate`
    /// down to this value over `steps`; otherwise it stays constant.
    pub final_learning_rate: Option<f64>,
}

impl TrainConfig {
    /// Defaults: K = 64, D = 50, 2000 steps, 10 dB, BMI loss, standard Adam.
    pub fn new(detector: GapConfig, channel_taps: Vec<Complex64>, constellation: Constellation) -> Self {
        Self {
            detector,
            channel_taps,
            constellation,
            block_len: 64,
            batch_blocks: 50,
            steps: 2000,
            ebno: EbnoSampling::Fixed(10.0),
            loss: LossKind::Bmi,
            adam: AdamConfig::default(),
            trainable: Trainable::ALL,
            seed: 0,
            boundary_symbol: 0,
            tap_init: TapInit::Random,
            final_learning_rate: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.detector.validate()?;
        if self.block_len == 0 || self.batch_blocks == 0 {
            return Err(Error::InvalidArgument("block length and batch size must be positive".into()));
        }
        if let EbnoSampling::Uniform { lo, hi } = self.ebno {
            if !(lo <= hi) {
                return Err(Error::InvalidArgument("Eb/N0 range must satisfy lo <= hi".into()));
            }
        }
        let a = &self.adam;
        if !(a.learning_rate >= 0.0 && a.epsilon > 0.0 && (0.0..1.0).contains(&a.beta1) && (0.0..1.0).contains(&a.beta2)) {
            return Err(Error::InvalidArgument("invalid Adam constants".into()));
        }
        if self.final_learning_rate.is_some_and(|f| !(f >= 0.0 && f.is_finite())) {
            return Err(Error::InvalidArgument("final learning rate must be finite and non-negative".into()));
        }
        ChannelModel::new(self.channel_taps.clone(), 1.0)?;
        Ok(())
    }
}

/// Adam moment estimates, one entry per flat parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub first: Vec<f64>,
    pub second: Vec<f64>,
    pub step: u64,
}

impl OptimizerState {
    pub fn new(len: usize) -> Self {
        Self {
            first: alloc::vec![0.0; len],
            second: alloc::vec![0.0; len],
            step: 0,
        }
    }
}

/// One bias-corrected Adam update of `theta` in place.
pub fn adam_step(theta: &mut [f64], grad: &[f64], state: &mut OptimizerState, cfg: &AdamConfig) -> Result<()> {
    if theta.len() != grad.len() || state.first.len() != theta.len() || state.second.len() != theta.len() {
        return Err(Error::ShapeMismatch("parameter, gradient and optimizer state lengths differ".into()));
    }
    state.step += 1;
    let t = state.step as f64;
    let c1 = 1.0 - math::pow(cfg.beta1, t);
    let c2 = 1.0 - math::pow(cfg.beta2, t);
    for i in 0..theta.len() {
        let g = grad[i];
        state.first[i] = cfg.beta1 * state.first[i] + (1.0 - cfg.beta1) * g;
        state.second[i] = cfg.beta2 * state.second[i] + (1.0 - cfg.beta2) * g * g;
        let m_hat = state.first[i] / c1;
        let v_hat = state.second[i] / c2;
        theta[i] -= cfg.learning_rate * m_hat / (math::sqrt(v_hat) + cfg.epsilon);
    }
    Ok(())
}

/// Counter-based seed derivation (splitmix64 finalizer over a mixed counter).
pub fn derive_seed(master: u64, a: u64, b: u64) -> u64 {
    let mut z = master
        ^ a.wrapping_mul(0x9E37_79B9_7F4A_7C15)
        ^ b.wrapping_mul(0xC2B2_AE3D_27D4_EB4F).rotate_left(31);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// A simulated block with its transmitted symbols.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingBlock {
    pub ctx: BlockContext,
    pub truth: Vec<usize>,
    pub seed: u64,
    pub ebno_db: f64,
}

/// Simulates one block at the given Eb/N0.
pub fn simulate_block(
    taps: &[Complex64],
    constellation: &Constellation,
    block_len: usize,
    ebno_db: f64,
    boundary_symbol: usize,
    seed: u64,
) -> Result<TrainingBlock> {
    let sigma2 = noise_sigma(ebno_db, taps, constellation.bits_per_symbol());
    let ch = ChannelModel::new(taps.to_vec(), sigma2)?;
    let blk = random_block(block_len, &ch, constellation, boundary_symbol, seed);
    Ok(TrainingBlock {
        ctx: BlockContext::new(&ch, &blk, constellation),
        truth: blk.info_symbols,
        seed,
        ebno_db,
    })
}

fn draw_ebno(spec: EbnoSampling, seed: u64) -> f64 {
    match spec {
        EbnoSampling::Fixed(v) => v,
        EbnoSampling::Uniform { lo, hi } => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(2);
            if hi > lo {
                lo + (hi - lo) * rng.random::<f64>()
            } else {
                lo
            }
        }
    }
}

/// Fresh blocks for training step `step`; stream `0` is reserved for training,
/// other values give independent hold-out sets.
pub fn sample_batch(config: &TrainConfig, stream: u64, step: u64) -> Result<Vec<TrainingBlock>> {
    (0..config.batch_blocks as u64)
        .map(|d| {
            let seed = derive_seed(derive_seed(config.seed, stream, step), d, 0x5EED);
            simulate_block(
                &config.channel_taps,
                &config.constellation,
                config.block_len,
                draw_ebno(config.ebno, seed),
                config.boundary_symbol,
                seed,
            )
        })
        .collect()
}

/// All weights one; taps drawn or set according to `config.tap_init`.
pub fn init_params(config: &TrainConfig) -> Result<GapParams> {
    if config.tap_init == TapInit::Identity {
        return GapParams::identity(config.detector, config.block_len, &config.channel_taps);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, 0x1417, 0));
    GapParams::random_taps(config.detector, config.block_len, config.channel_taps.len() - 1, &mut rng)
}

/// Per-stage coefficients of the penalty sums in the loss.
pub fn stage_weights(loss: LossKind, stages: usize, batch: usize, block_len: usize) -> Vec<f64> {
    let norm = (batch * block_len) as f64;
    match loss {
        LossKind::Bmi => {
            let mut w = alloc::vec![0.0; stages];
            w[stages - 1] = 1.0 / norm;
            w
        }
        LossKind::Multiloss => alloc::vec![1.0 / (norm * stages as f64); stages],
    }
}

/// Per-block penalties and gradients; implementations may run blocks in parallel
/// but must return results in batch order.
pub trait BatchEvaluator {
    fn evaluate(
        &self,
        params: &GapParams,
        batch: &[TrainingBlock],
        constellation: &Constellation,
        weights: &[f64],
    ) -> Result<Vec<(Vec<f64>, Vec<f64>)>>;
}

/// Evaluates blocks one after another.
#[derive(Debug, Clone, Copy, Default)]
pub struct Sequential;

impl BatchEvaluator for Sequential {
    fn evaluate(
        &self,
        params: &GapParams,
        batch: &[TrainingBlock],
        constellation: &Constellation,
        weights: &[f64],
    ) -> Result<Vec<(Vec<f64>, Vec<f64>)>> {
        batch
            .iter()
            .map(|b| block_penalties_and_gradient(params, &b.ctx, &b.truth, constellation, weights))
            .collect()
    }
}

/// `−BMI` (or `−multiloss`) over the batch at α = 1 and its exact gradient.
pub fn loss_and_gradient(
    params: &GapParams,
    batch: &[TrainingBlock],
    constellation: &Constellation,
    loss: LossKind,
) -> Result<(f64, Vec<f64>)> {
    loss_and_gradient_with(&Sequential, params, batch, constellation, loss)
}

pub fn loss_and_gradient_with<E: BatchEvaluator + ?Sized>(
    evaluator: &E,
    params: &GapParams,
    batch: &[TrainingBlock],
    constellation: &Constellation,
    loss: LossKind,
) -> Result<(f64, Vec<f64>)> {
    if batch.is_empty() {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    let k = batch[0].truth.len();
    if batch.iter().any(|b| b.truth.len() != k) {
        return Err(Error::ShapeMismatch("all blocks of a batch must have the same length".into()));
    }
    let stages = params.config.stages;
    let bits = constellation.bits_per_symbol();
    let weights = stage_weights(loss, stages, batch.len(), k);
    let results = evaluator.evaluate(params, batch, constellation, &weights)?;
    let mut grad = alloc::vec![0.0; params.len()];
    let mut value = 0.0;
    for (blk, (pen, g)) in batch.iter().zip(&results) {
        if pen.iter().any(|p| !p.is_finite()) || g.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteLoss { seed: blk.seed });
        }
        value += pen.iter().zip(&weights).map(|(p, w)| p * w).sum::<f64>();
        for (a, b) in grad.iter_mut().zip(g) {
            *a += b;
        }
    }
    Ok((value - bits as f64, grad))
}

/// Zeroes gradient entries of frozen parameter groups.
pub fn mask_gradient(params: &GapParams, trainable: Trainable, grad: &mut [f64]) {
    let lay = params.nbp_layout();
    let unit_len = params.unit_len();
    let positions = lay.len() / (lay.iterations * lay.per_position());
    for u in 0..params.config.units() {
        let base = u * unit_len;
        for n in 0..lay.iterations {
            for k in 0..positions {
                for e in 0..2 * lay.band {
                    if !trainable.edge_weights {
                        grad[base + lay.w_v(n, k, e)] = 0.0;
                        grad[base + lay.w_f(n, k, e)] = 0.0;
                    }
                }
                if !trainable.factor_weights {
                    for i in 0..3 {
                        grad[base + lay.kappa(n, k, i)] = 0.0;
                    }
                    for d in 1..=lay.band {
                        grad[base + lay.lambda(n, k, d)] = 0.0;
                    }
                }
            }
        }
        if !trainable.prior_weights {
            for v in &mut grad[base + lay.len()..base + lay.len() + params.config.iters_per_stage] {
                *v = 0.0;
            }
        }
        if !trainable.taps {
            let t0 = base + lay.len() + params.config.iters_per_stage;
            for v in &mut grad[t0..base + unit_len] {
                *v = 0.0;
            }
        }
    }
}

/// Loss of one training step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TraceEntry {
    pub step: usize,
    pub loss: f64,
}

/// Step size used at `step`.
pub fn learning_rate_at(config: &TrainConfig, step: usize) -> f64 {
    let start = config.adam.learning_rate;
    match config.final_learning_rate {
        Some(end) if config.steps > 1 => {
            let t = step.min(config.steps - 1) as f64 / (config.steps - 1) as f64;
            end + (start - end) * 0.5 * (1.0 + math::cos(core::f64::consts::PI * t))
        }
        _ => start,
    }
}

/// Runs `config.steps` Adam steps from `init`, evaluating batches with `evaluator`.
/// `on_step` sees every trace entry as it is produced.
pub fn train_from<E: BatchEvaluator + ?Sized>(
    config: &TrainConfig,
    init: GapParams,
    evaluator: &E,
    mut on_step: impl FnMut(&TraceEntry, &GapParams),
) -> Result<(GapParams, Vec<TraceEntry>)> {
    config.validate()?;
    let mut params = init;
    let mut theta = params.flatten();
    let mut state = OptimizerState::new(theta.len());
    let mut trace = Vec::with_capacity(config.steps);
    let mut adam = config.adam;
    for step in 0..config.steps {
        adam.learning_rate = learning_rate_at(config, step);
        let batch = sample_batch(config, 0, step as u64)?;
        let (loss, mut grad) = loss_and_gradient_with(evaluator, &params, &batch, &config.constellation, config.loss)?;
        mask_gradient(&params, config.trainable, &mut grad);
        adam_step(&mut theta, &grad, &mut state, &adam)?;
        params.set_flat(&theta)?;
        let entry = TraceEntry { step, loss };
        on_step(&entry, &params);
        trace.push(entry);
    }
    Ok((params, trace))
}

/// Initializes with [`init_params`] and trains sequentially.
pub fn train(config: &TrainConfig) -> Result<(GapParams, Vec<TraceEntry>)> {
    config.validate()?;
    train_from(config, init_params(config)?, &Sequential, |_, _| {})
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::channel::reference_channel;
    use crate::gap::PreprocessorKind;
    use crate::gfg::{ufg_detect, WeightTying};
    use crate::metrics::SignedLlrs;
    use crate::modem::make_bpsk;

    fn tiny() -> TrainConfig {
        let mut c = TrainConfig::new(
            GapConfig::gap(2, 2, 2, PreprocessorKind::Generic, 2),
            reference_channel("proakis-b").unwrap(),
            make_bpsk(),
        );
        c.block_len = 8;
        c.batch_blocks = 4;
        c.steps = 3;
        c
    }

    #[test]
    fn cosine_schedule_endpoints() {
        let mut c = tiny();
        c.steps = 11;
        c.adam.learning_rate = 0.03;
        assert_eq!(learning_rate_at(&c, 5), 0.03);
        c.final_learning_rate = Some(0.001);
        assert!((learning_rate_at(&c, 0) - 0.03).abs() < 1e-15);
        assert!((learning_rate_at(&c, 5) - 0.0155).abs() < 1e-12);
        assert!((learning_rate_at(&c, 10) - 0.001).abs() < 1e-15);
        assert!((1..11).all(|t| learning_rate_at(&c, t) < learning_rate_at(&c, t - 1)));
        c.final_learning_rate = Some(f64::NAN);
        assert!(c.validate().is_err());
    }

    #[test]
    fn init_examples() {
        let c = tiny();
        let a = init_params(&c).unwrap();
        let mut c2 = c.clone();
        c2.seed = 9;
        let b = init_params(&c2).unwrap();
        for (ua, ub) in a.units.iter().zip(&b.units) {
            assert!(ua.nbp.values.iter().all(|&v| v == 1.0));
            assert_eq!(ua.nbp, ub.nbp);
            assert!(ua.link.w_p.iter().all(|&v| v == 1.0));
            assert_ne!(ua.taps, ub.taps);
        }
        assert_eq!(init_params(&c).unwrap(), a);
        let mut c3 = c.clone();
        c3.tap_init = TapInit::Identity;
        let id = GapParams::identity(c.detector, c.block_len, &c.channel_taps).unwrap();
        assert_eq!(init_params(&c3).unwrap(), id);
    }

    #[test]
    fn tap_variance() {
        let mut c = tiny();
        c.detector = GapConfig::gap(100, 10, 1, PreprocessorKind::Generic, 9);
        c.block_len = 1;
        let p = init_params(&c).unwrap();
        let vals: Vec<f64> = p.units.iter().flat_map(|u| u.taps.iter().flat_map(|t| [t.re, t.im])).collect();
        assert_eq!(vals.len(), 20_000);
        let mean = vals.iter().sum::<f64>() / vals.len() as f64;
        let var = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / vals.len() as f64;
        assert!((var - 1.0).abs() < 0.05, "{var}");
    }

    #[test]
    fn adam_examples() {
        let cfg = AdamConfig::default();
        let mut th = [0.5, -1.0];
        let mut st = OptimizerState::new(2);
        adam_step(&mut th, &[0.0, 0.0], &mut st, &cfg).unwrap();
        assert_eq!(th, [0.5, -1.0]);
        let mut th = [0.0];
        let mut st = OptimizerState::new(1);
        let g = 0.37;
        adam_step(&mut th, &[g], &mut st, &cfg).unwrap();
        let want = -cfg.learning_rate * g / (g.abs() + cfg.epsilon);
        assert!((th[0] - want).abs() < 1e-15);
        assert!((th[0] + 1e-3).abs() < 1e-10);
        // second identical gradient: bias-corrected moments equal g and g², same step size
        let before = th[0];
        adam_step(&mut th, &[g], &mut st, &cfg).unwrap();
        let step2 = before - th[0];
        assert!((step2 - 1e-3).abs() < 1e-10);
        // relative to SGD with the same rate the step is g-independent
        assert!(step2 / (cfg.learning_rate * g) < 1.0 / g);
        assert!(adam_step(&mut th, &[g, g], &mut st, &cfg).is_err());
    }

    #[test]
    fn loss_at_identity_is_negative_ufg_bmi() {
        let mut c = tiny();
        c.detector = GapConfig::ufg(5);
        c.block_len = 16;
        let batch = sample_batch(&c, 0, 0).unwrap();
        let p = GapParams::identity(c.detector, 16, &c.channel_taps).unwrap();
        let (loss, _) = loss_and_gradient(&p, &batch, &c.constellation, LossKind::Bmi).unwrap();
        let mut s = SignedLlrs::new(1);
        for b in &batch {
            s.push(&ufg_detect(&b.ctx, &c.constellation, 5).unwrap(), &b.truth, &c.constellation).unwrap();
        }
        assert!((loss + s.bmi(1.0)).abs() < 1e-12);
        let (ml, _) = loss_and_gradient(&p, &batch, &c.constellation, LossKind::Multiloss).unwrap();
        assert!((ml - loss).abs() < 1e-12);
    }

    #[test]
    fn zero_learning_rate_keeps_parameters() {
        let mut c = tiny();
        c.adam.learning_rate = 0.0;
        c.steps = 1;
        let init = init_params(&c).unwrap();
        let (p, trace) = train(&c).unwrap();
        assert_eq!(p, init);
        let batch = sample_batch(&c, 0, 0).unwrap();
        let (l0, _) = loss_and_gradient(&init, &batch, &c.constellation, c.loss).unwrap();
        assert_eq!(trace[0].loss, l0);
    }

    #[test]
    fn training_is_deterministic_and_masks_apply() {
        let c = tiny();
        assert_eq!(train(&c).unwrap(), train(&c).unwrap());
        let mut m = c.clone();
        m.trainable = Trainable::TAPS_ONLY;
        let (p, _) = train(&m).unwrap();
        for u in &p.units {
            assert!(u.nbp.values.iter().all(|&v| v == 1.0));
            assert!(u.link.w_p.iter().all(|&v| v == 1.0));
        }
        assert_ne!(p.units[0].taps, init_params(&m).unwrap().units[0].taps);
    }

    #[test]
    fn short_training_improves_the_batch_loss() {
        let mut improved = Vec::new();
        for seed in 0..5 {
            let mut c = tiny();
            c.detector = GapConfig::gfg(3, PreprocessorKind::Generic, 3).with_tying(WeightTying::Tied);
            c.block_len = 16;
            c.batch_blocks = 8;
            c.steps = 50;
            c.adam.learning_rate = 1e-2;
            c.seed = seed;
            let init = init_params(&c).unwrap();
            let fixed = sample_batch(&c, 7, 0).unwrap();
            let (before, _) = loss_and_gradient(&init, &fixed, &c.constellation, c.loss).unwrap();
            let (p, _) = train(&c).unwrap();
            let (after, _) = loss_and_gradient(&p, &fixed, &c.constellation, c.loss).unwrap();
            improved.push(before - after);
        }
        improved.sort_by(|a, b| a.partial_cmp(b).unwrap());
        assert!(improved[2] > 0.0, "{improved:?}");
    }

    #[test]
    fn invalid_configs() {
        let mut c = tiny();
        c.ebno = EbnoSampling::Uniform { lo: 5.0, hi: 1.0 };
        assert!(c.validate().is_err());
        let mut c = tiny();
        c.batch_blocks = 0;
        assert!(c.validate().is_err());
        assert!(loss_and_gradient(&init_params(&tiny()).unwrap(), &[], &make_bpsk(), LossKind::Bmi).is_err());
    }

    #[test]
    fn seeds_are_distinct() {
        let mut seen = alloc::collections::BTreeSet::new();
        for a in 0..50 {
            for b in 0..50 {
                assert!(seen.insert(derive_seed(1, a, b)));
            }
        }
    }
}
