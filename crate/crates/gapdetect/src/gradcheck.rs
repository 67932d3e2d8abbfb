//! Central finite-difference check of the training gradient.

use gapdetect_core::channel::reference_channel;
use gapdetect_core::gap::{GapConfig, GapParams, PreprocessorKind};
use gapdetect_core::modem::{make_bpsk, Constellation};
use gapdetect_core::training::{init_params, loss_and_gradient, sample_batch, EbnoSampling, LossKind, TrainConfig, TrainingBlock};
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;

/// Relative errors are taken against `max(|analytic|, |numeric|, ABS_FLOOR)`.
pub const ABS_FLOOR: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_error: f64,
    /// Flat index of the worst coordinate.
    pub worst_index: usize,
    pub max_abs_gradient: f64,
}

/// A randomized small problem: parameters, batch, constellation and loss.
#[derive(Debug, Clone)]
pub struct Instance {
    pub params: GapParams,
    pub batch: Vec<TrainingBlock>,
    pub constellation: Constellation,
    pub loss: LossKind,
}

/// GAP with (S, B, N′) = (2, 2, 2) and generic 3-tap preprocessors on K = 8
/// BPSK blocks of a memory-2 channel; weights jittered around one.
pub fn tiny_instance(seed: u64) -> Result<Instance> {
    let detector = GapConfig::gap(2, 2, 2, PreprocessorKind::Generic, 2);
    let mut cfg = TrainConfig::new(detector, reference_channel("proakis-b")?, make_bpsk());
    cfg.block_len = 8;
    cfg.batch_blocks = 4;
    cfg.ebno = EbnoSampling::Uniform { lo: 0.0, hi: 10.0 };
    cfg.seed = seed;
    instance_for(&cfg, LossKind::Multiloss, 0.3)
}

/// Random instance of an arbitrary training configuration: `init_params`
/// followed by a uniform jitter of `±jitter` on every NBP and stage weight.
pub fn instance_for(config: &TrainConfig, loss: LossKind, jitter: f64) -> Result<Instance> {
    let mut params = init_params(config)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x6A17);
    for u in &mut params.units {
        for v in u.nbp.values.iter_mut().chain(u.link.w_p.iter_mut()) {
            *v += jitter * (2.0 * rng.random::<f64>() - 1.0);
        }
    }
    Ok(Instance {
        params,
        batch: sample_batch(config, 0, 0)?,
        constellation: config.constellation.clone(),
        loss,
    })
}

/// Compares the analytic gradient to central differences with step `step` on
/// `coords` distinct random coordinates (all of them if fewer exist).
pub fn gradient_check(inst: &Instance, coords: usize, step: f64, seed: u64) -> Result<GradCheckReport> {
    let (_, grad) = loss_and_gradient(&inst.params, &inst.batch, &inst.constellation, inst.loss)?;
    let theta = inst.params.flatten();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let picks = sample(&mut rng, theta.len(), coords.min(theta.len()));
    let mut p = inst.params.clone();
    let mut eval = |t: &[f64]| -> Result<f64> {
        p.set_flat(t)?;
        Ok(loss_and_gradient(&p, &inst.batch, &inst.constellation, inst.loss)?.0)
    };
    let mut report = GradCheckReport {
        checked: 0,
        max_rel_error: 0.0,
        worst_index: 0,
        max_abs_gradient: 0.0,
    };
    for i in picks.iter() {
        let mut t = theta.clone();
        t[i] = theta[i] + step;
        let fp = eval(&t)?;
        t[i] = theta[i] - step;
        let fm = eval(&t)?;
        let fd = (fp - fm) / (2.0 * step);
        let err = (fd - grad[i]).abs() / fd.abs().max(grad[i].abs()).max(ABS_FLOOR);
        if err > report.max_rel_error {
            report.max_rel_error = err;
            report.worst_index = i;
        }
        report.max_abs_gradient = report.max_abs_gradient.max(grad[i].abs());
        report.checked += 1;
    }
    Ok(report)
}
