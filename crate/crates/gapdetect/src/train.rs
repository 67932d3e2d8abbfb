//! Training runs: parallel batch evaluation, hold-out estimate, loss trace.

use std::path::Path;

use gapdetect_core::gap::{gap_detect, GapParams};
use gapdetect_core::gfg::DetectorOutput;
use gapdetect_core::metrics::SignedLlrs;
use gapdetect_core::modem::Constellation;
use gapdetect_core::tape::block_penalties_and_gradient;
use gapdetect_core::training::{init_params, sample_batch, train_from, BatchEvaluator, TraceEntry, TrainConfig, TrainingBlock};
use rayon::prelude::*;

use crate::config::ExperimentConfig;
use crate::error::{HarnessError, Result};

/// Hold-out blocks are drawn from this stream; training uses stream 0.
pub const HOLDOUT_STREAM: u64 = 1;

/// Evaluates the blocks of a batch on the rayon pool, returning them in batch
/// order so that the reduction is independent of the thread count.
#[derive(Debug, Clone, Copy, Default)]
pub struct RayonEvaluator;

impl BatchEvaluator for RayonEvaluator {
    fn evaluate(
        &self,
        params: &GapParams,
        batch: &[TrainingBlock],
        constellation: &Constellation,
        weights: &[f64],
    ) -> gapdetect_core::Result<Vec<(Vec<f64>, Vec<f64>)>> {
        batch
            .par_iter()
            .map(|b| block_penalties_and_gradient(params, &b.ctx, &b.truth, constellation, weights))
            .collect()
    }
}

/// BMI of the final stage at α = 1 on `blocks` fresh blocks of the training distribution.
pub fn holdout_bmi(params: &GapParams, config: &TrainConfig, blocks: usize) -> Result<f64> {
    let mut cfg = config.clone();
    cfg.batch_blocks = blocks;
    let batch = sample_batch(&cfg, HOLDOUT_STREAM, 0)?;
    let cons = &config.constellation;
    let parts: Vec<gapdetect_core::Result<SignedLlrs>> = batch
        .par_iter()
        .map(|b| {
            let out = gap_detect(&DetectorOutput::uniform(b.truth.len(), cons.order()), params, &b.ctx, cons)?;
            let mut s = SignedLlrs::new(cons.bits_per_symbol());
            s.push(&out, &b.truth, cons)?;
            Ok(s)
        })
        .collect();
    let mut all = SignedLlrs::new(cons.bits_per_symbol());
    for p in parts {
        all.extend(&p?);
    }
    Ok(all.bmi(1.0))
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: GapParams,
    pub trace: Vec<TraceEntry>,
    pub holdout_bmi: f64,
}

/// Trains the detector of `config` from its `[train]` section (or the defaults).
/// The trace collected so far is returned alongside an error.
pub fn run_train(
    config: &ExperimentConfig,
    mut on_step: impl FnMut(&TraceEntry),
) -> std::result::Result<TrainOutcome, (HarnessError, Vec<TraceEntry>)> {
    let tcfg = config.train_config().map_err(|e| (e, Vec::new()))?;
    let holdout = config.train.as_ref().map_or(100, |t| t.holdout_blocks);
    let mut seen = Vec::new();
    let init = init_params(&tcfg).map_err(|e| (e.into(), Vec::new()))?;
    let result = train_from(&tcfg, init, &RayonEvaluator, |e, _| {
        seen.push(*e);
        on_step(e);
    });
    let (params, trace) = result.map_err(|e| (e.into(), seen.clone()))?;
    let bmi = holdout_bmi(&params, &tcfg, holdout).map_err(|e| (e, trace.clone()))?;
    Ok(TrainOutcome {
        params,
        trace,
        holdout_bmi: bmi,
    })
}

pub fn save_trace(trace: &[TraceEntry], path: &Path) -> Result<()> {
    let f = std::fs::File::create(path).map_err(|e| HarnessError::io(path, e))?;
    let mut w = csv::Writer::from_writer(std::io::BufWriter::new(f));
    w.write_record(["step", "loss"])?;
    for e in trace {
        w.write_record([e.step.to_string(), e.loss.to_string()])?;
    }
    w.flush().map_err(|e| HarnessError::io(path, e))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{DetectorSpec, PreprocessorName, TrainSpec};
    use gapdetect_core::training::{loss_and_gradient, loss_and_gradient_with, LossKind, Sequential};

    fn tiny() -> ExperimentConfig {
        ExperimentConfig {
            detector: DetectorSpec::Gap {
                stages: 2,
                branches: 2,
                iters_per_stage: 2,
                preprocessor: PreprocessorName::Generic,
                preproc_len: 2,
                band_policy: Default::default(),
                tying: Default::default(),
            },
            seed: 11,
            train: Some(TrainSpec {
                block_len: 12,
                batch_blocks: 6,
                steps: 5,
                holdout_blocks: 8,
                learning_rate: 0.01,
                ..TrainSpec::default()
            }),
            ..ExperimentConfig::default()
        }
    }

    #[test]
    fn parallel_reduction_is_bit_identical_to_sequential() {
        let cfg = tiny().train_config().unwrap();
        let p = init_params(&cfg).unwrap();
        let batch = sample_batch(&cfg, 0, 3).unwrap();
        let a = loss_and_gradient(&p, &batch, &cfg.constellation, LossKind::Multiloss).unwrap();
        let b = loss_and_gradient_with(&RayonEvaluator, &p, &batch, &cfg.constellation, LossKind::Multiloss).unwrap();
        assert_eq!(a.0.to_bits(), b.0.to_bits());
        assert!(a.1.iter().zip(&b.1).all(|(x, y)| x.to_bits() == y.to_bits()));
        let _ = Sequential;
    }

    #[test]
    fn training_is_deterministic_and_traced() {
        let cfg = tiny();
        let mut steps = 0;
        let a = run_train(&cfg, |_| steps += 1).unwrap();
        let b = run_train(&cfg, |_| {}).unwrap();
        assert_eq!(steps, 5);
        assert_eq!(a.trace.len(), 5);
        assert_eq!(a.params, b.params);
        assert_eq!(a.holdout_bmi.to_bits(), b.holdout_bmi.to_bits());
    }
}
