//! `gapdetect` command line.

use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::checkpoint;
use crate::config::ExperimentConfig;
use crate::error::{HarnessError, Result};
use crate::gradcheck::{gradient_check, instance_for, tiny_instance};
use crate::sweep::{build_detector, run_sweep, save_csv, write_csv, ResultRow};
use crate::train::{run_train, save_trace};

#[derive(Debug, Parser)]
#[command(name = "gapdetect", version, about = "Factor-graph symbol detection experiments")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Simulate every Eb/N0 point of the configuration and write a results CSV.
    Sweep(Common),
    /// Train the configured detector and write a checkpoint (and a loss trace to --out).
    Train(Common),
    /// Sweep a trained detector loaded from --checkpoint.
    Eval(Common),
    /// Compare the training gradient to central finite differences.
    Gradcheck {
        #[command(flatten)]
        common: Common,
        /// Coordinates to check.
        #[arg(long, default_value_t = 200)]
        coords: usize,
        /// Finite-difference step.
        #[arg(long, default_value_t = 1e-5)]
        step: f64,
        /// Largest accepted relative error.
        #[arg(long, default_value_t = 1e-4)]
        tolerance: f64,
    },
}

#[derive(Debug, Args)]
pub struct Common {
    /// TOML experiment configuration; defaults apply when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output CSV (results for sweep/eval, loss trace for train); stdout if omitted.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Parameter checkpoint to read (sweep/eval) or write (train).
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Overrides the configuration seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Worker threads (default: all cores).
    #[arg(long)]
    pub threads: Option<usize>,
}

impl Common {
    fn load(&self) -> Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(p) => ExperimentConfig::load(p)?,
            None => ExperimentConfig::default(),
        };
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Runs the command and returns the process exit code.
pub fn run(cli: Cli) -> i32 {
    let threads = match &cli.command {
        Command::Sweep(c) | Command::Train(c) | Command::Eval(c) => c.threads,
        Command::Gradcheck { common, .. } => common.threads,
    };
    let pool = match rayon::ThreadPoolBuilder::new().num_threads(threads.unwrap_or(0)).build() {
        Ok(p) => p,
        Err(e) => {
            eprintln!("error: thread pool: {e}");
            return 3;
        }
    };
    match pool.install(|| dispatch(cli.command)) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn emit_rows(rows: &[ResultRow], out: Option<&Path>) -> Result<()> {
    match out {
        Some(p) => save_csv(rows, p),
        None => write_csv(rows, std::io::stdout().lock()),
    }
}

fn sweep(common: &Common, require_trainable: bool) -> Result<i32> {
    let cfg = common.load()?;
    if require_trainable && !cfg.detector.is_trainable() {
        return Err(HarnessError::config(format!("eval needs a gfg or gap detector, got `{}`", cfg.detector.name())));
    }
    let detector = build_detector(&cfg, common.checkpoint.as_deref(), &mut |m| eprintln!("{m}"))?;
    let rows = run_sweep(&cfg, &detector, |r| {
        eprintln!(
            "{:>6.2} dB  {}  BER {:.4e}  BMI {:.4}  alpha {:.3}  ({} blocks, {:.1}s)",
            r.ebno_db, r.detector, r.ber, r.bmi, r.alpha, r.blocks, r.wall_time_s
        )
    })?;
    emit_rows(&rows, common.out.as_deref())?;
    Ok(0)
}

fn train(common: &Common) -> Result<i32> {
    let cfg = common.load()?;
    let ckpt = common
        .checkpoint
        .as_deref()
        .ok_or_else(|| HarnessError::config("train needs --checkpoint <path> for the trained parameters"))?;
    let every = (cfg.train.as_ref().map_or(2000, |t| t.steps) / 20).max(1);
    let result = run_train(&cfg, |e| {
        if e.step % every == 0 {
            eprintln!("step {:>6}  loss {:.5}", e.step, e.loss);
        }
    });
    let (outcome, trace) = match result {
        Ok(o) => {
            let t = o.trace.clone();
            (Ok(o), t)
        }
        Err((e, t)) => (Err(e), t),
    };
    match common.out.as_deref() {
        Some(p) => save_trace(&trace, p)?,
        None => {
            let mut out = std::io::stdout().lock();
            let _ = writeln!(out, "step,loss");
            for e in &trace {
                let _ = writeln!(out, "{},{}", e.step, e.loss);
            }
        }
    }
    let outcome = outcome?;
    checkpoint::save(&outcome.params, ckpt)?;
    eprintln!("hold-out BMI {:.4} bit/use; checkpoint written to {}", outcome.holdout_bmi, ckpt.display());
    Ok(0)
}

fn gradcheck(common: &Common, coords: usize, step: f64, tolerance: f64) -> Result<i32> {
    let inst = match &common.config {
        None => tiny_instance(common.seed.unwrap_or(0))?,
        Some(_) => {
            let cfg = common.load()?;
            let mut t = cfg.train_config()?;
            t.batch_blocks = t.batch_blocks.min(4);
            instance_for(&t, t.loss, 0.3)?
        }
    };
    let r = gradient_check(&inst, coords, step, common.seed.unwrap_or(0) ^ 0xC0)?;
    println!(
        "checked {} coordinates: max relative error {:.3e} (index {}), max |grad| {:.3e}",
        r.checked, r.max_rel_error, r.worst_index, r.max_abs_gradient
    );
    Ok(if r.max_rel_error <= tolerance { 0 } else { 3 })
}

fn dispatch(cmd: Command) -> Result<i32> {
    match &cmd {
        Command::Sweep(c) => sweep(c, false),
        Command::Eval(c) => sweep(c, true),
        Command::Train(c) => train(c),
        Command::Gradcheck {
            common,
            coords,
            step,
            tolerance,
        } => gradcheck(common, *coords, *step, *tolerance),
    }
}
