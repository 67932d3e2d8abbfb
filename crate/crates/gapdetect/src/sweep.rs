//! Monte Carlo BER/BMI sweeps over Eb/N0.

use std::path::Path;
use std::time::Instant;

use gapdetect_core::baselines::{bcjr_detect, brute_force_map, lmmse_detect};
use gapdetect_core::channel::{noise_sigma, random_block, ChannelModel};
use gapdetect_core::gap::{gap_detect, GapParams};
use gapdetect_core::gfg::{ufg_detect, DetectorOutput};
use gapdetect_core::metrics::{bit_errors, optimize_alpha, SignedLlrs};
use gapdetect_core::modem::Constellation;
use gapdetect_core::observation::BlockContext;
use gapdetect_core::training::derive_seed;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::config::{AlphaPolicy, DetectorSpec, ExperimentConfig};
use crate::error::{HarnessError, Result};

/// Column order of the results file.
pub const CSV_HEADER: &str = "ebno_db,detector,ber,bmi,alpha,bits_counted,bit_errors,blocks,seed,wall_time_s";

/// Blocks simulated between early-stop checks; fixed so that results do not
/// depend on the thread count.
pub const CHUNK_BLOCKS: usize = 32;

const SWEEP_STREAM: u64 = 0x5357_4545;

/// One Eb/N0 point of a sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub ebno_db: f64,
    pub detector: String,
    pub ber: f64,
    pub bmi: f64,
    pub alpha: f64,
    pub bits_counted: u64,
    pub bit_errors: u64,
    pub blocks: usize,
    pub seed: u64,
    pub wall_time_s: f64,
}

/// A ready-to-run detector.
#[derive(Debug, Clone)]
pub enum Detector {
    Ufg { iterations: usize },
    Graph(GapParams),
    Bcjr,
    BruteForce,
    Lmmse { order: usize },
}

impl Detector {
    pub fn detect(&self, ctx: &BlockContext, constellation: &Constellation) -> gapdetect_core::Result<DetectorOutput> {
        match self {
            Self::Ufg { iterations } => ufg_detect(ctx, constellation, *iterations),
            Self::Graph(p) => gap_detect(&DetectorOutput::uniform(ctx.block_len, constellation.order()), p, ctx, constellation),
            Self::Bcjr => bcjr_detect(ctx, constellation, None),
            Self::BruteForce => brute_force_map(ctx, constellation, None),
            Self::Lmmse { order } => lmmse_detect(ctx, constellation, *order),
        }
    }
}

/// Builds the detector of `config`. Trainable detectors load `checkpoint`
/// (falling back to the configuration's own path); without one they run
/// with identity parameters and `notice` is told so.
pub fn build_detector(config: &ExperimentConfig, checkpoint: Option<&Path>, notice: &mut dyn FnMut(&str)) -> Result<Detector> {
    let taps = config.channel_taps()?;
    Ok(match &config.detector {
        DetectorSpec::Ufg { iterations } => Detector::Ufg { iterations: *iterations },
        DetectorSpec::Bcjr {} => Detector::Bcjr,
        DetectorSpec::Bruteforce {} => Detector::BruteForce,
        DetectorSpec::Lmmse { order } => Detector::Lmmse { order: *order },
        spec => {
            let g = spec.gap_config().expect("factor-graph detector");
            let path = checkpoint.or(config.checkpoint.as_deref());
            let params = match path {
                Some(p) => checkpoint::load(p, &g, config.block_len, taps.len() - 1)?,
                None => {
                    notice(&format!(
                        "notice: no checkpoint for `{}`; using identity parameters (equivalent to the plain detector)",
                        spec.name()
                    ));
                    GapParams::identity(g, config.block_len, &taps)?
                }
            };
            Detector::Graph(params)
        }
    })
}

/// Seed of block `block` at sweep point `point`.
pub fn block_seed(master: u64, point: usize, block: usize) -> u64 {
    derive_seed(derive_seed(master, SWEEP_STREAM, point as u64), block as u64, 0)
}

struct BlockStats {
    errors: u64,
    bits: u64,
    llrs: SignedLlrs,
}

/// Simulates one Eb/N0 point.
pub fn run_point(config: &ExperimentConfig, detector: &Detector, point: usize) -> Result<ResultRow> {
    let start = Instant::now();
    let taps = config.channel_taps()?;
    let cons = config.constellation()?;
    let ebno = config.ebno_db[point];
    let model = ChannelModel::new(taps.clone(), noise_sigma(ebno, &taps, cons.bits_per_symbol()))?;
    let mut errors = 0;
    let mut bits = 0;
    let mut llrs = SignedLlrs::new(cons.bits_per_symbol());
    let mut done = 0;
    while done < config.blocks_per_point {
        let n = CHUNK_BLOCKS.min(config.blocks_per_point - done);
        let chunk: Vec<gapdetect_core::Result<BlockStats>> = (done..done + n)
            .into_par_iter()
            .map(|i| {
                let blk = random_block(config.block_len, &model, &cons, config.boundary_symbol, block_seed(config.seed, point, i));
                let ctx = BlockContext::new(&model, &blk, &cons);
                let out = detector.detect(&ctx, &cons)?;
                let (errors, bits) = bit_errors(&out, &blk.info_symbols, &cons)?;
                let mut llrs = SignedLlrs::new(cons.bits_per_symbol());
                llrs.push(&out, &blk.info_symbols, &cons)?;
                Ok(BlockStats { errors, bits, llrs })
            })
            .collect();
        for s in chunk {
            let s = s?;
            errors += s.errors;
            bits += s.bits;
            llrs.extend(&s.llrs);
        }
        done += n;
        if config.target_errors.is_some_and(|t| errors >= t) {
            break;
        }
    }
    let (alpha, bmi) = match config.alpha {
        AlphaPolicy::Golden => optimize_alpha(&llrs),
        AlphaPolicy::Fixed1 => (1.0, llrs.bmi(1.0)),
    };
    Ok(ResultRow {
        ebno_db: ebno,
        detector: config.detector.name().into(),
        ber: if bits == 0 { 0.0 } else { errors as f64 / bits as f64 },
        bmi,
        alpha,
        bits_counted: bits,
        bit_errors: errors,
        blocks: done,
        seed: config.seed,
        wall_time_s: if config.record_wall_time { start.elapsed().as_secs_f64() } else { 0.0 },
    })
}

/// Runs every Eb/N0 point in order; `on_row` sees each row as it completes.
pub fn run_sweep(config: &ExperimentConfig, detector: &Detector, mut on_row: impl FnMut(&ResultRow)) -> Result<Vec<ResultRow>> {
    config.validate()?;
    let mut rows = Vec::with_capacity(config.ebno_db.len());
    for point in 0..config.ebno_db.len() {
        let row = run_point(config, detector, point)?;
        on_row(&row);
        rows.push(row);
    }
    Ok(rows)
}

pub fn write_csv<W: std::io::Write>(rows: &[ResultRow], out: W) -> Result<()> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(out);
    w.write_record(CSV_HEADER.split(','))?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| HarnessError::io("<csv>", e))?;
    Ok(())
}

pub fn save_csv(rows: &[ResultRow], path: &Path) -> Result<()> {
    let f = std::fs::File::create(path).map_err(|e| HarnessError::io(path, e))?;
    write_csv(rows, std::io::BufWriter::new(f))
}

pub fn read_csv<R: std::io::Read>(input: R) -> Result<Vec<ResultRow>> {
    let mut r = csv::Reader::from_reader(input);
    let header: Vec<String> = r.headers()?.iter().map(String::from).collect();
    if header.join(",") != CSV_HEADER {
        return Err(HarnessError::config(format!("unexpected CSV header `{}`", header.join(","))));
    }
    r.deserialize().map(|row| row.map_err(HarnessError::from)).collect()
}
