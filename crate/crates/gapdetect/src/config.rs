//! TOML experiment configuration.
//!
//! ```toml
//! channel = "proakis-b"          # or explicit taps: [[0.8, 0.0], [0.6, 0.0]]
//! constellation = "bpsk"
//! block_len = 500
//! ebno_db = [0.0, 2.0, 4.0]
//! blocks_per_point = 200
//! target_errors = 100            # optional early stop per point
//! seed = 1
//! alpha = "golden"               # or "fixed-1"
//!
//! [detector]
//! name = "gap"
//! stages = 5
//! branches = 2
//! iters_per_stage = 4
//! preprocessor = "generic"
//! preproc_len = 7
//!
//! [train]
//! steps = 2000
//! ebno_db = 10.0
//! ```

use std::path::{Path, PathBuf};

use gapdetect_core::baselines::{DEFAULT_LMMSE_ORDER, MAX_SEQUENCES, MAX_TRELLIS_STATES};
use gapdetect_core::channel::{reference_channel, ChannelModel};
use gapdetect_core::gap::{GapConfig, PreprocessorKind};
use gapdetect_core::gfg::WeightTying;
use gapdetect_core::modem::Constellation;
use gapdetect_core::observation::BandPolicy;
use gapdetect_core::training::{AdamConfig, EbnoSampling, LossKind, TapInit, TrainConfig, Trainable};
use gapdetect_core::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{HarnessError, Result};

/// A reference channel name or explicit complex taps as `[re, im]` pairs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ChannelSpec {
    Named(String),
    Taps(Vec<[f64; 2]>),
}

impl ChannelSpec {
    pub fn taps(&self) -> Result<Vec<Complex64>> {
        let taps = match self {
            Self::Named(name) => reference_channel(name).map_err(|e| HarnessError::config(e.to_string()))?,
            Self::Taps(t) => t.iter().map(|&[re, im]| Complex64::new(re, im)).collect(),
        };
        ChannelModel::new(taps.clone(), 1.0).map_err(|e| HarnessError::config(format!("channel: {e}")))?;
        Ok(taps)
    }

    pub fn label(&self) -> String {
        match self {
            Self::Named(n) => n.clone(),
            Self::Taps(t) => format!("custom-{}tap", t.len()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PreprocessorName {
    Matched,
    #[default]
    Generic,
    Structured,
}

impl From<PreprocessorName> for PreprocessorKind {
    fn from(p: PreprocessorName) -> Self {
        match p {
            PreprocessorName::Matched => PreprocessorKind::Matched,
            PreprocessorName::Generic => PreprocessorKind::Generic,
            PreprocessorName::Structured => PreprocessorKind::Structured,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BandName {
    #[default]
    Channel,
    Full,
}

impl From<BandName> for BandPolicy {
    fn from(b: BandName) -> Self {
        match b {
            BandName::Channel => BandPolicy::Channel,
            BandName::Full => BandPolicy::Full,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TyingName {
    #[default]
    Tied,
    PerSymbol,
}

impl From<TyingName> for WeightTying {
    fn from(t: TyingName) -> Self {
        match t {
            TyingName::Tied => WeightTying::Tied,
            TyingName::PerSymbol => WeightTying::PerSymbol,
        }
    }
}

fn ten() -> usize {
    10
}

fn lmmse_order() -> usize {
    DEFAULT_LMMSE_ORDER
}

fn gap_stages() -> usize {
    5
}

fn gap_branches() -> usize {
    2
}

fn gap_iters() -> usize {
    4
}

fn preproc_len() -> usize {
    7
}

/// Detector selection and its structural parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "lowercase", deny_unknown_fields)]
pub enum DetectorSpec {
    Ufg {
        #[serde(default = "ten")]
        iterations: usize,
    },
    Gfg {
        #[serde(default = "ten")]
        iterations: usize,
        #[serde(default)]
        preprocessor: PreprocessorName,
        #[serde(default = "preproc_len")]
        preproc_len: usize,
        #[serde(default)]
        band_policy: BandName,
        #[serde(default)]
        tying: TyingName,
    },
    Gap {
        #[serde(default = "gap_stages")]
        stages: usize,
        #[serde(default = "gap_branches")]
        branches: usize,
        #[serde(default = "gap_iters")]
        iters_per_stage: usize,
        #[serde(default)]
        preprocessor: PreprocessorName,
        #[serde(default = "preproc_len")]
        preproc_len: usize,
        #[serde(default)]
        band_policy: BandName,
        #[serde(default)]
        tying: TyingName,
    },
    Bcjr {},
    Bruteforce {},
    Lmmse {
        #[serde(default = "lmmse_order")]
        order: usize,
    },
}

impl Default for DetectorSpec {
    fn default() -> Self {
        Self::Ufg { iterations: 10 }
    }
}

impl DetectorSpec {
    pub fn name(&self) -> &'static str {
        match self {
            Self::Ufg { .. } => "ufg",
            Self::Gfg { .. } => "gfg",
            Self::Gap { .. } => "gap",
            Self::Bcjr {} => "bcjr",
            Self::Bruteforce {} => "bruteforce",
            Self::Lmmse { .. } => "lmmse",
        }
    }

    /// Structure of the factor-graph detectors; `None` for the baselines.
    pub fn gap_config(&self) -> Option<GapConfig> {
        match *self {
            Self::Ufg { iterations } => Some(GapConfig::ufg(iterations)),
            Self::Gfg {
                iterations,
                preprocessor,
                preproc_len,
                band_policy,
                tying,
            } => Some(
                GapConfig::gfg(iterations, preprocessor.into(), preproc_len)
                    .with_band_policy(band_policy.into())
                    .with_tying(tying.into()),
            ),
            Self::Gap {
                stages,
                branches,
                iters_per_stage,
                preprocessor,
                preproc_len,
                band_policy,
                tying,
            } => Some(
                GapConfig::gap(stages, branches, iters_per_stage, preprocessor.into(), preproc_len)
                    .with_band_policy(band_policy.into())
                    .with_tying(tying.into()),
            ),
            _ => None,
        }
    }

    /// Whether the detector has trainable parameters loaded from a checkpoint.
    pub fn is_trainable(&self) -> bool {
        matches!(self, Self::Gfg { .. } | Self::Gap { .. })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum AlphaPolicy {
    #[serde(rename = "fixed-1")]
    Fixed1,
    #[default]
    #[serde(rename = "golden")]
    Golden,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossName {
    #[default]
    Bmi,
    Multiloss,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TrainableName {
    #[default]
    All,
    Taps,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TapInitName {
    #[default]
    Random,
    Identity,
}

/// Training Eb/N0: a fixed value or a `[lo, hi]` range sampled uniformly per block.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum TrainEbno {
    Fixed(f64),
    Range([f64; 2]),
}

impl Default for TrainEbno {
    fn default() -> Self {
        Self::Fixed(10.0)
    }
}

/// Training recipe; the detector, channel, constellation and seed come from
/// the enclosing experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSpec {
    pub block_len: usize,
    pub batch_blocks: usize,
    pub steps: usize,
    pub ebno_db: TrainEbno,
    pub loss: LossName,
    pub learning_rate: f64,
    /// Cosine-decay target for the step size; constant when absent.
    pub final_learning_rate: Option<f64>,
    pub trainable: TrainableName,
    pub tap_init: TapInitName,
    /// Blocks of the final held-out estimate of the training objective.
    pub holdout_blocks: usize,
}

impl Default for TrainSpec {
    fn default() -> Self {
        Self {
            block_len: 64,
            batch_blocks: 50,
            steps: 2000,
            ebno_db: TrainEbno::default(),
            loss: LossName::Bmi,
            learning_rate: AdamConfig::default().learning_rate,
            final_learning_rate: None,
            trainable: TrainableName::All,
            tap_init: TapInitName::Random,
            holdout_blocks: 100,
        }
    }
}

fn default_channel() -> ChannelSpec {
    ChannelSpec::Named("proakis-b".into())
}

fn default_constellation() -> String {
    "bpsk".into()
}

fn default_block_len() -> usize {
    500
}

fn default_ebno() -> Vec<f64> {
    vec![10.0]
}

fn default_blocks() -> usize {
    100
}

fn yes() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default = "default_channel")]
    pub channel: ChannelSpec,
    #[serde(default = "default_constellation")]
    pub constellation: String,
    #[serde(default = "default_block_len")]
    pub block_len: usize,
    #[serde(default)]
    pub detector: DetectorSpec,
    #[serde(default = "default_ebno")]
    pub ebno_db: Vec<f64>,
    /// Block cap per Eb/N0 point.
    #[serde(default = "default_blocks")]
    pub blocks_per_point: usize,
    /// Stop a point early once this many bit errors were counted.
    #[serde(default)]
    pub target_errors: Option<u64>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub checkpoint: Option<PathBuf>,
    #[serde(default)]
    pub alpha: AlphaPolicy,
    /// Constellation index sent at both block boundaries.
    #[serde(default)]
    pub boundary_symbol: usize,
    /// When false `wall_time_s` is written as 0 so repeated runs are byte-identical.
    #[serde(default = "yes")]
    pub record_wall_time: bool,
    #[serde(default)]
    pub train: Option<TrainSpec>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            channel: default_channel(),
            constellation: default_constellation(),
            block_len: default_block_len(),
            detector: DetectorSpec::default(),
            ebno_db: default_ebno(),
            blocks_per_point: default_blocks(),
            target_errors: None,
            seed: 0,
            checkpoint: None,
            alpha: AlphaPolicy::default(),
            boundary_symbol: 0,
            record_wall_time: true,
            train: None,
        }
    }
}

impl ExperimentConfig {
    /// Parses and validates a TOML document.
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| HarnessError::config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| HarnessError::io(path, e))?;
        Self::from_toml(&text).map_err(|e| match e {
            HarnessError::Config(m) => HarnessError::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("configuration serializes")
    }

    pub fn channel_taps(&self) -> Result<Vec<Complex64>> {
        self.channel.taps()
    }

    pub fn constellation(&self) -> Result<Constellation> {
        Constellation::by_name(&self.constellation).map_err(|e| HarnessError::config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        let taps = self.channel_taps()?;
        let cons = self.constellation()?;
        let memory = taps.len() - 1;
        if self.block_len == 0 {
            return Err(HarnessError::config("block_len must be positive"));
        }
        if self.blocks_per_point == 0 {
            return Err(HarnessError::config("blocks_per_point must be positive"));
        }
        if self.ebno_db.iter().any(|v| !v.is_finite()) {
            return Err(HarnessError::config("ebno_db entries must be finite"));
        }
        if self.boundary_symbol >= cons.order() {
            return Err(HarnessError::config(format!(
                "boundary_symbol {} outside a {}-point constellation",
                self.boundary_symbol,
                cons.order()
            )));
        }
        if let Some(g) = self.detector.gap_config() {
            g.validate().map_err(|e| HarnessError::config(format!("detector: {e}")))?;
            if self.detector.is_trainable() && g.preprocessor == PreprocessorKind::Matched && g.preproc_len != 0 {
                return Err(HarnessError::config("matched preprocessor takes no preproc_len"));
            }
        }
        match self.detector {
            DetectorSpec::Bruteforce {} => {
                let ok = (cons.order() as f64).powi(self.block_len as i32) <= MAX_SEQUENCES as f64;
                if self.block_len > 20 || !ok {
                    return Err(HarnessError::config(format!(
                        "bruteforce enumerates M^K sequences; K = {} is too long for M = {}",
                        self.block_len,
                        cons.order()
                    )));
                }
            }
            DetectorSpec::Bcjr {} => {
                if (cons.order() as f64).powi(memory as i32) > MAX_TRELLIS_STATES as f64 {
                    return Err(HarnessError::config(format!(
                        "bcjr needs M^L = {}^{} trellis states, above the limit {}",
                        cons.order(),
                        memory,
                        MAX_TRELLIS_STATES
                    )));
                }
            }
            DetectorSpec::Lmmse { order } if order == 0 => {
                return Err(HarnessError::config("lmmse order must be positive"));
            }
            _ => {}
        }
        if let Some(t) = &self.train {
            if self.detector.gap_config().is_none() {
                return Err(HarnessError::config(format!("detector `{}` has no trainable parameters", self.detector.name())));
            }
            if t.block_len == 0 || t.batch_blocks == 0 || t.holdout_blocks == 0 {
                return Err(HarnessError::config("train block_len, batch_blocks and holdout_blocks must be positive"));
            }
            if let TrainEbno::Range([lo, hi]) = t.ebno_db {
                if !(lo <= hi) {
                    return Err(HarnessError::config("train ebno_db range must satisfy lo <= hi"));
                }
            }
            if !(t.learning_rate >= 0.0 && t.learning_rate.is_finite()) {
                return Err(HarnessError::config("learning_rate must be finite and non-negative"));
            }
            if t.final_learning_rate.is_some_and(|f| !(f >= 0.0 && f.is_finite())) {
                return Err(HarnessError::config("final_learning_rate must be finite and non-negative"));
            }
        }
        Ok(())
    }

    /// Training configuration of the `[train]` section (defaults if absent).
    pub fn train_config(&self) -> Result<TrainConfig> {
        let spec = self.train.clone().unwrap_or_default();
        let detector = self
            .detector
            .gap_config()
            .ok_or_else(|| HarnessError::config(format!("detector `{}` has no trainable parameters", self.detector.name())))?;
        let mut cfg = TrainConfig::new(detector, self.channel_taps()?, self.constellation()?);
        cfg.block_len = spec.block_len;
        cfg.batch_blocks = spec.batch_blocks;
        cfg.steps = spec.steps;
        cfg.ebno = match spec.ebno_db {
            TrainEbno::Fixed(v) => EbnoSampling::Fixed(v),
            TrainEbno::Range([lo, hi]) => EbnoSampling::Uniform { lo, hi },
        };
        cfg.loss = match spec.loss {
            LossName::Bmi => LossKind::Bmi,
            LossName::Multiloss => LossKind::Multiloss,
        };
        cfg.adam.learning_rate = spec.learning_rate;
        cfg.final_learning_rate = spec.final_learning_rate;
        cfg.trainable = match spec.trainable {
            TrainableName::All => Trainable::ALL,
            TrainableName::Taps => Trainable::TAPS_ONLY,
        };
        cfg.tap_init = match spec.tap_init {
            TapInitName::Random => TapInit::Random,
            TapInitName::Identity => TapInit::Identity,
        };
        cfg.seed = self.seed;
        cfg.boundary_symbol = self.boundary_symbol;
        cfg.validate().map_err(|e| HarnessError::config(e.to_string()))?;
        Ok(cfg)
    }
}
