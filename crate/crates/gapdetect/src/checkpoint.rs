//! JSON persistence of trained detector parameters.

use std::path::Path;

use gapdetect_core::gap::{GapConfig, GapParams, PreprocessorKind, UnitParams};
use gapdetect_core::gfg::{NbpLayout, NbpParams, StageLink, WeightTying};
use gapdetect_core::observation::BandPolicy;
use gapdetect_core::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{HarnessError, Result};

pub const FORMAT_VERSION: u32 = 1;

/// Structural header; load compares every field against the requesting detector.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ShapeHeader {
    pub stages: usize,
    pub branches: usize,
    pub iters_per_stage: usize,
    pub block_len: usize,
    pub channel_memory: usize,
    pub preproc_len: usize,
    pub preprocessor: String,
    pub band_policy: String,
    pub tying: String,
    /// Graph band; derived from the fields above, stored for inspection.
    pub band: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UnitRecord {
    pub stage: usize,
    pub branch: usize,
    /// NBP block in layout order (`w_v`, `w_f`, `κ`, `λ` per position and iteration).
    pub nbp: Vec<f64>,
    pub w_p: Vec<f64>,
    pub taps: Vec<[f64; 2]>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub format_version: u32,
    pub shape: ShapeHeader,
    pub units: Vec<UnitRecord>,
}

fn kind_name(k: PreprocessorKind) -> &'static str {
    match k {
        PreprocessorKind::Matched => "matched",
        PreprocessorKind::Generic => "generic",
        PreprocessorKind::Structured => "structured",
    }
}

fn band_name(b: BandPolicy) -> &'static str {
    match b {
        BandPolicy::Channel => "channel",
        BandPolicy::Full => "full",
    }
}

fn tying_name(t: WeightTying) -> &'static str {
    match t {
        WeightTying::Tied => "tied",
        WeightTying::PerSymbol => "per-symbol",
    }
}

impl ShapeHeader {
    fn of(config: &GapConfig, block_len: usize, channel_memory: usize) -> Self {
        Self {
            stages: config.stages,
            branches: config.branches,
            iters_per_stage: config.iters_per_stage,
            block_len,
            channel_memory,
            preproc_len: config.preproc_len,
            preprocessor: kind_name(config.preprocessor).into(),
            band_policy: band_name(config.band_policy).into(),
            tying: tying_name(config.tying).into(),
            band: config.band(channel_memory),
        }
    }
}

impl Checkpoint {
    pub fn from_params(params: &GapParams) -> Self {
        let b = params.config.branches;
        Self {
            format_version: FORMAT_VERSION,
            shape: ShapeHeader::of(&params.config, params.block_len, params.channel_memory),
            units: params
                .units
                .iter()
                .enumerate()
                .map(|(i, u)| UnitRecord {
                    stage: i / b,
                    branch: i % b,
                    nbp: u.nbp.values.clone(),
                    w_p: u.link.w_p.clone(),
                    taps: u.taps.iter().map(|t| [t.re, t.im]).collect(),
                })
                .collect(),
        }
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("checkpoint serializes");
        s.push('\n');
        s
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| HarnessError::checkpoint("document", e.to_string()))
    }

    /// Rebuilds parameters for `config` at block length `block_len` on a channel of
    /// memory `channel_memory`. Tied checkpoints load at any block length.
    pub fn to_params(&self, config: &GapConfig, block_len: usize, channel_memory: usize) -> Result<GapParams> {
        if self.format_version != FORMAT_VERSION {
            return Err(HarnessError::checkpoint(
                "format_version",
                format!("unsupported version {}, expected {FORMAT_VERSION}", self.format_version),
            ));
        }
        let want = ShapeHeader::of(config, block_len, channel_memory);
        let have = &self.shape;
        macro_rules! same {
            ($field:ident) => {
                if have.$field != want.$field {
                    return Err(HarnessError::checkpoint(
                        concat!("shape.", stringify!($field)),
                        format!("checkpoint has {:?}, configuration requests {:?}", have.$field, want.$field),
                    ));
                }
            };
        }
        same!(stages);
        same!(branches);
        same!(iters_per_stage);
        same!(channel_memory);
        same!(preproc_len);
        same!(preprocessor);
        same!(band_policy);
        same!(tying);
        same!(band);
        if config.tying == WeightTying::PerSymbol {
            same!(block_len);
        }
        let stored_len = have.block_len;
        let layout = NbpLayout::new(config.iters_per_stage, stored_len, want.band, config.tying)
            .map_err(|e| HarnessError::checkpoint("shape", e.to_string()))?;
        if self.units.len() != config.units() {
            return Err(HarnessError::checkpoint(
                "units",
                format!("{} units stored, shape header implies {}", self.units.len(), config.units()),
            ));
        }
        let mut units = Vec::with_capacity(self.units.len());
        for (i, u) in self.units.iter().enumerate() {
            let at = |f: &str| format!("units[{i}].{f}");
            if (u.stage, u.branch) != (i / config.branches, i % config.branches) {
                return Err(HarnessError::checkpoint(at("stage"), "units out of (stage, branch) order"));
            }
            if u.w_p.len() != config.iters_per_stage {
                return Err(HarnessError::checkpoint(
                    at("w_p"),
                    format!("{} values, expected {}", u.w_p.len(), config.iters_per_stage),
                ));
            }
            if u.taps.len() != config.taps_per_unit() {
                return Err(HarnessError::checkpoint(
                    at("taps"),
                    format!("{} taps, expected {}", u.taps.len(), config.taps_per_unit()),
                ));
            }
            let all_finite = u.nbp.iter().chain(&u.w_p).chain(u.taps.iter().flatten()).all(|v| v.is_finite());
            if !all_finite {
                return Err(HarnessError::checkpoint(at("nbp"), "non-finite value"));
            }
            let nbp = NbpParams::from_values(layout, u.nbp.clone()).map_err(|e| HarnessError::checkpoint(at("nbp"), e.to_string()))?;
            units.push(UnitParams {
                nbp,
                link: StageLink { w_p: u.w_p.clone() },
                taps: u.taps.iter().map(|&[re, im]| Complex64::new(re, im)).collect(),
            });
        }
        let params = GapParams {
            config: *config,
            block_len: stored_len,
            channel_memory,
            units,
        };
        Ok(params.with_block_len(block_len)?)
    }
}

pub fn save(params: &GapParams, path: &Path) -> Result<()> {
    std::fs::write(path, Checkpoint::from_params(params).to_json()).map_err(|e| HarnessError::io(path, e))
}

pub fn load(path: &Path, config: &GapConfig, block_len: usize, channel_memory: usize) -> Result<GapParams> {
    let text = std::fs::read_to_string(path).map_err(|e| HarnessError::io(path, e))?;
    Checkpoint::from_json(&text)?.to_params(config, block_len, channel_memory)
}

#[cfg(test)]
mod tests {
    use super::*;
    use gapdetect_core::channel::reference_channel;
    use rand::SeedableRng;

    fn trained_like() -> GapParams {
        let cfg = GapConfig::gap(2, 2, 3, PreprocessorKind::Generic, 4).with_tying(WeightTying::Tied);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let mut p = GapParams::random_taps(cfg, 64, 2, &mut rng).unwrap();
        let theta: Vec<f64> = p.flatten().iter().enumerate().map(|(i, v)| v + (i as f64 * 0.37).sin() / 3.0).collect();
        p.set_flat(&theta).unwrap();
        p
    }

    #[test]
    fn identity_round_trip() {
        let cfg = GapConfig::gfg(10, PreprocessorKind::Structured, 7);
        let p = GapParams::identity(cfg, 50, &reference_channel("proakis-b").unwrap()).unwrap();
        let c = Checkpoint::from_params(&p);
        let back = Checkpoint::from_json(&c.to_json()).unwrap().to_params(&cfg, 50, 2).unwrap();
        assert_eq!(back, p);
    }

    #[test]
    fn save_load_save_is_byte_identical() {
        let p = trained_like();
        let text = Checkpoint::from_params(&p).to_json();
        let back = Checkpoint::from_json(&text).unwrap().to_params(&p.config, 64, 2).unwrap();
        assert_eq!(back, p);
        assert_eq!(Checkpoint::from_params(&back).to_json(), text);
    }

    #[test]
    fn tied_checkpoints_load_at_any_block_length() {
        let p = trained_like();
        let c = Checkpoint::from_params(&p);
        let q = c.to_params(&p.config, 500, 2).unwrap();
        assert_eq!(q.block_len, 500);
        assert_eq!(q.flatten(), p.flatten());
        let per = GapConfig::gfg(2, PreprocessorKind::Generic, 2);
        let pp = GapParams::identity(per, 8, &reference_channel("proakis-b").unwrap()).unwrap();
        let e = Checkpoint::from_params(&pp).to_params(&per, 9, 2).unwrap_err();
        assert!(e.to_string().contains("shape.block_len"), "{e}");
    }

    #[test]
    fn corrupted_headers_name_the_field() {
        let p = trained_like();
        let good = Checkpoint::from_params(&p);
        let cases: Vec<(Box<dyn Fn(&mut Checkpoint)>, &str)> = vec![
            (Box::new(|c| c.format_version = 7), "format_version"),
            (Box::new(|c| c.shape.stages = 3), "shape.stages"),
            (Box::new(|c| c.shape.branches = 1), "shape.branches"),
            (Box::new(|c| c.shape.iters_per_stage = 4), "shape.iters_per_stage"),
            (Box::new(|c| c.shape.channel_memory = 1), "shape.channel_memory"),
            (Box::new(|c| c.shape.preproc_len = 2), "shape.preproc_len"),
            (Box::new(|c| c.shape.tying = "per-symbol".into()), "shape.tying"),
            (Box::new(|c| c.shape.preprocessor = "structured".into()), "shape.preprocessor"),
            (Box::new(|c| c.shape.band_policy = "full".into()), "shape.band_policy"),
            (Box::new(|c| c.units.pop().map(|_| ()).unwrap()), "units"),
            (Box::new(|c| c.units[1].taps.pop().map(|_| ()).unwrap()), "units[1].taps"),
            (Box::new(|c| c.units[2].w_p.push(1.0)), "units[2].w_p"),
            (Box::new(|c| c.units[0].nbp.push(1.0)), "units[0].nbp"),
        ];
        for (corrupt, field) in cases {
            let mut c = good.clone();
            corrupt(&mut c);
            let e = c.to_params(&p.config, 64, 2).unwrap_err();
            assert_eq!(e.exit_code(), 2);
            assert!(e.to_string().contains(&format!("`{field}`")), "{field}: {e}");
        }
        let e = Checkpoint::from_json("{\"format_version\": 1}").unwrap_err();
        assert!(e.to_string().contains("`document`"));
    }
}
