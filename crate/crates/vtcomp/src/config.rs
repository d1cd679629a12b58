//! Experiment configuration files.
//!
//! Configs are TOML by default; files ending in `.json` are parsed as JSON
//! with identical structure. Every section is optional so one file can drive
//! several commands; each command validates that the sections it needs are
//! present.
//!
//! Randomness is explicit. Each section may carry its own `seed`; absent
//! seeds are derived from the top-level `seed` as
//! `u64::from_le_bytes(sha256(top_seed_le || section_label)[..8])`,
//! so changing the top seed reseeds every section while distinct sections
//! never share a stream.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::baselines::ReducerSpec;
use crate::compress::FixedMatrixConfig;
use crate::cost::ModelDims;
use crate::error::{Error, Result};
use crate::meta::{MetaConfig, PositionalMode};
use crate::toy::{ClassLayout, EpisodeGenConfig, FrozenModelSpec};
use crate::trainer::TrainConfig;

/// Derives a section seed from the top-level seed by hashing.
pub fn derive_seed(top_seed: u64, label: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(top_seed.to_le_bytes());
    h.update(label.as_bytes());
    let digest = h.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("sha256 yields 32 bytes"))
}

/// SHA-256 of the raw config file bytes, hex-encoded. Recorded in every run
/// manifest so outputs can be traced to the exact file that produced them.
pub fn config_sha256(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    digest.iter().map(|b| format!("{:02x}", b)).collect()
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub d: Option<usize>,
    pub classes: Option<usize>,
    pub n_heads: Option<usize>,
    pub d_pos: Option<usize>,
    pub attn_gain: Option<f64>,
    pub readout_scale: Option<f64>,
    pub temperature: Option<f64>,
    pub noise_std: Option<f64>,
    pub seed: Option<u64>,
}

impl ModelSection {
    pub fn to_spec(&self) -> FrozenModelSpec {
        let dft = FrozenModelSpec::default();
        FrozenModelSpec {
            d: self.d.unwrap_or(dft.d),
            classes: self.classes.unwrap_or(dft.classes),
            n_heads: self.n_heads.unwrap_or(dft.n_heads),
            d_pos: self.d_pos.unwrap_or(dft.d_pos),
            attn_gain: self.attn_gain.unwrap_or(dft.attn_gain),
            readout_scale: self.readout_scale.unwrap_or(dft.readout_scale),
            temperature: self.temperature.unwrap_or(dft.temperature),
            noise_std: self.noise_std.unwrap_or(dft.noise_std),
        }
    }

    pub fn seed(&self, top_seed: u64) -> u64 {
        self.seed.unwrap_or_else(|| derive_seed(top_seed, "model"))
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSection {
    pub n_tokens: Vec<usize>,
    pub n_turns: usize,
    pub count: usize,
    pub seed: Option<u64>,
    pub layout: Option<ClassLayout>,
    /// Episode file location; defaults to `episodes.bin` in the output dir.
    pub path: Option<PathBuf>,
}

impl DatasetSection {
    pub fn to_gen_config(&self, top_seed: u64) -> EpisodeGenConfig {
        EpisodeGenConfig {
            n_tokens: self.n_tokens.clone(),
            n_turns: self.n_turns,
            count: self.count,
            seed: self.seed.unwrap_or_else(|| derive_seed(top_seed, "dataset")),
            layout: self.layout.unwrap_or_default(),
        }
    }

    pub fn file_path(&self, out_dir: &Path) -> PathBuf {
        self.path
            .clone()
            .unwrap_or_else(|| out_dir.join("episodes.bin"))
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetaSection {
    pub d_c: Option<usize>,
    pub kernel: Option<usize>,
    pub n_max: Option<usize>,
    pub positional: Option<PositionalMode>,
    pub seed: Option<u64>,
}

impl MetaSection {
    pub fn to_config(&self, d: usize) -> MetaConfig {
        let dft = MetaConfig::default();
        MetaConfig {
            d,
            d_c: self.d_c.unwrap_or(dft.d_c),
            kernel: self.kernel.unwrap_or(dft.kernel),
            n_max: self.n_max.unwrap_or(dft.n_max),
            positional: self.positional.unwrap_or(dft.positional),
        }
    }

    pub fn seed(&self, top_seed: u64) -> u64 {
        self.seed
            .unwrap_or_else(|| derive_seed(top_seed, "meta_init"))
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    pub lr: Option<f64>,
    /// Global-norm clip threshold; zero or negative disables clipping.
    pub grad_clip: Option<f64>,
    pub epochs: Option<usize>,
    pub batch_size: Option<usize>,
    pub alpha_entropy: Option<f64>,
    pub alpha_collapse: Option<f64>,
    pub rate: Option<f64>,
    pub holdout_fraction: Option<f64>,
    pub seed: Option<u64>,
}

impl TrainSection {
    pub fn to_config(&self, top_seed: u64) -> TrainConfig {
        let dft = TrainConfig::default();
        TrainConfig {
            lr: self.lr.unwrap_or(dft.lr),
            grad_clip: match self.grad_clip {
                None => dft.grad_clip,
                Some(c) if c > 0.0 => Some(c),
                Some(_) => None,
            },
            epochs: self.epochs.unwrap_or(dft.epochs),
            batch_size: self.batch_size.unwrap_or(dft.batch_size),
            alpha_entropy: self.alpha_entropy.unwrap_or(dft.alpha_entropy),
            alpha_collapse: self.alpha_collapse.unwrap_or(dft.alpha_collapse),
            rate: self.rate.unwrap_or(dft.rate),
            holdout_fraction: self.holdout_fraction.unwrap_or(dft.holdout_fraction),
            seed: self.seed.unwrap_or_else(|| derive_seed(top_seed, "train")),
        }
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSection {
    /// Reduction rates to sweep; empty means each reducer keeps its own rate.
    #[serde(default)]
    pub rates: Vec<f64>,
    /// Evaluation seeds; each reseeds the stochastic reducers. Defaults to
    /// the single derived seed.
    #[serde(default)]
    pub seeds: Vec<u64>,
}

impl EvalSection {
    pub fn seeds(&self, top_seed: u64) -> Vec<u64> {
        if self.seeds.is_empty() {
            vec![derive_seed(top_seed, "eval")]
        } else {
            self.seeds.clone()
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FixedMatrixSection {
    pub episode_index: Option<usize>,
    pub m: usize,
    pub alpha: Option<f64>,
    pub sigma_raw: Option<f64>,
    pub lr: Option<f64>,
    pub epochs: Option<usize>,
    pub seed: Option<u64>,
}

impl FixedMatrixSection {
    pub fn to_config(&self, top_seed: u64) -> FixedMatrixConfig {
        let dft = FixedMatrixConfig::for_m(self.m);
        FixedMatrixConfig {
            m: self.m,
            alpha: self.alpha.unwrap_or(dft.alpha),
            sigma_raw: self.sigma_raw.unwrap_or(dft.sigma_raw),
            lr: self.lr.unwrap_or(dft.lr),
            epochs: self.epochs.unwrap_or(dft.epochs),
            seed: self
                .seed
                .unwrap_or_else(|| derive_seed(top_seed, "fixed_matrix")),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ToyRuntimeSection {
    pub n_tokens: usize,
    pub n_turns: usize,
    pub rate: f64,
    pub repeats: Option<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CostSection {
    pub layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub ffn_width: usize,
    pub vocab: usize,
    pub n_visual: usize,
    pub n_text_per_turn: usize,
    pub answer_len: usize,
    pub turns: usize,
    /// Rates to sweep; 0.0 rows report the unreduced cost.
    pub rates: Vec<f64>,
    /// Also report the 7B-class calibration dims at the same workload.
    #[serde(default)]
    pub calibration_7b: bool,
    /// Optional wall-clock comparison on the toy decoder.
    pub toy_runtime: Option<ToyRuntimeSection>,
}

impl CostSection {
    pub fn dims(&self) -> ModelDims {
        ModelDims {
            layers: self.layers,
            d_model: self.d_model,
            n_heads: self.n_heads,
            ffn_width: self.ffn_width,
            vocab: self.vocab,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Output directory; the CLI `--out` flag overrides it.
    pub out_dir: Option<PathBuf>,
    /// Top-level seed; section seeds derive from it unless given explicitly.
    pub seed: u64,
    #[serde(default)]
    pub model: ModelSection,
    pub dataset: Option<DatasetSection>,
    #[serde(default)]
    pub reducers: Vec<ReducerSpec>,
    #[serde(default)]
    pub meta: MetaSection,
    #[serde(default)]
    pub train: TrainSection,
    #[serde(default)]
    pub eval: EvalSection,
    pub fixed_matrix: Option<FixedMatrixSection>,
    pub cost: Option<CostSection>,
}

impl ExperimentConfig {
    pub fn dataset(&self) -> Result<&DatasetSection> {
        self.dataset
            .as_ref()
            .ok_or_else(|| Error::Config("config needs a [dataset] section".to_string()))
    }

    pub fn cost(&self) -> Result<&CostSection> {
        self.cost
            .as_ref()
            .ok_or_else(|| Error::Config("config needs a [cost] section".to_string()))
    }

    pub fn fixed_matrix(&self) -> Result<&FixedMatrixSection> {
        self.fixed_matrix
            .as_ref()
            .ok_or_else(|| Error::Config("config needs a [fixed_matrix] section".to_string()))
    }
}

/// Raw file bytes plus the parsed config; the bytes feed the manifest hash.
pub struct LoadedConfig {
    pub config: ExperimentConfig,
    pub sha256: String,
    pub path: PathBuf,
}

pub fn load_config(path: &Path) -> Result<LoadedConfig> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let is_json = path.extension().is_some_and(|e| e == "json");
    let config: ExperimentConfig = if is_json {
        serde_json::from_slice(&bytes).map_err(|e| Error::Format {
            path: path.to_path_buf(),
            detail: e.to_string(),
        })?
    } else {
        let text = std::str::from_utf8(&bytes).map_err(|e| Error::Format {
            path: path.to_path_buf(),
            detail: e.to_string(),
        })?;
        toml::from_str(text).map_err(|e| Error::Format {
            path: path.to_path_buf(),
            detail: e.to_string(),
        })?
    };
    Ok(LoadedConfig {
        sha256: config_sha256(&bytes),
        config,
        path: path.to_path_buf(),
    })
}
