//! Experiment and sweep configuration files (JSON, unknown keys rejected).

use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use serde::{Deserialize, Serialize};

use air_core::data::{load_idx_dataset, synthetic_dataset_with_noise, Dataset};
use air_core::eval::SviConfig;
use air_core::nn::{parse_arch, ArchSpec, Encoder, Terminal, WeightNormCfg};
use air_core::objective::{ModelPair, ObjectiveConfig, ObjectiveKind};
use air_core::seed::{child_seed, STREAM_INIT};
use air_core::train::TrainConfig;
use air_core::Error as CoreError;

use crate::CliError;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub n: usize,
    pub d: usize,
    pub clusters: usize,
    #[serde(default = "default_flip")]
    pub flip: f64,
    pub seed: u64,
}

fn default_flip() -> f64 {
    0.05
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IdxSpec {
    pub train_images: PathBuf,
    pub test_images: PathBuf,
    pub n_train: usize,
    pub n_val: usize,
    #[serde(default)]
    pub split_seed: u64,
}

/// Exactly one dataset source (externally tagged enum).
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", deny_unknown_fields)]
pub enum DatasetSpec {
    Synthetic(SyntheticSpec),
    Idx(IdxSpec),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub dataset: DatasetSpec,
    /// Seed for static binarization of non-binary inputs.
    #[serde(default)]
    pub binarize_seed: u64,
    pub encoder_arch: String,
    pub decoder_arch: String,
    /// Whether weight normalization (when enabled) caps the Gaussian head
    /// layers too.
    #[serde(default = "default_true")]
    pub cap_heads: bool,
    pub objective: ObjectiveConfig,
    pub train: TrainConfig,
    #[serde(default)]
    pub svi: SviConfig,
    /// Seed for evaluation estimators; defaults to a child of the train seed.
    #[serde(default)]
    pub eval_seed: Option<u64>,
    /// Repetitions for the amortized-bound estimate in reports.
    #[serde(default = "default_one")]
    pub eval_reps: usize,
}

fn default_true() -> bool {
    true
}

fn default_one() -> usize {
    1
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        let cfg: ExperimentConfig = serde_json::from_str(&text)
            .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.objective.validate().map_err(config_err)?;
        self.train.validate().map_err(config_err)?;
        self.svi.validate().map_err(config_err)?;
        let enc = parse_arch(&self.encoder_arch).map_err(config_err)?;
        let dec = parse_arch(&self.decoder_arch).map_err(config_err)?;
        if !matches!(enc.terminal, Terminal::Gaussian(_)) {
            return Err(CliError::Config("encoder_arch must end in a z- layer".into()));
        }
        let out_dim = match dec.terminal {
            Terminal::Bernoulli(w) => w,
            Terminal::Gaussian(_) => {
                return Err(CliError::Config("decoder_arch must end in an x- layer".into()))
            }
        };
        let d = match &self.dataset {
            DatasetSpec::Synthetic(s) => {
                if s.n < 5 || s.d < 1 || s.clusters < 1 {
                    return Err(CliError::Config("synthetic spec needs n ≥ 5, d ≥ 1, clusters ≥ 1".into()));
                }
                s.d
            }
            DatasetSpec::Idx(spec) => {
                for p in [&spec.train_images, &spec.test_images] {
                    if !p.exists() {
                        return Err(CliError::Config(format!(
                            "dataset path does not exist: {}",
                            p.display()
                        )));
                    }
                }
                out_dim // checked for real after load
            }
        };
        if out_dim != d {
            return Err(CliError::Config(format!(
                "decoder output width {out_dim} does not match data dimensionality {d}"
            )));
        }
        if self.eval_reps < 1 {
            return Err(CliError::Config("eval_reps must be ≥ 1".into()));
        }
        Ok(())
    }

    pub fn load_dataset(&self) -> Result<Dataset, CliError> {
        match &self.dataset {
            DatasetSpec::Synthetic(s) => {
                Ok(synthetic_dataset_with_noise(s.n, s.d, s.clusters, s.flip, s.seed).0)
            }
            DatasetSpec::Idx(spec) => load_idx_dataset(
                &spec.train_images,
                &spec.test_images,
                spec.n_train,
                spec.n_val,
                spec.split_seed,
                self.binarize_seed,
            )
            .map_err(config_err),
        }
    }

    pub fn encoder_arch(&self) -> ArchSpec {
        parse_arch(&self.encoder_arch).expect("validated")
    }

    pub fn decoder_arch(&self) -> ArchSpec {
        parse_arch(&self.decoder_arch).expect("validated")
    }

    /// Build the model pair at the configured initialization seed.
    pub fn build_model(&self, input_dim: usize) -> Result<ModelPair, CliError> {
        let wn = self.objective.weight_norm_h.map(|h| WeightNormCfg { h, cap_heads: self.cap_heads });
        let init_seed = child_seed(self.train.seed, STREAM_INIT);
        let encoder = Encoder::build(input_dim, &self.encoder_arch(), wn, init_seed)
            .map_err(config_err)?;
        let latent = encoder.latent_dim;
        let decoder = air_core::nn::Decoder::build(latent, &self.decoder_arch(), child_seed(init_seed, 1))
            .map_err(config_err)?;
        ModelPair::new(encoder, decoder).map_err(config_err)
    }

    pub fn eval_seed(&self) -> u64 {
        self.eval_seed.unwrap_or_else(|| child_seed(self.train.seed, 0xEE))
    }
}

fn config_err(e: CoreError) -> CliError {
    CliError::Config(e.to_string())
}

// ── sweeps ───────────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SweepAxis {
    /// Noise strength axis, values are `σ·√d`.
    #[serde(rename = "sigma_sqrt_d")]
    SigmaSqrtD,
    /// Weight-norm axis, values are `10/H`; zero means `H = +∞` (off).
    #[serde(rename = "ten_over_H")]
    TenOverH,
}

impl SweepAxis {
    pub fn as_str(&self) -> &'static str {
        match self {
            SweepAxis::SigmaSqrtD => "sigma_sqrt_d",
            SweepAxis::TenOverH => "ten_over_H",
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSpec {
    pub axis: SweepAxis,
    pub values: Vec<f64>,
    pub k: Vec<usize>,
    pub base: ExperimentConfig,
}

impl SweepSpec {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        let spec: SweepSpec = serde_json::from_str(&text)
            .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        if self.values.iter().any(|&v| !v.is_finite() || v < 0.0) {
            return Err(CliError::Config("sweep values must be finite and ≥ 0".into()));
        }
        if self.values.is_empty() || self.k.is_empty() {
            return Err(CliError::Config("sweep needs at least one value and one k".into()));
        }
        if self.k.iter().any(|&k| k < 1) {
            return Err(CliError::Config("sweep k values must be ≥ 1".into()));
        }
        self.base.validate()
    }

    /// Axis values with the unregularized baseline (0) guaranteed present,
    /// sorted ascending and deduplicated.
    pub fn values_with_baseline(&self) -> Vec<f64> {
        let mut v = self.values.clone();
        if !v.contains(&0.0) {
            v.push(0.0);
        }
        v.sort_by(|a, b| a.partial_cmp(b).unwrap());
        v.dedup();
        v
    }

    /// Child experiment for one `(axis value, k)` cell.
    pub fn child(&self, value: f64, k: usize) -> Result<ExperimentConfig, CliError> {
        let mut cfg = self.base.clone();
        cfg.objective.k = k;
        match self.axis {
            SweepAxis::SigmaSqrtD => {
                let d = match &cfg.dataset {
                    DatasetSpec::Synthetic(s) => s.d,
                    DatasetSpec::Idx(_) => match cfg.decoder_arch().terminal {
                        Terminal::Bernoulli(w) => w,
                        Terminal::Gaussian(_) => unreachable!("validated"),
                    },
                };
                cfg.objective.sigma = value / (d as f64).sqrt();
            }
            SweepAxis::TenOverH => {
                cfg.objective.weight_norm_h = if value == 0.0 { None } else { Some(10.0 / value) };
            }
        }
        // objective kind follows the resolved (k, sigma) cell
        cfg.objective.kind = match (cfg.objective.k > 1, cfg.objective.sigma > 0.0) {
            (false, false) => ObjectiveKind::Vae,
            (false, true) => ObjectiveKind::Dvae,
            (true, false) => ObjectiveKind::Iwae,
            (true, true) => ObjectiveKind::Diwae,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Stable short hash of a resolved config (for CSV comment lines).
pub fn config_hash<T: Serialize>(cfg: &T) -> String {
    let canon = serde_json::to_string(cfg).expect("config serializes");
    let digest = Sha256::digest(canon.as_bytes());
    digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
}
