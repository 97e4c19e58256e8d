//! Run configuration, read from JSON. Unknown keys are rejected.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::controller::DEFAULT_REMEDIATION_FLOOR;
use crate::error::{Error, Result};
use crate::estimator::InjectMode;
use crate::network::{validate_architecture, LayerSpec};
use crate::numkit::RngStream;
use crate::sampler::SamplingMode;

use super::data::{load_mnist_idx, synth_dataset, Dataset};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Algorithm {
    #[default]
    DpUlr,
    DpSgd,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PrivacySpec {
    /// Poisson sampling rate.
    pub q: f64,
    /// Noise-to-sensitivity ratio.
    pub sigma0: f64,
    /// Rejection threshold: smaller batches are redrawn.
    pub n_b: usize,
    /// Repeats averaged per example.
    #[serde(default = "default_repeats")]
    pub k: usize,
    /// Per-example clip bound.
    pub clip: f64,
    pub delta: f64,
    /// Smallest dataset size the guarantee covers; the training-set size
    /// when absent.
    #[serde(default)]
    pub n_bar: Option<usize>,
}

fn default_repeats() -> usize {
    100
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Adam,
    Sgd,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub learning_rate: f64,
    #[serde(default = "default_decay")]
    pub decay_factor: f64,
    /// Epochs between decays.
    #[serde(default = "default_decay_every")]
    pub decay_every: usize,
}

fn default_decay() -> f64 {
    0.85
}

fn default_decay_every() -> usize {
    10
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum DataSource {
    /// An IDX image/label pair; relative paths resolve against the config
    /// file's directory.
    Mnist {
        images: PathBuf,
        labels: PathBuf,
        valid_count: usize,
    },
    Synth {
        n: usize,
        dim: usize,
        classes: usize,
        separation: f64,
        #[serde(default = "default_valid_fraction")]
        valid_fraction: f64,
    },
}

fn default_valid_fraction() -> f64 {
    0.2
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub algorithm: Algorithm,
    pub architecture: Vec<LayerSpec>,
    pub privacy: PrivacySpec,
    pub optimizer: OptimizerConfig,
    pub epochs: usize,
    pub seed: u64,
    #[serde(default)]
    pub sampling: SamplingMode,
    #[serde(default)]
    pub inject: InjectMode,
    /// Remediate when `min λ < floor · trace` even at full rank.
    #[serde(default = "default_floor")]
    pub remediation_floor: f64,
    /// Refuse to run outside the proven privacy regime.
    #[serde(default)]
    pub strict_accounting: bool,
    /// Stop after this many steps.
    #[serde(default)]
    pub max_steps: Option<usize>,
    pub data: DataSource,
}

fn default_floor() -> f64 {
    DEFAULT_REMEDIATION_FLOOR
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let mut cfg = Self::from_json(&std::fs::read_to_string(path)?)?;
        if let DataSource::Mnist { images, labels, .. } = &mut cfg.data {
            let base = path.parent().unwrap_or(Path::new("."));
            for p in [images, labels] {
                if p.is_relative() {
                    *p = base.join(&*p);
                }
            }
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        validate_architecture(&self.architecture)?;
        let p = &self.privacy;
        if !(p.q > 0.0 && p.q <= 1.0) {
            return Err(Error::Config(format!("q must lie in (0, 1], got {}", p.q)));
        }
        if !(p.sigma0 > 0.0 && p.sigma0.is_finite()) {
            return Err(Error::Config(format!("sigma0 must be positive, got {}", p.sigma0)));
        }
        if !(p.clip > 0.0 && p.clip.is_finite()) {
            return Err(Error::Config(format!("clip must be positive, got {}", p.clip)));
        }
        if !(p.delta > 0.0 && p.delta < 1.0) {
            return Err(Error::Config(format!("delta must lie in (0, 1), got {}", p.delta)));
        }
        if p.k == 0 || p.n_b == 0 {
            return Err(Error::Config("k and n_b must be at least 1".into()));
        }
        let o = &self.optimizer;
        if !(o.learning_rate >= 0.0 && o.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning rate must be >= 0, got {}", o.learning_rate)));
        }
        if !(o.decay_factor > 0.0) || o.decay_every == 0 {
            return Err(Error::Config("decay factor must be positive and decay_every >= 1".into()));
        }
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if !(self.remediation_floor >= 0.0) {
            return Err(Error::Config("remediation_floor must be >= 0".into()));
        }
        if let DataSource::Synth { valid_fraction, .. } = self.data {
            if !(0.0..1.0).contains(&valid_fraction) {
                return Err(Error::Config(format!("valid_fraction must lie in [0, 1), got {valid_fraction}")));
            }
        }
        Ok(())
    }

    /// `⌈1/q⌉`.
    pub fn steps_per_epoch(&self) -> usize {
        (1.0 / self.privacy.q).ceil() as usize
    }

    pub fn total_steps(&self) -> usize {
        let t = self.epochs * self.steps_per_epoch();
        self.max_steps.map_or(t, |m| m.min(t))
    }

    /// Training and validation sets; the split is seeded from `seed`.
    pub fn load_data(&self) -> Result<(Dataset, Dataset)> {
        let split_stream = RngStream::new(self.seed).child(9);
        match &self.data {
            DataSource::Mnist {
                images,
                labels,
                valid_count,
            } => load_mnist_idx(images, labels)?.split(*valid_count, &split_stream),
            DataSource::Synth {
                n,
                dim,
                classes,
                separation,
                valid_fraction,
            } => {
                let all = synth_dataset(self.seed, *n, *dim, *classes, *separation)?;
                let valid = (*n as f64 * valid_fraction).round() as usize;
                all.split(valid, &split_stream)
            }
        }
    }
}
