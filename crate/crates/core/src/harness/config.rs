use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::fourier::GridSpec;
use crate::nn::{Activation, NetworkConfig, OptimizerConfig, Precision, Schedule};

pub const CONFIG_VERSION: u32 = 1;

/// Closed-form label functions on `[0, 1]^d`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "function", rename_all = "snake_case")]
pub enum AnalyticTarget {
    /// `prod_j sin(2 pi x_j)`
    SinProduct,
    /// Bump plus three oscillating terms of increasing frequency, on
    /// the first two coordinates, shifted to a roughly zero mean.
    Mixed,
    /// `amplitude * cos(2 pi <frequency, x> + phase)`
    Cosine {
        frequency: Vec<f64>,
        #[serde(default = "one")]
        amplitude: f64,
        #[serde(default)]
        phase: f64,
    },
    Constant {
        value: f64,
    },
}

fn one() -> f64 {
    1.0
}

impl AnalyticTarget {
    pub fn eval(&self, x: &[f64]) -> f64 {
        use std::f64::consts::PI;
        match self {
            Self::SinProduct => x.iter().map(|v| (2.0 * PI * v).sin()).product(),
            Self::Mixed => {
                let (a, b) = (x[0], x[1]);
                let bump = (-20.0 * ((a - 0.35).powi(2) + (b - 0.6).powi(2))).exp();
                bump + 0.6 * (4.0 * PI * a).sin() * (4.0 * PI * b).sin()
                    + 0.3 * (2.0 * PI * (3.0 * a + 2.0 * b)).cos()
                    + 0.125 * (14.0 * PI * a).sin()
                    - 0.2
            }
            Self::Cosine {
                frequency,
                amplitude,
                phase,
            } => {
                let dot: f64 = frequency.iter().zip(x).map(|(f, v)| f * v).sum();
                amplitude * (2.0 * PI * dot + phase).cos()
            }
            Self::Constant { value } => *value,
        }
    }

    fn validate(&self, d: usize) -> Result<()> {
        match self {
            Self::Mixed if d < 2 => Err(Error::Config("the mixed target needs at least 2 input dimensions".into())),
            Self::Cosine { frequency, .. } if frequency.len() != d => Err(Error::Config(format!(
                "cosine frequency has {} entries, input dimension is {d}",
                frequency.len()
            ))),
            _ => Ok(()),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DataSource {
    Analytic {
        #[serde(flatten)]
        target: AnalyticTarget,
    },
    /// Grayscale image stretched over `[0, 1]^2`, sampled bilinearly.
    Image { path: PathBuf },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub source: DataSource,
    #[serde(default = "two")]
    pub input_dim: usize,
    /// Training points.
    pub n: usize,
    /// Held-out points.
    #[serde(default)]
    pub m: usize,
    #[serde(default)]
    pub seed: u64,
}

fn two() -> usize {
    2
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointSpec {
    /// Explicit step list; when absent the dense-then-geometric rule is used.
    #[serde(default)]
    pub steps: Option<Vec<u64>>,
    #[serde(default = "default_dense_until")]
    pub dense_until: u64,
    #[serde(default = "default_ratio")]
    pub ratio: f64,
    /// Also snapshot `t + 1` for every checkpoint `t`, for first-order checks.
    #[serde(default = "yes")]
    pub companions: bool,
}

fn default_dense_until() -> u64 {
    100
}

fn default_ratio() -> f64 {
    1.5
}

fn yes() -> bool {
    true
}

impl Default for CheckpointSpec {
    fn default() -> Self {
        Self {
            steps: None,
            dense_until: default_dense_until(),
            ratio: default_ratio(),
            companions: true,
        }
    }
}

impl CheckpointSpec {
    /// Primary checkpoint steps (without companions), always containing 0 and `total`.
    pub fn primary_steps(&self, total: u64) -> Vec<u64> {
        let mut steps = match &self.steps {
            Some(s) => s.clone(),
            None => geometric_schedule(total, self.dense_until, self.ratio),
        };
        steps.push(0);
        steps.push(total);
        steps.retain(|&t| t <= total);
        steps.sort_unstable();
        steps.dedup();
        steps
    }

    /// Every step to snapshot during training.
    pub fn all_steps(&self, total: u64) -> Vec<u64> {
        let primary = self.primary_steps(total);
        let mut steps = primary.clone();
        if self.companions {
            steps.extend(primary.iter().filter(|&&t| t < total).map(|t| t + 1));
        }
        steps.sort_unstable();
        steps.dedup();
        steps
    }
}

/// Every step below `dense_until`, then steps growing by `ratio`, then `total`.
pub fn geometric_schedule(total: u64, dense_until: u64, ratio: f64) -> Vec<u64> {
    let mut steps: Vec<u64> = (0..dense_until.min(total + 1)).collect();
    let mut t = dense_until.max(1) as f64;
    while (t.round() as u64) < total {
        steps.push(t.round() as u64);
        t *= ratio.max(1.0 + 1e-9);
    }
    steps.push(total);
    steps.dedup();
    steps
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnalysisPlan {
    /// Top-k sizes for alignment; defaults to the standard grid clipped to N.
    #[serde(default)]
    pub k_grid: Option<Vec<usize>>,
    /// 1-based mode indices for trends and per-mode output.
    #[serde(default = "default_modes")]
    pub modes: Vec<usize>,
    /// Alignment targets: labels, output, residual, differential.
    #[serde(default = "default_targets")]
    pub targets: Vec<String>,
    /// 1-based modes whose eigenvectors are Fourier transformed.
    #[serde(default = "default_fourier_modes")]
    pub fourier_modes: Vec<usize>,
    #[serde(default)]
    pub fourier_grid: Option<GridSpec>,
    /// Reference step for spectrum preservation (defaults to the middle checkpoint).
    #[serde(default)]
    pub preservation_ref: Option<u64>,
    /// End of the bootstrap period (defaults to 1/30 of the run).
    #[serde(default)]
    pub bootstrap: Option<u64>,
}

fn default_modes() -> Vec<usize> {
    vec![1, 2, 5, 10, 20, 50, 100, 200]
}

fn default_targets() -> Vec<String> {
    ["labels", "output", "residual", "differential"].map(String::from).to_vec()
}

fn default_fourier_modes() -> Vec<usize> {
    vec![1, 10, 50, 200]
}

impl Default for AnalysisPlan {
    fn default() -> Self {
        Self {
            k_grid: None,
            modes: default_modes(),
            targets: default_targets(),
            fourier_modes: default_fourier_modes(),
            fourier_grid: None,
            preservation_ref: None,
            bootstrap: None,
        }
    }
}

/// Everything needed to reproduce one experiment.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub version: u32,
    #[serde(default)]
    pub precision: Precision,
    /// Loss is recorded every this many steps (and at every checkpoint).
    #[serde(default = "default_record_interval")]
    pub record_interval: u64,
    pub dataset: DatasetSpec,
    pub network: NetworkConfig,
    pub optimizer: OptimizerConfig,
    #[serde(default)]
    pub checkpoints: CheckpointSpec,
    #[serde(default)]
    pub analysis: AnalysisPlan,
}

fn default_record_interval() -> u64 {
    1
}

impl ExperimentConfig {
    /// The desk-scale reference experiment.
    pub fn standard() -> Self {
        Self {
            version: CONFIG_VERSION,
            precision: Precision::F64,
            record_interval: 10,
            dataset: DatasetSpec {
                source: DataSource::Analytic {
                    target: AnalyticTarget::Mixed,
                },
                input_dim: 2,
                n: 1000,
                m: 1000,
                seed: 0,
            },
            network: NetworkConfig::new(2, vec![64; 4], Activation::LeakyRelu { slope: 0.2 }),
            optimizer: OptimizerConfig::gd(Schedule {
                delta0: 0.25,
                decay_factor: 0.5,
                decay_interval: 20_000,
                total_steps: 60_000,
            }),
            checkpoints: CheckpointSpec::default(),
            analysis: AnalysisPlan::default(),
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Loads and validates a config; relative image paths are resolved
    /// against the config file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg: Self = toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        if let DataSource::Image { path: img } = &mut cfg.dataset.source {
            if img.is_relative() {
                if let Some(dir) = path.parent() {
                    *img = dir.join(&*img);
                }
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("experiment config serializes")
    }

    /// SHA-256 of the canonical TOML form.
    pub fn hash(&self) -> String {
        hex(&Sha256::digest(self.to_toml().as_bytes()))
    }

    pub fn total_steps(&self) -> u64 {
        self.optimizer.schedule.total_steps
    }

    pub fn bootstrap(&self) -> u64 {
        self.analysis.bootstrap.unwrap_or(self.total_steps() / 30)
    }

    pub fn validate(&self) -> Result<()> {
        if self.version != CONFIG_VERSION {
            return Err(Error::Config(format!(
                "config version {} unsupported (expected {CONFIG_VERSION})",
                self.version
            )));
        }
        let d = self.dataset.input_dim;
        if d == 0 {
            return Err(Error::Config("input_dim must be positive".into()));
        }
        if self.network.input_dim != d {
            return Err(Error::Config(format!(
                "network input_dim {} differs from dataset input_dim {d}",
                self.network.input_dim
            )));
        }
        if self.dataset.n == 0 {
            return Err(Error::Config("dataset needs at least one training point".into()));
        }
        match &self.dataset.source {
            DataSource::Analytic { target } => target.validate(d)?,
            DataSource::Image { path } => {
                if d != 2 {
                    return Err(Error::Config("image datasets are 2-dimensional".into()));
                }
                if !path.is_file() {
                    return Err(Error::Config(format!("image {} not found", path.display())));
                }
            }
        }
        if self.record_interval == 0 {
            return Err(Error::Config("record_interval must be positive".into()));
        }
        self.network.validate()?;
        self.optimizer.validate(self.dataset.n)?;
        let total = self.total_steps();
        if let Some(steps) = &self.checkpoints.steps {
            if steps.windows(2).any(|w| w[0] >= w[1]) {
                return Err(Error::Config("checkpoint steps must be strictly increasing".into()));
            }
            if steps.iter().any(|&t| t > total) {
                return Err(Error::Config(format!("checkpoint steps must not exceed total_steps={total}")));
            }
        }
        if !(self.checkpoints.ratio > 1.0) {
            return Err(Error::Config("checkpoint ratio must exceed 1".into()));
        }
        if self.analysis.modes.contains(&0) || self.analysis.fourier_modes.contains(&0) {
            return Err(Error::Config("mode indices are 1-based".into()));
        }
        if let Some(ks) = &self.analysis.k_grid {
            if ks.contains(&0) {
                return Err(Error::Config("k values must be positive".into()));
            }
        }
        if let Some(g) = &self.analysis.fourier_grid {
            g.validate()?;
            if g.dim() != d {
                return Err(Error::Config("fourier grid dimension differs from input_dim".into()));
            }
        }
        Ok(())
    }
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}
