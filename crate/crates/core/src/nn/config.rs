use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Hidden-layer nonlinearity. The output layer is always affine.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Activation {
    /// `max(z, slope * z)`. The derivative at exactly zero is `slope`.
    LeakyRelu { slope: f64 },
    /// Derivative at exactly zero is 0.
    Relu,
    Tanh,
    Identity,
}

impl Default for Activation {
    fn default() -> Self {
        Activation::LeakyRelu { slope: 0.2 }
    }
}

impl Activation {
    #[inline]
    pub fn apply(self, z: f64) -> f64 {
        match self {
            Activation::LeakyRelu { slope } => {
                if z > 0.0 {
                    z
                } else {
                    slope * z
                }
            }
            Activation::Relu => z.max(0.0),
            Activation::Tanh => z.tanh(),
            Activation::Identity => z,
        }
    }

    /// Derivative with respect to the pre-activation. Kinks take the
    /// negative-side slope.
    #[inline]
    pub fn derivative(self, z: f64) -> f64 {
        match self {
            Activation::LeakyRelu { slope } => {
                if z > 0.0 {
                    1.0
                } else {
                    slope
                }
            }
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => {
                let t = z.tanh();
                1.0 - t * t
            }
            Activation::Identity => 1.0,
        }
    }

    /// Code used by the checkpoint file format.
    pub fn code(self) -> u8 {
        match self {
            Activation::LeakyRelu { .. } => 0,
            Activation::Relu => 1,
            Activation::Tanh => 2,
            Activation::Identity => 3,
        }
    }

    pub fn slope(self) -> f64 {
        match self {
            Activation::LeakyRelu { slope } => slope,
            _ => 0.0,
        }
    }

    pub fn from_code(code: u8, slope: f64) -> Option<Self> {
        match code {
            0 => Some(Activation::LeakyRelu { slope }),
            1 => Some(Activation::Relu),
            2 => Some(Activation::Tanh),
            3 => Some(Activation::Identity),
            _ => None,
        }
    }
}

/// Architecture of a scalar-output fully-connected network.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetworkConfig {
    pub input_dim: usize,
    pub hidden_widths: Vec<usize>,
    #[serde(default)]
    pub activation: Activation,
    /// Identity skip between consecutive hidden layers of equal width.
    #[serde(default)]
    pub shortcuts: bool,
    #[serde(default)]
    pub seed: u64,
}

impl NetworkConfig {
    pub fn new(input_dim: usize, hidden_widths: Vec<usize>, activation: Activation) -> Self {
        Self {
            input_dim,
            hidden_widths,
            activation,
            shortcuts: false,
            seed: 0,
        }
    }

    pub fn with_shortcuts(mut self, shortcuts: bool) -> Self {
        self.shortcuts = shortcuts;
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 {
            return Err(Error::Config("input_dim must be positive".into()));
        }
        if self.hidden_widths.is_empty() {
            return Err(Error::Config("at least one hidden layer is required".into()));
        }
        if self.hidden_widths.contains(&0) {
            return Err(Error::Config("hidden widths must be positive".into()));
        }
        if let Activation::LeakyRelu { slope } = self.activation {
            if !slope.is_finite() {
                return Err(Error::Config("leaky relu slope must be finite".into()));
            }
        }
        Ok(())
    }

    /// `(fan_in, fan_out)` for every affine layer, output layer last.
    pub fn layer_dims(&self) -> Vec<(usize, usize)> {
        let mut dims = Vec::with_capacity(self.hidden_widths.len() + 1);
        let mut fan_in = self.input_dim;
        for &w in &self.hidden_widths {
            dims.push((fan_in, w));
            fan_in = w;
        }
        dims.push((fan_in, 1));
        dims
    }

    pub fn num_params(&self) -> usize {
        self.layer_dims()
            .iter()
            .map(|&(fan_in, fan_out)| (fan_in + 1) * fan_out)
            .sum()
    }
}

/// Step-decay learning-rate schedule.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    pub delta0: f64,
    #[serde(default = "default_decay_factor")]
    pub decay_factor: f64,
    pub decay_interval: u64,
    pub total_steps: u64,
}

fn default_decay_factor() -> f64 {
    0.5
}

impl Schedule {
    pub fn constant(delta: f64, total_steps: u64) -> Self {
        Self {
            delta0: delta,
            decay_factor: 1.0,
            decay_interval: u64::MAX,
            total_steps,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.delta0 > 0.0 && self.delta0.is_finite()) {
            return Err(Error::Config("delta0 must be positive".into()));
        }
        if !(self.decay_factor > 0.0 && self.decay_factor <= 1.0) {
            return Err(Error::Config("decay_factor must lie in (0, 1]".into()));
        }
        if self.decay_interval == 0 {
            return Err(Error::Config("decay_interval must be positive".into()));
        }
        Ok(())
    }

    /// Learning rate used for the update from step `t` to `t + 1`. The final
    /// step has no outgoing update and reports the rate of the last one.
    pub fn delta_at(&self, t: u64) -> f64 {
        let t = t.min(self.total_steps.saturating_sub(1));
        let decays = t / self.decay_interval;
        self.delta0 * self.decay_factor.powf(decays as f64)
    }

    /// True if the learning rate drops when entering step `t`.
    pub fn is_decay_step(&self, t: u64) -> bool {
        t > 0 && t < self.total_steps && t.is_multiple_of(self.decay_interval) && self.decay_factor < 1.0
    }

    pub fn decay_steps(&self) -> Vec<u64> {
        if self.decay_factor >= 1.0 {
            return Vec::new();
        }
        (1..)
            .map(|k| k * self.decay_interval)
            .take_while(|&t| t < self.total_steps)
            .collect()
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OptimizerKind {
    #[default]
    FullBatchGd,
    Sgd {
        batch_size: usize,
    },
    Adam {
        #[serde(default = "default_beta1")]
        beta1: f64,
        #[serde(default = "default_beta2")]
        beta2: f64,
        #[serde(default = "default_eps")]
        eps: f64,
    },
}

fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_eps() -> f64 {
    1e-8
}


#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    #[serde(default)]
    pub kind: OptimizerKind,
    pub schedule: Schedule,
}

impl OptimizerConfig {
    pub fn gd(schedule: Schedule) -> Self {
        Self {
            kind: OptimizerKind::FullBatchGd,
            schedule,
        }
    }

    pub fn validate(&self, n_samples: usize) -> Result<()> {
        self.schedule.validate()?;
        match self.kind {
            OptimizerKind::FullBatchGd => Ok(()),
            OptimizerKind::Sgd { batch_size } => {
                if batch_size == 0 || batch_size > n_samples {
                    Err(Error::Config(format!(
                        "batch_size {batch_size} must lie in 1..={n_samples}"
                    )))
                } else {
                    Ok(())
                }
            }
            OptimizerKind::Adam { beta1, beta2, eps } => {
                let beta_ok = |b: f64| (0.0..1.0).contains(&b);
                if !beta_ok(beta1) || !beta_ok(beta2) || !(eps > 0.0) {
                    Err(Error::Config(
                        "adam requires 0 <= beta < 1 and eps > 0".into(),
                    ))
                } else {
                    Ok(())
                }
            }
        }
    }
}

/// Floating-point mode of the training state.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    #[default]
    F64,
    /// Parameters are rounded to single precision after every update.
    F32,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn paper_architecture_parameter_count() {
        // Six weight layers: five hidden layers of 256 plus the scalar output.
        let cfg = NetworkConfig::new(2, vec![256; 5], Activation::default());
        assert_eq!(cfg.num_params(), 264_193);
        let deeper = NetworkConfig::new(2, vec![256; 6], Activation::default());
        assert_eq!(deeper.num_params(), 264_193 + 256 * 257);
    }

    #[test]
    fn tiny_parameter_count() {
        let cfg = NetworkConfig::new(1, vec![1], Activation::default());
        assert_eq!(cfg.num_params(), 4);
    }

    #[test]
    fn schedule_halves_each_interval() {
        let s = Schedule {
            delta0: 0.25,
            decay_factor: 0.5,
            decay_interval: 100,
            total_steps: 300,
        };
        assert_eq!(s.delta_at(0), 0.25);
        assert_eq!(s.delta_at(99), 0.25);
        assert_eq!(s.delta_at(100), 0.125);
        assert_eq!(s.delta_at(250), 0.0625);
        assert!(s.is_decay_step(200));
        assert!(!s.is_decay_step(0));
        assert!(!s.is_decay_step(300));
        assert_eq!(s.delta_at(300), 0.0625);
        assert_eq!(s.decay_steps(), vec![100, 200]);
    }

    #[test]
    fn rejects_bad_configs() {
        assert!(NetworkConfig::new(2, vec![], Activation::Relu).validate().is_err());
        assert!(NetworkConfig::new(0, vec![3], Activation::Relu).validate().is_err());
        assert!(NetworkConfig::new(2, vec![3, 0], Activation::Relu).validate().is_err());
        let sgd = OptimizerConfig {
            kind: OptimizerKind::Sgd { batch_size: 11 },
            schedule: Schedule::constant(0.1, 10),
        };
        assert!(sgd.validate(10).is_err());
        assert!(sgd.validate(11).is_ok());
        let adam = OptimizerConfig {
            kind: OptimizerKind::Adam {
                beta1: 1.0,
                beta2: 0.9,
                eps: 1e-8,
            },
            schedule: Schedule::constant(0.1, 10),
        };
        assert!(adam.validate(10).is_err());
    }

    #[test]
    fn leaky_kink_takes_negative_slope() {
        let a = Activation::LeakyRelu { slope: 0.2 };
        assert_eq!(a.derivative(0.0), 0.2);
        assert_eq!(a.apply(-1.0), -0.2);
        assert_eq!(Activation::Relu.derivative(0.0), 0.0);
    }
}
