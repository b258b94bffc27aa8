use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::model::{check_input, ensure_finite, Model};
use crate::error::{Error, Result};

/// Fixed input transform of a [`FeatureModel`].
#[derive(Clone, Debug, PartialEq)]
pub enum FeatureMap {
    /// `phi(x) = x`.
    Identity { input_dim: usize },
    /// `phi_j(x) = cos(omega_j . x + phase_j)` with frozen frequencies.
    RandomCosine {
        /// `features x d`
        omega: DMatrix<f64>,
        phase: DVector<f64>,
    },
}

impl FeatureMap {
    fn input_dim(&self) -> usize {
        match self {
            FeatureMap::Identity { input_dim } => *input_dim,
            FeatureMap::RandomCosine { omega, .. } => omega.ncols(),
        }
    }

    fn len(&self) -> usize {
        match self {
            FeatureMap::Identity { input_dim } => *input_dim,
            FeatureMap::RandomCosine { omega, .. } => omega.nrows(),
        }
    }

    /// `M x features` feature matrix.
    fn eval(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        match self {
            FeatureMap::Identity { .. } => x.clone(),
            FeatureMap::RandomCosine { omega, phase } => {
                let mut z = x * omega.transpose();
                for (j, mut col) in z.column_iter_mut().enumerate() {
                    col.apply(|v| *v = (*v + phase[j]).cos());
                }
                z
            }
        }
    }
}

/// Model that is linear in its parameters: `f(x) = w . phi(x) + b`.
///
/// Its gradient-similarity kernel never changes during training, which makes
/// it the exact test bed for the constant-kernel dynamics.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureModel {
    features: FeatureMap,
    /// Feature weights followed by the bias.
    theta: Vec<f64>,
}

impl FeatureModel {
    /// Plain linear model `w . x + b` with all parameters zero.
    pub fn linear(input_dim: usize) -> Self {
        Self {
            features: FeatureMap::Identity { input_dim },
            theta: vec![0.0; input_dim + 1],
        }
    }

    /// Random cosine features with frequencies drawn from
    /// `U(-bandwidth, bandwidth)` and weights from `U(-1/sqrt(p), 1/sqrt(p))`.
    pub fn random_cosine(input_dim: usize, n_features: usize, bandwidth: f64, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let omega = DMatrix::from_fn(n_features, input_dim, |_, _| {
            rng.gen_range(-bandwidth..bandwidth)
        });
        let phase = DVector::from_fn(n_features, |_, _| {
            rng.gen_range(0.0..std::f64::consts::TAU)
        });
        let scale = 1.0 / (n_features as f64).sqrt();
        let mut theta: Vec<f64> = (0..n_features)
            .map(|_| rng.gen_range(-scale..scale))
            .collect();
        theta.push(0.0);
        Self {
            features: FeatureMap::RandomCosine { omega, phase },
            theta,
        }
    }

    pub fn from_parts(features: FeatureMap, theta: Vec<f64>) -> Result<Self> {
        if theta.len() != features.len() + 1 {
            return Err(Error::dim(format!(
                "{} features need {} parameters, got {}",
                features.len(),
                features.len() + 1,
                theta.len()
            )));
        }
        Ok(Self { features, theta })
    }

    pub fn features(&self) -> &FeatureMap {
        &self.features
    }

    /// Feature matrix with a trailing column of ones for the bias.
    fn design(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        let phi = self.features.eval(x);
        let cols = phi.ncols();
        phi.insert_column(cols, 1.0)
    }
}

impl Model for FeatureModel {
    fn input_dim(&self) -> usize {
        self.features.input_dim()
    }

    fn params(&self) -> &[f64] {
        &self.theta
    }

    fn params_mut(&mut self) -> &mut [f64] {
        &mut self.theta
    }

    fn forward_batch(&self, x: &DMatrix<f64>) -> Result<DVector<f64>> {
        check_input(x, self.input_dim())?;
        let out = self.design(x) * DVector::from_column_slice(&self.theta);
        ensure_finite(out.as_slice(), "model output")?;
        Ok(out)
    }

    fn grad_sample(&self, x: &[f64]) -> Result<DVector<f64>> {
        let xm = DMatrix::from_row_slice(1, x.len(), x);
        check_input(&xm, self.input_dim())?;
        let g = self.design(&xm).row(0).transpose();
        ensure_finite(g.as_slice(), "feature gradient")?;
        Ok(g)
    }

    fn jacobian(&self, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        check_input(x, self.input_dim())?;
        Ok(self.design(x).transpose())
    }

    fn kernel(&self, xa: &DMatrix<f64>, xb: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        check_input(xa, self.input_dim())?;
        check_input(xb, self.input_dim())?;
        Ok(self.design(xa) * self.design(xb).transpose())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_gradient_is_input_and_one() {
        let m = FeatureModel::linear(3);
        let g = m.grad_sample(&[0.5, -2.0, 7.0]).unwrap();
        assert_eq!(g.as_slice(), &[0.5, -2.0, 7.0, 1.0]);
    }

    #[test]
    fn linear_kernel_is_dot_plus_one() {
        let m = FeatureModel::linear(2);
        let xa = DMatrix::from_row_slice(1, 2, &[1.0, 2.0]);
        let xb = DMatrix::from_row_slice(2, 2, &[3.0, -1.0, 0.5, 0.5]);
        let k = m.kernel(&xa, &xb).unwrap();
        assert_eq!(k[(0, 0)], 3.0 - 2.0 + 1.0);
        assert_eq!(k[(0, 1)], 0.5 + 1.0 + 1.0);
    }

    #[test]
    fn random_features_are_deterministic() {
        let a = FeatureModel::random_cosine(2, 8, 3.0, 5);
        let b = FeatureModel::random_cosine(2, 8, 3.0, 5);
        assert_eq!(a, b);
        assert_eq!(a.num_params(), 9);
    }
}
