use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::error::{Error, Result};

/// A scalar-output model that is differentiable in its flat parameter vector.
///
/// Everything downstream of the engine (Gramians, closed-form dynamics,
/// alignment) works against this trait, so the same analysis runs on the
/// fully-connected [`Network`](super::Network) and on models that are linear
/// in their parameters.
pub trait Model: Clone + Send + Sync {
    fn input_dim(&self) -> usize;

    fn params(&self) -> &[f64];

    fn params_mut(&mut self) -> &mut [f64];

    fn num_params(&self) -> usize {
        self.params().len()
    }

    /// Outputs at every row of `x` (`M x d`).
    fn forward_batch(&self, x: &DMatrix<f64>) -> Result<DVector<f64>>;

    /// Gradient of the output at `x` with respect to every parameter.
    fn grad_sample(&self, x: &[f64]) -> Result<DVector<f64>>;

    /// `|theta| x N` matrix whose column `i` is the gradient at row `i` of `x`.
    fn jacobian(&self, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        check_input(x, self.input_dim())?;
        let columns: Vec<DVector<f64>> = (0..x.nrows())
            .into_par_iter()
            .map(|i| self.grad_sample(&row(x, i)))
            .collect::<Result<_>>()?;
        if columns.is_empty() {
            return Ok(DMatrix::zeros(self.num_params(), 0));
        }
        Ok(DMatrix::from_columns(&columns))
    }

    /// `A * w`, i.e. the sum of per-sample gradients weighted by `w`.
    fn weighted_gradient(&self, x: &DMatrix<f64>, w: &DVector<f64>) -> Result<DVector<f64>> {
        if w.len() != x.nrows() {
            return Err(Error::dim(format!(
                "weight vector has {} entries for {} samples",
                w.len(),
                x.nrows()
            )));
        }
        Ok(self.jacobian(x)? * w)
    }

    /// Outputs `f` at `x` together with `A * weights(f)`, sharing one forward pass
    /// where the model allows it.
    fn forward_and_gradient<F>(&self, x: &DMatrix<f64>, weights: F) -> Result<(DVector<f64>, DVector<f64>)>
    where
        F: FnOnce(&DVector<f64>) -> DVector<f64>,
    {
        let f = self.forward_batch(x)?;
        let w = weights(&f);
        let g = self.weighted_gradient(x, &w)?;
        Ok((f, g))
    }

    /// Gradient-similarity kernel between two point sets: entry `(j, i)` is
    /// the dot product of the gradients at `xa[j]` and `xb[i]`.
    fn kernel(&self, xa: &DMatrix<f64>, xb: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        let ja = self.jacobian(xa)?;
        let jb = self.jacobian(xb)?;
        Ok(ja.transpose() * jb)
    }

    /// Copy of the model with its parameters replaced.
    fn with_params(&self, theta: &[f64]) -> Result<Self> {
        if theta.len() != self.num_params() {
            return Err(Error::dim(format!(
                "expected {} parameters, got {}",
                self.num_params(),
                theta.len()
            )));
        }
        let mut m = self.clone();
        m.params_mut().copy_from_slice(theta);
        Ok(m)
    }
}

pub(crate) fn check_input(x: &DMatrix<f64>, d: usize) -> Result<()> {
    if x.ncols() != d {
        return Err(Error::dim(format!(
            "input has {} columns, model expects {d}",
            x.ncols()
        )));
    }
    Ok(())
}

pub(crate) fn row(x: &DMatrix<f64>, i: usize) -> Vec<f64> {
    x.row(i).iter().copied().collect()
}

pub(crate) fn ensure_finite(values: &[f64], what: &str) -> Result<()> {
    if values.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite {
            what: what.to_string(),
            step: None,
        })
    }
}
