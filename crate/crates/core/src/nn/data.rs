use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Training inputs and labels, with the standardization statistics that map
/// raw coordinates to the normalized inputs the network sees.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    /// Normalized `N x d` inputs.
    pub inputs: DMatrix<f64>,
    pub labels: DVector<f64>,
    pub norm_mean: DVector<f64>,
    pub norm_std: DVector<f64>,
    /// Inputs before standardization.
    pub raw_inputs: DMatrix<f64>,
}

impl Dataset {
    /// Standardizes every column of `raw` to empirical mean 0 and (population)
    /// standard deviation 1. Constant columns are centered and keep std 1.
    pub fn from_raw(raw: DMatrix<f64>, labels: DVector<f64>) -> Result<Self> {
        check_shapes(&raw, &labels)?;
        let n = raw.nrows() as f64;
        let d = raw.ncols();
        let mut mean = DVector::zeros(d);
        let mut std = DVector::from_element(d, 1.0);
        for j in 0..d {
            let col = raw.column(j);
            let m = col.sum() / n;
            let var = col.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / n;
            mean[j] = m;
            if var.sqrt() > 1e-12 * (1.0 + m.abs()) {
                std[j] = var.sqrt();
            }
        }
        let inputs = standardize(&raw, &mean, &std);
        Ok(Self {
            inputs,
            labels,
            norm_mean: mean,
            norm_std: std,
            raw_inputs: raw,
        })
    }

    /// Uses `inputs` as given (identity normalization).
    pub fn without_normalization(inputs: DMatrix<f64>, labels: DVector<f64>) -> Result<Self> {
        check_shapes(&inputs, &labels)?;
        let d = inputs.ncols();
        Ok(Self {
            raw_inputs: inputs.clone(),
            inputs,
            labels,
            norm_mean: DVector::zeros(d),
            norm_std: DVector::from_element(d, 1.0),
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.inputs.ncols()
    }

    /// Applies this dataset's statistics to raw points (e.g. a test set).
    pub fn normalize(&self, raw: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        if raw.ncols() != self.dim() {
            return Err(Error::dim(format!(
                "points have {} columns, dataset has {}",
                raw.ncols(),
                self.dim()
            )));
        }
        Ok(standardize(raw, &self.norm_mean, &self.norm_std))
    }

    /// Indices of raw columns with zero spread.
    pub fn constant_columns(&self) -> Vec<usize> {
        (0..self.dim())
            .filter(|&j| {
                let col = self.raw_inputs.column(j);
                col.iter().all(|&v| v == col[0])
            })
            .collect()
    }
}

fn check_shapes(x: &DMatrix<f64>, y: &DVector<f64>) -> Result<()> {
    if x.nrows() != y.len() {
        return Err(Error::dim(format!(
            "{} input rows but {} labels",
            x.nrows(),
            y.len()
        )));
    }
    if x.ncols() == 0 {
        return Err(Error::dim("inputs have no columns"));
    }
    Ok(())
}

fn standardize(raw: &DMatrix<f64>, mean: &DVector<f64>, std: &DVector<f64>) -> DMatrix<f64> {
    let mut out = raw.clone();
    for (j, mut col) in out.column_iter_mut().enumerate() {
        col.apply(|v| *v = (*v - mean[j]) / std[j]);
    }
    out
}
