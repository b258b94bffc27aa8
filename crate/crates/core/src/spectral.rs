//! Gramian and FIM construction, symmetric eigendecomposition, and kernel
//! eigenfunction estimates at arbitrary points.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{Error, Result};
use crate::nn::Model;

/// Eigenvalues below `EIGEN_CLAMP * lambda_max` are treated as zero.
pub const EIGEN_CLAMP: f64 = 1e-10;

/// Negative eigenvalues beyond `-PSD_TOLERANCE * |lambda|_max` are rejected.
pub const PSD_TOLERANCE: f64 = 1e-8;

/// `N x N` gradient-similarity matrix at step `t`.
#[derive(Clone, Debug, PartialEq)]
pub struct Gramian {
    pub t: u64,
    pub matrix: DMatrix<f64>,
}

impl Gramian {
    /// Wraps a square matrix, replacing it by `(G + G^T) / 2`.
    pub fn new(t: u64, matrix: DMatrix<f64>) -> Result<Self> {
        if !matrix.is_square() {
            return Err(Error::dim(format!(
                "gramian must be square, got {}x{}",
                matrix.nrows(),
                matrix.ncols()
            )));
        }
        let sym = (&matrix + matrix.transpose()) * 0.5;
        Ok(Self { t, matrix: sym })
    }

    /// `G = A^T A` for a `|theta| x N` Jacobian.
    pub fn from_jacobian(t: u64, jacobian: &DMatrix<f64>) -> Self {
        let g = jacobian.transpose() * jacobian;
        Self::new(t, g).expect("A^T A is square")
    }

    /// Gramian of `model` on the rows of `x`, using the model's kernel.
    pub fn from_model<M: Model>(t: u64, model: &M, x: &DMatrix<f64>) -> Result<Self> {
        Self::new(t, model.kernel(x, x)?)
    }

    pub fn n(&self) -> usize {
        self.matrix.nrows()
    }

    /// `max |G - G^T|`.
    pub fn asymmetry(&self) -> f64 {
        (&self.matrix - self.matrix.transpose()).amax()
    }
}

/// `G = A^T A`, symmetrized.
pub fn gramian(jacobian: &DMatrix<f64>) -> Gramian {
    Gramian::from_jacobian(0, jacobian)
}

/// Full eigendecomposition of a Gramian.
///
/// Eigenvalues are sorted in decreasing order; eigenvector `i` is column `i`
/// of `eigenvectors`, with its largest-magnitude entry positive.
#[derive(Clone, Debug, PartialEq)]
pub struct SpectrumSnapshot {
    pub t: u64,
    pub eigenvalues: DVector<f64>,
    pub eigenvectors: DMatrix<f64>,
    /// Kernel-operator estimates `lambda_i / N`.
    pub kernel_eigenvalues: DVector<f64>,
}

impl SpectrumSnapshot {
    /// Builds a snapshot from already sorted, sign-fixed eigenpairs.
    pub fn from_parts(t: u64, eigenvalues: DVector<f64>, eigenvectors: DMatrix<f64>) -> Result<Self> {
        let n = eigenvalues.len();
        if eigenvectors.nrows() != n || eigenvectors.ncols() != n {
            return Err(Error::dim(format!(
                "{n} eigenvalues but eigenvector matrix is {}x{}",
                eigenvectors.nrows(),
                eigenvectors.ncols()
            )));
        }
        let kernel_eigenvalues = &eigenvalues / n as f64;
        Ok(Self {
            t,
            eigenvalues,
            eigenvectors,
            kernel_eigenvalues,
        })
    }

    pub fn n(&self) -> usize {
        self.eigenvalues.len()
    }

    pub fn lambda_max(&self) -> f64 {
        self.eigenvalues.iter().copied().next().unwrap_or(0.0)
    }

    pub fn lambda_min(&self) -> f64 {
        self.eigenvalues.iter().copied().last().unwrap_or(0.0)
    }

    /// Eigenvector `i` (0-based, decreasing eigenvalue order).
    pub fn vector(&self, i: usize) -> DVector<f64> {
        self.eigenvectors.column(i).into_owned()
    }

    /// Eigenvalues at or below this are considered zero.
    pub fn zero_threshold(&self) -> f64 {
        EIGEN_CLAMP * self.lambda_max()
    }

    /// Number of eigenvalues above [`Self::zero_threshold`].
    pub fn rank(&self) -> usize {
        let thr = self.zero_threshold();
        self.eigenvalues.iter().filter(|&&l| l > thr).count()
    }

    /// Coefficients `<v_i, phi>` for every mode.
    pub fn coefficients(&self, phi: &DVector<f64>) -> DVector<f64> {
        self.eigenvectors.tr_mul(phi)
    }

    fn require_positive(&self, i: usize) -> Result<f64> {
        if i >= self.n() {
            return Err(Error::dim(format!("mode {i} out of range for N={}", self.n())));
        }
        let lambda = self.eigenvalues[i];
        let thr = self.zero_threshold();
        if !(lambda > thr) {
            return Err(Error::IllConditioned {
                index: i,
                eigenvalue: lambda,
                threshold: thr,
            });
        }
        Ok(lambda)
    }
}

/// Dense symmetric eigendecomposition.
pub fn eig_sym(g: &Gramian) -> Result<SpectrumSnapshot> {
    let n = g.n();
    if n == 0 {
        return SpectrumSnapshot::from_parts(g.t, DVector::zeros(0), DMatrix::zeros(0, 0));
    }
    let max_abs = g.matrix.amax();
    if !max_abs.is_finite() {
        return Err(Error::NonFinite {
            what: "gramian".into(),
            step: Some(g.t),
        });
    }
    let eig = SymmetricEigen::try_new(g.matrix.clone(), f64::EPSILON, 200 * n.max(10))
        .ok_or(Error::EigenConvergence { n, max_abs })?;

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));

    let lambda_max = eig.eigenvalues[order[0]];
    let lambda_min = eig.eigenvalues[order[n - 1]];
    let scale = lambda_max.abs().max(lambda_min.abs());
    if lambda_min < -PSD_TOLERANCE * scale {
        return Err(Error::NotPositiveSemidefinite {
            min: lambda_min,
            max: lambda_max,
        });
    }

    let eigenvalues = DVector::from_iterator(n, order.iter().map(|&i| eig.eigenvalues[i].max(0.0)));
    let mut eigenvectors = DMatrix::zeros(n, n);
    for (dst, &src) in order.iter().enumerate() {
        let mut v = eig.eigenvectors.column(src).into_owned();
        fix_sign(&mut v);
        eigenvectors.set_column(dst, &v);
    }
    SpectrumSnapshot::from_parts(g.t, eigenvalues, eigenvectors)
}

/// Flips `v` so that its largest-magnitude entry (first one on ties) is positive.
pub fn fix_sign(v: &mut DVector<f64>) {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if x.abs() > v[best].abs() {
            best = i;
        }
    }
    if !v.is_empty() && v[best] < 0.0 {
        v.neg_mut();
    }
}

/// Leading `k` eigenvectors of the FIM `F = A A^T`, obtained from the Gramian
/// spectrum as `w_i = A v_i / sqrt(lambda_i)`.
pub fn fim_eigvecs(jacobian: &DMatrix<f64>, spec: &SpectrumSnapshot, k: usize) -> Result<DMatrix<f64>> {
    if jacobian.ncols() != spec.n() {
        return Err(Error::dim(format!(
            "jacobian has {} columns, spectrum has N={}",
            jacobian.ncols(),
            spec.n()
        )));
    }
    let mut omega = DMatrix::zeros(jacobian.nrows(), k);
    for i in 0..k {
        let lambda = spec.require_positive(i)?;
        let w = jacobian * spec.eigenvectors.column(i) / lambda.sqrt();
        omega.set_column(i, &w);
    }
    Ok(omega)
}

/// Kernel rows `g(X'_j, X)` for a set of query points.
#[derive(Clone, Debug, PartialEq)]
pub struct CrossKernel {
    /// `M x N`
    pub rows: DMatrix<f64>,
}

/// Gradient-similarity kernel between query points `x_query` (`M x d`) and
/// training points `x_train` (`N x d`).
pub fn cross_kernel<M: Model>(model: &M, x_query: &DMatrix<f64>, x_train: &DMatrix<f64>) -> Result<CrossKernel> {
    Ok(CrossKernel {
        rows: model.kernel(x_query, x_train)?,
    })
}

/// Estimate of kernel eigenfunction `i` at the query points,
/// `g(X', X) v_i / lambda_i`.
pub fn eigenfunction_extend(cross: &CrossKernel, spec: &SpectrumSnapshot, i: usize) -> Result<DVector<f64>> {
    if cross.rows.ncols() != spec.n() {
        return Err(Error::dim(format!(
            "cross kernel has {} columns, spectrum has N={}",
            cross.rows.ncols(),
            spec.n()
        )));
    }
    let lambda = spec.require_positive(i)?;
    Ok(&cross.rows * spec.eigenvectors.column(i) / lambda)
}
