//! First-order training dynamics in function space.
//!
//! Under gradient descent on the L2 loss the outputs at the training points
//! move, to first order, as `df = -(delta/N) G m`. When the Gramian is frozen
//! this recursion has a closed form per eigenmode, which this module
//! evaluates at training points and (through two equivalent routes) at
//! arbitrary test points. It also carries the probes that check the pieces of
//! that picture on real networks: FIM duality, the loss-gradient spectral
//! decomposition, the Gauss-Newton approximation of the loss Hessian and the
//! first-order change of the Gramian itself.

use log::debug;
use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::nn::{loss_gradient, Dataset, Model, TrainingTrace};
use crate::spectral::{fim_eigvecs, CrossKernel, Gramian, SpectrumSnapshot};

/// Outputs and residual at one step.
#[derive(Clone, Debug, PartialEq)]
pub struct DynamicsState {
    pub t: u64,
    pub outputs: DVector<f64>,
    pub residual: DVector<f64>,
    pub delta: f64,
}

impl DynamicsState {
    /// Checks `residual == outputs - labels` to `tol` (max-abs).
    pub fn is_consistent(&self, labels: &DVector<f64>, tol: f64) -> bool {
        (&self.outputs - labels - &self.residual).amax() <= tol
    }
}

/// `df = -(delta / N) G m`.
pub fn first_order_step(g: &Gramian, residual: &DVector<f64>, delta: f64) -> Result<DVector<f64>> {
    let n = g.n();
    if residual.len() != n {
        return Err(Error::dim(format!(
            "residual has {} entries, gramian is {n}x{n}",
            residual.len()
        )));
    }
    Ok(&g.matrix * residual * (-delta / n as f64))
}

/// How well the first-order prediction explains one real step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FirstOrderReport {
    pub t: u64,
    /// `||df_true - df_pred|| / ||df_true||`
    pub error: f64,
    /// Cosine between `df_true` and `df_pred`.
    pub cos_alpha: f64,
}

impl FirstOrderReport {
    pub fn compare(t: u64, actual: &DVector<f64>, predicted: &DVector<f64>) -> Result<Self> {
        if actual.len() != predicted.len() {
            return Err(Error::dim("differential lengths differ"));
        }
        let na = actual.norm();
        let np = predicted.norm();
        if na == 0.0 || np == 0.0 {
            return Err(Error::ZeroVector);
        }
        Ok(Self {
            t,
            error: (actual - predicted).norm() / na,
            cos_alpha: (actual.dot(predicted) / (na * np)).clamp(-1.0, 1.0),
        })
    }
}

/// Compares the recorded step `t -> t+1` of a full-batch GD run with the
/// first-order prediction built from the Gramian at `t`.
pub fn verify_first_order<M: Model>(trace: &TrainingTrace<M>, data: &Dataset, t: u64) -> Result<FirstOrderReport> {
    let now = trace.require(t)?;
    let next = trace.require(t + 1)?;
    let g = Gramian::from_model(t, &now.model, &data.inputs)?;
    let predicted = first_order_step(&g, &now.residual, now.delta)?;
    let actual = &next.outputs - &now.outputs;
    FirstOrderReport::compare(t, &actual, &predicted)
}

/// `(1 - rate)^t`, evaluated in log-magnitude with the sign tracked.
pub fn mode_power(rate: f64, t: u64) -> f64 {
    if t == 0 {
        return 1.0;
    }
    let r = 1.0 - rate;
    if r == 0.0 {
        return 0.0;
    }
    let mag = (t as f64 * (-rate).ln_1p_abs()).exp();
    if r < 0.0 && t % 2 == 1 {
        -mag
    } else {
        mag
    }
}

/// `1 - (1 - rate)^t` without cancellation for small `rate * t`.
pub fn mode_gain(rate: f64, t: u64) -> f64 {
    if t == 0 {
        return 0.0;
    }
    if rate < 1.0 {
        -(t as f64 * (-rate).ln_1p()).exp_m1()
    } else {
        1.0 - mode_power(rate, t)
    }
}

trait Ln1pAbs {
    fn ln_1p_abs(self) -> f64;
}

impl Ln1pAbs for f64 {
    /// `ln |1 + self|`.
    fn ln_1p_abs(self) -> f64 {
        if self > -1.0 {
            self.ln_1p()
        } else {
            (-(1.0 + self)).ln()
        }
    }
}

/// Closed-form L2 dynamics for a frozen Gramian.
#[derive(Clone, Debug)]
pub struct ConstantKernelModel {
    pub spectrum: SpectrumSnapshot,
    pub f0: DVector<f64>,
    pub m0: DVector<f64>,
    /// Part of `m0` in the (numerical) null space of the Gramian.
    pub m0_null: DVector<f64>,
    /// `<v_i, m0>` for every mode.
    pub coefficients: DVector<f64>,
    pub delta: f64,
    /// Number of retained (non-zero) modes, `N'`.
    pub retained: usize,
}

impl ConstantKernelModel {
    /// Modes with `lambda_i <= 1e-10 lambda_max` are folded into the null space.
    pub fn new(spectrum: SpectrumSnapshot, f0: DVector<f64>, m0: DVector<f64>, delta: f64) -> Result<Self> {
        let n = spectrum.n();
        if f0.len() != n || m0.len() != n {
            return Err(Error::dim(format!(
                "spectrum has N={n}, f0 has {}, m0 has {}",
                f0.len(),
                m0.len()
            )));
        }
        let retained = spectrum.rank();
        if retained < n {
            debug!("constant-kernel model: {} near-zero modes folded into null space", n - retained);
        }
        let coefficients = spectrum.coefficients(&m0);
        let null_vecs = spectrum.eigenvectors.columns(retained, n - retained);
        let m0_null = null_vecs * coefficients.rows(retained, n - retained);
        Ok(Self {
            spectrum,
            f0,
            m0,
            m0_null,
            coefficients,
            delta,
            retained,
        })
    }

    pub fn n(&self) -> usize {
        self.spectrum.n()
    }

    /// `delta * lambda_i / N`
    pub fn rate(&self, i: usize) -> f64 {
        self.delta * self.spectrum.eigenvalues[i] / self.n() as f64
    }

    /// `(f_t, m_t)` at the training points.
    pub fn closed_form_train(&self, t: u64) -> (DVector<f64>, DVector<f64>) {
        let mut m = self.m0_null.clone();
        let mut f = self.f0.clone();
        for i in 0..self.retained {
            let v = self.spectrum.eigenvectors.column(i);
            let c = self.coefficients[i];
            m.axpy(mode_power(self.rate(i), t) * c, &v, 1.0);
            f.axpy(-mode_gain(self.rate(i), t) * c, &v, 1.0);
        }
        (f, m)
    }

    /// Per-mode coefficients `(<v_i, m_t>, <v_i, f_t>)` for the retained modes.
    pub fn mode_coefficients(&self, t: u64) -> (DVector<f64>, DVector<f64>) {
        let f0c = self.spectrum.coefficients(&self.f0);
        let mut cm = DVector::zeros(self.retained);
        let mut cf = DVector::zeros(self.retained);
        for i in 0..self.retained {
            let c = self.coefficients[i];
            cm[i] = mode_power(self.rate(i), t) * c;
            cf[i] = f0c[i] - mode_gain(self.rate(i), t) * c;
        }
        (cm, cf)
    }

    /// Closed-form residual after `t` steps, written as per-mode sums.
    pub fn residual_coefficient(&self, i: usize, t: u64) -> f64 {
        if i >= self.retained {
            self.coefficients[i]
        } else {
            mode_power(self.rate(i), t) * self.coefficients[i]
        }
    }
}

/// Test-point predictor through the FIM eigenvectors and the initial gradient
/// at the query point.
#[derive(Clone, Debug)]
pub struct GradientPredictor<M> {
    model0: M,
    /// `|theta| x N'` FIM eigenvectors `w_i`.
    omega: DMatrix<f64>,
}

impl<M: Model> GradientPredictor<M> {
    pub fn new(ck: &ConstantKernelModel, model0: M, x_train: &DMatrix<f64>) -> Result<Self> {
        let a = model0.jacobian(x_train)?;
        let omega = fim_eigvecs(&a, &ck.spectrum, ck.retained)?;
        Ok(Self { model0, omega })
    }

    /// `f_t(x') = f_0(x') - sum_i [1 - (1 - delta lambda_i / N)^t]
    /// <v_i, m0> <w_i, grad f_0(x')> / sqrt(lambda_i)`.
    pub fn predict(&self, ck: &ConstantKernelModel, x: &[f64], t: u64) -> Result<f64> {
        let xm = DMatrix::from_row_slice(1, x.len(), x);
        let f0 = self.model0.forward_batch(&xm)?[0];
        let grad = self.model0.grad_sample(x)?;
        let proj = self.omega.tr_mul(&grad);
        let mut f = f0;
        for i in 0..ck.retained {
            let lambda = ck.spectrum.eigenvalues[i];
            f -= mode_gain(ck.rate(i), t) * ck.coefficients[i] * proj[i] / lambda.sqrt();
        }
        Ok(f)
    }
}

impl<M: Model> GradientPredictor<M> {
    /// Trajectories at every row of `x_query` for every step (`steps x M`).
    pub fn predict_batch(&self, ck: &ConstantKernelModel, x_query: &DMatrix<f64>, steps: &[u64]) -> Result<DMatrix<f64>> {
        let f0 = self.model0.forward_batch(x_query)?;
        let proj = self.omega.transpose() * self.model0.jacobian(x_query)?;
        let mut out = DMatrix::zeros(steps.len(), x_query.nrows());
        for (row, &t) in steps.iter().enumerate() {
            let w = DVector::from_fn(ck.retained, |i, _| {
                mode_gain(ck.rate(i), t) * ck.coefficients[i] / ck.spectrum.eigenvalues[i].sqrt()
            });
            let f = &f0 - proj.tr_mul(&w);
            out.set_row(row, &f.transpose());
        }
        Ok(out)
    }
}

/// Single-point form of [`GradientPredictor::predict`].
pub fn closed_form_test_gradient<M: Model>(
    ck: &ConstantKernelModel,
    model0: &M,
    x_train: &DMatrix<f64>,
    x: &[f64],
    t: u64,
) -> Result<f64> {
    GradientPredictor::new(ck, model0.clone(), x_train)?.predict(ck, x, t)
}

/// Test-point predictor through kernel eigenfunction estimates.
#[derive(Clone, Debug)]
pub struct EigenfunctionPredictor {
    f0: DVector<f64>,
    /// `M x N'` eigenfunction values `g(X', X) v_i / lambda_i`.
    eigenfunctions: DMatrix<f64>,
}

impl EigenfunctionPredictor {
    pub fn new(ck: &ConstantKernelModel, cross: &CrossKernel, f0_query: DVector<f64>) -> Result<Self> {
        if cross.rows.nrows() != f0_query.len() {
            return Err(Error::dim("query outputs and cross kernel rows differ"));
        }
        if cross.rows.ncols() != ck.n() {
            return Err(Error::dim("cross kernel columns differ from N"));
        }
        let r = ck.retained;
        let mut eigenfunctions = &cross.rows * ck.spectrum.eigenvectors.columns(0, r);
        for i in 0..r {
            let lambda = ck.spectrum.eigenvalues[i];
            eigenfunctions.column_mut(i).scale_mut(1.0 / lambda);
        }
        Ok(Self {
            f0: f0_query,
            eigenfunctions,
        })
    }

    /// `f_t(x') = f_0(x') - sum_i [1 - (1 - delta lambda_i / N)^t] <v_i, m0> u_i(x')`.
    pub fn predict(&self, ck: &ConstantKernelModel, t: u64) -> DVector<f64> {
        let weights = DVector::from_fn(ck.retained, |i, _| mode_gain(ck.rate(i), t) * ck.coefficients[i]);
        &self.f0 - &self.eigenfunctions * weights
    }
}

pub fn closed_form_test_eigenfunction(
    ck: &ConstantKernelModel,
    cross: &CrossKernel,
    f0_query: &DVector<f64>,
    t: u64,
) -> Result<DVector<f64>> {
    Ok(EigenfunctionPredictor::new(ck, cross, f0_query.clone())?.predict(ck, t))
}

/// Information-flow speed `1 - |1 - delta lambda / N|`.
pub fn info_speed(lambda: f64, delta: f64, n: usize) -> f64 {
    1.0 - (1.0 - delta * lambda / n as f64).abs()
}

/// Largest stable learning rate `2N / lambda_max` (infinite for a zero kernel).
pub fn stability_bound(spec: &SpectrumSnapshot, n: usize) -> f64 {
    let lmax = spec.lambda_max();
    if lmax > 0.0 {
        2.0 * n as f64 / lmax
    } else {
        f64::INFINITY
    }
}

/// Default central-difference step for Hessian-vector products.
pub fn default_hvp_eps(theta: &[f64]) -> f64 {
    let inf = theta.iter().fold(0.0f64, |a, b| a.max(b.abs()));
    1e-4 * (1.0 + inf)
}

/// Gradients at every row of `x` with the parameters shifted by `shift`.
fn shifted_jacobian<M: Model>(model: &M, x: &DMatrix<f64>, shift: &DVector<f64>) -> Result<DMatrix<f64>> {
    let theta: Vec<f64> = model.params().iter().zip(shift.iter()).map(|(p, s)| p + s).collect();
    model.with_params(&theta)?.jacobian(x)
}

/// Model-Hessian times `v` at every row of `x` (`|theta| x M`), by central
/// differences of exact gradients along the unit direction of `v`.
pub fn hvp_batch<M: Model>(model: &M, x: &DMatrix<f64>, v: &DVector<f64>, eps: Option<f64>) -> Result<DMatrix<f64>> {
    if v.len() != model.num_params() {
        return Err(Error::dim(format!(
            "direction has {} entries, model has {} parameters",
            v.len(),
            model.num_params()
        )));
    }
    let eps = eps.unwrap_or_else(|| default_hvp_eps(model.params()));
    if !(eps > 0.0) {
        return Err(Error::Config("hvp step must be positive".into()));
    }
    let norm = v.norm();
    if norm == 0.0 {
        return Ok(DMatrix::zeros(v.len(), x.nrows()));
    }
    let step = v * (eps / norm);
    let plus = shifted_jacobian(model, x, &step)?;
    let minus = shifted_jacobian(model, x, &(-&step))?;
    let h = (plus - minus) * (norm / (2.0 * eps));
    if !h.iter().all(|v| v.is_finite()) {
        return Err(Error::NonFinite {
            what: "hessian-vector product".into(),
            step: None,
        });
    }
    Ok(h)
}

/// `H(x) v` for a single input point.
pub fn hvp<M: Model>(model: &M, x: &[f64], v: &DVector<f64>, eps: Option<f64>) -> Result<DVector<f64>> {
    let xm = DMatrix::from_row_slice(1, x.len(), x);
    Ok(hvp_batch(model, &xm, v, eps)?.column(0).into_owned())
}

/// First-order change of the Gramian over one GD step,
/// `dG = -(delta/N) (Q + Q^T)` with column `i` of `Q` equal to
/// `A^T H(X^i) A m`.
pub fn gramian_differential<M: Model>(
    model: &M,
    x_train: &DMatrix<f64>,
    jacobian: &DMatrix<f64>,
    residual: &DVector<f64>,
    delta: f64,
    eps: Option<f64>,
) -> Result<DMatrix<f64>> {
    let n = x_train.nrows();
    if jacobian.ncols() != n || residual.len() != n {
        return Err(Error::dim("jacobian, residual and inputs disagree on N"));
    }
    let direction = jacobian * residual;
    let w = hvp_batch(model, x_train, &direction, eps)?;
    let q = jacobian.transpose() * w;
    Ok((&q + q.transpose()) * (-delta / n as f64))
}

/// Frobenius error of [`gramian_differential`] against the Gramian change of
/// one actual full-batch GD step of size `delta`.
pub fn gramian_step_error<M: Model>(
    model: &M,
    x_train: &DMatrix<f64>,
    residual: &DVector<f64>,
    delta: f64,
    eps: Option<f64>,
) -> Result<f64> {
    let n = x_train.nrows();
    let a = model.jacobian(x_train)?;
    let predicted = gramian_differential(model, x_train, &a, residual, delta, eps)?;
    let step = &a * residual * (-delta / n as f64);
    let moved: Vec<f64> = model.params().iter().zip(step.iter()).map(|(p, s)| p + s).collect();
    let before = a.transpose() * &a;
    let after = model.with_params(&moved)?.kernel(x_train, x_train)?;
    Ok((after - before - predicted).norm())
}

/// Result of moving the parameters along one FIM eigenvector.
#[derive(Clone, Debug)]
pub struct DualityProbe {
    pub index: usize,
    /// `f(theta + eps sqrt(lambda_i) w_i) - f(theta)` at the training points.
    pub measured: DVector<f64>,
    /// `eps lambda_i v_i`
    pub predicted: DVector<f64>,
    /// Projections `<v_j, measured>` onto every Gramian eigenvector.
    pub projections: DVector<f64>,
}

impl DualityProbe {
    pub fn relative_deviation(&self) -> f64 {
        (&self.measured - &self.predicted).norm() / self.predicted.norm()
    }

    /// Largest off-mode projection relative to the on-mode projection.
    pub fn cross_talk(&self) -> f64 {
        let own = self.projections[self.index].abs();
        let other = self
            .projections
            .iter()
            .enumerate()
            .filter(|&(j, _)| j != self.index)
            .fold(0.0f64, |a, (_, p)| a.max(p.abs()));
        other / own
    }
}

pub fn fim_duality_probe<M: Model>(
    model: &M,
    x_train: &DMatrix<f64>,
    jacobian: &DMatrix<f64>,
    spec: &SpectrumSnapshot,
    index: usize,
    eps: f64,
) -> Result<DualityProbe> {
    let omega = fim_eigvecs(jacobian, spec, index + 1)?;
    let lambda = spec.eigenvalues[index];
    let shift = omega.column(index) * (eps * lambda.sqrt());
    let moved: Vec<f64> = model.params().iter().zip(shift.iter()).map(|(p, s)| p + s).collect();
    let measured = model.with_params(&moved)?.forward_batch(x_train)? - model.forward_batch(x_train)?;
    let predicted = spec.vector(index) * (eps * lambda);
    let projections = spec.coefficients(&measured);
    Ok(DualityProbe {
        index,
        measured,
        predicted,
        projections,
    })
}

/// Max-abs difference between `(1/N) A m` and its spectral expansion
/// `(1/N) sum_i sqrt(lambda_i) <v_i, m> w_i`.
pub fn loss_gradient_decomposition_check(
    jacobian: &DMatrix<f64>,
    spec: &SpectrumSnapshot,
    residual: &DVector<f64>,
    n: usize,
) -> Result<f64> {
    let direct = jacobian * residual / n as f64;
    let rank = spec.rank();
    let omega = fim_eigvecs(jacobian, spec, rank)?;
    let coeffs = spec.coefficients(residual);
    let mut spectral = DVector::zeros(jacobian.nrows());
    for i in 0..rank {
        spectral.axpy(spec.eigenvalues[i].sqrt() * coeffs[i] / n as f64, &omega.column(i), 1.0);
    }
    Ok((direct - spectral).amax())
}

/// `||H - F/N||_F / ||F/N||_F` with `H` the finite-difference loss Hessian
/// and `F = A A^T`.
pub fn loss_hessian_relation_check<M: Model>(model: &M, data: &Dataset, eps: f64) -> Result<f64> {
    let p = model.num_params();
    let mut hessian = DMatrix::zeros(p, p);
    for j in 0..p {
        let mut plus = model.clone();
        plus.params_mut()[j] += eps;
        let mut minus = model.clone();
        minus.params_mut()[j] -= eps;
        let col = (loss_gradient(&plus, data)? - loss_gradient(&minus, data)?) / (2.0 * eps);
        hessian.set_column(j, &col);
    }
    let hessian = (&hessian + hessian.transpose()) * 0.5;
    let a = model.jacobian(&data.inputs)?;
    let fim = &a * a.transpose() / data.len() as f64;
    let denom = fim.norm();
    if denom == 0.0 {
        return Err(Error::ZeroVector);
    }
    Ok((hessian - &fim).norm() / denom)
}

/// CSV with header `t,error,cos_alpha`.
pub fn first_order_csv(reports: &[FirstOrderReport]) -> String {
    let mut out = String::from("t,error,cos_alpha\n");
    for r in reports {
        out.push_str(&format!("{},{:e},{:e}\n", r.t, r.error, r.cos_alpha));
    }
    out
}

/// CSV with header `t,mode,coef_m,coef_f`; modes are 1-based.
pub fn mode_trajectory_csv(ck: &ConstantKernelModel, steps: &[u64], modes: &[usize]) -> String {
    let mut out = String::from("t,mode,coef_m,coef_f\n");
    for &t in steps {
        let (cm, cf) = ck.mode_coefficients(t);
        for &mode in modes {
            if mode == 0 || mode > ck.retained {
                continue;
            }
            out.push_str(&format!("{t},{mode},{:e},{:e}\n", cm[mode - 1], cf[mode - 1]));
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{Activation, FeatureModel, Network, NetworkConfig};
    use crate::spectral::{cross_kernel, eig_sym, gramian};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_vec(n: usize, seed: u64) -> DVector<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        DVector::from_fn(n, |_, _| rng.gen_range(-1.0..1.0))
    }

    fn random_mat(r: usize, c: usize, seed: u64) -> DMatrix<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        DMatrix::from_fn(r, c, |_, _| rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn zero_residual_no_motion() {
        let g = gramian(&random_mat(5, 4, 1));
        let df = first_order_step(&g, &DVector::zeros(4), 0.3).unwrap();
        assert!(df.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn scaled_identity_kernel_fits_in_one_step() {
        let n = 6;
        let g = Gramian::new(0, DMatrix::identity(n, n) * n as f64).unwrap();
        let m = random_vec(n, 2);
        let df = first_order_step(&g, &m, 1.0).unwrap();
        assert!((df + &m).amax() < 1e-15);
    }

    #[test]
    fn first_order_step_matches_parameter_space_route() {
        let cfg = NetworkConfig::new(2, vec![5], Activation::Tanh).with_seed(1);
        let net = Network::init(&cfg).unwrap();
        let x = random_mat(7, 2, 3);
        let m = random_vec(7, 4);
        let delta = 0.2;
        let a = net.jacobian(&x).unwrap();
        let dtheta = -(&a * &m) * (delta / 7.0);
        let long_way = a.tr_mul(&dtheta);
        let g = Gramian::from_model(0, &net, &x).unwrap();
        let short_way = first_order_step(&g, &m, delta).unwrap();
        assert!((long_way - short_way).amax() < 1e-13);
    }

    #[test]
    fn mode_power_matches_powi() {
        for &rate in &[0.0f64, 0.3, 1.0, 1.5, 1.99, 2.3] {
            for &t in &[0u64, 1, 2, 7, 40] {
                let expect = (1.0 - rate).powi(t as i32);
                let got = mode_power(rate, t);
                assert!((got - expect).abs() <= 1e-12 * (1.0 + expect.abs()), "{rate} {t}");
                assert!((mode_gain(rate, t) - (1.0 - expect)).abs() <= 1e-12 * (1.0 + expect.abs()));
            }
        }
        // No overflow trouble for very long horizons.
        assert_eq!(mode_power(0.5, 1_000_000), 0.0);
        assert_eq!(mode_gain(0.5, 1_000_000), 1.0);
    }

    fn small_model(n: usize, rank: usize, seed: u64) -> (Gramian, ConstantKernelModel) {
        let a = random_mat(rank, n, seed);
        let g = gramian(&a);
        let spec = eig_sym(&g).unwrap();
        let f0 = random_vec(n, seed + 1) * 0.1;
        let y = random_vec(n, seed + 2);
        let delta = n as f64 / spec.lambda_max();
        let ck = ConstantKernelModel::new(spec, f0.clone(), &f0 - y, delta).unwrap();
        (g, ck)
    }

    #[test]
    fn closed_form_base_case() {
        let (_, ck) = small_model(8, 8, 1);
        let (f, m) = ck.closed_form_train(0);
        assert!((f - &ck.f0).amax() < 1e-14);
        assert!((m - &ck.m0).amax() < 1e-14);
    }

    #[test]
    fn closed_form_matches_iteration() {
        let (g, ck) = small_model(20, 12, 5);
        let mut f = ck.f0.clone();
        let mut m = ck.m0.clone();
        for _ in 0..500 {
            let df = first_order_step(&g, &m, ck.delta).unwrap();
            f += &df;
            m += &df;
        }
        let (fc, mc) = ck.closed_form_train(500);
        assert!((&fc - &f).norm() < 1e-9 * f.norm());
        assert!((&mc - &m).norm() < 1e-9 * m.norm());
        // Rank-deficient kernel: the null-space part of m0 never moves.
        assert!((mc - &ck.m0_null).norm() < 1e-6 * ck.m0.norm());
    }

    #[test]
    fn full_rank_converges_to_labels() {
        let (_, ck) = small_model(10, 30, 7);
        let y = &ck.f0 - &ck.m0;
        let (f, m) = ck.closed_form_train(2_000_000);
        assert!((f - y).amax() < 1e-10);
        assert!(m.amax() < 1e-10);
    }

    proptest! {
        #[test]
        fn signal_conservation(seed in 0u64..200, t in 0u64..5000) {
            let (_, ck) = small_model(9, 6, seed);
            let (f, m) = ck.closed_form_train(t);
            prop_assert!(((&f - &ck.f0) - (&m - &ck.m0)).amax() < 1e-10);
        }

        #[test]
        fn per_mode_decay_is_monotone(seed in 0u64..100, scale in 0.1f64..3.0) {
            let (_, mut ck) = small_model(7, 7, seed);
            ck.delta *= scale;
            for i in 0..ck.retained {
                let rate = ck.rate(i);
                let c: Vec<f64> = (0..30).map(|t| ck.residual_coefficient(i, t).abs()).collect();
                for w in c.windows(2) {
                    if rate > 0.0 && rate < 2.0 {
                        prop_assert!(w[1] <= w[0] * (1.0 + 1e-12));
                    } else if rate > 2.0 && w[0] > 0.0 {
                        prop_assert!(w[1] > w[0]);
                    }
                }
            }
        }
    }

    #[test]
    fn info_speed_values() {
        assert_eq!(info_speed(0.0, 0.5, 10), 0.0);
        assert_eq!(info_speed(10.0, 1.0, 10), 1.0);
        assert!((info_speed(19.0, 1.0, 10) - 0.1).abs() < 1e-12);
        assert!((info_speed(19.0, 0.5, 10) - 0.95).abs() < 1e-12);
    }

    #[test]
    fn stability_bound_values() {
        let spec = eig_sym(&Gramian::new(0, DMatrix::from_element(1, 1, 3.0)).unwrap()).unwrap();
        assert_eq!(stability_bound(&spec, 3), 2.0);
        let zero = eig_sym(&Gramian::new(0, DMatrix::zeros(2, 2)).unwrap()).unwrap();
        assert_eq!(stability_bound(&zero, 2), f64::INFINITY);
    }

    /// `f = theta_1 * theta_2`, input ignored.
    #[derive(Clone)]
    struct Bilinear(Vec<f64>);

    impl Model for Bilinear {
        fn input_dim(&self) -> usize {
            1
        }
        fn params(&self) -> &[f64] {
            &self.0
        }
        fn params_mut(&mut self) -> &mut [f64] {
            &mut self.0
        }
        fn forward_batch(&self, x: &DMatrix<f64>) -> Result<DVector<f64>> {
            Ok(DVector::from_element(x.nrows(), self.0[0] * self.0[1]))
        }
        fn grad_sample(&self, _x: &[f64]) -> Result<DVector<f64>> {
            Ok(DVector::from_column_slice(&[self.0[1], self.0[0]]))
        }
    }

    #[test]
    fn bilinear_hvp_swaps_components() {
        let m = Bilinear(vec![0.7, -1.3]);
        let h = hvp(&m, &[0.0], &DVector::from_column_slice(&[2.0, 5.0]), None).unwrap();
        assert!((h - DVector::from_column_slice(&[5.0, 2.0])).amax() < 1e-9);
    }

    #[test]
    fn linear_model_has_zero_hessian_and_constant_kernel() {
        let m = FeatureModel::random_cosine(2, 6, 2.0, 1);
        let x = random_mat(5, 2, 2);
        let v = random_vec(m.num_params(), 3);
        assert!(hvp(&m, &[0.2, 0.4], &v, None).unwrap().amax() < 1e-12);
        let a = m.jacobian(&x).unwrap();
        let dg = gramian_differential(&m, &x, &a, &random_vec(5, 4), 0.1, None).unwrap();
        assert!(dg.amax() < 1e-12);
    }

    #[test]
    fn hessian_is_symmetric() {
        let cfg = NetworkConfig::new(2, vec![4, 4], Activation::Tanh).with_seed(6);
        let net = Network::init(&cfg).unwrap();
        let u = random_vec(net.num_params(), 7);
        let v = random_vec(net.num_params(), 8);
        let x = [0.3, -0.4];
        let uhv = u.dot(&hvp(&net, &x, &v, None).unwrap());
        let vhu = v.dot(&hvp(&net, &x, &u, None).unwrap());
        assert!((uhv - vhu).abs() < 1e-5 * uhv.abs().max(vhu.abs()));
    }

    #[test]
    fn gramian_differential_is_symmetric() {
        let cfg = NetworkConfig::new(2, vec![6], Activation::Tanh).with_seed(3);
        let net = Network::init(&cfg).unwrap();
        let x = random_mat(6, 2, 1);
        let a = net.jacobian(&x).unwrap();
        let dg = gramian_differential(&net, &x, &a, &random_vec(6, 2), 0.1, None).unwrap();
        assert!((&dg - dg.transpose()).amax() <= 1e-15 * dg.amax().max(1.0));
    }

    #[test]
    fn loss_gradient_decomposition() {
        let a = random_mat(9, 14, 11);
        let spec = eig_sym(&gramian(&a)).unwrap();
        let m = random_vec(14, 12);
        let dev = loss_gradient_decomposition_check(&a, &spec, &m, 14).unwrap();
        assert!(dev < 1e-9 * (&a * &m / 14.0).norm());

        // Residual in the null space of A.
        let null = spec.vector(12);
        assert!((&a * &null).amax() < 1e-12);
        assert!(loss_gradient_decomposition_check(&a, &spec, &null, 14).unwrap() < 1e-12);

        // Single-mode residual.
        let v1 = spec.vector(0);
        let w = fim_eigvecs(&a, &spec, 1).unwrap();
        let grad = &a * &v1 / 14.0;
        let expect = w.column(0) * (spec.eigenvalues[0].sqrt() / 14.0);
        assert!((grad - expect).amax() < 1e-12);
    }

    #[test]
    fn duality_probe_on_linear_model_is_exact() {
        let m = FeatureModel::random_cosine(2, 12, 2.0, 4);
        let x = random_mat(8, 2, 5);
        let a = m.jacobian(&x).unwrap();
        let spec = eig_sym(&gramian(&a)).unwrap();
        for eps in [1e-3, 0.5] {
            let p = fim_duality_probe(&m, &x, &a, &spec, 1, eps).unwrap();
            assert!(p.relative_deviation() < 1e-10);
        }
    }

    #[test]
    fn test_point_routes_agree_on_training_points() {
        let m = FeatureModel::random_cosine(2, 10, 3.0, 8);
        let x = random_mat(15, 2, 9);
        let y = random_vec(15, 10);
        let f0 = m.forward_batch(&x).unwrap();
        let spec = eig_sym(&Gramian::from_model(0, &m, &x).unwrap()).unwrap();
        let delta = 15.0 / spec.lambda_max();
        let ck = ConstantKernelModel::new(spec, f0.clone(), &f0 - &y, delta).unwrap();
        let cross = cross_kernel(&m, &x, &x).unwrap();
        for t in [0u64, 3, 50] {
            let (ft, _) = ck.closed_form_train(t);
            let via_eig = closed_form_test_eigenfunction(&ck, &cross, &f0, t).unwrap();
            assert!((&via_eig - &ft).norm() < 1e-8 * ft.norm());
            let xi: Vec<f64> = x.row(4).iter().copied().collect();
            let via_grad = closed_form_test_gradient(&ck, &m, &x, &xi, t).unwrap();
            assert!((via_grad - ft[4]).abs() < 1e-8 * ft.norm());
        }
    }

    #[test]
    fn batch_gradient_route_matches_single_point() {
        let m = FeatureModel::random_cosine(2, 9, 2.0, 3);
        let x = random_mat(12, 2, 4);
        let xq = random_mat(5, 2, 5);
        let f0 = m.forward_batch(&x).unwrap();
        let spec = eig_sym(&Gramian::from_model(0, &m, &x).unwrap()).unwrap();
        let ck = ConstantKernelModel::new(spec, f0.clone(), &f0 - random_vec(12, 6), 12.0 / 40.0).unwrap();
        let pred = GradientPredictor::new(&ck, m.clone(), &x).unwrap();
        let batch = pred.predict_batch(&ck, &xq, &[0, 7]).unwrap();
        for q in 0..5 {
            let xi: Vec<f64> = xq.row(q).iter().copied().collect();
            assert!((batch[(1, q)] - pred.predict(&ck, &xi, 7).unwrap()).abs() < 1e-12);
        }
        assert!((batch.row(0).transpose() - m.forward_batch(&xq).unwrap()).amax() < 1e-12);
    }

    #[test]
    fn gramian_step_error_is_second_order() {
        let cfg = NetworkConfig::new(2, vec![6, 6], Activation::Tanh).with_seed(2);
        let net = Network::init(&cfg).unwrap();
        let x = random_mat(10, 2, 3);
        let m = random_vec(10, 4);
        let e1 = gramian_step_error(&net, &x, &m, 0.4, None).unwrap();
        let e2 = gramian_step_error(&net, &x, &m, 0.2, None).unwrap();
        let ratio = e1 / e2;
        assert!((3.0..5.0).contains(&ratio), "{ratio}");
    }

    #[test]
    fn mode_csv_shape() {
        let (_, ck) = small_model(5, 5, 3);
        let csv = mode_trajectory_csv(&ck, &[0, 10], &[1, 2]);
        assert_eq!(csv.lines().count(), 5);
        assert!(csv.starts_with("t,mode,coef_m,coef_f\n"));
    }
}
