use nalgebra::{DMatrix, DMatrixView, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::config::{Activation, NetworkConfig};
use super::model::{check_input, ensure_finite, Model};
use crate::error::{Error, Result};

/// One affine layer inside the flat parameter vector.
///
/// Weights are stored row-major as `fan_out x fan_in` starting at `offset`,
/// followed by `fan_out` biases.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LayerShape {
    pub fan_in: usize,
    pub fan_out: usize,
    pub offset: usize,
    /// Output is `act(z) + input` (hidden layers of matching width only).
    pub shortcut: bool,
    pub hidden: bool,
}

impl LayerShape {
    pub fn weight_len(&self) -> usize {
        self.fan_in * self.fan_out
    }

    pub fn bias_offset(&self) -> usize {
        self.offset + self.weight_len()
    }

    pub fn end(&self) -> usize {
        self.bias_offset() + self.fan_out
    }
}

/// Fully-connected scalar-output network with a flat parameter vector.
#[derive(Clone, Debug, PartialEq)]
pub struct Network {
    config: NetworkConfig,
    layers: Vec<LayerShape>,
    theta: Vec<f64>,
}

/// Per-layer quantities from one batched forward pass.
struct ForwardCache {
    /// Input to each layer (`N x fan_in`); `inputs[0]` is the data.
    inputs: Vec<DMatrix<f64>>,
    /// Pre-activations of each layer (`N x fan_out`).
    pre: Vec<DMatrix<f64>>,
}

impl Network {
    /// Xavier-uniform weights and zero biases, seeded from `config.seed`.
    pub fn init(config: &NetworkConfig) -> Result<Self> {
        Self::init_with_seed(config, config.seed)
    }

    pub fn init_with_seed(config: &NetworkConfig, seed: u64) -> Result<Self> {
        let mut net = Self::zeros(config)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for layer in net.layers.clone() {
            let bound = (6.0 / (layer.fan_in + layer.fan_out) as f64).sqrt();
            for w in &mut net.theta[layer.offset..layer.bias_offset()] {
                *w = rng.gen_range(-bound..bound);
            }
        }
        Ok(net)
    }

    pub fn zeros(config: &NetworkConfig) -> Result<Self> {
        config.validate()?;
        let layers = build_layers(config);
        let n = layers.last().map(|l| l.end()).unwrap_or(0);
        Ok(Self {
            config: config.clone(),
            layers,
            theta: vec![0.0; n],
        })
    }

    pub fn from_params(config: &NetworkConfig, theta: Vec<f64>) -> Result<Self> {
        let mut net = Self::zeros(config)?;
        if theta.len() != net.theta.len() {
            return Err(Error::dim(format!(
                "architecture has {} parameters, got {}",
                net.theta.len(),
                theta.len()
            )));
        }
        ensure_finite(&theta, "network parameters")?;
        net.theta = theta;
        Ok(net)
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.config
    }

    pub fn layers(&self) -> &[LayerShape] {
        &self.layers
    }

    pub fn activation(&self) -> Activation {
        self.config.activation
    }

    fn weights_t(&self, layer: &LayerShape) -> DMatrixView<'_, f64> {
        // Row-major `out x in` is column-major `in x out`.
        DMatrixView::from_slice(
            &self.theta[layer.offset..layer.bias_offset()],
            layer.fan_in,
            layer.fan_out,
        )
    }

    fn bias(&self, layer: &LayerShape) -> &[f64] {
        &self.theta[layer.bias_offset()..layer.end()]
    }

    fn forward_cache(&self, x: &DMatrix<f64>) -> ForwardCache {
        let act = self.config.activation;
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut pre = Vec::with_capacity(self.layers.len());
        let mut h = x.clone();
        for layer in &self.layers {
            let mut z = &h * self.weights_t(layer);
            let bias = self.bias(layer);
            for (j, mut col) in z.column_iter_mut().enumerate() {
                col.add_scalar_mut(bias[j]);
            }
            let next = if layer.hidden {
                let mut out = z.map(|v| act.apply(v));
                if layer.shortcut {
                    out += &h;
                }
                out
            } else {
                z.clone()
            };
            inputs.push(h);
            pre.push(z);
            h = next;
        }
        ForwardCache { inputs, pre }
    }

    /// Back-propagates `seed` (one value per sample, the derivative with
    /// respect to the output) and returns the per-sample pre-activation
    /// gradients of every layer. Linear in `seed`.
    fn backward(&self, cache: &ForwardCache, seed: &DVector<f64>) -> Vec<DMatrix<f64>> {
        let act = self.config.activation;
        let n_layers = self.layers.len();
        let mut deltas: Vec<DMatrix<f64>> = vec![DMatrix::zeros(0, 0); n_layers];
        deltas[n_layers - 1] = DMatrix::from_column_slice(seed.len(), 1, seed.as_slice());
        // Gradient with respect to the output of the last hidden layer.
        let mut dh = &deltas[n_layers - 1] * self.weights_t(&self.layers[n_layers - 1]).transpose();
        for l in (0..n_layers - 1).rev() {
            let layer = &self.layers[l];
            let mut d = dh.clone();
            d.zip_apply(&cache.pre[l], |g, z| *g *= act.derivative(z));
            if l > 0 {
                let mut prev = &d * self.weights_t(layer).transpose();
                if layer.shortcut {
                    prev += &dh;
                }
                dh = prev;
            }
            deltas[l] = d;
        }
        deltas
    }

    fn checked_forward(&self, x: &DMatrix<f64>) -> Result<ForwardCache> {
        check_input(x, self.config.input_dim)?;
        let cache = self.forward_cache(x);
        let out = cache.pre.last().expect("at least one layer");
        ensure_finite(out.as_slice(), "network output")?;
        Ok(cache)
    }

    /// Per-sample pre-activation gradients for unit output seeds.
    fn unit_deltas(&self, x: &DMatrix<f64>) -> Result<(ForwardCache, Vec<DMatrix<f64>>)> {
        let cache = self.checked_forward(x)?;
        let deltas = self.backward(&cache, &DVector::from_element(x.nrows(), 1.0));
        for d in &deltas {
            ensure_finite(d.as_slice(), "back-propagated gradient")?;
        }
        Ok((cache, deltas))
    }
}

fn build_layers(config: &NetworkConfig) -> Vec<LayerShape> {
    let dims = config.layer_dims();
    let n_hidden = config.hidden_widths.len();
    let mut offset = 0;
    dims.iter()
        .enumerate()
        .map(|(l, &(fan_in, fan_out))| {
            let hidden = l < n_hidden;
            let shortcut = config.shortcuts && hidden && l > 0 && fan_in == fan_out;
            let shape = LayerShape {
                fan_in,
                fan_out,
                offset,
                shortcut,
                hidden,
            };
            offset = shape.end();
            shape
        })
        .collect()
}

impl Model for Network {
    fn input_dim(&self) -> usize {
        self.config.input_dim
    }

    fn params(&self) -> &[f64] {
        &self.theta
    }

    fn params_mut(&mut self) -> &mut [f64] {
        &mut self.theta
    }

    fn forward_batch(&self, x: &DMatrix<f64>) -> Result<DVector<f64>> {
        let cache = self.checked_forward(x)?;
        let out = cache.pre.last().expect("at least one layer");
        Ok(DVector::from_column_slice(out.as_slice()))
    }

    fn grad_sample(&self, x: &[f64]) -> Result<DVector<f64>> {
        let xm = DMatrix::from_row_slice(1, x.len(), x);
        let a = self.jacobian(&xm)?;
        Ok(a.column(0).into_owned())
    }

    fn jacobian(&self, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        let (cache, deltas) = self.unit_deltas(x)?;
        let n = x.nrows();
        let mut a = DMatrix::zeros(self.theta.len(), n);
        for (s, mut col) in a.column_iter_mut().enumerate() {
            for (l, layer) in self.layers.iter().enumerate() {
                let h = &cache.inputs[l];
                let d = &deltas[l];
                for o in 0..layer.fan_out {
                    let dv = d[(s, o)];
                    let base = layer.offset + o * layer.fan_in;
                    for i in 0..layer.fan_in {
                        col[base + i] = dv * h[(s, i)];
                    }
                    col[layer.bias_offset() + o] = dv;
                }
            }
        }
        Ok(a)
    }

    fn weighted_gradient(&self, x: &DMatrix<f64>, w: &DVector<f64>) -> Result<DVector<f64>> {
        Ok(self.forward_and_gradient(x, |_| w.clone())?.1)
    }

    fn forward_and_gradient<F>(&self, x: &DMatrix<f64>, weights: F) -> Result<(DVector<f64>, DVector<f64>)>
    where
        F: FnOnce(&DVector<f64>) -> DVector<f64>,
    {
        let cache = self.checked_forward(x)?;
        let f = DVector::from_column_slice(cache.pre.last().expect("at least one layer").as_slice());
        let w = weights(&f);
        if w.len() != x.nrows() {
            return Err(Error::dim(format!(
                "weight vector has {} entries for {} samples",
                w.len(),
                x.nrows()
            )));
        }
        let deltas = self.backward(&cache, &w);
        let mut grad = DVector::zeros(self.theta.len());
        for (l, layer) in self.layers.iter().enumerate() {
            // H^T * delta is `in x out`, i.e. the row-major weight layout.
            let gw = cache.inputs[l].transpose() * &deltas[l];
            grad.as_mut_slice()[layer.offset..layer.bias_offset()]
                .copy_from_slice(gw.as_slice());
            for o in 0..layer.fan_out {
                grad[layer.bias_offset() + o] = deltas[l].column(o).sum();
            }
        }
        ensure_finite(grad.as_slice(), "loss gradient")?;
        Ok((f, grad))
    }

    /// Layer-factorized kernel: the weight block of layer `l` contributes
    /// `(Da Db^T) o (Ha Hb^T)` and the bias block `Da Db^T`.
    fn kernel(&self, xa: &DMatrix<f64>, xb: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        let (ca, da) = self.unit_deltas(xa)?;
        let (cb, db) = self.unit_deltas(xb)?;
        let mut k = DMatrix::zeros(xa.nrows(), xb.nrows());
        for l in 0..self.layers.len() {
            let dd = &da[l] * db[l].transpose();
            let mut hh = &ca.inputs[l] * cb.inputs[l].transpose();
            hh.add_scalar_mut(1.0);
            k += dd.component_mul(&hh);
        }
        Ok(k)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Activation;

    fn fd_gradient(net: &Network, x: &[f64], eps: f64) -> Vec<f64> {
        let xm = DMatrix::from_row_slice(1, x.len(), x);
        (0..net.num_params())
            .map(|j| {
                let mut plus = net.clone();
                plus.params_mut()[j] += eps;
                let mut minus = net.clone();
                minus.params_mut()[j] -= eps;
                (plus.forward_batch(&xm).unwrap()[0] - minus.forward_batch(&xm).unwrap()[0])
                    / (2.0 * eps)
            })
            .collect()
    }

    #[test]
    fn tiny_network_has_four_params_and_zero_biases() {
        let cfg = NetworkConfig::new(1, vec![1], Activation::LeakyRelu { slope: 0.2 });
        let net = Network::init_with_seed(&cfg, 3).unwrap();
        assert_eq!(net.num_params(), 4);
        for l in net.layers() {
            assert!(net.bias(l).iter().all(|&b| b == 0.0));
        }
    }

    #[test]
    fn leaky_scalar_net() {
        let cfg = NetworkConfig::new(1, vec![1], Activation::LeakyRelu { slope: 0.2 });
        let net = Network::from_params(&cfg, vec![1.0, 0.0, 1.0, 0.0]).unwrap();
        let x = DMatrix::from_column_slice(2, 1, &[-1.0, 1.0]);
        let f = net.forward_batch(&x).unwrap();
        assert!((f[0] + 0.2).abs() < 1e-15);
        assert_eq!(f[1], 1.0);
    }

    #[test]
    fn identity_activation_is_affine() {
        // f(x) = w2 * (W1 x + b1) + b2
        let cfg = NetworkConfig::new(2, vec![1], Activation::Identity);
        let net = Network::from_params(&cfg, vec![2.0, -1.0, 0.5, 3.0, 0.25]).unwrap();
        let x = DMatrix::from_row_slice(1, 2, &[1.5, 4.0]);
        let f = net.forward_batch(&x).unwrap()[0];
        assert!((f - (3.0 * (2.0 * 1.5 - 4.0 + 0.5) + 0.25)).abs() < 1e-14);
    }

    #[test]
    fn gradient_at_kink_uses_negative_slope() {
        let cfg = NetworkConfig::new(1, vec![1], Activation::LeakyRelu { slope: 0.2 });
        let net = Network::from_params(&cfg, vec![1.0, 0.0, 1.0, 0.0]).unwrap();
        let g = net.grad_sample(&[0.0]).unwrap();
        // d f / d b1 = w2 * slope at z = 0.
        assert!((g[1] - 0.2).abs() < 1e-15);
        assert_eq!(g[3], 1.0);
    }

    #[test]
    fn shortcut_gradient_matches_finite_differences() {
        for act in [Activation::Tanh, Activation::LeakyRelu { slope: 0.2 }] {
            let cfg = NetworkConfig::new(3, vec![5, 5, 5, 4], act)
                .with_shortcuts(true)
                .with_seed(9);
            let net = Network::init(&cfg).unwrap();
            assert!(net.layers()[1].shortcut && net.layers()[2].shortcut);
            assert!(!net.layers()[3].shortcut);
            let x = [0.3, -0.7, 1.1];
            let g = net.grad_sample(&x).unwrap();
            let fd = fd_gradient(&net, &x, 1e-5);
            for (a, b) in g.iter().zip(&fd) {
                assert!((a - b).abs() <= 1e-6 * (1.0 + a.abs()), "{a} vs {b}");
            }
        }
    }

    #[test]
    fn kernel_factorization_matches_jacobian_products() {
        let cfg = NetworkConfig::new(2, vec![6, 6, 3], Activation::Tanh)
            .with_shortcuts(true)
            .with_seed(4);
        let net = Network::init(&cfg).unwrap();
        let xa = DMatrix::from_fn(7, 2, |i, j| (i as f64 * 0.37 + j as f64).sin());
        let xb = DMatrix::from_fn(4, 2, |i, j| (i as f64 * 1.3 - j as f64).cos());
        let fast = net.kernel(&xa, &xb).unwrap();
        let slow = net.jacobian(&xa).unwrap().tr_mul(&net.jacobian(&xb).unwrap());
        assert!((fast - &slow).amax() < 1e-12 * (1.0 + slow.amax()));
    }

    #[test]
    fn weighted_gradient_matches_jacobian() {
        let cfg = NetworkConfig::new(2, vec![4, 4], Activation::LeakyRelu { slope: 0.1 })
            .with_shortcuts(true)
            .with_seed(2);
        let net = Network::init(&cfg).unwrap();
        let x = DMatrix::from_fn(5, 2, |i, j| (i * 3 + j) as f64 * 0.21 - 1.0);
        let w = DVector::from_fn(5, |i, _| i as f64 - 2.0);
        let fast = net.weighted_gradient(&x, &w).unwrap();
        let slow = net.jacobian(&x).unwrap() * &w;
        assert!((fast - slow).amax() < 1e-12);
    }

    #[test]
    fn dimension_mismatch_is_an_error() {
        let cfg = NetworkConfig::new(2, vec![3], Activation::Relu);
        let net = Network::init(&cfg).unwrap();
        let x = DMatrix::zeros(4, 3);
        assert!(matches!(net.forward_batch(&x), Err(Error::Dimension(_))));
    }

    #[test]
    fn non_finite_parameters_surface_as_errors() {
        let cfg = NetworkConfig::new(1, vec![2], Activation::Tanh);
        let mut net = Network::init(&cfg).unwrap();
        net.params_mut()[4] = f64::INFINITY;
        assert!(matches!(
            net.grad_sample(&[0.5]),
            Err(Error::NonFinite { .. })
        ));
    }

    #[test]
    fn xavier_variance_is_close_to_uniform_law() {
        let cfg = NetworkConfig::new(256, vec![256], Activation::Tanh);
        let layer = build_layers(&cfg)[0];
        let expected = 6.0 / 512.0 / 3.0;
        let mut sum = 0.0;
        let mut sum_sq = 0.0;
        let mut count = 0.0;
        for seed in 0..10 {
            let net = Network::init_with_seed(&cfg, seed).unwrap();
            for &w in &net.params()[layer.offset..layer.bias_offset()] {
                sum += w;
                sum_sq += w * w;
                count += 1.0;
            }
        }
        let mean = sum / count;
        let var = sum_sq / count - mean * mean;
        assert!((var - expected).abs() < 0.2 * expected, "{var} vs {expected}");
    }

    #[test]
    fn same_seed_same_parameters() {
        let cfg = NetworkConfig::new(2, vec![8, 8], Activation::default());
        let a = Network::init_with_seed(&cfg, 11).unwrap();
        let b = Network::init_with_seed(&cfg, 11).unwrap();
        let c = Network::init_with_seed(&cfg, 12).unwrap();
        assert_eq!(a.params(), b.params());
        assert_ne!(a.params(), c.params());
    }
}
