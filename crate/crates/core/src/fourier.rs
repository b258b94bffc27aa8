//! Fourier transforms of functions known only at sample points.
//!
//! `phi_hat(xi) = (1/N) sum_k phi_k exp(-2 pi i <xi, X_k>)`, summed directly
//! over a regular frequency grid. Per-axis phasors are tabulated once so a 2D
//! grid reduces to one complex matrix product.

use nalgebra::{Complex, DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Regular frequency grid, symmetric about the origin on every axis.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    /// Half-width of each axis: frequencies span `[-extent, extent]`.
    pub extent: Vec<f64>,
    /// Number of frequencies per axis.
    pub resolution: Vec<usize>,
}

impl GridSpec {
    pub fn uniform(d: usize, extent: f64, resolution: usize) -> Self {
        Self {
            extent: vec![extent; d],
            resolution: vec![resolution; d],
        }
    }

    /// 81 integer frequencies per axis over `[-40, 40]`.
    pub fn default_for(d: usize) -> Self {
        Self::uniform(d, 40.0, 81)
    }

    pub fn dim(&self) -> usize {
        self.extent.len()
    }

    pub fn len(&self) -> usize {
        self.resolution.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn validate(&self) -> Result<()> {
        if self.extent.len() != self.resolution.len() {
            return Err(Error::Config("grid extent and resolution lengths differ".into()));
        }
        if self.dim() == 0 || self.dim() > 3 {
            return Err(Error::Config(format!("grid dimension {} not in 1..=3", self.dim())));
        }
        if self.extent.iter().any(|e| !(e.is_finite() && *e >= 0.0)) {
            return Err(Error::Config("grid extent must be finite and non-negative".into()));
        }
        Ok(())
    }

    /// Frequencies along `axis`.
    pub fn axis(&self, axis: usize) -> Vec<f64> {
        let r = self.resolution[axis];
        let e = self.extent[axis];
        match r {
            0 => Vec::new(),
            1 => vec![0.0],
            _ => (0..r).map(|j| -e + 2.0 * e * j as f64 / (r - 1) as f64).collect(),
        }
    }

    /// Multi-index of a flat position (last axis fastest).
    pub fn unflatten(&self, mut flat: usize) -> Vec<usize> {
        let mut idx = vec![0; self.dim()];
        for a in (0..self.dim()).rev() {
            idx[a] = flat % self.resolution[a];
            flat /= self.resolution[a];
        }
        idx
    }

    pub fn frequency(&self, flat: usize) -> Vec<f64> {
        self.unflatten(flat)
            .iter()
            .enumerate()
            .map(|(a, &j)| self.axis(a)[j])
            .collect()
    }
}

/// Magnitudes `|phi_hat(xi)|` over a [`GridSpec`], stored flat with the last
/// axis varying fastest.
#[derive(Clone, Debug, PartialEq)]
pub struct FrequencyGrid {
    pub spec: GridSpec,
    pub values: Vec<f64>,
}

impl FrequencyGrid {
    /// Magnitude at the grid point nearest to `xi`.
    pub fn magnitude_near(&self, xi: &[f64]) -> Option<f64> {
        if xi.len() != self.spec.dim() || self.values.is_empty() {
            return None;
        }
        let mut flat = 0;
        for (a, &x) in xi.iter().enumerate() {
            let axis = self.spec.axis(a);
            let j = axis
                .iter()
                .enumerate()
                .min_by(|(_, p), (_, q)| (*p - x).abs().total_cmp(&(*q - x).abs()))
                .map(|(j, _)| j)?;
            flat = flat * self.spec.resolution[a] + j;
        }
        Some(self.values[flat])
    }

    /// 2D grids as a matrix with rows along the first frequency axis.
    pub fn to_matrix(&self) -> Result<DMatrix<f64>> {
        if self.spec.dim() != 2 {
            return Err(Error::dim(format!("grid is {}-dimensional, not 2", self.spec.dim())));
        }
        let (r, c) = (self.spec.resolution[0], self.spec.resolution[1]);
        Ok(DMatrix::from_row_slice(r, c, &self.values))
    }
}

/// Phasor table `exp(-2 pi i xi_j x_k)`, one row per frequency.
fn phasors(freqs: &[f64], coords: impl Iterator<Item = f64> + Clone, n: usize) -> DMatrix<Complex<f64>> {
    let mut m = DMatrix::zeros(freqs.len(), n);
    for (j, &xi) in freqs.iter().enumerate() {
        for (k, x) in coords.clone().enumerate() {
            let angle = -2.0 * std::f64::consts::PI * xi * x;
            m[(j, k)] = Complex::new(angle.cos(), angle.sin());
        }
    }
    m
}

/// Complex transform over the grid (flat, last axis fastest).
pub fn sampled_ft_complex(phi: &DVector<f64>, x: &DMatrix<f64>, grid: &GridSpec) -> Result<Vec<Complex<f64>>> {
    grid.validate()?;
    let n = x.nrows();
    if phi.len() != n {
        return Err(Error::dim(format!("phi has {} entries, sample matrix has {n} rows", phi.len())));
    }
    if x.ncols() != grid.dim() {
        return Err(Error::dim(format!("samples are {}-dimensional, grid is {}", x.ncols(), grid.dim())));
    }
    if n == 0 {
        return Err(Error::dim("no samples"));
    }
    if !phi.iter().chain(x.iter()).all(|v| v.is_finite()) {
        return Err(Error::NonFinite {
            what: "fourier input".into(),
            step: None,
        });
    }
    let tables: Vec<DMatrix<Complex<f64>>> = (0..grid.dim())
        .map(|a| phasors(&grid.axis(a), x.column(a).iter().copied(), n))
        .collect();
    let weights = DVector::from_iterator(n, phi.iter().map(|&v| Complex::new(v / n as f64, 0.0)));

    let last = &tables[grid.dim() - 1];
    let out = match grid.dim() {
        1 => (last * weights).as_slice().to_vec(),
        2 => {
            let mut left = tables[0].clone();
            for (k, mut col) in left.column_iter_mut().enumerate() {
                col *= weights[k];
            }
            let m = left * last.transpose();
            // Row-major flattening: first axis slowest.
            m.transpose().as_slice().to_vec()
        }
        _ => {
            let mut out = Vec::with_capacity(grid.len());
            for j0 in 0..tables[0].nrows() {
                let mut left = tables[1].clone();
                for (k, mut col) in left.column_iter_mut().enumerate() {
                    col *= weights[k] * tables[0][(j0, k)];
                }
                let m = left * last.transpose();
                out.extend_from_slice(m.transpose().as_slice());
            }
            out
        }
    };
    Ok(out)
}

/// Magnitude grid of the sampled transform.
pub fn sampled_ft(phi: &DVector<f64>, x: &DMatrix<f64>, grid: &GridSpec) -> Result<FrequencyGrid> {
    let values = sampled_ft_complex(phi, x, grid)?.iter().map(|c| c.norm()).collect();
    Ok(FrequencyGrid {
        spec: grid.clone(),
        values,
    })
}

fn in_positive_half(xi: &[f64]) -> bool {
    match xi.iter().find(|&&v| v != 0.0) {
        Some(&v) => v > 0.0,
        None => true,
    }
}

/// Frequency of largest magnitude over the half-grid whose first non-zero
/// coordinate is positive (origin included). Ties go to the smallest `||xi||`,
/// then to the lexicographically smallest `xi`.
pub fn dominant_frequency(grid: &FrequencyGrid) -> Result<Vec<f64>> {
    if grid.values.is_empty() {
        return Err(Error::dim("empty frequency grid"));
    }
    let peak = grid.values.iter().copied().fold(0.0f64, f64::max);
    let tie = 1e-12 * peak.max(f64::MIN_POSITIVE);
    let mut best: Option<(f64, Vec<f64>)> = None;
    for (flat, &mag) in grid.values.iter().enumerate() {
        let xi = grid.spec.frequency(flat);
        if !in_positive_half(&xi) {
            continue;
        }
        let better = match &best {
            None => true,
            Some((b, bxi)) => {
                if mag > b + tie {
                    true
                } else if mag < b - tie {
                    false
                } else {
                    let n1: f64 = xi.iter().map(|v| v * v).sum();
                    let n2: f64 = bxi.iter().map(|v| v * v).sum();
                    n1 < n2 || (n1 == n2 && xi.iter().zip(bxi).map(|(a, b)| a.total_cmp(b)).find(|o| o.is_ne()) == Some(std::cmp::Ordering::Less))
                }
            }
        };
        if better {
            best = Some((mag, xi));
        }
    }
    best.map(|(_, xi)| xi).ok_or_else(|| Error::dim("empty frequency grid"))
}

/// Euclidean norm of the dominant frequency.
pub fn dominant_frequency_norm(grid: &FrequencyGrid) -> Result<f64> {
    Ok(dominant_frequency(grid)?.iter().map(|v| v * v).sum::<f64>().sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::PI;

    fn pixel_grid(side: usize) -> DMatrix<f64> {
        DMatrix::from_fn(side * side, 2, |r, c| {
            let (i, j) = (r / side, r % side);
            let v = if c == 0 { i } else { j };
            (v as f64 + 0.5) / side as f64
        })
    }

    fn brute_force(phi: &DVector<f64>, x: &DMatrix<f64>, xi: &[f64]) -> Complex<f64> {
        let n = x.nrows();
        let mut acc = Complex::new(0.0, 0.0);
        for k in 0..n {
            let dot: f64 = (0..x.ncols()).map(|a| xi[a] * x[(k, a)]).sum();
            acc += Complex::from_polar(phi[k], -2.0 * PI * dot);
        }
        acc / n as f64
    }

    #[test]
    fn matches_brute_force_in_every_dimension() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for d in 1..=3 {
            let x = DMatrix::from_fn(37, d, |_, _| rng.gen::<f64>());
            let phi = DVector::from_fn(37, |_, _| rng.gen_range(-1.0..1.0));
            let grid = GridSpec::uniform(d, 3.0, 5);
            let fast = sampled_ft_complex(&phi, &x, &grid).unwrap();
            for (flat, value) in fast.iter().enumerate() {
                let slow = brute_force(&phi, &x, &grid.frequency(flat));
                assert!((value - slow).norm() < 1e-12, "d={d} flat={flat}");
            }
        }
    }

    #[test]
    fn cosine_recovers_frequency_and_amplitude() {
        let x = pixel_grid(64);
        let phi = DVector::from_fn(x.nrows(), |k, _| (2.0 * PI * 5.0 * x[(k, 0)]).cos());
        let grid = sampled_ft(&phi, &x, &GridSpec::default_for(2)).unwrap();
        assert_eq!(dominant_frequency(&grid).unwrap(), vec![5.0, 0.0]);
        assert!((grid.magnitude_near(&[5.0, 0.0]).unwrap() - 0.5).abs() < 1e-10);
        assert!((grid.magnitude_near(&[-5.0, 0.0]).unwrap() - 0.5).abs() < 1e-10);
        assert!(grid.magnitude_near(&[0.0, 5.0]).unwrap() < 1e-10);
    }

    #[test]
    fn constant_peaks_at_origin() {
        let x = pixel_grid(20);
        let phi = DVector::from_element(x.nrows(), -3.0);
        let grid = sampled_ft(&phi, &x, &GridSpec::uniform(2, 10.0, 21)).unwrap();
        assert_eq!(dominant_frequency(&grid).unwrap(), vec![0.0, 0.0]);
        assert!((grid.magnitude_near(&[0.0, 0.0]).unwrap() - 3.0).abs() < 1e-12);
    }

    #[test]
    fn stronger_of_two_cosines_wins() {
        let x = pixel_grid(48);
        let phi = DVector::from_fn(x.nrows(), |k, _| {
            2.0 * (2.0 * PI * (3.0 * x[(k, 0)] + 7.0 * x[(k, 1)])).cos() + (2.0 * PI * 11.0 * x[(k, 1)]).cos()
        });
        let grid = sampled_ft(&phi, &x, &GridSpec::uniform(2, 15.0, 31)).unwrap();
        assert_eq!(dominant_frequency(&grid).unwrap(), vec![3.0, 7.0]);
    }

    #[test]
    fn ties_prefer_small_norm() {
        let spec = GridSpec::uniform(1, 2.0, 5);
        let grid = FrequencyGrid {
            spec,
            values: vec![1.0, 1.0, 0.5, 1.0, 1.0],
        };
        assert_eq!(dominant_frequency(&grid).unwrap(), vec![1.0]);
    }

    #[test]
    fn errors() {
        let x = pixel_grid(4);
        let phi = DVector::zeros(16);
        assert!(sampled_ft(&phi, &x, &GridSpec::default_for(3)).is_err());
        assert!(sampled_ft(&DVector::zeros(3), &x, &GridSpec::default_for(2)).is_err());
        let empty = FrequencyGrid {
            spec: GridSpec::uniform(2, 1.0, 0),
            values: vec![],
        };
        assert!(dominant_frequency(&empty).is_err());
    }

    #[test]
    fn monte_carlo_estimate_converges() {
        // cos(2 pi 2 x1) under uniform samples: exact magnitude 0.5 at (2, 0).
        let spec = GridSpec::uniform(2, 2.0, 5);
        let mut errors = Vec::new();
        for &n in &[500usize, 2000, 8000, 32000] {
            let mut total = 0.0;
            for seed in 0..4 {
                let mut rng = ChaCha8Rng::seed_from_u64(seed + 100 * n as u64);
                let x = DMatrix::from_fn(n, 2, |_, _| rng.gen::<f64>());
                let phi = DVector::from_fn(n, |k, _| (4.0 * PI * x[(k, 0)]).cos());
                let g = sampled_ft(&phi, &x, &spec).unwrap();
                total += (g.magnitude_near(&[2.0, 0.0]).unwrap() - 0.5).abs();
            }
            errors.push(total / 4.0);
        }
        assert!(errors[3] < errors[0], "{errors:?}");
        assert!(errors[2] < errors[0], "{errors:?}");
    }

    proptest! {
        #[test]
        fn conjugate_symmetry(seed in 0u64..200) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = DMatrix::from_fn(40, 2, |_, _| rng.gen::<f64>());
            let phi = DVector::from_fn(40, |_, _| rng.gen_range(-2.0..2.0));
            let g = sampled_ft(&phi, &x, &GridSpec::uniform(2, 6.0, 13)).unwrap();
            let len = g.values.len();
            for flat in 0..len {
                prop_assert!((g.values[flat] - g.values[len - 1 - flat]).abs() < 1e-10);
            }
        }

        #[test]
        fn linear(seed in 0u64..200, a in -3.0f64..3.0, b in -3.0f64..3.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = DMatrix::from_fn(30, 2, |_, _| rng.gen::<f64>());
            let phi = DVector::from_fn(30, |_, _| rng.gen_range(-1.0..1.0));
            let psi = DVector::from_fn(30, |_, _| rng.gen_range(-1.0..1.0));
            let spec = GridSpec::uniform(2, 4.0, 9);
            let fa = sampled_ft_complex(&phi, &x, &spec).unwrap();
            let fb = sampled_ft_complex(&psi, &x, &spec).unwrap();
            let fab = sampled_ft_complex(&(&phi * a + &psi * b), &x, &spec).unwrap();
            for i in 0..fab.len() {
                prop_assert!((fab[i] - (fa[i] * a + fb[i] * b)).norm() < 1e-10);
            }
        }
    }
}
