use log::warn;
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::harness::config::{DataSource, DatasetSpec};
use crate::io::read_grayscale;
use crate::nn::Dataset;

/// Training set plus held-out points, both uniform on `[0, 1]^d`.
#[derive(Clone, Debug)]
pub struct ExperimentData {
    pub train: Dataset,
    /// Held-out inputs in raw coordinates.
    pub test_raw: DMatrix<f64>,
    /// Held-out inputs standardized with the training statistics.
    pub test_inputs: DMatrix<f64>,
    pub test_labels: DVector<f64>,
}

/// Bilinear interpolation of `image` stretched over `[0, 1]^2`.
///
/// `x[0]` runs along columns and `x[1]` along rows (row 0 at `x[1] = 0`);
/// pixel centers sit at `(c + 0.5) / width, (r + 0.5) / height`. Outside the
/// outermost centers the edge value is held.
pub fn sample_bilinear(image: &DMatrix<f64>, x: &[f64]) -> f64 {
    let (h, w) = (image.nrows(), image.ncols());
    let u = (x[0] * w as f64 - 0.5).clamp(0.0, (w - 1) as f64);
    let v = (x[1] * h as f64 - 0.5).clamp(0.0, (h - 1) as f64);
    let (c0, r0) = (u.floor() as usize, v.floor() as usize);
    let (c1, r1) = ((c0 + 1).min(w - 1), (r0 + 1).min(h - 1));
    let (fu, fv) = (u - c0 as f64, v - r0 as f64);
    let top = image[(r0, c0)] * (1.0 - fu) + image[(r0, c1)] * fu;
    let bottom = image[(r1, c0)] * (1.0 - fu) + image[(r1, c1)] * fu;
    top * (1.0 - fv) + bottom * fv
}

/// Draws `n + m` uniform points with the spec's seed (training points first)
/// and labels them.
pub fn build_dataset(spec: &DatasetSpec) -> Result<ExperimentData> {
    let d = spec.input_dim;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut rows_of = |rows: usize| {
        let values: Vec<f64> = (0..rows * d).map(|_| rng.gen::<f64>()).collect();
        DMatrix::from_row_slice(rows, d, &values)
    };
    let train_raw = rows_of(spec.n);
    let test_raw = rows_of(spec.m);

    let label = |x: &DMatrix<f64>| -> Result<DVector<f64>> {
        Ok(match &spec.source {
            DataSource::Analytic { target } => DVector::from_fn(x.nrows(), |r, _| {
                let row: Vec<f64> = x.row(r).iter().copied().collect();
                target.eval(&row)
            }),
            DataSource::Image { path } => {
                let img = read_grayscale(path)?;
                DVector::from_fn(x.nrows(), |r, _| sample_bilinear(&img, &[x[(r, 0)], x[(r, 1)]]))
            }
        })
    };
    let train_labels = label(&train_raw)?;
    let test_labels = label(&test_raw)?;
    let train = Dataset::from_raw(train_raw, train_labels)?;
    let constant = train.constant_columns();
    if !constant.is_empty() {
        warn!("constant input columns {constant:?} left unscaled");
    }
    let test_inputs = train.normalize(&test_raw)?;
    Ok(ExperimentData {
        train,
        test_raw,
        test_inputs,
        test_labels,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::config::AnalyticTarget;
    use crate::io::write_pgm;

    fn spec(source: DataSource, n: usize) -> DatasetSpec {
        DatasetSpec {
            source,
            input_dim: 2,
            n,
            m: 3,
            seed: 11,
        }
    }

    #[test]
    fn analytic_dataset_is_reproducible() {
        let s = spec(
            DataSource::Analytic {
                target: AnalyticTarget::SinProduct,
            },
            4,
        );
        let a = build_dataset(&s).unwrap();
        let b = build_dataset(&s).unwrap();
        assert_eq!(a.train.raw_inputs, b.train.raw_inputs);
        assert_eq!(a.train.labels, b.train.labels);
        assert_eq!(a.train.len(), 4);
        assert!(a.train.raw_inputs.iter().all(|v| (0.0..1.0).contains(v)));
        for r in 0..4 {
            let x = a.train.raw_inputs.row(r);
            let y = (2.0 * std::f64::consts::PI * x[0]).sin() * (2.0 * std::f64::consts::PI * x[1]).sin();
            assert!((a.train.labels[r] - y).abs() < 1e-15);
        }
        assert_eq!(a.test_raw.nrows(), 3);
    }

    #[test]
    fn bilinear_reproduces_pixel_centers() {
        let img = DMatrix::from_fn(5, 7, |r, c| ((r * 7 + c) as f64 * 0.37).sin());
        for r in 0..5 {
            for c in 0..7 {
                let x = [(c as f64 + 0.5) / 7.0, (r as f64 + 0.5) / 5.0];
                assert!((sample_bilinear(&img, &x) - img[(r, c)]).abs() < 1e-12);
            }
        }
        // Midpoint between two horizontal neighbours.
        let mid = sample_bilinear(&img, &[2.0 / 7.0, 0.5 / 5.0]);
        assert!((mid - 0.5 * (img[(0, 1)] + img[(0, 2)])).abs() < 1e-12);
    }

    #[test]
    fn constant_image_gives_constant_labels() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("flat.pgm");
        // A constant image min-max scales to all zeros.
        write_pgm(&path, &DMatrix::from_element(4, 4, 0.3)).unwrap();
        let data = build_dataset(&spec(DataSource::Image { path }, 20)).unwrap();
        assert!(data.train.labels.iter().all(|&y| y == data.train.labels[0]));
        let mean = data.train.inputs.column(0).mean();
        assert!(mean.abs() < 1e-12);
    }

    #[test]
    fn unreadable_image_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("junk.png");
        std::fs::write(&path, b"not an image").unwrap();
        assert!(build_dataset(&spec(DataSource::Image { path }, 3)).is_err());
    }
}
