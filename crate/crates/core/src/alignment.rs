//! Relative-energy alignment of vectors with the top eigenspaces of the
//! Gramian, cross-time spectrum preservation and eigenvalue trends.
//!
//! Mode indices are 0-based in the API and 1-based in CSV output.

use std::fmt;

use log::warn;
use nalgebra::DVector;

use crate::dynamics::{info_speed, stability_bound};
use crate::error::{Error, Result};
use crate::nn::{Dataset, Model, Schedule, TrainingTrace};
use crate::spectral::SpectrumSnapshot;

/// k values used when none are requested.
pub const DEFAULT_K_GRID: [usize; 7] = [5, 10, 20, 50, 100, 200, 400];

/// [`DEFAULT_K_GRID`] clipped to `n`, with `n` itself appended when the grid
/// is clipped.
pub fn default_k_grid(n: usize) -> Vec<usize> {
    let mut ks: Vec<usize> = DEFAULT_K_GRID.iter().copied().filter(|&k| k <= n).collect();
    if ks.last() != Some(&n) && n > 0 && DEFAULT_K_GRID.iter().any(|&k| k > n) {
        ks.push(n);
    }
    ks
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub enum TargetTag {
    Labels,
    Output,
    Residual,
    Differential,
    Custom(String),
}

impl TargetTag {
    pub fn parse(s: &str) -> Result<Self> {
        Ok(match s {
            "labels" | "y" => Self::Labels,
            "output" | "f" => Self::Output,
            "residual" | "m" => Self::Residual,
            "differential" | "df" => Self::Differential,
            other if !other.is_empty() && !other.contains(',') => Self::Custom(other.to_string()),
            _ => return Err(Error::Config(format!("bad alignment target {s:?}"))),
        })
    }

    pub fn standard() -> Vec<Self> {
        vec![Self::Labels, Self::Output, Self::Residual, Self::Differential]
    }
}

impl fmt::Display for TargetTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Labels => f.write_str("labels"),
            Self::Output => f.write_str("output"),
            Self::Residual => f.write_str("residual"),
            Self::Differential => f.write_str("differential"),
            Self::Custom(name) => f.write_str(name),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AlignmentRecord {
    pub t: u64,
    pub target: TargetTag,
    pub k: usize,
    /// `None` when the target vector is zero at this step.
    pub energy: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PreservationRecord {
    pub t_ref: u64,
    pub t_probe: u64,
    pub i: usize,
    pub k: usize,
    pub energy: f64,
}

/// Per-mode squared projections `<v_i, phi>^2`.
pub fn spectral_projection(phi: &DVector<f64>, spec: &SpectrumSnapshot) -> Result<DVector<f64>> {
    if phi.len() != spec.n() {
        return Err(Error::dim(format!("vector has {} entries, spectrum has N={}", phi.len(), spec.n())));
    }
    Ok(spec.coefficients(phi).map(|c| c * c))
}

/// Fraction of `||phi||^2` inside the span of the top-`k` eigenvectors.
pub fn relative_energy(phi: &DVector<f64>, spec: &SpectrumSnapshot, k: usize) -> Result<f64> {
    let n = spec.n();
    if k == 0 || k > n {
        return Err(Error::Config(format!("k={k} outside 1..={n}")));
    }
    let norm2 = phi.norm_squared();
    if norm2 == 0.0 {
        return Err(Error::ZeroVector);
    }
    let proj = spectral_projection(phi, spec)?;
    Ok(proj.rows(0, k).sum() / norm2)
}

/// Energies for every `k` in `ks` from one projection.
pub fn energy_curve(phi: &DVector<f64>, spec: &SpectrumSnapshot, ks: &[usize]) -> Result<Vec<f64>> {
    let n = spec.n();
    if let Some(&bad) = ks.iter().find(|&&k| k == 0 || k > n) {
        return Err(Error::Config(format!("k={bad} outside 1..={n}")));
    }
    let norm2 = phi.norm_squared();
    if norm2 == 0.0 {
        return Err(Error::ZeroVector);
    }
    let proj = spectral_projection(phi, spec)?;
    let mut cumulative = Vec::with_capacity(n);
    let mut acc = 0.0;
    for p in proj.iter() {
        acc += p;
        cumulative.push(acc);
    }
    Ok(ks.iter().map(|&k| cumulative[k - 1] / norm2).collect())
}

fn target_vector(
    tag: &TargetTag,
    data: &Dataset,
    outputs: &DVector<f64>,
    residual: &DVector<f64>,
    delta: f64,
    spec: &SpectrumSnapshot,
    custom: &[(String, DVector<f64>)],
) -> Result<DVector<f64>> {
    Ok(match tag {
        TargetTag::Labels => data.labels.clone(),
        TargetTag::Output => outputs.clone(),
        TargetTag::Residual => residual.clone(),
        TargetTag::Differential => {
            // -(delta/N) G m evaluated in the eigenbasis of G.
            let n = spec.n() as f64;
            let coeffs = spec.coefficients(residual);
            let scaled = coeffs.component_mul(&spec.eigenvalues) * (-delta / n);
            &spec.eigenvectors * scaled
        }
        TargetTag::Custom(name) => custom
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, v)| v.clone())
            .ok_or_else(|| Error::Config(format!("no custom target named {name:?}")))?,
    })
}

/// Alignment records for every spectrum, target and `k`.
///
/// Each spectrum must correspond to a checkpoint of `trace` with the same `t`.
/// Zero target vectors produce records with `energy: None`.
pub fn alignment_trace<M: Model>(
    trace: &TrainingTrace<M>,
    data: &Dataset,
    spectra: &[SpectrumSnapshot],
    targets: &[TargetTag],
    ks: &[usize],
    custom: &[(String, DVector<f64>)],
) -> Result<Vec<AlignmentRecord>> {
    let mut out = Vec::with_capacity(spectra.len() * targets.len() * ks.len());
    for spec in spectra {
        let cp = trace.checkpoint_at(spec.t).ok_or(Error::MissingCheckpoint(spec.t))?;
        if spec.n() != data.len() {
            return Err(Error::dim(format!("spectrum at t={} has N={}, dataset has {}", spec.t, spec.n(), data.len())));
        }
        for tag in targets {
            let phi = target_vector(tag, data, &cp.outputs, &cp.residual, cp.delta, spec, custom)?;
            match energy_curve(&phi, spec, ks) {
                Ok(energies) => out.extend(ks.iter().zip(energies).map(|(&k, e)| AlignmentRecord {
                    t: spec.t,
                    target: tag.clone(),
                    k,
                    energy: Some(e),
                })),
                Err(Error::ZeroVector) => {
                    warn!("alignment target {tag} is zero at t={}", spec.t);
                    out.extend(ks.iter().map(|&k| AlignmentRecord {
                        t: spec.t,
                        target: tag.clone(),
                        k,
                        energy: None,
                    }));
                }
                Err(e) => return Err(e),
            }
        }
    }
    Ok(out)
}

/// Energy of mode `i` of `probe` inside the top-`k` spectrum of `reference`.
pub fn spectrum_preservation(
    reference: &SpectrumSnapshot,
    probe: &SpectrumSnapshot,
    i: usize,
    ks: &[usize],
) -> Result<Vec<PreservationRecord>> {
    if reference.n() != probe.n() {
        return Err(Error::dim(format!("N mismatch: {} vs {}", reference.n(), probe.n())));
    }
    if i >= probe.n() {
        return Err(Error::dim(format!("mode {i} out of range for N={}", probe.n())));
    }
    let energies = energy_curve(&probe.vector(i), reference, ks)?;
    Ok(ks
        .iter()
        .zip(energies)
        .map(|(&k, energy)| PreservationRecord {
            t_ref: reference.t,
            t_probe: probe.t,
            i,
            k,
            energy,
        })
        .collect())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrendRow {
    pub t: u64,
    pub i: usize,
    pub lambda: f64,
    /// `delta_t lambda_i / N`
    pub dl_over_n: f64,
    pub speed: f64,
    /// `2N / lambda_max`
    pub bound: f64,
    /// Whether the learning rate was decayed since the previous snapshot.
    pub decayed: bool,
}

/// Trend rows for the requested modes (those beyond N are skipped).
pub fn eigenvalue_trends(spectra: &[SpectrumSnapshot], schedule: &Schedule, modes: &[usize]) -> Vec<TrendRow> {
    let mut rows = Vec::new();
    let mut prev_t: Option<u64> = None;
    for spec in spectra {
        let n = spec.n();
        let delta = schedule.delta_at(spec.t);
        let decayed = prev_t.is_some_and(|p| schedule.delta_at(p) != delta);
        let bound = stability_bound(spec, n);
        for &i in modes.iter().filter(|&&i| i < n) {
            let lambda = spec.eigenvalues[i];
            rows.push(TrendRow {
                t: spec.t,
                i,
                lambda,
                dl_over_n: delta * lambda / n as f64,
                speed: info_speed(lambda, delta, n),
                bound,
                decayed,
            });
        }
        prev_t = Some(spec.t);
    }
    rows
}

fn fmt_energy(e: Option<f64>) -> String {
    match e {
        Some(v) => format!("{v:e}"),
        None => "nan".to_string(),
    }
}

pub fn alignment_csv(records: &[AlignmentRecord]) -> String {
    let mut out = String::from("t,target,k,energy\n");
    for r in records {
        out.push_str(&format!("{},{},{},{}\n", r.t, r.target, r.k, fmt_energy(r.energy)));
    }
    out
}

pub fn preservation_csv(records: &[PreservationRecord]) -> String {
    let mut out = String::from("t_ref,t_probe,i,k,energy\n");
    for r in records {
        out.push_str(&format!("{},{},{},{},{:e}\n", r.t_ref, r.t_probe, r.i + 1, r.k, r.energy));
    }
    out
}

pub fn trends_csv(rows: &[TrendRow]) -> String {
    let mut out = String::from("t,i,lambda,dl_over_n,speed,bound\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{:e},{:e},{:e},{:e}\n",
            r.t,
            r.i + 1,
            r.lambda,
            r.dl_over_n,
            r.speed,
            r.bound
        ));
    }
    out
}
