use std::fs;
use std::path::{Path, PathBuf};

use log::{info, warn};
use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::alignment::{
    alignment_trace, default_k_grid, eigenvalue_trends, spectrum_preservation, AlignmentRecord, PreservationRecord,
    TargetTag, TrendRow,
};
use crate::dynamics::{
    gramian_step_error, verify_first_order, ConstantKernelModel, EigenfunctionPredictor, FirstOrderReport,
    GradientPredictor,
};
use crate::error::{Error, Result};
use crate::fourier::{sampled_ft, FrequencyGrid, GridSpec};
use crate::harness::config::ExperimentConfig;
use crate::harness::dataset::{build_dataset, ExperimentData};
use crate::io;
use crate::nn::{
    run_training_with, Checkpoint, Dataset, Model, Network, RunStatus, TraceRecord, TrainingPlan, TrainingTrace,
};
use crate::spectral::{cross_kernel, eig_sym, Gramian, SpectrumSnapshot};

/// File names inside an experiment directory.
#[derive(Clone, Debug)]
pub struct Layout {
    pub root: PathBuf,
}

impl Layout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn config(&self) -> PathBuf {
        self.root.join("experiment.toml")
    }

    pub fn trace(&self) -> PathBuf {
        self.root.join("trace.csv")
    }

    pub fn checkpoint(&self, t: u64) -> PathBuf {
        self.root.join("checkpoints").join(format!("t{t:08}.ksnet"))
    }

    pub fn gramian(&self, t: u64) -> PathBuf {
        self.root.join("spectra").join(format!("gramian_t{t:08}.ksmat"))
    }

    pub fn spectrum(&self, t: u64) -> PathBuf {
        self.root.join("spectra").join(format!("eig_t{t:08}.ksmat"))
    }

    pub fn analysis(&self, name: &str) -> PathBuf {
        self.root.join("analysis").join(name)
    }

    pub fn dynamics(&self, name: &str) -> PathBuf {
        self.root.join("dynamics").join(name)
    }

    pub fn fourier(&self, name: &str) -> PathBuf {
        self.root.join("fourier").join(name)
    }

    pub fn predict(&self, t0: u64, name: &str) -> PathBuf {
        self.root.join("predict").join(format!("t{t0:08}")).join(name)
    }

    pub fn manifest(&self) -> PathBuf {
        self.root.join("manifest.json")
    }

    /// Steps of every saved checkpoint, ascending.
    pub fn checkpoint_steps(&self) -> Result<Vec<u64>> {
        steps_in(&self.root.join("checkpoints"), "t", ".ksnet")
    }

    /// Steps of every saved spectrum, ascending.
    pub fn spectrum_steps(&self) -> Result<Vec<u64>> {
        steps_in(&self.root.join("spectra"), "eig_t", ".ksmat")
    }
}

fn steps_in(dir: &Path, prefix: &str, suffix: &str) -> Result<Vec<u64>> {
    let entries = match fs::read_dir(dir) {
        Ok(e) => e,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(Vec::new()),
        Err(e) => return Err(Error::io(dir, e)),
    };
    let mut steps = Vec::new();
    for entry in entries {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        let name = entry.file_name().to_string_lossy().into_owned();
        if let Some(t) = name
            .strip_prefix(prefix)
            .and_then(|r| r.strip_suffix(suffix))
            .and_then(|d| d.parse::<u64>().ok())
        {
            steps.push(t);
        }
    }
    steps.sort_unstable();
    Ok(steps)
}

/// A trained (or reloaded) experiment held in memory.
#[derive(Clone, Debug)]
pub struct Experiment {
    pub config: ExperimentConfig,
    pub data: ExperimentData,
    pub trace: TrainingTrace<Network>,
}

impl Experiment {
    pub fn n(&self) -> usize {
        self.data.train.len()
    }

    /// Checkpoint steps that are not companions of an earlier checkpoint.
    pub fn primary_steps(&self) -> Vec<u64> {
        let wanted = self.config.checkpoints.primary_steps(self.config.total_steps());
        self.trace
            .checkpoints
            .iter()
            .map(|c| c.t)
            .filter(|t| wanted.contains(t))
            .collect()
    }

    pub fn final_checkpoint(&self) -> Result<&Checkpoint<Network>> {
        self.trace.checkpoints.last().ok_or(Error::MissingCheckpoint(0))
    }
}

pub fn training_plan(config: &ExperimentConfig) -> TrainingPlan {
    let mut plan = TrainingPlan::new(
        config.optimizer.clone(),
        config.checkpoints.all_steps(config.total_steps()),
    );
    plan.record_interval = config.record_interval;
    plan.precision = config.precision;
    plan.seed = config.network.seed;
    plan
}

/// Builds the dataset, initializes the network and trains it, calling
/// `on_checkpoint` for every snapshot.
pub fn train_with<F>(config: &ExperimentConfig, on_checkpoint: F) -> Result<Experiment>
where
    F: FnMut(&Checkpoint<Network>) -> Result<()>,
{
    config.validate()?;
    let data = build_dataset(&config.dataset)?;
    let net = Network::init(&config.network)?;
    info!(
        "training {} parameters on N={} for {} steps",
        net.num_params(),
        data.train.len(),
        config.total_steps()
    );
    let trace = run_training_with(net, &data.train, &training_plan(config), on_checkpoint)?;
    if let RunStatus::Diverged { step, reason } = &trace.status {
        warn!("training diverged at step {step}: {reason}");
    }
    Ok(Experiment {
        config: config.clone(),
        data,
        trace,
    })
}

pub fn train(config: &ExperimentConfig) -> Result<Experiment> {
    train_with(config, |_| Ok(()))
}

/// Trains and writes the config, checkpoints and loss trace under `layout`.
pub fn train_to_disk(config: &ExperimentConfig, layout: &Layout) -> Result<Experiment> {
    io::write_text(&layout.config(), &config.to_toml())?;
    let exp = train_with(config, |c| io::write_network(&layout.checkpoint(c.t), &c.model))?;
    io::write_text(&layout.trace(), &exp.trace.to_csv())?;
    Ok(exp)
}

fn parse_trace_csv(path: &Path) -> Result<Vec<TraceRecord>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let bad = |line: usize| Error::Format {
        path: path.to_path_buf(),
        reason: format!("malformed row at line {line}"),
    };
    let mut lines = text.lines();
    if lines.next() != Some("t,delta,loss,residual_norm,checkpoint_id") {
        return Err(Error::Format {
            path: path.to_path_buf(),
            reason: "unexpected header".into(),
        });
    }
    lines
        .enumerate()
        .map(|(i, line)| {
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 5 {
                return Err(bad(i + 2));
            }
            Ok(TraceRecord {
                t: f[0].parse().map_err(|_| bad(i + 2))?,
                delta: f[1].parse().map_err(|_| bad(i + 2))?,
                loss: f[2].parse().map_err(|_| bad(i + 2))?,
                residual_norm: f[3].parse().map_err(|_| bad(i + 2))?,
                checkpoint_id: if f[4].is_empty() {
                    None
                } else {
                    Some(f[4].parse().map_err(|_| bad(i + 2))?)
                },
            })
        })
        .collect()
}

/// Reloads an experiment written by [`train_to_disk`]: the dataset is rebuilt
/// from the stored config and checkpoint outputs are recomputed.
pub fn load_experiment(layout: &Layout, config: Option<ExperimentConfig>) -> Result<Experiment> {
    let config = match config {
        Some(c) => c,
        None => ExperimentConfig::load(&layout.config())?,
    };
    let data = build_dataset(&config.dataset)?;
    let steps = layout.checkpoint_steps()?;
    if steps.is_empty() {
        return Err(Error::MissingCheckpoint(0));
    }
    let records = parse_trace_csv(&layout.trace())?;
    let last = records.last().map(|r| r.t).unwrap_or(0);
    let checkpoints = steps
        .iter()
        .enumerate()
        .map(|(id, &t)| {
            let model = io::read_network(&layout.checkpoint(t))?;
            let outputs = model.forward_batch(&data.train.inputs)?;
            let residual = &outputs - &data.train.labels;
            Ok(Checkpoint {
                id,
                t,
                delta: config.optimizer.schedule.delta_at(t),
                model,
                outputs,
                residual,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let status = if last < config.total_steps() {
        RunStatus::Diverged {
            step: last,
            reason: "trace ends early".into(),
        }
    } else {
        RunStatus::Completed
    };
    Ok(Experiment {
        config,
        data,
        trace: TrainingTrace {
            records,
            checkpoints,
            status,
        },
    })
}

/// Gramian and spectrum of one checkpoint.
pub fn spectrum_of<M: Model>(model: &M, data: &Dataset, t: u64) -> Result<(Gramian, SpectrumSnapshot)> {
    let g = Gramian::from_model(t, model, &data.inputs)?;
    let mut spec = eig_sym(&g)?;
    spec.t = t;
    Ok((g, spec))
}

/// Spectra at the requested steps (all primary checkpoints when `steps` is `None`).
pub fn compute_spectra(exp: &Experiment, steps: Option<&[u64]>) -> Result<Vec<SpectrumSnapshot>> {
    let steps: Vec<u64> = match steps {
        Some(s) => s.to_vec(),
        None => exp.primary_steps(),
    };
    steps
        .par_iter()
        .map(|&t| {
            let cp = exp.trace.require(t)?;
            Ok(spectrum_of(&cp.model, &exp.data.train, t)?.1)
        })
        .collect()
}

/// Computes spectra and writes Gramian, eigenvector and eigenvalue files.
pub fn spectra_to_disk(exp: &Experiment, layout: &Layout, steps: Option<&[u64]>) -> Result<Vec<SpectrumSnapshot>> {
    let steps: Vec<u64> = match steps {
        Some(s) => s.to_vec(),
        None => exp.primary_steps(),
    };
    let mut out = Vec::with_capacity(steps.len());
    for t in steps {
        let cp = exp.trace.require(t)?;
        let (g, spec) = spectrum_of(&cp.model, &exp.data.train, t)?;
        io::write_matrix(&layout.gramian(t), &g.matrix)?;
        io::write_spectrum(&layout.spectrum(t), &spec)?;
        info!("spectrum t={t}: lambda_max={:.6e}", spec.lambda_max());
        out.push(spec);
    }
    Ok(out)
}

pub fn load_spectra(layout: &Layout, steps: Option<&[u64]>) -> Result<Vec<SpectrumSnapshot>> {
    let available = layout.spectrum_steps()?;
    let steps: Vec<u64> = match steps {
        Some(s) => {
            if let Some(&missing) = s.iter().find(|t| !available.contains(t)) {
                return Err(Error::MissingCheckpoint(missing));
            }
            s.to_vec()
        }
        None => available,
    };
    steps.iter().map(|&t| io::read_spectrum(&layout.spectrum(t))).collect()
}

/// First-order reports for every checkpoint whose successor step is also saved.
pub fn first_order_reports(exp: &Experiment) -> Result<Vec<FirstOrderReport>> {
    let ts: Vec<u64> = exp
        .trace
        .checkpoints
        .iter()
        .map(|c| c.t)
        .filter(|&t| exp.trace.checkpoint_at(t + 1).is_some())
        .collect();
    let reports: Vec<Result<FirstOrderReport>> = ts
        .par_iter()
        .map(|&t| verify_first_order(&exp.trace, &exp.data.train, t))
        .collect();
    let mut out = Vec::with_capacity(reports.len());
    for (t, r) in ts.iter().zip(reports) {
        match r {
            Ok(rep) => out.push(rep),
            Err(Error::ZeroVector) => warn!("no output change at t={t}; first-order check skipped"),
            Err(e) => return Err(e),
        }
    }
    Ok(out)
}

/// All alignment outputs of one run.
#[derive(Clone, Debug)]
pub struct AlignmentOutputs {
    pub alignment: Vec<AlignmentRecord>,
    pub preservation: Vec<PreservationRecord>,
    pub trends: Vec<TrendRow>,
}

pub fn k_grid(config: &ExperimentConfig, n: usize) -> Vec<usize> {
    match &config.analysis.k_grid {
        Some(ks) => ks.iter().copied().filter(|&k| k <= n).collect(),
        None => default_k_grid(n),
    }
}

pub fn alignment_pass(exp: &Experiment, spectra: &[SpectrumSnapshot]) -> Result<AlignmentOutputs> {
    let n = exp.n();
    let ks = k_grid(&exp.config, n);
    let targets = exp
        .config
        .analysis
        .targets
        .iter()
        .map(|s| TargetTag::parse(s))
        .collect::<Result<Vec<_>>>()?;
    let alignment = alignment_trace(&exp.trace, &exp.data.train, spectra, &targets, &ks, &[])?;

    let modes: Vec<usize> = exp.config.analysis.modes.iter().map(|m| m - 1).filter(|&m| m < n).collect();
    let mut preservation = Vec::new();
    if let (Some(probe), false) = (spectra.last(), spectra.is_empty()) {
        let reference = match exp.config.analysis.preservation_ref {
            Some(t) => spectra
                .iter()
                .find(|s| s.t == t)
                .ok_or(Error::MissingCheckpoint(t))?,
            None => &spectra[spectra.len() / 2],
        };
        for &i in &modes {
            preservation.extend(spectrum_preservation(reference, probe, i, &ks)?);
        }
    }
    let trends = eigenvalue_trends(spectra, &exp.config.optimizer.schedule, &modes);
    Ok(AlignmentOutputs {
        alignment,
        preservation,
        trends,
    })
}

pub fn fourier_grid(config: &ExperimentConfig) -> GridSpec {
    config
        .analysis
        .fourier_grid
        .clone()
        .unwrap_or_else(|| GridSpec::default_for(config.dataset.input_dim))
}

/// Fourier magnitude grids of the requested eigenvectors (1-based modes) on raw coordinates.
pub fn fourier_pass(
    data: &Dataset,
    spec: &SpectrumSnapshot,
    modes: &[usize],
    grid: &GridSpec,
) -> Result<Vec<(usize, FrequencyGrid)>> {
    modes
        .par_iter()
        .filter(|&&m| m >= 1 && m <= spec.n())
        .map(|&m| Ok((m, sampled_ft(&spec.vector(m - 1), &data.raw_inputs, grid)?)))
        .collect()
}

fn write_grid(layout: &Layout, stem: &str, grid: &FrequencyGrid) -> Result<()> {
    match grid.to_matrix() {
        Ok(m) => {
            io::write_matrix(&layout.fourier(&format!("{stem}.ksmat")), &m)?;
            io::write_pgm(&layout.fourier(&format!("{stem}.pgm")), &m)
        }
        Err(_) => io::write_matrix(
            &layout.fourier(&format!("{stem}.ksmat")),
            &DMatrix::from_row_slice(1, grid.values.len(), &grid.values),
        ),
    }
}

pub fn fourier_to_disk(
    exp: &Experiment,
    layout: &Layout,
    spec: &SpectrumSnapshot,
    modes: &[usize],
    residual: bool,
) -> Result<()> {
    let grid = fourier_grid(&exp.config);
    for (m, g) in fourier_pass(&exp.data.train, spec, modes, &grid)? {
        write_grid(layout, &format!("mode{m:04}_t{:08}", spec.t), &g)?;
    }
    if residual {
        let cp = exp.trace.require(spec.t)?;
        let g = sampled_ft(&cp.residual, &exp.data.train.raw_inputs, &grid)?;
        write_grid(layout, &format!("residual_t{:08}", spec.t), &g)?;
    }
    Ok(())
}

/// Closed-form trajectories from a frozen Gramian.
#[derive(Clone, Debug)]
pub struct Predictions {
    pub t0: u64,
    /// Steps after `t0`.
    pub steps: Vec<u64>,
    /// `steps x N` outputs at the training points.
    pub train: DMatrix<f64>,
    /// `steps x M` held-out outputs through the gradient route.
    pub test_gradient: DMatrix<f64>,
    /// `steps x M` held-out outputs through the eigenfunction route.
    pub test_eigenfunction: DMatrix<f64>,
}

/// Freezes the Gramian of checkpoint `t0` and predicts `steps` further GD
/// steps with the learning rate in force at `t0`.
pub fn predict_pass(exp: &Experiment, spec: &SpectrumSnapshot, steps: &[u64]) -> Result<Predictions> {
    let cp = exp.trace.require(spec.t)?;
    let ck = ConstantKernelModel::new(spec.clone(), cp.outputs.clone(), cp.residual.clone(), cp.delta)?;
    let n = exp.n();
    let mut train = DMatrix::zeros(steps.len(), n);
    for (row, &t) in steps.iter().enumerate() {
        train.set_row(row, &ck.closed_form_train(t).0.transpose());
    }
    let xq = &exp.data.test_inputs;
    let (test_gradient, test_eigenfunction) = if xq.nrows() == 0 {
        (DMatrix::zeros(steps.len(), 0), DMatrix::zeros(steps.len(), 0))
    } else {
        let gp = GradientPredictor::new(&ck, cp.model.clone(), &exp.data.train.inputs)?;
        let grad = gp.predict_batch(&ck, xq, steps)?;
        let cross = cross_kernel(&cp.model, xq, &exp.data.train.inputs)?;
        let ep = EigenfunctionPredictor::new(&ck, &cross, cp.model.forward_batch(xq)?)?;
        let mut eig = DMatrix::zeros(steps.len(), xq.nrows());
        for (row, &t) in steps.iter().enumerate() {
            eig.set_row(row, &ep.predict(&ck, t).transpose());
        }
        (grad, eig)
    };
    Ok(Predictions {
        t0: spec.t,
        steps: steps.to_vec(),
        train,
        test_gradient,
        test_eigenfunction,
    })
}

pub fn predictions_to_disk(layout: &Layout, p: &Predictions) -> Result<()> {
    io::write_matrix(&layout.predict(p.t0, "train.ksmat"), &p.train)?;
    io::write_matrix(&layout.predict(p.t0, "test_gradient.ksmat"), &p.test_gradient)?;
    io::write_matrix(&layout.predict(p.t0, "test_eigenfunction.ksmat"), &p.test_eigenfunction)?;
    let mut steps = String::from("step\n");
    for t in &p.steps {
        steps.push_str(&format!("{t}\n"));
    }
    io::write_text(&layout.predict(p.t0, "steps.csv"), &steps)
}

/// `(delta, error)` pairs of the first-order Gramian change against real
/// steps, halving `delta` each time.
pub fn gramian_order_check<M: Model>(
    model: &M,
    data: &Dataset,
    delta0: f64,
    halvings: usize,
) -> Result<Vec<(f64, f64)>> {
    let residual: DVector<f64> = model.forward_batch(&data.inputs)? - &data.labels;
    (0..=halvings)
        .map(|h| {
            let delta = delta0 / f64::powi(2.0, h as i32);
            Ok((delta, gramian_step_error(model, &data.inputs, &residual, delta, None)?))
        })
        .collect()
}

pub fn gramian_order_csv(rows: &[(f64, f64)]) -> String {
    let mut out = String::from("delta,error,ratio\n");
    for (i, (d, e)) in rows.iter().enumerate() {
        let ratio = if i == 0 { f64::NAN } else { rows[i - 1].1 / e };
        out.push_str(&format!("{d:e},{e:e},{ratio:e}\n"));
    }
    out
}
