use std::collections::BTreeSet;

use nalgebra::DVector;
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::{OptimizerConfig, OptimizerKind, Precision};
use super::data::Dataset;
use super::model::Model;
use crate::error::{Error, Result};

/// L2 loss `(1/N) sum 1/2 (f - y)^2` and the residual `f - y`.
pub fn loss_and_residual<M: Model>(model: &M, data: &Dataset) -> Result<(f64, DVector<f64>)> {
    let f = model.forward_batch(&data.inputs)?;
    let (loss, m) = loss_from_outputs(&f, &data.labels);
    Ok((loss, m))
}

pub(crate) fn loss_from_outputs(f: &DVector<f64>, y: &DVector<f64>) -> (f64, DVector<f64>) {
    let m = f - y;
    let loss = 0.5 * m.norm_squared() / y.len() as f64;
    (loss, m)
}

/// Gradient of the L2 loss, `(1/N) A m`.
pub fn loss_gradient<M: Model>(model: &M, data: &Dataset) -> Result<DVector<f64>> {
    let (_, m) = loss_and_residual(model, data)?;
    let n = data.len() as f64;
    model.weighted_gradient(&data.inputs, &(m / n))
}

/// Optimizer state carried across steps.
#[derive(Clone, Debug)]
pub struct Optimizer {
    config: OptimizerConfig,
    precision: Precision,
    rng: ChaCha8Rng,
    first_moment: Vec<f64>,
    second_moment: Vec<f64>,
    adam_steps: i32,
}

impl Optimizer {
    pub fn new(config: OptimizerConfig, precision: Precision, seed: u64) -> Self {
        Self {
            config,
            precision,
            rng: ChaCha8Rng::seed_from_u64(seed ^ 0x5_eed0_f5cd),
            first_moment: Vec::new(),
            second_moment: Vec::new(),
            adam_steps: 0,
        }
    }

    pub fn config(&self) -> &OptimizerConfig {
        &self.config
    }

    /// One update `theta_t -> theta_{t+1}` with the learning rate of step `t`.
    pub fn step<M: Model>(&mut self, model: &mut M, data: &Dataset, t: u64) -> Result<()> {
        let (_, m) = loss_and_residual(model, data).map_err(|e| with_step(e, t))?;
        self.step_with_residual(model, data, &m, t)
    }

    /// Whether updates only need the full-batch loss gradient.
    pub fn is_full_batch(&self) -> bool {
        !matches!(self.config.kind, OptimizerKind::Sgd { .. })
    }

    /// Same as [`Optimizer::step`] when the full-batch residual of the current
    /// parameters is already known.
    pub fn step_with_residual<M: Model>(
        &mut self,
        model: &mut M,
        data: &Dataset,
        residual: &DVector<f64>,
        t: u64,
    ) -> Result<()> {
        let n = data.len();
        if let OptimizerKind::Sgd { batch_size } = self.config.kind {
            let delta = self.config.schedule.delta_at(t);
            let idx = sample(&mut self.rng, n, batch_size).into_vec();
            let xb = data.inputs.select_rows(idx.iter());
            let mb = DVector::from_iterator(
                idx.len(),
                idx.iter().map(|&i| residual[i] / batch_size as f64),
            );
            let update = model.weighted_gradient(&xb, &mb).map_err(|e| with_step(e, t))? * delta;
            return self.apply_update(model, &update, t);
        }
        let g = model
            .weighted_gradient(&data.inputs, &(residual / n as f64))
            .map_err(|e| with_step(e, t))?;
        self.apply_full_gradient(model, &g, t)
    }

    /// Update from the full-batch loss gradient `(1/N) A m` (gradient descent
    /// and Adam only).
    pub fn apply_full_gradient<M: Model>(&mut self, model: &mut M, g: &DVector<f64>, t: u64) -> Result<()> {
        let delta = self.config.schedule.delta_at(t);
        let update: DVector<f64> = match self.config.kind {
            OptimizerKind::FullBatchGd => g * delta,
            OptimizerKind::Adam { beta1, beta2, eps } => {
                if self.first_moment.len() != g.len() {
                    self.first_moment = vec![0.0; g.len()];
                    self.second_moment = vec![0.0; g.len()];
                    self.adam_steps = 0;
                }
                self.adam_steps += 1;
                let c1 = 1.0 - beta1.powi(self.adam_steps);
                let c2 = 1.0 - beta2.powi(self.adam_steps);
                DVector::from_fn(g.len(), |j, _| {
                    let m1 = &mut self.first_moment[j];
                    let v = &mut self.second_moment[j];
                    *m1 = beta1 * *m1 + (1.0 - beta1) * g[j];
                    *v = beta2 * *v + (1.0 - beta2) * g[j] * g[j];
                    delta * (*m1 / c1) / ((*v / c2).sqrt() + eps)
                })
            }
            OptimizerKind::Sgd { .. } => {
                return Err(Error::Config("minibatch SGD has no full-gradient update".into()))
            }
        };
        self.apply_update(model, &update, t)
    }

    fn apply_update<M: Model>(&mut self, model: &mut M, update: &DVector<f64>, t: u64) -> Result<()> {
        if !update.iter().all(|u| u.is_finite()) {
            return Err(Error::NonFinite {
                what: "parameter update".into(),
                step: Some(t),
            });
        }
        let theta = model.params_mut();
        for (p, u) in theta.iter_mut().zip(update.iter()) {
            *p -= u;
        }
        if self.precision == Precision::F32 {
            round_to_f32(theta);
        }
        Ok(())
    }
}

fn with_step(err: Error, t: u64) -> Error {
    match err {
        Error::NonFinite { what, .. } => Error::NonFinite {
            what,
            step: Some(t),
        },
        Error::Io { path, source, .. } => Error::Io {
            path,
            step: Some(t),
            source,
        },
        other => other,
    }
}

fn round_to_f32(theta: &mut [f64]) {
    for p in theta {
        *p = *p as f32 as f64;
    }
}

/// Functional form of a single optimizer update.
pub fn train_step<M: Model>(
    model: &M,
    data: &Dataset,
    optimizer: &mut Optimizer,
    t: u64,
) -> Result<M> {
    let mut next = model.clone();
    optimizer.step(&mut next, data, t)?;
    Ok(next)
}

/// What to run and what to keep.
#[derive(Clone, Debug)]
pub struct TrainingPlan {
    pub optimizer: OptimizerConfig,
    /// Steps whose state is snapshotted. Step 0 is always included.
    pub checkpoints: Vec<u64>,
    /// Loss is recorded every `record_interval` steps (and at checkpoints).
    pub record_interval: u64,
    pub precision: Precision,
    /// Seeds minibatch sampling.
    pub seed: u64,
}

impl TrainingPlan {
    pub fn new(optimizer: OptimizerConfig, checkpoints: Vec<u64>) -> Self {
        Self {
            optimizer,
            checkpoints,
            record_interval: 1,
            precision: Precision::F64,
            seed: 0,
        }
    }

    pub fn total_steps(&self) -> u64 {
        self.optimizer.schedule.total_steps
    }
}

/// One row of the loss time series.
#[derive(Clone, Debug, PartialEq)]
pub struct TraceRecord {
    pub t: u64,
    pub delta: f64,
    pub loss: f64,
    pub residual_norm: f64,
    pub checkpoint_id: Option<usize>,
}

/// Immutable snapshot of the model state at step `t`.
#[derive(Clone, Debug)]
pub struct Checkpoint<M> {
    pub id: usize,
    pub t: u64,
    /// Learning rate for the update leaving step `t`.
    pub delta: f64,
    pub model: M,
    pub outputs: DVector<f64>,
    pub residual: DVector<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub enum RunStatus {
    Completed,
    Diverged { step: u64, reason: String },
}

#[derive(Clone, Debug)]
pub struct TrainingTrace<M> {
    pub records: Vec<TraceRecord>,
    pub checkpoints: Vec<Checkpoint<M>>,
    pub status: RunStatus,
}

impl<M> TrainingTrace<M> {
    pub fn checkpoint_at(&self, t: u64) -> Option<&Checkpoint<M>> {
        self.checkpoints
            .binary_search_by_key(&t, |c| c.t)
            .ok()
            .map(|i| &self.checkpoints[i])
    }

    pub fn checkpoint(&self, id: usize) -> Option<&Checkpoint<M>> {
        self.checkpoints.get(id)
    }

    pub fn require(&self, t: u64) -> Result<&Checkpoint<M>> {
        self.checkpoint_at(t).ok_or(Error::MissingCheckpoint(t))
    }

    pub fn is_complete(&self) -> bool {
        self.status == RunStatus::Completed
    }

    pub fn final_record(&self) -> Option<&TraceRecord> {
        self.records.last()
    }

    /// CSV with header `t,delta,loss,residual_norm,checkpoint_id`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("t,delta,loss,residual_norm,checkpoint_id\n");
        for r in &self.records {
            let id = r.checkpoint_id.map(|i| i.to_string()).unwrap_or_default();
            out.push_str(&format!(
                "{},{:e},{:e},{:e},{}\n",
                r.t, r.delta, r.loss, r.residual_norm, id
            ));
        }
        out
    }
}

/// Trains `model` for the plan's `total_steps` updates.
pub fn run_training<M: Model>(model: M, data: &Dataset, plan: &TrainingPlan) -> Result<TrainingTrace<M>> {
    run_training_with(model, data, plan, |_| Ok(()))
}

/// Like [`run_training`], handing every checkpoint to `on_checkpoint` as soon
/// as it is taken. Errors from the callback abort the run; divergence does
/// not, it ends the run and is reported in [`TrainingTrace::status`].
pub fn run_training_with<M, F>(
    mut model: M,
    data: &Dataset,
    plan: &TrainingPlan,
    mut on_checkpoint: F,
) -> Result<TrainingTrace<M>>
where
    M: Model,
    F: FnMut(&Checkpoint<M>) -> Result<()>,
{
    plan.optimizer.validate(data.len())?;
    if plan.record_interval == 0 {
        return Err(Error::Config("record_interval must be positive".into()));
    }
    let total = plan.total_steps();
    let schedule = plan.optimizer.schedule.clone();
    let mut wanted: BTreeSet<u64> = plan.checkpoints.iter().copied().filter(|&t| t <= total).collect();
    wanted.insert(0);

    if plan.precision == Precision::F32 {
        round_to_f32(model.params_mut());
    }
    let mut optimizer = Optimizer::new(plan.optimizer.clone(), plan.precision, plan.seed);
    let mut trace = TrainingTrace {
        records: Vec::new(),
        checkpoints: Vec::new(),
        status: RunStatus::Completed,
    };

    let n = data.len() as f64;
    for t in 0..=total {
        // Full-batch optimizers get the loss gradient from the same forward pass.
        let mut grad: Option<DVector<f64>> = None;
        let mut forward = None;
        if optimizer.is_full_batch() && t < total {
            let labels = &data.labels;
            if let Ok((f, g)) = model.forward_and_gradient(&data.inputs, |f| (f - labels) / n) {
                forward = Some(Ok(f));
                grad = Some(g);
            }
        }
        let forward = forward.unwrap_or_else(|| model.forward_batch(&data.inputs));
        let f = match forward {
            Ok(f) => f,
            Err(Error::NonFinite { what, .. }) => {
                trace.status = RunStatus::Diverged {
                    step: t,
                    reason: format!("non-finite {what}"),
                };
                break;
            }
            Err(e) => return Err(with_step(e, t)),
        };
        let (loss, m) = loss_from_outputs(&f, &data.labels);
        let delta = schedule.delta_at(t);

        let checkpoint_id = if wanted.contains(&t) {
            let ckpt = Checkpoint {
                id: trace.checkpoints.len(),
                t,
                delta,
                model: model.clone(),
                outputs: f,
                residual: m.clone(),
            };
            on_checkpoint(&ckpt).map_err(|e| with_step(e, t))?;
            trace.checkpoints.push(ckpt);
            Some(trace.checkpoints.len() - 1)
        } else {
            None
        };
        if checkpoint_id.is_some() || t % plan.record_interval == 0 || t == total {
            trace.records.push(TraceRecord {
                t,
                delta,
                loss,
                residual_norm: m.norm(),
                checkpoint_id,
            });
        }
        if !loss.is_finite() {
            trace.status = RunStatus::Diverged {
                step: t,
                reason: "non-finite loss".into(),
            };
            break;
        }
        if t == total {
            break;
        }
        let stepped = match &grad {
            Some(g) => optimizer.apply_full_gradient(&mut model, g, t),
            None => optimizer.step_with_residual(&mut model, data, &m, t),
        };
        match stepped {
            Ok(()) => {}
            Err(Error::NonFinite { what, .. }) => {
                trace.status = RunStatus::Diverged {
                    step: t,
                    reason: format!("non-finite {what}"),
                };
                break;
            }
            Err(e) => return Err(e),
        }
    }
    Ok(trace)
}
