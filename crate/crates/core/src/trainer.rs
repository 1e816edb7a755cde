//! Momentum SGD over a task sequence with warm starts between tasks.

use serde::{Deserialize, Serialize};

use crate::autodiff::backward;
use crate::data::{batch_count, batch_iter, Dataset, TaskSequence};
use crate::error::{GapError, Result};
use crate::instrument::TraceRecord;
use crate::loss::accuracy;
use crate::model::{ModelSpec, ParamVector};
use crate::rng::{derive_seed, stream, Rng};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr: f64,
    pub momentum: f64,
    pub batch_size: usize,
    /// Epochs per task; the last entry repeats for any further tasks.
    pub epochs: Vec<usize>,
    /// Sparse evaluation period, in iterations.
    pub eval_every: usize,
    /// Sparse checkpoint period, in iterations.
    pub checkpoint_every: usize,
    /// Evaluate every iteration within this many iterations of a task boundary
    /// (both sides); checkpoint every iteration for this many iterations after one.
    pub dense_window: usize,
    pub reset_velocity: bool,
    /// Per-run seed; set by the caller, never read from a config file.
    #[serde(skip)]
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 0.01,
            momentum: 0.9,
            batch_size: 64,
            epochs: vec![100, 5],
            eval_every: 50,
            checkpoint_every: 50,
            dense_window: 400,
            reset_velocity: true,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(GapError::Config(format!("lr must be positive, got {}", self.lr)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(GapError::Config(format!("momentum must be in [0, 1), got {}", self.momentum)));
        }
        if self.batch_size == 0 {
            return Err(GapError::Config("batch_size must be at least 1".into()));
        }
        if self.epochs.is_empty() {
            return Err(GapError::Config("epochs must list at least one value".into()));
        }
        if self.eval_every == 0 || self.checkpoint_every == 0 {
            return Err(GapError::Config("eval_every and checkpoint_every must be at least 1".into()));
        }
        Ok(())
    }

    pub fn epochs_for(&self, task: usize) -> usize {
        *self.epochs.get(task).unwrap_or_else(|| self.epochs.last().unwrap())
    }
}

/// Momentum buffer, one entry per parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub velocity: Vec<f64>,
}

impl OptimizerState {
    pub fn new(n_params: usize) -> Self {
        Self {
            velocity: vec![0.0; n_params],
        }
    }

    pub fn reset(&mut self) {
        self.velocity.fill(0.0);
    }
}

/// `v' = m v + g`, `theta' = theta - lr v'`.
pub fn sgd_step(
    params: &ParamVector,
    grads: &ParamVector,
    state: &OptimizerState,
    lr: f64,
    momentum: f64,
) -> Result<(ParamVector, OptimizerState)> {
    params.check_combinable(grads)?;
    if state.velocity.len() != params.len() {
        return Err(GapError::Shape(format!(
            "velocity has {} entries for {} parameters",
            state.velocity.len(),
            params.len()
        )));
    }
    let velocity: Vec<f64> = state
        .velocity
        .iter()
        .zip(grads.values())
        .map(|(&v, &g)| momentum * v + g)
        .collect();
    let mut next = params.clone();
    for (p, &v) in next.values_mut().iter_mut().zip(&velocity) {
        *p -= lr * v;
    }
    if !next.values().iter().all(|p| p.is_finite()) {
        return Err(GapError::Divergence { iteration: None });
    }
    Ok((next, OptimizerState { velocity }))
}

/// What the trainer knows about the step it just took.
pub struct StepInfo<'a> {
    /// Global iteration, counting from 1 across all tasks.
    pub iteration: u64,
    pub task: usize,
    /// Iteration within the current task, counting from 1.
    pub local_iteration: u64,
    pub batch: &'a Tensor,
    pub labels: &'a [usize],
    /// Logits of the batch under the pre-update parameters.
    pub logits: &'a Tensor,
    pub loss: f64,
}

/// Observation points inside the training loop. All methods default to no-ops.
pub trait TrainHooks {
    fn pre_update(&mut self, _step: &StepInfo<'_>, _params: &ParamVector) -> Result<()> {
        Ok(())
    }

    /// Called after the update with the new parameters; may fill post-update fields.
    fn post_update(&mut self, _step: &StepInfo<'_>, _params: &ParamVector, _record: &mut TraceRecord) -> Result<()> {
        Ok(())
    }

    /// Test-set `(loss, accuracy)` at an evaluation tick.
    fn eval_tick(&mut self, _step: &StepInfo<'_>, _params: &ParamVector) -> Result<Option<(f64, f64)>> {
        Ok(None)
    }

    /// Stores a checkpoint and returns its id.
    fn checkpoint_tick(&mut self, _step: &StepInfo<'_>, _params: &ParamVector) -> Result<Option<String>> {
        Ok(None)
    }
}

/// Hooks that observe nothing.
pub struct NoHooks;

impl TrainHooks for NoHooks {}

/// Result of training one task.
#[derive(Debug, Clone)]
pub struct TaskOutcome {
    pub params: ParamVector,
    pub trace: Vec<TraceRecord>,
    pub iterations: u64,
}

/// Result of a full task sequence.
#[derive(Debug, Clone)]
pub struct SequenceRecord {
    /// One trace per task, with global iteration numbers.
    pub traces: Vec<Vec<TraceRecord>>,
    /// `boundaries[k]` is the global iteration after which task `k + 1` starts.
    pub boundaries: Vec<u64>,
    /// Parameters at the end of each task; entry `k` is the warm start of task `k + 1`.
    pub task_end_params: Vec<ParamVector>,
    /// Checkpoint id stored at the end of each task, if the hooks stored one.
    pub task_end_checkpoints: Vec<Option<String>>,
}

impl SequenceRecord {
    pub fn final_params(&self) -> &ParamVector {
        self.task_end_params.last().unwrap()
    }

    pub fn global_trace(&self) -> Vec<TraceRecord> {
        self.traces.concat()
    }
}

pub struct Trainer<'a> {
    spec: &'a ModelSpec,
    train: &'a Dataset,
    config: &'a TrainConfig,
}

impl<'a> Trainer<'a> {
    pub fn new(spec: &'a ModelSpec, train: &'a Dataset, config: &'a TrainConfig) -> Result<Self> {
        config.validate()?;
        if train.sample_shape() != spec.input_shape() {
            return Err(GapError::Shape(format!(
                "dataset samples {:?} do not match model input {:?}",
                train.sample_shape(),
                spec.input_shape()
            )));
        }
        Ok(Self { spec, train, config })
    }

    fn is_eval_tick(&self, task: usize, local: u64, total: u64) -> bool {
        let dense = self.config.dense_window as u64;
        local.is_multiple_of(self.config.eval_every as u64)
            || local == total
            || local + dense > total
            || (task > 0 && local <= dense)
    }

    fn is_checkpoint_tick(&self, task: usize, local: u64, total: u64) -> bool {
        local.is_multiple_of(self.config.checkpoint_every as u64)
            || local == total
            || (task > 0 && local <= self.config.dense_window as u64)
    }

    /// Trains `epochs` epochs over `pool`, numbering iterations from `start_iteration + 1`.
    #[allow(clippy::too_many_arguments)]
    pub fn train_task(
        &self,
        params: ParamVector,
        pool: &[usize],
        task: usize,
        epochs: usize,
        start_iteration: u64,
        state: &mut OptimizerState,
        rng: &mut Rng,
        hooks: &mut dyn TrainHooks,
    ) -> Result<TaskOutcome> {
        params.check_bound(self.spec)?;
        if pool.is_empty() {
            return Err(GapError::Argument(format!("task {task} has an empty pool")));
        }
        let total = batch_count(pool.len(), self.config.batch_size, epochs) as u64;
        let mut params = params;
        let mut trace = Vec::with_capacity(total as usize);
        for (j, rows) in batch_iter(pool, self.config.batch_size, epochs, rng).enumerate() {
            let local = j as u64 + 1;
            let iteration = start_iteration + local;
            let diverged = |e: GapError| match e {
                GapError::Divergence { .. } => GapError::Divergence {
                    iteration: Some(iteration),
                },
                other => other,
            };
            let (batch, labels) = self.train.gather(&rows);
            let out = backward(self.spec, &params, &batch, &labels).map_err(diverged)?;
            let step = StepInfo {
                iteration,
                task,
                local_iteration: local,
                batch: &batch,
                labels: &labels,
                logits: &out.logits,
                loss: out.loss,
            };
            hooks.pre_update(&step, &params)?;
            let (next, next_state) =
                sgd_step(&params, &out.grads, state, self.config.lr, self.config.momentum).map_err(diverged)?;
            params = next;
            *state = next_state;

            let mut record = TraceRecord::new(iteration, task, out.loss, accuracy(&out.logits, &labels)?);
            hooks.post_update(&step, &params, &mut record).map_err(diverged)?;
            if self.is_eval_tick(task, local, total) {
                if let Some((loss, acc)) = hooks.eval_tick(&step, &params).map_err(diverged)? {
                    record.test_loss = Some(loss);
                    record.test_acc = Some(acc);
                }
            }
            if self.is_checkpoint_tick(task, local, total) {
                record.checkpoint = hooks.checkpoint_tick(&step, &params)?;
            }
            trace.push(record);
        }
        Ok(TaskOutcome {
            params,
            iterations: total,
            trace,
        })
    }

    /// Trains every task in order, each warm-started from the previous task's final parameters.
    pub fn run_sequence(
        &self,
        init: ParamVector,
        seq: &TaskSequence,
        hooks: &mut dyn TrainHooks,
    ) -> Result<SequenceRecord> {
        if seq.n_samples() != self.train.len() {
            return Err(GapError::Argument(format!(
                "task sequence covers {} samples but the training set has {}",
                seq.n_samples(),
                self.train.len()
            )));
        }
        let mut rng = Rng::new(derive_seed(self.config.seed, stream::BATCHES));
        let mut state = OptimizerState::new(self.spec.n_params());
        let mut params = init;
        let mut record = SequenceRecord {
            traces: Vec::new(),
            boundaries: Vec::new(),
            task_end_params: Vec::new(),
            task_end_checkpoints: Vec::new(),
        };
        let mut iteration = 0;
        for k in 0..seq.n_tasks() {
            if k > 0 {
                record.boundaries.push(iteration);
                if self.config.reset_velocity {
                    state.reset();
                }
            }
            let pool = seq.pool(k);
            let outcome = self.train_task(
                params,
                &pool,
                k,
                self.config.epochs_for(k),
                iteration,
                &mut state,
                &mut rng,
                hooks,
            )?;
            iteration += outcome.iterations;
            params = outcome.params;
            record
                .task_end_checkpoints
                .push(outcome.trace.last().and_then(|r| r.checkpoint.clone()));
            record.traces.push(outcome.trace);
            record.task_end_params.push(params.clone());
        }
        Ok(record)
    }
}
