//! Measurement layer: test-set evaluation, the per-batch pre/post-update
//! probe, trace records and stability-gap metrics.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::autodiff::forward;
use crate::checkpoint::CheckpointStore;
use crate::data::Dataset;
use crate::error::{GapError, Result};
use crate::loss::{argmax, correct_count, softmax_cross_entropy};
use crate::model::{ModelSpec, ParamVector};
use crate::numfmt::sig9;
use crate::tensor::Tensor;
use crate::trainer::{StepInfo, TrainHooks};

/// One training iteration as seen by the instrumentation.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceRecord {
    pub iteration: u64,
    pub task: usize,
    pub batch_loss_pre: f64,
    pub batch_acc_pre: f64,
    pub batch_loss_post: Option<f64>,
    pub batch_acc_post: Option<f64>,
    pub test_loss: Option<f64>,
    pub test_acc: Option<f64>,
    pub checkpoint: Option<String>,
}

impl TraceRecord {
    pub fn new(iteration: u64, task: usize, batch_loss_pre: f64, batch_acc_pre: f64) -> Self {
        Self {
            iteration,
            task,
            batch_loss_pre,
            batch_acc_pre,
            batch_loss_post: None,
            batch_acc_post: None,
            test_loss: None,
            test_acc: None,
            checkpoint: None,
        }
    }
}

pub const DEFAULT_EVAL_BATCH: usize = 256;

fn row_loss(row: &[f64], label: usize) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = row.iter().map(|&z| (z - max).exp()).sum::<f64>().ln();
    lse - (row[label] - max)
}

/// Mean loss and accuracy over the whole test set, evaluated `eval_batch` rows at a time.
///
/// Per-sample losses are summed in row order, so the result does not depend on `eval_batch`.
pub fn eval_test(spec: &ModelSpec, params: &ParamVector, test: &Dataset, eval_batch: usize) -> Result<(f64, f64)> {
    if test.is_empty() {
        return Err(GapError::Argument("empty evaluation set".into()));
    }
    if eval_batch == 0 {
        return Err(GapError::Argument("eval batch must be positive".into()));
    }
    let n = test.len();
    let mut total = 0.0;
    let mut correct = 0usize;
    let rows: Vec<usize> = (0..n).collect();
    for chunk in rows.chunks(eval_batch) {
        let (x, y) = test.gather(chunk);
        let logits = forward(spec, params, &x)?;
        for (i, &l) in y.iter().enumerate() {
            if l >= spec.n_classes() {
                return Err(GapError::LabelRange {
                    label: l,
                    n_classes: spec.n_classes(),
                });
            }
            total += row_loss(logits.row(i), l);
            if argmax(logits.row(i)) == l {
                correct += 1;
            }
        }
    }
    Ok((total / n as f64, correct as f64 / n as f64))
}

/// Batch accuracy and loss before and after one update.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BatchProbe {
    pub acc_pre: f64,
    pub acc_post: f64,
    pub loss_pre: f64,
    pub loss_post: f64,
}

/// Pre-update numbers come from `pre_logits` (already computed by the backward
/// pass); post-update numbers from one fresh forward pass with `params_after`.
pub fn batch_probe(
    spec: &ModelSpec,
    pre_logits: &Tensor,
    params_after: &ParamVector,
    batch: &Tensor,
    labels: &[usize],
) -> Result<BatchProbe> {
    let n = labels.len() as f64;
    let (loss_pre, _) = softmax_cross_entropy(pre_logits, labels)?;
    let acc_pre = correct_count(pre_logits, labels)? as f64 / n;
    let post = forward(spec, params_after, batch)?;
    let (loss_post, _) = softmax_cross_entropy(&post, labels)?;
    let acc_post = correct_count(&post, labels)? as f64 / n;
    Ok(BatchProbe {
        acc_pre,
        acc_post,
        loss_pre,
        loss_post,
    })
}

/// Training hooks that fill trace records: batch probe, test evaluation and checkpoints.
pub struct Recorder<'a> {
    spec: &'a ModelSpec,
    test: &'a Dataset,
    eval_batch: usize,
    probe: bool,
    store: Option<&'a mut CheckpointStore>,
}

impl<'a> Recorder<'a> {
    pub fn new(spec: &'a ModelSpec, test: &'a Dataset) -> Self {
        Self {
            spec,
            test,
            eval_batch: DEFAULT_EVAL_BATCH,
            probe: true,
            store: None,
        }
    }

    pub fn eval_batch(mut self, eval_batch: usize) -> Self {
        self.eval_batch = eval_batch;
        self
    }

    /// Skip the post-update forward pass.
    pub fn without_probe(mut self) -> Self {
        self.probe = false;
        self
    }

    pub fn with_store(mut self, store: &'a mut CheckpointStore) -> Self {
        self.store = Some(store);
        self
    }
}

impl TrainHooks for Recorder<'_> {
    fn post_update(&mut self, step: &StepInfo<'_>, params: &ParamVector, record: &mut TraceRecord) -> Result<()> {
        if self.probe {
            let p = batch_probe(self.spec, step.logits, params, step.batch, step.labels)?;
            record.batch_loss_post = Some(p.loss_post);
            record.batch_acc_post = Some(p.acc_post);
        }
        Ok(())
    }

    fn eval_tick(&mut self, _step: &StepInfo<'_>, params: &ParamVector) -> Result<Option<(f64, f64)>> {
        eval_test(self.spec, params, self.test, self.eval_batch).map(Some)
    }

    fn checkpoint_tick(&mut self, step: &StepInfo<'_>, params: &ParamVector) -> Result<Option<String>> {
        match self.store.as_deref_mut() {
            Some(store) => store.put(step.task, step.iteration, params).map(Some),
            None => Ok(None),
        }
    }
}

/// Parameters of the gap analysis.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GapParams {
    /// Pre-boundary evaluations averaged into the baseline.
    pub k: usize,
    /// Consecutive evaluations that must hold the baseline to count as recovered.
    pub w: usize,
    pub tolerance: f64,
    /// Post-boundary iterations considered.
    pub window: u64,
}

impl Default for GapParams {
    fn default() -> Self {
        Self {
            k: 5,
            w: 5,
            tolerance: 0.0,
            window: 2000,
        }
    }
}

impl GapParams {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 || self.w == 0 || self.window == 0 {
            return Err(GapError::Config("gap k, w and window must be at least 1".into()));
        }
        if !(self.tolerance >= 0.0) {
            return Err(GapError::Config("gap tolerance must be non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GapMetrics {
    pub boundary: u64,
    pub pre_switch_acc: f64,
    pub min_acc: f64,
    /// `pre_switch_acc - min_acc`; negative when accuracy never falls below the baseline.
    pub gap_depth: f64,
    /// Offset of the (first) minimum from the boundary.
    pub min_iteration: u64,
    /// Offset of the first evaluation that starts a recovered window.
    pub recovery_iteration: Option<u64>,
    pub recovered: bool,
}

/// `(iteration, test accuracy)` for every evaluated record.
pub fn eval_points(trace: &[TraceRecord]) -> Vec<(u64, f64)> {
    trace
        .iter()
        .filter_map(|r| r.test_acc.map(|a| (r.iteration, a)))
        .collect()
}

/// Gap metrics from a trace; only records carrying test accuracy are used.
pub fn compute_gap(trace: &[TraceRecord], boundary: u64, params: &GapParams) -> Result<GapMetrics> {
    compute_gap_from_evals(&eval_points(trace), boundary, params)
}

/// Gap metrics from `(iteration, test accuracy)` pairs sorted by iteration.
pub fn compute_gap_from_evals(evals: &[(u64, f64)], boundary: u64, params: &GapParams) -> Result<GapMetrics> {
    params.validate()?;
    let pre: Vec<f64> = evals.iter().filter(|(it, _)| *it <= boundary).map(|&(_, a)| a).collect();
    let post: Vec<(u64, f64)> = evals
        .iter()
        .filter(|(it, _)| *it > boundary && *it - boundary <= params.window)
        .copied()
        .collect();
    if pre.len() < params.k {
        return Err(GapError::InsufficientTrace(format!(
            "{} evaluations before iteration {boundary}, need {}",
            pre.len(),
            params.k
        )));
    }
    if post.is_empty() {
        return Err(GapError::InsufficientTrace(format!(
            "no evaluations within {} iterations after {boundary}",
            params.window
        )));
    }
    let baseline = pre[pre.len() - params.k..].iter().sum::<f64>() / params.k as f64;
    let (mut min_it, mut min_acc) = post[0];
    for &(it, a) in &post[1..] {
        if a < min_acc {
            min_acc = a;
            min_it = it;
        }
    }
    let floor = baseline - params.tolerance;
    let recovery = (0..post.len())
        .filter(|&t| t + params.w <= post.len())
        .find(|&t| post[t..t + params.w].iter().all(|&(_, a)| a >= floor))
        .map(|t| post[t].0 - boundary);
    Ok(GapMetrics {
        boundary,
        pre_switch_acc: baseline,
        min_acc,
        gap_depth: baseline - min_acc,
        min_iteration: min_it - boundary,
        recovery_iteration: recovery,
        recovered: recovery.is_some(),
    })
}

/// Population standard deviation of the last `n` pre-boundary test accuracies.
pub fn pre_switch_std(trace: &[TraceRecord], boundary: u64, n: usize) -> Result<f64> {
    let pre: Vec<f64> = eval_points(trace)
        .into_iter()
        .filter(|(it, _)| *it <= boundary)
        .map(|(_, a)| a)
        .collect();
    if pre.len() < n || n == 0 {
        return Err(GapError::InsufficientTrace(format!(
            "{} evaluations before iteration {boundary}, need {n}",
            pre.len()
        )));
    }
    let tail = &pre[pre.len() - n..];
    let mean = tail.iter().sum::<f64>() / n as f64;
    Ok((tail.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / n as f64).sqrt())
}

impl GapMetrics {
    /// Flat `key=value` document, one entry per line.
    pub fn to_kv(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "boundary={}", self.boundary);
        let _ = writeln!(s, "pre_switch_acc={}", sig9(self.pre_switch_acc));
        let _ = writeln!(s, "min_acc={}", sig9(self.min_acc));
        let _ = writeln!(s, "gap_depth={}", sig9(self.gap_depth));
        let _ = writeln!(s, "min_iteration={}", self.min_iteration);
        let _ = writeln!(
            s,
            "recovery_iteration={}",
            self.recovery_iteration.map(|r| r.to_string()).unwrap_or_default()
        );
        let _ = writeln!(s, "recovered={}", self.recovered);
        s
    }
}

pub const TRACE_HEADER: &str =
    "iter,task,batch_loss_pre,batch_acc_pre,batch_loss_post,batch_acc_post,test_loss,test_acc,ckpt";

fn opt(v: Option<f64>) -> String {
    v.map(sig9).unwrap_or_default()
}

pub fn trace_to_csv(trace: &[TraceRecord]) -> String {
    let mut out = String::with_capacity(64 * (trace.len() + 1));
    out.push_str(TRACE_HEADER);
    out.push('\n');
    for r in trace {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{}",
            r.iteration,
            r.task,
            sig9(r.batch_loss_pre),
            sig9(r.batch_acc_pre),
            opt(r.batch_loss_post),
            opt(r.batch_acc_post),
            opt(r.test_loss),
            opt(r.test_acc),
            r.checkpoint.as_deref().unwrap_or("")
        );
    }
    out
}

/// Parses a trace CSV; errors carry the 1-based line number.
pub fn trace_from_csv(text: &str, name: &str) -> Result<Vec<TraceRecord>> {
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h.trim_end() == TRACE_HEADER => {}
        _ => return Err(GapError::format_at_line(name, 1, "missing or unexpected trace header")),
    }
    let mut out: Vec<TraceRecord> = Vec::new();
    for (i, line) in lines {
        let n = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.trim_end().split(',').collect();
        if f.len() != 9 {
            return Err(GapError::format_at_line(name, n, format!("expected 9 fields, found {}", f.len())));
        }
        let err = |col: &str| GapError::format_at_line(name, n, format!("bad value in column {col}"));
        let num = |s: &str, col: &str| -> Result<f64> { s.parse::<f64>().map_err(|_| err(col)) };
        let optnum = |s: &str, col: &str| -> Result<Option<f64>> {
            if s.is_empty() {
                Ok(None)
            } else {
                num(s, col).map(Some)
            }
        };
        let rec = TraceRecord {
            iteration: f[0].parse().map_err(|_| err("iter"))?,
            task: f[1].parse().map_err(|_| err("task"))?,
            batch_loss_pre: num(f[2], "batch_loss_pre")?,
            batch_acc_pre: num(f[3], "batch_acc_pre")?,
            batch_loss_post: optnum(f[4], "batch_loss_post")?,
            batch_acc_post: optnum(f[5], "batch_acc_post")?,
            test_loss: optnum(f[6], "test_loss")?,
            test_acc: optnum(f[7], "test_acc")?,
            checkpoint: (!f[8].is_empty()).then(|| f[8].to_string()),
        };
        if let Some(prev) = out.last() {
            if rec.iteration <= prev.iteration {
                return Err(GapError::format_at_line(name, n, "iterations must be strictly increasing"));
            }
        }
        out.push(rec);
    }
    Ok(out)
}

/// Boundary before `task`: the last iteration of any earlier task.
pub fn boundary_before(trace: &[TraceRecord], task: usize) -> Option<u64> {
    trace.iter().filter(|r| r.task < task).map(|r| r.iteration).max()
}
