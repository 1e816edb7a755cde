//! Linear paths between checkpoints and the loss along the recorded SGD trajectory.

use std::fmt::Write as _;

use rayon::prelude::*;

use crate::checkpoint::CheckpointStore;
use crate::data::Dataset;
use crate::error::{GapError, Result};
use crate::instrument::eval_test;
use crate::model::{ModelSpec, ParamVector};
use crate::numfmt::sig9;

/// Snaps `lambda` to a multiple of 2^-53 so that `1 - lambda` is exact.
fn snap(lambda: f64) -> f64 {
    const SCALE: f64 = (1u64 << 53) as f64;
    (lambda * SCALE).round_ties_even() / SCALE
}

/// `(1 - lambda) * theta1 + lambda * theta2`, elementwise.
///
/// `lambda = 0` returns `theta1` and `lambda = 1` returns `theta2` exactly, and
/// swapping the endpoints while replacing `lambda` by `1 - lambda` gives a
/// bit-identical result.
pub fn interpolate(theta1: &ParamVector, theta2: &ParamVector, lambda: f64) -> Result<ParamVector> {
    theta1.check_combinable(theta2)?;
    if !(0.0..=1.0).contains(&lambda) {
        return Err(GapError::Argument(format!("lambda {lambda} outside [0, 1]")));
    }
    let wb = snap(lambda);
    let wa = 1.0 - wb;
    let values = theta1
        .values()
        .iter()
        .zip(theta2.values())
        .map(|(&a, &b)| {
            if wb == 0.0 {
                a
            } else if wa == 0.0 {
                b
            } else {
                wa * a + wb * b
            }
        })
        .collect();
    Ok(ParamVector::from_raw(values, *theta1.digest()))
}

/// Loss and accuracy sampled along a linear path.
#[derive(Debug, Clone, PartialEq)]
pub struct LmcCurve {
    pub lambdas: Vec<f64>,
    pub losses: Vec<f64>,
    pub accuracies: Vec<f64>,
}

/// `{0, step, 2 step, ..., 1}` with 1 always included.
pub fn lambda_grid(step: f64) -> Result<Vec<f64>> {
    if !(step > 0.0 && step <= 0.5) {
        return Err(GapError::Argument(format!("lambda step must be in (0, 0.5], got {step}")));
    }
    let inv = 1.0 / step;
    let n = inv.round();
    if (n * step - 1.0).abs() < 1e-9 {
        let n = n as u64;
        return Ok((0..=n).map(|k| k as f64 / n as f64).collect());
    }
    let mut grid: Vec<f64> = (0..)
        .map(|k| k as f64 * step)
        .take_while(|&l| l < 1.0 - 1e-12)
        .collect();
    grid.push(1.0);
    Ok(grid)
}

/// Evaluates the linear path between `theta1` (lambda = 0) and `theta2` (lambda = 1).
///
/// Grid points are evaluated independently and in parallel.
pub fn lmc_curve(
    spec: &ModelSpec,
    theta1: &ParamVector,
    theta2: &ParamVector,
    step: f64,
    evalset: &Dataset,
    eval_batch: usize,
) -> Result<LmcCurve> {
    theta1.check_bound(spec)?;
    theta1.check_combinable(theta2)?;
    let lambdas = lambda_grid(step)?;
    let points: Vec<(f64, f64)> = lambdas
        .par_iter()
        .map(|&l| eval_test(spec, &interpolate(theta1, theta2, l)?, evalset, eval_batch))
        .collect::<Result<_>>()?;
    let (losses, accuracies) = points.into_iter().unzip();
    Ok(LmcCurve {
        lambdas,
        losses,
        accuracies,
    })
}

/// Highest interior loss minus the higher endpoint loss. Negative when the
/// interior stays below both endpoints; `-inf` for a curve without interior points.
pub fn barrier(curve: &LmcCurve) -> f64 {
    let n = curve.losses.len();
    if n < 3 {
        return f64::NEG_INFINITY;
    }
    let ends = curve.losses[0].max(curve.losses[n - 1]);
    let interior = curve.losses[1..n - 1]
        .iter()
        .copied()
        .fold(f64::NEG_INFINITY, f64::max);
    interior - ends
}

/// Loss and accuracy at stored trajectory checkpoints.
#[derive(Debug, Clone, PartialEq)]
pub struct PathCurve {
    pub iterations: Vec<u64>,
    pub losses: Vec<f64>,
    pub accuracies: Vec<f64>,
}

impl PathCurve {
    pub fn max_loss(&self) -> f64 {
        self.losses.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }
}

/// Evaluates every requested checkpoint, in iteration order.
pub fn sgd_path_loss(
    spec: &ModelSpec,
    store: &CheckpointStore,
    iterations: &[u64],
    evalset: &Dataset,
    eval_batch: usize,
) -> Result<PathCurve> {
    let mut its = iterations.to_vec();
    its.sort_unstable();
    its.dedup();
    if its.is_empty() {
        return Err(GapError::Argument("no trajectory iterations requested".into()));
    }
    let missing: Vec<u64> = its.iter().copied().filter(|&i| !store.contains(i)).collect();
    if !missing.is_empty() {
        return Err(GapError::MissingCheckpoint(missing));
    }
    let points: Vec<(f64, f64)> = its
        .par_iter()
        .map(|&it| {
            let params = store.get(it)?;
            params.check_bound(spec)?;
            eval_test(spec, &params, evalset, eval_batch)
        })
        .collect::<Result<_>>()?;
    let (losses, accuracies) = points.into_iter().unzip();
    Ok(PathCurve {
        iterations: its,
        losses,
        accuracies,
    })
}

pub fn lmc_to_csv(curve: &LmcCurve) -> String {
    let mut s = String::from("lambda,loss,accuracy\n");
    for i in 0..curve.lambdas.len() {
        let _ = writeln!(
            s,
            "{},{},{}",
            sig9(curve.lambdas[i]),
            sig9(curve.losses[i]),
            sig9(curve.accuracies[i])
        );
    }
    s
}

pub fn path_to_csv(curve: &PathCurve) -> String {
    let mut s = String::from("iter,loss,accuracy\n");
    for i in 0..curve.iterations.len() {
        let _ = writeln!(
            s,
            "{},{},{}",
            curve.iterations[i],
            sig9(curve.losses[i]),
            sig9(curve.accuracies[i])
        );
    }
    s
}

fn parse_three(text: &str, name: &str, header: &str) -> Result<Vec<(String, f64, f64)>> {
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h.trim_end() == header => {}
        _ => return Err(GapError::format_at_line(name, 1, format!("expected header {header:?}"))),
    }
    let mut out = Vec::new();
    for (i, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.trim_end().split(',').collect();
        let bad = || GapError::format_at_line(name, i + 1, format!("malformed row {line:?}"));
        if f.len() != 3 {
            return Err(bad());
        }
        let loss = f[1].parse().map_err(|_| bad())?;
        let acc = f[2].parse().map_err(|_| bad())?;
        out.push((f[0].to_string(), loss, acc));
    }
    Ok(out)
}

pub fn lmc_from_csv(text: &str, name: &str) -> Result<LmcCurve> {
    let rows = parse_three(text, name, "lambda,loss,accuracy")?;
    let mut curve = LmcCurve {
        lambdas: Vec::new(),
        losses: Vec::new(),
        accuracies: Vec::new(),
    };
    for (i, (l, loss, acc)) in rows.into_iter().enumerate() {
        let l = l
            .parse()
            .map_err(|_| GapError::format_at_line(name, i + 2, "bad lambda"))?;
        curve.lambdas.push(l);
        curve.losses.push(loss);
        curve.accuracies.push(acc);
    }
    Ok(curve)
}

pub fn path_from_csv(text: &str, name: &str) -> Result<PathCurve> {
    let rows = parse_three(text, name, "iter,loss,accuracy")?;
    let mut curve = PathCurve {
        iterations: Vec::new(),
        losses: Vec::new(),
        accuracies: Vec::new(),
    };
    for (i, (it, loss, acc)) in rows.into_iter().enumerate() {
        let it = it
            .parse()
            .map_err(|_| GapError::format_at_line(name, i + 2, "bad iteration"))?;
        curve.iterations.push(it);
        curve.losses.push(loss);
        curve.accuracies.push(acc);
    }
    Ok(curve)
}
