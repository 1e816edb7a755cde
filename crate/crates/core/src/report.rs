//! Figures for a finished seed directory.

use std::path::{Path, PathBuf};

use crate::connectivity::{lmc_from_csv, path_from_csv};
use crate::error::{GapError, Result};
use crate::experiment::{trace_file_name, RunInfo, RUN_FILE};
use crate::instrument::{trace_from_csv, TraceRecord};
use crate::svg::{LinePlot, Series};

const BLUE: &str = "#1f77b4";
const RED: &str = "#d62728";
const BLACK: &str = "#222222";
const GREEN: &str = "#2ca02c";

fn read(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| GapError::io(path, e))
}

/// Concatenated traces of every task found in `dir`, in task order.
pub fn load_traces(dir: &Path) -> Result<Vec<TraceRecord>> {
    let mut all = Vec::new();
    for k in 0.. {
        let path = dir.join(trace_file_name(k));
        if !path.exists() {
            break;
        }
        let trace = trace_from_csv(&read(&path)?, &path.display().to_string())?;
        if let (Some(last), Some(first)) = (all.last(), trace.first()) {
            let (last, first): (&TraceRecord, &TraceRecord) = (last, first);
            if first.iteration <= last.iteration {
                return Err(GapError::format_at_line(
                    path.display().to_string(),
                    2,
                    format!("iteration {} does not follow the previous task", first.iteration),
                ));
            }
        }
        all.extend(trace);
    }
    Ok(all)
}

fn boundaries(dir: &Path, trace: &[TraceRecord]) -> Result<Vec<u64>> {
    let path = dir.join(RUN_FILE);
    if path.exists() {
        let info: RunInfo =
            serde_json::from_str(&read(&path)?).map_err(|e| GapError::Config(format!("{}: {e}", path.display())))?;
        return Ok(info.boundaries);
    }
    Ok(trace
        .windows(2)
        .filter(|w| w[0].task != w[1].task)
        .map(|w| w[0].iteration)
        .collect())
}

/// Writes `accuracy.svg`, `probe.svg` and, when connectivity results exist, `lmc.svg`.
pub fn render_report(dir: &Path) -> Result<Vec<PathBuf>> {
    let trace = load_traces(dir)?;
    if trace.is_empty() {
        return Err(GapError::InsufficientTrace(format!("no trace records in {}", dir.display())));
    }
    let bounds = boundaries(dir, &trace)?;
    let mut written = Vec::new();
    let mut emit = |name: &str, svg: String| -> Result<()> {
        let path = dir.join(name);
        std::fs::write(&path, svg).map_err(|e| GapError::io(&path, e))?;
        written.push(path);
        Ok(())
    };

    let test: Vec<(f64, f64)> = trace
        .iter()
        .filter_map(|r| r.test_acc.map(|a| (r.iteration as f64, a)))
        .collect();
    if test.is_empty() {
        return Err(GapError::InsufficientTrace("trace has no test evaluations".into()));
    }
    let mut plot = LinePlot::new("Test accuracy", "iteration", "accuracy")
        .y_range(0.0, 1.0)
        .series(Series::new("test accuracy", BLUE, test));
    for &b in &bounds {
        plot = plot.marker(b as f64, "task switch");
    }
    emit("accuracy.svg", plot.render())?;

    // Mini-batch probe around the last boundary, or over the whole run.
    let (lo, hi) = match bounds.last() {
        Some(&b) => (b.saturating_sub(50), b + 400),
        None => (0, u64::MAX),
    };
    let near: Vec<&TraceRecord> = trace.iter().filter(|r| (lo..=hi).contains(&r.iteration)).collect();
    let pick = |f: fn(&TraceRecord) -> Option<f64>| -> Vec<(f64, f64)> {
        near.iter().filter_map(|r| f(r).map(|v| (r.iteration as f64, v))).collect()
    };
    let mut plot = LinePlot::new("Mini-batch accuracy before and after each update", "iteration", "accuracy")
        .y_range(0.0, 1.0)
        .series(Series::new("batch, pre-update", BLUE, pick(|r| Some(r.batch_acc_pre))))
        .series(Series::new("batch, post-update", RED, pick(|r| r.batch_acc_post)))
        .series(Series::new("test", BLACK, pick(|r| r.test_acc)).dashed());
    if let Some(&b) = bounds.last() {
        plot = plot.marker(b as f64, "task switch");
    }
    emit("probe.svg", plot.render())?;

    let lmc_path = dir.join("lmc.csv");
    let sgd_path = dir.join("sgd_path.csv");
    if lmc_path.exists() && sgd_path.exists() {
        let lmc = lmc_from_csv(&read(&lmc_path)?, &lmc_path.display().to_string())?;
        let path = path_from_csv(&read(&sgd_path)?, &sgd_path.display().to_string())?;
        let first = *path.iterations.first().unwrap_or(&0) as f64;
        let span = (*path.iterations.last().unwrap_or(&0) as f64 - first).max(1.0);
        let sgd: Vec<(f64, f64)> = path
            .iterations
            .iter()
            .zip(&path.losses)
            .map(|(&i, &l)| ((i as f64 - first) / span, l))
            .collect();
        let lin: Vec<(f64, f64)> = lmc.lambdas.iter().copied().zip(lmc.losses.iter().copied()).collect();
        let plot = LinePlot::new(
            "Loss along the linear path and the SGD trajectory",
            "lambda / fraction of recorded trajectory",
            "test loss",
        )
        .series(Series::new("linear path", GREEN, lin))
        .series(Series::new("SGD trajectory", RED, sgd));
        emit("lmc.svg", plot.render())?;
    }
    Ok(written)
}
