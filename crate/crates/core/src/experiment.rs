//! End-to-end runs: data, split, training, gap and connectivity analysis, outputs.

use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::checkpoint::CheckpointStore;
use crate::config::{canonical_json, ExperimentConfig, ModelConfig, RunManifest};
use crate::config::DatasetConfig;
use crate::connectivity::{lmc_curve, lmc_to_csv, path_to_csv, sgd_path_loss, LmcCurve, PathCurve};
use crate::data::{gen_blobs, load_raw, split_tasks, Dataset, TaskSequence};
use crate::error::{GapError, Result};
use crate::instrument::{compute_gap, trace_to_csv, GapMetrics, Recorder};
use crate::model::{init_params, ModelSpec};
use crate::rng::{derive_seed, stream};
use crate::trainer::{SequenceRecord, Trainer};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const RUN_FILE: &str = "run.json";
pub const CHECKPOINT_DIR: &str = "checkpoints";

/// Data and architecture shared by every seed of an experiment.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub spec: ModelSpec,
    pub train: Dataset,
    pub test: Dataset,
}

pub fn build_spec(model: &ModelConfig, sample_shape: Vec<usize>, n_classes: usize) -> Result<ModelSpec> {
    match model {
        ModelConfig::Mlp { hidden } => ModelSpec::mlp(sample_shape, hidden, n_classes),
        ModelConfig::Smallcnn { channels } => ModelSpec::small_cnn(sample_shape, channels, n_classes),
    }
}

pub fn load_dataset(cfg: &DatasetConfig) -> Result<(Dataset, Dataset)> {
    match cfg {
        DatasetConfig::Blobs {
            classes,
            per_class,
            dim,
            spread,
            seed,
        } => gen_blobs(*seed, *classes, *per_class, *dim, *spread),
        DatasetConfig::Raw {
            train_features,
            train_labels,
            test_features,
            test_labels,
            ..
        } => {
            let (train_meta, test_meta) = cfg.raw_meta().expect("raw config has metadata");
            let train = load_raw(train_features, train_labels, &train_meta)?;
            let test = load_raw(test_features, test_labels, &test_meta)?;
            Ok((train, test))
        }
    }
}

pub fn prepare(cfg: &ExperimentConfig) -> Result<Prepared> {
    let (train, test) = load_dataset(&cfg.dataset)?;
    let spec = build_spec(&cfg.model, cfg.dataset.sample_shape(), cfg.dataset.n_classes())?;
    Ok(Prepared { spec, train, test })
}

/// Gap and connectivity results around the last task boundary.
#[derive(Debug, Clone)]
pub struct Analysis {
    pub boundary: u64,
    pub gap: GapMetrics,
    /// Linear path from the warm start of the last task to the final parameters.
    pub lmc: LmcCurve,
    /// Loss at the trajectory checkpoints from the boundary on.
    pub path: PathCurve,
}

#[derive(Debug)]
pub struct SeedRun {
    pub seed: u64,
    pub split: TaskSequence,
    pub record: SequenceRecord,
    pub store: CheckpointStore,
    /// `None` for single-task runs.
    pub analysis: Option<Analysis>,
}

pub fn run_seed(prepared: &Prepared, cfg: &ExperimentConfig, seed: u64, mut store: CheckpointStore) -> Result<SeedRun> {
    let split = split_tasks(
        &prepared.train,
        &cfg.split.fractions,
        cfg.split.joint,
        derive_seed(seed, stream::SPLIT),
        cfg.split.stratified,
    )?;
    let init = init_params(&prepared.spec, derive_seed(seed, stream::INIT));
    let mut train_cfg = cfg.train.clone();
    train_cfg.seed = seed;
    let trainer = Trainer::new(&prepared.spec, &prepared.train, &train_cfg)?;
    let record = {
        let mut hooks = Recorder::new(&prepared.spec, &prepared.test)
            .eval_batch(cfg.analysis.eval_batch)
            .with_store(&mut store);
        trainer.run_sequence(init, &split, &mut hooks)?
    };
    let analysis = match record.boundaries.last() {
        Some(_) => Some(analyze(prepared, cfg, &record, &store)?),
        None => None,
    };
    Ok(SeedRun {
        seed,
        split,
        record,
        store,
        analysis,
    })
}

pub fn analyze(
    prepared: &Prepared,
    cfg: &ExperimentConfig,
    record: &SequenceRecord,
    store: &CheckpointStore,
) -> Result<Analysis> {
    let boundary = *record
        .boundaries
        .last()
        .ok_or_else(|| GapError::InsufficientTrace("a single-task run has no boundary".into()))?;
    let n = record.task_end_params.len();
    let gap = compute_gap(&record.global_trace(), boundary, &cfg.analysis.gap_params())?;
    let theta1 = &record.task_end_params[n - 2];
    let theta2 = &record.task_end_params[n - 1];
    let eval_batch = cfg.analysis.eval_batch;
    let lmc = lmc_curve(&prepared.spec, theta1, theta2, cfg.analysis.lmc_step, &prepared.test, eval_batch)?;
    let last_task = record.traces[n - 1].len() as u64;
    let span = cfg.analysis.path_window.min(last_task);
    let iterations: Vec<u64> = (boundary..=boundary + span).collect();
    let path = sgd_path_loss(&prepared.spec, store, &iterations, &prepared.test, eval_batch)?;
    Ok(Analysis {
        boundary,
        gap,
        lmc,
        path,
    })
}

/// Per-seed summary written as `run.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunInfo {
    pub seed: u64,
    pub model: String,
    pub n_params: usize,
    pub task_sizes: Vec<usize>,
    /// Last iteration of each task but the final one.
    pub boundaries: Vec<u64>,
    pub task_end_checkpoints: Vec<Option<String>>,
}

impl RunInfo {
    pub fn of(run: &SeedRun, spec: &ModelSpec) -> Self {
        Self {
            seed: run.seed,
            model: spec.describe(),
            n_params: spec.n_params(),
            task_sizes: (0..run.split.n_tasks()).map(|k| run.split.task(k).len()).collect(),
            boundaries: run.record.boundaries.clone(),
            task_end_checkpoints: run.record.task_end_checkpoints.clone(),
        }
    }
}

pub fn trace_file_name(task: usize) -> String {
    format!("trace_task{task}.csv")
}

fn write(path: &Path, contents: &str) -> Result<()> {
    std::fs::write(path, contents).map_err(|e| GapError::io(path, e))
}

/// Writes traces, run summary and analysis results into `dir`.
pub fn write_seed_outputs(dir: &Path, run: &SeedRun, spec: &ModelSpec) -> Result<()> {
    for (k, trace) in run.record.traces.iter().enumerate() {
        write(&dir.join(trace_file_name(k)), &trace_to_csv(trace))?;
    }
    let info = serde_json::to_string_pretty(&RunInfo::of(run, spec)).expect("run info serializes");
    write(&dir.join(RUN_FILE), &(info + "\n"))?;
    if let Some(a) = &run.analysis {
        write(&dir.join("gap.txt"), &a.gap.to_kv())?;
        write(&dir.join("lmc.csv"), &lmc_to_csv(&a.lmc))?;
        write(&dir.join("sgd_path.csv"), &path_to_csv(&a.path))?;
    }
    Ok(())
}

pub fn seed_dir(out: &Path, seed: u64) -> PathBuf {
    out.join(format!("seed-{seed}"))
}

/// Runs every configured seed under `out`, one `seed-<s>` directory each, and
/// writes the canonical config and a manifest at the top level.
pub fn run_experiment(cfg: &ExperimentConfig, out: &Path) -> Result<Vec<(u64, Option<GapMetrics>)>> {
    cfg.validate()?;
    let config_json = canonical_json(&serde_json::to_value(cfg).expect("config serializes"));
    let mut manifest = RunManifest::new(crate::config::config_hash(&config_json)?);
    manifest.stamp("started_unix");
    std::fs::create_dir_all(out).map_err(|e| GapError::io(out, e))?;
    write(&out.join("config.json"), &(config_json + "\n"))?;
    let prepared = prepare(cfg)?;
    let results: Vec<(u64, Option<GapMetrics>)> = cfg
        .seeds
        .par_iter()
        .map(|&seed| {
            let dir = seed_dir(out, seed);
            std::fs::create_dir_all(&dir).map_err(|e| GapError::io(&dir, e))?;
            let store = CheckpointStore::create(&dir.join(CHECKPOINT_DIR))?;
            let run = run_seed(&prepared, cfg, seed, store)?;
            write_seed_outputs(&dir, &run, &prepared.spec)?;
            Ok((seed, run.analysis.map(|a| a.gap)))
        })
        .collect::<Result<_>>()?;
    manifest.stamp("finished_unix");
    manifest.collect_files(out, MANIFEST_FILE)?;
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    write(&out.join(MANIFEST_FILE), &(text + "\n"))?;
    Ok(results)
}
