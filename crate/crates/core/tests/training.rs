use gaplab::autodiff::backward;
use gaplab::checkpoint::CheckpointStore;
use gaplab::config::ExperimentConfig;
use gaplab::data::{gen_blobs, split_tasks};
use gaplab::experiment::{prepare, run_experiment, run_seed, MANIFEST_FILE};
use gaplab::instrument::Recorder;
use gaplab::model::{init_params, ModelSpec, ParamVector};
use gaplab::rng::Rng;
use gaplab::trainer::{sgd_step, OptimizerState, StepInfo, TrainConfig, TrainHooks, Trainer};
use gaplab::Result;

#[test]
fn small_steps_lower_the_loss_of_their_own_batch() {
    let (train, _) = gen_blobs(3, 4, 60, 8, 2.0).unwrap();
    let spec = ModelSpec::mlp(vec![8], &[16], 4).unwrap();
    let mut rng = Rng::new(11);
    let mut improved = 0;
    let trials = 400;
    for t in 0..trials {
        let params = init_params(&spec, t);
        let rows: Vec<usize> = (0..16).map(|_| rng.below(train.len() as u64) as usize).collect();
        let (batch, labels) = train.gather(&rows);
        let before = backward(&spec, &params, &batch, &labels).unwrap();
        let state = OptimizerState::new(spec.n_params());
        let (after, _) = sgd_step(&params, &before.grads, &state, 1e-4, 0.9).unwrap();
        if backward(&spec, &after, &batch, &labels).unwrap().loss < before.loss {
            improved += 1;
        }
    }
    assert!(improved as f64 / trials as f64 > 0.95, "{improved}/{trials}");
}

/// Captures the parameters seen by the first update of every task after the first.
struct FirstStep(Vec<(u64, ParamVector)>);

impl TrainHooks for FirstStep {
    fn pre_update(&mut self, step: &StepInfo<'_>, params: &ParamVector) -> Result<()> {
        if step.task > 0 && step.local_iteration == 1 {
            self.0.push((step.iteration, params.clone()));
        }
        Ok(())
    }
}

fn small_setup() -> (gaplab::data::Dataset, ModelSpec, TrainConfig) {
    let (train, _) = gen_blobs(5, 3, 40, 4, 1.5).unwrap();
    let spec = ModelSpec::mlp(vec![4], &[8], 3).unwrap();
    let config = TrainConfig {
        epochs: vec![3, 2],
        batch_size: 16,
        seed: 9,
        ..TrainConfig::default()
    };
    (train, spec, config)
}

#[test]
fn next_task_starts_from_the_previous_final_parameters() {
    let (train, spec, config) = small_setup();
    let seq = split_tasks(&train, &[30.0, 30.0, 40.0], true, 1, true).unwrap();
    let trainer = Trainer::new(&spec, &train, &config).unwrap();
    let mut hooks = FirstStep(Vec::new());
    let record = trainer.run_sequence(init_params(&spec, 2), &seq, &mut hooks).unwrap();
    assert_eq!(hooks.0.len(), 2);
    for (k, (iteration, params)) in hooks.0.iter().enumerate() {
        assert_eq!(*iteration, record.boundaries[k] + 1);
        assert_eq!(params, &record.task_end_params[k]);
    }
}

#[test]
fn boundary_checkpoint_is_the_warm_start() {
    let (train, spec, config) = small_setup();
    let (_, test) = gen_blobs(5, 3, 40, 4, 1.5).unwrap();
    let seq = split_tasks(&train, &[50.0, 50.0], true, 1, true).unwrap();
    let trainer = Trainer::new(&spec, &train, &config).unwrap();
    let mut store = CheckpointStore::in_memory();
    let record = {
        let mut hooks = Recorder::new(&spec, &test).with_store(&mut store);
        trainer.run_sequence(init_params(&spec, 2), &seq, &mut hooks).unwrap()
    };
    let b = record.boundaries[0];
    assert_eq!(store.get(b).unwrap(), record.task_end_params[0]);
    // every iteration of the dense window after the switch is stored
    let task_b = record.traces[1].len() as u64;
    assert!((b..=b + task_b).all(|i| store.contains(i)));
}

#[test]
fn velocity_reset_changes_the_trajectory() {
    let (train, spec, config) = small_setup();
    let seq = split_tasks(&train, &[50.0, 50.0], true, 1, true).unwrap();
    let run = |reset| {
        let cfg = TrainConfig {
            reset_velocity: reset,
            ..config.clone()
        };
        let trainer = Trainer::new(&spec, &train, &cfg).unwrap();
        trainer
            .run_sequence(init_params(&spec, 2), &seq, &mut gaplab::trainer::NoHooks)
            .unwrap()
    };
    let (a, b) = (run(true), run(false));
    assert_eq!(a.task_end_params[0], b.task_end_params[0]);
    assert_ne!(a.final_params(), b.final_params());
}

fn tiny_config(out: &std::path::Path) -> ExperimentConfig {
    let text = format!(
        r#"{{
        "dataset": {{"kind": "blobs", "classes": 3, "per_class": 30, "dim": 4, "spread": 1.0, "seed": 1}},
        "model": {{"name": "mlp", "hidden": [6]}},
        "split": {{"fractions": [50, 50], "joint": true}},
        "train": {{"epochs": [4, 3], "batch_size": 8, "dense_window": 40}},
        "analysis": {{"k": 2, "w": 2, "lmc_step": 0.25, "path_window": 20}},
        "out": {out:?},
        "seeds": [3, 4]
    }}"#
    );
    ExperimentConfig::from_json(&text).unwrap()
}

#[test]
fn experiment_writes_every_artifact_and_lists_it() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let results = run_experiment(&cfg, dir.path()).unwrap();
    assert_eq!(results.len(), 2);
    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join(MANIFEST_FILE)).unwrap()).unwrap();
    let files: Vec<&str> = manifest["files"].as_array().unwrap().iter().map(|v| v.as_str().unwrap()).collect();
    for seed in [3, 4] {
        for f in ["trace_task0.csv", "trace_task1.csv", "run.json", "gap.txt", "lmc.csv", "sgd_path.csv", "checkpoints/index.csv"] {
            let rel = format!("seed-{seed}/{f}");
            assert!(dir.path().join(&rel).exists(), "{rel}");
            assert!(files.contains(&rel.as_str()), "{rel} not in manifest");
        }
    }
    assert!(files.contains(&"config.json"));
    assert_eq!(files.len(), files.iter().collect::<std::collections::BTreeSet<_>>().len());
    let lmc = std::fs::read_to_string(dir.path().join("seed-3/lmc.csv")).unwrap();
    assert_eq!(lmc.lines().count(), 1 + 5);
}

#[test]
fn seed_runs_are_reproducible_and_seed_dependent() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let prepared = prepare(&cfg).unwrap();
    let a = run_seed(&prepared, &cfg, 3, CheckpointStore::in_memory()).unwrap();
    let b = run_seed(&prepared, &cfg, 3, CheckpointStore::in_memory()).unwrap();
    let c = run_seed(&prepared, &cfg, 4, CheckpointStore::in_memory()).unwrap();
    assert_eq!(a.record.traces, b.record.traces);
    assert_eq!(a.record.final_params(), b.record.final_params());
    assert_ne!(a.record.final_params(), c.record.final_params());
    let an = a.analysis.unwrap();
    assert_eq!(an.path.iterations.len(), 21);
    assert_eq!(an.path.iterations[0], an.boundary);
}
