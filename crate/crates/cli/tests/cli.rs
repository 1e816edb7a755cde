use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn gaplab(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_gaplab")).args(args).output().unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap()
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

const TINY: &str = r#"{
  "dataset": {"kind": "blobs", "classes": 3, "per_class": 30, "dim": 4, "spread": 1.0, "seed": 1},
  "model": {"name": "mlp", "hidden": [6]},
  "split": {"fractions": [50, 50], "joint": true},
  "train": {"epochs": [4, 3], "batch_size": 8, "dense_window": 40},
  "analysis": {"k": 2, "w": 2, "path_window": 20},
  "seeds": [1, 2]
}"#;

fn train_tiny(dir: &Path) -> std::path::PathBuf {
    let cfg = dir.join("tiny.json");
    fs::write(&cfg, TINY).unwrap();
    let out = dir.join("run");
    let res = gaplab(&["train", "--config", p(&cfg), "--out", p(&out)]);
    assert_eq!(code(&res), 0, "{}", stderr(&res));
    out
}

#[test]
fn gen_data_writes_identical_files_each_time() {
    let dir = tempfile::tempdir().unwrap();
    let args = |out: &Path| {
        gaplab(&[
            "gen-data", "--kind", "blobs", "--classes", "8", "--per-class", "250", "--dim", "32", "--seed", "1",
            "--out", p(out),
        ])
    };
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    assert_eq!(code(&args(&a)), 0);
    assert_eq!(code(&args(&b)), 0);
    for f in ["train_features.bin", "train_labels.bin", "test_features.bin", "test_labels.bin", "meta.json"] {
        let x = fs::read(a.join(f)).unwrap();
        assert_eq!(x, fs::read(b.join(f)).unwrap(), "{f}");
    }
    assert_eq!(fs::read(a.join("train_features.bin")).unwrap().len(), 1600 * 32);
    assert_eq!(fs::read(a.join("test_labels.bin")).unwrap().len(), 400);
}

#[test]
fn gen_data_without_out_is_a_usage_error() {
    let res = gaplab(&["gen-data", "--classes", "3"]);
    assert_eq!(code(&res), 2);
    assert!(stderr(&res).contains("--out"));
}

#[test]
fn generated_data_trains_through_its_metadata() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let res = gaplab(&["gen-data", "--classes", "3", "--per-class", "20", "--dim", "4", "--out", p(&data)]);
    assert_eq!(code(&res), 0, "{}", stderr(&res));
    let meta = fs::read_to_string(data.join("meta.json")).unwrap();
    let cfg = TINY.replace(
        r#"{"kind": "blobs", "classes": 3, "per_class": 30, "dim": 4, "spread": 1.0, "seed": 1}"#,
        &meta,
    );
    let cfg_path = data.join("raw.json");
    fs::write(&cfg_path, cfg).unwrap();
    let res = gaplab(&["train", "--config", p(&cfg_path), "--seed", "5", "--out", p(&dir.path().join("r"))]);
    assert_eq!(code(&res), 0, "{}", stderr(&res));
    assert!(dir.path().join("r/seed-5/trace_task1.csv").exists());
    assert!(!dir.path().join("r/seed-1").exists());
}

#[test]
fn invalid_config_is_rejected_before_any_output() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.json");
    fs::write(&cfg, TINY.replace("\"joint\": true", "\"joint\": true, \"shuffle\": 1")).unwrap();
    let out = dir.path().join("run");
    let res = gaplab(&["train", "--config", p(&cfg), "--out", p(&out)]);
    assert_eq!(code(&res), 2);
    assert!(stderr(&res).contains("shuffle"), "{}", stderr(&res));
    assert!(!out.exists());
}

#[test]
fn train_gap_report_and_lmc_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let run = train_tiny(dir.path());
    let s1 = run.join("seed-1");
    for f in ["trace_task0.csv", "trace_task1.csv", "checkpoints/index.csv", "run.json"] {
        assert!(s1.join(f).exists(), "{f}");
    }
    assert!(run.join("seed-2").is_dir());
    assert!(run.join("manifest.json").exists());

    let gap = gaplab(&["gap", "--k", "2", "--w", "2", p(&s1)]);
    assert!([0, 3].contains(&code(&gap)), "{}", stderr(&gap));
    let doc = stdout(&gap);
    assert!(doc.contains("pre_switch_acc=") && doc.contains("gap_depth="), "{doc}");
    assert_eq!(doc.contains("recovered=true"), code(&gap) == 0);

    let batch = gaplab(&["gap", "--k", "2", p(&s1), p(&run.join("seed-2"))]);
    let doc = stdout(&batch);
    assert!(doc.contains("[median]") && doc.matches("gap_depth=").count() == 3, "{doc}");

    let rep = gaplab(&["report", p(&run)]);
    assert_eq!(code(&rep), 0, "{}", stderr(&rep));
    for seed in ["seed-1", "seed-2"] {
        for f in ["accuracy.svg", "probe.svg", "lmc.svg"] {
            let svg = fs::read_to_string(run.join(seed).join(f)).unwrap();
            assert!(svg.starts_with("<svg") && !svg.contains("href"), "{f}");
        }
    }

    let cfg = dir.path().join("tiny.json");
    let info: serde_json::Value = serde_json::from_str(&fs::read_to_string(s1.join("run.json")).unwrap()).unwrap();
    let ends: Vec<String> = info["task_end_checkpoints"]
        .as_array()
        .unwrap()
        .iter()
        .map(|v| format!("{}.gapl", v.as_str().unwrap()))
        .collect();
    let ckpt = |name: &str| s1.join("checkpoints").join(name);
    let lmc_out = dir.path().join("lmc");
    let res = gaplab(&[
        "lmc", "--config", p(&cfg), "--a", p(&ckpt(&ends[0])), "--b", p(&ckpt(&ends[1])),
        "--sgd-path", p(&s1.join("checkpoints")), "--out", p(&lmc_out),
    ]);
    assert_eq!(code(&res), 0, "{}", stderr(&res));
    assert!(stdout(&res).contains("barrier="));
    assert_eq!(fs::read_to_string(lmc_out.join("lmc.csv")).unwrap().lines().count(), 102);
    let path = fs::read_to_string(lmc_out.join("sgd_path.csv")).unwrap();
    let boundary = info["boundaries"][0].as_u64().unwrap();
    let total = ends[1].trim_start_matches("it").trim_end_matches(".gapl").parse::<u64>().unwrap();
    assert_eq!(path.lines().count() as u64, 1 + total - boundary + 1);
    assert!(fs::read_to_string(lmc_out.join("lmc.svg")).unwrap().contains("SGD trajectory"));
}

#[test]
fn lmc_rejects_checkpoints_of_another_model() {
    let dir = tempfile::tempdir().unwrap();
    let run = train_tiny(dir.path());
    let other = dir.path().join("wide.json");
    fs::write(&other, TINY.replace("[6]", "[7]")).unwrap();
    let ck = fs::read_dir(run.join("seed-1/checkpoints"))
        .unwrap()
        .map(|e| e.unwrap().path())
        .find(|p| p.extension().is_some_and(|e| e == "gapl"))
        .unwrap();
    let res = gaplab(&["lmc", "--config", p(&other), "--a", p(&ck), "--b", p(&ck), "--out", p(dir.path())]);
    assert_eq!(code(&res), 4);
    assert!(stderr(&res).contains("different model specs"), "{}", stderr(&res));
    assert!(!dir.path().join("lmc.csv").exists());
}

#[test]
fn gap_signals_non_recovery_with_exit_3() {
    let dir = tempfile::tempdir().unwrap();
    let mut csv = String::from(gaplab::instrument::TRACE_HEADER);
    csv.push('\n');
    for it in 1..=10u64 {
        let (task, acc) = if it <= 5 { (0, 0.9) } else { (1, 0.5) };
        csv.push_str(&format!("{it},{task},0.1,0.5,,,,{acc},\n"));
    }
    let path = dir.path().join("flat.csv");
    fs::write(&path, csv).unwrap();
    let res = gaplab(&["gap", p(&path)]);
    assert_eq!(code(&res), 3, "{}", stderr(&res));
    assert!(stdout(&res).contains("recovered=false"));
    assert!(stdout(&res).contains("gap_depth=0.4"));
}

#[test]
fn malformed_trace_reports_the_line() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.csv");
    let body = format!("{}\n1,0,0.1,0.5,,,,0.9,\n2,0,oops,0.5,,,,0.9,\n", gaplab::instrument::TRACE_HEADER);
    fs::write(&path, body).unwrap();
    let res = gaplab(&["gap", p(&path)]);
    assert_eq!(code(&res), 4);
    assert!(stderr(&res).contains("line 3"), "{}", stderr(&res));
}

#[test]
fn report_on_an_empty_trace_fails() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("trace_task0.csv"), format!("{}\n", gaplab::instrument::TRACE_HEADER)).unwrap();
    let res = gaplab(&["report", p(dir.path())]);
    assert_eq!(code(&res), 4);
    assert!(stderr(&res).contains("insufficient trace"), "{}", stderr(&res));
}
