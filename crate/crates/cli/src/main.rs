use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use gaplab::checkpoint::{read_checkpoint, CheckpointStore};
use gaplab::config::{DatasetConfig, ExperimentConfig};
use gaplab::connectivity::{barrier, lmc_curve, lmc_to_csv, path_to_csv, sgd_path_loss};
use gaplab::data::{gen_blobs, save_raw};
use gaplab::experiment::{prepare, run_experiment, seed_dir};
use gaplab::instrument::{compute_gap, trace_from_csv, GapMetrics, GapParams, TraceRecord};
use gaplab::numfmt::sig9;
use gaplab::report::{load_traces, render_report};
use gaplab::svg::{LinePlot, Series};
use gaplab::GapError;

#[derive(Parser)]
#[command(name = "gaplab", version, about = "Stability-gap experiments: training, gap metrics, mode connectivity")]
struct Cli {
    /// Seed; overrides the config's seed list where one applies.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output location.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Experiment config (JSON).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset in the raw byte format.
    GenData(GenDataArgs),
    /// Train every seed of an experiment config.
    Train,
    /// Gap metrics for one or more runs.
    Gap(GapArgs),
    /// Loss along the linear path between two checkpoints.
    Lmc(LmcArgs),
    /// SVG figures for a run directory.
    Report(ReportArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum DataKind {
    Blobs,
}

#[derive(Args)]
struct GenDataArgs {
    #[arg(long, value_enum, default_value = "blobs")]
    kind: DataKind,
    #[arg(long, default_value_t = 8)]
    classes: usize,
    #[arg(long, default_value_t = 250)]
    per_class: usize,
    #[arg(long, default_value_t = 32)]
    dim: usize,
    #[arg(long, default_value_t = 6.0)]
    spread: f64,
}

#[derive(Args)]
struct GapArgs {
    /// Run directories (all task traces) or single trace CSV files.
    #[arg(required = true)]
    runs: Vec<PathBuf>,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    w: Option<usize>,
    #[arg(long)]
    tolerance: Option<f64>,
    #[arg(long)]
    window: Option<u64>,
    /// Boundary iteration; defaults to the last task switch in each trace.
    #[arg(long)]
    boundary: Option<u64>,
}

#[derive(Args)]
struct LmcArgs {
    /// Checkpoint at lambda = 0.
    #[arg(long)]
    a: PathBuf,
    /// Checkpoint at lambda = 1.
    #[arg(long)]
    b: PathBuf,
    #[arg(long, default_value_t = 0.01)]
    step: f64,
    /// Checkpoint directory of a run; adds the loss along the stored SGD trajectory.
    #[arg(long)]
    sgd_path: Option<PathBuf>,
    /// First trajectory iteration (default: the iteration named by --a).
    #[arg(long)]
    from: Option<u64>,
    /// Last trajectory iteration (default: the iteration named by --b).
    #[arg(long)]
    to: Option<u64>,
}

#[derive(Args)]
struct ReportArgs {
    /// Seed directory, or an experiment directory holding seed-* subdirectories.
    run_dir: PathBuf,
}

enum Failure {
    Usage(String),
    Signal(String),
    Runtime(GapError),
}

impl From<GapError> for Failure {
    fn from(e: GapError) -> Self {
        match e {
            GapError::Config(_) | GapError::Argument(_) => Failure::Usage(e.to_string()),
            _ => Failure::Runtime(e),
        }
    }
}

type CmdResult = Result<(), Failure>;

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::GenData(args) => gen_data(&cli, args),
        Command::Train => train(&cli),
        Command::Gap(args) => gap(&cli, args),
        Command::Lmc(args) => lmc(&cli, args),
        Command::Report(args) => report(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Signal(msg)) => {
            eprintln!("{msg}");
            ExitCode::from(3)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(4)
        }
    }
}

fn require_out(cli: &Cli) -> Result<&Path, Failure> {
    cli.out
        .as_deref()
        .ok_or_else(|| Failure::Usage("--out is required".into()))
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig, Failure> {
    let path = cli
        .config
        .as_deref()
        .ok_or_else(|| Failure::Usage("--config is required".into()))?;
    let (cfg, _) = ExperimentConfig::load(path)?;
    Ok(cfg)
}

fn write(path: &Path, text: &str) -> CmdResult {
    std::fs::write(path, text).map_err(|e| Failure::Runtime(GapError::Io {
        path: path.to_path_buf(),
        source: e,
    }))
}

fn mkdir(path: &Path) -> CmdResult {
    std::fs::create_dir_all(path).map_err(|e| Failure::Runtime(GapError::Io {
        path: path.to_path_buf(),
        source: e,
    }))
}

fn gen_data(cli: &Cli, args: &GenDataArgs) -> CmdResult {
    let out = require_out(cli)?;
    let DataKind::Blobs = args.kind;
    let seed = cli.seed.unwrap_or(0);
    let (train, test) = gen_blobs(seed, args.classes, args.per_class, args.dim, args.spread)?;
    let (lo, hi) = train
        .features()
        .data()
        .iter()
        .chain(test.features().data())
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &x| (lo.min(x), hi.max(x)));
    mkdir(out)?;
    save_raw(&train, &out.join("train_features.bin"), &out.join("train_labels.bin"), lo, hi)?;
    save_raw(&test, &out.join("test_features.bin"), &out.join("test_labels.bin"), lo, hi)?;
    let meta = DatasetConfig::Raw {
        train_features: "train_features.bin".into(),
        train_labels: "train_labels.bin".into(),
        test_features: "test_features.bin".into(),
        test_labels: "test_labels.bin".into(),
        shape: vec![args.dim],
        train_count: train.len(),
        test_count: test.len(),
        classes: args.classes,
    };
    let text = serde_json::to_string_pretty(&meta).expect("metadata serializes");
    write(&out.join("meta.json"), &(text + "\n"))?;
    println!("wrote {} train and {} test samples to {}", train.len(), test.len(), out.display());
    Ok(())
}

fn train(cli: &Cli) -> CmdResult {
    let mut cfg = load_config(cli)?;
    if let Some(seed) = cli.seed {
        cfg.seeds = vec![seed];
    }
    if let Some(out) = &cli.out {
        cfg.out = Some(out.clone());
    }
    let out = cfg
        .out
        .clone()
        .ok_or_else(|| Failure::Usage("no output directory: set \"out\" in the config or pass --out".into()))?;
    cfg.validate()?;
    let results = run_experiment(&cfg, &out)?;
    for (seed, gap) in results {
        match gap {
            Some(g) => println!(
                "seed={seed} dir={} gap_depth={} recovered={}",
                seed_dir(&out, seed).display(),
                sig9(g.gap_depth),
                g.recovered
            ),
            None => println!("seed={seed} dir={}", seed_dir(&out, seed).display()),
        }
    }
    Ok(())
}

fn load_run(path: &Path) -> Result<Vec<TraceRecord>, Failure> {
    if path.is_dir() {
        return Ok(load_traces(path)?);
    }
    let text = std::fs::read_to_string(path).map_err(|e| Failure::Runtime(GapError::Io {
        path: path.to_path_buf(),
        source: e,
    }))?;
    Ok(trace_from_csv(&text, &path.display().to_string())?)
}

fn last_switch(trace: &[TraceRecord]) -> Option<u64> {
    trace
        .windows(2)
        .rev()
        .find(|w| w[0].task != w[1].task)
        .map(|w| w[0].iteration)
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn gap(cli: &Cli, args: &GapArgs) -> CmdResult {
    let mut params = match &cli.config {
        Some(_) => load_config(cli)?.analysis.gap_params(),
        None => GapParams::default(),
    };
    params.k = args.k.unwrap_or(params.k);
    params.w = args.w.unwrap_or(params.w);
    params.tolerance = args.tolerance.unwrap_or(params.tolerance);
    params.window = args.window.unwrap_or(params.window);
    params.validate()?;

    let mut metrics: Vec<(PathBuf, GapMetrics)> = Vec::new();
    for run in &args.runs {
        let trace = load_run(run)?;
        let boundary = match args.boundary.or_else(|| last_switch(&trace)) {
            Some(b) => b,
            None => {
                return Err(Failure::Runtime(GapError::InsufficientTrace(format!(
                    "{} has no task switch; pass --boundary",
                    run.display()
                ))))
            }
        };
        metrics.push((run.clone(), compute_gap(&trace, boundary, &params)?));
    }
    let mut doc = String::new();
    if metrics.len() == 1 {
        doc.push_str(&metrics[0].1.to_kv());
    } else {
        for (path, m) in &metrics {
            doc.push_str(&format!("[{}]\n{}\n", path.display(), m.to_kv()));
        }
        let col = |f: fn(&GapMetrics) -> f64| median(metrics.iter().map(|(_, m)| f(m)).collect());
        let recovered = metrics.iter().filter(|(_, m)| m.recovered).count();
        doc.push_str("[median]\n");
        doc.push_str(&format!("runs={}\n", metrics.len()));
        doc.push_str(&format!("pre_switch_acc={}\n", sig9(col(|m| m.pre_switch_acc))));
        doc.push_str(&format!("min_acc={}\n", sig9(col(|m| m.min_acc))));
        doc.push_str(&format!("gap_depth={}\n", sig9(col(|m| m.gap_depth))));
        doc.push_str(&format!("min_iteration={}\n", sig9(col(|m| m.min_iteration as f64))));
        doc.push_str(&format!("recovered_runs={recovered}\n"));
    }
    match &cli.out {
        Some(out) => write(out, &doc)?,
        None => print!("{doc}"),
    }
    let unrecovered: Vec<String> = metrics
        .iter()
        .filter(|(_, m)| !m.recovered)
        .map(|(p, _)| p.display().to_string())
        .collect();
    if unrecovered.is_empty() {
        Ok(())
    } else {
        Err(Failure::Signal(format!(
            "no recovery within the window: {}",
            unrecovered.join(", ")
        )))
    }
}

/// Iteration encoded in a checkpoint file name such as `it0001234.gapl`.
fn iteration_of(path: &Path) -> Option<u64> {
    path.file_stem()?.to_str()?.strip_prefix("it")?.parse().ok()
}

fn lmc(cli: &Cli, args: &LmcArgs) -> CmdResult {
    let cfg = load_config(cli)?;
    let prepared = prepare(&cfg)?;
    let theta1 = read_checkpoint(&args.a)?;
    let theta2 = read_checkpoint(&args.b)?;
    theta1.check_bound(&prepared.spec)?;
    theta2.check_bound(&prepared.spec)?;
    let store = match &args.sgd_path {
        Some(dir) => Some(CheckpointStore::open(dir)?),
        None => None,
    };
    let out = cli.out.clone().unwrap_or_else(|| PathBuf::from("."));
    let eval_batch = cfg.analysis.eval_batch;

    let curve = lmc_curve(&prepared.spec, &theta1, &theta2, args.step, &prepared.test, eval_batch)?;
    let path = match &store {
        Some(store) => {
            let from = args.from.or_else(|| iteration_of(&args.a));
            let to = args.to.or_else(|| iteration_of(&args.b));
            let its: Vec<u64> = store
                .iterations()
                .into_iter()
                .filter(|&i| from.is_none_or(|f| i >= f) && to.is_none_or(|t| i <= t))
                .collect();
            Some(sgd_path_loss(&prepared.spec, store, &its, &prepared.test, eval_batch)?)
        }
        None => None,
    };

    mkdir(&out)?;
    write(&out.join("lmc.csv"), &lmc_to_csv(&curve))?;
    let lin: Vec<(f64, f64)> = curve.lambdas.iter().copied().zip(curve.losses.iter().copied()).collect();
    let mut plot = LinePlot::new("Loss along the linear path", "lambda", "test loss")
        .series(Series::new("linear path", "#2ca02c", lin));
    if let Some(p) = &path {
        write(&out.join("sgd_path.csv"), &path_to_csv(p))?;
        let first = p.iterations[0] as f64;
        let span = (*p.iterations.last().unwrap() as f64 - first).max(1.0);
        let pts = p
            .iterations
            .iter()
            .zip(&p.losses)
            .map(|(&i, &l)| ((i as f64 - first) / span, l))
            .collect();
        plot = plot.series(Series::new("SGD trajectory", "#d62728", pts));
        plot.x_label = "lambda / fraction of trajectory".into();
        println!("sgd_max_loss={}", sig9(p.max_loss()));
    }
    write(&out.join("lmc.svg"), &plot.render())?;
    println!("barrier={}", sig9(barrier(&curve)));
    Ok(())
}

fn report(args: &ReportArgs) -> CmdResult {
    let mut dirs: Vec<PathBuf> = match std::fs::read_dir(&args.run_dir) {
        Ok(entries) => entries
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| {
                p.is_dir()
                    && p.file_name()
                        .and_then(|n| n.to_str())
                        .is_some_and(|n| n.starts_with("seed-"))
            })
            .collect(),
        Err(e) => {
            return Err(Failure::Runtime(GapError::Io {
                path: args.run_dir.clone(),
                source: e,
            }))
        }
    };
    dirs.sort();
    if dirs.is_empty() {
        dirs.push(args.run_dir.clone());
    }
    for dir in dirs {
        for file in render_report(&dir)? {
            println!("{}", file.display());
        }
    }
    Ok(())
}
