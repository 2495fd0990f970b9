use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use bts_core::csi_sim::{read_dataset, write_dataset, CsiDataset};
use bts_core::experiment::{bench, split_round, Method, Prepared, BENCH_SCHEMA_VERSION, TRAIN_FRACTION};
use bts_core::indicator::{build_indicators, indicator_accuracy, DisarrayParams};
use bts_core::nets::ModelBundle;
use bts_core::preprocess::{frames_from_dataset, FrameSet, Split};
use bts_core::trainer::{evaluate, monitor_drift, train, write_log, Architecture, TrainMode, Verdict};
use bts_core::{BtsError, Result};
use clap::{Parser, Subcommand, ValueEnum};
use serde_json::json;

mod settings;

use settings::Settings;

#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

#[derive(Parser, Debug)]
#[command(name = "btsctl", version, about = "Semi-supervised two-room presence detection from CSI amplitudes")]
struct Cli {
    /// Flat key-value settings file; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(flatten)]
    settings: Settings,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the six synthetic rounds, one directory each.
    Gen {
        #[arg(long)]
        out: PathBuf,
        /// Rounds to write; all six by default.
        #[arg(long, value_delimiter = ',')]
        rounds: Vec<u32>,
        #[arg(long)]
        force: bool,
    },
    /// Train on labeled and unlabeled round directories.
    Train {
        #[arg(long, required = true, num_args = 1..)]
        labeled: Vec<PathBuf>,
        #[arg(long, required = true, num_args = 1..)]
        unlabeled: Vec<PathBuf>,
        /// Directory receiving the checkpoint, the log and the resolved settings.
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        force: bool,
        #[arg(long, value_enum, default_value = "bts")]
        mode: RunMode,
    },
    /// Accuracy and confusion matrix on the held-out part of recordings.
    Predict {
        #[arg(long)]
        model: PathBuf,
        #[arg(long, required = true, num_args = 1..)]
        data: Vec<PathBuf>,
        /// Use every window at stride tau instead of the held-out part.
        #[arg(long)]
        all: bool,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Outlier distances and the drift verdict over a stream of recordings.
    Drift {
        #[arg(long)]
        model: PathBuf,
        #[arg(long, required = true, num_args = 1..)]
        data: Vec<PathBuf>,
        #[arg(long)]
        all: bool,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Training-free disarray indicator of a labeled/unlabeled pair.
    Indicator {
        #[arg(long)]
        labeled: PathBuf,
        #[arg(long)]
        unlabeled: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Compare BTS against the internal baselines on freshly generated rounds.
    Bench {
        #[arg(long, value_delimiter = ',')]
        methods: Vec<String>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum RunMode {
    Bts,
    Supervised,
    SinglePrimal,
    SingleDual,
    NoCd,
}

const OUTPUT_SCHEMA_VERSION: u32 = 1;

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    let settings = match &cli.config {
        Some(path) => cli.settings.clone().over(&Settings::from_file(path)?),
        None => cli.settings.clone(),
    };
    match cli.command {
        Command::Gen { out, rounds, force } => gen(&settings, &out, &rounds, force),
        Command::Train { labeled, unlabeled, out, force, mode } => cmd_train(&settings, &labeled, &unlabeled, &out, force, mode),
        Command::Predict { model, data, all, out } => cmd_predict(&model, &data, all, out.as_deref()),
        Command::Drift { model, data, all, out } => cmd_drift(&settings, &model, &data, all, out.as_deref()),
        Command::Indicator { labeled, unlabeled, out } => cmd_indicator(&settings, &labeled, &unlabeled, out.as_deref()),
        Command::Bench { methods, out } => cmd_bench(&settings, &methods, out.as_deref()),
    }
}

fn prepare_out_dir(out: &Path, force: bool) -> Result<()> {
    if out.exists() {
        if !force {
            return Err(BtsError::OutputExists(out.to_path_buf()));
        }
        fs::remove_dir_all(out).map_err(|e| BtsError::Io { path: out.to_path_buf(), source: e })?;
    }
    fs::create_dir_all(out).map_err(|e| BtsError::Io { path: out.to_path_buf(), source: e })
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| BtsError::Io { path: path.to_path_buf(), source: e })
}

/// Print a JSON document and optionally keep a copy.
fn emit(value: &serde_json::Value, out: Option<&Path>) -> Result<()> {
    let text = serde_json::to_string_pretty(value).expect("json values always serialize");
    println!("{text}");
    if let Some(path) = out {
        write_text(path, &(text + "\n"))?;
    }
    Ok(())
}

fn gen(settings: &Settings, out: &Path, rounds: &[u32], force: bool) -> Result<()> {
    let spec = settings.experiment();
    let ids: Vec<u32> = if rounds.is_empty() { spec.rounds.iter().map(|r| r.round_id).collect() } else { rounds.to_vec() };
    for id in &ids {
        spec.round(*id)?;
    }
    prepare_out_dir(out, force)?;
    let mut written = Vec::new();
    for id in ids {
        let ds = spec.generate_round(id)?;
        let dir = out.join(format!("round{id}"));
        write_dataset(&ds, &dir)?;
        log::info!("wrote {}", dir.display());
        written.push(json!({ "round": id, "dir": dir, "shape": [ds.packets, ds.subcarriers, ds.pairs], "cases": ds.segments.len() }));
    }
    write_text(&out.join("experiment.json"), &serde_json::to_string_pretty(&spec).expect("spec serializes"))?;
    emit(&json!({ "schema_version": OUTPUT_SCHEMA_VERSION, "rounds": written }), None)
}

fn load(dirs: &[PathBuf]) -> Result<Vec<CsiDataset>> {
    dirs.iter().map(|d| read_dataset(d)).collect()
}

fn merged(parts: Vec<FrameSet>, split: Split) -> Result<FrameSet> {
    let mut iter = parts.into_iter();
    let mut set = iter.next().ok_or(BtsError::Empty("no recordings given"))?;
    for p in iter {
        set.extend(&p)?;
    }
    Ok(set.with_split(split))
}

fn training_frames(dirs: &[PathBuf], tau: usize, split: Split) -> Result<FrameSet> {
    let parts = load(dirs)?
        .iter()
        .map(|ds| frames_from_dataset(ds, tau, 1, 0.0..TRAIN_FRACTION))
        .collect::<Result<Vec<_>>>()?;
    merged(parts, split)
}

fn evaluation_frames(dirs: &[PathBuf], tau: usize, all: bool) -> Result<FrameSet> {
    let parts = load(dirs)?
        .iter()
        .map(|ds| if all { frames_from_dataset(ds, tau, tau, 0.0..1.0) } else { split_round(ds, tau).map(|r| r.held_out) })
        .collect::<Result<Vec<_>>>()?;
    merged(parts, Split::Unlabeled)
}

fn cmd_train(settings: &Settings, labeled: &[PathBuf], unlabeled: &[PathBuf], out: &Path, force: bool, mode: RunMode) -> Result<()> {
    let mut cfg = settings.train_config()?;
    match mode {
        RunMode::Bts => {}
        RunMode::Supervised => cfg.mode = TrainMode::Supervised,
        RunMode::SinglePrimal => cfg.architecture = Architecture::PrimalOnly,
        RunMode::SingleDual => cfg.architecture = Architecture::DualOnly,
        RunMode::NoCd => cfg.use_confidence = false,
    }
    let l = training_frames(labeled, cfg.net.tau, Split::Labeled)?;
    let u = training_frames(unlabeled, cfg.net.tau, Split::Unlabeled)?;
    prepare_out_dir(out, force)?;
    let outcome = train(&l, &u, &cfg)?;
    let ckpt = out.join("model.ckpt");
    outcome.bundle.save(&ckpt)?;
    let log_path = out.join("train_log.jsonl");
    let io = |e| BtsError::Io { path: log_path.clone(), source: e };
    let mut w = std::io::BufWriter::new(fs::File::create(&log_path).map_err(io)?);
    write_log(&outcome.log, &mut w).and_then(|_| w.flush()).map_err(io)?;
    write_text(&out.join("settings.toml"), &settings.to_toml())?;
    let last = outcome.log.last().map(|r| r.losses);
    emit(
        &json!({
            "schema_version": OUTPUT_SCHEMA_VERSION,
            "checkpoint": ckpt,
            "iterations": outcome.log.len(),
            "labeled_frames": l.len(),
            "unlabeled_frames": u.len(),
            "indicators": outcome.indicators,
            "final_losses": last,
        }),
        None,
    )
}

fn cmd_predict(model: &Path, data: &[PathBuf], all: bool, out: Option<&Path>) -> Result<()> {
    let bundle = ModelBundle::load(model)?;
    let frames = evaluation_frames(data, bundle.config.tau, all)?;
    let ev = evaluate(&bundle, &frames)?;
    let per_case: Vec<Option<f64>> = ev.per_case_accuracy().iter().map(|a| a.is_finite().then_some(*a)).collect();
    emit(
        &json!({
            "schema_version": OUTPUT_SCHEMA_VERSION,
            "frames": ev.frames,
            "accuracy": ev.accuracy,
            "per_case_accuracy": per_case,
            "confusion": ev.confusion,
        }),
        out,
    )
}

fn cmd_drift(settings: &Settings, model: &Path, data: &[PathBuf], all: bool, out: Option<&Path>) -> Result<()> {
    let cfg = settings.train_config()?;
    let bundle = ModelBundle::load(model)?;
    let frames = evaluation_frames(data, bundle.config.tau, all)?;
    let report = monitor_drift(&bundle, &frames, cfg.drift_window, cfg.drift_threshold)?;
    emit(
        &json!({
            "schema_version": OUTPUT_SCHEMA_VERSION,
            "verdict": report.verdict,
            "window_median": report.window_median,
            "window": report.window,
            "threshold": report.threshold,
            "per_round": report.per_round,
            "retrain_frames": report.retrain_request.as_ref().map(|f| f.len()).unwrap_or(0),
            "drift": report.verdict == Verdict::Drift,
        }),
        out,
    )
}

fn cmd_indicator(settings: &Settings, labeled: &Path, unlabeled: &Path, out: Option<&Path>) -> Result<()> {
    let cfg = settings.train_config()?;
    let params = DisarrayParams { alpha: cfg.disarray.alpha, beta: cfg.disarray.beta };
    params.validate()?;
    let l = training_frames(&[labeled.to_path_buf()], cfg.net.tau, Split::Labeled)?;
    let u = training_frames(&[unlabeled.to_path_buf()], cfg.net.tau, Split::Unlabeled)?;
    let ind = build_indicators(&l, &u, params)?;
    emit(
        &json!({
            "schema_version": OUTPUT_SCHEMA_VERSION,
            "alpha": params.alpha,
            "beta": params.beta,
            "gamma": ind.gamma,
            "delta": ind.delta,
            "unlabeled_accuracy": indicator_accuracy(&u, &ind, params),
        }),
        out,
    )
}

fn cmd_bench(settings: &Settings, methods: &[String], out: Option<&Path>) -> Result<()> {
    let cfg = settings.train_config()?;
    let spec = settings.experiment();
    let methods: Vec<Method> = if methods.is_empty() {
        Method::ALL.to_vec()
    } else {
        methods.iter().map(|m| Method::parse(m)).collect::<Result<_>>()?
    };
    let data = Prepared::new(&spec, cfg.net.tau)?;
    let table = bench(&spec, &data, &cfg, &methods)?;
    debug_assert_eq!(table.schema_version, BENCH_SCHEMA_VERSION);
    print!("{}", table.render());
    if let Some(path) = out {
        write_text(path, &serde_json::to_string_pretty(&table).expect("table serializes"))?;
    }
    Ok(())
}
