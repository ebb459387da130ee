//! The `weiper` command line.
//!
//! Exit codes: 0 success, 1 usage error (bad flags, malformed or invalid
//! configuration), 2 data error (missing or malformed files, shape
//! mismatches).

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::de::DeserializeOwned;

use crate::data::{load_bundle, load_head, load_tensor, save_bundle, DatasetBundle, FeatureMatrix};
use crate::error::{Error, Result};
use crate::eval::{evaluate, EvalReport, ScoredSet};
use crate::kld::{fit_batched, KldHyperparams, Scorer, WeiPerKldModel, DEFAULT_BATCH_SIZE};
use crate::synth::{generate, SynthConfig};
use crate::tune::{grid_search, GridRanges};
use crate::parallel;

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;

#[derive(Parser, Debug)]
#[command(name = "weiper", version, about = "Post-hoc OOD detection with perturbed class projections")]
struct Cli {
    /// Worker threads (default: WEIPER_THREADS, else all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,

    /// Samples projected per batch; bounds peak memory.
    #[arg(long, global = true, default_value_t = DEFAULT_BATCH_SIZE)]
    batch_size: usize,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Fit a detector on training features and a classifier head.
    Fit(FitArgs),
    /// Score features with a fitted model (CSV: sample_index,score).
    Score(ScoreArgs),
    /// AUROC / FPR95 report from a model and bundle, or from score files.
    Eval(EvalArgs),
    /// Grid search over hyperparameter ranges on a bundle's validation split.
    Tune(TuneArgs),
    /// Write a synthetic benchmark bundle with its classifier head.
    Synth(SynthArgs),
    /// Dump a model's mean training histograms as CSV.
    Inspect(InspectArgs),
}

#[derive(Args, Debug)]
struct Inputs {
    /// Bundle directory; supplies id_train and the classifier head.
    #[arg(long, conflicts_with_all = ["train", "weights"])]
    bundle: Option<PathBuf>,
    /// Training features (.wpft), used with --weights.
    #[arg(long, requires = "weights")]
    train: Option<PathBuf>,
    /// Classifier weights (.wpft, C×K).
    #[arg(long, requires = "train")]
    weights: Option<PathBuf>,
    /// Classifier bias (.wpft, 1×C).
    #[arg(long, requires = "weights")]
    bias: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct FitArgs {
    #[command(flatten)]
    inputs: Inputs,
    /// Hyperparameter JSON; missing fields take defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the config's seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Model directory to write.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct ScoreArgs {
    #[arg(long)]
    model: PathBuf,
    /// One feature file; writes `<out>/<file stem>.csv`.
    #[arg(long, conflicts_with = "bundle", required_unless_present = "bundle")]
    features: Option<PathBuf>,
    /// Score id_test and every OOD set; writes `id_test.csv` and `ood_<name>.csv`.
    #[arg(long)]
    bundle: Option<PathBuf>,
    #[arg(long, default_value = "kld")]
    scorer: String,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct EvalArgs {
    /// Bundle directory naming the OOD sets and their near/far kinds.
    #[arg(long)]
    bundle: PathBuf,
    /// Score the bundle with this model.
    #[arg(long, conflicts_with = "scores", required_unless_present = "scores")]
    model: Option<PathBuf>,
    /// Directory of score CSVs written by `score --bundle`.
    #[arg(long)]
    scores: Option<PathBuf>,
    #[arg(long, default_value = "kld")]
    scorer: String,
    /// Writes report.csv and report.json here.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct TuneArgs {
    /// Bundle with id_train and the classifier head.
    #[arg(long)]
    bundle: PathBuf,
    /// Validation bundle: its id_val and OOD sets drive selection
    /// (default: --bundle itself, whose OOD sets then double as test sets).
    #[arg(long)]
    val_bundle: Option<PathBuf>,
    /// Search ranges JSON; missing fields take the standard ranges.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Writes leaderboard.csv and best.json here.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct SynthArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Redraw samples but keep the class directions (validation bundles).
    #[arg(long)]
    sample_seed: Option<u16>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct InspectArgs {
    #[arg(long)]
    model: PathBuf,
    /// Writes pen_mean.csv and pert_mean.csv here.
    #[arg(long)]
    out: PathBuf,
}

/// Parses `argv` (program name first), runs the command and returns the exit code.
pub fn dispatch<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    init_logging();
    if let Err(msg) = init_threads(cli.threads) {
        eprintln!("weiper: error: {msg}");
        return EXIT_USAGE;
    }
    match run(cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("weiper: error: {e}");
            if e.is_usage() {
                EXIT_USAGE
            } else {
                EXIT_DATA
            }
        }
    }
}

fn init_logging() {
    let env = env_logger::Env::new().filter_or("WEIPER_LOG", "warn");
    let _ = env_logger::Builder::from_env(env).format_timestamp(None).try_init();
}

fn init_threads(flag: Option<usize>) -> std::result::Result<(), String> {
    let threads = match flag {
        Some(n) => Some(n),
        None => match std::env::var("WEIPER_THREADS") {
            Ok(v) => Some(v.trim().parse().map_err(|_| format!("WEIPER_THREADS={v:?} is not a thread count"))?),
            Err(_) => None,
        },
    };
    match threads {
        Some(0) => Err("--threads must be >= 1".into()),
        // A library caller may already own the global pool; that is not fatal.
        Some(n) => {
            if let Err(e) = parallel::init_global_pool(n) {
                log::warn!("could not size worker pool to {n}: {e}");
            }
            Ok(())
        }
        None => Ok(()),
    }
}

fn run(cli: Cli) -> Result<()> {
    let batch = cli.batch_size;
    if batch == 0 {
        return Err(Error::InvalidConfig("--batch-size must be >= 1".into()));
    }
    match cli.command {
        Command::Fit(a) => cmd_fit(a, batch),
        Command::Score(a) => cmd_score(a, batch),
        Command::Eval(a) => cmd_eval(a, batch),
        Command::Tune(a) => cmd_tune(a, batch),
        Command::Synth(a) => cmd_synth(a),
        Command::Inspect(a) => cmd_inspect(a),
    }
}

/// Reads a JSON config. A missing file is a data error; unparsable JSON is a
/// usage error.
fn read_config<T: DeserializeOwned + Default>(path: Option<&Path>) -> Result<T> {
    let Some(path) = path else { return Ok(T::default()) };
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::InvalidConfig(format!("{}: {e}", path.display())))
}

fn write_file(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn parse_scorer(name: &str) -> Result<Scorer> {
    name.parse()
}

fn cmd_fit(a: FitArgs, batch: usize) -> Result<()> {
    let mut hyper: KldHyperparams = read_config(a.config.as_deref())?;
    if let Some(s) = a.seed {
        hyper.seed = s;
    }
    hyper.validate()?;
    let (train, head) = match (&a.inputs.bundle, &a.inputs.train, &a.inputs.weights) {
        (Some(dir), _, _) => {
            let (b, head) = load_bundle(dir)?;
            let head = head.ok_or_else(|| {
                Error::MissingData(format!("{}: bundle has no classifier head (weights.wpft)", dir.display()))
            })?;
            (b.id_train, head)
        }
        (None, Some(t), Some(w)) => (FeatureMatrix::from(load_tensor(t)?), load_head(w, a.inputs.bias.as_deref())?),
        _ => return Err(Error::InvalidConfig("fit needs --bundle, or --train with --weights".into())),
    };
    let model = fit_batched(&train, &head, &hyper, batch)?;
    model.save(&a.out)?;
    log::info!("fit: wrote {}", a.out.display());
    Ok(())
}

fn scores_csv(scores: &[f64]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["sample_index", "score"])?;
    for (i, s) in scores.iter().enumerate() {
        w.write_record([i.to_string(), s.to_string()])?;
    }
    w.into_inner().map_err(|e| Error::Csv(e.into_error().into()))
}

fn read_scores(path: &Path) -> Result<Vec<f64>> {
    if !path.exists() {
        return Err(Error::MissingData(format!("{}: score file not found; run `weiper score --bundle` first", path.display())));
    }
    let mut r = csv::Reader::from_path(path)?;
    let mut out = Vec::new();
    for (n, rec) in r.records().enumerate() {
        let rec = rec?;
        let bad = || Error::MissingData(format!("{}: malformed row {}", path.display(), n + 1));
        let idx: usize = rec.get(0).and_then(|v| v.parse().ok()).ok_or_else(bad)?;
        let score: f64 = rec.get(1).and_then(|v| v.parse().ok()).ok_or_else(bad)?;
        if idx != n {
            return Err(bad());
        }
        out.push(score);
    }
    Ok(out)
}

/// Score files for a bundle: `id_test` first, then one per OOD set.
fn bundle_score_names(b: &DatasetBundle) -> Vec<String> {
    std::iter::once("id_test".to_owned())
        .chain(b.ood_sets.iter().map(|s| format!("ood_{}", s.name)))
        .collect()
}

fn score_bundle(model: &WeiPerKldModel, b: &DatasetBundle, scorer: Scorer, batch: usize) -> Result<Vec<Vec<f64>>> {
    std::iter::once(&b.id_test)
        .chain(b.ood_sets.iter().map(|s| &s.features))
        .map(|f| model.score_with(scorer, f, batch))
        .collect()
}

fn cmd_score(a: ScoreArgs, batch: usize) -> Result<()> {
    let scorer = parse_scorer(&a.scorer)?;
    let model = WeiPerKldModel::load(&a.model)?;
    create_dir(&a.out)?;
    if let Some(path) = &a.features {
        let features = FeatureMatrix::from(load_tensor(path)?);
        let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "scores".into());
        let scores = model.score_with(scorer, &features, batch)?;
        return write_file(&a.out.join(format!("{stem}.csv")), scores_csv(&scores)?);
    }
    let dir = a.bundle.as_ref().expect("clap enforces --features or --bundle");
    let (b, _) = load_bundle(dir)?;
    for (name, scores) in bundle_score_names(&b).iter().zip(score_bundle(&model, &b, scorer, batch)?) {
        write_file(&a.out.join(format!("{name}.csv")), scores_csv(&scores)?)?;
    }
    Ok(())
}

fn report_for(b: &DatasetBundle, scores: &[Vec<f64>]) -> Result<EvalReport> {
    let sets: Vec<ScoredSet> = b
        .ood_sets
        .iter()
        .zip(&scores[1..])
        .map(|(s, sc)| ScoredSet { name: &s.name, kind: s.kind, scores: sc })
        .collect();
    evaluate(&scores[0], &sets)
}

fn cmd_eval(a: EvalArgs, batch: usize) -> Result<()> {
    let (b, _) = load_bundle(&a.bundle)?;
    if b.ood_sets.is_empty() {
        return Err(Error::MissingData(format!("{}: bundle has no OOD sets", a.bundle.display())));
    }
    let scores = match (&a.model, &a.scores) {
        (Some(m), _) => score_bundle(&WeiPerKldModel::load(m)?, &b, parse_scorer(&a.scorer)?, batch)?,
        (None, Some(dir)) => bundle_score_names(&b)
            .iter()
            .map(|n| read_scores(&dir.join(format!("{n}.csv"))))
            .collect::<Result<_>>()?,
        (None, None) => unreachable!("clap enforces --model or --scores"),
    };
    let features = std::iter::once(&b.id_test).chain(b.ood_sets.iter().map(|s| &s.features));
    for (name, (s, f)) in bundle_score_names(&b).iter().zip(scores.iter().zip(features)) {
        if s.len() != f.n_samples() {
            return Err(Error::MissingData(format!(
                "{name}: {} scores for {} samples in the bundle",
                s.len(),
                f.n_samples()
            )));
        }
    }
    let report = report_for(&b, &scores)?;
    create_dir(&a.out)?;
    let mut csv_bytes = Vec::new();
    report.write_csv(&mut csv_bytes)?;
    write_file(&a.out.join("report.csv"), csv_bytes)?;
    write_file(&a.out.join("report.json"), report.to_json() + "\n")?;
    for (label, v) in [("near", report.near_auroc), ("far", report.far_auroc)] {
        if let Some(v) = v {
            log::info!("eval: {label} AUROC {v:.4}");
        }
    }
    Ok(())
}

fn cmd_tune(a: TuneArgs, batch: usize) -> Result<()> {
    let mut ranges: GridRanges = read_config(a.config.as_deref())?;
    if let Some(s) = a.seed {
        ranges.seed = s;
    }
    ranges.validate()?;
    let (b, head) = load_bundle(&a.bundle)?;
    let head = head.ok_or_else(|| Error::MissingData(format!("{}: bundle has no classifier head", a.bundle.display())))?;
    let val_dir = a.val_bundle.as_ref().unwrap_or(&a.bundle);
    if a.val_bundle.is_none() {
        log::warn!("tune: no --val-bundle; selecting on the bundle's own OOD sets");
    }
    let (v, _) = load_bundle(val_dir)?;
    let val = v.id_val.as_ref().ok_or_else(|| {
        Error::MissingData(format!("{}: tune needs an id_val split in the validation bundle", val_dir.display()))
    })?;
    let result = grid_search(&b.id_train, val, &v.ood_sets, &head, &ranges, batch)?;
    create_dir(&a.out)?;
    let mut csv_bytes = Vec::new();
    result.write_csv(&mut csv_bytes)?;
    write_file(&a.out.join("leaderboard.csv"), csv_bytes)?;
    let best = serde_json::to_string_pretty(&result.best().hyper).expect("hyperparameters serialize");
    write_file(&a.out.join("best.json"), best + "\n")?;
    log::info!(
        "tune: {} configurations, best validation AUROC {:.4}",
        result.leaderboard.len(),
        result.best().val_auroc
    );
    Ok(())
}

fn cmd_synth(a: SynthArgs) -> Result<()> {
    let mut cfg: SynthConfig = read_config(a.config.as_deref())?;
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if let Some(s) = a.sample_seed {
        cfg.sample_seed = s;
    }
    let (bundle, head) = generate(&cfg)?;
    save_bundle(&a.out, &bundle, Some(&head))
}

fn cmd_inspect(a: InspectArgs) -> Result<()> {
    let model = WeiPerKldModel::load(&a.model)?;
    create_dir(&a.out)?;
    for (name, mean) in [("pen_mean", model.pen_mean()), ("pert_mean", model.pert_mean())] {
        let mut bytes = Vec::new();
        mean.hist.write_csv(&mut bytes)?;
        write_file(&a.out.join(format!("{name}.csv")), bytes)?;
    }
    Ok(())
}
