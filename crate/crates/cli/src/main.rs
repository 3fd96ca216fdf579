use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde::Serialize;

use hydra_core::data::manifest::EmbeddingStorage;
use hydra_core::data::{gen_synth, load_manifest, write_manifest, Dataset, SynthConfig};
use hydra_core::engine::{
    self, evaluate_test, load_trained, render_table, save_report, train_to_dir, MetricsReport,
    TrainConfig, METRICS_JSON,
};
use hydra_core::model::{param_count, ModelConfig, ModelKind, DEFAULT_DROPOUT, DEFAULT_HIDDEN_DIM};
use hydra_core::selftest::{self, Fault, SelftestOptions};
use hydra_core::{Error, ErrorKind};

const RESOLVED_CONFIG: &str = "resolved_config.toml";
const COMPLETED: &str = "COMPLETED";
const MANIFEST: &str = "manifest.jsonl";
const EMBEDDINGS: &str = "embeddings.hemb";
const PREDICTIONS: &str = "predictions.csv";

const PRECEDENCE: &str = "\
Configuration precedence (lowest to highest): built-in defaults, then the
TOML file given by --config (keys are the TrainConfig or SynthConfig field
names), then command-line flags, then HYDRA_NUM_CHECK=1 which turns on
num_check. The fully resolved configuration is written to
<out>/resolved_config.toml before any work starts; passing that file back
with --config reproduces the run bit for bit.

Exit codes: 0 success, 1 selftest failure, 2 configuration error, 3 data
error, 4 numerical failure, 5 I/O error, 6 usage error.";

#[derive(Parser)]
#[command(
    name = "hydra",
    version,
    about = "Codec parameter regression from speech embeddings"
)]
#[command(after_help = PRECEDENCE)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic hierarchical dataset.
    GenSynth(GenSynthArgs),
    /// Train a model and evaluate it on the test split.
    Train(TrainArgs),
    /// Evaluate a trained run on a manifest's test split.
    Eval(EvalArgs),
    /// Write predictions of a trained run for every record of a manifest.
    Predict(EvalArgs),
    /// Run the geometry, gradient and objective property suites.
    Selftest(SelftestArgs),
    /// Print the trainable parameter count of an architecture.
    ParamCount(ParamCountArgs),
}

#[derive(Args)]
struct OutArgs {
    /// Output directory, created if absent.
    #[arg(long)]
    out: PathBuf,
    /// Replace an existing completed run.
    #[arg(long)]
    force: bool,
}

#[derive(Args)]
struct GenSynthArgs {
    #[command(flatten)]
    out: OutArgs,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Embedding dimension (at least 32).
    #[arg(long)]
    dim: Option<usize>,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    out: OutArgs,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    /// euclidean, hyperbolic_single or hydra.
    #[arg(long)]
    model_kind: Option<ModelKind>,
    #[arg(long)]
    epochs: Option<usize>,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    out: OutArgs,
    /// Directory of a completed training run.
    #[arg(long)]
    run: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
}

#[derive(Args)]
struct SelftestArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Randomized cases per geometry property.
    #[arg(long, default_value_t = SelftestOptions::default().cases)]
    cases: usize,
    /// Deliberately break a property to check the harness (round-trip).
    #[arg(long)]
    inject_fault: Option<Fault>,
}

#[derive(Args)]
struct ParamCountArgs {
    /// Input embedding dimension.
    #[arg(long, default_value_t = 768)]
    dim: usize,
    #[arg(long, default_value_t = DEFAULT_HIDDEN_DIM)]
    hidden_dim: usize,
    /// Only this architecture; all three when omitted.
    #[arg(long)]
    model_kind: Option<ModelKind>,
}

#[derive(Serialize)]
struct EvalEcho<'a> {
    run: &'a Path,
    manifest: &'a Path,
}

struct Failure {
    code: u8,
    message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match e.kind() {
            ErrorKind::Config => 2,
            ErrorKind::Data => 3,
            ErrorKind::Numerical => 4,
            ErrorKind::Io => 5,
            ErrorKind::Usage => 6,
        };
        Failure {
            code,
            message: e.to_string(),
        }
    }
}

type CliResult<T = ()> = Result<T, Failure>;

fn io_err(path: &Path, e: std::io::Error) -> Failure {
    Error::Io {
        path: path.to_path_buf(),
        source: e,
    }
    .into()
}

fn read_config<T: DeserializeOwned + Default>(path: Option<&Path>) -> CliResult<T> {
    let Some(path) = path else {
        return Ok(T::default());
    };
    let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())).into())
}

/// Creates `dir`, refusing to reuse a completed run without `force`.
fn prepare_out(out: &OutArgs) -> CliResult {
    let marker = out.out.join(COMPLETED);
    if marker.exists() {
        if !out.force {
            return Err(Error::Usage(format!(
                "{} already holds a completed run; pass --force to replace it",
                out.out.display()
            ))
            .into());
        }
        fs::remove_file(&marker).map_err(|e| io_err(&marker, e))?;
    }
    fs::create_dir_all(&out.out).map_err(|e| io_err(&out.out, e))
}

fn echo_config<T: Serialize>(dir: &Path, value: &T) -> CliResult {
    let text = toml::to_string(value)
        .map_err(|e| Error::Config(format!("cannot serialize config: {e}")))?;
    let path = dir.join(RESOLVED_CONFIG);
    fs::write(&path, text).map_err(|e| io_err(&path, e))
}

fn mark_completed(dir: &Path) -> CliResult {
    let path = dir.join(COMPLETED);
    fs::write(&path, "").map_err(|e| io_err(&path, e))
}

/// Loads a manifest; every failure, including a missing file, is a data error.
fn load_data(path: &Path) -> CliResult<Dataset> {
    load_manifest(path).map_err(|e| {
        let mut f = Failure::from(e);
        f.code = 3;
        if !f.message.contains(&path.display().to_string()) {
            f.message = format!("{}: {}", path.display(), f.message);
        }
        f
    })
}

fn gen_synth_cmd(args: GenSynthArgs) -> CliResult {
    let mut cfg: SynthConfig = read_config(args.config.as_deref())?;
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    if let Some(dim) = args.dim {
        cfg.dim = dim;
    }
    cfg.validate()?;
    prepare_out(&args.out)?;
    let dir = &args.out.out;
    echo_config(dir, &cfg)?;
    let dataset = gen_synth(&cfg)?;
    write_manifest(
        &dataset,
        &dir.join(MANIFEST),
        &EmbeddingStorage::Matrix(EMBEDDINGS.into()),
    )?;
    let c = dataset.counts();
    println!(
        "wrote {} records (train {}, val {}, test {}; open {}) of dimension {} to {}",
        dataset.len(),
        c.train,
        c.val,
        c.test,
        c.open,
        cfg.dim,
        dir.display()
    );
    mark_completed(dir)
}

fn train_config(args: &TrainArgs) -> CliResult<TrainConfig> {
    let mut cfg: TrainConfig = read_config(args.config.as_deref())?;
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    if let Some(kind) = args.model_kind {
        cfg.model_kind = kind;
    }
    if let Some(epochs) = args.epochs {
        cfg.epochs = epochs;
    }
    if std::env::var("HYDRA_NUM_CHECK").is_ok_and(|v| v == "1") {
        cfg.num_check = true;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn train_cmd(args: TrainArgs) -> CliResult {
    let cfg = train_config(&args)?;
    prepare_out(&args.out)?;
    let dir = &args.out.out;
    echo_config(dir, &cfg)?;
    let dataset = load_data(&args.manifest)?;
    let start = Instant::now();
    let outcome = train_to_dir(&dataset, &cfg, dir)?;
    println!(
        "{} trained for {} epochs in {:.1}s, kept epoch {}",
        cfg.model_kind,
        outcome.log.len(),
        start.elapsed().as_secs_f64(),
        outcome.report.selected_epoch
    );
    print!("{}", render_table(std::slice::from_ref(&outcome.report)));
    mark_completed(dir)
}

fn eval_cmd(args: EvalArgs) -> CliResult {
    prepare_out(&args.out)?;
    let dir = &args.out.out;
    echo_config(
        dir,
        &EvalEcho {
            run: &args.run,
            manifest: &args.manifest,
        },
    )?;
    let trained = load_trained(&args.run)?;
    let dataset = load_data(&args.manifest)?;
    let (closed, open) = evaluate_test(&trained, &dataset)?;
    let history: Option<MetricsReport> = fs::read_to_string(args.run.join(METRICS_JSON))
        .ok()
        .and_then(|t| serde_json::from_str(&t).ok());
    let report = MetricsReport {
        model_kind: trained.model.kind(),
        closed,
        open,
        val_losses: history
            .as_ref()
            .map(|h| h.val_losses.clone())
            .unwrap_or_default(),
        selected_epoch: history.map_or(0, |h| h.selected_epoch),
    };
    save_report(&report, dir)?;
    print!("{}", render_table(std::slice::from_ref(&report)));
    mark_completed(dir)
}

fn predict_cmd(args: EvalArgs) -> CliResult {
    prepare_out(&args.out)?;
    let dir = &args.out.out;
    echo_config(
        dir,
        &EvalEcho {
            run: &args.run,
            manifest: &args.manifest,
        },
    )?;
    let trained = load_trained(&args.run)?;
    let dataset = load_data(&args.manifest)?;
    let records: Vec<_> = dataset.records().iter().collect();
    let preds = engine::predict(&trained, &records)?;
    let mut text = String::from("id,sr_hz,bps,q\n");
    for (r, p) in records.iter().zip(&preds) {
        let _ = writeln!(text, "{},{},{},{}", r.id, p[0], p[1], p[2]);
    }
    let path = dir.join(PREDICTIONS);
    fs::write(&path, text).map_err(|e| io_err(&path, e))?;
    println!("wrote {} predictions to {}", preds.len(), path.display());
    mark_completed(dir)
}

fn selftest_cmd(args: SelftestArgs) -> CliResult {
    let start = Instant::now();
    let report = selftest::run(&SelftestOptions {
        seed: args.seed,
        cases: args.cases,
        fault: args.inject_fault,
    });
    for r in &report.results {
        println!("{r}");
    }
    let failed = report.failures().count();
    println!(
        "{} properties, {failed} failed, {:.1}s",
        report.results.len(),
        start.elapsed().as_secs_f64()
    );
    if failed > 0 {
        return Err(Failure {
            code: 1,
            message: format!(
                "selftest failed: {}",
                report
                    .failures()
                    .map(|r| format!("{}::{}", r.suite, r.name))
                    .collect::<Vec<_>>()
                    .join(", ")
            ),
        });
    }
    Ok(())
}

fn param_count_cmd(args: ParamCountArgs) -> CliResult {
    let kinds = args.model_kind.map_or(ModelKind::ALL.to_vec(), |k| vec![k]);
    for kind in kinds {
        let cfg = ModelConfig {
            kind,
            input_dim: args.dim,
            hidden_dim: args.hidden_dim,
            dropout: DEFAULT_DROPOUT,
        };
        println!("{kind}\t{}", param_count(&cfg)?);
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 6 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match cli.command {
        Command::GenSynth(a) => gen_synth_cmd(a),
        Command::Train(a) => train_cmd(a),
        Command::Eval(a) => eval_cmd(a),
        Command::Predict(a) => predict_cmd(a),
        Command::Selftest(a) => selftest_cmd(a),
        Command::ParamCount(a) => param_count_cmd(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
