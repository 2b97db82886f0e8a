//! The `coal` command line: dataset generation, training, tracking,
//! evaluation, gradient checks and dataset validation.

pub mod config;

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};

use crate::error::{Error, Result};
use crate::gradsuite::{self, EndToEndDims, GradcheckReport};
use crate::metrics::{evaluate_benchmark_jobs, prediction_path, BenchmarkReport};
use crate::parallel::map_ordered;
use crate::priors::dataset::validate_dir;
use crate::priors::{generate_sequence, AttributeGrammar, Dataset, SequenceParams, ValidationReport};
use crate::tracker::{format_records, run_sequence};
use crate::training::{append_log, train, EpochLog, TrainState};

pub use config::{parse_override, RunConfig};

pub const EXIT_OK: i32 = 0;
pub const EXIT_OTHER: i32 = 1;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_VALIDATION: i32 = 3;
pub const EXIT_IO: i32 = 4;
pub const EXIT_NUMERIC: i32 = 5;

/// Name of the resolved-config echo written into output directories.
pub const CONFIG_ECHO: &str = "run_config.json";

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Invalid(_) => EXIT_USAGE,
        Error::Validation(_) | Error::Record { .. } | Error::Json { .. } => EXIT_VALIDATION,
        Error::Io { .. } | Error::Format(_) | Error::Version { .. } => EXIT_IO,
        Error::NonFinite { .. } | Error::NonFiniteLoss { .. } | Error::GradientCheck(_) => EXIT_NUMERIC,
        _ => EXIT_OTHER,
    }
}

#[derive(Debug, Parser)]
#[command(name = "coal", version, about = "Referring multi-object tracking with counterfactual supervision")]
pub struct Cli {
    /// Flat dotted-key JSON config; flags override its values.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Override any config key, e.g. `--set tracker.max_lost=20`. Repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic dataset.
    GenData(GenDataArgs),
    /// Train the scoring network and write a checkpoint and loss log.
    Train(TrainArgs),
    /// Track every (sequence, expression) pair with a checkpoint.
    Track(TrackArgs),
    /// Score prediction files with HOTA and its components.
    Eval(EvalArgs),
    /// Finite-difference checks of every differentiable op.
    Gradcheck(GradcheckArgs),
    /// Check a dataset directory for schema and reference errors.
    Validate(ValidateArgs),
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    /// Output dataset directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Number of sequences [default: 2].
    #[arg(long)]
    pub sequences: Option<usize>,
    /// Frames per sequence [default: 20].
    #[arg(long)]
    pub frames: Option<usize>,
    /// Objects per sequence [default: 4].
    #[arg(long)]
    pub objects: Option<usize>,
    /// Expressions per sequence [default: 10].
    #[arg(long)]
    pub expressions: Option<usize>,
    /// Counterfactuals per expression [default: 2].
    #[arg(long)]
    pub counterfactuals: Option<usize>,
    /// Caption attribute error probability [default: 0].
    #[arg(long)]
    pub caption_error_rate: Option<f64>,
    /// Box jitter as a fraction of box size [default: 0].
    #[arg(long)]
    pub box_jitter: Option<f64>,
    /// Spurious proposal probability per object [default: 0].
    #[arg(long)]
    pub spurious_rate: Option<f64>,
    /// Missed proposal probability per object [default: 0].
    #[arg(long)]
    pub miss_rate: Option<f64>,
    /// Generator seed [default: 42].
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Dataset directory.
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    /// Checkpoint to write; a `.json` config echo is written beside it.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Loss log, one JSON line per epoch [default: <checkpoint>.log.jsonl].
    #[arg(long)]
    pub log: Option<PathBuf>,
    /// Epochs [default: 30].
    #[arg(long)]
    pub epochs: Option<usize>,
    /// AdamW learning rate [default: 1e-4].
    #[arg(long)]
    pub lr: Option<f64>,
    /// Seed of initialization and sampling [default: 42].
    #[arg(long)]
    pub seed: Option<u64>,
    /// Expressions per frame batch [default: 10].
    #[arg(long)]
    pub n_queries: Option<usize>,
    /// f32 or f64 [default: f32].
    #[arg(long)]
    pub precision: Option<String>,
    /// Model width [default: 32].
    #[arg(long)]
    pub dim: Option<usize>,
    /// Disable counterfactual learning.
    #[arg(long)]
    pub no_cfl: bool,
    /// Disable the caption stream.
    #[arg(long)]
    pub no_esi: bool,
}

#[derive(Debug, Args)]
pub struct TrackArgs {
    /// Checkpoint written by `train`.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Dataset directory.
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    /// Output directory; files are `<out>/<sequence>/<expression>.txt`.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Only this sequence id.
    #[arg(long)]
    pub sequence: Option<String>,
    /// Only this expression id.
    #[arg(long)]
    pub expression: Option<String>,
    /// High-score threshold [default: 0.4].
    #[arg(long)]
    pub tau_high: Option<f64>,
    /// Low-score threshold [default: 0.1].
    #[arg(long)]
    pub tau_low: Option<f64>,
    /// Track-birth threshold [default: 0.4].
    #[arg(long)]
    pub epsilon: Option<f64>,
    /// f32 or f64 [default: f32].
    #[arg(long)]
    pub precision: Option<String>,
    /// Worker threads [default: 1].
    #[arg(long)]
    pub jobs: Option<usize>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Dataset directory.
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    /// Directory of prediction files.
    #[arg(long)]
    pub predictions: Option<PathBuf>,
    /// Directory for report.txt, report.jsonl and the config echo.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Worker threads [default: 1].
    #[arg(long)]
    pub jobs: Option<usize>,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    /// Proposals in the end-to-end frame.
    #[arg(long, default_value_t = 2)]
    pub proposals: usize,
    /// Query tokens in the end-to-end frame.
    #[arg(long, default_value_t = 3)]
    pub tokens: usize,
    /// Model width of the end-to-end frame.
    #[arg(long, default_value_t = 8)]
    pub dim: usize,
    /// Side of the square visual map.
    #[arg(long, default_value_t = 8)]
    pub map_size: usize,
}

#[derive(Debug, Args)]
pub struct ValidateArgs {
    /// Dataset directory.
    #[arg(long)]
    pub dataset: Option<PathBuf>,
}

fn put(pairs: &mut BTreeMap<String, Value>, key: &str, v: Option<Value>) {
    if let Some(v) = v {
        pairs.insert(key.to_string(), v);
    }
}

fn path_value(p: &Option<PathBuf>) -> Option<Value> {
    p.as_ref().map(|p| json!(p))
}

impl Cli {
    /// Config file, then `--set`, then dedicated flags.
    pub fn resolve(&self) -> Result<RunConfig> {
        let base = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        let mut pairs = BTreeMap::new();
        for s in &self.set {
            let (k, v) = parse_override(s)?;
            pairs.insert(k, v);
        }
        let p = &mut pairs;
        match &self.command {
            Command::GenData(a) => {
                put(p, "paths.output", path_value(&a.out));
                put(p, "data.sequences", a.sequences.map(|v| json!(v)));
                put(p, "data.frames", a.frames.map(|v| json!(v)));
                put(p, "data.noise.n_objects", a.objects.map(|v| json!(v)));
                put(p, "data.expressions", a.expressions.map(|v| json!(v)));
                put(p, "data.counterfactuals", a.counterfactuals.map(|v| json!(v)));
                put(p, "data.noise.caption_error_rate", a.caption_error_rate.map(|v| json!(v)));
                put(p, "data.noise.box_jitter", a.box_jitter.map(|v| json!(v)));
                put(p, "data.noise.spurious_rate", a.spurious_rate.map(|v| json!(v)));
                put(p, "data.noise.miss_rate", a.miss_rate.map(|v| json!(v)));
                put(p, "data.seed", a.seed.map(|v| json!(v)));
            }
            Command::Train(a) => {
                put(p, "paths.dataset", path_value(&a.dataset));
                put(p, "paths.checkpoint", path_value(&a.checkpoint));
                put(p, "paths.log", path_value(&a.log));
                put(p, "train.epochs", a.epochs.map(|v| json!(v)));
                put(p, "train.lr", a.lr.map(|v| json!(v)));
                put(p, "train.seed", a.seed.map(|v| json!(v)));
                put(p, "train.n_queries", a.n_queries.map(|v| json!(v)));
                put(p, "train.precision", a.precision.as_ref().map(|v| json!(v)));
                put(p, "model.dim", a.dim.map(|v| json!(v)));
                put(p, "train.cf_enabled", a.no_cfl.then_some(json!(false)));
                put(p, "train.esi_enabled", a.no_esi.then_some(json!(false)));
            }
            Command::Track(a) => {
                put(p, "paths.checkpoint", path_value(&a.checkpoint));
                put(p, "paths.dataset", path_value(&a.dataset));
                put(p, "paths.predictions", path_value(&a.out));
                put(p, "track.sequence", a.sequence.as_ref().map(|v| json!(v)));
                put(p, "track.expression", a.expression.as_ref().map(|v| json!(v)));
                put(p, "tracker.tau_high", a.tau_high.map(|v| json!(v)));
                put(p, "tracker.tau_low", a.tau_low.map(|v| json!(v)));
                put(p, "tracker.epsilon", a.epsilon.map(|v| json!(v)));
                put(p, "track.precision", a.precision.as_ref().map(|v| json!(v)));
                put(p, "run.jobs", a.jobs.map(|v| json!(v)));
            }
            Command::Eval(a) => {
                put(p, "paths.dataset", path_value(&a.dataset));
                put(p, "paths.predictions", path_value(&a.predictions));
                put(p, "paths.output", path_value(&a.out));
                put(p, "run.jobs", a.jobs.map(|v| json!(v)));
            }
            Command::Validate(a) => put(p, "paths.dataset", path_value(&a.dataset)),
            Command::Gradcheck(_) => {}
        }
        let config = base.apply(&pairs)?;
        config.validate()?;
        Ok(config)
    }
}

fn required<'a>(p: &'a Option<PathBuf>, what: &str) -> Result<&'a Path> {
    p.as_deref()
        .ok_or_else(|| Error::Invalid(format!("no {what} given (flag or paths.{what})")))
}

fn out_err(e: std::io::Error) -> Error {
    Error::io("<stdout>", e)
}

/// Writes the synthetic dataset described by `config.data` and echoes
/// the config at the dataset root.
pub fn cmd_gen_data(config: &RunConfig, out: &Path) -> Result<Dataset> {
    let d = &config.data;
    let grammar = AttributeGrammar::default();
    let mut sequences = Vec::with_capacity(d.sequences);
    for i in 0..d.sequences {
        let mut rng = ChaCha8Rng::seed_from_u64(d.seed);
        rng.set_stream(i as u64);
        let params = SequenceParams {
            sequence_id: format!("seq{i:04}"),
            n_frames: d.frames,
            n_expressions: d.expressions,
            counterfactuals_per_expression: d.counterfactuals,
            noise: d.noise,
        };
        sequences.push(generate_sequence(&grammar, &params, &mut rng)?);
    }
    let dataset = Dataset { sequences };
    dataset.write(out)?;
    config.write(&out.join(CONFIG_ECHO))?;
    Ok(dataset)
}

pub fn cmd_validate(dataset: &Path) -> Result<ValidationReport> {
    validate_dir(dataset)
}

/// Validates, refusing a dataset with errors, then reads it.
fn load_checked(path: &Path, err: &mut dyn Write) -> Result<Dataset> {
    let report = validate_dir(path)?;
    if !report.is_ok() {
        writeln!(err, "{report}").map_err(out_err)?;
        return Err(Error::Validation(report.errors.len()));
    }
    Dataset::read(path)
}

pub fn log_path(config: &RunConfig, checkpoint: &Path) -> PathBuf {
    config.paths.log.clone().unwrap_or_else(|| {
        let mut s = checkpoint.as_os_str().to_owned();
        s.push(".log.jsonl");
        PathBuf::from(s)
    })
}

/// Trains, printing one line per epoch, then writes the checkpoint, its
/// config echo and the loss log.
pub fn cmd_train(config: &RunConfig, out: &mut dyn Write, err: &mut dyn Write) -> Result<Vec<EpochLog>> {
    let dataset_path = required(&config.paths.dataset, "dataset")?;
    let checkpoint = required(&config.paths.checkpoint, "checkpoint")?;
    let dataset = load_checked(dataset_path, err)?;
    let log = log_path(config, checkpoint);
    if let Some(dir) = log.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(&log, "").map_err(|e| Error::io(&log, e))?;
    let (state, logs) = train(&config.train, &dataset, |entry, _| {
        append_log(&log, entry)?;
        writeln!(
            out,
            "epoch {:>4}  main {:.6}  cf {:.6}  total {:.6}  frames {}",
            entry.epoch, entry.main, entry.counterfactual, entry.total, entry.frames
        )
        .map_err(out_err)
    })?;
    state.save(checkpoint, &config.train)?;
    let mut echo = checkpoint.as_os_str().to_owned();
    echo.push(".run.json");
    config.write(Path::new(&echo))?;
    Ok(logs)
}

/// Tracks each selected (sequence, expression) pair and writes one file
/// per pair. Returns the written paths in sequence, then expression order.
pub fn cmd_track(config: &RunConfig, err: &mut dyn Write) -> Result<Vec<PathBuf>> {
    let checkpoint = required(&config.paths.checkpoint, "checkpoint")?;
    let dataset_path = required(&config.paths.dataset, "dataset")?;
    let out = required(&config.paths.predictions, "predictions")?;
    let model = TrainState::load(checkpoint)?.model;
    let dataset = load_checked(dataset_path, err)?;
    let opts = &config.track;
    let jobs: Vec<(usize, &str)> = dataset
        .sequences
        .iter()
        .enumerate()
        .filter(|(_, s)| opts.sequence.as_ref().is_none_or(|id| *id == s.id))
        .flat_map(|(i, s)| {
            s.expressions
                .keys()
                .filter(|e| opts.expression.as_ref().is_none_or(|id| id == *e))
                .map(move |e| (i, e.as_str()))
        })
        .collect();
    let results = map_ordered(&jobs, config.run.jobs, |&(i, expr_id)| {
        let seq = &dataset.sequences[i];
        let text = &seq.expressions[expr_id].text;
        run_sequence(&model, &seq.frames, text, &config.tracker, opts.precision)
    });
    let mut written = Vec::with_capacity(jobs.len());
    for (&(i, expr_id), records) in jobs.iter().zip(results) {
        let path = prediction_path(out, &dataset.sequences[i].id, expr_id);
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        std::fs::write(&path, format_records(&records?)).map_err(|e| Error::io(&path, e))?;
        written.push(path);
    }
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    config.write(&out.join(CONFIG_ECHO))?;
    Ok(written)
}

/// Scores the prediction directory and prints the table. With an output
/// directory, also writes the text and JSON reports there.
pub fn cmd_eval(config: &RunConfig, out: &mut dyn Write, err: &mut dyn Write) -> Result<BenchmarkReport> {
    let dataset_path = required(&config.paths.dataset, "dataset")?;
    let predictions = required(&config.paths.predictions, "predictions")?;
    if !predictions.is_dir() {
        return Err(Error::io(
            predictions,
            std::io::Error::new(std::io::ErrorKind::NotFound, "prediction directory not found"),
        ));
    }
    let dataset = load_checked(dataset_path, err)?;
    let report = evaluate_benchmark_jobs(&dataset, predictions, config.run.jobs)?;
    let text = report.to_text();
    out.write_all(text.as_bytes()).map_err(out_err)?;
    if let Some(dir) = &config.paths.output {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let write = |name: &str, body: &str| {
            let p = dir.join(name);
            std::fs::write(&p, body).map_err(|e| Error::io(&p, e))
        };
        write("report.txt", &text)?;
        write("report.jsonl", &report.to_json_lines())?;
        config.write(&dir.join(CONFIG_ECHO))?;
    }
    Ok(report)
}

/// Prints the report; any failed check is an error.
pub fn cmd_gradcheck(cases: &[gradsuite::GradCase], out: &mut dyn Write) -> Result<GradcheckReport> {
    let report = gradsuite::run(cases, crate::tensor::gradcheck::DEFAULT_TOLERANCE);
    out.write_all(report.to_text().as_bytes()).map_err(out_err)?;
    let failed = report.failures().count();
    if failed > 0 {
        return Err(Error::GradientCheck(failed));
    }
    Ok(report)
}

fn dispatch(cli: &Cli, out: &mut dyn Write, err: &mut dyn Write) -> Result<()> {
    let config = cli.resolve()?;
    match &cli.command {
        Command::GenData(_) => {
            let dir = required(&config.paths.output, "output")?;
            let d = cmd_gen_data(&config, dir)?;
            writeln!(
                out,
                "wrote {} sequences, {} frames to {}",
                d.sequences.len(),
                d.n_frames(),
                dir.display()
            )
            .map_err(out_err)?;
        }
        Command::Train(_) => {
            cmd_train(&config, out, err)?;
        }
        Command::Track(_) => {
            let files = cmd_track(&config, err)?;
            writeln!(out, "wrote {} prediction files", files.len()).map_err(out_err)?;
        }
        Command::Eval(_) => {
            cmd_eval(&config, out, err)?;
        }
        Command::Gradcheck(a) => {
            let dims = EndToEndDims {
                proposals: a.proposals,
                tokens: a.tokens,
                dim: a.dim,
                map_side: a.map_size,
            };
            cmd_gradcheck(&gradsuite::registry(&dims)?, out)?;
        }
        Command::Validate(_) => {
            let dir = required(&config.paths.dataset, "dataset")?;
            let report = cmd_validate(dir)?;
            writeln!(out, "{report}").map_err(out_err)?;
            if !report.is_ok() {
                return Err(Error::Validation(report.errors.len()));
            }
        }
    }
    Ok(())
}

/// Parses `args` (program name first) and runs the command, returning
/// the process exit status.
pub fn run<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let text = e.render().to_string();
            let sink: &mut dyn Write = if e.use_stderr() { err } else { out };
            let _ = sink.write_all(text.as_bytes());
            return code;
        }
    };
    match dispatch(&cli, out, err) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            exit_code(&e)
        }
    }
}
