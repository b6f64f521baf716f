//! The `ee2d` command line.
//!
//! Exit codes: 0 on success, 1 on a domain error (reported with the error
//! name of the module that raised it), 2 on a usage error. Every report is
//! also available as JSON on stdout via `--json`; logs and human-readable
//! diagnostics go to stderr.

use std::ffi::OsString;
use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{ArgAction, Args, Parser, Subcommand, ValueEnum};
use log::info;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::adapters::{
    self, default_layer_weights, grad_check, load_adapters, save_adapters, train_adapters, training_accuracy,
    AdapterError, AdapterParams, Objective, TrainConfig, TrainMode, DEFAULT_HIDDEN_DIM,
};
use crate::datamodel::{
    apply_adapters_all, load_dataset, save_dataset, DataError, DatasetManifest, EmbeddingGrid, Grids, ProbeGrid,
};
use crate::engine::EEConfig;
use crate::metrics::{
    block_accuracy_curve, cell_accuracy_heatmap, cost_model, evaluate_2d, layerwise_baseline, write_block_curve_csv,
    write_cell_heatmap_csv, CostModelInput, EvalReport, MetricsError,
};
use crate::synth::{generate_dataset, SpecError, SynthSpec};
use crate::textseg::{SentenceSplitter, SplitError};
use crate::tuner::{grid_search, refine_search, TuneBounds, TuneError, TuneGrid};

#[derive(Debug, Parser)]
#[command(name = "ee2d", version, about = "Two-dimensional early-exit inference over probe grids")]
pub struct Cli {
    /// Emit the report as JSON on stdout.
    #[arg(long, global = true)]
    pub json: bool,
    /// Worker threads (default: machine parallelism).
    #[arg(long, global = true, env = "EE2D_THREADS")]
    pub threads: Option<usize>,
    /// Seed for every random choice made by the command.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// TOML file overriding built-in defaults.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Increase log verbosity (-v info, -vv debug).
    #[arg(short, long, global = true, action = ArgAction::Count)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Split a text file into sentences, one per line.
    Split {
        #[arg(long = "in")]
        input: PathBuf,
        /// Abbreviation list, one per line.
        #[arg(long)]
        abbrev: Option<PathBuf>,
    },
    /// Check a probe or embedding JSONL file.
    Validate {
        #[arg(long = "in")]
        input: PathBuf,
    },
    /// Turn an embedding dataset into a probe dataset with trained adapters.
    ApplyAdapters {
        #[arg(long)]
        emb: PathBuf,
        #[arg(long)]
        adapters: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train one adapter per layer.
    Train(TrainArgs),
    /// Compare analytic and finite-difference adapter gradients.
    GradCheck(GradCheckArgs),
    /// Generate a synthetic embedding dataset.
    Synth {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the 2D schedule and report per-sample outcomes.
    Simulate {
        #[arg(long = "in")]
        input: PathBuf,
        #[command(flatten)]
        taus: TauArgs,
        /// Per-sample CSV destination (`-` for stdout).
        #[arg(long)]
        per_sample_out: Option<PathBuf>,
    },
    /// Per-layer accuracy and the best layer-wise exit.
    Profile {
        #[arg(long = "in")]
        input: PathBuf,
        /// Allowed accuracy loss.
        #[arg(long = "T")]
        allowed_loss: Option<f64>,
    },
    /// Dataset-level report of the 2D schedule as JSON.
    Eval {
        #[arg(long = "in")]
        input: PathBuf,
        #[command(flatten)]
        taus: TauArgs,
    },
    /// Per-cell accuracy and block-accuracy CSVs for one sentence count.
    Heatmap {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        m: usize,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        blocks_out: Option<PathBuf>,
    },
    /// Per-layer FLOP estimate for one sentence.
    CostModel {
        /// Average tokens per sentence.
        #[arg(long)]
        tps: f64,
        #[arg(long)]
        dim: f64,
        #[arg(long)]
        expf: f64,
        /// Sentence index used for the attention term.
        #[arg(long, default_value_t = 1.0)]
        s: f64,
    },
    /// Search thresholds for the fastest configuration within an accuracy budget.
    Tune(TuneArgs),
}

#[derive(Debug, Args)]
pub struct TauArgs {
    #[arg(long, value_parser = parse_tau_ignore)]
    pub tau_ignore: Option<f64>,
    #[arg(long, value_parser = parse_tau_acc)]
    pub tau_acc: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ModeArg {
    AdapterOnly,
    Joint,
}

impl From<ModeArg> for TrainMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::AdapterOnly => TrainMode::AdapterOnly,
            ModeArg::Joint => TrainMode::JointFtLoss,
        }
    }
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub emb: PathBuf,
    #[arg(long, value_enum, default_value = "adapter-only")]
    pub mode: ModeArg,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub hidden: Option<usize>,
    /// Comma-separated per-layer weights of the joint objective.
    #[arg(long, value_delimiter = ',')]
    pub lambda: Option<Vec<f64>>,
}

#[derive(Debug, Args)]
pub struct GradCheckArgs {
    #[arg(long)]
    pub emb: PathBuf,
    /// Adapters to check at; freshly initialised ones when omitted.
    #[arg(long)]
    pub adapters: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "adapter-only")]
    pub mode: ModeArg,
    /// Layer checked in adapter-only mode.
    #[arg(long, default_value_t = 0)]
    pub layer: usize,
    /// Sample whose loss is differentiated.
    #[arg(long, default_value_t = 0)]
    pub sample: usize,
    #[arg(long, default_value_t = 1e-5)]
    pub eps: f64,
    #[arg(long, default_value_t = 50)]
    pub coords: usize,
    /// Largest accepted relative error.
    #[arg(long, default_value_t = 1e-4)]
    pub tol: f64,
    #[arg(long)]
    pub hidden: Option<usize>,
}

#[derive(Debug, Args)]
pub struct TuneArgs {
    #[arg(long = "in")]
    pub input: PathBuf,
    #[arg(long = "T")]
    pub allowed_loss: Option<f64>,
    /// JSON file with `tau_ignore_values` and `tau_acc_values`.
    #[arg(long, conflicts_with = "refine")]
    pub grid: Option<PathBuf>,
    /// Coarse-to-fine search instead of a full grid.
    #[arg(long)]
    pub refine: bool,
    #[arg(long, requires = "refine")]
    pub budget: Option<usize>,
    /// Writes `<prefix>_accuracy.csv` and `<prefix>_speedup.csv` (grid search only).
    #[arg(long)]
    pub heatmap_out: Option<PathBuf>,
}

fn parse_tau_ignore(s: &str) -> Result<f64, String> {
    let v: f64 = s.parse().map_err(|e| format!("{e}"))?;
    if v.is_finite() && (0.0..=1.0).contains(&v) {
        Ok(v)
    } else {
        Err(format!("tau_ignore must lie in [0, 1], got {v}"))
    }
}

fn parse_tau_acc(s: &str) -> Result<f64, String> {
    let v: f64 = s.parse().map_err(|e| format!("{e}"))?;
    if v.is_finite() && v >= 0.0 {
        Ok(v)
    } else {
        Err(format!("tau_acc must be finite and >= 0, got {v}"))
    }
}

/// Defaults that a `--config` TOML file may override. Command-line flags win
/// over the file.
#[derive(Debug, Clone, Default, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    pub seed: Option<u64>,
    pub threads: Option<usize>,
    pub tau_ignore: Option<f64>,
    pub tau_acc: Option<f64>,
    pub allowed_loss: Option<f64>,
    pub learning_rate: Option<f64>,
    pub batch_size: Option<usize>,
    pub epochs: Option<usize>,
    pub hidden_dim: Option<usize>,
    pub budget: Option<usize>,
}

const DEFAULT_ALLOWED_LOSS: f64 = 0.02;
const DEFAULT_BUDGET: usize = 30;

/// A failure with its exit code and the error name shown to the user.
#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub kind: String,
    pub message: String,
}

impl CliError {
    fn usage(message: impl Into<String>) -> Self {
        Self { code: 2, kind: "UsageError".into(), message: message.into() }
    }

    fn domain(kind: impl Into<String>, message: impl ToString) -> Self {
        Self { code: 1, kind: kind.into(), message: message.to_string() }
    }
}

impl From<DataError> for CliError {
    fn from(e: DataError) -> Self {
        Self::domain(e.kind(), e)
    }
}

impl From<AdapterError> for CliError {
    fn from(e: AdapterError) -> Self {
        Self::domain(e.kind(), e)
    }
}

impl From<MetricsError> for CliError {
    fn from(e: MetricsError) -> Self {
        Self::domain(e.kind(), e)
    }
}

impl From<TuneError> for CliError {
    fn from(e: TuneError) -> Self {
        Self::domain(e.kind(), e)
    }
}

impl From<SpecError> for CliError {
    fn from(e: SpecError) -> Self {
        Self::domain("SpecError", e)
    }
}

impl From<SplitError> for CliError {
    fn from(e: SplitError) -> Self {
        let kind = match e {
            SplitError::EmptyInput => "EmptyInput",
            SplitError::Io { .. } => "IoError",
        };
        Self::domain(kind, e)
    }
}

impl From<csv::Error> for CliError {
    fn from(e: csv::Error) -> Self {
        Self::domain("IoError", e)
    }
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> CliError + '_ {
    move |e| CliError::domain("IoError", format!("{}: {e}", path.display()))
}

fn create(path: &Path) -> Result<BufWriter<File>, CliError> {
    File::create(path).map(BufWriter::new).map_err(io_err(path))
}

/// Parses `std::env::args_os()`, runs the command and returns the exit code.
pub fn run() -> i32 {
    run_from(std::env::args_os())
}

pub fn run_from<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    let level = match cli.verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        _ => log::LevelFilter::Debug,
    };
    let _ = env_logger::Builder::new().filter_level(level).target(env_logger::Target::Stderr).try_init();
    match execute(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {}: {}", e.kind, e.message);
            e.code
        }
    }
}

fn load_file_config(path: Option<&Path>) -> Result<FileConfig, CliError> {
    let Some(path) = path else { return Ok(FileConfig::default()) };
    let text = std::fs::read_to_string(path).map_err(|e| CliError::usage(format!("{}: {e}", path.display())))?;
    toml::from_str(&text).map_err(|e| CliError::usage(format!("{}: {e}", path.display())))
}

/// Runs a parsed command line inside a thread pool of the requested size.
pub fn execute(cli: &Cli) -> Result<(), CliError> {
    let file = load_file_config(cli.config.as_deref())?;
    let mut pool = rayon::ThreadPoolBuilder::new();
    match cli.threads.or(file.threads) {
        Some(0) => return Err(CliError::usage("--threads must be >= 1")),
        Some(n) => pool = pool.num_threads(n),
        None => {}
    }
    let pool = pool.build().map_err(|e| CliError::usage(e.to_string()))?;
    let ctx = Ctx { json: cli.json, seed: cli.seed.or(file.seed), file };
    pool.install(|| dispatch(&ctx, &cli.command))
}

struct Ctx {
    json: bool,
    seed: Option<u64>,
    file: FileConfig,
}

impl Ctx {
    fn emit<T: Serialize>(&self, value: &T, human: impl FnOnce() -> String) {
        if self.json {
            println!("{}", serde_json::to_string(value).expect("reports serialize"));
        } else {
            print!("{}", human());
        }
    }

    fn eeconfig(&self, taus: &TauArgs) -> Result<EEConfig, CliError> {
        let ti = taus.tau_ignore.or(self.file.tau_ignore);
        let ta = taus.tau_acc.or(self.file.tau_acc);
        match (ti, ta) {
            (Some(ti), Some(ta)) => EEConfig::new(ti, ta).map_err(|e| CliError::usage(e.to_string())),
            _ => Err(CliError::usage("--tau-ignore and --tau-acc are required (flag or config file)")),
        }
    }

    fn allowed_loss(&self, flag: Option<f64>) -> Result<f64, CliError> {
        let t = flag.or(self.file.allowed_loss).unwrap_or(DEFAULT_ALLOWED_LOSS);
        if (0.0..=1.0).contains(&t) {
            Ok(t)
        } else {
            Err(CliError::usage(format!("--T must lie in [0, 1], got {t}")))
        }
    }
}

fn load_probe(path: &Path) -> Result<Vec<ProbeGrid>, CliError> {
    Ok(load_dataset(path)?.into_probe()?.1)
}

fn load_embedding(path: &Path) -> Result<(DatasetManifest, Vec<EmbeddingGrid>), CliError> {
    Ok(load_dataset(path)?.into_embedding()?)
}

fn dispatch(ctx: &Ctx, cmd: &Command) -> Result<(), CliError> {
    match cmd {
        Command::Split { input, abbrev } => split(ctx, input, abbrev.as_deref()),
        Command::Validate { input } => validate(ctx, input),
        Command::ApplyAdapters { emb, adapters, out } => apply(ctx, emb, adapters, out),
        Command::Train(a) => train(ctx, a),
        Command::GradCheck(a) => gradcheck(ctx, a),
        Command::Synth { spec, out } => synth(ctx, spec, out),
        Command::Simulate { input, taus, per_sample_out } => simulate(ctx, input, taus, per_sample_out.as_deref()),
        Command::Profile { input, allowed_loss } => profile(ctx, input, *allowed_loss),
        Command::Eval { input, taus } => {
            let report = evaluate_2d(&load_probe(input)?, &ctx.eeconfig(taus)?)?;
            println!("{}", serde_json::to_string(&report).expect("reports serialize"));
            Ok(())
        }
        Command::Heatmap { input, m, out, blocks_out } => heatmap(ctx, input, *m, out, blocks_out.as_deref()),
        Command::CostModel { tps, dim, expf, s } => {
            if [*tps, *dim, *expf, *s].iter().any(|v| !v.is_finite() || *v <= 0.0) {
                return Err(CliError::usage("--tps, --dim, --expf and --s must be positive"));
            }
            let out = cost_model(&CostModelInput { tps: *tps, embed_dim: *dim, exp_f: *expf, sentence_index: *s });
            ctx.emit(&out, || {
                format!(
                    "qkv flops:        {:.4e}\nattention flops:  {:.4e} (s x {:.4e})\nmlp flops:        {:.4e}\ncrossover s:      {:.1}\n",
                    out.qkv_flops, out.attention_flops, out.attention_coefficient, out.mlp_flops, out.crossover_s
                )
            });
            Ok(())
        }
        Command::Tune(a) => tune(ctx, a),
    }
}

fn split(ctx: &Ctx, input: &Path, abbrev: Option<&Path>) -> Result<(), CliError> {
    let splitter = match abbrev {
        Some(p) => SentenceSplitter::from_abbreviation_file(p)?,
        None => SentenceSplitter::default(),
    };
    let text = std::fs::read_to_string(input).map_err(io_err(input))?;
    let list = splitter.split(&text)?;
    ctx.emit(&list, || list.sentences.iter().map(|s| format!("{s}\n")).collect());
    Ok(())
}

fn validate(ctx: &Ctx, input: &Path) -> Result<(), CliError> {
    let ds = load_dataset(input)?;
    let sentence_counts: Vec<usize> = match &ds.grids {
        Grids::Probe(g) => g.iter().map(ProbeGrid::num_sentences).collect(),
        Grids::Embedding(g) => g.iter().map(EmbeddingGrid::num_sentences).collect(),
    };
    let min_m = sentence_counts.iter().copied().min().unwrap_or(0);
    let max_m = sentence_counts.iter().copied().max().unwrap_or(0);
    let m = &ds.manifest;
    let report = json!({
        "valid": true,
        "manifest": m,
        "min_sentences": min_m,
        "max_sentences": max_m,
    });
    ctx.emit(&report, || {
        format!(
            "ok: {} {:?} samples, {} layers, {} classes, {}..={} sentences\n",
            m.samples, m.kind, m.num_layers, m.num_classes, min_m, max_m
        )
    });
    Ok(())
}

fn apply(ctx: &Ctx, emb: &Path, adapters_path: &Path, out: &Path) -> Result<(), CliError> {
    let (manifest, grids) = load_embedding(emb)?;
    let adapters = load_adapters(adapters_path)?;
    let probes = apply_adapters_all(&grids, &adapters)?;
    let provenance = format!("{} + adapters {}", manifest.provenance, adapters_path.display());
    let grids = Grids::Probe(probes);
    let out_manifest = DatasetManifest::describe(&grids, manifest.num_classes, provenance)?;
    save_dataset(&out_manifest, &grids, out)?;
    info!("wrote {} probe grids to {}", grids.len(), out.display());
    ctx.emit(&out_manifest, || format!("wrote {} probe grids to {}\n", grids.len(), out.display()));
    Ok(())
}

fn train(ctx: &Ctx, a: &TrainArgs) -> Result<(), CliError> {
    let (manifest, grids) = load_embedding(&a.emb)?;
    let defaults = TrainConfig::default();
    let cfg = TrainConfig {
        learning_rate: a.lr.or(ctx.file.learning_rate).unwrap_or(defaults.learning_rate),
        batch_size: a.batch.or(ctx.file.batch_size).unwrap_or(defaults.batch_size),
        epochs: a.epochs.or(ctx.file.epochs).unwrap_or(defaults.epochs),
        seed: ctx.seed.unwrap_or(defaults.seed),
        hidden_dim: a.hidden.or(ctx.file.hidden_dim).unwrap_or(defaults.hidden_dim),
        layer_weights: a.lambda.clone(),
    };
    let mode = TrainMode::from(a.mode);
    if mode == TrainMode::AdapterOnly && cfg.layer_weights.is_some() {
        return Err(CliError::usage("--lambda only applies to --mode joint"));
    }
    let out = train_adapters(&grids, manifest.num_classes, &cfg, mode)?;
    save_adapters(&out.adapters, &a.out)?;
    let acc: Vec<f64> = out.adapters.iter().enumerate().map(|(l, p)| training_accuracy(p, &grids, l, mode)).collect();
    let report = json!({
        "mode": mode,
        "config": cfg,
        "loss_trace": out.loss_trace,
        "train_accuracy": acc,
        "out": a.out.display().to_string(),
    });
    ctx.emit(&report, || {
        let mut s = String::new();
        for (e, l) in out.loss_trace.iter().enumerate() {
            s += &format!("epoch {:>3}  loss {l:.6}\n", e + 1);
        }
        for (l, v) in acc.iter().enumerate() {
            s += &format!("layer {l:>3}  train acc {v:.4}\n");
        }
        s + &format!("wrote {} adapters to {}\n", out.adapters.len(), a.out.display())
    });
    Ok(())
}

fn gradcheck(ctx: &Ctx, a: &GradCheckArgs) -> Result<(), CliError> {
    let (manifest, grids) = load_embedding(&a.emb)?;
    let emb = grids
        .get(a.sample)
        .ok_or_else(|| CliError::usage(format!("--sample {} out of range ({} samples)", a.sample, grids.len())))?;
    let seed = ctx.seed.unwrap_or(0);
    let adapters: Vec<AdapterParams> = match &a.adapters {
        Some(p) => load_adapters(p)?,
        None => {
            let hidden = a.hidden.or(ctx.file.hidden_dim).unwrap_or(DEFAULT_HIDDEN_DIM);
            (0..manifest.num_layers)
                .map(|l| {
                    let mut rng = ChaCha8Rng::seed_from_u64(adapters::derive_seed(seed, l as u64));
                    AdapterParams::init(emb.embed_dim(), hidden, manifest.num_classes, &mut rng)
                })
                .collect()
        }
    };
    if adapters.len() != emb.num_layers() {
        return Err(AdapterError::DimensionMismatch(format!(
            "{} adapters for {} layers",
            adapters.len(),
            emb.num_layers()
        ))
        .into());
    }
    if a.eps.is_nan() || a.eps <= 0.0 {
        return Err(CliError::usage("--eps must be > 0"));
    }
    let weights = default_layer_weights(emb.num_layers());
    let objective = match TrainMode::from(a.mode) {
        TrainMode::AdapterOnly => {
            if a.layer >= emb.num_layers() {
                return Err(CliError::usage(format!("--layer {} out of range", a.layer)));
            }
            Objective::AdapterOnly { layer: a.layer }
        }
        TrainMode::JointFtLoss => Objective::Aggregate { weights: &weights },
    };
    let report = grad_check(objective, &adapters, emb, a.eps, a.coords, seed)?;
    let passed = report.max_rel_error < a.tol;
    let out = json!({
        "max_rel_error": report.max_rel_error,
        "coords": report.coords.len(),
        "tolerance": a.tol,
        "passed": passed,
    });
    ctx.emit(&out, || {
        format!(
            "checked {} coordinates, max relative error {:.3e} (tolerance {:.0e})\n",
            report.coords.len(),
            report.max_rel_error,
            a.tol
        )
    });
    if passed {
        Ok(())
    } else {
        Err(CliError::domain(
            "GradCheckFailed",
            format!("max relative error {:.3e} exceeds {:.0e}", report.max_rel_error, a.tol),
        ))
    }
}

fn synth(ctx: &Ctx, spec_path: &Path, out: &Path) -> Result<(), CliError> {
    let text = std::fs::read_to_string(spec_path).map_err(io_err(spec_path))?;
    let mut spec: SynthSpec = serde_json::from_str(&text)
        .map_err(|e| CliError::domain("SpecError", format!("{}: {e}", spec_path.display())))?;
    if let Some(seed) = ctx.seed {
        spec.seed = seed;
    }
    let grids = Grids::Embedding(generate_dataset(&spec)?);
    let provenance = format!("synth seed={} sigma={}", spec.seed, spec.noise_sigma);
    let manifest = DatasetManifest::describe(&grids, spec.num_classes, provenance)?;
    save_dataset(&manifest, &grids, out)?;
    ctx.emit(&manifest, || format!("wrote {} embedding grids to {}\n", manifest.samples, out.display()));
    Ok(())
}

fn write_per_sample<W: Write>(report: &EvalReport, out: W) -> Result<(), csv::Error> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["label", "prediction", "operations_used", "exited_early", "exit_layer", "exit_sentence"])?;
    let opt = |v: Option<usize>| v.map_or(String::new(), |v| v.to_string());
    for s in &report.per_sample {
        w.write_record([
            s.label.to_string(),
            s.prediction.to_string(),
            s.operations_used.to_string(),
            s.exited_early.to_string(),
            opt(s.exit_layer),
            opt(s.exit_sentence),
        ])?;
    }
    w.flush()?;
    Ok(())
}

fn simulate(ctx: &Ctx, input: &Path, taus: &TauArgs, per_sample: Option<&Path>) -> Result<(), CliError> {
    let cfg = ctx.eeconfig(taus)?;
    let report = evaluate_2d(&load_probe(input)?, &cfg)?;
    match per_sample {
        Some(p) if p == Path::new("-") => {
            if ctx.json {
                return Err(CliError::usage("--per-sample-out - cannot be combined with --json"));
            }
            write_per_sample(&report, io::stdout().lock())?;
            return Ok(());
        }
        Some(p) => write_per_sample(&report, create(p)?)?,
        None => {}
    }
    ctx.emit(&report, || {
        format!(
            "samples:   {}\naccuracy:  {:.4}\nspeed-up:  {:.3} (total ops), {:.3} (mean per sample)\nexits:     {} of {}\nops:       {} of {}\n",
            report.samples,
            report.accuracy,
            report.speedup_total,
            report.speedup_mean,
            report.exits,
            report.samples,
            report.total_ops,
            report.total_full_ops
        )
    });
    Ok(())
}

fn profile(ctx: &Ctx, input: &Path, allowed_loss: Option<f64>) -> Result<(), CliError> {
    let t = ctx.allowed_loss(allowed_loss)?;
    let b = layerwise_baseline(&load_probe(input)?, t)?;
    ctx.emit(&b, || {
        let mut s: String =
            b.profile.acc.iter().enumerate().map(|(l, a)| format!("layer {l:>3}  acc {a:.4}\n")).collect();
        s += &format!(
            "max acc {:.4}, threshold {:.4} (T = {})\nexit layer {}, speed-up {:.2}\n",
            b.profile.max(),
            b.acc_thr,
            t,
            b.exit_layer,
            b.speedup
        );
        s
    });
    Ok(())
}

fn heatmap(ctx: &Ctx, input: &Path, m: usize, out: &Path, blocks_out: Option<&Path>) -> Result<(), CliError> {
    if m == 0 {
        return Err(CliError::usage("--m must be >= 1"));
    }
    let data = load_probe(input)?;
    let cells = cell_accuracy_heatmap(&data, m)?;
    write_cell_heatmap_csv(&cells, create(out)?)?;
    let blocks = match blocks_out {
        Some(p) => {
            let curve = block_accuracy_curve(&data, m)?;
            write_block_curve_csv(&curve, data[0].num_layers(), create(p)?)?;
            Some(curve)
        }
        None => None,
    };
    let report = json!({ "m": m, "cells": cells, "blocks": blocks });
    ctx.emit(&report, || format!("wrote {}x{} cell accuracies to {}\n", cells.len(), m, out.display()));
    Ok(())
}

fn heatmap_path(prefix: &Path, suffix: &str) -> PathBuf {
    let mut name = prefix.as_os_str().to_owned();
    name.push(suffix);
    PathBuf::from(name)
}

fn tune(ctx: &Ctx, a: &TuneArgs) -> Result<(), CliError> {
    let t = ctx.allowed_loss(a.allowed_loss)?;
    let data = load_probe(&a.input)?;
    let baseline = layerwise_baseline(&data, t)?;
    let acc_thr = baseline.acc_thr;
    let result = if a.refine {
        if a.heatmap_out.is_some() {
            return Err(CliError::usage("--heatmap-out requires a grid search"));
        }
        let budget = a.budget.or(ctx.file.budget).unwrap_or(DEFAULT_BUDGET);
        if budget < 9 {
            return Err(CliError::usage(format!("--budget must be >= 9, got {budget}")));
        }
        refine_search(&data, TuneBounds::default(), acc_thr, budget)?
    } else {
        let grid = match &a.grid {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(io_err(p))?;
                let g: TuneGrid = serde_json::from_str(&text)
                    .map_err(|e| CliError::domain("GridError", format!("{}: {e}", p.display())))?;
                g.validate()?;
                g
            }
            None => TuneGrid::default(),
        };
        grid_search(&data, &grid, acc_thr)?
    };
    if let (Some(prefix), Some(hm)) = (&a.heatmap_out, &result.heatmap) {
        hm.write_accuracy_csv(create(&heatmap_path(prefix, "_accuracy.csv"))?)?;
        hm.write_speedup_csv(create(&heatmap_path(prefix, "_speedup.csv"))?)?;
    }
    let report = json!({
        "layerwise": { "exit_layer": baseline.exit_layer, "speedup": baseline.speedup, "acc_thr": acc_thr },
        "best": {
            "tau_ignore": result.best_cfg.tau_ignore,
            "tau_acc": result.best_cfg.tau_acc,
            "speedup": result.best_speedup,
            "accuracy": result.best_accuracy,
            "feasible": result.feasible,
        },
        "evaluations": result.evaluations,
        "stage_best": result.stage_best,
    });
    ctx.emit(&report, || {
        format!(
            "accuracy threshold {:.4} (T = {t}); layer-wise exit {} speed-up {:.2}\nbest tau_ignore {:.3} tau_acc {:.3}: speed-up {:.3}, accuracy {:.4}{}\n{} evaluations\n",
            acc_thr,
            baseline.exit_layer,
            baseline.speedup,
            result.best_cfg.tau_ignore,
            result.best_cfg.tau_acc,
            result.best_speedup,
            result.best_accuracy,
            if result.feasible { "" } else { " (no configuration met the threshold)" },
            result.evaluations
        )
    });
    Ok(())
}
