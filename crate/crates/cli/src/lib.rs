//! The `ressqu` command line.
//!
//! Exit codes: `0` success, `1` validation or usage error, `2` runtime
//! failure (I/O, numerics, a failed gradient check).

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use ressqu::archs::{self, ArchConfig, ComparisonReport, ModelMetrics, ShapeReport};
use ressqu::datasets::{self, Dataset};
use ressqu::files;
use ressqu::gradcheck::{self, GradcheckOptions};
use ressqu::graph::{param_count, Graph, Layer, ParamGroup, ParamStore};
use ressqu::supervision::{self, ProbeOptions};
use ressqu::trainer::{self, MetricsRow, Observer, TrainConfig};
use ressqu::{Precision, Real};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Core(#[from] ressqu::Error),
    #[error("{0}")]
    Failed(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            CliError::Core(ressqu::Error::Config(_) | ressqu::Error::Domain(_)) => EXIT_USAGE,
            CliError::Core(_) | CliError::Failed(_) => EXIT_RUNTIME,
        }
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

#[derive(Debug, Parser)]
#[command(name = "ressqu", version, about = "Compressed residual squeeze network toolkit")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Per-layer shapes, fire rows and parameter totals of a network.
    Summarize(SummarizeArgs),
    /// Percent size and duration reductions between two models.
    Compare(CompareArgs),
    /// Train on an RSQ1 dataset.
    Train(TrainArgs),
    /// Finite-difference gradient checks in double precision.
    Gradcheck(GradcheckArgs),
    /// Gradient-magnitude probe on a plain deep conv stack.
    Probe(ProbeArgs),
    /// Write a synthetic RSQ1 dataset.
    GenData(GenDataArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Text,
    Json,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Preset {
    Full,
    Desk,
}

#[derive(Debug, Args)]
pub struct SummarizeArgs {
    /// Architecture JSON file, or `default` for the published configuration.
    #[arg(long, default_value = "default")]
    pub arch: String,
    #[arg(long)]
    pub classes: Option<usize>,
    #[arg(long)]
    pub input_size: Option<usize>,
    /// Summarize the plain-convolution baseline instead.
    #[arg(long)]
    pub baseline: bool,
    #[arg(long, value_enum, default_value_t = Format::Text)]
    pub format: Format,
    /// Also write the JSON summary here.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct CompareArgs {
    /// Baseline summary JSON (from `summarize --format json`).
    #[arg(long, conflicts_with = "left_size")]
    pub left: Option<PathBuf>,
    #[arg(long)]
    pub left_size: Option<f64>,
    #[arg(long)]
    pub left_hours: Option<f64>,
    /// Candidate summary JSON.
    #[arg(long, conflicts_with = "right_size")]
    pub right: Option<PathBuf>,
    #[arg(long)]
    pub right_size: Option<f64>,
    #[arg(long)]
    pub right_hours: Option<f64>,
    #[arg(long, value_enum, default_value_t = Format::Text)]
    pub format: Format,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub dataset: PathBuf,
    /// Evaluation set; the training set is used when absent.
    #[arg(long)]
    pub val_dataset: Option<PathBuf>,
    /// Baseline for both the architecture and the training recipe.
    #[arg(long, value_enum, default_value_t = Preset::Desk)]
    pub preset: Preset,
    /// Architecture JSON; replaces the preset architecture.
    #[arg(long)]
    pub arch: Option<PathBuf>,
    /// Training-config JSON; replaces the preset recipe. Flags still win.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub alpha0: Option<f64>,
    #[arg(long)]
    pub input_scale: Option<f64>,
    #[arg(long, value_enum)]
    pub precision: Option<PrecisionArg>,
    /// Record wall-clock step times in the metrics (breaks byte-for-byte
    /// reproducibility of the CSV).
    #[arg(long)]
    pub record_time: bool,
    #[arg(long, env = "RSQ_SEED", default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out_dir: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum PrecisionArg {
    Standard,
    High,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum CheckScale {
    Tiny,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    #[arg(long, value_enum, default_value_t = CheckScale::Tiny)]
    pub scale: CheckScale,
    #[arg(long, env = "RSQ_SEED", default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 1e-3)]
    pub tolerance: f64,
    #[arg(long, hide = true)]
    pub inject_fault: bool,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ProbeArgs {
    #[arg(long, default_value_t = 12)]
    pub depth: usize,
    #[arg(long, default_value_t = 8)]
    pub width: usize,
    #[arg(long, default_value_t = 5, value_parser = clap::value_parser!(u16).range(2..))]
    pub classes: u16,
    #[arg(long, default_value_t = 20)]
    pub per_class: usize,
    /// Sample size as `CxHxW`.
    #[arg(long, default_value = "3x32x32", value_parser = parse_dims)]
    pub size: [usize; 3],
    #[arg(long, default_value_t = 0.1)]
    pub noise: f64,
    #[arg(long, default_value_t = 10, value_parser = clap::value_parser!(u16).range(10..=50))]
    pub epochs: u16,
    #[arg(long, default_value_t = 1e-7)]
    pub threshold: f64,
    #[arg(long, default_value_t = 16)]
    pub batch: usize,
    /// SGD learning rate between batches; 0 probes the initial weights only.
    #[arg(long, default_value_t = 0.01)]
    pub lr: f64,
    #[arg(long, default_value_t = 0.9)]
    pub momentum: f64,
    #[arg(long, env = "RSQ_SEED", default_value_t = 0)]
    pub seed: u64,
    /// Output directory for the manifest and the JSON/CSV reports.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    #[arg(long, value_parser = clap::value_parser!(u16).range(2..))]
    pub classes: u16,
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    pub per_class: u64,
    /// Sample size as `CxHxW`.
    #[arg(long, default_value = "3x64x64", value_parser = parse_dims)]
    pub size: [usize; 3],
    #[arg(long, default_value_t = 0.1)]
    pub noise: f64,
    #[arg(long, env = "RSQ_SEED", default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

fn parse_dims(s: &str) -> Result<[usize; 3], String> {
    let parts: Vec<&str> = s.split(['x', 'X']).collect();
    let err = || format!("expected CxHxW with positive extents, got '{s}'");
    if parts.len() != 3 {
        return Err(err());
    }
    let mut out = [0; 3];
    for (o, p) in out.iter_mut().zip(parts) {
        *o = p.trim().parse().map_err(|_| err())?;
        if *o == 0 {
            return Err(err());
        }
    }
    Ok(out)
}

/// Written before any long-running work starts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config: serde_json::Value,
    pub seed: u64,
    pub artifacts: Vec<String>,
    pub tool_version: String,
}

impl RunManifest {
    fn new(command: &str, config: serde_json::Value, seed: u64, artifacts: Vec<String>) -> Self {
        RunManifest {
            command: command.into(),
            config,
            seed,
            artifacts,
            tool_version: env!("CARGO_PKG_VERSION").into(),
        }
    }

    fn write(&self, dir: &Path) -> CliResult<()> {
        files::create_dir_all(dir)?;
        write_json(&dir.join("manifest.json"), self)
    }
}

/// JSON document emitted by `summarize`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub network: String,
    pub config: ArchConfig,
    pub main_weight_sets: Vec<String>,
    pub branch_weight_sets: Vec<String>,
    pub aux_tap: Option<String>,
    pub residual_additions: Vec<ResidualAddition>,
    pub size_bytes: u64,
    pub report: ShapeReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResidualAddition {
    pub node: String,
    pub inputs: [String; 2],
    pub shapes: [[usize; 3]; 2],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub dataset: String,
    pub samples: usize,
    pub top1: f64,
    pub top5: f64,
    pub final_step: Option<MetricsRow>,
}

fn write_json<S: Serialize>(path: &Path, value: &S) -> CliResult<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(ressqu::Error::from)?;
    text.push('\n');
    files::write_atomic(path, text.as_bytes())?;
    Ok(())
}

fn to_value<S: Serialize>(value: &S) -> CliResult<serde_json::Value> {
    Ok(serde_json::to_value(value).map_err(ressqu::Error::from)?)
}

/// Parses `args` (including the program name) and runs the command,
/// returning the process exit code.
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
            let _ = if e.use_stderr() {
                write!(err, "{text}")
            } else {
                write!(out, "{text}")
            };
            return code;
        }
    };
    match dispatch(cli.command, out) {
        Ok(code) => code,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            e.exit_code()
        }
    }
}

fn dispatch(cmd: Command, out: &mut dyn Write) -> CliResult<i32> {
    match cmd {
        Command::Summarize(a) => summarize(a, out),
        Command::Compare(a) => compare(a, out),
        Command::Train(a) => train(a, out),
        Command::Gradcheck(a) => run_gradcheck(a, out),
        Command::Probe(a) => probe(a, out),
        Command::GenData(a) => gen_data(a, out),
    }
}

fn io_out(e: std::io::Error) -> CliError {
    CliError::Failed(format!("writing output: {e}"))
}

pub fn build_summary(graph: &Graph, cfg: &ArchConfig, network: &str) -> CliResult<Summary> {
    let report = archs::shape_report(graph)?;
    let counts = param_count(graph);
    let residual_additions = (0..graph.len())
        .filter(|&i| graph.nodes()[i].layer == Layer::Add)
        .map(|i| {
            let e = graph.edges(i);
            let s = |k: usize| {
                let s = graph.shape_at(e[k]);
                [s.c, s.h, s.w]
            };
            ResidualAddition {
                node: graph.nodes()[i].id.clone(),
                inputs: [graph.nodes()[e[0]].id.clone(), graph.nodes()[e[1]].id.clone()],
                shapes: [s(0), s(1)],
            }
        })
        .collect();
    let aux_tap = graph
        .node("aux/pool")
        .and_then(|n| n.inputs.first().cloned());
    Ok(Summary {
        network: network.into(),
        config: cfg.clone(),
        main_weight_sets: counts.weight_sets(ParamGroup::Main),
        branch_weight_sets: counts.weight_sets(ParamGroup::Branch),
        aux_tap,
        residual_additions,
        size_bytes: report.size_bytes,
        report,
    })
}

fn summarize(a: SummarizeArgs, out: &mut dyn Write) -> CliResult<i32> {
    let mut cfg = if a.arch == "default" {
        ArchConfig::reference()
    } else {
        ArchConfig::from_json(&files::read_string(Path::new(&a.arch))?)?
    };
    if let Some(k) = a.classes {
        cfg.classes = k;
    }
    if let Some(s) = a.input_size {
        cfg.input_size = s;
    }
    cfg.validate()?;
    let (graph, name) = if a.baseline {
        (archs::build_plain_baseline(&cfg)?, "plain_baseline")
    } else {
        (archs::build_res_squ_cnds(&cfg)?, "res_squ_cnds")
    };
    let summary = build_summary(&graph, &cfg, name)?;
    if let Some(path) = &a.out {
        write_json(path, &summary)?;
    }
    match a.format {
        Format::Json => {
            let text = serde_json::to_string_pretty(&summary).map_err(ressqu::Error::from)?;
            writeln!(out, "{text}").map_err(io_out)?;
        }
        Format::Text => {
            write!(out, "{}", summary.report.render_text()).map_err(io_out)?;
            writeln!(
                out,
                "weight sets: {} main, {} branch; aux tap: {}",
                summary.main_weight_sets.len(),
                summary.branch_weight_sets.len(),
                summary.aux_tap.as_deref().unwrap_or("none")
            )
            .map_err(io_out)?;
        }
    }
    Ok(EXIT_OK)
}

fn side(
    name: &str,
    path: &Option<PathBuf>,
    size: Option<f64>,
    hours: Option<f64>,
) -> CliResult<ModelMetrics> {
    match (path, size) {
        (Some(p), _) => {
            let s: Summary = serde_json::from_str(&files::read_string(p)?)
                .map_err(|e| CliError::Usage(format!("{}: not a summary: {e}", p.display())))?;
            Ok(ModelMetrics {
                size: s.size_bytes as f64,
                hours,
            })
        }
        (None, Some(size)) => Ok(ModelMetrics { size, hours }),
        (None, None) => Err(CliError::Usage(format!(
            "the {name} side needs --{name} <summary.json> or --{name}-size"
        ))),
    }
}

fn compare(a: CompareArgs, out: &mut dyn Write) -> CliResult<i32> {
    let left = side("left", &a.left, a.left_size, a.left_hours)?;
    let right = side("right", &a.right, a.right_size, a.right_hours)?;
    let report: ComparisonReport = archs::compare_models(left, right)
        .map_err(|e| CliError::Usage(e.to_string()))?;
    if let Some(path) = &a.out {
        write_json(path, &report)?;
    }
    match a.format {
        Format::Text => write!(out, "{}", report.render_text()).map_err(io_out)?,
        Format::Json => {
            let text = serde_json::to_string_pretty(&report).map_err(ressqu::Error::from)?;
            writeln!(out, "{text}").map_err(io_out)?;
        }
    }
    Ok(EXIT_OK)
}

struct Checkpoints<'a> {
    dir: PathBuf,
    graph: &'a Graph,
}

impl<T: Real> Observer<T> for Checkpoints<'_> {
    fn on_start(&mut self, params: &ParamStore<T>) -> ressqu::Result<()> {
        trainer::write_checkpoint(&self.dir.join("epoch_000"), self.graph, params)
    }

    fn on_epoch_end(&mut self, epoch: usize, params: &ParamStore<T>) -> ressqu::Result<()> {
        trainer::write_checkpoint(&self.dir.join(format!("epoch_{epoch:03}")), self.graph, params)
    }
}

/// Architecture and recipe for `train`, before flag overrides.
pub fn resolve_train(a: &TrainArgs, data: &Dataset) -> CliResult<(ArchConfig, TrainConfig)> {
    let [c, h, w] = data.dims();
    let mut arch = match (&a.arch, a.preset) {
        (Some(p), _) => ArchConfig::from_json(&files::read_string(p)?)?,
        (None, Preset::Full) => ArchConfig {
            classes: data.classes,
            input_channels: c,
            ..ArchConfig::reference()
        },
        (None, Preset::Desk) => ArchConfig {
            input_channels: c,
            ..ArchConfig::desk(data.classes, h)
        },
    };
    let mut cfg = match (&a.config, a.preset) {
        (Some(p), _) => serde_json::from_str(&files::read_string(p)?)
            .map_err(|e| CliError::Usage(format!("{}: {e}", p.display())))?,
        (None, Preset::Full) => TrainConfig {
            crop: (h == 256 && w == 256).then(Default::default),
            ..Default::default()
        },
        (None, Preset::Desk) => TrainConfig::desk(a.seed),
    };
    if a.arch.is_none() && a.preset == Preset::Full && h != 256 {
        arch.input_size = h;
    }
    if let Some(v) = a.epochs {
        cfg.epochs = v;
    }
    if let Some(v) = a.batch {
        cfg.batch_train = v;
        cfg.batch_val = v;
    }
    if let Some(v) = a.lr {
        cfg.base_lr = v;
    }
    if let Some(v) = a.alpha0 {
        cfg.alpha0 = v;
    }
    if let Some(v) = a.input_scale {
        cfg.input_scale = v;
    }
    if let Some(p) = a.precision {
        cfg.precision = match p {
            PrecisionArg::Standard => Precision::Standard,
            PrecisionArg::High => Precision::High,
        };
    }
    cfg.record_time |= a.record_time;
    cfg.seed = a.seed;
    arch.validate()?;
    cfg.validate()?;
    if arch.classes != data.classes {
        return Err(CliError::Usage(format!(
            "architecture has {} classes but the dataset has {}",
            arch.classes, data.classes
        )));
    }
    if arch.input_channels != c || w != h {
        return Err(CliError::Usage(format!(
            "dataset samples are {c}x{h}x{w}; the network expects {} channels and square images",
            arch.input_channels
        )));
    }
    Ok((arch, cfg))
}

fn train(a: TrainArgs, out: &mut dyn Write) -> CliResult<i32> {
    let data = datasets::read_dataset(&a.dataset)?;
    let val = a.val_dataset.as_deref().map(datasets::read_dataset).transpose()?;
    let (arch, cfg) = resolve_train(&a, &data)?;
    let graph = archs::build_res_squ_cnds(&arch)?;
    if let Some(v) = &val {
        if v.classes != data.classes || v.dims() != data.dims() {
            return Err(CliError::Usage("validation set does not match the training set".into()));
        }
    }

    let manifest = RunManifest::new(
        "train",
        serde_json::json!({
            "dataset": a.dataset.display().to_string(),
            "val_dataset": a.val_dataset.as_ref().map(|p| p.display().to_string()),
            "arch": to_value(&arch)?,
            "train": to_value(&cfg)?,
        }),
        cfg.seed,
        vec![
            "manifest.json".into(),
            "metrics.csv".into(),
            "checkpoints/epoch_NNN".into(),
            "eval.json".into(),
        ],
    );
    manifest.write(&a.out_dir)?;
    let evaluation = match cfg.precision {
        Precision::Standard => train_as::<f32>(&a, &graph, &cfg, &data, val.as_ref())?,
        Precision::High => train_as::<f64>(&a, &graph, &cfg, &data, val.as_ref())?,
    };
    writeln!(
        out,
        "top1 {:.4} top5 {:.4} on {} samples",
        evaluation.top1, evaluation.top5, evaluation.samples
    )
    .map_err(io_out)?;
    Ok(EXIT_OK)
}

fn train_as<T: Real>(
    a: &TrainArgs,
    graph: &Graph,
    cfg: &TrainConfig,
    data: &Dataset,
    val: Option<&Dataset>,
) -> CliResult<Evaluation> {
    let mut obs = Checkpoints {
        dir: a.out_dir.join("checkpoints"),
        graph,
    };
    let outcome = trainer::train::<T>(graph, cfg, data, &mut obs)?;
    files::write_atomic(&a.out_dir.join("metrics.csv"), &trainer::metrics_csv(&outcome.rows)?)?;
    let (set, path) = match (val, &a.val_dataset) {
        (Some(v), Some(p)) => (v, p),
        _ => (data, &a.dataset),
    };
    let (top1, top5) = trainer::evaluate(graph, &outcome.params, set, &outcome.preprocess, cfg.batch_val)?;
    let evaluation = Evaluation {
        dataset: path.display().to_string(),
        samples: set.len(),
        top1,
        top5,
        final_step: outcome.rows.last().cloned(),
    };
    write_json(&a.out_dir.join("eval.json"), &evaluation)?;
    Ok(evaluation)
}

fn run_gradcheck(a: GradcheckArgs, out: &mut dyn Write) -> CliResult<i32> {
    let CheckScale::Tiny = a.scale;
    if !(a.tolerance >= 0.0 && a.tolerance.is_finite()) {
        return Err(CliError::Usage(format!("tolerance {} must be finite and non-negative", a.tolerance)));
    }
    let report = gradcheck::run_gradcheck(&GradcheckOptions {
        seed: a.seed,
        tolerance: a.tolerance,
        inject_fault: a.inject_fault,
    })?;
    for r in &report.results {
        writeln!(
            out,
            "{:<24} max rel err {:.3e} (limit {:.0e}) {}",
            r.name,
            r.max_rel_err,
            r.tolerance,
            if r.passed() { "ok" } else { "FAIL" }
        )
        .map_err(io_out)?;
    }
    if let Some(p) = &a.out {
        write_json(p, &report)?;
    }
    let offenders = report.offenders();
    if offenders.is_empty() {
        return Ok(EXIT_OK);
    }
    let names: Vec<&str> = offenders.iter().map(|r| r.name.as_str()).collect();
    Err(CliError::Failed(format!("gradient check failed: {}", names.join(", "))))
}

fn probe(a: ProbeArgs, out: &mut dyn Write) -> CliResult<i32> {
    let classes = a.classes as usize;
    let graph = supervision::build_probe_stack(a.depth, a.width, classes, a.size)?;
    let opts = ProbeOptions {
        epochs: a.epochs as usize,
        threshold: a.threshold,
        batch: a.batch,
        seed: a.seed,
        lr: a.lr,
        momentum: a.momentum,
    };
    RunManifest::new(
        "probe",
        serde_json::json!({
            "depth": a.depth,
            "width": a.width,
            "classes": classes,
            "per_class": a.per_class,
            "size": a.size,
            "noise": a.noise,
            "options": to_value(&opts)?,
        }),
        a.seed,
        vec!["manifest.json".into(), "probe.json".into(), "probe.csv".into()],
    )
    .write(&a.out)?;
    let data = datasets::synth_generate(classes, a.per_class, a.size, a.noise, a.seed)?;
    let report = supervision::gradient_probe(&graph, &data, opts)?;
    write_json(&a.out.join("probe.json"), &report)?;
    files::write_atomic(&a.out.join("probe.csv"), &report.to_csv()?)?;
    for l in &report.layers {
        writeln!(
            out,
            "{:<8} {:.3e}{}",
            l.layer,
            l.mean_abs_grad,
            if l.below_threshold { "  below threshold" } else { "" }
        )
        .map_err(io_out)?;
    }
    writeln!(
        out,
        "shallow mean {:.3e}  deep mean {:.3e}  recommended: {}",
        report.shallow_mean,
        report.deep_mean,
        report.recommended.as_deref().unwrap_or("none")
    )
    .map_err(io_out)?;
    Ok(EXIT_OK)
}

fn gen_data(a: GenDataArgs, out: &mut dyn Write) -> CliResult<i32> {
    let per_class = usize::try_from(a.per_class).map_err(|_| CliError::Usage("per-class too large".into()))?;
    let data = datasets::synth_generate(a.classes as usize, per_class, a.size, a.noise, a.seed)?;
    datasets::write_dataset(&a.out, &data)?;
    let [c, h, w] = a.size;
    writeln!(
        out,
        "{} samples, {} classes, {c}x{h}x{w} -> {}",
        data.len(),
        data.classes,
        a.out.display()
    )
    .map_err(io_out)?;
    Ok(EXIT_OK)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dims_parser() {
        assert_eq!(parse_dims("3x64x64").unwrap(), [3, 64, 64]);
        assert!(parse_dims("3x0x64").is_err());
        assert!(parse_dims("3x64").is_err());
    }

    #[test]
    fn usage_errors_exit_one() {
        let mut o = Vec::new();
        let mut e = Vec::new();
        assert_eq!(run(["ressqu", "bogus"], &mut o, &mut e), EXIT_USAGE);
        assert_eq!(run(["ressqu", "compare", "--right-size", "1"], &mut o, &mut e), EXIT_USAGE);
        assert_eq!(run(["ressqu", "--help"], &mut o, &mut e), EXIT_OK);
    }
}
