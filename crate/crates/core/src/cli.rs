//! The `mvcons` command line.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use crate::analysis::io::{read_embeddings_csv, write_embeddings_csv, write_json, write_tsne_csv};
use crate::analysis::plot::scatter_svg;
use crate::analysis::{metrics_report, raw_pixel_vectors, tsne, EmbeddingSet, TsneParams};
use crate::checkpoint;
use crate::config::{extract_overrides, read_json, ExperimentConfig};
use crate::data::{generate_synthetic, load_image_folder, SynthSpec};
use crate::error::{Error, Result};
use crate::gradcheck;
use crate::nn::{ModelConfig, ModelParams};
use crate::train::{accuracy, adapt_target, embed, train_source, write_log_csv};

pub const THREADS_ENV: &str = "MVCONS_THREADS";

const OVERRIDE_HELP: &str = "\
Config overrides:
  Any field of the JSON config can be set on the command line as
  --<section>.<field> <value> (or --<section>.<field>=<value>), where
  <section> is one of model, train, augment, paths. Values are parsed as JSON,
  e.g. --train.lambda 0.25, --train.adapt_class_mode off, --model.stage_dims [16,32].

Environment:
  MVCONS_THREADS  worker threads (0 or unset = all cores). Results do not depend on it.

Exit status: 0 success, 1 runtime error, 2 configuration or usage error.";

#[derive(Debug, Parser)]
#[command(
    name = "mvcons",
    version,
    about = "Source-free domain adaptation with multiview latent consistency",
    after_help = OVERRIDE_HELP
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Render a seeded two-domain synthetic dataset (source/ and target/).
    GenData(GenDataArgs),
    /// Train the classifier on a labeled source split.
    TrainSource(TrainArgs),
    /// Adapt a source checkpoint to an unlabeled target split. Reads no source data.
    Adapt(AdaptArgs),
    /// Report top-1 accuracy of a checkpoint on a labeled split.
    Eval(EvalArgs),
    /// Write latent (or raw-pixel) embeddings, optionally with a t-SNE projection.
    Embed(EmbedArgs),
    /// Compute silhouette, Davies-Bouldin and Calinski-Harabasz scores.
    Metrics(MetricsArgs),
    /// Draw a 2-D embedding CSV as an SVG scatter plot.
    Plot(PlotArgs),
    /// Run the finite-difference gradient suite.
    Gradcheck(GradcheckArgs),
}

#[derive(Debug, Args, Serialize)]
struct GenDataArgs {
    /// Number of classes [default: 4]
    #[arg(long)]
    classes: Option<usize>,
    /// Images per class and domain [default: 25]
    #[arg(long)]
    per_class: Option<usize>,
    /// Generator seed [default: 0]
    #[arg(long)]
    seed: Option<u64>,
    /// Image side in pixels [default: 32]
    #[arg(long)]
    image_size: Option<usize>,
    /// JSON generator spec (including `domain_shift`); flags above override it
    #[arg(long)]
    spec: Option<PathBuf>,
    /// Output directory
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
struct ConfigArgs {
    /// JSON experiment config (model, train, augment, paths sections)
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
struct TrainArgs {
    /// Labeled split directory (`<domain>/<class>/*.png`) [default: paths.data]
    #[arg(long)]
    data: Option<PathBuf>,
    /// Checkpoint to write [default: paths.checkpoint]
    #[arg(long)]
    out: Option<PathBuf>,
    /// Per-epoch log CSV [default: paths.log, else <out>.log.csv]
    #[arg(long)]
    log: Option<PathBuf>,
    #[command(flatten)]
    #[serde(flatten)]
    config: ConfigArgs,
}

#[derive(Debug, Args, Serialize)]
struct AdaptArgs {
    /// Source-trained checkpoint [default: paths.checkpoint]
    #[arg(long)]
    ckpt: Option<PathBuf>,
    /// Target split directory; labels, if present, are ignored [default: paths.data]
    #[arg(long)]
    data: Option<PathBuf>,
    /// Adapted checkpoint to write [default: paths.output]
    #[arg(long)]
    out: Option<PathBuf>,
    /// Per-epoch log CSV [default: paths.log, else <out>.log.csv]
    #[arg(long)]
    log: Option<PathBuf>,
    #[command(flatten)]
    #[serde(flatten)]
    config: ConfigArgs,
}

#[derive(Debug, Args, Serialize)]
struct EvalArgs {
    /// Checkpoint to evaluate
    #[arg(long)]
    ckpt: PathBuf,
    /// Labeled split directory
    #[arg(long)]
    data: PathBuf,
    /// Accuracy JSON to write (also printed to stdout)
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
struct EmbedArgs {
    /// Checkpoint whose latent space to use (not needed with --raw)
    #[arg(long)]
    ckpt: Option<PathBuf>,
    /// Split directory
    #[arg(long)]
    data: PathBuf,
    /// Embeddings CSV to write
    #[arg(long)]
    out: PathBuf,
    /// Also write a 2-D t-SNE CSV here
    #[arg(long)]
    tsne: Option<PathBuf>,
    /// Embed flattened raw pixels instead of model latents
    #[arg(long)]
    raw: bool,
    /// Image side used to load the split [default: from checkpoint, else 32]
    #[arg(long)]
    image_size: Option<usize>,
    /// t-SNE perplexity [default: 30 clamped to (N-1)/3]
    #[arg(long)]
    perplexity: Option<f64>,
    /// t-SNE iterations
    #[arg(long, default_value_t = 1000)]
    tsne_iters: usize,
    /// t-SNE seed
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Debug, Args, Serialize)]
struct MetricsArgs {
    /// Embeddings CSV (labels required)
    #[arg(long)]
    emb: PathBuf,
    /// Metrics JSON to write (also printed to stdout)
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
struct PlotArgs {
    /// 2-D CSV from `embed --tsne` (or any embeddings CSV; first two columns are plotted)
    #[arg(long)]
    input: PathBuf,
    /// SVG file to write
    #[arg(long)]
    out: PathBuf,
    /// Plot title [default: input file name]
    #[arg(long)]
    title: Option<String>,
}

#[derive(Debug, Args, Serialize)]
struct GradcheckArgs {
    /// Seed for the random test inputs
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// JSON report to write
    #[arg(long)]
    out: Option<PathBuf>,
}

/// Everything needed to replay a run.
#[derive(Serialize)]
struct RunRecord<'a, A: Serialize> {
    command: &'a str,
    version: &'a str,
    args: &'a A,
    #[serde(skip_serializing_if = "Option::is_none")]
    config: Option<&'a ExperimentConfig>,
    #[serde(skip_serializing_if = "Option::is_none")]
    synth: Option<&'a SynthSpec>,
    #[serde(skip_serializing_if = "Option::is_none")]
    model: Option<&'a ModelConfig>,
}

fn sidecar(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn write_run<A: Serialize>(
    path: &Path,
    command: &str,
    args: &A,
    config: Option<&ExperimentConfig>,
    synth: Option<&SynthSpec>,
    model: Option<&ModelConfig>,
) -> Result<()> {
    let record = RunRecord {
        command,
        version: env!("CARGO_PKG_VERSION"),
        args,
        config,
        synth,
        model,
    };
    write_json(path, &record)
}

fn required(flag: Option<&PathBuf>, fallback: Option<&PathBuf>, name: &str) -> Result<PathBuf> {
    flag.or(fallback)
        .cloned()
        .ok_or_else(|| Error::Config(format!("missing --{name} (or its paths.* config entry)")))
}

fn resolve_config(args: &ConfigArgs, overrides: &[(String, String)]) -> Result<ExperimentConfig> {
    let cfg = ExperimentConfig::load(args.config.as_deref())?.with_overrides(overrides)?;
    cfg.validate()?;
    Ok(cfg)
}

fn configure_threads() -> Result<()> {
    let threads = match std::env::var(THREADS_ENV) {
        Ok(v) if !v.trim().is_empty() => v
            .trim()
            .parse::<usize>()
            .map_err(|_| Error::Config(format!("{THREADS_ENV}=`{v}` is not a thread count")))?,
        _ => 0,
    };
    // a pool built earlier in this process (e.g. by a previous call) stays in place
    let _ = rayon::ThreadPoolBuilder::new().num_threads(threads).build_global();
    Ok(())
}

fn gen_data(a: &GenDataArgs) -> Result<()> {
    let mut spec = match &a.spec {
        Some(p) => read_json::<SynthSpec>(p)?,
        None => SynthSpec::default(),
    };
    spec.num_classes = a.classes.unwrap_or(spec.num_classes);
    spec.per_class = a.per_class.unwrap_or(spec.per_class);
    spec.seed = a.seed.unwrap_or(spec.seed);
    spec.image_size = a.image_size.unwrap_or(spec.image_size);
    spec.validate()?;
    let (source, target) = generate_synthetic(&spec, &a.out)?;
    write_run(&a.out.join("run.json"), "gen-data", a, None, Some(&spec), None)?;
    println!(
        "wrote {} source and {} target images to {}",
        source.len(),
        target.len(),
        a.out.display()
    );
    Ok(())
}

fn train_source_cmd(a: &TrainArgs, overrides: &[(String, String)]) -> Result<()> {
    let cfg = resolve_config(&a.config, overrides)?;
    let data = required(a.data.as_ref(), cfg.paths.data.as_ref(), "data")?;
    let out = required(a.out.as_ref(), cfg.paths.checkpoint.as_ref(), "out")?;
    let log_path = a.log.clone().or(cfg.paths.log.clone()).unwrap_or_else(|| sidecar(&out, ".log.csv"));

    let split = load_image_folder(&data, cfg.model.image_size)?;
    let mut model_cfg = cfg.model.clone();
    if model_cfg.num_classes == 0 {
        model_cfg.num_classes = split.num_classes();
    }
    let mut model = ModelParams::<f32>::init(model_cfg.clone(), cfg.train.seed)?;
    let log = train_source(&mut model, &split, &cfg.train, &cfg.augment)?;
    checkpoint::save(&model, &out)?;
    write_log_csv(&log_path, &log)?;
    write_run(&sidecar(&out, ".run.json"), "train-source", a, Some(&cfg), None, Some(&model_cfg))?;
    println!("wrote {} and {}", out.display(), log_path.display());
    Ok(())
}

fn adapt_cmd(a: &AdaptArgs, overrides: &[(String, String)]) -> Result<()> {
    let cfg = resolve_config(&a.config, overrides)?;
    let ckpt = required(a.ckpt.as_ref(), cfg.paths.checkpoint.as_ref(), "ckpt")?;
    let data = required(a.data.as_ref(), cfg.paths.data.as_ref(), "data")?;
    let out = required(a.out.as_ref(), cfg.paths.output.as_ref(), "out")?;
    let log_path = a.log.clone().or(cfg.paths.log.clone()).unwrap_or_else(|| sidecar(&out, ".log.csv"));

    let mut model = checkpoint::load(&ckpt)?;
    let split = load_image_folder(&data, model.config.image_size)?.without_labels();
    let log = adapt_target(&mut model, &split, &cfg.train, &cfg.augment)?;
    checkpoint::save(&model, &out)?;
    write_log_csv(&log_path, &log)?;
    write_run(&sidecar(&out, ".run.json"), "adapt", a, Some(&cfg), None, Some(&model.config))?;
    println!("wrote {} and {}", out.display(), log_path.display());
    Ok(())
}

#[derive(Serialize)]
struct AccuracyReport {
    accuracy: f64,
    n_samples: usize,
    domain: String,
}

fn emit_json<T: Serialize>(value: &T, out: Option<&Path>) -> Result<()> {
    println!(
        "{}",
        serde_json::to_string_pretty(value).map_err(|e| Error::Runtime(e.to_string()))?
    );
    if let Some(p) = out {
        write_json(p, value)?;
    }
    Ok(())
}

fn eval_cmd(a: &EvalArgs) -> Result<()> {
    let model = checkpoint::load(&a.ckpt)?;
    let split = load_image_folder(&a.data, model.config.image_size)?;
    let report = AccuracyReport {
        accuracy: accuracy(&model, &split)?,
        n_samples: split.len(),
        domain: split.domain.clone(),
    };
    emit_json(&report, a.out.as_deref())?;
    if let Some(p) = &a.out {
        write_run(&sidecar(p, ".run.json"), "eval", a, None, None, Some(&model.config))?;
    }
    Ok(())
}

fn embed_cmd(a: &EmbedArgs) -> Result<()> {
    let model = match (&a.ckpt, a.raw) {
        (Some(p), _) => Some(checkpoint::load(p)?),
        (None, true) => None,
        (None, false) => return Err(Error::Config("embed needs --ckpt unless --raw is given".into())),
    };
    let size = a
        .image_size
        .or(model.as_ref().map(|m| m.config.image_size))
        .unwrap_or(ModelConfig::default().image_size);
    let split = load_image_folder(&a.data, size)?;
    let vectors = match (&model, a.raw) {
        (_, true) => raw_pixel_vectors(&split),
        (Some(m), false) => embed(m, &split)?,
        (None, false) => unreachable!("checked above"),
    };
    let emb = EmbeddingSet::for_split(&split, vectors)?;
    write_embeddings_csv(&a.out, &emb)?;
    if let Some(t) = &a.tsne {
        let params = TsneParams {
            perplexity: a.perplexity,
            iterations: a.tsne_iters,
            seed: a.seed,
            ..Default::default()
        };
        let result = tsne(&emb.vectors, &params)?;
        write_tsne_csv(t, &emb, &result)?;
        println!("t-SNE KL: {} -> {}", result.kl_initial, result.kl_final);
    }
    write_run(&sidecar(&a.out, ".run.json"), "embed", a, None, None, model.as_ref().map(|m| &m.config))?;
    println!("wrote {} embeddings to {}", emb.len(), a.out.display());
    Ok(())
}

fn metrics_cmd(a: &MetricsArgs) -> Result<()> {
    let emb = read_embeddings_csv(&a.emb)?;
    let report = metrics_report(&emb)?;
    emit_json(&report, a.out.as_deref())?;
    if let Some(p) = &a.out {
        write_run(&sidecar(p, ".run.json"), "metrics", a, None, None, None)?;
    }
    Ok(())
}

fn plot_cmd(a: &PlotArgs) -> Result<()> {
    let emb = read_embeddings_csv(&a.input)?;
    let title = a
        .title
        .clone()
        .unwrap_or_else(|| a.input.file_name().map_or(String::new(), |f| f.to_string_lossy().into_owned()));
    let svg = scatter_svg(&emb, &title)?;
    std::fs::write(&a.out, svg).map_err(|e| Error::io(&a.out, e))?;
    write_run(&sidecar(&a.out, ".run.json"), "plot", a, None, None, None)?;
    println!("wrote {} points to {}", emb.len(), a.out.display());
    Ok(())
}

#[derive(Serialize)]
struct GradcheckRow {
    name: String,
    max_rel_err: f64,
    elements: usize,
    passed: bool,
}

fn gradcheck_cmd(a: &GradcheckArgs) -> Result<bool> {
    let reports = gradcheck::run_suite(a.seed)?;
    println!("{:<22} {:>12} {:>9}  result", "op", "max rel err", "elements");
    for r in &reports {
        println!(
            "{:<22} {:>12.3e} {:>9}  {}",
            r.name,
            r.max_rel_err,
            r.elements,
            if r.passed() { "pass" } else { "FAIL" }
        );
    }
    let ok = reports.iter().all(|r| r.passed());
    println!("tolerance {:e}: {}", gradcheck::TOLERANCE, if ok { "all passed" } else { "FAILED" });
    if let Some(p) = &a.out {
        let rows: Vec<GradcheckRow> = reports
            .iter()
            .map(|r| GradcheckRow {
                name: r.name.clone(),
                max_rel_err: r.max_rel_err,
                elements: r.elements,
                passed: r.passed(),
            })
            .collect();
        write_json(p, &rows)?;
        write_run(&sidecar(p, ".run.json"), "gradcheck", a, None, None, None)?;
    }
    Ok(ok)
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::GenData(_) => "gen-data",
            Command::TrainSource(_) => "train-source",
            Command::Adapt(_) => "adapt",
            Command::Eval(_) => "eval",
            Command::Embed(_) => "embed",
            Command::Metrics(_) => "metrics",
            Command::Plot(_) => "plot",
            Command::Gradcheck(_) => "gradcheck",
        }
    }
}

fn dispatch(cli: Cli, overrides: &[(String, String)]) -> Result<i32> {
    configure_threads()?;
    if !matches!(cli.command, Command::TrainSource(_) | Command::Adapt(_)) {
        if let Some((k, _)) = overrides.first() {
            return Err(Error::Config(format!(
                "`{}` takes no config overrides (got --{k})",
                cli.command.name()
            )));
        }
    }
    match &cli.command {
        Command::GenData(a) => gen_data(a)?,
        Command::TrainSource(a) => train_source_cmd(a, overrides)?,
        Command::Adapt(a) => adapt_cmd(a, overrides)?,
        Command::Eval(a) => eval_cmd(a)?,
        Command::Embed(a) => embed_cmd(a)?,
        Command::Metrics(a) => metrics_cmd(a)?,
        Command::Plot(a) => plot_cmd(a)?,
        Command::Gradcheck(a) => return Ok(if gradcheck_cmd(a)? { 0 } else { 1 }),
    }
    Ok(0)
}

/// Runs the command line `args` (including the program name) and returns the
/// process exit code.
pub fn run<I, S>(args: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<OsString>,
{
    let args: Vec<String> = args
        .into_iter()
        .map(|a| a.into().to_string_lossy().into_owned())
        .collect();
    let (args, overrides) = match extract_overrides(args) {
        Ok(v) => v,
        Err(e) => {
            eprintln!("error: {e}");
            return 2;
        }
    };
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match dispatch(cli, &overrides) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_config() {
                2
            } else {
                1
            }
        }
    }
}
