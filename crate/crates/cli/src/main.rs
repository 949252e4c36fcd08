use std::collections::BTreeSet;
use std::io::IsTerminal;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;

use chainbox::config::{BackendKind, PipelineConfig};
use chainbox::datagen::QASample;
use chainbox::eval::{evaluate_run, write_report, Metric};
use chainbox::layout::{
    cluster_ocr_tokens, load_layout_file, load_tokens, Dims, KMeansOptions, LayoutSet,
};
use chainbox::orchestrator::InferenceMode;
use chainbox::pipeline::{
    prediction_from_trace, run_annotation, run_enabling_tasks, run_inference, run_qa,
    AnnotatorOutput, Corpus,
};
use chainbox::render::{load_image, render_s1_overlay, render_s2_mask};
use chainbox::store::{read_jsonl, write_jsonl, Dataset, ReviewQueue};
use chainbox::{Error, ErrorClass};

const DEFAULT_CONFIG: &str = "chainbox.toml";

#[derive(Debug, Parser)]
#[command(
    name = "chainbox",
    version,
    about = "Select-then-answer document QA pipeline"
)]
struct Cli {
    /// Pipeline config. Defaults to ./chainbox.toml when present.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Overrides the config worker count.
    #[arg(long, global = true)]
    workers: Option<usize>,
    /// Overrides paths.datasets.
    #[arg(long, global = true)]
    datasets_dir: Option<PathBuf>,
    /// Overrides paths.outputs.
    #[arg(long, global = true)]
    outputs_dir: Option<PathBuf>,
    /// More logging (-v debug, -vv trace).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Build layout files.
    #[command(subcommand)]
    Layout(LayoutCmd),
    /// Render visual prompts.
    #[command(subcommand)]
    Render(RenderCmd),
    /// Answer the questions of a dataset.
    Infer(InferArgs),
    /// Build key-box annotations and enabling tasks.
    #[command(subcommand)]
    Generate(GenerateCmd),
    /// Score predictions against gold.
    Eval(EvalArgs),
    /// Run the review service.
    Serve(ServeArgs),
}

#[derive(Debug, Args)]
struct PageDims {
    /// Image the layout belongs to; its size bounds the boxes.
    #[arg(long, conflicts_with_all = ["width", "height"])]
    image: Option<PathBuf>,
    #[arg(long, requires = "height")]
    width: Option<u32>,
    #[arg(long, requires = "width")]
    height: Option<u32>,
}

impl PageDims {
    fn resolve(&self) -> anyhow::Result<Dims> {
        match (&self.image, self.width, self.height) {
            (Some(path), _, _) => {
                let img = load_image(path)?;
                Ok(Dims {
                    width: img.width(),
                    height: img.height(),
                })
            }
            (None, Some(width), Some(height)) => Ok(Dims { width, height }),
            _ => Err(Error::Parameter("give --image or both --width and --height".into()).into()),
        }
    }
}

#[derive(Debug, Subcommand)]
enum LayoutCmd {
    /// Normalize analyzer output: clip, re-index in reading order.
    Ingest {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        image_id: String,
        #[command(flatten)]
        dims: PageDims,
        #[arg(long)]
        out: PathBuf,
    },
    /// Group OCR tokens into boxes with K-means.
    Cluster {
        #[arg(long)]
        tokens: PathBuf,
        #[arg(long)]
        image_id: String,
        #[command(flatten)]
        dims: PageDims,
        /// Cluster count; defaults to round(tokens / 10) clamped to 1..=30.
        #[arg(long)]
        k: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Debug, Args)]
struct PageArgs {
    #[arg(long)]
    image: PathBuf,
    /// Layout interchange file for the image.
    #[arg(long)]
    layout: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Subcommand)]
enum RenderCmd {
    /// Red boxes with id tags.
    S1(PageArgs),
    /// Blur everything outside the key boxes.
    S2 {
        #[command(flatten)]
        page: PageArgs,
        /// Comma-separated key box ids, e.g. 3,5,6.
        #[arg(long, value_delimiter = ',', required = true)]
        keys: Vec<u32>,
    },
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum ModeArg {
    DocCob,
    Vanilla,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum BackendArg {
    Mock,
    Remote,
}

#[derive(Debug, Args)]
struct InferArgs {
    #[arg(long)]
    dataset: String,
    #[arg(long, value_enum, default_value = "doc-cob")]
    mode: ModeArg,
    #[arg(long, value_enum)]
    backend: Option<BackendArg>,
    /// Scripted behavior file for the mock backend.
    #[arg(long)]
    behavior: Option<PathBuf>,
    /// Output directory; defaults to <outputs>/<dataset>/<mode>.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
enum GenerateCmd {
    /// Ask the annotator model about every image of a dataset.
    Annotate {
        #[arg(long)]
        dataset: String,
        #[arg(long)]
        behavior: Option<PathBuf>,
        /// Defaults to <outputs>/<dataset>/annotations.jsonl.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Check annotator outputs; store passing ones, queue the rest for review.
    Qa {
        #[arg(long)]
        dataset: String,
        /// Defaults to <outputs>/<dataset>/annotations.jsonl.
        #[arg(long)]
        annotations: Option<PathBuf>,
    },
    /// Write box-id and box-query training tasks from stored records.
    EnablingTasks {
        #[arg(long)]
        dataset: String,
        /// Defaults to <outputs>/<dataset>/enabling.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[arg(long)]
    predictions: PathBuf,
    #[arg(long)]
    gold: PathBuf,
    /// anls, keybox-f1, typed-micro-f1 or field-f1.
    #[arg(long)]
    metric: Metric,
    /// Registered dataset whose date order applies.
    #[arg(long)]
    dataset: Option<String>,
    /// Report directory; the summary is printed either way.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct ServeArgs {
    /// Overrides service.addr.
    #[arg(long)]
    addr: Option<String>,
}

fn exit_code(err: &anyhow::Error) -> u8 {
    let Some(e) = err.chain().find_map(|c| c.downcast_ref::<Error>()) else {
        return 1;
    };
    match e.class() {
        ErrorClass::Config => 3,
        ErrorClass::InputFormat => 4,
        ErrorClass::Backend => 5,
        ErrorClass::Validation => 6,
        ErrorClass::Other => 1,
    }
}

/// The error chain, skipping causes already spelled out by their parent.
fn describe(err: &anyhow::Error) -> String {
    let mut out = String::new();
    for cause in err.chain() {
        let msg = cause.to_string();
        if !out.contains(&msg) {
            if !out.is_empty() {
                out.push_str(": ");
            }
            out.push_str(&msg);
        }
    }
    out
}

fn init_logging(verbose: u8) {
    let default = match verbose {
        0 => "info",
        1 => "debug",
        _ => "trace",
    };
    let filter = tracing_subscriber::EnvFilter::try_from_default_env()
        .unwrap_or_else(|_| tracing_subscriber::EnvFilter::new(default));
    tracing_subscriber::fmt()
        .with_env_filter(filter)
        .with_writer(std::io::stderr)
        .with_ansi(std::io::stderr().is_terminal())
        .with_target(false)
        .init();
}

fn load_config(cli: &Cli) -> anyhow::Result<PipelineConfig> {
    let mut cfg = match &cli.config {
        Some(path) => PipelineConfig::load(path)?,
        None if Path::new(DEFAULT_CONFIG).exists() => {
            PipelineConfig::load(Path::new(DEFAULT_CONFIG))?
        }
        None => PipelineConfig::default_at(&std::env::current_dir()?),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(w) = cli.workers {
        cfg.workers = w;
    }
    if let Some(d) = &cli.datasets_dir {
        cfg.paths.datasets = d.clone();
    }
    if let Some(d) = &cli.outputs_dir {
        cfg.paths.outputs = d.clone();
    }
    Ok(cfg)
}

fn print_json(v: serde_json::Value) {
    println!("{}", serde_json::to_string_pretty(&v).expect("json"));
}

fn write_layout(layout: &LayoutSet, out: &Path) -> anyhow::Result<()> {
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    std::fs::write(out, layout.to_interchange())
        .with_context(|| format!("writing {}", out.display()))?;
    print_json(json!({"image_id": layout.image_id, "boxes": layout.len(), "out": out}));
    Ok(())
}

fn write_file(out: &Path, bytes: &[u8]) -> anyhow::Result<()> {
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    std::fs::write(out, bytes).with_context(|| format!("writing {}", out.display()))
}

fn image_id_of(path: &Path) -> anyhow::Result<String> {
    path.file_stem()
        .and_then(|s| s.to_str())
        .map(str::to_owned)
        .ok_or_else(|| anyhow!("cannot take an image id from {}", path.display()))
}

fn cmd_layout(cmd: &LayoutCmd, cfg: &PipelineConfig) -> anyhow::Result<()> {
    match cmd {
        LayoutCmd::Ingest {
            input,
            image_id,
            dims,
            out,
        } => {
            let layout = load_layout_file(input, image_id, dims.resolve()?)?;
            write_layout(&layout, out)
        }
        LayoutCmd::Cluster {
            tokens,
            image_id,
            dims,
            k,
            out,
        } => {
            let file = std::fs::File::open(tokens)
                .with_context(|| format!("opening {}", tokens.display()))?;
            let toks = load_tokens(std::io::BufReader::new(file)).map_err(|e| e.in_file(tokens))?;
            let opts = KMeansOptions {
                k: *k,
                seed: cfg.seed,
                ..KMeansOptions::default()
            };
            let layout = cluster_ocr_tokens(&toks, image_id, dims.resolve()?, &opts)?;
            write_layout(&layout, out)
        }
    }
}

fn cmd_render(cmd: &RenderCmd, cfg: &PipelineConfig) -> anyhow::Result<()> {
    let page = match cmd {
        RenderCmd::S1(p) | RenderCmd::S2 { page: p, .. } => p,
    };
    let image = load_image(&page.image)?;
    let dims = Dims {
        width: image.width(),
        height: image.height(),
    };
    let layout = load_layout_file(&page.layout, &image_id_of(&page.image)?, dims)?;
    let style = cfg.render.resolve(dims.width, dims.height);
    let rendered = match cmd {
        RenderCmd::S1(_) => render_s1_overlay(&image, &layout, &style)?,
        RenderCmd::S2 { keys, .. } => {
            let keys: BTreeSet<u32> = keys.iter().copied().collect();
            render_s2_mask(&image, &layout, &keys, &style)?
        }
    };
    write_file(&page.out, &rendered.image_bytes)?;
    print_json(json!({"role": rendered.role, "boxes": rendered.boxes_rendered, "out": page.out}));
    Ok(())
}

fn apply_backend(
    cfg: &mut PipelineConfig,
    backend: Option<BackendArg>,
    behavior: &Option<PathBuf>,
) -> anyhow::Result<()> {
    if let Some(b) = backend {
        cfg.backend.kind = match b {
            BackendArg::Mock => BackendKind::Mock,
            BackendArg::Remote => BackendKind::Remote,
        };
    }
    if let Some(path) = behavior {
        cfg.backend.behavior = Some(path.clone());
    }
    cfg.validate()?;
    Ok(())
}

fn corpus(cfg: &PipelineConfig) -> Corpus {
    Corpus::new(&cfg.paths.images, &cfg.paths.layouts)
}

fn cmd_infer(args: &InferArgs, mut cfg: PipelineConfig) -> anyhow::Result<()> {
    apply_backend(&mut cfg, args.backend, &args.behavior)?;
    let (mode, mode_name) = match args.mode {
        ModeArg::DocCob => (InferenceMode::DocCob, "doc-cob"),
        ModeArg::Vanilla => (InferenceMode::VanillaQa, "vanilla"),
    };
    let samples = cfg.load_samples(&args.dataset)?;
    let backend = cfg.build_backend()?;
    let traces = run_inference(
        backend.as_ref(),
        &corpus(&cfg),
        &samples,
        mode,
        cfg.orchestrator,
        &cfg.render,
        cfg.workers,
    )?;
    let out = args
        .out
        .clone()
        .unwrap_or_else(|| cfg.paths.outputs.join(&args.dataset).join(mode_name));
    let predictions: Vec<_> = traces.iter().map(prediction_from_trace).collect();
    write_jsonl(&out.join("traces.jsonl"), &traces)?;
    write_jsonl(&out.join("predictions.jsonl"), &predictions)?;
    print_json(json!({
        "dataset": args.dataset,
        "mode": mode_name,
        "samples": traces.len(),
        "fallbacks": traces.iter().filter(|t| t.fallback_reason.is_some()).count(),
        "calls": traces.iter().map(|t| t.calls().count()).sum::<usize>(),
        "prompt_tokens": traces.iter().map(|t| t.total_prompt_tokens).sum::<u64>(),
        "image_tokens": traces.iter().map(|t| t.total_image_tokens).sum::<u64>(),
        "output_tokens": traces.iter().map(|t| t.total_output_tokens).sum::<u64>(),
        "out": out,
    }));
    Ok(())
}

fn annotations_path(cfg: &PipelineConfig, dataset: &str) -> PathBuf {
    cfg.paths.outputs.join(dataset).join("annotations.jsonl")
}

fn cmd_generate(cmd: &GenerateCmd, mut cfg: PipelineConfig) -> anyhow::Result<()> {
    match cmd {
        GenerateCmd::Annotate {
            dataset,
            behavior,
            out,
        } => {
            apply_backend(&mut cfg, None, behavior)?;
            let samples: Vec<QASample> = cfg.load_samples(dataset)?;
            let backend = cfg.build_backend()?;
            let outputs = run_annotation(
                backend.as_ref(),
                &corpus(&cfg),
                &samples,
                &cfg.render,
                cfg.datagen.annotator_max_tokens,
                cfg.workers,
            )?;
            let out = out
                .clone()
                .unwrap_or_else(|| annotations_path(&cfg, dataset));
            write_jsonl(&out, &outputs)?;
            print_json(
                json!({"dataset": dataset, "images": outputs.len(), "samples": samples.len(), "out": out}),
            );
        }
        GenerateCmd::Qa {
            dataset,
            annotations,
        } => {
            let samples = cfg.load_samples(dataset)?;
            let path = annotations
                .clone()
                .unwrap_or_else(|| annotations_path(&cfg, dataset));
            let outputs: Vec<AnnotatorOutput> = read_jsonl(&path)?;
            let mut ds = Dataset::open(&cfg.paths.datasets, dataset)?;
            let mut queue = ReviewQueue::open(&cfg.paths.review_queue())?;
            let summary = run_qa(&corpus(&cfg), &samples, &outputs, &mut ds, &mut queue)?;
            let manifest = ds.write_manifest()?;
            print_json(
                json!({"dataset": dataset, "qa": summary, "manifest": manifest, "queue": queue.stats()}),
            );
        }
        GenerateCmd::EnablingTasks { dataset, out } => {
            let ds = Dataset::open(&cfg.paths.datasets, dataset)?;
            let records = ds.load_records()?;
            let out = out
                .clone()
                .unwrap_or_else(|| cfg.paths.outputs.join(dataset).join("enabling"));
            let summary = run_enabling_tasks(
                &corpus(&cfg),
                &records,
                &cfg.render,
                cfg.datagen.box_id_cap,
                cfg.seed,
                &out,
            )?;
            print_json(json!({"dataset": dataset, "enabling": summary, "out": out}));
        }
    }
    Ok(())
}

fn cmd_eval(args: &EvalArgs, cfg: &PipelineConfig) -> anyhow::Result<()> {
    let settings = match &args.dataset {
        Some(tag) => cfg.eval_settings_for(tag),
        None => cfg.eval.clone(),
    };
    let report = evaluate_run(&args.predictions, &args.gold, args.metric, &settings)?;
    if let Some(dir) = &args.out {
        write_report(&report, dir, args.metric.name())?;
    }
    print_json(report.summary());
    Ok(())
}

async fn shutdown_signal() {
    let ctrl_c = async {
        if let Err(e) = tokio::signal::ctrl_c().await {
            tracing::error!(error = %e, "cannot listen for ctrl-c");
            std::future::pending::<()>().await;
        }
    };
    #[cfg(unix)]
    let term = async {
        match tokio::signal::unix::signal(tokio::signal::unix::SignalKind::terminate()) {
            Ok(mut s) => {
                s.recv().await;
            }
            Err(e) => {
                tracing::error!(error = %e, "cannot listen for SIGTERM");
                std::future::pending::<()>().await;
            }
        }
    };
    #[cfg(not(unix))]
    let term = std::future::pending::<()>();
    tokio::select! {
        _ = ctrl_c => {}
        _ = term => {}
    }
    tracing::info!("shutdown requested");
}

fn cmd_serve(args: &ServeArgs, cfg: &PipelineConfig) -> anyhow::Result<()> {
    let addr = args
        .addr
        .clone()
        .unwrap_or_else(|| cfg.service.addr.clone());
    let queue = ReviewQueue::open(&cfg.paths.review_queue())?;
    let token = std::env::var("CHAINBOX_REVIEW_TOKEN")
        .ok()
        .filter(|t| !t.is_empty())
        .or(cfg.service.token.clone());
    let state =
        chainbox_service::AppState::new(queue, &cfg.paths.datasets, corpus(cfg), cfg.render, token);
    let rt = tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()?;
    rt.block_on(async {
        let listener = tokio::net::TcpListener::bind(&addr)
            .await
            .with_context(|| format!("cannot bind review service to {addr}"))?;
        println!("listening on {}", listener.local_addr()?);
        chainbox_service::serve(listener, state, shutdown_signal()).await?;
        anyhow::Ok(())
    })
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let cfg = load_config(&cli)?;
    cfg.validate()?;
    let mut shown = cfg.clone();
    if shown.service.token.is_some() {
        shown.service.token = Some("<redacted>".into());
    }
    tracing::info!(config = %serde_json::to_string(&shown).expect("config serializes"), "resolved config");
    match &cli.command {
        Command::Layout(cmd) => cmd_layout(cmd, &cfg),
        Command::Render(cmd) => cmd_render(cmd, &cfg),
        Command::Infer(args) => cmd_infer(args, cfg),
        Command::Generate(cmd) => cmd_generate(cmd, cfg),
        Command::Eval(args) => cmd_eval(args, &cfg),
        Command::Serve(args) => cmd_serve(args, &cfg),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    init_logging(cli.verbose);
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", describe(&e));
            ExitCode::from(exit_code(&e))
        }
    }
}
