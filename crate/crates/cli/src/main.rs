//! `docpipe`: batch entry points for the document-image pipeline.
//!
//! Exit status is 0 on success, 1 when any input file failed (the failures
//! are listed on stderr), and 2 on usage or configuration errors.

mod bench;

use std::fmt;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Duration;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use docpipe_core::config::{env_pairs, parse_value, AppConfig};
use docpipe_core::error::ConfigError;
use docpipe_core::evaluation::{evaluate_dataset, list_files, EvalParams, PredictionSource, IMAGE_EXTENSIONS};
use docpipe_core::imaging::ColorImage;
use docpipe_core::{Pipeline, StageTimings};
use rayon::prelude::*;

#[derive(Debug, Parser)]
#[command(name = "docpipe", version, about = "Document image pipeline: preprocess, detect, classify, evaluate")]
struct Cli {
    /// TOML config file; `DOCPIPE_*` environment variables and flags override it.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,

    /// Files processed in parallel (0 = one per CPU).
    #[arg(long, global = true, value_name = "N")]
    workers: Option<usize>,

    /// TOML file with detection parameter overrides.
    #[arg(long, global = true, value_name = "FILE")]
    det_params: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Inputs {
    /// Image files or directories of images.
    #[arg(required = true, value_name = "INPUT")]
    inputs: Vec<PathBuf>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write grayscale, super-resolved and enhanced stages as PNG.
    Preprocess {
        #[command(flatten)]
        inputs: Inputs,
        /// Output directory; each input gets a subdirectory named after its stem.
        #[arg(long, value_name = "DIR")]
        dump_stages: PathBuf,
    },
    /// Write one detection file (`score;x1,y1,...` per line) per image.
    Detect {
        #[command(flatten)]
        inputs: Inputs,
        #[arg(long, value_name = "DIR", default_value = "predictions")]
        out: PathBuf,
        #[arg(long, value_name = "DIR")]
        dump_stages: Option<PathBuf>,
    },
    /// Print `path<TAB>label<TAB>p1,p2,...` per image.
    Classify {
        #[command(flatten)]
        inputs: Inputs,
        /// Comma-separated label set.
        #[arg(long, value_name = "CSV")]
        labels: Option<String>,
        /// Append a summary column.
        #[arg(long)]
        summarize: bool,
    },
    /// Score detections against ground truth.
    Eval {
        /// Directory of `<stem>.txt` ground-truth files.
        #[arg(long, value_name = "DIR")]
        gt: PathBuf,
        /// Run the pipeline over the images in this directory.
        #[arg(long, value_name = "DIR", conflicts_with = "predictions", required_unless_present = "predictions")]
        images: Option<PathBuf>,
        /// Read `<stem>.txt` detection files instead of running the pipeline.
        #[arg(long, value_name = "DIR")]
        predictions: Option<PathBuf>,
        #[arg(long, value_name = "F")]
        iou_thresh: Option<f64>,
        /// Also write the report as JSON.
        #[arg(long, value_name = "PATH")]
        report_out: Option<PathBuf>,
    },
    /// Time detection over a directory.
    Bench {
        #[arg(value_name = "DIR")]
        dir: PathBuf,
        /// Passes over the directory.
        #[arg(long, default_value_t = 3, value_name = "N")]
        runs: usize,
        #[arg(long, value_name = "PATH")]
        report_out: Option<PathBuf>,
    },
    /// Start the HTTP service.
    Serve {
        #[arg(long, value_name = "N")]
        port: Option<u16>,
    },
}

/// Marks errors that map to exit status 2.
#[derive(Debug)]
struct UsageError(String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

fn det_params_override(path: &Path) -> Result<toml::Value> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| usage(format!("--det-params {}: {e}", path.display())))?;
    let mut table: toml::Table =
        toml::from_str(&text).map_err(|e| usage(format!("--det-params {}: {e}", path.display())))?;
    // Accept either a bare table of parameters or one nested under [detection].
    Ok(match table.remove("detection") {
        Some(inner) if table.is_empty() => inner,
        Some(_) => return Err(usage(format!("--det-params {}: unexpected keys besides [detection]", path.display()))),
        None => toml::Value::Table(table),
    })
}

fn load_config(cli: &Cli) -> Result<AppConfig> {
    let mut overrides = Vec::new();
    if let Some(path) = &cli.det_params {
        overrides.push(("detection".to_string(), det_params_override(path)?));
    }
    if let Some(n) = cli.workers {
        overrides.push(("workers".to_string(), toml::Value::Integer(n as i64)));
    }
    match &cli.command {
        Command::Classify { labels, summarize, .. } => {
            if let Some(csv) = labels {
                let list = csv.split(',').map(|s| toml::Value::String(s.trim().to_string())).collect();
                overrides.push(("labels".to_string(), toml::Value::Array(list)));
            }
            if *summarize {
                overrides.push(("summarize".to_string(), toml::Value::Boolean(true)));
            }
        }
        Command::Eval { iou_thresh: Some(t), .. } => {
            overrides.push(("eval.iou_thresh".to_string(), parse_value(&t.to_string())));
        }
        Command::Serve { port: Some(p) } => {
            overrides.push(("service.port".to_string(), toml::Value::Integer(*p as i64)));
        }
        _ => {}
    }
    Ok(AppConfig::load(cli.config.as_deref(), &env_pairs(), &overrides)?)
}

/// Expands directories into their image files; output is sorted and deduplicated.
fn collect_inputs(paths: &[PathBuf]) -> Result<Vec<PathBuf>> {
    let mut files = Vec::new();
    for p in paths {
        if p.is_dir() {
            files.extend(list_files(p, &IMAGE_EXTENSIONS)?);
        } else if p.is_file() {
            files.push(p.clone());
        } else {
            return Err(usage(format!("input {} does not exist", p.display())));
        }
    }
    files.sort();
    files.dedup();
    Ok(files)
}

fn build_pipeline(cfg: &AppConfig, timeout_secs: u64) -> Result<Pipeline> {
    Ok(Pipeline::from_config(cfg, Duration::from_secs(timeout_secs))?)
}

fn thread_pool(cfg: &AppConfig) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.batch_workers())
        .build()
        .context("cannot start worker threads")
}

/// Runs `f` over every file in parallel, returning results in input order.
fn per_file<T: Send>(cfg: &AppConfig, files: &[PathBuf], f: impl Fn(&Path) -> Result<T> + Sync) -> Result<Vec<Result<T>>> {
    let pool = thread_pool(cfg)?;
    Ok(pool.install(|| files.par_iter().map(|p| f(p).with_context(|| p.display().to_string())).collect()))
}

/// Prints failures and converts them to the exit status.
fn finish<T>(results: Vec<Result<T>>, mut ok: impl FnMut(T)) -> ExitCode {
    let mut failed = 0;
    for r in results {
        match r {
            Ok(v) => ok(v),
            Err(e) => {
                failed += 1;
                eprintln!("error: {e:#}");
            }
        }
    }
    if failed > 0 {
        eprintln!("{failed} file(s) failed");
        ExitCode::from(1)
    } else {
        ExitCode::SUCCESS
    }
}

fn stem(path: &Path) -> String {
    path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
}

fn dump_stages(pipeline: &Pipeline, img: &ColorImage, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("cannot create {}", dir.display()))?;
    let stages = pipeline.preprocess(img, &mut StageTimings::default())?;
    stages.gray.save_png(&dir.join("01_gray.png"))?;
    stages.super_resolved.save_png(&dir.join("02_sr.png"))?;
    stages.enhanced.save_png(&dir.join("03_clahe.png"))?;
    Ok(())
}

fn run(cli: Cli) -> Result<ExitCode> {
    let cfg = load_config(&cli)?;
    match cli.command {
        Command::Preprocess { inputs, dump_stages: out } => {
            let files = collect_inputs(&inputs.inputs)?;
            let pipeline = build_pipeline(&cfg, cfg.backend.timeout_secs)?;
            let results = per_file(&cfg, &files, |path| {
                let dir = out.join(stem(path));
                dump_stages(&pipeline, &ColorImage::open(path)?, &dir)?;
                Ok(format!("{}\t{}", path.display(), dir.display()))
            })?;
            Ok(finish(results, |line| println!("{line}")))
        }
        Command::Detect { inputs, out, dump_stages: dump } => {
            let files = collect_inputs(&inputs.inputs)?;
            let pipeline = build_pipeline(&cfg, cfg.backend.timeout_secs)?;
            std::fs::create_dir_all(&out).with_context(|| format!("cannot create {}", out.display()))?;
            let results = per_file(&cfg, &files, |path| {
                let img = ColorImage::open(path)?;
                if let Some(d) = &dump {
                    dump_stages(&pipeline, &img, &d.join(stem(path)))?;
                }
                let regions = pipeline.detect(&img)?.regions;
                let mut text = String::new();
                for r in &regions {
                    text.push_str(&r.to_line());
                    text.push('\n');
                }
                let target = out.join(format!("{}.txt", stem(path)));
                std::fs::write(&target, text).with_context(|| format!("cannot write {}", target.display()))?;
                Ok(format!("{}\t{}", path.display(), regions.len()))
            })?;
            Ok(finish(results, |line| println!("{line}")))
        }
        Command::Classify { inputs, .. } => {
            let files = collect_inputs(&inputs.inputs)?;
            let pipeline = build_pipeline(&cfg, cfg.backend.timeout_secs)?;
            let results = per_file(&cfg, &files, |path| {
                let out = pipeline.classify(&ColorImage::open(path)?)?;
                let c = out.classification;
                let probs: Vec<String> = c.label_probs.values().map(|p| format!("{p:.6}")).collect();
                let mut line = format!("{}\t{}\t{}", path.display(), c.chosen, probs.join(","));
                if cfg.summarize {
                    line.push('\t');
                    line.push_str(c.summary.as_deref().unwrap_or(""));
                }
                Ok(line)
            })?;
            Ok(finish(results, |line| println!("{line}")))
        }
        Command::Eval {
            gt,
            images,
            predictions,
            report_out,
            ..
        } => {
            if !gt.is_dir() {
                return Err(usage(format!("--gt {} is not a directory", gt.display())));
            }
            let params = EvalParams {
                iou_thresh: cfg.eval.iou_thresh,
                iou_resolution: cfg.eval.iou_resolution,
                workers: cfg.batch_workers(),
            };
            let pipeline;
            let source = match (&images, &predictions) {
                (Some(dir), None) => {
                    pipeline = build_pipeline(&cfg, cfg.backend.eval_timeout_secs)?;
                    PredictionSource::Pipeline {
                        images: dir,
                        pipeline: &pipeline,
                    }
                }
                (None, Some(dir)) => PredictionSource::Files { predictions: dir },
                _ => bail!(usage("exactly one of --images or --predictions is required")),
            };
            let report = evaluate_dataset(&gt, source, &params)?;
            print!("{}", report.render_text());
            if let Some(path) = report_out {
                let json = serde_json::to_string_pretty(&report)?;
                std::fs::write(&path, json).with_context(|| format!("cannot write {}", path.display()))?;
            }
            for s in &report.skipped {
                eprintln!("error: {}: {}", s.name, s.reason);
            }
            Ok(if report.skipped.is_empty() {
                ExitCode::SUCCESS
            } else {
                ExitCode::from(1)
            })
        }
        Command::Bench { dir, runs, report_out } => {
            if !dir.is_dir() {
                return Err(usage(format!("{} is not a directory", dir.display())));
            }
            if runs == 0 {
                return Err(usage("--runs must be at least 1"));
            }
            let files = collect_inputs(&[dir])?;
            let pipeline = build_pipeline(&cfg, cfg.backend.eval_timeout_secs)?;
            let pool = thread_pool(&cfg)?;
            let report = bench::run(&pipeline, &pool, &files, runs)?;
            print!("{}", report.render_text());
            if let Some(path) = report_out {
                std::fs::write(&path, serde_json::to_string_pretty(&report)?)
                    .with_context(|| format!("cannot write {}", path.display()))?;
            }
            Ok(if report.failures.is_empty() {
                ExitCode::SUCCESS
            } else {
                ExitCode::from(1)
            })
        }
        Command::Serve { .. } => {
            let addr = format!("{}:{}", cfg.service.bind, cfg.service.port);
            let addr = addr
                .parse()
                .map_err(|e| usage(format!("bad bind address `{addr}`: {e}")))?;
            let pipeline = build_pipeline(&cfg, cfg.backend.timeout_secs)?;
            let state = std::sync::Arc::new(docpipe_service::AppState::new(cfg, pipeline));
            let rt = tokio::runtime::Runtime::new()?;
            rt.block_on(docpipe_service::serve(state, addr))
                .map_err(|e| anyhow!("service on {addr}: {e}"))?;
            Ok(ExitCode::SUCCESS)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("DOCPIPE_LOG", "warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // clap uses status 2 for usage errors and 0 for --help/--version.
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("docpipe: {e:#}");
            let is_usage = e.downcast_ref::<UsageError>().is_some()
                || e.downcast_ref::<ConfigError>().is_some()
                || matches!(e.downcast_ref::<docpipe_core::Error>(), Some(docpipe_core::Error::Config(_)));
            ExitCode::from(if is_usage { 2 } else { 1 })
        }
    }
}
