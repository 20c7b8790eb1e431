//! gzoom: multi-scale graph contrastive learning from the command line.
//!
//! Subcommands mirror the pipeline stages (diffuse, register, train, embed,
//! eval) plus an end-to-end `pipeline` orchestrator with `--resume`.
//! Exit codes: 0 success, 2 config error, 3 data error, 4 numerical failure.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use gzoom_core::config::ConfigFile;
use gzoom_core::diffusion::{self, DiffusionConfig, DiffusionMode, Normalization, Sparsify};
use gzoom_core::error::Error;
use gzoom_core::graph;
use gzoom_core::model::ModelParams;
use gzoom_core::pipeline::{self, EvalTask, PipelineConfig};
use gzoom_core::sampling::{self, NeighborhoodRegister};
use gzoom_core::trainer::{self, TrainConfig};

#[derive(Parser)]
#[command(
    name = "gzoom",
    version,
    about = "Graph self-supervised learning with multi-scale contrastiveness"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Compute the PPR diffusion of a graph and persist its sparsified form.
    Diffuse(DiffuseArgs),
    /// Build the top-k neighborhood register.
    Register(RegisterArgs),
    /// Train the encoder on a prepared dataset.
    Train(TrainArgs),
    /// Produce full-graph embeddings from a trained model.
    Embed(EmbedArgs),
    /// Evaluate stored embeddings (linear probe and/or k-means NMI).
    Eval(EvalArgs),
    /// Run diffuse -> register -> train -> embed -> eval end to end.
    Pipeline(PipelineArgs),
}

#[derive(Args)]
struct DiffuseArgs {
    #[arg(long)]
    graph: PathBuf,
    #[arg(long, default_value_t = 0.15)]
    teleport: f64,
    /// "power" or "exact"
    #[arg(long, default_value = "power")]
    mode: String,
    /// "symmetric" or "random_walk"
    #[arg(long, default_value = "symmetric")]
    norm: String,
    #[arg(long, default_value_t = 1000)]
    iters: usize,
    #[arg(long, default_value_t = 1e-9)]
    tol: f64,
    /// Keep the top-k entries per row (mutually exclusive with --eps).
    #[arg(long)]
    top: Option<usize>,
    /// Keep entries with weight >= eps.
    #[arg(long)]
    eps: Option<f64>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    workers: usize,
}

#[derive(Args)]
struct RegisterArgs {
    /// Path to a persisted diffused graph, or "recompute" (needs --graph).
    #[arg(long)]
    diffusion: String,
    #[arg(long)]
    graph: Option<PathBuf>,
    #[arg(long, default_value_t = 100)]
    k: usize,
    #[arg(long, default_value_t = 0.15)]
    teleport: f64,
    #[arg(long, default_value_t = 1000)]
    iters: usize,
    #[arg(long, default_value_t = 1e-9)]
    tol: f64,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    workers: usize,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    graph: PathBuf,
    #[arg(long)]
    features: PathBuf,
    /// Precomputed diffused graph; recomputed from the config when absent.
    #[arg(long)]
    diffused: Option<PathBuf>,
    /// Precomputed register; derived from the diffusion when absent.
    #[arg(long)]
    register: Option<PathBuf>,
    #[arg(long)]
    out_model: PathBuf,
    #[arg(long)]
    out_metrics: PathBuf,
    #[arg(long, default_value_t = 0)]
    workers: usize,
}

#[derive(Args)]
struct EmbedArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    graph: PathBuf,
    #[arg(long)]
    features: PathBuf,
    #[arg(long)]
    diffused: PathBuf,
    /// Row-normalize features before encoding (must match training).
    #[arg(long, default_value_t = false)]
    normalize_features: bool,
    #[arg(long, default_value_t = 1024)]
    chunk: usize,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    workers: usize,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    emb: PathBuf,
    #[arg(long)]
    labels: PathBuf,
    #[arg(long)]
    splits: Option<PathBuf>,
    /// "classify", "cluster" or "both"
    #[arg(long, default_value = "classify")]
    task: String,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 10)]
    restarts: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 0)]
    workers: usize,
}

#[derive(Args)]
struct PipelineArgs {
    #[arg(long)]
    config: PathBuf,
    /// Overrides out_dir from the config file.
    #[arg(long)]
    out_dir: Option<PathBuf>,
    /// Skip stages whose artifacts match the current config hash.
    #[arg(long, default_value_t = false)]
    resume: bool,
    #[arg(long)]
    workers: Option<usize>,
}

fn exit_code_for(err: &Error) -> u8 {
    match err {
        Error::Config(_) => 2,
        Error::Parse { .. } | Error::Validation(_) | Error::Io { .. } | Error::Size(_) => 3,
        Error::Numeric(_) | Error::Shape { .. } => 4,
    }
}

fn effective_workers(flag: usize) -> usize {
    match std::env::var("GZOOM_WORKERS") {
        Ok(v) => v.parse().unwrap_or(flag),
        Err(_) => flag,
    }
}

fn with_pool<T>(workers: usize, f: impl FnOnce() -> Result<T, Error> + Send) -> Result<T, Error>
where
    T: Send,
{
    let pool = rayon_pool(workers)?;
    pool.install(f)
}

fn rayon_pool(workers: usize) -> Result<rayon::ThreadPool, Error> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| Error::Config(format!("cannot build worker pool: {e}")))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match cli.command {
        Command::Diffuse(args) => run_diffuse(args),
        Command::Register(args) => run_register(args),
        Command::Train(args) => run_train(args),
        Command::Embed(args) => run_embed(args),
        Command::Eval(args) => run_eval(args),
        Command::Pipeline(args) => run_pipeline(args),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err((code, msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(code)
        }
    }
}

type CliResult = Result<(), (u8, String)>;

fn fail(err: Error) -> (u8, String) {
    (exit_code_for(&err), err.to_string())
}

#[allow(clippy::too_many_arguments)]
fn diffusion_config(
    teleport: f64,
    mode: &str,
    norm: &str,
    iters: usize,
    tol: f64,
    top: Option<usize>,
    eps: Option<f64>,
) -> Result<DiffusionConfig, Error> {
    let mode = match mode {
        "power" => DiffusionMode::Power,
        "exact" => DiffusionMode::Exact,
        other => return Err(Error::Config(format!("unknown diffusion mode '{other}'"))),
    };
    let norm = match norm {
        "symmetric" => Normalization::Symmetric,
        "random_walk" => Normalization::RandomWalk,
        other => return Err(Error::Config(format!("unknown normalization '{other}'"))),
    };
    let sparsify = match (top, eps) {
        (Some(_), Some(_)) => {
            return Err(Error::Config(
                "--top and --eps are mutually exclusive".into(),
            ))
        }
        (Some(t), None) => Sparsify::Top(t),
        (None, Some(e)) => Sparsify::Eps(e),
        (None, None) => Sparsify::Top(128),
    };
    let cfg = DiffusionConfig {
        teleport,
        mode,
        norm,
        max_iters: iters,
        tol,
        sparsify,
        ..DiffusionConfig::default()
    };
    cfg.validate()?;
    Ok(cfg)
}

fn run_diffuse(args: DiffuseArgs) -> CliResult {
    let workers = effective_workers(args.workers);
    let cfg = diffusion_config(
        args.teleport,
        &args.mode,
        &args.norm,
        args.iters,
        args.tol,
        args.top,
        args.eps,
    )
    .map_err(fail)?;
    with_pool(workers, || {
        let g = graph::load_graph(&args.graph)?;
        let rows = diffusion::diffuse_all(&g, &cfg)?;
        let sparse = diffusion::sparsify_diffusion(&rows, &cfg)?;
        sparse.save_edge_list(&args.out, &[])?;
        let meta = args.out.with_extension("meta");
        diffusion::write_sidecar(&meta, &cfg, &[])?;
        let unconverged = rows.iter().filter(|r| !r.converged).count();
        println!(
            "diffused {} nodes -> {} ({} entries); {} rows unconverged",
            g.node_count(),
            args.out.display(),
            sparse.entry_count(),
            unconverged
        );
        Ok(())
    })
    .map_err(fail)
}

fn run_register(args: RegisterArgs) -> CliResult {
    let workers = effective_workers(args.workers);
    with_pool(workers, || {
        let register = if args.diffusion == "recompute" {
            let graph_path = args
                .graph
                .as_ref()
                .ok_or_else(|| Error::Config("--diffusion recompute needs --graph".into()))?;
            let g = graph::load_graph(graph_path)?;
            let cfg = DiffusionConfig {
                teleport: args.teleport,
                max_iters: args.iters,
                tol: args.tol,
                ..DiffusionConfig::default()
            };
            let rows = diffusion::diffuse_all(&g, &cfg)?;
            sampling::build_register(&rows, args.k)?
        } else {
            let g = graph::load_graph(&PathBuf::from(&args.diffusion))?;
            sampling::register_from_graph(&g, args.k)?
        };
        register.save(&args.out)?;
        println!(
            "register for {} nodes (k={}) -> {}",
            register.node_count(),
            register.k(),
            args.out.display()
        );
        Ok(())
    })
    .map_err(fail)
}

fn run_train(args: TrainArgs) -> CliResult {
    let cfg_file = ConfigFile::load(&args.config).map_err(fail)?;
    let train_cfg = TrainConfig::from_config(&cfg_file).map_err(fail)?;
    let diff_cfg = train_cfg.diffusion(&cfg_file).map_err(fail)?;
    let normalize = cfg_file
        .get_bool("normalize_features", false)
        .map_err(fail)?;
    let workers = effective_workers(args.workers);
    with_pool(workers, || {
        let g = graph::load_graph(&args.graph)?;
        let xs_raw = graph::load_features(&args.features)?;
        let xs = if normalize {
            xs_raw.row_normalized()
        } else {
            xs_raw
        };
        let (g_diff, register) = match (&args.diffused, &args.register) {
            (Some(dp), Some(rp)) => (graph::load_graph(dp)?, NeighborhoodRegister::load(rp)?),
            (Some(dp), None) => {
                let gd = graph::load_graph(dp)?;
                let reg = sampling::register_from_graph(&gd, train_cfg.register_k)?;
                (gd, reg)
            }
            _ => {
                let rows = diffusion::diffuse_all(&g, &diff_cfg)?;
                let gd = diffusion::sparsify_diffusion(&rows, &diff_cfg)?;
                let reg = sampling::build_register(&rows, train_cfg.register_k)?;
                (gd, reg)
            }
        };
        let effective = train_cfg.effective(g.node_count());
        // stream loss records so the metrics file is tail-able mid-run
        let outcome = {
            use std::io::Write;
            let file = std::fs::File::create(&args.out_metrics)
                .map_err(|e| Error::io(args.out_metrics.display().to_string(), e))?;
            let mut writer = std::io::BufWriter::new(file);
            trainer::train_with_progress(&g, &g_diff, &xs, &register, &effective, |report| {
                let line = serde_json_line(report)?;
                writeln!(writer, "{line}")
                    .and_then(|_| writer.flush())
                    .map_err(|e| Error::io(args.out_metrics.display().to_string(), e))
            })?
        };
        outcome.params.save(&args.out_model)?;
        let last = outcome.history.last();
        println!(
            "trained {} epochs (best at {}), final total loss {} -> {}",
            outcome.history.len(),
            outcome.best_epoch,
            last.map_or(f64::NAN, |r| r.total),
            args.out_model.display()
        );
        Ok(())
    })
    .map_err(fail)
}

fn serde_json_line<T: serde::Serialize>(value: &T) -> Result<String, Error> {
    serde_json::to_string(value).map_err(|e| Error::Numeric(format!("serialization failed: {e}")))
}

fn run_embed(args: EmbedArgs) -> CliResult {
    let workers = effective_workers(args.workers);
    with_pool(workers, || {
        let g = graph::load_graph(&args.graph)?;
        let g_diff = graph::load_graph(&args.diffused)?;
        let xs_raw = graph::load_features(&args.features)?;
        let xs = if args.normalize_features {
            xs_raw.row_normalized()
        } else {
            xs_raw
        };
        let params = ModelParams::load(&args.model, gzoom_core::model::Activation::PRelu)?;
        let emb = trainer::infer_embeddings(&params, &g, &g_diff, &xs, args.chunk)?;
        trainer::save_embeddings(&args.out, &emb)?;
        println!(
            "embeddings {}x{} -> {}",
            emb.rows(),
            emb.dims(),
            args.out.display()
        );
        Ok(())
    })
    .map_err(fail)
}

fn run_eval(args: EvalArgs) -> CliResult {
    let task = EvalTask::from_id(&args.task).map_err(fail)?;
    let workers = effective_workers(args.workers);
    with_pool(workers, || {
        let emb = trainer::load_embeddings(&args.emb)?;
        let labels = graph::load_labels(&args.labels, emb.rows())?;
        let split = match &args.splits {
            Some(dir) => Some(graph::load_splits(dir)?),
            None => None,
        };
        // Reuse the pipeline's eval report with a minimal config shell.
        let mut cfg_file = ConfigFile::default();
        cfg_file.set("seed", args.seed.to_string());
        cfg_file.set("kmeans_restarts", args.restarts.to_string());
        let shell = PipelineConfig {
            graph_path: PathBuf::new(),
            features_path: PathBuf::new(),
            labels_path: args.labels.clone(),
            splits_dir: args.splits.clone(),
            out_dir: PathBuf::new(),
            train: TrainConfig {
                seed: args.seed,
                ..TrainConfig::default()
            },
            diffusion: DiffusionConfig::default(),
            eval_task: task,
            workers,
            normalize_features: false,
            probe_l2: None,
            probe_max_iters: 2000,
            kmeans_restarts: args.restarts,
            config_hash: cfg_file.hash(),
            config_echo: cfg_file.canonical(),
        };
        let report = pipeline::run_eval(&shell, &emb, &labels, split.as_ref())?;
        let text = serde_json::to_string_pretty(&report)
            .map_err(|e| Error::Numeric(format!("serialization failed: {e}")))?;
        std::fs::write(&args.out, &text)
            .map_err(|e| Error::io(args.out.display().to_string(), e))?;
        println!("{text}");
        Ok(())
    })
    .map_err(fail)
}

fn run_pipeline(args: PipelineArgs) -> CliResult {
    let cfg_file = ConfigFile::load(&args.config).map_err(fail)?;
    let mut cfg = PipelineConfig::from_config(&cfg_file).map_err(fail)?;
    if let Some(dir) = args.out_dir {
        cfg.out_dir = dir;
    }
    if let Some(w) = args.workers {
        cfg.workers = w;
    }
    cfg.workers = effective_workers(cfg.workers);
    match pipeline::run_pipeline(&cfg, args.resume) {
        Ok(summary) => {
            if !summary.skipped.is_empty() {
                println!("skipped (fresh): {}", summary.skipped.join(", "));
            }
            println!(
                "artifacts in {}:\n  {}\n  {}\n  {}\n  {}\n  {}\n  {}",
                cfg.out_dir.display(),
                summary.diffused_path.display(),
                summary.register_path.display(),
                summary.model_path.display(),
                summary.embeddings_path.display(),
                summary.metrics_path.display(),
                summary.eval_path.display(),
            );
            println!(
                "{}",
                serde_json::to_string_pretty(&summary.eval_report).unwrap_or_default()
            );
            Ok(())
        }
        Err(stage_err) => {
            let code = exit_code_for(&stage_err.error);
            Err((code, stage_err.to_string()))
        }
    }
}
