//! End-to-end orchestration: diffuse -> register -> train -> embed -> eval,
//! with config-hash-stamped artifacts and stage-level resume.
//!
//! Every artifact gets a sidecar (or, for text formats, a header comment)
//! recording the config hash, so stale outputs are detectable and `resume`
//! can skip stages whose inputs have not changed. Failed stages leave their
//! partial output behind with a ".partial" suffix.

use std::fs;
use std::path::{Path, PathBuf};

use serde_json::json;

use crate::config::ConfigFile;
use crate::diffusion::{self, DiffusionConfig};
use crate::error::{Error, Result};
use crate::eval;
use crate::graph::{self, FeatureMatrix, LabelVector, SplitSpec};
use crate::sampling::{self, NeighborhoodRegister};
use crate::trainer::{self, TrainConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EvalTask {
    Classify,
    Cluster,
    Both,
}

impl EvalTask {
    pub fn from_id(id: &str) -> Result<EvalTask> {
        Ok(match id {
            "classify" => EvalTask::Classify,
            "cluster" => EvalTask::Cluster,
            "both" => EvalTask::Both,
            other => return Err(Error::Config(format!("unknown eval task '{other}'"))),
        })
    }

    fn wants_classify(&self) -> bool {
        matches!(self, EvalTask::Classify | EvalTask::Both)
    }

    fn wants_cluster(&self) -> bool {
        matches!(self, EvalTask::Cluster | EvalTask::Both)
    }
}

#[derive(Debug, Clone)]
pub struct PipelineConfig {
    pub graph_path: PathBuf,
    pub features_path: PathBuf,
    pub labels_path: PathBuf,
    pub splits_dir: Option<PathBuf>,
    pub out_dir: PathBuf,
    pub train: TrainConfig,
    pub diffusion: DiffusionConfig,
    pub eval_task: EvalTask,
    pub workers: usize,
    pub normalize_features: bool,
    pub probe_l2: Option<f64>,
    pub probe_max_iters: usize,
    pub kmeans_restarts: usize,
    /// Hash of the full config file; stamped on every artifact.
    pub config_hash: String,
    /// Canonical config echo for the eval report.
    pub config_echo: String,
}

impl PipelineConfig {
    pub fn from_config(cfg: &ConfigFile) -> Result<PipelineConfig> {
        let train = TrainConfig::from_config(cfg)?;
        let diffusion = train.diffusion(cfg)?;
        let eval_task = EvalTask::from_id(&cfg.get_str("eval_task", "classify"))?;
        let splits_dir = cfg.get("splits").map(PathBuf::from);
        if eval_task.wants_classify() && splits_dir.is_none() {
            return Err(Error::Config(
                "eval_task includes classification but no 'splits' directory is set".into(),
            ));
        }
        Ok(PipelineConfig {
            graph_path: PathBuf::from(cfg.require("graph")?),
            features_path: PathBuf::from(cfg.require("features")?),
            labels_path: PathBuf::from(cfg.require("labels")?),
            splits_dir,
            out_dir: PathBuf::from(cfg.get_str("out_dir", "gzoom_out")),
            train,
            diffusion,
            eval_task,
            workers: cfg.get_usize("workers", 0)?,
            normalize_features: cfg.get_bool("normalize_features", false)?,
            probe_l2: match cfg.get("probe_l2") {
                None => None,
                Some(v) => Some(
                    v.parse()
                        .map_err(|e| Error::Config(format!("bad probe_l2 '{v}': {e}")))?,
                ),
            },
            probe_max_iters: cfg.get_usize("probe_max_iters", 2000)?,
            kmeans_restarts: cfg.get_usize("kmeans_restarts", 10)?,
            config_hash: cfg.hash(),
            config_echo: cfg.canonical(),
        })
    }
}

/// A stage failure, carrying which stage died for the exit message.
#[derive(Debug)]
pub struct StageError {
    pub stage: &'static str,
    pub error: Error,
}

impl std::fmt::Display for StageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "stage '{}' failed: {}", self.stage, self.error)
    }
}

impl std::error::Error for StageError {}

pub type StageResult<T> = std::result::Result<T, StageError>;

fn at<T>(stage: &'static str, r: Result<T>) -> StageResult<T> {
    r.map_err(|error| StageError { stage, error })
}

#[derive(Debug)]
pub struct PipelineSummary {
    pub diffused_path: PathBuf,
    pub register_path: PathBuf,
    pub model_path: PathBuf,
    pub embeddings_path: PathBuf,
    pub metrics_path: PathBuf,
    pub eval_path: PathBuf,
    pub eval_report: serde_json::Value,
    pub skipped: Vec<&'static str>,
}

/// Writes an artifact through a ".partial" temp name, then its hash sidecar,
/// then renames into place. An error leaves the .partial file for forensics.
fn commit_artifact(
    path: &Path,
    hash: &str,
    stage: &'static str,
    write: impl FnOnce(&Path) -> Result<()>,
) -> Result<()> {
    let partial = partial_path(path);
    write(&partial)?;
    fs::write(
        hash_path(path),
        format!("config_hash={hash}\nstage={stage}\n"),
    )
    .map_err(|e| Error::io(hash_path(path).display().to_string(), e))?;
    fs::rename(&partial, path).map_err(|e| Error::io(path.display().to_string(), e))?;
    Ok(())
}

fn partial_path(path: &Path) -> PathBuf {
    let mut name = path.file_name().unwrap_or_default().to_os_string();
    name.push(".partial");
    path.with_file_name(name)
}

fn hash_path(path: &Path) -> PathBuf {
    let mut name = path.file_name().unwrap_or_default().to_os_string();
    name.push(".hash");
    path.with_file_name(name)
}

fn is_fresh(path: &Path, hash: &str) -> bool {
    if !path.exists() {
        return false;
    }
    match fs::read_to_string(hash_path(path)) {
        Ok(text) => text.lines().any(|l| l == format!("config_hash={hash}")),
        Err(_) => false,
    }
}

fn require_file(stage: &'static str, path: &Path) -> StageResult<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(StageError {
            stage,
            error: Error::Io {
                path: path.display().to_string(),
                source: std::io::Error::new(std::io::ErrorKind::NotFound, "file not found"),
            },
        })
    }
}

/// Runs the full pipeline. With `resume`, stages whose artifacts carry the
/// current config hash are skipped and their outputs loaded from disk.
pub fn run_pipeline(cfg: &PipelineConfig, resume: bool) -> StageResult<PipelineSummary> {
    require_file("startup", &cfg.graph_path)?;
    require_file("startup", &cfg.features_path)?;
    require_file("startup", &cfg.labels_path)?;
    if let Some(dir) = &cfg.splits_dir {
        require_file("startup", dir)?;
    }
    at(
        "startup",
        fs::create_dir_all(&cfg.out_dir)
            .map_err(|e| Error::io(cfg.out_dir.display().to_string(), e)),
    )?;

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.workers)
        .build()
        .map_err(|e| StageError {
            stage: "startup",
            error: Error::Config(format!("cannot build worker pool: {e}")),
        })?;
    pool.install(|| run_stages(cfg, resume))
}

fn run_stages(cfg: &PipelineConfig, resume: bool) -> StageResult<PipelineSummary> {
    let hash = cfg.config_hash.as_str();
    let mut skipped = Vec::new();

    let g = at("load", graph::load_graph(&cfg.graph_path))?;
    let n = g.node_count();
    let xs_raw = at("load", graph::load_features(&cfg.features_path))?;
    let xs = if cfg.normalize_features {
        xs_raw.row_normalized()
    } else {
        xs_raw
    };
    let labels = at("load", graph::load_labels(&cfg.labels_path, n))?;
    let split: Option<SplitSpec> = match &cfg.splits_dir {
        Some(dir) => {
            let s = at("load", graph::load_splits(dir))?;
            at("load", s.validate(&labels))?;
            Some(s)
        }
        None => None,
    };
    if xs.rows() != n {
        return Err(StageError {
            stage: "load",
            error: Error::Validation(format!(
                "feature rows {} do not match graph nodes {n}",
                xs.rows()
            )),
        });
    }

    let diffused_path = cfg.out_dir.join("diffused.tsv");
    let register_path = cfg.out_dir.join("register.bin");
    let train_cfg = cfg.train.effective(n);

    // Diffusion rows feed both the sparsified view and the register; compute
    // them once when either artifact is stale.
    let diffused_fresh = resume && is_fresh(&diffused_path, hash);
    let register_fresh = resume && is_fresh(&register_path, hash);

    let (g_diff, register) = if diffused_fresh && register_fresh {
        skipped.push("diffuse");
        skipped.push("register");
        (
            at("diffuse", graph::load_graph(&diffused_path))?,
            at("register", NeighborhoodRegister::load(&register_path))?,
        )
    } else {
        let rows = at("diffuse", diffusion::diffuse_all(&g, &cfg.diffusion))?;
        let g_diff = at(
            "diffuse",
            diffusion::sparsify_diffusion(&rows, &cfg.diffusion),
        )?;
        at(
            "diffuse",
            commit_artifact(&diffused_path, hash, "diffuse", |p| {
                g_diff.save_edge_list(p, &[format!("config_hash={hash}")])
            }),
        )?;
        at(
            "diffuse",
            diffusion::write_sidecar(
                &cfg.out_dir.join("diffused.meta"),
                &cfg.diffusion,
                &[format!("config_hash={hash}")],
            ),
        )?;
        let register = at(
            "register",
            sampling::build_register(&rows, train_cfg.register_k),
        )?;
        at(
            "register",
            commit_artifact(&register_path, hash, "register", |p| register.save(p)),
        )?;
        (g_diff, register)
    };

    let model_path = cfg.out_dir.join("model.bin");
    let metrics_path = cfg.out_dir.join("metrics.jsonl");
    let params = if resume && is_fresh(&model_path, hash) {
        skipped.push("train");
        at(
            "train",
            crate::model::ModelParams::load(&model_path, train_cfg.activation),
        )?
    } else {
        // Loss records stream into the partial metrics file epoch by epoch,
        // so a long run can be tailed; the file is committed on success.
        let metrics_partial = partial_path(&metrics_path);
        let outcome = {
            use std::io::Write;
            let file = at(
                "train",
                fs::File::create(&metrics_partial)
                    .map_err(|e| Error::io(metrics_partial.display().to_string(), e)),
            )?;
            let mut writer = std::io::BufWriter::new(file);
            at(
                "train",
                trainer::train_with_progress(&g, &g_diff, &xs, &register, &train_cfg, |report| {
                    let line = serde_json::to_string(report).expect("loss report is serializable");
                    writeln!(writer, "{line}")
                        .and_then(|_| writer.flush())
                        .map_err(|e| Error::io(metrics_partial.display().to_string(), e))
                }),
            )?
        };
        at(
            "train",
            fs::write(
                hash_path(&metrics_path),
                format!("config_hash={hash}\nstage=train\n"),
            )
            .map_err(|e| Error::io(hash_path(&metrics_path).display().to_string(), e)),
        )?;
        at(
            "train",
            fs::rename(&metrics_partial, &metrics_path)
                .map_err(|e| Error::io(metrics_path.display().to_string(), e)),
        )?;
        at(
            "train",
            commit_artifact(&model_path, hash, "train", |p| outcome.params.save(p)),
        )?;
        outcome.params
    };

    let embeddings_path = cfg.out_dir.join("embeddings.bin");
    let emb = if resume && is_fresh(&embeddings_path, hash) {
        skipped.push("embed");
        at("embed", trainer::load_embeddings(&embeddings_path))?
    } else {
        let emb = at(
            "embed",
            trainer::infer_embeddings(&params, &g, &g_diff, &xs, train_cfg.infer_chunk),
        )?;
        at(
            "embed",
            commit_artifact(&embeddings_path, hash, "embed", |p| {
                trainer::save_embeddings(p, &emb)
            }),
        )?;
        emb
    };

    let eval_path = cfg.out_dir.join("eval.json");
    let eval_report = at("eval", run_eval(cfg, &emb, &labels, split.as_ref()))?;
    at(
        "eval",
        commit_artifact(&eval_path, hash, "eval", |p| {
            let text = serde_json::to_string_pretty(&eval_report).expect("report is serializable");
            fs::write(p, text).map_err(|e| Error::io(p.display().to_string(), e))
        }),
    )?;

    Ok(PipelineSummary {
        diffused_path,
        register_path,
        model_path,
        embeddings_path,
        metrics_path,
        eval_path,
        eval_report,
        skipped,
    })
}

/// Shared by the pipeline and the standalone eval subcommand.
pub fn run_eval(
    cfg: &PipelineConfig,
    emb: &FeatureMatrix,
    labels: &LabelVector,
    split: Option<&SplitSpec>,
) -> Result<serde_json::Value> {
    let mut report = json!({
        "task": match cfg.eval_task {
            EvalTask::Classify => "classify",
            EvalTask::Cluster => "cluster",
            EvalTask::Both => "both",
        },
        "embedding_dim": emb.dims(),
        "nodes": emb.rows(),
        "config_hash": cfg.config_hash,
        "config": cfg.config_echo,
    });
    if cfg.eval_task.wants_classify() {
        let split = split.ok_or_else(|| {
            Error::Config("classification eval needs train/val/test splits".into())
        })?;
        let (l2, probe) = match cfg.probe_l2 {
            Some(l2) => (
                l2,
                eval::linear_probe(emb, labels, split, l2, cfg.probe_max_iters)?,
            ),
            None => eval::linear_probe_tuned(emb, labels, split, cfg.probe_max_iters)?,
        };
        report["accuracy"] = json!(probe.accuracy);
        report["per_class_accuracy"] = json!(probe.per_class);
        report["probe_l2"] = json!(l2);
        report["probe_iterations"] = json!(probe.iterations);
        report["probe_converged"] = json!(probe.converged);
    }
    if cfg.eval_task.wants_cluster() {
        let clusters = eval::kmeans_nmi(
            emb,
            labels,
            labels.num_classes(),
            cfg.kmeans_restarts,
            cfg.train.seed,
        )?;
        report["nmi"] = json!(clusters.nmi);
        report["kmeans_inertia"] = json!(clusters.inertia);
        report["num_clusters"] = json!(labels.num_classes());
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth;

    fn toy_pipeline_config(dir: &Path, seed: u64) -> PipelineConfig {
        let (graph, features, labels, splits) = synth::write_toy_dataset(dir, 30, seed).unwrap();
        let mut cfg = ConfigFile::default();
        cfg.set("graph", graph.display().to_string());
        cfg.set("features", features.display().to_string());
        cfg.set("labels", labels.display().to_string());
        cfg.set("splits", splits.display().to_string());
        cfg.set("out_dir", dir.join("out").display().to_string());
        cfg.set("batch_size", "6");
        cfg.set("sample_size", "24");
        cfg.set("register_k", "3");
        cfg.set("max_epochs", "50");
        cfg.set("patience", "50");
        cfg.set("hidden_dim", "8");
        cfg.set("sparsify_top", "8");
        cfg.set("eval_task", "both");
        cfg.set("seed", seed.to_string());
        PipelineConfig::from_config(&cfg).unwrap()
    }

    #[test]
    fn toy_pipeline_produces_all_artifacts() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = toy_pipeline_config(dir.path(), 5);
        let summary = run_pipeline(&cfg, false).unwrap();
        for path in [
            &summary.diffused_path,
            &summary.register_path,
            &summary.model_path,
            &summary.embeddings_path,
            &summary.metrics_path,
            &summary.eval_path,
        ] {
            assert!(path.exists(), "{path:?} missing");
        }
        // eval json parses and carries the hash
        let text = fs::read_to_string(&summary.eval_path).unwrap();
        let parsed: serde_json::Value = serde_json::from_str(&text).unwrap();
        assert_eq!(parsed["config_hash"], json!(cfg.config_hash));
        assert!(parsed["accuracy"].as_f64().is_some());
        assert!(parsed["nmi"].as_f64().is_some());
        // metrics are JSON lines
        let metrics = fs::read_to_string(&summary.metrics_path).unwrap();
        assert!(metrics.lines().count() > 0);
        for line in metrics.lines() {
            let record: serde_json::Value = serde_json::from_str(line).unwrap();
            assert!(record["total"].as_f64().is_some());
        }
    }

    #[test]
    fn rerun_is_byte_identical_and_resume_skips() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = toy_pipeline_config(dir.path(), 9);
        let first = run_pipeline(&cfg, false).unwrap();
        let emb_bytes = fs::read(&first.embeddings_path).unwrap();
        let second = run_pipeline(&cfg, false).unwrap();
        assert_eq!(emb_bytes, fs::read(&second.embeddings_path).unwrap());
        assert!(second.skipped.is_empty());
        let resumed = run_pipeline(&cfg, true).unwrap();
        assert!(resumed.skipped.contains(&"train"));
        assert!(resumed.skipped.contains(&"embed"));
        assert_eq!(emb_bytes, fs::read(&resumed.embeddings_path).unwrap());
    }

    #[test]
    fn missing_features_file_is_a_startup_error() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = toy_pipeline_config(dir.path(), 2);
        cfg.features_path = dir.path().join("nope.bin");
        match run_pipeline(&cfg, false) {
            Err(StageError { stage, error }) => {
                assert_eq!(stage, "startup");
                assert!(error.to_string().contains("nope.bin"));
            }
            Ok(_) => panic!("expected startup failure"),
        }
    }

    #[test]
    fn stale_hash_forces_stage_rerun() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = toy_pipeline_config(dir.path(), 3);
        run_pipeline(&cfg, false).unwrap();
        // a changed seed produces a different hash, so resume reruns training
        cfg.train.seed = 123;
        cfg.config_hash = "different".into();
        let resumed = run_pipeline(&cfg, true).unwrap();
        assert!(!resumed.skipped.contains(&"train"));
    }
}
