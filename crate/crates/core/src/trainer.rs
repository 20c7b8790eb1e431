//! Training loop: per-epoch sampling, augmentation, three-level loss,
//! Adam updates, early stopping, and final-inference embedding assembly.

use std::rc::Rc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::Tape;
use crate::config::ConfigFile;
use crate::dense::Matrix;
use crate::diffusion::{DiffusionConfig, DiffusionMode, Normalization, Sparsify};
use crate::error::{Error, Result};
use crate::graph::{symmetric_normalize, FeatureMatrix, SparseGraph};
use crate::model::{self, Activation, ModelParams};
use crate::objective::{self, LossReport, LossWeights};
use crate::sampling::{self, NeighborhoodRegister};
use crate::sparse::SpMat;

/// Table-V augmentation schemes. The id separates the two views with '_':
/// graph sampling is always on, `gd` samples view 2 from the diffused graph,
/// `ed`/`nfd` add edge or feature dropout to that view.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AugmentationScheme {
    GsGs,
    GsGsgd,
    GsGsgded,
    GsedGsgded,
    GsedGsgd,
    GsGsgdnfd,
    GsnfdGsnfd,
    GsnfdGsgd,
    GsnfdGsgdnfd,
}

impl AugmentationScheme {
    pub fn from_id(id: &str) -> Result<Self> {
        Ok(match id {
            "gs_gs" => Self::GsGs,
            "gs_gsgd" => Self::GsGsgd,
            "gs_gsgded" => Self::GsGsgded,
            "gsed_gsgded" => Self::GsedGsgded,
            "gsed_gsgd" => Self::GsedGsgd,
            "gs_gsgdnfd" => Self::GsGsgdnfd,
            "gsnfd_gsnfd" => Self::GsnfdGsnfd,
            "gsnfd_gsgd" => Self::GsnfdGsgd,
            "gsnfd_gsgdnfd" => Self::GsnfdGsgdnfd,
            other => {
                return Err(Error::Config(format!(
                    "unknown augmentation scheme '{other}'"
                )))
            }
        })
    }

    pub fn id(&self) -> &'static str {
        match self {
            Self::GsGs => "gs_gs",
            Self::GsGsgd => "gs_gsgd",
            Self::GsGsgded => "gs_gsgded",
            Self::GsedGsgded => "gsed_gsgded",
            Self::GsedGsgd => "gsed_gsgd",
            Self::GsGsgdnfd => "gs_gsgdnfd",
            Self::GsnfdGsnfd => "gsnfd_gsnfd",
            Self::GsnfdGsgd => "gsnfd_gsgd",
            Self::GsnfdGsgdnfd => "gsnfd_gsgdnfd",
        }
    }

    /// (view2 from diffused graph, ed on view1, ed on view2,
    ///  nfd on view1, nfd on view2)
    fn flags(&self) -> (bool, bool, bool, bool, bool) {
        match self {
            Self::GsGs => (false, false, false, false, false),
            Self::GsGsgd => (true, false, false, false, false),
            Self::GsGsgded => (true, false, true, false, false),
            Self::GsedGsgded => (true, true, true, false, false),
            Self::GsedGsgd => (true, true, false, false, false),
            Self::GsGsgdnfd => (true, false, false, false, true),
            Self::GsnfdGsnfd => (false, false, false, true, true),
            Self::GsnfdGsgd => (true, false, false, true, false),
            Self::GsnfdGsgdnfd => (true, false, false, true, true),
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub sample_size: usize,
    pub register_k: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub lr: f64,
    pub hidden_dim: usize,
    pub teleport: f64,
    pub weights: LossWeights,
    pub scheme: AugmentationScheme,
    pub p_ed: f64,
    pub p_nfd: f64,
    pub seed: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub weight_decay: f64,
    pub activation: Activation,
    /// Loss must improve by at least this much to reset patience.
    pub improvement_threshold: f64,
    pub infer_chunk: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 200,
            sample_size: 3000,
            register_k: 100,
            max_epochs: 1500,
            patience: 50,
            lr: 0.001,
            hidden_dim: 256,
            teleport: 0.15,
            weights: LossWeights::default(),
            scheme: AugmentationScheme::GsGsgd,
            p_ed: 0.2,
            p_nfd: 0.2,
            seed: 0,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            weight_decay: 0.0,
            activation: Activation::PRelu,
            improvement_threshold: 1e-5,
            infer_chunk: 1024,
        }
    }
}

/// Named hyperparameter profiles as (key, value) defaults.
pub fn profile_defaults(name: &str) -> Result<&'static [(&'static str, &'static str)]> {
    Ok(match name {
        "cora" => &[
            ("batch_size", "200"),
            ("sample_size", "3000"),
            ("register_k", "100"),
            ("patience", "50"),
        ],
        "citeseer" => &[
            ("batch_size", "400"),
            ("sample_size", "3000"),
            ("register_k", "100"),
            ("patience", "50"),
        ],
        "large" => &[
            ("batch_size", "500"),
            ("sample_size", "7000"),
            ("register_k", "100"),
            ("patience", "200"),
        ],
        other => return Err(Error::Config(format!("unknown profile '{other}'"))),
    })
}

impl TrainConfig {
    pub fn from_config(cfg: &ConfigFile) -> Result<TrainConfig> {
        let cfg = match cfg.get("profile") {
            Some(name) => cfg.clone().with_profile_defaults(profile_defaults(name)?),
            None => cfg.clone(),
        };
        let d = TrainConfig::default();
        let activation = match cfg.get_str("activation", "prelu").as_str() {
            "prelu" => Activation::PRelu,
            "relu" => Activation::Relu,
            "identity" => Activation::Identity,
            other => return Err(Error::Config(format!("unknown activation '{other}'"))),
        };
        Ok(TrainConfig {
            batch_size: cfg.get_usize("batch_size", d.batch_size)?,
            sample_size: cfg.get_usize("sample_size", d.sample_size)?,
            register_k: cfg.get_usize("register_k", d.register_k)?,
            max_epochs: cfg.get_usize("max_epochs", d.max_epochs)?,
            patience: cfg.get_usize("patience", d.patience)?,
            lr: cfg.get_f64("lr", d.lr)?,
            hidden_dim: cfg.get_usize("hidden_dim", d.hidden_dim)?,
            teleport: cfg.get_f64("teleport", d.teleport)?,
            weights: LossWeights {
                alpha: cfg.get_f64("alpha", 1.0)?,
                beta: cfg.get_f64("beta", 1.0)?,
                gamma: cfg.get_f64("gamma", 1.0)?,
            },
            scheme: AugmentationScheme::from_id(&cfg.get_str("scheme", "gs_gsgd"))?,
            p_ed: cfg.get_f64("p_ed", d.p_ed)?,
            p_nfd: cfg.get_f64("p_nfd", d.p_nfd)?,
            seed: cfg.get_u64("seed", d.seed)?,
            beta1: cfg.get_f64("beta1", d.beta1)?,
            beta2: cfg.get_f64("beta2", d.beta2)?,
            adam_eps: cfg.get_f64("adam_eps", d.adam_eps)?,
            weight_decay: cfg.get_f64("weight_decay", d.weight_decay)?,
            activation,
            improvement_threshold: cfg.get_f64("improvement_threshold", d.improvement_threshold)?,
            infer_chunk: cfg.get_usize("infer_chunk", d.infer_chunk)?,
        })
    }

    /// Clamps the sample size to the graph when a profile asks for more nodes
    /// than exist (the batch invariant is B <= P <= n).
    pub fn effective(&self, n: usize) -> TrainConfig {
        let mut out = self.clone();
        if out.sample_size > n {
            out.sample_size = n;
        }
        out
    }

    pub fn validate(&self, n: usize) -> Result<()> {
        if self.batch_size == 0 || self.batch_size > self.sample_size || self.sample_size > n {
            return Err(Error::Config(format!(
                "need 1 <= B <= P <= n, got B={}, P={}, n={n}",
                self.batch_size, self.sample_size
            )));
        }
        if self.patience > self.max_epochs {
            return Err(Error::Config(format!(
                "patience {} exceeds max epochs {}",
                self.patience, self.max_epochs
            )));
        }
        if !(self.lr > 0.0) {
            return Err(Error::Config(format!("lr must be > 0, got {}", self.lr)));
        }
        if self.hidden_dim == 0 {
            return Err(Error::Config("hidden_dim must be positive".into()));
        }
        self.weights.validate()?;
        if !(0.0..=1.0).contains(&self.p_ed) || !(0.0..=1.0).contains(&self.p_nfd) {
            return Err(Error::Config("dropout fractions must lie in [0,1]".into()));
        }
        Ok(())
    }

    /// Diffusion settings implied by this training run (shared teleport).
    pub fn diffusion(&self, cfg: &ConfigFile) -> Result<DiffusionConfig> {
        let d = DiffusionConfig::default();
        let mode = match cfg.get_str("diffusion_mode", "power").as_str() {
            "power" => DiffusionMode::Power,
            "exact" => DiffusionMode::Exact,
            other => return Err(Error::Config(format!("unknown diffusion mode '{other}'"))),
        };
        let norm = match cfg.get_str("diffusion_norm", "symmetric").as_str() {
            "symmetric" => Normalization::Symmetric,
            "random_walk" => Normalization::RandomWalk,
            other => return Err(Error::Config(format!("unknown normalization '{other}'"))),
        };
        let sparsify = match (cfg.get("sparsify_top"), cfg.get("sparsify_eps")) {
            (Some(_), Some(_)) => {
                return Err(Error::Config(
                    "sparsify_top and sparsify_eps are mutually exclusive".into(),
                ))
            }
            (Some(t), None) => Sparsify::Top(
                t.parse()
                    .map_err(|e| Error::Config(format!("bad sparsify_top '{t}': {e}")))?,
            ),
            (None, Some(e)) => Sparsify::Eps(
                e.parse()
                    .map_err(|er| Error::Config(format!("bad sparsify_eps '{e}': {er}")))?,
            ),
            (None, None) => Sparsify::Top(128),
        };
        let out = DiffusionConfig {
            teleport: self.teleport,
            mode,
            norm,
            max_iters: cfg.get_usize("diffusion_iters", d.max_iters)?,
            tol: cfg.get_f64("diffusion_tol", d.tol)?,
            sparsify,
            exact_guard: cfg.get_usize("exact_guard", d.exact_guard)?,
        };
        out.validate()?;
        Ok(out)
    }
}

/// Bias-corrected Adam over one parameter block.
#[derive(Debug, Clone)]
pub struct AdamBuffers {
    m: Matrix,
    v: Matrix,
}

impl AdamBuffers {
    pub fn for_param(p: &Matrix) -> AdamBuffers {
        AdamBuffers {
            m: Matrix::zeros(p.rows(), p.cols()),
            v: Matrix::zeros(p.rows(), p.cols()),
        }
    }
}

/// One Adam update: standard first/second-moment rule with bias correction;
/// weight decay enters as an L2 term on the gradient. `step` is 1-based.
#[allow(clippy::too_many_arguments)]
pub fn adam_step(
    param: &mut Matrix,
    grad: &Matrix,
    buffers: &mut AdamBuffers,
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    weight_decay: f64,
    step: usize,
) -> Result<()> {
    if !grad.is_finite() {
        return Err(Error::Numeric("non-finite gradient in adam step".into()));
    }
    if grad.shape() != param.shape() {
        return Err(Error::Shape {
            op: "adam_step",
            detail: format!("param {:?} vs grad {:?}", param.shape(), grad.shape()),
        });
    }
    let bc1 = 1.0 - beta1.powi(step as i32);
    let bc2 = 1.0 - beta2.powi(step as i32);
    for i in 0..param.data().len() {
        let g = grad.data()[i] + weight_decay * param.data()[i];
        let m = beta1 * buffers.m.data()[i] + (1.0 - beta1) * g;
        let v = beta2 * buffers.v.data()[i] + (1.0 - beta2) * g * g;
        buffers.m.data_mut()[i] = m;
        buffers.v.data_mut()[i] = v;
        let m_hat = m / bc1;
        let v_hat = v / bc2;
        param.data_mut()[i] -= lr * m_hat / (v_hat.sqrt() + eps);
    }
    Ok(())
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Parameters from the best-loss epoch.
    pub params: ModelParams,
    pub history: Vec<LossReport>,
    pub best_epoch: usize,
}

/// Runs Algorithm-1-style training: every epoch draws a fresh batch, builds
/// both augmented views, encodes them plus one corrupted pass, combines the
/// three losses and takes an Adam step on {W, act_param, W_D}.
///
/// All randomness (init, sampling, dropout, corruption) flows from one
/// seeded stream, so identical configs replay bit-for-bit.
pub fn train(
    g: &SparseGraph,
    g_diff: &SparseGraph,
    xs: &FeatureMatrix,
    register: &NeighborhoodRegister,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    train_with_progress(g, g_diff, xs, register, cfg, |_| Ok(()))
}

/// `train` with a per-epoch hook, so callers can stream loss records while
/// a long run is in flight.
pub fn train_with_progress(
    g: &SparseGraph,
    g_diff: &SparseGraph,
    xs: &FeatureMatrix,
    register: &NeighborhoodRegister,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&LossReport) -> Result<()>,
) -> Result<TrainOutcome> {
    let n = g.node_count();
    if g_diff.node_count() != n || xs.rows() != n || register.node_count() != n {
        return Err(Error::Validation(format!(
            "inconsistent node counts: graph {n}, diffused {}, features {}, register {}",
            g_diff.node_count(),
            xs.rows(),
            register.node_count()
        )));
    }
    cfg.validate(n)?;

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut params = ModelParams::init(xs.dims(), cfg.hidden_dim, cfg.activation, &mut rng);
    let mut adam_w = AdamBuffers::for_param(&params.encoder.w);
    let mut adam_wd = AdamBuffers::for_param(&params.discriminator.w_d);
    let mut act_mat = Matrix::from_vec(1, 1, vec![params.encoder.act_param]);
    let mut adam_act = AdamBuffers::for_param(&act_mat);

    let (use_diffused, ed1, ed2, nfd1, nfd2) = cfg.scheme.flags();
    let view2_source = if use_diffused { g_diff } else { g };

    let mut history: Vec<LossReport> = Vec::new();
    let mut best_total = f64::INFINITY;
    let mut best_params = params.clone();
    let mut best_epoch = 0usize;
    let mut since_best = 0usize;

    for epoch in 1..=cfg.max_epochs {
        let batch = sampling::sample_batch(
            g,
            view2_source,
            register,
            cfg.batch_size,
            cfg.sample_size,
            &mut rng,
        )?;
        let x_batch = xs.gather(&batch.node_set);
        let x1 = if nfd1 {
            sampling::feature_dropout(&x_batch, cfg.p_nfd, &mut rng)?
        } else {
            x_batch.clone()
        };
        let x2 = if nfd2 {
            sampling::feature_dropout(&x_batch, cfg.p_nfd, &mut rng)?
        } else {
            x_batch
        };
        let v1 = if ed1 {
            sampling::edge_dropout(&batch.view1, cfg.p_ed, &mut rng)?.graph
        } else {
            batch.view1.clone()
        };
        let v2 = if ed2 {
            sampling::edge_dropout(&batch.view2, cfg.p_ed, &mut rng)?.graph
        } else {
            batch.view2.clone()
        };
        // Corrupted anchors: view1 structure over row-shuffled view1 features.
        let (xc, _) = model::corrupt(&x1, &mut rng);

        let a1 = Rc::new(SpMat::from_graph(&symmetric_normalize(&v1, true)));
        let a2 = Rc::new(SpMat::from_graph(&symmetric_normalize(&v2, true)));
        let x1_sp = Rc::new(SpMat::from_features(&x1));
        let x2_sp = Rc::new(SpMat::from_features(&x2));
        let xc_sp = Rc::new(SpMat::from_features(&xc));

        let tape = Tape::new();
        let w = tape.param(params.encoder.w.clone());
        let slope = tape.param(act_mat.clone());
        let wd = tape.param(params.discriminator.w_d.clone());

        let h1 = model::encode(&tape, &a1, &x1_sp, w, slope, cfg.activation)?;
        let h2 = model::encode(&tape, &a2, &x2_sp, w, slope, cfg.activation)?;
        let hc = model::encode(&tape, &a1, &xc_sp, w, slope, cfg.activation)?;

        let target_locals: Vec<usize> = (0..cfg.batch_size).collect();
        let groups = register_groups(register, &batch)?;

        let micro = objective::micro_loss(&tape, h1, h2, &target_locals)?;
        let meso = objective::meso_loss(&tape, h1, h2, hc, wd, Rc::new(groups), &target_locals)?;
        let macro_level = objective::macro_loss(&tape, h1, h2, hc, wd, &target_locals)?;
        let total = objective::total_loss(&tape, micro, meso, macro_level, &cfg.weights)?;

        let report = LossReport {
            epoch,
            micro: tape.scalar(micro)?,
            meso: tape.scalar(meso)?,
            macro_level: tape.scalar(macro_level)?,
            total: tape.scalar(total)?,
        };
        if !report.total.is_finite() {
            return Err(Error::Numeric(format!(
                "non-finite loss at epoch {epoch}: micro={}, meso={}, macro={}",
                report.micro, report.meso, report.macro_level
            )));
        }

        // Early-stopping bookkeeping sees the loss of the CURRENT params,
        // so snapshot before the update.
        if best_total - report.total >= cfg.improvement_threshold {
            best_total = report.total;
            best_params = params.clone();
            best_params.encoder.act_param = act_mat.get(0, 0);
            best_epoch = epoch;
            since_best = 0;
        } else {
            since_best += 1;
        }

        tape.backward(total)?;
        let gw = tape
            .grad(w)
            .ok_or_else(|| Error::Numeric("encoder weight received no gradient".into()))?;
        adam_step(
            &mut params.encoder.w,
            &gw,
            &mut adam_w,
            cfg.lr,
            cfg.beta1,
            cfg.beta2,
            cfg.adam_eps,
            cfg.weight_decay,
            epoch,
        )?;
        let gwd = tape
            .grad(wd)
            .ok_or_else(|| Error::Numeric("discriminator weight received no gradient".into()))?;
        adam_step(
            &mut params.discriminator.w_d,
            &gwd,
            &mut adam_wd,
            cfg.lr,
            cfg.beta1,
            cfg.beta2,
            cfg.adam_eps,
            cfg.weight_decay,
            epoch,
        )?;
        if let Some(gs) = tape.grad(slope) {
            adam_step(
                &mut act_mat,
                &gs,
                &mut adam_act,
                cfg.lr,
                cfg.beta1,
                cfg.beta2,
                cfg.adam_eps,
                cfg.weight_decay,
                epoch,
            )?;
            params.encoder.act_param = act_mat.get(0, 0);
        }

        on_epoch(&report)?;
        history.push(report);
        if since_best >= cfg.patience {
            break;
        }
    }

    if history.is_empty() {
        // max_epochs = 0: hand back the (seeded) initial parameters.
        best_params = params;
        best_params.encoder.act_param = act_mat.get(0, 0);
    }
    Ok(TrainOutcome {
        params: best_params,
        history,
        best_epoch,
    })
}

/// Maps each target's register row into batch-local indices. A miss means
/// the sampler broke its own contract.
fn register_groups(
    register: &NeighborhoodRegister,
    batch: &sampling::BatchSample,
) -> Result<Vec<Vec<usize>>> {
    batch
        .targets
        .iter()
        .map(|&t| {
            register
                .row(t)
                .iter()
                .map(|&nb| {
                    batch.local_index.get(&(nb as usize)).copied().ok_or_else(|| {
                        Error::Validation(format!(
                            "register neighbor {nb} of target {t} missing from node_set (sampler bug)"
                        ))
                    })
                })
                .collect()
        })
        .collect()
}

/// Full-graph embeddings: encoder output over the normalized original graph
/// plus the normalized diffused graph, summed row-wise, computed in row
/// chunks. Chunk size cannot affect any value.
pub fn infer_embeddings(
    params: &ModelParams,
    g: &SparseGraph,
    g_diff: &SparseGraph,
    xs: &FeatureMatrix,
    chunk: usize,
) -> Result<FeatureMatrix> {
    let n = g.node_count();
    if g_diff.node_count() != n || xs.rows() != n {
        return Err(Error::Validation(format!(
            "inconsistent node counts: graph {n}, diffused {}, features {}",
            g_diff.node_count(),
            xs.rows()
        )));
    }
    if xs.dims() != params.input_dim() {
        return Err(Error::Validation(format!(
            "feature dim {} does not match encoder input dim {}",
            xs.dims(),
            params.input_dim()
        )));
    }
    let chunk = chunk.max(1);
    let a1 = SpMat::from_graph(&symmetric_normalize(g, true));
    let a2 = SpMat::from_graph(&symmetric_normalize(g_diff, true));
    let xw = SpMat::from_features(xs).matmul(&params.encoder.w);
    let dh = params.hidden_dim();
    let mut out = vec![0.0; n * dh];
    let mut lo = 0;
    while lo < n {
        let hi = (lo + chunk).min(n);
        let h1 = model::encode_rows_plain(
            &a1,
            &xw,
            lo,
            hi,
            params.encoder.act_param,
            params.activation,
        );
        let h2 = model::encode_rows_plain(
            &a2,
            &xw,
            lo,
            hi,
            params.encoder.act_param,
            params.activation,
        );
        for (local, i) in (lo..hi).enumerate() {
            for c in 0..dh {
                out[i * dh + c] = h1.get(local, c) + h2.get(local, c);
            }
        }
        lo = hi;
    }
    FeatureMatrix::new(n, dh, out)
}

/// Embedding file format: "GZEM", u32 n, u32 d', then n*d' f32 LE row-major.
pub fn save_embeddings(path: &std::path::Path, emb: &FeatureMatrix) -> Result<()> {
    let mut buf = Vec::with_capacity(12 + emb.values().len() * 4);
    buf.extend_from_slice(b"GZEM");
    buf.extend_from_slice(&(emb.rows() as u32).to_le_bytes());
    buf.extend_from_slice(&(emb.dims() as u32).to_le_bytes());
    for &v in emb.values() {
        buf.extend_from_slice(&(v as f32).to_le_bytes());
    }
    std::fs::write(path, buf).map_err(|e| Error::io(path.display().to_string(), e))
}

pub fn load_embeddings(path: &std::path::Path) -> Result<FeatureMatrix> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let path_str = path.display().to_string();
    if bytes.len() < 12 || &bytes[..4] != b"GZEM" {
        return Err(Error::Parse {
            path: path_str,
            line: 0,
            msg: "missing GZEM magic".into(),
        });
    }
    let n = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let d = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    if bytes.len() != 12 + 4 * n * d {
        return Err(Error::Parse {
            path: path_str,
            line: 0,
            msg: format!(
                "embedding payload is {} bytes, expected {}",
                bytes.len() - 12,
                4 * n * d
            ),
        });
    }
    let values = bytes[12..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    FeatureMatrix::new(n, d, values)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::{diffuse_all, sparsify_diffusion};
    use crate::sampling::build_register;
    use crate::synth;
    use rand::Rng;

    fn toy_setup(
        n: usize,
        seed: u64,
    ) -> (
        SparseGraph,
        SparseGraph,
        FeatureMatrix,
        NeighborhoodRegister,
    ) {
        let g = synth::sbm_two_block(n, 0.4, 0.05, seed);
        let dcfg = DiffusionConfig {
            sparsify: Sparsify::Top(8),
            ..DiffusionConfig::default()
        };
        let rows = diffuse_all(&g, &dcfg).unwrap();
        let g_diff = sparsify_diffusion(&rows, &dcfg).unwrap();
        let register = build_register(&rows, 2).unwrap();
        let xs = synth::sbm_features(n, 16, 0.3, seed.wrapping_add(9));
        (g, g_diff, xs, register)
    }

    fn toy_config() -> TrainConfig {
        TrainConfig {
            batch_size: 6,
            sample_size: 20,
            register_k: 2,
            max_epochs: 200,
            patience: 200,
            hidden_dim: 8,
            lr: 0.005,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn adam_first_step_identity() {
        let mut p = Matrix::from_vec(1, 1, vec![0.0]);
        let g = Matrix::from_vec(1, 1, vec![1.0]);
        let mut buf = AdamBuffers::for_param(&p);
        adam_step(&mut p, &g, &mut buf, 0.001, 0.9, 0.999, 1e-8, 0.0, 1).unwrap();
        assert!((p.get(0, 0) + 0.001).abs() < 1e-9);
    }

    #[test]
    fn adam_zero_gradient_is_noop() {
        let mut p = Matrix::from_vec(2, 2, vec![1.0, -2.0, 3.0, 4.0]);
        let original = p.clone();
        let g = Matrix::zeros(2, 2);
        let mut buf = AdamBuffers::for_param(&p);
        for step in 1..=10 {
            adam_step(&mut p, &g, &mut buf, 0.01, 0.9, 0.999, 1e-8, 0.0, step).unwrap();
        }
        assert_eq!(p, original);
    }

    #[test]
    fn adam_matches_reference_transcription() {
        // Literal transcription of the update rule, run coordinate-wise.
        let mut rng = ChaCha8Rng::seed_from_u64(64);
        let (lr, b1, b2, eps, wd) = (0.01, 0.9, 0.999, 1e-8, 0.1);
        let mut param = Matrix::from_vec(2, 3, (0..6).map(|i| i as f64 * 0.3 - 1.0).collect());
        let mut reference = param.data().to_vec();
        let mut m = [0.0; 6];
        let mut v = [0.0; 6];
        let mut buf = AdamBuffers::for_param(&param);
        for step in 1..=100 {
            let grad_data: Vec<f64> = (0..6).map(|_| rng.random_range(-1.0..1.0)).collect();
            for i in 0..6 {
                let g = grad_data[i] + wd * reference[i];
                m[i] = b1 * m[i] + (1.0 - b1) * g;
                v[i] = b2 * v[i] + (1.0 - b2) * g * g;
                let m_hat = m[i] / (1.0 - b1.powi(step));
                let v_hat = v[i] / (1.0 - b2.powi(step));
                reference[i] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
            let grad = Matrix::from_vec(2, 3, grad_data);
            adam_step(
                &mut param,
                &grad,
                &mut buf,
                lr,
                b1,
                b2,
                eps,
                wd,
                step as usize,
            )
            .unwrap();
            for i in 0..6 {
                assert!((param.data()[i] - reference[i]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn adam_rejects_non_finite_gradient() {
        let mut p = Matrix::from_vec(1, 1, vec![0.0]);
        let g = Matrix::from_vec(1, 1, vec![f64::NAN]);
        let mut buf = AdamBuffers::for_param(&p);
        assert!(matches!(
            adam_step(&mut p, &g, &mut buf, 0.01, 0.9, 0.999, 1e-8, 0.0, 1),
            Err(Error::Numeric(_))
        ));
    }

    #[test]
    fn zero_epochs_returns_initial_params() {
        let (g, gd, xs, reg) = toy_setup(20, 1);
        let cfg = TrainConfig {
            max_epochs: 0,
            patience: 0,
            ..toy_config()
        };
        let out = train(&g, &gd, &xs, &reg, &cfg).unwrap();
        assert!(out.history.is_empty());
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let expect = ModelParams::init(16, cfg.hidden_dim, cfg.activation, &mut rng);
        assert_eq!(out.params.encoder.w, expect.encoder.w);
    }

    #[test]
    fn training_reduces_loss_on_sbm_toy() {
        let (g, gd, xs, reg) = toy_setup(30, 2);
        let out = train(&g, &gd, &xs, &reg, &toy_config()).unwrap();
        let first = out.history.first().unwrap().total;
        let last = out.history.last().unwrap().total;
        assert!(
            last < first,
            "loss should fall over 200 epochs: first {first}, last {last}"
        );
        for r in &out.history {
            let recombined = r.micro + r.meso + r.macro_level;
            assert!((r.total - recombined).abs() < 1e-12);
        }
    }

    #[test]
    fn training_is_bit_reproducible() {
        let (g, gd, xs, reg) = toy_setup(24, 3);
        let cfg = TrainConfig {
            max_epochs: 30,
            patience: 30,
            ..toy_config()
        };
        let a = train(&g, &gd, &xs, &reg, &cfg).unwrap();
        let b = train(&g, &gd, &xs, &reg, &cfg).unwrap();
        assert_eq!(a.history.len(), b.history.len());
        for (ra, rb) in a.history.iter().zip(&b.history) {
            assert_eq!(ra.total.to_bits(), rb.total.to_bits());
            assert_eq!(ra.micro.to_bits(), rb.micro.to_bits());
        }
        assert_eq!(a.params.encoder.w, b.params.encoder.w);
    }

    #[test]
    fn early_stopping_respects_patience() {
        let (g, gd, xs, reg) = toy_setup(24, 4);
        let cfg = TrainConfig {
            max_epochs: 200,
            patience: 5,
            // impossible threshold: nothing ever counts as an improvement
            // after the first epoch sets the baseline
            improvement_threshold: f64::INFINITY,
            ..toy_config()
        };
        let out = train(&g, &gd, &xs, &reg, &cfg).unwrap();
        // epoch 1 sets the baseline, then exactly `patience` stale epochs
        assert_eq!(out.best_epoch, 1);
        assert_eq!(out.history.len(), 1 + 5);
    }

    #[test]
    fn scheme_ids_roundtrip() {
        for id in [
            "gs_gs",
            "gs_gsgd",
            "gs_gsgded",
            "gsed_gsgded",
            "gsed_gsgd",
            "gs_gsgdnfd",
            "gsnfd_gsnfd",
            "gsnfd_gsgd",
            "gsnfd_gsgdnfd",
        ] {
            assert_eq!(AugmentationScheme::from_id(id).unwrap().id(), id);
        }
        assert!(AugmentationScheme::from_id("gs").is_err());
    }

    #[test]
    fn all_schemes_run_one_epoch() {
        let (g, gd, xs, reg) = toy_setup(24, 6);
        for id in [
            "gs_gs",
            "gs_gsgd",
            "gs_gsgded",
            "gsed_gsgded",
            "gsed_gsgd",
            "gs_gsgdnfd",
            "gsnfd_gsnfd",
            "gsnfd_gsgd",
            "gsnfd_gsgdnfd",
        ] {
            let cfg = TrainConfig {
                max_epochs: 1,
                patience: 1,
                scheme: AugmentationScheme::from_id(id).unwrap(),
                ..toy_config()
            };
            let out = train(&g, &gd, &xs, &reg, &cfg).unwrap();
            assert_eq!(out.history.len(), 1, "scheme {id}");
            assert!(out.history[0].total.is_finite());
        }
    }

    #[test]
    fn infer_zero_weights_give_zero_embeddings() {
        let (g, gd, xs, _) = toy_setup(20, 7);
        let params = ModelParams {
            encoder: crate::model::EncoderParams {
                w: Matrix::zeros(16, 8),
                act_param: 0.25,
            },
            discriminator: crate::model::DiscriminatorParams {
                w_d: Matrix::zeros(8, 8),
            },
            activation: Activation::PRelu,
        };
        let emb = infer_embeddings(&params, &g, &gd, &xs, 4).unwrap();
        assert!(emb.values().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn infer_chunk_size_is_invisible() {
        let (g, gd, xs, reg) = toy_setup(20, 8);
        let cfg = TrainConfig {
            max_epochs: 5,
            patience: 5,
            ..toy_config()
        };
        let out = train(&g, &gd, &xs, &reg, &cfg).unwrap();
        let full = infer_embeddings(&out.params, &g, &gd, &xs, 20).unwrap();
        let tiny = infer_embeddings(&out.params, &g, &gd, &xs, 1).unwrap();
        assert_eq!(full.values(), tiny.values());
    }

    #[test]
    fn infer_identity_single_node_doubles_features() {
        let g = SparseGraph::from_edges(1, &[]).unwrap();
        let xs = FeatureMatrix::new(1, 2, vec![0.3, -0.6]).unwrap();
        let params = ModelParams {
            encoder: crate::model::EncoderParams {
                w: Matrix::identity(2),
                act_param: 1.0,
            },
            discriminator: crate::model::DiscriminatorParams {
                w_d: Matrix::zeros(2, 2),
            },
            activation: Activation::Identity,
        };
        let emb = infer_embeddings(&params, &g, &g, &xs, 1).unwrap();
        assert!((emb.row(0)[0] - 0.6).abs() < 1e-15);
        assert!((emb.row(0)[1] + 1.2).abs() < 1e-15);
    }

    #[test]
    fn embeddings_binary_roundtrip() {
        let emb = FeatureMatrix::new(3, 2, vec![0.5, -1.5, 2.0, 0.0, 1.0, -0.25]).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("emb.bin");
        save_embeddings(&path, &emb).unwrap();
        let back = load_embeddings(&path).unwrap();
        assert_eq!(back.values(), emb.values());
    }

    #[test]
    fn config_parsing_with_profile() {
        let cfg =
            ConfigFile::parse_str("profile = cora\nlr = 0.01\nscheme = gs_gs\nseed = 3\n", "t")
                .unwrap();
        let tc = TrainConfig::from_config(&cfg).unwrap();
        assert_eq!(tc.batch_size, 200);
        assert_eq!(tc.sample_size, 3000);
        assert_eq!(tc.register_k, 100);
        assert_eq!(tc.patience, 50);
        assert_eq!(tc.lr, 0.01);
        assert_eq!(tc.scheme, AugmentationScheme::GsGs);
        assert_eq!(tc.seed, 3);
        // clamping to a small graph
        let eff = tc.effective(100);
        assert_eq!(eff.sample_size, 100);
    }

    #[test]
    fn validate_rejects_bad_shapes() {
        let cfg = TrainConfig {
            batch_size: 10,
            sample_size: 5,
            ..TrainConfig::default()
        };
        assert!(cfg.validate(100).is_err());
        let cfg = TrainConfig {
            batch_size: 2,
            sample_size: 5,
            patience: 10,
            max_epochs: 5,
            ..TrainConfig::default()
        };
        assert!(cfg.validate(100).is_err());
    }
}
