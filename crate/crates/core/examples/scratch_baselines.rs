//! Scratch: measure random-init and raw-feature probe baselines.
use gzoom_core::diffusion::{diffuse_all, sparsify_diffusion, DiffusionConfig};
use gzoom_core::eval::linear_probe_tuned;
use gzoom_core::graph::{load_features, load_graph, load_labels, load_splits};
use gzoom_core::model::{Activation, ModelParams};
use gzoom_core::trainer::infer_embeddings;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() {
    let teleport: f64 = std::env::args()
        .nth(1)
        .and_then(|a| a.parse().ok())
        .unwrap_or(0.15);
    let hidden: usize = std::env::args()
        .nth(2)
        .and_then(|a| a.parse().ok())
        .unwrap_or(512);
    for name in ["cora", "citeseer"] {
        let dir = std::path::Path::new("data").join(name);
        let g = load_graph(&dir.join("edges.tsv")).unwrap();
        let xs = load_features(&dir.join("features.bin"))
            .unwrap()
            .row_normalized();
        let labels = load_labels(&dir.join("labels.tsv"), g.node_count()).unwrap();
        let split = load_splits(&dir.join("splits")).unwrap();
        let dcfg = DiffusionConfig {
            teleport,
            ..DiffusionConfig::default()
        };
        let rows = diffuse_all(&g, &dcfg).unwrap();
        let gd = sparsify_diffusion(&rows, &dcfg).unwrap();
        let (_, raw) = linear_probe_tuned(&xs, &labels, &split, 2000).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let params = ModelParams::init(xs.dims(), hidden, Activation::PRelu, &mut rng);
        let emb = infer_embeddings(&params, &g, &gd, &xs, 1024).unwrap();
        let (_, rand_probe) = linear_probe_tuned(&emb, &labels, &split, 2000).unwrap();
        println!(
            "{name} (t={teleport}, d={hidden}): raw-features {:.4}, random-init {:.4}",
            raw.accuracy, rand_probe.accuracy
        );
    }
}
