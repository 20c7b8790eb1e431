//! Property tests over the public surface: persistence round-trips and the
//! structural invariants that every derived graph must keep.

use proptest::prelude::*;

use gzoom_core::diffusion::{diffuse_all, sparsify_diffusion, DiffusionConfig, Sparsify};
use gzoom_core::graph::{load_graph, random_walk_normalize, symmetric_normalize, SparseGraph};
use gzoom_core::sampling::{build_register, edge_dropout, sample_batch};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn arb_graph() -> impl Strategy<Value = SparseGraph> {
    (
        2usize..24,
        proptest::collection::vec((0usize..24, 0usize..24, 0.1f64..4.0), 0..60),
    )
        .prop_map(|(n, raw)| {
            let edges: Vec<(usize, usize, f64)> =
                raw.into_iter().map(|(u, v, w)| (u % n, v % n, w)).collect();
            SparseGraph::from_edges(n, &edges).unwrap()
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn edge_list_roundtrip_is_identity(g in arb_graph()) {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("g.tsv");
        g.save_edge_list(&path, &[]).unwrap();
        let back = load_graph(&path).unwrap();
        prop_assert_eq!(&back, &g);
        back.validate().unwrap();
    }

    #[test]
    fn symmetric_normalize_is_symmetric(g in arb_graph()) {
        let s = symmetric_normalize(&g, true);
        s.validate().unwrap(); // validate() includes the symmetry check
        for u in 0..s.node_count() {
            let (cols, ws) = s.neighbors(u);
            for (&v, &w) in cols.iter().zip(ws) {
                let back = s.weight_of(v, u).unwrap();
                prop_assert!((w - back).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn random_walk_columns_sum_to_one(g in arb_graph()) {
        let t = random_walk_normalize(&g);
        let n = t.node_count();
        let mut col_sums = vec![0.0; n];
        for u in 0..n {
            let (cols, ws) = t.neighbors(u);
            for (&v, &w) in cols.iter().zip(ws) {
                col_sums[v] += w;
            }
        }
        for (v, s) in col_sums.iter().enumerate() {
            prop_assert!((s - 1.0).abs() < 1e-12, "column {} sums to {}", v, s);
        }
    }

    #[test]
    fn edge_dropout_keeps_count_and_invariants(g in arb_graph(), p in 0.0f64..1.0, seed in 0u64..1000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let out = edge_dropout(&g, p, &mut rng).unwrap();
        out.graph.validate().unwrap();
        if !out.shortfall {
            prop_assert_eq!(out.graph.edge_count(), g.edge_count());
        }
    }

    #[test]
    fn sparsified_diffusion_is_a_valid_graph(g in arb_graph(), top in 1usize..6) {
        let cfg = DiffusionConfig { sparsify: Sparsify::Top(top), ..DiffusionConfig::default() };
        let rows = diffuse_all(&g, &cfg).unwrap();
        let sparse = sparsify_diffusion(&rows, &cfg).unwrap();
        sparse.validate().unwrap();
        prop_assert_eq!(sparse.node_count(), g.node_count());
    }

    #[test]
    fn batch_views_align_and_replay(g in arb_graph(), seed in 0u64..500) {
        let n = g.node_count();
        let cfg = DiffusionConfig { sparsify: Sparsify::Top(4), ..DiffusionConfig::default() };
        let rows = diffuse_all(&g, &cfg).unwrap();
        let gd = sparsify_diffusion(&rows, &cfg).unwrap();
        let k = (n - 1).min(2);
        let register = build_register(&rows, k).unwrap();
        let b = 2usize.min(n);
        let p = n; // always large enough for any core
        let batch1 = sample_batch(&g, &gd, &register, b, p, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        let batch2 = sample_batch(&g, &gd, &register, b, p, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        prop_assert_eq!(&batch1.node_set, &batch2.node_set);
        batch1.view1.validate().unwrap();
        batch1.view2.validate().unwrap();
        // identical local ordering across views
        for (li, &gi) in batch1.node_set.iter().enumerate() {
            prop_assert_eq!(batch1.local_index[&gi], li);
        }
        prop_assert_eq!(batch1.view1.node_count(), batch1.view2.node_count());
    }
}
