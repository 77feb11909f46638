mod common;

use common::*;
use proptest::prelude::*;
use qcmhm_core::gnn::{diffuse, extract_path, EdgeAttention, KnowledgeFusion};
use qcmhm_core::nn::Ctx;
use qcmhm_core::store::KgStore;
use qcmhm_tensor::{finite_diff_check, finite_diff_check_params, Graph, ParamStore, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn edge_attention_matches_loop_oracle() {
    let worst = sweeps::edge_attention(21, 100);
    assert!(worst <= 1e-10, "{worst}");
}

#[test]
fn diffusion_and_propagation_match_loop_oracle() {
    let worst = sweeps::diffusion_powers(22, 100).max(sweeps::pooling(22, 100));
    assert!(worst <= 1e-10, "{worst}");
}

#[test]
fn chain_powers_shift_by_tau() {
    let n = 6;
    let mut a = Tensor::zeros(n, n);
    for i in 0..n - 1 {
        a.set(i, i + 1, 1.0);
    }
    for tau in 0..n {
        let mut xi = vec![0.0; tau + 1];
        xi[tau] = 1.0;
        let d = diffuse(&a, &xi).unwrap();
        for i in 0..n {
            for j in 0..n {
                let want = if j == i + tau { 1.0 } else { 0.0 };
                assert_eq!(d.get(i, j), want, "tau {tau} at ({i}, {j})");
            }
        }
    }
}

#[test]
fn nodes_without_out_edges_keep_a_self_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    let store = random_store(&mut rng, 4, 2, 1, 2);
    let isolated = KgStore::ingest(&[qcmhm_core::store::FactRecord::new(1, "a", "r", "a", "2000", "2000")]).unwrap();
    for store in [store, isolated] {
        let sub = store.extract_subgraph(&[0], 0).unwrap();
        let mut params = ParamStore::new();
        let layer = EdgeAttention::new(&mut params, &mut rng, "att", 2, 2, 2);
        let mut g = Graph::new();
        let mut cx = Ctx::new(&mut g, &params);
        let h = cx.g.constant(randn(&mut rng, sub.num_nodes(), 2));
        let r = cx.g.constant(randn(&mut rng, store.num_relations(), 2));
        let t = cx.g.constant(randn(&mut rng, store.num_timestamps(), 2));
        let att = layer.forward(&mut cx, h, &sub, r, t).unwrap();
        for row in rows(cx.value(att.matrix)) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }
}

#[test]
fn chain_locality_is_exact() {
    for (layers, aleph) in [(1, 1), (1, 2), (2, 2), (1, 4)] {
        let reach = layers * aleph;
        for far in 1..6 {
            let moved = influence(layers, aleph, 0, far);
            if far > reach {
                assert_eq!(moved, 0.0, "L={layers} aleph={aleph} far={far}");
            } else {
                assert!(moved > 0.0, "L={layers} aleph={aleph} far={far}");
            }
        }
    }
}

#[test]
fn two_step_diffusion_sees_two_hops_in_one_layer() {
    assert_eq!(influence(1, 1, 0, 2), 0.0);
    assert!(influence(1, 2, 0, 2) > 0.0);
}

#[test]
fn multihop_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(24);
    for seed in 0..4 {
        let store = random_store(&mut rng, 5, 6, 2, 3);
        let sub = store.extract_subgraph(&[0], 2).unwrap();
        let (params, mh) = multihop(&store, seed, 2, 2);
        let target = randn(&mut rng, 1, 4);
        let err = finite_diff_check(
            &params,
            |g, p| {
                let mut cx = Ctx::new(g, p);
                let vars = mh.forward(&mut cx, &sub).unwrap();
                let t = cx.g.constant(target.clone());
                let prod = cx.g.mul(vars.q_mlh, t)?;
                cx.g.sum_all(prod)
            },
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "seed {seed}: {err}");

        let xi_err = finite_diff_check_params(
            &params,
            &[mh.xi],
            |g, p| {
                let mut cx = Ctx::new(g, p);
                let vars = mh.forward(&mut cx, &sub).unwrap();
                let sq = cx.g.mul(vars.states, vars.states)?;
                cx.g.sum_all(sq)
            },
            1e-6,
        )
        .unwrap();
        assert!(xi_err < 1e-6, "seed {seed}: {xi_err}");
    }
}

#[test]
fn fusion_returns_one_row() {
    let mut rng = ChaCha8Rng::seed_from_u64(25);
    let mut params = ParamStore::new();
    let fusion = KnowledgeFusion::new(&mut params, &mut rng, "fusion", 4, 2);
    let mut g = Graph::new();
    let mut cx = Ctx::new(&mut g, &params);
    let q = cx.g.constant(randn(&mut rng, 5, 4));
    let m = cx.g.constant(randn(&mut rng, 1, 4));
    let out = fusion.forward(&mut cx, q, m).unwrap();
    assert_eq!(cx.value(out).shape(), &[1, 4]);
    assert!(cx.value(out).all_finite());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn best_first_path_matches_exhaustive_max_product(
        seed in 0u64..1_000_000,
        n in 1usize..=10,
        density in 0.1f64..0.6,
        starts in prop::collection::vec(0usize..10, 1..3),
        target in 0usize..10,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let trace = random_trace(&mut rng, n, density);
        let starts: Vec<usize> = starts.into_iter().filter(|&s| s < n).collect();
        prop_assume!(!starts.is_empty() && target < n);
        let a = rows(&trace.layers[0]);
        let path = extract_path(&trace, &starts.iter().map(|&s| trace.nodes[s]).collect::<Vec<_>>(), trace.nodes[target]);
        match max_product_oracle(&a, &starts, target) {
            None => {
                prop_assert!(path.nodes.is_empty());
                prop_assert!(path.diagnostic.is_some());
            }
            Some(best) => {
                prop_assert!((path.score - best).abs() <= 1e-12 * best.max(1.0));
                prop_assert!(starts.iter().any(|&s| trace.nodes[s] == path.nodes[0]));
                prop_assert_eq!(*path.nodes.last().unwrap(), trace.nodes[target]);
                let mut product = 1.0;
                for step in &path.steps {
                    let (i, j) = ((step.from - 100) / 3, (step.to - 100) / 3);
                    prop_assert!(a[i][j] > 0.0);
                    prop_assert_eq!(step.weight, a[i][j]);
                    product *= a[i][j];
                }
                prop_assert!((product - path.score).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn attention_rows_are_stochastic(seed in 0u64..10_000, n in 2usize..8, facts in 1usize..10) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let store = random_store(&mut rng, n, facts, 2, 3);
        let sub = store.extract_subgraph(&[0], 2).unwrap();
        let (params, mh) = multihop(&store, seed, 2, 2);
        let mut g = Graph::new();
        let mut cx = Ctx::frozen(&mut g, &params);
        let vars = mh.forward(&mut cx, &sub).unwrap();
        for att in &vars.attention {
            for row in rows(cx.value(att.matrix)) {
                prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
                prop_assert!(row.iter().all(|&x| x >= 0.0));
            }
        }
    }
}
