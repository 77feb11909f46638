mod common;

use common::*;
use proptest::prelude::*;
use qcmhm_core::calibration::{fuse_views, retrieve_spo, Calibration};
use qcmhm_core::nn::Ctx;
use qcmhm_tensor::{finite_diff_check, Graph, ParamStore, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn calibration(seed: u64, width: usize, hidden: usize) -> (ParamStore, Calibration) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = ParamStore::new();
    let cal = Calibration::new(&mut params, &mut rng, "cal", width, hidden);
    (params, cal)
}

#[test]
fn view_alignment_matches_loop_oracle() {
    let worst = sweeps::view_attention(3, 100);
    assert!(worst <= 1e-10, "{worst}");
}

#[test]
fn gate_and_view_fusion_match_loop_oracle() {
    let worst = sweeps::gate_fusion(5, 100);
    assert!(worst <= 1e-10, "{worst}");
}

#[test]
fn single_fact_gets_all_the_weight() {
    let (params, cal) = calibration(1, 4, 3);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let tokens = randn(&mut rng, 5, 4);
    let fact = randn(&mut rng, 1, 4);
    let mut g = Graph::new();
    let mut cx = Ctx::new(&mut g, &params);
    let tv = cx.g.constant(tokens);
    let fv = cx.g.constant(fact.clone());
    let out = cal.calibrate(&mut cx, tv, fv).unwrap();
    for alpha in out.alphas {
        assert!(cx.value(alpha).data().iter().all(|&a| a == 1.0));
    }
    let (aligned, _) = cal.question_views[1].align(&mut cx, tv, fv).unwrap();
    for r in 0..5 {
        assert_eq!(cx.value(aligned).row_slice(r), fact.row_slice(0));
    }
}

#[test]
fn zero_fact_rows_still_give_finite_output() {
    let (params, cal) = calibration(4, 4, 3);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut g = Graph::new();
    let mut cx = Ctx::new(&mut g, &params);
    let tv = cx.g.constant(randn(&mut rng, 3, 4));
    let fv = cx.g.constant(Tensor::zeros(2, 4));
    let out = cal.calibrate(&mut cx, tv, fv).unwrap();
    assert!(cx.value(out.q_sem).all_finite());
    // Identical keys split the weight evenly.
    for alpha in out.alphas {
        assert!(cx.value(alpha).data().iter().all(|&a| (a - 0.5).abs() < 1e-15));
    }
}

#[test]
fn fusion_input_is_base_then_each_view() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut params = ParamStore::new();
    let proj = qcmhm_core::nn::Linear::new(&mut params, &mut rng, "p", 12, 12, false);
    // Identity projection exposes the stacked row directly.
    params.set(proj.w, Tensor::identity(12));
    let mut g = Graph::new();
    let mut cx = Ctx::new(&mut g, &params);
    let base = cx.g.constant(Tensor::row(vec![1.0, 2.0]));
    let a = cx.g.constant(Tensor::row(vec![3.0, 4.0]));
    let b = cx.g.constant(Tensor::row(vec![5.0, 6.0]));
    let c = cx.g.constant(Tensor::row(vec![7.0, 8.0]));
    let out = fuse_views(&mut cx, &proj, base, [a, b, c]).unwrap();
    assert_eq!(
        cx.value(out).data(),
        &[1.0, 2.0, 3.0, 4.0, 1.0, 2.0, 5.0, 6.0, 1.0, 2.0, 7.0, 8.0]
    );
}

#[test]
fn calibration_gradients_match_finite_differences() {
    for seed in 0..5 {
        let (params, cal) = calibration(seed, 3, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
        let tokens = randn(&mut rng, 3, 3);
        let facts = randn(&mut rng, 2, 3);
        let weights = randn(&mut rng, 3, 3);
        let err = finite_diff_check(
            &params,
            |g, p| {
                let mut cx = Ctx::new(g, p);
                let tv = cx.g.constant(tokens.clone());
                let fv = cx.g.constant(facts.clone());
                let out = cal.calibrate(&mut cx, tv, fv).unwrap();
                let w = cx.g.constant(weights.clone());
                let prod = cx.g.mul(out.q_sem, w)?;
                Ok(cx.g.sum_all(prod)?)
            },
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "seed {seed}: {err}");
    }
}

fn permute(t: &Tensor, order: &[usize]) -> Tensor {
    Tensor::from_rows(&order.iter().map(|&i| t.row_slice(i).to_vec()).collect::<Vec<_>>())
}

fn q_sem(params: &ParamStore, cal: &Calibration, tokens: &Tensor, facts: &Tensor) -> Tensor {
    let mut g = Graph::new();
    let mut cx = Ctx::frozen(&mut g, params);
    let tv = cx.g.constant(tokens.clone());
    let fv = cx.g.constant(facts.clone());
    let out = cal.calibrate(&mut cx, tv, fv).unwrap();
    cx.value(out.q_sem).clone()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn token_order_permutes_output_and_fact_order_is_irrelevant(
        seed in 0u64..1000,
        n in 1usize..6,
        m in 1usize..6,
        shift in 0usize..6,
    ) {
        let (params, cal) = calibration(seed, 4, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 1);
        let tokens = randn(&mut rng, n, 4);
        let facts = randn(&mut rng, m, 4);
        let base = q_sem(&params, &cal, &tokens, &facts);

        let t_order: Vec<usize> = (0..n).map(|i| (i + shift) % n).collect();
        let got = q_sem(&params, &cal, &permute(&tokens, &t_order), &facts);
        prop_assert!(got.max_abs_diff(&permute(&base, &t_order)) < 1e-12);

        let f_order: Vec<usize> = (0..m).rev().collect();
        let got = q_sem(&params, &cal, &tokens, &permute(&facts, &f_order));
        prop_assert!(got.max_abs_diff(&base) < 1e-12);
    }

    #[test]
    fn retrieval_equals_sorted_brute_force(
        pool in prop::collection::vec(prop::collection::vec(-3.0f64..3.0, 4), 0..20),
        query in prop::collection::vec(-3.0f64..3.0, 4),
        k in 1usize..25,
    ) {
        let entries: Vec<(usize, &[f64])> = pool.iter().enumerate().map(|(i, v)| (100 - i, v.as_slice())).collect();
        let got = retrieve_spo(&query, &entries, k);

        let cos = |v: &[f64]| {
            let dot: f64 = v.iter().zip(&query).map(|(a, b)| a * b).sum();
            let na = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            let nb = query.iter().map(|x| x * x).sum::<f64>().sqrt();
            if na == 0.0 || nb == 0.0 { 0.0 } else { dot / (na * nb) }
        };
        let mut want: Vec<(usize, f64)> = entries.iter().map(|&(f, v)| (f, cos(v))).collect();
        want.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
        want.truncate(k);

        prop_assert_eq!(got.len(), want.len());
        for (g, (_, s)) in got.iter().zip(&want) {
            prop_assert!((g.score - s).abs() < 1e-12);
            prop_assert_eq!(entries[g.index].0, g.fact);
        }
        for w in got.windows(2) {
            prop_assert!(w[0].score > w[1].score || (w[0].score == w[1].score && w[0].fact < w[1].fact));
        }
    }
}
