mod common;

use common::*;
use proptest::prelude::*;
use qcmhm_core::answer::{qa_loss, softmax, AnswerDistribution, AnswerHead, AnswerId, Candidates, Slots};
use qcmhm_core::nn::Ctx;
use qcmhm_tensor::{finite_diff_check, Graph, ParamStore, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn candidate_scores_match_complex_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(41);
    for case in 0..100 {
        let (entities, times, dim) = (rng.random_range(2..7), rng.random_range(2..6), rng.random_range(1..4));
        let mut params = ParamStore::new();
        let ent = params.add("kg.entity", randn(&mut rng, entities, 2 * dim));
        let tim = params.add("kg.time", randn(&mut rng, times, 2 * dim));
        let head = AnswerHead::new(&mut params, &mut rng, "head", 3, ent, tim);
        let q_ent = randn(&mut rng, 1, 2 * dim);
        let q_tim = randn(&mut rng, 1, 2 * dim);
        let slots = Slots {
            subject: rng.random_range(0..entities),
            time: (case % 2 == 0).then(|| rng.random_range(0..times)),
            object: (case % 3 == 0).then(|| rng.random_range(0..entities)),
        };
        let candidates = Candidates {
            entities: (0..entities).filter(|_| rng.random_bool(0.7)).collect(),
            times: (0..times).filter(|_| rng.random_bool(0.7)).collect(),
        };
        if candidates.is_empty() {
            continue;
        }

        let mut g = Graph::new();
        let mut cx = Ctx::new(&mut g, &params);
        let qe = cx.g.constant(q_ent.clone());
        let qt = cx.g.constant(q_tim.clone());
        let logits = head.score_candidates(&mut cx, slots, &candidates, qe, qt).unwrap();
        let got = cx.value(logits).data().to_vec();

        let e = params.get(ent);
        let t = params.get(tim);
        let s = e.row_slice(slots.subject);
        let e_t = slots.time.map_or(params.get(head.placeholder_time).row_slice(0), |i| t.row_slice(i));
        let e_o = slots.object.map_or(params.get(head.placeholder_entity).row_slice(0), |i| e.row_slice(i));
        let mut want: Vec<f64> = candidates
            .entities
            .iter()
            .map(|&c| sweeps::complex_oracle(s, q_ent.data(), e.row_slice(c), e_t))
            .collect();
        want.extend(candidates.times.iter().map(|&c| sweeps::complex_oracle(s, q_tim.data(), e_o, t.row_slice(c))));
        assert_eq!(got.len(), want.len());
        for (a, b) in got.iter().zip(&want) {
            assert!((a - b).abs() <= 1e-10, "{a} vs {b}");
        }
    }
}

#[test]
fn empty_candidates_are_unanswerable() {
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let mut params = ParamStore::new();
    let ent = params.add("kg.entity", randn(&mut rng, 2, 2));
    let tim = params.add("kg.time", randn(&mut rng, 2, 2));
    let head = AnswerHead::new(&mut params, &mut rng, "head", 2, ent, tim);
    let mut g = Graph::new();
    let mut cx = Ctx::new(&mut g, &params);
    let q = cx.g.constant(Tensor::zeros(1, 2));
    let slots = Slots { subject: 0, time: None, object: None };
    let err = head.score_candidates(&mut cx, slots, &Candidates { entities: vec![], times: vec![] }, q, q).unwrap_err();
    assert!(matches!(err, qcmhm_core::Error::Unanswerable(_)));
}

#[test]
fn uniform_logits_cost_log_of_candidate_count() {
    for c in 1..12 {
        let params = ParamStore::new();
        let mut g = Graph::new();
        let mut cx = Ctx::new(&mut g, &params);
        let logits = cx.g.constant(Tensor::full(1, c, 0.7));
        let loss = qa_loss(&mut cx, logits, &[c - 1]).unwrap();
        assert!((cx.g.scalar(loss).unwrap() - (c as f64).ln()).abs() < 1e-12);
    }
}

#[test]
fn head_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(43);
    for _ in 0..5 {
        let mut params = ParamStore::new();
        let ent = params.add("kg.entity", randn(&mut rng, 4, 4));
        let tim = params.add("kg.time", randn(&mut rng, 3, 4));
        let head = AnswerHead::new(&mut params, &mut rng, "head", 3, ent, tim);
        let q_fin = randn(&mut rng, 1, 3);
        let candidates = Candidates { entities: vec![0, 2, 3], times: vec![0, 1, 2] };
        let slots = Slots { subject: 1, time: None, object: None };
        let err = finite_diff_check(
            &params,
            |g, p| {
                let mut cx = Ctx::new(g, p);
                let q = cx.g.constant(q_fin.clone());
                let (qe, qt) = head.project(&mut cx, q).unwrap();
                let logits = head.score_candidates(&mut cx, slots, &candidates, qe, qt).unwrap();
                Ok(qa_loss(&mut cx, logits, &[1, 4]).unwrap())
            },
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "{err}");
    }
}

#[test]
fn distribution_ranks_the_largest_logit_first() {
    let cands = vec![AnswerId::Entity(3), AnswerId::Entity(8), AnswerId::Time(1), AnswerId::Time(4)];
    let d = AnswerDistribution::from_logits(cands, &[0.1, 2.5, -1.0, 2.4]);
    let ranked = d.ranked();
    assert_eq!(ranked[0].0, AnswerId::Entity(8));
    assert_eq!(ranked[1].0, AnswerId::Time(4));
    assert!((d.probs.iter().sum::<f64>() - 1.0).abs() < 1e-12);
}

proptest! {
    #[test]
    fn loss_gradient_is_softmax_minus_target(
        logits in prop::collection::vec(-20.0f64..20.0, 1..12),
        picks in prop::collection::btree_set(0usize..12, 1..4),
    ) {
        let c = logits.len();
        let gold: Vec<usize> = picks.into_iter().filter(|&i| i < c).collect();
        prop_assume!(!gold.is_empty());
        let params = ParamStore::new();
        let mut g = Graph::new();
        let mut cx = Ctx::new(&mut g, &params);
        let x = cx.g.input(Tensor::row(logits.clone()), true);
        let loss = qa_loss(&mut cx, x, &gold).unwrap();
        let grads = g.backward(loss).unwrap();
        let p = softmax(&logits);
        for (i, got) in grads.wrt(x).unwrap().data().iter().enumerate() {
            let target = if gold.contains(&i) { 1.0 / gold.len() as f64 } else { 0.0 };
            prop_assert!((got - (p[i] - target)).abs() < 1e-12);
        }
    }

    #[test]
    fn shifting_logits_changes_nothing(
        logits in prop::collection::vec(-20.0f64..20.0, 1..12),
        shift in -50.0f64..50.0,
    ) {
        let shifted: Vec<f64> = logits.iter().map(|x| x + shift).collect();
        let (a, b) = (softmax(&logits), softmax(&shifted));
        for (x, y) in a.iter().zip(&b) {
            prop_assert!((x - y).abs() < 1e-12);
        }
        prop_assert!((a.iter().sum::<f64>() - 1.0).abs() < 1e-12);

        let params = ParamStore::new();
        let mut g = Graph::new();
        let mut cx = Ctx::new(&mut g, &params);
        let la = cx.g.constant(Tensor::row(logits));
        let lb = cx.g.constant(Tensor::row(shifted));
        let (la, lb) = (qa_loss(&mut cx, la, &[0]).unwrap(), qa_loss(&mut cx, lb, &[0]).unwrap());
        prop_assert!((cx.g.scalar(la).unwrap() - cx.g.scalar(lb).unwrap()).abs() < 1e-10);
    }
}
