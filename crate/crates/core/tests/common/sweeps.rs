//! Randomised comparisons of library computations against the loop
//! oracles. Each sweep returns the largest absolute deviation it saw.

use num_complex::Complex64;
use qcmhm_core::calibration::{Calibration, View, ViewAttention};
use qcmhm_core::embedding::KgEmbeddings;
use qcmhm_core::gnn::{diffuse, diffusion_matrix, edge_rows, pool, propagate, EdgeAttention};
use qcmhm_core::nn::Ctx;
use qcmhm_tensor::{Graph, ParamStore};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;

fn complex(row: &[f64]) -> Vec<Complex64> {
    let d = row.len() / 2;
    (0..d).map(|i| Complex64::new(row[i], row[d + i])).collect()
}

/// `Re Σ s·r·t·conj(o)` over complex coordinates.
pub fn complex_oracle(s: &[f64], r: &[f64], o: &[f64], t: &[f64]) -> f64 {
    let (s, r, o, t) = (complex(s), complex(r), complex(o), complex(t));
    (0..s.len()).map(|k| s[k] * r[k] * t[k] * o[k].conj()).sum::<Complex64>().re
}

pub fn tcomplex(seed: u64, cases: usize) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..cases {
        let (ne, nr, nt, dim) = (rng.random_range(1..8), rng.random_range(1..5), rng.random_range(1..6), rng.random_range(1..6));
        let emb = KgEmbeddings::random(ne, nr, nt, dim, 1.0, &mut rng).unwrap();
        let (s, r, o, t) = (rng.random_range(0..ne), rng.random_range(0..nr), rng.random_range(0..ne), rng.random_range(0..nt));
        let got = emb.tcomplex_score(s, r, o, t).unwrap();
        let row = |p| emb.params.get(p);
        let want = complex_oracle(
            row(emb.entity).row_slice(s),
            row(emb.relation).row_slice(r),
            row(emb.entity).row_slice(o),
            row(emb.time).row_slice(t),
        );
        worst = worst.max((got - want).abs());
    }
    worst
}

/// Attention weights and aligned rows of single views.
pub fn view_attention(seed: u64, cases: usize) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for case in 0..cases {
        let (width, hidden) = (rng.random_range(1..6), rng.random_range(1..5));
        let (n, m) = (rng.random_range(1..6), rng.random_range(1..6));
        let view = View::ALL[case % 3];
        let mut params = ParamStore::new();
        let att = ViewAttention::new(&mut params, &mut rng, "v", view, width, hidden);
        let q = randn(&mut rng, n, width);
        let k = randn(&mut rng, m, width);

        let mut g = Graph::new();
        let mut cx = Ctx::new(&mut g, &params);
        let qv = cx.g.constant(q.clone());
        let kv = cx.g.constant(k.clone());
        let (aligned, alpha) = att.align(&mut cx, qv, kv).unwrap();

        let (want_aligned, want_alpha) = view_oracle(view, params.get(att.w.w), params.get(att.v), &rows(&q), &rows(&k));
        worst = worst
            .max(max_diff(&rows(cx.value(alpha)), &want_alpha))
            .max(max_diff(&rows(cx.value(aligned)), &want_aligned));
    }
    worst
}

/// Multi-view fusion followed by the gate, through `Calibration::calibrate`.
pub fn gate_fusion(seed: u64, cases: usize) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..cases {
        let (width, hidden) = (rng.random_range(1..6), rng.random_range(1..5));
        let mut params = ParamStore::new();
        let cal = Calibration::new(&mut params, &mut rng, "cal", width, hidden);
        let (n, m) = (rng.random_range(1..6), rng.random_range(1..6));
        let tokens = randn(&mut rng, n, width);
        let facts = randn(&mut rng, m, width);

        let mut g = Graph::new();
        let mut cx = Ctx::new(&mut g, &params);
        let tv = cx.g.constant(tokens.clone());
        let fv = cx.g.constant(facts.clone());
        let out = cal.calibrate(&mut cx, tv, fv).unwrap();

        let (t, f) = (rows(&tokens), rows(&facts));
        let fuse = |views: &[ViewAttention], fuse: &qcmhm_core::nn::Linear, base: &Mat, other: &Mat| -> Mat {
            let aligned: Vec<Mat> = views
                .iter()
                .map(|a| view_oracle(a.view, params.get(a.w.w), params.get(a.v), base, other).0)
                .collect();
            (0..base.len())
                .map(|i| {
                    let stacked: Vec<f64> = aligned.iter().flat_map(|p| base[i].iter().chain(p[i].iter()).copied()).collect();
                    linear(&params, fuse, &stacked)
                })
                .collect()
        };
        let q_hat = fuse(&cal.question_views, &cal.question_fuse, &t, &f);
        let s_hat = fuse(&cal.fact_views, &cal.fact_fuse, &f, &t);
        let q_sem = gate_oracle(&params, &cal.gate.summary, &cal.gate.w_g, &q_hat, &s_hat);
        worst = worst
            .max(max_diff(&rows(cx.value(out.q_hat)), &q_hat))
            .max(max_diff(&rows(cx.value(out.s_hat)), &s_hat))
            .max(max_diff(&rows(cx.value(out.q_sem)), &q_sem));
    }
    worst
}

/// Row-stochastic edge attention over extracted subgraphs of random stores.
pub fn edge_attention(seed: u64, cases: usize) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..cases {
        let n = rng.random_range(2..9);
        let facts = rng.random_range(1..12);
        let store = random_store(&mut rng, n, facts, 3, 4);
        let sub = store.extract_subgraph(&[0], 2).unwrap();
        let (width, kg_width, hidden) = (rng.random_range(1..5), 2 * rng.random_range(1..3), rng.random_range(1..5));
        let mut params = ParamStore::new();
        let layer = EdgeAttention::new(&mut params, &mut rng, "att", width, kg_width, hidden);
        let rel = randn(&mut rng, store.num_relations(), kg_width);
        let time = randn(&mut rng, store.num_timestamps(), kg_width);
        let h = randn(&mut rng, sub.num_nodes(), width);

        let mut g = Graph::new();
        let mut cx = Ctx::new(&mut g, &params);
        let hv = cx.g.constant(h.clone());
        let rv = cx.g.constant(rel.clone());
        let tv = cx.g.constant(time.clone());
        let att = layer.forward(&mut cx, hv, &sub, rv, tv).unwrap();

        let (src, dst) = edge_rows(&sub);
        let edges: Vec<RowEdge> = (0..src.len()).map(|i| (src[i], dst[i], sub.edges[i].rel, sub.edges[i].time)).collect();
        let weights = EdgeWeights {
            w_src: params.get(layer.w_src.w),
            w_dst: params.get(layer.w_dst.w),
            w_rel: params.get(layer.w_rel.w),
            w_time: params.get(layer.w_time.w),
            beta: params.get(layer.beta),
        };
        let want = edge_attention_oracle(sub.num_nodes(), &edges, &rows(&h), &rows(&rel), &rows(&time), &weights);
        worst = worst.max(max_diff(&rows(cx.value(att.matrix)), &want));
    }
    worst
}

/// Weighted matrix powers, both the plain and the graph version, and the
/// propagation that applies them.
pub fn diffusion_powers(seed: u64, cases: usize) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..cases {
        let n = rng.random_range(1..8);
        let taus = rng.random_range(1..5);
        let a = randn(&mut rng, n, n);
        let xi = randn(&mut rng, 1, taus);
        let h = randn(&mut rng, n, 3);
        let want = diffusion_oracle(&rows(&a), xi.data());

        let params = ParamStore::new();
        let mut g = Graph::new();
        let mut cx = Ctx::new(&mut g, &params);
        let (av, xv, hv) = (cx.g.constant(a.clone()), cx.g.constant(xi.clone()), cx.g.constant(h.clone()));
        let d = diffusion_matrix(&mut cx, av, xv).unwrap();
        let p = propagate(&mut cx, av, xv, hv).unwrap();
        worst = worst
            .max(max_diff(&rows(&diffuse(&a, xi.data()).unwrap()), &want))
            .max(max_diff(&rows(cx.value(d)), &want))
            .max(max_diff(&rows(cx.value(p)), &mm(&want, &rows(&h))));
    }
    worst
}

pub fn pooling(seed: u64, cases: usize) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..cases {
        let (n, d) = (rng.random_range(1..10), rng.random_range(1..6));
        let h = randn(&mut rng, n, d);
        let params = ParamStore::new();
        let mut g = Graph::new();
        let mut cx = Ctx::new(&mut g, &params);
        let hv = cx.g.constant(h.clone());
        let pooled = pool(&mut cx, hv).unwrap();
        worst = worst.max(max_diff(&rows(cx.value(pooled)), &vec![column_means(&rows(&h))]));
    }
    worst
}
