//! Plain-loop reference implementations and small fixtures shared by the
//! integration tests.

#![allow(dead_code)]

pub mod sweeps;

use qcmhm_core::calibration::View;
use qcmhm_core::generate::{generate_dataset, Dataset, SyntheticWorldConfig};
use qcmhm_core::gnn::{AttentionTrace, MultiHop};
use qcmhm_core::nn::{Ctx, Linear};
use qcmhm_core::store::{FactRecord, KgStore};
use qcmhm_tensor::{Graph, ParamId, ParamStore, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub type Mat = Vec<Vec<f64>>;

pub fn rows(t: &Tensor) -> Mat {
    (0..t.rows()).map(|r| t.row_slice(r).to_vec()).collect()
}

pub fn mat(m: &Mat) -> Tensor {
    Tensor::from_rows(m)
}

pub fn randn<R: Rng>(rng: &mut R, r: usize, c: usize) -> Tensor {
    Tensor::randn(r, c, 1.0, rng)
}

/// `x W` for a row vector `x`.
pub fn vec_mat(x: &[f64], w: &Tensor) -> Vec<f64> {
    let mut out = vec![0.0; w.cols()];
    for (k, xk) in x.iter().enumerate() {
        for (j, o) in out.iter_mut().enumerate() {
            *o += xk * w.get(k, j);
        }
    }
    out
}

pub fn linear(params: &ParamStore, lin: &Linear, x: &[f64]) -> Vec<f64> {
    let mut y = vec_mat(x, params.get(lin.w));
    if let Some(b) = lin.b {
        for (yj, bj) in y.iter_mut().zip(params.get(b).data()) {
            *yj += bj;
        }
    }
    y
}

pub fn mm(a: &Mat, b: &Mat) -> Mat {
    let n = a.len();
    let m = b[0].len();
    let mut out = vec![vec![0.0; m]; n];
    for i in 0..n {
        for j in 0..m {
            for k in 0..b.len() {
                out[i][j] += a[i][k] * b[k][j];
            }
        }
    }
    out
}

pub fn softmax(v: &[f64]) -> Vec<f64> {
    let max = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = v.iter().map(|x| (x - max).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|x| x / s).collect()
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub fn max_diff(a: &Mat, b: &Mat) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .flat_map(|(x, y)| {
            assert_eq!(x.len(), y.len());
            x.iter().zip(y).map(|(p, q)| (p - q).abs())
        })
        .fold(0.0, f64::max)
}

/// One view's weights and aligned rows, `(aligned, alpha)`.
pub fn view_oracle(view: View, w: &Tensor, v: &Tensor, queries: &Mat, keys: &Mat) -> (Mat, Mat) {
    let mut alpha = Vec::new();
    for q in queries {
        let logits: Vec<f64> = keys
            .iter()
            .map(|k| {
                let combined: Vec<f64> = match view {
                    View::Concat => q.iter().chain(k.iter()).copied().collect(),
                    View::Dot => q.iter().zip(k).map(|(a, b)| a * b).collect(),
                    View::Minus => q.iter().zip(k).map(|(a, b)| a - b).collect(),
                };
                let hidden = vec_mat(&combined, w);
                hidden.iter().enumerate().map(|(h, x)| x.tanh() * v.get(h, 0)).sum()
            })
            .collect();
        alpha.push(softmax(&logits));
    }
    let aligned = mm(&alpha, keys);
    (aligned, alpha)
}

/// Gated merge of question rows with the squashed mean of fact rows.
pub fn gate_oracle(params: &ParamStore, summary: &Linear, w_g: &Linear, q_hat: &Mat, s_hat: &Mat) -> Mat {
    let d = s_hat[0].len();
    let mut mean = vec![0.0; d];
    for row in s_hat {
        for (m, x) in mean.iter_mut().zip(row) {
            *m += x / s_hat.len() as f64;
        }
    }
    let s: Vec<f64> = linear(params, summary, &mean).iter().map(|x| x.tanh()).collect();
    q_hat
        .iter()
        .map(|q| {
            let prod: Vec<f64> = q.iter().zip(&s).map(|(a, b)| a * b).collect();
            let g: Vec<f64> = linear(params, w_g, &prod).into_iter().map(sigmoid).collect();
            (0..d).map(|j| g[j] * q[j] + (1.0 - g[j]) * s[j]).collect()
        })
        .collect()
}

/// An edge as `(src row, dst row, relation id, time id)`.
pub type RowEdge = (usize, usize, usize, usize);

pub struct EdgeWeights<'a> {
    pub w_src: &'a Tensor,
    pub w_dst: &'a Tensor,
    pub w_rel: &'a Tensor,
    pub w_time: &'a Tensor,
    pub beta: &'a Tensor,
}

/// Row-stochastic attention matrix built edge by edge. Nodes without
/// outgoing edges keep a self loop of weight one.
pub fn edge_attention_oracle(n: usize, edges: &[RowEdge], h: &Mat, rel: &Mat, time: &Mat, w: &EdgeWeights) -> Mat {
    let logits: Vec<f64> = edges
        .iter()
        .map(|&(s, d, r, t)| {
            let a = vec_mat(&h[s], w.w_src);
            let b = vec_mat(&h[d], w.w_dst);
            let c = vec_mat(&rel[r], w.w_rel);
            let e = vec_mat(&time[t], w.w_time);
            (0..a.len())
                .map(|k| (a[k] + b[k] + c[k] + e[k]).max(0.0) * w.beta.get(k, 0))
                .sum()
        })
        .collect();
    let mut out = vec![vec![0.0; n]; n];
    for src in 0..n {
        let mine: Vec<usize> = (0..edges.len()).filter(|&i| edges[i].0 == src).collect();
        if mine.is_empty() {
            out[src][src] = 1.0;
            continue;
        }
        let p = softmax(&mine.iter().map(|&i| logits[i]).collect::<Vec<_>>());
        for (&i, pi) in mine.iter().zip(p) {
            out[src][edges[i].1] += pi;
        }
    }
    out
}

/// `Σ_τ ξ_τ A^τ` with every power formed by explicit triple loops.
pub fn diffusion_oracle(a: &Mat, xi: &[f64]) -> Mat {
    let n = a.len();
    let mut power: Mat = (0..n).map(|i| (0..n).map(|j| f64::from(u8::from(i == j))).collect()).collect();
    let mut out = vec![vec![0.0; n]; n];
    for (tau, &w) in xi.iter().enumerate() {
        if tau > 0 {
            power = mm(&power, a);
        }
        for i in 0..n {
            for j in 0..n {
                out[i][j] += w * power[i][j];
            }
        }
    }
    out
}

pub fn column_means(h: &Mat) -> Vec<f64> {
    let mut out = vec![0.0; h[0].len()];
    for row in h {
        for (o, x) in out.iter_mut().zip(row) {
            *o += x;
        }
    }
    out.iter().map(|x| x / h.len() as f64).collect()
}

/// Largest product of weights over simple paths from any start row to
/// `target`, by exhaustive depth-first enumeration. Zero-weight entries are
/// not edges. `None` when unreachable.
pub fn max_product_oracle(a: &Mat, starts: &[usize], target: usize) -> Option<f64> {
    fn walk(a: &Mat, at: usize, target: usize, score: f64, seen: &mut Vec<bool>, best: &mut Option<f64>) {
        if at == target {
            *best = Some(best.map_or(score, |b| b.max(score)));
            return;
        }
        for next in 0..a.len() {
            if !seen[next] && a[at][next] > 0.0 {
                seen[next] = true;
                walk(a, next, target, score * a[at][next], seen, best);
                seen[next] = false;
            }
        }
    }
    let mut best = None;
    for &s in starts {
        let mut seen = vec![false; a.len()];
        seen[s] = true;
        walk(a, s, target, 1.0, &mut seen, &mut best);
    }
    best
}

/// Random multigraph store over `n` entities named `e0..`.
pub fn random_store<R: Rng>(rng: &mut R, n: usize, facts: usize, relations: usize, years: i32) -> KgStore {
    let recs: Vec<FactRecord> = (0..facts)
        .map(|i| {
            let s = rng.random_range(0..n);
            let o = rng.random_range(0..n);
            let b = 2000 + rng.random_range(0..years);
            let e = (b + rng.random_range(0..2)).min(2000 + years - 1);
            FactRecord::new(
                i + 1,
                format!("e{s}"),
                format!("r{}", rng.random_range(0..relations)),
                format!("e{o}"),
                b.to_string(),
                e.to_string(),
            )
        })
        .collect();
    KgStore::ingest(&recs).unwrap()
}

/// A chain `c0 - c1 - ... - c{n-1}` with one fact per link.
pub fn chain_store(n: usize) -> KgStore {
    let recs: Vec<FactRecord> = (0..n - 1)
        .map(|i| FactRecord::new(i + 1, format!("c{i}"), "next", format!("c{}", i + 1), (2000 + i).to_string(), (2000 + i).to_string()))
        .collect();
    KgStore::ingest(&recs).unwrap()
}

pub fn tiny_world(seed: u64) -> SyntheticWorldConfig {
    SyntheticWorldConfig {
        entities: 24,
        questions_per_category: 6,
        seed,
        ..SyntheticWorldConfig::default()
    }
}

pub fn tiny_dataset(seed: u64) -> Dataset {
    generate_dataset(&tiny_world(seed)).unwrap()
}

pub fn tiny_qa_config(seed: u64) -> qcmhm_core::model::QaConfig {
    qcmhm_core::model::QaConfig {
        width: 8,
        encoder_layers: 1,
        fusion_layers: 1,
        gnn_layers: 1,
        aleph: 2,
        attention_hidden: 4,
        view_hidden: 4,
        top_k: 3,
        epochs: 2,
        batch_size: 8,
        seed,
        ..Default::default()
    }
}

/// Untrained model over random KG tables of complex dimension 4.
pub fn tiny_model(ds: &Dataset, store: &KgStore, config: qcmhm_core::model::QaConfig) -> qcmhm_core::model::QaModel {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let kg = qcmhm_core::embedding::KgEmbeddings::random(
        store.num_entities(),
        store.num_relations(),
        store.num_timestamps(),
        4,
        0.5,
        &mut rng,
    )
    .unwrap();
    let vocab = qcmhm_core::pipeline::build_vocab(&ds.train, store);
    qcmhm_core::model::QaModel::new(config, vocab, store, &kg).unwrap()
}

pub fn kg_tables<R: Rng>(params: &mut ParamStore, rng: &mut R, store: &KgStore, kg_width: usize) -> (ParamId, ParamId, ParamId) {
    (
        params.add("kg.entity", randn(rng, store.num_entities(), kg_width)),
        params.add("kg.relation", randn(rng, store.num_relations(), kg_width)),
        params.add("kg.time", randn(rng, store.num_timestamps(), kg_width)),
    )
}

pub fn multihop(store: &KgStore, seed: u64, layers: usize, aleph: usize) -> (ParamStore, MultiHop) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = ParamStore::new();
    let kg = kg_tables(&mut params, &mut rng, store, 4);
    let mh = MultiHop::new(&mut params, &mut rng, "mh", 4, 3, layers, aleph, kg);
    // Unequal weights so no power cancels another.
    params.set(mh.xi, Tensor::row((0..=aleph).map(|t| 0.5 + 0.25 * t as f64).collect()));
    (params, mh)
}

pub fn states(params: &ParamStore, mh: &MultiHop, sub: &qcmhm_core::store::QuerySubgraph) -> Tensor {
    let mut g = Graph::new();
    let mut cx = Ctx::frozen(&mut g, params);
    let vars = mh.forward(&mut cx, sub).unwrap();
    cx.value(vars.states).clone()
}

/// Perturbs the entity row of `far` and reports whether the state of `near`
/// moved at all.
pub fn influence(layers: usize, aleph: usize, near: usize, far: usize) -> f64 {
    let store = chain_store(6);
    let sub = store.extract_subgraph(&[0], 5).unwrap();
    let (mut params, mh) = multihop(&store, 31, layers, aleph);
    let before = states(&params, &mh, &sub);
    let e = store.entities().id(&format!("c{far}")).unwrap();
    let row = params.get_mut(mh.kg_entity).row_slice_mut(e);
    for x in row.iter_mut() {
        *x += 3.0;
    }
    let after = states(&params, &mh, &sub);
    let r = sub.row_of(store.entities().id(&format!("c{near}")).unwrap()).unwrap();
    before.row_slice(r).iter().zip(after.row_slice(r)).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
}

/// One-layer trace over a random weighted digraph whose node ids are
/// `100, 103, ...`, so rows and ids never coincide.
pub fn random_trace<R: Rng>(rng: &mut R, n: usize, density: f64) -> AttentionTrace {
    let mut a = Tensor::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            if rng.random_bool(density) {
                a.set(i, j, rng.random_range(0.05..1.0));
            }
        }
    }
    AttentionTrace {
        nodes: (0..n).map(|i| 100 + 3 * i).collect(),
        edges: Vec::new(),
        layers: vec![a],
        edge_probs: vec![Vec::new()],
    }
}
