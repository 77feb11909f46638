//! Multi-hop reasoning over a query subgraph: per-edge attention, diffusion
//! through powers of the attention matrix, pooling, fusion with the
//! calibrated question, and best-first path extraction.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use qcmhm_tensor::{ParamId, ParamStore, Tensor, Var};
use rand::Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::nn::{Ctx, Linear, TransformerLayer};
use crate::store::{Edge, QuerySubgraph};

/// Edge scoring of one layer: `β · relu(W_ad (h_i || h_j || h_r || h_t))`,
/// with `W_ad` stored as its four row blocks.
#[derive(Clone, Debug, PartialEq)]
pub struct EdgeAttention {
    pub w_src: Linear,
    pub w_dst: Linear,
    pub w_rel: Linear,
    pub w_time: Linear,
    pub beta: ParamId,
}

/// Row-stochastic attention for one layer plus the per-edge probabilities.
#[derive(Clone, Copy, Debug)]
pub struct AttentionVars {
    pub matrix: Var,
    pub edge_probs: Option<Var>,
}

/// Per-layer attention values kept for explanation.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionTrace {
    /// Entity id of each matrix row.
    pub nodes: Vec<usize>,
    pub edges: Vec<Edge>,
    /// `|V_q| × |V_q|` matrices, one per layer.
    pub layers: Vec<Tensor>,
    /// Per-edge probabilities aligned with `edges`, one vector per layer.
    pub edge_probs: Vec<Vec<f64>>,
}

impl EdgeAttention {
    pub fn new<R: Rng + ?Sized>(
        params: &mut ParamStore,
        rng: &mut R,
        name: &str,
        width: usize,
        kg_width: usize,
        hidden: usize,
    ) -> Self {
        let bound = 1.0 / (hidden as f64).sqrt();
        Self {
            w_src: Linear::new(params, rng, &format!("{name}.src"), width, hidden, false),
            w_dst: Linear::new(params, rng, &format!("{name}.dst"), width, hidden, false),
            w_rel: Linear::new(params, rng, &format!("{name}.rel"), kg_width, hidden, false),
            w_time: Linear::new(params, rng, &format!("{name}.time"), kg_width, hidden, false),
            beta: params.add(format!("{name}.beta"), Tensor::uniform(hidden, 1, bound, rng)),
        }
    }

    /// `h` is `|V_q| × d`; `relations` and `times` are the KG tables.
    pub fn forward(
        &self,
        cx: &mut Ctx,
        h: Var,
        sub: &QuerySubgraph,
        relations: Var,
        times: Var,
    ) -> Result<AttentionVars> {
        let n = sub.num_nodes();
        if n == 0 {
            return Err(Error::Unanswerable("empty subgraph".into()));
        }
        let (src, dst) = edge_rows(sub);
        let mut has_edge = vec![false; n];
        for &s in &src {
            has_edge[s] = true;
        }
        let mut self_loops = Tensor::zeros(n, n);
        for (i, _) in has_edge.iter().enumerate().filter(|(_, &e)| !e) {
            self_loops.set(i, i, 1.0);
        }
        if src.is_empty() {
            return Ok(AttentionVars {
                matrix: cx.g.constant(self_loops),
                edge_probs: None,
            });
        }
        let rel_ids: Vec<usize> = sub.edges.iter().map(|e| e.rel).collect();
        let time_ids: Vec<usize> = sub.edges.iter().map(|e| e.time).collect();

        let hs = self.w_src.forward(cx, h)?;
        let hs = cx.g.gather_rows(hs, &src)?;
        let hd = self.w_dst.forward(cx, h)?;
        let hd = cx.g.gather_rows(hd, &dst)?;
        let er = cx.g.gather_rows(relations, &rel_ids)?;
        let hr = self.w_rel.forward(cx, er)?;
        let et = cx.g.gather_rows(times, &time_ids)?;
        let ht = self.w_time.forward(cx, et)?;
        let sum = cx.g.add(hs, hd)?;
        let sum = cx.g.add(sum, hr)?;
        let sum = cx.g.add(sum, ht)?;
        let act = cx.g.relu(sum)?;
        let beta = cx.p(self.beta);
        let logits = cx.g.matmul(act, beta)?;
        let probs = cx.g.segment_softmax(logits, &src)?;
        let scattered = cx.g.scatter_matrix(probs, &src, &dst, (n, n))?;
        let matrix = if has_edge.iter().all(|&e| e) {
            scattered
        } else {
            let loops = cx.g.constant(self_loops);
            cx.g.add(scattered, loops)?
        };
        Ok(AttentionVars {
            matrix,
            edge_probs: Some(probs),
        })
    }
}

/// Source and destination matrix rows of every subgraph edge.
pub fn edge_rows(sub: &QuerySubgraph) -> (Vec<usize>, Vec<usize>) {
    sub.edges
        .iter()
        .map(|e| {
            (
                sub.row_of(e.src).expect("edge endpoints are subgraph nodes"),
                sub.row_of(e.dst).expect("edge endpoints are subgraph nodes"),
            )
        })
        .unzip()
}

/// `D = Σ_τ ξ_τ A^τ`, built explicitly by repeated multiplication.
pub fn diffuse(a: &Tensor, xi: &[f64]) -> Result<Tensor> {
    let n = a.rows();
    if a.cols() != n {
        return Err(Error::Config(format!("attention matrix must be square, got {:?}", a.shape())));
    }
    let mut power = Tensor::identity(n);
    let mut d = Tensor::zeros(n, n);
    for (tau, &w) in xi.iter().enumerate() {
        if tau > 0 {
            power = power.matmul(a)?;
        }
        d.add_scaled(&power, w);
    }
    Ok(d)
}

/// In-graph `D` for a given `A` and `1 × (ℵ+1)` weights `ξ`.
pub fn diffusion_matrix(cx: &mut Ctx, a: Var, xi: Var) -> Result<Var> {
    let n = cx.value(a).rows();
    let taus = cx.value(xi).cols();
    let mut power = cx.g.constant(Tensor::identity(n));
    let mut d: Option<Var> = None;
    for tau in 0..taus {
        if tau > 0 {
            power = cx.g.matmul(power, a)?;
        }
        let w = cx.g.slice_cols(xi, tau, tau + 1)?;
        let term = cx.g.scale_by(power, w)?;
        d = Some(match d {
            None => term,
            Some(acc) => cx.g.add(acc, term)?,
        });
    }
    d.ok_or_else(|| Error::Config("diffusion needs at least one weight".into()))
}

/// `D H` without forming `D`: `Σ_τ ξ_τ A^τ H` via repeated `A · (·)`.
pub fn propagate(cx: &mut Ctx, a: Var, xi: Var, h: Var) -> Result<Var> {
    let taus = cx.value(xi).cols();
    let mut walk = h;
    let mut out: Option<Var> = None;
    for tau in 0..taus {
        if tau > 0 {
            walk = cx.g.matmul(a, walk)?;
        }
        let w = cx.g.slice_cols(xi, tau, tau + 1)?;
        let term = cx.g.scale_by(walk, w)?;
        out = Some(match out {
            None => term,
            Some(acc) => cx.g.add(acc, term)?,
        });
    }
    out.ok_or_else(|| Error::Config("diffusion needs at least one weight".into()))
}

/// Mean of node states, `1 × d`.
pub fn pool(cx: &mut Ctx, h: Var) -> Result<Var> {
    Ok(cx.g.mean(h, 0)?)
}

#[derive(Clone, Debug, PartialEq)]
pub struct MultiHop {
    pub input: Linear,
    pub layers: Vec<EdgeAttention>,
    /// Diffusion weights `ξ_0..ξ_ℵ`, shared by all layers.
    pub xi: ParamId,
    pub kg_entity: ParamId,
    pub kg_relation: ParamId,
    pub kg_time: ParamId,
}

#[derive(Clone, Debug)]
pub struct MultiHopVars {
    pub q_mlh: Var,
    pub states: Var,
    pub attention: Vec<AttentionVars>,
}

impl MultiHop {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        params: &mut ParamStore,
        rng: &mut R,
        name: &str,
        width: usize,
        hidden: usize,
        layers: usize,
        aleph: usize,
        kg: (ParamId, ParamId, ParamId),
    ) -> Self {
        let kg_width = params.get(kg.0).cols();
        let input = Linear::new(params, rng, &format!("{name}.input"), kg_width, width, false);
        let layers = (0..layers)
            .map(|l| EdgeAttention::new(params, rng, &format!("{name}.layer{l}"), width, kg_width, hidden))
            .collect();
        let xi = params.add(
            format!("{name}.xi"),
            Tensor::full(1, aleph + 1, 1.0 / (aleph + 1) as f64),
        );
        Self {
            input,
            layers,
            xi,
            kg_entity: kg.0,
            kg_relation: kg.1,
            kg_time: kg.2,
        }
    }

    pub fn aleph(&self, params: &ParamStore) -> usize {
        params.get(self.xi).cols() - 1
    }

    pub fn forward(&self, cx: &mut Ctx, sub: &QuerySubgraph) -> Result<MultiHopVars> {
        let ent = cx.p(self.kg_entity);
        let rel = cx.p(self.kg_relation);
        let tim = cx.p(self.kg_time);
        let e = cx.g.gather_rows(ent, &sub.nodes)?;
        let mut h = self.input.forward(cx, e)?;
        let xi = cx.p(self.xi);
        let mut attention = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let att = layer.forward(cx, h, sub, rel, tim)?;
            h = propagate(cx, att.matrix, xi, h)?;
            attention.push(att);
        }
        let q_mlh = pool(cx, h)?;
        Ok(MultiHopVars {
            q_mlh,
            states: h,
            attention,
        })
    }

    pub fn trace(cx: &Ctx, sub: &QuerySubgraph, vars: &MultiHopVars) -> AttentionTrace {
        AttentionTrace {
            nodes: sub.nodes.clone(),
            edges: sub.edges.clone(),
            layers: vars.attention.iter().map(|a| cx.value(a.matrix).clone()).collect(),
            edge_probs: vars
                .attention
                .iter()
                .map(|a| a.edge_probs.map_or_else(Vec::new, |p| cx.value(p).data().to_vec()))
                .collect(),
        }
    }
}

/// Transformer fusion of the calibrated tokens with the pooled graph state.
#[derive(Clone, Debug, PartialEq)]
pub struct KnowledgeFusion {
    pub layers: Vec<TransformerLayer>,
}

impl KnowledgeFusion {
    pub fn new<R: Rng + ?Sized>(params: &mut ParamStore, rng: &mut R, name: &str, width: usize, layers: usize) -> Self {
        Self {
            layers: (0..layers)
                .map(|l| TransformerLayer::new(params, rng, &format!("{name}.layer{l}"), width))
                .collect(),
        }
    }

    /// Appends `q_mlh` as one more token, encodes, and averages: `1 × d`.
    pub fn forward(&self, cx: &mut Ctx, q_sem: Var, q_mlh: Var) -> Result<Var> {
        let mut h = cx.g.concat(&[q_sem, q_mlh], 0)?;
        for layer in &self.layers {
            h = layer.forward(cx, h, None)?;
        }
        Ok(cx.g.mean(h, 0)?)
    }
}

/// One hop of an extracted reasoning path.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PathStep {
    pub from: usize,
    pub to: usize,
    /// Matrix entry `A[from][to]` of the final layer.
    pub weight: f64,
    /// Highest-probability subgraph edge realising the hop, if any.
    pub edge: Option<Edge>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ReasoningPath {
    /// Entity ids from an annotated entity to the answer.
    pub nodes: Vec<usize>,
    pub steps: Vec<PathStep>,
    /// Product of step weights.
    pub score: f64,
    pub diagnostic: Option<String>,
}

impl ReasoningPath {
    fn empty(reason: String) -> Self {
        Self {
            nodes: Vec::new(),
            steps: Vec::new(),
            score: 0.0,
            diagnostic: Some(reason),
        }
    }
}

#[derive(PartialEq)]
struct Frontier {
    score: f64,
    row: usize,
}

impl Eq for Frontier {}

impl Ord for Frontier {
    fn cmp(&self, other: &Self) -> Ordering {
        self.score
            .total_cmp(&other.score)
            .then_with(|| other.row.cmp(&self.row))
    }
}

impl PartialOrd for Frontier {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// Best-first search over the final attention matrix, expanding the partial
/// path with the largest product of edge weights first. The first time the
/// answer is popped its path has maximal product.
pub fn extract_path(trace: &AttentionTrace, starts: &[usize], answer: usize) -> ReasoningPath {
    let Some(a) = trace.layers.last() else {
        return ReasoningPath::empty("no attention layers recorded".into());
    };
    let row_of = |e: usize| trace.nodes.iter().position(|&n| n == e);
    let Some(target) = row_of(answer) else {
        return ReasoningPath::empty(format!("answer {answer} is not in the subgraph"));
    };
    let n = trace.nodes.len();
    let mut best = vec![f64::NEG_INFINITY; n];
    let mut parent: Vec<Option<usize>> = vec![None; n];
    let mut done = vec![false; n];
    let mut heap = BinaryHeap::new();
    for &s in starts {
        if let Some(r) = row_of(s) {
            if best[r] < 1.0 {
                best[r] = 1.0;
                heap.push(Frontier { score: 1.0, row: r });
            }
        }
    }
    if heap.is_empty() {
        return ReasoningPath::empty("no annotated entity is in the subgraph".into());
    }
    while let Some(Frontier { score, row }) = heap.pop() {
        if done[row] {
            continue;
        }
        done[row] = true;
        if row == target {
            break;
        }
        for next in 0..n {
            let w = a.get(row, next);
            if w <= 0.0 || next == row || done[next] {
                continue;
            }
            let cand = score * w;
            if cand > best[next] {
                best[next] = cand;
                parent[next] = Some(row);
                heap.push(Frontier { score: cand, row: next });
            }
        }
    }
    if !done[target] {
        return ReasoningPath::empty(format!("answer {answer} is unreachable from the annotated entities"));
    }
    let mut rows = vec![target];
    while let Some(p) = parent[*rows.last().expect("non-empty")] {
        rows.push(p);
    }
    rows.reverse();
    let final_probs = trace.edge_probs.last();
    let steps: Vec<PathStep> = rows
        .windows(2)
        .map(|w| {
            let (from, to) = (trace.nodes[w[0]], trace.nodes[w[1]]);
            let edge = final_probs.and_then(|probs| {
                trace
                    .edges
                    .iter()
                    .zip(probs)
                    .filter(|(e, _)| e.src == from && e.dst == to)
                    .max_by(|x, y| x.1.total_cmp(y.1).then(y.0.cmp(x.0)))
                    .map(|(e, _)| *e)
            });
            PathStep {
                from,
                to,
                weight: a.get(w[0], w[1]),
                edge,
            }
        })
        .collect();
    ReasoningPath {
        nodes: rows.iter().map(|&r| trace.nodes[r]).collect(),
        score: best[target],
        steps,
        diagnostic: None,
    }
}
