//! Question calibration: fact retrieval by cosine similarity, three-view
//! alignment between question tokens and retrieved facts, view fusion and
//! a gated merge of fact information into the token states.

use log::warn;
use qcmhm_tensor::{ParamId, ParamStore, Tensor, Var};
use rand::Rng;
use serde::Serialize;

use crate::error::Result;
use crate::nn::{broadcast_row, Ctx, Linear};

/// Cosine similarity; zero when either vector is zero.
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        (dot / (na * nb)).clamp(-1.0, 1.0)
    }
}

/// A retrieval hit: position in the pool, fact id and similarity.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Retrieved {
    pub index: usize,
    pub fact: usize,
    pub score: f64,
}

/// Top `k` pool entries by cosine similarity to `query`, ties by fact id.
/// `pool` pairs each fact id with its summary vector.
pub fn retrieve_spo(query: &[f64], pool: &[(usize, &[f64])], k: usize) -> Vec<Retrieved> {
    if pool.is_empty() {
        warn!("retrieval pool is empty");
        return Vec::new();
    }
    let mut scored: Vec<Retrieved> = pool
        .iter()
        .enumerate()
        .map(|(index, &(fact, summary))| Retrieved {
            index,
            fact,
            score: cosine(query, summary),
        })
        .collect();
    scored.sort_by(|a, b| b.score.total_cmp(&a.score).then(a.fact.cmp(&b.fact)));
    scored.truncate(k);
    scored
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum View {
    Concat,
    Dot,
    Minus,
}

impl View {
    pub const ALL: [View; 3] = [View::Concat, View::Dot, View::Minus];
}

/// Scoring weights of one view: `h = vᵀ tanh(W · combine(query, key))`.
#[derive(Clone, Debug, PartialEq)]
pub struct ViewAttention {
    pub view: View,
    pub w: Linear,
    pub v: ParamId,
}

impl ViewAttention {
    pub fn new<R: Rng + ?Sized>(
        params: &mut ParamStore,
        rng: &mut R,
        name: &str,
        view: View,
        width: usize,
        hidden: usize,
    ) -> Self {
        let input = if view == View::Concat { 2 * width } else { width };
        let w = Linear::new(params, rng, &format!("{name}.w"), input, hidden, false);
        let bound = 1.0 / (hidden as f64).sqrt();
        let v = params.add(format!("{name}.v"), Tensor::uniform(hidden, 1, bound, rng));
        Self { view, w, v }
    }

    /// For `queries` (`n × d`) over `keys` (`m × d`): returns the aligned
    /// rows `α · keys` (`n × d`) and the weights `α` (`n × m`).
    pub fn align(&self, cx: &mut Ctx, queries: Var, keys: Var) -> Result<(Var, Var)> {
        let n = cx.value(queries).rows();
        let m = cx.value(keys).rows();
        let qi: Vec<usize> = (0..n * m).map(|p| p / m).collect();
        let ki: Vec<usize> = (0..n * m).map(|p| p % m).collect();
        let qp = cx.g.gather_rows(queries, &qi)?;
        let kp = cx.g.gather_rows(keys, &ki)?;
        let combined = match self.view {
            View::Concat => cx.g.concat(&[qp, kp], 1)?,
            View::Dot => cx.g.mul(qp, kp)?,
            View::Minus => cx.g.sub(qp, kp)?,
        };
        let hidden = self.w.forward(cx, combined)?;
        let hidden = cx.g.tanh(hidden)?;
        let v = cx.p(self.v);
        let logits = cx.g.matmul(hidden, v)?;
        let logits = cx.g.reshape(logits, n, m)?;
        let alpha = cx.g.softmax_rows(logits)?;
        let aligned = cx.g.matmul(alpha, keys)?;
        Ok((aligned, alpha))
    }
}

/// `W [x, p̃_cat, x, p̃_dot, x, p̃_min]`, row by row.
pub fn fuse_views(cx: &mut Ctx, proj: &Linear, base: Var, aligned: [Var; 3]) -> Result<Var> {
    let [cat, dot, min] = aligned;
    let stacked = cx.g.concat(&[base, cat, base, dot, base, min], 1)?;
    proj.forward(cx, stacked)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Gate {
    /// `S̃ = tanh(W_s mean(Ŝ) + b)`.
    pub summary: Linear,
    /// Gate weights shared over token positions.
    pub w_g: Linear,
}

impl Gate {
    /// `q_sem,i = g_i ⊙ q̂_i + (1 - g_i) ⊙ S̃`, `g_i = σ(W_g (q̂_i ⊙ S̃))`.
    pub fn adaptive_fusion(&self, cx: &mut Ctx, q_hat: Var, s_hat: Var) -> Result<Var> {
        let n = cx.value(q_hat).rows();
        let mean = cx.g.mean(s_hat, 0)?;
        let s_tilde = self.summary.forward(cx, mean)?;
        let s_tilde = cx.g.tanh(s_tilde)?;
        let s_rows = broadcast_row(cx.g, s_tilde, n)?;
        let prod = cx.g.mul(q_hat, s_rows)?;
        let pre = self.w_g.forward(cx, prod)?;
        let gate = cx.g.sigmoid(pre)?;
        let kept = cx.g.mul(gate, q_hat)?;
        let rest = cx.g.one_minus(gate)?;
        let filled = cx.g.mul(rest, s_rows)?;
        Ok(cx.g.add(kept, filled)?)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Calibration {
    /// Question tokens attending over facts.
    pub question_views: [ViewAttention; 3],
    /// Facts attending over question tokens.
    pub fact_views: [ViewAttention; 3],
    pub question_fuse: Linear,
    pub fact_fuse: Linear,
    pub gate: Gate,
}

/// Everything the calibration step produced for one question.
#[derive(Clone, Debug)]
pub struct CalibrationVars {
    pub q_sem: Var,
    pub q_hat: Var,
    pub s_hat: Var,
    /// Question-side weights per view, `n × m`.
    pub alphas: [Var; 3],
}

impl Calibration {
    pub fn new<R: Rng + ?Sized>(params: &mut ParamStore, rng: &mut R, name: &str, width: usize, hidden: usize) -> Self {
        let views = |params: &mut ParamStore, rng: &mut R, side: &str| {
            View::ALL.map(|v| {
                let tag = format!("{name}.{side}.{v:?}").to_lowercase();
                ViewAttention::new(params, rng, &tag, v, width, hidden)
            })
        };
        let question_views = views(params, rng, "question");
        let fact_views = views(params, rng, "fact");
        let question_fuse = Linear::new(params, rng, &format!("{name}.question_fuse"), 6 * width, width, false);
        let fact_fuse = Linear::new(params, rng, &format!("{name}.fact_fuse"), 6 * width, width, false);
        let gate = Gate {
            summary: Linear::new(params, rng, &format!("{name}.gate_summary"), width, width, true),
            w_g: Linear::new(params, rng, &format!("{name}.gate"), width, width, false),
        };
        Self {
            question_views,
            fact_views,
            question_fuse,
            fact_fuse,
            gate,
        }
    }

    /// `tokens` is `n × d`, `facts` is `m × d` with `m ≥ 1`.
    pub fn calibrate(&self, cx: &mut Ctx, tokens: Var, facts: Var) -> Result<CalibrationVars> {
        let mut q_aligned = Vec::with_capacity(3);
        let mut alphas = Vec::with_capacity(3);
        for att in &self.question_views {
            let (p, a) = att.align(cx, tokens, facts)?;
            q_aligned.push(p);
            alphas.push(a);
        }
        let mut f_aligned = Vec::with_capacity(3);
        for att in &self.fact_views {
            f_aligned.push(att.align(cx, facts, tokens)?.0);
        }
        let q_hat = fuse_views(cx, &self.question_fuse, tokens, [q_aligned[0], q_aligned[1], q_aligned[2]])?;
        let s_hat = fuse_views(cx, &self.fact_fuse, facts, [f_aligned[0], f_aligned[1], f_aligned[2]])?;
        let q_sem = self.gate.adaptive_fusion(cx, q_hat, s_hat)?;
        Ok(CalibrationVars {
            q_sem,
            q_hat,
            s_hat,
            alphas: [alphas[0], alphas[1], alphas[2]],
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identical_vectors_have_cosine_one() {
        let a = [0.3, -2.0, 1.5];
        assert!((cosine(&a, &a) - 1.0).abs() < 1e-15);
        assert_eq!(cosine(&[1.0, 0.0], &[0.0, 3.0]), 0.0);
        assert_eq!(cosine(&[0.0, 0.0], &[1.0, 3.0]), 0.0);
    }

    #[test]
    fn retrieval_breaks_ties_by_fact_id_and_truncates() {
        let a = [1.0, 0.0];
        let b = [0.0, 1.0];
        let pool: Vec<(usize, &[f64])> = vec![(9, &a), (4, &a), (7, &b)];
        let got = retrieve_spo(&[1.0, 0.0], &pool, 2);
        assert_eq!(got.iter().map(|r| r.fact).collect::<Vec<_>>(), vec![4, 9]);
        assert!(retrieve_spo(&[1.0, 0.0], &[], 10).is_empty());
        assert_eq!(retrieve_spo(&[1.0, 0.0], &pool, 10).len(), 3);
    }
}
