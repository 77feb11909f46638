//! Answer prediction: two MLP heads turn the fused question vector into
//! relation-like query vectors that score candidate entities and
//! timestamps under a single softmax.

use std::fmt;

use qcmhm_tensor::{ParamId, ParamStore, Tensor, Var};
use rand::Rng;
use serde::Serialize;

use crate::embedding::{cmul, conj};
use crate::error::{Error, Result};
use crate::nn::{Ctx, Mlp};
use crate::questions::{AnswerType, QuestionInstance};
use crate::store::QuerySubgraph;

/// A candidate answer in the joint entity/timestamp space.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
#[serde(tag = "kind", content = "id", rename_all = "lowercase")]
pub enum AnswerId {
    Entity(usize),
    Time(usize),
}

impl AnswerId {
    pub fn typed(answer_type: AnswerType, id: usize) -> Self {
        match answer_type {
            AnswerType::Entity => AnswerId::Entity(id),
            AnswerType::Time => AnswerId::Time(id),
        }
    }
}

impl fmt::Display for AnswerId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            AnswerId::Entity(e) => write!(f, "entity:{e}"),
            AnswerId::Time(t) => write!(f, "time:{t}"),
        }
    }
}

/// Candidate entities ascending, then candidate timestamps ascending.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Candidates {
    pub entities: Vec<usize>,
    pub times: Vec<usize>,
}

impl Candidates {
    pub fn from_subgraph(sub: &QuerySubgraph) -> Self {
        Self {
            entities: sub.candidate_entities().to_vec(),
            times: sub.candidate_times.clone(),
        }
    }

    pub fn len(&self) -> usize {
        self.entities.len() + self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn ids(&self) -> Vec<AnswerId> {
        self.entities
            .iter()
            .map(|&e| AnswerId::Entity(e))
            .chain(self.times.iter().map(|&t| AnswerId::Time(t)))
            .collect()
    }

    pub fn position(&self, id: AnswerId) -> Option<usize> {
        match id {
            AnswerId::Entity(e) => self.entities.binary_search(&e).ok(),
            AnswerId::Time(t) => self.times.binary_search(&t).ok().map(|i| i + self.entities.len()),
        }
    }

    /// Candidate positions of the question's gold answers that are present.
    pub fn gold_positions(&self, q: &QuestionInstance) -> Vec<usize> {
        q.answers
            .iter()
            .filter_map(|&a| self.position(AnswerId::typed(q.answer_type, a)))
            .collect()
    }
}

/// Probabilities aligned with `Candidates::ids`.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AnswerDistribution {
    pub candidates: Vec<AnswerId>,
    pub probs: Vec<f64>,
}

impl AnswerDistribution {
    pub fn from_logits(candidates: Vec<AnswerId>, logits: &[f64]) -> Self {
        Self {
            candidates,
            probs: softmax(logits),
        }
    }

    /// Candidates by descending probability, ties by ascending candidate.
    pub fn ranked(&self) -> Vec<(AnswerId, f64)> {
        let mut order: Vec<(AnswerId, f64)> = self.candidates.iter().copied().zip(self.probs.iter().copied()).collect();
        order.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        order
    }
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exp: Vec<f64> = logits.iter().map(|&x| (x - max).exp()).collect();
    let total: f64 = exp.iter().sum();
    exp.into_iter().map(|e| e / total).collect()
}

/// Which annotated ids fill the subject, time and object slots.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Slots {
    pub subject: usize,
    pub time: Option<usize>,
    pub object: Option<usize>,
}

impl Slots {
    pub fn of(q: &QuestionInstance) -> Result<Self> {
        let subject = *q
            .annotated_entities
            .first()
            .ok_or_else(|| Error::Unanswerable(format!("{:?} has no annotated entity", q.text)))?;
        Ok(Self {
            subject,
            time: q.annotated_timestamps.first().copied(),
            object: q.annotated_entities.get(1).copied(),
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AnswerHead {
    pub entity_head: Mlp,
    pub time_head: Mlp,
    /// Stand-in rows for missing time and object slots.
    pub placeholder_time: ParamId,
    pub placeholder_entity: ParamId,
    pub kg_entity: ParamId,
    pub kg_time: ParamId,
}

impl AnswerHead {
    pub fn new<R: Rng + ?Sized>(
        params: &mut ParamStore,
        rng: &mut R,
        name: &str,
        width: usize,
        kg_entity: ParamId,
        kg_time: ParamId,
    ) -> Self {
        let kg_width = params.get(kg_entity).cols();
        Self {
            entity_head: Mlp::new(params, rng, &format!("{name}.entity"), width, 2 * width, kg_width),
            time_head: Mlp::new(params, rng, &format!("{name}.time"), width, 2 * width, kg_width),
            placeholder_time: params.add(format!("{name}.placeholder_time"), Tensor::randn(1, kg_width, 0.05, rng)),
            placeholder_entity: params.add(format!("{name}.placeholder_entity"), Tensor::randn(1, kg_width, 0.05, rng)),
            kg_entity,
            kg_time,
        }
    }

    /// `(Q_ent, Q_tim)`, each `1 × 2D`.
    pub fn project(&self, cx: &mut Ctx, q_fin: Var) -> Result<(Var, Var)> {
        let e = self.entity_head.forward(cx, q_fin)?;
        let t = self.time_head.forward(cx, q_fin)?;
        Ok((e, t))
    }

    /// Joint logits `1 × |candidates|`, entities first.
    pub fn score_candidates(
        &self,
        cx: &mut Ctx,
        slots: Slots,
        candidates: &Candidates,
        q_ent: Var,
        q_tim: Var,
    ) -> Result<Var> {
        if candidates.is_empty() {
            return Err(Error::Unanswerable("no answer candidates".into()));
        }
        let ent = cx.p(self.kg_entity);
        let tim = cx.p(self.kg_time);
        let e_s = cx.g.gather_rows(ent, &[slots.subject])?;
        let mut parts = Vec::with_capacity(2);
        if !candidates.entities.is_empty() {
            let e_t = match slots.time {
                Some(t) => cx.g.gather_rows(tim, &[t])?,
                None => cx.p(self.placeholder_time),
            };
            let x = cmul(cx.g, e_s, q_ent)?;
            let x = cmul(cx.g, x, e_t)?;
            let cands = cx.g.gather_rows(ent, &candidates.entities)?;
            let cands_t = cx.g.transpose(cands)?;
            parts.push(cx.g.matmul(x, cands_t)?);
        }
        if !candidates.times.is_empty() {
            let e_o = match slots.object {
                Some(o) => cx.g.gather_rows(ent, &[o])?,
                None => cx.p(self.placeholder_entity),
            };
            let e_o = conj(cx.g, e_o)?;
            let z = cmul(cx.g, e_s, q_tim)?;
            let z = cmul(cx.g, z, e_o)?;
            // Re(z · t) is the dot product of conj(z) with t in split form.
            let w = conj(cx.g, z)?;
            let cands = cx.g.gather_rows(tim, &candidates.times)?;
            let cands_t = cx.g.transpose(cands)?;
            parts.push(cx.g.matmul(w, cands_t)?);
        }
        if parts.len() == 1 {
            Ok(parts[0])
        } else {
            Ok(cx.g.concat(&parts, 1)?)
        }
    }
}

/// Cross-entropy against a target spread uniformly over `gold` positions.
pub fn qa_loss(cx: &mut Ctx, logits: Var, gold: &[usize]) -> Result<Var> {
    let c = cx.value(logits).cols();
    if gold.is_empty() {
        return Err(Error::Unanswerable("no gold answer among the candidates".into()));
    }
    let mut target = Tensor::zeros(1, c);
    for &i in gold {
        target.set(0, i, 1.0 / gold.len() as f64);
    }
    let logp = cx.g.log_softmax_rows(logits)?;
    let target = cx.g.constant(target);
    let weighted = cx.g.mul(logp, target)?;
    let total = cx.g.sum_all(weighted)?;
    Ok(cx.g.scale(total, -1.0)?)
}
