//! Interpretability: reasoning paths over the final attention matrix and
//! gradient-based attribution of the answer to retrieved facts.

use log::warn;
use qcmhm_tensor::Graph;
use serde::Serialize;

use crate::answer::AnswerId;
use crate::error::{Error, Result};
use crate::eval::answer_name;
use crate::gnn::{extract_path, AttentionTrace, ReasoningPath};
use crate::model::{Prepared, QaModel};
use crate::nn::Ctx;
use crate::store::KgStore;

/// Share of the answer logit's sensitivity owed to one retrieved fact.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SpoAttribution {
    pub fact: usize,
    pub text: String,
    pub retrieval_score: f64,
    pub proportion: f64,
}

/// Normalised L2 norms of the rows of a gradient matrix. All-zero input
/// gives all-zero output.
pub fn row_proportions(rows: &[Vec<f64>]) -> Vec<f64> {
    let norms: Vec<f64> = rows.iter().map(|r| r.iter().map(|x| x * x).sum::<f64>().sqrt()).collect();
    let total: f64 = norms.iter().sum();
    if total == 0.0 {
        warn!("answer logit does not depend on any retrieved fact");
        return vec![0.0; norms.len()];
    }
    norms.into_iter().map(|n| n / total).collect()
}

/// Attribution of the predicted candidate's logit to each retrieved fact
/// summary, in retrieval order.
pub fn attribute_spo(model: &QaModel, store: &KgStore, p: &Prepared) -> Result<Vec<SpoAttribution>> {
    if !model.config.calibration {
        return Err(Error::Unavailable("fact attribution needs calibration enabled".into()));
    }
    let mut g = Graph::new();
    let mut cx = Ctx::frozen(&mut g, &model.params);
    let out = model.forward(&mut cx, p, true)?;
    let Some(spo) = out.spo else {
        return Ok(Vec::new());
    };
    let logits = cx.value(out.logits).data().to_vec();
    let best = argmax_by_candidate(&logits);
    let picked = cx.g.slice_cols(out.logits, best, best + 1)?;
    let grads = g.backward(picked)?;
    let grad = grads
        .wrt(spo)
        .ok_or_else(|| Error::Unavailable("no gradient reached the retrieved facts".into()))?;
    let rows: Vec<Vec<f64>> = (0..grad.rows()).map(|r| grad.row_slice(r).to_vec()).collect();
    let shares = row_proportions(&rows);
    Ok(out
        .retrieved
        .iter()
        .zip(shares)
        .map(|(r, proportion)| SpoAttribution {
            fact: r.fact,
            text: store.verbalize(&store.facts()[r.fact]),
            retrieval_score: r.score,
            proportion,
        })
        .collect())
}

/// Highest logit, ties to the earliest position (candidates are sorted).
fn argmax_by_candidate(logits: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in logits.iter().enumerate() {
        if x > logits[best] {
            best = i;
        }
    }
    best
}

/// A named hop for reports.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct NamedStep {
    pub from: String,
    pub to: String,
    pub relation: Option<String>,
    pub time: Option<String>,
    pub weight: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Explanation {
    pub question: String,
    pub predicted: String,
    pub probability: f64,
    pub path: Vec<NamedStep>,
    pub path_score: f64,
    pub path_diagnostic: Option<String>,
    /// `None` when calibration is disabled.
    pub facts: Option<Vec<SpoAttribution>>,
}

/// Node the path should end at: the entity itself, or for a timestamp the
/// far end of the most attended edge carrying it.
fn answer_node(trace: &AttentionTrace, answer: AnswerId) -> Option<usize> {
    match answer {
        AnswerId::Entity(e) => Some(e),
        AnswerId::Time(t) => {
            let probs = trace.edge_probs.last()?;
            trace
                .edges
                .iter()
                .zip(probs)
                .filter(|(e, _)| e.time == t)
                .max_by(|a, b| a.1.total_cmp(b.1))
                .map(|(e, _)| e.dst)
        }
    }
}

pub fn name_path(store: &KgStore, path: &ReasoningPath) -> Vec<NamedStep> {
    path.steps
        .iter()
        .map(|s| NamedStep {
            from: store.entities().name(s.from).to_string(),
            to: store.entities().name(s.to).to_string(),
            relation: s.edge.map(|e| store.relation_name(e.rel)),
            time: s.edge.map(|e| store.timestamps().name(e.time).to_string()),
            weight: s.weight,
        })
        .collect()
}

pub fn explain(model: &QaModel, store: &KgStore, p: &Prepared) -> Result<Explanation> {
    let prediction = model.predict(p)?;
    let (top, probability) = *prediction
        .distribution
        .ranked()
        .first()
        .ok_or_else(|| Error::Unanswerable("no answer candidates".into()))?;
    let path = match answer_node(&prediction.trace, top) {
        Some(node) => extract_path(&prediction.trace, &p.question.annotated_entities, node),
        None => ReasoningPath {
            nodes: Vec::new(),
            steps: Vec::new(),
            score: 0.0,
            diagnostic: Some("predicted timestamp lies on no subgraph edge".into()),
        },
    };
    let facts = match attribute_spo(model, store, p) {
        Ok(f) => Some(f),
        Err(Error::Unavailable(_)) => None,
        Err(e) => return Err(e),
    };
    Ok(Explanation {
        question: p.question.text.clone(),
        predicted: answer_name(store, top),
        probability,
        path: name_path(store, &path),
        path_score: path.score,
        path_diagnostic: path.diagnostic,
        facts,
    })
}
