//! Hits@k evaluation with breakdowns by category, question type and
//! answer type, plus per-question prediction records.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::fmt::Write as _;

use log::warn;
use serde::{Deserialize, Serialize};

use crate::answer::AnswerId;
use crate::error::{Error, Result};
use crate::model::{Prepared, QaModel};
use crate::questions::{AnswerType, Category, QuestionRecord};
use crate::store::KgStore;

/// Hit rates over a group of questions.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Hits {
    pub count: usize,
    pub hits1: f64,
    pub hits10: f64,
}

#[derive(Default)]
struct Tally {
    count: usize,
    hit1: usize,
    hit10: usize,
}

impl Tally {
    fn add(&mut self, o: &Outcome) {
        self.count += 1;
        self.hit1 += usize::from(o.hit(1));
        self.hit10 += usize::from(o.hit(10));
    }

    fn hits(&self) -> Hits {
        let rate = |h: usize| if self.count == 0 { 0.0 } else { h as f64 / self.count as f64 };
        Hits {
            count: self.count,
            hits1: rate(self.hit1),
            hits10: rate(self.hit10),
        }
    }
}

/// Ranking result for one question.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Outcome {
    pub category: Category,
    pub answer_type: AnswerType,
    /// 0-based rank of the best-ranked gold answer; `None` for a miss at
    /// every cutoff (including unanswerable questions).
    pub gold_rank: Option<usize>,
    pub unanswerable: bool,
    /// Entity answer at least two hops from every annotated entity.
    pub two_hop: bool,
}

impl Outcome {
    pub fn hit(&self, k: usize) -> bool {
        self.gold_rank.is_some_and(|r| r < k)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub overall: Hits,
    pub simple: Hits,
    pub complex: Hits,
    pub entity: Hits,
    pub time: Hits,
    pub two_hop: Hits,
    pub categories: BTreeMap<Category, Hits>,
    pub unanswerable: usize,
}

impl EvalReport {
    pub fn from_outcomes(outcomes: &[Outcome]) -> Self {
        let mut overall = Tally::default();
        let (mut simple, mut complex) = (Tally::default(), Tally::default());
        let (mut entity, mut time) = (Tally::default(), Tally::default());
        let mut two_hop = Tally::default();
        let mut cats: BTreeMap<Category, Tally> = BTreeMap::new();
        for o in outcomes {
            overall.add(o);
            if o.category.is_complex() { &mut complex } else { &mut simple }.add(o);
            match o.answer_type {
                AnswerType::Entity => entity.add(o),
                AnswerType::Time => time.add(o),
            }
            if o.two_hop {
                two_hop.add(o);
            }
            cats.entry(o.category).or_default().add(o);
        }
        Self {
            overall: overall.hits(),
            simple: simple.hits(),
            complex: complex.hits(),
            entity: entity.hits(),
            time: time.hits(),
            two_hop: two_hop.hits(),
            categories: cats.into_iter().map(|(c, t)| (c, t.hits())).collect(),
            unanswerable: outcomes.iter().filter(|o| o.unanswerable).count(),
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn to_markdown(&self) -> String {
        let mut out = String::from("| group | questions | Hits@1 | Hits@10 |\n|---|---:|---:|---:|\n");
        let mut row = |name: &str, h: &Hits| {
            let _ = writeln!(out, "| {name} | {} | {:.3} | {:.3} |", h.count, h.hits1, h.hits10);
        };
        row("overall", &self.overall);
        row("simple", &self.simple);
        row("complex", &self.complex);
        row("entity answers", &self.entity);
        row("time answers", &self.time);
        row("two-hop answers", &self.two_hop);
        for (c, h) in &self.categories {
            row(c.as_str(), h);
        }
        let _ = writeln!(out, "\nUnanswerable questions: {}", self.unanswerable);
        out
    }
}

/// Smallest undirected hop count from any of `sources` to any of `targets`.
pub fn hop_distance(store: &KgStore, sources: &[usize], targets: &[usize]) -> Option<usize> {
    let targets: BTreeSet<usize> = targets.iter().copied().collect();
    let mut seen: BTreeSet<usize> = sources.iter().copied().collect();
    let mut queue: VecDeque<(usize, usize)> = sources.iter().map(|&s| (s, 0)).collect();
    while let Some((node, d)) = queue.pop_front() {
        if targets.contains(&node) {
            return Some(d);
        }
        for &ei in store.adjacent(node) {
            let next = store.edges()[ei].dst;
            if seen.insert(next) {
                queue.push_back((next, d + 1));
            }
        }
    }
    None
}

fn is_two_hop(store: &KgStore, p: &Prepared) -> bool {
    p.question.answer_type == AnswerType::Entity
        && hop_distance(store, &p.question.annotated_entities, &p.question.answers).is_some_and(|d| d >= 2)
}

/// Machine-readable prediction for one question.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PredictionRecord {
    pub question: String,
    pub category: Category,
    pub top: Vec<(String, f64)>,
    pub gold: Vec<String>,
    pub hit1: bool,
    pub hit10: bool,
    pub unanswerable: bool,
}

pub fn answer_name(store: &KgStore, id: AnswerId) -> String {
    match id {
        AnswerId::Entity(e) => store.entities().name(e).to_string(),
        AnswerId::Time(t) => store.timestamps().name(t).to_string(),
    }
}

/// Scores one prepared question; ties in the ranking go to the smaller
/// candidate id.
pub fn score_prepared(model: &QaModel, store: &KgStore, p: &Prepared) -> Result<(Outcome, Vec<(AnswerId, f64)>)> {
    let two_hop = is_two_hop(store, p);
    let mut outcome = Outcome {
        category: p.question.category,
        answer_type: p.question.answer_type,
        gold_rank: None,
        unanswerable: false,
        two_hop,
    };
    if p.candidates.is_empty() {
        outcome.unanswerable = true;
        return Ok((outcome, Vec::new()));
    }
    let ranked = model.predict(p)?.distribution.ranked();
    let gold: BTreeSet<AnswerId> = p
        .question
        .answers
        .iter()
        .map(|&a| AnswerId::typed(p.question.answer_type, a))
        .collect();
    outcome.gold_rank = ranked.iter().position(|(id, _)| gold.contains(id));
    Ok((outcome, ranked))
}

/// Evaluates a question set. Questions that cannot be resolved or have no
/// candidates count as misses and are tallied as unanswerable.
pub fn evaluate(model: &QaModel, store: &KgStore, records: &[QuestionRecord]) -> Result<(EvalReport, Vec<PredictionRecord>)> {
    let mut outcomes = Vec::with_capacity(records.len());
    let mut predictions = Vec::with_capacity(records.len());
    for record in records {
        let (outcome, ranked) = match model.prepare(record, store) {
            Ok(p) => score_prepared(model, store, &p)?,
            Err(Error::Unanswerable(why)) => {
                warn!("unanswerable: {why}");
                let outcome = Outcome {
                    category: record.category,
                    answer_type: record.answer_type,
                    gold_rank: None,
                    unanswerable: true,
                    two_hop: false,
                };
                (outcome, Vec::new())
            }
            Err(e) => return Err(e),
        };
        predictions.push(PredictionRecord {
            question: record.text.clone(),
            category: record.category,
            top: ranked.iter().take(10).map(|&(id, p)| (answer_name(store, id), p)).collect(),
            gold: record.answers.clone(),
            hit1: outcome.hit(1),
            hit10: outcome.hit(10),
            unanswerable: outcome.unanswerable,
        });
        outcomes.push(outcome);
    }
    Ok((EvalReport::from_outcomes(&outcomes), predictions))
}
