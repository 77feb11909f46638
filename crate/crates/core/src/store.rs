//! Temporal knowledge graph: vocabularies, interval facts, the expanded
//! per-timestamp edge list, and k-hop query subgraph extraction.

use std::collections::{BTreeSet, HashMap, VecDeque};
use std::path::Path;

use log::warn;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One fact with an inclusive validity interval, all fields vocabulary ids.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct TemporalQuadruple {
    pub subject: usize,
    pub relation: usize,
    pub object: usize,
    pub t_begin: usize,
    pub t_end: usize,
}

/// A raw fact line before vocabulary resolution.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FactRecord {
    pub line: usize,
    pub subject: String,
    pub relation: String,
    pub object: String,
    pub begin: String,
    pub end: String,
}

impl FactRecord {
    pub fn new(
        line: usize,
        subject: impl Into<String>,
        relation: impl Into<String>,
        object: impl Into<String>,
        begin: impl Into<String>,
        end: impl Into<String>,
    ) -> Self {
        Self {
            line,
            subject: subject.into(),
            relation: relation.into(),
            object: object.into(),
            begin: begin.into(),
            end: end.into(),
        }
    }
}

/// Parses the tab-separated fact format, one `s r o begin end` per line.
/// Blank lines are skipped; line numbers are 1-based.
pub fn parse_facts(text: &str) -> Result<Vec<FactRecord>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let raw = raw.trim_end_matches('\r');
        if raw.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = raw.split('\t').collect();
        if fields.len() != 5 {
            return Err(Error::Parse {
                line,
                message: format!("expected 5 tab-separated fields, found {}", fields.len()),
            });
        }
        if let Some(pos) = fields.iter().position(|f| f.trim().is_empty()) {
            return Err(Error::Parse {
                line,
                message: format!("field {} is empty", pos + 1),
            });
        }
        let f: Vec<String> = fields.iter().map(|s| s.trim().to_string()).collect();
        out.push(FactRecord::new(
            line,
            f[0].clone(),
            f[1].clone(),
            f[2].clone(),
            f[3].clone(),
            f[4].clone(),
        ));
    }
    Ok(out)
}

/// String vocabulary with dense ids.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Vocab {
    names: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocab {
    pub fn from_names(names: Vec<String>) -> Self {
        let index = names
            .iter()
            .enumerate()
            .map(|(i, n)| (n.clone(), i))
            .collect();
        Self { names, index }
    }

    fn intern(&mut self, name: &str) -> usize {
        if let Some(&id) = self.index.get(name) {
            return id;
        }
        let id = self.names.len();
        self.names.push(name.to_string());
        self.index.insert(name.to_string(), id);
        id
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn id(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn name(&self, id: usize) -> &str {
        &self.names[id]
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }
}

/// A single-timestamp directed edge. Relation ids at or above the number
/// of base relations denote the inverse of `rel - num_relations`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Edge {
    pub src: usize,
    pub rel: usize,
    pub dst: usize,
    pub time: usize,
    pub fact: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct IngestOptions {
    /// Upper bound on timestamps emitted for a single interval fact.
    pub max_expansion: usize,
}

impl Default for IngestOptions {
    fn default() -> Self {
        Self { max_expansion: 100 }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct KgStore {
    entities: Vocab,
    relations: Vocab,
    timestamps: Vocab,
    facts: Vec<TemporalQuadruple>,
    edges: Vec<Edge>,
    adjacency: Vec<Vec<usize>>,
}

/// Orders timestamp literals: integers numerically with every year between
/// the extremes filled in, anything else lexicographically.
fn timestamp_vocab(literals: &BTreeSet<String>) -> Vocab {
    let parsed: Option<Vec<i64>> = literals.iter().map(|s| s.parse::<i64>().ok()).collect();
    match parsed {
        Some(values) if !values.is_empty() => {
            let lo = *values.iter().min().expect("non-empty");
            let hi = *values.iter().max().expect("non-empty");
            Vocab::from_names((lo..=hi).map(|y| y.to_string()).collect())
        }
        _ => Vocab::from_names(literals.iter().cloned().collect()),
    }
}

fn timestamp_id(vocab: &Vocab, literal: &str) -> Option<usize> {
    vocab.id(literal).or_else(|| {
        literal
            .parse::<i64>()
            .ok()
            .and_then(|v| vocab.id(&v.to_string()))
    })
}

impl KgStore {
    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::ingest(&parse_facts(&text)?)
    }

    pub fn ingest(records: &[FactRecord]) -> Result<Self> {
        Self::ingest_with(records, IngestOptions::default())
    }

    pub fn ingest_with(records: &[FactRecord], options: IngestOptions) -> Result<Self> {
        if records.is_empty() {
            return Err(Error::EmptyStore);
        }
        let mut entities = Vocab::default();
        let mut relations = Vocab::default();
        let literals: BTreeSet<String> = records
            .iter()
            .flat_map(|r| [r.begin.clone(), r.end.clone()])
            .collect();
        let timestamps = timestamp_vocab(&literals);

        let mut facts = Vec::with_capacity(records.len());
        for r in records {
            let t_begin = timestamp_id(&timestamps, &r.begin).expect("literal interned");
            let t_end = timestamp_id(&timestamps, &r.end).expect("literal interned");
            if t_begin > t_end {
                return Err(Error::ReversedInterval {
                    line: r.line,
                    begin: r.begin.clone(),
                    end: r.end.clone(),
                });
            }
            facts.push(TemporalQuadruple {
                subject: entities.intern(&r.subject),
                relation: relations.intern(&r.relation),
                object: entities.intern(&r.object),
                t_begin,
                t_end,
            });
        }

        let num_rel = relations.len();
        let mut edges = Vec::new();
        for (fact_id, f) in facts.iter().enumerate() {
            let span = f.t_end - f.t_begin + 1;
            if span > options.max_expansion {
                warn!(
                    "fact {fact_id} spans {span} timestamps; expanding only the first {}",
                    options.max_expansion
                );
            }
            let last = f.t_end.min(f.t_begin + options.max_expansion - 1);
            for t in f.t_begin..=last {
                edges.push(Edge {
                    src: f.subject,
                    rel: f.relation,
                    dst: f.object,
                    time: t,
                    fact: fact_id,
                });
                edges.push(Edge {
                    src: f.object,
                    rel: f.relation + num_rel,
                    dst: f.subject,
                    time: t,
                    fact: fact_id,
                });
            }
        }
        let mut adjacency = vec![Vec::new(); entities.len()];
        for (i, e) in edges.iter().enumerate() {
            adjacency[e.src].push(i);
        }
        Ok(Self {
            entities,
            relations,
            timestamps,
            facts,
            edges,
            adjacency,
        })
    }

    pub fn entities(&self) -> &Vocab {
        &self.entities
    }

    /// Base (forward) relations only.
    pub fn relations(&self) -> &Vocab {
        &self.relations
    }

    pub fn timestamps(&self) -> &Vocab {
        &self.timestamps
    }

    pub fn num_entities(&self) -> usize {
        self.entities.len()
    }

    pub fn num_base_relations(&self) -> usize {
        self.relations.len()
    }

    /// Forward plus inverse relations.
    pub fn num_relations(&self) -> usize {
        2 * self.relations.len()
    }

    pub fn num_timestamps(&self) -> usize {
        self.timestamps.len()
    }

    pub fn facts(&self) -> &[TemporalQuadruple] {
        &self.facts
    }

    pub fn edges(&self) -> &[Edge] {
        &self.edges
    }

    /// Edge ids leaving `entity`.
    pub fn adjacent(&self, entity: usize) -> &[usize] {
        &self.adjacency[entity]
    }

    pub fn timestamp_id(&self, literal: &str) -> Option<usize> {
        timestamp_id(&self.timestamps, literal)
    }

    /// Display name for a relation id, inverse relations suffixed with `^-1`.
    pub fn relation_name(&self, rel: usize) -> String {
        let base = self.relations.len();
        if rel >= base {
            format!("{}^-1", self.relations.name(rel - base))
        } else {
            self.relations.name(rel).to_string()
        }
    }

    /// Renders a fact as `S R O from T_b to T_e`.
    pub fn verbalize(&self, fact: &TemporalQuadruple) -> String {
        format!(
            "{} {} {} from {} to {}",
            self.entities.name(fact.subject),
            self.relations.name(fact.relation),
            self.entities.name(fact.object),
            self.timestamps.name(fact.t_begin),
            self.timestamps.name(fact.t_end)
        )
    }

    /// Nodes within `hops` undirected steps of `seed`.
    fn neighbourhood(&self, seed: usize, hops: usize) -> BTreeSet<usize> {
        let mut seen = BTreeSet::from([seed]);
        let mut queue = VecDeque::from([(seed, 0)]);
        while let Some((node, d)) = queue.pop_front() {
            if d == hops {
                continue;
            }
            for &ei in &self.adjacency[node] {
                let next = self.edges[ei].dst;
                if seen.insert(next) {
                    queue.push_back((next, d + 1));
                }
            }
        }
        seen
    }

    /// Union of the `hops`-neighbourhoods of `annotated`. Ids outside the
    /// vocabulary are skipped with a warning; if none remain the question
    /// is unanswerable.
    pub fn extract_subgraph(&self, annotated: &[usize], hops: usize) -> Result<QuerySubgraph> {
        let mut seeds = Vec::new();
        for &e in annotated {
            if e < self.num_entities() {
                if !seeds.contains(&e) {
                    seeds.push(e);
                }
            } else {
                warn!("annotated entity id {e} is not in the graph; skipping");
            }
        }
        if seeds.is_empty() {
            return Err(Error::Unanswerable(
                "no annotated entity is present in the graph".into(),
            ));
        }

        // G_q is the union of the per-entity induced neighbourhoods, so an
        // edge joining the fringes of two different neighbourhoods is left out.
        let mut all_nodes = BTreeSet::new();
        let mut edge_set = BTreeSet::new();
        for &s in &seeds {
            let reach = self.neighbourhood(s, hops);
            for &n in &reach {
                for &ei in &self.adjacency[n] {
                    if reach.contains(&self.edges[ei].dst) {
                        edge_set.insert(ei);
                    }
                }
            }
            all_nodes.extend(reach);
        }
        let nodes: Vec<usize> = all_nodes.into_iter().collect();
        let row_index: HashMap<usize, usize> =
            nodes.iter().enumerate().map(|(i, &n)| (n, i)).collect();
        let edge_ids: Vec<usize> = edge_set.into_iter().collect();
        let edges: Vec<Edge> = edge_ids.iter().map(|&i| self.edges[i]).collect();
        let times: BTreeSet<usize> = edges.iter().map(|e| e.time).collect();
        let facts: BTreeSet<usize> = edges.iter().map(|e| e.fact).collect();

        Ok(QuerySubgraph {
            annotated: seeds,
            nodes,
            edges,
            edge_ids,
            candidate_times: times.into_iter().collect(),
            facts: facts.into_iter().collect(),
            row_index,
        })
    }
}

/// The neighbourhood a question is answered from.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct QuerySubgraph {
    /// Annotated entities that were found in the graph, in question order.
    pub annotated: Vec<usize>,
    /// Node entity ids in ascending order; also the entity candidates.
    pub nodes: Vec<usize>,
    pub edges: Vec<Edge>,
    /// Store indices of `edges`, ascending.
    pub edge_ids: Vec<usize>,
    /// Timestamps carried by `edges`, ascending.
    pub candidate_times: Vec<usize>,
    /// Facts with at least one edge inside the subgraph, ascending.
    pub facts: Vec<usize>,
    row_index: HashMap<usize, usize>,
}

impl QuerySubgraph {
    pub fn candidate_entities(&self) -> &[usize] {
        &self.nodes
    }

    pub fn num_nodes(&self) -> usize {
        self.nodes.len()
    }

    /// Row of `entity` in node-indexed matrices.
    pub fn row_of(&self, entity: usize) -> Option<usize> {
        self.row_index.get(&entity).copied()
    }
}
