//! Synthetic temporal world of players, clubs and awards, with templated
//! questions whose gold answers come from a scan over the generated facts.

use std::collections::{BTreeMap, BTreeSet};

use log::{info, warn};
use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::questions::{AnswerType, Category, QuestionRecord};

pub const MEMBER_OF: &str = "member_of";
pub const RECEIVED: &str = "received";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticWorldConfig {
    /// Players, clubs and awards together.
    pub entities: usize,
    /// `member_of`, `received`, then `friend_<k>` filler relations.
    pub relations: usize,
    pub first_year: i32,
    pub last_year: i32,
    /// Club stints per player.
    pub facts_per_entity: usize,
    pub questions_per_category: usize,
    /// Fractions of questions going to train and dev; the rest is test.
    pub train_fraction: f64,
    pub dev_fraction: f64,
    pub seed: u64,
}

impl Default for SyntheticWorldConfig {
    fn default() -> Self {
        Self {
            entities: 80,
            relations: 2,
            first_year: 2000,
            last_year: 2014,
            facts_per_entity: 3,
            questions_per_category: 200,
            train_fraction: 0.6,
            dev_fraction: 0.2,
            seed: 17,
        }
    }
}

impl SyntheticWorldConfig {
    pub fn validate(&self) -> Result<()> {
        if self.entities < 10 {
            return Err(Error::Config("the world needs at least 10 entities".into()));
        }
        if self.relations < 2 {
            return Err(Error::Config("the world needs at least 2 relations".into()));
        }
        if self.last_year < self.first_year {
            return Err(Error::Config("year range is empty".into()));
        }
        if self.facts_per_entity == 0 || self.questions_per_category == 0 {
            return Err(Error::Config("counts must be positive".into()));
        }
        let fractions = self.train_fraction + self.dev_fraction;
        if !(0.0..=1.0).contains(&self.train_fraction) || !(0.0..=1.0).contains(&fractions) {
            return Err(Error::Config("split fractions must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

/// A generated fact with string surface forms.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub struct WorldFact {
    pub subject: String,
    pub relation: String,
    pub object: String,
    pub begin: i32,
    pub end: i32,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub facts: Vec<WorldFact>,
    pub train: Vec<QuestionRecord>,
    pub dev: Vec<QuestionRecord>,
    pub test: Vec<QuestionRecord>,
    /// Questions dropped after repeated unsatisfiable draws, per category.
    pub skipped: BTreeMap<Category, usize>,
}

impl Dataset {
    /// Tab-separated fact file contents.
    pub fn fact_file(&self) -> String {
        let mut out = String::new();
        for f in &self.facts {
            out.push_str(&format!(
                "{}\t{}\t{}\t{}\t{}\n",
                f.subject, f.relation, f.object, f.begin, f.end
            ));
        }
        out
    }

    pub fn all_questions(&self) -> impl Iterator<Item = &QuestionRecord> {
        self.train.iter().chain(&self.dev).chain(&self.test)
    }
}

/// Indexed view of the generated facts used to compute gold answers.
struct World {
    years: Vec<i32>,
    /// `(player, club, begin, end)` in career order per player.
    stints: Vec<(String, String, i32, i32)>,
    /// `(player, award, year)`.
    awards: Vec<(String, String, i32)>,
    award_names: Vec<String>,
    players: Vec<String>,
}

impl World {
    fn recipients(&self, award: &str, year: i32) -> BTreeSet<String> {
        self.awards
            .iter()
            .filter(|(_, a, y)| a == award && *y == year)
            .map(|(p, _, _)| p.clone())
            .collect()
    }

    fn award_years(&self, player: &str, award: &str) -> BTreeSet<i32> {
        self.awards
            .iter()
            .filter(|(p, a, _)| p == player && a == award)
            .map(|(_, _, y)| *y)
            .collect()
    }

    fn clubs_at(&self, player: &str, year: i32) -> BTreeSet<String> {
        self.stints
            .iter()
            .filter(|(p, _, b, e)| p == player && *b <= year && year <= *e)
            .map(|(_, c, _, _)| c.clone())
            .collect()
    }

    fn stints_of(&self, player: &str) -> Vec<&(String, String, i32, i32)> {
        self.stints.iter().filter(|s| s.0 == player).collect()
    }
}

fn build_world(cfg: &SyntheticWorldConfig, rng: &mut ChaCha8Rng) -> (World, Vec<WorldFact>) {
    let n_clubs = (cfg.entities / 8).max(2);
    let n_awards = (cfg.entities / 12).max(1);
    let n_players = cfg.entities - n_clubs - n_awards;
    let clubs: Vec<String> = (0..n_clubs).map(|i| format!("club_{i}")).collect();
    let award_names: Vec<String> = (0..n_awards).map(|i| format!("award_{i}")).collect();
    let players: Vec<String> = (0..n_players).map(|i| format!("player_{i}")).collect();
    let years: Vec<i32> = (cfg.first_year..=cfg.last_year).collect();
    let span = years.len() as i32;

    let mut stints = Vec::new();
    let mut facts = Vec::new();
    for p in &players {
        let mut year = cfg.first_year + rng.random_range(0..span.max(1));
        let mut prev: Option<&String> = None;
        for _ in 0..cfg.facts_per_entity {
            if year > cfg.last_year {
                break;
            }
            let len = rng.random_range(1..=4);
            let end = (year + len - 1).min(cfg.last_year);
            let club = loop {
                let c = clubs.choose(rng).expect("clubs exist");
                if Some(c) != prev {
                    break c;
                }
            };
            stints.push((p.clone(), club.clone(), year, end));
            facts.push(WorldFact {
                subject: p.clone(),
                relation: MEMBER_OF.into(),
                object: club.clone(),
                begin: year,
                end,
            });
            prev = Some(club);
            year = end + 1;
        }
    }
    let mut awards = Vec::new();
    for a in &award_names {
        for &y in &years {
            let active: Vec<&String> = players
                .iter()
                .filter(|p| stints.iter().any(|s| &s.0 == *p && s.2 <= y && y <= s.3))
                .collect();
            if let Some(p) = active.choose(rng) {
                awards.push(((*p).clone(), a.clone(), y));
                facts.push(WorldFact {
                    subject: (*p).clone(),
                    relation: RECEIVED.into(),
                    object: a.clone(),
                    begin: y,
                    end: y,
                });
            }
        }
    }
    for k in 0..cfg.relations.saturating_sub(2) {
        for p in &players {
            let other = players.choose(rng).expect("players exist");
            if other == p {
                continue;
            }
            let b = cfg.first_year + rng.random_range(0..span);
            let e = (b + rng.random_range(0..3)).min(cfg.last_year);
            facts.push(WorldFact {
                subject: p.clone(),
                relation: format!("friend_{k}"),
                object: other.clone(),
                begin: b,
                end: e,
            });
        }
    }
    (
        World {
            years,
            stints,
            awards,
            award_names,
            players,
        },
        facts,
    )
}

fn record(
    text: String,
    entities: Vec<&str>,
    timestamps: Vec<i32>,
    answers: Vec<String>,
    answer_type: AnswerType,
    category: Category,
) -> QuestionRecord {
    QuestionRecord {
        text,
        entities: entities.into_iter().map(String::from).collect(),
        timestamps: timestamps.into_iter().map(|y| y.to_string()).collect(),
        answers,
        answer_type,
        category,
    }
}

fn years_to_strings(years: impl IntoIterator<Item = i32>) -> Vec<String> {
    years.into_iter().map(|y| y.to_string()).collect()
}

/// One attempt at a question of `category`; `None` when the draw does not
/// admit an answer.
fn draw(world: &World, category: Category, rng: &mut ChaCha8Rng) -> Option<QuestionRecord> {
    let variant = rng.random_bool(0.5);
    match category {
        Category::SimpleEntity => {
            if variant {
                let (_, a, y) = world.awards.choose(rng)?;
                let answers: Vec<String> = world.recipients(a, *y).into_iter().collect();
                Some(record(
                    format!("Who received {a} in {y}?"),
                    vec![a],
                    vec![*y],
                    answers,
                    AnswerType::Entity,
                    category,
                ))
            } else {
                let (p, _, b, e) = world.stints.choose(rng)?;
                let y = rng.random_range(*b..=*e);
                let answers: Vec<String> = world.clubs_at(p, y).into_iter().collect();
                Some(record(
                    format!("Which club did {p} play for in {y}?"),
                    vec![p],
                    vec![y],
                    answers,
                    AnswerType::Entity,
                    category,
                ))
            }
        }
        Category::SimpleTime => {
            if variant {
                let (p, a, _) = world.awards.choose(rng)?;
                Some(record(
                    format!("When did {p} receive {a}?"),
                    vec![p, a],
                    vec![],
                    years_to_strings(world.award_years(p, a)),
                    AnswerType::Time,
                    category,
                ))
            } else {
                let (p, c, _, _) = world.stints.choose(rng)?;
                let years: BTreeSet<i32> = world
                    .stints_of(p)
                    .into_iter()
                    .filter(|s| &s.1 == c)
                    .flat_map(|s| s.2..=s.3)
                    .collect();
                Some(record(
                    format!("When did {p} play for {c}?"),
                    vec![p, c],
                    vec![],
                    years_to_strings(years),
                    AnswerType::Time,
                    category,
                ))
            }
        }
        Category::BeforeAfter => {
            let before = rng.random_bool(0.5);
            let word = if before { "before" } else { "after" };
            if variant {
                let (p, a, _) = world.awards.choose(rng)?;
                let mine = world.award_years(p, a);
                let pivot = if before { *mine.first()? } else { *mine.last()? };
                let given: BTreeSet<i32> = world
                    .awards
                    .iter()
                    .filter(|(q, aw, _)| aw == a && q != p)
                    .map(|(_, _, y)| *y)
                    .collect();
                let year = if before {
                    given.range(..pivot).next_back().copied()?
                } else {
                    given.range(pivot + 1..).next().copied()?
                };
                let answers: Vec<String> = world.recipients(a, year).into_iter().filter(|q| q != p).collect();
                Some(record(
                    format!("Who received {a} {word} {p}?"),
                    vec![a, p],
                    vec![],
                    answers,
                    AnswerType::Entity,
                    category,
                ))
            } else {
                let (p, c, _, _) = world.stints.choose(rng)?;
                let career = world.stints_of(p);
                // A second stint at the same club would make the question ambiguous.
                if career.iter().filter(|s| &s.1 == c).count() != 1 {
                    return None;
                }
                let idx = career.iter().position(|s| &s.1 == c)?;
                let other = if before {
                    career.get(idx.checked_sub(1)?)?
                } else {
                    career.get(idx + 1)?
                };
                if other.1 == *c {
                    return None;
                }
                Some(record(
                    format!("Which club did {p} play for {word} {c}?"),
                    vec![p, c],
                    vec![],
                    vec![other.1.clone()],
                    AnswerType::Entity,
                    category,
                ))
            }
        }
        Category::FirstLast => {
            let first = rng.random_bool(0.5);
            let word = if first { "first" } else { "last" };
            if variant {
                let a = world.award_names.choose(rng)?;
                let years: BTreeSet<i32> = world.awards.iter().filter(|(_, aw, _)| aw == a).map(|x| x.2).collect();
                let year = if first { *years.first()? } else { *years.last()? };
                Some(record(
                    format!("Who was the {word} to receive {a}?"),
                    vec![a],
                    vec![],
                    world.recipients(a, year).into_iter().collect(),
                    AnswerType::Entity,
                    category,
                ))
            } else {
                let (p, c, _, _) = world.stints.choose(rng)?;
                let years: BTreeSet<i32> = world
                    .stints_of(p)
                    .into_iter()
                    .filter(|s| &s.1 == c)
                    .flat_map(|s| s.2..=s.3)
                    .collect();
                let year = if first { *years.first()? } else { *years.last()? };
                Some(record(
                    format!("When did {p} {word} play for {c}?"),
                    vec![p, c],
                    vec![],
                    vec![year.to_string()],
                    AnswerType::Time,
                    category,
                ))
            }
        }
        Category::TimeJoin if !variant => {
            // Two hops: award to recipient, recipient to club in that year.
            let (_, a, y) = world.awards.choose(rng)?;
            let answers: BTreeSet<String> = world.recipients(a, *y).iter().flat_map(|p| world.clubs_at(p, *y)).collect();
            if answers.is_empty() {
                return None;
            }
            Some(record(
                format!("Which club did the {y} recipient of {a} play for?"),
                vec![a],
                vec![*y],
                answers.into_iter().collect(),
                AnswerType::Entity,
                category,
            ))
        }
        Category::TimeJoin => {
            let (p, c, _, _) = world.stints.choose(rng)?;
            let a = world.award_names.choose(rng)?;
            let answers: BTreeSet<String> = world
                .stints_of(p)
                .into_iter()
                .filter(|s| &s.1 == c)
                .flat_map(|s| s.2..=s.3)
                .flat_map(|y| world.recipients(a, y))
                .collect();
            if answers.is_empty() {
                return None;
            }
            Some(record(
                format!("Who received {a} while {p} played for {c}?"),
                vec![a, p, c],
                vec![],
                answers.into_iter().collect(),
                AnswerType::Entity,
                category,
            ))
        }
    }
}

const RETRIES: usize = 200;

/// Builds the world and its question splits; identical for identical configs.
pub fn generate_dataset(cfg: &SyntheticWorldConfig) -> Result<Dataset> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (world, mut facts) = build_world(cfg, &mut rng);
    debug_assert!(world.players.len() + world.award_names.len() < cfg.entities);
    facts.sort();
    facts.dedup();

    let mut seen = BTreeSet::new();
    let mut skipped = BTreeMap::new();
    let mut by_category = Vec::new();
    for category in Category::ALL {
        let mut qs = Vec::new();
        for _ in 0..cfg.questions_per_category {
            let mut made = None;
            for _ in 0..RETRIES {
                if let Some(q) = draw(&world, category, &mut rng) {
                    if !q.answers.is_empty() && seen.insert(q.text.clone()) {
                        made = Some(q);
                        break;
                    }
                }
            }
            match made {
                Some(q) => qs.push(q),
                None => *skipped.entry(category).or_insert(0) += 1,
            }
        }
        if let Some(n) = skipped.get(&category) {
            warn!("{category}: skipped {n} unsatisfiable questions");
        }
        by_category.push(qs);
    }

    // Split each category separately so every split covers every category.
    let (mut train, mut dev, mut test) = (Vec::new(), Vec::new(), Vec::new());
    for mut qs in by_category {
        qs.shuffle(&mut rng);
        let n = qs.len();
        let n_train = (n as f64 * cfg.train_fraction).round() as usize;
        let n_dev = ((n as f64 * cfg.dev_fraction).round() as usize).min(n - n_train);
        let rest = qs.split_off(n_train);
        train.extend(qs);
        let (d, t) = rest.split_at(n_dev);
        dev.extend_from_slice(d);
        test.extend_from_slice(t);
    }
    info!(
        "generated {} facts over {} years; questions train {} dev {} test {}",
        facts.len(),
        world.years.len(),
        train.len(),
        dev.len(),
        test.len()
    );
    Ok(Dataset {
        facts,
        train,
        dev,
        test,
        skipped,
    })
}
