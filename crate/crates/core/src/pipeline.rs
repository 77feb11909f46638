//! End-to-end runs: synthetic data, KG pretraining, QA training and
//! evaluation, and the three ablation variants.

use std::time::Instant;

use log::info;
use serde::{Deserialize, Serialize};

use crate::embedding::{train_kg, KgEmbeddings, KgTrainConfig};
use crate::eval::{evaluate, EvalReport};
use crate::generate::{generate_dataset, Dataset, SyntheticWorldConfig};
use crate::model::{Prepared, QaConfig, QaEpochLog, QaModel};
use crate::questions::{QuestionRecord, TokenVocab};
use crate::store::{parse_facts, KgStore};
use crate::Result;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub world: SyntheticWorldConfig,
    pub kg: KgTrainConfig,
    pub qa: QaConfig,
}

impl PipelineConfig {
    /// Every seed in the pipeline derived from one value.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.world.seed = seed;
        self.kg.seed = seed.wrapping_add(1);
        self.qa.seed = seed.wrapping_add(2);
        self
    }
}

/// Token vocabulary over the training questions plus graph names.
pub fn build_vocab(train: &[QuestionRecord], store: &KgStore) -> TokenVocab {
    TokenVocab::build(train.iter().map(|q| q.text.as_str()), store)
}

pub fn store_of(dataset: &Dataset) -> Result<KgStore> {
    KgStore::ingest(&parse_facts(&dataset.fact_file())?)
}

/// Resolves questions for training; unanswerable ones are dropped.
pub fn prepare_all(model: &QaModel, store: &KgStore, records: &[QuestionRecord]) -> Result<Vec<Prepared>> {
    let mut out = Vec::with_capacity(records.len());
    for r in records {
        match model.prepare(r, store) {
            Ok(p) => out.push(p),
            Err(crate::Error::Unanswerable(why)) => log::warn!("skipping training question: {why}"),
            Err(e) => return Err(e),
        }
    }
    Ok(out)
}

pub struct QaRun {
    pub model: QaModel,
    pub logs: Vec<QaEpochLog>,
    pub dev: EvalReport,
    pub test: EvalReport,
    pub seconds: f64,
}

/// Trains a QA model on `dataset.train` over fixed KG embeddings and
/// evaluates it on the dev and test splits.
pub fn train_and_evaluate(dataset: &Dataset, store: &KgStore, kg: &KgEmbeddings, qa: &QaConfig) -> Result<QaRun> {
    let start = Instant::now();
    let vocab = build_vocab(&dataset.train, store);
    let mut model = QaModel::new(qa.clone(), vocab, store, kg)?;
    let train = prepare_all(&model, store, &dataset.train)?;
    let logs = model.train(&train)?;
    let (dev, _) = evaluate(&model, store, &dataset.dev)?;
    let (test, _) = evaluate(&model, store, &dataset.test)?;
    let seconds = start.elapsed().as_secs_f64();
    info!("QA run: test Hits@1 {:.3} in {seconds:.1}s", test.overall.hits1);
    Ok(QaRun {
        model,
        logs,
        dev,
        test,
        seconds,
    })
}

pub struct PipelineRun {
    pub dataset: Dataset,
    pub store: KgStore,
    pub kg: KgEmbeddings,
    pub qa: QaRun,
}

pub fn run_pipeline(cfg: &PipelineConfig) -> Result<PipelineRun> {
    let dataset = generate_dataset(&cfg.world)?;
    let store = store_of(&dataset)?;
    let (kg, _) = train_kg(&store, &cfg.kg)?;
    let qa = train_and_evaluate(&dataset, &store, &kg, &cfg.qa)?;
    Ok(PipelineRun {
        dataset,
        store,
        kg,
        qa,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Full,
    NoTimeOrder,
    NoMultiHop,
    NoCalibration,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::Full, Variant::NoTimeOrder, Variant::NoMultiHop, Variant::NoCalibration];

    pub fn label(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::NoTimeOrder => "w/o time order",
            Variant::NoMultiHop => "w/o multi-hop",
            Variant::NoCalibration => "w/o calibration",
        }
    }

    /// Configs for this variant derived from the full model's configs.
    pub fn apply(self, kg: &KgTrainConfig, qa: &QaConfig) -> (KgTrainConfig, QaConfig) {
        let (mut kg, mut qa) = (kg.clone(), qa.clone());
        match self {
            Variant::Full => {}
            Variant::NoTimeOrder => kg.lambda = 0.0,
            Variant::NoMultiHop => qa.aleph = 1,
            Variant::NoCalibration => qa.calibration = false,
        }
        (kg, qa)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: Variant,
    pub test: EvalReport,
    pub seconds: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub rows: Vec<AblationRow>,
}

impl AblationReport {
    pub fn get(&self, v: Variant) -> Option<&EvalReport> {
        self.rows.iter().find(|r| r.variant == v).map(|r| &r.test)
    }

    pub fn to_markdown(&self) -> String {
        let mut out = String::from(
            "| variant | Hits@1 | Hits@10 | simple | complex | two-hop | seconds |\n|---|---:|---:|---:|---:|---:|---:|\n",
        );
        for r in &self.rows {
            out.push_str(&format!(
                "| {} | {:.3} | {:.3} | {:.3} | {:.3} | {:.3} | {:.1} |\n",
                r.variant.label(),
                r.test.overall.hits1,
                r.test.overall.hits10,
                r.test.simple.hits1,
                r.test.complex.hits1,
                r.test.two_hop.hits1,
                r.seconds
            ));
        }
        out
    }
}

/// Trains every variant on the same dataset. KG embeddings are shared by
/// all variants except the one without the time-order objective.
pub fn ablate(cfg: &PipelineConfig, variants: &[Variant]) -> Result<AblationReport> {
    let dataset = generate_dataset(&cfg.world)?;
    let store = store_of(&dataset)?;
    let mut shared: Option<KgEmbeddings> = None;
    let mut rows = Vec::with_capacity(variants.len());
    for &variant in variants {
        let start = Instant::now();
        let (kg_cfg, qa_cfg) = variant.apply(&cfg.kg, &cfg.qa);
        let kg = if kg_cfg == cfg.kg {
            if shared.is_none() {
                shared = Some(train_kg(&store, &kg_cfg)?.0);
            }
            shared.clone().expect("trained above")
        } else {
            train_kg(&store, &kg_cfg)?.0
        };
        let run = train_and_evaluate(&dataset, &store, &kg, &qa_cfg)?;
        info!("{}: test Hits@1 {:.3}", variant.label(), run.test.overall.hits1);
        rows.push(AblationRow {
            variant,
            test: run.test,
            seconds: start.elapsed().as_secs_f64(),
        });
    }
    Ok(AblationReport { rows })
}
