//! The assembled question answering pipeline: encoder, fact retrieval and
//! calibration, multi-hop graph reasoning, knowledge fusion and the answer
//! head, plus the joint training loop.

use log::{info, warn};
use qcmhm_tensor::{Adam, AdamConfig, Graph, ParamId, ParamStore, Tensor, Var};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::answer::{qa_loss, AnswerDistribution, AnswerHead, Candidates, Slots};
use crate::calibration::{retrieve_spo, Calibration, Retrieved};
use crate::embedding::KgEmbeddings;
use crate::encoder::{Encoder, TokenLinks};
use crate::error::{Error, Result};
use crate::gnn::{AttentionTrace, KnowledgeFusion, MultiHop, MultiHopVars};
use crate::nn::Ctx;
use crate::questions::{QuestionInstance, QuestionRecord, TokenVocab};
use crate::store::{KgStore, QuerySubgraph};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct QaConfig {
    /// Model width `d_model`; must be even.
    pub width: usize,
    pub encoder_layers: usize,
    pub fusion_layers: usize,
    pub gnn_layers: usize,
    /// Diffusion distance; 1 gives the one-hop ablation.
    pub aleph: usize,
    /// Hidden width of the edge attention scorer.
    pub attention_hidden: usize,
    /// Hidden width of the calibration view scorers.
    pub view_hidden: usize,
    /// Facts retrieved per question.
    pub top_k: usize,
    /// Subgraph radius around annotated entities.
    pub hops: usize,
    pub epochs: usize,
    pub lr: f64,
    /// Decoupled weight decay on trainable parameters.
    pub weight_decay: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub unfreeze_kg: bool,
    /// When false the calibrated tokens are the raw encoder states.
    pub calibration: bool,
}

impl Default for QaConfig {
    fn default() -> Self {
        Self {
            width: 32,
            encoder_layers: 2,
            fusion_layers: 2,
            gnn_layers: 2,
            aleph: 2,
            attention_hidden: 16,
            view_hidden: 16,
            top_k: 10,
            hops: 2,
            epochs: 30,
            lr: 2e-3,
            weight_decay: 0.0,
            batch_size: 16,
            seed: 11,
            unfreeze_kg: false,
            calibration: true,
        }
    }
}

impl QaConfig {
    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.width % 2 != 0 {
            return Err(Error::Config(format!("width must be even and positive, got {}", self.width)));
        }
        if self.gnn_layers == 0 {
            return Err(Error::Config("at least one graph layer is required".into()));
        }
        if self.top_k == 0 || self.batch_size == 0 || self.attention_hidden == 0 || self.view_hidden == 0 {
            return Err(Error::Config("top_k, batch size and hidden widths must be positive".into()));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::Config(format!("learning rate must be positive, got {}", self.lr)));
        }
        Ok(())
    }
}

/// A question resolved against the store with its subgraph and candidates.
#[derive(Clone, Debug, PartialEq)]
pub struct Prepared {
    pub question: QuestionInstance,
    pub subgraph: QuerySubgraph,
    pub candidates: Candidates,
    pub slots: Slots,
    /// Candidate positions of the gold answers; may be empty.
    pub gold: Vec<usize>,
}

impl Prepared {
    pub fn new(record: &QuestionRecord, store: &KgStore, vocab: &TokenVocab, hops: usize) -> Result<Self> {
        let question = QuestionInstance::resolve(record, store, vocab)?;
        let subgraph = store.extract_subgraph(&question.annotated_entities, hops)?;
        let candidates = Candidates::from_subgraph(&subgraph);
        let slots = Slots::of(&question)?;
        let gold = candidates.gold_positions(&question);
        Ok(Self {
            question,
            subgraph,
            candidates,
            slots,
            gold,
        })
    }
}

/// Graph handles from one forward pass.
#[derive(Clone, Debug)]
pub struct ForwardVars {
    pub logits: Var,
    pub retrieved: Vec<Retrieved>,
    /// Retrieved fact summaries as a graph input, when calibration ran.
    pub spo: Option<Var>,
    pub multihop: MultiHopVars,
    pub q_fin: Var,
}

/// Inference result for one question.
#[derive(Clone, Debug)]
pub struct Prediction {
    pub distribution: AnswerDistribution,
    pub retrieved: Vec<Retrieved>,
    pub trace: AttentionTrace,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct QaEpochLog {
    pub epoch: usize,
    pub loss: f64,
    /// Training questions without a gold answer among their candidates.
    pub skipped: usize,
}

/// Ids of the KG tables copied into the model's parameter store.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct KgIds {
    pub entity: ParamId,
    pub relation: ParamId,
    pub time: ParamId,
}

impl KgIds {
    pub fn contains(&self, id: ParamId) -> bool {
        id == self.entity || id == self.relation || id == self.time
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct QaModel {
    pub config: QaConfig,
    pub params: ParamStore,
    pub vocab: TokenVocab,
    pub kg: KgIds,
    pub encoder: Encoder,
    pub calibration: Calibration,
    pub multihop: MultiHop,
    pub fusion: KnowledgeFusion,
    pub head: AnswerHead,
    /// Token ids of each verbalized fact, by fact id.
    fact_tokens: Vec<Vec<usize>>,
    /// Encoder summaries of each verbalized fact, refreshed once per epoch.
    spo_cache: Vec<Vec<f64>>,
}

const SUMMARY_CHUNK: usize = 32;

impl QaModel {
    /// Fresh modules around a copy of the given KG tables; `kg` must match
    /// the store's vocabulary sizes.
    pub fn new(config: QaConfig, vocab: TokenVocab, store: &KgStore, kg: &KgEmbeddings) -> Result<Self> {
        let tables = [
            kg.params.get(kg.entity).clone(),
            kg.params.get(kg.relation).clone(),
            kg.params.get(kg.time).clone(),
        ];
        Self::with_tables(config, vocab, store, tables)
    }

    /// Like [`QaModel::new`] from bare entity, relation and timestamp tables.
    pub fn with_tables(config: QaConfig, vocab: TokenVocab, store: &KgStore, tables: [Tensor; 3]) -> Result<Self> {
        config.validate()?;
        let [entity, relation, time] = tables;
        let expected = [store.num_entities(), store.num_relations(), store.num_timestamps()];
        let found = [entity.rows(), relation.rows(), time.rows()];
        if expected != found {
            return Err(Error::Config(format!(
                "embedding tables have {found:?} rows (entities, relations, timestamps), the store needs {expected:?}"
            )));
        }
        let kg_width = entity.cols();
        if kg_width == 0 || kg_width % 2 != 0 || relation.cols() != kg_width || time.cols() != kg_width {
            return Err(Error::Config("embedding tables must share one even width".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut params = ParamStore::new();
        let ids = KgIds {
            entity: params.add("kg.entity", entity),
            relation: params.add("kg.relation", relation),
            time: params.add("kg.time", time),
        };
        let d = config.width;
        let links = TokenLinks::build(&vocab, store);
        let encoder = Encoder::new(
            &mut params,
            &mut rng,
            "encoder",
            links,
            d,
            config.encoder_layers,
            ids.entity,
            ids.time,
        )?;
        let calibration = Calibration::new(&mut params, &mut rng, "calibration", d, config.view_hidden);
        let multihop = MultiHop::new(
            &mut params,
            &mut rng,
            "multihop",
            d,
            config.attention_hidden,
            config.gnn_layers,
            config.aleph,
            (ids.entity, ids.relation, ids.time),
        );
        let fusion = KnowledgeFusion::new(&mut params, &mut rng, "fusion", d, config.fusion_layers);
        let head = AnswerHead::new(&mut params, &mut rng, "head", d, ids.entity, ids.time);
        let fact_tokens = store
            .facts()
            .iter()
            .map(|f| vocab.encode(&store.verbalize(f)))
            .collect();
        let mut model = Self {
            config,
            params,
            vocab,
            kg: ids,
            encoder,
            calibration,
            multihop,
            fusion,
            head,
            fact_tokens,
            spo_cache: Vec::new(),
        };
        model.refresh_spo_cache()?;
        Ok(model)
    }

    /// Width `2D` of the KG tables.
    pub fn kg_width(&self) -> usize {
        self.params.get(self.kg.entity).cols()
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        self.config.unfreeze_kg || !self.kg.contains(id)
    }

    /// Re-encodes every verbalized fact with the current encoder.
    pub fn refresh_spo_cache(&mut self) -> Result<()> {
        self.spo_cache = if self.config.calibration {
            self.encoder.summarize_all(&self.params, &self.fact_tokens, SUMMARY_CHUNK)?
        } else {
            Vec::new()
        };
        Ok(())
    }

    pub fn spo_summary(&self, fact: usize) -> Option<&[f64]> {
        self.spo_cache.get(fact).map(Vec::as_slice)
    }

    pub fn prepare(&self, record: &QuestionRecord, store: &KgStore) -> Result<Prepared> {
        Prepared::new(record, store, &self.vocab, self.config.hops)
    }

    /// One forward pass inside `cx`. With `spo_grad` the retrieved fact
    /// summaries enter as differentiable inputs.
    pub fn forward(&self, cx: &mut Ctx, p: &Prepared, spo_grad: bool) -> Result<ForwardVars> {
        let enc = self.encoder.encode(cx, &p.question.tokens)?;
        let mut q_sem = enc.states;
        let mut retrieved = Vec::new();
        let mut spo = None;
        if self.config.calibration {
            let query = cx.value(enc.summaries).data().to_vec();
            let pool: Vec<(usize, &[f64])> = p
                .subgraph
                .facts
                .iter()
                .filter_map(|&f| self.spo_summary(f).map(|s| (f, s)))
                .collect();
            retrieved = retrieve_spo(&query, &pool, self.config.top_k);
            if !retrieved.is_empty() {
                let rows: Vec<f64> = retrieved.iter().flat_map(|r| pool[r.index].1.iter().copied()).collect();
                let keys = cx.g.input(Tensor::matrix(retrieved.len(), self.config.width, rows), spo_grad);
                q_sem = self.calibration.calibrate(cx, enc.states, keys)?.q_sem;
                spo = Some(keys);
            }
        }
        let multihop = self.multihop.forward(cx, &p.subgraph)?;
        let q_fin = self.fusion.forward(cx, q_sem, multihop.q_mlh)?;
        let (q_ent, q_tim) = self.head.project(cx, q_fin)?;
        let logits = self.head.score_candidates(cx, p.slots, &p.candidates, q_ent, q_tim)?;
        Ok(ForwardVars {
            logits,
            retrieved,
            spo,
            multihop,
            q_fin,
        })
    }

    pub fn predict(&self, p: &Prepared) -> Result<Prediction> {
        let mut g = Graph::new();
        let mut cx = Ctx::frozen(&mut g, &self.params);
        let out = self.forward(&mut cx, p, false)?;
        let logits = cx.value(out.logits).data().to_vec();
        if logits.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite(format!("logits for {:?}", p.question.text)));
        }
        Ok(Prediction {
            distribution: AnswerDistribution::from_logits(p.candidates.ids(), &logits),
            retrieved: out.retrieved,
            trace: MultiHop::trace(&cx, &p.subgraph, &out.multihop),
        })
    }

    /// Mean loss over a batch; instances without gold are left out. Returns
    /// `None` when nothing in the batch has a gold answer.
    pub fn batch_loss(&self, cx: &mut Ctx, batch: &[&Prepared]) -> Result<Option<Var>> {
        let mut losses = Vec::with_capacity(batch.len());
        for p in batch.iter().filter(|p| !p.gold.is_empty()) {
            let out = self.forward(cx, p, false)?;
            losses.push(qa_loss(cx, out.logits, &p.gold)?);
        }
        if losses.is_empty() {
            return Ok(None);
        }
        let stacked = cx.g.concat(&losses, 1)?;
        Ok(Some(cx.g.mean(stacked, 1)?))
    }

    /// Jointly trains every module except the frozen KG tables. On a
    /// non-finite loss or gradient training stops with an error and the
    /// parameters keep their last finite values.
    pub fn train(&mut self, train: &[Prepared]) -> Result<Vec<QaEpochLog>> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed ^ 0x5eed);
        let mut adam = Adam::new(AdamConfig {
            lr: self.config.lr,
            weight_decay: self.config.weight_decay,
            ..AdamConfig::default()
        });
        let skipped = train.iter().filter(|p| p.gold.is_empty()).count();
        if skipped > 0 {
            warn!("{skipped} training questions have no gold answer among their candidates and are skipped");
        }
        let mut order: Vec<usize> = (0..train.len()).collect();
        let mut logs = Vec::with_capacity(self.config.epochs);
        for epoch in 0..self.config.epochs {
            self.refresh_spo_cache()?;
            order.shuffle(&mut rng);
            let (mut total, mut batches) = (0.0, 0usize);
            for chunk in order.chunks(self.config.batch_size) {
                let batch: Vec<&Prepared> = chunk.iter().map(|&i| &train[i]).collect();
                let mut g = Graph::new();
                let trainable: Vec<bool> = self.params.ids().map(|id| self.is_trainable(id)).collect();
                let mut cx = Ctx::with_trainable(&mut g, &self.params, |id| trainable[id.0]);
                let Some(loss) = self.batch_loss(&mut cx, &batch)? else {
                    continue;
                };
                let value = cx.g.scalar(loss)?;
                if !value.is_finite() {
                    return Err(Error::NonFinite(format!("QA loss {value} at epoch {epoch}")));
                }
                let grads = g.backward(loss)?;
                if grads.params().any(|(_, t)| !t.all_finite()) {
                    return Err(Error::NonFinite(format!("QA gradient at epoch {epoch}")));
                }
                adam.step(&mut self.params, &grads, |id| trainable[id.0]);
                total += value;
                batches += 1;
            }
            let loss = total / batches.max(1) as f64;
            info!("qa epoch {epoch}: loss {loss:.4}");
            logs.push(QaEpochLog { epoch, loss, skipped });
        }
        self.refresh_spo_cache()?;
        Ok(logs)
    }
}
