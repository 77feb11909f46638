//! Lightweight trainable text encoder: token embeddings, sinusoidal
//! positions, KG-linked token features and a stack of self-attention layers.

use qcmhm_tensor::{ParamId, ParamStore, Tensor, Var};
use rand::Rng;

use crate::embedding::position_encoding;
use crate::error::{Error, Result};
use crate::nn::{block_mask, block_mean_matrix, Ctx, Linear, TransformerLayer};
use crate::questions::TokenVocab;
use crate::store::KgStore;

/// For each token id, the entity or timestamp whose surface form it is.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct TokenLinks {
    pub entity: Vec<Option<usize>>,
    pub time: Vec<Option<usize>>,
}

impl TokenLinks {
    pub fn build(vocab: &TokenVocab, store: &KgStore) -> Self {
        let entity = vocab
            .words()
            .iter()
            .map(|w| store.entities().id(w))
            .collect();
        let time = vocab
            .words()
            .iter()
            .map(|w| store.timestamps().id(w))
            .collect();
        Self { entity, time }
    }

    /// No links at all.
    pub fn none(vocab_size: usize) -> Self {
        Self {
            entity: vec![None; vocab_size],
            time: vec![None; vocab_size],
        }
    }
}

/// Summary plus per-token states, as plain values.
#[derive(Clone, Debug, PartialEq)]
pub struct EncodedSequence {
    pub summary: Vec<f64>,
    pub token_states: Tensor,
}

/// Graph handles for one or more encoded sequences.
#[derive(Clone, Copy, Debug)]
pub struct EncodedVars {
    /// One row per sequence.
    pub summaries: Var,
    /// All tokens of all sequences stacked.
    pub states: Var,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Encoder {
    pub tokens: ParamId,
    pub entity_proj: Linear,
    pub time_proj: Linear,
    pub layers: Vec<TransformerLayer>,
    pub kg_entity: ParamId,
    pub kg_time: ParamId,
    pub links: TokenLinks,
    width: usize,
}

impl Encoder {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        params: &mut ParamStore,
        rng: &mut R,
        name: &str,
        links: TokenLinks,
        width: usize,
        layers: usize,
        kg_entity: ParamId,
        kg_time: ParamId,
    ) -> Result<Self> {
        if width == 0 || width % 2 != 0 {
            return Err(Error::Config(format!("model width must be even, got {width}")));
        }
        let vocab = links.entity.len();
        let kg_width = params.get(kg_entity).cols();
        // Unit-scale rows keep token identity above the shared position
        // signal in the mean summary, which retrieval relies on.
        let tokens = params.add(format!("{name}.tokens"), Tensor::randn(vocab, width, 1.0, rng));
        let entity_proj = Linear::new(params, rng, &format!("{name}.entity_proj"), kg_width, width, false);
        let time_proj = Linear::new(params, rng, &format!("{name}.time_proj"), kg_width, width, false);
        let layers = (0..layers)
            .map(|i| TransformerLayer::new(params, rng, &format!("{name}.layer{i}"), width))
            .collect();
        Ok(Self {
            tokens,
            entity_proj,
            time_proj,
            layers,
            kg_entity,
            kg_time,
            links,
            width,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    /// Input features for a concatenation of sequences.
    fn embed(&self, cx: &mut Ctx, seqs: &[&[usize]]) -> Result<Var> {
        let n: usize = seqs.iter().map(|s| s.len()).sum();
        let vocab = self.links.entity.len();
        let mut flat = Vec::with_capacity(n);
        let mut pos = Vec::with_capacity(n * self.width);
        for seq in seqs {
            for (k, &tok) in seq.iter().enumerate() {
                if tok >= vocab {
                    return Err(Error::UnknownId {
                        kind: "token",
                        id: tok,
                        size: vocab,
                    });
                }
                flat.push(tok);
                pos.extend(position_encoding(k, self.width)?);
            }
        }
        let table = cx.p(self.tokens);
        let tok = cx.g.gather_rows(table, &flat)?;
        let pos = cx.g.constant(Tensor::matrix(n, self.width, pos));
        let mut x = cx.g.add(tok, pos)?;
        for (links, table, proj) in [
            (&self.links.entity, self.kg_entity, &self.entity_proj),
            (&self.links.time, self.kg_time, &self.time_proj),
        ] {
            let hits: Vec<(usize, usize)> = flat
                .iter()
                .enumerate()
                .filter_map(|(i, &t)| links[t].map(|id| (i, id)))
                .collect();
            if hits.is_empty() {
                continue;
            }
            let ids: Vec<usize> = hits.iter().map(|h| h.1).collect();
            let table = cx.p(table);
            let rows = cx.g.gather_rows(table, &ids)?;
            let feats = proj.forward(cx, rows)?;
            let mut place = Tensor::zeros(n, hits.len());
            for (j, &(i, _)) in hits.iter().enumerate() {
                place.set(i, j, 1.0);
            }
            let place = cx.g.constant(place);
            let placed = cx.g.matmul(place, feats)?;
            x = cx.g.add(x, placed)?;
        }
        Ok(x)
    }

    /// Encodes several sequences at once; attention never crosses sequences.
    pub fn encode_batch(&self, cx: &mut Ctx, seqs: &[&[usize]]) -> Result<EncodedVars> {
        if seqs.is_empty() || seqs.iter().any(|s| s.is_empty()) {
            return Err(Error::Config("cannot encode an empty token sequence".into()));
        }
        let lengths: Vec<usize> = seqs.iter().map(|s| s.len()).collect();
        let mask = (seqs.len() > 1).then(|| block_mask(&lengths));
        let mut h = self.embed(cx, seqs)?;
        for layer in &self.layers {
            h = layer.forward(cx, h, mask.as_deref())?;
        }
        let summaries = if seqs.len() == 1 {
            cx.g.mean(h, 0)?
        } else {
            let avg = cx.g.constant(block_mean_matrix(&lengths));
            cx.g.matmul(avg, h)?
        };
        Ok(EncodedVars {
            summaries,
            states: h,
        })
    }

    pub fn encode(&self, cx: &mut Ctx, tokens: &[usize]) -> Result<EncodedVars> {
        self.encode_batch(cx, &[tokens])
    }

    /// Inference-only encoding returning plain values.
    pub fn encode_values(&self, params: &ParamStore, tokens: &[usize]) -> Result<EncodedSequence> {
        let mut g = qcmhm_tensor::Graph::new();
        let mut cx = Ctx::frozen(&mut g, params);
        let out = self.encode(&mut cx, tokens)?;
        Ok(EncodedSequence {
            summary: cx.value(out.summaries).data().to_vec(),
            token_states: cx.value(out.states).clone(),
        })
    }

    /// Summaries of many sequences without gradients, in chunks.
    pub fn summarize_all(&self, params: &ParamStore, seqs: &[Vec<usize>], chunk: usize) -> Result<Vec<Vec<f64>>> {
        let mut out = Vec::with_capacity(seqs.len());
        for part in seqs.chunks(chunk.max(1)) {
            let mut g = qcmhm_tensor::Graph::new();
            let mut cx = Ctx::frozen(&mut g, params);
            let refs: Vec<&[usize]> = part.iter().map(Vec::as_slice).collect();
            let enc = self.encode_batch(&mut cx, &refs)?;
            let t = cx.value(enc.summaries);
            for r in 0..t.rows() {
                out.push(t.row_slice(r).to_vec());
            }
        }
        Ok(out)
    }
}
