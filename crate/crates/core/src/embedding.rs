//! Time-aware complex KG embeddings.
//!
//! Every table row has length `2D`: the first `D` entries are real parts
//! and the last `D` imaginary parts. With that layout
//! `Re(Σ x_d · conj(y_d))` is the plain dot product of the two rows, which
//! is what lets entity scoring collapse into one matrix product.

use log::{debug, info};
use qcmhm_tensor::{Adam, AdamConfig, Graph, ParamId, ParamStore, Tensor, Var};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::store::KgStore;

/// `a ⊙ b` for split complex rows (any number of rows, width `2D`).
pub fn cmul(g: &mut Graph, a: Var, b: Var) -> Result<Var> {
    let width = g.value(a).cols();
    if width % 2 != 0 || g.value(b).cols() != width {
        return Err(Error::Tensor(qcmhm_tensor::TensorError::ShapeMismatch {
            op: "cmul",
            lhs: g.value(a).shape().to_vec(),
            rhs: g.value(b).shape().to_vec(),
        }));
    }
    let d = width / 2;
    let (ar, ai) = (g.slice_cols(a, 0, d)?, g.slice_cols(a, d, width)?);
    let (br, bi) = (g.slice_cols(b, 0, d)?, g.slice_cols(b, d, width)?);
    let rr = g.mul(ar, br)?;
    let ii = g.mul(ai, bi)?;
    let ri = g.mul(ar, bi)?;
    let ir = g.mul(ai, br)?;
    let re = g.sub(rr, ii)?;
    let im = g.add(ri, ir)?;
    Ok(g.concat(&[re, im], 1)?)
}

/// `[re, im] -> [re, -im]`.
pub fn conj(g: &mut Graph, a: Var) -> Result<Var> {
    let width = g.value(a).cols();
    let d = width / 2;
    let re = g.slice_cols(a, 0, d)?;
    let im = g.slice_cols(a, d, width)?;
    let neg = g.scale(im, -1.0)?;
    Ok(g.concat(&[re, neg], 1)?)
}

/// Score of one quadruple from raw split rows.
pub fn complex_score(s: &[f64], r: &[f64], o: &[f64], t: &[f64]) -> Result<f64> {
    let w = s.len();
    if w % 2 != 0 || r.len() != w || o.len() != w || t.len() != w {
        return Err(Error::Config(format!(
            "embedding widths differ or are odd: s={}, r={}, o={}, t={}",
            s.len(),
            r.len(),
            o.len(),
            t.len()
        )));
    }
    let d = w / 2;
    let mut total = 0.0;
    for i in 0..d {
        // (s r) then (· t), then Re(· conj(o)).
        let (sr_re, sr_im) = (
            s[i] * r[i] - s[d + i] * r[d + i],
            s[i] * r[d + i] + s[d + i] * r[i],
        );
        let (x_re, x_im) = (
            sr_re * t[i] - sr_im * t[d + i],
            sr_re * t[d + i] + sr_im * t[i],
        );
        total += x_re * o[i] + x_im * o[d + i];
    }
    Ok(total)
}

/// Fixed sinusoidal code for timestamp index `k`.
pub fn position_encoding(k: usize, dim: usize) -> Result<Vec<f64>> {
    if dim == 0 || dim % 2 != 0 {
        return Err(Error::Config(format!(
            "position encoding width must be even and positive, got {dim}"
        )));
    }
    let k = k as f64;
    Ok((0..dim)
        .map(|c| {
            let i = (c / 2) as f64;
            let angle = k / 10000f64.powf(2.0 * i / dim as f64);
            if c % 2 == 0 {
                angle.sin()
            } else {
                angle.cos()
            }
        })
        .collect())
}

/// Position codes for timestamps `0..count`, one row each.
pub fn position_table(count: usize, dim: usize) -> Result<Tensor> {
    let mut data = Vec::with_capacity(count * dim);
    for k in 0..count {
        data.extend(position_encoding(k, dim)?);
    }
    Ok(Tensor::matrix(count, dim, data))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum TcLoss {
    /// Softmax over all entities as the object, per expanded edge.
    CrossEntropy,
    /// Hinge on one uniformly sampled corrupted object per edge.
    MarginRanking { margin: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct KgTrainConfig {
    /// Complex dimension D; rows have width 2D.
    pub dim: usize,
    /// Weight of the time-order term.
    pub lambda: f64,
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    /// Ordered timestamp pairs sampled per batch for the order term.
    pub order_pairs: usize,
    pub init_std: f64,
    /// Weight of the cubic-modulus regulariser.
    pub n3: f64,
    pub loss: TcLoss,
    pub seed: u64,
}

impl Default for KgTrainConfig {
    fn default() -> Self {
        Self {
            dim: 16,
            lambda: 0.3,
            epochs: 100,
            lr: 1e-2,
            batch_size: 128,
            order_pairs: 10,
            init_std: 0.05,
            n3: 0.0,
            loss: TcLoss::CrossEntropy,
            seed: 7,
        }
    }
}

impl KgTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.batch_size == 0 || self.lr <= 0.0 || self.init_std < 0.0 {
            return Err(Error::Config(format!("invalid KG training config: {self:?}")));
        }
        if self.lambda < 0.0 || self.n3 < 0.0 {
            return Err(Error::Config("loss weights must be non-negative".into()));
        }
        Ok(())
    }
}

/// Entity, relation and timestamp tables plus the order classifier.
#[derive(Clone, Debug, PartialEq)]
pub struct KgEmbeddings {
    pub params: ParamStore,
    pub entity: ParamId,
    pub relation: ParamId,
    pub time: ParamId,
    pub w_ts: ParamId,
    positions: Tensor,
}

impl KgEmbeddings {
    pub fn random<R: Rng + ?Sized>(
        entities: usize,
        relations: usize,
        timestamps: usize,
        dim: usize,
        std: f64,
        rng: &mut R,
    ) -> Result<Self> {
        if dim == 0 || entities == 0 || relations == 0 || timestamps == 0 {
            return Err(Error::Config("embedding tables need positive sizes".into()));
        }
        let w = 2 * dim;
        let mut params = ParamStore::new();
        let entity = params.add("kg.entity", Tensor::randn(entities, w, std, rng));
        let relation = params.add("kg.relation", Tensor::randn(relations, w, std, rng));
        let time = params.add("kg.time", Tensor::randn(timestamps, w, std, rng));
        let w_ts = params.add("kg.w_ts", Tensor::randn(1, w, std, rng));
        Self::from_params(params, entity, relation, time, w_ts)
    }

    pub fn from_params(
        params: ParamStore,
        entity: ParamId,
        relation: ParamId,
        time: ParamId,
        w_ts: ParamId,
    ) -> Result<Self> {
        let w = params.get(entity).cols();
        if w % 2 != 0 {
            return Err(Error::Config(format!("table width {w} is odd")));
        }
        for id in [relation, time, w_ts] {
            if params.get(id).cols() != w {
                return Err(Error::Config(format!(
                    "table {} has width {}, expected {w}",
                    params.name(id),
                    params.get(id).cols()
                )));
            }
        }
        let positions = position_table(params.get(time).rows(), w)?;
        Ok(Self {
            params,
            entity,
            relation,
            time,
            w_ts,
            positions,
        })
    }

    /// Complex dimension D.
    pub fn dim(&self) -> usize {
        self.width() / 2
    }

    /// Row width 2D.
    pub fn width(&self) -> usize {
        self.params.get(self.entity).cols()
    }

    pub fn num_entities(&self) -> usize {
        self.params.get(self.entity).rows()
    }

    pub fn num_relations(&self) -> usize {
        self.params.get(self.relation).rows()
    }

    pub fn num_timestamps(&self) -> usize {
        self.params.get(self.time).rows()
    }

    pub fn positions(&self) -> &Tensor {
        &self.positions
    }

    fn row(&self, table: ParamId, kind: &'static str, id: usize) -> Result<&[f64]> {
        let t = self.params.get(table);
        if id >= t.rows() {
            return Err(Error::UnknownId {
                kind,
                id,
                size: t.rows(),
            });
        }
        Ok(t.row_slice(id))
    }

    pub fn entity_row(&self, id: usize) -> Result<&[f64]> {
        self.row(self.entity, "entity", id)
    }

    pub fn relation_row(&self, id: usize) -> Result<&[f64]> {
        self.row(self.relation, "relation", id)
    }

    pub fn time_row(&self, id: usize) -> Result<&[f64]> {
        self.row(self.time, "timestamp", id)
    }

    pub fn tcomplex_score(&self, s: usize, r: usize, o: usize, t: usize) -> Result<f64> {
        complex_score(
            self.entity_row(s)?,
            self.relation_row(r)?,
            self.entity_row(o)?,
            self.time_row(t)?,
        )
    }

    /// Order logit `W_ts · ((e_m + t_m) - (e_n + t_n))`, antisymmetric in `(m, n)`.
    pub fn time_order_logit(&self, m: usize, n: usize) -> Result<f64> {
        let (em, en) = (self.time_row(m)?, self.time_row(n)?);
        let (pm, pn) = (self.positions.row_slice(m), self.positions.row_slice(n));
        let w = self.params.get(self.w_ts).data();
        Ok((0..w.len())
            .map(|c| w[c] * ((em[c] + pm[c]) - (en[c] + pn[c])))
            .sum())
    }

    /// Probability that timestamp `m` precedes `n`.
    pub fn time_order_prob(&self, m: usize, n: usize) -> Result<f64> {
        let z = self.time_order_logit(m, n)?;
        Ok(1.0 / (1.0 + (-z).exp()))
    }

    /// All entities ranked as objects of `(s, r, ?, t)`, best first, ties by id.
    pub fn link_predict(&self, s: usize, r: usize, t: usize) -> Result<Vec<(usize, f64)>> {
        let mut scored = Vec::with_capacity(self.num_entities());
        for o in 0..self.num_entities() {
            scored.push((o, self.tcomplex_score(s, r, o, t)?));
        }
        scored.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        Ok(scored)
    }

    /// Fraction of pairs `m < n` with `ρ(m, n) > 0.5`.
    pub fn order_accuracy(&self) -> Result<f64> {
        let n = self.num_timestamps();
        if n < 2 {
            return Ok(1.0);
        }
        let mut right = 0usize;
        let mut total = 0usize;
        for a in 0..n {
            for b in a + 1..n {
                total += 1;
                if self.time_order_prob(a, b)? > 0.5 {
                    right += 1;
                }
            }
        }
        Ok(right as f64 / total as f64)
    }

    /// Filtered Hits@1 over every forward edge `(s, r, ?, t)` of the store.
    pub fn filtered_hits_at_1(&self, store: &KgStore) -> Result<f64> {
        use std::collections::{BTreeMap, BTreeSet};
        let base = store.num_base_relations();
        let mut truth: BTreeMap<(usize, usize, usize), BTreeSet<usize>> = BTreeMap::new();
        for e in store.edges() {
            truth.entry((e.src, e.rel, e.time)).or_default().insert(e.dst);
        }
        let mut hits = 0usize;
        let mut total = 0usize;
        for e in store.edges().iter().filter(|e| e.rel < base) {
            total += 1;
            let known = &truth[&(e.src, e.rel, e.time)];
            let gold = self.tcomplex_score(e.src, e.rel, e.dst, e.time)?;
            let mut beaten = false;
            for o in 0..self.num_entities() {
                if o == e.dst || known.contains(&o) {
                    continue;
                }
                let sc = self.tcomplex_score(e.src, e.rel, o, e.time)?;
                if sc > gold || (sc == gold && o < e.dst) {
                    beaten = true;
                    break;
                }
            }
            if !beaten {
                hits += 1;
            }
        }
        Ok(if total == 0 { 0.0 } else { hits as f64 / total as f64 })
    }
}

/// One training batch: expanded edges and sampled timestamp pairs.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct KgBatch {
    /// `(subject, relation, object, time)` per row.
    pub quads: Vec<(usize, usize, usize, usize)>,
    /// Corrupted objects for the margin loss, one per quad.
    pub negatives: Vec<usize>,
    /// Ordered pairs `(m, n)`, `m != n`.
    pub pairs: Vec<(usize, usize)>,
}

/// Loss terms of one batch, each already averaged.
#[derive(Clone, Copy, Debug)]
pub struct KgLossVars {
    pub total: Var,
    pub tc: Var,
    pub ts: Option<Var>,
}

/// Builds `L_tc + λ L_ts` (+ N3) for a batch on `g`.
pub fn kg_loss(
    g: &mut Graph,
    emb: &KgEmbeddings,
    batch: &KgBatch,
    config: &KgTrainConfig,
) -> Result<KgLossVars> {
    let ent = g.param(&emb.params, emb.entity);
    let rel = g.param(&emb.params, emb.relation);
    let tim = g.param(&emb.params, emb.time);
    let b = batch.quads.len();
    let n_ent = emb.num_entities();
    let s_idx: Vec<usize> = batch.quads.iter().map(|q| q.0).collect();
    let r_idx: Vec<usize> = batch.quads.iter().map(|q| q.1).collect();
    let o_idx: Vec<usize> = batch.quads.iter().map(|q| q.2).collect();
    let t_idx: Vec<usize> = batch.quads.iter().map(|q| q.3).collect();
    let s = g.gather_rows(ent, &s_idx)?;
    let r = g.gather_rows(rel, &r_idx)?;
    let t = g.gather_rows(tim, &t_idx)?;
    let sr = cmul(g, s, r)?;
    let x = cmul(g, sr, t)?;
    let ent_t = g.transpose(ent)?;
    let scores = g.matmul(x, ent_t)?;

    let mut tc = match config.loss {
        TcLoss::CrossEntropy => {
            let logp = g.log_softmax_rows(scores)?;
            let mut onehot = Tensor::zeros(b, n_ent);
            for (i, &o) in o_idx.iter().enumerate() {
                onehot.set(i, o, 1.0);
            }
            let mask = g.constant(onehot);
            let picked = g.mul(logp, mask)?;
            let sum = g.sum_all(picked)?;
            g.scale(sum, -1.0 / b as f64)?
        }
        TcLoss::MarginRanking { margin } => {
            if batch.negatives.len() != b {
                return Err(Error::Config("margin loss needs one negative per quad".into()));
            }
            let mut sel = Tensor::zeros(b, n_ent);
            for (i, (&o, &neg)) in o_idx.iter().zip(&batch.negatives).enumerate() {
                sel.set(i, o, sel.get(i, o) - 1.0);
                sel.set(i, neg, sel.get(i, neg) + 1.0);
            }
            let sel = g.constant(sel);
            let diff = g.mul(scores, sel)?;
            let ones = g.constant(Tensor::full(n_ent, 1, 1.0));
            let per_row = g.matmul(diff, ones)?;
            let shifted = g.add_scalar(per_row, margin)?;
            let hinge = g.relu(shifted)?;
            g.mean(hinge, 0)?
        }
    };

    if config.n3 > 0.0 {
        let o = g.gather_rows(ent, &o_idx)?;
        let rt = cmul(g, r, t)?;
        let mut reg = None;
        for v in [s, rt, o] {
            let cube = modulus_cubed_sum(g, v)?;
            reg = Some(match reg {
                None => cube,
                Some(acc) => g.add(acc, cube)?,
            });
        }
        let reg = g.scale(reg.expect("three terms"), config.n3 / b as f64)?;
        tc = g.add(tc, reg)?;
    }

    let mut total = tc;
    let mut ts = None;
    if config.lambda > 0.0 && !batch.pairs.is_empty() {
        let pos = g.constant(emb.positions.clone());
        let w_ts = g.param(&emb.params, emb.w_ts);
        let full = g.add(tim, pos)?;
        let m_idx: Vec<usize> = batch.pairs.iter().map(|p| p.0).collect();
        let n_idx: Vec<usize> = batch.pairs.iter().map(|p| p.1).collect();
        let em = g.gather_rows(full, &m_idx)?;
        let en = g.gather_rows(full, &n_idx)?;
        let diff = g.sub(em, en)?;
        let w_col = g.transpose(w_ts)?;
        let logits = g.matmul(diff, w_col)?;
        // BCE(σ(z), y) = softplus(-z) for y = 1 and softplus(z) for y = 0.
        let signs: Vec<f64> = batch
            .pairs
            .iter()
            .map(|&(m, n)| if m < n { -1.0 } else { 1.0 })
            .collect();
        let signs = g.constant(Tensor::column(signs));
        let signed = g.mul(logits, signs)?;
        let sp = g.softplus(signed)?;
        let l = g.mean(sp, 0)?;
        let weighted = g.scale(l, config.lambda)?;
        total = g.add(tc, weighted)?;
        ts = Some(l);
    }
    Ok(KgLossVars { total, tc, ts })
}

fn modulus_cubed_sum(g: &mut Graph, v: Var) -> Result<Var> {
    let w = g.value(v).cols();
    let d = w / 2;
    let re = g.slice_cols(v, 0, d)?;
    let im = g.slice_cols(v, d, w)?;
    let re2 = g.mul(re, re)?;
    let im2 = g.mul(im, im)?;
    let sq = g.add(re2, im2)?;
    let eps = g.add_scalar(sq, 1e-12)?;
    let cube = g.powf(eps, 1.5)?;
    Ok(g.sum_all(cube)?)
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct KgEpochLog {
    pub epoch: usize,
    pub total: f64,
    pub tc: f64,
    pub ts: f64,
}

/// Samples `count` ordered pairs of distinct timestamps.
pub fn sample_pairs<R: Rng + ?Sized>(timestamps: usize, count: usize, rng: &mut R) -> Vec<(usize, usize)> {
    if timestamps < 2 {
        return Vec::new();
    }
    (0..count)
        .map(|_| {
            let m = rng.random_range(0..timestamps);
            let mut n = rng.random_range(0..timestamps - 1);
            if n >= m {
                n += 1;
            }
            (m, n)
        })
        .collect()
}

/// Trains the tables on every expanded edge of `store` (forward and inverse).
pub fn train_kg(store: &KgStore, config: &KgTrainConfig) -> Result<(KgEmbeddings, Vec<KgEpochLog>)> {
    config.validate()?;
    if store.edges().is_empty() {
        return Err(Error::EmptyStore);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut emb = KgEmbeddings::random(
        store.num_entities(),
        store.num_relations(),
        store.num_timestamps(),
        config.dim,
        config.init_std,
        &mut rng,
    )?;
    let mut adam = Adam::new(AdamConfig {
        lr: config.lr,
        ..AdamConfig::default()
    });
    let mut order: Vec<usize> = (0..store.edges().len()).collect();
    let mut logs = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut log = KgEpochLog {
            epoch,
            ..Default::default()
        };
        let mut batches = 0usize;
        for chunk in order.chunks(config.batch_size) {
            let quads: Vec<_> = chunk
                .iter()
                .map(|&i| {
                    let e = store.edges()[i];
                    (e.src, e.rel, e.dst, e.time)
                })
                .collect();
            let negatives = match config.loss {
                TcLoss::CrossEntropy => Vec::new(),
                TcLoss::MarginRanking { .. } => quads
                    .iter()
                    .map(|_| rng.random_range(0..store.num_entities()))
                    .collect(),
            };
            let pairs = if config.lambda > 0.0 {
                sample_pairs(store.num_timestamps(), config.order_pairs, &mut rng)
            } else {
                Vec::new()
            };
            let batch = KgBatch {
                quads,
                negatives,
                pairs,
            };
            let mut g = Graph::new();
            let loss = kg_loss(&mut g, &emb, &batch, config)?;
            let total = g.scalar(loss.total)?;
            if !total.is_finite() {
                return Err(Error::NonFinite(format!("KG epoch {epoch}, batch {batches}")));
            }
            log.total += total;
            log.tc += g.scalar(loss.tc)?;
            if let Some(ts) = loss.ts {
                log.ts += g.scalar(ts)?;
            }
            let grads = g.backward(loss.total)?;
            adam.step(&mut emb.params, &grads, |_| true);
            batches += 1;
        }
        let n = batches.max(1) as f64;
        log.total /= n;
        log.tc /= n;
        log.ts /= n;
        debug!(
            "kg epoch {epoch}: total {:.4} tc {:.4} ts {:.4}",
            log.total, log.tc, log.ts
        );
        logs.push(log);
    }
    if let Some(last) = logs.last() {
        info!("kg training done: final loss {:.4}", last.total);
    }
    Ok((emb, logs))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ones_score_counts_dimensions() {
        let row = [1.0, 1.0, 0.0, 0.0];
        assert_eq!(complex_score(&row, &row, &row, &row).unwrap(), 2.0);
    }

    #[test]
    fn zero_relation_annihilates() {
        let a = [0.3, -1.0, 2.0, 0.5];
        assert_eq!(complex_score(&a, &[0.0; 4], &a, &a).unwrap(), 0.0);
    }

    #[test]
    fn width_mismatch_is_rejected() {
        assert!(complex_score(&[1.0; 4], &[1.0; 2], &[1.0; 4], &[1.0; 4]).is_err());
        assert!(complex_score(&[1.0; 3], &[1.0; 3], &[1.0; 3], &[1.0; 3]).is_err());
    }

    #[test]
    fn position_encoding_at_zero_alternates() {
        assert_eq!(position_encoding(0, 6).unwrap(), vec![0.0, 1.0, 0.0, 1.0, 0.0, 1.0]);
        assert!(position_encoding(1, 5).is_err());
    }

    #[test]
    fn equal_timestamps_are_unordered() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let emb = KgEmbeddings::random(2, 2, 4, 3, 0.5, &mut rng).unwrap();
        assert_eq!(emb.time_order_prob(2, 2).unwrap(), 0.5);
    }

    #[test]
    fn out_of_range_lookup_is_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let emb = KgEmbeddings::random(2, 2, 4, 3, 0.5, &mut rng).unwrap();
        assert!(matches!(
            emb.entity_row(2),
            Err(Error::UnknownId { kind: "entity", .. })
        ));
    }
}
