//! Shared layers: parameter context, affine maps, MLPs and a pre-norm
//! transformer encoder layer.

use std::collections::BTreeMap;

use qcmhm_tensor::{Graph, ParamId, ParamStore, Tensor, Var};
use rand::Rng;

use crate::error::Result;

/// Graph plus parameter access. Each parameter becomes at most one leaf per
/// graph; parameters marked frozen enter as constants.
pub struct Ctx<'a> {
    pub g: &'a mut Graph,
    params: &'a ParamStore,
    trainable: Vec<bool>,
    leaves: BTreeMap<ParamId, Var>,
}

impl<'a> Ctx<'a> {
    /// Every parameter tracked.
    pub fn new(g: &'a mut Graph, params: &'a ParamStore) -> Self {
        let trainable = vec![true; params.len()];
        Self {
            g,
            params,
            trainable,
            leaves: BTreeMap::new(),
        }
    }

    pub fn with_trainable(
        g: &'a mut Graph,
        params: &'a ParamStore,
        trainable: impl Fn(ParamId) -> bool,
    ) -> Self {
        let trainable = params.ids().map(trainable).collect();
        Self {
            g,
            params,
            trainable,
            leaves: BTreeMap::new(),
        }
    }

    /// No parameter tracked; for inference.
    pub fn frozen(g: &'a mut Graph, params: &'a ParamStore) -> Self {
        Self::with_trainable(g, params, |_| false)
    }

    pub fn params(&self) -> &ParamStore {
        self.params
    }

    pub fn p(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.leaves.get(&id) {
            return v;
        }
        let v = if self.trainable[id.0] {
            self.g.param(self.params, id)
        } else {
            self.g.frozen_param(self.params, id)
        };
        self.leaves.insert(id, v);
        v
    }

    pub fn value(&self, v: Var) -> &Tensor {
        self.g.value(v)
    }
}

fn init_uniform<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Tensor {
    Tensor::uniform(rows, cols, 1.0 / (rows as f64).sqrt(), rng)
}

/// `x W + b` on row vectors.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(
        params: &mut ParamStore,
        rng: &mut R,
        name: &str,
        input: usize,
        output: usize,
        bias: bool,
    ) -> Self {
        let w = params.add(format!("{name}.w"), init_uniform(input, output, rng));
        let b = bias.then(|| params.add(format!("{name}.b"), Tensor::zeros(1, output)));
        Self { w, b }
    }

    pub fn forward(&self, cx: &mut Ctx, x: Var) -> Result<Var> {
        let w = cx.p(self.w);
        let y = cx.g.matmul(x, w)?;
        match self.b {
            Some(b) => {
                let b = cx.p(b);
                Ok(cx.g.add_row(y, b)?)
            }
            None => Ok(y),
        }
    }

    pub fn ids(&self) -> Vec<ParamId> {
        self.w_and_b().collect()
    }

    fn w_and_b(&self) -> impl Iterator<Item = ParamId> {
        std::iter::once(self.w).chain(self.b)
    }
}

/// Two affine maps with a relu between them.
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    pub hidden: Linear,
    pub out: Linear,
}

impl Mlp {
    pub fn new<R: Rng + ?Sized>(
        params: &mut ParamStore,
        rng: &mut R,
        name: &str,
        input: usize,
        hidden: usize,
        output: usize,
    ) -> Self {
        Self {
            hidden: Linear::new(params, rng, &format!("{name}.hidden"), input, hidden, true),
            out: Linear::new(params, rng, &format!("{name}.out"), hidden, output, true),
        }
    }

    pub fn forward(&self, cx: &mut Ctx, x: Var) -> Result<Var> {
        let h = self.hidden.forward(cx, x)?;
        let h = cx.g.relu(h)?;
        self.out.forward(cx, h)
    }
}

/// Single-head pre-norm self-attention block followed by a feed-forward block,
/// both residual. Zero output projections make the layer the identity.
#[derive(Clone, Debug, PartialEq)]
pub struct TransformerLayer {
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub wo: Linear,
    pub ff: Mlp,
    width: usize,
}

const LN_EPS: f64 = 1e-5;

impl TransformerLayer {
    pub fn new<R: Rng + ?Sized>(params: &mut ParamStore, rng: &mut R, name: &str, width: usize) -> Self {
        Self {
            wq: Linear::new(params, rng, &format!("{name}.q"), width, width, false),
            wk: Linear::new(params, rng, &format!("{name}.k"), width, width, false),
            wv: Linear::new(params, rng, &format!("{name}.v"), width, width, false),
            wo: Linear::new(params, rng, &format!("{name}.o"), width, width, true),
            ff: Mlp::new(params, rng, &format!("{name}.ff"), width, 2 * width, width),
            width,
        }
    }

    /// `block_mask[i * n + j]` true hides token `j` from token `i`.
    pub fn forward(&self, cx: &mut Ctx, x: Var, block_mask: Option<&[bool]>) -> Result<Var> {
        let n = cx.value(x).rows();
        let normed = cx.g.layer_norm(x, LN_EPS)?;
        let q = self.wq.forward(cx, normed)?;
        let k = self.wk.forward(cx, normed)?;
        let v = self.wv.forward(cx, normed)?;
        let kt = cx.g.transpose(k)?;
        let logits = cx.g.matmul(q, kt)?;
        let logits = cx.g.scale(logits, 1.0 / (self.width as f64).sqrt())?;
        let logits = match block_mask {
            Some(mask) => {
                debug_assert_eq!(mask.len(), n * n);
                cx.g.masked_fill(logits, mask, f64::NEG_INFINITY)?
            }
            None => logits,
        };
        let attn = cx.g.softmax_rows(logits)?;
        let mixed = cx.g.matmul(attn, v)?;
        let projected = self.wo.forward(cx, mixed)?;
        let h = cx.g.add(x, projected)?;
        let normed = cx.g.layer_norm(h, LN_EPS)?;
        let ff = self.ff.forward(cx, normed)?;
        Ok(cx.g.add(h, ff)?)
    }

    /// Zeroes the residual branches so the layer passes its input through.
    pub fn make_identity(&self, params: &mut ParamStore) {
        for id in self.wo.ids().into_iter().chain(self.ff.out.ids()) {
            let (r, c) = (params.get(id).rows(), params.get(id).cols());
            params.set(id, Tensor::zeros(r, c));
        }
    }
}

/// Block-diagonal attention mask for sequences of the given lengths.
pub fn block_mask(lengths: &[usize]) -> Vec<bool> {
    let n: usize = lengths.iter().sum();
    let mut owner = Vec::with_capacity(n);
    for (i, &len) in lengths.iter().enumerate() {
        owner.extend(std::iter::repeat_n(i, len));
    }
    let mut mask = vec![true; n * n];
    for i in 0..n {
        for j in 0..n {
            if owner[i] == owner[j] {
                mask[i * n + j] = false;
            }
        }
    }
    mask
}

/// Row-averaging matrix: row `s` of the result is the mean of block `s`.
pub fn block_mean_matrix(lengths: &[usize]) -> Tensor {
    let n: usize = lengths.iter().sum();
    let mut m = Tensor::zeros(lengths.len(), n);
    let mut start = 0;
    for (s, &len) in lengths.iter().enumerate() {
        for j in start..start + len {
            m.set(s, j, 1.0 / len as f64);
        }
        start += len;
    }
    m
}

/// Repeats a `1 × c` row `n` times.
pub fn broadcast_row(g: &mut Graph, row: Var, n: usize) -> Result<Var> {
    Ok(g.gather_rows(row, &vec![0; n])?)
}
