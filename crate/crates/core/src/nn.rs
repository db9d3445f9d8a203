//! Layer building blocks on top of [`Graph`](crate::numerics::Graph).
//!
//! Layers only hold [`ParamId`]s; the values live in a [`ParamStore`] so a
//! single store can be checkpointed, cloned for fine-tuning, or shared
//! read-only across worker threads.

use crate::error::{Error, Result};
use crate::numerics::{Graph, ParamId, ParamStore, Rng, Tensor, Var};

const LN_EPS: f64 = 1e-5;
const MASKED: f64 = -1e30;

#[derive(Clone, Debug)]
pub struct Linear {
    w: ParamId,
    b: ParamId,
}

impl Linear {
    pub fn new(store: &mut ParamStore, rng: &mut Rng, name: &str, input: usize, output: usize) -> Self {
        Self::with_std(store, rng, name, input, output, (1.0 / input as f64).sqrt())
    }

    pub fn with_std(
        store: &mut ParamStore,
        rng: &mut Rng,
        name: &str,
        input: usize,
        output: usize,
        std: f64,
    ) -> Self {
        let w = store.normal(rng, &format!("{name}.w"), &[input, output], std);
        let b = store.constant(&format!("{name}.b"), &[output], 0.0);
        Linear { w, b }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let w = g.param(store, self.w);
        let b = g.param(store, self.b);
        let y = g.matmul(x, w)?;
        g.add_row(y, b)
    }

    pub fn bias(&self) -> ParamId {
        self.b
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    gamma: ParamId,
    beta: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        LayerNorm {
            gamma: store.constant(&format!("{name}.gamma"), &[dim], 1.0),
            beta: store.constant(&format!("{name}.beta"), &[dim], 0.0),
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let gamma = g.param(store, self.gamma);
        let beta = g.param(store, self.beta);
        g.layer_norm(x, gamma, beta, LN_EPS)
    }
}

#[derive(Clone, Debug)]
pub struct Conv1d {
    w: ParamId,
    b: ParamId,
    stride: usize,
    padding: usize,
    groups: usize,
}

impl Conv1d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        rng: &mut Rng,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        groups: usize,
    ) -> Self {
        let fan_in = (cin / groups) * kernel;
        let w = store.normal(rng, &format!("{name}.w"), &[cout, cin / groups, kernel], (1.0 / fan_in as f64).sqrt());
        let b = store.constant(&format!("{name}.b"), &[cout], 0.0);
        Conv1d { w, b, stride, padding, groups }
    }

    /// Length-preserving convolution for odd kernels.
    pub fn same(store: &mut ParamStore, rng: &mut Rng, name: &str, cin: usize, cout: usize, kernel: usize) -> Self {
        Self::new(store, rng, name, cin, cout, kernel, 1, kernel / 2, 1)
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let w = g.param(store, self.w);
        let b = g.param(store, self.b);
        g.conv1d(x, w, Some(b), self.stride, self.padding, self.groups)
    }
}

#[derive(Clone, Debug)]
pub struct ConvTranspose1d {
    w: ParamId,
    b: ParamId,
    stride: usize,
}

impl ConvTranspose1d {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut Rng,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
    ) -> Self {
        let std = (stride as f64 / (cin * kernel) as f64).sqrt();
        let w = store.normal(rng, &format!("{name}.w"), &[cin, cout, kernel], std);
        let b = store.constant(&format!("{name}.b"), &[cout], 0.0);
        ConvTranspose1d { w, b, stride }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let w = g.param(store, self.w);
        let b = g.param(store, self.b);
        g.conv_transpose1d(x, w, Some(b), self.stride)
    }
}

#[derive(Clone, Debug)]
pub struct Embedding {
    table: ParamId,
}

impl Embedding {
    pub fn new(store: &mut ParamStore, rng: &mut Rng, name: &str, vocab: usize, dim: usize) -> Self {
        Embedding { table: store.normal(rng, &format!("{name}.table"), &[vocab, dim], 1.0) }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, ids: &[usize]) -> Result<Var> {
        let t = g.param(store, self.table);
        g.embedding(t, ids)
    }

    pub fn table(&self) -> ParamId {
        self.table
    }
}

/// Scaled dot-product attention with separate query and key/value inputs.
#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
    heads: usize,
    dim: usize,
}

impl MultiHeadAttention {
    pub fn new(store: &mut ParamStore, rng: &mut Rng, name: &str, dim: usize, heads: usize) -> Self {
        assert!(heads > 0 && dim % heads == 0, "attention dim {dim} not divisible by {heads} heads");
        MultiHeadAttention {
            q: Linear::new(store, rng, &format!("{name}.q"), dim, dim),
            k: Linear::new(store, rng, &format!("{name}.k"), dim, dim),
            v: Linear::new(store, rng, &format!("{name}.v"), dim, dim),
            o: Linear::new(store, rng, &format!("{name}.o"), dim, dim),
            heads,
            dim,
        }
    }

    /// Returns the projected output and one `[queries, keys]` probability
    /// map per head. `key_valid[j] == false` excludes key `j` entirely.
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        query: Var,
        memory: Var,
        key_valid: Option<&[bool]>,
    ) -> Result<(Var, Vec<Var>)> {
        let q = self.q.forward(g, store, query)?;
        let k = self.k.forward(g, store, memory)?;
        let v = self.v.forward(g, store, memory)?;
        let tq = g.value(q).rows();
        let tk = g.value(k).rows();
        let mask = match key_valid {
            Some(valid) if valid.len() != tk => {
                return Err(Error::shape("attention", format!("{} key flags for {tk} keys", valid.len())))
            }
            Some(valid) if valid.iter().any(|&ok| !ok) => {
                let row: Vec<f64> = valid.iter().map(|&ok| if ok { 0.0 } else { MASKED }).collect();
                Some(Tensor::new(vec![tq, tk], row.repeat(tq))?)
            }
            _ => None,
        };
        let dh = self.dim / self.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut outs = Vec::with_capacity(self.heads);
        let mut probs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let qh = g.slice_cols(q, h * dh, dh)?;
            let kh = g.slice_cols(k, h * dh, dh)?;
            let vh = g.slice_cols(v, h * dh, dh)?;
            let s = g.matmul_nt(qh, kh)?;
            let mut s = g.scale(s, scale);
            if let Some(m) = &mask {
                s = g.add_const(s, m)?;
            }
            let p = g.softmax(s)?;
            outs.push(g.matmul(p, vh)?);
            probs.push(p);
        }
        let cat = if outs.len() == 1 { outs[0] } else { g.concat_cols(&outs)? };
        Ok((self.o.forward(g, store, cat)?, probs))
    }
}

#[derive(Clone, Debug)]
pub struct FeedForward {
    up: Linear,
    down: Linear,
}

impl FeedForward {
    pub fn new(store: &mut ParamStore, rng: &mut Rng, name: &str, dim: usize, hidden: usize) -> Self {
        FeedForward {
            up: Linear::new(store, rng, &format!("{name}.up"), dim, hidden),
            down: Linear::new(store, rng, &format!("{name}.down"), hidden, dim),
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let h = self.up.forward(g, store, x)?;
        let h = g.gelu(h);
        self.down.forward(g, store, h)
    }
}

/// Pre-norm transformer encoder layer.
#[derive(Clone, Debug)]
pub struct EncoderLayer {
    ln_attn: LayerNorm,
    attn: MultiHeadAttention,
    ln_ff: LayerNorm,
    ff: FeedForward,
}

impl EncoderLayer {
    pub fn new(store: &mut ParamStore, rng: &mut Rng, name: &str, dim: usize, ff: usize, heads: usize) -> Self {
        EncoderLayer {
            ln_attn: LayerNorm::new(store, &format!("{name}.ln_attn"), dim),
            attn: MultiHeadAttention::new(store, rng, &format!("{name}.attn"), dim, heads),
            ln_ff: LayerNorm::new(store, &format!("{name}.ln_ff"), dim),
            ff: FeedForward::new(store, rng, &format!("{name}.ff"), dim, ff),
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var, valid: Option<&[bool]>) -> Result<Var> {
        let h = self.ln_attn.forward(g, store, x)?;
        let (a, _) = self.attn.forward(g, store, h, h, valid)?;
        let a = g.dropout(a)?;
        let x = g.add(x, a)?;
        let h = self.ln_ff.forward(g, store, x)?;
        let f = self.ff.forward(g, store, h)?;
        let f = g.dropout(f)?;
        g.add(x, f)
    }
}

/// Pre-norm decoder layer with full (non-causal) self-attention.
#[derive(Clone, Debug)]
pub struct DecoderLayer {
    ln_self: LayerNorm,
    self_attn: MultiHeadAttention,
    ln_cross: LayerNorm,
    cross_attn: MultiHeadAttention,
    ln_ff: LayerNorm,
    ff: FeedForward,
}

impl DecoderLayer {
    pub fn new(store: &mut ParamStore, rng: &mut Rng, name: &str, dim: usize, ff: usize, heads: usize) -> Self {
        DecoderLayer {
            ln_self: LayerNorm::new(store, &format!("{name}.ln_self"), dim),
            self_attn: MultiHeadAttention::new(store, rng, &format!("{name}.self_attn"), dim, heads),
            ln_cross: LayerNorm::new(store, &format!("{name}.ln_cross"), dim),
            cross_attn: MultiHeadAttention::new(store, rng, &format!("{name}.cross_attn"), dim, heads),
            ln_ff: LayerNorm::new(store, &format!("{name}.ln_ff"), dim),
            ff: FeedForward::new(store, rng, &format!("{name}.ff"), dim, ff),
        }
    }

    /// Returns the layer output and the per-head cross-attention maps.
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        x: Var,
        memory: Var,
        memory_valid: Option<&[bool]>,
    ) -> Result<(Var, Vec<Var>)> {
        let h = self.ln_self.forward(g, store, x)?;
        let (a, _) = self.self_attn.forward(g, store, h, h, None)?;
        let a = g.dropout(a)?;
        let x = g.add(x, a)?;
        let h = self.ln_cross.forward(g, store, x)?;
        let (c, probs) = self.cross_attn.forward(g, store, h, memory, memory_valid)?;
        let c = g.dropout(c)?;
        let x = g.add(x, c)?;
        let h = self.ln_ff.forward(g, store, x)?;
        let f = self.ff.forward(g, store, h)?;
        let f = g.dropout(f)?;
        Ok((g.add(x, f)?, probs))
    }
}

/// Sinusoidal position table `[len, dim]`.
pub fn sinusoidal_positions(len: usize, dim: usize) -> Tensor {
    let mut data = Vec::with_capacity(len * dim);
    for pos in 0..len {
        for i in 0..dim {
            let rate = 10000f64.powf(-((i / 2 * 2) as f64) / dim as f64);
            let angle = pos as f64 * rate;
            data.push(if i % 2 == 0 { angle.sin() } else { angle.cos() });
        }
    }
    Tensor::new(vec![len, dim], data).expect("len·dim values")
}
