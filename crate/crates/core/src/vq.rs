//! Acoustic-unit discovery with a Gumbel-Softmax vector-quantized autoencoder.
//!
//! frames → linear → conv blocks → strided conv → logits over V codes →
//! (Gumbel-Softmax, straight-through) → codebook → transposed conv →
//! conv blocks → linear → reconstructed frames.
//!
//! Training minimizes reconstruction MSE plus a weighted diversity penalty
//! on the batch-averaged code distribution. Inference uses the noiseless
//! argmax, so encoding is a pure function of parameters and frames.

use std::path::Path;

use rand::Rng as _;
use rand_distr::Gumbel;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Conv1d, ConvTranspose1d, FeedForward, LayerNorm, Linear, MultiHeadAttention};
use crate::numerics::kernels;
use crate::numerics::{
    adam_step, clip_global_norm, load_checkpoint, save_checkpoint, seeded, substream, AdamState, Graph,
    ParamId, ParamStore, Rng, Tensor, TrainConfig, Var,
};
use crate::parallel::par_map;

pub const CHECKPOINT_KIND: &str = "vq";

/// Exponential temperature decay, floored at `min`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TemperatureAnneal {
    pub decay: f64,
    pub min: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VqConfig {
    pub frame_dim: usize,
    pub codebook_size: usize,
    pub code_dim: usize,
    pub temperature: f64,
    pub anneal: Option<TemperatureAnneal>,
    pub downsample_stride: usize,
    pub downsample_kernel: usize,
    pub hidden_dim: usize,
    pub ff_dim: usize,
    pub heads: usize,
    pub encoder_blocks: usize,
    pub decoder_blocks: usize,
    pub encoder_conv_kernel: usize,
    pub decoder_conv_kernel: usize,
    pub diversity_weight: f64,
    /// Standard deviation of the code-logit projection, in units of `1/√hidden_dim`.
    pub logit_init_scale: f64,
}

impl VqConfig {
    pub fn desk() -> Self {
        VqConfig {
            frame_dim: 16,
            codebook_size: 64,
            code_dim: 16,
            temperature: 1.0,
            anneal: None,
            downsample_stride: 2,
            downsample_kernel: 3,
            hidden_dim: 32,
            ff_dim: 64,
            heads: 2,
            encoder_blocks: 1,
            decoder_blocks: 1,
            encoder_conv_kernel: 7,
            decoder_conv_kernel: 7,
            diversity_weight: 0.1,
            logit_init_scale: 4.0,
        }
    }

    /// Published model dimensions; constructible, far too slow for CPU training.
    pub fn paper() -> Self {
        VqConfig {
            frame_dim: 80,
            codebook_size: 512,
            code_dim: 64,
            temperature: 1.0,
            anneal: None,
            downsample_stride: 2,
            downsample_kernel: 3,
            hidden_dim: 384,
            ff_dim: 1536,
            heads: 2,
            encoder_blocks: 3,
            decoder_blocks: 3,
            encoder_conv_kernel: 7,
            decoder_conv_kernel: 31,
            diversity_weight: 0.1,
            logit_init_scale: 4.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.codebook_size < 2 {
            return bad(format!("codebook size {} must be ≥ 2", self.codebook_size));
        }
        if !(self.temperature > 0.0) {
            return bad("temperature must be positive".into());
        }
        if let Some(a) = &self.anneal {
            if !(a.decay > 0.0 && a.decay <= 1.0 && a.min > 0.0) {
                return bad("anneal needs decay in (0, 1] and a positive floor".into());
            }
        }
        if self.downsample_stride == 0 || self.downsample_kernel % 2 == 0 {
            return bad("downsampling needs a positive stride and an odd kernel".into());
        }
        if self.downsample_kernel + 1 < 2 * self.downsample_stride {
            return bad("downsample kernel must be ≥ 2·stride − 1 so the decoder covers every frame".into());
        }
        if self.heads == 0 || self.hidden_dim % self.heads != 0 {
            return bad(format!("hidden_dim {} not divisible by {} heads", self.hidden_dim, self.heads));
        }
        if self.encoder_conv_kernel % 2 == 0 || self.decoder_conv_kernel % 2 == 0 {
            return bad("block conv kernels must be odd".into());
        }
        if self.frame_dim == 0 || self.code_dim == 0 || self.diversity_weight < 0.0 {
            return bad("frame_dim and code_dim must be ≥ 1; diversity_weight ≥ 0".into());
        }
        Ok(())
    }

    /// Number of acoustic units for `frames` input frames.
    pub fn units_for(&self, frames: usize) -> usize {
        frames.div_ceil(self.downsample_stride)
    }

    pub fn mask_token(&self) -> u32 {
        self.codebook_size as u32
    }

    pub fn temperature_at(&self, step: usize) -> f64 {
        match &self.anneal {
            Some(a) => (self.temperature * a.decay.powi(step as i32)).max(a.min),
            None => self.temperature,
        }
    }
}

/// Discrete unit sequence for one utterance. The value `V` is ⟨MASK⟩.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AuSequence {
    pub id: String,
    pub units: Vec<u32>,
}

/// Gumbel(0, 1) noise.
pub fn gumbel_noise(rng: &mut Rng, n: usize) -> Vec<f64> {
    let g = Gumbel::new(0.0, 1.0).expect("unit scale");
    (0..n).map(|_| rng.sample(g)).collect()
}

/// `softmax((logits + g)/τ)` and its argmax for one row.
pub fn sample_gumbel_softmax(logits: &[f64], tau: f64, rng: &mut Rng) -> (Vec<f64>, usize) {
    let noise = gumbel_noise(rng, logits.len());
    let z: Vec<f64> = logits.iter().zip(&noise).map(|(l, g)| (l + g) / tau).collect();
    let soft = kernels::softmax(&z);
    let idx = argmax(&soft);
    (soft, idx)
}

pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in xs.iter().enumerate() {
        if v > xs[best] {
            best = i;
        }
    }
    best
}

fn one_hot(indices: &[usize], width: usize) -> Tensor {
    let mut data = vec![0.0; indices.len() * width];
    for (r, &i) in indices.iter().enumerate() {
        data[r * width + i] = 1.0;
    }
    Tensor::new(vec![indices.len(), width], data).expect("rows·width")
}

pub struct GumbelSample {
    pub soft: Var,
    /// One-hot when `hard`, otherwise `soft`.
    pub output: Var,
    pub indices: Vec<usize>,
}

/// Row-wise Gumbel-Softmax on the tape. With `hard`, the forward value is
/// the one-hot argmax and the gradient flows through the soft assignment.
pub fn gumbel_softmax(g: &mut Graph, logits: Var, tau: f64, rng: &mut Rng, hard: bool) -> Result<GumbelSample> {
    if !(tau > 0.0) {
        return Err(Error::Contract(format!("Gumbel-Softmax temperature {tau} must be positive")));
    }
    let shape = g.value(logits).shape().to_vec();
    let (rows, width) = (g.value(logits).rows(), g.value(logits).cols());
    let noise = Tensor::new(shape, gumbel_noise(rng, rows * width))?;
    let z = g.add_const(logits, &noise)?;
    let z = g.scale(z, 1.0 / tau);
    let soft = g.softmax(z)?;
    let indices: Vec<usize> = (0..rows).map(|r| argmax(g.value(soft).row_slice(r))).collect();
    let output = if hard { g.straight_through(soft, one_hot(&indices, width))? } else { soft };
    Ok(GumbelSample { soft, output, indices })
}

/// Residual block: depth-wise conv, self-attention, feed-forward; each pre-normed.
#[derive(Clone, Debug)]
struct ConvBlock {
    ln_conv: LayerNorm,
    conv: Conv1d,
    ln_attn: LayerNorm,
    attn: MultiHeadAttention,
    ln_ff: LayerNorm,
    ff: FeedForward,
}

impl ConvBlock {
    fn new(store: &mut ParamStore, rng: &mut Rng, name: &str, cfg: &VqConfig, kernel: usize) -> Self {
        let d = cfg.hidden_dim;
        ConvBlock {
            ln_conv: LayerNorm::new(store, &format!("{name}.ln_conv"), d),
            conv: Conv1d::new(store, rng, &format!("{name}.dwconv"), d, d, kernel, 1, kernel / 2, d),
            ln_attn: LayerNorm::new(store, &format!("{name}.ln_attn"), d),
            attn: MultiHeadAttention::new(store, rng, &format!("{name}.attn"), d, cfg.heads),
            ln_ff: LayerNorm::new(store, &format!("{name}.ln_ff"), d),
            ff: FeedForward::new(store, rng, &format!("{name}.ff"), d, cfg.ff_dim),
        }
    }

    fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let h = self.ln_conv.forward(g, store, x)?;
        let h = self.conv.forward(g, store, h)?;
        let h = g.gelu(h);
        let x = g.add(x, h)?;
        let h = self.ln_attn.forward(g, store, x)?;
        let (a, _) = self.attn.forward(g, store, h, h, None)?;
        let x = g.add(x, a)?;
        let h = self.ln_ff.forward(g, store, x)?;
        let f = self.ff.forward(g, store, h)?;
        g.add(x, f)
    }
}

/// Parameter layout of the autoencoder; values live in a [`ParamStore`].
#[derive(Clone, Debug)]
pub struct VqModel {
    pub cfg: VqConfig,
    input: Linear,
    encoder: Vec<ConvBlock>,
    enc_norm: LayerNorm,
    down: Conv1d,
    down_norm: LayerNorm,
    to_logits: Linear,
    codebook: ParamId,
    up: ConvTranspose1d,
    decoder: Vec<ConvBlock>,
    dec_norm: LayerNorm,
    output: Linear,
}

/// Quantizer behavior for one forward pass.
pub enum Quantize<'a> {
    /// Straight-through Gumbel-Softmax at temperature `tau`.
    Gumbel { rng: &'a mut Rng, tau: f64 },
    /// Noiseless argmax.
    Argmax,
}

pub struct VqForward {
    pub reconstruction: Var,
    pub logits: Var,
    /// Noiseless `softmax(logits)`, used for the diversity penalty.
    pub probs: Var,
    pub units: Vec<usize>,
}

impl VqModel {
    pub fn new(cfg: &VqConfig, seed: u64) -> Result<(Self, ParamStore)> {
        cfg.validate()?;
        let mut store = ParamStore::new();
        let mut rng = seeded(seed);
        let rng = &mut rng;
        let d = cfg.hidden_dim;
        let input = Linear::new(&mut store, rng, "vq.enc.input", cfg.frame_dim, d);
        let encoder = (0..cfg.encoder_blocks)
            .map(|i| ConvBlock::new(&mut store, rng, &format!("vq.enc.block{i}"), cfg, cfg.encoder_conv_kernel))
            .collect();
        let enc_norm = LayerNorm::new(&mut store, "vq.enc.norm", d);
        let k = cfg.downsample_kernel;
        let down = Conv1d::new(&mut store, rng, "vq.down", d, d, k, cfg.downsample_stride, k / 2, 1);
        let down_norm = LayerNorm::new(&mut store, "vq.down.norm", d);
        let std = cfg.logit_init_scale / (d as f64).sqrt();
        let to_logits = Linear::with_std(&mut store, rng, "vq.logits", d, cfg.codebook_size, std);
        let codebook = store.normal(rng, "vq.codebook", &[cfg.codebook_size, cfg.code_dim], 1.0);
        let up = ConvTranspose1d::new(&mut store, rng, "vq.up", cfg.code_dim, d, k, cfg.downsample_stride);
        let decoder = (0..cfg.decoder_blocks)
            .map(|i| ConvBlock::new(&mut store, rng, &format!("vq.dec.block{i}"), cfg, cfg.decoder_conv_kernel))
            .collect();
        let dec_norm = LayerNorm::new(&mut store, "vq.dec.norm", d);
        let output = Linear::new(&mut store, rng, "vq.dec.output", d, cfg.frame_dim);
        let model = VqModel {
            cfg: cfg.clone(),
            input,
            encoder,
            enc_norm,
            down,
            down_norm,
            to_logits,
            codebook,
            up,
            decoder,
            dec_norm,
            output,
        };
        Ok((model, store))
    }

    /// Rebuilds the layout for `cfg` and checks `store` matches it.
    pub fn with_store(cfg: &VqConfig, store: &ParamStore) -> Result<Self> {
        let (model, fresh) = VqModel::new(cfg, 0)?;
        check_layout(&fresh, store)?;
        Ok(model)
    }

    fn encode_logits(&self, g: &mut Graph, store: &ParamStore, frames: Var) -> Result<Var> {
        let mut h = self.input.forward(g, store, frames)?;
        for b in &self.encoder {
            h = b.forward(g, store, h)?;
        }
        let h = self.enc_norm.forward(g, store, h)?;
        let h = self.down.forward(g, store, h)?;
        let h = self.down_norm.forward(g, store, h)?;
        self.to_logits.forward(g, store, h)
    }

    fn decode_codes(&self, g: &mut Graph, store: &ParamStore, codes: Var, frames: usize) -> Result<Var> {
        let cb = g.param(store, self.codebook);
        let q = g.matmul(codes, cb)?;
        let h = self.up.forward(g, store, q)?;
        let h = g.slice_rows(h, self.cfg.downsample_kernel / 2, frames)?;
        let mut h = h;
        for b in &self.decoder {
            h = b.forward(g, store, h)?;
        }
        let h = self.dec_norm.forward(g, store, h)?;
        self.output.forward(g, store, h)
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, frames: &Tensor, quantize: Quantize) -> Result<VqForward> {
        if frames.shape().len() != 2 || frames.cols() != self.cfg.frame_dim {
            return Err(Error::shape(
                "vq_forward",
                format!("frames {:?} but the model expects width {}", frames.shape(), self.cfg.frame_dim),
            ));
        }
        if frames.rows() == 0 {
            return Err(Error::Contract("vq_forward needs at least one frame".into()));
        }
        let x = g.constant(frames.clone());
        let logits = self.encode_logits(g, store, x)?;
        let probs = g.softmax(logits)?;
        let (codes, units) = match quantize {
            Quantize::Gumbel { rng, tau } => {
                let s = gumbel_softmax(g, logits, tau, rng, true)?;
                (s.output, s.indices)
            }
            Quantize::Argmax => {
                let v = g.value(logits);
                let units: Vec<usize> = (0..v.rows()).map(|r| argmax(v.row_slice(r))).collect();
                (g.constant(one_hot(&units, self.cfg.codebook_size)), units)
            }
        };
        let reconstruction = self.decode_codes(g, store, codes, frames.rows())?;
        Ok(VqForward { reconstruction, logits, probs, units })
    }

    /// Deterministic unit sequence for one utterance.
    pub fn encode(&self, store: &ParamStore, frames: &Tensor) -> Result<Vec<u32>> {
        let mut g = Graph::new();
        let f = self.forward(&mut g, store, frames, Quantize::Argmax)?;
        Ok(f.units.into_iter().map(|u| u as u32).collect())
    }

    /// Frames for a unit sequence; `frames` defaults to `units · stride`.
    pub fn decode(&self, store: &ParamStore, units: &[u32], frames: Option<usize>) -> Result<Tensor> {
        let mask = self.cfg.mask_token();
        if units.contains(&mask) {
            return Err(Error::Contract("decode input contains ⟨MASK⟩; fill masked units first".into()));
        }
        if let Some(&bad) = units.iter().find(|&&u| u > mask) {
            return Err(Error::Contract(format!("unit {bad} outside codebook of {}", self.cfg.codebook_size)));
        }
        if units.is_empty() {
            return Err(Error::Contract("decode needs at least one unit".into()));
        }
        let s = self.cfg.downsample_stride;
        let n = frames.unwrap_or(units.len() * s);
        if self.cfg.units_for(n) != units.len() {
            return Err(Error::Contract(format!("{} units cannot cover {n} frames", units.len())));
        }
        let idx: Vec<usize> = units.iter().map(|&u| u as usize).collect();
        let mut g = Graph::new();
        let codes = g.constant(one_hot(&idx, self.cfg.codebook_size));
        let out = self.decode_codes(&mut g, store, codes, n)?;
        Ok(g.value(out).clone())
    }

    /// Argmax-path reconstruction MSE averaged over utterances.
    pub fn reconstruction_mse(&self, store: &ParamStore, frames: &[Tensor]) -> Result<f64> {
        let per: Vec<Result<f64>> = par_map(frames, |f| {
            let mut g = Graph::new();
            let out = self.forward(&mut g, store, f, Quantize::Argmax)?;
            let target = g.constant(f.clone());
            let mse = g.mse(out.reconstruction, target)?;
            Ok(g.value(mse).item())
        });
        let per = per.into_iter().collect::<Result<Vec<_>>>()?;
        Ok(per.iter().sum::<f64>() / per.len().max(1) as f64)
    }

    pub fn encode_all(&self, store: &ParamStore, items: &[(String, Tensor)]) -> Result<Vec<AuSequence>> {
        par_map(items, |(id, f)| Ok(AuSequence { id: id.clone(), units: self.encode(store, f)? }))
            .into_iter()
            .collect()
    }
}

pub(crate) fn check_layout(expected: &ParamStore, got: &ParamStore) -> Result<()> {
    if expected.names() != got.names() {
        return Err(Error::Checkpoint("parameter names do not match the configured architecture".into()));
    }
    for (a, b) in expected.tensors().iter().zip(got.tensors()) {
        if a.shape() != b.shape() {
            return Err(Error::Checkpoint(format!("shape {:?} where {:?} expected", b.shape(), a.shape())));
        }
    }
    Ok(())
}

/// Batch-mean noiseless code distribution → `(V − perplexity)/V`.
pub fn diversity_loss(assignments: &[Vec<f64>]) -> Result<f64> {
    let first = assignments.first().ok_or_else(|| Error::Contract("diversity_loss needs an assignment".into()))?;
    let mut mean = vec![0.0; first.len()];
    for a in assignments {
        kernels::add_into(&mut mean, a);
    }
    for m in &mut mean {
        *m /= assignments.len() as f64;
    }
    Ok(kernels::diversity(&mean))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VqLogRow {
    pub step: usize,
    pub lr: f64,
    pub temperature: f64,
    pub loss: f64,
    pub mse: f64,
    pub diversity: f64,
    pub perplexity: f64,
}

pub struct VqTrained {
    pub store: ParamStore,
    pub log: Vec<VqLogRow>,
    pub initial_mse: f64,
    pub final_mse: f64,
}

/// Checkpoint target for training runs.
pub struct CheckpointSink<'a> {
    pub path: &'a Path,
    pub config_digest: &'a str,
}

/// Loss for one batch on a single tape: mean per-utterance MSE plus the
/// weighted diversity penalty of all positions' mean code distribution.
fn batch_loss(
    model: &VqModel,
    g: &mut Graph,
    store: &ParamStore,
    batch: &[&Tensor],
    rngs: &mut [Rng],
    tau: f64,
) -> Result<(Var, f64, f64, f64)> {
    let mut mses = Vec::with_capacity(batch.len());
    let mut probs = Vec::with_capacity(batch.len());
    for (f, rng) in batch.iter().zip(rngs.iter_mut()) {
        let out = model.forward(g, store, f, Quantize::Gumbel { rng, tau })?;
        let target = g.constant((*f).clone());
        mses.push(g.mse(out.reconstruction, target)?);
        probs.push(out.probs);
    }
    let mut total = mses[0];
    for &m in &mses[1..] {
        total = g.add(total, m)?;
    }
    let mse = g.scale(total, 1.0 / mses.len() as f64);
    let cat = g.concat_rows(&probs)?;
    let pbar = g.mean_rows(cat)?;
    let div = g.diversity(pbar);
    let perplexity = kernels::perplexity(g.value(pbar).data());
    let weighted = g.scale(div, model.cfg.diversity_weight);
    let loss = g.add(mse, weighted)?;
    let (m, d) = (g.value(mse).item(), g.value(div).item());
    Ok((loss, m, d, perplexity))
}

pub fn train_vq(
    cfg: &VqConfig,
    train: &TrainConfig,
    frames: &[Tensor],
    sink: Option<CheckpointSink>,
) -> Result<VqTrained> {
    train.validate()?;
    if frames.is_empty() {
        return Err(Error::Contract("VQ training corpus is empty".into()));
    }
    let (model, mut store) = VqModel::new(cfg, train.seed)?;
    let initial_mse = model.reconstruction_mse(&store, frames)?;
    let mut adam = AdamState::new(&store);
    let mut rng = substream(train.seed, 1);
    let mut log = Vec::with_capacity(train.max_steps);
    for step in 1..=train.max_steps {
        let picks: Vec<usize> = (0..train.batch_size).map(|_| rng.random_range(0..frames.len())).collect();
        let batch: Vec<&Tensor> = picks.iter().map(|&i| &frames[i]).collect();
        let mut rngs: Vec<Rng> = (0..batch.len()).map(|_| seeded(rng.random())).collect();
        let tau = cfg.temperature_at(step - 1);
        let mut g = Graph::new();
        let (loss, mse, div, perplexity) = batch_loss(&model, &mut g, &store, &batch, &mut rngs, tau)?;
        let lv = g.value(loss).item();
        if !lv.is_finite() {
            return Err(diverged(&store, cfg, sink.as_ref(), "train-vq", step));
        }
        let mut grads = g.backward(loss)?.param_grads(&store);
        if let Some(c) = train.grad_clip {
            clip_global_norm(&mut grads, c);
        }
        if let Err(e) = adam_step(&mut store, &grads, step, train, &mut adam) {
            let _ = diverged(&store, cfg, sink.as_ref(), "train-vq", step);
            return Err(e);
        }
        log.push(VqLogRow { step, lr: train.lr_at(step), temperature: tau, loss: lv, mse, diversity: div, perplexity });
    }
    let final_mse = model.reconstruction_mse(&store, frames)?;
    if let Some(s) = &sink {
        save_checkpoint(s.path, CHECKPOINT_KIND, cfg, s.config_digest, &store)?;
    }
    Ok(VqTrained { store, log, initial_mse, final_mse })
}

fn diverged(store: &ParamStore, cfg: &VqConfig, sink: Option<&CheckpointSink>, stage: &'static str, step: usize) -> Error {
    if let Some(s) = sink {
        if let Err(e) = save_checkpoint(s.path, CHECKPOINT_KIND, cfg, s.config_digest, store) {
            return e;
        }
    }
    Error::Divergence { stage, step }
}

pub fn load_vq(path: &Path) -> Result<(VqModel, ParamStore, String)> {
    let (header, store) = load_checkpoint(path)?;
    if header.kind != CHECKPOINT_KIND {
        return Err(Error::Checkpoint(format!("{} holds a `{}` checkpoint, expected `vq`", path.display(), header.kind)));
    }
    let cfg: VqConfig = header.config_as()?;
    let model = VqModel::with_store(&cfg, &store)?;
    Ok((model, store, header.config_digest))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> VqConfig {
        VqConfig { frame_dim: 4, codebook_size: 8, code_dim: 3, hidden_dim: 8, ff_dim: 8, ..VqConfig::desk() }
    }

    fn frames(len: usize, dim: usize) -> Tensor {
        Tensor::new(vec![len, dim], (0..len * dim).map(|i| ((i * 7) as f64 * 0.13).sin()).collect()).unwrap()
    }

    #[test]
    fn unit_count_follows_stride() {
        let cfg = tiny();
        let (m, s) = VqModel::new(&cfg, 0).unwrap();
        for len in [1, 2, 9, 10, 11] {
            let units = m.encode(&s, &frames(len, 4)).unwrap();
            assert_eq!(units.len(), len.div_ceil(2));
        }
        assert_eq!(cfg.units_for(10), 5);
    }

    #[test]
    fn reconstruction_has_input_shape_and_is_finite() {
        let cfg = tiny();
        let (m, s) = VqModel::new(&cfg, 1).unwrap();
        let f = frames(9, 4);
        let mut g = Graph::new();
        let mut rng = seeded(0);
        let out = m.forward(&mut g, &s, &f, Quantize::Gumbel { rng: &mut rng, tau: 1.0 }).unwrap();
        assert_eq!(g.value(out.reconstruction).shape(), &[9, 4]);
        let t = g.constant(f.clone());
        let loss = g.mse(out.reconstruction, t).unwrap();
        assert!(g.value(loss).item().is_finite());
        let grads = g.backward(loss).unwrap().param_grads(&s);
        assert!(grads.iter().all(Tensor::is_finite));
    }

    #[test]
    fn wrong_frame_width_is_a_shape_error() {
        let (m, s) = VqModel::new(&tiny(), 0).unwrap();
        assert!(matches!(m.encode(&s, &frames(4, 5)), Err(Error::Shape { .. })));
    }

    #[test]
    fn decode_rejects_mask() {
        let cfg = tiny();
        let (m, s) = VqModel::new(&cfg, 0).unwrap();
        assert!(matches!(m.decode(&s, &[1, cfg.mask_token(), 2], None), Err(Error::Contract(_))));
        assert_eq!(m.decode(&s, &[1, 2, 3], Some(5)).unwrap().shape(), &[5, 4]);
    }

    #[test]
    fn diversity_examples() {
        assert!(diversity_loss(&[vec![0.25; 4]]).unwrap().abs() < 1e-15);
        assert_eq!(diversity_loss(&[vec![1.0, 0.0, 0.0, 0.0]]).unwrap(), 0.75);
        assert_eq!(diversity_loss(&[vec![1.0, 0.0, 0.0, 0.0], vec![0.0, 1.0, 0.0, 0.0]]).unwrap(), 0.5);
        assert!(diversity_loss(&[]).is_err());
    }

    #[test]
    fn hard_gumbel_forward_is_one_hot() {
        let mut g = Graph::new();
        let mut rng = seeded(9);
        let l = g.input(Tensor::new(vec![3, 5], (0..15).map(|i| i as f64 * 0.1).collect()).unwrap().with_grad());
        let s = gumbel_softmax(&mut g, l, 1.0, &mut rng, true).unwrap();
        for r in 0..3 {
            let row = g.value(s.output).row_slice(r);
            assert_eq!(row.iter().filter(|&&v| v == 1.0).count(), 1);
            assert_eq!(row.iter().filter(|&&v| v == 0.0).count(), 4);
            assert_eq!(row[s.indices[r]], 1.0);
        }
    }

    #[test]
    fn layout_check_rejects_foreign_store() {
        let (_, s) = VqModel::new(&tiny(), 0).unwrap();
        let other = VqConfig { codebook_size: 9, ..tiny() };
        assert!(VqModel::with_store(&other, &s).is_err());
        assert!(VqModel::with_store(&tiny(), &s).is_ok());
    }
}
