//! Phoneme encoder and non-causal AU decoder with two heads: the original
//! unit sequence `X̂` and the error mask `M̂`.

use std::path::Path;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::corruption::{corrupt, CorruptionMode, SpanSamplerConfig};
use crate::error::{Error, Result};
use crate::nn::{sinusoidal_positions, Conv1d, DecoderLayer, Embedding, EncoderLayer, LayerNorm, Linear};
use crate::numerics::kernels;
use crate::numerics::{
    adam_step, clip_global_norm, load_checkpoint, save_checkpoint, seeded, substream, AdamState, Gradients,
    Graph, ParamStore, Tensor, TrainConfig, Var,
};
use crate::parallel::par_map;
use crate::vq::check_layout;

pub const DETECTOR_KIND: &str = "detector";
pub const CORRECTOR_KIND: &str = "corrector";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// Codebook size `V`; the unit vocabulary is `V + 1` with ⟨MASK⟩ = `V`.
    pub codebook_size: usize,
    pub phoneme_vocab: usize,
    pub dim: usize,
    pub ff_dim: usize,
    pub heads: usize,
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    pub encoder_front_kernel: usize,
    pub decoder_front_kernel: usize,
    pub front_convs: usize,
    /// Residual and embedding dropout during training.
    pub dropout: f64,
}

impl ModelConfig {
    pub fn desk(codebook_size: usize, phoneme_vocab: usize) -> Self {
        ModelConfig {
            codebook_size,
            phoneme_vocab,
            dim: 64,
            ff_dim: 128,
            heads: 2,
            encoder_layers: 2,
            decoder_layers: 2,
            encoder_front_kernel: 3,
            decoder_front_kernel: 5,
            front_convs: 2,
            dropout: 0.1,
        }
    }

    pub fn paper(codebook_size: usize, phoneme_vocab: usize) -> Self {
        ModelConfig {
            dim: 512,
            ff_dim: 1024,
            heads: 4,
            encoder_layers: 6,
            decoder_layers: 12,
            ..Self::desk(codebook_size, phoneme_vocab)
        }
    }

    pub fn au_vocab(&self) -> usize {
        self.codebook_size + 1
    }

    pub fn mask_token(&self) -> u32 {
        self.codebook_size as u32
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.heads == 0 || self.dim % self.heads != 0 {
            return bad(format!("dim {} not divisible by {} heads", self.dim, self.heads));
        }
        if self.codebook_size < 2 || self.phoneme_vocab == 0 {
            return bad("codebook_size must be ≥ 2 and phoneme_vocab ≥ 1".into());
        }
        if self.encoder_front_kernel % 2 == 0 || self.decoder_front_kernel % 2 == 0 {
            return bad("front conv kernels must be odd".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0, 1)", self.dropout));
        }
        if self.decoder_layers == 0 {
            return bad("at least one decoder layer is needed for the attention map".into());
        }
        Ok(())
    }
}

/// Values of one forward pass.
#[derive(Clone, Debug)]
pub struct DetectorOutput {
    /// `T × (V+1)` logits.
    pub au_logits: Tensor,
    pub mask_logits: Vec<f64>,
    /// `M̂ = σ(mask_logits)`.
    pub mask_probs: Vec<f64>,
    /// Last decoder layer cross-attention, one `T × L` map per head.
    pub attention: Vec<Tensor>,
}

pub struct ForwardVars {
    pub au_logits: Var,
    pub mask_logits: Var,
    pub attention: Vec<Var>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    pub total: f64,
    pub ce: f64,
    pub bce: f64,
}

#[derive(Clone, Debug)]
struct FrontConvs {
    convs: Vec<Conv1d>,
}

impl FrontConvs {
    fn new(store: &mut ParamStore, rng: &mut crate::numerics::Rng, name: &str, cfg: &ModelConfig, k: usize) -> Self {
        let convs = (0..cfg.front_convs)
            .map(|i| Conv1d::same(store, rng, &format!("{name}.front{i}"), cfg.dim, cfg.dim, k))
            .collect();
        FrontConvs { convs }
    }

    /// Padded rows are zeroed before every convolution so valid outputs do
    /// not depend on the padded width.
    fn forward(&self, g: &mut Graph, store: &ParamStore, mut x: Var, keep: Option<&Tensor>) -> Result<Var> {
        for c in &self.convs {
            if let Some(k) = keep {
                x = g.mul_const(x, k)?;
            }
            x = c.forward(g, store, x)?;
            x = g.relu(x);
        }
        Ok(x)
    }
}

#[derive(Clone, Debug)]
pub struct Seq2Seq {
    pub cfg: ModelConfig,
    phone_embed: Embedding,
    enc_front: FrontConvs,
    encoder: Vec<EncoderLayer>,
    enc_norm: LayerNorm,
    unit_embed: Embedding,
    dec_front: FrontConvs,
    decoder: Vec<DecoderLayer>,
    dec_norm: LayerNorm,
    au_head: Linear,
    mask_head: Linear,
}

impl Seq2Seq {
    pub fn new(cfg: &ModelConfig, seed: u64) -> Result<(Self, ParamStore)> {
        cfg.validate()?;
        let mut store = ParamStore::new();
        let mut rng = seeded(seed);
        let (s, r) = (&mut store, &mut rng);
        let d = cfg.dim;
        let phone_embed = Embedding::new(s, r, "enc.embed", cfg.phoneme_vocab, d);
        let enc_front = FrontConvs::new(s, r, "enc", cfg, cfg.encoder_front_kernel);
        let encoder = (0..cfg.encoder_layers)
            .map(|i| EncoderLayer::new(s, r, &format!("enc.layer{i}"), d, cfg.ff_dim, cfg.heads))
            .collect();
        let enc_norm = LayerNorm::new(s, "enc.norm", d);
        let unit_embed = Embedding::new(s, r, "dec.embed", cfg.au_vocab(), d);
        let dec_front = FrontConvs::new(s, r, "dec", cfg, cfg.decoder_front_kernel);
        let decoder = (0..cfg.decoder_layers)
            .map(|i| DecoderLayer::new(s, r, &format!("dec.layer{i}"), d, cfg.ff_dim, cfg.heads))
            .collect();
        let dec_norm = LayerNorm::new(s, "dec.norm", d);
        let au_head = Linear::new(s, r, "head.au", d, cfg.au_vocab());
        let mask_head = Linear::new(s, r, "head.mask", d, 1);
        let model = Seq2Seq {
            cfg: cfg.clone(),
            phone_embed,
            enc_front,
            encoder,
            enc_norm,
            unit_embed,
            dec_front,
            decoder,
            dec_norm,
            au_head,
            mask_head,
        };
        Ok((model, store))
    }

    pub fn with_store(cfg: &ModelConfig, store: &ParamStore) -> Result<Self> {
        let (model, fresh) = Seq2Seq::new(cfg, 0)?;
        check_layout(&fresh, store)?;
        Ok(model)
    }

    fn check_inputs(&self, units: &[u32], phonemes: &[usize]) -> Result<()> {
        if units.is_empty() {
            return Err(Error::Contract("corrupted unit sequence is empty".into()));
        }
        if phonemes.is_empty() {
            return Err(Error::Contract("phoneme sequence is empty".into()));
        }
        if let Some(&u) = units.iter().find(|&&u| u as usize >= self.cfg.au_vocab()) {
            return Err(Error::Contract(format!("unit {u} outside vocabulary of {}", self.cfg.au_vocab())));
        }
        if let Some(&p) = phonemes.iter().find(|&&p| p >= self.cfg.phoneme_vocab) {
            return Err(Error::Contract(format!("phoneme {p} outside vocabulary of {}", self.cfg.phoneme_vocab)));
        }
        Ok(())
    }

    /// Forward pass on the tape. Phonemes at positions `≥ valid_len` are
    /// padding and excluded from attention.
    pub fn forward_graph(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        units: &[u32],
        phonemes: &[usize],
        valid_len: usize,
    ) -> Result<ForwardVars> {
        self.check_inputs(units, phonemes)?;
        if valid_len == 0 || valid_len > phonemes.len() {
            return Err(Error::Contract(format!("valid length {valid_len} for {} phonemes", phonemes.len())));
        }
        let d = self.cfg.dim;
        let l = phonemes.len();
        let padded = valid_len < l;
        let valid: Vec<bool> = (0..l).map(|i| i < valid_len).collect();
        let keep = padded.then(|| {
            let data = (0..l).flat_map(|i| std::iter::repeat_n(f64::from(u8::from(i < valid_len)), d)).collect();
            Tensor::new(vec![l, d], data).expect("l·d")
        });

        let p = self.phone_embed.forward(g, store, phonemes)?;
        let p = self.enc_front.forward(g, store, p, keep.as_ref())?;
        let h = g.add_const(p, &sinusoidal_positions(l, d))?;
        let mut h = g.dropout(h)?;
        let key_valid = padded.then_some(valid.as_slice());
        for layer in &self.encoder {
            h = layer.forward(g, store, h, key_valid)?;
        }
        let memory = self.enc_norm.forward(g, store, h)?;

        let ids: Vec<usize> = units.iter().map(|&u| u as usize).collect();
        let x = self.unit_embed.forward(g, store, &ids)?;
        let x = self.dec_front.forward(g, store, x, None)?;
        let x = g.add_const(x, &sinusoidal_positions(units.len(), d))?;
        let mut x = g.dropout(x)?;
        let mut attention = Vec::new();
        for layer in &self.decoder {
            let (out, probs) = layer.forward(g, store, x, memory, key_valid)?;
            x = out;
            attention = probs;
        }
        let x = self.dec_norm.forward(g, store, x)?;
        let au_logits = self.au_head.forward(g, store, x)?;
        let mask_logits = self.mask_head.forward(g, store, x)?;
        Ok(ForwardVars { au_logits, mask_logits, attention })
    }

    pub fn forward(&self, store: &ParamStore, units: &[u32], phonemes: &[usize]) -> Result<DetectorOutput> {
        self.forward_padded(store, units, phonemes, phonemes.len())
    }

    pub fn forward_padded(
        &self,
        store: &ParamStore,
        units: &[u32],
        phonemes: &[usize],
        valid_len: usize,
    ) -> Result<DetectorOutput> {
        let mut g = Graph::new();
        let v = self.forward_graph(&mut g, store, units, phonemes, valid_len)?;
        Ok(output_values(&g, &v))
    }
}

pub fn output_values(g: &Graph, v: &ForwardVars) -> DetectorOutput {
    let mask_logits = g.value(v.mask_logits).data().to_vec();
    let mask_probs = mask_logits.iter().map(|&z| kernels::sigmoid(z)).collect();
    DetectorOutput {
        au_logits: g.value(v.au_logits).clone(),
        mask_logits,
        mask_probs,
        attention: v.attention.iter().map(|&a| g.value(a).clone()).collect(),
    }
}

fn check_targets(t: usize, x: &[u32], m: &[u8]) -> Result<()> {
    if x.len() != t || m.len() != t {
        return Err(Error::shape("loss", format!("targets |X|={} |M|={} for T={t}", x.len(), m.len())));
    }
    Ok(())
}

/// `CE(X̂, X) + [include_bce]·BCE(M̂, M)` on the tape, both position means.
pub fn loss_graph(
    g: &mut Graph,
    out: &ForwardVars,
    x: &[u32],
    m: &[u8],
    include_bce: bool,
) -> Result<(Var, LossParts)> {
    check_targets(g.value(out.au_logits).rows(), x, m)?;
    let targets: Vec<usize> = x.iter().map(|&u| u as usize).collect();
    let ce = g.cross_entropy(out.au_logits, &targets)?;
    let labels: Vec<f64> = m.iter().map(|&v| f64::from(v)).collect();
    let bce = g.bce_with_logits(out.mask_logits, &labels)?;
    let (ce_v, bce_v) = (g.value(ce).item(), g.value(bce).item());
    if include_bce {
        let total = g.add(ce, bce)?;
        Ok((total, LossParts { total: g.value(total).item(), ce: ce_v, bce: bce_v }))
    } else {
        Ok((ce, LossParts { total: ce_v, ce: ce_v, bce: bce_v }))
    }
}

/// Loss of a computed output.
pub fn loss(out: &DetectorOutput, x: &[u32], m: &[u8], include_bce: bool) -> Result<LossParts> {
    let t = out.au_logits.rows();
    check_targets(t, x, m)?;
    let mut ce = 0.0;
    for (r, &target) in x.iter().enumerate() {
        let mut row = out.au_logits.row_slice(r).to_vec();
        kernels::log_softmax_inplace(&mut row);
        ce -= row[target as usize];
    }
    ce /= t as f64;
    let bce = out.mask_logits.iter().zip(m).map(|(&z, &y)| kernels::bce_logit(z, f64::from(y))).sum::<f64>() / t as f64;
    let total = if include_bce { ce + bce } else { ce };
    Ok(LossParts { total, ce, bce })
}

/// Which objective a training run optimizes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    /// Distractor corruption, CE + BCE.
    Detector,
    /// ⟨MASK⟩ corruption, CE only.
    Corrector,
}

impl Stage {
    pub fn kind(self) -> &'static str {
        match self {
            Stage::Detector => DETECTOR_KIND,
            Stage::Corrector => CORRECTOR_KIND,
        }
    }

    fn name(self) -> &'static str {
        match self {
            Stage::Detector => "train-detector",
            Stage::Corrector => "finetune-corrector",
        }
    }
}

/// L1 training data. `pool` holds distractor sources; `pool[i]` is
/// `units[i]` for every training utterance, so it is excluded as a source.
pub struct TrainData<'a> {
    pub units: &'a [Vec<u32>],
    pub phonemes: &'a [Vec<usize>],
    pub pool: &'a [Vec<u32>],
}

impl TrainData<'_> {
    fn validate(&self) -> Result<()> {
        if self.units.is_empty() {
            return Err(Error::Contract("training AU corpus is empty".into()));
        }
        if self.units.len() != self.phonemes.len() {
            return Err(Error::Contract(format!(
                "{} unit sequences for {} phoneme sequences",
                self.units.len(),
                self.phonemes.len()
            )));
        }
        if self.pool.len() < self.units.len() || self.pool[..self.units.len()] != *self.units {
            return Err(Error::Contract("distractor pool must start with the training sequences".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelLogRow {
    pub step: usize,
    pub lr: f64,
    pub loss: f64,
    pub ce: f64,
    pub bce: f64,
}

pub struct ModelTrained {
    pub store: ParamStore,
    pub log: Vec<ModelLogRow>,
}

pub struct ModelSink<'a> {
    pub path: &'a Path,
    pub config_digest: &'a str,
}

fn save(stage: Stage, cfg: &ModelConfig, sink: Option<&ModelSink>, store: &ParamStore) -> Result<()> {
    match sink {
        Some(s) => save_checkpoint(s.path, stage.kind(), cfg, s.config_digest, store),
        None => Ok(()),
    }
}

/// Adam on freshly corrupted batches. Per-example graphs run in parallel;
/// gradients are summed in batch order.
pub fn train_model(
    stage: Stage,
    cfg: &ModelConfig,
    train: &TrainConfig,
    spans: &SpanSamplerConfig,
    data: &TrainData,
    mut store: ParamStore,
    sink: Option<ModelSink>,
) -> Result<ModelTrained> {
    train.validate()?;
    spans.validate()?;
    data.validate()?;
    let model = Seq2Seq::with_store(cfg, &store)?;
    let spans = SpanSamplerConfig {
        mode: match stage {
            Stage::Detector => CorruptionMode::Distractor,
            Stage::Corrector => CorruptionMode::MaskToken,
        },
        ..spans.clone()
    };
    let include_bce = stage == Stage::Detector;
    let mut adam = AdamState::new(&store);
    let mut rng = substream(train.seed, 2 + stage as u64);
    let mut log = Vec::with_capacity(train.max_steps);
    for step in 1..=train.max_steps {
        let batch: Vec<(usize, u64)> =
            (0..train.batch_size).map(|_| (rng.random_range(0..data.units.len()), rng.random())).collect();
        let results = par_map(&batch, |&(i, seed)| -> Result<(Gradients, LossParts)> {
            let mut r = seeded(seed);
            let rec = corrupt(&mut r, &data.units[i], data.pool, Some(i), &spans, cfg.mask_token())?;
            if !rec.preserves_unmasked() {
                return Err(Error::Contract(format!("corruption of utterance {i} altered unmasked units")));
            }
            let mut g = Graph::new();
            g.enable_dropout(cfg.dropout, r.random())?;
            let out = model.forward_graph(&mut g, &store, &rec.c, &data.phonemes[i], data.phonemes[i].len())?;
            let (l, parts) = loss_graph(&mut g, &out, &rec.x, &rec.m, include_bce)?;
            Ok((g.backward(l)?.param_grads(&store), parts))
        });
        let mut grads = Gradients::zeros_like(&store);
        let mut sum = LossParts { total: 0.0, ce: 0.0, bce: 0.0 };
        for r in results {
            let (gr, p) = r?;
            grads.accumulate(&gr);
            sum.total += p.total;
            sum.ce += p.ce;
            sum.bce += p.bce;
        }
        let n = batch.len() as f64;
        grads.scale(1.0 / n);
        if !sum.total.is_finite() {
            save(stage, cfg, sink.as_ref(), &store)?;
            return Err(Error::Divergence { stage: stage.name(), step });
        }
        if let Some(c) = train.grad_clip {
            clip_global_norm(&mut grads, c);
        }
        if let Err(e) = adam_step(&mut store, &grads, step, train, &mut adam) {
            save(stage, cfg, sink.as_ref(), &store)?;
            return Err(e);
        }
        log.push(ModelLogRow { step, lr: train.lr_at(step), loss: sum.total / n, ce: sum.ce / n, bce: sum.bce / n });
    }
    save(stage, cfg, sink.as_ref(), &store)?;
    Ok(ModelTrained { store, log })
}

pub fn train_detector(
    cfg: &ModelConfig,
    train: &TrainConfig,
    spans: &SpanSamplerConfig,
    data: &TrainData,
    sink: Option<ModelSink>,
) -> Result<ModelTrained> {
    let (_, store) = Seq2Seq::new(cfg, train.seed)?;
    train_model(Stage::Detector, cfg, train, spans, data, store, sink)
}

/// Fine-tunes a copy of the detector weights as the corrector.
pub fn finetune_corrector(
    detector_cfg: &ModelConfig,
    detector: &ParamStore,
    cfg: &ModelConfig,
    train: &TrainConfig,
    spans: &SpanSamplerConfig,
    data: &TrainData,
    sink: Option<ModelSink>,
) -> Result<ModelTrained> {
    if detector_cfg != cfg {
        return Err(Error::Checkpoint("corrector config differs from the detector checkpoint".into()));
    }
    train_model(Stage::Corrector, cfg, train, spans, data, detector.clone(), sink)
}

pub struct LoadedModel {
    pub model: Seq2Seq,
    pub store: ParamStore,
    pub config_digest: String,
}

pub fn load_model(path: &Path, kind: &str) -> Result<LoadedModel> {
    let (header, store) = load_checkpoint(path)?;
    if header.kind != kind {
        return Err(Error::Checkpoint(format!(
            "{} holds a `{}` checkpoint, expected `{kind}`",
            path.display(),
            header.kind
        )));
    }
    let cfg: ModelConfig = header.config_as()?;
    let model = Seq2Seq::with_store(&cfg, &store)?;
    Ok(LoadedModel { model, store, config_digest: header.config_digest })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ModelConfig {
        ModelConfig { dim: 8, ff_dim: 16, encoder_layers: 1, decoder_layers: 1, ..ModelConfig::desk(6, 5) }
    }

    #[test]
    fn output_shapes_and_distributions() {
        let cfg = tiny();
        let (m, s) = Seq2Seq::new(&cfg, 0).unwrap();
        let out = m.forward(&s, &[0, 1, 6, 3, 2], &[1, 2, 4]).unwrap();
        assert_eq!(out.au_logits.shape(), &[5, 7]);
        assert_eq!(out.mask_probs.len(), 5);
        assert_eq!(out.attention.len(), 2);
        for a in &out.attention {
            assert_eq!(a.shape(), &[5, 3]);
            for r in 0..5 {
                assert!((a.row_slice(r).iter().sum::<f64>() - 1.0).abs() < 1e-9);
            }
        }
        assert!(out.mask_probs.iter().all(|p| (0.0..=1.0).contains(p)));
    }

    #[test]
    fn contract_errors() {
        let (m, s) = Seq2Seq::new(&tiny(), 0).unwrap();
        assert!(matches!(m.forward(&s, &[], &[1]), Err(Error::Contract(_))));
        assert!(matches!(m.forward(&s, &[7], &[1]), Err(Error::Contract(_))));
        assert!(matches!(m.forward(&s, &[1], &[]), Err(Error::Contract(_))));
    }

    #[test]
    fn loss_matches_tape_and_decomposes() {
        let (m, s) = Seq2Seq::new(&tiny(), 3).unwrap();
        let (c, p) = ([0u32, 6, 2, 3], [0usize, 4]);
        let (x, mk) = ([0u32, 1, 2, 3], [0u8, 1, 0, 0]);
        let out = m.forward(&s, &c, &p).unwrap();
        let with = loss(&out, &x, &mk, true).unwrap();
        let without = loss(&out, &x, &mk, false).unwrap();
        assert!((with.total - without.total - with.bce).abs() <= 4.0 * f64::EPSILON * with.total);
        let mut g = Graph::new();
        let v = m.forward_graph(&mut g, &s, &c, &p, 2).unwrap();
        let (_, parts) = loss_graph(&mut g, &v, &x, &mk, true).unwrap();
        assert!((parts.total - with.total).abs() < 1e-12);
        assert!(loss(&out, &x[..3], &mk, true).is_err());
    }

    #[test]
    fn uniform_predictions_give_reference_losses() {
        let out = DetectorOutput {
            au_logits: Tensor::zeros(&[3, 65]),
            mask_logits: vec![0.0; 3],
            mask_probs: vec![0.5; 3],
            attention: vec![],
        };
        let l = loss(&out, &[1, 2, 3], &[0, 1, 0], true).unwrap();
        assert!((l.ce - 65f64.ln()).abs() < 1e-12);
        assert!((l.bce - 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn mismatched_corrector_config_is_rejected() {
        let cfg = tiny();
        let (_, s) = Seq2Seq::new(&cfg, 0).unwrap();
        let other = ModelConfig { ff_dim: 8, ..cfg.clone() };
        let units = vec![vec![0u32, 1, 2]];
        let phonemes = vec![vec![0usize]];
        let data = TrainData { units: &units, phonemes: &phonemes, pool: &units };
        let r = finetune_corrector(&cfg, &s, &other, &TrainConfig::default(), &SpanSamplerConfig::default(), &data, None);
        assert!(matches!(r, Err(Error::Checkpoint(_))));
    }
}
