//! Detection and correction on top of trained models.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Seq2Seq;
use crate::numerics::{ParamStore, Tensor};
use crate::vq::VqModel;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DetectionConfig {
    /// Phoneme decision threshold `H`.
    pub threshold: f64,
    /// Units with `M̂ > au_mask_threshold` are masked for correction.
    pub au_mask_threshold: f64,
}

impl Default for DetectionConfig {
    fn default() -> Self {
        DetectionConfig { threshold: 0.4, au_mask_threshold: 0.5 }
    }
}

impl DetectionConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return Err(Error::Config(format!("threshold H = {} must lie in (0, 1)", self.threshold)));
        }
        if !(0.0..=1.0).contains(&self.au_mask_threshold) {
            return Err(Error::Config("au_mask_threshold must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AlignmentResult {
    /// `T × L`, heads averaged.
    pub a_avg: Tensor,
    pub e_hat: Vec<f64>,
    pub decisions: Vec<u8>,
    /// Phonemes that received no attention; their score is 0.
    pub unattended: Vec<usize>,
}

/// Arithmetic mean of per-head `T × L` maps.
pub fn average_heads(attention: &[Tensor]) -> Result<Tensor> {
    let first = attention.first().ok_or_else(|| Error::shape("average_heads", "no attention heads"))?;
    let mut data = vec![0.0; first.numel()];
    for a in attention {
        if a.shape() != first.shape() {
            return Err(Error::shape("average_heads", format!("{:?} vs {:?}", a.shape(), first.shape())));
        }
        for (d, v) in data.iter_mut().zip(a.data()) {
            *d += v;
        }
    }
    let h = attention.len() as f64;
    data.iter_mut().for_each(|d| *d /= h);
    Tensor::new(first.shape().to_vec(), data)
}

/// `Ê_i = Σ_j A[j,i]·M̂_j / Σ_j A[j,i]` with heads averaged. Returns the
/// scores and the phonemes whose attention mass was zero.
pub fn phoneme_error_scores(m_hat: &[f64], attention: &[Tensor]) -> Result<(Vec<f64>, Vec<usize>)> {
    let a = average_heads(attention)?;
    if a.shape().len() != 2 || a.rows() != m_hat.len() {
        return Err(Error::shape(
            "phoneme_error_scores",
            format!("attention {:?} for {} mask scores", a.shape(), m_hat.len()),
        ));
    }
    let l = a.cols();
    let mut num = vec![0.0; l];
    let mut den = vec![0.0; l];
    for (j, &m) in m_hat.iter().enumerate() {
        for (i, &w) in a.row_slice(j).iter().enumerate() {
            num[i] += w * m;
            den[i] += w;
        }
    }
    let mut unattended = Vec::new();
    let scores = (0..l)
        .map(|i| {
            if den[i] > 0.0 {
                num[i] / den[i]
            } else {
                unattended.push(i);
                0.0
            }
        })
        .collect();
    Ok((scores, unattended))
}

pub fn decide(e_hat: &[f64], threshold: f64) -> Vec<u8> {
    e_hat.iter().map(|&e| u8::from(e > threshold)).collect()
}

#[derive(Clone, Debug)]
pub struct Detection {
    pub alignment: AlignmentResult,
    pub mask_probs: Vec<f64>,
}

/// Per-utterance detection artifact.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectionRecord {
    pub id: String,
    #[serde(rename = "E_hat")]
    pub e_hat: Vec<f64>,
    pub decisions: Vec<u8>,
    #[serde(rename = "H")]
    pub threshold: f64,
    #[serde(rename = "M_hat")]
    pub mask_probs: Vec<f64>,
}

pub fn detect(
    detector: &Seq2Seq,
    store: &ParamStore,
    units: &[u32],
    phonemes: &[usize],
    cfg: &DetectionConfig,
) -> Result<Detection> {
    if let Some(&u) = units.iter().find(|&&u| u as usize >= detector.cfg.codebook_size) {
        return Err(Error::Contract(format!(
            "unit {u} is not a codebook index for V = {}",
            detector.cfg.codebook_size
        )));
    }
    let out = detector.forward(store, units, phonemes)?;
    let (e_hat, unattended) = phoneme_error_scores(&out.mask_probs, &out.attention)?;
    let decisions = decide(&e_hat, cfg.threshold);
    let a_avg = average_heads(&out.attention)?;
    Ok(Detection { alignment: AlignmentResult { a_avg, e_hat, decisions, unattended }, mask_probs: out.mask_probs })
}

#[derive(Clone, Debug)]
pub struct Correction {
    pub units: Vec<u32>,
    pub masked: Vec<bool>,
    pub frames: Tensor,
}

/// Masks units with `M̂` above the threshold and fills them in one pass.
pub fn fill_masked(
    corrector: &Seq2Seq,
    store: &ParamStore,
    units: &[u32],
    phonemes: &[usize],
    m_hat: &[f64],
    cfg: &DetectionConfig,
) -> Result<(Vec<u32>, Vec<bool>)> {
    if m_hat.len() != units.len() {
        return Err(Error::shape("correct", format!("{} mask scores for {} units", m_hat.len(), units.len())));
    }
    let masked: Vec<bool> = m_hat.iter().map(|&m| m > cfg.au_mask_threshold).collect();
    if !masked.contains(&true) {
        return Ok((units.to_vec(), masked));
    }
    let mask = corrector.cfg.mask_token();
    let input: Vec<u32> = units.iter().zip(&masked).map(|(&u, &m)| if m { mask } else { u }).collect();
    let out = corrector.forward(store, &input, phonemes)?;
    let v = corrector.cfg.codebook_size;
    let filled = units
        .iter()
        .zip(&masked)
        .enumerate()
        .map(|(t, (&u, &m))| if m { argmax_excluding_mask(&out.au_logits.row_slice(t)[..v]) } else { u })
        .collect();
    Ok((filled, masked))
}

fn argmax_excluding_mask(logits: &[f64]) -> u32 {
    crate::vq::argmax(logits) as u32
}

#[allow(clippy::too_many_arguments)]
pub fn correct(
    corrector: &Seq2Seq,
    corrector_store: &ParamStore,
    vq: &VqModel,
    vq_store: &ParamStore,
    units: &[u32],
    phonemes: &[usize],
    m_hat: &[f64],
    frames: Option<usize>,
    cfg: &DetectionConfig,
) -> Result<Correction> {
    if vq.cfg.codebook_size != corrector.cfg.codebook_size {
        return Err(Error::Validation(format!(
            "corrector has V = {} but the VQ checkpoint has V = {}",
            corrector.cfg.codebook_size, vq.cfg.codebook_size
        )));
    }
    let (units, masked) = fill_masked(corrector, corrector_store, units, phonemes, m_hat, cfg)?;
    let frames = vq.decode(vq_store, &units, frames)?;
    Ok(Correction { units, masked, frames })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn map(rows: usize, cols: usize, data: Vec<f64>) -> Tensor {
        Tensor::new(vec![rows, cols], data).unwrap()
    }

    #[test]
    fn constant_mask_gives_constant_scores() {
        let a = map(3, 2, vec![0.2, 0.8, 0.5, 0.5, 0.9, 0.1]);
        let (e, _) = phoneme_error_scores(&[1.0; 3], &[a]).unwrap();
        for v in e {
            assert!((v - 1.0).abs() < 1e-15);
        }
    }

    #[test]
    fn uniform_attention_is_plain_mean() {
        let a = map(4, 3, vec![1.0 / 3.0; 12]);
        let (e, _) = phoneme_error_scores(&[1.0, 0.0, 0.0, 0.0], &[a]).unwrap();
        for v in e {
            assert!((v - 0.25).abs() < 1e-15);
        }
    }

    #[test]
    fn hand_weighted_example() {
        let a = map(2, 2, vec![0.9, 0.1, 0.1, 0.9]);
        let (e, _) = phoneme_error_scores(&[1.0, 0.0], &[a]).unwrap();
        assert!((e[0] - 0.9).abs() < 1e-15);
    }

    #[test]
    fn heads_are_averaged() {
        let a = map(2, 1, vec![1.0, 0.0]);
        let b = map(2, 1, vec![0.0, 1.0]);
        let (e, _) = phoneme_error_scores(&[1.0, 0.0], &[a, b]).unwrap();
        assert!((e[0] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn unattended_phoneme_scores_zero() {
        let a = map(2, 2, vec![1.0, 0.0, 1.0, 0.0]);
        let (e, none) = phoneme_error_scores(&[0.7, 0.7], &[a]).unwrap();
        assert_eq!(e[1], 0.0);
        assert_eq!(none, vec![1]);
    }

    #[test]
    fn threshold_is_strict() {
        assert_eq!(decide(&[0.4, 0.41, 0.1], 0.4), vec![0, 1, 0]);
    }

    #[test]
    fn shape_mismatch_is_reported() {
        let a = map(3, 2, vec![0.5; 6]);
        assert!(matches!(phoneme_error_scores(&[0.1, 0.2], &[a]), Err(Error::Shape { .. })));
    }
}
