//! Corpus-level scores.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Prf1 {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub tn: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

fn ratio(a: usize, b: usize) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}

impl Prf1 {
    pub fn from_counts(tp: usize, fp: usize, fn_: usize, tn: usize) -> Self {
        let precision = ratio(tp, tp + fp);
        let recall = ratio(tp, tp + fn_);
        let f1 = if precision + recall > 0.0 { 2.0 * precision * recall / (precision + recall) } else { 0.0 };
        Prf1 { tp, fp, fn_, tn, precision, recall, f1 }
    }

    pub fn total(&self) -> usize {
        self.tp + self.fp + self.fn_ + self.tn
    }

    pub fn positive_rate(&self) -> f64 {
        ratio(self.tp + self.fn_, self.total())
    }

    pub fn decision_rate(&self) -> f64 {
        ratio(self.tp + self.fp, self.total())
    }
}

/// Micro-averaged precision, recall and F1 over every phoneme of every utterance.
pub fn prf1(decisions: &[Vec<u8>], labels: &[Vec<u8>]) -> Result<Prf1> {
    if decisions.len() != labels.len() {
        return Err(Error::Contract(format!("{} decision rows for {} label rows", decisions.len(), labels.len())));
    }
    let (mut tp, mut fp, mut fn_, mut tn) = (0, 0, 0, 0);
    for (u, (d, l)) in decisions.iter().zip(labels).enumerate() {
        if d.len() != l.len() {
            return Err(Error::Contract(format!("utterance {u}: {} decisions for {} labels", d.len(), l.len())));
        }
        for (&d, &l) in d.iter().zip(l) {
            match (d != 0, l != 0) {
                (true, true) => tp += 1,
                (true, false) => fp += 1,
                (false, true) => fn_ += 1,
                (false, false) => tn += 1,
            }
        }
    }
    Ok(Prf1::from_counts(tp, fp, fn_, tn))
}

/// Expected F1 of a detector flagging each phoneme independently with
/// probability `decision_rate` when a fraction `positive_rate` is erroneous.
pub fn random_baseline_f1(positive_rate: f64, decision_rate: f64) -> f64 {
    if positive_rate + decision_rate > 0.0 {
        2.0 * positive_rate * decision_rate / (positive_rate + decision_rate)
    } else {
        0.0
    }
}

/// ROC AUC via the Mann-Whitney rank statistic with tied ranks averaged.
/// `None` unless both classes are present.
pub fn mask_auc(scores: &[f64], labels: &[u8]) -> Result<Option<f64>> {
    if scores.len() != labels.len() {
        return Err(Error::Contract(format!("{} scores for {} labels", scores.len(), labels.len())));
    }
    let pos = labels.iter().filter(|&&l| l != 0).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Ok(None);
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        rank_sum += order[i..=j].iter().filter(|&&k| labels[k] != 0).count() as f64 * avg;
        i = j + 1;
    }
    let u = rank_sum - (pos * (pos + 1)) as f64 / 2.0;
    Ok(Some(u / (pos * neg) as f64))
}

/// Matches and counts at masked and unmasked positions.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RecoveryCounts {
    pub masked: usize,
    pub recovered: usize,
    pub unmasked: usize,
    pub copied: usize,
}

impl RecoveryCounts {
    pub fn add(&mut self, other: &RecoveryCounts) {
        self.masked += other.masked;
        self.recovered += other.recovered;
        self.unmasked += other.unmasked;
        self.copied += other.copied;
    }

    /// Fraction of masked positions equal to the reference; `None` without masked positions.
    pub fn recovery_rate(&self) -> Option<f64> {
        (self.masked > 0).then(|| self.recovered as f64 / self.masked as f64)
    }

    pub fn copy_rate(&self) -> Option<f64> {
        (self.unmasked > 0).then(|| self.copied as f64 / self.unmasked as f64)
    }
}

/// Compares `corrected` with `reference` at masked positions and with
/// `input` at the rest.
pub fn recovery_counts(corrected: &[u32], reference: &[u32], input: &[u32], masked: &[bool]) -> Result<RecoveryCounts> {
    let t = corrected.len();
    if reference.len() != t || input.len() != t || masked.len() != t {
        return Err(Error::Contract(format!(
            "lengths corrected={t} reference={} input={} mask={}",
            reference.len(),
            input.len(),
            masked.len()
        )));
    }
    let mut c = RecoveryCounts::default();
    for i in 0..t {
        if masked[i] {
            c.masked += 1;
            c.recovered += usize::from(corrected[i] == reference[i]);
        } else {
            c.unmasked += 1;
            c.copied += usize::from(corrected[i] == input[i]);
        }
    }
    Ok(c)
}

/// Single-utterance recovery rate.
pub fn recovery_rate(corrected: &[u32], reference: &[u32], masked: &[bool]) -> Result<Option<f64>> {
    Ok(recovery_counts(corrected, reference, corrected, masked)?.recovery_rate())
}

pub fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        0.0
    } else {
        xs.iter().sum::<f64>() / xs.len() as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hand_case() {
        let p = Prf1::from_counts(2, 1, 2, 0);
        assert_eq!(p.precision, 2.0 / 3.0);
        assert_eq!(p.recall, 0.5);
        assert!((p.f1 - 4.0 / 7.0).abs() < 1e-15);
    }

    #[test]
    fn perfect_and_silent_detectors() {
        let labels = vec![vec![0, 1, 1], vec![1, 0]];
        let p = prf1(&labels, &labels).unwrap();
        assert_eq!((p.precision, p.recall, p.f1), (1.0, 1.0, 1.0));
        let silent = vec![vec![0; 3], vec![0; 2]];
        let p = prf1(&silent, &labels).unwrap();
        assert_eq!((p.recall, p.f1), (0.0, 0.0));
        assert!(prf1(&[vec![0]], &[vec![0, 1]]).is_err());
    }

    #[test]
    fn auc_examples() {
        assert_eq!(mask_auc(&[0.1, 0.4, 0.35, 0.8], &[0, 0, 1, 1]).unwrap(), Some(0.75));
        assert_eq!(mask_auc(&[0.0, 1.0, 1.0], &[0, 1, 1]).unwrap(), Some(1.0));
        assert_eq!(mask_auc(&[0.3; 4], &[0, 1, 0, 1]).unwrap(), Some(0.5));
        assert_eq!(mask_auc(&[0.3, 0.2], &[1, 1]).unwrap(), None);
    }

    #[test]
    fn recovery_examples() {
        assert_eq!(recovery_rate(&[1, 2, 3], &[1, 2, 3], &[true, false, true]).unwrap(), Some(1.0));
        assert_eq!(recovery_rate(&[1, 2, 3], &[1, 5, 4], &[false, true, true]).unwrap(), Some(0.0));
        assert_eq!(recovery_rate(&[1], &[2], &[false]).unwrap(), None);
    }

    #[test]
    fn baseline_f1() {
        assert_eq!(random_baseline_f1(0.5, 0.5), 0.5);
        assert_eq!(random_baseline_f1(0.0, 0.0), 0.0);
    }
}
