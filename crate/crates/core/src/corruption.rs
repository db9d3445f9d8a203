//! Span corruption of unit sequences: `C = D ⊙ M + X ⊙ (1 − M)`.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorruptionMode {
    /// Spans are filled with units copied from another utterance.
    Distractor,
    /// Spans are filled with ⟨MASK⟩.
    MaskToken,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpanSamplerConfig {
    pub k_max: usize,
    pub mode: CorruptionMode,
    /// Pool draws per span before giving up on finding a long enough sequence.
    pub max_resample: usize,
}

impl Default for SpanSamplerConfig {
    fn default() -> Self {
        SpanSamplerConfig { k_max: 10, mode: CorruptionMode::Distractor, max_resample: 64 }
    }
}

impl SpanSamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k_max == 0 {
            return Err(Error::Config("k_max must be ≥ 1".into()));
        }
        if self.max_resample == 0 {
            return Err(Error::Config("max_resample must be ≥ 1".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorruptionRecord {
    pub x: Vec<u32>,
    pub d: Vec<u32>,
    pub m: Vec<u8>,
    pub c: Vec<u32>,
    pub spans: Vec<(usize, usize)>,
}

impl CorruptionRecord {
    /// `C ⊙ (1 − M) = X ⊙ (1 − M)`.
    pub fn preserves_unmasked(&self) -> bool {
        self.c.len() == self.x.len()
            && self.m.len() == self.x.len()
            && self.c.iter().zip(&self.x).zip(&self.m).all(|((c, x), &m)| m == 1 || c == x)
    }
}

pub fn span_count(t: usize) -> usize {
    (t / 10).max(1)
}

/// `int(U(0, hi))` for a continuous uniform draw.
fn int_uniform(rng: &mut Rng, hi: usize) -> usize {
    if hi == 0 {
        return 0;
    }
    let u: f64 = rng.random::<f64>() * hi as f64;
    (u as usize).min(hi - 1)
}

/// `n = max(1, int(T/10))` spans `(j, k)` with `k = int(U(0, k_max))` and
/// `j = int(U(0, T − k))`. A `k` larger than `T` is clipped to `T`.
pub fn sample_spans(rng: &mut Rng, t: usize, cfg: &SpanSamplerConfig) -> Result<Vec<(usize, usize)>> {
    if t == 0 {
        return Err(Error::Contract("sample_spans needs T ≥ 1".into()));
    }
    Ok((0..span_count(t))
        .map(|_| {
            let k = int_uniform(rng, cfg.k_max).min(t);
            let j = int_uniform(rng, t - k);
            (j, k)
        })
        .collect())
}

/// Union of the spans as a 0/1 mask of length `t`.
pub fn span_mask(t: usize, spans: &[(usize, usize)]) -> Vec<u8> {
    let mut m = vec![0u8; t];
    for &(j, k) in spans {
        for v in &mut m[j..j + k] {
            *v = 1;
        }
    }
    m
}

/// Element-wise `D ⊙ M + X ⊙ (1 − M)`.
pub fn compose(x: &[u32], d: &[u32], m: &[u8]) -> Result<Vec<u32>> {
    if x.len() != d.len() || x.len() != m.len() {
        return Err(Error::shape("compose", format!("|X|={} |D|={} |M|={}", x.len(), d.len(), m.len())));
    }
    Ok(x.iter().zip(d).zip(m).map(|((&x, &d), &m)| if m == 1 { d } else { x }).collect())
}

/// Corrupts `x`. In distractor mode each span draws a contiguous segment
/// from a uniformly chosen pool sequence other than `exclude`.
pub fn corrupt(
    rng: &mut Rng,
    x: &[u32],
    pool: &[Vec<u32>],
    exclude: Option<usize>,
    cfg: &SpanSamplerConfig,
    mask_token: u32,
) -> Result<CorruptionRecord> {
    let t = x.len();
    let spans = sample_spans(rng, t, cfg)?;
    let m = span_mask(t, &spans);
    let mut d = x.to_vec();
    match cfg.mode {
        CorruptionMode::MaskToken => d.iter_mut().for_each(|v| *v = mask_token),
        CorruptionMode::Distractor => {
            let candidates = pool.len() - usize::from(exclude.is_some_and(|e| e < pool.len()));
            if candidates == 0 {
                return Err(Error::Contract("distractor pool has no other utterance".into()));
            }
            for &(j, k) in &spans {
                if k == 0 {
                    continue;
                }
                let source = draw_source(rng, pool, exclude, k, cfg.max_resample)?;
                let offset = rng.random_range(0..=source.len() - k);
                d[j..j + k].copy_from_slice(&source[offset..offset + k]);
            }
        }
    }
    let c = compose(x, &d, &m)?;
    Ok(CorruptionRecord { x: x.to_vec(), d, m, c, spans })
}

fn draw_source<'a>(
    rng: &mut Rng,
    pool: &'a [Vec<u32>],
    exclude: Option<usize>,
    k: usize,
    bound: usize,
) -> Result<&'a [u32]> {
    for _ in 0..bound {
        let i = rng.random_range(0..pool.len());
        if Some(i) == exclude {
            continue;
        }
        if pool[i].len() >= k {
            return Ok(&pool[i]);
        }
    }
    Err(Error::Contract(format!("no distractor of length ≥ {k} found after {bound} draws")))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::seeded;

    #[test]
    fn span_counts() {
        assert_eq!(span_count(5), 1);
        assert_eq!(span_count(37), 3);
        assert_eq!(span_count(1), 1);
    }

    #[test]
    fn compose_examples() {
        assert_eq!(compose(&[1, 2, 3, 4], &[9, 9, 9, 9], &[0, 1, 1, 0]).unwrap(), vec![1, 9, 9, 4]);
        assert_eq!(compose(&[1, 2], &[7, 7], &[0, 0]).unwrap(), vec![1, 2]);
        assert!(compose(&[1], &[1, 2], &[0]).is_err());
    }

    #[test]
    fn mask_mode_uses_mask_token() {
        let cfg = SpanSamplerConfig { mode: CorruptionMode::MaskToken, ..Default::default() };
        let mut rng = seeded(4);
        let r = corrupt(&mut rng, &[5, 6, 7, 8], &[], None, &cfg, 64).unwrap();
        for t in 0..4 {
            assert_eq!(r.c[t], if r.m[t] == 1 { 64 } else { r.x[t] });
        }
    }

    #[test]
    fn distractor_needs_another_utterance() {
        let pool = vec![vec![1, 2, 3, 4, 5, 6, 7, 8, 9, 10, 11, 12]];
        let mut rng = seeded(1);
        let cfg = SpanSamplerConfig::default();
        assert!(corrupt(&mut rng, &pool[0], &pool, Some(0), &cfg, 64).is_err());
    }

    #[test]
    fn short_pool_exhausts_resampling() {
        let pool = vec![vec![1], vec![2]];
        let cfg = SpanSamplerConfig { max_resample: 5, ..Default::default() };
        let x: Vec<u32> = (0..40).collect();
        let failed = (0..20).any(|s| corrupt(&mut seeded(s), &x, &pool, None, &cfg, 64).is_err());
        assert!(failed);
    }

    #[test]
    fn distractor_segments_come_from_one_pool_sequence() {
        let pool: Vec<Vec<u32>> = (0..5).map(|u| (0..30).map(|t| 100 * u + t).collect()).collect();
        let cfg = SpanSamplerConfig::default();
        let x = vec![9999u32; 50];
        for s in 0..50 {
            let r = corrupt(&mut seeded(s), &x, &pool, Some(0), &cfg, 64).unwrap();
            for &(j, k) in &r.spans {
                if k == 0 {
                    continue;
                }
                let seg = &r.d[j..j + k];
                if r.spans.iter().filter(|&&(j2, k2)| j2 < j + k && j < j2 + k2).count() == 1 {
                    assert!(seg.windows(2).all(|w| w[1] == w[0] + 1));
                    assert!(seg[0] >= 100);
                }
            }
        }
    }
}
