//! Synthetic bilingual corpus with ground-truth mispronunciation labels.
//!
//! Every phoneme owns a unit-norm prototype vector. An utterance renders
//! each phoneme as a run of frames drawn from an isotropic Gaussian around
//! the prototype. L2 utterances may substitute an accented phoneme with a
//! prototype that sits midway between the target and another phoneme; such
//! phonemes carry label 1. Each L2 utterance also keeps its clean L1
//! rendering (same durations, same noise) as a reference.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::seq::IndexedRandom;
use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{read_json, sha256_hex, write_atomic, write_json};
use crate::numerics::{substream, Rng, Tensor};
use crate::parallel::par_map_range;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Split {
    #[serde(rename = "l1-train")]
    L1Train,
    #[serde(rename = "l2-train")]
    L2Train,
    #[serde(rename = "l2-test")]
    L2Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::L1Train, Split::L2Train, Split::L2Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::L1Train => "l1-train",
            Split::L2Train => "l2-train",
            Split::L2Test => "l2-test",
        }
    }

    pub fn is_l2(self) -> bool {
        !matches!(self, Split::L1Train)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhonemeInventory {
    pub size: usize,
    /// `size` true prototypes followed by the substitute prototypes.
    pub prototypes: Vec<Vec<f64>>,
    /// Accented phoneme → substitute prototype id.
    pub accent_map: BTreeMap<usize, usize>,
}

impl PhonemeInventory {
    pub fn validate(&self) -> Result<()> {
        if self.size == 0 || self.prototypes.len() < self.size {
            return Err(Error::Config("phoneme inventory is empty".into()));
        }
        let dim = self.prototypes[0].len();
        if self.prototypes.iter().any(|p| p.len() != dim) {
            return Err(Error::Config("prototype widths differ".into()));
        }
        for (&k, &v) in &self.accent_map {
            if k >= self.size || v >= self.prototypes.len() || k == v {
                return Err(Error::Config(format!("invalid accent mapping {k} → {v}")));
            }
        }
        Ok(())
    }

    pub fn frame_dim(&self) -> usize {
        self.prototypes.first().map_or(0, Vec::len)
    }

    /// Index of the nearest true (non-substitute) prototype.
    pub fn nearest_phoneme(&self, frame: &[f64]) -> usize {
        let d2 = |p: &[f64]| p.iter().zip(frame).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
        (0..self.size)
            .min_by(|&a, &b| d2(&self.prototypes[a]).total_cmp(&d2(&self.prototypes[b])))
            .expect("non-empty inventory")
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusParams {
    pub inventory_size: usize,
    pub frame_dim: usize,
    pub accent_count: usize,
    /// Pairwise distance floor between true prototypes.
    pub min_separation: f64,
    /// Frame noise σ as a fraction of `min_separation`.
    pub noise_fraction: f64,
    pub l1_train: usize,
    pub l2_train: usize,
    pub l2_test: usize,
    pub phonemes_per_utterance: (usize, usize),
    pub frames_per_phoneme: (usize, usize),
    pub l2_error_rate: f64,
}

impl Default for CorpusParams {
    fn default() -> Self {
        CorpusParams {
            inventory_size: 32,
            frame_dim: 16,
            accent_count: 8,
            min_separation: 0.9,
            noise_fraction: 0.1,
            l1_train: 300,
            l2_train: 150,
            l2_test: 60,
            phonemes_per_utterance: (8, 20),
            frames_per_phoneme: (3, 6),
            l2_error_rate: 0.5,
        }
    }
}

impl CorpusParams {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.inventory_size == 0 {
            return bad("empty phoneme inventory".into());
        }
        if self.frame_dim == 0 {
            return bad("frame_dim must be ≥ 1".into());
        }
        if self.accent_count > self.inventory_size {
            return bad(format!("{} accented phonemes exceed inventory of {}", self.accent_count, self.inventory_size));
        }
        let (lo, hi) = self.frames_per_phoneme;
        if lo < 2 || hi > 32 || lo > hi {
            return bad(format!("frames_per_phoneme {lo}..={hi} must lie within [2, 32]"));
        }
        let (lo, hi) = self.phonemes_per_utterance;
        if lo == 0 || lo > hi {
            return bad(format!("phonemes_per_utterance {lo}..={hi} is empty"));
        }
        if !(0.0..=1.0).contains(&self.l2_error_rate) {
            return bad("l2_error_rate must be a probability".into());
        }
        if self.l1_train == 0 || self.l2_train == 0 || self.l2_test == 0 {
            return bad("every split needs at least one utterance".into());
        }
        if !(self.min_separation > 0.0 && self.noise_fraction >= 0.0) {
            return bad("min_separation must be positive and noise_fraction non-negative".into());
        }
        Ok(())
    }

    pub fn sigma(&self) -> f64 {
        self.noise_fraction * self.min_separation
    }

    pub fn count(&self, split: Split) -> usize {
        match split {
            Split::L1Train => self.l1_train,
            Split::L2Train => self.l2_train,
            Split::L2Test => self.l2_test,
        }
    }
}

/// A frame matrix as persisted: `len × dim` row-major `f32`.
#[derive(Clone, Debug, PartialEq)]
pub struct Frames {
    pub len: usize,
    pub dim: usize,
    pub data: Vec<f32>,
}

impl Frames {
    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(vec![self.len, self.dim], self.data.iter().map(|&v| v as f64).collect())
            .expect("len·dim values")
    }

    pub fn from_tensor(t: &Tensor) -> Self {
        Frames { len: t.rows(), dim: t.cols(), data: t.data().iter().map(|&v| v as f32).collect() }
    }

    /// Mean squared difference per element.
    pub fn mse(&self, other: &Frames) -> f64 {
        assert_eq!((self.len, self.dim), (other.len, other.dim), "frame shapes differ");
        let n = self.data.len().max(1) as f64;
        self.data.iter().zip(&other.data).map(|(&a, &b)| (a as f64 - b as f64).powi(2)).sum::<f64>() / n
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Utterance {
    pub id: String,
    pub phonemes: Vec<usize>,
    pub frames: Frames,
    pub labels: Vec<u8>,
    pub frame_spans: Vec<(usize, usize)>,
    /// Clean L1 rendering; present for L2 utterances.
    pub reference: Option<Frames>,
}

pub fn sample_inventory(rng: &mut Rng, params: &CorpusParams) -> Result<PhonemeInventory> {
    const MAX_TRIES: usize = 100_000;
    let dim = params.frame_dim;
    let unit = |rng: &mut Rng| loop {
        let v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-9 {
            break v.into_iter().map(|x| x / n).collect::<Vec<f64>>();
        }
    };
    let dist = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let mut protos: Vec<Vec<f64>> = Vec::with_capacity(params.inventory_size);
    let mut tries = 0;
    while protos.len() < params.inventory_size {
        tries += 1;
        if tries > MAX_TRIES {
            return Err(Error::Config(format!(
                "cannot place {} prototypes in {dim} dims with separation {}",
                params.inventory_size, params.min_separation
            )));
        }
        let c = unit(rng);
        if protos.iter().all(|p| dist(p, &c) > params.min_separation) {
            protos.push(c);
        }
    }
    let mut accented: Vec<usize> = (0..params.inventory_size).collect();
    // partial Fisher-Yates
    for i in 0..params.accent_count {
        let j = rng.random_range(i..accented.len());
        accented.swap(i, j);
    }
    accented.truncate(params.accent_count);
    accented.sort_unstable();
    let mut accent_map = BTreeMap::new();
    let size = params.inventory_size;
    for &p in &accented {
        let mut placed = None;
        for _ in 0..1000 {
            let q = rng.random_range(0..size);
            if q == p {
                continue;
            }
            let mid: Vec<f64> = protos[p].iter().zip(&protos[q]).map(|(a, b)| 0.5 * (a + b)).collect();
            if protos[..size].iter().all(|t| dist(t, &mid) >= 0.5 * params.min_separation - 1e-12) {
                placed = Some(mid);
                break;
            }
        }
        let mid = placed.ok_or_else(|| Error::Config(format!("no substitute placement for phoneme {p}")))?;
        protos.push(mid);
        accent_map.insert(p, protos.len() - 1);
    }
    let inv = PhonemeInventory { size, prototypes: protos, accent_map };
    inv.validate()?;
    Ok(inv)
}

#[allow(clippy::too_many_arguments)]
pub fn generate_utterance(
    rng: &mut Rng,
    id: String,
    inventory: &PhonemeInventory,
    is_l2: bool,
    error_rate: f64,
    len_range: (usize, usize),
    dur_range: (usize, usize),
    sigma: f64,
) -> Result<Utterance> {
    if inventory.size == 0 || inventory.prototypes.is_empty() {
        return Err(Error::Config("empty phoneme inventory".into()));
    }
    if !(0.0..=1.0).contains(&error_rate) {
        return Err(Error::Config(format!("error_rate {error_rate} is not a probability")));
    }
    if dur_range.0 < 2 || dur_range.1 > 32 || dur_range.0 > dur_range.1 {
        return Err(Error::Config(format!("duration range {dur_range:?} outside [2, 32]")));
    }
    let dim = inventory.frame_dim();
    let n = rng.random_range(len_range.0..=len_range.1);
    let mut phonemes = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    let mut spans = Vec::with_capacity(n);
    let mut data = Vec::new();
    let mut reference = Vec::new();
    let mut t = 0;
    for _ in 0..n {
        let p = rng.random_range(0..inventory.size);
        let dur = rng.random_range(dur_range.0..=dur_range.1);
        let substitute = match inventory.accent_map.get(&p) {
            Some(&s) if is_l2 && rng.random_bool(error_rate) => Some(s),
            _ => None,
        };
        let src = substitute.unwrap_or(p);
        for _ in 0..dur {
            for d in 0..dim {
                let noise = sigma * rng.sample::<f64, _>(StandardNormal);
                data.push((inventory.prototypes[src][d] + noise) as f32);
                if is_l2 {
                    reference.push((inventory.prototypes[p][d] + noise) as f32);
                }
            }
        }
        phonemes.push(p);
        labels.push(u8::from(substitute.is_some()));
        spans.push((t, t + dur));
        t += dur;
    }
    Ok(Utterance {
        id,
        phonemes,
        frames: Frames { len: t, dim, data },
        labels,
        frame_spans: spans,
        reference: is_l2.then_some(Frames { len: t, dim, data: reference }),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UtteranceMeta {
    pub id: String,
    pub split: Split,
    pub phonemes: Vec<usize>,
    pub labels: Vec<u8>,
    pub frame_spans: Vec<(usize, usize)>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusManifest {
    pub seed: u64,
    pub params: CorpusParams,
    pub inventory: PhonemeInventory,
    pub splits: BTreeMap<Split, Vec<String>>,
    pub utterances: Vec<UtteranceMeta>,
    /// SHA-256 of every binary frame file, keyed by file name.
    pub frame_files: BTreeMap<String, String>,
    pub config_digest: String,
}

#[derive(Clone, Debug)]
pub struct Corpus {
    pub manifest: CorpusManifest,
    pub utterances: BTreeMap<Split, Vec<Utterance>>,
}

impl Corpus {
    pub fn split(&self, split: Split) -> &[Utterance] {
        self.utterances.get(&split).map_or(&[], Vec::as_slice)
    }

    pub fn inventory(&self) -> &PhonemeInventory {
        &self.manifest.inventory
    }
}

/// Builds the whole corpus in memory; a pure function of `(seed, params)`.
pub fn build_corpus(seed: u64, params: &CorpusParams, config_digest: &str) -> Result<Corpus> {
    params.validate()?;
    let inventory = sample_inventory(&mut substream(seed, 0), params)?;
    let sigma = params.sigma();
    let mut utterances = BTreeMap::new();
    let mut splits = BTreeMap::new();
    let mut metas = Vec::new();
    let mut offset = 1u64;
    for split in Split::ALL {
        let count = params.count(split);
        let base = offset;
        let generated: Vec<Result<Utterance>> = par_map_range(count, |i| {
            let mut rng = substream(seed, base + i as u64);
            let error_rate = if split.is_l2() { params.l2_error_rate } else { 0.0 };
            generate_utterance(
                &mut rng,
                format!("{}-{i:04}", split.name()),
                &inventory,
                split.is_l2(),
                error_rate,
                params.phonemes_per_utterance,
                params.frames_per_phoneme,
                sigma,
            )
        });
        let generated = generated.into_iter().collect::<Result<Vec<_>>>()?;
        offset += count as u64;
        splits.insert(split, generated.iter().map(|u| u.id.clone()).collect());
        metas.extend(generated.iter().map(|u| UtteranceMeta {
            id: u.id.clone(),
            split,
            phonemes: u.phonemes.clone(),
            labels: u.labels.clone(),
            frame_spans: u.frame_spans.clone(),
        }));
        utterances.insert(split, generated);
    }
    let mut frame_files = BTreeMap::new();
    for (split, utts) in &utterances {
        frame_files.insert(frame_file_name(*split, false), sha256_hex(&encode_frames(utts.iter().map(|u| (&u.id, &u.frames)))));
        if split.is_l2() {
            let refs = utts.iter().map(|u| (&u.id, u.reference.as_ref().expect("L2 reference")));
            frame_files.insert(frame_file_name(*split, true), sha256_hex(&encode_frames(refs)));
        }
    }
    let manifest = CorpusManifest {
        seed,
        params: params.clone(),
        inventory,
        splits,
        utterances: metas,
        frame_files,
        config_digest: config_digest.to_string(),
    };
    Ok(Corpus { manifest, utterances })
}

pub fn frame_file_name(split: Split, reference: bool) -> String {
    if reference {
        format!("{}.reference.frames", split.name())
    } else {
        format!("{}.frames", split.name())
    }
}

pub const MANIFEST_FILE: &str = "manifest.json";

/// Persists manifest and frame files. Returns the manifest path.
pub fn write_corpus(corpus: &Corpus, dir: &Path) -> Result<std::path::PathBuf> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (split, utts) in &corpus.utterances {
        write_atomic(&dir.join(frame_file_name(*split, false)), &encode_frames(utts.iter().map(|u| (&u.id, &u.frames))))?;
        if split.is_l2() {
            let refs = utts.iter().map(|u| (&u.id, u.reference.as_ref().expect("L2 reference")));
            write_atomic(&dir.join(frame_file_name(*split, true)), &encode_frames(refs))?;
        }
    }
    let path = dir.join(MANIFEST_FILE);
    write_json(&path, &corpus.manifest)?;
    Ok(path)
}

/// Generates and persists the corpus in one call.
pub fn generate_corpus(seed: u64, params: &CorpusParams, config_digest: &str, dir: &Path) -> Result<Corpus> {
    let corpus = build_corpus(seed, params, config_digest)?;
    write_corpus(&corpus, dir)?;
    Ok(corpus)
}

pub fn load_corpus(dir: &Path) -> Result<Corpus> {
    let manifest: CorpusManifest = read_json(&dir.join(MANIFEST_FILE))?;
    let by_id: BTreeMap<&str, &UtteranceMeta> = manifest.utterances.iter().map(|m| (m.id.as_str(), m)).collect();
    let mut utterances = BTreeMap::new();
    for split in Split::ALL {
        let read = |reference: bool| -> Result<Vec<(String, Frames)>> {
            let path = dir.join(frame_file_name(split, reference));
            let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
            let name = frame_file_name(split, reference);
            if manifest.frame_files.get(&name).is_some_and(|d| *d != sha256_hex(&bytes)) {
                return Err(Error::Validation(format!("{name} does not match the manifest digest")));
            }
            decode_frames(&bytes)
        };
        let frames = read(false)?;
        let refs = if split.is_l2() { Some(read(true)?) } else { None };
        let mut utts = Vec::with_capacity(frames.len());
        for (i, (id, f)) in frames.into_iter().enumerate() {
            let meta = by_id
                .get(id.as_str())
                .ok_or_else(|| Error::Validation(format!("frame record {id} missing from manifest")))?;
            let reference = match &refs {
                Some(r) if r.get(i).map(|(rid, _)| rid == &id) == Some(true) => Some(r[i].1.clone()),
                Some(_) => return Err(Error::Validation(format!("reference frames out of order at {id}"))),
                None => None,
            };
            utts.push(Utterance {
                id,
                phonemes: meta.phonemes.clone(),
                frames: f,
                labels: meta.labels.clone(),
                frame_spans: meta.frame_spans.clone(),
                reference,
            });
        }
        utterances.insert(split, utts);
    }
    Ok(Corpus { manifest, utterances })
}

/// Binary frame records: `u32` id length, id bytes, `u32` frame count,
/// `u32` width, then row-major `f32`; all little-endian.
pub fn encode_frames<'a>(records: impl Iterator<Item = (&'a String, &'a Frames)>) -> Vec<u8> {
    let mut out = Vec::new();
    for (id, f) in records {
        out.extend_from_slice(&(id.len() as u32).to_le_bytes());
        out.extend_from_slice(id.as_bytes());
        out.extend_from_slice(&(f.len as u32).to_le_bytes());
        out.extend_from_slice(&(f.dim as u32).to_le_bytes());
        for v in &f.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn decode_frames(bytes: &[u8]) -> Result<Vec<(String, Frames)>> {
    struct Cursor<'a> {
        bytes: &'a [u8],
        pos: usize,
    }
    impl<'a> Cursor<'a> {
        fn take(&mut self, n: usize) -> Result<&'a [u8]> {
            let s = self
                .bytes
                .get(self.pos..self.pos + n)
                .ok_or_else(|| Error::Validation("truncated frame file".into()))?;
            self.pos += n;
            Ok(s)
        }
        fn u32(&mut self) -> Result<usize> {
            Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")) as usize)
        }
    }
    let mut cur = Cursor { bytes, pos: 0 };
    let mut out = Vec::new();
    while cur.pos < bytes.len() {
        let idlen = cur.u32()?;
        let id = String::from_utf8(cur.take(idlen)?.to_vec())
            .map_err(|_| Error::Validation("frame id is not UTF-8".into()))?;
        let len = cur.u32()?;
        let dim = cur.u32()?;
        let raw = cur.take(len * dim * 4)?;
        let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
        out.push((id, Frames { len, dim, data }));
    }
    Ok(out)
}

/// Draws one phoneme id uniformly; shared by tests that need the usage law.
pub fn random_phoneme(rng: &mut Rng, inventory: &PhonemeInventory) -> usize {
    let ids: Vec<usize> = (0..inventory.size).collect();
    *ids.choose(rng).expect("non-empty inventory")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::seeded;

    fn small() -> CorpusParams {
        CorpusParams { l1_train: 6, l2_train: 4, l2_test: 3, ..CorpusParams::default() }
    }

    fn inventory() -> PhonemeInventory {
        sample_inventory(&mut seeded(1), &CorpusParams::default()).unwrap()
    }

    #[test]
    fn l1_and_zero_rate_have_no_errors() {
        let inv = inventory();
        let mut rng = seeded(2);
        for _ in 0..50 {
            let u = generate_utterance(&mut rng, "x".into(), &inv, false, 1.0, (8, 20), (3, 6), 0.09).unwrap();
            assert!(u.labels.iter().all(|&l| l == 0));
            assert!(u.reference.is_none());
            let u = generate_utterance(&mut rng, "y".into(), &inv, true, 0.0, (8, 20), (3, 6), 0.09).unwrap();
            assert!(u.labels.iter().all(|&l| l == 0));
            assert_eq!(u.reference.as_ref(), Some(&u.frames));
        }
    }

    #[test]
    fn spans_tile_frames() {
        let inv = inventory();
        let mut rng = seeded(3);
        for _ in 0..50 {
            let u = generate_utterance(&mut rng, "x".into(), &inv, true, 0.5, (1, 12), (2, 32), 0.09).unwrap();
            let mut t = 0;
            for &(s, e) in &u.frame_spans {
                assert_eq!(s, t);
                assert!(e > s);
                t = e;
            }
            assert_eq!(t, u.frames.len);
            assert_eq!(u.frame_spans.len(), u.phonemes.len());
        }
    }

    #[test]
    fn labels_mark_exactly_the_substituted_frames() {
        let inv = inventory();
        let mut rng = seeded(4);
        for _ in 0..30 {
            let u = generate_utterance(&mut rng, "x".into(), &inv, true, 0.7, (8, 20), (3, 6), 0.09).unwrap();
            let r = u.reference.as_ref().unwrap();
            for (i, &(s, e)) in u.frame_spans.iter().enumerate() {
                let differs = (s..e).any(|t| u.frames.row(t) != r.row(t));
                assert_eq!(differs, u.labels[i] == 1, "phoneme {i}");
                if u.labels[i] == 1 {
                    assert!(inv.accent_map.contains_key(&u.phonemes[i]));
                }
            }
        }
    }

    #[test]
    fn inventory_invariants() {
        let inv = inventory();
        inv.validate().unwrap();
        assert_eq!(inv.accent_map.len(), 8);
        assert_eq!(inv.prototypes.len(), 40);
        for p in &inv.prototypes[..32] {
            assert!((p.iter().map(|x| x * x).sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn rejects_bad_configuration() {
        let inv = PhonemeInventory { size: 0, prototypes: vec![], accent_map: BTreeMap::new() };
        let mut rng = seeded(0);
        assert!(matches!(
            generate_utterance(&mut rng, "x".into(), &inv, false, 0.0, (1, 2), (2, 3), 0.1),
            Err(Error::Config(_))
        ));
        let inv = inventory();
        assert!(generate_utterance(&mut rng, "x".into(), &inv, false, 0.0, (1, 2), (1, 3), 0.1).is_err());
        assert!(CorpusParams { frames_per_phoneme: (2, 33), ..small() }.validate().is_err());
    }

    #[test]
    fn frame_codec_layout() {
        let f = Frames { len: 2, dim: 1, data: vec![1.0, -0.5] };
        let id = "ab".to_string();
        let bytes = encode_frames(std::iter::once((&id, &f)));
        assert_eq!(bytes.len(), 4 + 2 + 4 + 4 + 8);
        assert_eq!(&bytes[..4], &2u32.to_le_bytes());
        assert_eq!(&bytes[6..10], &2u32.to_le_bytes());
        assert_eq!(&bytes[14..18], &1.0f32.to_le_bytes());
        assert_eq!(decode_frames(&bytes).unwrap(), vec![(id, f)]);
    }

    #[test]
    fn corpus_round_trips_through_disk() {
        let dir = tempfile::tempdir().unwrap();
        let c = generate_corpus(5, &small(), "d", dir.path()).unwrap();
        let back = load_corpus(dir.path()).unwrap();
        assert_eq!(back.manifest, c.manifest);
        for s in Split::ALL {
            assert_eq!(back.split(s), c.split(s));
        }
    }
}
