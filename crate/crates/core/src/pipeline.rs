//! Stage orchestration over an output directory.
//!
//! Every artifact carries the digest of the resolved [`RunConfig`]: the corpus
//! manifest and checkpoint headers embed it, other files get a
//! `<file>.meta.json` sidecar. Stages refuse inputs from a different config.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::config::{stream, RunConfig};
use crate::corpus::{self, encode_frames, load_corpus, Corpus, Frames, Split, Utterance};
use crate::corruption::{corrupt, CorruptionMode, SpanSamplerConfig};
use crate::error::{Error, Result};
use crate::inference::{correct, detect, DetectionRecord};
use crate::io::{file_digest, read_json, read_jsonl, write_atomic, write_json, write_jsonl};
use crate::metrics::{self, mask_auc, prf1, random_baseline_f1, Prf1, RecoveryCounts};
use crate::model::{self, load_model, LoadedModel, ModelLogRow, ModelSink, TrainData};
use crate::numerics::{load_checkpoint, substream, Tensor};
use crate::parallel::par_map;
use crate::svg;
use crate::vq::{self, load_vq, AuSequence, CheckpointSink, VqLogRow};

/// Stage names in execution order.
pub const STAGES: [&str; 9] = [
    "generate",
    "train-vq",
    "encode",
    "train-detector",
    "finetune-corrector",
    "detect",
    "correct",
    "evaluate",
    "report",
];

/// Provenance sidecar for files without an embedded header.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArtifactMeta {
    pub stage: String,
    pub config_digest: String,
    pub seed: u64,
    pub sha256: String,
}

pub fn meta_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".meta.json");
    PathBuf::from(s)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VqSummary {
    pub initial_mse: f64,
    pub final_mse: f64,
    pub steps: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UtteranceDetection {
    pub id: String,
    pub decisions: Vec<u8>,
    pub labels: Vec<u8>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectionReport {
    pub seed: u64,
    pub config_digest: String,
    pub checkpoints: BTreeMap<String, String>,
    pub threshold: f64,
    pub counts: Prf1,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub positive_rate: f64,
    pub decision_rate: f64,
    pub random_baseline_f1: f64,
    pub f1_over_baseline: f64,
    /// Mask-head AUC on corrupted clean renderings of the test utterances.
    pub heldout_mask_auc: Option<f64>,
    /// Fraction of error-free test utterances whose mean `Ê` is below `H`.
    pub clean_below_threshold: Option<f64>,
    pub utterances: Vec<UtteranceDetection>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UtteranceCorrection {
    pub id: String,
    pub has_errors: bool,
    pub masked: usize,
    pub recovered: usize,
    pub mse_corrected: f64,
    pub mse_uncorrected: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorrectionReport {
    pub seed: u64,
    pub config_digest: String,
    pub checkpoints: BTreeMap<String, String>,
    pub au_mask_threshold: f64,
    pub counts: RecoveryCounts,
    pub recovery_rate: Option<f64>,
    pub chance_rate: f64,
    pub recovery_over_chance: Option<f64>,
    pub copy_rate: Option<f64>,
    pub utterances_with_errors: usize,
    /// Among utterances with injected errors, the fraction whose corrected
    /// frames are closer to the clean rendering than the uncorrected decode.
    pub improved_fraction: Option<f64>,
    pub utterances: Vec<UtteranceCorrection>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainingReport {
    pub seed: u64,
    pub config_digest: String,
    pub vq_initial_mse: f64,
    pub vq_final_mse: f64,
    pub vq_mse_ratio: f64,
    pub vq_perplexity_step10: Option<f64>,
    pub vq_perplexity_step500: Option<f64>,
    pub detector_loss_step10: Option<f64>,
    pub detector_loss_step2000: Option<f64>,
    pub detector_loss_final: Option<f64>,
    /// Loss at step 2000 over loss at step 10.
    pub detector_loss_ratio: Option<f64>,
    pub corrector_loss_first: Option<f64>,
    pub corrector_loss_final: Option<f64>,
}

pub struct Pipeline {
    pub cfg: RunConfig,
    pub digest: String,
    pub out: PathBuf,
}

impl Pipeline {
    pub fn new(cfg: RunConfig, out: impl Into<PathBuf>) -> Self {
        let digest = cfg.digest();
        Pipeline { cfg, digest, out: out.into() }
    }

    fn dir(&self, sub: &str) -> PathBuf {
        self.out.join(sub)
    }

    pub fn corpus_dir(&self) -> PathBuf {
        self.dir(&self.cfg.paths.corpus)
    }

    pub fn checkpoint(&self, kind: &str) -> PathBuf {
        self.dir(&self.cfg.paths.checkpoints).join(format!("{kind}.ckpt"))
    }

    pub fn units_file(&self, split: Split) -> PathBuf {
        self.dir(&self.cfg.paths.units).join(format!("{}.jsonl", split.name()))
    }

    pub fn reference_units_file(&self) -> PathBuf {
        self.dir(&self.cfg.paths.units).join(format!("{}.reference.jsonl", Split::L2Test.name()))
    }

    pub fn log_file(&self, name: &str) -> PathBuf {
        self.dir(&self.cfg.paths.logs).join(name)
    }

    pub fn detections_file(&self) -> PathBuf {
        self.dir(&self.cfg.paths.detect).join("detections.jsonl")
    }

    pub fn corrected_units_file(&self) -> PathBuf {
        self.dir(&self.cfg.paths.correct).join("corrected.jsonl")
    }

    pub fn corrected_frames_file(&self) -> PathBuf {
        self.dir(&self.cfg.paths.correct).join("corrected.frames")
    }

    pub fn report_file(&self, name: &str) -> PathBuf {
        self.dir(&self.cfg.paths.reports).join(name)
    }

    pub fn run(&self, stage: &str) -> Result<()> {
        match stage {
            "generate" => self.generate(),
            "train-vq" => self.train_vq(),
            "encode" => self.encode(),
            "train-detector" => self.train_detector(),
            "finetune-corrector" => self.finetune_corrector(),
            "detect" => self.detect(),
            "correct" => self.correct(),
            "evaluate" => self.evaluate(),
            "report" => self.report(),
            other => Err(Error::Config(format!("unknown stage `{other}`"))),
        }
    }

    pub fn run_all(&self) -> Result<()> {
        STAGES.iter().try_for_each(|s| self.run(s))
    }

    // ---- provenance ----

    fn write_meta(&self, path: &Path, stage: &str) -> Result<()> {
        let meta = ArtifactMeta {
            stage: stage.to_string(),
            config_digest: self.digest.clone(),
            seed: self.cfg.seed,
            sha256: file_digest(path)?,
        };
        write_json(&meta_path(path), &meta)
    }

    fn require(&self, path: &Path, run_first: &'static str) -> Result<()> {
        if path.exists() {
            Ok(())
        } else {
            Err(Error::MissingArtifact { path: path.to_path_buf(), run_first })
        }
    }

    fn check_digest(&self, what: &Path, found: &str, run_first: &str) -> Result<()> {
        if found == self.digest {
            Ok(())
        } else {
            Err(Error::Validation(format!(
                "{} was produced under config digest {found}, current config is {}; rerun `{run_first}`",
                what.display(),
                self.digest
            )))
        }
    }

    /// Checks presence, sidecar digest and content hash of a sidecar artifact.
    fn verify(&self, path: &Path, run_first: &'static str) -> Result<()> {
        self.require(path, run_first)?;
        let mp = meta_path(path);
        self.require(&mp, run_first)?;
        let meta: ArtifactMeta = read_json(&mp)?;
        self.check_digest(path, &meta.config_digest, run_first)?;
        if meta.sha256 != file_digest(path)? {
            return Err(Error::Validation(format!("{} was modified after `{run_first}` wrote it", path.display())));
        }
        Ok(())
    }

    fn load_corpus(&self) -> Result<Corpus> {
        let dir = self.corpus_dir();
        self.require(&dir.join(corpus::MANIFEST_FILE), "generate")?;
        let c = load_corpus(&dir)?;
        self.check_digest(&dir.join(corpus::MANIFEST_FILE), &c.manifest.config_digest, "generate")?;
        Ok(c)
    }

    fn load_vq(&self) -> Result<(vq::VqModel, crate::numerics::ParamStore)> {
        let path = self.checkpoint(vq::CHECKPOINT_KIND);
        self.require(&path, "train-vq")?;
        let (m, s, digest) = load_vq(&path)?;
        self.check_digest(&path, &digest, "train-vq")?;
        if m.cfg != self.cfg.vq {
            return Err(Error::Validation(format!("{} holds a different VQ configuration", path.display())));
        }
        Ok((m, s))
    }

    fn load_model(&self, kind: &str, run_first: &'static str) -> Result<LoadedModel> {
        let path = self.checkpoint(kind);
        self.require(&path, run_first)?;
        let m = load_model(&path, kind)?;
        self.check_digest(&path, &m.config_digest, run_first)?;
        if m.model.cfg != self.cfg.model {
            return Err(Error::Validation(format!("{} holds a different model configuration", path.display())));
        }
        Ok(m)
    }

    fn load_units(&self, path: &Path, run_first: &'static str) -> Result<Vec<AuSequence>> {
        self.verify(path, run_first)?;
        read_jsonl(path)
    }

    fn checkpoint_digests(&self, kinds: &[&str]) -> Result<BTreeMap<String, String>> {
        kinds.iter().map(|k| Ok((k.to_string(), file_digest(&self.checkpoint(k))?))).collect()
    }

    // ---- stages ----

    pub fn generate(&self) -> Result<()> {
        corpus::generate_corpus(self.cfg.seed_for(stream::CORPUS), &self.cfg.corpus, &self.digest, &self.corpus_dir())?;
        Ok(())
    }

    pub fn train_vq(&self) -> Result<()> {
        let c = self.load_corpus()?;
        let frames: Vec<Tensor> =
            c.split(Split::L1Train).iter().chain(c.split(Split::L2Train)).map(|u| u.frames.to_tensor()).collect();
        let path = self.checkpoint(vq::CHECKPOINT_KIND);
        let sink = CheckpointSink { path: &path, config_digest: &self.digest };
        let trained = vq::train_vq(&self.cfg.vq, &self.cfg.vq_train, &frames, Some(sink))?;
        let log = self.log_file("vq_train.csv");
        write_atomic(&log, vq_log_csv(&trained.log).as_bytes())?;
        self.write_meta(&log, "train-vq")?;
        let summary = self.log_file("vq_summary.json");
        let s = VqSummary { initial_mse: trained.initial_mse, final_mse: trained.final_mse, steps: trained.log.len() };
        write_json(&summary, &s)?;
        self.write_meta(&summary, "train-vq")
    }

    pub fn encode(&self) -> Result<()> {
        let c = self.load_corpus()?;
        let (m, s) = self.load_vq()?;
        if m.cfg.frame_dim != c.manifest.params.frame_dim {
            return Err(Error::Validation("VQ frame width differs from the corpus".into()));
        }
        for split in Split::ALL {
            let items: Vec<(String, Tensor)> = c.split(split).iter().map(|u| (u.id.clone(), u.frames.to_tensor())).collect();
            let units = m.encode_all(&s, &items)?;
            let path = self.units_file(split);
            write_jsonl(&path, &units)?;
            self.write_meta(&path, "encode")?;
        }
        let items: Vec<(String, Tensor)> = c
            .split(Split::L2Test)
            .iter()
            .map(|u| (u.id.clone(), u.reference.as_ref().expect("L2 reference").to_tensor()))
            .collect();
        let units = m.encode_all(&s, &items)?;
        let path = self.reference_units_file();
        write_jsonl(&path, &units)?;
        self.write_meta(&path, "encode")
    }

    /// L1 training units, their phonemes, and the distractor pool (L1 then L2-train).
    fn training_data(&self) -> Result<(Vec<Vec<u32>>, Vec<Vec<usize>>, Vec<Vec<u32>>)> {
        let c = self.load_corpus()?;
        let l1 = self.load_units(&self.units_file(Split::L1Train), "encode")?;
        let l2 = self.load_units(&self.units_file(Split::L2Train), "encode")?;
        let phonemes = aligned_phonemes(c.split(Split::L1Train), &l1)?;
        let units: Vec<Vec<u32>> = l1.into_iter().map(|a| a.units).collect();
        let mut pool = units.clone();
        pool.extend(l2.into_iter().map(|a| a.units));
        Ok((units, phonemes, pool))
    }

    pub fn train_detector(&self) -> Result<()> {
        let (units, phonemes, pool) = self.training_data()?;
        let data = TrainData { units: &units, phonemes: &phonemes, pool: &pool };
        let path = self.checkpoint(model::DETECTOR_KIND);
        let sink = ModelSink { path: &path, config_digest: &self.digest };
        let t = model::train_detector(&self.cfg.model, &self.cfg.detector_train, &self.cfg.spans, &data, Some(sink))?;
        let log = self.log_file("detector_train.csv");
        write_atomic(&log, model_log_csv(&t.log).as_bytes())?;
        self.write_meta(&log, "train-detector")
    }

    pub fn finetune_corrector(&self) -> Result<()> {
        let det = self.load_model(model::DETECTOR_KIND, "train-detector")?;
        let (units, phonemes, pool) = self.training_data()?;
        let data = TrainData { units: &units, phonemes: &phonemes, pool: &pool };
        let path = self.checkpoint(model::CORRECTOR_KIND);
        let sink = ModelSink { path: &path, config_digest: &self.digest };
        let t = model::finetune_corrector(
            &det.model.cfg,
            &det.store,
            &self.cfg.model,
            &self.cfg.corrector_train,
            &self.cfg.spans,
            &data,
            Some(sink),
        )?;
        let log = self.log_file("corrector_train.csv");
        write_atomic(&log, model_log_csv(&t.log).as_bytes())?;
        self.write_meta(&log, "finetune-corrector")
    }

    pub fn detect(&self) -> Result<()> {
        let det = self.load_model(model::DETECTOR_KIND, "train-detector")?;
        let c = self.load_corpus()?;
        let test = self.load_units(&self.units_file(Split::L2Test), "encode")?;
        let phonemes = aligned_phonemes(c.split(Split::L2Test), &test)?;
        let cfg = &self.cfg.detection;
        let records: Vec<Result<DetectionRecord>> = par_map(&test, |a| {
            let i = test.iter().position(|b| b.id == a.id).expect("own id");
            let d = detect(&det.model, &det.store, &a.units, &phonemes[i], cfg)?;
            for &p in &d.alignment.unattended {
                eprintln!("warning: {} phoneme {p} received no attention; its score is 0", a.id);
            }
            Ok(DetectionRecord {
                id: a.id.clone(),
                e_hat: d.alignment.e_hat,
                decisions: d.alignment.decisions,
                threshold: cfg.threshold,
                mask_probs: d.mask_probs,
            })
        });
        let records = records.into_iter().collect::<Result<Vec<_>>>()?;
        let path = self.detections_file();
        write_jsonl(&path, &records)?;
        self.write_meta(&path, "detect")
    }

    pub fn correct(&self) -> Result<()> {
        let cor = self.load_model(model::CORRECTOR_KIND, "finetune-corrector")?;
        let (vm, vs) = self.load_vq()?;
        let c = self.load_corpus()?;
        let test = self.load_units(&self.units_file(Split::L2Test), "encode")?;
        self.verify(&self.detections_file(), "detect")?;
        let dets: Vec<DetectionRecord> = read_jsonl(&self.detections_file())?;
        let utts = c.split(Split::L2Test);
        let phonemes = aligned_phonemes(utts, &test)?;
        if dets.len() != test.len() || dets.iter().zip(&test).any(|(d, a)| d.id != a.id) {
            return Err(Error::Validation("detections do not match the encoded test split; rerun `detect`".into()));
        }
        let idx: Vec<usize> = (0..test.len()).collect();
        let out: Vec<Result<(AuSequence, Frames)>> = par_map(&idx, |&i| {
            let r = correct(
                &cor.model,
                &cor.store,
                &vm,
                &vs,
                &test[i].units,
                &phonemes[i],
                &dets[i].mask_probs,
                Some(utts[i].frames.len),
                &self.cfg.detection,
            )?;
            Ok((AuSequence { id: test[i].id.clone(), units: r.units }, Frames::from_tensor(&r.frames)))
        });
        let out = out.into_iter().collect::<Result<Vec<_>>>()?;
        let units: Vec<AuSequence> = out.iter().map(|(a, _)| a.clone()).collect();
        let path = self.corrected_units_file();
        write_jsonl(&path, &units)?;
        self.write_meta(&path, "correct")?;
        let frames = self.corrected_frames_file();
        write_atomic(&frames, &encode_frames(out.iter().map(|(a, f)| (&a.id, f))))?;
        self.write_meta(&frames, "correct")
    }

    /// Mask scores and labels on corrupted clean renderings of the test split.
    fn heldout_mask_scores(&self, det: &LoadedModel, c: &Corpus) -> Result<(Vec<f64>, Vec<u8>)> {
        let refs = self.load_units(&self.reference_units_file(), "encode")?;
        let l1 = self.load_units(&self.units_file(Split::L1Train), "encode")?;
        let phonemes = aligned_phonemes(c.split(Split::L2Test), &refs)?;
        let mut pool: Vec<Vec<u32>> = refs.iter().map(|a| a.units.clone()).collect();
        pool.extend(l1.into_iter().map(|a| a.units));
        let spans = SpanSamplerConfig { mode: CorruptionMode::Distractor, ..self.cfg.spans.clone() };
        let seed = self.cfg.seed_for(stream::HELDOUT);
        let idx: Vec<usize> = (0..refs.len()).collect();
        let per: Vec<Result<(Vec<f64>, Vec<u8>)>> = par_map(&idx, |&i| {
            let mut rng = substream(seed, i as u64);
            let rec = corrupt(&mut rng, &refs[i].units, &pool, Some(i), &spans, det.model.cfg.mask_token())?;
            let out = det.model.forward(&det.store, &rec.c, &phonemes[i])?;
            Ok((out.mask_probs, rec.m))
        });
        let (mut scores, mut labels) = (Vec::new(), Vec::new());
        for r in per {
            let (s, l) = r?;
            scores.extend(s);
            labels.extend(l);
        }
        Ok((scores, labels))
    }

    pub fn evaluate(&self) -> Result<()> {
        let c = self.load_corpus()?;
        let (vm, vs) = self.load_vq()?;
        let det = self.load_model(model::DETECTOR_KIND, "train-detector")?;
        self.load_model(model::CORRECTOR_KIND, "finetune-corrector")?;
        self.verify(&self.detections_file(), "detect")?;
        self.verify(&self.corrected_units_file(), "correct")?;
        self.verify(&self.corrected_frames_file(), "correct")?;
        for log in ["vq_train.csv", "vq_summary.json", "detector_train.csv", "corrector_train.csv"] {
            let stage = match log {
                "detector_train.csv" => "train-detector",
                "corrector_train.csv" => "finetune-corrector",
                _ => "train-vq",
            };
            self.verify(&self.log_file(log), stage)?;
        }
        let utts = c.split(Split::L2Test);
        let test = self.load_units(&self.units_file(Split::L2Test), "encode")?;
        let refs = self.load_units(&self.reference_units_file(), "encode")?;
        let dets: Vec<DetectionRecord> = read_jsonl(&self.detections_file())?;
        let corrected: Vec<AuSequence> = read_jsonl(&self.corrected_units_file())?;
        let frames_bytes = std::fs::read(self.corrected_frames_file()).map_err(|e| Error::io(self.corrected_frames_file(), e))?;
        let corrected_frames = corpus::decode_frames(&frames_bytes)?;
        let n = utts.len();
        if [test.len(), refs.len(), dets.len(), corrected.len(), corrected_frames.len()].iter().any(|&k| k != n) {
            return Err(Error::Validation("evaluation inputs disagree on the number of test utterances".into()));
        }
        for i in 0..n {
            let id = &utts[i].id;
            if [&test[i].id, &refs[i].id, &dets[i].id, &corrected[i].id, &corrected_frames[i].0].iter().any(|x| *x != id) {
                return Err(Error::Validation(format!("evaluation inputs disagree on utterance {i} ({id})")));
            }
        }
        let ckpts = self.checkpoint_digests(&[vq::CHECKPOINT_KIND, model::DETECTOR_KIND, model::CORRECTOR_KIND])?;

        // detection
        let labels: Vec<Vec<u8>> = utts.iter().map(|u| u.labels.clone()).collect();
        let decisions: Vec<Vec<u8>> = dets.iter().map(|d| d.decisions.clone()).collect();
        let counts = prf1(&decisions, &labels)?;
        let baseline = random_baseline_f1(counts.positive_rate(), counts.decision_rate());
        let (scores, mask_labels) = self.heldout_mask_scores(&det, &c)?;
        let clean: Vec<bool> = dets
            .iter()
            .zip(utts)
            .filter(|(_, u)| !u.labels.contains(&1))
            .map(|(d, _)| metrics::mean(&d.e_hat) < self.cfg.detection.threshold)
            .collect();
        let report = DetectionReport {
            seed: self.cfg.seed,
            config_digest: self.digest.clone(),
            checkpoints: ckpts.clone(),
            threshold: self.cfg.detection.threshold,
            counts,
            precision: counts.precision,
            recall: counts.recall,
            f1: counts.f1,
            positive_rate: counts.positive_rate(),
            decision_rate: counts.decision_rate(),
            random_baseline_f1: baseline,
            f1_over_baseline: if baseline > 0.0 { counts.f1 / baseline } else { 0.0 },
            heldout_mask_auc: mask_auc(&scores, &mask_labels)?,
            clean_below_threshold: (!clean.is_empty())
                .then(|| clean.iter().filter(|&&b| b).count() as f64 / clean.len() as f64),
            utterances: utts
                .iter()
                .zip(&decisions)
                .map(|(u, d)| UtteranceDetection { id: u.id.clone(), decisions: d.clone(), labels: u.labels.clone() })
                .collect(),
        };
        write_json(&self.report_file("detection.json"), &report)?;
        write_atomic(&self.report_file("detection.csv"), detection_csv(&report).as_bytes())?;

        // correction
        let au_threshold = self.cfg.detection.au_mask_threshold;
        let idx: Vec<usize> = (0..n).collect();
        let per: Vec<Result<(UtteranceCorrection, RecoveryCounts)>> = par_map(&idx, |&i| {
            let masked: Vec<bool> = dets[i].mask_probs.iter().map(|&m| m > au_threshold).collect();
            let rc = metrics::recovery_counts(&corrected[i].units, &refs[i].units, &test[i].units, &masked)?;
            let reference = utts[i].reference.as_ref().expect("L2 reference");
            let uncorrected = Frames::from_tensor(&vm.decode(&vs, &test[i].units, Some(utts[i].frames.len))?);
            let u = UtteranceCorrection {
                id: utts[i].id.clone(),
                has_errors: utts[i].labels.contains(&1),
                masked: rc.masked,
                recovered: rc.recovered,
                mse_corrected: corrected_frames[i].1.mse(reference),
                mse_uncorrected: uncorrected.mse(reference),
            };
            Ok((u, rc))
        });
        let mut total = RecoveryCounts::default();
        let mut rows = Vec::with_capacity(n);
        for r in per {
            let (u, rc) = r?;
            total.add(&rc);
            rows.push(u);
        }
        let with_errors: Vec<&UtteranceCorrection> = rows.iter().filter(|u| u.has_errors).collect();
        let improved = with_errors.iter().filter(|u| u.mse_corrected < u.mse_uncorrected).count();
        let chance = 1.0 / self.cfg.vq.codebook_size as f64;
        let recovery = total.recovery_rate();
        let report = CorrectionReport {
            seed: self.cfg.seed,
            config_digest: self.digest.clone(),
            checkpoints: ckpts,
            au_mask_threshold: au_threshold,
            counts: total,
            recovery_rate: recovery,
            chance_rate: chance,
            recovery_over_chance: recovery.map(|r| r / chance),
            copy_rate: total.copy_rate(),
            utterances_with_errors: with_errors.len(),
            improved_fraction: (!with_errors.is_empty()).then(|| improved as f64 / with_errors.len() as f64),
            utterances: rows,
        };
        write_json(&self.report_file("correction.json"), &report)?;
        write_atomic(&self.report_file("correction.csv"), correction_csv(&report).as_bytes())?;

        // training
        let summary: VqSummary = read_json(&self.log_file("vq_summary.json"))?;
        let vq_log = read_vq_log(&self.log_file("vq_train.csv"))?;
        let det_log = read_model_log(&self.log_file("detector_train.csv"))?;
        let cor_log = read_model_log(&self.log_file("corrector_train.csv"))?;
        let ppl = |s: usize| vq_log.iter().find(|r| r.step == s).map(|r| r.perplexity);
        let loss_at = |log: &[ModelLogRow], s: usize| log.iter().find(|r| r.step == s).map(|r| r.loss);
        let det_first = loss_at(&det_log, 10);
        let det_mid = loss_at(&det_log, 2000);
        let det_last = det_log.last().map(|r| r.loss);
        let report = TrainingReport {
            seed: self.cfg.seed,
            config_digest: self.digest.clone(),
            vq_initial_mse: summary.initial_mse,
            vq_final_mse: summary.final_mse,
            vq_mse_ratio: summary.final_mse / summary.initial_mse,
            vq_perplexity_step10: ppl(10),
            vq_perplexity_step500: ppl(500),
            detector_loss_step10: det_first,
            detector_loss_step2000: det_mid,
            detector_loss_final: det_last,
            detector_loss_ratio: det_first.zip(det_mid).map(|(a, b)| b / a),
            corrector_loss_first: cor_log.first().map(|r| r.loss),
            corrector_loss_final: cor_log.last().map(|r| r.loss),
        };
        write_json(&self.report_file("training.json"), &report)?;
        write_atomic(&self.report_file("training.csv"), training_csv(&report).as_bytes())
    }

    pub fn report(&self) -> Result<()> {
        let det_path = self.report_file("detection.json");
        self.require(&det_path, "evaluate")?;
        let det_report: DetectionReport = read_json(&det_path)?;
        self.check_digest(&det_path, &det_report.config_digest, "evaluate")?;
        let vq_log = read_vq_log(&self.log_file("vq_train.csv"))?;
        let det_log = read_model_log(&self.log_file("detector_train.csv"))?;
        let cor_log = read_model_log(&self.log_file("corrector_train.csv"))?;

        let pts = |f: &dyn Fn(&VqLogRow) -> f64| vq_log.iter().map(|r| (r.step as f64, f(r))).collect::<Vec<_>>();
        let chart = svg::line_chart(
            "VQ training: reconstruction MSE",
            "step",
            "MSE",
            &[svg::Series { name: "batch MSE", points: pts(&|r| r.mse) }],
            true,
        );
        write_atomic(&self.report_file("vq_mse.svg"), chart.as_bytes())?;
        let chart = svg::line_chart(
            "VQ training: codebook perplexity",
            "step",
            "perplexity",
            &[svg::Series { name: "perplexity", points: pts(&|r| r.perplexity) }],
            false,
        );
        write_atomic(&self.report_file("vq_perplexity.svg"), chart.as_bytes())?;
        let series = |log: &[ModelLogRow], f: fn(&ModelLogRow) -> f64| {
            log.iter().map(|r| (r.step as f64, f(r))).collect::<Vec<_>>()
        };
        let chart = svg::line_chart(
            "Detector training loss",
            "step",
            "loss",
            &[
                svg::Series { name: "CE + BCE", points: series(&det_log, |r| r.loss) },
                svg::Series { name: "CE", points: series(&det_log, |r| r.ce) },
                svg::Series { name: "BCE", points: series(&det_log, |r| r.bce) },
            ],
            true,
        );
        write_atomic(&self.report_file("detector_loss.svg"), chart.as_bytes())?;
        let chart = svg::line_chart(
            "Corrector fine-tuning loss",
            "step",
            "CE",
            &[svg::Series { name: "CE", points: series(&cor_log, |r| r.ce) }],
            true,
        );
        write_atomic(&self.report_file("corrector_loss.svg"), chart.as_bytes())?;
        self.alignment_figure()
    }

    fn alignment_figure(&self) -> Result<()> {
        let c = self.load_corpus()?;
        let det = self.load_model(model::DETECTOR_KIND, "train-detector")?;
        let test = self.load_units(&self.units_file(Split::L2Test), "encode")?;
        let utts = c.split(Split::L2Test);
        let pick = match &self.cfg.eval.heatmap_utterance {
            Some(id) => utts
                .iter()
                .position(|u| &u.id == id)
                .ok_or_else(|| Error::Config(format!("heatmap utterance `{id}` is not in the test split")))?,
            None => utts.iter().position(|u| u.labels.contains(&1)).unwrap_or(0),
        };
        let u = &utts[pick];
        let a = test.iter().find(|a| a.id == u.id).ok_or_else(|| Error::Validation(format!("{} not encoded", u.id)))?;
        let d = detect(&det.model, &det.store, &a.units, &u.phonemes, &self.cfg.detection)?;
        let names: Vec<String> = u.phonemes.iter().map(|p| format!("p{p}")).collect();
        let title = format!("{}: cross-attention (last decoder layer) with M̂ and Ê", u.id);
        let figure = svg::alignment_heatmap(&svg::AlignmentPlot {
            title: &title,
            attention: d.alignment.a_avg.data(),
            units: a.units.len(),
            phoneme_names: &names,
            mask_probs: &d.mask_probs,
            e_hat: &d.alignment.e_hat,
            decisions: &d.alignment.decisions,
            labels: &u.labels,
            threshold: self.cfg.detection.threshold,
        });
        write_atomic(&self.report_file("alignment.svg"), figure.as_bytes())
    }
}

/// Phoneme sequences of `utts`, checked against the ids of `units`.
fn aligned_phonemes(utts: &[Utterance], units: &[AuSequence]) -> Result<Vec<Vec<usize>>> {
    if utts.len() != units.len() {
        return Err(Error::Validation(format!("{} units for {} utterances; rerun `encode`", units.len(), utts.len())));
    }
    utts.iter()
        .zip(units)
        .map(|(u, a)| {
            if u.id == a.id {
                Ok(u.phonemes.clone())
            } else {
                Err(Error::Validation(format!("unit file lists {} where the corpus has {}", a.id, u.id)))
            }
        })
        .collect()
}

fn vq_log_csv(log: &[VqLogRow]) -> String {
    let mut s = String::from("step,lr,temperature,loss,mse,diversity,perplexity\n");
    for r in log {
        let _ = writeln!(s, "{},{},{},{},{},{},{}", r.step, r.lr, r.temperature, r.loss, r.mse, r.diversity, r.perplexity);
    }
    s
}

fn model_log_csv(log: &[ModelLogRow]) -> String {
    let mut s = String::from("step,lr,loss,ce,bce\n");
    for r in log {
        let _ = writeln!(s, "{},{},{},{},{}", r.step, r.lr, r.loss, r.ce, r.bce);
    }
    s
}

fn csv_rows(path: &Path, width: usize) -> Result<Vec<Vec<f64>>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .skip(1)
        .filter(|l| !l.is_empty())
        .map(|l| {
            let v: std::result::Result<Vec<f64>, _> = l.split(',').map(str::parse::<f64>).collect();
            match v {
                Ok(v) if v.len() == width => Ok(v),
                _ => Err(Error::Validation(format!("malformed row in {}: {l}", path.display()))),
            }
        })
        .collect()
}

pub fn read_vq_log(path: &Path) -> Result<Vec<VqLogRow>> {
    Ok(csv_rows(path, 7)?
        .into_iter()
        .map(|v| VqLogRow {
            step: v[0] as usize,
            lr: v[1],
            temperature: v[2],
            loss: v[3],
            mse: v[4],
            diversity: v[5],
            perplexity: v[6],
        })
        .collect())
}

pub fn read_model_log(path: &Path) -> Result<Vec<ModelLogRow>> {
    Ok(csv_rows(path, 5)?
        .into_iter()
        .map(|v| ModelLogRow { step: v[0] as usize, lr: v[1], loss: v[2], ce: v[3], bce: v[4] })
        .collect())
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(String::new, |x| x.to_string())
}

fn detection_csv(r: &DetectionReport) -> String {
    let mut s = String::from("id,phonemes,positives,flagged,tp,fp,fn\n");
    for u in &r.utterances {
        let (mut tp, mut fp, mut fn_) = (0, 0, 0);
        for (&d, &l) in u.decisions.iter().zip(&u.labels) {
            match (d, l) {
                (1, 1) => tp += 1,
                (1, _) => fp += 1,
                (_, 1) => fn_ += 1,
                _ => {}
            }
        }
        let pos = u.labels.iter().filter(|&&l| l == 1).count();
        let flagged = u.decisions.iter().filter(|&&d| d == 1).count();
        let _ = writeln!(s, "{},{},{pos},{flagged},{tp},{fp},{fn_}", u.id, u.labels.len());
    }
    let _ = writeln!(
        s,
        "TOTAL,{},{},{},{},{},{}",
        r.counts.total(),
        r.counts.tp + r.counts.fn_,
        r.counts.tp + r.counts.fp,
        r.counts.tp,
        r.counts.fp,
        r.counts.fn_
    );
    s
}

fn correction_csv(r: &CorrectionReport) -> String {
    let mut s = String::from("id,has_errors,masked,recovered,mse_corrected,mse_uncorrected\n");
    for u in &r.utterances {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{}",
            u.id,
            u8::from(u.has_errors),
            u.masked,
            u.recovered,
            u.mse_corrected,
            u.mse_uncorrected
        );
    }
    s
}

fn training_csv(r: &TrainingReport) -> String {
    let mut s = String::from("metric,value\n");
    let rows: [(&str, String); 12] = [
        ("vq_initial_mse", r.vq_initial_mse.to_string()),
        ("vq_final_mse", r.vq_final_mse.to_string()),
        ("vq_mse_ratio", r.vq_mse_ratio.to_string()),
        ("vq_perplexity_step10", opt(r.vq_perplexity_step10)),
        ("vq_perplexity_step500", opt(r.vq_perplexity_step500)),
        ("detector_loss_step10", opt(r.detector_loss_step10)),
        ("detector_loss_step2000", opt(r.detector_loss_step2000)),
        ("detector_loss_final", opt(r.detector_loss_final)),
        ("detector_loss_ratio", opt(r.detector_loss_ratio)),
        ("corrector_loss_first", opt(r.corrector_loss_first)),
        ("corrector_loss_final", opt(r.corrector_loss_final)),
        ("seed", r.seed.to_string()),
    ];
    for (k, v) in rows {
        let _ = writeln!(s, "{k},{v}");
    }
    s
}

/// Checkpoint-file digests keyed by kind, for callers outside a pipeline.
pub fn checkpoint_digest(path: &Path) -> Result<String> {
    load_checkpoint(path)?;
    file_digest(path)
}

