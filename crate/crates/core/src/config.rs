//! Run configuration: preset values, deep-merged with a JSON file, then flags.

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::corpus::CorpusParams;
use crate::corruption::SpanSamplerConfig;
use crate::error::{Error, Result};
use crate::inference::DetectionConfig;
use crate::io::sha256_hex;
use crate::model::ModelConfig;
use crate::numerics::{Schedule, TrainConfig};
use crate::vq::{TemperatureAnneal, VqConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    Desk,
    Paper,
}

/// Artifact directories, relative to the output root.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Paths {
    pub corpus: String,
    pub checkpoints: String,
    pub units: String,
    pub detect: String,
    pub correct: String,
    pub logs: String,
    pub reports: String,
}

impl Default for Paths {
    fn default() -> Self {
        Paths {
            corpus: "corpus".into(),
            checkpoints: "checkpoints".into(),
            units: "units".into(),
            detect: "detect".into(),
            correct: "correct".into(),
            logs: "logs".into(),
            reports: "reports".into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    /// Utterance shown in the alignment heatmap; the first L2-test utterance
    /// with an error when absent.
    pub heatmap_utterance: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub preset: Preset,
    pub seed: u64,
    pub paths: Paths,
    pub corpus: CorpusParams,
    pub vq: VqConfig,
    pub vq_train: TrainConfig,
    pub model: ModelConfig,
    pub detector_train: TrainConfig,
    pub corrector_train: TrainConfig,
    pub spans: SpanSamplerConfig,
    pub detection: DetectionConfig,
    pub eval: EvalConfig,
}

/// Seed streams per stage.
pub mod stream {
    pub const CORPUS: u64 = 1;
    pub const VQ: u64 = 2;
    pub const DETECTOR: u64 = 3;
    pub const CORRECTOR: u64 = 4;
    pub const HELDOUT: u64 = 5;
}

/// Stage seed derived from the global seed.
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    use rand::RngCore;
    crate::numerics::substream(seed, stream).next_u64()
}

impl RunConfig {
    pub fn preset(preset: Preset, seed: u64) -> Self {
        let corpus = CorpusParams {
            frame_dim: match preset {
                Preset::Desk => 16,
                Preset::Paper => 80,
            },
            l1_train: 2000,
            ..CorpusParams::default()
        };
        let vq = match preset {
            Preset::Desk => VqConfig { anneal: Some(TemperatureAnneal { decay: 0.998, min: 0.3 }), ..VqConfig::desk() },
            Preset::Paper => VqConfig::paper(),
        };
        let model = match preset {
            Preset::Desk => ModelConfig::desk(vq.codebook_size, corpus.inventory_size),
            Preset::Paper => ModelConfig::paper(vq.codebook_size, corpus.inventory_size),
        };
        let warmup = |base_lr: f64, warmup_steps: usize, dim: usize, max_steps: usize| TrainConfig {
            base_lr,
            warmup_steps,
            model_dim_for_schedule: dim,
            max_steps,
            ..TrainConfig::default()
        };
        let (vq_train, detector_train, corrector_steps) = match preset {
            Preset::Desk => (warmup(1.0, 100, vq.hidden_dim, 2000), warmup(0.5, 400, model.dim, 4000), 500),
            Preset::Paper => (warmup(1.0, 4000, vq.hidden_dim, 100_000), warmup(1.0, 4000, model.dim, 100_000), 10_000),
        };
        let corrector_train = TrainConfig {
            base_lr: 1e-4,
            schedule: Schedule::Constant,
            max_steps: corrector_steps,
            ..detector_train.clone()
        };
        let mut cfg = RunConfig {
            preset,
            seed,
            paths: Paths::default(),
            corpus,
            vq: VqConfig { frame_dim: 0, ..vq },
            vq_train,
            model,
            detector_train,
            corrector_train,
            spans: SpanSamplerConfig::default(),
            detection: DetectionConfig::default(),
            eval: EvalConfig { heatmap_utterance: None },
        };
        cfg.derive();
        cfg
    }

    /// Fills values determined by other fields: stage seeds, frame width,
    /// and the model's vocabularies.
    fn derive(&mut self) {
        self.vq.frame_dim = self.corpus.frame_dim;
        self.model.codebook_size = self.vq.codebook_size;
        self.model.phoneme_vocab = self.corpus.inventory_size;
        self.vq_train.seed = derive_seed(self.seed, stream::VQ);
        self.detector_train.seed = derive_seed(self.seed, stream::DETECTOR);
        self.corrector_train.seed = derive_seed(self.seed, stream::CORRECTOR);
    }

    pub fn validate(&self) -> Result<()> {
        self.corpus.validate()?;
        self.vq.validate()?;
        self.model.validate()?;
        self.spans.validate()?;
        self.detection.validate()?;
        for t in [&self.vq_train, &self.detector_train, &self.corrector_train] {
            t.validate()?;
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON of everything except `paths`.
    pub fn digest(&self) -> String {
        let mut v = serde_json::to_value(self).expect("config serializes");
        if let Value::Object(m) = &mut v {
            m.remove("paths");
        }
        sha256_hex(canonical_json(&v).as_bytes())
    }

    pub fn seed_for(&self, stream: u64) -> u64 {
        derive_seed(self.seed, stream)
    }
}

/// JSON with object keys sorted at every level.
pub fn canonical_json(v: &Value) -> String {
    fn sort(v: &Value) -> Value {
        match v {
            Value::Object(m) => {
                let mut keys: Vec<&String> = m.keys().collect();
                keys.sort();
                Value::Object(keys.into_iter().map(|k| (k.clone(), sort(&m[k]))).collect())
            }
            Value::Array(a) => Value::Array(a.iter().map(sort).collect()),
            other => other.clone(),
        }
    }
    serde_json::to_string(&sort(v)).expect("value serializes")
}

/// Recursively overlays `over` onto `base`; non-object values replace.
pub fn deep_merge(base: &mut Value, over: &Value) {
    match (base, over) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(k) {
                    Some(slot) => deep_merge(slot, v),
                    None => {
                        b.insert(k.clone(), v.clone());
                    }
                }
            }
        }
        (slot, v) => *slot = v.clone(),
    }
}

/// Command-line overrides.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub preset: Option<Preset>,
    pub seed: Option<u64>,
}

const DERIVED: [(&str, &str); 6] = [
    ("/vq/frame_dim", "corpus.frame_dim"),
    ("/model/codebook_size", "vq.codebook_size"),
    ("/model/phoneme_vocab", "corpus.inventory_size"),
    ("/vq_train/seed", "the global seed"),
    ("/detector_train/seed", "the global seed"),
    ("/corrector_train/seed", "the global seed"),
];

/// Preset → file → flags, then derived fields, then validation.
pub fn resolve(file: Option<&Value>, flags: &Overrides) -> Result<RunConfig> {
    if let Some(f) = file {
        if !f.is_object() {
            return Err(Error::Config("config file must hold a JSON object".into()));
        }
        for (ptr, source) in DERIVED {
            if f.pointer(ptr).is_some() {
                return Err(Error::Config(format!("`{}` is derived from {source}; remove it", &ptr[1..].replace('/', "."))));
            }
        }
    }
    let file_preset = match file.and_then(|f| f.get("preset")) {
        Some(p) => Some(serde_json::from_value::<Preset>(p.clone()).map_err(|e| Error::Config(format!("preset: {e}")))?),
        None => None,
    };
    let preset = flags.preset.or(file_preset).unwrap_or(Preset::Desk);
    let file_seed = file.and_then(|f| f.get("seed")).and_then(Value::as_u64);
    let seed = flags.seed.or(file_seed).unwrap_or(0);
    let mut v = serde_json::to_value(RunConfig::preset(preset, seed)).expect("preset serializes");
    if let Some(f) = file {
        deep_merge(&mut v, f);
    }
    v["preset"] = serde_json::to_value(preset).expect("preset serializes");
    v["seed"] = Value::from(seed);
    let mut cfg: RunConfig = serde_json::from_value(v).map_err(|e| Error::Config(e.to_string()))?;
    cfg.derive();
    cfg.validate()?;
    Ok(cfg)
}

pub fn load_config_file(path: &Path) -> Result<Value> {
    crate::io::read_json(path).map_err(|e| match e {
        Error::Json(j) => Error::Config(format!("{}: {j}", path.display())),
        other => other,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn presets_validate() {
        for p in [Preset::Desk, Preset::Paper] {
            RunConfig::preset(p, 3).validate().unwrap();
        }
        let paper = RunConfig::preset(Preset::Paper, 0);
        assert_eq!((paper.vq.codebook_size, paper.model.au_vocab()), (512, 513));
    }

    #[test]
    fn file_then_flags() {
        let file = json!({"seed": 5, "vq": {"codebook_size": 32}, "detection": {"threshold": 0.3}});
        let cfg = resolve(Some(&file), &Overrides { seed: Some(9), preset: None }).unwrap();
        assert_eq!(cfg.seed, 9);
        assert_eq!(cfg.model.codebook_size, 32);
        assert_eq!(cfg.detection.threshold, 0.3);
        assert_eq!(cfg.vq.hidden_dim, VqConfig::desk().hidden_dim);
    }

    #[test]
    fn unknown_and_derived_keys_are_rejected() {
        assert!(resolve(Some(&json!({"vq": {"codebok_size": 3}})), &Overrides::default()).is_err());
        assert!(resolve(Some(&json!({"model": {"codebook_size": 3}})), &Overrides::default()).is_err());
        assert!(resolve(Some(&json!({"detection": {"threshold": 1.5}})), &Overrides::default()).is_err());
    }

    #[test]
    fn digest_ignores_paths_and_tracks_values() {
        let a = resolve(None, &Overrides::default()).unwrap();
        let mut b = a.clone();
        b.paths.reports = "elsewhere".into();
        assert_eq!(a.digest(), b.digest());
        let c = resolve(None, &Overrides { seed: Some(1), preset: None }).unwrap();
        assert_ne!(a.digest(), c.digest());
        assert_ne!(a.vq_train.seed, c.vq_train.seed);
    }

    #[test]
    fn canonical_json_sorts_keys() {
        assert_eq!(canonical_json(&json!({"b": 1, "a": {"d": 2, "c": 3}})), r#"{"a":{"c":3,"d":2},"b":1}"#);
    }
}
