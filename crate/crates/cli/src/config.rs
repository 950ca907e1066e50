//! Experiment configuration: one JSON document with a profile switch.
//!
//! Missing fields are filled from the profile defaults before parsing, so a
//! config only needs to mention what it changes.

use std::fmt::Write;
use std::path::{Path, PathBuf};

use migs_core::discriminators::DiscriminatorConfig;
use migs_core::eval::PrdConfig;
use migs_core::generators::GeneratorConfig;
use migs_core::graphnet::GcnConfig;
use migs_core::losses::{AuxTarget, LossWeights};
use migs_core::meta::{InnerConfig, OuterConfig};
use migs_core::model::{DecoderKind, ModelConfig, Profile};
use migs_core::synthdata::DatasetConfig;
use migs_core::{MigsError, Result};
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub decoder: DecoderKind,
    pub gcn: GcnConfig,
    pub generator: GeneratorConfig,
    pub discriminator: DiscriminatorConfig,
    pub aux_target: AuxTarget,
    pub teacher_forcing: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    Fid,
    Kid,
    Prd,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSection {
    pub shots: Vec<usize>,
    pub finetune_steps: usize,
    /// Metric families shown in the comparison table.
    pub metrics: Vec<Metric>,
    pub prd: PrdConfig,
}

/// Joint training budget. Unset fields match the meta-training budget:
/// `outer.iterations × inner.k × outer.tasks_per_step` steps, one curve row
/// per `inner.k × outer.tasks_per_step` steps.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BaselineSection {
    pub steps: Option<u64>,
    pub report_every: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub profile: Profile,
    pub seed: u64,
    pub output_dir: PathBuf,
    pub dataset: DatasetConfig,
    pub model: ModelSection,
    pub loss_weights: LossWeights,
    pub inner: InnerConfig,
    pub outer: OuterConfig,
    pub baseline: BaselineSection,
    pub eval: EvalSection,
}

impl ExperimentConfig {
    /// Complete configuration for a profile and decoder.
    pub fn defaults(profile: Profile, decoder: DecoderKind) -> Self {
        let m = ModelConfig::for_profile(profile, decoder);
        let (dataset, iterations, shots) = match profile {
            Profile::Desk => (
                DatasetConfig {
                    image_height: 32,
                    image_width: 32,
                    ..DatasetConfig::default()
                },
                2000,
                vec![5, 10],
            ),
            Profile::Paper => (
                DatasetConfig {
                    scenes_per_task: 224,
                    test_scenes_per_task: 64,
                    max_shots: 160,
                    image_height: 64,
                    image_width: 64,
                    ..DatasetConfig::default()
                },
                30_000,
                vec![5, 10, 160],
            ),
        };
        let mut cfg = Self {
            profile,
            seed: 0,
            output_dir: PathBuf::from("runs"),
            dataset,
            model: ModelSection {
                decoder,
                gcn: m.gcn,
                generator: m.generator,
                discriminator: m.discriminator,
                aux_target: m.aux_target,
                teacher_forcing: m.teacher_forcing,
            },
            loss_weights: m.weights,
            inner: InnerConfig::default(),
            outer: OuterConfig {
                iterations,
                ..OuterConfig::default()
            },
            baseline: BaselineSection::default(),
            eval: EvalSection {
                shots,
                finetune_steps: 100,
                metrics: vec![Metric::Fid, Metric::Kid, Metric::Prd],
                prd: PrdConfig::default(),
            },
        };
        cfg.fill_budget();
        cfg
    }

    fn fill_budget(&mut self) {
        let per_row = (self.inner.k as u64 * self.outer.tasks_per_step as u64).max(1);
        self.baseline
            .steps
            .get_or_insert(self.outer.iterations * per_row);
        self.baseline.report_every.get_or_insert(per_row);
    }

    /// Parse a config document, filling unspecified fields from the
    /// defaults of its profile and decoder.
    pub fn from_json(text: &str) -> Result<Self> {
        let user: Value = serde_json::from_str(text).map_err(|e| MigsError::Parse {
            line: e.line(),
            column: e.column(),
            message: e.to_string(),
        })?;
        if !user.is_object() {
            return Err(MigsError::Config("config must be a JSON object".into()));
        }
        let pick = |v: Option<&Value>, what: &str| -> Result<Option<Value>> {
            match v {
                None => Ok(None),
                Some(v) if v.is_string() => Ok(Some(v.clone())),
                Some(_) => Err(MigsError::Config(format!("{what} must be a string"))),
            }
        };
        let profile: Profile = match pick(user.get("profile"), "profile")? {
            Some(v) => {
                serde_json::from_value(v).map_err(|e| MigsError::Config(format!("profile: {e}")))?
            }
            None => Profile::default(),
        };
        let decoder: DecoderKind = match pick(user.pointer("/model/decoder"), "model.decoder")? {
            Some(v) => serde_json::from_value(v)
                .map_err(|e| MigsError::Config(format!("model.decoder: {e}")))?,
            None => DecoderKind::default(),
        };
        let mut base = Self::defaults(profile, decoder);
        // Derived budget fields are recomputed after the merge unless set.
        base.baseline = BaselineSection::default();
        let mut merged = serde_json::to_value(&base).expect("config serialises");
        merge(&mut merged, user);
        let mut cfg: Self = serde_json::from_value(merged)
            .map_err(|e| MigsError::Config(format!("invalid config: {e}")))?;
        cfg.fill_budget();
        cfg.validate()?;
        Ok(cfg)
    }

    /// Read and parse a config file. A missing or unreadable file is a
    /// configuration error naming the path.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            MigsError::Config(format!("cannot read config {}: {e}", path.display()))
        })?;
        Self::from_json(&text).map_err(|e| MigsError::Config(format!("{}: {e}", path.display())))
    }

    pub fn validate(&self) -> Result<()> {
        self.dataset.validate()?;
        if self.model.decoder != self.model_config().decoder_kind() {
            return Err(MigsError::Config(format!(
                "model.decoder is {} but model.generator is {}",
                self.model.decoder.name(),
                self.model_config().decoder_kind().name()
            )));
        }
        self.model_config()
            .validate(self.dataset.image_height, self.dataset.image_width)?;
        self.inner.validate()?;
        self.outer.validate()?;
        let pool = self.dataset.scenes_per_task - self.dataset.test_scenes_per_task;
        if self.eval.shots.is_empty() {
            return Err(MigsError::Config("eval.shots is empty".into()));
        }
        for &s in &self.eval.shots {
            if s == 0 || s > pool {
                return Err(MigsError::Config(format!(
                    "shot count {s} outside 1..={pool} (fine-tuning pool per task)"
                )));
            }
        }
        if self.eval.metrics.is_empty() {
            return Err(MigsError::Config("eval.metrics is empty".into()));
        }
        if self.dataset.test_scenes_per_task < 2 {
            return Err(MigsError::Config(
                "need at least 2 test scenes per task for KID".into(),
            ));
        }
        if self.eval.prd.num_clusters == 0 || self.eval.prd.num_angles < 2 {
            return Err(MigsError::Config(
                "eval.prd needs clusters ≥ 1 and angles ≥ 2".into(),
            ));
        }
        Ok(())
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            gcn: self.model.gcn.clone(),
            generator: self.model.generator.clone(),
            discriminator: self.model.discriminator.clone(),
            weights: self.loss_weights,
            aux_target: self.model.aux_target,
            teacher_forcing: self.model.teacher_forcing,
        }
    }

    pub fn baseline_steps(&self) -> u64 {
        self.baseline.steps.unwrap_or(0)
    }

    pub fn baseline_report_every(&self) -> u64 {
        self.baseline.report_every.unwrap_or(1).max(1)
    }

    /// The stored form: pretty JSON with a trailing newline.
    pub fn canonical_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("config serialises");
        s.push('\n');
        s
    }

    /// SHA-256 of [`ExperimentConfig::canonical_json`].
    pub fn hash(&self) -> [u8; 32] {
        Sha256::digest(self.canonical_json().as_bytes()).into()
    }

    pub fn hash_hex(&self) -> String {
        hex(&self.hash())
    }
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().fold(String::new(), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    })
}

/// Recursive object merge; non-object values in `patch` replace `base`.
fn merge(base: &mut Value, patch: Value) {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                match b.get_mut(&k) {
                    Some(slot) if slot.is_object() && v.is_object() => merge(slot, v),
                    _ => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (b, p) => *b = p,
    }
}
