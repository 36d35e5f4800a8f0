//! Declarative experiment configuration.
//!
//! Configs are TOML files with one section per concern. Every field has a
//! default except `data`, and unknown keys are rejected. Single values can
//! be overridden with dotted `key=value` pairs, for example
//! `loss.r=4` or `method.sequence=vanilla`.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::clustering::{FeatureSource, Selection, DEFAULT_K_MAX};
use crate::encoder::EncoderDims;
use crate::error::{ensure, Error, Result};
use crate::labels::Provenance;
use crate::losses::{BaseLoss, LossConfig};
use crate::recognizer::{ClassTokenSource, RecognizerDims, SequenceMode};
use crate::synthgen::DomainSpec;

/// Audio contamination applied before training and before evaluation.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NoiseConfig {
    pub train: f64,
    pub test: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub visual_hidden: usize,
    pub audio_hidden: usize,
    pub att_dim: usize,
    pub att_heads: usize,
    pub att_depth: usize,
    /// Learned positions in the attention module.
    pub att_positional: bool,
    pub rec_dim: usize,
    pub rec_heads: usize,
    pub rec_depth: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            visual_hidden: 64,
            audio_hidden: 64,
            att_dim: 64,
            att_heads: 4,
            att_depth: 8,
            att_positional: true,
            rec_dim: 64,
            rec_heads: 4,
            rec_depth: 3,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimConfig {
    pub lr: f64,
    pub momentum: f64,
    /// Global gradient-norm cap; 0 disables clipping.
    pub clip: f64,
    /// Videos per domain per step.
    pub batch_size: usize,
    pub pretrain_epochs: usize,
    pub stage1_epochs: usize,
    pub stage2_epochs: usize,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            lr: 0.01,
            momentum: 0.9,
            clip: 5.0,
            batch_size: 32,
            pretrain_epochs: 50,
            stage1_epochs: 50,
            stage2_epochs: 50,
        }
    }
}

/// Target-domain supervision used in stage one.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PseudoKind {
    #[default]
    Absent,
    Hard,
}

/// Which parts of the method are switched on.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MethodConfig {
    pub attention: bool,
    /// Target-domain pseudo-label loss in stage one.
    pub absent: bool,
    pub balanced: bool,
    pub pseudo_source: Provenance,
    pub pseudo_kind: PseudoKind,
    pub cluster_feature: FeatureSource,
    /// Clusters per class; 0 selects with the elbow rule.
    pub fixed_k: usize,
    pub k_max: usize,
    /// Fine-tune the audio encoder's last layer through the attention module.
    pub finetune_audio: bool,
    pub stage2: bool,
    pub sequence: SequenceMode,
    pub class_token: ClassTokenSource,
    /// Train a second model on an independent visual stream and average.
    pub dual_modality: bool,
    /// Fraction of target videos whose labels are revealed for training.
    pub labeled_target_fraction: f64,
}

impl Default for MethodConfig {
    fn default() -> Self {
        Self {
            attention: true,
            absent: true,
            balanced: true,
            pseudo_source: Provenance::Audio,
            pseudo_kind: PseudoKind::Absent,
            cluster_feature: FeatureSource::Audio,
            fixed_k: 0,
            k_max: DEFAULT_K_MAX,
            finetune_audio: false,
            stage2: true,
            sequence: SequenceMode::AudioToken,
            class_token: ClassTokenSource::SoundVectors,
            dual_modality: false,
            labeled_target_fraction: 0.0,
        }
    }
}

impl MethodConfig {
    /// Plain visual encoder trained on source labels only.
    pub fn visual_only() -> Self {
        Self {
            attention: false,
            absent: false,
            balanced: false,
            stage2: false,
            ..Self::default()
        }
    }

    /// Stage one only, with the given additions.
    pub fn stage1(attention: bool, absent: bool, balanced: bool) -> Self {
        Self {
            attention,
            absent,
            balanced,
            stage2: false,
            ..Self::default()
        }
    }

    pub fn selection(&self) -> Selection {
        if self.fixed_k > 0 {
            Selection::Fixed { k: self.fixed_k }
        } else {
            Selection::Elbow { k_max: self.k_max }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub data: DomainSpec,
    #[serde(default)]
    pub noise: NoiseConfig,
    #[serde(default)]
    pub loss: LossConfig,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub optim: OptimConfig,
    #[serde(default)]
    pub method: MethodConfig,
}

impl ExperimentConfig {
    /// The full method on the default benchmark.
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            data: DomainSpec::shift_heavy(seed),
            noise: NoiseConfig::default(),
            loss: LossConfig::default(),
            model: ModelConfig::default(),
            optim: OptimConfig::default(),
            method: MethodConfig::default(),
        }
    }

    /// A small, fast experiment on [`DomainSpec::tiny`] data.
    pub fn tiny(seed: u64) -> Self {
        Self {
            data: DomainSpec::tiny(seed),
            model: ModelConfig {
                visual_hidden: 8,
                audio_hidden: 8,
                att_dim: 8,
                att_heads: 2,
                att_depth: 1,
                att_positional: true,
                rec_dim: 16,
                rec_heads: 2,
                rec_depth: 1,
            },
            optim: OptimConfig {
                batch_size: 8,
                pretrain_epochs: 5,
                stage1_epochs: 3,
                stage2_epochs: 3,
                ..OptimConfig::default()
            },
            ..Self::new(seed)
        }
    }

    /// Same experiment under another seed; the data seed follows the run
    /// seed.
    pub fn with_seed(&self, seed: u64) -> Self {
        let mut out = self.clone();
        out.seed = seed;
        out.data.seed = seed;
        out
    }

    pub fn validate(&self) -> Result<()> {
        self.data.validate()?;
        self.loss.validate()?;
        self.encoder_dims().validate()?;
        self.recognizer_dims().validate()?;
        ensure!((0.0..=1.0).contains(&self.noise.train), "noise.train must lie in [0, 1]");
        ensure!((0.0..=1.0).contains(&self.noise.test), "noise.test must lie in [0, 1]");
        ensure!(self.optim.lr > 0.0, "optim.lr must be positive");
        ensure!((0.0..1.0).contains(&self.optim.momentum), "optim.momentum must lie in [0, 1)");
        ensure!(self.optim.clip >= 0.0, "optim.clip must be non-negative");
        ensure!(self.optim.batch_size >= 1, "optim.batch_size must be at least 1");
        ensure!(self.method.k_max >= 1, "method.k_max must be at least 1");
        ensure!(
            (0.0..=1.0).contains(&self.method.labeled_target_fraction),
            "method.labeled_target_fraction must lie in [0, 1]"
        );
        ensure!(
            self.loss.r < self.data.num_classes,
            "loss.r must be smaller than the number of classes"
        );
        let want = if self.data.multilabel { BaseLoss::SigmoidCe } else { BaseLoss::SoftmaxCe };
        ensure!(
            self.loss.base == want,
            "loss.base must be {want:?} for {} data",
            if self.data.multilabel { "multi-label" } else { "single-label" }
        );
        Ok(())
    }

    pub fn encoder_dims(&self) -> EncoderDims {
        EncoderDims {
            num_classes: self.data.num_classes,
            clips: self.data.clips,
            visual_dim: self.data.visual_dim,
            audio_dim: self.data.audio_dim,
            visual_hidden: self.model.visual_hidden,
            audio_hidden: self.model.audio_hidden,
            att_dim: self.model.att_dim,
            att_heads: self.model.att_heads,
            att_depth: self.model.att_depth,
        }
    }

    pub fn recognizer_dims(&self) -> RecognizerDims {
        RecognizerDims {
            num_classes: self.data.num_classes,
            clips: self.data.clips,
            visual_hidden: self.model.visual_hidden,
            audio_hidden: self.model.audio_hidden,
            dim: self.model.rec_dim,
            heads: self.model.rec_heads,
            depth: self.model.rec_depth,
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Stable digest of the canonical serialized config.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        hex::encode(&Sha256::digest(json.as_bytes())[..8])
    }

    /// Applies one `dotted.key=value` override.
    pub fn with_override(&self, assignment: &str) -> Result<Self> {
        let (key, raw) = assignment
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override {assignment:?} is not key=value")))?;
        let key = key.trim();
        let raw = raw.trim();
        let mut root = toml::Value::try_from(self).expect("config serializes");
        let mut slot = &mut root;
        for part in key.split('.') {
            slot = slot
                .as_table_mut()
                .and_then(|t| t.get_mut(part))
                .ok_or_else(|| Error::Config(format!("unknown key {key}")))?;
        }
        *slot = parse_like(slot, raw).ok_or_else(|| Error::Config(format!("invalid value {raw:?} for key {key}")))?;
        let cfg: Self = root
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(format!("invalid value {raw:?} for key {key}: {}", e.message())))?;
        Ok(cfg)
    }

    pub fn with_overrides<S: AsRef<str>>(&self, assignments: &[S]) -> Result<Self> {
        assignments
            .iter()
            .try_fold(self.clone(), |cfg, a| cfg.with_override(a.as_ref()))
    }
}

/// Parses `raw` as a value of the same TOML type as `current`.
fn parse_like(current: &toml::Value, raw: &str) -> Option<toml::Value> {
    use toml::Value;
    match current {
        Value::Integer(_) => raw.parse().ok().map(Value::Integer),
        Value::Float(_) => raw.parse().ok().map(Value::Float),
        Value::Boolean(_) => raw.parse().ok().map(Value::Boolean),
        Value::String(_) => Some(Value::String(raw.trim_matches('"').to_string())),
        _ => {
            let doc: toml::Table = format!("v = {raw}").parse().ok()?;
            doc.get("v").cloned()
        }
    }
}
