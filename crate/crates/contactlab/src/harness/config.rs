//! Experiment configuration: JSON schema with strict validation. Unknown
//! keys are rejected everywhere; every field is range-checked at load.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::encoder::EncoderConfig;
use crate::error::{ContactError, Result};
use crate::fusion::FusionMode;
use crate::losses::{LossWeights, DEFAULT_BETA, DEFAULT_EPSILON};
use crate::meshmetrics::NUM_PARTS;
use crate::ssl::{CenterMode, DEFAULT_SINKHORN_ITERS, DEFAULT_STUDENT_TEMP, DEFAULT_TEACHER_TEMP};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LoraSettings {
    pub enabled: bool,
    pub rank: usize,
    pub alpha: f64,
}

impl Default for LoraSettings {
    fn default() -> Self {
        LoraSettings {
            enabled: true,
            rank: 4,
            alpha: 8.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PoolingMode {
    Attention,
    Mean,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FusionAttentionSettings {
    /// Softmax scaling factor; `None` uses the (per-head) token dimension.
    pub scale: Option<f64>,
    pub heads: usize,
}

impl Default for FusionAttentionSettings {
    fn default() -> Self {
        FusionAttentionSettings {
            scale: None,
            heads: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PhiSettings {
    pub enabled: bool,
    pub beta: f64,
    pub epsilon: f64,
    /// Rescale target for the weight mean; `None` recomputes the
    /// negative-to-positive vertex ratio from the training split.
    pub target_mean: Option<f64>,
    /// Clip threshold as a multiple of the target mean. Kept tight by
    /// default: vertices that are never positive carry the 1/epsilon raw
    /// weight, and with a loose clip they dominate the rescale mean and
    /// drive every observed vertex's weight toward zero.
    pub clip_factor: f64,
}

impl Default for PhiSettings {
    fn default() -> Self {
        PhiSettings {
            enabled: true,
            beta: DEFAULT_BETA,
            epsilon: DEFAULT_EPSILON,
            target_mean: None,
            clip_factor: 2.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossSettings {
    pub weights: LossWeights,
    /// Weight of the semantic cross-entropy added to the composite.
    pub w_semantic: f64,
    pub phi: PhiSettings,
}

impl Default for LossSettings {
    fn default() -> Self {
        LossSettings {
            weights: LossWeights::default(),
            w_semantic: 1.0,
            phi: PhiSettings::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerConfig {
    pub learning_rate: f64,
    /// Linear learning-rate ramp over the first `warmup_steps` steps.
    pub warmup_steps: usize,
    /// Fraction of the base rate reached at the final step by linear decay
    /// after warmup; 1.0 disables decay.
    pub final_lr_fraction: f64,
    /// Global-norm gradient clip; `None` disables clipping.
    pub grad_clip: Option<f64>,
    pub momentum: f64,
    pub steps: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            learning_rate: 0.07,
            warmup_steps: 100,
            final_lr_fraction: 0.05,
            grad_clip: Some(1.0),
            momentum: 0.9,
            steps: 2000,
            batch_size: 8,
            seed: 0,
        }
    }
}

/// Per-part contact rate plan for the synthetic generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "preset", rename_all = "snake_case", deny_unknown_fields)]
pub enum PlanConfig {
    /// Feet heavily contacted, hands moderately, everything else rare.
    FeetDominant,
    /// Feet at `common_rate`, every other part at `rare_rate`.
    RareCommon { rare_rate: f64, common_rate: f64 },
    /// Explicit per-part rates, 24 entries.
    Explicit { rates: Vec<f64> },
}

impl Default for PlanConfig {
    fn default() -> Self {
        PlanConfig::FeetDominant
    }
}

/// Part ids treated as feet by the presets (leftFoot, rightFoot).
pub const FEET_PARTS: [usize; 2] = [7, 8];
/// Part ids treated as hands by the feet-dominant preset.
pub const HAND_PARTS: [usize; 2] = [20, 21];

impl PlanConfig {
    pub fn rates(&self) -> Result<Vec<f64>> {
        let rates = match self {
            PlanConfig::FeetDominant => {
                let mut r = vec![0.05; NUM_PARTS];
                for p in FEET_PARTS {
                    r[p] = 0.8;
                }
                for p in HAND_PARTS {
                    r[p] = 0.3;
                }
                r
            }
            PlanConfig::RareCommon { rare_rate, common_rate } => {
                let mut r = vec![*rare_rate; NUM_PARTS];
                for p in FEET_PARTS {
                    r[p] = *common_rate;
                }
                r
            }
            PlanConfig::Explicit { rates } => rates.clone(),
        };
        if rates.len() != NUM_PARTS {
            return Err(ContactError::Config(format!(
                "plan needs {NUM_PARTS} rates, got {}",
                rates.len()
            )));
        }
        if let Some(r) = rates.iter().find(|r| !(0.0..=1.0).contains(*r)) {
            return Err(ContactError::Config(format!("contact rate {r} outside [0,1]")));
        }
        Ok(rates)
    }

    /// Parts whose plan rate is at most the threshold; used for rare-part
    /// recall readouts.
    pub fn rare_parts(&self, threshold: f64) -> Result<Vec<usize>> {
        Ok(self
            .rates()?
            .iter()
            .enumerate()
            .filter(|(_, r)| **r > 0.0 && **r <= threshold)
            .map(|(p, _)| p)
            .collect())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetConfig {
    Synthetic {
        n: usize,
        /// Icosphere refinement rounds; vertex count must match `vertices`.
        subdivisions: usize,
        #[serde(default)]
        plan: PlanConfig,
    },
    Files {
        samples: PathBuf,
        mesh: PathBuf,
    },
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig::Synthetic {
            n: 50,
            subdivisions: 3,
            plan: PlanConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SslPretrainConfig {
    pub steps: usize,
    pub prototypes: usize,
    pub mask_ratio: f64,
    pub momentum: f64,
    pub center_momentum: f64,
    pub student_temp: f64,
    pub teacher_temp: f64,
    pub center_mode: CenterMode,
    pub sinkhorn_iters: usize,
    pub learning_rate: f64,
}

impl Default for SslPretrainConfig {
    fn default() -> Self {
        SslPretrainConfig {
            steps: 100,
            prototypes: 16,
            mask_ratio: 0.4,
            momentum: 0.99,
            center_momentum: 0.9,
            student_temp: DEFAULT_STUDENT_TEMP,
            teacher_temp: DEFAULT_TEACHER_TEMP,
            center_mode: CenterMode::MovingAverage,
            sinkhorn_iters: DEFAULT_SINKHORN_ITERS,
            learning_rate: 0.07,
        }
    }
}

/// Top-level experiment description.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub encoder: EncoderConfig,
    pub lora: LoraSettings,
    pub fusion_mode: FusionMode,
    pub pooling: PoolingMode,
    pub attention: FusionAttentionSettings,
    pub loss: LossSettings,
    pub vertices: usize,
    pub semantic_classes: usize,
    pub scene_classes: usize,
    /// Contact-head hidden width; `None` derives 256 for full-size meshes and
    /// 64 otherwise.
    pub contact_hidden: Option<usize>,
    pub vertex_feature_dim: usize,
    pub semantic_hidden: usize,
    pub optimizer: OptimizerConfig,
    pub dataset: DatasetConfig,
    pub ssl_pretrain: Option<SslPretrainConfig>,
    /// Channel-zeroing probe on the scene branch at evaluation time: keep
    /// this many channels before cross-attention.
    pub zero_out_keep: Option<usize>,
    pub eval_threshold: f64,
    /// Resolution of the 2D anchoring map.
    pub gt2d_size: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            encoder: EncoderConfig::default(),
            lora: LoraSettings::default(),
            fusion_mode: FusionMode::Patch,
            pooling: PoolingMode::Attention,
            attention: FusionAttentionSettings::default(),
            loss: LossSettings::default(),
            vertices: 642,
            semantic_classes: 4,
            scene_classes: 4,
            contact_hidden: None,
            vertex_feature_dim: 32,
            semantic_hidden: 32,
            optimizer: OptimizerConfig::default(),
            dataset: DatasetConfig::default(),
            ssl_pretrain: None,
            zero_out_keep: None,
            eval_threshold: 0.5,
            gt2d_size: 8,
        }
    }
}

fn icosphere_vertex_count(subdivisions: usize) -> usize {
    10 * 4usize.pow(subdivisions as u32) + 2
}

impl ExperimentConfig {
    pub fn contact_hidden_width(&self) -> usize {
        self.contact_hidden
            .unwrap_or(if self.vertices >= 6890 { 256 } else { 64 })
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        if self.lora.enabled {
            if self.lora.rank == 0 {
                return Err(ContactError::Config("lora.rank must be >= 1".into()));
            }
            if self.lora.alpha <= 0.0 {
                return Err(ContactError::Config("lora.alpha must be > 0".into()));
            }
        }
        if self.attention.heads == 0 || self.encoder.embed_dim % self.attention.heads != 0 {
            return Err(ContactError::Config(format!(
                "attention.heads {} must divide embed_dim {}",
                self.attention.heads, self.encoder.embed_dim
            )));
        }
        if let Some(s) = self.attention.scale {
            if s <= 0.0 {
                return Err(ContactError::Config("attention.scale must be > 0".into()));
            }
        }
        self.loss.weights.validate()?;
        if self.loss.w_semantic < 0.0 {
            return Err(ContactError::Config("loss.w_semantic must be >= 0".into()));
        }
        if !(0.0..1.0).contains(&self.loss.phi.beta) {
            return Err(ContactError::Config("loss.phi.beta must be in (0,1)".into()));
        }
        if self.loss.phi.epsilon <= 0.0 {
            return Err(ContactError::Config("loss.phi.epsilon must be > 0".into()));
        }
        if self.loss.phi.clip_factor <= 0.0 {
            return Err(ContactError::Config("loss.phi.clip_factor must be > 0".into()));
        }
        if self.vertices == 0 {
            return Err(ContactError::Config("vertices must be >= 1".into()));
        }
        if self.semantic_classes < 2 {
            return Err(ContactError::Config("semantic_classes must be >= 2".into()));
        }
        if self.scene_classes < 2 {
            return Err(ContactError::Config("scene_classes must be >= 2".into()));
        }
        if self.vertex_feature_dim == 0 || self.semantic_hidden == 0 {
            return Err(ContactError::Config("feature widths must be >= 1".into()));
        }
        if self.optimizer.learning_rate < 0.0 {
            return Err(ContactError::Config("learning_rate must be >= 0".into()));
        }
        if !(0.0..=1.0).contains(&self.optimizer.final_lr_fraction) {
            return Err(ContactError::Config("final_lr_fraction must be in [0,1]".into()));
        }
        if let Some(c) = self.optimizer.grad_clip {
            if c <= 0.0 {
                return Err(ContactError::Config("grad_clip must be > 0".into()));
            }
        }
        if !(0.0..1.0).contains(&self.optimizer.momentum) {
            return Err(ContactError::Config("momentum must be in [0,1)".into()));
        }
        if self.optimizer.batch_size == 0 {
            return Err(ContactError::Config("batch_size must be >= 1".into()));
        }
        if !(0.0 < self.eval_threshold && self.eval_threshold < 1.0) {
            return Err(ContactError::Config("eval_threshold must be in (0,1)".into()));
        }
        if self.gt2d_size == 0 {
            return Err(ContactError::Config("gt2d_size must be >= 1".into()));
        }
        match &self.dataset {
            DatasetConfig::Synthetic { n, subdivisions, plan } => {
                if *n == 0 {
                    return Err(ContactError::Config("dataset.n must be >= 1".into()));
                }
                let expected = icosphere_vertex_count(*subdivisions);
                if expected != self.vertices {
                    return Err(ContactError::Config(format!(
                        "subdivisions {subdivisions} gives {expected} vertices, config says {}",
                        self.vertices
                    )));
                }
                plan.rates()?;
            }
            DatasetConfig::Files { .. } => {}
        }
        if let Some(k) = self.zero_out_keep {
            if k > self.encoder.embed_dim {
                return Err(ContactError::Config(format!(
                    "zero_out_keep {k} exceeds embed_dim {}",
                    self.encoder.embed_dim
                )));
            }
        }
        if let Some(ssl) = &self.ssl_pretrain {
            if ssl.prototypes < 2 {
                return Err(ContactError::Config("ssl.prototypes must be >= 2".into()));
            }
            if !(0.0..=1.0).contains(&ssl.mask_ratio) {
                return Err(ContactError::Config("ssl.mask_ratio must be in [0,1]".into()));
            }
            for (name, m) in [("momentum", ssl.momentum), ("center_momentum", ssl.center_momentum)] {
                if !(0.0..1.0).contains(&m) {
                    return Err(ContactError::Config(format!("ssl.{name} must be in [0,1)")));
                }
            }
            if ssl.student_temp <= 0.0 || ssl.teacher_temp <= 0.0 {
                return Err(ContactError::Config("ssl temperatures must be > 0".into()));
            }
            if ssl.learning_rate < 0.0 {
                return Err(ContactError::Config("ssl.learning_rate must be >= 0".into()));
            }
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            ContactError::Config(format!("cannot read config {}: {e}", path.display()))
        })?;
        let cfg: ExperimentConfig = serde_json::from_str(&text)
            .map_err(|e| ContactError::Config(format!("invalid config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }
}
