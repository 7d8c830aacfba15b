use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::LoraConfig;
use crate::table::ProblemType;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LrChoice {
    LayerwiseDecay,
    TwoStage,
    SingleStage,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LrSchedule {
    CosineDecay,
    MultiStep,
    PolynomialDecay,
    None,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PoolingMode {
    Cls,
    Mean,
}

/// On/off switches for the five fine-tuning tricks. With a trick off:
/// `cosine_decay` holds the peak rate after warmup, `grad_clip` skips
/// clipping, `greedy_soup` keeps the best single checkpoint,
/// `layerwise_lr_decay` uses the base rate everywhere, and `weight_decay`
/// sets the decay coefficient to zero.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrickToggles {
    pub cosine_decay: bool,
    pub grad_clip: bool,
    pub greedy_soup: bool,
    pub layerwise_lr_decay: bool,
    pub weight_decay: bool,
}

impl TrickToggles {
    pub const ALL: TrickToggles = TrickToggles {
        cosine_decay: true,
        grad_clip: true,
        greedy_soup: true,
        layerwise_lr_decay: true,
        weight_decay: true,
    };

    pub const NONE: TrickToggles = TrickToggles {
        cosine_decay: false,
        grad_clip: false,
        greedy_soup: false,
        layerwise_lr_decay: false,
        weight_decay: false,
    };

    pub const NAMES: [&'static str; 5] = [
        "cosine_decay",
        "grad_clip",
        "greedy_soup",
        "layerwise_lr_decay",
        "weight_decay",
    ];

    /// Baseline plus exactly one trick.
    pub fn only(name: &str) -> Option<TrickToggles> {
        let mut t = TrickToggles::NONE;
        match name {
            "cosine_decay" => t.cosine_decay = true,
            "grad_clip" => t.grad_clip = true,
            "greedy_soup" => t.greedy_soup = true,
            "layerwise_lr_decay" => t.layerwise_lr_decay = true,
            "weight_decay" => t.weight_decay = true,
            _ => return None,
        }
        Some(t)
    }
}

impl Default for TrickToggles {
    fn default() -> Self {
        TrickToggles::ALL
    }
}

/// Preset quality level; selects backbone width and depth.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Quality {
    MediumQuality,
    HighQuality,
    BestQuality,
}

impl Quality {
    /// `(embed_dim, depth)` of the backbones.
    pub fn backbone_size(self) -> (usize, usize) {
        match self {
            Quality::MediumQuality => (32, 1),
            Quality::HighQuality => (64, 2),
            Quality::BestQuality => (128, 2),
        }
    }

    pub fn parse(s: &str) -> Option<Quality> {
        match s {
            "medium_quality" | "medium" => Some(Quality::MediumQuality),
            "high_quality" | "high" => Some(Quality::HighQuality),
            "best_quality" | "best" => Some(Quality::BestQuality),
            _ => None,
        }
    }
}

/// Full training configuration. Field names double as the keys accepted by
/// hyperparameter overrides (`tricks.greedy_soup`, `learning_rate`, ...).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PresetConfig {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub lr_choice: LrChoice,
    pub layerwise_lr_decay: f64,
    /// Backbone rate multiplier under `two_stage`.
    pub lr_multiplier: f64,
    pub weight_decay: f64,
    pub gradient_clip_val: f64,
    pub lr_schedule: LrSchedule,
    /// Epoch milestones for `multi_step`.
    pub lr_steps: Vec<f64>,
    /// Warmup length as a fraction of all steps.
    pub warmup_steps: f64,
    /// Consecutive non-improving validation checks before stopping.
    pub patience: usize,
    /// Fraction of an epoch between validation checks.
    pub val_check_interval: f64,
    pub max_epochs: usize,
    pub pooling_mode: PoolingMode,
    /// Recorded only; training always runs in full precision.
    pub precision: String,
    pub tricks: TrickToggles,
    pub lora: Option<LoraConfig>,
    /// Checkpoints kept for the soup.
    pub top_k: usize,
    pub backbone_dim: usize,
    pub backbone_depth: usize,
    pub fusion_dim: usize,
    pub max_text_len: usize,
    pub image_size: usize,
    pub seed: u64,
}

impl Default for PresetConfig {
    /// Multimodal classification/regression preset.
    fn default() -> Self {
        let (dim, depth) = Quality::HighQuality.backbone_size();
        PresetConfig {
            batch_size: 128,
            learning_rate: 1e-4,
            lr_choice: LrChoice::LayerwiseDecay,
            layerwise_lr_decay: 0.9,
            lr_multiplier: 0.1,
            weight_decay: 0.001,
            gradient_clip_val: 1.0,
            lr_schedule: LrSchedule::CosineDecay,
            lr_steps: Vec::new(),
            warmup_steps: 0.1,
            patience: 10,
            val_check_interval: 0.5,
            max_epochs: 10,
            pooling_mode: PoolingMode::Cls,
            precision: "16-mixed".into(),
            tricks: TrickToggles::ALL,
            lora: None,
            top_k: 3,
            backbone_dim: dim,
            backbone_depth: depth,
            fusion_dim: 128,
            max_text_len: 128,
            image_size: 32,
            seed: 0,
        }
    }
}

impl PresetConfig {
    /// Preset for a problem type at a quality level.
    pub fn for_problem(problem: ProblemType, quality: Quality) -> Self {
        let (dim, depth) = quality.backbone_size();
        let mut cfg = PresetConfig {
            backbone_dim: dim,
            backbone_depth: depth,
            ..PresetConfig::default()
        };
        match problem {
            ProblemType::Ttm => cfg.pooling_mode = PoolingMode::Mean,
            ProblemType::Itm => cfg.learning_rate = 1e-5,
            _ => {}
        }
        cfg
    }

    /// Detection column of the preset table. Kept in the registry for the
    /// two-stage and multi-step code paths; detection itself is not built.
    pub fn object_detection() -> Self {
        PresetConfig {
            batch_size: 32,
            lr_choice: LrChoice::TwoStage,
            weight_decay: 0.0001,
            gradient_clip_val: 0.1,
            lr_schedule: LrSchedule::MultiStep,
            lr_steps: vec![30.0, 55.0],
            warmup_steps: 0.0,
            patience: 20,
            val_check_interval: 1.0,
            max_epochs: 60,
            ..PresetConfig::default()
        }
    }

    /// Segmentation column of the preset table.
    pub fn semantic_segmentation() -> Self {
        PresetConfig {
            batch_size: 4,
            lr_choice: LrChoice::SingleStage,
            weight_decay: 0.0001,
            lr_schedule: LrSchedule::PolynomialDecay,
            warmup_steps: 0.0,
            val_check_interval: 1.0,
            max_epochs: 30,
            lora: Some(LoraConfig::default()),
            ..PresetConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if !(0.0..1.0).contains(&self.warmup_steps) {
            return bad(format!(
                "warmup_steps must lie in [0, 1), got {}",
                self.warmup_steps
            ));
        }
        if self.patience < 1 {
            return bad("patience must be at least 1".into());
        }
        if !(self.val_check_interval > 0.0 && self.val_check_interval <= 1.0) {
            return bad(format!(
                "val_check_interval must lie in (0, 1], got {}",
                self.val_check_interval
            ));
        }
        if self.batch_size == 0 || self.max_epochs == 0 || self.top_k == 0 {
            return bad("batch_size, max_epochs and top_k must be positive".into());
        }
        if !(self.learning_rate > 0.0) || self.gradient_clip_val <= 0.0 {
            return bad("learning_rate and gradient_clip_val must be positive".into());
        }
        if self.backbone_dim == 0 || self.backbone_dim % 4 != 0 || self.fusion_dim == 0 {
            return bad(
                "backbone_dim must be a positive multiple of 4 and fusion_dim positive".into(),
            );
        }
        if self.image_size < 8 || self.max_text_len < 2 {
            return bad("image_size must be >= 8 and max_text_len >= 2".into());
        }
        if let Some(l) = &self.lora {
            l.validate()?;
        }
        Ok(())
    }

    /// Applies flat dotted-key overrides such as `learning_rate=1e-3` or
    /// `tricks.greedy_soup=false`.
    pub fn with_overrides<'a>(
        &self,
        overrides: impl IntoIterator<Item = (&'a str, &'a serde_json::Value)>,
    ) -> Result<Self> {
        let mut doc = serde_json::to_value(self)?;
        for (key, value) in overrides {
            let mut slot = &mut doc;
            for part in key.split('.') {
                slot = slot
                    .as_object_mut()
                    .and_then(|o| o.get_mut(part))
                    .ok_or_else(|| Error::UnknownHyperparameter(key.to_string()))?;
            }
            *slot = coerce(slot, value);
        }
        let cfg: PresetConfig = serde_json::from_value(doc)
            .map_err(|e| Error::InvalidConfig(format!("bad override value: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Integers given for float fields (or the reverse) are accepted.
fn coerce(current: &serde_json::Value, new: &serde_json::Value) -> serde_json::Value {
    use serde_json::Value;
    match (current, new) {
        (Value::Number(c), Value::Number(n)) if c.is_f64() => {
            n.as_f64().map(Value::from).unwrap_or_else(|| new.clone())
        }
        (Value::Number(c), Value::Number(n)) if c.is_u64() && n.is_f64() => {
            let f = n.as_f64().unwrap_or(f64::NAN);
            if f.fract() == 0.0 && f >= 0.0 {
                Value::from(f as u64)
            } else {
                new.clone()
            }
        }
        _ => new.clone(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn overrides_by_dotted_key() {
        let cfg = PresetConfig::default();
        let lr = serde_json::json!(1e-3);
        let off = serde_json::json!(false);
        let out = cfg
            .with_overrides([("learning_rate", &lr), ("tricks.greedy_soup", &off)])
            .unwrap();
        assert_eq!(out.learning_rate, 1e-3);
        assert!(!out.tricks.greedy_soup);
        let bad = cfg.with_overrides([("nope", &lr)]);
        assert!(matches!(bad, Err(Error::UnknownHyperparameter(_))));
    }

    #[test]
    fn integer_override_for_float_field() {
        let one = serde_json::json!(2);
        let out = PresetConfig::default()
            .with_overrides([("gradient_clip_val", &one), ("max_epochs", &one)])
            .unwrap();
        assert_eq!(out.gradient_clip_val, 2.0);
        assert_eq!(out.max_epochs, 2);
    }

    #[test]
    fn invalid_values_are_rejected() {
        let v = serde_json::json!(1.5);
        assert!(PresetConfig::default()
            .with_overrides([("warmup_steps", &v)])
            .is_err());
    }

    #[test]
    fn registry_columns() {
        assert_eq!(
            PresetConfig::for_problem(ProblemType::Itm, Quality::BestQuality).learning_rate,
            1e-5
        );
        assert_eq!(
            PresetConfig::for_problem(ProblemType::Ttm, Quality::BestQuality).pooling_mode,
            PoolingMode::Mean
        );
        let seg = PresetConfig::semantic_segmentation();
        assert_eq!(seg.lr_choice, LrChoice::SingleStage);
        assert_eq!(seg.lora.unwrap().rank, 32);
    }
}
