use serde::{Deserialize, Serialize};

use super::biencoder::BiEncoderModel;
use super::fusion::FusionModel;
use super::layers::{Linear, LinearRole, LoraAdapter};
use super::params::{Init, ParamGroup, ParamStore};
use crate::error::{Error, Result};

const LORA_SEED_SALT: u64 = 0x10a4_0dd5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LoraConfig {
    pub rank: usize,
    pub alpha: f64,
    /// Linear roles that receive adapters (`query`, `value`, `ffn_in`, ...).
    pub targets: Vec<String>,
}

impl Default for LoraConfig {
    fn default() -> Self {
        LoraConfig {
            rank: 32,
            alpha: 32.0,
            targets: vec!["query".into(), "value".into()],
        }
    }
}

impl LoraConfig {
    pub fn validate(&self) -> Result<()> {
        if self.rank == 0 {
            return Err(Error::InvalidConfig("LoRA rank must be at least 1".into()));
        }
        if !(self.alpha.is_finite() && self.alpha > 0.0) {
            return Err(Error::InvalidConfig(format!(
                "LoRA alpha must be positive, got {}",
                self.alpha
            )));
        }
        if self.targets.is_empty() {
            return Err(Error::InvalidConfig(
                "LoRA needs at least one target".into(),
            ));
        }
        self.roles().map(|_| ())
    }

    pub fn roles(&self) -> Result<Vec<LinearRole>> {
        self.targets
            .iter()
            .map(|t| LinearRole::parse(t).ok_or_else(|| Error::UnknownTarget(t.clone())))
            .collect()
    }

    pub fn scale(&self) -> f64 {
        self.alpha / self.rank as f64
    }
}

/// Models whose linear maps can carry adapters.
pub trait LoraTarget {
    fn lora_parts(&mut self) -> (&mut ParamStore, Vec<&mut Linear>);
    fn seed(&self) -> u64;
}

impl LoraTarget for FusionModel {
    fn lora_parts(&mut self) -> (&mut ParamStore, Vec<&mut Linear>) {
        self.parts_mut()
    }

    fn seed(&self) -> u64 {
        self.specs.first().map_or(0, |s| s.seed)
    }
}

impl LoraTarget for BiEncoderModel {
    fn lora_parts(&mut self) -> (&mut ParamStore, Vec<&mut Linear>) {
        self.parts_mut()
    }

    fn seed(&self) -> u64 {
        0
    }
}

/// Freezes every backbone parameter and every targeted linear map, then
/// attaches trainable adapters (`A` random-small, `B` zero) to the targets.
/// The model output is unchanged until `B` moves.
pub fn inject_lora<M: LoraTarget>(model: &mut M, cfg: &LoraConfig) -> Result<()> {
    cfg.validate()?;
    let roles = cfg.roles()?;
    let seed = model.seed() ^ LORA_SEED_SALT;
    let (ps, linears) = model.lora_parts();
    for (role, name) in roles.iter().zip(&cfg.targets) {
        if !linears.iter().any(|l| l.role == *role) {
            return Err(Error::UnknownTarget(name.clone()));
        }
    }
    if linears.iter().any(|l| l.lora.is_some()) {
        return Err(Error::InvalidConfig(
            "model already carries LoRA adapters".into(),
        ));
    }
    ps.reseed(seed);
    for p in ps.iter_mut() {
        if p.group == ParamGroup::Backbone {
            p.trainable = false;
        }
    }
    for lin in linears {
        if !roles.contains(&lin.role) {
            continue;
        }
        ps.get_mut(lin.weight).trainable = false;
        ps.get_mut(lin.bias).trainable = false;
        let r = cfg.rank;
        let bound = 1.0 / (lin.in_dim as f64).sqrt();
        let a = ps.add(
            format!("{}.lora_a", lin.name),
            &[lin.in_dim, r],
            Init::Uniform(bound),
            lin.depth,
            lin.group,
            true,
        );
        let b = ps.add(
            format!("{}.lora_b", lin.name),
            &[r, lin.out_dim],
            Init::Zeros,
            lin.depth,
            lin.group,
            true,
        );
        lin.lora = Some(LoraAdapter {
            a,
            b,
            scale: cfg.scale(),
        });
    }
    Ok(())
}
