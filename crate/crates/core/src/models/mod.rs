//! Late-fusion and bi-encoder networks, their backbones, LoRA adapters and
//! weight serialization.

pub mod backbones;
pub mod biencoder;
pub mod fusion;
pub mod layers;
pub mod lora;
pub mod params;
pub mod weights;

pub use backbones::{Backbone, BackboneSpec};
pub use biencoder::{build_biencoder, forward_biencoder, BiEncoderModel, Side};
pub use fusion::{build_fusion_model, FusionModel, InputLayout, ModelOutput};
pub use layers::LinearRole;
pub use lora::{inject_lora, LoraConfig, LoraTarget};
pub use params::{Graph, Param, ParamGrads, ParamGroup, ParamId, ParamStore};
