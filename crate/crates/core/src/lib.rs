//! GuiLoMo: per-layer expert-count and rank allocation for LoRA
//! mixture-of-experts adapters, learned with guided selection vectors in a
//! bilevel search on a toy transformer.
//!
//! Numeric code is generic over [`numerics::Scalar`] (`f32` or `f64`); the
//! aliases below fix it to `f64`.

pub mod allocation;
pub mod analysis;
pub mod bilevel;
pub mod error;
pub mod gsv;
pub mod harness;
pub mod lora_moe;
pub mod numerics;

pub use error::{Error, Result};

pub type Tensor = numerics::Tensor<f64>;
pub type Graph = numerics::Graph<f64>;
pub type GuidedSelectionVector = gsv::GuidedSelectionVector<f64>;
pub type LoraMoeLayerState = lora_moe::LoraMoeLayerState<f64>;
pub type MaterializedLayer = lora_moe::MaterializedLayer<f64>;
pub type ToyTransformer = harness::ToyTransformer<f64>;
pub type SearchCheckpoint = harness::SearchCheckpoint<f64>;
