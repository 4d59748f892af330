//! Image retrieval from contextual descriptions: a small ViT/BERT-style
//! matching model with a multi-scale adapter, text-guided masked image
//! reconstruction and an inter-candidate encoder.

pub mod adapter;
pub mod autograd;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod image;
pub mod inter_context;
pub mod masking;
pub mod model;
pub mod objectives;
pub mod params;
pub mod pipeline;
pub mod tensor;
pub mod training;

pub use config::{AdapterConfig, Aggregation, ArchConfig, ModelConfig};
pub use error::{Error, Result};
pub use image::{Image, TokenSequence};
pub use inter_context::{CandidateSet, SetKind};
pub use masking::{CrossAttentionRecord, MaskMatrix, SalienceVector, TokenReduction};
pub use model::Model;
pub use params::{ParamGroup, ParameterStore};
pub use tensor::{Matrix, Scalar};
