//! Dynamic decoding transformer policy.

mod config;
pub mod gradcheck;
mod model;
mod params;

pub use config::DdtmConfig;
pub use model::{argmax, positional_encoding, sample, DecodeMode, Embeddings, StepOutput, TapedRollout};
pub use params::{AttnIds, BnIds, DdtmParams, DecLayerIds, EncLayerIds};
