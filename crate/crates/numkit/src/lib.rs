//! Small dense-tensor toolkit: a reverse-mode autodiff tape over `f64`
//! matrices, a named parameter store, Adam, and a binary checkpoint format.

pub mod adam;
pub mod checkpoint;
pub mod error;
pub mod gradcheck;
pub mod params;
pub mod tape;
pub mod tensor;

pub use adam::{AdamConfig, AdamState};
pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CheckpointError};
pub use error::{NumError, Result};
pub use params::{ParamEntry, ParamGrads, ParamId, ParamStore};
pub use tape::{additive_mask, BnMode, BnStats, Gradients, Tape, Var, MASK_NEG};
pub use tensor::Tensor;
