//! Compact transformer encoder with a token-prediction head, trained from scratch.

mod checkpoint;
mod config;
mod encoder;
pub(crate) mod ops;
mod params;

pub use checkpoint::{load_checkpoint, save_checkpoint, CHECKPOINT_VERSION};
pub use config::EncoderConfig;
pub use encoder::{
    pooled_rows, scatter_pooled, EncoderCache, EncoderOutput, HeadCache, Model, TokenBatch,
    BN_MOMENTUM,
};
pub use params::{BlockIds, HeadIds, ParamGroup, ParamLayout, Params, TensorId, TensorSpec};

/// Scalar type the model runs in: `f32` for training, `f64` for gradient checks.
pub trait Float: ndarray::NdFloat + num_traits::FromPrimitive {}

impl Float for f32 {}
impl Float for f64 {}
