//! Deterministic tensor kernels, the encoder models and their heads,
//! training, checkpointing, and gradient verification.

pub mod checkpoint;
pub mod gradcheck;
pub mod model;
pub mod tensor;
pub mod train;

pub use model::{
    clt_loss, clt_predict_frame, encoder_forward, encoder_forward_with_attention, plt_loss,
    plt_predict_patches, pool_clt, pool_plt, HeadKind, Model, ModelError, SampleInput,
    TrainSample, TransformerConfig,
};
pub use train::{train, AdamState, TrainConfig, TrainError, TrainReport};
