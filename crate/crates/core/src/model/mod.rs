//! Encoder-decoder saliency network: a separable-3D-conv encoder producing a
//! four-level feature pyramid and a decoder that upsamples back to full
//! resolution with skip joins, ending in one sigmoid map for the clip's last
//! frame.

mod backend;
mod config;
mod network;
mod params;
mod verify;

use thiserror::Error;

use crate::tensor::TensorError;

pub use backend::{conv_params, Backend, Bound, ParamKind, ParamSpec, ShapeBackend, TapeBackend};
pub use config::{FusionMode, ModelConfig, Preset, SkipMode, UpsampleMode, AUDIO_LEN_QUANTUM};
pub use network::{
    count_parameters, decode, decoder_block, encode, encoder_stage, forward, output_block, param_specs, shape_trace, skip_fuse, AudioArg, Pyramid,
    SkipFuse, ViNet,
};
pub use params::{count_specs, Params};
pub use verify::{end_to_end_gradcheck, FIRST_LAYER};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    Config(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("missing parameter '{0}'")]
    MissingParam(String),
    #[error("unexpected parameter '{0}'")]
    UnexpectedParam(String),
    #[error("parameter '{name}' has shape {got:?}, expected {expected:?}")]
    ParamShape {
        name: String,
        expected: Vec<usize>,
        got: Vec<usize>,
    },
    #[error("{0}")]
    Input(String),
    #[error("fusion is enabled but no audio was supplied")]
    MissingAudio,
}

pub type Result<T> = std::result::Result<T, ModelError>;
