//! Recurrent multi-layer fusion encoder for late-interaction multimodal
//! retrieval.
//!
//! Backbone activations for every layer of a text and a vision model are read
//! from files ([`features`]), fused by a gated recurrent Transformer cell
//! ([`cell`]) over depth ([`encoder`]) into `k` late-interaction tokens, and
//! scored with MaxSim ([`scoring`]). Query and document encoders are trained
//! jointly with a symmetric InfoNCE objective ([`train`]) and served from an
//! exact exhaustive index ([`index`]) evaluated with recall metrics
//! ([`metrics`]).

pub mod attention;
pub mod cell;
pub mod config;
pub mod encoder;
pub mod error;
pub mod features;
pub mod fixtures;
pub mod gradcheck;
pub mod index;
pub mod init;
pub mod metrics;
pub mod pipeline;
pub mod scoring;
pub mod tape;
pub mod tensor;
pub mod train;

#[cfg(test)]
mod testutil;

pub use attention::{attention, AttentionParams};
pub use cell::{cell_step, CellParams, CellStepOutput, GateActivations};
pub use config::RunConfig;
pub use encoder::{
    gate_trace_summary, select_layer_indices, DualEncoder, EncodeOptions, Encoder, EncoderConfig,
    EncoderParams, GateTrace, LayerStack,
};
pub use error::{Error, Modality, Result};
pub use gradcheck::{grad_check, GradCheckConfig, GradCheckReport};
pub use index::{RetrievalIndex, SearchHit};
pub use metrics::{pseudo_recall_at_k, recall_at_k, EvalRecord, QueryResults};
pub use scoring::{maxsim_score, score_matrix, symmetric_infonce, Side, TokenMatrix};
pub use tape::{Tape, Var};
pub use tensor::Tensor;
pub use train::{TrainPair, TrainState};
