//! Desk-scale neural machine translation with knowledge acquired from
//! frozen pre-trained language models.
//!
//! The crate covers the whole stack: a small reverse-mode autodiff engine,
//! a Transformer encoder-decoder, causal and masked pre-training, dynamic
//! fusion of teacher layers into the encoder, word- and sentence-level
//! distillation into the decoder, declarative integration plans, synthetic
//! corpora with BPE, an Adam trainer with warmup, beam search and BLEU.

pub mod autograd;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod distill;
pub mod error;
pub mod eval;
pub mod fusion;
pub mod model;
pub mod optim;
pub mod params;
pub mod pretrain;
pub mod strategy;
pub mod tensor;
pub mod trainer;

pub use autograd::{AttentionSpec, Gradients, Graph, SeqLayout, Var};
pub use error::{AptError, Result};
pub use params::{ParamId, ParamStore};
pub use tensor::{Dtype, Tensor};
