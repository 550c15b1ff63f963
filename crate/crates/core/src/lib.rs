//! Desk-scale streaming sequence-transduction toolkit.
//!
//! A hybrid CTC/attention encoder-decoder with context-aware dynamic chunk
//! planning, Tibetan multi-granularity modeling units, back-off n-gram
//! shallow fusion, and the full decode stack (CTC greedy, CTC prefix beam
//! search, attention beam search with optional global normalization, and
//! attention rescoring). Everything runs on a small f64 reverse-mode tape so
//! objectives are exactly differentiable and checkable against finite
//! differences.

pub mod adam;
pub mod checkpoint;
pub mod chunk;
pub mod ctc;
pub mod decode;
pub mod error;
pub mod hypothesis;
pub mod lm;
pub mod model;
pub mod tape;
pub mod tensor;
pub mod tibetan;

pub use error::{ChunkError, CtcError, DecodeError, LmError, ModelError, NumericsError, TibetanError};
pub use tape::{grad_check, NodeId, Tape};
pub use tensor::Tensor;
