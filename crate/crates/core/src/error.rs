//! Error types shared across the toolkit.

use thiserror::Error;

/// Errors from tensor ops, the tape, the optimizer, and checkpoint I/O.
#[derive(Debug, Error)]
pub enum NumericsError {
    #[error("{op}: shape mismatch: {detail}")]
    BadShape { op: &'static str, detail: String },
    #[error("{op}: invalid input: {detail}")]
    BadInput { op: &'static str, detail: String },
    #[error("{op}: produced a non-finite value")]
    NonFinite { op: &'static str },
    #[error("backward root must be scalar, got shape {shape:?}")]
    NonScalarRoot { shape: Vec<usize> },
    #[error("grad_check step {h} outside [1e-6, 1e-4]")]
    BadStep { h: f64 },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("checkpoint I/O: {0}")]
    Io(#[from] std::io::Error),
}

/// Errors from Tibetan text parsing and vocabulary handling.
#[derive(Debug, Error)]
pub enum TibetanError {
    #[error("codepoint U+{codepoint:04X} at offset {offset} is not a Tibetan base letter, subjoined letter, or vowel sign")]
    UnknownCodepoint { codepoint: u32, offset: usize },
    #[error("component at offset {offset} has no base letter to attach to in {syllable:?}")]
    DanglingComponent { syllable: String, offset: usize },
    #[error("ambiguous syllable structure for {syllable:?}: {detail} (stacks seen: {stacks:?})")]
    AmbiguousStructure { syllable: String, detail: String, stacks: Vec<String> },
    #[error("empty corpus: vocabulary needs at least one unit")]
    EmptyCorpus,
    #[error("id {id} out of range for vocabulary of size {size}")]
    IdOutOfRange { id: u32, size: usize },
    #[error("vocabulary file: {0}")]
    BadVocabFile(String),
    #[error("vocabulary I/O: {0}")]
    Io(#[from] std::io::Error),
}

/// Errors from chunk planning and latency accounting.
#[derive(Debug, Error)]
pub enum ChunkError {
    #[error("static plan requires 1 <= stride <= width, got width {width} stride {stride}")]
    BadStride { width: usize, stride: usize },
    #[error("controller bounds invalid: {0}")]
    BadBounds(String),
    #[error("plan exceeded {limit} chunks for {frames} frames; stride bounds are likely misconfigured")]
    RunawayPlan { frames: usize, limit: usize },
    #[error("frame {frame} is not covered by any chunk stride region")]
    UncoveredFrame { frame: usize },
    #[error("latency record is empty")]
    EmptyLatencyRecord,
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

/// Errors from the CTC loss and decoders.
#[derive(Debug, Error)]
pub enum CtcError {
    #[error("grid row {row} does not normalize: log-sum-exp = {lse:.3e}")]
    UnnormalizedRow { row: usize, lse: f64 },
    #[error("target of length {target_len} (with {repeats} adjacent repeats) needs at least {needed} frames, grid has {frames}")]
    InfeasibleAlignment { target_len: usize, repeats: usize, needed: usize, frames: usize },
    #[error("target must be non-empty and blank-free")]
    BadTarget,
    #[error("label id {id} out of range for grid with {vocab} labels")]
    LabelOutOfRange { id: u32, vocab: usize },
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

/// Errors from the encoder/decoder model.
#[derive(Debug, Error)]
pub enum ModelError {
    #[error("attention mask is {mask_rows}x{mask_cols} but sequence length is {frames}")]
    MaskMismatch { mask_rows: usize, mask_cols: usize, frames: usize },
    #[error("decoder target must begin with sos and be non-empty")]
    BadDecoderTarget,
    #[error("checkpoint is missing parameter {name:?}")]
    MissingParameter { name: String },
    #[error("parameter {name:?} has shape {found:?}, expected {expected:?}")]
    ParameterShape { name: String, expected: Vec<usize>, found: Vec<usize> },
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Chunk(#[from] ChunkError),
    #[error(transparent)]
    Ctc(#[from] CtcError),
}

/// Errors from n-gram training, scoring, and ARPA I/O.
#[derive(Debug, Error)]
pub enum LmError {
    #[error("empty corpus: n-gram model needs at least one sentence")]
    EmptyCorpus,
    #[error("n-gram order must be >= 1, got {0}")]
    BadOrder(usize),
    #[error("ARPA parse: {0}")]
    BadArpa(String),
    #[error("ARPA I/O: {0}")]
    Io(#[from] std::io::Error),
}

/// Errors from the decode pipelines.
#[derive(Debug, Error)]
pub enum DecodeError {
    #[error("n-best list is empty")]
    EmptyNBest,
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Ctc(#[from] CtcError),
    #[error(transparent)]
    Chunk(#[from] ChunkError),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}
