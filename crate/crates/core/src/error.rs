use alloc::boxed::Box;
use alloc::string::String;

pub type Result<T, E = Error> = core::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("program output must be a scalar, got {rows}x{cols}")]
    NonScalar { rows: usize, cols: usize },
    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },
    #[error("duplicate parameter name {0}")]
    DuplicateParam(String),
    #[error("unknown parameter {0}")]
    UnknownParam(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("language mask has no active language")]
    EmptyMask,
    #[error("language mask has {got} entries, expected {expected}")]
    MaskLength { expected: usize, got: usize },
    #[error("utterance has no frames")]
    EmptyUtterance,
    #[error("token {token} does not belong to language {language}")]
    ForeignToken { token: usize, language: usize },
    #[error("ctc target of length {target_len} needs {required} frames, only {frames} available")]
    CtcInfeasible { target_len: usize, required: usize, frames: usize },
    #[error("decoder prefix of length {len} exceeds max_decode_len {max}")]
    PrefixTooLong { len: usize, max: usize },
    #[error("decoder prefix must start with sos")]
    MissingSos,
    #[error("variant {0} has no language classifier")]
    NoClassifier(&'static str),
    #[error("tensor {name}: {reason}")]
    CheckpointMismatch { name: String, reason: String },
    #[error("need {needed} checkpoints, got {got}")]
    NotEnoughCheckpoints { needed: usize, got: usize },
    #[error("reference corpus has no tokens")]
    EmptyReference,
    #[error("{refs} references but {hyps} hypotheses")]
    LengthMismatch { refs: usize, hyps: usize },
    #[error("training diverged at epoch {epoch}, step {step}: {source}")]
    Diverged { epoch: usize, step: usize, source: Box<Error> },
}
