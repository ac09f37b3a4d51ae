use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid message `{text}`: {reason}")]
    InvalidMessage { text: String, reason: &'static str },

    #[error("flow file syntax error at line {line}, column {column}: {msg}")]
    Syntax {
        line: usize,
        column: usize,
        msg: String,
    },

    #[error("duplicate flow name `{0}`")]
    DuplicateFlowName(String),

    #[error("flow `{flow}`: duplicate local id {id}")]
    DuplicateLocalId { flow: String, id: u32 },

    #[error("flow `{flow}`: {what} references undefined local id {id}")]
    DanglingReference {
        flow: String,
        what: &'static str,
        id: u32,
    },

    #[error("flow `{flow}` is invalid: {violations}")]
    InvalidFlow { flow: String, violations: String },

    #[error("trace syntax error on line {line}: {msg}")]
    TraceSyntax { line: usize, msg: String },

    #[error("trace set contains no messages; vocabulary would be empty")]
    EmptyVocabulary,

    #[error("vocabulary file error on line {line}: {msg}")]
    VocabSyntax { line: usize, msg: String },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("non-finite gradient in tensor `{tensor}`")]
    NonFiniteGradient { tensor: String },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("checkpoint checksum mismatch")]
    ChecksumMismatch,

    #[error("unsupported checkpoint format version {0}")]
    UnsupportedVersion(u16),

    #[error("score query has no candidates")]
    EmptyCandidates,

    #[error("message `{0}` is not a node of the causality graph")]
    NotInGraph(String),

    #[error("mining configuration has no (start, end) pairs")]
    NoPairs,

    #[error(transparent)]
    Io(#[from] std::io::Error),
}
