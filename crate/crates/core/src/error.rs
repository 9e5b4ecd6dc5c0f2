use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid argument: {0}")]
    Invalid(String),

    #[error("every position is padding")]
    AllPad,

    #[error("vocabulary size {requested} is too small; minimum is {minimum}")]
    VocabTooSmall { requested: usize, minimum: usize },

    #[error("token id {0} is out of range")]
    UnknownId(u32),

    #[error("{}:{line}: {msg}", path.display())]
    Parse {
        path: PathBuf,
        line: usize,
        msg: String,
    },

    #[error("{}: no records", .0.display())]
    NoRecords(PathBuf),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("non-finite gradient in parameter `{0}`")]
    NonFinite(String),

    #[error("training diverged at step {0}: loss is not finite")]
    Diverged(u64),

    #[error("config: {0}")]
    Config(String),

    #[error("setting audit failed: {0}")]
    Audit(String),

    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Short stable tag used in machine-parseable CLI errors and FFI codes.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Shape(_) => "shape",
            Error::Invalid(_) => "invalid",
            Error::AllPad => "all_pad",
            Error::VocabTooSmall { .. } => "vocab_too_small",
            Error::UnknownId(_) => "unknown_id",
            Error::Parse { .. } => "parse",
            Error::NoRecords(_) => "no_records",
            Error::Checkpoint(_) => "checkpoint",
            Error::NonFinite(_) => "non_finite",
            Error::Diverged(_) => "diverged",
            Error::Config(_) => "config",
            Error::Audit(_) => "audit",
            Error::Io(_) => "io",
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
