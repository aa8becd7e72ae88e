use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error at `{node}`: {msg}")]
    Shape { node: String, msg: String },

    #[error("invalid graph: {0}")]
    InvalidGraph(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("unsupported op kind `{0}`")]
    UnsupportedOp(String),

    #[error("node `{node}` ({op}) is not supported by method `{method}`")]
    UnsupportedByMethod {
        node: String,
        op: String,
        method: String,
    },

    #[error("malformed manifest: {0}")]
    Manifest(#[from] serde_json::Error),

    #[error("checksum mismatch: manifest says {expected}, blob hashes to {actual}")]
    Checksum { expected: String, actual: String },

    #[error("tensor `{name}` spans bytes {offset}..{end} but the blob has {len} bytes")]
    OutOfBounds {
        name: String,
        offset: usize,
        end: usize,
        len: usize,
    },

    #[error("dangling tensor reference `{0}`")]
    DanglingTensor(String),

    #[error("no sample evaluated successfully ({failed} failed)")]
    NoSuccessfulSamples { failed: usize },

    #[error("zero-norm input: cosine distance is undefined")]
    ZeroNorm,

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn shape(node: impl Into<String>, msg: impl Into<String>) -> Self {
        Error::Shape {
            node: node.into(),
            msg: msg.into(),
        }
    }
}
