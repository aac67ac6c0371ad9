use thiserror::Error;

/// Errors raised anywhere in the analysis pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("failed to decode model protobuf: {0}")]
    Decode(#[from] prost::DecodeError),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("invalid model: {0}")]
    InvalidModel(String),

    #[error("dangling input: node `{node}` consumes undeclared tensor `{tensor}`")]
    DanglingInput { node: String, tensor: String },

    #[error("duplicate tensor name `{0}`")]
    DuplicateName(String),

    #[error("unsupported opset version {0} (need >= 13)")]
    UnsupportedOpset(i64),

    #[error("unsupported element type {0}")]
    UnsupportedDType(String),

    #[error("unbound symbolic dimension `{0}`")]
    UnboundDimension(String),

    #[error("cycle detected in graph involving node `{0}`")]
    Cycle(String),

    #[error("unsupported operator `{0}`")]
    UnsupportedOp(String),

    #[error("shape error at `{node}`: {msg}")]
    Shape { node: String, msg: String },

    #[error("type error at `{node}`: {msg}")]
    Type { node: String, msg: String },

    #[error("non-static {what} at `{node}`: value is not known at analysis time")]
    NonStatic { node: String, what: String },

    #[error("index out of bounds at `{node}`: {msg}")]
    IndexOutOfBounds { node: String, msg: String },

    #[error("invalid input `{name}`: {msg}")]
    InvalidInput { name: String, msg: String },

    #[error("missing input `{0}`")]
    MissingInput(String),

    #[error("label error: {0}")]
    Label(String),

    #[error("invalid batching config: {0}")]
    Config(String),

    #[error("tensor `{0}` not found")]
    TensorNotFound(String),

    #[error("invalid injection plan: {0}")]
    Plan(String),

    #[error("graph is nondeterministic: node `{0}` draws random values")]
    Nondeterministic(String),

    #[error("node `{node}` ({op_type}): {source}")]
    AtNode {
        node: String,
        op_type: String,
        #[source]
        source: Box<Error>,
    },

    #[error("tensor file: {0}")]
    TensorFile(String),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(node: &str, msg: impl Into<String>) -> Self {
        Error::Shape {
            node: node.to_string(),
            msg: msg.into(),
        }
    }

    pub(crate) fn ty(node: &str, msg: impl Into<String>) -> Self {
        Error::Type {
            node: node.to_string(),
            msg: msg.into(),
        }
    }

    pub(crate) fn oob(node: &str, msg: impl Into<String>) -> Self {
        Error::IndexOutOfBounds {
            node: node.to_string(),
            msg: msg.into(),
        }
    }

    pub(crate) fn at_node(self, node: &str, op_type: &str) -> Self {
        match self {
            e @ Error::AtNode { .. } => e,
            e => Error::AtNode {
                node: node.to_string(),
                op_type: op_type.to_string(),
                source: Box::new(e),
            },
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
