use alloc::string::String;

pub type Result<T, E = Error> = core::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("backward needs a scalar root, got shape {0:?}")]
    NonScalarRoot(alloc::vec::Vec<usize>),
    #[error("non-finite value at node {node} ({op})")]
    NonFiniteGradient { node: usize, op: &'static str },
    #[error("non-finite activation at token {token} ({context})")]
    NonFiniteActivation { token: usize, context: String },
    #[error("non-finite function value at parameter {param}[{index}]")]
    NonFiniteProbe { param: usize, index: usize },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("degenerate normalizer {value:e} for query {query}")]
    DegenerateNormalizer { query: usize, value: f64 },
    #[error("unknown parameter `{0}`")]
    UnknownParam(String),
    #[error("unsupported layer kind: {0}")]
    UnsupportedLayer(String),
}
