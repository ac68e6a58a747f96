use thiserror::Error;

/// Errors from graph construction, file parsing and structural validation.
#[derive(Debug, Error)]
pub enum GraphError {
    #[error("unknown node id {0}")]
    UnknownNode(u32),
    #[error("invalid graph: {0}")]
    Invalid(String),
    #[error("parse error at {file}:{line}: {msg}")]
    Parse {
        file: String,
        line: usize,
        msg: String,
    },
    #[error("embedding error: {0}")]
    Embedding(String),
    #[error("capacity exceeded: {0}")]
    Capacity(String),
}

/// Errors from query parsing, normalization and oracle evaluation.
#[derive(Debug, Error)]
pub enum QueryError {
    #[error("parse error at {file}:{pos}: {msg}")]
    Parse {
        file: String,
        pos: usize,
        msg: String,
    },
    #[error("unsupported construct: {0}")]
    Unsupported(String),
    #[error("input error: {0}")]
    Input(String),
    #[error("capacity exceeded: {0}")]
    Capacity(String),
    #[error("configuration error: {0}")]
    Config(String),
}

/// Errors raised by the simulator event loop.
#[derive(Debug, Error)]
pub enum SimError {
    #[error("handler error at node {node} on {kind}: {msg}")]
    Handler {
        node: u32,
        kind: &'static str,
        msg: String,
    },
    #[error("event cap {cap} exceeded without quiescence")]
    Livelock { cap: u64 },
    #[error("invariant violated after delivery: {0}")]
    Invariant(String),
}

/// Errors raised by protocol logic (defects, violated preconditions).
#[derive(Debug, Error)]
pub enum ProtoError {
    #[error("protocol defect: {0}")]
    Defect(String),
    #[error("degree bound {bound} violated at node {node} (degree {deg})")]
    DegreeBound { bound: u32, node: u32, deg: u32 },
    #[error("configuration error: {0}")]
    Config(String),
}

/// Errors from tree-decomposition evaluation machinery.
#[derive(Debug, Error)]
pub enum TdError {
    #[error("invalid tree decomposition: {0}")]
    Invalid(String),
    #[error("input error: {0}")]
    Input(String),
    #[error("alphabet mismatch: {0}")]
    Alphabet(String),
    #[error("capacity exceeded: {0}")]
    Capacity(String),
}
