use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Errors raised while building a skeleton graph from a topology description.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TopologyError {
    #[error("topology must have at least one joint")]
    Empty,
    #[error("edge ({parent}, {child}) references a joint outside 0..{joints}")]
    JointOutOfRange {
        parent: usize,
        child: usize,
        joints: usize,
    },
    #[error("root {root} is outside 0..{joints}")]
    RootOutOfRange { root: usize, joints: usize },
    #[error("self-loop on joint {joint}")]
    SelfLoop { joint: usize },
    #[error("joint {joint} has multiple parents ({first} and {second})")]
    MultipleParents {
        joint: usize,
        first: usize,
        second: usize,
    },
    #[error("edges form a cycle through joint {joint}")]
    Cycle { joint: usize },
    #[error("root {root} has parent {parent}")]
    RootHasParent { root: usize, parent: usize },
    #[error("joint {joint} is not connected to the root")]
    Orphan { joint: usize },
    #[error("expected {expected} edges for {joints} joints, found {found}")]
    EdgeCount {
        joints: usize,
        expected: usize,
        found: usize,
    },
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: {message}")]
    InvalidArgument { op: &'static str, message: String },
    #[error("{op}: non-finite value encountered")]
    NonFinite { op: &'static str },
    #[error("{op}: division by zero")]
    DivisionByZero { op: &'static str },
    #[error("invalid topology: {0}")]
    Topology(#[from] TopologyError),
    #[error("path from joint {from} to joint {to} is degenerate (order must be at least 2)")]
    DegeneratePath { from: usize, to: usize },
    #[error("no directed path from joint {from} to joint {to}")]
    NoDirectedPath { from: usize, to: usize },
    #[error("configuration error: {0}")]
    Config(String),
    #[error("attention recording was not enabled for this forward pass")]
    RecordingDisabled,
    #[error("{path}: {message}")]
    Format { path: PathBuf, message: String },
    #[error("{path}: truncated payload, expected {expected} bytes but found {actual}")]
    Truncated {
        path: PathBuf,
        expected: usize,
        actual: usize,
    },
    #[error("{path}: unsupported format header `{found}`, expected `{expected}`")]
    Version {
        path: PathBuf,
        expected: &'static str,
        found: String,
    },
    #[error("expected {expected}-channel poses, found {found} channels")]
    ChannelMismatch { expected: usize, found: usize },
    #[error("topology `{topology}` has {expected} joints but the data has {found}")]
    JointMismatch {
        topology: String,
        expected: usize,
        found: usize,
    },
    #[error("training aborted: {0}")]
    Training(String),
    #[error("cannot access {path}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn invalid(op: &'static str, message: impl Into<String>) -> Self {
        Error::InvalidArgument {
            op,
            message: message.into(),
        }
    }

    pub(crate) fn shape(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::Shape {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, message: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            message: message.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
