use std::path::PathBuf;

use thiserror::Error;

use crate::ids::{EdgeId, NodeId};

#[derive(Debug, Error)]
pub enum Error {
    #[error("degenerate chord (length {length:e} m)")]
    DegenerateChord { length: f64 },
    #[error("edge would connect node {0} to itself")]
    SelfLoop(NodeId),
    #[error("an edge between {0} and {1} already exists")]
    DuplicateEdge(NodeId, NodeId),
    #[error("no such node {0}")]
    MissingNode(NodeId),
    #[error("no such edge {0}")]
    MissingEdge(EdgeId),
    #[error("node {0} still has {1} incident edge(s)")]
    NodeStillConnected(NodeId, usize),
    #[error("graph invariant violated: {0}")]
    InvalidGraph(String),
    #[error("parameter layout does not match the graph: {0}")]
    LayoutMismatch(String),
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("entities are {distance:.3} m apart, limit is {limit} m")]
    TooFar { distance: f64, limit: f64 },
    #[error("entity {0} has age {1}, below the required {2}")]
    TooYoung(String, u32, u32),
    #[error("node {0} is an endpoint of edge {1}")]
    IsEndpoint(NodeId, EdgeId),
    #[error("node {0} projects within the merge radius of an endpoint of edge {1}")]
    NearEndpoint(NodeId, EdgeId),
    #[error("node {0} has degree {1}, expected 2")]
    WrongDegree(NodeId, usize),
    #[error("continuation angle {angle:.2}° does not exceed {threshold}°")]
    NotCollinear { angle: f64, threshold: f64 },
    #[error("target has no pixel above the road threshold")]
    EmptyTarget,
    #[error("graph has zero total length")]
    ZeroLength,
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {message}")]
    Format { path: PathBuf, message: String },
    #[error("iteration {iteration}: {source}")]
    AtIteration {
        iteration: u32,
        #[source]
        source: Box<Error>,
    },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub fn format(path: impl Into<PathBuf>, message: impl Into<String>) -> Self {
        Error::Format { path: path.into(), message: message.into() }
    }
}
