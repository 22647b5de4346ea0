use thiserror::Error;

/// Errors shared across the crate.
#[derive(Error, Debug)]
pub enum Error {
    /// A node id that is not present (or no longer present) in the tree.
    #[error("invalid node id {0}")]
    InvalidNode(usize),
    /// A point whose offset falls outside its edge.
    #[error("offset {offset} outside edge of length {edge_len}")]
    InvalidOffset { offset: f64, edge_len: f64 },
    /// An operation that needs a nonempty input received an empty one.
    #[error("empty input: {0}")]
    EmptyInput(&'static str),
    /// A point that was required to lie in a given subtree does not.
    #[error("point not in the required subtree")]
    NotInSubtree,
    /// Reattaching inside the detached fringe would disconnect the tree.
    #[error("attach point lies inside the detached fringe")]
    AttachInsideFringe,
    /// Sampling from a restriction of zero mass.
    #[error("restriction has zero mass")]
    ZeroMass,
    /// A tree with no skeleton cannot be cut.
    #[error("tree has zero total length")]
    ZeroLength,
    /// Construction produced an inconsistent tree.
    #[error("invalid tree: {0}")]
    InvalidTree(String),
    /// argument out of range for a sampler or test.
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    /// A mark for cut-tree refinement that does not sit in any graft.
    #[error("new mark lies on the backbone, not in a graft component")]
    MarkOnBackbone,
    /// A chain that failed to reach its meeting component.
    #[error("reversal chain failed to terminate")]
    NonTermination,
    /// A sampled point fell on a distinguished path; the caller should redraw.
    #[error("sampled point fell on the distinguished path")]
    PointOnPath,
    /// Not enough data to run a statistical check.
    #[error("insufficient data: {0}")]
    InsufficientData(String),
    /// Serialization problems.
    #[error("serialization: {0}")]
    Serde(#[from] serde_json::Error),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
