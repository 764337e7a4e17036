use thiserror::Error;

/// Errors produced by the library.
#[derive(Debug, Error)]
pub enum Error {
    /// Footprint rasterization produced no cells.
    #[error("footprint rasterization produced an empty object")]
    EmptyObject,

    /// Cell set is not a single 4-connected component.
    #[error("cell set is not 4-connected ({0} components)")]
    Disconnected(usize),

    /// Duplicate grid coordinates in a cell set.
    #[error("duplicate grid cell at ({0}, {1})")]
    DuplicateCell(i32, i32),

    /// Vector lengths do not match the object's cell count.
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    /// A numeric input was NaN or infinite.
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    /// A configuration value violates its documented range.
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    /// The object left the admissible workspace during an identification session.
    #[error("object left the workspace during exploration")]
    WorkspaceExceeded,

    /// The object failed to come to rest after a push.
    #[error("object did not settle within {0} zero-force steps")]
    NonQuiescent(usize),

    /// RRT* exhausted its node budget without connecting start to goal.
    #[error("no waypoint path found within the node budget")]
    PlanningFailed,

    /// Goal sampling found no pose meeting the overhang and stability thresholds.
    #[error("no stable goal pose found after {0} samples")]
    NoStableGoal(usize),

    /// Closed-loop execution stopped making progress.
    #[error("expected gap failed to decrease for {0} consecutive actions")]
    ExecutionDiverged(usize),

    /// Scene or ensemble text failed to parse.
    #[error("parse error: {0}")]
    Parse(#[from] serde_json::Error),

    /// Semantic validation of a parsed file failed.
    #[error("invalid scene: {0}")]
    InvalidScene(String),
}
