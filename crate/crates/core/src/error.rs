use thiserror::Error;

/// Library-wide error type.
///
/// The variants are grouped by how a caller should react: `Config` means the
/// request itself was malformed, `Capacity` means the request exceeded a
/// documented size bound (exact solvers, checkpoint limits), `Divergence`
/// means training produced non-finite parameters, and the remaining variants
/// are programming or data errors surfaced with enough detail to debug.
#[derive(Debug, Error)]
pub enum Error {
    /// Mismatched or invalid array shapes.
    #[error("shape error: {0}")]
    Shape(String),

    /// A feasibility mask with no feasible action, or an action outside it.
    #[error("invalid mask: {0}")]
    InvalidMask(String),

    /// A solution that violates a problem constraint.
    #[error("infeasible solution: {0}")]
    Infeasible(String),

    /// A precondition of an operation was violated.
    #[error("contract violation: {0}")]
    Contract(String),

    /// Invalid configuration (CLI exit code 2).
    #[error("configuration error: {0}")]
    Config(String),

    /// Request exceeds a documented size bound (CLI exit code 3).
    #[error("capacity exceeded: {0}")]
    Capacity(String),

    /// Non-finite parameters or losses during training (CLI exit code 4).
    #[error("training diverged: {0}")]
    Divergence(String),

    /// Malformed dataset, checkpoint, or report file.
    #[error("format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
