use thiserror::Error;

pub type Result<T, E = AfmmError> = std::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum AfmmError {
    #[error("invalid grid: {0}")]
    InvalidGrid(String),
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("no grid cell contains the interface")]
    EmptyInterface,
    #[error("closest-point projection did not converge")]
    NoConvergence,
    #[error("could not seed node {node} from any adjacent interface cell")]
    InitFailure { node: usize },
    #[error("every update tier failed at node {node}")]
    UpdateFailure { node: usize },
    #[error("gradient norm {norm} too small for curvature")]
    DegenerateGradient { norm: f64 },
    #[error("error norm requested over an empty region")]
    EmptyRegion,
    #[error("convergence fit needs positive errors on at least three grids")]
    NonPositiveError,
    #[error("exact solution unavailable at this point")]
    OracleUnavailable,
    #[error("i/o error: {0}")]
    Io(String),
}
