use thiserror::Error;

use crate::tableau::Violation;

#[derive(Debug, Error)]
pub enum TableauError {
    #[error("tableau has no stages")]
    Empty,
    #[error("dimension mismatch in {what}: expected {expected}, found {found}")]
    Dimension {
        what: &'static str,
        expected: usize,
        found: usize,
    },
    #[error("tableau is structurally invalid ({} violation(s))", .0.len())]
    Invalid(Vec<Violation>),
    #[error("order conditions are available for orders 1 to 3, not {0}")]
    UnsupportedOrder(u8),
    #[error("need at least two step sizes to fit a slope, got {0}")]
    TooFewPoints(usize),
    #[error("t_end = {t_end} is not a whole number of steps of size {tau}")]
    StepCount { t_end: f64, tau: f64 },
    #[error("Newton iteration failed at step {step}, stage {stage}")]
    NewtonFailure { step: usize, stage: usize },
    #[error("invalid tableau JSON: {0}")]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Error)]
pub enum StabilityError {
    #[error("stability matrix is singular at z0 = {z0}, z1 = {z1}, z2 = {z2}")]
    Singular {
        z0: num_complex::Complex64,
        z1: num_complex::Complex64,
        z2: num_complex::Complex64,
    },
    #[error("no stiff samples: y_samples is empty")]
    NoSamples,
    #[error("invalid region grid: {0}")]
    Grid(String),
    #[error(transparent)]
    Tableau(#[from] TableauError),
}

#[derive(Debug, Error)]
pub enum GridError {
    #[error("grid dimension must be 1, 2 or 3, got {0}")]
    Dimension(usize),
    #[error("need at least 3 nodes per axis, got {0}")]
    TooFewNodes(usize),
    #[error("grid spacing must be positive, got {0}")]
    Spacing(f64),
    #[error("expected {expected} boundary faces, got {found}")]
    Faces { expected: usize, found: usize },
    #[error("vector length {found} does not match {expected} grid nodes")]
    Length { expected: usize, found: usize },
}

#[derive(Debug, Error)]
pub enum FieldError {
    #[error("node {node} has zero length")]
    ZeroLength { node: usize },
    #[error("field is empty")]
    Empty,
    #[error("field has {found} nodes, expected {expected}")]
    Length { expected: usize, found: usize },
}

#[derive(Debug, Error)]
pub enum SolverError {
    #[error("matrix is {rows}x{cols}, expected square of size {expected}")]
    Shape { rows: usize, cols: usize, expected: usize },
    #[error("no convergence after {iterations} iterations (residual {residual:e})")]
    NotConverged {
        iterations: usize,
        residual: f64,
        best: Vec<f64>,
    },
    #[error("Krylov breakdown at iteration {iteration}")]
    Breakdown { iteration: usize },
    #[error("zero pivot in banded factorization at row {row}")]
    SingularPivot { row: usize },
    #[error("right-hand side is not finite")]
    NonFinite,
    #[error("invalid solver configuration: {0}")]
    Config(String),
}

#[derive(Debug, Error)]
pub enum StepError {
    #[error("stage {stage}: {source}")]
    Solver {
        stage: usize,
        #[source]
        source: SolverError,
    },
    #[error(transparent)]
    Field(#[from] FieldError),
    #[error("LM2 multiplier equation has no real root in [{lo}, {hi}]")]
    NoRealRoot { lo: f64, hi: f64 },
    #[error("invalid scheme parameters: {0}")]
    Params(String),
    #[error(transparent)]
    Tableau(#[from] TableauError),
}

#[derive(Debug, Error)]
pub enum RunError {
    #[error("step {step} (t = {time}): {source}")]
    Step {
        step: usize,
        time: f64,
        #[source]
        source: StepError,
    },
    #[error("final time {t_end} is not a whole number of steps of size {tau}")]
    StepCount { t_end: f64, tau: f64 },
    #[error(transparent)]
    Setup(#[from] StepError),
}

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("unknown preset '{0}'")]
    UnknownPreset(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io {
        path: std::path::PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error(transparent)]
    Field(#[from] FieldError),
    #[error(transparent)]
    Run(#[from] RunError),
    #[error(transparent)]
    Step(#[from] StepError),
}
