//! Structure-preserving time integration for gradient flows of unit vector
//! fields: product-type IMEX Runge–Kutta (PRK) schemes, their tableau and
//! stability analysis, finite-difference operators, and the comparison
//! schemes SIP1, LM2 and a BDF4 reference.

pub mod error;
pub mod field;
pub mod grid;
pub mod harness;
pub mod integrators;
pub mod linalg;
pub mod stability;
pub mod tableau;

pub use error::{FieldError, GridError, HarnessError, RunError, SolverError, StabilityError, StepError, TableauError};
pub use field::{ProjectionParams, VectorField};
pub use grid::{BoundaryData, DiscreteLaplacian, FaceBc, Grid};
pub use integrators::{RunTrace, Scheme, SchemeParams, StepRecord};
pub use linalg::{SolverConfig, SolverMethod, SparseOperator};
pub use tableau::{prk2_tableau, CertificateReport, PrkTableau};
