//! Quasi-Lagrangian moving-mesh discontinuous Galerkin methods for hyperbolic
//! conservation laws, with mesh movement driven by a moving-mesh PDE.

pub mod approx;
pub mod checks;
pub mod error;
pub mod harness;
pub mod mesh;
pub mod mmpde;
pub mod physics;
pub mod problems;
pub mod limiter;
pub mod solver;

pub use error::{Error, Result};
pub use mesh::{Mesh, Point};
pub use harness::{convergence_study, run, ConvergenceTable, ErrorReport, Norms, RunConfig, RunOutcome, RunSummary, Solution};
pub use physics::{Burgers, ConservationLaw, Euler1d, Euler2d};
pub use problems::{catalog, find, ProblemSpec};
pub use solver::{DgState, Discretization};
