//! Trajectory-oriented calibration of stochastic simulators.
//!
//! The search space pairs continuous parameters in the unit hypercube with an
//! integer seed id. A Gaussian-process emulator (optionally with a seed index
//! kernel) is refit every iteration, a grid strategy proposes candidates, batch
//! Thompson sampling picks acquisitions, and the seed space can grow while the
//! run progresses.
//!
//! Module map:
//! - [`dataspace`]: design points, Latin hypercube designs, rescaling, discrepancies
//!   and the log-standardize objective transform.
//! - [`kernel`]: Matérn-5/2 / squared-exponential kernels, the unit-diagonal seed
//!   index kernel and their product.
//! - [`emulator`]: the fit / predict / sample contract and the GP implementations.
//! - [`grid`]: fixed, LHS and adaptive (importance resampling + Metropolis-Hastings)
//!   candidate grids.
//! - [`expansion`]: seed-space growth policies.
//! - [`workflow`]: the acquisition loop and its trace.
//! - [`simulator`]: the reference spatial SIR model and a toy objective.
//! - [`cli`]: config files, results bundles and the command implementations.

// `!(x > 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cli;
pub mod dataspace;
pub mod emulator;
pub mod error;
pub mod expansion;
pub mod grid;
pub mod kernel;
pub mod optim;
pub mod rng;
pub mod simulator;
pub mod workflow;

pub use dataspace::{Bounds, Dataset, DesignPoint, ObjectiveTransform};
pub use emulator::{Emulator, GaussianProcess, GpConfig, PosteriorSummary};
pub use error::{Error, Result};
pub use grid::{AdaptiveGrid, CandidateGrid, FixedGrid, GridStrategy, LhsGrid};
pub use kernel::{ContinuousKernel, JointKernel, KernelFamily, SeedKernel};
pub use workflow::{RunTrace, Workflow, WorkflowConfig};
