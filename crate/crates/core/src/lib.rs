//! Finite-state hidden Markov model approximations of diffusion semigroups.
//!
//! The crate discretizes a diffusion on a tensor grid, builds its resolvent
//! kernels, approximates them by a Poisson jump process and then by a
//! finite-rank generator whose semigroup is realized by a hidden Markov
//! model. Every approximation is measured in the weighted sup norm
//! `||g||_v = sup |g| / v` and the operator norm it induces, where `v = e^V`
//! comes from a Lyapunov drift certificate.
//!
//! Module map:
//!
//! * [`statespace`]: grids, weighted norms, sublevel sets and cell partitions.
//! * [`diffusion`]: models, generators, drift certificates and SDE paths.
//! * [`resolvent`]: rate-matrix discretization and resolvent kernels.
//! * [`jump`]: the jump process driven by `kappa R_kappa`.
//! * [`hmm`]: truncation, finite-rank kernels and the hidden Markov model.
//! * [`analysis`]: approximation reports, spectra, ergodicity and the converse
//!   Lyapunov construction.

// Negated comparisons such as `!(x > 0.0)` also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod analysis;
pub mod diffusion;
pub mod error;
pub mod hmm;
pub mod jump;
pub mod linalg;
pub mod resolvent;
pub mod rng;
pub mod statespace;

pub use error::{Error, Result};
pub use nalgebra::{DMatrix, DVector};
pub use num_complex::Complex64;

pub use analysis::{ApproximationReport, ErgodicityEstimate, SpectrumReport};
pub use diffusion::{DiffusionModel, DriftOperator, LyapunovCertificate, Monomial, Polynomial};
pub use hmm::{FiniteRankGenerator, FiniteRankKernel, TruncationPlan};
pub use jump::{JumpDriftCertificate, JumpGenerator};
pub use resolvent::{GeneratorMatrix, KernelKind, KernelMatrix};
pub use statespace::{CellPartition, FunctionVector, GridSpace, NodeSet};

/// Absolute slack added on top of every "<= bound" comparison to absorb round-off.
pub const BOUND_SLACK: f64 = 1e-9;
