//! Hierarchical-matrix (H-matrix) construction for dense kernel matrices of
//! particle systems, with three ways of turning a matrix-wide relative error
//! tolerance into per-block tolerances:
//!
//! - **BREM** (block-wise relative error): every block meets `‖E_i‖_F ≤ ε‖B_i‖_F`.
//! - **MREM** (matrix-wise relative error): every `m×n` block meets the absolute
//!   bound `‖E_i‖_F ≤ ε·√(mn)/N·‖B‖_F`.
//! - **MREMmax**: every block meets the element-wise bound `‖E_i‖_max ≤ ε‖B‖₁/N`.
//!
//! The pipeline is: [`geometry`] generates the particles and kernel entries,
//! [`cluster`] builds the cluster tree and block partition, [`policy`] maps the
//! requested tolerance to block budgets, [`lra`] computes adaptive cross
//! approximations followed by SVD recompression, and [`hmatrix`] assembles the
//! blocks, multiplies vectors and measures the achieved error. [`norm`]
//! estimates `‖B‖_F` without forming `B`.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cluster;
pub mod error;
pub mod geometry;
pub mod hmatrix;
pub mod io;
pub mod lra;
pub mod norm;
pub mod oracle;
pub mod policy;

pub use cluster::{BlockPartition, BoundingBox, ClusterTree};
pub use error::{Error, Result};
pub use geometry::{generate_points, Geometry, Kernel, PointCloud};
pub use hmatrix::{assemble, assemble_with_tree, BuildConfig, BuildReport, ErrorMode, HMatrix};
pub use lra::{LowRankFactors, OuterProductSvd, StopCriterion, StopKind};
pub use norm::NormEstimate;
pub use oracle::{EntryOracle, KernelMatrix};
pub use policy::{BlockBudget, BudgetKind, Method, TolerancePolicy};
