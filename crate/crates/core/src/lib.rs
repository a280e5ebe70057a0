//! Numerical core for merging low-rank adapters into base weights.
//!
//! The crate provides the pieces needed to take a pair of task adapters
//! (a "user" adapter and a "reinforce" adapter trained to restore refusal
//! behaviour), restrict them to their numerically meaningful subspaces, and
//! merge them into base weights with a soft orthogonal projection that keeps
//! the user update intact while damping the overlap between the two:
//!
//! * [`mat`] — a small dense row-major `f64` matrix type; everything in this
//!   crate computes in double precision and only converts to `f32` at the
//!   storage boundary.
//! * [`eigen`] — symmetric eigendecomposition via cyclic Jacobi rotations,
//!   sized for the small Gram matrices that arise from adapter factors.
//! * [`qr`] — Householder QR with a deterministic sign convention, used to
//!   extract orthonormal column bases.
//! * [`subspace`] — Gram matrices, effective-rank subspaces, brute-force
//!   column-space projectors, principal angles, and the two span-equality
//!   checks that justify operating on `B` instead of `B·A`.
//! * [`archive`] — a minimal tensor archive format (`manifest.json` plus
//!   little-endian `f32` blobs) for adapters, gradients, and merged weights.
//! * [`bundle`] — adapter bundles loaded from archives, with checkpoint
//!   scaling folded into the `B` factor at load time.
//! * [`merge`] — the merge engine: rank-collapse detection, soft
//!   orthogonalization, per-layer merging, and merge reports.
//! * [`diagnostics`] — safety gradient scores, projected gradients, gradient
//!   norms, and energy retain/damage metrics.

pub mod archive;
pub mod bundle;
pub mod diagnostics;
pub mod eigen;
pub mod error;
pub mod mat;
pub mod merge;
pub mod qr;
pub mod subspace;

pub use error::CoreError;
pub use mat::Mat;
