//! Eigenvalues of symmetric-definite generalized eigenproblems by slicing
//! the spectrum.
//!
//! The pencil (A, B) is stored as a hierarchical matrix with nested cluster
//! bases. Counting the eigenvalues below a shift reduces to the inertia of
//! an approximate LDL^T factorization of A - sigma*B, and bisection on the
//! shift encloses each requested eigenvalue in an interval narrower than a
//! prescribed tolerance.
//!
//! Module map:
//! - [`dense`]: small dense kernels (QR, SVD, LDL^T, symmetric eigensolvers)
//!   used at tree leaves and as independent test oracles.
//! - [`mesh`]: triangular meshes for the four reference geometries and P1
//!   stiffness/mass assembly with Dirichlet elimination.
//! - [`cluster`]: geometric cluster trees and the admissibility-driven
//!   block tree.
//! - [`h2`]: the hierarchical matrix structure itself, plus conversion,
//!   matrix-vector products and binary serialization.
//! - [`compression`]: weight matrices, adaptive cluster bases and
//!   recompression with blockwise error control.
//! - [`arithmetic`]: low-rank updates, multiplication, triangular solves
//!   and the LDL^T factorization.
//! - [`slicing`]: the bisection driver and the master/worker scheduler.
//! - [`problem`]: glue that assembles a finite-element pencil end to end.

pub mod arithmetic;
pub mod cluster;
pub mod compression;
pub mod dense;
pub mod h2;
pub mod mesh;
pub mod problem;
pub mod slicing;
#[doc(hidden)]
pub mod testing;

pub use cluster::{BlockTree, ClusterTree};
pub use dense::DenseMatrix;
pub use h2::{H2Matrix, TruncationControl, TruncationMode};
pub use mesh::{Mesh, SparseMatrix};
pub use slicing::{EigenResult, Pencil};
