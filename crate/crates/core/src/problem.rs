//! End-to-end assembly of a finite-element eigenproblem: mesh, stiffness
//! and mass matrices, cluster and block trees, and the hierarchical
//! stiffness matrix.

use std::sync::Arc;

use thiserror::Error;

use crate::cluster::{build_block_tree, build_cluster_tree, BlockTree, ClusterTree};
use crate::h2::{from_sparse, H2Error, H2Matrix};
use crate::mesh::{assemble_mass, assemble_stiffness, build_mesh, Geometry, Mesh, MeshError, SparseMatrix};
use crate::slicing::{Pencil, SliceError};

#[derive(Debug, Error)]
pub enum BuildError {
    #[error(transparent)]
    Mesh(#[from] MeshError),
    #[error(transparent)]
    Structure(#[from] H2Error),
    #[error(transparent)]
    Slice(#[from] SliceError),
}

#[derive(Debug, Clone, Copy)]
pub struct ProblemConfig {
    pub geometry: Geometry,
    pub refinements: usize,
    pub eta: f64,
    pub leaf_size: usize,
}

impl ProblemConfig {
    pub fn new(geometry: Geometry, refinements: usize) -> ProblemConfig {
        ProblemConfig {
            geometry,
            refinements,
            eta: crate::cluster::DEFAULT_ETA,
            leaf_size: crate::cluster::DEFAULT_LEAF_SIZE,
        }
    }
}

/// A fully assembled test problem.
pub struct Problem {
    pub mesh: Mesh,
    pub stiffness: SparseMatrix,
    pub mass: SparseMatrix,
    pub tree: Arc<ClusterTree>,
    pub btree: Arc<BlockTree>,
    /// The stiffness matrix in hierarchical form.
    pub matrix: H2Matrix,
}

impl Problem {
    pub fn dim(&self) -> usize {
        self.matrix.dim()
    }

    /// Pencil for the standard (`B = I`) or generalized (`B` = mass)
    /// problem.
    pub fn pencil(&self, generalized: bool) -> Result<Pencil, SliceError> {
        if generalized {
            Pencil::new(self.matrix.clone(), Some(self.mass.clone()))
        } else {
            Pencil::standard(self.matrix.clone())
        }
    }
}

/// Assemble mesh, matrices and trees for one geometry/refinement pair.
pub fn build_problem(cfg: &ProblemConfig) -> Result<Problem, BuildError> {
    let mesh = build_mesh(cfg.geometry, cfg.refinements);
    let stiffness = assemble_stiffness(&mesh)?;
    let mass = assemble_mass(&mesh)?;
    let coords = mesh.dof_coordinates();
    let tree = Arc::new(build_cluster_tree(&coords, cfg.leaf_size));
    let btree = Arc::new(build_block_tree(&tree, &tree, cfg.eta));
    let matrix = from_sparse(&stiffness, &tree, &btree)?;
    Ok(Problem { mesh, stiffness, mass, tree, btree, matrix })
}
