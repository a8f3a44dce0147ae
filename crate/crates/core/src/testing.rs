//! Deterministic helpers shared by tests and benchmarks: a small LCG and
//! builders for grid-based model problems.

use std::sync::Arc;

use crate::cluster::{build_block_tree, build_cluster_tree, BlockTree, ClusterTree};
use crate::dense::DenseMatrix;
use crate::h2::{from_sparse, H2Matrix};
use crate::mesh::SparseMatrix;

/// Linear congruential generator; deterministic across platforms.
pub struct Lcg {
    state: u64,
}

impl Lcg {
    pub fn new(seed: u64) -> Lcg {
        Lcg { state: seed.wrapping_mul(2685821657736338717).wrapping_add(1) }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.state = self
            .state
            .wrapping_mul(6364136223846793005)
            .wrapping_add(1442695040888963407);
        self.state
    }

    /// Uniform in [-1, 1).
    pub fn next_f64(&mut self) -> f64 {
        ((self.next_u64() >> 11) as f64 / (1u64 << 52) as f64) * 2.0 - 1.0
    }

    pub fn matrix(&mut self, rows: usize, cols: usize) -> DenseMatrix {
        DenseMatrix::from_fn(rows, cols, |_, _| self.next_f64())
    }
}

/// Interior grid points of the unit square, `side` per direction.
pub fn grid_points(side: usize) -> Vec<[f64; 2]> {
    let h = 1.0 / (side + 1) as f64;
    (1..=side)
        .flat_map(|j| (1..=side).map(move |i| [i as f64 * h, j as f64 * h]))
        .collect()
}

pub fn grid_trees(side: usize, leaf_size: usize, eta: f64) -> (Arc<ClusterTree>, Arc<BlockTree>) {
    let pts = grid_points(side);
    let tree = Arc::new(build_cluster_tree(&pts, leaf_size));
    let btree = Arc::new(build_block_tree(&tree, &tree, eta));
    (tree, btree)
}

/// 5-point stencil matrix on the interior grid (matches the P1 stiffness
/// matrix of the criss-cross triangulation).
pub fn stencil_sparse(side: usize) -> SparseMatrix {
    let n = side * side;
    let idx = |i: usize, j: usize| j * side + i;
    let mut triplets = Vec::new();
    for j in 0..side {
        for i in 0..side {
            triplets.push((idx(i, j), idx(i, j), 4.0));
            if i + 1 < side {
                triplets.push((idx(i, j), idx(i + 1, j), -1.0));
                triplets.push((idx(i + 1, j), idx(i, j), -1.0));
            }
            if j + 1 < side {
                triplets.push((idx(i, j), idx(i, j + 1), -1.0));
                triplets.push((idx(i, j + 1), idx(i, j), -1.0));
            }
        }
    }
    SparseMatrix::from_triplets(n, &triplets)
}

/// Stencil matrix converted to hierarchical form on matching trees.
pub fn stencil_h2(side: usize, leaf_size: usize) -> H2Matrix {
    let (tree, btree) = grid_trees(side, leaf_size, 1.0);
    from_sparse(&stencil_sparse(side), &tree, &btree).expect("stencil fits the block structure")
}

/// Dense image of a sparse matrix in the permuted (position) order of a
/// cluster tree.
pub fn permuted_dense(s: &SparseMatrix, tree: &ClusterTree) -> DenseMatrix {
    let inv = tree.inverse_permutation();
    let mut out = DenseMatrix::zeros(s.dim(), s.dim());
    for (i, j, v) in s.iter() {
        out[(inv[i], inv[j])] = v;
    }
    out
}
