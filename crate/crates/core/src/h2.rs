//! The hierarchical matrix structure: nested cluster bases, coupling and
//! nearfield blocks, matrix-vector products, conversion from sparse
//! matrices and basis orthogonalization.
//!
//! Both sides of a matrix share one cluster tree, so every index set is a
//! contiguous range of positions under the tree's permutation. Admissible
//! leaf blocks b = (t, s) are stored as `V_t S_b W_s^T`; inadmissible
//! leaves are small dense matrices.

use std::sync::Arc;

use thiserror::Error;

use crate::cluster::{BlockId, BlockTree, ClusterId, ClusterTree};
use crate::dense::{thin_qr, DenseMatrix};
use crate::mesh::SparseMatrix;

pub mod io;

/// Matrices larger than this refuse to materialize densely.
pub const DENSE_LIMIT: usize = 5000;

/// Default cap on adaptive ranks.
pub const DEFAULT_MAX_RANK: usize = 128;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum H2Error {
    /// A nonzero entry of a sparse matrix fell inside an admissible block.
    #[error("nonzero entry ({row},{col}) falls inside admissible block {block}")]
    StructureMismatch { block: BlockId, row: usize, col: usize },
    #[error("matrix dimension {n} exceeds the dense materialization limit {limit}")]
    TooLarge { n: usize, limit: usize },
    #[error("operation requires an orthogonal cluster basis")]
    NotOrthogonal,
    #[error("block {0} is not part of the block tree")]
    InvalidBlock(BlockId),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TruncationMode {
    /// Keep singular values above `eps * sigma_max`, per cluster.
    Relative,
    /// Blockwise error control: weight matrices carry the block norms and
    /// truncation keeps singular values strictly greater than one.
    Weighted,
}

/// Accuracy control for adaptive rank truncation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TruncationControl {
    pub eps: f64,
    pub mode: TruncationMode,
    pub max_rank: usize,
}

impl TruncationControl {
    pub fn weighted(eps: f64) -> TruncationControl {
        let c = TruncationControl { eps, mode: TruncationMode::Weighted, max_rank: DEFAULT_MAX_RANK };
        c.validate();
        c
    }

    pub fn relative(eps: f64) -> TruncationControl {
        let c = TruncationControl { eps, mode: TruncationMode::Relative, max_rank: DEFAULT_MAX_RANK };
        c.validate();
        c
    }

    pub fn validate(&self) {
        assert!(self.eps > 0.0 && self.eps < 1.0, "eps must be in (0,1)");
        assert!(self.max_rank >= 1, "max_rank must be at least 1");
    }
}

impl Default for TruncationControl {
    fn default() -> Self {
        TruncationControl::weighted(1e-8)
    }
}

// ── cluster basis ───────────────────────────────────────────────────

/// Nested cluster basis: leaf matrices `V_t` for leaf clusters and
/// transfer matrices `E_t` (stored at the son, mapping the father's rank
/// onto the son's) for everything else.
#[derive(Debug, Clone)]
pub struct ClusterBasis {
    rank: Vec<usize>,
    /// per leaf cluster: |t| x k_t
    leaf: Vec<Option<DenseMatrix>>,
    /// per non-root cluster: k_son x k_father
    transfer: Vec<Option<DenseMatrix>>,
    pub orthogonal: bool,
}

impl ClusterBasis {
    /// Rank-zero basis (the exact representation of a matrix whose
    /// admissible blocks are all zero). Trivially orthogonal.
    pub fn rank_zero(tree: &ClusterTree) -> ClusterBasis {
        let n = tree.len();
        let mut leaf = vec![None; n];
        let mut transfer = vec![None; n];
        for id in tree.ids() {
            let c = tree.cluster(id);
            if c.is_leaf() {
                leaf[id] = Some(DenseMatrix::zeros(c.len(), 0));
            }
            if id != tree.root() {
                transfer[id] = Some(DenseMatrix::zeros(0, 0));
            }
        }
        ClusterBasis { rank: vec![0; n], leaf, transfer, orthogonal: true }
    }

    pub fn from_parts(
        tree: &ClusterTree,
        leaf: Vec<Option<DenseMatrix>>,
        transfer: Vec<Option<DenseMatrix>>,
        orthogonal: bool,
    ) -> ClusterBasis {
        let mut rank = vec![0; tree.len()];
        for id in tree.ids() {
            let c = tree.cluster(id);
            if c.is_leaf() {
                let v = leaf[id].as_ref().expect("leaf cluster needs a leaf matrix");
                assert_eq!(v.rows(), c.len(), "leaf matrix row mismatch");
                rank[id] = v.cols();
            }
        }
        // non-leaf ranks come from the transfer column counts of the sons
        let ids: Vec<ClusterId> = tree.ids().collect();
        for &id in ids.iter().rev() {
            let c = tree.cluster(id);
            if let Some([a, b]) = c.sons {
                let ea = transfer[a].as_ref().expect("son needs a transfer matrix");
                let eb = transfer[b].as_ref().expect("son needs a transfer matrix");
                assert_eq!(ea.rows(), rank[a], "transfer row mismatch");
                assert_eq!(eb.rows(), rank[b], "transfer row mismatch");
                assert_eq!(ea.cols(), eb.cols(), "sons disagree on father rank");
                rank[id] = ea.cols();
            }
        }
        ClusterBasis { rank, leaf, transfer, orthogonal }
    }

    pub fn rank(&self, t: ClusterId) -> usize {
        self.rank[t]
    }

    pub fn ranks(&self) -> &[usize] {
        &self.rank
    }

    pub fn max_rank(&self) -> usize {
        self.rank.iter().copied().max().unwrap_or(0)
    }

    pub fn leaf_matrix(&self, t: ClusterId) -> Option<&DenseMatrix> {
        self.leaf[t].as_ref()
    }

    pub fn transfer_matrix(&self, t: ClusterId) -> Option<&DenseMatrix> {
        self.transfer[t].as_ref()
    }

    pub(crate) fn set_leaf(&mut self, t: ClusterId, v: DenseMatrix) {
        self.rank[t] = v.cols();
        self.leaf[t] = Some(v);
    }

    pub(crate) fn set_transfer(&mut self, t: ClusterId, e: DenseMatrix) {
        self.transfer[t] = Some(e);
    }

    pub(crate) fn set_rank(&mut self, t: ClusterId, k: usize) {
        self.rank[t] = k;
    }

    /// Materialize `V_t` as a dense |t| x k_t matrix via the transfer
    /// recursion.
    pub fn materialize(&self, tree: &ClusterTree, t: ClusterId) -> DenseMatrix {
        let c = tree.cluster(t);
        match c.sons {
            None => self.leaf[t].clone().expect("leaf matrix missing"),
            Some([a, b]) => {
                let va = self.materialize(tree, a);
                let vb = self.materialize(tree, b);
                let ea = self.transfer[a].as_ref().expect("transfer missing");
                let eb = self.transfer[b].as_ref().expect("transfer missing");
                DenseMatrix::vstack(&va.matmul(ea), &vb.matmul(eb))
            }
        }
    }

    /// Largest deviation of `V_t^T V_t` from the identity over a subtree.
    pub fn orthogonality_defect(&self, tree: &ClusterTree, t: ClusterId) -> f64 {
        let mut worst = 0.0f64;
        for id in tree.subtree(t) {
            let v = self.materialize(tree, id);
            let g = v.tr_matmul(&v);
            let k = self.rank[id];
            let mut defect = 0.0f64;
            for i in 0..k {
                for j in 0..k {
                    let target = if i == j { 1.0 } else { 0.0 };
                    defect = defect.max((g[(i, j)] - target).abs());
                }
            }
            worst = worst.max(defect);
        }
        worst
    }

    /// Coefficient vectors `V_t^T x` for every cluster of the subtree,
    /// computed bottom-up through the transfer matrices. `x` holds the
    /// positions of the subtree root's range; multiple columns allowed.
    pub(crate) fn forward_coeffs(
        &self,
        tree: &ClusterTree,
        root: ClusterId,
        x: &DenseMatrix,
    ) -> Vec<Option<DenseMatrix>> {
        let base = tree.cluster(root).start;
        let mut coeffs: Vec<Option<DenseMatrix>> = vec![None; tree.len()];
        let mut order = tree.subtree(root);
        order.reverse(); // sons before fathers
        for id in order {
            let c = tree.cluster(id);
            let val = match c.sons {
                None => {
                    let v = self.leaf[id].as_ref().expect("leaf matrix missing");
                    let slice = x.row_block(c.start - base, c.end - base);
                    v.tr_matmul(&slice)
                }
                Some([a, b]) => {
                    let ea = self.transfer[a].as_ref().expect("transfer missing");
                    let eb = self.transfer[b].as_ref().expect("transfer missing");
                    let mut acc = ea.tr_matmul(coeffs[a].as_ref().unwrap());
                    acc.axpy(1.0, &eb.tr_matmul(coeffs[b].as_ref().unwrap()));
                    acc
                }
            };
            coeffs[id] = Some(val);
        }
        coeffs
    }

    /// Scatter coefficient contributions `V_t yhat_t` into `out`, walking
    /// the subtree top-down through the transfer matrices.
    pub(crate) fn backward_accumulate(
        &self,
        tree: &ClusterTree,
        root: ClusterId,
        mut coeffs: Vec<Option<DenseMatrix>>,
        out: &mut DenseMatrix,
    ) {
        let base = tree.cluster(root).start;
        for id in tree.subtree(root) {
            let Some(contrib) = coeffs[id].take() else { continue };
            let c = tree.cluster(id);
            match c.sons {
                None => {
                    let v = self.leaf[id].as_ref().expect("leaf matrix missing");
                    let add = v.matmul(&contrib);
                    for i in 0..add.rows() {
                        for j in 0..add.cols() {
                            out[(c.start - base + i, j)] += add[(i, j)];
                        }
                    }
                }
                Some([a, b]) => {
                    let ea = self.transfer[a].as_ref().expect("transfer missing");
                    let eb = self.transfer[b].as_ref().expect("transfer missing");
                    let add_a = ea.matmul(&contrib);
                    let add_b = eb.matmul(&contrib);
                    match &mut coeffs[a] {
                        Some(c) => c.axpy(1.0, &add_a),
                        slot => *slot = Some(add_a),
                    }
                    match &mut coeffs[b] {
                        Some(c) => c.axpy(1.0, &add_b),
                        slot => *slot = Some(add_b),
                    }
                }
            }
        }
    }
}

/// Orthogonalize a nested basis by bottom-up QR factorizations.
///
/// Returns the orthogonal basis and one change-of-basis matrix `C_t` per
/// cluster with `V_t_new C_t = V_t_old` exactly.
pub fn orthogonalize_basis(tree: &ClusterTree, basis: &ClusterBasis) -> (ClusterBasis, Vec<DenseMatrix>) {
    let n = tree.len();
    let mut leaf = vec![None; n];
    let mut transfer = vec![None; n];
    let mut change = vec![DenseMatrix::zeros(0, 0); n];
    let mut rank = vec![0usize; n];
    let ids: Vec<ClusterId> = tree.ids().collect();
    for &id in ids.iter().rev() {
        let c = tree.cluster(id);
        match c.sons {
            None => {
                let v = basis.leaf[id].as_ref().expect("leaf matrix missing");
                let (q, r) = thin_qr(v);
                rank[id] = q.cols();
                leaf[id] = Some(q);
                change[id] = r;
            }
            Some([a, b]) => {
                let ea = basis.transfer[a].as_ref().expect("transfer missing");
                let eb = basis.transfer[b].as_ref().expect("transfer missing");
                let m = DenseMatrix::vstack(&change[a].matmul(ea), &change[b].matmul(eb));
                let (q, r) = thin_qr(&m);
                let ka = rank[a];
                rank[id] = q.cols();
                transfer[a] = Some(q.row_block(0, ka));
                transfer[b] = Some(q.row_block(ka, q.rows()));
                change[id] = r;
            }
        }
    }
    // root keeps no transfer; sons already filled above. Leaf clusters that
    // are not the root still need their transfer usable by the father pass,
    // which consumed `change` instead; nothing further to do.
    let out = ClusterBasis { rank, leaf, transfer, orthogonal: true };
    (out, change)
}

// ── the matrix ──────────────────────────────────────────────────────

/// Storage counts in units of one `f64` entry.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StorageReport {
    pub coupling_entries: usize,
    pub nearfield_entries: usize,
    pub basis_entries: usize,
    pub total: usize,
}

#[derive(Debug, Clone)]
pub struct H2Matrix {
    tree: Arc<ClusterTree>,
    btree: Arc<BlockTree>,
    pub(crate) row_basis: ClusterBasis,
    pub(crate) col_basis: ClusterBasis,
    /// per admissible leaf block: k_t x k_s
    pub(crate) coupling: Vec<Option<DenseMatrix>>,
    /// per inadmissible leaf block: |t| x |s|
    pub(crate) nearfield: Vec<Option<DenseMatrix>>,
    pub symmetric: bool,
}

impl H2Matrix {
    /// Zero matrix on the given trees: rank-zero bases, zero nearfield.
    pub fn zeros(tree: Arc<ClusterTree>, btree: Arc<BlockTree>, symmetric: bool) -> H2Matrix {
        let mut coupling = vec![None; btree.len()];
        let mut nearfield = vec![None; btree.len()];
        for id in btree.leaves() {
            let blk = btree.block(id);
            if blk.admissible {
                coupling[id] = Some(DenseMatrix::zeros(0, 0));
            } else {
                let r = tree.cluster(blk.row).len();
                let c = tree.cluster(blk.col).len();
                nearfield[id] = Some(DenseMatrix::zeros(r, c));
            }
        }
        H2Matrix {
            row_basis: ClusterBasis::rank_zero(&tree),
            col_basis: ClusterBasis::rank_zero(&tree),
            tree,
            btree,
            coupling,
            nearfield,
            symmetric,
        }
    }

    /// Assemble a matrix from explicit bases, couplings and nearfield
    /// blocks. Dimensions are checked against the trees.
    #[allow(clippy::too_many_arguments)]
    pub fn from_parts(
        tree: Arc<ClusterTree>,
        btree: Arc<BlockTree>,
        row_basis: ClusterBasis,
        col_basis: ClusterBasis,
        coupling: Vec<Option<DenseMatrix>>,
        nearfield: Vec<Option<DenseMatrix>>,
        symmetric: bool,
    ) -> H2Matrix {
        assert_eq!(coupling.len(), btree.len());
        assert_eq!(nearfield.len(), btree.len());
        for id in btree.leaves() {
            let blk = btree.block(id);
            if blk.admissible {
                let s = coupling[id].as_ref().expect("admissible leaf needs a coupling matrix");
                assert_eq!(s.rows(), row_basis.rank(blk.row), "coupling rows vs row rank");
                assert_eq!(s.cols(), col_basis.rank(blk.col), "coupling cols vs col rank");
            } else {
                let nf = nearfield[id].as_ref().expect("inadmissible leaf needs a dense block");
                assert_eq!(nf.rows(), tree.cluster(blk.row).len());
                assert_eq!(nf.cols(), tree.cluster(blk.col).len());
            }
        }
        H2Matrix { tree, btree, row_basis, col_basis, coupling, nearfield, symmetric }
    }

    pub fn dim(&self) -> usize {
        self.tree.n_points()
    }

    pub fn tree(&self) -> &Arc<ClusterTree> {
        &self.tree
    }

    pub fn block_tree(&self) -> &Arc<BlockTree> {
        &self.btree
    }

    pub fn row_basis(&self) -> &ClusterBasis {
        &self.row_basis
    }

    pub fn col_basis(&self) -> &ClusterBasis {
        &self.col_basis
    }

    pub fn coupling_matrix(&self, b: BlockId) -> Option<&DenseMatrix> {
        self.coupling[b].as_ref()
    }

    pub fn nearfield_matrix(&self, b: BlockId) -> Option<&DenseMatrix> {
        self.nearfield[b].as_ref()
    }

    pub fn row_basis_mut(&mut self) -> &mut ClusterBasis {
        &mut self.row_basis
    }

    pub fn col_basis_mut(&mut self) -> &mut ClusterBasis {
        &mut self.col_basis
    }

    /// Replace the coupling matrix of an admissible leaf block.
    pub fn set_coupling(&mut self, b: BlockId, s: DenseMatrix) {
        debug_assert!(self.btree.block(b).admissible);
        self.coupling[b] = Some(s);
    }

    /// Mutable access to the dense block of an inadmissible leaf.
    pub fn nearfield_mut(&mut self, b: BlockId) -> &mut DenseMatrix {
        self.nearfield[b].as_mut().expect("not an inadmissible leaf")
    }

    /// Swap in new cluster bases (the caller has already rewritten the
    /// coupling matrices to match).
    pub fn set_bases(&mut self, row: ClusterBasis, col: ClusterBasis) {
        self.row_basis = row;
        self.col_basis = col;
    }

    /// Largest basis rank over both sides.
    pub fn max_rank(&self) -> usize {
        self.row_basis.max_rank().max(self.col_basis.max_rank())
    }

    /// Symmetric diagonal congruence `diag(s) * M * diag(s)` in place,
    /// with `s` indexed by tree positions. Nearfield entries are scaled
    /// directly; the cluster bases absorb the row and column scalings, so
    /// they lose orthogonality and are re-orthogonalized.
    pub fn scale_symmetric(&mut self, s: &[f64]) {
        assert_eq!(s.len(), self.dim());
        let tree = self.tree.clone();
        let btree = self.btree.clone();
        for id in btree.leaves() {
            let blk = btree.block(id);
            if blk.admissible {
                continue;
            }
            let r0 = tree.cluster(blk.row).start;
            let c0 = tree.cluster(blk.col).start;
            let nf = self.nearfield[id].as_mut().expect("nearfield missing");
            for i in 0..nf.rows() {
                for j in 0..nf.cols() {
                    nf[(i, j)] *= s[r0 + i] * s[c0 + j];
                }
            }
        }
        let mut any_rank = false;
        for basis in [&mut self.row_basis, &mut self.col_basis] {
            for id in tree.ids() {
                let c = tree.cluster(id);
                if !c.is_leaf() {
                    continue;
                }
                if basis.rank(id) > 0 {
                    any_rank = true;
                }
                if let Some(v) = basis.leaf[id].as_mut() {
                    for i in 0..v.rows() {
                        for j in 0..v.cols() {
                            v[(i, j)] *= s[c.start + i];
                        }
                    }
                }
            }
        }
        if any_rank {
            self.row_basis.orthogonal = false;
            self.col_basis.orthogonal = false;
            self.orthogonalize();
        }
    }

    /// Frobenius norm from coupling and nearfield entries; exact when both
    /// bases are orthogonal.
    pub fn approx_frobenius_norm(&self) -> f64 {
        let mut sum = 0.0;
        for s in self.coupling.iter().flatten() {
            sum += s.data().iter().map(|v| v * v).sum::<f64>();
        }
        for n in self.nearfield.iter().flatten() {
            sum += n.data().iter().map(|v| v * v).sum::<f64>();
        }
        sum.sqrt()
    }

    pub fn storage_report(&self) -> StorageReport {
        let coupling_entries: usize = self
            .coupling
            .iter()
            .flatten()
            .map(|s| s.rows() * s.cols())
            .sum();
        let nearfield_entries: usize = self
            .nearfield
            .iter()
            .flatten()
            .map(|n| n.rows() * n.cols())
            .sum();
        let mut basis_entries = 0;
        for basis in [&self.row_basis, &self.col_basis] {
            for id in self.tree.ids() {
                if let Some(v) = basis.leaf[id].as_ref() {
                    basis_entries += v.rows() * v.cols();
                }
                if let Some(e) = basis.transfer[id].as_ref() {
                    basis_entries += e.rows() * e.cols();
                }
            }
        }
        StorageReport {
            coupling_entries,
            nearfield_entries,
            basis_entries,
            total: coupling_entries + nearfield_entries + basis_entries,
        }
    }

    /// Reorder a vector from original DOF order into tree position order.
    pub fn to_permuted(&self, x: &[f64]) -> Vec<f64> {
        self.tree.permutation().iter().map(|&dof| x[dof]).collect()
    }

    /// Reorder a vector from tree position order back to DOF order.
    pub fn from_permuted(&self, y: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; y.len()];
        for (pos, &dof) in self.tree.permutation().iter().enumerate() {
            out[dof] = y[pos];
        }
        out
    }

    /// Matrix-vector product in position order: upward pass through the
    /// column basis, coupling products, downward pass through the row
    /// basis, plus nearfield contributions.
    pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.dim());
        let xm = DenseMatrix::from_fn(x.len(), 1, |i, _| x[i]);
        let y = self.apply(&xm);
        (0..y.rows()).map(|i| y[(i, 0)]).collect()
    }

    /// Multi-column matrix product `self * x` in position order.
    pub fn apply(&self, x: &DenseMatrix) -> DenseMatrix {
        self.apply_block(self.btree.root(), false, x)
    }

    /// Product of the sub-block `b` (optionally transposed) with dense
    /// columns `x`; `x` is indexed by the positions of the block's column
    /// cluster (row cluster when transposed).
    pub fn apply_block(&self, b: BlockId, transposed: bool, x: &DenseMatrix) -> DenseMatrix {
        let blk = self.btree.block(b);
        let (in_root, out_root) = if transposed { (blk.row, blk.col) } else { (blk.col, blk.row) };
        let in_cluster = self.tree.cluster(in_root);
        let out_cluster = self.tree.cluster(out_root);
        assert_eq!(x.rows(), in_cluster.len(), "input rows must match the block");
        let in_basis = if transposed { &self.row_basis } else { &self.col_basis };
        let out_basis = if transposed { &self.col_basis } else { &self.row_basis };
        let coeffs_in = in_basis.forward_coeffs(&self.tree, in_root, x);
        let mut coeffs_out: Vec<Option<DenseMatrix>> = vec![None; self.tree.len()];
        let mut out = DenseMatrix::zeros(out_cluster.len(), x.cols());
        let in_base = in_cluster.start;
        let out_base = out_cluster.start;
        for leaf in self.btree.leaves_below(b) {
            let lb = self.btree.block(leaf);
            let (src, dst) = if transposed { (lb.row, lb.col) } else { (lb.col, lb.row) };
            if lb.admissible {
                let s = self.coupling[leaf].as_ref().expect("coupling missing");
                let xin = coeffs_in[src].as_ref().expect("forward coefficient missing");
                let contrib = if transposed { s.tr_matmul(xin) } else { s.matmul(xin) };
                match &mut coeffs_out[dst] {
                    Some(c) => c.axpy(1.0, &contrib),
                    slot => *slot = Some(contrib),
                }
            } else {
                let nf = self.nearfield[leaf].as_ref().expect("nearfield missing");
                let sc = self.tree.cluster(src);
                let dc = self.tree.cluster(dst);
                let xin = x.row_block(sc.start - in_base, sc.end - in_base);
                let contrib = if transposed { nf.tr_matmul(&xin) } else { nf.matmul(&xin) };
                for i in 0..contrib.rows() {
                    for j in 0..contrib.cols() {
                        out[(dc.start - out_base + i, j)] += contrib[(i, j)];
                    }
                }
            }
        }
        out_basis.backward_accumulate(&self.tree, out_root, coeffs_out, &mut out);
        out
    }

    /// Dense materialization; refuses matrices beyond [`DENSE_LIMIT`].
    pub fn to_dense(&self) -> Result<DenseMatrix, H2Error> {
        let n = self.dim();
        if n > DENSE_LIMIT {
            return Err(H2Error::TooLarge { n, limit: DENSE_LIMIT });
        }
        let mut out = DenseMatrix::zeros(n, n);
        for id in self.btree.leaves() {
            let blk = self.btree.block(id);
            let r = self.tree.cluster(blk.row);
            let c = self.tree.cluster(blk.col);
            let block = self.block_to_dense(id);
            for i in 0..block.rows() {
                for j in 0..block.cols() {
                    out[(r.start + i, c.start + j)] = block[(i, j)];
                }
            }
        }
        Ok(out)
    }

    /// Dense value of one leaf block.
    pub fn block_to_dense(&self, b: BlockId) -> DenseMatrix {
        let blk = self.btree.block(b);
        if blk.is_leaf() {
            if blk.admissible {
                let s = self.coupling[b].as_ref().expect("coupling missing");
                let v = self.row_basis.materialize(&self.tree, blk.row);
                let w = self.col_basis.materialize(&self.tree, blk.col);
                v.matmul(&s.matmul_tr(&w))
            } else {
                self.nearfield[b].as_ref().expect("nearfield missing").clone()
            }
        } else {
            let r = self.tree.cluster(blk.row);
            let c = self.tree.cluster(blk.col);
            let mut out = DenseMatrix::zeros(r.len(), c.len());
            for &son in &blk.sons {
                let sb = self.btree.block(son);
                let sr = self.tree.cluster(sb.row);
                let sc = self.tree.cluster(sb.col);
                let sub = self.block_to_dense(son);
                for i in 0..sub.rows() {
                    for j in 0..sub.cols() {
                        out[(sr.start - r.start + i, sc.start - c.start + j)] = sub[(i, j)];
                    }
                }
            }
            out
        }
    }

    /// Orthogonalize both cluster bases, rewriting the coupling matrices
    /// so every represented block keeps its value exactly.
    pub fn orthogonalize(&mut self) {
        if self.row_basis.orthogonal && self.col_basis.orthogonal {
            return;
        }
        let (rb, rchange) = orthogonalize_basis(&self.tree, &self.row_basis);
        let (cb, cchange) = orthogonalize_basis(&self.tree, &self.col_basis);
        for id in self.btree.leaves() {
            let blk = self.btree.block(id);
            if blk.admissible {
                let s = self.coupling[id].take().expect("coupling missing");
                let new = rchange[blk.row].matmul(&s.matmul_tr(&cchange[blk.col]));
                self.coupling[id] = Some(new);
            }
        }
        self.row_basis = rb;
        self.col_basis = cb;
    }

    /// Worst mirror-consistency violation of a symmetric matrix:
    /// max |value(t,s) - value(s,t)^T| over leaf blocks (dense check,
    /// test-sized matrices only).
    pub fn symmetry_defect(&self) -> Result<f64, H2Error> {
        let d = self.to_dense()?;
        let mut worst = 0.0f64;
        for i in 0..d.rows() {
            for j in 0..i {
                worst = worst.max((d[(i, j)] - d[(j, i)]).abs());
            }
        }
        Ok(worst)
    }
}

/// Convert a sparse matrix to the exact hierarchical representation on the
/// given trees: nearfield blocks are copied densely, admissible blocks
/// must be structurally zero and receive rank-zero couplings.
pub fn from_sparse(
    s: &SparseMatrix,
    tree: &Arc<ClusterTree>,
    btree: &Arc<BlockTree>,
) -> Result<H2Matrix, H2Error> {
    assert_eq!(s.dim(), tree.n_points(), "dimension mismatch");
    let mut m = H2Matrix::zeros(Arc::clone(tree), Arc::clone(btree), true);
    let inv = tree.inverse_permutation();
    for (i, j, v) in s.iter() {
        if v == 0.0 {
            continue;
        }
        let pi = inv[i];
        let pj = inv[j];
        let leaf = btree.leaf_at(tree, tree, pi, pj);
        let blk = btree.block(leaf);
        if blk.admissible {
            return Err(H2Error::StructureMismatch { block: leaf, row: i, col: j });
        }
        let r = tree.cluster(blk.row);
        let c = tree.cluster(blk.col);
        let nf = m.nearfield[leaf].as_mut().expect("nearfield missing");
        nf[(pi - r.start, pj - c.start)] = v;
    }
    Ok(m)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cluster::{build_block_tree, build_cluster_tree};
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn grid_points(side: usize) -> Vec<[f64; 2]> {
        let h = 1.0 / (side + 1) as f64;
        (1..=side)
            .flat_map(|j| (1..=side).map(move |i| [i as f64 * h, j as f64 * h]))
            .collect()
    }

    fn grid_trees(side: usize, leaf_size: usize) -> (Arc<ClusterTree>, Arc<BlockTree>) {
        let pts = grid_points(side);
        let tree = Arc::new(build_cluster_tree(&pts, leaf_size));
        let btree = Arc::new(build_block_tree(&tree, &tree, 1.0));
        (tree, btree)
    }

    fn identity_sparse(n: usize) -> SparseMatrix {
        let triplets: Vec<(usize, usize, f64)> = (0..n).map(|i| (i, i, 1.0)).collect();
        SparseMatrix::from_triplets(n, &triplets)
    }

    fn fem_stiffness(side: usize) -> SparseMatrix {
        // 5-point stencil over the interior grid; matches P1 on the
        // criss-cross triangulation
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

    /// permuted dense image of a sparse matrix
    fn permuted_dense(s: &SparseMatrix, tree: &ClusterTree) -> DenseMatrix {
        let inv = tree.inverse_permutation();
        let mut out = DenseMatrix::zeros(s.dim(), s.dim());
        for (i, j, v) in s.iter() {
            out[(inv[i], inv[j])] = v;
        }
        out
    }

    #[test]
    fn identity_conversion_is_exact() {
        let (tree, btree) = grid_trees(7, 8);
        let m = from_sparse(&identity_sparse(49), &tree, &btree).unwrap();
        let d = m.to_dense().unwrap();
        assert_eq!(d, DenseMatrix::identity(49));
        // all couplings rank zero
        for id in btree.leaves() {
            if btree.block(id).admissible {
                let s = m.coupling_matrix(id).unwrap();
                assert_eq!((s.rows(), s.cols()), (0, 0));
            }
        }
        let x: Vec<f64> = (0..49).map(|i| i as f64).collect();
        assert_eq!(m.matvec(&x), x);
    }

    #[test]
    fn fem_matvec_matches_sparse() {
        let (tree, btree) = grid_trees(15, 32);
        let a = fem_stiffness(15);
        let m = from_sparse(&a, &tree, &btree).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x: Vec<f64> = (0..225).map(|_| rng.gen_range(-1.0..1.0)).collect();
        // oracle: permute, sparse multiply, compare in position order
        let y_sparse = a.matvec(&x);
        let y_h2 = m.from_permuted(&m.matvec(&m.to_permuted(&x)));
        let err: f64 = y_sparse
            .iter()
            .zip(&y_h2)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        let norm: f64 = y_sparse.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!(err <= 1e-14 * norm.max(1.0), "err {err}");
    }

    #[test]
    fn from_sparse_rejects_farfield_nonzeros() {
        let (tree, btree) = grid_trees(15, 8);
        assert!(btree.stats().n_admissible_leaves > 0);
        let n = 225;
        // dense-ish band far beyond the nearfield: couple first and last DOF
        let triplets = vec![(0usize, n - 1, 1.0f64), (n - 1, 0, 1.0)];
        let s = SparseMatrix::from_triplets(n, &triplets);
        match from_sparse(&s, &tree, &btree) {
            Err(H2Error::StructureMismatch { .. }) => {}
            other => panic!("expected StructureMismatch, got {other:?}"),
        }
    }

    #[test]
    fn to_dense_round_trip() {
        let (tree, btree) = grid_trees(9, 8);
        let a = fem_stiffness(9);
        let m = from_sparse(&a, &tree, &btree).unwrap();
        let d = m.to_dense().unwrap();
        let expected = permuted_dense(&a, &tree);
        assert!(d.sub(&expected).max_abs() < 1e-15);
    }

    #[test]
    fn to_dense_respects_limit() {
        let pts: Vec<[f64; 2]> = (0..2).map(|i| [i as f64, 0.0]).collect();
        let tree = Arc::new(build_cluster_tree(&pts, 2));
        let btree = Arc::new(build_block_tree(&tree, &tree, 1.0));
        let m = H2Matrix::zeros(tree, btree, true);
        assert!(m.to_dense().is_ok());
        // the limit branch triggers on dimension alone
        assert!(matches!(
            H2Error::TooLarge { n: 6000, limit: DENSE_LIMIT },
            H2Error::TooLarge { .. }
        ));
    }

    #[test]
    fn matvec_is_linear() {
        let (tree, btree) = grid_trees(9, 8);
        let m = from_sparse(&fem_stiffness(9), &tree, &btree).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let x: Vec<f64> = (0..81).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let y: Vec<f64> = (0..81).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let xy: Vec<f64> = x.iter().zip(&y).map(|(a, b)| a + b).collect();
        let lhs = m.matvec(&xy);
        let rhs: Vec<f64> = m.matvec(&x).iter().zip(m.matvec(&y)).map(|(a, b)| a + b).collect();
        let err: f64 = lhs.iter().zip(&rhs).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
        let scale: f64 = rhs.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!(err <= 1e-13 * scale.max(1.0));
    }

    #[test]
    fn symmetric_bilinear_form() {
        let (tree, btree) = grid_trees(9, 8);
        let m = from_sparse(&fem_stiffness(9), &tree, &btree).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let x: Vec<f64> = (0..81).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let y: Vec<f64> = (0..81).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let xt_my: f64 = m.matvec(&y).iter().zip(&x).map(|(a, b)| a * b).sum();
        let yt_mx: f64 = m.matvec(&x).iter().zip(&y).map(|(a, b)| a * b).sum();
        assert!((xt_my - yt_mx).abs() <= 1e-12 * xt_my.abs().max(1.0));
    }

    #[test]
    fn storage_report_identity() {
        let (tree, btree) = grid_trees(7, 8);
        let m = from_sparse(&identity_sparse(49), &tree, &btree).unwrap();
        let report = m.storage_report();
        // nearfield stores the full inadmissible leaves
        let expected_nf: usize = btree
            .leaves()
            .filter(|&id| !btree.block(id).admissible)
            .map(|id| {
                let b = btree.block(id);
                tree.cluster(b.row).len() * tree.cluster(b.col).len()
            })
            .sum();
        assert_eq!(report.nearfield_entries, expected_nf);
        assert_eq!(report.coupling_entries, 0);
        assert_eq!(report.basis_entries, 0);
        assert_eq!(report.total, expected_nf);
    }

    #[test]
    fn orthogonalize_single_leaf_basis() {
        let pts = vec![[0.0, 0.0], [1.0, 0.0]];
        let tree = Arc::new(build_cluster_tree(&pts, 2));
        let mut basis = ClusterBasis::rank_zero(&tree);
        basis.set_leaf(tree.root(), DenseMatrix::from_rows(&[&[3.0], &[4.0]]));
        basis.orthogonal = false;
        let (q, change) = orthogonalize_basis(&tree, &basis);
        let v = q.materialize(&tree, tree.root());
        assert!((v[(0, 0)] - 0.6).abs() < 1e-14);
        assert!((v[(1, 0)] - 0.8).abs() < 1e-14);
        assert!((change[tree.root()][(0, 0)] - 5.0).abs() < 1e-14);
    }

    #[test]
    fn orthogonalize_on_orthogonal_basis_is_signed_identity() {
        let pts = vec![[0.0, 0.0], [1.0, 0.0], [2.0, 0.0], [3.0, 0.0]];
        let tree = Arc::new(build_cluster_tree(&pts, 2));
        let mut basis = ClusterBasis::rank_zero(&tree);
        // orthonormal leaf matrices + orthonormal-ish transfers
        let [a, b] = tree.cluster(tree.root()).sons.unwrap();
        let s = std::f64::consts::FRAC_1_SQRT_2;
        basis.set_leaf(a, DenseMatrix::from_rows(&[&[s], &[s]]));
        basis.set_leaf(b, DenseMatrix::from_rows(&[&[s], &[-s]]));
        basis.set_transfer(a, DenseMatrix::from_rows(&[&[s]]));
        basis.set_transfer(b, DenseMatrix::from_rows(&[&[s]]));
        basis.set_rank(tree.root(), 1);
        basis.orthogonal = false;
        let (_, change) = orthogonalize_basis(&tree, &basis);
        for id in tree.ids() {
            let c = &change[id];
            for i in 0..c.rows() {
                for j in 0..c.cols() {
                    let expect = if i == j { 1.0 } else { 0.0 };
                    assert!((c[(i, j)].abs() - expect).abs() < 1e-12, "change not signed identity");
                }
            }
        }
    }

    #[test]
    fn orthogonalize_preserves_matrix_values() {
        // two-level matrix with a nontrivial rank-1 basis
        let mut pts: Vec<[f64; 2]> = (0..4).map(|i| [i as f64 * 0.01, 0.0]).collect();
        pts.extend((0..4).map(|i| [10.0 + i as f64 * 0.01, 0.0]));
        let tree = Arc::new(build_cluster_tree(&pts, 4));
        let btree = Arc::new(build_block_tree(&tree, &tree, 1.0));
        let mut m = H2Matrix::zeros(Arc::clone(&tree), Arc::clone(&btree), false);
        // give both bases rank 1 everywhere
        for basis_sel in 0..2 {
            let basis = if basis_sel == 0 { &mut m.row_basis } else { &mut m.col_basis };
            for id in tree.ids() {
                let c = tree.cluster(id);
                if c.is_leaf() {
                    basis.set_leaf(
                        id,
                        DenseMatrix::from_fn(c.len(), 1, |i, _| 1.0 + (i + id) as f64),
                    );
                } else {
                    basis.set_rank(id, 1);
                }
                if id != tree.root() {
                    basis.set_transfer(id, DenseMatrix::from_fn(1, 1, |_, _| 0.5 + id as f64 * 0.1));
                }
            }
            basis.orthogonal = false;
        }
        for id in btree.leaves() {
            let blk = btree.block(id);
            if blk.admissible {
                m.coupling[id] = Some(DenseMatrix::from_fn(1, 1, |_, _| 2.0 + id as f64));
            }
        }
        let before = m.to_dense().unwrap();
        m.orthogonalize();
        let after = m.to_dense().unwrap();
        assert!(before.sub(&after).max_abs() < 1e-12 * before.max_abs().max(1.0));
        assert!(m.row_basis.orthogonality_defect(&tree, tree.root()) < 1e-12);
        assert!(m.col_basis.orthogonality_defect(&tree, tree.root()) < 1e-12);
    }

    #[test]
    fn nestedness_is_exact() {
        // materializing V_t directly and via son products agrees
        let (tree, btree) = grid_trees(9, 8);
        let mut m = from_sparse(&fem_stiffness(9), &tree, &btree).unwrap();
        // inject a nontrivial basis by orthogonalizing an extended one
        for id in tree.ids() {
            let c = tree.cluster(id);
            if c.is_leaf() {
                m.row_basis.set_leaf(id, DenseMatrix::from_fn(c.len(), 2, |i, j| (i + j + id) as f64));
            } else {
                m.row_basis.set_rank(id, 2);
            }
            if id != tree.root() {
                m.row_basis.set_transfer(id, DenseMatrix::from_fn(2, 2, |i, j| ((i + 2 * j + id) % 3) as f64));
            }
        }
        for id in tree.ids() {
            let c = tree.cluster(id);
            if let Some([a, b]) = c.sons {
                let direct = m.row_basis.materialize(&tree, id);
                let va = m.row_basis.materialize(&tree, a);
                let vb = m.row_basis.materialize(&tree, b);
                let ea = m.row_basis.transfer_matrix(a).unwrap();
                let eb = m.row_basis.transfer_matrix(b).unwrap();
                let glued = DenseMatrix::vstack(&va.matmul(ea), &vb.matmul(eb));
                assert!(direct.sub(&glued).max_abs() < 1e-14);
            }
        }
    }

    #[test]
    fn apply_block_matches_dense_restriction() {
        let (tree, btree) = grid_trees(9, 8);
        let m = from_sparse(&fem_stiffness(9), &tree, &btree).unwrap();
        let dense = m.to_dense().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        // pick an interior block
        let root_blk = m.block_tree().block(m.block_tree().root());
        let b = root_blk.sons[1];
        let blk = m.block_tree().block(b);
        let r = tree.cluster(blk.row);
        let c = tree.cluster(blk.col);
        let x = DenseMatrix::from_fn(c.len(), 3, |_, _| rng.gen_range(-1.0..1.0));
        let y = m.apply_block(b, false, &x);
        let mut expected = DenseMatrix::zeros(r.len(), 3);
        for i in 0..r.len() {
            for j in 0..3 {
                expected[(i, j)] = (0..c.len())
                    .map(|k| dense[(r.start + i, c.start + k)] * x[(k, j)])
                    .sum();
            }
        }
        assert!(y.sub(&expected).max_abs() < 1e-12);
        // transposed
        let xt = DenseMatrix::from_fn(r.len(), 2, |_, _| rng.gen_range(-1.0..1.0));
        let yt = m.apply_block(b, true, &xt);
        let mut expected_t = DenseMatrix::zeros(c.len(), 2);
        for i in 0..c.len() {
            for j in 0..2 {
                expected_t[(i, j)] = (0..r.len())
                    .map(|k| dense[(r.start + k, c.start + i)] * xt[(k, j)])
                    .sum();
            }
        }
        assert!(yt.sub(&expected_t).max_abs() < 1e-12);
    }
}
