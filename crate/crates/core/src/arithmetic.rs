//! Hierarchical arithmetic built on low-rank updates: global/local update
//! with recompression, multiplication, triangular solves and the LDL^T
//! factorization.
//!
//! Every operation funnels into one primitive: add a low-rank matrix
//! `X Y^T` to the sub-block rooted at `b0`. The update is first written
//! exactly by widening the bases inside the two affected cluster subtrees,
//! then the subtrees are re-orthogonalized and projected onto adaptive
//! bases with blockwise error control. Coupling matrices of blocks outside
//! the sub-block are kept consistent through per-cluster block lists.

use std::collections::HashMap;

use thiserror::Error;

use crate::cluster::{BlockId, BlockTree, ClusterId, ClusterTree};
use crate::compression::{
    build_adaptive_basis_subtree, orthogonalize_basis_subtree, recompute_weights_subtree, Side,
    WeightSet,
};
use crate::dense::{self, DenseMatrix};
use crate::h2::{H2Matrix, TruncationControl, TruncationMode};


#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ArithError {
    /// An LDL^T pivot at the given matrix position (permuted order) fell
    /// below the breakdown threshold; the caller perturbs the shift.
    #[error("LDL^T pivot breakdown at position {position}")]
    PivotBreakdown { position: usize },
    #[error("block {0} is not part of the block tree")]
    InvalidBlock(BlockId),
}

// ── block lists ─────────────────────────────────────────────────────

/// For every cluster, the admissible leaf blocks attached to it as row or
/// column cluster. Local updates use these lists to reach coupling
/// matrices of blocks outside the updated sub-block.
#[derive(Debug, Clone)]
pub struct BlockLists {
    row: Vec<Vec<BlockId>>,
    col: Vec<Vec<BlockId>>,
}

impl BlockLists {
    pub fn build(btree: &BlockTree) -> BlockLists {
        let mut row: Vec<Vec<BlockId>> = Vec::new();
        let mut col: Vec<Vec<BlockId>> = Vec::new();
        for id in btree.ids() {
            let b = btree.block(id);
            let need = b.row.max(b.col) + 1;
            if row.len() < need {
                row.resize(need, Vec::new());
                col.resize(need, Vec::new());
            }
            if b.is_leaf() && b.admissible {
                row[b.row].push(id);
                col[b.col].push(id);
            }
        }
        BlockLists { row, col }
    }

    pub fn row(&self, t: ClusterId) -> &[BlockId] {
        self.row.get(t).map_or(&[], |v| v.as_slice())
    }

    pub fn col(&self, s: ClusterId) -> &[BlockId] {
        self.col.get(s).map_or(&[], |v| v.as_slice())
    }
}

// ── update context ──────────────────────────────────────────────────

/// Working state for repeated updates of one matrix: block lists plus
/// weight matrices for both sides, maintained across local updates
/// (recomputed only inside the touched subtrees).
#[derive(Debug, Clone)]
pub struct UpdateCtx {
    pub control: TruncationControl,
    pub lists: BlockLists,
    pub fathers: Vec<Option<ClusterId>>,
    pub row_weights: WeightSet,
    pub col_weights: WeightSet,
}

impl UpdateCtx {
    /// Prepare lists and weights for `m`. The bases must be orthogonal
    /// (they are for any matrix produced by this module or `from_sparse`).
    pub fn build(m: &H2Matrix, control: &TruncationControl) -> UpdateCtx {
        assert!(
            m.row_basis().orthogonal && m.col_basis().orthogonal,
            "orthogonalize before preparing an update context"
        );
        let lists = BlockLists::build(m.block_tree());
        let fathers = m.tree().fathers();
        let weighted = control.mode == TruncationMode::Weighted;
        let mut row_weights = WeightSet::empty(m.tree(), weighted);
        let mut col_weights = WeightSet::empty(m.tree(), weighted);
        recompute_weights_subtree(m, Side::Row, &lists, &fathers, control, &mut row_weights, m.tree().root());
        recompute_weights_subtree(m, Side::Col, &lists, &fathers, control, &mut col_weights, m.tree().root());
        UpdateCtx { control: *control, lists, fathers, row_weights, col_weights }
    }
}

fn block_diag(a: &DenseMatrix, k: usize) -> DenseMatrix {
    let mut out = DenseMatrix::zeros(a.rows() + k, a.cols() + k);
    for i in 0..a.rows() {
        for j in 0..a.cols() {
            out[(i, j)] = a[(i, j)];
        }
    }
    for i in 0..k {
        out[(a.rows() + i, a.cols() + i)] = 1.0;
    }
    out
}

/// Exact representation of `C|_{b0} + X Y^T`: widen the bases inside the
/// row and column subtrees, pad the transfer matrices with identity
/// blocks, extend the couplings attached to the subtrees and add the dense
/// part into the nearfield leaves below `b0`.
fn extend_with_lowrank(c: &mut H2Matrix, b0: BlockId, x: &DenseMatrix, y: &DenseMatrix, lists: &BlockLists) {
    let tree = c.tree().clone();
    let btree = c.block_tree().clone();
    let blk0 = btree.block(b0);
    let (t0, s0) = (blk0.row, blk0.col);
    let k = x.cols();
    let (t0s, t0e) = (tree.cluster(t0).start, tree.cluster(t0).end);
    let (s0s, s0e) = (tree.cluster(s0).start, tree.cluster(s0).end);
    let in_row = |u: ClusterId| {
        let cu = tree.cluster(u);
        t0s <= cu.start && cu.end <= t0e
    };
    let in_col = |u: ClusterId| {
        let cu = tree.cluster(u);
        s0s <= cu.start && cu.end <= s0e
    };

    for (sub_root, base, data, side) in [(t0, t0s, x, Side::Row), (s0, s0s, y, Side::Col)] {
        let basis = match side {
            Side::Row => c.row_basis_mut(),
            Side::Col => c.col_basis_mut(),
        };
        for u in tree.subtree(sub_root) {
            let cu = tree.cluster(u);
            if cu.is_leaf() {
                let v = basis.leaf_matrix(u).expect("leaf matrix missing");
                let part = data.row_block(cu.start - base, cu.end - base);
                basis.set_leaf(u, DenseMatrix::hstack(v, &part));
            } else {
                basis.set_rank(u, basis.rank(u) + k);
            }
            if u != sub_root {
                let e = basis.transfer_matrix(u).expect("transfer missing").clone();
                basis.set_transfer(u, block_diag(&e, k));
            }
        }
        // the widened part vanishes outside the subtree
        if let Some(e) = basis.transfer_matrix(sub_root).cloned() {
            let pad = DenseMatrix::zeros(k, e.cols());
            basis.set_transfer(sub_root, DenseMatrix::vstack(&e, &pad));
        }
        basis.orthogonal = false;
    }

    // couplings attached to the row subtree
    for u in tree.subtree(t0) {
        for &b in lists.row(u) {
            let blk = btree.block(b);
            let s_old = c.coupling_matrix(b).expect("coupling missing").clone();
            let extended = if in_col(blk.col) {
                block_diag(&s_old, k)
            } else {
                DenseMatrix::vstack(&s_old, &DenseMatrix::zeros(k, s_old.cols()))
            };
            c.set_coupling(b, extended);
        }
    }
    // couplings attached to the column subtree only
    for v in tree.subtree(s0) {
        for &b in lists.col(v) {
            let blk = btree.block(b);
            if in_row(blk.row) {
                continue; // handled above
            }
            let s_old = c.coupling_matrix(b).expect("coupling missing").clone();
            let pad = DenseMatrix::zeros(s_old.rows(), k);
            c.set_coupling(b, DenseMatrix::hstack(&s_old, &pad));
        }
    }
    // dense part inside the sub-block
    for leaf in btree.leaves_below(b0) {
        let blk = btree.block(leaf);
        if blk.admissible {
            continue;
        }
        let cr = tree.cluster(blk.row);
        let cc = tree.cluster(blk.col);
        let xp = x.row_block(cr.start - t0s, cr.end - t0s);
        let yp = y.row_block(cc.start - s0s, cc.end - s0s);
        let nf = c.nearfield_mut(leaf);
        nf.axpy(1.0, &xp.matmul_tr(&yp));
    }
}

fn apply_row_changes(c: &mut H2Matrix, lists: &BlockLists, changes: &[(ClusterId, DenseMatrix)]) {
    for (u, r) in changes {
        for &b in lists.row(*u) {
            let s = c.coupling_matrix(b).expect("coupling missing");
            let projected = r.matmul(s);
            c.set_coupling(b, projected);
        }
    }
}

fn apply_col_changes(c: &mut H2Matrix, lists: &BlockLists, changes: &[(ClusterId, DenseMatrix)]) {
    for (v, r) in changes {
        for &b in lists.col(*v) {
            let s = c.coupling_matrix(b).expect("coupling missing");
            let projected = s.matmul_tr(r);
            c.set_coupling(b, projected);
        }
    }
}

/// Add `X Y^T` to the sub-block `b0` of `c` with recompression.
///
/// `x` spans the rows of `b0`'s row cluster, `y` the rows of its column
/// cluster (positions, block-local). The bases outside the two subtrees
/// stay untouched except for the transfer matrices at the subtree roots;
/// coupling matrices of every block attached to the subtrees are updated
/// through the block lists, and the weights in `ctx` are recomputed inside
/// the subtrees so further updates can reuse them.
pub fn add_lowrank_local(
    c: &mut H2Matrix,
    ctx: &mut UpdateCtx,
    b0: BlockId,
    x: &DenseMatrix,
    y: &DenseMatrix,
) -> Result<(), ArithError> {
    if b0 >= c.block_tree().len() {
        return Err(ArithError::InvalidBlock(b0));
    }
    let tree = c.tree().clone();
    let btree = c.block_tree().clone();
    let blk0 = btree.block(b0);
    let (t0, s0) = (blk0.row, blk0.col);
    assert_eq!(x.rows(), tree.cluster(t0).len(), "X rows must span the row cluster");
    assert_eq!(y.rows(), tree.cluster(s0).len(), "Y rows must span the column cluster");
    assert_eq!(x.cols(), y.cols(), "X and Y must have equal rank");
    if x.cols() == 0 {
        return Ok(());
    }
    debug_assert!(c.row_basis().orthogonal && c.col_basis().orthogonal);

    // exact widened representation
    extend_with_lowrank(c, b0, x, y, &ctx.lists);

    // restore orthogonality inside the subtrees (exact)
    let rchg = orthogonalize_basis_subtree(&tree, c.row_basis_mut(), t0);
    apply_row_changes(c, &ctx.lists, &rchg);
    let cchg = orthogonalize_basis_subtree(&tree, c.col_basis_mut(), s0);
    apply_col_changes(c, &ctx.lists, &cchg);

    // weights for the widened state, then adaptive bases, then projection
    recompute_weights_subtree(c, Side::Row, &ctx.lists, &ctx.fathers, &ctx.control, &mut ctx.row_weights, t0);
    recompute_weights_subtree(c, Side::Col, &ctx.lists, &ctx.fathers, &ctx.control, &mut ctx.col_weights, s0);
    let rchg = build_adaptive_basis_subtree(&tree, c.row_basis_mut(), &ctx.row_weights, &ctx.control, t0);
    let cchg = build_adaptive_basis_subtree(&tree, c.col_basis_mut(), &ctx.col_weights, &ctx.control, s0);
    apply_row_changes(c, &ctx.lists, &rchg);
    apply_col_changes(c, &ctx.lists, &cchg);

    // leave the maintained weights valid for the projected state
    recompute_weights_subtree(c, Side::Row, &ctx.lists, &ctx.fathers, &ctx.control, &mut ctx.row_weights, t0);
    recompute_weights_subtree(c, Side::Col, &ctx.lists, &ctx.fathers, &ctx.control, &mut ctx.col_weights, s0);
    Ok(())
}

/// Global low-rank update `C += X Y^T` (the local update at the root
/// block), building a fresh context.
pub fn add_lowrank_global(
    c: &mut H2Matrix,
    x: &DenseMatrix,
    y: &DenseMatrix,
    control: &TruncationControl,
) -> Result<(), ArithError> {
    c.orthogonalize();
    let mut ctx = UpdateCtx::build(c, control);
    add_lowrank_local(c, &mut ctx, c.block_tree().root(), x, y)
}

// ── multiplication ──────────────────────────────────────────────────

/// Second factor of a product: either a foreign matrix or the target
/// itself (needed by the forward substitution, which multiplies already
/// solved blocks of the matrix it is rewriting).
#[derive(Clone, Copy)]
pub enum Factor<'a> {
    Ext(&'a H2Matrix),
    Slf,
}

impl<'a> Factor<'a> {
    fn resolve<'b>(&'b self, c: &'b H2Matrix) -> &'b H2Matrix {
        match self {
            Factor::Ext(m) => m,
            Factor::Slf => c,
        }
    }
}

/// Row-scale `m` by `d[range.start + i]` (global position indexing).
fn scale_rows_by(m: &DenseMatrix, d: &[f64], start: usize) -> DenseMatrix {
    let mut out = m.clone();
    for i in 0..out.rows() {
        let f = d[start + i];
        for j in 0..out.cols() {
            out[(i, j)] *= f;
        }
    }
    out
}

struct ProductPiece {
    /// row cluster of the piece
    t: ClusterId,
    /// column cluster of the piece
    s: ClusterId,
    x: DenseMatrix,
    y: DenseMatrix,
}

/// Low-rank factors of `op(A_sub) * diag(d) * op(B_sub)` where at least
/// one factor block is a leaf.
#[allow(clippy::too_many_arguments)]
fn low_rank_product(
    c: &H2Matrix,
    a: &H2Matrix,
    a_block: BlockId,
    a_trans: bool,
    mid_scale: Option<&[f64]>,
    b: Factor,
    b_block: BlockId,
    b_trans: bool,
) -> ProductPiece {
    let bm = b.resolve(c);
    let tree = a.tree();
    let ab = a.block_tree().block(a_block);
    let bb = bm.block_tree().block(b_block);
    let (t_cur, m_cur) = if a_trans { (ab.col, ab.row) } else { (ab.row, ab.col) };
    let (m_b, s_cur) = if b_trans { (bb.col, bb.row) } else { (bb.row, bb.col) };
    debug_assert_eq!(m_cur, m_b, "middle clusters must agree");
    let mid_start = tree.cluster(m_cur).start;
    let scaled = |m: &DenseMatrix| match mid_scale {
        Some(d) => scale_rows_by(m, d, mid_start),
        None => m.clone(),
    };
    if ab.is_leaf() {
        if ab.admissible {
            let s = a.coupling_matrix(a_block).expect("coupling missing");
            let v = a.row_basis().materialize(tree, ab.row);
            let w = a.col_basis().materialize(tree, ab.col);
            let (x, mid_vectors) = if a_trans {
                // value used: W S^T V^T
                (w.matmul_tr(s), v)
            } else {
                (v.matmul(s), w)
            };
            let y = bm.apply_block(b_block, !b_trans, &scaled(&mid_vectors));
            ProductPiece { t: t_cur, s: s_cur, x, y }
        } else {
            let n = a.nearfield_matrix(a_block).expect("nearfield missing");
            let x = if a_trans { n.transpose() } else { n.clone() };
            let mid_len = tree.cluster(m_cur).len();
            let eye = scaled(&DenseMatrix::identity(mid_len));
            let y = bm.apply_block(b_block, !b_trans, &eye);
            ProductPiece { t: t_cur, s: s_cur, x, y }
        }
    } else {
        debug_assert!(bb.is_leaf(), "base case requires a leaf factor");
        if bb.admissible {
            let s = bm.coupling_matrix(b_block).expect("coupling missing");
            let v = bm.row_basis().materialize(tree, bb.row);
            let w = bm.col_basis().materialize(tree, bb.col);
            if b_trans {
                // value used: W S^T V^T — fold S^T into X
                let xa = a.apply_block(a_block, a_trans, &scaled(&w));
                ProductPiece { t: t_cur, s: s_cur, x: xa.matmul_tr(s), y: v }
            } else {
                let xa = a.apply_block(a_block, a_trans, &scaled(&v));
                ProductPiece { t: t_cur, s: s_cur, x: xa.matmul(s), y: w }
            }
        } else {
            let n = bm.nearfield_matrix(b_block).expect("nearfield missing");
            let nb = if b_trans { n.transpose() } else { n.clone() };
            let x = a.apply_block(a_block, a_trans, &scaled(&nb));
            let y = DenseMatrix::identity(tree.cluster(s_cur).len());
            ProductPiece { t: t_cur, s: s_cur, x, y }
        }
    }
}

/// Strip the numerically dead tail of a product piece `X Y^T`, dropping
/// singular values whose tail stays below `delta * ||piece||_F`.
/// Dense-leaf products enter with rank = leaf size but decay fast; this
/// keeps the widened ranks near the true ones.
///
/// A cheap Gram screen first estimates whether a cut exists at all (the
/// squared condition number is fine for a yes/no answer). The actual
/// truncation runs through Householder QR of both factors: the kept
/// directions feed basis computations downstream, so they must be
/// accurate to machine precision, not to its square root.
fn compress_piece(x: DenseMatrix, y: DenseMatrix, delta: f64) -> (DenseMatrix, DenseMatrix) {
    let k = x.cols();
    if k <= 4 {
        return (x, y);
    }
    // screen: singular value estimates from the small Gram eigenvalues
    let gram_sigma2 = |m: &DenseMatrix| -> Vec<f64> {
        let g = m.tr_matmul(m);
        dense::sym_eig(&g)
    };
    let sx = gram_sigma2(&x);
    let sy = gram_sigma2(&y);
    // sigma_i(X Y^T) <= sigma_i(X) * sigma_max(Y): a conservative bound on
    // how many directions could survive the cut
    let ymax = sy.last().copied().unwrap_or(0.0).max(0.0).sqrt();
    let total2: f64 = sx.iter().map(|v| v.max(0.0)).sum::<f64>() * ymax * ymax;
    let threshold2 = delta * delta * total2;
    let mut tail2 = 0.0;
    let mut could_keep = k;
    for i in 0..k {
        tail2 += sx[i].max(0.0) * ymax * ymax;
        if tail2 > threshold2 {
            break;
        }
        could_keep = k - i - 1;
    }
    if could_keep + 2 >= k {
        return (x, y); // no worthwhile cut
    }
    // stable path: QR both factors, SVD the small core
    let (qx, rx) = dense::thin_qr(&x);
    let (qy, ry) = dense::thin_qr(&y);
    let core = rx.matmul_tr(&ry);
    let (u, sigma, v) = dense::svd(&core);
    let total: f64 = sigma.iter().map(|s| s * s).sum::<f64>();
    let threshold = delta * delta * total;
    let mut tail = 0.0;
    let mut keep = sigma.len();
    for i in (0..sigma.len()).rev() {
        tail += sigma[i] * sigma[i];
        if tail > threshold {
            break;
        }
        keep = i;
    }
    if keep >= k {
        return (x, y);
    }
    let mut us = u.take_cols(keep);
    for i in 0..us.rows() {
        for j in 0..keep {
            us[(i, j)] *= sigma[j];
        }
    }
    (qx.matmul(&us), qy.matmul(&v.take_cols(keep)))
}

/// Zero-pad `m` (rows over cluster `from`) onto the rows of cluster `to`.
fn pad_rows(m: DenseMatrix, tree: &ClusterTree, from: ClusterId, to: ClusterId) -> DenseMatrix {
    if from == to {
        return m;
    }
    let cf = tree.cluster(from);
    let ct = tree.cluster(to);
    let mut out = DenseMatrix::zeros(ct.len(), m.cols());
    for i in 0..m.rows() {
        for j in 0..m.cols() {
            out[(cf.start - ct.start + i, j)] = m[(i, j)];
        }
    }
    out
}

/// `C|_{c_block} += alpha * op(A|_{a_block}) * diag(d) * op(B|_{b_block})`,
/// recursing on the shared cluster structure and applying leaf products as
/// local low-rank updates.
#[allow(clippy::too_many_arguments)]
pub fn multiply_sub(
    c: &mut H2Matrix,
    ctx: &mut UpdateCtx,
    c_block: BlockId,
    alpha: f64,
    a: &H2Matrix,
    a_block: BlockId,
    a_trans: bool,
    mid_scale: Option<&[f64]>,
    b: Factor,
    b_block: BlockId,
    b_trans: bool,
) -> Result<(), ArithError> {
    let btree = c.block_tree().clone();
    let tree = c.tree().clone();
    let (a_is_leaf, b_is_leaf) = {
        let bm = b.resolve(c);
        (a.block_tree().block(a_block).is_leaf(), bm.block_tree().block(b_block).is_leaf())
    };
    if a_is_leaf || b_is_leaf {
        let piece = low_rank_product(c, a, a_block, a_trans, mid_scale, b, b_block, b_trans);
        if piece.x.cols() == 0 {
            return Ok(());
        }
        let (px, py) = compress_piece(piece.x, piece.y, 1e-2 * ctx.control.eps);
        if px.cols() == 0 {
            return Ok(());
        }
        let target = btree.block(c_block);
        let mut x = pad_rows(px, &tree, piece.t, target.row);
        let y = pad_rows(py, &tree, piece.s, target.col);
        x.scale(alpha);
        return add_lowrank_local(c, ctx, c_block, &x, &y);
    }
    // both factors subdivide: pair their sons through the middle cluster
    let a_sons = a.block_tree().block(a_block).sons.clone();
    let b_sons = {
        let bm = b.resolve(c);
        bm.block_tree().block(b_block).sons.clone()
    };
    let c_sons = btree.block(c_block).sons.clone();
    for &ason in &a_sons {
        let abk = a.block_tree().block(ason);
        let (t_new, m_new) = if a_trans { (abk.col, abk.row) } else { (abk.row, abk.col) };
        for &bson in &b_sons {
            let (m2, s_new) = {
                let bm = b.resolve(c);
                let bbk = bm.block_tree().block(bson);
                if b_trans {
                    (bbk.col, bbk.row)
                } else {
                    (bbk.row, bbk.col)
                }
            };
            if m2 != m_new {
                continue;
            }
            let c_target = if c_sons.is_empty() {
                c_block
            } else {
                *c_sons
                    .iter()
                    .find(|&&cs| {
                        let cb = btree.block(cs);
                        cb.row == t_new && cb.col == s_new
                    })
                    .expect("block trees are built over one cluster tree")
            };
            multiply_sub(c, ctx, c_target, alpha, a, ason, a_trans, mid_scale, b, bson, b_trans)?;
        }
    }
    Ok(())
}

/// `C += alpha * A * B` over the full matrices.
pub fn multiply_accum(
    c: &mut H2Matrix,
    ctx: &mut UpdateCtx,
    alpha: f64,
    a: &H2Matrix,
    b: &H2Matrix,
) -> Result<(), ArithError> {
    let rc = c.block_tree().root();
    let ra = a.block_tree().root();
    let rb = b.block_tree().root();
    multiply_sub(c, ctx, rc, alpha, a, ra, false, None, Factor::Ext(b), rb, false)
}

// ── triangular and diagonal solves ──────────────────────────────────

/// Block-tree navigation tables used by the factorization: the diagonal
/// block of every cluster and the mirror of every block.
pub struct TreeMaps {
    diag: Vec<Option<BlockId>>,
    mirror: Vec<BlockId>,
}

impl TreeMaps {
    pub fn build(tree: &ClusterTree, btree: &BlockTree) -> TreeMaps {
        let mut diag = vec![None; tree.len()];
        let mut index: HashMap<(ClusterId, ClusterId), BlockId> = HashMap::new();
        for id in btree.ids() {
            let b = btree.block(id);
            index.insert((b.row, b.col), id);
            if b.row == b.col {
                diag[b.row] = Some(id);
            }
        }
        let mut mirror = vec![0; btree.len()];
        for id in btree.ids() {
            let b = btree.block(id);
            mirror[id] = *index
                .get(&(b.col, b.row))
                .expect("block tree of a symmetric pencil must be structurally symmetric");
        }
        TreeMaps { diag, mirror }
    }

    pub fn diag_block(&self, t: ClusterId) -> BlockId {
        self.diag[t].expect("every cluster owns a diagonal block")
    }

    pub fn mirror(&self, b: BlockId) -> BlockId {
        self.mirror[b]
    }
}

fn block_son(btree: &BlockTree, parent: BlockId, row: ClusterId, col: ClusterId) -> BlockId {
    *btree
        .block(parent)
        .sons
        .iter()
        .find(|&&s| {
            let b = btree.block(s);
            b.row == row && b.col == col
        })
        .expect("missing block son")
}

/// Forward substitution with a dense unit lower triangular factor,
/// overwriting `x` column by column.
fn forward_subst_unit(l: &DenseMatrix, x: &mut DenseMatrix) {
    let n = l.rows();
    for j in 0..x.cols() {
        for i in 0..n {
            let mut v = x[(i, j)];
            for k in 0..i {
                v -= l[(i, k)] * x[(k, j)];
            }
            x[(i, j)] = v;
        }
    }
}

/// Solve `L_{tt} Z = X` for dense columns `X` over the cluster `t`, using
/// the hierarchical lower factor.
pub fn solve_lower_vec(l: &H2Matrix, maps: &TreeMaps, t: ClusterId, x: &DenseMatrix) -> DenseMatrix {
    let tree = l.tree();
    let c = tree.cluster(t);
    match c.sons {
        None => {
            let lb = l.nearfield_matrix(maps.diag_block(t)).expect("diag leaf missing");
            let mut z = x.clone();
            forward_subst_unit(lb, &mut z);
            z
        }
        Some([t1, t2]) => {
            let n1 = tree.cluster(t1).len();
            let x1 = x.row_block(0, n1);
            let mut x2 = x.row_block(n1, x.rows());
            let z1 = solve_lower_vec(l, maps, t1, &x1);
            let b21 = block_son(l.block_tree(), maps.diag_block(t), t2, t1);
            x2.axpy(-1.0, &l.apply_block(b21, false, &z1));
            let z2 = solve_lower_vec(l, maps, t2, &x2);
            DenseMatrix::vstack(&z1, &z2)
        }
    }
}

/// Forward substitution on a block column: overwrite the block `b` of `w`
/// (row cluster `t`) with `L_{tt}^{-1} W|_b`, where `L` is unit lower
/// triangular on its block structure.
pub fn solve_lower_unit(
    l: &H2Matrix,
    maps: &TreeMaps,
    w: &mut H2Matrix,
    ctx: &mut UpdateCtx,
    t: ClusterId,
    b: BlockId,
) -> Result<(), ArithError> {
    let tree = w.tree().clone();
    let btree = w.block_tree().clone();
    let blk = btree.block(b);
    debug_assert_eq!(blk.row, t, "solve target must sit in the diagonal row");
    let tc = tree.cluster(t);
    if blk.is_leaf() && blk.admissible {
        // low-rank leaf: (L^{-1} V_t - V_t) S W_s^T is a low-rank update
        let v = w.row_basis().materialize(&tree, t);
        let z = solve_lower_vec(l, maps, t, &v);
        let s = w.coupling_matrix(b).expect("coupling missing");
        let dx = z.sub(&v).matmul(s);
        let dy = w.col_basis().materialize(&tree, blk.col);
        return add_lowrank_local(w, ctx, b, &dx, &dy);
    }
    match tc.sons {
        None => {
            if blk.is_leaf() {
                // dense leaf: in-place dense forward substitution
                let lb = l
                    .nearfield_matrix(maps.diag_block(t))
                    .expect("diag leaf missing")
                    .clone();
                let nf = w.nearfield_mut(b);
                forward_subst_unit(&lb, nf);
                Ok(())
            } else {
                // t is a leaf but the column cluster subdivides
                for son in btree.block(b).sons.clone() {
                    solve_lower_unit(l, maps, w, ctx, t, son)?;
                }
                Ok(())
            }
        }
        Some([t1, t2]) => {
            // group the sons of b by column cluster and run the block
            // forward substitution per column part
            let sons = btree.block(b).sons.clone();
            let mut by_col: HashMap<ClusterId, (Option<BlockId>, Option<BlockId>)> = HashMap::new();
            for son in sons {
                let sb = btree.block(son);
                let entry = by_col.entry(sb.col).or_insert((None, None));
                if sb.row == t1 {
                    entry.0 = Some(son);
                } else {
                    debug_assert_eq!(sb.row, t2);
                    entry.1 = Some(son);
                }
            }
            let b21 = block_son(l.block_tree(), maps.diag_block(t), t2, t1);
            let mut cols: Vec<(ClusterId, (Option<BlockId>, Option<BlockId>))> =
                by_col.into_iter().collect();
            cols.sort_by_key(|(s, _)| tree.cluster(*s).start);
            for (_, (upper, lower)) in cols {
                let bu = upper.expect("row sons must pair");
                let bl = lower.expect("row sons must pair");
                solve_lower_unit(l, maps, w, ctx, t1, bu)?;
                multiply_sub(w, ctx, bl, -1.0, l, b21, false, None, Factor::Slf, bu, false)?;
                solve_lower_unit(l, maps, w, ctx, t2, bl)?;
            }
            Ok(())
        }
    }
}

/// Scale the rows of block `b` by `1/d` (global position indexing): the
/// diagonal solve of the factorization.
pub fn solve_diag(
    w: &mut H2Matrix,
    ctx: &mut UpdateCtx,
    d: &[f64],
    b: BlockId,
) -> Result<(), ArithError> {
    let tree = w.tree().clone();
    let btree = w.block_tree().clone();
    let blk = btree.block(b);
    if blk.is_leaf() {
        let rc = tree.cluster(blk.row);
        if blk.admissible {
            let v = w.row_basis().materialize(&tree, blk.row);
            let mut scaled = v.clone();
            for i in 0..scaled.rows() {
                let f = 1.0 / d[rc.start + i];
                for j in 0..scaled.cols() {
                    scaled[(i, j)] *= f;
                }
            }
            let s = w.coupling_matrix(b).expect("coupling missing");
            let dx = scaled.sub(&v).matmul(s);
            let dy = w.col_basis().materialize(&tree, blk.col);
            add_lowrank_local(w, ctx, b, &dx, &dy)
        } else {
            let nf = w.nearfield_mut(b);
            for i in 0..nf.rows() {
                let f = 1.0 / d[rc.start + i];
                for j in 0..nf.cols() {
                    nf[(i, j)] *= f;
                }
            }
            Ok(())
        }
    } else {
        for son in btree.block(b).sons.clone() {
            solve_diag(w, ctx, d, son)?;
        }
        Ok(())
    }
}

// ── LDL^T factorization ─────────────────────────────────────────────

/// Factors of `A = L D L^T` with `L` unit lower triangular on the block
/// structure and `D` a plain diagonal.
#[derive(Debug, Clone)]
pub struct LdltFactors {
    pub lower: H2Matrix,
    pub diag: Vec<f64>,
    /// Shift that was subtracted before factorization (set by the caller).
    pub shift: f64,
    /// Largest cluster rank observed in the factor and workspace.
    pub max_rank_seen: usize,
    /// Relative Frobenius residual, filled in by [`factorization_residual`].
    pub residual_estimate: Option<f64>,
}

/// Count the negative and positive entries of `D`. Zeros cannot occur:
/// the factorization raises a pivot breakdown instead of storing one.
pub fn inertia(f: &LdltFactors) -> (usize, usize) {
    let neg = f.diag.iter().filter(|&&v| v < 0.0).count();
    let pos = f.diag.iter().filter(|&&v| v > 0.0).count();
    (neg, pos)
}

/// Approximate LDL^T factorization of a symmetric hierarchical matrix.
///
/// Dense leaf blocks are factored directly; off-diagonal blocks are
/// obtained by forward substitution and diagonal solves, and the Schur
/// complement update `A_22 - L_21 D_11 L_21^T` runs through the low-rank
/// multiplication. All truncation uses `control`.
pub fn ldlt(a: &H2Matrix, control: &TruncationControl) -> Result<LdltFactors, ArithError> {
    let tree = a.tree().clone();
    let btree = a.block_tree().clone();
    let mut w = a.clone();
    w.symmetric = false;
    w.orthogonalize();
    let mut l = H2Matrix::zeros(tree.clone(), btree.clone(), false);
    let mut wctx = UpdateCtx::build(&w, control);
    let mut lctx = UpdateCtx::build(&l, control);
    let maps = TreeMaps::build(&tree, &btree);
    let breakdown = dense::DEFAULT_PIVOT_TOL * w.approx_frobenius_norm();
    let mut d = vec![0.0; tree.n_points()];
    let mut max_rank = 0usize;
    factor_rec(
        &mut w,
        &mut wctx,
        &mut l,
        &mut lctx,
        &maps,
        tree.root(),
        &mut d,
        breakdown,
        &mut max_rank,
    )?;
    max_rank = max_rank.max(l.max_rank()).max(w.max_rank());
    Ok(LdltFactors { lower: l, diag: d, shift: 0.0, max_rank_seen: max_rank, residual_estimate: None })
}

#[allow(clippy::too_many_arguments)]
fn factor_rec(
    w: &mut H2Matrix,
    wctx: &mut UpdateCtx,
    l: &mut H2Matrix,
    lctx: &mut UpdateCtx,
    maps: &TreeMaps,
    t: ClusterId,
    d: &mut [f64],
    breakdown: f64,
    max_rank: &mut usize,
) -> Result<(), ArithError> {
    let tree = w.tree().clone();
    let tc = tree.cluster(t).clone();
    match tc.sons {
        None => {
            let bid = maps.diag_block(t);
            let mut nf = w.nearfield_matrix(bid).expect("diag leaf missing").clone();
            let piv = dense::ldlt_in_place(&mut nf, breakdown).map_err(|e| match e {
                dense::DenseError::PivotBreakdown(i) => {
                    ArithError::PivotBreakdown { position: tc.start + i }
                }
                other => panic!("unexpected dense error {other}"),
            })?;
            *l.nearfield_mut(bid) = nf;
            d[tc.start..tc.end].copy_from_slice(&piv);
            Ok(())
        }
        Some([t1, t2]) => {
            factor_rec(w, wctx, l, lctx, maps, t1, d, breakdown, max_rank)?;
            let btree = w.block_tree().clone();
            let diag_t = maps.diag_block(t);
            let b12 = block_son(&btree, diag_t, t1, t2);
            let b21 = block_son(&btree, diag_t, t2, t1);
            let d22 = block_son(&btree, diag_t, t2, t2);
            // A_12 -> Y = L_11^{-1} A_12, then L_21 = Y^T D_11^{-1}
            // (the diagonal solve is folded into the transposed copy)
            solve_lower_unit(l, maps, w, wctx, t1, b12)?;
            copy_transposed_diag_solved(l, lctx, maps, w, b12, d)?;
            zero_block(w, wctx, b12);
            // Schur complement: A_22 -= L_21 D_11 L_21^T
            multiply_sub(w, wctx, d22, -1.0, l, b21, false, Some(d), Factor::Ext(l), b21, true)?;
            *max_rank = (*max_rank).max(w.max_rank()).max(l.max_rank());
            factor_rec(w, wctx, l, lctx, maps, t2, d, breakdown, max_rank)
        }
    }
}

/// Zero every leaf below `b` and refresh the weights of the two affected
/// subtrees. The factorization calls this once a solve target has been
/// copied out and consumed: stale data there would otherwise keep
/// inflating the adaptive ranks of the workspace.
fn zero_block(w: &mut H2Matrix, ctx: &mut UpdateCtx, b: BlockId) {
    let btree = w.block_tree().clone();
    for leaf in btree.leaves_below(b) {
        let blk = btree.block(leaf);
        if blk.admissible {
            let s = w.coupling_matrix(leaf).expect("coupling missing");
            let (r, c) = (s.rows(), s.cols());
            w.set_coupling(leaf, DenseMatrix::zeros(r, c));
        } else {
            let nf = w.nearfield_mut(leaf);
            let zero = DenseMatrix::zeros(nf.rows(), nf.cols());
            *nf = zero;
        }
    }
    let blk = btree.block(b);
    recompute_weights_subtree(w, Side::Row, &ctx.lists, &ctx.fathers, &ctx.control, &mut ctx.row_weights, blk.row);
    recompute_weights_subtree(w, Side::Col, &ctx.lists, &ctx.fathers, &ctx.control, &mut ctx.col_weights, blk.col);
}

/// Write the transpose of `w`'s block `from` (holding `Y = L_11^{-1} A_12`)
/// into the mirrored block of `l`, folding in the diagonal solve:
/// `L_21 = Y^T D^{-1}` with `d` indexed by global positions of the rows
/// of `from`.
fn copy_transposed_diag_solved(
    l: &mut H2Matrix,
    lctx: &mut UpdateCtx,
    maps: &TreeMaps,
    w: &H2Matrix,
    from: BlockId,
    d: &[f64],
) -> Result<(), ArithError> {
    let tree = w.tree().clone();
    let btree = w.block_tree().clone();
    for leaf in btree.leaves_below(from) {
        let blk = btree.block(leaf);
        let target = maps.mirror(leaf);
        let row_start = tree.cluster(blk.row).start;
        if blk.admissible {
            let s = w.coupling_matrix(leaf).expect("coupling missing");
            let wq = w.col_basis().materialize(&tree, blk.col);
            let mut vp = w.row_basis().materialize(&tree, blk.row);
            for i in 0..vp.rows() {
                let f = 1.0 / d[row_start + i];
                for j in 0..vp.cols() {
                    vp[(i, j)] *= f;
                }
            }
            let x = wq.matmul_tr(s);
            add_lowrank_local(l, lctx, target, &x, &vp)?;
        } else {
            let n = w.nearfield_matrix(leaf).expect("nearfield missing");
            let dst = l.nearfield_mut(target);
            for i in 0..n.rows() {
                let f = 1.0 / d[row_start + i];
                for j in 0..n.cols() {
                    dst[(j, i)] += n[(i, j)] * f;
                }
            }
        }
    }
    Ok(())
}

/// Relative Frobenius residual `||L D L^T - reference|| / ||reference||`,
/// computed densely (test-sized matrices only). Also stores the value in
/// the factor struct.
pub fn factorization_residual(f: &mut LdltFactors, reference: &DenseMatrix) -> f64 {
    let l = f.lower.to_dense().expect("residual check needs a dense-sized matrix");
    let n = l.rows();
    let mut ld = l.clone();
    for i in 0..n {
        for j in 0..n {
            ld[(i, j)] *= f.diag[j];
        }
    }
    let rec = ld.matmul_tr(&l);
    let res = rec.sub(reference).frobenius_norm() / reference.frobenius_norm();
    f.residual_estimate = Some(res);
    res
}
