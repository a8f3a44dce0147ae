//! Weight matrices, adaptive cluster bases and recompression with
//! blockwise error control.
//!
//! A weight matrix `Z_t` is a compact factor whose singular values match
//! those of the full block row owned (directly or through predecessors) by
//! cluster `t`, so adaptive truncation never has to materialize that block
//! row. Weights are built top-down; the adaptive orthogonal basis is built
//! bottom-up from truncated SVDs of `V_t Z_t^T`. In weighted mode the
//! per-block scale factors live inside the weights, which turns the plain
//! "keep singular values above one" rule into a relative error bound for
//! every admissible block.

use crate::arithmetic::BlockLists;
use crate::cluster::{ClusterId, ClusterTree};
use crate::dense::{svd, thin_qr, truncation_rank, DenseMatrix};
use crate::h2::{ClusterBasis, H2Error, H2Matrix, TruncationControl, TruncationMode};

/// Which side of the matrix a basis or weight set belongs to. The column
/// side runs the row-side algorithm on the transposed matrix view.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Side {
    Row,
    Col,
}

/// Per-cluster weight matrices. `z[t]` has `k_t` columns and at most
/// `k_t` rows after the thin QR; the orthogonal factor is never stored.
#[derive(Debug, Clone)]
pub struct WeightSet {
    z: Vec<Option<DenseMatrix>>,
    pub weighted: bool,
}

impl WeightSet {
    pub fn empty(tree: &ClusterTree, weighted: bool) -> WeightSet {
        WeightSet { z: vec![None; tree.len()], weighted }
    }

    pub fn weight(&self, t: ClusterId) -> Option<&DenseMatrix> {
        self.z[t].as_ref()
    }
}

/// Row scale for a directly coupled block in weighted mode. The target
/// tolerance is omega^2 = eps^2/3 * ||block||^2 at the block's own level
/// (the block norm equals the coupling norm because both bases are
/// orthogonal), i.e. a scale of sqrt(3)/(eps*||S_b||). The uniform
/// sqrt(3)/eps part is factored out of the stored weights and applied to
/// the computed singular values instead: the selection is identical, but
/// the SVDs then run on matrices whose entries span a few orders of
/// magnitude instead of 1/eps, which keeps the kept-subspace orientation
/// accurate to machine precision.
fn weighted_row_scale(coupling_norm: f64) -> Option<f64> {
    if coupling_norm == 0.0 {
        None // exactly-zero blocks impose no constraint
    } else {
        Some(1.0 / coupling_norm)
    }
}

/// Factor by which weighted-mode singular values are rescaled before the
/// keep-above-one test.
pub(crate) fn weighted_sigma_scale(eps: f64) -> f64 {
    3f64.sqrt() / eps
}

/// Assemble the stacked weight rows for one cluster from its own coupling
/// matrices plus the inherited father weight.
#[allow(clippy::too_many_arguments)]
fn assemble_weight(
    t: ClusterId,
    side: Side,
    rank_t: usize,
    m: &H2Matrix,
    lists: &BlockLists,
    control: &TruncationControl,
    father_z: Option<&DenseMatrix>,
    transfer: Option<&DenseMatrix>,
) -> DenseMatrix {
    let weighted = control.mode == TruncationMode::Weighted;
    let mut parts: Vec<DenseMatrix> = Vec::new();
    let blocks = match side {
        Side::Row => lists.row(t),
        Side::Col => lists.col(t),
    };
    for &b in blocks {
        let s = m.coupling_matrix(b).expect("admissible leaf needs coupling");
        // rows contributed: the coupling seen from this side, transposed
        // into (opposite rank) x k_t shape
        let mut rows = match side {
            Side::Row => s.transpose(),
            Side::Col => s.clone(),
        };
        if weighted {
            match weighted_row_scale(s.frobenius_norm()) {
                Some(w) => rows.scale(w),
                None => continue,
            }
        }
        parts.push(rows);
    }
    if let (Some(zf), Some(e)) = (father_z, transfer) {
        // inherited part: Z_father * E_t^T. One level down the blockwise
        // tolerance omega^2 shrinks by 1/3, so the inherited weight rows
        // grow by sqrt(3) per level.
        let mut inherited = zf.matmul_tr(e);
        if weighted {
            inherited.scale(3f64.sqrt());
        }
        parts.push(inherited);
    }
    if parts.is_empty() {
        return DenseMatrix::zeros(0, rank_t);
    }
    let mut stacked = parts[0].clone();
    for p in &parts[1..] {
        stacked = DenseMatrix::vstack(&stacked, p);
    }
    debug_assert_eq!(stacked.cols(), rank_t);
    if stacked.rows() <= rank_t {
        return stacked;
    }
    let (_, r) = thin_qr(&stacked);
    r
}

/// Recompute the weights of every cluster in the subtree rooted at
/// `sub_root`, top-down, reusing the stored weight of the subtree root's
/// father. Weights outside the subtree are left untouched.
pub(crate) fn recompute_weights_subtree(
    m: &H2Matrix,
    side: Side,
    lists: &BlockLists,
    fathers: &[Option<ClusterId>],
    control: &TruncationControl,
    ws: &mut WeightSet,
    sub_root: ClusterId,
) {
    let tree = m.tree().clone();
    let basis = match side {
        Side::Row => m.row_basis(),
        Side::Col => m.col_basis(),
    };
    for t in tree.subtree(sub_root) {
        let father_z = fathers[t].and_then(|f| ws.z[f].as_ref()).cloned();
        let z = assemble_weight(
            t,
            side,
            basis.rank(t),
            m,
            lists,
            control,
            father_z.as_ref(),
            basis.transfer_matrix(t),
        );
        ws.z[t] = Some(z);
    }
}

/// Build the weight set for one side of the matrix.
///
/// Requires the opposite cluster basis to be orthogonal; otherwise the
/// coupling matrices do not carry the block norms.
pub fn init_weights(
    m: &H2Matrix,
    side: Side,
    control: &TruncationControl,
) -> Result<WeightSet, H2Error> {
    let opposite_orthogonal = match side {
        Side::Row => m.col_basis().orthogonal,
        Side::Col => m.row_basis().orthogonal,
    };
    if !opposite_orthogonal {
        return Err(H2Error::NotOrthogonal);
    }
    let lists = BlockLists::build(m.block_tree());
    let fathers = m.tree().fathers();
    let mut ws = WeightSet::empty(m.tree(), control.mode == TruncationMode::Weighted);
    recompute_weights_subtree(m, side, &lists, &fathers, control, &mut ws, m.tree().root());
    Ok(ws)
}

/// Truncated SVD of `M`; returns the kept left singular vectors. In
/// weighted mode the singular values are rescaled by the factored-out
/// sqrt(3)/eps before the keep-above-one test.
fn truncated_left_vectors(m: &DenseMatrix, control: &TruncationControl) -> DenseMatrix {
    if m.rows() == 0 || m.cols() == 0 {
        return DenseMatrix::zeros(m.rows(), 0);
    }
    let (u, sigma, _) = svd(m);
    let r = truncation_rank(&rescaled(&sigma, control), control);
    u.take_cols(r)
}

fn rescaled(sigma: &[f64], control: &TruncationControl) -> Vec<f64> {
    match control.mode {
        TruncationMode::Weighted => {
            let f = weighted_sigma_scale(control.eps);
            sigma.iter().map(|s| s * f).collect()
        }
        TruncationMode::Relative => sigma.to_vec(),
    }
}

/// Left singular vectors of `V Z^T` for `V` with orthonormal columns:
/// the singular values live in the small factor `Z^T`, so the SVD runs on
/// `k x k` data and `V` only maps the kept vectors back up. Returns
/// `(Q, R)` with `R = Q^T V = P_r^T` coming for free.
fn truncated_left_vectors_orthogonal(
    v: &DenseMatrix,
    z: &DenseMatrix,
    control: &TruncationControl,
) -> (DenseMatrix, DenseMatrix) {
    if v.cols() == 0 || z.rows() == 0 {
        return (DenseMatrix::zeros(v.rows(), 0), DenseMatrix::zeros(0, v.cols()));
    }
    let (p, sigma, _) = svd(&z.transpose());
    let r = truncation_rank(&rescaled(&sigma, control), control);
    let p_r = p.take_cols(r);
    (v.matmul(&p_r), p_r.transpose())
}

/// Replace the basis inside the subtree rooted at `sub_root` by the
/// adaptive orthogonal basis, bottom-up. Returns `(t, R_t)` pairs with
/// `R_t = Q_t^T V_t` for every cluster of the subtree. When the subtree
/// root has a father, its transfer matrix is rewritten as `R_t E_t` so the
/// basis stays nested across the subtree boundary.
pub(crate) fn build_adaptive_basis_subtree(
    tree: &ClusterTree,
    basis: &mut ClusterBasis,
    ws: &WeightSet,
    control: &TruncationControl,
    sub_root: ClusterId,
) -> Vec<(ClusterId, DenseMatrix)> {
    let mut order = tree.subtree(sub_root);
    order.reverse(); // sons before fathers
    let mut changes: Vec<Option<DenseMatrix>> = vec![None; tree.len()];
    let mut out = Vec::with_capacity(order.len());
    for t in order {
        let c = tree.cluster(t);
        let zt = ws.weight(t);
        let r_t = match c.sons {
            None => {
                let v_old = basis.leaf_matrix(t).expect("leaf matrix missing").clone();
                let (q, r_t) = match zt {
                    Some(z) if z.rows() > 0 => {
                        if basis.orthogonal {
                            truncated_left_vectors_orthogonal(&v_old, z, control)
                        } else {
                            let q = truncated_left_vectors(&v_old.matmul_tr(z), control);
                            let r = q.tr_matmul(&v_old);
                            (q, r)
                        }
                    }
                    _ => (
                        DenseMatrix::zeros(v_old.rows(), 0),
                        DenseMatrix::zeros(0, v_old.cols()),
                    ),
                };
                basis.set_leaf(t, q);
                r_t
            }
            Some([a, b]) => {
                let ra = changes[a].as_ref().expect("son change missing");
                let rb = changes[b].as_ref().expect("son change missing");
                let ea = basis.transfer_matrix(a).expect("transfer missing");
                let eb = basis.transfer_matrix(b).expect("transfer missing");
                // projected father basis expressed in the sons' new bases
                let v_hat = DenseMatrix::vstack(&ra.matmul(ea), &rb.matmul(eb));
                let m = match zt {
                    Some(z) if z.rows() > 0 => v_hat.matmul_tr(z),
                    _ => DenseMatrix::zeros(v_hat.rows(), 0),
                };
                let q_hat = truncated_left_vectors(&m, control);
                let r_t = q_hat.tr_matmul(&v_hat);
                let ka = ra.rows();
                basis.set_transfer(a, q_hat.row_block(0, ka));
                basis.set_transfer(b, q_hat.row_block(ka, q_hat.rows()));
                basis.set_rank(t, q_hat.cols());
                r_t
            }
        };
        changes[t] = Some(r_t.clone());
        out.push((t, r_t));
    }
    // keep the father's nestedness across the subtree boundary
    if let Some(e_old) = basis.transfer_matrix(sub_root).cloned() {
        let r_root = changes[sub_root].as_ref().unwrap();
        basis.set_transfer(sub_root, r_root.matmul(&e_old));
    }
    basis.orthogonal = true;
    out
}

/// Orthogonalize the basis inside a subtree by bottom-up QR, returning
/// `(t, C_t)` with `V_t_new C_t = V_t_old`. The subtree root's transfer is
/// rewritten so the father's basis keeps its value exactly.
pub(crate) fn orthogonalize_basis_subtree(
    tree: &ClusterTree,
    basis: &mut ClusterBasis,
    sub_root: ClusterId,
) -> Vec<(ClusterId, DenseMatrix)> {
    let mut order = tree.subtree(sub_root);
    order.reverse();
    let mut changes: Vec<Option<DenseMatrix>> = vec![None; tree.len()];
    let mut out = Vec::with_capacity(order.len());
    for t in order {
        let c = tree.cluster(t);
        let r_t = match c.sons {
            None => {
                let v_old = basis.leaf_matrix(t).expect("leaf matrix missing").clone();
                let (q, r) = thin_qr(&v_old);
                basis.set_leaf(t, q);
                r
            }
            Some([a, b]) => {
                let ra = changes[a].as_ref().expect("son change missing");
                let rb = changes[b].as_ref().expect("son change missing");
                let ea = basis.transfer_matrix(a).expect("transfer missing");
                let eb = basis.transfer_matrix(b).expect("transfer missing");
                let m = DenseMatrix::vstack(&ra.matmul(ea), &rb.matmul(eb));
                let (q, r) = thin_qr(&m);
                let ka = ra.rows();
                basis.set_transfer(a, q.row_block(0, ka));
                basis.set_transfer(b, q.row_block(ka, q.rows()));
                basis.set_rank(t, q.cols());
                r
            }
        };
        changes[t] = Some(r_t.clone());
        out.push((t, r_t));
    }
    if let Some(e_old) = basis.transfer_matrix(sub_root).cloned() {
        let r_root = changes[sub_root].as_ref().unwrap();
        basis.set_transfer(sub_root, r_root.matmul(&e_old));
    }
    basis.orthogonal = true;
    out
}

/// Build the adaptive orthogonal row basis for the whole matrix.
///
/// Returns the new basis together with the basis-change matrices
/// `R_t = Q_t^T V_t` (one per cluster, indexed by cluster id).
pub fn build_adaptive_row_basis(
    m: &H2Matrix,
    ws: &WeightSet,
    control: &TruncationControl,
) -> (ClusterBasis, Vec<DenseMatrix>) {
    build_adaptive_basis(m, Side::Row, ws, control)
}

/// Side-generic variant of [`build_adaptive_row_basis`].
pub fn build_adaptive_basis(
    m: &H2Matrix,
    side: Side,
    ws: &WeightSet,
    control: &TruncationControl,
) -> (ClusterBasis, Vec<DenseMatrix>) {
    let tree = m.tree();
    let mut basis = match side {
        Side::Row => m.row_basis().clone(),
        Side::Col => m.col_basis().clone(),
    };
    let pairs = build_adaptive_basis_subtree(tree, &mut basis, ws, control, tree.root());
    let mut changes = vec![DenseMatrix::zeros(0, 0); tree.len()];
    for (t, r) in pairs {
        changes[t] = r;
    }
    (basis, changes)
}

/// Project the matrix onto freshly built adaptive orthogonal bases with
/// blockwise error control: orthogonalize, build weights and bases for
/// both sides, then rewrite every coupling as `R_t S_b R_s^T`.
pub fn recompress(m: &mut H2Matrix, control: &TruncationControl) {
    m.orthogonalize();
    let row_ws = init_weights(m, Side::Row, control).expect("bases orthogonal after orthogonalize");
    let (row_basis, row_change) = build_adaptive_basis(m, Side::Row, &row_ws, control);
    let col_ws = init_weights(m, Side::Col, control).expect("bases orthogonal after orthogonalize");
    let (col_basis, col_change) = build_adaptive_basis(m, Side::Col, &col_ws, control);
    let btree = m.block_tree().clone();
    for id in btree.leaves() {
        let blk = btree.block(id);
        if blk.admissible {
            let s = m.coupling_matrix(id).expect("coupling missing").clone();
            let projected = row_change[blk.row].matmul(&s.matmul_tr(&col_change[blk.col]));
            m.set_coupling(id, projected);
        }
    }
    m.set_bases(row_basis, col_basis);
}
