//! Versioned binary serialization of a hierarchical matrix.
//!
//! Layout (all integers and floats little-endian): an 8-byte magic, a
//! `u32` format version, flag bits, the cluster tree (permutation, then
//! per-cluster records), the block tree, both cluster bases (ranks and
//! leaf/transfer matrices in cluster order), then coupling and nearfield
//! matrices in block order. Matrices are stored as `rows: u64`,
//! `cols: u64` followed by row-major `f64` data.

use std::io::{Read, Write};
use std::sync::Arc;

use thiserror::Error;

use crate::cluster::{Block, BlockTree, BoundingBox, Cluster, ClusterTree};
use crate::dense::DenseMatrix;

use super::{ClusterBasis, H2Matrix};

pub const MAGIC: &[u8; 8] = b"H2SLICEM";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum IoError {
    #[error("i/o failure: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad magic: not a matrix dump")]
    BadMagic,
    #[error("unsupported format version {0}")]
    UnsupportedVersion(u32),
    #[error("corrupt dump: {0}")]
    Corrupt(&'static str),
}

struct Writer<'a, W: Write> {
    w: &'a mut W,
}

impl<'a, W: Write> Writer<'a, W> {
    fn u8(&mut self, v: u8) -> Result<(), IoError> {
        self.w.write_all(&[v])?;
        Ok(())
    }
    fn u32(&mut self, v: u32) -> Result<(), IoError> {
        self.w.write_all(&v.to_le_bytes())?;
        Ok(())
    }
    fn u64(&mut self, v: u64) -> Result<(), IoError> {
        self.w.write_all(&v.to_le_bytes())?;
        Ok(())
    }
    fn f64(&mut self, v: f64) -> Result<(), IoError> {
        self.w.write_all(&v.to_le_bytes())?;
        Ok(())
    }
    fn matrix(&mut self, m: &DenseMatrix) -> Result<(), IoError> {
        self.u64(m.rows() as u64)?;
        self.u64(m.cols() as u64)?;
        for &v in m.data() {
            self.f64(v)?;
        }
        Ok(())
    }
}

struct Reader<'a, R: Read> {
    r: &'a mut R,
}

impl<'a, R: Read> Reader<'a, R> {
    fn u8(&mut self) -> Result<u8, IoError> {
        let mut b = [0u8; 1];
        self.r.read_exact(&mut b)?;
        Ok(b[0])
    }
    fn u32(&mut self) -> Result<u32, IoError> {
        let mut b = [0u8; 4];
        self.r.read_exact(&mut b)?;
        Ok(u32::from_le_bytes(b))
    }
    fn u64(&mut self) -> Result<u64, IoError> {
        let mut b = [0u8; 8];
        self.r.read_exact(&mut b)?;
        Ok(u64::from_le_bytes(b))
    }
    fn usize(&mut self) -> Result<usize, IoError> {
        Ok(self.u64()? as usize)
    }
    fn f64(&mut self) -> Result<f64, IoError> {
        let mut b = [0u8; 8];
        self.r.read_exact(&mut b)?;
        Ok(f64::from_le_bytes(b))
    }
    fn matrix(&mut self) -> Result<DenseMatrix, IoError> {
        let rows = self.usize()?;
        let cols = self.usize()?;
        if rows > 1 << 32 || cols > 1 << 32 {
            return Err(IoError::Corrupt("matrix dimensions out of range"));
        }
        let mut m = DenseMatrix::zeros(rows, cols);
        for v in m.data_mut() {
            *v = self.f64()?;
        }
        Ok(m)
    }
}

fn write_basis<W: Write>(w: &mut Writer<W>, tree: &ClusterTree, basis: &ClusterBasis) -> Result<(), IoError> {
    w.u8(u8::from(basis.orthogonal))?;
    for id in tree.ids() {
        w.u64(basis.rank(id) as u64)?;
    }
    for id in tree.ids() {
        if let Some(v) = basis.leaf_matrix(id) {
            w.matrix(v)?;
        }
        if let Some(e) = basis.transfer_matrix(id) {
            w.matrix(e)?;
        }
    }
    Ok(())
}

fn read_basis<R: Read>(r: &mut Reader<R>, tree: &ClusterTree) -> Result<ClusterBasis, IoError> {
    let orthogonal = r.u8()? != 0;
    let n = tree.len();
    let mut ranks = Vec::with_capacity(n);
    for _ in 0..n {
        ranks.push(r.usize()?);
    }
    let mut leaf = vec![None; n];
    let mut transfer = vec![None; n];
    for id in tree.ids() {
        let c = tree.cluster(id);
        if c.is_leaf() {
            let v = r.matrix()?;
            if v.rows() != c.len() || v.cols() != ranks[id] {
                return Err(IoError::Corrupt("leaf matrix dimensions"));
            }
            leaf[id] = Some(v);
        }
        if id != tree.root() {
            let e = r.matrix()?;
            if e.rows() != ranks[id] {
                return Err(IoError::Corrupt("transfer matrix dimensions"));
            }
            transfer[id] = Some(e);
        }
    }
    let basis = ClusterBasis::from_parts(tree, leaf, transfer, orthogonal);
    if basis.ranks() != ranks.as_slice() {
        return Err(IoError::Corrupt("rank table inconsistent with matrices"));
    }
    Ok(basis)
}

/// Serialize a matrix, including its trees, to a byte stream.
pub fn write_h2<W: Write>(m: &H2Matrix, out: &mut W) -> Result<(), IoError> {
    let mut w = Writer { w: out };
    w.w.write_all(MAGIC)?;
    w.u32(FORMAT_VERSION)?;
    w.u8(u8::from(m.symmetric))?;
    let tree = m.tree();
    let btree = m.block_tree();
    w.u64(tree.n_points() as u64)?;
    w.u64(tree.leaf_size() as u64)?;
    w.f64(btree.eta())?;
    // cluster tree
    w.u64(tree.len() as u64)?;
    for &p in tree.permutation() {
        w.u64(p as u64)?;
    }
    for id in tree.ids() {
        let c = tree.cluster(id);
        w.u64(c.start as u64)?;
        w.u64(c.end as u64)?;
        w.u32(c.level as u32)?;
        match c.sons {
            Some([a, b]) => {
                w.u8(1)?;
                w.u64(a as u64)?;
                w.u64(b as u64)?;
            }
            None => w.u8(0)?,
        }
        for d in 0..2 {
            w.f64(c.bbox.min[d])?;
        }
        for d in 0..2 {
            w.f64(c.bbox.max[d])?;
        }
    }
    // block tree
    w.u64(btree.len() as u64)?;
    for id in btree.ids() {
        let b = btree.block(id);
        w.u64(b.row as u64)?;
        w.u64(b.col as u64)?;
        w.u32(b.level as u32)?;
        w.u8(u8::from(b.admissible))?;
        w.u32(b.sons.len() as u32)?;
        for &s in &b.sons {
            w.u64(s as u64)?;
        }
    }
    // bases, then block data in declared order
    write_basis(&mut w, tree, &m.row_basis)?;
    write_basis(&mut w, tree, &m.col_basis)?;
    for id in btree.ids() {
        if let Some(s) = m.coupling_matrix(id) {
            w.matrix(s)?;
        }
    }
    for id in btree.ids() {
        if let Some(nf) = m.nearfield_matrix(id) {
            w.matrix(nf)?;
        }
    }
    Ok(())
}

/// Deserialize a matrix written by [`write_h2`].
pub fn read_h2<R: Read>(input: &mut R) -> Result<H2Matrix, IoError> {
    let mut r = Reader { r: input };
    let mut magic = [0u8; 8];
    r.r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(IoError::BadMagic);
    }
    let version = r.u32()?;
    if version != FORMAT_VERSION {
        return Err(IoError::UnsupportedVersion(version));
    }
    let symmetric = r.u8()? != 0;
    let n = r.usize()?;
    let leaf_size = r.usize()?;
    let eta = r.f64()?;
    if leaf_size == 0 {
        return Err(IoError::Corrupt("leaf size zero"));
    }
    // cluster tree
    let n_clusters = r.usize()?;
    if n_clusters == 0 || n_clusters > 4 * n.max(1) {
        return Err(IoError::Corrupt("cluster count out of range"));
    }
    let mut perm = Vec::with_capacity(n);
    for _ in 0..n {
        let p = r.usize()?;
        if p >= n {
            return Err(IoError::Corrupt("permutation entry out of range"));
        }
        perm.push(p);
    }
    let mut clusters = Vec::with_capacity(n_clusters);
    for _ in 0..n_clusters {
        let start = r.usize()?;
        let end = r.usize()?;
        if start >= end || end > n {
            return Err(IoError::Corrupt("cluster range"));
        }
        let level = r.u32()? as usize;
        let has_sons = r.u8()?;
        let sons = if has_sons != 0 {
            let a = r.usize()?;
            let b = r.usize()?;
            if a >= n_clusters || b >= n_clusters {
                return Err(IoError::Corrupt("cluster son index"));
            }
            Some([a, b])
        } else {
            None
        };
        let mut min = [0.0; 2];
        let mut max = [0.0; 2];
        for v in &mut min {
            *v = r.f64()?;
        }
        for v in &mut max {
            *v = r.f64()?;
        }
        clusters.push(Cluster { start, end, level, bbox: BoundingBox { min, max }, sons });
    }
    let tree = Arc::new(ClusterTree::from_raw(clusters, perm, leaf_size));
    // block tree
    let n_blocks = r.usize()?;
    if n_blocks == 0 {
        return Err(IoError::Corrupt("empty block tree"));
    }
    let mut blocks = Vec::with_capacity(n_blocks);
    for _ in 0..n_blocks {
        let row = r.usize()?;
        let col = r.usize()?;
        if row >= tree.len() || col >= tree.len() {
            return Err(IoError::Corrupt("block cluster index"));
        }
        let level = r.u32()? as usize;
        let admissible = r.u8()? != 0;
        let n_sons = r.u32()? as usize;
        if n_sons > 4 {
            return Err(IoError::Corrupt("block son count"));
        }
        let mut sons = Vec::with_capacity(n_sons);
        for _ in 0..n_sons {
            let s = r.usize()?;
            if s >= n_blocks {
                return Err(IoError::Corrupt("block son index"));
            }
            sons.push(s);
        }
        blocks.push(Block { row, col, level, admissible, sons });
    }
    let btree = Arc::new(BlockTree::from_raw(blocks, eta, &tree, &tree));
    let row_basis = read_basis(&mut r, &tree)?;
    let col_basis = read_basis(&mut r, &tree)?;
    let mut coupling = vec![None; btree.len()];
    let mut nearfield = vec![None; btree.len()];
    for id in btree.ids() {
        let b = btree.block(id);
        if b.is_leaf() && b.admissible {
            let s = r.matrix()?;
            if s.rows() != row_basis.rank(b.row) || s.cols() != col_basis.rank(b.col) {
                return Err(IoError::Corrupt("coupling dimensions"));
            }
            coupling[id] = Some(s);
        }
    }
    for id in btree.ids() {
        let b = btree.block(id);
        if b.is_leaf() && !b.admissible {
            let nf = r.matrix()?;
            if nf.rows() != tree.cluster(b.row).len() || nf.cols() != tree.cluster(b.col).len() {
                return Err(IoError::Corrupt("nearfield dimensions"));
            }
            nearfield[id] = Some(nf);
        }
    }
    Ok(H2Matrix::from_parts(tree, btree, row_basis, col_basis, coupling, nearfield, symmetric))
}
