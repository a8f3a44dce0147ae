//! Geometric cluster trees and the admissibility-driven block tree.
//!
//! Clusters are built by bisecting the bounding box along its longest axis
//! at the coordinate median, so every cluster owns a contiguous range of
//! positions under one global permutation. The block tree subdivides pairs
//! of clusters until the admissibility criterion
//! max{diam(t), diam(s)} <= 2 eta dist(t, s) holds or both clusters are
//! leaves.

use std::sync::Arc;

pub type ClusterId = usize;
pub type BlockId = usize;

pub const DEFAULT_ETA: f64 = 1.0;
pub const DEFAULT_LEAF_SIZE: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoundingBox {
    pub min: [f64; 2],
    pub max: [f64; 2],
}

impl BoundingBox {
    fn around(points: &[[f64; 2]]) -> BoundingBox {
        let mut min = [f64::INFINITY; 2];
        let mut max = [f64::NEG_INFINITY; 2];
        for p in points {
            for d in 0..2 {
                min[d] = min[d].min(p[d]);
                max[d] = max[d].max(p[d]);
            }
        }
        BoundingBox { min, max }
    }

    pub fn diameter(&self) -> f64 {
        let dx = self.max[0] - self.min[0];
        let dy = self.max[1] - self.min[1];
        (dx * dx + dy * dy).sqrt()
    }

    pub fn distance(&self, other: &BoundingBox) -> f64 {
        let mut d2 = 0.0;
        for d in 0..2 {
            let gap = (self.min[d] - other.max[d]).max(other.min[d] - self.max[d]).max(0.0);
            d2 += gap * gap;
        }
        d2.sqrt()
    }

    pub fn contains(&self, p: [f64; 2]) -> bool {
        (0..2).all(|d| self.min[d] - 1e-12 <= p[d] && p[d] <= self.max[d] + 1e-12)
    }
}

/// One node of the cluster tree; its index set is the contiguous position
/// range `start..end` of the tree's permutation.
#[derive(Debug, Clone)]
pub struct Cluster {
    pub start: usize,
    pub end: usize,
    pub level: usize,
    pub bbox: BoundingBox,
    pub sons: Option<[ClusterId; 2]>,
}

impl Cluster {
    pub fn len(&self) -> usize {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.start == self.end
    }

    pub fn is_leaf(&self) -> bool {
        self.sons.is_none()
    }
}

/// Binary cluster tree over DOF coordinates.
#[derive(Debug, Clone)]
pub struct ClusterTree {
    clusters: Vec<Cluster>,
    root: ClusterId,
    /// position -> original DOF index
    perm: Vec<usize>,
    /// original DOF index -> position
    inv_perm: Vec<usize>,
    leaf_size: usize,
}

impl ClusterTree {
    /// Rebuild a tree from stored parts (deserialization).
    pub(crate) fn from_raw(clusters: Vec<Cluster>, perm: Vec<usize>, leaf_size: usize) -> ClusterTree {
        let mut inv_perm = vec![0; perm.len()];
        for (pos, &dof) in perm.iter().enumerate() {
            inv_perm[dof] = pos;
        }
        ClusterTree { clusters, root: 0, perm, inv_perm, leaf_size }
    }

    pub fn root(&self) -> ClusterId {
        self.root
    }

    pub fn cluster(&self, id: ClusterId) -> &Cluster {
        &self.clusters[id]
    }

    pub fn len(&self) -> usize {
        self.clusters.len()
    }

    pub fn is_empty(&self) -> bool {
        self.clusters.is_empty()
    }

    pub fn n_points(&self) -> usize {
        self.perm.len()
    }

    pub fn leaf_size(&self) -> usize {
        self.leaf_size
    }

    pub fn permutation(&self) -> &[usize] {
        &self.perm
    }

    pub fn inverse_permutation(&self) -> &[usize] {
        &self.inv_perm
    }

    pub fn ids(&self) -> impl Iterator<Item = ClusterId> {
        0..self.clusters.len()
    }

    /// Number of levels, counting the root level.
    pub fn depth(&self) -> usize {
        self.clusters.iter().map(|c| c.level).max().map_or(0, |l| l + 1)
    }

    pub fn leaves(&self) -> Vec<ClusterId> {
        self.ids().filter(|&id| self.cluster(id).is_leaf()).collect()
    }

    /// Clusters of the subtree rooted at `id`, fathers before sons.
    pub fn subtree(&self, id: ClusterId) -> Vec<ClusterId> {
        let mut out = Vec::new();
        let mut stack = vec![id];
        while let Some(t) = stack.pop() {
            out.push(t);
            if let Some([a, b]) = self.cluster(t).sons {
                stack.push(b);
                stack.push(a);
            }
        }
        out
    }

    /// Father of every cluster (`None` for the root).
    pub fn fathers(&self) -> Vec<Option<ClusterId>> {
        let mut fathers = vec![None; self.clusters.len()];
        for id in self.ids() {
            if let Some([a, b]) = self.cluster(id).sons {
                fathers[a] = Some(id);
                fathers[b] = Some(id);
            }
        }
        fathers
    }
}

/// Build a cluster tree by geometric bisection: split the longest bounding
/// box axis at the coordinate median until a cluster holds at most
/// `leaf_size` points. Coordinate ties are broken by index so duplicate
/// points are fine.
pub fn build_cluster_tree(points: &[[f64; 2]], leaf_size: usize) -> ClusterTree {
    assert!(!points.is_empty(), "cluster tree needs at least one point");
    assert!(leaf_size >= 1);
    let mut perm: Vec<usize> = (0..points.len()).collect();
    let mut clusters = Vec::new();
    build_rec(points, &mut perm, &mut clusters, 0, points.len(), 0, leaf_size);
    let mut inv_perm = vec![0; points.len()];
    for (pos, &dof) in perm.iter().enumerate() {
        inv_perm[dof] = pos;
    }
    ClusterTree { clusters, root: 0, perm, inv_perm, leaf_size }
}

fn build_rec(
    points: &[[f64; 2]],
    perm: &mut [usize],
    clusters: &mut Vec<Cluster>,
    start: usize,
    end: usize,
    level: usize,
    leaf_size: usize,
) -> ClusterId {
    let slice = &perm[start..end];
    let bbox = BoundingBox::around(&slice.iter().map(|&i| points[i]).collect::<Vec<_>>());
    let id = clusters.len();
    clusters.push(Cluster { start, end, level, bbox, sons: None });
    let n = end - start;
    if n > leaf_size {
        let axis = if bbox.max[0] - bbox.min[0] >= bbox.max[1] - bbox.min[1] { 0 } else { 1 };
        let mid = start + n / 2;
        // median split along the chosen axis, index as tiebreak
        perm[start..end].sort_by(|&a, &b| {
            points[a][axis]
                .partial_cmp(&points[b][axis])
                .unwrap()
                .then(a.cmp(&b))
        });
        let left = build_rec(points, perm, clusters, start, mid, level + 1, leaf_size);
        let right = build_rec(points, perm, clusters, mid, end, level + 1, leaf_size);
        clusters[id].sons = Some([left, right]);
    }
    id
}

/// Admissibility test: max{diam(t), diam(s)} <= 2 eta dist(t, s) on the
/// bounding boxes.
pub fn is_admissible(t: &Cluster, s: &Cluster, eta: f64) -> bool {
    let diam = t.bbox.diameter().max(s.bbox.diameter());
    let dist = t.bbox.distance(&s.bbox);
    diam <= 2.0 * eta * dist
}

/// One node of the block tree.
#[derive(Debug, Clone)]
pub struct Block {
    pub row: ClusterId,
    pub col: ClusterId,
    pub level: usize,
    pub admissible: bool,
    pub sons: Vec<BlockId>,
}

impl Block {
    pub fn is_leaf(&self) -> bool {
        self.sons.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlockTreeStats {
    pub n_blocks: usize,
    pub n_admissible_leaves: usize,
    pub n_inadmissible_leaves: usize,
    pub depth: usize,
    /// Maximum number of blocks sharing one row or column cluster.
    pub c_sp: usize,
}

impl BlockTreeStats {
    pub fn to_json(&self) -> String {
        format!(
            "{{\"n_blocks\":{},\"n_admissible_leaves\":{},\"n_inadmissible_leaves\":{},\"depth\":{},\"c_sp\":{}}}",
            self.n_blocks, self.n_admissible_leaves, self.n_inadmissible_leaves, self.depth, self.c_sp
        )
    }
}

/// Block tree over a pair of cluster trees.
#[derive(Debug, Clone)]
pub struct BlockTree {
    blocks: Vec<Block>,
    root: BlockId,
    eta: f64,
    stats: BlockTreeStats,
}

impl BlockTree {
    /// Rebuild a block tree from stored parts (deserialization); stats are
    /// recomputed rather than trusted.
    pub(crate) fn from_raw(
        blocks: Vec<Block>,
        eta: f64,
        rows: &ClusterTree,
        cols: &ClusterTree,
    ) -> BlockTree {
        let stats = compute_stats(&blocks, rows, cols);
        BlockTree { blocks, root: 0, eta, stats }
    }

    pub fn root(&self) -> BlockId {
        self.root
    }

    pub fn block(&self, id: BlockId) -> &Block {
        &self.blocks[id]
    }

    pub fn len(&self) -> usize {
        self.blocks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.blocks.is_empty()
    }

    pub fn eta(&self) -> f64 {
        self.eta
    }

    pub fn stats(&self) -> &BlockTreeStats {
        &self.stats
    }

    pub fn ids(&self) -> impl Iterator<Item = BlockId> {
        0..self.blocks.len()
    }

    pub fn leaves(&self) -> impl Iterator<Item = BlockId> + '_ {
        self.ids().filter(|&id| self.block(id).is_leaf())
    }

    /// Leaf blocks of the subtree rooted at `id`.
    pub fn leaves_below(&self, id: BlockId) -> Vec<BlockId> {
        let mut out = Vec::new();
        let mut stack = vec![id];
        while let Some(b) = stack.pop() {
            let blk = self.block(b);
            if blk.is_leaf() {
                out.push(b);
            } else {
                stack.extend(blk.sons.iter().rev());
            }
        }
        out
    }

    /// Locate the leaf block containing matrix position (i, j).
    pub fn leaf_at(&self, rows: &ClusterTree, cols: &ClusterTree, i: usize, j: usize) -> BlockId {
        let mut id = self.root;
        loop {
            let blk = self.block(id);
            if blk.is_leaf() {
                return id;
            }
            let next = blk.sons.iter().copied().find(|&s| {
                let b = self.block(s);
                let r = rows.cluster(b.row);
                let c = cols.cluster(b.col);
                r.start <= i && i < r.end && c.start <= j && j < c.end
            });
            id = next.expect("sons of a block partition its label");
        }
    }
}

/// Build the minimal block tree for the admissibility parameter `eta`.
///
/// A block becomes an admissible leaf as soon as the criterion holds; a
/// block whose clusters are both leaves and which is not admissible
/// becomes an inadmissible (dense) leaf; every other block is subdivided.
pub fn build_block_tree(rows: &Arc<ClusterTree>, cols: &Arc<ClusterTree>, eta: f64) -> BlockTree {
    let mut blocks = Vec::new();
    build_block_rec(rows, cols, rows.root(), cols.root(), 0, eta, &mut blocks);
    let stats = compute_stats(&blocks, rows, cols);
    BlockTree { blocks, root: 0, eta, stats }
}

fn build_block_rec(
    rows: &ClusterTree,
    cols: &ClusterTree,
    t: ClusterId,
    s: ClusterId,
    level: usize,
    eta: f64,
    blocks: &mut Vec<Block>,
) -> BlockId {
    let id = blocks.len();
    let rt = rows.cluster(t);
    let cs = cols.cluster(s);
    let admissible = is_admissible(rt, cs, eta);
    blocks.push(Block { row: t, col: s, level, admissible, sons: Vec::new() });
    if !admissible {
        let row_sons = rt.sons;
        let col_sons = cs.sons;
        let pairs: Vec<(ClusterId, ClusterId)> = match (row_sons, col_sons) {
            (Some([t1, t2]), Some([s1, s2])) => {
                vec![(t1, s1), (t1, s2), (t2, s1), (t2, s2)]
            }
            (None, Some([s1, s2])) => vec![(t, s1), (t, s2)],
            (Some([t1, t2]), None) => vec![(t1, s), (t2, s)],
            (None, None) => Vec::new(), // inadmissible leaf
        };
        let sons: Vec<BlockId> = pairs
            .into_iter()
            .map(|(pt, ps)| build_block_rec(rows, cols, pt, ps, level + 1, eta, blocks))
            .collect();
        blocks[id].sons = sons;
    }
    id
}

fn compute_stats(blocks: &[Block], rows: &ClusterTree, cols: &ClusterTree) -> BlockTreeStats {
    let mut per_row = vec![0usize; rows.len()];
    let mut per_col = vec![0usize; cols.len()];
    let mut adm = 0;
    let mut inadm = 0;
    let mut depth = 0;
    for b in blocks {
        per_row[b.row] += 1;
        per_col[b.col] += 1;
        depth = depth.max(b.level + 1);
        if b.is_leaf() {
            if b.admissible {
                adm += 1;
            } else {
                inadm += 1;
            }
        }
    }
    let c_sp = per_row
        .iter()
        .chain(per_col.iter())
        .copied()
        .max()
        .unwrap_or(0);
    BlockTreeStats {
        n_blocks: blocks.len(),
        n_admissible_leaves: adm,
        n_inadmissible_leaves: inadm,
        depth,
        c_sp,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid_points(side: usize) -> Vec<[f64; 2]> {
        let h = 1.0 / (side + 1) as f64;
        let mut pts = Vec::new();
        for j in 1..=side {
            for i in 1..=side {
                pts.push([i as f64 * h, j as f64 * h]);
            }
        }
        pts
    }

    #[test]
    fn collinear_points_split_in_two() {
        let pts: Vec<[f64; 2]> = (0..4).map(|i| [i as f64, 0.0]).collect();
        let tree = build_cluster_tree(&pts, 2);
        assert_eq!(tree.len(), 3);
        let root = tree.cluster(tree.root());
        let [a, b] = root.sons.unwrap();
        assert_eq!(tree.cluster(a).len(), 2);
        assert_eq!(tree.cluster(b).len(), 2);
        assert!(tree.cluster(a).is_leaf() && tree.cluster(b).is_leaf());
    }

    #[test]
    fn single_leaf_when_leaf_size_covers_everything() {
        let pts = grid_points(3);
        let tree = build_cluster_tree(&pts, 16);
        assert_eq!(tree.len(), 1);
        assert!(tree.cluster(tree.root()).is_leaf());
    }

    #[test]
    fn grid_tree_partitions_and_depth() {
        let pts = grid_points(15); // 225 points
        let tree = build_cluster_tree(&pts, 32);
        // leaf labels partition 0..225
        let mut seen = vec![false; 225];
        for id in tree.leaves() {
            let c = tree.cluster(id);
            assert!(c.len() <= 32);
            for pos in c.start..c.end {
                let dof = tree.permutation()[pos];
                assert!(!seen[dof], "dof {dof} appears twice");
                seen[dof] = true;
            }
        }
        assert!(seen.iter().all(|&s| s));
        // median bisection of 225 points with leaf size 32 stops after
        // three splits: 225 -> 113 -> 57 -> 29
        assert_eq!(tree.depth(), 4);
    }

    #[test]
    fn duplicate_points_are_split_by_index() {
        let pts = vec![[0.5, 0.5]; 7];
        let tree = build_cluster_tree(&pts, 2);
        for id in tree.leaves() {
            assert!(tree.cluster(id).len() <= 2);
        }
    }

    #[test]
    fn bbox_contains_members() {
        let pts = grid_points(10);
        let tree = build_cluster_tree(&pts, 8);
        for id in tree.ids() {
            let c = tree.cluster(id);
            for pos in c.start..c.end {
                assert!(c.bbox.contains(pts[tree.permutation()[pos]]));
            }
        }
    }

    #[test]
    fn admissibility_cases() {
        let mk = |min: [f64; 2], max: [f64; 2]| Cluster {
            start: 0,
            end: 1,
            level: 0,
            bbox: BoundingBox { min, max },
            sons: None,
        };
        // far squares: diam = sqrt(2), dist = 2 sqrt(2)
        let a = mk([0.0, 0.0], [1.0, 1.0]);
        let b = mk([3.0, 3.0], [4.0, 4.0]);
        assert!(is_admissible(&a, &b, 1.0));
        // same cluster: dist 0, diam > 0
        assert!(!is_admissible(&a, &a, 1.0));
        // touching boxes: dist 0
        let c = mk([1.0, 0.0], [2.0, 1.0]);
        assert!(!is_admissible(&a, &c, 1.0));
    }

    #[test]
    fn two_single_leaf_trees_make_one_dense_leaf() {
        let pts = vec![[0.0, 0.0], [1.0, 0.0]];
        let tree = Arc::new(build_cluster_tree(&pts, 4));
        let bt = build_block_tree(&tree, &tree, 1.0);
        assert_eq!(bt.len(), 1);
        let root = bt.block(bt.root());
        assert!(root.is_leaf());
        assert!(!root.admissible);
    }

    #[test]
    fn separated_1d_groups_admissible_at_level_one() {
        let mut pts: Vec<[f64; 2]> = (0..8).map(|i| [i as f64 * 0.1 / 7.0, 0.0]).collect();
        pts.extend((0..8).map(|i| [10.0 + i as f64 * 0.1 / 7.0, 0.0]));
        let tree = Arc::new(build_cluster_tree(&pts, 4));
        let bt = build_block_tree(&tree, &tree, 1.0);
        let root = bt.block(bt.root());
        assert!(!root.is_leaf());
        // off-diagonal son blocks pair the two separated groups
        let mut found_admissible_off_diag = false;
        for &s in &root.sons {
            let blk = bt.block(s);
            if blk.row != blk.col {
                assert!(blk.admissible, "separated groups must be admissible");
                assert!(blk.is_leaf());
                found_admissible_off_diag = true;
            }
        }
        assert!(found_admissible_off_diag);
    }

    #[test]
    fn leaf_blocks_partition_index_product() {
        let pts = grid_points(7); // 49 points
        let tree = Arc::new(build_cluster_tree(&pts, 8));
        let bt = build_block_tree(&tree, &tree, 1.0);
        let n = pts.len();
        let mut covered = vec![false; n * n];
        for id in bt.leaves() {
            let blk = bt.block(id);
            let r = tree.cluster(blk.row);
            let c = tree.cluster(blk.col);
            for i in r.start..r.end {
                for j in c.start..c.end {
                    assert!(!covered[i * n + j], "({i},{j}) covered twice");
                    covered[i * n + j] = true;
                }
            }
            // inadmissible leaves must pair two leaf clusters
            if !blk.admissible {
                assert!(r.is_leaf() && c.is_leaf());
            }
        }
        assert!(covered.iter().all(|&c| c));
    }

    #[test]
    fn sparsity_constant_bounded_on_refinements() {
        let mut last = Vec::new();
        for side in [15usize, 31, 63] {
            let pts = grid_points(side);
            let tree = Arc::new(build_cluster_tree(&pts, 32));
            let bt = build_block_tree(&tree, &tree, 1.0);
            last.push(bt.stats().c_sp);
        }
        // bounded by a constant independent of n
        assert!(last.iter().all(|&c| c <= 40), "c_sp values {last:?}");
    }

    #[test]
    fn leaf_at_locates_positions() {
        let pts = grid_points(7);
        let tree = Arc::new(build_cluster_tree(&pts, 8));
        let bt = build_block_tree(&tree, &tree, 1.0);
        for &(i, j) in &[(0usize, 0usize), (13, 40), (48, 3)] {
            let id = bt.leaf_at(&tree, &tree, i, j);
            let blk = bt.block(id);
            let r = tree.cluster(blk.row);
            let c = tree.cluster(blk.col);
            assert!(r.start <= i && i < r.end);
            assert!(c.start <= j && j < c.end);
        }
    }

    #[test]
    fn stats_json_shape() {
        let pts = grid_points(7);
        let tree = Arc::new(build_cluster_tree(&pts, 8));
        let bt = build_block_tree(&tree, &tree, 1.0);
        let json = bt.stats().to_json();
        assert!(json.starts_with('{') && json.ends_with('}'));
        assert!(json.contains("\"c_sp\""));
    }
}
