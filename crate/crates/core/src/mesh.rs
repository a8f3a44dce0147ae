//! Triangular meshes for the reference geometries and P1 finite-element
//! assembly.
//!
//! Each geometry starts from a coarse base mesh and is refined regularly
//! (every triangle split into four congruent children). Dirichlet
//! conditions are imposed by elimination: only interior vertices carry
//! degrees of freedom.

use std::collections::HashMap;
use std::io::Write;

use thiserror::Error;

use crate::dense::DenseMatrix;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum MeshError {
    #[error("degenerate triangle {0} (area {1:.3e})")]
    DegenerateTriangle(usize, f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Geometry {
    UnitSquare,
    UnitCircle,
    LShape,
    UShape,
}

impl Geometry {
    pub fn name(&self) -> &'static str {
        match self {
            Geometry::UnitSquare => "unit_square",
            Geometry::UnitCircle => "unit_circle",
            Geometry::LShape => "l_shape",
            Geometry::UShape => "u_shape",
        }
    }

    pub fn parse(s: &str) -> Option<Geometry> {
        match s {
            "unit_square" => Some(Geometry::UnitSquare),
            "unit_circle" => Some(Geometry::UnitCircle),
            "l_shape" => Some(Geometry::LShape),
            "u_shape" => Some(Geometry::UShape),
            _ => None,
        }
    }
}

/// Triangle mesh with Dirichlet boundary flags and interior DOF numbering.
#[derive(Debug, Clone)]
pub struct Mesh {
    pub vertices: Vec<[f64; 2]>,
    pub triangles: Vec<[usize; 3]>,
    pub boundary: Vec<bool>,
    /// Interior vertex -> DOF index; boundary vertices map to `None`.
    pub interior_index: Vec<Option<usize>>,
    pub n_dofs: usize,
}

impl Mesh {
    fn from_parts(vertices: Vec<[f64; 2]>, triangles: Vec<[usize; 3]>) -> Mesh {
        let boundary = boundary_flags(&vertices, &triangles);
        let mut interior_index = vec![None; vertices.len()];
        let mut n = 0;
        for (i, &b) in boundary.iter().enumerate() {
            if !b {
                interior_index[i] = Some(n);
                n += 1;
            }
        }
        Mesh { vertices, triangles, boundary, interior_index, n_dofs: n }
    }

    /// Coordinates of the interior vertices in DOF order.
    pub fn dof_coordinates(&self) -> Vec<[f64; 2]> {
        let mut coords = vec![[0.0; 2]; self.n_dofs];
        for (v, idx) in self.interior_index.iter().enumerate() {
            if let Some(d) = *idx {
                coords[d] = self.vertices[v];
            }
        }
        coords
    }

    pub fn total_area(&self) -> f64 {
        self.triangles
            .iter()
            .map(|t| signed_area(self.vertices[t[0]], self.vertices[t[1]], self.vertices[t[2]]))
            .sum()
    }

    /// Plain-text export: counts line, vertex lines `x y flag`, triangle
    /// lines `i j k` (0-based).
    pub fn write_text(&self, w: &mut impl Write) -> std::io::Result<()> {
        writeln!(w, "{} {}", self.vertices.len(), self.triangles.len())?;
        for (v, &b) in self.vertices.iter().zip(&self.boundary) {
            writeln!(w, "{:.17e} {:.17e} {}", v[0], v[1], u8::from(b))?;
        }
        for t in &self.triangles {
            writeln!(w, "{} {} {}", t[0], t[1], t[2])?;
        }
        Ok(())
    }
}

fn signed_area(a: [f64; 2], b: [f64; 2], c: [f64; 2]) -> f64 {
    0.5 * ((b[0] - a[0]) * (c[1] - a[1]) - (c[0] - a[0]) * (b[1] - a[1]))
}

/// A vertex is a boundary vertex iff it lies on an edge that belongs to
/// exactly one triangle.
fn boundary_flags(vertices: &[[f64; 2]], triangles: &[[usize; 3]]) -> Vec<bool> {
    let mut edge_count: HashMap<(usize, usize), u32> = HashMap::new();
    for t in triangles {
        for (a, b) in [(t[0], t[1]), (t[1], t[2]), (t[2], t[0])] {
            let key = (a.min(b), a.max(b));
            *edge_count.entry(key).or_insert(0) += 1;
        }
    }
    let mut flags = vec![false; vertices.len()];
    for (&(a, b), &count) in &edge_count {
        if count == 1 {
            flags[a] = true;
            flags[b] = true;
        }
    }
    flags
}

// ── mesh construction ───────────────────────────────────────────────

/// Build the requested geometry refined `refinements` times.
///
/// The unit square starts from a 16x16 grid of squares split into right
/// triangles, so the interior DOF count is (2^(r+4) - 1)^2. The L- and
/// U-shapes remove grid cells from the same base grid; the circle is a
/// ring-structured polygon whose boundary vertices are snapped back onto
/// the unit circle after every refinement.
pub fn build_mesh(geometry: Geometry, refinements: usize) -> Mesh {
    let mut mesh = match geometry {
        Geometry::UnitSquare => grid_mesh(16, |_, _| true),
        Geometry::LShape => grid_mesh(16, |i, j| !(i >= 8 && j >= 8)),
        Geometry::UShape => grid_mesh(16, |i, j| !((4..12).contains(&i) && j >= 8)),
        Geometry::UnitCircle => disc_mesh(13),
    };
    for _ in 0..refinements {
        mesh = refine(&mesh, geometry == Geometry::UnitCircle);
    }
    mesh
}

/// Uniform grid on [0,1]^2 with `cells` cells per side; `keep` selects
/// which cells (by lower-left corner index) belong to the domain. Each
/// kept cell is split along the same diagonal.
fn grid_mesh(cells: usize, keep: impl Fn(usize, usize) -> bool) -> Mesh {
    let np = cells + 1;
    let h = 1.0 / cells as f64;
    let mut vertex_id = vec![usize::MAX; np * np];
    let mut vertices = Vec::new();
    let mut triangles = Vec::new();
    let id = |i: usize, j: usize, vertices: &mut Vec<[f64; 2]>, vertex_id: &mut Vec<usize>| {
        let key = j * np + i;
        if vertex_id[key] == usize::MAX {
            vertex_id[key] = vertices.len();
            vertices.push([i as f64 * h, j as f64 * h]);
        }
        vertex_id[key]
    };
    for j in 0..cells {
        for i in 0..cells {
            if !keep(i, j) {
                continue;
            }
            let v00 = id(i, j, &mut vertices, &mut vertex_id);
            let v10 = id(i + 1, j, &mut vertices, &mut vertex_id);
            let v01 = id(i, j + 1, &mut vertices, &mut vertex_id);
            let v11 = id(i + 1, j + 1, &mut vertices, &mut vertex_id);
            triangles.push([v00, v10, v11]);
            triangles.push([v00, v11, v01]);
        }
    }
    Mesh::from_parts(vertices, triangles)
}

/// Ring-structured disc: a center vertex surrounded by `rings` concentric
/// rings, ring k holding 6k vertices at radius k/rings.
fn disc_mesh(rings: usize) -> Mesh {
    let mut vertices = vec![[0.0, 0.0]];
    let mut ring_start = vec![0usize; rings + 1];
    for k in 1..=rings {
        ring_start[k] = vertices.len();
        let count = 6 * k;
        let radius = k as f64 / rings as f64;
        for j in 0..count {
            let angle = 2.0 * std::f64::consts::PI * j as f64 / count as f64;
            vertices.push([radius * angle.cos(), radius * angle.sin()]);
        }
    }
    let ring_vertex = |k: usize, j: usize, ring_start: &[usize]| -> usize {
        if k == 0 {
            0
        } else {
            ring_start[k] + j % (6 * k)
        }
    };
    let mut triangles = Vec::new();
    // innermost fan
    for j in 0..6 {
        triangles.push([0, ring_vertex(1, j, &ring_start), ring_vertex(1, j + 1, &ring_start)]);
    }
    // annulus between ring k and k+1, sector by sector
    for k in 1..rings {
        for s in 0..6 {
            for i in 0..=k {
                let b0 = ring_vertex(k + 1, s * (k + 1) + i, &ring_start);
                let b1 = ring_vertex(k + 1, s * (k + 1) + i + 1, &ring_start);
                let a0 = ring_vertex(k, s * k + i, &ring_start);
                triangles.push([b0, b1, a0]);
                if i < k {
                    let a1 = ring_vertex(k, s * k + i + 1, &ring_start);
                    triangles.push([a0, b1, a1]);
                }
            }
        }
    }
    Mesh::from_parts(vertices, triangles)
}

/// Regular refinement: each triangle is split into four via edge
/// midpoints. For the circle, midpoints of boundary edges are projected
/// back onto the unit circle.
fn refine(mesh: &Mesh, snap_to_circle: bool) -> Mesh {
    let mut vertices = mesh.vertices.clone();
    let mut midpoint: HashMap<(usize, usize), usize> = HashMap::new();
    let mut edge_count: HashMap<(usize, usize), u32> = HashMap::new();
    for t in &mesh.triangles {
        for (a, b) in [(t[0], t[1]), (t[1], t[2]), (t[2], t[0])] {
            let key = (a.min(b), a.max(b));
            *edge_count.entry(key).or_insert(0) += 1;
        }
    }
    let mut mid = |a: usize, b: usize, vertices: &mut Vec<[f64; 2]>| -> usize {
        let key = (a.min(b), a.max(b));
        *midpoint.entry(key).or_insert_with(|| {
            let pa = vertices[a];
            let pb = vertices[b];
            let mut p = [(pa[0] + pb[0]) / 2.0, (pa[1] + pb[1]) / 2.0];
            if snap_to_circle && edge_count[&key] == 1 && mesh.boundary[a] && mesh.boundary[b] {
                let norm = (p[0] * p[0] + p[1] * p[1]).sqrt();
                if norm > 0.0 {
                    p = [p[0] / norm, p[1] / norm];
                }
            }
            vertices.push(p);
            vertices.len() - 1
        })
    };
    let mut triangles = Vec::with_capacity(4 * mesh.triangles.len());
    for t in &mesh.triangles {
        let m01 = mid(t[0], t[1], &mut vertices);
        let m12 = mid(t[1], t[2], &mut vertices);
        let m20 = mid(t[2], t[0], &mut vertices);
        triangles.push([t[0], m01, m20]);
        triangles.push([m01, t[1], m12]);
        triangles.push([m20, m12, t[2]]);
        triangles.push([m01, m12, m20]);
    }
    Mesh::from_parts(vertices, triangles)
}

// ── sparse matrices ─────────────────────────────────────────────────

/// Symmetric sparse matrix in compressed-row form.
#[derive(Debug, Clone)]
pub struct SparseMatrix {
    n: usize,
    row_ptr: Vec<usize>,
    col_idx: Vec<usize>,
    values: Vec<f64>,
}

impl SparseMatrix {
    /// Build from (row, col, value) triplets, summing duplicates.
    pub fn from_triplets(n: usize, triplets: &[(usize, usize, f64)]) -> SparseMatrix {
        let mut rows: Vec<HashMap<usize, f64>> = vec![HashMap::new(); n];
        for &(i, j, v) in triplets {
            *rows[i].entry(j).or_insert(0.0) += v;
        }
        let mut row_ptr = Vec::with_capacity(n + 1);
        let mut col_idx = Vec::new();
        let mut values = Vec::new();
        row_ptr.push(0);
        for row in rows {
            let mut entries: Vec<(usize, f64)> = row.into_iter().collect();
            entries.sort_by_key(|e| e.0);
            for (j, v) in entries {
                col_idx.push(j);
                values.push(v);
            }
            row_ptr.push(col_idx.len());
        }
        SparseMatrix { n, row_ptr, col_idx, values }
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        let lo = self.row_ptr[i];
        let hi = self.row_ptr[i + 1];
        match self.col_idx[lo..hi].binary_search(&j) {
            Ok(pos) => self.values[lo + pos],
            Err(_) => 0.0,
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, usize, f64)> + '_ {
        (0..self.n).flat_map(move |i| {
            (self.row_ptr[i]..self.row_ptr[i + 1])
                .map(move |k| (i, self.col_idx[k], self.values[k]))
        })
    }

    pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.n);
        let mut y = vec![0.0; self.n];
        for i in 0..self.n {
            let mut acc = 0.0;
            for k in self.row_ptr[i]..self.row_ptr[i + 1] {
                acc += self.values[k] * x[self.col_idx[k]];
            }
            y[i] = acc;
        }
        y
    }

    pub fn to_dense(&self) -> DenseMatrix {
        let mut m = DenseMatrix::zeros(self.n, self.n);
        for (i, j, v) in self.iter() {
            m[(i, j)] = v;
        }
        m
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn is_symmetric(&self, tol: f64) -> bool {
        self.iter().all(|(i, j, v)| (self.get(j, i) - v).abs() <= tol)
    }

    pub fn same_pattern(&self, other: &SparseMatrix) -> bool {
        self.n == other.n && self.row_ptr == other.row_ptr && self.col_idx == other.col_idx
    }

    pub fn values_sum(&self) -> f64 {
        self.values.iter().sum()
    }

    /// MatrixMarket coordinate export (symmetric, lower triangle, 1-based).
    pub fn write_matrix_market(&self, w: &mut impl Write) -> std::io::Result<()> {
        writeln!(w, "%%MatrixMarket matrix coordinate real symmetric")?;
        let lower: Vec<(usize, usize, f64)> =
            self.iter().filter(|&(i, j, _)| i >= j).collect();
        writeln!(w, "{} {} {}", self.n, self.n, lower.len())?;
        for (i, j, v) in lower {
            writeln!(w, "{} {} {:.17e}", i + 1, j + 1, v)?;
        }
        Ok(())
    }
}

// ── P1 assembly ─────────────────────────────────────────────────────

fn element_stiffness(p0: [f64; 2], p1: [f64; 2], p2: [f64; 2]) -> ([[f64; 3]; 3], f64) {
    let area = signed_area(p0, p1, p2);
    // gradients of the barycentric coordinates
    let b = [p1[1] - p2[1], p2[1] - p0[1], p0[1] - p1[1]];
    let c = [p2[0] - p1[0], p0[0] - p2[0], p1[0] - p0[0]];
    let mut k = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            k[i][j] = (b[i] * b[j] + c[i] * c[j]) / (4.0 * area);
        }
    }
    (k, area)
}

/// P1 stiffness matrix with Dirichlet elimination (interior DOFs only).
pub fn assemble_stiffness(mesh: &Mesh) -> Result<SparseMatrix, MeshError> {
    assemble(mesh, true, true)
}

/// P1 mass matrix with Dirichlet elimination.
pub fn assemble_mass(mesh: &Mesh) -> Result<SparseMatrix, MeshError> {
    assemble(mesh, false, true)
}

/// Mass matrix over all vertices, no boundary elimination. Its entry sum
/// equals the mesh area (partition of unity).
pub fn assemble_mass_full(mesh: &Mesh) -> Result<SparseMatrix, MeshError> {
    assemble(mesh, false, false)
}

fn assemble(mesh: &Mesh, stiffness: bool, eliminate: bool) -> Result<SparseMatrix, MeshError> {
    let n = if eliminate { mesh.n_dofs } else { mesh.vertices.len() };
    let mut triplets = Vec::with_capacity(9 * mesh.triangles.len());
    for (ti, t) in mesh.triangles.iter().enumerate() {
        let p = [mesh.vertices[t[0]], mesh.vertices[t[1]], mesh.vertices[t[2]]];
        let (local, area) = if stiffness {
            element_stiffness(p[0], p[1], p[2])
        } else {
            let area = signed_area(p[0], p[1], p[2]);
            let f = area / 12.0;
            ([[2.0 * f, f, f], [f, 2.0 * f, f], [f, f, 2.0 * f]], area)
        };
        if area < 1e-14 {
            return Err(MeshError::DegenerateTriangle(ti, area));
        }
        for i in 0..3 {
            for j in 0..3 {
                let (gi, gj) = if eliminate {
                    match (mesh.interior_index[t[i]], mesh.interior_index[t[j]]) {
                        (Some(a), Some(b)) => (a, b),
                        _ => continue,
                    }
                } else {
                    (t[i], t[j])
                };
                triplets.push((gi, gj, local[i][j]));
            }
        }
    }
    Ok(SparseMatrix::from_triplets(n, &triplets))
}

/// First `m` exact Dirichlet-Laplace eigenvalues of the unit square:
/// pi^2 (j^2 + k^2) for j, k >= 1, sorted with multiplicity.
pub fn reference_eigenvalues_unit_square(m: usize) -> Vec<f64> {
    assert!(m >= 1);
    // j, k <= bound covers at least m values since j = 1..=J, k = 1..=J
    // yields J^2 candidates below pi^2 (J^2 + J^2).
    let bound = ((m as f64).sqrt() as usize + 2).max(4);
    let pi2 = std::f64::consts::PI * std::f64::consts::PI;
    let mut vals: Vec<f64> = (1..=bound)
        .flat_map(|j| (1..=bound).map(move |k| pi2 * (j * j + k * k) as f64))
        .collect();
    vals.sort_by(|a, b| a.partial_cmp(b).unwrap());
    vals.truncate(m);
    vals
}
