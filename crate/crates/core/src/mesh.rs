//! Simplicial meshes carrying two coordinate fields over one topology.
//!
//! `nodes_x` are the physical positions and `nodes_xi` the computational
//! positions. Cells are stored flat with stride `D + 1`.

use crate::linalg::{det_inv, factorial, Mat, Point};
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CoordView {
    Physical,
    Computational,
}

impl std::fmt::Display for CoordView {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CoordView::Physical => write!(f, "physical"),
            CoordView::Computational => write!(f, "computational"),
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MeshError {
    #[error("invalid subdivision {nx}x{ny}: counts must be at least 1")]
    InvalidSubdivision { nx: usize, ny: usize },
    #[error("invalid box domain: lower corner must be strictly below upper corner")]
    InvalidDomain,
    #[error("degenerate {view} element {cell}: det = {det:e}")]
    DegenerateCell { cell: usize, det: f64, view: CoordView },
    #[error("cell {cell} references node {node} but the mesh has {n_nodes} nodes")]
    InvalidNode { cell: usize, node: usize, n_nodes: usize },
    #[error("node {0} is not referenced by any cell")]
    OrphanNode(usize),
    #[error("cell array length {0} is not a multiple of the vertex count")]
    RaggedCells(usize),
    #[error("coordinate arrays differ in length: {x} physical vs {xi} computational")]
    LengthMismatch { x: usize, xi: usize },
    #[error("metric is not symmetric positive definite")]
    NotSpd,
}

/// Axis-aligned box used to build structured meshes and classify boundaries.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoxDomain<const D: usize> {
    pub lo: Point<D>,
    pub hi: Point<D>,
}

impl<const D: usize> BoxDomain<D> {
    pub fn new(lo: Point<D>, hi: Point<D>) -> Result<Self, MeshError> {
        if (0..D).any(|k| !(lo[k] < hi[k])) {
            return Err(MeshError::InvalidDomain);
        }
        Ok(Self { lo, hi })
    }

    pub fn volume(&self) -> f64 {
        (0..D).map(|k| self.hi[k] - self.lo[k]).product()
    }

    pub fn diameter(&self) -> f64 {
        (self.hi - self.lo).norm()
    }
}

impl BoxDomain<2> {
    pub fn unit_square() -> Self {
        Self {
            lo: Point::<2>::new(0.0, 0.0),
            hi: Point::<2>::new(1.0, 1.0),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum BoundaryTag<const D: usize> {
    Interior,
    /// Node on exactly one boundary face; it may slide tangentially.
    Face { face: usize, normal: Point<D> },
    /// Node on two or more faces; pinned.
    Corner,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StarEntry {
    pub cell: usize,
    /// Position of the node inside the cell's vertex list.
    pub local: usize,
}

/// Node-to-cell incidence in compressed row form.
#[derive(Debug, Clone)]
pub struct ElementStars {
    offsets: Vec<usize>,
    entries: Vec<StarEntry>,
}

impl ElementStars {
    pub fn star(&self, node: usize) -> &[StarEntry] {
        &self.entries[self.offsets[node]..self.offsets[node + 1]]
    }

    pub fn n_nodes(&self) -> usize {
        self.offsets.len() - 1
    }

    pub fn total_incidences(&self) -> usize {
        self.entries.len()
    }
}

/// Per-element affine data: edge matrices, Jacobian and volumes.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ElementGeometry<const D: usize> {
    pub e: Mat<D>,
    pub e_hat: Mat<D>,
    pub e_inv: Mat<D>,
    pub e_hat_inv: Mat<D>,
    /// `J = E Ê^{-1}`, the Jacobian of the map from computational to physical.
    pub j: Mat<D>,
    /// `det(J)`
    pub r: f64,
    pub vol: f64,
    pub vol_hat: f64,
}

impl<const D: usize> ElementGeometry<D> {
    /// Build from vertex coordinates in both views. `tol_x` and `tol_xi` are
    /// the degeneracy thresholds on `det(E)` and `det(Ê)`.
    pub fn from_vertices(
        cell: usize,
        x: &[Point<D>],
        xi: &[Point<D>],
        tol_x: f64,
        tol_xi: f64,
    ) -> Result<Self, MeshError> {
        Self::from_edges(cell, edge_matrix(x), edge_matrix(xi), tol_x, tol_xi)
    }

    pub fn from_edges(
        cell: usize,
        e: Mat<D>,
        e_hat: Mat<D>,
        tol_x: f64,
        tol_xi: f64,
    ) -> Result<Self, MeshError> {
        let (det_e, e_inv) = match det_inv(&e) {
            Some(v) if v.0 > tol_x => v,
            other => {
                return Err(MeshError::DegenerateCell {
                    cell,
                    det: other.map_or(0.0, |v| v.0),
                    view: CoordView::Physical,
                })
            }
        };
        let (det_eh, e_hat_inv) = match det_inv(&e_hat) {
            Some(v) if v.0 > tol_xi => v,
            other => {
                return Err(MeshError::DegenerateCell {
                    cell,
                    det: other.map_or(0.0, |v| v.0),
                    view: CoordView::Computational,
                })
            }
        };
        let fact = factorial(D);
        Ok(Self {
            e,
            e_hat,
            e_inv,
            e_hat_inv,
            j: e * e_hat_inv,
            r: det_e / det_eh,
            vol: det_e / fact,
            vol_hat: det_eh / fact,
        })
    }
}

/// Columns are `v_i - v_0` for `i = 1..=D`.
pub fn edge_matrix<const D: usize>(verts: &[Point<D>]) -> Mat<D> {
    let mut m = Mat::<D>::zeros();
    for i in 0..D {
        m.set_column(i, &(verts[i + 1] - verts[0]));
    }
    m
}

/// Minimum vertex-to-opposite-facet distance measured in the `M` norm.
///
/// With `V = R E^{-1}` the rows are the barycentric gradients, and the
/// `M`-distance from vertex `j` to its facet is `1 / sqrt(g_j^T M^{-1} g_j)`.
pub fn min_height_in_metric<const D: usize>(
    geom: &ElementGeometry<D>,
    m: &Mat<D>,
) -> Result<f64, MeshError> {
    if !crate::linalg::is_spd(m) {
        return Err(MeshError::NotSpd);
    }
    let (_, m_inv) = det_inv(m).ok_or(MeshError::NotSpd)?;
    let mut best = f64::INFINITY;
    let mut g0 = Point::<D>::zeros();
    for j in 0..D {
        let g: Point<D> = geom.e_inv.row(j).transpose();
        g0 -= g;
        best = best.min(1.0 / g.dot(&(m_inv * g)).sqrt());
    }
    best = best.min(1.0 / g0.dot(&(m_inv * g0)).sqrt());
    Ok(best)
}

#[derive(Debug, Clone)]
pub struct SimplicialMesh<const D: usize> {
    nodes_x: Vec<Point<D>>,
    nodes_xi: Vec<Point<D>>,
    cells: Vec<usize>,
    tags: Vec<BoundaryTag<D>>,
    diameter_x: f64,
    diameter_xi: f64,
}

pub type Mesh2 = SimplicialMesh<2>;

/// Relative degeneracy threshold applied to `det(E_K) / diameter^D`.
pub const DEGENERACY_RTOL: f64 = 1e-14;

fn bbox_diameter<const D: usize>(pts: &[Point<D>]) -> f64 {
    if pts.is_empty() {
        return 0.0;
    }
    let mut lo = pts[0];
    let mut hi = pts[0];
    for p in pts {
        lo = lo.inf(p);
        hi = hi.sup(p);
    }
    (hi - lo).norm()
}

impl<const D: usize> SimplicialMesh<D> {
    /// Build and validate a mesh. Boundary tags are derived from the bounding
    /// box of the physical coordinates.
    pub fn new(
        nodes_x: Vec<Point<D>>,
        nodes_xi: Vec<Point<D>>,
        cells: Vec<usize>,
    ) -> Result<Self, MeshError> {
        let tags = vec![BoundaryTag::Interior; nodes_x.len()];
        let mut mesh = Self::with_tags(nodes_x, nodes_xi, cells, tags)?;
        mesh.tag_box_boundary();
        Ok(mesh)
    }

    pub fn with_tags(
        nodes_x: Vec<Point<D>>,
        nodes_xi: Vec<Point<D>>,
        cells: Vec<usize>,
        tags: Vec<BoundaryTag<D>>,
    ) -> Result<Self, MeshError> {
        if nodes_x.len() != nodes_xi.len() || tags.len() != nodes_x.len() {
            return Err(MeshError::LengthMismatch {
                x: nodes_x.len(),
                xi: nodes_xi.len(),
            });
        }
        if cells.len() % (D + 1) != 0 {
            return Err(MeshError::RaggedCells(cells.len()));
        }
        let n = nodes_x.len();
        let mut used = vec![false; n];
        for (k, c) in cells.chunks(D + 1).enumerate() {
            for &v in c {
                if v >= n {
                    return Err(MeshError::InvalidNode {
                        cell: k,
                        node: v,
                        n_nodes: n,
                    });
                }
                used[v] = true;
            }
        }
        if let Some(orphan) = used.iter().position(|u| !u) {
            return Err(MeshError::OrphanNode(orphan));
        }
        let diameter_x = bbox_diameter(&nodes_x);
        let diameter_xi = bbox_diameter(&nodes_xi);
        let mesh = Self {
            nodes_x,
            nodes_xi,
            cells,
            tags,
            diameter_x,
            diameter_xi,
        };
        mesh.check_admissible()?;
        Ok(mesh)
    }

    /// Classify nodes against the faces of the physical bounding box.
    pub fn tag_box_boundary(&mut self) {
        let mut lo = self.nodes_x[0];
        let mut hi = self.nodes_x[0];
        for p in &self.nodes_x {
            lo = lo.inf(p);
            hi = hi.sup(p);
        }
        let tol = 1e-10 * self.diameter_x.max(f64::MIN_POSITIVE);
        for (p, tag) in self.nodes_x.iter().zip(self.tags.iter_mut()) {
            let mut faces = Vec::new();
            for k in 0..D {
                if (p[k] - lo[k]).abs() <= tol {
                    faces.push((2 * k, k, -1.0));
                } else if (p[k] - hi[k]).abs() <= tol {
                    faces.push((2 * k + 1, k, 1.0));
                }
            }
            *tag = match faces.as_slice() {
                [] => BoundaryTag::Interior,
                [(face, axis, sign)] => {
                    let mut normal = Point::<D>::zeros();
                    normal[*axis] = *sign;
                    BoundaryTag::Face {
                        face: *face,
                        normal,
                    }
                }
                _ => BoundaryTag::Corner,
            };
        }
    }

    pub fn dim(&self) -> usize {
        D
    }

    pub fn n_nodes(&self) -> usize {
        self.nodes_x.len()
    }

    pub fn n_cells(&self) -> usize {
        self.cells.len() / (D + 1)
    }

    pub fn cell(&self, k: usize) -> &[usize] {
        &self.cells[k * (D + 1)..(k + 1) * (D + 1)]
    }

    pub fn cells(&self) -> impl Iterator<Item = &[usize]> {
        self.cells.chunks(D + 1)
    }

    pub fn cells_flat(&self) -> &[usize] {
        &self.cells
    }

    pub fn x(&self) -> &[Point<D>] {
        &self.nodes_x
    }

    pub fn xi(&self) -> &[Point<D>] {
        &self.nodes_xi
    }

    pub fn coords(&self, view: CoordView) -> &[Point<D>] {
        match view {
            CoordView::Physical => &self.nodes_x,
            CoordView::Computational => &self.nodes_xi,
        }
    }

    pub fn tags(&self) -> &[BoundaryTag<D>] {
        &self.tags
    }

    pub fn diameter(&self) -> f64 {
        self.diameter_x
    }

    /// Replace the computational coordinates, rejecting inverted cells.
    pub fn set_xi(&mut self, xi: Vec<Point<D>>) -> Result<(), MeshError> {
        assert_eq!(xi.len(), self.nodes_xi.len());
        let old = std::mem::replace(&mut self.nodes_xi, xi);
        let old_d = self.diameter_xi;
        self.diameter_xi = bbox_diameter(&self.nodes_xi);
        if let Err(e) = self.check_admissible() {
            self.nodes_xi = old;
            self.diameter_xi = old_d;
            return Err(e);
        }
        Ok(())
    }

    /// Replace the physical coordinates, rejecting inverted cells.
    pub fn set_x(&mut self, x: Vec<Point<D>>) -> Result<(), MeshError> {
        assert_eq!(x.len(), self.nodes_x.len());
        let old = std::mem::replace(&mut self.nodes_x, x);
        let old_d = self.diameter_x;
        self.diameter_x = bbox_diameter(&self.nodes_x);
        if let Err(e) = self.check_admissible() {
            self.nodes_x = old;
            self.diameter_x = old_d;
            return Err(e);
        }
        Ok(())
    }

    pub fn degeneracy_tol(&self, view: CoordView) -> f64 {
        let d = match view {
            CoordView::Physical => self.diameter_x,
            CoordView::Computational => self.diameter_xi,
        };
        DEGENERACY_RTOL * d.powi(D as i32)
    }

    /// Columns are `p_i - p_0` over the vertices of cell `k` in `view`.
    pub fn cell_edges(&self, k: usize, view: CoordView) -> Mat<D> {
        let pts = self.coords(view);
        let c = self.cell(k);
        let mut m = Mat::<D>::zeros();
        for i in 0..D {
            m.set_column(i, &(pts[c[i + 1]] - pts[c[0]]));
        }
        m
    }

    /// Edge matrices, Jacobian and volumes of cell `k`.
    pub fn edge_matrices(&self, k: usize) -> Result<ElementGeometry<D>, MeshError> {
        ElementGeometry::from_edges(
            k,
            self.cell_edges(k, CoordView::Physical),
            self.cell_edges(k, CoordView::Computational),
            self.degeneracy_tol(CoordView::Physical),
            self.degeneracy_tol(CoordView::Computational),
        )
    }

    /// Signed volume of cell `k` in the requested view.
    pub fn signed_volume(&self, k: usize, view: CoordView) -> f64 {
        crate::linalg::det(&self.cell_edges(k, view)) / factorial(D)
    }

    pub fn volumes(&self, view: CoordView) -> Vec<f64> {
        (0..self.n_cells())
            .map(|k| self.signed_volume(k, view))
            .collect()
    }

    pub fn total_volume(&self, view: CoordView) -> f64 {
        crate::linalg::pairwise_sum(&self.volumes(view))
    }

    /// Verify positive orientation of every cell in both views.
    pub fn check_admissible(&self) -> Result<(), MeshError> {
        for view in [CoordView::Physical, CoordView::Computational] {
            let tol = self.degeneracy_tol(view);
            let fact = factorial(D);
            for k in 0..self.n_cells() {
                let det = self.signed_volume(k, view) * fact;
                if !(det > tol) {
                    return Err(MeshError::DegenerateCell { cell: k, det, view });
                }
            }
        }
        Ok(())
    }

    pub fn element_stars(&self) -> ElementStars {
        let n = self.n_nodes();
        let mut counts = vec![0usize; n + 1];
        for c in self.cells() {
            for &v in c {
                counts[v + 1] += 1;
            }
        }
        for i in 0..n {
            counts[i + 1] += counts[i];
        }
        let offsets = counts.clone();
        let mut fill = counts;
        let mut entries = vec![StarEntry { cell: 0, local: 0 }; offsets[n]];
        for (k, c) in self.cells().enumerate() {
            for (local, &v) in c.iter().enumerate() {
                entries[fill[v]] = StarEntry { cell: k, local };
                fill[v] += 1;
            }
        }
        ElementStars { offsets, entries }
    }

    /// Sorted neighbour lists through shared edges (node graph).
    pub fn node_neighbors(&self) -> Vec<Vec<usize>> {
        let mut nb = vec![Vec::new(); self.n_nodes()];
        for c in self.cells() {
            for &a in c {
                for &b in c {
                    if a != b {
                        nb[a].push(b);
                    }
                }
            }
        }
        for l in &mut nb {
            l.sort_unstable();
            l.dedup();
        }
        nb
    }

    /// For every cell, the neighbouring cell across each local facet
    /// (facet `j` is opposite vertex `j`), or `None` on the boundary.
    pub fn facet_neighbors(&self) -> Vec<Vec<Option<usize>>> {
        use std::collections::HashMap;
        let mut map: HashMap<Vec<usize>, (usize, usize)> = HashMap::new();
        let mut out = vec![vec![None; D + 1]; self.n_cells()];
        for (k, c) in self.cells().enumerate() {
            for j in 0..=D {
                let mut key: Vec<usize> = c
                    .iter()
                    .enumerate()
                    .filter(|(l, _)| *l != j)
                    .map(|(_, &v)| v)
                    .collect();
                key.sort_unstable();
                if let Some((other, oj)) = map.remove(&key) {
                    out[k][j] = Some(other);
                    out[other][oj] = Some(k);
                } else {
                    map.insert(key, (k, j));
                }
            }
        }
        out
    }

    pub fn centroid(&self, k: usize, view: CoordView) -> Point<D> {
        let pts = self.coords(view);
        let mut c = Point::<D>::zeros();
        for &v in self.cell(k) {
            c += pts[v];
        }
        c / (D as f64 + 1.0)
    }
}

impl SimplicialMesh<2> {
    /// Staggered triangulation of an `nx x ny` grid of quads on `domain`.
    ///
    /// Quad diagonals alternate from one row of quads to the next, so every
    /// interior node is shared by six triangles. `nodes_xi` starts equal to
    /// `nodes_x`.
    pub fn structured(nx: usize, ny: usize, domain: BoxDomain<2>) -> Result<Self, MeshError> {
        if nx == 0 || ny == 0 {
            return Err(MeshError::InvalidSubdivision { nx, ny });
        }
        let BoxDomain { lo, hi } = BoxDomain::new(domain.lo, domain.hi)?;
        let idx = |i: usize, j: usize| i + j * (nx + 1);
        let mut nodes = Vec::with_capacity((nx + 1) * (ny + 1));
        for j in 0..=ny {
            for i in 0..=nx {
                // exact end points so boundary classification is clean
                let x = if i == nx {
                    hi[0]
                } else {
                    lo[0] + (hi[0] - lo[0]) * i as f64 / nx as f64
                };
                let y = if j == ny {
                    hi[1]
                } else {
                    lo[1] + (hi[1] - lo[1]) * j as f64 / ny as f64
                };
                nodes.push(Point::<2>::new(x, y));
            }
        }
        let mut cells = Vec::with_capacity(6 * nx * ny);
        for j in 0..ny {
            for i in 0..nx {
                let (n00, n10, n01, n11) = (idx(i, j), idx(i + 1, j), idx(i, j + 1), idx(i + 1, j + 1));
                if j % 2 == 0 {
                    cells.extend_from_slice(&[n00, n10, n11, n00, n11, n01]);
                } else {
                    cells.extend_from_slice(&[n00, n10, n01, n10, n11, n01]);
                }
            }
        }
        Self::new(nodes.clone(), nodes, cells)
    }
}
