//! Point location in simplicial meshes and linear transfer of nodal fields.

use crate::linalg::{det_inv, Mat, Point};
use crate::mesh::{CoordView, SimplicialMesh};
use rayon::prelude::*;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum InterpError {
    #[error("field has {got} values but the mesh has {expected} nodes")]
    SizeMismatch { expected: usize, got: usize },
    #[error("mesh has no cells")]
    EmptyMesh,
}

/// Barycentric coordinates at or above this value count as inside.
pub const INSIDE_TOL: f64 = 1e-10;
/// Points farther than this fraction of the diameter outside the hull are
/// reported as clamped.
pub const CLAMP_RTOL: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq)]
pub struct LocationResult {
    pub cell: usize,
    pub bary: Vec<f64>,
    pub clamped: bool,
}

/// Barycentric coordinates of `p` in cell `k`.
pub fn barycentric<const D: usize>(mesh: &SimplicialMesh<D>, view: CoordView, k: usize, p: &Point<D>) -> Vec<f64> {
    let pts = mesh.coords(view);
    let c = mesh.cell(k);
    let e: Mat<D> = mesh.cell_edges(k, view);
    let (_, e_inv) = det_inv(&e).expect("admissible cell");
    let l = e_inv * (p - pts[c[0]]);
    let mut out = Vec::with_capacity(D + 1);
    out.push(1.0 - l.sum());
    out.extend(l.iter().copied());
    out
}

fn min_entry(b: &[f64]) -> (usize, f64) {
    b.iter()
        .copied()
        .enumerate()
        .fold((0, f64::INFINITY), |(bi, bv), (i, v)| if v < bv { (i, v) } else { (bi, bv) })
}

/// Walking point locator with an exhaustive fallback.
pub struct Locator<'a, const D: usize> {
    mesh: &'a SimplicialMesh<D>,
    view: CoordView,
    neighbors: Vec<Vec<Option<usize>>>,
    diameter: f64,
}

impl<'a, const D: usize> Locator<'a, D> {
    pub fn new(mesh: &'a SimplicialMesh<D>, view: CoordView) -> Self {
        let pts = mesh.coords(view);
        let mut lo = pts[0];
        let mut hi = pts[0];
        for p in pts {
            lo = lo.inf(p);
            hi = hi.sup(p);
        }
        Self { mesh, view, neighbors: mesh.facet_neighbors(), diameter: (hi - lo).norm() }
    }

    pub fn locate(&self, p: &Point<D>, seed: usize) -> LocationResult {
        let n = self.mesh.n_cells();
        let mut k = seed.min(n - 1);
        for _ in 0..n {
            let b = barycentric(self.mesh, self.view, k, p);
            let (j, v) = min_entry(&b);
            if v >= -INSIDE_TOL {
                return LocationResult { cell: k, bary: b, clamped: false };
            }
            match self.neighbors[k][j] {
                Some(next) => k = next,
                None => break,
            }
        }
        self.exhaustive(p)
    }

    fn exhaustive(&self, p: &Point<D>) -> LocationResult {
        let mut best = (0, f64::NEG_INFINITY, Vec::new());
        for k in 0..self.mesh.n_cells() {
            let b = barycentric(self.mesh, self.view, k, p);
            let (_, v) = min_entry(&b);
            if v >= -INSIDE_TOL {
                return LocationResult { cell: k, bary: b, clamped: false };
            }
            if v > best.1 {
                best = (k, v, b);
            }
        }
        let (k, _, b) = best;
        let mut clamped: Vec<f64> = b.iter().map(|v| v.max(0.0)).collect();
        let s: f64 = clamped.iter().sum();
        clamped.iter_mut().for_each(|v| *v /= s);
        let pts = self.mesh.coords(self.view);
        let q: Point<D> = self.mesh.cell(k).iter().zip(&clamped).map(|(&v, w)| *w * pts[v]).sum();
        let far = (p - q).norm() > CLAMP_RTOL * self.diameter;
        LocationResult { cell: k, bary: clamped, clamped: far }
    }
}

pub fn locate<const D: usize>(mesh: &SimplicialMesh<D>, view: CoordView, p: &Point<D>) -> LocationResult {
    Locator::new(mesh, view).locate(p, 0)
}

/// Query points per parallel chunk; each chunk walks from the previous hit.
const CHUNK: usize = 256;

/// Evaluate the piecewise-linear interpolant of `values` (one per node, of
/// any vector type) on the mesh in `view` at `points`.
pub fn interpolate_with<const D: usize, T>(
    mesh: &SimplicialMesh<D>,
    view: CoordView,
    values: &[T],
    points: &[Point<D>],
) -> Result<(Vec<T>, usize), InterpError>
where
    T: Copy + Send + Sync + std::ops::Mul<f64, Output = T> + std::ops::Add<Output = T>,
{
    if values.len() != mesh.n_nodes() {
        return Err(InterpError::SizeMismatch { expected: mesh.n_nodes(), got: values.len() });
    }
    if mesh.n_cells() == 0 {
        return Err(InterpError::EmptyMesh);
    }
    let loc = Locator::new(mesh, view);
    let chunks: Vec<(Vec<T>, usize)> = points
        .par_chunks(CHUNK)
        .map(|chunk| {
            let mut seed = 0;
            let mut clamped = 0;
            let out = chunk
                .iter()
                .map(|p| {
                    let r = loc.locate(p, seed);
                    seed = r.cell;
                    clamped += r.clamped as usize;
                    let c = mesh.cell(r.cell);
                    let mut acc = values[c[0]] * r.bary[0];
                    for j in 1..=D {
                        acc = acc + values[c[j]] * r.bary[j];
                    }
                    acc
                })
                .collect();
            (out, clamped)
        })
        .collect();
    let clamped = chunks.iter().map(|c| c.1).sum();
    Ok((chunks.into_iter().flat_map(|c| c.0).collect(), clamped))
}

/// Linear transfer of a nodal scalar field from `old` (physical view) to
/// `new_points`.
pub fn transfer<const D: usize>(
    old: &SimplicialMesh<D>,
    field: &[f64],
    new_points: &[Point<D>],
) -> Result<Vec<f64>, InterpError> {
    let (vals, clamped) = interpolate_with(old, CoordView::Physical, field, new_points)?;
    if clamped > 0 {
        log::warn!("transfer: {clamped} points outside the source mesh were clamped");
    }
    Ok(vals)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::{BoundaryTag, BoxDomain, Mesh2};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn jittered(n: usize, seed: u64) -> Mesh2 {
        let mut mesh = Mesh2::structured(n, n, BoxDomain::unit_square()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let h = 1.0 / n as f64;
        let x: Vec<Point<2>> = mesh
            .x()
            .iter()
            .zip(mesh.tags())
            .map(|(p, t)| match t {
                BoundaryTag::Interior => p + Point::<2>::new(rng.gen_range(-0.25..0.25) * h, rng.gen_range(-0.25..0.25) * h),
                _ => *p,
            })
            .collect();
        mesh.set_x(x).unwrap();
        mesh
    }

    #[test]
    fn centroid_and_vertex() {
        let mesh = jittered(4, 1);
        for k in [0, 7, 31] {
            let c = mesh.centroid(k, CoordView::Physical);
            let r = locate(&mesh, CoordView::Physical, &c);
            assert_eq!(r.cell, k);
            assert!(r.bary.iter().all(|b| (b - 1.0 / 3.0).abs() < 1e-12));
        }
        let v = mesh.x()[7];
        let r = locate(&mesh, CoordView::Physical, &v);
        assert!(mesh.cell(r.cell).contains(&7));
        assert!(r.bary.iter().any(|b| (b - 1.0).abs() < 1e-12));
        assert!((r.bary.iter().sum::<f64>() - 1.0).abs() < 1e-14);
    }

    #[test]
    fn walking_agrees_with_brute_force() {
        let mesh = jittered(8, 2);
        let loc = Locator::new(&mesh, CoordView::Physical);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..1000 {
            let p = Point::<2>::new(rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0));
            let r = loc.locate(&p, rng.gen_range(0..mesh.n_cells()));
            let containing: Vec<usize> = (0..mesh.n_cells())
                .filter(|&k| barycentric(&mesh, CoordView::Physical, k, &p).iter().all(|b| *b >= -INSIDE_TOL))
                .collect();
            assert!(containing.contains(&r.cell), "{p:?}");
            assert!(!r.clamped);
        }
    }

    #[test]
    fn outside_points_are_clamped() {
        let mesh = jittered(3, 3);
        let r = locate(&mesh, CoordView::Physical, &Point::<2>::new(1.5, 0.5));
        assert!(r.clamped);
        assert!(r.bary.iter().all(|b| *b >= 0.0));
        let r = locate(&mesh, CoordView::Physical, &Point::<2>::new(1.0 + 1e-12, 0.5));
        assert!(!r.clamped);
    }

    #[test]
    fn transfer_reproduces_linear_and_constant() {
        let src = jittered(6, 4);
        let dst = jittered(9, 5);
        let lin: Vec<f64> = src.x().iter().map(|p| 2.0 * p[0] - 3.0 * p[1] + 0.5).collect();
        let out = transfer(&src, &lin, dst.x()).unwrap();
        for (v, p) in out.iter().zip(dst.x()) {
            assert!((v - (2.0 * p[0] - 3.0 * p[1] + 0.5)).abs() < 1e-13);
        }
        let out = transfer(&src, &vec![4.25; src.n_nodes()], dst.x()).unwrap();
        assert!(out.iter().all(|v| (v - 4.25).abs() < 1e-14));
        assert!(transfer(&src, &[1.0], dst.x()).is_err());
    }

    #[test]
    fn transfer_identity_and_maximum_principle() {
        let mesh = jittered(5, 6);
        let f: Vec<f64> = mesh.x().iter().map(|p| (5.0 * p[0]).sin() * p[1]).collect();
        let same = transfer(&mesh, &f, mesh.x()).unwrap();
        for (a, b) in same.iter().zip(&f) {
            assert!((a - b).abs() <= 1e-15 * b.abs().max(1.0));
        }
        let dst = jittered(11, 7);
        let out = transfer(&mesh, &f, dst.x()).unwrap();
        let (lo, hi) = f.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(*v), b.max(*v)));
        assert!(out.iter().all(|v| *v >= lo - 1e-14 && *v <= hi + 1e-14));
    }

    #[test]
    fn transfer_is_second_order() {
        let errs: Vec<f64> = [8usize, 16, 32]
            .iter()
            .map(|&n| {
                let src = jittered(n, 8);
                let dst = jittered(n, 9);
                let f: Vec<f64> = src.x().iter().map(|p| p[0] * p[0]).collect();
                let out = transfer(&src, &f, dst.x()).unwrap();
                out.iter().zip(dst.x()).map(|(v, p)| (v - p[0] * p[0]).abs()).fold(0.0, f64::max)
            })
            .collect();
        assert!(errs[0] / errs[1] > 3.0 && errs[1] / errs[2] > 3.0, "{errs:?}");
        assert!(errs[2] <= 1.0 / (32.0 * 32.0));
    }
}
