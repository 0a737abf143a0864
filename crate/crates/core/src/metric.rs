//! Per-element metric tensors: construction from a scalar field, smoothing,
//! normalization, the global scalars `sigma_h`, `theta`, `kappa`, and the
//! nodal balancing weights.

use crate::linalg::{det, det_inv, is_spd, min_eigenvalue, pairwise_sum, sym_eigen, sym_map, Mat, Point};
use crate::mesh::{CoordView, SimplicialMesh};
use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricError {
    #[error("metric at cell {0} is not symmetric positive definite")]
    NotSpd(usize),
    #[error("parameter beta = {0} is outside its admissible range")]
    InvalidBeta(f64),
    #[error("expected {expected} entries, got {got}")]
    SizeMismatch { expected: usize, got: usize },
    #[error("stretching factor is undefined: 1 - (d gamma / 2) ln(theta) = {0} is not positive")]
    InvalidKappa(f64),
}

/// Piecewise-constant SPD metric with cached inverse and density.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricField<const D: usize> {
    m: Vec<Mat<D>>,
    m_inv: Vec<Mat<D>>,
    rho: Vec<f64>,
}

impl<const D: usize> MetricField<D> {
    pub fn new(m: Vec<Mat<D>>) -> Result<Self, MetricError> {
        let mut m_inv = Vec::with_capacity(m.len());
        let mut rho = Vec::with_capacity(m.len());
        for (k, mk) in m.iter().enumerate() {
            if !is_spd(mk) {
                return Err(MetricError::NotSpd(k));
            }
            let (d, inv) = det_inv(mk).ok_or(MetricError::NotSpd(k))?;
            m_inv.push(inv);
            rho.push(d.sqrt());
        }
        Ok(Self { m, m_inv, rho })
    }

    pub fn uniform(n_cells: usize, m: Mat<D>) -> Result<Self, MetricError> {
        Self::new(vec![m; n_cells])
    }

    pub fn identity(n_cells: usize) -> Self {
        Self::uniform(n_cells, Mat::<D>::identity()).expect("identity is SPD")
    }

    pub fn len(&self) -> usize {
        self.m.len()
    }

    pub fn is_empty(&self) -> bool {
        self.m.is_empty()
    }

    pub fn get(&self, k: usize) -> &Mat<D> {
        &self.m[k]
    }

    pub fn inv(&self, k: usize) -> &Mat<D> {
        &self.m_inv[k]
    }

    /// `sqrt(det(M_K))`
    pub fn rho(&self, k: usize) -> f64 {
        self.rho[k]
    }

    pub fn tensors(&self) -> &[Mat<D>] {
        &self.m
    }

    pub fn scaled(&self, c: f64) -> Self {
        Self::new(self.m.iter().map(|m| c * m).collect()).expect("positive scaling keeps SPD")
    }

    /// `m0` and `m1` of `m0 I <= M <= m1 I` over all cells.
    pub fn eigen_bounds(&self) -> (f64, f64) {
        let mut lo = f64::INFINITY;
        let mut hi = 0.0_f64;
        for m in &self.m {
            let (vals, _) = sym_eigen(m);
            lo = lo.min(vals[0]);
            hi = hi.max(vals[D - 1]);
        }
        (lo, hi)
    }
}

/// `sigma_h = sum |K| rho_K`, `theta = (sigma_h / |Omega_c|)^(-2/d)` and the
/// stretching factor `kappa`, which is undefined once
/// `1 - (d gamma / 2) ln(theta) <= 0`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GlobalScalars {
    pub sigma_h: f64,
    pub theta: f64,
    pub kappa: Option<f64>,
}

/// `|K|` is the physical element volume; `|Omega_c|` is the total
/// computational volume.
pub fn global_scalars<const D: usize>(
    metric: &MetricField<D>,
    mesh: &SimplicialMesh<D>,
    gamma: f64,
) -> Result<GlobalScalars, MetricError> {
    let vols = mesh.volumes(CoordView::Physical);
    if vols.len() != metric.len() {
        return Err(MetricError::SizeMismatch {
            expected: vols.len(),
            got: metric.len(),
        });
    }
    let weighted: Vec<f64> = vols.iter().enumerate().map(|(k, v)| v * metric.rho(k)).collect();
    let sigma_h = pairwise_sum(&weighted);
    let omega_c = mesh.total_volume(CoordView::Computational);
    let theta = theta_from(sigma_h, omega_c, D);
    let kappa = stretching_factor(D, gamma, theta).ok();
    Ok(GlobalScalars {
        sigma_h,
        theta,
        kappa,
    })
}

pub fn theta_from(sigma_h: f64, omega_c: f64, d: usize) -> f64 {
    (sigma_h / omega_c).powf(-2.0 / d as f64)
}

/// `kappa = (d^(d g/2) theta^(d g/2) (1 - (d g/2) ln theta))^(-1)`, the
/// reciprocal of the proposed kernel's value at `A = theta I`.
pub fn stretching_factor(d: usize, gamma: f64, theta: f64) -> Result<f64, MetricError> {
    let q = d as f64 * gamma / 2.0;
    let log_term = 1.0 - q * theta.ln();
    if !(log_term > 0.0) {
        return Err(MetricError::InvalidKappa(log_term));
    }
    Ok(1.0 / ((d as f64).powf(q) * theta.powf(q) * log_term))
}

/// Rescale so that the smallest eigenvalue over all cells is one.
pub fn normalize_unit_floor<const D: usize>(metric: &MetricField<D>) -> MetricField<D> {
    let (m0, _) = metric.eigen_bounds();
    metric.scaled(1.0 / m0)
}

/// `M <- kappa^(2/d) M`.
pub fn apply_kappa<const D: usize>(metric: &MetricField<D>, kappa: f64) -> MetricField<D> {
    metric.scaled(kappa.powf(2.0 / D as f64))
}

/// P1 gradient of nodal values on each cell, in physical coordinates.
pub fn cell_gradients<const D: usize>(mesh: &SimplicialMesh<D>, values: &[f64]) -> Vec<Point<D>> {
    let x = mesh.x();
    mesh.cells()
        .map(|c| {
            let e = crate::mesh::edge_matrix(&c.iter().map(|&v| x[v]).collect::<Vec<_>>());
            let mut du = Point::<D>::zeros();
            for i in 0..D {
                du[i] = values[c[i + 1]] - values[c[0]];
            }
            let (_, e_inv) = det_inv(&e).expect("admissible mesh");
            e_inv.transpose() * du
        })
        .collect()
}

/// Nodal average of a per-cell quantity weighted by physical volume over
/// each node's element star.
pub fn nodal_metrics<const D: usize>(metric: &MetricField<D>, mesh: &SimplicialMesh<D>) -> Vec<Mat<D>> {
    let vols = mesh.volumes(CoordView::Physical);
    let stars = mesh.element_stars();
    (0..mesh.n_nodes())
        .map(|i| {
            let mut acc = Mat::<D>::zeros();
            let mut w = 0.0;
            for e in stars.star(i) {
                acc += vols[e.cell] * metric.get(e.cell);
                w += vols[e.cell];
            }
            acc / w
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum BalancingKind {
    /// `P_i = [M_i]^(-d/2)` with `[M] = sqrt(theta^(-1/2) det(M)^(1/d))`.
    Proposed,
    /// `P_i = det(M_i)^((p-1)/2)`.
    Huang { p: f64 },
}

pub fn balancing_function<const D: usize>(
    metric: &MetricField<D>,
    mesh: &SimplicialMesh<D>,
    kind: BalancingKind,
    theta: f64,
) -> Vec<f64> {
    let d = D as f64;
    nodal_metrics(metric, mesh)
        .iter()
        .map(|m| {
            let dm = det(m);
            match kind {
                BalancingKind::Proposed => {
                    let bracket = (theta.powf(-0.5) * dm.powf(1.0 / d)).sqrt();
                    bracket.powf(-d / 2.0)
                }
                BalancingKind::Huang { p } => dm.powf((p - 1.0) / 2.0),
            }
        })
        .collect()
}

/// One or more sweeps of volume-weighted averaging over each cell and its
/// facet neighbours.
pub fn smooth_metric<const D: usize>(
    metric: &MetricField<D>,
    mesh: &SimplicialMesh<D>,
    sweeps: usize,
) -> MetricField<D> {
    if sweeps == 0 {
        return metric.clone();
    }
    let vols = mesh.volumes(CoordView::Physical);
    let nb = mesh.facet_neighbors();
    let mut cur: Vec<Mat<D>> = metric.tensors().to_vec();
    for _ in 0..sweeps {
        cur = (0..cur.len())
            .map(|k| {
                let mut acc = vols[k] * cur[k];
                let mut w = vols[k];
                for &n in nb[k].iter().flatten() {
                    acc += vols[n] * cur[n];
                    w += vols[n];
                }
                let avg = acc / w;
                0.5 * (avg + avg.transpose())
            })
            .collect();
    }
    MetricField::new(cur).expect("convex combinations of SPD matrices are SPD")
}

/// `M_K = sqrt(1 + beta |grad u|^2) I`
pub fn metric_arclength<const D: usize>(
    grads: &[Point<D>],
    beta: f64,
) -> Result<MetricField<D>, MetricError> {
    if !(beta >= 0.0) {
        return Err(MetricError::InvalidBeta(beta));
    }
    MetricField::new(
        grads
            .iter()
            .map(|g| (1.0 + beta * g.norm_squared()).sqrt() * Mat::<D>::identity())
            .collect(),
    )
}

/// Below this gradient norm the principal direction falls back to `e_1`.
pub const GRADIENT_DIRECTION_EPS: f64 = 1e-12;

/// Anisotropic metric `lambda_1 v v^T + v_perp v_perp^T` with
/// `v = grad u / |grad u|`, `lambda_1 = 1 + alpha psi`,
/// `psi = sqrt(1 + |grad u|^2) - 1` and `alpha = beta / (<psi> (1 - beta))`.
/// `<psi>` is the physical-volume-weighted domain average.
pub fn metric_eigendecomp(
    mesh: &SimplicialMesh<2>,
    grads: &[Point<2>],
    beta: f64,
) -> Result<MetricField<2>, MetricError> {
    if !(beta > 0.0 && beta < 1.0) {
        return Err(MetricError::InvalidBeta(beta));
    }
    if grads.len() != mesh.n_cells() {
        return Err(MetricError::SizeMismatch {
            expected: mesh.n_cells(),
            got: grads.len(),
        });
    }
    let vols = mesh.volumes(CoordView::Physical);
    let psi: Vec<f64> = grads.iter().map(|g| (1.0 + g.norm_squared()).sqrt() - 1.0).collect();
    let weighted: Vec<f64> = psi.iter().zip(&vols).map(|(p, v)| p * v).collect();
    let mean_psi = pairwise_sum(&weighted) / pairwise_sum(&vols);
    if mean_psi == 0.0 {
        return Ok(MetricField::identity(mesh.n_cells()));
    }
    let alpha = beta / (mean_psi * (1.0 - beta));
    MetricField::new(
        grads
            .iter()
            .zip(&psi)
            .map(|(g, p)| {
                let n = g.norm();
                let v = if n < GRADIENT_DIRECTION_EPS {
                    Point::<2>::new(1.0, 0.0)
                } else {
                    g / n
                };
                let vp = Point::<2>::new(-v[1], v[0]);
                let l1 = 1.0 + alpha * p;
                l1 * v * v.transpose() + vp * vp.transpose()
            })
            .collect(),
    )
}

/// Absolute eigenvalue floor used when every recovered eigenvalue vanishes.
pub const HESSIAN_ABS_FLOOR: f64 = 1e-12;

fn cell_hessians<const D: usize>(mesh: &SimplicialMesh<D>, nodal_h: &[Mat<D>]) -> Result<Vec<Mat<D>>, MetricError> {
    if nodal_h.len() != mesh.n_nodes() {
        return Err(MetricError::SizeMismatch {
            expected: mesh.n_nodes(),
            got: nodal_h.len(),
        });
    }
    Ok(mesh
        .cells()
        .map(|c| {
            let mut acc = Mat::<D>::zeros();
            for &v in c {
                acc += nodal_h[v];
            }
            let avg = acc / (D as f64 + 1.0);
            0.5 * (avg + avg.transpose())
        })
        .collect())
}

/// Hessian metric `M_K = det(|H_K|)^(-1/(d+4)) |H_K|` where `H_K` is the
/// vertex average of the nodal Hessians and `|H|` takes absolute
/// eigenvalues. Eigenvalues are floored at `floor_rel` times the largest
/// absolute eigenvalue over the whole field.
pub fn metric_hessian<const D: usize>(
    mesh: &SimplicialMesh<D>,
    nodal_h: &[Mat<D>],
    floor_rel: f64,
) -> Result<MetricField<D>, MetricError> {
    let cell_h = cell_hessians(mesh, nodal_h)?;
    let global_max = cell_h
        .iter()
        .map(|h| {
            let (vals, _) = sym_eigen(h);
            vals.iter().fold(0.0_f64, |m, v| m.max(v.abs()))
        })
        .fold(0.0_f64, f64::max);
    let floor = (floor_rel * global_max).max(HESSIAN_ABS_FLOOR);
    let exponent = -1.0 / (D as f64 + 4.0);
    MetricField::new(
        cell_h
            .iter()
            .map(|h| {
                let abs_h = sym_map(h, |l| l.abs().max(floor));
                det(&abs_h).powf(exponent) * abs_h
            })
            .collect(),
    )
}

/// Regularized Hessian metric `det(I + |H_K|/a)^(-1/(d+4)) (I + |H_K|/a)`
/// with `a = (<det(|H|)^(2/(d+4))>)^((d+4)/(2d))`, the volume-weighted mean
/// over the physical mesh. Returns the metric and `a`.
pub fn metric_hessian_regularized<const D: usize>(
    mesh: &SimplicialMesh<D>,
    nodal_h: &[Mat<D>],
) -> Result<(MetricField<D>, f64), MetricError> {
    let cell_h = cell_hessians(mesh, nodal_h)?;
    let d = D as f64;
    let abs_h: Vec<Mat<D>> = cell_h.iter().map(|h| sym_map(h, f64::abs)).collect();
    let vols = mesh.volumes(CoordView::Physical);
    let weighted: Vec<f64> = abs_h
        .iter()
        .zip(&vols)
        .map(|(h, v)| v * det(h).max(0.0).powf(2.0 / (d + 4.0)))
        .collect();
    let mean = pairwise_sum(&weighted) / pairwise_sum(&vols);
    let alpha = mean.powf((d + 4.0) / (2.0 * d));
    if !(alpha > HESSIAN_ABS_FLOOR) {
        return Ok((MetricField::identity(mesh.n_cells()), 0.0));
    }
    let exponent = -1.0 / (d + 4.0);
    let m = MetricField::new(
        abs_h
            .iter()
            .map(|h| {
                let r = Mat::<D>::identity() + h / alpha;
                det(&r).powf(exponent) * r
            })
            .collect(),
    )?;
    Ok((m, alpha))
}

/// Hessian recovery by local quadratic least squares over node patches.
///
/// The patch of node `i` is its 2-ring in the node graph; a rank-deficient
/// fit retries with the 3-ring and finally falls back to the identity.
pub fn recover_hessian(mesh: &SimplicialMesh<2>, values: &[f64]) -> Vec<Mat<2>> {
    let nb = mesh.node_neighbors();
    let x = mesh.x();
    (0..mesh.n_nodes())
        .into_par_iter()
        .map(|i| {
            for rings in [2usize, 3] {
                let patch = k_ring(&nb, i, rings);
                if let Some(h) = fit_quadratic(x, values, i, &patch) {
                    return h;
                }
            }
            log::warn!("hessian recovery: rank-deficient patch at node {i}, using identity");
            Mat::<2>::identity()
        })
        .collect()
}

fn k_ring(nb: &[Vec<usize>], start: usize, rings: usize) -> Vec<usize> {
    let mut seen = vec![start];
    let mut frontier = vec![start];
    for _ in 0..rings {
        let mut next = Vec::new();
        for &v in &frontier {
            for &w in &nb[v] {
                if !seen.contains(&w) {
                    seen.push(w);
                    next.push(w);
                }
            }
        }
        frontier = next;
    }
    seen.sort_unstable();
    seen
}

fn fit_quadratic(x: &[Point<2>], values: &[f64], center: usize, patch: &[usize]) -> Option<Mat<2>> {
    if patch.len() < 6 {
        return None;
    }
    let c = x[center];
    let h = patch
        .iter()
        .map(|&v| (x[v] - c).norm())
        .fold(0.0_f64, f64::max);
    if h == 0.0 {
        return None;
    }
    let rows = patch.len();
    let a = DMatrix::from_fn(rows, 6, |r, col| {
        let d = (x[patch[r]] - c) / h;
        match col {
            0 => 1.0,
            1 => d[0],
            2 => d[1],
            3 => d[0] * d[0],
            4 => d[0] * d[1],
            _ => d[1] * d[1],
        }
    });
    let b = DVector::from_fn(rows, |r, _| values[patch[r]]);
    let svd = a.svd(true, true);
    let smax = svd.singular_values.max();
    let smin = svd.singular_values.min();
    if !(smin > 1e-10 * smax) {
        return None;
    }
    let coef = svd.solve(&b, 0.0).ok()?;
    let s = 1.0 / (h * h);
    Some(Mat::<2>::new(
        2.0 * coef[3] * s,
        coef[4] * s,
        coef[4] * s,
        2.0 * coef[5] * s,
    ))
}

/// Minimum eigenvalue over all cells; positive for every valid field.
pub fn min_eigenvalue_over<const D: usize>(metric: &MetricField<D>) -> f64 {
    metric
        .tensors()
        .iter()
        .map(min_eigenvalue)
        .fold(f64::INFINITY, f64::min)
}
