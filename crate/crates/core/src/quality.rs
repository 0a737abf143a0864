//! Element-wise and global mesh quality, histogram data, element-size lower
//! bounds from coercivity, and interpolation errors against analytic fields.

use crate::functional::{coercivity_constants, FunctionalError, FunctionalParams};
use crate::linalg::{det, factorial, pairwise_sum, Mat, Point};
use crate::mesh::{min_height_in_metric, CoordView, MeshError, SimplicialMesh};
use crate::metric::MetricField;
use rayon::prelude::*;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum QualityError {
    #[error(transparent)]
    Mesh(#[from] MeshError),
    #[error(transparent)]
    Functional(#[from] FunctionalError),
    #[error("metric has {got} tensors but the mesh has {expected} cells")]
    SizeMismatch { expected: usize, got: usize },
    #[error("element-size bounds need gamma > 1, got {0}")]
    GammaTooSmall(f64),
}

#[derive(Debug, Clone, PartialEq)]
pub struct PerCellQuality {
    pub q_eq: Vec<f64>,
    /// Reciprocal alignment measure, in `(0, 1]`.
    pub inv_q_ali: Vec<f64>,
    pub q_geo: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct QualityReport {
    pub q_eq: f64,
    pub q_ali: f64,
    pub q_geo: f64,
    pub per_cell: PerCellQuality,
    pub e_l2: Option<f64>,
    pub e_h1: Option<f64>,
    /// Smallest physical element volume.
    pub min_vol: f64,
    /// Smallest element height measured in the metric.
    pub min_height: f64,
}

/// `tr(S) / (d det(S)^(1/d))` for an SPD `S`; at least 1 by AM-GM.
pub fn trace_det_ratio<const D: usize>(s: &Mat<D>) -> f64 {
    s.trace() / (D as f64 * det(s).powf(1.0 / D as f64))
}

/// Alignment measure of `J` in the metric `M`.
pub fn alignment_measure<const D: usize>(j: &Mat<D>, m: &Mat<D>) -> f64 {
    trace_det_ratio(&(j.transpose() * m * j))
}

pub fn geometric_measure<const D: usize>(j: &Mat<D>) -> f64 {
    trace_det_ratio(&(j.transpose() * j))
}

fn rms(values: &[f64]) -> f64 {
    let sq: Vec<f64> = values.iter().map(|v| v * v).collect();
    (pairwise_sum(&sq) / values.len() as f64).sqrt()
}

/// Quality measures of `mesh` in `metric`. `J_K` maps the computational
/// element onto the physical one, and `|K|` in the equidistribution measure
/// is the physical volume.
pub fn quality_metrics<const D: usize>(
    mesh: &SimplicialMesh<D>,
    metric: &MetricField<D>,
) -> Result<QualityReport, QualityError> {
    if metric.len() != mesh.n_cells() {
        return Err(QualityError::SizeMismatch { expected: mesh.n_cells(), got: metric.len() });
    }
    let cells: Vec<(f64, f64, f64, f64)> = (0..mesh.n_cells())
        .into_par_iter()
        .map(|k| {
            let g = mesh.edge_matrices(k)?;
            let m = metric.get(k);
            let h = min_height_in_metric(&g, m)?;
            Ok((g.vol * metric.rho(k), alignment_measure(&g.j, m), geometric_measure(&g.j), h))
        })
        .collect::<Result<_, MeshError>>()?;
    let weights: Vec<f64> = cells.iter().map(|c| c.0).collect();
    let mean = pairwise_sum(&weights) / cells.len() as f64;
    let q_eq: Vec<f64> = weights.iter().map(|w| w / mean).collect();
    let q_ali: Vec<f64> = cells.iter().map(|c| c.1).collect();
    let q_geo: Vec<f64> = cells.iter().map(|c| c.2).collect();
    let min_vol = mesh.volumes(CoordView::Physical).into_iter().fold(f64::INFINITY, f64::min);
    Ok(QualityReport {
        q_eq: rms(&q_eq),
        q_ali: rms(&q_ali),
        q_geo: rms(&q_geo),
        per_cell: PerCellQuality { q_eq, inv_q_ali: q_ali.iter().map(|q| 1.0 / q).collect(), q_geo },
        e_l2: None,
        e_h1: None,
        min_vol,
        min_height: cells.iter().map(|c| c.3).fold(f64::INFINITY, f64::min),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Histogram {
    pub lo: f64,
    pub hi: f64,
    pub counts: Vec<usize>,
}

impl Histogram {
    pub fn edges(&self) -> Vec<f64> {
        let n = self.counts.len();
        (0..=n).map(|i| self.lo + (self.hi - self.lo) * i as f64 / n as f64).collect()
    }
}

pub const HISTOGRAM_BINS: usize = 50;

/// Uniform bins over `[min, max]`; the maximum lands in the last bin.
pub fn histogram(values: &[f64], bins: usize) -> Histogram {
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut counts = vec![0; bins];
    if values.is_empty() {
        return Histogram { lo: 0.0, hi: 0.0, counts };
    }
    let width = hi - lo;
    for v in values {
        let b = if width > 0.0 { (((v - lo) / width) * bins as f64) as usize } else { 0 };
        counts[b.min(bins - 1)] += 1;
    }
    Histogram { lo, hi, counts }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CorollaryBounds {
    pub c1: f64,
    pub c2: f64,
    /// Lower bound on every element height in the metric.
    pub a_bound: f64,
    /// Lower bound on every element volume.
    pub vol_bound: f64,
    pub r0: f64,
    pub m0: f64,
    pub m1: f64,
}

/// Diameter of the inscribed ball of a simplex: `2 d |K| / surface area`.
pub fn inscribed_diameter<const D: usize>(verts: &[Point<D>]) -> f64 {
    let e = crate::mesh::edge_matrix(verts);
    let vol = det(&e).abs() / factorial(D);
    let mut area = 0.0;
    for skip in 0..=D {
        let face: Vec<Point<D>> = verts.iter().enumerate().filter(|(i, _)| *i != skip).map(|(_, p)| *p).collect();
        area += facet_measure(&face);
    }
    2.0 * D as f64 * vol / area
}

/// `(D-1)`-volume of a facet from its Gram determinant.
fn facet_measure<const D: usize>(face: &[Point<D>]) -> f64 {
    let n = face.len() - 1;
    let mut gram = nalgebra::DMatrix::<f64>::zeros(n, n);
    for a in 0..n {
        for b in 0..n {
            gram[(a, b)] = (face[a + 1] - face[0]).dot(&(face[b + 1] - face[0]));
        }
    }
    gram.determinant().max(0.0).sqrt() / factorial(n)
}

/// Element-size lower bounds for the proposed functional, evaluated on the
/// computational mesh of `mesh0` with `i_h0` the energy at the start of the
/// flow. The reference simplex is the unit right simplex, with diameter
/// `sqrt(2)` and height `1/sqrt(d)`.
pub fn corollary_bounds<const D: usize>(
    params: &FunctionalParams,
    mesh0: &SimplicialMesh<D>,
    metric: &MetricField<D>,
    i_h0: f64,
) -> Result<CorollaryBounds, QualityError> {
    let gamma = params.gamma;
    if gamma <= 1.0 {
        return Err(QualityError::GammaTooSmall(gamma));
    }
    let cc = coercivity_constants(D, params)?;
    let d = D as f64;
    let nc = mesh0.n_cells() as f64;
    let (m0, m1) = metric.eigen_bounds();
    let alpha = cc.c0 * m0.powf(d / 2.0);
    let beta = m1.powf(d / 2.0) * cc.big_c;
    let a_hat = 1.0 / d.sqrt();
    let h_hat = 2f64.sqrt();
    let omega_p = mesh0.total_volume(CoordView::Physical);
    let c1 = (alpha * a_hat.powf(4.0 * gamma) / (factorial(D) * h_hat.powf(4.0 * gamma) * (beta * omega_p + i_h0)))
        .powf(1.0 / (4.0 * gamma - d));
    let c2 = c1.powi(D as i32) / factorial(D);
    let xi = mesh0.xi();
    let r_min = (0..mesh0.n_cells())
        .map(|k| {
            let v: Vec<Point<D>> = mesh0.cell(k).iter().map(|&i| xi[i]).collect();
            inscribed_diameter(&v)
        })
        .fold(f64::INFINITY, f64::min);
    let r0 = r_min * nc.powf(1.0 / d);
    let g1 = gamma / (gamma - 1.0);
    let a_bound = c1 * r0.powf(g1) * m1.powf(-1.0 / (2.0 * (gamma - 1.0))) * nc.powf(-gamma / (d * gamma - d));
    let vol_bound =
        c2 * r0.powf(d * g1) * m1.powf(-d / (2.0 * (gamma - 1.0)) - d / 2.0) * nc.powf(-g1);
    Ok(CorollaryBounds { c1, c2, a_bound, vol_bound, r0, m0, m1 })
}

/// A scalar field that can be evaluated, with its gradient, anywhere.
pub trait AnalyticField<const D: usize>: Sync {
    fn value(&self, p: &Point<D>) -> f64;
    fn gradient(&self, p: &Point<D>) -> Point<D>;
}

/// Degree-4 six-point rule on triangles: barycentric points and weights
/// summing to one.
const DUNAVANT4: [([f64; 3], f64); 6] = [
    ([0.445948490915965, 0.445948490915965, 0.108103018168070], 0.223381589678011),
    ([0.445948490915965, 0.108103018168070, 0.445948490915965], 0.223381589678011),
    ([0.108103018168070, 0.445948490915965, 0.445948490915965], 0.223381589678011),
    ([0.091576213509771, 0.091576213509771, 0.816847572980459], 0.109951743655322),
    ([0.091576213509771, 0.816847572980459, 0.091576213509771], 0.109951743655322),
    ([0.816847572980459, 0.091576213509771, 0.091576213509771], 0.109951743655322),
];

/// Integrate `f(bary, point)` over every physical triangle with the
/// degree-4 rule; returns per-cell integrals.
pub fn integrate_cells(mesh: &SimplicialMesh<2>, f: impl Fn(usize, &[f64; 3], &Point<2>) -> f64 + Sync) -> Vec<f64> {
    let x = mesh.x();
    (0..mesh.n_cells())
        .into_par_iter()
        .map(|k| {
            let c = mesh.cell(k);
            let area = mesh.signed_volume(k, CoordView::Physical);
            let mut s = 0.0;
            for (b, w) in &DUNAVANT4 {
                let p = x[c[0]] * b[0] + x[c[1]] * b[1] + x[c[2]] * b[2];
                s += w * f(k, b, &p);
            }
            s * area
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InterpErrors {
    pub l2: f64,
    /// `H^1` seminorm of the error.
    pub h1: f64,
}

/// Error of the piecewise-linear nodal interpolant of `field` on the
/// physical mesh.
pub fn interp_error(mesh: &SimplicialMesh<2>, field: &dyn AnalyticField<2>) -> InterpErrors {
    let x = mesh.x();
    let nodal: Vec<f64> = x.par_iter().map(|p| field.value(p)).collect();
    let grads = crate::metric::cell_gradients(mesh, &nodal);
    let l2 = integrate_cells(mesh, |k, b, p| {
        let c = mesh.cell(k);
        let u = nodal[c[0]] * b[0] + nodal[c[1]] * b[1] + nodal[c[2]] * b[2];
        (field.value(p) - u).powi(2)
    });
    let h1 = integrate_cells(mesh, |k, _, p| (field.gradient(p) - grads[k]).norm_squared());
    InterpErrors { l2: pairwise_sum(&l2).sqrt(), h1: pairwise_sum(&h1).sqrt() }
}

impl QualityReport {
    pub fn with_errors(mut self, e: InterpErrors) -> Self {
        self.e_l2 = Some(e.l2);
        self.e_h1 = Some(e.h1);
        self
    }
}
