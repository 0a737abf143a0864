//! A-structure mesh functionals `G = rho T(A, det A)` and the discrete
//! energy `I_h = sum |K| rho_K T(A_K, alpha_K)`.

use crate::linalg::{det, det_inv, frobenius_dot, pairwise_sum, Mat};
use crate::mesh::{ElementGeometry, MeshError, SimplicialMesh};
use crate::metric::{global_scalars, MetricError, MetricField};
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FunctionalError {
    #[error("gamma must exceed 1, got {0}")]
    InvalidGamma(f64),
    #[error("mu must lie in [0, 1], got {0}")]
    InvalidMu(f64),
    #[error("theta must be positive, got {0}")]
    InvalidTheta(f64),
    #[error("scaling factor must be positive, got {0}")]
    InvalidScale(f64),
    #[error("det(A) = {0:e} is not positive")]
    NonPositiveAlpha(f64),
    #[error("coercivity check requires the proposed functional")]
    WrongKind,
    #[error(transparent)]
    Mesh(#[from] MeshError),
    #[error(transparent)]
    Metric(#[from] MetricError),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum FunctionalKind {
    Proposed,
    Huang { mu: f64 },
    KolasinskiHuang,
}

impl FunctionalKind {
    pub fn name(&self) -> &'static str {
        match self {
            FunctionalKind::Proposed => "proposed",
            FunctionalKind::Huang { .. } => "huang",
            FunctionalKind::KolasinskiHuang => "kolasinski_huang",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FunctionalParams {
    pub kind: FunctionalKind,
    pub gamma: f64,
    pub theta: f64,
}

impl FunctionalParams {
    pub fn new(kind: FunctionalKind, gamma: f64, theta: f64) -> Result<Self, FunctionalError> {
        let p = Self { kind, gamma, theta };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<(), FunctionalError> {
        if !(self.gamma > 1.0) || !self.gamma.is_finite() {
            return Err(FunctionalError::InvalidGamma(self.gamma));
        }
        if !(self.theta > 0.0) || !self.theta.is_finite() {
            return Err(FunctionalError::InvalidTheta(self.theta));
        }
        if let FunctionalKind::Huang { mu } = self.kind {
            if !(0.0..=1.0).contains(&mu) {
                return Err(FunctionalError::InvalidMu(mu));
            }
        }
        Ok(())
    }

    pub fn with_theta(&self, theta: f64) -> Self {
        Self { theta, ..*self }
    }

    /// Exponent `a` of `I[xi; cM] = c^a I[xi; M] + b`.
    pub fn scale_exponent(&self, d: usize) -> f64 {
        let d = d as f64;
        match self.kind {
            FunctionalKind::KolasinskiHuang => d / 2.0 - 2.0 * self.gamma,
            _ => d / 2.0 - d * self.gamma / 2.0,
        }
    }
}

/// `A = J^{-1} M^{-1} J^{-T}` together with `det(A)` and `tr(A)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct APullback<const D: usize> {
    pub a: Mat<D>,
    pub alpha: f64,
    pub tr: f64,
}

impl<const D: usize> APullback<D> {
    pub fn new(a: Mat<D>) -> Self {
        let a = 0.5 * (a + a.transpose());
        Self {
            alpha: det(&a),
            tr: a.trace(),
            a,
        }
    }

    pub fn from_jacobian_inv(j_inv: &Mat<D>, m_inv: &Mat<D>) -> Self {
        Self::new(j_inv * m_inv * j_inv.transpose())
    }

    pub fn from_geometry(geom: &ElementGeometry<D>, m_inv: &Mat<D>) -> Self {
        Self::from_jacobian_inv(&(geom.e_hat * geom.e_inv), m_inv)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TDerivs<const D: usize> {
    pub t: f64,
    pub dt_da: Mat<D>,
    pub dt_dalpha: f64,
}

impl<const D: usize> TDerivs<D> {
    /// `Q = A dT/dA + alpha dT/dalpha I`
    pub fn q(&self, a: &APullback<D>) -> Mat<D> {
        let q = a.a * self.dt_da + a.alpha * self.dt_dalpha * Mat::<D>::identity();
        0.5 * (q + q.transpose())
    }
}

pub fn t_and_derivs<const D: usize>(
    a: &APullback<D>,
    params: &FunctionalParams,
) -> Result<TDerivs<D>, FunctionalError> {
    if !(a.alpha > 0.0) {
        return Err(FunctionalError::NonPositiveAlpha(a.alpha));
    }
    let d = D as f64;
    let g = params.gamma;
    let q = d * g / 2.0;
    let dq = d.powf(q);
    let id = Mat::<D>::identity();
    Ok(match params.kind {
        FunctionalKind::Proposed => {
            let c = dq * (g / 2.0) * params.theta.powf(q);
            TDerivs {
                t: a.tr.powf(q) - c * a.alpha.ln(),
                dt_da: q * a.tr.powf(q - 1.0) * id,
                dt_dalpha: -c / a.alpha,
            }
        }
        FunctionalKind::Huang { mu } => TDerivs {
            t: mu * a.tr.powf(q) + (1.0 - 2.0 * mu) * dq * a.alpha.powf(g / 2.0),
            dt_da: mu * q * a.tr.powf(q - 1.0) * id,
            dt_dalpha: (1.0 - 2.0 * mu) * dq * (g / 2.0) * a.alpha.powf(g / 2.0 - 1.0),
        },
        FunctionalKind::KolasinskiHuang => {
            let diff = a.a - params.theta * id;
            let n2 = frobenius_dot(&diff, &diff);
            let dt_da = if n2 == 0.0 {
                Mat::<D>::zeros()
            } else {
                2.0 * g * n2.powf(g - 1.0) * diff
            };
            TDerivs {
                t: n2.powf(g),
                dt_da,
                dt_dalpha: 0.0,
            }
        }
    })
}

/// `K(A) = tr(A) - theta ln det(A)`, minimized at `A = theta I` for fixed `det(A)`.
pub fn basic_kernel<const D: usize>(a: &Mat<D>, theta: f64) -> f64 {
    a.trace() - theta * det(a).ln()
}

/// `rho_K T(A_K)` for one element.
pub fn element_density<const D: usize>(
    geom: &ElementGeometry<D>,
    m_inv: &Mat<D>,
    rho: f64,
    params: &FunctionalParams,
) -> Result<f64, FunctionalError> {
    let a = APullback::from_geometry(geom, m_inv);
    Ok(rho * t_and_derivs(&a, params)?.t)
}

/// Per-cell contributions `|K| rho_K T_K`.
pub fn energy_terms<const D: usize>(
    mesh: &SimplicialMesh<D>,
    metric: &MetricField<D>,
    params: &FunctionalParams,
) -> Result<Vec<f64>, FunctionalError> {
    (0..mesh.n_cells())
        .into_par_iter()
        .map(|k| {
            let geom = mesh.edge_matrices(k)?;
            Ok(geom.vol * element_density(&geom, metric.inv(k), metric.rho(k), params)?)
        })
        .collect()
}

pub fn energy<const D: usize>(
    mesh: &SimplicialMesh<D>,
    metric: &MetricField<D>,
    params: &FunctionalParams,
) -> Result<f64, FunctionalError> {
    Ok(pairwise_sum(&energy_terms(mesh, metric, params)?))
}

/// Constants of `T(A) >= c0 tr(A)^(d gamma/2) - C` for the proposed kernel.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CoercivityConstants {
    pub epsilon: f64,
    pub c0: f64,
    pub big_c: f64,
}

/// With `a = theta^(d gamma/2)`, `x - a ln x >= c x + a (1 - ln(a/(1-c)))`
/// holds for every `x > 0`. Taking `epsilon = min(1, a/e)` and
/// `c0 = 1 - epsilon/2` makes `C = d^(d gamma/2) a (ln(a/(1-c0)) - 1)`
/// non-negative.
pub fn coercivity_constants(d: usize, params: &FunctionalParams) -> Result<CoercivityConstants, FunctionalError> {
    params.validate()?;
    if params.kind != FunctionalKind::Proposed {
        return Err(FunctionalError::WrongKind);
    }
    let q = d as f64 * params.gamma / 2.0;
    let a = params.theta.powf(q);
    let epsilon = (a / std::f64::consts::E).min(1.0);
    let c0 = 1.0 - epsilon / 2.0;
    let big_c = (d as f64).powf(q) * a * ((a / (1.0 - c0)).ln() - 1.0);
    Ok(CoercivityConstants { epsilon, c0, big_c })
}

#[derive(Debug, Clone, PartialEq)]
pub struct CoercivitySample<const D: usize> {
    pub a: Mat<D>,
    pub t: f64,
    pub bound: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CoercivityReport<const D: usize> {
    pub constants: CoercivityConstants,
    pub samples: usize,
    pub violations: Vec<CoercivitySample<D>>,
    /// Smallest `T - bound` over all samples.
    pub min_slack: f64,
}

impl<const D: usize> CoercivityReport<D> {
    pub fn passed(&self) -> bool {
        self.violations.is_empty()
    }
}

/// Random SPD matrix with eigenvalues log-uniform in `[lo, hi]`.
pub fn random_spd<const D: usize>(rng: &mut impl Rng, lo: f64, hi: f64) -> Mat<D> {
    let q = random_orthogonal::<D>(rng);
    let mut diag = Mat::<D>::zeros();
    for i in 0..D {
        diag[(i, i)] = (rng.gen_range(lo.ln()..=hi.ln())).exp();
    }
    let m = q * diag * q.transpose();
    0.5 * (m + m.transpose())
}

pub fn random_orthogonal<const D: usize>(rng: &mut impl Rng) -> Mat<D> {
    let g = DMatrix::from_fn(D, D, |_, _| rng.gen_range(-1.0..1.0));
    let q = g.qr().q();
    Mat::<D>::from_fn(|i, j| q[(i, j)])
}

pub fn coercivity_check<const D: usize>(
    samples: usize,
    params: &FunctionalParams,
    seed: u64,
) -> Result<CoercivityReport<D>, FunctionalError> {
    let constants = coercivity_constants(D, params)?;
    let q = D as f64 * params.gamma / 2.0;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut mats = vec![params.theta * Mat::<D>::identity()];
    mats.extend((0..samples.saturating_sub(1)).map(|_| random_spd::<D>(&mut rng, 1e-3, 1e3)));
    let mut violations = Vec::new();
    let mut min_slack = f64::INFINITY;
    for a in mats {
        let ap = APullback::new(a);
        let t = t_and_derivs(&ap, params)?.t;
        let bound = constants.c0 * ap.tr.powf(q) - constants.big_c;
        let slack = t - bound;
        min_slack = min_slack.min(slack);
        if slack < -1e-12 * t.abs().max(bound.abs()).max(1.0) {
            violations.push(CoercivitySample { a: ap.a, t, bound });
        }
    }
    Ok(CoercivityReport {
        constants,
        samples,
        violations,
        min_slack,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScaleReport {
    pub c: f64,
    pub a_expected: f64,
    /// Slope fitted from the first two configurations.
    pub a_fit: f64,
    /// Constant `b` per configuration, computed with `a_expected`.
    pub b: Vec<f64>,
    /// `max |b_j - b_0| / max |I[xi; cM]|`
    pub affine_residual: f64,
    /// Relative deviation of the scaled gradient from `a` times the original.
    pub gradient_rel_err: f64,
}

impl ScaleReport {
    pub fn passed(&self, tol: f64) -> bool {
        self.affine_residual <= tol && self.gradient_rel_err <= tol
    }
}

/// Compare energies and gradients under `M` and `cM` on the mesh's own
/// computational configuration and `extra_configs` seeded perturbations of
/// its interior nodes. `theta` follows the metric in both cases.
pub fn scale_invariance_check<const D: usize>(
    mesh: &SimplicialMesh<D>,
    metric: &MetricField<D>,
    c: f64,
    params: &FunctionalParams,
    extra_configs: usize,
    seed: u64,
) -> Result<ScaleReport, FunctionalError> {
    if !(c > 0.0) {
        return Err(FunctionalError::InvalidScale(c));
    }
    let scaled = metric.scaled(c);
    let p1 = params.with_theta(global_scalars(metric, mesh, params.gamma)?.theta);
    let p2 = params.with_theta(global_scalars(&scaled, mesh, params.gamma)?.theta);
    let a_expected = c.powf(params.scale_exponent(D));

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut configs = vec![mesh.clone()];
    while configs.len() < extra_configs + 1 {
        let mut m = mesh.clone();
        let h = mesh.diameter() / (mesh.n_nodes() as f64).powf(1.0 / D as f64);
        let xi: Vec<_> = mesh
            .xi()
            .iter()
            .zip(mesh.tags())
            .map(|(p, t)| match t {
                crate::mesh::BoundaryTag::Interior => {
                    p + crate::linalg::Point::<D>::from_fn(|_, _| rng.gen_range(-0.15..0.15) * h)
                }
                _ => *p,
            })
            .collect();
        if m.set_xi(xi).is_ok() {
            configs.push(m);
        }
    }

    let mut i1 = Vec::new();
    let mut i2 = Vec::new();
    let mut grad_err = 0.0_f64;
    for m in &configs {
        i1.push(energy(m, metric, &p1)?);
        i2.push(energy(m, &scaled, &p2)?);
        let g1 = crate::gradient::energy_gradient_xi(m, metric, &p1)?;
        let g2 = crate::gradient::energy_gradient_xi(m, &scaled, &p2)?;
        let scale = g1.iter().map(|g| g.norm()).fold(0.0_f64, f64::max) * a_expected;
        for (a, b) in g1.iter().zip(&g2) {
            let diff = (b - a_expected * a).norm();
            grad_err = grad_err.max(if scale > 0.0 { diff / scale } else { diff });
        }
    }
    let b: Vec<f64> = i1.iter().zip(&i2).map(|(x, y)| y - a_expected * x).collect();
    let i_scale = i2.iter().fold(0.0_f64, |m, v| m.max(v.abs())).max(f64::MIN_POSITIVE);
    let affine_residual = b.iter().map(|v| (v - b[0]).abs()).fold(0.0, f64::max) / i_scale;
    let a_fit = if i1.len() >= 2 && i1[1] != i1[0] {
        (i2[1] - i2[0]) / (i1[1] - i1[0])
    } else {
        a_expected
    };
    Ok(ScaleReport {
        c,
        a_expected,
        a_fit,
        b,
        affine_residual,
        gradient_rel_err: grad_err,
    })
}

/// `det_inv` that reports a non-positive determinant as an `alpha` error.
pub(crate) fn spd_inverse<const D: usize>(m: &Mat<D>) -> Result<Mat<D>, FunctionalError> {
    match det_inv(m) {
        Some((d, inv)) if d > 0.0 => Ok(inv),
        other => Err(FunctionalError::NonPositiveAlpha(other.map_or(0.0, |v| v.0))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::{BoxDomain, Mesh2};
    use nalgebra::Matrix2;

    fn proposed(theta: f64) -> FunctionalParams {
        FunctionalParams::new(FunctionalKind::Proposed, 1.25, theta).unwrap()
    }

    fn all_kinds(theta: f64) -> [FunctionalParams; 3] {
        [
            proposed(theta),
            FunctionalParams::new(FunctionalKind::Huang { mu: 0.3 }, 1.5, theta).unwrap(),
            FunctionalParams::new(FunctionalKind::KolasinskiHuang, 1.25, theta).unwrap(),
        ]
    }

    #[test]
    fn proposed_at_identity() {
        let d = t_and_derivs(&APullback::new(Matrix2::identity()), &proposed(1.0)).unwrap();
        assert!((d.t - 2.378_414_230_005_442).abs() < 1e-12);
        assert!((d.dt_da - 1.486_508_893_753_401_4 * Matrix2::<f64>::identity()).amax() < 1e-12);
        assert!((d.dt_dalpha + 1.486_508_893_753_401_4).abs() < 1e-12);
    }

    #[test]
    fn kh_and_huang_special_values() {
        let kh = FunctionalParams::new(FunctionalKind::KolasinskiHuang, 1.25, 0.7).unwrap();
        let d = t_and_derivs(&APullback::new(0.7 * Matrix2::identity()), &kh).unwrap();
        assert_eq!(d.t, 0.0);
        assert_eq!(d.dt_da, Matrix2::zeros());

        let h = FunctionalParams::new(FunctionalKind::Huang { mu: 0.5 }, 1.25, 1.0).unwrap();
        let a = APullback::new(Matrix2::new(2.0, 0.3, 0.3, 1.0));
        let d = t_and_derivs(&a, &h).unwrap();
        assert!((d.t - 0.5 * 3.0_f64.powf(1.25)).abs() < 1e-14);
        assert_eq!(d.dt_dalpha, 0.0);
    }

    #[test]
    fn parameter_validation() {
        assert_eq!(
            FunctionalParams::new(FunctionalKind::Proposed, 1.0, 1.0).unwrap_err(),
            FunctionalError::InvalidGamma(1.0)
        );
        assert!(FunctionalParams::new(FunctionalKind::Huang { mu: 1.5 }, 1.5, 1.0).is_err());
        assert!(FunctionalParams::new(FunctionalKind::Proposed, 1.5, 0.0).is_err());
        let bad = APullback::new(Matrix2::new(1.0, 0.0, 0.0, -1.0));
        assert!(matches!(
            t_and_derivs(&bad, &proposed(1.0)),
            Err(FunctionalError::NonPositiveAlpha(_))
        ));
    }

    /// Central differences of `T` in the entries of `A`, treating `alpha`
    /// as an independent variable.
    fn fd_dt_da(a: &Matrix2<f64>, alpha: f64, p: &FunctionalParams) -> Matrix2<f64> {
        let h = 1e-6 * a.norm();
        let eval = |m: Matrix2<f64>| {
            let ap = APullback { a: m, alpha, tr: m.trace() };
            t_and_derivs(&ap, p).unwrap().t
        };
        Matrix2::from_fn(|i, j| {
            let mut e = Matrix2::zeros();
            e[(i, j)] = h;
            (eval(a + e) - eval(a - e)) / (2.0 * h)
        })
    }

    #[test]
    fn derivatives_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..100 {
            let a = random_spd::<2>(&mut rng, 0.2, 5.0);
            let alpha = det(&a);
            for p in all_kinds(0.8) {
                let ap = APullback::new(a);
                let d = t_and_derivs(&ap, &p).unwrap();
                let fd = fd_dt_da(&a, alpha, &p);
                let scale = d.dt_da.amax().max(1e-8);
                assert!((fd - d.dt_da).amax() / scale <= 1e-6, "{:?}", p.kind);

                let h = 1e-6 * alpha;
                let t = |al: f64| t_and_derivs(&APullback { a, alpha: al, tr: a.trace() }, &p).unwrap().t;
                let fd_alpha = (t(alpha + h) - t(alpha - h)) / (2.0 * h);
                let err = (fd_alpha - d.dt_dalpha).abs() / d.dt_dalpha.abs().max(1e-8);
                assert!(err <= 1e-6 || d.dt_dalpha == 0.0 && fd_alpha.abs() < 1e-8);
            }
        }
    }

    #[test]
    fn q_vanishes_at_equidistributed_alignment() {
        for theta in [0.3, 1.0, 2.5] {
            let a = APullback::new(theta * Matrix2::identity());
            let p = proposed(theta);
            let q = t_and_derivs(&a, &p).unwrap().q(&a);
            assert!(q.amax() <= 1e-12, "{q}");
        }
    }

    #[test]
    fn kernel_minimized_at_theta_identity() {
        let theta = 0.7;
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let target_det = theta * theta;
        let best = basic_kernel(&(theta * Matrix2::identity()), theta);
        for _ in 0..500 {
            let a = random_spd::<2>(&mut rng, 0.05, 20.0);
            let a = a * (target_det / det(&a)).sqrt();
            assert!(basic_kernel(&a, theta) >= best - 1e-12);
        }
    }

    #[test]
    fn energy_on_identity_mapping() {
        let mesh = Mesh2::structured(5, 5, BoxDomain::unit_square()).unwrap();
        let id = MetricField::identity(mesh.n_cells());
        assert!((energy(&mesh, &id, &proposed(1.0)).unwrap() - 2.378_414_230_005_442).abs() < 1e-12);
        let kh = FunctionalParams::new(FunctionalKind::KolasinskiHuang, 1.25, 1.0).unwrap();
        assert!(energy(&mesh, &id, &kh).unwrap().abs() < 1e-14);
    }

    #[test]
    fn energy_scale_law_for_doubled_metric() {
        let mesh = Mesh2::structured(4, 4, BoxDomain::unit_square()).unwrap();
        let id = MetricField::identity(mesh.n_cells());
        let two = id.scaled(2.0);
        let p1 = proposed(1.0);
        let p2 = proposed(0.5);
        let i1 = energy(&mesh, &id, &p1).unwrap();
        let i2 = energy(&mesh, &two, &p2).unwrap();
        // a = 2^(1 - 1.25), b = sigma_h d^(d g/2) (d g/2) theta'^(d g/2) ln 2
        let a = 2.0_f64.powf(-0.25);
        let q = 1.25_f64;
        let b = 2.0 * 2.0_f64.powf(q) * q * 0.5_f64.powf(q) * 2.0_f64.ln();
        assert!((i2 - (a * i1 + b)).abs() < 1e-12 * i2.abs());
    }

    #[test]
    fn coercivity_constants_and_sampling() {
        let p = proposed(1.0);
        let c = coercivity_constants(2, &p).unwrap();
        assert!(c.big_c >= 0.0 && c.c0 < 1.0 && c.c0 > 0.0);
        let rep = coercivity_check::<2>(10_000, &p, 11).unwrap();
        assert!(rep.passed(), "{:?}", rep.violations.first());
        for theta in [0.01, 0.3, 4.0, 50.0] {
            assert!(coercivity_check::<2>(2_000, &proposed(theta), 5).unwrap().passed());
        }
        let bad = FunctionalParams { kind: FunctionalKind::Proposed, gamma: 1.0, theta: 1.0 };
        assert_eq!(coercivity_constants(2, &bad).unwrap_err(), FunctionalError::InvalidGamma(1.0));
    }

    #[test]
    fn scale_exponent_values() {
        assert!((4.0_f64.powf(proposed(1.0).scale_exponent(2)) - 0.707_106_781_186_547_5).abs() < 1e-12);
        let kh = FunctionalParams::new(FunctionalKind::KolasinskiHuang, 1.25, 1.0).unwrap();
        assert!((kh.scale_exponent(2) - (1.0 - 2.5)).abs() < 1e-15);
    }
}
