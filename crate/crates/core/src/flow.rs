//! Computational-view gradient flow: frozen per-span invariants, the BDF
//! integrator with step rejection, and the outer adaptation loop.

use crate::functional::{t_and_derivs, APullback, FunctionalError, FunctionalKind, FunctionalParams};
use crate::gradient::r_row;
use crate::interp::{interpolate_with, transfer, InterpError};
use crate::linalg::{det_inv, pairwise_sum, Mat, Point};
use crate::mesh::{min_height_in_metric, BoundaryTag, CoordView, ElementStars, MeshError, SimplicialMesh};
use crate::metric::{
    apply_kappa, balancing_function, global_scalars, normalize_unit_floor, smooth_metric, stretching_factor, BalancingKind,
    GlobalScalars, MetricError, MetricField,
};
use crate::solver::{newton_krylov_solve, GradientSystem, NewtonConfig, SolverError};
use crate::quality::{corollary_bounds, CorollaryBounds, QualityError};
use rayon::prelude::*;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum FlowError {
    #[error("step {step} at t = {t}: {source}")]
    Solver { step: usize, t: f64, source: SolverError },
    #[error("outer iteration {iter}: {source}")]
    Outer { iter: usize, source: Box<FlowError> },
    #[error(transparent)]
    Mesh(#[from] MeshError),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error(transparent)]
    Functional(#[from] FunctionalError),
    #[error(transparent)]
    Interp(#[from] InterpError),
    #[error(transparent)]
    Quality(#[from] QualityError),
    #[error("boundary face normal {0:?} is not axis-aligned")]
    NonAxisFace(Vec<f64>),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scheme {
    Bdf1,
    Bdf2,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FlowConfig {
    pub tau: f64,
    pub t_span: f64,
    pub n_t: usize,
    pub scheme: Scheme,
    pub newton: NewtonConfig,
    /// Retries at half the step after a failed or energy-increasing step.
    pub max_halvings: usize,
    /// Relative energy increase tolerated before a step is rejected.
    pub energy_rtol: f64,
}

impl Default for FlowConfig {
    fn default() -> Self {
        Self {
            tau: 0.004,
            t_span: 1.0,
            n_t: 20,
            scheme: Scheme::Bdf2,
            newton: NewtonConfig::default(),
            max_halvings: 5,
            energy_rtol: 1e-10,
        }
    }
}

/// `(a_n, a_{n-1}, h)` of the variable-step BDF2 formula
/// `u_{n+1} = a_n u_n - a_{n-1} u_{n-1} + h f(u_{n+1})` with
/// `omega = dt / dt_prev`; for equal steps this is `(4/3, 1/3, 2 dt / 3)`.
pub fn bdf2_coefficients(dt: f64, dt_prev: f64) -> (f64, f64, f64) {
    let w = dt / dt_prev;
    let den = 1.0 + 2.0 * w;
    ((1.0 + w) * (1.0 + w) / den, w * w / den, dt * (1.0 + w) / den)
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub t: f64,
    pub dt: f64,
    pub energy: f64,
    pub newton_iters: usize,
    pub cg_iters: usize,
    pub rejected: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SpanResult {
    pub u: Vec<f64>,
    pub initial_energy: f64,
    pub steps: Vec<StepRecord>,
}

/// Integrate `du/dt = -(w / tau) g(u)` over `[0, t_span]` with `n_t`
/// nominal steps. A step that fails to converge or raises the energy is
/// retried at half the step size.
pub fn bdf_advance<S: GradientSystem>(sys: &S, u0: Vec<f64>, cfg: &FlowConfig) -> Result<SpanResult, FlowError> {
    let nominal = cfg.t_span / cfg.n_t.max(1) as f64;
    let initial_energy = sys.energy(&u0).map_err(|e| FlowError::Solver { step: 0, t: 0.0, source: e })?;
    let mut out = SpanResult { u: Vec::new(), initial_energy, steps: Vec::new() };
    if cfg.n_t == 0 || cfg.t_span <= 0.0 {
        out.u = u0;
        return Ok(out);
    }
    let mut u = u0;
    let mut prev: Option<(Vec<f64>, f64)> = None;
    let mut energy = initial_energy;
    let mut t = 0.0;
    let mut dt = nominal;
    let t_end = cfg.t_span;
    while t_end - t > 1e-12 * t_end {
        dt = dt.min(t_end - t);
        let mut rejected = 0;
        let step_index = out.steps.len() + 1;
        let accepted = loop {
            let (c, h) = match (&prev, cfg.scheme) {
                (Some((up, dtp)), Scheme::Bdf2) => {
                    let (a1, a2, h) = bdf2_coefficients(dt, *dtp);
                    (u.iter().zip(up).map(|(a, b)| a1 * a - a2 * b).collect::<Vec<_>>(), h)
                }
                _ => (u.clone(), dt),
            };
            let attempt = newton_krylov_solve(sys, &c, h, u.clone(), &cfg.newton).and_then(|o| {
                let e = sys.energy(&o.u)?;
                Ok((o, e))
            });
            match attempt {
                Ok((o, e)) if e <= energy + cfg.energy_rtol * energy.abs() => break (o, e),
                Ok((_, e)) => log::debug!("step {step_index}: energy rose to {e} from {energy}; halving dt"),
                Err(err) => {
                    log::debug!("step {step_index}: {err}; halving dt");
                    if rejected == cfg.max_halvings {
                        return Err(FlowError::Solver { step: step_index, t, source: err });
                    }
                }
            }
            if rejected == cfg.max_halvings {
                return Err(FlowError::Solver {
                    step: step_index,
                    t,
                    source: SolverError::StepTooSmall(rejected),
                });
            }
            rejected += 1;
            dt *= 0.5;
        };
        let (o, e) = accepted;
        t += dt;
        out.steps.push(StepRecord {
            t,
            dt,
            energy: e,
            newton_iters: o.newton_iters,
            cg_iters: o.cg_iters,
            rejected,
        });
        prev = Some((std::mem::replace(&mut u, o.u), dt));
        energy = e;
        dt = (2.0 * dt).min(nominal);
    }
    out.u = u;
    Ok(out)
}

/// Per-span data with the physical mesh held fixed.
#[derive(Debug, Clone)]
pub struct FrozenInvariants<const D: usize> {
    /// `E^{-1} M^{-1} E^{-T}` so that `A = Ê B Ê^T`.
    pub b: Vec<Mat<D>>,
    pub rho: Vec<f64>,
    /// Physical element volumes.
    pub vol: Vec<f64>,
    /// Balancing weight per node.
    pub p: Vec<f64>,
    pub params: FunctionalParams,
    pub tau: f64,
    cells: Vec<usize>,
    stars: ElementStars,
    /// `(node, component)` of every free unknown.
    dofs: Vec<(usize, usize)>,
    weights: Vec<f64>,
    xi_base: Vec<Point<D>>,
    tol_xi: f64,
}

/// Free components per node: all for interior nodes, the tangential ones
/// for face nodes, none for corners.
pub fn free_dofs<const D: usize>(tags: &[BoundaryTag<D>]) -> Result<Vec<(usize, usize)>, FlowError> {
    let mut dofs = Vec::new();
    for (i, t) in tags.iter().enumerate() {
        match t {
            BoundaryTag::Interior => dofs.extend((0..D).map(|c| (i, c))),
            BoundaryTag::Corner => {}
            BoundaryTag::Face { normal, .. } => {
                let n = normal / normal.norm();
                let axis = (0..D).find(|&c| (n[c].abs() - 1.0).abs() < 1e-12);
                let axis = axis.ok_or_else(|| FlowError::NonAxisFace(n.iter().copied().collect()))?;
                dofs.extend((0..D).filter(|&c| c != axis).map(|c| (i, c)));
            }
        }
    }
    Ok(dofs)
}

impl<const D: usize> FrozenInvariants<D> {
    pub fn new(
        mesh: &SimplicialMesh<D>,
        metric: &MetricField<D>,
        p: Vec<f64>,
        params: FunctionalParams,
        tau: f64,
    ) -> Result<Self, FlowError> {
        let geo: Result<Vec<_>, MeshError> = (0..mesh.n_cells()).map(|k| mesh.edge_matrices(k)).collect();
        let geo = geo?;
        let b = geo
            .iter()
            .enumerate()
            .map(|(k, g)| {
                let b = g.e_inv * metric.inv(k) * g.e_inv.transpose();
                0.5 * (b + b.transpose())
            })
            .collect();
        let dofs = free_dofs(mesh.tags())?;
        let weights = dofs.iter().map(|&(i, _)| p[i]).collect();
        Ok(Self {
            b,
            rho: (0..mesh.n_cells()).map(|k| metric.rho(k)).collect(),
            vol: geo.iter().map(|g| g.vol).collect(),
            p,
            params,
            tau,
            cells: mesh.cells_flat().to_vec(),
            stars: mesh.element_stars(),
            dofs,
            weights,
            xi_base: mesh.xi().to_vec(),
            tol_xi: mesh.degeneracy_tol(CoordView::Computational),
        })
    }

    pub fn free_values(&self, xi: &[Point<D>]) -> Vec<f64> {
        self.dofs.iter().map(|&(i, c)| xi[i][c]).collect()
    }

    pub fn expand(&self, u: &[f64]) -> Vec<Point<D>> {
        let mut xi = self.xi_base.clone();
        for (&(i, c), v) in self.dofs.iter().zip(u) {
            xi[i][c] = *v;
        }
        xi
    }

    fn cell(&self, k: usize) -> &[usize] {
        &self.cells[k * (D + 1)..(k + 1) * (D + 1)]
    }

    fn e_hat(&self, xi: &[Point<D>], k: usize) -> Result<(Mat<D>, Mat<D>), SolverError> {
        let c = self.cell(k);
        let mut e = Mat::<D>::zeros();
        for i in 0..D {
            e.set_column(i, &(xi[c[i + 1]] - xi[c[0]]));
        }
        match det_inv(&e) {
            Some((d, inv)) if d > self.tol_xi => Ok((e, inv)),
            _ => Err(SolverError::Inadmissible(Some(k))),
        }
    }

    fn pullback(&self, e_hat: &Mat<D>, k: usize) -> APullback<D> {
        APullback::new(e_hat * self.b[k] * e_hat.transpose())
    }

    fn map_err(_: FunctionalError) -> SolverError {
        SolverError::Inadmissible(None)
    }

    pub fn energy_at(&self, xi: &[Point<D>]) -> Result<f64, SolverError> {
        let terms: Result<Vec<f64>, SolverError> = (0..self.vol.len())
            .into_par_iter()
            .map(|k| {
                let (e, _) = self.e_hat(xi, k)?;
                let a = self.pullback(&e, k);
                let t = t_and_derivs(&a, &self.params).map_err(Self::map_err)?.t;
                Ok(self.vol[k] * self.rho[k] * t)
            })
            .collect();
        Ok(pairwise_sum(&terms?))
    }

    /// Unprojected `dI_h/dxi` at every node.
    pub fn gradient_at(&self, xi: &[Point<D>]) -> Result<Vec<Point<D>>, SolverError> {
        let tails: Result<Vec<Mat<D>>, SolverError> = (0..self.vol.len())
            .into_par_iter()
            .map(|k| {
                let (e, e_inv) = self.e_hat(xi, k)?;
                let a = self.pullback(&e, k);
                let td = t_and_derivs(&a, &self.params).map_err(Self::map_err)?;
                Ok(2.0 * self.vol[k] * self.rho[k] * e_inv * td.q(&a))
            })
            .collect();
        let tails = tails?;
        Ok((0..self.stars.n_nodes())
            .into_par_iter()
            .map(|i| {
                let mut g = Point::<D>::zeros();
                for s in self.stars.star(i) {
                    g += r_row(&tails[s.cell], s.local);
                }
                g
            })
            .collect())
    }

    /// `-(P / tau)` times the projected gradient, on every node.
    pub fn residual(&self, xi: &[Point<D>]) -> Result<Vec<Point<D>>, SolverError> {
        let g = self.gradient_at(xi)?;
        let mut out: Vec<Point<D>> = vec![Point::<D>::zeros(); g.len()];
        for &(i, c) in &self.dofs {
            out[i][c] = -(self.p[i] / self.tau) * g[i][c];
        }
        Ok(out)
    }

    pub fn min_volume(&self, xi: &[Point<D>]) -> f64 {
        (0..self.vol.len())
            .map(|k| {
                let c = self.cell(k);
                let mut e = Mat::<D>::zeros();
                for i in 0..D {
                    e.set_column(i, &(xi[c[i + 1]] - xi[c[0]]));
                }
                crate::linalg::det(&e) / crate::linalg::factorial(D)
            })
            .fold(f64::INFINITY, f64::min)
    }
}

impl<const D: usize> GradientSystem for FrozenInvariants<D> {
    fn len(&self) -> usize {
        self.dofs.len()
    }

    fn weights(&self) -> &[f64] {
        &self.weights
    }

    fn tau(&self) -> f64 {
        self.tau
    }

    fn gradient(&self, u: &[f64]) -> Result<Vec<f64>, SolverError> {
        let g = self.gradient_at(&self.expand(u))?;
        Ok(self.dofs.iter().map(|&(i, c)| g[i][c]).collect())
    }

    fn energy(&self, u: &[f64]) -> Result<f64, SolverError> {
        self.energy_at(&self.expand(u))
    }
}

/// How the raw metric is post-processed before a span.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricOptions {
    pub sweeps: usize,
    /// Divide by the smallest eigenvalue so that `M >= I`.
    pub normalize: bool,
    pub apply_kappa: bool,
}

impl Default for MetricOptions {
    fn default() -> Self {
        Self { sweeps: 2, normalize: true, apply_kappa: true }
    }
}

/// Smooth, normalize and stretch a raw metric; returns the metric used by
/// the flow together with its global scalars.
pub fn prepare_metric<const D: usize>(
    raw: &MetricField<D>,
    mesh: &SimplicialMesh<D>,
    opts: &MetricOptions,
    gamma: f64,
) -> Result<(MetricField<D>, GlobalScalars), MetricError> {
    let mut m = smooth_metric(raw, mesh, opts.sweeps);
    if opts.normalize {
        m = normalize_unit_floor(&m);
    }
    let mut g = global_scalars(&m, mesh, gamma)?;
    if opts.apply_kappa {
        let kappa = stretching_factor(D, gamma, g.theta)?;
        m = apply_kappa(&m, kappa);
        g = GlobalScalars { kappa: Some(kappa), ..global_scalars(&m, mesh, gamma)? };
    }
    Ok((m, g))
}

/// Nodal data that follows the mesh between outer iterations.
pub enum FieldSource<'a, const D: usize> {
    /// Re-sampled at the new nodes.
    Analytic(&'a (dyn Fn(&Point<D>) -> f64 + Sync)),
    /// Carried by linear transfer.
    Nodal(Vec<f64>),
}

impl<const D: usize> FieldSource<'_, D> {
    pub fn values(&self, mesh: &SimplicialMesh<D>) -> Vec<f64> {
        match self {
            FieldSource::Analytic(f) => mesh.x().par_iter().map(|p| f(p)).collect(),
            FieldSource::Nodal(v) => v.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HistoryRow {
    pub outer_iter: usize,
    pub t: f64,
    pub energy: f64,
    /// Smallest computational element volume along the span.
    pub min_vol: f64,
    /// Smallest element height in the metric, on the physical mesh at the
    /// start of the span.
    pub min_height: f64,
    pub newton_iters: usize,
    pub cg_iters: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct IterationSummary {
    pub outer_iter: usize,
    pub scalars: GlobalScalars,
    pub initial_energy: f64,
    pub final_energy: f64,
    pub steps: usize,
    pub rejected: usize,
    pub newton_iters: usize,
    pub cg_iters: usize,
    /// Whether the energy was non-increasing over every accepted step.
    pub monotone: bool,
    pub min_height: f64,
    pub min_physical_det: f64,
    /// Element-size lower bounds for this span; proposed functional only.
    pub bounds: Option<CorollaryBounds>,
}

pub struct OuterLoop<'a, const D: usize> {
    pub flow: FlowConfig,
    pub metric: MetricOptions,
    pub functional: FunctionalParams,
    pub balancing: BalancingKind,
    pub iterations: usize,
    /// Raw metric from the mesh and the current nodal field values.
    pub builder: &'a (dyn Fn(&SimplicialMesh<D>, &[f64]) -> Result<MetricField<D>, MetricError> + Sync),
}

pub struct OuterResult<const D: usize> {
    pub mesh: SimplicialMesh<D>,
    pub field: Vec<f64>,
    pub history: Vec<HistoryRow>,
    pub iterations: Vec<IterationSummary>,
    /// Metric used in the last span, on the mesh before its final update.
    pub last_metric: Option<MetricField<D>>,
}

/// Minimum over cells of the metric height on the physical mesh.
pub fn min_metric_height<const D: usize>(mesh: &SimplicialMesh<D>, metric: &MetricField<D>) -> Result<f64, MeshError> {
    let mut h = f64::INFINITY;
    for k in 0..mesh.n_cells() {
        h = h.min(min_height_in_metric(&mesh.edge_matrices(k)?, metric.get(k))?);
    }
    Ok(h)
}

pub fn min_physical_det<const D: usize>(mesh: &SimplicialMesh<D>) -> f64 {
    (0..mesh.n_cells())
        .map(|k| crate::linalg::det(&mesh.cell_edges(k, CoordView::Physical)))
        .fold(f64::INFINITY, f64::min)
}

impl<const D: usize> OuterLoop<'_, D> {
    /// Run the adaptation loop. Each iteration rebuilds the metric on the
    /// current physical mesh, integrates the computational flow with the
    /// physical mesh frozen, and then moves the physical nodes to the images
    /// of the reference computational nodes under the piecewise-linear map
    /// from the deformed computational mesh to the physical mesh.
    pub fn run(
        &self,
        mut mesh: SimplicialMesh<D>,
        mut field: FieldSource<'_, D>,
        mut on_iteration: impl FnMut(usize, &SimplicialMesh<D>, &IterationSummary),
    ) -> Result<OuterResult<D>, FlowError> {
        let xi_ref = mesh.xi().to_vec();
        let mut history = Vec::new();
        let mut iterations = Vec::new();
        let mut last_metric = None;
        for it in 0..self.iterations {
            let wrap = |e: FlowError| FlowError::Outer { iter: it, source: Box::new(e) };
            let values = field.values(&mesh);
            let raw = (self.builder)(&mesh, &values).map_err(|e| wrap(e.into()))?;
            let (m, scalars) = prepare_metric(&raw, &mesh, &self.metric, self.functional.gamma)
                .map_err(|e| wrap(e.into()))?;
            let params = self.functional.with_theta(scalars.theta);
            let p = balancing_function(&m, &mesh, self.balancing, scalars.theta);
            let frozen = FrozenInvariants::new(&mesh, &m, p, params, self.flow.tau).map_err(wrap)?;
            let min_height = min_metric_height(&mesh, &m).map_err(|e| wrap(e.into()))?;
            let u0 = frozen.free_values(mesh.xi());
            let span = bdf_advance(&frozen, u0, &self.flow).map_err(wrap)?;

            let mut prev_e = span.initial_energy;
            let mut monotone = true;
            for s in &span.steps {
                monotone &= s.energy <= prev_e + self.flow.energy_rtol * prev_e.abs();
                prev_e = s.energy;
                history.push(HistoryRow {
                    outer_iter: it,
                    t: s.t,
                    energy: s.energy,
                    min_vol: f64::NAN,
                    min_height,
                    newton_iters: s.newton_iters,
                    cg_iters: s.cg_iters,
                });
            }
            let xi_new = frozen.expand(&span.u);
            let min_vol = frozen.min_volume(&xi_new);
            let n_hist = history.len();
            for row in &mut history[n_hist - span.steps.len()..] {
                row.min_vol = min_vol;
            }

            let bounds = match params.kind {
                FunctionalKind::Proposed => Some(
                    corollary_bounds(&params, &mesh, &m, span.initial_energy).map_err(|e| wrap(e.into()))?,
                ),
                _ => None,
            };
            let old = mesh.clone();
            let mut deformed = mesh.clone();
            deformed.set_xi(xi_new).map_err(|e| wrap(e.into()))?;
            let (mut x_new, clamped) =
                interpolate_with(&deformed, CoordView::Computational, old.x(), &xi_ref).map_err(|e| wrap(e.into()))?;
            if clamped > 0 {
                log::warn!("outer iteration {it}: {clamped} reference nodes fell outside the deformed mesh");
            }
            // keep boundary nodes exactly on their faces
            for (i, t) in mesh.tags().iter().enumerate() {
                match t {
                    BoundaryTag::Corner => x_new[i] = old.x()[i],
                    BoundaryTag::Face { normal, .. } => {
                        for c in 0..D {
                            if normal[c].abs() > 0.5 {
                                x_new[i][c] = old.x()[i][c];
                            }
                        }
                    }
                    BoundaryTag::Interior => {}
                }
            }
            mesh.set_x(x_new).map_err(|e| wrap(e.into()))?;
            if let FieldSource::Nodal(v) = &field {
                field = FieldSource::Nodal(transfer(&old, v, mesh.x()).map_err(|e| wrap(e.into()))?);
            }
            let summary = IterationSummary {
                outer_iter: it,
                scalars,
                initial_energy: span.initial_energy,
                final_energy: span.steps.last().map_or(span.initial_energy, |s| s.energy),
                steps: span.steps.len(),
                rejected: span.steps.iter().map(|s| s.rejected).sum(),
                newton_iters: span.steps.iter().map(|s| s.newton_iters).sum(),
                cg_iters: span.steps.iter().map(|s| s.cg_iters).sum(),
                monotone,
                min_height,
                min_physical_det: min_physical_det(&mesh),
                bounds,
            };
            on_iteration(it, &mesh, &summary);
            iterations.push(summary);
            last_metric = Some(m);
        }
        let field = field.values(&mesh);
        Ok(OuterResult { mesh, field, history, iterations, last_metric })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::functional::{energy, FunctionalKind};
    use crate::gradient::energy_gradient_xi;
    use crate::mesh::{BoxDomain, Mesh2};
    use nalgebra::Matrix2;

    struct Decay {
        lambda: f64,
        w: Vec<f64>,
    }

    impl GradientSystem for Decay {
        fn len(&self) -> usize {
            1
        }
        fn weights(&self) -> &[f64] {
            &self.w
        }
        fn tau(&self) -> f64 {
            1.0
        }
        fn gradient(&self, u: &[f64]) -> Result<Vec<f64>, SolverError> {
            Ok(vec![self.lambda * u[0]])
        }
        fn energy(&self, u: &[f64]) -> Result<f64, SolverError> {
            Ok(0.5 * self.lambda * u[0] * u[0])
        }
    }

    #[test]
    fn bdf2_hand_recurrence() {
        let lambda = 2.0;
        let dt = 0.1;
        let sys = Decay { lambda, w: vec![1.0] };
        let cfg = FlowConfig {
            tau: 1.0,
            t_span: 3.0 * dt,
            n_t: 3,
            newton: NewtonConfig { atol: 1e-15, rtol: 1e-15, cg_tol: 1e-15, ..Default::default() },
            ..Default::default()
        };
        let out = bdf_advance(&sys, vec![1.0], &cfg).unwrap();
        let y1 = 1.0 / (1.0 + lambda * dt);
        let y2 = (4.0 / 3.0 * y1 - 1.0 / 3.0) / (1.0 + 2.0 / 3.0 * lambda * dt);
        let y3 = (4.0 / 3.0 * y2 - 1.0 / 3.0 * y1) / (1.0 + 2.0 / 3.0 * lambda * dt);
        assert_eq!(out.steps.len(), 3);
        assert!((out.u[0] - y3).abs() <= 1e-12, "{} vs {y3}", out.u[0]);
        assert!(out.steps.windows(2).all(|w| w[1].energy <= w[0].energy));
    }

    #[test]
    fn bdf2_equal_step_coefficients() {
        let (a, b, h) = bdf2_coefficients(0.3, 0.3);
        assert!((a - 4.0 / 3.0).abs() < 1e-15 && (b - 1.0 / 3.0).abs() < 1e-15 && (h - 0.2).abs() < 1e-15);
    }

    #[test]
    fn fixed_point_is_preserved() {
        let sys = Decay { lambda: 1.0, w: vec![1.0] };
        let out = bdf_advance(&sys, vec![0.0], &FlowConfig { tau: 1.0, ..Default::default() }).unwrap();
        assert_eq!(out.u, vec![0.0]);
    }

    fn perturbed(n: usize) -> Mesh2 {
        let mut mesh = Mesh2::structured(n, n, BoxDomain::unit_square()).unwrap();
        let h = 1.0 / n as f64;
        let xi: Vec<Point<2>> = mesh
            .xi()
            .iter()
            .zip(mesh.tags())
            .map(|(p, t)| {
                let s = 0.2 * h * (7.0 * p[0] + 3.0 * p[1]).sin();
                match t {
                    BoundaryTag::Interior => p + Point::<2>::new(s, -s),
                    BoundaryTag::Face { normal, .. } if normal[1] != 0.0 => p + Point::<2>::new(s, 0.0),
                    BoundaryTag::Face { .. } => p + Point::<2>::new(0.0, s),
                    BoundaryTag::Corner => *p,
                }
            })
            .collect();
        mesh.set_xi(xi).unwrap();
        mesh
    }

    fn aniso_metric(mesh: &Mesh2) -> MetricField<2> {
        MetricField::new(
            (0..mesh.n_cells())
                .map(|k| {
                    let c = mesh.centroid(k, CoordView::Physical);
                    let s = 1.0 + 4.0 * (-20.0 * (c[0] - 0.5).powi(2)).exp();
                    Matrix2::new(s, 0.2, 0.2, 1.0)
                })
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn frozen_energy_and_gradient_match_module_level() {
        let mesh = perturbed(5);
        let metric = aniso_metric(&mesh);
        let params = FunctionalParams::new(FunctionalKind::Proposed, 1.25, 0.9).unwrap();
        let fr = FrozenInvariants::new(&mesh, &metric, vec![1.0; mesh.n_nodes()], params, 0.01).unwrap();
        let e0 = energy(&mesh, &metric, &params).unwrap();
        assert!((fr.energy_at(mesh.xi()).unwrap() - e0).abs() <= 1e-12 * e0.abs());
        let g0 = energy_gradient_xi(&mesh, &metric, &params).unwrap();
        let g1 = fr.gradient_at(mesh.xi()).unwrap();
        for (a, b) in g0.iter().zip(&g1) {
            assert!((a - b).norm() <= 1e-12 * a.norm().max(1.0));
        }
    }

    #[test]
    fn residual_matches_weighted_fd_gradient() {
        let mesh = perturbed(4);
        let metric = aniso_metric(&mesh);
        let params = FunctionalParams::new(FunctionalKind::Proposed, 1.25, 0.9).unwrap();
        let p: Vec<f64> = (0..mesh.n_nodes()).map(|i| 0.5 + 0.1 * (i % 4) as f64).collect();
        let tau = 0.02;
        let fr = FrozenInvariants::new(&mesh, &metric, p.clone(), params, tau).unwrap();
        let f = fr.residual(mesh.xi()).unwrap();
        let u0 = fr.free_values(mesh.xi());
        let scale = f.iter().map(|v| v.amax()).fold(0.0, f64::max);
        for (j, &(i, c)) in fr.dofs.iter().enumerate() {
            let h = 1e-7 * 0.25;
            let mut up = u0.clone();
            up[j] += h;
            let mut um = u0.clone();
            um[j] -= h;
            let fd = (fr.energy(&up).unwrap() - fr.energy(&um).unwrap()) / (2.0 * h);
            let expect = -(p[i] / tau) * fd;
            assert!((expect - f[i][c]).abs() <= 1e-6 * f[i][c].abs().max(1e-3 * scale) + 1e-7 * scale);
        }
        // corner rows vanish and face rows are tangential
        for (i, t) in mesh.tags().iter().enumerate() {
            match t {
                BoundaryTag::Corner => assert_eq!(f[i], Point::<2>::zeros()),
                BoundaryTag::Face { normal, .. } => assert!(f[i].dot(normal).abs() == 0.0),
                _ => {}
            }
        }
    }

    #[test]
    fn residual_scaling_with_metric() {
        let mesh = perturbed(4);
        let metric = aniso_metric(&mesh);
        let params = FunctionalParams::new(FunctionalKind::Proposed, 1.25, 0.9).unwrap();
        let c: f64 = 3.0;
        let a = c.powf(params.scale_exponent(2));
        let p1 = vec![1.0; mesh.n_nodes()];
        let p2 = vec![0.5; mesh.n_nodes()];
        let f1 = FrozenInvariants::new(&mesh, &metric, p1, params, 0.1).unwrap().residual(mesh.xi()).unwrap();
        let f2 = FrozenInvariants::new(&mesh, &metric.scaled(c), p2, params.with_theta(0.9 / c), 0.1)
            .unwrap()
            .residual(mesh.xi())
            .unwrap();
        let scale = f1.iter().map(|v| v.amax()).fold(0.0, f64::max);
        for (x, y) in f1.iter().zip(&f2) {
            assert!((y - 0.5 * a * x).amax() <= 1e-12 * scale);
        }
    }

    #[test]
    fn flow_decreases_energy_on_small_mesh() {
        let mesh = Mesh2::structured(6, 6, BoxDomain::unit_square()).unwrap();
        let metric = aniso_metric(&mesh);
        let g = global_scalars(&metric, &mesh, 1.25).unwrap();
        let params = FunctionalParams::new(FunctionalKind::Proposed, 1.25, g.theta).unwrap();
        let p = balancing_function(&metric, &mesh, BalancingKind::Proposed, g.theta);
        let fr = FrozenInvariants::new(&mesh, &metric, p, params, 0.01).unwrap();
        let cfg = FlowConfig { tau: 0.01, t_span: 0.2, n_t: 5, ..Default::default() };
        let out = bdf_advance(&fr, fr.free_values(mesh.xi()), &cfg).unwrap();
        let mut prev = out.initial_energy;
        for s in &out.steps {
            assert!(s.energy <= prev + 1e-10 * prev.abs());
            prev = s.energy;
        }
        assert!(prev < out.initial_energy);
    }

    #[test]
    fn uniform_metric_leaves_mesh_in_place() {
        let mesh = Mesh2::structured(6, 6, BoxDomain::unit_square()).unwrap();
        let builder = |m: &SimplicialMesh<2>, _: &[f64]| Ok(MetricField::identity(m.n_cells()));
        let zero = |_: &Point<2>| 0.0;
        let outer = OuterLoop {
            flow: FlowConfig { t_span: 0.1, n_t: 2, ..Default::default() },
            metric: MetricOptions::default(),
            functional: FunctionalParams::new(FunctionalKind::Proposed, 1.25, 1.0).unwrap(),
            balancing: BalancingKind::Proposed,
            iterations: 2,
            builder: &builder,
        };
        let res = outer.run(mesh.clone(), FieldSource::Analytic(&zero), |_, _, _| {}).unwrap();
        let dx = res.mesh.x().iter().zip(mesh.x()).map(|(a, b)| (a - b).amax()).fold(0.0, f64::max);
        assert!(dx <= 1e-8, "{dx}");

        let none = OuterLoop { iterations: 0, ..outer };
        let res = none.run(mesh.clone(), FieldSource::Analytic(&zero), |_, _, _| {}).unwrap();
        assert_eq!(res.mesh.x(), mesh.x());
        assert!(res.history.is_empty());
    }
}
