//! Conjugate gradients, the low-rank quasi-Newton operator and the
//! Newton-Krylov solve for one implicit BDF step of a weighted gradient
//! flow `du/dt = -(w / tau) g(u)`.

use crate::linalg::{dot, norm2};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SolverError {
    #[error("state is not admissible (cell {0:?})")]
    Inadmissible(Option<usize>),
    #[error("newton iteration did not converge in {iters} steps (residual {residual:e})")]
    NewtonDiverged { iters: usize, residual: f64 },
    #[error("jacobian-vector product left the admissible set")]
    JacobianProbe,
    #[error("step size fell below the minimum after {0} halvings")]
    StepTooSmall(usize),
}

/// A gradient system `du/dt = -(w_i / tau) dI/du_i` on a flat vector of
/// free unknowns.
pub trait GradientSystem: Sync {
    fn len(&self) -> usize;
    /// Positive per-unknown weights `w`.
    fn weights(&self) -> &[f64];
    fn tau(&self) -> f64;
    fn gradient(&self, u: &[f64]) -> Result<Vec<f64>, SolverError>;
    fn energy(&self, u: &[f64]) -> Result<f64, SolverError>;
}

#[derive(Debug, Clone, PartialEq)]
pub struct CgResult {
    pub x: Vec<f64>,
    pub iters: usize,
    pub rel_residual: f64,
    pub converged: bool,
    pub negative_curvature: bool,
}

/// Unpreconditioned CG from a zero initial guess.
pub fn cg_solve(matvec: impl Fn(&[f64]) -> Vec<f64>, b: &[f64], tol: f64, maxit: usize) -> CgResult {
    let n = b.len();
    let bnorm = norm2(b);
    let mut x = vec![0.0; n];
    if bnorm == 0.0 {
        return CgResult { x, iters: 0, rel_residual: 0.0, converged: true, negative_curvature: false };
    }
    let mut r = b.to_vec();
    let mut p = r.clone();
    let mut rr = dot(&r, &r);
    for it in 0..maxit {
        let ap = matvec(&p);
        let pap = dot(&p, &ap);
        if !(pap > 0.0) {
            return CgResult {
                x,
                iters: it,
                rel_residual: rr.sqrt() / bnorm,
                converged: false,
                negative_curvature: true,
            };
        }
        let alpha = rr / pap;
        for i in 0..n {
            x[i] += alpha * p[i];
            r[i] -= alpha * ap[i];
        }
        let rr_new = dot(&r, &r);
        if rr_new.sqrt() <= tol * bnorm {
            return CgResult {
                x,
                iters: it + 1,
                rel_residual: rr_new.sqrt() / bnorm,
                converged: true,
                negative_curvature: false,
            };
        }
        let beta = rr_new / rr;
        rr = rr_new;
        for i in 0..n {
            p[i] = r[i] + beta * p[i];
        }
    }
    CgResult { x, iters: maxit, rel_residual: rr.sqrt() / bnorm, converged: false, negative_curvature: false }
}

/// Relative curvature threshold below which the symmetric rank-two update is
/// replaced by the rank-one update.
pub const CURVATURE_EPS: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq)]
enum RankUpdate {
    /// `+ t t^T / (s^T t) - y y^T / (s^T y)` with `y = J s`.
    Dfp { t: Vec<f64>, st: f64, y: Vec<f64>, sy: f64 },
    /// `+ w s^T` with `w = (t - J s) / (s^T s)`.
    Broyden { w: Vec<f64>, s: Vec<f64> },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UpdateKind {
    Dfp,
    Broyden,
}

/// Linear operator `J = J_0 + sum of rank updates`, where `J_0` is a
/// matrix-free base supplied as a closure.
pub struct QuasiNewtonOperator<'a> {
    base: Box<dyn Fn(&[f64]) -> Vec<f64> + 'a>,
    updates: Vec<RankUpdate>,
}

impl<'a> QuasiNewtonOperator<'a> {
    pub fn new(base: impl Fn(&[f64]) -> Vec<f64> + 'a) -> Self {
        Self { base: Box::new(base), updates: Vec::new() }
    }

    pub fn base_apply(&self, v: &[f64]) -> Vec<f64> {
        (self.base)(v)
    }

    pub fn apply(&self, v: &[f64]) -> Vec<f64> {
        let mut out = (self.base)(v);
        for u in &self.updates {
            match u {
                RankUpdate::Dfp { t, st, y, sy } => {
                    let a = dot(t, v) / st;
                    let b = dot(y, v) / sy;
                    for i in 0..out.len() {
                        out[i] += a * t[i] - b * y[i];
                    }
                }
                RankUpdate::Broyden { w, s } => {
                    let a = dot(s, v);
                    for i in 0..out.len() {
                        out[i] += a * w[i];
                    }
                }
            }
        }
        out
    }

    /// `(J + J^T) v / 2`, valid when the base operator is symmetric.
    pub fn apply_symmetrized(&self, v: &[f64]) -> Vec<f64> {
        let mut out = (self.base)(v);
        for u in &self.updates {
            match u {
                RankUpdate::Dfp { t, st, y, sy } => {
                    let a = dot(t, v) / st;
                    let b = dot(y, v) / sy;
                    for i in 0..out.len() {
                        out[i] += a * t[i] - b * y[i];
                    }
                }
                RankUpdate::Broyden { w, s } => {
                    let a = 0.5 * dot(s, v);
                    let b = 0.5 * dot(w, v);
                    for i in 0..out.len() {
                        out[i] += a * w[i] + b * s[i];
                    }
                }
            }
        }
        out
    }

    pub fn is_symmetric(&self) -> bool {
        self.updates.iter().all(|u| matches!(u, RankUpdate::Dfp { .. }))
    }

    pub fn n_updates(&self) -> usize {
        self.updates.len()
    }

    /// Secant update from step `s` and residual change `t`. Returns `None`
    /// when `s` is zero.
    pub fn update(&mut self, s: &[f64], t: &[f64]) -> Option<UpdateKind> {
        let ss = dot(s, s);
        if ss == 0.0 {
            return None;
        }
        let y = self.apply(s);
        let st = dot(s, t);
        let sy = dot(s, &y);
        let tn = norm2(t);
        if st > CURVATURE_EPS * ss.sqrt() * tn && sy > CURVATURE_EPS * ss.sqrt() * norm2(&y) {
            self.updates.push(RankUpdate::Dfp { t: t.to_vec(), st, y, sy });
            Some(UpdateKind::Dfp)
        } else {
            let w: Vec<f64> = t.iter().zip(&y).map(|(ti, yi)| (ti - yi) / ss).collect();
            self.updates.push(RankUpdate::Broyden { w, s: s.to_vec() });
            Some(UpdateKind::Broyden)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NewtonConfig {
    /// Multiplier on `atol + rtol |u|` for the stopping test on `|F|`.
    pub newton_tol: f64,
    pub rtol: f64,
    pub atol: f64,
    pub cg_tol: f64,
    pub max_newton: usize,
    pub max_cg: usize,
}

impl Default for NewtonConfig {
    fn default() -> Self {
        Self { newton_tol: 1.0, rtol: 1e-6, atol: 1e-6, cg_tol: 1e-4, max_newton: 30, max_cg: 400 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NewtonOutcome {
    pub u: Vec<f64>,
    pub newton_iters: usize,
    pub cg_iters: usize,
    pub residual_norm: f64,
    pub dfp_updates: usize,
    pub broyden_updates: usize,
}

/// `F(u) = u - c + (h / tau) w * g(u)`, and its scaling by `1/w`.
fn scaled_residual<S: GradientSystem>(sys: &S, c: &[f64], h: f64, u: &[f64]) -> Result<Vec<f64>, SolverError> {
    let g = sys.gradient(u)?;
    let k = h / sys.tau();
    Ok(u.iter()
        .zip(c)
        .zip(&g)
        .zip(sys.weights())
        .map(|(((ui, ci), gi), wi)| (ui - ci) / wi + k * gi)
        .collect())
}

fn unscaled_norm(s: &[f64], w: &[f64]) -> f64 {
    s.iter().zip(w).map(|(a, b)| (a * b) * (a * b)).sum::<f64>().sqrt()
}

/// Central-difference directional derivative of `r` at `u0` along `v`.
pub fn fd_matvec(
    r: &dyn Fn(&[f64]) -> Result<Vec<f64>, SolverError>,
    u0: &[f64],
    v: &[f64],
) -> Result<Vec<f64>, SolverError> {
    let vn = norm2(v);
    if vn == 0.0 {
        return Ok(vec![0.0; v.len()]);
    }
    let mut eps = 1e-7 * (1.0 + norm2(u0)) / vn;
    for attempt in 0..2 {
        let plus: Vec<f64> = u0.iter().zip(v).map(|(a, b)| a + eps * b).collect();
        let minus: Vec<f64> = u0.iter().zip(v).map(|(a, b)| a - eps * b).collect();
        match (r(&plus), r(&minus)) {
            (Ok(rp), Ok(rm)) => {
                return Ok(rp.iter().zip(&rm).map(|(a, b)| (a - b) / (2.0 * eps)).collect());
            }
            _ if attempt == 0 => eps *= 0.01,
            _ => break,
        }
    }
    Err(SolverError::JacobianProbe)
}

/// Solve `u - c = h f(u)` with `f = -(w / tau) g`. The system is scaled by
/// `1/w` so that its Jacobian `diag(1/w) + (h/tau) Hess I` is symmetric.
pub fn newton_krylov_solve<S: GradientSystem>(
    sys: &S,
    c: &[f64],
    h: f64,
    guess: Vec<f64>,
    cfg: &NewtonConfig,
) -> Result<NewtonOutcome, SolverError> {
    let w = sys.weights();
    let mut u = guess;
    let mut r = scaled_residual(sys, c, h, &u)?;
    let tol = |u: &[f64]| cfg.newton_tol * (cfg.atol + cfg.rtol * norm2(u));
    let mut out = NewtonOutcome {
        u: Vec::new(),
        newton_iters: 0,
        cg_iters: 0,
        residual_norm: unscaled_norm(&r, w),
        dfp_updates: 0,
        broyden_updates: 0,
    };
    if out.residual_norm <= tol(&u) {
        out.u = u;
        return Ok(out);
    }
    let u0 = u.clone();
    let resid = |x: &[f64]| scaled_residual(sys, c, h, x);
    let probe_failed = std::cell::Cell::new(false);
    let mut op = QuasiNewtonOperator::new(|v: &[f64]| match fd_matvec(&resid, &u0, v) {
        Ok(jv) => jv,
        Err(_) => {
            probe_failed.set(true);
            v.to_vec()
        }
    });
    for k in 0..cfg.max_newton {
        let rhs: Vec<f64> = r.iter().map(|v| -v).collect();
        let mut cg = if op.is_symmetric() {
            cg_solve(|v| op.apply(v), &rhs, cfg.cg_tol, cfg.max_cg)
        } else {
            cg_solve(|v| op.apply_symmetrized(v), &rhs, cfg.cg_tol, cfg.max_cg)
        };
        out.cg_iters += cg.iters;
        if cg.negative_curvature {
            let retry = cg_solve(|v| op.base_apply(v), &rhs, cfg.cg_tol, cfg.max_cg);
            out.cg_iters += retry.iters;
            if norm2(&retry.x) > 0.0 {
                cg = retry;
            }
        }
        if probe_failed.get() {
            return Err(SolverError::JacobianProbe);
        }
        let mut delta = cg.x;
        if norm2(&delta) == 0.0 {
            // no usable curvature information: scaled residual step
            delta = rhs.iter().zip(w).map(|(a, b)| a * b).collect();
        }
        let mut lambda = 1.0;
        let mut accepted = None;
        for _ in 0..30 {
            let trial: Vec<f64> = u.iter().zip(&delta).map(|(a, b)| a + lambda * b).collect();
            if let Ok(rt) = resid(&trial) {
                accepted = Some((trial, rt));
                break;
            }
            lambda *= 0.5;
        }
        let (u_new, r_new) = accepted.ok_or(SolverError::Inadmissible(None))?;
        let s: Vec<f64> = u_new.iter().zip(&u).map(|(a, b)| a - b).collect();
        let t: Vec<f64> = r_new.iter().zip(&r).map(|(a, b)| a - b).collect();
        u = u_new;
        r = r_new;
        out.newton_iters = k + 1;
        out.residual_norm = unscaled_norm(&r, w);
        if out.residual_norm <= tol(&u) {
            out.u = u;
            return Ok(out);
        }
        match op.update(&s, &t) {
            Some(UpdateKind::Dfp) => out.dfp_updates += 1,
            Some(UpdateKind::Broyden) => out.broyden_updates += 1,
            None => {}
        }
    }
    Err(SolverError::NewtonDiverged { iters: cfg.max_newton, residual: out.residual_norm })
}
