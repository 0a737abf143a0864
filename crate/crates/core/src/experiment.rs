//! Experiment driver: configuration, built-in fields, end-to-end runs with
//! VTK and CSV output, the property-oracle `check`, and run reports.

use crate::flow::{
    FieldSource, FlowConfig, FlowError, HistoryRow, IterationSummary, MetricOptions, OuterLoop, Scheme,
};
use crate::functional::{FunctionalKind, FunctionalParams};
use crate::linalg::Point;
use crate::mesh::{BoxDomain, Mesh2, MeshError};
use crate::metric::{
    cell_gradients, metric_arclength, metric_eigendecomp, metric_hessian, metric_hessian_regularized, recover_hessian, BalancingKind,
    MetricError, MetricField,
};
use crate::quality::{histogram, interp_error, quality_metrics, AnalyticField, QualityError, QualityReport, HISTOGRAM_BINS};
use crate::solver::NewtonConfig;
use crate::vtk::{self, CellData, VtkError};
use serde::Deserialize;
use std::path::{Path, PathBuf};
use std::time::Instant;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Read { path: PathBuf, source: std::io::Error },
    #[error("invalid config: {0}")]
    Syntax(#[from] toml::de::Error),
    #[error("invalid value for {key}: {msg}")]
    Value { key: &'static str, msg: String },
}

#[derive(Debug, Error)]
pub enum RunError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Flow(#[from] FlowError),
    #[error(transparent)]
    Mesh(#[from] MeshError),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error(transparent)]
    Quality(#[from] QualityError),
    #[error(transparent)]
    Vtk(#[from] VtkError),
    #[error("csv output: {0}")]
    Csv(#[from] csv::Error),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

/// Analytic test fields on the unit square.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Builtin {
    /// `tanh(-100 (y - 0.5 - 0.25 sin(2 pi x)))`
    SineBand,
    /// `tanh(100 (1 - x - y)) - tanh(100 (x - y))`
    XShape,
    /// `1 / (1 + exp(re (x + y - t)))`
    BurgersProfile { re: f64, t: f64 },
}

fn sech2(z: f64) -> f64 {
    1.0 - z.tanh().powi(2)
}

impl AnalyticField<2> for Builtin {
    fn value(&self, p: &Point<2>) -> f64 {
        let (x, y) = (p[0], p[1]);
        match *self {
            Builtin::SineBand => (-100.0 * (y - 0.5 - 0.25 * (2.0 * std::f64::consts::PI * x).sin())).tanh(),
            Builtin::XShape => (100.0 * (1.0 - x - y)).tanh() - (100.0 * (x - y)).tanh(),
            Builtin::BurgersProfile { re, t } => 1.0 / (1.0 + (re * (x + y - t)).exp()),
        }
    }

    fn gradient(&self, p: &Point<2>) -> Point<2> {
        let (x, y) = (p[0], p[1]);
        match *self {
            Builtin::SineBand => {
                let two_pi = 2.0 * std::f64::consts::PI;
                let s = -100.0 * sech2(-100.0 * (y - 0.5 - 0.25 * (two_pi * x).sin()));
                Point::<2>::new(-s * 0.25 * two_pi * (two_pi * x).cos(), s)
            }
            Builtin::XShape => {
                let a = -100.0 * sech2(100.0 * (1.0 - x - y));
                let b = 100.0 * sech2(100.0 * (x - y));
                Point::<2>::new(a - b, a + b)
            }
            Builtin::BurgersProfile { re, .. } => {
                // u' = -re u (1 - u) in both directions
                let u = self.value(p);
                let g = -re * u * (1.0 - u);
                Point::<2>::new(g, g)
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FieldName {
    SineBand,
    XShape,
    BurgersProfile,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricKind {
    Hessian,
    Arclength,
    Eigen,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FunctionalChoice {
    Proposed,
    Huang,
    KolasinskiHuang,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SchemeChoice {
    Bdf1,
    Bdf2,
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MeshSection {
    pub nx: usize,
    pub ny: usize,
    /// `[x_lo, x_hi, y_lo, y_hi]`
    pub domain: [f64; 4],
}

impl Default for MeshSection {
    fn default() -> Self {
        Self { nx: 40, ny: 20, domain: [0.0, 1.0, 0.0, 1.0] }
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FieldSection {
    pub name: FieldName,
    pub re: f64,
    pub t: f64,
}

impl Default for FieldSection {
    fn default() -> Self {
        Self { name: FieldName::SineBand, re: 100.0, t: 0.5 }
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetricSection {
    pub kind: MetricKind,
    pub beta: f64,
    pub smoothing_sweeps: usize,
    pub apply_kappa: bool,
    /// Hessian eigenvalue floor relative to the largest eigenvalue; used
    /// only without regularization.
    pub hessian_floor: f64,
    /// Shift `|H|` by a data-dependent multiple of the identity.
    pub hessian_regularize: bool,
}

impl Default for MetricSection {
    fn default() -> Self {
        Self { kind: MetricKind::Hessian, beta: 0.5, smoothing_sweeps: 2, apply_kappa: true, hessian_floor: 1e-8, hessian_regularize: true }
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FunctionalSection {
    pub kind: FunctionalChoice,
    pub gamma: f64,
    pub mu: f64,
}

impl Default for FunctionalSection {
    fn default() -> Self {
        Self { kind: FunctionalChoice::Proposed, gamma: 1.25, mu: 1.0 / 3.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FlowSection {
    pub tau: f64,
    pub t_span: f64,
    pub n_t: usize,
    pub outer_iters: usize,
    pub rtol: f64,
    pub atol: f64,
    pub scheme: SchemeChoice,
}

impl Default for FlowSection {
    fn default() -> Self {
        Self { tau: 0.004, t_span: 1.0, n_t: 20, outer_iters: 5, rtol: 1e-6, atol: 1e-6, scheme: SchemeChoice::Bdf2 }
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputSection {
    pub dir: PathBuf,
    /// Write a snapshot after every `vtk_every` outer iterations; 0 keeps
    /// only the initial and final meshes.
    pub vtk_every: usize,
    pub csv: bool,
    /// Record wall-clock time in the summary; disable for byte-identical
    /// reruns.
    pub record_time: bool,
}

impl Default for OutputSection {
    fn default() -> Self {
        Self { dir: PathBuf::from("out"), vtk_every: 1, csv: true, record_time: true }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RuntimeSection {
    /// 0 uses every core.
    pub threads: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub mesh: MeshSection,
    pub field: FieldSection,
    pub metric: MetricSection,
    pub functional: FunctionalSection,
    pub flow: FlowSection,
    pub output: OutputSection,
    pub runtime: RuntimeSection,
}

fn bad(key: &'static str, msg: impl Into<String>) -> ConfigError {
    ConfigError::Value { key, msg: msg.into() }
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let cfg: Self = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text =
            std::fs::read_to_string(path).map_err(|source| ConfigError::Read { path: path.to_path_buf(), source })?;
        Self::parse(&text)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.mesh.nx == 0 || self.mesh.ny == 0 {
            return Err(bad("mesh.nx", "nx and ny must be positive"));
        }
        let d = self.mesh.domain;
        if !(d[0] < d[1] && d[2] < d[3]) || d.iter().any(|v| !v.is_finite()) {
            return Err(bad("mesh.domain", format!("{d:?} is not a box")));
        }
        match self.metric.kind {
            MetricKind::Arclength if !(self.metric.beta >= 0.0) => return Err(bad("metric.beta", "must be >= 0")),
            MetricKind::Eigen if !(self.metric.beta > 0.0 && self.metric.beta < 1.0) => {
                return Err(bad("metric.beta", "must lie in (0, 1)"))
            }
            _ => {}
        }
        if !(0.0..1.0).contains(&self.metric.hessian_floor) {
            return Err(bad("metric.hessian_floor", "must lie in [0, 1)"));
        }
        if !(self.field.re > 0.0) {
            return Err(bad("field.re", "must be positive"));
        }
        if !(self.functional.gamma > 1.0) {
            return Err(bad("functional.gamma", "must exceed 1"));
        }
        if !(0.0..=1.0).contains(&self.functional.mu) {
            return Err(bad("functional.mu", "must lie in [0, 1]"));
        }
        let f = &self.flow;
        if !(f.tau > 0.0) {
            return Err(bad("flow.tau", "must be positive"));
        }
        if !(f.t_span > 0.0) || f.n_t == 0 {
            return Err(bad("flow.t_span", "t_span and n_t must be positive"));
        }
        if !(f.rtol >= 0.0 && f.atol >= 0.0 && f.rtol + f.atol > 0.0) {
            return Err(bad("flow.rtol", "tolerances must be non-negative and not both zero"));
        }
        Ok(())
    }

    pub fn builtin(&self) -> Builtin {
        match self.field.name {
            FieldName::SineBand => Builtin::SineBand,
            FieldName::XShape => Builtin::XShape,
            FieldName::BurgersProfile => Builtin::BurgersProfile { re: self.field.re, t: self.field.t },
        }
    }

    pub fn functional_params(&self) -> FunctionalParams {
        let kind = match self.functional.kind {
            FunctionalChoice::Proposed => FunctionalKind::Proposed,
            FunctionalChoice::Huang => FunctionalKind::Huang { mu: self.functional.mu },
            FunctionalChoice::KolasinskiHuang => FunctionalKind::KolasinskiHuang,
        };
        FunctionalParams { kind, gamma: self.functional.gamma, theta: 1.0 }
    }

    pub fn balancing(&self) -> BalancingKind {
        match self.functional.kind {
            FunctionalChoice::Proposed => BalancingKind::Proposed,
            _ => BalancingKind::Huang { p: self.functional.gamma },
        }
    }

    pub fn flow_config(&self) -> FlowConfig {
        FlowConfig {
            tau: self.flow.tau,
            t_span: self.flow.t_span,
            n_t: self.flow.n_t,
            scheme: match self.flow.scheme {
                SchemeChoice::Bdf1 => Scheme::Bdf1,
                SchemeChoice::Bdf2 => Scheme::Bdf2,
            },
            newton: NewtonConfig { rtol: self.flow.rtol, atol: self.flow.atol, ..NewtonConfig::default() },
            ..FlowConfig::default()
        }
    }

    pub fn metric_options(&self) -> MetricOptions {
        MetricOptions { sweeps: self.metric.smoothing_sweeps, normalize: true, apply_kappa: self.metric.apply_kappa }
    }

    pub fn initial_mesh(&self) -> Result<Mesh2, MeshError> {
        let d = self.mesh.domain;
        let domain = BoxDomain::new(Point::<2>::new(d[0], d[2]), Point::<2>::new(d[1], d[3]))?;
        Mesh2::structured(self.mesh.nx, self.mesh.ny, domain)
    }

    /// Raw (unsmoothed, unscaled) metric from nodal field values.
    pub fn raw_metric(&self, mesh: &Mesh2, values: &[f64]) -> Result<MetricField<2>, MetricError> {
        match self.metric.kind {
            MetricKind::Hessian => {
                let h = recover_hessian(mesh, values);
                if self.metric.hessian_regularize {
                    Ok(metric_hessian_regularized(mesh, &h)?.0)
                } else {
                    metric_hessian(mesh, &h, self.metric.hessian_floor)
                }
            }
            MetricKind::Arclength => metric_arclength(&cell_gradients(mesh, values), self.metric.beta),
            MetricKind::Eigen => metric_eigendecomp(mesh, &cell_gradients(mesh, values), self.metric.beta),
        }
    }

    /// The smoothed and normalized metric used for quality evaluation.
    pub fn quality_metric(&self, mesh: &Mesh2) -> Result<MetricField<2>, MetricError> {
        let field = self.builtin();
        let values: Vec<f64> = mesh.x().iter().map(|p| field.value(p)).collect();
        let raw = self.raw_metric(mesh, &values)?;
        let opts = MetricOptions { apply_kappa: false, ..self.metric_options() };
        Ok(crate::flow::prepare_metric(&raw, mesh, &opts, self.functional.gamma)?.0)
    }

    /// Quality and interpolation errors of `mesh` for this configuration.
    pub fn evaluate(&self, mesh: &Mesh2) -> Result<QualityReport, RunError> {
        let m = self.quality_metric(mesh)?;
        Ok(quality_metrics(mesh, &m)?.with_errors(interp_error(mesh, &self.builtin())))
    }
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub mesh: Mesh2,
    pub report: QualityReport,
    pub history: Vec<HistoryRow>,
    pub iterations: Vec<IterationSummary>,
    pub time_s: f64,
    pub steps: usize,
    pub newton_iters: usize,
    pub out_dir: PathBuf,
}

fn snapshot(cfg: &ExperimentConfig, mesh: &Mesh2, path: &Path, title: &str) -> Result<(), RunError> {
    let m = cfg.quality_metric(mesh)?;
    let q = quality_metrics(mesh, &m)?;
    let data = CellData::default()
        .scalar("q_eq", q.per_cell.q_eq)
        .scalar("inv_q_ali", q.per_cell.inv_q_ali)
        .scalar("q_geo", q.per_cell.q_geo)
        .tensor("metric", m.tensors());
    vtk::write(path, mesh, &data, title)?;
    Ok(())
}

pub const SUMMARY_HEADER: [&str; 10] =
    ["functional", "NC", "Q_eq", "Q_ali", "Q_geo", "e_L2", "time_s", "steps", "newton_iters", "outer_iters"];

/// Run the adaptation described by `cfg`, writing artifacts into
/// `out_dir` (or the configured directory).
pub fn run(cfg: &ExperimentConfig, out_dir: Option<&Path>) -> Result<RunOutcome, RunError> {
    cfg.validate()?;
    let dir = out_dir.map_or_else(|| cfg.output.dir.clone(), Path::to_path_buf);
    std::fs::create_dir_all(&dir)?;
    let mesh0 = cfg.initial_mesh()?;
    snapshot(cfg, &mesh0, &dir.join("mesh_0000.vtk"), "initial mesh")?;

    let field = cfg.builtin();
    let field_fn = move |p: &Point<2>| field.value(p);
    let builder = |mesh: &Mesh2, values: &[f64]| cfg.raw_metric(mesh, values);
    let outer = OuterLoop {
        flow: cfg.flow_config(),
        metric: cfg.metric_options(),
        functional: cfg.functional_params(),
        balancing: cfg.balancing(),
        iterations: cfg.flow.outer_iters,
        builder: &builder,
    };
    let start = Instant::now();
    let mut snap_err = None;
    let mut snap_time = 0.0;
    let result = outer.run(mesh0, FieldSource::Analytic(&field_fn), |it, mesh, s| {
        log::info!(
            "outer {it}: I_h {:.6e} -> {:.6e}, {} steps, {} newton, {} cg",
            s.initial_energy,
            s.final_energy,
            s.steps,
            s.newton_iters,
            s.cg_iters
        );
        let n = it + 1;
        if cfg.output.vtk_every > 0 && n % cfg.output.vtk_every == 0 && snap_err.is_none() {
            let t0 = Instant::now();
            if let Err(e) = snapshot(cfg, mesh, &dir.join(format!("mesh_{n:04}.vtk")), &format!("outer iteration {n}")) {
                snap_err = Some(e);
            }
            snap_time += t0.elapsed().as_secs_f64();
        }
    })?;
    let time_s = start.elapsed().as_secs_f64() - snap_time;
    if let Some(e) = snap_err {
        return Err(e);
    }
    let n_final = result.iterations.len();
    let final_path = dir.join(format!("mesh_{n_final:04}.vtk"));
    if !final_path.exists() {
        snapshot(cfg, &result.mesh, &final_path, "final mesh")?;
    }

    let report = cfg.evaluate(&result.mesh)?;
    let steps = result.iterations.iter().map(|s| s.steps).sum();
    let newton_iters = result.iterations.iter().map(|s| s.newton_iters).sum();
    let outcome = RunOutcome {
        mesh: result.mesh,
        report,
        history: result.history,
        iterations: result.iterations,
        time_s: if cfg.output.record_time { time_s } else { 0.0 },
        steps,
        newton_iters,
        out_dir: dir.clone(),
    };
    if cfg.output.csv {
        write_csvs(cfg, &outcome, &dir)?;
    }
    Ok(outcome)
}

fn write_csvs(cfg: &ExperimentConfig, o: &RunOutcome, dir: &Path) -> Result<(), RunError> {
    let mut w = csv::Writer::from_path(dir.join("history.csv"))?;
    w.write_record(["outer_iter", "t", "I_h", "min_vol", "min_height_M", "newton_iters", "cg_iters_total"])?;
    for h in &o.history {
        w.write_record([
            h.outer_iter.to_string(),
            h.t.to_string(),
            h.energy.to_string(),
            h.min_vol.to_string(),
            h.min_height.to_string(),
            h.newton_iters.to_string(),
            h.cg_iters.to_string(),
        ])?;
    }
    w.flush()?;

    let mut w = csv::Writer::from_path(dir.join("summary.csv"))?;
    w.write_record(SUMMARY_HEADER)?;
    let r = &o.report;
    w.write_record([
        cfg.functional_params().kind.name().to_string(),
        o.mesh.n_cells().to_string(),
        r.q_eq.to_string(),
        r.q_ali.to_string(),
        r.q_geo.to_string(),
        r.e_l2.unwrap_or(f64::NAN).to_string(),
        format!("{:.3}", o.time_s),
        o.steps.to_string(),
        o.newton_iters.to_string(),
        o.iterations.len().to_string(),
    ])?;
    w.flush()?;

    let mut w = csv::Writer::from_path(dir.join("quality_hist.csv"))?;
    w.write_record(["measure", "bin", "lo", "hi", "count"])?;
    for (name, values) in
        [("q_eq", &r.per_cell.q_eq), ("inv_q_ali", &r.per_cell.inv_q_ali), ("q_geo", &r.per_cell.q_geo)]
    {
        let h = histogram(values, HISTOGRAM_BINS);
        let edges = h.edges();
        for (b, c) in h.counts.iter().enumerate() {
            w.write_record([name.to_string(), b.to_string(), edges[b].to_string(), edges[b + 1].to_string(), c.to_string()])?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Human-readable digest of the artifacts in a run directory.
pub fn report(dir: &Path) -> Result<String, RunError> {
    let mut out = String::new();
    let mut rd = csv::Reader::from_path(dir.join("summary.csv"))?;
    let headers = rd.headers()?.clone();
    for rec in rd.records() {
        let rec = rec?;
        for (h, v) in headers.iter().zip(rec.iter()) {
            out.push_str(&format!("{h:>12}: {v}\n"));
        }
    }
    let hist = dir.join("history.csv");
    if hist.exists() {
        let mut rd = csv::Reader::from_path(hist)?;
        let mut energies = Vec::new();
        for rec in rd.records() {
            let rec = rec?;
            energies.push(rec.get(2).and_then(|v| v.parse::<f64>().ok()).unwrap_or(f64::NAN));
        }
        if let (Some(first), Some(last)) = (energies.first(), energies.last()) {
            out.push_str(&format!("{:>12}: {} steps, I_h {first:.6e} -> {last:.6e}\n", "history", energies.len()));
        }
    }
    let mut snaps: Vec<PathBuf> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == "vtk"))
        .collect();
    snaps.sort();
    for p in snaps {
        let status = match vtk::read(&p).and_then(|d| d.to_mesh::<2>()) {
            Ok(m) => format!("admissible, {} cells", m.n_cells()),
            Err(e) => format!("invalid: {e}"),
        };
        out.push_str(&format!("{:>12}: {}\n", p.file_name().unwrap().to_string_lossy(), status));
    }
    Ok(out)
}

/// One line of the property-oracle check.
#[derive(Debug, Clone, PartialEq)]
pub struct CheckLine {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

/// Run the property oracles: lemma identities, gradient against finite
/// differences, scale invariance, and coercivity.
pub fn check(seed: u64) -> Vec<CheckLine> {
    use crate::functional::{coercivity_check, scale_invariance_check};
    use crate::gradient::lemma_identities_check;
    let mut lines = Vec::new();

    let lemma = lemma_identities_check::<2>(100, seed);
    lines.push(CheckLine {
        name: "lemma identities",
        passed: lemma.passed(1e-6),
        detail: format!("{lemma:?}"),
    });

    let fd = gradient_fd_check(seed, 5);
    lines.push(CheckLine {
        name: "gradient vs finite differences",
        passed: fd.as_ref().is_ok_and(|e| *e <= 1e-6),
        detail: match fd {
            Ok(e) => format!("max relative error {e:.3e}"),
            Err(e) => e,
        },
    });

    let mesh = Mesh2::structured(4, 4, BoxDomain::unit_square()).expect("valid grid");
    let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(seed);
    let metric = MetricField::new(
        (0..mesh.n_cells()).map(|_| crate::functional::random_spd::<2>(&mut rng, 0.5, 4.0)).collect(),
    )
    .expect("random SPD");
    let params = FunctionalParams { kind: FunctionalKind::Proposed, gamma: 1.25, theta: 1.0 };
    let mut ok = true;
    let mut detail = String::new();
    for c in [0.25, 2.0, 10.0] {
        match scale_invariance_check(&mesh, &metric, c, &params, 4, seed) {
            Ok(r) => {
                ok &= r.passed(1e-10);
                detail.push_str(&format!("c={c}: fit residual {:.1e} ", r.affine_residual));
            }
            Err(e) => {
                ok = false;
                detail.push_str(&format!("c={c}: {e} "));
            }
        }
    }
    lines.push(CheckLine { name: "scale invariance", passed: ok, detail });

    let coer = coercivity_check::<2>(10_000, &params, seed);
    lines.push(CheckLine {
        name: "coercivity",
        passed: coer.as_ref().is_ok_and(|r| r.passed()),
        detail: match coer {
            Ok(r) => format!("{} violations in {} samples, min slack {:.3e}", r.violations.len(), r.samples, r.min_slack),
            Err(e) => e.to_string(),
        },
    });
    lines
}

/// Largest relative error of the assembled computational gradient against
/// central differences over `n_meshes` random meshes and all kinds.
pub fn gradient_fd_check(seed: u64, n_meshes: usize) -> Result<f64, String> {
    use crate::functional::{energy_terms, random_spd};
    use crate::gradient::energy_gradient_xi;
    use crate::linalg::pairwise_sum;
    use crate::mesh::BoundaryTag;
    use rand::{Rng, SeedableRng};

    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..n_meshes {
        let n = rng.gen_range(2..=7);
        let mut mesh = Mesh2::structured(n, n, BoxDomain::unit_square()).map_err(|e| e.to_string())?;
        let h = 1.0 / n as f64;
        let xi: Vec<Point<2>> = mesh
            .xi()
            .iter()
            .zip(mesh.tags())
            .map(|(p, t)| match t {
                BoundaryTag::Interior => {
                    p + Point::<2>::new(rng.gen_range(-0.2..0.2) * h, rng.gen_range(-0.2..0.2) * h)
                }
                _ => *p,
            })
            .collect();
        mesh.set_xi(xi).map_err(|e| e.to_string())?;
        let metric = MetricField::new((0..mesh.n_cells()).map(|_| random_spd::<2>(&mut rng, 0.3, 5.0)).collect())
            .map_err(|e| e.to_string())?;
        for kind in [FunctionalKind::Proposed, FunctionalKind::Huang { mu: 0.3 }, FunctionalKind::KolasinskiHuang] {
            let params = FunctionalParams { kind, gamma: 1.5, theta: rng.gen_range(0.5..2.0) };
            let g = energy_gradient_xi(&mesh, &metric, &params).map_err(|e| e.to_string())?;
            let scale = g.iter().map(|v| v.norm()).fold(0.0, f64::max).max(1e-300);
            for i in 0..mesh.n_nodes() {
                if mesh.tags()[i] != BoundaryTag::Interior {
                    continue;
                }
                for c in 0..2 {
                    let eps = 1e-6;
                    let mut plus = mesh.xi().to_vec();
                    let mut minus = plus.clone();
                    plus[i][c] += eps;
                    minus[i][c] -= eps;
                    // difference only the cells around node i to avoid
                    // cancellation in the global sum
                    let mut mp = mesh.clone();
                    let mut mm = mesh.clone();
                    mp.set_xi(plus).map_err(|e| e.to_string())?;
                    mm.set_xi(minus).map_err(|e| e.to_string())?;
                    let ep = energy_terms(&mp, &metric, &params).map_err(|e| e.to_string())?;
                    let em = energy_terms(&mm, &metric, &params).map_err(|e| e.to_string())?;
                    let diffs: Vec<f64> = ep.iter().zip(&em).map(|(a, b)| a - b).collect();
                    let fd = pairwise_sum(&diffs) / (2.0 * eps);
                    worst = worst.max((fd - g[i][c]).abs() / scale);
                }
            }
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn builtin_hand_values() {
        assert_relative_eq!(Builtin::SineBand.value(&Point::<2>::new(0.5, 0.75)), (-25.0f64).tanh(), epsilon = 1e-12);
        assert_eq!(Builtin::SineBand.value(&Point::<2>::new(0.0, 0.5)), 0.0);
        assert_eq!(Builtin::XShape.value(&Point::<2>::new(0.5, 0.5)), 0.0);
        let b = Builtin::BurgersProfile { re: 10.0, t: 0.5 };
        assert_relative_eq!(b.value(&Point::<2>::new(0.25, 0.25)), 0.5, epsilon = 1e-15);
    }

    #[test]
    fn builtin_gradients_match_differences() {
        let fields = [Builtin::SineBand, Builtin::XShape, Builtin::BurgersProfile { re: 20.0, t: 0.7 }];
        for f in fields {
            for p in [Point::<2>::new(0.3, 0.52), Point::<2>::new(0.47, 0.51), Point::<2>::new(0.8, 0.1)] {
                let g = f.gradient(&p);
                for c in 0..2 {
                    let h = 1e-7;
                    let mut a = p;
                    let mut b = p;
                    a[c] += h;
                    b[c] -= h;
                    let fd = (f.value(&a) - f.value(&b)) / (2.0 * h);
                    assert!((fd - g[c]).abs() <= 1e-5 * (1.0 + g[c].abs()), "{f:?} {p:?} {c}: {fd} vs {}", g[c]);
                }
            }
        }
    }

    #[test]
    fn config_defaults_and_overrides() {
        let cfg = ExperimentConfig::parse(
            "# comment\nmesh.nx = 8\nmesh.ny = 4\nfield.name = \"x_shape\"\nfunctional.kind = \"huang\"\nflow.scheme = \"bdf1\"\n",
        )
        .unwrap();
        assert_eq!(cfg.mesh.nx, 8);
        assert_eq!(cfg.builtin(), Builtin::XShape);
        assert_eq!(cfg.functional_params().kind, FunctionalKind::Huang { mu: 1.0 / 3.0 });
        assert_eq!(cfg.flow_config().scheme, Scheme::Bdf1);
        assert_eq!(cfg.metric, MetricSection::default());
    }

    #[test]
    fn config_rejects_bad_input() {
        for text in [
            "field.name = \"nope\"",
            "mesh.nx = 0",
            "mesh.colour = 1",
            "functional.gamma = 1.0",
            "metric.kind = \"eigen\"\nmetric.beta = 1.5",
            "flow.tau = -1",
            "mesh.domain = [1.0, 0.0, 0.0, 1.0]",
        ] {
            assert!(ExperimentConfig::parse(text).is_err(), "{text}");
        }
    }

    #[test]
    fn zero_iterations_keep_uniform_mesh() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = ExperimentConfig::parse(
            "mesh.nx = 4\nmesh.ny = 4\nflow.outer_iters = 0\nfield.name = \"burgers_profile\"\nmetric.kind = \"arclength\"\nmetric.beta = 0.0\noutput.record_time = false\n",
        )
        .unwrap();
        let out = run(&cfg, Some(dir.path())).unwrap();
        assert_relative_eq!(out.report.q_eq, 1.0, epsilon = 1e-12);
        assert!(dir.path().join("mesh_0000.vtk").exists());
        let text = report(dir.path()).unwrap();
        assert!(text.contains("admissible"), "{text}");
    }
}
