//! Hyper-parameter estimation: MLM, GCV and SURE costs from a single filter
//! sweep, plus the multi-start box-constrained search.
//!
//! The cost identities are the decoupled forms of the dense quantities:
//! `log|Sigma| = sum log E_{j,i}` and `Y^T Sigma^-1 Y = sum e^2/E` over the
//! scalar block innovations. GCV and SURE reduce to the residual energy `S`
//! and effective degrees of freedom `delta`, both of which are noise-variance
//! derivatives of those two sums and come out of the sensitivity recursions
//! in [`crate::kalman`]. `finite_diff_check` certifies the recursions
//! against central differences of the filtered quantities; the
//! finite-difference route is the authority if they ever disagree.

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Result, StgpError};
use crate::kalman::{filter_cost, filter_cost_with_sensitivity};
use crate::kernels::{ParamTransform, SpatialKernelSpec, TemporalKernelSpec};
use crate::realize::realize;
use crate::stmodel::{build_transformed_model, TransformedModel};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Mlm,
    Gcv,
    Sure,
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Method::Mlm => write!(f, "mlm"),
            Method::Gcv => write!(f, "gcv"),
            Method::Sure => write!(f, "sure"),
        }
    }
}

/// Cost evaluation summary. `s` and `delta` are only present when the
/// sensitivity sweep ran (GCV/SURE).
#[derive(Debug, Clone, Serialize)]
pub struct CostReport {
    pub method: Method,
    pub value: f64,
    pub logdet: f64,
    pub quad: f64,
    pub s: Option<f64>,
    pub delta: Option<f64>,
    pub n_terms: usize,
    pub floored: usize,
}

/// Negative log marginal likelihood from one streaming filter sweep:
/// `value = (n log 2pi + logdet + quad) / 2`.
pub fn mlm_cost(model: &TransformedModel, l: &DMatrix<f64>) -> Result<CostReport> {
    mlm_cost_masked(model, l, None)
}

pub fn mlm_cost_masked(
    model: &TransformedModel,
    l: &DMatrix<f64>,
    observed: Option<&[bool]>,
) -> Result<CostReport> {
    let acc = filter_cost(model, l, observed)?;
    let n = acc.n_terms as f64;
    let value = 0.5 * (n * (2.0 * std::f64::consts::PI).ln() + acc.logdet + acc.quad);
    Ok(CostReport {
        method: Method::Mlm,
        value,
        logdet: acc.logdet,
        quad: acc.quad,
        s: None,
        delta: None,
        n_terms: acc.n_terms,
        floored: acc.floored,
    })
}

/// GCV and SURE costs from one sensitivity-augmented sweep, with
/// `S = gamma^2 * s_raw` and `delta = n - gamma * trace_term`
/// (`gamma = sigma^2` held fixed).
pub fn gcv_sure_costs(
    model: &TransformedModel,
    l: &DMatrix<f64>,
) -> Result<(CostReport, CostReport)> {
    gcv_sure_costs_masked(model, l, None)
}

pub fn gcv_sure_costs_masked(
    model: &TransformedModel,
    l: &DMatrix<f64>,
    observed: Option<&[bool]>,
) -> Result<(CostReport, CostReport)> {
    let gamma = model.sigma2();
    let acc = filter_cost_with_sensitivity(model, l, observed)?;
    let n = acc.cost.n_terms as f64;
    let s = gamma * gamma * acc.s_raw;
    let delta = n - gamma * acc.trace_term;
    let denom = 1.0 - delta / n;
    if denom.abs() < 1e-300 {
        return Err(StgpError::DegenerateFit);
    }
    let gcv = s / (n * denom * denom);
    let sure = s + 2.0 * gamma * delta;
    let base = |method: Method, value: f64| CostReport {
        method,
        value,
        logdet: acc.cost.logdet,
        quad: acc.cost.quad,
        s: Some(s),
        delta: Some(delta),
        n_terms: acc.cost.n_terms,
        floored: acc.cost.floored,
    };
    Ok((base(Method::Gcv, gcv), base(Method::Sure, sure)))
}

/// Finite-difference certification of the sensitivity recursions through
/// the identities `d logdet / d gamma = (n - delta) / gamma` and
/// `d quad / d gamma = -S / gamma^2`.
#[derive(Debug, Clone, Serialize)]
pub struct FiniteDiffReport {
    pub d_logdet_fd: f64,
    pub d_logdet_analytic: f64,
    pub d_quad_fd: f64,
    pub d_quad_analytic: f64,
    pub rel_err_delta: f64,
    pub rel_err_s: f64,
}

pub fn finite_diff_check(
    model: &TransformedModel,
    l: &DMatrix<f64>,
    h: f64,
) -> Result<FiniteDiffReport> {
    let gamma = model.sigma2();
    if gamma - h <= 0.0 {
        return Err(StgpError::Config(format!(
            "step {h} leaves gamma - h = {} nonpositive",
            gamma - h
        )));
    }
    let acc = filter_cost_with_sensitivity(model, l, None)?;
    let n = acc.cost.n_terms as f64;
    let s = gamma * gamma * acc.s_raw;
    let delta = n - gamma * acc.trace_term;

    let plus = filter_cost(&model.with_sigma2(gamma + h), l, None)?;
    let minus = filter_cost(&model.with_sigma2(gamma - h), l, None)?;
    let d_logdet_fd = (plus.logdet - minus.logdet) / (2.0 * h);
    let d_quad_fd = (plus.quad - minus.quad) / (2.0 * h);
    let d_logdet_analytic = (n - delta) / gamma;
    let d_quad_analytic = -s / (gamma * gamma);

    let rel = |a: f64, b: f64| (a - b).abs() / b.abs().max(1e-12);
    Ok(FiniteDiffReport {
        d_logdet_fd,
        d_logdet_analytic,
        d_quad_fd,
        d_quad_analytic,
        rel_err_delta: rel(d_logdet_fd, d_logdet_analytic),
        rel_err_s: rel(d_quad_fd, d_quad_analytic),
    })
}

// ---------------------------------------------------------------------------
// Multi-start box-constrained optimization
// ---------------------------------------------------------------------------

/// One free hyper-parameter component: box, transform and grid points (in
/// the raw parameter space).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ParamSpec {
    pub name: String,
    pub lo: f64,
    pub hi: f64,
    pub transform: ParamTransform,
    pub grid: Vec<f64>,
}

impl ParamSpec {
    pub fn log_spaced(name: &str, lo: f64, hi: f64, n_grid: usize) -> Self {
        let grid = if n_grid <= 1 {
            vec![(lo * hi).sqrt()]
        } else {
            (0..n_grid)
                .map(|k| {
                    let t = k as f64 / (n_grid - 1) as f64;
                    (lo.ln() + t * (hi.ln() - lo.ln())).exp()
                })
                .collect()
        };
        Self {
            name: name.into(),
            lo,
            hi,
            transform: ParamTransform::Log,
            grid,
        }
    }

    pub fn lin_spaced(name: &str, lo: f64, hi: f64, n_grid: usize) -> Self {
        let grid = if n_grid <= 1 {
            vec![0.5 * (lo + hi)]
        } else {
            (0..n_grid)
                .map(|k| lo + (hi - lo) * k as f64 / (n_grid - 1) as f64)
                .collect()
        };
        Self {
            name: name.into(),
            lo,
            hi,
            transform: ParamTransform::Identity,
            grid,
        }
    }

    pub fn with_grid(mut self, grid: Vec<f64>) -> Self {
        self.grid = grid;
        self
    }
}

#[derive(Debug, Clone)]
pub struct OptimizeOptions {
    pub n_starts: usize,
    pub max_iters: usize,
    pub f_tol: f64,
    pub record_trace: bool,
}

impl Default for OptimizeOptions {
    fn default() -> Self {
        Self {
            n_starts: 5,
            max_iters: 600,
            f_tol: 1e-14,
            record_trace: false,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct TracePoint {
    pub start: usize,
    pub iteration: usize,
    pub cost: f64,
    pub params: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct OptimizeResult {
    pub best_params: Vec<f64>,
    pub best_cost: f64,
    /// Cost per grid point, aligned with lexicographic grid enumeration;
    /// failed evaluations are `+inf`.
    pub grid_costs: Vec<f64>,
    pub trace: Vec<TracePoint>,
    pub n_evals: usize,
}

fn grid_points(params: &[ParamSpec]) -> Vec<Vec<f64>> {
    let mut points: Vec<Vec<f64>> = vec![vec![]];
    for spec in params {
        let mut next = Vec::with_capacity(points.len() * spec.grid.len());
        for base in &points {
            for &g in &spec.grid {
                let mut p = base.clone();
                p.push(g.clamp(spec.lo, spec.hi));
                next.push(p);
            }
        }
        points = next;
    }
    points
}

/// Grid scan, then Nelder-Mead descent from the best `n_starts` grid points
/// in transformed coordinates with box projection. Deterministic given the
/// grid; starts are ranked by `(cost, grid index)` and the returned value is
/// never above the best evaluated grid point.
pub fn optimize<F>(
    cost_fn: F,
    params: &[ParamSpec],
    opts: &OptimizeOptions,
) -> Result<OptimizeResult>
where
    F: Fn(&[f64]) -> Result<f64> + Sync,
{
    if params.is_empty() {
        return Err(StgpError::Config("no free hyper-parameters".into()));
    }
    for p in params {
        if !(p.lo <= p.hi) || !p.lo.is_finite() || !p.hi.is_finite() {
            return Err(StgpError::Config(format!(
                "parameter {} has invalid box [{}, {}]",
                p.name, p.lo, p.hi
            )));
        }
        if p.grid.is_empty() {
            return Err(StgpError::Config(format!(
                "parameter {} has an empty grid",
                p.name
            )));
        }
        if p.transform == ParamTransform::Log && p.lo <= 0.0 {
            return Err(StgpError::Config(format!(
                "parameter {} uses a log transform on a non-positive box",
                p.name
            )));
        }
    }

    let points = grid_points(params);
    let evals: Vec<(f64, Option<String>)> = points
        .par_iter()
        .map(|p| match cost_fn(p) {
            Ok(c) if c.is_finite() => (c, None),
            Ok(c) => (f64::INFINITY, Some(format!("non-finite cost {c}"))),
            Err(e) => (f64::INFINITY, Some(e.to_string())),
        })
        .collect();
    let grid_costs: Vec<f64> = evals.iter().map(|(c, _)| *c).collect();
    let n_finite = grid_costs.iter().filter(|c| c.is_finite()).count();
    if n_finite == 0 {
        let details: Vec<String> = evals
            .iter()
            .enumerate()
            .filter_map(|(i, (_, e))| e.as_ref().map(|m| format!("point {i}: {m}")))
            .take(5)
            .collect();
        return Err(StgpError::OptimizationFailed {
            attempted: points.len(),
            details: details.join("; "),
        });
    }

    let mut order: Vec<usize> = (0..points.len()).collect();
    order.sort_by(|&a, &b| {
        grid_costs[a]
            .partial_cmp(&grid_costs[b])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    let n_starts = opts.n_starts.min(n_finite).max(1);

    let mut n_evals = points.len();
    let starts: Vec<usize> = order[..n_starts].to_vec();
    let local: Vec<(Vec<f64>, f64, Vec<TracePoint>, usize)> = starts
        .par_iter()
        .enumerate()
        .map(|(rank, &gi)| {
            let (x, c, trace, evals) =
                nelder_mead(&cost_fn, params, &points[gi], rank, opts);
            (x, c, trace, evals)
        })
        .collect();

    let mut best_params = points[order[0]].clone();
    let mut best_cost = grid_costs[order[0]];
    let mut trace = Vec::new();
    for (x, c, t, e) in local {
        n_evals += e;
        if opts.record_trace {
            trace.extend(t);
        }
        if c < best_cost {
            best_cost = c;
            best_params = x;
        }
    }
    Ok(OptimizeResult {
        best_params,
        best_cost,
        grid_costs,
        trace,
        n_evals,
    })
}

/// Nelder-Mead with box projection in transformed coordinates. Errors from
/// the cost function are treated as `+inf` so the simplex walks away from
/// invalid regions.
fn nelder_mead<F>(
    cost_fn: &F,
    params: &[ParamSpec],
    start: &[f64],
    start_rank: usize,
    opts: &OptimizeOptions,
) -> (Vec<f64>, f64, Vec<TracePoint>, usize)
where
    F: Fn(&[f64]) -> Result<f64> + Sync,
{
    let d = params.len();
    let to_raw = |z: &[f64]| -> Vec<f64> {
        z.iter()
            .zip(params)
            .map(|(&v, p)| p.transform.inverse(v).clamp(p.lo, p.hi))
            .collect()
    };
    let lo: Vec<f64> = params.iter().map(|p| p.transform.forward(p.lo)).collect();
    let hi: Vec<f64> = params.iter().map(|p| p.transform.forward(p.hi)).collect();
    let project = |z: &mut Vec<f64>| {
        for i in 0..d {
            z[i] = z[i].clamp(lo[i], hi[i]);
        }
    };
    let mut n_evals = 0usize;
    let mut eval = |z: &Vec<f64>| -> f64 {
        n_evals += 1;
        match cost_fn(&to_raw(z)) {
            Ok(c) if c.is_finite() => c,
            _ => f64::INFINITY,
        }
    };

    let z0: Vec<f64> = start
        .iter()
        .zip(params)
        .map(|(&v, p)| p.transform.forward(v))
        .collect();
    let mut simplex: Vec<Vec<f64>> = Vec::with_capacity(d + 1);
    simplex.push(z0.clone());
    for i in 0..d {
        let mut z = z0.clone();
        let span = hi[i] - lo[i];
        let step = if span > 0.0 { 0.05 * span } else { 0.1 };
        z[i] = if z[i] + step <= hi[i] {
            z[i] + step
        } else {
            z[i] - step
        };
        project(&mut z);
        simplex.push(z);
    }
    let mut f: Vec<f64> = simplex.iter().map(&mut eval).collect();

    let (alpha, gamma, rho, sigma) = (1.0, 2.0, 0.5, 0.5);
    let mut trace = Vec::new();
    for iter in 0..opts.max_iters {
        let mut idx: Vec<usize> = (0..=d).collect();
        idx.sort_by(|&a, &b| f[a].partial_cmp(&f[b]).unwrap_or(std::cmp::Ordering::Equal));
        let best = idx[0];
        let worst = idx[d];
        let second_worst = idx[d.saturating_sub(1).min(d)];

        if opts.record_trace {
            trace.push(TracePoint {
                start: start_rank,
                iteration: iter,
                cost: f[best],
                params: to_raw(&simplex[best]),
            });
        }
        if f[worst].is_finite() && (f[worst] - f[best]).abs() <= opts.f_tol * (1.0 + f[best].abs())
        {
            break;
        }

        // centroid of all vertices but the worst
        let mut centroid = vec![0.0; d];
        for (k, z) in simplex.iter().enumerate() {
            if k == worst {
                continue;
            }
            for i in 0..d {
                centroid[i] += z[i] / d as f64;
            }
        }

        let mut reflected: Vec<f64> = (0..d)
            .map(|i| centroid[i] + alpha * (centroid[i] - simplex[worst][i]))
            .collect();
        project(&mut reflected);
        let f_r = eval(&reflected);

        if f_r < f[best] {
            let mut expanded: Vec<f64> = (0..d)
                .map(|i| centroid[i] + gamma * (reflected[i] - centroid[i]))
                .collect();
            project(&mut expanded);
            let f_e = eval(&expanded);
            if f_e < f_r {
                simplex[worst] = expanded;
                f[worst] = f_e;
            } else {
                simplex[worst] = reflected;
                f[worst] = f_r;
            }
        } else if f_r < f[second_worst] {
            simplex[worst] = reflected;
            f[worst] = f_r;
        } else {
            let mut contracted: Vec<f64> = if f_r < f[worst] {
                (0..d)
                    .map(|i| centroid[i] + rho * (reflected[i] - centroid[i]))
                    .collect()
            } else {
                (0..d)
                    .map(|i| centroid[i] + rho * (simplex[worst][i] - centroid[i]))
                    .collect()
            };
            project(&mut contracted);
            let f_c = eval(&contracted);
            if f_c < f[worst].min(f_r) {
                simplex[worst] = contracted;
                f[worst] = f_c;
            } else {
                // shrink toward the best vertex
                let best_z = simplex[best].clone();
                for k in 0..=d {
                    if k == best {
                        continue;
                    }
                    for i in 0..d {
                        simplex[k][i] = best_z[i] + sigma * (simplex[k][i] - best_z[i]);
                    }
                    let z = simplex[k].clone();
                    f[k] = eval(&z);
                }
            }
        }
    }

    let mut best = 0;
    for k in 1..=d {
        if f[k] < f[best] {
            best = k;
        }
    }
    (to_raw(&simplex[best]), f[best], trace, n_evals)
}

// ---------------------------------------------------------------------------
// Panel fitting: mapping free parameters onto kernel specs
// ---------------------------------------------------------------------------

/// Role of one free component in the hyper-parameter vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamRole {
    Variance,
    Length,
    Concentration,
    /// Ratio `drift_variance / variance`, boxed to [0.01, 0.1] so the
    /// linear constraint reduces to a box.
    DriftRatio,
    DriftLength,
    Envelope,
    DcDecay,
    DcCorrelation,
    SpatialAlpha,
    Noise,
}

/// Applies a hyper-parameter vector to a kernel template. Returns the
/// concrete temporal spec, the spatial length-scale (if free) and the noise
/// variance (if free).
pub fn apply_params(
    template: &TemporalKernelSpec,
    roles: &[ParamRole],
    theta: &[f64],
) -> Result<(TemporalKernelSpec, Option<f64>, Option<f64>)> {
    if roles.len() != theta.len() {
        return Err(StgpError::Config(format!(
            "{} roles but {} parameter values",
            roles.len(),
            theta.len()
        )));
    }
    let mut spec = template.clone();
    let mut alpha = None;
    let mut noise = None;
    let mut drift_ratio = None;
    for (&role, &v) in roles.iter().zip(theta) {
        match role {
            ParamRole::SpatialAlpha => alpha = Some(v),
            ParamRole::Noise => noise = Some(v),
            ParamRole::DriftRatio => drift_ratio = Some(v),
            _ => set_field(&mut spec, role, v)?,
        }
    }
    if let Some(ratio) = drift_ratio {
        let variance = match spec {
            TemporalKernelSpec::Te2ExpMatern { variance, .. } => variance,
            _ => {
                return Err(StgpError::Config(
                    "drift_ratio only applies to the te2exp+matern family".into(),
                ))
            }
        };
        set_field(&mut spec, ParamRole::DriftRatio, ratio * variance)?;
    }
    spec.validate()?;
    Ok((spec, alpha, noise))
}

fn set_field(spec: &mut TemporalKernelSpec, role: ParamRole, v: f64) -> Result<()> {
    use TemporalKernelSpec::*;
    let ok = match (spec, role) {
        (Exponential { variance, .. }, ParamRole::Variance) => {
            *variance = v;
            true
        }
        (Exponential { length, .. }, ParamRole::Length | ParamRole::Envelope) => {
            *length = v;
            true
        }
        (Matern32 { variance, .. }, ParamRole::Variance) => {
            *variance = v;
            true
        }
        (Matern32 { length, .. }, ParamRole::Length) => {
            *length = v;
            true
        }
        (Te2Exp { variance, .. }, ParamRole::Variance) => {
            *variance = v;
            true
        }
        (Te2Exp { concentration, .. }, ParamRole::Concentration) => {
            *concentration = v;
            true
        }
        (Te2Exp { envelope, .. }, ParamRole::Envelope) => {
            *envelope = v;
            true
        }
        (Te2ExpMatern { variance, .. }, ParamRole::Variance) => {
            *variance = v;
            true
        }
        (Te2ExpMatern { concentration, .. }, ParamRole::Concentration) => {
            *concentration = v;
            true
        }
        (Te2ExpMatern { drift_variance, .. }, ParamRole::DriftRatio) => {
            *drift_variance = v;
            true
        }
        (Te2ExpMatern { drift_length, .. }, ParamRole::DriftLength) => {
            *drift_length = v;
            true
        }
        (Te2ExpMatern { envelope, .. }, ParamRole::Envelope) => {
            *envelope = v;
            true
        }
        (PeriodicDecay { variance, .. }, ParamRole::Variance) => {
            *variance = v;
            true
        }
        (PeriodicDecay { envelope, .. }, ParamRole::Envelope) => {
            *envelope = v;
            true
        }
        (DcInput { variance, .. }, ParamRole::Variance) => {
            *variance = v;
            true
        }
        (DcInput { decay, .. }, ParamRole::DcDecay) => {
            *decay = v;
            true
        }
        (DcInput { correlation, .. }, ParamRole::DcCorrelation) => {
            *correlation = v;
            true
        }
        _ => false,
    };
    if ok {
        Ok(())
    } else {
        Err(StgpError::Config(format!(
            "role {role:?} does not apply to this kernel family"
        )))
    }
}

/// Default free-parameter layout for a family: boxes and grids scaled by
/// the observed data variance and (for the spatial side) the median squared
/// location distance.
pub fn default_param_specs(
    template: &TemporalKernelSpec,
    data_var: f64,
    median_sqdist: Option<f64>,
    include_noise: bool,
    grid_size: usize,
) -> Vec<(ParamRole, ParamSpec)> {
    let v = data_var.max(1e-8);
    let g = grid_size.max(2);
    let mut out: Vec<(ParamRole, ParamSpec)> = Vec::new();
    match template {
        TemporalKernelSpec::Exponential { .. } => {
            out.push((
                ParamRole::Variance,
                ParamSpec::log_spaced("variance", 1e-4 * v, 1e2 * v, g),
            ));
            out.push((
                ParamRole::Length,
                ParamSpec::log_spaced("length", 0.5, 2e3, g),
            ));
        }
        TemporalKernelSpec::Matern32 { .. } => {
            out.push((
                ParamRole::Variance,
                ParamSpec::log_spaced("variance", 1e-4 * v, 1e2 * v, g),
            ));
            out.push((
                ParamRole::Length,
                ParamSpec::log_spaced("length", 0.5, 2e3, g),
            ));
        }
        TemporalKernelSpec::Te2Exp { .. } => {
            out.push((
                ParamRole::Variance,
                ParamSpec::log_spaced("variance", 1e-4 * v, 1e2 * v, g),
            ));
            out.push((
                ParamRole::Concentration,
                ParamSpec::lin_spaced("concentration", 0.02, 0.98, g),
            ));
        }
        TemporalKernelSpec::Te2ExpMatern { .. } => {
            out.push((
                ParamRole::Variance,
                ParamSpec::log_spaced("variance", 1e-4 * v, 1e2 * v, g),
            ));
            out.push((
                ParamRole::Concentration,
                ParamSpec::lin_spaced("concentration", 0.02, 0.98, g),
            ));
            out.push((
                ParamRole::DriftRatio,
                ParamSpec::log_spaced("drift_ratio", 0.01, 0.1, g.min(3)),
            ));
            out.push((
                ParamRole::DriftLength,
                ParamSpec::log_spaced("drift_length", 0.5, 2e3, g.min(3)),
            ));
        }
        TemporalKernelSpec::PeriodicDecay { .. } => {
            out.push((
                ParamRole::Variance,
                ParamSpec::log_spaced("variance", 1e-4 * v, 1e2 * v, g),
            ));
            out.push((
                ParamRole::Envelope,
                ParamSpec::log_spaced("envelope", 0.5, 2e4, g),
            ));
        }
        TemporalKernelSpec::DcInput { .. } => {
            out.push((
                ParamRole::Variance,
                ParamSpec::log_spaced("variance", 1e-6 * v, 1e3 * v, g),
            ));
            out.push((
                ParamRole::DcDecay,
                ParamSpec::lin_spaced("decay", 1e-4, 0.999, g).with_grid(vec![0.5, 0.8, 0.95]),
            ));
            out.push((
                ParamRole::DcCorrelation,
                ParamSpec::lin_spaced("correlation", -0.999, 0.999, g)
                    .with_grid(vec![0.3, 0.7, 0.95]),
            ));
        }
    }
    if let Some(msd) = median_sqdist {
        let msd = msd.max(1e-12);
        out.push((
            ParamRole::SpatialAlpha,
            ParamSpec::log_spaced("alpha_se", 1e-2 * msd, 1e3 * msd, g),
        ));
    }
    if include_noise {
        out.push((
            ParamRole::Noise,
            ParamSpec::log_spaced("sigma2", 1e-4 * v, 10.0 * v, g),
        ));
    }
    out
}

/// Median squared pairwise distance, the natural scale for the SE box.
pub fn median_squared_distance(locations: &[Vec<f64>]) -> f64 {
    let mut d2: Vec<f64> = Vec::new();
    for i in 0..locations.len() {
        for j in 0..i {
            d2.push(
                locations[i]
                    .iter()
                    .zip(&locations[j])
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum(),
            );
        }
    }
    if d2.is_empty() {
        return 1.0;
    }
    d2.sort_by(|a, b| a.partial_cmp(b).unwrap());
    d2[d2.len() / 2]
}

/// Everything needed to evaluate a cost for one hyper-parameter vector.
pub struct FitProblem<'a> {
    pub method: Method,
    pub template: &'a TemporalKernelSpec,
    /// Location coordinates; `None` runs with `K_s = I` (single-location or
    /// pre-whitened panels).
    pub locations: Option<&'a [Vec<f64>]>,
    pub base_alpha: f64,
    pub fixed_sigma2: Option<f64>,
    pub y: &'a DMatrix<f64>,
    pub ts: f64,
    pub observed: Option<&'a [bool]>,
}

#[derive(Debug, Clone)]
pub struct FitResult {
    pub temporal: TemporalKernelSpec,
    pub alpha_se: Option<f64>,
    pub sigma2: f64,
    pub report: CostReport,
    pub optimize: OptimizeResult,
    pub param_names: Vec<String>,
    /// The fitted free-parameter vector with its boxes and transforms.
    pub hyper_params: crate::kernels::HyperParams,
}

impl<'a> FitProblem<'a> {
    pub fn build_model(
        &self,
        temporal: &TemporalKernelSpec,
        alpha: Option<f64>,
        sigma2: f64,
    ) -> Result<TransformedModel> {
        let real = realize(temporal, self.ts)?;
        let ks = match self.locations {
            Some(locs) => {
                let sp =
                    SpatialKernelSpec::squared_exponential(alpha.unwrap_or(self.base_alpha))?;
                sp.gram(locs)?
            }
            None => DMatrix::identity(self.y.nrows(), self.y.nrows()),
        };
        build_transformed_model(real, &ks, sigma2)
    }

    fn cost_at(&self, roles: &[ParamRole], theta: &[f64]) -> Result<f64> {
        let (temporal, alpha, noise) = apply_params(self.template, roles, theta)?;
        let sigma2 = match (self.method, self.fixed_sigma2, noise) {
            (_, Some(fixed), None) => fixed,
            (_, None, Some(free)) => free,
            (_, Some(_), Some(_)) => {
                return Err(StgpError::Config(
                    "sigma2 is both fixed and a free parameter".into(),
                ))
            }
            (_, None, None) => {
                return Err(StgpError::Config(
                    "sigma2 must be fixed or included as a free parameter".into(),
                ))
            }
        };
        let model = self.build_model(&temporal, alpha, sigma2)?;
        let l = model.transform_outputs(self.y)?;
        match self.method {
            Method::Mlm => Ok(mlm_cost_masked(&model, &l, self.observed)?.value),
            Method::Gcv => Ok(gcv_sure_costs_masked(&model, &l, self.observed)?.0.value),
            Method::Sure => Ok(gcv_sure_costs_masked(&model, &l, self.observed)?.1.value),
        }
    }

    /// Grid + multi-start search over the given free parameters.
    pub fn fit(
        &self,
        params: &[(ParamRole, ParamSpec)],
        opts: &OptimizeOptions,
    ) -> Result<FitResult> {
        if self.method != Method::Mlm && self.fixed_sigma2.is_none() {
            return Err(StgpError::Config(
                "GCV/SURE need sigma2 supplied externally (run MLM first or pass --sigma2)"
                    .into(),
            ));
        }
        let roles: Vec<ParamRole> = params.iter().map(|(r, _)| *r).collect();
        let specs: Vec<ParamSpec> = params.iter().map(|(_, s)| s.clone()).collect();
        let result = optimize(
            |theta: &[f64]| self.cost_at(&roles, theta),
            &specs,
            opts,
        )?;
        let (temporal, alpha, noise) = apply_params(self.template, &roles, &result.best_params)?;
        let sigma2 = self
            .fixed_sigma2
            .or(noise)
            .expect("sigma2 handling validated above");
        let model = self.build_model(&temporal, alpha, sigma2)?;
        let l = model.transform_outputs(self.y)?;
        let report = match self.method {
            Method::Mlm => mlm_cost_masked(&model, &l, self.observed)?,
            Method::Gcv => gcv_sure_costs_masked(&model, &l, self.observed)?.0,
            Method::Sure => gcv_sure_costs_masked(&model, &l, self.observed)?.1,
        };
        let hyper_params = crate::kernels::HyperParams::new(
            result.best_params.clone(),
            specs.iter().map(|s| (s.lo, s.hi)).collect(),
            specs.iter().map(|s| s.transform).collect(),
        )?;
        Ok(FitResult {
            temporal,
            alpha_se: alpha.or(self.locations.map(|_| self.base_alpha)),
            sigma2,
            report,
            optimize: result,
            param_names: specs.iter().map(|s| s.name.clone()).collect(),
            hyper_params,
        })
    }
}
