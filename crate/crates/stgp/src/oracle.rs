//! Dense brute-force reference implementation.
//!
//! Builds `Sigma = K_t (x) K_s + sigma^2 I` explicitly and computes every
//! quantity by direct linear algebra. This is the test-time authority the
//! structured implementation is checked against; it is guarded to small
//! instances because its cost is cubic in `N M`.

use nalgebra::{Cholesky, DMatrix, DVector};

use crate::error::{Result, StgpError};

/// Hard guard on `N * M` for all dense computations. The whole point of the
/// structured path is that this blows up; callers that really want a big
/// dense solve can use [`DenseProblem::new_unchecked`].
pub const DENSE_SIZE_GUARD: usize = 2000;

/// A fully materialized GP regression problem on the training grid.
/// `y` stacks the per-time location vectors: index `(j, i)` maps to
/// `j * m + i`.
#[derive(Debug, Clone)]
pub struct DenseProblem {
    pub kt: DMatrix<f64>,
    pub ks: DMatrix<f64>,
    pub sigma2: f64,
    pub y: DVector<f64>,
}

#[derive(Debug, Clone, Copy)]
pub struct DenseMlm {
    pub logdet: f64,
    pub quad: f64,
    pub cost: f64,
}

#[derive(Debug, Clone)]
pub struct DenseDeltaS {
    pub delta: f64,
    pub s: f64,
    pub yhat: DVector<f64>,
}

#[derive(Debug, Clone)]
pub struct DensePosterior {
    /// Posterior/predictive means, `m x (n_train + n_test)`.
    pub mean: DMatrix<f64>,
    /// Marginal posterior variances of the noise-free field, same shape.
    pub var: DMatrix<f64>,
}

/// `a (x) b` with the row-major block convention matching the stacking of
/// `y`: entry `((j, i), (j', i'))` equals `a[j, j'] * b[i, i']`.
pub fn kron(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    a.kronecker(b)
}

impl DenseProblem {
    pub fn new(kt: DMatrix<f64>, ks: DMatrix<f64>, sigma2: f64, y: DVector<f64>) -> Result<Self> {
        let n = kt.nrows();
        let m = ks.nrows();
        if n * m > DENSE_SIZE_GUARD {
            return Err(StgpError::Input(format!(
                "dense problem size N*M = {} exceeds the guard {DENSE_SIZE_GUARD}",
                n * m
            )));
        }
        Self::new_unchecked(kt, ks, sigma2, y)
    }

    /// Same as [`DenseProblem::new`] without the size guard.
    pub fn new_unchecked(
        kt: DMatrix<f64>,
        ks: DMatrix<f64>,
        sigma2: f64,
        y: DVector<f64>,
    ) -> Result<Self> {
        if !kt.is_square() || !ks.is_square() {
            return Err(StgpError::Input("K_t and K_s must be square".into()));
        }
        if y.len() != kt.nrows() * ks.nrows() {
            return Err(StgpError::Input(format!(
                "y has {} entries, expected N*M = {}",
                y.len(),
                kt.nrows() * ks.nrows()
            )));
        }
        if sigma2 < 0.0 || !sigma2.is_finite() {
            return Err(StgpError::Input(format!(
                "sigma2 must be a finite nonnegative real, got {sigma2}"
            )));
        }
        Ok(Self { kt, ks, sigma2, y })
    }

    pub fn n(&self) -> usize {
        self.kt.nrows()
    }

    pub fn m(&self) -> usize {
        self.ks.nrows()
    }

    /// `K_t (x) K_s + sigma^2 I`.
    pub fn sigma_matrix(&self) -> DMatrix<f64> {
        let nm = self.n() * self.m();
        kron(&self.kt, &self.ks) + DMatrix::identity(nm, nm) * self.sigma2
    }

    fn cholesky(&self) -> Result<Cholesky<f64, nalgebra::Dyn>> {
        Cholesky::new(self.sigma_matrix()).ok_or_else(|| {
            StgpError::DenseFactorization(
                "Sigma(alpha) is not positive definite".into(),
            )
        })
    }

    /// Log determinant, quadratic form and the full negative log marginal
    /// likelihood `NM/2 log(2 pi) + logdet/2 + quad/2`.
    pub fn mlm(&self) -> Result<DenseMlm> {
        let chol = self.cholesky()?;
        let logdet = 2.0 * chol.l().diagonal().iter().map(|d| d.ln()).sum::<f64>();
        let alpha = chol.solve(&self.y);
        let quad = self.y.dot(&alpha);
        let nm = (self.n() * self.m()) as f64;
        let cost = 0.5 * (nm * (2.0 * std::f64::consts::PI).ln() + logdet + quad);
        Ok(DenseMlm { logdet, quad, cost })
    }

    /// Effective degrees of freedom `delta = trace[(K_t (x) K_s) Sigma^-1]`,
    /// residual energy `S = ||Yhat - Y||^2` and the smoother output
    /// `Yhat = (K_t (x) K_s) Sigma^-1 Y`.
    pub fn delta_s(&self) -> Result<DenseDeltaS> {
        let chol = self.cholesky()?;
        let k = kron(&self.kt, &self.ks);
        let sinv_k = chol.solve(&k);
        let delta = sinv_k.trace();
        let yhat = &k * chol.solve(&self.y);
        let s = (&yhat - &self.y).norm_squared();
        Ok(DenseDeltaS { delta, s, yhat })
    }

    /// Posterior means and marginal variances of the noise-free field over
    /// the full grid described by `kt_all` (training times first, then test
    /// times). `self.kt` must equal the leading `n x n` block of `kt_all`.
    pub fn posterior(&self, kt_all: &DMatrix<f64>) -> Result<DensePosterior> {
        let n = self.n();
        let m = self.m();
        let total = kt_all.nrows();
        if total < n {
            return Err(StgpError::Input(
                "kt_all must cover at least the training times".into(),
            ));
        }
        if (kt_all.view((0, 0), (n, n)) - &self.kt).norm() > 1e-12 * self.kt.norm().max(1.0) {
            return Err(StgpError::Input(
                "leading block of kt_all differs from the training K_t".into(),
            ));
        }
        let chol = self.cholesky()?;
        let alpha = chol.solve(&self.y);
        let mut mean = DMatrix::zeros(m, total);
        let mut var = DMatrix::zeros(m, total);
        // cross-covariance of chi_j with the training stack is
        // kt_all[j, 0..n] (x) K_s
        let kt_train = kt_all.view((0, 0), (total, n)).into_owned();
        for j in 0..total {
            let row = DMatrix::from_fn(1, n, |_, c| kt_train[(j, c)]);
            let cross = kron(&row, &self.ks); // m x nm
            let mu = &cross * &alpha;
            mean.column_mut(j).copy_from(&mu);
            let solved = chol.solve(&cross.transpose()); // nm x m
            let prior = kt_all[(j, j)];
            for i in 0..m {
                let reduction = cross.row(i).transpose().dot(&solved.column(i).into_owned());
                var[(i, j)] = prior * self.ks[(i, i)] - reduction;
            }
        }
        Ok(DensePosterior { mean, var })
    }
}

/// Worst-case relative errors between the structured path and the dense
/// reference over a batch of random instances. Mean errors are measured
/// against `max(|expected|, 1e-6 * field scale)` so zero crossings do not
/// blow up the ratio.
#[derive(Debug, Clone, Default, serde::Serialize)]
pub struct EquivalenceReport {
    pub instances: usize,
    pub max_rel_logdet: f64,
    pub max_rel_quad: f64,
    pub max_rel_cost: f64,
    pub max_rel_delta: f64,
    pub max_rel_s: f64,
    pub max_rel_smoothed_mean: f64,
    pub max_rel_predicted_mean: f64,
    pub max_rel_variance: f64,
}

impl EquivalenceReport {
    /// Checks the acceptance tolerances: 1e-8 for the scalar cost terms,
    /// 1e-6 for everything else.
    pub fn within_tolerances(&self) -> bool {
        self.max_rel_logdet <= 1e-8
            && self.max_rel_quad <= 1e-8
            && self.max_rel_cost <= 1e-8
            && self.max_rel_delta <= 1e-6
            && self.max_rel_s <= 1e-6
            && self.max_rel_smoothed_mean <= 1e-6
            && self.max_rel_predicted_mean <= 1e-6
            && self.max_rel_variance <= 1e-6
    }
}

/// Runs the randomized structured-vs-dense equivalence suite.
pub fn equivalence_report(
    n_instances: usize,
    max_n: usize,
    max_m: usize,
    base_seed: u64,
) -> Result<EquivalenceReport> {
    use crate::hyper::{gcv_sure_costs, mlm_cost};
    use crate::kalman::{filter_pass, predictor_pass, smoother_pass};

    let mut report = EquivalenceReport {
        instances: n_instances,
        ..EquivalenceReport::default()
    };
    for k in 0..n_instances {
        let inst = crate::synth::random_instance(base_seed + k as u64, max_n, max_m)?;
        let l = inst.model.transform_outputs(&inst.y)?;

        let got = mlm_cost(&inst.model, &l)?;
        let want = inst.dense.mlm()?;
        let rel = |a: f64, b: f64| (a - b).abs() / (1.0 + b.abs());
        report.max_rel_logdet = report.max_rel_logdet.max(rel(got.logdet, want.logdet));
        report.max_rel_quad = report.max_rel_quad.max(rel(got.quad, want.quad));
        report.max_rel_cost = report.max_rel_cost.max(rel(got.value, want.cost));

        let (gcv, _) = gcv_sure_costs(&inst.model, &l)?;
        let want_ds = inst.dense.delta_s()?;
        report.max_rel_delta = report
            .max_rel_delta
            .max(rel(gcv.delta.unwrap(), want_ds.delta));
        report.max_rel_s = report.max_rel_s.max(rel(gcv.s.unwrap(), want_ds.s));

        let filt = filter_pass(&inst.model, &l, None)?;
        let smoothed = smoother_pass(&inst.model, &filt)?;
        let pred = predictor_pass(&inst.model, &smoothed, inst.n_test)?;
        let dense = inst.dense.posterior(&inst.kt_all)?;
        let n = inst.dense.n();
        let m = inst.dense.m();
        let scale = dense
            .mean
            .iter()
            .map(|v| v.abs())
            .fold(1.0f64, f64::max);
        let mrel = |a: f64, b: f64| (a - b).abs() / b.abs().max(1e-6 * scale);
        for j in 0..n {
            for i in 0..m {
                report.max_rel_smoothed_mean = report
                    .max_rel_smoothed_mean
                    .max(mrel(smoothed.fhat[(i, j)], dense.mean[(i, j)]));
                report.max_rel_variance = report.max_rel_variance.max(
                    (smoothed.field_var[(i, j)] - dense.var[(i, j)]).abs()
                        / dense.var[(i, j)].abs().max(1e-10),
                );
            }
        }
        for kk in 0..inst.n_test {
            for i in 0..m {
                report.max_rel_predicted_mean = report
                    .max_rel_predicted_mean
                    .max(mrel(pred.fhat[(i, kk)], dense.mean[(i, n + kk)]));
                report.max_rel_variance = report.max_rel_variance.max(
                    (pred.field_var[(i, kk)] - dense.var[(i, n + kk)]).abs()
                        / dense.var[(i, n + kk)].abs().max(1e-10),
                );
            }
        }
    }
    Ok(report)
}
