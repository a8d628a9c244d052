//! Discrete-time state-space realization of temporal kernels.
//!
//! Every stationary family is realized by analytic spectral factorization of
//! its sampled power spectral density: the PSD of a geometric/damped-cosine
//! kernel is a ratio of symmetric Laurent polynomials, whose stable,
//! minimum-phase factor is found in closed form. This avoids any
//! discretization of a continuous-time model. The resulting triple
//! `(F, G, H)` reproduces the kernel exactly at integer lags:
//! `H F^tau Sigma0 H^T = k(tau * Ts)` with `Sigma0` the stationary state
//! covariance from the discrete Lyapunov equation.
//!
//! The DC-input family is realized as a time-varying model with an explicit
//! initial covariance instead of a stationary one.

use nalgebra::{DMatrix, RowDVector};

use crate::error::{Result, StgpError};
use crate::kernels::{InputSignal, TemporalKernelSpec};

/// Input matrix of the state equation: constant for stationary kernels, or a
/// decaying column for the DC family (`g_j = [sqrt(variance * decay^j), 0, 0]^T`).
#[derive(Debug, Clone, PartialEq)]
pub enum ProcessNoise {
    Constant { g: DMatrix<f64>, q: DMatrix<f64> },
    DcDecaying { variance: f64, decay: f64 },
}

/// A discrete-time state-space realization `(F, G(.), H)` of a zero-mean
/// Gaussian process, plus the prior state covariance at the first
/// measurement instant.
#[derive(Debug, Clone, PartialEq)]
pub struct Realization {
    f: DMatrix<f64>,
    h: RowDVector<f64>,
    noise: ProcessNoise,
    init_cov: DMatrix<f64>,
    stationary: bool,
}

impl Realization {
    pub fn state_dim(&self) -> usize {
        self.f.nrows()
    }

    pub fn f_matrix(&self) -> &DMatrix<f64> {
        &self.f
    }

    pub fn h_row(&self) -> &RowDVector<f64> {
        &self.h
    }

    pub fn init_cov(&self) -> &DMatrix<f64> {
        &self.init_cov
    }

    pub fn is_stationary(&self) -> bool {
        self.stationary
    }

    /// Input matrix at step `j` (1-based filter step).
    pub fn g_at(&self, j: usize) -> DMatrix<f64> {
        match &self.noise {
            ProcessNoise::Constant { g, .. } => g.clone(),
            ProcessNoise::DcDecaying { variance, decay } => {
                let mut g = DMatrix::zeros(self.state_dim(), 1);
                g[(0, 0)] = (variance * decay.powi(j as i32)).sqrt();
                g
            }
        }
    }

    /// Adds `Q_j = G_j G_j^T` in place; `j` is the step being left.
    pub fn add_process_noise(&self, j: usize, p: &mut DMatrix<f64>) {
        match &self.noise {
            ProcessNoise::Constant { q, .. } => *p += q,
            ProcessNoise::DcDecaying { variance, decay } => {
                p[(0, 0)] += variance * decay.powi(j as i32);
            }
        }
    }

    pub fn spectral_radius(&self) -> f64 {
        self.f
            .complex_eigenvalues()
            .iter()
            .map(|z| z.norm())
            .fold(0.0, f64::max)
    }

    /// Realized covariance sequence `H F^tau Sigma0 H^T` for
    /// `tau = 0..=max_lag`. Only meaningful for stationary realizations.
    pub fn cov_sequence(&self, max_lag: usize) -> Vec<f64> {
        let mut v = &self.init_cov * self.h.transpose();
        let mut out = Vec::with_capacity(max_lag + 1);
        out.push((&self.h * &v)[0]);
        for _ in 0..max_lag {
            v = &self.f * v;
            out.push((&self.h * &v)[0]);
        }
        out
    }

    /// Dense covariance grid `E[z_j z_j']` of the realized output over steps
    /// `1..=n`, by exact forward moment propagation. Works for both the
    /// stationary and the time-varying case; used by oracles and tests.
    pub fn output_covariance_grid(&self, n: usize) -> DMatrix<f64> {
        let mut k = DMatrix::zeros(n, n);
        let mut p = self.init_cov.clone();
        for j in 0..n {
            let mut u = &p * self.h.transpose();
            k[(j, j)] = (&self.h * &u)[0];
            for j2 in (j + 1)..n {
                u = &self.f * u;
                let v = (&self.h * &u)[0];
                k[(j, j2)] = v;
                k[(j2, j)] = v;
            }
            // leave step j+1 (1-based)
            p = &self.f * &p * self.f.transpose();
            self.add_process_noise(j + 1, &mut p);
        }
        k
    }

    fn assert_stable(&self) -> Result<()> {
        let rho = self.spectral_radius();
        if rho >= 1.0 - 1e-12 {
            return Err(StgpError::Instability { rho });
        }
        Ok(())
    }
}

/// `sum_k F^k Q (F^T)^k` by doubling: `S <- S + A S A^T`, `A <- A^2`
/// converges quadratically for a stable `F`.
fn doubling_sum(f: &DMatrix<f64>, q: &DMatrix<f64>) -> DMatrix<f64> {
    let mut s = q.clone();
    let mut a = f.clone();
    for _ in 0..128 {
        let increment = &a * &s * a.transpose();
        s += &increment;
        if increment.norm() <= 1e-18 * s.norm().max(f64::MIN_POSITIVE) {
            break;
        }
        a = &a * &a;
        if a.norm() < 1e-160 {
            break;
        }
    }
    (&s + s.transpose()) * 0.5
}

/// Solves `Sigma = F Sigma F^T + G G^T` for a stable `F` by doubling plus
/// iterative refinement (the Jordan transient of near-unit double poles
/// amplifies roundoff in the plain doubling sum). The residual is checked
/// against 1e-12 relative before returning.
pub fn lyapunov_solve(f: &DMatrix<f64>, g: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let rho = f
        .complex_eigenvalues()
        .iter()
        .map(|z| z.norm())
        .fold(0.0, f64::max);
    if rho >= 1.0 {
        return Err(StgpError::Instability { rho });
    }
    let q0 = g * g.transpose();
    let mut sigma = doubling_sum(f, &q0);
    for _ in 0..3 {
        let residual = &q0 + f * &sigma * f.transpose() - &sigma;
        if residual.norm() <= 1e-14 * sigma.norm().max(1.0) {
            break;
        }
        sigma += doubling_sum(f, &((&residual + residual.transpose()) * 0.5));
    }
    let sigma = (&sigma + sigma.transpose()) * 0.5;
    let residual = (&sigma - f * &sigma * f.transpose() - &q0).norm();
    let scale = sigma.norm().max(1.0);
    if residual > 1e-12 * scale {
        return Err(StgpError::DenseFactorization(format!(
            "Lyapunov residual {residual:.3e} exceeds 1e-12 relative (scale {scale:.3e})"
        )));
    }
    Ok(sigma)
}

/// Realizes `k(tau) = c * exp(-beta * tau)` (per-sample decay `beta`):
/// `F = exp(-beta)`, `G = 1`, `H = sqrt(c (1 - exp(-2 beta)))`.
pub fn realize_exponential(c: f64, beta: f64) -> Result<Realization> {
    if !(c > 0.0) && c != 0.0 {
        return Err(StgpError::Config(format!("variance must be >= 0, got {c}")));
    }
    if !(beta > 0.0) || !beta.is_finite() {
        return Err(StgpError::Config(format!(
            "decay must be a positive finite real, got {beta}"
        )));
    }
    let phi = (-beta).exp();
    let f = DMatrix::from_element(1, 1, phi);
    let g = DMatrix::from_element(1, 1, 1.0);
    let h = RowDVector::from_element(1, (c * (-(-2.0 * beta).exp_m1())).sqrt());
    let init_cov = lyapunov_solve(&f, &g)?;
    let real = Realization {
        f,
        h,
        noise: ProcessNoise::Constant {
            q: &g * g.transpose(),
            g,
        },
        init_cov,
        stationary: true,
    };
    real.assert_stable()?;
    Ok(real)
}

/// Selects the numerator coefficients `(n1, n2)` of a first-order spectral
/// factor from the moment equations `n1^2 + n2^2 = c0`, `n1 n2 = c1`, i.e.
/// the roots of `x^2 - c0 x + c1^2 = 0` in `x = n1^2`. Both sign-consistent
/// candidates are formed and the one whose zero `-n2/n1` lies strictly
/// inside the unit circle is kept (ties broken by the smaller modulus).
fn factor_order2_numerator(c0: f64, c1: f64, disc: f64) -> Result<(f64, f64)> {
    if c0 <= 0.0 {
        return Err(StgpError::Factorization(format!(
            "numerator moment c0 = {c0} is not positive"
        )));
    }
    let disc = if disc < 0.0 {
        if disc < -1e-10 * c0 * c0 {
            return Err(StgpError::Factorization(format!(
                "negative discriminant {disc}"
            )));
        }
        0.0
    } else {
        disc
    };
    let s = disc.sqrt();
    let mut best: Option<(f64, f64, f64)> = None;
    for root in [(c0 + s) / 2.0, (c0 - s) / 2.0] {
        if root <= 0.0 {
            continue;
        }
        let n1 = root.sqrt();
        let n2 = c1 / n1;
        let zero_modulus = (n2 / n1).abs();
        if zero_modulus < 1.0 + 1e-12 {
            match best {
                Some((_, _, z)) if z <= zero_modulus => {}
                _ => best = Some((n1, n2, zero_modulus)),
            }
        }
    }
    best.map(|(n1, n2, _)| (n1, n2)).ok_or_else(|| {
        StgpError::Factorization(
            "no stable minimum-phase numerator factor exists".into(),
        )
    })
}

fn canonical_order2(
    d1: f64,
    d2: f64,
    amplitude: f64,
    n1: f64,
    n2: f64,
) -> Result<Realization> {
    let f = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, d1, d2]);
    let g = DMatrix::from_column_slice(2, 1, &[0.0, 1.0]);
    let scale = amplitude.sqrt();
    let h = RowDVector::from_row_slice(&[scale * n2, scale * n1]);
    let init_cov = lyapunov_solve(&f, &g)?;
    let real = Realization {
        f,
        h,
        noise: ProcessNoise::Constant {
            q: &g * g.transpose(),
            g,
        },
        init_cov,
        stationary: true,
    };
    real.assert_stable()?;
    Ok(real)
}

/// Realizes `k(tau) = amplitude * cos(varrho * tau) * exp(-beta * tau)`
/// (per-sample angular frequency and decay) as a 2-state model in
/// controllable canonical form. The sampled PSD is
/// `amplitude * (c0 + c1 (z + 1/z)) / (A(z) A(1/z))` with
/// `A(z) = 1 - 2 phi cos(varrho) z^-1 + phi^2 z^-2`, `phi = exp(-beta)`,
/// `c0 = 1 - phi^4`, `c1 = -phi (1 - phi^2) cos(varrho)`; the numerator is
/// factored through the quartic `n1^4 - c0 n1^2 + c1^2 = 0`.
pub fn realize_cosine_exponential(amplitude: f64, varrho: f64, beta: f64) -> Result<Realization> {
    if amplitude < 0.0 || !amplitude.is_finite() {
        return Err(StgpError::Config(format!(
            "amplitude must be >= 0, got {amplitude}"
        )));
    }
    if !(beta > 0.0) || !beta.is_finite() || !varrho.is_finite() {
        return Err(StgpError::Config(format!(
            "need finite varrho and positive finite beta, got ({varrho}, {beta})"
        )));
    }
    let phi = (-beta).exp();
    let cosr = varrho.cos();
    let one_minus_phi2 = -(-2.0 * beta).exp_m1();
    let c0 = -(-4.0 * beta).exp_m1();
    let c1 = -phi * one_minus_phi2 * cosr;
    // disc = c0^2 - 4 c1^2 = (1-phi^2)^2 [(1+phi^2)^2 - 4 phi^2 cos^2],
    // expanded into cancellation-free factors.
    let one_minus_abscos = if cosr >= 0.0 {
        2.0 * (0.5 * varrho).sin().powi(2)
    } else {
        2.0 * (0.5 * varrho).cos().powi(2)
    };
    let lo = (1.0 - phi) * (1.0 - phi) + 2.0 * phi * one_minus_abscos;
    let hi = (1.0 + phi) * (1.0 + phi) - 2.0 * phi * one_minus_abscos;
    let disc = one_minus_phi2 * one_minus_phi2 * lo * hi;
    let (n1, n2) = if amplitude == 0.0 {
        (0.0, 0.0)
    } else {
        factor_order2_numerator(c0, c1, disc)?
    };
    let d1 = -phi * phi;
    let d2 = 2.0 * phi * cosr;
    canonical_order2(d1, d2, amplitude, n1, n2)
}

/// Moments `(c0, c1)` of the sampled Matern-3/2 PSD numerator over the
/// double-pole denominator `(1 - phi z^-1)^2`, `phi = exp(-mu)`:
/// `c0 = (1 - phi^4) - 4 mu phi^2`, `c1 = phi (mu (1 + phi^2) - (1 - phi^2))`.
/// Both are `O(mu^3)` differences of `O(mu)` terms, so a series is used for
/// small `mu`.
fn matern_psd_moments(mu: f64) -> (f64, f64) {
    let phi = (-mu).exp();
    if mu < 2e-3 {
        let c0 = mu.powi(3)
            * (8.0 / 3.0 + mu * (-16.0 / 3.0 + mu * (88.0 / 15.0 - mu * 208.0 / 45.0)));
        let inner = mu.powi(3)
            * (2.0 / 3.0 + mu * (-2.0 / 3.0 + mu * (0.4 - mu * 8.0 / 45.0)));
        (c0, phi * inner)
    } else {
        let c0 = -(-4.0 * mu).exp_m1() - 4.0 * mu * phi * phi;
        let inner = mu * (1.0 + phi * phi) + (-2.0 * mu).exp_m1();
        (c0, phi * inner)
    }
}

/// Realizes the sampled Matern-3/2 kernel
/// `h (1 + sqrt(3)|tau|/theta) exp(-sqrt(3)|tau|/theta)` exactly at integer
/// lags as a 2-state model with a double pole at `exp(-sqrt(3) Ts / theta)`.
pub fn realize_matern32(h: f64, theta: f64, ts: f64) -> Result<Realization> {
    if !(h > 0.0) || !(theta > 0.0) || !(ts > 0.0) {
        return Err(StgpError::Config(format!(
            "need h, theta, Ts > 0, got ({h}, {theta}, {ts})"
        )));
    }
    let mu = 3.0f64.sqrt() * ts / theta;
    let phi = (-mu).exp();
    let (c0, c1) = matern_psd_moments(mu);
    let disc = c0 * c0 - 4.0 * c1 * c1;
    let (n1, n2) = factor_order2_numerator(c0, c1, disc)?;
    canonical_order2(-phi * phi, 2.0 * phi, h, n1, n2)
}

/// Stacks independent stationary sub-realizations block-diagonally; the
/// output is the sum of the block outputs, so the covariances add.
pub fn stack_realizations(parts: Vec<Realization>) -> Result<Realization> {
    stack(parts)
}

fn stack(parts: Vec<Realization>) -> Result<Realization> {
    let r: usize = parts.iter().map(|p| p.state_dim()).sum();
    let m: usize = parts
        .iter()
        .map(|p| match &p.noise {
            ProcessNoise::Constant { g, .. } => g.ncols(),
            ProcessNoise::DcDecaying { .. } => 1,
        })
        .sum();
    let mut f = DMatrix::zeros(r, r);
    let mut g = DMatrix::zeros(r, m);
    let mut h = RowDVector::zeros(r);
    let mut init_cov = DMatrix::zeros(r, r);
    let mut row = 0;
    let mut col = 0;
    for part in &parts {
        let pr = part.state_dim();
        let pg = part.g_at(1);
        f.view_mut((row, row), (pr, pr)).copy_from(&part.f);
        g.view_mut((row, col), (pr, pg.ncols())).copy_from(&pg);
        h.view_mut((0, row), (1, pr)).copy_from(&part.h);
        init_cov
            .view_mut((row, row), (pr, pr))
            .copy_from(&part.init_cov);
        if !matches!(part.noise, ProcessNoise::Constant { .. }) {
            return Err(StgpError::Config(
                "only stationary sub-realizations can be stacked".into(),
            ));
        }
        row += pr;
        col += pg.ncols();
    }
    let real = Realization {
        f,
        h,
        noise: ProcessNoise::Constant {
            q: &g * g.transpose(),
            g,
        },
        init_cov,
        stationary: true,
    };
    real.assert_stable()?;
    Ok(real)
}

/// Realizes the DC kernel prior convolved with the input signal as a
/// time-varying 3-state model per location: state 1 carries the decaying
/// FIR-coefficient process, states 2..3 run the input convolution.
pub fn realize_dc_input(
    variance: f64,
    decay: f64,
    correlation: f64,
    input: &InputSignal,
    ts: f64,
) -> Result<Realization> {
    if !(variance > 0.0) || !(0.0..1.0).contains(&decay) || correlation.abs() > 1.0 {
        return Err(StgpError::Config(format!(
            "need variance > 0, decay in [0,1), |correlation| <= 1, got ({variance}, {decay}, {correlation})"
        )));
    }
    if !(ts > 0.0) {
        return Err(StgpError::Config(format!("Ts must be > 0, got {ts}")));
    }
    let lam = decay.powf(ts);
    let mut rho = correlation.signum() * correlation.abs().powf(ts);
    // keep (1 - rho^2) away from zero so the initial covariance stays finite
    if rho.abs() > 1.0 - 1e-9 {
        rho = rho.signum() * (1.0 - 1e-9);
    }
    let a = input.damping * ts;
    let w = input.angular_freq * ts;
    let e11 = 2.0 * (-a).exp() * w.cos();
    let e12 = -(-2.0 * a).exp();
    let hin = (-a).exp() * w.sin();
    let f = DMatrix::from_row_slice(
        3,
        3,
        &[
            lam.sqrt() * rho,
            0.0,
            0.0,
            (1.0 - rho * rho).sqrt(),
            e11,
            e12,
            0.0,
            1.0,
            0.0,
        ],
    );
    let h = RowDVector::from_row_slice(&[0.0, hin, 0.0]);
    let mut init_cov = DMatrix::zeros(3, 3);
    init_cov[(0, 0)] = variance / (1.0 - rho * rho);
    let real = Realization {
        f,
        h,
        noise: ProcessNoise::DcDecaying {
            variance,
            decay: lam,
        },
        init_cov,
        stationary: false,
    };
    real.assert_stable()?;
    Ok(real)
}

/// Realizes a temporal kernel spec at sampling interval `ts`: per-family
/// closed-form factorization, block-diagonal stacking for composite kernels.
pub fn realize(spec: &TemporalKernelSpec, ts: f64) -> Result<Realization> {
    if !(ts > 0.0) || !ts.is_finite() {
        return Err(StgpError::Config(format!(
            "sampling interval must be a positive finite real, got {ts}"
        )));
    }
    match *spec {
        TemporalKernelSpec::Exponential { variance, length } => {
            finite_envelope(length)?;
            realize_exponential(variance, ts / length)
        }
        TemporalKernelSpec::Matern32 { variance, length } => {
            realize_matern32(variance, length, ts)
        }
        TemporalKernelSpec::Te2Exp {
            variance,
            concentration,
            frequency,
            envelope,
        } => {
            finite_envelope(envelope)?;
            stack(te2_parts(variance, concentration, frequency, envelope, ts)?)
        }
        TemporalKernelSpec::Te2ExpMatern {
            variance,
            concentration,
            drift_variance,
            drift_length,
            frequency,
            envelope,
        } => {
            finite_envelope(envelope)?;
            let mut parts = te2_parts(variance, concentration, frequency, envelope, ts)?;
            parts.push(realize_matern32(drift_variance, drift_length, ts)?);
            stack(parts)
        }
        TemporalKernelSpec::PeriodicDecay {
            variance,
            frequency,
            envelope,
        } => {
            finite_envelope(envelope)?;
            realize_cosine_exponential(
                variance,
                2.0 * std::f64::consts::PI * frequency * ts,
                ts / envelope,
            )
        }
        TemporalKernelSpec::DcInput {
            variance,
            decay,
            correlation,
            ref input,
        } => realize_dc_input(variance, decay, correlation, input, ts),
    }
}

fn finite_envelope(envelope: f64) -> Result<()> {
    if envelope.is_finite() {
        Ok(())
    } else {
        Err(StgpError::Config(
            "an infinite envelope has no rational spectrum; use a finite value".into(),
        ))
    }
}

/// The three additive parts of the TE2 x exponential kernel: an exponential
/// block and two damped-cosine blocks at once and twice the base frequency.
fn te2_parts(
    variance: f64,
    c: f64,
    frequency: f64,
    envelope: f64,
    ts: f64,
) -> Result<Vec<Realization>> {
    let beta = ts / envelope;
    let varrho = 2.0 * std::f64::consts::PI * frequency * ts;
    Ok(vec![
        realize_exponential(variance * (1.0 - c + 0.75 * c * c), beta)?,
        realize_cosine_exponential(variance * (c - c * c), varrho, beta)?,
        realize_cosine_exponential(variance * 0.25 * c * c, 2.0 * varrho, beta)?,
    ])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernels::TemporalKernelSpec as Spec;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Error relative to the kernel scale: zero crossings of the cosine
    /// families make a pure relative error unattainable, so the denominator
    /// is floored at 1e-6 * k(0).
    fn scaled_rel_err(got: f64, expected: f64, k0: f64) -> f64 {
        (got - expected).abs() / expected.abs().max(1e-6 * k0.abs())
    }

    fn vec_lyapunov_oracle(f: &DMatrix<f64>, g: &DMatrix<f64>) -> DMatrix<f64> {
        // (I - F kron F) vec(Sigma) = vec(G G^T)
        let r = f.nrows();
        let kron = f.kronecker(f);
        let lhs = DMatrix::identity(r * r, r * r) - kron;
        let q = g * g.transpose();
        let rhs = DMatrix::from_column_slice(r * r, 1, q.as_slice());
        let sol = lhs.lu().solve(&rhs).unwrap();
        DMatrix::from_column_slice(r, r, sol.as_slice())
    }

    #[test]
    fn lyapunov_scalar_cases() {
        let f = DMatrix::from_element(1, 1, 0.0);
        let g = DMatrix::from_element(1, 1, 1.0);
        assert!((lyapunov_solve(&f, &g).unwrap()[(0, 0)] - 1.0).abs() < 1e-15);

        let f = DMatrix::from_element(1, 1, 0.5);
        let s = lyapunov_solve(&f, &g).unwrap();
        assert!((s[(0, 0)] - 4.0 / 3.0).abs() < 1e-14);
    }

    #[test]
    fn lyapunov_matches_vectorized_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            // random stable 3x3: scale a random matrix below unit spectral radius
            let mut f = DMatrix::from_fn(3, 3, |_, _| rng.gen_range(-1.0..1.0));
            let rho = f
                .complex_eigenvalues()
                .iter()
                .map(|z| z.norm())
                .fold(0.0, f64::max);
            f *= rng.gen_range(0.2..0.95) / rho.max(1e-6);
            let g = DMatrix::from_fn(3, 2, |_, _| rng.gen_range(-1.0..1.0));
            let s = lyapunov_solve(&f, &g).unwrap();
            let oracle = vec_lyapunov_oracle(&f, &g);
            let err = (&s - &oracle).norm() / oracle.norm().max(1.0);
            assert!(err < 1e-10, "doubling vs vectorized solve differ: {err}");
        }
    }

    #[test]
    fn lyapunov_rejects_unstable() {
        let f = DMatrix::from_element(1, 1, 1.0);
        let g = DMatrix::from_element(1, 1, 1.0);
        assert!(matches!(
            lyapunov_solve(&f, &g),
            Err(StgpError::Instability { .. })
        ));
    }

    #[test]
    fn exponential_realization_values() {
        let beta = 2.0f64.ln();
        let real = realize_exponential(1.0, beta).unwrap();
        assert!((real.f_matrix()[(0, 0)] - 0.5).abs() < 1e-15);
        assert!((real.h_row()[0] - 0.75f64.sqrt()).abs() < 1e-15);
        assert!((real.init_cov()[(0, 0)] - 4.0 / 3.0).abs() < 1e-14);
        let seq = real.cov_sequence(10);
        for (tau, v) in seq.iter().enumerate() {
            let expected = (-beta * tau as f64).exp();
            assert!((v - expected).abs() < 1e-12, "lag {tau}: {v} vs {expected}");
        }
        assert!((seq[1] - 0.5).abs() < 1e-13);
    }

    #[test]
    fn exponential_white_noise_limit() {
        let real = realize_exponential(2.0, 40.0).unwrap();
        assert!((real.h_row()[0] - 2.0f64.sqrt()).abs() < 1e-12);
        assert!((real.init_cov()[(0, 0)] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn cosine_exponential_sweep() {
        let varrho = std::f64::consts::PI / 6.0;
        let real = realize_cosine_exponential(1.0, varrho, 0.1).unwrap();
        let seq = real.cov_sequence(24);
        for (tau, v) in seq.iter().enumerate() {
            let t = tau as f64;
            let expected = (varrho * t).cos() * (-0.1 * t).exp();
            assert!(
                (v - expected).abs() < 1e-8,
                "lag {tau}: {v} vs {expected}"
            );
        }
        assert!((seq[0] - 1.0).abs() < 1e-12, "k(0) must equal the amplitude");
    }

    #[test]
    fn cosine_discriminant_nonnegative_over_grid() {
        for bi in 1..=40 {
            let beta = bi as f64 * 0.05;
            let phi = (-beta).exp();
            for vi in 1..=31 {
                let varrho = vi as f64 * 0.1;
                let c0 = -(-4.0f64 * beta).exp_m1();
                let c1 = -phi * -(-2.0f64 * beta).exp_m1() * varrho.cos();
                assert!(
                    c0 * c0 - 4.0 * c1 * c1 >= -1e-15,
                    "discriminant negative at beta={beta}, varrho={varrho}"
                );
            }
        }
    }

    #[test]
    fn cosine_quartic_factor_stable() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..100 {
            let beta = rng.gen_range(1e-4..2.0);
            let varrho = rng.gen_range(1e-3..std::f64::consts::PI - 1e-3);
            let real = realize_cosine_exponential(rng.gen_range(0.1..5.0), varrho, beta).unwrap();
            assert!(real.spectral_radius() < 1.0 - 1e-12);
        }
    }

    #[test]
    fn matern_realization_matches_kernel() {
        let real = realize_matern32(1.0, 5.0, 1.0).unwrap();
        let spec = Spec::matern32(1.0, 5.0).unwrap();
        let seq = real.cov_sequence(50);
        for (tau, v) in seq.iter().enumerate() {
            let expected = spec.eval_lag(tau as f64).unwrap();
            let err = (v - expected).abs() / expected.abs().max(1e-12);
            assert!(err < 1e-6, "lag {tau}: {v} vs {expected} (rel {err})");
        }
        let at_theta = (1.0 + 3.0f64.sqrt()) * (-(3.0f64.sqrt())).exp();
        assert!((seq[5] - at_theta).abs() < 1e-9);
        assert!((seq[0] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn matern_extreme_length_scales() {
        for theta in [0.3, 2.0, 100.0, 5e3] {
            let real = realize_matern32(2.0, theta, 1.0).unwrap();
            let spec = Spec::matern32(2.0, theta).unwrap();
            let max_lag = 30;
            for (tau, v) in real.cov_sequence(max_lag).iter().enumerate() {
                let expected = spec.eval_lag(tau as f64).unwrap();
                let err = scaled_rel_err(*v, expected, 2.0);
                assert!(err < 1e-6, "theta {theta} lag {tau}: rel err {err}");
            }
        }
    }

    #[test]
    fn te2_with_zero_concentration_limit() {
        // c -> 0 collapses the cosine blocks: their amplitudes are c - c^2
        // and c^2/4. Compare against the pure exponential part.
        let c = 1e-9;
        let spec = Spec::Te2Exp {
            variance: 1.0,
            concentration: c,
            frequency: 1.0 / 12.0,
            envelope: 50.0,
        };
        let real = realize(&spec, 1.0).unwrap();
        let exp_part = realize_exponential(1.0 - c + 0.75 * c * c, 1.0 / 50.0).unwrap();
        let full = real.cov_sequence(20);
        let exp_only = exp_part.cov_sequence(20);
        for (a, b) in full.iter().zip(&exp_only) {
            assert!((a - b).abs() < 1e-8);
        }
    }

    #[test]
    fn periodic_decay_formula_sweep() {
        let spec = Spec::periodic_decay(1.0, 1.0 / 12.0, 10.0).unwrap();
        let real = realize(&spec, 1.0).unwrap();
        assert_eq!(real.state_dim(), 2);
        for (tau, v) in real.cov_sequence(36).iter().enumerate() {
            let t = tau as f64;
            let expected = (2.0 * std::f64::consts::PI * t / 12.0).cos() * (-t / 10.0).exp();
            assert!((v - expected).abs() < 1e-8, "lag {tau}");
        }
    }

    #[test]
    fn composite_sum_structure() {
        let spec = Spec::te2_exp_matern(1.0, 0.4, 0.05, 3.0, 1.0 / 12.0, 5e3).unwrap();
        let real = realize(&spec, 1.0).unwrap();
        assert_eq!(real.state_dim(), 7);
        for (tau, v) in real.cov_sequence(40).iter().enumerate() {
            let expected = spec.eval_lag(tau as f64).unwrap();
            assert!(
                (v - expected).abs() < 1e-8,
                "lag {tau}: {v} vs {expected}"
            );
        }
    }

    #[test]
    fn stationary_fidelity_random_draws() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..25 {
            let variance = rng.gen_range(0.2..4.0);
            let specs = vec![
                Spec::exponential(variance, rng.gen_range(0.5..30.0)).unwrap(),
                Spec::matern32(variance, rng.gen_range(0.5..30.0)).unwrap(),
                Spec::te2_exp(variance, rng.gen_range(0.05..0.95), 1.0 / 12.0, 5e3).unwrap(),
                Spec::te2_exp_matern(
                    variance,
                    rng.gen_range(0.05..0.95),
                    variance * rng.gen_range(0.01..0.1),
                    rng.gen_range(0.5..30.0),
                    1.0 / 12.0,
                    5e3,
                )
                .unwrap(),
                Spec::periodic_decay(variance, 1.0 / 12.0, rng.gen_range(1.0..50.0)).unwrap(),
            ];
            for spec in specs {
                let real = realize(&spec, 1.0).unwrap();
                assert!(real.spectral_radius() < 1.0 - 1e-12, "{spec:?}");
                let k0 = spec.eval_lag(0.0).unwrap();
                for (tau, v) in real.cov_sequence(30).iter().enumerate() {
                    let expected = spec.eval_lag(tau as f64).unwrap();
                    let err = scaled_rel_err(*v, expected, k0);
                    assert!(err < 1e-6, "{spec:?} lag {tau}: rel err {err}");
                }
            }
        }
    }

    #[test]
    fn dc_input_init_cov_and_zero_decay() {
        let input = InputSignal::new(1e-2, std::f64::consts::PI / 8.0).unwrap();
        let real = realize_dc_input(1.0, 0.5, 0.9, &input, 1.0).unwrap();
        assert!((real.init_cov()[(0, 0)] - 1.0 / (1.0 - 0.81)).abs() < 1e-12);

        let real0 = realize_dc_input(1.0, 0.0, 0.9, &input, 1.0).unwrap();
        for j in 1..5 {
            assert_eq!(real0.g_at(j)[(0, 0)], 0.0, "decay 0 must kill the noise");
        }
    }

    #[test]
    fn dc_input_covariance_matches_convolved_gram() {
        // Independent oracle: the realized output is the convolution of the
        // input with a FIR-coefficient process whose covariance is the DC
        // kernel on the lag grid, so
        // E[z_j z_j'] = sum_{k<j} sum_{k'<j'} u(j-k) u(j'-k') *
        //               delta lam^{(k+k'-2)/2} rho^{|k-k'|}.
        let input = InputSignal::new(1e-2, std::f64::consts::PI / 8.0).unwrap();
        let (delta, lam, rho) = (0.7, 0.8, 0.6);
        let real = realize_dc_input(delta, lam, rho, &input, 1.0).unwrap();
        let n = 20;
        let grid = real.output_covariance_grid(n);
        let u = input.samples(n, 1.0);
        for j in 1..=n {
            for j2 in 1..=n {
                let mut expected = 0.0;
                for k in 1..j {
                    for k2 in 1..j2 {
                        expected += u[j - k]
                            * u[j2 - k2]
                            * delta
                            * lam.powf(0.5 * ((k + k2) as f64 - 2.0))
                            * rho.powi((k as i32 - k2 as i32).abs());
                    }
                }
                let got = grid[(j - 1, j2 - 1)];
                assert!(
                    (got - expected).abs() < 1e-10 * expected.abs().max(1.0),
                    "({j},{j2}): {got} vs {expected}"
                );
            }
        }
    }

    #[test]
    fn dc_input_clamps_unit_correlation() {
        let input = InputSignal::new(1e-2, std::f64::consts::PI / 8.0).unwrap();
        let real = realize_dc_input(1.0, 0.5, 1.0, &input, 1.0).unwrap();
        assert!(real.init_cov()[(0, 0)].is_finite());
    }

    #[test]
    fn stationary_grid_agrees_with_lag_sequence() {
        let spec = Spec::te2_exp(1.3, 0.3, 1.0 / 12.0, 80.0).unwrap();
        let real = realize(&spec, 1.0).unwrap();
        let grid = real.output_covariance_grid(8);
        let seq = real.cov_sequence(7);
        for j in 0..8 {
            for j2 in 0..8 {
                let lag = (j as i64 - j2 as i64).unsigned_abs() as usize;
                assert!((grid[(j, j2)] - seq[lag]).abs() < 1e-10);
            }
        }
    }
}
