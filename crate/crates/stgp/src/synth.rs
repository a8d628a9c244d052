//! Synthetic instance and fixture generation.
//!
//! Everything here is seeded and deterministic. `random_instance` produces
//! small structured-vs-dense problem pairs for the oracle equivalence
//! suites (also run by the CLI `oracle-check` command); `sample_panel`
//! simulates a panel from the lifted state-space model so every CLI path is
//! testable without external data.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::kernels::{InputSignal, SpatialKernelSpec, TemporalKernelSpec};
use crate::oracle::DenseProblem;
use crate::realize::realize;
use crate::stmodel::{build_transformed_model, TransformedModel};

/// A small structured problem plus its dense mirror.
#[derive(Debug, Clone)]
pub struct RandomInstance {
    pub model: TransformedModel,
    /// Observation panel, `m x n`.
    pub y: DMatrix<f64>,
    /// Temporal Gram over training plus test steps, from the realized
    /// covariance of the state-space model.
    pub kt_all: DMatrix<f64>,
    pub n_test: usize,
    pub dense: DenseProblem,
    pub spec: TemporalKernelSpec,
    pub sigma2: f64,
}

fn random_spd(m: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    let a = DMatrix::from_fn(m, m, |_, _| rng.gen_range(-1.0..1.0));
    let base = &a * a.transpose();
    let scale = rng.gen_range(0.2..2.0);
    base * scale + DMatrix::identity(m, m) * rng.gen_range(0.05..0.5)
}

fn random_temporal(rng: &mut ChaCha8Rng, family: usize) -> TemporalKernelSpec {
    let variance = rng.gen_range(0.3..3.0);
    match family % 6 {
        0 => TemporalKernelSpec::exponential(variance, rng.gen_range(0.7..15.0)).unwrap(),
        1 => TemporalKernelSpec::matern32(variance, rng.gen_range(0.7..15.0)).unwrap(),
        2 => TemporalKernelSpec::te2_exp(
            variance,
            rng.gen_range(0.05..0.95),
            1.0 / 12.0,
            rng.gen_range(20.0..5e3),
        )
        .unwrap(),
        3 => TemporalKernelSpec::periodic_decay(
            variance,
            1.0 / 12.0,
            rng.gen_range(2.0..50.0),
        )
        .unwrap(),
        4 => TemporalKernelSpec::te2_exp_matern(
            variance,
            rng.gen_range(0.05..0.95),
            variance * rng.gen_range(0.01..0.1),
            rng.gen_range(0.7..15.0),
            1.0 / 12.0,
            rng.gen_range(20.0..5e3),
        )
        .unwrap(),
        _ => TemporalKernelSpec::dc_input(
            variance,
            rng.gen_range(0.2..0.9),
            rng.gen_range(-0.9..0.95),
            InputSignal::new(1e-2, std::f64::consts::PI / 8.0).unwrap(),
        )
        .unwrap(),
    }
}

/// Builds a random instance with `n <= max_n` training steps, `m <= max_m`
/// locations and the kernel family rotated by the seed. The dense `K_t` is
/// the realized output covariance grid, so the two routes share only the
/// realization, not the filtering path.
pub fn random_instance(seed: u64, max_n: usize, max_m: usize) -> Result<RandomInstance> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.gen_range(2..=max_n.max(2));
    let m = rng.gen_range(1..=max_m.max(1));
    let n_test = rng.gen_range(1..=3);
    let sigma2 = rng.gen_range(0.01..10.0);
    let spec = random_temporal(&mut rng, seed as usize);
    let real = realize(&spec, 1.0)?;
    let kt_all = real.output_covariance_grid(n + n_test);
    let ks = random_spd(m, &mut rng);
    let model = build_transformed_model(real, &ks, sigma2)?;

    // sample y from the dense model so the data actually follows the prior
    let kt = kt_all.view((0, 0), (n, n)).into_owned();
    let sigma = kt.kronecker(&ks) + DMatrix::identity(n * m, n * m) * sigma2;
    let chol = sigma
        .cholesky()
        .expect("sampled covariance must be positive definite");
    let z = DVector::from_fn(n * m, |_, _| standard_normal(&mut rng));
    let yvec = chol.l() * z;
    let y = DMatrix::from_fn(m, n, |i, j| yvec[j * m + i]);

    let dense = DenseProblem::new(kt, ks, sigma2, yvec)?;
    Ok(RandomInstance {
        model,
        y,
        kt_all,
        n_test,
        dense,
        spec,
        sigma2,
    })
}

fn standard_normal(rng: &mut ChaCha8Rng) -> f64 {
    // Box-Muller; two uniforms per draw keeps this dependency-free
    let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
    let u2: f64 = rng.gen_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

/// A simulated spatial-temporal panel with known generator.
#[derive(Debug, Clone)]
pub struct PanelFixture {
    pub values: DMatrix<f64>,
    pub missing: DMatrix<bool>,
    pub locations: Vec<Vec<f64>>,
    pub location_ids: Vec<String>,
    pub ts: f64,
    pub n_train: usize,
    pub n_test: usize,
    pub temporal: TemporalKernelSpec,
    pub spatial: SpatialKernelSpec,
    pub sigma2: f64,
}

/// Samples a complete panel from the lifted model: independent per-location
/// state trajectories mixed by `K_s^(1/2)`, plus measurement noise, plus an
/// optional missing mask (training block only stays observable at least
/// once per location).
pub fn sample_panel(
    m: usize,
    n_train: usize,
    n_test: usize,
    missing_fraction: f64,
    seed: u64,
) -> Result<PanelFixture> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let spatial = SpatialKernelSpec::squared_exponential(1.5)?;
    let temporal = TemporalKernelSpec::te2_exp(1.0, 0.4, 1.0 / 12.0, 200.0)?;
    let sigma2: f64 = 0.1;
    let ts = 1.0;
    let locations: Vec<Vec<f64>> = (0..m)
        .map(|_| vec![rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0)])
        .collect();
    let location_ids: Vec<String> = (0..m).map(|i| format!("loc{i:03}")).collect();
    let ks = spatial.gram(&locations)?;
    let real = realize(&temporal, ts)?;
    let n = n_train + n_test;

    // independent per-location realizations
    let mut z = DMatrix::zeros(m, n);
    for i in 0..m {
        let mut x = sample_gaussian_vec(real.init_cov(), &mut rng);
        for j in 0..n {
            z[(i, j)] = (real.h_row() * &x)[0];
            let g = real.g_at(j + 1);
            let w = DVector::from_fn(g.ncols(), |_, _| standard_normal(&mut rng));
            x = real.f_matrix() * x + g * w;
        }
    }
    // spatial mixing by K_s^(1/2)
    let eig = ks.clone().symmetric_eigen();
    let mut half = eig.eigenvectors.clone();
    for (k, ev) in eig.eigenvalues.iter().enumerate() {
        let s = ev.max(0.0).sqrt();
        half.column_mut(k).scale_mut(s);
    }
    let half = half * eig.eigenvectors.transpose();
    let field = &half * z;

    let mut values = field;
    for v in values.iter_mut() {
        *v += sigma2.sqrt() * standard_normal(&mut rng);
    }

    let mut missing = DMatrix::from_element(m, n, false);
    if missing_fraction > 0.0 {
        for i in 0..m {
            for j in 0..n {
                if rng.gen_range(0.0..1.0) < missing_fraction {
                    missing[(i, j)] = true;
                }
            }
            // keep at least one observation per location
            if (0..n).all(|j| missing[(i, j)]) {
                let j = rng.gen_range(0..n);
                missing[(i, j)] = false;
            }
        }
    }

    Ok(PanelFixture {
        values,
        missing,
        locations,
        location_ids,
        ts,
        n_train,
        n_test,
        temporal,
        spatial,
        sigma2,
    })
}

fn sample_gaussian_vec(cov: &DMatrix<f64>, rng: &mut ChaCha8Rng) -> DVector<f64> {
    let r = cov.nrows();
    let z = DVector::from_fn(r, |_, _| standard_normal(rng));
    match cov.clone().cholesky() {
        Some(chol) => chol.l() * z,
        None => {
            // PSD with zero modes: eigenvalue square root
            let eig = cov.clone().symmetric_eigen();
            let mut half = eig.eigenvectors.clone();
            for (k, ev) in eig.eigenvalues.iter().enumerate() {
                half.column_mut(k).scale_mut(ev.max(0.0).sqrt());
            }
            half * eig.eigenvectors.transpose() * z
        }
    }
}
