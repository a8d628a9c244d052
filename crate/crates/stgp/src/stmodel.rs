//! The transformed, block-decoupled spatial-temporal state-space model.
//!
//! The spatial Gram matrix is factored once as `K_s = Lambda D Lambda^T`
//! (symmetric eigendecomposition, which realizes its SVD since `K_s` is
//! symmetric PSD). Rotating the outputs by `Lambda^T` decouples the lifted
//! model into `M` independent blocks that share the temporal realization
//! `(F, G, H)` and differ only by the output scale `sqrt(d_i)`. The filter
//! never materializes the `Mr`-dimensional matrices; that is what makes the
//! per-step cost `O(M)` instead of `O(M^3)`.

use nalgebra::{DMatrix, DVector};

use crate::error::{Result, StgpError};
use crate::realize::Realization;

#[derive(Debug, Clone)]
pub struct TransformedModel {
    lambda: DMatrix<f64>,
    d: DVector<f64>,
    realization: Realization,
    sigma2: f64,
}

/// Builds the decoupled model from a per-location realization and a spatial
/// Gram matrix. Eigenvalues of `K_s` within `-1e-10 * trace` are clipped to
/// zero; anything lower is rejected as not PSD. Zero blocks are kept so the
/// block count always equals `M`.
pub fn build_transformed_model(
    realization: Realization,
    ks: &DMatrix<f64>,
    sigma2: f64,
) -> Result<TransformedModel> {
    if !ks.is_square() || ks.is_empty() {
        return Err(StgpError::Input("K_s must be square and nonempty".into()));
    }
    if !(sigma2 >= 0.0) || !sigma2.is_finite() {
        return Err(StgpError::Input(format!(
            "sigma2 must be a finite nonnegative real, got {sigma2}"
        )));
    }
    let asym = (ks - ks.transpose()).norm();
    if asym > 1e-8 * ks.norm().max(1.0) {
        return Err(StgpError::Input(format!(
            "K_s is asymmetric beyond tolerance (||K - K^T|| = {asym:.3e})"
        )));
    }
    let sym = (ks + ks.transpose()) * 0.5;
    let trace = sym.trace();
    let eig = sym.symmetric_eigen();

    let m = ks.nrows();
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&a, &b| {
        eig.eigenvalues[b]
            .partial_cmp(&eig.eigenvalues[a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });

    let mut lambda = DMatrix::zeros(m, m);
    let mut d = DVector::zeros(m);
    for (slot, &idx) in order.iter().enumerate() {
        let ev = eig.eigenvalues[idx];
        if ev < -1e-10 * trace.abs().max(1.0) {
            return Err(StgpError::Input(format!(
                "K_s has eigenvalue {ev:.3e}, below the PSD tolerance"
            )));
        }
        d[slot] = ev.max(0.0);
        let mut col = eig.eigenvectors.column(idx).into_owned();
        // deterministic sign: first entry of meaningful magnitude positive
        if let Some(lead) = col.iter().find(|v| v.abs() > 1e-12) {
            if *lead < 0.0 {
                col = -col;
            }
        }
        lambda.column_mut(slot).copy_from(&col);
    }

    Ok(TransformedModel {
        lambda,
        d,
        realization,
        sigma2,
    })
}

impl TransformedModel {
    pub fn m(&self) -> usize {
        self.d.len()
    }

    pub fn state_dim(&self) -> usize {
        self.realization.state_dim()
    }

    pub fn lambda(&self) -> &DMatrix<f64> {
        &self.lambda
    }

    pub fn d(&self) -> &DVector<f64> {
        &self.d
    }

    pub fn sigma2(&self) -> f64 {
        self.sigma2
    }

    pub fn realization(&self) -> &Realization {
        &self.realization
    }

    /// Same model with a different noise variance; used by the sensitivity
    /// finite-difference checks.
    pub fn with_sigma2(&self, sigma2: f64) -> Self {
        Self {
            sigma2,
            ..self.clone()
        }
    }

    /// `Lambda D Lambda^T`, which must reproduce `K_s` up to clipping.
    pub fn reconstructed_ks(&self) -> DMatrix<f64> {
        &self.lambda * DMatrix::from_diagonal(&self.d) * self.lambda.transpose()
    }

    /// Rotates the observation panel into block coordinates:
    /// `L[:, j] = Lambda^T y_j`. The panel must be complete.
    pub fn transform_outputs(&self, y: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        if y.nrows() != self.m() {
            return Err(StgpError::Input(format!(
                "panel has {} rows, model has {} locations",
                y.nrows(),
                self.m()
            )));
        }
        if y.iter().any(|v| !v.is_finite()) {
            return Err(StgpError::Input(
                "panel contains non-finite values; fill missing data first".into(),
            ));
        }
        Ok(self.lambda.transpose() * y)
    }

    /// Maps per-block outputs `sqrt(d_i) H x_i` back to the field:
    /// `fhat_j = Lambda * block_outputs`.
    pub fn untransform_field(&self, block_outputs: &DVector<f64>) -> DVector<f64> {
        &self.lambda * block_outputs
    }

    /// Marginal field variances from per-block output variances `w_i`
    /// (`w_i = d_i H P_i H^T`): `var_m = sum_i Lambda[m,i]^2 w_i`.
    pub fn untransform_variance(&self, block_vars: &DVector<f64>) -> DVector<f64> {
        let m = self.m();
        DVector::from_fn(m, |row, _| {
            (0..m)
                .map(|i| self.lambda[(row, i)].powi(2) * block_vars[i])
                .sum()
        })
    }

    /// Dense covariance of the stacked noiseless outputs over steps
    /// `1..=n`, i.e. the structured model's version of `K_t (x) K_s`.
    /// Test/oracle helper; cost is quadratic in `n`.
    pub fn implied_dense_covariance(&self, n: usize) -> DMatrix<f64> {
        let kt = self.realization.output_covariance_grid(n);
        let ks = self.reconstructed_ks();
        kt.kronecker(&ks)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernels::TemporalKernelSpec;
    use crate::realize::realize;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn exp_realization() -> Realization {
        realize(&TemporalKernelSpec::exponential(1.0, 2.0).unwrap(), 1.0).unwrap()
    }

    fn random_spd(m: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
        let a = DMatrix::from_fn(m, m, |_, _| rng.gen_range(-1.0..1.0));
        &a * a.transpose() + DMatrix::identity(m, m) * 0.1
    }

    #[test]
    fn identity_ks_gives_unit_blocks() {
        let model =
            build_transformed_model(exp_realization(), &DMatrix::identity(4, 4), 0.5).unwrap();
        for i in 0..4 {
            assert!((model.d()[i] - 1.0).abs() < 1e-12);
        }
        let y = DMatrix::from_fn(4, 3, |i, j| (i + 4 * j) as f64);
        let l = model.transform_outputs(&y).unwrap();
        // Lambda is orthogonal with unit eigenvalues; rotation must preserve norms
        for j in 0..3 {
            assert!((l.column(j).norm() - y.column(j).norm()).abs() < 1e-10);
        }
    }

    #[test]
    fn single_location_scales_output() {
        let model = build_transformed_model(
            exp_realization(),
            &DMatrix::from_element(1, 1, 4.0),
            0.1,
        )
        .unwrap();
        assert!((model.d()[0] - 4.0).abs() < 1e-12);
        assert!((model.d()[0].sqrt() - 2.0).abs() < 1e-12);
    }

    #[test]
    fn orthogonality_and_reconstruction() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        for _ in 0..20 {
            let m = rng.gen_range(2..=6);
            let ks = random_spd(m, &mut rng);
            let model = build_transformed_model(exp_realization(), &ks, 1.0).unwrap();
            let lam = model.lambda();
            let gram = lam * lam.transpose();
            let dev = (&gram - DMatrix::identity(m, m))
                .iter()
                .map(|v| v.abs())
                .fold(0.0, f64::max);
            assert!(dev < 1e-10, "Lambda Lambda^T deviates by {dev}");
            let rec_err = (model.reconstructed_ks() - &ks).norm() / ks.norm();
            assert!(rec_err < 1e-8, "reconstruction error {rec_err}");
            for i in 1..m {
                assert!(model.d()[i - 1] >= model.d()[i], "d not sorted descending");
                assert!(model.d()[i] >= 0.0);
            }
        }
    }

    #[test]
    fn build_is_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(37);
        let ks = random_spd(5, &mut rng);
        let a = build_transformed_model(exp_realization(), &ks, 1.0).unwrap();
        let b = build_transformed_model(exp_realization(), &ks, 1.0).unwrap();
        assert_eq!(a.lambda(), b.lambda());
        assert_eq!(a.d(), b.d());
    }

    #[test]
    fn rejects_asymmetric_ks() {
        let ks = DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.1, 1.0]);
        assert!(build_transformed_model(exp_realization(), &ks, 1.0).is_err());
    }

    #[test]
    fn singular_ks_keeps_zero_blocks() {
        // rank-1 PSD matrix: one positive eigenvalue, one clipped zero
        let ks = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0]);
        let model = build_transformed_model(exp_realization(), &ks, 1.0).unwrap();
        assert_eq!(model.m(), 2);
        assert!((model.d()[0] - 2.0).abs() < 1e-12);
        assert!(model.d()[1].abs() < 1e-12);

        // the zero block still propagates: filtering and smoothing work and
        // match the dense posterior of the singular-K_s problem
        let real = exp_realization();
        let n = 5;
        let y = DMatrix::from_row_slice(2, n, &[1.0, -0.5, 0.3, 0.8, -0.2, 0.9, -0.4, 0.2, 0.7, -0.1]);
        let l = model.transform_outputs(&y).unwrap();
        let filt = crate::kalman::filter_pass(&model, &l, None).unwrap();
        let smoothed = crate::kalman::smoother_pass(&model, &filt).unwrap();
        let kt = real.output_covariance_grid(n);
        let yvec = nalgebra::DVector::from_fn(2 * n, |idx, _| y[(idx % 2, idx / 2)]);
        let dense = crate::oracle::DenseProblem::new(kt.clone(), ks, 1.0, yvec).unwrap();
        let post = dense.posterior(&kt).unwrap();
        for j in 0..n {
            for i in 0..2 {
                assert!(
                    (smoothed.fhat[(i, j)] - post.mean[(i, j)]).abs() < 1e-8,
                    "singular K_s posterior mismatch at ({i},{j})"
                );
            }
        }
    }

    #[test]
    fn transform_round_trip_and_basis_vector() {
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        let ks = random_spd(5, &mut rng);
        let model = build_transformed_model(exp_realization(), &ks, 1.0).unwrap();
        let y = DMatrix::from_fn(5, 7, |_, _| rng.gen_range(-2.0..2.0));
        let l = model.transform_outputs(&y).unwrap();
        let back = model.lambda() * &l;
        assert!((&back - &y).norm() < 1e-10);

        // a column of Lambda rotates to a coordinate vector
        let y1 = model.lambda().column(0).into_owned();
        let l1 = model.lambda().transpose() * &y1;
        assert!((l1[0] - 1.0).abs() < 1e-12);
        for i in 1..5 {
            assert!(l1[i].abs() < 1e-12);
        }
    }

    #[test]
    fn transform_rejects_nan() {
        let model =
            build_transformed_model(exp_realization(), &DMatrix::identity(2, 2), 1.0).unwrap();
        let mut y = DMatrix::zeros(2, 2);
        y[(0, 1)] = f64::NAN;
        assert!(model.transform_outputs(&y).is_err());
    }

    #[test]
    fn untransform_zero_states_zero_field() {
        let model =
            build_transformed_model(exp_realization(), &DMatrix::identity(3, 3), 1.0).unwrap();
        let f = model.untransform_field(&DVector::zeros(3));
        assert_eq!(f.norm(), 0.0);
    }

    #[test]
    fn lifted_covariance_equals_kron_structure() {
        let mut rng = ChaCha8Rng::seed_from_u64(43);
        for _ in 0..5 {
            let m = rng.gen_range(2..=4);
            let ks = random_spd(m, &mut rng);
            let spec = TemporalKernelSpec::te2_exp(1.0, 0.4, 1.0 / 12.0, 40.0).unwrap();
            let real = realize(&spec, 1.0).unwrap();
            let n = 6;
            let kt = real.output_covariance_grid(n);
            let model = build_transformed_model(real, &ks, 1.0).unwrap();
            let implied = model.implied_dense_covariance(n);
            let direct = kt.kronecker(&ks);
            let err = (&implied - &direct)
                .iter()
                .map(|v| v.abs())
                .fold(0.0, f64::max);
            assert!(err < 1e-8, "Kronecker lift mismatch {err}");
        }
    }
}
