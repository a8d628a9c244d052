//! Decoupled Kalman filter, RTS smoother and predictor.
//!
//! After the spatial transform the lifted model splits into `M` independent
//! blocks with scalar measurements, so the innovation covariance is diagonal
//! and every recursion below runs per block on `r x r` matrices. Blocks are
//! processed in parallel; per-block recursions are strictly sequential in
//! time, and all cross-block reductions accumulate in block order so results
//! do not depend on the worker count.
//!
//! Two filter entry points exist: a streaming one that only accumulates the
//! cost terms (the optimizer hot loop), and a storing one that keeps the
//! full per-block sequences for smoothing.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::error::{Result, StgpError};
use crate::stmodel::TransformedModel;

/// Relative floor applied to the innovation variance before logs and
/// divisions; breaches are counted, not fatal.
const INNOV_FLOOR_REL: f64 = 1e-12;

/// Tolerance for the pseudo-inverse fallback in the smoother gain.
const PINV_TOL_REL: f64 = 1e-12;

fn symmetrize(p: &mut DMatrix<f64>) {
    let n = p.nrows();
    for i in 0..n {
        for j in 0..i {
            let v = 0.5 * (p[(i, j)] + p[(j, i)]);
            p[(i, j)] = v;
            p[(j, i)] = v;
        }
    }
}

/// Per-block filter sequences over `j = 1..=n` (0-indexed storage).
#[derive(Debug, Clone)]
pub struct BlockFilterSeq {
    pub xpred: Vec<DVector<f64>>,
    pub ppred: Vec<DMatrix<f64>>,
    pub xfilt: Vec<DVector<f64>>,
    pub pfilt: Vec<DMatrix<f64>>,
    /// Innovation; NaN on masked steps.
    pub innov: Vec<f64>,
    /// Innovation variance; NaN on masked steps.
    pub innov_var: Vec<f64>,
    pub observed: Vec<bool>,
}

#[derive(Debug, Clone)]
pub struct FilterOutput {
    pub blocks: Vec<BlockFilterSeq>,
    pub n: usize,
}

/// Accumulated cost terms from one filter sweep.
#[derive(Debug, Clone, Copy, Default)]
pub struct CostAccum {
    /// `sum log E_{j,i}` over observed steps.
    pub logdet: f64,
    /// `sum e^2 / E` over observed steps.
    pub quad: f64,
    /// Number of observed scalar measurements.
    pub n_terms: usize,
    /// How many innovation variances hit the floor.
    pub floored: usize,
}

/// Cost terms plus the noise-variance sensitivities GCV/SURE need:
/// `s_raw = sum [e^2 Edot / E^2 + 2 e h zeta / E]` and
/// `trace_term = sum Edot / E` with `Edot = d H P H^T + 1`.
#[derive(Debug, Clone, Copy, Default)]
pub struct SensAccum {
    pub cost: CostAccum,
    pub s_raw: f64,
    pub trace_term: f64,
}

struct BlockContext<'a> {
    f: &'a DMatrix<f64>,
    h: DVector<f64>,
    model: &'a TransformedModel,
    r: usize,
}

impl<'a> BlockContext<'a> {
    fn new(model: &'a TransformedModel) -> Self {
        let real = model.realization();
        Self {
            f: real.f_matrix(),
            h: real.h_row().transpose(),
            model,
            r: real.state_dim(),
        }
    }
}

/// One block's streaming state.
struct BlockState {
    x: DVector<f64>,
    p: DMatrix<f64>,
    // scratch
    ph: DVector<f64>,
    gain: DVector<f64>,
    a: DMatrix<f64>,
    scratch: DMatrix<f64>,
    scratch2: DMatrix<f64>,
    xtmp: DVector<f64>,
}

impl BlockState {
    fn new(ctx: &BlockContext) -> Self {
        let r = ctx.r;
        BlockState {
            x: DVector::zeros(r),
            p: ctx.model.realization().init_cov().clone(),
            ph: DVector::zeros(r),
            gain: DVector::zeros(r),
            a: DMatrix::zeros(r, r),
            scratch: DMatrix::zeros(r, r),
            scratch2: DMatrix::zeros(r, r),
            xtmp: DVector::zeros(r),
        }
    }

    /// Innovation and its variance at the current predicted state.
    fn innovation(&mut self, ctx: &BlockContext, di: f64, l: f64) -> (f64, f64) {
        self.ph.gemv(1.0, &self.p, &ctx.h, 0.0);
        let w = ctx.h.dot(&self.ph);
        let e_var = di * w + ctx.model.sigma2();
        let e = l - di.sqrt() * ctx.h.dot(&self.x);
        (e, e_var)
    }

    /// Measurement update in Joseph form (keeps the covariance PSD under
    /// roundoff; algebraically identical to the subtractive update).
    fn measurement_update(&mut self, ctx: &BlockContext, di: f64, e: f64, e_var: f64) {
        let sqrt_di = di.sqrt();
        self.gain.copy_from(&self.ph);
        self.gain *= sqrt_di / e_var;
        self.x.axpy(e, &self.gain, 1.0);
        self.a.fill_with_identity();
        self.a.ger(-sqrt_di, &self.gain, &ctx.h, 1.0);
        self.scratch.gemm(1.0, &self.a, &self.p, 0.0);
        self.a.transpose_to(&mut self.scratch2);
        self.p.gemm(1.0, &self.scratch, &self.scratch2, 0.0);
        self.p.ger(ctx.model.sigma2(), &self.gain, &self.gain, 1.0);
        symmetrize(&mut self.p);
    }

    /// Time update leaving step `j` (1-based).
    fn propagate(&mut self, ctx: &BlockContext, j: usize) {
        self.xtmp.gemv(1.0, ctx.f, &self.x, 0.0);
        std::mem::swap(&mut self.x, &mut self.xtmp);
        self.scratch.gemm(1.0, ctx.f, &self.p, 0.0);
        ctx.f.transpose_to(&mut self.scratch2);
        self.p.gemm(1.0, &self.scratch, &self.scratch2, 0.0);
        ctx.model.realization().add_process_noise(j, &mut self.p);
        symmetrize(&mut self.p);
    }
}

fn floor_innov_var(e_var: f64, sigma2: f64, floored: &mut usize) -> f64 {
    let floor = sigma2 * INNOV_FLOOR_REL;
    if e_var < floor {
        *floored += 1;
        floor
    } else {
        e_var
    }
}

fn check_observed_mask(model: &TransformedModel, observed: Option<&[bool]>, n: usize) -> Result<()> {
    if let Some(mask) = observed {
        if model.m() != 1 {
            return Err(StgpError::Config(
                "missing-data masks are only supported in single-location mode; \
                 the spatial transform mixes locations, fill the panel first"
                    .into(),
            ));
        }
        if mask.len() != n {
            return Err(StgpError::Input(format!(
                "mask has {} entries, series has {n}",
                mask.len()
            )));
        }
    }
    Ok(())
}

/// Streaming filter sweep accumulating the MLM cost terms.
pub fn filter_cost(
    model: &TransformedModel,
    l: &DMatrix<f64>,
    observed: Option<&[bool]>,
) -> Result<CostAccum> {
    let n = l.ncols();
    check_observed_mask(model, observed, n)?;
    let partials: Vec<Result<CostAccum>> = (0..model.m())
        .into_par_iter()
        .map(|i| filter_cost_block(model, l, observed, i))
        .collect();
    let mut total = CostAccum::default();
    for p in partials {
        let p = p?;
        total.logdet += p.logdet;
        total.quad += p.quad;
        total.n_terms += p.n_terms;
        total.floored += p.floored;
    }
    Ok(total)
}

fn filter_cost_block(
    model: &TransformedModel,
    l: &DMatrix<f64>,
    observed: Option<&[bool]>,
    i: usize,
) -> Result<CostAccum> {
    let ctx = BlockContext::new(model);
    let mut st = BlockState::new(&ctx);
    let di = model.d()[i];
    let n = l.ncols();
    let mut acc = CostAccum::default();
    for j in 0..n {
        let is_obs = observed.is_none_or(|m| m[j]);
        if is_obs {
            let (e, e_var) = st.innovation(&ctx, di, l[(i, j)]);
            if e_var <= 0.0 || !e_var.is_finite() {
                return Err(StgpError::Degeneracy {
                    block: i,
                    step: j + 1,
                    value: e_var,
                });
            }
            let e_var_f = floor_innov_var(e_var, model.sigma2(), &mut acc.floored);
            acc.logdet += e_var_f.ln();
            acc.quad += e * e / e_var_f;
            acc.n_terms += 1;
            st.measurement_update(&ctx, di, e, e_var_f);
        }
        st.propagate(&ctx, j + 1);
    }
    Ok(acc)
}

/// Streaming filter sweep that also runs the per-block sensitivity
/// recursions `zeta = d xpred / d gamma`, `P = d Ppred / d gamma`
/// (`gamma = sigma^2`), accumulating the terms GCV and SURE need. The
/// recursions are derived directly from the filter equations; starting
/// values are zero since the prior does not depend on the noise variance.
pub fn filter_cost_with_sensitivity(
    model: &TransformedModel,
    l: &DMatrix<f64>,
    observed: Option<&[bool]>,
) -> Result<SensAccum> {
    let n = l.ncols();
    check_observed_mask(model, observed, n)?;
    let partials: Vec<Result<SensAccum>> = (0..model.m())
        .into_par_iter()
        .map(|i| sensitivity_block(model, l, observed, i))
        .collect();
    let mut total = SensAccum::default();
    for p in partials {
        let p = p?;
        total.cost.logdet += p.cost.logdet;
        total.cost.quad += p.cost.quad;
        total.cost.n_terms += p.cost.n_terms;
        total.cost.floored += p.cost.floored;
        total.s_raw += p.s_raw;
        total.trace_term += p.trace_term;
    }
    Ok(total)
}

fn sensitivity_block(
    model: &TransformedModel,
    l: &DMatrix<f64>,
    observed: Option<&[bool]>,
    i: usize,
) -> Result<SensAccum> {
    let ctx = BlockContext::new(model);
    let mut st = BlockState::new(&ctx);
    let di = model.d()[i];
    let sqrt_di = di.sqrt();
    let r = ctx.r;
    let n = l.ncols();

    let mut zeta: DVector<f64> = DVector::zeros(r);
    let mut psens: DMatrix<f64> = DMatrix::zeros(r, r);
    let mut psens_h: DVector<f64> = DVector::zeros(r);
    let mut u: DVector<f64> = DVector::zeros(r);
    let mut t: DMatrix<f64> = DMatrix::zeros(r, r);
    let mut ft: DMatrix<f64> = DMatrix::zeros(r, r);
    let mut ftr: DMatrix<f64> = DMatrix::zeros(r, r);
    ctx.f.transpose_to(&mut ftr);

    let mut acc = SensAccum::default();
    for j in 0..n {
        let is_obs = observed.is_none_or(|m| m[j]);
        if is_obs {
            let (e, e_var) = st.innovation(&ctx, di, l[(i, j)]);
            if e_var <= 0.0 || !e_var.is_finite() {
                return Err(StgpError::Degeneracy {
                    block: i,
                    step: j + 1,
                    value: e_var,
                });
            }
            let e_var = floor_innov_var(e_var, model.sigma2(), &mut acc.cost.floored);
            acc.cost.logdet += e_var.ln();
            acc.cost.quad += e * e / e_var;
            acc.cost.n_terms += 1;

            psens_h.gemv(1.0, &psens, &ctx.h, 0.0);
            let e_var_dot = di * ctx.h.dot(&psens_h) + 1.0;
            let hz = ctx.h.dot(&zeta);
            acc.s_raw += e * e * e_var_dot / (e_var * e_var)
                + 2.0 * e * sqrt_di * hz / e_var;
            acc.trace_term += e_var_dot / e_var;

            // zeta_{j+1} = F [zeta + sqrt(d) e/E * Ph
            //                 - sqrt(d) Edot e/E^2 * ph - d hz/E * ph]
            u.copy_from(&zeta);
            u.axpy(sqrt_di * e / e_var, &psens_h, 1.0);
            u.axpy(
                -sqrt_di * e_var_dot * e / (e_var * e_var) - di * hz / e_var,
                &st.ph,
                1.0,
            );
            zeta.gemv(1.0, ctx.f, &u, 0.0);

            // P_{j+1} = F [P - d/E (Ph ph^T + ph Ph^T)
            //              + d Edot/E^2 ph ph^T] F^T
            t.copy_from(&psens);
            t.ger(-di / e_var, &psens_h, &st.ph, 1.0);
            t.ger(-di / e_var, &st.ph, &psens_h, 1.0);
            t.ger(di * e_var_dot / (e_var * e_var), &st.ph, &st.ph, 1.0);
            ft.gemm(1.0, ctx.f, &t, 0.0);
            psens.gemm(1.0, &ft, &ftr, 0.0);
            symmetrize(&mut psens);

            st.measurement_update(&ctx, di, e, e_var);
        } else {
            // no measurement: both sensitivities propagate open loop
            u.gemv(1.0, ctx.f, &zeta, 0.0);
            std::mem::swap(&mut zeta, &mut u);
            ft.gemm(1.0, ctx.f, &psens, 0.0);
            psens.gemm(1.0, &ft, &ftr, 0.0);
            symmetrize(&mut psens);
        }
        st.propagate(&ctx, j + 1);
    }
    Ok(acc)
}

/// Full filter pass storing per-block sequences for smoothing.
pub fn filter_pass(
    model: &TransformedModel,
    l: &DMatrix<f64>,
    observed: Option<&[bool]>,
) -> Result<FilterOutput> {
    let n = l.ncols();
    check_observed_mask(model, observed, n)?;
    let blocks: Vec<Result<BlockFilterSeq>> = (0..model.m())
        .into_par_iter()
        .map(|i| filter_block_stored(model, l, observed, i))
        .collect();
    let blocks = blocks.into_iter().collect::<Result<Vec<_>>>()?;
    Ok(FilterOutput { blocks, n })
}

fn filter_block_stored(
    model: &TransformedModel,
    l: &DMatrix<f64>,
    observed: Option<&[bool]>,
    i: usize,
) -> Result<BlockFilterSeq> {
    let ctx = BlockContext::new(model);
    let mut st = BlockState::new(&ctx);
    let di = model.d()[i];
    let n = l.ncols();
    let mut seq = BlockFilterSeq {
        xpred: Vec::with_capacity(n),
        ppred: Vec::with_capacity(n),
        xfilt: Vec::with_capacity(n),
        pfilt: Vec::with_capacity(n),
        innov: Vec::with_capacity(n),
        innov_var: Vec::with_capacity(n),
        observed: Vec::with_capacity(n),
    };
    for j in 0..n {
        let is_obs = observed.is_none_or(|m| m[j]);
        seq.xpred.push(st.x.clone());
        seq.ppred.push(st.p.clone());
        if is_obs {
            let (e, e_var) = st.innovation(&ctx, di, l[(i, j)]);
            if e_var <= 0.0 || !e_var.is_finite() {
                return Err(StgpError::Degeneracy {
                    block: i,
                    step: j + 1,
                    value: e_var,
                });
            }
            st.measurement_update(&ctx, di, e, e_var);
            seq.innov.push(e);
            seq.innov_var.push(e_var);
        } else {
            seq.innov.push(f64::NAN);
            seq.innov_var.push(f64::NAN);
        }
        seq.observed.push(is_obs);
        seq.xfilt.push(st.x.clone());
        seq.pfilt.push(st.p.clone());
        st.propagate(&ctx, j + 1);
    }
    Ok(seq)
}

/// Smoothed field and per-block state posteriors over the training window.
#[derive(Debug, Clone)]
pub struct SmootherOutput {
    /// Smoothed states, `[block][time]`.
    pub xs: Vec<Vec<DVector<f64>>>,
    /// Smoothed state covariances, `[block][time]`.
    pub ps: Vec<Vec<DMatrix<f64>>>,
    /// Field means, `m x n`.
    pub fhat: DMatrix<f64>,
    /// Marginal field variances, `m x n`.
    pub field_var: DMatrix<f64>,
    /// Number of singular predicted covariances handled by pseudo-inverse.
    pub pinv_fallbacks: usize,
}

/// Inverse of a symmetric PSD matrix, falling back to an eigenvalue
/// pseudo-inverse with tolerance `PINV_TOL_REL * trace` when Cholesky fails.
fn psd_inverse(p: &DMatrix<f64>, fallbacks: &mut usize) -> DMatrix<f64> {
    if let Some(chol) = p.clone().cholesky() {
        return chol.inverse();
    }
    *fallbacks += 1;
    let eig = p.clone().symmetric_eigen();
    let tol = PINV_TOL_REL * p.trace().abs().max(f64::MIN_POSITIVE);
    let mut inv = DMatrix::zeros(p.nrows(), p.ncols());
    for (k, &ev) in eig.eigenvalues.iter().enumerate() {
        if ev > tol {
            let v = eig.eigenvectors.column(k);
            inv.ger(1.0 / ev, &v.into_owned(), &v.into_owned(), 1.0);
        }
    }
    inv
}

/// Backward RTS sweep over the stored filter output, then field assembly.
pub fn smoother_pass(model: &TransformedModel, filt: &FilterOutput) -> Result<SmootherOutput> {
    let n = filt.n;
    let m = model.m();
    if filt.blocks.len() != m {
        return Err(StgpError::Input(
            "filter output does not match the model block count".into(),
        ));
    }
    type SmoothedBlock = (Vec<DVector<f64>>, Vec<DMatrix<f64>>, usize);
    let results: Vec<SmoothedBlock> = (0..m)
        .into_par_iter()
        .map(|i| smooth_block(model, &filt.blocks[i]))
        .collect();

    let mut xs = Vec::with_capacity(m);
    let mut ps = Vec::with_capacity(m);
    let mut pinv_fallbacks = 0;
    for (x, p, fb) in results {
        xs.push(x);
        ps.push(p);
        pinv_fallbacks += fb;
    }
    let (fhat, field_var) = assemble_field(model, &xs, &ps, n);
    Ok(SmootherOutput {
        xs,
        ps,
        fhat,
        field_var,
        pinv_fallbacks,
    })
}

fn smooth_block(
    model: &TransformedModel,
    seq: &BlockFilterSeq,
) -> (Vec<DVector<f64>>, Vec<DMatrix<f64>>, usize) {
    let f = model.realization().f_matrix();
    let n = seq.xfilt.len();
    let mut xs = vec![DVector::zeros(0); n];
    let mut ps = vec![DMatrix::zeros(0, 0); n];
    let mut fallbacks = 0;
    xs[n - 1] = seq.xfilt[n - 1].clone();
    ps[n - 1] = seq.pfilt[n - 1].clone();
    for j in (0..n - 1).rev() {
        let pred_inv = psd_inverse(&seq.ppred[j + 1], &mut fallbacks);
        let gain = &seq.pfilt[j] * f.transpose() * pred_inv;
        xs[j] = &seq.xfilt[j] + &gain * (&xs[j + 1] - &seq.xpred[j + 1]);
        let mut p = &seq.pfilt[j] + &gain * (&ps[j + 1] - &seq.ppred[j + 1]) * gain.transpose();
        symmetrize(&mut p);
        ps[j] = p;
    }
    (xs, ps, fallbacks)
}

fn assemble_field(
    model: &TransformedModel,
    xs: &[Vec<DVector<f64>>],
    ps: &[Vec<DMatrix<f64>>],
    n: usize,
) -> (DMatrix<f64>, DMatrix<f64>) {
    let m = model.m();
    let h = model.realization().h_row();
    let mut fhat = DMatrix::zeros(m, n);
    let mut field_var = DMatrix::zeros(m, n);
    let mut block_out = DVector::zeros(m);
    let mut block_var = DVector::zeros(m);
    for j in 0..n {
        for i in 0..m {
            let di = model.d()[i];
            block_out[i] = di.sqrt() * (h * &xs[i][j])[0];
            block_var[i] = di * (h * &ps[i][j] * h.transpose())[0];
        }
        fhat.column_mut(j)
            .copy_from(&model.untransform_field(&block_out));
        field_var
            .column_mut(j)
            .copy_from(&model.untransform_variance(&block_var));
    }
    (fhat, field_var)
}

/// Open-loop prediction over `horizon` steps past the training window.
#[derive(Debug, Clone)]
pub struct PredictorOutput {
    pub fhat: DMatrix<f64>,
    pub field_var: DMatrix<f64>,
    pub xs: Vec<Vec<DVector<f64>>>,
    pub ps: Vec<Vec<DMatrix<f64>>>,
}

pub fn predictor_pass(
    model: &TransformedModel,
    smoothed: &SmootherOutput,
    horizon: usize,
) -> Result<PredictorOutput> {
    let m = model.m();
    if smoothed.xs.len() != m || smoothed.xs.is_empty() || smoothed.xs[0].is_empty() {
        return Err(StgpError::Input(
            "smoother output does not match the model".into(),
        ));
    }
    let n = smoothed.xs[0].len();
    let f = model.realization().f_matrix();
    let mut xs = Vec::with_capacity(m);
    let mut ps = Vec::with_capacity(m);
    for i in 0..m {
        let mut x = smoothed.xs[i][n - 1].clone();
        let mut p = smoothed.ps[i][n - 1].clone();
        let mut bx = Vec::with_capacity(horizon);
        let mut bp = Vec::with_capacity(horizon);
        for k in 0..horizon {
            x = f * &x;
            p = f * &p * f.transpose();
            model.realization().add_process_noise(n + k, &mut p);
            symmetrize(&mut p);
            bx.push(x.clone());
            bp.push(p.clone());
        }
        xs.push(bx);
        ps.push(bp);
    }
    let (fhat, field_var) = assemble_field(model, &xs, &ps, horizon);
    Ok(PredictorOutput {
        fhat,
        field_var,
        xs,
        ps,
    })
}
