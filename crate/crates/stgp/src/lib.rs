//! Spatial-temporal Gaussian process regression with a Kronecker-structured
//! state-space backend.
//!
//! The model is a separable GP `k((p,t),(p',t')) = k_s(p,p') * k_t(t,t')`
//! observed on a grid of `M` locations and `N` time instants. Instead of
//! factorizing the dense `NM x NM` covariance, the temporal kernel is
//! realized as a small discrete-time state-space model, the spatial Gram
//! matrix is diagonalized once, and filtering/smoothing/prediction run on
//! `M` decoupled blocks of state dimension `r`. Hyper-parameters are chosen
//! by marginal likelihood (MLM), GCV or SURE, all evaluated from a single
//! filter sweep in `O(M^3 + N M^2)` total work.
//!
//! Module map:
//! - [`kernels`]: spatial/temporal kernel families and their Gram matrices
//! - [`realize`]: analytic spectral factorization into state-space form
//! - [`stmodel`]: the spatial transform and the decoupled block model
//! - [`kalman`]: block Kalman filter, RTS smoother and predictor
//! - [`hyper`]: MLM/GCV/SURE costs, sensitivity recursions, multi-start search
//! - [`oracle`]: dense brute-force reference implementation (small instances)
//! - [`pipeline`]: panel ingestion, per-location missing-data fill, fit metrics
//! - [`sysid`]: spatially-distributed FIR identification experiment
//! - [`naive`]: undecoupled `O(N M^3)` filter used as a baseline in benchmarks
//! - [`synth`]: synthetic fixture generation for tests and the CLI

// `!(x > 0.0)` style checks are deliberate: they reject NaN along with the
// out-of-range values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod error;
pub mod hyper;
pub mod kalman;
pub mod kernels;
pub mod naive;
pub mod oracle;
pub mod pipeline;
pub mod realize;
pub mod stmodel;
pub mod synth;
pub mod sysid;

pub use error::{Result, StgpError};
