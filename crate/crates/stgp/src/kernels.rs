//! Spatial and temporal kernel families.
//!
//! The spatial side is a squared-exponential kernel over location
//! coordinates. The temporal side is a small set of families that all admit
//! exact discrete-time state-space realizations (see [`crate::realize`]):
//! exponential, Matern-3/2, a second-order Taylor expansion of the periodic
//! kernel damped by an exponential envelope (optionally plus a Matern drift
//! term), a periodically decaying kernel, and a diagonal-correlated kernel
//! convolved with a known input signal for FIR identification.
//!
//! Specs are immutable once constructed and validated; evaluation is pure.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Result, StgpError};

const SQRT3: f64 = 1.732_050_807_568_877_2;

/// Squared-exponential spatial kernel `exp(-||p - p'||^2 / alpha_se)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpatialKernelSpec {
    pub alpha_se: f64,
}

impl SpatialKernelSpec {
    pub fn squared_exponential(alpha_se: f64) -> Result<Self> {
        if !(alpha_se > 0.0) || !alpha_se.is_finite() {
            return Err(StgpError::Config(format!(
                "alpha_se must be a positive finite real, got {alpha_se}"
            )));
        }
        Ok(Self { alpha_se })
    }

    pub fn eval(&self, a: &[f64], b: &[f64]) -> f64 {
        let d2: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
        (-d2 / self.alpha_se).exp()
    }

    /// Gram matrix over a list of locations. Symmetric with unit diagonal.
    pub fn gram(&self, locations: &[Vec<f64>]) -> Result<DMatrix<f64>> {
        if locations.is_empty() {
            return Err(StgpError::Input("locations list is empty".into()));
        }
        let dim = locations[0].len();
        for (i, p) in locations.iter().enumerate() {
            if p.len() != dim {
                return Err(StgpError::Input(format!(
                    "location {i} has {} coordinates, expected {dim}",
                    p.len()
                )));
            }
            if p.iter().any(|c| !c.is_finite()) {
                return Err(StgpError::Input(format!(
                    "location {i} has a non-finite coordinate"
                )));
            }
        }
        let m = locations.len();
        let mut k = DMatrix::zeros(m, m);
        for i in 0..m {
            k[(i, i)] = 1.0;
            for j in 0..i {
                let v = self.eval(&locations[i], &locations[j]);
                k[(i, j)] = v;
                k[(j, i)] = v;
            }
        }
        Ok(k)
    }
}

/// State-space parameters of the deterministic test input
/// `u(t) = exp(-damping * t) * sin(angular_freq * t)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InputSignal {
    pub damping: f64,
    pub angular_freq: f64,
}

impl InputSignal {
    pub fn new(damping: f64, angular_freq: f64) -> Result<Self> {
        if !damping.is_finite() || !angular_freq.is_finite() || damping < 0.0 {
            return Err(StgpError::Config(format!(
                "input signal needs finite damping >= 0 and angular frequency, got ({damping}, {angular_freq})"
            )));
        }
        Ok(Self {
            damping,
            angular_freq,
        })
    }

    pub fn value(&self, t: f64) -> f64 {
        (-self.damping * t).exp() * (self.angular_freq * t).sin()
    }

    /// Samples `u(t_j)` at `t_j = j * ts` for `j = 0..=n`.
    pub fn samples(&self, n: usize, ts: f64) -> Vec<f64> {
        (0..=n).map(|j| self.value(j as f64 * ts)).collect()
    }
}

/// Temporal kernel families. Stationary families are functions of the lag
/// `tau = t - t'`; the DC family is a function of the time pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "kebab-case")]
pub enum TemporalKernelSpec {
    /// `variance * exp(-|tau| / length)`
    Exponential { variance: f64, length: f64 },
    /// `variance * (1 + sqrt(3)|tau|/length) * exp(-sqrt(3)|tau|/length)`
    Matern32 { variance: f64, length: f64 },
    /// Second-order Taylor expansion of the periodic kernel
    /// `variance * exp(-2c sin^2(pi f tau))`, damped by `exp(-|tau|/envelope)`
    /// so the spectrum becomes rational. `frequency` and `envelope` are fixed
    /// constants, not free hyper-parameters.
    Te2Exp {
        variance: f64,
        concentration: f64,
        frequency: f64,
        envelope: f64,
    },
    /// [`TemporalKernelSpec::Te2Exp`] plus a Matern-3/2 drift term whose
    /// variance is constrained to 1%..10% of the periodic variance.
    Te2ExpMatern {
        variance: f64,
        concentration: f64,
        drift_variance: f64,
        drift_length: f64,
        frequency: f64,
        envelope: f64,
    },
    /// `variance * cos(2 pi f |tau|) * exp(-|tau|/envelope)`
    PeriodicDecay {
        variance: f64,
        frequency: f64,
        envelope: f64,
    },
    /// Diagonal-correlated kernel
    /// `variance * decay^((t+t')/2) * correlation^|t-t'|` used as the prior
    /// on FIR coefficients, convolved with the `input` signal in the
    /// identification pipeline. Not stationary.
    DcInput {
        variance: f64,
        decay: f64,
        correlation: f64,
        input: InputSignal,
    },
}

fn require(cond: bool, msg: impl FnOnce() -> String) -> Result<()> {
    if cond {
        Ok(())
    } else {
        Err(StgpError::Config(msg()))
    }
}

impl TemporalKernelSpec {
    pub fn exponential(variance: f64, length: f64) -> Result<Self> {
        let spec = Self::Exponential { variance, length };
        spec.validate()?;
        Ok(spec)
    }

    pub fn matern32(variance: f64, length: f64) -> Result<Self> {
        let spec = Self::Matern32 { variance, length };
        spec.validate()?;
        Ok(spec)
    }

    pub fn te2_exp(variance: f64, concentration: f64, frequency: f64, envelope: f64) -> Result<Self> {
        let spec = Self::Te2Exp {
            variance,
            concentration,
            frequency,
            envelope,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn te2_exp_matern(
        variance: f64,
        concentration: f64,
        drift_variance: f64,
        drift_length: f64,
        frequency: f64,
        envelope: f64,
    ) -> Result<Self> {
        let spec = Self::Te2ExpMatern {
            variance,
            concentration,
            drift_variance,
            drift_length,
            frequency,
            envelope,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn periodic_decay(variance: f64, frequency: f64, envelope: f64) -> Result<Self> {
        let spec = Self::PeriodicDecay {
            variance,
            frequency,
            envelope,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn dc_input(variance: f64, decay: f64, correlation: f64, input: InputSignal) -> Result<Self> {
        let spec = Self::DcInput {
            variance,
            decay,
            correlation,
            input,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        let pos = |v: f64, name: &str| {
            require(v > 0.0 && !v.is_nan(), || {
                format!("{name} must be > 0, got {v}")
            })
        };
        match *self {
            Self::Exponential { variance, length } => {
                pos(variance, "variance")?;
                pos(length, "length")
            }
            Self::Matern32 { variance, length } => {
                pos(variance, "variance")?;
                pos(length, "length")
            }
            Self::Te2Exp {
                variance,
                concentration,
                frequency,
                envelope,
            } => {
                pos(variance, "variance")?;
                require(concentration > 0.0 && concentration < 1.0, || {
                    format!("concentration must lie in (0, 1), got {concentration}")
                })?;
                require(frequency >= 0.0 && frequency.is_finite(), || {
                    format!("frequency must be a finite nonnegative real, got {frequency}")
                })?;
                pos(envelope, "envelope")
            }
            Self::Te2ExpMatern {
                variance,
                concentration,
                drift_variance,
                drift_length,
                frequency,
                envelope,
            } => {
                pos(variance, "variance")?;
                require(concentration > 0.0 && concentration < 1.0, || {
                    format!("concentration must lie in (0, 1), got {concentration}")
                })?;
                pos(drift_variance, "drift_variance")?;
                pos(drift_length, "drift_length")?;
                require(frequency >= 0.0 && frequency.is_finite(), || {
                    format!("frequency must be a finite nonnegative real, got {frequency}")
                })?;
                pos(envelope, "envelope")?;
                // The drift term must stay a small perturbation of the
                // periodic part: 0.01 * variance <= drift_variance <= 0.1 * variance.
                let slack = 1e-12 * variance;
                require(
                    drift_variance >= 0.01 * variance - slack
                        && drift_variance <= 0.1 * variance + slack,
                    || {
                        format!(
                            "drift_variance {drift_variance} outside [{}, {}]",
                            0.01 * variance,
                            0.1 * variance
                        )
                    },
                )
            }
            Self::PeriodicDecay {
                variance,
                frequency,
                envelope,
            } => {
                pos(variance, "variance")?;
                require(frequency >= 0.0 && frequency.is_finite(), || {
                    format!("frequency must be a finite nonnegative real, got {frequency}")
                })?;
                pos(envelope, "envelope")
            }
            Self::DcInput {
                variance,
                decay,
                correlation,
                input,
            } => {
                pos(variance, "variance")?;
                require((0.0..1.0).contains(&decay), || {
                    format!("decay must lie in [0, 1), got {decay}")
                })?;
                require(correlation.abs() <= 1.0, || {
                    format!("correlation must lie in [-1, 1], got {correlation}")
                })?;
                InputSignal::new(input.damping, input.angular_freq).map(|_| ())
            }
        }
    }

    pub fn is_stationary(&self) -> bool {
        !matches!(self, Self::DcInput { .. })
    }

    /// Kernel value at lag `tau` for stationary families.
    pub fn eval_lag(&self, tau: f64) -> Result<f64> {
        if !tau.is_finite() {
            return Err(StgpError::Input(format!("lag must be finite, got {tau}")));
        }
        let t = tau.abs();
        match *self {
            Self::Exponential { variance, length } => Ok(variance * (-t / length).exp()),
            Self::Matern32 { variance, length } => {
                let s = SQRT3 * t / length;
                Ok(variance * (1.0 + s) * (-s).exp())
            }
            Self::Te2Exp {
                variance,
                concentration,
                frequency,
                envelope,
            } => Ok(te2_value(variance, concentration, frequency, t) * (-t / envelope).exp()),
            Self::Te2ExpMatern {
                variance,
                concentration,
                drift_variance,
                drift_length,
                frequency,
                envelope,
            } => {
                let periodic =
                    te2_value(variance, concentration, frequency, t) * (-t / envelope).exp();
                let s = SQRT3 * t / drift_length;
                Ok(periodic + drift_variance * (1.0 + s) * (-s).exp())
            }
            Self::PeriodicDecay {
                variance,
                frequency,
                envelope,
            } => Ok(variance
                * (2.0 * std::f64::consts::PI * frequency * t).cos()
                * (-t / envelope).exp()),
            Self::DcInput { .. } => Err(StgpError::Config(
                "the DC kernel is not stationary; evaluate it on a time pair".into(),
            )),
        }
    }

    /// Kernel value on an explicit time pair; works for all families.
    pub fn eval_pair(&self, t1: f64, t2: f64) -> Result<f64> {
        if !t1.is_finite() || !t2.is_finite() {
            return Err(StgpError::Input(format!(
                "times must be finite, got ({t1}, {t2})"
            )));
        }
        match *self {
            Self::DcInput {
                variance,
                decay,
                correlation,
                ..
            } => Ok(variance
                * decay.powf(0.5 * (t1 + t2))
                * correlation.powf((t1 - t2).abs())),
            _ => self.eval_lag(t1 - t2),
        }
    }

    /// Dense temporal Gram matrix over a time grid. Used by the oracle and
    /// by tests; the production path never materializes it.
    pub fn gram(&self, times: &[f64]) -> Result<DMatrix<f64>> {
        if times.is_empty() {
            return Err(StgpError::Input("time grid is empty".into()));
        }
        let n = times.len();
        let mut k = DMatrix::zeros(n, n);
        for j in 0..n {
            for j2 in 0..=j {
                let v = self.eval_pair(times[j], times[j2])?;
                k[(j, j2)] = v;
                k[(j2, j)] = v;
            }
        }
        Ok(k)
    }
}

/// Trigonometric expansion of the second-order Taylor kernel:
/// `variance * [(1 - c + 3c^2/4) + (c - c^2) cos(2 pi f tau) + (c^2/4) cos(4 pi f tau)]`.
pub(crate) fn te2_value(variance: f64, c: f64, f: f64, tau_abs: f64) -> f64 {
    let w = 2.0 * std::f64::consts::PI * f * tau_abs;
    variance * ((1.0 - c + 0.75 * c * c) + (c - c * c) * w.cos() + 0.25 * c * c * (2.0 * w).cos())
}

/// Direct second-order Taylor construction `1 + x + x^2/2` with
/// `x = -2c sin^2(pi f tau)`; kept as an independent route for tests.
pub fn te2_taylor_value(variance: f64, c: f64, f: f64, tau: f64) -> f64 {
    let x = -2.0 * c * (std::f64::consts::PI * f * tau).sin().powi(2);
    variance * (1.0 + x + 0.5 * x * x)
}

// ---------------------------------------------------------------------------
// Hyper-parameter vectors
// ---------------------------------------------------------------------------

/// Coordinate transform applied to one hyper-parameter component during
/// optimization. Log transforms are only valid on strictly positive boxes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ParamTransform {
    Identity,
    Log,
}

impl ParamTransform {
    pub fn forward(self, x: f64) -> f64 {
        match self {
            Self::Identity => x,
            Self::Log => x.ln(),
        }
    }

    pub fn inverse(self, x: f64) -> f64 {
        match self {
            Self::Identity => x,
            Self::Log => x.exp(),
        }
    }
}

/// An ordered vector of free hyper-parameters with per-component boxes and
/// transforms.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HyperParams {
    pub values: Vec<f64>,
    pub bounds: Vec<(f64, f64)>,
    pub transforms: Vec<ParamTransform>,
}

impl HyperParams {
    pub fn new(
        values: Vec<f64>,
        bounds: Vec<(f64, f64)>,
        transforms: Vec<ParamTransform>,
    ) -> Result<Self> {
        if values.len() != bounds.len() || values.len() != transforms.len() {
            return Err(StgpError::Config(format!(
                "hyper-parameter vector has {} values, {} bounds, {} transforms",
                values.len(),
                bounds.len(),
                transforms.len()
            )));
        }
        for (i, ((&v, &(lo, hi)), &tr)) in values
            .iter()
            .zip(&bounds)
            .zip(&transforms)
            .enumerate()
        {
            if !(lo <= hi) || !lo.is_finite() || !hi.is_finite() {
                return Err(StgpError::Config(format!(
                    "component {i} has invalid box [{lo}, {hi}]"
                )));
            }
            if !(v >= lo && v <= hi) {
                return Err(StgpError::Config(format!(
                    "component {i} value {v} outside box [{lo}, {hi}]"
                )));
            }
            if tr == ParamTransform::Log && lo <= 0.0 {
                return Err(StgpError::Config(format!(
                    "component {i} uses a log transform but its box [{lo}, {hi}] is not strictly positive"
                )));
            }
        }
        Ok(Self {
            values,
            bounds,
            transforms,
        })
    }
}

// ---------------------------------------------------------------------------
// Plain-text config parsing
// ---------------------------------------------------------------------------

fn parse_kv(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            return Err(StgpError::Parse {
                file: "<config>".into(),
                line: lineno + 1,
                message: format!("expected `key = value`, got `{line}`"),
            });
        };
        out.push((key.trim().to_string(), value.trim().to_string()));
    }
    Ok(out)
}

fn take_f64(
    pairs: &mut Vec<(String, String)>,
    key: &str,
    default: Option<f64>,
) -> Result<f64> {
    if let Some(idx) = pairs.iter().position(|(k, _)| k == key) {
        let (_, v) = pairs.remove(idx);
        v.parse::<f64>().map_err(|_| StgpError::Config(format!(
            "value `{v}` for key `{key}` is not a number"
        )))
    } else if let Some(d) = default {
        Ok(d)
    } else {
        Err(StgpError::Config(format!("missing required key `{key}`")))
    }
}

fn reject_leftovers(pairs: &[(String, String)]) -> Result<()> {
    if let Some((k, _)) = pairs.first() {
        return Err(StgpError::Config(format!("unknown key `{k}`")));
    }
    Ok(())
}

impl SpatialKernelSpec {
    /// Parses a `key = value` config block with `family = se`.
    pub fn from_config_str(text: &str) -> Result<Self> {
        let mut pairs = parse_kv(text)?;
        let Some(idx) = pairs.iter().position(|(k, _)| k == "family") else {
            return Err(StgpError::Config("missing required key `family`".into()));
        };
        let (_, family) = pairs.remove(idx);
        if family != "se" {
            return Err(StgpError::Config(format!(
                "unknown spatial kernel family `{family}`"
            )));
        }
        let alpha_se = take_f64(&mut pairs, "alpha_se", None)?;
        reject_leftovers(&pairs)?;
        Self::squared_exponential(alpha_se)
    }

    pub fn to_config_string(&self) -> String {
        format!("family = se\nalpha_se = {}\n", self.alpha_se)
    }
}

impl TemporalKernelSpec {
    /// Parses a `key = value` config block; the `family` key selects the
    /// kernel family and the remaining keys are its parameters.
    pub fn from_config_str(text: &str) -> Result<Self> {
        let mut pairs = parse_kv(text)?;
        let Some(idx) = pairs.iter().position(|(k, _)| k == "family") else {
            return Err(StgpError::Config("missing required key `family`".into()));
        };
        let (_, family) = pairs.remove(idx);
        let spec = match family.as_str() {
            "exp" => Self::exponential(
                take_f64(&mut pairs, "variance", None)?,
                take_f64(&mut pairs, "length", None)?,
            )?,
            "matern32" => Self::matern32(
                take_f64(&mut pairs, "variance", None)?,
                take_f64(&mut pairs, "length", None)?,
            )?,
            "te2exp" => Self::te2_exp(
                take_f64(&mut pairs, "variance", None)?,
                take_f64(&mut pairs, "concentration", None)?,
                take_f64(&mut pairs, "frequency", None)?,
                take_f64(&mut pairs, "envelope", Some(5e3))?,
            )?,
            "te2exp+matern" => Self::te2_exp_matern(
                take_f64(&mut pairs, "variance", None)?,
                take_f64(&mut pairs, "concentration", None)?,
                take_f64(&mut pairs, "drift_variance", None)?,
                take_f64(&mut pairs, "drift_length", None)?,
                take_f64(&mut pairs, "frequency", None)?,
                take_f64(&mut pairs, "envelope", Some(5e3))?,
            )?,
            "pd" => Self::periodic_decay(
                take_f64(&mut pairs, "variance", None)?,
                take_f64(&mut pairs, "frequency", None)?,
                take_f64(&mut pairs, "envelope", None)?,
            )?,
            "dc-input" => Self::dc_input(
                take_f64(&mut pairs, "variance", None)?,
                take_f64(&mut pairs, "decay", None)?,
                take_f64(&mut pairs, "correlation", None)?,
                InputSignal::new(
                    take_f64(&mut pairs, "input_damping", Some(1e-2))?,
                    take_f64(&mut pairs, "input_angular_freq", Some(std::f64::consts::PI / 8.0))?,
                )?,
            )?,
            other => {
                return Err(StgpError::Config(format!(
                    "unknown temporal kernel family `{other}`"
                )))
            }
        };
        reject_leftovers(&pairs)?;
        Ok(spec)
    }

    pub fn to_config_string(&self) -> String {
        match *self {
            Self::Exponential { variance, length } => {
                format!("family = exp\nvariance = {variance}\nlength = {length}\n")
            }
            Self::Matern32 { variance, length } => {
                format!("family = matern32\nvariance = {variance}\nlength = {length}\n")
            }
            Self::Te2Exp {
                variance,
                concentration,
                frequency,
                envelope,
            } => format!(
                "family = te2exp\nvariance = {variance}\nconcentration = {concentration}\nfrequency = {frequency}\nenvelope = {envelope}\n"
            ),
            Self::Te2ExpMatern {
                variance,
                concentration,
                drift_variance,
                drift_length,
                frequency,
                envelope,
            } => format!(
                "family = te2exp+matern\nvariance = {variance}\nconcentration = {concentration}\ndrift_variance = {drift_variance}\ndrift_length = {drift_length}\nfrequency = {frequency}\nenvelope = {envelope}\n"
            ),
            Self::PeriodicDecay {
                variance,
                frequency,
                envelope,
            } => format!(
                "family = pd\nvariance = {variance}\nfrequency = {frequency}\nenvelope = {envelope}\n"
            ),
            Self::DcInput {
                variance,
                decay,
                correlation,
                input,
            } => format!(
                "family = dc-input\nvariance = {variance}\ndecay = {decay}\ncorrelation = {correlation}\ninput_damping = {}\ninput_angular_freq = {}\n",
                input.damping, input.angular_freq
            ),
        }
    }
}
