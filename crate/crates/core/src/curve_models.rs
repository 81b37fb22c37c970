//! Parametric learning-curve families and their ensemble.
//!
//! Every family `f(t)` is written in its "accuracy-like" orientation: the
//! bounds make it non-decreasing in the epoch `t` for every admissible
//! parameter vector. A validation error curve is modelled by the
//! minimized form `offset - f(t)`, and an ensemble is a convex combination of
//! minimized families.
//!
//! Parameters live in *normalized* units: the inference layer divides a curve
//! by its largest observed value before fitting, so that observations lie in
//! `[0, 1]`. The bounds below keep every family inside `[-Y_CAP, Y_CAP]` for
//! all epochs in `[1, T_MAX]`, where `Y_CAP` is ten times the largest
//! observation. Offsets live in `[0, Y_CAP]`.
//!
//! | family          | formula                                   | parameters (bounds)                                               |
//! |-----------------|-------------------------------------------|-------------------------------------------------------------------|
//! | vapor-pressure  | `exp(a + b/t + c ln t)`                   | a [-4, 1], b [-4, 0], c [0, 0.1]                                  |
//! | pow3            | `c - a t^-α`                              | c [-5, 5], a [0, 5], α [0.01, 3]                                  |
//! | log-log-linear  | `ln(a ln t + b)`                          | a [0, 10], b [0.01, 10]                                           |
//! | hill3           | `ymax t^η / (κ^η + t^η)`                  | ymax [0, 10], η [0.01, 5], κ [0.01, 500]                          |
//! | log-power       | `a / (1 + (t / e^b)^c)`                   | a [0, 10], b [-5, 10], c [-5, 0]                                  |
//! | pow4            | `c - (a t + b)^-α`                        | c [0, 5], a [0.1, 5], b [0, 5], α [0.01, 1]                       |
//! | mmf             | `α - (α - β) / (1 + (κ t)^d)`             | α [0, 5], β [-5, 0], κ [0.001, 10], d [0.01, 5]                   |
//! | exp4            | `c - exp(-a t^α + b)`                     | c [-5, 5], a [0, 5], b [-5, 1.6], α [0.01, 2]                     |
//! | janoschek       | `α - (α - β) exp(-κ t^d)`                 | α [0, 5], β [-5, 0], κ [0, 5], d [0.01, 2]                        |
//! | weibull         | `α - (α - β) exp(-(κ t)^d)`               | α [0, 5], β [-5, 0], κ [0.001, 10], d [0.01, 5]                   |
//! | ilog2           | `c - a / ln(t + 1)`                       | c [-2.5, 2.5], a [0, 5]                                           |

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Cap on family values and offsets, in normalized units (ten times the largest observation).
pub const Y_CAP: f64 = 10.0;

/// Largest epoch for which the family bounds guarantee finite values inside `[-Y_CAP, Y_CAP]`.
pub const T_MAX: u32 = 10_000;

/// Tolerance on the weight simplex.
pub const WEIGHT_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelFamily {
    VaporPressure,
    Pow3,
    LogLogLinear,
    Hill3,
    LogPower,
    Pow4,
    Mmf,
    Exp4,
    Janoschek,
    Weibull,
    Ilog2,
}

const VAPOR_PRESSURE_BOUNDS: [(f64, f64); 3] = [(-4.0, 1.0), (-4.0, 0.0), (0.0, 0.1)];
const POW3_BOUNDS: [(f64, f64); 3] = [(-5.0, 5.0), (0.0, 5.0), (0.01, 3.0)];
const LOG_LOG_LINEAR_BOUNDS: [(f64, f64); 2] = [(0.0, 10.0), (0.01, 10.0)];
const HILL3_BOUNDS: [(f64, f64); 3] = [(0.0, 10.0), (0.01, 5.0), (0.01, 500.0)];
const LOG_POWER_BOUNDS: [(f64, f64); 3] = [(0.0, 10.0), (-5.0, 10.0), (-5.0, 0.0)];
const POW4_BOUNDS: [(f64, f64); 4] = [(0.0, 5.0), (0.1, 5.0), (0.0, 5.0), (0.01, 1.0)];
const MMF_BOUNDS: [(f64, f64); 4] = [(0.0, 5.0), (-5.0, 0.0), (0.001, 10.0), (0.01, 5.0)];
const EXP4_BOUNDS: [(f64, f64); 4] = [(-5.0, 5.0), (0.0, 5.0), (-5.0, 1.6), (0.01, 2.0)];
const JANOSCHEK_BOUNDS: [(f64, f64); 4] = [(0.0, 5.0), (-5.0, 0.0), (0.0, 5.0), (0.01, 2.0)];
const WEIBULL_BOUNDS: [(f64, f64); 4] = [(0.0, 5.0), (-5.0, 0.0), (0.001, 10.0), (0.01, 5.0)];
const ILOG2_BOUNDS: [(f64, f64); 2] = [(-2.5, 2.5), (0.0, 5.0)];

impl ModelFamily {
    pub const ALL: [ModelFamily; 11] = [
        ModelFamily::VaporPressure,
        ModelFamily::Pow3,
        ModelFamily::LogLogLinear,
        ModelFamily::Hill3,
        ModelFamily::LogPower,
        ModelFamily::Pow4,
        ModelFamily::Mmf,
        ModelFamily::Exp4,
        ModelFamily::Janoschek,
        ModelFamily::Weibull,
        ModelFamily::Ilog2,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ModelFamily::VaporPressure => "vapor-pressure",
            ModelFamily::Pow3 => "pow3",
            ModelFamily::LogLogLinear => "log-log-linear",
            ModelFamily::Hill3 => "hill3",
            ModelFamily::LogPower => "log-power",
            ModelFamily::Pow4 => "pow4",
            ModelFamily::Mmf => "mmf",
            ModelFamily::Exp4 => "exp4",
            ModelFamily::Janoschek => "janoschek",
            ModelFamily::Weibull => "weibull",
            ModelFamily::Ilog2 => "ilog2",
        }
    }

    pub fn param_names(self) -> &'static [&'static str] {
        match self {
            ModelFamily::VaporPressure => &["a", "b", "c"],
            ModelFamily::Pow3 => &["c", "a", "alpha"],
            ModelFamily::LogLogLinear => &["a", "b"],
            ModelFamily::Hill3 => &["ymax", "eta", "kappa"],
            ModelFamily::LogPower => &["a", "b", "c"],
            ModelFamily::Pow4 => &["c", "a", "b", "alpha"],
            ModelFamily::Mmf => &["alpha", "beta", "kappa", "d"],
            ModelFamily::Exp4 => &["c", "a", "b", "alpha"],
            ModelFamily::Janoschek => &["alpha", "beta", "kappa", "d"],
            ModelFamily::Weibull => &["alpha", "beta", "kappa", "d"],
            ModelFamily::Ilog2 => &["c", "a"],
        }
    }

    pub fn bounds(self) -> &'static [(f64, f64)] {
        match self {
            ModelFamily::VaporPressure => &VAPOR_PRESSURE_BOUNDS,
            ModelFamily::Pow3 => &POW3_BOUNDS,
            ModelFamily::LogLogLinear => &LOG_LOG_LINEAR_BOUNDS,
            ModelFamily::Hill3 => &HILL3_BOUNDS,
            ModelFamily::LogPower => &LOG_POWER_BOUNDS,
            ModelFamily::Pow4 => &POW4_BOUNDS,
            ModelFamily::Mmf => &MMF_BOUNDS,
            ModelFamily::Exp4 => &EXP4_BOUNDS,
            ModelFamily::Janoschek => &JANOSCHEK_BOUNDS,
            ModelFamily::Weibull => &WEIBULL_BOUNDS,
            ModelFamily::Ilog2 => &ILOG2_BOUNDS,
        }
    }

    pub fn arity(self) -> usize {
        self.bounds().len()
    }

    pub fn contains(self, params: &[f64]) -> bool {
        params.len() == self.arity()
            && params
                .iter()
                .zip(self.bounds())
                .all(|(p, &(lo, hi))| *p >= lo && *p <= hi)
    }

    /// `f_θ(t)`, checked: parameters must be inside the bounds and `t >= 1`.
    pub fn eval(self, params: &[f64], t: u32) -> Result<f64> {
        if t < 1 {
            return Err(Error::domain(format!("epoch must be >= 1, got {t}")));
        }
        if !self.contains(params) {
            return Err(Error::domain(format!(
                "{} parameters {params:?} outside bounds {:?}",
                self.name(),
                self.bounds()
            )));
        }
        let t = f64::from(t);
        Ok(self.eval_raw(params, t, t.ln()))
    }

    /// Unchecked evaluation with `ln t` precomputed. Hot path of the sampler.
    #[inline]
    pub(crate) fn eval_raw(self, p: &[f64], t: f64, ln_t: f64) -> f64 {
        match self {
            ModelFamily::VaporPressure => (p[0] + p[1] / t + p[2] * ln_t).exp(),
            ModelFamily::Pow3 => p[0] - p[1] * (-p[2] * ln_t).exp(),
            ModelFamily::LogLogLinear => (p[0] * ln_t + p[1]).ln(),
            ModelFamily::Hill3 => p[0] / (1.0 + (p[1] * (p[2].ln() - ln_t)).exp()),
            ModelFamily::LogPower => p[0] / (1.0 + (p[2] * (ln_t - p[1])).exp()),
            ModelFamily::Pow4 => p[0] - (-p[3] * (p[1] * t + p[2]).ln()).exp(),
            ModelFamily::Mmf => p[0] - (p[0] - p[1]) / (1.0 + (p[3] * (p[2].ln() + ln_t)).exp()),
            ModelFamily::Exp4 => p[0] - (-p[1] * (p[3] * ln_t).exp() + p[2]).exp(),
            ModelFamily::Janoschek => p[0] - (p[0] - p[1]) * (-p[2] * (p[3] * ln_t).exp()).exp(),
            ModelFamily::Weibull => {
                p[0] - (p[0] - p[1]) * (-(p[3] * (p[2].ln() + ln_t)).exp()).exp()
            }
            ModelFamily::Ilog2 => p[0] - p[1] / (t + 1.0).ln(),
        }
    }

    /// Minimized form `offset - f_θ(t)`, used to model an error curve.
    pub fn eval_minimized(self, params: &[f64], offset: f64, t: u32) -> Result<f64> {
        if !(0.0..=Y_CAP).contains(&offset) {
            return Err(Error::domain(format!(
                "offset {offset} outside [0, {Y_CAP}]"
            )));
        }
        Ok(offset - self.eval(params, t)?)
    }

    /// Uniform draw inside the bounds.
    pub fn sample_params<R: Rng + ?Sized>(self, rng: &mut R) -> Vec<f64> {
        self.bounds()
            .iter()
            .map(|&(lo, hi)| lo + (hi - lo) * rng.random::<f64>())
            .collect()
    }
}

impl fmt::Display for ModelFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ModelFamily {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ModelFamily::ALL
            .into_iter()
            .find(|f| f.name() == s)
            .ok_or_else(|| Error::domain(format!("unknown model family {s:?}")))
    }
}

pub fn eval_model(family: ModelFamily, params: &[f64], t: u32) -> Result<f64> {
    family.eval(params, t)
}

pub fn eval_minimized(family: ModelFamily, params: &[f64], offset: f64, t: u32) -> Result<f64> {
    family.eval_minimized(params, offset, t)
}

/// One weighted member of an ensemble.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Component {
    pub family: ModelFamily,
    pub weight: f64,
    pub params: Vec<f64>,
    pub offset: f64,
}

/// One posterior draw over the ensemble modelling space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnsembleSample {
    pub components: Vec<Component>,
    pub noise_sigma: f64,
}

impl EnsembleSample {
    pub fn validate(&self) -> Result<()> {
        if self.components.is_empty() {
            return Err(Error::domain("ensemble has no components"));
        }
        let mut total = 0.0;
        for c in &self.components {
            if !(c.weight >= 0.0) {
                return Err(Error::domain(format!("negative weight {}", c.weight)));
            }
            if !c.family.contains(&c.params) {
                return Err(Error::domain(format!(
                    "{} parameters {:?} outside bounds",
                    c.family, c.params
                )));
            }
            if !(0.0..=Y_CAP).contains(&c.offset) {
                return Err(Error::domain(format!("offset {} outside [0, {Y_CAP}]", c.offset)));
            }
            total += c.weight;
        }
        if (total - 1.0).abs() > WEIGHT_TOLERANCE {
            return Err(Error::domain(format!("weights sum to {total}, not 1")));
        }
        if !(self.noise_sigma > 0.0) {
            return Err(Error::domain(format!(
                "noise sigma must be positive, got {}",
                self.noise_sigma
            )));
        }
        Ok(())
    }

    /// Ensemble value without validation; `t` is real-valued.
    pub(crate) fn eval_raw(&self, t: f64) -> f64 {
        let ln_t = t.ln();
        self.components
            .iter()
            .filter(|c| c.weight > 0.0)
            .map(|c| c.weight * (c.offset - c.family.eval_raw(&c.params, t, ln_t)))
            .sum()
    }
}

/// `Σ_k w_k (θ'_k − f_k(t))`.
pub fn eval_ensemble(sample: &EnsembleSample, t: u32) -> Result<f64> {
    sample.validate()?;
    if t < 1 {
        return Err(Error::domain(format!("epoch must be >= 1, got {t}")));
    }
    Ok(sample.eval_raw(f64::from(t)))
}

/// Starting point for one family in the sampler.
#[derive(Debug, Clone, PartialEq)]
pub struct InitialGuess {
    pub params: Vec<f64>,
    pub offset: f64,
}

/// Draws parameters uniformly inside the family bounds, then picks the offset
/// that matches the mean level of `curve` (clamped to `[0, Y_CAP]`).
///
/// `curve[i]` is the observation at epoch `i + 1`; non-finite entries are ignored.
pub fn init_params<R: Rng + ?Sized>(
    family: ModelFamily,
    curve: &[f64],
    rng: &mut R,
) -> Result<InitialGuess> {
    let observed: Vec<(f64, f64)> = curve
        .iter()
        .enumerate()
        .filter(|(_, y)| y.is_finite())
        .map(|(i, &y)| ((i + 1) as f64, y))
        .collect();
    if observed.is_empty() {
        return Err(Error::InsufficientData {
            observed: 0,
            required: 1,
        });
    }
    let params = family.sample_params(rng);
    let n = observed.len() as f64;
    let mean_gap = observed
        .iter()
        .map(|&(t, y)| y + family.eval_raw(&params, t, t.ln()))
        .sum::<f64>()
        / n;
    let offset = if mean_gap.is_finite() {
        mean_gap.clamp(0.0, Y_CAP)
    } else {
        0.0
    };
    Ok(InitialGuess { params, offset })
}
