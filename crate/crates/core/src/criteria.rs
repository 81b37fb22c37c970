//! Halting criteria.
//!
//! All criteria halt a run when the probability that its predicted error at
//! the horizon falls strictly below a comparison threshold `tau` is less than
//! δ. They differ in how `tau` is built:
//!
//! - `a`: the current best observed error `y*(t)`;
//! - `b`: the point estimate of the current best run;
//! - `c`: the conservative estimate of the current best run;
//! - `d`: the smallest point estimate over runs;
//! - `e`: the smallest conservative estimate over runs;
//! - `f`: the k-th smallest conservative estimate, with k from [`select_k`].
//!
//! A run is never compared with a threshold built from its own statistics:
//! each run's threshold is computed over the other alive runs (the reported
//! epoch threshold is the one every non-contributing run sees). A run with no
//! competitor is never halted.
//!
//! Conservative estimates enter thresholds as `max(conservative, point)`, the
//! upper estimate, so that thresholds of c and e dominate those of b and d.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use statrs::function::erf::erfc;

use crate::error::{Error, Result};
use crate::inference::{prob_below, Epoch, Prediction, RunId};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Criterion {
    #[serde(rename = "a")]
    A,
    #[serde(rename = "b")]
    B,
    #[serde(rename = "c")]
    C,
    #[serde(rename = "d")]
    D,
    #[serde(rename = "e")]
    E,
    #[serde(rename = "f")]
    F,
    #[serde(rename = "successive-halving")]
    SuccessiveHalving,
}

impl Criterion {
    /// The six prediction-threshold criteria, without the baseline.
    pub const HALTING: [Criterion; 6] = [
        Criterion::A,
        Criterion::B,
        Criterion::C,
        Criterion::D,
        Criterion::E,
        Criterion::F,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Criterion::A => "a",
            Criterion::B => "b",
            Criterion::C => "c",
            Criterion::D => "d",
            Criterion::E => "e",
            Criterion::F => "f",
            Criterion::SuccessiveHalving => "successive-halving",
        }
    }

    pub fn uses_predictions(self) -> bool {
        self != Criterion::SuccessiveHalving
    }
}

impl fmt::Display for Criterion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Criterion {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "a" => Ok(Criterion::A),
            "b" => Ok(Criterion::B),
            "c" => Ok(Criterion::C),
            "d" => Ok(Criterion::D),
            "e" => Ok(Criterion::E),
            "f" => Ok(Criterion::F),
            "sh" | "successive-halving" => Ok(Criterion::SuccessiveHalving),
            other => Err(Error::domain(format!("unknown criterion {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HaltPolicy {
    pub criterion: Criterion,
    pub delta: f64,
    pub guards_enabled: bool,
    pub warmup_epochs: Epoch,
    pub k_override: Option<usize>,
}

impl HaltPolicy {
    pub fn new(criterion: Criterion, delta: f64) -> Self {
        HaltPolicy {
            criterion,
            delta,
            guards_enabled: false,
            warmup_epochs: 5,
            k_override: None,
        }
    }

    pub fn with_guards(mut self, enabled: bool) -> Self {
        self.guards_enabled = enabled;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.delta) {
            return Err(Error::domain(format!("delta {} outside [0, 1]", self.delta)));
        }
        if self.warmup_epochs < 1 {
            return Err(Error::domain("warmup_epochs must be >= 1"));
        }
        if self.k_override == Some(0) {
            return Err(Error::domain("k_override must be >= 1"));
        }
        Ok(())
    }

    /// False when no run can ever be halted (δ = 0 for the threshold criteria).
    pub fn can_halt(&self) -> bool {
        !self.criterion.uses_predictions() || self.delta > 0.0
    }
}

/// `P(N(0,1) >= z)`.
pub fn normal_upper_tail(z: f64) -> f64 {
    if z.is_nan() {
        return f64::NAN;
    }
    0.5 * erfc(z / std::f64::consts::SQRT_2)
}

/// Smallest `k >= 1` with `P(N(0,1) >= (k − nδ)/sqrt(nδ(1−δ))) <= δ`, clamped to `[1, n]`.
///
/// The Gaussian approximation bounds by δ the probability that at least k of
/// the n curve models are wrong.
pub fn select_k(n: usize, delta: f64) -> Result<usize> {
    if n == 0 {
        return Err(Error::domain("select_k needs n >= 1"));
    }
    if !(delta > 0.0 && delta < 1.0) {
        return Err(Error::domain(format!("delta {delta} outside (0, 1)")));
    }
    let nf = n as f64;
    let mean = nf * delta;
    let sd = (nf * delta * (1.0 - delta)).sqrt();
    Ok((1..=n)
        .find(|&k| normal_upper_tail((k as f64 - mean) / sd) <= delta)
        .unwrap_or(n))
}

fn k_for(n: usize, delta: f64, k_override: Option<usize>) -> usize {
    let k = match k_override {
        Some(k) => k,
        // δ ∈ {0, 1} are the degenerate limits of the tail inequality, both satisfied by k = 1.
        None => select_k(n, delta).unwrap_or(1),
    };
    k.clamp(1, n.max(1))
}

/// What the criteria see of one alive run at a decision epoch.
#[derive(Debug, Clone, PartialEq)]
pub struct RunSnapshot {
    pub run_id: RunId,
    pub current_error: f64,
    /// Prediction at the horizon, if one was computed. Its validity reflects
    /// the active policy.
    pub prediction: Option<Prediction>,
}

impl RunSnapshot {
    fn valid_prediction(&self) -> Option<&Prediction> {
        self.prediction.as_ref().filter(|p| p.is_valid())
    }
}

/// Upper estimate used by the conservative criteria.
pub fn upper_estimate(p: &Prediction) -> f64 {
    p.conservative_estimate.max(p.point_estimate)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdSpec {
    pub criterion: Criterion,
    pub tau: f64,
    pub k_used: Option<usize>,
    pub source_run: Option<RunId>,
    /// True when a prediction criterion had no valid prediction to use and fell back to `a`.
    pub fallback: bool,
}

/// Current best: smallest observed error, ties to the lowest run id.
pub fn current_best<'a, I>(runs: I) -> Option<&'a RunSnapshot>
where
    I: IntoIterator<Item = &'a RunSnapshot>,
{
    runs.into_iter().fold(None, |best: Option<&RunSnapshot>, r| match best {
        Some(b)
            if b.current_error < r.current_error
                || (b.current_error == r.current_error && b.run_id <= r.run_id) =>
        {
            Some(b)
        }
        _ => Some(r),
    })
}

fn argmin_by<'a>(
    runs: &[&'a RunSnapshot],
    key: impl Fn(&RunSnapshot) -> f64,
) -> Option<&'a RunSnapshot> {
    runs.iter().copied().fold(None, |best: Option<&RunSnapshot>, r| match best {
        Some(b) if key(b) < key(r) || (key(b) == key(r) && b.run_id <= r.run_id) => Some(b),
        _ => Some(r),
    })
}

/// Threshold over an arbitrary subset of runs; `k` is fixed by the caller for f.
fn threshold_over(
    criterion: Criterion,
    runs: &[&RunSnapshot],
    k: usize,
) -> Option<ThresholdSpec> {
    let best = current_best(runs.iter().copied())?;
    let fallback = || ThresholdSpec {
        criterion,
        tau: best.current_error,
        k_used: None,
        source_run: Some(best.run_id.clone()),
        fallback: criterion != Criterion::A,
    };
    let valid: Vec<&RunSnapshot> = runs
        .iter()
        .copied()
        .filter(|r| r.valid_prediction().is_some())
        .collect();
    let pred = |r: &RunSnapshot| r.valid_prediction().expect("filtered on validity").clone();
    let spec = |tau: f64, source: &RunSnapshot, k_used: Option<usize>| ThresholdSpec {
        criterion,
        tau,
        k_used,
        source_run: Some(source.run_id.clone()),
        fallback: false,
    };
    Some(match criterion {
        Criterion::A | Criterion::SuccessiveHalving => fallback(),
        Criterion::B => match best.valid_prediction() {
            Some(p) => spec(p.point_estimate, best, None),
            None => fallback(),
        },
        Criterion::C => match best.valid_prediction() {
            Some(p) => spec(upper_estimate(p), best, None),
            None => fallback(),
        },
        Criterion::D => match argmin_by(&valid, |r| pred(r).point_estimate) {
            Some(src) => spec(pred(src).point_estimate, src, None),
            None => fallback(),
        },
        Criterion::E => match argmin_by(&valid, |r| upper_estimate(&pred(r))) {
            Some(src) => spec(upper_estimate(&pred(src)), src, None),
            None => fallback(),
        },
        Criterion::F => {
            if valid.is_empty() {
                fallback()
            } else {
                let mut ranked: Vec<(f64, &RunSnapshot)> = valid
                    .iter()
                    .map(|r| (upper_estimate(&pred(r)), *r))
                    .collect();
                ranked.sort_by(|x, y| x.0.total_cmp(&y.0).then_with(|| x.1.run_id.cmp(&y.1.run_id)));
                let k_eff = k.clamp(1, ranked.len());
                let (tau, src) = ranked[k_eff - 1];
                spec(tau, src, Some(k_eff))
            }
        }
    })
}

fn valid_count(runs: &[RunSnapshot]) -> usize {
    runs.iter().filter(|r| r.valid_prediction().is_some()).count()
}

/// Epoch threshold over all alive runs.
pub fn compute_threshold(
    criterion: Criterion,
    runs: &[RunSnapshot],
    delta: f64,
    k_override: Option<usize>,
) -> Result<ThresholdSpec> {
    if runs.is_empty() {
        return Err(Error::domain("no alive runs"));
    }
    let k = k_for(valid_count(runs), delta, k_override);
    let all: Vec<&RunSnapshot> = runs.iter().collect();
    Ok(threshold_over(criterion, &all, k).expect("non-empty"))
}

/// Threshold seen by `run`: computed over the other runs with the epoch's k.
pub fn threshold_excluding(
    criterion: Criterion,
    runs: &[RunSnapshot],
    delta: f64,
    k_override: Option<usize>,
    run: &RunId,
) -> Option<ThresholdSpec> {
    let k = k_for(valid_count(runs), delta, k_override);
    let others: Vec<&RunSnapshot> = runs.iter().filter(|r| &r.run_id != run).collect();
    threshold_over(criterion, &others, k)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Decision {
    Continue,
    Halt,
}

/// Halt iff `prob_below(prediction, tau) < δ`, strictly.
pub fn decide(prediction: &Prediction, tau: f64, delta: f64) -> Decision {
    if prob_below(prediction, tau) < delta {
        Decision::Halt
    } else {
        Decision::Continue
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Reason {
    /// Compared against its threshold.
    Threshold,
    /// Too few epochs observed for any decision.
    Warmup,
    /// The policy cannot halt anything (δ = 0).
    NoHalting,
    /// No prediction could be computed for this run.
    NoPrediction,
    /// No other alive run to compare against.
    NoCompetitor,
    /// Guard: the current best is never halted.
    GuardCurrentBest,
    /// Guard: invalid prediction, decided against criterion a's threshold.
    GuardInvalidPrediction,
    /// Successive-halving rung.
    SuccessiveHalving,
    /// Non-finite observation.
    DataError,
    /// Reached the horizon.
    Finished,
    /// Advisory protocol: waiting for the other runs to report this epoch.
    PendingBarrier,
}

impl Reason {
    pub fn as_str(self) -> &'static str {
        match self {
            Reason::Threshold => "threshold",
            Reason::Warmup => "warmup",
            Reason::NoHalting => "no-halting",
            Reason::NoPrediction => "no-prediction",
            Reason::NoCompetitor => "no-competitor",
            Reason::GuardCurrentBest => "guard-current-best",
            Reason::GuardInvalidPrediction => "guard-invalid-prediction",
            Reason::SuccessiveHalving => "successive-halving",
            Reason::DataError => "data-error",
            Reason::Finished => "finished",
            Reason::PendingBarrier => "pending-barrier",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunDecision {
    pub decision: Decision,
    pub reason: Reason,
    pub tau: Option<f64>,
    pub probability: Option<f64>,
}

impl RunDecision {
    pub fn cont(reason: Reason) -> Self {
        RunDecision {
            decision: Decision::Continue,
            reason,
            tau: None,
            probability: None,
        }
    }

    pub fn is_halt(&self) -> bool {
        self.decision == Decision::Halt
    }
}

pub type DecisionMap = BTreeMap<RunId, RunDecision>;

fn compare(prediction: Option<&Prediction>, tau: f64, delta: f64, reason: Reason) -> RunDecision {
    match prediction {
        Some(p) => RunDecision {
            decision: decide(p, tau, delta),
            reason,
            tau: Some(tau),
            probability: Some(prob_below(p, tau)),
        },
        None => RunDecision::cont(Reason::NoPrediction),
    }
}

/// Raw decisions for every run, before guards.
pub fn raw_decisions(policy: &HaltPolicy, runs: &[RunSnapshot]) -> DecisionMap {
    runs.iter()
        .map(|r| {
            let d = match threshold_excluding(
                policy.criterion,
                runs,
                policy.delta,
                policy.k_override,
                &r.run_id,
            ) {
                None => RunDecision::cont(Reason::NoCompetitor),
                Some(th) => compare(r.prediction.as_ref(), th.tau, policy.delta, Reason::Threshold),
            };
            (r.run_id.clone(), d)
        })
        .collect()
}

/// Conservative rules. When enabled: the current best is forced to continue,
/// and a run whose prediction is invalid is not halted by a prediction-based
/// threshold (b–f) but is still held to criterion a's threshold. Disabled
/// guards pass decisions through untouched.
pub fn apply_guards(
    decisions: DecisionMap,
    runs: &[RunSnapshot],
    policy: &HaltPolicy,
) -> DecisionMap {
    if !policy.guards_enabled {
        return decisions;
    }
    let best = current_best(runs).map(|b| b.run_id.clone());
    let mut out = decisions;
    for r in runs {
        let Some(d) = out.get_mut(&r.run_id) else {
            continue;
        };
        if Some(&r.run_id) == best.as_ref() {
            if d.is_halt() {
                *d = RunDecision {
                    decision: Decision::Continue,
                    reason: Reason::GuardCurrentBest,
                    ..d.clone()
                };
            }
            continue;
        }
        let prediction_based = matches!(
            policy.criterion,
            Criterion::B | Criterion::C | Criterion::D | Criterion::E | Criterion::F
        );
        let invalid = r.prediction.as_ref().is_some_and(|p| !p.is_valid());
        if prediction_based && invalid && d.reason == Reason::Threshold {
            *d = match threshold_excluding(Criterion::A, runs, policy.delta, None, &r.run_id) {
                Some(th) => compare(
                    r.prediction.as_ref(),
                    th.tau,
                    policy.delta,
                    Reason::GuardInvalidPrediction,
                ),
                None => RunDecision::cont(Reason::NoCompetitor),
            };
        }
    }
    out
}

/// Successive-halving rung epochs `⌊T / 2^j⌋`, j ≥ 1, that fall in `[warmup, T)`.
pub fn halving_rungs(horizon: Epoch, warmup: Epoch) -> Vec<Epoch> {
    let mut rungs: Vec<Epoch> = (1..32)
        .map(|j| horizon >> j)
        .take_while(|&e| e >= 1)
        .filter(|&e| e >= warmup && e < horizon)
        .collect();
    rungs.sort_unstable();
    rungs.dedup();
    rungs
}

/// At a rung, halts the worst `⌈n/2⌉` runs by current error, keeping at least one.
pub fn successive_halving(runs: &[RunSnapshot], is_rung: bool) -> DecisionMap {
    let mut order: Vec<&RunSnapshot> = runs.iter().collect();
    order.sort_by(|a, b| {
        a.current_error
            .total_cmp(&b.current_error)
            .then_with(|| a.run_id.cmp(&b.run_id))
    });
    let n = order.len();
    let halted = if is_rung { n.div_ceil(2).min(n.saturating_sub(1)) } else { 0 };
    order
        .iter()
        .enumerate()
        .map(|(i, r)| {
            let d = if i >= n - halted {
                RunDecision {
                    decision: Decision::Halt,
                    reason: Reason::SuccessiveHalving,
                    tau: None,
                    probability: None,
                }
            } else {
                RunDecision::cont(Reason::SuccessiveHalving)
            };
            (r.run_id.clone(), d)
        })
        .collect()
}

/// Outcome of one decision epoch.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochOutcome {
    pub threshold: Option<ThresholdSpec>,
    pub decisions: DecisionMap,
}

/// Threshold, raw decisions and guards for one epoch of a prediction criterion,
/// or a successive-halving step when `rung` says so.
pub fn decide_epoch(policy: &HaltPolicy, runs: &[RunSnapshot], rung: bool) -> Result<EpochOutcome> {
    if runs.is_empty() {
        return Err(Error::domain("no alive runs"));
    }
    if policy.criterion == Criterion::SuccessiveHalving {
        let decisions = successive_halving(runs, rung);
        return Ok(EpochOutcome {
            threshold: None,
            decisions: apply_guards(decisions, runs, policy),
        });
    }
    let threshold = compute_threshold(policy.criterion, runs, policy.delta, policy.k_override)?;
    let decisions = apply_guards(raw_decisions(policy, runs), runs, policy);
    Ok(EpochOutcome {
        threshold: Some(threshold),
        decisions,
    })
}
