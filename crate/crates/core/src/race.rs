//! Epoch-synchronous run races: replaying traces through a halting policy,
//! accounting for savings and FAIL events, and generating synthetic corpora.

use std::collections::{BTreeMap, HashMap};
use std::sync::{Arc, Mutex};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::criteria::{
    current_best, decide_epoch, halving_rungs, Criterion, Decision, DecisionMap, HaltPolicy,
    Reason, RunDecision, RunSnapshot, ThresholdSpec,
};
use crate::curve_models::{ModelFamily, Y_CAP};
use crate::error::{Error, Result};
use crate::inference::{
    check_validity, mh_sample, predict_at, Epoch, InferenceConfig, LearningCurve, Prediction,
    RunId, RunStatus, Validity,
};
use crate::seeding::{fit_seed, fnv1a, stream_seed};

/// Per-run error sequences of one race; `runs[id][i]` is the error at epoch `i + 1`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Traces {
    pub horizon: Epoch,
    pub runs: BTreeMap<RunId, Vec<f64>>,
}

impl Traces {
    pub fn new(horizon: Epoch, runs: BTreeMap<RunId, Vec<f64>>) -> Self {
        Traces { horizon, runs }
    }

    pub fn n_runs(&self) -> usize {
        self.runs.len()
    }

    /// Checks that there is at least one run and every run has exactly `horizon` epochs.
    pub fn validate_complete(&self) -> Result<()> {
        if self.horizon == 0 {
            return Err(Error::domain("horizon must be positive"));
        }
        if self.runs.is_empty() {
            return Err(Error::domain("race needs at least one trace"));
        }
        for (id, values) in &self.runs {
            if values.len() != self.horizon as usize {
                return Err(Error::domain(format!(
                    "ragged traces: run {id} has {} epochs, horizon is {}",
                    values.len(),
                    self.horizon
                )));
            }
        }
        Ok(())
    }

    /// Observations of all runs at `epoch` (1-based), for runs long enough to have one.
    pub fn at_epoch(&self, epoch: Epoch) -> BTreeMap<RunId, f64> {
        self.runs
            .iter()
            .filter_map(|(id, v)| v.get(epoch as usize - 1).map(|&y| (id.clone(), y)))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RaceConfig {
    pub horizon: Epoch,
    pub policy: HaltPolicy,
    pub inference: InferenceConfig,
    pub master_seed: u64,
}

impl RaceConfig {
    pub fn new(horizon: Epoch, policy: HaltPolicy) -> Self {
        RaceConfig {
            horizon,
            policy,
            inference: InferenceConfig::default(),
            master_seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.policy.validate()?;
        self.inference.validate()?;
        if self.horizon < self.policy.warmup_epochs {
            return Err(Error::domain(format!(
                "horizon {} is shorter than the warm-up ({})",
                self.horizon, self.policy.warmup_epochs
            )));
        }
        Ok(())
    }
}

/// Everything a decision needs from one posterior fit, independent of δ and guards.
#[derive(Debug, Clone, PartialEq)]
pub struct FitSummary {
    /// Noise-free predictive samples at the horizon, in curve units.
    pub samples: Vec<f64>,
    /// Validity under the guard rules.
    pub validity: Validity,
}

impl FitSummary {
    /// Prediction for `delta`. With guards off, only a lack of data makes it unusable.
    pub fn prediction(&self, delta: f64, guards: bool) -> Result<Prediction> {
        let mut p = Prediction::from_samples(self.samples.clone(), delta)?;
        p.validity = match self.validity {
            Validity::InsufficientData => Validity::InsufficientData,
            v if guards => v,
            _ => Validity::Ok,
        };
        Ok(p)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
struct FitKey {
    run_id: RunId,
    epochs: Epoch,
    data: u64,
    setup: u64,
}

/// Memo of posterior fits. A fit depends only on the run's observed prefix, the
/// inference settings, the horizon and the master seed, so races over the same
/// traces under different policies share their fits.
#[derive(Debug, Default)]
pub struct FitCache {
    fits: Mutex<HashMap<FitKey, Option<Arc<FitSummary>>>>,
}

impl FitCache {
    pub fn new() -> Self {
        FitCache::default()
    }

    pub fn len(&self) -> usize {
        self.fits.lock().expect("fit cache poisoned").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Fit for `curve` at its current length, or `None` if no fit is possible.
    pub fn fit(&self, curve: &LearningCurve, config: &RaceConfig) -> Option<Arc<FitSummary>> {
        let key = FitKey {
            run_id: curve.run_id.clone(),
            epochs: curve.epochs(),
            data: fingerprint_values(curve.values()),
            setup: fingerprint_setup(config),
        };
        if let Some(hit) = self.fits.lock().expect("fit cache poisoned").get(&key) {
            return hit.clone();
        }
        let fit = fit_curve(curve, config).map(Arc::new);
        self.fits
            .lock()
            .expect("fit cache poisoned")
            .insert(key, fit.clone());
        fit
    }
}

fn fingerprint_values(values: &[f64]) -> u64 {
    let bytes: Vec<u8> = values.iter().flat_map(|v| v.to_bits().to_le_bytes()).collect();
    fnv1a(&bytes)
}

fn fingerprint_setup(config: &RaceConfig) -> u64 {
    let mut inference = config.inference.clone();
    inference.seed = 0;
    inference.quantile_delta = 0.5;
    let text = serde_json::to_string(&(inference, config.horizon, config.master_seed))
        .expect("config serializes");
    fnv1a(text.as_bytes())
}

/// Fits `curve` with the seed derived from (master seed, run id, epoch).
pub fn fit_curve(curve: &LearningCurve, config: &RaceConfig) -> Option<FitSummary> {
    let inference = InferenceConfig {
        seed: fit_seed(config.master_seed, curve.run_id.as_str(), curve.epochs()),
        ..config.inference.clone()
    };
    let posterior = mh_sample(curve, &inference).ok()?;
    let prediction = predict_at(&posterior, config.horizon, 0.5).ok()?;
    let validity = check_validity(&prediction, curve, &posterior.fitted);
    Some(FitSummary {
        samples: prediction.samples,
        validity,
    })
}

/// Threshold and decisions taken after ingesting one epoch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: Epoch,
    pub current_best: Option<RunId>,
    pub threshold: Option<ThresholdSpec>,
    pub decisions: DecisionMap,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RaceState {
    pub curves: BTreeMap<RunId, LearningCurve>,
    /// Epochs completed so far.
    pub epoch: Epoch,
    pub history: Vec<EpochRecord>,
    horizon: Epoch,
    halt_reasons: BTreeMap<RunId, Reason>,
}

impl RaceState {
    pub fn new<I: IntoIterator<Item = RunId>>(run_ids: I, horizon: Epoch) -> Result<Self> {
        let curves = run_ids
            .into_iter()
            .map(|id| Ok((id.clone(), LearningCurve::new(id, horizon)?)))
            .collect::<Result<BTreeMap<_, _>>>()?;
        if curves.is_empty() {
            return Err(Error::domain("race needs at least one run"));
        }
        Ok(RaceState {
            curves,
            epoch: 0,
            history: Vec::new(),
            horizon,
            halt_reasons: BTreeMap::new(),
        })
    }

    pub fn horizon(&self) -> Epoch {
        self.horizon
    }

    pub fn alive(&self) -> impl Iterator<Item = &RunId> {
        self.curves.values().filter(|c| c.is_alive()).map(|c| &c.run_id)
    }

    pub fn alive_count(&self) -> usize {
        self.alive().count()
    }

    pub fn is_finished(&self) -> bool {
        self.epoch >= self.horizon
    }

    pub fn halt_reason(&self, run: &RunId) -> Option<Reason> {
        self.halt_reasons.get(run).copied()
    }

    /// Ingests one epoch of observations for exactly the alive runs, then
    /// decides. Decision epochs are those with `warmup <= t < T`; at `t = T`
    /// every alive run finishes. On error the state is left untouched.
    pub fn step(
        &mut self,
        observations: &BTreeMap<RunId, f64>,
        config: &RaceConfig,
        cache: &FitCache,
    ) -> Result<DecisionMap> {
        if self.is_finished() {
            return Err(Error::Protocol(format!(
                "race already reached its horizon {}",
                self.horizon
            )));
        }
        for id in observations.keys() {
            match self.curves.get(id) {
                None => return Err(Error::NotFound(format!("unknown run {id}"))),
                Some(c) if !c.is_alive() => {
                    return Err(Error::Protocol(format!("observation for halted run {id}")))
                }
                Some(_) => {}
            }
        }
        if let Some(missing) = self.alive().find(|id| !observations.contains_key(*id)) {
            return Err(Error::Protocol(format!(
                "missing observation for alive run {missing}"
            )));
        }

        let t = self.epoch + 1;
        let mut decisions = DecisionMap::new();
        for (id, &y) in observations {
            let curve = self.curves.get_mut(id).expect("checked above");
            if y.is_finite() && y >= 0.0 {
                curve.push(y)?;
            } else {
                curve.push(f64::NAN)?;
                curve.halt();
                self.halt_reasons.insert(id.clone(), Reason::DataError);
                decisions.insert(
                    id.clone(),
                    RunDecision {
                        decision: Decision::Halt,
                        reason: Reason::DataError,
                        tau: None,
                        probability: None,
                    },
                );
            }
        }

        let alive: Vec<&LearningCurve> = self.curves.values().filter(|c| c.is_alive()).collect();
        let policy = &config.policy;
        let mut threshold = None;
        let mut best = None;
        if t >= self.horizon {
            for c in &alive {
                decisions.insert(c.run_id.clone(), RunDecision::cont(Reason::Finished));
            }
        } else if t < policy.warmup_epochs || !policy.can_halt() || alive.is_empty() {
            let reason = if t < policy.warmup_epochs {
                Reason::Warmup
            } else {
                Reason::NoHalting
            };
            for c in &alive {
                decisions.insert(c.run_id.clone(), RunDecision::cont(reason));
            }
        } else {
            let snapshots = snapshots(&alive, config, cache)?;
            best = current_best(&snapshots).map(|b| b.run_id.clone());
            let rung = halving_rungs(self.horizon, policy.warmup_epochs).contains(&t);
            let outcome = decide_epoch(policy, &snapshots, rung)?;
            threshold = outcome.threshold;
            decisions.extend(outcome.decisions);
        }

        for (id, d) in &decisions {
            if d.is_halt() && d.reason != Reason::DataError {
                self.curves.get_mut(id).expect("decided runs exist").halt();
                self.halt_reasons.insert(id.clone(), d.reason);
            }
        }
        if t >= self.horizon {
            for c in self.curves.values_mut() {
                c.finish();
            }
        }
        self.epoch = t;
        self.history.push(EpochRecord {
            epoch: t,
            current_best: best,
            threshold,
            decisions: decisions.clone(),
        });
        Ok(decisions)
    }
}

fn snapshots(
    alive: &[&LearningCurve],
    config: &RaceConfig,
    cache: &FitCache,
) -> Result<Vec<RunSnapshot>> {
    let policy = &config.policy;
    alive
        .par_iter()
        .map(|c| {
            let prediction = if policy.criterion.uses_predictions() {
                cache
                    .fit(c, config)
                    .map(|fit| fit.prediction(policy.delta, policy.guards_enabled))
                    .transpose()?
            } else {
                None
            };
            Ok(RunSnapshot {
                run_id: c.run_id.clone(),
                current_error: c.last().expect("alive runs have observations"),
                prediction,
            })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "kebab-case")]
pub enum RunOutcome {
    Finished,
    Halted { epoch: Epoch, reason: Reason },
}

impl RunOutcome {
    /// Epochs this run consumed out of a horizon of `horizon`.
    pub fn epochs_consumed(self, horizon: Epoch) -> Epoch {
        match self {
            RunOutcome::Finished => horizon,
            RunOutcome::Halted { epoch, .. } => epoch.min(horizon),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FailRecord {
    pub best_run: RunId,
    pub halt_epoch: Epoch,
    pub best_final_error: f64,
    /// Best final error among runs that reached the horizon, if any did.
    pub surviving_best_final_error: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdLogEntry {
    pub epoch: Epoch,
    pub tau: f64,
    pub k_used: Option<usize>,
    pub source_run: Option<RunId>,
    pub fallback: bool,
    pub halted: Vec<RunId>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RaceReport {
    pub horizon: Epoch,
    pub policy: HaltPolicy,
    pub master_seed: u64,
    pub n_runs: usize,
    pub epochs_executed: u64,
    pub epochs_budgeted: u64,
    pub savings: f64,
    pub fail: Option<FailRecord>,
    pub outcomes: BTreeMap<RunId, RunOutcome>,
    pub thresholds: Vec<ThresholdLogEntry>,
}

impl RaceReport {
    pub fn epochs_saved(&self) -> u64 {
        self.epochs_budgeted - self.epochs_executed
    }

    pub fn halt_epochs(&self) -> BTreeMap<RunId, Option<Epoch>> {
        self.outcomes
            .iter()
            .map(|(id, o)| {
                let h = match o {
                    RunOutcome::Halted { epoch, .. } => Some(*epoch),
                    RunOutcome::Finished => None,
                };
                (id.clone(), h)
            })
            .collect()
    }
}

/// Report for a race state that has reached its horizon.
pub fn build_report(state: &RaceState, traces: &Traces, config: &RaceConfig) -> RaceReport {
    let horizon = state.horizon();
    let outcomes: BTreeMap<RunId, RunOutcome> = state
        .curves
        .iter()
        .map(|(id, c)| {
            let o = match c.status() {
                RunStatus::Halted { epoch } => RunOutcome::Halted {
                    epoch,
                    reason: state.halt_reason(id).unwrap_or(Reason::Threshold),
                },
                _ => RunOutcome::Finished,
            };
            (id.clone(), o)
        })
        .collect();
    let executed: u64 = outcomes
        .values()
        .map(|o| u64::from(o.epochs_consumed(horizon)))
        .sum();
    let budgeted = outcomes.len() as u64 * u64::from(horizon);
    let thresholds = state
        .history
        .iter()
        .filter_map(|rec| {
            rec.threshold.as_ref().map(|th| ThresholdLogEntry {
                epoch: rec.epoch,
                tau: th.tau,
                k_used: th.k_used,
                source_run: th.source_run.clone(),
                fallback: th.fallback,
                halted: rec
                    .decisions
                    .iter()
                    .filter(|(_, d)| d.is_halt())
                    .map(|(id, _)| id.clone())
                    .collect(),
            })
        })
        .collect();
    let mut report = RaceReport {
        horizon,
        policy: config.policy.clone(),
        master_seed: config.master_seed,
        n_runs: outcomes.len(),
        epochs_executed: executed,
        epochs_budgeted: budgeted,
        savings: 1.0 - executed as f64 / budgeted as f64,
        fail: None,
        outcomes,
        thresholds,
    };
    report.fail = detect_fail(&report, traces);
    report
}

pub fn run_race(traces: &Traces, config: &RaceConfig) -> Result<RaceReport> {
    run_race_with(traces, config, &FitCache::new())
}

/// Replays complete traces epoch by epoch through `step`.
pub fn run_race_with(traces: &Traces, config: &RaceConfig, cache: &FitCache) -> Result<RaceReport> {
    traces.validate_complete()?;
    config.validate()?;
    if traces.horizon != config.horizon {
        return Err(Error::domain(format!(
            "traces have horizon {}, config has {}",
            traces.horizon, config.horizon
        )));
    }
    let mut state = RaceState::new(traces.runs.keys().cloned(), config.horizon)?;
    for t in 1..=config.horizon {
        let alive: Vec<RunId> = state.alive().cloned().collect();
        let obs = alive
            .into_iter()
            .map(|id| {
                let y = traces.runs[&id][t as usize - 1];
                (id, y)
            })
            .collect();
        state.step(&obs, config, cache)?;
    }
    Ok(build_report(&state, traces, config))
}

/// FAIL iff every run tied for the minimal final error was halted.
pub fn detect_fail(report: &RaceReport, traces: &Traces) -> Option<FailRecord> {
    let finals: Vec<(&RunId, f64)> = traces
        .runs
        .iter()
        .filter_map(|(id, v)| v.last().copied().filter(|y| y.is_finite()).map(|y| (id, y)))
        .collect();
    let best = finals.iter().map(|&(_, y)| y).min_by(f64::total_cmp)?;
    let halted_at = |id: &RunId| match report.outcomes.get(id) {
        Some(RunOutcome::Halted { epoch, .. }) if *epoch < traces.horizon => Some(*epoch),
        _ => None,
    };
    let tied: Vec<&RunId> = finals.iter().filter(|&&(_, y)| y == best).map(|&(id, _)| id).collect();
    if tied.iter().any(|id| halted_at(id).is_none()) {
        return None;
    }
    let best_run = tied[0];
    let surviving = finals
        .iter()
        .filter(|(id, _)| halted_at(id).is_none())
        .map(|&(_, y)| y)
        .min_by(f64::total_cmp);
    Some(FailRecord {
        best_run: best_run.clone(),
        halt_epoch: halted_at(best_run).expect("all tied runs halted"),
        best_final_error: best,
        surviving_best_final_error: surviving,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub n_runs: usize,
    pub horizon: Epoch,
    pub families: Vec<ModelFamily>,
    pub noise_sigma: f64,
    /// Minimum spacing between true asymptotes; `None` draws them independently.
    pub min_gap: Option<f64>,
    /// Share of each curve's total drop already made by epoch `max(T/10, 2)`. Higher
    /// values make early predictions easier.
    pub early_share: f64,
    pub seed: u64,
}

impl SynthConfig {
    pub fn new(n_runs: usize, horizon: Epoch, noise_sigma: f64, seed: u64) -> Self {
        SynthConfig {
            n_runs,
            horizon,
            families: ModelFamily::ALL.to_vec(),
            noise_sigma,
            min_gap: Some(0.05),
            early_share: 0.7,
            seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticRun {
    pub run_id: RunId,
    pub family: ModelFamily,
    pub params: Vec<f64>,
    pub offset: f64,
    /// Noise-free error at the horizon.
    pub asymptote: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticCorpus {
    pub traces: Traces,
    pub truth: Vec<SyntheticRun>,
    pub best_run: RunId,
}

const DROP_RANGE: (f64, f64) = (0.2, 1.5);
const SHAPE_ATTEMPTS: usize = 20_000;

/// Draws parameters within the family's bounds until the minimized curve is
/// decreasing and convex over `1..=horizon`, drops by an amount in
/// `DROP_RANGE`, has made `early_share` of that drop by epoch `max(T/10, 2)`, and the
/// offset that puts its final value at `asymptote` is within bounds.
fn draw_shape<R: Rng + ?Sized>(
    family: ModelFamily,
    horizon: Epoch,
    asymptote: f64,
    early_share: f64,
    rng: &mut R,
) -> Option<(Vec<f64>, Vec<f64>)> {
    for _ in 0..SHAPE_ATTEMPTS {
        let params = family.sample_params(rng);
        let f: Vec<f64> = (1..=horizon)
            .map(|t| family.eval(&params, t).unwrap_or(f64::NAN))
            .collect();
        if f.iter().any(|v| !v.is_finite()) {
            continue;
        }
        let drop = f[f.len() - 1] - f[0];
        // Error decreases with diminishing returns: non-negative, non-increasing improvements.
        let improvements: Vec<f64> = f.windows(2).map(|w| w[1] - w[0]).collect();
        let shaped = improvements.iter().all(|&d| d >= 0.0)
            && improvements.windows(2).all(|w| w[1] <= w[0] + 1e-12);
        let early = (horizon as usize / 10).max(2) - 1;
        // A one-epoch race has no shape to constrain.
        let sized = horizon == 1
            || (f[early.min(f.len() - 1)] - f[0] >= early_share * drop
                && (DROP_RANGE.0..=DROP_RANGE.1).contains(&drop));
        let offset = asymptote + f[f.len() - 1];
        if shaped && sized && (0.0..=Y_CAP).contains(&offset) {
            return Some((params, f));
        }
    }
    None
}

fn draw_asymptotes<R: Rng + ?Sized>(n: usize, min_gap: Option<f64>, rng: &mut R) -> Vec<f64> {
    match min_gap {
        Some(gap) => {
            let mut a = 0.05 + 0.1 * rng.random::<f64>();
            let mut levels = Vec::with_capacity(n);
            for _ in 0..n {
                levels.push(a);
                a += gap * (1.0 + rng.random::<f64>());
            }
            levels.shuffle(rng);
            levels
        }
        None => (0..n).map(|_| 0.05 + 0.95 * rng.random::<f64>()).collect(),
    }
}

/// Seeded synthetic race. Each run follows `offset − f(t)` for a family drawn
/// uniformly from the mix, with the offset chosen so the noise-free error at
/// the horizon equals the run's assigned asymptote, plus iid Gaussian noise
/// clamped at zero.
pub fn gen_synthetic(config: &SynthConfig) -> Result<SyntheticCorpus> {
    if config.n_runs == 0 || config.horizon == 0 {
        return Err(Error::domain("need n_runs >= 1 and horizon >= 1"));
    }
    if config.families.is_empty() {
        return Err(Error::domain("family mix is empty"));
    }
    if !(config.noise_sigma >= 0.0) || !config.noise_sigma.is_finite() {
        return Err(Error::domain("noise_sigma must be finite and >= 0"));
    }
    if !(0.0..1.0).contains(&config.early_share) {
        return Err(Error::domain("early_share must lie in [0, 1)"));
    }
    if config.min_gap.is_some_and(|g| !(g >= 0.0)) {
        return Err(Error::domain("min_gap must be >= 0"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let asymptotes = draw_asymptotes(config.n_runs, config.min_gap, &mut rng);
    let noise = Normal::new(0.0, config.noise_sigma).expect("sigma checked");
    let width = config.n_runs.saturating_sub(1).to_string().len().max(3);

    let mut mix = config.families.clone();
    let mut runs = BTreeMap::new();
    let mut truth = Vec::with_capacity(config.n_runs);
    for (i, &asymptote) in asymptotes.iter().enumerate() {
        let run_id = RunId::new(format!("run-{i:0width$}"));
        let (family, params, f) = loop {
            if mix.is_empty() {
                return Err(Error::domain(
                    "no family in the mix can produce a curve with the requested shape",
                ));
            }
            let pick = rng.random_range(0..mix.len());
            let family = mix[pick];
            match draw_shape(family, config.horizon, asymptote, config.early_share, &mut rng) {
                Some((params, f)) => break (family, params, f),
                // Infeasible under the shape constraints; drop it from this corpus.
                None => mix.retain(|&m| m != family),
            }
        };
        let offset = asymptote + f[f.len() - 1];
        let values = f
            .iter()
            .map(|fv| {
                let clean = offset - fv;
                let eps = if config.noise_sigma > 0.0 { noise.sample(&mut rng) } else { 0.0 };
                (clean + eps).max(0.0)
            })
            .collect();
        runs.insert(run_id.clone(), values);
        truth.push(SyntheticRun {
            run_id,
            family,
            params,
            offset,
            asymptote,
        });
    }
    let best_run = truth
        .iter()
        .min_by(|a, b| a.asymptote.total_cmp(&b.asymptote).then_with(|| a.run_id.cmp(&b.run_id)))
        .map(|r| r.run_id.clone())
        .expect("n_runs >= 1");
    Ok(SyntheticCorpus {
        traces: Traces::new(config.horizon, runs),
        truth,
        best_run,
    })
}

/// `count` synthetic races whose seeds derive from `base.seed` and the race index.
pub fn gen_corpus(base: &SynthConfig, count: usize) -> Result<Vec<SyntheticCorpus>> {
    (0..count)
        .into_par_iter()
        .map(|i| {
            gen_synthetic(&SynthConfig {
                seed: stream_seed(base.seed, i as u64),
                ..base.clone()
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepCell {
    pub criterion: Criterion,
    pub delta: f64,
    pub reports: Vec<RaceReport>,
    pub mean_savings: f64,
    pub fail_count: usize,
}

impl SweepCell {
    pub fn fail_rate(&self) -> f64 {
        if self.reports.is_empty() {
            0.0
        } else {
            self.fail_count as f64 / self.reports.len() as f64
        }
    }
}

/// One cell per (criterion, δ), each replaying every race with the base config's
/// other settings. Fits are shared across cells through `cache`; a fit's seed
/// depends only on the master seed, run and epoch, so each cell's result is
/// the same whether it runs alone or in a sweep.
pub fn sweep(
    races: &[Traces],
    criteria: &[Criterion],
    deltas: &[f64],
    base: &RaceConfig,
    cache: &FitCache,
) -> Result<Vec<SweepCell>> {
    let mut cells = Vec::with_capacity(criteria.len() * deltas.len());
    for &criterion in criteria {
        for &delta in deltas {
            let config = RaceConfig {
                policy: HaltPolicy {
                    criterion,
                    delta,
                    ..base.policy.clone()
                },
                ..base.clone()
            };
            let reports = races
                .par_iter()
                .map(|t| run_race_with(t, &config, cache))
                .collect::<Result<Vec<_>>>()?;
            let mean_savings = if reports.is_empty() {
                0.0
            } else {
                reports.iter().map(|r| r.savings).sum::<f64>() / reports.len() as f64
            };
            let fail_count = reports.iter().filter(|r| r.fail.is_some()).count();
            cells.push(SweepCell {
                criterion,
                delta,
                reports,
                mean_savings,
                fail_count,
            });
        }
    }
    Ok(cells)
}
