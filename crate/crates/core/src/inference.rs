//! Bayesian inference over the ensemble for a single learning curve.
//!
//! The sampler is random-walk Metropolis over all ensemble coordinates in
//! normalized units (observations divided by their maximum). Several
//! independent chains run from their own starting points and their kept
//! draws are pooled. One chain iteration updates one randomly chosen block:
//! the parameters and offset of one family, one weight logit, or the log
//! noise scale. Proposal scales adapt during burn-in only and are frozen
//! afterwards. Members are kept non-negative up to the curve's horizon.

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::curve_models::{
    init_params, Component, EnsembleSample, ModelFamily, WEIGHT_TOLERANCE, Y_CAP,
};
use crate::error::{Error, Result};
use crate::seeding::stream_seed;

pub type Epoch = u32;

/// Lower end of the noise-scale prior, in normalized units.
pub const SIGMA_MIN: f64 = 1e-4;

/// Bound on the weight logits.
pub const LOGIT_BOUND: f64 = 10.0;

/// Predictions below this Pearson correlation between fit and data are discarded by the guards.
pub const MIN_CORRELATION: f64 = 0.5;

/// Fewest observations for which `check_validity` can assess a fit.
pub const MIN_VALIDITY_OBSERVATIONS: usize = 3;

const LN_2PI: f64 = 1.837_877_066_409_345_5;

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct RunId(pub String);

impl RunId {
    pub fn new(id: impl Into<String>) -> Self {
        RunId(id.into())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for RunId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl From<&str> for RunId {
    fn from(s: &str) -> Self {
        RunId(s.to_owned())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "state", rename_all = "kebab-case")]
pub enum RunStatus {
    Alive,
    Halted { epoch: Epoch },
    Finished,
}

/// Per-epoch validation errors of one run. `values[i]` is the error at epoch
/// `i + 1`; a non-finite entry marks an invalid observation.
#[derive(Debug, Clone, PartialEq)]
pub struct LearningCurve {
    pub run_id: RunId,
    values: Vec<f64>,
    status: RunStatus,
    horizon: Epoch,
}

impl LearningCurve {
    pub fn new(run_id: RunId, horizon: Epoch) -> Result<Self> {
        if horizon == 0 {
            return Err(Error::domain("horizon must be positive"));
        }
        Ok(LearningCurve {
            run_id,
            values: Vec::new(),
            status: RunStatus::Alive,
            horizon,
        })
    }

    pub fn from_values(run_id: RunId, values: Vec<f64>, horizon: Epoch) -> Result<Self> {
        let mut curve = LearningCurve::new(run_id, horizon)?;
        for v in values {
            curve.push(v)?;
        }
        Ok(curve)
    }

    /// Appends the observation for the next epoch.
    pub fn push(&mut self, value: f64) -> Result<Epoch> {
        if self.status != RunStatus::Alive {
            return Err(Error::Protocol(format!(
                "run {} is no longer alive ({:?})",
                self.run_id, self.status
            )));
        }
        if self.values.len() as Epoch >= self.horizon {
            return Err(Error::Protocol(format!(
                "run {} already has {} epochs (horizon)",
                self.run_id, self.horizon
            )));
        }
        if value.is_finite() && value < 0.0 {
            return Err(Error::domain(format!(
                "validation error must be >= 0, got {value}"
            )));
        }
        self.values.push(value);
        Ok(self.values.len() as Epoch)
    }

    pub fn halt(&mut self) {
        if self.status == RunStatus::Alive {
            self.status = RunStatus::Halted {
                epoch: self.epochs(),
            };
        }
    }

    pub fn finish(&mut self) {
        if self.status == RunStatus::Alive {
            self.status = RunStatus::Finished;
        }
    }

    pub fn status(&self) -> RunStatus {
        self.status
    }

    pub fn is_alive(&self) -> bool {
        self.status == RunStatus::Alive
    }

    pub fn horizon(&self) -> Epoch {
        self.horizon
    }

    /// Number of epochs observed so far.
    pub fn epochs(&self) -> Epoch {
        self.values.len() as Epoch
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn last(&self) -> Option<f64> {
        self.values.last().copied()
    }

    /// Finite observations as `(epoch, value)`.
    pub fn observed(&self) -> impl Iterator<Item = (Epoch, f64)> + '_ {
        self.values
            .iter()
            .enumerate()
            .filter(|(_, v)| v.is_finite())
            .map(|(i, &v)| (i as Epoch + 1, v))
    }

    pub fn observed_count(&self) -> usize {
        self.values.iter().filter(|v| v.is_finite()).count()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InferenceConfig {
    /// Independent chains whose draws are pooled. Each chain starts from its
    /// own pre-fits, so pooling covers modes a single chain would stay in.
    pub chains: usize,
    /// Iterations per chain, each updating one block of coordinates.
    pub chain_length: usize,
    pub burn_in: usize,
    pub thinning: usize,
    /// Initial random-walk step per coordinate, as a fraction of the
    /// coordinate's bound width. Adapted per block during burn-in.
    pub proposal_scale: f64,
    /// Uniform prior draws screened per family to pick the chain's starting point.
    pub init_candidates: usize,
    /// Single-coordinate Metropolis updates spent fitting each family alone
    /// before the ensemble chain starts.
    pub prefit_iterations: usize,
    pub seed: u64,
    /// δ: the conservative estimate is the (1 − δ)-quantile of the predictive samples.
    pub quantile_delta: f64,
    /// No fit is attempted with fewer finite observations.
    pub min_observations: usize,
}

impl Default for InferenceConfig {
    fn default() -> Self {
        InferenceConfig {
            chains: 8,
            chain_length: 3000,
            burn_in: 1000,
            thinning: 20,
            proposal_scale: 0.05,
            init_candidates: 16,
            prefit_iterations: 300,
            seed: 0,
            quantile_delta: 0.5,
            min_observations: 5,
        }
    }
}

impl InferenceConfig {
    pub fn validate(&self) -> Result<()> {
        if self.chain_length <= self.burn_in {
            return Err(Error::domain("chain_length must exceed burn_in"));
        }
        if self.chains == 0 {
            return Err(Error::domain("chains must be >= 1"));
        }
        if self.thinning == 0 {
            return Err(Error::domain("thinning must be >= 1"));
        }
        if self.kept_samples() == 0 {
            return Err(Error::domain("chain keeps no samples"));
        }
        if !(self.proposal_scale > 0.0) {
            return Err(Error::domain("proposal_scale must be positive"));
        }
        if !(0.0..=1.0).contains(&self.quantile_delta) {
            return Err(Error::domain("quantile_delta must lie in [0, 1]"));
        }
        Ok(())
    }

    /// `⌊(chain_length − burn_in) / thinning⌋`, in total over all chains.
    pub fn kept_samples(&self) -> usize {
        (self.chain_length.saturating_sub(self.burn_in)) / self.thinning.max(1)
    }
}

/// Draws from the posterior of one curve, in normalized units.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Posterior {
    /// Multiply ensemble values by this to get back to the curve's units.
    pub scale: f64,
    pub samples: Vec<EnsembleSample>,
    /// Observed epochs and the posterior-mean fitted curve there, in curve units.
    pub epochs: Vec<Epoch>,
    pub fitted: Vec<f64>,
    pub acceptance_rate: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Validity {
    Ok,
    NegativeLoss,
    LowCorrelation,
    InsufficientData,
}

impl Validity {
    pub fn is_ok(self) -> bool {
        self == Validity::Ok
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Validity::Ok => "ok",
            Validity::NegativeLoss => "negative-loss",
            Validity::LowCorrelation => "low-correlation",
            Validity::InsufficientData => "insufficient-data",
        }
    }
}

/// Empirical posterior-predictive distribution of a run's error at the horizon.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub samples: Vec<f64>,
    pub point_estimate: f64,
    pub conservative_estimate: f64,
    pub validity: Validity,
}

impl Prediction {
    /// Builds the prediction from raw predictive samples. Validity starts as `Ok`.
    pub fn from_samples(samples: Vec<f64>, delta: f64) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::domain("prediction needs at least one sample"));
        }
        if samples.iter().any(|v| !v.is_finite()) {
            return Err(Error::domain("non-finite predictive sample"));
        }
        let point_estimate = samples.iter().sum::<f64>() / samples.len() as f64;
        let conservative_estimate = nearest_rank_quantile(&samples, 1.0 - delta);
        Ok(Prediction {
            samples,
            point_estimate,
            conservative_estimate,
            validity: Validity::Ok,
        })
    }

    pub fn is_valid(&self) -> bool {
        self.validity.is_ok()
    }
}

/// 1-based nearest rank `ceil(level · m)`, clamped to `[1, m]`. Levels that
/// land within 1e-9 of an integer rank are snapped to it so that e.g.
/// `(1 − 0.7) · 10` selects rank 3, not 4.
pub fn nearest_rank(level: f64, m: usize) -> usize {
    let x = level * m as f64;
    let r = x.round();
    let rank = if (x - r).abs() < 1e-9 { r } else { x.ceil() };
    (rank.max(1.0) as usize).min(m)
}

/// Nearest-rank quantile; always one of the samples.
pub fn nearest_rank_quantile(samples: &[f64], level: f64) -> f64 {
    let mut sorted = samples.to_vec();
    sorted.sort_by(f64::total_cmp);
    sorted[nearest_rank(level, sorted.len()) - 1]
}

/// Gaussian log-likelihood of the curve's finite observations under `sample`,
/// in the sample's own units. Returns `-inf` for a non-positive noise scale.
pub fn log_likelihood(sample: &EnsembleSample, curve: &LearningCurve) -> f64 {
    let sigma = sample.noise_sigma;
    if !(sigma > 0.0) {
        return f64::NEG_INFINITY;
    }
    let mut m = 0usize;
    let mut sse = 0.0;
    for (t, y) in curve.observed() {
        let r = y - sample.eval_raw(f64::from(t));
        sse += r * r;
        m += 1;
    }
    gaussian_log_likelihood(m, sse, sigma)
}

fn gaussian_log_likelihood(m: usize, sse: f64, sigma: f64) -> f64 {
    let m = m as f64;
    -0.5 * m * LN_2PI - m * sigma.ln() - sse / (2.0 * sigma * sigma)
}

/// Uniform prior: 0 on the support, `-inf` outside.
pub fn log_prior(sample: &EnsembleSample) -> f64 {
    let weights_ok = sample.components.iter().all(|c| c.weight >= 0.0)
        && (sample.components.iter().map(|c| c.weight).sum::<f64>() - 1.0).abs()
            <= WEIGHT_TOLERANCE;
    let members_ok = sample
        .components
        .iter()
        .all(|c| c.family.contains(&c.params) && (0.0..=Y_CAP).contains(&c.offset));
    let sigma_ok = sample.noise_sigma > SIGMA_MIN && sample.noise_sigma <= Y_CAP;
    if !sample.components.is_empty() && weights_ok && members_ok && sigma_ok {
        0.0
    } else {
        f64::NEG_INFINITY
    }
}

/// Members model an error, so the sampler keeps each one non-negative up to
/// the horizon. Members are non-increasing, so checking the horizon suffices.
fn stays_non_negative(family: ModelFamily, params: &[f64], offset: f64, data: &Data) -> bool {
    offset >= family.eval_raw(params, data.horizon, data.ln_horizon)
}

const FAMILIES: usize = ModelFamily::ALL.len();
const MAX_ARITY: usize = 4;

#[derive(Clone, Copy)]
enum Block {
    Family(usize),
    Logit(usize),
    Sigma,
}

const BLOCKS: usize = 2 * FAMILIES + 1;

fn block(i: usize) -> Block {
    if i < FAMILIES {
        Block::Family(i)
    } else if i < 2 * FAMILIES {
        Block::Logit(i - FAMILIES)
    } else {
        Block::Sigma
    }
}

struct Data {
    t: Vec<f64>,
    ln_t: Vec<f64>,
    y: Vec<f64>,
    horizon: f64,
    ln_horizon: f64,
}

struct Chain<'a> {
    data: &'a Data,
    params: [[f64; MAX_ARITY]; FAMILIES],
    offsets: [f64; FAMILIES],
    logits: [f64; FAMILIES],
    weights: [f64; FAMILIES],
    log_sigma: f64,
    /// `f_k(t_i)` for every family, row-major by family.
    values: Vec<f64>,
    /// Ensemble mean at every observed epoch.
    mean: Vec<f64>,
    sse: f64,
    scratch_values: Vec<f64>,
    scratch_mean: Vec<f64>,
}

fn softmax(logits: &[f64; FAMILIES]) -> [f64; FAMILIES] {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut w = [0.0; FAMILIES];
    let mut total = 0.0;
    for (wi, &u) in w.iter_mut().zip(logits) {
        *wi = (u - max).exp();
        total += *wi;
    }
    for wi in &mut w {
        *wi /= total;
    }
    w
}

impl<'a> Chain<'a> {
    fn eval_family_into(&self, k: usize, params: &[f64], out: &mut [f64]) {
        let family = ModelFamily::ALL[k];
        for ((o, &t), &ln_t) in out.iter_mut().zip(&self.data.t).zip(&self.data.ln_t) {
            *o = family.eval_raw(params, t, ln_t);
        }
    }

    fn recompute_mean(&mut self) {
        let m = self.data.y.len();
        self.mean.iter_mut().for_each(|v| *v = 0.0);
        for k in 0..FAMILIES {
            let w = self.weights[k];
            let off = self.offsets[k];
            let row = &self.values[k * m..(k + 1) * m];
            for (acc, f) in self.mean.iter_mut().zip(row) {
                *acc += w * (off - f);
            }
        }
        self.sse = sse(&self.data.y, &self.mean);
    }

    fn sigma(&self) -> f64 {
        self.log_sigma.exp()
    }

    fn log_target(&self, sse: f64, log_sigma: f64) -> f64 {
        // Uniform prior on σ, parameterized by ln σ: Jacobian adds ln σ.
        let m = self.data.y.len() as f64;
        let sigma = log_sigma.exp();
        -(m - 1.0) * log_sigma - sse / (2.0 * sigma * sigma)
    }

    fn sample(&self) -> EnsembleSample {
        EnsembleSample {
            components: ModelFamily::ALL
                .iter()
                .enumerate()
                .map(|(k, &family)| Component {
                    family,
                    weight: self.weights[k],
                    params: self.params[k][..family.arity()].to_vec(),
                    offset: self.offsets[k],
                })
                .collect(),
            noise_sigma: self.sigma(),
        }
    }
}

fn sse(y: &[f64], mean: &[f64]) -> f64 {
    y.iter().zip(mean).map(|(y, m)| (y - m) * (y - m)).sum()
}

/// Per-block adaptive proposal state.
struct Proposal {
    log_scale: [f64; BLOCKS],
    proposed: [u32; BLOCKS],
    accepted: [u32; BLOCKS],
}

const ADAPT_WINDOW: u32 = 20;

impl Proposal {
    fn target(b: Block) -> f64 {
        match b {
            Block::Family(_) => 0.3,
            Block::Logit(_) | Block::Sigma => 0.44,
        }
    }

    fn record(&mut self, i: usize, accepted: bool, adapting: bool) {
        self.proposed[i] += 1;
        if accepted {
            self.accepted[i] += 1;
        }
        if adapting && self.proposed[i] == ADAPT_WINDOW {
            let rate = f64::from(self.accepted[i]) / f64::from(ADAPT_WINDOW);
            self.log_scale[i] += 2.0 * (rate - Proposal::target(block(i)));
            self.log_scale[i] = self.log_scale[i].clamp(-25.0, 3.0);
            self.proposed[i] = 0;
            self.accepted[i] = 0;
        }
    }
}

/// Runs `config.chains` Metropolis chains on the curve's finite observations and pools their draws.
///
/// Returns exactly `config.kept_samples()` draws; identical inputs and seed
/// give bit-identical output.
pub fn mh_sample(curve: &LearningCurve, config: &InferenceConfig) -> Result<Posterior> {
    config.validate()?;
    let observed: Vec<(Epoch, f64)> = curve.observed().collect();
    let required = config.min_observations.max(1);
    if observed.len() < required {
        return Err(Error::InsufficientData {
            observed: observed.len(),
            required,
        });
    }
    let max = observed.iter().map(|&(_, y)| y).fold(0.0, f64::max);
    let scale = if max > 0.0 { max } else { 1.0 };
    let data = Data {
        t: observed.iter().map(|&(t, _)| f64::from(t)).collect(),
        ln_t: observed.iter().map(|&(t, _)| f64::from(t).ln()).collect(),
        y: observed.iter().map(|&(_, y)| y / scale).collect(),
        horizon: f64::from(curve.horizon()),
        ln_horizon: f64::from(curve.horizon()).ln(),
    };
    let m = data.y.len();

    // Normalized curve indexed by epoch for the initializer; gaps are NaN.
    let horizon_len = observed.last().map_or(0, |&(t, _)| t as usize);
    let mut dense = vec![f64::NAN; horizon_len];
    for (&(t, _), &y) in observed.iter().zip(&data.y) {
        dense[t as usize - 1] = y;
    }

    // The kept draws are split as evenly as possible over independent chains.
    let kept = config.kept_samples();
    let chains = config.chains.clamp(1, kept);
    let runs = (0..chains)
        .into_par_iter()
        .map(|j| {
            let quota = kept / chains + usize::from(j < kept % chains);
            let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(config.seed, j as u64));
            run_chain(&data, &dense, config, quota, &mut rng)
        })
        .collect::<Result<Vec<_>>>()?;

    let mut samples = Vec::with_capacity(kept);
    let mut fitted = vec![0.0; m];
    let (mut accepted, mut proposed) = (0usize, 0usize);
    for run in runs {
        samples.extend(run.samples);
        for (acc, v) in fitted.iter_mut().zip(&run.mean_sum) {
            *acc += v;
        }
        accepted += run.accepted;
        proposed += run.proposed;
    }
    debug_assert_eq!(samples.len(), kept);
    let n = samples.len() as f64;
    fitted.iter_mut().for_each(|v| *v = *v / n * scale);

    Ok(Posterior {
        scale,
        samples,
        epochs: observed.iter().map(|&(t, _)| t).collect(),
        fitted,
        acceptance_rate: accepted as f64 / proposed.max(1) as f64,
    })
}

struct ChainRun {
    samples: Vec<EnsembleSample>,
    /// Sum over kept draws of the ensemble mean at each observed epoch.
    mean_sum: Vec<f64>,
    accepted: usize,
    proposed: usize,
}

/// One chain: per-family pre-fits, then `chain_length` block updates, keeping
/// `quota` draws evenly spaced after burn-in.
fn run_chain<R: Rng>(
    data: &Data,
    dense: &[f64],
    config: &InferenceConfig,
    quota: usize,
    rng: &mut R,
) -> Result<ChainRun> {
    let m = data.y.len();
    let mut chain = Chain {
        data,
        params: [[0.0; MAX_ARITY]; FAMILIES],
        offsets: [0.0; FAMILIES],
        logits: [0.0; FAMILIES],
        weights: [1.0 / FAMILIES as f64; FAMILIES],
        log_sigma: 0.0,
        values: vec![0.0; FAMILIES * m],
        mean: vec![0.0; m],
        sse: 0.0,
        scratch_values: vec![0.0; m],
        scratch_mean: vec![0.0; m],
    };

    // Each family is first fitted alone, then the ensemble chain starts from
    // those fits with uniform weights.
    let mut steps = [[0.0; MAX_ARITY + 1]; FAMILIES];
    for (k, family) in ModelFamily::ALL.into_iter().enumerate() {
        let fit = prefit_family(family, data, dense, config, rng)?;
        chain.params[k] = fit.params;
        chain.offsets[k] = fit.offset;
        steps[k] = fit.steps;
        let mut row = vec![0.0; m];
        chain.eval_family_into(k, &fit.params[..family.arity()], &mut row);
        chain.values[k * m..(k + 1) * m].copy_from_slice(&row);
    }
    chain.recompute_mean();
    let rms = (chain.sse / m as f64).sqrt();
    chain.log_sigma = rms.clamp(2.0 * SIGMA_MIN, Y_CAP).ln();

    let mut proposal = Proposal {
        log_scale: [0.0; BLOCKS],
        proposed: [0; BLOCKS],
        accepted: [0; BLOCKS],
    };
    for (k, family) in ModelFamily::ALL.into_iter().enumerate() {
        // Per-coordinate steps were tuned one at a time; shrink for joint moves.
        proposal.log_scale[k] = -0.5 * ((family.arity() + 1) as f64).ln();
    }
    for i in FAMILIES..BLOCKS {
        proposal.log_scale[i] = config.proposal_scale.ln();
    }

    let span = config.chain_length - config.burn_in;
    let mark = |i: usize| (i + 1) * span / quota;
    let mut run = ChainRun {
        samples: Vec::with_capacity(quota),
        mean_sum: vec![0.0; m],
        accepted: 0,
        proposed: 0,
    };
    for iter in 0..config.chain_length {
        let adapting = iter < config.burn_in;
        let bi = rng.random_range(0..BLOCKS);
        let step = proposal.log_scale[bi].exp();
        let accepted = match block(bi) {
            Block::Family(k) => update_family(&mut chain, k, step, &steps[k], rng),
            Block::Logit(k) => update_logit(&mut chain, k, step, rng),
            Block::Sigma => update_sigma(&mut chain, step, rng),
        };
        proposal.record(bi, accepted, adapting);
        if !adapting {
            run.proposed += 1;
            run.accepted += usize::from(accepted);
            let since = iter + 1 - config.burn_in;
            if run.samples.len() < quota && since == mark(run.samples.len()) {
                run.samples.push(chain.sample());
                for (acc, v) in run.mean_sum.iter_mut().zip(&chain.mean) {
                    *acc += v;
                }
            }
        }
    }
    debug_assert_eq!(run.samples.len(), quota);
    Ok(run)
}

struct FamilyFit {
    params: [f64; MAX_ARITY],
    offset: f64,
    /// Tuned random-walk step for each parameter, then the offset.
    steps: [f64; MAX_ARITY + 1],
}

/// Fits one family on its own: best of `init_candidates` uniform prior draws,
/// then `prefit_iterations` single-coordinate Metropolis updates against the
/// likelihood with the noise scale integrated out, `-(m/2) ln SSE`.
fn prefit_family<R: Rng>(
    family: ModelFamily,
    data: &Data,
    dense: &[f64],
    config: &InferenceConfig,
    rng: &mut R,
) -> Result<FamilyFit> {
    let m = data.y.len();
    let arity = family.arity();
    let floor = m as f64 * SIGMA_MIN * SIGMA_MIN;
    let sse_of = |params: &[f64], offset: f64| -> f64 {
        let mut total = 0.0;
        for ((&y, &t), &ln_t) in data.y.iter().zip(&data.t).zip(&data.ln_t) {
            let r = y - (offset - family.eval_raw(params, t, ln_t));
            total += r * r;
        }
        total
    };

    let mut best: Option<(f64, Vec<f64>, f64)> = None;
    for _ in 0..config.init_candidates.max(1) {
        let mut guess = init_params(family, dense, rng)?;
        guess.offset = guess.offset.max(family.eval_raw(&guess.params, data.horizon, data.ln_horizon));
        let err = if guess.offset <= Y_CAP {
            sse_of(&guess.params, guess.offset)
        } else {
            f64::INFINITY
        };
        if best.as_ref().is_none_or(|(e, _, _)| !(err >= *e)) {
            best = Some((err, guess.params, guess.offset));
        }
    }
    let (mut sse, init, mut offset) = best.expect("at least one candidate");
    let mut params = [0.0; MAX_ARITY];
    params[..arity].copy_from_slice(&init);
    if !sse.is_finite() {
        sse = f64::MAX;
    }

    let bounds = family.bounds();
    let mut log_steps = [0.0; MAX_ARITY + 1];
    for (j, &(lo, hi)) in bounds.iter().enumerate() {
        log_steps[j] = (config.proposal_scale * (hi - lo)).ln();
    }
    log_steps[arity] = (config.proposal_scale * Y_CAP).ln();
    let mut tried = [0u32; MAX_ARITY + 1];
    let mut took = [0u32; MAX_ARITY + 1];
    let half_m = 0.5 * m as f64;

    for iter in 0..config.prefit_iterations {
        let j = iter % (arity + 1);
        let z: f64 = rng.sample(StandardNormal);
        let delta = log_steps[j].exp() * z;
        let mut cand = params;
        let mut cand_offset = offset;
        let (lo, hi) = if j < arity { bounds[j] } else { (0.0, Y_CAP) };
        let value = if j < arity {
            cand[j] += delta;
            cand[j]
        } else {
            cand_offset += delta;
            cand_offset
        };
        let mut accepted = false;
        if value >= lo && value <= hi && stays_non_negative(family, &cand[..arity], cand_offset, data) {
            let cand_sse = sse_of(&cand[..arity], cand_offset);
            if cand_sse.is_finite()
                && metropolis(half_m * ((sse + floor).ln() - (cand_sse + floor).ln()), rng)
            {
                params = cand;
                offset = cand_offset;
                sse = cand_sse;
                accepted = true;
            }
        }
        tried[j] += 1;
        took[j] += u32::from(accepted);
        if tried[j] == ADAPT_WINDOW {
            let rate = f64::from(took[j]) / f64::from(ADAPT_WINDOW);
            log_steps[j] = (log_steps[j] + 2.0 * (rate - 0.44)).clamp(-30.0, (hi - lo).ln());
            tried[j] = 0;
            took[j] = 0;
        }
    }

    let mut steps = [0.0; MAX_ARITY + 1];
    for (s, l) in steps.iter_mut().zip(&log_steps).take(arity + 1) {
        *s = l.exp();
    }
    Ok(FamilyFit {
        params,
        offset,
        steps,
    })
}

fn metropolis<R: Rng>(log_ratio: f64, rng: &mut R) -> bool {
    log_ratio >= 0.0 || rng.random::<f64>().ln() < log_ratio
}

fn update_family<R: Rng>(
    chain: &mut Chain<'_>,
    k: usize,
    step: f64,
    coord_steps: &[f64; MAX_ARITY + 1],
    rng: &mut R,
) -> bool {
    let family = ModelFamily::ALL[k];
    let bounds = family.bounds();
    let arity = family.arity();
    let mut params = chain.params[k];
    for ((p, &(lo, hi)), s) in params.iter_mut().zip(bounds).zip(coord_steps) {
        let z: f64 = rng.sample(StandardNormal);
        *p += step * s * z;
        if *p < lo || *p > hi {
            return false;
        }
    }
    let z: f64 = rng.sample(StandardNormal);
    let offset = chain.offsets[k] + step * coord_steps[arity] * z;
    if !(0.0..=Y_CAP).contains(&offset) || !stays_non_negative(family, &params[..arity], offset, chain.data) {
        return false;
    }

    let m = chain.data.y.len();
    let mut new_values = std::mem::take(&mut chain.scratch_values);
    chain.eval_family_into(k, &params[..family.arity()], &mut new_values);
    let w = chain.weights[k];
    let old_offset = chain.offsets[k];
    let old = &chain.values[k * m..(k + 1) * m];
    let mut new_sse = 0.0;
    for i in 0..m {
        let v = chain.mean[i] + w * ((offset - new_values[i]) - (old_offset - old[i]));
        chain.scratch_mean[i] = v;
        let r = chain.data.y[i] - v;
        new_sse += r * r;
    }
    let accept = new_sse.is_finite()
        && metropolis(
            chain.log_target(new_sse, chain.log_sigma) - chain.log_target(chain.sse, chain.log_sigma),
            rng,
        );
    if accept {
        chain.values[k * m..(k + 1) * m].copy_from_slice(&new_values);
        std::mem::swap(&mut chain.mean, &mut chain.scratch_mean);
        chain.params[k] = params;
        chain.offsets[k] = offset;
        chain.sse = new_sse;
    }
    chain.scratch_values = new_values;
    accept
}

fn update_logit<R: Rng>(chain: &mut Chain<'_>, k: usize, step: f64, rng: &mut R) -> bool {
    let z: f64 = rng.sample(StandardNormal);
    let u = chain.logits[k] + step * 2.0 * LOGIT_BOUND * z;
    if !(-LOGIT_BOUND..=LOGIT_BOUND).contains(&u) {
        return false;
    }
    let mut logits = chain.logits;
    logits[k] = u;
    let weights = softmax(&logits);
    let m = chain.data.y.len();
    chain.scratch_mean.iter_mut().for_each(|v| *v = 0.0);
    for j in 0..FAMILIES {
        let w = weights[j];
        let off = chain.offsets[j];
        let row = &chain.values[j * m..(j + 1) * m];
        for (acc, f) in chain.scratch_mean.iter_mut().zip(row) {
            *acc += w * (off - f);
        }
    }
    let new_sse = sse(&chain.data.y, &chain.scratch_mean);
    let accept = new_sse.is_finite()
        && metropolis(
            chain.log_target(new_sse, chain.log_sigma) - chain.log_target(chain.sse, chain.log_sigma),
            rng,
        );
    if accept {
        chain.logits = logits;
        chain.weights = weights;
        std::mem::swap(&mut chain.mean, &mut chain.scratch_mean);
        chain.sse = new_sse;
    }
    accept
}

fn update_sigma<R: Rng>(chain: &mut Chain<'_>, step: f64, rng: &mut R) -> bool {
    let z: f64 = rng.sample(StandardNormal);
    let proposed = chain.log_sigma + step * 10.0 * z;
    let sigma = proposed.exp();
    if !(sigma > SIGMA_MIN && sigma <= Y_CAP) {
        return false;
    }
    let accept = metropolis(
        chain.log_target(chain.sse, proposed) - chain.log_target(chain.sse, chain.log_sigma),
        rng,
    );
    if accept {
        chain.log_sigma = proposed;
    }
    accept
}

/// Noise-free posterior predictive at `horizon`, in curve units.
pub fn predict_at(posterior: &Posterior, horizon: Epoch, delta: f64) -> Result<Prediction> {
    if posterior.samples.is_empty() {
        return Err(Error::domain("no posterior samples"));
    }
    if horizon < 1 {
        return Err(Error::domain("horizon must be >= 1"));
    }
    let t = f64::from(horizon);
    let samples = posterior
        .samples
        .iter()
        .map(|s| posterior.scale * s.eval_raw(t))
        .collect();
    Prediction::from_samples(samples, delta)
}

/// Fraction of predictive samples strictly below `tau`.
pub fn prob_below(prediction: &Prediction, tau: f64) -> f64 {
    let n = prediction.samples.len();
    if n == 0 {
        return 0.0;
    }
    prediction.samples.iter().filter(|&&v| v < tau).count() as f64 / n as f64
}

pub fn pearson_correlation(a: &[f64], b: &[f64]) -> Option<f64> {
    let n = a.len().min(b.len());
    if n < 2 {
        return None;
    }
    let (a, b) = (&a[..n], &b[..n]);
    let ma = a.iter().sum::<f64>() / n as f64;
    let mb = b.iter().sum::<f64>() / n as f64;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        let (dx, dy) = (x - ma, y - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    if saa <= 0.0 || sbb <= 0.0 {
        return None;
    }
    Some(sab / (saa * sbb).sqrt())
}

/// Guard rules on a prediction: negative predicted loss, or a fit whose
/// correlation with the observations is below 0.5. `fitted[i]` must align
/// with the i-th finite observation of `curve`. An undefined correlation
/// (a constant series) counts as low.
pub fn check_validity(prediction: &Prediction, curve: &LearningCurve, fitted: &[f64]) -> Validity {
    let observed: Vec<f64> = curve.observed().map(|(_, y)| y).collect();
    if observed.len() < MIN_VALIDITY_OBSERVATIONS || fitted.len() != observed.len() {
        return Validity::InsufficientData;
    }
    if prediction.point_estimate < 0.0 {
        return Validity::NegativeLoss;
    }
    match pearson_correlation(fitted, &observed) {
        Some(r) if r >= MIN_CORRELATION => Validity::Ok,
        _ => Validity::LowCorrelation,
    }
}

/// Fit, predict at the curve's horizon, and run the validity checks.
pub fn forecast(curve: &LearningCurve, config: &InferenceConfig) -> Result<(Posterior, Prediction)> {
    let posterior = mh_sample(curve, config)?;
    let mut prediction = predict_at(&posterior, curve.horizon(), config.quantile_delta)?;
    prediction.validity = check_validity(&prediction, curve, &posterior.fitted);
    Ok((posterior, prediction))
}
