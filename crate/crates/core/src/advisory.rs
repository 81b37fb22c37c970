//! Online halting advisor.
//!
//! Clients register runs, report one validation error per run per epoch, and
//! ask for decisions. Decisions are taken at epoch barriers: once every alive
//! run has reported epoch `t`, the race advances exactly as the offline
//! simulator does. Registration closes at the first report.
//!
//! The wire format is one JSON object per line; see [`Request`] and
//! [`Response`].

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::criteria::{Decision, Reason, RunDecision};
use crate::error::{Error, Result};
use crate::inference::{Epoch, RunId};
use crate::race::{FitCache, RaceConfig, RaceState};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "action", rename_all = "kebab-case")]
pub enum Request {
    Register {
        #[serde(default)]
        run_id: Option<RunId>,
        #[serde(default)]
        config: Option<serde_json::Value>,
    },
    /// `error: null` reports an invalid observation.
    Report {
        run_id: RunId,
        epoch: Epoch,
        error: Option<f64>,
    },
    Decision {
        run_id: RunId,
    },
    /// Halt epoch of every run so far (`null` for runs still alive or finished).
    Summary,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecisionView {
    pub decision: Decision,
    pub reason: Reason,
    /// Barrier epoch the decision belongs to (0 before the first barrier).
    pub epoch: Epoch,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tau: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub probability: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorView {
    pub class: String,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Response {
    pub ok: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub run_id: Option<RunId>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub decision: Option<DecisionView>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub halted: Option<BTreeMap<RunId, Option<Epoch>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<ErrorView>,
}

impl Response {
    fn ok() -> Self {
        Response {
            ok: true,
            run_id: None,
            decision: None,
            halted: None,
            error: None,
        }
    }

    fn failure(err: &Error) -> Self {
        Response {
            ok: false,
            error: Some(ErrorView {
                class: err.class().to_string(),
                message: err.to_string(),
            }),
            ..Response::ok()
        }
    }
}

#[derive(Debug)]
pub struct Advisor {
    config: RaceConfig,
    cache: FitCache,
    registered: BTreeMap<RunId, Option<serde_json::Value>>,
    state: Option<RaceState>,
    pending: BTreeMap<RunId, f64>,
    latest: BTreeMap<RunId, DecisionView>,
    halted_at: BTreeMap<RunId, Epoch>,
}

impl Advisor {
    pub fn new(config: RaceConfig) -> Result<Self> {
        config.validate()?;
        Ok(Advisor {
            config,
            cache: FitCache::new(),
            registered: BTreeMap::new(),
            state: None,
            pending: BTreeMap::new(),
            latest: BTreeMap::new(),
            halted_at: BTreeMap::new(),
        })
    }

    pub fn config(&self) -> &RaceConfig {
        &self.config
    }

    pub fn state(&self) -> Option<&RaceState> {
        self.state.as_ref()
    }

    pub fn handle(&mut self, request: Request) -> Response {
        let result = match request {
            Request::Register { run_id, config } => self.register(run_id, config).map(|id| Response {
                run_id: Some(id),
                ..Response::ok()
            }),
            Request::Report {
                run_id,
                epoch,
                error,
            } => self
                .report(&run_id, epoch, error.unwrap_or(f64::NAN))
                .map(|()| Response {
                    run_id: Some(run_id),
                    ..Response::ok()
                }),
            Request::Decision { run_id } => self.decision(&run_id).map(|d| Response {
                run_id: Some(run_id),
                decision: Some(d),
                ..Response::ok()
            }),
            Request::Summary => Ok(Response {
                halted: Some(self.halt_epochs()),
                ..Response::ok()
            }),
        };
        result.unwrap_or_else(|e| Response::failure(&e))
    }

    /// Parses one request line and serializes the response.
    pub fn handle_line(&mut self, line: &str) -> String {
        let response = match serde_json::from_str::<Request>(line) {
            Ok(req) => self.handle(req),
            Err(e) => Response::failure(&Error::from(e)),
        };
        serde_json::to_string(&response).expect("response serializes")
    }

    pub fn register(&mut self, run_id: Option<RunId>, config: Option<serde_json::Value>) -> Result<RunId> {
        if self.state.is_some() {
            return Err(Error::Protocol("registration is closed once reporting starts".into()));
        }
        let id = run_id.unwrap_or_else(|| RunId::new(format!("run-{:03}", self.registered.len())));
        if self.registered.contains_key(&id) {
            return Err(Error::Protocol(format!("run {id} is already registered")));
        }
        self.registered.insert(id.clone(), config);
        Ok(id)
    }

    pub fn report(&mut self, run: &RunId, epoch: Epoch, value: f64) -> Result<()> {
        if !self.registered.contains_key(run) {
            return Err(Error::NotFound(format!("unknown run {run}")));
        }
        if self.state.is_none() {
            self.state = Some(RaceState::new(self.registered.keys().cloned(), self.config.horizon)?);
        }
        let state = self.state.as_mut().expect("initialized above");
        if state.is_finished() {
            return Err(Error::Protocol(format!("race already reached its horizon {}", state.horizon())));
        }
        if !state.curves[run].is_alive() {
            return Err(Error::Protocol(format!("report for halted run {run}")));
        }
        let expected = state.epoch + 1;
        if epoch != expected {
            return Err(Error::Protocol(format!(
                "run {run} reported epoch {epoch}, expected {expected}"
            )));
        }
        if self.pending.contains_key(run) {
            return Err(Error::Protocol(format!("run {run} already reported epoch {epoch}")));
        }
        self.pending.insert(run.clone(), value);
        if state.alive().all(|id| self.pending.contains_key(id)) {
            let observations = std::mem::take(&mut self.pending);
            match state.step(&observations, &self.config, &self.cache) {
                Ok(decisions) => {
                    for (id, d) in decisions {
                        if d.is_halt() {
                            self.halted_at.insert(id.clone(), expected);
                        }
                        self.latest.insert(id, view(&d, expected));
                    }
                }
                Err(e) => {
                    self.pending = observations;
                    self.pending.remove(run);
                    return Err(e);
                }
            }
        }
        Ok(())
    }

    pub fn decision(&self, run: &RunId) -> Result<DecisionView> {
        if !self.registered.contains_key(run) {
            return Err(Error::NotFound(format!("unknown run {run}")));
        }
        if self.halted_at.contains_key(run) {
            return Ok(self.latest[run].clone());
        }
        let barrier = self.state.as_ref().map_or(0, |s| s.epoch);
        if !self.pending.is_empty() {
            return Ok(view(&RunDecision::cont(Reason::PendingBarrier), barrier));
        }
        match self.latest.get(run) {
            Some(d) => Ok(d.clone()),
            None => Ok(view(&RunDecision::cont(Reason::Warmup), barrier)),
        }
    }

    pub fn halt_epochs(&self) -> BTreeMap<RunId, Option<Epoch>> {
        self.registered
            .keys()
            .map(|id| (id.clone(), self.halted_at.get(id).copied()))
            .collect()
    }
}

fn view(d: &RunDecision, epoch: Epoch) -> DecisionView {
    DecisionView {
        decision: d.decision,
        reason: d.reason,
        epoch,
        tau: d.tau,
        probability: d.probability,
    }
}
