//! Live sessions: the service runs the ground-truth game, a client submits
//! intended controls step by step, and every step answers with the state and
//! the prediction fan re-anchored at the present.

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex, RwLock};

use diffgame_core::dynamics::{scenario, DynamicsError, GameDefinition, ScenarioKind, ScenarioParams, Simulator};
use diffgame_core::inversion::InversionSettings;
use diffgame_core::numerics::{steps_in, TimeGrid};
use diffgame_core::predictor::{estimate_horizon, predict, HorizonSpec, Prediction, PredictionStatus, SurrogateSpec};
use diffgame_core::probes::{generate_library, random_probe_set, Expr, ProbeLibrary, ProbeSet};
use diffgame_core::selection::{
    evolve_pool, hyperplane_probe_set, projective_search, select_best, BacktestReport, CandidateLabel, CandidateSet, Pool,
    ProjectiveBase, SelectionError,
};
use nalgebra::DVector;
use serde::{Deserialize, Serialize};
use tokio::sync::broadcast;

use crate::config::{HorizonConfig, SelectionConfig};
use crate::formats::PredictionRecord;

/// Largest `steps` accepted by one step request.
pub const MAX_STEPS_PER_REQUEST: usize = 100_000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PredictorConfig {
    #[serde(default = "default_dt")]
    pub dt: f64,
    #[serde(default = "default_blend")]
    pub blend: f64,
    /// Prediction length.
    #[serde(default = "default_horizon")]
    pub horizon: f64,
    /// Prefix expressions; defaults to `u_0 .. u_{d-1}, phi_0`.
    #[serde(default)]
    pub probes: Option<Vec<String>>,
}

fn default_dt() -> f64 {
    0.1
}
fn default_blend() -> f64 {
    1.0
}
fn default_horizon() -> f64 {
    1.0
}
fn default_h() -> f64 {
    0.01
}

impl Default for PredictorConfig {
    fn default() -> Self {
        Self { dt: default_dt(), blend: default_blend(), horizon: default_horizon(), probes: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CreateSession {
    pub scenario: String,
    #[serde(default)]
    pub params: ScenarioParams,
    #[serde(default = "default_h")]
    pub h: f64,
    /// Defaults to the shortest warm-up the configuration allows.
    #[serde(default)]
    pub warmup_steps: Option<usize>,
    #[serde(default)]
    pub initial_state: Option<Vec<f64>>,
    /// Warm-up control, and the second player's control when a step request
    /// only carries the first player's.
    #[serde(default)]
    pub default_intended: Option<Vec<f64>>,
    #[serde(default)]
    pub predictor: PredictorConfig,
    #[serde(default)]
    pub selection: SelectionConfig,
    #[serde(default)]
    pub horizon: Option<HorizonConfig>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioInfo {
    pub name: String,
    pub state_dim: usize,
    pub control_dims: [usize; 2],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionCreated {
    pub session: u64,
    pub scenario: ScenarioInfo,
    pub warmup_steps: usize,
    pub t: f64,
    pub state: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StepRequest {
    pub u_intended: Vec<f64>,
    #[serde(default = "one")]
    pub steps: usize,
}

fn one() -> usize {
    1
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SessionStatus {
    Active,
    Terminated,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FanEntry {
    pub label: String,
    /// Backtest score; null when selection is off or the backtest failed.
    pub score: Option<f64>,
    pub best: bool,
    pub prediction: PredictionRecord,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepResponse {
    /// Number of grid steps taken since the end of the warm-up.
    pub step: u64,
    pub t: f64,
    pub state: Vec<f64>,
    pub status: SessionStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reason: Option<String>,
    pub fan: Vec<FanEntry>,
    pub mu: Option<String>,
    pub horizon_t1: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub code: String,
    pub message: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub field: Option<String>,
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ServiceError {
    #[error("{field}: {message}")]
    Validation { field: String, message: String },
    #[error("no session {0}")]
    UnknownSession(String),
    #[error("session {0} has terminated")]
    Terminated(u64),
}

impl ServiceError {
    fn validation(field: impl Into<String>, message: impl std::fmt::Display) -> Self {
        Self::Validation { field: field.into(), message: message.to_string() }
    }

    pub fn code(&self) -> &'static str {
        match self {
            Self::Validation { .. } => "ValidationError",
            Self::UnknownSession(_) => "UnknownSession",
            Self::Terminated(_) => "SessionTerminated",
        }
    }

    pub fn body(&self) -> ErrorBody {
        let field = match self {
            Self::Validation { field, .. } => Some(field.clone()),
            _ => None,
        };
        let message = match self {
            Self::Validation { message, .. } => message.clone(),
            other => other.to_string(),
        };
        ErrorBody { code: self.code().into(), message, field }
    }
}

enum Selector {
    Single(ProbeSet),
    Pool { pool: Pool, lib: ProbeLibrary, seed: u64, evolve: bool },
    Projective { base: ProjectiveBase, budget: usize, seed: u64, prev: Option<CandidateLabel> },
}

/// One live game. Operations on a session are serialized by its lock.
pub struct Session {
    sim: Simulator,
    h: f64,
    game: GameDefinition,
    default_uo: DVector<f64>,
    player1_dim: usize,
    predictor: PredictorConfig,
    probe_set: ProbeSet,
    selector: Selector,
    horizon: Option<HorizonSpec>,
    warmup: usize,
    last_report: Option<BacktestReport>,
    terminated: Option<String>,
    events: broadcast::Sender<Arc<str>>,
}

fn delay_steps(field: &str, dt: f64, h: f64) -> Result<usize, ServiceError> {
    match steps_in(dt, h) {
        Some(k) if k >= 1 => Ok(k),
        _ => Err(ServiceError::validation(field, format!("{dt} is not a positive multiple of h = {h}"))),
    }
}

fn vector(field: &str, v: &[f64], len: usize) -> Result<DVector<f64>, ServiceError> {
    if v.len() != len {
        return Err(ServiceError::validation(field, format!("expected {len} values, got {}", v.len())));
    }
    if v.iter().any(|x| !x.is_finite()) {
        return Err(ServiceError::validation(field, "values must be finite"));
    }
    Ok(DVector::from_column_slice(v))
}

impl Session {
    pub fn create(req: &CreateSession) -> Result<Self, ServiceError> {
        let kind = ScenarioKind::parse(&req.scenario).map_err(|e| ServiceError::validation("scenario", e))?;
        let (game, reactions) = scenario(&req.scenario, &req.params).map_err(|e| ServiceError::validation("params", e))?;
        let (d, m) = (game.control_dim(), game.state_dim);
        if !(req.h > 0.0) || !req.h.is_finite() {
            return Err(ServiceError::validation("h", "must be positive and finite"));
        }
        let h = req.h;
        let phi0 = match &req.initial_state {
            Some(v) => vector("initial_state", v, m)?,
            None => kind.default_initial_state(),
        };
        let default_uo = match &req.default_intended {
            Some(v) => vector("default_intended", v, d)?,
            None => kind.default_intended(),
        };

        let p = &req.predictor;
        let mut max_delay = delay_steps("predictor.dt", p.dt, h)?;
        if !(0.0..=1.0).contains(&p.blend) {
            return Err(ServiceError::validation("predictor.blend", "must lie in [0, 1]"));
        }
        if steps_in(p.horizon, h).is_none() {
            return Err(ServiceError::validation("predictor.horizon", "must be a non-negative multiple of h"));
        }
        let probe_set = match &p.probes {
            None => ProbeSet::canonical(d, m),
            Some(exprs) => {
                let exprs = exprs
                    .iter()
                    .enumerate()
                    .map(|(i, s)| Expr::parse(s).map_err(|e| ServiceError::validation(format!("predictor.probes[{i}]"), e)))
                    .collect::<Result<Vec<_>, _>>()?;
                ProbeSet::new(exprs, d, m).map_err(|e| ServiceError::validation("predictor.probes", e))?
            }
        };

        let horizon = match &req.horizon {
            None => None,
            Some(hc) => {
                max_delay = max_delay.max(delay_steps("horizon.dt1", hc.dt1, h)?).max(delay_steps("horizon.dt2", hc.dt2, h)?);
                Some(HorizonSpec::new(hc.dt1, hc.dt2, hc.theta, hc.t_max).map_err(|e| ServiceError::validation("horizon", e))?)
            }
        };

        let selector = match &req.selection {
            SelectionConfig::None => Selector::Single(probe_set.clone()),
            SelectionConfig::Pool { size, seed, evolve } => {
                if *size < 2 {
                    return Err(ServiceError::validation("selection.size", "a pool needs at least 2 members"));
                }
                let lib = generate_library(d, m);
                let mut sets = vec![probe_set.clone()];
                for i in 1..*size as u64 {
                    sets.push(random_probe_set(&lib, seed.wrapping_add(i)).map_err(|e| ServiceError::validation("selection.seed", e))?);
                }
                let pool = Pool::new(sets).map_err(|e| ServiceError::validation("selection.size", e))?;
                Selector::Pool { pool, lib, seed: *seed, evolve: *evolve }
            }
            SelectionConfig::Projective { budget, seed, base } => {
                if *budget < 1 {
                    return Err(ServiceError::validation("selection.budget", "must be at least 1"));
                }
                let base = match base {
                    None => ProjectiveBase::linear(d, m),
                    Some(exprs) => {
                        let exprs = exprs
                            .iter()
                            .enumerate()
                            .map(|(i, s)| Expr::parse(s).map_err(|e| ServiceError::validation(format!("selection.base[{i}]"), e)))
                            .collect::<Result<Vec<_>, _>>()?;
                        ProjectiveBase::new(d, m, exprs).map_err(|e| ServiceError::validation("selection.base", e))?
                    }
                };
                Selector::Projective { base, budget: *budget, seed: *seed, prev: None }
            }
        };

        // Backtests anchor one delay back, so selection doubles the need.
        let dp = delay_steps("predictor.dt", p.dt, h)?;
        let required = match selector {
            Selector::Single(_) => max_delay + 2,
            _ => (2 * dp + 2).max(max_delay + 2),
        };
        let warmup = req.warmup_steps.unwrap_or(required);
        if warmup < required {
            return Err(ServiceError::validation("warmup_steps", format!("need at least {required} warm-up steps for this configuration")));
        }

        let mut sim = Simulator::new(game.clone(), reactions, 0.0, h, phi0).map_err(|e| ServiceError::validation("initial_state", e))?;
        let warm = (|| -> Result<(), DynamicsError> {
            sim.record(default_uo.clone())?;
            for _ in 0..warmup {
                sim.step(default_uo.clone())?;
            }
            Ok(())
        })();
        warm.map_err(|e| ServiceError::validation("warmup_steps", format!("warm-up failed: {e}")))?;

        let (events, _) = broadcast::channel(64);
        Ok(Self {
            sim,
            h,
            player1_dim: game.control_dims.0,
            game,
            default_uo,
            predictor: p.clone(),
            probe_set,
            selector,
            horizon,
            warmup,
            last_report: None,
            terminated: None,
            events,
        })
    }

    pub fn info(&self) -> ScenarioInfo {
        ScenarioInfo {
            name: self.game.name.clone(),
            state_dim: self.game.state_dim,
            control_dims: [self.game.control_dims.0, self.game.control_dims.1],
        }
    }

    fn time(&self) -> f64 {
        (self.sim.recorded() - 1) as f64 * self.h
    }

    pub fn subscribe(&self) -> broadcast::Receiver<Arc<str>> {
        self.events.subscribe()
    }

    pub fn last_report(&self) -> Option<&BacktestReport> {
        self.last_report.as_ref()
    }

    /// Advances `steps` grid steps holding `u_intended`, then predicts.
    pub fn step(&mut self, req: &StepRequest) -> Result<StepResponse, ServiceError> {
        if self.terminated.is_some() {
            return Err(ServiceError::Terminated(0));
        }
        let d = self.game.control_dim();
        let uo = if req.u_intended.len() == self.player1_dim && self.player1_dim != d {
            let mut full = self.default_uo.clone();
            full.rows_mut(0, self.player1_dim).copy_from_slice(&req.u_intended);
            vector("u_intended", full.as_slice(), d)?
        } else {
            vector("u_intended", &req.u_intended, d)?
        };
        if req.steps > MAX_STEPS_PER_REQUEST {
            return Err(ServiceError::validation("steps", format!("at most {MAX_STEPS_PER_REQUEST} per request")));
        }
        for _ in 0..req.steps {
            if let Err(e) = self.sim.step(uo.clone()) {
                let reason = e.to_string();
                self.terminated = Some(reason.clone());
                let resp = StepResponse {
                    step: self.steps_taken(),
                    t: self.time(),
                    state: self.sim.current_state().as_slice().to_vec(),
                    status: SessionStatus::Terminated,
                    reason: Some(reason),
                    fan: Vec::new(),
                    mu: None,
                    horizon_t1: None,
                };
                self.publish(&resp);
                return Ok(resp);
            }
        }
        let resp = self.predict_now();
        self.publish(&resp);
        Ok(resp)
    }

    fn steps_taken(&self) -> u64 {
        (self.sim.recorded() - 1 - self.warmup) as u64
    }

    fn publish(&self, resp: &StepResponse) {
        let json: Arc<str> = serde_json::to_string(resp).expect("plain data serializes").into();
        // No subscribers is fine.
        let _ = self.events.send(json);
    }

    fn predict_now(&mut self) -> StepResponse {
        let history = self.sim.history();
        let t0 = history.grid.t_end();
        let step = self.steps_taken();
        let p = &self.predictor;
        let template = SurrogateSpec::new(self.probe_set.clone(), p.dt, p.blend).with_inversion(InversionSettings::for_history(&history));
        let run = |set: &ProbeSet| {
            let mut spec = template.clone();
            spec.probe_set = set.clone();
            predict(&self.game, &history, t0, &spec, p.horizon).unwrap_or_else(|e| Prediction {
                anchor: t0,
                grid: TimeGrid { t_start: t0 + history.grid.h, h: history.grid.h, count: 0 },
                phi_hat: Vec::new(),
                u_star: Vec::new(),
                diagnostics: Vec::new(),
                status: PredictionStatus::Truncated { step: 0, reason: e.to_string() },
            })
        };
        let entry = |label: &CandidateLabel, score: Option<f64>, best: bool, pred: &Prediction| FanEntry {
            label: label.to_string(),
            score: score.filter(|s| s.is_finite()),
            best,
            prediction: pred.into(),
        };

        let (fan, mu, chosen): (Vec<FanEntry>, Option<CandidateLabel>, Option<ProbeSet>) = match &mut self.selector {
            Selector::Single(set) => {
                let label = CandidateLabel::Finite(0);
                let pred = run(set);
                (vec![entry(&label, None, true, &pred)], Some(label), Some(set.clone()))
            }
            Selector::Pool { pool, lib, seed, evolve } => {
                let report = select_best(&self.game, &history, &pool.candidates, t0, &template);
                let best = report.as_ref().ok().map(|r| r.best_index);
                let fan = pool
                    .candidates
                    .iter()
                    .enumerate()
                    .map(|(i, c): (usize, &CandidateSet)| {
                        let score = report.as_ref().ok().and_then(|r| r.score_of(&c.label));
                        entry(&c.label, score, best == Some(i), &run(&c.set))
                    })
                    .collect();
                let mu = best.map(|i| pool.candidates[i].label.clone());
                let chosen = best.map(|i| pool.candidates[i].set.clone());
                if let Ok(r) = &report {
                    if *evolve {
                        if let Ok(next) = evolve_pool(pool, r, lib, seed.wrapping_add(1_000).wrapping_add(step)) {
                            *pool = next;
                        }
                    }
                }
                self.last_report = report.ok();
                (fan, mu, chosen)
            }
            Selector::Projective { base, budget, seed, prev } => {
                match projective_search(&self.game, &history, base, t0, &template, prev.as_ref(), *budget, seed.wrapping_add(step)) {
                    Ok((label, report)) => {
                        let CandidateLabel::Projective(c) = &label else { unreachable!("projective search returns hyperplane labels") };
                        let set = hyperplane_probe_set(base, c).ok();
                        let pred = match &set {
                            Some(s) => run(s),
                            None => run(&self.probe_set),
                        };
                        let fan = vec![entry(&label, Some(report.best_score()), true, &pred)];
                        *prev = Some(label.clone());
                        self.last_report = Some(report);
                        (fan, Some(label), set)
                    }
                    Err(e) => {
                        let label = prev.clone().unwrap_or(CandidateLabel::Projective(Vec::new()));
                        let pred = Prediction {
                            anchor: t0,
                            grid: TimeGrid { t_start: t0 + history.grid.h, h: history.grid.h, count: 0 },
                            phi_hat: Vec::new(),
                            u_star: Vec::new(),
                            diagnostics: Vec::new(),
                            status: PredictionStatus::Truncated { step: 0, reason: selection_reason(&e) },
                        };
                        (vec![entry(&label, None, false, &pred)], None, None)
                    }
                }
            }
        };

        let horizon_t1 = match (&self.horizon, &chosen) {
            (Some(hs), Some(set)) => {
                let mut spec = template.clone();
                spec.probe_set = set.clone();
                estimate_horizon(&self.game, &history, t0, &spec, hs).ok()
            }
            _ => None,
        };

        StepResponse {
            step,
            t: t0,
            state: self.sim.current_state().as_slice().to_vec(),
            status: SessionStatus::Active,
            reason: None,
            fan,
            mu: mu.map(|l| l.to_string()),
            horizon_t1,
        }
    }
}

fn selection_reason(e: &SelectionError) -> String {
    match e {
        SelectionError::AllCandidatesFailed => "AllCandidatesFailed".into(),
        other => other.to_string(),
    }
}

/// Registry of live sessions. Ids are assigned sequentially from 1.
#[derive(Default)]
pub struct SessionManager {
    next_id: AtomicU64,
    sessions: RwLock<BTreeMap<u64, Arc<Mutex<Session>>>>,
}

fn parse_id(id: &str) -> Result<u64, ServiceError> {
    id.parse().map_err(|_| ServiceError::UnknownSession(id.to_string()))
}

impl SessionManager {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn create(&self, req: &CreateSession) -> Result<SessionCreated, ServiceError> {
        let session = Session::create(req)?;
        let id = self.next_id.fetch_add(1, Ordering::Relaxed) + 1;
        let created = SessionCreated {
            session: id,
            scenario: session.info(),
            warmup_steps: session.warmup,
            t: session.time(),
            state: session.sim.current_state().as_slice().to_vec(),
        };
        self.sessions.write().expect("registry lock").insert(id, Arc::new(Mutex::new(session)));
        Ok(created)
    }

    pub fn get(&self, id: &str) -> Result<Arc<Mutex<Session>>, ServiceError> {
        let key = parse_id(id)?;
        self.sessions
            .read()
            .expect("registry lock")
            .get(&key)
            .cloned()
            .ok_or_else(|| ServiceError::UnknownSession(id.to_string()))
    }

    pub fn step(&self, id: &str, req: &StepRequest) -> Result<StepResponse, ServiceError> {
        let session = self.get(id)?;
        let mut s = session.lock().expect("session lock");
        s.step(req).map_err(|e| match e {
            ServiceError::Terminated(_) => ServiceError::Terminated(parse_id(id).unwrap_or(0)),
            other => other,
        })
    }

    pub fn close(&self, id: &str) -> Result<(), ServiceError> {
        let key = parse_id(id)?;
        self.sessions
            .write()
            .expect("registry lock")
            .remove(&key)
            .map(|_| ())
            .ok_or_else(|| ServiceError::UnknownSession(id.to_string()))
    }

    /// Event stream of a session's step responses as JSON.
    pub fn subscribe(&self, id: &str) -> Result<broadcast::Receiver<Arc<str>>, ServiceError> {
        Ok(self.get(id)?.lock().expect("session lock").subscribe())
    }

    pub fn len(&self) -> usize {
        self.sessions.read().expect("registry lock").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}
