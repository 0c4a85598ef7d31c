//! Short-term prediction by an ordinary game with retarded arguments.
//!
//! From an anchor `t0` the interactive controls are replaced by surrogates
//! `u*(t)` that reproduce, at the current intended control and an evaluation
//! state taken from `t - a·dt`, the conserved values observed at `t - dt`.
//! The resulting delay system is integrated by the method of steps over a
//! buffer that holds the observed history up to `t0` and the predicted
//! trajectory after it.

use alloc::string::{String, ToString};
use alloc::sync::Arc;
use alloc::vec::Vec;
use core::fmt;

use nalgebra::DVector;

use crate::conservation::{estimate_frames, FrameSeries};
use crate::dynamics::{GameDefinition, History};
use crate::inversion::{invert_controls, InversionSettings};
use crate::numerics::{steps_in, sup_norm, TimeGrid};
use crate::probes::{ProbeError, ProbeSet};

/// Intended controls assumed after the anchor.
#[derive(Clone)]
pub enum ControlPlan {
    /// Zero-order hold of the last observed intended control.
    HoldLast,
    /// Explicit function of time.
    Schedule(Arc<dyn Fn(f64) -> DVector<f64> + Send + Sync>),
    /// Caller-supplied samples for prediction steps `1, 2, ..`; the last
    /// sample is held once the stream runs out.
    Live(Vec<DVector<f64>>),
}

impl fmt::Debug for ControlPlan {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::HoldLast => f.write_str("HoldLast"),
            Self::Schedule(_) => f.write_str("Schedule(..)"),
            Self::Live(s) => write!(f, "Live({} samples)", s.len()),
        }
    }
}

impl ControlPlan {
    pub fn schedule<F>(f: F) -> Self
    where
        F: Fn(f64) -> DVector<f64> + Send + Sync + 'static,
    {
        Self::Schedule(Arc::new(f))
    }

    fn at(&self, step: usize, t: f64, last_observed: &DVector<f64>) -> DVector<f64> {
        match self {
            Self::HoldLast => last_observed.clone(),
            Self::Schedule(f) => f(t),
            Self::Live(samples) => samples
                .get(step - 1)
                .or_else(|| samples.last())
                .cloned()
                .unwrap_or_else(|| last_observed.clone()),
        }
    }
}

#[derive(Debug, Clone)]
pub struct SurrogateSpec {
    pub probe_set: ProbeSet,
    /// Delay `dt`, a positive multiple of the history step.
    pub delay: f64,
    /// State evaluated at `t - eval_blend·dt`; 1 is the base formula, 0 the
    /// current state.
    pub eval_blend: f64,
    pub plan: ControlPlan,
    pub inversion: InversionSettings,
}

impl SurrogateSpec {
    pub fn new(probe_set: ProbeSet, delay: f64, eval_blend: f64) -> Self {
        Self {
            probe_set,
            delay,
            eval_blend,
            plan: ControlPlan::HoldLast,
            inversion: InversionSettings::default(),
        }
    }

    pub fn with_plan(mut self, plan: ControlPlan) -> Self {
        self.plan = plan;
        self
    }

    pub fn with_inversion(mut self, inversion: InversionSettings) -> Self {
        self.inversion = inversion;
        self
    }

    /// Delay in grid steps.
    pub fn delay_steps(&self, h: f64) -> Result<usize, PredictError> {
        match steps_in(self.delay, h) {
            Some(d) if d >= 1 => Ok(d),
            _ => Err(PredictError::InvalidDelay(self.delay)),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum PredictError {
    AnchorTooEarly { anchor: f64, required_steps: usize },
    AnchorOffGrid(f64),
    InvalidDelay(f64),
    InvalidBlend(f64),
    InvalidHorizon(f64),
    DimensionMismatch,
    Probe(ProbeError),
}

impl fmt::Display for PredictError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::AnchorTooEarly { anchor, required_steps } => {
                write!(f, "anchor t0 = {anchor} needs at least {required_steps} samples before it")
            }
            Self::AnchorOffGrid(t) => write!(f, "anchor t0 = {t} is not a grid point of the history"),
            Self::InvalidDelay(dt) => write!(f, "delay {dt} is not a positive multiple of the grid step"),
            Self::InvalidBlend(a) => write!(f, "eval blend {a} outside [0, 1]"),
            Self::InvalidHorizon(t) => write!(f, "prediction length {t} is not a non-negative multiple of the grid step"),
            Self::DimensionMismatch => f.write_str("probe set dimensions do not match the history"),
            Self::Probe(e) => e.fmt(f),
        }
    }
}

impl From<ProbeError> for PredictError {
    fn from(e: ProbeError) -> Self {
        Self::Probe(e)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum PredictionStatus {
    Complete,
    /// The surrogate could not be formed at prediction step `step` (1-based).
    Truncated { step: usize, reason: String },
}

impl PredictionStatus {
    pub fn is_complete(&self) -> bool {
        matches!(self, Self::Complete)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepDiagnostics {
    pub newton_iterations: usize,
    pub sigma_ratio: f64,
}

/// Predicted trajectory over `(t0, t0 + T]`.
///
/// `phi_hat[k]` and `u_star[k]` belong to grid time `t0 + (k + 1)·h`; the
/// control applied over `[t0, t0 + h)` is the observed one.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub anchor: f64,
    pub grid: TimeGrid,
    pub phi_hat: Vec<DVector<f64>>,
    pub u_star: Vec<DVector<f64>>,
    pub diagnostics: Vec<StepDiagnostics>,
    pub status: PredictionStatus,
}

impl Prediction {
    /// Time of the last predicted state, or the anchor when empty.
    pub fn last_time(&self) -> f64 {
        if self.phi_hat.is_empty() {
            self.anchor
        } else {
            self.grid.time(self.phi_hat.len() - 1)
        }
    }
}

/// Linear interpolation of the buffer at fractional index `x`.
fn interpolate(buffer: &[DVector<f64>], x: f64) -> DVector<f64> {
    let lo = libm::floor(x);
    let frac = x - lo;
    let lo = lo as usize;
    if frac == 0.0 || lo + 1 >= buffer.len() {
        buffer[lo].clone()
    } else {
        &buffer[lo] * (1.0 - frac) + &buffer[lo + 1] * frac
    }
}

/// Grid index of the anchor, validated against the delay.
fn anchor_index(history: &History, t0: f64, delay_steps: usize) -> Result<usize, PredictError> {
    let i0 = history.grid.index_of(t0).ok_or(PredictError::AnchorOffGrid(t0))?;
    let required = delay_steps + 2;
    if i0 < required {
        return Err(PredictError::AnchorTooEarly { anchor: t0, required_steps: required });
    }
    Ok(i0)
}

fn validate(history: &History, spec: &SurrogateSpec, horizon: f64) -> Result<(usize, usize), PredictError> {
    let h = history.grid.h;
    let d = spec.delay_steps(h)?;
    if !(0.0..=1.0).contains(&spec.eval_blend) {
        return Err(PredictError::InvalidBlend(spec.eval_blend));
    }
    let steps = steps_in(horizon, h).ok_or(PredictError::InvalidHorizon(horizon))?;
    if spec.probe_set.control_dim() != history.control_dim() || spec.probe_set.state_dim() != history.state_dim() {
        return Err(PredictError::DimensionMismatch);
    }
    Ok((d, steps))
}

/// Predicts `(t0, t0 + horizon]` from the history observed up to `t0`.
///
/// Samples after `t0` in `history` are ignored.
pub fn predict(game: &GameDefinition, history: &History, t0: f64, spec: &SurrogateSpec, horizon: f64) -> Result<Prediction, PredictError> {
    let (d, steps) = validate(history, spec, horizon)?;
    let i0 = anchor_index(history, t0, d)?;
    let observed = history.truncated(i0 + 1);
    let frames = estimate_frames(&observed, &spec.probe_set)?;
    Ok(predict_with_frames(game, &observed, &frames, spec, d, steps))
}

/// Method-of-steps integration over an already truncated history and its
/// frames.
fn predict_with_frames(game: &GameDefinition, observed: &History, frames: &FrameSeries, spec: &SurrogateSpec, d: usize, steps: usize) -> Prediction {
    let h = observed.grid.h;
    let i0 = observed.len() - 1;
    let t0 = observed.grid.time(i0);
    let set = &spec.probe_set;
    let delay_offset = spec.eval_blend * d as f64;

    let mut phi_buf = observed.phi.clone();
    let mut ustar_buf = observed.u_realized.clone();
    let mut uo_buf = observed.u_intended.clone();
    let last_uo = observed.u_intended[i0].clone();

    let mut phi_hat = Vec::with_capacity(steps);
    let mut u_star = Vec::with_capacity(steps);
    let mut diagnostics = Vec::with_capacity(steps);
    let mut status = PredictionStatus::Complete;

    for k in 1..=steps {
        let j = i0 + k;
        let u_hold = &ustar_buf[j - 1];
        let next = match game.advance(&phi_buf[j - 1], u_hold, observed.grid.time(j - 1), h) {
            Ok(p) => p,
            Err(_) => {
                status = PredictionStatus::Truncated { step: k, reason: "NonFiniteState".to_string() };
                break;
            }
        };
        phi_hat.push(next.clone());
        phi_buf.push(next);

        let jd = j - d;
        let frame = &frames.frames[jd.min(i0)];
        let p_delayed = match set.eval(&ustar_buf[jd], &uo_buf[jd], &phi_buf[jd]) {
            Ok(p) => p,
            Err(_) => {
                status = PredictionStatus::Truncated { step: k, reason: "NonFiniteValue".to_string() };
                break;
            }
        };
        let f_target = &frame.alpha * p_delayed;
        let phi_eval = interpolate(&phi_buf, j as f64 - delay_offset);
        let uo = spec.plan.at(k, t0 + k as f64 * h, &last_uo);
        match invert_controls(&frame.alpha, &f_target, set, &uo, &phi_eval, &ustar_buf[j - 1], &spec.inversion) {
            Ok(inv) => {
                diagnostics.push(StepDiagnostics { newton_iterations: inv.iterations, sigma_ratio: inv.sigma_ratio });
                u_star.push(inv.u.clone());
                ustar_buf.push(inv.u);
                uo_buf.push(uo);
            }
            Err(e) => {
                status = PredictionStatus::Truncated { step: k, reason: e.code().to_string() };
                break;
            }
        }
    }

    Prediction {
        anchor: t0,
        grid: TimeGrid { t_start: t0 + h, h, count: steps },
        phi_hat,
        u_star,
        diagnostics,
        status,
    }
}

/// Two delays and a divergence threshold for horizon estimation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HorizonSpec {
    pub dt1: f64,
    pub dt2: f64,
    /// Relative sup-norm divergence allowed between the two predictions.
    pub theta: f64,
    pub t_max: f64,
}

impl HorizonSpec {
    pub fn new(dt1: f64, dt2: f64, theta: f64, t_max: f64) -> Result<Self, PredictError> {
        if dt1 == dt2 || !(dt1 > 0.0) {
            return Err(PredictError::InvalidDelay(dt1));
        }
        if !(dt2 > 0.0) {
            return Err(PredictError::InvalidDelay(dt2));
        }
        if !(theta > 0.0) || !(t_max > 0.0) {
            return Err(PredictError::InvalidHorizon(t_max));
        }
        Ok(Self { dt1, dt2, theta, t_max })
    }
}

/// Largest grid time `t1 <= t0 + t_max` up to which the predictions with
/// delays `dt1` and `dt2` stay within `theta` of each other, relative to the
/// observed state scale. Truncation of either prediction caps `t1`.
pub fn estimate_horizon(game: &GameDefinition, history: &History, t0: f64, template: &SurrogateSpec, hspec: &HorizonSpec) -> Result<f64, PredictError> {
    let h = history.grid.h;
    let steps = libm::round(hspec.t_max / h);
    let horizon = steps * h;
    let mut first = template.clone();
    first.delay = hspec.dt1;
    let mut second = template.clone();
    second.delay = hspec.dt2;
    let a = predict(game, history, t0, &first, horizon)?;
    let b = predict(game, history, t0, &second, horizon)?;
    let i0 = history.grid.index_of(t0).expect("validated by predict");
    let scale = history.state_scale(i0 + 1);
    Ok(horizon_from_pair(&a, &b, scale, hspec.theta))
}

/// Scan of two aligned predictions; see [`estimate_horizon`].
pub fn horizon_from_pair(a: &Prediction, b: &Prediction, scale: f64, theta: f64) -> f64 {
    let mut t1 = a.anchor;
    for (k, (pa, pb)) in a.phi_hat.iter().zip(&b.phi_hat).enumerate() {
        if sup_norm(&(pa - pb)) / scale > theta {
            break;
        }
        t1 = a.grid.time(k);
    }
    t1
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::{scenario, simulate, ScenarioParams};
    use crate::probes::Expr;
    use nalgebra::dvector;

    fn duel_run(t_end: f64) -> (GameDefinition, History) {
        let (game, r) = scenario("linear-duel", &ScenarioParams::new()).unwrap();
        let n = (t_end / 0.01).round() as usize + 1;
        let grid = TimeGrid::new(0.0, 0.01, n).unwrap();
        let hist = simulate(&game, &r, |_| dvector![0.2, -0.1], &grid, &dvector![1.0]).unwrap();
        (game, hist)
    }

    fn p0_spec(dt: f64, a: f64) -> SurrogateSpec {
        SurrogateSpec::new(ProbeSet::canonical(2, 1), dt, a)
    }

    #[test]
    fn exact_recovery_with_current_state() {
        let (game, hist) = duel_run(2.0);
        let pred = predict(&game, &hist, 0.5, &p0_spec(0.1, 0.0), 1.0).unwrap();
        assert_eq!(pred.status, PredictionStatus::Complete);
        assert_eq!(pred.phi_hat.len(), 100);
        let worst = pred.phi_hat.iter().enumerate().map(|(k, p)| (p[0] - hist.phi[51 + k][0]).abs()).fold(0.0, f64::max);
        assert!(worst <= 1e-9, "{worst}");
    }

    #[test]
    fn surrogate_matches_reaction_law_at_eval_state() {
        let (game, hist) = duel_run(2.0);
        for a in [0.0, 0.5, 1.0] {
            let pred = predict(&game, &hist, 0.5, &p0_spec(0.1, a), 0.5).unwrap();
            let i0 = 50;
            // Rebuild the evaluation state from history and predicted states.
            let mut buf: Vec<DVector<f64>> = hist.phi[..=i0].to_vec();
            // Once the delayed point passes the anchor the targets come from
            // predicted values and only a = 0 keeps the law exact.
            let steps = if a == 0.0 { pred.u_star.len() } else { 10 };
            for (k, u) in pred.u_star.iter().take(steps).enumerate() {
                buf.push(pred.phi_hat[k].clone());
                let phi_eval = interpolate(&buf, (i0 + k + 1) as f64 - a * 10.0);
                let law = dvector![0.2 + 0.5 * phi_eval[0], -0.1 - 0.25 * phi_eval[0]];
                assert!((u - law).amax() <= 1e-10, "a = {a}, step {k}");
            }
        }
    }

    #[test]
    fn empty_horizon() {
        let (game, hist) = duel_run(1.0);
        let pred = predict(&game, &hist, 0.5, &p0_spec(0.1, 1.0), 0.0).unwrap();
        assert!(pred.phi_hat.is_empty() && pred.u_star.is_empty());
        assert_eq!(pred.status, PredictionStatus::Complete);
    }

    #[test]
    fn blind_probes_truncate_immediately() {
        let (game, hist) = duel_run(1.0);
        let blind = ProbeSet::new(vec![Expr::uo(0), Expr::uo(1), Expr::phi(0)], 2, 1).unwrap();
        let pred = predict(&game, &hist, 0.5, &SurrogateSpec::new(blind, 0.1, 0.0), 0.3).unwrap();
        assert_eq!(pred.status, PredictionStatus::Truncated { step: 1, reason: "SingularJacobian".into() });
        assert_eq!(pred.phi_hat.len(), 1);
        assert!(pred.u_star.is_empty());
    }

    #[test]
    fn precondition_errors() {
        let (game, hist) = duel_run(1.0);
        assert!(matches!(predict(&game, &hist, 0.11, &p0_spec(0.1, 0.0), 0.1), Err(PredictError::AnchorTooEarly { .. })));
        assert!(predict(&game, &hist, 0.12, &p0_spec(0.1, 0.0), 0.1).is_ok());
        assert!(matches!(predict(&game, &hist, 0.505, &p0_spec(0.1, 0.0), 0.1), Err(PredictError::AnchorOffGrid(_))));
        assert!(matches!(predict(&game, &hist, 0.5, &p0_spec(0.015, 0.0), 0.1), Err(PredictError::InvalidDelay(_))));
        assert!(matches!(predict(&game, &hist, 0.5, &p0_spec(0.1, 1.5), 0.1), Err(PredictError::InvalidBlend(_))));
        assert!(matches!(predict(&game, &hist, 0.5, &p0_spec(0.1, 0.5), 0.105), Err(PredictError::InvalidHorizon(_))));
        let wrong = SurrogateSpec::new(ProbeSet::canonical(4, 4), 0.1, 0.0);
        assert_eq!(predict(&game, &hist, 0.5, &wrong, 0.1).unwrap_err(), PredictError::DimensionMismatch);
    }

    #[test]
    fn future_samples_are_ignored() {
        let (game, hist) = duel_run(2.0);
        let short = hist.truncated(51);
        let a = predict(&game, &hist, 0.5, &p0_spec(0.2, 1.0), 0.6).unwrap();
        let b = predict(&game, &short, 0.5, &p0_spec(0.2, 1.0), 0.6).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn refining_delay_improves_base_formula() {
        let (game, hist) = duel_run(3.0);
        let mut last = f64::INFINITY;
        for dt in [0.4, 0.2, 0.1, 0.05] {
            let pred = predict(&game, &hist, 1.0, &p0_spec(dt, 1.0), 1.0).unwrap();
            let err = pred.phi_hat.iter().enumerate().map(|(k, p)| (p[0] - hist.phi[101 + k][0]).powi(2)).sum::<f64>().sqrt();
            assert!(err < last, "dt = {dt}: {err} !< {last}");
            last = err;
        }
    }

    #[test]
    fn reanchoring_is_coherent() {
        let (game, hist) = duel_run(3.0);
        let spec = p0_spec(0.1, 1.0);
        let a = predict(&game, &hist, 1.0, &spec, 0.5).unwrap();
        let b = predict(&game, &hist, 1.01, &spec, 0.5).unwrap();
        let gap = a.phi_hat[1..].iter().zip(&b.phi_hat).map(|(x, y)| (x - y).amax()).fold(0.0, f64::max);
        assert!(gap < 0.01, "{gap}");
    }

    #[test]
    fn live_and_schedule_plans() {
        let (game, hist) = duel_run(2.0);
        let sched = p0_spec(0.1, 0.0).with_plan(ControlPlan::schedule(|_| dvector![0.2, -0.1]));
        let live = p0_spec(0.1, 0.0).with_plan(ControlPlan::Live(vec![dvector![0.2, -0.1]]));
        let hold = predict(&game, &hist, 0.5, &p0_spec(0.1, 0.0), 0.4).unwrap();
        assert_eq!(predict(&game, &hist, 0.5, &sched, 0.4).unwrap(), hold);
        assert_eq!(predict(&game, &hist, 0.5, &live, 0.4).unwrap(), hold);
        // P0 never sees the intended controls; a set built on u - uo does.
        let offset = ProbeSet::new(vec![Expr::sub(Expr::u(0), Expr::uo(0)), Expr::sub(Expr::u(1), Expr::uo(1)), Expr::phi(0)], 2, 1).unwrap();
        let base = SurrogateSpec::new(offset.clone(), 0.1, 0.0);
        let hold = predict(&game, &hist, 0.5, &base, 0.4).unwrap();
        let pushed = SurrogateSpec::new(offset, 0.1, 0.0).with_plan(ControlPlan::Live(vec![dvector![0.2, -0.1], dvector![1.0, -0.1]]));
        let p = predict(&game, &hist, 0.5, &pushed, 0.4).unwrap();
        assert_eq!(p.phi_hat[0], hold.phi_hat[0]);
        assert!(p.phi_hat[3][0] > hold.phi_hat[3][0] + 1e-3);
    }

    #[test]
    fn horizon_edge_cases() {
        let (game, hist) = duel_run(3.0);
        let tmpl = p0_spec(0.1, 1.0);
        let same = HorizonSpec { dt1: 0.1, dt2: 0.1, theta: 1e-3, t_max: 1.0 };
        assert!((estimate_horizon(&game, &hist, 1.0, &tmpl, &same).unwrap() - 2.0).abs() < 1e-12);
        let loose = HorizonSpec::new(0.1, 0.2, 1e6, 1.0).unwrap();
        assert!((estimate_horizon(&game, &hist, 1.0, &tmpl, &loose).unwrap() - 2.0).abs() < 1e-12);
        let tight = HorizonSpec::new(0.1, 0.2, 1e-3, 2.0).unwrap();
        let t1 = estimate_horizon(&game, &hist, 1.0, &tmpl, &tight).unwrap();
        assert!(t1 > 1.0 && t1 < 3.0, "{t1}");
        // Both runs share the observed control over the first step, so even a
        // vanishing threshold admits t0 + h.
        let zero = HorizonSpec::new(0.1, 0.2, 1e-300, 1.0).unwrap();
        assert!((estimate_horizon(&game, &hist, 1.0, &tmpl, &zero).unwrap() - 1.01).abs() < 1e-12);
        assert!(HorizonSpec::new(0.1, 0.1, 1.0, 1.0).is_err());
    }
}
