//! Interactive games: the state equation, the hidden behavioral reactions of
//! both players, and a zero-order-hold simulator producing ground-truth
//! trajectories.

use alloc::collections::BTreeMap;
use alloc::string::{String, ToString};
use alloc::sync::Arc;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

use nalgebra::DVector;

use crate::numerics::{rk4_step, NumericsError, TimeGrid};

/// State equation `phi' = rhs(phi, u)` with `u = (u_1, u_2)` stacked.
pub type StateEquation = dyn Fn(&DVector<f64>, &DVector<f64>) -> DVector<f64> + Send + Sync;

/// Reaction law of one player: `(own intended control, state, derivative
/// estimates D^1 phi .. D^r phi) -> realized control`.
pub type ReactionLaw = dyn Fn(&[f64], &DVector<f64>, &[DVector<f64>]) -> DVector<f64> + Send + Sync;

#[derive(Debug, Clone, PartialEq)]
pub enum DynamicsError {
    DimensionMismatch { expected: usize, got: usize },
    NonFiniteState { step: usize },
    UnknownScenario(String),
    BadParams(String),
    InvalidGrid,
}

impl fmt::Display for DynamicsError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::DimensionMismatch { expected, got } => {
                write!(f, "dimension mismatch: expected {expected}, got {got}")
            }
            Self::NonFiniteState { step } => write!(f, "state became non-finite at step {step}"),
            Self::UnknownScenario(name) => write!(f, "unknown scenario `{name}`"),
            Self::BadParams(msg) => write!(f, "bad scenario parameters: {msg}"),
            Self::InvalidGrid => f.write_str("simulation grid needs at least two points"),
        }
    }
}

#[derive(Clone)]
pub struct GameDefinition {
    pub name: String,
    pub state_dim: usize,
    pub control_dims: (usize, usize),
    rhs: Arc<StateEquation>,
}

impl fmt::Debug for GameDefinition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("GameDefinition")
            .field("name", &self.name)
            .field("state_dim", &self.state_dim)
            .field("control_dims", &self.control_dims)
            .finish_non_exhaustive()
    }
}

impl GameDefinition {
    pub fn new<F>(name: impl Into<String>, state_dim: usize, control_dims: (usize, usize), rhs: F) -> Self
    where
        F: Fn(&DVector<f64>, &DVector<f64>) -> DVector<f64> + Send + Sync + 'static,
    {
        Self {
            name: name.into(),
            state_dim,
            control_dims,
            rhs: Arc::new(rhs),
        }
    }

    /// Total control dimension `d = d_1 + d_2`.
    pub fn control_dim(&self) -> usize {
        self.control_dims.0 + self.control_dims.1
    }

    pub fn eval_rhs(&self, phi: &DVector<f64>, u: &DVector<f64>) -> Result<DVector<f64>, DynamicsError> {
        check_dim(self.state_dim, phi.len())?;
        check_dim(self.control_dim(), u.len())?;
        let out = (self.rhs)(phi, u);
        check_dim(self.state_dim, out.len())?;
        if out.iter().all(|x| x.is_finite()) {
            Ok(out)
        } else {
            Err(DynamicsError::NonFiniteState { step: 0 })
        }
    }

    /// One zero-order-hold step: `u` is frozen across the RK4 stages.
    pub fn advance(&self, phi: &DVector<f64>, u: &DVector<f64>, t: f64, h: f64) -> Result<DVector<f64>, NumericsError> {
        rk4_step(|_, p| (self.rhs)(p, u), t, phi, h)
    }
}

/// The hidden feedback coupling of both players.
#[derive(Clone)]
pub struct ReactionSpec {
    pub max_derivative_order: usize,
    players: [Arc<ReactionLaw>; 2],
}

impl fmt::Debug for ReactionSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ReactionSpec")
            .field("max_derivative_order", &self.max_derivative_order)
            .finish_non_exhaustive()
    }
}

impl ReactionSpec {
    pub fn new<A, B>(max_derivative_order: usize, player1: A, player2: B) -> Result<Self, DynamicsError>
    where
        A: Fn(&[f64], &DVector<f64>, &[DVector<f64>]) -> DVector<f64> + Send + Sync + 'static,
        B: Fn(&[f64], &DVector<f64>, &[DVector<f64>]) -> DVector<f64> + Send + Sync + 'static,
    {
        if max_derivative_order > 2 {
            return Err(DynamicsError::BadParams("derivative order above 2".to_string()));
        }
        Ok(Self {
            max_derivative_order,
            players: [Arc::new(player1), Arc::new(player2)],
        })
    }

    /// Reactions that pass the intended controls through unchanged.
    pub fn passthrough() -> Self {
        let id = |own: &[f64], _: &DVector<f64>, _: &[DVector<f64>]| DVector::from_column_slice(own);
        Self::new(0, id, id).expect("order 0 is valid")
    }

    /// Realized interactive control `u = (B_1(..), B_2(..))`.
    pub fn apply_reactions(
        &self,
        control_dims: (usize, usize),
        u_intended: &DVector<f64>,
        phi: &DVector<f64>,
        derivatives: &[DVector<f64>],
    ) -> Result<DVector<f64>, DynamicsError> {
        let (d1, d2) = control_dims;
        check_dim(d1 + d2, u_intended.len())?;
        if derivatives.len() != self.max_derivative_order {
            return Err(DynamicsError::DimensionMismatch {
                expected: self.max_derivative_order,
                got: derivatives.len(),
            });
        }
        let own = u_intended.as_slice();
        let u1 = (self.players[0])(&own[..d1], phi, derivatives);
        let u2 = (self.players[1])(&own[d1..], phi, derivatives);
        check_dim(d1, u1.len())?;
        check_dim(d2, u2.len())?;
        let u = DVector::from_iterator(d1 + d2, u1.iter().chain(u2.iter()).copied());
        if u.iter().all(|x| x.is_finite()) {
            Ok(u)
        } else {
            Err(DynamicsError::NonFiniteState { step: 0 })
        }
    }
}

/// Sampled trajectory of a game: state, intended and realized controls at
/// every grid point.
#[derive(Debug, Clone, PartialEq)]
pub struct History {
    pub grid: TimeGrid,
    pub phi: Vec<DVector<f64>>,
    pub u_intended: Vec<DVector<f64>>,
    pub u_realized: Vec<DVector<f64>>,
}

impl History {
    pub fn new(
        grid: TimeGrid,
        phi: Vec<DVector<f64>>,
        u_intended: Vec<DVector<f64>>,
        u_realized: Vec<DVector<f64>>,
    ) -> Result<Self, DynamicsError> {
        let n = grid.count;
        for len in [phi.len(), u_intended.len(), u_realized.len()] {
            check_dim(n, len)?;
        }
        let m = phi[0].len();
        let d = u_intended[0].len();
        for k in 0..n {
            check_dim(m, phi[k].len())?;
            check_dim(d, u_intended[k].len())?;
            check_dim(d, u_realized[k].len())?;
            let finite = phi[k].iter().chain(u_intended[k].iter()).chain(u_realized[k].iter()).all(|x| x.is_finite());
            if !finite {
                return Err(DynamicsError::NonFiniteState { step: k });
            }
        }
        Ok(Self { grid, phi, u_intended, u_realized })
    }

    pub fn len(&self) -> usize {
        self.grid.count
    }

    pub fn is_empty(&self) -> bool {
        self.grid.count == 0
    }

    pub fn state_dim(&self) -> usize {
        self.phi[0].len()
    }

    pub fn control_dim(&self) -> usize {
        self.u_intended[0].len()
    }

    /// The first `count` samples.
    pub fn truncated(&self, count: usize) -> Self {
        let count = count.min(self.len());
        Self {
            grid: self.grid.truncated(count),
            phi: self.phi[..count].to_vec(),
            u_intended: self.u_intended[..count].to_vec(),
            u_realized: self.u_realized[..count].to_vec(),
        }
    }

    /// `max(1, max_k |phi_k|_inf)` over the first `count` samples.
    pub fn state_scale(&self, count: usize) -> f64 {
        self.phi[..count.min(self.len())]
            .iter()
            .flat_map(|p| p.iter())
            .fold(1.0f64, |acc, x| acc.max(libm::fabs(*x)))
    }

    /// Largest absolute realized control component.
    pub fn control_amplitude(&self) -> f64 {
        self.u_realized.iter().flat_map(|u| u.iter()).fold(0.0f64, |acc, x| acc.max(libm::fabs(*x)))
    }
}

/// Backward-difference estimates of `D^1 phi .. D^order phi` at the newest
/// sample of `past`. Missing samples at the start of a run count as zero
/// derivatives.
pub fn backward_derivatives(past: &[DVector<f64>], h: f64, order: usize) -> Vec<DVector<f64>> {
    let n = past.len();
    let m = past.last().map_or(0, |p| p.len());
    let mut out = Vec::with_capacity(order);
    if order >= 1 {
        out.push(if n >= 2 {
            (&past[n - 1] - &past[n - 2]) / h
        } else {
            DVector::zeros(m)
        });
    }
    if order >= 2 {
        out.push(if n >= 3 {
            (&past[n - 1] - &past[n - 2] * 2.0 + &past[n - 3]) / (h * h)
        } else {
            DVector::zeros(m)
        });
    }
    out
}

/// Incremental ground-truth simulator. Driving it step by step yields the
/// same samples as [`simulate`].
#[derive(Debug, Clone)]
pub struct Simulator {
    game: GameDefinition,
    reactions: ReactionSpec,
    h: f64,
    t_start: f64,
    phi: Vec<DVector<f64>>,
    u_intended: Vec<DVector<f64>>,
    u_realized: Vec<DVector<f64>>,
}

impl Simulator {
    /// Starts at `phi0`; the first sample is recorded by the first call to
    /// [`Simulator::record`].
    pub fn new(game: GameDefinition, reactions: ReactionSpec, t_start: f64, h: f64, phi0: DVector<f64>) -> Result<Self, DynamicsError> {
        check_dim(game.state_dim, phi0.len())?;
        if !(h > 0.0) || !h.is_finite() {
            return Err(DynamicsError::InvalidGrid);
        }
        Ok(Self {
            game,
            reactions,
            h,
            t_start,
            phi: vec![phi0],
            u_intended: Vec::new(),
            u_realized: Vec::new(),
        })
    }

    pub fn game(&self) -> &GameDefinition {
        &self.game
    }

    /// Number of fully recorded samples.
    pub fn recorded(&self) -> usize {
        self.u_realized.len()
    }

    pub fn current_state(&self) -> &DVector<f64> {
        self.phi.last().expect("simulator always holds a state")
    }

    /// Applies the reactions at the newest state with intended control `uo`
    /// and records the sample.
    pub fn record(&mut self, uo: DVector<f64>) -> Result<&DVector<f64>, DynamicsError> {
        let step = self.u_realized.len();
        let derivs = backward_derivatives(&self.phi, self.h, self.reactions.max_derivative_order);
        let u = self
            .reactions
            .apply_reactions(self.game.control_dims, &uo, self.current_state(), &derivs)
            .map_err(|e| match e {
                DynamicsError::NonFiniteState { .. } => DynamicsError::NonFiniteState { step },
                other => other,
            })?;
        self.u_intended.push(uo);
        self.u_realized.push(u);
        Ok(self.u_realized.last().expect("just pushed"))
    }

    /// Advances the state one step with the last recorded control held.
    pub fn advance(&mut self) -> Result<(), DynamicsError> {
        let step = self.u_realized.len();
        assert_eq!(step, self.phi.len(), "record the current sample before advancing");
        let t = self.t_start + (step - 1) as f64 * self.h;
        let u = &self.u_realized[step - 1];
        let next = self
            .game
            .advance(self.current_state(), u, t, self.h)
            .map_err(|_| DynamicsError::NonFiniteState { step })?;
        self.phi.push(next);
        Ok(())
    }

    /// Advance, then record with `uo`.
    pub fn step(&mut self, uo: DVector<f64>) -> Result<(), DynamicsError> {
        self.advance()?;
        self.record(uo)?;
        Ok(())
    }

    pub fn history(&self) -> History {
        let n = self.recorded();
        History {
            grid: TimeGrid {
                t_start: self.t_start,
                h: self.h,
                count: n,
            },
            phi: self.phi[..n].to_vec(),
            u_intended: self.u_intended.clone(),
            u_realized: self.u_realized.clone(),
        }
    }
}

/// Simulates the interactive game on `grid`.
///
/// At each step start the derivative estimates come from backward differences
/// over samples up to the current one, the reactions produce the realized
/// control, and that control is held over the step while RK4 advances the
/// state.
pub fn simulate<S>(
    game: &GameDefinition,
    reactions: &ReactionSpec,
    schedule: S,
    grid: &TimeGrid,
    phi0: &DVector<f64>,
) -> Result<History, DynamicsError>
where
    S: Fn(f64) -> DVector<f64>,
{
    if grid.count < 2 {
        return Err(DynamicsError::InvalidGrid);
    }
    let mut sim = Simulator::new(game.clone(), reactions.clone(), grid.t_start, grid.h, phi0.clone())?;
    sim.record(schedule(grid.time(0)))?;
    for k in 1..grid.count {
        sim.step(schedule(grid.time(k)))?;
    }
    Ok(sim.history())
}

fn check_dim(expected: usize, got: usize) -> Result<(), DynamicsError> {
    if expected == got {
        Ok(())
    } else {
        Err(DynamicsError::DimensionMismatch { expected, got })
    }
}

/// Named scenario parameters, e.g. `k -> [0.5, -0.25]`.
pub type ScenarioParams = BTreeMap<String, Vec<f64>>;

/// The built-in test-bed games.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScenarioKind {
    LinearDuel,
    CrossCoupled,
    PlanarPursuit,
}

impl ScenarioKind {
    pub const ALL: [ScenarioKind; 3] = [Self::LinearDuel, Self::CrossCoupled, Self::PlanarPursuit];

    pub fn parse(name: &str) -> Result<Self, DynamicsError> {
        match name {
            "linear-duel" => Ok(Self::LinearDuel),
            "cross-coupled" => Ok(Self::CrossCoupled),
            "planar-pursuit" => Ok(Self::PlanarPursuit),
            other => Err(DynamicsError::UnknownScenario(other.to_string())),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::LinearDuel => "linear-duel",
            Self::CrossCoupled => "cross-coupled",
            Self::PlanarPursuit => "planar-pursuit",
        }
    }

    /// Default intended controls used for warm-up and demos.
    pub fn default_intended(self) -> DVector<f64> {
        match self {
            Self::LinearDuel | Self::CrossCoupled => DVector::from_vec(vec![0.2, -0.1]),
            Self::PlanarPursuit => DVector::from_vec(vec![0.3, 0.1, -0.1, 0.2]),
        }
    }

    pub fn default_initial_state(self) -> DVector<f64> {
        match self {
            Self::LinearDuel | Self::CrossCoupled => DVector::from_vec(vec![1.0]),
            Self::PlanarPursuit => DVector::from_vec(vec![0.0, 0.0, 1.0, 0.5]),
        }
    }

    fn allowed_params(self) -> &'static [(&'static str, [f64; 2])] {
        match self {
            Self::LinearDuel => &[("k", [0.5, -0.25])],
            Self::CrossCoupled => &[("k", [0.5, -0.25]), ("c", [0.1, 0.0])],
            Self::PlanarPursuit => &[("s", [1.0, 1.0]), ("g", [1.0, 1.0])],
        }
    }
}

/// Builds a named scenario; unspecified parameters take their defaults.
///
/// * `linear-duel`: `m = 1`, `phi' = u_1 - u_2`, `B_i = u_i° + k_i phi`.
/// * `cross-coupled`: as above plus `c_i D^1 phi` in each reaction.
/// * `planar-pursuit`: two planar points each moved by its player's velocity
///   control, `B_i = u_i° + s_i tanh(g_i (p_other - p_own))`.
pub fn scenario(name: &str, params: &ScenarioParams) -> Result<(GameDefinition, ReactionSpec), DynamicsError> {
    let kind = ScenarioKind::parse(name)?;
    let allowed = kind.allowed_params();
    for (key, value) in params {
        if !allowed.iter().any(|(k, _)| k == key) {
            return Err(DynamicsError::BadParams(alloc::format!("unknown parameter `{key}` for {name}")));
        }
        if value.len() != 2 || value.iter().any(|x| !x.is_finite()) {
            return Err(DynamicsError::BadParams(alloc::format!("parameter `{key}` needs two finite values")));
        }
    }
    let get = |key: &str| -> [f64; 2] {
        params.get(key).map(|v| [v[0], v[1]]).unwrap_or_else(|| {
            allowed.iter().find(|(k, _)| *k == key).map(|(_, d)| *d).expect("known key")
        })
    };
    let duel_rhs = |_: &DVector<f64>, u: &DVector<f64>| DVector::from_element(1, u[0] - u[1]);
    match kind {
        ScenarioKind::LinearDuel => {
            let [k1, k2] = get("k");
            let game = GameDefinition::new(kind.name(), 1, (1, 1), duel_rhs);
            let reactions = ReactionSpec::new(
                0,
                move |own: &[f64], phi: &DVector<f64>, _: &[DVector<f64>]| DVector::from_element(1, own[0] + k1 * phi[0]),
                move |own: &[f64], phi: &DVector<f64>, _: &[DVector<f64>]| DVector::from_element(1, own[0] + k2 * phi[0]),
            )?;
            Ok((game, reactions))
        }
        ScenarioKind::CrossCoupled => {
            let [k1, k2] = get("k");
            let [c1, c2] = get("c");
            let game = GameDefinition::new(kind.name(), 1, (1, 1), duel_rhs);
            let reactions = ReactionSpec::new(
                1,
                move |own: &[f64], phi: &DVector<f64>, d: &[DVector<f64>]| {
                    DVector::from_element(1, own[0] + k1 * phi[0] + c1 * d[0][0])
                },
                move |own: &[f64], phi: &DVector<f64>, d: &[DVector<f64>]| {
                    DVector::from_element(1, own[0] + k2 * phi[0] + c2 * d[0][0])
                },
            )?;
            Ok((game, reactions))
        }
        ScenarioKind::PlanarPursuit => {
            let [s1, s2] = get("s");
            let [g1, g2] = get("g");
            let game = GameDefinition::new(kind.name(), 4, (2, 2), |_: &DVector<f64>, u: &DVector<f64>| u.clone());
            let react = |s: f64, g: f64, own_at: usize, other_at: usize| {
                move |own: &[f64], phi: &DVector<f64>, _: &[DVector<f64>]| {
                    DVector::from_fn(2, |i, _| own[i] + s * libm::tanh(g * (phi[other_at + i] - phi[own_at + i])))
                }
            };
            let reactions = ReactionSpec::new(0, react(s1, g1, 0, 2), react(s2, g2, 2, 0))?;
            Ok((game, reactions))
        }
    }
}
