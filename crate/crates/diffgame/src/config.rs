//! Experiment configuration (JSON) and its validation.

use std::path::{Path, PathBuf};

use diffgame_core::dynamics::{scenario, GameDefinition, ReactionSpec, ScenarioKind, ScenarioParams};
use diffgame_core::numerics::{steps_in, TimeGrid};
use diffgame_core::probes::{Expr, ProbeSet};
use diffgame_core::selection::ProjectiveBase;
use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::formats::load_probe_set;

/// A single value or a list of values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum OneOrMany {
    One(f64),
    Many(Vec<f64>),
}

impl OneOrMany {
    pub fn values(&self) -> Vec<f64> {
        match self {
            Self::One(x) => vec![*x],
            Self::Many(xs) => xs.clone(),
        }
    }
}

/// `uo(t) = base + amplitude * sin(omega * t)`, componentwise.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IntendedConfig {
    /// Defaults to the scenario's default intended control.
    #[serde(default)]
    pub base: Option<Vec<f64>>,
    #[serde(default)]
    pub amplitude: Option<Vec<f64>>,
    #[serde(default)]
    pub omega: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub name: String,
    #[serde(default)]
    pub params: ScenarioParams,
    #[serde(default)]
    pub intended: IntendedConfig,
    #[serde(default)]
    pub initial_state: Option<Vec<f64>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    #[serde(default)]
    pub t_start: f64,
    pub h: f64,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ProbeSource {
    /// `u_0 .. u_{d-1}, phi_0`.
    #[default]
    Canonical,
    File { path: PathBuf },
    Library { seed: u64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PlanConfig {
    #[default]
    HoldLast,
    /// The intended-control schedule that drove the simulation.
    Observed,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case", deny_unknown_fields)]
pub enum SelectionConfig {
    #[default]
    None,
    /// The probe source followed by `size - 1` random library sets.
    Pool {
        size: usize,
        seed: u64,
        #[serde(default = "yes")]
        evolve: bool,
    },
    Projective {
        budget: usize,
        seed: u64,
        /// `d + 2` prefix expressions; defaults to `u_0 .. u_{d-1}, phi_0, 1`.
        #[serde(default)]
        base: Option<Vec<String>>,
    },
}

fn yes() -> bool {
    true
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HorizonConfig {
    pub dt1: f64,
    pub dt2: f64,
    pub theta: f64,
    pub t_max: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub scenario: ScenarioConfig,
    pub grid: GridConfig,
    #[serde(default)]
    pub probes: ProbeSource,
    pub anchors: Vec<f64>,
    pub dt: OneOrMany,
    pub blend: OneOrMany,
    /// Prediction length after each anchor.
    pub horizon: f64,
    #[serde(default)]
    pub plan: PlanConfig,
    #[serde(default)]
    pub selection: SelectionConfig,
    #[serde(default)]
    pub horizon_estimate: Option<HorizonConfig>,
    pub output_dir: PathBuf,
}

/// Everything a run needs, checked and resolved.
#[derive(Debug, Clone)]
pub struct Resolved {
    pub game: GameDefinition,
    pub reactions: ReactionSpec,
    pub grid: TimeGrid,
    pub phi0: DVector<f64>,
    pub intended: Intended,
    pub probe_set: ProbeSet,
    pub anchors: Vec<usize>,
    pub dts: Vec<f64>,
    pub blends: Vec<f64>,
    pub horizon: f64,
    pub plan: PlanConfig,
    pub selection: SelectionConfig,
    pub projective_base: Option<ProjectiveBase>,
    pub horizon_estimate: Option<HorizonConfig>,
    pub output_dir: PathBuf,
}

/// Resolved intended-control schedule.
#[derive(Debug, Clone, PartialEq)]
pub struct Intended {
    pub base: DVector<f64>,
    pub amplitude: DVector<f64>,
    pub omega: f64,
}

impl Intended {
    pub fn at(&self, t: f64) -> DVector<f64> {
        &self.base + &self.amplitude * (self.omega * t).sin()
    }
}

fn finite_vec(field: &str, v: &[f64], len: usize) -> Result<DVector<f64>> {
    if v.len() != len {
        return Err(Error::validation(field, format!("expected {len} values, got {}", v.len())));
    }
    if v.iter().any(|x| !x.is_finite()) {
        return Err(Error::validation(field, "values must be finite"));
    }
    Ok(DVector::from_column_slice(v))
}

fn non_empty(field: &str, v: &[f64]) -> Result<()> {
    if v.is_empty() {
        Err(Error::validation(field, "must not be empty"))
    } else {
        Ok(())
    }
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::validation("config", e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    /// Validates every field; relative paths are taken from `base_dir`.
    pub fn resolve(&self, base_dir: &Path) -> Result<Resolved> {
        let kind = ScenarioKind::parse(&self.scenario.name).map_err(|e| Error::validation("scenario.name", e))?;
        let (game, reactions) = scenario(&self.scenario.name, &self.scenario.params).map_err(|e| Error::validation("scenario.params", e))?;
        let (d, m) = (game.control_dim(), game.state_dim);

        let g = self.grid;
        if !(g.h > 0.0) || !g.h.is_finite() {
            return Err(Error::validation("grid.h", "must be positive and finite"));
        }
        if !g.t_start.is_finite() {
            return Err(Error::validation("grid.t_start", "must be finite"));
        }
        if g.count < 3 {
            return Err(Error::validation("grid.count", "need at least 3 grid points"));
        }
        let grid = TimeGrid::new(g.t_start, g.h, g.count).expect("checked above");

        let phi0 = match &self.scenario.initial_state {
            Some(v) => finite_vec("scenario.initial_state", v, m)?,
            None => kind.default_initial_state(),
        };
        let ic = &self.scenario.intended;
        let base = match &ic.base {
            Some(v) => finite_vec("scenario.intended.base", v, d)?,
            None => kind.default_intended(),
        };
        let amplitude = match &ic.amplitude {
            Some(v) => finite_vec("scenario.intended.amplitude", v, d)?,
            None => DVector::zeros(d),
        };
        if !ic.omega.is_finite() {
            return Err(Error::validation("scenario.intended.omega", "must be finite"));
        }
        let intended = Intended { base, amplitude, omega: ic.omega };

        let probe_set = match &self.probes {
            ProbeSource::Canonical => ProbeSet::canonical(d, m),
            ProbeSource::File { path } => {
                let path = base_dir.join(path);
                if !path.exists() {
                    return Err(Error::validation("probes.path", format!("{} does not exist", path.display())));
                }
                load_probe_set(&path)?
            }
            ProbeSource::Library { seed } => {
                let lib = diffgame_core::probes::generate_library(d, m);
                diffgame_core::probes::random_probe_set(&lib, *seed).map_err(|e| Error::validation("probes.seed", e))?
            }
        };
        if probe_set.control_dim() != d || probe_set.state_dim() != m {
            return Err(Error::validation("probes", format!("probe set is for d = {}, m = {}; scenario has d = {d}, m = {m}", probe_set.control_dim(), probe_set.state_dim())));
        }

        non_empty("anchors", &self.anchors)?;
        let anchors = self
            .anchors
            .iter()
            .enumerate()
            .map(|(i, t)| grid.index_of(*t).ok_or_else(|| Error::validation(format!("anchors[{i}]"), format!("{t} is not a grid time"))))
            .collect::<Result<Vec<_>>>()?;

        let dts = self.dt.values();
        non_empty("dt", &dts)?;
        for (i, dt) in dts.iter().enumerate() {
            if !matches!(steps_in(*dt, g.h), Some(k) if k >= 1) {
                return Err(Error::validation(format!("dt[{i}]"), format!("{dt} is not a positive multiple of grid.h")));
            }
        }
        let blends = self.blend.values();
        non_empty("blend", &blends)?;
        for (i, a) in blends.iter().enumerate() {
            if !(0.0..=1.0).contains(a) {
                return Err(Error::validation(format!("blend[{i}]"), format!("{a} is outside [0, 1]")));
            }
        }
        let steps = steps_in(self.horizon, g.h).ok_or_else(|| Error::validation("horizon", "must be a non-negative multiple of grid.h"))?;
        let last = anchors.iter().max().expect("non-empty");
        if last + steps >= g.count {
            return Err(Error::validation("horizon", "predictions from the last anchor run past the end of the grid"));
        }

        let projective_base = match &self.selection {
            SelectionConfig::None => None,
            SelectionConfig::Pool { size, .. } => {
                if *size < 2 {
                    return Err(Error::validation("selection.size", "a pool needs at least 2 members"));
                }
                None
            }
            SelectionConfig::Projective { budget, base, .. } => {
                if *budget < 1 {
                    return Err(Error::validation("selection.budget", "must be at least 1"));
                }
                Some(match base {
                    None => ProjectiveBase::linear(d, m),
                    Some(exprs) => {
                        let exprs = exprs
                            .iter()
                            .enumerate()
                            .map(|(i, s)| Expr::parse(s).map_err(|e| Error::validation(format!("selection.base[{i}]"), e)))
                            .collect::<Result<Vec<_>>>()?;
                        ProjectiveBase::new(d, m, exprs).map_err(|e| Error::validation("selection.base", e))?
                    }
                })
            }
        };

        if let Some(hc) = &self.horizon_estimate {
            for (field, dt) in [("horizon_estimate.dt1", hc.dt1), ("horizon_estimate.dt2", hc.dt2)] {
                if !matches!(steps_in(dt, g.h), Some(k) if k >= 1) {
                    return Err(Error::validation(field, format!("{dt} is not a positive multiple of grid.h")));
                }
            }
            if hc.dt1 == hc.dt2 {
                return Err(Error::validation("horizon_estimate.dt2", "must differ from dt1"));
            }
            if !(hc.theta > 0.0) {
                return Err(Error::validation("horizon_estimate.theta", "must be positive"));
            }
            if !(hc.t_max > 0.0) || steps_in(hc.t_max, g.h).is_none() {
                return Err(Error::validation("horizon_estimate.t_max", "must be a positive multiple of grid.h"));
            }
        }

        Ok(Resolved {
            game,
            reactions,
            grid,
            phi0,
            intended,
            probe_set,
            anchors,
            dts,
            blends,
            horizon: self.horizon,
            plan: self.plan,
            selection: self.selection.clone(),
            projective_base,
            horizon_estimate: self.horizon_estimate,
            output_dir: base_dir.join(&self.output_dir),
        })
    }
}
