//! Batch runs: simulate a scenario once, then predict from every combination
//! of anchor, delay and blend, with optional selection and horizon
//! estimation, and write the results.
//!
//! Output directory layout:
//!
//! ```text
//! history.csv
//! predictions/anchor{i}_dt{j}_blend{k}.json
//! summary.csv                       anchor,dt,blend,mu,rms_error,horizon_t1,status
//! selection_dt{j}_blend{k}.csv      pool or projective trace, when selection is on
//! ```
//!
//! A failing row is recorded in `summary.csv` with an `error:` status and
//! never stops the others.

use std::fs;
use std::path::{Path, PathBuf};

use diffgame_core::dynamics::{simulate, History};
use diffgame_core::inversion::InversionSettings;
use diffgame_core::predictor::{estimate_horizon, predict, ControlPlan, HorizonSpec, Prediction, SurrogateSpec};
use diffgame_core::probes::{generate_library, random_probe_set, ProbeLibrary, ProbeSet};
use diffgame_core::selection::{
    evolve_pool, hyperplane_probe_set, normalized_rms, projective_search, select_best, CandidateLabel, Pool,
};
use rayon::prelude::*;

use crate::config::{ExperimentConfig, PlanConfig, Resolved, SelectionConfig};
use crate::error::{Error, Result};
use crate::formats::{history_to_string, pool_trace_to_csv, prediction_to_json, projective_trace_to_csv, write_atomic, PoolTraceRow, StatusRecord};

/// One line of `summary.csv`.
#[derive(Debug, Clone, PartialEq)]
pub struct SummaryRow {
    pub anchor: f64,
    pub dt: f64,
    pub blend: f64,
    pub mu: Option<CandidateLabel>,
    pub rms_error: Option<f64>,
    pub horizon_t1: Option<f64>,
    pub status: String,
}

/// What a run produced, in summary order.
#[derive(Debug, Clone)]
pub struct ExperimentReport {
    pub output_dir: PathBuf,
    pub history: History,
    pub rows: Vec<SummaryRow>,
}

/// Loads `path` and runs it, resolving relative paths against its directory.
pub fn run_config_file(path: &Path) -> Result<ExperimentReport> {
    let config = ExperimentConfig::load(path)?;
    let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
    run_experiment(&config, &base)
}

pub fn run_experiment(config: &ExperimentConfig, base_dir: &Path) -> Result<ExperimentReport> {
    let r = config.resolve(base_dir)?;
    let history = simulate(&r.game, &r.reactions, |t| r.intended.at(t), &r.grid, &r.phi0)
        .map_err(|e| Error::Runtime(format!("simulation failed: {e}")))?;

    let out = &r.output_dir;
    fs::create_dir_all(out.join("predictions")).map_err(|e| Error::io(out, e))?;
    write_atomic(&out.join("history.csv"), history_to_string(&history).as_bytes())?;

    let combos: Vec<(usize, usize)> = (0..r.dts.len()).flat_map(|j| (0..r.blends.len()).map(move |k| (j, k))).collect();
    let results: Vec<ComboResult> = combos.par_iter().map(|&(j, k)| run_combo(&r, &history, j, k)).collect::<Result<_>>()?;

    // Anchor-major, then delay, then blend.
    let mut rows = Vec::with_capacity(r.anchors.len() * combos.len());
    for a in 0..r.anchors.len() {
        for res in &results {
            rows.push(res.rows[a].clone());
        }
    }
    write_atomic(&out.join("summary.csv"), summary_to_csv(&rows).as_bytes())?;
    Ok(ExperimentReport { output_dir: out.clone(), history, rows })
}

struct ComboResult {
    rows: Vec<SummaryRow>,
}

/// Per-anchor candidate choice state carried along one (delay, blend) combination.
enum Chooser {
    Fixed(ProbeSet),
    Pool { pool: Pool, lib: ProbeLibrary, seed: u64, evolve: bool, trace: Vec<PoolTraceRow> },
    Projective { prev: Option<CandidateLabel>, seed: u64, budget: usize, trace: Vec<(f64, Vec<f64>, f64)> },
}

fn run_combo(r: &Resolved, history: &History, j: usize, k: usize) -> Result<ComboResult> {
    let (dt, blend) = (r.dts[j], r.blends[k]);
    let (d, m) = (history.control_dim(), history.state_dim());
    let mut chooser = match &r.selection {
        SelectionConfig::None => Chooser::Fixed(r.probe_set.clone()),
        SelectionConfig::Pool { size, seed, evolve } => {
            let lib = generate_library(d, m);
            let mut sets = vec![r.probe_set.clone()];
            for i in 1..*size as u64 {
                sets.push(random_probe_set(&lib, seed.wrapping_add(i))?);
            }
            Chooser::Pool { pool: Pool::new(sets)?, lib, seed: *seed, evolve: *evolve, trace: Vec::new() }
        }
        SelectionConfig::Projective { budget, seed, .. } => Chooser::Projective { prev: None, seed: *seed, budget: *budget, trace: Vec::new() },
    };

    let mut rows = Vec::with_capacity(r.anchors.len());
    for (round, &i0) in r.anchors.iter().enumerate() {
        let t0 = history.grid.time(i0);
        let observed = history.truncated(i0 + 1);
        let plan = match r.plan {
            PlanConfig::HoldLast => ControlPlan::HoldLast,
            PlanConfig::Observed => {
                let intended = r.intended.clone();
                ControlPlan::schedule(move |t| intended.at(t))
            }
        };
        let template = SurrogateSpec::new(r.probe_set.clone(), dt, blend)
            .with_plan(plan)
            .with_inversion(InversionSettings::for_history(&observed));
        let mut row = SummaryRow { anchor: t0, dt, blend, mu: None, rms_error: None, horizon_t1: None, status: String::new() };

        let chosen = choose(&mut chooser, r, &observed, t0, &template, round);
        let (label, set) = match chosen {
            Ok(c) => c,
            Err(e) => {
                row.status = format!("error: {e}");
                rows.push(row);
                continue;
            }
        };
        row.mu = Some(label);
        let mut spec = template.clone();
        spec.probe_set = set;

        match predict(&r.game, &observed, t0, &spec, r.horizon) {
            Ok(pred) => {
                let truth = &history.phi[i0 + 1..i0 + 1 + pred.phi_hat.len()];
                row.rms_error = (!pred.phi_hat.is_empty()).then(|| normalized_rms(&pred.phi_hat, truth, 1.0));
                row.status = StatusRecord::from(&pred.status).short();
                write_prediction(r, round, j, k, &pred)?;
            }
            Err(e) => row.status = format!("error: {e}"),
        }
        if let Some(hc) = &r.horizon_estimate {
            let hspec = HorizonSpec { dt1: hc.dt1, dt2: hc.dt2, theta: hc.theta, t_max: hc.t_max };
            row.horizon_t1 = estimate_horizon(&r.game, &observed, t0, &spec, &hspec).ok();
        }
        rows.push(row);
    }

    match &chooser {
        Chooser::Fixed(_) => {}
        Chooser::Pool { trace, .. } => write_atomic(&r.output_dir.join(format!("selection_dt{j}_blend{k}.csv")), pool_trace_to_csv(trace).as_bytes())?,
        Chooser::Projective { trace, .. } => {
            write_atomic(&r.output_dir.join(format!("selection_dt{j}_blend{k}.csv")), projective_trace_to_csv(trace).as_bytes())?
        }
    }
    Ok(ComboResult { rows })
}

fn choose(
    chooser: &mut Chooser,
    r: &Resolved,
    observed: &History,
    t0: f64,
    template: &SurrogateSpec,
    round: usize,
) -> Result<(CandidateLabel, ProbeSet)> {
    match chooser {
        Chooser::Fixed(set) => Ok((CandidateLabel::Finite(0), set.clone())),
        Chooser::Pool { pool, lib, seed, evolve, trace } => {
            let report = select_best(&r.game, observed, &pool.candidates, t0, template)?;
            let chosen = pool.candidates[report.best_index].clone();
            let next = if *evolve { Some(evolve_pool(pool, &report, lib, seed.wrapping_add(1_000 + round as u64))?) } else { None };
            let removed = next.as_ref().and_then(|n| n.replacements.last()).map(|(out, _)| out.clone());
            for e in &report.entries {
                trace.push(PoolTraceRow { round, label: e.label.clone(), score: e.score, replaced: removed.as_ref() == Some(&e.label) });
            }
            if let Some(n) = next {
                *pool = n;
            }
            Ok((chosen.label, chosen.set))
        }
        Chooser::Projective { prev, seed, budget, trace } => {
            let base = r.projective_base.as_ref().expect("resolved with the selection");
            let (label, report) = projective_search(&r.game, observed, base, t0, template, prev.as_ref(), *budget, seed.wrapping_add(round as u64))?;
            let CandidateLabel::Projective(c) = &label else { unreachable!("projective search returns hyperplane labels") };
            trace.push((t0, c.clone(), report.best_score()));
            let set = hyperplane_probe_set(base, c)?;
            *prev = Some(label.clone());
            Ok((label, set))
        }
    }
}

fn write_prediction(r: &Resolved, a: usize, j: usize, k: usize, pred: &Prediction) -> Result<()> {
    let path = r.output_dir.join("predictions").join(format!("anchor{a}_dt{j}_blend{k}.json"));
    write_atomic(&path, prediction_to_json(pred).as_bytes())
}

fn opt(x: Option<f64>) -> String {
    x.map(|v| format!("{v:?}")).unwrap_or_default()
}

pub fn summary_to_csv(rows: &[SummaryRow]) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["anchor", "dt", "blend", "mu", "rms_error", "horizon_t1", "status"]).expect("writing to memory");
    for row in rows {
        w.write_record([
            format!("{:?}", row.anchor),
            format!("{:?}", row.dt),
            format!("{:?}", row.blend),
            row.mu.as_ref().map(ToString::to_string).unwrap_or_default(),
            opt(row.rms_error),
            opt(row.horizon_t1),
            row.status.clone(),
        ])
        .expect("writing to memory");
    }
    String::from_utf8(w.into_inner().expect("flush to memory")).expect("utf-8")
}
