use diffgame_core::dynamics::{scenario, simulate, GameDefinition, History, ScenarioKind, ScenarioParams};
use diffgame_core::predictor::{estimate_horizon, predict, ControlPlan, HorizonSpec, SurrogateSpec};
use diffgame_core::probes::{generate_library, Expr, ProbeSet};
use diffgame_core::selection::{backtest, evolve_pool, projective_search, select_best, CandidateLabel, CandidateSet, Pool, ProjectiveBase};
use diffgame_core::TimeGrid;
use nalgebra::{dvector, DVector};

fn duel(count: usize, uo: impl Fn(f64) -> DVector<f64>) -> (GameDefinition, History) {
    let (game, r) = scenario("linear-duel", &ScenarioParams::new()).unwrap();
    let grid = TimeGrid::new(0.0, 0.01, count).unwrap();
    let hist = simulate(&game, &r, uo, &grid, &dvector![1.0]).unwrap();
    (game, hist)
}

fn constant_duel() -> (GameDefinition, History) {
    duel(301, |_| dvector![0.2, -0.1])
}

#[test]
fn every_scenario_predicts_a_full_horizon() {
    for kind in ScenarioKind::ALL {
        let (game, r) = scenario(kind.name(), &ScenarioParams::new()).unwrap();
        let grid = TimeGrid::new(0.0, 0.01, 201).unwrap();
        let base = kind.default_intended();
        let uo = move |t: f64| base.map(|x| x * (1.0 + 0.3 * (2.0 * t).sin()));
        let hist = simulate(&game, &r, &uo, &grid, &kind.default_initial_state()).unwrap();
        let spec = SurrogateSpec::new(ProbeSet::canonical(hist.control_dim(), hist.state_dim()), 0.1, 1.0).with_plan(ControlPlan::schedule(uo));
        let pred = predict(&game, &hist, 1.0, &spec, 0.5).unwrap();
        assert!(pred.status.is_complete(), "{}: {:?}", kind.name(), pred.status);
        assert_eq!(pred.phi_hat.len(), 50);
        // P0 cannot see the intended control, so it is not exact here; it must
        // still beat freezing the state at the anchor.
        let err = |k: usize, x: &DVector<f64>| (x - &hist.phi[101 + k]).amax();
        let worst = pred.phi_hat.iter().enumerate().map(|(k, x)| err(k, x)).fold(0.0, f64::max);
        let frozen = (0..50).map(|k| err(k, &hist.phi[100])).fold(0.0, f64::max);
        assert!(worst < frozen, "{}: {worst} vs {frozen}", kind.name());
    }
}

#[test]
fn horizon_over_theta() {
    let (game, hist) = constant_duel();
    let tmpl = SurrogateSpec::new(ProbeSet::canonical(2, 1), 0.1, 1.0);
    let t1 = |theta: f64| estimate_horizon(&game, &hist, 1.0, &tmpl, &HorizonSpec::new(0.1, 0.2, theta, 2.0).unwrap()).unwrap();
    let grid: Vec<f64> = [1e-5, 1e-4, 1e-3, 1e-2, 1e-1].into_iter().map(t1).collect();
    for w in grid.windows(2) {
        assert!(w[0] <= w[1], "{grid:?}");
    }
    // Regression value from the reference run.
    assert!((grid[2] - 1.02).abs() < 1e-12, "{grid:?}");
    assert!((t1(1e6) - 3.0).abs() < 1e-12);
    // Equal delays agree everywhere; the constructor rejects them, the
    // estimator does not.
    let same = HorizonSpec { dt1: 0.1, dt2: 0.1, theta: 1e-3, t_max: 2.0 };
    assert!((estimate_horizon(&game, &hist, 1.0, &tmpl, &same).unwrap() - 3.0).abs() < 1e-12);
}

#[test]
fn projective_search_matches_the_true_set() {
    // With the constant in the base, every hyperplane off the constant
    // direction spans the same probes as P0 modulo constants.
    let (game, hist) = constant_duel();
    let tmpl = SurrogateSpec::new(ProbeSet::canonical(2, 1), 0.1, 1.0);
    let (p0, _) = backtest(&game, &hist, &ProbeSet::canonical(2, 1), 1.5, &tmpl).unwrap();
    let base = ProjectiveBase::linear(2, 1);
    let mut prev: Option<CandidateLabel> = None;
    for seed in 0..10 {
        let (label, report) = projective_search(&game, &hist, &base, 1.5, &tmpl, prev.as_ref(), 16, seed).unwrap();
        assert_eq!(report.entries.len(), 16);
        assert!((report.best_score() - p0).abs() <= 1e-12 * p0, "seed {seed}: {} vs {p0}", report.best_score());
        prev = Some(label);
    }
}

#[test]
fn pool_evolution_keeps_a_working_set() {
    let (game, hist) = duel(401, |t| dvector![0.2 + 0.1 * t.sin(), -0.1]);
    let lib = generate_library(2, 1);
    let tmpl = SurrogateSpec::new(ProbeSet::canonical(2, 1), 0.1, 0.0);
    let mut sets = vec![ProbeSet::canonical(2, 1)];
    sets.extend(Pool::from_library(&lib, 4, 9).unwrap().candidates.into_iter().map(|c| c.set));
    let mut pool = Pool::new(sets).unwrap();
    for round in 0..20u64 {
        let t0 = 1.0 + 0.1 * round as f64;
        let report = select_best(&game, &hist, &pool.candidates, t0, &tmpl).unwrap();
        assert!(report.best_score().is_finite());
        let next = evolve_pool(&pool, &report, &lib, round).unwrap();
        let (removed, _) = next.replacements.last().unwrap();
        let removed_score = report.score_of(removed).unwrap();
        assert!(removed == &report.best && removed_score == report.best_score() || removed_score >= report.best_score());
        assert!(next.candidates.iter().any(|c| c.label == report.best) || removed_score == report.best_score());
        pool = next;
    }
    assert_eq!(pool.replacements.len(), 20);
}

#[test]
fn live_plan_steers_the_prediction() {
    let (game, hist) = constant_duel();
    let set = ProbeSet::new(vec![Expr::sub(Expr::u(0), Expr::uo(0)), Expr::sub(Expr::u(1), Expr::uo(1)), Expr::phi(0)], 2, 1).unwrap();
    let base = SurrogateSpec::new(set.clone(), 0.1, 0.0);
    let held = predict(&game, &hist, 1.0, &base, 0.5).unwrap();
    // The observed intended control is constant, so holding it reproduces the
    // history exactly.
    let worst = held.phi_hat.iter().enumerate().map(|(k, x)| (x[0] - hist.phi[101 + k][0]).abs()).fold(0.0, f64::max);
    assert!(worst <= 1e-9, "{worst}");
    let pushed = predict(&game, &hist, 1.0, &base.clone().with_plan(ControlPlan::Live(vec![dvector![0.6, -0.1]])), 0.5).unwrap();
    assert!(pushed.phi_hat[49][0] > held.phi_hat[49][0] + 0.1);
}

#[test]
fn blind_candidates_never_win() {
    let (game, hist) = constant_duel();
    let cands = [
        CandidateSet { label: CandidateLabel::Finite(0), set: ProbeSet::new(vec![Expr::uo(0), Expr::uo(1), Expr::phi(0)], 2, 1).unwrap() },
        CandidateSet { label: CandidateLabel::Finite(1), set: ProbeSet::canonical(2, 1) },
    ];
    for a in [0.0, 0.5, 1.0] {
        let report = select_best(&game, &hist, &cands, 1.5, &SurrogateSpec::new(ProbeSet::canonical(2, 1), 0.1, a)).unwrap();
        assert_eq!(report.best, CandidateLabel::Finite(1));
        assert_eq!(report.entries[0].score, f64::INFINITY);
    }
}
