//! Choosing probe sets by backtesting.
//!
//! A candidate is scored by predicting the window `(t0 - dt, t0]`, which has
//! already been observed, and comparing with the recorded states. Candidates
//! come from a finite pool that evolves by replacing its worst member, or from
//! the projective family of hyperplanes in the span of `d + 2` base
//! functions.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::fmt;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::dynamics::{GameDefinition, History};
use crate::predictor::{predict, ControlPlan, PredictError, PredictionStatus, SurrogateSpec};
use crate::probes::{random_probe_set_with, Expr, ProbeError, ProbeLibrary, ProbeSet};

#[derive(Debug, Clone, PartialEq)]
pub enum CandidateLabel {
    Finite(u64),
    /// Unit covector `c` of a hyperplane, in canonical sign.
    Projective(Vec<f64>),
}

impl CandidateLabel {
    pub fn projective(c: &[f64]) -> Self {
        Self::Projective(canonical_covector(c))
    }
}

impl fmt::Display for CandidateLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Finite(id) => write!(f, "set-{id}"),
            Self::Projective(c) => {
                f.write_str("[")?;
                for (i, x) in c.iter().enumerate() {
                    if i > 0 {
                        f.write_str(" ")?;
                    }
                    write!(f, "{x:?}")?;
                }
                f.write_str("]")
            }
        }
    }
}

/// Unit vector with its first nonzero component positive.
pub fn canonical_covector(c: &[f64]) -> Vec<f64> {
    let norm = libm::sqrt(c.iter().map(|x| x * x).sum());
    let sign = match c.iter().find(|x| **x != 0.0) {
        Some(x) if *x < 0.0 => -1.0,
        _ => 1.0,
    };
    c.iter().map(|x| sign * x / norm).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct CandidateSet {
    pub label: CandidateLabel,
    pub set: ProbeSet,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BacktestEntry {
    pub label: CandidateLabel,
    /// Normalized RMS state error; `+inf` for a failed backtest.
    pub score: f64,
    pub status: PredictionStatus,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BacktestReport {
    pub entries: Vec<BacktestEntry>,
    pub best: CandidateLabel,
    pub best_index: usize,
}

impl BacktestReport {
    pub fn score_of(&self, label: &CandidateLabel) -> Option<f64> {
        self.entries.iter().find(|e| &e.label == label).map(|e| e.score)
    }

    pub fn best_score(&self) -> f64 {
        self.entries[self.best_index].score
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum SelectionError {
    AnchorTooEarly,
    NoCandidates,
    AllCandidatesFailed,
    ReportMismatch(String),
    InvalidBudget,
    Predict(PredictError),
    Probe(ProbeError),
}

impl fmt::Display for SelectionError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::AnchorTooEarly => f.write_str("backtest anchor t0 - dt lies before enough history"),
            Self::NoCandidates => f.write_str("no candidates to select from"),
            Self::AllCandidatesFailed => f.write_str("every candidate failed its backtest"),
            Self::ReportMismatch(msg) => write!(f, "report does not cover the pool: {msg}"),
            Self::InvalidBudget => f.write_str("search budget must be at least 1"),
            Self::Predict(e) => e.fmt(f),
            Self::Probe(e) => e.fmt(f),
        }
    }
}

impl From<PredictError> for SelectionError {
    fn from(e: PredictError) -> Self {
        match e {
            PredictError::AnchorTooEarly { .. } => Self::AnchorTooEarly,
            other => Self::Predict(other),
        }
    }
}

impl From<ProbeError> for SelectionError {
    fn from(e: ProbeError) -> Self {
        Self::Probe(e)
    }
}

/// `sqrt(mean_k (|predicted_k - observed_k|_2 / scale)^2)`.
pub fn normalized_rms(predicted: &[DVector<f64>], observed: &[DVector<f64>], scale: f64) -> f64 {
    assert_eq!(predicted.len(), observed.len(), "series lengths differ");
    if predicted.is_empty() {
        return 0.0;
    }
    let sum: f64 = predicted
        .iter()
        .zip(observed)
        .map(|(p, o)| {
            let e = (p - o).norm() / scale;
            e * e
        })
        .sum();
    libm::sqrt(sum / predicted.len() as f64)
}

/// Backtest of one probe set over `(t0 - dt, t0]`, returning the score and
/// the prediction status.
pub fn backtest(game: &GameDefinition, history: &History, set: &ProbeSet, t0: f64, template: &SurrogateSpec) -> Result<(f64, PredictionStatus), SelectionError> {
    let h = history.grid.h;
    let i_end = history.grid.index_of(t0).ok_or(SelectionError::Predict(PredictError::AnchorOffGrid(t0)))?;
    let d = template.delay_steps(h)?;
    if i_end < 2 * d + 2 {
        return Err(SelectionError::AnchorTooEarly);
    }
    let i_anchor = i_end - d;
    let observed_plan = ControlPlan::Live(history.u_intended[i_anchor + 1..=i_end].to_vec());
    let mut spec = template.clone().with_plan(observed_plan);
    spec.probe_set = set.clone();
    let pred = match predict(game, history, history.grid.time(i_anchor), &spec, d as f64 * h) {
        Ok(p) => p,
        Err(PredictError::Probe(e)) => {
            return Ok((f64::INFINITY, PredictionStatus::Truncated { step: 0, reason: format!("{e}") }));
        }
        Err(e) => return Err(e.into()),
    };
    if !pred.status.is_complete() {
        return Ok((f64::INFINITY, pred.status));
    }
    let scale = history.state_scale(i_end + 1);
    let score = normalized_rms(&pred.phi_hat, &history.phi[i_anchor + 1..=i_end], scale);
    Ok((score, pred.status))
}

/// Score of a candidate; a truncated backtest scores `+inf`.
pub fn backtest_score(game: &GameDefinition, history: &History, cand: &CandidateSet, t0: f64, template: &SurrogateSpec) -> Result<f64, SelectionError> {
    Ok(backtest(game, history, &cand.set, t0, template)?.0)
}

/// Builds a report from precomputed scores; the best is the earliest minimum.
pub fn report_from_entries(entries: Vec<BacktestEntry>) -> Result<BacktestReport, SelectionError> {
    if entries.is_empty() {
        return Err(SelectionError::NoCandidates);
    }
    let mut best_index = None;
    for (i, e) in entries.iter().enumerate() {
        if e.score.is_finite() && best_index.is_none_or(|b: usize| e.score < entries[b].score) {
            best_index = Some(i);
        }
    }
    let best_index = best_index.ok_or(SelectionError::AllCandidatesFailed)?;
    Ok(BacktestReport { best: entries[best_index].label.clone(), best_index, entries })
}

/// Backtests every candidate and picks the lowest score (earliest on ties).
pub fn select_best(game: &GameDefinition, history: &History, candidates: &[CandidateSet], t0: f64, template: &SurrogateSpec) -> Result<BacktestReport, SelectionError> {
    if candidates.is_empty() {
        return Err(SelectionError::NoCandidates);
    }
    let entries = candidates
        .iter()
        .map(|c| {
            let (score, status) = backtest(game, history, &c.set, t0, template)?;
            Ok(BacktestEntry { label: c.label.clone(), score, status })
        })
        .collect::<Result<Vec<_>, SelectionError>>()?;
    report_from_entries(entries)
}

/// `d + 2` base functions spanning the space whose hyperplanes label the
/// projective candidates.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectiveBase {
    pub d: usize,
    pub m: usize,
    pub exprs: Vec<Expr>,
}

impl ProjectiveBase {
    pub fn new(d: usize, m: usize, exprs: Vec<Expr>) -> Result<Self, ProbeError> {
        if exprs.len() != d + 2 {
            return Err(ProbeError::WrongSize { expected: d + 2, got: exprs.len() });
        }
        Ok(Self { d, m, exprs })
    }

    /// `u_0 .. u_{d-1}, phi_0, 1`.
    pub fn linear(d: usize, m: usize) -> Self {
        let mut exprs: Vec<Expr> = (0..d).map(Expr::u).collect();
        exprs.push(Expr::phi(0));
        exprs.push(Expr::Const(1.0));
        Self { d, m, exprs }
    }

    pub fn dim(&self) -> usize {
        self.exprs.len()
    }
}

/// Orthonormal basis (rows) of `{a : c·a = 0}`, taken from the Householder
/// reflector that maps the canonical `c` onto the first axis.
pub fn hyperplane_coefficients(c: &[f64]) -> DMatrix<f64> {
    let c = canonical_covector(c);
    let n = c.len();
    let mut w = DVector::from_vec(c);
    w[0] += 1.0;
    let reflector = DMatrix::identity(n, n) - (&w * w.transpose()) * (2.0 / w.norm_squared());
    reflector.rows(1, n - 1).into_owned()
}

/// Probe set whose probes are the combinations of `base` given by the rows
/// of [`hyperplane_coefficients`].
pub fn hyperplane_probe_set(base: &ProjectiveBase, c: &[f64]) -> Result<ProbeSet, ProbeError> {
    if c.len() != base.dim() {
        return Err(ProbeError::DimensionMismatch);
    }
    let coeffs = hyperplane_coefficients(c);
    let probes = coeffs
        .row_iter()
        .map(|row| {
            row.iter()
                .zip(&base.exprs)
                .filter(|(a, _)| **a != 0.0)
                .map(|(a, e)| Expr::mul(Expr::Const(*a), e.clone()))
                .reduce(Expr::add)
                .unwrap_or(Expr::Const(0.0))
        })
        .collect();
    ProbeSet::new(probes, base.d, base.m)
}

fn gaussian_vector<R: Rng>(rng: &mut R, n: usize) -> DVector<f64> {
    DVector::from_fn(n, |_, _| rng.sample::<f64, _>(StandardNormal))
}

/// Covectors evaluated by [`projective_search`], in evaluation order.
pub fn projective_proposals(dim: usize, prev: Option<&[f64]>, budget: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(budget);
    let mut fresh = budget;
    if let Some(p) = prev {
        let c = DVector::from_vec(canonical_covector(p));
        out.push(c.as_slice().to_vec());
        let local = (budget - 1) / 2;
        for _ in 0..local {
            let xi = gaussian_vector(&mut rng, dim);
            let tangent = &xi - &c * xi.dot(&c);
            let moved = &c + tangent * 0.1;
            out.push(canonical_covector(moved.as_slice()));
        }
        fresh = budget - 1 - local;
    }
    for _ in 0..fresh {
        let mut xi = gaussian_vector(&mut rng, dim);
        while xi.norm() == 0.0 {
            xi = gaussian_vector(&mut rng, dim);
        }
        out.push(canonical_covector(xi.as_slice()));
    }
    out
}

/// Sampling search over hyperplane labels: the previous label, Gaussian
/// perturbations of it and fresh uniform directions, `budget` backtests in
/// total.
#[allow(clippy::too_many_arguments)]
pub fn projective_search(
    game: &GameDefinition,
    history: &History,
    base: &ProjectiveBase,
    t0: f64,
    template: &SurrogateSpec,
    prev: Option<&CandidateLabel>,
    budget: usize,
    seed: u64,
) -> Result<(CandidateLabel, BacktestReport), SelectionError> {
    if budget == 0 {
        return Err(SelectionError::InvalidBudget);
    }
    let prev = match prev {
        Some(CandidateLabel::Projective(c)) => Some(c.as_slice()),
        _ => None,
    };
    let mut entries = Vec::with_capacity(budget);
    for c in projective_proposals(base.dim(), prev, budget, seed) {
        let set = hyperplane_probe_set(base, &c)?;
        let (score, status) = backtest(game, history, &set, t0, template)?;
        entries.push(BacktestEntry { label: CandidateLabel::Projective(c), score, status });
    }
    let report = report_from_entries(entries)?;
    Ok((report.best.clone(), report))
}

/// A finite ensemble of candidate sets with per-member score history.
#[derive(Debug, Clone, PartialEq)]
pub struct Pool {
    pub candidates: Vec<CandidateSet>,
    pub score_history: Vec<Vec<f64>>,
    /// `(removed, inserted)` per evolution round.
    pub replacements: Vec<(CandidateLabel, CandidateLabel)>,
    next_id: u64,
}

impl Pool {
    /// Labels the sets `Finite(0..)` in order.
    pub fn new(sets: Vec<ProbeSet>) -> Result<Self, SelectionError> {
        if sets.len() < 2 {
            return Err(SelectionError::NoCandidates);
        }
        let n = sets.len();
        let candidates: Vec<CandidateSet> = sets
            .into_iter()
            .enumerate()
            .map(|(i, set)| CandidateSet { label: CandidateLabel::Finite(i as u64), set })
            .collect();
        Ok(Self { candidates, score_history: alloc::vec![Vec::new(); n], replacements: Vec::new(), next_id: n as u64 })
    }

    /// `size` random library sets.
    pub fn from_library(lib: &ProbeLibrary, size: usize, seed: u64) -> Result<Self, SelectionError> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let sets = (0..size).map(|_| random_probe_set_with(lib, &mut rng)).collect::<Result<Vec<_>, _>>()?;
        Self::new(sets)
    }

    pub fn len(&self) -> usize {
        self.candidates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.candidates.is_empty()
    }
}

/// Replaces the worst-scoring member by a new set.
///
/// The worst is the earliest maximum of the report scores. The replacement is
/// a fresh random library set or, with equal probability, the best remaining
/// member with one probe swapped for another library entry.
pub fn evolve_pool(pool: &Pool, report: &BacktestReport, lib: &ProbeLibrary, seed: u64) -> Result<Pool, SelectionError> {
    if pool.len() < 2 {
        return Err(SelectionError::NoCandidates);
    }
    let scores = pool
        .candidates
        .iter()
        .map(|c| report.score_of(&c.label).ok_or_else(|| SelectionError::ReportMismatch(c.label.to_string())))
        .collect::<Result<Vec<f64>, _>>()?;
    let mut worst = 0;
    for (i, s) in scores.iter().enumerate() {
        if *s > scores[worst] {
            worst = i;
        }
    }
    let mut best: Option<usize> = None;
    for (i, s) in scores.iter().enumerate() {
        if i != worst && best.is_none_or(|b| *s < scores[b]) {
            best = Some(i);
        }
    }
    let best = best.expect("pool has at least two members");

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let new_set = if rng.random_bool(0.5) {
        random_probe_set_with(lib, &mut rng)?
    } else {
        mutate(&pool.candidates[best].set, lib, &mut rng)?
    };

    let mut next = pool.clone();
    for (hist, s) in next.score_history.iter_mut().zip(&scores) {
        hist.push(*s);
    }
    let label = CandidateLabel::Finite(next.next_id);
    next.next_id += 1;
    let removed = core::mem::replace(&mut next.candidates[worst], CandidateSet { label: label.clone(), set: new_set });
    next.score_history[worst] = Vec::new();
    next.replacements.push((removed.label, label));
    Ok(next)
}

fn mutate<R: Rng>(set: &ProbeSet, lib: &ProbeLibrary, rng: &mut R) -> Result<ProbeSet, ProbeError> {
    let unused: Vec<&Expr> = lib.entries.iter().filter(|e| !set.probes().contains(e)).collect();
    if unused.is_empty() {
        return random_probe_set_with(lib, rng);
    }
    let slot = rng.random_range(0..set.len());
    let entry = unused[rng.random_range(0..unused.len())].clone();
    let mut probes = set.probes().to_vec();
    probes[slot] = entry;
    ProbeSet::new(probes, set.control_dim(), set.state_dim())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::{scenario, simulate, ScenarioParams};
    use crate::numerics::TimeGrid;
    use crate::probes::generate_library;
    use nalgebra::dvector;

    fn duel() -> (GameDefinition, History) {
        let (game, r) = scenario("linear-duel", &ScenarioParams::new()).unwrap();
        let grid = TimeGrid::new(0.0, 0.01, 201).unwrap();
        let hist = simulate(&game, &r, |_| dvector![0.2, -0.1], &grid, &dvector![1.0]).unwrap();
        (game, hist)
    }

    fn template(a: f64) -> SurrogateSpec {
        SurrogateSpec::new(ProbeSet::canonical(2, 1), 0.1, a)
    }

    fn decoy() -> ProbeSet {
        ProbeSet::new(vec![Expr::uo(0), Expr::uo(1), Expr::phi(0)], 2, 1).unwrap()
    }

    #[test]
    fn canonical_p0_backtests_exactly() {
        let (game, hist) = duel();
        let cand = CandidateSet { label: CandidateLabel::Finite(0), set: ProbeSet::canonical(2, 1) };
        let s = backtest_score(&game, &hist, &cand, 1.5, &template(0.0)).unwrap();
        assert!(s <= 1e-8, "{s}");
        let blind = CandidateSet { label: CandidateLabel::Finite(1), set: decoy() };
        assert_eq!(backtest_score(&game, &hist, &blind, 1.5, &template(0.0)).unwrap(), f64::INFINITY);
        assert_eq!(backtest_score(&game, &hist, &cand, 0.2, &template(0.0)).unwrap_err(), SelectionError::AnchorTooEarly);
    }

    #[test]
    fn rms_of_identical_series_is_zero() {
        let (_, hist) = duel();
        assert_eq!(normalized_rms(&hist.phi, &hist.phi, 3.0), 0.0);
        let shifted: Vec<_> = hist.phi.iter().map(|p| p.add_scalar(2.0)).collect();
        assert!((normalized_rms(&shifted, &hist.phi, 4.0) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn selection_basics() {
        let (game, hist) = duel();
        let p0 = CandidateSet { label: CandidateLabel::Finite(7), set: ProbeSet::canonical(2, 1) };
        let report = select_best(&game, &hist, core::slice::from_ref(&p0), 1.5, &template(1.0)).unwrap();
        assert_eq!(report.best, CandidateLabel::Finite(7));
        let d = CandidateSet { label: CandidateLabel::Finite(8), set: decoy() };
        let report = select_best(&game, &hist, &[d.clone(), p0.clone()], 1.5, &template(1.0)).unwrap();
        assert_eq!(report.best, CandidateLabel::Finite(7));
        assert_eq!(select_best(&game, &hist, core::slice::from_ref(&d), 1.5, &template(1.0)).unwrap_err(), SelectionError::AllCandidatesFailed);
        assert_eq!(select_best(&game, &hist, &[], 1.5, &template(1.0)).unwrap_err(), SelectionError::NoCandidates);
    }

    #[test]
    fn argmin_is_scale_and_tie_stable() {
        let mk = |scores: &[f64]| {
            scores
                .iter()
                .enumerate()
                .map(|(i, s)| BacktestEntry { label: CandidateLabel::Finite(i as u64), score: *s, status: PredictionStatus::Complete })
                .collect::<Vec<_>>()
        };
        let scores = [0.3, 0.1, 0.5, 0.1, f64::INFINITY];
        let best = report_from_entries(mk(&scores)).unwrap().best;
        assert_eq!(best, CandidateLabel::Finite(1));
        for factor in [1e-6, 3.0, 1e9] {
            let scaled: Vec<f64> = scores.iter().map(|s| s * factor).collect();
            assert_eq!(report_from_entries(mk(&scaled)).unwrap().best, best);
        }
    }

    fn row_space_residual(rows: &DMatrix<f64>, v: &DVector<f64>) -> f64 {
        (v - rows.transpose() * (rows * v)).norm()
    }

    #[test]
    fn hyperplane_examples() {
        let base = ProjectiveBase::linear(2, 1);
        let a = hyperplane_coefficients(&[0.0, 0.0, 0.0, 1.0]);
        for e in [dvector![1.0, 0.0, 0.0, 0.0], dvector![0.0, 1.0, 0.0, 0.0], dvector![0.0, 0.0, 1.0, 0.0]] {
            assert!(row_space_residual(&a, &e) < 1e-15);
        }
        let s = core::f64::consts::FRAC_1_SQRT_2;
        let a = hyperplane_coefficients(&[0.0, 0.0, s, -s]);
        for e in [dvector![1.0, 0.0, 0.0, 0.0], dvector![0.0, 1.0, 0.0, 0.0], dvector![0.0, 0.0, s, s]] {
            assert!(row_space_residual(&a, &e) < 1e-15);
        }
        let set = hyperplane_probe_set(&base, &[0.0, 0.0, 0.0, 1.0]).unwrap();
        assert_eq!(set.len(), 3);
        // The constant is annihilated: no probe mentions it.
        assert!(set.probes().iter().all(|p| !p.to_string().contains(" 1.0)")));
    }

    #[test]
    fn hyperplane_coefficients_are_orthonormal_and_sign_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..200 {
            let c = gaussian_vector(&mut rng, 4);
            let c = c.normalize();
            let a = hyperplane_coefficients(c.as_slice());
            assert!((&a * &a.transpose() - DMatrix::identity(3, 3)).amax() < 1e-14);
            assert!((&a * &c).amax() < 1e-15);
            let neg: Vec<f64> = c.iter().map(|x| -x).collect();
            assert_eq!(a, hyperplane_coefficients(&neg));
            let base = ProjectiveBase::linear(2, 1);
            assert_eq!(hyperplane_probe_set(&base, c.as_slice()).unwrap(), hyperplane_probe_set(&base, &neg).unwrap());
        }
    }

    #[test]
    fn projective_budget_and_determinism() {
        let (game, hist) = duel();
        let base = ProjectiveBase::linear(2, 1);
        let prev = CandidateLabel::projective(&[0.1, 0.0, 0.0, 1.0]);
        let (label, report) = projective_search(&game, &hist, &base, 1.5, &template(0.0), Some(&prev), 1, 5).unwrap();
        assert_eq!(label, prev);
        assert_eq!(report.entries.len(), 1);
        let (l1, r1) = projective_search(&game, &hist, &base, 1.5, &template(0.0), Some(&prev), 9, 5).unwrap();
        let (l2, r2) = projective_search(&game, &hist, &base, 1.5, &template(0.0), Some(&prev), 9, 5).unwrap();
        assert_eq!((l1, r1.entries.len()), (l2, 9));
        assert_eq!(r1, r2);
        assert_eq!(projective_search(&game, &hist, &base, 1.5, &template(0.0), None, 0, 5).unwrap_err(), SelectionError::InvalidBudget);
    }

    fn pool_report(pool: &Pool, scores: &[f64]) -> BacktestReport {
        report_from_entries(
            pool.candidates
                .iter()
                .zip(scores)
                .map(|(c, s)| BacktestEntry { label: c.label.clone(), score: *s, status: PredictionStatus::Complete })
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn evolve_replaces_worst() {
        let lib = generate_library(2, 1);
        let pool = Pool::new(vec![ProbeSet::canonical(2, 1), decoy()]).unwrap();
        let next = evolve_pool(&pool, &pool_report(&pool, &[1.0, 5.0]), &lib, 1).unwrap();
        assert_eq!(next.candidates[0], pool.candidates[0]);
        assert_eq!(next.candidates[1].label, CandidateLabel::Finite(2));
        assert_eq!(next.replacements, vec![(CandidateLabel::Finite(1), CandidateLabel::Finite(2))]);
        let tie = evolve_pool(&pool, &pool_report(&pool, &[2.0, 2.0]), &lib, 1).unwrap();
        assert_eq!(tie.candidates[1], pool.candidates[1]);
        assert_eq!(tie.replacements[0].0, CandidateLabel::Finite(0));
    }

    #[test]
    fn evolution_keeps_best_member() {
        let (game, hist) = duel();
        let lib = generate_library(2, 1);
        let mut pool = Pool::from_library(&lib, 4, 11).unwrap();
        let mut last_best = f64::INFINITY;
        for round in 0..20u64 {
            let report = select_best(&game, &hist, &pool.candidates, 1.5, &template(1.0));
            let report = match report {
                Ok(r) => r,
                Err(SelectionError::AllCandidatesFailed) => {
                    let entries = pool
                        .candidates
                        .iter()
                        .map(|c| BacktestEntry { label: c.label.clone(), score: f64::INFINITY, status: PredictionStatus::Complete })
                        .collect();
                    BacktestReport { entries, best: pool.candidates[0].label.clone(), best_index: 0 }
                }
                Err(e) => panic!("{e}"),
            };
            let best = report.best_score();
            assert!(best <= last_best, "round {round}: {best} > {last_best}");
            last_best = best;
            let next = evolve_pool(&pool, &report, &lib, round).unwrap();
            if best.is_finite() {
                assert!(next.candidates.iter().any(|c| c.label == report.best));
            }
            assert_eq!(next.len(), pool.len());
            pool = next;
        }
    }
}
