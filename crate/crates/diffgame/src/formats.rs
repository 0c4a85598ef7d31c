//! On-disk formats: history and frame CSV, probe-set and prediction JSON,
//! selection traces.
//!
//! Floats in CSV are written with 17 significant digits, so every value reads
//! back bit for bit. JSON uses the shortest representation that round-trips.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use diffgame_core::conservation::FrameSeries;
use diffgame_core::dynamics::History;
use diffgame_core::numerics::TimeGrid;
use diffgame_core::predictor::{Prediction, PredictionStatus, StepDiagnostics};
use diffgame_core::probes::{Expr, ProbeSet};
use diffgame_core::selection::CandidateLabel;
use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// `{:.16e}`: 17 significant digits.
pub fn fmt_f64(x: f64) -> String {
    format!("{x:.16e}")
}

/// Writes `bytes` to a sibling temporary file and renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = std::path::PathBuf::from(tmp);
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    let line = e.position().map(|p| p.line()).unwrap_or(0);
    Error::Format { path: path.to_owned(), line, message: e.to_string() }
}

// ---------------------------------------------------------------------------
// History

pub fn history_header(m: usize, d: usize) -> Vec<String> {
    let mut h = vec!["t".to_string()];
    h.extend((0..m).map(|i| format!("phi_{i}")));
    h.extend((0..d).map(|i| format!("u_{i}")));
    h.extend((0..d).map(|i| format!("uo_{i}")));
    h
}

pub fn write_history<W: Write>(history: &History, out: W) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(history_header(history.state_dim(), history.control_dim()))?;
    for k in 0..history.len() {
        let row = std::iter::once(history.grid.time(k))
            .chain(history.phi[k].iter().copied())
            .chain(history.u_realized[k].iter().copied())
            .chain(history.u_intended[k].iter().copied())
            .map(fmt_f64);
        w.write_record(row)?;
    }
    w.flush()?;
    Ok(())
}

pub fn history_to_string(history: &History) -> String {
    let mut buf = Vec::new();
    write_history(history, &mut buf).expect("writing to memory");
    String::from_utf8(buf).expect("csv output is utf-8")
}

pub fn save_history(history: &History, path: &Path) -> Result<()> {
    write_atomic(path, history_to_string(history).as_bytes())
}

/// Counts `prefix_0, prefix_1, ..` starting at `cols[at]`.
fn count_columns(cols: &[String], at: usize, prefix: &str) -> usize {
    cols[at..]
        .iter()
        .enumerate()
        .take_while(|(i, c)| **c == format!("{prefix}_{i}"))
        .count()
}

/// Parses the history CSV; `path` only labels error messages.
pub fn read_history<R: Read>(input: R, path: &Path) -> Result<History> {
    let mut r = csv::ReaderBuilder::new().flexible(true).has_headers(false).from_reader(input);
    let mut records = r.records();
    let bad = |line: u64, message: String| Error::Format { path: path.to_owned(), line, message };

    let header = match records.next() {
        Some(rec) => rec.map_err(|e| csv_error(path, e))?,
        None => return Err(bad(1, "empty file".into())),
    };
    let cols: Vec<String> = header.iter().map(|c| c.trim().to_string()).collect();
    if cols.first().map(String::as_str) != Some("t") {
        return Err(bad(1, "header must start with `t`".into()));
    }
    let m = count_columns(&cols, 1, "phi");
    let d = count_columns(&cols, 1 + m, "u");
    let d_o = count_columns(&cols, 1 + m + d, "uo");
    if m == 0 || d == 0 || d_o != d || cols.len() != 1 + m + 2 * d {
        return Err(bad(1, format!("header must be t, phi_0.., u_0.., uo_0.. with matching control counts, got `{}`", cols.join(","))));
    }
    let width = cols.len();

    let mut times = Vec::new();
    let (mut phi, mut u, mut uo) = (Vec::new(), Vec::new(), Vec::new());
    for rec in records {
        let rec = rec.map_err(|e| csv_error(path, e))?;
        let line = rec.position().map(|p| p.line()).unwrap_or(0);
        if rec.len() != width {
            return Err(bad(line, format!("expected {width} columns, found {}", rec.len())));
        }
        let vals = rec
            .iter()
            .enumerate()
            .map(|(i, s)| s.trim().parse::<f64>().map_err(|_| bad(line, format!("column `{}`: cannot parse `{s}`", cols[i]))))
            .collect::<Result<Vec<f64>>>()?;
        times.push((line, vals[0]));
        phi.push(DVector::from_column_slice(&vals[1..1 + m]));
        u.push(DVector::from_column_slice(&vals[1 + m..1 + m + d]));
        uo.push(DVector::from_column_slice(&vals[1 + m + d..]));
    }
    if times.len() < 2 {
        return Err(bad(1, "need at least two rows to fix the time step".into()));
    }
    let grid = recover_grid(&times).map_err(|(line, msg)| bad(line, msg))?;
    History::new(grid, phi, uo, u).map_err(|e| bad(0, e.to_string()))
}

/// Uniform grid through the time column. Prefers the shortest decimal step
/// that reproduces every time exactly, so written grids read back unchanged.
fn recover_grid(times: &[(u64, f64)]) -> std::result::Result<TimeGrid, (u64, String)> {
    let t0 = times[0].1;
    let raw = times[1].1 - t0;
    let reproduces = |h: f64| times.iter().enumerate().all(|(k, (_, t))| t0 + k as f64 * h == *t);
    let exact = (1..=17)
        .filter_map(|digits| format!("{:.*e}", digits - 1, raw).parse::<f64>().ok())
        .find(|&h| reproduces(h));
    let h = exact.unwrap_or(raw);
    let grid = TimeGrid::new(t0, h, times.len()).map_err(|_| (times[1].0, format!("invalid time step {raw}")))?;
    for (k, (line, t)) in times.iter().enumerate() {
        if (grid.time(k) - t).abs() > 1e-9 * h {
            return Err((*line, format!("time {t} is off the uniform grid (expected {})", grid.time(k))));
        }
    }
    Ok(grid)
}

pub fn load_history(path: &Path) -> Result<History> {
    read_history(&read_file(path)?[..], path)
}

// ---------------------------------------------------------------------------
// Probe sets

/// JSON form of a probe set: one prefix expression per probe.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeSetFile {
    pub control_dim: usize,
    pub state_dim: usize,
    pub probes: Vec<String>,
}

impl From<&ProbeSet> for ProbeSetFile {
    fn from(set: &ProbeSet) -> Self {
        Self {
            control_dim: set.control_dim(),
            state_dim: set.state_dim(),
            probes: set.probes().iter().map(Expr::to_string).collect(),
        }
    }
}

impl ProbeSetFile {
    pub fn to_probe_set(&self) -> Result<ProbeSet> {
        let exprs = self
            .probes
            .iter()
            .enumerate()
            .map(|(i, s)| Expr::parse(s).map_err(|e| Error::validation(format!("probes[{i}]"), e)))
            .collect::<Result<Vec<_>>>()?;
        ProbeSet::new(exprs, self.control_dim, self.state_dim).map_err(|e| Error::validation("probes", e))
    }
}

pub fn probe_set_to_json(set: &ProbeSet) -> String {
    serde_json::to_string_pretty(&ProbeSetFile::from(set)).expect("plain data serializes")
}

pub fn load_probe_set(path: &Path) -> Result<ProbeSet> {
    let bytes = read_file(path)?;
    let file: ProbeSetFile = serde_json::from_slice(&bytes).map_err(|e| Error::Format {
        path: path.to_owned(),
        line: e.line() as u64,
        message: e.to_string(),
    })?;
    file.to_probe_set().map_err(|e| match e {
        Error::Validation { field, message } => Error::Validation { field: format!("{}: {field}", path.display()), message },
        other => other,
    })
}

pub fn save_probe_set(set: &ProbeSet, path: &Path) -> Result<()> {
    write_atomic(path, probe_set_to_json(set).as_bytes())
}

// ---------------------------------------------------------------------------
// Predictions

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridRecord {
    pub t_start: f64,
    pub h: f64,
    pub count: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DiagnosticsRecord {
    pub newton_iterations: usize,
    pub sigma_ratio: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum StatusRecord {
    Complete,
    Truncated { step: usize, reason: String },
}

impl From<&PredictionStatus> for StatusRecord {
    fn from(s: &PredictionStatus) -> Self {
        match s {
            PredictionStatus::Complete => Self::Complete,
            PredictionStatus::Truncated { step, reason } => Self::Truncated { step: *step, reason: reason.clone() },
        }
    }
}

impl StatusRecord {
    /// `complete` or `truncated@<step>:<reason>`.
    pub fn short(&self) -> String {
        match self {
            Self::Complete => "complete".into(),
            Self::Truncated { step, reason } => format!("truncated@{step}:{reason}"),
        }
    }
}

/// JSON form of a [`Prediction`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub anchor: f64,
    pub grid: GridRecord,
    pub phi_hat: Vec<Vec<f64>>,
    pub u_star: Vec<Vec<f64>>,
    pub diagnostics: Vec<DiagnosticsRecord>,
    pub status: StatusRecord,
}

fn rows(vs: &[DVector<f64>]) -> Vec<Vec<f64>> {
    vs.iter().map(|v| v.as_slice().to_vec()).collect()
}

impl From<&Prediction> for PredictionRecord {
    fn from(p: &Prediction) -> Self {
        Self {
            anchor: p.anchor,
            grid: GridRecord { t_start: p.grid.t_start, h: p.grid.h, count: p.grid.count },
            phi_hat: rows(&p.phi_hat),
            u_star: rows(&p.u_star),
            diagnostics: p
                .diagnostics
                .iter()
                .map(|d| DiagnosticsRecord { newton_iterations: d.newton_iterations, sigma_ratio: d.sigma_ratio })
                .collect(),
            status: (&p.status).into(),
        }
    }
}

impl From<&PredictionRecord> for Prediction {
    fn from(r: &PredictionRecord) -> Self {
        let vecs = |vs: &[Vec<f64>]| vs.iter().map(|v| DVector::from_column_slice(v)).collect();
        Prediction {
            anchor: r.anchor,
            grid: TimeGrid { t_start: r.grid.t_start, h: r.grid.h, count: r.grid.count },
            phi_hat: vecs(&r.phi_hat),
            u_star: vecs(&r.u_star),
            diagnostics: r
                .diagnostics
                .iter()
                .map(|d| StepDiagnostics { newton_iterations: d.newton_iterations, sigma_ratio: d.sigma_ratio })
                .collect(),
            status: match &r.status {
                StatusRecord::Complete => PredictionStatus::Complete,
                StatusRecord::Truncated { step, reason } => PredictionStatus::Truncated { step: *step, reason: reason.clone() },
            },
        }
    }
}

pub fn prediction_to_json(p: &Prediction) -> String {
    serde_json::to_string_pretty(&PredictionRecord::from(p)).expect("plain data serializes")
}

pub fn save_prediction(p: &Prediction, path: &Path) -> Result<()> {
    write_atomic(path, prediction_to_json(p).as_bytes())
}

// ---------------------------------------------------------------------------
// Frames and traces

/// `tau, alpha_i_j (row-major), f_i, pdot_norm`.
pub fn frames_to_csv(series: &FrameSeries) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    if let Some(first) = series.frames.first() {
        let (d, k) = first.alpha.shape();
        let mut header = vec!["tau".to_string()];
        for i in 0..d {
            header.extend((0..k).map(|j| format!("alpha_{i}_{j}")));
        }
        header.extend((0..d).map(|i| format!("f_{i}")));
        header.push("pdot_norm".into());
        w.write_record(&header).expect("writing to memory");
    }
    for fr in &series.frames {
        let alpha = fr.alpha.row_iter().flat_map(|r| r.iter().copied().collect::<Vec<_>>());
        let row = std::iter::once(fr.tau)
            .chain(alpha)
            .chain(fr.f.iter().copied())
            .chain(std::iter::once(fr.pdot_norm))
            .map(fmt_f64);
        w.write_record(row).expect("writing to memory");
    }
    String::from_utf8(w.into_inner().expect("flush to memory")).expect("utf-8")
}

/// One row of a pool trace.
#[derive(Debug, Clone, PartialEq)]
pub struct PoolTraceRow {
    pub round: usize,
    pub label: CandidateLabel,
    pub score: f64,
    pub replaced: bool,
}

/// `round, label, score, replaced`.
pub fn pool_trace_to_csv(rows: &[PoolTraceRow]) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["round", "label", "score", "replaced"]).expect("writing to memory");
    for r in rows {
        w.write_record([r.round.to_string(), r.label.to_string(), fmt_f64(r.score), r.replaced.to_string()])
            .expect("writing to memory");
    }
    String::from_utf8(w.into_inner().expect("flush to memory")).expect("utf-8")
}

/// `t0, c_0.., score`; all covectors must share a length.
pub fn projective_trace_to_csv(rows: &[(f64, Vec<f64>, f64)]) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    let n = rows.first().map_or(0, |r| r.1.len());
    let mut header = vec!["t0".to_string()];
    header.extend((0..n).map(|i| format!("c_{i}")));
    header.push("score".into());
    w.write_record(&header).expect("writing to memory");
    for (t0, c, score) in rows {
        let row = std::iter::once(*t0).chain(c.iter().copied()).chain(std::iter::once(*score)).map(fmt_f64);
        w.write_record(row).expect("writing to memory");
    }
    String::from_utf8(w.into_inner().expect("flush to memory")).expect("utf-8")
}

#[cfg(test)]
mod tests {
    use super::*;
    use diffgame_core::dynamics::{scenario, simulate, ScenarioParams};
    use nalgebra::dvector;

    fn duel(t_start: f64, count: usize) -> History {
        let (game, r) = scenario("linear-duel", &ScenarioParams::new()).unwrap();
        let grid = TimeGrid::new(t_start, 0.01, count).unwrap();
        simulate(&game, &r, |t| dvector![0.2 + t, -0.1], &grid, &dvector![1.0]).unwrap()
    }

    #[test]
    fn history_round_trip_is_exact() {
        for t_start in [0.0, 0.3, -1.7] {
            let hist = duel(t_start, 40);
            let text = history_to_string(&hist);
            let back = read_history(text.as_bytes(), Path::new("mem")).unwrap();
            assert_eq!(back, hist);
        }
    }

    #[test]
    fn header_arithmetic() {
        let hist = duel(0.0, 3);
        let text = history_to_string(&hist);
        assert!(text.starts_with("t,phi_0,u_0,u_1,uo_0,uo_1\n"));
        assert_eq!(history_header(1, 2).len(), 6);
    }

    #[test]
    fn wrong_column_count_names_the_line() {
        let text = "t,phi_0,u_0,u_1,uo_0,uo_1\n0,1,0,0,0,0\n0.1,1,0,0,0\n";
        match read_history(text.as_bytes(), Path::new("h.csv")).unwrap_err() {
            Error::Format { line, message, .. } => {
                assert_eq!(line, 3);
                assert!(message.contains("expected 6 columns"), "{message}");
            }
            other => panic!("{other}"),
        }
    }

    #[test]
    fn malformed_inputs() {
        let cases = [
            ("", 1),
            ("x,phi_0,u_0,uo_0\n0,1,0,0\n0.1,1,0,0\n", 1),
            ("t,phi_0,u_0,u_1,uo_0\n0,1,0,0,0\n", 1),
            ("t,phi_0,u_0,uo_0\n0,1,0,0\n0.1,abc,0,0\n", 3),
            ("t,phi_0,u_0,uo_0\n0,1,0,0\n0.1,1,0,0\n0.25,1,0,0\n", 4),
            ("t,phi_0,u_0,uo_0\n0,1,0,0\n", 1),
        ];
        for (text, want) in cases {
            match read_history(text.as_bytes(), Path::new("h.csv")) {
                Err(Error::Format { line, .. }) => assert_eq!(line, want, "{text:?}"),
                other => panic!("{text:?}: {other:?}"),
            }
        }
    }

    #[test]
    fn probe_set_json_round_trip() {
        let set = ProbeSet::new(
            vec![Expr::tanh(Expr::u(0)), Expr::mul(Expr::Const(0.1), Expr::u(1)), Expr::pow(Expr::phi(0), 2)],
            2,
            1,
        )
        .unwrap();
        let json = probe_set_to_json(&set);
        let file: ProbeSetFile = serde_json::from_str(&json).unwrap();
        assert_eq!(file.to_probe_set().unwrap(), set);
        let bad = ProbeSetFile { control_dim: 2, state_dim: 1, probes: vec!["u0".into(), "(+ u1".into(), "phi0".into()] };
        match bad.to_probe_set().unwrap_err() {
            Error::Validation { field, .. } => assert_eq!(field, "probes[1]"),
            other => panic!("{other}"),
        }
    }

    #[test]
    fn prediction_json_round_trip() {
        let p = Prediction {
            anchor: 0.5,
            grid: TimeGrid { t_start: 0.51, h: 0.01, count: 3 },
            phi_hat: vec![dvector![1.0 / 3.0], dvector![2.0]],
            u_star: vec![dvector![0.1, 0.2]],
            diagnostics: vec![StepDiagnostics { newton_iterations: 2, sigma_ratio: 0.75 }],
            status: PredictionStatus::Truncated { step: 2, reason: "SingularJacobian".into() },
        };
        let json = prediction_to_json(&p);
        assert!(json.contains("\"kind\": \"truncated\""));
        let back: PredictionRecord = serde_json::from_str(&json).unwrap();
        assert_eq!(Prediction::from(&back), p);
    }

    #[test]
    fn atomic_write_leaves_no_temp_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("out.csv");
        write_atomic(&path, b"abc").unwrap();
        assert_eq!(fs::read(&path).unwrap(), b"abc");
        assert_eq!(fs::read_dir(dir.path()).unwrap().count(), 1);
    }
}
