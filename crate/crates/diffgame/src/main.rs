use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use diffgame::core::dynamics::{scenario, simulate, GameDefinition, ScenarioKind, ScenarioParams};
use diffgame::core::inversion::InversionSettings;
use diffgame::core::numerics::TimeGrid;
use diffgame::core::predictor::{predict, SurrogateSpec};
use diffgame::core::probes::ProbeSet;
use diffgame::core::selection::{select_best, CandidateLabel, CandidateSet};
use diffgame::formats::{fmt_f64, load_history, load_probe_set, save_history, save_prediction, StatusRecord};
use diffgame::{harness, http, Error, Result};
use nalgebra::DVector;

#[derive(Parser)]
#[command(name = "diffgame", version, about = "Simulate interactive differential games and predict them short-term")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate a scenario under a constant intended control and write the history CSV.
    Simulate {
        #[arg(long)]
        scenario: String,
        #[arg(long)]
        h: f64,
        #[arg(long)]
        steps: usize,
        #[arg(long)]
        out: PathBuf,
        /// Scenario parameters as JSON, e.g. '{"k":[0.5,-0.25]}'.
        #[arg(long)]
        params: Option<String>,
        /// Intended control, comma separated; defaults to the scenario's.
        #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
        uo: Option<Vec<f64>>,
        /// Initial state, comma separated.
        #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
        phi0: Option<Vec<f64>>,
    },
    /// Predict from a recorded history and write the prediction JSON.
    Predict {
        #[arg(long)]
        history: PathBuf,
        #[arg(long)]
        t0: f64,
        #[arg(long)]
        dt: f64,
        #[arg(long)]
        blend: f64,
        /// Prediction length.
        #[arg(long)]
        horizon: f64,
        /// Probe-set JSON; defaults to u_0.., phi_0.
        #[arg(long)]
        probes: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Scenario whose dynamics produced the history.
        #[arg(long)]
        scenario: String,
        #[arg(long)]
        params: Option<String>,
    },
    /// Backtest every probe-set JSON in a directory at t0 and print the scores.
    Backtest {
        #[arg(long)]
        history: PathBuf,
        #[arg(long)]
        t0: f64,
        #[arg(long)]
        dt: f64,
        #[arg(long)]
        candidates: PathBuf,
        #[arg(long)]
        scenario: String,
        #[arg(long)]
        params: Option<String>,
        #[arg(long, default_value_t = 1.0)]
        blend: f64,
    },
    /// Run an experiment config.
    Sweep {
        #[arg(long)]
        config: PathBuf,
    },
    /// Serve live sessions over HTTP.
    Serve {
        #[arg(long, default_value_t = 8080)]
        port: u16,
        #[arg(long, default_value = "127.0.0.1")]
        host: std::net::IpAddr,
    },
}

fn parse_params(text: Option<&str>) -> Result<ScenarioParams> {
    match text {
        None => Ok(ScenarioParams::new()),
        Some(t) => serde_json::from_str(t).map_err(|e| Error::validation("--params", e)),
    }
}

fn load_game(name: &str, params: Option<&str>) -> Result<GameDefinition> {
    let params = parse_params(params)?;
    let (game, _) = scenario(name, &params).map_err(|e| Error::validation("--scenario", e))?;
    Ok(game)
}

fn vector(flag: &str, v: Option<Vec<f64>>, default: DVector<f64>) -> Result<DVector<f64>> {
    match v {
        None => Ok(default),
        Some(v) if v.len() == default.len() => Ok(DVector::from_vec(v)),
        Some(v) => Err(Error::validation(flag, format!("expected {} values, got {}", default.len(), v.len()))),
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Simulate { scenario: name, h, steps, out, params, uo, phi0 } => {
            let kind = ScenarioKind::parse(&name).map_err(|e| Error::validation("--scenario", e))?;
            let (game, reactions) = scenario(&name, &parse_params(params.as_deref())?).map_err(|e| Error::validation("--params", e))?;
            let uo = vector("--uo", uo, kind.default_intended())?;
            let phi0 = vector("--phi0", phi0, kind.default_initial_state())?;
            if steps == 0 {
                return Err(Error::validation("--steps", "must be at least 1"));
            }
            let grid = TimeGrid::new(0.0, h, steps + 1).map_err(|_| Error::validation("--h", "must be positive and finite"))?;
            let history = simulate(&game, &reactions, |_| uo.clone(), &grid, &phi0).map_err(|e| Error::Runtime(e.to_string()))?;
            save_history(&history, &out)
        }
        Command::Predict { history, t0, dt, blend, horizon, probes, out, scenario: name, params } => {
            let game = load_game(&name, params.as_deref())?;
            let history = load_history(&history)?;
            let set = match probes {
                Some(p) => load_probe_set(&p)?,
                None => ProbeSet::canonical(history.control_dim(), history.state_dim()),
            };
            let i0 = history.grid.index_of(t0).ok_or_else(|| Error::validation("--t0", "not a grid time of the history"))?;
            let spec = SurrogateSpec::new(set, dt, blend).with_inversion(InversionSettings::for_history(&history.truncated(i0 + 1)));
            let pred = predict(&game, &history, t0, &spec, horizon)?;
            save_prediction(&pred, &out)?;
            eprintln!("{}", StatusRecord::from(&pred.status).short());
            Ok(())
        }
        Command::Backtest { history, t0, dt, candidates, scenario: name, params, blend } => {
            let game = load_game(&name, params.as_deref())?;
            let history = load_history(&history)?;
            let files = candidate_files(&candidates)?;
            if files.is_empty() {
                return Err(Error::validation("--candidates", "no .json probe-set files found"));
            }
            let cands = files
                .iter()
                .enumerate()
                .map(|(i, f)| Ok(CandidateSet { label: CandidateLabel::Finite(i as u64), set: load_probe_set(f)? }))
                .collect::<Result<Vec<_>>>()?;
            let i0 = history.grid.index_of(t0).ok_or_else(|| Error::validation("--t0", "not a grid time of the history"))?;
            let template = SurrogateSpec::new(cands[0].set.clone(), dt, blend).with_inversion(InversionSettings::for_history(&history.truncated(i0 + 1)));
            let report = select_best(&game, &history, &cands, t0, &template)?;
            let mut w = csv::Writer::from_writer(std::io::stdout());
            let io = |e: csv::Error| Error::Runtime(e.to_string());
            w.write_record(["label", "file", "score", "status", "best"]).map_err(io)?;
            for (i, e) in report.entries.iter().enumerate() {
                let file = files[i].file_name().map(|f| f.to_string_lossy().into_owned()).unwrap_or_default();
                let best = (i == report.best_index).to_string();
                w.write_record([e.label.to_string(), file, fmt_f64(e.score), StatusRecord::from(&e.status).short(), best]).map_err(io)?;
            }
            w.flush().map_err(|e| Error::Runtime(e.to_string()))
        }
        Command::Sweep { config } => {
            let report = harness::run_config_file(&config)?;
            eprintln!("{} rows written to {}", report.rows.len(), report.output_dir.display());
            Ok(())
        }
        Command::Serve { port, host } => {
            let rt = tokio::runtime::Runtime::new().map_err(|e| Error::Runtime(e.to_string()))?;
            rt.block_on(http::serve(SocketAddr::new(host, port))).map_err(|e| Error::Runtime(e.to_string()))
        }
    }
}

/// `*.json` files in `dir`, sorted by name.
fn candidate_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut files = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.extension().is_some_and(|x| x == "json") {
            files.push(path);
        }
    }
    files.sort();
    Ok(files)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
