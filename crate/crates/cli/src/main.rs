use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde_json::{json, Value};
use tmflow_core::collarflow::{collar_csv, run_collar, CollarConfig, CollarFlowState, CollarRun};
use tmflow_core::config::{AnalysisConfig, RunConfig, Scenario};
use tmflow_core::error::{FlowError, Result};
use tmflow_core::hypgeom::{collar_table, collar_table_csv};
use tmflow_core::io::{history_csv, parse_history_csv, Snapshot};
use tmflow_core::pipeline::{analyze_collar, analyze_torus, pipeline, REPORT_SCHEMA_VERSION};
use tmflow_core::ricci::{extinction_report, ricci_csv, run_ricci, RicciConfig};
use tmflow_core::singular::oscillation_profile;
use tmflow_core::torusflow::{self, energy_identity_residual, horizontal_diagnostics, FlowState, TorusRun};

#[derive(Parser)]
#[command(name = "tmflow", version, about = "Coupled harmonic map and metric flows, singularity analysis and Ricci continuation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the scenario selected in the config.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Overrides `output_dir`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the collar flow from the config's `collar` block (defaults without a config).
    RunCollar {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Singularity analysis of a stored history and snapshot directory.
    Analyze {
        #[arg(long)]
        history: PathBuf,
        #[arg(long)]
        snapshots: PathBuf,
        /// The run is a collar run.
        #[arg(long)]
        collar: bool,
        /// Takes the `analysis` block from this config.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
    /// Flow, analysis at the stop event, and Ricci continuation.
    Pipeline {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Collar half-lengths and conformal factors; CSV on stdout unless `--out`.
    CollarTable {
        #[arg(long, value_delimiter = ',', required = true)]
        ell: Vec<f64>,
        #[arg(long, value_delimiter = ',', required = true)]
        delta: Vec<f64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Ricci flow from the capped cusped metric on an n-punctured sphere.
    Ricci {
        #[arg(long)]
        punctures: Option<usize>,
        #[arg(long)]
        cap: Option<f64>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn exit_code(e: &FlowError) -> u8 {
    match e {
        FlowError::Config(_) | FlowError::Json(_) | FlowError::Domain(_) | FlowError::Invalid(_) => 2,
        FlowError::Cfl { .. } | FlowError::NumericalAbort { .. } => 3,
        FlowError::Format(_) | FlowError::Io(_) => 1,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Err(e) = init_threads() {
        eprintln!("tmflow: {e}");
        return ExitCode::from(exit_code(&e));
    }
    match dispatch(cli.command) {
        Ok(code) => ExitCode::from(code),
        Err((e, out)) => {
            eprintln!("tmflow: {e}");
            if let (FlowError::NumericalAbort { snapshot: Some(bytes), .. }, Some(dir)) = (&e, out) {
                let path = dir.join("abort.snap");
                if fs::create_dir_all(&dir).and_then(|_| fs::write(&path, bytes)).is_ok() {
                    eprintln!("tmflow: last finite state written to {}", path.display());
                }
            }
            ExitCode::from(exit_code(&e))
        }
    }
}

fn init_threads() -> Result<()> {
    let Ok(v) = std::env::var("TMFLOW_THREADS") else { return Ok(()) };
    let n: usize = v
        .trim()
        .parse()
        .ok()
        .filter(|n| *n > 0)
        .ok_or_else(|| FlowError::Config(vec![format!("TMFLOW_THREADS must be a positive integer, got {v:?}")]))?;
    rayon::ThreadPoolBuilder::new().num_threads(n).build_global().map_err(|e| FlowError::Config(vec![e.to_string()]))
}

type Outcome = std::result::Result<u8, (FlowError, Option<PathBuf>)>;

fn dispatch(command: Command) -> Outcome {
    let plain = |e: FlowError| (e, None);
    match command {
        Command::Run { config, out } => {
            let cfg = RunConfig::from_file(&config).map_err(plain)?;
            let dir = out.unwrap_or_else(|| cfg.output_dir.clone());
            run(&cfg, &dir).map_err(|e| (e, Some(dir)))
        }
        Command::RunCollar { config, out } => {
            let cfg = match config {
                Some(p) => RunConfig::from_file(&p).map_err(plain)?,
                None => RunConfig::default(),
            };
            let dir = out.unwrap_or_else(|| cfg.output_dir.clone());
            let cfg = RunConfig { scenario: Scenario::Collar, ..cfg };
            cfg.validate().map_err(plain)?;
            write_collar(&cfg.resolved().collar, &dir).map_err(|e| (e, Some(dir)))
        }
        Command::Analyze { history, snapshots, collar, config, out } => {
            let analysis = match config {
                Some(p) => RunConfig::from_file(&p).map_err(plain)?.analysis,
                None => AnalysisConfig::default(),
            };
            analyze(&history, &snapshots, collar, &analysis, &out).map_err(plain)
        }
        Command::Pipeline { config, out } => {
            let cfg = RunConfig::from_file(&config).map_err(plain)?;
            let dir = out.unwrap_or_else(|| cfg.output_dir.clone());
            let report = pipeline(&cfg);
            write_json(&dir, "pipeline.json", &serde_json::to_value(&report).map_err(|e| plain(e.into()))?).map_err(plain)?;
            Ok(match &report.failed_stage {
                None => 0,
                Some(f) if f.stage == "config" => 2,
                Some(f) if f.numerical => 3,
                Some(_) => 1,
            })
        }
        Command::CollarTable { ell, delta, out } => {
            let csv = collar_table_csv(&collar_table(&ell, &delta).map_err(plain)?);
            match out {
                Some(p) => fs::write(p, csv).map_err(|e| plain(e.into()))?,
                None => print!("{csv}"),
            }
            Ok(0)
        }
        Command::Ricci { punctures, cap, config, out } => {
            let base = match config {
                Some(p) => RunConfig::from_file(&p).map_err(plain)?,
                None => RunConfig::default(),
            };
            let mut cfg = base.ricci.clone();
            if let Some(n) = punctures {
                cfg.initial.punctures = n;
            }
            if let Some(c) = cap {
                cfg.initial.cap = c;
            }
            let dir = out.unwrap_or(base.output_dir);
            ricci(&cfg, &dir).map_err(|e| (e, Some(dir)))
        }
    }
}

fn write_json(dir: &Path, name: &str, value: &Value) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(dir.join(name), text)?;
    Ok(())
}

fn write_snapshots(dir: &Path, snaps: impl Iterator<Item = Snapshot>) -> Result<usize> {
    let sdir = dir.join("snapshots");
    fs::create_dir_all(&sdir)?;
    let mut count = 0;
    for (k, s) in snaps.enumerate() {
        s.write(&sdir.join(format!("{k:06}.snap")))?;
        count += 1;
    }
    Ok(count)
}

fn run(cfg: &RunConfig, dir: &Path) -> Result<u8> {
    cfg.validate()?;
    let cfg = cfg.resolved();
    match cfg.scenario {
        Scenario::Torus => {
            let flow = &cfg.torus.flow;
            let u = cfg.torus.initial.build(flow.n, flow.target_dim)?;
            let r = torusflow::run(flow, FlowState::new(0.0, u, flow.modulus)?)?;
            write_torus(&r, flow.eta, dir)
        }
        Scenario::Collar => write_collar(&cfg.collar, dir),
        Scenario::Ricci => ricci(&cfg.ricci, dir),
    }
}

fn write_torus(r: &TorusRun, eta: f64, dir: &Path) -> Result<u8> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join("history.csv"), history_csv(&r.history))?;
    let snapshots = write_snapshots(dir, r.snapshots.iter().map(FlowState::snapshot))?;
    let identity = energy_identity_residual(&r.history, eta, 1e-8).ok();
    let report = json!({
        "schema_version": REPORT_SCHEMA_VERSION,
        "scenario": "torus",
        "status": r.status,
        "dt": r.dt,
        "final_time": r.final_state.time,
        "samples": r.history.len(),
        "snapshots": snapshots,
        "energy_identity_max_relative": identity.map(|i| i.max_relative),
        "horizontal": horizontal_diagnostics(&r.history, eta)?,
    });
    write_json(dir, "report.json", &report)?;
    println!("torus run: {:?} at t = {}, {} samples, {snapshots} snapshots", r.status, r.final_state.time, r.history.len());
    Ok(0)
}

fn write_collar(cfg: &CollarConfig, dir: &Path) -> Result<u8> {
    let r: CollarRun = run_collar(cfg)?;
    fs::create_dir_all(dir)?;
    fs::write(dir.join("history.csv"), history_csv(&r.history))?;
    fs::write(dir.join("collar.csv"), collar_csv(&r.collar))?;
    let snapshots = write_snapshots(dir, r.snapshots.iter().map(|s| s.snapshot(&r.grid)))?;
    let min_margin = r.collar.iter().map(|s| s.margin).fold(f64::INFINITY, f64::min);
    let report = json!({
        "schema_version": REPORT_SCHEMA_VERSION,
        "scenario": "collar",
        "status": r.status,
        "steps": r.steps,
        "final_time": r.final_state.time,
        "final_ell": r.final_state.ell,
        "samples": r.history.len(),
        "snapshots": snapshots,
        "min_tension_margin": min_margin,
    });
    write_json(dir, "report.json", &report)?;
    println!("collar run: {:?} at t = {}, ell = {}, {} steps", r.status, r.final_state.time, r.final_state.ell, r.steps);
    Ok(0)
}

fn ricci(cfg: &RicciConfig, dir: &Path) -> Result<u8> {
    let run = run_ricci(cfg)?;
    let report = extinction_report(&run.samples, cfg.initial.punctures, run.initial.exact_area)?;
    fs::create_dir_all(dir)?;
    fs::write(dir.join("ricci.csv"), ricci_csv(&run.samples))?;
    let value = json!({
        "schema_version": REPORT_SCHEMA_VERSION,
        "status": run.status,
        "steps": run.steps,
        "cap": run.initial.cap,
        "predicted_deficit": run.initial.predicted_deficit,
        "worst_min_k_drop": run.worst_min_k_drop,
        "min_k_violations": run.min_k_violations,
        "last_min_k_violation": run.last_min_k_violation,
        "report": report,
    });
    write_json(dir, "ricci_report.json", &value)?;
    println!(
        "ricci: n = {}, A(0) = {:.6} (deficit {:.3}%), T_pred = {:.6} vs {}, slope error {:.2e}",
        report.punctures,
        report.initial_area,
        100.0 * report.relative_deficit,
        report.predicted_extinction,
        report.extinction_time,
        report.slope_error
    );
    Ok(0)
}

fn read_snapshots(dir: &Path) -> Result<Vec<Snapshot>> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "snap"))
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(FlowError::Invalid(format!("no .snap files in {}", dir.display())));
    }
    paths.iter().map(|p| Snapshot::read(p)).collect()
}

fn oscillation_csv(coords: impl Iterator<Item = f64>, osc: &[f64]) -> String {
    let mut out = String::from("row,coordinate,osc\n");
    for (j, (x, o)) in coords.zip(osc).enumerate() {
        out.push_str(&format!("{j},{x:?},{o:?}\n"));
    }
    out
}

fn analyze(history: &Path, snapshots: &Path, collar: bool, cfg: &AnalysisConfig, dir: &Path) -> Result<u8> {
    let violations = cfg.violations();
    if !violations.is_empty() {
        return Err(FlowError::Config(violations));
    }
    let history = parse_history_csv(&fs::read_to_string(history)?)?;
    let snaps = read_snapshots(snapshots)?;
    let (report, osc) = if collar {
        let mut states = Vec::with_capacity(snaps.len());
        let mut grid = None;
        for s in snaps {
            let (state, g) = CollarFlowState::from_snapshot(s)?;
            if grid.is_some_and(|h| h != g) {
                return Err(FlowError::Invalid("snapshots do not share one grid".into()));
            }
            grid = Some(g);
            states.push(state);
        }
        let grid = grid.expect("at least one snapshot");
        let last = states.last().expect("at least one snapshot");
        let osc = oscillation_csv((0..grid.n_s).map(|j| grid.s(j)), &oscillation_profile(&last.u)?);
        (analyze_collar(&history, &states, &grid, cfg)?, osc)
    } else {
        let states = snaps.into_iter().map(FlowState::from_snapshot).collect::<Result<Vec<_>>>()?;
        let last = states.last().expect("at least one snapshot");
        let ny = last.u.ny;
        let osc = oscillation_csv((0..ny).map(|j| j as f64 / ny as f64), &oscillation_profile(&last.u)?);
        (analyze_torus(&history, &states, cfg)?, osc)
    };
    write_json(dir, "analysis.json", &serde_json::to_value(&report)?)?;
    fs::write(dir.join("oscillation.csv"), osc)?;
    println!(
        "analysis: {} concentration points, {} accepted bubbles, ledger additivity {:.1e}",
        report.bubble_set.len(),
        report.accepted_bubble_energies().len(),
        report.ledger.additivity_residual
    );
    Ok(0)
}
