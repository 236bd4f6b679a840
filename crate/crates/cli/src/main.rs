use std::net::{IpAddr, Ipv4Addr};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, ValueEnum};
use dmpc_core::simulator::{
    prepare, run_prepared, Controller, RunOptions, Scenario, ScenarioError, SimError, TransportKind,
};

mod report;

const EXIT_VALIDATION: u8 = 2;
const EXIT_INFEASIBLE: u8 = 3;
const EXIT_IO: u8 = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum ControllerArg {
    Proposed,
    Fixed,
    Sequential,
    All,
}

impl ControllerArg {
    fn controllers(self) -> Vec<Controller> {
        match self {
            Self::Proposed => vec![Controller::Proposed],
            Self::Fixed => vec![Controller::FixedReference],
            Self::Sequential => vec![Controller::Sequential],
            Self::All => vec![
                Controller::Proposed,
                Controller::FixedReference,
                Controller::Sequential,
            ],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum TransportArg {
    Inproc,
    Tcp,
}

/// Run distributed MPC scenarios and write metric tables and plot data.
#[derive(Debug, Parser)]
#[command(name = "dmpc", version)]
struct Cli {
    /// Scenario file (JSON).
    #[arg(long, required_unless_present = "list_scenarios")]
    scenario: Option<PathBuf>,

    /// Controller to run; `all` runs the three and normalizes costs by the proposed one.
    #[arg(long, value_enum, default_value = "all")]
    controller: ControllerArg,

    #[arg(long, value_enum, default_value = "inproc")]
    transport: TransportArg,

    /// First TCP port; free ports are picked when omitted.
    #[arg(long)]
    base_port: Option<u16>,

    /// Output directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,

    /// Overrides `sim.seed`.
    #[arg(long)]
    seed: Option<u64>,

    /// Scenario override as dotted.key=value (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,

    /// List the scenario files in this directory and exit.
    #[arg(long, value_name = "DIR", num_args = 0..=1, default_missing_value = "scenarios")]
    list_scenarios: Option<PathBuf>,
}

#[derive(Debug, thiserror::Error)]
enum CliError {
    #[error("bad override {0:?}, expected KEY=VALUE")]
    BadOverride(String),
    #[error(transparent)]
    Scenario(#[from] ScenarioError),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Report(#[from] report::ReportError),
    #[error("reading {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::BadOverride(_) => EXIT_VALIDATION,
            CliError::Scenario(ScenarioError::Io { .. }) => EXIT_IO,
            CliError::Scenario(_) => EXIT_VALIDATION,
            CliError::Sim(e) if e.is_infeasibility() => EXIT_INFEASIBLE,
            CliError::Sim(SimError::Scenario(ScenarioError::Io { .. })) => EXIT_IO,
            CliError::Sim(_) => EXIT_INFEASIBLE,
            CliError::Report(_) | CliError::Io { .. } => EXIT_IO,
        }
    }
}

fn parse_overrides(raw: &[String], seed: Option<u64>) -> Result<Vec<(String, String)>, CliError> {
    let mut out = raw
        .iter()
        .map(|s| {
            s.split_once('=')
                .filter(|(k, _)| !k.trim().is_empty())
                .map(|(k, v)| (k.trim().to_string(), v.to_string()))
                .ok_or_else(|| CliError::BadOverride(s.clone()))
        })
        .collect::<Result<Vec<_>, _>>()?;
    if let Some(seed) = seed {
        out.push(("sim.seed".into(), seed.to_string()));
    }
    Ok(out)
}

fn list_scenarios(dir: &Path) -> Result<(), CliError> {
    let entries = std::fs::read_dir(dir).map_err(|source| CliError::Io {
        path: dir.to_path_buf(),
        source,
    })?;
    let mut paths: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "json"))
        .collect();
    paths.sort();
    for p in paths {
        match Scenario::load(&p, &[]) {
            Ok(s) => println!(
                "{}\t{}\t{} agents, N = {}, {} steps",
                p.display(),
                s.name,
                s.agents.len(),
                s.horizon,
                s.steps
            ),
            Err(e) => println!("{}\tinvalid: {e}", p.display()),
        }
    }
    Ok(())
}

fn run(cli: &Cli) -> Result<(), CliError> {
    if let Some(dir) = &cli.list_scenarios {
        return list_scenarios(dir);
    }
    let path = cli.scenario.as_ref().expect("clap requires --scenario");
    let overrides = parse_overrides(&cli.overrides, cli.seed)?;
    // validate everything before any run starts
    let scenario = Scenario::load(path, &overrides)?;
    let transport = match cli.transport {
        TransportArg::Inproc => TransportKind::InProc,
        TransportArg::Tcp => TransportKind::Tcp {
            host: IpAddr::V4(Ipv4Addr::LOCALHOST),
            base_port: cli.base_port,
        },
    };
    let opts = RunOptions {
        transport,
        ..RunOptions::default()
    };

    log::info!("preparing {}", scenario.name);
    let prepared = prepare(&scenario)?;
    let mut records = Vec::new();
    for controller in cli.controller.controllers() {
        log::info!("running {} with {}", scenario.name, controller.name());
        let rec = run_prepared(&scenario, &prepared, controller, &opts)?;
        let m = rec.summary(&scenario).metrics;
        println!(
            "{} {}: J^a = {:?}, infeasible events = {}, invariant failures = {}, max coupled value = {:.6}",
            scenario.name,
            controller.name(),
            m.actual_cost,
            m.infeasible_events,
            m.invariant_failures,
            m.max_coupled_value
        );
        records.push(rec);
    }
    let files = report::emit_reports(&scenario, &records, &cli.out)?;
    for f in files {
        println!("wrote {}", f.display());
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
