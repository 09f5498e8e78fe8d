use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand, ValueEnum};
use hetnet::energy::EnergyParams;
use hetnet::report::{summary, write_report};
use hetnet::reproduce::{
    energy_report, handover_study, relay_study, render_handover_study, render_relay_study, RATES_KBPS, REPETITIONS,
};
use hetnet::scenario::{parse_scenario, Scenario};
use hetnet::sim::{run_scenario, SimError, SimOptions};

const EXIT_VIOLATION: u8 = 1;
const EXIT_INPUT: u8 = 2;

/// Simulator for Bluetooth/Wi-Fi vertical handover on SDN-controlled devices.
#[derive(Parser)]
#[command(name = "hetnet", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a scenario file and write its report.
    Simulate {
        scenario: PathBuf,
        /// Override the seed given in the file.
        #[arg(long)]
        seed: Option<u64>,
        /// Write the event trace to this file.
        #[arg(long)]
        trace: Option<PathBuf>,
        /// Directory for the CSV files and summary; the summary is printed
        /// to stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Regenerate one of the built-in experiments.
    Reproduce {
        experiment: Experiment,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Parse and check a scenario file without running it.
    Validate { scenario: PathBuf },
}

#[derive(Clone, Copy, ValueEnum)]
enum Experiment {
    Energy,
    Handover,
    RelayQos,
}

impl Experiment {
    fn file_name(self) -> &'static str {
        match self {
            Experiment::Energy => "energy.txt",
            Experiment::Handover => "handover.txt",
            Experiment::RelayQos => "relay-qos.txt",
        }
    }
}

/// Failure carrying its exit status.
struct Failure(u8, anyhow::Error);

impl<E: Into<anyhow::Error>> From<E> for Failure {
    fn from(e: E) -> Self {
        Failure(EXIT_INPUT, e.into())
    }
}

fn load(path: &Path) -> Result<Scenario, Failure> {
    let text = fs::read_to_string(path).with_context(|| format!("cannot read {}", path.display()))?;
    parse_scenario(&text).map_err(|d| Failure(EXIT_INPUT, anyhow::anyhow!("{}: {d}", path.display())))
}

fn sim_failure(e: SimError) -> Failure {
    match e {
        SimError::TooManyDevices(_) => Failure(EXIT_INPUT, e.into()),
        SimError::Energy { .. } => Failure(EXIT_VIOLATION, e.into()),
    }
}

fn emit(text: &str, out: Option<&Path>, file: &str) -> Result<(), Failure> {
    print!("{text}");
    if let Some(dir) = out {
        fs::create_dir_all(dir).with_context(|| format!("cannot create {}", dir.display()))?;
        fs::write(dir.join(file), text).with_context(|| format!("cannot write {}", dir.display()))?;
    }
    Ok(())
}

fn simulate(path: &Path, seed: Option<u64>, trace: Option<&Path>, out: Option<&Path>) -> Result<bool, Failure> {
    let mut sc = load(path)?;
    if let Some(seed) = seed {
        sc.seed = seed;
    }
    log::info!("running {} with seed {}", sc.name, sc.seed);
    let report = run_scenario(&sc, SimOptions { trace: trace.is_some(), record_packets: false }).map_err(sim_failure)?;
    if let (Some(path), Some(text)) = (trace, report.trace.as_deref()) {
        fs::write(path, text).with_context(|| format!("cannot write {}", path.display()))?;
    }
    match out {
        Some(dir) => write_report(&report, dir).with_context(|| format!("cannot write report to {}", dir.display()))?,
        None => print!("{}", summary(&report)),
    }
    for v in &report.violations {
        eprintln!("violation: {v}");
    }
    Ok(report.violations.is_empty())
}

fn reproduce(experiment: Experiment, out: Option<&Path>) -> Result<bool, Failure> {
    let (text, clean) = match experiment {
        Experiment::Energy => (energy_report(&EnergyParams::default()), true),
        Experiment::Handover => {
            let study = handover_study(REPETITIONS, &RATES_KBPS).map_err(sim_failure)?;
            (render_handover_study(&study), study.violations.is_empty())
        }
        Experiment::RelayQos => {
            let study = relay_study(REPETITIONS, &RATES_KBPS, false).map_err(sim_failure)?;
            (render_relay_study(&study), study.violations.is_empty())
        }
    };
    emit(&text, out, experiment.file_name())?;
    Ok(clean)
}

fn validate(path: &Path) -> Result<bool, Failure> {
    let sc = load(path)?;
    println!(
        "ok: {} ({} devices, {} networks, {} flows, {} scripted handovers)",
        sc.name,
        sc.devices.len(),
        sc.networks.len(),
        sc.flows.len(),
        sc.handovers.len()
    );
    Ok(true)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter("SIM_LOG")).init();
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Simulate { scenario, seed, trace, out } => {
            simulate(scenario, *seed, trace.as_deref(), out.as_deref())
        }
        Command::Reproduce { experiment, out } => reproduce(*experiment, out.as_deref()),
        Command::Validate { scenario } => validate(scenario),
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(EXIT_VIOLATION),
        Err(Failure(code, e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(code)
        }
    }
}
