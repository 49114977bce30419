//! `ogs`: run scenarios, record and replay bus logs, self-test the station.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Duration;

use clap::{Parser, Subcommand};
use ogs_bus::mqtt::{BrokerUrl, MqttBridge};
use ogs_bus::{read_jsonl, topics, Bus, BusError};
use ogs_controller::scenario::load_scenario;
use ogs_controller::selftest::{self, Case};
use ogs_controller::{derive_stats, run_pass, scenario_schema, ControllerError, PassPlan};
use serde_json::json;

#[derive(Debug, thiserror::Error)]
enum CliError {
    #[error(transparent)]
    Controller(#[from] ControllerError),
    #[error(transparent)]
    Bus(#[from] BusError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
}

#[derive(Debug, Parser)]
#[command(name = "ogs", version, about = "Optical ground station simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Fly one pass from a scenario file and print the derived statistics.
    Run {
        #[arg(long)]
        scenario: PathBuf,
        /// Write the bus log as JSON Lines.
        #[arg(long)]
        record: Option<PathBuf>,
        /// Mirror the bus onto an MQTT broker (mqtt://, tcp:// or ws://).
        /// Falls back to OGS_BROKER_URL.
        #[arg(long)]
        broker: Option<String>,
    },
    /// Derive statistics from a recorded log.
    Replay {
        #[arg(long)]
        log: PathBuf,
    },
    /// Run the canned station checks; exits nonzero naming any failure.
    Selftest {
        #[arg(long, value_parser = parse_case)]
        only: Option<Case>,
        /// Force both tracking gains to zero.
        #[arg(long)]
        zero_gains: bool,
        /// Zero detector efficiency and dark rate.
        #[arg(long)]
        disable_detectors: bool,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Print the topic table with payload schemas and the scenario schema.
    Schema {
        #[arg(long, required = true)]
        print: bool,
    },
}

fn parse_case(s: &str) -> Result<Case, String> {
    Case::parse(s).ok_or_else(|| format!("unknown case `{s}` (expected a, b or c)"))
}

fn open(path: &PathBuf) -> Result<File, CliError> {
    File::open(path).map_err(|source| CliError::Io {
        path: path.clone(),
        source,
    })
}

fn print_json(value: &serde_json::Value) {
    let text = serde_json::to_string_pretty(value).expect("value serializes");
    // a closed pipe downstream is not an error worth reporting
    let _ = writeln!(std::io::stdout().lock(), "{text}");
}

fn run(scenario: PathBuf, record: Option<PathBuf>, broker: Option<String>) -> Result<ExitCode, CliError> {
    let sc = load_scenario(&scenario)?;
    let plan = PassPlan::new(sc)?;
    let url = match broker {
        Some(raw) => Some(BrokerUrl::parse(&raw)?),
        None => BrokerUrl::from_env().transpose()?,
    };
    let bus = Bus::with_capacity(1 << 20);
    let bridge = url
        .map(|u| MqttBridge::start(&bus, &u, &format!("ogs-{}", plan.pass_id)))
        .transpose()?;

    let report = run_pass(&plan, &bus)?;
    let log = bus.log();

    if let Some(bridge) = bridge {
        if bridge.flush(Duration::from_secs(10)) {
            bridge.stop();
        } else {
            // the broker never took the backlog; leave the workers to die with the process
            log::warn!("broker did not accept all telemetry within 10 s");
        }
    }
    if let Some(path) = &record {
        let io = |source| CliError::Io {
            path: path.clone(),
            source,
        };
        let mut out = BufWriter::new(File::create(path).map_err(io)?);
        ogs_bus::write_jsonl(&log, &mut out).map_err(io)?;
        out.flush().map_err(io)?;
    }

    eprintln!(
        "pass {} ended in {} after {:.1} s: {} lock losses, {:.1} s of QKD",
        report.pass_id, report.final_state, report.end_t, report.lock_losses, report.qkd_active_s
    );
    if let Some(cause) = &report.fault_cause {
        eprintln!("fault: {cause}");
    }
    for failure in &report.command_failures {
        eprintln!("command failed: {failure}");
    }
    print_json(&serde_json::to_value(derive_stats(&log)?).expect("stats serialize"));
    Ok(ExitCode::SUCCESS)
}

fn replay(path: PathBuf) -> Result<ExitCode, CliError> {
    let log = read_jsonl(BufReader::new(open(&path)?))?;
    print_json(&serde_json::to_value(derive_stats(&log)?).expect("stats serialize"));
    Ok(ExitCode::SUCCESS)
}

fn run_selftest(opts: selftest::Options) -> ExitCode {
    let report = selftest::run(&opts);
    for c in &report.checks {
        let verdict = if c.passed { "PASS" } else { "FAIL" };
        let _ = writeln!(std::io::stdout().lock(), "{verdict} ({}) {}: {}", c.case, c.name, c.detail);
    }
    if report.passed() {
        ExitCode::SUCCESS
    } else {
        for c in report.failures() {
            eprintln!("selftest failed: ({}) {}", c.case, c.name);
        }
        ExitCode::FAILURE
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run { scenario, record, broker } => run(scenario, record, broker),
        Command::Replay { log } => replay(log),
        Command::Selftest {
            only,
            zero_gains,
            disable_detectors,
            seed,
        } => Ok(run_selftest(selftest::Options {
            only,
            zero_gains,
            disable_detectors,
            seed,
        })),
        Command::Schema { print: _ } => {
            print_json(&json!({
                "topics": topics::topic_table_schema(),
                "scenario": scenario_schema(),
            }));
            Ok(ExitCode::SUCCESS)
        }
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
