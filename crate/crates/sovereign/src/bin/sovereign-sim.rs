//! Scenario runner: `sovereign-sim run <script> [--seed N] [--bus simulated|udp]`,
//! plus the loss sweep, outage comparison and path benchmark.

use std::net::SocketAddr;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use sovereign::bench;
use sovereign::config::BusMode;
use sovereign::devices::Member;
use sovereign::scenario::{self, Runner, Script};
use sovereign::sweep::{self, SweepConfig};
use sovereign::udp::{UdpNetwork, DEFAULT_GROUP};

#[derive(Parser)]
#[command(name = "sovereign-sim", version, about = "Run smart-home scenarios on a simulated or UDP bus")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run a scenario script and check its expectations.
    Run {
        script: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value = "simulated")]
        bus: BusMode,
        #[arg(long, default_value = DEFAULT_GROUP)]
        group: SocketAddr,
        /// Write the bus trace here (simulated bus only).
        #[arg(long)]
        trace: Option<PathBuf>,
    },
    /// Delivery rate of content and commands against frame loss.
    Sweep {
        /// Comma-separated loss probabilities.
        #[arg(long, default_value = "0,0.1,0.2,0.3,0.5,1", value_delimiter = ',')]
        loss: Vec<f64>,
        #[arg(long, default_value_t = 1000)]
        trials: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long, default_value_t = sweep::DEFAULT_SLOT_MS)]
        slot_ms: u64,
        #[arg(long, default_value_t = sovereign_core::transport::DEFAULT_RETX_BUDGET)]
        budget: u32,
        /// Also write the points as JSON.
        #[arg(long)]
        json: Option<PathBuf>,
    },
    /// Time the publish and receive paths by cost category.
    Bench {
        #[arg(long, default_value_t = bench::DEFAULT_ITERATIONS)]
        iterations: usize,
        #[arg(long, default_value_t = bench::DEFAULT_PAYLOAD)]
        payload: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long)]
        json: Option<PathBuf>,
    },
    /// Run a script with and without its controller stop and compare the
    /// data-plane traces after the stop.
    Outage {
        script: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
}

fn read(path: &PathBuf) -> Result<String, String> {
    std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))
}

fn run(cli: Cli) -> Result<(), String> {
    match cli.cmd {
        Cmd::Run { script, seed, bus, group, trace } => {
            let text = read(&script)?;
            let mut s: Script = text.parse().map_err(|e| format!("{}: {e}", script.display()))?;
            if let Some(seed) = seed {
                s.seed = seed;
            }
            let runner = match bus {
                BusMode::Simulated => Runner::simulated(s),
                BusMode::Udp => Runner::with_network(s, Box::new(UdpNetwork::<Member>::new(group))).map_err(|e| e.to_string())?,
            };
            let report = runner.run().map_err(|e| e.to_string())?;
            print!("{report}");
            if let (Some(path), Some(text)) = (trace, report.trace_text()) {
                std::fs::write(&path, text).map_err(|e| format!("{}: {e}", path.display()))?;
            }
            Ok(())
        }
        Cmd::Sweep { loss, trials, seed, slot_ms, budget, json } => {
            if let Some(p) = loss.iter().find(|p| !(0.0..=1.0).contains(*p)) {
                return Err(format!("loss probability {p} outside 0..=1"));
            }
            let cfg = SweepConfig { seed, trials, slot_ms, retx_budget: budget };
            let points = sweep::loss_sweep(&loss, &cfg);
            print!("{}", sweep::format_table(&points));
            if let Some(path) = json {
                let text = serde_json::to_string_pretty(&points).map_err(|e| e.to_string())?;
                std::fs::write(&path, text).map_err(|e| format!("{}: {e}", path.display()))?;
            }
            Ok(())
        }
        Cmd::Bench { iterations, payload, seed, json } => {
            let report = bench::run(iterations, payload, seed);
            print!("{}", report.table());
            if let Some(path) = json {
                std::fs::write(&path, report.to_json()).map_err(|e| format!("{}: {e}", path.display()))?;
            }
            Ok(())
        }
        Cmd::Outage { script, seed } => {
            let cmp = scenario::compare_outage(&read(&script)?, seed).map_err(|e| e.to_string())?;
            println!("controller stopped at +{} ms; {} data-plane events compared", cmp.killed_at, cmp.compared_events);
            if let Some((i, a, b)) = &cmp.first_difference {
                println!("first difference at event {i}:\n  with controller:    {a:?}\n  without controller: {b:?}");
            }
            for d in &cmp.device_differences {
                println!("  {d}");
            }
            if cmp.identical() {
                println!("identical");
                Ok(())
            } else {
                Err("traces differ".into())
            }
        }
    }
}

fn main() -> ExitCode {
    env_logger::init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("sovereign-sim: {e}");
            ExitCode::FAILURE
        }
    }
}
