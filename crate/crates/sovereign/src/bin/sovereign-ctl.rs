//! Controller admin tool.
//!
//! `init` creates the state file and `serve` runs the controller with its
//! HTTP API; the other verbs talk to a running `serve` over that API.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use rand_core::{OsRng, RngCore};
use serde_json::{json, Value};
use sovereign::config::{BusMode, Config};
use sovereign::devices::Member;
use sovereign::network::Network;
use sovereign::scenario::CONTROLLER_FACE;
use sovereign::service::{Persist, Service};
use sovereign::state_file;
use sovereign::udp::{wall_ms, UdpNetwork};
use sovereign_core::controller::{Controller, HomeState};
use sovereign_core::transport::{BusConfig, SimBus, Simulation};

#[derive(Parser)]
#[command(name = "sovereign-ctl", version, about = "Smart-home controller administration")]
struct Cli {
    /// TOML config file. SOVEREIGN_* environment variables override it.
    #[arg(long, env = "SOVEREIGN_CONFIG", global = true)]
    config: Option<PathBuf>,
    /// API base URL of a running controller (defaults to the configured bind address).
    #[arg(long, env = "SOVEREIGN_API", global = true)]
    api: Option<String>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Create a new home and its state file.
    Init {
        /// Home label; a random suffix is added.
        #[arg(long, default_value = "home")]
        label: String,
        /// Overwrite an existing state file.
        #[arg(long)]
        force: bool,
    },
    /// Run the controller and its HTTP API until interrupted.
    Serve,
    /// Approve a device for bootstrapping.
    Approve { label: String, token: String, service: String, location: String },
    /// Manage access rules.
    Rule {
        #[command(subcommand)]
        cmd: RuleCmd,
    },
    /// Start a new key version for a scope such as `TEMP/bedroom`.
    RotateKey { scope: String },
    /// Publish a command, e.g. `Light/kitchen/CMD/switch-on`.
    Command {
        topic: String,
        #[arg(default_value = "")]
        payload: String,
    },
    /// Show the home: entities, rules, keys, pending devices.
    Status {
        /// Print the raw JSON.
        #[arg(long)]
        json: bool,
    },
}

#[derive(Subcommand)]
enum RuleCmd {
    /// Add a rule such as `AirCon/bedroom decrypt TEMP/CONTENT/bedroom`.
    Add {
        rule: Vec<String>,
        /// Fail unless the policy version is still this.
        #[arg(long)]
        expect: Option<u64>,
    },
    /// Remove a rule by id.
    Rm {
        id: u64,
        #[arg(long)]
        expect: Option<u64>,
    },
    List,
}

fn api_base(cli_api: Option<String>, cfg: &Config) -> String {
    cli_api.unwrap_or_else(|| format!("http://{}", cfg.bind)).trim_end_matches('/').to_string()
}

fn http(result: Result<ureq::Response, ureq::Error>) -> Result<Value, String> {
    match result {
        Ok(r) => r.into_json().map_err(|e| e.to_string()),
        Err(ureq::Error::Status(code, r)) => {
            let body: Value = r.into_json().unwrap_or(Value::Null);
            let msg = body["message"].as_str().map_or_else(|| body.to_string(), str::to_string);
            Err(format!("{code}: {msg}"))
        }
        Err(e) => Err(format!("cannot reach controller: {e}")),
    }
}

fn print_status(s: &Value) {
    println!("home {}  policy version {}", s["home"].as_str().unwrap_or("?"), s["policy_version"]);
    println!("entities:");
    for e in s["entities"].as_array().into_iter().flatten() {
        println!("  {}  {} {}  {}", e["label"].as_str().unwrap_or(""), e["service"].as_str().unwrap_or(""), e["location"].as_str().unwrap_or(""), e["name"].as_str().unwrap_or(""));
    }
    let approved: Vec<&str> = s["approvals"].as_array().into_iter().flatten().filter_map(|a| a["label"].as_str()).collect();
    if !approved.is_empty() {
        println!("approved, not yet joined: {}", approved.join(", "));
    }
    let pending: Vec<&str> = s["pending"].as_array().into_iter().flatten().filter_map(|a| a["label"].as_str()).collect();
    if !pending.is_empty() {
        println!("waiting for approval: {}", pending.join(", "));
    }
    println!("rules:");
    for r in s["rules"].as_array().into_iter().flatten() {
        println!("  {:>3}  {}", r["id"], r["rule"].as_str().unwrap_or(""));
    }
    println!("key scopes:");
    for k in s["key_scopes"].as_array().into_iter().flatten() {
        println!("  {}  {} versions", k["scope"].as_str().unwrap_or(""), k["versions"].as_array().map_or(0, Vec::len));
    }
}

fn serve(cfg: &Config) -> Result<(), String> {
    cfg.check_bind().map_err(|e| e.to_string())?;
    let pass = cfg.passphrase().map_err(|e| e.to_string())?.to_string();
    let state = state_file::load(&cfg.state_path, &pass).map_err(|e| format!("{}: {e}", cfg.state_path.display()))?;
    let now = wall_ms();
    let controller = Controller::new(state, CONTROLLER_FACE, OsRng.next_u64(), now);
    let mut net: Box<dyn Network<Node = Member> + Send> = match cfg.bus {
        BusMode::Udp => Box::new(UdpNetwork::<Member>::new(cfg.multicast_group)),
        BusMode::Simulated => Box::new(Simulation::<Member>::new(SimBus::new(BusConfig::default()), now)),
    };
    let idx = net.add(Member::Controller(Box::new(controller))).map_err(|e| format!("opening face: {e}"))?;
    let persist = Persist { path: cfg.state_path.clone(), passphrase: pass, kdf_iterations: cfg.kdf_iterations };
    let service = Service::spawn(net, idx, Some(persist));
    let rt = tokio::runtime::Runtime::new().map_err(|e| e.to_string())?;
    rt.block_on(async {
        let listener = tokio::net::TcpListener::bind(cfg.bind).await.map_err(|e| format!("{}: {e}", cfg.bind))?;
        let addr = listener.local_addr().map_err(|e| e.to_string())?;
        println!("listening on http://{addr}");
        axum::serve(listener, sovereign::api::router(service.handle.clone()))
            .with_graceful_shutdown(async {
                let _ = tokio::signal::ctrl_c().await;
            })
            .await
            .map_err(|e| e.to_string())
    })?;
    drop(rt);
    service.shutdown().map_err(|e| e.to_string())?;
    Ok(())
}

fn run(cli: Cli) -> Result<(), String> {
    let cfg = Config::load(cli.config.as_deref()).map_err(|e| e.to_string())?;
    let base = api_base(cli.api, &cfg);
    let url = |path: &str| format!("{base}{path}");
    match cli.cmd {
        Cmd::Init { label, force } => {
            if cfg.state_path.exists() && !force {
                return Err(format!("{} exists; pass --force to replace it", cfg.state_path.display()));
            }
            let pass = cfg.passphrase().map_err(|e| e.to_string())?;
            let state = HomeState::init(&label, wall_ms(), cfg.key_lifetime_ms, &mut OsRng).map_err(|e| e.to_string())?;
            state_file::save(&cfg.state_path, &state, pass, cfg.kdf_iterations).map_err(|e| e.to_string())?;
            println!("created home {} in {}", state.home.to_uri(), cfg.state_path.display());
            Ok(())
        }
        Cmd::Serve => serve(&cfg),
        Cmd::Approve { label, token, service, location } => {
            http(ureq::post(&url("/api/bootstrap/approve")).send_json(json!({
                "label": label, "token": token, "service": service, "location": location
            })))?;
            println!("approved {label}");
            Ok(())
        }
        Cmd::Rule { cmd: RuleCmd::Add { rule, expect } } => {
            let v = http(ureq::post(&url("/api/rules")).send_json(json!({ "rule": rule.join(" "), "expected_version": expect })))?;
            println!("rule {} added, policy version {}", v["id"], v["policy_version"]);
            Ok(())
        }
        Cmd::Rule { cmd: RuleCmd::Rm { id, expect } } => {
            let mut req = ureq::delete(&url(&format!("/api/rules/{id}")));
            if let Some(e) = expect {
                req = req.query("expected_version", &e.to_string());
            }
            let v = http(req.call())?;
            println!("rule {id} removed, policy version {}", v["policy_version"]);
            Ok(())
        }
        Cmd::Rule { cmd: RuleCmd::List } => {
            let v = http(ureq::get(&url("/api/rules")).call())?;
            println!("policy version {}", v["policy_version"]);
            for r in v["rules"].as_array().into_iter().flatten() {
                println!("{:>3}  {}", r["id"], r["rule"].as_str().unwrap_or(""));
            }
            Ok(())
        }
        Cmd::RotateKey { scope } => {
            http(ureq::post(&url("/api/keys/rotate")).send_json(json!({ "scope": scope })))?;
            println!("rotated {scope}");
            Ok(())
        }
        Cmd::Command { topic, payload } => {
            let v = http(ureq::post(&url("/api/commands")).send_json(json!({ "topic": topic, "payload": payload })))?;
            println!("published {}", v["name"].as_str().unwrap_or(""));
            Ok(())
        }
        Cmd::Status { json } => {
            let v = http(ureq::get(&url("/api/status")).call())?;
            if json {
                println!("{}", serde_json::to_string_pretty(&v).expect("json value"));
            } else {
                print_status(&v);
            }
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    env_logger::init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("sovereign-ctl: {e}");
            ExitCode::FAILURE
        }
    }
}
