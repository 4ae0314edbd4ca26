use std::io::{BufRead, BufReader};
use std::path::Path;
use std::process::{Child, Command, Output, Stdio};

const CTL: &str = env!("CARGO_BIN_EXE_sovereign-ctl");
const SIM: &str = env!("CARGO_BIN_EXE_sovereign-sim");

fn ctl(dir: &Path, args: &[&str]) -> Output {
    Command::new(CTL)
        .current_dir(dir)
        .env("SOVEREIGN_PASSPHRASE", "correct horse")
        .env_remove("SOVEREIGN_CONFIG")
        .env_remove("SOVEREIGN_API")
        .args(["--config", "ctl.toml"])
        .args(args)
        .output()
        .unwrap()
}

fn text(o: &Output) -> String {
    format!("{}{}", String::from_utf8_lossy(&o.stdout), String::from_utf8_lossy(&o.stderr))
}

fn setup() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(
        dir.path().join("ctl.toml"),
        "state_path = \"home.json\"\nbind = \"127.0.0.1:0\"\nbus = \"simulated\"\nkdf_iterations = 1000\n",
    )
    .unwrap();
    dir
}

struct Server {
    child: Child,
    url: String,
}

impl Drop for Server {
    fn drop(&mut self) {
        let _ = self.child.kill();
        let _ = self.child.wait();
    }
}

impl Server {
    /// Ctrl-C, as an operator would; serve saves and exits 0.
    fn interrupt(mut self) {
        let pid = self.child.id().to_string();
        assert!(Command::new("kill").args(["-INT", &pid]).status().unwrap().success());
        let status = self.child.wait().unwrap();
        assert!(status.success(), "serve exited with {status}");
    }
}

fn serve(dir: &Path) -> Server {
    let mut child = Command::new(CTL)
        .current_dir(dir)
        .env("SOVEREIGN_PASSPHRASE", "correct horse")
        .args(["--config", "ctl.toml", "serve"])
        .stdout(Stdio::piped())
        .stderr(Stdio::inherit())
        .spawn()
        .unwrap();
    let mut line = String::new();
    BufReader::new(child.stdout.take().unwrap()).read_line(&mut line).unwrap();
    let url = line.trim().strip_prefix("listening on ").unwrap_or_else(|| panic!("unexpected: {line:?}")).to_string();
    Server { child, url }
}

#[test]
fn init_refuses_to_overwrite() {
    let dir = setup();
    let o = ctl(dir.path(), &["init", "--label", "cli-home"]);
    assert!(o.status.success(), "{}", text(&o));
    assert!(text(&o).contains("created home /cli-home-"));
    let before = std::fs::read(dir.path().join("home.json")).unwrap();

    let o = ctl(dir.path(), &["init"]);
    assert!(!o.status.success());
    assert!(text(&o).contains("--force"));
    assert_eq!(std::fs::read(dir.path().join("home.json")).unwrap(), before);

    let o = ctl(dir.path(), &["init", "--force"]);
    assert!(o.status.success());
    assert_ne!(std::fs::read(dir.path().join("home.json")).unwrap(), before);
}

#[test]
fn missing_passphrase_and_non_loopback_bind_are_refused() {
    let dir = setup();
    let o = Command::new(CTL).current_dir(dir.path()).env_remove("SOVEREIGN_PASSPHRASE").args(["--config", "ctl.toml", "init"]).output().unwrap();
    assert!(!o.status.success());
    assert!(text(&o).contains("SOVEREIGN_PASSPHRASE"));
    assert!(ctl(dir.path(), &["init"]).status.success());
    let o = Command::new(CTL)
        .current_dir(dir.path())
        .env("SOVEREIGN_PASSPHRASE", "correct horse")
        .env("SOVEREIGN_BIND", "0.0.0.0:0")
        .args(["--config", "ctl.toml", "serve"])
        .output()
        .unwrap();
    assert!(!o.status.success());
    assert!(text(&o).contains("allow_lan"), "{}", text(&o));
}

#[test]
fn admin_verbs_against_a_running_controller() {
    let dir = setup();
    assert!(ctl(dir.path(), &["init", "--label", "cli-home"]).status.success());
    let srv = serve(dir.path());
    let api = |args: &[&str]| {
        let mut all = vec!["--api", srv.url.as_str()];
        all.extend_from_slice(args);
        ctl(dir.path(), &all)
    };

    let o = api(&["rule", "add", "AirCon/bedroom", "decrypt", "TEMP/CONTENT/bedroom"]);
    assert!(o.status.success(), "{}", text(&o));
    let id: String = text(&o).split_whitespace().nth(1).unwrap().to_string();
    let o = api(&["rule", "list"]);
    assert!(text(&o).contains("AirCon/bedroom decrypt TEMP/CONTENT/bedroom"));

    let o = api(&["rule", "add", "--expect", "0", "Light", "decrypt", "TEMP/CONTENT"]);
    assert!(!o.status.success());
    assert!(text(&o).contains("409"), "{}", text(&o));
    let o = api(&["rule", "rm", "4242"]);
    assert!(!o.status.success());
    assert!(text(&o).contains("404"));

    let o = api(&["approve", "lamp1", "000102030405060708090a0b0c0d0e0f", "Light", "hall"]);
    assert!(o.status.success(), "{}", text(&o));
    let o = api(&["rotate-key", "TEMP/bedroom"]);
    assert!(o.status.success(), "{}", text(&o));
    let o = api(&["command", "Light/hall/CMD/switch-on"]);
    assert!(text(&o).contains("/Light/hall/CMD/switch-on/t="), "{}", text(&o));

    let o = api(&["status"]);
    let t = text(&o);
    assert!(t.contains("approved, not yet joined: lamp1"), "{t}");
    assert!(t.contains("/TEMP/bedroom"));
    let o = api(&["status", "--json"]);
    let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert!(v["recent_events"].as_array().unwrap().iter().any(|e| e["kind"] == "key-rotated"));

    let o = api(&["rule", "rm", &id]);
    assert!(o.status.success(), "{}", text(&o));
    srv.interrupt();

    // Everything reached the state file.
    let state = sovereign::state_file::load(&dir.path().join("home.json"), "correct horse").unwrap();
    assert!(state.approvals.contains_key("lamp1"));
    assert!(state.rules.iter().all(|r| r.id.to_string() != id));
    assert!(state.events.iter().any(|e| e.kind.as_str() == "rule-removed"));
}

#[test]
fn verbs_report_an_unreachable_controller() {
    let dir = setup();
    let o = ctl(dir.path(), &["--api", "http://127.0.0.1:9", "status"]);
    assert!(!o.status.success());
    assert!(text(&o).contains("cannot reach controller"));
}

#[test]
fn sim_runs_scripts_and_reports_failures() {
    let dir = tempfile::tempdir().unwrap();
    let scenarios = Path::new(env!("CARGO_MANIFEST_DIR")).join("scenarios");
    let trace = dir.path().join("trace.txt");
    let o = Command::new(SIM)
        .args(["run", scenarios.join("ac-demo.sov").to_str().unwrap(), "--trace", trace.to_str().unwrap()])
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", text(&o));
    assert!(text(&o).contains("ok  line"));
    assert!(std::fs::read_to_string(&trace).unwrap().lines().count() > 100);

    let bad = dir.path().join("bad.sov");
    std::fs::write(&bad, "home /h\nspawn l1 light hall\nbootstrap\nrun 3000\nexpect actuated l1 switch-on\n").unwrap();
    let o = Command::new(SIM).args(["run", bad.to_str().unwrap()]).output().unwrap();
    assert!(!o.status.success());
    assert!(text(&o).contains("line 5"), "{}", text(&o));

    std::fs::write(&bad, "home /h\nfrobnicate\n").unwrap();
    let o = Command::new(SIM).args(["run", bad.to_str().unwrap()]).output().unwrap();
    assert!(!o.status.success());
    assert!(text(&o).contains("line 2"), "{}", text(&o));
}

#[test]
fn sim_outage_sweep_and_bench() {
    let dir = tempfile::tempdir().unwrap();
    let scenarios = Path::new(env!("CARGO_MANIFEST_DIR")).join("scenarios");
    let o = Command::new(SIM).args(["outage", scenarios.join("outage.sov").to_str().unwrap()]).output().unwrap();
    assert!(o.status.success(), "{}", text(&o));
    assert!(text(&o).contains("identical"));

    let json = dir.path().join("sweep.json");
    let o = Command::new(SIM)
        .args(["sweep", "--loss", "0,1", "--trials", "5", "--json", json.to_str().unwrap()])
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", text(&o));
    let points: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&json).unwrap()).unwrap();
    assert_eq!(points[0]["succeeded"], 5);
    assert_eq!(points[1]["succeeded"], 0);
    let o = Command::new(SIM).args(["sweep", "--loss", "1.5"]).output().unwrap();
    assert!(!o.status.success());

    let json = dir.path().join("bench.json");
    let o = Command::new(SIM).args(["bench", "--iterations", "10", "--json", json.to_str().unwrap()]).output().unwrap();
    assert!(o.status.success(), "{}", text(&o));
    assert!(text(&o).contains("other crypto"));
    let b: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&json).unwrap()).unwrap();
    assert_eq!(b["payload_bytes"], 256);
    assert_eq!(b["receive"]["categories"].as_array().unwrap().len(), 5);
}
