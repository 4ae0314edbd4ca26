//! Declarative scenario scripts and their runner.
//!
//! A script is line-oriented; `#` starts a comment. Settings may appear
//! anywhere and apply to the whole run:
//!
//! ```text
//! seed 7
//! home /demo-home
//! key-lifetime 3600000
//! loss 0.0
//! latency 5            # or a range: latency 2..10
//! ```
//!
//! Steps run in order. Times are milliseconds from the start of the run.
//!
//! ```text
//! spawn t1 temp bedroom          # label role location
//! tap observer                   # passive frame recorder
//! bootstrap                      # wait (default 30 s) until every device is in
//! rule AirCon/bedroom decrypt TEMP/CONTENT/bedroom
//! at 12000 set t1 reading 80     # schedule an action
//! run 20000                      # advance to t=20000, firing due actions
//! expect actuated w1 close
//! ```
//!
//! Actions: `publish <label> <topic> <payload>`, `command <label> <topic>
//! <payload>`, `controller-command <topic> <payload>`, `touch <label>`,
//! `set <label> reading|setpoint|period <value>`, `subscribe <label>
//! <topic>`, `compromise <label>`, `kill-controller`, `rule add <rule>`,
//! `rule rm <rule>`, `rotate <scope>`. Topics and scopes are relative to the
//! home prefix.
//!
//! Expectations: `actuated <label> <action> [count]`, `not-actuated <label>
//! [action]`, `delivered <label> [min] [since <ms>]`,
//! `not-delivered <label> [since <ms>]`, `key-renewed <label>
//! <ms>`, `rejected <label> <reason> [min]`,
//! `bootstrapped <label>`, `not-bootstrapped <label>`, `publish-errors
//! <label> <count>`.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand_chacha::ChaCha20Rng;
use rand_core::SeedableRng;
use sha2::{Digest, Sha256};
use sovereign_core::bootstrap::OobToken;
use sovereign_core::controller::{Controller, HomeState};
use sovereign_core::entity::{EntityConfig, Reject};
use sovereign_core::name::Name;
use sovereign_core::naming;
use sovereign_core::policy::RuleForm;
use sovereign_core::sim::Tap;
use sovereign_core::transport::{BusConfig, Latency, SimBus, Simulation, TraceEvent};

pub use crate::devices::check_audit_invariant;
use crate::devices::{Device, Member, Role};
use crate::network::Network;

/// Virtual start time of simulated runs.
pub const SIM_START: u64 = 1_700_000_000_000;
pub const DEFAULT_BOOTSTRAP_TIMEOUT_MS: u64 = 30_000;
pub const CONTROLLER_FACE: u32 = 1;
const EXCERPT_LINES: usize = 20;

#[derive(Debug, thiserror::Error)]
pub enum ScenarioError {
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("line {line}: {msg}")]
    Step { line: usize, msg: String },
    #[error("line {line}: assertion failed: {expectation}: {detail}\n--- trace excerpt ---\n{excerpt}")]
    AssertionFailed { line: usize, expectation: String, detail: String, excerpt: String },
    #[error("network: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq)]
pub enum Action {
    Publish { label: String, topic: Name, payload: String },
    Command { label: String, topic: Name, payload: String },
    ControllerCommand { topic: Name, payload: String },
    Touch(String),
    Set { label: String, what: Setting, value: f64 },
    Subscribe { label: String, topic: Name },
    Compromise(String),
    KillController,
    RuleAdd(RuleForm),
    RuleRemove(RuleForm),
    Rotate(Name),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Setting {
    Reading,
    Setpoint,
    Period,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Expectation {
    Actuated { label: String, action: String, count: Option<usize> },
    NotActuated { label: String, action: Option<String> },
    Delivered { label: String, min: usize, since: Option<u64> },
    NotDelivered { label: String, since: Option<u64> },
    /// A delivery at or after `after` was opened with a key version that
    /// became active at or after `after`.
    KeyRenewed { label: String, after: u64 },
    Rejected { label: String, reason: Reject, min: u64 },
    Bootstrapped(String),
    NotBootstrapped(String),
    PublishErrors { label: String, count: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub enum Step {
    Spawn { label: String, role: Role, location: String },
    Tap(String),
    Bootstrap { timeout_ms: u64 },
    Rule(RuleForm),
    At { at: u64, action: Action },
    Run(u64),
    Expect(Expectation),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Script {
    pub seed: u64,
    pub home: Name,
    pub key_lifetime_ms: u64,
    pub loss: f64,
    pub latency: Latency,
    /// (line number, step)
    pub steps: Vec<(usize, Step)>,
}

impl Default for Script {
    fn default() -> Self {
        Self {
            seed: 1,
            home: "/home-sim".parse().expect("constant"),
            key_lifetime_ms: sovereign_core::keystore::DEFAULT_KEY_LIFETIME_MS,
            loss: 0.0,
            latency: Latency::Fixed(5),
            steps: Vec::new(),
        }
    }
}

fn parse_num<T: FromStr>(line: usize, what: &str, s: Option<&str>) -> Result<T, ScenarioError> {
    let s = s.ok_or_else(|| ScenarioError::Parse { line, msg: format!("missing {what}") })?;
    s.parse().map_err(|_| ScenarioError::Parse { line, msg: format!("bad {what} {s:?}") })
}

fn word<'a>(line: usize, what: &str, s: Option<&'a str>) -> Result<&'a str, ScenarioError> {
    s.ok_or_else(|| ScenarioError::Parse { line, msg: format!("missing {what}") })
}

fn relative(line: usize, s: Option<&str>) -> Result<Name, ScenarioError> {
    let s = word(line, "name", s)?;
    let uri = if s.starts_with('/') { s.to_string() } else { format!("/{s}") };
    uri.parse().map_err(|_| ScenarioError::Parse { line, msg: format!("bad name {s:?}") })
}

fn rule(line: usize, text: &str) -> Result<RuleForm, ScenarioError> {
    text.parse().map_err(|e| ScenarioError::Parse { line, msg: format!("rule {text:?}: {e}") })
}

/// Joins the remaining words (payloads may contain spaces).
fn rest(words: &[&str]) -> String {
    words.join(" ")
}

fn parse_action(line: usize, words: &[&str]) -> Result<Action, ScenarioError> {
    let mut it = words.iter().copied();
    let verb = word(line, "action", it.next())?;
    let label = |it: &mut dyn Iterator<Item = &str>| word(line, "label", it.next()).map(str::to_string);
    Ok(match verb {
        "publish" => {
            let label = label(&mut it)?;
            let topic = relative(line, it.next())?;
            Action::Publish { label, topic, payload: rest(&it.collect::<Vec<_>>()) }
        }
        "command" => {
            let label = label(&mut it)?;
            let topic = relative(line, it.next())?;
            Action::Command { label, topic, payload: rest(&it.collect::<Vec<_>>()) }
        }
        "controller-command" => {
            let topic = relative(line, it.next())?;
            Action::ControllerCommand { topic, payload: rest(&it.collect::<Vec<_>>()) }
        }
        "touch" => Action::Touch(label(&mut it)?),
        "compromise" => Action::Compromise(label(&mut it)?),
        "subscribe" => {
            let label = label(&mut it)?;
            Action::Subscribe { label, topic: relative(line, it.next())? }
        }
        "set" => {
            let label = label(&mut it)?;
            let what = match word(line, "setting", it.next())? {
                "reading" => Setting::Reading,
                "setpoint" => Setting::Setpoint,
                "period" => Setting::Period,
                other => return Err(ScenarioError::Parse { line, msg: format!("unknown setting {other:?}") }),
            };
            Action::Set { label, what, value: parse_num(line, "value", it.next())? }
        }
        "kill-controller" => Action::KillController,
        "rule" => {
            let op = word(line, "add|rm", it.next())?;
            let r = rule(line, &rest(&it.collect::<Vec<_>>()))?;
            match op {
                "add" => Action::RuleAdd(r),
                "rm" => Action::RuleRemove(r),
                other => return Err(ScenarioError::Parse { line, msg: format!("rule {other:?}: expected add or rm") }),
            }
        }
        "rotate" => Action::Rotate(relative(line, it.next())?),
        other => return Err(ScenarioError::Parse { line, msg: format!("unknown action {other:?}") }),
    })
}

fn parse_expectation(line: usize, words: &[&str]) -> Result<Expectation, ScenarioError> {
    let mut it = words.iter().copied();
    let kind = word(line, "expectation", it.next())?;
    let label = word(line, "label", it.next())?.to_string();
    Ok(match kind {
        "actuated" => Expectation::Actuated {
            label,
            action: word(line, "action", it.next())?.to_string(),
            count: it.next().map(|c| parse_num(line, "count", Some(c))).transpose()?,
        },
        "not-actuated" => Expectation::NotActuated { label, action: it.next().map(str::to_string) },
        "delivered" => {
            let min = it.next().map(|c| parse_num(line, "count", Some(c))).transpose()?.unwrap_or(1);
            let since = match it.next() {
                Some("since") => Some(parse_num(line, "time", it.next())?),
                Some(other) => return Err(ScenarioError::Parse { line, msg: format!("expected since, got {other:?}") }),
                None => None,
            };
            Expectation::Delivered { label, min, since }
        }
        "not-delivered" => {
            let since = match it.next() {
                Some("since") => Some(parse_num(line, "time", it.next())?),
                Some(other) => return Err(ScenarioError::Parse { line, msg: format!("expected since, got {other:?}") }),
                None => None,
            };
            Expectation::NotDelivered { label, since }
        }
        "key-renewed" => Expectation::KeyRenewed { label, after: parse_num(line, "time", it.next())? },
        "rejected" => {
            let r = word(line, "reason", it.next())?;
            let reason = Reject::ALL
                .into_iter()
                .find(|x| x.as_str() == r)
                .ok_or_else(|| ScenarioError::Parse { line, msg: format!("unknown reject reason {r:?}") })?;
            Expectation::Rejected {
                label,
                reason,
                min: it.next().map(|c| parse_num(line, "count", Some(c))).transpose()?.unwrap_or(1),
            }
        }
        "bootstrapped" => Expectation::Bootstrapped(label),
        "not-bootstrapped" => Expectation::NotBootstrapped(label),
        "publish-errors" => Expectation::PublishErrors { label, count: parse_num(line, "count", it.next())? },
        other => return Err(ScenarioError::Parse { line, msg: format!("unknown expectation {other:?}") }),
    })
}

impl FromStr for Script {
    type Err = ScenarioError;

    fn from_str(text: &str) -> Result<Self, ScenarioError> {
        let mut s = Script::default();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let words: Vec<&str> = content.split_whitespace().collect();
            let args = &words[1..];
            match words[0] {
                "seed" => s.seed = parse_num(line, "seed", args.first().copied())?,
                "home" => s.home = relative(line, args.first().copied())?,
                "key-lifetime" => s.key_lifetime_ms = parse_num(line, "lifetime", args.first().copied())?,
                "loss" => {
                    s.loss = parse_num(line, "probability", args.first().copied())?;
                    if !(0.0..=1.0).contains(&s.loss) {
                        return Err(ScenarioError::Parse { line, msg: "loss must be within 0..=1".into() });
                    }
                }
                "latency" => {
                    let v = word(line, "latency", args.first().copied())?;
                    s.latency = match v.split_once("..") {
                        Some((lo, hi)) => {
                            let (lo, hi) = (parse_num(line, "latency", Some(lo))?, parse_num(line, "latency", Some(hi))?);
                            if lo > hi {
                                return Err(ScenarioError::Parse { line, msg: "empty latency range".into() });
                            }
                            Latency::Uniform(lo, hi)
                        }
                        None => Latency::Fixed(parse_num(line, "latency", Some(v))?),
                    };
                }
                "spawn" => {
                    let label = word(line, "label", args.first().copied())?.to_string();
                    let role = word(line, "role", args.get(1).copied())?
                        .parse()
                        .map_err(|msg| ScenarioError::Parse { line, msg })?;
                    let location = word(line, "location", args.get(2).copied())?.to_string();
                    s.steps.push((line, Step::Spawn { label, role, location }));
                }
                "tap" => s.steps.push((line, Step::Tap(word(line, "label", args.first().copied())?.to_string()))),
                "bootstrap" => {
                    let timeout_ms = match args.first() {
                        Some(t) => parse_num(line, "timeout", Some(t))?,
                        None => DEFAULT_BOOTSTRAP_TIMEOUT_MS,
                    };
                    s.steps.push((line, Step::Bootstrap { timeout_ms }));
                }
                "rule" => s.steps.push((line, Step::Rule(rule(line, &rest(args))?))),
                "at" => {
                    let at = parse_num(line, "time", args.first().copied())?;
                    let action = parse_action(line, &args[1.min(args.len())..])?;
                    s.steps.push((line, Step::At { at, action }));
                }
                "run" => s.steps.push((line, Step::Run(parse_num(line, "time", args.first().copied())?))),
                "expect" => s.steps.push((line, Step::Expect(parse_expectation(line, args)?))),
                other => return Err(ScenarioError::Parse { line, msg: format!("unknown directive {other:?}") }),
            }
        }
        Ok(s)
    }
}

impl Script {
    pub fn bus_config(&self) -> BusConfig {
        BusConfig { loss_probability: self.loss, latency: self.latency, seed: self.seed }
    }

    /// Time of the first scheduled `kill-controller`, if any.
    pub fn kill_time(&self) -> Option<u64> {
        self.steps.iter().find_map(|(_, s)| match s {
            Step::At { at, action: Action::KillController } => Some(*at),
            _ => None,
        })
    }
}

/// Deterministic out-of-band token for a label: the script stands in for
/// the sticker on the device.
pub fn scripted_token(seed: u64, label: &str) -> OobToken {
    let mut h = Sha256::new();
    h.update(b"scenario-token");
    h.update(seed.to_be_bytes());
    h.update(label.as_bytes());
    let d = h.finalize();
    let mut secret = [0u8; 16];
    secret.copy_from_slice(&d[..16]);
    OobToken::new(label, secret)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CheckResult {
    pub line: usize,
    pub expectation: String,
    pub detail: String,
}

/// What a finished run leaves behind.
#[derive(Debug, Clone)]
pub struct Report {
    pub seed: u64,
    pub start: u64,
    pub end: u64,
    pub checks: Vec<CheckResult>,
    /// Bus trace, for simulated runs.
    pub trace: Option<Vec<TraceEvent>>,
    pub devices: Vec<DeviceSummary>,
}

#[derive(Debug, Clone)]
pub struct DeviceSummary {
    pub label: String,
    pub role: Role,
    pub name: Option<Name>,
    pub actuations: Vec<(u64, String, Name)>,
    /// (receive time relative to start, wire name)
    pub deliveries: Vec<(u64, Name)>,
    pub rejections: BTreeMap<Reject, u64>,
    pub audit: Vec<(u64, String)>,
    pub errors: Vec<(u64, String)>,
}

impl Report {
    pub fn trace_text(&self) -> Option<String> {
        self.trace.as_ref().map(|t| t.iter().map(|e| format!("{e}\n")).collect())
    }

    pub fn device(&self, label: &str) -> Option<&DeviceSummary> {
        self.devices.iter().find(|d| d.label == label)
    }
}

impl fmt::Display for Report {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "seed {} ran {} ms", self.seed, self.end - self.start)?;
        for d in &self.devices {
            let name = d.name.as_ref().map_or("-".to_string(), Name::to_string);
            writeln!(
                f,
                "  {:<10} {:<10} {name}: {} actuations, {} deliveries, {} rejections",
                d.label,
                d.role,
                d.actuations.len(),
                d.deliveries.len(),
                d.rejections.values().sum::<u64>()
            )?;
            for (t, e) in &d.errors {
                writeln!(f, "    +{t} ms: {e}")?;
            }
        }
        for c in &self.checks {
            writeln!(f, "  ok  line {}: {} ({})", c.line, c.expectation, c.detail)?;
        }
        Ok(())
    }
}

/// Drives one script over a network.
pub struct Runner {
    net: Box<dyn Network<Node = Member>>,
    script: Script,
    home: Name,
    start: u64,
    labels: BTreeMap<String, usize>,
    controller: Option<usize>,
    next_face: u32,
    queue: BTreeMap<(u64, usize), (usize, Action)>,
    queued: usize,
    checks: Vec<CheckResult>,
    skip_kill: bool,
}

impl Runner {
    /// Simulated bus over virtual time.
    pub fn simulated(script: Script) -> Self {
        let net: Simulation<Member> = Simulation::new(SimBus::new(script.bus_config()), SIM_START);
        Self::with_network(script, Box::new(net)).expect("simulated add cannot fail")
    }

    /// Any network; the controller joins it at once.
    pub fn with_network(script: Script, mut net: Box<dyn Network<Node = Member>>) -> Result<Self, ScenarioError> {
        let start = net.now();
        let mut rng = ChaCha20Rng::seed_from_u64(script.seed);
        let home = script.home.clone();
        let state = HomeState::init_with_prefix(home.clone(), start, script.key_lifetime_ms, &mut rng)
            .map_err(|e| ScenarioError::Step { line: 0, msg: format!("home setup: {e}") })?;
        let controller = Controller::new(state, CONTROLLER_FACE, script.seed, start);
        let idx = net.add(Member::Controller(Box::new(controller)))?;
        Ok(Self {
            net,
            script,
            home,
            start,
            labels: BTreeMap::new(),
            controller: Some(idx),
            next_face: CONTROLLER_FACE + 1,
            queue: BTreeMap::new(),
            queued: 0,
            checks: Vec::new(),
            skip_kill: false,
        })
    }

    /// Ignores `kill-controller`; the reference run for outage comparison.
    pub fn keep_controller(mut self) -> Self {
        self.skip_kill = true;
        self
    }

    pub fn now(&self) -> u64 {
        self.net.now()
    }

    pub fn elapsed(&self) -> u64 {
        self.now().saturating_sub(self.start)
    }

    pub fn controller(&mut self) -> Option<&mut Controller> {
        let i = self.controller?;
        self.net.node_mut(i).controller_mut()
    }

    pub fn device(&self, label: &str) -> Option<&Device> {
        self.labels.get(label).and_then(|&i| self.net.node(i).device())
    }

    pub fn device_mut(&mut self, label: &str) -> Option<&mut Device> {
        let i = *self.labels.get(label)?;
        self.net.node_mut(i).device_mut()
    }

    fn step_err(line: usize, msg: impl Into<String>) -> ScenarioError {
        ScenarioError::Step { line, msg: msg.into() }
    }

    fn excerpt(&self) -> String {
        match self.net.trace() {
            Some(t) => {
                let from = t.len().saturating_sub(EXCERPT_LINES);
                t[from..].iter().map(|e| format!("{e}\n")).collect()
            }
            None => "(no trace on this bus)\n".into(),
        }
    }

    fn fail(&self, line: usize, expectation: String, detail: String) -> ScenarioError {
        ScenarioError::AssertionFailed { line, expectation, detail, excerpt: self.excerpt() }
    }

    fn advance(&mut self, until: u64) -> Result<(), ScenarioError> {
        loop {
            let Some((&(t, seq), _)) = self.queue.iter().next() else { break };
            if t > until {
                break;
            }
            let (line, action) = self.queue.remove(&(t, seq)).expect("present");
            self.net.run_until(self.start + t);
            self.perform(line, action)?;
        }
        self.net.run_until(self.start + until);
        Ok(())
    }

    fn perform(&mut self, line: usize, action: Action) -> Result<(), ScenarioError> {
        let now = self.now();
        let home = self.home.clone();
        let dev = |r: &mut Runner, label: &str| -> Result<usize, ScenarioError> {
            r.labels.get(label).copied().ok_or_else(|| Self::step_err(line, format!("no device {label:?}")))
        };
        match action {
            Action::Publish { label, topic, payload } => {
                let i = dev(self, &label)?;
                let d = self.net.node_mut(i).device_mut().expect("device");
                if let Err(e) = d.entity.publish_content(&home.append(&topic), payload.as_bytes(), now) {
                    d.errors.push((now, e));
                }
            }
            Action::Command { label, topic, payload } => {
                let i = dev(self, &label)?;
                let d = self.net.node_mut(i).device_mut().expect("device");
                d.command(&home.append(&topic), payload.as_bytes(), now);
            }
            Action::ControllerCommand { topic, payload } => {
                let c = self.controller().ok_or_else(|| Self::step_err(line, "controller is down"))?;
                c.issue_command(&home.append(&topic), payload.as_bytes(), now)
                    .map_err(|e| Self::step_err(line, format!("controller command: {e}")))?;
            }
            Action::Touch(label) => {
                let i = dev(self, &label)?;
                self.net.node_mut(i).device_mut().expect("device").touch(now);
            }
            Action::Set { label, what, value } => {
                let i = dev(self, &label)?;
                let d = self.net.node_mut(i).device_mut().expect("device");
                match what {
                    Setting::Reading => d.reading = value,
                    Setting::Setpoint => d.setpoint = value,
                    Setting::Period => d.period_ms = value as u64,
                }
            }
            Action::Subscribe { label, topic } => {
                let i = dev(self, &label)?;
                let d = self.net.node_mut(i).device_mut().expect("device");
                d.entity.subscribe_content(home.append(&topic), now);
            }
            Action::Compromise(label) => {
                let i = dev(self, &label)?;
                self.net.node_mut(i).device_mut().expect("device").compromise();
            }
            Action::KillController => {
                if self.skip_kill {
                    return Ok(());
                }
                let i = self.controller.take().ok_or_else(|| Self::step_err(line, "controller already down"))?;
                let mut c = self.net.remove(i);
                if let Some(c) = c.controller_mut() {
                    c.close();
                }
                for idx in self.labels.values_mut() {
                    if *idx > i {
                        *idx -= 1;
                    }
                }
                log::info!("controller stopped at +{} ms", now - self.start);
            }
            Action::RuleAdd(r) => {
                let c = self.controller().ok_or_else(|| Self::step_err(line, "controller is down"))?;
                c.add_rule(r, None, now).map_err(|e| Self::step_err(line, format!("rule add: {e}")))?;
            }
            Action::RuleRemove(r) => {
                let c = self.controller().ok_or_else(|| Self::step_err(line, "controller is down"))?;
                let text = r.to_string();
                let id = c
                    .state
                    .rules
                    .iter()
                    .find(|e| e.rule.to_string() == text)
                    .map(|e| e.id)
                    .ok_or_else(|| Self::step_err(line, format!("no rule {text:?}")))?;
                c.remove_rule(id, None, now).map_err(|e| Self::step_err(line, format!("rule rm: {e}")))?;
            }
            Action::Rotate(scope) => {
                let c = self.controller().ok_or_else(|| Self::step_err(line, "controller is down"))?;
                c.rotate_key(&home.append(&scope), now).map_err(|e| Self::step_err(line, format!("rotate: {e}")))?;
            }
        }
        Ok(())
    }

    fn spawn(&mut self, line: usize, label: &str, role: Role, location: &str) -> Result<(), ScenarioError> {
        if self.labels.contains_key(label) {
            return Err(Self::step_err(line, format!("label {label:?} already spawned")));
        }
        let token = scripted_token(self.script.seed, label);
        let now = self.now();
        let c = self.controller().ok_or_else(|| Self::step_err(line, "controller is down"))?;
        c.approve(token.clone(), role.service(), location, now)
            .map_err(|e| Self::step_err(line, format!("approve {label}: {e}")))?;
        let face = self.next_face;
        self.next_face += 1;
        let cfg = EntityConfig::new(face, self.script.seed.wrapping_mul(1000).wrapping_add(face as u64));
        let idx = self.net.add(Member::Device(Box::new(Device::new(label, role, token, cfg))))?;
        self.labels.insert(label.to_string(), idx);
        Ok(())
    }

    fn bootstrap(&mut self, line: usize, timeout_ms: u64) -> Result<(), ScenarioError> {
        let deadline = self.elapsed() + timeout_ms;
        loop {
            let pending: Vec<String> = self
                .labels
                .iter()
                .filter(|(_, &i)| self.net.node(i).device().is_some_and(|d| !d.entity.is_bootstrapped()))
                .map(|(l, _)| l.clone())
                .collect();
            if pending.is_empty() {
                return Ok(());
            }
            if self.elapsed() >= deadline {
                return Err(self.fail(line, "bootstrap".into(), format!("not bootstrapped: {}", pending.join(", "))));
            }
            let next = (self.elapsed() + 250).min(deadline);
            self.advance(next)?;
        }
    }

    fn check(&mut self, line: usize, e: &Expectation) -> Result<(), ScenarioError> {
        let label = match e {
            Expectation::Actuated { label, .. }
            | Expectation::NotActuated { label, .. }
            | Expectation::Delivered { label, .. }
            | Expectation::KeyRenewed { label, .. }
            | Expectation::NotDelivered { label, .. }
            | Expectation::Rejected { label, .. }
            | Expectation::Bootstrapped(label)
            | Expectation::NotBootstrapped(label)
            | Expectation::PublishErrors { label, .. } => label,
        };
        let text = format!("{e:?}");
        let d = self.device(label).ok_or_else(|| Self::step_err(line, format!("no device {label:?}")))?;
        let (ok, detail) = match e {
            Expectation::Actuated { action, count, .. } => {
                let n = d.actuations.iter().filter(|a| &a.action == action).count();
                (count.map_or(n >= 1, |c| n == c), format!("{n} {action} actuations"))
            }
            Expectation::NotActuated { action, .. } => {
                let n = d.actuations.iter().filter(|a| action.as_ref().is_none_or(|x| &a.action == x)).count();
                (n == 0, format!("{n} matching actuations"))
            }
            Expectation::Delivered { min, since, .. } => {
                let from = self.start + since.unwrap_or(0);
                let n = d.received.iter().filter(|r| r.received_at >= from).count();
                (n >= *min, format!("{n} deliveries"))
            }
            Expectation::NotDelivered { since, .. } => {
                let from = self.start + since.unwrap_or(0);
                let n = d.received.iter().filter(|r| r.received_at >= from).count();
                (n == 0, format!("{n} deliveries"))
            }
            Expectation::KeyRenewed { after, .. } => {
                let from = self.start + after;
                let fresh = d.received.iter().filter(|r| r.received_at >= from && r.key.timestamp().is_some_and(|v| v >= from));
                let n = fresh.count();
                (n >= 1, format!("{n} deliveries under keys activated after +{after} ms"))
            }
            Expectation::Rejected { reason, min, .. } => {
                let n = d.entity.stats.rejected(*reason);
                (n >= *min, format!("{n} {} rejections", reason.as_str()))
            }
            Expectation::Bootstrapped(_) => (d.entity.is_bootstrapped(), format!("{:?}", d.entity.boot_state())),
            Expectation::NotBootstrapped(_) => (!d.entity.is_bootstrapped(), format!("{:?}", d.entity.boot_state())),
            Expectation::PublishErrors { count, .. } => {
                let n = d.errors.len();
                (n == *count, format!("{n} publish errors"))
            }
        };
        if !ok {
            return Err(self.fail(line, text, detail));
        }
        self.checks.push(CheckResult { line, expectation: text, detail });
        Ok(())
    }

    /// Runs every step, then asserts the audit invariant on every delivery.
    pub fn run(mut self) -> Result<Report, ScenarioError> {
        let steps = self.script.steps.clone();
        for (line, step) in steps {
            match step {
                Step::Spawn { label, role, location } => self.spawn(line, &label, role, &location)?,
                Step::Tap(label) => {
                    let face = self.next_face;
                    self.next_face += 1;
                    let idx = self.net.add(Member::Tap(Tap::new(face)))?;
                    self.labels.insert(label, idx);
                }
                Step::Bootstrap { timeout_ms } => self.bootstrap(line, timeout_ms)?,
                Step::Rule(r) => {
                    let now = self.now();
                    let c = self.controller().ok_or_else(|| Self::step_err(line, "controller is down"))?;
                    c.add_rule(r, None, now).map_err(|e| Self::step_err(line, format!("rule: {e}")))?;
                }
                Step::At { at, action } => {
                    self.queued += 1;
                    self.queue.insert((at, self.queued), (line, action));
                }
                Step::Run(until) => self.advance(until)?,
                Step::Expect(e) => self.check(line, &e)?,
            }
        }
        for (label, &i) in &self.labels {
            if let Some(v) = self.net.node(i).device().and_then(|d| d.audit_violations.first()) {
                return Err(self.fail(0, format!("audit invariant for {label}"), v.clone()));
            }
        }
        Ok(self.report())
    }

    fn report(&self) -> Report {
        let devices = self
            .labels
            .iter()
            .filter_map(|(label, &i)| {
                let d = self.net.node(i).device()?;
                Some(DeviceSummary {
                    label: label.clone(),
                    role: d.role,
                    name: d.entity.name().cloned(),
                    actuations: d.actuations.iter().map(|a| (a.at - self.start, a.action.clone(), a.issuer.clone())).collect(),
                    deliveries: d.received.iter().map(|r| (r.received_at - self.start, r.name.clone())).collect(),
                    rejections: d.entity.stats.rejected.clone(),
                    audit: d
                        .entity
                        .audit()
                        .iter()
                        .map(|a| (a.at - self.start, format!("{} {:?} {:?}", a.name, a.kind, a.outcome)))
                        .collect(),
                    errors: d.errors.iter().map(|(t, e)| (t - self.start, e.to_string())).collect(),
                })
            })
            .collect();
        Report {
            seed: self.script.seed,
            start: self.start,
            end: self.now(),
            checks: self.checks.clone(),
            trace: self.net.trace().map(<[TraceEvent]>::to_vec),
            devices,
        }
    }
}

/// Parses and runs a script on the simulated bus.
pub fn run_scenario(text: &str, seed: Option<u64>) -> Result<Report, ScenarioError> {
    let mut script: Script = text.parse()?;
    if let Some(s) = seed {
        script.seed = s;
    }
    Runner::simulated(script).run()
}

/// Data-plane view of a trace after `from`: content and command packets on
/// faces other than the controller's.
pub fn data_plane(trace: &[TraceEvent], from: u64) -> Vec<TraceEvent> {
    trace
        .iter()
        .filter(|e| e.time >= from && e.face != CONTROLLER_FACE)
        .filter(|e| e.name.position(naming::CONTENT).is_some() || e.name.position(naming::CMD).is_some())
        .cloned()
        .collect()
}

#[derive(Debug, Clone)]
pub struct OutageComparison {
    /// Offset at which the controller was stopped.
    pub killed_at: u64,
    pub with_controller: Report,
    pub without_controller: Report,
    /// Index and pair of the first differing data-plane event.
    pub first_difference: Option<(usize, Option<TraceEvent>, Option<TraceEvent>)>,
    pub compared_events: usize,
    /// Per device: deliveries and rejections after the stop, both runs.
    pub device_differences: Vec<String>,
}

impl OutageComparison {
    pub fn identical(&self) -> bool {
        self.first_difference.is_none() && self.device_differences.is_empty()
    }
}

/// Runs a script containing `kill-controller` twice, once honoring it and
/// once keeping the controller alive, and compares what the devices saw
/// after the stop.
pub fn compare_outage(text: &str, seed: Option<u64>) -> Result<OutageComparison, ScenarioError> {
    let mut script: Script = text.parse()?;
    if let Some(s) = seed {
        script.seed = s;
    }
    let killed_at = script
        .kill_time()
        .ok_or_else(|| ScenarioError::Parse { line: 0, msg: "script never stops the controller".into() })?;
    let without_controller = Runner::simulated(script.clone()).run()?;
    let with_controller = Runner::simulated(script).keep_controller().run()?;
    let from = without_controller.start + killed_at;
    let a = data_plane(with_controller.trace.as_deref().unwrap_or_default(), from);
    let b = data_plane(without_controller.trace.as_deref().unwrap_or_default(), from);
    let first_difference = (0..a.len().max(b.len()))
        .find(|&i| a.get(i) != b.get(i))
        .map(|i| (i, a.get(i).cloned(), b.get(i).cloned()));

    let mut device_differences = Vec::new();
    for x in &with_controller.devices {
        let Some(y) = without_controller.device(&x.label) else {
            device_differences.push(format!("{}: missing in outage run", x.label));
            continue;
        };
        let after = |d: &DeviceSummary| {
            (
                d.deliveries.iter().filter(|(t, _)| *t >= killed_at).cloned().collect::<Vec<_>>(),
                d.actuations.iter().filter(|(t, _, _)| *t >= killed_at).cloned().collect::<Vec<_>>(),
                d.audit
                    .iter()
                    .filter(|(t, s)| *t >= killed_at && s.contains("Rejected"))
                    .cloned()
                    .collect::<Vec<_>>(),
            )
        };
        let (xa, ya) = (after(x), after(y));
        if xa.0 != ya.0 {
            device_differences.push(format!("{}: deliveries differ", x.label));
        }
        if xa.1 != ya.1 {
            device_differences.push(format!("{}: actuations differ", x.label));
        }
        if xa.2 != ya.2 {
            device_differences.push(format!("{}: rejections differ", x.label));
        }
    }
    Ok(OutageComparison {
        killed_at,
        with_controller,
        without_controller,
        first_difference,
        compared_events: a.len(),
        device_differences,
    })
}
