//! The controller event loop. One thread owns the network (and with it the
//! controller and any co-hosted devices); everything else talks to it
//! through [`ServiceHandle`]: operations go in over a channel and get a
//! reply each, state comes out as a watched [`Snapshot`] and a broadcast
//! of audit events. The state file is rewritten after anything that logs
//! an event.

use std::path::PathBuf;
use std::sync::mpsc;
use std::thread::JoinHandle;
use std::time::Duration;

use serde::Serialize;
use sovereign_core::bootstrap::OobToken;
use sovereign_core::controller::{Controller, ControllerError};
use sovereign_core::name::Name;
use sovereign_core::policy::RuleForm;
use tokio::sync::{broadcast, oneshot, watch};

use crate::devices::Member;
use crate::network::Network;
use crate::state_file::{self, EventFile, StateError};
use crate::udp::wall_ms;

const TICK: Duration = Duration::from_millis(20);
const RECENT_EVENTS: usize = 256;
const PERIODIC_SAVE_MS: u64 = 60_000;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EntityView {
    pub name: String,
    pub label: String,
    pub service: String,
    pub location: String,
    pub bootstrapped_at: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RuleView {
    pub id: u64,
    pub rule: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ApprovalView {
    pub label: String,
    pub service: String,
    pub location: String,
    pub approved_at: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PendingView {
    pub label: String,
    pub first_seen: u64,
    pub last_seen: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScopeView {
    pub scope: String,
    pub versions: Vec<u64>,
}

/// What the API and CLI show of the home.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Snapshot {
    pub home: String,
    pub controller: String,
    pub policy_version: u64,
    pub entities: Vec<EntityView>,
    pub rules: Vec<RuleView>,
    pub approvals: Vec<ApprovalView>,
    pub pending: Vec<PendingView>,
    pub key_scopes: Vec<ScopeView>,
    /// The newest events, oldest first.
    pub recent_events: Vec<EventFile>,
}

impl Snapshot {
    fn of(c: &Controller) -> Self {
        let s = &c.state;
        let skip = s.events.len().saturating_sub(RECENT_EVENTS);
        Self {
            home: s.home.to_uri(),
            controller: s.controller_name().to_uri(),
            policy_version: s.policy_version,
            entities: s
                .registry
                .values()
                .map(|r| EntityView {
                    name: r.name.to_uri(),
                    label: r.label.clone(),
                    service: r.service.clone(),
                    location: r.location.clone(),
                    bootstrapped_at: r.bootstrapped_at,
                })
                .collect(),
            rules: s.rules.iter().map(|r| RuleView { id: r.id, rule: r.rule.to_string() }).collect(),
            approvals: s
                .approvals
                .iter()
                .map(|(label, a)| ApprovalView {
                    label: label.clone(),
                    service: a.service.clone(),
                    location: a.location.clone(),
                    approved_at: a.approved_at,
                })
                .collect(),
            pending: c
                .pending_hellos()
                .map(|p| PendingView { label: p.label.clone(), first_seen: p.first_seen, last_seen: p.last_seen })
                .collect(),
            key_scopes: s
                .keys
                .scopes()
                .map(|scope| ScopeView {
                    scope: scope.to_uri(),
                    versions: s.keys.versions(scope).iter().map(|k| k.version).collect(),
                })
                .collect(),
            recent_events: s.events[skip..].iter().map(EventFile::from).collect(),
        }
    }
}

#[derive(Debug, Clone)]
pub enum Op {
    Approve { label: String, token: String, service: String, location: String },
    AddRule { rule: String, expected_version: Option<u64> },
    RemoveRule { id: u64, expected_version: Option<u64> },
    /// `scope` relative to the home, e.g. `TEMP/bedroom`.
    RotateKey { scope: String },
    /// `topic` relative to the home or a full name.
    Command { topic: String, payload: Vec<u8> },
    Shutdown,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(untagged)]
pub enum Reply {
    Done {},
    Rule { id: u64, policy_version: u64 },
    Removed { policy_version: u64 },
    Command { name: String },
}

#[derive(Debug, thiserror::Error)]
pub enum ServiceError {
    #[error(transparent)]
    Controller(#[from] ControllerError),
    #[error("{0}")]
    BadRequest(String),
    #[error("saving state: {0}")]
    State(#[from] StateError),
    #[error("controller service has stopped")]
    Stopped,
}

struct Request {
    op: Op,
    reply: oneshot::Sender<Result<Reply, ServiceError>>,
}

/// Where and how to persist the state after changes.
#[derive(Debug, Clone)]
pub struct Persist {
    pub path: PathBuf,
    pub passphrase: String,
    pub kdf_iterations: u32,
}

#[derive(Clone)]
pub struct ServiceHandle {
    tx: mpsc::Sender<Request>,
    snapshot: watch::Receiver<Snapshot>,
    events: broadcast::Sender<EventFile>,
}

impl ServiceHandle {
    pub async fn call(&self, op: Op) -> Result<Reply, ServiceError> {
        let (reply, rx) = oneshot::channel();
        self.tx.send(Request { op, reply }).map_err(|_| ServiceError::Stopped)?;
        rx.await.map_err(|_| ServiceError::Stopped)?
    }

    /// For callers outside an async runtime.
    pub fn call_blocking(&self, op: Op) -> Result<Reply, ServiceError> {
        let (reply, rx) = oneshot::channel();
        self.tx.send(Request { op, reply }).map_err(|_| ServiceError::Stopped)?;
        rx.blocking_recv().map_err(|_| ServiceError::Stopped)?
    }

    pub fn snapshot(&self) -> Snapshot {
        self.snapshot.borrow().clone()
    }

    pub fn watch(&self) -> watch::Receiver<Snapshot> {
        self.snapshot.clone()
    }

    pub fn subscribe(&self) -> broadcast::Receiver<EventFile> {
        self.events.subscribe()
    }
}

pub struct Service {
    pub handle: ServiceHandle,
    thread: Option<JoinHandle<Box<dyn Network<Node = Member> + Send>>>,
}

impl Service {
    /// Starts the loop on `net`, whose node `controller` must be the
    /// controller. Nodes are advanced to the wall clock, so a simulated
    /// network should start at [`wall_ms`].
    pub fn spawn(net: Box<dyn Network<Node = Member> + Send>, controller: usize, persist: Option<Persist>) -> Self {
        let first = Snapshot::of(net.node(controller).controller().expect("controller node"));
        let (snap_tx, snapshot) = watch::channel(first);
        let (events, _) = broadcast::channel(1024);
        let (tx, rx) = mpsc::channel();
        let ev = events.clone();
        let thread = std::thread::Builder::new()
            .name("controller".into())
            .spawn(move || Loop { net, controller, persist, snap_tx, events: ev, rx }.run())
            .expect("spawn controller thread");
        Self { handle: ServiceHandle { tx, snapshot, events }, thread: Some(thread) }
    }

    /// Stops the loop (saving once more) and hands the network back.
    pub fn shutdown(mut self) -> Result<Box<dyn Network<Node = Member> + Send>, ServiceError> {
        let r = self.handle.call_blocking(Op::Shutdown);
        let net = self.thread.take().expect("joined once").join().map_err(|_| ServiceError::Stopped)?;
        r.map(|_| net)
    }
}

struct Loop {
    net: Box<dyn Network<Node = Member> + Send>,
    controller: usize,
    persist: Option<Persist>,
    snap_tx: watch::Sender<Snapshot>,
    events: broadcast::Sender<EventFile>,
    rx: mpsc::Receiver<Request>,
}

fn relative(home: &Name, s: &str) -> Result<Name, ServiceError> {
    let s = s.trim();
    if s.starts_with('/') {
        let n: Name = s.parse().map_err(|e| ServiceError::BadRequest(format!("bad name {s:?}: {e}")))?;
        if n.is_empty() {
            return Err(ServiceError::BadRequest("empty name".into()));
        }
        return Ok(n);
    }
    let mut n = home.clone();
    for part in s.split('/').filter(|p| !p.is_empty()) {
        let c: Name = format!("/{part}").parse().map_err(|e| ServiceError::BadRequest(format!("bad name {s:?}: {e}")))?;
        n = n.append(&c);
    }
    if n.len() == home.len() {
        return Err(ServiceError::BadRequest("empty name".into()));
    }
    Ok(n)
}

impl Loop {
    fn controller(&mut self) -> &mut Controller {
        self.net.node_mut(self.controller).controller_mut().expect("controller node")
    }

    fn apply(&mut self, op: Op, now: u64) -> Result<Reply, ServiceError> {
        match op {
            Op::Approve { label, token, service, location } => {
                let token = OobToken::from_hex(label, &token)
                    .ok_or_else(|| ServiceError::BadRequest("token must be 32 hex digits".into()))?;
                self.controller().approve(token, &service, &location, now)?;
                Ok(Reply::Done {})
            }
            Op::AddRule { rule, expected_version } => {
                let rule: RuleForm = rule.parse().map_err(|e| ServiceError::BadRequest(format!("{e}")))?;
                let (id, policy_version) = self.controller().add_rule(rule, expected_version, now)?;
                Ok(Reply::Rule { id, policy_version })
            }
            Op::RemoveRule { id, expected_version } => {
                let policy_version = self.controller().remove_rule(id, expected_version, now)?;
                Ok(Reply::Removed { policy_version })
            }
            Op::RotateKey { scope } => {
                let home = self.controller().home().clone();
                let scope = relative(&home, &scope)?;
                self.controller().rotate_key(&scope, now)?;
                Ok(Reply::Done {})
            }
            Op::Command { topic, payload } => {
                let home = self.controller().home().clone();
                let topic = relative(&home, &topic)?;
                let p = self.controller().issue_command(&topic, &payload, now)?;
                Ok(Reply::Command { name: p.clear_name.to_uri() })
            }
            Op::Shutdown => Ok(Reply::Done {}),
        }
    }

    fn save(&mut self) -> Result<(), ServiceError> {
        if let Some(p) = self.persist.clone() {
            state_file::save(&p.path, &self.controller().state, &p.passphrase, p.kdf_iterations)?;
        }
        Ok(())
    }

    fn run(mut self) -> Box<dyn Network<Node = Member> + Send> {
        let mut seen = self.controller().state.next_event_seq;
        let mut last_save = wall_ms();
        let mut dirty = false;
        loop {
            let first = match self.rx.recv_timeout(TICK) {
                Ok(r) => Some(r),
                Err(mpsc::RecvTimeoutError::Timeout) => None,
                Err(mpsc::RecvTimeoutError::Disconnected) => break,
            };
            let now = wall_ms();
            self.net.run_until(now);
            let mut stop = None;
            let mut batch: Vec<Request> = first.into_iter().collect();
            batch.extend(self.rx.try_iter());
            let mut replies = Vec::new();
            for req in batch {
                if matches!(req.op, Op::Shutdown) {
                    stop = Some(req.reply);
                    break;
                }
                let r = self.apply(req.op, now);
                replies.push((req.reply, r));
            }
            self.net.run_until(wall_ms());

            let snap = Snapshot::of(self.controller());
            self.snap_tx.send_if_modified(|old| {
                let changed = *old != snap;
                if changed {
                    *old = snap;
                }
                changed
            });
            let c = self.net.node(self.controller).controller().expect("controller node");
            let next = c.state.next_event_seq;
            if next != seen {
                for e in c.state.events.iter().filter(|e| e.seq >= seen) {
                    let _ = self.events.send(EventFile::from(e));
                }
                seen = next;
                dirty = true;
            }
            // Only now, so a caller reading the snapshot sees its own change.
            for (tx, r) in replies {
                let _ = tx.send(r);
            }
            if let Some(reply) = stop {
                let _ = reply.send(self.save().map(|_| Reply::Done {}));
                return self.net;
            }
            let now = wall_ms();
            if dirty || now.saturating_sub(last_save) >= PERIODIC_SAVE_MS {
                if let Err(e) = self.save() {
                    log::error!("{e}");
                }
                dirty = false;
                last_save = now;
            }
        }
        if let Err(e) = self.save() {
            log::error!("{e}");
        }
        self.net
    }
}
