//! The home controller: trust anchor, entity registry, rules, key
//! provisioning and the bootstrap responder.
//!
//! [`HomeState`] is the durable part. [`Controller`] adds the runtime: its
//! own entity (`<home>/AUTO/controller`) on the bus, handshake sessions and
//! the record of what has been sealed and published.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use rand_chacha::ChaCha20Rng;
use rand_core::{CryptoRngCore, SeedableRng};

use crate::bootstrap::{self, BootError, Grant, OobToken, Welcome, NONCE_LEN};
use crate::crypto::{self, Certificate, Keypair, DEFAULT_ANCHOR_VALIDITY_MS, DEFAULT_ENTITY_VALIDITY_MS};
use crate::entity::{Entity, EntityConfig, Outcome, Provision, PubSubError, Published};
use crate::keystore::{self, KeyStore};
use crate::name::Name;
use crate::naming::{self, KeyKind, NamingContext, NamingError};
use crate::policy::{self, ObjectScope, PolicyError, PolicySet, ResourceKind, RuleForm, SubjectScope, Verb};
use crate::tlv::{Data, Interest};
use crate::transport::{FaceId, Node};

pub const CONTROLLER_SERVICE: &str = "AUTO";
pub const CONTROLLER_ID: &str = "controller";
/// Service of the in-network store entity; it gets no default rules.
pub const STORE_SERVICE: &str = "REPO";
const MAX_EVENTS: usize = 10_000;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ControllerError {
    #[error("policy version is {current}, request expected {expected}")]
    VersionConflict { expected: u64, current: u64 },
    #[error("no rule with id {0}")]
    NoSuchRule(u64),
    #[error("no key scope {0}")]
    NoSuchScope(Name),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Naming(#[from] NamingError),
    #[error(transparent)]
    Crypto(#[from] crypto::CryptoError),
    #[error(transparent)]
    PubSub(#[from] PubSubError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum EventKind {
    Init,
    BootstrapPending,
    BootstrapApproved,
    TokenMismatch,
    Bootstrapped,
    RuleAdded,
    RuleRemoved,
    KeyRotated,
    KeyRequestDenied,
    Command,
    Rejected,
}

impl EventKind {
    pub const ALL: [EventKind; 11] = [
        EventKind::Init,
        EventKind::BootstrapPending,
        EventKind::BootstrapApproved,
        EventKind::TokenMismatch,
        EventKind::Bootstrapped,
        EventKind::RuleAdded,
        EventKind::RuleRemoved,
        EventKind::KeyRotated,
        EventKind::KeyRequestDenied,
        EventKind::Command,
        EventKind::Rejected,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            EventKind::Init => "init",
            EventKind::BootstrapPending => "bootstrap-pending",
            EventKind::BootstrapApproved => "bootstrap-approved",
            EventKind::TokenMismatch => "token-mismatch",
            EventKind::Bootstrapped => "bootstrapped",
            EventKind::RuleAdded => "rule-added",
            EventKind::RuleRemoved => "rule-removed",
            EventKind::KeyRotated => "key-rotated",
            EventKind::KeyRequestDenied => "key-request-denied",
            EventKind::Command => "command",
            EventKind::Rejected => "rejected",
        }
    }
}

impl fmt::Display for EventKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for EventKind {
    type Err = ();

    fn from_str(s: &str) -> Result<Self, ()> {
        Self::ALL.into_iter().find(|k| k.as_str() == s).ok_or(())
    }
}

/// An audit record: bootstraps, policy changes, key events, rejections.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AuditEvent {
    pub seq: u64,
    pub ts: u64,
    pub kind: EventKind,
    pub subject: String,
    pub object: String,
    pub outcome: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EntityRecord {
    pub name: Name,
    pub label: String,
    pub service: String,
    pub location: String,
    pub certificate: Certificate,
    pub pairwise: [u8; 32],
    pub bootstrapped_at: u64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Approval {
    pub token: OobToken,
    pub service: String,
    pub location: String,
    pub approved_at: u64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RuleEntry {
    pub id: u64,
    pub rule: RuleForm,
}

/// Everything the controller persists.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HomeState {
    pub home: Name,
    pub anchor: Keypair,
    pub anchor_cert: Certificate,
    pub controller_identity: Keypair,
    pub controller_cert: Certificate,
    pub registry: BTreeMap<Name, EntityRecord>,
    pub approvals: BTreeMap<String, Approval>,
    pub rules: Vec<RuleEntry>,
    pub next_rule_id: u64,
    pub policy_version: u64,
    pub services: Vec<String>,
    pub keys: KeyStore,
    pub events: Vec<AuditEvent>,
    pub next_event_seq: u64,
}

impl HomeState {
    /// A new home named `<label>-<4 hex>` with a fresh trust anchor, the
    /// controller's identity, and default rules letting the controller
    /// command every known service.
    pub fn init(label: &str, now: u64, key_lifetime_ms: u64, rng: &mut impl CryptoRngCore) -> Result<Self, ControllerError> {
        let ctx = NamingContext::with_random_suffix(label, rng)?;
        Self::init_with_prefix(ctx.home_prefix().clone(), now, key_lifetime_ms, rng)
    }

    pub fn init_with_prefix(home: Name, now: u64, key_lifetime_ms: u64, rng: &mut impl CryptoRngCore) -> Result<Self, ControllerError> {
        let anchor = Keypair::generate(rng);
        let anchor_cert = crypto::issue_certificate(&anchor, &home, &home, &anchor.public_bytes(), now, DEFAULT_ANCHOR_VALIDITY_MS)?;
        let controller_identity = Keypair::generate(rng);
        let controller_name = home.with(CONTROLLER_SERVICE).with(CONTROLLER_ID);
        let controller_cert = crypto::issue_certificate(
            &anchor,
            &home,
            &controller_name,
            &controller_identity.public_bytes(),
            now,
            DEFAULT_ANCHOR_VALIDITY_MS,
        )?;
        let mut s = Self {
            home,
            anchor,
            anchor_cert,
            controller_identity,
            controller_cert,
            registry: BTreeMap::new(),
            approvals: BTreeMap::new(),
            rules: Vec::new(),
            next_rule_id: 1,
            policy_version: 1,
            services: policy::DEFAULT_SERVICES.iter().map(|s| s.to_string()).collect(),
            keys: KeyStore::new(key_lifetime_ms),
            events: Vec::new(),
            next_event_seq: 1,
        };
        for svc in policy::DEFAULT_SERVICES {
            if svc != CONTROLLER_SERVICE && svc != STORE_SERVICE {
                let rule = RuleForm {
                    subject: SubjectScope {
                        service: Some(CONTROLLER_SERVICE.into()),
                        location: Some(CONTROLLER_ID.into()),
                        entity: None,
                    },
                    verb: Verb::Produce,
                    object: ObjectScope { service: svc.into(), kind: ResourceKind::Cmd, location: None },
                };
                s.push_rule(rule);
            }
        }
        let home_uri = s.home.to_uri();
        s.log(now, EventKind::Init, &home_uri, "", "ok");
        Ok(s)
    }

    pub fn controller_name(&self) -> Name {
        self.home.with(CONTROLLER_SERVICE).with(CONTROLLER_ID)
    }

    pub fn anchor_key_name(&self) -> Name {
        self.anchor_cert.key_name()
    }

    fn push_rule(&mut self, rule: RuleForm) -> u64 {
        let id = self.next_rule_id;
        self.next_rule_id += 1;
        self.rules.push(RuleEntry { id, rule });
        id
    }

    pub fn log(&mut self, ts: u64, kind: EventKind, subject: &str, object: &str, outcome: &str) {
        let seq = self.next_event_seq;
        self.next_event_seq += 1;
        self.events.push(AuditEvent { seq, ts, kind, subject: subject.into(), object: object.into(), outcome: outcome.into() });
        if self.events.len() > MAX_EVENTS {
            let drop = self.events.len() - MAX_EVENTS;
            self.events.drain(..drop);
        }
    }

    pub fn events_since(&self, seq: u64) -> impl Iterator<Item = &AuditEvent> {
        self.events.iter().filter(move |e| e.seq > seq)
    }

    fn known_services(&self) -> Vec<&str> {
        self.services.iter().map(String::as_str).collect()
    }

    /// The compiled policy set for the current rules.
    pub fn policy_set(&self) -> PolicySet {
        let known = self.known_services();
        let mut all = Vec::new();
        for r in &self.rules {
            // Rules were validated on entry; a rule naming a service that has
            // since been dropped contributes nothing.
            if let Ok(ps) = policy::compile_rule(&self.home, &r.rule, &known) {
                all.extend(ps);
            }
        }
        for (i, p) in all.iter_mut().enumerate() {
            p.serial = i as u64 + 1;
        }
        PolicySet::new(all, self.policy_version)
    }

    /// Key scopes in use: every service with a registered entity or a
    /// rule, and every room named by a located decrypt rule. Scopes are
    /// never dropped once created.
    pub fn needed_scopes(&self) -> BTreeSet<Name> {
        let mut out: BTreeSet<Name> = self.keys.scopes().cloned().collect();
        for r in self.registry.values() {
            out.insert(self.home.with(&r.service));
        }
        for r in &self.rules {
            let svc = self.home.with(&r.rule.object.service);
            if r.rule.verb == Verb::Decrypt {
                if let Some(l) = &r.rule.object.location {
                    out.insert(svc.with(l));
                }
            }
            out.insert(svc);
        }
        out
    }

    /// Who may hold each (scope, kind) under the current policies.
    pub fn authorizations(&self) -> BTreeMap<(Name, KeyKind), BTreeSet<Name>> {
        let set = self.policy_set();
        let mut out = BTreeMap::new();
        for scope in self.needed_scopes() {
            for kind in [KeyKind::Ekey, KeyKind::Dkey] {
                let holders: BTreeSet<Name> = self
                    .registry
                    .keys()
                    .filter(|n| keystore::may_hold(&set, &self.home, n, &scope, kind))
                    .cloned()
                    .collect();
                out.insert((scope.clone(), kind), holders);
            }
        }
        out
    }

    /// Namespaces whose senders `entity` must be able to check. Any
    /// entity may overhear or subscribe to anything in the home, so this is
    /// the whole home: every produce policy, and only its own decrypt ones.
    pub fn watched_by(&self, _set: &PolicySet, _entity: &Name) -> Vec<Name> {
        alloc::vec![self.home.clone()]
    }

    pub fn policy_name_for(&self, entity: &Name) -> Name {
        self.home.with(naming::RULE).append(&entity.suffix_from(self.home.len() + 1))
    }

    fn location_id_taken(&self, location: &str, id: &str, reserved: &BTreeSet<(String, String)>) -> bool {
        reserved.contains(&(location.to_string(), id.to_string()))
            || self.registry.values().any(|r| {
                r.name.len() == self.home.len() + 3 && r.location == location && r.name.last().and_then(|c| c.as_str()) == Some(id)
            })
    }
}

/// One in-progress or recently completed handshake.
#[derive(Debug, Clone)]
struct Session {
    hello: Name,
    welcome: Data,
    assigned: Name,
    nonce: [u8; NONCE_LEN],
    pairwise: [u8; 32],
    grant: Option<Data>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PendingHello {
    pub label: String,
    pub first_seen: u64,
    pub last_seen: u64,
}

pub struct Controller {
    pub state: HomeState,
    entity: Entity,
    rng: ChaCha20Rng,
    sessions: BTreeMap<String, Session>,
    completed: BTreeMap<String, Name>,
    pending: BTreeMap<String, PendingHello>,
    /// Sealed key Data currently published, with the successor it announces.
    sealed: BTreeMap<Name, (Option<u64>, Data)>,
    /// Policy Data currently published per entity.
    published_policy: BTreeMap<Name, Data>,
    published_version: BTreeMap<Name, u64>,
    audit_cursor: usize,
    last_policy_ts: u64,
    last_sync: u64,
    clock: u64,
}

impl Controller {
    pub fn new(state: HomeState, face: FaceId, seed: u64, now: u64) -> Self {
        let cfg = EntityConfig::new(face, seed);
        let prov = Provision {
            identity: state.controller_identity.clone(),
            certificate: state.controller_cert.clone(),
            anchor: state.anchor_cert.clone(),
            policies: state.policy_set(),
            keys: Vec::new(),
        };
        let mut entity = Entity::provisioned(cfg, prov, now);
        let fwd = entity.forwarder_mut();
        let _ = fwd.register_prefix(bootstrap::BOOT_PREFIX.parse().expect("constant"));
        let _ = fwd.register_prefix(state.home.clone());
        let _ = fwd.publish(state.anchor_cert.data().clone(), true, now);
        let completed = state.registry.values().map(|r| (r.label.clone(), r.name.clone())).collect();
        let mut c = Self {
            state,
            entity,
            rng: ChaCha20Rng::seed_from_u64(seed ^ 0xc0de),
            sessions: BTreeMap::new(),
            completed,
            pending: BTreeMap::new(),
            sealed: BTreeMap::new(),
            published_policy: BTreeMap::new(),
            published_version: BTreeMap::new(),
            audit_cursor: 0,
            last_policy_ts: 0,
            last_sync: now,
            clock: now,
        };
        c.sync(now, false);
        c
    }

    pub fn entity(&self) -> &Entity {
        &self.entity
    }

    pub fn entity_mut(&mut self) -> &mut Entity {
        &mut self.entity
    }

    pub fn home(&self) -> &Name {
        &self.state.home
    }

    pub fn pending_hellos(&self) -> impl Iterator<Item = &PendingHello> {
        self.pending.values()
    }

    pub fn sealed_names(&self) -> impl Iterator<Item = &Name> {
        self.sealed.keys()
    }

    pub fn policy_for(&self, entity: &Name) -> Option<&Data> {
        self.published_policy.get(entity)
    }

    pub fn close(&mut self) {
        self.entity.close();
    }

    // ---- operations ----

    /// Approves a device label for bootstrapping with its out-of-band token.
    pub fn approve(&mut self, token: OobToken, service: &str, location: &str, now: u64) -> Result<(), ControllerError> {
        naming::component(service)?;
        naming::component(location)?;
        naming::component(&token.label)?;
        if !self.state.services.iter().any(|s| s == service) {
            self.state.services.push(service.to_string());
        }
        let label = token.label.clone();
        self.state
            .approvals
            .insert(label.clone(), Approval { token, service: service.into(), location: location.into(), approved_at: now });
        self.completed.remove(&label);
        self.state.log(now, EventKind::BootstrapApproved, &label, &alloc::format!("{service}/{location}"), "ok");
        Ok(())
    }

    fn check_version(&self, expected: Option<u64>) -> Result<(), ControllerError> {
        match expected {
            Some(e) if e != self.state.policy_version => {
                Err(ControllerError::VersionConflict { expected: e, current: self.state.policy_version })
            }
            _ => Ok(()),
        }
    }

    /// Adds a rule; returns its id and the new policy version.
    pub fn add_rule(&mut self, rule: RuleForm, expected_version: Option<u64>, now: u64) -> Result<(u64, u64), ControllerError> {
        self.check_version(expected_version)?;
        policy::compile_rule(&self.state.home, &rule, &self.state.known_services())?;
        let text = rule.to_string();
        let id = self.state.push_rule(rule);
        self.state.policy_version += 1;
        self.state.log(now, EventKind::RuleAdded, &id.to_string(), &text, "ok");
        self.sync(now, true);
        Ok((id, self.state.policy_version))
    }

    /// Removes a rule. Scopes where anyone lost a key are rotated so the
    /// loser gets no further versions.
    pub fn remove_rule(&mut self, id: u64, expected_version: Option<u64>, now: u64) -> Result<u64, ControllerError> {
        self.check_version(expected_version)?;
        let pos = self.state.rules.iter().position(|r| r.id == id).ok_or(ControllerError::NoSuchRule(id))?;
        let before = self.state.authorizations();
        let removed = self.state.rules.remove(pos);
        self.state.policy_version += 1;
        self.state.log(now, EventKind::RuleRemoved, &id.to_string(), &removed.rule.to_string(), "ok");
        let after = self.state.authorizations();
        let mut lost: BTreeSet<Name> = BTreeSet::new();
        for ((scope, kind), holders) in &before {
            let now_holders = after.get(&(scope.clone(), *kind));
            if holders.iter().any(|h| !now_holders.is_some_and(|n| n.contains(h))) {
                lost.insert(scope.clone());
            }
        }
        for scope in lost {
            self.rotate_scope(&scope, now);
        }
        self.sync(now, true);
        Ok(self.state.policy_version)
    }

    fn rotate_scope(&mut self, scope: &Name, now: u64) {
        let created = self.state.keys.provision_scope_key(scope, now, &mut self.rng);
        let v = created.first().map_or(0, |k| k.version);
        self.state.log(now, EventKind::KeyRotated, &scope.to_uri(), &alloc::format!("t={v}"), "ok");
    }

    /// Forces a new key version for `scope`, active now.
    pub fn rotate_key(&mut self, scope: &Name, now: u64) -> Result<(), ControllerError> {
        if self.state.keys.versions(scope).is_empty() {
            return Err(ControllerError::NoSuchScope(scope.clone()));
        }
        self.rotate_scope(scope, now);
        self.sync(now, true);
        Ok(())
    }

    /// Publishes a command under the controller's own identity.
    pub fn issue_command(&mut self, topic: &Name, payload: &[u8], now: u64) -> Result<Published, ControllerError> {
        let r = self.entity.publish_command(topic, payload, now);
        let outcome = match &r {
            Ok(_) => "published".to_string(),
            Err(e) => e.to_string(),
        };
        let me = self.state.controller_name().to_uri();
        self.state.log(now, EventKind::Command, &me, &topic.to_uri(), &outcome);
        Ok(r?)
    }

    // ---- keys and policies ----

    /// Brings keys and policy containers in line with the state: creates
    /// due key versions, seals them for every authorized holder, and
    /// publishes per-entity policy sets. With `broadcast`, new Data is also
    /// sent on the bus so holders and the store pick it up unasked.
    fn sync(&mut self, now: u64, broadcast: bool) {
        self.last_sync = self.last_sync.max(now);
        for scope in self.state.needed_scopes() {
            self.state.keys.ensure(&scope, now, &mut self.rng);
        }
        let set = self.state.policy_set();
        let home = self.state.home.clone();
        let me = self.state.controller_name();
        self.entity.set_policies(set.clone());

        let mut live: BTreeSet<Name> = BTreeSet::new();
        let scopes: Vec<Name> = self.state.keys.scopes().cloned().collect();
        for scope in scopes {
            let versions = self.state.keys.versions(&scope).to_vec();
            for kind in [KeyKind::Ekey, KeyKind::Dkey] {
                let key_name = scope.with(kind.as_str());
                let holders: Vec<(Name, [u8; 32])> = self
                    .state
                    .registry
                    .values()
                    .filter(|r| keystore::may_hold(&set, &home, &r.name, &scope, kind))
                    .map(|r| (r.name.clone(), r.pairwise))
                    .collect();
                let mine = keystore::may_hold(&set, &home, &me, &scope, kind);
                if !mine {
                    self.entity.remove_key(&key_name);
                }
                for (i, k) in versions.iter().enumerate() {
                    let next = versions.get(i + 1).map(|n| n.version);
                    if mine {
                        self.entity.install_key(k.as_key(&scope, kind), next, now);
                    }
                    for (holder, pw) in &holders {
                        let sname = keystore::sealed_key_name(&key_name, holder, k.version);
                        live.insert(sname.clone());
                        if self.sealed.get(&sname).is_some_and(|(n, _)| *n == next) {
                            continue;
                        }
                        let anchor_key = self.state.anchor_key_name();
                        let d = keystore::seal_key(k, next, &scope, kind, holder, pw, &self.state.anchor, &anchor_key, &mut self.rng);
                        let fwd = self.entity.forwarder_mut();
                        let _ = fwd.publish(d.clone(), true, now);
                        if broadcast {
                            let _ = fwd.send_data(&d, now);
                        }
                        self.sealed.insert(sname, (next, d));
                    }
                }
            }
        }
        let stale: Vec<Name> = self.sealed.keys().filter(|n| !live.contains(*n)).cloned().collect();
        for n in stale {
            self.sealed.remove(&n);
            self.entity.forwarder_mut().unpublish(&n);
        }
        self.sync_policies(&set, now, broadcast);
    }

    fn sync_policies(&mut self, set: &PolicySet, now: u64, broadcast: bool) {
        let records: Vec<(Name, [u8; 32])> = self.state.registry.values().map(|r| (r.name.clone(), r.pairwise)).collect();
        for (entity, pw) in records {
            if self.published_version.get(&entity) == Some(&set.version) {
                continue;
            }
            let watched = self.state.watched_by(set, &entity);
            let subset = set.filter_for(&entity, &watched);
            self.last_policy_ts = now.max(self.last_policy_ts + 1);
            let name = naming::with_timestamp(&self.state.policy_name_for(&entity), self.last_policy_ts);
            let anchor_key = self.state.anchor_key_name();
            let d = policy::seal_policy_set(&subset, name, &self.state.anchor, anchor_key, &pw, &mut self.rng);
            let fwd = self.entity.forwarder_mut();
            if let Some(old) = self.published_policy.get(&entity) {
                fwd.unpublish(&old.name);
            }
            let _ = fwd.publish(d.clone(), true, now);
            if broadcast {
                let _ = fwd.send_data(&d, now);
            }
            self.published_version.insert(entity.clone(), set.version);
            self.published_policy.insert(entity, d);
        }
    }

    /// Sends every sealed key and policy container so a freshly certified
    /// store can capture them; later ones reach it as they are broadcast.
    fn preprovision(&mut self, now: u64) {
        let all: Vec<Data> =
            self.sealed.values().map(|(_, d)| d.clone()).chain(self.published_policy.values().cloned()).collect();
        let fwd = self.entity.forwarder_mut();
        for d in &all {
            let _ = fwd.send_data(d, now);
        }
    }

    /// First pre-generated key version activating after `now`; at that
    /// point another one is generated and sealed.
    fn next_key_event(&self, now: u64) -> Option<u64> {
        self.state.keys.scopes().filter_map(|s| self.state.keys.versions(s).iter().map(|k| k.version).find(|v| *v > now)).min()
    }

    // ---- bus ----

    fn serve(&mut self, now: u64) {
        while let Some((_, interest)) = self.entity.pop_unhandled() {
            let boot: Name = bootstrap::BOOT_PREFIX.parse().expect("constant");
            if boot.is_prefix_of(&interest.name) {
                self.on_hello(interest.name, now);
            } else if is_cert_request(&interest.name) {
                self.on_cert_request(&interest, now);
            } else if let Some((scope, kind, rest)) = keystore::split_key_name(&interest.name) {
                self.on_key_miss(&scope, kind, &rest, now);
            }
        }
        let audit = self.entity.audit();
        let fresh: Vec<_> = audit[self.audit_cursor.min(audit.len())..].to_vec();
        self.audit_cursor = audit.len();
        for a in fresh {
            if let Outcome::Rejected(why) = a.outcome {
                let signer = a.signer.map(|s| s.to_uri()).unwrap_or_default();
                self.state.log(a.at, EventKind::Rejected, &signer, &a.name.to_uri(), why.as_str());
            }
        }
    }

    fn on_key_miss(&mut self, scope: &Name, kind: KeyKind, rest: &Name, now: u64) {
        let holder = match rest.last() {
            Some(c) if c.timestamp().is_some() => rest.prefix(rest.len() - 1),
            _ => rest.clone(),
        };
        if !self.state.registry.contains_key(&holder) {
            return;
        }
        let set = self.state.policy_set();
        if !keystore::may_hold(&set, &self.state.home, &holder, scope, kind) {
            let key = scope.with(kind.as_str()).to_uri();
            self.state.log(now, EventKind::KeyRequestDenied, &holder.to_uri(), &key, "policy-denied");
        }
    }

    fn on_hello(&mut self, name: Name, now: u64) {
        let Ok(h) = bootstrap::parse_hello(&name) else { return };
        if self.completed.contains_key(&h.label) {
            return;
        }
        if let Some(s) = self.sessions.get(&h.label) {
            if s.hello == name {
                let w = s.welcome.clone();
                let _ = self.entity.forwarder_mut().send_data(&w, now);
                return;
            }
        }
        let Some(appr) = self.state.approvals.get(&h.label).cloned() else {
            let fresh = !self.pending.contains_key(&h.label);
            let p = self.pending.entry(h.label.clone()).or_insert(PendingHello { label: h.label.clone(), first_seen: now, last_seen: now });
            p.last_seen = now;
            if fresh {
                self.state.log(now, EventKind::BootstrapPending, &h.label, "", "awaiting approval");
            }
            return;
        };
        if !h.verify(&appr.token) {
            self.state.log(now, EventKind::TokenMismatch, &h.label, "", "hello ignored");
            return;
        }
        let reserved: BTreeSet<(String, String)> = self
            .sessions
            .iter()
            .filter(|(l, _)| **l != h.label)
            .map(|(_, s)| {
                let loc = s.assigned.get(self.state.home.len() + 1).and_then(|c| c.as_str()).unwrap_or("").to_string();
                let id = s.assigned.last().and_then(|c| c.as_str()).unwrap_or("").to_string();
                (loc, id)
            })
            .collect();
        let mut id = h.label.clone();
        let mut n = 2;
        while self.state.location_id_taken(&appr.location, &id, &reserved) {
            id = alloc::format!("{}-{n}", h.label);
            n += 1;
        }
        let ctx = NamingContext::new(self.state.home.clone()).expect("non-empty home");
        let Ok(assigned) = ctx.entity_name(&appr.service, &appr.location, &id) else { return };
        let dh = Keypair::generate(&mut self.rng);
        let Ok(pairwise) = crypto::derive_pairwise_secret(&dh, &h.dh_public) else { return };
        let nonce = bootstrap::fresh_nonce(&mut self.rng);
        let w = Welcome { anchor_cert: self.state.anchor_cert.clone(), controller_dh: dh.public_bytes(), assigned: assigned.clone(), nonce };
        let welcome = bootstrap::build_welcome(&name, &w, &appr.token);
        let _ = self.entity.forwarder_mut().send_data(&welcome, now);
        self.pending.remove(&h.label);
        self.sessions.insert(h.label, Session { hello: name, welcome, assigned, nonce, pairwise, grant: None });
    }

    fn on_cert_request(&mut self, interest: &Interest, now: u64) {
        let assigned = interest.name.prefix(interest.name.len() - 3);
        let Some((label, s)) = self.sessions.iter().find(|(_, s)| s.assigned == assigned) else { return };
        let label = label.clone();
        if bootstrap::cert_request_name(&s.assigned, &s.nonce) != interest.name {
            return;
        }
        if let Some(g) = &s.grant {
            let g = g.clone();
            let _ = self.entity.forwarder_mut().send_data(&g, now);
            return;
        }
        let s = s.clone();
        let public = match bootstrap::open_cert_request(interest, &s.pairwise, &s.nonce) {
            Ok(p) => p,
            Err(e) => {
                let outcome = match e {
                    BootError::TokenMismatch => "bad request tag",
                    _ => "bad request",
                };
                self.state.log(now, EventKind::TokenMismatch, &label, &assigned.to_uri(), outcome);
                return;
            }
        };
        let home = self.state.home.clone();
        let Ok(cert) = crypto::issue_certificate(&self.state.anchor, &home, &assigned, &public, now, DEFAULT_ENTITY_VALIDITY_MS) else {
            return;
        };
        let Some(appr) = self.state.approvals.remove(&label) else { return };
        let location = appr.location.clone();
        self.state.registry.insert(
            assigned.clone(),
            EntityRecord {
                name: assigned.clone(),
                label: label.clone(),
                service: appr.service.clone(),
                location: location.clone(),
                certificate: cert.clone(),
                pairwise: s.pairwise,
                bootstrapped_at: now,
            },
        );
        self.completed.insert(label.clone(), assigned.clone());
        if appr.service != STORE_SERVICE {
            self.add_default_rules(&assigned, &appr.service, &location);
        }
        self.state.policy_version += 1;
        self.sync(now, true);

        let sealed_keys: Vec<Data> = self
            .sealed
            .iter()
            .filter(|(n, _)| match keystore::parse_sealed_key_name(n) {
                Some((key, holder, v)) => {
                    holder == assigned
                        && keystore::split_key_name(&key).is_some_and(|(scope, _, _)| {
                            self.state.keys.current(&scope, now).is_some_and(|k| k.version == v)
                        })
                }
                None => false,
            })
            .map(|(_, (_, d))| d.clone())
            .collect();
        let policy = self.published_policy.get(&assigned).cloned().expect("synced");
        let grant = Grant { certificate: cert, policy, sealed_keys };
        let anchor_key = self.state.anchor_key_name();
        let Ok(d) = bootstrap::build_grant(&interest.name, &grant, &s.pairwise, &self.state.anchor, &anchor_key, &mut self.rng) else {
            return;
        };
        let _ = self.entity.forwarder_mut().send_data(&d, now);
        if let Some(sess) = self.sessions.get_mut(&label) {
            sess.grant = Some(d);
        }
        if appr.service == STORE_SERVICE {
            self.preprovision(now);
        }
        self.state.log(now, EventKind::Bootstrapped, &label, &assigned.to_uri(), "ok");
    }

    /// Default rules for a new entity: it may publish content for its own
    /// room, and read commands addressed to its service.
    fn add_default_rules(&mut self, entity: &Name, service: &str, location: &str) {
        let id = entity.last().and_then(|c| c.as_str()).unwrap_or_default().to_string();
        let subject = SubjectScope { service: Some(service.into()), location: Some(location.into()), entity: Some(id) };
        self.state.push_rule(RuleForm {
            subject: subject.clone(),
            verb: Verb::Produce,
            object: ObjectScope { service: service.into(), kind: ResourceKind::Content, location: Some(location.into()) },
        });
        self.state.push_rule(RuleForm {
            subject,
            verb: Verb::Decrypt,
            object: ObjectScope { service: service.into(), kind: ResourceKind::Cmd, location: None },
        });
    }
}

fn is_cert_request(name: &Name) -> bool {
    let n = name.len();
    n >= 3 && name.components()[n - 3].as_bytes() == b"BOOT" && name.components()[n - 2].as_bytes() == b"CERT"
}

impl Node for Controller {
    fn face(&self) -> FaceId {
        self.entity.face()
    }

    fn on_frame(&mut self, wire: &[u8], now: u64) {
        self.clock = self.clock.max(now);
        self.entity.on_frame(wire, now);
        self.serve(now);
    }

    fn on_tick(&mut self, now: u64) {
        if self.entity.forwarder().is_closed() {
            return;
        }
        self.clock = self.clock.max(now);
        self.entity.tick(now);
        if self.next_key_event(self.last_sync).is_some_and(|t| t <= now) {
            self.sync(now, true);
        }
        self.serve(now);
    }

    fn next_deadline(&self) -> Option<u64> {
        if self.entity.forwarder().is_closed() {
            return None;
        }
        [self.entity.next_deadline(), self.next_key_event(self.last_sync)].into_iter().flatten().min()
    }

    fn take_outbox(&mut self) -> Vec<Vec<u8>> {
        self.entity.take_outbox()
    }
}
