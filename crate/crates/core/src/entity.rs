//! Entities: the publish/subscribe API over a forwarder.
//!
//! Publishing names the item, encrypts the payload under the scope EKEY and
//! signs it. Receiving verifies the signature against an anchor-issued
//! certificate, checks the produce policy, and only then decrypts. An
//! entity also runs its own bootstrap handshake, renews keys before they
//! run out, and in store mode re-serves anchor-signed key and policy Data.

use alloc::collections::{BTreeMap, BTreeSet, VecDeque};
use alloc::vec::Vec;

use rand_chacha::ChaCha20Rng;
use rand_core::SeedableRng;

use crate::bootstrap::{BootState, DeviceSession, OobToken};
use crate::crypto::{self, Certificate, Keypair, SymmetricKey};
use crate::keystore::{self, KeyRing};
use crate::name::{Name, NameComponent};
use crate::naming::{self, KeyKind};
use crate::policy::{PolicySet, PolicyStore};
use crate::tlv::{self, app, Data, Fields, Interest, SigInfo, SigType};
use crate::transport::{Event, FaceId, Forwarder, Node, PendingId, RegistrationId, TransportError, DEFAULT_RETX_BUDGET};

pub const DEFAULT_FRESHNESS_MS: u64 = 2000;
pub const DEFAULT_POLL_INTERVAL_MS: u64 = 1000;
pub const DEFAULT_NOTIFICATION_REDUNDANCY: u32 = 8;
pub const NOTIFICATION_SPACING_MS: u64 = 100;
pub const DEFAULT_REPLAY_WINDOW_MS: u64 = 30_000;
/// Wait before asking again for a key version nobody supplied.
pub const KEY_RETRY_MS: u64 = 5_000;
const MAX_PARKED: usize = 256;
const MAX_UNHANDLED: usize = 256;
const SEEN_MEMORY_MS: u64 = 120_000;
/// Sealed versions the store keeps per key and holder.
const STORE_VERSIONS: usize = 6;

#[derive(Debug, Clone)]
pub struct EntityConfig {
    pub face: FaceId,
    pub seed: u64,
    pub retx_budget: u32,
    pub freshness_ms: u64,
    pub poll_interval_ms: u64,
    /// Keep one poll Interest outstanding instead of polling periodically.
    pub long_poll: bool,
    pub notification_redundancy: u32,
    pub notification_spacing_ms: u64,
    pub replay_window_ms: u64,
    /// Replace the trailing content-id or command-id with a keyed pseudonym.
    pub obfuscate: bool,
    /// Capture and re-serve anchor-signed keys, policies and certificates.
    pub store: bool,
}

impl EntityConfig {
    pub fn new(face: FaceId, seed: u64) -> Self {
        Self {
            face,
            seed,
            retx_budget: DEFAULT_RETX_BUDGET,
            freshness_ms: DEFAULT_FRESHNESS_MS,
            poll_interval_ms: DEFAULT_POLL_INTERVAL_MS,
            long_poll: false,
            notification_redundancy: DEFAULT_NOTIFICATION_REDUNDANCY,
            notification_spacing_ms: NOTIFICATION_SPACING_MS,
            replay_window_ms: DEFAULT_REPLAY_WINDOW_MS,
            obfuscate: false,
            store: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum TopicKind {
    Content,
    Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct SubId(pub u64);

/// Why a received packet was not delivered.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Reject {
    Malformed,
    BadSignature,
    /// The signer's certificate could not be fetched or does not chain to
    /// the anchor.
    UnknownSigner,
    PolicyDenied,
    /// Verified, but we are not authorized for the decryption key.
    AccessDenied,
    KeyUnavailable,
    DecryptFailed,
    Stale,
}

impl Reject {
    pub const ALL: [Reject; 8] = [
        Reject::Malformed,
        Reject::BadSignature,
        Reject::UnknownSigner,
        Reject::PolicyDenied,
        Reject::AccessDenied,
        Reject::KeyUnavailable,
        Reject::DecryptFailed,
        Reject::Stale,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Reject::Malformed => "malformed",
            Reject::BadSignature => "bad-signature",
            Reject::UnknownSigner => "unknown-signer",
            Reject::PolicyDenied => "policy-denied",
            Reject::AccessDenied => "access-denied",
            Reject::KeyUnavailable => "key-unavailable",
            Reject::DecryptFailed => "decrypt-failed",
            Reject::Stale => "stale",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Outcome {
    Delivered,
    Rejected(Reject),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AuditRecord {
    pub at: u64,
    pub kind: TopicKind,
    pub name: Name,
    pub signer: Option<Name>,
    pub outcome: Outcome,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct PipelineStats {
    pub delivered: u64,
    pub duplicates: u64,
    pub decrypt_attempts: u64,
    pub rejected: BTreeMap<Reject, u64>,
    pub published: u64,
    pub stored: u64,
}

impl PipelineStats {
    pub fn rejected(&self, r: Reject) -> u64 {
        self.rejected.get(&r).copied().unwrap_or(0)
    }
}

/// A message that passed the whole receive pipeline.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Delivery {
    pub kind: TopicKind,
    pub subscription: Option<SubId>,
    /// Name as seen on the wire.
    pub name: Name,
    /// Name with an obfuscated trailing component restored.
    pub clear_name: Name,
    pub producer: Name,
    pub payload: Vec<u8>,
    /// Versioned DKEY name the payload was decrypted with.
    pub key: Name,
    pub signer_cert: Certificate,
    pub received_at: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum PubSubError {
    #[error("entity has not finished bootstrapping")]
    NotBootstrapped,
    #[error("no produce policy allows this name")]
    LocalPolicyDenied,
    #[error("no active encryption key for this scope")]
    NoEncryptionKey,
    #[error("invalid topic: {0}")]
    InvalidTopic(&'static str),
    #[error(transparent)]
    Transport(#[from] TransportError),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Published {
    pub data: Data,
    pub clear_name: Name,
}

/// Everything an entity needs to skip the handshake (the controller's own
/// entity, or tests).
#[derive(Debug, Clone)]
pub struct Provision {
    pub identity: Keypair,
    pub certificate: Certificate,
    pub anchor: Certificate,
    pub policies: PolicySet,
    pub keys: Vec<(SymmetricKey, Option<u64>)>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
enum Purpose {
    Hello,
    CertRequest,
    Cert(Name),
    /// Sealed key fetch; `renewal` names the key being renewed.
    Key { versioned: Option<Name>, renewal: Option<Name> },
    Policy,
    Poll(SubId),
    Command(Name),
}

#[derive(Debug, Clone)]
struct Inbound {
    data: Data,
    kind: TopicKind,
    sub: Option<SubId>,
}

#[derive(Debug, Clone)]
struct Verified {
    inb: Inbound,
    cert: Certificate,
}

#[derive(Debug, Clone)]
struct ContentSub {
    topic: Name,
    /// Zero means long poll.
    interval: u64,
    next_poll: u64,
    pending: Option<PendingId>,
}

#[derive(Debug, Clone, Copy)]
struct CommandFetch {
    pending: PendingId,
    last_sent: u64,
    refetches: u32,
}

pub struct Entity {
    cfg: EntityConfig,
    fwd: Forwarder,
    rng: ChaCha20Rng,
    identity: Keypair,
    session: Option<DeviceSession>,
    name: Option<Name>,
    anchor: Option<Certificate>,
    cert: Option<Certificate>,
    pairwise: Option<[u8; 32]>,
    policies: PolicyStore,
    keys: KeyRing,
    certs: BTreeMap<Name, Certificate>,
    pending: BTreeMap<PendingId, Purpose>,
    cert_fetches: BTreeMap<Name, PendingId>,
    key_fetches: BTreeMap<Name, PendingId>,
    renewing: BTreeMap<Name, PendingId>,
    renew_backoff: BTreeMap<Name, u64>,
    policy_fetch: Option<PendingId>,
    unavailable: BTreeMap<Name, u64>,
    parked_cert: BTreeMap<Name, Vec<Inbound>>,
    parked_key: BTreeMap<Name, Vec<Verified>>,
    parked_names: BTreeSet<Name>,
    content_subs: BTreeMap<SubId, ContentSub>,
    command_prefixes: Vec<(Name, Option<RegistrationId>)>,
    command_fetches: BTreeMap<Name, CommandFetch>,
    seen: BTreeMap<Name, u64>,
    notifications: VecDeque<(u64, Name)>,
    deliveries: VecDeque<Delivery>,
    unhandled: VecDeque<(Name, Interest)>,
    audit: Vec<AuditRecord>,
    pub stats: PipelineStats,
    last_ts: u64,
    /// Time of the latest tick or frame.
    clock: u64,
    next_sub: u64,
    bootstrapped_at: Option<u64>,
}

impl Entity {
    fn blank(cfg: EntityConfig, identity: Keypair, rng: ChaCha20Rng) -> Self {
        let fwd = Forwarder::new(cfg.face, cfg.seed ^ 0x5eed_f0f0);
        Self {
            cfg,
            fwd,
            rng,
            identity,
            session: None,
            name: None,
            anchor: None,
            cert: None,
            pairwise: None,
            policies: PolicyStore::new(),
            keys: KeyRing::new(),
            certs: BTreeMap::new(),
            pending: BTreeMap::new(),
            cert_fetches: BTreeMap::new(),
            key_fetches: BTreeMap::new(),
            renewing: BTreeMap::new(),
            renew_backoff: BTreeMap::new(),
            policy_fetch: None,
            unavailable: BTreeMap::new(),
            parked_cert: BTreeMap::new(),
            parked_key: BTreeMap::new(),
            parked_names: BTreeSet::new(),
            content_subs: BTreeMap::new(),
            command_prefixes: Vec::new(),
            command_fetches: BTreeMap::new(),
            seen: BTreeMap::new(),
            notifications: VecDeque::new(),
            deliveries: VecDeque::new(),
            unhandled: VecDeque::new(),
            audit: Vec::new(),
            stats: PipelineStats::default(),
            last_ts: 0,
            clock: 0,
            next_sub: 0,
            bootstrapped_at: None,
        }
    }

    /// A fresh device that bootstraps with `token` once ticked.
    pub fn new(cfg: EntityConfig, token: OobToken) -> Self {
        let mut rng = ChaCha20Rng::seed_from_u64(cfg.seed);
        let identity = Keypair::generate(&mut rng);
        let session = DeviceSession::new(token, &mut rng);
        let mut e = Self::blank(cfg, identity, rng);
        e.session = Some(session);
        e
    }

    /// An entity that already holds its name, certificate, policies and keys.
    pub fn provisioned(cfg: EntityConfig, p: Provision, now: u64) -> Self {
        let rng = ChaCha20Rng::seed_from_u64(cfg.seed);
        let mut e = Self::blank(cfg, p.identity, rng);
        let _ = e.policies.install_set(p.policies);
        for (k, next) in p.keys {
            e.keys.insert_announced(k, next);
        }
        e.finish_bootstrap(p.anchor, p.certificate, now);
        e
    }

    fn finish_bootstrap(&mut self, anchor: Certificate, cert: Certificate, now: u64) {
        self.name = Some(cert.subject().clone());
        self.certs.insert(anchor.key_name(), anchor.clone());
        self.certs.insert(cert.key_name(), cert.clone());
        let _ = self.fwd.publish(cert.data().clone(), true, now);
        self.anchor = Some(anchor);
        self.cert = Some(cert);
        self.bootstrapped_at = Some(now);
        for (p, reg) in &mut self.command_prefixes {
            if reg.is_none() {
                *reg = self.fwd.register_prefix(p.clone()).ok();
            }
        }
    }

    pub fn config(&self) -> &EntityConfig {
        &self.cfg
    }

    pub fn name(&self) -> Option<&Name> {
        self.name.as_ref()
    }

    pub fn home(&self) -> Option<&Name> {
        self.anchor.as_ref().map(Certificate::subject)
    }

    pub fn is_bootstrapped(&self) -> bool {
        self.cert.is_some()
    }

    pub fn bootstrapped_at(&self) -> Option<u64> {
        self.bootstrapped_at
    }

    pub fn boot_state(&self) -> BootState {
        match &self.session {
            Some(s) => s.state,
            None if self.cert.is_some() => BootState::Certified,
            None => BootState::Idle,
        }
    }

    pub fn anchor(&self) -> Option<&Certificate> {
        self.anchor.as_ref()
    }

    pub fn certificate(&self) -> Option<&Certificate> {
        self.cert.as_ref()
    }

    pub fn identity_public(&self) -> Vec<u8> {
        self.identity.public_bytes()
    }

    pub fn pairwise_secret(&self) -> Option<&[u8; 32]> {
        self.pairwise.as_ref()
    }

    pub fn policies(&self) -> alloc::sync::Arc<PolicySet> {
        self.policies.snapshot()
    }

    pub fn policy_version(&self) -> Option<u64> {
        self.policies.version()
    }

    pub fn keys(&self) -> &KeyRing {
        &self.keys
    }

    pub fn audit(&self) -> &[AuditRecord] {
        &self.audit
    }

    pub fn forwarder(&self) -> &Forwarder {
        &self.fwd
    }

    pub fn forwarder_mut(&mut self) -> &mut Forwarder {
        &mut self.fwd
    }

    pub fn pop_delivery(&mut self) -> Option<Delivery> {
        self.deliveries.pop_front()
    }

    pub fn take_deliveries(&mut self) -> Vec<Delivery> {
        self.deliveries.drain(..).collect()
    }

    /// Interests that reached a registered prefix other than our command
    /// subscriptions, for an owner that serves them.
    pub fn pop_unhandled(&mut self) -> Option<(Name, Interest)> {
        self.unhandled.pop_front()
    }

    /// Installs a key directly (the controller's own entity).
    pub fn install_key(&mut self, key: SymmetricKey, next: Option<u64>, now: u64) {
        let (name, version) = (key.name.clone(), key.version);
        if self.keys.insert_announced(key, next) {
            self.on_key_installed(&name, version, now);
        }
    }

    pub fn remove_key(&mut self, name: &Name) {
        self.keys.remove(name);
    }

    /// Replaces the policy set directly (the controller's own entity).
    pub fn set_policies(&mut self, set: PolicySet) {
        let _ = self.policies.install_set(set);
    }

    pub fn close(&mut self) {
        self.fwd.close();
    }

    fn timestamp(&mut self, now: u64) -> u64 {
        self.last_ts = now.max(self.last_ts + 1);
        self.last_ts
    }

    fn key_locator(&self) -> Option<Name> {
        self.cert.as_ref().map(Certificate::key_name)
    }

    // ---- publishing ----

    pub fn publish_content(&mut self, topic: &Name, payload: &[u8], now: u64) -> Result<Published, PubSubError> {
        if topic.position(naming::CONTENT).is_none() {
            return Err(PubSubError::InvalidTopic("content topics contain CONTENT"));
        }
        self.publish(topic, payload, TopicKind::Content, now)
    }

    /// Publishes a command and announces it with notification Interests,
    /// the first now and the rest at the configured spacing.
    pub fn publish_command(&mut self, topic: &Name, payload: &[u8], now: u64) -> Result<Published, PubSubError> {
        match topic.position(naming::CMD) {
            Some(i) if i + 1 < topic.len() => {}
            _ => return Err(PubSubError::InvalidTopic("command topics end in CMD/<command-id>")),
        }
        let p = self.publish(topic, payload, TopicKind::Command, now)?;
        let spacing = self.cfg.notification_spacing_ms;
        for k in 0..self.cfg.notification_redundancy as u64 {
            self.notifications.push_back((now + k * spacing, p.data.name.clone()));
        }
        self.send_notifications(now);
        Ok(p)
    }

    fn publish(&mut self, topic: &Name, payload: &[u8], kind: TopicKind, now: u64) -> Result<Published, PubSubError> {
        let (me, home, locator) = match (&self.name, self.home(), self.key_locator()) {
            (Some(n), Some(h), Some(l)) => (n.clone(), h.clone(), l),
            _ => return Err(PubSubError::NotBootstrapped),
        };
        let policies = self.policies.snapshot();
        let ts = self.timestamp(now);
        let clear_name = naming::with_timestamp(topic, ts);
        if !policies.check_produce(&me, &clear_name).is_allow() {
            return Err(PubSubError::LocalPolicyDenied);
        }
        let key = self.keys.encryption_key(&home, topic, now).cloned().ok_or(PubSubError::NoEncryptionKey)?;
        let (wire_topic, hidden) = match (self.cfg.obfuscate, topic.last()) {
            (true, Some(last)) => {
                let p = naming::pseudonym(&key.bytes, last);
                (topic.prefix(topic.len() - 1).child(p), Some(last.clone()))
            }
            _ => (topic.clone(), None),
        };
        let name = naming::with_timestamp(&wire_topic, ts);
        if hidden.is_some() && !policies.check_produce(&me, &name).is_allow() {
            return Err(PubSubError::LocalPolicyDenied);
        }
        let content = seal_envelope(&key, payload, hidden.as_ref(), &mut self.rng);
        let mut data = Data::new(name, content, SigInfo { sig_type: SigType::DigestSha256, key_locator: None });
        data.freshness_ms = self.cfg.freshness_ms;
        crypto::sign_data(&mut data, &self.identity, locator);
        self.fwd.publish(data.clone(), false, now)?;
        self.seen.insert(data.name.clone(), now);
        self.stats.published += 1;
        let _ = kind;
        Ok(Published { data, clear_name })
    }

    fn send_notifications(&mut self, now: u64) {
        while self.notifications.front().is_some_and(|(t, _)| *t <= now) {
            let (_, name) = self.notifications.pop_front().expect("non-empty");
            let _ = self.fwd.send_interest(Interest::new(name, [0; 4]), now);
        }
    }

    // ---- subscribing ----

    pub fn subscribe_content(&mut self, topic: Name, now: u64) -> SubId {
        let interval = if self.cfg.long_poll { 0 } else { self.cfg.poll_interval_ms };
        self.subscribe_content_every(topic, interval, now)
    }

    /// Subscribes with an explicit poll interval; zero means long poll.
    pub fn subscribe_content_every(&mut self, topic: Name, interval_ms: u64, now: u64) -> SubId {
        self.next_sub += 1;
        let id = SubId(self.next_sub);
        self.content_subs.insert(id, ContentSub { topic, interval: interval_ms, next_poll: now, pending: None });
        id
    }

    pub fn unsubscribe(&mut self, id: SubId) {
        if let Some(s) = self.content_subs.remove(&id) {
            if let Some(p) = s.pending {
                self.fwd.cancel(p);
                self.pending.remove(&p);
            }
        }
    }

    /// Listens for commands at device, room and home level of our own name.
    pub fn subscribe_commands(&mut self) {
        match (self.name.clone(), self.home().map(Name::len)) {
            (Some(me), Some(h)) => {
                for i in h + 1..=me.len() {
                    self.subscribe_command_prefix(me.prefix(i).with(naming::CMD));
                }
            }
            _ => self.command_prefixes.push((Name::new(), None)),
        }
    }

    pub fn subscribe_command_prefix(&mut self, prefix: Name) {
        if self.command_prefixes.iter().any(|(p, _)| *p == prefix) {
            return;
        }
        let reg = if self.is_bootstrapped() { self.fwd.register_prefix(prefix.clone()).ok() } else { None };
        self.command_prefixes.push((prefix, reg));
    }

    fn expand_deferred_command_subscription(&mut self) {
        if let Some(i) = self.command_prefixes.iter().position(|(p, _)| p.is_empty()) {
            self.command_prefixes.remove(i);
            self.subscribe_commands();
        }
    }

    pub fn command_prefixes(&self) -> impl Iterator<Item = &Name> {
        self.command_prefixes.iter().map(|(p, _)| p).filter(|p| !p.is_empty())
    }

    fn under_command_prefix(&self, name: &Name) -> bool {
        self.command_prefixes.iter().any(|(p, r)| r.is_some() && p.is_prefix_of(name))
    }

    fn content_sub_for(&self, name: &Name) -> Option<SubId> {
        self.content_subs.iter().find(|(_, s)| s.topic.is_prefix_of(name)).map(|(id, _)| *id)
    }

    // ---- event loop ----

    fn express(&mut self, interest: Interest, budget: u32, purpose: Purpose, now: u64) -> Option<PendingId> {
        let id = self.fwd.express_interest(interest, budget, now).ok()?;
        self.pending.insert(id, purpose);
        Some(id)
    }

    pub fn tick(&mut self, now: u64) {
        if self.fwd.is_closed() {
            return;
        }
        self.clock = self.clock.max(now);
        self.fwd.tick(now);
        self.drain(now);
        self.run_bootstrap(now);
        self.send_notifications(now);
        if self.is_bootstrapped() {
            self.run_polls(now);
            self.run_renewals(now);
        }
        self.prune(now);
    }

    fn drain(&mut self, now: u64) {
        while let Some(ev) = self.fwd.pop_event() {
            match ev {
                Event::Data { satisfied, data } => self.on_data(satisfied, data, now),
                Event::Interest { prefix, interest, .. } => self.on_interest(prefix, interest, now),
                Event::Timeout { pending, .. } => self.on_timeout(pending, now),
            }
        }
    }

    fn run_bootstrap(&mut self, now: u64) {
        let Some(session) = &mut self.session else { return };
        if session.state > BootState::HelloSent || self.pending.values().any(|p| *p == Purpose::Hello) {
            return;
        }
        let hello = session.hello();
        self.express(hello, 0, Purpose::Hello, now);
    }

    fn run_polls(&mut self, now: u64) {
        let due: Vec<SubId> = self
            .content_subs
            .iter()
            .filter(|(_, s)| if s.interval == 0 { s.pending.is_none() } else { s.next_poll <= now })
            .map(|(id, _)| *id)
            .collect();
        for id in due {
            let s = &self.content_subs[&id];
            let mut i = Interest::new(s.topic.clone(), [0; 4]);
            if s.interval > 0 {
                i.lifetime_ms = s.interval.min(tlv::DEFAULT_INTEREST_LIFETIME_MS);
            }
            if let Some(old) = s.pending {
                self.fwd.cancel(old);
                self.pending.remove(&old);
            }
            let p = self.express(i, 0, Purpose::Poll(id), now);
            let s = self.content_subs.get_mut(&id).expect("present");
            s.pending = p;
            if s.interval > 0 {
                s.next_poll = now + s.interval;
            }
        }
    }

    /// When and what to fetch to renew `key`: the announced successor of
    /// the current version, or the current version again to learn one.
    fn renewal_plan(&self, key: &Name, now: u64) -> Option<(u64, Name)> {
        let me = self.name.as_ref()?;
        self.pairwise?;
        if self.renewing.contains_key(key) {
            return None;
        }
        let (base, next) = self.keys.renewal_base(key, now)?;
        let prefix = naming::sealed_key_prefix(key, me);
        let target = next.unwrap_or(base.version);
        let at = keystore::renewal_point(base).max(self.renew_backoff.get(key).copied().unwrap_or(0));
        Some((at, prefix.child(NameComponent::from_timestamp(target))))
    }

    fn may_renew(&self, key: &Name) -> bool {
        let (Some(me), Some(home)) = (&self.name, self.home()) else { return false };
        match keystore::split_key_name(key) {
            Some((scope, kind, _)) => keystore::may_hold(&self.policies.snapshot(), home, me, &scope, kind),
            None => false,
        }
    }

    fn run_renewals(&mut self, now: u64) {
        let names: Vec<Name> = self.keys.names().cloned().collect();
        let mut any = false;
        for key in names {
            if !self.may_renew(&key) {
                continue;
            }
            let Some((at, interest)) = self.renewal_plan(&key, now) else { continue };
            if at > now {
                continue;
            }
            let purpose = Purpose::Key { versioned: None, renewal: Some(key.clone()) };
            if let Some(id) = self.express(Interest::new(interest, [0; 4]), self.cfg.retx_budget, purpose, now) {
                self.renewing.insert(key, id);
                any = true;
            }
        }
        if any {
            self.refresh_policy(now);
        }
    }

    /// Asks for the newest policy container addressed to us.
    pub fn refresh_policy(&mut self, now: u64) {
        if self.policy_fetch.is_some() {
            return;
        }
        if let Some(n) = self.policy_prefix() {
            self.policy_fetch = self.express(Interest::new(n, [0; 4]), self.cfg.retx_budget, Purpose::Policy, now);
        }
    }

    fn policy_prefix(&self) -> Option<Name> {
        let (me, home) = (self.name.as_ref()?, self.home()?);
        Some(home.with(naming::RULE).append(&me.suffix_from(home.len() + 1)))
    }

    fn prune(&mut self, now: u64) {
        self.seen.retain(|_, t| *t + SEEN_MEMORY_MS > now);
        self.unavailable.retain(|_, t| *t > now);
        self.renew_backoff.retain(|_, t| *t > now);
        self.keys.prune(now);
    }

    fn on_timeout(&mut self, id: PendingId, now: u64) {
        let Some(purpose) = self.pending.remove(&id) else { return };
        match purpose {
            Purpose::Hello => {}
            Purpose::CertRequest => {
                if let Some(s) = &mut self.session {
                    s.restart(&mut self.rng);
                }
            }
            Purpose::Cert(loc) => {
                self.cert_fetches.remove(&loc);
                for inb in self.parked_cert.remove(&loc).unwrap_or_default() {
                    self.parked_names.remove(&inb.data.name);
                    self.reject(&inb, None, Reject::UnknownSigner, now);
                }
            }
            Purpose::Key { versioned, renewal } => {
                if let Some(v) = versioned {
                    self.key_fetches.remove(&v);
                    self.unavailable.insert(v.clone(), now + KEY_RETRY_MS);
                    for p in self.parked_key.remove(&v).unwrap_or_default() {
                        self.parked_names.remove(&p.inb.data.name);
                        let signer = p.cert.subject().clone();
                        self.reject(&p.inb, Some(signer), Reject::KeyUnavailable, now);
                    }
                }
                if let Some(k) = renewal {
                    self.renewing.remove(&k);
                    self.renew_backoff.insert(k, now + KEY_RETRY_MS);
                }
            }
            Purpose::Policy => self.policy_fetch = None,
            Purpose::Poll(sub) => {
                if let Some(s) = self.content_subs.get_mut(&sub) {
                    if s.pending == Some(id) {
                        s.pending = None;
                    }
                }
            }
            Purpose::Command(n) => {
                self.command_fetches.remove(&n);
            }
        }
    }

    fn on_interest(&mut self, prefix: Name, interest: Interest, now: u64) {
        if self.command_prefixes.iter().any(|(p, r)| *p == prefix && r.is_some()) {
            self.on_notification(interest.name, now);
        } else {
            if self.unhandled.len() >= MAX_UNHANDLED {
                self.unhandled.pop_front();
            }
            self.unhandled.push_back((prefix, interest));
        }
    }

    /// A notification (or someone else's fetch) for a command name: fetch
    /// it once, re-sending at most once per notification spacing.
    fn on_notification(&mut self, name: Name, now: u64) {
        let Some(ts) = name.timestamp() else { return };
        if self.seen.contains_key(&name) || self.parked_names.contains(&name) || now.abs_diff(ts) > self.cfg.replay_window_ms {
            return;
        }
        match self.command_fetches.get_mut(&name) {
            Some(f) => {
                if now >= f.last_sent + self.cfg.notification_spacing_ms && f.refetches < self.cfg.notification_redundancy {
                    f.refetches += 1;
                    f.last_sent = now;
                    let _ = self.fwd.resend(f.pending, now);
                }
            }
            None => {
                let purpose = Purpose::Command(name.clone());
                if let Some(id) = self.express(Interest::new(name.clone(), [0; 4]), self.cfg.retx_budget, purpose, now) {
                    self.command_fetches.insert(name, CommandFetch { pending: id, last_sent: now, refetches: 0 });
                }
            }
        }
    }

    fn on_data(&mut self, satisfied: Vec<PendingId>, data: Data, now: u64) {
        if self.cfg.store {
            self.capture(&data, now);
        }
        let purposes: Vec<Purpose> = satisfied.iter().filter_map(|id| self.pending.remove(id)).collect();
        let mut inbound: Option<(TopicKind, Option<SubId>)> = None;
        for p in &purposes {
            match p {
                Purpose::Hello => self.on_welcome(&data, now),
                Purpose::CertRequest => self.on_grant(&data, now),
                Purpose::Cert(loc) => self.on_cert(loc.clone(), &data, now),
                Purpose::Key { versioned, renewal } => {
                    if let Some(v) = versioned {
                        self.key_fetches.remove(v);
                    }
                    let before = renewal.as_ref().and_then(|k| self.renewal_plan_key(k, now));
                    self.on_sealed_key(&data, now);
                    if let Some(k) = renewal {
                        self.renewing.remove(k);
                        if self.renewal_plan_key(k, now) == before {
                            self.renew_backoff.insert(k.clone(), now + KEY_RETRY_MS);
                        }
                    }
                }
                Purpose::Policy => {
                    self.policy_fetch = None;
                    self.on_policy(&data);
                }
                Purpose::Poll(sub) => {
                    if let Some(s) = self.content_subs.get_mut(sub) {
                        s.pending = None;
                    }
                    inbound = Some((TopicKind::Content, Some(*sub)));
                }
                Purpose::Command(n) => {
                    self.command_fetches.remove(n);
                    inbound = Some((TopicKind::Command, None));
                }
            }
        }
        if purposes.is_empty() {
            self.on_unsolicited(&data, now, &mut inbound);
        }
        if let Some((kind, sub)) = inbound {
            self.receive(Inbound { data, kind, sub }, now);
        }
    }

    fn renewal_plan_key(&self, key: &Name, now: u64) -> Option<(u64, Option<u64>)> {
        self.keys.renewal_base(key, now).map(|(k, n)| (k.version, n))
    }

    fn on_unsolicited(&mut self, data: &Data, now: u64, inbound: &mut Option<(TopicKind, Option<SubId>)>) {
        if let Some(me) = &self.name {
            if let Some((_, entity, _)) = keystore::parse_sealed_key_name(&data.name) {
                if &entity == me {
                    self.on_sealed_key(data, now);
                }
                return;
            }
        }
        if self.policy_prefix().is_some_and(|p| p.is_prefix_of(&data.name)) {
            self.on_policy(data);
            return;
        }
        if self.under_command_prefix(&data.name) {
            *inbound = Some((TopicKind::Command, None));
        } else if let Some(sub) = self.content_sub_for(&data.name) {
            *inbound = Some((TopicKind::Content, Some(sub)));
        }
    }

    // ---- bootstrap ----

    fn on_welcome(&mut self, data: &Data, now: u64) {
        let Some(session) = &mut self.session else { return };
        if session.on_welcome(data).is_err() {
            return;
        }
        if let Some(req) = session.cert_request(&self.identity, &mut self.rng) {
            self.express(req, self.cfg.retx_budget, Purpose::CertRequest, now);
        }
    }

    fn on_grant(&mut self, data: &Data, now: u64) {
        let Some(session) = &mut self.session else { return };
        let grant = match session.on_grant(data, &self.identity) {
            Ok(g) => g,
            Err(_) => {
                session.restart(&mut self.rng);
                return;
            }
        };
        let welcome = session.welcome.clone().expect("authenticated");
        let pairwise = session.pairwise.expect("authenticated");
        self.pairwise = Some(pairwise);
        let anchor = welcome.anchor_cert;
        let _ = self.policies.install(&grant.policy, anchor.public_key(), &pairwise);
        self.finish_bootstrap(anchor, grant.certificate, now);
        for k in &grant.sealed_keys {
            self.on_sealed_key(k, now);
        }
        self.expand_deferred_command_subscription();
    }

    fn on_policy(&mut self, data: &Data) {
        if let (Some(anchor), Some(pw)) = (&self.anchor, &self.pairwise) {
            let _ = self.policies.install(data, anchor.public_key(), pw);
        }
    }

    fn on_sealed_key(&mut self, data: &Data, now: u64) {
        let (Some(me), Some(anchor), Some(pw)) = (&self.name, &self.anchor, &self.pairwise) else { return };
        let Ok(opened) = keystore::open_sealed_key(data, me, anchor.public_key(), pw) else { return };
        let (name, version) = (opened.key.name.clone(), opened.key.version);
        if self.keys.insert_announced(opened.key, opened.next) {
            self.on_key_installed(&name, version, now);
        }
    }

    /// Resumes packets parked for the DKEY of this version.
    fn on_key_installed(&mut self, name: &Name, version: u64, now: u64) {
        let Some((scope, _, _)) = keystore::split_key_name(name) else { return };
        let dkey_versioned = scope.with(naming::DKEY).child(NameComponent::from_timestamp(version));
        self.unavailable.remove(&dkey_versioned);
        if let Some(waiting) = self.parked_key.remove(&dkey_versioned) {
            for p in waiting {
                self.parked_names.remove(&p.inb.data.name);
                self.decrypt_stage(p, now);
            }
        }
    }

    fn on_cert(&mut self, loc: Name, data: &Data, now: u64) {
        self.cert_fetches.remove(&loc);
        let parked = self.parked_cert.remove(&loc).unwrap_or_default();
        for inb in &parked {
            self.parked_names.remove(&inb.data.name);
        }
        let accepted = match (Certificate::from_data(data.clone()), &self.anchor) {
            (Ok(c), Some(anchor))
                if c.key_name() == loc
                    && c.issuer_key_name() == Some(&anchor.key_name())
                    && c.verify(anchor.public_key())
                    && c.is_valid_at(now) =>
            {
                self.certs.insert(loc, c);
                true
            }
            _ => false,
        };
        for inb in parked {
            if accepted {
                self.verify_stage(inb, now);
            } else {
                self.reject(&inb, None, Reject::UnknownSigner, now);
            }
        }
    }

    // ---- store ----

    fn capture(&mut self, data: &Data, now: u64) {
        let Some(anchor) = &self.anchor else { return };
        let kind_ok = data.name.components().iter().any(|c| {
            [naming::EKEY, naming::DKEY, naming::RULE, naming::KEY].iter().any(|k| c.as_bytes() == k.as_bytes())
        });
        if !kind_ok || data.sig_info.key_locator.as_ref() != Some(&anchor.key_name()) || !crypto::verify_data(data, anchor.public_key())
        {
            return;
        }
        let group = data.name.prefix(data.name.len().saturating_sub(1));
        let _ = self.fwd.publish(data.clone(), true, now);
        self.stats.stored += 1;
        let mut versions: Vec<Name> =
            self.fwd.stored().filter(|d| group.is_prefix_of(&d.name) && d.name.len() == group.len() + 1).map(|d| d.name.clone()).collect();
        if versions.len() > STORE_VERSIONS {
            versions.sort_by_key(|n| n.timestamp().unwrap_or(0));
            for n in &versions[..versions.len() - STORE_VERSIONS] {
                self.fwd.unpublish(n);
            }
        }
    }

    // ---- receive pipeline ----

    fn reject(&mut self, inb: &Inbound, signer: Option<Name>, why: Reject, now: u64) {
        *self.stats.rejected.entry(why).or_insert(0) += 1;
        self.seen.insert(inb.data.name.clone(), now);
        self.audit.push(AuditRecord { at: now, kind: inb.kind, name: inb.data.name.clone(), signer, outcome: Outcome::Rejected(why) });
    }

    fn receive(&mut self, inb: Inbound, now: u64) {
        if self.seen.contains_key(&inb.data.name) || self.parked_names.contains(&inb.data.name) {
            self.stats.duplicates += 1;
            return;
        }
        if inb.kind == TopicKind::Command {
            match inb.data.name.timestamp() {
                Some(ts) if now.abs_diff(ts) <= self.cfg.replay_window_ms => {}
                _ => return self.reject(&inb, None, Reject::Stale, now),
            }
        }
        self.verify_stage(inb, now);
    }

    fn verify_stage(&mut self, inb: Inbound, now: u64) {
        let locator = match (&inb.data.sig_info.sig_type, &inb.data.sig_info.key_locator) {
            (SigType::EcdsaSha256, Some(l)) => l.clone(),
            _ => return self.reject(&inb, None, Reject::BadSignature, now),
        };
        let Some(cert) = self.certs.get(&locator).cloned() else {
            return self.park_for_cert(locator, inb, now);
        };
        if !crypto::verify_data(&inb.data, cert.public_key()) {
            return self.reject(&inb, Some(cert.subject().clone()), Reject::BadSignature, now);
        }
        if !self.policies.snapshot().check_produce(cert.subject(), &inb.data.name).is_allow() {
            return self.reject(&inb, Some(cert.subject().clone()), Reject::PolicyDenied, now);
        }
        self.decrypt_stage(Verified { inb, cert }, now);
    }

    fn park_for_cert(&mut self, locator: Name, inb: Inbound, now: u64) {
        let parked: usize = self.parked_cert.values().map(Vec::len).sum();
        if parked >= MAX_PARKED || crypto::identity_of_key_name(&locator).is_none() {
            return self.reject(&inb, None, Reject::UnknownSigner, now);
        }
        if !self.cert_fetches.contains_key(&locator) {
            let purpose = Purpose::Cert(locator.clone());
            match self.express(Interest::new(locator.clone(), [0; 4]), self.cfg.retx_budget, purpose, now) {
                Some(id) => {
                    self.cert_fetches.insert(locator.clone(), id);
                }
                None => return self.reject(&inb, None, Reject::UnknownSigner, now),
            }
        }
        self.parked_names.insert(inb.data.name.clone());
        self.parked_cert.entry(locator).or_default().push(inb);
    }

    fn decrypt_stage(&mut self, v: Verified, now: u64) {
        let signer = v.cert.subject().clone();
        let Ok((key_name, ct)) = open_envelope_header(&v.inb.data.content) else {
            return self.reject(&v.inb, Some(signer), Reject::Malformed, now);
        };
        let Some((scope, KeyKind::Dkey, rest)) = keystore::split_key_name(&key_name) else {
            return self.reject(&v.inb, Some(signer), Reject::Malformed, now);
        };
        let (Some(version), 1) = (rest.get(0).and_then(NameComponent::timestamp), rest.len()) else {
            return self.reject(&v.inb, Some(signer), Reject::Malformed, now);
        };
        let dkey = scope.with(naming::DKEY);
        let key = match self.keys.get(&dkey, version) {
            Some(k) => k.clone(),
            None => return self.await_key(dkey, key_name, v, now),
        };
        self.stats.decrypt_attempts += 1;
        let Ok(plain) = key.decrypt(&ct) else {
            return self.reject(&v.inb, Some(signer), Reject::DecryptFailed, now);
        };
        let Ok((payload, hidden)) = parse_plaintext(&plain) else {
            return self.reject(&v.inb, Some(signer), Reject::Malformed, now);
        };
        let name = v.inb.data.name.clone();
        let clear_name = match hidden {
            Some(h) if name.len() >= 2 => name.prefix(name.len() - 2).child(h).child(name.last().expect("len").clone()),
            _ => name.clone(),
        };
        self.seen.insert(name.clone(), now);
        self.stats.delivered += 1;
        self.audit.push(AuditRecord {
            at: now,
            kind: v.inb.kind,
            name: name.clone(),
            signer: Some(signer.clone()),
            outcome: Outcome::Delivered,
        });
        self.deliveries.push_back(Delivery {
            kind: v.inb.kind,
            subscription: v.inb.sub,
            name,
            clear_name,
            producer: signer,
            payload,
            key: key_name,
            signer_cert: v.cert,
            received_at: now,
        });
    }

    fn await_key(&mut self, dkey: Name, versioned: Name, v: Verified, now: u64) {
        let signer = v.cert.subject().clone();
        let me = self.name.clone().expect("bootstrapped");
        if !self.policies.snapshot().check_decrypt(&me, &dkey).is_allow() {
            return self.reject(&v.inb, Some(signer), Reject::AccessDenied, now);
        }
        let parked: usize = self.parked_key.values().map(Vec::len).sum();
        if self.unavailable.contains_key(&versioned) || self.pairwise.is_none() || parked >= MAX_PARKED {
            return self.reject(&v.inb, Some(signer), Reject::KeyUnavailable, now);
        }
        if !self.key_fetches.contains_key(&versioned) {
            let version = versioned.last().cloned().expect("versioned");
            let interest = Interest::new(naming::sealed_key_prefix(&dkey, &me).child(version), [0; 4]);
            let purpose = Purpose::Key { versioned: Some(versioned.clone()), renewal: None };
            match self.express(interest, self.cfg.retx_budget, purpose, now) {
                Some(id) => {
                    self.key_fetches.insert(versioned.clone(), id);
                }
                None => return self.reject(&v.inb, Some(signer), Reject::KeyUnavailable, now),
            }
        }
        self.parked_names.insert(v.inb.data.name.clone());
        self.parked_key.entry(versioned).or_default().push(v);
    }

    fn next_renewal(&self, now: u64) -> Option<u64> {
        if !self.is_bootstrapped() || self.pairwise.is_none() {
            return None;
        }
        self.keys
            .names()
            .filter(|k| self.may_renew(k))
            .filter_map(|k| self.renewal_plan(k, now).map(|(at, _)| at))
            .min()
    }
}

impl Node for Entity {
    fn face(&self) -> FaceId {
        self.fwd.face()
    }

    fn on_frame(&mut self, wire: &[u8], now: u64) {
        self.clock = self.clock.max(now);
        self.fwd.on_frame(wire, now);
        self.drain(now);
    }

    fn on_tick(&mut self, now: u64) {
        self.tick(now);
    }

    fn next_deadline(&self) -> Option<u64> {
        if self.fwd.is_closed() {
            return None;
        }
        let now = self.clock;
        let polls = self.content_subs.values().filter(|s| s.interval > 0 && self.is_bootstrapped()).map(|s| s.next_poll).min();
        [self.fwd.next_deadline(), self.notifications.front().map(|(t, _)| *t), polls, self.next_renewal(now)]
            .into_iter()
            .flatten()
            .min()
    }

    fn take_outbox(&mut self) -> Vec<Vec<u8>> {
        self.fwd.take_outbox()
    }
}

/// Content of a protected Data: the versioned DKEY name and the ciphertext
/// of the payload (plus the clear trailing component when obfuscated).
pub fn seal_envelope(
    key: &SymmetricKey,
    payload: &[u8],
    hidden: Option<&NameComponent>,
    rng: &mut impl rand_core::CryptoRngCore,
) -> Vec<u8> {
    let mut plain = tlv::encode_tlv(app::PAYLOAD, payload);
    if let Some(h) = hidden {
        tlv::write_tlv(&mut plain, app::HIDDEN_ID, h.as_bytes());
    }
    let scope = keystore::split_key_name(&key.name).map(|(s, _, _)| s).unwrap_or_else(|| key.name.clone());
    let dkey = scope.with(naming::DKEY).child(NameComponent::from_timestamp(key.version));
    let mut out = tlv::encode_tlv(app::KEY_NAME, &tlv::encode_name(&dkey));
    tlv::write_tlv(&mut out, app::CIPHERTEXT, &key.encrypt(&plain, rng));
    out
}

pub fn open_envelope_header(content: &[u8]) -> Result<(Name, Vec<u8>), tlv::TlvError> {
    let f = Fields::parse(content)?;
    let key = tlv::decode_name(f.require(app::KEY_NAME, "missing key name")?)?;
    Ok((key, f.require(app::CIPHERTEXT, "missing ciphertext")?.to_vec()))
}

fn parse_plaintext(plain: &[u8]) -> Result<(Vec<u8>, Option<NameComponent>), tlv::TlvError> {
    let f = Fields::parse(plain)?;
    let payload = f.require(app::PAYLOAD, "missing payload")?.to_vec();
    let hidden = match f.get(app::HIDDEN_ID) {
        Some(h) => Some(NameComponent::new(h.to_vec()).map_err(|_| tlv::TlvError::MalformedTlv("bad hidden id"))?),
        None => None,
    };
    Ok((payload, hidden))
}
