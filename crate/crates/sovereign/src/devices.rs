//! Demo device behaviors. Each wraps an [`Entity`] and reacts to what its
//! pipeline delivers; they are minimal stand-ins for real appliances.

use std::fmt;
use std::str::FromStr;

use sovereign_core::bootstrap::OobToken;
use sovereign_core::controller::Controller;
use sovereign_core::entity::{Delivery, Entity, EntityConfig, PubSubError, TopicKind};
use sovereign_core::name::Name;
use sovereign_core::naming;
use sovereign_core::policy::PolicySet;
use sovereign_core::sim::Tap;
use sovereign_core::transport::{FaceId, Node};

pub const DEFAULT_SETPOINT: f64 = 75.0;
pub const DEFAULT_SENSOR_PERIOD_MS: u64 = 1000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Role {
    /// Temperature sensor: publishes a reading every period.
    Temp,
    /// Air conditioner: cools when the room reading exceeds its setpoint
    /// and asks the room's windows to close.
    AirCon,
    Window,
    Lock,
    Switch,
    Light,
    /// Contact sensor: publishes a touch event when poked by the script.
    Contact,
    /// Turns the room's switches on when a contact sensor is touched.
    Automation,
    /// A plain application identity that issues commands on request.
    App,
    /// The passive in-network store for keys and policies.
    Store,
}

impl Role {
    pub const ALL: [Role; 10] = [
        Role::Temp,
        Role::AirCon,
        Role::Window,
        Role::Lock,
        Role::Switch,
        Role::Light,
        Role::Contact,
        Role::Automation,
        Role::App,
        Role::Store,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Role::Temp => "temp",
            Role::AirCon => "aircon",
            Role::Window => "window",
            Role::Lock => "lock",
            Role::Switch => "switch",
            Role::Light => "light",
            Role::Contact => "contact",
            Role::Automation => "automation",
            Role::App => "app",
            Role::Store => "store",
        }
    }

    /// Service component the controller files this role under.
    pub fn service(self) -> &'static str {
        match self {
            Role::Temp => "TEMP",
            Role::AirCon => "AirCon",
            Role::Window => "Window",
            Role::Lock => "LOCK",
            Role::Switch => "Switch",
            Role::Light => "Light",
            Role::Contact => "Contact",
            Role::Automation | Role::App => "APP",
            Role::Store => "REPO",
        }
    }

    fn executes_commands(self) -> bool {
        matches!(self, Role::AirCon | Role::Window | Role::Lock | Role::Switch | Role::Light)
    }
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Role {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        Self::ALL.into_iter().find(|r| r.as_str() == s).ok_or_else(|| format!("unknown role {s:?}"))
    }
}

/// The end-to-end property for delivered messages: the signer's cert chains
/// to the anchor, the signer may produce the wire name, and the receiver is
/// allowed the decryption key that opened it.
pub fn check_audit_invariant(e: &Entity, deliveries: &[Delivery]) -> Result<(), String> {
    let anchor = e.anchor().ok_or("not bootstrapped")?;
    let me = e.name().ok_or("unnamed")?;
    let policies = e.policies();
    for d in deliveries {
        if !d.signer_cert.verify(anchor.public_key()) {
            return Err(format!("{}: signer {} does not chain to the anchor", d.name, d.signer_cert.name()));
        }
        if d.signer_cert.subject() != &d.producer {
            return Err(format!("{}: certificate subject is not the producer", d.name));
        }
        if !policies.check_produce(&d.producer, &d.name).is_allow() {
            return Err(format!("{}: {} may not produce it", d.name, d.producer));
        }
        let dkey = d.key.prefix(d.key.len().saturating_sub(1));
        if !policies.check_decrypt(me, &dkey).is_allow() {
            return Err(format!("{}: {me} may not hold {dkey}", d.name));
        }
    }
    Ok(())
}

/// Something a device physically did.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Actuation {
    pub at: u64,
    pub action: String,
    pub issuer: Name,
}

pub struct Device {
    pub label: String,
    pub role: Role,
    pub entity: Entity,
    pub actuations: Vec<Actuation>,
    /// Every delivery, in order.
    pub received: Vec<Delivery>,
    /// Deliveries that broke the audit invariant, checked against the
    /// policies held when each arrived.
    pub audit_violations: Vec<String>,
    /// Failed publish attempts from behaviors or script actions.
    pub errors: Vec<(u64, PubSubError)>,
    pub setpoint: f64,
    pub reading: f64,
    pub period_ms: u64,
    running: bool,
    ready: bool,
    compromised: bool,
    next_publish: Option<u64>,
}

impl Device {
    pub fn new(label: &str, role: Role, token: OobToken, mut cfg: EntityConfig) -> Self {
        cfg.store = role == Role::Store;
        let mut entity = Entity::new(cfg, token);
        if role.executes_commands() {
            entity.subscribe_commands();
        }
        Self {
            label: label.to_string(),
            role,
            entity,
            actuations: Vec::new(),
            received: Vec::new(),
            audit_violations: Vec::new(),
            errors: Vec::new(),
            setpoint: DEFAULT_SETPOINT,
            reading: 70.0,
            period_ms: DEFAULT_SENSOR_PERIOD_MS,
            running: false,
            ready: false,
            compromised: false,
            next_publish: None,
        }
    }

    fn location(&self) -> Option<(Name, String, String)> {
        let me = self.entity.name()?;
        let home = self.entity.home()?;
        let loc = me.get(home.len() + 1)?.as_str()?.to_string();
        let id = me.last()?.as_str()?.to_string();
        Some((home.clone(), loc, id))
    }

    fn setup(&mut self, now: u64) {
        let Some((home, loc, _)) = self.location() else { return };
        match self.role {
            Role::AirCon => {
                self.entity.subscribe_content(home.with("TEMP").with(naming::CONTENT).with(&loc), now);
            }
            Role::Automation => {
                self.entity.subscribe_content(home.with("Contact").with(naming::CONTENT).with(&loc), now);
            }
            Role::Temp => self.next_publish = Some(now),
            _ => {}
        }
    }

    pub fn publish_reading(&mut self, now: u64) {
        let Some((home, loc, id)) = self.location() else { return };
        let topic = home.with("TEMP").with(naming::CONTENT).with(&loc).with(&id).with("temp");
        let payload = format!("{:.1}", self.reading);
        if let Err(e) = self.entity.publish_content(&topic, payload.as_bytes(), now) {
            self.errors.push((now, e));
        }
    }

    pub fn touch(&mut self, now: u64) {
        let Some((home, loc, id)) = self.location() else { return };
        let topic = home.with("Contact").with(naming::CONTENT).with(&loc).with(&id).with("touch");
        if let Err(e) = self.entity.publish_content(&topic, b"touched", now) {
            self.errors.push((now, e));
        }
    }

    pub fn command(&mut self, topic: &Name, payload: &[u8], now: u64) {
        if let Err(e) = self.entity.publish_command(topic, payload, now) {
            self.errors.push((now, e));
        }
    }

    /// Models a compromised device: it stops consulting its own policies
    /// and will sign anything under the home prefix with whatever keys it
    /// holds. Receivers still enforce theirs.
    pub fn compromise(&mut self) {
        self.compromised = true;
        self.ignore_local_policy();
    }

    pub fn is_compromised(&self) -> bool {
        self.compromised
    }

    fn ignore_local_policy(&mut self) {
        let Some(home) = self.entity.home().cloned() else { return };
        if self.entity.policy_version() == Some(u64::MAX) {
            return;
        }
        let text = format!("{home} | produce | {home}\n");
        if let Ok(mut set) = PolicySet::from_text(&text) {
            // Highest version, so controller updates never replace it.
            set.version = u64::MAX;
            self.entity.set_policies(set);
        }
    }

    fn actuate(&mut self, at: u64, action: &str, issuer: &Name) {
        self.actuations.push(Actuation { at, action: action.to_string(), issuer: issuer.clone() });
    }

    fn on_delivery(&mut self, d: &Delivery, now: u64) {
        match d.kind {
            TopicKind::Command => {
                let cmd = d
                    .clear_name
                    .position(naming::CMD)
                    .and_then(|i| d.clear_name.get(i + 1))
                    .and_then(|c| c.as_str())
                    .unwrap_or("")
                    .to_string();
                if self.role == Role::AirCon && cmd == "set-temp" {
                    if let Some(v) = std::str::from_utf8(&d.payload).ok().and_then(|s| s.trim().parse().ok()) {
                        self.setpoint = v;
                    }
                }
                self.actuate(d.received_at, &cmd, &d.producer);
            }
            TopicKind::Content => match self.role {
                Role::AirCon => {
                    let Some(t) = std::str::from_utf8(&d.payload).ok().and_then(|s| s.trim().parse::<f64>().ok()) else {
                        return;
                    };
                    if t > self.setpoint && !self.running {
                        self.running = true;
                        self.actuate(d.received_at, "cool-on", &d.producer);
                        if let Some((home, loc, _)) = self.location() {
                            let topic = home.with("Window").with(&loc).with(naming::CMD).with("close");
                            self.command(&topic, b"close", now);
                        }
                    } else if t <= self.setpoint - 1.0 && self.running {
                        self.running = false;
                        self.actuate(d.received_at, "cool-off", &d.producer);
                    }
                }
                Role::Automation => {
                    if let Some((home, loc, _)) = self.location() {
                        let topic = home.with("Switch").with(&loc).with(naming::CMD).with("switch-on");
                        self.command(&topic, b"on", now);
                    }
                }
                _ => {}
            },
        }
    }

    fn react(&mut self, now: u64) {
        if !self.entity.is_bootstrapped() {
            return;
        }
        if !self.ready {
            self.ready = true;
            self.setup(now);
        }
        if self.compromised {
            self.ignore_local_policy();
        }
        for d in self.entity.take_deliveries() {
            // A compromised device's own policies prove nothing.
            if !self.compromised {
                if let Err(v) = check_audit_invariant(&self.entity, std::slice::from_ref(&d)) {
                    self.audit_violations.push(v);
                }
            }
            self.on_delivery(&d, now);
            self.received.push(d);
        }
        while self.next_publish.is_some_and(|t| t <= now) {
            self.publish_reading(now);
            self.next_publish = self.next_publish.map(|t| t + self.period_ms.max(1));
        }
    }
}

impl Node for Device {
    fn face(&self) -> FaceId {
        self.entity.face()
    }

    fn on_frame(&mut self, wire: &[u8], now: u64) {
        self.entity.on_frame(wire, now);
        self.react(now);
    }

    fn on_tick(&mut self, now: u64) {
        self.entity.on_tick(now);
        self.react(now);
    }

    fn next_deadline(&self) -> Option<u64> {
        if self.entity.forwarder().is_closed() {
            return None;
        }
        [self.entity.next_deadline(), self.next_publish].into_iter().flatten().min()
    }

    fn take_outbox(&mut self) -> Vec<Vec<u8>> {
        self.entity.take_outbox()
    }
}

/// A participant in a scenario.
pub enum Member {
    Controller(Box<Controller>),
    Device(Box<Device>),
    Tap(Tap),
}

impl Member {
    pub fn controller(&self) -> Option<&Controller> {
        match self {
            Member::Controller(c) => Some(c),
            _ => None,
        }
    }

    pub fn controller_mut(&mut self) -> Option<&mut Controller> {
        match self {
            Member::Controller(c) => Some(c),
            _ => None,
        }
    }

    pub fn device(&self) -> Option<&Device> {
        match self {
            Member::Device(d) => Some(d),
            _ => None,
        }
    }

    pub fn device_mut(&mut self) -> Option<&mut Device> {
        match self {
            Member::Device(d) => Some(d),
            _ => None,
        }
    }

    pub fn entity(&self) -> Option<&Entity> {
        match self {
            Member::Controller(c) => Some(c.entity()),
            Member::Device(d) => Some(&d.entity),
            Member::Tap(_) => None,
        }
    }
}

impl Node for Member {
    fn face(&self) -> FaceId {
        match self {
            Member::Controller(c) => c.face(),
            Member::Device(d) => d.face(),
            Member::Tap(t) => t.face,
        }
    }

    fn on_frame(&mut self, wire: &[u8], now: u64) {
        match self {
            Member::Controller(c) => c.on_frame(wire, now),
            Member::Device(d) => d.on_frame(wire, now),
            Member::Tap(t) => t.frames.push((now, wire.to_vec())),
        }
    }

    fn on_tick(&mut self, now: u64) {
        match self {
            Member::Controller(c) => c.on_tick(now),
            Member::Device(d) => d.on_tick(now),
            Member::Tap(_) => {}
        }
    }

    fn next_deadline(&self) -> Option<u64> {
        match self {
            Member::Controller(c) => c.next_deadline(),
            Member::Device(d) => d.next_deadline(),
            Member::Tap(_) => None,
        }
    }

    fn take_outbox(&mut self) -> Vec<Vec<u8>> {
        match self {
            Member::Controller(c) => c.take_outbox(),
            Member::Device(d) => d.take_outbox(),
            Member::Tap(_) => Vec::new(),
        }
    }
}
