//! Naming conventions for entities, commands, content, keys and policies.
//!
//! | Kind     | Convention                                                     |
//! |----------|----------------------------------------------------------------|
//! | Entity   | `/<home>/<service>/<location>/<entity-id>`                     |
//! | Command  | `/<home>/<service>/<scope...>/CMD/<cmd-id>`, scope of 0 to 2 parts |
//! | Content  | `/<home>/<service>/CONTENT/<location>/<entity-id>/<content-id>` |
//! | Key      | `/<home>/<scope>/EKEY`, `/<home>/<scope>/DKEY`                 |
//! | Policy   | `/<home>/RULE/<location>/<entity-id>`                          |
//!
//! Materialized command, content and policy Data append a `t=<unix-millis>`
//! component. Identity keys live under `<identity>/KEY/<key-id>`.

use alloc::string::String;
use alloc::vec::Vec;

use rand_core::CryptoRngCore;

use crate::crypto::hmac_sha256;
use crate::name::{Name, NameComponent};

pub const CMD: &str = "CMD";
pub const CONTENT: &str = "CONTENT";
pub const EKEY: &str = "EKEY";
pub const DKEY: &str = "DKEY";
pub const RULE: &str = "RULE";
pub const KEY: &str = "KEY";

/// Words with a fixed meaning in the conventions; never valid as variables.
pub const RESERVED: [&str; 6] = [CMD, CONTENT, EKEY, DKEY, RULE, KEY];

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum NamingError {
    #[error("invalid name component {0:?}")]
    InvalidComponent(String),
    #[error("command scope must have 0, 1 or 2 components, got {0}")]
    InvalidScope(usize),
    #[error("no obfuscation key configured")]
    NoObfuscationKey,
    #[error("home prefix must not be empty")]
    EmptyHomePrefix,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum KeyKind {
    Ekey,
    Dkey,
}

impl KeyKind {
    pub fn as_str(self) -> &'static str {
        match self {
            KeyKind::Ekey => EKEY,
            KeyKind::Dkey => DKEY,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NamingContext {
    home_prefix: Name,
    obfuscation_key: Option<[u8; 32]>,
}

/// Validates one variable part of a name.
pub fn component(text: &str) -> Result<NameComponent, NamingError> {
    let bad = || NamingError::InvalidComponent(String::from(text));
    if RESERVED.contains(&text) || text.starts_with("t=") {
        return Err(bad());
    }
    NameComponent::from_text(text).map_err(|_| bad())
}

fn components(parts: &[&str]) -> Result<Vec<NameComponent>, NamingError> {
    parts.iter().map(|p| component(p)).collect()
}

impl NamingContext {
    pub fn new(home_prefix: Name) -> Result<Self, NamingError> {
        if home_prefix.is_empty() {
            return Err(NamingError::EmptyHomePrefix);
        }
        Ok(Self { home_prefix, obfuscation_key: None })
    }

    /// `<label>-<4 hex chars>`, so that homes in one neighborhood differ.
    pub fn with_random_suffix(label: &str, rng: &mut impl CryptoRngCore) -> Result<Self, NamingError> {
        let mut suffix = [0u8; 2];
        rng.fill_bytes(&mut suffix);
        let comp = component(&alloc::format!("{label}-{}", hex::encode(suffix)))?;
        Self::new(Name::from_components(alloc::vec![comp]))
    }

    pub fn with_obfuscation_key(mut self, key: [u8; 32]) -> Self {
        self.obfuscation_key = Some(key);
        self
    }

    pub fn home_prefix(&self) -> &Name {
        &self.home_prefix
    }

    pub fn obfuscation_key(&self) -> Option<&[u8; 32]> {
        self.obfuscation_key.as_ref()
    }

    fn build(&self, parts: Vec<NameComponent>) -> Name {
        let mut n = self.home_prefix.clone();
        for p in parts {
            n.push(p);
        }
        n
    }

    pub fn entity_name(&self, service: &str, location: &str, entity_id: &str) -> Result<Name, NamingError> {
        Ok(self.build(components(&[service, location, entity_id])?))
    }

    /// Command prefix at home (`scope = []`), room (`[room]`) or device
    /// (`[room, device]`) level.
    pub fn command_name(&self, service: &str, scope: &[&str], cmd_id: &str) -> Result<Name, NamingError> {
        Ok(self.command_prefix(service, scope)?.child(component(cmd_id)?))
    }

    pub fn command_prefix(&self, service: &str, scope: &[&str]) -> Result<Name, NamingError> {
        if scope.len() > 2 {
            return Err(NamingError::InvalidScope(scope.len()));
        }
        let mut parts = components(&[service])?;
        parts.extend(components(scope)?);
        Ok(self.build(parts).with(CMD))
    }

    pub fn content_name(
        &self,
        service: &str,
        location: &str,
        entity_id: &str,
        content_id: &str,
    ) -> Result<Name, NamingError> {
        self.content_prefix(service, &[location, entity_id, content_id])
    }

    /// `/<home>/<service>/CONTENT/...` followed by up to three of location,
    /// entity-id and content-id; used as fetch and topic prefixes.
    pub fn content_prefix(&self, service: &str, rest: &[&str]) -> Result<Name, NamingError> {
        if rest.len() > 3 {
            return Err(NamingError::InvalidScope(rest.len()));
        }
        let mut n = self.build(components(&[service])?).with(CONTENT);
        for c in components(rest)? {
            n.push(c);
        }
        Ok(n)
    }

    /// `/<home>/<scope>/EKEY` or `/DKEY`; the scope is a service, optionally
    /// narrowed to a room.
    pub fn key_name(&self, scope: &[&str], kind: KeyKind) -> Result<Name, NamingError> {
        if scope.is_empty() || scope.len() > 2 {
            return Err(NamingError::InvalidScope(scope.len()));
        }
        Ok(self.build(components(scope)?).with(kind.as_str()))
    }

    pub fn policy_name(&self, location: &str, entity_id: &str) -> Result<Name, NamingError> {
        let mut n = self.home_prefix.with(RULE);
        for c in components(&[location, entity_id])? {
            n.push(c);
        }
        Ok(n)
    }

    /// Replaces components at index `keep_prefix_len` and beyond with the
    /// first 8 bytes of HMAC-SHA256(obfuscation key, component), hex encoded.
    pub fn obfuscate(&self, name: &Name, keep_prefix_len: usize) -> Result<Name, NamingError> {
        let key = self.obfuscation_key.as_ref().ok_or(NamingError::NoObfuscationKey)?;
        Ok(obfuscate_with(key, name, keep_prefix_len))
    }

    pub fn classify(&self, name: &Name) -> Option<NameKind> {
        CONVENTIONS
            .iter()
            .find(|row| row.matches(self, name))
            .map(|row| row.kind)
    }
}

pub fn pseudonym(key: &[u8], component: &NameComponent) -> NameComponent {
    let mac = hmac_sha256(key, component.as_bytes());
    NameComponent::new(hex::encode(&mac[..8])).expect("16 hex chars")
}

pub fn obfuscate_with(key: &[u8], name: &Name, keep_prefix_len: usize) -> Name {
    Name::from_components(
        name.components()
            .iter()
            .enumerate()
            .map(|(i, c)| if i < keep_prefix_len { c.clone() } else { pseudonym(key, c) })
            .collect(),
    )
}

/// Appends the `t=<millis>` uniqueness component.
pub fn with_timestamp(name: &Name, millis: u64) -> Name {
    name.child(NameComponent::from_timestamp(millis))
}

/// Appends an entity's name to a key name, as used for sealed per-entity
/// key delivery: `/<home>/TEMP/DKEY/<entity components...>`.
pub fn sealed_key_prefix(key_name: &Name, entity: &Name) -> Name {
    key_name.append(entity)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NameKind {
    Entity,
    Command,
    Content,
    Key,
    Policy,
}

/// One slot of a convention row.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Slot {
    Home,
    Var(&'static str),
    Const(&'static str),
    /// Between `min` and `max` variable components.
    Scope { min: usize, max: usize },
    /// Optional trailing `t=<millis>`.
    Timestamp,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConventionRow {
    pub kind: NameKind,
    pub slots: &'static [Slot],
}

/// Machine-readable convention table, checked in both directions by tests.
pub const CONVENTIONS: [ConventionRow; 6] = [
    ConventionRow {
        kind: NameKind::Entity,
        slots: &[Slot::Home, Slot::Var("service"), Slot::Var("location"), Slot::Var("entity-id")],
    },
    ConventionRow {
        kind: NameKind::Command,
        slots: &[
            Slot::Home,
            Slot::Var("service"),
            Slot::Scope { min: 0, max: 2 },
            Slot::Const(CMD),
            Slot::Var("cmd-id"),
            Slot::Timestamp,
        ],
    },
    ConventionRow {
        kind: NameKind::Content,
        slots: &[
            Slot::Home,
            Slot::Var("service"),
            Slot::Const(CONTENT),
            Slot::Var("location"),
            Slot::Var("entity-id"),
            Slot::Var("content-id"),
            Slot::Timestamp,
        ],
    },
    ConventionRow {
        kind: NameKind::Key,
        slots: &[Slot::Home, Slot::Scope { min: 1, max: 2 }, Slot::Const(EKEY)],
    },
    ConventionRow {
        kind: NameKind::Key,
        slots: &[Slot::Home, Slot::Scope { min: 1, max: 2 }, Slot::Const(DKEY)],
    },
    ConventionRow {
        kind: NameKind::Policy,
        slots: &[Slot::Home, Slot::Const(RULE), Slot::Var("location"), Slot::Var("entity-id"), Slot::Timestamp],
    },
];

fn is_variable(c: &NameComponent) -> bool {
    c.as_str().map(|s| component(s).is_ok()).unwrap_or(false)
}

impl ConventionRow {
    pub fn matches(&self, ctx: &NamingContext, name: &Name) -> bool {
        if !ctx.home_prefix.is_prefix_of(name) {
            return false;
        }
        match_slots(&self.slots[1..], &name.components()[ctx.home_prefix.len()..])
    }
}

fn match_slots(slots: &[Slot], comps: &[NameComponent]) -> bool {
    match slots.split_first() {
        None => comps.is_empty(),
        Some((Slot::Home, rest)) => match_slots(rest, comps),
        Some((Slot::Var(_), rest)) => comps.first().is_some_and(is_variable) && match_slots(rest, &comps[1..]),
        Some((Slot::Const(k), rest)) => {
            comps.first().is_some_and(|c| c.as_bytes() == k.as_bytes()) && match_slots(rest, &comps[1..])
        }
        Some((Slot::Scope { min, max }, rest)) => (*min..=*max).any(|n| {
            comps.len() >= n && comps[..n].iter().all(is_variable) && match_slots(rest, &comps[n..])
        }),
        Some((Slot::Timestamp, rest)) => {
            match_slots(rest, comps)
                || (comps.first().is_some_and(|c| c.timestamp().is_some()) && match_slots(rest, &comps[1..]))
        }
    }
}
