//! The controller's state file: one versioned JSON document. Public parts
//! (names, certificates, rules, events) are plain; private keys, pairwise
//! secrets, bootstrap tokens and key material live in a sealed blob
//! encrypted under a key derived from the passphrase.

use std::collections::BTreeMap;
use std::path::Path;

use hmac::{Hmac, Mac};
use rand_core::{OsRng, RngCore};
use serde::{Deserialize, Serialize};
use sha2::Sha256;
use sovereign_core::bootstrap::OobToken;
use sovereign_core::controller::{Approval, AuditEvent, EntityRecord, EventKind, HomeState, RuleEntry};
use sovereign_core::crypto::{self, Certificate, Keypair};
use sovereign_core::keystore::{KeyMaterial, KeyStore};
use sovereign_core::name::Name;

pub const FORMAT: &str = "sovereign-home";
pub const FORMAT_VERSION: u32 = 1;
pub const DEFAULT_KDF_ITERATIONS: u32 = 200_000;

#[derive(Debug, thiserror::Error)]
pub enum StateError {
    #[error("cannot read or write state file: {0}")]
    Io(#[from] std::io::Error),
    #[error("state file is not valid: {0}")]
    Json(#[from] serde_json::Error),
    #[error("unsupported state file format {0:?} version {1}")]
    Format(String, u32),
    #[error("wrong passphrase or damaged secrets")]
    Passphrase,
    #[error("state file field {0} is invalid")]
    Field(&'static str),
}

#[derive(Debug, Serialize, Deserialize)]
struct File {
    format: String,
    version: u32,
    home: String,
    anchor_cert: String,
    controller_cert: String,
    registry: Vec<RecordFile>,
    approvals: Vec<ApprovalFile>,
    rules: Vec<RuleFile>,
    next_rule_id: u64,
    policy_version: u64,
    services: Vec<String>,
    key_lifetime_ms: u64,
    key_horizon: usize,
    key_versions: BTreeMap<String, Vec<VersionFile>>,
    events: Vec<EventFile>,
    next_event_seq: u64,
    sealed: Sealed,
}

#[derive(Debug, Serialize, Deserialize)]
struct RecordFile {
    name: String,
    label: String,
    service: String,
    location: String,
    certificate: String,
    bootstrapped_at: u64,
}

#[derive(Debug, Serialize, Deserialize)]
struct ApprovalFile {
    label: String,
    service: String,
    location: String,
    approved_at: u64,
}

#[derive(Debug, Serialize, Deserialize)]
struct RuleFile {
    id: u64,
    rule: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct VersionFile {
    version: u64,
    not_after: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EventFile {
    pub seq: u64,
    pub ts: u64,
    pub kind: String,
    pub subject: String,
    pub object: String,
    pub outcome: String,
}

impl From<&AuditEvent> for EventFile {
    fn from(e: &AuditEvent) -> Self {
        Self {
            seq: e.seq,
            ts: e.ts,
            kind: e.kind.to_string(),
            subject: e.subject.clone(),
            object: e.object.clone(),
            outcome: e.outcome.clone(),
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct Sealed {
    kdf: String,
    iterations: u32,
    salt: String,
    ciphertext: String,
    tag: String,
}

/// Everything secret, hex encoded.
#[derive(Debug, Default, Serialize, Deserialize)]
struct Secrets {
    anchor: String,
    controller: String,
    pairwise: BTreeMap<String, String>,
    tokens: BTreeMap<String, String>,
    keys: BTreeMap<String, Vec<String>>,
}

fn derive(passphrase: &str, salt: &[u8], iterations: u32) -> ([u8; 32], [u8; 32]) {
    let mut out = [0u8; 64];
    pbkdf2::pbkdf2_hmac::<Sha256>(passphrase.as_bytes(), salt, iterations, &mut out);
    let (mut enc, mut mac) = ([0u8; 32], [0u8; 32]);
    enc.copy_from_slice(&out[..32]);
    mac.copy_from_slice(&out[32..]);
    (enc, mac)
}

fn tag(mac_key: &[u8; 32], ct: &[u8]) -> Vec<u8> {
    let mut m = <Hmac<Sha256> as Mac>::new_from_slice(mac_key).expect("any key length");
    m.update(ct);
    m.finalize().into_bytes().to_vec()
}

fn unhex<const N: usize>(s: &str, field: &'static str) -> Result<[u8; N], StateError> {
    hex::decode(s).ok().and_then(|v| v.try_into().ok()).ok_or(StateError::Field(field))
}

fn name(s: &str, field: &'static str) -> Result<Name, StateError> {
    s.parse().map_err(|_| StateError::Field(field))
}

fn cert(s: &str, field: &'static str) -> Result<Certificate, StateError> {
    let bytes = hex::decode(s).map_err(|_| StateError::Field(field))?;
    Certificate::decode(&bytes).map_err(|_| StateError::Field(field))
}

/// Serializes `state`, sealing secrets under `passphrase`.
pub fn to_json(state: &HomeState, passphrase: &str, iterations: u32) -> Result<String, StateError> {
    let mut secrets = Secrets {
        anchor: hex::encode(state.anchor.secret_bytes()),
        controller: hex::encode(state.controller_identity.secret_bytes()),
        ..Secrets::default()
    };
    for r in state.registry.values() {
        secrets.pairwise.insert(r.name.to_uri(), hex::encode(r.pairwise));
    }
    for (label, a) in &state.approvals {
        secrets.tokens.insert(label.clone(), a.token.secret_hex());
    }
    let mut key_versions = BTreeMap::new();
    for scope in state.keys.scopes() {
        let list = state.keys.versions(scope);
        secrets.keys.insert(scope.to_uri(), list.iter().map(|k| hex::encode(k.bytes)).collect());
        key_versions.insert(
            scope.to_uri(),
            list.iter().map(|k| VersionFile { version: k.version, not_after: k.not_after }).collect(),
        );
    }
    let mut salt = [0u8; 16];
    OsRng.fill_bytes(&mut salt);
    let (enc, mac) = derive(passphrase, &salt, iterations);
    let ct = crypto::encrypt(&enc, &serde_json::to_vec(&secrets)?, &mut OsRng);
    let file = File {
        format: FORMAT.into(),
        version: FORMAT_VERSION,
        home: state.home.to_uri(),
        anchor_cert: hex::encode(state.anchor_cert.encode()),
        controller_cert: hex::encode(state.controller_cert.encode()),
        registry: state
            .registry
            .values()
            .map(|r| RecordFile {
                name: r.name.to_uri(),
                label: r.label.clone(),
                service: r.service.clone(),
                location: r.location.clone(),
                certificate: hex::encode(r.certificate.encode()),
                bootstrapped_at: r.bootstrapped_at,
            })
            .collect(),
        approvals: state
            .approvals
            .iter()
            .map(|(label, a)| ApprovalFile {
                label: label.clone(),
                service: a.service.clone(),
                location: a.location.clone(),
                approved_at: a.approved_at,
            })
            .collect(),
        rules: state.rules.iter().map(|r| RuleFile { id: r.id, rule: r.rule.to_string() }).collect(),
        next_rule_id: state.next_rule_id,
        policy_version: state.policy_version,
        services: state.services.clone(),
        key_lifetime_ms: state.keys.lifetime_ms,
        key_horizon: state.keys.horizon,
        key_versions,
        events: state.events.iter().map(EventFile::from).collect(),
        next_event_seq: state.next_event_seq,
        sealed: Sealed {
            kdf: "pbkdf2-hmac-sha256".into(),
            iterations,
            salt: hex::encode(salt),
            tag: hex::encode(tag(&mac, &ct)),
            ciphertext: hex::encode(ct),
        },
    };
    Ok(serde_json::to_string_pretty(&file)?)
}

pub fn from_json(text: &str, passphrase: &str) -> Result<HomeState, StateError> {
    let f: File = serde_json::from_str(text)?;
    if f.format != FORMAT || f.version != FORMAT_VERSION {
        return Err(StateError::Format(f.format, f.version));
    }
    let salt = hex::decode(&f.sealed.salt).map_err(|_| StateError::Field("sealed.salt"))?;
    let ct = hex::decode(&f.sealed.ciphertext).map_err(|_| StateError::Field("sealed.ciphertext"))?;
    let (enc, mac) = derive(passphrase, &salt, f.sealed.iterations);
    let want = hex::decode(&f.sealed.tag).map_err(|_| StateError::Field("sealed.tag"))?;
    if !crypto::hmac_verify(&mac, &ct, &want) {
        return Err(StateError::Passphrase);
    }
    let plain = crypto::decrypt(&enc, &ct).map_err(|_| StateError::Passphrase)?;
    let s: Secrets = serde_json::from_slice(&plain)?;

    let key = |hexed: &str, field| -> Result<Keypair, StateError> {
        Keypair::from_secret_bytes(&unhex::<32>(hexed, field)?).map_err(|_| StateError::Field(field))
    };
    let mut registry = BTreeMap::new();
    for r in &f.registry {
        let n = name(&r.name, "registry.name")?;
        let pw = s.pairwise.get(&r.name).ok_or(StateError::Field("pairwise"))?;
        registry.insert(
            n.clone(),
            EntityRecord {
                name: n,
                label: r.label.clone(),
                service: r.service.clone(),
                location: r.location.clone(),
                certificate: cert(&r.certificate, "registry.certificate")?,
                pairwise: unhex(pw, "pairwise")?,
                bootstrapped_at: r.bootstrapped_at,
            },
        );
    }
    let mut approvals = BTreeMap::new();
    for a in &f.approvals {
        let secret = s.tokens.get(&a.label).ok_or(StateError::Field("tokens"))?;
        approvals.insert(
            a.label.clone(),
            Approval {
                token: OobToken::from_hex(a.label.clone(), secret).ok_or(StateError::Field("tokens"))?,
                service: a.service.clone(),
                location: a.location.clone(),
                approved_at: a.approved_at,
            },
        );
    }
    let mut rules = Vec::new();
    for r in &f.rules {
        rules.push(RuleEntry { id: r.id, rule: r.rule.parse().map_err(|_| StateError::Field("rules"))? });
    }
    let mut scopes = BTreeMap::new();
    for (scope, versions) in &f.key_versions {
        let bytes = s.keys.get(scope).ok_or(StateError::Field("keys"))?;
        if bytes.len() != versions.len() {
            return Err(StateError::Field("keys"));
        }
        let list = versions
            .iter()
            .zip(bytes)
            .map(|(v, b)| Ok(KeyMaterial { version: v.version, bytes: unhex(b, "keys")?, not_after: v.not_after }))
            .collect::<Result<Vec<_>, StateError>>()?;
        scopes.insert(name(scope, "key_versions")?, list);
    }
    let mut events = Vec::new();
    for e in &f.events {
        events.push(AuditEvent {
            seq: e.seq,
            ts: e.ts,
            kind: e.kind.parse::<EventKind>().map_err(|_| StateError::Field("events.kind"))?,
            subject: e.subject.clone(),
            object: e.object.clone(),
            outcome: e.outcome.clone(),
        });
    }
    Ok(HomeState {
        home: name(&f.home, "home")?,
        anchor: key(&s.anchor, "anchor")?,
        anchor_cert: cert(&f.anchor_cert, "anchor_cert")?,
        controller_identity: key(&s.controller, "controller")?,
        controller_cert: cert(&f.controller_cert, "controller_cert")?,
        registry,
        approvals,
        rules,
        next_rule_id: f.next_rule_id,
        policy_version: f.policy_version,
        services: f.services,
        keys: KeyStore::from_parts(f.key_lifetime_ms, f.key_horizon, scopes),
        events,
        next_event_seq: f.next_event_seq,
    })
}

/// Writes atomically: a sibling temp file renamed over the target.
pub fn save(path: &Path, state: &HomeState, passphrase: &str, iterations: u32) -> Result<(), StateError> {
    let text = to_json(state, passphrase, iterations)?;
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, text)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load(path: &Path, passphrase: &str) -> Result<HomeState, StateError> {
    from_json(&std::fs::read_to_string(path)?, passphrase)
}
