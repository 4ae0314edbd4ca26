//! Name-based security policies: `<subject, verb, object>` triples over
//! name patterns, their compilation from homeowner rules, the signed
//! distribution container, and evaluation.
//!
//! Policies are permissions only. Evaluation is default-deny and the result
//! does not depend on policy order.

use alloc::string::{String, ToString};
use alloc::sync::Arc;
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use rand_core::CryptoRngCore;

use crate::crypto::{self, CryptoError, Keypair};
use crate::name::{Name, NameComponent};
use crate::naming::{self, NamingError};
use crate::pattern::{NamePattern, PatternComponent, PatternError};
use crate::tlv::{self, app, Data, Fields, SigInfo, SigType, TlvError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Verb {
    Produce,
    Decrypt,
}

impl Verb {
    pub fn as_str(self) -> &'static str {
        match self {
            Verb::Produce => "produce",
            Verb::Decrypt => "decrypt",
        }
    }

    fn code(self) -> u64 {
        match self {
            Verb::Produce => 0,
            Verb::Decrypt => 1,
        }
    }

    fn from_code(c: u64) -> Option<Self> {
        match c {
            0 => Some(Verb::Produce),
            1 => Some(Verb::Decrypt),
            _ => None,
        }
    }
}

impl FromStr for Verb {
    type Err = PolicyError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim() {
            "produce" => Ok(Verb::Produce),
            "decrypt" => Ok(Verb::Decrypt),
            other => Err(PolicyError::BadVerb(other.to_string())),
        }
    }
}

impl fmt::Display for Verb {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Policy {
    pub subject: NamePattern,
    pub verb: Verb,
    pub object: NamePattern,
    pub serial: u64,
}

impl Policy {
    pub fn new(subject: NamePattern, verb: Verb, object: NamePattern) -> Self {
        Self { subject, verb, object, serial: 0 }
    }

    /// The triple without its serial, used to compare policy content.
    pub fn triple(&self) -> (&NamePattern, Verb, &NamePattern) {
        (&self.subject, self.verb, &self.object)
    }
}

impl fmt::Display for Policy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} | {} | {}", self.subject, self.verb, self.object)
    }
}

impl FromStr for Policy {
    type Err = PolicyError;

    /// `<subject> | produce|decrypt | <object>`
    fn from_str(line: &str) -> Result<Self, Self::Err> {
        let parts: Vec<&str> = line.split('|').collect();
        if parts.len() != 3 {
            return Err(PolicyError::BadLine(line.to_string()));
        }
        Ok(Policy::new(parts[0].parse()?, parts[1].parse()?, parts[2].parse()?))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DenyReason {
    NoMatchingPolicy,
    /// Some policy covers the object, but not for this subject.
    SignerMismatch,
}

impl DenyReason {
    pub fn as_str(self) -> &'static str {
        match self {
            DenyReason::NoMatchingPolicy => "no-matching-policy",
            DenyReason::SignerMismatch => "signer-mismatch",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Decision {
    Allow,
    Deny(DenyReason),
}

impl Decision {
    pub fn is_allow(self) -> bool {
        self == Decision::Allow
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum PolicyError {
    #[error("policy line must be `<subject> | <verb> | <object>`: {0:?}")]
    BadLine(String),
    #[error("unknown verb {0:?}")]
    BadVerb(String),
    #[error(transparent)]
    Pattern(#[from] PatternError),
    #[error("rule scope cannot be resolved: {0}")]
    UnresolvableScope(String),
    #[error(transparent)]
    Naming(#[from] NamingError),
    #[error(transparent)]
    Tlv(#[from] TlvError),
    #[error(transparent)]
    Crypto(#[from] CryptoError),
    #[error("policy container signature does not verify against the trust anchor")]
    BadSignature,
    #[error("policy set version {offered} is not newer than installed {installed}")]
    Rollback { offered: u64, installed: u64 },
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct PolicySet {
    pub policies: Vec<Policy>,
    pub version: u64,
}

impl PolicySet {
    pub fn new(policies: Vec<Policy>, version: u64) -> Self {
        Self { policies, version }
    }

    pub fn is_empty(&self) -> bool {
        self.policies.is_empty()
    }

    fn check(&self, verb: Verb, subject: &Name, object: &Name) -> Decision {
        let mut object_seen = false;
        for p in self.policies.iter().filter(|p| p.verb == verb) {
            if p.object.matches(object) {
                if p.subject.matches(subject) {
                    return Decision::Allow;
                }
                object_seen = true;
            }
        }
        Decision::Deny(if object_seen {
            DenyReason::SignerMismatch
        } else {
            DenyReason::NoMatchingPolicy
        })
    }

    /// May `signer` (an identity name, KEY suffix stripped) sign `data_name`?
    pub fn check_produce(&self, signer: &Name, data_name: &Name) -> Decision {
        self.check(Verb::Produce, signer, data_name)
    }

    /// May `entity` receive the decryption key `key_name`?
    pub fn check_decrypt(&self, entity: &Name, key_name: &Name) -> Decision {
        self.check(Verb::Decrypt, entity, key_name)
    }

    /// May `entity` produce anything at or below `prefix`? Used to grant
    /// encryption keys: producing requires encrypting.
    pub fn may_produce_under(&self, entity: &Name, prefix: &Name) -> bool {
        self.policies
            .iter()
            .any(|p| p.verb == Verb::Produce && p.subject.matches(entity) && p.object.may_match_under(prefix))
    }

    /// The subset an entity needs: produce policies it acts under, produce
    /// policies covering anything under `watched` (the namespaces whose
    /// senders it must check), and decrypt policies naming it.
    pub fn filter_for(&self, entity: &Name, watched: &[Name]) -> PolicySet {
        let policies = self
            .policies
            .iter()
            .filter(|p| match p.verb {
                Verb::Decrypt => p.subject.matches(entity),
                Verb::Produce => p.subject.matches(entity) || watched.iter().any(|w| p.object.may_match_under(w)),
            })
            .cloned()
            .collect();
        PolicySet { policies, version: self.version }
    }

    /// One policy per line in the text format, with a version header.
    pub fn to_text(&self) -> String {
        let mut out = alloc::format!("# version {}\n", self.version);
        for p in &self.policies {
            out.push_str(&p.to_string());
            out.push('\n');
        }
        out
    }

    /// Parses the text format. Blank lines and `#` comments are ignored;
    /// a `# version N` comment sets the version.
    pub fn from_text(text: &str) -> Result<Self, PolicyError> {
        let mut set = PolicySet::default();
        for line in text.lines() {
            let line = line.trim();
            if let Some(comment) = line.strip_prefix('#') {
                if let Some(v) = comment.trim().strip_prefix("version ") {
                    set.version = v.trim().parse().map_err(|_| PolicyError::BadLine(line.to_string()))?;
                }
                continue;
            }
            if line.is_empty() {
                continue;
            }
            let mut p: Policy = line.parse()?;
            p.serial = set.policies.len() as u64 + 1;
            set.policies.push(p);
        }
        Ok(set)
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = tlv::encode_tlv(app::POLICY_SET_VERSION, &tlv::encode_nonneg(self.version));
        for p in &self.policies {
            let mut body = tlv::encode_tlv(app::POLICY_SUBJECT, p.subject.to_uri().as_bytes());
            tlv::write_tlv(&mut body, app::POLICY_VERB, &tlv::encode_nonneg(p.verb.code()));
            tlv::write_tlv(&mut body, app::POLICY_OBJECT, p.object.to_uri().as_bytes());
            tlv::write_tlv(&mut body, app::POLICY_SERIAL, &tlv::encode_nonneg(p.serial));
            tlv::write_tlv(&mut out, app::POLICY, &body);
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, PolicyError> {
        let fields = Fields::parse(bytes)?;
        let version = fields.number(app::POLICY_SET_VERSION, "policy set without version")?;
        let mut policies = Vec::new();
        for body in fields.all(app::POLICY) {
            let f = Fields::parse(body)?;
            let text = |t, what| -> Result<NamePattern, PolicyError> {
                let raw = f.require(t, what)?;
                let s = core::str::from_utf8(raw).map_err(|_| TlvError::MalformedTlv("pattern is not UTF-8"))?;
                Ok(s.parse()?)
            };
            let verb = Verb::from_code(f.number(app::POLICY_VERB, "policy without verb")?)
                .ok_or(TlvError::MalformedTlv("unknown policy verb"))?;
            policies.push(Policy {
                subject: text(app::POLICY_SUBJECT, "policy without subject")?,
                verb,
                object: text(app::POLICY_OBJECT, "policy without object")?,
                serial: f.number(app::POLICY_SERIAL, "policy without serial")?,
            });
        }
        Ok(Self { policies, version })
    }
}

/// Which resource of a service a rule grants.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ResourceKind {
    Cmd,
    Content,
    Dkey,
}

impl ResourceKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ResourceKind::Cmd => naming::CMD,
            ResourceKind::Content => naming::CONTENT,
            ResourceKind::Dkey => naming::DKEY,
        }
    }
}

impl FromStr for ResourceKind {
    type Err = PolicyError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "CMD" => Ok(ResourceKind::Cmd),
            "CONTENT" => Ok(ResourceKind::Content),
            "DKEY" => Ok(ResourceKind::Dkey),
            other => Err(PolicyError::UnresolvableScope(alloc::format!("unknown resource kind {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Hash)]
pub struct SubjectScope {
    pub service: Option<String>,
    pub location: Option<String>,
    pub entity: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct ObjectScope {
    pub service: String,
    pub kind: ResourceKind,
    pub location: Option<String>,
}

/// A homeowner rule, e.g. "bedroom AC can read temperature":
/// subject `{AirCon, bedroom}`, verb decrypt, object `{TEMP, CONTENT}`.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct RuleForm {
    pub subject: SubjectScope,
    pub verb: Verb,
    pub object: ObjectScope,
}

impl fmt::Display for SubjectScope {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<&str> = [self.service.as_deref().or(self.location.as_ref().map(|_| "*")), self.location.as_deref(), self.entity.as_deref()]
            .into_iter()
            .flatten()
            .collect();
        if parts.is_empty() {
            f.write_str("*")
        } else {
            f.write_str(&parts.join("/"))
        }
    }
}

impl FromStr for SubjectScope {
    type Err = PolicyError;

    /// `service[/location[/entity]]`, `*/location` or `*`.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let parts: Vec<&str> = s.trim().split('/').collect();
        let own = |p: &str| Some(String::from(p));
        match parts.as_slice() {
            ["*"] => Ok(Self::default()),
            ["*", l] => Ok(Self { service: None, location: own(l), entity: None }),
            [svc] => Ok(Self { service: own(svc), ..Self::default() }),
            [svc, l] => Ok(Self { service: own(svc), location: own(l), entity: None }),
            [svc, l, e] => Ok(Self { service: own(svc), location: own(l), entity: own(e) }),
            _ => Err(PolicyError::BadLine(String::from(s))),
        }
    }
}

impl fmt::Display for ObjectScope {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}", self.service, self.kind.as_str())?;
        match &self.location {
            Some(l) => write!(f, "/{l}"),
            None => Ok(()),
        }
    }
}

impl FromStr for ObjectScope {
    type Err = PolicyError;

    /// `service/KIND[/location]`.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let parts: Vec<&str> = s.trim().split('/').collect();
        match parts.as_slice() {
            [svc, kind] | [svc, kind, _] => Ok(Self {
                service: String::from(*svc),
                kind: kind.parse()?,
                location: parts.get(2).map(|l| String::from(*l)),
            }),
            _ => Err(PolicyError::BadLine(String::from(s))),
        }
    }
}

impl fmt::Display for RuleForm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} {} {}", self.subject, self.verb, self.object)
    }
}

impl FromStr for RuleForm {
    type Err = PolicyError;

    /// `<subject> produce|decrypt <object>`, e.g.
    /// `AirCon/bedroom decrypt TEMP/CONTENT/bedroom`.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let parts: Vec<&str> = s.split_whitespace().collect();
        let [subject, verb, object] = parts.as_slice() else {
            return Err(PolicyError::BadLine(String::from(s)));
        };
        Ok(Self { subject: subject.parse()?, verb: verb.parse()?, object: object.parse()? })
    }
}

/// Services the controller understands out of the box.
pub const DEFAULT_SERVICES: [&str; 10] = [
    "AUTO", "AirCon", "TEMP", "Window", "LOCK", "Light", "Switch", "Contact", "REPO", "APP",
];

fn comp(s: &str) -> Result<PatternComponent, PolicyError> {
    Ok(PatternComponent::Literal(naming::component(s)?))
}

fn home_literals(home: &Name) -> Vec<PatternComponent> {
    home.components().iter().cloned().map(PatternComponent::Literal).collect()
}

fn constant(s: &str) -> PatternComponent {
    PatternComponent::Literal(NameComponent::from_text(s).expect("constant component"))
}

/// Expands a rule into policy triples following the naming conventions.
pub fn compile_rule(home: &Name, rule: &RuleForm, known_services: &[&str]) -> Result<Vec<Policy>, PolicyError> {
    let known = |s: &str| known_services.contains(&s);
    let unresolvable = |msg: String| Err(PolicyError::UnresolvableScope(msg));

    let mut subject = home_literals(home);
    let s = &rule.subject;
    match (&s.service, &s.location, &s.entity) {
        (Some(svc), _, _) if !known(svc) => return unresolvable(alloc::format!("unknown service {svc:?}")),
        (Some(svc), loc, id) => {
            subject.push(comp(svc)?);
            match (loc, id) {
                (Some(l), Some(i)) => {
                    subject.push(comp(l)?);
                    subject.push(comp(i)?);
                }
                (Some(l), None) => subject.push(comp(l)?),
                (None, Some(_)) => return unresolvable("entity given without location".into()),
                (None, None) => {}
            }
        }
        (None, Some(l), None) => {
            subject.push(PatternComponent::AnyOne);
            subject.push(comp(l)?);
        }
        (None, None, None) => {}
        (None, _, Some(_)) => return unresolvable("entity given without service".into()),
    }

    let o = &rule.object;
    if !known(&o.service) {
        return unresolvable(alloc::format!("unknown service {:?}", o.service));
    }
    let mut object = home_literals(home);
    object.push(comp(&o.service)?);
    let loc = o.location.as_deref().map(comp).transpose()?;
    match (rule.verb, o.kind) {
        (Verb::Produce, ResourceKind::Cmd) => {
            object.extend(loc);
            object.push(PatternComponent::AnyZeroOrMore);
            object.push(constant(naming::CMD));
        }
        (Verb::Produce, ResourceKind::Content) => {
            object.push(constant(naming::CONTENT));
            object.extend(loc);
        }
        (Verb::Produce, ResourceKind::Dkey) => {
            return unresolvable("keys are produced only by the controller".into());
        }
        (Verb::Decrypt, _) => {
            // Reading content or commands means holding the scope's DKEY.
            // Without a location, every key scope of the service is covered.
            match loc {
                Some(l) => object.push(l),
                None => object.push(PatternComponent::AnyZeroOrMore),
            }
            object.push(constant(naming::DKEY));
        }
    }
    Ok(alloc::vec![Policy::new(NamePattern::new(subject)?, rule.verb, NamePattern::new(object)?)])
}

/// Builds the signed container Data for one entity's policy subset.
/// The content is encrypted under the entity's pairwise secret.
pub fn seal_policy_set(
    set: &PolicySet,
    name: Name,
    anchor: &Keypair,
    anchor_key_name: Name,
    pairwise: &[u8; 32],
    rng: &mut impl CryptoRngCore,
) -> Data {
    let content = tlv::encode_tlv(app::POLICY_CONTAINER, &crypto::encrypt(pairwise, &set.encode(), rng));
    let mut data = Data::new(name, content, SigInfo { sig_type: SigType::DigestSha256, key_locator: None });
    crypto::sign_data(&mut data, anchor, anchor_key_name);
    data
}

/// Verifies and opens a policy container without installing it.
pub fn open_policy_set(data: &Data, anchor_public: &[u8], pairwise: &[u8; 32]) -> Result<PolicySet, PolicyError> {
    if !crypto::verify_data(data, anchor_public) {
        return Err(PolicyError::BadSignature);
    }
    let fields = Fields::parse(&data.content)?;
    let ct = fields.require(app::POLICY_CONTAINER, "missing policy container")?;
    PolicySet::decode(&crypto::decrypt(pairwise, ct)?)
}

/// An entity's installed policy snapshot. Readers clone the `Arc`; an
/// install swaps in a new snapshot.
#[derive(Debug, Clone, Default)]
pub struct PolicyStore {
    current: Arc<PolicySet>,
    installed: bool,
}

impl PolicyStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn snapshot(&self) -> Arc<PolicySet> {
        self.current.clone()
    }

    pub fn version(&self) -> Option<u64> {
        self.installed.then_some(self.current.version)
    }

    /// Verifies the anchor signature, decrypts, and installs the set if its
    /// version is newer than the installed one.
    pub fn install(&mut self, data: &Data, anchor_public: &[u8], pairwise: &[u8; 32]) -> Result<Arc<PolicySet>, PolicyError> {
        let set = open_policy_set(data, anchor_public, pairwise)?;
        self.install_set(set)
    }

    pub fn install_set(&mut self, set: PolicySet) -> Result<Arc<PolicySet>, PolicyError> {
        if self.installed && set.version <= self.current.version {
            return Err(PolicyError::Rollback { offered: set.version, installed: self.current.version });
        }
        self.current = Arc::new(set);
        self.installed = true;
        Ok(self.current.clone())
    }
}


#[cfg(test)]
mod rule_text_tests {
    use super::*;

    #[test]
    fn rule_text_round_trip() {
        for text in [
            "AirCon/bedroom decrypt TEMP/CONTENT/bedroom",
            "AUTO/controller produce Light/CMD",
            "*/kitchen produce Light/CMD/kitchen",
            "* decrypt LOCK/DKEY",
            "TEMP/bedroom/sensor-1 produce TEMP/CONTENT/bedroom",
        ] {
            let r: RuleForm = text.parse().unwrap();
            assert_eq!(r.to_string(), text);
        }
        assert!("AirCon decrypt".parse::<RuleForm>().is_err());
        assert!("AirCon borrow TEMP/CMD".parse::<RuleForm>().is_err());
        assert!("AirCon decrypt TEMP/WHATEVER".parse::<RuleForm>().is_err());
    }
}
