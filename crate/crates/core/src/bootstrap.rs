//! Entity bootstrapping: a four-message handshake over the broadcast bus.
//!
//! 1. Hello Interest `/sovereign/boot/<label>/<dh-pub-hex>/<tag-hex>` where
//!    the tag is the first 8 bytes of HMAC(token, label ‖ dh-pub).
//! 2. Welcome Data under the same name, HMAC-signed with the token: anchor
//!    certificate, controller DH public key, assigned name, nonce. Both
//!    sides derive the pairwise secret from the ephemeral DH keys.
//! 3. Certificate request Interest `<assigned>/BOOT/CERT/<nonce-hex>`
//!    carrying the identity public key and a signature over the nonce,
//!    encrypted and HMAC-tagged under the pairwise secret.
//! 4. Grant Data, anchor-signed, carrying the certificate, the entity's
//!    policy container and its sealed keys, encrypted under the pairwise
//!    secret.

use alloc::string::{String, ToString};
use alloc::vec::Vec;

use rand_core::CryptoRngCore;

use crate::crypto::{self, Certificate, CryptoError, Keypair};
use crate::name::{Name, NameComponent};
use crate::tlv::{self, app, Data, Fields, Interest, SigInfo, SigType, TlvError};

pub const BOOT_PREFIX: &str = "/sovereign/boot";
pub const HELLO_RETRY_MS: u64 = 2000;
pub const TOKEN_LEN: usize = 16;
pub const NONCE_LEN: usize = 16;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum BootError {
    #[error("bootstrap message is malformed")]
    Malformed,
    #[error("authentication tag does not match the token")]
    TokenMismatch,
    #[error("no approval for this device")]
    UnknownToken,
    #[error("message fails to decrypt under the pairwise secret")]
    DecryptFailure,
    #[error("signature check failed")]
    BadSignature,
    #[error("issued certificate does not match the request")]
    BadCertificate,
    #[error(transparent)]
    Tlv(#[from] TlvError),
    #[error(transparent)]
    Crypto(#[from] CryptoError),
}

/// A pre-shared out-of-band secret, the stand-in for scanning a QR code.
#[derive(Clone, PartialEq, Eq)]
pub struct OobToken {
    pub label: String,
    pub secret: [u8; TOKEN_LEN],
}

impl core::fmt::Debug for OobToken {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        f.debug_struct("OobToken").field("label", &self.label).finish_non_exhaustive()
    }
}

impl OobToken {
    pub fn new(label: impl Into<String>, secret: [u8; TOKEN_LEN]) -> Self {
        Self { label: label.into(), secret }
    }

    pub fn from_hex(label: impl Into<String>, hex_secret: &str) -> Option<Self> {
        let bytes = hex::decode(hex_secret.trim()).ok()?;
        Some(Self::new(label, bytes.try_into().ok()?))
    }

    pub fn secret_hex(&self) -> String {
        hex::encode(self.secret)
    }
}

fn boot_prefix() -> Name {
    BOOT_PREFIX.parse().expect("constant")
}

fn hello_tag(token: &OobToken, dh_public: &[u8]) -> [u8; 8] {
    let mut msg = token.label.as_bytes().to_vec();
    msg.extend_from_slice(dh_public);
    let mac = crypto::hmac_sha256(&token.secret, &msg);
    mac[..8].try_into().expect("8 bytes")
}

pub fn hello_name(token: &OobToken, dh_public: &[u8]) -> Name {
    let comp = |s: String| NameComponent::new(s.into_bytes()).expect("non-empty");
    boot_prefix()
        .child(comp(token.label.clone()))
        .child(comp(hex::encode(dh_public)))
        .child(comp(hex::encode(hello_tag(token, dh_public))))
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Hello {
    pub label: String,
    pub dh_public: Vec<u8>,
    pub tag: [u8; 8],
}

pub fn parse_hello(name: &Name) -> Result<Hello, BootError> {
    let prefix = boot_prefix();
    if !prefix.is_prefix_of(name) || name.len() != prefix.len() + 3 {
        return Err(BootError::Malformed);
    }
    let text = |i: usize| name.get(i).and_then(|c| c.as_str()).ok_or(BootError::Malformed);
    let label = text(prefix.len())?.to_string();
    let dh_public = hex::decode(text(prefix.len() + 1)?).map_err(|_| BootError::Malformed)?;
    let tag = hex::decode(text(prefix.len() + 2)?).map_err(|_| BootError::Malformed)?;
    Ok(Hello { label, dh_public, tag: tag.try_into().map_err(|_| BootError::Malformed)? })
}

impl Hello {
    pub fn verify(&self, token: &OobToken) -> bool {
        token.label == self.label && crypto::hmac_verify(&token.secret, &{
            let mut m = self.label.as_bytes().to_vec();
            m.extend_from_slice(&self.dh_public);
            m
        }, &self.tag)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Welcome {
    pub anchor_cert: Certificate,
    pub controller_dh: Vec<u8>,
    pub assigned: Name,
    pub nonce: [u8; NONCE_LEN],
}

pub fn fresh_nonce(rng: &mut impl CryptoRngCore) -> [u8; NONCE_LEN] {
    let mut n = [0u8; NONCE_LEN];
    rng.fill_bytes(&mut n);
    n
}

pub fn build_welcome(hello_name: &Name, w: &Welcome, token: &OobToken) -> Data {
    let mut content = tlv::encode_tlv(app::ANCHOR_CERT, &w.anchor_cert.encode());
    tlv::write_tlv(&mut content, app::DH_PUBLIC, &w.controller_dh);
    tlv::write_tlv(&mut content, app::ASSIGNED_NAME, &tlv::encode_name(&w.assigned));
    tlv::write_tlv(&mut content, app::BOOT_NONCE, &w.nonce);
    let mut data = Data::new(hello_name.clone(), content, SigInfo { sig_type: SigType::DigestSha256, key_locator: None });
    crypto::hmac_sign_data(&mut data, &token.secret, boot_prefix().child(hello_name.components()[2].clone()));
    data
}

pub fn open_welcome(data: &Data, token: &OobToken) -> Result<Welcome, BootError> {
    if !crypto::hmac_verify_data(data, &token.secret) {
        return Err(BootError::TokenMismatch);
    }
    let f = Fields::parse(&data.content)?;
    let anchor_cert = Certificate::decode(f.require(app::ANCHOR_CERT, "missing anchor")?)?;
    if !anchor_cert.is_self_signed() || !anchor_cert.verify(anchor_cert.public_key()) {
        return Err(BootError::BadSignature);
    }
    Ok(Welcome {
        anchor_cert,
        controller_dh: f.require(app::DH_PUBLIC, "missing DH public")?.to_vec(),
        assigned: tlv::decode_name(f.require(app::ASSIGNED_NAME, "missing name")?)?,
        nonce: f.require(app::BOOT_NONCE, "missing nonce")?.try_into().map_err(|_| BootError::Malformed)?,
    })
}

pub fn cert_request_name(assigned: &Name, nonce: &[u8; NONCE_LEN]) -> Name {
    assigned
        .with("BOOT")
        .with("CERT")
        .child(NameComponent::new(hex::encode(nonce).into_bytes()).expect("non-empty"))
}

pub fn build_cert_request(
    assigned: &Name,
    nonce: &[u8; NONCE_LEN],
    identity: &Keypair,
    pairwise: &[u8; 32],
    rng: &mut impl CryptoRngCore,
) -> Interest {
    let mut plain = tlv::encode_tlv(app::PUBLIC_KEY, &identity.public_bytes());
    tlv::write_tlv(&mut plain, app::SIGNATURE, &crypto::sign(identity, nonce));
    let ct = crypto::encrypt(pairwise, &plain, rng);
    let mut params = tlv::encode_tlv(app::CIPHERTEXT, &ct);
    tlv::write_tlv(&mut params, app::HMAC_TAG, &crypto::hmac_sha256(pairwise, &ct));
    let mut i = Interest::new(cert_request_name(assigned, nonce), [0; 4]);
    i.app_params = Some(params);
    i
}

/// Checks the request against the session's secret and nonce and returns
/// the proven identity public key.
pub fn open_cert_request(interest: &Interest, pairwise: &[u8; 32], nonce: &[u8; NONCE_LEN]) -> Result<Vec<u8>, BootError> {
    let params = interest.app_params.as_deref().ok_or(BootError::Malformed)?;
    let f = Fields::parse(params)?;
    let ct = f.require(app::CIPHERTEXT, "missing ciphertext")?;
    let tag = f.require(app::HMAC_TAG, "missing tag")?;
    if !crypto::hmac_verify(pairwise, ct, tag) {
        return Err(BootError::TokenMismatch);
    }
    let plain = crypto::decrypt(pairwise, ct).map_err(|_| BootError::DecryptFailure)?;
    let f = Fields::parse(&plain)?;
    let public = f.require(app::PUBLIC_KEY, "missing key")?.to_vec();
    if !crypto::verify(&public, nonce, f.require(app::SIGNATURE, "missing signature")?) {
        return Err(BootError::BadSignature);
    }
    Ok(public)
}

/// What the controller hands a newly certified entity.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Grant {
    pub certificate: Certificate,
    pub policy: Data,
    pub sealed_keys: Vec<Data>,
}

pub fn build_grant(
    request_name: &Name,
    grant: &Grant,
    pairwise: &[u8; 32],
    anchor: &Keypair,
    anchor_key_name: &Name,
    rng: &mut impl CryptoRngCore,
) -> Result<Data, TlvError> {
    let mut plain = tlv::encode_tlv(app::CERTIFICATE, &grant.certificate.encode());
    tlv::write_tlv(&mut plain, app::POLICY_CONTAINER, &grant.policy.encode()?);
    for k in &grant.sealed_keys {
        tlv::write_tlv(&mut plain, app::SEALED_KEY, &k.encode()?);
    }
    let content = tlv::encode_tlv(app::CIPHERTEXT, &crypto::encrypt(pairwise, &plain, rng));
    let mut data = Data::new(request_name.clone(), content, SigInfo { sig_type: SigType::DigestSha256, key_locator: None });
    crypto::sign_data(&mut data, anchor, anchor_key_name.clone());
    Ok(data)
}

fn decode_data(wire: &[u8]) -> Result<Data, BootError> {
    match tlv::decode_packet(wire)? {
        tlv::Packet::Data(d) => Ok(d),
        _ => Err(BootError::Malformed),
    }
}

pub fn open_grant(data: &Data, anchor_public: &[u8], pairwise: &[u8; 32]) -> Result<Grant, BootError> {
    if !crypto::verify_data(data, anchor_public) {
        return Err(BootError::BadSignature);
    }
    let ct = Fields::parse(&data.content)?.require(app::CIPHERTEXT, "missing ciphertext")?.to_vec();
    let plain = crypto::decrypt(pairwise, &ct).map_err(|_| BootError::DecryptFailure)?;
    let f = Fields::parse(&plain)?;
    Ok(Grant {
        certificate: Certificate::decode(f.require(app::CERTIFICATE, "missing certificate")?)?,
        policy: decode_data(f.require(app::POLICY_CONTAINER, "missing policy")?)?,
        sealed_keys: f.all(app::SEALED_KEY).map(decode_data).collect::<Result<_, _>>()?,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum BootState {
    Idle,
    HelloSent,
    Authenticated,
    Certified,
}

/// Device side of the handshake. The owning entity moves frames; this only
/// tracks state and builds or checks messages.
#[derive(Debug, Clone)]
pub struct DeviceSession {
    pub token: OobToken,
    pub state: BootState,
    dh: Keypair,
    pub pairwise: Option<[u8; 32]>,
    pub welcome: Option<Welcome>,
}

impl DeviceSession {
    pub fn new(token: OobToken, rng: &mut impl CryptoRngCore) -> Self {
        Self { token, state: BootState::Idle, dh: Keypair::generate(rng), pairwise: None, welcome: None }
    }

    /// Starts over with a fresh ephemeral key.
    pub fn restart(&mut self, rng: &mut impl CryptoRngCore) {
        self.dh = Keypair::generate(rng);
        self.pairwise = None;
        self.welcome = None;
        self.state = BootState::Idle;
    }

    pub fn hello(&mut self) -> Interest {
        if self.state == BootState::Idle {
            self.state = BootState::HelloSent;
        }
        let mut i = Interest::new(hello_name(&self.token, &self.dh.public_bytes()), [0; 4]);
        i.lifetime_ms = HELLO_RETRY_MS;
        i
    }

    pub fn hello_name(&self) -> Name {
        hello_name(&self.token, &self.dh.public_bytes())
    }

    /// Accepts a welcome, establishing the pairwise secret. Anything that
    /// fails to authenticate leaves the session where it was.
    pub fn on_welcome(&mut self, data: &Data) -> Result<&Welcome, BootError> {
        if self.state != BootState::HelloSent || data.name != self.hello_name() {
            return Err(BootError::Malformed);
        }
        let w = open_welcome(data, &self.token)?;
        let anchor_home = w.anchor_cert.subject();
        if !anchor_home.is_prefix_of(&w.assigned) || anchor_home.len() >= w.assigned.len() {
            return Err(BootError::Malformed);
        }
        self.pairwise = Some(crypto::derive_pairwise_secret(&self.dh, &w.controller_dh)?);
        self.state = BootState::Authenticated;
        self.welcome = Some(w);
        Ok(self.welcome.as_ref().expect("set"))
    }

    pub fn cert_request(&self, identity: &Keypair, rng: &mut impl CryptoRngCore) -> Option<Interest> {
        let w = self.welcome.as_ref()?;
        Some(build_cert_request(&w.assigned, &w.nonce, identity, self.pairwise.as_ref()?, rng))
    }

    /// Opens the grant and checks the certificate binds our name and key.
    pub fn on_grant(&mut self, data: &Data, identity: &Keypair) -> Result<Grant, BootError> {
        let w = self.welcome.as_ref().ok_or(BootError::Malformed)?;
        let pairwise = self.pairwise.ok_or(BootError::Malformed)?;
        let g = open_grant(data, w.anchor_cert.public_key(), &pairwise)?;
        let c = &g.certificate;
        if c.subject() != &w.assigned
            || c.public_key() != identity.public_bytes().as_slice()
            || c.issuer_key_name() != Some(&w.anchor_cert.key_name())
            || !c.verify(w.anchor_cert.public_key())
        {
            return Err(BootError::BadCertificate);
        }
        self.state = BootState::Certified;
        Ok(g)
    }
}
