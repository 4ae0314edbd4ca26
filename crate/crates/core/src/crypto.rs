//! Cryptographic primitives: ECDSA-P256-SHA256 identities, AES-256-CBC
//! payload encryption, ECDH + HKDF-SHA256 key agreement, HMAC-SHA256, and
//! certificates expressed as signed Data packets.

use alloc::vec::Vec;

use aes::cipher::block_padding::Pkcs7;
use aes::cipher::{BlockDecryptMut, BlockEncryptMut, KeyIvInit};
use hmac::{Hmac, Mac};
use p256::ecdsa::signature::{Signer, Verifier};
use p256::ecdsa::{DerSignature, Signature, SigningKey, VerifyingKey};
use rand_core::CryptoRngCore;
use sha2::{Digest, Sha256};

use crate::name::{Name, NameComponent};
use crate::tlv::{self, app, Data, Fields, SigInfo, SigType, TlvError};

type Aes256CbcEnc = cbc::Encryptor<aes::Aes256>;
type Aes256CbcDec = cbc::Decryptor<aes::Aes256>;
type HmacSha256 = Hmac<Sha256>;

/// HKDF info string binding derived secrets to the bootstrap protocol.
pub const PAIRWISE_INFO: &[u8] = b"sovereign-bootstrap-v1";

pub const DEFAULT_ANCHOR_VALIDITY_MS: u64 = 365 * 24 * 3600 * 1000;
pub const DEFAULT_ENTITY_VALIDITY_MS: u64 = 30 * 24 * 3600 * 1000;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum CryptoError {
    #[error("invalid or off-curve public key")]
    InvalidPoint,
    #[error("invalid private key")]
    InvalidKey,
    #[error("ciphertext failed to decrypt (bad padding or wrong key)")]
    BadPadding,
    #[error("ciphertext too short or not block aligned")]
    BadCiphertext,
    #[error("certificate is malformed: {0}")]
    BadCertificate(&'static str),
    #[error(transparent)]
    Tlv(#[from] TlvError),
}

/// A P-256 keypair, used both for identity signatures and for ECDH.
#[derive(Clone)]
pub struct Keypair {
    signing: SigningKey,
}

pub type IdentityKeypair = Keypair;

impl core::fmt::Debug for Keypair {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        f.debug_struct("Keypair")
            .field("public", &hex::encode(self.public_bytes()))
            .finish_non_exhaustive()
    }
}

impl PartialEq for Keypair {
    fn eq(&self, other: &Self) -> bool {
        self.signing == other.signing
    }
}

impl Eq for Keypair {}

impl Keypair {
    pub fn generate(rng: &mut impl CryptoRngCore) -> Self {
        Self {
            signing: SigningKey::random(rng),
        }
    }

    pub fn from_secret_bytes(bytes: &[u8]) -> Result<Self, CryptoError> {
        SigningKey::from_slice(bytes)
            .map(|signing| Self { signing })
            .map_err(|_| CryptoError::InvalidKey)
    }

    pub fn secret_bytes(&self) -> [u8; 32] {
        self.signing.to_bytes().into()
    }

    /// Uncompressed SEC1 encoding (65 bytes).
    pub fn public_bytes(&self) -> Vec<u8> {
        self.signing
            .verifying_key()
            .to_encoded_point(false)
            .as_bytes()
            .to_vec()
    }

    pub fn key_id(&self) -> NameComponent {
        key_id(&self.public_bytes())
    }
}

/// First 8 bytes of SHA-256 over the public key, hex encoded.
pub fn key_id(public: &[u8]) -> NameComponent {
    let digest = Sha256::digest(public);
    NameComponent::new(hex::encode(&digest[..8])).expect("16 hex chars")
}

/// DER-encoded ECDSA signature over `message`.
pub fn sign(keypair: &Keypair, message: &[u8]) -> Vec<u8> {
    let sig: DerSignature = keypair.signing.sign(message);
    sig.as_bytes().to_vec()
}

/// Verifies a DER signature. Any malformed input yields `false`.
pub fn verify(public: &[u8], message: &[u8], signature: &[u8]) -> bool {
    let Ok(vk) = VerifyingKey::from_sec1_bytes(public) else {
        return false;
    };
    let Ok(sig) = Signature::from_der(signature) else {
        return false;
    };
    vk.verify(message, &sig).is_ok()
}

pub fn sha256(data: &[u8]) -> [u8; 32] {
    Sha256::digest(data).into()
}

pub fn hmac_sha256(key: &[u8], message: &[u8]) -> [u8; 32] {
    let mut mac = HmacSha256::new_from_slice(key).expect("HMAC takes any key length");
    mac.update(message);
    mac.finalize().into_bytes().into()
}

/// Constant-time comparison of an HMAC tag (full or truncated prefix).
pub fn hmac_verify(key: &[u8], message: &[u8], tag: &[u8]) -> bool {
    let mut mac = HmacSha256::new_from_slice(key).expect("HMAC takes any key length");
    mac.update(message);
    if tag.len() == 32 {
        mac.verify_slice(tag).is_ok()
    } else {
        !tag.is_empty() && mac.verify_truncated_left(tag).is_ok()
    }
}

/// AES-256-CBC with a fresh random IV prepended and PKCS#7 padding.
pub fn encrypt(key: &[u8; 32], plaintext: &[u8], rng: &mut impl CryptoRngCore) -> Vec<u8> {
    let mut iv = [0u8; 16];
    rng.fill_bytes(&mut iv);
    let ct = Aes256CbcEnc::new(key.into(), &iv.into()).encrypt_padded_vec_mut::<Pkcs7>(plaintext);
    let mut out = Vec::with_capacity(16 + ct.len());
    out.extend_from_slice(&iv);
    out.extend_from_slice(&ct);
    out
}

pub fn decrypt(key: &[u8; 32], ciphertext: &[u8]) -> Result<Vec<u8>, CryptoError> {
    if ciphertext.len() < 32 || !ciphertext.len().is_multiple_of(16) {
        return Err(CryptoError::BadCiphertext);
    }
    let (iv, ct) = ciphertext.split_at(16);
    let iv: [u8; 16] = iv.try_into().expect("split at 16");
    Aes256CbcDec::new(key.into(), &iv.into())
        .decrypt_padded_vec_mut::<Pkcs7>(ct)
        .map_err(|_| CryptoError::BadPadding)
}

/// ECDH on P-256 followed by HKDF-SHA256 with [`PAIRWISE_INFO`].
pub fn derive_pairwise_secret(mine: &Keypair, their_public: &[u8]) -> Result<[u8; 32], CryptoError> {
    let theirs = p256::PublicKey::from_sec1_bytes(their_public).map_err(|_| CryptoError::InvalidPoint)?;
    let shared = p256::ecdh::diffie_hellman(mine.signing.as_nonzero_scalar(), theirs.as_affine());
    let hk = shared.extract::<Sha256>(None);
    let mut okm = [0u8; 32];
    hk.expand(PAIRWISE_INFO, &mut okm).expect("32 bytes is a valid HKDF length");
    Ok(okm)
}

/// Named symmetric key material. EKEY and DKEY of one scope share bytes.
#[derive(Clone, PartialEq, Eq)]
pub struct SymmetricKey {
    /// Unversioned key name, e.g. `/alice-home/TEMP/DKEY`.
    pub name: Name,
    pub version: u64,
    pub bytes: [u8; 32],
    pub not_after: u64,
}

impl core::fmt::Debug for SymmetricKey {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        f.debug_struct("SymmetricKey")
            .field("name", &self.name)
            .field("version", &self.version)
            .field("not_after", &self.not_after)
            .finish_non_exhaustive()
    }
}

impl SymmetricKey {
    pub fn versioned_name(&self) -> Name {
        self.name.child(NameComponent::from_timestamp(self.version))
    }

    pub fn is_expired(&self, now: u64) -> bool {
        now >= self.not_after
    }

    pub fn encrypt(&self, plaintext: &[u8], rng: &mut impl CryptoRngCore) -> Vec<u8> {
        encrypt(&self.bytes, plaintext, rng)
    }

    pub fn decrypt(&self, ciphertext: &[u8]) -> Result<Vec<u8>, CryptoError> {
        decrypt(&self.bytes, ciphertext)
    }
}

/// `<identity>/KEY/<key-id>`
pub fn key_name(identity: &Name, keypair: &Keypair) -> Name {
    identity.with("KEY").child(keypair.key_id())
}

/// Strips a `KEY/<key-id>[/<version>]` suffix, returning the identity name.
pub fn identity_of_key_name(key_name: &Name) -> Option<Name> {
    let pos = key_name.components().iter().rposition(|c| c.as_bytes() == b"KEY")?;
    let rest = key_name.len() - pos;
    (rest == 2 || rest == 3).then(|| key_name.prefix(pos))
}

/// Signs `data` in place with ECDSA, setting the key locator.
pub fn sign_data(data: &mut Data, keypair: &Keypair, key_locator: Name) {
    data.sig_info = SigInfo {
        sig_type: SigType::EcdsaSha256,
        key_locator: Some(key_locator),
    };
    data.sig_value = sign(keypair, &data.signed_portion());
}

pub fn verify_data(data: &Data, public: &[u8]) -> bool {
    data.sig_info.sig_type == SigType::EcdsaSha256 && verify(public, &data.signed_portion(), &data.sig_value)
}

/// Tags `data` in place with HMAC-SHA256 under `key`.
pub fn hmac_sign_data(data: &mut Data, key: &[u8], key_locator: Name) {
    data.sig_info = SigInfo {
        sig_type: SigType::HmacSha256,
        key_locator: Some(key_locator),
    };
    data.sig_value = hmac_sha256(key, &data.signed_portion()).to_vec();
}

pub fn hmac_verify_data(data: &Data, key: &[u8]) -> bool {
    data.sig_info.sig_type == SigType::HmacSha256 && hmac_verify(key, &data.signed_portion(), &data.sig_value)
}

/// A public-key certificate: a Data packet named
/// `<subject>/KEY/<key-id>/<version>` whose content carries the subject's
/// SEC1 public key and validity period, signed by the issuer.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Certificate {
    data: Data,
    subject: Name,
    public_key: Vec<u8>,
    not_before: u64,
    not_after: u64,
}

impl Certificate {
    pub fn from_data(data: Data) -> Result<Self, CryptoError> {
        let comps = data.name.components();
        if comps.len() < 3 || comps[comps.len() - 3].as_bytes() != b"KEY" {
            return Err(CryptoError::BadCertificate("name lacks KEY/<key-id>/<version>"));
        }
        let subject = data.name.prefix(comps.len() - 3);
        let fields = Fields::parse(&data.content)?;
        let public_key = fields.require(app::PUBLIC_KEY, "certificate without public key")?.to_vec();
        let not_before = fields.number(app::NOT_BEFORE, "certificate without NotBefore")?;
        let not_after = fields.number(app::NOT_AFTER, "certificate without NotAfter")?;
        if key_id(&public_key) != comps[comps.len() - 2] {
            return Err(CryptoError::BadCertificate("key-id does not match public key"));
        }
        if p256::PublicKey::from_sec1_bytes(&public_key).is_err() {
            return Err(CryptoError::InvalidPoint);
        }
        Ok(Self { data, subject, public_key, not_before, not_after })
    }

    pub fn decode(wire: &[u8]) -> Result<Self, CryptoError> {
        match tlv::decode_packet(wire)? {
            tlv::Packet::Data(d) => Self::from_data(d),
            tlv::Packet::Interest(_) => Err(CryptoError::BadCertificate("not a Data packet")),
        }
    }

    pub fn data(&self) -> &Data {
        &self.data
    }

    pub fn name(&self) -> &Name {
        &self.data.name
    }

    pub fn subject(&self) -> &Name {
        &self.subject
    }

    /// `<subject>/KEY/<key-id>`, the name signers put in key locators.
    pub fn key_name(&self) -> Name {
        self.data.name.prefix(self.data.name.len() - 1)
    }

    pub fn public_key(&self) -> &[u8] {
        &self.public_key
    }

    pub fn issuer_key_name(&self) -> Option<&Name> {
        self.data.sig_info.key_locator.as_ref()
    }

    pub fn is_self_signed(&self) -> bool {
        self.issuer_key_name() == Some(&self.key_name())
    }

    pub fn validity(&self) -> (u64, u64) {
        (self.not_before, self.not_after)
    }

    pub fn is_valid_at(&self, now: u64) -> bool {
        self.not_before <= now && now < self.not_after
    }

    pub fn verify(&self, issuer_public: &[u8]) -> bool {
        verify_data(&self.data, issuer_public)
    }

    pub fn encode(&self) -> Vec<u8> {
        self.data.encode().expect("certificates are far below the packet limit")
    }
}

/// Issues a certificate for `subject_public`. Passing the issuer's own name
/// and public key yields a self-signed trust anchor.
pub fn issue_certificate(
    issuer: &Keypair,
    issuer_name: &Name,
    subject_name: &Name,
    subject_public: &[u8],
    not_before: u64,
    validity_ms: u64,
) -> Result<Certificate, CryptoError> {
    if p256::PublicKey::from_sec1_bytes(subject_public).is_err() {
        return Err(CryptoError::InvalidPoint);
    }
    let name = subject_name
        .with("KEY")
        .child(key_id(subject_public))
        .child(NameComponent::from_timestamp(not_before));
    let mut content = tlv::encode_tlv(app::PUBLIC_KEY, subject_public);
    tlv::write_tlv(&mut content, app::NOT_BEFORE, &tlv::encode_nonneg(not_before));
    tlv::write_tlv(
        &mut content,
        app::NOT_AFTER,
        &tlv::encode_nonneg(not_before.saturating_add(validity_ms)),
    );
    let mut data = Data::new(name, content, SigInfo { sig_type: SigType::EcdsaSha256, key_locator: None });
    data.freshness_ms = 3_600_000;
    sign_data(&mut data, issuer, key_name(issuer_name, issuer));
    Certificate::from_data(data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::name::name;
    use rand_chacha::rand_core::{RngCore, SeedableRng};
    use rand_chacha::ChaCha20Rng;

    fn rng() -> ChaCha20Rng {
        ChaCha20Rng::seed_from_u64(7)
    }

    #[test]
    fn sign_verify() {
        let mut rng = rng();
        let a = Keypair::generate(&mut rng);
        let b = Keypair::generate(&mut rng);
        let msg = b"turn on the kitchen light";
        let sig = sign(&a, msg);
        assert!(verify(&a.public_bytes(), msg, &sig));
        let mut flipped = msg.to_vec();
        flipped[3] ^= 0x01;
        assert!(!verify(&a.public_bytes(), &flipped, &sig));
        assert!(!verify(&b.public_bytes(), msg, &sig));
        assert!(!verify(&[4u8; 65], msg, &sig));
        assert!(!verify(&a.public_bytes(), msg, b"garbage"));
    }

    #[test]
    fn aes_round_trip() {
        let mut rng = rng();
        let key = [3u8; 32];
        for len in [0, 1, 15, 16, 17, 256] {
            let pt: Vec<u8> = (0..len).map(|i| i as u8).collect();
            let ct = encrypt(&key, &pt, &mut rng);
            assert_eq!(ct.len(), 16 + (len / 16 + 1) * 16);
            assert_eq!(decrypt(&key, &ct).unwrap(), pt);
        }
        assert_eq!(decrypt(&key, &[0u8; 8]), Err(CryptoError::BadCiphertext));
    }

    /// NIST SP 800-38A F.2.5 (CBC-AES256.Encrypt), first two blocks.
    #[test]
    fn nist_cbc_known_answer() {
        let key: [u8; 32] = hex::decode("603deb1015ca71be2b73aef0857d77811f352c073b6108d72d9810a30914dff4")
            .unwrap()
            .try_into()
            .unwrap();
        let iv: [u8; 16] = hex::decode("000102030405060708090a0b0c0d0e0f").unwrap().try_into().unwrap();
        let pt = hex::decode("6bc1bee22e409f96e93d7e117393172aae2d8a571e03ac9c9eb76fac45af8e51").unwrap();
        let mut buf = pt.clone();
        buf.resize(48, 0);
        let ct = Aes256CbcEnc::new(&key.into(), &iv.into())
            .encrypt_padded_mut::<Pkcs7>(&mut buf, pt.len())
            .unwrap();
        assert_eq!(
            hex::encode(&ct[..32]),
            "f58c4c04d6e5f1ba779eabfb5f7bfbd69cfc4e967edb808d679f777bc6702c7d"
        );
        // Our decrypt path accepts IV||ciphertext.
        let mut wire = iv.to_vec();
        wire.extend_from_slice(ct);
        assert_eq!(decrypt(&key, &wire).unwrap(), pt);
    }

    #[test]
    fn wrong_key_never_silently_recovers_plaintext() {
        let mut rng = rng();
        let right = [1u8; 32];
        let pt = b"71.5 F bedroom".to_vec();
        let mut silent = 0;
        for i in 0..1000u32 {
            let mut wrong = [0u8; 32];
            rng.fill_bytes(&mut wrong);
            wrong[0] ^= (i & 0xff) as u8;
            let ct = encrypt(&right, &pt, &mut rng);
            if let Ok(out) = decrypt(&wrong, &ct) {
                assert_ne!(out, pt);
                silent += 1;
            }
        }
        // Padding accidentally validates in roughly 1/256 of trials.
        assert!(silent < 30, "{silent}");
    }

    #[test]
    fn ecdh_symmetry_and_invalid_points() {
        let mut rng = rng();
        let a = Keypair::generate(&mut rng);
        let b = Keypair::generate(&mut rng);
        let c = Keypair::generate(&mut rng);
        let ab = derive_pairwise_secret(&a, &b.public_bytes()).unwrap();
        assert_eq!(ab, derive_pairwise_secret(&b, &a.public_bytes()).unwrap());
        assert_ne!(ab, derive_pairwise_secret(&a, &c.public_bytes()).unwrap());
        // SEC1 identity point and an off-curve point.
        assert_eq!(derive_pairwise_secret(&a, &[0u8]), Err(CryptoError::InvalidPoint));
        let mut off = a.public_bytes();
        off[64] ^= 1;
        assert_eq!(derive_pairwise_secret(&a, &off), Err(CryptoError::InvalidPoint));
    }

    #[test]
    fn certificates() {
        let mut rng = rng();
        let anchor = Keypair::generate(&mut rng);
        let home = name("/alice-home");
        let anchor_cert = issue_certificate(&anchor, &home, &home, &anchor.public_bytes(), 1000, DEFAULT_ANCHOR_VALIDITY_MS).unwrap();
        assert!(anchor_cert.is_self_signed());
        assert!(anchor_cert.verify(&anchor.public_bytes()));
        assert_eq!(anchor_cert.key_name(), key_name(&home, &anchor));

        let dev = Keypair::generate(&mut rng);
        let subject = name("/alice-home/TEMP/bedroom/senor-1");
        let cert = issue_certificate(&anchor, &home, &subject, &dev.public_bytes(), 2000, DEFAULT_ENTITY_VALIDITY_MS).unwrap();
        assert!(cert.verify(&anchor.public_bytes()));
        assert!(!cert.verify(&dev.public_bytes()));
        assert_eq!(cert.subject(), &subject);
        assert_eq!(identity_of_key_name(&cert.key_name()), Some(subject.clone()));
        assert_eq!(identity_of_key_name(cert.name()), Some(subject));
        assert!(cert.is_valid_at(2000) && !cert.is_valid_at(2000 + DEFAULT_ENTITY_VALIDITY_MS));

        // Survives a codec round trip and still verifies.
        let back = Certificate::decode(&cert.encode()).unwrap();
        assert_eq!(back, cert);
        assert!(back.verify(&anchor.public_bytes()));
    }

    #[test]
    fn key_id_is_sixteen_hex_chars() {
        let k = Keypair::generate(&mut rng());
        let id = k.key_id();
        assert_eq!(id.as_bytes().len(), 16);
        assert_eq!(&hex::encode(&sha256(&k.public_bytes())[..8]).as_bytes(), &id.as_bytes());
    }

    #[test]
    fn truncated_hmac_tags() {
        let tag = hmac_sha256(b"k", b"m");
        assert!(hmac_verify(b"k", b"m", &tag));
        assert!(hmac_verify(b"k", b"m", &tag[..8]));
        assert!(!hmac_verify(b"k", b"n", &tag[..8]));
        assert!(!hmac_verify(b"k", b"m", &[]));
    }
}
