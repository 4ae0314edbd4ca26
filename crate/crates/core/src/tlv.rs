//! NDN 0.3 TLV wire format for Interest and Data packets.
//!
//! Type and length fields use the variable-size number rule: values below
//! 253 take one byte, larger values are prefixed with `0xFD`, `0xFE` or `0xFF`
//! and carried big-endian in 2, 4 or 8 bytes. The decoder rejects
//! non-minimal encodings, so every accepted buffer re-encodes to itself.

use alloc::vec::Vec;

use crate::name::{Name, NameComponent};

pub const INTEREST: u32 = 0x05;
pub const DATA: u32 = 0x06;
pub const NAME: u32 = 0x07;
pub const GENERIC_NAME_COMPONENT: u32 = 0x08;
pub const NONCE: u32 = 0x0A;
pub const INTEREST_LIFETIME: u32 = 0x0C;
pub const META_INFO: u32 = 0x14;
pub const CONTENT: u32 = 0x15;
pub const SIGNATURE_INFO: u32 = 0x16;
pub const SIGNATURE_VALUE: u32 = 0x17;
pub const FRESHNESS_PERIOD: u32 = 0x19;
pub const SIGNATURE_TYPE: u32 = 0x1B;
pub const KEY_LOCATOR: u32 = 0x1C;
pub const APPLICATION_PARAMETERS: u32 = 0x24;

/// Element types used inside Content by this framework. All are even and
/// above 31, so foreign decoders treat them as non-critical.
pub mod app {
    pub const PUBLIC_KEY: u32 = 0x80;
    pub const NOT_BEFORE: u32 = 0x82;
    pub const NOT_AFTER: u32 = 0x84;
    pub const KEY_NAME: u32 = 0x86;
    pub const CIPHERTEXT: u32 = 0x88;
    pub const PAYLOAD: u32 = 0x8A;
    pub const HIDDEN_ID: u32 = 0x8C;
    pub const POLICY_SET_VERSION: u32 = 0x8E;
    pub const POLICY: u32 = 0x90;
    pub const POLICY_SUBJECT: u32 = 0x92;
    pub const POLICY_VERB: u32 = 0x94;
    pub const POLICY_OBJECT: u32 = 0x96;
    pub const POLICY_SERIAL: u32 = 0x98;
    pub const ANCHOR_CERT: u32 = 0x9A;
    pub const DH_PUBLIC: u32 = 0x9C;
    pub const ASSIGNED_NAME: u32 = 0x9E;
    pub const BOOT_NONCE: u32 = 0xA0;
    pub const HMAC_TAG: u32 = 0xA2;
    pub const CERTIFICATE: u32 = 0xA4;
    pub const POLICY_CONTAINER: u32 = 0xA6;
    pub const SEALED_KEY: u32 = 0xA8;
    pub const KEY_BYTES: u32 = 0xAA;
    pub const KEY_VERSION: u32 = 0xAC;
    pub const SIGNATURE: u32 = 0xAE;
    pub const NEXT_VERSION: u32 = 0xB0;
}

/// Largest packet accepted on the bus.
pub const MAX_PACKET_SIZE: usize = 8800;

pub const DEFAULT_INTEREST_LIFETIME_MS: u64 = 4000;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum TlvError {
    #[error("malformed TLV: {0}")]
    MalformedTlv(&'static str),
    #[error("packet of {0} bytes exceeds the {MAX_PACKET_SIZE}-byte limit")]
    PacketTooLarge(usize),
}

fn malformed<T>(why: &'static str) -> Result<T, TlvError> {
    Err(TlvError::MalformedTlv(why))
}

/// Types below 32 and odd types are critical: unknown ones abort decoding.
pub fn is_critical(typ: u32) -> bool {
    typ < 32 || typ & 1 == 1
}

pub fn write_varnum(out: &mut Vec<u8>, v: u64) {
    if v < 253 {
        out.push(v as u8);
    } else if v <= 0xFFFF {
        out.push(0xFD);
        out.extend_from_slice(&(v as u16).to_be_bytes());
    } else if v <= 0xFFFF_FFFF {
        out.push(0xFE);
        out.extend_from_slice(&(v as u32).to_be_bytes());
    } else {
        out.push(0xFF);
        out.extend_from_slice(&v.to_be_bytes());
    }
}

/// Encodes a single TLV element.
pub fn encode_tlv(typ: u32, value: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(value.len() + 6);
    write_tlv(&mut out, typ, value);
    out
}

pub fn write_tlv(out: &mut Vec<u8>, typ: u32, value: &[u8]) {
    write_varnum(out, typ as u64);
    write_varnum(out, value.len() as u64);
    out.extend_from_slice(value);
}

/// Minimal big-endian NonNegativeInteger (1, 2, 4 or 8 bytes).
pub fn encode_nonneg(v: u64) -> Vec<u8> {
    if v <= 0xFF {
        alloc::vec![v as u8]
    } else if v <= 0xFFFF {
        (v as u16).to_be_bytes().to_vec()
    } else if v <= 0xFFFF_FFFF {
        (v as u32).to_be_bytes().to_vec()
    } else {
        v.to_be_bytes().to_vec()
    }
}

pub fn decode_nonneg(bytes: &[u8]) -> Result<u64, TlvError> {
    let v = match bytes.len() {
        1 => bytes[0] as u64,
        2 => u16::from_be_bytes([bytes[0], bytes[1]]) as u64,
        4 => u32::from_be_bytes(bytes.try_into().unwrap()) as u64,
        8 => u64::from_be_bytes(bytes.try_into().unwrap()),
        _ => return malformed("bad NonNegativeInteger width"),
    };
    if encode_nonneg(v).len() != bytes.len() {
        return malformed("non-minimal NonNegativeInteger");
    }
    Ok(v)
}

/// Cursor over a TLV byte buffer.
#[derive(Debug, Clone)]
pub struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    pub fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }

    pub fn is_empty(&self) -> bool {
        self.pos >= self.buf.len()
    }

    fn read_varnum(&mut self) -> Result<u64, TlvError> {
        let first = *self.buf.get(self.pos).ok_or(TlvError::MalformedTlv("truncated"))?;
        self.pos += 1;
        let width = match first {
            0..=252 => return Ok(first as u64),
            0xFD => 2,
            0xFE => 4,
            0xFF => 8,
        };
        let bytes = self
            .buf
            .get(self.pos..self.pos + width)
            .ok_or(TlvError::MalformedTlv("truncated"))?;
        self.pos += width;
        let mut v = 0u64;
        for &b in bytes {
            v = (v << 8) | b as u64;
        }
        let min = match width {
            2 => 253,
            4 => 0x1_0000,
            _ => 0x1_0000_0000,
        };
        if v < min {
            return malformed("non-minimal variable-size number");
        }
        Ok(v)
    }

    /// Peeks at the next element's type without consuming it.
    pub fn peek_type(&self) -> Result<Option<u32>, TlvError> {
        if self.is_empty() {
            return Ok(None);
        }
        let mut probe = self.clone();
        let t = probe.read_varnum()?;
        u32::try_from(t)
            .map(Some)
            .map_err(|_| TlvError::MalformedTlv("type exceeds 32 bits"))
    }

    /// Reads one element, returning its type and value.
    pub fn read(&mut self) -> Result<(u32, &'a [u8]), TlvError> {
        let typ = self.read_varnum()?;
        let typ = u32::try_from(typ).map_err(|_| TlvError::MalformedTlv("type exceeds 32 bits"))?;
        if typ == 0 {
            return malformed("type 0 is reserved");
        }
        let len = self.read_varnum()? as usize;
        let end = self
            .pos
            .checked_add(len)
            .filter(|&e| e <= self.buf.len())
            .ok_or(TlvError::MalformedTlv("length overruns buffer"))?;
        let value = &self.buf[self.pos..end];
        self.pos = end;
        Ok((typ, value))
    }

    /// Reads an element of the expected type, skipping unknown non-critical
    /// elements in front of it. Returns `None` if the next known element has a
    /// different (later) type or the buffer is exhausted.
    pub fn read_optional(&mut self, expected: u32, known: &[u32]) -> Result<Option<&'a [u8]>, TlvError> {
        loop {
            match self.peek_type()? {
                None => return Ok(None),
                Some(t) if t == expected => return self.read().map(|(_, v)| Some(v)),
                Some(t) if known.contains(&t) => return Ok(None),
                Some(t) if is_critical(t) => return malformed("unknown critical element"),
                Some(_) => {
                    self.read()?;
                }
            }
        }
    }

    /// Consumes the rest of the buffer, erroring on unknown critical elements.
    pub fn finish(&mut self, known: &[u32]) -> Result<(), TlvError> {
        while !self.is_empty() {
            let (t, _) = self.read()?;
            if known.contains(&t) {
                return malformed("element out of order");
            }
            if is_critical(t) {
                return malformed("unknown critical element");
            }
        }
        Ok(())
    }
}

/// Flat view of a sequence of elements, for the framework's own content
/// structures where order is not significant.
#[derive(Debug, Clone)]
pub struct Fields<'a>(Vec<(u32, &'a [u8])>);

impl<'a> Fields<'a> {
    pub fn parse(value: &'a [u8]) -> Result<Self, TlvError> {
        let mut r = Reader::new(value);
        let mut out = Vec::new();
        while !r.is_empty() {
            out.push(r.read()?);
        }
        Ok(Self(out))
    }

    pub fn get(&self, typ: u32) -> Option<&'a [u8]> {
        self.0.iter().find(|(t, _)| *t == typ).map(|(_, v)| *v)
    }

    pub fn require(&self, typ: u32, what: &'static str) -> Result<&'a [u8], TlvError> {
        self.get(typ).ok_or(TlvError::MalformedTlv(what))
    }

    pub fn all(&self, typ: u32) -> impl Iterator<Item = &'a [u8]> + '_ {
        self.0.iter().filter(move |(t, _)| *t == typ).map(|(_, v)| *v)
    }

    pub fn number(&self, typ: u32, what: &'static str) -> Result<u64, TlvError> {
        decode_nonneg(self.require(typ, what)?)
    }
}

pub fn encode_name(name: &Name) -> Vec<u8> {
    let mut body = Vec::new();
    write_name_body(&mut body, name);
    encode_tlv(NAME, &body)
}

fn write_name_body(out: &mut Vec<u8>, name: &Name) {
    for c in name.components() {
        write_tlv(out, GENERIC_NAME_COMPONENT, c.as_bytes());
    }
}

/// Decodes the value of a Name element.
pub fn decode_name_value(value: &[u8]) -> Result<Name, TlvError> {
    let mut r = Reader::new(value);
    let mut comps = Vec::new();
    while !r.is_empty() {
        let (t, v) = r.read()?;
        if t != GENERIC_NAME_COMPONENT {
            return malformed("unsupported name component type");
        }
        comps.push(NameComponent::new(v).map_err(|_| TlvError::MalformedTlv("invalid name component"))?);
    }
    Ok(Name::from_components(comps))
}

pub fn decode_name(wire: &[u8]) -> Result<Name, TlvError> {
    let mut r = Reader::new(wire);
    let (t, v) = r.read()?;
    if t != NAME || !r.is_empty() {
        return malformed("expected a single Name element");
    }
    decode_name_value(v)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Interest {
    pub name: Name,
    pub nonce: [u8; 4],
    pub lifetime_ms: u64,
    pub app_params: Option<Vec<u8>>,
}

impl Interest {
    pub fn new(name: Name, nonce: [u8; 4]) -> Self {
        Self {
            name,
            nonce,
            lifetime_ms: DEFAULT_INTEREST_LIFETIME_MS,
            app_params: None,
        }
    }

    pub fn encode(&self) -> Result<Vec<u8>, TlvError> {
        let mut body = encode_name(&self.name);
        write_tlv(&mut body, NONCE, &self.nonce);
        write_tlv(&mut body, INTEREST_LIFETIME, &encode_nonneg(self.lifetime_ms));
        if let Some(p) = &self.app_params {
            write_tlv(&mut body, APPLICATION_PARAMETERS, p);
        }
        finish_packet(INTEREST, &body)
    }

    fn decode_value(value: &[u8]) -> Result<Self, TlvError> {
        const KNOWN: [u32; 4] = [NAME, NONCE, INTEREST_LIFETIME, APPLICATION_PARAMETERS];
        let mut r = Reader::new(value);
        let name = r.read_optional(NAME, &KNOWN)?.ok_or(TlvError::MalformedTlv("Interest without Name"))?;
        let name = decode_name_value(name)?;
        if name.is_empty() {
            return malformed("Interest with empty Name");
        }
        let nonce = r.read_optional(NONCE, &KNOWN)?.ok_or(TlvError::MalformedTlv("Interest without Nonce"))?;
        let nonce: [u8; 4] = nonce.try_into().map_err(|_| TlvError::MalformedTlv("Nonce must be 4 bytes"))?;
        let lifetime_ms = match r.read_optional(INTEREST_LIFETIME, &KNOWN)? {
            Some(v) => decode_nonneg(v)?,
            None => DEFAULT_INTEREST_LIFETIME_MS,
        };
        let app_params = r.read_optional(APPLICATION_PARAMETERS, &KNOWN)?.map(<[u8]>::to_vec);
        r.finish(&KNOWN)?;
        Ok(Self { name, nonce, lifetime_ms, app_params })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SigType {
    DigestSha256,
    EcdsaSha256,
    HmacSha256,
}

impl SigType {
    pub fn code(self) -> u64 {
        match self {
            SigType::DigestSha256 => 0,
            SigType::EcdsaSha256 => 3,
            SigType::HmacSha256 => 4,
        }
    }

    pub fn from_code(code: u64) -> Result<Self, TlvError> {
        match code {
            0 => Ok(SigType::DigestSha256),
            3 => Ok(SigType::EcdsaSha256),
            4 => Ok(SigType::HmacSha256),
            _ => malformed("unsupported SignatureType"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SigInfo {
    pub sig_type: SigType,
    pub key_locator: Option<Name>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Data {
    pub name: Name,
    pub freshness_ms: u64,
    pub content: Vec<u8>,
    pub sig_info: SigInfo,
    pub sig_value: Vec<u8>,
}

impl Data {
    /// An unsigned Data skeleton; the caller fills in the signature.
    pub fn new(name: Name, content: Vec<u8>, sig_info: SigInfo) -> Self {
        Self {
            name,
            freshness_ms: 0,
            content,
            sig_info,
            sig_value: Vec::new(),
        }
    }

    /// The bytes covered by the signature: Name, MetaInfo, Content and
    /// SignatureInfo elements, concatenated.
    pub fn signed_portion(&self) -> Vec<u8> {
        let mut out = encode_name(&self.name);
        write_tlv(
            &mut out,
            META_INFO,
            &encode_tlv(FRESHNESS_PERIOD, &encode_nonneg(self.freshness_ms)),
        );
        write_tlv(&mut out, CONTENT, &self.content);
        let mut info = encode_tlv(SIGNATURE_TYPE, &encode_nonneg(self.sig_info.sig_type.code()));
        if let Some(kl) = &self.sig_info.key_locator {
            write_tlv(&mut info, KEY_LOCATOR, &encode_name(kl));
        }
        write_tlv(&mut out, SIGNATURE_INFO, &info);
        out
    }

    pub fn encode(&self) -> Result<Vec<u8>, TlvError> {
        let mut body = self.signed_portion();
        write_tlv(&mut body, SIGNATURE_VALUE, &self.sig_value);
        finish_packet(DATA, &body)
    }

    fn decode_value(value: &[u8]) -> Result<Self, TlvError> {
        const KNOWN: [u32; 5] = [NAME, META_INFO, CONTENT, SIGNATURE_INFO, SIGNATURE_VALUE];
        let mut r = Reader::new(value);
        let name = r.read_optional(NAME, &KNOWN)?.ok_or(TlvError::MalformedTlv("Data without Name"))?;
        let name = decode_name_value(name)?;
        let freshness_ms = match r.read_optional(META_INFO, &KNOWN)? {
            Some(meta) => {
                let mut m = Reader::new(meta);
                let f = match m.read_optional(FRESHNESS_PERIOD, &[FRESHNESS_PERIOD])? {
                    Some(v) => decode_nonneg(v)?,
                    None => 0,
                };
                m.finish(&[FRESHNESS_PERIOD])?;
                f
            }
            None => 0,
        };
        let content = r.read_optional(CONTENT, &KNOWN)?.unwrap_or_default().to_vec();
        let info = r
            .read_optional(SIGNATURE_INFO, &KNOWN)?
            .ok_or(TlvError::MalformedTlv("Data without SignatureInfo"))?;
        let sig_info = decode_sig_info(info)?;
        let sig_value = r
            .read_optional(SIGNATURE_VALUE, &KNOWN)?
            .ok_or(TlvError::MalformedTlv("Data without SignatureValue"))?
            .to_vec();
        r.finish(&KNOWN)?;
        Ok(Self { name, freshness_ms, content, sig_info, sig_value })
    }
}

fn decode_sig_info(value: &[u8]) -> Result<SigInfo, TlvError> {
    const KNOWN: [u32; 2] = [SIGNATURE_TYPE, KEY_LOCATOR];
    let mut r = Reader::new(value);
    let t = r
        .read_optional(SIGNATURE_TYPE, &KNOWN)?
        .ok_or(TlvError::MalformedTlv("SignatureInfo without SignatureType"))?;
    let sig_type = SigType::from_code(decode_nonneg(t)?)?;
    let key_locator = match r.read_optional(KEY_LOCATOR, &KNOWN)? {
        Some(kl) => Some(decode_name(kl)?),
        None => None,
    };
    r.finish(&KNOWN)?;
    Ok(SigInfo { sig_type, key_locator })
}

fn finish_packet(typ: u32, body: &[u8]) -> Result<Vec<u8>, TlvError> {
    let wire = encode_tlv(typ, body);
    if wire.len() > MAX_PACKET_SIZE {
        return Err(TlvError::PacketTooLarge(wire.len()));
    }
    Ok(wire)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Packet {
    Interest(Interest),
    Data(Data),
}

impl Packet {
    pub fn name(&self) -> &Name {
        match self {
            Packet::Interest(i) => &i.name,
            Packet::Data(d) => &d.name,
        }
    }

    pub fn encode(&self) -> Result<Vec<u8>, TlvError> {
        match self {
            Packet::Interest(i) => i.encode(),
            Packet::Data(d) => d.encode(),
        }
    }
}

/// Parses one complete packet. Bytes past the outer element are an error.
pub fn decode_packet(wire: &[u8]) -> Result<Packet, TlvError> {
    if wire.len() > MAX_PACKET_SIZE {
        return Err(TlvError::PacketTooLarge(wire.len()));
    }
    let mut r = Reader::new(wire);
    let (t, v) = r.read()?;
    if !r.is_empty() {
        return malformed("trailing bytes after packet");
    }
    match t {
        INTEREST => Interest::decode_value(v).map(Packet::Interest),
        DATA => Data::decode_value(v).map(Packet::Data),
        _ => malformed("not an Interest or Data packet"),
    }
}
