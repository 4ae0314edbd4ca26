//! Symmetric scope keys: controller-side generation and rotation, sealed
//! per-entity delivery, and the entity-side key ring.
//!
//! A scope is `/<home>/<service>` or `/<home>/<service>/<location>`. Its
//! EKEY and DKEY share key bytes; which entities may hold which name is
//! decided by policy. Versions are activation times in unix millis: version
//! `v` is used for new encryption from `v` until `not_after`, and the next
//! version activates before the previous one expires.

use alloc::collections::BTreeMap;
use alloc::vec::Vec;

use rand_core::CryptoRngCore;

use crate::crypto::{self, CryptoError, Keypair, SymmetricKey};
use crate::name::{Name, NameComponent};
use crate::naming::{self, KeyKind};
use crate::policy::PolicySet;
use crate::tlv::{self, app, Data, Fields, SigInfo, SigType, TlvError};

pub const DEFAULT_KEY_LIFETIME_MS: u64 = 24 * 3600 * 1000;
/// Entities look for a newer version at this fraction of a key's lifetime.
pub const RENEWAL_NUM: u64 = 4;
pub const RENEWAL_DEN: u64 = 5;
/// The controller activates the next version at this fraction.
pub const ROTATION_NUM: u64 = 3;
pub const ROTATION_DEN: u64 = 4;
/// Versions already active that are kept (current and previous).
pub const RETAINED_VERSIONS: usize = 2;
/// Future versions generated ahead and handed to the store.
pub const DEFAULT_HORIZON: usize = 2;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum KeyError {
    #[error("no authorization for this key")]
    PolicyDenied,
    #[error("sealed key Data is not signed by the trust anchor")]
    BadSignature,
    #[error("sealed key name is malformed")]
    BadName,
    #[error("sealed key is addressed to another entity")]
    NotForUs,
    #[error("no usable key is available")]
    KeyUnavailable,
    #[error(transparent)]
    Crypto(#[from] CryptoError),
    #[error(transparent)]
    Tlv(#[from] TlvError),
}

#[derive(Clone, PartialEq, Eq)]
pub struct KeyMaterial {
    pub version: u64,
    pub bytes: [u8; 32],
    pub not_after: u64,
}

impl core::fmt::Debug for KeyMaterial {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        f.debug_struct("KeyMaterial")
            .field("version", &self.version)
            .field("not_after", &self.not_after)
            .finish_non_exhaustive()
    }
}

impl KeyMaterial {
    pub fn is_active(&self, now: u64) -> bool {
        self.version <= now && now < self.not_after
    }

    pub fn as_key(&self, scope: &Name, kind: KeyKind) -> SymmetricKey {
        SymmetricKey { name: scope.with(kind.as_str()), version: self.version, bytes: self.bytes, not_after: self.not_after }
    }
}

/// Splits `/<scope>/EKEY|DKEY[/...]` at the key kind.
pub fn split_key_name(name: &Name) -> Option<(Name, KeyKind, Name)> {
    let i = name
        .components()
        .iter()
        .position(|c| c.as_bytes() == naming::EKEY.as_bytes() || c.as_bytes() == naming::DKEY.as_bytes())?;
    let kind = if name.components()[i].as_bytes() == naming::EKEY.as_bytes() { KeyKind::Ekey } else { KeyKind::Dkey };
    Some((name.prefix(i), kind, name.suffix_from(i + 1)))
}

/// Candidate key scopes for a content or command name, narrowest first.
pub fn scopes_for(home: &Name, data_name: &Name) -> Vec<Name> {
    if !home.is_prefix_of(data_name) || data_name.len() <= home.len() {
        return Vec::new();
    }
    let service = home.child(data_name.components()[home.len()].clone());
    let rest = data_name.suffix_from(home.len() + 1);
    let location = match rest.get(0) {
        Some(c) if c.as_bytes() == naming::CONTENT.as_bytes() => rest.get(1),
        Some(c) if c.as_bytes() == naming::CMD.as_bytes() => None,
        other => other,
    };
    let mut out = Vec::new();
    if let Some(l) = location {
        if l.timestamp().is_none() {
            out.push(service.child(l.clone()));
        }
    }
    out.push(service);
    out
}

/// Namespaces that a key scope protects: `/<home>/S` covers the whole
/// service, `/<home>/S/loc` covers that room's content and commands.
pub fn protected_namespaces(home: &Name, scope: &Name) -> Vec<Name> {
    if scope.len() == home.len() + 2 {
        let service = scope.prefix(home.len() + 1);
        let loc = scope.last().expect("non-empty").clone();
        alloc::vec![service.with(naming::CONTENT).child(loc), scope.clone()]
    } else {
        alloc::vec![scope.clone()]
    }
}

/// Whether `entity` may hold the EKEY or DKEY of `scope`. Producing in a
/// scope implies encrypting in it.
pub fn may_hold(policies: &PolicySet, home: &Name, entity: &Name, scope: &Name, kind: KeyKind) -> bool {
    match kind {
        KeyKind::Dkey => policies.check_decrypt(entity, &scope.with(naming::DKEY)).is_allow(),
        KeyKind::Ekey => protected_namespaces(home, scope).iter().any(|ns| policies.may_produce_under(entity, ns)),
    }
}

/// Controller-side key table.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct KeyStore {
    pub lifetime_ms: u64,
    pub horizon: usize,
    scopes: BTreeMap<Name, Vec<KeyMaterial>>,
}

impl KeyStore {
    pub fn new(lifetime_ms: u64) -> Self {
        Self { lifetime_ms, horizon: DEFAULT_HORIZON, scopes: BTreeMap::new() }
    }

    fn step(&self) -> u64 {
        (self.lifetime_ms * ROTATION_NUM / ROTATION_DEN).max(1)
    }

    fn fresh(&self, version: u64, rng: &mut impl CryptoRngCore) -> KeyMaterial {
        let mut bytes = [0u8; 32];
        rng.fill_bytes(&mut bytes);
        KeyMaterial { version, bytes, not_after: version + self.lifetime_ms }
    }

    pub fn scopes(&self) -> impl Iterator<Item = &Name> {
        self.scopes.keys()
    }

    pub fn versions(&self, scope: &Name) -> &[KeyMaterial] {
        self.scopes.get(scope).map(Vec::as_slice).unwrap_or(&[])
    }

    /// The version generated after `version`, if any.
    pub fn successor(&self, scope: &Name, version: u64) -> Option<u64> {
        self.versions(scope).iter().map(|k| k.version).find(|v| *v > version)
    }

    pub fn find(&self, scope: &Name, version: u64) -> Option<&KeyMaterial> {
        self.versions(scope).iter().find(|k| k.version == version)
    }

    pub fn current(&self, scope: &Name, now: u64) -> Option<&KeyMaterial> {
        self.versions(scope).iter().rev().find(|k| k.is_active(now))
    }

    /// Makes sure `scope` has an active key and `horizon` future versions.
    /// Returns the versions created.
    pub fn ensure(&mut self, scope: &Name, now: u64, rng: &mut impl CryptoRngCore) -> Vec<KeyMaterial> {
        let mut created = Vec::new();
        if self.current(scope, now).is_none() {
            let v = self.versions(scope).last().map_or(now, |k| now.max(k.version + 1));
            let k = self.fresh(v, rng);
            created.push(k.clone());
            self.scopes.entry(scope.clone()).or_default().push(k);
        }
        loop {
            let list = &self.scopes[scope];
            let future = list.iter().filter(|k| k.version > now).count();
            if future >= self.horizon {
                break;
            }
            let next = list.last().expect("non-empty").version + self.step();
            let k = self.fresh(next, rng);
            created.push(k.clone());
            self.scopes.get_mut(scope).expect("present").push(k);
        }
        self.prune(scope, now);
        created
    }

    /// Forces a new version active from `now`, discarding pre-generated
    /// future versions, then refills the horizon.
    pub fn provision_scope_key(&mut self, scope: &Name, now: u64, rng: &mut impl CryptoRngCore) -> Vec<KeyMaterial> {
        let list = self.scopes.entry(scope.clone()).or_default();
        list.retain(|k| k.version <= now);
        let v = list.last().map_or(now, |k| now.max(k.version + 1));
        let k = self.fresh(v, rng);
        self.scopes.get_mut(scope).expect("present").push(k.clone());
        let mut created = alloc::vec![k];
        created.extend(self.ensure(scope, now, rng));
        created
    }

    fn prune(&mut self, scope: &Name, now: u64) {
        if let Some(list) = self.scopes.get_mut(scope) {
            let active_or_past = list.iter().filter(|k| k.version <= now).count();
            let drop = active_or_past.saturating_sub(RETAINED_VERSIONS);
            list.drain(..drop);
        }
    }

    pub fn remove_scope(&mut self, scope: &Name) {
        self.scopes.remove(scope);
    }

    /// Restores a table from persisted parts.
    pub fn from_parts(lifetime_ms: u64, horizon: usize, scopes: BTreeMap<Name, Vec<KeyMaterial>>) -> Self {
        Self { lifetime_ms, horizon, scopes }
    }
}

/// `<key-name>/<entity components>/t=<version>`
pub fn sealed_key_name(key_name: &Name, entity: &Name, version: u64) -> Name {
    naming::sealed_key_prefix(key_name, entity).child(NameComponent::from_timestamp(version))
}

/// Seals one key version for one entity under their pairwise secret,
/// signed by the anchor. `next` is the version scheduled to follow, if
/// already generated, so holders can fetch successors in order.
#[allow(clippy::too_many_arguments)]
pub fn seal_key(
    material: &KeyMaterial,
    next: Option<u64>,
    scope: &Name,
    kind: KeyKind,
    entity: &Name,
    pairwise: &[u8; 32],
    anchor: &Keypair,
    anchor_key_name: &Name,
    rng: &mut impl CryptoRngCore,
) -> Data {
    let mut plain = tlv::encode_tlv(app::KEY_BYTES, &material.bytes);
    tlv::write_tlv(&mut plain, app::KEY_VERSION, &tlv::encode_nonneg(material.version));
    tlv::write_tlv(&mut plain, app::NOT_AFTER, &tlv::encode_nonneg(material.not_after));
    if let Some(n) = next {
        tlv::write_tlv(&mut plain, app::NEXT_VERSION, &tlv::encode_nonneg(n));
    }
    let content = tlv::encode_tlv(app::SEALED_KEY, &crypto::encrypt(pairwise, &plain, rng));
    let name = sealed_key_name(&scope.with(kind.as_str()), entity, material.version);
    let mut data = Data::new(name, content, SigInfo { sig_type: SigType::DigestSha256, key_locator: None });
    crypto::sign_data(&mut data, anchor, anchor_key_name.clone());
    data
}

/// Parses a sealed key name into (key name, addressed entity, version).
pub fn parse_sealed_key_name(name: &Name) -> Option<(Name, Name, u64)> {
    let (scope, kind, rest) = split_key_name(name)?;
    let version = rest.timestamp()?;
    let entity = rest.prefix(rest.len() - 1);
    (!entity.is_empty()).then(|| (scope.with(kind.as_str()), entity, version))
}

/// An opened sealed key and the successor version it announces.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OpenedKey {
    pub key: SymmetricKey,
    pub next: Option<u64>,
}

/// Verifies and opens a sealed key addressed to `entity`.
pub fn open_sealed_key(data: &Data, entity: &Name, anchor_public: &[u8], pairwise: &[u8; 32]) -> Result<OpenedKey, KeyError> {
    let (key_name, addressed, version) = parse_sealed_key_name(&data.name).ok_or(KeyError::BadName)?;
    if addressed != *entity {
        return Err(KeyError::NotForUs);
    }
    if !crypto::verify_data(data, anchor_public) {
        return Err(KeyError::BadSignature);
    }
    let ct = Fields::parse(&data.content)?.require(app::SEALED_KEY, "missing sealed key")?.to_vec();
    let plain = crypto::decrypt(pairwise, &ct)?;
    let f = Fields::parse(&plain)?;
    let bytes: [u8; 32] = f
        .require(app::KEY_BYTES, "missing key bytes")?
        .try_into()
        .map_err(|_| TlvError::MalformedTlv("key must be 32 bytes"))?;
    let inner_version = f.number(app::KEY_VERSION, "missing key version")?;
    if inner_version != version {
        return Err(KeyError::BadName);
    }
    let next = f.get(app::NEXT_VERSION).map(tlv::decode_nonneg).transpose()?;
    Ok(OpenedKey {
        key: SymmetricKey { name: key_name, version, bytes, not_after: f.number(app::NOT_AFTER, "missing not-after")? },
        next,
    })
}

/// Entity-side key cache, keyed by unversioned EKEY/DKEY name.
#[derive(Debug, Clone, Default)]
pub struct KeyRing {
    keys: BTreeMap<Name, Vec<SymmetricKey>>,
    /// Announced successor of each held version.
    next: BTreeMap<(Name, u64), u64>,
}

impl KeyRing {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds a version; returns false if it was already held.
    pub fn insert(&mut self, key: SymmetricKey) -> bool {
        let list = self.keys.entry(key.name.clone()).or_default();
        if list.iter().any(|k| k.version == key.version) {
            return false;
        }
        list.push(key);
        list.sort_by_key(|k| k.version);
        true
    }

    /// Adds a version along with the successor it announces. A forced
    /// rotation shows up as a successor that skips versions still held;
    /// those are dropped, and a version that an installed announcement
    /// already skips over is refused.
    pub fn insert_announced(&mut self, key: SymmetricKey, next: Option<u64>) -> bool {
        let name = key.name.clone();
        let v = key.version;
        let superseded = self
            .next
            .range((name.clone(), 0)..=(name.clone(), u64::MAX))
            .any(|((_, lo), hi)| *lo < v && v < *hi);
        if superseded {
            return false;
        }
        if let Some(hi) = next {
            if let Some(list) = self.keys.get_mut(&name) {
                list.retain(|k| !(k.version > v && k.version < hi));
            }
            self.next.retain(|(n, lo), _| !(*n == name && *lo > v && *lo < hi));
            self.next.insert((name.clone(), v), hi);
        }
        let added = self.insert(key);
        added || next.is_some()
    }

    /// Successor announced for `version`, if known.
    pub fn announced_next(&self, name: &Name, version: u64) -> Option<u64> {
        self.next.get(&(name.clone(), version)).copied()
    }

    pub fn names(&self) -> impl Iterator<Item = &Name> {
        self.keys.keys()
    }

    pub fn versions(&self, name: &Name) -> &[SymmetricKey] {
        self.keys.get(name).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn get(&self, name: &Name, version: u64) -> Option<&SymmetricKey> {
        self.versions(name).iter().find(|k| k.version == version)
    }

    pub fn contains_bytes(&self, bytes: &[u8; 32]) -> bool {
        self.keys.values().flatten().any(|k| &k.bytes == bytes)
    }

    /// Newest active version of `name`.
    pub fn active(&self, name: &Name, now: u64) -> Option<&SymmetricKey> {
        self.versions(name).iter().rev().find(|k| k.version <= now && !k.is_expired(now))
    }

    /// The encryption key to use for `data_name`: the newest active EKEY of
    /// the narrowest scope held.
    pub fn encryption_key(&self, home: &Name, data_name: &Name, now: u64) -> Option<&SymmetricKey> {
        scopes_for(home, data_name).iter().find_map(|s| self.active(&s.with(naming::EKEY), now))
    }

    /// Key names whose newest version has reached its renewal point.
    pub fn due_for_renewal(&self, now: u64) -> Vec<Name> {
        self.keys
            .iter()
            .filter_map(|(n, list)| {
                let k = list.last()?;
                (now >= renewal_point(k)).then(|| n.clone())
            })
            .collect()
    }

    /// Earliest renewal point across held keys.
    pub fn next_renewal(&self) -> Option<u64> {
        self.keys.values().filter_map(|l| l.last()).map(renewal_point).min()
    }

    /// Drops expired versions beyond the retained count.
    pub fn prune(&mut self, now: u64) {
        let mut gone = Vec::new();
        for (name, list) in self.keys.iter_mut() {
            let past = list.iter().filter(|k| k.version <= now).count();
            let drop = past.saturating_sub(RETAINED_VERSIONS);
            gone.extend(list.drain(..drop).map(|k| (name.clone(), k.version)));
        }
        for g in gone {
            self.next.remove(&g);
        }
    }

    pub fn remove(&mut self, name: &Name) {
        self.keys.remove(name);
        self.next.retain(|(n, _), _| n != name);
    }

    /// The version to renew from: the newest one active at `now`, followed
    /// along announced successors that are already held. Returns it with
    /// its announced successor.
    pub fn renewal_base(&self, name: &Name, now: u64) -> Option<(&SymmetricKey, Option<u64>)> {
        let list = self.versions(name);
        let mut cur = list.iter().rev().find(|k| k.version <= now).or_else(|| list.first())?;
        loop {
            let next = self.announced_next(name, cur.version);
            match next.and_then(|n| self.get(name, n)) {
                Some(k) => cur = k,
                None => return Some((cur, next)),
            }
        }
    }
}

pub fn renewal_point(k: &SymmetricKey) -> u64 {
    k.version + (k.not_after.saturating_sub(k.version)) * RENEWAL_NUM / RENEWAL_DEN
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::name::name;
    use crate::policy::Policy;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    #[test]
    fn announced_successors() {
        let n = name("/h/TEMP/DKEY");
        let k = |v: u64| SymmetricKey { name: n.clone(), version: v, bytes: [v as u8; 32], not_after: v + 100 };
        let mut ring = KeyRing::new();
        assert!(ring.insert_announced(k(10), Some(85)));
        assert!(ring.insert_announced(k(85), Some(160)));
        assert_eq!(ring.renewal_base(&n, 20).unwrap().0.version, 85);
        assert_eq!(ring.renewal_base(&n, 20).unwrap().1, Some(160));
        // Forced rotation at 40: 10 now announces 40, which skips 85.
        assert!(ring.insert_announced(k(10), Some(40)));
        assert!(ring.insert_announced(k(40), Some(115)));
        assert!(ring.get(&n, 85).is_none());
        // A late copy of the discarded version is refused.
        assert!(!ring.insert_announced(k(85), Some(160)));
        assert_eq!(ring.versions(&n).iter().map(|k| k.version).collect::<Vec<_>>(), [10, 40]);
        assert_eq!(ring.active(&n, 90).unwrap().version, 40);
    }

    #[test]
    fn rotation_schedule() {
        let mut rng = ChaCha20Rng::seed_from_u64(1);
        let mut ks = KeyStore::new(1000);
        let scope = name("/h/TEMP");
        let created = ks.ensure(&scope, 10_000, &mut rng);
        assert_eq!(created.iter().map(|k| k.version).collect::<Vec<_>>(), [10_000, 10_750, 11_500]);
        assert!(ks.ensure(&scope, 10_100, &mut rng).is_empty());
        assert_eq!(ks.current(&scope, 10_800).unwrap().version, 10_750);
        assert_eq!(ks.ensure(&scope, 10_800, &mut rng).len(), 1);
        // Forced rotation: strictly newer, active now, future refilled.
        let forced = ks.provision_scope_key(&scope, 10_900, &mut rng);
        assert_eq!(forced[0].version, 10_900);
        assert_eq!(ks.current(&scope, 10_900).unwrap().version, 10_900);
        let again = ks.provision_scope_key(&scope, 10_900, &mut rng);
        assert_eq!(again[0].version, 10_901);
        assert!(ks.versions(&scope).iter().filter(|k| k.version <= 10_900).count() <= RETAINED_VERSIONS);
    }

    #[test]
    fn scopes_for_names() {
        let h = name("/h");
        assert_eq!(scopes_for(&h, &name("/h/TEMP/CONTENT/bedroom/s1/temp/t=1")), [name("/h/TEMP/bedroom"), name("/h/TEMP")]);
        assert_eq!(scopes_for(&h, &name("/h/AirCon/bedroom/CMD/x/t=1")), [name("/h/AirCon/bedroom"), name("/h/AirCon")]);
        assert_eq!(scopes_for(&h, &name("/h/AirCon/CMD/x/t=1")), [name("/h/AirCon")]);
        assert!(scopes_for(&h, &name("/other/x")).is_empty());
    }

    #[test]
    fn seal_open_and_access() {
        let mut rng = ChaCha20Rng::seed_from_u64(2);
        let anchor = Keypair::generate(&mut rng);
        let akn = crypto::key_name(&name("/h"), &anchor);
        let ac = name("/h/AirCon/bedroom/ac");
        let bulb = name("/h/Light/kitchen/bulb");
        let pairwise = [7u8; 32];
        let mut ks = KeyStore::new(DEFAULT_KEY_LIFETIME_MS);
        let scope = name("/h/TEMP");
        let k = ks.ensure(&scope, 1, &mut rng)[0].clone();
        let sealed = seal_key(&k, Some(9), &scope, KeyKind::Dkey, &ac, &pairwise, &anchor, &akn, &mut rng);
        assert_eq!(sealed.name, sealed_key_name(&name("/h/TEMP/DKEY"), &ac, k.version));
        assert_eq!(
            sealed.name.to_uri(),
            alloc::format!("/h/TEMP/DKEY/h/AirCon/bedroom/ac/t={}", k.version)
        );
        let opened = open_sealed_key(&sealed, &ac, &anchor.public_bytes(), &pairwise).unwrap();
        assert_eq!(opened.key.bytes, k.bytes);
        assert_eq!(opened.key.name, name("/h/TEMP/DKEY"));
        assert_eq!(opened.next, Some(9));
        assert_eq!(open_sealed_key(&sealed, &bulb, &anchor.public_bytes(), &pairwise), Err(KeyError::NotForUs));
        // Another entity's pairwise secret cannot open it.
        assert!(open_sealed_key(&sealed, &ac, &anchor.public_bytes(), &[8u8; 32]).is_err());
        let mut forged = sealed.clone();
        forged.content[4] ^= 1;
        assert_eq!(open_sealed_key(&forged, &ac, &anchor.public_bytes(), &pairwise), Err(KeyError::BadSignature));

        let set = PolicySet::new(
            alloc::vec![
                "/h/AirCon/bedroom | decrypt | /h/TEMP/<>*/DKEY".parse::<Policy>().unwrap(),
                "/h/TEMP | produce | /h/TEMP/CONTENT".parse().unwrap(),
                "/h/AUTO/controller | produce | /h/<>*/CMD".parse().unwrap(),
            ],
            1,
        );
        let h = name("/h");
        assert!(may_hold(&set, &h, &ac, &scope, KeyKind::Dkey));
        assert!(!may_hold(&set, &h, &bulb, &scope, KeyKind::Dkey));
        assert!(!may_hold(&set, &h, &ac, &scope, KeyKind::Ekey));
        let sensor = name("/h/TEMP/bedroom/s1");
        assert!(may_hold(&set, &h, &sensor, &scope, KeyKind::Ekey));
        assert!(may_hold(&set, &h, &sensor, &name("/h/TEMP/bedroom"), KeyKind::Ekey));
        assert!(!may_hold(&set, &h, &sensor, &name("/h/LOCK"), KeyKind::Dkey));
        let ctl = name("/h/AUTO/controller");
        assert!(may_hold(&set, &h, &ctl, &name("/h/LOCK"), KeyKind::Ekey));
        assert!(may_hold(&set, &h, &ctl, &name("/h/Light/kitchen"), KeyKind::Ekey));
    }

    #[test]
    fn ring_selection_and_renewal() {
        let mut ring = KeyRing::new();
        let h = name("/h");
        let mk = |n: &str, v: u64| SymmetricKey { name: name(n), version: v, bytes: [v as u8; 32], not_after: v + 1000 };
        assert!(ring.insert(mk("/h/TEMP/EKEY", 100)));
        assert!(!ring.insert(mk("/h/TEMP/EKEY", 100)));
        ring.insert(mk("/h/TEMP/EKEY", 850));
        let dn = name("/h/TEMP/CONTENT/bedroom/s1/temp/t=1");
        assert_eq!(ring.encryption_key(&h, &dn, 500).unwrap().version, 100);
        assert_eq!(ring.encryption_key(&h, &dn, 900).unwrap().version, 850);
        assert!(ring.encryption_key(&h, &dn, 5000).is_none());
        ring.insert(mk("/h/TEMP/bedroom/EKEY", 200));
        assert_eq!(ring.encryption_key(&h, &dn, 500).unwrap().name, name("/h/TEMP/bedroom/EKEY"));
        assert_eq!(ring.due_for_renewal(1000), [name("/h/TEMP/bedroom/EKEY")]);
        assert_eq!(ring.next_renewal(), Some(1000));
    }
}
