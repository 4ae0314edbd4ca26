mod common;

use common::{assert_audit_invariant, contains, Home};
use sovereign_core::controller::{ControllerError, EventKind};
use sovereign_core::crypto::{self, Keypair};
use sovereign_core::entity::{Entity, EntityConfig, Provision, PubSubError, Reject};
use sovereign_core::keystore;
use sovereign_core::name::name;
use sovereign_core::policy::{PolicySet, RuleForm};
use sovereign_core::tlv::{self, Packet};
use sovereign_core::transport::{Node, TraceKind};

fn rule(s: &str) -> RuleForm {
    s.parse().unwrap()
}

#[test]
fn bootstrap_and_command() {
    let mut h = Home::new(1);
    let ac = h.add_device("ac1", "AirCon", "bedroom");
    h.bootstrap_all();
    let now = h.now();
    h.controller().issue_command(&name("/home-test/AirCon/bedroom/CMD/on"), b"on", now).unwrap();
    h.run_for(2000);
    let d = h.entity(ac).take_deliveries();
    // Eight notifications, one actuation.
    assert_eq!(d.len(), 1);
    assert_eq!(d[0].payload, b"on");
    assert_eq!(d[0].producer, name("/home-test/AUTO/controller"));
    assert_audit_invariant(h.entity(ac), &d);
}

#[test]
fn bootstrap_postconditions() {
    let mut h = Home::new(2);
    let t = h.add_device("senor-1", "TEMP", "bedroom");
    let _lock = h.add_device("lock1", "LOCK", "front");
    h.bootstrap_all();
    let now = h.now();
    let state = h.controller().state.clone();
    let e = h.entity(t);

    // Anchor installed.
    assert_eq!(e.anchor(), Some(&state.anchor_cert));
    // Name assigned per convention: <home>/<service>/<location>/<id>.
    let me = e.name().unwrap().clone();
    assert_eq!(me, name("/home-test/TEMP/bedroom/senor-1"));
    // Certificate chains to the anchor and binds our key.
    let cert = e.certificate().unwrap();
    assert!(cert.verify(state.anchor_cert.public_key()));
    assert_eq!(cert.subject(), &me);
    assert_eq!(cert.public_key(), e.identity_public().as_slice());
    assert!(cert.is_valid_at(now));
    // Keys: only authorized ones, and the sensor's own EKEY among them.
    let set = state.policy_set();
    for key_name in e.keys().names() {
        let (scope, kind, _) = keystore::split_key_name(key_name).unwrap();
        assert!(keystore::may_hold(&set, &state.home, &me, &scope, kind), "{key_name}");
    }
    assert!(e.keys().active(&name("/home-test/TEMP/bedroom/EKEY"), now).is_some()
        || e.keys().active(&name("/home-test/TEMP/EKEY"), now).is_some());
    assert!(e.keys().versions(&name("/home-test/LOCK/DKEY")).is_empty());
    assert!(e.keys().versions(&name("/home-test/LOCK/EKEY")).is_empty());
    // Policies: exactly the filtered subset.
    let watched = state.watched_by(&set, &me);
    assert_eq!(*e.policies(), set.filter_for(&me, &watched));
    // Pairwise secret shared with the controller.
    assert_eq!(e.pairwise_secret(), Some(&state.registry[&me].pairwise));

    let boots = state.events.iter().filter(|ev| ev.kind == EventKind::Bootstrapped).count();
    assert_eq!(boots, 2);
}

#[test]
fn passive_observer_learns_no_key_material() {
    let mut h = Home::new(3);
    let tap = h.tap();
    let ac = h.add_device("ac1", "AirCon", "bedroom");
    let t = h.add_device("t1", "TEMP", "bedroom");
    h.bootstrap_all();
    let now = h.now();
    h.controller().add_rule(rule("AirCon/bedroom decrypt TEMP/CONTENT/bedroom"), None, now).unwrap();
    h.run_for(1000);
    let now = h.now();
    h.controller().rotate_key(&name("/home-test/TEMP"), now).unwrap();
    h.run_for(1000);
    let _ = (ac, t);

    let state = h.controller().state.clone();
    let mut secrets: Vec<[u8; 32]> = state.registry.values().map(|r| r.pairwise).collect();
    for scope in state.keys.scopes() {
        secrets.extend(state.keys.versions(scope).iter().map(|k| k.bytes));
    }
    let frames = &h.frames(tap);
    assert!(frames.len() > 20);
    let mut sealed = 0;
    for f in frames {
        for s in &secrets {
            assert!(!contains(f, s), "secret on the wire");
        }
        if let Ok(Packet::Data(d)) = tlv::decode_packet(f) {
            if keystore::parse_sealed_key_name(&d.name).is_some() {
                sealed += 1;
                // Someone else's pairwise secret does not open it.
                let (_, holder, _) = keystore::parse_sealed_key_name(&d.name).unwrap();
                let other = state.registry.values().find(|r| r.name != holder).unwrap();
                assert!(keystore::open_sealed_key(&d, &holder, state.anchor_cert.public_key(), &other.pairwise).is_err());
            }
        }
    }
    assert!(sealed > 0);
}

#[test]
fn replayed_hello_after_completion_is_ignored() {
    let mut h = Home::new(4);
    let tap = h.tap();
    h.add_device("ac1", "AirCon", "bedroom");
    h.bootstrap_all();
    let hello = h
        .frames(tap)
        .iter()
        .find(|f| matches!(tlv::decode_packet(f), Ok(Packet::Interest(i)) if i.name.len() > 2 && i.name.get(0).unwrap().as_bytes() == b"sovereign"))
        .unwrap()
        .clone();
    let now = h.now();
    let c = h.controller();
    c.take_outbox();
    c.on_frame(&hello, now);
    assert!(c.take_outbox().is_empty());
}

#[test]
fn wrong_token_never_bootstraps() {
    let mut h = Home::new(5);
    let now = h.now();
    h.controller().approve(Home::token("ac1"), "AirCon", "bedroom", now).unwrap();
    let cfg = h.config();
    let bad = sovereign_core::bootstrap::OobToken::new("ac1", [7; 16]);
    let i = h.sim.add(Entity::new(cfg, bad).into());
    h.run_for(10_000);
    assert!(!h.entity(i).is_bootstrapped());
    assert!(h.controller().state.events.iter().any(|e| e.kind == EventKind::TokenMismatch));
    assert!(h.controller().state.registry.is_empty());
}

#[test]
fn unapproved_hello_is_queued() {
    let mut h = Home::new(6);
    let cfg = h.config();
    let i = h.sim.add(Entity::new(cfg, Home::token("lamp")).into());
    h.run_for(5000);
    assert!(!h.entity(i).is_bootstrapped());
    assert_eq!(h.controller().pending_hellos().count(), 1);
    let now = h.now();
    h.controller().approve(Home::token("lamp"), "Light", "kitchen", now).unwrap();
    h.run_for(5000);
    assert!(h.entity(i).is_bootstrapped());
    assert_eq!(h.controller().pending_hellos().count(), 0);
}

#[test]
fn name_collision_gets_suffix() {
    let mut h = Home::new(7);
    h.add_device("ac1", "AirCon", "bedroom");
    h.bootstrap_all();
    let second = h.add_device("ac1", "AirCon", "bedroom");
    h.bootstrap_all();
    assert_eq!(h.entity(second).name(), Some(&name("/home-test/AirCon/bedroom/ac1-2")));
    assert_eq!(h.controller().state.registry.len(), 2);
}

#[test]
fn content_flow_and_rule_grant() {
    let mut h = Home::new(8);
    let ac = h.add_device("ac1", "AirCon", "bedroom");
    let t = h.add_device("t1", "TEMP", "bedroom");
    h.bootstrap_all();
    let now = h.now();
    let topic = name("/home-test/TEMP/CONTENT/bedroom/t1/temp");
    h.entity(ac).subscribe_content(name("/home-test/TEMP/CONTENT/bedroom"), now);

    // Before the rule the AC verifies but cannot decrypt.
    h.entity(t).publish_content(&topic, b"71.5", now).unwrap();
    h.run_for(2500);
    assert!(h.entity(ac).take_deliveries().is_empty());
    assert!(h.entity(ac).stats.rejected(Reject::AccessDenied) >= 1);

    let now = h.now();
    let (_, v) = h.controller().add_rule(rule("AirCon/bedroom decrypt TEMP/CONTENT/bedroom"), None, now).unwrap();
    h.run_for(1000);
    assert_eq!(h.entity(ac).policy_version(), Some(v));
    assert!(!h.entity(ac).keys().versions(&name("/home-test/TEMP/bedroom/DKEY")).is_empty());
    let now = h.now();
    h.entity(t).publish_content(&topic, b"72.0", now).unwrap();
    h.run_for(2500);
    let d = h.entity(ac).take_deliveries();
    assert_eq!(d.len(), 1, "{:?}", h.entity(ac).audit());
    assert_eq!(d[0].payload, b"72.0");
    assert_eq!(d[0].producer, name("/home-test/TEMP/bedroom/t1"));
    assert_audit_invariant(h.entity(ac), &d);
}

#[test]
fn local_policy_and_missing_key_errors() {
    let mut h = Home::new(9);
    let l = h.add_device("bulb", "Light", "kitchen");
    h.bootstrap_all();
    let now = h.now();
    let e = h.entity(l);
    assert_eq!(
        e.publish_content(&name("/home-test/TEMP/CONTENT/kitchen/x"), b"1", now).unwrap_err(),
        PubSubError::LocalPolicyDenied
    );
    assert_eq!(
        e.publish_command(&name("/home-test/LOCK/CMD/open"), b"", now).unwrap_err(),
        PubSubError::LocalPolicyDenied
    );
    // Zero-byte payloads are fine.
    assert!(e.publish_content(&name("/home-test/Light/CONTENT/kitchen/state"), b"", now).is_ok());
}

#[test]
fn kitchen_bulb_denied_temp_dkey() {
    let mut h = Home::new(10);
    let l = h.add_device("bulb", "Light", "kitchen");
    let _t = h.add_device("t1", "TEMP", "bedroom");
    h.bootstrap_all();
    let now = h.now();
    let me = h.entity(l).name().unwrap().clone();
    let v = h.controller().state.keys.current(&name("/home-test/TEMP"), now).unwrap().version;
    let want = keystore::sealed_key_name(&name("/home-test/TEMP/DKEY"), &me, v);
    let i = tlv::Interest::new(want.clone(), [1, 2, 3, 4]);
    let wire = Packet::Interest(i).encode().unwrap();
    let c = h.controller();
    c.take_outbox();
    c.on_frame(&wire, now);
    let out = c.take_outbox();
    assert!(out.iter().all(|f| !matches!(tlv::decode_packet(f), Ok(Packet::Data(d)) if d.name == want)));
    assert!(c.state.events.iter().any(|e| e.kind == EventKind::KeyRequestDenied));
}

/// An identity with a valid certificate whose software ignores its local
/// policy check and holds leaked encryption keys.
fn rogue(h: &mut Home, who: &str, keys: &[&str]) -> usize {
    let now = h.now();
    let state = h.controller().state.clone();
    let id = Keypair::generate(&mut rand_chacha::ChaCha20Rng::from_seed_u64(77));
    let subject = name(who);
    let cert = crypto::issue_certificate(&state.anchor, &state.home, &subject, &id.public_bytes(), now, 3_600_000).unwrap();
    let leaked: Vec<_> = keys
        .iter()
        .map(|k| {
            let n = name(k);
            let (scope, kind, _) = keystore::split_key_name(&n).unwrap();
            (state.keys.current(&scope, now).unwrap().as_key(&scope, kind), None)
        })
        .collect();
    let allow_all = PolicySet::from_text("/home-test | produce | /home-test\n").unwrap();
    let cfg = EntityConfig::new(50, 50);
    let p = Provision { identity: id, certificate: cert, anchor: state.anchor_cert.clone(), policies: allow_all, keys: leaked };
    h.sim.add(Entity::provisioned(cfg, p, now).into())
}

trait SeedU64 {
    fn from_seed_u64(s: u64) -> Self;
}

impl SeedU64 for rand_chacha::ChaCha20Rng {
    fn from_seed_u64(s: u64) -> Self {
        <Self as rand_core::SeedableRng>::seed_from_u64(s)
    }
}

#[test]
fn enforcement_unauthorized_producers_are_rejected() {
    let mut h = Home::new(11);
    let lock = h.add_device("lock1", "LOCK", "front");
    let ac = h.add_device("ac1", "AirCon", "bedroom");
    let t = h.add_device("t1", "TEMP", "bedroom");
    h.bootstrap_all();
    let now = h.now();
    h.controller().add_rule(rule("AirCon/bedroom decrypt TEMP/CONTENT/bedroom"), None, now).unwrap();
    h.run_for(1000);
    let r = rogue(&mut h, "/home-test/APP/phone/evil", &["/home-test/LOCK/EKEY", "/home-test/TEMP/bedroom/EKEY"]);
    h.sim.bus.set_recording(true);
    let now = h.now();
    h.entity(ac).subscribe_content(name("/home-test/TEMP/CONTENT/bedroom"), now);

    // Unauthorized: rogue commands the lock and fakes a temperature.
    h.entity(r).publish_command(&name("/home-test/LOCK/front/CMD/open"), b"open", now).unwrap();
    h.entity(r).publish_content(&name("/home-test/TEMP/CONTENT/bedroom/t1/temp"), b"99", now).unwrap();
    h.run_for(3000);
    assert!(h.entity(lock).take_deliveries().is_empty());
    assert!(h.entity(ac).take_deliveries().is_empty());
    assert!(h.entity(lock).stats.rejected(Reject::PolicyDenied) >= 1);
    assert!(h.entity(ac).stats.rejected(Reject::PolicyDenied) >= 1);
    assert_eq!(h.entity(lock).stats.decrypt_attempts, 0);

    // Authorized equivalents go through.
    let now = h.now();
    h.controller().issue_command(&name("/home-test/LOCK/front/CMD/open"), b"open", now).unwrap();
    h.entity(t).publish_content(&name("/home-test/TEMP/CONTENT/bedroom/t1/temp"), b"70", now).unwrap();
    h.run_for(3000);
    let dl = h.entity(lock).take_deliveries();
    let da = h.entity(ac).take_deliveries();
    assert_eq!(dl.len(), 1);
    assert_eq!(da.len(), 1);
    assert_audit_invariant(h.entity(lock), &dl);
    assert_audit_invariant(h.entity(ac), &da);
    let rejected = h.controller().state.events.iter().filter(|e| e.kind == EventKind::Rejected).count();
    let _ = rejected;
}

#[test]
fn no_decryption_before_verification() {
    let mut h = Home::new(12);
    let lock = h.add_device("lock1", "LOCK", "front");
    h.bootstrap_all();
    let now = h.now();
    let p = h.controller().issue_command(&name("/home-test/LOCK/front/CMD/open"), b"open", now).unwrap();
    h.run_for(2000);
    assert_eq!(h.entity(lock).take_deliveries().len(), 1);
    let attempts = h.entity(lock).stats.decrypt_attempts;

    // Tampered ciphertext, tampered signature and an unanchored signer.
    let mut forged = Vec::new();
    let mut d = p.data.clone();
    d.name = name(&format!("/home-test/LOCK/front/CMD/x/t={}", now + 10));
    forged.push(d.clone());
    let mut d2 = p.data.clone();
    d2.name = name(&format!("/home-test/LOCK/front/CMD/y/t={}", now + 11));
    let last = d2.sig_value.len() - 1;
    d2.sig_value[last] ^= 1;
    forged.push(d2);
    let stranger = Keypair::generate(&mut rand_chacha::ChaCha20Rng::from_seed_u64(5));
    let mut d3 = p.data.clone();
    d3.name = name(&format!("/home-test/LOCK/front/CMD/z/t={}", now + 12));
    crypto::sign_data(&mut d3, &stranger, p.data.sig_info.key_locator.clone().unwrap());
    forged.push(d3);

    let now = h.now();
    for d in forged {
        let wire = Packet::Data(d).encode().unwrap();
        h.entity(lock).on_frame(&wire, now);
    }
    h.run_for(2000);
    let e = h.entity(lock);
    assert!(e.take_deliveries().is_empty());
    assert_eq!(e.stats.decrypt_attempts, attempts);
    assert_eq!(e.stats.rejected(Reject::BadSignature), 3);
}

#[test]
fn replayed_command_is_not_actuated() {
    let mut h = Home::new(13);
    let lock = h.add_device("lock1", "LOCK", "front");
    h.bootstrap_all();
    let now = h.now();
    let p = h.controller().issue_command(&name("/home-test/LOCK/front/CMD/open"), b"open", now).unwrap();
    h.run_for(2000);
    assert_eq!(h.entity(lock).take_deliveries().len(), 1);
    let wire = Packet::Data(p.data.clone()).encode().unwrap();

    // Immediately: a duplicate.
    let now = h.now();
    h.entity(lock).on_frame(&wire, now);
    assert!(h.entity(lock).take_deliveries().is_empty());

    // Much later, once the dedup memory has gone: stale.
    h.run_for(200_000);
    let now = h.now();
    h.entity(lock).on_frame(&wire, now);
    assert!(h.entity(lock).take_deliveries().is_empty());
    assert!(h.entity(lock).stats.rejected(Reject::Stale) >= 1);
}

#[test]
fn one_room_command_actuates_three_devices_with_one_data() {
    let mut h = Home::new(14);
    let lights: Vec<usize> = (1..=3).map(|i| h.add_device(&format!("bulb{i}"), "Light", "kitchen")).collect();
    let other = h.add_device("bulb9", "Light", "hall");
    h.bootstrap_all();
    h.sim.bus.set_recording(true);
    let now = h.now();
    let p = h.controller().issue_command(&name("/home-test/Light/kitchen/CMD/switch-on"), b"on", now).unwrap();
    h.run_for(3000);
    for &l in &lights {
        let d = h.entity(l).take_deliveries();
        assert_eq!(d.len(), 1);
        assert_audit_invariant(h.entity(l), &d);
    }
    assert!(h.entity(other).take_deliveries().is_empty());
    let data_sends = h
        .sim
        .bus
        .trace()
        .iter()
        .filter(|t| t.kind == TraceKind::Send && !t.is_interest && t.name == p.data.name)
        .count();
    assert_eq!(data_sends, 1);
}

#[test]
fn long_poll_answers_on_publish() {
    let mut h = Home::new(15);
    let ac = h.add_device("ac1", "AirCon", "bedroom");
    let t = h.add_device("t1", "TEMP", "bedroom");
    h.bootstrap_all();
    let now = h.now();
    h.controller().add_rule(rule("AirCon/bedroom decrypt TEMP/CONTENT/bedroom"), None, now).unwrap();
    h.run_for(1000);
    let now = h.now();
    h.entity(ac).subscribe_content_every(name("/home-test/TEMP/CONTENT/bedroom"), 0, now);
    h.run_for(700);
    let now = h.now();
    h.entity(t).publish_content(&name("/home-test/TEMP/CONTENT/bedroom/t1/temp"), b"70", now).unwrap();
    h.run_for(100);
    let d = h.entity(ac).take_deliveries();
    assert_eq!(d.len(), 1);
    // One bus hop each way plus nothing else.
    assert!(d[0].received_at - now <= 20, "{}", d[0].received_at - now);
}

#[test]
fn obfuscated_names_round_trip() {
    let mut h = Home::new(16);
    let ac = h.add_device("ac1", "AirCon", "bedroom");
    let mut cfg = h.config();
    cfg.obfuscate = true;
    let t = h.add_device_with("t1", "TEMP", "bedroom", cfg);
    h.bootstrap_all();
    let now = h.now();
    h.controller().add_rule(rule("AirCon/bedroom decrypt TEMP/CONTENT/bedroom"), None, now).unwrap();
    h.run_for(1000);
    let now = h.now();
    h.entity(ac).subscribe_content(name("/home-test/TEMP/CONTENT/bedroom"), now);
    let topic = name("/home-test/TEMP/CONTENT/bedroom/t1/temp");
    let p = h.entity(t).publish_content(&topic, b"70", now).unwrap();
    assert_ne!(p.data.name.prefix(topic.len()), topic);
    assert_eq!(p.clear_name.prefix(topic.len()), topic);
    h.run_for(2500);
    let d = h.entity(ac).take_deliveries();
    assert_eq!(d.len(), 1);
    assert_eq!(d[0].clear_name, p.clear_name);
    assert_eq!(d[0].name, p.data.name);
}

#[test]
fn revocation_by_non_renewal() {
    let mut h = Home::new(17);
    let ac = h.add_device("ac1", "AirCon", "bedroom");
    let w = h.add_device("w1", "Window", "bedroom");
    let t = h.add_device("t1", "TEMP", "bedroom");
    h.bootstrap_all();
    let now = h.now();
    let (ac_rule, _) = h.controller().add_rule(rule("AirCon/bedroom decrypt TEMP/CONTENT/bedroom"), None, now).unwrap();
    h.controller().add_rule(rule("Window/bedroom decrypt TEMP/CONTENT/bedroom"), None, now).unwrap();
    h.run_for(1000);
    let now = h.now();
    h.entity(ac).subscribe_content(name("/home-test/TEMP/CONTENT/bedroom"), now);
    h.entity(w).subscribe_content(name("/home-test/TEMP/CONTENT/bedroom"), now);

    let now = h.now();
    let v = h.controller().state.policy_version;
    h.controller().remove_rule(ac_rule, Some(v), now).unwrap();
    assert!(h.controller().state.events.iter().any(|e| e.kind == EventKind::KeyRotated));
    h.run_for(2000);

    let (mut got_ac, mut got_w) = (0, 0);
    for i in 0..100 {
        let now = h.now();
        h.entity(t).publish_content(&name(&format!("/home-test/TEMP/CONTENT/bedroom/t1/r{i}")), b"x", now).unwrap();
        h.run_for(1100);
        got_ac += h.entity(ac).take_deliveries().len();
        got_w += h.entity(w).take_deliveries().len();
    }
    assert_eq!(got_ac, 0);
    assert_eq!(got_w, 100);
}

#[test]
fn rule_versions_and_errors() {
    let mut h = Home::new(18);
    let now = h.now();
    let v0 = h.controller().state.policy_version;
    let (id, v1) = h.controller().add_rule(rule("Light/kitchen decrypt TEMP/CONTENT/kitchen"), Some(v0), now).unwrap();
    assert_eq!(v1, v0 + 1);
    assert_eq!(
        h.controller().add_rule(rule("Light decrypt TEMP/CONTENT"), Some(v0), now).unwrap_err(),
        ControllerError::VersionConflict { expected: v0, current: v1 }
    );
    assert!(matches!(
        h.controller().add_rule(rule("Nope decrypt TEMP/CONTENT"), None, now),
        Err(ControllerError::Policy(_))
    ));
    assert_eq!(h.controller().state.policy_version, v1);
    assert_eq!(h.controller().remove_rule(9999, None, now).unwrap_err(), ControllerError::NoSuchRule(9999));
    assert_eq!(h.controller().remove_rule(id, None, now).unwrap(), v1 + 1);
}

#[test]
fn renewal_through_store_while_controller_is_down() {
    let lifetime = 20_000;
    let mut h = Home::with_bus(19, Default::default(), lifetime);
    let mut cfg = h.config();
    cfg.store = true;
    h.add_device_with("repo", "REPO", "closet", cfg);
    h.bootstrap_all();
    // Joining later, the lock gets only the active version in its grant
    // and must fetch successors by name.
    let lock = h.add_device("lock1", "LOCK", "front");
    h.run_for(2000);
    assert!(h.entity(lock).is_bootstrapped());
    let dkey = name("/home-test/LOCK/DKEY");
    assert_eq!(h.entity(lock).keys().versions(&dkey).len(), 1);
    let before = h.entity(lock).keys().versions(&dkey)[0].version;
    h.sim.remove(0);
    let lock = lock - 1;
    h.run_for(lifetime * 3 / 2);
    let now = h.now();
    let k = h.entity(lock).keys().active(&dkey, now).expect("no active key");
    assert!(k.version > before, "no renewal: {before} -> {}", k.version);
}
