use proptest::prelude::*;
use rand_chacha::ChaCha20Rng;
use rand_core::SeedableRng;
use sovereign::devices::{Device, Member, Role};
use sovereign::state_file::{self, StateError};
use sovereign_core::bootstrap::OobToken;
use sovereign_core::controller::{Controller, HomeState};
use sovereign_core::entity::EntityConfig;
use sovereign_core::name::Name;
use sovereign_core::transport::{BusConfig, SimBus, Simulation};

const START: u64 = 1_700_000_000_000;
const PASS: &str = "hunter2 but longer";

fn switch_on(sim: &mut Simulation<Member>, c: usize) {
    let now = sim.now();
    let topic: Name = "/restart-home/Light/hall/CMD/switch-on".parse().unwrap();
    sim.nodes[c].controller_mut().unwrap().issue_command(&topic, b"", now).unwrap();
}

fn switch_ons(sim: &Simulation<Member>, light: usize) -> usize {
    sim.nodes[light].device().unwrap().actuations.iter().filter(|a| a.action == "switch-on").count()
}

#[test]
fn restarted_controller_keeps_serving_its_home() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("home.json");
    let mut rng = ChaCha20Rng::seed_from_u64(11);
    let state = HomeState::init_with_prefix("/restart-home".parse().unwrap(), START, 3_600_000, &mut rng).unwrap();
    let mut sim = Simulation::<Member>::new(SimBus::new(BusConfig::default()), START);
    let token = OobToken::new("lamp1", *b"fedcba9876543210");
    let light = sim.add(Member::Device(Box::new(Device::new("lamp1", Role::Light, token.clone(), EntityConfig::new(2, 2)))));
    let waiting = OobToken::new("lamp2", *b"0011223344556677");
    let c = sim.add(Member::Controller(Box::new(Controller::new(state, 1, 1, START))));
    {
        let ctl = sim.nodes[c].controller_mut().unwrap();
        ctl.approve(token.clone(), "Light", "hall", START).unwrap();
        ctl.approve(waiting.clone(), "Light", "porch", START).unwrap();
        ctl.add_rule("AirCon/bedroom decrypt TEMP/CONTENT/bedroom".parse().unwrap(), None, START).unwrap();
    }
    sim.run_until(START + 8_000);
    assert!(sim.nodes[light].entity().unwrap().is_bootstrapped());
    switch_on(&mut sim, c);
    sim.run_until(START + 10_000);
    assert_eq!(switch_ons(&sim, light), 1);

    // Controller goes down; only the file survives.
    let old = sim.remove(c);
    let saved = old.controller().unwrap().state.clone();
    drop(old);
    state_file::save(&path, &saved, PASS, 1_000).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    let loaded = state_file::load(&path, PASS).unwrap();
    assert_eq!(loaded, saved);
    assert_eq!(loaded.registry.len(), 1);
    assert!(loaded.approvals.contains_key("lamp2"));

    // Public parts are readable, secrets are not.
    assert!(text.contains("/restart-home/Light/hall/lamp1"));
    assert!(text.contains("AirCon/bedroom decrypt TEMP/CONTENT/bedroom"));
    let mut secrets = vec![
        hex::encode(saved.anchor.secret_bytes()),
        hex::encode(saved.controller_identity.secret_bytes()),
        waiting.secret_hex(),
    ];
    secrets.extend(saved.registry.values().map(|r| hex::encode(r.pairwise)));
    for scope in saved.keys.scopes() {
        secrets.extend(saved.keys.versions(scope).iter().map(|k| hex::encode(k.bytes)));
    }
    assert!(secrets.len() > 4);
    for s in &secrets {
        assert!(!text.contains(s.as_str()), "secret in plaintext");
    }

    // Back up from the file; the already-joined lamp follows new commands.
    let now = sim.now();
    let c = sim.add(Member::Controller(Box::new(Controller::new(loaded, 1, 99, now))));
    sim.run_until(now + 1_000);
    switch_on(&mut sim, c);
    sim.run_until(now + 4_000);
    assert_eq!(switch_ons(&sim, light), 2);
}

fn sample() -> String {
    let mut rng = ChaCha20Rng::seed_from_u64(5);
    let mut s = HomeState::init("tamper-home", START, 60_000, &mut rng).unwrap();
    s.approvals.insert(
        "x1".into(),
        sovereign_core::controller::Approval {
            token: OobToken::new("x1", [7; 16]),
            service: "Light".into(),
            location: "hall".into(),
            approved_at: START,
        },
    );
    state_file::to_json(&s, PASS, 1_000).unwrap()
}

#[test]
fn wrong_passphrase_and_tampering_are_refused() {
    let text = sample();
    assert!(state_file::from_json(&text, PASS).is_ok());
    assert!(matches!(state_file::from_json(&text, "hunter2"), Err(StateError::Passphrase)));

    let mut v: serde_json::Value = serde_json::from_str(&text).unwrap();
    let ct = v["sealed"]["ciphertext"].as_str().unwrap().to_string();
    let (head, rest) = ct.split_at(1);
    let flipped = format!("{}{rest}", if head == "0" { "1" } else { "0" });
    v["sealed"]["ciphertext"] = flipped.into();
    assert!(matches!(state_file::from_json(&v.to_string(), PASS), Err(StateError::Passphrase)));

    let mut v: serde_json::Value = serde_json::from_str(&text).unwrap();
    v["version"] = 99.into();
    assert!(matches!(state_file::from_json(&v.to_string(), PASS), Err(StateError::Format(_, 99))));

    // An approval whose sealed token has gone missing.
    let mut v: serde_json::Value = serde_json::from_str(&text).unwrap();
    v["approvals"][0]["label"] = "x2".into();
    assert!(matches!(state_file::from_json(&v.to_string(), PASS), Err(StateError::Field("tokens"))));

    assert!(matches!(state_file::from_json("{", PASS), Err(StateError::Json(_))));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn approvals_and_events_round_trip(
        labels in proptest::collection::btree_set("[a-z][a-z0-9]{0,7}", 0..6),
        secret in any::<[u8; 16]>(),
        seed in any::<u64>(),
    ) {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let state = HomeState::init("prop-home", START, 60_000, &mut rng).unwrap();
        let mut c = Controller::new(state, 1, seed, START);
        for (i, l) in labels.iter().enumerate() {
            c.approve(OobToken::new(l.clone(), secret), "Light", &format!("room{i}"), START + i as u64).unwrap();
        }
        let text = state_file::to_json(&c.state, "p", 1).unwrap();
        prop_assert_eq!(state_file::from_json(&text, "p").unwrap(), c.state.clone());
    }
}
