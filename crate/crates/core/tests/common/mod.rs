#![allow(dead_code)]

use rand_chacha::ChaCha20Rng;
use rand_core::SeedableRng;
use sovereign_core::bootstrap::OobToken;
use sovereign_core::controller::{Controller, HomeState};
use sovereign_core::entity::{Delivery, Entity, EntityConfig};
use sovereign_core::name::{name, Name};
use sovereign_core::sim::{HomeNode, Tap};
use sovereign_core::transport::{BusConfig, SimBus, Simulation};

pub const START: u64 = 1_700_000_000_000;
pub const LIFETIME: u64 = 3_600_000;

pub struct Home {
    pub sim: Simulation<HomeNode>,
    pub home: Name,
    next_face: u32,
    seed: u64,
}

impl Home {
    pub fn new(seed: u64) -> Self {
        Self::with_bus(seed, BusConfig { seed, ..BusConfig::default() }, LIFETIME)
    }

    pub fn with_bus(seed: u64, bus: BusConfig, lifetime: u64) -> Self {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let home = name("/home-test");
        let state = HomeState::init_with_prefix(home.clone(), START, lifetime, &mut rng).unwrap();
        let mut sim = Simulation::new(SimBus::new(bus), START);
        sim.add(Controller::new(state, 1, seed, START).into());
        Self { sim, home, next_face: 2, seed }
    }

    pub fn now(&self) -> u64 {
        self.sim.now()
    }

    pub fn controller(&mut self) -> &mut Controller {
        self.sim.nodes[0].controller_mut().unwrap()
    }

    pub fn token(label: &str) -> OobToken {
        let mut secret = [0u8; 16];
        for (i, b) in label.bytes().enumerate() {
            secret[i % 16] ^= b;
        }
        secret[15] ^= 0x5a;
        OobToken::new(label, secret)
    }

    pub fn config(&mut self) -> EntityConfig {
        let f = self.next_face;
        self.next_face += 1;
        EntityConfig::new(f, self.seed.wrapping_mul(1000) + f as u64)
    }

    /// Approves and adds a device; it bootstraps once the sim runs.
    pub fn add_device(&mut self, label: &str, service: &str, location: &str) -> usize {
        let cfg = self.config();
        self.add_device_with(label, service, location, cfg)
    }

    pub fn add_device_with(&mut self, label: &str, service: &str, location: &str, cfg: EntityConfig) -> usize {
        let t = Self::token(label);
        let now = self.now();
        self.controller().approve(t.clone(), service, location, now).unwrap();
        let mut e = Entity::new(cfg, t);
        e.subscribe_commands();
        self.sim.add(e.into())
    }

    pub fn tap(&mut self) -> usize {
        let f = self.next_face;
        self.next_face += 1;
        self.sim.add(Tap::new(f).into())
    }

    pub fn frames(&self, tap: usize) -> Vec<Vec<u8>> {
        self.sim.nodes[tap].tap().unwrap().frames.iter().map(|(_, f)| f.clone()).collect()
    }

    pub fn entity(&mut self, i: usize) -> &mut Entity {
        self.sim.nodes[i].entity_mut().unwrap()
    }

    pub fn run_for(&mut self, ms: u64) {
        let t = self.now() + ms;
        self.sim.run_until(t);
    }

    pub fn bootstrap_all(&mut self) {
        self.run_for(10_000);
        for e in self.sim.nodes.iter().filter_map(HomeNode::entity) {
            assert!(e.is_bootstrapped(), "{:?} not bootstrapped", e.name());
        }
    }
}

pub fn contains(hay: &[u8], needle: &[u8]) -> bool {
    hay.windows(needle.len()).any(|w| w == needle)
}

/// The end-to-end property for delivered messages: the signer's cert
/// chains to the anchor, the signer may produce the wire name, and the
/// receiver is allowed the decryption key that opened it.
pub fn assert_audit_invariant(e: &Entity, deliveries: &[Delivery]) {
    let anchor = e.anchor().expect("bootstrapped");
    let me = e.name().expect("named");
    let policies = e.policies();
    for d in deliveries {
        assert!(d.signer_cert.verify(anchor.public_key()), "{} not anchored", d.signer_cert.name());
        assert_eq!(d.signer_cert.subject(), &d.producer);
        assert!(policies.check_produce(&d.producer, &d.name).is_allow(), "{} may not produce {}", d.producer, d.name);
        let dkey = d.key.prefix(d.key.len() - 1);
        assert!(policies.check_decrypt(me, &dkey).is_allow(), "{me} may not hold {dkey}");
    }
}
