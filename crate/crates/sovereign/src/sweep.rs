//! Delivery rate under frame loss.
//!
//! Each loss probability gets its own home: controller, a temperature
//! sensor, an AC reading it and a light taking commands, bootstrapped on a
//! loss-free bus. Then the loss is switched on and trials run back to back,
//! each in its own slot of virtual time: the sensor publishes one reading
//! and the controller issues one command to the light. A trial succeeds
//! when both arrive before the slot ends.

use rand_chacha::ChaCha20Rng;
use rand_core::SeedableRng;
use serde::Serialize;
use sovereign_core::controller::{Controller, HomeState};
use sovereign_core::entity::{Entity, EntityConfig, TopicKind};
use sovereign_core::name::Name;
use sovereign_core::naming;
use sovereign_core::sim::HomeNode;
use sovereign_core::transport::{BusConfig, SimBus, Simulation, DEFAULT_RETX_BUDGET};

use crate::scenario::{scripted_token, CONTROLLER_FACE, SIM_START};

/// Room for the full retransmission budget of a command fetch, (3 + 1)
/// Interest lifetimes, after the notifications spread out.
pub const DEFAULT_SLOT_MS: u64 = 20_000;
const SETUP_MS: u64 = 10_000;
const KEY_LIFETIME_MS: u64 = 24 * 3_600_000;

#[derive(Debug, Clone, Copy)]
pub struct SweepConfig {
    pub seed: u64,
    pub trials: usize,
    /// Virtual time each trial may take.
    pub slot_ms: u64,
    pub retx_budget: u32,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self { seed: 1, trials: 1000, slot_ms: DEFAULT_SLOT_MS, retx_budget: DEFAULT_RETX_BUDGET }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepPoint {
    pub loss: f64,
    pub trials: usize,
    pub content_delivered: usize,
    pub commands_delivered: usize,
    /// Trials where both arrived.
    pub succeeded: usize,
    /// Slowest successful delivery, publish to receipt.
    pub max_latency_ms: u64,
    pub mean_latency_ms: f64,
    /// Virtual time the trials took, setup excluded.
    pub virtual_ms: u64,
}

impl SweepPoint {
    pub fn success_rate(&self) -> f64 {
        if self.trials == 0 {
            return 0.0;
        }
        self.succeeded as f64 / self.trials as f64
    }
}

struct Bench {
    sim: Simulation<HomeNode>,
    home: Name,
    sensor: usize,
    reader: usize,
    light: usize,
}

fn setup(cfg: &SweepConfig) -> Bench {
    let mut rng = ChaCha20Rng::seed_from_u64(cfg.seed);
    let home: Name = "/sweep-home".parse().expect("constant");
    let state = HomeState::init_with_prefix(home.clone(), SIM_START, KEY_LIFETIME_MS, &mut rng).expect("valid home");
    let bus = SimBus::new(BusConfig { seed: cfg.seed, ..BusConfig::default() });
    let mut sim = Simulation::new(bus, SIM_START);
    let mut controller = Controller::new(state, CONTROLLER_FACE, cfg.seed, SIM_START);
    controller
        .add_rule("AirCon/kitchen decrypt TEMP/CONTENT/kitchen".parse().expect("valid rule"), None, SIM_START)
        .expect("rule");
    let add = |controller: &mut Controller, sim: &mut Simulation<HomeNode>, label: &str, service: &str, face: u32| {
        let token = scripted_token(cfg.seed, label);
        controller.approve(token.clone(), service, "kitchen", SIM_START).expect("approve");
        let mut ec = EntityConfig::new(face, cfg.seed.wrapping_mul(1000).wrapping_add(face as u64));
        ec.retx_budget = cfg.retx_budget;
        let mut e = Entity::new(ec, token);
        if service == "Light" {
            e.subscribe_commands();
        }
        sim.add(e.into())
    };
    let sensor = add(&mut controller, &mut sim, "t1", "TEMP", CONTROLLER_FACE + 1);
    let reader = add(&mut controller, &mut sim, "ac1", "AirCon", CONTROLLER_FACE + 2);
    let light = add(&mut controller, &mut sim, "l1", "Light", CONTROLLER_FACE + 3);
    sim.add(controller.into());
    sim.bus.set_recording(false);
    sim.run_until(SIM_START + SETUP_MS);
    for i in [sensor, reader, light] {
        assert!(sim.nodes[i].entity().is_some_and(Entity::is_bootstrapped), "sweep home failed to bootstrap");
    }
    let now = sim.now();
    sim.nodes[reader]
        .entity_mut()
        .expect("entity")
        .subscribe_content(home.with("TEMP").with(naming::CONTENT).with("kitchen"), now);
    sim.run_until(now + 2_000);
    sim.nodes[reader].entity_mut().expect("entity").take_deliveries();
    Bench { sim, home, sensor, reader, light }
}

/// Runs `cfg.trials` trials at loss `p`.
pub fn run_point(p: f64, cfg: &SweepConfig) -> SweepPoint {
    let mut b = setup(cfg);
    b.sim.bus.set_loss(p);
    let start = b.sim.now();
    let (mut content, mut commands, mut both, mut max_latency, mut total_latency) = (0, 0, 0, 0u64, 0u64);
    let controller_idx = b.sim.nodes.len() - 1;
    for trial in 0..cfg.trials {
        let t0 = b.sim.now();
        let item = format!("r{trial}");
        let cmd = format!("level-{trial}");
        let topic = b.home.with("TEMP").with(naming::CONTENT).with("kitchen").with("t1").with(&item);
        b.sim.nodes[b.sensor].entity_mut().expect("entity").publish_content(&topic, b"21.5", t0).expect("publish");
        let cmd_topic = b.home.with("Light").with("kitchen").with(naming::CMD).with(&cmd);
        b.sim.nodes[controller_idx].controller_mut().expect("controller").issue_command(&cmd_topic, b"40", t0).expect("command");
        b.sim.poke();
        b.sim.run_until(t0 + cfg.slot_ms);

        let got_content = b.sim.nodes[b.reader]
            .entity_mut()
            .expect("entity")
            .take_deliveries()
            .into_iter()
            .find(|d| d.kind == TopicKind::Content && d.clear_name.position(&item).is_some())
            .map(|d| d.received_at - t0);
        let got_command = b.sim.nodes[b.light]
            .entity_mut()
            .expect("entity")
            .take_deliveries()
            .into_iter()
            .find(|d| d.kind == TopicKind::Command && d.clear_name.position(&cmd).is_some())
            .map(|d| d.received_at - t0);
        for l in got_content.iter().chain(got_command.iter()) {
            max_latency = max_latency.max(*l);
            total_latency += l;
        }
        content += got_content.is_some() as usize;
        commands += got_command.is_some() as usize;
        both += (got_content.is_some() && got_command.is_some()) as usize;
    }
    let delivered = content + commands;
    SweepPoint {
        loss: p,
        trials: cfg.trials,
        content_delivered: content,
        commands_delivered: commands,
        succeeded: both,
        max_latency_ms: max_latency,
        mean_latency_ms: if delivered == 0 { 0.0 } else { total_latency as f64 / delivered as f64 },
        virtual_ms: b.sim.now() - start,
    }
}

/// One point per loss probability, each on a fresh home.
pub fn loss_sweep(ps: &[f64], cfg: &SweepConfig) -> Vec<SweepPoint> {
    ps.iter().map(|&p| run_point(p, cfg)).collect()
}

pub fn format_table(points: &[SweepPoint]) -> String {
    let mut s = String::from("loss  trials  content  commands  both    rate     mean_ms  max_ms\n");
    for p in points {
        s.push_str(&format!(
            "{:<5} {:<7} {:<8} {:<9} {:<7} {:<8.4} {:<8.1} {}\n",
            p.loss,
            p.trials,
            p.content_delivered,
            p.commands_delivered,
            p.succeeded,
            p.success_rate(),
            p.mean_latency_ms,
            p.max_latency_ms
        ));
    }
    s
}
