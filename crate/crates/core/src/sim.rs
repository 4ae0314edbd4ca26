//! Glue for running a whole home inside a [`Simulation`](crate::transport::Simulation).

use alloc::boxed::Box;
use alloc::vec::Vec;

use crate::controller::Controller;
use crate::entity::Entity;
use crate::transport::{FaceId, Node};

/// Anything that can sit on the home bus.
pub enum HomeNode {
    Controller(Box<Controller>),
    Entity(Box<Entity>),
    Tap(Tap),
}

/// A passive listener: records every frame it hears and never sends.
#[derive(Debug, Clone, Default)]
pub struct Tap {
    pub face: FaceId,
    pub frames: Vec<(u64, Vec<u8>)>,
}

impl Tap {
    pub fn new(face: FaceId) -> Self {
        Self { face, frames: Vec::new() }
    }
}

impl HomeNode {
    pub fn controller(&self) -> Option<&Controller> {
        match self {
            HomeNode::Controller(c) => Some(c),
            _ => None,
        }
    }

    pub fn controller_mut(&mut self) -> Option<&mut Controller> {
        match self {
            HomeNode::Controller(c) => Some(c),
            _ => None,
        }
    }

    pub fn tap(&self) -> Option<&Tap> {
        match self {
            HomeNode::Tap(t) => Some(t),
            _ => None,
        }
    }

    /// The entity, or the controller's own entity.
    pub fn entity(&self) -> Option<&Entity> {
        match self {
            HomeNode::Controller(c) => Some(c.entity()),
            HomeNode::Entity(e) => Some(e),
            HomeNode::Tap(_) => None,
        }
    }

    pub fn entity_mut(&mut self) -> Option<&mut Entity> {
        match self {
            HomeNode::Controller(c) => Some(c.entity_mut()),
            HomeNode::Entity(e) => Some(e),
            HomeNode::Tap(_) => None,
        }
    }
}

impl From<Controller> for HomeNode {
    fn from(c: Controller) -> Self {
        HomeNode::Controller(Box::new(c))
    }
}

impl From<Entity> for HomeNode {
    fn from(e: Entity) -> Self {
        HomeNode::Entity(Box::new(e))
    }
}

impl From<Tap> for HomeNode {
    fn from(t: Tap) -> Self {
        HomeNode::Tap(t)
    }
}

impl Node for HomeNode {
    fn face(&self) -> FaceId {
        match self {
            HomeNode::Controller(c) => c.face(),
            HomeNode::Entity(e) => e.face(),
            HomeNode::Tap(t) => t.face,
        }
    }

    fn on_frame(&mut self, wire: &[u8], now: u64) {
        match self {
            HomeNode::Controller(c) => c.on_frame(wire, now),
            HomeNode::Entity(e) => e.on_frame(wire, now),
            HomeNode::Tap(t) => t.frames.push((now, wire.to_vec())),
        }
    }

    fn on_tick(&mut self, now: u64) {
        match self {
            HomeNode::Controller(c) => c.on_tick(now),
            HomeNode::Entity(e) => e.on_tick(now),
            HomeNode::Tap(_) => {}
        }
    }

    fn next_deadline(&self) -> Option<u64> {
        match self {
            HomeNode::Controller(c) => c.next_deadline(),
            HomeNode::Entity(e) => e.next_deadline(),
            HomeNode::Tap(_) => None,
        }
    }

    fn take_outbox(&mut self) -> Vec<Vec<u8>> {
        match self {
            HomeNode::Controller(c) => c.take_outbox(),
            HomeNode::Entity(e) => e.take_outbox(),
            HomeNode::Tap(_) => Vec::new(),
        }
    }
}
