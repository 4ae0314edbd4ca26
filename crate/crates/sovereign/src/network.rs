//! One interface over the two buses: the virtual-time simulation and UDP
//! multicast in wall-clock time.

use std::io;

use sovereign_core::transport::{Node, Simulation, TraceEvent};

pub trait Network {
    type Node: Node;

    /// Current time in milliseconds on this network's clock.
    fn now(&self) -> u64;
    fn add(&mut self, node: Self::Node) -> io::Result<usize>;
    fn remove(&mut self, index: usize) -> Self::Node;
    fn node(&self, index: usize) -> &Self::Node;
    fn node_mut(&mut self, index: usize) -> &mut Self::Node;
    fn len(&self) -> usize;
    /// Delivers frames and fires timers until `until`.
    fn run_until(&mut self, until: u64);

    fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// The bus trace, where the network keeps one.
    fn trace(&self) -> Option<&[TraceEvent]> {
        None
    }
}

impl<N: Node> Network for Simulation<N> {
    type Node = N;

    fn now(&self) -> u64 {
        Simulation::now(self)
    }

    fn add(&mut self, node: N) -> io::Result<usize> {
        Ok(Simulation::add(self, node))
    }

    fn remove(&mut self, index: usize) -> N {
        Simulation::remove(self, index)
    }

    fn node(&self, index: usize) -> &N {
        &self.nodes[index]
    }

    fn node_mut(&mut self, index: usize) -> &mut N {
        &mut self.nodes[index]
    }

    fn len(&self) -> usize {
        self.nodes.len()
    }

    fn run_until(&mut self, until: u64) {
        Simulation::run_until(self, until)
    }

    fn trace(&self) -> Option<&[TraceEvent]> {
        Some(self.bus.trace())
    }
}
