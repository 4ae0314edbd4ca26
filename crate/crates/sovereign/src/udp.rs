//! UDP multicast face: every node sends frames to one group and hears
//! everything sent there, its own frames included, like the simulated bus.

use std::io;
use std::net::{Ipv4Addr, SocketAddr, SocketAddrV4, UdpSocket};
use std::time::{Duration, SystemTime, UNIX_EPOCH};

use socket2::{Domain, Protocol, Socket, Type};
use sovereign_core::tlv::MAX_PACKET_SIZE;
use sovereign_core::transport::Node;

use crate::network::Network;

/// Administratively scoped group and the port NFD uses for multicast faces.
pub const DEFAULT_GROUP: &str = "224.0.23.170:56363";
/// How long the pump sleeps when nothing is due.
const IDLE_POLL: Duration = Duration::from_millis(2);

pub fn wall_ms() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_millis() as u64).unwrap_or(0)
}

#[derive(Debug)]
pub struct UdpFace {
    socket: UdpSocket,
    group: SocketAddr,
}

impl UdpFace {
    /// Joins `group` on all interfaces. Several faces on one host may share
    /// the port.
    pub fn open(group: SocketAddr) -> io::Result<Self> {
        let SocketAddr::V4(g) = group else {
            return Err(io::Error::new(io::ErrorKind::InvalidInput, "only IPv4 multicast groups are supported"));
        };
        if !g.ip().is_multicast() {
            return Err(io::Error::new(io::ErrorKind::InvalidInput, format!("{} is not a multicast address", g.ip())));
        }
        let s = Socket::new(Domain::IPV4, Type::DGRAM, Some(Protocol::UDP))?;
        s.set_reuse_address(true)?;
        #[cfg(unix)]
        s.set_reuse_port(true)?;
        s.bind(&SocketAddrV4::new(Ipv4Addr::UNSPECIFIED, g.port()).into())?;
        s.join_multicast_v4(g.ip(), &Ipv4Addr::UNSPECIFIED)?;
        s.set_multicast_loop_v4(true)?;
        s.set_multicast_ttl_v4(1)?;
        s.set_nonblocking(true)?;
        Ok(Self { socket: s.into(), group })
    }

    pub fn send(&self, frame: &[u8]) -> io::Result<()> {
        self.socket.send_to(frame, self.group).map(|_| ())
    }

    /// Drains every datagram waiting on the socket.
    pub fn recv_all(&self) -> io::Result<Vec<Vec<u8>>> {
        let mut out = Vec::new();
        let mut buf = vec![0u8; MAX_PACKET_SIZE + 1];
        loop {
            match self.socket.recv_from(&mut buf) {
                Ok((n, _)) if n <= MAX_PACKET_SIZE => out.push(buf[..n].to_vec()),
                Ok(_) => log::debug!("dropping oversized datagram"),
                Err(e) if e.kind() == io::ErrorKind::WouldBlock => return Ok(out),
                Err(e) => return Err(e),
            }
        }
    }
}

/// Nodes each on their own multicast socket, driven in wall-clock time.
pub struct UdpNetwork<N: Node> {
    group: SocketAddr,
    members: Vec<(N, UdpFace)>,
}

impl<N: Node> UdpNetwork<N> {
    pub fn new(group: SocketAddr) -> Self {
        Self { group, members: Vec::new() }
    }

    /// One pass: feed received frames, run due timers, send outboxes.
    /// Returns the earliest deadline.
    pub fn pump(&mut self, now: u64) -> Option<u64> {
        for (node, face) in &mut self.members {
            match face.recv_all() {
                Ok(frames) => {
                    for f in frames {
                        node.on_frame(&f, now);
                    }
                }
                Err(e) => log::warn!("face {}: receive failed: {e}", node.face()),
            }
            node.on_tick(now);
            for f in node.take_outbox() {
                if let Err(e) = face.send(&f) {
                    log::warn!("face {}: send failed: {e}", node.face());
                }
            }
        }
        self.members.iter().filter_map(|(n, _)| n.next_deadline()).min()
    }
}

impl<N: Node> Network for UdpNetwork<N> {
    type Node = N;

    fn now(&self) -> u64 {
        wall_ms()
    }

    fn add(&mut self, node: N) -> io::Result<usize> {
        let face = UdpFace::open(self.group)?;
        self.members.push((node, face));
        Ok(self.members.len() - 1)
    }

    fn remove(&mut self, index: usize) -> N {
        self.members.remove(index).0
    }

    fn node(&self, index: usize) -> &N {
        &self.members[index].0
    }

    fn node_mut(&mut self, index: usize) -> &mut N {
        &mut self.members[index].0
    }

    fn len(&self) -> usize {
        self.members.len()
    }

    fn run_until(&mut self, until: u64) {
        loop {
            let now = wall_ms();
            let next = self.pump(now);
            if now >= until {
                return;
            }
            let wait = next.map_or(IDLE_POLL, |t| Duration::from_millis(t.saturating_sub(now))).min(IDLE_POLL);
            std::thread::sleep(wait.min(Duration::from_millis(until - now)));
        }
    }
}
