use std::net::SocketAddr;
use std::time::{Duration, Instant};

use sovereign::devices::Member;
use sovereign::scenario::{Runner, Script};
use sovereign::udp::{UdpFace, UdpNetwork};

/// A group of our own so parallel runs on one host do not hear each other.
fn group(port: u16) -> SocketAddr {
    format!("239.255.71.9:{port}").parse().unwrap()
}

#[test]
fn faces_on_one_group_hear_each_other() {
    let g = group(56401 + (std::process::id() % 500) as u16);
    let a = UdpFace::open(g).unwrap();
    let b = UdpFace::open(g).unwrap();
    a.send(b"\x05\x03\x07\x01\x61").unwrap();
    let deadline = Instant::now() + Duration::from_secs(2);
    let (mut at_a, mut at_b) = (Vec::new(), Vec::new());
    while (at_a.is_empty() || at_b.is_empty()) && Instant::now() < deadline {
        at_a.extend(a.recv_all().unwrap());
        at_b.extend(b.recv_all().unwrap());
        std::thread::sleep(Duration::from_millis(5));
    }
    assert_eq!(at_b, vec![b"\x05\x03\x07\x01\x61".to_vec()]);
    // Loopback: a sender hears itself, as on the simulated bus.
    assert_eq!(at_a.len(), 1);
}

#[test]
fn unicast_groups_are_refused() {
    assert!(UdpFace::open("127.0.0.1:56363".parse().unwrap()).is_err());
    assert!(UdpFace::open("[ff02::1]:56363".parse().unwrap()).is_err());
}

#[test]
fn bootstrap_and_command_over_real_sockets() {
    let script: Script = "home /udp-home\nspawn l1 light hall\nbootstrap\nat 5000 controller-command Light/hall/CMD/switch-on on\nrun 8000\nexpect actuated l1 switch-on 1\n"
        .parse()
        .unwrap();
    let g = group(57401 + (std::process::id() % 500) as u16);
    let runner = Runner::with_network(script, Box::new(UdpNetwork::<Member>::new(g))).unwrap();
    let report = runner.run().unwrap();
    assert_eq!(report.device("l1").unwrap().actuations.len(), 1);
    assert!(report.trace.is_none());
}
