//! Smart-home controller runtime: state files, configuration, the UDP
//! multicast face, demo devices and the scenario tooling.

pub mod api;
pub mod bench;
pub mod config;
pub mod devices;
pub mod network;
pub mod scenario;
pub mod service;
pub mod state_file;
pub mod sweep;
pub mod udp;
