#![no_std]
//! Core of the Sovereign smart-home framework: TLV wire codec, names and
//! patterns, crypto, policies, transport state machines, bootstrapping,
//! key distribution and pub/sub.

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod bootstrap;
pub mod controller;
pub mod crypto;
pub mod entity;
pub mod keystore;
pub mod name;
pub mod naming;
pub mod pattern;
pub mod policy;
pub mod sim;
pub mod tlv;
pub mod transport;
