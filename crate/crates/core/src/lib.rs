//! Onion-routing relays, clients and a simulated network that execute
//! signed, sandboxed bytecode plugins in response to protocol events.
//!
//! Any extension relay command that no attached plugin handles kills the
//! circuit and produces a report.

pub mod abi;
pub mod bench;
pub mod canonical;
pub mod cell;
pub mod client;
pub mod crypto;
pub mod manager;
pub mod onion;
pub mod relay;
pub mod sim;
pub mod socket;
pub mod toolkit;
pub mod vm;
