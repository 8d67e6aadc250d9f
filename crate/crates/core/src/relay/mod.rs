//! Relay state machine, host ABI bindings and kill-and-report handling.

pub mod host;
pub mod node;

use std::fmt;

use serde::Serialize;
use serde_json::Value;

use crate::cell::LinkCell;
use crate::manager::hexser::Hex16;

pub use host::{CircuitView, Effects, HostContext, PluginEnv, Policy};
pub use node::{KillReason, KillReport, RelayNode};

/// 16-byte node identifier. Under the TEST provider it doubles as the
/// node's sealing key material.
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
pub struct NodeId(pub [u8; 16]);

impl NodeId {
    pub fn hex(&self) -> String {
        hex::encode(self.0)
    }

    /// First 16 bytes of SHA-256(name).
    pub fn from_name(name: &str) -> NodeId {
        use sha2::{Digest, Sha256};
        let d = Sha256::digest(name.as_bytes());
        NodeId(d[..16].try_into().expect("16 bytes"))
    }

    /// Node ids derived from a signing key id.
    pub fn from_key_id(id: &[u8; 32]) -> NodeId {
        NodeId(id[..16].try_into().expect("16 bytes"))
    }

    pub fn seal_id(&self) -> [u8; 16] {
        self.0
    }
}

impl std::str::FromStr for NodeId {
    type Err = hex::FromHexError;
    fn from_str(s: &str) -> Result<NodeId, Self::Err> {
        Ok(NodeId(s.parse::<Hex16>()?.0))
    }
}

impl fmt::Debug for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.hex())
    }
}

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.hex())
    }
}

/// Structured node event. The driver adds time and node id.
#[derive(Debug, Clone, PartialEq)]
pub struct Record {
    pub kind: &'static str,
    pub detail: Value,
}

impl Record {
    pub fn new(kind: &'static str, detail: Value) -> Record {
        Record { kind, detail }
    }
}

#[derive(Debug, Clone, PartialEq)]
#[allow(clippy::large_enum_variant)]
pub enum Action {
    Send {
        to: NodeId,
        cell: LinkCell,
    },
    /// Call the node's `on_wakeup` at (or after) this time.
    Wakeup {
        at_ms: u64,
    },
    Record(Record),
}

impl Action {
    pub fn record(kind: &'static str, detail: Value) -> Action {
        Action::Record(Record::new(kind, detail))
    }
}

/// Link-local circuit id allocation: the side with the larger node id sets
/// the high bit, so the two ends of a link never pick the same id.
#[derive(Debug, Clone, Default)]
pub struct CircIdAllocator {
    next: u32,
}

impl CircIdAllocator {
    pub fn allocate(&mut self, me: NodeId, peer: NodeId, taken: impl Fn(u32) -> bool) -> u32 {
        let high = if me > peer { 0x8000_0000 } else { 0 };
        loop {
            self.next = (self.next % 0x7fff_ffff) + 1;
            let id = self.next | high;
            if !taken(id) {
                return id;
            }
        }
    }
}
