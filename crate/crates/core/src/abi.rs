//! The host ABI shared by packages, the registry and relays: capability
//! bits, host function indices and event ids.

use std::sync::{Arc, OnceLock};

use crate::vm::{HostFunction, HostTable};

pub mod cap {
    pub const LOG: u8 = 0;
    pub const STATE_READ: u8 = 1;
    pub const STATE_WRITE: u8 = 2;
    pub const CELL_READ: u8 = 3;
    pub const CELL_EMIT: u8 = 4;
    pub const TIMER: u8 = 5;
    pub const RAND: u8 = 6;
    pub const CLOCK: u8 = 7;
}

pub const CAPABILITY_NAMES: [&str; 8] =
    ["LOG", "STATE_READ", "STATE_WRITE", "CELL_READ", "CELL_EMIT", "TIMER", "RAND", "CLOCK"];

/// Every capability bit the host knows about.
pub const ALL_CAPABILITIES: u32 = 0xff;

pub fn capability_bit(name: &str) -> Option<u8> {
    CAPABILITY_NAMES.iter().position(|n| n.eq_ignore_ascii_case(name)).map(|i| i as u8)
}

/// Parses `LOG,TIMER,...` (or a bare number) into a mask.
pub fn parse_capabilities(list: &str) -> Result<u32, String> {
    let list = list.trim();
    if list.is_empty() {
        return Ok(0);
    }
    if let Some(hex) = list.strip_prefix("0x") {
        return u32::from_str_radix(hex, 16).map_err(|e| e.to_string());
    }
    if let Ok(n) = list.parse::<u32>() {
        return Ok(n);
    }
    list.split(',').try_fold(0u32, |mask, name| {
        capability_bit(name.trim()).map(|b| mask | (1 << b)).ok_or_else(|| format!("unknown capability {name:?}"))
    })
}

pub fn capability_names(mask: u32) -> Vec<&'static str> {
    (0..8).filter(|b| mask & (1 << b) != 0).map(|b| CAPABILITY_NAMES[b]).collect()
}

pub fn mask_of(bits: &[u8]) -> u32 {
    bits.iter().fold(0, |m, b| m | (1 << b))
}

pub mod host_fn {
    pub const LOG: usize = 0;
    pub const GET_FIELD: usize = 1;
    pub const SET_FIELD: usize = 2;
    pub const READ_CELL: usize = 3;
    pub const EMIT_CELL: usize = 4;
    pub const SET_TIMER: usize = 5;
    pub const RAND_BYTES: usize = 6;
    pub const NOW_MS: usize = 7;
}

/// (name, capability bit, gas cost) in index order.
pub const HOST_FUNCTIONS: [(&str, u8, u64); 8] = [
    ("log", cap::LOG, 10),
    ("get_field", cap::STATE_READ, 5),
    ("set_field", cap::STATE_WRITE, 5),
    ("read_cell", cap::CELL_READ, 5),
    ("emit_cell", cap::CELL_EMIT, 20),
    ("set_timer", cap::TIMER, 10),
    ("rand_bytes", cap::RAND, 5),
    ("now_ms", cap::CLOCK, 1),
];

pub const HOST_TABLE_SIZE: usize = HOST_FUNCTIONS.len();

pub fn host_function_index(name: &str) -> Option<usize> {
    HOST_FUNCTIONS.iter().position(|(n, _, _)| *n == name)
}

/// The relay host table, shared by every instance.
pub fn host_table() -> Arc<HostTable> {
    static TABLE: OnceLock<Arc<HostTable>> = OnceLock::new();
    TABLE
        .get_or_init(|| {
            Arc::new(HostTable::new(
                HOST_FUNCTIONS
                    .iter()
                    .map(|&(name, capability_bit, gas_cost)| HostFunction { name, capability_bit, gas_cost })
                    .collect(),
            ))
        })
        .clone()
}

pub mod field {
    pub const CIRCUIT_ID: u64 = 0;
    pub const HOP_FLAGS: u64 = 1;
    pub const CELLS_FORWARDED: u64 = 2;
    pub const SCRATCH: u64 = 3;
}

pub const SCRATCH_LEN: usize = 256;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
#[repr(u16)]
pub enum EventKind {
    OnAttach = 0,
    OnDetach = 1,
    /// r1 = relay_cmd, r2 = direction byte.
    OnFeatureCell = 2,
    /// r1 = tag.
    OnTimer = 3,
    OnCircuitTeardown = 4,
}

impl EventKind {
    pub const ALL: [EventKind; 5] = [
        EventKind::OnAttach,
        EventKind::OnDetach,
        EventKind::OnFeatureCell,
        EventKind::OnTimer,
        EventKind::OnCircuitTeardown,
    ];

    pub fn from_id(id: u16) -> Option<EventKind> {
        EventKind::ALL.get(usize::from(id)).copied()
    }

    pub fn id(self) -> u16 {
        self as u16
    }

    pub fn name(self) -> &'static str {
        match self {
            EventKind::OnAttach => "on_attach",
            EventKind::OnDetach => "on_detach",
            EventKind::OnFeatureCell => "on_feature_cell",
            EventKind::OnTimer => "on_timer",
            EventKind::OnCircuitTeardown => "on_circuit_teardown",
        }
    }

    pub fn from_name(name: &str) -> Option<EventKind> {
        EventKind::ALL.iter().copied().find(|e| e.name().eq_ignore_ascii_case(name))
    }

    /// Lifecycle events fire regardless of wire traffic.
    pub fn is_lifecycle(self) -> bool {
        !matches!(self, EventKind::OnFeatureCell)
    }
}
