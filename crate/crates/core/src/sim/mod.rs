//! Deterministic discrete-event simulator for relay networks.

pub mod config;
pub mod engine;
pub mod trace;

pub use config::{ConfigError, Expect, ScriptAction, SimConfig};
pub use engine::{signer_key, ExpectOutcome, ReplyRecord, SimError, SimNode, SimReport, Simulation};
pub use trace::{to_jsonl, TraceRecord};

/// Scenario files shipped with the crate.
pub const SHIPPED_SCENARIOS: [(&str, &str); 5] = [
    ("unknown_feature", include_str!("../../scenarios/unknown_feature.json")),
    ("unknown_feature_global", include_str!("../../scenarios/unknown_feature_global.json")),
    ("unknown_feature_circuit", include_str!("../../scenarios/unknown_feature_circuit.json")),
    ("padding", include_str!("../../scenarios/padding.json")),
    ("counter", include_str!("../../scenarios/counter.json")),
];
