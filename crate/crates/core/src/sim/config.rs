//! Scenario configuration.

use std::collections::BTreeSet;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use thiserror::Error;

use crate::abi::{parse_capabilities, ALL_CAPABILITIES};
use crate::client::MAX_HOPS;
use crate::relay::host::Policy;
use crate::relay::NodeId;
use crate::toolkit::samples;
use crate::vm::DEFAULT_GAS;

pub const DEFAULT_DURATION_MS: u64 = 10_000;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("{0}")]
    Invalid(String),
}

fn invalid<T>(msg: impl Into<String>) -> Result<T, ConfigError> {
    Err(ConfigError::Invalid(msg.into()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimConfig {
    pub seed: u64,
    #[serde(default = "default_duration")]
    pub duration_ms: u64,
    /// Names of signing keys; each key is derived from the seed and its name.
    #[serde(default)]
    pub signers: Vec<String>,
    #[serde(default)]
    pub plugins: Vec<PluginSpec>,
    pub relays: Vec<RelaySpec>,
    #[serde(default)]
    pub clients: Vec<ClientSpec>,
    pub links: Vec<LinkSpec>,
    #[serde(default)]
    pub script: Vec<ScriptStep>,
}

fn default_duration() -> u64 {
    DEFAULT_DURATION_MS
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PluginSpec {
    pub name: String,
    /// One of the shipped sample plugins.
    pub sample: String,
    pub signer: String,
    #[serde(default)]
    pub ephemeral_only: bool,
    /// Flip one bit of the signed package (for negative tests).
    #[serde(default)]
    pub tamper: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PolicySpec {
    /// Capability list ("LOG,TIMER"), hex mask or number.
    #[serde(default)]
    pub max_capabilities: Option<Value>,
    #[serde(default)]
    pub gas_per_event: Option<u64>,
    #[serde(default)]
    pub emit_budget: Option<u32>,
    #[serde(default)]
    pub echo: Option<bool>,
}

impl PolicySpec {
    pub fn to_policy(&self) -> Result<Policy, ConfigError> {
        let defaults = Policy::default();
        let max_capabilities = match &self.max_capabilities {
            None => ALL_CAPABILITIES,
            Some(Value::Number(n)) => match n.as_u64().and_then(|n| u32::try_from(n).ok()) {
                Some(n) => n,
                None => return invalid(format!("max_capabilities {n} out of range")),
            },
            Some(Value::String(s)) => parse_capabilities(s).map_err(ConfigError::Invalid)?,
            Some(other) => return invalid(format!("max_capabilities must be a list or number, got {other}")),
        };
        Ok(Policy {
            max_capabilities,
            gas_per_event: self.gas_per_event.unwrap_or(DEFAULT_GAS),
            emit_budget: self.emit_budget.unwrap_or(defaults.emit_budget),
            max_timers: defaults.max_timers,
            echo: self.echo.unwrap_or(defaults.echo),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RelaySpec {
    pub name: String,
    /// Hex node id; defaults to the first 16 bytes of SHA-256(name).
    #[serde(default)]
    pub node_id: Option<String>,
    /// Signer names this relay trusts.
    #[serde(default)]
    pub trust: Vec<String>,
    #[serde(default)]
    pub policy: PolicySpec,
    /// Plugins attached globally before the script starts.
    #[serde(default)]
    pub global_plugins: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClientSpec {
    pub name: String,
    #[serde(default)]
    pub node_id: Option<String>,
    #[serde(default)]
    pub trust: Vec<String>,
    #[serde(default)]
    pub policy: PolicySpec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LinkSpec {
    pub a: String,
    pub b: String,
    pub latency_ms: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScriptStep {
    pub at_ms: u64,
    #[serde(flatten)]
    pub action: ScriptAction,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "action", rename_all = "snake_case")]
pub enum ScriptAction {
    BuildCircuit {
        client: String,
        circuit: String,
        route: Vec<String>,
    },
    SendData {
        client: String,
        circuit: String,
        #[serde(default = "default_stream")]
        stream_id: u16,
        data: String,
    },
    InjectPlugin {
        client: String,
        circuit: String,
        hop: usize,
        plugin: String,
    },
    AttachLocal {
        client: String,
        circuit: String,
        plugin: String,
    },
    AttachGlobal {
        relay: String,
        plugin: String,
    },
    /// Sends an extension relay command to one hop.
    SendCell {
        client: String,
        circuit: String,
        hop: usize,
        relay_cmd: u8,
        #[serde(default)]
        data: String,
    },
    Close {
        client: String,
        circuit: String,
    },
    Expect {
        #[serde(default)]
        description: Option<String>,
        expect: Expect,
    },
}

fn default_stream() -> u16 {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum Expect {
    /// Counts trace records so far. Without count/min/max, at least one
    /// record must match.
    Trace {
        kind: String,
        #[serde(default)]
        node: Option<String>,
        /// Every key here must equal the record's detail value.
        #[serde(default)]
        detail: Option<Map<String, Value>>,
        #[serde(default)]
        since_ms: Option<u64>,
        #[serde(default)]
        count: Option<usize>,
        #[serde(default)]
        min: Option<usize>,
        #[serde(default)]
        max: Option<usize>,
    },
    /// "building", "open" or "closed".
    Circuit {
        client: String,
        circuit: String,
        state: String,
    },
    Attachments {
        node: String,
        count: usize,
    },
    /// Everything received on the circuit so far, in order.
    Received {
        client: String,
        circuit: String,
        data: Vec<String>,
    },
}

impl SimConfig {
    pub fn from_json(text: &str) -> Result<SimConfig, ConfigError> {
        let c: SimConfig = serde_json::from_str(text)?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<SimConfig, ConfigError> {
        SimConfig::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn relay_id(spec: &RelaySpec) -> Result<NodeId, ConfigError> {
        node_id(&spec.name, spec.node_id.as_deref())
    }

    pub fn client_id(spec: &ClientSpec) -> Result<NodeId, ConfigError> {
        node_id(&spec.name, spec.node_id.as_deref())
    }

    /// Checks every cross-reference before anything runs.
    pub fn validate(&self) -> Result<(), ConfigError> {
        let mut names = BTreeSet::new();
        let mut ids = BTreeSet::new();
        for r in &self.relays {
            if !names.insert(r.name.as_str()) {
                return invalid(format!("duplicate node name {:?}", r.name));
            }
            if !ids.insert(SimConfig::relay_id(r)?) {
                return invalid(format!("duplicate node id for {:?}", r.name));
            }
        }
        for c in &self.clients {
            if !names.insert(c.name.as_str()) {
                return invalid(format!("duplicate node name {:?}", c.name));
            }
            if !ids.insert(SimConfig::client_id(c)?) {
                return invalid(format!("duplicate node id for {:?}", c.name));
            }
        }
        let relays: BTreeSet<_> = self.relays.iter().map(|r| r.name.as_str()).collect();
        let clients: BTreeSet<_> = self.clients.iter().map(|c| c.name.as_str()).collect();
        let signers: BTreeSet<_> = self.signers.iter().map(String::as_str).collect();
        if signers.len() != self.signers.len() {
            return invalid("duplicate signer name");
        }
        let mut plugins = BTreeSet::new();
        for p in &self.plugins {
            if !plugins.insert(p.name.as_str()) {
                return invalid(format!("duplicate plugin {:?}", p.name));
            }
            if samples::sample(&p.sample).is_none() {
                return invalid(format!("plugin {:?}: unknown sample {:?}", p.name, p.sample));
            }
            if !signers.contains(p.signer.as_str()) {
                return invalid(format!("plugin {:?}: unknown signer {:?}", p.name, p.signer));
            }
        }
        for r in &self.relays {
            r.policy.to_policy()?;
            check_trust(&r.name, &r.trust, &signers)?;
            for p in &r.global_plugins {
                if !plugins.contains(p.as_str()) {
                    return invalid(format!("relay {:?}: unknown plugin {p:?}", r.name));
                }
            }
        }
        for c in &self.clients {
            c.policy.to_policy()?;
            check_trust(&c.name, &c.trust, &signers)?;
        }
        for l in &self.links {
            for end in [&l.a, &l.b] {
                if !names.contains(end.as_str()) {
                    return invalid(format!("link to unknown node {end:?}"));
                }
            }
            if l.a == l.b {
                return invalid(format!("link from {:?} to itself", l.a));
            }
        }
        let mut circuits = BTreeSet::new();
        for (i, step) in self.script.iter().enumerate() {
            let ctx = |msg: String| ConfigError::Invalid(format!("script step {i}: {msg}"));
            let need_client = |c: &str| {
                if clients.contains(c) {
                    Ok(())
                } else {
                    Err(ctx(format!("unknown client {c:?}")))
                }
            };
            let need_plugin = |p: &str| {
                if plugins.contains(p) {
                    Ok(())
                } else {
                    Err(ctx(format!("unknown plugin {p:?}")))
                }
            };
            let need_hop = |hop: usize| {
                if (1..=MAX_HOPS).contains(&hop) {
                    Ok(())
                } else {
                    Err(ctx(format!("hop {hop} outside 1..={MAX_HOPS}")))
                }
            };
            match &step.action {
                ScriptAction::BuildCircuit { client, circuit, route } => {
                    need_client(client)?;
                    if !circuits.insert((client.as_str(), circuit.as_str())) {
                        return Err(ctx(format!("circuit {circuit:?} built twice")));
                    }
                    if route.is_empty() || route.len() > MAX_HOPS {
                        return Err(ctx(format!("route of {} hops", route.len())));
                    }
                    if let Some(r) = route.iter().find(|r| !relays.contains(r.as_str())) {
                        return Err(ctx(format!("unknown relay {r:?} in route")));
                    }
                }
                ScriptAction::SendData { client, data, .. } => {
                    need_client(client)?;
                    if data.len() > crate::cell::RELAY_DATA_LEN {
                        return Err(ctx(format!("data of {} bytes", data.len())));
                    }
                }
                ScriptAction::InjectPlugin { client, hop, plugin, .. } => {
                    need_client(client)?;
                    need_hop(*hop)?;
                    need_plugin(plugin)?;
                }
                ScriptAction::AttachLocal { client, plugin, .. } => {
                    need_client(client)?;
                    need_plugin(plugin)?;
                }
                ScriptAction::AttachGlobal { relay, plugin } => {
                    if !relays.contains(relay.as_str()) {
                        return Err(ctx(format!("unknown relay {relay:?}")));
                    }
                    need_plugin(plugin)?;
                }
                ScriptAction::SendCell { client, hop, relay_cmd, .. } => {
                    need_client(client)?;
                    need_hop(*hop)?;
                    if *relay_cmd < crate::cell::relay_cmd::FIRST_EXTENSION {
                        return Err(ctx(format!("send_cell takes extension commands, got {relay_cmd}")));
                    }
                }
                ScriptAction::Close { client, .. } => need_client(client)?,
                ScriptAction::Expect { expect, .. } => match expect {
                    Expect::Trace { node: Some(n), .. } | Expect::Attachments { node: n, .. } => {
                        if !names.contains(n.as_str()) {
                            return Err(ctx(format!("unknown node {n:?}")));
                        }
                    }
                    Expect::Circuit { client, state, .. } => {
                        need_client(client)?;
                        if !["building", "open", "closed"].contains(&state.as_str()) {
                            return Err(ctx(format!("unknown circuit state {state:?}")));
                        }
                    }
                    Expect::Received { client, .. } => need_client(client)?,
                    Expect::Trace { .. } => {}
                },
            }
        }
        Ok(())
    }
}

fn check_trust(node: &str, trust: &[String], signers: &BTreeSet<&str>) -> Result<(), ConfigError> {
    match trust.iter().find(|t| !signers.contains(t.as_str())) {
        Some(t) => invalid(format!("{node:?} trusts unknown signer {t:?}")),
        None => Ok(()),
    }
}

fn node_id(name: &str, hex_id: Option<&str>) -> Result<NodeId, ConfigError> {
    match hex_id {
        Some(h) => h.parse().map_err(|e| ConfigError::Invalid(format!("{name:?}: bad node_id: {e}"))),
        None => Ok(NodeId::from_name(name)),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn base() -> Value {
        serde_json::json!({
            "seed": 1,
            "signers": ["dev"],
            "plugins": [{"name": "pad", "sample": "padding", "signer": "dev"}],
            "relays": [{"name": "r1", "trust": ["dev"]}],
            "clients": [{"name": "c"}],
            "links": [{"a": "c", "b": "r1", "latency_ms": 5}],
            "script": [
                {"at_ms": 0, "action": "build_circuit", "client": "c", "circuit": "x", "route": ["r1"]},
                {"at_ms": 50, "action": "expect", "expect": {"circuit": {"client": "c", "circuit": "x", "state": "open"}}}
            ]
        })
    }

    #[test]
    fn parses_and_defaults() {
        let c = SimConfig::from_json(&base().to_string()).unwrap();
        assert_eq!(c.duration_ms, DEFAULT_DURATION_MS);
        assert_eq!(c.script.len(), 2);
    }

    #[test]
    fn rejects_bad_references() {
        let mut v = base();
        v["links"][0]["b"] = "nope".into();
        assert!(SimConfig::from_json(&v.to_string()).is_err());
        let mut v = base();
        v["script"][0]["route"] = serde_json::json!(["r9"]);
        assert!(SimConfig::from_json(&v.to_string()).is_err());
        let mut v = base();
        v["relays"][0]["trust"] = serde_json::json!(["ghost"]);
        assert!(SimConfig::from_json(&v.to_string()).is_err());
        let mut v = base();
        v["plugins"][0]["sample"] = "nope".into();
        assert!(SimConfig::from_json(&v.to_string()).is_err());
        let mut v = base();
        v["bogus"] = 1.into();
        assert!(SimConfig::from_json(&v.to_string()).is_err());
    }
}
