use std::cmp::Reverse;
use std::collections::{BTreeMap, BTreeSet, BinaryHeap};

use rand_chacha::ChaCha20Rng;
use rand_core::SeedableRng;
use serde_json::{json, Value};
use sha2::{Digest, Sha256};
use thiserror::Error;

use super::config::{ConfigError, Expect, ScriptAction, SimConfig};
use super::trace::TraceRecord;
use crate::cell::LinkCell;
use crate::client::{CircuitState, ClientNode, PluginReply};
use crate::manager::{CircuitKey, KeyPair, TrustStore};
use crate::relay::{Action, NodeId, RelayNode};
use crate::toolkit::samples;

/// Trace node name for the simulator's own records.
pub const SIM_NODE: &str = "sim";

#[derive(Debug, Error)]
pub enum SimError {
    #[error(transparent)]
    Config(#[from] ConfigError),
}

fn derive(label: &str, seed: u64, name: &str) -> [u8; 32] {
    let mut h = Sha256::new();
    h.update(b"fan-sim/");
    h.update(label.as_bytes());
    h.update([0]);
    h.update(seed.to_le_bytes());
    h.update(name.as_bytes());
    h.finalize().into()
}

/// The signing key a scenario with this seed uses for `name`.
pub fn signer_key(seed: u64, name: &str) -> KeyPair {
    KeyPair::from_seed(derive("key", seed, name))
}

pub fn node_rng(seed: u64, name: &str) -> ChaCha20Rng {
    ChaCha20Rng::from_seed(derive("rng", seed, name))
}

pub enum SimNode {
    Relay(Box<RelayNode>),
    Client(Box<ClientNode>),
}

impl SimNode {
    pub fn id(&self) -> NodeId {
        match self {
            SimNode::Relay(r) => r.id,
            SimNode::Client(c) => c.id,
        }
    }

    pub fn attachment_count(&self) -> usize {
        match self {
            SimNode::Relay(r) => r.env.registry.len(),
            SimNode::Client(c) => c.env.registry.len(),
        }
    }

    fn handle_link_cell(&mut self, from: NodeId, cell: LinkCell, now: u64) -> Vec<Action> {
        match self {
            SimNode::Relay(r) => r.handle_link_cell(from, cell, now),
            SimNode::Client(c) => c.handle_link_cell(from, cell, now),
        }
    }

    fn on_wakeup(&mut self, now: u64) -> Vec<Action> {
        match self {
            SimNode::Relay(r) => r.on_wakeup(now),
            SimNode::Client(c) => c.on_wakeup(now),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExpectOutcome {
    pub step: usize,
    pub t_ms: u64,
    pub description: String,
    pub ok: bool,
    pub observed: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReplyRecord {
    pub t_ms: u64,
    pub client: String,
    pub circuit: String,
    pub reply: PluginReply,
}

#[derive(Debug, Clone, Default)]
pub struct SimReport {
    pub trace: Vec<TraceRecord>,
    pub expectations: Vec<ExpectOutcome>,
    pub replies: Vec<ReplyRecord>,
    pub script_errors: usize,
    pub end_ms: u64,
}

impl SimReport {
    pub fn passed(&self) -> bool {
        self.expectations.iter().all(|e| e.ok)
    }

    pub fn records<'a>(&'a self, kind: &'a str) -> impl Iterator<Item = &'a TraceRecord> + 'a {
        self.trace.iter().filter(move |r| r.kind == kind)
    }
}

#[allow(clippy::large_enum_variant)]
enum Event {
    Deliver { from: usize, to: usize, cell: LinkCell },
    Wakeup(usize),
    Script(usize),
}

/// Discrete-event network of relays and clients. Events at equal times run
/// in the order they were scheduled.
pub struct Simulation {
    config: SimConfig,
    nodes: Vec<(String, SimNode)>,
    index: BTreeMap<NodeId, usize>,
    names: BTreeMap<String, usize>,
    latency: BTreeMap<(usize, usize), u64>,
    packages: BTreeMap<String, Vec<u8>>,
    circuits: BTreeMap<(String, String), CircuitKey>,
    labels: BTreeMap<(usize, CircuitKey), String>,
    received: BTreeMap<(String, String), Vec<Vec<u8>>>,
    queue: BinaryHeap<Reverse<(u64, u64)>>,
    events: BTreeMap<u64, Event>,
    seq: u64,
    now: u64,
    wakeups: BTreeSet<(u64, usize)>,
    report: SimReport,
}

impl Simulation {
    pub fn new(config: SimConfig) -> Result<Simulation, SimError> {
        config.validate()?;
        let seed = config.seed;
        let keys: BTreeMap<&str, KeyPair> = config.signers.iter().map(|s| (s.as_str(), signer_key(seed, s))).collect();
        let trust_of =
            |names: &[String]| names.iter().fold(TrustStore::new(), |t, n| t.with(keys[n.as_str()].public()));
        let mut packages = BTreeMap::new();
        for p in &config.plugins {
            let sample = samples::sample(&p.sample).expect("validated");
            let mut bytes = sample.package(&keys[p.signer.as_str()], p.ephemeral_only);
            if p.tamper {
                // first byte of the name, inside the signed region
                bytes[8] ^= 0x01;
            }
            packages.insert(p.name.clone(), bytes);
        }

        let mut nodes = Vec::new();
        for r in &config.relays {
            let id = SimConfig::relay_id(r)?;
            let node = RelayNode::new(id, trust_of(&r.trust), r.policy.to_policy()?, node_rng(seed, &r.name));
            nodes.push((r.name.clone(), SimNode::Relay(Box::new(node))));
        }
        for c in &config.clients {
            let id = SimConfig::client_id(c)?;
            let mut node = ClientNode::new(id, trust_of(&c.trust), c.policy.to_policy()?, node_rng(seed, &c.name));
            for r in &config.relays {
                node.add_relay(SimConfig::relay_id(r)?);
            }
            nodes.push((c.name.clone(), SimNode::Client(Box::new(node))));
        }
        let names: BTreeMap<String, usize> = nodes.iter().enumerate().map(|(i, (n, _))| (n.clone(), i)).collect();
        let index = nodes.iter().enumerate().map(|(i, (_, n))| (n.id(), i)).collect();
        let mut latency = BTreeMap::new();
        for l in &config.links {
            let (a, b) = (names[&l.a], names[&l.b]);
            latency.insert((a, b), l.latency_ms);
            latency.insert((b, a), l.latency_ms);
        }
        let ids: Vec<NodeId> = nodes.iter().map(|(_, n)| n.id()).collect();
        for (i, (_, node)) in nodes.iter_mut().enumerate() {
            if let SimNode::Relay(r) = node {
                let peers: Vec<usize> = latency.keys().filter(|&&(a, _)| a == i).map(|&(_, b)| b).collect();
                r.set_peers(peers.into_iter().map(|j| ids[j]));
            }
        }

        let mut sim = Simulation {
            config,
            nodes,
            index,
            names,
            latency,
            packages,
            circuits: BTreeMap::new(),
            labels: BTreeMap::new(),
            received: BTreeMap::new(),
            queue: BinaryHeap::new(),
            events: BTreeMap::new(),
            seq: 0,
            now: 0,
            wakeups: BTreeSet::new(),
            report: SimReport::default(),
        };
        for i in 0..sim.config.script.len() {
            let at = sim.config.script[i].at_ms;
            sim.schedule(at, Event::Script(i));
        }
        Ok(sim)
    }

    pub fn config(&self) -> &SimConfig {
        &self.config
    }

    pub fn node(&self, name: &str) -> Option<&SimNode> {
        self.names.get(name).map(|&i| &self.nodes[i].1)
    }

    pub fn relay(&self, name: &str) -> Option<&RelayNode> {
        match self.node(name)? {
            SimNode::Relay(r) => Some(r),
            SimNode::Client(_) => None,
        }
    }

    pub fn client(&self, name: &str) -> Option<&ClientNode> {
        match self.node(name)? {
            SimNode::Client(c) => Some(c),
            SimNode::Relay(_) => None,
        }
    }

    pub fn circuit_serial(&self, client: &str, label: &str) -> Option<CircuitKey> {
        self.circuits.get(&(client.to_string(), label.to_string())).copied()
    }

    /// DATA bodies delivered so far on a labelled circuit, in order.
    pub fn received(&self, client: &str, label: &str) -> &[Vec<u8>] {
        self.received.get(&(client.to_string(), label.to_string())).map(Vec::as_slice).unwrap_or_default()
    }

    pub fn package(&self, plugin: &str) -> Option<&[u8]> {
        self.packages.get(plugin).map(Vec::as_slice)
    }

    fn schedule(&mut self, at: u64, ev: Event) {
        let seq = self.seq;
        self.seq += 1;
        self.events.insert(seq, ev);
        self.queue.push(Reverse((at, seq)));
    }

    fn record(&mut self, node: usize, kind: &str, detail: Value) {
        let node = self.nodes[node].0.clone();
        self.record_as(node, kind, detail);
    }

    fn record_as(&mut self, node: String, kind: &str, detail: Value) {
        self.report.trace.push(TraceRecord { t_ms: self.now, node, kind: kind.to_string(), detail });
    }

    /// Runs to completion (empty queue or `duration_ms`).
    pub fn run(&mut self) -> SimReport {
        self.setup_globals();
        while let Some(&Reverse((t, seq))) = self.queue.peek() {
            if t > self.config.duration_ms {
                break;
            }
            self.queue.pop();
            self.now = t;
            match self.events.remove(&seq).expect("scheduled event") {
                Event::Deliver { from, to, cell } => {
                    let from_name = self.nodes[from].0.clone();
                    self.record(
                        to,
                        "cell_recv",
                        json!({"from": from_name, "circ_id": cell.circ_id, "command": cell.command}),
                    );
                    let from_id = self.nodes[from].1.id();
                    let actions = self.nodes[to].1.handle_link_cell(from_id, cell, t);
                    self.apply(to, actions);
                }
                Event::Wakeup(i) => {
                    self.wakeups.remove(&(t, i));
                    let actions = self.nodes[i].1.on_wakeup(t);
                    self.apply(i, actions);
                }
                Event::Script(step) => self.run_step(step),
            }
        }
        self.report.end_ms = self.now;
        self.report.clone()
    }

    fn setup_globals(&mut self) {
        let globals: Vec<(usize, String)> = self
            .config
            .relays
            .iter()
            .flat_map(|r| r.global_plugins.iter().map(|p| (self.names[&r.name], p.clone())))
            .collect();
        for (i, plugin) in globals {
            self.attach_global(i, &plugin);
        }
    }

    fn attach_global(&mut self, i: usize, plugin: &str) {
        let bytes = self.packages[plugin].clone();
        let now = self.now;
        let SimNode::Relay(r) = &mut self.nodes[i].1 else { unreachable!("validated relay") };
        match r.attach_global(&bytes, now) {
            Ok((_, actions)) => self.apply(i, actions),
            Err(e) => {
                self.record(i, "attach_error", json!({"plugin": plugin, "code": e.code(), "error": e.to_string()}))
            }
        }
    }

    fn apply(&mut self, i: usize, actions: Vec<Action>) {
        for a in actions {
            match a {
                Action::Send { to, cell } => {
                    let j = self.index.get(&to).copied();
                    match j.and_then(|j| self.latency.get(&(i, j)).map(|&l| (j, l))) {
                        Some((j, lat)) => {
                            let to_name = self.nodes[j].0.clone();
                            self.record(i, "cell_send", json!({"to": to_name, "circ_id": cell.circ_id, "command": cell.command}));
                            self.schedule(self.now + lat, Event::Deliver { from: i, to: j, cell });
                        }
                        None => self.record(
                            i,
                            "drop",
                            json!({"reason": "no link", "to": to.hex(), "circ_id": cell.circ_id, "command": cell.command}),
                        ),
                    }
                }
                Action::Wakeup { at_ms } => {
                    let at = at_ms.max(self.now);
                    if self.wakeups.insert((at, i)) {
                        self.schedule(at, Event::Wakeup(i));
                    }
                }
                Action::Record(r) => self.record(i, r.kind, r.detail),
            }
        }
        self.collect_client(i);
    }

    fn collect_client(&mut self, i: usize) {
        let SimNode::Client(c) = &mut self.nodes[i].1 else { return };
        let serials: Vec<CircuitKey> = c.circuits().map(|c| c.serial).collect();
        for serial in serials {
            let Some(label) = self.labels.get(&(i, serial)) else { continue };
            let key = (self.nodes[i].0.clone(), label.clone());
            let SimNode::Client(c) = &mut self.nodes[i].1 else { unreachable!() };
            let got = c.take_received(serial);
            let replies = c.take_replies(serial);
            self.received.entry(key.clone()).or_default().extend(got.into_iter().map(|(_, d)| d));
            for reply in replies {
                self.report.replies.push(ReplyRecord {
                    t_ms: self.now,
                    client: key.0.clone(),
                    circuit: key.1.clone(),
                    reply,
                });
            }
        }
    }

    fn client_mut(&mut self, name: &str) -> (usize, &mut ClientNode) {
        let i = self.names[name];
        match &mut self.nodes[i].1 {
            SimNode::Client(c) => (i, c),
            SimNode::Relay(_) => unreachable!("validated client"),
        }
    }

    fn script_error(&mut self, step: usize, node: usize, error: String) {
        self.report.script_errors += 1;
        self.record(node, "script_error", json!({"step": step, "error": error}));
    }

    fn run_step(&mut self, step: usize) {
        let action = self.config.script[step].action.clone();
        let now = self.now;
        let serial_of = |sim: &Simulation, client: &str, circuit: &str| sim.circuit_serial(client, circuit);
        match action {
            ScriptAction::BuildCircuit { client, circuit, route } => {
                let ids: Vec<NodeId> = route.iter().map(|r| self.nodes[self.names[r]].1.id()).collect();
                let (i, c) = self.client_mut(&client);
                match c.build_circuit(&ids, now) {
                    Ok((serial, actions)) => {
                        self.circuits.insert((client.clone(), circuit.clone()), serial);
                        self.labels.insert((i, serial), circuit);
                        self.apply(i, actions);
                    }
                    Err(e) => self.script_error(step, i, e.to_string()),
                }
            }
            ScriptAction::SendData { client, circuit, stream_id, data } => {
                let serial = serial_of(self, &client, &circuit);
                let (i, c) = self.client_mut(&client);
                let r = match serial {
                    Some(s) => c.send_data(s, stream_id, data.as_bytes()).map_err(|e| e.to_string()),
                    None => Err(format!("no circuit {circuit:?}")),
                };
                self.finish(step, i, r);
            }
            ScriptAction::InjectPlugin { client, circuit, hop, plugin } => {
                let serial = serial_of(self, &client, &circuit);
                let bytes = self.packages[&plugin].clone();
                let (i, c) = self.client_mut(&client);
                let r = match serial {
                    Some(s) => c.inject_plugin(s, hop, &bytes).map_err(|e| e.to_string()),
                    None => Err(format!("no circuit {circuit:?}")),
                };
                self.finish(step, i, r);
            }
            ScriptAction::AttachLocal { client, circuit, plugin } => {
                let serial = serial_of(self, &client, &circuit);
                let bytes = self.packages[&plugin].clone();
                let (i, c) = self.client_mut(&client);
                let r = match serial {
                    Some(s) => c.attach_local(s, &bytes, now).map(|(_, a)| a).map_err(|e| e.to_string()),
                    None => Err(format!("no circuit {circuit:?}")),
                };
                self.finish(step, i, r);
            }
            ScriptAction::AttachGlobal { relay, plugin } => {
                let i = self.names[&relay];
                self.attach_global(i, &plugin);
            }
            ScriptAction::SendCell { client, circuit, hop, relay_cmd, data } => {
                let serial = serial_of(self, &client, &circuit);
                let (i, c) = self.client_mut(&client);
                let r = match serial {
                    Some(s) => c.send_extension(s, hop, relay_cmd, data.as_bytes()).map_err(|e| e.to_string()),
                    None => Err(format!("no circuit {circuit:?}")),
                };
                self.finish(step, i, r);
            }
            ScriptAction::Close { client, circuit } => {
                let serial = serial_of(self, &client, &circuit);
                let (i, c) = self.client_mut(&client);
                let r = match serial {
                    Some(s) => c.close(s, now).map_err(|e| e.to_string()),
                    None => Err(format!("no circuit {circuit:?}")),
                };
                self.finish(step, i, r);
            }
            ScriptAction::Expect { description, expect } => {
                let (ok, observed) = self.evaluate(&expect);
                let description = description.unwrap_or_else(|| describe(&expect));
                self.record_as(
                    SIM_NODE.to_string(),
                    "expect",
                    json!({"step": step, "description": description, "ok": ok, "observed": observed}),
                );
                self.report.expectations.push(ExpectOutcome { step, t_ms: now, description, ok, observed });
            }
        }
    }

    fn finish(&mut self, step: usize, i: usize, r: Result<Vec<Action>, String>) {
        match r {
            Ok(actions) => self.apply(i, actions),
            Err(e) => self.script_error(step, i, e),
        }
    }

    fn evaluate(&self, expect: &Expect) -> (bool, String) {
        match expect {
            Expect::Trace { kind, node, detail, since_ms, count, min, max } => {
                let n = self
                    .report
                    .trace
                    .iter()
                    .filter(|r| r.kind == *kind)
                    .filter(|r| node.as_ref().is_none_or(|n| r.node == *n))
                    .filter(|r| since_ms.is_none_or(|s| r.t_ms >= s))
                    .filter(|r| detail.as_ref().is_none_or(|d| r.detail_matches(d)))
                    .count();
                let ok = match (count, min, max) {
                    (None, None, None) => n >= 1,
                    _ => count.is_none_or(|c| n == c) && min.is_none_or(|m| n >= m) && max.is_none_or(|m| n <= m),
                };
                (ok, format!("{n} matching records"))
            }
            Expect::Circuit { client, circuit, state } => {
                let c = self.circuit_serial(client, circuit).and_then(|s| self.client(client)?.circuit(s));
                let observed = match c.map(|c| &c.state) {
                    None => "missing".to_string(),
                    Some(CircuitState::Building) => "building".to_string(),
                    Some(CircuitState::Open) => "open".to_string(),
                    Some(CircuitState::Closed(why)) => format!("closed ({why})"),
                };
                (observed.split(' ').next() == Some(state.as_str()), observed)
            }
            Expect::Attachments { node, count } => {
                let n = self.node(node).map_or(0, |n| n.attachment_count());
                (n == *count, format!("{n} attachments"))
            }
            Expect::Received { client, circuit, data } => {
                let got: Vec<String> = self
                    .received
                    .get(&(client.clone(), circuit.clone()))
                    .map(|v| v.iter().map(|d| String::from_utf8_lossy(d).into_owned()).collect())
                    .unwrap_or_default();
                (got == *data, format!("{got:?}"))
            }
        }
    }
}

fn describe(e: &Expect) -> String {
    match e {
        Expect::Trace { kind, node, .. } => match node {
            Some(n) => format!("trace {kind} at {n}"),
            None => format!("trace {kind}"),
        },
        Expect::Circuit { client, circuit, state } => format!("{client}/{circuit} is {state}"),
        Expect::Attachments { node, count } => format!("{node} has {count} attachments"),
        Expect::Received { client, circuit, .. } => format!("{client}/{circuit} received data"),
    }
}
