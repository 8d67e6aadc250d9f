//! Client-side circuits: telescoping construction, onion send/receive,
//! per-hop plugin injection and locally attached plugins.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::fmt;
use std::sync::Arc;

use rand_chacha::ChaCha20Rng;
use rand_core::RngCore;
use serde_json::json;
use thiserror::Error;

use crate::abi::{EventKind, SCRATCH_LEN};
use crate::cell::{link_cmd, relay_cmd, FeatureId, LinkCell, RelayPayload, RELAY_DATA_LEN};
use crate::crypto::{CryptoProvider, Direction, TestProvider};
use crate::manager::registry::{error_code_name, Attached};
use crate::manager::{AttachError, AttachmentId, CircuitKey, Scope, TrustStore};
use crate::onion::{onion_unwrap_layer, onion_wrap, recognize, stamp_digest, HopKeys};
use crate::relay::host::{CircuitView, Effects, EventCall, HostContext, PluginEnv, Policy};
use crate::relay::node::{destroy_cell, KillReason, KillReport, Timer};
use crate::relay::{Action, CircIdAllocator, NodeId};
use crate::vm::RunError;

pub const MAX_HOPS: usize = 5;
/// Largest package `inject_plugin` can carry (u16 length prefix).
pub const MAX_INJECT_LEN: usize = u16::MAX as usize;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ClientError {
    #[error("route has {0} hops, expected 1..={MAX_HOPS}")]
    HopCount(usize),
    #[error("unknown relay {0}")]
    UnknownRelay(NodeId),
    #[error("no such circuit")]
    UnknownCircuit,
    #[error("circuit is {0}")]
    NotOpen(CircuitState),
    #[error("payload of {0} bytes exceeds {RELAY_DATA_LEN}")]
    DataTooLong(usize),
    #[error("hop {hop} out of range 1..={hops}")]
    BadHop { hop: usize, hops: usize },
    #[error("package of {0} bytes exceeds {MAX_INJECT_LEN}")]
    PackageTooLarge(usize),
    #[error("relay command {0} cannot be sent by the client")]
    BadCommand(u8),
    #[error(transparent)]
    Attach(#[from] AttachError),
    #[error("cell counter overflow")]
    CounterOverflow,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum CircuitState {
    Building,
    Open,
    Closed(String),
}

impl fmt::Display for CircuitState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CircuitState::Building => f.write_str("building"),
            CircuitState::Open => f.write_str("open"),
            CircuitState::Closed(why) => write!(f, "closed ({why})"),
        }
    }
}

/// Answer to an `inject_plugin` request.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum PluginReply {
    Ack { hop: usize, latency_us: u32, name: String },
    Err { hop: usize, code: u8, message: String },
}

#[derive(Debug, Clone)]
pub struct ClientCircuit {
    pub serial: CircuitKey,
    pub circ_id: u32,
    pub route: Vec<NodeId>,
    pub hops: Vec<HopKeys>,
    pending_key: Option<[u8; 32]>,
    pub state: CircuitState,
    pub received: VecDeque<(u16, Vec<u8>)>,
    pub replies: VecDeque<PluginReply>,
    /// Extension cells consumed by local plugins.
    pub handled_extension_cells: u64,
    scratch: BTreeMap<AttachmentId, [u8; SCRATCH_LEN]>,
    timers: Vec<Timer>,
}

impl ClientCircuit {
    pub fn entry(&self) -> NodeId {
        self.route[0]
    }

    pub fn is_open(&self) -> bool {
        self.state == CircuitState::Open
    }

    fn view(&self) -> CircuitView {
        CircuitView { circ_id: self.circ_id, has_prev: false, has_next: true, cells_forwarded: 0 }
    }
}

pub struct ClientNode {
    pub id: NodeId,
    provider: Arc<dyn CryptoProvider>,
    pub env: PluginEnv,
    directory: BTreeSet<NodeId>,
    circuits: BTreeMap<CircuitKey, ClientCircuit>,
    by_link: BTreeMap<(NodeId, u32), CircuitKey>,
    next_serial: CircuitKey,
    alloc: CircIdAllocator,
    timer_seq: u64,
}

impl ClientNode {
    pub fn new(id: NodeId, trust: TrustStore, policy: Policy, rng: ChaCha20Rng) -> ClientNode {
        ClientNode {
            id,
            provider: Arc::new(TestProvider),
            env: PluginEnv::new(trust, policy, rng),
            directory: BTreeSet::new(),
            circuits: BTreeMap::new(),
            by_link: BTreeMap::new(),
            next_serial: 1,
            alloc: CircIdAllocator::default(),
            timer_seq: 0,
        }
    }

    pub fn with_provider(mut self, provider: Arc<dyn CryptoProvider>) -> ClientNode {
        self.provider = provider;
        self
    }

    pub fn add_relay(&mut self, id: NodeId) {
        self.directory.insert(id);
    }

    pub fn circuit(&self, serial: CircuitKey) -> Option<&ClientCircuit> {
        self.circuits.get(&serial)
    }

    pub fn circuits(&self) -> impl Iterator<Item = &ClientCircuit> {
        self.circuits.values()
    }

    fn circuit_mut(&mut self, serial: CircuitKey) -> Result<&mut ClientCircuit, ClientError> {
        self.circuits.get_mut(&serial).ok_or(ClientError::UnknownCircuit)
    }

    fn open_circuit(&mut self, serial: CircuitKey) -> Result<&mut ClientCircuit, ClientError> {
        let c = self.circuit_mut(serial)?;
        if c.state != CircuitState::Open {
            return Err(ClientError::NotOpen(c.state.clone()));
        }
        Ok(c)
    }

    pub fn next_wakeup(&self) -> Option<u64> {
        self.circuits.values().flat_map(|c| c.timers.iter().map(|t| t.fire_at)).min()
    }

    fn fresh_key(&mut self) -> [u8; 32] {
        let mut k = [0u8; 32];
        self.env.rng.fill_bytes(&mut k);
        k
    }

    /// Sends CREATE to the first hop. The circuit opens once every hop has
    /// confirmed; follow progress through [`ClientNode::circuit`].
    pub fn build_circuit(&mut self, route: &[NodeId], _now_ms: u64) -> Result<(CircuitKey, Vec<Action>), ClientError> {
        if route.is_empty() || route.len() > MAX_HOPS {
            return Err(ClientError::HopCount(route.len()));
        }
        if let Some(r) = route.iter().find(|r| !self.directory.contains(r)) {
            return Err(ClientError::UnknownRelay(*r));
        }
        let entry = route[0];
        let by_link = &self.by_link;
        let circ_id = self.alloc.allocate(self.id, entry, |id| by_link.contains_key(&(entry, id)));
        let key = self.fresh_key();
        let serial = self.next_serial;
        self.next_serial += 1;
        self.circuits.insert(
            serial,
            ClientCircuit {
                serial,
                circ_id,
                route: route.to_vec(),
                hops: Vec::new(),
                pending_key: Some(key),
                state: CircuitState::Building,
                received: VecDeque::new(),
                replies: VecDeque::new(),
                handled_extension_cells: 0,
                scratch: BTreeMap::new(),
                timers: Vec::new(),
            },
        );
        self.by_link.insert((entry, circ_id), serial);
        let sealed = self.provider.seal(&entry.seal_id(), &key);
        let cell = LinkCell::with_prefix(circ_id, link_cmd::CREATE, &sealed).expect("sealed key fits");
        let out = vec![
            Action::record("circuit_build", json!({"circ_id": circ_id, "hops": route.len()})),
            Action::Send { to: entry, cell },
        ];
        Ok((serial, out))
    }

    /// Wraps `payload` so that hop `hop` (1-based) recognizes it.
    fn send_to_hop(
        &mut self,
        serial: CircuitKey,
        hop: usize,
        mut payload: RelayPayload,
    ) -> Result<Action, ClientError> {
        let provider = Arc::clone(&self.provider);
        let c = self.circuit_mut(serial)?;
        let hops = c.hops.len();
        if hop == 0 || hop > hops {
            return Err(ClientError::BadHop { hop, hops });
        }
        if c.hops[..hop].iter().any(|h| h.counter(Direction::Forward) == u64::MAX) {
            return Err(ClientError::CounterOverflow);
        }
        stamp_digest(&*provider, &mut payload, &mut c.hops[hop - 1], Direction::Forward);
        let buf = onion_wrap(&*provider, &payload, &mut c.hops[..hop], Direction::Forward)
            .map_err(|_| ClientError::CounterOverflow)?;
        Ok(Action::Send { to: c.entry(), cell: LinkCell::new(c.circ_id, link_cmd::RELAY, buf) })
    }

    pub fn send_data(&mut self, serial: CircuitKey, stream_id: u16, data: &[u8]) -> Result<Vec<Action>, ClientError> {
        if data.len() > RELAY_DATA_LEN {
            return Err(ClientError::DataTooLong(data.len()));
        }
        let hops = self.open_circuit(serial)?.hops.len();
        let payload = RelayPayload::new(relay_cmd::DATA, stream_id, data).expect("length checked");
        let circ_id = self.circuits[&serial].circ_id;
        Ok(vec![
            Action::record("data_sent", json!({"circ_id": circ_id, "stream_id": stream_id, "len": data.len()})),
            self.send_to_hop(serial, hops, payload)?,
        ])
    }

    /// Sends an arbitrary extension command to `hop`.
    pub fn send_extension(
        &mut self,
        serial: CircuitKey,
        hop: usize,
        cmd: u8,
        data: &[u8],
    ) -> Result<Vec<Action>, ClientError> {
        if cmd < relay_cmd::FIRST_EXTENSION {
            return Err(ClientError::BadCommand(cmd));
        }
        if data.len() > RELAY_DATA_LEN {
            return Err(ClientError::DataTooLong(data.len()));
        }
        self.open_circuit(serial)?;
        let payload = RelayPayload::new(cmd, 0, data).expect("length checked");
        let circ_id = self.circuits[&serial].circ_id;
        Ok(vec![
            Action::record(
                "extension_sent",
                json!({"circ_id": circ_id, "hop": hop, "relay_cmd": cmd, "len": data.len()}),
            ),
            self.send_to_hop(serial, hop, payload)?,
        ])
    }

    pub fn take_received(&mut self, serial: CircuitKey) -> Vec<(u16, Vec<u8>)> {
        self.circuits.get_mut(&serial).map(|c| c.received.drain(..).collect()).unwrap_or_default()
    }

    pub fn take_replies(&mut self, serial: CircuitKey) -> Vec<PluginReply> {
        self.circuits.get_mut(&serial).map(|c| c.replies.drain(..).collect()).unwrap_or_default()
    }

    /// Sends `package` to hop `hop` as PLUGIN_DELIVER fragments. The reply
    /// arrives later in the circuit's `replies`.
    pub fn inject_plugin(
        &mut self,
        serial: CircuitKey,
        hop: usize,
        package: &[u8],
    ) -> Result<Vec<Action>, ClientError> {
        if package.is_empty() || package.len() > MAX_INJECT_LEN {
            return Err(ClientError::PackageTooLarge(package.len()));
        }
        let c = self.open_circuit(serial)?;
        let hops = c.hops.len();
        if hop == 0 || hop > hops {
            return Err(ClientError::BadHop { hop, hops });
        }
        let circ_id = c.circ_id;
        let mut fragments = Vec::new();
        let mut first = (package.len() as u16).to_le_bytes().to_vec();
        let head = package.len().min(RELAY_DATA_LEN - 2);
        first.extend_from_slice(&package[..head]);
        fragments.push(first);
        fragments.extend(package[head..].chunks(RELAY_DATA_LEN).map(<[u8]>::to_vec));
        let mut out = vec![Action::record(
            "plugin_inject",
            json!({"circ_id": circ_id, "hop": hop, "len": package.len(), "fragments": fragments.len()}),
        )];
        for f in fragments {
            let payload = RelayPayload::new(relay_cmd::PLUGIN_DELIVER, 0, &f).expect("fragment fits");
            out.push(self.send_to_hop(serial, hop, payload)?);
        }
        Ok(out)
    }

    /// Attaches a package to this circuit on the client itself.
    pub fn attach_local(
        &mut self,
        serial: CircuitKey,
        package: &[u8],
        now_ms: u64,
    ) -> Result<(Attached, Vec<Action>), ClientError> {
        let c = self.circuits.get(&serial).ok_or(ClientError::UnknownCircuit)?;
        if matches!(c.state, CircuitState::Closed(_)) {
            return Err(ClientError::NotOpen(c.state.clone()));
        }
        let view = c.view();
        let pending = c.timers.len();
        let env = &mut self.env;
        let mut ctx = HostContext::new(now_ms, [0; SCRATCH_LEN], &mut env.rng);
        ctx.circuit = Some(view);
        ctx.emit_direction = Some(Direction::Forward);
        ctx.emit_budget = env.policy.emit_budget;
        ctx.timer_slots = env.policy.max_timers.saturating_sub(pending);
        let (policy, gas) = (env.policy.max_capabilities, env.policy.gas_per_event);
        let attached = env.registry.attach_bytes(package, &env.trust, Scope::Circuit(serial), policy, gas, &mut ctx)?;
        let fx = ctx.into_effects();
        let att = self.env.registry.get(attached.id).expect("attached");
        let features: Vec<u8> = att.package.header.feature_ids.iter().map(|f| f.get()).collect();
        let mut out = vec![Action::record(
            "plugin_attach",
            json!({"plugin": att.name(), "scope": "local", "circ_id": view.circ_id, "features": features}),
        )];
        self.commit(serial, attached.id, fx, now_ms, &mut out);
        Ok((attached, out))
    }

    /// Closes the circuit: local teardown events, then DESTROY to the entry.
    pub fn close(&mut self, serial: CircuitKey, now_ms: u64) -> Result<Vec<Action>, ClientError> {
        let c = self.circuits.get(&serial).ok_or(ClientError::UnknownCircuit)?;
        if matches!(c.state, CircuitState::Closed(_)) {
            return Ok(Vec::new());
        }
        let (entry, circ_id) = (c.entry(), c.circ_id);
        let mut out = Vec::new();
        self.teardown(serial, "closed by client", now_ms, &mut out);
        out.push(Action::Send { to: entry, cell: destroy_cell(circ_id) });
        out.push(Action::record("circuit_closed", json!({"circ_id": circ_id, "reason": "closed by client"})));
        Ok(out)
    }

    /// Marks a circuit that never finished building as failed.
    pub fn abandon(&mut self, serial: CircuitKey, reason: &str, now_ms: u64) -> Vec<Action> {
        let mut out = Vec::new();
        let Some(c) = self.circuits.get(&serial) else { return out };
        if c.state != CircuitState::Building {
            return out;
        }
        let (entry, circ_id) = (c.entry(), c.circ_id);
        self.teardown(serial, reason, now_ms, &mut out);
        out.push(Action::Send { to: entry, cell: destroy_cell(circ_id) });
        out.push(Action::record("circuit_closed", json!({"circ_id": circ_id, "reason": reason})));
        out
    }

    pub fn handle_link_cell(&mut self, from: NodeId, cell: LinkCell, now_ms: u64) -> Vec<Action> {
        let mut out = Vec::new();
        let Some(&serial) = self.by_link.get(&(from, cell.circ_id)) else {
            out.push(Action::record(
                "drop",
                json!({"reason": "cell for unknown circuit", "from": from.hex(), "circ_id": cell.circ_id, "command": cell.command}),
            ));
            return out;
        };
        if matches!(self.circuits[&serial].state, CircuitState::Closed(_)) {
            out.push(Action::record("drop", json!({"reason": "cell on closed circuit", "circ_id": cell.circ_id})));
            return out;
        }
        match cell.command {
            link_cmd::CREATED => self.on_created(serial, now_ms, &mut out),
            link_cmd::RELAY => self.on_relay(serial, cell, now_ms, &mut out),
            link_cmd::DESTROY => {
                let circ_id = self.circuits[&serial].circ_id;
                self.teardown(serial, "destroyed by network", now_ms, &mut out);
                out.push(Action::record(
                    "circuit_closed",
                    json!({"circ_id": circ_id, "reason": "destroyed by network"}),
                ));
            }
            other => out.push(Action::record(
                "drop",
                json!({"reason": "unexpected link command", "circ_id": cell.circ_id, "command": other}),
            )),
        }
        out
    }

    fn on_created(&mut self, serial: CircuitKey, now_ms: u64, out: &mut Vec<Action>) {
        let c = self.circuits.get_mut(&serial).expect("circuit");
        match (c.hops.is_empty(), c.pending_key.take()) {
            (true, Some(key)) => {
                c.hops.push(HopKeys::new(key));
                self.advance_build(serial, now_ms, out);
            }
            _ => self.kill(serial, KillReason::ProtocolViolation(0), now_ms, out),
        }
    }

    fn advance_build(&mut self, serial: CircuitKey, now_ms: u64, out: &mut Vec<Action>) {
        let c = &self.circuits[&serial];
        let built = c.hops.len();
        if built == c.route.len() {
            let circ_id = c.circ_id;
            self.circuits.get_mut(&serial).expect("circuit").state = CircuitState::Open;
            out.push(Action::record("circuit_open", json!({"circ_id": circ_id, "hops": built})));
            return;
        }
        let next = c.route[built];
        let key = self.fresh_key();
        let mut data = next.0.to_vec();
        data.extend_from_slice(&self.provider.seal(&next.seal_id(), &key));
        self.circuits.get_mut(&serial).expect("circuit").pending_key = Some(key);
        let payload = RelayPayload::new(relay_cmd::EXTEND, 0, &data).expect("fits");
        match self.send_to_hop(serial, built, payload) {
            Ok(a) => out.push(a),
            Err(_) => self.kill(serial, KillReason::CounterOverflow, now_ms, out),
        }
    }

    fn on_relay(&mut self, serial: CircuitKey, cell: LinkCell, now_ms: u64, out: &mut Vec<Action>) {
        let provider = Arc::clone(&self.provider);
        let c = self.circuits.get_mut(&serial).expect("circuit");
        let mut buf = cell.payload;
        let mut from_hop = None;
        for (i, hop) in c.hops.iter_mut().enumerate() {
            if onion_unwrap_layer(&*provider, &mut buf, hop, Direction::Backward).is_err() {
                return self.kill(serial, KillReason::CounterOverflow, now_ms, out);
            }
            if recognize(&*provider, &buf, hop, Direction::Backward) {
                from_hop = Some(i + 1);
                break;
            }
        }
        let Some(hop) = from_hop else {
            return self.kill(serial, KillReason::Unrecognized, now_ms, out);
        };
        let payload = RelayPayload::decode(&buf);
        if payload.validate_length().is_err() {
            return self.kill(serial, KillReason::ProtocolViolation(payload.relay_cmd), now_ms, out);
        }
        let circ_id = c.circ_id;
        let building = c.state == CircuitState::Building;
        match payload.relay_cmd {
            relay_cmd::EXTENDED if building && hop == c.hops.len() && c.pending_key.is_some() => {
                let key = c.pending_key.take().expect("pending key");
                c.hops.push(HopKeys::new(key));
                self.advance_build(serial, now_ms, out);
            }
            relay_cmd::DATA if !building => {
                out.push(Action::record(
                    "data_received",
                    json!({"circ_id": circ_id, "hop": hop, "stream_id": payload.stream_id, "data": hex::encode(payload.body())}),
                ));
                c.received.push_back((payload.stream_id, payload.body().to_vec()));
            }
            relay_cmd::END => {
                out.push(Action::record("stream_end", json!({"circ_id": circ_id, "stream_id": payload.stream_id})))
            }
            relay_cmd::PLUGIN_ACK if payload.length >= 4 => {
                let b = payload.body();
                let latency_us = u32::from_le_bytes(b[..4].try_into().expect("4 bytes"));
                let name = String::from_utf8_lossy(&b[4..]).into_owned();
                // Latency stays out of the record so traces are reproducible.
                out.push(Action::record("plugin_ack", json!({"circ_id": circ_id, "hop": hop, "plugin": name})));
                c.replies.push_back(PluginReply::Ack { hop, latency_us, name });
            }
            relay_cmd::PLUGIN_ERR if payload.length >= 1 => {
                let b = payload.body();
                let message = String::from_utf8_lossy(&b[1..]).into_owned();
                out.push(Action::record(
                    "plugin_err_received",
                    json!({"circ_id": circ_id, "hop": hop, "code": b[0], "name": error_code_name(b[0])}),
                ));
                c.replies.push_back(PluginReply::Err { hop, code: b[0], message });
            }
            cmd if cmd >= relay_cmd::FIRST_EXTENSION && !building => {
                let feature = FeatureId::new(cmd).expect("extension");
                match self.env.registry.lookup(feature, Some(serial)) {
                    Some(id) => {
                        let args = [u64::from(cmd), u64::from(Direction::Backward.as_byte())];
                        match self.fire(serial, id, EventKind::OnFeatureCell, &args, Some(&payload), now_ms, out) {
                            Ok(()) => {
                                if let Some(c) = self.circuits.get_mut(&serial) {
                                    c.handled_extension_cells += 1;
                                }
                            }
                            Err(e) => {
                                let reason = KillReason::from_run_error(EventKind::OnFeatureCell, Some(cmd), &e);
                                self.kill(serial, reason, now_ms, out);
                            }
                        }
                    }
                    None => self.kill(serial, KillReason::UnknownFeature(cmd), now_ms, out),
                }
            }
            cmd => self.kill(serial, KillReason::ProtocolViolation(cmd), now_ms, out),
        }
    }

    fn scratch_for(&self, serial: CircuitKey, id: AttachmentId) -> [u8; SCRATCH_LEN] {
        let att = self.env.registry.get(id).expect("attachment");
        match att.scope {
            Scope::Global => {
                self.circuits.get(&serial).and_then(|c| c.scratch.get(&id)).copied().unwrap_or(att.scratch)
            }
            Scope::Circuit(_) => att.scratch,
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn fire(
        &mut self,
        serial: CircuitKey,
        id: AttachmentId,
        event: EventKind,
        args: &[u64],
        trigger: Option<&RelayPayload>,
        now_ms: u64,
        out: &mut Vec<Action>,
    ) -> Result<(), RunError> {
        let c = &self.circuits[&serial];
        let call = EventCall {
            now_ms,
            circuit: Some(c.view()),
            scratch: self.scratch_for(serial, id),
            trigger,
            emit_direction: Some(Direction::Forward),
            timer_slots: self.env.policy.max_timers.saturating_sub(c.timers.len()),
        };
        let name = self.env.registry.get(id).map(|a| a.name().to_string()).unwrap_or_default();
        match self.env.run(id, event, args, call) {
            Ok(Some((_, fx))) => {
                self.commit(serial, id, fx, now_ms, out);
                Ok(())
            }
            Ok(None) => Ok(()),
            Err(e) => {
                out.push(Action::record(
                    "plugin_trap",
                    json!({"plugin": name, "event": event.name(), "error": e.to_string(), "circ_id": c.circ_id}),
                ));
                Err(e)
            }
        }
    }

    fn commit(&mut self, serial: CircuitKey, id: AttachmentId, fx: Effects, now_ms: u64, out: &mut Vec<Action>) {
        let Some(att) = self.env.registry.get_mut(id) else { return };
        let name = att.name().to_string();
        let Some(c) = self.circuits.get_mut(&serial) else { return };
        for (level, message) in fx.logs {
            out.push(Action::record(
                "plugin_log",
                json!({"plugin": name, "circ_id": c.circ_id, "level": level, "message": message}),
            ));
        }
        if let Some(s) = fx.scratch {
            match att.scope {
                Scope::Global => {
                    c.scratch.insert(id, s);
                }
                Scope::Circuit(_) => att.scratch = s,
            }
        }
        for (fire_at, tag) in fx.timers {
            c.timers.push(Timer { fire_at, seq: self.timer_seq, attachment: id, tag });
            self.timer_seq += 1;
            out.push(Action::Wakeup { at_ms: fire_at });
        }
        let circ_id = c.circ_id;
        for emit in fx.emits {
            let Some(hops) = self.circuits.get(&serial).filter(|c| c.is_open()).map(|c| c.hops.len()) else { break };
            out.push(Action::record(
                "plugin_emit",
                json!({"plugin": name, "circ_id": circ_id, "relay_cmd": emit.relay_cmd, "len": emit.data.len()}),
            ));
            let payload = RelayPayload::new(emit.relay_cmd, 0, &emit.data).expect("length checked by host");
            match self.send_to_hop(serial, hops, payload) {
                Ok(a) => out.push(a),
                Err(_) => return self.kill(serial, KillReason::CounterOverflow, now_ms, out),
            }
        }
    }

    pub fn on_wakeup(&mut self, now_ms: u64) -> Vec<Action> {
        let mut out = Vec::new();
        loop {
            let due = self
                .circuits
                .values()
                .flat_map(|c| c.timers.iter().map(move |t| (t.fire_at, t.seq, c.serial)))
                .filter(|&(at, _, _)| at <= now_ms)
                .min();
            let Some((_, seq, serial)) = due else { break };
            let c = self.circuits.get_mut(&serial).expect("circuit");
            let pos = c.timers.iter().position(|t| t.seq == seq).expect("timer");
            let timer = c.timers.remove(pos);
            let circ_id = c.circ_id;
            let Some(name) = self.env.registry.get(timer.attachment).map(|a| a.name().to_string()) else { continue };
            out.push(Action::record("timer_fire", json!({"plugin": name, "circ_id": circ_id, "tag": timer.tag})));
            if let Err(e) =
                self.fire(serial, timer.attachment, EventKind::OnTimer, &[timer.tag], None, now_ms, &mut out)
            {
                let reason = KillReason::from_run_error(EventKind::OnTimer, None, &e);
                self.kill(serial, reason, now_ms, &mut out);
            }
        }
        out
    }

    fn teardown(&mut self, serial: CircuitKey, reason: &str, now_ms: u64, out: &mut Vec<Action>) {
        let circ_id = self.circuits[&serial].circ_id;
        for id in self.env.registry.circuit_attachments(serial) {
            let name = self.env.registry.get(id).map(|a| a.name().to_string()).unwrap_or_default();
            let call = EventCall {
                now_ms,
                circuit: Some(self.circuits[&serial].view()),
                scratch: self.scratch_for(serial, id),
                trigger: None,
                emit_direction: None,
                timer_slots: 0,
            };
            match self.env.run(id, EventKind::OnCircuitTeardown, &[], call) {
                Ok(Some((_, fx))) => {
                    for (level, message) in fx.logs {
                        out.push(Action::record(
                            "plugin_log",
                            json!({"plugin": name, "circ_id": circ_id, "level": level, "message": message}),
                        ));
                    }
                }
                Ok(None) => {}
                Err(e) => out.push(Action::record(
                    "plugin_trap",
                    json!({"plugin": name, "event": "on_circuit_teardown", "error": e.to_string()}),
                )),
            }
        }
        for att in self.env.registry.remove_circuit(serial) {
            out.push(Action::record("plugin_detach", json!({"plugin": att.name(), "circ_id": circ_id})));
        }
        let c = self.circuits.get_mut(&serial).expect("circuit");
        c.state = CircuitState::Closed(reason.to_string());
        c.timers.clear();
        c.pending_key = None;
    }

    /// The client applies the same kill policy as relays.
    fn kill(&mut self, serial: CircuitKey, reason: KillReason, now_ms: u64, out: &mut Vec<Action>) {
        let Some(c) = self.circuits.get(&serial) else { return };
        let (entry, circ_id) = (c.entry(), c.circ_id);
        self.teardown(serial, &reason.to_string(), now_ms, out);
        out.push(Action::Send { to: entry, cell: destroy_cell(circ_id) });
        let report = KillReport::new(now_ms, self.id, circ_id, &reason);
        out.push(Action::record("kill_report", serde_json::to_value(report).expect("report serializes")));
    }
}
