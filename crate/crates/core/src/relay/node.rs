//! The relay state machine.
//!
//! Core relay commands (below 32) are handled natively; extension commands
//! can only be handled by an attached plugin. An extension command nobody
//! handles kills the circuit, as does any command that is invalid where it
//! arrives.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::sync::Arc;

use rand_chacha::ChaCha20Rng;
use serde::Serialize;
use serde_json::json;

use super::host::{CircuitView, Effects, EventCall, HostContext, PluginEnv, Policy};
use super::{Action, CircIdAllocator, NodeId};
use crate::abi::{EventKind, SCRATCH_LEN};
use crate::cell::{link_cmd, relay_cmd, FeatureId, LinkCell, RelayPayload, PAYLOAD_LEN, RELAY_DATA_LEN};
use crate::crypto::{CryptoProvider, Direction, TestProvider};
use crate::manager::registry::{error_code_name, Attached};
use crate::manager::{AttachError, AttachmentId, CircuitKey, Scope, TrustStore};
use crate::onion::{onion_unwrap_layer, recognize, stamp_digest, HopKeys};
use crate::vm::{RunError, Trap};

pub const SEALED_KEY_LEN: usize = 32;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum KillReason {
    /// Extension command with no attached plugin.
    UnknownFeature(u8),
    PluginTrap {
        event: EventKind,
        relay_cmd: Option<u8>,
        trap: Option<Trap>,
        detail: String,
    },
    /// A cell at the last hop that no key recognizes.
    Unrecognized,
    /// A core command that is not valid where it arrived.
    ProtocolViolation(u8),
    ExtendFailed(String),
    CounterOverflow,
}

impl KillReason {
    pub fn relay_cmd(&self) -> Option<u8> {
        match self {
            KillReason::UnknownFeature(c) | KillReason::ProtocolViolation(c) => Some(*c),
            KillReason::PluginTrap { relay_cmd, .. } => *relay_cmd,
            _ => None,
        }
    }

    pub(crate) fn from_run_error(event: EventKind, relay_cmd: Option<u8>, e: &RunError) -> KillReason {
        KillReason::PluginTrap { event, relay_cmd, trap: e.trap(), detail: e.to_string() }
    }
}

impl fmt::Display for KillReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            KillReason::UnknownFeature(c) => write!(f, "UnknownFeature({c})"),
            KillReason::PluginTrap { trap: Some(t), .. } => write!(f, "PluginTrap({})", t.kind),
            KillReason::PluginTrap { detail, .. } => write!(f, "PluginTrap({detail})"),
            KillReason::Unrecognized => f.write_str("Unrecognized"),
            KillReason::ProtocolViolation(c) => write!(f, "ProtocolViolation({c})"),
            KillReason::ExtendFailed(why) => write!(f, "ExtendFailed({why})"),
            KillReason::CounterOverflow => f.write_str("CounterOverflow"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct TrapInfo {
    pub kind: String,
    pub pc: usize,
}

/// Structured record emitted whenever a circuit is killed.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct KillReport {
    pub time_ms: u64,
    pub node_id: String,
    pub circ_id: u32,
    pub reason: String,
    pub relay_cmd: Option<u8>,
    pub trap: Option<TrapInfo>,
}

impl KillReport {
    pub fn new(time_ms: u64, node: NodeId, circ_id: u32, reason: &KillReason) -> KillReport {
        let trap = match reason {
            KillReason::PluginTrap { trap: Some(t), .. } => Some(TrapInfo { kind: t.kind.to_string(), pc: t.pc }),
            _ => None,
        };
        KillReport {
            time_ms,
            node_id: node.hex(),
            circ_id,
            reason: reason.to_string(),
            relay_cmd: reason.relay_cmd(),
            trap,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Timer {
    pub fire_at: u64,
    pub seq: u64,
    pub attachment: AttachmentId,
    pub tag: u64,
}

#[derive(Debug, Clone)]
pub struct CircuitEntry {
    pub serial: CircuitKey,
    pub prev: (NodeId, u32),
    pub next: Option<(NodeId, u32)>,
    /// EXTEND sent, CREATED not yet received.
    pub extending: bool,
    pub keys: HopKeys,
    pub cells_forwarded: u64,
    /// Per-circuit scratch of global attachments.
    pub scratch: BTreeMap<AttachmentId, [u8; SCRATCH_LEN]>,
    pub timers: Vec<Timer>,
    /// Partially received PLUGIN_DELIVER: (total length, bytes so far).
    pub delivery: Option<(usize, Vec<u8>)>,
}

impl CircuitEntry {
    pub fn view(&self) -> CircuitView {
        CircuitView {
            circ_id: self.prev.1,
            has_prev: true,
            has_next: self.next.is_some(),
            cells_forwarded: self.cells_forwarded,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Side {
    Prev,
    Next,
}

pub struct RelayNode {
    pub id: NodeId,
    provider: Arc<dyn CryptoProvider>,
    pub env: PluginEnv,
    circuits: BTreeMap<CircuitKey, CircuitEntry>,
    by_link: BTreeMap<(NodeId, u32), (CircuitKey, Side)>,
    next_serial: CircuitKey,
    alloc: CircIdAllocator,
    peers: Option<BTreeSet<NodeId>>,
    timer_seq: u64,
}

impl RelayNode {
    pub fn new(id: NodeId, trust: TrustStore, policy: Policy, rng: ChaCha20Rng) -> RelayNode {
        RelayNode {
            id,
            provider: Arc::new(TestProvider),
            env: PluginEnv::new(trust, policy, rng),
            circuits: BTreeMap::new(),
            by_link: BTreeMap::new(),
            next_serial: 1,
            alloc: CircIdAllocator::default(),
            peers: None,
            timer_seq: 0,
        }
    }

    pub fn with_provider(mut self, provider: Arc<dyn CryptoProvider>) -> RelayNode {
        self.provider = provider;
        self
    }

    /// Restricts EXTEND targets to `peers`. By default any node id is accepted
    /// and the transport decides reachability.
    pub fn set_peers(&mut self, peers: impl IntoIterator<Item = NodeId>) {
        self.peers = Some(peers.into_iter().collect());
    }

    pub fn circuits(&self) -> impl Iterator<Item = &CircuitEntry> {
        self.circuits.values()
    }

    pub fn circuit(&self, serial: CircuitKey) -> Option<&CircuitEntry> {
        self.circuits.get(&serial)
    }

    pub fn circuit_by_link(&self, peer: NodeId, circ_id: u32) -> Option<&CircuitEntry> {
        self.by_link.get(&(peer, circ_id)).and_then(|(s, _)| self.circuits.get(s))
    }

    pub fn next_wakeup(&self) -> Option<u64> {
        self.circuits.values().flat_map(|c| c.timers.iter().map(|t| t.fire_at)).min()
    }

    /// Attaches a package globally. `on_attach` runs without circuit context.
    pub fn attach_global(&mut self, bytes: &[u8], now_ms: u64) -> Result<(Attached, Vec<Action>), AttachError> {
        let env = &mut self.env;
        let mut ctx = HostContext::new(now_ms, [0; SCRATCH_LEN], &mut env.rng);
        let policy = env.policy.max_capabilities;
        let gas = env.policy.gas_per_event;
        let attached = env.registry.attach_bytes(bytes, &env.trust, Scope::Global, policy, gas, &mut ctx)?;
        let fx = ctx.into_effects();
        let mut out = Vec::new();
        let att = self.env.registry.get(attached.id).expect("just attached");
        out.push(Action::record(
            "plugin_attach",
            json!({"plugin": att.name(), "scope": "global", "features": features(att)}),
        ));
        self.commit(None, attached.id, fx, now_ms, &mut out);
        Ok((attached, out))
    }

    pub fn detach_global(&mut self, id: AttachmentId, now_ms: u64) -> Vec<Action> {
        let mut out = Vec::new();
        let Some(att) = self.env.registry.get(id) else {
            out.push(Action::record("drop", json!({"reason": "detach of unknown attachment", "attachment": id})));
            return out;
        };
        let name = att.name().to_string();
        let call = EventCall {
            now_ms,
            circuit: None,
            scratch: att.scratch,
            trigger: None,
            emit_direction: None,
            timer_slots: 0,
        };
        match self.env.run(id, EventKind::OnDetach, &[], call) {
            Ok(Some((_, fx))) => self.commit(None, id, fx, now_ms, &mut out),
            Ok(None) => {}
            Err(e) => out.push(Action::record(
                "plugin_trap",
                json!({"plugin": name, "event": "on_detach", "error": e.to_string()}),
            )),
        }
        self.env.registry.remove(id);
        for c in self.circuits.values_mut() {
            c.scratch.remove(&id);
            c.timers.retain(|t| t.attachment != id);
        }
        out.push(Action::record("plugin_detach", json!({"plugin": name})));
        out
    }

    pub fn handle_link_cell(&mut self, from: NodeId, cell: LinkCell, now_ms: u64) -> Vec<Action> {
        let mut out = Vec::new();
        match cell.command {
            link_cmd::CREATE => self.on_create(from, cell, &mut out),
            link_cmd::CREATED => self.on_created(from, cell, now_ms, &mut out),
            link_cmd::RELAY => self.on_relay(from, cell, now_ms, &mut out),
            link_cmd::DESTROY => self.on_destroy(from, cell, now_ms, &mut out),
            other => out.push(drop_record("unknown link command", from, cell.circ_id, Some(other))),
        }
        out
    }

    fn on_create(&mut self, from: NodeId, cell: LinkCell, out: &mut Vec<Action>) {
        if cell.circ_id == 0 || self.by_link.contains_key(&(from, cell.circ_id)) {
            out.push(drop_record("CREATE on reserved or used circ_id", from, cell.circ_id, None));
            return;
        }
        let key: [u8; 32] = self
            .provider
            .open(&self.id.seal_id(), &cell.payload[..SEALED_KEY_LEN])
            .try_into()
            .expect("open preserves length");
        let serial = self.next_serial;
        self.next_serial += 1;
        self.circuits.insert(
            serial,
            CircuitEntry {
                serial,
                prev: (from, cell.circ_id),
                next: None,
                extending: false,
                keys: HopKeys::new(key),
                cells_forwarded: 0,
                scratch: BTreeMap::new(),
                timers: Vec::new(),
                delivery: None,
            },
        );
        self.by_link.insert((from, cell.circ_id), (serial, Side::Prev));
        out.push(Action::record("circuit_created", json!({"circ_id": cell.circ_id, "from": from.hex()})));
        out.push(Action::Send { to: from, cell: LinkCell::new(cell.circ_id, link_cmd::CREATED, [0; PAYLOAD_LEN]) });
    }

    fn on_created(&mut self, from: NodeId, cell: LinkCell, now_ms: u64, out: &mut Vec<Action>) {
        let Some(&(serial, Side::Next)) = self.by_link.get(&(from, cell.circ_id)) else {
            out.push(drop_record("CREATED for unknown circuit", from, cell.circ_id, None));
            return;
        };
        let c = self.circuits.get_mut(&serial).expect("linked circuit");
        if !c.extending {
            out.push(drop_record("unexpected CREATED", from, cell.circ_id, None));
            return;
        }
        c.extending = false;
        let circ_id = c.prev.1;
        out.push(Action::record("circuit_extended", json!({"circ_id": circ_id, "to": from.hex()})));
        let payload = RelayPayload::new(relay_cmd::EXTENDED, 0, &[]).expect("empty payload");
        self.send_backward(serial, payload, now_ms, out);
    }

    fn on_relay(&mut self, from: NodeId, cell: LinkCell, now_ms: u64, out: &mut Vec<Action>) {
        let Some(&(serial, side)) = self.by_link.get(&(from, cell.circ_id)) else {
            out.push(drop_record("RELAY for unknown circuit", from, cell.circ_id, None));
            return;
        };
        let provider = Arc::clone(&self.provider);
        let c = self.circuits.get_mut(&serial).expect("linked circuit");
        let mut buf = cell.payload;
        match side {
            Side::Next => {
                // Backward traffic: add our layer and pass it on.
                if onion_unwrap_layer(&*provider, &mut buf, &mut c.keys, Direction::Backward).is_err() {
                    return self.kill_circuit(serial, KillReason::CounterOverflow, now_ms, out);
                }
                c.cells_forwarded += 1;
                let (peer, id) = c.prev;
                out.push(Action::Send { to: peer, cell: LinkCell::new(id, link_cmd::RELAY, buf) });
            }
            Side::Prev => {
                if onion_unwrap_layer(&*provider, &mut buf, &mut c.keys, Direction::Forward).is_err() {
                    return self.kill_circuit(serial, KillReason::CounterOverflow, now_ms, out);
                }
                if recognize(&*provider, &buf, &mut c.keys, Direction::Forward) {
                    let payload = RelayPayload::decode(&buf);
                    self.process_relay_command(serial, payload, Direction::Forward, now_ms, out);
                } else if let Some((peer, id)) = c.next {
                    c.cells_forwarded += 1;
                    out.push(Action::Send { to: peer, cell: LinkCell::new(id, link_cmd::RELAY, buf) });
                } else {
                    self.kill_circuit(serial, KillReason::Unrecognized, now_ms, out);
                }
            }
        }
    }

    fn on_destroy(&mut self, from: NodeId, cell: LinkCell, now_ms: u64, out: &mut Vec<Action>) {
        let Some(&(serial, side)) = self.by_link.get(&(from, cell.circ_id)) else {
            out.push(drop_record("DESTROY for unknown circuit", from, cell.circ_id, None));
            return;
        };
        let c = &self.circuits[&serial];
        let onward = match side {
            Side::Prev => c.next,
            Side::Next => Some(c.prev),
        };
        let circ_id = c.prev.1;
        self.teardown(serial, now_ms, out);
        if let Some((peer, id)) = onward {
            out.push(Action::Send { to: peer, cell: destroy_cell(id) });
        }
        out.push(Action::record("circuit_destroyed", json!({"circ_id": circ_id, "from": from.hex()})));
    }

    /// Dispatches a payload recognized at this hop.
    pub fn process_relay_command(
        &mut self,
        serial: CircuitKey,
        payload: RelayPayload,
        dir: Direction,
        now_ms: u64,
        out: &mut Vec<Action>,
    ) {
        if payload.validate_length().is_err() {
            return self.kill_circuit(serial, KillReason::ProtocolViolation(payload.relay_cmd), now_ms, out);
        }
        let circ_id = self.circuits[&serial].prev.1;
        match payload.relay_cmd {
            relay_cmd::DATA => {
                out.push(Action::record(
                    "data_delivered",
                    json!({"circ_id": circ_id, "stream_id": payload.stream_id, "len": payload.length}),
                ));
                if self.env.policy.echo {
                    let echo = RelayPayload::new(relay_cmd::DATA, payload.stream_id, payload.body()).expect("fits");
                    self.send_backward(serial, echo, now_ms, out);
                }
            }
            relay_cmd::END => {
                out.push(Action::record("stream_end", json!({"circ_id": circ_id, "stream_id": payload.stream_id})));
            }
            relay_cmd::EXTEND => self.on_extend(serial, &payload, now_ms, out),
            relay_cmd::PLUGIN_DELIVER => self.deliver_plugin(serial, &payload, now_ms, out),
            cmd if cmd >= relay_cmd::FIRST_EXTENSION => {
                let feature = FeatureId::new(cmd).expect("extension command");
                match self.env.registry.lookup(feature, Some(serial)) {
                    Some(id) => {
                        let args = [u64::from(cmd), u64::from(dir.as_byte())];
                        if let Err(e) =
                            self.fire(Some(serial), id, EventKind::OnFeatureCell, &args, Some(&payload), now_ms, out)
                        {
                            let reason = KillReason::from_run_error(EventKind::OnFeatureCell, Some(cmd), &e);
                            self.kill_circuit(serial, reason, now_ms, out);
                        }
                    }
                    None => self.kill_circuit(serial, KillReason::UnknownFeature(cmd), now_ms, out),
                }
            }
            cmd => self.kill_circuit(serial, KillReason::ProtocolViolation(cmd), now_ms, out),
        }
    }

    fn on_extend(&mut self, serial: CircuitKey, payload: &RelayPayload, now_ms: u64, out: &mut Vec<Action>) {
        let body = payload.body();
        if body.len() != 16 + SEALED_KEY_LEN {
            return self.kill_circuit(serial, KillReason::ProtocolViolation(relay_cmd::EXTEND), now_ms, out);
        }
        let target = NodeId(body[..16].try_into().expect("16 bytes"));
        if self.circuits[&serial].next.is_some() {
            return self.kill_circuit(serial, KillReason::ExtendFailed("already extended".into()), now_ms, out);
        }
        if target == self.id || self.peers.as_ref().is_some_and(|p| !p.contains(&target)) {
            return self.kill_circuit(serial, KillReason::ExtendFailed(format!("no link to {target}")), now_ms, out);
        }
        let by_link = &self.by_link;
        let circ_id = self.alloc.allocate(self.id, target, |id| by_link.contains_key(&(target, id)));
        self.by_link.insert((target, circ_id), (serial, Side::Next));
        let c = self.circuits.get_mut(&serial).expect("circuit");
        c.next = Some((target, circ_id));
        c.extending = true;
        let cell = LinkCell::with_prefix(circ_id, link_cmd::CREATE, &body[16..]).expect("fits");
        out.push(Action::Send { to: target, cell });
    }

    /// Accumulates PLUGIN_DELIVER fragments and attaches the package
    /// circuit-scoped once complete. Failures answer PLUGIN_ERR; they never
    /// kill the circuit.
    pub fn deliver_plugin(&mut self, serial: CircuitKey, payload: &RelayPayload, now_ms: u64, out: &mut Vec<Action>) {
        let c = self.circuits.get_mut(&serial).expect("circuit");
        let body = payload.body();
        let (total, buf) = match c.delivery.take() {
            Some((total, mut buf)) => {
                buf.extend_from_slice(body);
                (total, buf)
            }
            None => {
                if body.len() < 2 {
                    return self.reply_err(serial, 1, "missing length prefix", now_ms, out);
                }
                let total = usize::from(u16::from_le_bytes([body[0], body[1]]));
                if total == 0 {
                    return self.reply_err(serial, 1, "empty package", now_ms, out);
                }
                (total, body[2..].to_vec())
            }
        };
        if buf.len() < total {
            c.delivery = Some((total, buf));
            return;
        }
        if buf.len() > total {
            return self.reply_err(serial, 1, "fragments exceed declared length", now_ms, out);
        }

        let view = c.view();
        let pending = c.timers.len();
        let env = &mut self.env;
        let mut ctx = HostContext::new(now_ms, [0; SCRATCH_LEN], &mut env.rng);
        ctx.circuit = Some(view);
        ctx.emit_direction = Some(Direction::Backward);
        ctx.emit_budget = env.policy.emit_budget;
        ctx.timer_slots = env.policy.max_timers.saturating_sub(pending);
        let (policy, gas) = (env.policy.max_capabilities, env.policy.gas_per_event);
        let result = env.registry.attach_bytes(&buf, &env.trust, Scope::Circuit(serial), policy, gas, &mut ctx);
        let fx = ctx.into_effects();
        match result {
            Ok(attached) => {
                let att = self.env.registry.get(attached.id).expect("attached");
                let name = att.name().to_string();
                out.push(Action::record(
                    "plugin_attach",
                    json!({"plugin": name, "scope": "circuit", "circ_id": view.circ_id, "features": features(att)}),
                ));
                self.commit(Some(serial), attached.id, fx, now_ms, out);
                let micros = u32::try_from(attached.latency.as_micros()).unwrap_or(u32::MAX).max(1);
                let mut data = micros.to_le_bytes().to_vec();
                data.extend_from_slice(name.as_bytes());
                let ack = RelayPayload::new(relay_cmd::PLUGIN_ACK, 0, &data).expect("fits");
                self.send_backward(serial, ack, now_ms, out);
            }
            Err(e) => self.reply_err(serial, e.code(), &e.to_string(), now_ms, out),
        }
    }

    fn reply_err(&mut self, serial: CircuitKey, code: u8, msg: &str, now_ms: u64, out: &mut Vec<Action>) {
        let circ_id = self.circuits[&serial].prev.1;
        out.push(Action::record(
            "plugin_err",
            json!({"circ_id": circ_id, "code": code, "name": error_code_name(code), "error": msg}),
        ));
        let mut data = vec![code];
        let msg = msg.as_bytes();
        data.extend_from_slice(&msg[..msg.len().min(RELAY_DATA_LEN - 1)]);
        let err = RelayPayload::new(relay_cmd::PLUGIN_ERR, 0, &data).expect("fits");
        self.send_backward(serial, err, now_ms, out);
    }

    /// Originates a payload at this hop toward the client.
    fn send_backward(&mut self, serial: CircuitKey, mut payload: RelayPayload, now_ms: u64, out: &mut Vec<Action>) {
        let provider = Arc::clone(&self.provider);
        let c = self.circuits.get_mut(&serial).expect("circuit");
        stamp_digest(&*provider, &mut payload, &mut c.keys, Direction::Backward);
        let mut buf = payload.encode();
        if onion_unwrap_layer(&*provider, &mut buf, &mut c.keys, Direction::Backward).is_err() {
            return self.kill_circuit(serial, KillReason::CounterOverflow, now_ms, out);
        }
        let (peer, id) = c.prev;
        out.push(Action::Send { to: peer, cell: LinkCell::new(id, link_cmd::RELAY, buf) });
    }

    fn scratch_for(&self, serial: Option<CircuitKey>, id: AttachmentId) -> [u8; SCRATCH_LEN] {
        let att = self.env.registry.get(id).expect("attachment");
        match (att.scope, serial) {
            (Scope::Global, Some(s)) => {
                self.circuits.get(&s).and_then(|c| c.scratch.get(&id)).copied().unwrap_or(att.scratch)
            }
            _ => att.scratch,
        }
    }

    /// Runs one event and commits its effects. A trap leaves no effects.
    #[allow(clippy::too_many_arguments)]
    fn fire(
        &mut self,
        serial: Option<CircuitKey>,
        id: AttachmentId,
        event: EventKind,
        args: &[u64],
        trigger: Option<&RelayPayload>,
        now_ms: u64,
        out: &mut Vec<Action>,
    ) -> Result<(), RunError> {
        let circuit = serial.and_then(|s| self.circuits.get(&s));
        let call = EventCall {
            now_ms,
            circuit: circuit.map(CircuitEntry::view),
            scratch: self.scratch_for(serial, id),
            trigger,
            emit_direction: circuit.map(|_| Direction::Backward),
            timer_slots: circuit.map_or(0, |c| self.env.policy.max_timers.saturating_sub(c.timers.len())),
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
                    json!({"plugin": name, "event": event.name(), "error": e.to_string(), "circ_id": serial.and_then(|s| self.circuits.get(&s)).map(|c| c.prev.1)}),
                ));
                Err(e)
            }
        }
    }

    fn commit(
        &mut self,
        serial: Option<CircuitKey>,
        id: AttachmentId,
        fx: Effects,
        now_ms: u64,
        out: &mut Vec<Action>,
    ) {
        let Some(att) = self.env.registry.get_mut(id) else { return };
        let name = att.name().to_string();
        let circ_id = serial.and_then(|s| self.circuits.get(&s)).map(|c| c.prev.1);
        for (level, message) in fx.logs {
            out.push(Action::record(
                "plugin_log",
                json!({"plugin": name, "circ_id": circ_id, "level": level, "message": message}),
            ));
        }
        if let Some(s) = fx.scratch {
            match (att.scope, serial) {
                (Scope::Global, Some(serial)) => {
                    if let Some(c) = self.circuits.get_mut(&serial) {
                        c.scratch.insert(id, s);
                    }
                }
                _ => att.scratch = s,
            }
        }
        let Some(serial) = serial else { return };
        for (fire_at, tag) in fx.timers {
            let seq = self.timer_seq;
            self.timer_seq += 1;
            if let Some(c) = self.circuits.get_mut(&serial) {
                c.timers.push(Timer { fire_at, seq, attachment: id, tag });
                out.push(Action::Wakeup { at_ms: fire_at });
            }
        }
        for emit in fx.emits {
            if !self.circuits.contains_key(&serial) {
                break;
            }
            out.push(Action::record(
                "plugin_emit",
                json!({"plugin": name, "circ_id": circ_id, "relay_cmd": emit.relay_cmd, "len": emit.data.len()}),
            ));
            let payload = RelayPayload::new(emit.relay_cmd, 0, &emit.data).expect("length checked by host");
            self.send_backward(serial, payload, now_ms, out);
        }
    }

    /// Fires every timer due at or before `now_ms`, earliest first.
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
            let circ_id = c.prev.1;
            let Some(name) = self.env.registry.get(timer.attachment).map(|a| a.name().to_string()) else { continue };
            out.push(Action::record("timer_fire", json!({"plugin": name, "circ_id": circ_id, "tag": timer.tag})));
            if let Err(e) =
                self.fire(Some(serial), timer.attachment, EventKind::OnTimer, &[timer.tag], None, now_ms, &mut out)
            {
                let reason = KillReason::from_run_error(EventKind::OnTimer, None, &e);
                self.kill_circuit(serial, reason, now_ms, &mut out);
            }
        }
        out
    }

    /// Runs `on_circuit_teardown` for the circuit's own attachments, then
    /// drops them and the circuit.
    fn teardown(&mut self, serial: CircuitKey, now_ms: u64, out: &mut Vec<Action>) {
        for id in self.env.registry.circuit_attachments(serial) {
            let name = self.env.registry.get(id).map(|a| a.name().to_string()).unwrap_or_default();
            let call = EventCall {
                now_ms,
                circuit: self.circuits.get(&serial).map(CircuitEntry::view),
                scratch: self.scratch_for(Some(serial), id),
                trigger: None,
                emit_direction: None,
                timer_slots: 0,
            };
            match self.env.run(id, EventKind::OnCircuitTeardown, &[], call) {
                Ok(Some((_, fx))) => {
                    for (level, message) in fx.logs {
                        out.push(Action::record(
                            "plugin_log",
                            json!({"plugin": name, "circ_id": self.circuits[&serial].prev.1, "level": level, "message": message}),
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
            out.push(Action::record(
                "plugin_detach",
                json!({"plugin": att.name(), "circ_id": self.circuits[&serial].prev.1}),
            ));
        }
        if let Some(c) = self.circuits.remove(&serial) {
            self.by_link.remove(&c.prev);
            if let Some(n) = c.next {
                self.by_link.remove(&n);
            }
        }
    }

    /// Destroys the circuit in both directions and reports why.
    pub fn kill_circuit(&mut self, serial: CircuitKey, reason: KillReason, now_ms: u64, out: &mut Vec<Action>) {
        let Some(c) = self.circuits.get(&serial) else { return };
        let (prev, next) = (c.prev, c.next);
        self.teardown(serial, now_ms, out);
        out.push(Action::Send { to: prev.0, cell: destroy_cell(prev.1) });
        if let Some((peer, id)) = next {
            out.push(Action::Send { to: peer, cell: destroy_cell(id) });
        }
        let report = KillReport::new(now_ms, self.id, prev.1, &reason);
        out.push(Action::record("kill_report", serde_json::to_value(report).expect("report serializes")));
    }
}

pub fn destroy_cell(circ_id: u32) -> LinkCell {
    LinkCell::new(circ_id, link_cmd::DESTROY, [0; PAYLOAD_LEN])
}

fn features(att: &crate::manager::Attachment) -> Vec<u8> {
    att.package.header.feature_ids.iter().map(|f| f.get()).collect()
}

fn drop_record(reason: &str, from: NodeId, circ_id: u32, command: Option<u8>) -> Action {
    Action::record("drop", json!({"reason": reason, "from": from.hex(), "circ_id": circ_id, "command": command}))
}
