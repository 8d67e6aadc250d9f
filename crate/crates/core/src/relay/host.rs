//! Host ABI bindings for one plugin event.
//!
//! Plugins never mutate node state directly. Every host effect (emitted
//! cells, timers, log lines, scratch writes) is buffered in [`Effects`] and
//! the node commits it only if the event finishes without trapping.

use rand_chacha::ChaCha20Rng;
use rand_core::RngCore;

use crate::abi::{field, host_fn, EventKind, ALL_CAPABILITIES, SCRATCH_LEN};
use crate::cell::{relay_cmd, RelayPayload, RELAY_DATA_LEN};
use crate::crypto::Direction;
use crate::manager::{AttachmentId, PluginRegistry, TrustStore};
use crate::vm::{Arena, HostFault, HostHandler, RunError, DEFAULT_GAS};

const FAIL: u64 = u64::MAX; // -1

pub const DEFAULT_EMIT_BUDGET: u32 = 4;
pub const MAX_PENDING_TIMERS: usize = 16;
pub const MAX_LOG_LEN: usize = 1024;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Policy {
    pub max_capabilities: u32,
    pub gas_per_event: u64,
    pub emit_budget: u32,
    pub max_timers: usize,
    /// Echo DATA back to the sender at the recognizing hop.
    pub echo: bool,
}

impl Default for Policy {
    fn default() -> Policy {
        Policy {
            max_capabilities: ALL_CAPABILITIES,
            gas_per_event: DEFAULT_GAS,
            emit_budget: DEFAULT_EMIT_BUDGET,
            max_timers: MAX_PENDING_TIMERS,
            echo: true,
        }
    }
}

/// Circuit state readable through `get_field`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CircuitView {
    pub circ_id: u32,
    pub has_prev: bool,
    pub has_next: bool,
    pub cells_forwarded: u64,
}

impl CircuitView {
    pub fn hop_flags(&self) -> u8 {
        u8::from(self.has_prev) | (u8::from(self.has_next) << 1)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Emit {
    pub relay_cmd: u8,
    pub data: Vec<u8>,
    pub direction: Direction,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Effects {
    pub emits: Vec<Emit>,
    /// (fire_at_ms, tag)
    pub timers: Vec<(u64, u64)>,
    /// (level, message)
    pub logs: Vec<(u64, String)>,
    pub scratch: Option<[u8; SCRATCH_LEN]>,
}

/// Host state for one plugin run.
pub struct HostContext<'a> {
    pub now_ms: u64,
    pub circuit: Option<CircuitView>,
    pub trigger: Option<&'a RelayPayload>,
    /// The only direction `emit_cell` may use; `None` disables emission.
    pub emit_direction: Option<Direction>,
    pub emit_budget: u32,
    pub timer_slots: usize,
    pub rng: &'a mut dyn RngCore,
    scratch: [u8; SCRATCH_LEN],
    scratch_dirty: bool,
    pub effects: Effects,
}

impl<'a> HostContext<'a> {
    pub fn new(now_ms: u64, scratch: [u8; SCRATCH_LEN], rng: &'a mut dyn RngCore) -> HostContext<'a> {
        HostContext {
            now_ms,
            circuit: None,
            trigger: None,
            emit_direction: None,
            emit_budget: DEFAULT_EMIT_BUDGET,
            timer_slots: MAX_PENDING_TIMERS,
            rng,
            scratch,
            scratch_dirty: false,
            effects: Effects::default(),
        }
    }

    pub fn into_effects(mut self) -> Effects {
        if self.scratch_dirty {
            self.effects.scratch = Some(self.scratch);
        }
        self.effects
    }

    fn field_bytes(&self, id: u64) -> Option<Vec<u8>> {
        let c = self.circuit?;
        Some(match id {
            field::CIRCUIT_ID => c.circ_id.to_le_bytes().to_vec(),
            field::HOP_FLAGS => vec![c.hop_flags()],
            field::CELLS_FORWARDED => c.cells_forwarded.to_le_bytes().to_vec(),
            field::SCRATCH => self.scratch.to_vec(),
            _ => return None,
        })
    }

    fn log(&mut self, level: u64, off: u64, len: u64, arena: &mut Arena) -> Result<u64, HostFault> {
        let bytes = arena.read(off, to_len(len)?)?;
        let mut msg = String::from_utf8_lossy(bytes).into_owned();
        if msg.len() > MAX_LOG_LEN {
            let mut cut = MAX_LOG_LEN;
            while !msg.is_char_boundary(cut) {
                cut -= 1;
            }
            msg.truncate(cut);
        }
        self.effects.logs.push((level, msg));
        Ok(0)
    }

    fn get_field(&mut self, id: u64, off: u64, cap: u64, arena: &mut Arena) -> Result<u64, HostFault> {
        let Some(bytes) = self.field_bytes(id) else { return Ok(FAIL) };
        let n = bytes.len().min(to_len(cap)?);
        arena.write(off, &bytes[..n])?;
        Ok(n as u64)
    }

    fn set_field(&mut self, id: u64, off: u64, len: u64, arena: &mut Arena) -> Result<u64, HostFault> {
        if id != field::SCRATCH || self.circuit.is_none() {
            return Ok(FAIL);
        }
        let n = to_len(len)?.min(SCRATCH_LEN);
        let src = arena.read(off, n)?;
        self.scratch[..n].copy_from_slice(src);
        self.scratch_dirty = true;
        Ok(n as u64)
    }

    fn read_cell(&mut self, off: u64, cap: u64, arena: &mut Arena) -> Result<u64, HostFault> {
        let Some(cell) = self.trigger else { return Ok(FAIL) };
        let body = cell.body();
        let n = body.len().min(to_len(cap)?);
        arena.write(off, &body[..n])?;
        Ok(n as u64)
    }

    fn emit_cell(&mut self, cmd: u64, off: u64, len: u64, dir: u64, arena: &mut Arena) -> Result<u64, HostFault> {
        if !(u64::from(relay_cmd::FIRST_EXTENSION)..=255).contains(&cmd) || len > RELAY_DATA_LEN as u64 {
            return Ok(FAIL);
        }
        let data = arena.read(off, len as usize)?.to_vec();
        let Some(direction) = Direction::from_byte(dir) else { return Ok(FAIL) };
        if self.emit_direction != Some(direction) || self.emit_budget == 0 {
            return Ok(FAIL);
        }
        self.emit_budget -= 1;
        self.effects.emits.push(Emit { relay_cmd: cmd as u8, data, direction });
        Ok(0)
    }

    fn set_timer(&mut self, ms: u64, tag: u64) -> Result<u64, HostFault> {
        if self.circuit.is_none() || self.effects.timers.len() >= self.timer_slots {
            return Ok(FAIL);
        }
        self.effects.timers.push((self.now_ms.saturating_add(ms.max(1)), tag));
        Ok(0)
    }

    fn rand_bytes(&mut self, off: u64, len: u64, arena: &mut Arena) -> Result<u64, HostFault> {
        let n = to_len(len)?;
        // Validate before drawing so a fault does not consume the stream.
        arena.read(off, n)?;
        let mut buf = vec![0u8; n];
        self.rng.fill_bytes(&mut buf);
        arena.write(off, &buf)?;
        Ok(n as u64)
    }
}

fn to_len(v: u64) -> Result<usize, HostFault> {
    usize::try_from(v).map_err(|_| HostFault::MemoryOutOfBounds)
}

impl HostHandler for HostContext<'_> {
    fn call(&mut self, index: usize, a: [u64; 5], arena: &mut Arena) -> Result<u64, HostFault> {
        match index {
            host_fn::LOG => self.log(a[0], a[1], a[2], arena),
            host_fn::GET_FIELD => self.get_field(a[0], a[1], a[2], arena),
            host_fn::SET_FIELD => self.set_field(a[0], a[1], a[2], arena),
            host_fn::READ_CELL => self.read_cell(a[0], a[1], arena),
            host_fn::EMIT_CELL => self.emit_cell(a[0], a[1], a[2], a[3], arena),
            host_fn::SET_TIMER => self.set_timer(a[0], a[1]),
            host_fn::RAND_BYTES => self.rand_bytes(a[0], a[1], arena),
            host_fn::NOW_MS => Ok(self.now_ms),
            _ => Err(HostFault::InvalidCall),
        }
    }
}

/// Plugin hosting shared by relays and clients.
pub struct PluginEnv {
    pub registry: PluginRegistry,
    pub trust: TrustStore,
    pub policy: Policy,
    pub rng: ChaCha20Rng,
}

/// Inputs for one event on one attachment.
pub struct EventCall<'a> {
    pub now_ms: u64,
    pub circuit: Option<CircuitView>,
    pub scratch: [u8; SCRATCH_LEN],
    pub trigger: Option<&'a RelayPayload>,
    pub emit_direction: Option<Direction>,
    pub timer_slots: usize,
}

impl PluginEnv {
    pub fn new(trust: TrustStore, policy: Policy, rng: ChaCha20Rng) -> PluginEnv {
        PluginEnv { registry: PluginRegistry::new(), trust, policy, rng }
    }

    /// Runs `event` on attachment `id`. `Ok(None)` if the attachment is gone
    /// or declares no entry for the event.
    pub fn run(
        &mut self,
        id: AttachmentId,
        event: EventKind,
        args: &[u64],
        call: EventCall<'_>,
    ) -> Result<Option<(u64, Effects)>, RunError> {
        let gas = self.policy.gas_per_event;
        let budget = self.policy.emit_budget;
        let Some(att) = self.registry.get_mut(id) else { return Ok(None) };
        let mut ctx = HostContext::new(call.now_ms, call.scratch, &mut self.rng);
        ctx.circuit = call.circuit;
        ctx.trigger = call.trigger;
        ctx.emit_direction = call.emit_direction;
        ctx.emit_budget = budget;
        ctx.timer_slots = call.timer_slots;
        match att.run_event(event, args, gas, &mut ctx)? {
            Some(ret) => Ok(Some((ret, ctx.into_effects()))),
            None => Ok(None),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::abi::{host_table, mask_of};
    use crate::toolkit::assemble;
    use crate::vm::{instantiate, Program, TrapKind, VerifiedProgram, VmInstance};
    use rand_core::SeedableRng;

    fn vm(src: &str, caps: u32) -> VmInstance {
        let p = VerifiedProgram::new(Program::parse(&assemble(src).unwrap()).unwrap(), 8).unwrap();
        instantiate(&p, 4096, host_table(), caps).unwrap()
    }

    fn circuit(id: u32) -> CircuitView {
        CircuitView { circ_id: id, has_prev: true, has_next: false, cells_forwarded: 9 }
    }

    #[test]
    fn get_field_circuit_id() {
        let mut rng = ChaCha20Rng::seed_from_u64(0);
        let mut ctx = HostContext::new(0, [0; SCRATCH_LEN], &mut rng);
        ctx.circuit = Some(circuit(7));
        let mut v = vm("movi r1, 0\nmovi r2, 100\nmovi r3, 8\ncall get_field\nexit", 0xff);
        assert_eq!(v.run(0, &[], 1000, &mut ctx).unwrap(), 4);
        assert_eq!(&v.arena().as_bytes()[100..105], &[7, 0, 0, 0, 0]);
    }

    #[test]
    fn read_only_fields() {
        let mut rng = ChaCha20Rng::seed_from_u64(0);
        let mut ctx = HostContext::new(0, [0; SCRATCH_LEN], &mut rng);
        ctx.circuit = Some(circuit(7));
        let mut v = vm("movi r1, 2\nmovi r2, 0\nmovi r3, 8\ncall set_field\nexit", 0xff);
        assert_eq!(v.run(0, &[], 1000, &mut ctx).unwrap(), FAIL);
    }

    #[test]
    fn emit_rules() {
        let mut rng = ChaCha20Rng::seed_from_u64(0);
        let mut ctx = HostContext::new(0, [0; SCRATCH_LEN], &mut rng);
        ctx.circuit = Some(circuit(1));
        ctx.emit_direction = Some(Direction::Backward);
        let core = "movi r1, 5\nmovi r2, 0\nmovi r3, 4\nmovi r4, 0\ncall emit_cell\nexit";
        assert_eq!(vm(core, 0xff).run(0, &[], 1000, &mut ctx).unwrap(), FAIL);
        let ext = "movi r1, 40\nmovi r2, 0\nmovi r3, 4\nmovi r4, 0\ncall emit_cell\nexit";
        let mut v = vm(ext, 0xff);
        for _ in 0..4 {
            assert_eq!(v.run(0, &[], 1000, &mut ctx).unwrap(), 0);
        }
        assert_eq!(v.run(0, &[], 1000, &mut ctx).unwrap(), FAIL, "budget of 4");
        let fwd = "movi r1, 40\nmovi r2, 0\nmovi r3, 4\nmovi r4, 1\ncall emit_cell\nexit";
        ctx.emit_budget = 4;
        assert_eq!(vm(fwd, 0xff).run(0, &[], 1000, &mut ctx).unwrap(), FAIL, "wrong direction");
        assert_eq!(ctx.into_effects().emits.len(), 4);
    }

    #[test]
    fn out_of_arena_traps() {
        let mut rng = ChaCha20Rng::seed_from_u64(0);
        let mut ctx = HostContext::new(0, [0; SCRATCH_LEN], &mut rng);
        ctx.circuit = Some(circuit(1));
        let src = "movi r1, 0\nmovi r2, 4094\nmovi r3, 8\ncall get_field\nexit";
        let e = vm(src, 0xff).run(0, &[], 1000, &mut ctx).unwrap_err();
        assert_eq!(e.trap().unwrap().kind, TrapKind::MemoryOutOfBounds);
    }

    #[test]
    fn every_function_is_capability_gated() {
        for (index, &(name, bit, _)) in crate::abi::HOST_FUNCTIONS.iter().enumerate() {
            let mut rng = ChaCha20Rng::seed_from_u64(0);
            let mut ctx = HostContext::new(0, [0; SCRATCH_LEN], &mut rng);
            let src = format!("call {index}\nexit");
            let without = ALL_CAPABILITIES & !mask_of(&[bit]);
            let e = vm(&src, without).run(0, &[], 1000, &mut ctx).unwrap_err();
            assert_eq!(e.trap().unwrap().kind, TrapKind::CapabilityDenied, "{name}");
            assert!(ctx.into_effects() == Effects::default());
        }
    }

    #[test]
    fn scratch_and_timers_buffered() {
        let mut rng = ChaCha20Rng::seed_from_u64(0);
        let mut ctx = HostContext::new(100, [0; SCRATCH_LEN], &mut rng);
        ctx.circuit = Some(circuit(1));
        let src = "sti8 [r10-1], 9\nmovi r1, 3\nmov r2, r10\nsubi r2, 1\nmovi r3, 1\ncall set_field\n\
                   movi r1, 0\nmovi r2, 5\ncall set_timer\nexit";
        let mut v = vm(src, 0xff);
        v.run(0, &[], 1000, &mut ctx).unwrap();
        let fx = ctx.into_effects();
        assert_eq!(fx.scratch.unwrap()[0], 9);
        assert_eq!(fx.timers, vec![(101, 5)]);
    }
}
