//! Gas-metered interpreter and the host call boundary.

use std::cell::RefCell;
use std::fmt;
use std::sync::Arc;

use thiserror::Error;

use super::isa::{Instruction, Opcode, NUM_REGS, R10};
use super::verify::VerifiedProgram;

pub const MIN_MEMORY: usize = 4 * 1024;
pub const MAX_MEMORY: usize = 1024 * 1024;
pub const DEFAULT_GAS: u64 = 100_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum TrapKind {
    MemoryOutOfBounds,
    DivisionByZero,
    GasExhausted,
    InvalidHostCall,
    CapabilityDenied,
    WriteToR10,
    HostError(i64),
}

impl fmt::Display for TrapKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TrapKind::HostError(code) => write!(f, "HostError({code})"),
            other => write!(f, "{other:?}"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
#[error("{kind} at pc {pc}")]
pub struct Trap {
    pub kind: TrapKind,
    pub pc: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum RunError {
    #[error("trap: {0}")]
    Trap(#[from] Trap),
    #[error("entry pc {0} out of range")]
    EntryOutOfRange(usize),
    #[error("at most 5 arguments, got {0}")]
    TooManyArgs(usize),
}

impl RunError {
    pub fn trap(&self) -> Option<Trap> {
        match self {
            RunError::Trap(t) => Some(*t),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum InstantiateError {
    #[error("memory size {0} outside {MIN_MEMORY}..={MAX_MEMORY}")]
    MemorySize(usize),
    #[error("program verified against {verified} host functions, table has {actual}")]
    HostTableMismatch { verified: usize, actual: usize },
}

/// Faults a host function can raise.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HostFault {
    MemoryOutOfBounds,
    InvalidCall,
    Error(i64),
}

impl From<MemoryFault> for HostFault {
    fn from(_: MemoryFault) -> HostFault {
        HostFault::MemoryOutOfBounds
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
#[error("access of {len} bytes at {addr:#x} outside arena")]
pub struct MemoryFault {
    pub addr: u64,
    pub len: usize,
}

/// One attempted arena access, recorded before the bounds check.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Access {
    pub addr: u64,
    pub len: usize,
    pub write: bool,
    /// Whether the access was let through.
    pub allowed: bool,
}

/// Linear guest memory. All guest-visible reads and writes go through here.
#[derive(Debug, Clone)]
pub struct Arena {
    mem: Vec<u8>,
    probe: RefCell<Option<Vec<Access>>>,
}

impl Arena {
    fn new(size: usize) -> Arena {
        Arena { mem: vec![0u8; size], probe: RefCell::new(None) }
    }

    pub fn size(&self) -> usize {
        self.mem.len()
    }

    fn range(&self, addr: u64, len: usize) -> Result<std::ops::Range<usize>, MemoryFault> {
        let fault = MemoryFault { addr, len };
        let start = usize::try_from(addr).map_err(|_| fault)?;
        let end = start.checked_add(len).ok_or(fault)?;
        if end > self.mem.len() {
            return Err(fault);
        }
        Ok(start..end)
    }

    fn checked(&self, addr: u64, len: usize, write: bool) -> Result<std::ops::Range<usize>, MemoryFault> {
        let r = self.range(addr, len);
        if let Some(log) = self.probe.borrow_mut().as_mut() {
            log.push(Access { addr, len, write, allowed: r.is_ok() });
        }
        r
    }

    pub fn read(&self, addr: u64, len: usize) -> Result<&[u8], MemoryFault> {
        let r = self.checked(addr, len, false)?;
        Ok(&self.mem[r])
    }

    pub fn write(&mut self, addr: u64, data: &[u8]) -> Result<(), MemoryFault> {
        let r = self.checked(addr, data.len(), true)?;
        self.mem[r].copy_from_slice(data);
        Ok(())
    }

    pub fn load(&self, addr: u64, width: usize) -> Result<u64, MemoryFault> {
        let bytes = self.read(addr, width)?;
        let mut buf = [0u8; 8];
        buf[..width].copy_from_slice(bytes);
        Ok(u64::from_le_bytes(buf))
    }

    pub fn store(&mut self, addr: u64, width: usize, value: u64) -> Result<(), MemoryFault> {
        self.write(addr, &value.to_le_bytes()[..width])
    }

    pub fn as_bytes(&self) -> &[u8] {
        &self.mem
    }

    /// Starts recording every access the arena performs.
    pub fn enable_probe(&self) {
        *self.probe.borrow_mut() = Some(Vec::new());
    }

    pub fn take_probe(&self) -> Vec<Access> {
        self.probe.borrow_mut().as_mut().map(std::mem::take).unwrap_or_default()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HostFunction {
    pub name: &'static str,
    pub capability_bit: u8,
    pub gas_cost: u64,
}

/// Static descriptors for host functions, indexed densely from 0.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct HostTable {
    entries: Vec<HostFunction>,
}

impl HostTable {
    pub fn new(entries: Vec<HostFunction>) -> HostTable {
        assert!(entries.iter().all(|e| e.gas_cost >= 1 && e.capability_bit < 32));
        HostTable { entries }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, index: usize) -> Option<&HostFunction> {
        self.entries.get(index)
    }

    pub fn entries(&self) -> &[HostFunction] {
        &self.entries
    }
}

/// Runtime binding of host functions for one event.
pub trait HostHandler {
    fn call(&mut self, index: usize, args: [u64; 5], arena: &mut Arena) -> Result<u64, HostFault>;
}

/// Handler for programs run without any host context.
pub struct NoHost;

impl HostHandler for NoHost {
    fn call(&mut self, _: usize, _: [u64; 5], _: &mut Arena) -> Result<u64, HostFault> {
        Err(HostFault::InvalidCall)
    }
}

#[derive(Debug, Clone, Copy)]
struct Op {
    op: Opcode,
    dst: usize,
    src: usize,
    off: i64,
    imm: u64,
}

impl Op {
    fn from_insn(i: &Instruction) -> Op {
        Op {
            op: i.opcode().expect("verified opcode"),
            dst: usize::from(i.dst),
            src: usize::from(i.src),
            off: i64::from(i.offset),
            imm: i64::from(i.imm) as u64,
        }
    }
}

/// A sandboxed execution instance. The arena persists across runs.
#[derive(Debug)]
pub struct VmInstance {
    regs: [u64; NUM_REGS],
    arena: Arena,
    gas_remaining: u64,
    gas_limit: u64,
    code: Arc<[Op]>,
    host_table: Arc<HostTable>,
    capability_mask: u32,
}

pub fn instantiate(
    program: &VerifiedProgram,
    memory_size: usize,
    host_table: Arc<HostTable>,
    capability_mask: u32,
) -> Result<VmInstance, InstantiateError> {
    if !(MIN_MEMORY..=MAX_MEMORY).contains(&memory_size) {
        return Err(InstantiateError::MemorySize(memory_size));
    }
    if program.host_table_size() > host_table.len() {
        return Err(InstantiateError::HostTableMismatch {
            verified: program.host_table_size(),
            actual: host_table.len(),
        });
    }
    let code: Arc<[Op]> = program.program().instructions().iter().map(Op::from_insn).collect();
    let mut regs = [0u64; NUM_REGS];
    regs[usize::from(R10)] = memory_size as u64;
    Ok(VmInstance {
        regs,
        arena: Arena::new(memory_size),
        gas_remaining: 0,
        gas_limit: 0,
        code,
        host_table,
        capability_mask,
    })
}

impl VmInstance {
    pub fn registers(&self) -> &[u64; NUM_REGS] {
        &self.regs
    }

    pub fn arena(&self) -> &Arena {
        &self.arena
    }

    pub fn arena_mut(&mut self) -> &mut Arena {
        &mut self.arena
    }

    pub fn gas_remaining(&self) -> u64 {
        self.gas_remaining
    }

    /// Gas consumed by the most recent run.
    pub fn gas_used(&self) -> u64 {
        self.gas_limit - self.gas_remaining
    }

    pub fn capability_mask(&self) -> u32 {
        self.capability_mask
    }

    pub fn instruction_count(&self) -> usize {
        self.code.len()
    }

    /// Runs from `entry_pc` with `args` in r1..r5. Returns r0 on `exit`.
    /// Control reaching one past the last instruction behaves like `exit`.
    pub fn run(
        &mut self,
        entry_pc: usize,
        args: &[u64],
        gas_limit: u64,
        host: &mut dyn HostHandler,
    ) -> Result<u64, RunError> {
        if entry_pc >= self.code.len() {
            return Err(RunError::EntryOutOfRange(entry_pc));
        }
        if args.len() > 5 {
            return Err(RunError::TooManyArgs(args.len()));
        }
        self.regs[..10].fill(0);
        self.regs[1..=args.len()].copy_from_slice(args);
        self.regs[usize::from(R10)] = self.arena.size() as u64;
        self.gas_limit = gas_limit;
        self.gas_remaining = gas_limit;
        self.execute(entry_pc, host).map_err(RunError::Trap)
    }

    fn execute(&mut self, mut pc: usize, host: &mut dyn HostHandler) -> Result<u64, Trap> {
        let code = Arc::clone(&self.code);
        let n = code.len();
        let trap = |kind, pc| Trap { kind, pc };
        loop {
            if pc == n {
                return Ok(self.regs[0]);
            }
            if self.gas_remaining == 0 {
                return Err(trap(TrapKind::GasExhausted, pc));
            }
            self.gas_remaining -= 1;
            let i = code[pc];
            let mut next = pc + 1;
            let dst = self.regs[i.dst];
            let src = self.regs[i.src];
            use Opcode::*;
            match i.op {
                Exit => return Ok(self.regs[0]),
                Call => {
                    let r = self.host_call(i.imm as usize, host).map_err(|k| trap(k, pc))?;
                    self.regs[0] = r;
                }
                Ja => next = jump(pc, i.off),

                Movi => self.set(i.dst, i.imm, pc)?,
                Mov => self.set(i.dst, src, pc)?,
                Neg => self.set(i.dst, dst.wrapping_neg(), pc)?,
                Addi | Subi | Muli | Divi | Modi | Andi | Ori | Xori | Lshi | Rshi | Arshi => {
                    let v = alu(i.op, dst, i.imm).ok_or(trap(TrapKind::DivisionByZero, pc))?;
                    self.set(i.dst, v, pc)?;
                }
                Add | Sub | Mul | Div | Mod | And | Or | Xor | Lsh | Rsh | Arsh => {
                    let v = alu(i.op, dst, src).ok_or(trap(TrapKind::DivisionByZero, pc))?;
                    self.set(i.dst, v, pc)?;
                }

                Ld8 | Ld16 | Ld32 | Ld64 => {
                    let width = i.op.access_width().expect("load width");
                    let v = self
                        .arena
                        .load(src.wrapping_add(i.off as u64), width)
                        .map_err(|_| trap(TrapKind::MemoryOutOfBounds, pc))?;
                    self.set(i.dst, v, pc)?;
                }
                St8 | St16 | St32 | St64 | Sti8 | Sti16 | Sti32 | Sti64 => {
                    let width = i.op.access_width().expect("store width");
                    let value = if i.op.class() == super::isa::OpClass::Store { src } else { i.imm };
                    self.arena
                        .store(dst.wrapping_add(i.off as u64), width, value)
                        .map_err(|_| trap(TrapKind::MemoryOutOfBounds, pc))?;
                }

                Jeqi | Jnei | Jlti | Jlei | Jgti | Jgei | Jeq | Jne | Jlt | Jle | Jgt | Jge => {
                    let rhs = if matches!(i.op, Jeqi | Jnei | Jlti | Jlei | Jgti | Jgei) { i.imm } else { src };
                    let taken = match i.op {
                        Jeqi | Jeq => dst == rhs,
                        Jnei | Jne => dst != rhs,
                        Jlti | Jlt => dst < rhs,
                        Jlei | Jle => dst <= rhs,
                        Jgti | Jgt => dst > rhs,
                        _ => dst >= rhs,
                    };
                    if taken {
                        next = jump(pc, i.off);
                    }
                }
            }
            pc = next;
        }
    }

    fn set(&mut self, reg: usize, value: u64, pc: usize) -> Result<(), Trap> {
        if reg == usize::from(R10) {
            return Err(Trap { kind: TrapKind::WriteToR10, pc });
        }
        self.regs[reg] = value;
        Ok(())
    }

    fn host_call(&mut self, index: usize, host: &mut dyn HostHandler) -> Result<u64, TrapKind> {
        let entry = self.host_table.get(index).ok_or(TrapKind::InvalidHostCall)?;
        if self.capability_mask & (1u32 << entry.capability_bit) == 0 {
            return Err(TrapKind::CapabilityDenied);
        }
        if self.gas_remaining < entry.gas_cost {
            self.gas_remaining = 0;
            return Err(TrapKind::GasExhausted);
        }
        self.gas_remaining -= entry.gas_cost;
        let args = [self.regs[1], self.regs[2], self.regs[3], self.regs[4], self.regs[5]];
        host.call(index, args, &mut self.arena).map_err(|f| match f {
            HostFault::MemoryOutOfBounds => TrapKind::MemoryOutOfBounds,
            HostFault::InvalidCall => TrapKind::InvalidHostCall,
            HostFault::Error(code) => TrapKind::HostError(code),
        })
    }
}

fn jump(pc: usize, off: i64) -> usize {
    // Verified targets lie in [0, n].
    (pc as i64 + 1 + off) as usize
}

fn alu(op: Opcode, a: u64, b: u64) -> Option<u64> {
    use Opcode::*;
    Some(match op {
        Add | Addi => a.wrapping_add(b),
        Sub | Subi => a.wrapping_sub(b),
        Mul | Muli => a.wrapping_mul(b),
        Div | Divi => a.checked_div(b)?,
        Mod | Modi => a.checked_rem(b)?,
        And | Andi => a & b,
        Or | Ori => a | b,
        Xor | Xori => a ^ b,
        Lsh | Lshi => a << (b & 63),
        Rsh | Rshi => a >> (b & 63),
        Arsh | Arshi => ((a as i64) >> (b & 63)) as u64,
        _ => unreachable!("not an alu opcode"),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::vm::isa::Program;

    fn ins(op: Opcode, dst: u8, src: u8, off: i16, imm: i32) -> Instruction {
        Instruction::new(op as u8, dst, src, off, imm)
    }

    fn exit() -> Instruction {
        Instruction::op(Opcode::Exit)
    }

    fn vm_with(insns: &[Instruction], table: HostTable, caps: u32) -> VmInstance {
        let n = table.len();
        let p = VerifiedProgram::new(Program::new(insns.to_vec()).unwrap(), n).unwrap();
        instantiate(&p, 4096, Arc::new(table), caps).unwrap()
    }

    fn vm(insns: &[Instruction]) -> VmInstance {
        vm_with(insns, HostTable::default(), 0)
    }

    fn run(vm: &mut VmInstance, gas: u64) -> Result<u64, RunError> {
        vm.run(0, &[], gas, &mut NoHost)
    }

    #[test]
    fn movi_exit() {
        let mut v = vm(&[ins(Opcode::Movi, 0, 0, 0, 42), exit()]);
        assert_eq!(run(&mut v, 10), Ok(42));
        assert_eq!(v.gas_used(), 2);
    }

    #[test]
    fn add_registers() {
        let mut v = vm(&[
            ins(Opcode::Movi, 1, 0, 0, 2),
            ins(Opcode::Movi, 2, 0, 0, 3),
            ins(Opcode::Mov, 0, 1, 0, 0),
            ins(Opcode::Add, 0, 2, 0, 0),
            exit(),
        ]);
        assert_eq!(run(&mut v, 100), Ok(5));
        assert_eq!(v.gas_used(), 5);
    }

    #[test]
    fn one_past_end_store_traps() {
        let mut v = vm(&[ins(Opcode::St64, 10, 0, 0, 0), exit()]);
        v.arena().enable_probe();
        let err = run(&mut v, 10).unwrap_err();
        assert_eq!(err.trap(), Some(Trap { kind: TrapKind::MemoryOutOfBounds, pc: 0 }));
        let size = v.arena().size() as u64;
        assert_eq!(v.arena().take_probe(), vec![Access { addr: size, len: 8, write: true, allowed: false }]);
    }

    #[test]
    fn self_loop_exhausts_exact_gas() {
        let mut v = vm(&[ins(Opcode::Ja, 0, 0, -1, 0)]);
        v.arena().enable_probe();
        let err = run(&mut v, 1000).unwrap_err();
        assert_eq!(err.trap().unwrap().kind, TrapKind::GasExhausted);
        assert_eq!(v.gas_used(), 1000);
    }

    #[test]
    fn division_by_zero() {
        let mut v =
            vm(&[ins(Opcode::Movi, 1, 0, 0, 0), ins(Opcode::Movi, 0, 0, 0, 9), ins(Opcode::Div, 0, 1, 0, 0), exit()]);
        assert_eq!(run(&mut v, 10).unwrap_err().trap().unwrap(), Trap { kind: TrapKind::DivisionByZero, pc: 2 });
        let mut v = vm(&[ins(Opcode::Modi, 0, 0, 0, 0), exit()]);
        assert_eq!(run(&mut v, 10).unwrap_err().trap().unwrap().kind, TrapKind::DivisionByZero);
    }

    #[test]
    fn unsigned_division_and_shift_masking() {
        let mut v = vm(&[ins(Opcode::Movi, 0, 0, 0, -1), ins(Opcode::Divi, 0, 0, 0, 2), exit()]);
        assert_eq!(run(&mut v, 10), Ok(u64::MAX / 2));
        let mut v = vm(&[ins(Opcode::Movi, 0, 0, 0, 1), ins(Opcode::Lshi, 0, 0, 0, 65), exit()]);
        assert_eq!(run(&mut v, 10), Ok(2));
        let mut v = vm(&[ins(Opcode::Movi, 0, 0, 0, -16), ins(Opcode::Arshi, 0, 0, 0, 2), exit()]);
        assert_eq!(run(&mut v, 10), Ok((-4i64) as u64));
        let mut v = vm(&[ins(Opcode::Movi, 0, 0, 0, -16), ins(Opcode::Rshi, 0, 0, 0, 60), exit()]);
        assert_eq!(run(&mut v, 10), Ok(0xf));
    }

    #[test]
    fn unsigned_comparisons() {
        // r0 = -1 is huge when compared unsigned, so jgti 5 is taken.
        let mut v =
            vm(&[ins(Opcode::Movi, 0, 0, 0, -1), ins(Opcode::Jgti, 0, 0, 1, 5), ins(Opcode::Movi, 0, 0, 0, 0), exit()]);
        assert_eq!(run(&mut v, 10), Ok(u64::MAX));
    }

    #[test]
    fn loads_stores_little_endian() {
        let mut v = vm(&[
            ins(Opcode::Movi, 1, 0, 0, 0x0403_0201),
            ins(Opcode::St32, 10, 1, -4, 0),
            ins(Opcode::Ld16, 0, 10, -3, 0),
            exit(),
        ]);
        assert_eq!(run(&mut v, 10), Ok(0x0302));
        assert_eq!(&v.arena().as_bytes()[4092..], &[1, 2, 3, 4]);
    }

    #[test]
    fn arena_persists_and_registers_reset() {
        let mut v =
            vm(&[ins(Opcode::Ld64, 0, 6, 0, 0), ins(Opcode::Addi, 0, 0, 0, 1), ins(Opcode::St64, 6, 0, 0, 0), exit()]);
        assert_eq!(run(&mut v, 10), Ok(1));
        assert_eq!(run(&mut v, 10), Ok(2));
    }

    #[test]
    fn falling_off_end_via_jump_exits() {
        let mut v = vm(&[ins(Opcode::Movi, 0, 0, 0, 7), ins(Opcode::Ja, 0, 0, 0, 0)]);
        assert_eq!(run(&mut v, 10), Ok(7));
    }

    #[test]
    fn memory_size_limits() {
        let p = VerifiedProgram::new(Program::new(vec![exit()]).unwrap(), 0).unwrap();
        let t = Arc::new(HostTable::default());
        assert_eq!(instantiate(&p, 2 * 1024 * 1024, t.clone(), 0).unwrap_err(), InstantiateError::MemorySize(2 << 20));
        assert!(instantiate(&p, 4095, t.clone(), 0).is_err());
        let v = instantiate(&p, 65536, t, 0).unwrap();
        assert_eq!(v.registers()[10], 65536);
        assert!(v.arena().as_bytes().iter().all(|&b| b == 0));
    }

    #[test]
    fn instances_are_isolated() {
        let p = VerifiedProgram::new(Program::new(vec![ins(Opcode::Sti8, 10, 0, -1, 9), exit()]).unwrap(), 0).unwrap();
        let t = Arc::new(HostTable::default());
        let mut a = instantiate(&p, 4096, t.clone(), 0).unwrap();
        let b = instantiate(&p, 4096, t, 0).unwrap();
        a.run(0, &[], 10, &mut NoHost).unwrap();
        assert_eq!(a.arena().as_bytes()[4095], 9);
        assert!(b.arena().as_bytes().iter().all(|&x| x == 0));
    }

    struct Echo;
    impl HostHandler for Echo {
        fn call(&mut self, index: usize, args: [u64; 5], arena: &mut Arena) -> Result<u64, HostFault> {
            match index {
                0 => Ok(args.iter().sum()),
                _ => {
                    arena.read(args[0], 16)?;
                    Ok(0)
                }
            }
        }
    }

    fn table() -> HostTable {
        HostTable::new(vec![
            HostFunction { name: "sum", capability_bit: 0, gas_cost: 10 },
            HostFunction { name: "peek", capability_bit: 3, gas_cost: 1 },
        ])
    }

    #[test]
    fn host_calls_check_caps_and_charge_gas() {
        let prog =
            [ins(Opcode::Movi, 1, 0, 0, 4), ins(Opcode::Movi, 2, 0, 0, 5), ins(Opcode::Call, 0, 0, 0, 0), exit()];
        let mut v = vm_with(&prog, table(), 0b1);
        assert_eq!(v.run(0, &[], 100, &mut Echo), Ok(9));
        assert_eq!(v.gas_used(), 4 + 10);

        let mut v = vm_with(&prog, table(), 0b1000);
        let t = v.run(0, &[], 100, &mut Echo).unwrap_err().trap().unwrap();
        assert_eq!(t, Trap { kind: TrapKind::CapabilityDenied, pc: 2 });

        let mut v = vm_with(&prog, table(), 0b1);
        let t = v.run(0, &[], 12, &mut Echo).unwrap_err().trap().unwrap();
        assert_eq!(t.kind, TrapKind::GasExhausted);
        assert_eq!(v.gas_remaining(), 0);
    }

    #[test]
    fn host_memory_faults_become_traps() {
        let prog = [ins(Opcode::Movi, 1, 0, 0, 4090), ins(Opcode::Call, 0, 0, 0, 1), exit()];
        let mut v = vm_with(&prog, table(), 0b1000);
        let t = v.run(0, &[], 100, &mut Echo).unwrap_err().trap().unwrap();
        assert_eq!(t, Trap { kind: TrapKind::MemoryOutOfBounds, pc: 1 });
    }

    #[test]
    fn args_bind_to_r1_through_r5() {
        let mut v = vm(&[ins(Opcode::Mov, 0, 5, 0, 0), ins(Opcode::Add, 0, 1, 0, 0), exit()]);
        assert_eq!(v.run(0, &[1, 2, 3, 4, 50], 10, &mut NoHost), Ok(51));
        assert_eq!(v.run(0, &[1, 2, 3, 4, 5, 6], 10, &mut NoHost), Err(RunError::TooManyArgs(6)));
        assert_eq!(v.run(7, &[], 10, &mut NoHost), Err(RunError::EntryOutOfRange(7)));
    }
}
