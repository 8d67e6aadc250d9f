//! Static admission checks.
//!
//! The verifier does not reason about memory safety; every arena access is
//! bounds-checked at runtime instead.

use std::fmt;

use super::isa::{Instruction, OpClass, Program, NUM_REGS, R10};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ViolationKind {
    UnknownOpcode(u8),
    RegisterOutOfRange(u8),
    WriteToR10,
    JumpOutOfBounds(i64),
    InvalidHostIndex(i32),
    BadFinalInstruction,
}

impl fmt::Display for ViolationKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ViolationKind::UnknownOpcode(op) => write!(f, "unknown opcode {op:#04x}"),
            ViolationKind::RegisterOutOfRange(r) => write!(f, "register r{r} out of range"),
            ViolationKind::WriteToR10 => f.write_str("write to r10"),
            ViolationKind::JumpOutOfBounds(t) => write!(f, "jump target out of bounds ({t})"),
            ViolationKind::InvalidHostIndex(i) => write!(f, "invalid host index {i}"),
            ViolationKind::BadFinalInstruction => f.write_str("final instruction must be exit or ja"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Violation {
    pub index: usize,
    pub kind: ViolationKind,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "insn {}: {}", self.index, self.kind)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct VerifierReport {
    pub violations: Vec<Violation>,
}

impl VerifierReport {
    pub fn is_ok(&self) -> bool {
        self.violations.is_empty()
    }
}

impl fmt::Display for VerifierReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.violations.is_empty() {
            return f.write_str("ok");
        }
        for (i, v) in self.violations.iter().enumerate() {
            if i > 0 {
                f.write_str("; ")?;
            }
            write!(f, "{v}")?;
        }
        Ok(())
    }
}

impl std::error::Error for VerifierReport {}

fn check(index: usize, insn: &Instruction, n: usize, host_table_size: usize, out: &mut Vec<Violation>) {
    let mut push = |kind| out.push(Violation { index, kind });
    let Some(op) = insn.opcode() else {
        push(ViolationKind::UnknownOpcode(insn.opcode));
        return;
    };
    for reg in [insn.dst, insn.src] {
        if usize::from(reg) >= NUM_REGS {
            push(ViolationKind::RegisterOutOfRange(reg));
        }
    }
    if op.writes_dst() && insn.dst == R10 {
        push(ViolationKind::WriteToR10);
    }
    if let Some(target) = insn.jump_target(index) {
        if target < 0 || target > n as i64 {
            push(ViolationKind::JumpOutOfBounds(target));
        }
    }
    if op.class() == OpClass::Call && (insn.imm < 0 || insn.imm as usize >= host_table_size) {
        push(ViolationKind::InvalidHostIndex(insn.imm));
    }
}

/// Collects every violation; never fails fast.
pub fn verify(program: &Program, host_table_size: usize) -> VerifierReport {
    let insns = program.instructions();
    let n = insns.len();
    let mut violations = Vec::new();
    for (i, insn) in insns.iter().enumerate() {
        check(i, insn, n, host_table_size, &mut violations);
    }
    if let Some(last) = insns.last() {
        let ok = matches!(last.opcode().map(|o| o.class()), Some(OpClass::Exit | OpClass::Ja));
        if !ok {
            violations.push(Violation { index: n - 1, kind: ViolationKind::BadFinalInstruction });
        }
    }
    VerifierReport { violations }
}

/// A program that passed [`verify`] against a host table of a given size.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VerifiedProgram {
    program: Program,
    host_table_size: usize,
}

impl VerifiedProgram {
    pub fn new(program: Program, host_table_size: usize) -> Result<VerifiedProgram, VerifierReport> {
        let report = verify(&program, host_table_size);
        if report.is_ok() {
            Ok(VerifiedProgram { program, host_table_size })
        } else {
            Err(report)
        }
    }

    pub fn program(&self) -> &Program {
        &self.program
    }

    pub fn host_table_size(&self) -> usize {
        self.host_table_size
    }

    pub fn len(&self) -> usize {
        self.program.len()
    }

    pub fn is_empty(&self) -> bool {
        self.program.is_empty()
    }
}
