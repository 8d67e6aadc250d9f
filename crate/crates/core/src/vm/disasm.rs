//! Textual rendering of programs.
//!
//! Output reassembles to identical bytes. Instructions the canonical syntax
//! cannot express (unknown opcodes, out-of-range registers, stray bits in
//! unused fields, jumps that leave the program) are emitted as
//! `.insn opcode, dst, src, offset, imm`.

use std::collections::BTreeSet;
use std::fmt::Write;

use super::isa::{Instruction, OpClass, Opcode, Program, NUM_REGS};

pub fn label_name(target: usize) -> String {
    format!("L{target}")
}

fn mem(base: u8, off: i16) -> String {
    match off {
        0 => format!("[r{base}]"),
        o if o > 0 => format!("[r{base}+{o}]"),
        o => format!("[r{base}{o}]"),
    }
}

/// Returns `None` when the instruction needs the raw form.
fn canonical(i: &Instruction, pc: usize, n: usize) -> Option<String> {
    let op = i.opcode()?;
    if usize::from(i.dst) >= NUM_REGS || usize::from(i.src) >= NUM_REGS {
        return None;
    }
    let target = match i.jump_target(pc) {
        Some(t) if t < 0 || t > n as i64 => return None,
        Some(t) => Some(label_name(t as usize)),
        None => None,
    };
    let (d, s, off, imm) = (i.dst, i.src, i.offset, i.imm);
    let m = op.mnemonic();
    let text = match op.class() {
        OpClass::Exit if d == 0 && s == 0 && off == 0 && imm == 0 => m.to_string(),
        OpClass::Call if d == 0 && s == 0 && off == 0 => format!("{m} {imm}"),
        OpClass::Ja if d == 0 && s == 0 && imm == 0 => format!("{m} {}", target?),
        OpClass::AluImm if s == 0 && off == 0 => format!("{m} r{d}, {imm}"),
        OpClass::AluReg if off == 0 && imm == 0 => format!("{m} r{d}, r{s}"),
        OpClass::Neg if s == 0 && off == 0 && imm == 0 => format!("{m} r{d}"),
        OpClass::Load if imm == 0 => format!("{m} r{d}, {}", mem(s, off)),
        OpClass::Store if imm == 0 => format!("{m} {}, r{s}", mem(d, off)),
        OpClass::StoreImm if s == 0 => format!("{m} {}, {imm}", mem(d, off)),
        OpClass::JmpImm if s == 0 => format!("{m} r{d}, {imm}, {}", target?),
        OpClass::JmpReg if imm == 0 => format!("{m} r{d}, r{s}, {}", target?),
        _ => return None,
    };
    Some(text)
}

fn raw(i: &Instruction) -> String {
    format!(".insn {:#04x}, {}, {}, {}, {}", i.opcode, i.dst, i.src, i.offset, i.imm)
}

pub fn disassemble(program: &Program) -> String {
    let insns = program.instructions();
    let n = insns.len();
    let lines: Vec<(String, bool)> = insns
        .iter()
        .enumerate()
        .map(|(pc, i)| match canonical(i, pc, n) {
            Some(text) => (text, true),
            None => (raw(i), false),
        })
        .collect();
    let targets: BTreeSet<usize> = insns
        .iter()
        .enumerate()
        .zip(&lines)
        .filter(|(_, (_, canon))| *canon)
        .filter_map(|((pc, i), _)| i.jump_target(pc))
        .map(|t| t as usize)
        .collect();

    let mut out = String::new();
    for (pc, (text, _)) in lines.iter().enumerate() {
        if targets.contains(&pc) {
            let _ = writeln!(out, "{}:", label_name(pc));
        }
        let _ = writeln!(out, "{text}");
    }
    if targets.contains(&n) {
        let _ = writeln!(out, "{}:", label_name(n));
    }
    out
}

/// Mnemonic-only view used in diagnostics.
pub fn describe(i: &Instruction) -> String {
    match i.opcode() {
        Some(Opcode::Call) => format!("call {}", i.imm),
        Some(op) => op.mnemonic().to_string(),
        None => format!("{:#04x}", i.opcode),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn p(insns: &[Instruction]) -> Program {
        Program::new(insns.to_vec()).unwrap()
    }

    #[test]
    fn movi_exit_text() {
        let text = disassemble(&p(&[Instruction::new(0x1B, 0, 0, 0, 42), Instruction::op(Opcode::Exit)]));
        assert_eq!(text, "movi r0, 42\nexit\n");
    }

    #[test]
    fn labels_for_jumps() {
        let text = disassemble(&p(&[
            Instruction::new(Opcode::Jeqi as u8, 1, 0, 1, 7),
            Instruction::new(Opcode::Ja as u8, 0, 0, -2, 0),
            Instruction::op(Opcode::Exit),
        ]));
        assert_eq!(text, "L0:\njeqi r1, 7, L2\nja L0\nL2:\nexit\n");
    }

    #[test]
    fn memory_operands() {
        let text = disassemble(&p(&[
            Instruction::new(Opcode::Ld32 as u8, 1, 10, -8, 0),
            Instruction::new(Opcode::St8 as u8, 2, 3, 4, 0),
            Instruction::new(Opcode::Sti64 as u8, 4, 0, 0, -1),
            Instruction::op(Opcode::Exit),
        ]));
        assert_eq!(text, "ld32 r1, [r10-8]\nst8 [r2+4], r3\nsti64 [r4], -1\nexit\n");
    }

    #[test]
    fn non_canonical_uses_raw_form() {
        let text = disassemble(&p(&[
            Instruction::new(0xEE, 1, 2, 3, 4),
            Instruction::new(Opcode::Movi as u8, 0, 5, 0, 1),
            Instruction::new(Opcode::Ja as u8, 0, 0, 100, 0),
        ]));
        assert_eq!(text, ".insn 0xee, 1, 2, 3, 4\n.insn 0x1b, 0, 5, 0, 1\n.insn 0x02, 0, 0, 100, 0\n");
    }
}
