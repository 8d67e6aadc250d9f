//! Shared helpers: random verifier-accepted programs and the golden checks.

#![allow(dead_code)]

pub mod golden;

use fan_core::abi::HOST_TABLE_SIZE;
use fan_core::vm::{Instruction, OpClass, Opcode, Program};
use rand::seq::SliceRandom;
use rand::Rng;

/// Immediates cluster around small pointers and the arena edge so that
/// memory and host-call paths see both valid and invalid addresses.
fn imm(rng: &mut impl Rng, arena: u32) -> i32 {
    match rng.gen_range(0..10) {
        0..=3 => rng.gen_range(0..64),
        4..=5 => arena as i32 + rng.gen_range(-24..24),
        6 => rng.gen_range(-8..8),
        _ => rng.gen(),
    }
}

fn offset(rng: &mut impl Rng) -> i16 {
    match rng.gen_range(0..10) {
        0..=6 => rng.gen_range(-16..16),
        _ => rng.gen(),
    }
}

fn reg(rng: &mut impl Rng) -> u8 {
    rng.gen_range(0..=10)
}

fn writable(rng: &mut impl Rng) -> u8 {
    rng.gen_range(0..10)
}

fn jump_offset(rng: &mut impl Rng, pc: usize, n: usize) -> i16 {
    let target = rng.gen_range(0..=n) as i64;
    (target - pc as i64 - 1) as i16
}

/// One instruction at `pc` of an `n`-instruction program.
pub fn instruction(rng: &mut impl Rng, pc: usize, n: usize, arena: u32) -> Instruction {
    let op = *Opcode::ALL.choose(rng).unwrap();
    let mut i = Instruction::op(op);
    match op.class() {
        OpClass::Exit => {}
        OpClass::Call => i.imm = rng.gen_range(0..HOST_TABLE_SIZE as i32),
        OpClass::Ja => i.offset = jump_offset(rng, pc, n),
        OpClass::AluImm => {
            i.dst = writable(rng);
            i.imm = imm(rng, arena);
        }
        OpClass::AluReg => {
            i.dst = writable(rng);
            i.src = reg(rng);
        }
        OpClass::Neg => i.dst = writable(rng),
        OpClass::Load => {
            i.dst = writable(rng);
            i.src = reg(rng);
            i.offset = offset(rng);
        }
        OpClass::Store => {
            i.dst = reg(rng);
            i.src = reg(rng);
            i.offset = offset(rng);
        }
        OpClass::StoreImm => {
            i.dst = reg(rng);
            i.offset = offset(rng);
            i.imm = rng.gen();
        }
        OpClass::JmpImm => {
            i.dst = reg(rng);
            i.imm = imm(rng, arena);
            i.offset = jump_offset(rng, pc, n);
        }
        OpClass::JmpReg => {
            i.dst = reg(rng);
            i.src = reg(rng);
            i.offset = jump_offset(rng, pc, n);
        }
    }
    // Occasionally leave junk in a field the opcode ignores.
    if rng.gen_ratio(1, 20) {
        match op.class() {
            OpClass::Exit | OpClass::Neg => i.imm = rng.gen(),
            OpClass::AluImm => i.src = reg(rng),
            OpClass::AluReg | OpClass::Load | OpClass::Store | OpClass::JmpReg => i.imm = rng.gen_range(1..100),
            _ => {}
        }
    }
    i
}

pub fn program(rng: &mut impl Rng, arena: u32) -> Program {
    let n = rng.gen_range(1..=64);
    let mut insns: Vec<Instruction> = (0..n - 1).map(|pc| instruction(rng, pc, n, arena)).collect();
    let last = if rng.gen_bool(0.5) {
        Instruction::op(Opcode::Exit)
    } else {
        let mut ja = Instruction::op(Opcode::Ja);
        ja.offset = jump_offset(rng, n - 1, n);
        ja
    };
    insns.push(last);
    Program::new(insns).unwrap()
}
