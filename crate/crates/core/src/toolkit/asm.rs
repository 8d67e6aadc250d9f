//! Two-pass assembler for `.fasm` sources.
//!
//! ```text
//! ; comment
//! start:  movi r0, 0x2a
//!         jeqi r1, 32, done      ; label operand
//!         ld64 r2, [r10-8]
//!         st32 [r1+4], r2
//!         sti8 [r1], -1
//!         call emit_cell         ; host function by name or index
//! done:   exit
//!         .insn 0xee, 0, 0, 0, 0 ; raw encoding
//! ```

use std::collections::BTreeMap;

use thiserror::Error;

use crate::abi::host_function_index;
use crate::vm::isa::{Instruction, OpClass, Opcode, MAX_INSNS, NUM_REGS};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum AsmErrorKind {
    #[error("unknown mnemonic {0:?}")]
    UnknownMnemonic(String),
    #[error("bad register {0:?}")]
    BadRegister(String),
    #[error("duplicate label {0:?}")]
    DuplicateLabel(String),
    #[error("undefined label {0:?}")]
    UndefinedLabel(String),
    #[error("jump offset {0} out of range")]
    OffsetOverflow(i64),
    #[error("bad immediate {0:?}")]
    BadImmediate(String),
    #[error("bad operand {0:?}")]
    BadOperand(String),
    #[error("{mnemonic} takes {expected} operand(s), got {got}")]
    OperandCount { mnemonic: String, expected: usize, got: usize },
    #[error("bad label name {0:?}")]
    BadLabel(String),
    #[error("program has no instructions")]
    Empty,
    #[error("program exceeds {MAX_INSNS} instructions")]
    TooLong,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("line {line}: {kind}")]
pub struct AsmError {
    pub line: usize,
    pub kind: AsmErrorKind,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Assembled {
    pub instructions: Vec<Instruction>,
    /// Label name to instruction index.
    pub labels: BTreeMap<String, usize>,
}

impl Assembled {
    pub fn to_bytes(&self) -> Vec<u8> {
        self.instructions.iter().flat_map(|i| i.encode()).collect()
    }
}

struct Line<'a> {
    number: usize,
    mnemonic: &'a str,
    operands: Vec<&'a str>,
}

fn is_ident(s: &str) -> bool {
    let mut chars = s.chars();
    matches!(chars.next(), Some(c) if c.is_ascii_alphabetic() || c == '_' || c == '.')
        && chars.all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '.')
}

fn split_operands(rest: &str) -> Vec<&str> {
    let rest = rest.trim();
    if rest.is_empty() {
        return Vec::new();
    }
    rest.split(',').map(str::trim).collect()
}

fn parse_int(s: &str) -> Option<i64> {
    let s = s.trim();
    let (neg, body) = match s.strip_prefix('-') {
        Some(b) => (true, b),
        None => (false, s.strip_prefix('+').unwrap_or(s)),
    };
    let v = if let Some(hex) = body.strip_prefix("0x").or_else(|| body.strip_prefix("0X")) {
        i64::from_str_radix(hex, 16).ok()?
    } else {
        if body.is_empty() || !body.bytes().all(|b| b.is_ascii_digit()) {
            return None;
        }
        body.parse::<i64>().ok()?
    };
    Some(if neg { -v } else { v })
}

fn err(line: usize, kind: AsmErrorKind) -> AsmError {
    AsmError { line, kind }
}

fn imm32(line: usize, s: &str) -> Result<i32, AsmError> {
    match parse_int(s) {
        Some(v) if (i64::from(i32::MIN)..=i64::from(i32::MAX)).contains(&v) => Ok(v as i32),
        // Accept unsigned 32-bit spellings such as 0xffffffff.
        Some(v) if (0..=i64::from(u32::MAX)).contains(&v) => Ok(v as u32 as i32),
        _ => Err(err(line, AsmErrorKind::BadImmediate(s.to_string()))),
    }
}

fn reg(line: usize, s: &str) -> Result<u8, AsmError> {
    let bad = || err(line, AsmErrorKind::BadRegister(s.to_string()));
    let n = s.strip_prefix('r').ok_or_else(bad)?;
    if n.is_empty() || !n.bytes().all(|b| b.is_ascii_digit()) || (n.len() > 1 && n.starts_with('0')) {
        return Err(bad());
    }
    let v: usize = n.parse().map_err(|_| bad())?;
    if v >= NUM_REGS {
        return Err(bad());
    }
    Ok(v as u8)
}

fn is_register_name(s: &str) -> bool {
    s.len() >= 2 && s.starts_with('r') && s[1..].bytes().all(|b| b.is_ascii_digit())
}

/// `[rN]`, `[rN+off]`, `[rN-off]`.
fn mem(line: usize, s: &str) -> Result<(u8, i16), AsmError> {
    let bad = || err(line, AsmErrorKind::BadOperand(s.to_string()));
    let inner = s.strip_prefix('[').and_then(|x| x.strip_suffix(']')).ok_or_else(bad)?.trim();
    let split = inner.find(['+', '-']);
    let (base, off) = match split {
        Some(i) => (inner[..i].trim(), inner[i..].replace(' ', "")),
        None => (inner, String::new()),
    };
    let base = reg(line, base)?;
    if off.is_empty() {
        return Ok((base, 0));
    }
    let v = parse_int(&off).ok_or_else(bad)?;
    let v = i16::try_from(v).map_err(|_| err(line, AsmErrorKind::OffsetOverflow(v)))?;
    Ok((base, v))
}

fn expect(line: &Line<'_>, n: usize) -> Result<(), AsmError> {
    if line.operands.len() != n {
        return Err(err(
            line.number,
            AsmErrorKind::OperandCount { mnemonic: line.mnemonic.to_string(), expected: n, got: line.operands.len() },
        ));
    }
    Ok(())
}

fn jump_offset(line: usize, pc: usize, s: &str, labels: &BTreeMap<String, usize>) -> Result<i16, AsmError> {
    let raw = if let Some(v) = parse_int(s) {
        v
    } else if is_ident(s) {
        let target = *labels.get(s).ok_or_else(|| err(line, AsmErrorKind::UndefinedLabel(s.to_string())))?;
        target as i64 - (pc as i64 + 1)
    } else {
        return Err(err(line, AsmErrorKind::BadOperand(s.to_string())));
    };
    i16::try_from(raw).map_err(|_| err(line, AsmErrorKind::OffsetOverflow(raw)))
}

fn encode(line: &Line<'_>, pc: usize, labels: &BTreeMap<String, usize>) -> Result<Instruction, AsmError> {
    let ln = line.number;
    let ops = &line.operands;
    if line.mnemonic == ".insn" {
        expect(line, 5)?;
        let nibble = |s: &str| match parse_int(s) {
            Some(v) if (0..16).contains(&v) => Ok(v as u8),
            _ => Err(err(ln, AsmErrorKind::BadOperand(s.to_string()))),
        };
        let opcode = match parse_int(ops[0]) {
            Some(v) if (0..=255).contains(&v) => v as u8,
            _ => return Err(err(ln, AsmErrorKind::BadOperand(ops[0].to_string()))),
        };
        let off = parse_int(ops[3])
            .and_then(|v| i16::try_from(v).ok())
            .ok_or_else(|| err(ln, AsmErrorKind::BadOperand(ops[3].to_string())))?;
        return Ok(Instruction::new(opcode, nibble(ops[1])?, nibble(ops[2])?, off, imm32(ln, ops[4])?));
    }
    let op = Opcode::from_mnemonic(line.mnemonic)
        .ok_or_else(|| err(ln, AsmErrorKind::UnknownMnemonic(line.mnemonic.to_string())))?;
    let code = op as u8;
    let insn = match op.class() {
        OpClass::Exit => {
            expect(line, 0)?;
            Instruction::new(code, 0, 0, 0, 0)
        }
        OpClass::Call => {
            expect(line, 1)?;
            let imm = match host_function_index(ops[0]) {
                Some(i) => i as i32,
                None => imm32(ln, ops[0])?,
            };
            Instruction::new(code, 0, 0, 0, imm)
        }
        OpClass::Ja => {
            expect(line, 1)?;
            Instruction::new(code, 0, 0, jump_offset(ln, pc, ops[0], labels)?, 0)
        }
        OpClass::AluImm => {
            expect(line, 2)?;
            Instruction::new(code, reg(ln, ops[0])?, 0, 0, imm32(ln, ops[1])?)
        }
        OpClass::AluReg => {
            expect(line, 2)?;
            Instruction::new(code, reg(ln, ops[0])?, reg(ln, ops[1])?, 0, 0)
        }
        OpClass::Neg => {
            expect(line, 1)?;
            Instruction::new(code, reg(ln, ops[0])?, 0, 0, 0)
        }
        OpClass::Load => {
            expect(line, 2)?;
            let (base, off) = mem(ln, ops[1])?;
            Instruction::new(code, reg(ln, ops[0])?, base, off, 0)
        }
        OpClass::Store => {
            expect(line, 2)?;
            let (base, off) = mem(ln, ops[0])?;
            Instruction::new(code, base, reg(ln, ops[1])?, off, 0)
        }
        OpClass::StoreImm => {
            expect(line, 2)?;
            let (base, off) = mem(ln, ops[0])?;
            Instruction::new(code, base, 0, off, imm32(ln, ops[1])?)
        }
        OpClass::JmpImm => {
            expect(line, 3)?;
            let off = jump_offset(ln, pc, ops[2], labels)?;
            Instruction::new(code, reg(ln, ops[0])?, 0, off, imm32(ln, ops[1])?)
        }
        OpClass::JmpReg => {
            expect(line, 3)?;
            let off = jump_offset(ln, pc, ops[2], labels)?;
            Instruction::new(code, reg(ln, ops[0])?, reg(ln, ops[1])?, off, 0)
        }
    };
    Ok(insn)
}

pub fn assemble_program(source: &str) -> Result<Assembled, AsmError> {
    let mut labels = BTreeMap::new();
    let mut lines = Vec::new();

    // Pass 1: labels and instruction positions.
    for (idx, raw) in source.lines().enumerate() {
        let number = idx + 1;
        let mut text = raw.split(';').next().unwrap_or("").trim();
        while let Some(colon) = text.find(':') {
            let name = text[..colon].trim();
            if !is_ident(name) || is_register_name(name) {
                return Err(err(number, AsmErrorKind::BadLabel(name.to_string())));
            }
            if labels.insert(name.to_string(), lines.len()).is_some() {
                return Err(err(number, AsmErrorKind::DuplicateLabel(name.to_string())));
            }
            text = text[colon + 1..].trim();
        }
        if text.is_empty() {
            continue;
        }
        let (mnemonic, rest) = match text.find(char::is_whitespace) {
            Some(i) => (&text[..i], &text[i..]),
            None => (text, ""),
        };
        lines.push(Line { number, mnemonic, operands: split_operands(rest) });
        if lines.len() > MAX_INSNS {
            return Err(err(number, AsmErrorKind::TooLong));
        }
    }
    if lines.is_empty() {
        return Err(err(source.lines().count().max(1), AsmErrorKind::Empty));
    }

    // Pass 2: encode.
    let instructions =
        lines.iter().enumerate().map(|(pc, line)| encode(line, pc, &labels)).collect::<Result<Vec<_>, _>>()?;
    Ok(Assembled { instructions, labels })
}

/// Assembles to raw `.fbc` bytes.
pub fn assemble(source: &str) -> Result<Vec<u8>, AsmError> {
    assemble_program(source).map(|a| a.to_bytes())
}
