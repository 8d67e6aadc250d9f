//! Instruction encoding and the opcode table.
//!
//! Every instruction is 8 bytes:
//! `opcode: u8 | dst (low nibble), src (high nibble) | offset: i16 LE | imm: i32 LE`.

use std::fmt;

use thiserror::Error;

pub const INSN_LEN: usize = 8;
pub const MAX_INSNS: usize = 65_536;
pub const NUM_REGS: usize = 11;
/// Read-only frame register holding the arena size.
pub const R10: u8 = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Instruction {
    pub opcode: u8,
    pub dst: u8,
    pub src: u8,
    pub offset: i16,
    pub imm: i32,
}

impl Instruction {
    pub const fn new(opcode: u8, dst: u8, src: u8, offset: i16, imm: i32) -> Instruction {
        Instruction { opcode, dst, src, offset, imm }
    }

    pub fn op(opcode: Opcode) -> Instruction {
        Instruction::new(opcode as u8, 0, 0, 0, 0)
    }

    pub fn encode(&self) -> [u8; INSN_LEN] {
        let mut b = [0u8; INSN_LEN];
        b[0] = self.opcode;
        b[1] = (self.dst & 0x0f) | (self.src << 4);
        b[2..4].copy_from_slice(&self.offset.to_le_bytes());
        b[4..8].copy_from_slice(&self.imm.to_le_bytes());
        b
    }

    pub fn decode(b: &[u8; INSN_LEN]) -> Instruction {
        Instruction {
            opcode: b[0],
            dst: b[1] & 0x0f,
            src: b[1] >> 4,
            offset: i16::from_le_bytes([b[2], b[3]]),
            imm: i32::from_le_bytes([b[4], b[5], b[6], b[7]]),
        }
    }

    pub fn opcode(&self) -> Option<Opcode> {
        Opcode::from_u8(self.opcode)
    }

    /// Jump target as an instruction index, for jump opcodes.
    pub fn jump_target(&self, pc: usize) -> Option<i64> {
        match self.opcode()?.class() {
            OpClass::Ja | OpClass::JmpImm | OpClass::JmpReg => Some(pc as i64 + 1 + i64::from(self.offset)),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OpClass {
    Exit,
    Call,
    Ja,
    AluImm,
    AluReg,
    /// Two's-complement negate; only `dst` is used.
    Neg,
    Load,
    Store,
    StoreImm,
    JmpImm,
    JmpReg,
}

macro_rules! opcodes {
    ($($name:ident = $val:literal, $mn:literal, $class:ident;)*) => {
        #[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
        #[repr(u8)]
        pub enum Opcode {
            $($name = $val,)*
        }

        impl Opcode {
            pub const ALL: &'static [Opcode] = &[$(Opcode::$name,)*];

            pub fn from_u8(v: u8) -> Option<Opcode> {
                match v {
                    $($val => Some(Opcode::$name),)*
                    _ => None,
                }
            }

            pub fn mnemonic(self) -> &'static str {
                match self {
                    $(Opcode::$name => $mn,)*
                }
            }

            pub fn class(self) -> OpClass {
                match self {
                    $(Opcode::$name => OpClass::$class,)*
                }
            }

            pub fn from_mnemonic(s: &str) -> Option<Opcode> {
                match s {
                    $($mn => Some(Opcode::$name),)*
                    _ => None,
                }
            }
        }
    };
}

opcodes! {
    Exit = 0x00, "exit", Exit;
    Call = 0x01, "call", Call;
    Ja = 0x02, "ja", Ja;

    Addi = 0x10, "addi", AluImm;
    Subi = 0x11, "subi", AluImm;
    Muli = 0x12, "muli", AluImm;
    Divi = 0x13, "divi", AluImm;
    Modi = 0x14, "modi", AluImm;
    Andi = 0x15, "andi", AluImm;
    Ori = 0x16, "ori", AluImm;
    Xori = 0x17, "xori", AluImm;
    Lshi = 0x18, "lshi", AluImm;
    Rshi = 0x19, "rshi", AluImm;
    Arshi = 0x1A, "arshi", AluImm;
    Movi = 0x1B, "movi", AluImm;

    Add = 0x20, "add", AluReg;
    Sub = 0x21, "sub", AluReg;
    Mul = 0x22, "mul", AluReg;
    Div = 0x23, "div", AluReg;
    Mod = 0x24, "mod", AluReg;
    And = 0x25, "and", AluReg;
    Or = 0x26, "or", AluReg;
    Xor = 0x27, "xor", AluReg;
    Lsh = 0x28, "lsh", AluReg;
    Rsh = 0x29, "rsh", AluReg;
    Arsh = 0x2A, "arsh", AluReg;
    Mov = 0x2B, "mov", AluReg;
    Neg = 0x2C, "neg", Neg;

    Ld8 = 0x30, "ld8", Load;
    Ld16 = 0x31, "ld16", Load;
    Ld32 = 0x32, "ld32", Load;
    Ld64 = 0x33, "ld64", Load;

    St8 = 0x40, "st8", Store;
    St16 = 0x41, "st16", Store;
    St32 = 0x42, "st32", Store;
    St64 = 0x43, "st64", Store;

    Sti8 = 0x50, "sti8", StoreImm;
    Sti16 = 0x51, "sti16", StoreImm;
    Sti32 = 0x52, "sti32", StoreImm;
    Sti64 = 0x53, "sti64", StoreImm;

    Jeqi = 0x60, "jeqi", JmpImm;
    Jnei = 0x61, "jnei", JmpImm;
    Jlti = 0x62, "jlti", JmpImm;
    Jlei = 0x63, "jlei", JmpImm;
    Jgti = 0x64, "jgti", JmpImm;
    Jgei = 0x65, "jgei", JmpImm;

    Jeq = 0x70, "jeq", JmpReg;
    Jne = 0x71, "jne", JmpReg;
    Jlt = 0x72, "jlt", JmpReg;
    Jle = 0x73, "jle", JmpReg;
    Jgt = 0x74, "jgt", JmpReg;
    Jge = 0x75, "jge", JmpReg;
}

impl Opcode {
    /// Access width in bytes for loads and stores.
    pub fn access_width(self) -> Option<usize> {
        match self.class() {
            OpClass::Load | OpClass::Store | OpClass::StoreImm => Some(1 << (self as u8 & 0x03)),
            _ => None,
        }
    }

    /// Whether the instruction assigns to `dst`.
    pub fn writes_dst(self) -> bool {
        matches!(self.class(), OpClass::AluImm | OpClass::AluReg | OpClass::Neg | OpClass::Load)
    }
}

impl fmt::Display for Opcode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.mnemonic())
    }
}

#[derive(Debug, Clone, Error, PartialEq, Eq)]
pub enum ParseError {
    #[error("program is empty")]
    Empty,
    #[error("program length {0} is not a multiple of {INSN_LEN}")]
    Misaligned(usize),
    #[error("program has {0} instructions, limit is {MAX_INSNS}")]
    TooLong(usize),
}

/// A syntactically decoded (not yet verified) instruction sequence.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Program {
    insns: Vec<Instruction>,
}

impl Program {
    pub fn new(insns: Vec<Instruction>) -> Result<Program, ParseError> {
        match insns.len() {
            0 => Err(ParseError::Empty),
            n if n > MAX_INSNS => Err(ParseError::TooLong(n)),
            _ => Ok(Program { insns }),
        }
    }

    pub fn parse(bytes: &[u8]) -> Result<Program, ParseError> {
        if bytes.is_empty() {
            return Err(ParseError::Empty);
        }
        if !bytes.len().is_multiple_of(INSN_LEN) {
            return Err(ParseError::Misaligned(bytes.len()));
        }
        let n = bytes.len() / INSN_LEN;
        if n > MAX_INSNS {
            return Err(ParseError::TooLong(n));
        }
        let insns =
            bytes.chunks_exact(INSN_LEN).map(|c| Instruction::decode(c.try_into().expect("chunk of 8"))).collect();
        Ok(Program { insns })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        self.insns.iter().flat_map(|i| i.encode()).collect()
    }

    pub fn instructions(&self) -> &[Instruction] {
        &self.insns
    }

    pub fn len(&self) -> usize {
        self.insns.len()
    }

    pub fn is_empty(&self) -> bool {
        self.insns.is_empty()
    }
}

pub fn parse_program(bytes: &[u8]) -> Result<Program, ParseError> {
    Program::parse(bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_movi_exit() {
        let bytes = [0x1B, 0, 0, 0, 0x2A, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0];
        let p = parse_program(&bytes).unwrap();
        assert_eq!(p.instructions()[0], Instruction::new(Opcode::Movi as u8, 0, 0, 0, 42));
        assert_eq!(p.instructions()[1].opcode(), Some(Opcode::Exit));
        assert_eq!(p.to_bytes(), bytes);
    }

    #[test]
    fn rejects_bad_lengths() {
        assert_eq!(parse_program(&[0u8; 7]), Err(ParseError::Misaligned(7)));
        assert_eq!(parse_program(&[]), Err(ParseError::Empty));
        assert_eq!(parse_program(&vec![0u8; 8 * 65_537]), Err(ParseError::TooLong(65_537)));
        assert!(parse_program(&vec![0u8; 8 * 65_536]).is_ok());
    }

    #[test]
    fn register_nibbles() {
        let i = Instruction::new(0x2B, 3, 10, -2, -1);
        let e = i.encode();
        assert_eq!(e[1], 0xA3);
        assert_eq!(Instruction::decode(&e), i);
    }

    #[test]
    fn table_is_consistent() {
        for &op in Opcode::ALL {
            assert_eq!(Opcode::from_u8(op as u8), Some(op));
            assert_eq!(Opcode::from_mnemonic(op.mnemonic()), Some(op));
        }
        assert_eq!(Opcode::Ld64.access_width(), Some(8));
        assert_eq!(Opcode::Sti16.access_width(), Some(2));
        assert_eq!(Opcode::St8.access_width(), Some(1));
    }
}
