//! Bytecode ISA, static verifier and the sandboxed interpreter.

pub mod disasm;
pub mod interp;
pub mod isa;
pub mod verify;

pub use disasm::disassemble;
pub use interp::{
    instantiate, Access, Arena, HostFault, HostFunction, HostHandler, HostTable, InstantiateError, MemoryFault, NoHost,
    RunError, Trap, TrapKind, VmInstance, DEFAULT_GAS, MAX_MEMORY, MIN_MEMORY,
};
pub use isa::{parse_program, Instruction, OpClass, Opcode, ParseError, Program, INSN_LEN, MAX_INSNS};
pub use verify::{verify, VerifiedProgram, VerifierReport, Violation, ViolationKind};
