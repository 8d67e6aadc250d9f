//! Assembler and sample plugin sources.

pub mod asm;
pub mod samples;

pub use asm::{assemble, assemble_program, AsmError, AsmErrorKind, Assembled};
pub use samples::{build_sample_plugins, sample, SamplePlugin};
