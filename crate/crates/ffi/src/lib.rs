//! C ABI over `fan_core`.
//!
//! Conventions: functions return a [`FanStatus`]; on failure
//! `fan_last_error()` describes the most recent error on the calling thread.
//! Handles are opaque and released with their `_free` function. Buffers
//! returned through [`FanBuffer`] are released with `fan_buffer_free`.

#![allow(clippy::missing_safety_doc)]

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use fan_core::abi::{host_table, ALL_CAPABILITIES, HOST_TABLE_SIZE};
use fan_core::manager::{parse_and_verify, KeyPair, PackageError, PluginPackage, TrustStore};
use fan_core::sim::{to_jsonl, SimConfig, Simulation};
use fan_core::toolkit::{assemble, sample};
use fan_core::vm::{disassemble, instantiate, NoHost, Program, RunError, TrapKind, VerifiedProgram};

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FanStatus {
    Ok = 0,
    NullArgument = 1,
    InvalidArgument = 2,
    Io = 3,
    Malformed = 4,
    UnknownSigner = 5,
    SignatureInvalid = 6,
    VerifierRejected = 7,
    UnknownCapability = 8,
    Assembly = 9,
    Config = 10,
    ExpectationFailed = 11,
    Trap = 12,
    Panic = 13,
}

/// Trap kinds reported by `fan_vm_run`.
#[repr(C)]
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub enum FanTrap {
    #[default]
    None = 0,
    MemoryOutOfBounds = 1,
    DivisionByZero = 2,
    GasExhausted = 3,
    InvalidHostCall = 4,
    CapabilityDenied = 5,
    WriteToR10 = 6,
    HostError = 7,
}

/// Bytes owned by the library.
#[repr(C)]
#[derive(Debug)]
pub struct FanBuffer {
    pub data: *mut u8,
    pub len: usize,
}

#[repr(C)]
#[derive(Debug, Default)]
pub struct FanRunResult {
    /// r0 at exit; 0 after a trap.
    pub r0: u64,
    pub trap: FanTrap,
    /// pc of the trapping instruction.
    pub trap_pc: u64,
}

pub struct FanKeyPair(KeyPair);
pub struct FanTrustStore(TrustStore);
pub struct FanPackage(PluginPackage);

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: impl Into<String>) {
    let msg = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(msg).ok());
}

type FfiResult = Result<(), (FanStatus, String)>;

fn guard(f: impl FnOnce() -> FfiResult) -> FanStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            LAST_ERROR.with(|e| *e.borrow_mut() = None);
            FanStatus::Ok
        }
        Ok(Err((status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic");
            FanStatus::Panic
        }
    }
}

fn null() -> (FanStatus, String) {
    (FanStatus::NullArgument, "null argument".to_string())
}

unsafe fn bytes<'a>(data: *const u8, len: usize) -> Result<&'a [u8], (FanStatus, String)> {
    if len == 0 {
        return Ok(&[]);
    }
    if data.is_null() {
        return Err(null());
    }
    Ok(std::slice::from_raw_parts(data, len))
}

unsafe fn text<'a>(s: *const c_char) -> Result<&'a str, (FanStatus, String)> {
    if s.is_null() {
        return Err(null());
    }
    CStr::from_ptr(s).to_str().map_err(|e| (FanStatus::InvalidArgument, e.to_string()))
}

unsafe fn put_buffer(out: *mut FanBuffer, data: Vec<u8>) -> FfiResult {
    if out.is_null() {
        return Err(null());
    }
    let mut boxed = data.into_boxed_slice();
    let len = boxed.len();
    let ptr = boxed.as_mut_ptr();
    std::mem::forget(boxed);
    *out = FanBuffer { data: ptr, len };
    Ok(())
}

fn package_status(e: &PackageError) -> FanStatus {
    match e {
        PackageError::UnknownSigner => FanStatus::UnknownSigner,
        PackageError::SignatureInvalid => FanStatus::SignatureInvalid,
        PackageError::VerifierRejected(_) => FanStatus::VerifierRejected,
        PackageError::UnknownCapability(_) => FanStatus::UnknownCapability,
        _ => FanStatus::Malformed,
    }
}

/// Message for the last failed call on this thread, or NULL. Valid until
/// the next call into the library on the same thread.
#[no_mangle]
pub extern "C" fn fan_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |s| s.as_ptr()))
}

/// Static NUL-terminated version string.
#[no_mangle]
pub extern "C" fn fan_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

#[no_mangle]
pub unsafe extern "C" fn fan_buffer_free(buf: *mut FanBuffer) {
    if buf.is_null() || (*buf).data.is_null() {
        return;
    }
    let b = &mut *buf;
    drop(Box::from_raw(ptr::slice_from_raw_parts_mut(b.data, b.len)));
    b.data = ptr::null_mut();
    b.len = 0;
}

#[no_mangle]
pub unsafe extern "C" fn fan_keypair_from_seed(seed: *const u8, out: *mut *mut FanKeyPair) -> FanStatus {
    guard(|| {
        let seed: [u8; 32] = bytes(seed, 32)?.try_into().expect("32 bytes");
        if out.is_null() {
            return Err(null());
        }
        *out = Box::into_raw(Box::new(FanKeyPair(KeyPair::from_seed(seed))));
        Ok(())
    })
}

/// Writes the 32-byte key id (SHA-256 of the public key).
#[no_mangle]
pub unsafe extern "C" fn fan_keypair_key_id(key: *const FanKeyPair, out: *mut u8) -> FanStatus {
    guard(|| {
        if key.is_null() || out.is_null() {
            return Err(null());
        }
        ptr::copy_nonoverlapping((*key).0.key_id().as_ptr(), out, 32);
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn fan_keypair_public_key(key: *const FanKeyPair, out: *mut u8) -> FanStatus {
    guard(|| {
        if key.is_null() || out.is_null() {
            return Err(null());
        }
        ptr::copy_nonoverlapping((*key).0.public().to_bytes().as_ptr(), out, 32);
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn fan_keypair_free(key: *mut FanKeyPair) {
    if !key.is_null() {
        drop(Box::from_raw(key));
    }
}

#[no_mangle]
pub extern "C" fn fan_trust_new() -> *mut FanTrustStore {
    Box::into_raw(Box::new(FanTrustStore(TrustStore::new())))
}

/// Adds a raw 32-byte Ed25519 public key.
#[no_mangle]
pub unsafe extern "C" fn fan_trust_add(trust: *mut FanTrustStore, public_key: *const u8) -> FanStatus {
    guard(|| {
        if trust.is_null() {
            return Err(null());
        }
        let pk: [u8; 32] = bytes(public_key, 32)?.try_into().expect("32 bytes");
        let vk =
            fan_core::manager::keys::verifying_key(&pk).map_err(|e| (FanStatus::InvalidArgument, e.to_string()))?;
        (*trust).0.add(vk);
        Ok(())
    })
}

/// Loads every `*.pub` key file in `dir`.
#[no_mangle]
pub unsafe extern "C" fn fan_trust_load_dir(dir: *const c_char, out: *mut *mut FanTrustStore) -> FanStatus {
    guard(|| {
        let dir = text(dir)?;
        if out.is_null() {
            return Err(null());
        }
        let t = TrustStore::load_dir(Path::new(dir)).map_err(|e| (FanStatus::Io, e.to_string()))?;
        *out = Box::into_raw(Box::new(FanTrustStore(t)));
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn fan_trust_len(trust: *const FanTrustStore) -> usize {
    if trust.is_null() {
        0
    } else {
        (*trust).0.len()
    }
}

#[no_mangle]
pub unsafe extern "C" fn fan_trust_free(trust: *mut FanTrustStore) {
    if !trust.is_null() {
        drop(Box::from_raw(trust));
    }
}

/// Assembles NUL-terminated source into bytecode.
#[no_mangle]
pub unsafe extern "C" fn fan_assemble(source: *const c_char, out: *mut FanBuffer) -> FanStatus {
    guard(|| {
        let code = assemble(text(source)?).map_err(|e| (FanStatus::Assembly, e.to_string()))?;
        put_buffer(out, code)
    })
}

/// Disassembles bytecode into text (not NUL-terminated).
#[no_mangle]
pub unsafe extern "C" fn fan_disassemble(code: *const u8, len: usize, out: *mut FanBuffer) -> FanStatus {
    guard(|| {
        let program = Program::parse(bytes(code, len)?).map_err(|e| (FanStatus::Malformed, e.to_string()))?;
        put_buffer(out, disassemble(&program).into_bytes())
    })
}

/// Signs one of the shipped sample plugins ("padding", "counter", "sink").
#[no_mangle]
pub unsafe extern "C" fn fan_sample_package(
    name: *const c_char,
    key: *const FanKeyPair,
    out: *mut FanBuffer,
) -> FanStatus {
    guard(|| {
        let name = text(name)?;
        if key.is_null() {
            return Err(null());
        }
        let s = sample(name).ok_or_else(|| (FanStatus::InvalidArgument, format!("no sample {name:?}")))?;
        put_buffer(out, s.package(&(*key).0, false))
    })
}

/// Parses and fully verifies a `.fanp` package.
#[no_mangle]
pub unsafe extern "C" fn fan_package_verify(
    data: *const u8,
    len: usize,
    trust: *const FanTrustStore,
    out: *mut *mut FanPackage,
) -> FanStatus {
    guard(|| {
        let data = bytes(data, len)?;
        if trust.is_null() || out.is_null() {
            return Err(null());
        }
        let pkg = parse_and_verify(data, &(*trust).0).map_err(|e| (package_status(&e), e.to_string()))?;
        *out = Box::into_raw(Box::new(FanPackage(pkg)));
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn fan_package_capability_mask(pkg: *const FanPackage) -> u32 {
    if pkg.is_null() {
        0
    } else {
        (*pkg).0.capability_mask()
    }
}

#[no_mangle]
pub unsafe extern "C" fn fan_package_memory_size(pkg: *const FanPackage) -> u32 {
    if pkg.is_null() {
        0
    } else {
        (*pkg).0.header.memory_size
    }
}

/// Package name as UTF-8 bytes.
#[no_mangle]
pub unsafe extern "C" fn fan_package_name(pkg: *const FanPackage, out: *mut FanBuffer) -> FanStatus {
    guard(|| {
        if pkg.is_null() {
            return Err(null());
        }
        put_buffer(out, (*pkg).0.name().as_bytes().to_vec())
    })
}

#[no_mangle]
pub unsafe extern "C" fn fan_package_free(pkg: *mut FanPackage) {
    if !pkg.is_null() {
        drop(Box::from_raw(pkg));
    }
}

/// Verifies and runs bytecode from pc 0 with no host functions available.
/// A trap is reported in `out` with status `Trap`.
#[no_mangle]
pub unsafe extern "C" fn fan_vm_run(
    code: *const u8,
    len: usize,
    memory_size: u32,
    gas: u64,
    args: *const u64,
    nargs: usize,
    out: *mut FanRunResult,
) -> FanStatus {
    guard(|| {
        if out.is_null() {
            return Err(null());
        }
        let code = bytes(code, len)?;
        let args: &[u64] = if nargs == 0 {
            &[]
        } else if args.is_null() {
            return Err(null());
        } else {
            std::slice::from_raw_parts(args, nargs)
        };
        let program = Program::parse(code).map_err(|e| (FanStatus::Malformed, e.to_string()))?;
        let verified =
            VerifiedProgram::new(program, HOST_TABLE_SIZE).map_err(|r| (FanStatus::VerifierRejected, r.to_string()))?;
        let mut vm = instantiate(&verified, memory_size as usize, host_table(), ALL_CAPABILITIES)
            .map_err(|e| (FanStatus::InvalidArgument, e.to_string()))?;
        *out = FanRunResult::default();
        match vm.run(0, args, gas, &mut NoHost) {
            Ok(r0) => {
                (*out).r0 = r0;
                Ok(())
            }
            Err(RunError::Trap(t)) => {
                (*out).trap = match t.kind {
                    TrapKind::MemoryOutOfBounds => FanTrap::MemoryOutOfBounds,
                    TrapKind::DivisionByZero => FanTrap::DivisionByZero,
                    TrapKind::GasExhausted => FanTrap::GasExhausted,
                    TrapKind::InvalidHostCall => FanTrap::InvalidHostCall,
                    TrapKind::CapabilityDenied => FanTrap::CapabilityDenied,
                    TrapKind::WriteToR10 => FanTrap::WriteToR10,
                    TrapKind::HostError(_) => FanTrap::HostError,
                };
                (*out).trap_pc = t.pc as u64;
                Err((FanStatus::Trap, t.to_string()))
            }
            Err(e) => Err((FanStatus::InvalidArgument, e.to_string())),
        }
    })
}

/// Runs a scenario given as JSON. The trace (JSON lines) goes to `trace`;
/// `passed` is set when every expectation held. Returns
/// `ExpectationFailed` otherwise.
#[no_mangle]
pub unsafe extern "C" fn fan_sim_run(
    config_json: *const c_char,
    trace: *mut FanBuffer,
    passed: *mut bool,
) -> FanStatus {
    guard(|| {
        let cfg = SimConfig::from_json(text(config_json)?).map_err(|e| (FanStatus::Config, e.to_string()))?;
        let report = Simulation::new(cfg).map_err(|e| (FanStatus::Config, e.to_string()))?.run();
        put_buffer(trace, to_jsonl(&report.trace).into_bytes())?;
        if !passed.is_null() {
            *passed = report.passed();
        }
        if report.passed() {
            Ok(())
        } else {
            Err((FanStatus::ExpectationFailed, "expectations failed".to_string()))
        }
    })
}
