use std::ffi::{CStr, CString};
use std::ptr;

use fan_ffi::*;

fn last_error() -> String {
    let p = fan_last_error();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

fn take(mut b: FanBuffer) -> Vec<u8> {
    let v = unsafe { std::slice::from_raw_parts(b.data, b.len) }.to_vec();
    unsafe { fan_buffer_free(&mut b) };
    assert!(b.data.is_null());
    v
}

fn empty() -> FanBuffer {
    FanBuffer { data: ptr::null_mut(), len: 0 }
}

#[test]
fn sign_verify_and_reject() {
    unsafe {
        let mut key = ptr::null_mut();
        assert_eq!(fan_keypair_from_seed([3u8; 32].as_ptr(), &mut key), FanStatus::Ok);
        let mut pk = [0u8; 32];
        assert_eq!(fan_keypair_public_key(key, pk.as_mut_ptr()), FanStatus::Ok);

        let mut buf = empty();
        let name = CString::new("padding").unwrap();
        assert_eq!(fan_sample_package(name.as_ptr(), key, &mut buf), FanStatus::Ok);
        let pkg = take(buf);

        let trust = fan_trust_new();
        let mut out = ptr::null_mut();
        assert_eq!(fan_package_verify(pkg.as_ptr(), pkg.len(), trust, &mut out), FanStatus::UnknownSigner);
        assert!(last_error().contains("signer"));
        assert!(out.is_null());

        assert_eq!(fan_trust_add(trust, pk.as_ptr()), FanStatus::Ok);
        assert_eq!(fan_trust_len(trust), 1);
        assert_eq!(fan_package_verify(pkg.as_ptr(), pkg.len(), trust, &mut out), FanStatus::Ok);
        assert!(fan_last_error().is_null());
        assert_eq!(fan_package_capability_mask(out), 0b11_0111);
        assert_eq!(fan_package_memory_size(out), 4096);
        let mut n = empty();
        assert_eq!(fan_package_name(out, &mut n), FanStatus::Ok);
        assert_eq!(take(n), b"padding");
        fan_package_free(out);

        let mut bad = pkg.clone();
        let last = bad.len() - 1;
        bad[last] ^= 1;
        let mut out = ptr::null_mut();
        assert_eq!(fan_package_verify(bad.as_ptr(), bad.len(), trust, &mut out), FanStatus::SignatureInvalid);
        assert_eq!(fan_package_verify(bad.as_ptr(), 3, trust, &mut out), FanStatus::Malformed);
        assert_eq!(fan_package_verify(ptr::null(), 10, trust, &mut out), FanStatus::NullArgument);

        fan_trust_free(trust);
        fan_keypair_free(key);
    }
}

#[test]
fn assemble_run_disassemble() {
    unsafe {
        let src = CString::new("movi r0, 6\nmul r0, r1\nexit\n").unwrap();
        let mut code = empty();
        assert_eq!(fan_assemble(src.as_ptr(), &mut code), FanStatus::Ok);
        let code = take(code);
        assert_eq!(code.len(), 24);

        let mut r = FanRunResult::default();
        let args = [7u64];
        assert_eq!(fan_vm_run(code.as_ptr(), code.len(), 4096, 100, args.as_ptr(), 1, &mut r), FanStatus::Ok);
        assert_eq!((r.r0, r.trap), (42, FanTrap::None));

        assert_eq!(fan_vm_run(code.as_ptr(), code.len(), 4096, 2, args.as_ptr(), 1, &mut r), FanStatus::Trap);
        assert_eq!((r.trap, r.trap_pc), (FanTrap::GasExhausted, 2));

        let mut text = empty();
        assert_eq!(fan_disassemble(code.as_ptr(), code.len(), &mut text), FanStatus::Ok);
        let text = String::from_utf8(take(text)).unwrap();
        assert!(text.starts_with("movi r0, 6"), "{text}");

        let bad = CString::new("frobnicate r1\n").unwrap();
        let mut out = empty();
        assert_eq!(fan_assemble(bad.as_ptr(), &mut out), FanStatus::Assembly);
        assert!(last_error().contains("line 1"));
    }
}

#[test]
fn simulation() {
    let cfg = include_str!("../../core/scenarios/unknown_feature.json");
    let cfg = CString::new(cfg).unwrap();
    let mut trace = empty();
    let mut passed = false;
    assert_eq!(unsafe { fan_sim_run(cfg.as_ptr(), &mut trace, &mut passed) }, FanStatus::Ok);
    assert!(passed);
    let trace = String::from_utf8(take(trace)).unwrap();
    assert_eq!(trace.lines().filter(|l| l.contains("\"kind\":\"kill_report\"")).count(), 1);

    let broken = CString::new("{\"seed\": 1}").unwrap();
    let mut trace = empty();
    assert_eq!(unsafe { fan_sim_run(broken.as_ptr(), &mut trace, ptr::null_mut()) }, FanStatus::Config);
}

#[test]
fn version_string() {
    let v = unsafe { CStr::from_ptr(fan_version()) };
    assert_eq!(v.to_str().unwrap(), env!("CARGO_PKG_VERSION"));
}
