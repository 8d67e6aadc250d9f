//! Compiles (and where the static library is available, links and runs) a
//! small C program against the generated header.

use std::path::{Path, PathBuf};
use std::process::Command;

const PROGRAM: &str = r#"
#include <stdio.h>
#include <string.h>
#include "fan.h"

int main(void) {
    FanBuffer code = {0};
    if (fan_assemble("movi r0, 40\naddi r0, 2\nexit\n", &code) != FAN_STATUS_OK) return 1;
    FanRunResult r;
    if (fan_vm_run(code.data, code.len, 4096, 1000, NULL, 0, &r) != FAN_STATUS_OK) return 2;
    fan_buffer_free(&code);
    if (r.r0 != 42 || r.trap != FAN_TRAP_NONE) return 3;
    if (fan_assemble("nope", &code) != FAN_STATUS_ASSEMBLY) return 4;
    if (fan_last_error() == NULL) return 5;
    printf("ok %s\n", fan_version());
    return 0;
}
"#;

fn cc() -> Option<String> {
    ["cc", "gcc", "clang"]
        .into_iter()
        .find(|c| Command::new(c).arg("--version").output().is_ok_and(|o| o.status.success()))
        .map(String::from)
}

fn static_lib() -> Option<PathBuf> {
    let exe = std::env::current_exe().ok()?;
    let deps = exe.parent()?;
    [deps.join("libfan_ffi.a"), deps.parent()?.join("libfan_ffi.a")].into_iter().find(|p| p.exists())
}

#[test]
fn header_compiles_and_links() {
    let Some(cc) = cc() else {
        eprintln!("no C compiler; skipped");
        return;
    };
    let include = Path::new(env!("CARGO_MANIFEST_DIR")).join("include");
    assert!(include.join("fan.h").exists());
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("t.c");
    std::fs::write(&src, PROGRAM).unwrap();

    let status = Command::new(&cc)
        .args(["-std=c99", "-Wall", "-Werror", "-fsyntax-only", "-I"])
        .arg(&include)
        .arg(&src)
        .status()
        .unwrap();
    assert!(status.success(), "header does not compile");

    let Some(lib) = static_lib() else {
        eprintln!("static library not built; link step skipped");
        return;
    };
    let bin = dir.path().join("t");
    let out = Command::new(&cc)
        .arg("-I")
        .arg(&include)
        .arg(&src)
        .arg(&lib)
        .args(["-lpthread", "-ldl", "-lm", "-o"])
        .arg(&bin)
        .output()
        .unwrap();
    assert!(out.status.success(), "link failed: {}", String::from_utf8_lossy(&out.stderr));
    let run = Command::new(&bin).output().unwrap();
    assert!(run.status.success(), "exit {:?}", run.status);
    assert!(String::from_utf8_lossy(&run.stdout).starts_with("ok "));
}
