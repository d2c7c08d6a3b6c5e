//! Compiles a small C program against the generated header and the static library.

use std::path::{Path, PathBuf};
use std::process::Command;

fn target_dir() -> PathBuf {
    let exe = std::env::current_exe().unwrap();
    exe.parent().and_then(Path::parent).unwrap().to_path_buf()
}

const PROGRAM: &str = r#"
#include <stdio.h>
#include <string.h>
#include "pimsim.h"

int main(void) {
    PimsimSystem *sys = NULL;
    if (pimsim_system_new("iphone-15-pro", "llama-1b", &sys) != PIMSIM_STATUS_OK) return 1;
    PimsimReport *rep = NULL;
    if (pimsim_simulate(sys, PIMSIM_MODE_HBCEM, 128, 4, 1, &rep) != PIMSIM_STATUS_OK) return 2;
    PimsimSummary s;
    if (pimsim_report_summary(rep, &s) != PIMSIM_STATUS_OK || !(s.end_to_end_s > 0.0)) return 3;
    uint8_t a, b;
    pimsim_encode(PIMSIM_INSTRUCTION_PIM_MAC_FM, &a, &b);
    if (a != 1 || b != 1) return 4;
    if (pimsim_system_new("nope", "llama-1b", &sys) != PIMSIM_STATUS_UNKNOWN_PRESET) return 5;
    if (strstr(pimsim_last_error(), "nope") == NULL) return 6;
    pimsim_report_free(rep);
    pimsim_system_free(sys);
    printf("ok %s\n", pimsim_version());
    return 0;
}
"#;

#[test]
fn c_program_links_against_static_library() {
    let lib = target_dir().join("libpimsim_ffi.a");
    let cc = std::env::var("CC").unwrap_or_else(|_| "cc".into());
    if !lib.exists() || Command::new(&cc).arg("--version").output().is_err() {
        eprintln!("skipping: {} or {cc} unavailable", lib.display());
        return;
    }
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("main.c");
    let bin = dir.path().join("main");
    std::fs::write(&src, PROGRAM).unwrap();
    let include = Path::new(env!("CARGO_MANIFEST_DIR")).join("include");
    let status = Command::new(&cc)
        .args(["-std=c99", "-Wall", "-Werror", "-o"])
        .arg(&bin)
        .arg(&src)
        .arg("-I")
        .arg(&include)
        .arg(&lib)
        .args(["-lpthread", "-ldl", "-lm"])
        .status()
        .unwrap();
    assert!(status.success(), "C compilation failed");
    let out = Command::new(&bin).output().unwrap();
    assert!(out.status.success(), "exit {:?}", out.status.code());
    assert!(String::from_utf8_lossy(&out.stdout).starts_with("ok "));
}
