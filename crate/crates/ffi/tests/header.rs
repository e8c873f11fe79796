use std::path::{Path, PathBuf};
use std::process::Command;

const PROGRAM: &str = r#"
#include <stdio.h>
#include <string.h>
#include "tlm.h"

int main(void) {
    TlmModel *model = NULL;
    if (tlm_model_random("tiny", 7, &model) != TLM_STATUS_OK) return 1;
    TlmEngineConfig config = tlm_engine_config_default();
    TlmEngine *engine = NULL;
    if (tlm_engine_new(model, &config, &engine) != TLM_STATUS_OK) return 2;
    tlm_model_free(model);
    uint64_t id = 0;
    const char *prompt = "hello";
    if (tlm_engine_submit(engine, (const uint8_t *)prompt, strlen(prompt), 8, &id) != TLM_STATUS_OK) return 3;
    if (tlm_engine_run(engine) != TLM_STATUS_OK) return 4;
    uint8_t buf[64];
    size_t len = 0, generated = 0;
    TlmFinishReason reason;
    if (tlm_engine_take_output(engine, id, buf, sizeof buf, &len, &generated, &reason) != TLM_STATUS_OK) return 5;
    if (generated == 0 || generated > 8) return 6;
    if (tlm_engine_submit(engine, NULL, 0, 8, &id) != TLM_STATUS_INVALID_REQUEST) return 7;
    if (tlm_last_error() == NULL) return 8;
    tlm_engine_free(engine);
    printf("%zu\n", generated);
    return 0;
}
"#;

fn header_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("include")
}

fn cc() -> Option<String> {
    let cc = std::env::var("CC").unwrap_or_else(|_| "cc".into());
    Command::new(&cc).arg("--version").output().ok().filter(|o| o.status.success()).map(|_| cc)
}

#[test]
fn header_declares_the_api() {
    let h = std::fs::read_to_string(header_dir().join("tlm.h")).unwrap();
    for name in [
        "typedef struct TlmModel TlmModel",
        "typedef struct TlmEngine TlmEngine",
        "TLM_STATUS_OK = 0",
        "TLM_STATUS_PANIC",
        "tlm_engine_take_output",
        "tlm_last_error",
    ] {
        assert!(h.contains(name), "header lacks {name}");
    }
}

// Links the static library next to the test binary's deps directory.
#[test]
fn c_program_links_and_runs() {
    let Some(cc) = cc() else {
        eprintln!("no C compiler; skipping");
        return;
    };
    let exe = std::env::current_exe().unwrap();
    let profile_dir = exe.parent().and_then(Path::parent).unwrap();
    let lib = profile_dir.join("libtlm_ffi.a");
    assert!(lib.exists(), "{} missing", lib.display());
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("smoke.c");
    let bin = dir.path().join("smoke");
    std::fs::write(&src, PROGRAM).unwrap();
    let status = Command::new(&cc)
        .args(["-std=c11", "-Wall", "-Werror", "-I"])
        .arg(header_dir())
        .arg(&src)
        .arg(&lib)
        .args(["-lpthread", "-ldl", "-lm", "-o"])
        .arg(&bin)
        .status()
        .unwrap();
    assert!(status.success(), "C build failed");
    let out = Command::new(&bin).output().unwrap();
    assert!(out.status.success(), "smoke exited {:?}", out.status);
    let generated: usize = String::from_utf8(out.stdout).unwrap().trim().parse().unwrap();
    assert!((1..=8).contains(&generated));
}
