//! The generated header compiles as C and links against the static library.
//! Skipped when no C compiler is installed.

use std::path::{Path, PathBuf};
use std::process::Command;

const PROGRAM: &str = r#"
#include <stdio.h>
#include <string.h>
#include "ompsynth.h"

int main(void) {
    const char *raw =
        "WARNING: ThreadSanitizer: data race (pid=1)\n"
        "  Write of size 8 at 0x7b0c000000f0 by thread T1:\n"
        "    #0 dot generated.cc:14 (a.out+0x1)\n"
        "  Previous write of size 8 at 0x7b0c000000f0 by main thread:\n"
        "    #0 dot generated.cc:14 (a.out+0x2)\n";
    OmpsRaceReport *r = NULL;
    if (omps_parse_tsan(raw, "generated.cc", &r) != OMPS_STATUS_OK) return 1;
    if (omps_race_report_len(r) != 1) return 2;
    char *text = NULL;
    if (omps_race_report_render(r, &text) != OMPS_STATUS_OK) return 3;
    if (!strstr(text, "generated.cc:14")) return 4;
    omps_string_free(text);
    omps_race_report_free(r);
    if (omps_race_report_parse_answer("garbage", &r) != OMPS_STATUS_FORMAT) return 5;
    if (omps_last_error_message() == NULL) return 6;
    puts("ok");
    return 0;
}
"#;

fn cc() -> Option<String> {
    ["cc", "gcc", "clang"]
        .into_iter()
        .find(|c| Command::new(c).arg("--version").output().is_ok())
        .map(str::to_owned)
}

fn header_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("include")
}

fn static_lib() -> Option<PathBuf> {
    let exe = std::env::current_exe().ok()?;
    let profile_dir = exe.parent()?.parent()?;
    let lib = profile_dir.join("libompsynth_ffi.a");
    lib.is_file().then_some(lib)
}

#[test]
fn header_compiles_and_links() {
    let Some(cc) = cc() else {
        eprintln!("skipped: no C compiler");
        return;
    };
    let tmp = tempfile::tempdir().unwrap();
    let src = tmp.path().join("main.c");
    std::fs::write(&src, PROGRAM).unwrap();

    let syntax = Command::new(&cc)
        .args(["-std=c99", "-Wall", "-Werror", "-fsyntax-only", "-I"])
        .arg(header_dir())
        .arg(&src)
        .output()
        .unwrap();
    assert!(syntax.status.success(), "{}", String::from_utf8_lossy(&syntax.stderr));

    let Some(lib) = static_lib() else {
        eprintln!("static library not built; link step skipped");
        return;
    };
    let exe = tmp.path().join("main");
    let link = Command::new(&cc)
        .args(["-std=c99", "-I"])
        .arg(header_dir())
        .arg(&src)
        .arg(&lib)
        .args(["-lpthread", "-ldl", "-lm", "-o"])
        .arg(&exe)
        .output()
        .unwrap();
    assert!(link.status.success(), "{}", String::from_utf8_lossy(&link.stderr));
    let run = Command::new(&exe).output().unwrap();
    assert!(run.status.success(), "exit {:?}", run.status.code());
    assert_eq!(String::from_utf8_lossy(&run.stdout).trim(), "ok");
}
