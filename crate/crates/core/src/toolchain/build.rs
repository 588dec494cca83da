//! Isolated builds of harness + reference + candidate.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{exec, ToolchainProfile, CANDIDATE_FILE};
use crate::model::{content_hash, content_hash_parts, HarnessBundle};
use crate::prompts::render;
use crate::{Error, Result};

const BINARY: &str = "harness";
const STAMP: &str = ".build-ok";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BuildKind {
    Plain,
    Tsan,
    Caliper,
}

impl BuildKind {
    fn as_str(self) -> &'static str {
        match self {
            BuildKind::Plain => "plain",
            BuildKind::Tsan => "tsan",
            BuildKind::Caliper => "caliper",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BuildArtifact {
    pub dir: PathBuf,
    pub binary: PathBuf,
    pub kind: BuildKind,
    /// Hash of the binary with the build directory path cut out.
    pub hash: String,
    pub log: String,
    pub reused: bool,
}

fn flags(profile: &ToolchainProfile, kind: BuildKind) -> (String, String) {
    match kind {
        BuildKind::Plain => (profile.openmp_flags.clone(), String::new()),
        BuildKind::Tsan => (
            format!("{} {}", profile.openmp_flags, profile.tsan_flags)
                .trim()
                .to_owned(),
            profile.tsan_ldflags.clone(),
        ),
        BuildKind::Caliper => (
            format!("{} {}", profile.openmp_flags, profile.caliper_cxxflags)
                .trim()
                .to_owned(),
            profile.caliper_ldflags.clone(),
        ),
    }
}

fn strip_path(bytes: &[u8], dir: &Path) -> Vec<u8> {
    let needle = dir.to_string_lossy().into_owned().into_bytes();
    if needle.is_empty() {
        return bytes.to_vec();
    }
    let mut out = Vec::with_capacity(bytes.len());
    let mut i = 0;
    while i < bytes.len() {
        if bytes[i..].starts_with(&needle) {
            i += needle.len();
        } else {
            out.push(bytes[i]);
            i += 1;
        }
    }
    out
}

/// Writes the four sources into `work_root/<hash>` and runs the profile's
/// compiler command there. A directory holding a finished build of the
/// same inputs is reused.
pub fn compile(
    bundle: &HarnessBundle,
    source: &str,
    kind: BuildKind,
    profile: &ToolchainProfile,
    work_root: &Path,
) -> Result<BuildArtifact> {
    let (cxxflags, ldflags) = flags(profile, kind);
    let argv: Vec<String> = profile
        .compiler_command
        .iter()
        .map(|a| {
            render(
                a,
                &[
                    ("cxx", &profile.cxx),
                    ("extra_cxxflags", &cxxflags),
                    ("extra_ldflags", &ldflags),
                ],
            )
        })
        .collect();
    let key = content_hash_parts([
        kind.as_str(),
        &bundle.makefile,
        &bundle.harness_source,
        &bundle.reference_source,
        source,
        &argv.join("\0"),
    ]);
    let dir = work_root.join(&key[..16]);
    let binary = dir.join(BINARY);

    if dir.join(STAMP).exists() && binary.exists() {
        let log = std::fs::read_to_string(dir.join(STAMP)).unwrap_or_default();
        return Ok(BuildArtifact {
            hash: content_hash(strip_path(&std::fs::read(&binary)?, &dir)),
            dir,
            binary,
            kind,
            log,
            reused: true,
        });
    }

    std::fs::create_dir_all(&dir)?;
    let _ = std::fs::remove_file(&binary);
    for (name, text) in [
        ("Makefile", bundle.makefile.as_str()),
        ("harness.cc", &bundle.harness_source),
        ("reference.cc", &bundle.reference_source),
        (CANDIDATE_FILE, source),
    ] {
        std::fs::write(dir.join(name), text)?;
    }

    let out = exec::run(&argv, &dir, &BTreeMap::new(), profile.compile_timeout())?;
    let log = format!("{}{}", out.stdout, out.stderr);
    if out.timed_out {
        return Err(Error::Timeout(profile.compile_timeout()));
    }
    if !out.success() || !binary.exists() {
        return Err(Error::Compile { log });
    }
    std::fs::write(dir.join(STAMP), &log)?;
    Ok(BuildArtifact {
        hash: content_hash(strip_path(&std::fs::read(&binary)?, &dir)),
        dir,
        binary,
        kind,
        log,
        reused: false,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn path_bytes_removed() {
        let dir = Path::new("/tmp/work/abc");
        assert_eq!(strip_path(b"x/tmp/work/abc/y/tmp/work/abc", dir), b"x/y".to_vec());
    }

    #[cfg(unix)]
    #[test]
    fn shell_build_reused_and_hash_stable() {
        let root = tempfile::tempdir().unwrap();
        let profile = ToolchainProfile {
            compiler_command: vec!["sh".into(), "-c".into(), "cat generated.cc > harness".into()],
            ..ToolchainProfile::default()
        };
        let bundle = HarnessBundle {
            problem_id: "p".into(),
            makefile: String::new(),
            harness_source: String::new(),
            reference_source: String::new(),
            signature: String::new(),
        };
        let a = compile(&bundle, "int x;\n", BuildKind::Plain, &profile, root.path()).unwrap();
        let b = compile(&bundle, "int x;\n", BuildKind::Plain, &profile, root.path()).unwrap();
        assert!(!a.reused && b.reused);
        assert_eq!(a.hash, b.hash);

        let fail = ToolchainProfile {
            compiler_command: vec!["sh".into(), "-c".into(), "echo 'error: nope' >&2; exit 1".into()],
            ..ToolchainProfile::default()
        };
        match compile(&bundle, "int y;\n", BuildKind::Plain, &fail, root.path()) {
            Err(Error::Compile { log }) => assert!(log.contains("error: nope")),
            other => panic!("{other:?}"),
        }
    }
}
