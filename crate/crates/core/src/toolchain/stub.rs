//! Deterministic stand-in for hosts without a compiler (`--dry-run`).
//!
//! Outputs are synthesized as raw tool text and pushed through the real
//! parsers, so every downstream stage sees the same shapes as a live run.

use std::collections::BTreeMap;
use std::path::Path;

use once_cell::sync::Lazy;
use regex::Regex;

use super::caliper::parse_caliper;
use super::instrument::RegionSpan;
use super::regions::scan_parallel_regions;
use super::tsan::parse_tsan;
use super::{round_work, ProfileRun, RunStatus, ToolRunner, ToolchainProfile, TsanRun, CANDIDATE_FILE};
use crate::model::{content_hash_parts, CaliperProfile, CandidateCode, HarnessBundle, WorkCell};
use crate::{Error, Result};

#[derive(Debug, Clone, Default)]
pub struct StubToolchain {
    profile: ToolchainProfile,
}

impl StubToolchain {
    pub fn new(profile: ToolchainProfile) -> Self {
        StubToolchain { profile }
    }
}

static SHARED_UPDATE: Lazy<Regex> =
    Lazy::new(|| Regex::new(r"^\s*([A-Za-z_]\w*)\s*(\+\+|--|[-+*/|&^]?=)[^=]?").unwrap());
static DECL: Lazy<Regex> = Lazy::new(|| {
    Regex::new(r"\b(?:int|long|double|float|auto|size_t|unsigned|bool|char|short)\b[\s*&]+([A-Za-z_]\w*)").unwrap()
});

/// First line inside a parallel region that updates a scalar declared
/// outside it without atomic, critical, reduction or private protection.
pub(crate) fn unprotected_update(code: &str) -> Option<(usize, bool)> {
    let lines: Vec<&str> = code.lines().collect();
    let spans = scan_parallel_regions(code).ok()?;
    for span in spans {
        let pragma = lines[span.start_line - 1];
        let body = &lines[span.start_line..span.end_line];
        let mut local: Vec<String> = Vec::new();
        for (off, line) in body.iter().enumerate() {
            for caps in DECL.captures_iter(line) {
                local.push(caps[1].to_owned());
            }
            let Some(caps) = SHARED_UPDATE.captures(line) else {
                continue;
            };
            let var = &caps[1];
            if local.iter().any(|l| l == var) || line.contains(&format!("{var}[")) {
                continue;
            }
            let prev = body[..off]
                .iter()
                .rev()
                .find(|l| !l.trim().is_empty())
                .copied()
                .unwrap_or(pragma);
            let guarded = prev.contains("atomic") || prev.contains("critical");
            let clause = |c: &str| {
                lines[span.start_line - 1..span.end_line]
                    .iter()
                    .filter(|l| l.contains("#pragma"))
                    .any(|l| l.contains(c) && l.contains(var))
            };
            if guarded || clause("reduction") || clause("private") || in_critical_block(body, off) {
                continue;
            }
            let compound = &caps[2] != "=";
            return Some((span.start_line + off + 1, compound));
        }
    }
    None
}

fn in_critical_block(body: &[&str], off: usize) -> bool {
    let mut depth = 0i32;
    for line in body[..off].iter().rev() {
        depth += line.matches('}').count() as i32 - line.matches('{').count() as i32;
        if depth < 0 {
            depth = 0;
            continue;
        }
        if line.contains("#pragma omp critical")
            || line.contains("#pragma omp single")
            || line.contains("#pragma omp master")
        {
            return true;
        }
    }
    false
}

fn warning_block(first: &str, second: &str, line: usize) -> String {
    [
        "==================".to_owned(),
        "WARNING: ThreadSanitizer: data race (pid=4242)".to_owned(),
        format!("  {first} of size 8 at 0x7b0400000010 by thread T1:"),
        format!("    #0 generated /stub/{CANDIDATE_FILE}:{line} (harness+0x1a2b)"),
        "    #1 gomp_thread_start ../../../libgomp/team.c:129 (libgomp.so.1+0x1dc4d)".to_owned(),
        String::new(),
        format!("  {second} of size 8 at 0x7b0400000010 by main thread:"),
        format!("    #0 generated /stub/{CANDIDATE_FILE}:{line} (harness+0x1a2b)"),
        "    #1 main /stub/harness.cc:12 (harness+0x1c3d)".to_owned(),
        String::new(),
        format!("SUMMARY: ThreadSanitizer: data race /stub/{CANDIDATE_FILE}:{line} in generated"),
        "==================\n".to_owned(),
    ]
    .join("\n")
}

/// TSan-shaped stderr for `code`.
pub(crate) fn synthetic_tsan(code: &str) -> String {
    match unprotected_update(code) {
        None => String::new(),
        Some((line, true)) => {
            warning_block("Read", "Previous write", line) + &warning_block("Write", "Previous write", line)
        }
        Some((line, false)) => warning_block("Write", "Previous write", line),
    }
}

fn unit(seed: &str, salt: &str) -> f64 {
    let h = content_hash_parts([seed, salt]);
    u64::from_str_radix(&h[..12], 16).expect("hex") as f64 / (1u64 << 48) as f64
}

/// Caliper-shaped JSON records for one thread count.
pub(crate) fn synthetic_caliper(candidate_id: &str, spans: &[RegionSpan], thread_count: u32) -> String {
    let mut rows = Vec::new();
    for span in spans {
        let label = span.label();
        let base = 70.0 + 29.0 * unit(candidate_id, &label);
        let slope = 12.0 * unit(candidate_id, &format!("{label}/slope"));
        let steps = (thread_count.max(1) as f64 / 4.0).log2().max(0.0);
        let work_pct = (base - slope * steps).clamp(1.0, 100.0);
        let seconds = 0.5 + 4.0 * unit(candidate_id, &format!("{label}/seconds"));
        rows.push(
            serde_json::json!({"region": label, "omp.state": "work", "sum#time.duration": seconds * work_pct / 100.0}),
        );
        rows.push(serde_json::json!({"region": label, "omp.state": "barrier", "sum#time.duration": seconds * (100.0 - work_pct) / 100.0}));
    }
    serde_json::Value::Array(rows).to_string()
}

impl ToolRunner for StubToolchain {
    fn is_live(&self) -> bool {
        false
    }

    fn profile(&self) -> &ToolchainProfile {
        &self.profile
    }

    fn run_tsan(&self, _bundle: &HarnessBundle, candidate: &CandidateCode, _work_root: &Path) -> Result<TsanRun> {
        let n = self.profile.repeat_count.max(1);
        let mut raw = String::new();
        let stderr = synthetic_tsan(&candidate.source);
        for i in 1..=n {
            let code = if stderr.is_empty() { 0 } else { 66 };
            raw.push_str(&format!("----- tsan run {i} of {n} (exit {code}) -----\n"));
            raw.push_str(&stderr);
        }
        let parse = parse_tsan(&raw, CANDIDATE_FILE);
        Ok(TsanRun {
            raw,
            parse,
            status: RunStatus::Ok,
            detail: "stubbed".into(),
        })
    }

    fn validate_correctness(&self, _: &HarnessBundle, candidate: &CandidateCode, _: &Path) -> Result<bool> {
        Ok(candidate.source.contains("generated"))
    }

    fn profile_candidate(
        &self,
        _bundle: &HarnessBundle,
        candidate: &CandidateCode,
        spans: &[RegionSpan],
        thread_counts: &[u32],
        _work_root: &Path,
    ) -> Result<ProfileRun> {
        let mut profile = CaliperProfile::new(thread_counts.iter().copied());
        let mut seconds: BTreeMap<String, f64> = BTreeMap::new();
        for &tc in thread_counts {
            let raw = synthetic_caliper(&candidate.id, spans, tc);
            let sample = parse_caliper(&raw, spans, &Default::default())?;
            for (label, cell) in sample.work_percent {
                let cell = match cell {
                    WorkCell::Measured(v) => WorkCell::Measured(round_work(v)),
                    WorkCell::Failed => WorkCell::Failed,
                };
                *seconds.entry(label.clone()).or_default() += sample.seconds.get(&label).copied().unwrap_or(0.0);
                profile.insert(label, tc, cell);
            }
        }
        Ok(ProfileRun {
            profile,
            region_seconds: seconds,
        })
    }

    fn compile_check(&self, _: &HarnessBundle, source: &str, _: &Path) -> Result<()> {
        let open = source.matches('{').count();
        let close = source.matches('}').count();
        if open != close || source.trim().is_empty() {
            return Err(Error::Compile {
                log: format!("generated.cc: error: unbalanced braces ({open} opening, {close} closing)"),
            });
        }
        Ok(())
    }
}
