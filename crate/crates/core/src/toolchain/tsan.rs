//! ThreadSanitizer stderr parsing.

use once_cell::sync::Lazy;
use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::model::{canonicalize_race_report, CodeLocation, RaceFinding, RaceReport, RaceType};

/// Something in the output that did not become a finding.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TsanDiagnostic {
    pub kind: String,
    pub detail: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TsanParse {
    pub report: RaceReport,
    pub diagnostics: Vec<TsanDiagnostic>,
    /// Locations attributed outside the candidate file.
    pub non_candidate: Vec<CodeLocation>,
    pub warning_count: usize,
}

static WARNING: Lazy<Regex> =
    Lazy::new(|| Regex::new(r"^WARNING: ThreadSanitizer: (.+?)(?: \(pid=\d+\))?\s*$").unwrap());
static ACCESS: Lazy<Regex> =
    Lazy::new(|| Regex::new(r"(?i)^\s*(previous\s+)?(atomic\s+)?(read|write)\s+of size \d+").unwrap());
static FRAME: Lazy<Regex> = Lazy::new(|| Regex::new(r"^\s*#\d+\s").unwrap());
static FRAME_LOC: Lazy<Regex> = Lazy::new(|| Regex::new(r"\s(\S+?):(\d+)(?::\d+)?(?:\s+\(|\s*$)").unwrap());

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Kind {
    Read,
    Write,
}

struct Access {
    kind: Kind,
    frames: Vec<(String, u32)>,
}

fn is_runtime_path(path: &str) -> bool {
    path.contains("libsanitizer/") || path.contains("compiler-rt/") || path.contains("/tsan/")
}

fn basename(path: &str) -> &str {
    path.rsplit(['/', '\\']).next().unwrap_or(path)
}

fn frame_location(line: &str) -> Option<(String, u32)> {
    let caps = FRAME_LOC.captures_iter(line).last()?;
    let path = caps.get(1)?.as_str();
    let lineno: u32 = caps.get(2)?.as_str().parse().ok()?;
    if lineno == 0 || is_runtime_path(path) {
        return None;
    }
    Some((path.to_owned(), lineno))
}

/// Parses TSan stderr (possibly several concatenated runs) into a canonical
/// report. Each access contributes its innermost frame in
/// `candidate_file_name`, or failing that its innermost located frame, which
/// is then also listed in `non_candidate`. Never panics; anything it cannot
/// use goes to `diagnostics`.
pub fn parse_tsan(raw_output: &str, candidate_file_name: &str) -> TsanParse {
    let candidate = basename(candidate_file_name);
    let lines: Vec<&str> = raw_output.lines().collect();
    let mut out = TsanParse::default();
    let mut findings = Vec::new();

    let mut i = 0;
    while i < lines.len() {
        let Some(caps) = WARNING.captures(lines[i]) else {
            i += 1;
            continue;
        };
        out.warning_count += 1;
        let kind = caps[1].trim().to_owned();
        let start = i;
        i += 1;
        while i < lines.len() && !WARNING.is_match(lines[i]) && !lines[i].starts_with("SUMMARY: ThreadSanitizer") {
            i += 1;
        }
        let block = &lines[start + 1..i];

        if kind != "data race" {
            out.diagnostics.push(TsanDiagnostic {
                kind,
                detail: summary_of(block, lines.get(i)),
            });
            continue;
        }
        match finding_from_block(block, candidate, &mut out.non_candidate) {
            Ok(f) => findings.push(f),
            Err(why) => out.diagnostics.push(TsanDiagnostic {
                kind: "unparsed data race".into(),
                detail: why,
            }),
        }
    }

    out.report = canonicalize_race_report(findings);
    out.non_candidate.sort();
    out.non_candidate.dedup();
    out
}

fn summary_of(block: &[&str], summary: Option<&&str>) -> String {
    match summary {
        Some(s) if s.starts_with("SUMMARY:") => s.trim().to_owned(),
        _ => block.first().map(|l| l.trim().to_owned()).unwrap_or_default(),
    }
}

fn accesses(block: &[&str]) -> Vec<Access> {
    let mut out: Vec<Access> = Vec::new();
    let mut in_stack = false;
    for line in block {
        if let Some(caps) = ACCESS.captures(line) {
            let kind = if caps[3].eq_ignore_ascii_case("write") {
                Kind::Write
            } else {
                Kind::Read
            };
            out.push(Access {
                kind,
                frames: Vec::new(),
            });
            in_stack = true;
            continue;
        }
        if in_stack && FRAME.is_match(line) {
            if let Some(loc) = frame_location(line) {
                out.last_mut().expect("in_stack implies an access").frames.push(loc);
            }
            continue;
        }
        if in_stack && line.trim().starts_with('[') {
            // "[failed to restore the stack]"
            continue;
        }
        in_stack = false;
    }
    out
}

fn finding_from_block(
    block: &[&str],
    candidate: &str,
    non_candidate: &mut Vec<CodeLocation>,
) -> Result<RaceFinding, String> {
    let acc = accesses(block);
    if acc.len() < 2 {
        return Err(format!("expected two accesses, found {}", acc.len()));
    }
    let (cur, prev) = (&acc[0], &acc[1]);
    let race_type = match (cur.kind, prev.kind) {
        (Kind::Write, Kind::Write) => RaceType::WriteWrite,
        (Kind::Read, Kind::Write) | (Kind::Write, Kind::Read) => RaceType::ReadWrite,
        (Kind::Read, Kind::Read) => return Err("two reads cannot race".into()),
    };
    let mut locations = Vec::new();
    for a in [cur, prev] {
        let in_candidate = a.frames.iter().find(|(p, _)| basename(p) == candidate);
        if let Some((path, line)) = in_candidate.or_else(|| a.frames.first()) {
            let loc = CodeLocation::new(basename(path), *line);
            if in_candidate.is_none() {
                non_candidate.push(loc.clone());
            }
            locations.push(loc);
        }
    }
    if locations.is_empty() {
        return Err("no source location in either stack".into());
    }
    Ok(RaceFinding::new(race_type, locations))
}

#[cfg(test)]
mod tests {
    use super::*;

    const DOT_PRODUCT_LOG: &str = "\
==================
WARNING: ThreadSanitizer: data race (pid=10)
  Read of size 8 at 0x7ffe29767370 by thread T1:
    #0 generated(std::vector<double> const&) [clone ._omp_fn.0] /w/abc/generated.cc:14 (harness+0x16da)
    #1 <null> <null> (libgomp.so.1+0x1dc0d)

  Previous write of size 8 at 0x7ffe29767370 by thread T3:
    #0 generated(std::vector<double> const&) [clone ._omp_fn.0] /w/abc/generated.cc:14 (harness+0x1701)

SUMMARY: ThreadSanitizer: data race /w/abc/generated.cc:14 in generated
==================
==================
WARNING: ThreadSanitizer: data race (pid=10)
  Write of size 8 at 0x7ffe29767370 by thread T2:
    #0 generated(std::vector<double> const&) [clone ._omp_fn.0] /w/abc/generated.cc:14 (harness+0x1701)

  Previous write of size 8 at 0x7ffe29767370 by thread T3:
    #0 generated(std::vector<double> const&) [clone ._omp_fn.0] /w/abc/generated.cc:14 (harness+0x1701)

SUMMARY: ThreadSanitizer: data race /w/abc/generated.cc:14 in generated
==================
ThreadSanitizer: reported 2 warnings
";

    #[test]
    fn dot_product_shape() {
        let p = parse_tsan(DOT_PRODUCT_LOG, "generated.cc");
        assert_eq!(p.warning_count, 2);
        let text = crate::model::render_race_answer(&p.report);
        assert_eq!(p.report.findings.len(), 2);
        assert!(text.contains("\"type\": \"read/write race\""));
        assert!(text.contains("\"type\": \"write/write race\""));
        assert!(text.contains("\"generated.cc:14\""));
        assert!(p.diagnostics.is_empty());
    }

    #[test]
    fn empty_output_is_race_free() {
        let p = parse_tsan("", "generated.cc");
        assert!(p.report.is_race_free());
        assert_eq!(p.warning_count, 0);
    }

    #[test]
    fn runtime_frames_are_skipped() {
        let line = "    #0 __tsan_atomic64_fetch_add ../../../../src/libsanitizer/tsan/tsan_interface_atomic.cpp:620 (libtsan.so.0+0x82239)";
        assert_eq!(frame_location(line), None);
        let line = "    #1 main /x/generated.cc:8:13 (a.out+0x1)";
        assert_eq!(frame_location(line), Some(("/x/generated.cc".into(), 8)));
        let line = "    #1 <null> <null> (libgomp.so.1+0x1dc0d)";
        assert_eq!(frame_location(line), None);
    }

    #[test]
    fn other_warning_kinds_become_diagnostics() {
        let text = "WARNING: ThreadSanitizer: thread leak (pid=1)\n  Thread T1 finished\nSUMMARY: ThreadSanitizer: thread leak x.cc:3 in main\n";
        let p = parse_tsan(text, "generated.cc");
        assert!(p.report.is_race_free());
        assert_eq!(p.diagnostics.len(), 1);
        assert_eq!(p.diagnostics[0].kind, "thread leak");
    }
}
