//! Caliper region markers: span validation, insertion and removal.

use once_cell::sync::Lazy;
use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

pub const CALIPER_HEADER: &str = "#include <caliper/cali.h>";

/// Inclusive 1-based line range of one parallel region.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct RegionSpan {
    #[serde(alias = "start")]
    pub start_line: usize,
    #[serde(alias = "end")]
    pub end_line: usize,
}

impl RegionSpan {
    pub fn new(start_line: usize, end_line: usize) -> Self {
        RegionSpan { start_line, end_line }
    }

    /// `region_<start>_<end>`
    pub fn label(&self) -> String {
        format!("region_{}_{}", self.start_line, self.end_line)
    }

    pub fn len(&self) -> usize {
        self.end_line + 1 - self.start_line
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Strict containment: `other` lies inside `self` and is not equal to it.
    pub fn strictly_contains(&self, other: &RegionSpan) -> bool {
        self != other && self.start_line <= other.start_line && other.end_line <= self.end_line
    }

    fn disjoint(&self, other: &RegionSpan) -> bool {
        self.end_line < other.start_line || other.end_line < self.start_line
    }
}

/// Checks the span-set invariant against a file of `line_count` lines and
/// returns the spans sorted by start line (outer first on ties).
pub fn validate_spans(spans: &[RegionSpan], line_count: usize) -> Result<Vec<RegionSpan>> {
    for s in spans {
        if s.start_line < 1 || s.start_line > s.end_line || s.end_line > line_count {
            return Err(Error::SpanOutOfRange {
                start: s.start_line,
                end: s.end_line,
                line_count,
            });
        }
    }
    for (i, a) in spans.iter().enumerate() {
        for b in &spans[i + 1..] {
            if !(a.disjoint(b) || a.strictly_contains(b) || b.strictly_contains(a)) {
                return Err(Error::InvalidSpans(format!(
                    "{} and {} overlap without nesting",
                    a.label(),
                    b.label()
                )));
            }
        }
    }
    let mut sorted = spans.to_vec();
    sorted.sort_by(|a, b| a.start_line.cmp(&b.start_line).then(b.end_line.cmp(&a.end_line)));
    Ok(sorted)
}

static MARKER: Lazy<Regex> =
    Lazy::new(|| Regex::new(r#"^\s*CALI_MARK_(BEGIN|END)\("(region_\d+_\d+)"\);\s*$"#).unwrap());

fn content(line: &str) -> &str {
    line.trim_end_matches(['\n', '\r'])
}

fn indentation(line: &str) -> &str {
    let c = content(line);
    &c[..c.len() - c.trim_start().len()]
}

/// Inserts `CALI_MARK_BEGIN("region_s_e")` before line `s` and the matching
/// END after line `e` for every span, with the indentation of line `s`, and
/// puts the Caliper header on the first line. Equivalent to inserting
/// bottom-up, larger spans first: BEGINs on one line are ordered outer to
/// inner, ENDs inner to outer.
pub fn instrument_with_caliper(code: &str, spans: &[RegionSpan]) -> Result<String> {
    let lines: Vec<&str> = code.split_inclusive('\n').collect();
    let spans = validate_spans(spans, lines.len())?;
    if lines.iter().any(|l| MARKER.is_match(content(l))) || lines.first().map(|l| content(l)) == Some(CALIPER_HEADER) {
        return Err(Error::Region("code already carries Caliper markers".into()));
    }
    let eol = if lines.first().is_some_and(|l| l.ends_with("\r\n")) {
        "\r\n"
    } else {
        "\n"
    };

    let mut out: Vec<String> = Vec::with_capacity(lines.len() + 2 * spans.len() + 1);
    out.push(format!("{CALIPER_HEADER}{eol}"));
    for (idx, line) in lines.iter().enumerate() {
        let n = idx + 1;
        // outer first: larger end line first among spans opening here
        let mut opening: Vec<&RegionSpan> = spans.iter().filter(|s| s.start_line == n).collect();
        opening.sort_by_key(|s| std::cmp::Reverse(s.end_line));
        for s in opening {
            out.push(format!(
                "{}CALI_MARK_BEGIN(\"{}\");{eol}",
                indentation(lines[s.start_line - 1]),
                s.label()
            ));
        }
        out.push((*line).to_owned());
        // inner first: later start line first among spans closing here
        let mut closing: Vec<&RegionSpan> = spans.iter().filter(|s| s.end_line == n).collect();
        closing.sort_by_key(|s| std::cmp::Reverse(s.start_line));
        for s in closing {
            let last = out.last_mut().expect("pushed the source line");
            if !last.ends_with('\n') {
                last.push_str(eol);
            }
            out.push(format!(
                "{}CALI_MARK_END(\"{}\");{eol}",
                indentation(lines[s.start_line - 1]),
                s.label()
            ));
        }
    }
    if !code.is_empty() && !code.ends_with('\n') {
        let last = out.last_mut().expect("non-empty");
        let trimmed = last.trim_end_matches(['\n', '\r']).len();
        last.truncate(trimmed);
    }
    Ok(out.concat())
}

/// Removes the header line and every marker line written by
/// [`instrument_with_caliper`].
pub fn strip_caliper_markers(code: &str) -> String {
    let mut lines: Vec<&str> = code.split_inclusive('\n').collect();
    if lines.first().map(|l| content(l)) == Some(CALIPER_HEADER) {
        lines.remove(0);
    }
    let mut kept: Vec<String> = lines
        .into_iter()
        .filter(|l| !MARKER.is_match(content(l)))
        .map(str::to_owned)
        .collect();
    if !code.ends_with('\n') {
        if let Some(last) = kept.last_mut() {
            let trimmed = last.trim_end_matches(['\n', '\r']).len();
            last.truncate(trimmed);
        }
    }
    kept.concat()
}

/// Checks that every BEGIN has one END with the same label and that
/// markers nest; returns labels in BEGIN order.
pub fn check_marker_nesting(code: &str) -> Result<Vec<String>> {
    let mut stack: Vec<String> = Vec::new();
    let mut seen = Vec::new();
    for (i, line) in code.lines().enumerate() {
        let Some(caps) = MARKER.captures(line) else { continue };
        let label = caps[2].to_owned();
        if &caps[1] == "BEGIN" {
            if seen.contains(&label) {
                return Err(Error::InvalidSpans(format!("line {}: {label} opened twice", i + 1)));
            }
            seen.push(label.clone());
            stack.push(label);
        } else {
            match stack.pop() {
                Some(open) if open == label => {}
                Some(open) => {
                    return Err(Error::InvalidSpans(format!(
                        "line {}: END of {label} while {open} is innermost",
                        i + 1
                    )))
                }
                None => {
                    return Err(Error::InvalidSpans(format!(
                        "line {}: END of {label} without BEGIN",
                        i + 1
                    )))
                }
            }
        }
    }
    if let Some(open) = stack.pop() {
        return Err(Error::InvalidSpans(format!("{open} is never closed")));
    }
    Ok(seen)
}

/// Source text of each span, keyed by label.
pub fn region_snippets(code: &str, spans: &[RegionSpan]) -> std::collections::BTreeMap<String, String> {
    let lines: Vec<&str> = code.lines().collect();
    spans
        .iter()
        .filter(|s| s.start_line >= 1 && s.end_line <= lines.len() && s.start_line <= s.end_line)
        .map(|s| (s.label(), lines[s.start_line - 1..s.end_line].join("\n")))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ten_lines() -> String {
        (1..=12).map(|i| format!("    line{i}\n")).collect()
    }

    #[test]
    fn empty_span_list_adds_only_header() {
        let code = "int main() {}\n";
        let out = instrument_with_caliper(code, &[]).unwrap();
        assert_eq!(out, format!("{CALIPER_HEADER}\n{code}"));
    }

    #[test]
    fn nested_order() {
        let code = ten_lines();
        let out = instrument_with_caliper(&code, &[RegionSpan::new(5, 9), RegionSpan::new(3, 12)]).unwrap();
        let markers: Vec<&str> = out.lines().filter(|l| l.contains("CALI_MARK")).map(str::trim).collect();
        assert_eq!(
            markers,
            vec![
                r#"CALI_MARK_BEGIN("region_3_12");"#,
                r#"CALI_MARK_BEGIN("region_5_9");"#,
                r#"CALI_MARK_END("region_5_9");"#,
                r#"CALI_MARK_END("region_3_12");"#,
            ]
        );
        assert_eq!(strip_caliper_markers(&out), code);
        assert_eq!(check_marker_nesting(&out).unwrap(), vec!["region_3_12", "region_5_9"]);
    }

    #[test]
    fn overlapping_spans_rejected() {
        let e = validate_spans(&[RegionSpan::new(2, 6), RegionSpan::new(4, 9)], 10).unwrap_err();
        assert!(matches!(e, Error::InvalidSpans(_)));
        let e = validate_spans(&[RegionSpan::new(2, 6), RegionSpan::new(2, 6)], 10).unwrap_err();
        assert!(matches!(e, Error::InvalidSpans(_)));
        let e = instrument_with_caliper("a\nb\n", &[RegionSpan::new(1, 3)]).unwrap_err();
        assert!(matches!(e, Error::SpanOutOfRange { .. }));
    }

    #[test]
    fn missing_final_newline_round_trips() {
        let code = "a\n  b\n  c";
        let out = instrument_with_caliper(code, &[RegionSpan::new(2, 3)]).unwrap();
        assert_eq!(out, "#include <caliper/cali.h>\na\n  CALI_MARK_BEGIN(\"region_2_3\");\n  b\n  c\n  CALI_MARK_END(\"region_2_3\");");
        assert_eq!(strip_caliper_markers(&out), code);
    }

    #[test]
    fn crlf_round_trips() {
        let code = "a\r\nb\r\n";
        let out = instrument_with_caliper(code, &[RegionSpan::new(1, 2)]).unwrap();
        assert!(out.contains("CALI_MARK_END(\"region_1_2\");\r\n"));
        assert_eq!(strip_caliper_markers(&out), code);
    }

    #[test]
    fn broken_nesting_detected() {
        let bad = "CALI_MARK_BEGIN(\"region_1_5\");\nCALI_MARK_BEGIN(\"region_2_3\");\nCALI_MARK_END(\"region_1_5\");\nCALI_MARK_END(\"region_2_3\");\n";
        assert!(check_marker_nesting(bad).is_err());
        assert!(check_marker_nesting("CALI_MARK_BEGIN(\"region_1_5\");\n").is_err());
    }

    #[test]
    fn snippets_by_label() {
        let s = region_snippets("a\nb\nc\n", &[RegionSpan::new(2, 3)]);
        assert_eq!(s["region_2_3"], "b\nc");
    }
}
