//! Parallel-region identification: model-proposed spans with a textual
//! fallback.

use serde_json::Value;

use super::instrument::{validate_spans, RegionSpan};
use crate::gateway::{extract_json_block, Gateway, Message, SamplingParams};
use crate::prompts::Templates;
use crate::{Error, Result};

pub const REGION_ATTEMPTS: u32 = 3;

fn is_parallel_pragma(line: &str) -> bool {
    let t = line.trim_start();
    let Some(rest) = t.strip_prefix('#') else { return false };
    let mut words = rest.split_whitespace();
    words.next() == Some("pragma")
        && words.next() == Some("omp")
        && words
            .next()
            .is_some_and(|w| w == "parallel" || w.starts_with("parallel("))
}

/// Finds every `#pragma omp parallel ...` and the statement it governs:
/// a braced block ends at its matching brace, anything else at the first
/// `;` outside parentheses. Returns spans in pragma order.
pub fn scan_parallel_regions(code: &str) -> Result<Vec<RegionSpan>> {
    let lines: Vec<&str> = code.lines().collect();
    let mut spans = Vec::new();
    for (i, line) in lines.iter().enumerate() {
        if !is_parallel_pragma(line) {
            continue;
        }
        let mut body = i + 1;
        let mut cont = i;
        while lines[cont].trim_end().ends_with('\\') && cont + 1 < lines.len() {
            cont += 1;
            body = cont + 1;
        }
        let end = statement_end(&lines, body)
            .ok_or_else(|| Error::Region(format!("no statement follows the parallel pragma on line {}", i + 1)))?;
        spans.push(RegionSpan::new(i + 1, end + 1));
    }
    validate_spans(&spans, lines.len())?;
    Ok(spans)
}

/// 0-based index of the line on which the statement starting at `from` ends.
fn statement_end(lines: &[&str], from: usize) -> Option<usize> {
    let mut parens = 0i32;
    let mut braces = 0i32;
    let mut in_block_comment = false;
    for (idx, line) in lines.iter().enumerate().skip(from) {
        if !in_block_comment && line.trim_start().starts_with('#') {
            continue;
        }
        let chars: Vec<char> = line.chars().collect();
        let mut k = 0;
        while k < chars.len() {
            let c = chars[k];
            let next = chars.get(k + 1).copied();
            if in_block_comment {
                if c == '*' && next == Some('/') {
                    in_block_comment = false;
                    k += 1;
                }
                k += 1;
                continue;
            }
            match c {
                '/' if next == Some('/') => break,
                '/' if next == Some('*') => {
                    in_block_comment = true;
                    k += 1;
                }
                '"' | '\'' => {
                    k += 1;
                    while k < chars.len() && chars[k] != c {
                        if chars[k] == '\\' {
                            k += 1;
                        }
                        k += 1;
                    }
                }
                '(' => parens += 1,
                ')' => parens -= 1,
                '{' => braces += 1,
                '}' => {
                    braces -= 1;
                    if braces == 0 && parens == 0 {
                        return Some(idx);
                    }
                    if braces < 0 {
                        return None;
                    }
                }
                ';' if parens == 0 && braces == 0 => return Some(idx),
                _ => {}
            }
            k += 1;
        }
    }
    None
}

/// Reads `[{"start": s, "end": e}, ...]` and checks it against the code:
/// valid span set, and every start line is an OpenMP pragma.
pub fn spans_from_json(value: &Value, code: &str) -> Result<Vec<RegionSpan>> {
    let items = value
        .as_array()
        .ok_or_else(|| Error::Json("region answer is not a JSON array".into()))?;
    let lines: Vec<&str> = code.lines().collect();
    let mut spans = Vec::with_capacity(items.len());
    for item in items {
        let get = |k: &str| item.get(k).and_then(Value::as_u64).map(|v| v as usize);
        let (Some(s), Some(e)) = (get("start"), get("end")) else {
            return Err(Error::Json(format!("region entry without integer start/end: {item}")));
        };
        spans.push(RegionSpan::new(s, e));
    }
    let spans = validate_spans(&spans, lines.len())?;
    for s in &spans {
        if !lines[s.start_line - 1].contains("#pragma omp") {
            return Err(Error::InvalidSpans(format!(
                "line {} is not an OpenMP pragma",
                s.start_line
            )));
        }
    }
    Ok(spans)
}

/// Asks `endpoint` for the parallel regions of `code`, re-sampling up to
/// [`REGION_ATTEMPTS`] times on unusable answers, then falls back to
/// [`scan_parallel_regions`]. With no gateway the scan is used directly.
pub fn identify_regions(code: &str, model: Option<(&Gateway, &str)>, templates: &Templates) -> Result<Vec<RegionSpan>> {
    if code.trim().is_empty() {
        return Err(Error::Region("code is empty".into()));
    }
    if let Some((gateway, endpoint)) = model {
        let messages = [Message::user(templates.regions(code))];
        let params = SamplingParams::default();
        for attempt in 0..REGION_ATTEMPTS {
            let reply = gateway.complete_sample(endpoint, &messages, &params, attempt)?;
            match extract_json_block(&reply).and_then(|v| spans_from_json(&v, code)) {
                Ok(spans) => return Ok(spans),
                Err(e) => log::debug!("region answer {attempt} rejected: {e}"),
            }
        }
        log::info!("region model answers unusable; using the pragma scan");
    }
    scan_parallel_regions(code).map_err(|e| Error::Region(format!("fallback scan failed: {e}")))
}
