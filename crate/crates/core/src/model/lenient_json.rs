//! JSON reading that tolerates the Python-style single-quoted strings models
//! tend to copy from prompts, and that can dig a list out of surrounding prose.

use serde_json::Value;

use crate::{Error, Result};

/// Rewrites single-quoted strings into double-quoted ones. Text inside
/// double-quoted strings is copied untouched.
fn requote(text: &str) -> String {
    let mut out = String::with_capacity(text.len());
    let mut chars = text.chars();
    while let Some(c) = chars.next() {
        match c {
            '"' => {
                out.push('"');
                while let Some(n) = chars.next() {
                    out.push(n);
                    if n == '\\' {
                        if let Some(esc) = chars.next() {
                            out.push(esc);
                        }
                    } else if n == '"' {
                        break;
                    }
                }
            }
            '\'' => {
                out.push('"');
                while let Some(n) = chars.next() {
                    match n {
                        '\\' => match chars.next() {
                            Some('\'') => out.push('\''),
                            Some(esc) => {
                                out.push('\\');
                                out.push(esc);
                            }
                            None => out.push('\\'),
                        },
                        '"' => out.push_str("\\\""),
                        '\'' => break,
                        other => out.push(other),
                    }
                }
                out.push('"');
            }
            other => out.push(other),
        }
    }
    out
}

/// Parses JSON, accepting single-quoted strings.
pub fn parse_lenient_json(text: &str) -> Result<Value> {
    match serde_json::from_str(text) {
        Ok(v) => Ok(v),
        Err(first) => serde_json::from_str(&requote(text)).map_err(|_| Error::Json(first.to_string())),
    }
}

/// Returns the byte range of the bracketed value opening at `start`, if it
/// closes.
fn balanced_end(text: &str, start: usize) -> Option<usize> {
    let mut depth = 0usize;
    let mut quote: Option<char> = None;
    let mut escaped = false;
    for (offset, c) in text[start..].char_indices() {
        if let Some(q) = quote {
            if escaped {
                escaped = false;
            } else if c == '\\' {
                escaped = true;
            } else if c == q {
                quote = None;
            }
            continue;
        }
        match c {
            '"' | '\'' => quote = Some(c),
            '[' | '{' => depth += 1,
            ']' | '}' => {
                depth = depth.checked_sub(1)?;
                if depth == 0 {
                    return Some(start + offset + c.len_utf8());
                }
            }
            _ => {}
        }
    }
    None
}

/// Finds the first `[...]` span in `text` that parses as a JSON array and
/// satisfies `accept`.
pub fn find_json_array(text: &str, accept: impl Fn(&[Value]) -> bool) -> Option<Vec<Value>> {
    for (idx, c) in text.char_indices() {
        if c != '[' {
            continue;
        }
        let Some(end) = balanced_end(text, idx) else {
            continue;
        };
        if let Ok(Value::Array(items)) = parse_lenient_json(&text[idx..end]) {
            if accept(&items) {
                return Some(items);
            }
        }
    }
    None
}
