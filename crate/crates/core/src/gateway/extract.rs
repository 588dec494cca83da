//! Pulling tagged and fenced blocks out of model responses.

use regex::Regex;
use serde_json::Value;

use crate::model::parse_lenient_json;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TaggedBlocks {
    /// Block bodies in tag-number order.
    pub blocks: Vec<String>,
    /// Tag number of each entry in `blocks`.
    pub numbers: Vec<u32>,
    /// Numbers in `1..=max` that had no block.
    pub missing: Vec<u32>,
}

/// Extracts `<prefix_1>..</prefix_1>`, `<prefix_2>..` bodies ordered by tag
/// number, falling back to repeated unnumbered `<prefix>..</prefix>` blocks.
pub fn extract_tagged_blocks(text: &str, tag_prefix: &str) -> Result<TaggedBlocks> {
    let open = Regex::new(&format!(r"<{}_(\d+)>", regex::escape(tag_prefix))).expect("valid tag regex");
    let opens: Vec<(u32, usize, usize)> = open
        .captures_iter(text)
        .filter_map(|c| {
            let m = c.get(0)?;
            Some((c[1].parse().ok()?, m.start(), m.end()))
        })
        .collect();

    let mut found: Vec<(u32, String)> = Vec::new();
    for (i, &(n, _, body_start)) in opens.iter().enumerate() {
        if found.iter().any(|(k, _)| *k == n) {
            continue;
        }
        let close = format!("</{tag_prefix}_{n}>");
        let next_open = opens.get(i + 1).map(|o| o.1).unwrap_or(text.len());
        let body_end = match text[body_start..].find(&close) {
            Some(off) => body_start + off,
            None => next_open,
        };
        found.push((n, text[body_start..body_end].trim().to_owned()));
    }

    if found.is_empty() {
        let open_tag = format!("<{tag_prefix}>");
        let close_tag = format!("</{tag_prefix}>");
        let mut rest = text;
        let mut k = 0;
        while let Some(start) = rest.find(&open_tag) {
            let after = &rest[start + open_tag.len()..];
            let Some(end) = after.find(&close_tag) else { break };
            k += 1;
            found.push((k, after[..end].trim().to_owned()));
            rest = &after[end + close_tag.len()..];
        }
    }

    if found.is_empty() {
        return Err(Error::Format(format!("no <{tag_prefix}_N> blocks found")));
    }
    found.sort_by_key(|(n, _)| *n);
    let max = found.last().map(|(n, _)| *n).unwrap_or(0);
    let missing = (1..=max).filter(|n| !found.iter().any(|(k, _)| k == n)).collect();
    let (numbers, blocks) = found.into_iter().unzip();
    Ok(TaggedBlocks {
        blocks,
        numbers,
        missing,
    })
}

/// Body of the first `<tag>..</tag>` block, trimmed.
pub fn extract_tag(text: &str, tag: &str) -> Option<String> {
    let open = format!("<{tag}>");
    let close = format!("</{tag}>");
    let start = text.find(&open)? + open.len();
    let end = text[start..].find(&close)? + start;
    Some(text[start..end].trim().to_owned())
}

/// Splits a reasoning response into its think and answer bodies. A missing
/// opening `<think>` is tolerated (reasoning models often omit it); the
/// answer is searched for after the think block.
pub fn split_think_answer(text: &str) -> (Option<String>, Option<String>) {
    let close_think = text.find("</think>");
    let think = match (text.find("<think>"), close_think) {
        (Some(open), Some(close)) if open < close => Some(text[open + "<think>".len()..close].trim().to_owned()),
        (None, Some(close)) => Some(text[..close].trim().to_owned()),
        _ => None,
    };
    let rest = match close_think {
        Some(close) => &text[close + "</think>".len()..],
        None => text,
    };
    let answer = rest.find("<answer>").map(|open| {
        let body = &rest[open + "<answer>".len()..];
        match body.find("</answer>") {
            Some(end) => body[..end].trim().to_owned(),
            None => body.trim().to_owned(),
        }
    });
    (think, answer)
}

fn lang_matches(lang: &str, hint: &str) -> bool {
    const CPP: &[&str] = &["cpp", "c++", "cc", "cxx", "c", "h", "hpp"];
    let lang = lang.to_ascii_lowercase();
    let hint = hint.to_ascii_lowercase();
    lang == hint || (CPP.contains(&hint.as_str()) && CPP.contains(&lang.as_str()))
}

fn fenced_blocks(text: &str) -> Vec<(String, String)> {
    let mut blocks = Vec::new();
    let mut current: Option<(String, Vec<&str>)> = None;
    for line in text.lines() {
        let trimmed = line.trim_start();
        match current.take() {
            None => {
                if let Some(info) = trimmed.strip_prefix("```") {
                    let lang = info.split_whitespace().next().unwrap_or("").to_owned();
                    current = Some((lang, Vec::new()));
                }
            }
            Some((lang, mut body)) => {
                if trimmed.trim_end() == "```" {
                    blocks.push((lang, body.join("\n")));
                } else {
                    body.push(line);
                    current = Some((lang, body));
                }
            }
        }
    }
    // a truncated response can leave the last fence open
    if let Some((lang, body)) = current {
        if !body.is_empty() {
            blocks.push((lang, body.join("\n")));
        }
    }
    blocks
}

/// First fenced block whose info string matches `language_hint`; with no
/// match, the first unlabeled block.
pub fn extract_code_block(text: &str, language_hint: Option<&str>) -> Result<String> {
    let blocks = fenced_blocks(text);
    let pick = match language_hint {
        Some(hint) => blocks
            .iter()
            .find(|(lang, _)| lang_matches(lang, hint))
            .or_else(|| blocks.iter().find(|(lang, _)| lang.is_empty())),
        None => blocks.first(),
    };
    pick.map(|(_, body)| body.clone())
        .ok_or_else(|| Error::Format("no fenced code block found".into()))
}

/// Parses the first JSON fenced block, or the whole text when there is none.
pub fn extract_json_block(text: &str) -> Result<Value> {
    match extract_code_block(text, Some("json")) {
        Ok(body) => parse_lenient_json(&body),
        Err(_) => parse_lenient_json(text.trim()),
    }
}
