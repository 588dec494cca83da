use std::fmt;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::{content_hash, find_json_array};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RaceType {
    ReadWrite,
    WriteWrite,
}

impl RaceType {
    /// Wording used inside answer blocks.
    pub fn answer_label(self) -> &'static str {
        match self {
            RaceType::ReadWrite => "read/write race",
            RaceType::WriteWrite => "write/write race",
        }
    }

    pub fn from_label(label: &str) -> Option<Self> {
        let l = label.trim().to_ascii_lowercase();
        let l = l.strip_suffix(" race").unwrap_or(&l);
        match l.replace(['_', '-'], "/").as_str() {
            "read/write" | "write/read" => Some(RaceType::ReadWrite),
            "write/write" => Some(RaceType::WriteWrite),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct CodeLocation {
    pub file: String,
    pub line: u32,
}

impl CodeLocation {
    pub fn new(file: impl Into<String>, line: u32) -> Self {
        CodeLocation {
            file: file.into(),
            line,
        }
    }

    /// Parses `file:line` or `file:line:column`.
    pub fn parse(text: &str) -> Option<Self> {
        let text = text.trim();
        let (rest, last) = text.rsplit_once(':')?;
        let last: u32 = last.parse().ok()?;
        // file:line:col -> drop the column
        if let Some((file, line)) = rest.rsplit_once(':') {
            if let Ok(line) = line.parse::<u32>() {
                if !file.is_empty() {
                    return Some(CodeLocation::new(file, line));
                }
            }
        }
        if rest.is_empty() {
            return None;
        }
        Some(CodeLocation::new(rest, last))
    }
}

impl fmt::Display for CodeLocation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.file, self.line)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct RaceFinding {
    pub race_type: RaceType,
    pub code_locations: Vec<CodeLocation>,
}

impl RaceFinding {
    pub fn new(race_type: RaceType, code_locations: Vec<CodeLocation>) -> Self {
        RaceFinding {
            race_type,
            code_locations,
        }
    }
}

/// Canonical list of races. An empty list means race-free.
#[derive(Debug, Clone, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct RaceReport {
    pub findings: Vec<RaceFinding>,
}

impl RaceReport {
    pub fn race_free() -> Self {
        RaceReport::default()
    }

    pub fn is_race_free(&self) -> bool {
        self.findings.is_empty()
    }

    pub fn content_hash(&self) -> String {
        content_hash(serde_json::to_vec(self).expect("race report serializes"))
    }

    pub fn is_canonical(&self) -> bool {
        canonicalize_race_report(self.findings.clone()) == *self
    }
}

/// Sorts and deduplicates findings. Locations inside a finding are sorted
/// and deduplicated; findings left without a valid location are dropped.
pub fn canonicalize_race_report(findings: Vec<RaceFinding>) -> RaceReport {
    let mut out: Vec<RaceFinding> = findings
        .into_iter()
        .filter_map(|mut f| {
            f.code_locations.retain(|l| l.line >= 1 && !l.file.is_empty());
            f.code_locations.sort();
            f.code_locations.dedup();
            (!f.code_locations.is_empty()).then_some(f)
        })
        .collect();
    out.sort();
    out.dedup();
    RaceReport { findings: out }
}

#[derive(Serialize)]
struct AnswerEntry<'a> {
    #[serde(rename = "type")]
    kind: &'a str,
    code_locations: Vec<String>,
}

/// Renders the JSON list that goes inside an answer block.
pub fn render_race_answer(report: &RaceReport) -> String {
    if report.findings.is_empty() {
        return "[]".to_owned();
    }
    let entries: Vec<AnswerEntry<'_>> = report
        .findings
        .iter()
        .map(|f| AnswerEntry {
            kind: f.race_type.answer_label(),
            code_locations: f.code_locations.iter().map(ToString::to_string).collect(),
        })
        .collect();
    serde_json::to_string_pretty(&entries).expect("answer entries serialize")
}

fn looks_like_race_list(items: &[Value]) -> bool {
    items.iter().all(|item| {
        item.as_object()
            .map(|o| o.contains_key("type") && o.contains_key("code_locations"))
            .unwrap_or(false)
    })
}

fn finding_from_value(item: &Value) -> Result<RaceFinding> {
    let obj = item.as_object().expect("checked by looks_like_race_list");
    let label = obj["type"]
        .as_str()
        .ok_or_else(|| Error::Format("race `type` is not a string".into()))?;
    let race_type = RaceType::from_label(label).ok_or_else(|| Error::Format(format!("unknown race type `{label}`")))?;
    let locations = match &obj["code_locations"] {
        Value::Array(locs) => locs
            .iter()
            .map(|l| {
                l.as_str()
                    .and_then(CodeLocation::parse)
                    .ok_or_else(|| Error::Format(format!("bad code location {l}")))
            })
            .collect::<Result<Vec<_>>>()?,
        Value::String(s) => {
            vec![CodeLocation::parse(s).ok_or_else(|| Error::Format(format!("bad code location `{s}`")))?]
        }
        other => return Err(Error::Format(format!("bad code_locations {other}"))),
    };
    Ok(RaceFinding::new(race_type, locations))
}

/// Reads a race list out of free text: the first bracketed list whose
/// elements all carry `type` and `code_locations` (or an empty list).
pub fn parse_race_answer(text: &str) -> Result<RaceReport> {
    let items = find_json_array(text, looks_like_race_list)
        .ok_or_else(|| Error::Format("no race list found in answer".into()))?;
    let findings = items.iter().map(finding_from_value).collect::<Result<Vec<_>>>()?;
    Ok(canonicalize_race_report(findings))
}
