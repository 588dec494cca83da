use std::collections::{BTreeMap, BTreeSet};

use once_cell::sync::Lazy;
use regex::Regex;
use serde::{Deserialize, Serialize};

use super::content_hash;
use crate::{Error, Result};

/// One (region, thread count) cell of a profile.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WorkCell {
    Measured(f64),
    Failed,
}

impl WorkCell {
    pub fn value(self) -> Option<f64> {
        match self {
            WorkCell::Measured(v) => Some(v),
            WorkCell::Failed => None,
        }
    }
}

/// Work percentages per labelled region and thread count.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CaliperProfile {
    pub thread_counts: Vec<u32>,
    #[serde(with = "string_keys")]
    pub entries: BTreeMap<String, BTreeMap<u32, WorkCell>>,
}

/// Thread-count keys as strings, so profiles survive buffered
/// (internally tagged) deserialization.
mod string_keys {
    use std::collections::BTreeMap;

    use serde::de::Error as _;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    use super::WorkCell;

    type Entries = BTreeMap<String, BTreeMap<u32, WorkCell>>;

    pub fn serialize<S: Serializer>(entries: &Entries, s: S) -> Result<S::Ok, S::Error> {
        let out: BTreeMap<&str, BTreeMap<String, WorkCell>> = entries
            .iter()
            .map(|(r, cells)| (r.as_str(), cells.iter().map(|(t, c)| (t.to_string(), *c)).collect()))
            .collect();
        out.serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Entries, D::Error> {
        let raw = BTreeMap::<String, BTreeMap<String, WorkCell>>::deserialize(d)?;
        raw.into_iter()
            .map(|(r, cells)| {
                let cells = cells
                    .into_iter()
                    .map(|(t, c)| {
                        t.parse::<u32>()
                            .map(|t| (t, c))
                            .map_err(|_| D::Error::custom(format!("bad thread count `{t}`")))
                    })
                    .collect::<Result<_, _>>()?;
                Ok((r, cells))
            })
            .collect()
    }
}

/// Orders `region_<s>_<e>` labels by line numbers, anything else after them.
pub(crate) fn region_sort_key(label: &str) -> (u64, u64, String) {
    let parsed = label.strip_prefix("region_").and_then(|rest| {
        let (s, e) = rest.split_once('_')?;
        Some((s.parse().ok()?, e.parse().ok()?))
    });
    match parsed {
        Some((s, e)) => (s, e, String::new()),
        None => (u64::MAX, u64::MAX, label.to_owned()),
    }
}

impl CaliperProfile {
    pub fn new(thread_counts: impl IntoIterator<Item = u32>) -> Self {
        let mut tcs: Vec<u32> = thread_counts.into_iter().collect();
        tcs.sort_unstable();
        tcs.dedup();
        CaliperProfile {
            thread_counts: tcs,
            entries: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, region: impl Into<String>, thread_count: u32, cell: WorkCell) {
        self.entries
            .entry(region.into())
            .or_default()
            .insert(thread_count, cell);
    }

    pub fn get(&self, region: &str, thread_count: u32) -> Option<WorkCell> {
        self.entries.get(region)?.get(&thread_count).copied()
    }

    /// Region labels in source order.
    pub fn regions(&self) -> Vec<&str> {
        let mut labels: Vec<&str> = self.entries.keys().map(String::as_str).collect();
        labels.sort_by_key(|l| region_sort_key(l));
        labels
    }

    /// Every cell of the cross product is present and in [0, 100].
    pub fn validate(&self) -> std::result::Result<(), String> {
        if self.thread_counts.is_empty() {
            return Err("no thread counts".into());
        }
        for (region, cells) in &self.entries {
            for tc in &self.thread_counts {
                match cells.get(tc) {
                    None => return Err(format!("{region} has no cell for {tc} threads")),
                    Some(WorkCell::Measured(v)) if !(0.0..=100.0).contains(v) => {
                        return Err(format!("{region}@{tc}: {v} outside [0, 100]"))
                    }
                    _ => {}
                }
            }
            if cells.keys().any(|tc| !self.thread_counts.contains(tc)) {
                return Err(format!("{region} has cells for unlisted thread counts"));
            }
        }
        Ok(())
    }

    /// Valid, non-empty and without failed cells.
    pub fn is_complete(&self) -> bool {
        self.validate().is_ok()
            && !self.entries.is_empty()
            && self
                .entries
                .values()
                .all(|cells| cells.values().all(|c| matches!(c, WorkCell::Measured(_))))
    }

    pub fn content_hash(&self) -> String {
        content_hash(serde_json::to_vec(self).expect("profile serializes"))
    }

    /// Unweighted mean work% over regions measured at `thread_count`.
    pub fn region_mean(&self, thread_count: u32) -> Option<f64> {
        let values: Vec<f64> = self
            .entries
            .values()
            .filter_map(|cells| cells.get(&thread_count)?.value())
            .collect();
        (!values.is_empty()).then(|| values.iter().sum::<f64>() / values.len() as f64)
    }

    /// Duration-weighted mean work% at `thread_count`; regions without a
    /// weight fall back to weight 1 when no region has one.
    pub fn weighted_mean(&self, thread_count: u32, weights: &BTreeMap<String, f64>) -> Option<f64> {
        let mut num = 0.0;
        let mut den = 0.0;
        for (region, cells) in &self.entries {
            let Some(v) = cells.get(&thread_count).and_then(|c| c.value()) else {
                continue;
            };
            let w = weights.get(region).copied().unwrap_or(0.0).max(0.0);
            num += w * v;
            den += w;
        }
        if den > 0.0 {
            Some(num / den)
        } else {
            self.region_mean(thread_count)
        }
    }

    /// Mean over every measured cell; 0 for an empty profile.
    pub fn overall_mean(&self) -> f64 {
        let values: Vec<f64> = self
            .entries
            .values()
            .flat_map(|cells| cells.values().filter_map(|c| c.value()))
            .collect();
        if values.is_empty() {
            0.0
        } else {
            values.iter().sum::<f64>() / values.len() as f64
        }
    }
}

/// Renders one measurement block per region:
///
/// ```text
/// For code snippet (region_6_9):
/// <snippet>
///
/// Caliper measures:
/// - For 4 threads, a work percentage of 96
/// ```
pub fn render_caliper_answer(profile: &CaliperProfile, snippets: &BTreeMap<String, String>) -> String {
    let mut blocks = Vec::new();
    for region in profile.regions() {
        let mut block = format!("For code snippet ({region}):\n");
        if let Some(snippet) = snippets.get(region) {
            let snippet = snippet.trim_end_matches(['\n', '\r']);
            if !snippet.is_empty() {
                block.push_str(snippet);
                block.push('\n');
            }
        }
        block.push_str("\nCaliper measures:");
        for tc in &profile.thread_counts {
            match profile.get(region, *tc) {
                Some(WorkCell::Measured(v)) => {
                    block.push_str(&format!("\n- For {tc} threads, a work percentage of {v}"))
                }
                _ => block.push_str(&format!("\n- For {tc} threads, measurement failed")),
            }
        }
        blocks.push(block);
    }
    blocks.join("\n\n")
}

static HEADER: Lazy<Regex> = Lazy::new(|| Regex::new(r"^\s*For code snippet(?:\s*\(([^)]*)\))?\s*:\s*$").unwrap());
static MEASURES: Lazy<Regex> = Lazy::new(|| Regex::new(r"^\s*Caliper measures\s*:\s*$").unwrap());
static VALUE_LINE: Lazy<Regex> = Lazy::new(|| {
    Regex::new(r"^\s*[-*]\s*For (\d+) threads?,\s*a work percentage of (-?[0-9]+(?:\.[0-9]+)?(?:[eE][-+]?[0-9]+)?)\s*%?\.?\s*$")
        .unwrap()
});
static FAILED_LINE: Lazy<Regex> =
    Lazy::new(|| Regex::new(r"^\s*[-*]\s*For (\d+) threads?,\s*measurement failed").unwrap());

/// Inverse of [`render_caliper_answer`]. Blocks without a region label get
/// ordinal labels (`region_1`, ...).
pub fn parse_caliper_answer(text: &str) -> Result<CaliperProfile> {
    let mut entries: BTreeMap<String, BTreeMap<u32, WorkCell>> = BTreeMap::new();
    let mut current: Option<String> = None;
    let mut in_measures = false;
    let mut unlabeled = 0usize;

    for line in text.lines() {
        if let Some(caps) = HEADER.captures(line) {
            let label = match caps.get(1).map(|m| m.as_str().trim()).filter(|s| !s.is_empty()) {
                Some(label) => label.to_owned(),
                None => {
                    unlabeled += 1;
                    format!("region_{unlabeled}")
                }
            };
            entries.entry(label.clone()).or_default();
            current = Some(label);
            in_measures = false;
            continue;
        }
        if MEASURES.is_match(line) {
            if current.is_none() {
                current = Some("program".to_owned());
            }
            in_measures = true;
            continue;
        }
        if !in_measures {
            continue;
        }
        let region = current.as_ref().expect("in_measures implies a region");
        if let Some(caps) = VALUE_LINE.captures(line) {
            let tc: u32 = caps[1]
                .parse()
                .map_err(|_| Error::Format(format!("bad thread count in `{line}`")))?;
            let v: f64 = caps[2]
                .parse()
                .map_err(|_| Error::Format(format!("bad work percentage in `{line}`")))?;
            entries
                .entry(region.clone())
                .or_default()
                .insert(tc, WorkCell::Measured(v));
        } else if let Some(caps) = FAILED_LINE.captures(line) {
            let tc: u32 = caps[1]
                .parse()
                .map_err(|_| Error::Format(format!("bad thread count in `{line}`")))?;
            entries.entry(region.clone()).or_default().insert(tc, WorkCell::Failed);
        }
    }

    entries.retain(|_, cells| !cells.is_empty());
    if entries.is_empty() {
        return Err(Error::Format("no Caliper measurements found".into()));
    }
    let thread_counts: BTreeSet<u32> = entries.values().flat_map(|c| c.keys().copied()).collect();
    for (region, cells) in &entries {
        if let Some(tc) = thread_counts.iter().find(|tc| !cells.contains_key(tc)) {
            return Err(Error::Format(format!(
                "{region} is missing the {tc}-thread measurement"
            )));
        }
    }
    Ok(CaliperProfile {
        thread_counts: thread_counts.into_iter().collect(),
        entries,
    })
}

const CODE_A_HEADING: &str = "## Caliper Measurements for Code A";
const CODE_B_HEADING: &str = "## Caliper Measurements for Code B";

/// The two-code answer body: code A's measurements first, then code B's.
pub fn render_caliper_pair_answer(measurements_a: &str, measurements_b: &str) -> String {
    format!(
        "{CODE_A_HEADING}\n<measurements>\n{measurements_a}\n</measurements>\n\n\
         {CODE_B_HEADING}\n<measurements>\n{measurements_b}\n</measurements>"
    )
}

fn measurements_body(section: &str) -> &str {
    match (section.find("<measurements>"), section.find("</measurements>")) {
        (Some(open), Some(close)) if close > open => &section[open + "<measurements>".len()..close],
        _ => section,
    }
}

pub fn parse_caliper_pair_answer(text: &str) -> Result<(CaliperProfile, CaliperProfile)> {
    let a_at = text
        .find("Caliper Measurements for Code A")
        .ok_or_else(|| Error::Format("no measurements for code A".into()))?;
    let b_at = text
        .find("Caliper Measurements for Code B")
        .ok_or_else(|| Error::Format("no measurements for code B".into()))?;
    if b_at < a_at {
        return Err(Error::Format("code B measurements precede code A".into()));
    }
    let a = parse_caliper_answer(measurements_body(&text[a_at..b_at]))?;
    let b = parse_caliper_answer(measurements_body(&text[b_at..]))?;
    Ok((a, b))
}
