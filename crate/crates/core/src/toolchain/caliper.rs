//! Caliper report parsing and work-percentage reduction.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::instrument::RegionSpan;
use crate::model::WorkCell;
use crate::{Error, Result};

/// Which report columns carry the region label, the OpenMP state and the
/// time, and how states split into work and overhead.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CaliperMetrics {
    pub region_attribute: String,
    pub state_attribute: String,
    /// First present column wins.
    pub time_attributes: Vec<String>,
    pub work_states: Vec<String>,
    /// States counted as overhead. Empty means every non-work state.
    pub overhead_states: Vec<String>,
}

impl Default for CaliperMetrics {
    fn default() -> Self {
        CaliperMetrics {
            region_attribute: "region".into(),
            state_attribute: "omp.state".into(),
            time_attributes: vec![
                "sum#sum#time.duration".into(),
                "sum#time.duration".into(),
                "time.duration".into(),
                "time".into(),
            ],
            work_states: vec!["work".into()],
            overhead_states: Vec::new(),
        }
    }
}

impl CaliperMetrics {
    fn is_work(&self, state: &str) -> bool {
        self.work_states.iter().any(|s| s == state)
    }

    fn is_overhead(&self, state: &str) -> bool {
        !self.is_work(state) && (self.overhead_states.is_empty() || self.overhead_states.iter().any(|s| s == state))
    }
}

/// One run's per-region measurement.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CaliperSample {
    pub work_percent: BTreeMap<String, WorkCell>,
    /// work + overhead seconds per region, the weight of the program mean.
    pub seconds: BTreeMap<String, f64>,
}

/// 100 * work / (work + overhead), clamped; zero total time is a failure.
pub fn work_percentage(work: f64, overhead: f64) -> WorkCell {
    let total = work + overhead;
    if !(total > 0.0) || !total.is_finite() {
        return WorkCell::Failed;
    }
    let v = 100.0 * work / total;
    if v.is_nan() {
        WorkCell::Failed
    } else {
        WorkCell::Measured(v.clamp(0.0, 100.0))
    }
}

fn rows(raw: &str, region_attribute: &str) -> Result<Vec<serde_json::Map<String, Value>>> {
    let value: Value = serde_json::from_str(raw.trim())?;
    match value {
        Value::Array(items) => Ok(items
            .into_iter()
            .filter_map(|v| match v {
                Value::Object(m) => Some(m),
                _ => None,
            })
            .collect()),
        Value::Object(obj) => split_rows(&obj, region_attribute),
        _ => Err(Error::Json("caliper report is neither an array nor an object".into())),
    }
}

/// `{"columns": [...], "data": [[...]], "nodes": [{"label": ...}]}`: a
/// node index in the region column is replaced by that node's label.
fn split_rows(
    obj: &serde_json::Map<String, Value>,
    region_attribute: &str,
) -> Result<Vec<serde_json::Map<String, Value>>> {
    let columns: Vec<String> = obj
        .get("columns")
        .and_then(Value::as_array)
        .ok_or_else(|| Error::Json("caliper report object has no `columns`".into()))?
        .iter()
        .map(|c| c.as_str().unwrap_or_default().to_owned())
        .collect();
    let data = obj
        .get("data")
        .and_then(Value::as_array)
        .ok_or_else(|| Error::Json("caliper report object has no `data`".into()))?;
    let nodes: Vec<String> = obj
        .get("nodes")
        .and_then(Value::as_array)
        .map(|ns| {
            ns.iter()
                .map(|n| n.get("label").and_then(Value::as_str).unwrap_or_default().to_owned())
                .collect()
        })
        .unwrap_or_default();
    let mut out = Vec::with_capacity(data.len());
    for row in data {
        let Some(cells) = row.as_array() else { continue };
        let mut m = serde_json::Map::new();
        for (i, cell) in cells.iter().enumerate() {
            let Some(name) = columns.get(i) else { break };
            let value = match (name == region_attribute && !nodes.is_empty(), cell.as_u64()) {
                (true, Some(idx)) => nodes
                    .get(idx as usize)
                    .map(|l| Value::from(l.as_str()))
                    .unwrap_or(Value::Null),
                _ => cell.clone(),
            };
            m.insert(name.clone(), value);
        }
        out.push(m);
    }
    Ok(out)
}

fn number(v: &Value) -> Option<f64> {
    match v {
        Value::Number(n) => n.as_f64(),
        Value::String(s) => s.trim().parse().ok(),
        _ => None,
    }
}

/// Innermost label of a nested region path such as `region_3_12/region_5_9`.
fn leaf(label: &str) -> &str {
    label.rsplit('/').next().unwrap_or(label)
}

/// Reads one machine-readable report (an array of records, or the
/// columns/data/nodes shape) and reduces it to a work percentage per span.
/// Rows without a state column are treated as overhead-free work only when
/// no row carries a state at all.
pub fn parse_caliper(raw: &str, spans: &[RegionSpan], metrics: &CaliperMetrics) -> Result<CaliperSample> {
    let rows = rows(raw, &metrics.region_attribute)?;
    let any_state = rows
        .iter()
        .any(|r| r.get(&metrics.state_attribute).is_some_and(|v| !v.is_null()));
    let mut work: BTreeMap<String, f64> = BTreeMap::new();
    let mut overhead: BTreeMap<String, f64> = BTreeMap::new();
    for row in &rows {
        let Some(region) = row.get(&metrics.region_attribute).and_then(Value::as_str) else {
            continue;
        };
        let label = leaf(region).to_owned();
        let Some(time) = metrics.time_attributes.iter().find_map(|k| row.get(k).and_then(number)) else {
            continue;
        };
        let time = if time.is_finite() { time.max(0.0) } else { continue };
        let state = row.get(&metrics.state_attribute).and_then(Value::as_str);
        match state {
            Some(s) if metrics.is_work(s) => *work.entry(label).or_default() += time,
            Some(s) if metrics.is_overhead(s) => *overhead.entry(label).or_default() += time,
            Some(_) => {}
            None if !any_state => *work.entry(label).or_default() += time,
            None => {}
        }
    }
    let mut sample = CaliperSample::default();
    for span in spans {
        let label = span.label();
        if !work.contains_key(&label) && !overhead.contains_key(&label) {
            return Err(Error::ProfileMissing(label));
        }
        let w = work.get(&label).copied().unwrap_or(0.0);
        let o = overhead.get(&label).copied().unwrap_or(0.0);
        sample.work_percent.insert(label.clone(), work_percentage(w, o));
        sample.seconds.insert(label, w + o);
    }
    Ok(sample)
}

/// Median; the mean of the two middle values for even counts.
pub fn median(values: &[f64]) -> Option<f64> {
    let mut v: Vec<f64> = values.iter().copied().filter(|x| !x.is_nan()).collect();
    if v.is_empty() {
        return None;
    }
    v.sort_by(|a, b| a.partial_cmp(b).expect("no NaN"));
    let mid = v.len() / 2;
    Some(if v.len() % 2 == 1 {
        v[mid]
    } else {
        (v[mid - 1] + v[mid]) / 2.0
    })
}

/// Reduces repeated samples of one thread count: per region, the median of
/// the measured repeats (failed when none measured).
pub fn reduce_repeats(samples: &[CaliperSample], spans: &[RegionSpan]) -> CaliperSample {
    let mut out = CaliperSample::default();
    for span in spans {
        let label = span.label();
        let measured: Vec<f64> = samples
            .iter()
            .filter_map(|s| s.work_percent.get(&label).and_then(|c| c.value()))
            .collect();
        let secs: Vec<f64> = samples.iter().filter_map(|s| s.seconds.get(&label).copied()).collect();
        out.work_percent.insert(
            label.clone(),
            median(&measured).map(WorkCell::Measured).unwrap_or(WorkCell::Failed),
        );
        out.seconds.insert(label, median(&secs).unwrap_or(0.0));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn span() -> Vec<RegionSpan> {
        vec![RegionSpan::new(6, 9)]
    }

    #[test]
    fn record_array() {
        let raw = r#"[
            {"region": "region_6_9", "omp.state": "work", "sum#time.duration": 3.0},
            {"region": "region_6_9", "omp.state": "barrier", "sum#time.duration": 0.5},
            {"region": "region_6_9", "omp.state": "wait_barrier", "sum#time.duration": 0.5},
            {"region": "main", "sum#time.duration": 9.0}
        ]"#;
        let s = parse_caliper(raw, &span(), &CaliperMetrics::default()).unwrap();
        assert_eq!(s.work_percent["region_6_9"], WorkCell::Measured(75.0));
        assert_eq!(s.seconds["region_6_9"], 4.0);
    }

    #[test]
    fn zero_overhead_is_100() {
        let raw = r#"[{"region": "region_6_9", "omp.state": "work", "time": 2}]"#;
        let s = parse_caliper(raw, &span(), &CaliperMetrics::default()).unwrap();
        assert_eq!(s.work_percent["region_6_9"], WorkCell::Measured(100.0));
    }

    #[test]
    fn zero_time_fails_cell() {
        let raw = r#"[{"region": "region_6_9", "omp.state": "work", "time": 0}]"#;
        let s = parse_caliper(raw, &span(), &CaliperMetrics::default()).unwrap();
        assert_eq!(s.work_percent["region_6_9"], WorkCell::Failed);
    }

    #[test]
    fn missing_region() {
        let raw = r#"[{"region": "region_1_2", "omp.state": "work", "time": 1}]"#;
        assert!(matches!(
            parse_caliper(raw, &span(), &CaliperMetrics::default()),
            Err(Error::ProfileMissing(l)) if l == "region_6_9"
        ));
    }

    #[test]
    fn split_shape_with_nested_path() {
        let raw = r#"{
            "columns": ["path", "omp.state", "sum#time.duration"],
            "data": [[1, "work", 4.0], [1, "barrier", 1.0], [0, "work", 2.0]],
            "nodes": [{"label": "region_3_12"}, {"label": "region_3_12/region_5_9"}]
        }"#;
        let metrics = CaliperMetrics {
            region_attribute: "path".into(),
            ..CaliperMetrics::default()
        };
        let spans = [RegionSpan::new(3, 12), RegionSpan::new(5, 9)];
        let s = parse_caliper(raw, &spans, &metrics).unwrap();
        assert_eq!(s.work_percent["region_5_9"], WorkCell::Measured(80.0));
        assert_eq!(s.work_percent["region_3_12"], WorkCell::Measured(100.0));
    }

    #[test]
    fn median_of_three_repeats() {
        assert_eq!(median(&[80.0, 95.0, 82.0]), Some(82.0));
        assert_eq!(median(&[1.0, 3.0]), Some(2.0));
        assert_eq!(median(&[]), None);
    }

    #[test]
    fn repeats_reduce_by_median() {
        let mk = |v: f64| CaliperSample {
            work_percent: [("region_6_9".to_owned(), WorkCell::Measured(v))].into(),
            seconds: [("region_6_9".to_owned(), 1.0)].into(),
        };
        let r = reduce_repeats(&[mk(80.0), mk(82.0), mk(95.0)], &span());
        assert_eq!(r.work_percent["region_6_9"], WorkCell::Measured(82.0));
    }

    #[test]
    fn malformed_is_error_not_panic() {
        assert!(parse_caliper("not json", &span(), &CaliperMetrics::default()).is_err());
        assert!(parse_caliper("42", &span(), &CaliperMetrics::default()).is_err());
    }
}
