//! Benchmark harnesses: race presence, pairwise work-% ranking, gap
//! buckets, response lengths and FLOPs estimates.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::gateway::{split_think_answer, Gateway, Message, SamplingParams};
use crate::model::{parse_caliper_pair_answer, parse_race_answer, CaliperProfile};
use crate::prompts::Templates;
use crate::store::AuditEntry;
use crate::tokens::TokenEstimator;
use crate::{Error, Result};

// ---------------------------------------------------------------- tables

/// Aligned-text and CSV rendering of a small result table.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TextTable {
    pub title: String,
    pub headers: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl TextTable {
    pub fn new(title: impl Into<String>, headers: &[&str]) -> Self {
        TextTable {
            title: title.into(),
            headers: headers.iter().map(|h| h.to_string()).collect(),
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, row: Vec<String>) {
        self.rows.push(row);
    }

    pub fn to_aligned(&self) -> String {
        let cols = self.headers.len();
        let mut width = vec![0usize; cols];
        for row in std::iter::once(&self.headers).chain(&self.rows) {
            for (i, cell) in row.iter().enumerate().take(cols) {
                width[i] = width[i].max(cell.chars().count());
            }
        }
        let line = |row: &Vec<String>| {
            let cells: Vec<String> = (0..cols)
                .map(|i| {
                    let c = row.get(i).map(String::as_str).unwrap_or("");
                    if i == 0 {
                        format!("{c:<w$}", w = width[i])
                    } else {
                        format!("{c:>w$}", w = width[i])
                    }
                })
                .collect();
            cells.join("  ").trim_end().to_owned()
        };
        let mut out = String::new();
        if !self.title.is_empty() {
            let _ = writeln!(out, "{}", self.title);
        }
        let _ = writeln!(out, "{}", line(&self.headers));
        let _ = writeln!(
            out,
            "{}",
            width.iter().map(|w| "-".repeat(*w)).collect::<Vec<_>>().join("  ")
        );
        for row in &self.rows {
            let _ = writeln!(out, "{}", line(row));
        }
        out
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(&self.headers).map_err(csv_err)?;
        for row in &self.rows {
            w.write_record(row).map_err(csv_err)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Format(e.to_string()))?;
        Ok(String::from_utf8(bytes).expect("csv is utf-8"))
    }

    /// Writes `<stem>.txt` and `<stem>.csv` under `dir`.
    pub fn write(&self, dir: &Path, stem: &str) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        crate::store::write_atomic(&dir.join(format!("{stem}.txt")), self.to_aligned().as_bytes())?;
        crate::store::write_atomic(&dir.join(format!("{stem}.csv")), self.to_csv()?.as_bytes())
    }
}

fn csv_err(e: csv::Error) -> Error {
    Error::Format(e.to_string())
}

/// `72.8 (291/400)`
pub fn pct_cell(correct: usize, total: usize) -> String {
    if total == 0 {
        "n/a (0/0)".to_owned()
    } else {
        format!("{:.1} ({correct}/{total})", 100.0 * correct as f64 / total as f64)
    }
}

pub fn pct(correct: usize, total: usize) -> Option<f64> {
    (total > 0).then(|| 100.0 * correct as f64 / total as f64)
}

// ---------------------------------------------------------------- race presence

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelSource {
    /// File name or labels file of the benchmark.
    Metadata,
    /// A live ThreadSanitizer run.
    LiveTsan,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RaceEvalItem {
    pub program_id: String,
    pub source: String,
    /// Race present.
    pub label: bool,
    pub label_source: LabelSource,
}

fn label_from_name(name: &str) -> Option<bool> {
    let lower = name.to_ascii_lowercase();
    if lower.ends_with("-yes") || lower.ends_with("_yes") {
        Some(true)
    } else if lower.ends_with("-no") || lower.ends_with("_no") {
        Some(false)
    } else {
        None
    }
}

fn parse_label(text: &str) -> Option<bool> {
    match text.trim().to_ascii_lowercase().as_str() {
        "1" | "yes" | "true" | "race" | "racy" => Some(true),
        "0" | "no" | "false" | "race_free" | "race-free" => Some(false),
        _ => None,
    }
}

/// Reads every `.c`/`.cc`/`.cpp` file of `dir`. Labels come from
/// `labels` (CSV `program,label`) when given, else from `-yes`/`-no` in the
/// file name; unlabeled files are returned in the second list.
pub fn load_race_benchmark(dir: &Path, labels: Option<&Path>) -> Result<(Vec<RaceEvalItem>, Vec<String>)> {
    let mut table = BTreeMap::new();
    if let Some(path) = labels {
        let mut r = csv::ReaderBuilder::new()
            .has_headers(false)
            .flexible(true)
            .from_path(path)
            .map_err(|e| Error::Config(format!("labels file: {e}")))?;
        for rec in r.records() {
            let rec = rec.map_err(|e| Error::Config(format!("labels file: {e}")))?;
            if let (Some(name), Some(label)) = (rec.get(0), rec.get(1).and_then(parse_label)) {
                table.insert(name.trim().to_owned(), label);
            }
        }
    }
    let mut entries: Vec<_> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| matches!(p.extension().and_then(|e| e.to_str()), Some("c" | "cc" | "cpp" | "cxx")))
        .collect();
    entries.sort();
    let mut items = Vec::new();
    let mut unlabeled = Vec::new();
    for path in entries {
        let name = path.file_name().unwrap().to_string_lossy().into_owned();
        let stem = path.file_stem().unwrap().to_string_lossy().into_owned();
        let label = table
            .get(&name)
            .or_else(|| table.get(&stem))
            .copied()
            .or_else(|| label_from_name(&stem));
        match label {
            Some(label) => items.push(RaceEvalItem {
                program_id: stem,
                source: std::fs::read_to_string(&path)?,
                label,
                label_source: LabelSource::Metadata,
            }),
            None => unlabeled.push(name),
        }
    }
    Ok((items, unlabeled))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RaceItemResult {
    pub program_id: String,
    pub label: bool,
    /// Per-sample predicted presence; `None` for an unparseable sample.
    pub predictions: Vec<Option<bool>>,
    pub response_tokens: Vec<usize>,
    /// Endpoint failure; the item is left out of the accuracies.
    pub failed: Option<String>,
}

impl RaceItemResult {
    pub fn correct_samples(&self) -> usize {
        self.predictions.iter().filter(|p| **p == Some(self.label)).count()
    }

    /// Majority over parsed samples; a tie or no parse is wrong.
    pub fn majority_correct(&self) -> bool {
        let yes = self.predictions.iter().filter(|p| **p == Some(true)).count();
        let no = self.predictions.iter().filter(|p| **p == Some(false)).count();
        match yes.cmp(&no) {
            std::cmp::Ordering::Greater => self.label,
            std::cmp::Ordering::Less => !self.label,
            std::cmp::Ordering::Equal => false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RaceEvalReport {
    pub endpoint: String,
    pub n_samples: u32,
    pub items: Vec<RaceItemResult>,
    pub correct_samples: usize,
    pub total_samples: usize,
    pub majority_correct: usize,
    pub evaluated_items: usize,
    pub unparseable: usize,
    pub failed_items: usize,
}

impl RaceEvalReport {
    pub fn mean_accuracy(&self) -> Option<f64> {
        pct(self.correct_samples, self.total_samples)
    }

    pub fn majority_accuracy(&self) -> Option<f64> {
        pct(self.majority_correct, self.evaluated_items)
    }

    fn from_items(endpoint: &str, n_samples: u32, items: Vec<RaceItemResult>) -> Self {
        let ok: Vec<&RaceItemResult> = items.iter().filter(|i| i.failed.is_none()).collect();
        RaceEvalReport {
            endpoint: endpoint.to_owned(),
            n_samples,
            correct_samples: ok.iter().map(|i| i.correct_samples()).sum(),
            total_samples: ok.iter().map(|i| i.predictions.len()).sum(),
            majority_correct: ok.iter().filter(|i| i.majority_correct()).count(),
            evaluated_items: ok.len(),
            unparseable: ok
                .iter()
                .map(|i| i.predictions.iter().filter(|p| p.is_none()).count())
                .sum(),
            failed_items: items.len() - ok.len(),
            items,
        }
    }

    pub fn audit(&self) -> Vec<AuditEntry> {
        let mut out = Vec::new();
        for item in &self.items {
            if let Some(f) = &item.failed {
                out.push(AuditEntry::new("eval_race", &item.program_id, "endpoint_failed", f));
            }
            for (i, p) in item.predictions.iter().enumerate() {
                if p.is_none() {
                    out.push(AuditEntry::new(
                        "eval_race",
                        format!("{}#{i}", item.program_id),
                        "unparseable_sample",
                        "",
                    ));
                }
            }
        }
        out
    }
}

/// Presence predicted by one response: the answer block (or the whole text)
/// parsed as a race list.
pub fn predicted_presence(response: &str) -> Option<bool> {
    let (_, answer) = split_think_answer(response);
    let body = answer.as_deref().unwrap_or(response);
    parse_race_answer(body).ok().map(|r| !r.is_race_free())
}

pub struct Evaluator<'a> {
    pub gateway: &'a Gateway,
    pub templates: &'a Templates,
    pub params: SamplingParams,
    pub estimator: TokenEstimator,
}

impl Evaluator<'_> {
    pub fn eval_race_presence(&self, endpoint: &str, items: &[RaceEvalItem], n_samples: u32) -> Result<RaceEvalReport> {
        if n_samples == 0 {
            return Err(Error::Config("n_samples must be at least 1".into()));
        }
        self.gateway.endpoint(endpoint)?;
        let results: Vec<RaceItemResult> = items
            .par_iter()
            .map(|item| {
                let messages = [Message::user(self.templates.world_model_race(&item.source))];
                match self.gateway.complete(endpoint, &messages, &self.params, n_samples) {
                    Ok(responses) => RaceItemResult {
                        program_id: item.program_id.clone(),
                        label: item.label,
                        predictions: responses.iter().map(|r| predicted_presence(r)).collect(),
                        response_tokens: responses.iter().map(|r| self.estimator.estimate(r)).collect(),
                        failed: None,
                    },
                    Err(e) => RaceItemResult {
                        program_id: item.program_id.clone(),
                        label: item.label,
                        predictions: Vec::new(),
                        response_tokens: Vec::new(),
                        failed: Some(e.to_string()),
                    },
                }
            })
            .collect();
        Ok(RaceEvalReport::from_items(endpoint, n_samples, results))
    }

    /// Every item in both presentation orders, `n_samples` each.
    pub fn eval_pair_ranking(
        &self,
        endpoint: &str,
        items: &[RankEvalItem],
        thread_counts: &[u32],
        n_samples: u32,
    ) -> Result<RankEvalReport> {
        if n_samples == 0 || thread_counts.is_empty() {
            return Err(Error::Config("need at least one sample and one thread count".into()));
        }
        self.gateway.endpoint(endpoint)?;
        let jobs: Vec<(usize, Presentation)> = (0..items.len())
            .flat_map(|i| [(i, Presentation::AB), (i, Presentation::BA)])
            .collect();
        let per_job: Vec<(Vec<RankCell>, Vec<usize>, Option<String>)> = jobs
            .par_iter()
            .map(|&(idx, pres)| {
                let item = &items[idx];
                let (first, second) = match pres {
                    Presentation::AB => (&item.code_a, &item.code_b),
                    Presentation::BA => (&item.code_b, &item.code_a),
                };
                let messages = [Message::user(self.templates.world_model_caliper(
                    first,
                    second,
                    thread_counts,
                ))];
                match self.gateway.complete(endpoint, &messages, &self.params, n_samples) {
                    Ok(responses) => {
                        let mut cells = Vec::new();
                        for (s, r) in responses.iter().enumerate() {
                            cells.extend(score_ranking_response(item, idx, pres, s as u32, r, thread_counts));
                        }
                        (
                            cells,
                            responses.iter().map(|r| self.estimator.estimate(r)).collect(),
                            None,
                        )
                    }
                    Err(e) => (Vec::new(), Vec::new(), Some(format!("{}: {e}", item.problem_id))),
                }
            })
            .collect();
        let mut report = RankEvalReport {
            endpoint: endpoint.to_owned(),
            thread_counts: thread_counts.to_vec(),
            ..Default::default()
        };
        for (cells, lengths, failed) in per_job {
            report.cells.extend(cells);
            report.response_tokens.extend(lengths);
            report.failures.extend(failed);
        }
        Ok(report)
    }
}

// ---------------------------------------------------------------- ranking

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Rank {
    AHigher,
    BHigher,
    Tie,
}

impl Rank {
    pub fn flipped(self) -> Rank {
        match self {
            Rank::AHigher => Rank::BHigher,
            Rank::BHigher => Rank::AHigher,
            Rank::Tie => Rank::Tie,
        }
    }
}

/// Ordering and gap of two work percentages; gaps under `tie_tolerance`
/// are ties.
pub fn rank_truth(work_a: f64, work_b: f64, tie_tolerance: f64) -> (Rank, f64) {
    let gap = (work_a - work_b).abs();
    let rank = if gap < tie_tolerance {
        Rank::Tie
    } else if work_a > work_b {
        Rank::AHigher
    } else {
        Rank::BHigher
    };
    (rank, gap)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankEvalItem {
    pub problem_id: String,
    pub id_a: String,
    pub id_b: String,
    pub code_a: String,
    pub code_b: String,
    pub truth: BTreeMap<u32, Rank>,
    pub gap: BTreeMap<u32, f64>,
}

impl RankEvalItem {
    pub fn swapped(&self) -> RankEvalItem {
        RankEvalItem {
            problem_id: self.problem_id.clone(),
            id_a: self.id_b.clone(),
            id_b: self.id_a.clone(),
            code_a: self.code_b.clone(),
            code_b: self.code_a.clone(),
            truth: self.truth.iter().map(|(k, r)| (*k, r.flipped())).collect(),
            gap: self.gap.clone(),
        }
    }
}

/// One correct, profiled solution to a ranking problem.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProfiledSolution {
    pub id: String,
    pub problem_id: String,
    pub source: String,
    pub correct: bool,
    /// Program-level work % per thread count.
    pub work: BTreeMap<u32, f64>,
}

/// All unordered pairs of correct solutions per problem. Problems with
/// fewer than two correct solutions are skipped and returned as audit.
pub fn prepare_pareval_pairs(
    solutions: &[ProfiledSolution],
    thread_counts: &[u32],
    tie_tolerance: f64,
) -> (Vec<RankEvalItem>, Vec<AuditEntry>) {
    let mut by_problem: BTreeMap<&str, Vec<&ProfiledSolution>> = BTreeMap::new();
    for s in solutions {
        by_problem.entry(&s.problem_id).or_default();
        if s.correct && thread_counts.iter().all(|tc| s.work.contains_key(tc)) {
            by_problem.get_mut(s.problem_id.as_str()).unwrap().push(s);
        }
    }
    let mut items = Vec::new();
    let mut audit = Vec::new();
    for (problem, sols) in by_problem {
        if sols.len() < 2 {
            audit.push(AuditEntry::new(
                "eval_ranking",
                problem,
                "insufficient_solutions",
                format!("{} correct profiled solutions", sols.len()),
            ));
            continue;
        }
        for i in 0..sols.len() {
            for j in i + 1..sols.len() {
                let (a, b) = (sols[i], sols[j]);
                let mut truth = BTreeMap::new();
                let mut gap = BTreeMap::new();
                for &tc in thread_counts {
                    let (r, g) = rank_truth(a.work[&tc], b.work[&tc], tie_tolerance);
                    truth.insert(tc, r);
                    gap.insert(tc, g);
                }
                items.push(RankEvalItem {
                    problem_id: problem.to_owned(),
                    id_a: a.id.clone(),
                    id_b: b.id.clone(),
                    code_a: a.source.clone(),
                    code_b: b.source.clone(),
                    truth,
                    gap,
                });
            }
        }
    }
    (items, audit)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Presentation {
    /// Code A shown first.
    AB,
    BA,
}

/// One (item, presentation, sample, thread count) judgement. Orderings are
/// relative to the item's own A/B, whatever the presentation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankCell {
    pub item: usize,
    pub problem_id: String,
    pub presentation: Presentation,
    pub sample: u32,
    pub thread_count: u32,
    pub truth: Rank,
    pub gap: f64,
    pub predicted: Option<Rank>,
}

impl RankCell {
    /// `None` for truth ties, which are kept out of denominators.
    pub fn correct(&self) -> Option<bool> {
        (self.truth != Rank::Tie).then(|| self.predicted == Some(self.truth))
    }
}

/// Mean predicted work % over regions at one thread count.
fn predicted_work(p: &CaliperProfile, tc: u32) -> Option<f64> {
    p.region_mean(tc)
}

/// Cells for one response. A parse failure marks every cell as wrong.
pub fn score_ranking_response(
    item: &RankEvalItem,
    index: usize,
    presentation: Presentation,
    sample: u32,
    response: &str,
    thread_counts: &[u32],
) -> Vec<RankCell> {
    let (_, answer) = split_think_answer(response);
    let parsed = parse_caliper_pair_answer(answer.as_deref().unwrap_or(response)).ok();
    thread_counts
        .iter()
        .map(|&tc| {
            let predicted = parsed.as_ref().and_then(|(first, second)| {
                let (wf, ws) = (predicted_work(first, tc)?, predicted_work(second, tc)?);
                let shown = match wf.partial_cmp(&ws)? {
                    std::cmp::Ordering::Greater => Rank::AHigher,
                    std::cmp::Ordering::Less => Rank::BHigher,
                    std::cmp::Ordering::Equal => Rank::Tie,
                };
                Some(match presentation {
                    Presentation::AB => shown,
                    Presentation::BA => shown.flipped(),
                })
            });
            RankCell {
                item: index,
                problem_id: item.problem_id.clone(),
                presentation,
                sample,
                thread_count: tc,
                truth: item.truth.get(&tc).copied().unwrap_or(Rank::Tie),
                gap: item.gap.get(&tc).copied().unwrap_or(0.0),
                predicted,
            }
        })
        .collect()
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RankEvalReport {
    pub endpoint: String,
    pub thread_counts: Vec<u32>,
    pub cells: Vec<RankCell>,
    pub response_tokens: Vec<usize>,
    pub failures: Vec<String>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Tally {
    pub correct: usize,
    pub total: usize,
    pub ties: usize,
}

impl Tally {
    fn add(&mut self, cell: &RankCell) {
        match cell.correct() {
            Some(ok) => {
                self.total += 1;
                self.correct += ok as usize;
            }
            None => self.ties += 1,
        }
    }

    pub fn accuracy(&self) -> Option<f64> {
        pct(self.correct, self.total)
    }
}

impl RankEvalReport {
    pub fn tally_by_thread_count(&self, presentation: Option<Presentation>) -> BTreeMap<u32, Tally> {
        let mut out: BTreeMap<u32, Tally> = self.thread_counts.iter().map(|tc| (*tc, Tally::default())).collect();
        for c in self
            .cells
            .iter()
            .filter(|c| presentation.is_none_or(|p| c.presentation == p))
        {
            out.entry(c.thread_count).or_default().add(c);
        }
        out
    }

    pub fn overall(&self) -> Tally {
        let mut t = Tally::default();
        self.cells.iter().for_each(|c| t.add(c));
        t
    }

    /// Mean of the per-thread-count accuracies.
    pub fn average_accuracy(&self) -> Option<f64> {
        let accs: Vec<f64> = self
            .tally_by_thread_count(None)
            .values()
            .filter_map(Tally::accuracy)
            .collect();
        (!accs.is_empty()).then(|| accs.iter().sum::<f64>() / accs.len() as f64)
    }
}

// ---------------------------------------------------------------- gap buckets

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GapBucket {
    pub lo: f64,
    /// `None` for the open last bucket.
    pub hi: Option<f64>,
    pub correct: usize,
    pub total: usize,
}

impl GapBucket {
    pub fn label(&self) -> String {
        match self.hi {
            Some(hi) => format!("[{}, {})", self.lo, hi),
            None => format!("[{}, inf)", self.lo),
        }
    }
}

/// Evaluated (non-tie) cells grouped by truth gap. Cells below the first
/// edge fall into the first bucket.
pub fn bucket_by_gap(cells: &[RankCell], edges: &[f64]) -> Vec<GapBucket> {
    let mut buckets: Vec<GapBucket> = edges
        .iter()
        .enumerate()
        .map(|(i, &lo)| GapBucket {
            lo,
            hi: edges.get(i + 1).copied(),
            correct: 0,
            total: 0,
        })
        .collect();
    if buckets.is_empty() {
        return buckets;
    }
    for cell in cells {
        let Some(ok) = cell.correct() else { continue };
        let idx = edges.iter().rposition(|&e| cell.gap >= e).unwrap_or(0);
        buckets[idx].total += 1;
        buckets[idx].correct += ok as usize;
    }
    buckets
}

pub fn buckets_csv(buckets: &[GapBucket]) -> Result<String> {
    let mut t = TextTable::new("", &["gap_lo", "gap_hi", "correct", "total", "accuracy"]);
    for b in buckets {
        t.push(vec![
            b.lo.to_string(),
            b.hi.map_or("inf".into(), |h| h.to_string()),
            b.correct.to_string(),
            b.total.to_string(),
            pct(b.correct, b.total).map_or(String::new(), |a| format!("{a:.2}")),
        ]);
    }
    t.to_csv()
}

// ---------------------------------------------------------------- lengths and FLOPs

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LengthStats {
    pub count: usize,
    pub mean: f64,
    pub median: f64,
    pub max: usize,
}

pub fn length_stats(tokens: &[usize]) -> LengthStats {
    if tokens.is_empty() {
        return LengthStats::default();
    }
    let mut sorted = tokens.to_vec();
    sorted.sort_unstable();
    let n = sorted.len();
    let median = if n % 2 == 1 {
        sorted[n / 2] as f64
    } else {
        (sorted[n / 2 - 1] + sorted[n / 2]) as f64 / 2.0
    };
    LengthStats {
        count: n,
        mean: sorted.iter().sum::<usize>() as f64 / n as f64,
        median,
        max: sorted[n - 1],
    }
}

pub fn response_length_stats(completions: &[String], estimator: &TokenEstimator) -> LengthStats {
    let tokens: Vec<usize> = completions.iter().map(|c| estimator.estimate(c)).collect();
    length_stats(&tokens)
}

/// Per-response compute estimate for a dense decoder:
/// `per_token * P * R + attention * 2 * L * d * sum_{t=1..R} (prompt + t)`,
/// where `L * d` is taken from `layers_times_width` or derived from `P`
/// assuming `P = 12 L d^2` and `d = 128 L`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FlopsFormula {
    pub per_token_per_param: f64,
    /// Scale on the attention term; 0 disables it.
    pub attention: f64,
    pub layers_times_width: Option<f64>,
}

impl Default for FlopsFormula {
    fn default() -> Self {
        FlopsFormula {
            per_token_per_param: 2.0,
            attention: 1.0,
            layers_times_width: None,
        }
    }
}

impl FlopsFormula {
    pub fn layers_times_width(&self, params: f64) -> f64 {
        self.layers_times_width.unwrap_or_else(|| {
            let d = (128.0 * params.max(0.0) / 12.0).cbrt();
            d * d / 128.0
        })
    }
}

pub fn estimate_flops(params: f64, prompt_tokens: usize, response_tokens: usize, f: &FlopsFormula) -> f64 {
    let (p, r) = (prompt_tokens as f64, response_tokens as f64);
    let dense = f.per_token_per_param * params.max(0.0) * r;
    let pairs = r * p + r * (r + 1.0) / 2.0;
    dense + f.attention * 2.0 * f.layers_times_width(params) * pairs
}

// ---------------------------------------------------------------- report shapes

/// Race-presence rows, one per evaluated endpoint.
pub fn race_table(reports: &[RaceEvalReport]) -> TextTable {
    let mut t = TextTable::new(
        "Race presence accuracy (%)",
        &[
            "model",
            "mean_per_sample",
            "majority_vote",
            "items",
            "unparseable",
            "failed",
        ],
    );
    for r in reports {
        t.push(vec![
            r.endpoint.clone(),
            pct_cell(r.correct_samples, r.total_samples),
            pct_cell(r.majority_correct, r.evaluated_items),
            r.evaluated_items.to_string(),
            r.unparseable.to_string(),
            r.failed_items.to_string(),
        ]);
    }
    t
}

/// Ranking rows: one accuracy column per thread count plus the average.
pub fn ranking_table(reports: &[RankEvalReport]) -> TextTable {
    let tcs: Vec<u32> = reports.first().map(|r| r.thread_counts.clone()).unwrap_or_default();
    let mut headers: Vec<String> = vec!["model".into()];
    headers.extend(tcs.iter().map(|tc| format!("{tc}_threads")));
    headers.extend(["average".to_owned(), "ties".to_owned()]);
    let mut t = TextTable {
        title: "Pairwise work-percentage ranking accuracy (%)".into(),
        headers,
        rows: Vec::new(),
    };
    for r in reports {
        let tallies = r.tally_by_thread_count(None);
        let mut row = vec![r.endpoint.clone()];
        row.extend(tcs.iter().map(|tc| {
            let x = tallies.get(tc).copied().unwrap_or_default();
            pct_cell(x.correct, x.total)
        }));
        row.push(r.average_accuracy().map_or("n/a".into(), |a| format!("{a:.1}")));
        row.push(r.overall().ties.to_string());
        t.push(row);
    }
    t
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComputeRow {
    pub model: String,
    pub params: f64,
    pub mean_prompt_tokens: f64,
    pub lengths: LengthStats,
}

/// Model size, TFLOPs per response and average response length.
pub fn compute_table(rows: &[ComputeRow], formula: &FlopsFormula) -> TextTable {
    let mut t = TextTable::new(
        "Compute per response",
        &[
            "model",
            "params_b",
            "tflops_per_response",
            "avg_response_tokens",
            "responses",
        ],
    );
    for r in rows {
        let flops = estimate_flops(
            r.params,
            r.mean_prompt_tokens.round() as usize,
            r.lengths.mean.round() as usize,
            formula,
        );
        t.push(vec![
            r.model.clone(),
            format!("{:.1}", r.params / 1e9),
            format!("{:.2}", flops / 1e12),
            format!("{:.2}", r.lengths.mean),
            r.lengths.count.to_string(),
        ]);
    }
    t
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cell(gap: f64, truth: Rank, predicted: Rank) -> RankCell {
        RankCell {
            item: 0,
            problem_id: "p".into(),
            presentation: Presentation::AB,
            sample: 0,
            thread_count: 4,
            truth,
            gap,
            predicted: Some(predicted),
        }
    }

    #[test]
    fn buckets_assign_by_edges() {
        let edges = [0.0, 10.0, 20.0, 30.0, 40.0];
        let cells: Vec<RankCell> = [5.0, 15.0, 25.0, 35.0]
            .iter()
            .map(|&g| cell(g, Rank::AHigher, Rank::AHigher))
            .collect();
        let b = bucket_by_gap(&cells, &edges);
        assert_eq!(b.iter().map(|b| b.total).collect::<Vec<_>>(), vec![1, 1, 1, 1, 0]);
        let same: Vec<RankCell> = (0..7).map(|_| cell(5.0, Rank::AHigher, Rank::BHigher)).collect();
        let b = bucket_by_gap(&same, &edges);
        assert_eq!(b[0].total, 7);
        assert_eq!(b[0].correct, 0);
        assert_eq!(b[4].label(), "[40, inf)");
    }

    #[test]
    fn ties_are_not_bucketed() {
        let cells = vec![
            cell(0.4, Rank::Tie, Rank::AHigher),
            cell(50.0, Rank::BHigher, Rank::BHigher),
        ];
        let b = bucket_by_gap(&cells, &[0.0, 10.0]);
        assert_eq!(b.iter().map(|b| b.total).sum::<usize>(), 1);
        assert_eq!(b[1].correct, 1);
    }

    #[test]
    fn truth_tolerance_and_antisymmetry() {
        assert_eq!(rank_truth(50.0, 49.6, 1.0).0, Rank::Tie);
        assert_eq!(rank_truth(60.0, 40.0, 1.0), (Rank::AHigher, 20.0));
        assert_eq!(rank_truth(40.0, 60.0, 1.0).0, Rank::BHigher);
    }

    fn sol(id: &str, correct: bool, w4: f64) -> ProfiledSolution {
        ProfiledSolution {
            id: id.into(),
            problem_id: "p".into(),
            source: format!("// {id}"),
            correct,
            work: BTreeMap::from([(4, w4)]),
        }
    }

    #[test]
    fn pareval_pairs() {
        let (items, audit) = prepare_pareval_pairs(
            &[
                sol("a", true, 90.0),
                sol("b", true, 50.0),
                sol("c", true, 89.6),
                sol("d", false, 1.0),
            ],
            &[4],
            1.0,
        );
        assert_eq!(items.len(), 3);
        assert!(audit.is_empty());
        let ac = items.iter().find(|i| i.id_a == "a" && i.id_b == "c").unwrap();
        assert_eq!(ac.truth[&4], Rank::Tie);
        let ab = items.iter().find(|i| i.id_b == "b" && i.id_a == "a").unwrap();
        assert_eq!(ab.truth[&4], Rank::AHigher);
        assert_eq!(ab.swapped().truth[&4], Rank::BHigher);

        let (items, audit) = prepare_pareval_pairs(&[sol("a", true, 1.0), sol("b", false, 2.0)], &[4], 1.0);
        assert!(items.is_empty());
        assert_eq!(audit[0].cause, "insufficient_solutions");
    }

    #[test]
    fn length_stats_basic() {
        assert_eq!(length_stats(&[100]).mean, 100.0);
        let s = length_stats(&[100, 300]);
        assert_eq!((s.mean, s.median, s.max), (200.0, 200.0, 300));
        let est = TokenEstimator::default();
        let s = response_length_stats(&["x".repeat(400)], &est);
        assert_eq!(s.mean, 100.0);
    }

    #[test]
    fn flops_properties() {
        let f = FlopsFormula::default();
        assert_eq!(estimate_flops(7e9, 1000, 0, &f), 0.0);
        let one = estimate_flops(7e9, 1000, 2000, &f);
        let two = estimate_flops(7e9, 1000, 4000, &f);
        assert!(two > 2.0 * one);
        let dense_only = FlopsFormula {
            attention: 0.0,
            ..f.clone()
        };
        assert_eq!(estimate_flops(7e9, 1000, 10, &dense_only), 2.0 * 7e9 * 10.0);
        assert!(estimate_flops(14e9, 1000, 2000, &f) > one);
        assert!(estimate_flops(7e9, 2000, 2000, &f) > one);
    }

    #[test]
    fn majority_vote() {
        let r = RaceItemResult {
            program_id: "x".into(),
            label: true,
            predictions: vec![Some(true), Some(true), Some(false), None],
            response_tokens: vec![],
            failed: None,
        };
        assert!(r.majority_correct());
        assert_eq!(r.correct_samples(), 2);
        let tie = RaceItemResult {
            predictions: vec![Some(true), Some(false)],
            ..r
        };
        assert!(!tie.majority_correct());
    }

    #[test]
    fn table_alignment_and_csv() {
        let mut t = TextTable::new("T", &["model", "acc"]);
        t.push(vec!["m-7b".into(), pct_cell(3, 4)]);
        let text = t.to_aligned();
        assert!(text.contains("m-7b   75.0 (3/4)"), "{text}");
        assert_eq!(t.to_csv().unwrap(), "model,acc\nm-7b,75.0 (3/4)\n");
    }

    #[test]
    fn labels_from_names() {
        assert_eq!(label_from_name("DRB001-antidep1-orig-yes"), Some(true));
        assert_eq!(label_from_name("DRB045-doall1-orig-no"), Some(false));
        assert_eq!(label_from_name("kernel"), None);
    }
}
