//! Outcome-conditioned reasoning traces and their validation.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::CotConfig;
use crate::gateway::{split_think_answer, Gateway, Message, SamplingParams};
use crate::model::{
    content_hash_parts, pair_outcome_hash, parse_caliper_pair_answer, parse_race_answer, CaliperProfile, CandidateCode,
    CoTRecord, RaceReport, Tool, ValidationStatus,
};
use crate::prompts::{race_answer_text, Templates};
use crate::tokens::TokenEstimator;
use crate::{Error, Result};

/// Phrases that claim prior knowledge of the outcome.
pub const DEFAULT_LEAKAGE_PHRASES: &[&str] = &[
    "as given",
    "the provided outcome",
    "the given outcome",
    "we are told",
    "we were told",
    "already reported",
    "already flagged",
    "the expected answer",
    "the provided answer",
    "the provided measurements",
    "the given measurements",
];

#[derive(Debug, Clone)]
pub struct CotSettings {
    pub min_think_tokens: usize,
    pub max_attempts: u32,
    pub accepted_per_item: u32,
    pub leakage_phrases: Vec<String>,
    pub estimator: TokenEstimator,
}

impl Default for CotSettings {
    fn default() -> Self {
        CotSettings::from_config(&CotConfig::default(), TokenEstimator::default())
    }
}

impl CotSettings {
    pub fn from_config(cfg: &CotConfig, estimator: TokenEstimator) -> Self {
        CotSettings {
            min_think_tokens: cfg.min_think_tokens,
            max_attempts: cfg.max_attempts.max(1),
            accepted_per_item: cfg.accepted_per_item.max(1),
            leakage_phrases: cfg.leakage_phrases.iter().map(|p| p.to_lowercase()).collect(),
            estimator,
        }
    }
}

/// The tool outcome a trace was conditioned on.
#[derive(Debug, Clone, PartialEq)]
pub enum Conditioning {
    Race(RaceReport),
    Pair(CaliperProfile, CaliperProfile),
}

impl Conditioning {
    pub fn hash(&self) -> String {
        match self {
            Conditioning::Race(r) => r.content_hash(),
            Conditioning::Pair(a, b) => pair_outcome_hash(a, b),
        }
    }

    /// Hash of the outcome an answer body parses to.
    pub fn answer_hash(&self, answer: &str) -> Option<String> {
        match self {
            Conditioning::Race(_) => parse_race_answer(answer).ok().map(|r| r.content_hash()),
            Conditioning::Pair(..) => parse_caliper_pair_answer(answer)
                .ok()
                .map(|(a, b)| pair_outcome_hash(&a, &b)),
        }
    }
}

/// Right-trimmed lines with blank runs collapsed, trimmed overall.
fn normalize_block(text: &str) -> String {
    let mut out: Vec<&str> = Vec::new();
    for line in text.lines().map(str::trim_end) {
        if line.is_empty() && out.last().is_none_or(|l| l.is_empty()) {
            continue;
        }
        out.push(line);
    }
    while out.last().is_some_and(|l| l.is_empty()) {
        out.pop();
    }
    out.join("\n")
}

pub fn find_leakage<'p>(think: &str, phrases: &'p [String]) -> Option<&'p str> {
    let lower = think.to_lowercase();
    phrases.iter().find(|p| lower.contains(p.as_str())).map(String::as_str)
}

/// Status of one response. Checks run in order: both blocks present,
/// answer contains `expected` (and parses to the conditioning outcome when
/// one is given), think long enough, no leakage phrase.
pub fn validate_cot(
    think: Option<&str>,
    answer: Option<&str>,
    expected: &str,
    conditioning: Option<&Conditioning>,
    settings: &CotSettings,
) -> ValidationStatus {
    let (Some(think), Some(answer)) = (think, answer) else {
        return ValidationStatus::RejectedFormat;
    };
    if think.trim().is_empty() {
        return ValidationStatus::RejectedFormat;
    }
    if !normalize_block(answer).contains(&normalize_block(expected)) {
        return ValidationStatus::RejectedAnswerMismatch;
    }
    if let Some(c) = conditioning {
        if c.answer_hash(answer).as_deref() != Some(c.hash().as_str()) {
            return ValidationStatus::RejectedAnswerMismatch;
        }
    }
    if settings.estimator.estimate(think) < settings.min_think_tokens {
        return ValidationStatus::RejectedFormat;
    }
    if find_leakage(think, &settings.leakage_phrases).is_some() {
        return ValidationStatus::RejectedLeakage;
    }
    ValidationStatus::Accepted
}

/// Re-runs validation on a stored record.
pub fn revalidate(
    record: &CoTRecord,
    expected: &str,
    conditioning: &Conditioning,
    settings: &CotSettings,
) -> ValidationStatus {
    validate_cot(
        Some(&record.think_text),
        Some(&record.answer_text),
        expected,
        Some(conditioning),
        settings,
    )
}

pub struct CotSynth<'a> {
    pub gateway: &'a Gateway,
    pub templates: &'a Templates,
    pub teacher: &'a str,
    pub params: SamplingParams,
    pub settings: CotSettings,
}

/// Prompt plus everything needed to judge the reply.
struct Job {
    tool: Tool,
    candidate_ids: Vec<String>,
    prompt: String,
    expected: String,
    conditioning: Conditioning,
    hindsight: bool,
    degenerate: bool,
}

impl<'a> CotSynth<'a> {
    /// Race trace for one candidate. Without hindsight the teacher sees the
    /// plain world-model prompt; its reasoning is kept and the answer is the
    /// observed report.
    pub fn synth_race_cot(
        &self,
        candidate: &CandidateCode,
        report: &RaceReport,
        hindsight: bool,
    ) -> Result<Vec<CoTRecord>> {
        if !report.is_canonical() {
            return Err(Error::Format("race report is not canonical".into()));
        }
        let (prompt, expected) = if hindsight {
            self.templates.race_cot(&candidate.source, report)
        } else {
            (
                self.templates.world_model_race(&candidate.source),
                race_answer_text(report),
            )
        };
        self.run(Job {
            tool: Tool::Tsan,
            candidate_ids: vec![candidate.id.clone()],
            prompt,
            expected,
            conditioning: Conditioning::Race(report.clone()),
            hindsight,
            degenerate: false,
        })
    }

    /// Pair trace. `measurements_*` are the rendered answer bodies of each
    /// profile; a self-pair is kept but flagged degenerate.
    #[allow(clippy::too_many_arguments)]
    pub fn synth_caliper_pair_cot(
        &self,
        a: &CandidateCode,
        b: &CandidateCode,
        profile_a: &CaliperProfile,
        profile_b: &CaliperProfile,
        measurements_a: &str,
        measurements_b: &str,
        hindsight: bool,
    ) -> Result<Vec<CoTRecord>> {
        if a.problem_id != b.problem_id {
            return Err(Error::Config("pair spans two problems".into()));
        }
        let (prompt, expected) = if hindsight {
            self.templates
                .caliper_cot(&a.source, &b.source, measurements_a, measurements_b)
        } else {
            (
                self.templates
                    .world_model_caliper(&a.source, &b.source, &profile_a.thread_counts),
                crate::model::render_caliper_pair_answer(measurements_a, measurements_b),
            )
        };
        self.run(Job {
            tool: Tool::Caliper,
            candidate_ids: vec![a.id.clone(), b.id.clone()],
            prompt,
            expected,
            conditioning: Conditioning::Pair(profile_a.clone(), profile_b.clone()),
            hindsight,
            degenerate: a.id == b.id,
        })
    }

    /// Samples until `accepted_per_item` traces pass or attempts run out.
    /// Every attempt is returned, rejected ones included.
    fn run(&self, job: Job) -> Result<Vec<CoTRecord>> {
        let outcome_hash = job.conditioning.hash();
        let messages = [Message::user(&job.prompt)];
        let mut records = Vec::new();
        let mut accepted = 0;
        for attempt in 0..self.settings.max_attempts {
            let raw = self
                .gateway
                .complete_sample(self.teacher, &messages, &self.params, attempt)?;
            let (think, answer) = split_think_answer(&raw);
            let answer = if job.hindsight {
                answer
            } else {
                answer.map(|_| job.expected.clone())
            };
            let status = validate_cot(
                think.as_deref(),
                answer.as_deref(),
                &job.expected,
                Some(&job.conditioning),
                &self.settings,
            );
            let hindsight_tag = if job.hindsight { "hindsight" } else { "a_priori" };
            let attempt_tag = attempt.to_string();
            let id = content_hash_parts(
                [
                    job.tool.as_str(),
                    hindsight_tag,
                    &outcome_hash,
                    &attempt_tag,
                    self.teacher,
                ]
                .into_iter()
                .chain(job.candidate_ids.iter().map(String::as_str)),
            );
            records.push(CoTRecord {
                id,
                tool: job.tool,
                candidate_ids: job.candidate_ids.clone(),
                attempt,
                think_text: think.unwrap_or_default(),
                answer_text: answer.unwrap_or_default(),
                teacher_model: self.teacher.to_owned(),
                conditioned_outcome_hash: outcome_hash.clone(),
                validation_status: status,
                hindsight: job.hindsight,
                degenerate: job.degenerate,
                raw_response: (!status.is_accepted() || !job.hindsight).then(|| raw.clone()),
            });
            if status.is_accepted() {
                accepted += 1;
                if accepted >= self.settings.accepted_per_item {
                    break;
                }
            }
        }
        Ok(records)
    }
}

/// Ordered index pairs over `n` candidates: distinct unordered pairs in a
/// seeded random order, truncated to `budget`, each flipped with
/// probability one half.
pub fn pair_candidates(n: usize, budget: Option<usize>, seed: u64) -> Result<Vec<(usize, usize)>> {
    if n < 2 {
        return Err(Error::InsufficientCandidates { have: n, need: 2 });
    }
    let mut pairs: Vec<(usize, usize)> = (0..n).flat_map(|i| (i + 1..n).map(move |j| (i, j))).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    pairs.shuffle(&mut rng);
    if let Some(b) = budget {
        pairs.truncate(b);
    }
    Ok(pairs
        .into_iter()
        .map(|(i, j)| if rng.gen_bool(0.5) { (j, i) } else { (i, j) })
        .collect())
}

/// Stable per-problem seed for [`pair_candidates`].
pub fn pairing_seed(problem_id: &str, base: u64) -> u64 {
    let h = content_hash_parts([problem_id, &base.to_string()]);
    u64::from_str_radix(&h[..16], 16).unwrap_or(base)
}
