//! Canonical domain records, content hashing and the verbatim answer formats.

mod caliper;
mod lenient_json;
mod race;

pub use caliper::{
    parse_caliper_answer, parse_caliper_pair_answer, render_caliper_answer, render_caliper_pair_answer, CaliperProfile,
    WorkCell,
};
pub use lenient_json::{find_json_array, parse_lenient_json};
pub use race::{
    canonicalize_race_report, parse_race_answer, render_race_answer, CodeLocation, RaceFinding, RaceReport, RaceType,
};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::{Error, Result};

/// Version tag written into every JSONL record.
pub const SCHEMA_VERSION: u32 = 1;

/// Hex-encoded SHA-256 of `bytes`.
pub fn content_hash(bytes: impl AsRef<[u8]>) -> String {
    hex::encode(Sha256::digest(bytes.as_ref()))
}

/// Hash of several parts, length-prefixed so that part boundaries matter.
pub fn content_hash_parts<I, P>(parts: I) -> String
where
    I: IntoIterator<Item = P>,
    P: AsRef<[u8]>,
{
    let mut hasher = Sha256::new();
    for part in parts {
        let part = part.as_ref();
        hasher.update((part.len() as u64).to_le_bytes());
        hasher.update(part);
    }
    hex::encode(hasher.finalize())
}

/// Strips `//` and `/* */` comments (string and char literals are left
/// alone) and collapses every whitespace run to a single space.
pub fn normalize_source(source: &str) -> String {
    let mut out = String::with_capacity(source.len());
    let mut chars = source.chars().peekable();
    let mut pending_space = false;

    let push = |out: &mut String, c: char, pending: &mut bool| {
        if *pending && !out.is_empty() {
            out.push(' ');
        }
        *pending = false;
        out.push(c);
    };

    while let Some(c) = chars.next() {
        match c {
            '/' if chars.peek() == Some(&'/') => {
                for n in chars.by_ref() {
                    if n == '\n' {
                        break;
                    }
                }
                pending_space = true;
            }
            '/' if chars.peek() == Some(&'*') => {
                chars.next();
                let mut prev = '\0';
                for n in chars.by_ref() {
                    if prev == '*' && n == '/' {
                        break;
                    }
                    prev = n;
                }
                pending_space = true;
            }
            '"' | '\'' => {
                push(&mut out, c, &mut pending_space);
                let quote = c;
                while let Some(n) = chars.next() {
                    out.push(n);
                    if n == '\\' {
                        if let Some(esc) = chars.next() {
                            out.push(esc);
                        }
                    } else if n == quote || n == '\n' {
                        break;
                    }
                }
            }
            c if c.is_whitespace() => pending_space = true,
            c => push(&mut out, c, &mut pending_space),
        }
    }
    out
}

/// Normalization used for problem-statement dedupe: whitespace collapsed,
/// lowercased.
pub fn normalize_statement(statement: &str) -> String {
    statement
        .split_whitespace()
        .collect::<Vec<_>>()
        .join(" ")
        .to_lowercase()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProblemRecord {
    pub id: String,
    pub domain: String,
    pub seed_id: String,
    /// 0 for the seed problem itself, 1..=N for generated variants.
    pub variant_index: u32,
    pub statement: String,
}

impl ProblemRecord {
    pub fn new(
        domain: impl Into<String>,
        seed_id: impl Into<String>,
        variant_index: u32,
        statement: impl Into<String>,
    ) -> Result<Self> {
        let statement = statement.into();
        if statement.trim().is_empty() {
            return Err(Error::Format("problem statement is empty".into()));
        }
        Ok(ProblemRecord {
            id: content_hash(statement.as_bytes()),
            domain: domain.into(),
            seed_id: seed_id.into(),
            variant_index,
            statement,
        })
    }

    pub fn dedupe_key(&self) -> String {
        content_hash(normalize_statement(&self.statement))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HarnessBundle {
    pub problem_id: String,
    pub makefile: String,
    pub harness_source: String,
    pub reference_source: String,
    /// Normalized signature of `reference`, e.g.
    /// `double reference(const vector<double>&, const vector<double>&)`.
    pub signature: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StrategyMode {
    Racy,
    Inefficient,
}

impl StrategyMode {
    pub fn as_str(self) -> &'static str {
        match self {
            StrategyMode::Racy => "racy",
            StrategyMode::Inefficient => "inefficient",
        }
    }
}

impl std::str::FromStr for StrategyMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "racy" => Ok(StrategyMode::Racy),
            "inefficient" => Ok(StrategyMode::Inefficient),
            other => Err(Error::Config(format!("unknown strategy mode `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CandidateCode {
    /// Hash of the problem id and the normalized source.
    pub id: String,
    pub problem_id: String,
    pub source: String,
    pub generator_model: String,
    pub strategy_mode: StrategyMode,
    pub implementation_index: u32,
}

impl CandidateCode {
    pub fn new(
        problem_id: impl Into<String>,
        source: impl Into<String>,
        generator_model: impl Into<String>,
        strategy_mode: StrategyMode,
        implementation_index: u32,
    ) -> Result<Self> {
        let problem_id = problem_id.into();
        let source = source.into();
        if source.trim().is_empty() {
            return Err(Error::Format("candidate source is empty".into()));
        }
        Ok(CandidateCode {
            id: content_hash_parts([problem_id.as_str(), &normalize_source(&source)]),
            problem_id,
            source,
            generator_model: generator_model.into(),
            strategy_mode,
            implementation_index,
        })
    }

    /// Problem-independent dedupe key over the normalized source.
    pub fn dedupe_key(&self) -> String {
        source_dedupe_key(&self.source)
    }
}

pub fn source_dedupe_key(source: &str) -> String {
    content_hash(normalize_source(source))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Tool {
    Tsan,
    Caliper,
}

impl Tool {
    pub fn as_str(self) -> &'static str {
        match self {
            Tool::Tsan => "tsan",
            Tool::Caliper => "caliper",
        }
    }
}

impl std::str::FromStr for Tool {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tsan" => Ok(Tool::Tsan),
            "caliper" => Ok(Tool::Caliper),
            other => Err(Error::Config(format!("unknown tool `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "tool", content = "outcome", rename_all = "snake_case")]
pub enum ToolOutcome {
    Tsan(RaceReport),
    Caliper(CaliperProfile),
}

impl ToolOutcome {
    pub fn hash(&self) -> String {
        match self {
            ToolOutcome::Tsan(r) => r.content_hash(),
            ToolOutcome::Caliper(p) => p.content_hash(),
        }
    }
}

/// Hash identifying the joint outcome of an ordered profile pair.
pub fn pair_outcome_hash(a: &CaliperProfile, b: &CaliperProfile) -> String {
    content_hash_parts([a.content_hash(), b.content_hash()])
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ValidationStatus {
    Accepted,
    RejectedAnswerMismatch,
    RejectedLeakage,
    RejectedFormat,
}

impl ValidationStatus {
    pub fn is_accepted(self) -> bool {
        self == ValidationStatus::Accepted
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoTRecord {
    pub id: String,
    pub tool: Tool,
    /// One candidate id for tsan, the ordered (A, B) pair for caliper.
    pub candidate_ids: Vec<String>,
    pub attempt: u32,
    pub think_text: String,
    pub answer_text: String,
    pub teacher_model: String,
    pub conditioned_outcome_hash: String,
    pub validation_status: ValidationStatus,
    /// False for traces synthesized without showing the outcome.
    #[serde(default = "default_true")]
    pub hindsight: bool,
    /// Self-pairs are kept for audit but never exported.
    #[serde(default)]
    pub degenerate: bool,
    /// Raw teacher output, kept only for rejected attempts.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub raw_response: Option<String>,
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TupleInputs {
    Single { candidate: CandidateCode },
    Pair { a: CandidateCode, b: CandidateCode },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TupleOutcome {
    Race { report: RaceReport },
    Pair { a: CaliperProfile, b: CaliperProfile },
}

impl TupleOutcome {
    pub fn hash(&self) -> String {
        match self {
            TupleOutcome::Race { report } => report.content_hash(),
            TupleOutcome::Pair { a, b } => pair_outcome_hash(a, b),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainTuple {
    pub tuple_id: String,
    pub problem_id: String,
    pub tool: Tool,
    pub inputs: TupleInputs,
    pub cot: CoTRecord,
    pub outcome: TupleOutcome,
}

impl TrainTuple {
    /// Checks the cross-record invariants every exported tuple must hold.
    pub fn check(&self) -> std::result::Result<(), String> {
        if !self.cot.validation_status.is_accepted() {
            return Err("cot is not accepted".into());
        }
        if self.cot.conditioned_outcome_hash != self.outcome.hash() {
            return Err("cot was conditioned on a different outcome".into());
        }
        match (&self.tool, &self.inputs, &self.outcome) {
            (Tool::Tsan, TupleInputs::Single { .. }, TupleOutcome::Race { .. }) => Ok(()),
            (Tool::Caliper, TupleInputs::Pair { a, b }, TupleOutcome::Pair { .. }) => {
                if a.problem_id != b.problem_id {
                    Err("caliper pair spans two problems".into())
                } else if a.id == b.id {
                    Err("caliper pair is a self-pair".into())
                } else {
                    Ok(())
                }
            }
            _ => Err("tool, inputs and outcome shapes disagree".into()),
        }
    }

    /// Label used for balance accounting: racy / race_free for tsan,
    /// a_higher / b_higher / tie (program-level mean work%) for caliper.
    pub fn label(&self) -> String {
        match &self.outcome {
            TupleOutcome::Race { report } => if report.is_race_free() { "race_free" } else { "racy" }.to_owned(),
            TupleOutcome::Pair { a, b } => {
                let (wa, wb) = (a.overall_mean(), b.overall_mean());
                match wa.partial_cmp(&wb) {
                    Some(std::cmp::Ordering::Greater) => "a_higher",
                    Some(std::cmp::Ordering::Less) => "b_higher",
                    _ => "tie",
                }
                .to_owned()
            }
        }
    }
}
