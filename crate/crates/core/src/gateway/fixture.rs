//! Offline endpoint for `--mock-endpoint`: recognizes which prompt it was
//! sent and answers from a fixture file or a built-in synthesizer.

use std::path::PathBuf;
use std::sync::atomic::{AtomicU64, Ordering};

use super::{BackendError, ChatBackend, Message, ModelEndpoint, Role, SamplingParams};
use crate::model::{content_hash, render_caliper_answer, render_caliper_pair_answer, CaliperProfile, WorkCell};
use crate::prompts::{answer_section, race_answer_text};
use crate::toolchain::stub::{synthetic_caliper, synthetic_tsan, unprotected_update};
use crate::toolchain::{parse_caliper, parse_tsan, region_snippets, scan_parallel_regions, CANDIDATE_FILE};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PromptKind {
    Variants,
    Reference,
    CandidatesRacy,
    CandidatesInefficient,
    CotRace,
    CotCaliper,
    Regions,
    WorldModelRace,
    WorldModelCaliper,
    SelfFeedback,
    Edit,
    Apply,
    ApplyRepair,
    Unknown,
}

impl PromptKind {
    pub fn name(self) -> &'static str {
        match self {
            PromptKind::Variants => "variants",
            PromptKind::Reference => "reference",
            PromptKind::CandidatesRacy => "candidates_racy",
            PromptKind::CandidatesInefficient => "candidates_inefficient",
            PromptKind::CotRace => "cot_race",
            PromptKind::CotCaliper => "cot_caliper",
            PromptKind::Regions => "regions",
            PromptKind::WorldModelRace => "world_model_race",
            PromptKind::WorldModelCaliper => "world_model_caliper",
            PromptKind::SelfFeedback => "self_feedback",
            PromptKind::Edit => "edit",
            PromptKind::Apply => "apply",
            PromptKind::ApplyRepair => "apply_repair",
            PromptKind::Unknown => "unknown",
        }
    }

    pub fn classify(prompt: &str) -> PromptKind {
        let has = |s: &str| prompt.contains(s);
        if has("failed to compile") && has("keeping the proposed edit") {
            PromptKind::ApplyRepair
        } else if has("Identify all OpenMP parallel regions") {
            PromptKind::Regions
        } else if has("parallel programming problems that are closely related") {
            PromptKind::Variants
        } else if has("complete the `reference.cc` code") {
            PromptKind::Reference
        } else if has("implementations for the required dependency file") {
            if has("must have a data race") {
                PromptKind::CandidatesRacy
            } else {
                PromptKind::CandidatesInefficient
            }
        } else if has("pairs of analogous parallel region") {
            PromptKind::CotCaliper
        } else if has("Code A and Code B are two alternative implementations") {
            PromptKind::WorldModelCaliper
        } else if has("in-fill a long chain of thought") {
            PromptKind::CotRace
        } else if has("predict data races that would be caught by ThreadSanitizer") {
            PromptKind::WorldModelRace
        } else if has("Apply the proposed edit") {
            PromptKind::Apply
        } else if has("propose an edit that removes every data race") {
            PromptKind::Edit
        } else if has("code for data races") {
            PromptKind::SelfFeedback
        } else {
            PromptKind::Unknown
        }
    }
}

/// Answers every prompt the pipeline sends. A file `<kind>.txt` or
/// `<kind>_<sample>.txt` in the fixture directory takes precedence over
/// the synthesizer.
pub struct FixtureBackend {
    dir: Option<PathBuf>,
    calls: AtomicU64,
}

impl FixtureBackend {
    pub fn new(dir: Option<PathBuf>) -> Self {
        FixtureBackend {
            dir,
            calls: AtomicU64::new(0),
        }
    }

    pub fn calls(&self) -> u64 {
        self.calls.load(Ordering::SeqCst)
    }

    fn fixture(&self, kind: PromptKind, sample: u32) -> Option<String> {
        let dir = self.dir.as_ref()?;
        [format!("{}_{sample}.txt", kind.name()), format!("{}.txt", kind.name())]
            .iter()
            .map(|f| dir.join(f))
            .find(|p| p.is_file())
            .and_then(|p| std::fs::read_to_string(p).ok())
    }
}

impl ChatBackend for FixtureBackend {
    fn chat(
        &self,
        _endpoint: &ModelEndpoint,
        messages: &[Message],
        _params: &SamplingParams,
        sample_index: u32,
    ) -> Result<String, BackendError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        let last = messages
            .iter()
            .rev()
            .find(|m| m.role == Role::User)
            .ok_or_else(|| BackendError::permanent("no user message"))?;
        let kind = PromptKind::classify(&last.content);
        if let Some(text) = self.fixture(kind, sample_index) {
            return Ok(text);
        }
        let first = messages
            .iter()
            .find(|m| m.role == Role::User)
            .map(|m| m.content.as_str())
            .unwrap_or("");
        synthesize(kind, &last.content, first)
            .ok_or_else(|| BackendError::permanent(format!("mock endpoint cannot answer a `{}` prompt", kind.name())))
    }
}

fn between<'a>(text: &'a str, open: &str, close: &str) -> Option<&'a str> {
    let start = text.find(open)? + open.len();
    let end = text[start..].find(close)? + start;
    Some(&text[start..end])
}

/// Code in the `n`-th cpp fence of a prompt.
fn nth_cpp(text: &str, n: usize) -> Option<String> {
    let mut rest = text;
    let mut found = 0;
    while let Some(at) = rest.find("```cpp\n") {
        let body_start = at + "```cpp\n".len();
        let end = rest[body_start..].find("\n```")? + body_start;
        if found == n {
            return Some(format!("{}\n", &rest[body_start..end]));
        }
        found += 1;
        rest = &rest[end + 4..];
    }
    None
}

const THINK_FILLER: &str = "Reading the code top to bottom, the function receives its inputs by \
const reference, so the vectors themselves are never written. The interesting part is the \
OpenMP parallel region: the loop iterations are divided among the threads of the team, and \
each iteration reads one element of each input. Any variable declared outside the region is \
shared by default, so every statement that updates such a variable has to be checked for \
synchronization. Variables declared inside the loop body are private to each thread and are \
harmless. A reduction clause gives each thread a private copy that is combined at the end, \
an atomic directive makes a single update indivisible, and a critical section serializes a \
block. Without one of these, two threads can read the same old value and write back \
conflicting results, which is exactly the pattern a dynamic detector flags. Loop counters of \
a worksharing loop are private, and the implicit barrier at the end of the loop orders \
everything before the return statement.";

fn think(extra: &str) -> String {
    format!("<think>\n{THINK_FILLER}\n\n{extra}\n</think>")
}

fn synthesize(kind: PromptKind, prompt: &str, first_prompt: &str) -> Option<String> {
    match kind {
        PromptKind::Variants => {
            let problem = between(prompt, "<problem>\n", "\n</problem>")?.trim();
            let n: usize = between(prompt, "propose ", " parallel programming problems")?
                .trim()
                .parse()
                .ok()?;
            let sizes = ["one million", "two million", "five hundred thousand", "ten million"];
            let types = ["double", "float", "long integer", "32-bit integer", "complex"];
            let blocks: Vec<String> = (1..=n)
                .map(|k| {
                    format!(
                        "<variant_{k}>\n{problem} The inputs now hold {} {} values (variant {k}).\n</variant_{k}>",
                        sizes[k % sizes.len()],
                        types[k % types.len()],
                    )
                })
                .collect();
            Some(blocks.join("\n\n"))
        }
        PromptKind::Reference => Some(format!("```cpp\n{REFERENCE}```")),
        PromptKind::CandidatesRacy | PromptKind::CandidatesInefficient => {
            let k: usize = between(prompt, "write ", " implementations")?.trim().parse().ok()?;
            let pool = if kind == PromptKind::CandidatesRacy {
                RACY
            } else {
                INEFFICIENT
            };
            let blocks: Vec<String> = (0..k)
                .map(|i| {
                    let n = i + 1;
                    format!(
                        "<implementation_{n}>\n```cpp\n{}```\n</implementation_{n}>",
                        pool[i % pool.len()]
                    )
                })
                .collect();
            Some(blocks.join("\n\n"))
        }
        PromptKind::CotRace | PromptKind::CotCaliper => {
            let code = nth_cpp(prompt, 0).unwrap_or_default();
            let focus = match unprotected_update(&code) {
                Some((line, _)) => format!("Line {line} updates a shared variable without synchronization."),
                None => "Every shared update is protected or private.".to_owned(),
            };
            let answer = answer_section(prompt)?;
            Some(format!("{}\n<answer>\n{answer}\n</answer>", think(&focus)))
        }
        PromptKind::Regions => {
            let numbered = nth_cpp(prompt, 0)?;
            let code: String = numbered
                .lines()
                .map(|l| l.split_once(": ").map(|(_, rest)| rest).unwrap_or(""))
                .collect::<Vec<_>>()
                .join("\n");
            let spans = scan_parallel_regions(&code).ok()?;
            let items: Vec<String> = spans
                .iter()
                .map(|s| format!("  {{\"start\": {}, \"end\": {}}}", s.start_line, s.end_line))
                .collect();
            Some(format!("```json\n[\n{}\n]\n```", items.join(",\n")))
        }
        PromptKind::WorldModelRace => {
            let code = nth_cpp(prompt, 0)?;
            let report = parse_tsan(&synthetic_tsan(&code), CANDIDATE_FILE).report;
            let note = if report.is_race_free() {
                "No unsynchronized shared update remains."
            } else {
                "A shared variable is updated by several threads at once."
            };
            Some(format!(
                "{}\n<answer>\n{}\n</answer>",
                think(note),
                race_answer_text(&report)
            ))
        }
        PromptKind::WorldModelCaliper => {
            let a = nth_cpp(prompt, 0)?;
            let b = nth_cpp(prompt, 1)?;
            let tcs = thread_counts(prompt);
            let ma = predicted_measurements(&a, &tcs)?;
            let mb = predicted_measurements(&b, &tcs)?;
            Some(format!(
                "{}\n<answer>\n\n{}\n\n</answer>",
                think("Comparing the analogous regions of both codes."),
                render_caliper_pair_answer(&ma, &mb)
            ))
        }
        PromptKind::SelfFeedback => {
            let code = nth_cpp(prompt, 0)?;
            Some(match unprotected_update(&code) {
                Some((line, _)) => format!("Line {line} writes a shared variable from every thread without synchronization; this is a data race."),
                None => "I do not see any data race in this code.".to_owned(),
            })
        }
        PromptKind::Edit => Some(
            "Protect every update of a variable shared across threads: put `#pragma omp atomic` before \
compound updates of shared scalars, and declare scratch variables inside the loop body so each \
thread has its own copy."
                .to_owned(),
        ),
        PromptKind::Apply | PromptKind::ApplyRepair => {
            let code = nth_cpp(first_prompt, 0)?;
            Some(format!("```cpp\n{}```", apply_fix(&code)))
        }
        PromptKind::Unknown => None,
    }
}

fn thread_counts(prompt: &str) -> Vec<u32> {
    let Some(s) = between(prompt, "measured by Caliper for ", " threads") else {
        return vec![4, 16, 64, 128];
    };
    let tcs: Vec<u32> = s
        .split(|c: char| !c.is_ascii_digit())
        .filter_map(|t| t.parse().ok())
        .collect();
    if tcs.is_empty() {
        vec![4, 16, 64, 128]
    } else {
        tcs
    }
}

fn predicted_measurements(code: &str, tcs: &[u32]) -> Option<String> {
    let spans = scan_parallel_regions(code).ok()?;
    let mut profile = CaliperProfile::new(tcs.iter().copied());
    let id = content_hash(code);
    for &tc in tcs {
        let sample = parse_caliper(&synthetic_caliper(&id, &spans, tc), &spans, &Default::default()).ok()?;
        for (label, cell) in sample.work_percent {
            let cell = match cell {
                WorkCell::Measured(v) => WorkCell::Measured(v.round()),
                f => f,
            };
            profile.insert(label, tc, cell);
        }
    }
    Some(render_caliper_answer(&profile, &region_snippets(code, &spans)))
}

/// Guards each unprotected shared update the stub detector finds.
fn apply_fix(code: &str) -> String {
    let mut code = code.to_owned();
    for _ in 0..32 {
        let Some((line, compound)) = unprotected_update(&code) else {
            break;
        };
        let mut lines: Vec<String> = code.lines().map(str::to_owned).collect();
        let target = lines[line - 1].clone();
        let indent = &target[..target.len() - target.trim_start().len()];
        if compound {
            lines.insert(line - 1, format!("{indent}#pragma omp atomic"));
        } else {
            lines[line - 1] = format!("{indent}auto {}", target.trim_start());
        }
        code = lines.join("\n") + "\n";
    }
    code
}

const REFERENCE: &str = r#"#include <cmath>
#include <random>
#include <vector>

double reference(const std::vector<double>& v, const std::vector<double>& w) {
    double dotProduct = 0.0;
    for (size_t i = 0; i < v.size(); i++) {
        dotProduct += v[i] * w[i];
    }
    return dotProduct;
}

double generated(const std::vector<double>& v, const std::vector<double>& w);

bool validate() {
    std::mt19937 gen(42);
    std::uniform_real_distribution<double> dist(-1.0, 1.0);
    for (int t = 0; t < 10; t++) {
        std::vector<double> v(1000 + t), w(1000 + t);
        for (size_t i = 0; i < v.size(); i++) {
            v[i] = dist(gen);
            w[i] = dist(gen);
        }
        if (std::fabs(reference(v, w) - generated(v, w)) > 1e-6) {
            return false;
        }
    }
    return true;
}

void benchmark() {
    std::mt19937 gen(7);
    std::uniform_real_distribution<double> dist(-1.0, 1.0);
    std::vector<double> v(1 << 24), w(1 << 24);
    for (size_t i = 0; i < v.size(); i++) {
        v[i] = dist(gen);
        w[i] = dist(gen);
    }
    volatile double sink = generated(v, w);
    (void)sink;
}
"#;

const RACY: &[&str] = &[
    r#"#include <vector>
#include <omp.h>

double generated(const std::vector<double>& v, const std::vector<double>& w) {
    double dotProduct = 0.0;
    #pragma omp parallel for
    for (size_t i = 0; i < v.size(); i++) {
        dotProduct += v[i] * w[i];
    }
    return dotProduct;
}
"#,
    r#"#include <vector>
#include <omp.h>

double generated(const std::vector<double>& v, const std::vector<double>& w) {
    double sum = 0.0;
    double t = 0.0;
    #pragma omp parallel for
    for (size_t i = 0; i < v.size(); i++) {
        t = v[i] * w[i];
        #pragma omp atomic
        sum += t;
    }
    return sum;
}
"#,
    r#"#include <vector>
#include <omp.h>

double generated(const std::vector<double>& v, const std::vector<double>& w) {
    double sum = 0.0;
    #pragma omp parallel
    {
        double local = 0.0;
        #pragma omp for
        for (size_t i = 0; i < v.size(); i++) {
            local += v[i] * w[i];
        }
        sum += local;
    }
    return sum;
}
"#,
    r#"#include <vector>
#include <omp.h>

double generated(const std::vector<double>& v, const std::vector<double>& w) {
    double sum = 0.0;
    int chunks = 0;
    #pragma omp parallel for reduction(+:sum)
    for (size_t i = 0; i < v.size(); i++) {
        sum += v[i] * w[i];
        chunks++;
    }
    return chunks > 0 ? sum : 0.0;
}
"#,
];

const INEFFICIENT: &[&str] = &[
    r#"#include <vector>
#include <omp.h>

double generated(const std::vector<double>& v, const std::vector<double>& w) {
    double sum = 0.0;
    #pragma omp parallel for reduction(+:sum) schedule(dynamic, 1)
    for (size_t i = 0; i < v.size(); i++) {
        sum += v[i] * w[i];
    }
    return sum;
}
"#,
    r#"#include <vector>
#include <omp.h>

double generated(const std::vector<double>& v, const std::vector<double>& w) {
    double sum = 0.0;
    #pragma omp parallel for
    for (size_t i = 0; i < v.size(); i++) {
        #pragma omp atomic
        sum += v[i] * w[i];
    }
    return sum;
}
"#,
    r#"#include <vector>
#include <omp.h>

double generated(const std::vector<double>& v, const std::vector<double>& w) {
    double sum = 0.0;
    #pragma omp parallel for
    for (size_t i = 0; i < v.size(); i++) {
        #pragma omp critical
        sum += v[i] * w[i];
    }
    return sum;
}
"#,
    r#"#include <vector>
#include <omp.h>

double generated(const std::vector<double>& v, const std::vector<double>& w) {
    double sum = 0.0;
    #pragma omp parallel
    {
        double local = 0.0;
        #pragma omp for schedule(static, 1)
        for (size_t i = 0; i < v.size(); i++) {
            local += v[i] * w[i];
        }
        #pragma omp barrier
        #pragma omp critical
        sum += local;
    }
    return sum;
}
"#,
];
