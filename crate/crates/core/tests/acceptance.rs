//! Acceptance suite: one PASS/FAIL line per criterion. Needs neither a
//! compiler nor the network.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};
use std::process::{Command, ExitCode};
use std::sync::Arc;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Deserialize;

use ompsynth::cot::{Conditioning, CotSettings, CotSynth};
use ompsynth::dataset::{
    emit_training_config, load_training_config, split, subsample, Grouped, SftRecord, TrainingConfig,
};
use ompsynth::eval::{
    bucket_by_gap, buckets_csv, compute_table, length_stats, race_table, ranking_table, ComputeRow, Evaluator,
    FlopsFormula, LabelSource, RaceEvalItem, Rank, RankEvalItem,
};
use ompsynth::fix::{fix_grid, FeedbackSource, FixReport, FixResult};
use ompsynth::gateway::mock::ScriptedBackend;
use ompsynth::gateway::{split_think_answer, Gateway, Message, ModelEndpoint, SamplingParams};
use ompsynth::model::{
    canonicalize_race_report, content_hash, parse_caliper_answer, parse_race_answer, render_caliper_answer,
    render_caliper_pair_answer, render_race_answer, CaliperProfile, CandidateCode, CoTRecord, CodeLocation,
    RaceFinding, RaceReport, RaceType, StrategyMode, TrainTuple, ValidationStatus, WorkCell,
};
use ompsynth::prompts::{answer_section, Templates};
use ompsynth::tokens::TokenEstimator;
use ompsynth::toolchain::{
    check_marker_nesting, instrument_with_caliper, parse_tsan, region_snippets, strip_caliper_markers, validate_spans,
    RegionSpan,
};

// pinned tolerances
const TSAN_SUITE_SECONDS: f64 = 1.0;
const E2E_SECONDS: f64 = 60.0;
const RANDOM_BASELINE: f64 = 50.0;
const RANDOM_TOLERANCE: f64 = 5.0;
const MIN_RANDOM_CELLS: usize = 400;
const FLOAT_EPS: f64 = 1e-9;

type Check = std::result::Result<String, String>;
type Criterion = (&'static str, fn() -> Check);

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        if !$cond {
            return Err(format!($($fmt)+));
        }
    };
}

fn manifest_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
}

// ---------------------------------------------------------------- tsan goldens

#[derive(Deserialize)]
struct Golden {
    report: RaceReport,
    non_candidate: Vec<String>,
    diagnostics: usize,
    warnings: usize,
}

fn tsan_golden_suite() -> Check {
    let dir = manifest_dir().join("tests/fixtures/tsan");
    let mut cases = Vec::new();
    for entry in std::fs::read_dir(&dir).map_err(|e| e.to_string())? {
        let path = entry.map_err(|e| e.to_string())?.path();
        let name = path.file_name().unwrap().to_string_lossy().into_owned();
        let Some(stem) = name.strip_suffix(".golden.json") else {
            continue;
        };
        let raw = std::fs::read_to_string(dir.join(format!("{stem}.txt"))).map_err(|e| e.to_string())?;
        let golden: Golden = serde_json::from_str(&std::fs::read_to_string(&path).map_err(|e| e.to_string())?)
            .map_err(|e| e.to_string())?;
        cases.push((stem.to_owned(), raw, golden));
    }
    ensure!(cases.len() >= 10, "{} fixtures, need at least 10", cases.len());
    let start = Instant::now();
    for (name, raw, golden) in &cases {
        let p = parse_tsan(raw, "generated.cc");
        ensure!(p.report == golden.report, "{name}: report differs from golden");
        ensure!(p.report.is_canonical(), "{name}: report not canonical");
        let nc: Vec<String> = p.non_candidate.iter().map(|l| l.to_string()).collect();
        ensure!(nc == golden.non_candidate, "{name}: non-candidate locations {nc:?}");
        ensure!(p.diagnostics.len() == golden.diagnostics, "{name}: diagnostics");
        ensure!(p.warning_count == golden.warnings, "{name}: warning count");
    }
    let secs = start.elapsed().as_secs_f64();
    ensure!(secs < TSAN_SUITE_SECONDS, "took {secs:.3}s");
    Ok(format!("{} fixtures in {:.1} ms", cases.len(), secs * 1e3))
}

// ---------------------------------------------------------------- instrumentation

const KERNEL: &str = "\
void f(double* a, int n) {
    double s = 0;
    #pragma omp parallel for
    for (int i = 0; i < n; i++) {
        #pragma omp atomic
        s += a[i];
    }
}
";

fn instrumentation_goldens() -> Vec<(&'static str, Vec<RegionSpan>, &'static str)> {
    vec![
        (
            "no spans",
            vec![],
            "\
#include <caliper/cali.h>
void f(double* a, int n) {
    double s = 0;
    #pragma omp parallel for
    for (int i = 0; i < n; i++) {
        #pragma omp atomic
        s += a[i];
    }
}
",
        ),
        (
            "single",
            vec![RegionSpan::new(3, 7)],
            "\
#include <caliper/cali.h>
void f(double* a, int n) {
    double s = 0;
    CALI_MARK_BEGIN(\"region_3_7\");
    #pragma omp parallel for
    for (int i = 0; i < n; i++) {
        #pragma omp atomic
        s += a[i];
    }
    CALI_MARK_END(\"region_3_7\");
}
",
        ),
        (
            "nested pair",
            vec![RegionSpan::new(3, 7), RegionSpan::new(5, 6)],
            "\
#include <caliper/cali.h>
void f(double* a, int n) {
    double s = 0;
    CALI_MARK_BEGIN(\"region_3_7\");
    #pragma omp parallel for
    for (int i = 0; i < n; i++) {
        CALI_MARK_BEGIN(\"region_5_6\");
        #pragma omp atomic
        s += a[i];
        CALI_MARK_END(\"region_5_6\");
    }
    CALI_MARK_END(\"region_3_7\");
}
",
        ),
        (
            "disjoint, unsorted input",
            vec![RegionSpan::new(5, 6), RegionSpan::new(2, 2)],
            "\
#include <caliper/cali.h>
void f(double* a, int n) {
    CALI_MARK_BEGIN(\"region_2_2\");
    double s = 0;
    CALI_MARK_END(\"region_2_2\");
    #pragma omp parallel for
    for (int i = 0; i < n; i++) {
        CALI_MARK_BEGIN(\"region_5_6\");
        #pragma omp atomic
        s += a[i];
        CALI_MARK_END(\"region_5_6\");
    }
}
",
        ),
        (
            "nested, shared start line",
            vec![RegionSpan::new(3, 4), RegionSpan::new(3, 7)],
            "\
#include <caliper/cali.h>
void f(double* a, int n) {
    double s = 0;
    CALI_MARK_BEGIN(\"region_3_7\");
    CALI_MARK_BEGIN(\"region_3_4\");
    #pragma omp parallel for
    for (int i = 0; i < n; i++) {
    CALI_MARK_END(\"region_3_4\");
        #pragma omp atomic
        s += a[i];
    }
    CALI_MARK_END(\"region_3_7\");
}
",
        ),
    ]
}

fn random_code(rng: &mut ChaCha8Rng) -> String {
    const BODIES: &[&str] = &[
        "int x = 0;",
        "#pragma omp parallel for",
        "for (int i = 0; i < n; i++) {",
        "}",
        "sum += v[i];",
        "",
        "#pragma omp critical",
        "return sum;",
    ];
    let n = rng.gen_range(1..40);
    let mut code: String = (0..n)
        .map(|_| {
            let indent = " ".repeat(rng.gen_range(0..3) * 4);
            format!("{indent}{}", BODIES[rng.gen_range(0..BODIES.len())])
        })
        .collect::<Vec<_>>()
        .join("\n");
    if rng.gen_bool(0.8) {
        code.push('\n');
    }
    code
}

fn random_spans(rng: &mut ChaCha8Rng, n: usize) -> Vec<RegionSpan> {
    let mut kept: Vec<RegionSpan> = Vec::new();
    for _ in 0..rng.gen_range(0..8) {
        let s = rng.gen_range(1..=n);
        let e = (s + rng.gen_range(0..n)).min(n);
        let mut trial = kept.clone();
        trial.push(RegionSpan::new(s, e));
        if validate_spans(&trial, n).is_ok() {
            kept = trial;
        }
    }
    kept
}

fn instrumentation() -> Check {
    let goldens = instrumentation_goldens();
    for (name, spans, want) in &goldens {
        let got = instrument_with_caliper(KERNEL, spans).map_err(|e| format!("{name}: {e}"))?;
        ensure!(got == *want, "{name}: output differs from golden:\n{got}");
        ensure!(
            strip_caliper_markers(&got) == KERNEL,
            "{name}: strip is not the inverse"
        );
        let labels = check_marker_nesting(&got).map_err(|e| format!("{name}: {e}"))?;
        ensure!(labels.len() == spans.len(), "{name}: {} labels", labels.len());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut nested_instances = 0;
    for i in 0..100 {
        let code = random_code(&mut rng);
        let spans = random_spans(&mut rng, code.lines().count().max(1));
        let out = instrument_with_caliper(&code, &spans).map_err(|e| format!("instance {i}: {e}"))?;
        ensure!(
            strip_caliper_markers(&out) == code,
            "instance {i}: strip is not the inverse"
        );
        let labels: BTreeSet<String> = check_marker_nesting(&out)
            .map_err(|e| format!("instance {i}: {e}"))?
            .into_iter()
            .collect();
        let want: BTreeSet<String> = spans.iter().map(RegionSpan::label).collect();
        ensure!(labels == want, "instance {i}: labels {labels:?}");
        nested_instances += spans.iter().any(|a| spans.iter().any(|b| a.strictly_contains(b))) as usize;
    }
    // crossed markers must be refused
    let crossed = "CALI_MARK_BEGIN(\"region_1_3\");\nCALI_MARK_BEGIN(\"region_2_4\");\nCALI_MARK_END(\"region_1_3\");\nCALI_MARK_END(\"region_2_4\");\n";
    ensure!(check_marker_nesting(crossed).is_err(), "crossed markers accepted");
    ensure!(
        instrument_with_caliper(KERNEL, &[RegionSpan::new(2, 5), RegionSpan::new(4, 7)]).is_err(),
        "overlapping spans accepted"
    );
    Ok(format!(
        "{} goldens, 100 strip-inverse instances ({nested_instances} with nesting)",
        goldens.len()
    ))
}

// ---------------------------------------------------------------- round trips

fn random_report(rng: &mut ChaCha8Rng) -> RaceReport {
    let files = ["generated.cc", "kernel.h", "src/util.cpp"];
    let findings = (0..rng.gen_range(0..6))
        .map(|_| {
            let t = if rng.gen_bool(0.5) {
                RaceType::ReadWrite
            } else {
                RaceType::WriteWrite
            };
            let locs = (0..rng.gen_range(1..4))
                .map(|_| CodeLocation::new(files[rng.gen_range(0..files.len())], rng.gen_range(1..2000)))
                .collect();
            RaceFinding::new(t, locs)
        })
        .collect();
    canonicalize_race_report(findings)
}

fn random_profile(rng: &mut ChaCha8Rng) -> CaliperProfile {
    let all = [1u32, 2, 4, 8, 16, 32, 64, 128];
    let tcs: Vec<u32> = all.iter().copied().filter(|_| rng.gen_bool(0.5)).collect();
    let tcs = if tcs.is_empty() { vec![4] } else { tcs };
    let mut p = CaliperProfile::new(tcs.clone());
    for _ in 0..rng.gen_range(1..5) {
        let s = rng.gen_range(1..400);
        let label = RegionSpan::new(s, s + rng.gen_range(0..40)).label();
        for &tc in &tcs {
            let cell = match rng.gen_range(0..6) {
                0 => WorkCell::Failed,
                1 | 2 => WorkCell::Measured(rng.gen_range(0.0..=100.0)),
                _ => WorkCell::Measured(rng.gen_range(0..=100) as f64),
            };
            p.insert(label.clone(), tc, cell);
        }
    }
    p
}

fn round_trips() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for i in 0..1000 {
        let r = random_report(&mut rng);
        let back = parse_race_answer(&render_race_answer(&r)).map_err(|e| format!("report {i}: {e}"))?;
        ensure!(back == r, "report {i} changed in the round trip");
    }
    for i in 0..500 {
        let p = random_profile(&mut rng);
        let back = parse_caliper_answer(&render_caliper_answer(&p, &BTreeMap::new()))
            .map_err(|e| format!("profile {i}: {e}"))?;
        ensure!(back == p, "profile {i} changed in the round trip");
    }
    Ok("1000 race reports, 500 Caliper profiles".into())
}

// ---------------------------------------------------------------- mock end to end

const E2E_CONFIG: &str = r#"
workers = 2

[toolchain]
cxx = "no-such-compiler"

[explore]
domains = ["linear_algebra"]
seeds_per_domain = 1
variants_per_seed = 2
candidates_per_prompt = 2
modes = ["racy"]

[dataset]
val_fraction = 0.0
"#;

const E2E_STAGES: &[&[&str]] = &[
    &["explore"],
    &["harness"],
    &["candidates"],
    &["toolrun", "--tool", "tsan"],
    &["toolrun", "--tool", "caliper"],
    &["cot", "--tool", "tsan"],
    &["cot", "--tool", "caliper"],
    &["dataset", "build"],
    &["dataset", "export"],
];

/// Runs every stage through the CLI; returns the summed backend calls.
fn run_stages(cfg: &Path, run_dir: &Path) -> Result<u64, String> {
    let mock = manifest_dir().join("tests/fixtures/mock");
    let mut calls = 0;
    for stage in E2E_STAGES {
        let out = Command::new(env!("CARGO_BIN_EXE_ompsynth"))
            .arg("--config")
            .arg(cfg)
            .arg("--run-dir")
            .arg(run_dir)
            .arg("--dry-run")
            .arg("--mock-endpoint")
            .arg(&mock)
            .args(*stage)
            .output()
            .map_err(|e| e.to_string())?;
        ensure!(
            out.status.success(),
            "`{}` exited with {:?}: {}",
            stage.join(" "),
            out.status.code(),
            String::from_utf8_lossy(&out.stderr)
        );
        let inv: serde_json::Value = serde_json::from_str(
            &std::fs::read_to_string(run_dir.join("stats/last_invocation.json")).map_err(|e| e.to_string())?,
        )
        .map_err(|e| e.to_string())?;
        calls += inv["gateway"]["backend_calls"].as_u64().ok_or("no backend_calls")?;
    }
    Ok(calls)
}

fn read_lines<T: serde::de::DeserializeOwned>(path: &Path) -> Result<Vec<T>, String> {
    let text = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(|e| format!("{}: {e}", path.display())))
        .collect()
}

fn mock_end_to_end() -> Check {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let cfg = tmp.path().join("config.toml");
    std::fs::write(&cfg, E2E_CONFIG).map_err(|e| e.to_string())?;
    let run = tmp.path().join("run");

    let start = Instant::now();
    let first = run_stages(&cfg, &run)?;
    let secs = start.elapsed().as_secs_f64();
    ensure!(secs < E2E_SECONDS, "first pass took {secs:.1}s");
    ensure!(first > 0, "first pass made no endpoint calls");

    let mut records: Vec<SftRecord> = Vec::new();
    for tool in ["tsan", "caliper"] {
        for split in ["train", "val"] {
            let path = run.join("dataset").join(tool).join(format!("{split}.jsonl"));
            if path.exists() {
                records.extend(read_lines::<SftRecord>(&path)?);
            }
        }
        for t in read_lines::<TrainTuple>(&run.join("dataset").join(tool).join("tuples.jsonl"))? {
            t.check().map_err(|e| format!("tuple {}: {e}", t.tuple_id))?;
        }
    }
    ensure!(records.len() >= 2, "{} SFT records", records.len());
    for r in &records {
        ensure!(r.mask_ok(), "record {} has a bad mask", r.tuple_id);
        let (think, answer) = split_think_answer(r.assistant_text());
        ensure!(
            think.is_some() && answer.is_some(),
            "record {} lacks think/answer",
            r.tuple_id
        );
    }
    let cots: Vec<CoTRecord> = read_lines(&run.join("cots.jsonl"))?;
    check_cot_hashes(cots.iter().filter(|c| c.hindsight))?;

    let second = run_stages(&cfg, &run)?;
    ensure!(second == 0, "second pass made {second} endpoint calls");
    Ok(format!(
        "{} SFT records, {first} endpoint calls then 0, first pass {secs:.2}s",
        records.len()
    ))
}

/// Accepted traces: the answer parses to the outcome they were conditioned on.
fn check_cot_hashes<'a>(cots: impl Iterator<Item = &'a CoTRecord>) -> Result<usize, String> {
    let mut n = 0;
    for c in cots.filter(|c| c.validation_status.is_accepted()) {
        let h = match c.tool {
            ompsynth::model::Tool::Tsan => parse_race_answer(&c.answer_text).ok().map(|r| r.content_hash()),
            ompsynth::model::Tool::Caliper => ompsynth::model::parse_caliper_pair_answer(&c.answer_text)
                .ok()
                .map(|(a, b)| ompsynth::model::pair_outcome_hash(&a, &b)),
        };
        ensure!(
            h.as_deref() == Some(c.conditioned_outcome_hash.as_str()),
            "cot {} hash mismatch",
            c.id
        );
        n += 1;
    }
    Ok(n)
}

// ---------------------------------------------------------------- cot validation

fn long_think() -> String {
    "The loop is split across the team and every thread updates the shared accumulator \
     without synchronization, so two threads can read and write it concurrently. "
        .repeat(12)
}

/// Attempt 0 malformed, 1 wrong answer, 2 leaks, 3 clean.
fn scripted_teacher() -> Gateway {
    let mut gw = Gateway::new(None);
    gw.register(
        ModelEndpoint::new("teacher", "mock://", 1_000_000),
        Arc::new(ScriptedBackend::new(|m: &[Message], i| {
            let answer = answer_section(&m[0].content).unwrap_or_default();
            Ok(match i {
                0 => format!("<think>{}</think>", long_think()),
                1 => {
                    let wrong = if answer.contains("generated.cc:6") {
                        answer.replace("generated.cc:6", "generated.cc:7")
                    } else {
                        answer.replacen("work percentage of 40", "work percentage of 41", 1)
                    };
                    format!("<think>{}</think>\n<answer>\n{wrong}\n</answer>", long_think())
                }
                2 => format!(
                    "<think>As given, {}</think>\n<answer>\n{answer}\n</answer>",
                    long_think()
                ),
                _ => format!("<think>{}</think>\n<answer>\n{answer}\n</answer>", long_think()),
            })
        })),
    )
    .unwrap();
    gw
}

fn cot_validation() -> Check {
    let gw = scripted_teacher();
    let templates = Templates::builtin();
    let synth = CotSynth {
        gateway: &gw,
        templates: &templates,
        teacher: "teacher",
        params: SamplingParams::teacher(),
        settings: CotSettings::default(),
    };
    let code = "double generated(const double* a, int n) {\n    double s = 0;\n    #pragma omp parallel for\n    for (int i = 0; i < n; i++)\n        s += a[i];\n    return s;\n}\n";
    let cand = CandidateCode::new("p", code, "m", StrategyMode::Racy, 1).map_err(|e| e.to_string())?;
    let report = canonicalize_race_report(vec![
        RaceFinding::new(RaceType::ReadWrite, vec![CodeLocation::new("generated.cc", 6)]),
        RaceFinding::new(RaceType::WriteWrite, vec![CodeLocation::new("generated.cc", 6)]),
    ]);
    let mut records = synth.synth_race_cot(&cand, &report, true).map_err(|e| e.to_string())?;

    let code_b = code.replace("parallel for", "parallel for reduction(+:s)");
    let cand_b =
        CandidateCode::new("p", code_b.as_str(), "m", StrategyMode::Inefficient, 2).map_err(|e| e.to_string())?;
    let spans = [RegionSpan::new(3, 5)];
    let label = spans[0].label();
    let mut pa = CaliperProfile::new([4, 16]);
    pa.insert(label.clone(), 4, WorkCell::Measured(40.0));
    pa.insert(label.clone(), 16, WorkCell::Measured(55.0));
    let mut pb = CaliperProfile::new([4, 16]);
    pb.insert(label.clone(), 4, WorkCell::Measured(12.0));
    pb.insert(label.clone(), 16, WorkCell::Failed);
    let ma = render_caliper_answer(&pa, &region_snippets(code, &spans));
    let mb = render_caliper_answer(&pb, &region_snippets(&code_b, &spans));
    let pair = synth
        .synth_caliper_pair_cot(&cand, &cand_b, &pa, &pb, &ma, &mb, true)
        .map_err(|e| e.to_string())?;
    records.extend(pair);

    let want = [
        ValidationStatus::RejectedFormat,
        ValidationStatus::RejectedAnswerMismatch,
        ValidationStatus::RejectedLeakage,
        ValidationStatus::Accepted,
    ];
    for (tool, chunk) in ["tsan", "caliper"].iter().zip(records.chunks(4)) {
        let got: Vec<ValidationStatus> = chunk.iter().map(|r| r.validation_status).collect();
        ensure!(got == want, "{tool}: statuses {got:?}");
    }
    ensure!(records.len() == 8, "{} records", records.len());
    let accepted = check_cot_hashes(records.iter())?;
    ensure!(
        Conditioning::Race(report.clone()).answer_hash(&records[3].answer_text) == Some(report.content_hash()),
        "race trace not tied to its report"
    );
    ensure!(
        records[7].conditioned_outcome_hash == ompsynth::model::pair_outcome_hash(&pa, &pb),
        "pair trace not tied to its profiles"
    );
    Ok(format!(
        "4 statuses on both tools, {accepted}/{accepted} accepted hashes match"
    ))
}

// ---------------------------------------------------------------- evaluation arithmetic

fn racy_answer() -> String {
    render_race_answer(&canonicalize_race_report(vec![RaceFinding::new(
        RaceType::WriteWrite,
        vec![CodeLocation::new("generated.cc", 3)],
    )]))
}

fn free_answer() -> String {
    render_race_answer(&RaceReport::race_free())
}

fn gateway_with(name: &str, script: impl Fn(&str, u32) -> String + Send + Sync + 'static) -> Gateway {
    let mut gw = Gateway::new(None);
    gw.register(
        ModelEndpoint::new(name, "mock://", 1_000_000),
        Arc::new(ScriptedBackend::new(move |m: &[Message], i| {
            Ok(script(&m[0].content, i))
        })),
    )
    .unwrap();
    gw
}

fn race_items(n: usize) -> Vec<RaceEvalItem> {
    (0..n)
        .map(|i| {
            let label = i % 2 == 0;
            RaceEvalItem {
                program_id: format!("prog{i}"),
                source: format!(
                    "// item {i} {}\nint generated() {{ return {i}; }}\n",
                    if label { "RACY" } else { "CLEAN" }
                ),
                label,
                label_source: LabelSource::Metadata,
            }
        })
        .collect()
}

fn evaluator<'a>(gw: &'a Gateway, templates: &'a Templates) -> Evaluator<'a> {
    Evaluator {
        gateway: gw,
        templates,
        params: SamplingParams::evaluation(),
        estimator: TokenEstimator::default(),
    }
}

fn one_region(value: f64, tcs: &[u32]) -> String {
    let mut p = CaliperProfile::new(tcs.iter().copied());
    for &tc in tcs {
        p.insert("region_1_1", tc, WorkCell::Measured(value));
    }
    render_caliper_answer(&p, &BTreeMap::new())
}

fn eval_arithmetic() -> Check {
    let templates = Templates::builtin();
    let items = race_items(8);

    // oracle endpoint: every sample right
    let oracle = gateway_with("oracle", |prompt, _| {
        let a = if prompt.contains("RACY") {
            racy_answer()
        } else {
            free_answer()
        };
        format!("<think>t</think><answer>{a}</answer>")
    });
    let perfect = evaluator(&oracle, &templates)
        .eval_race_presence("oracle", &items, 16)
        .map_err(|e| e.to_string())?;
    ensure!(
        perfect.mean_accuracy() == Some(100.0),
        "oracle mean {:?}",
        perfect.mean_accuracy()
    );
    ensure!(
        perfect.majority_accuracy() == Some(100.0),
        "oracle majority {:?}",
        perfect.majority_accuracy()
    );

    // 12 of 16 samples right on one racy item
    let three_quarters = gateway_with("partial", |_, i| {
        let a = if i < 12 { racy_answer() } else { free_answer() };
        format!("<think>t</think><answer>{a}</answer>")
    });
    let partial = evaluator(&three_quarters, &templates)
        .eval_race_presence("partial", &items[..1], 16)
        .map_err(|e| e.to_string())?;
    ensure!(
        partial.correct_samples == 12 && partial.total_samples == 16,
        "{}/{}",
        partial.correct_samples,
        partial.total_samples
    );
    ensure!(
        partial.mean_accuracy() == Some(75.0),
        "partial mean {:?}",
        partial.mean_accuracy()
    );
    let table = race_table(&[perfect.clone(), partial.clone()]);
    ensure!(table.rows[1][1] == "75.0 (12/16)", "table cell `{}`", table.rows[1][1]);
    ensure!(
        table.rows[0][1] == "100.0 (128/128)",
        "table cell `{}`",
        table.rows[0][1]
    );

    // random ranking: expected accuracy one half
    let tcs = [4u32, 16, 64];
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let rank_items: Vec<RankEvalItem> = (0..40)
        .map(|i| {
            let mut truth = BTreeMap::new();
            let mut gap = BTreeMap::new();
            for &tc in &tcs {
                truth.insert(
                    tc,
                    if rng.gen_bool(0.5) {
                        Rank::AHigher
                    } else {
                        Rank::BHigher
                    },
                );
                gap.insert(tc, rng.gen_range(1.0..60.0));
            }
            RankEvalItem {
                problem_id: format!("p{i}"),
                id_a: format!("a{i}"),
                id_b: format!("b{i}"),
                code_a: format!("int generated() {{ return {i}; }} // A"),
                code_b: format!("int generated() {{ return -{i}; }} // B"),
                truth,
                gap,
            }
        })
        .collect();
    let coin = gateway_with("coin", move |prompt, i| {
        let seed = u64::from_str_radix(&content_hash(format!("{prompt}#{i}"))[..16], 16).unwrap();
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let (wa, wb) = if r.gen_bool(0.5) { (70.0, 30.0) } else { (30.0, 70.0) };
        let body = render_caliper_pair_answer(&one_region(wa, &tcs), &one_region(wb, &tcs));
        format!("<think>t</think><answer>{body}</answer>")
    });
    let random = evaluator(&coin, &templates)
        .eval_pair_ranking("coin", &rank_items, &tcs, 4)
        .map_err(|e| e.to_string())?;
    let overall = random.overall();
    ensure!(overall.total >= MIN_RANDOM_CELLS, "{} cells", overall.total);
    let acc = overall.accuracy().unwrap_or(0.0);
    ensure!(
        (acc - RANDOM_BASELINE).abs() <= RANDOM_TOLERANCE,
        "random accuracy {acc:.2}% over {} cells",
        overall.total
    );

    // gap buckets partition the evaluated cells
    let edges = [0.0, 10.0, 20.0, 30.0, 40.0];
    let buckets = bucket_by_gap(&random.cells, &edges);
    let (bt, bc): (usize, usize) = buckets.iter().fold((0, 0), |(t, c), b| (t + b.total, c + b.correct));
    ensure!(
        bt == overall.total && bc == overall.correct,
        "buckets hold {bc}/{bt}, overall {}/{}",
        overall.correct,
        overall.total
    );
    let csv = buckets_csv(&buckets).map_err(|e| e.to_string())?;
    ensure!(
        csv.lines().next() == Some("gap_lo,gap_hi,correct,total,accuracy"),
        "csv header"
    );
    ensure!(csv.lines().count() == edges.len() + 1, "csv rows");

    // remaining table shapes
    let rt = ranking_table(std::slice::from_ref(&random));
    ensure!(
        rt.headers == ["model", "4_threads", "16_threads", "64_threads", "average", "ties"],
        "ranking headers {:?}",
        rt.headers
    );
    let avg: f64 = rt.rows[0][4].parse().map_err(|_| "average cell")?;
    let want_avg = random.average_accuracy().unwrap();
    ensure!((avg - want_avg).abs() < 0.05 + FLOAT_EPS, "average {avg} vs {want_avg}");
    let ct = compute_table(
        &[ComputeRow {
            model: "coin".into(),
            params: 8e9,
            mean_prompt_tokens: 1000.0,
            lengths: length_stats(&random.response_tokens),
        }],
        &FlopsFormula::default(),
    );
    ensure!(ct.headers.len() == 5 && ct.rows.len() == 1, "compute table shape");
    let fix = |source, free: &[Option<bool>]| FixReport {
        actor: "actor".into(),
        source,
        results: free
            .iter()
            .enumerate()
            .map(|(i, f)| FixResult {
                item_id: format!("i{i}"),
                actor: "actor".into(),
                source,
                passes: Vec::new(),
                final_code: String::new(),
                race_free: *f,
                error: None,
            })
            .collect(),
    };
    let grid = fix_grid(&[
        fix(FeedbackSource::SelfReview, &[Some(true), Some(false), None]),
        fix(FeedbackSource::Oracle, &[Some(true), Some(true)]),
        fix(
            FeedbackSource::WorldModel,
            &[Some(true), Some(false), Some(true), Some(true)],
        ),
    ]);
    ensure!(
        grid.headers == ["actor", "self", "oracle", "world_model"],
        "fix headers {:?}",
        grid.headers
    );
    ensure!(
        grid.rows[0][1] == "50.0 (1/2)" && grid.rows[0][3] == "75.0 (3/4)",
        "fix row {:?}",
        grid.rows[0]
    );

    Ok(format!(
        "100.0% oracle, 75.0% (12/16), random {acc:.2}% over {} cells, {} buckets conserve",
        overall.total,
        buckets.len()
    ))
}

// ---------------------------------------------------------------- dataset

#[derive(Clone, Debug)]
struct Item {
    id: String,
    group: String,
    label: String,
}

impl Grouped for Item {
    fn group(&self) -> &str {
        &self.group
    }
    fn item_id(&self) -> &str {
        &self.id
    }
    fn label(&self) -> String {
        self.label.clone()
    }
}

fn dataset_checks() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let items: Vec<Item> = (0..2000)
        .map(|i| Item {
            id: format!("t{i}"),
            group: format!("problem{}", rng.gen_range(0..300)),
            label: ["racy", "race_free", "a_higher", "b_higher"][rng.gen_range(0..4)].into(),
        })
        .collect();
    let ids = |v: &[Item]| v.iter().map(|i| i.id.clone()).collect::<Vec<_>>();

    let (t1, v1) = split(&items, 0.05, "seed-a").map_err(|e| e.to_string())?;
    let (t2, v2) = split(&items, 0.05, "seed-a").map_err(|e| e.to_string())?;
    ensure!(ids(&t1) == ids(&t2) && ids(&v1) == ids(&v2), "split not deterministic");
    ensure!(t1.len() + v1.len() == items.len(), "split lost items");
    let (_, v3) = split(&items, 0.05, "seed-b").map_err(|e| e.to_string())?;
    ensure!(ids(&v3) != ids(&v1), "split ignores its seed");
    let train_groups: BTreeSet<&str> = t1.iter().map(|i| i.group.as_str()).collect();
    ensure!(
        v1.iter().all(|i| !train_groups.contains(i.group.as_str())),
        "a problem straddles the split"
    );
    let frac = v1.len() as f64 / items.len() as f64;
    ensure!(frac > 0.0 && frac < 0.15, "validation fraction {frac:.3}");

    let targets = [300, 650, 1350];
    let subsets = subsample(&t1, &targets, "seed-a").map_err(|e| e.to_string())?;
    for (s, &t) in subsets.iter().zip(&targets) {
        ensure!(s.len() == t, "subset of {} for target {t}", s.len());
    }
    for w in subsets.windows(2) {
        ensure!(ids(&w[1][..w[0].len()]) == ids(&w[0]), "subsets are not nested");
    }
    ensure!(
        ids(&subsample(&t1, &targets, "seed-a").map_err(|e| e.to_string())?[2]) == ids(&subsets[2]),
        "subsample not deterministic"
    );

    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let path = tmp.path().join("training.toml");
    let cfg = TrainingConfig::default();
    emit_training_config(&cfg, &path).map_err(|e| e.to_string())?;
    let back = load_training_config(&path).map_err(|e| e.to_string())?;
    ensure!(back == cfg, "training config changed in the round trip");
    ensure!(
        back.learning_rate == 1e-5
            && back.effective_batch_size == 32
            && back.sequence_length == 16384
            && (back.validation_split - 0.05).abs() < FLOAT_EPS,
        "training config values {back:?}"
    );
    Ok(format!(
        "split {}/{} with no shared problem, nested subsets {targets:?}, training config round-trips",
        t1.len(),
        v1.len()
    ))
}

fn main() -> ExitCode {
    let criteria: &[Criterion] = &[
        ("tsan-golden", tsan_golden_suite),
        ("instrumentation", instrumentation),
        ("round-trip", round_trips),
        ("mock-e2e", mock_end_to_end),
        ("cot-validation", cot_validation),
        ("eval-arithmetic", eval_arithmetic),
        ("dataset", dataset_checks),
    ];
    let mut failed = 0;
    for (name, f) in criteria {
        match f() {
            Ok(detail) => println!("PASS  {name:<16} {detail}"),
            Err(why) => {
                failed += 1;
                println!("FAIL  {name:<16} {why}");
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", criteria.len() - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
