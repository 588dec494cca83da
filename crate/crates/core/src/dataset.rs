//! Train tuples, chat-format SFT export, splits, nested subsets and the
//! trainer config.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::gateway::{Message, Role};
use crate::model::{
    content_hash, content_hash_parts, CandidateCode, CoTRecord, Tool, TrainTuple, TupleInputs, TupleOutcome,
};
use crate::prompts::Templates;
use crate::store::AuditEntry;
use crate::tokens::TokenEstimator;
use crate::toolchain::{CaliperOutcomeRecord, RunStatus, TsanOutcomeRecord};
use crate::{Error, Result};

/// Everything `assemble` joins over.
#[derive(Debug, Clone, Default)]
pub struct StoreView {
    pub candidates: Vec<CandidateCode>,
    pub tsan: Vec<TsanOutcomeRecord>,
    pub caliper: Vec<CaliperOutcomeRecord>,
    pub cots: Vec<CoTRecord>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LabelBalance {
    pub labels: BTreeMap<String, usize>,
    /// Caliper only: tuples whose two profiles both measured each thread count.
    pub thread_count_coverage: BTreeMap<u32, usize>,
}

#[derive(Debug, Clone, Default)]
pub struct Assembled {
    pub tuples: Vec<TrainTuple>,
    pub audit: Vec<AuditEntry>,
    pub balance: LabelBalance,
}

/// Joins accepted traces of `tool` with their candidates and outcomes.
/// `hindsight` keeps only traces of that kind when set.
pub fn assemble(view: &StoreView, tool: Tool, hindsight: Option<bool>) -> Assembled {
    let cands: BTreeMap<&str, &CandidateCode> = view.candidates.iter().map(|c| (c.id.as_str(), c)).collect();
    let tsan: BTreeMap<&str, &TsanOutcomeRecord> = view.tsan.iter().map(|o| (o.candidate_id.as_str(), o)).collect();
    let cal: BTreeMap<&str, &CaliperOutcomeRecord> =
        view.caliper.iter().map(|o| (o.candidate_id.as_str(), o)).collect();
    let mut out = Assembled::default();
    let drop = |out: &mut Assembled, cot: &CoTRecord, cause: &str, detail: String| {
        out.audit.push(AuditEntry::new("dataset", &cot.id, cause, detail));
    };
    let mut seen = BTreeSet::new();
    for cot in view.cots.iter().filter(|c| c.tool == tool) {
        if hindsight.is_some_and(|h| h != cot.hindsight) {
            continue;
        }
        if !cot.validation_status.is_accepted() {
            drop(&mut out, cot, "cot_rejected", format!("{:?}", cot.validation_status));
            continue;
        }
        if cot.degenerate {
            drop(&mut out, cot, "degenerate_pair", String::new());
            continue;
        }
        let lookup: Vec<&CandidateCode> = cot
            .candidate_ids
            .iter()
            .filter_map(|id| cands.get(id.as_str()).copied())
            .collect();
        if lookup.len() != cot.candidate_ids.len() {
            drop(&mut out, cot, "orphan_cot", "candidate missing from store".into());
            continue;
        }
        let built = match (tool, lookup.as_slice()) {
            (Tool::Tsan, [c]) => match tsan.get(c.id.as_str()) {
                Some(o) if o.status == RunStatus::Ok => Ok((
                    TupleInputs::Single {
                        candidate: (*c).clone(),
                    },
                    TupleOutcome::Race {
                        report: o.report.clone(),
                    },
                )),
                Some(o) => Err(format!("tsan status {:?}", o.status)),
                None => Err("no tsan outcome".into()),
            },
            (Tool::Caliper, [a, b]) => match (cal.get(a.id.as_str()), cal.get(b.id.as_str())) {
                (Some(oa), Some(ob)) if oa.usable() && ob.usable() => Ok((
                    TupleInputs::Pair {
                        a: (*a).clone(),
                        b: (*b).clone(),
                    },
                    TupleOutcome::Pair {
                        a: oa.profile.clone().unwrap(),
                        b: ob.profile.clone().unwrap(),
                    },
                )),
                _ => Err("pair lacks usable profiles".into()),
            },
            _ => Err("candidate count does not fit the tool".into()),
        };
        let (inputs, outcome) = match built {
            Ok(x) => x,
            Err(detail) => {
                drop(&mut out, cot, "no_outcome", detail);
                continue;
            }
        };
        let tuple = TrainTuple {
            tuple_id: content_hash_parts([tool.as_str(), &cot.id]),
            problem_id: lookup[0].problem_id.clone(),
            tool,
            inputs,
            cot: cot.clone(),
            outcome,
        };
        if let Err(e) = tuple.check() {
            drop(&mut out, cot, "invalid_tuple", e);
            continue;
        }
        if !seen.insert(tuple.tuple_id.clone()) {
            continue;
        }
        *out.balance.labels.entry(tuple.label()).or_default() += 1;
        if let TupleOutcome::Pair { a, b } = &tuple.outcome {
            for &tc in &a.thread_counts {
                let measured = |p: &crate::model::CaliperProfile| {
                    p.regions()
                        .iter()
                        .all(|r| p.get(r, tc).and_then(|c| c.value()).is_some())
                };
                if measured(a) && measured(b) {
                    *out.balance.thread_count_coverage.entry(tc).or_default() += 1;
                }
            }
        }
        out.tuples.push(tuple);
    }
    out
}

// ---------------------------------------------------------------- export

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub problem_id: String,
    pub candidate_ids: Vec<String>,
    pub generator_models: Vec<String>,
    pub cot_id: String,
    pub teacher_model: String,
    pub outcome_hash: String,
    pub hindsight: bool,
    pub label: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SftRecord {
    pub messages: Vec<Message>,
    /// One flag per message; true marks the loss-bearing span.
    pub mask: Vec<bool>,
    pub tool: Tool,
    pub tuple_id: String,
    pub provenance: Provenance,
}

impl SftRecord {
    /// The mask covers exactly the final assistant message.
    pub fn mask_ok(&self) -> bool {
        let n = self.messages.len();
        n >= 2
            && self.mask.len() == n
            && self.messages[n - 1].role == Role::Assistant
            && self.mask[n - 1]
            && self.mask[..n - 1].iter().all(|m| !m)
            && self.messages[..n - 1].iter().all(|m| m.role != Role::Assistant)
    }

    pub fn assistant_text(&self) -> &str {
        &self.messages.last().expect("non-empty").content
    }
}

pub const FORMATS: &[&str] = &["chat_jsonl"];

/// Response in the world-model output shape.
pub fn assistant_response(think: &str, answer: &str) -> String {
    format!(
        "<think>\n{}\n</think>\n<answer>\n{}\n</answer>",
        think.trim(),
        answer.trim()
    )
}

/// Inference-time prompt for a tuple.
pub fn world_model_prompt(templates: &Templates, tuple: &TrainTuple) -> String {
    match (&tuple.inputs, &tuple.outcome) {
        (TupleInputs::Single { candidate }, _) => templates.world_model_race(&candidate.source),
        (TupleInputs::Pair { a, b }, TupleOutcome::Pair { a: pa, .. }) => {
            templates.world_model_caliper(&a.source, &b.source, &pa.thread_counts)
        }
        (TupleInputs::Pair { a, b }, _) => templates.world_model_caliper(&a.source, &b.source, &[]),
    }
}

#[derive(Debug, Clone, Default)]
pub struct Exported {
    pub records: Vec<SftRecord>,
    pub audit: Vec<AuditEntry>,
}

/// Chat records for homogeneous tuples; records over `max_tokens`
/// (estimated) are dropped with audit.
pub fn export_sft(
    tuples: &[TrainTuple],
    format: &str,
    templates: &Templates,
    estimator: &TokenEstimator,
    max_tokens: usize,
) -> Result<Exported> {
    if !FORMATS.contains(&format) {
        return Err(Error::Format(format!("unknown export format `{format}`")));
    }
    if let Some(first) = tuples.first() {
        if tuples.iter().any(|t| t.tool != first.tool) {
            return Err(Error::Format("tuples mix tools".into()));
        }
    }
    let mut out = Exported::default();
    for t in tuples {
        let user = world_model_prompt(templates, t);
        let assistant = assistant_response(&t.cot.think_text, &t.cot.answer_text);
        let tokens = estimator.estimate(&user) + estimator.estimate(&assistant);
        if tokens > max_tokens {
            out.audit.push(AuditEntry::new(
                "export",
                &t.tuple_id,
                "over_length",
                format!("~{tokens} tokens > {max_tokens}"),
            ));
            continue;
        }
        let (ids, models) = match &t.inputs {
            TupleInputs::Single { candidate } => (vec![candidate.id.clone()], vec![candidate.generator_model.clone()]),
            TupleInputs::Pair { a, b } => (
                vec![a.id.clone(), b.id.clone()],
                vec![a.generator_model.clone(), b.generator_model.clone()],
            ),
        };
        out.records.push(SftRecord {
            messages: vec![Message::user(user), Message::assistant(assistant)],
            mask: vec![false, true],
            tool: t.tool,
            tuple_id: t.tuple_id.clone(),
            provenance: Provenance {
                problem_id: t.problem_id.clone(),
                candidate_ids: ids,
                generator_models: models,
                cot_id: t.cot.id.clone(),
                teacher_model: t.cot.teacher_model.clone(),
                outcome_hash: t.outcome.hash(),
                hindsight: t.cot.hindsight,
                label: t.label(),
            },
        });
    }
    Ok(out)
}

// ---------------------------------------------------------------- split and subsample

/// Items that split by problem and sort by a stable id.
pub trait Grouped {
    fn group(&self) -> &str;
    fn item_id(&self) -> &str;
    fn label(&self) -> String;
}

impl Grouped for SftRecord {
    fn group(&self) -> &str {
        &self.provenance.problem_id
    }
    fn item_id(&self) -> &str {
        &self.tuple_id
    }
    fn label(&self) -> String {
        self.provenance.label.clone()
    }
}

impl Grouped for TrainTuple {
    fn group(&self) -> &str {
        &self.problem_id
    }
    fn item_id(&self) -> &str {
        &self.tuple_id
    }
    fn label(&self) -> String {
        TrainTuple::label(self)
    }
}

/// Position in [0, 1) of a key under `seed`.
fn unit_hash(seed: &str, key: &str) -> f64 {
    let h = content_hash_parts([seed, key]);
    u64::from_str_radix(&h[..16], 16).expect("hex") as f64 / (u64::MAX as f64 + 1.0)
}

/// Problem-grouped split: a problem goes to validation when its hash falls
/// under `val_fraction`. Input order is kept within each side.
pub fn split<T: Grouped + Clone>(items: &[T], val_fraction: f64, seed: &str) -> Result<(Vec<T>, Vec<T>)> {
    if !(0.0..1.0).contains(&val_fraction) {
        return Err(Error::Config("val_fraction must be in [0, 1)".into()));
    }
    let (mut train, mut val) = (Vec::new(), Vec::new());
    for it in items {
        if unit_hash(seed, it.group()) < val_fraction {
            val.push(it.clone());
        } else {
            train.push(it.clone());
        }
    }
    Ok((train, val))
}

/// Nested subsets: one stratified order (each label's items in hash order,
/// labels interleaved by largest deficit) whose prefixes are the targets.
pub fn subsample<T: Grouped + Clone>(items: &[T], targets: &[usize], seed: &str) -> Result<Vec<Vec<T>>> {
    if targets.windows(2).any(|w| w[0] > w[1]) {
        return Err(Error::Config("subsample targets must ascend".into()));
    }
    if let Some(&t) = targets.iter().find(|&&t| t > items.len()) {
        return Err(Error::TargetExceedsAvailable {
            target: t,
            available: items.len(),
        });
    }
    let mut by_label: BTreeMap<String, Vec<&T>> = BTreeMap::new();
    for it in items {
        by_label.entry(it.label()).or_default().push(it);
    }
    for v in by_label.values_mut() {
        v.sort_by(|a, b| {
            unit_hash(seed, a.item_id())
                .partial_cmp(&unit_hash(seed, b.item_id()))
                .unwrap()
                .then_with(|| a.item_id().cmp(b.item_id()))
        });
    }
    let total = items.len() as f64;
    let share: BTreeMap<&str, f64> = by_label
        .iter()
        .map(|(k, v)| (k.as_str(), v.len() as f64 / total))
        .collect();
    let mut taken: BTreeMap<&str, usize> = by_label.keys().map(|k| (k.as_str(), 0)).collect();
    let mut order: Vec<T> = Vec::with_capacity(items.len());
    for step in 1..=items.len() {
        let pick = by_label
            .iter()
            .filter(|(k, v)| taken[k.as_str()] < v.len())
            .max_by(|(ka, _), (kb, _)| {
                let da = share[ka.as_str()] * step as f64 - taken[ka.as_str()] as f64;
                let db = share[kb.as_str()] * step as f64 - taken[kb.as_str()] as f64;
                da.partial_cmp(&db).unwrap().then_with(|| kb.cmp(ka))
            })
            .map(|(k, _)| k.as_str())
            .expect("items remain");
        let i = taken[pick];
        order.push(by_label[pick][i].clone());
        *taken.get_mut(pick).unwrap() += 1;
    }
    Ok(targets.iter().map(|&t| order[..t].to_vec()).collect())
}

pub fn label_shares<T: Grouped>(items: &[T]) -> BTreeMap<String, f64> {
    let mut counts: BTreeMap<String, usize> = BTreeMap::new();
    for it in items {
        *counts.entry(it.label()).or_default() += 1;
    }
    let n = items.len().max(1) as f64;
    counts.into_iter().map(|(k, c)| (k, c as f64 / n)).collect()
}

/// Fingerprint of a record list, for determinism checks.
pub fn fingerprint<T: Serialize>(items: &[T]) -> String {
    let mut bytes = Vec::new();
    for it in items {
        bytes.extend(serde_json::to_vec(it).expect("serializes"));
        bytes.push(b'\n');
    }
    content_hash(bytes)
}

// ---------------------------------------------------------------- trainer config

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingConfig {
    pub sequence_length: usize,
    pub precision: String,
    pub fsdp_sharding: String,
    pub gradient_checkpointing: bool,
    pub epochs: u32,
    pub effective_batch_size: u32,
    pub learning_rate: f64,
    pub lr_scheduler: String,
    pub warmup_ratio: f64,
    pub weight_decay: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub validation_split: f64,
    pub completion_only_loss: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train_file: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub validation_file: Option<String>,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        TrainingConfig {
            sequence_length: 16384,
            precision: "bf16".into(),
            fsdp_sharding: "full_shard".into(),
            gradient_checkpointing: true,
            epochs: 1,
            effective_batch_size: 32,
            learning_rate: 1e-5,
            lr_scheduler: "cosine".into(),
            warmup_ratio: 0.05,
            weight_decay: 1e-4,
            adam_beta1: 0.9,
            adam_beta2: 0.95,
            validation_split: 0.05,
            completion_only_loss: true,
            train_file: None,
            validation_file: None,
        }
    }
}

pub fn emit_training_config(cfg: &TrainingConfig, path: &Path) -> Result<()> {
    let text = toml::to_string_pretty(cfg).map_err(|e| Error::Format(e.to_string()))?;
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    crate::store::write_atomic(path, text.as_bytes())
}

pub fn load_training_config(path: &Path) -> Result<TrainingConfig> {
    let text = std::fs::read_to_string(path)?;
    toml::from_str(&text).map_err(|e| Error::Config(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{RaceReport, StrategyMode, ValidationStatus};

    fn cand(problem: &str, n: u32) -> CandidateCode {
        CandidateCode::new(
            problem,
            format!("int generated() {{ return {n}; }}\n"),
            "m",
            StrategyMode::Racy,
            1,
        )
        .unwrap()
    }

    fn tsan_ok(c: &CandidateCode, report: RaceReport) -> TsanOutcomeRecord {
        TsanOutcomeRecord {
            candidate_id: c.id.clone(),
            problem_id: c.problem_id.clone(),
            status: RunStatus::Ok,
            report,
            non_candidate: vec![],
            diagnostics: vec![],
            warning_count: 0,
            raw_path: None,
            stubbed: true,
            detail: String::new(),
        }
    }

    fn cot(c: &CandidateCode, report: &RaceReport, status: ValidationStatus, think: &str) -> CoTRecord {
        CoTRecord {
            id: content_hash_parts([c.id.as_str(), think]),
            tool: Tool::Tsan,
            candidate_ids: vec![c.id.clone()],
            attempt: 0,
            think_text: think.into(),
            answer_text: crate::prompts::race_answer_text(report),
            teacher_model: "t".into(),
            conditioned_outcome_hash: report.content_hash(),
            validation_status: status,
            hindsight: true,
            degenerate: false,
            raw_response: None,
        }
    }

    fn view(n: usize, status: ValidationStatus) -> StoreView {
        let mut v = StoreView::default();
        for i in 0..n {
            let c = cand("p", i as u32);
            let r = RaceReport::race_free();
            v.cots.push(cot(&c, &r, status, "thinking"));
            v.tsan.push(tsan_ok(&c, r));
            v.candidates.push(c);
        }
        v
    }

    #[test]
    fn three_accepted_three_tuples() {
        let a = assemble(&view(3, ValidationStatus::Accepted), Tool::Tsan, None);
        assert_eq!(a.tuples.len(), 3);
        assert_eq!(a.balance.labels["race_free"], 3);
        assert!(a.audit.is_empty());
    }

    #[test]
    fn rejected_cot_is_audited() {
        let a = assemble(&view(1, ValidationStatus::RejectedLeakage), Tool::Tsan, None);
        assert!(a.tuples.is_empty());
        assert_eq!(a.audit.len(), 1);
        assert_eq!(a.audit[0].cause, "cot_rejected");
    }

    #[test]
    fn mismatched_outcome_is_dropped() {
        let mut v = view(1, ValidationStatus::Accepted);
        v.cots[0].conditioned_outcome_hash = "other".into();
        let a = assemble(&v, Tool::Tsan, None);
        assert!(a.tuples.is_empty());
        assert_eq!(a.audit[0].cause, "invalid_tuple");
    }

    #[test]
    fn export_shape_and_mask() {
        let a = assemble(&view(2, ValidationStatus::Accepted), Tool::Tsan, None);
        let t = Templates::builtin();
        let e = export_sft(&a.tuples, "chat_jsonl", &t, &TokenEstimator::default(), 16384).unwrap();
        assert_eq!(e.records.len(), 2);
        for r in &e.records {
            assert!(r.mask_ok());
            let text = r.assistant_text();
            assert!(text.starts_with("<think>\nthinking\n</think>"));
            assert!(text.ends_with("[]\n</answer>"));
            assert!(r.messages[0].content.contains("int generated()"));
        }
        assert!(matches!(
            export_sft(&a.tuples, "parquet", &t, &TokenEstimator::default(), 16384),
            Err(Error::Format(_))
        ));
    }

    #[test]
    fn long_think_dropped() {
        let mut v = view(1, ValidationStatus::Accepted);
        v.cots[0].think_text = "x".repeat(160_000);
        let a = assemble(&v, Tool::Tsan, None);
        let e = export_sft(
            &a.tuples,
            "chat_jsonl",
            &Templates::builtin(),
            &TokenEstimator::default(),
            16384,
        )
        .unwrap();
        assert!(e.records.is_empty());
        assert_eq!(e.audit[0].cause, "over_length");
    }

    #[derive(Clone, Debug, PartialEq, Serialize)]
    struct Item {
        id: String,
        problem: String,
        label: bool,
    }

    impl Grouped for Item {
        fn group(&self) -> &str {
            &self.problem
        }
        fn item_id(&self) -> &str {
            &self.id
        }
        fn label(&self) -> String {
            self.label.to_string()
        }
    }

    fn items(n: usize, per_problem: usize) -> Vec<Item> {
        (0..n)
            .map(|i| Item {
                id: format!("t{i}"),
                problem: format!("p{}", i / per_problem),
                label: i % 2 == 0,
            })
            .collect()
    }

    #[test]
    fn split_fraction_and_grouping() {
        let xs = items(1000, 1);
        let (train, val) = split(&xs, 0.05, "s").unwrap();
        assert_eq!(train.len() + val.len(), 1000);
        assert!((25..=80).contains(&val.len()), "{}", val.len());
        let (_, none) = split(&xs, 0.0, "s").unwrap();
        assert!(none.is_empty());

        let xs = items(1000, 7);
        let (train, val) = split(&xs, 0.2, "s").unwrap();
        let tp: BTreeSet<_> = train.iter().map(|x| &x.problem).collect();
        assert!(val.iter().all(|x| !tp.contains(&x.problem)));
        assert_eq!(split(&xs, 0.2, "s").unwrap().1, val);
    }

    #[test]
    fn nested_subsets() {
        let xs = items(27, 1);
        let subs = subsample(&xs, &[6, 13, 27], "s").unwrap();
        assert_eq!(subs.iter().map(Vec::len).collect::<Vec<_>>(), vec![6, 13, 27]);
        assert_eq!(&subs[1][..6], &subs[0][..]);
        assert_eq!(&subs[2][..13], &subs[1][..]);
        assert!(matches!(
            subsample(&xs, &[28], "s"),
            Err(Error::TargetExceedsAvailable {
                target: 28,
                available: 27
            })
        ));
    }

    #[test]
    fn subsets_keep_balance() {
        let xs = items(1000, 1);
        for sub in subsample(&xs, &[100, 250, 600], "s").unwrap() {
            let share = label_shares(&sub)["true"];
            assert!((share - 0.5).abs() <= 0.02, "{share}");
        }
    }

    #[test]
    fn training_config_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("train.toml");
        emit_training_config(&TrainingConfig::default(), &p).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        assert!(text.contains("learning_rate = 0.00001"), "{text}");
        let back = load_training_config(&p).unwrap();
        assert_eq!(back, TrainingConfig::default());
        assert_eq!(back.effective_batch_size, 32);
        assert_eq!(back.learning_rate, 1e-5);
        assert_eq!(back.sequence_length, 16384);
        assert_eq!(back.validation_split, 0.05);
    }
}
