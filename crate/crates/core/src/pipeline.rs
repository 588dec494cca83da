//! Stage orchestration over a run directory.
//!
//! Every stage reads the stores written by the stages before it and appends
//! to its own. Re-running a stage is cheap: completions replay from the
//! journal and stores skip keys they already hold.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{load_seeds, Config, Seed};
use crate::cot::{pair_candidates, pairing_seed, CotSettings, CotSynth};
use crate::dataset::{self, assemble, export_sft, StoreView, TrainingConfig};
use crate::eval::{
    bucket_by_gap, buckets_csv, compute_table, length_stats, load_race_benchmark, prepare_pareval_pairs, race_table,
    ranking_table, ComputeRow, Evaluator, LabelSource, ProfiledSolution, RaceEvalItem,
};
use crate::explore::{FanOut, Generator};
use crate::fix::{fix_grid, FeedbackSource, FixAgent, FixItem, FixReport, ToolOracle};
use crate::gateway::{ChatBackend, FixtureBackend, Gateway, HttpBackend, Journal, ModelEndpoint};
use crate::model::{render_caliper_answer, CandidateCode, CoTRecord, HarnessBundle, ProblemRecord, Tool};
use crate::prompts::{HarnessAssets, Templates};
use crate::store::{read_jsonl, write_atomic, write_jsonl, AuditEntry, JsonlStore, Keyed, RunDir};
use crate::tokens::TokenEstimator;
use crate::toolchain::{
    identify_regions, region_snippets, CaliperOutcomeRecord, LiveToolchain, RunStatus, StubToolchain, ToolRunner,
    TsanOutcomeRecord,
};
use crate::{Error, Result};

pub const MOCK_ENDPOINT: &str = "mock";

#[derive(Debug, Clone, Default)]
pub struct Options {
    pub run_dir: PathBuf,
    /// Mock endpoints and the stub toolchain.
    pub dry_run: bool,
    /// Fixture directory for the mock endpoint; implies mock endpoints.
    pub mock_endpoint: Option<PathBuf>,
}

/// Counts for one stage invocation.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageSummary {
    pub stage: String,
    pub processed: usize,
    pub written: usize,
    pub failed: usize,
}

impl StageSummary {
    fn new(stage: &str) -> Self {
        StageSummary {
            stage: stage.to_owned(),
            ..Default::default()
        }
    }
}

pub struct Pipeline {
    pub cfg: Config,
    pub run: RunDir,
    pub gateway: Gateway,
    pub templates: Templates,
    pub assets: HarnessAssets,
    pub estimator: TokenEstimator,
    dry_run: bool,
    interrupted: Arc<AtomicBool>,
    pool: rayon::ThreadPool,
}

fn json_err(e: serde_json::Error) -> Error {
    Error::Format(e.to_string())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    let mut text = serde_json::to_string_pretty(value).map_err(json_err)?;
    text.push('\n');
    write_atomic(path, text.as_bytes())
}

impl Pipeline {
    pub fn new(mut cfg: Config, opts: &Options) -> Result<Self> {
        let run = RunDir::create(&opts.run_dir)?;
        let mock = opts.dry_run || opts.mock_endpoint.is_some();
        if mock && cfg.endpoints.is_empty() {
            cfg.endpoints
                .push(ModelEndpoint::new(MOCK_ENDPOINT, "mock://fixtures", 1_000_000));
        }
        cfg.validate()?;
        let estimator = TokenEstimator::new(cfg.chars_per_token);
        let mut gateway = Gateway::new(Some(Journal::open(run.journal_dir())?)).with_estimator(estimator);
        let backend: Arc<dyn ChatBackend> = if mock {
            Arc::new(FixtureBackend::new(opts.mock_endpoint.clone()))
        } else {
            Arc::new(
                HttpBackend::new(std::time::Duration::from_secs(600)).map_err(|e| Error::Endpoint {
                    endpoint: "http".into(),
                    message: e.to_string(),
                })?,
            )
        };
        for ep in &cfg.endpoints {
            gateway.register(ep.clone(), backend.clone())?;
        }
        let templates = match &cfg.prompts_dir {
            Some(d) => Templates::with_overrides(d)?,
            None => Templates::builtin(),
        };
        let assets = match &cfg.harness_dir {
            Some(d) => HarnessAssets::with_overrides(d)?,
            None => HarnessAssets::default(),
        };
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(cfg.workers)
            .build()
            .map_err(|e| Error::Config(e.to_string()))?;
        Ok(Pipeline {
            cfg,
            run,
            gateway,
            templates,
            assets,
            estimator,
            dry_run: opts.dry_run,
            interrupted: Arc::new(AtomicBool::new(false)),
            pool,
        })
    }

    /// Set it to stop stages after the items in flight.
    pub fn interrupt_flag(&self) -> Arc<AtomicBool> {
        self.interrupted.clone()
    }

    fn stopping(&self) -> bool {
        self.interrupted.load(Ordering::SeqCst)
    }

    fn check_interrupt(&self) -> Result<()> {
        if self.stopping() {
            Err(Error::Interrupted)
        } else {
            Ok(())
        }
    }

    fn par_map<T: Sync, R: Send>(&self, items: &[T], f: impl Fn(&T) -> R + Sync + Send) -> Result<Vec<R>> {
        let out = self.pool.install(|| {
            items
                .par_iter()
                .filter_map(|it| if self.stopping() { None } else { Some(f(it)) })
                .collect()
        });
        self.check_interrupt()?;
        Ok(out)
    }

    fn audit_store(&self) -> Result<JsonlStore<AuditEntry>> {
        JsonlStore::open(self.run.audit())
    }

    fn record_audit(&self, entries: &[AuditEntry]) -> Result<()> {
        let store = self.audit_store()?;
        for e in entries {
            store.append(e)?;
        }
        Ok(())
    }

    pub fn runner(&self) -> Result<Box<dyn ToolRunner>> {
        if self.dry_run {
            Ok(Box::new(StubToolchain::new(self.cfg.toolchain.clone())))
        } else {
            check_compiler(&self.cfg)?;
            Ok(Box::new(LiveToolchain::new(self.cfg.toolchain.clone())?))
        }
    }

    fn generator(&self, params: crate::gateway::SamplingParams) -> Generator<'_> {
        Generator {
            gateway: &self.gateway,
            templates: &self.templates,
            params,
            max_resamples: self.cfg.max_resamples,
        }
    }

    pub fn problems(&self) -> Result<Vec<ProblemRecord>> {
        read_jsonl(&self.run.problems())
    }

    fn harness_map(&self) -> Result<BTreeMap<String, HarnessBundle>> {
        Ok(read_jsonl::<HarnessBundle>(&self.run.harnesses())?
            .into_iter()
            .map(|h| (h.problem_id.clone(), h))
            .collect())
    }

    pub fn candidates_list(&self) -> Result<Vec<CandidateCode>> {
        read_jsonl(&self.run.candidates())
    }

    fn store_view(&self) -> Result<StoreView> {
        Ok(StoreView {
            candidates: self.candidates_list()?,
            tsan: read_jsonl(&self.run.tsan_outcomes())?,
            caliper: read_jsonl(&self.run.caliper_outcomes())?,
            cots: read_jsonl(&self.run.cots())?,
        })
    }

    // ------------------------------------------------------------ explore

    pub fn explore(&self) -> Result<StageSummary> {
        let seeds = load_seeds(&self.cfg.explore)?;
        if seeds.is_empty() {
            return Err(Error::Config("no seeds match the explore filters".into()));
        }
        let endpoint = self.cfg.role_or_first(&self.cfg.roles.generator)?;
        let store = JsonlStore::<ProblemRecord>::open(self.run.problems())?;
        let gen = self.generator(self.cfg.sampling.default);
        let n = self.cfg.explore.variants_per_seed;
        let results = self.par_map(&seeds, |seed: &Seed| -> Result<(usize, Vec<AuditEntry>, bool)> {
            let root = ProblemRecord::new(&seed.domain, &seed.seed_id, 0, &seed.statement)?;
            let mut written = store.append(&root)? as usize;
            match gen.generate_variants(&endpoint, &root, n) {
                Ok(g) => {
                    for p in &g.items {
                        written += store.append(p)? as usize;
                    }
                    Ok((written, g.audit, false))
                }
                Err(e) => Ok((
                    written,
                    vec![AuditEntry::new(
                        "explore",
                        root.key(),
                        "variant_generation_failed",
                        e.to_string(),
                    )],
                    true,
                )),
            }
        })?;
        let mut s = StageSummary::new("explore");
        for r in results {
            let (w, audit, failed) = r?;
            s.processed += 1;
            s.written += w;
            s.failed += failed as usize;
            self.record_audit(&audit)?;
        }
        Ok(s)
    }

    // ------------------------------------------------------------ harness

    pub fn harness(&self) -> Result<StageSummary> {
        let endpoint = self.cfg.role_or_first(&self.cfg.roles.generator)?;
        let store = JsonlStore::<HarnessBundle>::open(self.run.harnesses())?;
        let todo: Vec<ProblemRecord> = self
            .problems()?
            .into_iter()
            .filter(|p| !store.contains(&p.id))
            .collect();
        let gen = self.generator(self.cfg.sampling.default);
        let results = self.par_map(&todo, |p| match gen.generate_harness(&endpoint, &self.assets, p) {
            Ok(b) => store.append(&b).map(|w| (w, None)),
            Err(e) => Ok((
                false,
                Some(AuditEntry::new("harness", &p.id, "harness_failed", e.to_string())),
            )),
        })?;
        let mut s = StageSummary::new("harness");
        for r in results {
            let (w, audit) = r?;
            s.processed += 1;
            s.written += w as usize;
            if let Some(a) = audit {
                s.failed += 1;
                self.record_audit(&[a])?;
            }
        }
        Ok(s)
    }

    // ------------------------------------------------------------ candidates

    pub fn candidates(&self) -> Result<StageSummary> {
        let models = self.cfg.candidate_models();
        for m in &models {
            self.gateway.endpoint(m)?;
        }
        let harnesses = self.harness_map()?;
        let problems: Vec<ProblemRecord> = self
            .problems()?
            .into_iter()
            .filter(|p| harnesses.contains_key(&p.id))
            .collect();
        let store = JsonlStore::<CandidateCode>::open(self.run.candidates())?;
        let gen = self.generator(self.cfg.sampling.candidates);
        let k = self.cfg.explore.candidates_per_prompt;
        let modes = self.cfg.explore.modes.clone();
        let results = self.par_map(&problems, |p| -> Result<(usize, usize, Vec<AuditEntry>)> {
            let bundle = &harnesses[&p.id];
            // one dedupe set per problem, across models and modes
            let mut seen = BTreeSet::new();
            let (mut written, mut failed, mut audit) = (0, 0, Vec::new());
            for model in &models {
                for &mode in &modes {
                    match gen.generate_candidates(model, p, bundle, mode, k, &mut seen) {
                        Ok(g) => {
                            for c in &g.items {
                                written += store.append(c)? as usize;
                            }
                            audit.extend(g.audit);
                        }
                        Err(e) => {
                            failed += 1;
                            audit.push(AuditEntry::new(
                                "candidates",
                                format!("{}/{model}/{}", p.id, mode.as_str()),
                                "candidate_generation_failed",
                                e.to_string(),
                            ));
                        }
                    }
                }
            }
            Ok((written, failed, audit))
        })?;
        let mut s = StageSummary::new("candidates");
        for r in results {
            let (w, f, audit) = r?;
            s.processed += 1;
            s.written += w;
            s.failed += f;
            self.record_audit(&audit)?;
        }
        write_json(&self.run.stats_dir().join("fanout.json"), &self.fan_out()?)?;
        Ok(s)
    }

    /// Candidate count against the configured maximum, with the shortfall
    /// attributed to audited causes.
    pub fn fan_out(&self) -> Result<FanOut> {
        let seeds = load_seeds(&self.cfg.explore)?;
        let mut per_domain: BTreeMap<&str, usize> = BTreeMap::new();
        for s in &seeds {
            *per_domain.entry(s.domain.as_str()).or_default() += 1;
        }
        let spd = per_domain.values().copied().max().unwrap_or(0);
        let e = self.cfg.candidate_models().len();
        let k = self.cfg.explore.candidates_per_prompt as usize;
        let m = self.cfg.explore.modes.len();
        let v = self.cfg.explore.variants_per_seed as usize;
        let per_problem = e * k * m;
        let mut shortfall: BTreeMap<String, usize> = BTreeMap::new();
        let missing_seeds: usize = per_domain.values().map(|n| spd - n).sum();
        if missing_seeds > 0 {
            shortfall.insert("seed_pool".into(), missing_seeds * (v + 1) * per_problem);
        }
        for a in read_jsonl::<AuditEntry>(&self.run.audit())? {
            let lost = match a.cause.as_str() {
                "missing_variant" | "duplicate_variant" | "harness_failed" => per_problem,
                "variant_generation_failed" => v * per_problem,
                "candidate_generation_failed" => k,
                "duplicate_candidate" | "missing_implementation" | "no_code_block" => 1,
                _ => 0,
            };
            if lost > 0 {
                *shortfall.entry(a.cause).or_default() += lost;
            }
        }
        Ok(FanOut {
            domains: per_domain.len(),
            seeds_per_domain: spd,
            variants_per_seed: v,
            endpoints: e,
            k,
            modes: m,
            actual: self.candidates_list()?.len(),
            shortfall,
        })
    }

    // ------------------------------------------------------------ toolrun

    pub fn toolrun(&self, tool: Tool) -> Result<StageSummary> {
        let runner = self.runner()?;
        match tool {
            Tool::Tsan => self.toolrun_tsan(runner.as_ref()),
            Tool::Caliper => self.toolrun_caliper(runner.as_ref()),
        }
    }

    fn toolrun_tsan(&self, runner: &dyn ToolRunner) -> Result<StageSummary> {
        let harnesses = self.harness_map()?;
        let store = JsonlStore::<TsanOutcomeRecord>::open(self.run.tsan_outcomes())?;
        let todo: Vec<CandidateCode> = self
            .candidates_list()?
            .into_iter()
            .filter(|c| !store.contains(&c.id))
            .collect();
        let raw_dir = self.run.raw_dir().join("tsan");
        std::fs::create_dir_all(&raw_dir)?;
        let work = self.run.work_dir();
        let results = self.par_map(&todo, |c| -> Result<(bool, Option<AuditEntry>)> {
            let Some(bundle) = harnesses.get(&c.problem_id) else {
                return Ok((false, Some(AuditEntry::new("toolrun_tsan", &c.id, "no_harness", ""))));
            };
            let run = match runner.run_tsan(bundle, c, &work) {
                Ok(r) => r,
                Err(e) => {
                    return Ok((
                        false,
                        Some(AuditEntry::new("toolrun_tsan", &c.id, "tool_error", e.to_string())),
                    ))
                }
            };
            let raw_name = format!("{}.log", c.id);
            write_atomic(&raw_dir.join(&raw_name), run.raw.as_bytes())?;
            let rec = TsanOutcomeRecord {
                candidate_id: c.id.clone(),
                problem_id: c.problem_id.clone(),
                status: run.status,
                report: run.parse.report,
                non_candidate: run.parse.non_candidate,
                diagnostics: run.parse.diagnostics,
                warning_count: run.parse.warning_count,
                raw_path: Some(format!("raw/tsan/{raw_name}")),
                stubbed: !runner.is_live(),
                detail: run.detail,
            };
            let audit = (rec.status != RunStatus::Ok)
                .then(|| AuditEntry::new("toolrun_tsan", &c.id, "run_failed", format!("{:?}", rec.status)));
            Ok((store.append(&rec)?, audit))
        })?;
        self.tally("toolrun_tsan", results)
    }

    fn toolrun_caliper(&self, runner: &dyn ToolRunner) -> Result<StageSummary> {
        let harnesses = self.harness_map()?;
        let store = JsonlStore::<CaliperOutcomeRecord>::open(self.run.caliper_outcomes())?;
        let todo: Vec<CandidateCode> = self
            .candidates_list()?
            .into_iter()
            .filter(|c| !store.contains(&c.id))
            .collect();
        let regions_ep = self.cfg.role_or_first(&self.cfg.roles.regions)?;
        let tcs = self.cfg.toolchain.thread_counts.clone();
        let work = self.run.work_dir();
        let results = self.par_map(&todo, |c| -> Result<(bool, Option<AuditEntry>)> {
            let Some(bundle) = harnesses.get(&c.problem_id) else {
                return Ok((false, Some(AuditEntry::new("toolrun_caliper", &c.id, "no_harness", ""))));
            };
            let mut rec = CaliperOutcomeRecord {
                candidate_id: c.id.clone(),
                problem_id: c.problem_id.clone(),
                status: RunStatus::Ok,
                correct: None,
                spans: Vec::new(),
                profile: None,
                region_seconds: BTreeMap::new(),
                stubbed: !runner.is_live(),
                detail: String::new(),
            };
            let outcome = (|| -> Result<()> {
                let correct = runner.validate_correctness(bundle, c, &work)?;
                rec.correct = Some(correct);
                if !correct {
                    rec.status = RunStatus::Incorrect;
                    return Ok(());
                }
                rec.spans = identify_regions(&c.source, Some((&self.gateway, &regions_ep)), &self.templates)?;
                if rec.spans.is_empty() {
                    rec.status = RunStatus::NoRegions;
                    return Ok(());
                }
                let run = runner.profile_candidate(bundle, c, &rec.spans, &tcs, &work)?;
                rec.profile = Some(run.profile);
                rec.region_seconds = run.region_seconds;
                Ok(())
            })();
            if let Err(e) = outcome {
                rec.status = match e {
                    Error::Compile { .. } => RunStatus::CompileFailed,
                    Error::Timeout(_) => RunStatus::Timeout,
                    Error::RuntimeCrash { .. } => RunStatus::Crash,
                    Error::Region(_) => RunStatus::NoRegions,
                    _ => RunStatus::Failed,
                };
                rec.detail = e.to_string();
            }
            let audit = (!rec.usable())
                .then(|| AuditEntry::new("toolrun_caliper", &c.id, "not_profiled", format!("{:?}", rec.status)));
            Ok((store.append(&rec)?, audit))
        })?;
        self.tally("toolrun_caliper", results)
    }

    fn tally(&self, stage: &str, results: Vec<Result<(bool, Option<AuditEntry>)>>) -> Result<StageSummary> {
        let mut s = StageSummary::new(stage);
        for r in results {
            let (w, audit) = r?;
            s.processed += 1;
            s.written += w as usize;
            if let Some(a) = audit {
                s.failed += 1;
                self.record_audit(&[a])?;
            }
        }
        Ok(s)
    }

    // ------------------------------------------------------------ cot

    fn cot_synth(&self) -> Result<(String, CotSettings)> {
        let teacher = self.cfg.role_or_first(&self.cfg.roles.teacher)?;
        self.gateway.endpoint(&teacher)?;
        Ok((teacher, CotSettings::from_config(&self.cfg.cot, self.estimator)))
    }

    pub fn cot(&self, tool: Tool, hindsight: bool) -> Result<StageSummary> {
        let (teacher, settings) = self.cot_synth()?;
        let synth = CotSynth {
            gateway: &self.gateway,
            templates: &self.templates,
            teacher: &teacher,
            params: self.cfg.sampling.teacher,
            settings,
        };
        let store = JsonlStore::<CoTRecord>::open(self.run.cots())?;
        let cands: BTreeMap<String, CandidateCode> =
            self.candidates_list()?.into_iter().map(|c| (c.id.clone(), c)).collect();
        let stage = format!("cot_{}", tool.as_str());
        let results: Vec<Result<(Vec<CoTRecord>, Vec<AuditEntry>)>> = match tool {
            Tool::Tsan => {
                let outcomes: Vec<TsanOutcomeRecord> = read_jsonl::<TsanOutcomeRecord>(&self.run.tsan_outcomes())?
                    .into_iter()
                    .filter(|o| o.status == RunStatus::Ok && cands.contains_key(&o.candidate_id))
                    .collect();
                self.par_map(&outcomes, |o| {
                    let c = &cands[&o.candidate_id];
                    match synth.synth_race_cot(c, &o.report, hindsight) {
                        Ok(recs) => Ok((recs, Vec::new())),
                        Err(e) => Ok((
                            Vec::new(),
                            vec![AuditEntry::new(&stage, &c.id, "teacher_failed", e.to_string())],
                        )),
                    }
                })?
            }
            Tool::Caliper => {
                let mut by_problem: BTreeMap<String, Vec<CaliperOutcomeRecord>> = BTreeMap::new();
                for o in read_jsonl::<CaliperOutcomeRecord>(&self.run.caliper_outcomes())? {
                    if o.usable() && cands.contains_key(&o.candidate_id) {
                        by_problem.entry(o.problem_id.clone()).or_default().push(o);
                    }
                }
                let mut jobs = Vec::new();
                let mut audit = Vec::new();
                for (pid, mut outs) in by_problem {
                    outs.sort_by(|a, b| a.candidate_id.cmp(&b.candidate_id));
                    match pair_candidates(
                        outs.len(),
                        self.cfg.cot.pairing_budget,
                        pairing_seed(&pid, self.cfg.cot.seed),
                    ) {
                        Ok(pairs) => jobs.extend(pairs.into_iter().map(|(i, j)| (outs[i].clone(), outs[j].clone()))),
                        Err(e) => audit.push(AuditEntry::new(&stage, &pid, "insufficient_candidates", e.to_string())),
                    }
                }
                self.record_audit(&audit)?;
                self.par_map(&jobs, |(oa, ob)| {
                    let (a, b) = (&cands[&oa.candidate_id], &cands[&ob.candidate_id]);
                    let (pa, pb) = (oa.profile.as_ref().unwrap(), ob.profile.as_ref().unwrap());
                    let ma = render_caliper_answer(pa, &region_snippets(&a.source, &oa.spans));
                    let mb = render_caliper_answer(pb, &region_snippets(&b.source, &ob.spans));
                    match synth.synth_caliper_pair_cot(a, b, pa, pb, &ma, &mb, hindsight) {
                        Ok(recs) => Ok((recs, Vec::new())),
                        Err(e) => Ok((
                            Vec::new(),
                            vec![AuditEntry::new(
                                &stage,
                                format!("{}+{}", a.id, b.id),
                                "teacher_failed",
                                e.to_string(),
                            )],
                        )),
                    }
                })?
            }
        };
        let mut s = StageSummary::new(&stage);
        for r in results {
            let (recs, audit) = r?;
            s.processed += 1;
            if recs.is_empty() || !recs.iter().any(|r| r.validation_status.is_accepted()) {
                s.failed += 1;
            }
            for rec in &recs {
                s.written += store.append(rec)? as usize;
            }
            if !audit.is_empty() {
                self.record_audit(&audit)?;
            } else if let Some(last) = recs.last().filter(|r| !r.validation_status.is_accepted()) {
                self.record_audit(&[AuditEntry::new(
                    &stage,
                    last.candidate_ids.join("+"),
                    "never_accepted",
                    format!("{:?} after {} attempts", last.validation_status, recs.len()),
                )])?;
            }
        }
        Ok(s)
    }

    // ------------------------------------------------------------ dataset

    fn tool_dir(&self, tool: Tool) -> PathBuf {
        self.run.dataset_dir().join(tool.as_str())
    }

    pub fn dataset_build(&self, tool: Tool, hindsight: Option<bool>) -> Result<StageSummary> {
        let view = self.store_view()?;
        let asm = assemble(&view, tool, hindsight);
        let dir = self.tool_dir(tool);
        write_jsonl(&dir.join("tuples.jsonl"), &asm.tuples)?;
        write_json(&dir.join("balance.json"), &asm.balance)?;
        self.record_audit(&asm.audit)?;
        Ok(StageSummary {
            stage: format!("dataset_build_{}", tool.as_str()),
            processed: view.cots.iter().filter(|c| c.tool == tool).count(),
            written: asm.tuples.len(),
            failed: asm.audit.len(),
        })
    }

    pub fn dataset_export(&self, tool: Tool) -> Result<StageSummary> {
        let dir = self.tool_dir(tool);
        let tuples: Vec<crate::model::TrainTuple> = read_jsonl(&dir.join("tuples.jsonl"))?;
        let ex = export_sft(
            &tuples,
            "chat_jsonl",
            &self.templates,
            &self.estimator,
            self.cfg.dataset.max_seq_tokens,
        )?;
        let (train, val) = dataset::split(&ex.records, self.cfg.dataset.val_fraction, &self.cfg.dataset.split_seed)?;
        write_jsonl(&dir.join("train.jsonl"), &train)?;
        write_jsonl(&dir.join("val.jsonl"), &val)?;
        let tc = TrainingConfig {
            sequence_length: self.cfg.dataset.max_seq_tokens,
            validation_split: self.cfg.dataset.val_fraction,
            train_file: Some("train.jsonl".into()),
            validation_file: Some("val.jsonl".into()),
            ..TrainingConfig::default()
        };
        dataset::emit_training_config(&tc, &dir.join("training.toml"))?;
        self.record_audit(&ex.audit)?;
        Ok(StageSummary {
            stage: format!("dataset_export_{}", tool.as_str()),
            processed: tuples.len(),
            written: ex.records.len(),
            failed: ex.audit.len(),
        })
    }

    /// Nested subsets of the training split; `targets` defaults to the config.
    pub fn dataset_subsample(&self, tool: Tool, targets: Option<&[usize]>) -> Result<StageSummary> {
        let dir = self.tool_dir(tool);
        let train: Vec<dataset::SftRecord> = read_jsonl(&dir.join("train.jsonl"))?;
        let targets = targets.unwrap_or(&self.cfg.dataset.subsample_targets);
        let subsets = dataset::subsample(&train, targets, &self.cfg.dataset.split_seed)?;
        for (t, subset) in targets.iter().zip(&subsets) {
            write_jsonl(&dir.join("subsets").join(format!("n{t}.jsonl")), subset)?;
        }
        Ok(StageSummary {
            stage: format!("dataset_subsample_{}", tool.as_str()),
            processed: train.len(),
            written: subsets.len(),
            failed: 0,
        })
    }

    // ------------------------------------------------------------ eval

    fn evaluator(&self) -> Evaluator<'_> {
        Evaluator {
            gateway: &self.gateway,
            templates: &self.templates,
            params: self.cfg.sampling.evaluation,
            estimator: self.estimator,
        }
    }

    fn eval_endpoints(&self, endpoints: &[String]) -> Result<Vec<String>> {
        if endpoints.is_empty() {
            Ok(vec![self.cfg.role_or_first(&self.cfg.roles.world_model)?])
        } else {
            Ok(endpoints.to_vec())
        }
    }

    /// Items labelled by this run's sanitizer outcomes.
    pub fn race_items_from_store(&self) -> Result<Vec<RaceEvalItem>> {
        let cands: BTreeMap<String, CandidateCode> =
            self.candidates_list()?.into_iter().map(|c| (c.id.clone(), c)).collect();
        Ok(read_jsonl::<TsanOutcomeRecord>(&self.run.tsan_outcomes())?
            .into_iter()
            .filter(|o| o.status == RunStatus::Ok)
            .filter_map(|o| {
                cands.get(&o.candidate_id).map(|c| RaceEvalItem {
                    program_id: c.id.clone(),
                    source: c.source.clone(),
                    label: !o.report.is_race_free(),
                    label_source: LabelSource::LiveTsan,
                })
            })
            .collect())
    }

    /// Race-presence accuracy per endpoint. Without `bench` the run's own
    /// sanitizer-labelled candidates are the benchmark.
    pub fn eval_race(&self, bench: Option<&Path>, labels: Option<&Path>, endpoints: &[String]) -> Result<StageSummary> {
        let items = match bench {
            Some(dir) => {
                let (items, skipped) = load_race_benchmark(dir, labels)?;
                self.record_audit(
                    &skipped
                        .iter()
                        .map(|p| AuditEntry::new("eval_race", p, "no_label", ""))
                        .collect::<Vec<_>>(),
                )?;
                items
            }
            None => self.race_items_from_store()?,
        };
        let ev = self.evaluator();
        let mut reports = Vec::new();
        let mut rows = Vec::new();
        for ep in self.eval_endpoints(endpoints)? {
            self.check_interrupt()?;
            let rep = self
                .pool
                .install(|| ev.eval_race_presence(&ep, &items, self.cfg.eval.n_samples))?;
            self.record_audit(&rep.audit())?;
            write_json(&self.run.eval_dir().join(format!("race_{ep}.json")), &rep)?;
            let tokens: Vec<usize> = rep
                .items
                .iter()
                .flat_map(|i| i.response_tokens.iter().copied())
                .collect();
            let prompt = items
                .iter()
                .map(|i| self.estimator.estimate(&self.templates.world_model_race(&i.source)));
            rows.push(self.compute_row(&ep, prompt.collect(), &tokens));
            reports.push(rep);
        }
        race_table(&reports).write(&self.run.eval_dir(), "race")?;
        self.write_compute("race", rows)?;
        Ok(StageSummary {
            stage: "eval_race".into(),
            processed: items.len() * reports.len(),
            written: reports.len(),
            failed: reports.iter().map(|r| r.failed_items).sum(),
        })
    }

    fn compute_row(&self, ep: &str, prompt_tokens: Vec<usize>, response_tokens: &[usize]) -> Option<ComputeRow> {
        let model = self.gateway.endpoint(ep).ok()?.model_id().to_owned();
        let params = self
            .cfg
            .eval
            .param_counts
            .get(ep)
            .or_else(|| self.cfg.eval.param_counts.get(&model))?;
        let mean_prompt = prompt_tokens.iter().sum::<usize>() as f64 / prompt_tokens.len().max(1) as f64;
        Some(ComputeRow {
            model: ep.to_owned(),
            params: *params,
            mean_prompt_tokens: mean_prompt,
            lengths: length_stats(response_tokens),
        })
    }

    fn write_compute(&self, stem: &str, rows: Vec<Option<ComputeRow>>) -> Result<()> {
        let rows: Vec<ComputeRow> = rows.into_iter().flatten().collect();
        if !rows.is_empty() {
            compute_table(&rows, &self.cfg.eval.flops).write(&self.run.eval_dir(), &format!("compute_{stem}"))?;
        }
        Ok(())
    }

    /// Pairwise ranking over this run's correct, profiled candidates.
    pub fn eval_ranking(&self, endpoints: &[String]) -> Result<StageSummary> {
        let tcs = self.cfg.eval.thread_counts.clone();
        let cands: BTreeMap<String, CandidateCode> =
            self.candidates_list()?.into_iter().map(|c| (c.id.clone(), c)).collect();
        let solutions: Vec<ProfiledSolution> = read_jsonl::<CaliperOutcomeRecord>(&self.run.caliper_outcomes())?
            .into_iter()
            .filter(|o| o.usable())
            .filter_map(|o| {
                let c = cands.get(&o.candidate_id)?;
                let work = tcs.iter().filter_map(|&t| o.program_work(t).map(|w| (t, w))).collect();
                Some(ProfiledSolution {
                    id: c.id.clone(),
                    problem_id: c.problem_id.clone(),
                    source: c.source.clone(),
                    correct: true,
                    work,
                })
            })
            .collect();
        let (items, audit) = prepare_pareval_pairs(&solutions, &tcs, self.cfg.eval.tie_tolerance);
        self.record_audit(&audit)?;
        let ev = self.evaluator();
        let mut reports = Vec::new();
        let mut rows = Vec::new();
        for ep in self.eval_endpoints(endpoints)? {
            self.check_interrupt()?;
            let rep = self
                .pool
                .install(|| ev.eval_pair_ranking(&ep, &items, &tcs, self.cfg.eval.n_samples))?;
            write_json(&self.run.eval_dir().join(format!("ranking_{ep}.json")), &rep)?;
            let buckets = bucket_by_gap(&rep.cells, &self.cfg.eval.bucket_edges);
            write_atomic(
                &self.run.eval_dir().join(format!("gap_buckets_{ep}.csv")),
                buckets_csv(&buckets)?.as_bytes(),
            )?;
            let prompt = items.iter().map(|i| {
                self.estimator
                    .estimate(&self.templates.world_model_caliper(&i.code_a, &i.code_b, &tcs))
            });
            rows.push(self.compute_row(&ep, prompt.collect(), &rep.response_tokens));
            reports.push(rep);
        }
        ranking_table(&reports).write(&self.run.eval_dir(), "ranking")?;
        self.write_compute("ranking", rows)?;
        Ok(StageSummary {
            stage: "eval_ranking".into(),
            processed: items.len() * reports.len(),
            written: reports.len(),
            failed: reports.iter().map(|r| r.failures.len()).sum(),
        })
    }

    // ------------------------------------------------------------ fix

    /// Candidates the sanitizer flagged, with their harnesses.
    pub fn fix_items(&self) -> Result<Vec<FixItem>> {
        let harnesses = self.harness_map()?;
        let cands: BTreeMap<String, CandidateCode> =
            self.candidates_list()?.into_iter().map(|c| (c.id.clone(), c)).collect();
        Ok(read_jsonl::<TsanOutcomeRecord>(&self.run.tsan_outcomes())?
            .into_iter()
            .filter(|o| o.status == RunStatus::Ok && !o.report.is_race_free())
            .filter_map(|o| {
                let c = cands.get(&o.candidate_id)?;
                Some(FixItem {
                    item_id: c.id.clone(),
                    source: c.source.clone(),
                    bundle: Some(harnesses.get(&c.problem_id)?.clone()),
                })
            })
            .collect())
    }

    pub fn fix(&self, actors: &[String], sources: &[FeedbackSource], passes: u32) -> Result<StageSummary> {
        let items = self.fix_items()?;
        let runner = self.runner()?;
        let oracle = ToolOracle {
            runner: runner.as_ref(),
            work_root: self.run.work_dir().join("fix"),
        };
        let actors = if actors.is_empty() {
            vec![self.cfg.role_or_first(&self.cfg.roles.actor)?]
        } else {
            actors.to_vec()
        };
        let world_model = self.cfg.roles.world_model.clone();
        let mut reports: Vec<FixReport> = Vec::new();
        for actor in &actors {
            for &source in sources {
                self.check_interrupt()?;
                let agent = FixAgent {
                    gateway: &self.gateway,
                    templates: &self.templates,
                    oracle: &oracle,
                    actor,
                    world_model: world_model.as_deref().or(Some(actor.as_str())),
                    params: self.cfg.sampling.default,
                };
                let rep = self.pool.install(|| agent.fix_loop(&items, source, passes))?;
                let path = self
                    .run
                    .fix_dir()
                    .join(format!("transcripts_{actor}_{}.jsonl", source.as_str()));
                write_jsonl(&path, &rep.results)?;
                reports.push(rep);
            }
        }
        fix_grid(&reports).write(&self.run.fix_dir(), "grid")?;
        let summary: Vec<serde_json::Value> = reports
            .iter()
            .map(|r| {
                serde_json::json!({
                    "actor": r.actor,
                    "source": r.source.as_str(),
                    "items": r.results.len(),
                    "definitive": r.definitive(),
                    "race_free": r.race_free_count(),
                    "indeterminate": r.indeterminate(),
                    "race_free_pct": r.race_free_pct(),
                })
            })
            .collect();
        write_json(&self.run.fix_dir().join("summary.json"), &summary)?;
        Ok(StageSummary {
            stage: "fix".into(),
            processed: items.len() * reports.len(),
            written: reports.len(),
            failed: reports.iter().map(FixReport::indeterminate).sum(),
        })
    }

    // ------------------------------------------------------------ report

    pub fn report(&self) -> Result<StageSummary> {
        let mut counts = BTreeMap::new();
        counts.insert("problems", self.problems()?.len());
        counts.insert("harnesses", self.harness_map()?.len());
        counts.insert("candidates", self.candidates_list()?.len());
        counts.insert(
            "tsan_outcomes",
            read_jsonl::<TsanOutcomeRecord>(&self.run.tsan_outcomes())?.len(),
        );
        counts.insert(
            "caliper_outcomes",
            read_jsonl::<CaliperOutcomeRecord>(&self.run.caliper_outcomes())?.len(),
        );
        let cots: Vec<CoTRecord> = read_jsonl(&self.run.cots())?;
        counts.insert("cots", cots.len());
        counts.insert(
            "cots_accepted",
            cots.iter().filter(|c| c.validation_status.is_accepted()).count(),
        );
        let mut audit: BTreeMap<String, BTreeMap<String, usize>> = BTreeMap::new();
        for a in read_jsonl::<AuditEntry>(&self.run.audit())? {
            *audit.entry(a.stage).or_default().entry(a.cause).or_default() += 1;
        }
        let fan = self.fan_out()?;
        write_json(
            &self.run.reports_dir().join("summary.json"),
            &serde_json::json!({ "counts": counts, "audit": audit, "fan_out": fan }),
        )?;

        let mut md = String::from("# Run summary\n\n## Records\n\n");
        for (k, v) in &counts {
            md.push_str(&format!("- {k}: {v}\n"));
        }
        md.push_str(&format!(
            "\n## Fan-out\n\n{} of at most {} candidates; unexplained shortfall {}\n",
            fan.actual,
            fan.maximum(),
            fan.unexplained()
        ));
        md.push_str("\n## Audit\n\n");
        if audit.is_empty() {
            md.push_str("No dropped items.\n");
        }
        for (stage, causes) in &audit {
            for (cause, n) in causes {
                md.push_str(&format!("- {stage} / {cause}: {n}\n"));
            }
        }
        for (dir, stems) in [
            (
                self.run.eval_dir(),
                &["race", "ranking", "compute_race", "compute_ranking"][..],
            ),
            (self.run.fix_dir(), &["grid"][..]),
        ] {
            for stem in stems {
                if let Ok(t) = std::fs::read_to_string(dir.join(format!("{stem}.txt"))) {
                    md.push_str(&format!("\n```\n{}```\n", t));
                }
            }
        }
        write_atomic(&self.run.reports_dir().join("summary.md"), md.as_bytes())?;
        Ok(StageSummary {
            stage: "report".into(),
            processed: counts.len(),
            written: 2,
            failed: 0,
        })
    }

    /// Generation through export for both tools.
    pub fn run_all(&self, hindsight: bool) -> Result<Vec<StageSummary>> {
        let mut out = vec![self.explore()?, self.harness()?, self.candidates()?];
        for tool in [Tool::Tsan, Tool::Caliper] {
            out.push(self.toolrun(tool)?);
        }
        for tool in [Tool::Tsan, Tool::Caliper] {
            out.push(self.cot(tool, hindsight)?);
            out.push(self.dataset_build(tool, Some(hindsight))?);
            out.push(self.dataset_export(tool)?);
        }
        Ok(out)
    }

    /// `stats/last_invocation.json`: stage counts and endpoint calls.
    pub fn write_invocation(
        &self,
        command: &str,
        stages: &[StageSummary],
        started: Instant,
        error: Option<&Error>,
    ) -> Result<()> {
        write_json(
            &self.run.stats_dir().join("last_invocation.json"),
            &serde_json::json!({
                "command": command,
                "dry_run": self.dry_run,
                "seconds": started.elapsed().as_secs_f64(),
                "interrupted": self.stopping(),
                "error": error.map(|e| e.to_string()),
                "exit_code": error.map_or(0, Error::exit_code),
                "gateway": self.gateway.stats(),
                "stages": stages,
            }),
        )
    }
}

fn check_compiler(cfg: &Config) -> Result<()> {
    let cxx = &cfg.toolchain.cxx;
    if crate::toolchain::exec::available(cxx) {
        Ok(())
    } else {
        Err(Error::ToolchainUnavailable(format!(
            "compiler `{cxx}` cannot be run. Install a C++ compiler with OpenMP and ThreadSanitizer \
             support (e.g. g++ or clang++), set `toolchain.cxx` in the config, or pass --dry-run to \
             use the stub toolchain"
        )))
    }
}

/// Environment checks; each line is one finding. Fails on a missing compiler.
pub fn doctor(cfg: &Config) -> Result<Vec<String>> {
    let mut lines = Vec::new();
    check_compiler(cfg)?;
    lines.push(format!("ok: compiler `{}` found", cfg.toolchain.cxx));
    if cfg.endpoints.is_empty() {
        lines.push("warn: no endpoints configured; only --dry-run or --mock-endpoint will work".into());
    }
    for ep in &cfg.endpoints {
        if !ep.api_key_env.is_empty() && std::env::var(&ep.api_key_env).is_err() {
            lines.push(format!(
                "warn: endpoint `{}` needs ${} which is not set",
                ep.name, ep.api_key_env
            ));
        } else {
            lines.push(format!("ok: endpoint `{}` at {}", ep.name, ep.base_url));
        }
    }
    Ok(lines)
}
