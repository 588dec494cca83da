//! Runs candidates with the host compiler, sanitizer and Caliper.

use std::collections::BTreeMap;
use std::path::Path;

use super::build::{compile, BuildArtifact, BuildKind};
use super::caliper::{parse_caliper, reduce_repeats, CaliperSample};
use super::exec::{self, ExecOutput};
use super::instrument::{instrument_with_caliper, RegionSpan};
use super::tsan::parse_tsan;
use super::{round_work, ProfileRun, RunStatus, Slots, ToolRunner, ToolchainProfile, TsanRun, CANDIDATE_FILE};
use crate::model::{CaliperProfile, CandidateCode, HarnessBundle, WorkCell};
use crate::prompts::render;
use crate::{Error, Result};

pub struct LiveToolchain {
    profile: ToolchainProfile,
    tsan_slots: Slots,
    caliper_slots: Slots,
}

impl LiveToolchain {
    pub fn new(profile: ToolchainProfile) -> Result<Self> {
        profile.validate()?;
        Ok(LiveToolchain {
            tsan_slots: Slots::new(profile.tsan_parallelism),
            caliper_slots: Slots::new(profile.caliper_parallelism),
            profile,
        })
    }

    fn env(&self, threads: u32) -> BTreeMap<String, String> {
        let mut env = self.profile.env_overrides.clone();
        env.insert("OMP_NUM_THREADS".into(), threads.to_string());
        env
    }

    fn run_binary(
        &self,
        artifact: &BuildArtifact,
        args: &[String],
        env: &BTreeMap<String, String>,
    ) -> Result<ExecOutput> {
        let mut argv = vec![artifact.binary.to_string_lossy().into_owned()];
        argv.extend(args.iter().cloned());
        exec::run(&argv, &artifact.dir, env, self.profile.run_timeout())
    }
}

fn crashed(out: &ExecOutput) -> bool {
    out.signal.is_some() || out.stderr.contains("DEADLYSIGNAL") || out.stderr.contains("ThreadSanitizer: SEGV")
}

fn status_of(out: &ExecOutput) -> String {
    match (out.status, out.signal) {
        (_, Some(sig)) => format!("signal {sig}"),
        (Some(code), None) => format!("exit {code}"),
        (None, None) => "unknown".into(),
    }
}

impl ToolRunner for LiveToolchain {
    fn is_live(&self) -> bool {
        true
    }

    fn profile(&self) -> &ToolchainProfile {
        &self.profile
    }

    fn run_tsan(&self, bundle: &HarnessBundle, candidate: &CandidateCode, work_root: &Path) -> Result<TsanRun> {
        let _slot = self.tsan_slots.acquire();
        let failed = |status, detail: String| TsanRun {
            raw: String::new(),
            parse: Default::default(),
            status,
            detail,
        };
        let artifact = match compile(bundle, &candidate.source, BuildKind::Tsan, &self.profile, work_root) {
            Ok(a) => a,
            Err(Error::Compile { log }) => return Ok(failed(RunStatus::CompileFailed, log)),
            Err(Error::Timeout(d)) => return Ok(failed(RunStatus::Timeout, format!("compile timed out after {d:?}"))),
            Err(e) => return Err(e),
        };
        let mut env = self.env(self.profile.tsan_threads);
        env.insert("TSAN_OPTIONS".into(), self.profile.tsan_options.clone());

        let n = self.profile.repeat_count;
        let mut raw = String::new();
        let mut status = RunStatus::Ok;
        let mut detail = String::new();
        for i in 1..=n {
            let out = self.run_binary(&artifact, &self.profile.validate_args, &env)?;
            raw.push_str(&format!("----- tsan run {i} of {n} ({}) -----\n", status_of(&out)));
            raw.push_str(&out.stderr);
            if !out.stderr.ends_with('\n') && !out.stderr.is_empty() {
                raw.push('\n');
            }
            if out.timed_out {
                status = RunStatus::Timeout;
                detail = format!("run {i} timed out after {:?}", self.profile.run_timeout());
                break;
            }
            if crashed(&out) {
                status = RunStatus::Crash;
                detail = format!("run {i} crashed ({})", status_of(&out));
                break;
            }
        }
        let parse = parse_tsan(&raw, CANDIDATE_FILE);
        Ok(TsanRun {
            raw,
            parse,
            status,
            detail,
        })
    }

    fn validate_correctness(
        &self,
        bundle: &HarnessBundle,
        candidate: &CandidateCode,
        work_root: &Path,
    ) -> Result<bool> {
        let artifact = compile(bundle, &candidate.source, BuildKind::Plain, &self.profile, work_root)?;
        let out = self.run_binary(
            &artifact,
            &self.profile.validate_args,
            &self.env(self.profile.tsan_threads),
        )?;
        if out.timed_out {
            log::info!("{}: validation timed out", candidate.id);
            return Ok(false);
        }
        Ok(out.success() && out.stdout.contains("VALIDATION: PASS"))
    }

    fn profile_candidate(
        &self,
        bundle: &HarnessBundle,
        candidate: &CandidateCode,
        spans: &[RegionSpan],
        thread_counts: &[u32],
        work_root: &Path,
    ) -> Result<ProfileRun> {
        let instrumented = instrument_with_caliper(&candidate.source, spans)?;
        let artifact = compile(bundle, &instrumented, BuildKind::Caliper, &self.profile, work_root)?;
        let _slot = self.caliper_slots.acquire();
        let cores = std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1);

        let mut profile = CaliperProfile::new(thread_counts.iter().copied());
        let mut seconds: BTreeMap<String, f64> = BTreeMap::new();
        for &tc in thread_counts {
            if tc as usize > cores {
                log::warn!("{tc} threads oversubscribe {cores} host cores");
            }
            let mut samples: Vec<CaliperSample> = Vec::new();
            for r in 0..self.profile.repeat_count {
                let output = artifact.dir.join(format!("cali-{tc}-{r}.json"));
                let _ = std::fs::remove_file(&output);
                let out_str = output.to_string_lossy().into_owned();
                let mut env = self.env(tc);
                for (k, v) in &self.profile.caliper_env {
                    env.insert(k.clone(), render(v, &[("output", &out_str)]));
                }
                let out = self.run_binary(&artifact, &self.profile.benchmark_args, &env)?;
                if !out.success() {
                    log::warn!(
                        "{}: caliper run at {tc} threads failed ({})",
                        candidate.id,
                        status_of(&out)
                    );
                    continue;
                }
                let raw = match std::fs::read_to_string(&output) {
                    Ok(raw) => raw,
                    Err(_) => out.stdout.clone(),
                };
                match parse_caliper(&raw, spans, &self.profile.metrics) {
                    Ok(s) => samples.push(s),
                    Err(e) => log::warn!("{}: caliper report at {tc} threads unusable: {e}", candidate.id),
                }
            }
            let reduced = reduce_repeats(&samples, spans);
            for span in spans {
                let label = span.label();
                let cell = match reduced.work_percent.get(&label) {
                    Some(WorkCell::Measured(v)) => WorkCell::Measured(round_work(*v)),
                    _ => WorkCell::Failed,
                };
                profile.insert(label.clone(), tc, cell);
                *seconds.entry(label).or_default() += reduced.seconds.get(&span.label()).copied().unwrap_or(0.0);
            }
        }
        Ok(ProfileRun {
            profile,
            region_seconds: seconds,
        })
    }

    fn compile_check(&self, bundle: &HarnessBundle, source: &str, work_root: &Path) -> Result<()> {
        compile(bundle, source, BuildKind::Plain, &self.profile, work_root).map(|_| ())
    }
}
