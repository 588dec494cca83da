//! Compiling and running candidates under ThreadSanitizer and Caliper.

mod build;
pub mod caliper;
pub mod corpus;
pub mod exec;
pub mod instrument;
mod live;
pub mod regions;
pub(crate) mod stub;
pub mod tsan;

pub use build::{compile, BuildArtifact, BuildKind};
pub use caliper::{median, parse_caliper, reduce_repeats, work_percentage, CaliperMetrics, CaliperSample};
pub use instrument::{
    check_marker_nesting, instrument_with_caliper, region_snippets, strip_caliper_markers, validate_spans, RegionSpan,
    CALIPER_HEADER,
};
pub use live::LiveToolchain;
pub use regions::{identify_regions, scan_parallel_regions, spans_from_json};
pub use stub::StubToolchain;
pub use tsan::{parse_tsan, TsanDiagnostic, TsanParse};

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::{Condvar, Mutex};
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::model::{CaliperProfile, CandidateCode, CodeLocation, HarnessBundle, RaceReport};
use crate::store::Keyed;
use crate::{Error, Result};

/// Name the candidate source is written under in every build directory.
pub const CANDIDATE_FILE: &str = "generated.cc";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ToolchainProfile {
    /// argv template run in the build directory; `{cxx}`,
    /// `{extra_cxxflags}` and `{extra_ldflags}` are substituted.
    pub compiler_command: Vec<String>,
    pub cxx: String,
    pub tsan_flags: String,
    pub tsan_ldflags: String,
    pub openmp_flags: String,
    pub caliper_cxxflags: String,
    pub caliper_ldflags: String,
    pub compile_timeout_secs: u64,
    pub run_timeout_secs: u64,
    pub repeat_count: u32,
    pub env_overrides: BTreeMap<String, String>,
    pub tsan_options: String,
    /// OMP_NUM_THREADS for sanitizer and validation runs.
    pub tsan_threads: u32,
    pub validate_args: Vec<String>,
    pub benchmark_args: Vec<String>,
    /// Caliper environment; `{output}` becomes the report path.
    pub caliper_env: BTreeMap<String, String>,
    pub thread_counts: Vec<u32>,
    pub metrics: CaliperMetrics,
    pub tsan_parallelism: usize,
    pub caliper_parallelism: usize,
}

impl Default for ToolchainProfile {
    fn default() -> Self {
        let caliper_env = [
            ("CALI_SERVICES_ENABLE", "aggregate,event,ompt,report,timer"),
            ("CALI_AGGREGATE_KEY", "region,omp.state"),
            (
                "CALI_REPORT_CONFIG",
                "select region,omp.state,sum(sum#time.duration) group by region,omp.state format json",
            ),
            ("CALI_REPORT_FILENAME", "{output}"),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_owned(), v.to_owned()))
        .collect();
        ToolchainProfile {
            compiler_command: [
                "make",
                "-s",
                "CXX={cxx}",
                "EXTRA_CXXFLAGS={extra_cxxflags}",
                "EXTRA_LDFLAGS={extra_ldflags}",
            ]
            .map(String::from)
            .to_vec(),
            cxx: "g++".into(),
            tsan_flags: "-fsanitize=thread -g -O1".into(),
            tsan_ldflags: "-fsanitize=thread".into(),
            openmp_flags: "-fopenmp".into(),
            caliper_cxxflags: String::new(),
            caliper_ldflags: "-lcaliper".into(),
            compile_timeout_secs: 120,
            run_timeout_secs: 60,
            repeat_count: 3,
            env_overrides: BTreeMap::new(),
            tsan_options: "halt_on_error=0 suppress_equal_addresses=0".into(),
            tsan_threads: 4,
            validate_args: vec!["validate".into()],
            benchmark_args: vec!["benchmark".into()],
            caliper_env,
            thread_counts: vec![4, 16, 64, 128],
            metrics: CaliperMetrics::default(),
            tsan_parallelism: 4,
            caliper_parallelism: 1,
        }
    }
}

impl ToolchainProfile {
    pub fn validate(&self) -> Result<()> {
        if self.run_timeout_secs == 0 || self.compile_timeout_secs == 0 {
            return Err(Error::Config("toolchain timeouts must be positive".into()));
        }
        if self.repeat_count == 0 {
            return Err(Error::Config("repeat_count must be at least 1".into()));
        }
        if self.compiler_command.is_empty() {
            return Err(Error::Config("compiler_command is empty".into()));
        }
        if self.thread_counts.is_empty() || self.thread_counts.contains(&0) {
            return Err(Error::Config("thread_counts must be non-empty and positive".into()));
        }
        Ok(())
    }

    pub fn run_timeout(&self) -> Duration {
        Duration::from_secs(self.run_timeout_secs)
    }

    pub fn compile_timeout(&self) -> Duration {
        Duration::from_secs(self.compile_timeout_secs)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunStatus {
    Ok,
    CompileFailed,
    Timeout,
    Crash,
    /// Harness validation reported a mismatch.
    Incorrect,
    /// No parallel region to measure.
    NoRegions,
    Failed,
}

/// Ground-truth ThreadSanitizer outcome of one candidate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TsanOutcomeRecord {
    pub candidate_id: String,
    pub problem_id: String,
    pub status: RunStatus,
    pub report: RaceReport,
    #[serde(default)]
    pub non_candidate: Vec<CodeLocation>,
    #[serde(default)]
    pub diagnostics: Vec<TsanDiagnostic>,
    #[serde(default)]
    pub warning_count: usize,
    /// Raw sanitizer output file, relative to the run directory.
    #[serde(default)]
    pub raw_path: Option<String>,
    pub stubbed: bool,
    #[serde(default)]
    pub detail: String,
}

impl Keyed for TsanOutcomeRecord {
    fn key(&self) -> String {
        self.candidate_id.clone()
    }
}

/// Correctness check plus Caliper profile of one candidate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaliperOutcomeRecord {
    pub candidate_id: String,
    pub problem_id: String,
    pub status: RunStatus,
    pub correct: Option<bool>,
    pub spans: Vec<RegionSpan>,
    pub profile: Option<CaliperProfile>,
    /// Measured seconds per region, the weights of the program-level mean.
    #[serde(default)]
    pub region_seconds: BTreeMap<String, f64>,
    pub stubbed: bool,
    #[serde(default)]
    pub detail: String,
}

impl Keyed for CaliperOutcomeRecord {
    fn key(&self) -> String {
        self.candidate_id.clone()
    }
}

impl CaliperOutcomeRecord {
    pub fn usable(&self) -> bool {
        self.status == RunStatus::Ok
            && self.correct == Some(true)
            && self.profile.as_ref().is_some_and(CaliperProfile::is_complete)
    }

    /// Duration-weighted mean work% over regions at `thread_count`.
    pub fn program_work(&self, thread_count: u32) -> Option<f64> {
        self.profile.as_ref()?.weighted_mean(thread_count, &self.region_seconds)
    }
}

/// Result of one sanitizer invocation series.
#[derive(Debug, Clone, PartialEq)]
pub struct TsanRun {
    pub raw: String,
    pub parse: TsanParse,
    pub status: RunStatus,
    pub detail: String,
}

/// Profile of every span at every thread count.
#[derive(Debug, Clone, PartialEq)]
pub struct ProfileRun {
    pub profile: CaliperProfile,
    pub region_seconds: BTreeMap<String, f64>,
}

/// Host compile/run backend: a real compiler or a deterministic stand-in.
pub trait ToolRunner: Send + Sync {
    /// Whether results come from real tool runs.
    fn is_live(&self) -> bool;

    fn profile(&self) -> &ToolchainProfile;

    /// Sanitizer build and `repeat_count` runs; build and run failures are
    /// reported through the status, not as errors.
    fn run_tsan(&self, bundle: &HarnessBundle, candidate: &CandidateCode, work_root: &Path) -> Result<TsanRun>;

    /// Harness validation of an unsanitized build.
    fn validate_correctness(&self, bundle: &HarnessBundle, candidate: &CandidateCode, work_root: &Path)
        -> Result<bool>;

    fn profile_candidate(
        &self,
        bundle: &HarnessBundle,
        candidate: &CandidateCode,
        spans: &[RegionSpan],
        thread_counts: &[u32],
        work_root: &Path,
    ) -> Result<ProfileRun>;

    /// Compiles `source` as the candidate; `Err(Compile)` carries the log.
    fn compile_check(&self, bundle: &HarnessBundle, source: &str, work_root: &Path) -> Result<()>;
}

/// Counting semaphore bounding concurrent runs of one kind.
pub(crate) struct Slots {
    free: Mutex<usize>,
    cv: Condvar,
}

impl Slots {
    pub(crate) fn new(n: usize) -> Self {
        Slots {
            free: Mutex::new(n.max(1)),
            cv: Condvar::new(),
        }
    }

    pub(crate) fn acquire(&self) -> SlotGuard<'_> {
        let mut free = self.free.lock().unwrap();
        while *free == 0 {
            free = self.cv.wait(free).unwrap();
        }
        *free -= 1;
        SlotGuard(self)
    }
}

pub(crate) struct SlotGuard<'a>(&'a Slots);

impl Drop for SlotGuard<'_> {
    fn drop(&mut self) {
        *self.0.free.lock().unwrap() += 1;
        self.0.cv.notify_one();
    }
}

/// Work percentages are stored as whole numbers, as the answer texts show them.
pub fn round_work(v: f64) -> f64 {
    v.round()
}
