//! Race-fixing loop: feedback from an oracle, the actor itself or a world
//! model; an edit proposal; its application; a final sanitizer verdict.

use std::path::PathBuf;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::eval::{pct, pct_cell, TextTable};
use crate::gateway::{extract_code_block, Gateway, Message, SamplingParams};
use crate::model::{CandidateCode, HarnessBundle, RaceReport, StrategyMode};
use crate::prompts::{race_answer_text, Templates};
use crate::toolchain::{RunStatus, ToolRunner};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeedbackSource {
    Oracle,
    #[serde(rename = "self")]
    SelfReview,
    WorldModel,
}

impl FeedbackSource {
    pub fn as_str(self) -> &'static str {
        match self {
            FeedbackSource::Oracle => "oracle",
            FeedbackSource::SelfReview => "self",
            FeedbackSource::WorldModel => "world_model",
        }
    }
}

impl std::str::FromStr for FeedbackSource {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "oracle" => Ok(FeedbackSource::Oracle),
            "self" => Ok(FeedbackSource::SelfReview),
            "world_model" | "world-model" => Ok(FeedbackSource::WorldModel),
            other => Err(Error::Config(format!("unknown feedback source `{other}`"))),
        }
    }
}

/// Sanitizer verdicts and compile checks for code under repair.
pub trait RaceOracle: Sync {
    fn report(&self, item: &FixItem, code: &str) -> Result<RaceReport>;
    fn compile_check(&self, item: &FixItem, code: &str) -> Result<()>;
}

/// Oracle backed by a toolchain (live or stub) and the item's harness.
pub struct ToolOracle<'a> {
    pub runner: &'a dyn ToolRunner,
    pub work_root: PathBuf,
}

impl ToolOracle<'_> {
    fn bundle<'i>(&self, item: &'i FixItem) -> Result<&'i HarnessBundle> {
        item.bundle
            .as_ref()
            .ok_or_else(|| Error::Config(format!("item {} has no harness", item.item_id)))
    }
}

impl RaceOracle for ToolOracle<'_> {
    fn report(&self, item: &FixItem, code: &str) -> Result<RaceReport> {
        let bundle = self.bundle(item)?;
        let cand = CandidateCode::new(&bundle.problem_id, code, "fix", StrategyMode::Racy, 0)?;
        let run = self.runner.run_tsan(bundle, &cand, &self.work_root)?;
        match run.status {
            RunStatus::Ok => Ok(run.parse.report),
            RunStatus::CompileFailed => Err(Error::Compile { log: run.detail }),
            other => Err(Error::RuntimeCrash {
                status: format!("{other:?}"),
                output: run.detail,
            }),
        }
    }

    fn compile_check(&self, item: &FixItem, code: &str) -> Result<()> {
        self.runner.compile_check(self.bundle(item)?, code, &self.work_root)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FixItem {
    pub item_id: String,
    pub source: String,
    #[serde(default)]
    pub bundle: Option<HarnessBundle>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PassTranscript {
    pub feedback: String,
    pub edit: String,
    pub applied_code: String,
    pub apply_attempts: u32,
    pub fix_failed: bool,
    #[serde(default)]
    pub note: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FixResult {
    pub item_id: String,
    pub actor: String,
    pub source: FeedbackSource,
    pub passes: Vec<PassTranscript>,
    pub final_code: String,
    /// `None` when no definitive verdict was reached.
    pub race_free: Option<bool>,
    #[serde(default)]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FixReport {
    pub actor: String,
    pub source: FeedbackSource,
    pub results: Vec<FixResult>,
}

impl FixReport {
    pub fn definitive(&self) -> usize {
        self.results.iter().filter(|r| r.race_free.is_some()).count()
    }

    pub fn race_free_count(&self) -> usize {
        self.results.iter().filter(|r| r.race_free == Some(true)).count()
    }

    pub fn indeterminate(&self) -> usize {
        self.results.len() - self.definitive()
    }

    pub fn race_free_pct(&self) -> Option<f64> {
        pct(self.race_free_count(), self.definitive())
    }
}

pub struct FixAgent<'a> {
    pub gateway: &'a Gateway,
    pub templates: &'a Templates,
    pub oracle: &'a dyn RaceOracle,
    pub actor: &'a str,
    /// Required for the world-model feedback source only.
    pub world_model: Option<&'a str>,
    pub params: SamplingParams,
}

/// Outcome of [`FixAgent::apply_edit`].
#[derive(Debug, Clone, PartialEq)]
pub struct Applied {
    pub code: String,
    pub attempts: u32,
    pub fix_failed: bool,
    pub note: String,
}

impl FixAgent<'_> {
    fn ask(&self, endpoint: &str, messages: &[Message], sample: u32) -> Result<String> {
        self.gateway.complete_sample(endpoint, messages, &self.params, sample)
    }

    pub fn get_feedback(&self, item: &FixItem, code: &str, source: FeedbackSource) -> Result<String> {
        match source {
            FeedbackSource::Oracle => Ok(race_answer_text(&self.oracle.report(item, code)?)),
            FeedbackSource::SelfReview => self.ask(self.actor, &[Message::user(self.templates.self_feedback(code))], 0),
            FeedbackSource::WorldModel => {
                let wm = self
                    .world_model
                    .ok_or_else(|| Error::Config("world-model feedback needs a world_model endpoint".into()))?;
                // reasoning and answer both go to the actor
                let reply = self.ask(wm, &[Message::user(self.templates.world_model_race(code))], 0)?;
                Ok(reply.trim().to_owned())
            }
        }
    }

    pub fn propose_edit(&self, code: &str, feedback: &str) -> Result<String> {
        self.ask(self.actor, &[Message::user(self.templates.edit(code, feedback))], 0)
    }

    /// At most two apply calls: a missing code block gets a fresh sample,
    /// a compile failure gets one repair turn. Otherwise the original code
    /// is kept and the pass is marked failed.
    pub fn apply_edit(&self, item: &FixItem, code: &str, edit: &str) -> Result<Applied> {
        let first = vec![Message::user(self.templates.apply(code, edit))];
        let reply = self.ask(self.actor, &first, 0)?;
        let failed = |attempts, note: String| Applied {
            code: code.to_owned(),
            attempts,
            fix_failed: true,
            note,
        };
        let candidate = match extract_code_block(&reply, Some("cpp")) {
            Ok(c) => c,
            Err(_) => {
                let retry = self.ask(self.actor, &first, 1)?;
                return Ok(match extract_code_block(&retry, Some("cpp")) {
                    Ok(c) => match self.oracle.compile_check(item, &c) {
                        Ok(()) => Applied {
                            code: with_newline(c),
                            attempts: 2,
                            fix_failed: false,
                            note: "code block on retry".into(),
                        },
                        Err(e) => failed(2, format!("retry did not compile: {e}")),
                    },
                    Err(_) => failed(2, "no code block".into()),
                });
            }
        };
        match self.oracle.compile_check(item, &candidate) {
            Ok(()) => Ok(Applied {
                code: with_newline(candidate),
                attempts: 1,
                fix_failed: false,
                note: String::new(),
            }),
            Err(Error::Compile { log }) => {
                let mut repair = first.clone();
                repair.push(Message::assistant(reply));
                repair.push(Message::user(self.templates.apply_repair(&log)));
                let again = self.ask(self.actor, &repair, 0)?;
                match extract_code_block(&again, Some("cpp")) {
                    Ok(c) if self.oracle.compile_check(item, &c).is_ok() => Ok(Applied {
                        code: with_newline(c),
                        attempts: 2,
                        fix_failed: false,
                        note: "repaired after compile failure".into(),
                    }),
                    _ => Ok(failed(2, "repair did not compile".into())),
                }
            }
            Err(e) => Err(e),
        }
    }

    fn run_item(&self, item: &FixItem, source: FeedbackSource, passes: u32) -> FixResult {
        let mut code = item.source.clone();
        let mut transcripts = Vec::new();
        let mut result = FixResult {
            item_id: item.item_id.clone(),
            actor: self.actor.to_owned(),
            source,
            passes: Vec::new(),
            final_code: String::new(),
            race_free: None,
            error: None,
        };
        for _ in 0..passes {
            let step = (|| -> Result<PassTranscript> {
                let feedback = self.get_feedback(item, &code, source)?;
                let edit = self.propose_edit(&code, &feedback)?;
                let applied = self.apply_edit(item, &code, &edit)?;
                Ok(PassTranscript {
                    feedback,
                    edit,
                    applied_code: applied.code,
                    apply_attempts: applied.attempts,
                    fix_failed: applied.fix_failed,
                    note: applied.note,
                })
            })();
            match step {
                Ok(t) => {
                    code = t.applied_code.clone();
                    transcripts.push(t);
                }
                Err(e) => {
                    result.error = Some(e.to_string());
                    break;
                }
            }
        }
        result.passes = transcripts;
        result.final_code = code.clone();
        if result.error.is_none() {
            match self.oracle.report(item, &code) {
                Ok(r) => result.race_free = Some(r.is_race_free()),
                Err(e) => result.error = Some(format!("verdict: {e}")),
            }
        }
        result
    }

    pub fn fix_loop(&self, items: &[FixItem], source: FeedbackSource, passes: u32) -> Result<FixReport> {
        if passes == 0 {
            return Err(Error::Config("passes must be at least 1".into()));
        }
        self.gateway.endpoint(self.actor)?;
        if source == FeedbackSource::WorldModel {
            let wm = self
                .world_model
                .ok_or_else(|| Error::Config("world-model feedback needs a world_model endpoint".into()))?;
            self.gateway.endpoint(wm)?;
        }
        let results = items.par_iter().map(|it| self.run_item(it, source, passes)).collect();
        Ok(FixReport {
            actor: self.actor.to_owned(),
            source,
            results,
        })
    }
}

fn with_newline(mut s: String) -> String {
    if !s.ends_with('\n') {
        s.push('\n');
    }
    s
}

/// Actor rows by feedback-source columns of race-free percentages.
pub fn fix_grid(reports: &[FixReport]) -> TextTable {
    let sources = [
        FeedbackSource::SelfReview,
        FeedbackSource::Oracle,
        FeedbackSource::WorldModel,
    ];
    let mut actors: Vec<&str> = reports.iter().map(|r| r.actor.as_str()).collect();
    actors.dedup();
    actors.sort();
    actors.dedup();
    let mut headers = vec!["actor"];
    headers.extend(sources.iter().map(|s| s.as_str()));
    let mut t = TextTable::new("Race-free after fixing (%)", &headers);
    for actor in actors {
        let mut row = vec![actor.to_owned()];
        for s in sources {
            row.push(
                reports
                    .iter()
                    .find(|r| r.actor == actor && r.source == s)
                    .map_or("-".to_owned(), |r| pct_cell(r.race_free_count(), r.definitive())),
            );
        }
        t.push(row);
    }
    t
}
