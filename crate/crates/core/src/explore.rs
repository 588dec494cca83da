//! Breadth-first generation: seed variants, harnesses, candidate zoo.

use std::collections::{BTreeMap, BTreeSet};

use crate::gateway::{extract_code_block, extract_tagged_blocks, Gateway, Message, SamplingParams};
use crate::model::{CandidateCode, HarnessBundle, ProblemRecord, StrategyMode};
use crate::prompts::{HarnessAssets, Templates};
use crate::store::AuditEntry;
use crate::{Error, Result};

/// Name the reference prompt asks the model to define.
pub const REFERENCE_FN: &str = "reference";

/// Shared context for the generation calls of one run.
pub struct Generator<'a> {
    pub gateway: &'a Gateway,
    pub templates: &'a Templates,
    pub params: SamplingParams,
    /// Extra samples after a malformed response.
    pub max_resamples: u32,
}

#[derive(Debug, Clone)]
pub struct Generated<T> {
    pub items: Vec<T>,
    pub audit: Vec<AuditEntry>,
}

impl<T> Default for Generated<T> {
    fn default() -> Self {
        Generated {
            items: Vec::new(),
            audit: Vec::new(),
        }
    }
}

impl<'a> Generator<'a> {
    fn ask(&self, endpoint: &str, prompt: &str, sample: u32) -> Result<String> {
        self.gateway
            .complete_sample(endpoint, &[Message::user(prompt)], &self.params, sample)
    }

    /// `n` perturbations of a seed problem. Blocks keep their tag number as
    /// variant index; repeats of an earlier statement (or of the seed) are
    /// dropped and audited.
    pub fn generate_variants(&self, endpoint: &str, seed: &ProblemRecord, n: u32) -> Result<Generated<ProblemRecord>> {
        if seed.variant_index != 0 {
            return Err(Error::Config(format!("problem {} is not a seed", seed.id)));
        }
        if n == 0 {
            return Err(Error::Config("variant count must be at least 1".into()));
        }
        let needed = n.div_ceil(2) as usize;
        let prompt = self.templates.variants(&seed.statement, n);
        let mut last_err = String::new();
        for sample in 0..=self.max_resamples {
            let text = self.ask(endpoint, &prompt, sample)?;
            let blocks = match extract_tagged_blocks(&text, "variant") {
                Ok(b) => b,
                Err(e) => {
                    last_err = e.to_string();
                    continue;
                }
            };
            let parsed: Vec<(u32, &String)> = blocks
                .numbers
                .iter()
                .copied()
                .zip(&blocks.blocks)
                .filter(|(k, body)| *k >= 1 && *k <= n && !body.trim().is_empty())
                .collect();
            if parsed.len() < needed {
                last_err = format!("{} of {n} variants parsed", parsed.len());
                continue;
            }
            let mut out = Generated::default();
            let mut seen = BTreeSet::from([seed.dedupe_key()]);
            for (k, body) in parsed {
                let rec = ProblemRecord::new(&seed.domain, &seed.seed_id, k, body.trim())?;
                if seen.insert(rec.dedupe_key()) {
                    out.items.push(rec);
                } else {
                    out.audit.push(AuditEntry::new(
                        "explore",
                        format!("{}/{}/{k}", seed.domain, seed.seed_id),
                        "duplicate_variant",
                        "statement repeats an earlier one",
                    ));
                }
            }
            for k in (1..=n).filter(|k| !blocks.numbers.contains(k)) {
                out.audit.push(AuditEntry::new(
                    "explore",
                    format!("{}/{}/{k}", seed.domain, seed.seed_id),
                    "missing_variant",
                    "no block in response",
                ));
            }
            return Ok(out);
        }
        Err(Error::Generation(format!(
            "variants of {}/{}: {last_err}",
            seed.domain, seed.seed_id
        )))
    }

    /// Completes the reference prompt and extracts the signature of the
    /// reference function.
    pub fn generate_harness(
        &self,
        endpoint: &str,
        assets: &HarnessAssets,
        problem: &ProblemRecord,
    ) -> Result<HarnessBundle> {
        let prompt = self.templates.reference(assets, &problem.statement);
        let mut last = None;
        for sample in 0..=self.max_resamples {
            let text = self.ask(endpoint, &prompt, sample)?;
            let attempt = extract_code_block(&text, Some("cpp")).and_then(|code| {
                let signature = extract_signature(&code, REFERENCE_FN)?;
                Ok((code, signature))
            });
            match attempt {
                Ok((code, signature)) => {
                    return Ok(HarnessBundle {
                        problem_id: problem.id.clone(),
                        makefile: assets.makefile.clone(),
                        harness_source: assets.harness_cc.clone(),
                        reference_source: with_final_newline(code),
                        signature,
                    })
                }
                Err(e) => last = Some(e),
            }
        }
        Err(last.expect("at least one attempt"))
    }

    /// Up to `k` candidates from one endpoint in one mode. `seen` holds the
    /// dedupe keys of every candidate already kept for the problem.
    pub fn generate_candidates(
        &self,
        endpoint: &str,
        problem: &ProblemRecord,
        bundle: &HarnessBundle,
        mode: StrategyMode,
        k: u32,
        seen: &mut BTreeSet<String>,
    ) -> Result<Generated<CandidateCode>> {
        if k == 0 {
            return Err(Error::Config("k must be at least 1".into()));
        }
        let prompt = self.templates.candidates(
            mode,
            &bundle.makefile,
            &bundle.harness_source,
            &bundle.reference_source,
            &problem.statement,
            k,
        );
        let item = |idx: u32| format!("{}/{endpoint}/{}/{idx}", problem.id, mode.as_str());
        let mut last_err = String::new();
        for sample in 0..=self.max_resamples {
            let text = self.ask(endpoint, &prompt, sample)?;
            let blocks = match extract_tagged_blocks(&text, "implementation") {
                Ok(b) => b,
                Err(e) => {
                    last_err = e.to_string();
                    continue;
                }
            };
            let mut out = Generated::default();
            let mut parsed = 0;
            for (&idx, body) in blocks.numbers.iter().zip(&blocks.blocks) {
                if idx < 1 || idx > k {
                    continue;
                }
                let code = match extract_code_block(body, Some("cpp")) {
                    Ok(c) if !c.trim().is_empty() => c,
                    _ => {
                        out.audit
                            .push(AuditEntry::new("candidates", item(idx), "no_code_block", ""));
                        continue;
                    }
                };
                parsed += 1;
                let cand = CandidateCode::new(&problem.id, with_final_newline(code), endpoint, mode, idx)?;
                if seen.insert(cand.dedupe_key()) {
                    out.items.push(cand);
                } else {
                    out.audit.push(AuditEntry::new(
                        "candidates",
                        item(idx),
                        "duplicate_candidate",
                        "normalized source matches a kept candidate",
                    ));
                }
            }
            if parsed == 0 {
                last_err = "no implementation block held code".into();
                continue;
            }
            for idx in (1..=k).filter(|i| !blocks.numbers.contains(i)) {
                out.audit
                    .push(AuditEntry::new("candidates", item(idx), "missing_implementation", ""));
            }
            return Ok(out);
        }
        Err(Error::Generation(format!("candidates for {}: {last_err}", item(0))))
    }
}

fn with_final_newline(mut s: String) -> String {
    if !s.ends_with('\n') {
        s.push('\n');
    }
    s
}

/// Upper bound on the candidate count of a run, and the causes of any
/// shortfall.
#[derive(Debug, Clone, Default, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct FanOut {
    pub domains: usize,
    pub seeds_per_domain: usize,
    pub variants_per_seed: usize,
    pub endpoints: usize,
    pub k: usize,
    pub modes: usize,
    pub actual: usize,
    pub shortfall: BTreeMap<String, usize>,
}

impl FanOut {
    /// Seeds count as problems too, hence `V + 1`.
    pub fn maximum(&self) -> usize {
        self.domains * self.seeds_per_domain * (self.variants_per_seed + 1) * self.endpoints * self.k * self.modes
    }

    pub fn unexplained(&self) -> usize {
        self.maximum()
            .saturating_sub(self.actual)
            .saturating_sub(self.shortfall.values().sum())
    }
}

fn strip_comments(code: &str) -> String {
    let mut out = String::with_capacity(code.len());
    let b = code.as_bytes();
    let mut i = 0;
    while i < b.len() {
        if b[i..].starts_with(b"//") {
            while i < b.len() && b[i] != b'\n' {
                i += 1;
            }
        } else if b[i..].starts_with(b"/*") {
            i += 2;
            while i < b.len() && !b[i..].starts_with(b"*/") {
                i += 1;
            }
            i = (i + 2).min(b.len());
            out.push(' ');
        } else {
            out.push(b[i] as char);
            i += 1;
        }
    }
    out
}

fn is_ident(c: char) -> bool {
    c.is_ascii_alphanumeric() || c == '_'
}

const TYPE_WORDS: &[&str] = &[
    "int", "long", "short", "char", "double", "float", "bool", "unsigned", "signed", "void", "const", "auto", "size_t",
    "volatile",
];

/// Parameter type with its name dropped: `const std::vector<double>& v`
/// becomes `const vector<double>&`.
fn param_type(param: &str) -> String {
    let p = param.split('=').next().unwrap_or("").trim();
    let p = p.replace("std::", "");
    let p = p.trim();
    let cut = p.trim_end_matches(is_ident);
    let last = &p[cut.len()..];
    let keep_whole = cut.trim().is_empty()
        || TYPE_WORDS.contains(&last)
        || cut.trim_end().ends_with("::")
        || cut.trim_end().ends_with(',');
    let ty = if keep_whole { p } else { cut.trim_end() };
    // tighten "vector<double> &" to "vector<double>&"
    let mut ty = ty.split_whitespace().collect::<Vec<_>>().join(" ");
    for sym in ["&", "*"] {
        ty = ty.replace(&format!(" {sym}"), sym);
    }
    ty
}

fn split_top_level(params: &str) -> Vec<&str> {
    let mut out = Vec::new();
    let mut depth = 0i32;
    let mut start = 0;
    for (i, c) in params.char_indices() {
        match c {
            '<' | '(' | '[' | '{' => depth += 1,
            '>' | ')' | ']' | '}' => depth -= 1,
            ',' if depth == 0 => {
                out.push(&params[start..i]);
                start = i + 1;
            }
            _ => {}
        }
    }
    out.push(&params[start..]);
    out.into_iter()
        .filter(|p| !p.trim().is_empty() && p.trim() != "void")
        .collect()
}

/// Normalized signature of the first definition of `name` in `code`:
/// return type, name and parameter types, with `std::` and parameter names
/// removed.
pub fn extract_signature(code: &str, name: &str) -> Result<String> {
    let code = strip_comments(code);
    let sig_err = |detail: &str| Error::Signature {
        name: name.to_owned(),
        detail: detail.to_owned(),
    };
    let mut from = 0;
    while let Some(off) = code[from..].find(name) {
        let at = from + off;
        from = at + name.len();
        let before_ok = code[..at].chars().next_back().is_none_or(|c| !is_ident(c));
        let after = &code[at + name.len()..];
        let after_trim = after.trim_start();
        if !before_ok || !after_trim.starts_with('(') || after.chars().next().is_some_and(is_ident) {
            continue;
        }
        let open = at + name.len() + (after.len() - after_trim.len());
        let mut depth = 0;
        let mut close = None;
        for (i, c) in code[open..].char_indices() {
            match c {
                '(' => depth += 1,
                ')' => {
                    depth -= 1;
                    if depth == 0 {
                        close = Some(open + i);
                        break;
                    }
                }
                _ => {}
            }
        }
        let Some(close) = close else { continue };
        // a definition: the parameter list is followed by a body
        let tail = code[close + 1..].trim_start();
        let tail = tail.strip_prefix("const").map(str::trim_start).unwrap_or(tail);
        let tail = tail.strip_prefix("noexcept").map(str::trim_start).unwrap_or(tail);
        if !tail.starts_with('{') {
            continue;
        }
        let line_start = code[..at].rfind([';', '}', '{']).map_or(0, |i| i + 1);
        let ret_region = &code[line_start..at];
        let ret: Vec<&str> = ret_region
            .lines()
            .filter(|l| !l.trim_start().starts_with('#'))
            .flat_map(str::split_whitespace)
            .filter(|w| !matches!(*w, "static" | "inline" | "extern" | "constexpr"))
            .collect();
        if ret.is_empty() {
            // a call, not a definition
            continue;
        }
        let ret = ret.join(" ").replace("std::", "");
        let params: Vec<String> = split_top_level(&code[open + 1..close])
            .into_iter()
            .map(param_type)
            .collect();
        return Ok(format!("{ret} {name}({})", params.join(", ")));
    }
    Err(sig_err("no function definition with that name"))
}
