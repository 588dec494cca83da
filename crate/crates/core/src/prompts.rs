//! Prompt templates and the single-pass placeholder renderer.
//!
//! The synthesis templates ship verbatim under `assets/prompts`; any file of
//! the same name in an override directory replaces the built-in copy.

use std::collections::BTreeMap;
use std::path::Path;

use crate::model::{render_caliper_pair_answer, render_race_answer, RaceReport, StrategyMode};
use crate::{Error, Result};

pub const EXECUTION_MODEL: &str = "OpenMP";

/// First line of every race answer block.
pub const RACE_ANSWER_PREFIX: &str = "Here is a list of data races that ThreadSanitizer will catch:";

const BUILTIN: &[(&str, &str)] = &[
    ("variants", include_str!("../assets/prompts/variants.txt")),
    ("reference", include_str!("../assets/prompts/reference.txt")),
    ("candidates_racy", include_str!("../assets/prompts/candidates_racy.txt")),
    (
        "candidates_inefficient",
        include_str!("../assets/prompts/candidates_inefficient.txt"),
    ),
    ("cot_race", include_str!("../assets/prompts/cot_race.txt")),
    ("cot_caliper", include_str!("../assets/prompts/cot_caliper.txt")),
    ("regions", include_str!("../assets/prompts/regions.txt")),
    (
        "world_model_race",
        include_str!("../assets/prompts/world_model_race.txt"),
    ),
    (
        "world_model_caliper",
        include_str!("../assets/prompts/world_model_caliper.txt"),
    ),
    ("self_feedback", include_str!("../assets/prompts/self_feedback.txt")),
    ("edit", include_str!("../assets/prompts/edit.txt")),
    ("apply", include_str!("../assets/prompts/apply.txt")),
    ("apply_repair", include_str!("../assets/prompts/apply_repair.txt")),
];

/// Replaces `{name}` placeholders whose name is in `vars`; `{{` and `}}`
/// become single braces. Anything else, including unknown `{...}` runs, is
/// copied through, and substituted values are never re-scanned.
pub fn render(template: &str, vars: &[(&str, &str)]) -> String {
    let mut out = String::with_capacity(template.len());
    let mut rest = template;
    while let Some(pos) = rest.find(['{', '}']) {
        out.push_str(&rest[..pos]);
        let tail = &rest[pos..];
        if tail.starts_with("{{") || tail.starts_with("}}") {
            out.push_str(&tail[..1]);
            rest = &tail[2..];
            continue;
        }
        if tail.starts_with('{') {
            if let Some(end) = tail.find('}') {
                let name = &tail[1..end];
                if let Some((_, value)) = vars.iter().find(|(k, _)| *k == name) {
                    out.push_str(value);
                    rest = &tail[end + 1..];
                    continue;
                }
            }
        }
        out.push_str(&tail[..1]);
        rest = &tail[1..];
    }
    out.push_str(rest);
    out
}

/// Body of the first answer block in a rendered prompt, trimmed: the text a
/// teacher is asked to copy verbatim.
pub fn answer_section(rendered: &str) -> Option<String> {
    let open = rendered.find("\n<answer>\n")? + "\n<answer>\n".len();
    let close = rendered[open..].find("\n</answer>")? + open;
    Some(rendered[open..close].trim().to_owned())
}

/// Prefixes each line with its 1-based number, as the region prompt expects.
pub fn number_lines(code: &str) -> String {
    code.lines()
        .enumerate()
        .map(|(i, line)| format!("{}: {}", i + 1, line))
        .collect::<Vec<_>>()
        .join("\n")
}

#[derive(Debug, Clone)]
pub struct Templates {
    map: BTreeMap<String, String>,
}

impl Default for Templates {
    fn default() -> Self {
        Self::builtin()
    }
}

impl Templates {
    pub fn builtin() -> Self {
        let mut map = BTreeMap::new();
        for (name, text) in BUILTIN {
            map.insert((*name).to_owned(), prepare(name, text));
        }
        Templates { map }
    }

    /// Built-ins with every `<name>.txt` in `dir` layered on top.
    pub fn with_overrides(dir: &Path) -> Result<Self> {
        let mut t = Self::builtin();
        for (name, _) in BUILTIN {
            let path = dir.join(format!("{name}.txt"));
            if path.exists() {
                let text = std::fs::read_to_string(&path)?;
                t.map.insert((*name).to_owned(), prepare(name, &text));
            }
        }
        Ok(t)
    }

    pub fn get(&self, name: &str) -> Result<&str> {
        self.map
            .get(name)
            .map(String::as_str)
            .ok_or_else(|| Error::Config(format!("no prompt template `{name}`")))
    }

    fn fill(&self, name: &str, vars: &[(&str, &str)]) -> String {
        render(self.get(name).expect("built-in template"), vars)
    }

    pub fn variants(&self, problem: &str, num_variants: u32) -> String {
        let n = num_variants.to_string();
        self.fill("variants", &[("problem", problem), ("num_variants", &n)])
    }

    pub fn reference(&self, assets: &HarnessAssets, problem: &str) -> String {
        self.fill(
            "reference",
            &[
                ("Makefile", assets.makefile.trim_end()),
                ("harness_cc", assets.harness_cc.trim_end()),
                ("reference_prompt_cc", assets.reference_prompt_cc.trim_end()),
                ("problem", problem),
            ],
        )
    }

    pub fn candidates(
        &self,
        mode: StrategyMode,
        makefile: &str,
        harness_cc: &str,
        reference_cc: &str,
        problem: &str,
        k: u32,
    ) -> String {
        let name = match mode {
            StrategyMode::Racy => "candidates_racy",
            StrategyMode::Inefficient => "candidates_inefficient",
        };
        let k = k.to_string();
        self.fill(
            name,
            &[
                ("Makefile", makefile.trim_end()),
                ("harness_cc", harness_cc.trim_end()),
                ("reference_cc", reference_cc.trim_end()),
                ("problem", problem),
                ("K", &k),
            ],
        )
    }

    /// Hindsight race prompt and the answer text the teacher must reproduce.
    pub fn race_cot(&self, code: &str, report: &RaceReport) -> (String, String) {
        let outcome = render_race_answer(report);
        let prompt = self.fill(
            "cot_race",
            &[
                ("execution_model", EXECUTION_MODEL),
                ("generated_cc", code.trim_end()),
                ("race_outcome", &outcome),
            ],
        );
        let expected = answer_section(&prompt).unwrap_or_else(|| race_answer_text(report));
        (prompt, expected)
    }

    /// Hindsight pair prompt and its expected answer text.
    pub fn caliper_cot(
        &self,
        code_a: &str,
        code_b: &str,
        measurements_a: &str,
        measurements_b: &str,
    ) -> (String, String) {
        let prompt = self.fill(
            "cot_caliper",
            &[
                ("generated_cc_a", code_a.trim_end()),
                ("generated_cc_b", code_b.trim_end()),
                ("measurements_a", measurements_a),
                ("measurements_b", measurements_b),
            ],
        );
        let expected =
            answer_section(&prompt).unwrap_or_else(|| render_caliper_pair_answer(measurements_a, measurements_b));
        (prompt, expected)
    }

    pub fn regions(&self, code: &str) -> String {
        self.fill("regions", &[("generated_cc_with_line_no", &number_lines(code))])
    }

    pub fn world_model_race(&self, code: &str) -> String {
        self.fill(
            "world_model_race",
            &[("execution_model", EXECUTION_MODEL), ("generated_cc", code.trim_end())],
        )
    }

    pub fn world_model_caliper(&self, code_a: &str, code_b: &str, thread_counts: &[u32]) -> String {
        let tcs = join_counts(thread_counts);
        self.fill(
            "world_model_caliper",
            &[
                ("generated_cc_a", code_a.trim_end()),
                ("generated_cc_b", code_b.trim_end()),
                ("thread_counts", &tcs),
            ],
        )
    }

    pub fn self_feedback(&self, code: &str) -> String {
        self.fill(
            "self_feedback",
            &[("execution_model", EXECUTION_MODEL), ("code", code.trim_end())],
        )
    }

    pub fn edit(&self, code: &str, feedback: &str) -> String {
        self.fill(
            "edit",
            &[
                ("execution_model", EXECUTION_MODEL),
                ("code", code.trim_end()),
                ("feedback", feedback),
            ],
        )
    }

    pub fn apply(&self, code: &str, edit: &str) -> String {
        self.fill(
            "apply",
            &[
                ("execution_model", EXECUTION_MODEL),
                ("code", code.trim_end()),
                ("edit", edit),
            ],
        )
    }

    pub fn apply_repair(&self, compile_log: &str) -> String {
        self.fill("apply_repair", &[("compile_log", compile_log.trim_end())])
    }
}

/// "4, 16, 64 and 128"
fn join_counts(tcs: &[u32]) -> String {
    let parts: Vec<String> = tcs.iter().map(u32::to_string).collect();
    match parts.len() {
        0 => String::new(),
        1 => parts[0].clone(),
        n => format!("{} and {}", parts[..n - 1].join(", "), parts[n - 1]),
    }
}

/// The race template writes its answer newlines as `\n` escapes.
fn prepare(name: &str, text: &str) -> String {
    if name == "cot_race" {
        text.replace("\\n", "\n")
    } else {
        text.to_owned()
    }
}

/// Answer text for a report outside any template.
pub fn race_answer_text(report: &RaceReport) -> String {
    format!("{RACE_ANSWER_PREFIX}\n\n{}", render_race_answer(report))
}

/// Build file, driver and reference stub handed to the reference prompt.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HarnessAssets {
    pub makefile: String,
    pub harness_cc: String,
    pub reference_prompt_cc: String,
}

impl Default for HarnessAssets {
    fn default() -> Self {
        HarnessAssets {
            makefile: include_str!("../assets/harness/Makefile").to_owned(),
            harness_cc: include_str!("../assets/harness/harness.cc").to_owned(),
            reference_prompt_cc: include_str!("../assets/harness/reference_prompt.cc").to_owned(),
        }
    }
}

impl HarnessAssets {
    pub fn with_overrides(dir: &Path) -> Result<Self> {
        let mut a = Self::default();
        for (file, slot) in [
            ("Makefile", &mut a.makefile),
            ("harness.cc", &mut a.harness_cc),
            ("reference_prompt.cc", &mut a.reference_prompt_cc),
        ] {
            let path = dir.join(file);
            if path.exists() {
                *slot = std::fs::read_to_string(&path)?;
            }
        }
        Ok(a)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::canonicalize_race_report;
    use crate::model::{CodeLocation, RaceFinding, RaceType};

    #[test]
    fn render_only_known_names() {
        let out = render("<v_{n}>{UNKNOWN THING} {{'a': 1}} {n}", &[("n", "3")]);
        assert_eq!(out, "<v_3>{UNKNOWN THING} {'a': 1} 3");
    }

    #[test]
    fn values_are_not_rescanned() {
        assert_eq!(render("{a}", &[("a", "{b}"), ("b", "x")]), "{b}");
    }

    #[test]
    fn variants_prompt_fills_counts() {
        let p = Templates::builtin().variants("Compute a dot product.", 20);
        assert!(p.contains("propose 20 parallel programming problems"));
        assert!(p.contains("<variant_20>"));
        assert!(p.contains("{PERTURBED PROBLEM STATEMENT 20 GOES HERE.}"));
        assert!(!p.contains("{num_variants}"));
    }

    #[test]
    fn region_prompt_uses_single_braces() {
        let p = Templates::builtin().regions("int a;\nint b;");
        assert!(p.contains("1: int a;\n2: int b;"));
        assert!(p.contains("{'start': integer, 'end': integer}"));
        assert!(!p.contains("{{"));
    }

    #[test]
    fn race_cot_expected_answer_is_embedded_twice() {
        let report = canonicalize_race_report(vec![RaceFinding::new(
            RaceType::WriteWrite,
            vec![CodeLocation::new("generated.cc", 14)],
        )]);
        let (prompt, expected) = Templates::builtin().race_cot("int x;", &report);
        assert!(expected.starts_with(RACE_ANSWER_PREFIX));
        assert!(expected.ends_with(&render_race_answer(&report)));
        assert_eq!(prompt.matches(&expected).count(), 2);
        assert!(!prompt.contains("\\n"));
    }

    #[test]
    fn caliper_cot_expected_answer() {
        let (prompt, expected) = Templates::builtin().caliper_cot("a", "b", "MA", "MB");
        assert_eq!(expected, render_caliper_pair_answer("MA", "MB"));
        assert_eq!(prompt.matches(&expected).count(), 2);
    }

    #[test]
    fn counts_joined() {
        assert_eq!(join_counts(&[4, 16, 64, 128]), "4, 16, 64 and 128");
        assert_eq!(join_counts(&[4]), "4");
    }
}
