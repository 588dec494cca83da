//! Run configuration: one TOML file with `${VAR}` interpolation.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use once_cell::sync::Lazy;
use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::gateway::{ModelEndpoint, SamplingParams};
use crate::model::StrategyMode;
use crate::toolchain::ToolchainProfile;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Config {
    pub explore: ExploreConfig,
    pub endpoints: Vec<ModelEndpoint>,
    pub roles: Roles,
    pub sampling: SamplingConfig,
    pub toolchain: ToolchainProfile,
    pub cot: CotConfig,
    pub dataset: DatasetConfig,
    pub eval: EvalConfig,
    /// Directory whose `<name>.txt` files replace built-in prompt templates.
    pub prompts_dir: Option<PathBuf>,
    /// Directory holding replacement Makefile / harness.cc / reference_prompt.cc.
    pub harness_dir: Option<PathBuf>,
    /// Bounded worker pool size for item-level parallelism.
    pub workers: usize,
    /// Extra samples after a malformed generation.
    pub max_resamples: u32,
    pub chars_per_token: f64,
}

impl Default for Config {
    fn default() -> Self {
        Config {
            explore: ExploreConfig::default(),
            endpoints: Vec::new(),
            roles: Roles::default(),
            sampling: SamplingConfig::default(),
            toolchain: ToolchainProfile::default(),
            cot: CotConfig::default(),
            dataset: DatasetConfig::default(),
            eval: EvalConfig::default(),
            prompts_dir: None,
            harness_dir: None,
            workers: 4,
            max_resamples: 3,
            chars_per_token: 4.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExploreConfig {
    /// Seeds file; the built-in stand-in list when unset.
    pub seeds_file: Option<PathBuf>,
    /// Restrict to these domains (all when empty).
    pub domains: Vec<String>,
    /// Seeds per domain (all when unset).
    pub seeds_per_domain: Option<usize>,
    pub variants_per_seed: u32,
    pub candidates_per_prompt: u32,
    pub modes: Vec<StrategyMode>,
}

impl Default for ExploreConfig {
    fn default() -> Self {
        ExploreConfig {
            seeds_file: None,
            domains: Vec::new(),
            seeds_per_domain: None,
            variants_per_seed: 20,
            candidates_per_prompt: 4,
            modes: vec![StrategyMode::Racy, StrategyMode::Inefficient],
        }
    }
}

/// Which endpoint plays which part.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Roles {
    /// Variants and harnesses.
    pub generator: Option<String>,
    /// Candidate zoo; every endpoint when empty.
    pub candidate_models: Vec<String>,
    pub teacher: Option<String>,
    /// Region identification; the pragma scan alone when unset.
    pub regions: Option<String>,
    pub world_model: Option<String>,
    pub actor: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SamplingConfig {
    pub teacher: SamplingParams,
    pub candidates: SamplingParams,
    pub evaluation: SamplingParams,
    pub default: SamplingParams,
}

impl Default for SamplingConfig {
    fn default() -> Self {
        SamplingConfig {
            teacher: SamplingParams::teacher(),
            candidates: SamplingParams::candidates(),
            evaluation: SamplingParams::evaluation(),
            default: SamplingParams::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CotConfig {
    pub min_think_tokens: usize,
    pub max_attempts: u32,
    pub accepted_per_item: u32,
    pub leakage_phrases: Vec<String>,
    /// Ordered pairs per problem; unlimited when unset.
    pub pairing_budget: Option<usize>,
    pub seed: u64,
}

impl Default for CotConfig {
    fn default() -> Self {
        CotConfig {
            min_think_tokens: 200,
            max_attempts: 4,
            accepted_per_item: 1,
            leakage_phrases: crate::cot::DEFAULT_LEAKAGE_PHRASES
                .iter()
                .map(|s| s.to_string())
                .collect(),
            pairing_budget: None,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DatasetConfig {
    pub max_seq_tokens: usize,
    pub val_fraction: f64,
    pub split_seed: String,
    pub subsample_targets: Vec<usize>,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            max_seq_tokens: 16384,
            val_fraction: 0.05,
            split_seed: "split-v1".into(),
            subsample_targets: vec![6000, 13000, 27000],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub n_samples: u32,
    pub tie_tolerance: f64,
    pub bucket_edges: Vec<f64>,
    pub thread_counts: Vec<u32>,
    /// Parameter counts per endpoint name, for FLOPs estimates.
    pub param_counts: BTreeMap<String, f64>,
    pub flops: crate::eval::FlopsFormula,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            n_samples: 16,
            tie_tolerance: 1.0,
            bucket_edges: vec![0.0, 10.0, 20.0, 30.0, 40.0],
            thread_counts: vec![4, 16, 64],
            param_counts: BTreeMap::new(),
            flops: crate::eval::FlopsFormula::default(),
        }
    }
}

static VAR: Lazy<Regex> = Lazy::new(|| Regex::new(r"\$\{([A-Za-z_][A-Za-z0-9_]*)(?::-([^}]*))?\}").unwrap());

/// Replaces `${NAME}` and `${NAME:-default}` with environment values.
pub fn interpolate_env(text: &str, lookup: impl Fn(&str) -> Option<String>) -> Result<String> {
    let mut missing = None;
    let out = VAR.replace_all(text, |caps: &regex::Captures<'_>| match lookup(&caps[1]) {
        Some(v) => v,
        None => match caps.get(2) {
            Some(d) => d.as_str().to_owned(),
            None => {
                missing.get_or_insert_with(|| caps[1].to_owned());
                String::new()
            }
        },
    });
    match missing {
        Some(name) => Err(Error::Config(format!("environment variable `{name}` is not set"))),
        None => Ok(out.into_owned()),
    }
}

impl Config {
    pub fn from_toml(text: &str) -> Result<Self> {
        let text = interpolate_env(text, |k| std::env::var(k).ok())?;
        let cfg: Config = toml::from_str(&text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads `path`; relative paths inside are resolved against its directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text =
            std::fs::read_to_string(path).map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        let mut cfg = Self::from_toml(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        for p in [&mut cfg.prompts_dir, &mut cfg.harness_dir, &mut cfg.explore.seeds_file] {
            if let Some(rel) = p.as_ref().filter(|p| p.is_relative()) {
                *p = Some(base.join(rel));
            }
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let mut names = std::collections::BTreeSet::new();
        for ep in &self.endpoints {
            if !names.insert(ep.name.as_str()) {
                return Err(Error::Config(format!("duplicate endpoint name `{}`", ep.name)));
            }
        }
        for p in [
            &self.sampling.teacher,
            &self.sampling.candidates,
            &self.sampling.evaluation,
            &self.sampling.default,
        ] {
            p.validate()?;
        }
        self.toolchain.validate()?;
        if !(0.0..1.0).contains(&self.dataset.val_fraction) {
            return Err(Error::Config("val_fraction must be in [0, 1)".into()));
        }
        if self.explore.variants_per_seed == 0 || self.explore.candidates_per_prompt == 0 {
            return Err(Error::Config(
                "variants_per_seed and candidates_per_prompt must be positive".into(),
            ));
        }
        if self.eval.n_samples == 0 {
            return Err(Error::Config("eval.n_samples must be positive".into()));
        }
        if self.workers == 0 || !(self.chars_per_token > 0.0) {
            return Err(Error::Config("workers and chars_per_token must be positive".into()));
        }
        if self.eval.bucket_edges.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config("bucket_edges must ascend".into()));
        }
        Ok(())
    }

    /// Endpoint named by a role, or the first configured endpoint.
    pub fn role_or_first(&self, role: &Option<String>) -> Result<String> {
        role.clone()
            .or_else(|| self.endpoints.first().map(|e| e.name.clone()))
            .ok_or_else(|| Error::Config("no endpoints configured".into()))
    }

    pub fn candidate_models(&self) -> Vec<String> {
        if self.roles.candidate_models.is_empty() {
            self.endpoints.iter().map(|e| e.name.clone()).collect()
        } else {
            self.roles.candidate_models.clone()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Seed {
    pub domain: String,
    pub seed_id: String,
    pub statement: String,
}

#[derive(Deserialize)]
struct SeedFile {
    seed: Vec<Seed>,
}

pub const BUILTIN_SEEDS: &str = include_str!("../assets/seeds.toml");

pub fn parse_seeds(text: &str) -> Result<Vec<Seed>> {
    let f: SeedFile = toml::from_str(text).map_err(|e| Error::Config(format!("seeds: {e}")))?;
    let mut seen = std::collections::BTreeSet::new();
    for s in &f.seed {
        if s.statement.trim().is_empty() {
            return Err(Error::Config(format!(
                "seed {}/{} has an empty statement",
                s.domain, s.seed_id
            )));
        }
        if !seen.insert((s.domain.clone(), s.seed_id.clone())) {
            return Err(Error::Config(format!("duplicate seed {}/{}", s.domain, s.seed_id)));
        }
    }
    Ok(f.seed)
}

/// Seeds after the domain and per-domain filters of `cfg`.
pub fn load_seeds(cfg: &ExploreConfig) -> Result<Vec<Seed>> {
    let text = match &cfg.seeds_file {
        Some(p) => {
            std::fs::read_to_string(p).map_err(|e| Error::Config(format!("cannot read {}: {e}", p.display())))?
        }
        None => BUILTIN_SEEDS.to_owned(),
    };
    let mut per_domain: BTreeMap<String, usize> = BTreeMap::new();
    Ok(parse_seeds(&text)?
        .into_iter()
        .filter(|s| cfg.domains.is_empty() || cfg.domains.contains(&s.domain))
        .filter(|s| {
            let n = per_domain.entry(s.domain.clone()).or_default();
            *n += 1;
            cfg.seeds_per_domain.is_none_or(|max| *n <= max)
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn builtin_seeds_are_ten_by_eight() {
        let seeds = parse_seeds(BUILTIN_SEEDS).unwrap();
        assert_eq!(seeds.len(), 80);
        let domains: std::collections::BTreeSet<_> = seeds.iter().map(|s| &s.domain).collect();
        assert_eq!(domains.len(), 10);
    }

    #[test]
    fn env_interpolation() {
        let look = |k: &str| (k == "KEY").then(|| "secret".to_owned());
        assert_eq!(
            interpolate_env("a=${KEY} b=${NOPE:-dflt}", look).unwrap(),
            "a=secret b=dflt"
        );
        assert!(matches!(interpolate_env("${NOPE}", look), Err(Error::Config(_))));
    }

    #[test]
    fn minimal_file_and_defaults() {
        let cfg = Config::from_toml(
            r#"
            workers = 2
            [[endpoints]]
            name = "mock"
            base_url = "mock://"
            max_context = 100000
            [explore]
            variants_per_seed = 2
            candidates_per_prompt = 2
            "#,
        )
        .unwrap();
        assert_eq!(cfg.endpoints[0].name, "mock");
        assert_eq!(cfg.toolchain.repeat_count, 3);
        assert_eq!(cfg.sampling.teacher.temperature, 0.999);
        assert_eq!(cfg.role_or_first(&cfg.roles.teacher).unwrap(), "mock");
    }

    #[test]
    fn domain_filter_and_limit() {
        let cfg = ExploreConfig {
            domains: vec!["stencils".into()],
            seeds_per_domain: Some(1),
            ..Default::default()
        };
        let seeds = load_seeds(&cfg).unwrap();
        assert_eq!(seeds.len(), 1);
        assert_eq!(seeds[0].domain, "stencils");
    }

    #[test]
    fn bad_values_rejected() {
        assert!(Config::from_toml("[dataset]\nval_fraction = 1.5").is_err());
        assert!(Config::from_toml("[toolchain]\nrepeat_count = 0").is_err());
    }
}
