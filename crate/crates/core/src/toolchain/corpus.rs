//! Labelled on-disk test programs: `<root>/<id>/{Makefile, harness.cc,
//! reference.cc, generated.cc, manifest}`.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::explore::{extract_signature, REFERENCE_FN};
use crate::model::{CandidateCode, CodeLocation, HarnessBundle, StrategyMode};
use crate::{Error, Result};

pub const FIXTURE_FILES: [&str; 5] = ["Makefile", "harness.cc", "reference.cc", "generated.cc", "manifest"];

/// `manifest` file of one fixture (TOML).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FixtureManifest {
    pub fixture_id: String,
    pub expected_race: bool,
    /// `file:line` locations, when known.
    #[serde(default)]
    pub expected_race_locations: Option<Vec<String>>,
    #[serde(default)]
    pub region_count: usize,
    #[serde(default)]
    pub notes: String,
}

impl FixtureManifest {
    pub fn parse(text: &str) -> Result<Self> {
        let m: FixtureManifest = toml::from_str(text).map_err(|e| Error::Config(format!("manifest: {e}")))?;
        for loc in m.expected_race_locations.iter().flatten() {
            if CodeLocation::parse(loc).is_none() {
                return Err(Error::Config(format!(
                    "manifest {}: bad location `{loc}`",
                    m.fixture_id
                )));
            }
        }
        if !m.expected_race && m.expected_race_locations.as_ref().is_some_and(|l| !l.is_empty()) {
            return Err(Error::Config(format!(
                "manifest {}: race-free fixture lists race locations",
                m.fixture_id
            )));
        }
        Ok(m)
    }

    pub fn locations(&self) -> Vec<CodeLocation> {
        self.expected_race_locations
            .iter()
            .flatten()
            .filter_map(|l| CodeLocation::parse(l))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Fixture {
    pub dir: PathBuf,
    pub manifest: FixtureManifest,
    pub bundle: HarnessBundle,
    pub candidate: CandidateCode,
}

fn read(dir: &Path, name: &str) -> Result<String> {
    std::fs::read_to_string(dir.join(name)).map_err(|e| Error::Config(format!("{}/{name}: {e}", dir.display())))
}

pub fn load_fixture(dir: &Path) -> Result<Fixture> {
    let manifest = FixtureManifest::parse(&read(dir, "manifest")?)?;
    let name = dir
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default();
    if manifest.fixture_id != name {
        return Err(Error::Config(format!(
            "manifest id `{}` does not match directory `{name}`",
            manifest.fixture_id
        )));
    }
    let reference = read(dir, "reference.cc")?;
    let signature = extract_signature(&reference, REFERENCE_FN)?;
    let bundle = HarnessBundle {
        problem_id: format!("fixture:{name}"),
        makefile: read(dir, "Makefile")?,
        harness_source: read(dir, "harness.cc")?,
        reference_source: reference,
        signature,
    };
    let mode = if manifest.expected_race {
        StrategyMode::Racy
    } else {
        StrategyMode::Inefficient
    };
    let candidate = CandidateCode::new(&bundle.problem_id, read(dir, "generated.cc")?, "fixture", mode, 1)?;
    Ok(Fixture {
        dir: dir.to_owned(),
        manifest,
        bundle,
        candidate,
    })
}

/// Every fixture under `root`, sorted by id. Fails unless manifests and
/// fixture directories correspond one to one.
pub fn load_corpus(root: &Path) -> Result<Vec<Fixture>> {
    let mut dirs: Vec<PathBuf> = std::fs::read_dir(root)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    dirs.sort();
    let mut ids = BTreeSet::new();
    let mut out = Vec::new();
    for dir in dirs {
        let missing: Vec<&str> = FIXTURE_FILES
            .iter()
            .copied()
            .filter(|f| !dir.join(f).is_file())
            .collect();
        if !missing.is_empty() {
            return Err(Error::Config(format!(
                "{}: missing {}",
                dir.display(),
                missing.join(", ")
            )));
        }
        let f = load_fixture(&dir)?;
        if !ids.insert(f.manifest.fixture_id.clone()) {
            return Err(Error::Config(format!("duplicate fixture id {}", f.manifest.fixture_id)));
        }
        out.push(f);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    const REFERENCE: &str = "#include <vector>\ndouble reference(const std::vector<double>& v) {\n    double s = 0;\n    for (double x : v) s += x;\n    return s;\n}\n";

    fn write_fixture(root: &Path, id: &str, manifest: &str) {
        let d = root.join(id);
        std::fs::create_dir_all(&d).unwrap();
        std::fs::write(d.join("Makefile"), "all:\n").unwrap();
        std::fs::write(d.join("harness.cc"), "int main() {}\n").unwrap();
        std::fs::write(d.join("reference.cc"), REFERENCE).unwrap();
        std::fs::write(d.join("generated.cc"), REFERENCE.replace("reference", "generated")).unwrap();
        std::fs::write(d.join("manifest"), manifest).unwrap();
    }

    #[test]
    fn loads_a_corpus() {
        let tmp = tempfile::tempdir().unwrap();
        write_fixture(
            tmp.path(),
            "acc_race",
            "fixture_id = \"acc_race\"\nexpected_race = true\nexpected_race_locations = [\"generated.cc:4\"]\nregion_count = 1\n",
        );
        write_fixture(
            tmp.path(),
            "acc_reduction",
            "fixture_id = \"acc_reduction\"\nexpected_race = false\n",
        );
        let c = load_corpus(tmp.path()).unwrap();
        assert_eq!(c.len(), 2);
        assert_eq!(c[0].manifest.fixture_id, "acc_race");
        assert_eq!(c[0].manifest.locations(), vec![CodeLocation::new("generated.cc", 4)]);
        assert_eq!(c[0].bundle.signature, "double reference(const vector<double>&)");
        assert_eq!(c[1].candidate.strategy_mode, StrategyMode::Inefficient);
    }

    #[test]
    fn manifest_must_match_directory() {
        let tmp = tempfile::tempdir().unwrap();
        write_fixture(tmp.path(), "a", "fixture_id = \"b\"\nexpected_race = false\n");
        assert!(matches!(load_corpus(tmp.path()), Err(Error::Config(_))));
    }

    #[test]
    fn missing_file_is_reported() {
        let tmp = tempfile::tempdir().unwrap();
        write_fixture(tmp.path(), "a", "fixture_id = \"a\"\nexpected_race = false\n");
        std::fs::remove_file(tmp.path().join("a/generated.cc")).unwrap();
        let e = load_corpus(tmp.path()).unwrap_err().to_string();
        assert!(e.contains("generated.cc"), "{e}");
    }

    #[test]
    fn race_free_with_locations_is_rejected() {
        assert!(FixtureManifest::parse(
            "fixture_id = \"x\"\nexpected_race = false\nexpected_race_locations = [\"generated.cc:3\"]\n"
        )
        .is_err());
    }
}
