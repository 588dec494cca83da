//! Run-directory layout and append-only JSONL record stores.

use std::collections::BTreeSet;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::marker::PhantomData;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::model::{content_hash, CandidateCode, CoTRecord, HarnessBundle, ProblemRecord, SCHEMA_VERSION};
use crate::{Error, Result};

/// Record identity inside a store; appending a known key is a no-op.
pub trait Keyed {
    fn key(&self) -> String;
}

impl Keyed for ProblemRecord {
    fn key(&self) -> String {
        format!("{}/{}/{}", self.domain, self.seed_id, self.variant_index)
    }
}

impl Keyed for HarnessBundle {
    fn key(&self) -> String {
        self.problem_id.clone()
    }
}

impl Keyed for CandidateCode {
    fn key(&self) -> String {
        self.id.clone()
    }
}

impl Keyed for CoTRecord {
    fn key(&self) -> String {
        self.id.clone()
    }
}

/// One line in `audit.jsonl`: a dropped item, a dedupe, a failure cause.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AuditEntry {
    pub stage: String,
    pub item: String,
    pub cause: String,
    #[serde(default)]
    pub detail: String,
}

impl AuditEntry {
    pub fn new(stage: &str, item: impl Into<String>, cause: &str, detail: impl Into<String>) -> Self {
        AuditEntry {
            stage: stage.to_owned(),
            item: item.into(),
            cause: cause.to_owned(),
            detail: detail.into(),
        }
    }
}

impl Keyed for AuditEntry {
    fn key(&self) -> String {
        content_hash(format!(
            "{}\0{}\0{}\0{}",
            self.stage, self.item, self.cause, self.detail
        ))
    }
}

/// Append-only JSONL file of `T`, each line tagged with `schema`.
pub struct JsonlStore<T> {
    path: PathBuf,
    inner: Mutex<Inner>,
    _marker: PhantomData<fn() -> T>,
}

struct Inner {
    keys: BTreeSet<String>,
    file: Option<File>,
}

impl<T: Keyed + Serialize + DeserializeOwned> JsonlStore<T> {
    pub fn open(path: impl Into<PathBuf>) -> Result<Self> {
        let path = path.into();
        drop_torn_tail(&path)?;
        let keys = read_jsonl::<T>(&path)?.iter().map(Keyed::key).collect();
        Ok(JsonlStore {
            path,
            inner: Mutex::new(Inner { keys, file: None }),
            _marker: PhantomData,
        })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn contains(&self, key: &str) -> bool {
        self.inner.lock().unwrap().keys.contains(key)
    }

    pub fn len(&self) -> usize {
        self.inner.lock().unwrap().keys.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Appends `record` unless its key is already present; returns whether
    /// a line was written.
    pub fn append(&self, record: &T) -> Result<bool> {
        let key = record.key();
        let mut inner = self.inner.lock().unwrap();
        if inner.keys.contains(&key) {
            return Ok(false);
        }
        let line = to_line(record)?;
        if inner.file.is_none() {
            if let Some(parent) = self.path.parent() {
                std::fs::create_dir_all(parent)?;
            }
            inner.file = Some(OpenOptions::new().create(true).append(true).open(&self.path)?);
        }
        let file = inner.file.as_mut().expect("opened above");
        file.write_all(line.as_bytes())?;
        file.flush()?;
        inner.keys.insert(key);
        Ok(true)
    }

    pub fn load(&self) -> Result<Vec<T>> {
        read_jsonl(&self.path)
    }
}

/// Cuts an unterminated final line left by an interrupted append.
fn drop_torn_tail(path: &Path) -> Result<()> {
    let bytes = match std::fs::read(path) {
        Ok(b) => b,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(()),
        Err(e) => return Err(e.into()),
    };
    if bytes.is_empty() || bytes.ends_with(b"\n") {
        return Ok(());
    }
    let keep = bytes.iter().rposition(|&b| b == b'\n').map(|i| i + 1).unwrap_or(0);
    log::warn!(
        "{}: dropping {} bytes of a torn final line",
        path.display(),
        bytes.len() - keep
    );
    OpenOptions::new().write(true).open(path)?.set_len(keep as u64)?;
    Ok(())
}

fn to_line<T: Serialize>(record: &T) -> Result<String> {
    let mut value = serde_json::to_value(record)?;
    match &mut value {
        Value::Object(map) => {
            map.insert("schema".into(), Value::from(SCHEMA_VERSION));
        }
        _ => return Err(Error::Format("JSONL records must be objects".into())),
    }
    let mut line = serde_json::to_string(&value)?;
    line.push('\n');
    Ok(line)
}

/// Reads every complete record of a JSONL file (missing file = empty). A
/// torn final line from an interrupted write is skipped with a warning.
pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let file = match File::open(path) {
        Ok(f) => f,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(Vec::new()),
        Err(e) => return Err(e.into()),
    };
    let lines: Vec<String> = BufReader::new(file).lines().collect::<std::io::Result<_>>()?;
    let last = lines.len().saturating_sub(1);
    let mut out = Vec::with_capacity(lines.len());
    for (i, line) in lines.iter().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str::<Value>(line) {
            Ok(mut value) => {
                if let Some(schema) = value.get("schema").and_then(Value::as_u64) {
                    if schema > SCHEMA_VERSION as u64 {
                        return Err(Error::Format(format!(
                            "{}:{}: schema {} is newer than {}",
                            path.display(),
                            i + 1,
                            schema,
                            SCHEMA_VERSION
                        )));
                    }
                }
                if let Value::Object(map) = &mut value {
                    map.remove("schema");
                }
                out.push(
                    serde_json::from_value(value)
                        .map_err(|e| Error::Json(format!("{}:{}: {e}", path.display(), i + 1)))?,
                );
            }
            Err(e) if i == last => {
                log::warn!("{}: skipping torn final line ({e})", path.display());
            }
            Err(e) => return Err(Error::Json(format!("{}:{}: {e}", path.display(), i + 1))),
        }
    }
    Ok(out)
}

/// Writes `records` as a fresh JSONL file (temp file + rename).
pub fn write_jsonl<T: Serialize>(path: &Path, records: &[T]) -> Result<()> {
    let mut text = String::new();
    for r in records {
        text.push_str(&to_line(r)?);
    }
    write_atomic(path, text.as_bytes())
}

pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    let tmp = path.with_extension(format!("tmp{}", std::process::id()));
    std::fs::write(&tmp, bytes)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

/// Paths of one run directory.
#[derive(Debug, Clone)]
pub struct RunDir {
    root: PathBuf,
}

impl RunDir {
    pub fn create(root: impl Into<PathBuf>) -> Result<Self> {
        let root = root.into();
        std::fs::create_dir_all(&root)?;
        Ok(RunDir { root })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn journal_dir(&self) -> PathBuf {
        self.root.join("journal")
    }

    pub fn problems(&self) -> PathBuf {
        self.root.join("problems.jsonl")
    }

    pub fn harnesses(&self) -> PathBuf {
        self.root.join("harnesses.jsonl")
    }

    pub fn candidates(&self) -> PathBuf {
        self.root.join("candidates.jsonl")
    }

    pub fn tsan_outcomes(&self) -> PathBuf {
        self.root.join("outcomes_tsan.jsonl")
    }

    pub fn caliper_outcomes(&self) -> PathBuf {
        self.root.join("outcomes_caliper.jsonl")
    }

    pub fn cots(&self) -> PathBuf {
        self.root.join("cots.jsonl")
    }

    pub fn audit(&self) -> PathBuf {
        self.root.join("audit.jsonl")
    }

    pub fn raw_dir(&self) -> PathBuf {
        self.root.join("raw")
    }

    pub fn work_dir(&self) -> PathBuf {
        self.root.join("work")
    }

    pub fn dataset_dir(&self) -> PathBuf {
        self.root.join("dataset")
    }

    pub fn eval_dir(&self) -> PathBuf {
        self.root.join("eval")
    }

    pub fn fix_dir(&self) -> PathBuf {
        self.root.join("fix")
    }

    pub fn reports_dir(&self) -> PathBuf {
        self.root.join("reports")
    }

    pub fn stats_dir(&self) -> PathBuf {
        self.root.join("stats")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn append_is_idempotent_and_tagged() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("problems.jsonl");
        let p = ProblemRecord::new("d", "s", 0, "Compute a dot product.").unwrap();
        let store = JsonlStore::<ProblemRecord>::open(&path).unwrap();
        assert!(store.append(&p).unwrap());
        assert!(!store.append(&p).unwrap());
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text.lines().count(), 1);
        assert!(text.contains("\"schema\":1"));

        let reopened = JsonlStore::<ProblemRecord>::open(&path).unwrap();
        assert!(!reopened.append(&p).unwrap());
        assert_eq!(reopened.load().unwrap(), vec![p]);
    }

    #[test]
    fn torn_last_line_is_skipped() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.jsonl");
        let p = ProblemRecord::new("d", "s", 0, "x").unwrap();
        write_jsonl(&path, std::slice::from_ref(&p)).unwrap();
        let mut f = OpenOptions::new().append(true).open(&path).unwrap();
        f.write_all(b"{\"id\":\"tr").unwrap();
        assert_eq!(read_jsonl::<ProblemRecord>(&path).unwrap(), vec![p.clone()]);

        let store = JsonlStore::<ProblemRecord>::open(&path).unwrap();
        let q = ProblemRecord::new("d", "s", 1, "y").unwrap();
        assert!(store.append(&q).unwrap());
        assert_eq!(store.load().unwrap(), vec![p, q]);
    }

    #[test]
    fn missing_file_reads_empty() {
        let dir = tempfile::tempdir().unwrap();
        assert!(read_jsonl::<AuditEntry>(&dir.path().join("none.jsonl"))
            .unwrap()
            .is_empty());
    }
}
