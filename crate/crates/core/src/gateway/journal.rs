use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};

use serde::{Deserialize, Serialize};

use super::{Message, SamplingParams};
use crate::Result;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JournalEntry {
    pub key: String,
    pub endpoint: String,
    pub model: String,
    pub messages: Vec<Message>,
    pub params: SamplingParams,
    pub sample_index: u32,
    pub response: String,
}

/// Content-addressed store of completions, one file per key under
/// `<dir>/<first two hex chars>/<key>.json`. Writes go through a temporary
/// file and a rename, so readers never see partial entries.
#[derive(Debug)]
pub struct Journal {
    dir: PathBuf,
    tmp_counter: AtomicU64,
}

impl Journal {
    pub fn open(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref().to_path_buf();
        fs::create_dir_all(&dir)?;
        Ok(Journal {
            dir,
            tmp_counter: AtomicU64::new(0),
        })
    }

    fn path_for(&self, key: &str) -> PathBuf {
        let shard = key.get(..2).unwrap_or("xx");
        self.dir.join(shard).join(format!("{key}.json"))
    }

    pub fn get(&self, key: &str) -> Result<Option<JournalEntry>> {
        let path = self.path_for(key);
        match fs::read(&path) {
            Ok(bytes) => Ok(Some(serde_json::from_slice(&bytes)?)),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(None),
            Err(e) => Err(e.into()),
        }
    }

    pub fn put(&self, entry: &JournalEntry) -> Result<()> {
        let path = self.path_for(&entry.key);
        let parent = path.parent().expect("journal paths have a shard dir");
        fs::create_dir_all(parent)?;
        let n = self.tmp_counter.fetch_add(1, Ordering::Relaxed);
        let tmp = parent.join(format!(".{}.{}.{}.tmp", entry.key, std::process::id(), n));
        {
            let mut f = fs::File::create(&tmp)?;
            f.write_all(&serde_json::to_vec_pretty(entry)?)?;
            f.sync_all()?;
        }
        fs::rename(&tmp, &path)?;
        Ok(())
    }

    /// Number of stored entries.
    pub fn len(&self) -> Result<usize> {
        let mut n = 0;
        for shard in fs::read_dir(&self.dir)? {
            let shard = shard?;
            if !shard.file_type()?.is_dir() {
                continue;
            }
            for f in fs::read_dir(shard.path())? {
                let name = f?.file_name();
                let name = name.to_string_lossy();
                if name.ends_with(".json") && !name.starts_with('.') {
                    n += 1;
                }
            }
        }
        Ok(n)
    }

    pub fn is_empty(&self) -> Result<bool> {
        Ok(self.len()? == 0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn entry(key: &str) -> JournalEntry {
        JournalEntry {
            key: key.into(),
            endpoint: "e".into(),
            model: "m".into(),
            messages: vec![Message::user("hello")],
            params: SamplingParams::default(),
            sample_index: 0,
            response: "world".into(),
        }
    }

    #[test]
    fn put_then_get() {
        let dir = tempfile::tempdir().unwrap();
        let j = Journal::open(dir.path()).unwrap();
        assert!(j.get("abcd").unwrap().is_none());
        j.put(&entry("abcd")).unwrap();
        assert_eq!(j.get("abcd").unwrap().unwrap().response, "world");
        assert_eq!(j.len().unwrap(), 1);
        j.put(&entry("abcd")).unwrap();
        assert_eq!(j.len().unwrap(), 1);
    }
}
