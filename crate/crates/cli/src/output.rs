use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::Serialize;

/// Writes reports under one directory. Every CSV starts with a `#` line
/// naming the toolkit version and config hash; every JSON document carries
/// both as fields.
pub struct Output {
    pub dir: PathBuf,
    pub hash: String,
}

#[derive(Serialize)]
struct Envelope<'a, T> {
    version: &'a str,
    config_hash: &'a str,
    #[serde(flatten)]
    body: &'a T,
}

impl Output {
    pub fn new(dir: &Path, hash: String) -> Result<Self> {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        Ok(Self {
            dir: dir.to_path_buf(),
            hash,
        })
    }

    pub fn path(&self, rel: &str) -> PathBuf {
        self.dir.join(rel)
    }

    fn write(&self, rel: &str, bytes: &[u8]) -> Result<PathBuf> {
        let path = self.path(rel);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
        }
        fs::write(&path, bytes).with_context(|| format!("writing {}", path.display()))?;
        Ok(path)
    }

    fn preamble(&self, notes: &[String]) -> Vec<u8> {
        let mut out = format!("# gfa-defense {} config {}\n", gfa_core::VERSION, self.hash).into_bytes();
        for n in notes {
            out.extend(format!("# {n}\n").bytes());
        }
        out
    }

    /// CSV from serializable rows.
    pub fn csv<T: Serialize>(&self, rel: &str, rows: &[T]) -> Result<PathBuf> {
        let mut w = csv::Writer::from_writer(self.preamble(&[]));
        for r in rows {
            w.serialize(r)?;
        }
        let bytes = w.into_inner().map_err(|e| anyhow::anyhow!("{e}"))?;
        self.write(rel, &bytes)
    }

    /// CSV whose body is produced by `body`, with extra comment lines.
    pub fn csv_with(
        &self,
        rel: &str,
        notes: &[String],
        body: impl FnOnce(&mut Vec<u8>) -> std::io::Result<()>,
    ) -> Result<PathBuf> {
        let mut bytes = self.preamble(notes);
        body(&mut bytes)?;
        self.write(rel, &bytes)
    }

    pub fn json<T: Serialize>(&self, rel: &str, body: &T) -> Result<PathBuf> {
        let env = Envelope {
            version: gfa_core::VERSION,
            config_hash: &self.hash,
            body,
        };
        let mut bytes = serde_json::to_vec_pretty(&env)?;
        bytes.write_all(b"\n")?;
        self.write(rel, &bytes)
    }

    pub fn text(&self, rel: &str, text: &str) -> Result<PathBuf> {
        self.write(rel, text.as_bytes())
    }
}
