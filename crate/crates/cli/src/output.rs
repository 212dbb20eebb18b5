use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::Serialize;

/// Record of one invocation. Holds no timestamps or host details so reruns
/// produce the same bytes.
#[derive(Debug, Serialize)]
struct Manifest<'a, C: Serialize> {
    tool: &'static str,
    version: &'static str,
    command: &'a str,
    config: &'a C,
    outputs: Vec<OutputEntry>,
}

#[derive(Debug, Serialize)]
struct OutputEntry {
    file: String,
    bytes: u64,
}

/// Collects files written into one output directory.
pub struct OutDir {
    root: PathBuf,
    written: Vec<String>,
}

impl OutDir {
    pub fn create(root: &Path) -> Result<Self> {
        fs::create_dir_all(root).with_context(|| format!("creating {}", root.display()))?;
        Ok(OutDir {
            root: root.to_path_buf(),
            written: Vec::new(),
        })
    }

    /// Path for `name`, recorded in the manifest once written.
    pub fn path(&mut self, name: &str) -> PathBuf {
        if !self.written.iter().any(|w| w == name) {
            self.written.push(name.to_string());
        }
        self.root.join(name)
    }

    pub fn write(&mut self, name: &str, contents: impl AsRef<[u8]>) -> Result<()> {
        let path = self.path(name);
        fs::write(&path, contents).with_context(|| format!("writing {}", path.display()))
    }

    pub fn write_json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<()> {
        let mut text = serde_json::to_string_pretty(value)?;
        text.push('\n');
        self.write(name, text)
    }

    pub fn write_jsonl<T: Serialize>(&mut self, name: &str, rows: impl IntoIterator<Item = T>) -> Result<()> {
        let mut text = String::new();
        for row in rows {
            text.push_str(&serde_json::to_string(&row)?);
            text.push('\n');
        }
        self.write(name, text)
    }

    /// Writes `manifest.json` listing every file produced so far.
    pub fn finish<C: Serialize>(mut self, command: &str, config: &C) -> Result<()> {
        let mut outputs = Vec::with_capacity(self.written.len());
        for name in &self.written {
            let path = self.root.join(name);
            let meta = fs::metadata(&path).with_context(|| format!("reading {}", path.display()))?;
            outputs.push(OutputEntry {
                file: name.clone(),
                bytes: meta.len(),
            });
        }
        let manifest = Manifest {
            tool: "rubric",
            version: env!("CARGO_PKG_VERSION"),
            command,
            config,
            outputs,
        };
        self.written.clear();
        self.write_json("manifest.json", &manifest)
    }
}
