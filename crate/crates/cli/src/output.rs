//! Staged artifacts, written atomically once a command has fully succeeded.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::Serialize;
use sha2::{Digest, Sha256};
use socialgcn_core::Result;

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

#[derive(Debug, Serialize)]
struct FileHash {
    path: String,
    sha256: String,
}

#[derive(Debug, Serialize)]
struct Manifest<'a> {
    tool: &'static str,
    version: &'static str,
    command: &'a str,
    seed: Option<u64>,
    precedence: &'static str,
    config_sha256: String,
    config: &'a str,
    inputs: Vec<FileHash>,
    outputs: Vec<FileHash>,
}

/// Artifacts held in memory until [`Artifacts::commit`].
#[derive(Debug)]
pub struct Artifacts {
    command: String,
    files: Vec<(String, Vec<u8>)>,
    inputs: Vec<(String, Vec<u8>)>,
    config: String,
    seed: Option<u64>,
}

impl Artifacts {
    pub fn new(command: &str) -> Self {
        Artifacts { command: command.into(), files: Vec::new(), inputs: Vec::new(), config: String::new(), seed: None }
    }

    pub fn set_config(&mut self, config: String, seed: Option<u64>) {
        self.config = config;
        self.seed = seed;
    }

    /// Records an input for the manifest and returns its contents.
    pub fn read_input(&mut self, path: &Path) -> Result<Vec<u8>> {
        let bytes = fs::read(path)?;
        self.inputs.push((path.display().to_string(), bytes.clone()));
        Ok(bytes)
    }

    /// Records bundled data that stands in for an input file.
    pub fn bundled_input(&mut self, name: &str, bytes: &[u8]) {
        self.inputs.push((format!("<bundled>/{name}"), bytes.to_vec()));
    }

    pub fn add(&mut self, name: impl Into<String>, bytes: Vec<u8>) {
        self.files.push((name.into(), bytes));
    }

    pub fn add_json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<()> {
        let mut bytes = serde_json::to_vec_pretty(value)?;
        bytes.push(b'\n');
        self.add(name, bytes);
        Ok(())
    }

    pub fn add_with<F>(&mut self, name: &str, write: F) -> Result<()>
    where
        F: FnOnce(&mut Vec<u8>) -> Result<()>,
    {
        let mut buf = Vec::new();
        write(&mut buf)?;
        self.add(name, buf);
        Ok(())
    }

    fn manifest(&self) -> Result<Vec<u8>> {
        let hash = |v: &[(String, Vec<u8>)]| v.iter().map(|(p, b)| FileHash { path: p.clone(), sha256: sha256_hex(b) }).collect();
        let m = Manifest {
            tool: "socialgcn",
            version: env!("CARGO_PKG_VERSION"),
            command: &self.command,
            seed: self.seed,
            precedence: "command-line flags > config file > built-in defaults",
            config_sha256: sha256_hex(self.config.as_bytes()),
            config: &self.config,
            inputs: hash(&self.inputs),
            outputs: hash(&self.files),
        };
        let mut bytes = serde_json::to_vec_pretty(&m)?;
        bytes.push(b'\n');
        Ok(bytes)
    }

    /// Writes every artifact plus `manifest.json` into `dir`, each through a
    /// temporary file renamed into place.
    pub fn commit(mut self, dir: &Path) -> Result<Vec<PathBuf>> {
        let manifest = self.manifest()?;
        self.files.push(("manifest.json".into(), manifest));
        fs::create_dir_all(dir)?;
        let mut staged = Vec::with_capacity(self.files.len());
        for (name, bytes) in &self.files {
            let target = dir.join(name);
            let parent = target.parent().unwrap_or(dir);
            fs::create_dir_all(parent)?;
            let mut tmp = tempfile::NamedTempFile::new_in(parent)?;
            tmp.write_all(bytes)?;
            tmp.as_file().sync_all()?;
            staged.push((tmp, target));
        }
        let mut written = Vec::with_capacity(staged.len());
        for (tmp, target) in staged {
            tmp.persist(&target).map_err(|e| e.error)?;
            written.push(target);
        }
        Ok(written)
    }
}
