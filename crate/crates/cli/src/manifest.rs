use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::error::CliResult;

#[derive(Debug, Clone, Serialize)]
pub struct FileEntry {
    pub path: String,
    pub sha256: String,
    pub bytes: u64,
}

#[derive(Debug, Clone, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub config_hash: String,
    pub toolkit_version: String,
    pub seed: u64,
    pub threads: usize,
    pub inputs: Vec<FileEntry>,
    pub outputs: Vec<FileEntry>,
    pub wall_clock_seconds: f64,
}

pub fn sha256_file(path: &Path) -> CliResult<String> {
    Ok(hex::encode(Sha256::digest(fs::read(path)?)))
}

/// Collects the files a command reads and writes, relative to the output root.
pub struct Recorder {
    root: PathBuf,
    started: Instant,
    inputs: Vec<String>,
    outputs: Vec<String>,
}

impl Recorder {
    pub fn new(root: &Path) -> Self {
        Self { root: root.to_path_buf(), started: Instant::now(), inputs: Vec::new(), outputs: Vec::new() }
    }

    pub fn input(&mut self, rel: impl Into<String>) {
        let rel = rel.into();
        if !self.inputs.contains(&rel) {
            self.inputs.push(rel);
        }
    }

    pub fn output(&mut self, rel: impl Into<String>) {
        let rel = rel.into();
        if !self.outputs.contains(&rel) {
            self.outputs.push(rel);
        }
    }

    pub fn outputs_in(&mut self, dir: &str, names: &[String]) {
        for n in names {
            self.output(format!("{dir}/{n}"));
        }
    }

    fn entries(&self, rels: &[String]) -> CliResult<Vec<FileEntry>> {
        let mut v: Vec<FileEntry> = rels
            .iter()
            .map(|r| {
                let p = self.root.join(r);
                Ok(FileEntry { path: r.clone(), sha256: sha256_file(&p)?, bytes: fs::metadata(&p)?.len() })
            })
            .collect::<CliResult<_>>()?;
        v.sort_by(|a, b| a.path.cmp(&b.path));
        Ok(v)
    }

    /// Write `manifests/<command>.json` through a temporary file and rename.
    pub fn finish(self, command: &str, config_hash: &str, seed: u64) -> CliResult<PathBuf> {
        let m = RunManifest {
            command: command.into(),
            config_hash: config_hash.into(),
            toolkit_version: env!("CARGO_PKG_VERSION").into(),
            seed,
            threads: rayon::current_num_threads(),
            inputs: self.entries(&self.inputs)?,
            outputs: self.entries(&self.outputs)?,
            wall_clock_seconds: self.started.elapsed().as_secs_f64(),
        };
        let dir = self.root.join("manifests");
        fs::create_dir_all(&dir)?;
        let path = dir.join(format!("{command}.json"));
        let tmp = dir.join(format!(".{command}.json.tmp"));
        fs::write(&tmp, serde_json::to_string_pretty(&m)?)?;
        fs::rename(&tmp, &path)?;
        Ok(path)
    }
}
