// SPDX-License-Identifier: MIT OR Apache-2.0

//! Per-run manifest: the resolved settings plus SHA-256 of every input and
//! output file.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::Read;
use std::path::{Path, PathBuf};

use serde::Serialize;
use sha2::{Digest, Sha256};

use kneuron::Result;

pub fn file_sha256(path: &Path) -> Result<String> {
    let mut f = File::open(path)?;
    let mut hasher = Sha256::new();
    let mut buf = vec![0u8; 1 << 16];
    loop {
        let n = f.read(&mut buf)?;
        if n == 0 {
            break;
        }
        hasher.update(&buf[..n]);
    }
    Ok(hex::encode(hasher.finalize()))
}

#[derive(Debug, Default)]
pub struct Manifest {
    command: String,
    argv: Vec<String>,
    config: BTreeMap<String, String>,
    inputs: Vec<PathBuf>,
    outputs: Vec<PathBuf>,
}

#[derive(Serialize)]
struct Record<'a> {
    command: &'a str,
    version: &'a str,
    argv: &'a [String],
    config: &'a BTreeMap<String, String>,
    inputs: BTreeMap<String, String>,
    outputs: BTreeMap<String, String>,
}

impl Manifest {
    pub fn new(command: &str, argv: &[String], config: BTreeMap<String, String>) -> Self {
        Self {
            command: command.to_owned(),
            argv: argv.to_vec(),
            config,
            ..Self::default()
        }
    }

    pub fn input(&mut self, path: &Path) {
        self.inputs.push(path.to_path_buf());
    }

    pub fn output(&mut self, path: &Path) {
        self.outputs.push(path.to_path_buf());
    }

    /// Writes `manifest-<command>.json` into `dir`, hashing files as they are
    /// now.
    pub fn write(&self, dir: &Path) -> Result<PathBuf> {
        let hash_all = |paths: &[PathBuf]| -> Result<BTreeMap<String, String>> {
            paths
                .iter()
                .map(|p| Ok((p.display().to_string(), file_sha256(p)?)))
                .collect()
        };
        let rec = Record {
            command: &self.command,
            version: env!("CARGO_PKG_VERSION"),
            argv: &self.argv,
            config: &self.config,
            inputs: hash_all(&self.inputs)?,
            outputs: hash_all(&self.outputs)?,
        };
        let path = dir.join(format!("manifest-{}.json", self.command));
        let mut text = serde_json::to_string_pretty(&rec)?;
        text.push('\n');
        std::fs::write(&path, text)?;
        Ok(path)
    }
}
