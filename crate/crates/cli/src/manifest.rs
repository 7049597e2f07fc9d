//! One `RunManifest` per command invocation.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use cardioprior::io::Header;
use cardioprior::Result;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::cases::{io_err, write_text};

pub const MANIFEST_FORMAT: &str = "cardioprior.run";

#[derive(Debug, Serialize)]
pub struct InputHash {
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Serialize)]
pub struct RunManifest<'a, P: Serialize> {
    pub format: &'static str,
    pub tool_version: &'static str,
    pub command: &'static str,
    pub params: &'a P,
    pub jobs: Option<usize>,
    pub inputs: Vec<InputHash>,
    pub outputs: Vec<String>,
    pub timestamp_unix: u64,
}

/// Files read and written by a command.
#[derive(Debug, Default)]
pub struct Recorder {
    inputs: BTreeSet<PathBuf>,
    outputs: BTreeSet<PathBuf>,
}

fn sha256_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| io_err(path, e))?;
    let digest = Sha256::digest(&bytes);
    Ok(digest.iter().map(|b| format!("{b:02x}")).collect())
}

impl Recorder {
    /// A volume header also pulls in its payload file.
    pub fn input(&mut self, path: &Path) {
        self.inputs.insert(path.to_path_buf());
    }

    pub fn output(&mut self, path: &Path) {
        self.outputs.insert(path.to_path_buf());
    }

    fn hashes(&self) -> Result<Vec<InputHash>> {
        let mut files = BTreeSet::new();
        for p in &self.inputs {
            files.insert(p.clone());
            if p.extension().is_some_and(|e| e == "mhd") {
                let text = std::fs::read_to_string(p).map_err(|e| io_err(p, e))?;
                let header = Header::parse(&text, p)?;
                files.insert(p.parent().unwrap_or(Path::new("")).join(header.data_file));
            }
        }
        files
            .iter()
            .map(|p| {
                Ok(InputHash {
                    path: p.display().to_string(),
                    sha256: sha256_file(p)?,
                })
            })
            .collect()
    }

    pub fn write<P: Serialize>(
        &self,
        command: &'static str,
        params: &P,
        jobs: Option<usize>,
        path: &Path,
    ) -> Result<()> {
        let m = RunManifest {
            format: MANIFEST_FORMAT,
            tool_version: env!("CARGO_PKG_VERSION"),
            command,
            params,
            jobs,
            inputs: self.hashes()?,
            outputs: self.outputs.iter().map(|p| p.display().to_string()).collect(),
            timestamp_unix: SystemTime::now()
                .duration_since(UNIX_EPOCH)
                .map(|d| d.as_secs())
                .unwrap_or(0),
        };
        write_text(path, &(serde_json::to_string_pretty(&m)? + "\n"))
    }
}
