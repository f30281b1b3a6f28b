use std::fs;
use std::path::{Path, PathBuf};

use ionspec::protocol::Method;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

#[derive(Debug, Serialize, Deserialize)]
pub struct OutputFile {
    pub path: String,
    pub sha256: String,
    pub bytes: u64,
}

/// Record of one `signal` run.
#[derive(Debug, Serialize, Deserialize)]
pub struct Manifest {
    pub protocol_hash: String,
    pub parameters: Value,
    pub method: Method,
    pub grid: Value,
    pub wall_time_s: f64,
    pub engine_deviation: Option<f64>,
    pub cached: bool,
    pub created_unix: u64,
    pub tool_version: String,
    pub files: Vec<OutputFile>,
}

impl Manifest {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        protocol_hash: String,
        parameters: Value,
        method: Method,
        grid: Value,
        wall_time_s: f64,
        engine_deviation: Option<f64>,
        cached: bool,
        created_unix: u64,
        files: &[PathBuf],
    ) -> std::io::Result<Self> {
        let files = files
            .iter()
            .map(|p| {
                let bytes = fs::read(p)?;
                Ok(OutputFile {
                    path: p.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default(),
                    sha256: sha256_hex(&bytes),
                    bytes: bytes.len() as u64,
                })
            })
            .collect::<std::io::Result<Vec<_>>>()?;
        Ok(Self {
            protocol_hash,
            parameters,
            method,
            grid,
            wall_time_s,
            engine_deviation,
            cached,
            created_unix,
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            files,
        })
    }

    pub fn write(&self, path: &Path) -> std::io::Result<()> {
        fs::write(path, serde_json::to_string_pretty(self)?)
    }
}
