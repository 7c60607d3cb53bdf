//! Run manifest written at the end of `train` and `sweep`.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use debias_core::io::write_atomic;
use debias_core::trainer::RunConfig;
use debias_core::Result;
use serde::Serialize;

#[derive(Debug, Clone, Serialize)]
pub struct DatasetHash {
    pub path: PathBuf,
    pub sha256: String,
}

#[derive(Debug, Clone, Serialize)]
pub struct Manifest {
    pub tool: &'static str,
    pub version: &'static str,
    pub command: &'static str,
    pub config: RunConfig,
    pub datasets: BTreeMap<String, DatasetHash>,
    pub duration_secs: f64,
    pub exit_status: u8,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl Manifest {
    pub fn new(command: &'static str, config: RunConfig) -> Self {
        Self {
            tool: "debias",
            version: env!("CARGO_PKG_VERSION"),
            command,
            config,
            datasets: BTreeMap::new(),
            duration_secs: 0.0,
            exit_status: 0,
            error: None,
        }
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut json = serde_json::to_vec_pretty(self).expect("manifest serializes");
        json.push(b'\n');
        write_atomic(path, &json)
    }
}
