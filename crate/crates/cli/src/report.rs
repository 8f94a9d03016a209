use std::fs;
use std::path::Path;

use serde::Serialize;
use serde_json::Value;

/// One self-describing record per invocation.
#[derive(Debug, Serialize)]
pub struct RunReport {
    pub command: String,
    pub config: Value,
    pub seed: Option<u64>,
    pub status: String,
    pub error: Option<String>,
    pub metrics: Value,
    pub wall_s: f64,
    pub artifacts: Vec<String>,
}

impl RunReport {
    pub fn write(&self, path: &Path) -> std::io::Result<()> {
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            fs::create_dir_all(parent)?;
        }
        let text = serde_json::to_string_pretty(self).expect("report serializes");
        fs::write(path, text + "\n")
    }
}
