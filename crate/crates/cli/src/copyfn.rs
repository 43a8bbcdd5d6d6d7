//! `aero fn copy`: a no-op transform. It republishes the fetched source unchanged.
//!
//! Hard-links when possible, so the cost is independent of the payload size.

use std::path::{Path, PathBuf};

use aero_core::executor::{OutputEntry, ResultManifest, ResultStatus};
use chrono::Utc;

fn var(name: &str) -> Result<String, String> {
    std::env::var(name).map_err(|_| format!("{name} is not set; run this inside an aero task"))
}

fn link_or_copy(from: &Path, to: &Path) -> std::io::Result<()> {
    match std::fs::hard_link(from, to) {
        Ok(()) => Ok(()),
        Err(_) => std::fs::copy(from, to).map(|_| ()),
    }
}

/// Runs the function against the task environment and writes `result.json`.
pub fn run() -> Result<(), String> {
    let started = Utc::now();
    let input = PathBuf::from(var("AERO_INPUT_SOURCE")?);
    let out_dir = PathBuf::from(var("AERO_OUTPUT_DIR")?);
    let name = var("AERO_OUTPUTS")?
        .split(',')
        .next()
        .filter(|s| !s.is_empty())
        .ok_or("AERO_OUTPUTS names no output")?
        .to_owned();
    let result_path = PathBuf::from(var("AERO_RESULT")?);
    let (status, outputs, error) = match link_or_copy(&input, &out_dir.join(&name)) {
        Ok(()) => (
            ResultStatus::Ok,
            vec![OutputEntry {
                name: name.clone(),
                path: PathBuf::from(&name),
                media_type: "application/octet-stream".into(),
                description: None,
            }],
            None,
        ),
        Err(e) => (ResultStatus::Error, vec![], Some(format!("copy failed: {e}"))),
    };
    let result = ResultManifest {
        status,
        outputs,
        error,
        task_started: started,
        task_ended: Utc::now(),
    };
    let text = serde_json::to_vec(&result).map_err(|e| e.to_string())?;
    std::fs::write(&result_path, text).map_err(|e| format!("{}: {e}", result_path.display()))
}
