//! Machine-readable experiment output: RFC-4180 CSV tables and a JSON
//! summary with sorted keys. File contents are fully determined by the
//! (config, seed) pair; wall-clock timing goes to stderr, never into files.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use crate::error::{FhError, Result};
use crate::experiments::ExperimentReport;

/// Bumped only with documented migrations of the CSV/JSON schemas.
pub const SCHEMA_VERSION: u32 = 1;

/// Writes the report's table as `<outdir>/<experiment>-<seed>.csv`.
pub fn write_csv(report: &ExperimentReport, outdir: &Path) -> Result<PathBuf> {
    std::fs::create_dir_all(outdir)?;
    let path = outdir.join(format!("{}-{}.csv", report.experiment, report.seed));
    let mut writer = csv::Writer::from_path(&path).map_err(|e| {
        FhError::Io(std::io::Error::other(format!(
            "cannot write '{}': {e}",
            path.display()
        )))
    })?;
    writer
        .write_record(&report.columns)
        .map_err(|e| FhError::Io(std::io::Error::other(e.to_string())))?;
    for row in &report.rows {
        let record: Vec<String> = report
            .columns
            .iter()
            .map(|c| row.get(c).map(|v| v.to_string()).unwrap_or_default())
            .collect();
        writer
            .write_record(&record)
            .map_err(|e| FhError::Io(std::io::Error::other(e.to_string())))?;
    }
    writer
        .flush()
        .map_err(|e| FhError::Io(std::io::Error::other(e.to_string())))?;
    Ok(path)
}

/// Writes `<outdir>/summary.json` with sorted keys: schema version,
/// experiment id, seed, the resolved config echo, and the runner summary.
pub fn write_summary(
    report: &ExperimentReport,
    config_echo: &str,
    outdir: &Path,
) -> Result<PathBuf> {
    std::fs::create_dir_all(outdir)?;
    let path = outdir.join("summary.json");
    let mut doc: BTreeMap<String, serde_json::Value> = BTreeMap::new();
    doc.insert("schema_version".into(), serde_json::json!(SCHEMA_VERSION));
    doc.insert("experiment".into(), serde_json::json!(report.experiment));
    doc.insert("seed".into(), serde_json::json!(report.seed));
    doc.insert("config".into(), serde_json::json!(config_echo));
    doc.insert("n_rows".into(), serde_json::json!(report.rows.len()));
    doc.insert(
        "summary".into(),
        serde_json::Value::Object(report.summary.clone().into_iter().collect()),
    );
    let text = serde_json::to_string_pretty(&doc)
        .map_err(|e| FhError::Io(std::io::Error::other(e.to_string())))?;
    std::fs::write(&path, text + "\n")?;
    Ok(path)
}
