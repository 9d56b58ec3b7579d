//! Output directory handling and number formatting.

use std::path::{Path, PathBuf};
use std::time::Instant;

use crate::CliError;

/// Marker present while a command runs; left behind on failure.
pub const INCOMPLETE: &str = "INCOMPLETE";

/// Fixed decimal with 6 significant digits; no exponent.
pub fn fmt6(v: f64) -> String {
    if v.is_nan() {
        return "nan".into();
    }
    if v.is_infinite() {
        return if v > 0.0 { "inf".into() } else { "-inf".into() };
    }
    if v == 0.0 {
        return "0".into();
    }
    let decimals = |x: f64| (5 - x.abs().log10().floor() as i32).max(0) as usize;
    let mut d = decimals(v);
    let mut s = format!("{v:.d$}");
    // Rounding may carry into a new leading digit (9.999996 -> 10.00000).
    let rounded: f64 = s.parse().unwrap_or(v);
    if rounded != 0.0 && decimals(rounded) < d {
        d = decimals(rounded);
        s = format!("{v:.d$}");
    }
    if s.starts_with("-") && s[1..].chars().all(|c| c == '0' || c == '.') {
        s.remove(0);
    }
    s
}

/// Ordered metric rows written as `metric,value`.
#[derive(Debug, Default, Clone, PartialEq)]
pub struct Metrics {
    rows: Vec<(String, String)>,
}

impl Metrics {
    pub fn num(&mut self, key: impl Into<String>, v: f64) {
        self.rows.push((key.into(), fmt6(v)));
    }

    pub fn int(&mut self, key: impl Into<String>, v: usize) {
        self.rows.push((key.into(), v.to_string()));
    }

    pub fn flag(&mut self, key: impl Into<String>, v: bool) {
        self.rows.push((key.into(), u8::from(v).to_string()));
    }

    pub fn text(&mut self, key: impl Into<String>, v: impl Into<String>) {
        self.rows.push((key.into(), v.into()));
    }

    pub fn rows(&self) -> &[(String, String)] {
        &self.rows
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.rows.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("metric,value\n");
        for (k, v) in &self.rows {
            s.push_str(k);
            s.push(',');
            s.push_str(v);
            s.push('\n');
        }
        s
    }
}

/// A command's output directory, marked incomplete until [`RunDir::finish`].
pub struct RunDir {
    pub root: PathBuf,
    started: Instant,
}

impl RunDir {
    pub fn create(root: &Path) -> Result<Self, CliError> {
        std::fs::create_dir_all(root).map_err(|e| CliError::Runtime(format!("cannot create {}: {e}", root.display())))?;
        let dir = Self { root: root.to_path_buf(), started: Instant::now() };
        dir.write(INCOMPLETE, "run did not finish\n")?;
        Ok(dir)
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    pub fn write(&self, name: &str, contents: impl AsRef<[u8]>) -> Result<(), CliError> {
        let p = self.path(name);
        if let Some(parent) = p.parent() {
            std::fs::create_dir_all(parent).map_err(|e| CliError::Runtime(format!("{}: {e}", parent.display())))?;
        }
        std::fs::write(&p, contents).map_err(|e| CliError::Runtime(format!("cannot write {}: {e}", p.display())))
    }

    /// Writes `metrics.csv` and `summary.json`, then removes the marker.
    pub fn finish(self, command: &str, digest: &str, metrics: &Metrics, artifacts: &[&str]) -> Result<(), CliError> {
        self.write("metrics.csv", metrics.to_csv())?;
        let map: serde_json::Map<String, serde_json::Value> =
            metrics.rows().iter().map(|(k, v)| (k.clone(), serde_json::Value::String(v.clone()))).collect();
        let summary = serde_json::json!({
            "run_id": run_id(command, digest),
            "command": command,
            "config_digest": digest,
            "wall_time_s": self.started.elapsed().as_secs_f64(),
            "metrics": map,
            "artifacts": artifacts,
        });
        self.write("summary.json", serde_json::to_string_pretty(&summary).expect("json value") + "\n")?;
        std::fs::remove_file(self.path(INCOMPLETE)).map_err(|e| CliError::Runtime(format!("cannot clear marker: {e}")))
    }
}

/// `<command>-<first 12 digest hex digits>`.
pub fn run_id(command: &str, digest: &str) -> String {
    format!("{command}-{}", &digest[..12.min(digest.len())])
}
