//! Writers for run outputs. Every file carries the seed and config hash:
//! CSVs as a leading `# seed=… config_hash=…` comment, JSON as fields.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use scvi_core::evaluation::BenchmarkReport;
use serde::Serialize;

use crate::config::RunConfig;
use crate::error::CliError;

/// Identity of the run stamped into every output.
#[derive(Clone, Debug, Serialize)]
pub struct Stamp {
    pub command: String,
    pub seed: u64,
    pub config_hash: String,
}

impl Stamp {
    pub fn new(command: &str, config: &RunConfig) -> Self {
        Stamp {
            command: command.to_string(),
            seed: config.seed,
            config_hash: config.hash(),
        }
    }

    fn comment(&self) -> String {
        format!("# seed={} config_hash={}\n", self.seed, self.config_hash)
    }
}

/// Collects output files under the run directory.
pub struct OutDir {
    root: PathBuf,
    written: Vec<String>,
}

fn io_error(path: &Path, e: impl std::fmt::Display) -> CliError {
    CliError::Data(format!("cannot write {}: {e}", path.display()))
}

impl OutDir {
    pub fn create(root: &Path) -> Result<Self, CliError> {
        fs::create_dir_all(root).map_err(|e| io_error(root, e))?;
        Ok(OutDir {
            root: root.to_path_buf(),
            written: Vec::new(),
        })
    }

    /// Path for `name` inside the directory, recorded in the manifest.
    pub fn path(&mut self, name: &str) -> PathBuf {
        self.written.push(name.to_string());
        self.root.join(name)
    }

    pub fn write_bytes(&mut self, name: &str, bytes: &[u8]) -> Result<(), CliError> {
        let p = self.path(name);
        fs::write(&p, bytes).map_err(|e| io_error(&p, e))
    }

    /// CSV with the stamp comment, a header and pre-formatted rows.
    pub fn write_csv(
        &mut self,
        name: &str,
        stamp: &Stamp,
        header: &[&str],
        rows: impl IntoIterator<Item = Vec<String>>,
    ) -> Result<(), CliError> {
        let mut buf = stamp.comment().into_bytes();
        {
            let mut w = csv::Writer::from_writer(&mut buf);
            let err = |e: csv::Error| CliError::Data(format!("{name}: {e}"));
            w.write_record(header).map_err(err)?;
            for row in rows {
                w.write_record(&row).map_err(err)?;
            }
            w.flush().map_err(|e| CliError::Data(format!("{name}: {e}")))?;
        }
        self.write_bytes(name, &buf)
    }

    pub fn write_json(&mut self, name: &str, value: &impl Serialize) -> Result<(), CliError> {
        let mut text = serde_json::to_string_pretty(value).expect("serializable");
        text.push('\n');
        self.write_bytes(name, text.as_bytes())
    }

    /// `<command>_report.csv` and `<command>_report.json` for a list of
    /// metrics.
    pub fn write_reports(
        &mut self,
        stamp: &Stamp,
        reports: &[BenchmarkReport],
        notes: &serde_json::Value,
    ) -> Result<(), CliError> {
        if let Some(bad) = reports.iter().find(|r| !r.value.is_finite()) {
            return Err(CliError::Numerical(format!("metric {} is not finite", bad.metric)));
        }
        let rows = reports.iter().map(|r| {
            vec![
                r.metric.clone(),
                r.value.to_string(),
                r.dataset.clone(),
                r.config_hash.clone(),
                r.seed.to_string(),
            ]
        });
        let name = format!("{}_report", stamp.command);
        self.write_csv(&format!("{name}.csv"), stamp, &["metric", "value", "dataset", "config_hash", "seed"], rows)?;
        self.write_json(
            &format!("{name}.json"),
            &serde_json::json!({
                "command": stamp.command,
                "seed": stamp.seed,
                "config_hash": stamp.config_hash,
                "metrics": reports,
                "notes": notes,
            }),
        )
    }

    /// Writes `<command>.manifest.json` listing the effective config and
    /// every file written; consumes the directory handle.
    pub fn finish(mut self, stamp: &Stamp, config: &RunConfig) -> Result<(), CliError> {
        let mut cfg = serde_json::to_value(config).expect("config serializes");
        if let serde_json::Value::Object(m) = &mut cfg {
            m.remove("out");
        }
        let manifest = serde_json::json!({
            "command": stamp.command,
            "seed": stamp.seed,
            "config_hash": stamp.config_hash,
            "outputs": self.written,
            "config": cfg,
        });
        let name = format!("{}.manifest.json", stamp.command);
        let p = self.root.join(&name);
        let mut f = fs::File::create(&p).map_err(|e| io_error(&p, e))?;
        let text = serde_json::to_string_pretty(&manifest).expect("serializable");
        writeln!(f, "{text}").map_err(|e| io_error(&p, e))?;
        self.written.clear();
        Ok(())
    }
}
