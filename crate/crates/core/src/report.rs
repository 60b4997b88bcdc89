//! Structured run reports.
//!
//! Every command writes one `report.toml` with stable key names: what ran,
//! with which seed and worker count, how it ended, and the full resolved
//! configuration, so a report alone reproduces its run. Values are built as
//! a TOML table; heterogeneous sections (cost summaries, check margins,
//! residual histories) attach as nested tables.

use std::path::{Path, PathBuf};

use toml::value::{Table, Value};

use crate::config::RunConfig;
use crate::error::{Error, Result};

/// One run report under construction. Keys set later overwrite earlier ones.
#[derive(Debug, Clone)]
pub struct Report {
    table: Table,
}

/// Tool version as baked in at compile time.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");

impl Report {
    pub fn new(command: &str, seed: u64, workers: Option<usize>) -> Self {
        let mut table = Table::new();
        table.insert("command".into(), Value::String(command.into()));
        table.insert("version".into(), Value::String(VERSION.into()));
        table.insert("seed".into(), Value::Integer(seed as i64));
        table.insert(
            "workers".into(),
            match workers {
                Some(w) => Value::Integer(w as i64),
                None => Value::String("default".into()),
            },
        );
        Report { table }
    }

    pub fn set(&mut self, key: &str, value: impl Into<Value>) {
        self.table.insert(key.into(), value.into());
    }

    pub fn set_float(&mut self, key: &str, value: f64) {
        self.table.insert(key.into(), Value::Float(value));
    }

    /// Nested section; created on first use.
    pub fn section(&mut self, name: &str) -> &mut Table {
        self.table
            .entry(name.to_string())
            .or_insert_with(|| Value::Table(Table::new()))
            .as_table_mut()
            .expect("report sections are tables")
    }

    /// Embeds the resolved configuration under `[config]`.
    pub fn embed_config(&mut self, config: &RunConfig) -> Result<()> {
        let value = Value::try_from(config)
            .map_err(|e| Error::Format(format!("config does not serialize: {e}")))?;
        self.table.insert("config".into(), value);
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(&self.table).expect("report tables serialize")
    }

    /// Writes `report.toml` into the directory and returns its path.
    pub fn write(&self, dir: &Path) -> Result<PathBuf> {
        let path = dir.join("report.toml");
        std::fs::write(&path, self.to_toml()).map_err(|e| {
            Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display())))
        })?;
        Ok(path)
    }
}

/// Table from label/value pairs; the building block for check sections.
pub fn float_table(pairs: &[(&str, f64)]) -> Table {
    let mut t = Table::new();
    for (k, v) in pairs {
        t.insert((*k).into(), Value::Float(*v));
    }
    t
}

/// TOML array from a float slice.
pub fn float_array(values: &[f64]) -> Value {
    Value::Array(values.iter().map(|v| Value::Float(*v)).collect())
}
