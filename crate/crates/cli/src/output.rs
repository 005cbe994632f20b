//! Result tables and their CSV/JSON serialisation.
//!
//! CSV files start with one `#` comment line carrying the generation
//! timestamp; everything after it is a deterministic function of the config
//! and seed. JSON summaries use sorted keys.

use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use serde::Serialize;
use serde_json::{json, Map, Value};

use crate::config::Format;
use crate::Subcommand;

/// One CSV table: fixed column order, every cell pre-formatted.
#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    pub name: String,
    pub columns: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    pub fn new(name: &str, columns: &[&str]) -> Self {
        Self { name: name.into(), columns: columns.iter().map(|c| c.to_string()).collect(), rows: Vec::new() }
    }

    pub fn push(&mut self, row: Vec<String>) {
        debug_assert_eq!(row.len(), self.columns.len());
        self.rows.push(row);
    }

    fn to_json(&self) -> Value {
        Value::Array(
            self.rows
                .iter()
                .map(|r| {
                    let obj: Map<String, Value> = self
                        .columns
                        .iter()
                        .zip(r)
                        .map(|(c, v)| (c.clone(), v.parse::<f64>().map_or_else(|_| json!(v), |x| json!(x))))
                        .collect();
                    Value::Object(obj)
                })
                .collect(),
        )
    }
}

/// Seed, replica counts and resolutions behind every emitted number.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct Provenance {
    pub seed: u64,
    pub replicas: Option<u64>,
    pub dt: Option<f64>,
    pub dx: Option<f64>,
    pub eps: Option<f64>,
}

/// What a subcommand produced.
#[derive(Debug, Clone, PartialEq)]
pub struct Outcome {
    pub pass: bool,
    pub tables: Vec<Table>,
    pub summary: Value,
    pub provenance: Provenance,
    /// Human-readable lines for the terminal.
    pub messages: Vec<String>,
}

/// Shortest round-trip decimal form; `.` separator regardless of locale.
pub fn num(x: f64) -> String {
    if x.is_nan() {
        "nan".into()
    } else if x.is_infinite() {
        if x > 0.0 { "inf".into() } else { "-inf".into() }
    } else {
        format!("{x}")
    }
}

/// CSV body (everything after the timestamp line).
pub fn csv_body(table: &Table) -> String {
    let mut s = table.columns.join(",");
    s.push('\n');
    for r in &table.rows {
        s.push_str(&r.join(","));
        s.push('\n');
    }
    s
}

pub fn write_outputs(
    dir: &Path,
    sub: Subcommand,
    format: Format,
    outcome: &Outcome,
    generated_at: &str,
) -> io::Result<Vec<PathBuf>> {
    fs::create_dir_all(dir)?;
    let mut written = Vec::new();
    if matches!(format, Format::Csv | Format::Both) {
        for t in &outcome.tables {
            let path = dir.join(format!("{sub}-{}.csv", t.name));
            let mut f = fs::File::create(&path)?;
            writeln!(f, "# sbbm {sub} generated_at={generated_at}")?;
            f.write_all(csv_body(t).as_bytes())?;
            written.push(path);
        }
    }
    if matches!(format, Format::Json | Format::Both) {
        let tables: Map<String, Value> = outcome.tables.iter().map(|t| (t.name.clone(), t.to_json())).collect();
        let doc = json!({
            "subcommand": sub.name(),
            "generated_at": generated_at,
            "pass": outcome.pass,
            "provenance": outcome.provenance,
            "summary": outcome.summary,
            "tables": tables,
        });
        let path = dir.join(format!("{sub}.json"));
        fs::write(&path, serde_json::to_string_pretty(&doc)? + "\n")?;
        written.push(path);
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn numbers_round_trip() {
        for x in [0.1, 1.0 / 3.0, 1e-300, -2.5, 1e22] {
            assert_eq!(num(x).parse::<f64>().unwrap(), x);
        }
        assert_eq!(num(f64::INFINITY), "inf");
        assert_eq!(num(1.0), "1");
    }

    #[test]
    fn csv_has_fixed_columns() {
        let mut t = Table::new("x", &["a", "b"]);
        t.push(vec![num(1.0), num(0.5)]);
        assert_eq!(csv_body(&t), "a,b\n1,0.5\n");
    }

    #[test]
    fn json_cells_are_numeric_when_possible() {
        let mut t = Table::new("x", &["name", "value"]);
        t.push(vec!["z_star".into(), num(1.0)]);
        assert_eq!(t.to_json(), json!([{"name": "z_star", "value": 1.0}]));
    }
}
