//! Report files: a JSON document, an aligned text table and plot-ready CSV,
//! all stamped with the config digest.

use std::path::{Path, PathBuf};

use anyhow::Context as _;
use selfexplain::selfexplain::write_atomic;
use serde::Serialize;
use serde_json::json;

#[derive(Debug, Clone, PartialEq)]
pub enum Cell {
    Text(String),
    Num(f64),
    Int(usize),
    Missing,
}

impl Cell {
    fn for_text(&self) -> String {
        match self {
            Cell::Text(s) => s.clone(),
            Cell::Num(v) => format!("{v:.4}"),
            Cell::Int(v) => v.to_string(),
            Cell::Missing => "-".into(),
        }
    }

    fn for_csv(&self) -> String {
        match self {
            Cell::Text(s) => s.clone(),
            Cell::Num(v) => v.to_string(),
            Cell::Int(v) => v.to_string(),
            Cell::Missing => String::new(),
        }
    }
}

impl From<&str> for Cell {
    fn from(s: &str) -> Self {
        Cell::Text(s.to_string())
    }
}

impl From<String> for Cell {
    fn from(s: String) -> Self {
        Cell::Text(s)
    }
}

impl From<f64> for Cell {
    fn from(v: f64) -> Self {
        Cell::Num(v)
    }
}

impl From<usize> for Cell {
    fn from(v: usize) -> Self {
        Cell::Int(v)
    }
}

impl From<Option<f64>> for Cell {
    fn from(v: Option<f64>) -> Self {
        v.map_or(Cell::Missing, Cell::Num)
    }
}

#[derive(Debug, Clone, Default)]
pub struct Table {
    pub name: String,
    pub headers: Vec<String>,
    pub rows: Vec<Vec<Cell>>,
}

impl Table {
    pub fn new(name: &str, headers: &[&str]) -> Self {
        Table {
            name: name.to_string(),
            headers: headers.iter().map(|h| h.to_string()).collect(),
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, row: Vec<Cell>) {
        debug_assert_eq!(row.len(), self.headers.len());
        self.rows.push(row);
    }

    /// Left-aligned text columns separated by two spaces.
    pub fn aligned(&self) -> String {
        let cells: Vec<Vec<String>> = self
            .rows
            .iter()
            .map(|r| r.iter().map(Cell::for_text).collect())
            .collect();
        let mut widths: Vec<usize> = self.headers.iter().map(|h| h.chars().count()).collect();
        for row in &cells {
            for (w, c) in widths.iter_mut().zip(row) {
                *w = (*w).max(c.chars().count());
            }
        }
        let line = |row: &[String]| {
            let padded: Vec<String> = row
                .iter()
                .zip(&widths)
                .map(|(c, w)| format!("{c:<w$}"))
                .collect();
            padded.join("  ").trim_end().to_string() + "\n"
        };
        let mut out = line(&self.headers);
        for row in &cells {
            out.push_str(&line(row));
        }
        out
    }

    /// CSV with a leading `config_digest` column.
    pub fn to_csv(&self, config_digest: &str) -> anyhow::Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header = vec!["config_digest".to_string()];
        header.extend(self.headers.iter().cloned());
        w.write_record(&header)?;
        for row in &self.rows {
            let mut rec = vec![config_digest.to_string()];
            rec.extend(row.iter().map(Cell::for_csv));
            w.write_record(&rec)?;
        }
        Ok(String::from_utf8(w.into_inner()?)?)
    }
}

/// Identity stamped on every report.
#[derive(Debug, Clone, Serialize)]
pub struct Stamp {
    pub experiment_id: String,
    pub config_digest: String,
}

/// Writes `<stem>.json`, `<stem>.txt` and one `<stem>[-<table>].csv` per
/// table (the first table takes the bare stem).
pub fn write_report<T: Serialize>(
    dir: &Path,
    stem: &str,
    kind: &str,
    stamp: &Stamp,
    body: &T,
    tables: &[Table],
) -> anyhow::Result<Vec<PathBuf>> {
    let mut written = Vec::new();
    let doc = json!({
        "kind": kind,
        "experiment_id": stamp.experiment_id,
        "config_digest": stamp.config_digest,
        "report": body,
    });
    let json_path = dir.join(format!("{stem}.json"));
    let mut text = serde_json::to_string_pretty(&doc)?;
    text.push('\n');
    write_atomic(&json_path, text.as_bytes())
        .with_context(|| format!("writing {}", json_path.display()))?;
    written.push(json_path);

    let mut summary = format!(
        "# {kind}\n# experiment: {}\n# config_digest: {}\n",
        stamp.experiment_id, stamp.config_digest
    );
    for (i, table) in tables.iter().enumerate() {
        summary.push_str(&format!("\n## {}\n", table.name));
        summary.push_str(&table.aligned());
        let csv_path = if i == 0 {
            dir.join(format!("{stem}.csv"))
        } else {
            dir.join(format!("{stem}-{}.csv", table.name))
        };
        write_atomic(&csv_path, table.to_csv(&stamp.config_digest)?.as_bytes())?;
        written.push(csv_path);
    }
    let txt_path = dir.join(format!("{stem}.txt"));
    write_atomic(&txt_path, summary.as_bytes())?;
    written.push(txt_path);
    Ok(written)
}
