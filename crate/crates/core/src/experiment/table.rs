use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{resolve_model, RUN_LOG};
use crate::error::{Error, Result};
use crate::model::{build_model, count_params, human_count};
use crate::train::{RunReport, TOOL_VERSION};

/// Column name rendering the model's parameter count.
pub const PARAMS_COLUMN: &str = "params";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TableKind {
    T1,
    T2,
    T3,
    T4,
    T5,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TableRowSpec {
    pub label: String,
    /// What this row changes relative to the baseline.
    pub delta: String,
    /// Run directory, relative to the table file.
    #[serde(default)]
    pub run: Option<PathBuf>,
    /// `[model]` table used for the parameter column when there is no run.
    #[serde(default)]
    pub model: Option<toml::Table>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TableSpec {
    pub table: TableKind,
    #[serde(default)]
    pub title: String,
    /// `params`, `train_acc` or an evaluation tag such as `affnist_test`.
    pub columns: Vec<String>,
    pub rows: Vec<TableRowSpec>,
}

impl TableSpec {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let spec: TableSpec = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        if let Some(r) = spec.rows.iter().find(|r| r.delta.trim().is_empty()) {
            return Err(Error::Config(format!("row {:?} does not name its delta", r.label)));
        }
        if spec.columns.is_empty() {
            return Err(Error::Config("table has no columns".into()));
        }
        Ok(spec)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TableRow {
    pub label: String,
    pub delta: String,
    /// One cell per column; empty where no value is available.
    pub cells: Vec<String>,
    /// `ok`, or why cells are missing.
    pub status: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TableOutput {
    pub table: TableKind,
    pub title: String,
    pub tool_version: String,
    pub columns: Vec<String>,
    pub rows: Vec<TableRow>,
    /// Run directories that could not be read.
    pub missing_runs: Vec<String>,
}

/// Fills one row per spec row from completed runs under `base`.
pub fn build_table(spec: &TableSpec, base: &Path) -> Result<TableOutput> {
    let mut rows = Vec::new();
    let mut missing_runs = Vec::new();
    for r in &spec.rows {
        let report = match &r.run {
            Some(p) => {
                let dir = base.join(p);
                match std::fs::read_to_string(dir.join(RUN_LOG)) {
                    Ok(text) => Some(RunReport::from_json_lines(&text)?),
                    Err(_) => {
                        missing_runs.push(dir.display().to_string());
                        None
                    }
                }
            }
            None => None,
        };
        let config = match (&report, &r.model) {
            (Some(rep), _) => Some(rep.config.clone()),
            (None, Some(m)) => Some(resolve_model(m.clone())?),
            (None, None) => None,
        };
        let mut cells = Vec::with_capacity(spec.columns.len());
        let mut gaps = Vec::new();
        for col in &spec.columns {
            let cell = if col == PARAMS_COLUMN {
                match &config {
                    Some(c) => Some(human_count(count_params(&build_model(c)?))),
                    None => None,
                }
            } else {
                report.as_ref().and_then(|rep| rep.summary.get(col)).map(|a| a.percent_cell())
            };
            if cell.is_none() {
                gaps.push(col.as_str());
            }
            cells.push(cell.unwrap_or_default());
        }
        let status = match (&r.run, &report, gaps.is_empty()) {
            (_, _, true) => "ok".to_string(),
            (Some(p), None, _) => format!("missing run {}", p.display()),
            (None, None, _) if config.is_none() => "empty row".to_string(),
            _ => format!("no value for {}", gaps.join(", ")),
        };
        rows.push(TableRow { label: r.label.clone(), delta: r.delta.clone(), cells, status });
    }
    Ok(TableOutput {
        table: spec.table,
        title: spec.title.clone(),
        tool_version: TOOL_VERSION.to_string(),
        columns: spec.columns.clone(),
        rows,
        missing_runs,
    })
}

impl TableOutput {
    /// Header `label,delta,<columns>,status`, one line per row.
    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header = vec!["label", "delta"];
        header.extend(self.columns.iter().map(String::as_str));
        header.push("status");
        w.write_record(&header).expect("in-memory write");
        for r in &self.rows {
            let mut rec = vec![r.label.as_str(), r.delta.as_str()];
            rec.extend(r.cells.iter().map(String::as_str));
            rec.push(&r.status);
            w.write_record(&rec).expect("in-memory write");
        }
        String::from_utf8(w.into_inner().expect("flush")).expect("utf-8")
    }

    /// Parses the rows and columns of [`Self::to_csv`] output.
    pub fn rows_from_csv(text: &str) -> Result<(Vec<String>, Vec<TableRow>)> {
        let mut rd = csv::Reader::from_reader(text.as_bytes());
        let bad = |e: csv::Error| Error::Data(format!("table csv: {e}"));
        let header: Vec<String> = rd.headers().map_err(bad)?.iter().map(str::to_string).collect();
        if header.len() < 3 || header[0] != "label" || header[1] != "delta" || header[header.len() - 1] != "status" {
            return Err(Error::Data("table csv: unexpected header".into()));
        }
        let columns = header[2..header.len() - 1].to_vec();
        let mut rows = Vec::new();
        for rec in rd.records() {
            let rec = rec.map_err(bad)?;
            let f: Vec<String> = rec.iter().map(str::to_string).collect();
            rows.push(TableRow {
                label: f[0].clone(),
                delta: f[1].clone(),
                cells: f[2..f.len() - 1].to_vec(),
                status: f[f.len() - 1].clone(),
            });
        }
        Ok((columns, rows))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("table serializes")
    }
}
