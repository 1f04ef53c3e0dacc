use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::TrainPlan;
use crate::error::{Error, Result};
use crate::model::AblationConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub seed: u64,
    /// 1-based.
    pub epoch: u64,
    pub train_loss: f64,
    /// Running accuracy over the epoch's training batches.
    pub train_acc: f64,
    /// Evaluation accuracies by dataset tag; empty when not evaluated.
    pub test: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedResult {
    pub seed: u64,
    pub epochs_run: u64,
    pub stopped_early: bool,
    pub train_acc: f64,
    pub metrics: BTreeMap<String, f64>,
}

/// Mean and sample standard deviation (present only with two or more values).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub mean: f64,
    pub std: Option<f64>,
    pub n: usize,
}

pub fn aggregate(values: &[f64]) -> Result<Aggregate> {
    if values.is_empty() {
        return Err(Error::arg("aggregate", "no results to aggregate"));
    }
    let n = values.len();
    let mean = values.iter().sum::<f64>() / n as f64;
    let std = (n >= 2).then(|| (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt());
    Ok(Aggregate { mean, std, n })
}

impl Aggregate {
    /// Percentages as in `99.29 (± 0.13)`; the spread is omitted for one value.
    pub fn percent_cell(&self) -> String {
        match self.std {
            Some(s) => format!("{:.2} (± {:.2})", 100.0 * self.mean, 100.0 * s),
            None => format!("{:.2}", 100.0 * self.mean),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub tool_version: String,
    pub config: AblationConfig,
    pub plan: TrainPlan,
    pub param_count: usize,
    pub epochs: Vec<EpochRecord>,
    pub seeds: Vec<SeedResult>,
    pub summary: BTreeMap<String, Aggregate>,
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
enum Line {
    Epoch(EpochRecord),
    Summary(Box<SummaryLine>),
}

#[derive(Serialize, Deserialize)]
struct SummaryLine {
    tool_version: String,
    config: AblationConfig,
    plan: TrainPlan,
    param_count: usize,
    seeds: Vec<SeedResult>,
    summary: BTreeMap<String, Aggregate>,
}

impl RunReport {
    pub fn summarize(&mut self) -> Result<()> {
        let mut keys: Vec<String> = vec!["train_acc".into()];
        if let Some(first) = self.seeds.first() {
            keys.extend(first.metrics.keys().cloned());
        }
        self.summary.clear();
        for key in keys {
            let vals: Vec<f64> = self
                .seeds
                .iter()
                .filter_map(|s| if key == "train_acc" { Some(s.train_acc) } else { s.metrics.get(&key).copied() })
                .collect();
            if !vals.is_empty() {
                self.summary.insert(key, aggregate(&vals)?);
            }
        }
        Ok(())
    }

    /// One JSON object per epoch, then the summary object.
    pub fn to_json_lines(&self) -> String {
        let mut out = String::new();
        for e in &self.epochs {
            out.push_str(&serde_json::to_string(&Line::Epoch(e.clone())).expect("serializable"));
            out.push('\n');
        }
        let s = SummaryLine {
            tool_version: self.tool_version.clone(),
            config: self.config.clone(),
            plan: self.plan.clone(),
            param_count: self.param_count,
            seeds: self.seeds.clone(),
            summary: self.summary.clone(),
        };
        out.push_str(&serde_json::to_string(&Line::Summary(Box::new(s))).expect("serializable"));
        out.push('\n');
        out
    }

    pub fn from_json_lines(text: &str) -> Result<Self> {
        let mut epochs = Vec::new();
        let mut summary = None;
        for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            match serde_json::from_str::<Line>(line).map_err(|e| Error::Data(format!("report line {}: {e}", i + 1)))? {
                Line::Epoch(e) => epochs.push(e),
                Line::Summary(s) => summary = Some(s),
            }
        }
        let s = summary.ok_or_else(|| Error::Data("report has no summary line".into()))?;
        Ok(RunReport {
            tool_version: s.tool_version,
            config: s.config,
            plan: s.plan,
            param_count: s.param_count,
            epochs,
            seeds: s.seeds,
            summary: s.summary,
        })
    }
}
