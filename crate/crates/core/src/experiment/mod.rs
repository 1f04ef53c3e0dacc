//! Experiment configuration files, run directories and table emission.

mod table;

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use toml::{Table, Value};

pub use table::{build_table, TableKind, TableOutput, TableRow, TableRowSpec, TableSpec, PARAMS_COLUMN};

use crate::data::{affnist_task, load_split, multimnist_task, resolve_data_dir, save_capsds, RecordSource, Split, TaskData};
use crate::error::{Error, Result};
use crate::model::{build_model, convnet_fc_lk, AblationConfig};
use crate::seed::SeedScheme;
use crate::train::{final_checkpoint_path, train, RunOptions, RunReport, TrainPlan, TOOL_VERSION};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    #[default]
    Affnist,
    Multimnist,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// MNIST IDX directory; falls back to `$CAPSLAB_DATA_DIR`, then `data/mnist`.
    pub dir: Option<PathBuf>,
    pub task: Task,
    /// Seed of every generated dataset, independent of the training seeds.
    pub seed: u64,
    /// Use only the first `n` training digits.
    pub train_limit: Option<usize>,
    pub test_limit: Option<usize>,
    pub pairs_per_image: usize,
    pub test_pairs_per_image: usize,
    pub variants_per_test_image: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            dir: None,
            task: Task::Affnist,
            seed: 0,
            train_limit: None,
            test_limit: None,
            pairs_per_image: 1,
            test_pairs_per_image: 1,
            variants_per_test_image: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ReportConfig {
    pub out_dir: PathBuf,
    /// Any of `jsonl`, `json`, `csv`.
    pub formats: Vec<String>,
    pub verbose: bool,
}

impl Default for ReportConfig {
    fn default() -> Self {
        ReportConfig { out_dir: PathBuf::from("runs/default"), formats: vec!["jsonl".into(), "json".into()], verbose: false }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub model: AblationConfig,
    pub data: DataConfig,
    pub train: TrainPlan,
    pub report: ReportConfig,
}

const FORMATS: [&str; 3] = ["jsonl", "json", "csv"];

/// Parses a flag value as a TOML value, falling back to a bare string.
fn parse_value(raw: &str) -> Value {
    match format!("v = {raw}").parse::<Table>() {
        Ok(mut t) => t.remove("v").expect("key present"),
        Err(_) => Value::String(raw.to_string()),
    }
}

/// Sets `section.key[.more]` in `doc`, creating intermediate tables.
pub fn apply_override(doc: &mut Table, path: &str, raw: &str) -> Result<()> {
    let parts: Vec<&str> = path.split('.').collect();
    if parts.len() < 2 || parts.iter().any(|p| p.is_empty()) {
        return Err(Error::Config(format!("override {path:?} must be a dotted path like model.kernel_size")));
    }
    let mut cur = doc;
    for p in &parts[..parts.len() - 1] {
        let entry = cur.entry(p.to_string()).or_insert_with(|| Value::Table(Table::new()));
        cur = entry.as_table_mut().ok_or_else(|| Error::Config(format!("override {path:?}: {p} is not a table")))?;
    }
    cur.insert(parts[parts.len() - 1].to_string(), parse_value(raw));
    Ok(())
}

/// Resolves the `[model]` table: an optional `preset` supplies the base,
/// explicit keys replace its fields. `convnet_fc_lk` without explicit
/// `fc_widths` gets widths fitted to the same-kernel CapsNet.
pub fn resolve_model(mut t: Table) -> Result<AblationConfig> {
    let preset = match t.remove("preset") {
        Some(Value::String(s)) => Some(s),
        Some(other) => return Err(Error::Config(format!("model.preset must be a string, got {other}"))),
        None => None,
    };
    let fit_lk = preset.as_deref() == Some("convnet_fc_lk") && !t.contains_key("fc_widths");
    let base = match &preset {
        Some(name) => AblationConfig::preset(name)?,
        None => AblationConfig::default(),
    };
    let mut merged = Table::try_from(&base).map_err(|e| Error::Config(e.to_string()))?;
    for (k, v) in t {
        if !merged.contains_key(&k) {
            return Err(Error::Config(format!("unknown key model.{k}")));
        }
        match (merged.get_mut(&k), v) {
            (Some(Value::Table(dst)), Value::Table(src)) => {
                for (kk, vv) in src {
                    if !dst.contains_key(&kk) {
                        return Err(Error::Config(format!("unknown key model.{k}.{kk}")));
                    }
                    dst.insert(kk, vv);
                }
            }
            (_, v) => {
                merged.insert(k, v);
            }
        }
    }
    let cfg: AblationConfig = section_into(merged, "model")?;
    let cfg = if fit_lk { convnet_fc_lk(cfg.kernel_size, &cfg)? } else { cfg };
    cfg.validate()?;
    Ok(cfg)
}

fn section_into<D: serde::de::DeserializeOwned>(t: Table, name: &str) -> Result<D> {
    t.try_into().map_err(|e: toml::de::Error| Error::Config(format!("[{name}]: {}", e.message())))
}

impl ExperimentConfig {
    /// Parses a TOML document, applies `section.key = value` overrides and
    /// validates the result.
    pub fn from_toml_str(text: &str, overrides: &[(String, String)]) -> Result<Self> {
        let mut doc: Table = text.parse().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        for (k, v) in overrides {
            apply_override(&mut doc, k, v)?;
        }
        for key in doc.keys() {
            if !["model", "data", "train", "report"].contains(&key.as_str()) {
                return Err(Error::Config(format!("unknown section [{key}]")));
            }
        }
        let section = |doc: &mut Table, name: &str| -> Result<Table> {
            match doc.remove(name) {
                None => Ok(Table::new()),
                Some(Value::Table(t)) => Ok(t),
                Some(_) => Err(Error::Config(format!("[{name}] must be a table"))),
            }
        };
        let model = resolve_model(section(&mut doc, "model")?)?;
        let data = section_into(section(&mut doc, "data")?, "data")?;
        let train = section_into(section(&mut doc, "train")?, "train")?;
        let report = section_into(section(&mut doc, "report")?, "report")?;
        let cfg = ExperimentConfig { model, data, train, report };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path, overrides: &[(String, String)]) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text, overrides).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        if let Some(f) = self.report.formats.iter().find(|f| !FORMATS.contains(&f.as_str())) {
            return Err(Error::Config(format!("unknown report format {f:?}, expected one of {FORMATS:?}")));
        }
        let d = &self.data;
        if d.pairs_per_image == 0 || d.test_pairs_per_image == 0 || d.pairs_per_image > 1000 || d.test_pairs_per_image > 1000 {
            return Err(Error::Config("pairs per image must be in [1, 1000]".into()));
        }
        if d.variants_per_test_image == 0 {
            return Err(Error::Config("data.variants_per_test_image must be >= 1".into()));
        }
        let side = match d.task {
            Task::Affnist => crate::data::AFFNIST_SIDE,
            Task::Multimnist => crate::data::MULTIMNIST_SIDE,
        };
        if self.model.input_size != side {
            return Err(Error::Config(format!("model.input_size {} does not match the {:?} task ({side})", self.model.input_size, d.task)));
        }
        Ok(())
    }

    /// The resolved configuration as TOML; parsing it back gives an equal value.
    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn data_dir(&self) -> PathBuf {
        resolve_data_dir(self.data.dir.as_deref())
    }

    /// Loads MNIST and builds the training and evaluation sets of the task.
    pub fn task_data(&self) -> Result<TaskData> {
        let dir = self.data_dir();
        let mut train = load_split(&dir, Split::Train)?;
        let mut test = load_split(&dir, Split::Test)?;
        if let Some(n) = self.data.train_limit {
            train = train.truncate(n);
        }
        if let Some(n) = self.data.test_limit {
            test = test.truncate(n);
        }
        let seeds = SeedScheme::new(self.data.seed);
        match self.data.task {
            Task::Affnist => affnist_task(&train, &test, &seeds, self.data.variants_per_test_image),
            Task::Multimnist => {
                multimnist_task(train, test, &seeds, self.data.pairs_per_image, self.data.test_pairs_per_image)
            }
        }
    }
}

/// Metadata written next to every artifact.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest<C> {
    pub tool: String,
    pub tool_version: String,
    pub kind: String,
    pub config: C,
}

impl<C: Serialize> Manifest<C> {
    pub fn new(kind: &str, config: C) -> Self {
        Manifest { tool: "capslab".into(), tool_version: TOOL_VERSION.into(), kind: kind.into(), config }
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).expect("manifest serializes");
        std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }
}

/// Creates `dir` for a new run. An existing non-empty directory is an error
/// unless `force`, in which case it is cleared.
pub fn prepare_run_dir(dir: &Path, force: bool) -> Result<()> {
    let occupied = dir.exists() && std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?.next().is_some();
    if occupied {
        if !force {
            return Err(Error::Config(format!("run directory {} already exists; pass --force to overwrite", dir.display())));
        }
        std::fs::remove_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

pub const RUN_CONFIG: &str = "config.toml";
pub const RUN_MANIFEST: &str = "manifest.json";
pub const RUN_LOG: &str = "report.jsonl";
pub const RUN_SUMMARY: &str = "summary.json";
pub const RUN_CSV: &str = "summary.csv";
pub const RUN_CHECKPOINTS: &str = "checkpoints";

/// Reads the resolved configuration stored in a run directory.
pub fn load_run_config(dir: &Path) -> Result<ExperimentConfig> {
    ExperimentConfig::load(&dir.join(RUN_CONFIG), &[])
}

/// Trains the configured model into `dir`: resolved config, manifest,
/// JSON-lines log, summaries and per-seed checkpoints. With `resume`, an
/// existing run directory is continued from its latest checkpoints.
pub fn run_experiment(cfg: &ExperimentConfig, dir: &Path, force: bool, resume: bool) -> Result<RunReport> {
    cfg.validate()?;
    if resume {
        let stored = load_run_config(dir)?;
        if stored.model != cfg.model || stored.data != cfg.data {
            return Err(Error::Config(format!("{} was created with a different model or data configuration", dir.display())));
        }
    } else {
        prepare_run_dir(dir, force)?;
    }
    let write = |name: &str, text: String| -> Result<()> {
        let path = dir.join(name);
        std::fs::write(&path, text).map_err(|e| Error::io(&path, e))
    };
    write(RUN_CONFIG, cfg.to_toml_string())?;
    Manifest::new("run", cfg).write(&dir.join(RUN_MANIFEST))?;
    let spec = build_model(&cfg.model)?;
    let data = cfg.task_data()?;
    let opts = RunOptions { checkpoint_dir: Some(dir.join(RUN_CHECKPOINTS)), resume, verbose: cfg.report.verbose };
    let report = train::<f32>(&spec, &cfg.train, &data, &opts)?;
    write(RUN_LOG, report.to_json_lines())?;
    if cfg.report.formats.iter().any(|f| f == "json") {
        write(RUN_SUMMARY, serde_json::to_string_pretty(&Manifest::new("summary", &report)).expect("report serializes") + "\n")?;
    }
    if cfg.report.formats.iter().any(|f| f == "csv") {
        let mut w = csv::Writer::from_writer(Vec::new());
        let wr = |w: &mut csv::Writer<Vec<u8>>, rec: &[String]| w.write_record(rec).expect("in-memory write");
        wr(&mut w, &["metric".into(), "mean".into(), "std".into(), "n".into(), "cell".into()]);
        for (k, a) in &report.summary {
            let std = a.std.map(|s| s.to_string()).unwrap_or_default();
            wr(&mut w, &[k.clone(), a.mean.to_string(), std, a.n.to_string(), a.percent_cell()]);
        }
        write(RUN_CSV, String::from_utf8(w.into_inner().expect("flush")).expect("utf-8"))?;
    }
    Ok(report)
}

/// Final checkpoint of `seed` in a run directory.
pub fn run_checkpoint(dir: &Path, seed: u64) -> PathBuf {
    final_checkpoint_path(&dir.join(RUN_CHECKPOINTS), seed)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetFile {
    pub name: String,
    pub records: usize,
    pub sha256: String,
}

/// Writes every split of the configured task as CAPSDS files in `out`, plus
/// `manifest.json` with counts and content hashes.
pub fn generate_datasets(cfg: &ExperimentConfig, out: &Path) -> Result<Vec<DatasetFile>> {
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let data = cfg.task_data()?;
    let mut files = Vec::new();
    let mut save = |name: String, src: &dyn RecordSource| -> Result<()> {
        let sha256 = save_capsds(&out.join(&name), src)?;
        files.push(DatasetFile { name, records: src.len(), sha256 });
        Ok(())
    };
    save("train.capsds".into(), data.train.as_ref())?;
    for (tag, src) in &data.evals {
        save(format!("{tag}.capsds"), src.as_ref())?;
    }
    #[derive(Serialize)]
    struct DataManifest<'a> {
        data: &'a DataConfig,
        files: &'a [DatasetFile],
    }
    Manifest::new("datasets", DataManifest { data: &cfg.data, files: &files }).write(&out.join(RUN_MANIFEST))?;
    Ok(files)
}
