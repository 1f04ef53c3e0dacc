use std::path::{Path, PathBuf};
use std::process::ExitCode;

use capslab::data::MNIST_TEST;
use capslab::experiment::{
    build_table, generate_datasets, load_run_config, resolve_model, run_checkpoint, run_experiment, ExperimentConfig,
    Manifest, TableSpec,
};
use capslab::metrics::{
    compactness_score, compose_grid, mean_abs_change, perturb_sweep, Factor, PerturbationSweepSpec, DEFAULT_VARIATIONS,
};
use capslab::model::{build_model, count_params, human_count};
use capslab::train::{evaluate, Checkpoint};
use capslab::{Error, Result};
use clap::{Parser, Subcommand};

#[derive(Parser)]
#[command(name = "capslab", version, about = "Capsule and ConvNet robustness ablations")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate the task's datasets as CAPSDS files with a manifest.
    Datagen {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// `--section.key value` overrides.
        #[arg(trailing_var_arg = true, allow_hyphen_values = true)]
        overrides: Vec<String>,
    },
    /// Train every seed of a configuration into a run directory.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Run directory; defaults to `report.out_dir`.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Replace an existing run directory.
        #[arg(long)]
        force: bool,
        /// Continue an existing run from its latest checkpoints.
        #[arg(long, conflicts_with = "force")]
        resume: bool,
        #[arg(trailing_var_arg = true, allow_hyphen_values = true)]
        overrides: Vec<String>,
    },
    /// Evaluate a run's final checkpoints on its evaluation sets.
    Eval {
        #[arg(long)]
        run: PathBuf,
        /// Only this seed (default: every seed of the run).
        #[arg(long)]
        seed: Option<u64>,
        /// Only this dataset tag.
        #[arg(long)]
        dataset: Option<String>,
    },
    /// Assemble a results table from completed runs.
    Table {
        #[arg(long)]
        spec: PathBuf,
        /// Output prefix; `.csv` and `.json` are appended.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Decode perturbed representations of one test image into a grid.
    Perturb {
        #[arg(long)]
        run: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Test-set record to perturb.
        #[arg(long, default_value_t = 0)]
        index: usize,
        /// Comma-separated representation dimensions (default: the 16 of the predicted class).
        #[arg(long, value_delimiter = ',')]
        dims: Vec<usize>,
        #[arg(long, allow_hyphen_values = true)]
        lo: Option<f64>,
        #[arg(long, allow_hyphen_values = true)]
        hi: Option<f64>,
        #[arg(long)]
        step: Option<f64>,
        #[arg(long)]
        out: PathBuf,
        /// Also write a PNG next to the PGM.
        #[arg(long)]
        png: bool,
    },
    /// Semantic compactness of the ground-truth class representation.
    Compactness {
        #[arg(long)]
        run: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// A factor name, or `all`.
        #[arg(long, default_value = "all")]
        factor: String,
        #[arg(long, default_value_t = 100)]
        images: usize,
        #[arg(long, default_value_t = DEFAULT_VARIATIONS)]
        variations: usize,
        /// JSON output file (default: stdout).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print a model's parameter count.
    Params {
        #[arg(long)]
        preset: Option<String>,
        #[arg(long)]
        config: Option<PathBuf>,
        /// `--model.key value` overrides.
        #[arg(trailing_var_arg = true, allow_hyphen_values = true)]
        overrides: Vec<String>,
    },
}

/// Pairs `--a.b value` and `--a.b=value` tokens.
fn parse_overrides(tokens: &[String]) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    let mut it = tokens.iter();
    while let Some(tok) = it.next() {
        let key = tok
            .strip_prefix("--")
            .ok_or_else(|| Error::Config(format!("unexpected argument {tok:?}; overrides look like --model.kernel_size 3")))?;
        match key.split_once('=') {
            Some((k, v)) => out.push((k.to_string(), v.to_string())),
            None => {
                let v = it.next().ok_or_else(|| Error::Config(format!("override --{key} has no value")))?;
                out.push((key.to_string(), v.clone()));
            }
        }
    }
    Ok(out)
}

fn load_config(path: Option<&Path>, overrides: &[String]) -> Result<ExperimentConfig> {
    let ov = parse_overrides(overrides)?;
    match path {
        Some(p) => ExperimentConfig::load(p, &ov),
        None => ExperimentConfig::from_toml_str("", &ov),
    }
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value).expect("serializable") + "\n";
    std::fs::write(path, text).map_err(|e| Error::Io { path: path.to_path_buf(), source: e })
}

fn load_seed(run: &Path, seed: u64) -> Result<(ExperimentConfig, Checkpoint<f32>)> {
    let cfg = load_run_config(run)?;
    let ck = Checkpoint::<f32>::load(&run_checkpoint(run, seed), Some(&cfg.model))?;
    Ok((cfg, ck))
}

fn run(cli: Cli) -> Result<()> {
    match cli.cmd {
        Cmd::Datagen { config, out, overrides } => {
            let cfg = load_config(config.as_deref(), &overrides)?;
            for f in generate_datasets(&cfg, &out)? {
                println!("{}\t{}\t{}", f.name, f.records, f.sha256);
            }
        }
        Cmd::Train { config, out, force, resume, overrides } => {
            let cfg = match (resume, &out) {
                (true, Some(dir)) if config.is_none() => load_run_config(dir)?,
                _ => load_config(config.as_deref(), &overrides)?,
            };
            let dir = out.unwrap_or_else(|| cfg.report.out_dir.clone());
            let report = run_experiment(&cfg, &dir, force, resume)?;
            for (k, a) in &report.summary {
                println!("{k}\t{}", a.percent_cell());
            }
            eprintln!("run written to {}", dir.display());
        }
        Cmd::Eval { run, seed, dataset } => {
            let cfg = load_run_config(&run)?;
            let data = cfg.task_data()?;
            let spec = build_model(&cfg.model)?;
            let seeds = match seed {
                Some(s) => vec![s],
                None => cfg.train.seeds.clone(),
            };
            if let Some(tag) = &dataset {
                if data.eval(tag).is_none() {
                    return Err(Error::Config(format!("run has no evaluation set {tag:?}")));
                }
            }
            for s in seeds {
                let (_, ck) = load_seed(&run, s)?;
                for (tag, src) in data.evals.iter().filter(|(t, _)| dataset.as_ref().is_none_or(|d| d == t)) {
                    let r = evaluate(&spec, &ck.params, src.as_ref(), tag, s, cfg.train.batch_size)?;
                    println!("{}", serde_json::to_string(&r).expect("serializable"));
                }
            }
        }
        Cmd::Table { spec, out } => {
            let ts = TableSpec::load(&spec)?;
            let base = spec.parent().unwrap_or(Path::new("."));
            let table = build_table(&ts, base)?;
            let prefix = out.unwrap_or_else(|| spec.with_extension(""));
            let csv_path = prefix.with_extension("csv");
            std::fs::write(&csv_path, table.to_csv()).map_err(|e| Error::Io { path: csv_path.clone(), source: e })?;
            let json_path = prefix.with_extension("json");
            std::fs::write(&json_path, table.to_json() + "\n").map_err(|e| Error::Io { path: json_path, source: e })?;
            print!("{}", table.to_csv());
            for m in &table.missing_runs {
                eprintln!("missing run: {m}");
            }
        }
        Cmd::Perturb { run, seed, index, dims, lo, hi, step, out, png } => {
            let (cfg, ck) = load_seed(&run, seed)?;
            let spec = build_model(&cfg.model)?;
            let data = cfg.task_data()?;
            let (_, src) = data.evals.first().ok_or_else(|| Error::Data("task has no test set".into()))?;
            if index >= src.len() {
                return Err(Error::Config(format!("index {index} outside test set of {}", src.len())));
            }
            let image = src.get(index);
            std::fs::create_dir_all(&out).map_err(|e| Error::Io { path: out.clone(), source: e })?;
            let mut rows = Vec::new();
            let mut records = Vec::new();
            let mut dims = dims;
            let mut sweep0 = PerturbationSweepSpec::default_for(&spec, 0);
            sweep0.lo = lo.unwrap_or(sweep0.lo);
            sweep0.hi = hi.unwrap_or(sweep0.hi);
            sweep0.step = step.unwrap_or(sweep0.step);
            if dims.is_empty() {
                let first = perturb_sweep(&spec, &ck.params, &image, &sweep0)?;
                let d = cfg.model.d_out;
                dims = (first.predicted * d..(first.predicted + 1) * d).collect();
            }
            for &dim in &dims {
                let sweep = PerturbationSweepSpec { dimension: dim, ..sweep0 };
                let r = perturb_sweep(&spec, &ck.params, &image, &sweep)?;
                let change: Vec<f64> = r.columns.iter().map(|c| mean_abs_change(c, &r.base)).collect();
                records.push(serde_json::json!({
                    "dimension": dim, "predicted": r.predicted, "deltas": r.deltas, "mean_abs_change": change,
                }));
                rows.push(r.columns);
            }
            let grid = compose_grid(&rows, cfg.model.input_size, 2);
            grid.write_pgm(&out.join("grid.pgm"))?;
            if png {
                grid.write_png(&out.join("grid.png"))?;
            }
            let body = serde_json::json!({ "seed": seed, "index": index, "label": image.labels, "sweep": sweep0, "rows": records });
            write_json(&out.join("perturb.json"), &Manifest::new("perturb", serde_json::json!({ "model": cfg.model, "result": body })))?;
            eprintln!("{} rows x {} columns written to {}", rows.len(), sweep0.columns(), out.display());
        }
        Cmd::Compactness { run, seed, factor, images, variations, out } => {
            let (cfg, ck) = load_seed(&run, seed)?;
            let spec = build_model(&cfg.model)?;
            let data = cfg.task_data()?;
            let src = data
                .eval(MNIST_TEST)
                .or_else(|| data.evals.first().map(|(_, s)| s))
                .ok_or_else(|| Error::Data("task has no test set".into()))?;
            let recs: Vec<_> = (0..images.min(src.len())).map(|i| src.get(i)).collect();
            let factors = if factor == "all" { Factor::ALL.to_vec() } else { vec![factor.parse()?] };
            let mut reports = Vec::new();
            for f in factors {
                let r = compactness_score(&spec, &ck.params, &recs, f, variations)?;
                eprintln!("{}\t{:.6}", f, r.score);
                reports.push(r);
            }
            let doc = Manifest::new("compactness", serde_json::json!({ "model": cfg.model, "seed": seed, "reports": reports }));
            match out {
                Some(p) => write_json(&p, &doc)?,
                None => println!("{}", serde_json::to_string_pretty(&doc).expect("serializable")),
            }
        }
        Cmd::Params { preset, config, overrides } => {
            let model = match config {
                Some(p) => load_config(Some(&p), &overrides)?.model,
                None => {
                    let mut t = toml::Table::new();
                    if let Some(p) = preset {
                        t.insert("preset".into(), toml::Value::String(p));
                    }
                    let mut doc = toml::Table::new();
                    doc.insert("model".into(), toml::Value::Table(t));
                    for (k, v) in parse_overrides(&overrides)? {
                        let key = k.strip_prefix("model.").ok_or_else(|| Error::Config(format!("params accepts only model.* overrides, got {k}")))?;
                        capslab::experiment::apply_override(&mut doc, &format!("model.{key}"), &v)?;
                    }
                    let t = doc.remove("model").and_then(|v| v.as_table().cloned()).unwrap_or_default();
                    resolve_model(t)?
                }
            };
            let n = count_params(&build_model(&model)?);
            println!("{n}\t{}", human_count(n));
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
