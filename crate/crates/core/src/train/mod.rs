//! Mini-batch Adam training, evaluation, checkpoints and run reports.

mod checkpoint;
mod report;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

pub use checkpoint::{config_fingerprint, Checkpoint, CKPT_MAGIC};
pub use report::{aggregate, Aggregate, EpochRecord, RunReport, SeedResult};

use crate::autodiff::Graph;
use crate::capsule::argmax_rows;
use crate::data::{batch_iter, make_batch, sequential_batches, RecordSource, TaskData};
use crate::error::{Error, Result};
use crate::metrics::{top2, EvalResult};
use crate::model::{count_params, ModelSpec};
use crate::nn::{AdamConfig, AdamState, ParamStore};
use crate::scalar::Scalar;
use crate::seed::SeedScheme;
use crate::tensor::Tensor;

pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainPlan {
    pub epochs_max: usize,
    pub seeds: Vec<u64>,
    /// Stop a seed once the primary evaluation set reaches this accuracy.
    pub early_stop_test_acc: Option<f64>,
    /// Evaluate every this many epochs (the last epoch is always evaluated).
    pub eval_every: usize,
    /// Write a checkpoint every this many epochs; 0 keeps only the final one.
    pub checkpoint_every: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    /// Multiplicative learning-rate decay applied per completed epoch.
    pub lr_decay: f64,
    /// Evaluation tag used for early stopping; the first evaluation set when unset.
    pub primary_eval: Option<String>,
}

impl Default for TrainPlan {
    fn default() -> Self {
        TrainPlan {
            epochs_max: 30,
            seeds: vec![0, 1, 2, 3, 4],
            early_stop_test_acc: None,
            eval_every: 1,
            checkpoint_every: 0,
            batch_size: 128,
            adam: AdamConfig::default(),
            lr_decay: 1.0,
            primary_eval: None,
        }
    }
}

impl TrainPlan {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.epochs_max == 0 {
            return bad("epochs_max must be positive".into());
        }
        if self.seeds.is_empty() {
            return bad("at least one seed is required".into());
        }
        if self.batch_size == 0 || self.eval_every == 0 {
            return bad("batch_size and eval_every must be positive".into());
        }
        if !(self.adam.lr > 0.0 && self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return bad(format!("need lr > 0 and 0 < lr_decay <= 1, got {} and {}", self.adam.lr, self.lr_decay));
        }
        if let Some(a) = self.early_stop_test_acc {
            if !(a > 0.0 && a < 1.0) {
                return bad(format!("early_stop_test_acc {a} outside (0, 1)"));
            }
        }
        Ok(())
    }
}

/// Where checkpoints go; nothing is written when `dir` is `None`.
#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    pub checkpoint_dir: Option<PathBuf>,
    pub resume: bool,
    /// Print one line per epoch to stderr.
    pub verbose: bool,
}

fn seed_dir(dir: &Path, seed: u64) -> PathBuf {
    dir.join(format!("seed-{seed}"))
}

pub fn final_checkpoint_path(dir: &Path, seed: u64) -> PathBuf {
    seed_dir(dir, seed).join("final.ckpt")
}

fn latest_checkpoint(dir: &Path, seed: u64) -> Option<PathBuf> {
    let d = seed_dir(dir, seed);
    let fin = d.join("final.ckpt");
    if fin.exists() {
        return Some(fin);
    }
    let mut best: Option<(u64, PathBuf)> = None;
    for entry in std::fs::read_dir(&d).ok()?.flatten() {
        let name = entry.file_name().to_string_lossy().into_owned();
        if let Some(e) = name.strip_prefix("epoch-").and_then(|s| s.strip_suffix(".ckpt")).and_then(|s| s.parse().ok()) {
            if best.as_ref().is_none_or(|(b, _)| e > *b) {
                best = Some((e, entry.path()));
            }
        }
    }
    best.map(|(_, p)| p)
}

/// Number of records whose prediction is correct: argmax for one label,
/// top-2 set equality for two.
fn count_hits<T: Scalar>(probs: &Tensor<T>, labels: &[Vec<usize>]) -> usize {
    let n = probs.shape()[1];
    labels
        .iter()
        .enumerate()
        .filter(|(b, ls)| {
            let row = &probs.data()[b * n..(b + 1) * n];
            match ls.as_slice() {
                [l] => argmax_rows(&Tensor::new([1, n], row.to_vec()).expect("row"))[0] == *l,
                [a, c] => {
                    let [p, q] = top2(row);
                    (p == *a && q == *c) || (p == *c && q == *a)
                }
                _ => false,
            }
        })
        .count()
}

fn param_norms<T: Scalar>(store: &ParamStore<T>) -> String {
    store
        .iter()
        .map(|(n, t)| format!("{n}={:.4e}", t.sq_norm().to_f64().unwrap_or(f64::NAN).sqrt()))
        .collect::<Vec<_>>()
        .join(", ")
}

/// One optimisation step. Returns the batch loss and the number of correct
/// predictions.
pub fn train_step<T: Scalar>(
    spec: &ModelSpec,
    store: &mut ParamStore<T>,
    adam: &mut AdamState<T>,
    images: Tensor<T>,
    targets: &crate::model::Targets<T>,
) -> Result<(f64, usize)> {
    let mut g = Graph::new();
    let p = store.bind(&mut g);
    let x = g.constant(images);
    let fwd = spec.forward(&mut g, &p, x)?;
    let parts = spec.loss(&mut g, &p, &fwd, targets)?;
    let loss = g.value(parts.total).item().to_f64().unwrap_or(f64::NAN);
    if !loss.is_finite() {
        return Err(Error::NonFinite { op: "loss" });
    }
    let hits = count_hits(g.value(fwd.probs), &targets.labels);
    g.backward(parts.total)?;
    let grads = store.gradients(&g, &p);
    adam.step(store.tensors_mut(), &grads)?;
    Ok((loss, hits))
}

/// Accuracy of `store` on `src`, in batches of `batch_size`.
pub fn evaluate<T: Scalar>(
    spec: &ModelSpec,
    store: &ParamStore<T>,
    src: &dyn RecordSource,
    tag: &str,
    seed: u64,
    batch_size: usize,
) -> Result<EvalResult> {
    let n_cls = spec.cfg.num_classes;
    let single = src.labels_per_record() == 1;
    let (mut hits, mut hit_c, mut seen_c) = (0usize, vec![0usize; n_cls], vec![0usize; n_cls]);
    for idx in sequential_batches(src.len(), batch_size) {
        let (x, t) = make_batch::<T>(src, &idx);
        let probs = spec.infer(store, x)?.probs;
        if single {
            let labels: Vec<usize> = t.labels.iter().map(|l| l[0]).collect();
            for (p, &l) in argmax_rows(&probs).iter().zip(&labels) {
                seen_c[l] += 1;
                hit_c[l] += (*p == l) as usize;
            }
        }
        hits += count_hits(&probs, &t.labels);
    }
    let n = src.len();
    let per_class_accuracy = if single {
        hit_c.iter().zip(&seen_c).map(|(&h, &s)| if s == 0 { f64::NAN } else { h as f64 / s as f64 }).collect()
    } else {
        Vec::new()
    };
    Ok(EvalResult {
        dataset_tag: tag.to_string(),
        n_examples: n,
        accuracy: if n == 0 { 0.0 } else { hits as f64 / n as f64 },
        per_class_accuracy,
        seed,
    })
}

/// Trained parameters and history of one seed.
pub struct SeedRun<T> {
    pub params: ParamStore<T>,
    pub history: Vec<EpochRecord>,
    pub result: SeedResult,
}

/// Trains one seed from scratch, or from `resume_from` when given.
pub fn train_seed<T: Scalar>(
    spec: &ModelSpec,
    plan: &TrainPlan,
    data: &TaskData,
    seed: u64,
    resume_from: Option<Checkpoint<T>>,
    opts: &RunOptions,
) -> Result<SeedRun<T>> {
    plan.validate()?;
    let seeds = SeedScheme::new(seed);
    let primary = match &plan.primary_eval {
        Some(tag) => Some(tag.clone()),
        None => data.evals.first().map(|(t, _)| t.clone()),
    };
    if let Some(tag) = &primary {
        if data.eval(tag).is_none() {
            return Err(Error::Config(format!("no evaluation set tagged {tag:?}")));
        }
    }
    let (mut store, mut adam, mut history, start) = match resume_from {
        Some(ck) => {
            if ck.seed != seed {
                return Err(Error::Checkpoint(format!("checkpoint is for seed {}, not {seed}", ck.seed)));
            }
            if ck.config != spec.cfg {
                return Err(Error::Checkpoint("checkpoint was written for a different configuration".into()));
            }
            (ck.params, ck.adam, ck.history, ck.epoch)
        }
        None => {
            let store = spec.init_params::<T>(&seeds)?;
            let adam = AdamState::new(plan.adam, store.tensors());
            (store, adam, Vec::new(), 0)
        }
    };
    let train = data.train.as_ref();
    let mut stopped_early = history.last().is_some_and(|r: &EpochRecord| reached(plan, primary.as_deref(), &r.test));
    let mut epoch = start;
    while !stopped_early && (epoch as usize) < plan.epochs_max {
        adam.config.lr = plan.adam.lr * plan.lr_decay.powi(epoch as i32);
        let (mut loss_sum, mut hits, mut seen) = (0.0, 0usize, 0usize);
        for (bi, idx) in batch_iter(train.len(), plan.batch_size, &seeds, epoch).into_iter().enumerate() {
            let (x, t) = make_batch::<T>(train, &idx);
            let (loss, h) = train_step(spec, &mut store, &mut adam, x, &t).map_err(|e| match e {
                Error::NonFinite { op } => Error::NumericalAbort {
                    epoch: epoch as usize + 1,
                    batch: bi,
                    detail: format!("non-finite {op}; parameter norms: {}", param_norms(&store)),
                },
                other => other,
            })?;
            loss_sum += loss * idx.len() as f64;
            hits += h;
            seen += idx.len();
        }
        epoch += 1;
        let last = epoch as usize == plan.epochs_max;
        let mut test = BTreeMap::new();
        if last || epoch as usize % plan.eval_every == 0 {
            for (tag, src) in &data.evals {
                test.insert(tag.clone(), evaluate(spec, &store, src.as_ref(), tag, seed, plan.batch_size)?.accuracy);
            }
        }
        let rec = EpochRecord {
            seed,
            epoch,
            train_loss: loss_sum / seen.max(1) as f64,
            train_acc: hits as f64 / seen.max(1) as f64,
            test,
        };
        if opts.verbose {
            eprintln!("seed {seed} epoch {epoch}: loss {:.4} train_acc {:.4} {:?}", rec.train_loss, rec.train_acc, rec.test);
        }
        stopped_early = reached(plan, primary.as_deref(), &rec.test) && !last;
        history.push(rec);
        if let Some(dir) = &opts.checkpoint_dir {
            if plan.checkpoint_every > 0 && epoch as usize % plan.checkpoint_every == 0 {
                let ck = Checkpoint { config: spec.cfg.clone(), params: store.clone(), adam: adam.clone(), seed, epoch, history: history.clone() };
                std::fs::create_dir_all(seed_dir(dir, seed)).map_err(|e| Error::io(dir, e))?;
                ck.save(&seed_dir(dir, seed).join(format!("epoch-{epoch}.ckpt")))?;
            }
        }
    }
    let last = history.last().cloned();
    let mut metrics = last.as_ref().map(|r| r.test.clone()).unwrap_or_default();
    if last.as_ref().is_none_or(|r| r.test.is_empty()) {
        for (tag, src) in &data.evals {
            metrics.insert(tag.clone(), evaluate(spec, &store, src.as_ref(), tag, seed, plan.batch_size)?.accuracy);
        }
    }
    if let Some(dir) = &opts.checkpoint_dir {
        let ck = Checkpoint { config: spec.cfg.clone(), params: store.clone(), adam, seed, epoch, history: history.clone() };
        std::fs::create_dir_all(seed_dir(dir, seed)).map_err(|e| Error::io(dir, e))?;
        ck.save(&final_checkpoint_path(dir, seed))?;
    }
    let result = SeedResult {
        seed,
        epochs_run: epoch,
        stopped_early,
        train_acc: last.map_or(0.0, |r| r.train_acc),
        metrics,
    };
    Ok(SeedRun { params: store, history, result })
}

fn reached(plan: &TrainPlan, primary: Option<&str>, test: &BTreeMap<String, f64>) -> bool {
    match (plan.early_stop_test_acc, primary.and_then(|t| test.get(t))) {
        (Some(th), Some(&acc)) => acc >= th,
        _ => false,
    }
}

/// Trains every seed of the plan in order and aggregates the results.
pub fn train<T: Scalar>(spec: &ModelSpec, plan: &TrainPlan, data: &TaskData, opts: &RunOptions) -> Result<RunReport> {
    plan.validate()?;
    let mut report = RunReport {
        tool_version: TOOL_VERSION.to_string(),
        config: spec.cfg.clone(),
        plan: plan.clone(),
        param_count: count_params(spec),
        epochs: Vec::new(),
        seeds: Vec::new(),
        summary: BTreeMap::new(),
    };
    for &seed in &plan.seeds {
        let resume = match (&opts.checkpoint_dir, opts.resume) {
            (Some(dir), true) => latest_checkpoint(dir, seed).map(|p| Checkpoint::load(&p, Some(&spec.cfg))).transpose()?,
            _ => None,
        };
        let run = train_seed::<T>(spec, plan, data, seed, resume, opts)?;
        report.epochs.extend(run.history);
        report.seeds.push(run.result);
    }
    report.summarize()?;
    Ok(report)
}
