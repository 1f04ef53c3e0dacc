mod common;

use std::sync::Arc;

use capslab::data::{gen_train_canvases, load_split, make_batch, InMemory, RecordSource, Split, TaskData, MNIST_TEST};
use capslab::model::{build_model, AblationConfig, LossKind, ReconstructionKind};
use capslab::nn::{AdamConfig, AdamState};
use capslab::seed::SeedScheme;
use capslab::train::{evaluate, train, train_seed, train_step, Checkpoint, RunOptions, TrainPlan};
use capslab::{Error, Graph64};
use common::*;

fn canvases(n: usize) -> InMemory {
    let mut digits = load_split(&mnist_dir(), Split::Train).unwrap();
    digits.pixels.truncate(n * 784);
    digits.labels.truncate(n);
    InMemory::new(gen_train_canvases(&digits, &SeedScheme::new(0))).unwrap()
}

fn preset(name: &str, width: usize) -> AblationConfig {
    AblationConfig { channel_width: width, ..AblationConfig::preset(name).unwrap() }
}

/// Full-batch Adam on `src`; returns per-step (loss, hits).
fn overfit(cfg: &AblationConfig, src: &InMemory, steps: usize) -> (Vec<(f64, usize)>, capslab::nn::ParamStore<f32>) {
    let spec = build_model(cfg).unwrap();
    let mut store = spec.init_params::<f32>(&SeedScheme::new(0)).unwrap();
    let mut adam = AdamState::new(AdamConfig::default(), store.tensors());
    let idx: Vec<usize> = (0..src.len()).collect();
    let mut log = Vec::new();
    for _ in 0..steps {
        let (x, t) = make_batch::<f32>(src, &idx);
        log.push(train_step(&spec, &mut store, &mut adam, x, &t).unwrap());
    }
    (log, store)
}

#[test]
fn convnet_avg_overfits_64_samples_within_200_steps() {
    let src = canvases(64);
    let cfg = preset("convnet_avg", 32);
    let (log, store) = overfit(&cfg, &src, 200);
    let first_perfect = log.iter().position(|&(_, h)| h == 64);
    assert!(first_perfect.is_some(), "best {} / 64", log.iter().map(|l| l.1).max().unwrap());
    assert!(log.last().unwrap().0 < log[0].0);
    let spec = build_model(&cfg).unwrap();
    let a = evaluate(&spec, &store, &src, "train", 0, 32).unwrap();
    let b = evaluate(&spec, &store, &src, "train", 0, 17).unwrap();
    assert_eq!(a.accuracy, 1.0);
    assert_eq!(a, b, "evaluation does not depend on batching");
}

#[test]
fn capsnet_loss_falls_tenfold_within_50_steps() {
    let src = canvases(64);
    let (log, _) = overfit(&preset("capsnet", 32), &src, 50);
    let (first, last) = (log[0].0, log.last().unwrap().0);
    assert!(last < 0.1 * first, "loss {first:.4} -> {last:.4}");
}

#[test]
fn untrained_outputs_are_well_formed() {
    let src = canvases(8);
    let idx: Vec<usize> = (0..8).collect();
    for name in ["convnet_avg", "convnet_fc", "convnet_r", "convnet_cr", "convnet_cr_sf", "capsnet", "aff_capsnet"] {
        let spec = build_model(&preset(name, 8)).unwrap();
        let store = spec.init_params::<f32>(&SeedScheme::new(1)).unwrap();
        let (x, _) = make_batch::<f32>(&src, &idx);
        let probs = spec.infer(&store, x).unwrap().probs;
        for row in probs.data().chunks(10) {
            assert!(row.iter().all(|&p| p.is_finite() && p >= 0.0), "{name}");
            if spec.cfg.is_capsule_like() && spec.cfg.squash_enabled {
                assert!(row.iter().all(|&p| p < 1.0), "{name}");
            } else if spec.cfg.loss == LossKind::CrossEntropy {
                assert!((row.iter().sum::<f32>() - 1.0).abs() < 1e-6, "{name}");
            }
        }
    }
}

#[test]
fn total_loss_is_classification_plus_scaled_reconstruction() {
    let src = canvases(4);
    let idx: Vec<usize> = (0..4).collect();
    for recon in [ReconstructionKind::Conditional, ReconstructionKind::Normal, ReconstructionKind::None] {
        let cfg = AblationConfig { reconstruction: recon, ..preset("capsnet", 8) };
        let spec = build_model(&cfg).unwrap();
        let store = spec.init_params::<f64>(&SeedScheme::new(2)).unwrap();
        let (x, t) = make_batch::<f64>(&src, &idx);
        let mut g = Graph64::new();
        let p = store.bind(&mut g);
        let xv = g.constant(x);
        let fwd = spec.forward(&mut g, &p, xv).unwrap();
        let parts = spec.loss(&mut g, &p, &fwd, &t).unwrap();
        let cls = g.value(parts.classification).item();
        let total = g.value(parts.total).item();
        match parts.reconstruction {
            Some(r) => {
                let r = g.value(r).item();
                assert!(r > 0.0);
                assert_eq!(total, cls + r * 0.0005);
            }
            None => {
                assert_eq!(recon, ReconstructionKind::None);
                assert_eq!(total, cls);
            }
        }
    }
}

fn mnist_task(train_n: usize, test_n: usize) -> TaskData {
    let train_src = canvases(train_n);
    let mut test = load_split(&mnist_dir(), Split::Test).unwrap();
    test.pixels.truncate(test_n * 784);
    test.labels.truncate(test_n);
    let centred = InMemory::new(capslab::data::gen_centered(&test)).unwrap();
    TaskData { train: Arc::new(train_src), evals: vec![(MNIST_TEST.into(), Arc::new(centred))] }
}

#[test]
fn early_stop_fires_at_the_first_evaluation_reaching_the_threshold() {
    let data = mnist_task(10_000, 1000);
    let spec = build_model(&preset("convnet_avg", 16)).unwrap();
    let plan = TrainPlan { epochs_max: 6, seeds: vec![0], early_stop_test_acc: Some(0.5), ..TrainPlan::default() };
    let run = train_seed::<f32>(&spec, &plan, &data, 0, None, &RunOptions::default()).unwrap();
    let accs: Vec<f64> = run.history.iter().map(|r| r.test[MNIST_TEST]).collect();
    let stop = accs.iter().position(|&a| a >= 0.5).expect("threshold reached");
    assert_eq!(run.history.len(), stop + 1, "{accs:?}");
    assert!(run.result.stopped_early);
    assert_eq!(run.result.epochs_run as usize, stop + 1);
}

#[test]
fn diverging_training_aborts_with_parameter_norms() {
    let data = mnist_task(256, 64);
    let spec = build_model(&preset("convnet_avg", 4)).unwrap();
    let adam = AdamConfig { lr: 1e30, ..AdamConfig::default() };
    let plan = TrainPlan { epochs_max: 3, seeds: vec![0], batch_size: 64, adam, ..TrainPlan::default() };
    match train::<f32>(&spec, &plan, &data, &RunOptions::default()) {
        Err(e @ Error::NumericalAbort { .. }) => {
            assert_eq!(e.exit_code(), 4);
            assert!(e.to_string().contains("conv1.weight"), "{e}");
        }
        other => panic!("expected a numerical abort, got {:?}", other.map(|r| r.summary)),
    }
}

#[test]
fn resume_rejects_a_different_configuration() {
    let data = mnist_task(128, 32);
    let dir = tempfile::tempdir().unwrap();
    let spec = build_model(&preset("convnet_avg", 4)).unwrap();
    let plan = TrainPlan { epochs_max: 1, seeds: vec![0], batch_size: 64, ..TrainPlan::default() };
    let opts = RunOptions { checkpoint_dir: Some(dir.path().to_path_buf()), resume: false, verbose: false };
    train::<f32>(&spec, &plan, &data, &opts).unwrap();
    let other = build_model(&preset("convnet_avg", 5)).unwrap();
    let ck = Checkpoint::<f32>::load(&dir.path().join("seed-0/final.ckpt"), None).unwrap();
    assert!(train_seed::<f32>(&other, &plan, &data, 0, Some(ck.clone()), &opts).is_err());
    assert!(train_seed::<f32>(&spec, &plan, &data, 1, Some(ck), &opts).is_err());
    assert!(Checkpoint::<f32>::load(&dir.path().join("seed-0/final.ckpt"), Some(&other.cfg)).is_err());
}

#[test]
fn affnist_accuracy_trails_mnist_after_training() {
    let mut test = load_split(&mnist_dir(), Split::Test).unwrap();
    test.pixels.truncate(500 * 784);
    test.labels.truncate(500);
    let mut train_digits = load_split(&mnist_dir(), Split::Train).unwrap();
    train_digits.pixels.truncate(3000 * 784);
    train_digits.labels.truncate(3000);
    let data = capslab::data::affnist_task(&train_digits, &test, &SeedScheme::new(0), 1).unwrap();
    let spec = build_model(&preset("convnet_avg", 16)).unwrap();
    let plan = TrainPlan { epochs_max: 4, seeds: vec![0], ..TrainPlan::default() };
    let rep = train::<f32>(&spec, &plan, &data, &RunOptions::default()).unwrap();
    let m = rep.seeds[0].metrics["mnist_test"];
    let a = rep.seeds[0].metrics["affnist_test"];
    assert!(m > a, "mnist {m} vs affnist {a}");
    assert_eq!(data.train.len(), 3000);
}
