use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn mnist_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data/mnist")
}

fn capslab(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_capslab")).args(args).output().expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

/// A tiny convnet run small enough for a debug test.
fn tiny_run_args<'a>(out: &'a str, data: &'a str) -> Vec<&'a str> {
    vec![
        "train", "--out", out,
        "--model.preset", "convnet_avg", "--model.channel_width", "4",
        "--data.dir", data, "--data.train_limit", "128", "--data.test_limit", "32",
        "--train.epochs_max", "1", "--train.seeds", "[0]", "--train.batch_size", "64",
    ]
}

#[test]
fn params_prints_count_and_short_form() {
    let o = capslab(&["params", "--preset", "capsnet"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(stdout(&o), "13475648\t13.5M\n");
    let narrow = capslab(&["params", "--preset", "capsnet", "--model.channel_width", "32"]);
    assert!(narrow.status.success());
    assert_ne!(stdout(&narrow), stdout(&o));
}

#[test]
fn unknown_keys_exit_2_and_name_the_key() {
    let o = capslab(&["params", "--preset", "capsnet", "--model.bogus", "3"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("model.bogus"), "{}", stderr(&o));
    let o = capslab(&["params", "--preset", "nonesuch"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("nonesuch"));
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("run");
    let o = capslab(&["train", "--out", out.to_str().unwrap(), "--data.nope", "1"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("nope"), "{}", stderr(&o));
}

#[test]
fn train_eval_and_rerun_guard() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("run");
    let (out_s, data) = (out.to_str().unwrap().to_string(), mnist_dir().to_str().unwrap().to_string());
    let args = tiny_run_args(&out_s, &data);

    let o = capslab(&args);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("mnist_test"), "{}", stdout(&o));
    let stored = std::fs::read_to_string(out.join("config.toml")).unwrap();
    assert!(stored.contains("channel_width = 4"), "{stored}");
    assert!(stored.contains("train_limit = 128"), "{stored}");
    for f in ["manifest.json", "report.jsonl", "summary.json", "checkpoints/seed-0/final.ckpt"] {
        assert!(out.join(f).is_file(), "{f}");
    }

    let again = capslab(&args);
    assert_eq!(again.status.code(), Some(2));
    assert!(stderr(&again).contains("--force"), "{}", stderr(&again));

    let mut forced = args.clone();
    forced.insert(1, "--force");
    let o = capslab(&forced);
    assert!(o.status.success(), "{}", stderr(&o));

    let eval = capslab(&["eval", "--run", &out_s, "--dataset", "mnist_test"]);
    assert!(eval.status.success(), "{}", stderr(&eval));
    let line: serde_json::Value = serde_json::from_str(stdout(&eval).trim()).unwrap();
    assert_eq!(line["dataset_tag"], "mnist_test");
    let acc = line["accuracy"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&acc));

    let missing = capslab(&["eval", "--run", &out_s, "--dataset", "affnist_test_x"]);
    assert_eq!(missing.status.code(), Some(2));
}

#[test]
fn datagen_is_reproducible() {
    let tmp = tempfile::tempdir().unwrap();
    let data = mnist_dir();
    let gen = |name: &str| {
        let out = tmp.path().join(name);
        let o = capslab(&[
            "datagen", "--out", out.to_str().unwrap(),
            "--data.dir", data.to_str().unwrap(), "--data.train_limit", "50", "--data.test_limit", "20",
        ]);
        assert!(o.status.success(), "{}", stderr(&o));
        stdout(&o)
    };
    let a = gen("a");
    assert_eq!(a, gen("b"));
    assert!(!a.is_empty());
    for row in a.lines() {
        assert_eq!(row.split('\t').count(), 3, "{row}");
    }
}
