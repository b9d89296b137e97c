//! End-to-end runs of the `dctc` binary on a tiny model.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn dctc(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dctc"))
        .current_dir(dir)
        .env_remove("DCTC_SEED")
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

const TINY: &str = r#"
seed = 3

[train]
total_steps = 40
batch_size = 8
log_every = 10
checkpoint_every = 0
corpus = "data"
output_dir = "run"

[train.model]
embedding_dim = 8
encoder_hidden_dim = 12
decoder_hidden_dim = 12

[eval.metrics]
num_points = 200
epochs = 20

[transfer]
list_size = 20
"#;

fn setup() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("tiny.toml"), TINY).unwrap();
    dir
}

#[test]
fn generate_data_is_deterministic_and_guarded() {
    let dir = setup();
    let d = dir.path();
    let o = dctc(d, &["generate-data", "--out", "a"]);
    assert!(o.status.success(), "{o:?}");
    assert!(stdout(&o).contains("generated 288 sentences"));
    let again = dctc(d, &["generate-data", "--out", "a"]);
    assert_eq!(again.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&again.stderr).contains("--force"));
    assert!(dctc(d, &["generate-data", "--out", "b"]).status.success());
    for f in ["corpus.tsv", "vocab.tsv", "grammar.toml"] {
        assert_eq!(
            fs::read(d.join("a").join(f)).unwrap(),
            fs::read(d.join("b").join(f)).unwrap()
        );
    }
    let o = dctc(
        d,
        &[
            "generate-data",
            "--out",
            "full",
            "--factors",
            "full-table-1",
            "--verbobj",
            "24",
        ],
    );
    assert!(o.status.success(), "{o:?}");
    assert!(stdout(&o).contains("over 9 factors"));
}

#[test]
fn seed_env_fallback_changes_the_corpus_order() {
    let dir = setup();
    let d = dir.path();
    assert!(dctc(d, &["generate-data", "--out", "s0"]).status.success());
    let o = Command::new(env!("CARGO_BIN_EXE_dctc"))
        .current_dir(d)
        .env("DCTC_SEED", "11")
        .args(["generate-data", "--out", "s11"])
        .output()
        .unwrap();
    assert!(stdout(&o).contains("seed 11"));
    assert!(dctc(d, &["--seed", "11", "generate-data", "--out", "f11"])
        .status
        .success());
    let read = |p: &str| fs::read(d.join(p).join("corpus.tsv")).unwrap();
    assert_ne!(read("s0"), read("s11"));
    assert_eq!(read("s11"), read("f11"));
}

#[test]
fn usage_errors_exit_one() {
    let dir = setup();
    assert_eq!(dctc(dir.path(), &["bogus"]).status.code(), Some(1));
    assert_eq!(dctc(dir.path(), &["train", "--mode", "nope"]).status.code(), Some(1));
    assert_eq!(dctc(dir.path(), &["--help"]).status.code(), Some(0));
}

#[test]
fn config_check_rejects_unknown_keys() {
    let dir = setup();
    let d = dir.path();
    let o = dctc(d, &["--config", "tiny.toml", "config", "check"]);
    assert!(o.status.success(), "{o:?}");
    assert!(stdout(&o).contains("# config ok"));
    fs::write(d.join("bad.toml"), "[train]\nlearning_rat = 0.1\n").unwrap();
    let o = dctc(d, &["--config", "bad.toml", "config", "check"]);
    assert_eq!(o.status.code(), Some(2));
    let o = dctc(d, &["config", "default"]);
    assert!(stdout(&o).contains("[train.objective]"));
}

#[test]
fn full_pipeline_is_reproducible() {
    let dir = setup();
    let d = dir.path();
    let c = ["--config", "tiny.toml"];
    let run = |extra: &[&str]| {
        let args: Vec<&str> = c.iter().chain(extra).copied().collect();
        let o = dctc(d, &args);
        assert!(o.status.success(), "{args:?}: {}", String::from_utf8_lossy(&o.stderr));
        stdout(&o)
    };
    run(&["generate-data"]);
    run(&["train", "--mode", "dctc"]);
    run(&["train", "--out", "run2"]);
    for f in ["final.ckpt", "loss.csv"] {
        assert!(
            fs::read(d.join("run").join(f)).unwrap() == fs::read(d.join("run2").join(f)).unwrap(),
            "{f}"
        );
    }
    // the reports differ only in the output directory they record
    let r1 = fs::read_to_string(d.join("run/train_report.json")).unwrap();
    let r2 = fs::read_to_string(d.join("run2/train_report.json")).unwrap();
    assert_eq!(r1, r2.replace("run2", "run"));
    // refuses to clobber a finished run
    assert_eq!(dctc(d, &["--config", "tiny.toml", "train"]).status.code(), Some(2));
    let report = fs::read_to_string(d.join("run/train_report.json")).unwrap();
    assert!(report.contains("\"seed\": 3"));

    let text = run(&[
        "eval",
        "--checkpoint",
        "run/final.ckpt",
        "--scheme",
        "hard",
        "--self-test",
    ]);
    assert!(text.contains("self-test: MIG(perfect codes) = 1.000000 ok"), "{text}");
    run(&[
        "eval",
        "--checkpoint",
        "run/final.ckpt",
        "--scheme",
        "hard",
        "--self-test",
        "--out",
        "e2.json",
    ]);
    let e1 = fs::read_to_string(d.join("run/eval_report.json")).unwrap();
    assert_eq!(e1, fs::read_to_string(d.join("e2.json")).unwrap());
    let v: serde_json::Value = serde_json::from_str(&e1).unwrap();
    for key in ["mig", "z_diff", "z_min_var"] {
        assert!(v["metrics"][key].is_number(), "{key}");
    }
    assert_eq!(v["metrics"]["scheme"], "hard");
    assert_eq!(v["config"]["seed"], 3);

    let text = run(&[
        "traverse",
        "--checkpoint",
        "run/final.ckpt",
        "--index",
        "4",
        "--latent",
        "tense",
        "--json",
        "t.json",
    ]);
    assert!(text.lines().count() >= 4, "{text}");
    let text = run(&["traverse", "--checkpoint", "run/final.ckpt", "--index", "4", "--all"]);
    let verdicts = text.lines().filter(|l| l.starts_with("latent ")).count();
    assert_eq!(verdicts, 5);
    let bad = dctc(
        d,
        &[
            "--config",
            "tiny.toml",
            "traverse",
            "--checkpoint",
            "run/final.ckpt",
            "--sentence",
            "i glorp",
            "--all",
        ],
    );
    assert_eq!(bad.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&bad.stderr).contains("glorp"));

    let args = [
        "transfer",
        "--checkpoint",
        "run/final.ckpt",
        "--factor",
        "negation",
        "--from",
        "negative",
        "--to",
        "affirmative",
    ];
    let a = run(&[&args[..], &["--json", "x1.json"]].concat());
    let b = run(&[&args[..], &["--json", "x2.json"]].concat());
    assert_eq!(a, b);
    assert!(a.contains("accuracy"));
    assert_eq!(
        fs::read(d.join("x1.json")).unwrap(),
        fs::read(d.join("x2.json")).unwrap()
    );
    let same = run(&[
        "transfer",
        "--checkpoint",
        "run/final.ckpt",
        "--factor",
        "negation",
        "--from",
        "negative",
        "--to",
        "negative",
    ]);
    assert!(same.contains("accuracy 1.0000"), "{same}");
}

#[test]
fn eval_rejects_a_mismatched_corpus() {
    let dir = setup();
    let d = dir.path();
    let c = ["--config", "tiny.toml"];
    assert!(dctc(d, &[&c[..], &["generate-data"]].concat()).status.success());
    assert!(dctc(d, &[&c[..], &["train", "--steps", "2"]].concat()).status.success());
    assert!(dctc(d, &["generate-data", "--out", "big", "--verbobj", "24"])
        .status
        .success());
    let o = dctc(
        d,
        &[&c[..], &["eval", "--checkpoint", "run/final.ckpt", "--corpus", "big"]].concat(),
    );
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("does not match"));
}
