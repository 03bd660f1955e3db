use std::path::Path;
use std::process::{Command, Output};

fn skd(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_skd"))
        .args(args)
        .current_dir(dir)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn small_corpus(dir: &Path) {
    let out = skd(
        &[
            "gen-corpus",
            "--out-dir",
            "corpus",
            "--n-train",
            "12",
            "--n-dev",
            "4",
            "--n-test",
            "4",
            "--vocab-size",
            "40",
        ],
        dir,
    );
    assert!(out.status.success(), "{}", stderr(&out));
}

const TINY: [&str; 10] = [
    "--hidden-size",
    "8",
    "--ff-size",
    "8",
    "--num-heads",
    "2",
    "--num-layers",
    "1",
    "--batch-size",
    "4",
];

fn corpus_args() -> Vec<&'static str> {
    vec![
        "--train",
        "corpus/train.jsonl",
        "--dev",
        "corpus/dev.jsonl",
        "--vocab",
        "corpus/vocab.txt",
    ]
}

#[test]
fn gen_corpus_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    small_corpus(dir.path());
    let first = std::fs::read(dir.path().join("corpus/train.jsonl")).unwrap();
    std::fs::remove_dir_all(dir.path().join("corpus")).unwrap();
    small_corpus(dir.path());
    assert_eq!(
        first,
        std::fs::read(dir.path().join("corpus/train.jsonl")).unwrap()
    );
    let manifest: serde_json::Value =
        serde_json::from_slice(&std::fs::read(dir.path().join("corpus/manifest.json")).unwrap())
            .unwrap();
    assert_eq!(manifest["subcommand"], "gen-corpus");
    assert_eq!(manifest["outputs"].as_array().unwrap().len(), 4);
}

#[test]
fn unknown_flags_and_bad_values_name_the_flag() {
    let dir = tempfile::tempdir().unwrap();
    let out = skd(&["decode", "--beam-width", "3"], dir.path());
    assert!(!out.status.success());
    assert!(stderr(&out).contains("--beam-width"), "{}", stderr(&out));

    small_corpus(dir.path());
    let mut args = vec![
        "train-teacher",
        "--out",
        "t.ckpt",
        "--label-smoothing",
        "1.5",
    ];
    args.extend(corpus_args());
    let out = skd(&args, dir.path());
    assert!(!out.status.success());
    assert!(
        stderr(&out).contains("`--label-smoothing`"),
        "{}",
        stderr(&out)
    );

    let out = skd(
        &[
            "evaluate",
            "--checkpoint",
            "missing.ckpt",
            "--test",
            "corpus/test.jsonl",
            "--vocab",
            "corpus/vocab.txt",
            "--out",
            "e.json",
        ],
        dir.path(),
    );
    assert!(!out.status.success());
    assert!(stderr(&out).contains("missing.ckpt"), "{}", stderr(&out));
}

#[test]
fn word_replacement_preview_needs_a_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    small_corpus(dir.path());
    let base = [
        "perturb-preview",
        "--input",
        "corpus/test.jsonl",
        "--vocab",
        "corpus/vocab.txt",
        "--out",
        "p.jsonl",
    ];
    let out = skd(&base, dir.path());
    assert!(!out.status.success());
    assert!(stderr(&out).contains("--checkpoint"), "{}", stderr(&out));

    let mut no_replace = base.to_vec();
    no_replace.extend(["--word-replace", "0", "--seed", "4"]);
    assert!(skd(&no_replace, dir.path()).status.success());
    let first = std::fs::read_to_string(dir.path().join("p.jsonl")).unwrap();
    assert!(skd(&no_replace, dir.path()).status.success());
    assert_eq!(
        first,
        std::fs::read_to_string(dir.path().join("p.jsonl")).unwrap()
    );
    assert_eq!(first.lines().count(), 4);
}

#[test]
fn pipeline_runs_and_replays_from_its_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    small_corpus(d);
    let mut teacher = vec!["train-teacher", "--out", "t.ckpt", "--max-epochs", "2"];
    teacher.extend(corpus_args());
    teacher.extend(TINY);
    let out = skd(&teacher, d);
    assert!(out.status.success(), "{}", stderr(&out));

    let mut distill = vec![
        "distill",
        "--teacher",
        "t.ckpt",
        "--out",
        "s.ckpt",
        "--max-epochs",
        "1",
        "--candidates",
        "3",
    ];
    distill.extend(corpus_args());
    distill.extend(["--batch-size", "4"]);
    let out = skd(&distill, d);
    assert!(out.status.success(), "{}", stderr(&out));
    let log = std::fs::read_to_string(d.join("s.ckpt.log.jsonl")).unwrap();
    let first: serde_json::Value = serde_json::from_str(log.lines().next().unwrap()).unwrap();
    for key in ["step", "nll", "kd", "final", "lambda"] {
        assert!(first.get(key).is_some(), "log line lacks {key}: {first}");
    }

    let out = skd(
        &[
            "decode",
            "--checkpoint",
            "s.ckpt",
            "--input",
            "corpus/test.jsonl",
            "--vocab",
            "corpus/vocab.txt",
            "--out",
            "d.jsonl",
            "--max-len",
            "5",
        ],
        d,
    );
    assert!(out.status.success(), "{}", stderr(&out));
    let lines = std::fs::read_to_string(d.join("d.jsonl")).unwrap();
    assert_eq!(lines.lines().count(), 4);
    let row: serde_json::Value = serde_json::from_str(lines.lines().next().unwrap()).unwrap();
    assert!(row["summary_tokens"].is_array() && row["score"].is_number());

    let out = skd(
        &[
            "evaluate",
            "--checkpoint",
            "s.ckpt",
            "--test",
            "corpus/test.jsonl",
            "--vocab",
            "corpus/vocab.txt",
            "--out",
            "e.json",
            "--per-example",
            "e.csv",
            "--max-len",
            "5",
        ],
        d,
    );
    assert!(out.status.success(), "{}", stderr(&out));
    let report: serde_json::Value =
        serde_json::from_slice(&std::fs::read(d.join("e.json")).unwrap()).unwrap();
    for key in ["r1", "r2", "rl", "ppl", "n_examples", "n_failed"] {
        assert!(report.get(key).is_some(), "report lacks {key}");
    }
    assert_eq!(
        std::fs::read_to_string(d.join("e.csv"))
            .unwrap()
            .lines()
            .count(),
        5
    );

    // replaying the teacher's manifest with a new output reproduces it exactly
    let out = skd(
        &[
            "--config",
            "t.ckpt.manifest.json",
            "train-teacher",
            "--out",
            "t2.ckpt",
        ],
        d,
    );
    assert!(out.status.success(), "{}", stderr(&out));
    assert_eq!(
        std::fs::read(d.join("t.ckpt")).unwrap(),
        std::fs::read(d.join("t2.ckpt")).unwrap()
    );

    // a student checkpoint cannot score against a vocabulary of another size
    std::fs::write(d.join("small.txt"), "a\n.\n").unwrap();
    let out = skd(
        &[
            "decode",
            "--checkpoint",
            "s.ckpt",
            "--input",
            "corpus/test.jsonl",
            "--vocab",
            "small.txt",
            "--out",
            "x.jsonl",
        ],
        d,
    );
    assert!(!out.status.success());
    assert!(stderr(&out).contains("vocabulary"), "{}", stderr(&out));
}
