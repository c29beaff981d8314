use std::path::Path;
use std::process::{Command, Output};

use tabsynth::fixtures::{desk_siblings, desk_table};
use tabsynth::table::{load_csv, to_csv_string, SchemaHint, Task};

const CONFIG: &str = "format_version = 1
[pipeline]
seeds = [0, 1]
finetune_copies = 2
[pipeline.backend.ngram]
order = 24
add_k = 0.0001
";

fn tabsynth(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tabsynth"))
        .args(args)
        .current_dir(dir)
        .env("TABSYNTH_LOG", "error")
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = tabsynth(dir, args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn fails(dir: &Path, args: &[&str], code: i32, category: &str) {
    let out = tabsynth(dir, args);
    assert_eq!(out.status.code(), Some(code), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    let err = String::from_utf8(out.stderr).unwrap();
    assert_eq!(err.lines().count(), 1, "{err}");
    assert!(err.starts_with(&format!("error[{category}]: ")), "{err}");
}

/// A workspace with a config, a downstream table, and a pre-training manifest.
fn workspace() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    std::fs::write(p.join("run.toml"), CONFIG).unwrap();
    std::fs::write(p.join("train.csv"), to_csv_string(&desk_table(120, 1).unwrap()).unwrap()).unwrap();
    let mut manifest = String::from("format_version = 1\n");
    for (k, t) in desk_siblings(2, 150, 1).unwrap().iter().enumerate() {
        std::fs::write(p.join(format!("sib{k}.csv")), to_csv_string(t).unwrap()).unwrap();
        manifest.push_str(&format!("[[table]]\npath = \"sib{k}.csv\"\nlabel = \"churn\"\n"));
    }
    std::fs::write(p.join("pre.toml"), manifest).unwrap();
    dir
}

fn data_rows(path: &Path) -> usize {
    std::fs::read_to_string(path).unwrap().lines().count() - 1
}

#[test]
fn corpus_counts_lines_and_filters_names() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    for k in 0..2 {
        std::fs::write(p.join(format!("t{k}.csv")), to_csv_string(&desk_table(10, k).unwrap()).unwrap()).unwrap();
    }
    std::fs::write(p.join("v.csv"), "V1,V2,V3\n1,2,3\n4,5,6\n").unwrap();
    std::fs::write(
        p.join("m.toml"),
        "format_version = 1\n[[table]]\npath = \"t0.csv\"\n[[table]]\npath = \"t1.csv\"\nlabel = \"churn\"\n[[table]]\npath = \"v.csv\"\n",
    )
    .unwrap();
    let out = ok(p, &["build-corpus", "--manifest", "m.toml", "--out", "corpus", "--seed", "3"]);
    assert!(out.contains("rejected v.csv"), "{out}");
    assert_eq!(out.matches("accepted").count(), 2);
    let corpus = std::fs::read_to_string(p.join("corpus/corpus.jsonl")).unwrap();
    assert_eq!(corpus.lines().count(), 20);
    let first: serde_json::Value = serde_json::from_str(corpus.lines().next().unwrap()).unwrap();
    assert!(first["text"].as_str().unwrap().contains(" is "));
    assert!(p.join("corpus/vocab.json").exists());
    let prov: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(p.join("corpus/corpus.jsonl.provenance.json")).unwrap()).unwrap();
    assert_eq!(prov["resolved"]["seed"], 3);
    assert_eq!(prov["details"]["rejected"].as_array().unwrap().len(), 1);
}

#[test]
fn corpus_with_no_accepted_table_fails() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    std::fs::write(p.join("v.csv"), "V1,V2,V3\n1,2,3\n").unwrap();
    std::fs::write(p.join("m.toml"), "format_version = 1\n[[table]]\npath = \"v.csv\"\n").unwrap();
    fails(p, &["build-corpus", "--manifest", "m.toml", "--out", "corpus"], 6, "invalid-argument");
    assert!(!p.join("corpus").exists());
}

#[test]
fn bad_config_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    std::fs::write(p.join("c.toml"), "format_version = 1\nsurprise = true\n").unwrap();
    std::fs::write(p.join("m.toml"), "format_version = 1\n").unwrap();
    fails(p, &["--config", "c.toml", "build-corpus", "--manifest", "m.toml", "--out", "o"], 3, "config");
    std::fs::write(p.join("c.toml"), "format_version = 2\n").unwrap();
    fails(p, &["--config", "c.toml", "build-corpus", "--manifest", "m.toml", "--out", "o"], 10, "version-mismatch");
    fails(p, &["build-corpus", "--manifest", "absent.toml", "--out", "o"], 4, "io");
    fails(p, &["--backend", "gpt", "build-corpus", "--manifest", "m.toml", "--out", "o"], 6, "invalid-argument");
}

/// pretrain, finetune, sample, impute, balance; twice, in two directories.
fn pipeline(p: &Path) -> Vec<(String, Vec<u8>)> {
    let cfg = ["--config", "run.toml", "--seed", "5"];
    let with = |args: &[&str]| -> Vec<String> { cfg.iter().chain(args).map(|s| s.to_string()).collect() };
    let run = |args: Vec<String>| ok(p, &args.iter().map(String::as_str).collect::<Vec<_>>());
    run(with(&["pretrain", "--manifest", "pre.toml", "--out", "pre.ckpt"]));
    run(with(&["finetune", "--checkpoint", "pre.ckpt", "--data", "train.csv", "--label", "churn", "--out", "ft.ckpt"]));
    run(with(&["sample", "--checkpoint", "ft.ckpt", "--data", "train.csv", "--label", "churn", "--count", "37", "--out", "synth.csv"]));
    run(with(&["balance", "--checkpoint", "ft.ckpt", "--data", "train.csv", "--label", "churn", "--out", "balanced.csv"]));
    let masked = {
        let t = load_csv(p.join("train.csv"), &SchemaHint::labeled("churn", Task::Classification)).unwrap();
        let m = tabsynth::table::apply_missingness(&t, &tabsynth::table::MissingnessSpec::mcar(0.3, 2)).unwrap();
        to_csv_string(&m).unwrap()
    };
    std::fs::write(p.join("masked.csv"), masked).unwrap();
    run(with(&["impute", "--checkpoint", "ft.ckpt", "--data", "masked.csv", "--label", "churn", "--out", "imputed.csv"]));
    let mut files: Vec<(String, Vec<u8>)> = std::fs::read_dir(p)
        .unwrap()
        .map(|e| e.unwrap())
        .filter(|e| e.file_type().unwrap().is_file())
        .map(|e| (e.file_name().to_string_lossy().into_owned(), std::fs::read(e.path()).unwrap()))
        .collect();
    files.sort();
    files
}

#[test]
fn pipeline_outputs_are_exact_and_reproducible() {
    let a = workspace();
    let b = workspace();
    let fa = pipeline(a.path());
    let fb = pipeline(b.path());
    assert_eq!(fa.len(), fb.len());
    for ((na, ba), (nb, bb)) in fa.iter().zip(&fb) {
        assert_eq!(na, nb);
        assert!(ba == bb, "{na} differs between runs");
    }
    let p = a.path();
    assert_eq!(data_rows(&p.join("synth.csv")), 37);
    let hint = SchemaHint::labeled("churn", Task::Classification);
    let synth = load_csv(p.join("synth.csv"), &hint).unwrap();
    assert!(synth.rows.iter().all(|r| !r[5].is_missing()));
    let balanced = load_csv(p.join("balanced.csv"), &hint).unwrap();
    let counts: Vec<usize> = balanced.class_counts().into_values().collect();
    assert_eq!(counts[0], counts[1]);
    let imputed = load_csv(p.join("imputed.csv"), &hint).unwrap();
    assert_eq!(imputed.missing_feature_cells(), 0);
    assert!(p.join("ft.ckpt.provenance.json").exists());
    let prov: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(p.join("synth.csv.provenance.json")).unwrap()).unwrap();
    assert_eq!(prov["resolved"]["config"]["pipeline"]["sampling"]["seed"], 5);
    assert_eq!(prov["details"]["count"], 37);
}

#[test]
fn incompatible_checkpoint_leaves_no_output() {
    let w = workspace();
    let p = w.path();
    ok(p, &["--config", "run.toml", "pretrain", "--manifest", "pre.toml", "--out", "pre.ckpt"]);
    let bytes = std::fs::read(p.join("pre.ckpt")).unwrap();
    let text = String::from_utf8_lossy(&bytes[..64]).into_owned();
    assert!(text.contains("format_version: 1\n"));
    let mut bumped = bytes.clone();
    let at = bumped.windows(17).position(|w| w == b"format_version: 1").unwrap() + 16;
    bumped[at] = b'7';
    std::fs::write(p.join("old.ckpt"), bumped).unwrap();
    fails(
        p,
        &["finetune", "--checkpoint", "old.ckpt", "--data", "train.csv", "--label", "churn", "--out", "ft.ckpt"],
        10,
        "version-mismatch",
    );
    assert!(!p.join("ft.ckpt").exists());
    assert!(!p.join("ft.ckpt.provenance.json").exists());
}

#[test]
fn scenario_and_ablation_reports() {
    let w = workspace();
    let p = w.path();
    let out = ok(
        p,
        &["--config", "run.toml", "scenario", "privacy", "--data", "train.csv", "--label", "churn", "--manifest", "pre.toml", "--out", "privacy.jsonl"],
    );
    assert!(out.contains("synthetic"), "{out}");
    let report = std::fs::read_to_string(p.join("privacy.jsonl")).unwrap();
    assert_eq!(report.lines().count(), 3);
    for line in report.lines().skip(1) {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        for key in ["reference", "value", "gap"] {
            assert!(v[key].is_number(), "{key} in {line}");
        }
    }
    assert!(p.join("privacy.jsonl.summary.txt").exists());
    ok(
        p,
        &["--config", "run.toml", "--seed", "3", "ablation", "--data", "train.csv", "--label", "churn", "--manifest", "pre.toml", "--toggle", "no-label", "--out", "ablation.jsonl"],
    );
    let report = std::fs::read_to_string(p.join("ablation.jsonl")).unwrap();
    let arms: Vec<String> = report
        .lines()
        .skip(1)
        .map(|l| serde_json::from_str::<serde_json::Value>(l).unwrap()["arm"].as_str().unwrap().to_string())
        .collect();
    assert_eq!(arms, ["full", "full", "no-label", "no-label"]);
    fails(
        p,
        &["ablation", "--data", "train.csv", "--label", "churn", "--toggle", "no-magic", "--out", "x.jsonl"],
        6,
        "invalid-argument",
    );
}
