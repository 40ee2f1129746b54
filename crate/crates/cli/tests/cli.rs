use std::path::Path;
use std::process::{Command, Output};

fn nee(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_nee"))
        .args(args)
        .current_dir(dir)
        .env_remove("NEE_SEED")
        .output()
        .expect("binary runs")
}

fn ok(out: &Output) -> String {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout.clone()).unwrap()
}

fn tiny_config(dir: &Path, task: &str) -> std::path::PathBuf {
    let p = dir.join(format!("{task}.toml"));
    std::fs::write(
        &p,
        format!(
            "task = \"{task}\"\nsteps = 30\nbatch_size = 8\ndim = 8\nencoder_layers = 1\ndecoder_layers = 1\n\
             train_count = 50\nvalidation_count = 10\neval_every = 10\n"
        ),
    )
    .unwrap();
    p
}

#[test]
fn gen_data_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    for name in ["a.need", "b.need"] {
        ok(&nee(d, &["gen-data", "--task", "selection-sort", "--n", "200", "--max-len", "8", "--seed", "7", "--out", name]));
    }
    assert_eq!(std::fs::read(d.join("a.need")).unwrap(), std::fs::read(d.join("b.need")).unwrap());
    ok(&nee(d, &["gen-data", "--task", "dijkstra", "--n", "5", "--seed", "7", "--out", "g.json", "--format", "json"]));
    let v: serde_json::Value = serde_json::from_slice(&std::fs::read(d.join("g.json")).unwrap()).unwrap();
    assert_eq!(v["train"].as_array().unwrap().len(), 5);
}

#[test]
fn env_seed_is_the_default() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(&nee(d, &["gen-data", "--task", "merge", "--n", "30", "--seed", "11", "--out", "flag.need"]));
    let out = Command::new(env!("CARGO_BIN_EXE_nee"))
        .args(["gen-data", "--task", "merge", "--n", "30", "--out", "env.need"])
        .current_dir(d)
        .env("NEE_SEED", "11")
        .output()
        .unwrap();
    ok(&out);
    assert_eq!(std::fs::read(d.join("flag.need")).unwrap(), std::fs::read(d.join("env.need")).unwrap());
}

#[test]
fn missing_config_fails_with_a_machine_readable_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = nee(dir.path(), &["train", "--config", "missing.toml"]);
    assert!(!out.status.success());
    let err: serde_json::Value = serde_json::from_slice(out.stderr.trim_ascii()).unwrap();
    assert_eq!(err["error"], "not_found");
    assert!(err["message"].as_str().unwrap().contains("missing.toml"));
}

#[test]
fn unknown_commands_and_flags_are_usage_errors() {
    let dir = tempfile::tempdir().unwrap();
    for args in [&["frobnicate"][..], &["eval", "--bogus"][..]] {
        let out = nee(dir.path(), args);
        assert_eq!(out.status.code(), Some(2));
        let err: serde_json::Value = serde_json::from_slice(out.stderr.trim_ascii()).unwrap();
        assert_eq!(err["error"], "usage");
    }
}

#[test]
fn bad_config_keys_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("bad.toml"), "task = \"selection-sort\"\nsteps = 5\nlearning_rate = 3\n").unwrap();
    let out = nee(dir.path(), &["train", "--config", "bad.toml"]);
    assert!(!out.status.success());
}

#[test]
fn train_eval_export_and_report() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let cfg = tiny_config(d, "selection-sort");
    let cfg = cfg.to_str().unwrap();
    let train = nee(d, &["train", "--config", cfg, "--out", "m.nee", "--losses", "l.json", "--seed", "3"]);
    ok(&train);
    let log = String::from_utf8_lossy(&train.stderr);
    assert!(log.contains("config_hash"));
    ok(&nee(d, &["train", "--config", cfg, "--out", "m2.nee", "--losses", "l2.json", "--seed", "3"]));
    assert_eq!(std::fs::read(d.join("m.nee")).unwrap(), std::fs::read(d.join("m2.nee")).unwrap());
    assert_eq!(std::fs::read(d.join("l.json")).unwrap(), std::fs::read(d.join("l2.json")).unwrap());

    let md = ok(&nee(d, &["eval", "--checkpoint", "m.nee", "--task", "selection-sort", "--lengths", "25,50", "--n", "4"]));
    assert!(md.lines().any(|l| l.starts_with("| 25 |")) && md.lines().any(|l| l.starts_with("| 50 |")));
    ok(&nee(
        d,
        &["eval", "--checkpoint", "m.nee", "--task", "selection-sort", "--lengths", "8", "--n", "4", "--format", "json", "--out", "r.json"],
    ));
    let report = ok(&nee(d, &["report", "r.json"]));
    assert!(report.contains("| 8 |"));

    ok(&nee(d, &["export-attention", "--checkpoint", "m.nee", "--input", "5,2,7", "--out", "att.csv"]));
    let csv = std::fs::read_to_string(d.join("att.csv")).unwrap();
    for line in csv.lines().skip(1) {
        let s: f64 = line.split(',').skip(1).map(|c| c.parse::<f64>().unwrap()).sum();
        assert!((s - 1.0).abs() < 1e-9);
    }

    let out = nee(d, &["eval", "--checkpoint", "nope.nee", "--task", "selection-sort"]);
    assert!(!out.status.success());
}

#[test]
fn pca_export_of_an_addition_model() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let cfg = tiny_config(d, "add");
    ok(&nee(d, &["train", "--config", cfg.to_str().unwrap(), "--out", "add.nee"]));
    ok(&nee(d, &["export-pca", "--checkpoint", "add.nee", "--holdout", "3,4,5", "--out", "pca.json"]));
    let v: serde_json::Value = serde_json::from_slice(&std::fs::read(d.join("pca.json")).unwrap()).unwrap();
    assert_eq!(v["coordinates"].as_array().unwrap().len(), 256);
    assert_eq!(v["holdout"].as_array().unwrap().iter().filter(|h| h.as_bool().unwrap()).count(), 3);
    ok(&nee(d, &["export-pca", "--checkpoint", "add.nee", "--out", "pca.csv"]));
    assert_eq!(std::fs::read_to_string(d.join("pca.csv")).unwrap().lines().count(), 257);
    let md = ok(&nee(d, &["eval", "--checkpoint", "add.nee", "--task", "add"]));
    assert!(md.contains("Add"));
}

#[test]
fn compose_with_exact_subroutines_is_perfect() {
    let dir = tempfile::tempdir().unwrap();
    for alg in ["dijkstra", "prim", "merge-sort"] {
        let md = ok(&nee(dir.path(), &["compose", "--algorithm", alg, "--size", "7", "--n", "25", "--seed", "5"]));
        assert!(md.contains("| 100.00 |"), "{alg}: {md}");
    }
}

#[test]
fn ablate_prints_a_row_per_variant() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path(), "seq2seq-baseline");
    let md = ok(&nee(
        dir.path(),
        &["ablate", "--config", cfg.to_str().unwrap(), "--variants", "all_mod,vanilla", "--length", "4", "--n", "3"],
    ));
    assert!(md.contains("| all_mod |") && md.contains("| vanilla |"));
}
