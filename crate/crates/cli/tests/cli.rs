use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use orthopq::{EmbeddingDataset, EncodedDatabase};

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_orthopq"));
    c.env_remove("RUST_LOG");
    c
}

fn run(dir: &Path, args: &[&str]) -> Output {
    bin().current_dir(dir).args(args).output().unwrap()
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = run(dir, args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn metrics(path: PathBuf) -> Vec<(String, f64)> {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .skip(1)
        .map(|l| {
            let (k, v) = l.split_once(',').unwrap();
            (k.to_string(), v.parse().unwrap())
        })
        .collect()
}

fn metric(rows: &[(String, f64)], name: &str) -> f64 {
    rows.iter().find(|(k, _)| k == name).unwrap().1
}

/// synth + train on a small problem; returns the working directory.
fn trained() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(d, &[
        "synth", "--classes", "5", "--per-class", "30", "--dim", "16", "--seed", "2",
        "--out", "db.opqe", "--queries-out", "q.opqe", "--queries-per-class", "4",
    ]);
    ok(d, &[
        "train", "--data", "db.opqe", "--m", "2", "--k", "8", "--dim", "16", "--epochs", "20",
        "--batch-size", "64", "--out", "model.opqm", "--log", "log.csv",
    ]);
    dir
}

#[test]
fn full_pipeline() {
    let dir = trained();
    let d = dir.path();
    ok(d, &["encode", "--model", "model.opqm", "--data", "db.opqe", "--out", "db.opqb"]);
    ok(d, &["query", "--model", "model.opqm", "--db", "db.opqb", "--queries", "q.opqe", "--out", "rank.csv"]);
    ok(d, &[
        "eval", "--ranking", "rank.csv", "--db", "db.opqb", "--queries", "q.opqe",
        "--metric", "map", "--metric", "p@5", "--pr-out", "pr.csv", "--out", "metrics.csv",
    ]);
    let m = metrics(d.join("metrics.csv"));
    assert!(metric(&m, "map") > 0.8, "{m:?}");
    assert_eq!(metric(&m, "valid_queries"), 20.0);
    assert!(fs::read_to_string(d.join("pr.csv")).unwrap().lines().count() > 2);

    let log = fs::read_to_string(d.join("log.csv")).unwrap();
    assert_eq!(log.lines().count(), 21);

    let ranking = fs::read_to_string(d.join("rank.csv")).unwrap();
    let db = EncodedDatabase::load(d.join("db.opqb")).unwrap();
    assert_eq!(ranking.lines().next().unwrap(), "query_id,rank,db_id,score");
    assert_eq!(ranking.lines().count(), 1 + 20 * db.len());
}

#[test]
fn every_subcommand_has_help() {
    let dir = tempfile::tempdir().unwrap();
    let top = ok(dir.path(), &["--help"]);
    for sub in ["gen-codebook", "train", "encode", "query", "eval", "angles", "synth"] {
        assert!(top.contains(sub), "{sub} missing from top-level help");
        let help = ok(dir.path(), &[sub, "--help"]);
        assert!(help.contains("--out"), "{sub} help: {help}");
    }
}

#[test]
fn outputs_are_reproducible() {
    let a = trained();
    let b = trained();
    for f in ["db.opqe", "q.opqe", "model.opqm", "log.csv"] {
        assert_eq!(fs::read(a.path().join(f)).unwrap(), fs::read(b.path().join(f)).unwrap(), "{f}");
    }
    let d = a.path();
    ok(d, &["gen-codebook", "--m", "4", "--d", "32", "--k", "16", "--out", "c1.opqc"]);
    ok(d, &["gen-codebook", "--m", "4", "--d", "32", "--k", "16", "--out", "c2.opqc"]);
    assert_eq!(fs::read(d.join("c1.opqc")).unwrap(), fs::read(d.join("c2.opqc")).unwrap());
}

#[test]
fn ranking_is_identical_across_thread_counts() {
    let dir = trained();
    let d = dir.path();
    ok(d, &["encode", "--model", "model.opqm", "--data", "db.opqe", "--out", "db.opqb"]);
    ok(d, &["--threads", "1", "query", "--model", "model.opqm", "--db", "db.opqb", "--queries", "q.opqe", "--out", "r1.csv"]);
    ok(d, &["query", "--threads", "3", "--model", "model.opqm", "--db", "db.opqb", "--queries", "q.opqe", "--out", "r3.csv"]);
    assert_eq!(fs::read(d.join("r1.csv")).unwrap(), fs::read(d.join("r3.csv")).unwrap());
}

#[test]
fn topk_limits_rows_per_query() {
    let dir = trained();
    let d = dir.path();
    ok(d, &["encode", "--model", "model.opqm", "--data", "db.opqe", "--out", "db.opqb"]);
    ok(d, &["query", "--model", "model.opqm", "--db", "db.opqb", "--queries", "q.opqe", "--topk", "10", "--out", "r.csv"]);
    let text = fs::read_to_string(d.join("r.csv")).unwrap();
    let mut per_query = std::collections::BTreeMap::new();
    for line in text.lines().skip(1) {
        let q: usize = line.split(',').next().unwrap().parse().unwrap();
        *per_query.entry(q).or_insert(0) += 1;
    }
    assert_eq!(per_query.len(), 20);
    assert!(per_query.values().all(|&n| n == 10));
}

#[test]
fn mismatched_index_fails_without_output() {
    let dir = trained();
    let d = dir.path();
    ok(d, &[
        "train", "--data", "db.opqe", "--m", "2", "--k", "8", "--dim", "16", "--epochs", "2",
        "--seed", "5", "--out", "other.opqm",
    ]);
    ok(d, &["encode", "--model", "other.opqm", "--data", "db.opqe", "--out", "db.opqb"]);
    let out = run(d, &["query", "--model", "model.opqm", "--db", "db.opqb", "--queries", "q.opqe", "--out", "r.csv"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("fingerprint"));
    assert!(!d.join("r.csv").exists());
    assert!(fs::read_dir(d).unwrap().all(|e| !e.unwrap().file_name().to_string_lossy().contains(".tmp-")));
}

#[test]
fn precision_fixture() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let db_labels = vec![0, 1, 0, 1, 0, 0, 1, 1, 1, 1];
    EncodedDatabase::new(vec![0; 10], 1, 2, db_labels, [0; 32])
        .unwrap()
        .save(d.join("db.opqb"))
        .unwrap();
    EmbeddingDataset::new(vec![1.0, 0.0], 2, vec![0], 2)
        .unwrap()
        .save(d.join("q.opqe"))
        .unwrap();
    // Hits at ranks 1, 3, 5 among the first five.
    let mut csv = String::from("query_id,rank,db_id,score\n");
    for (rank, id) in [0, 1, 2, 3, 4, 6, 5, 7, 8, 9].iter().enumerate() {
        csv.push_str(&format!("0,{},{id},{}\n", rank + 1, 10 - rank));
    }
    fs::write(d.join("rank.csv"), csv).unwrap();
    ok(d, &["eval", "--ranking", "rank.csv", "--db", "db.opqb", "--queries", "q.opqe", "--metric", "p@5", "--metric", "map", "--out", "m.csv"]);
    let m = metrics(d.join("m.csv"));
    assert!((metric(&m, "p@5") - 0.6).abs() < 1e-12, "{m:?}");
    let ap = (1.0 + 2.0 / 3.0 + 3.0 / 5.0 + 4.0 / 7.0) / 4.0;
    assert!((metric(&m, "map") - ap).abs() < 1e-12, "{m:?}");
}

#[test]
fn orthonormal_codebook_angles_sit_in_one_bin() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let stdout = ok(d, &["gen-codebook", "--m", "4", "--d", "64", "--k", "64", "--out", "c.opqc"]);
    assert!(stdout.contains("orthonormal"), "{stdout}");
    ok(d, &["angles", "--codebook", "c.opqc", "--out", "a.csv"]);
    let text = fs::read_to_string(d.join("a.csv")).unwrap();
    let nonzero: Vec<&str> = text
        .lines()
        .skip(1)
        .filter(|l| l.split(',').nth(1).unwrap().parse::<f64>().unwrap() > 0.0)
        .collect();
    assert_eq!(nonzero.len(), 1, "{nonzero:?}");
    assert_eq!(nonzero[0].split(',').next().unwrap().parse::<f64>().unwrap(), 90.0);
}

#[test]
fn invalid_codebook_shapes_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    for args in [["--k", "65", "--d", "128"], ["--k", "64", "--d", "32"]] {
        let mut full = vec!["gen-codebook", "--m", "2", "--out", "c.opqc"];
        full.extend_from_slice(&args);
        let out = run(d, &full);
        assert!(!out.status.success(), "{args:?}");
        assert!(String::from_utf8_lossy(&out.stderr).starts_with("error:"));
        assert!(!d.join("c.opqc").exists());
    }
}

#[test]
fn config_file_supplies_flags() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    fs::write(d.join("run.conf"), "# codebook\nm = 3\nd = 16\nk = 8\nseed = 4\n").unwrap();
    ok(d, &["--config", "run.conf", "gen-codebook", "--out", "a.opqc"]);
    ok(d, &["gen-codebook", "--m", "3", "--d", "16", "--k", "8", "--out", "b.opqc"]);
    assert_eq!(fs::read(d.join("a.opqc")).unwrap(), fs::read(d.join("b.opqc")).unwrap());

    ok(d, &["gen-codebook", "--config", "run.conf", "--k", "4", "--out", "c.opqc"]);
    let set = orthopq::CodebookSet::load(d.join("c.opqc")).unwrap();
    assert_eq!(set.spec().k_words, 4);
    assert_eq!(set.spec().m_books, 3);
}
