use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

fn bin() -> Command {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_intembed"));
    cmd.env_remove("INTEMBED_DATA").env("RUST_LOG", "warn");
    cmd
}

fn run(dir: &Path, args: &[&str]) -> Output {
    bin().current_dir(dir).args(args).output().expect("spawn intembed")
}

fn ok(dir: &Path, args: &[&str]) -> Output {
    let out = run(dir, args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/fixtures").join(name)
}

/// Arithmetic progressions in the stripped dump format.
fn write_dump(dir: &Path) -> PathBuf {
    let mut text = String::from("# synthetic\n");
    for i in 0..300u64 {
        let (start, step) = (i % 17, 1 + i % 5);
        let terms: Vec<String> = (0..12).map(|j| (start + j * step).to_string()).collect();
        text.push_str(&format!("A{:06} ,{},\n", i + 1, terms.join(",")));
    }
    let path = dir.join("stripped");
    fs::write(&path, text).unwrap();
    path
}

fn ingest(dir: &Path) -> PathBuf {
    let dump = write_dump(dir);
    ok(dir, &["ingest", "--dump", dump.to_str().unwrap(), "--seed", "3", "--out", "corpus", "--report", "results/corpus_stats.jsonl"]);
    dir.join("corpus")
}

/// A table over 1..=2000 whose first dimension encodes parity.
fn write_table(path: &Path, offset: f32) {
    let mut text = String::from("2000 3\n");
    for n in 1..=2000u32 {
        let a = if n % 2 == 0 { 1.0 } else { -1.0 };
        let b = ((n * 7919) % 101) as f32 / 101.0 + offset;
        let c = ((n * 104729) % 97) as f32 / 97.0;
        text.push_str(&format!("{n} {a} {b} {c}\n"));
    }
    fs::write(path, text).unwrap();
}

fn lines(path: &Path) -> Vec<serde_json::Value> {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect()
}

#[test]
fn missing_dump_is_an_io_error() {
    let dir = TempDir::new().unwrap();
    let out = run(dir.path(), &["ingest", "--dump", "nope/stripped.gz", "--out", "corpus"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("nope/stripped.gz"));
}

#[test]
fn ingest_is_reproducible() {
    let dir = TempDir::new().unwrap();
    let corpus = ingest(dir.path());
    let first = fs::read(corpus.join("manifest.tsv")).unwrap();
    for name in ["train.txt", "dev.txt", "test.txt", "vocab.txt"] {
        assert!(corpus.join(name).exists(), "{name}");
    }
    ingest(dir.path());
    assert_eq!(fs::read(corpus.join("manifest.tsv")).unwrap(), first);

    let stats = lines(&dir.path().join("results/corpus_stats.jsonl"));
    assert_eq!(stats.len(), 2);
    assert_eq!(stats[0]["kind"], "corpus_stats");
    assert_eq!(stats[0]["result"]["dev"]["sequence_count"], 15);
    assert_eq!(stats[0]["result"]["train"]["sequence_count"], 270);
}

#[test]
fn lsa_dimension_follows_flag() {
    let dir = TempDir::new().unwrap();
    ingest(dir.path());
    ok(dir.path(), &["train", "lsa", "--corpus", "corpus", "--out", "tables/lsa.txt", "--k", "4", "--report", "results/training.jsonl"]);
    let table = fs::read_to_string(dir.path().join("tables/lsa.txt")).unwrap();
    let header: Vec<&str> = table.lines().next().unwrap().split_whitespace().collect();
    assert_eq!(header[1], "4");
    let rec = &lines(&dir.path().join("results/training.jsonl"))[0];
    assert_eq!(rec["source_tag"], "OEIS-LSA");
}

#[test]
fn skipgram_subword_writes_bucket_sidecar() {
    let dir = TempDir::new().unwrap();
    ingest(dir.path());
    fs::write(
        dir.path().join("small.toml"),
        "[skipgram]\ndim = 8\nepochs = 1\n[skipgram.subword]\nn_min = 3\nn_max = 6\nbucket_count = 512\n",
    )
    .unwrap();
    let common = ["--config", "small.toml", "train", "skipgram", "--corpus", "corpus", "--report", "results/training.jsonl"];
    let mut args = common.to_vec();
    args.extend(["--out", "tables/ft.txt", "--subword"]);
    ok(dir.path(), &args);
    assert!(dir.path().join("tables/ft.txt.buckets").exists());

    let mut args = common.to_vec();
    args.extend(["--out", "tables/nosub.txt", "--no-subword"]);
    ok(dir.path(), &args);
    assert!(!dir.path().join("tables/nosub.txt.buckets").exists());
    let tags: Vec<String> = lines(&dir.path().join("results/training.jsonl"))
        .iter()
        .map(|r| r["source_tag"].as_str().unwrap().to_string())
        .collect();
    assert_eq!(tags, ["OEIS-FastText", "OEIS-FastText-nosub"]);
}

#[test]
fn probing_two_tables_gives_eight_records() {
    let dir = TempDir::new().unwrap();
    write_table(&dir.path().join("a.txt"), 0.0);
    write_table(&dir.path().join("b.txt"), 0.5);
    ok(dir.path(), &["probe", "--table", "a.txt", "--table", "b.txt", "--out", "results/probe.jsonl"]);
    let recs = lines(&dir.path().join("results/probe.jsonl"));
    assert_eq!(recs.len(), 8);
    let even = recs.iter().find(|r| r["result"]["property"] == "even").unwrap();
    assert!(even["result"]["accuracy_single"].as_f64().unwrap() > 0.99);
    assert_eq!(even["result"]["chosen_dimension"], 0);
    assert_eq!(even["result"]["majority_baseline"], 0.5);

    ok(dir.path(), &["probe", "--concat", "a.txt", "b.txt", "--properties", "value,digits", "--out", "results/reg.jsonl"]);
    let recs = lines(&dir.path().join("results/reg.jsonl"));
    assert_eq!(recs.len(), 2);
    assert!(recs.iter().all(|r| r["kind"] == "regression" && r["source_tag"] == "a+b"));

    let out = ok(dir.path(), &["report", "--bundle", "results"]);
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.contains("Majority baseline"));
    assert!(text.contains("even Single"));
}

#[test]
fn unknown_property_is_rejected() {
    let dir = TempDir::new().unwrap();
    write_table(&dir.path().join("a.txt"), 0.0);
    let out = run(dir.path(), &["probe", "--table", "a.txt", "--properties", "odd"]);
    assert_ne!(out.status.code(), Some(0));
}

#[test]
fn empty_bundle_reports_no_records() {
    let dir = TempDir::new().unwrap();
    fs::create_dir(dir.path().join("results")).unwrap();
    let out = ok(dir.path(), &["report", "--bundle", "results"]);
    assert_eq!(String::from_utf8(out.stdout).unwrap(), "no records\n");
}

#[test]
fn malformed_record_exits_with_format_code() {
    let dir = TempDir::new().unwrap();
    fs::create_dir(dir.path().join("results")).unwrap();
    fs::write(dir.path().join("results/broken.jsonl"), "{\"kind\": 3\n").unwrap();
    let out = run(dir.path(), &["report", "--bundle", "results"]);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("broken.jsonl"));
}

#[test]
fn unknown_method_is_a_usage_error() {
    let dir = TempDir::new().unwrap();
    let out = run(dir.path(), &["eval", "complete", "--method", "oracle", "--test-split"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn data_dir_comes_from_environment() {
    let dir = TempDir::new().unwrap();
    fs::create_dir_all(dir.path().join("data/results")).unwrap();
    let out = bin()
        .current_dir(dir.path())
        .env("INTEMBED_DATA", dir.path().join("data"))
        .args(["report"])
        .output()
        .unwrap();
    assert!(out.status.success());
    assert_eq!(String::from_utf8(out.stdout).unwrap(), "no records\n");
}

#[test]
fn completion_by_search_and_lstm() {
    let dir = TempDir::new().unwrap();
    ingest(dir.path());
    let p = dir.path();
    ok(p, &["eval", "complete", "--method", "search", "--mode", "full", "--test-split", "--corpus", "corpus", "--out", "results/completion.jsonl"]);
    ok(p, &["eval", "complete", "--method", "search", "--mode", "last5", "--problems", fixture("completion_sample.tsv").to_str().unwrap(), "--corpus", "corpus", "--out", "results/completion.jsonl"]);
    let recs = lines(&p.join("results/completion.jsonl"));
    assert_eq!(recs[0]["result"]["problem_set"], "test-split");
    assert_eq!(recs[0]["result"]["n"], 15);
    // every test progression has a train twin with the same start and step
    assert!(recs[0]["result"]["p_at_1"].as_f64().unwrap() > 0.9);
    assert_eq!(recs[1]["source_tag"], "search-last5");
    // only 0,2,4,6 -> 8 is continued by the synthetic corpus
    assert_eq!(recs[1]["result"]["p_at_1"], 0.2);

    ok(p, &["train", "lstm", "--corpus", "corpus", "--out", "tables/lstm.txt", "--epochs", "1", "--dim", "8", "--hidden", "8", "--report", "results/training.jsonl"]);
    assert!(p.join("tables/lstm.txt.ckpt").exists());
    ok(p, &["eval", "complete", "--method", "lstm", "--test-split", "--corpus", "corpus", "--checkpoint", "tables/lstm.txt.ckpt", "--out", "results/completion.jsonl"]);
    let recs = lines(&p.join("results/completion.jsonl"));
    assert_eq!(recs[2]["source_tag"], "OEIS-LSTM");
    let missing = run(p, &["eval", "complete", "--method", "lstm", "--test-split", "--corpus", "corpus"]);
    assert_eq!(missing.status.code(), Some(2));
}

#[test]
fn analogy_and_expansion_runs() {
    let dir = TempDir::new().unwrap();
    let p = dir.path();
    write_table(&p.join("a.txt"), 0.0);
    ok(p, &["eval", "analogy", "--table", "a.txt", "--problems", fixture("analogy_sample.tsv").to_str().unwrap(), "--out", "results/analogy.jsonl"]);
    let rec = &lines(&p.join("results/analogy.jsonl"))[0];
    assert_eq!(rec["result"]["n"], 5);
    assert_eq!(rec["result"]["random_baseline"], 0.25);
    // 11529 and larger are outside the table
    assert!(rec["result"]["abstained"].as_u64().unwrap() >= 1);

    let out = ok(p, &["eval", "expand", "--table", "a.txt", "--seeds", "2,4,6", "--k", "3", "--range", "1:50", "--out", "results/expansion.jsonl"]);
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.starts_with("a: "));
    let rec = &lines(&p.join("results/expansion.jsonl"))[0];
    let cands = rec["result"]["candidates"].as_array().unwrap();
    assert_eq!(cands.len(), 3);
    for c in cands {
        let n: u32 = c[0].as_str().unwrap().parse().unwrap();
        assert!((1..=50).contains(&n) && ![2, 4, 6].contains(&n));
    }
    let bad = run(p, &["eval", "expand", "--table", "a.txt", "--seeds", "2", "--range", "9:1"]);
    assert_eq!(bad.status.code(), Some(2));
}
