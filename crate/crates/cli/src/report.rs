//! Line-delimited JSON result records and their text rendering.

use std::collections::BTreeMap;
use std::fs::{self, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};
use serde_json::Value;

pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Record {
    pub kind: String,
    pub source_tag: String,
    pub seed: u64,
    /// Seconds since the Unix epoch.
    pub timestamp: u64,
    pub tool_version: String,
    pub config: Value,
    pub result: Value,
}

impl Record {
    pub fn new<C: Serialize, R: Serialize>(kind: &str, source_tag: &str, seed: u64, config: &C, result: &R) -> Result<Self> {
        Ok(Record {
            kind: kind.to_string(),
            source_tag: source_tag.to_string(),
            seed,
            timestamp: SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs()),
            tool_version: TOOL_VERSION.to_string(),
            config: serde_json::to_value(config)?,
            result: serde_json::to_value(result)?,
        })
    }
}

/// Appends records to `path`, creating parent directories.
pub fn append(path: &Path, records: &[Record]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    let mut f = OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .with_context(|| format!("opening report {}", path.display()))?;
    for r in records {
        writeln!(f, "{}", serde_json::to_string(r)?)?;
    }
    Ok(())
}

/// Reads every `*.jsonl` file directly under `dir`, in name order.
pub fn read_bundle(dir: &Path) -> Result<Vec<(PathBuf, Record)>> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .with_context(|| format!("reading bundle {}", dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == "jsonl"))
        .collect();
    files.sort();
    let mut out = Vec::new();
    for file in files {
        let reader = BufReader::new(fs::File::open(&file)?);
        for (i, line) in reader.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let record: Record = serde_json::from_str(&line).map_err(|e| {
                intembed::Error::Format(format!("{}:{}: malformed record: {e}", file.display(), i + 1))
            })?;
            out.push((file.clone(), record));
        }
    }
    Ok(out)
}

fn num(v: &Value, key: &str) -> Option<f64> {
    v.get(key).and_then(Value::as_f64)
}

fn cell(x: Option<f64>) -> String {
    x.map_or_else(|| "-".to_string(), |x| format!("{x:.2}"))
}

/// Left-aligned first column, right-aligned numbers.
fn render_table(title: &str, header: &[String], rows: &[Vec<String>]) -> String {
    let cols = header.len();
    let mut widths: Vec<usize> = header.iter().map(|h| h.chars().count()).collect();
    for row in rows {
        for (w, c) in widths.iter_mut().zip(row) {
            *w = (*w).max(c.chars().count());
        }
    }
    let line = |cells: &[String]| {
        let mut s = String::new();
        for (i, c) in cells.iter().enumerate().take(cols) {
            if i == 0 {
                s.push_str(&format!("{c:<w$}", w = widths[0]));
            } else {
                s.push_str(&format!("  {c:>w$}", w = widths[i]));
            }
        }
        s.trim_end().to_string()
    };
    let mut out = format!("{title}\n{}\n", line(header));
    out.push_str(&"-".repeat(widths.iter().sum::<usize>() + 2 * (cols - 1)));
    out.push('\n');
    for row in rows {
        out.push_str(&line(row));
        out.push('\n');
    }
    out
}

fn probe_section(records: &[&Record]) -> String {
    let properties = ["even", "div3", "div4", "prime"];
    let mut header = vec!["Embeddings".to_string()];
    for p in properties {
        header.push(format!("{p} Single"));
        header.push(format!("{p} All"));
    }
    let mut baseline: BTreeMap<&str, f64> = BTreeMap::new();
    let mut rows: BTreeMap<String, BTreeMap<&str, (f64, f64)>> = BTreeMap::new();
    for r in records {
        let Some(property) = r.result.get("property").and_then(Value::as_str) else { continue };
        let Some(p) = properties.iter().find(|p| **p == property) else { continue };
        if let Some(b) = num(&r.result, "majority_baseline") {
            baseline.entry(p).or_insert(b);
        }
        let shuffled = r.result.get("shuffled_labels").and_then(Value::as_bool).unwrap_or(false);
        let name = if shuffled { format!("{} (shuffled)", r.source_tag) } else { r.source_tag.clone() };
        let single = num(&r.result, "accuracy_single").unwrap_or(f64::NAN);
        let all = num(&r.result, "accuracy_all").unwrap_or(f64::NAN);
        rows.entry(name).or_default().insert(p, (single, all));
    }
    let mut table = Vec::new();
    let mut base_row = vec!["Majority baseline".to_string()];
    for p in properties {
        base_row.push(cell(baseline.get(p).copied()));
        base_row.push(cell(baseline.get(p).copied()));
    }
    table.push(base_row);
    for (name, cells) in rows {
        let mut row = vec![name];
        for p in properties {
            row.push(cell(cells.get(p).map(|c| c.0)));
            row.push(cell(cells.get(p).map(|c| c.1)));
        }
        table.push(row);
    }
    render_table("Probing accuracy (train 1-1000, test 1001-2000)", &header, &table)
}

fn regression_section(records: &[&Record]) -> String {
    let targets = ["value", "digits"];
    let header: Vec<String> = ["Embeddings", "value Single", "value All", "digits Single", "digits All"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    let mut rows: BTreeMap<String, BTreeMap<&str, (f64, f64)>> = BTreeMap::new();
    for r in records {
        let Some(t) = r.result.get("target").and_then(Value::as_str) else { continue };
        let Some(t) = targets.iter().find(|x| **x == t) else { continue };
        let single = num(&r.result, "r2_single").unwrap_or(f64::NAN);
        let all = num(&r.result, "r2_all").unwrap_or(f64::NAN);
        rows.entry(r.source_tag.clone()).or_default().insert(t, (single, all));
    }
    let table: Vec<Vec<String>> = rows
        .into_iter()
        .map(|(name, cells)| {
            let mut row = vec![name];
            for t in targets {
                row.push(cell(cells.get(t).map(|c| c.0)));
                row.push(cell(cells.get(t).map(|c| c.1)));
            }
            row
        })
        .collect();
    render_table("Regression R² (fit and scored on 1-2000)", &header, &table)
}

fn simple_section(title: &str, records: &[&Record], columns: &[(&str, &str)], label: impl Fn(&Record) -> String) -> String {
    let mut header = vec!["Method".to_string()];
    header.extend(columns.iter().map(|(h, _)| h.to_string()));
    let rows: Vec<Vec<String>> = records
        .iter()
        .map(|r| {
            let mut row = vec![label(r)];
            row.extend(columns.iter().map(|(_, key)| cell(num(&r.result, key))));
            row
        })
        .collect();
    render_table(title, &header, &rows)
}

fn stats_section(records: &[&Record]) -> String {
    let header: Vec<String> = ["Split", "Sequences", "Tokens", "Mean length", "Types", "Singletons", "OOV rate"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    let mut rows = Vec::new();
    for r in records {
        let Some(parts) = r.result.as_object() else { continue };
        for split in ["train", "dev", "test"] {
            let Some(s) = parts.get(split) else { continue };
            let int = |k: &str| s.get(k).and_then(Value::as_u64).map_or("-".into(), |x| x.to_string());
            rows.push(vec![
                split.to_string(),
                int("sequence_count"),
                int("token_count"),
                cell(num(s, "mean_sequence_length")),
                int("type_count"),
                int("singleton_type_count"),
                s.get("oov_rate").and_then(Value::as_f64).map_or("-".into(), |x| format!("{x:.4}")),
            ]);
        }
    }
    render_table("Corpus statistics", &header, &rows)
}

fn expansion_section(records: &[&Record]) -> String {
    let mut out = String::from("Seed-set expansion\n");
    for r in records {
        let seeds = r.result.get("seeds").map(|s| s.to_string()).unwrap_or_default();
        let cands: Vec<String> = r
            .result
            .get("candidates")
            .and_then(Value::as_array)
            .map(|a| {
                a.iter()
                    .filter_map(|c| c.get(0).and_then(Value::as_str).map(str::to_string))
                    .collect()
            })
            .unwrap_or_default();
        out.push_str(&format!("{seeds}  {}: {}\n", r.source_tag, cands.join(", ")));
    }
    out
}

/// Human-readable tables for every record kind present, in a fixed order.
pub fn render(records: &[Record]) -> String {
    if records.is_empty() {
        return "no records\n".to_string();
    }
    let of = |kind: &str| records.iter().filter(|r| r.kind == kind).collect::<Vec<_>>();
    let mut sections = Vec::new();
    let stats = of("corpus_stats");
    if !stats.is_empty() {
        sections.push(stats_section(&stats));
    }
    let probes = of("probe");
    if !probes.is_empty() {
        sections.push(probe_section(&probes));
    }
    let regressions = of("regression");
    if !regressions.is_empty() {
        sections.push(regression_section(&regressions));
    }
    let completion = of("completion");
    if !completion.is_empty() {
        sections.push(simple_section(
            "Sequence completion",
            &completion,
            &[("P@1", "p_at_1"), ("P@5", "p_at_5")],
            |r| {
                let set = r.result.get("problem_set").and_then(Value::as_str).unwrap_or("?");
                format!("{set}: {}", r.source_tag)
            },
        ));
    }
    let analogy = of("analogy");
    if !analogy.is_empty() {
        let mut section = simple_section("Analogies", &analogy, &[("Accuracy", "accuracy")], |r| r.source_tag.clone());
        if let Some(b) = analogy.first().and_then(|r| num(&r.result, "random_baseline")) {
            section.push_str(&format!("Random choice baseline: {b:.2}\n"));
        }
        sections.push(section);
    }
    let expansion = of("expansion");
    if !expansion.is_empty() {
        sections.push(expansion_section(&expansion));
    }
    let training = of("training");
    if !training.is_empty() {
        sections.push(format!("Training runs: {}\n", training.iter().map(|r| r.source_tag.as_str()).collect::<Vec<_>>().join(", ")));
    }
    let known = ["corpus_stats", "probe", "regression", "completion", "analogy", "expansion", "training"];
    let other = records.iter().filter(|r| !known.contains(&r.kind.as_str())).count();
    if other > 0 {
        sections.push(format!("{other} records of unknown kind skipped\n"));
    }
    sections.join("\n")
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    fn record(kind: &str, tag: &str, result: Value) -> Record {
        Record::new(kind, tag, 1, &json!({}), &result).unwrap()
    }

    #[test]
    fn empty_bundle_says_so() {
        assert_eq!(render(&[]), "no records\n");
    }

    #[test]
    fn probe_table_layout() {
        let recs = vec![
            record("probe", "A", json!({"property": "even", "accuracy_single": 0.8, "accuracy_all": 1.0, "majority_baseline": 0.5})),
            record("probe", "A", json!({"property": "prime", "accuracy_single": 0.82, "accuracy_all": 0.9, "majority_baseline": 0.865})),
            record("probe", "B", json!({"property": "even", "accuracy_single": 0.5, "accuracy_all": 0.61, "majority_baseline": 0.5})),
        ];
        let text = render(&recs);
        let lines: Vec<&str> = text.lines().collect();
        assert!(lines[1].starts_with("Embeddings"));
        assert!(lines[3].starts_with("Majority baseline"));
        assert!(lines[4].starts_with('A') && lines[4].contains("0.80") && lines[4].contains("1.00"));
        assert!(lines[5].starts_with('B') && lines[5].ends_with('-'));
        // every row is equally wide
        assert_eq!(lines[1].len(), lines[4].len());
    }

    #[test]
    fn bundle_round_trip_and_malformed_lines() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("probe.jsonl");
        let r = record("probe", "A", json!({"property": "even"}));
        append(&path, std::slice::from_ref(&r)).unwrap();
        let back = read_bundle(dir.path()).unwrap();
        assert_eq!(back.len(), 1);
        assert_eq!(back[0].1, r);

        fs::write(dir.path().join("bad.jsonl"), "{not json}\n").unwrap();
        let err = read_bundle(dir.path()).unwrap_err();
        assert!(err.to_string().contains("bad.jsonl"));
    }
}
