use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use intembed::corpus::{compute_stats, read_stripped, split_corpus, write_stripped, SequenceRecord, SplitName};
use intembed::embed::{concat_tables, load_pretrained_file, sidecar, CandidateScope, EmbeddingTable};
use intembed::lsa::lsa_embeddings;
use intembed::lstm::{extract_embeddings, read_checkpoint, train_lm, write_checkpoint};
use intembed::probes::{probe_binary, probe_regression, BinaryProbeSetup, Property, PropertyKind};
use intembed::skipgram::{train_skipgram_monitored, FASTTEXT_TAG};
use intembed::tasks::{
    evaluate_analogies, expand_seed_set, held_out_last_term, lm_complete, load_analogy_problems,
    load_completion_problems, precision_at_k, search_complete, CompletionProblem, SearchMode, SuffixIndex,
};
use intembed::token::canonicalize;
use intembed::vocab::build_vocab;
use log::{info, warn};
use serde_json::json;

use crate::config::ExperimentConfig;
use crate::report::{self, Record};
use crate::{EvalCommand, IngestArgs, Method, Mode, ProbeArgs, ReportArgs, TableArgs, TrainCommand, TrainCommon};

pub const NOSUB_TAG: &str = "OEIS-FastText-nosub";

fn invalid(msg: impl Into<String>) -> anyhow::Error {
    intembed::Error::InvalidInput(msg.into()).into()
}

fn report_path(config: &ExperimentConfig, explicit: Option<PathBuf>, kind: &str) -> PathBuf {
    explicit.unwrap_or_else(|| config.output_dir().join(format!("{kind}.jsonl")))
}

fn split_file(dir: &Path, split: SplitName) -> PathBuf {
    dir.join(format!("{split}.txt"))
}

fn read_split(dir: &Path, split: SplitName) -> Result<Vec<SequenceRecord>> {
    let path = split_file(dir, split);
    read_stripped(&path).with_context(|| format!("reading {}", path.display()))
}

pub fn ingest(config: &mut ExperimentConfig, args: IngestArgs) -> Result<()> {
    if let Some(seed) = args.seed {
        config.split_seed = seed;
    }
    if let Some(m) = args.min_count {
        config.min_count = m;
    }
    if let Some(dump) = args.dump {
        config.paths.dump = Some(dump);
    }
    let dump = config
        .paths
        .dump
        .clone()
        .ok_or_else(|| invalid("no dump given (use --dump or paths.dump)"))?;
    let out = args.out.unwrap_or_else(|| config.corpus_dir());

    let records = read_stripped(&dump).with_context(|| format!("reading dump {}", dump.display()))?;
    info!("parsed {} sequences from {}", records.len(), dump.display());
    let split = split_corpus(records, config.split_seed)?;
    fs::create_dir_all(&out)?;
    for name in [SplitName::Train, SplitName::Dev, SplitName::Test] {
        let mut w = BufWriter::new(File::create(split_file(&out, name))?);
        write_stripped(split.part(name), &mut w)?;
        w.flush()?;
    }
    let mut w = BufWriter::new(File::create(out.join("manifest.tsv"))?);
    split.write_manifest(&mut w)?;
    w.flush()?;
    let vocab = build_vocab(&split.train, config.min_count)?;
    let mut w = BufWriter::new(File::create(out.join("vocab.txt"))?);
    vocab.write(&mut w)?;
    w.flush()?;

    let stats = json!({
        "train": compute_stats(&split.train, Some(&vocab)),
        "dev": compute_stats(&split.dev, Some(&vocab)),
        "test": compute_stats(&split.test, Some(&vocab)),
        "vocab_size": vocab.len(),
    });
    let cfg = json!({"dump": dump, "split_seed": config.split_seed, "min_count": config.min_count});
    let record = Record::new("corpus_stats", "OEIS", config.split_seed, &cfg, &stats)?;
    report::append(&report_path(config, args.report, "corpus_stats"), &[record])?;
    info!(
        "wrote {} (train {}, dev {}, test {}, vocab {})",
        out.display(),
        split.train.len(),
        split.dev.len(),
        split.test.len(),
        vocab.len()
    );
    Ok(())
}

fn save_table(table: &EmbeddingTable, out: &Path) -> Result<()> {
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    table.save(out).with_context(|| format!("writing {}", out.display()))?;
    info!("wrote {} ({} rows, dim {})", out.display(), table.len(), table.dim());
    Ok(())
}

pub fn train(config: &mut ExperimentConfig, cmd: TrainCommand) -> Result<()> {
    let (common, kind) = match &cmd {
        TrainCommand::Lsa { common, .. } => (common, "lsa"),
        TrainCommand::Skipgram { common, .. } => (common, "skipgram"),
        TrainCommand::Lstm { common, .. } => (common, "lstm"),
    };
    let TrainCommon {
        corpus,
        out,
        seed,
        epochs,
        dim,
        report,
    } = common;
    let corpus = corpus.clone().unwrap_or_else(|| config.corpus_dir());
    let train = read_split(&corpus, SplitName::Train)?;
    let report = report_path(config, report.clone(), "training");

    let record = match &cmd {
        TrainCommand::Lsa { k, .. } => {
            if let Some(k) = k.or(*dim) {
                config.lsa.k = k;
            }
            if let Some(seed) = seed {
                config.lsa.svd.seed = *seed;
            }
            let vocab = build_vocab(&train, config.min_count)?;
            let table = lsa_embeddings(&train, &vocab, config.lsa.k, &config.lsa.svd)?;
            save_table(&table, out)?;
            Record::new("training", table.source_tag(), config.lsa.svd.seed, &config.lsa, &json!({"model": kind, "rows": table.len(), "dim": table.dim(), "output": out}))?
        }
        TrainCommand::Skipgram {
            subword, no_subword, ..
        } => {
            let sg = &mut config.skipgram;
            if let Some(seed) = seed {
                sg.seed = *seed;
            }
            if let Some(e) = epochs {
                sg.epochs = *e;
            }
            if let Some(d) = dim {
                sg.dim = *d;
            }
            if *no_subword {
                sg.subword = None;
            } else if *subword && sg.subword.is_none() {
                sg.subword = Some(intembed::vocab::SubwordConfig::desk());
            }
            let dev = read_split(&corpus, SplitName::Dev)?;
            let vocab = build_vocab(&train, sg.min_count)?;
            let (mut table, log) = train_skipgram_monitored(&train, &dev, &vocab, sg)?;
            table.set_source_tag(if sg.subword.is_some() { FASTTEXT_TAG } else { NOSUB_TAG });
            if !log.heldout_decreased() {
                warn!("held-out loss did not decrease");
            }
            save_table(&table, out)?;
            Record::new("training", table.source_tag(), sg.seed, sg, &json!({"model": kind, "rows": table.len(), "dim": table.dim(), "output": out, "log": log}))?
        }
        TrainCommand::Lstm { hidden, .. } => {
            let lc = &mut config.lstm;
            if let Some(seed) = seed {
                lc.seed = *seed;
            }
            if let Some(e) = epochs {
                lc.epochs = *e;
            }
            if let Some(d) = dim {
                lc.embed_dim = *d;
            }
            if let Some(h) = hidden {
                lc.hidden_dim = *h;
            }
            let dev = read_split(&corpus, SplitName::Dev)?;
            let vocab = build_vocab(&train, lc.min_count)?;
            let (model, log) = train_lm(&train, &dev, &vocab, lc)?;
            let ckpt = sidecar(out, "ckpt");
            if let Some(dir) = ckpt.parent().filter(|d| !d.as_os_str().is_empty()) {
                fs::create_dir_all(dir)?;
            }
            let mut w = BufWriter::new(File::create(&ckpt)?);
            write_checkpoint(&model, &mut w)?;
            w.flush()?;
            let table = extract_embeddings(&model)?;
            save_table(&table, out)?;
            Record::new("training", table.source_tag(), lc.seed, lc, &json!({"model": kind, "rows": table.len(), "dim": table.dim(), "output": out, "checkpoint": ckpt, "log": log}))?
        }
    };
    report::append(&report, &[record])
}

fn load_tables(args: &TableArgs) -> Result<Vec<EmbeddingTable>> {
    let mut tables = Vec::new();
    for path in &args.tables {
        tables.push(EmbeddingTable::load(path).with_context(|| format!("loading {}", path.display()))?);
    }
    for path in &args.pretrained {
        let tag = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "pretrained".into());
        tables.push(load_pretrained_file(path, args.headerless, &tag).with_context(|| format!("loading {}", path.display()))?);
    }
    if tables.is_empty() {
        return Err(invalid("no embedding tables given (use --table or --pretrained)"));
    }
    Ok(tables)
}

fn load_any_table(path: &Path, headerless: bool) -> Result<EmbeddingTable> {
    EmbeddingTable::load(path).or_else(|_| {
        let tag = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        load_pretrained_file(path, headerless, &tag).with_context(|| format!("loading {}", path.display()))
    })
}

pub fn probe(config: &mut ExperimentConfig, args: ProbeArgs) -> Result<()> {
    let properties = args
        .properties
        .iter()
        .map(|p| p.parse::<Property>())
        .collect::<intembed::Result<Vec<_>>>()?;
    let mut tables = if args.tables.tables.is_empty() && args.tables.pretrained.is_empty() {
        Vec::new()
    } else {
        load_tables(&args.tables)?
    };
    if let [a, b] = args.concat.as_slice() {
        let ta = load_any_table(a, args.tables.headerless)?;
        let tb = load_any_table(b, args.tables.headerless)?;
        let mut joined = concat_tables(&ta, &tb)?;
        joined.set_source_tag(format!("{}+{}", ta.source_tag(), tb.source_tag()));
        tables.push(joined);
    }
    if tables.is_empty() {
        return Err(invalid("nothing to probe"));
    }

    let p = &config.probe;
    let setup = BinaryProbeSetup {
        train: p.train.0..=p.train.1,
        test: p.test.0..=p.test.1,
        logistic: p.logistic.clone(),
        shuffle_labels: args.shuffle_seed,
    };
    let seed = args.shuffle_seed.unwrap_or(0);
    let mut records = Vec::new();
    for table in &tables {
        for &property in &properties {
            let record = match property.kind() {
                PropertyKind::Binary => {
                    let r = probe_binary(table, property, &setup)?;
                    info!("{} {property}: single {:.3} all {:.3} (majority {:.3})", r.source_tag, r.accuracy_single, r.accuracy_all, r.majority_baseline);
                    Record::new("probe", table.source_tag(), seed, p, &r)?
                }
                PropertyKind::Regression => {
                    let r = probe_regression(table, property, p.regression.0..=p.regression.1, p.ridge_eps)?;
                    info!("{} {property}: R² single {:.3} all {:.3}", r.source_tag, r.r2_single, r.r2_all);
                    Record::new("regression", table.source_tag(), seed, p, &r)?
                }
            };
            records.push(record);
        }
    }
    report::append(&report_path(config, args.out, "probe"), &records)
}

fn load_problem_file<T>(path: &Path, load: impl FnOnce(BufReader<File>) -> intembed::Result<Vec<T>>) -> Result<Vec<T>> {
    let f = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    load(BufReader::new(f)).with_context(|| format!("parsing {}", path.display()))
}

pub fn eval(config: &mut ExperimentConfig, cmd: EvalCommand) -> Result<()> {
    match cmd {
        EvalCommand::Complete {
            method,
            mode,
            test_split,
            problems,
            corpus,
            checkpoint,
            k,
            out,
        } => {
            let k = k.unwrap_or(config.tasks.k);
            if k == 0 {
                return Err(invalid("k must be at least 1"));
            }
            let corpus = corpus.unwrap_or_else(|| config.corpus_dir());
            let (set_name, problems): (String, Vec<CompletionProblem>) = if test_split {
                ("test-split".into(), held_out_last_term(&read_split(&corpus, SplitName::Test)?, "test-split"))
            } else {
                let path = problems.expect("clap requires --problems without --test-split");
                let name = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
                (name, load_problem_file(&path, load_completion_problems)?)
            };
            if problems.is_empty() {
                return Err(invalid("no completion problems"));
            }
            let (tag, predictions): (String, Vec<Vec<String>>) = match method {
                Method::Search => {
                    // Test-split problems only see the training split so the answer is never indexed.
                    let mut index_records = read_split(&corpus, SplitName::Train)?;
                    if !test_split {
                        index_records.extend(read_split(&corpus, SplitName::Dev)?);
                        index_records.extend(read_split(&corpus, SplitName::Test)?);
                    }
                    let index = SuffixIndex::build(&index_records);
                    let search_mode = match mode {
                        Mode::Full => SearchMode::Full,
                        Mode::Last5 => SearchMode::Last5,
                    };
                    let preds = problems
                        .iter()
                        .map(|p| search_complete(&index, &p.prompt, search_mode, k).into_iter().map(|(t, _)| t.to_string()).collect())
                        .collect();
                    let tag = match mode {
                        Mode::Full => "search-full",
                        Mode::Last5 => "search-last5",
                    };
                    (tag.to_string(), preds)
                }
                Method::Lstm => {
                    let path = checkpoint.ok_or_else(|| invalid("--method lstm needs --checkpoint"))?;
                    let f = File::open(&path).with_context(|| format!("opening {}", path.display()))?;
                    let model = read_checkpoint(BufReader::new(f))?;
                    let mut preds = Vec::with_capacity(problems.len());
                    for p in &problems {
                        preds.push(lm_complete(&model, p, k)?.into_iter().map(|(t, _)| t.to_string()).collect());
                    }
                    (intembed::lstm::LSTM_TAG.to_string(), preds)
                }
            };
            let golds: Vec<_> = problems.iter().map(|p| p.answer.clone()).collect();
            let p1 = precision_at_k(&predictions, &golds, 1)?;
            let pk = precision_at_k(&predictions, &golds, k)?;
            info!("{set_name} {tag}: P@1 {p1:.3} P@{k} {pk:.3} over {}", problems.len());
            let mut result = json!({
                "problem_set": set_name,
                "n": problems.len(),
                "k": k,
                "p_at_1": p1,
                "p_at_k": pk,
            });
            if k == 5 {
                result["p_at_5"] = json!(pk);
            }
            let record = Record::new("completion", &tag, config.split_seed, &config.tasks, &result)?;
            report::append(&report_path(config, out, "completion"), &[record])
        }
        EvalCommand::Analogy { tables, problems, out } => {
            let problems = load_problem_file(&problems, load_analogy_problems)?;
            let mut records = Vec::new();
            for table in load_tables(&tables)? {
                let r = evaluate_analogies(&table, &problems)?;
                info!("{}: accuracy {:.3} (random {:.3}, abstained {})", r.source_tag, r.accuracy, r.random_baseline, r.abstained);
                records.push(Record::new("analogy", table.source_tag(), 0, &json!({}), &r)?);
            }
            report::append(&report_path(config, out, "analogy"), &records)
        }
        EvalCommand::Expand {
            tables,
            seeds,
            k,
            range,
            out,
        } => {
            let k = k.unwrap_or(config.tasks.k);
            let seeds = seeds
                .iter()
                .map(|s| canonicalize(s.trim()).ok_or_else(|| invalid(format!("seed {s:?} is not an integer"))))
                .collect::<Result<Vec<_>>>()?;
            let scope = match range {
                None => CandidateScope::Vocabulary,
                Some(r) => {
                    let (lo, hi) = r.split_once(':').ok_or_else(|| invalid(format!("range {r:?} is not lo:hi")))?;
                    let lo: i64 = lo.trim().parse().map_err(|_| invalid(format!("bad range start {lo:?}")))?;
                    let hi: i64 = hi.trim().parse().map_err(|_| invalid(format!("bad range end {hi:?}")))?;
                    if lo > hi {
                        return Err(invalid("range start exceeds end"));
                    }
                    CandidateScope::Range { lo, hi }
                }
            };
            let mut records = Vec::new();
            for table in load_tables(&tables)? {
                let candidates = expand_seed_set(&table, &seeds, k, &scope)?;
                let shown: Vec<String> = candidates.iter().map(|(t, _)| t.to_string()).collect();
                println!("{}: {}", table.source_tag(), shown.join(", "));
                records.push(Record::new(
                    "expansion",
                    table.source_tag(),
                    0,
                    &json!({"k": k, "scope": format!("{scope:?}")}),
                    &json!({"seeds": seeds, "candidates": candidates}),
                )?);
            }
            report::append(&report_path(config, out, "expansion"), &records)
        }
    }
}

pub fn report(config: &ExperimentConfig, args: ReportArgs) -> Result<()> {
    let dir = args.bundle.unwrap_or_else(|| config.output_dir());
    let records: Vec<Record> = if dir.exists() {
        report::read_bundle(&dir)?.into_iter().map(|(_, r)| r).collect()
    } else {
        warn!("{} does not exist", dir.display());
        Vec::new()
    };
    print!("{}", report::render(&records));
    Ok(())
}
