//! OEIS `stripped` dump ingestion, reproducible splits and corpus statistics.

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use flate2::read::MultiGzDecoder;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use smol_str::SmolStr;

use crate::error::{Error, Result};
use crate::token::{canonicalize, Token};
use crate::vocab::Vocabulary;

/// One sequence: its A-number and its listed terms.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SequenceRecord {
    pub id: SmolStr,
    pub terms: Vec<Token>,
}

impl SequenceRecord {
    /// Builds a record, canonicalizing terms and validating the id.
    pub fn new<S: AsRef<str>>(id: &str, terms: &[S]) -> Result<Self> {
        if !is_sequence_id(id) {
            return Err(Error::invalid(format!("bad sequence id {id:?}")));
        }
        if terms.is_empty() {
            return Err(Error::invalid(format!("{id}: empty term list")));
        }
        let terms = terms
            .iter()
            .map(|t| {
                canonicalize(t.as_ref())
                    .ok_or_else(|| Error::invalid(format!("{id}: non-integer term {:?}", t.as_ref())))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(SequenceRecord {
            id: SmolStr::new(id),
            terms,
        })
    }
}

fn is_sequence_id(id: &str) -> bool {
    id.len() == 7 && id.starts_with('A') && id[1..].bytes().all(|b| b.is_ascii_digit())
}

/// Parses the OEIS `stripped` format. Comment lines (`#`) and blank lines
/// are skipped; line numbers in errors are 1-based.
pub fn parse_stripped<R: BufRead>(source: R) -> Result<Vec<SequenceRecord>> {
    let mut records = Vec::new();
    for (idx, line) in source.lines().enumerate() {
        let line_no = idx + 1;
        let line = line?;
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        records.push(parse_line(line).map_err(|message| Error::parse(line_no, message))?);
    }
    Ok(records)
}

fn parse_line(line: &str) -> std::result::Result<SequenceRecord, String> {
    let (id, rest) = match line.find(|c: char| c.is_whitespace() || c == ',') {
        Some(pos) => line.split_at(pos),
        None => (line, ""),
    };
    if !is_sequence_id(id) {
        return Err(format!("missing or malformed A-number in {id:?}"));
    }
    let body = rest.trim().trim_start_matches(',').trim_end_matches(',');
    if body.trim().is_empty() {
        return Err(format!("{id}: empty term list"));
    }
    let mut terms = Vec::new();
    for raw in body.split(',') {
        let raw = raw.trim();
        match canonicalize(raw) {
            Some(t) => terms.push(t),
            None => return Err(format!("{id}: non-integer term {raw:?}")),
        }
    }
    Ok(SequenceRecord {
        id: SmolStr::new(id),
        terms,
    })
}

/// Opens a file for line reading, transparently decompressing gzip input.
pub fn open_text(path: &Path) -> Result<Box<dyn BufRead>> {
    let mut file = File::open(path)?;
    let mut magic = [0u8; 2];
    let n = file.read(&mut magic)?;
    let file = File::open(path)?;
    if n == 2 && magic == [0x1f, 0x8b] {
        Ok(Box::new(BufReader::new(MultiGzDecoder::new(file))))
    } else {
        Ok(Box::new(BufReader::new(file)))
    }
}

/// Reads a (possibly gzip-compressed) stripped dump.
pub fn read_stripped(path: &Path) -> Result<Vec<SequenceRecord>> {
    parse_stripped(open_text(path)?)
}

/// Writes records in stripped format: `A000040 ,2,3,5,7,`.
pub fn write_stripped<W: Write>(records: &[SequenceRecord], mut sink: W) -> Result<()> {
    for record in records {
        write!(sink, "{} ,", record.id)?;
        for term in &record.terms {
            write!(sink, "{term},")?;
        }
        writeln!(sink)?;
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitName {
    Train,
    Dev,
    Test,
}

impl SplitName {
    pub fn as_str(self) -> &'static str {
        match self {
            SplitName::Train => "train",
            SplitName::Dev => "dev",
            SplitName::Test => "test",
        }
    }
}

impl fmt::Display for SplitName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for SplitName {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(SplitName::Train),
            "dev" => Ok(SplitName::Dev),
            "test" => Ok(SplitName::Test),
            other => Err(Error::Format(format!("unknown split name {other:?}"))),
        }
    }
}

/// A 90/5/5 partition of a corpus. Each part keeps input order.
#[derive(Clone, Debug)]
pub struct CorpusSplit {
    pub train: Vec<SequenceRecord>,
    pub dev: Vec<SequenceRecord>,
    pub test: Vec<SequenceRecord>,
    pub seed: u64,
}

pub const MIN_SPLIT_RECORDS: usize = 20;

/// Splits by shuffling the sorted id list with `seed`: the first
/// `floor(0.05 N)` ids go to dev, the next `floor(0.05 N)` to test, and the
/// rest to train. The assignment depends only on the id set and the seed.
pub fn split_corpus(records: Vec<SequenceRecord>, seed: u64) -> Result<CorpusSplit> {
    let assignment = assign_splits(records.iter().map(|r| r.id.clone()), seed)?;
    Ok(partition(records, &assignment, seed))
}

/// Computes the id → split assignment for a set of ids.
pub fn assign_splits<I: IntoIterator<Item = SmolStr>>(
    ids: I,
    seed: u64,
) -> Result<HashMap<SmolStr, SplitName>> {
    let mut ids: Vec<SmolStr> = ids.into_iter().collect();
    let n = ids.len();
    if n < MIN_SPLIT_RECORDS {
        return Err(Error::invalid(format!(
            "need at least {MIN_SPLIT_RECORDS} records to split, got {n}"
        )));
    }
    ids.sort_unstable();
    if let Some(w) = ids.windows(2).find(|w| w[0] == w[1]) {
        return Err(Error::invalid(format!("duplicate sequence id {}", w[0])));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    ids.shuffle(&mut rng);
    let held_out = n / 20;
    Ok(ids
        .into_iter()
        .enumerate()
        .map(|(i, id)| {
            let split = if i < held_out {
                SplitName::Dev
            } else if i < 2 * held_out {
                SplitName::Test
            } else {
                SplitName::Train
            };
            (id, split)
        })
        .collect())
}

/// Distributes records according to an assignment. Records missing from the
/// assignment are placed in train.
pub fn partition(
    records: Vec<SequenceRecord>,
    assignment: &HashMap<SmolStr, SplitName>,
    seed: u64,
) -> CorpusSplit {
    let mut split = CorpusSplit {
        train: Vec::new(),
        dev: Vec::new(),
        test: Vec::new(),
        seed,
    };
    for record in records {
        match assignment.get(&record.id).copied().unwrap_or(SplitName::Train) {
            SplitName::Train => split.train.push(record),
            SplitName::Dev => split.dev.push(record),
            SplitName::Test => split.test.push(record),
        }
    }
    split
}

impl CorpusSplit {
    pub fn part(&self, name: SplitName) -> &[SequenceRecord] {
        match name {
            SplitName::Train => &self.train,
            SplitName::Dev => &self.dev,
            SplitName::Test => &self.test,
        }
    }

    pub fn len(&self) -> usize {
        self.train.len() + self.dev.len() + self.test.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Writes `<id>\t<split>` lines sorted by id.
    pub fn write_manifest<W: Write>(&self, mut sink: W) -> Result<()> {
        let mut rows: Vec<(&str, SplitName)> = Vec::with_capacity(self.len());
        for name in [SplitName::Train, SplitName::Dev, SplitName::Test] {
            rows.extend(self.part(name).iter().map(|r| (r.id.as_str(), name)));
        }
        rows.sort_unstable();
        for (id, name) in rows {
            writeln!(sink, "{id}\t{name}")?;
        }
        Ok(())
    }
}

/// Reads a split manifest written by [`CorpusSplit::write_manifest`].
pub fn read_manifest<R: BufRead>(source: R) -> Result<HashMap<SmolStr, SplitName>> {
    let mut out = HashMap::new();
    for (idx, line) in source.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let (id, name) = line
            .split_once('\t')
            .ok_or_else(|| Error::parse(idx + 1, "expected <id>\\t<split>"))?;
        if !is_sequence_id(id) {
            return Err(Error::parse(idx + 1, format!("bad sequence id {id:?}")));
        }
        let name = name
            .trim()
            .parse()
            .map_err(|_| Error::parse(idx + 1, format!("unknown split {name:?}")))?;
        out.insert(SmolStr::new(id), name);
    }
    Ok(out)
}

/// Size and vocabulary statistics for one split part.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusStats {
    pub sequence_count: usize,
    pub token_count: usize,
    pub mean_sequence_length: f64,
    /// Distinct tokens, without min-count filtering.
    pub type_count: usize,
    /// Types that occur exactly once in this part.
    pub singleton_type_count: usize,
    /// Fraction of tokens absent from the supplied vocabulary.
    pub oov_rate: Option<f64>,
}

pub fn compute_stats(part: &[SequenceRecord], vocab: Option<&Vocabulary>) -> CorpusStats {
    let mut counts: HashMap<&str, u32> = HashMap::new();
    let mut token_count = 0usize;
    let mut oov = 0usize;
    for record in part {
        token_count += record.terms.len();
        for term in &record.terms {
            *counts.entry(term.as_str()).or_default() += 1;
            if let Some(v) = vocab {
                if !v.contains(term) {
                    oov += 1;
                }
            }
        }
    }
    let singleton_type_count = counts.values().filter(|&&c| c == 1).count();
    let mean_sequence_length = if part.is_empty() {
        0.0
    } else {
        token_count as f64 / part.len() as f64
    };
    let oov_rate = vocab.map(|_| {
        if token_count == 0 {
            0.0
        } else {
            oov as f64 / token_count as f64
        }
    });
    CorpusStats {
        sequence_count: part.len(),
        token_count,
        mean_sequence_length,
        type_count: counts.len(),
        singleton_type_count,
        oov_rate,
    }
}

/// Distinct ids across a set of records.
pub fn id_set(records: &[SequenceRecord]) -> HashSet<&str> {
    records.iter().map(|r| r.id.as_str()).collect()
}
