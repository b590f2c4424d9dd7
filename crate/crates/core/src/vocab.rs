//! Integer-token vocabulary with a min-count/UNK policy, and digit n-gram subword units.

use std::cmp::Ordering;
use std::collections::HashMap;
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};
use smol_str::SmolStr;

use crate::corpus::SequenceRecord;
use crate::error::{Error, Result};
use crate::token::{cmp_numeric, Token};

pub const UNK: &str = "UNK";
pub const DEFAULT_MIN_COUNT: u64 = 3;

/// Token ↔ id maps. Id 0 is always `UNK`; its count is the number of
/// corpus tokens that were replaced by it.
#[derive(Clone, Debug, PartialEq)]
pub struct Vocabulary {
    tokens: Vec<Token>,
    counts: Vec<u64>,
    index: HashMap<Token, u32>,
    min_count: u64,
}

impl Vocabulary {
    pub const UNK_ID: u32 = 0;

    fn from_parts(tokens: Vec<Token>, counts: Vec<u64>, min_count: u64) -> Self {
        let index = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as u32))
            .collect();
        Vocabulary {
            tokens,
            counts,
            index,
            min_count,
        }
    }

    /// Number of ids, including `UNK`.
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.len() <= 1
    }

    pub fn min_count(&self) -> u64 {
        self.min_count
    }

    pub fn unk_id(&self) -> u32 {
        Self::UNK_ID
    }

    /// Id of a retained token. `UNK` itself is not looked up here.
    pub fn id(&self, token: &str) -> Option<u32> {
        match self.index.get(token) {
            Some(&id) if id != Self::UNK_ID => Some(id),
            _ => None,
        }
    }

    /// True if `token` is a retained (non-UNK) token.
    pub fn contains(&self, token: &str) -> bool {
        self.id(token).is_some()
    }

    pub fn token(&self, id: u32) -> &str {
        &self.tokens[id as usize]
    }

    pub fn count(&self, id: u32) -> u64 {
        self.counts[id as usize]
    }

    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    pub fn tokens(&self) -> &[Token] {
        &self.tokens
    }

    /// Retained integer tokens with their ids, excluding `UNK`.
    pub fn integer_tokens(&self) -> impl Iterator<Item = (u32, &Token)> + '_ {
        self.tokens.iter().enumerate().skip(1).map(|(i, t)| (i as u32, t))
    }

    /// Total number of corpus tokens the vocabulary was built from.
    pub fn total_count(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn encode(&self, record: &SequenceRecord) -> Vec<u32> {
        self.encode_terms(&record.terms)
    }

    pub fn encode_terms<S: AsRef<str>>(&self, terms: &[S]) -> Vec<u32> {
        terms
            .iter()
            .map(|t| self.id(t.as_ref()).unwrap_or(Self::UNK_ID))
            .collect()
    }

    pub fn decode(&self, ids: &[u32]) -> Vec<&str> {
        ids.iter().map(|&id| self.token(id)).collect()
    }

    /// Writes the `#vocab v1` file format.
    pub fn write<W: Write>(&self, mut sink: W) -> Result<()> {
        writeln!(sink, "#vocab v1 min_count={}", self.min_count)?;
        for (token, count) in self.tokens.iter().zip(&self.counts) {
            writeln!(sink, "{token}\t{count}")?;
        }
        Ok(())
    }

    pub fn read<R: BufRead>(source: R) -> Result<Self> {
        let mut lines = source.lines();
        let header = lines
            .next()
            .ok_or_else(|| Error::Format("empty vocabulary file".into()))??;
        let min_count = header
            .strip_prefix("#vocab v1 min_count=")
            .and_then(|k| k.trim().parse().ok())
            .ok_or_else(|| Error::parse(1, format!("bad vocabulary header {header:?}")))?;
        let mut tokens = Vec::new();
        let mut counts = Vec::new();
        for (idx, line) in lines.enumerate() {
            let line = line?;
            let (token, count) = line
                .split_once('\t')
                .ok_or_else(|| Error::parse(idx + 2, "expected <token>\\t<count>"))?;
            let count = count
                .trim()
                .parse()
                .map_err(|_| Error::parse(idx + 2, format!("bad count {count:?}")))?;
            tokens.push(SmolStr::new(token));
            counts.push(count);
        }
        if tokens.first().map(|t| t.as_str()) != Some(UNK) {
            return Err(Error::Format("vocabulary must start with UNK".into()));
        }
        Ok(Self::from_parts(tokens, counts, min_count))
    }
}

/// Counts tokens in `train` and keeps those occurring at least `min_count`
/// times. Ids are assigned by descending count, ties by ascending numeric value.
pub fn build_vocab(train: &[SequenceRecord], min_count: u64) -> Result<Vocabulary> {
    if min_count < 1 {
        return Err(Error::invalid("min_count must be at least 1"));
    }
    let mut counts: HashMap<&Token, u64> = HashMap::new();
    for record in train {
        for term in &record.terms {
            *counts.entry(term).or_default() += 1;
        }
    }
    if counts.is_empty() {
        return Err(Error::invalid("cannot build a vocabulary from an empty corpus"));
    }
    let mut unk_count = 0;
    let mut kept: Vec<(&Token, u64)> = Vec::new();
    for (token, count) in counts {
        if count >= min_count {
            kept.push((token, count));
        } else {
            unk_count += count;
        }
    }
    kept.sort_unstable_by(|a, b| b.1.cmp(&a.1).then_with(|| cmp_numeric(a.0, b.0)));

    let mut tokens = Vec::with_capacity(kept.len() + 1);
    let mut ids_counts = Vec::with_capacity(kept.len() + 1);
    tokens.push(SmolStr::new_inline(UNK));
    ids_counts.push(unk_count);
    for (token, count) in kept {
        tokens.push(token.clone());
        ids_counts.push(count);
    }
    Ok(Vocabulary::from_parts(tokens, ids_counts, min_count))
}

/// Digit n-gram configuration. N-grams are taken from `<token>`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubwordConfig {
    pub n_min: usize,
    pub n_max: usize,
    pub bucket_count: u32,
}

impl Default for SubwordConfig {
    fn default() -> Self {
        SubwordConfig {
            n_min: 3,
            n_max: 6,
            bucket_count: 1 << 21,
        }
    }
}

impl SubwordConfig {
    /// Smaller hash table for desktop-sized runs.
    pub fn desk() -> Self {
        SubwordConfig {
            bucket_count: 1 << 18,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_min < 1 || self.n_min > self.n_max {
            return Err(Error::invalid(format!(
                "need 1 <= n_min <= n_max, got {}..{}",
                self.n_min, self.n_max
            )));
        }
        if self.bucket_count == 0 {
            return Err(Error::invalid("bucket_count must be positive"));
        }
        Ok(())
    }
}

/// One contributor to a subword-composed vector.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum SubwordUnit {
    /// The token's own row (only present in the table if the token is in-vocabulary).
    Whole,
    Bucket(u32),
}

/// 32-bit FNV-1a.
pub fn fnv1a(bytes: &[u8]) -> u32 {
    let mut hash: u32 = 0x811c_9dc5;
    for &b in bytes {
        hash ^= u32::from(b);
        hash = hash.wrapping_mul(0x0100_0193);
    }
    hash
}

/// Hashed bucket ids of all character n-grams (lengths `n_min..=n_max`) of
/// `<token>`. Duplicates are kept.
pub fn ngram_buckets(token: &str, config: &SubwordConfig) -> Vec<u32> {
    let marked: Vec<char> = format!("<{token}>").chars().collect();
    let mut out = Vec::new();
    let mut buf = String::new();
    for n in config.n_min..=config.n_max {
        if n > marked.len() {
            break;
        }
        for window in marked.windows(n) {
            buf.clear();
            buf.extend(window);
            out.push(fnv1a(buf.as_bytes()) % config.bucket_count);
        }
    }
    out
}

/// The whole-token unit followed by one bucket unit per n-gram.
pub fn subword_units(token: &str, config: &SubwordConfig) -> Vec<SubwordUnit> {
    std::iter::once(SubwordUnit::Whole)
        .chain(ngram_buckets(token, config).into_iter().map(SubwordUnit::Bucket))
        .collect()
}

/// Numeric-then-lexicographic order used for stable tie-breaking.
pub fn token_order(a: &str, b: &str) -> Ordering {
    cmp_numeric(a, b)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn rec(id: u32, terms: &[&str]) -> SequenceRecord {
        SequenceRecord::new(&format!("A{id:06}"), terms).unwrap()
    }

    /// Enumerates n-grams of the marked string, independent of the hashing path.
    fn ngrams(token: &str, n_min: usize, n_max: usize) -> Vec<String> {
        let marked = format!("<{token}>");
        let mut out = Vec::new();
        for n in n_min..=n_max {
            for start in 0..marked.len() {
                if start + n <= marked.len() {
                    out.push(marked[start..start + n].to_string());
                }
            }
        }
        out
    }

    #[test]
    fn min_count_replaces_rare_tokens() {
        let train = vec![rec(1, &["7", "1", "1"]), rec(2, &["7", "1", "2"])];
        let v = build_vocab(&train, 3).unwrap();
        assert!(!v.contains("7"));
        assert!(v.contains("1"));
        assert_eq!(v.len(), 2);
        assert_eq!(v.count(Vocabulary::UNK_ID), 3);
        assert_eq!(v.token(0), UNK);
    }

    #[test]
    fn min_count_one_keeps_everything() {
        let train = vec![rec(1, &["5", "3", "3", "10"]), rec(2, &["-4"])];
        let v = build_vocab(&train, 1).unwrap();
        assert_eq!(v.len(), 5);
        // descending count, ties numeric ascending
        assert_eq!(v.decode(&[1, 2, 3, 4]), ["3", "-4", "5", "10"]);
    }

    #[test]
    fn empty_corpus_is_an_error() {
        assert!(build_vocab(&[], 1).is_err());
        assert!(build_vocab(&[rec(1, &["1"])], 0).is_err());
    }

    #[test]
    fn encode_maps_oov_to_unk() {
        let train = vec![rec(1, &["2", "3", "5", "2", "3", "5", "2", "3", "5", "9"])];
        let v = build_vocab(&train, 3).unwrap();
        let ids = v.encode_terms(&["2", "3", "5"]);
        assert_eq!(v.decode(&ids), ["2", "3", "5"]);
        assert_eq!(v.encode_terms(&["2", "9"]), vec![v.id("2").unwrap(), v.unk_id()]);
        assert!(v.encode_terms::<&str>(&[]).is_empty());
    }

    #[test]
    fn vocab_file_round_trip() {
        let train = vec![rec(1, &["2", "3", "3", "4", "4", "4"])];
        let v = build_vocab(&train, 2).unwrap();
        let mut buf = Vec::new();
        v.write(&mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert_eq!(text, "#vocab v1 min_count=2\nUNK\t1\n4\t3\n3\t2\n");
        assert_eq!(Vocabulary::read(buf.as_slice()).unwrap(), v);
    }

    #[test]
    fn subword_unit_counts() {
        let cfg = SubwordConfig::default();
        assert_eq!(ngrams("12", 3, 6), ["<12", "12>", "<12>"]);
        assert_eq!(subword_units("12", &cfg).len(), 4);
        assert_eq!(ngrams("7", 3, 6), ["<7>"]);
        assert_eq!(subword_units("7", &cfg).len(), 2);
        assert_eq!(
            ngrams("1024", 3, 6),
            ["<10", "102", "024", "24>", "<102", "1024", "024>", "<1024", "1024>", "<1024>"]
        );
        assert_eq!(subword_units("1024", &cfg).len(), 11);
    }

    #[test]
    fn buckets_match_enumerated_ngrams() {
        let cfg = SubwordConfig::desk();
        for token in ["1024", "-35", "7", "99991"] {
            let expected: Vec<u32> = ngrams(token, 3, 6)
                .iter()
                .map(|g| fnv1a(g.as_bytes()) % cfg.bucket_count)
                .collect();
            assert_eq!(ngram_buckets(token, &cfg), expected);
        }
    }

    #[test]
    fn fnv1a_reference_values() {
        // Published FNV-1a 32-bit test vectors.
        assert_eq!(fnv1a(b""), 0x811c9dc5);
        assert_eq!(fnv1a(b"a"), 0xe40c292c);
        assert_eq!(fnv1a(b"foobar"), 0xbf9cf968);
    }

    #[test]
    fn config_validation() {
        assert!(SubwordConfig { n_min: 0, ..Default::default() }.validate().is_err());
        assert!(SubwordConfig { n_min: 5, n_max: 4, ..Default::default() }.validate().is_err());
        assert!(SubwordConfig { bucket_count: 0, ..Default::default() }.validate().is_err());
        assert!(SubwordConfig::desk().validate().is_ok());
    }

    proptest! {
        #[test]
        fn unit_count_formula(n in any::<i64>(), n_min in 1usize..5, extra in 0usize..4) {
            let cfg = SubwordConfig { n_min, n_max: n_min + extra, bucket_count: 1000 };
            let token = n.to_string();
            let units = subword_units(&token, &cfg);
            let len = token.len() + 2;
            let expected: usize = (cfg.n_min..=cfg.n_max).map(|k| (len + 1).saturating_sub(k)).sum();
            prop_assert_eq!(units.iter().filter(|u| **u == SubwordUnit::Whole).count(), 1);
            prop_assert_eq!(units.len() - 1, expected);
        }

        #[test]
        fn vocab_is_deterministic_and_bijective(terms in prop::collection::vec(0u16..50, 1..200)) {
            let terms: Vec<String> = terms.iter().map(|t| t.to_string()).collect();
            let train = vec![rec(1, &terms.iter().map(String::as_str).collect::<Vec<_>>())];
            let a = build_vocab(&train, 2).unwrap();
            let b = build_vocab(&train, 2).unwrap();
            prop_assert_eq!(&a, &b);
            for (id, token) in a.integer_tokens() {
                prop_assert_eq!(a.id(token), Some(id));
                prop_assert!(a.count(id) >= 2);
            }
        }
    }
}
