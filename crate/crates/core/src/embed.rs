//! Embedding tables: lookup with optional subword composition, vector
//! arithmetic, nearest-neighbour ranking and the word-vector text format.

use std::borrow::Cow;
use std::cmp::Ordering;
use std::collections::{HashMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufWriter, Write};
use std::path::{Path, PathBuf};

use log::warn;
use smol_str::SmolStr;

use crate::corpus::open_text;
use crate::error::{Error, Result};
use crate::token::{as_u64, cmp_numeric, is_canonical_integer, Token};
use crate::vocab::{ngram_buckets, SubwordConfig};

/// Hashed n-gram vectors attached to a table.
#[derive(Clone, Debug, PartialEq)]
pub struct SubwordMatrix {
    pub config: SubwordConfig,
    /// `bucket_count × dim`, row-major.
    pub buckets: Vec<f32>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingTable {
    dim: usize,
    tokens: Vec<Token>,
    index: HashMap<Token, usize>,
    matrix: Vec<f32>,
    subword: Option<SubwordMatrix>,
    source_tag: String,
}

fn check_finite(values: &[f32], what: &str) -> Result<()> {
    match values.iter().position(|x| !x.is_finite()) {
        Some(pos) => Err(Error::Numerical(format!("non-finite entry at {pos} in {what}"))),
        None => Ok(()),
    }
}

impl EmbeddingTable {
    /// Builds a table from row-major `matrix` (`tokens.len() × dim`).
    pub fn new(
        source_tag: impl Into<String>,
        dim: usize,
        tokens: Vec<Token>,
        matrix: Vec<f32>,
    ) -> Result<Self> {
        if dim == 0 {
            return Err(Error::invalid("embedding dimension must be positive"));
        }
        if matrix.len() != tokens.len() * dim {
            return Err(Error::invalid(format!(
                "matrix has {} entries, expected {} × {dim}",
                matrix.len(),
                tokens.len()
            )));
        }
        check_finite(&matrix, "embedding matrix")?;
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i).is_some() {
                return Err(Error::invalid(format!("duplicate token {t:?}")));
            }
        }
        Ok(EmbeddingTable {
            dim,
            tokens,
            index,
            matrix,
            subword: None,
            source_tag: source_tag.into(),
        })
    }

    /// Attaches a bucket matrix of `config.bucket_count × dim`.
    pub fn with_subword(mut self, config: SubwordConfig, buckets: Vec<f32>) -> Result<Self> {
        config.validate()?;
        if buckets.len() != config.bucket_count as usize * self.dim {
            return Err(Error::invalid(format!(
                "bucket matrix has {} entries, expected {} × {}",
                buckets.len(),
                config.bucket_count,
                self.dim
            )));
        }
        check_finite(&buckets, "bucket matrix")?;
        self.subword = Some(SubwordMatrix { config, buckets });
        Ok(self)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[Token] {
        &self.tokens
    }

    pub fn source_tag(&self) -> &str {
        &self.source_tag
    }

    pub fn set_source_tag(&mut self, tag: impl Into<String>) {
        self.source_tag = tag.into();
    }

    pub fn subword(&self) -> Option<&SubwordMatrix> {
        self.subword.as_ref()
    }

    pub fn has_subword(&self) -> bool {
        self.subword.is_some()
    }

    pub fn contains(&self, token: &str) -> bool {
        self.index.contains_key(token)
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.matrix[i * self.dim..(i + 1) * self.dim]
    }

    /// The stored row of `token`, ignoring subword composition.
    pub fn stored(&self, token: &str) -> Option<&[f32]> {
        self.index.get(token).map(|&i| self.row(i))
    }

    pub fn bucket_row(&self, bucket: u32) -> Option<&[f32]> {
        let sw = self.subword.as_ref()?;
        let b = bucket as usize;
        Some(&sw.buckets[b * self.dim..(b + 1) * self.dim])
    }

    /// Without subwords: the stored row, if any. With subwords: the mean of
    /// the token row (when in-vocabulary) and all its n-gram bucket rows.
    pub fn lookup(&self, token: &str) -> Option<Cow<'_, [f32]>> {
        let Some(sw) = &self.subword else {
            return self.stored(token).map(Cow::Borrowed);
        };
        let mut sum = vec![0f32; self.dim];
        let mut n = 0usize;
        if let Some(row) = self.stored(token) {
            add_into(&mut sum, row);
            n += 1;
        }
        for bucket in ngram_buckets(token, &sw.config) {
            add_into(&mut sum, self.bucket_row(bucket).expect("subword present"));
            n += 1;
        }
        if n == 0 {
            return None;
        }
        let scale = 1.0 / n as f32;
        sum.iter_mut().for_each(|x| *x *= scale);
        Some(Cow::Owned(sum))
    }

    /// Writes the main matrix as `<count> <dim>` followed by one row per token.
    pub fn write_text<W: Write>(&self, mut sink: W) -> Result<()> {
        writeln!(sink, "{} {}", self.tokens.len(), self.dim)?;
        for (i, token) in self.tokens.iter().enumerate() {
            write_row(&mut sink, token, self.row(i))?;
        }
        Ok(())
    }

    /// Writes the bucket matrix in the same format, keyed by bucket index.
    pub fn write_buckets<W: Write>(&self, mut sink: W) -> Result<()> {
        let sw = self
            .subword
            .as_ref()
            .ok_or_else(|| Error::invalid("table has no subword component"))?;
        writeln!(sink, "{} {}", sw.config.bucket_count, self.dim)?;
        for b in 0..sw.config.bucket_count {
            write_row(&mut sink, &b.to_string(), self.bucket_row(b).unwrap())?;
        }
        Ok(())
    }

    /// Saves `path`, plus `path.meta` and (for subword tables) `path.buckets`.
    pub fn save(&self, path: &Path) -> Result<()> {
        self.write_text(BufWriter::new(File::create(path)?))?;
        let mut meta = BufWriter::new(File::create(sidecar(path, "meta"))?);
        writeln!(meta, "source_tag={}", self.source_tag)?;
        if let Some(sw) = &self.subword {
            writeln!(meta, "n_min={}", sw.config.n_min)?;
            writeln!(meta, "n_max={}", sw.config.n_max)?;
            writeln!(meta, "bucket_count={}", sw.config.bucket_count)?;
            self.write_buckets(BufWriter::new(File::create(sidecar(path, "buckets"))?))?;
        }
        meta.flush()?;
        Ok(())
    }

    /// Loads a table saved by [`EmbeddingTable::save`]. Sidecars are optional;
    /// without `.meta` the tag defaults to the file stem.
    pub fn load(path: &Path) -> Result<Self> {
        let mut table = load_text(open_text(path)?)?;
        table.source_tag = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default();
        let meta_path = sidecar(path, "meta");
        if !meta_path.exists() {
            return Ok(table);
        }
        let mut meta = HashMap::new();
        for line in open_text(&meta_path)?.lines() {
            let line = line?;
            if let Some((k, v)) = line.split_once('=') {
                meta.insert(k.trim().to_string(), v.trim().to_string());
            }
        }
        if let Some(tag) = meta.get("source_tag") {
            table.source_tag = tag.clone();
        }
        if let Some(bc) = meta.get("bucket_count") {
            let parse = |key: &str| -> Result<usize> {
                meta.get(key)
                    .and_then(|v| v.parse().ok())
                    .ok_or_else(|| Error::Format(format!("{}: missing {key}", meta_path.display())))
            };
            let config = SubwordConfig {
                n_min: parse("n_min")?,
                n_max: parse("n_max")?,
                bucket_count: bc
                    .parse()
                    .map_err(|_| Error::Format(format!("bad bucket_count {bc:?}")))?,
            };
            let bucket_table = load_text(open_text(&sidecar(path, "buckets"))?)?;
            if bucket_table.dim != table.dim || bucket_table.len() != config.bucket_count as usize {
                return Err(Error::Format("bucket sidecar shape does not match".into()));
            }
            let mut buckets = vec![0f32; bucket_table.matrix.len()];
            for (i, key) in bucket_table.tokens.iter().enumerate() {
                let b = as_u64(key)
                    .filter(|&b| b < u64::from(config.bucket_count))
                    .ok_or_else(|| Error::Format(format!("bad bucket key {key:?}")))?
                    as usize;
                buckets[b * table.dim..(b + 1) * table.dim].copy_from_slice(bucket_table.row(i));
            }
            table = table.with_subword(config, buckets)?;
        }
        Ok(table)
    }
}

fn add_into(acc: &mut [f32], row: &[f32]) {
    acc.iter_mut().zip(row).for_each(|(a, &x)| *a += x);
}

fn write_row<W: Write>(sink: &mut W, token: &str, row: &[f32]) -> Result<()> {
    sink.write_all(token.as_bytes())?;
    for x in row {
        // `{}` prints the shortest representation that round-trips exactly.
        write!(sink, " {x}")?;
    }
    writeln!(sink)?;
    Ok(())
}

pub fn sidecar(path: &Path, ext: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".");
    s.push(ext);
    PathBuf::from(s)
}

/// Reads the `<count> <dim>` text format. Every row must have exactly `dim`
/// values and the row count must match the header.
pub fn load_text<R: BufRead>(source: R) -> Result<EmbeddingTable> {
    let mut lines = source.lines();
    let header = lines
        .next()
        .ok_or_else(|| Error::Format("empty embedding file".into()))??;
    let (count, dim) = parse_header(&header).ok_or_else(|| Error::parse(1, "expected `<count> <dim>` header"))?;
    let mut tokens = Vec::with_capacity(count);
    let mut matrix = Vec::with_capacity(count * dim);
    for (idx, line) in lines.enumerate() {
        let line_no = idx + 2;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let mut fields = line.split_ascii_whitespace();
        let token = fields.next().unwrap();
        let before = matrix.len();
        for f in fields {
            let x: f32 = f
                .parse()
                .map_err(|_| Error::parse(line_no, format!("bad number {f:?}")))?;
            matrix.push(x);
        }
        if matrix.len() - before != dim {
            return Err(Error::parse(
                line_no,
                format!("expected {dim} values, found {}", matrix.len() - before),
            ));
        }
        tokens.push(SmolStr::new(token));
    }
    if tokens.len() != count {
        return Err(Error::Format(format!(
            "header declares {count} rows, file has {}",
            tokens.len()
        )));
    }
    EmbeddingTable::new("", dim, tokens, matrix)
}

fn parse_header(line: &str) -> Option<(usize, usize)> {
    let mut it = line.split_ascii_whitespace();
    let count = it.next()?.parse().ok()?;
    let dim = it.next()?.parse().ok()?;
    if it.next().is_some() || dim == 0 {
        return None;
    }
    Some((count, dim))
}

/// Loads a published word-vector text file, keeping only canonical integer
/// tokens. `headerless` is for GloVe-style files without a `<count> <dim>` line.
/// Tokens containing spaces are tolerated (the last `dim` fields are the vector).
pub fn load_pretrained_integers<R: BufRead>(
    source: R,
    headerless: bool,
    source_tag: &str,
) -> Result<EmbeddingTable> {
    let mut lines = source.lines().enumerate().peekable();
    let mut dim = None;
    if !headerless {
        let (_, header) = lines
            .next()
            .ok_or_else(|| Error::Format("empty word-vector file".into()))?;
        let header = header?;
        let (_, d) = parse_header(&header).ok_or_else(|| Error::parse(1, "expected `<count> <dim>` header"))?;
        dim = Some(d);
    }
    let mut tokens = Vec::new();
    let mut matrix = Vec::new();
    let mut seen = HashSet::new();
    let mut rows = 0usize;
    for (idx, line) in lines {
        let line = line?;
        let fields: Vec<&str> = line.split(' ').filter(|f| !f.is_empty()).collect();
        if fields.len() < 2 {
            continue;
        }
        rows += 1;
        let d = *dim.get_or_insert(fields.len() - 1);
        if fields.len() < d + 1 {
            return Err(Error::parse(idx + 1, format!("expected {d} values")));
        }
        let token_fields = fields.len() - d;
        if token_fields != 1 || !is_canonical_integer(fields[0]) || !seen.insert(SmolStr::new(fields[0])) {
            continue;
        }
        for f in &fields[1..] {
            matrix.push(
                f.parse::<f32>()
                    .map_err(|_| Error::parse(idx + 1, format!("bad number {f:?}")))?,
            );
        }
        tokens.push(SmolStr::new(fields[0]));
    }
    let dim = match dim {
        Some(d) if rows > 0 || !headerless => d,
        _ => return Err(Error::Format("word-vector file has no vectors".into())),
    };
    if tokens.is_empty() {
        warn!("{source_tag}: no integer tokens found among {rows} rows");
    }
    EmbeddingTable::new(source_tag, dim, tokens, matrix)
}

/// Reads a pretrained file from disk, decompressing gzip when needed.
pub fn load_pretrained_file(path: &Path, headerless: bool, source_tag: &str) -> Result<EmbeddingTable> {
    load_pretrained_integers(open_text(path)?, headerless, source_tag)
}

fn dot(u: &[f32], v: &[f32]) -> f64 {
    u.iter().zip(v).map(|(&a, &b)| f64::from(a) * f64::from(b)).sum()
}

fn norm(u: &[f32]) -> f64 {
    dot(u, u).sqrt()
}

/// Cosine similarity, computed in double precision and clamped to [-1, 1].
pub fn cosine(u: &[f32], v: &[f32]) -> Result<f64> {
    if u.len() != v.len() {
        return Err(Error::invalid(format!(
            "dimension mismatch: {} vs {}",
            u.len(),
            v.len()
        )));
    }
    let (nu, nv) = (norm(u), norm(v));
    if nu == 0.0 || nv == 0.0 {
        return Err(Error::invalid("cosine of a zero vector"));
    }
    Ok((dot(u, v) / (nu * nv)).clamp(-1.0, 1.0))
}

/// Mean of the looked-up vectors.
pub fn centroid<S: AsRef<str>>(table: &EmbeddingTable, tokens: &[S]) -> Result<Vec<f32>> {
    if tokens.is_empty() {
        return Err(Error::invalid("centroid of an empty token list"));
    }
    let mut missing = Vec::new();
    let mut sum = vec![0f64; table.dim()];
    for t in tokens {
        match table.lookup(t.as_ref()) {
            Some(v) => sum.iter_mut().zip(v.iter()).for_each(|(s, &x)| *s += f64::from(x)),
            None => missing.push(t.as_ref().to_string()),
        }
    }
    if !missing.is_empty() {
        return Err(Error::invalid(format!(
            "tokens not resolvable: {}",
            missing.join(", ")
        )));
    }
    let n = tokens.len() as f64;
    Ok(sum.into_iter().map(|s| (s / n) as f32).collect())
}

/// Where nearest-neighbour candidates come from.
#[derive(Clone, Debug, PartialEq)]
pub enum CandidateScope {
    /// Every token stored in the table.
    Vocabulary,
    /// Integers in `lo..=hi`. Subword tables resolve all of them; other
    /// tables contribute only stored tokens.
    Range { lo: i64, hi: i64 },
    Tokens(Vec<Token>),
}

fn scope_tokens(table: &EmbeddingTable, scope: &CandidateScope) -> Vec<Token> {
    match scope {
        CandidateScope::Vocabulary => table.tokens().to_vec(),
        CandidateScope::Range { lo, hi } => {
            if table.has_subword() {
                (*lo..=*hi).map(|n| SmolStr::from(n.to_string())).collect()
            } else {
                table
                    .tokens()
                    .iter()
                    .filter(|t| {
                        t.parse::<i64>()
                            .map(|n| (*lo..=*hi).contains(&n))
                            .unwrap_or(false)
                    })
                    .cloned()
                    .collect()
            }
        }
        CandidateScope::Tokens(tokens) => tokens.clone(),
    }
}

/// Ranks candidates by descending cosine similarity to `query`; ties go to the
/// numerically smaller token. Excluded, unresolvable and zero-norm candidates
/// are skipped.
pub fn nearest(
    table: &EmbeddingTable,
    query: &[f32],
    scope: &CandidateScope,
    k: usize,
    exclude: &HashSet<Token>,
) -> Result<Vec<(Token, f64)>> {
    if k == 0 {
        return Err(Error::invalid("k must be at least 1"));
    }
    if norm(query) == 0.0 {
        return Err(Error::invalid("query vector is zero"));
    }
    let mut scored = Vec::new();
    let mut seen = HashSet::new();
    for token in scope_tokens(table, scope) {
        if exclude.contains(&token) || !seen.insert(token.clone()) {
            continue;
        }
        let Some(v) = table.lookup(&token) else { continue };
        if let Ok(sim) = cosine(query, &v) {
            scored.push((token, sim));
        }
    }
    if scored.is_empty() {
        return Err(Error::invalid("no candidates left after exclusion"));
    }
    scored.sort_by(|a, b| {
        b.1.partial_cmp(&a.1)
            .unwrap_or(Ordering::Equal)
            .then_with(|| cmp_numeric(&a.0, &b.0))
    });
    scored.truncate(k);
    Ok(scored)
}

/// Concatenates two tables over the tokens both can resolve. The result is a
/// plain (non-subword) table of dimension `a.dim + b.dim`.
pub fn concat_tables(a: &EmbeddingTable, b: &EmbeddingTable) -> Result<EmbeddingTable> {
    let candidates: Vec<&Token> = match (a.has_subword(), b.has_subword()) {
        (_, false) => b.tokens().iter().collect(),
        (false, true) => a.tokens().iter().collect(),
        (true, true) => {
            let mut seen = HashSet::new();
            a.tokens()
                .iter()
                .chain(b.tokens())
                .filter(|t| seen.insert(*t))
                .collect()
        }
    };
    let dim = a.dim() + b.dim();
    let mut tokens = Vec::new();
    let mut matrix = Vec::new();
    for t in candidates {
        if let (Some(va), Some(vb)) = (a.lookup(t), b.lookup(t)) {
            matrix.extend_from_slice(&va);
            matrix.extend_from_slice(&vb);
            tokens.push(t.clone());
        }
    }
    if tokens.is_empty() {
        warn!(
            "concatenation of {} and {} has no shared tokens",
            a.source_tag(),
            b.source_tag()
        );
    }
    let tag = format!("Concatenate({}, {})", a.source_tag(), b.source_tag());
    EmbeddingTable::new(tag, dim, tokens, matrix)
}
