//! Evaluation battery: sequence completion, multiple-choice analogies and
//! seed-set expansion.

use std::cmp::Ordering;
use std::collections::{HashMap, HashSet};
use std::io::BufRead;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::corpus::SequenceRecord;
use crate::embed::{centroid, cosine, nearest, CandidateScope, EmbeddingTable};
use crate::error::{Error, Result};
use crate::lstm::{next_token_topk, LstmLmModel};
use crate::token::{canonicalize, cmp_numeric, Token};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CompletionProblem {
    pub prompt: Vec<Token>,
    pub answer: Token,
    pub source: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnalogyProblem {
    pub a: Token,
    pub b: Token,
    pub c: Token,
    pub options: Vec<Token>,
    pub answer: Token,
    pub source: String,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Problems {
    Completion(Vec<CompletionProblem>),
    Analogy(Vec<AnalogyProblem>),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProblemKind {
    Completion,
    Analogy,
}

impl FromStr for ProblemKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "completion" => Ok(ProblemKind::Completion),
            "analogy" => Ok(ProblemKind::Analogy),
            _ => Err(Error::invalid(format!("unknown problem kind {s:?}"))),
        }
    }
}

fn integer(field: &str, record: usize) -> Result<Token> {
    canonicalize(field.trim()).ok_or_else(|| Error::parse(record, format!("{field:?} is not an integer")))
}

fn integer_list(field: &str, record: usize) -> Result<Vec<Token>> {
    field.split(',').map(|t| integer(t, record)).collect()
}

fn parse_completion(fields: &[&str], record: usize) -> Result<CompletionProblem> {
    let [prompt, answer, source] = fields else {
        return Err(Error::parse(record, format!("expected 3 tab-separated fields, found {}", fields.len())));
    };
    Ok(CompletionProblem {
        prompt: integer_list(prompt, record)?,
        answer: integer(answer, record)?,
        source: source.trim().to_string(),
    })
}

fn parse_analogy(fields: &[&str], record: usize) -> Result<AnalogyProblem> {
    let [a, b, c, options, answer, source] = fields else {
        return Err(Error::parse(record, format!("expected 6 tab-separated fields, found {}", fields.len())));
    };
    let options = integer_list(options, record)?;
    if !(3..=5).contains(&options.len()) {
        return Err(Error::parse(record, format!("{} options, expected 3 to 5", options.len())));
    }
    if options.iter().collect::<HashSet<_>>().len() != options.len() {
        return Err(Error::parse(record, "options are not distinct"));
    }
    let answer = integer(answer, record)?;
    if !options.contains(&answer) {
        return Err(Error::parse(record, format!("answer {answer} is not among the options")));
    }
    Ok(AnalogyProblem {
        a: integer(a, record)?,
        b: integer(b, record)?,
        c: integer(c, record)?,
        options,
        answer,
        source: source.trim().to_string(),
    })
}

/// Reads line-delimited problems. Blank lines and `#` comments are skipped;
/// error positions count records from 1.
pub fn load_problems<R: BufRead>(source: R, kind: ProblemKind) -> Result<Problems> {
    let mut completion = Vec::new();
    let mut analogy = Vec::new();
    let mut record = 0;
    for line in source.lines() {
        let line = line?;
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        record += 1;
        let fields: Vec<&str> = line.split('\t').collect();
        match kind {
            ProblemKind::Completion => completion.push(parse_completion(&fields, record)?),
            ProblemKind::Analogy => analogy.push(parse_analogy(&fields, record)?),
        }
    }
    Ok(match kind {
        ProblemKind::Completion => Problems::Completion(completion),
        ProblemKind::Analogy => Problems::Analogy(analogy),
    })
}

pub fn load_completion_problems<R: BufRead>(source: R) -> Result<Vec<CompletionProblem>> {
    match load_problems(source, ProblemKind::Completion)? {
        Problems::Completion(p) => Ok(p),
        Problems::Analogy(_) => unreachable!(),
    }
}

pub fn load_analogy_problems<R: BufRead>(source: R) -> Result<Vec<AnalogyProblem>> {
    match load_problems(source, ProblemKind::Analogy)? {
        Problems::Analogy(p) => Ok(p),
        Problems::Completion(_) => unreachable!(),
    }
}

/// One problem per sequence with at least two terms: all but the last term
/// as the prompt, the last term as the answer.
pub fn held_out_last_term(records: &[SequenceRecord], source: &str) -> Vec<CompletionProblem> {
    records
        .iter()
        .filter(|r| r.terms.len() >= 2)
        .map(|r| {
            let (answer, prompt) = r.terms.split_last().expect("two terms");
            CompletionProblem {
                prompt: prompt.to_vec(),
                answer: answer.clone(),
                source: format!("{source}:{}", r.id),
            }
        })
        .collect()
}

const SEPARATOR: u32 = u32::MAX;

/// Exact window → continuation counts over a corpus, for windows of any
/// length. Backed by a suffix array over the interned token stream with a
/// separator after every sequence, so windows never span two sequences.
pub struct SuffixIndex {
    tokens: Vec<Token>,
    ids: HashMap<Token, u32>,
    stream: Vec<u32>,
    suffixes: Vec<u32>,
}

impl SuffixIndex {
    pub fn build(corpus: &[SequenceRecord]) -> Self {
        let mut tokens = Vec::new();
        let mut ids: HashMap<Token, u32> = HashMap::new();
        let mut stream = Vec::new();
        for record in corpus {
            for t in &record.terms {
                let id = *ids.entry(t.clone()).or_insert_with(|| {
                    tokens.push(t.clone());
                    tokens.len() as u32 - 1
                });
                stream.push(id);
            }
            stream.push(SEPARATOR);
        }
        let suffixes = suffix_array(&stream);
        SuffixIndex {
            tokens,
            ids,
            stream,
            suffixes,
        }
    }

    /// Number of corpus tokens, separators excluded.
    pub fn token_count(&self) -> usize {
        self.stream.iter().filter(|&&t| t != SEPARATOR).count()
    }

    /// Suffix-array rows whose suffix starts with `window`.
    fn matching(&self, window: &[u32]) -> &[u32] {
        let prefix = |pos: u32| {
            let start = pos as usize;
            let end = (start + window.len()).min(self.stream.len());
            &self.stream[start..end]
        };
        let lo = self.suffixes.partition_point(|&p| prefix(p) < window);
        let hi = lo + self.suffixes[lo..].partition_point(|&p| prefix(p) == window);
        &self.suffixes[lo..hi]
    }

    /// Continuations of `window` with their counts, unordered. Empty when the
    /// window is empty, unseen, or contains a token not in the corpus.
    pub fn counts<S: AsRef<str>>(&self, window: &[S]) -> HashMap<Token, u64> {
        let mut out = HashMap::new();
        let Some(ids) = window
            .iter()
            .map(|t| self.ids.get(t.as_ref()).copied())
            .collect::<Option<Vec<u32>>>()
        else {
            return out;
        };
        if ids.is_empty() {
            return out;
        }
        for &pos in self.matching(&ids) {
            let next = pos as usize + ids.len();
            if let Some(&t) = self.stream.get(next).filter(|&&t| t != SEPARATOR) {
                *out.entry(self.tokens[t as usize].clone()).or_insert(0) += 1;
            }
        }
        out
    }
}

/// Suffix array by prefix doubling: ranks of `2^k`-length prefixes are
/// refined by sorting on (rank[i], rank[i + 2^k]) until all ranks differ.
fn suffix_array(s: &[u32]) -> Vec<u32> {
    let n = s.len();
    let mut sa: Vec<u32> = (0..n as u32).collect();
    if n == 0 {
        return sa;
    }
    let mut rank: Vec<u64> = s.iter().map(|&t| u64::from(t) + 1).collect();
    let mut tmp = vec![0u64; n];
    let mut k = 1;
    loop {
        let key = |i: u32| {
            let i = i as usize;
            (rank[i], if i + k < n { rank[i + k] } else { 0 })
        };
        sa.sort_unstable_by_key(|&i| key(i));
        tmp[sa[0] as usize] = 1;
        for w in 1..n {
            let bump = u64::from(key(sa[w - 1]) != key(sa[w]));
            tmp[sa[w] as usize] = tmp[sa[w - 1] as usize] + bump;
        }
        std::mem::swap(&mut rank, &mut tmp);
        if rank[sa[n - 1] as usize] == n as u64 || k >= n {
            break;
        }
        k *= 2;
    }
    sa
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SearchMode {
    Full,
    Last5,
}

impl FromStr for SearchMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(SearchMode::Full),
            "last5" => Ok(SearchMode::Last5),
            _ => Err(Error::invalid(format!("unknown search mode {s:?}"))),
        }
    }
}

fn rank_counts(counts: HashMap<Token, u64>, k: usize) -> Vec<(Token, u64)> {
    let mut ranked: Vec<(Token, u64)> = counts.into_iter().collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| cmp_numeric(&a.0, &b.0)));
    ranked.truncate(k);
    ranked
}

/// Most frequent continuations of the whole prompt or its last five terms.
pub fn search_complete<S: AsRef<str>>(index: &SuffixIndex, prompt: &[S], mode: SearchMode, k: usize) -> Vec<(Token, u64)> {
    let window = match mode {
        SearchMode::Full => prompt,
        SearchMode::Last5 => &prompt[prompt.len().saturating_sub(5)..],
    };
    rank_counts(index.counts(window), k)
}

/// Top-`k` continuations from the language model.
pub fn lm_complete(model: &LstmLmModel, problem: &CompletionProblem, k: usize) -> Result<Vec<(Token, f64)>> {
    next_token_topk(model, &problem.prompt, k)
}

/// Fraction of problems whose gold answer is among the first `k` predictions.
pub fn precision_at_k<S: AsRef<str>>(predictions: &[Vec<S>], golds: &[Token], k: usize) -> Result<f64> {
    if k == 0 {
        return Err(Error::invalid("k must be at least 1"));
    }
    if predictions.is_empty() || predictions.len() != golds.len() {
        return Err(Error::invalid(format!(
            "{} prediction lists for {} problems",
            predictions.len(),
            golds.len()
        )));
    }
    let hits = predictions
        .iter()
        .zip(golds)
        .filter(|(pred, gold)| pred.iter().take(k).any(|p| p.as_ref() == gold.as_str()))
        .count();
    Ok(hits as f64 / golds.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnalogyOutcome {
    /// `None` when the solver abstained.
    pub chosen: Option<Token>,
    pub correct: bool,
    /// Cosine score per resolvable option.
    pub scores: Vec<(Token, f64)>,
    pub abstain_reason: Option<String>,
}

/// Picks the option closest in cosine to `v(c) − v(a) + v(b)`.
pub fn solve_analogy(table: &EmbeddingTable, problem: &AnalogyProblem) -> AnalogyOutcome {
    let abstain = |reason: String| AnalogyOutcome {
        chosen: None,
        correct: false,
        scores: Vec::new(),
        abstain_reason: Some(reason),
    };
    let missing: Vec<&str> = [&problem.a, &problem.b, &problem.c]
        .into_iter()
        .filter(|t| table.lookup(t).is_none())
        .map(|t| t.as_str())
        .collect();
    if !missing.is_empty() {
        return abstain(format!("unresolvable: {}", missing.join(", ")));
    }
    let va = table.lookup(&problem.a).unwrap();
    let vb = table.lookup(&problem.b).unwrap();
    let vc = table.lookup(&problem.c).unwrap();
    let target: Vec<f32> = (0..table.dim()).map(|i| vc[i] - va[i] + vb[i]).collect();

    let mut scores: Vec<(Token, f64)> = problem
        .options
        .iter()
        .filter_map(|o| {
            let v = table.lookup(o)?;
            cosine(&target, &v).ok().map(|s| (o.clone(), s))
        })
        .collect();
    if scores.is_empty() {
        return abstain("no option resolvable".into());
    }
    scores.sort_by(|a, b| {
        b.1.partial_cmp(&a.1)
            .unwrap_or(Ordering::Equal)
            .then_with(|| cmp_numeric(&a.0, &b.0))
    });
    let chosen = scores[0].0.clone();
    AnalogyOutcome {
        correct: chosen == problem.answer,
        chosen: Some(chosen),
        scores,
        abstain_reason: None,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnalogyReport {
    pub source_tag: String,
    pub accuracy: f64,
    pub random_baseline: f64,
    pub n: usize,
    pub abstained: usize,
    pub outcomes: Vec<AnalogyOutcome>,
}

pub fn evaluate_analogies(table: &EmbeddingTable, problems: &[AnalogyProblem]) -> Result<AnalogyReport> {
    if problems.is_empty() {
        return Err(Error::invalid("no analogy problems"));
    }
    let outcomes: Vec<AnalogyOutcome> = problems.iter().map(|p| solve_analogy(table, p)).collect();
    let correct = outcomes.iter().filter(|o| o.correct).count();
    Ok(AnalogyReport {
        source_tag: table.source_tag().to_string(),
        accuracy: correct as f64 / problems.len() as f64,
        random_baseline: random_choice_accuracy(problems),
        n: problems.len(),
        abstained: outcomes.iter().filter(|o| o.chosen.is_none()).count(),
        outcomes,
    })
}

/// Expected accuracy of guessing uniformly among the options.
pub fn random_choice_accuracy(problems: &[AnalogyProblem]) -> f64 {
    if problems.is_empty() {
        return 0.0;
    }
    problems.iter().map(|p| 1.0 / p.options.len() as f64).sum::<f64>() / problems.len() as f64
}

/// Candidates nearest to the centroid of `seeds`, excluding the seeds.
pub fn expand_seed_set<S: AsRef<str>>(
    table: &EmbeddingTable,
    seeds: &[S],
    k: usize,
    scope: &CandidateScope,
) -> Result<Vec<(Token, f64)>> {
    let query = centroid(table, seeds)?;
    let exclude: HashSet<Token> = seeds.iter().map(|s| Token::new(s.as_ref())).collect();
    nearest(table, &query, scope, k, &exclude)
}
