//! Skipgram with negative sampling, optionally with digit n-gram subwords
//! (fastText-style center vectors).
//!
//! Parameters live in [`SharedMatrix`], a row-major matrix of relaxed atomic
//! `f32` cells. With one worker training is sequential and bit-reproducible.
//! With several workers, sequence shards are processed concurrently and
//! updates race without locks: results are nondeterministic but every read
//! and write is a whole `f32`.

use std::path::PathBuf;
use std::sync::atomic::{AtomicU32, AtomicU64, Ordering};
use std::time::Instant;

use log::info;
use num_traits::Float;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::SequenceRecord;
use crate::embed::EmbeddingTable;
use crate::error::{Error, Result};
use crate::vocab::{ngram_buckets, SubwordConfig, Vocabulary, DEFAULT_MIN_COUNT};

pub const FASTTEXT_TAG: &str = "OEIS-FastText";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SkipgramConfig {
    pub dim: usize,
    /// Maximum context radius; each position draws its radius from `1..=window`.
    pub window: usize,
    pub negatives: usize,
    pub epochs: usize,
    /// Initial learning rate, decayed linearly to `1e-4 · lr_start`.
    pub lr_start: f32,
    pub min_count: u64,
    pub subword: Option<SubwordConfig>,
    pub sampling_power: f64,
    /// Frequent-token subsampling threshold; `f64::INFINITY` disables it.
    pub subsample_threshold: f64,
    pub seed: u64,
    /// 1 = deterministic sequential training.
    pub workers: usize,
    /// Save a table checkpoint every this many epochs (0 = never).
    pub checkpoint_every: usize,
    pub checkpoint_path: Option<PathBuf>,
}

impl Default for SkipgramConfig {
    fn default() -> Self {
        SkipgramConfig {
            dim: 100,
            window: 5,
            negatives: 5,
            epochs: 5,
            lr_start: 0.05,
            min_count: DEFAULT_MIN_COUNT,
            subword: Some(SubwordConfig::desk()),
            sampling_power: 0.75,
            subsample_threshold: 1e-4,
            seed: 1,
            workers: 1,
            checkpoint_every: 0,
            checkpoint_path: None,
        }
    }
}

impl SkipgramConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.window == 0 || self.negatives == 0 || self.workers == 0 {
            return Err(Error::invalid("dim, window, negatives and workers must be positive"));
        }
        if !(self.sampling_power > 0.0 && self.sampling_power <= 1.0) {
            return Err(Error::invalid("sampling_power must be in (0, 1]"));
        }
        if !(self.subsample_threshold > 0.0) {
            return Err(Error::invalid("subsample_threshold must be positive"));
        }
        if !(self.lr_start > 0.0 && self.lr_start.is_finite()) {
            return Err(Error::invalid("lr_start must be positive"));
        }
        if let Some(sw) = &self.subword {
            sw.validate()?;
        }
        Ok(())
    }
}

/// Categorical distribution `P(t) ∝ count(t)^power`, sampled in O(1) with
/// Vose's alias method.
#[derive(Clone, Debug)]
pub struct NegativeSampler {
    probabilities: Vec<f64>,
    accept: Vec<f64>,
    alias: Vec<u32>,
}

impl NegativeSampler {
    pub fn new(counts: &[u64], power: f64) -> Result<Self> {
        if counts.is_empty() {
            return Err(Error::invalid("negative sampling needs at least one token"));
        }
        let weights: Vec<f64> = counts.iter().map(|&c| (c as f64).powf(power)).collect();
        let total: f64 = weights.iter().sum();
        if !(total > 0.0) {
            return Err(Error::invalid("all token counts are zero"));
        }
        let probabilities: Vec<f64> = weights.iter().map(|w| w / total).collect();

        let n = probabilities.len();
        let mut scaled: Vec<f64> = probabilities.iter().map(|p| p * n as f64).collect();
        let mut accept = vec![1.0; n];
        let mut alias: Vec<u32> = (0..n as u32).collect();
        let (mut small, mut large): (Vec<usize>, Vec<usize>) = (0..n).partition(|&i| scaled[i] < 1.0);
        while let (Some(s), Some(&l)) = (small.pop(), large.last()) {
            accept[s] = scaled[s];
            alias[s] = l as u32;
            scaled[l] -= 1.0 - scaled[s];
            if scaled[l] < 1.0 {
                large.pop();
                small.push(l);
            }
        }
        Ok(NegativeSampler {
            probabilities,
            accept,
            alias,
        })
    }

    pub fn probabilities(&self) -> &[f64] {
        &self.probabilities
    }

    pub fn sample<R: Rng>(&self, rng: &mut R) -> u32 {
        let i = rng.gen_range(0..self.accept.len());
        if rng.gen::<f64>() < self.accept[i] {
            i as u32
        } else {
            self.alias[i]
        }
    }
}

/// Probability of discarding a token with corpus frequency fraction `freq`.
pub fn drop_probability(freq: f64, threshold: f64) -> f64 {
    if freq <= 0.0 || threshold.is_infinite() {
        return 0.0;
    }
    (1.0 - (threshold / freq).sqrt()).max(0.0)
}

/// Keep/drop decision for frequent-token subsampling.
pub fn subsample_keep<R: Rng>(freq: f64, threshold: f64, rng: &mut R) -> bool {
    let p = drop_probability(freq, threshold);
    p == 0.0 || rng.gen::<f64>() >= p
}

fn sigmoid<F: Float>(x: F) -> F {
    if x >= F::zero() {
        F::one() / (F::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (F::one() + e)
    }
}

/// `-log σ(x)`, computed without overflow.
fn neg_log_sigmoid<F: Float>(x: F) -> F {
    if x >= F::zero() {
        (-x).exp().ln_1p()
    } else {
        -x + x.exp().ln_1p()
    }
}

/// Pairwise loss `ℓ = -log σ(s · u·w)` with `s = +1` for observed pairs and
/// `-1` for negatives.
pub fn pair_loss<F: Float>(u: &[F], w: &[F], positive: bool) -> F {
    let score = dot(u, w);
    neg_log_sigmoid(if positive { score } else { -score })
}

/// `-∂ℓ/∂score`: the step coefficient applied to both vectors.
pub fn pair_coefficient<F: Float>(score: F, positive: bool) -> F {
    let label = if positive { F::one() } else { F::zero() };
    label - sigmoid(score)
}

/// Analytic gradients `(∂ℓ/∂u, ∂ℓ/∂w)` of [`pair_loss`].
pub fn pair_gradient<F: Float>(u: &[F], w: &[F], positive: bool) -> (Vec<F>, Vec<F>) {
    let g = pair_coefficient(dot(u, w), positive);
    (
        w.iter().map(|&x| -g * x).collect(),
        u.iter().map(|&x| -g * x).collect(),
    )
}

fn dot<F: Float>(a: &[F], b: &[F]) -> F {
    a.iter().zip(b).fold(F::zero(), |acc, (&x, &y)| acc + x * y)
}

/// Row-major `f32` matrix with relaxed-atomic cells, shared between workers.
pub struct SharedMatrix {
    cols: usize,
    cells: Vec<AtomicU32>,
}

impl SharedMatrix {
    pub fn from_values(cols: usize, values: impl IntoIterator<Item = f32>) -> Self {
        SharedMatrix {
            cols,
            cells: values.into_iter().map(|x| AtomicU32::new(x.to_bits())).collect(),
        }
    }

    pub fn rows(&self) -> usize {
        self.cells.len() / self.cols
    }

    pub fn read_row(&self, row: usize, out: &mut [f32]) {
        let cells = &self.cells[row * self.cols..(row + 1) * self.cols];
        for (o, c) in out.iter_mut().zip(cells) {
            *o = f32::from_bits(c.load(Ordering::Relaxed));
        }
    }

    /// `row += scale · delta`
    pub fn add_to_row(&self, row: usize, delta: &[f32], scale: f32) {
        let cells = &self.cells[row * self.cols..(row + 1) * self.cols];
        for (c, &d) in cells.iter().zip(delta) {
            let x = f32::from_bits(c.load(Ordering::Relaxed)) + scale * d;
            c.store(x.to_bits(), Ordering::Relaxed);
        }
    }

    pub fn to_vec(&self) -> Vec<f32> {
        self.cells
            .iter()
            .map(|c| f32::from_bits(c.load(Ordering::Relaxed)))
            .collect()
    }

    pub fn all_finite(&self) -> bool {
        self.cells
            .iter()
            .all(|c| f32::from_bits(c.load(Ordering::Relaxed)).is_finite())
    }
}

/// Per-epoch diagnostics.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct TrainingLog {
    /// Held-out loss before training (index 0) and after each epoch.
    pub heldout_loss: Vec<f64>,
    /// Mean training pair loss of each epoch.
    pub train_loss: Vec<f64>,
    pub tokens_per_sec: Vec<f64>,
}

impl TrainingLog {
    pub fn heldout_decreased(&self) -> bool {
        match (self.heldout_loss.first(), self.heldout_loss.last()) {
            (Some(first), Some(last)) if self.heldout_loss.len() > 1 => last < first,
            _ => false,
        }
    }
}

/// Input and output parameters plus the lookup structures used by the trainer.
pub struct TrainingState {
    pub input: SharedMatrix,
    pub output: SharedMatrix,
    /// Input-matrix rows composing each vocabulary id's center vector.
    units: Vec<Vec<u32>>,
    processed: AtomicU64,
    dim: usize,
}

impl TrainingState {
    fn new(vocab: &Vocabulary, config: &SkipgramConfig) -> Self {
        let dim = config.dim;
        let v = vocab.len();
        let buckets = config.subword.map_or(0, |s| s.bucket_count as usize);
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let bound = 0.5 / dim as f32;
        let input = SharedMatrix::from_values(
            dim,
            (0..(v + buckets) * dim).map(|_| rng.gen_range(-bound..=bound)),
        );
        let output = SharedMatrix::from_values(dim, std::iter::repeat_n(0.0, v * dim));
        let units = vocab
            .tokens()
            .iter()
            .enumerate()
            .map(|(id, token)| {
                let mut u = vec![id as u32];
                if let Some(sw) = &config.subword {
                    u.extend(ngram_buckets(token, sw).into_iter().map(|b| (v as u32) + b));
                }
                u
            })
            .collect();
        TrainingState {
            input,
            output,
            units,
            processed: AtomicU64::new(0),
            dim,
        }
    }

    fn center(&self, id: u32, h: &mut [f32], row: &mut [f32]) -> usize {
        let units = &self.units[id as usize];
        h.iter_mut().for_each(|x| *x = 0.0);
        for &u in units {
            self.input.read_row(u as usize, row);
            h.iter_mut().zip(row.iter()).for_each(|(a, b)| *a += b);
        }
        let inv = 1.0 / units.len() as f32;
        h.iter_mut().for_each(|x| *x *= inv);
        units.len()
    }

    fn learning_rate(&self, config: &SkipgramConfig, total: u64) -> f32 {
        let done = self.processed.load(Ordering::Relaxed) as f64 / total.max(1) as f64;
        config.lr_start * (1.0 - done).max(1e-4) as f32
    }
}

struct Scratch {
    h: Vec<f32>,
    row: Vec<f32>,
    grad: Vec<f32>,
}

impl Scratch {
    fn new(dim: usize) -> Self {
        Scratch {
            h: vec![0.0; dim],
            row: vec![0.0; dim],
            grad: vec![0.0; dim],
        }
    }
}

/// One binary-logistic update of output row `target` against center `h`.
/// Accumulates the center gradient into `grad` and returns the pair loss.
fn pair_step(state: &TrainingState, s: &mut Scratch, target: u32, positive: bool, lr: f32) -> f32 {
    state.output.read_row(target as usize, &mut s.row);
    let score = dot(&s.h, &s.row);
    let g = lr * pair_coefficient(score, positive);
    s.grad.iter_mut().zip(&s.row).for_each(|(a, &o)| *a += g * o);
    state.output.add_to_row(target as usize, &s.h, g);
    neg_log_sigmoid(if positive { score } else { -score })
}

struct EpochContext<'a> {
    state: &'a TrainingState,
    config: &'a SkipgramConfig,
    sampler: &'a NegativeSampler,
    keep_freq: &'a [f64],
    total_work: u64,
}

/// Center-gradient norm above which an update is treated as divergence.
pub const MAX_UPDATE_NORM: f32 = 1e3;

/// Trains over one shard of encoded sequences. Returns (loss sum, pair count).
fn train_shard(
    ctx: &EpochContext<'_>,
    shard: &[Vec<u32>],
    rng: &mut ChaCha8Rng,
) -> std::result::Result<(f64, u64), String> {
    let EpochContext {
        state,
        config,
        sampler,
        keep_freq,
        total_work,
    } = *ctx;
    let mut s = Scratch::new(state.dim);
    let mut kept = Vec::new();
    let mut loss_sum = 0f64;
    let mut pairs = 0u64;
    let mut lr = state.learning_rate(config, total_work);
    for (i, seq) in shard.iter().enumerate() {
        kept.clear();
        kept.extend(
            seq.iter()
                .copied()
                .filter(|&id| subsample_keep(keep_freq[id as usize], config.subsample_threshold, rng)),
        );
        for pos in 0..kept.len() {
            let radius = rng.gen_range(1..=config.window);
            let lo = pos.saturating_sub(radius);
            let hi = (pos + radius).min(kept.len() - 1);
            for ctx_pos in lo..=hi {
                if ctx_pos == pos {
                    continue;
                }
                let n_units = state.center(kept[pos], &mut s.h, &mut s.row);
                s.grad.iter_mut().for_each(|x| *x = 0.0);
                let target = kept[ctx_pos];
                let mut loss = pair_step(state, &mut s, target, true, lr);
                for _ in 0..config.negatives {
                    let neg = sampler.sample(rng);
                    if neg == target {
                        continue;
                    }
                    loss += pair_step(state, &mut s, neg, false, lr);
                }
                let norm = s.grad.iter().map(|g| g * g).sum::<f32>().sqrt();
                if !(norm < MAX_UPDATE_NORM) {
                    return Err(format!("center update norm {norm} at lr {lr}"));
                }
                // every contributing unit row receives the full center gradient
                for &u in &state.units[kept[pos] as usize][..n_units] {
                    state.input.add_to_row(u as usize, &s.grad, 1.0);
                }
                loss_sum += f64::from(loss);
                pairs += 1;
            }
        }
        state
            .processed
            .fetch_add(seq.len() as u64, Ordering::Relaxed);
        if i % 64 == 0 {
            lr = state.learning_rate(config, total_work);
        }
    }
    Ok((loss_sum, pairs))
}

/// Encodes sequences to vocabulary ids, dropping out-of-vocabulary positions.
fn encode_in_vocab(records: &[SequenceRecord], vocab: &Vocabulary) -> Vec<Vec<u32>> {
    records
        .iter()
        .map(|r| {
            vocab
                .encode(r)
                .into_iter()
                .filter(|&id| id != Vocabulary::UNK_ID)
                .collect::<Vec<_>>()
        })
        .filter(|ids| ids.len() > 1)
        .collect()
}

/// Mean pair loss on held-out sequences: full windows, no subsampling, and
/// negatives drawn from a fixed-seed generator so epochs are comparable.
pub fn heldout_loss(
    state: &TrainingState,
    heldout: &[Vec<u32>],
    config: &SkipgramConfig,
    sampler: &NegativeSampler,
) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5eed_1055);
    let mut s = Scratch::new(state.dim);
    let mut total = 0f64;
    let mut pairs = 0u64;
    for seq in heldout {
        for pos in 0..seq.len() {
            state.center(seq[pos], &mut s.h, &mut s.row);
            let lo = pos.saturating_sub(config.window);
            let hi = (pos + config.window).min(seq.len() - 1);
            for ctx in (lo..=hi).filter(|&c| c != pos) {
                state.output.read_row(seq[ctx] as usize, &mut s.row);
                let mut loss = f64::from(pair_loss(&s.h, &s.row, true));
                for _ in 0..config.negatives {
                    let neg = sampler.sample(&mut rng);
                    state.output.read_row(neg as usize, &mut s.row);
                    loss += f64::from(pair_loss(&s.h, &s.row, false));
                }
                total += loss;
                pairs += 1;
            }
        }
    }
    if pairs == 0 {
        f64::NAN
    } else {
        total / pairs as f64
    }
}

/// Trains skipgram embeddings on `train`. See [`train_skipgram_monitored`].
pub fn train_skipgram(
    train: &[SequenceRecord],
    vocab: &Vocabulary,
    config: &SkipgramConfig,
) -> Result<EmbeddingTable> {
    train_skipgram_monitored(train, &[], vocab, config).map(|(table, _)| table)
}

/// Trains skipgram embeddings, reporting held-out loss on `heldout` (may be
/// empty) before training and after every epoch.
pub fn train_skipgram_monitored(
    train: &[SequenceRecord],
    heldout: &[SequenceRecord],
    vocab: &Vocabulary,
    config: &SkipgramConfig,
) -> Result<(EmbeddingTable, TrainingLog)> {
    config.validate()?;
    if vocab.min_count() != config.min_count {
        return Err(Error::invalid(format!(
            "vocabulary built with min_count {} but config expects {}",
            vocab.min_count(),
            config.min_count
        )));
    }
    let sequences = encode_in_vocab(train, vocab);
    if sequences.is_empty() {
        return Err(Error::invalid("no trainable sequences (need ≥2 in-vocabulary terms)"));
    }
    let heldout = encode_in_vocab(heldout, vocab);

    let mut counts = vocab.counts().to_vec();
    counts[Vocabulary::UNK_ID as usize] = 0;
    let sampler = NegativeSampler::new(&counts, config.sampling_power)?;
    let total: u64 = counts.iter().sum();
    let keep_freq: Vec<f64> = counts.iter().map(|&c| c as f64 / total as f64).collect();
    let epoch_tokens: u64 = sequences.iter().map(|s| s.len() as u64).sum();

    let state = TrainingState::new(vocab, config);
    let ctx = EpochContext {
        state: &state,
        config,
        sampler: &sampler,
        keep_freq: &keep_freq,
        total_work: epoch_tokens * config.epochs as u64,
    };
    let mut log = TrainingLog::default();
    if !heldout.is_empty() {
        log.heldout_loss.push(heldout_loss(&state, &heldout, config, &sampler));
    }

    for epoch in 0..config.epochs {
        let started = Instant::now();
        let outcome = if config.workers == 1 {
            let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(config.seed, epoch as u64, 0));
            train_shard(&ctx, &sequences, &mut rng)
        } else {
            let chunk = sequences.len().div_ceil(config.workers);
            std::thread::scope(|scope| {
                let handles: Vec<_> = sequences
                    .chunks(chunk)
                    .enumerate()
                    .map(|(w, shard)| {
                        let ctx = &ctx;
                        scope.spawn(move || {
                            let mut rng =
                                ChaCha8Rng::seed_from_u64(mix_seed(config.seed, epoch as u64, w as u64 + 1));
                            train_shard(ctx, shard, &mut rng)
                        })
                    })
                    .collect();
                handles
                    .into_iter()
                    .map(|h| h.join().expect("skipgram worker panicked"))
                    .try_fold((0.0, 0), |(l, p), r| r.map(|(l2, p2)| (l + l2, p + p2)))
            })
        };
        let (loss_sum, pairs) = outcome
            .map_err(|e| Error::Numerical(format!("skipgram diverged in epoch {}: {e}", epoch + 1)))?;
        let elapsed = started.elapsed().as_secs_f64().max(1e-9);
        let mean_loss = if pairs == 0 { 0.0 } else { loss_sum / pairs as f64 };
        if !mean_loss.is_finite() || !state.input.all_finite() || !state.output.all_finite() {
            return Err(Error::Numerical(format!(
                "skipgram diverged in epoch {}: mean loss {mean_loss}, lr {}",
                epoch + 1,
                state.learning_rate(config, ctx.total_work)
            )));
        }
        log.train_loss.push(mean_loss);
        log.tokens_per_sec.push(epoch_tokens as f64 / elapsed);
        if !heldout.is_empty() {
            log.heldout_loss.push(heldout_loss(&state, &heldout, config, &sampler));
        }
        info!(
            "skipgram epoch {}/{}: loss {:.4}, {:.0} tokens/s, lr {:.5}{}",
            epoch + 1,
            config.epochs,
            mean_loss,
            epoch_tokens as f64 / elapsed,
            state.learning_rate(config, ctx.total_work),
            log.heldout_loss
                .last()
                .map(|l| format!(", held-out {l:.4}"))
                .unwrap_or_default()
        );
        if let Some(path) = &config.checkpoint_path {
            if config.checkpoint_every > 0 && (epoch + 1) % config.checkpoint_every == 0 {
                to_table(&state, vocab, config)?.save(path)?;
            }
        }
    }
    Ok((to_table(&state, vocab, config)?, log))
}

fn mix_seed(seed: u64, epoch: u64, worker: u64) -> u64 {
    seed ^ epoch.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ worker.wrapping_mul(0xc2b2_ae3d_27d4_eb4f)
}

fn to_table(state: &TrainingState, vocab: &Vocabulary, config: &SkipgramConfig) -> Result<EmbeddingTable> {
    let dim = config.dim;
    let input = state.input.to_vec();
    let v = vocab.len();
    let mut tokens = Vec::with_capacity(v - 1);
    let mut matrix = Vec::with_capacity((v - 1) * dim);
    for (id, token) in vocab.integer_tokens() {
        tokens.push(token.clone());
        matrix.extend_from_slice(&input[id as usize * dim..(id as usize + 1) * dim]);
    }
    let table = EmbeddingTable::new(FASTTEXT_TAG, dim, tokens, matrix)?;
    match config.subword {
        Some(sw) => table.with_subword(sw, input[v * dim..].to_vec()),
        None => Ok(table),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embed::cosine;
    use crate::vocab::build_vocab;

    fn rec(id: usize, terms: &[String]) -> SequenceRecord {
        SequenceRecord::new(&format!("A{id:06}"), terms).unwrap()
    }

    #[test]
    fn sampler_probabilities() {
        let s = NegativeSampler::new(&[1, 1], 0.75).unwrap();
        assert!((s.probabilities()[0] - 0.5).abs() < 1e-15);
        let s = NegativeSampler::new(&[16, 1], 0.75).unwrap();
        assert!((s.probabilities()[0] - 8.0 / 9.0).abs() < 1e-12);
        assert!((s.probabilities()[1] - 1.0 / 9.0).abs() < 1e-12);
        let s = NegativeSampler::new(&[3, 0, 17, 250, 1, 9], 0.75).unwrap();
        assert!((s.probabilities().iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(NegativeSampler::new(&[0, 0], 0.75).is_err());
        assert!(NegativeSampler::new(&[], 0.75).is_err());
    }

    #[test]
    fn alias_sampling_matches_distribution() {
        let counts = [16u64, 1, 0, 81];
        let s = NegativeSampler::new(&counts, 0.75).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let n = 200_000;
        let mut hist = [0usize; 4];
        for _ in 0..n {
            hist[s.sample(&mut rng) as usize] += 1;
        }
        assert_eq!(hist[2], 0);
        for (h, p) in hist.iter().zip(s.probabilities()) {
            assert!((*h as f64 / n as f64 - p).abs() < 0.005);
        }
    }

    #[test]
    fn subsampling_rule() {
        assert_eq!(drop_probability(1e-5, 1e-4), 0.0);
        assert_eq!(drop_probability(1e-4, 1e-4), 0.0);
        assert!((drop_probability(4e-4, 1e-4) - 0.5).abs() < 1e-12);
        assert_eq!(drop_probability(0.9, f64::INFINITY), 0.0);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!((0..1000).all(|_| subsample_keep(0.9, f64::INFINITY, &mut rng)));
        let kept = (0..100_000).filter(|_| subsample_keep(4e-4, 1e-4, &mut rng)).count();
        assert!((kept as f64 / 1e5 - 0.5).abs() < 0.01);
    }

    #[test]
    fn pair_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for trial in 0..20 {
            let u: Vec<f64> = (0..8).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let w: Vec<f64> = (0..8).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let positive = trial % 2 == 0;
            let (gu, gw) = pair_gradient(&u, &w, positive);
            let eps = 1e-6;
            for (vec_idx, analytic) in [(0, &gu), (1, &gw)] {
                for i in 0..8 {
                    let (mut up, mut wp, mut um, mut wm) = (u.clone(), w.clone(), u.clone(), w.clone());
                    if vec_idx == 0 {
                        up[i] += eps;
                        um[i] -= eps;
                    } else {
                        wp[i] += eps;
                        wm[i] -= eps;
                    }
                    let fd = (pair_loss(&up, &wp, positive) - pair_loss(&um, &wm, positive)) / (2.0 * eps);
                    let rel = (fd - analytic[i]).abs() / analytic[i].abs().max(fd.abs()).max(1e-8);
                    assert!(rel < 1e-6 || (fd - analytic[i]).abs() < 1e-10, "rel {rel}");
                }
            }
        }
    }

    #[test]
    fn loss_is_stable_for_large_scores() {
        assert!(pair_loss(&[100.0f32], &[100.0], false).is_finite());
        assert!(pair_loss(&[100.0f64], &[100.0], true) < 1e-300);
    }

    fn cooccurrence_corpus() -> Vec<SequenceRecord> {
        // x=1 always next to y=2; z=3 always next to w=4; never 1 with 3
        let mut recs = Vec::new();
        for i in 0..400 {
            let terms: Vec<String> = if i % 2 == 0 {
                vec!["1", "2", "1", "2", "5", "1", "2"]
            } else {
                vec!["3", "4", "3", "4", "6", "3", "4"]
            }
            .into_iter()
            .map(String::from)
            .collect();
            recs.push(rec(i + 1, &terms));
        }
        recs
    }

    fn small_config() -> SkipgramConfig {
        SkipgramConfig {
            dim: 16,
            window: 2,
            epochs: 5,
            min_count: 1,
            subword: None,
            subsample_threshold: f64::INFINITY,
            lr_start: 0.05,
            ..Default::default()
        }
    }

    #[test]
    fn co_occurring_tokens_end_up_closer() {
        let train = cooccurrence_corpus();
        let vocab = build_vocab(&train, 1).unwrap();
        let table = train_skipgram(&train, &vocab, &small_config()).unwrap();
        let v = |t: &str| table.lookup(t).unwrap().into_owned();
        let xy = cosine(&v("1"), &v("2")).unwrap();
        let xz = cosine(&v("1"), &v("3")).unwrap();
        assert!(xy > xz, "cos(x,y)={xy} cos(x,z)={xz}");
    }

    #[test]
    fn deterministic_given_seed() {
        let train = cooccurrence_corpus();
        let vocab = build_vocab(&train, 1).unwrap();
        let mut cfg = small_config();
        cfg.subword = Some(SubwordConfig { bucket_count: 128, ..SubwordConfig::default() });
        cfg.epochs = 2;
        let a = train_skipgram(&train, &vocab, &cfg).unwrap();
        let b = train_skipgram(&train, &vocab, &cfg).unwrap();
        assert_eq!(a, b);
        cfg.seed += 1;
        let c = train_skipgram(&train, &vocab, &cfg).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn heldout_loss_decreases_and_multi_worker_runs() {
        let train = cooccurrence_corpus();
        let vocab = build_vocab(&train, 1).unwrap();
        let mut cfg = small_config();
        cfg.workers = 3;
        let (table, log) = train_skipgram_monitored(&train, &train[..50], &vocab, &cfg).unwrap();
        assert_eq!(log.heldout_loss.len(), cfg.epochs + 1);
        assert!(log.heldout_decreased(), "{:?}", log.heldout_loss);
        assert_eq!(table.len(), vocab.len() - 1);
        assert_eq!(table.source_tag(), FASTTEXT_TAG);
    }

    #[test]
    fn contract_errors() {
        let train = cooccurrence_corpus();
        let vocab = build_vocab(&train, 1).unwrap();
        let cfg = SkipgramConfig { min_count: 3, ..small_config() };
        assert!(train_skipgram(&train, &vocab, &cfg).is_err());
        let cfg = SkipgramConfig { window: 0, ..small_config() };
        assert!(train_skipgram(&train, &vocab, &cfg).is_err());
        let lonely = vec![rec(1, &["1".to_string()])];
        let vocab = build_vocab(&lonely, 1).unwrap();
        assert!(train_skipgram(&lonely, &vocab, &small_config()).is_err());
    }

    #[test]
    fn divergence_aborts() {
        let train = cooccurrence_corpus();
        let vocab = build_vocab(&train, 1).unwrap();
        let cfg = SkipgramConfig { lr_start: 1e30, ..small_config() };
        assert!(matches!(train_skipgram(&train, &vocab, &cfg), Err(Error::Numerical(_))));
    }

    #[test]
    fn subword_table_resolves_unseen_integers() {
        let train = cooccurrence_corpus();
        let vocab = build_vocab(&train, 1).unwrap();
        let mut cfg = small_config();
        cfg.subword = Some(SubwordConfig { bucket_count: 256, ..SubwordConfig::default() });
        cfg.epochs = 1;
        let table = train_skipgram(&train, &vocab, &cfg).unwrap();
        assert!(table.lookup("123456").is_some());
        assert!(table.has_subword());
    }
}
