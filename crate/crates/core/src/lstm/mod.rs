//! Two-layer LSTM language model over integer sequences.
//!
//! Train sequences are concatenated into one stream with a separator token
//! before and after every sequence. The separator has id `vocab.len()`, one
//! past the last vocabulary id.

mod checkpoint;
mod net;

use std::cmp::Ordering;

use log::info;
use ndarray::{s, Array2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::SequenceRecord;
use crate::embed::EmbeddingTable;
use crate::error::{Error, Result};
use crate::token::{cmp_numeric, Token};
use crate::vocab::{Vocabulary, DEFAULT_MIN_COUNT};

pub use checkpoint::{read_checkpoint, write_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use net::{
    backward, clip_global_norm, cross_entropy, forward, loss_and_gradients, softmax_rows, Dropout, ForwardCache,
    ForwardPass, LayerParams, LstmParams, LstmState, Scalar,
};

pub const LSTM_TAG: &str = "OEIS-LSTM";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LstmLmConfig {
    pub embed_dim: usize,
    pub hidden_dim: usize,
    pub layers: usize,
    pub bptt_len: usize,
    pub batch_size: usize,
    pub eval_batch_size: usize,
    pub lr_start: f64,
    /// The learning rate is divided by this after an epoch without dev improvement.
    pub lr_shrink: f64,
    pub clip_norm: f64,
    pub epochs: usize,
    pub dropout: f64,
    pub init_range: f64,
    pub min_count: u64,
    pub seed: u64,
}

impl Default for LstmLmConfig {
    fn default() -> Self {
        LstmLmConfig {
            embed_dim: 100,
            hidden_dim: 200,
            layers: 2,
            bptt_len: 35,
            batch_size: 20,
            eval_batch_size: 10,
            lr_start: 20.0,
            lr_shrink: 4.0,
            clip_norm: 0.25,
            epochs: 40,
            dropout: 0.2,
            init_range: 0.1,
            min_count: DEFAULT_MIN_COUNT,
            seed: 1,
        }
    }
}

impl LstmLmConfig {
    pub fn validate(&self) -> Result<()> {
        if [
            self.embed_dim,
            self.hidden_dim,
            self.layers,
            self.bptt_len,
            self.batch_size,
            self.eval_batch_size,
        ]
        .contains(&0)
        {
            return Err(Error::invalid("LSTM dimensions, window and batch sizes must be positive"));
        }
        if !(self.lr_start > 0.0 && self.lr_shrink >= 1.0 && self.clip_norm > 0.0 && self.init_range > 0.0) {
            return Err(Error::invalid(
                "lr_start, clip_norm and init_range must be positive and lr_shrink at least 1",
            ));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::invalid("dropout must be in [0, 1)"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LstmLmModel {
    pub config: LstmLmConfig,
    pub vocab: Vocabulary,
    pub params: LstmParams<f32>,
}

impl LstmLmModel {
    /// Randomly initialized model.
    pub fn new(vocab: Vocabulary, config: LstmLmConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let params = LstmParams::init_uniform(
            vocab.len() + 1,
            config.embed_dim,
            config.hidden_dim,
            config.layers,
            config.init_range,
            &mut rng,
        );
        Ok(LstmLmModel { config, vocab, params })
    }

    /// All parameters zero; predicts the uniform distribution.
    pub fn zeroed(vocab: Vocabulary, config: LstmLmConfig) -> Result<Self> {
        config.validate()?;
        let params = LstmParams::zeros(vocab.len() + 1, config.embed_dim, config.hidden_dim, config.layers);
        Ok(LstmLmModel { config, vocab, params })
    }

    /// Vocabulary size plus the separator.
    pub fn n_tokens(&self) -> usize {
        self.vocab.len() + 1
    }

    pub fn separator_id(&self) -> u32 {
        self.vocab.len() as u32
    }

    pub fn zero_state(&self, batch: usize) -> LstmState<f32> {
        LstmState::zeros(self.params.n_layers(), batch, self.params.hidden_dim())
    }

    /// Token string for an id, `"<sep>"` for the separator.
    pub fn token(&self, id: u32) -> &str {
        if id == self.separator_id() {
            "<sep>"
        } else {
            self.vocab.token(id)
        }
    }
}

/// `SEP s1 SEP s2 ... SEP`, with out-of-vocabulary terms mapped to UNK.
pub fn encode_stream(records: &[SequenceRecord], vocab: &Vocabulary) -> Vec<u32> {
    let sep = vocab.len() as u32;
    let mut stream = vec![sep];
    for r in records {
        stream.extend(vocab.encode(r));
        stream.push(sep);
    }
    stream
}

/// Cuts `stream` into `batch` contiguous strips of equal length, one per
/// column. The remainder is dropped.
pub fn batchify(stream: &[u32], batch: usize) -> Result<Array2<u32>> {
    if batch == 0 || stream.len() < batch {
        return Err(Error::invalid(format!(
            "stream of {} tokens is shorter than batch size {batch}",
            stream.len()
        )));
    }
    let len = stream.len() / batch;
    Ok(Array2::from_shape_fn((len, batch), |(t, b)| stream[b * len + t]))
}

/// Evaluation-mode forward pass (no dropout) over a `T × B` window.
pub fn lm_forward(
    model: &LstmLmModel,
    inputs: ndarray::ArrayView2<'_, u32>,
    state: &LstmState<f32>,
) -> Result<(Array2<f32>, LstmState<f32>)> {
    let pass = forward::<f32, ChaCha8Rng>(&model.params, inputs, state, None)?;
    Ok((pass.logits, pass.state))
}

/// Window start offsets over a batchified stream of `len` rows.
fn windows(len: usize, bptt: usize) -> impl Iterator<Item = (usize, usize)> {
    (0..len.saturating_sub(1))
        .step_by(bptt)
        .map(move |i| (i, bptt.min(len - 1 - i)))
}

/// Mean cross-entropy over a batchified stream, carrying state across
/// windows. With `dropout`, the training-mode network is used.
fn stream_loss(
    params: &LstmParams<f32>,
    data: &Array2<u32>,
    bptt: usize,
    mut dropout: Option<(f64, &mut ChaCha8Rng)>,
) -> Result<f64> {
    let batch = data.ncols();
    let mut state = LstmState::zeros(params.n_layers(), batch, params.hidden_dim());
    let mut total = 0.0;
    let mut count = 0usize;
    for (i, len) in windows(data.nrows(), bptt) {
        let inputs = data.slice(s![i..i + len, ..]);
        let targets: Vec<u32> = data.slice(s![i + 1..i + 1 + len, ..]).iter().copied().collect();
        let d = dropout.as_mut().map(|(p, rng)| Dropout { p: *p, rng: &mut **rng });
        let pass = forward(params, inputs, &state, d)?;
        let (loss, _) = cross_entropy(&pass.logits, &targets);
        total += loss * targets.len() as f64;
        count += targets.len();
        state = pass.state;
    }
    if count == 0 {
        return Err(Error::invalid("stream too short to predict any token"));
    }
    Ok(total / count as f64)
}

fn eval_data(model: &LstmLmModel, records: &[SequenceRecord]) -> Result<Array2<u32>> {
    let stream = encode_stream(records, &model.vocab);
    if stream.len() < 2 {
        return Err(Error::invalid("split has no tokens"));
    }
    let batch = model.config.eval_batch_size.min(stream.len() / 2).max(1);
    batchify(&stream, batch)
}

/// `exp(mean token cross-entropy)` over the split's batchified stream, in
/// evaluation mode.
pub fn perplexity(model: &LstmLmModel, records: &[SequenceRecord]) -> Result<f64> {
    let data = eval_data(model, records)?;
    Ok(stream_loss(&model.params, &data, model.config.bptt_len, None)?.exp())
}

/// Same as [`perplexity`] but with training-mode dropout active.
pub fn train_mode_perplexity(model: &LstmLmModel, records: &[SequenceRecord], seed: u64) -> Result<f64> {
    let data = eval_data(model, records)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let loss = stream_loss(
        &model.params,
        &data,
        model.config.bptt_len,
        Some((model.config.dropout, &mut rng)),
    )?;
    Ok(loss.exp())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LstmEpoch {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub dev_perplexity: f64,
    pub best_dev_perplexity: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LstmTrainingLog {
    /// Dev perplexity of the freshly initialized model.
    pub initial_dev_perplexity: f64,
    pub epochs: Vec<LstmEpoch>,
}

impl LstmTrainingLog {
    pub fn best_dev_perplexity(&self) -> f64 {
        self.epochs
            .last()
            .map_or(self.initial_dev_perplexity, |e| e.best_dev_perplexity)
    }
}

/// Truncated-BPTT SGD with global-norm clipping. After every epoch the dev
/// perplexity is measured; without improvement the learning rate is divided
/// by `lr_shrink`. Returns the best-dev parameters.
pub fn train_lm(
    train: &[SequenceRecord],
    dev: &[SequenceRecord],
    vocab: &Vocabulary,
    config: &LstmLmConfig,
) -> Result<(LstmLmModel, LstmTrainingLog)> {
    let mut model = LstmLmModel::new(vocab.clone(), config.clone())?;
    let data = batchify(&encode_stream(train, vocab), config.batch_size)?;
    if data.nrows() < 2 {
        return Err(Error::invalid("training stream too short for the batch size"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5eed_1571);
    let mut log = LstmTrainingLog {
        initial_dev_perplexity: perplexity(&model, dev)?,
        epochs: Vec::new(),
    };
    let mut best = model.params.clone();
    let mut best_ppl = log.initial_dev_perplexity;
    let mut lr = config.lr_start;
    info!("lstm: {} windows per epoch, initial dev ppl {best_ppl:.3}", windows(data.nrows(), config.bptt_len).count());

    for epoch in 1..=config.epochs {
        let mut state = model.zero_state(config.batch_size);
        let mut total = 0.0;
        let mut count = 0usize;
        for (i, len) in windows(data.nrows(), config.bptt_len) {
            let inputs = data.slice(s![i..i + len, ..]);
            let targets = data.slice(s![i + 1..i + 1 + len, ..]);
            let dropout = (config.dropout > 0.0).then_some(Dropout {
                p: config.dropout,
                rng: &mut rng,
            });
            let (loss, mut grads, next) = loss_and_gradients(&model.params, inputs, targets, &state, dropout)?;
            if !loss.is_finite() {
                return Err(Error::Numerical(format!("training loss diverged in epoch {epoch}")));
            }
            clip_global_norm(&mut grads, config.clip_norm);
            model.params.axpy(-(lr as f32), &grads);
            state = next;
            total += loss * len as f64;
            count += len;
        }
        if !model.params.all_finite() {
            return Err(Error::Numerical(format!("non-finite parameters after epoch {epoch}")));
        }
        let dev_ppl = perplexity(&model, dev)?;
        if !dev_ppl.is_finite() {
            return Err(Error::Numerical(format!("dev perplexity diverged in epoch {epoch}")));
        }
        let train_loss = total / count as f64;
        info!("lstm epoch {epoch}: lr {lr:.4} train loss {train_loss:.4} dev ppl {dev_ppl:.3}");
        if dev_ppl < best_ppl {
            best_ppl = dev_ppl;
            best = model.params.clone();
        } else {
            lr /= config.lr_shrink;
        }
        log.epochs.push(LstmEpoch {
            epoch,
            lr,
            train_loss,
            dev_perplexity: dev_ppl,
            best_dev_perplexity: best_ppl,
        });
    }
    model.params = best;
    Ok((model, log))
}

/// Runs `[SEP] + prompt` from the zero state and returns the `k` most likely
/// next tokens, excluding UNK and the separator. Ties rank numerically.
pub fn next_token_topk<S: AsRef<str>>(model: &LstmLmModel, prompt: &[S], k: usize) -> Result<Vec<(Token, f64)>> {
    if prompt.is_empty() {
        return Err(Error::invalid("prompt must not be empty"));
    }
    let mut ids = vec![model.separator_id()];
    ids.extend(model.vocab.encode_terms(prompt));
    let inputs = Array2::from_shape_vec((ids.len(), 1), ids).expect("column shape");
    let (mut logits, _) = lm_forward(model, inputs.view(), &model.zero_state(1))?;
    let last = logits.nrows() - 1;
    let mut probs = logits.slice_mut(s![last..=last, ..]).to_owned();
    softmax_rows(&mut probs);
    let sep = model.separator_id();
    let mut ranked: Vec<(u32, f64)> = probs
        .row(0)
        .iter()
        .enumerate()
        .map(|(id, &p)| (id as u32, p as f64))
        .filter(|&(id, _)| id != Vocabulary::UNK_ID && id != sep)
        .collect();
    ranked.sort_by(|a, b| {
        b.1.partial_cmp(&a.1)
            .unwrap_or(Ordering::Equal)
            .then_with(|| cmp_numeric(model.vocab.token(a.0), model.vocab.token(b.0)))
    });
    ranked.truncate(k);
    Ok(ranked
        .into_iter()
        .map(|(id, p)| (Token::new(model.vocab.token(id)), p))
        .collect())
}

/// The input embedding rows of every retained integer token.
pub fn extract_embeddings(model: &LstmLmModel) -> Result<EmbeddingTable> {
    let dim = model.params.embed_dim();
    let mut tokens = Vec::with_capacity(model.vocab.len());
    let mut matrix = Vec::with_capacity(model.vocab.len() * dim);
    for (id, token) in model.vocab.integer_tokens() {
        tokens.push(token.clone());
        matrix.extend(model.params.embedding.row(id as usize).iter().copied());
    }
    EmbeddingTable::new(LSTM_TAG, dim, tokens, matrix)
}

#[cfg(test)]
mod tests;
