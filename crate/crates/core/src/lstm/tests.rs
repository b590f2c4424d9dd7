use super::*;
use crate::vocab::build_vocab;
use ndarray::Array2;
use proptest::prelude::*;

fn rec(id: &str, terms: &[i64]) -> SequenceRecord {
    let terms: Vec<String> = terms.iter().map(|t| t.to_string()).collect();
    SequenceRecord::new(id, &terms).unwrap()
}

fn progressions(starts: std::ops::Range<i64>, len: usize) -> Vec<SequenceRecord> {
    starts
        .map(|a| rec(&format!("A{a:06}"), &(0..len as i64).map(|i| a + 2 * i).collect::<Vec<_>>()))
        .collect()
}

/// Step-2 progressions with random starts in `0..30` and lengths `5..=10`, in random order.
fn random_progressions(n: usize, seed: u64) -> Vec<SequenceRecord> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let a: i64 = rand::Rng::gen_range(&mut rng, 0..30);
            let len: i64 = rand::Rng::gen_range(&mut rng, 5..=10);
            rec(&format!("A{i:06}"), &(0..len).map(|j| a + 2 * j).collect::<Vec<_>>())
        })
        .collect()
}

fn small_config() -> LstmLmConfig {
    LstmLmConfig {
        embed_dim: 8,
        hidden_dim: 12,
        layers: 2,
        bptt_len: 6,
        batch_size: 4,
        eval_batch_size: 2,
        lr_start: 2.0,
        epochs: 3,
        dropout: 0.0,
        min_count: 1,
        ..LstmLmConfig::default()
    }
}

/// Central-difference check of every analytic gradient entry in a sample.
fn max_relative_error(draw: u64, dropout: f64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(draw);
    let (v, e, h, layers, steps, batch) = (30, 5, 6, 2, 4, 3);
    let mut params = LstmParams::<f64>::init_uniform(v, e, h, layers, 0.5, &mut rng);
    let inputs = Array2::from_shape_fn((steps, batch), |_| rand::Rng::gen_range(&mut rng, 0..v as u32));
    let targets = Array2::from_shape_fn((steps, batch), |_| rand::Rng::gen_range(&mut rng, 0..v as u32));
    let mut state = LstmState::<f64>::zeros(layers, batch, h);
    for t in state.h.iter_mut().chain(state.c.iter_mut()) {
        t.mapv_inplace(|_| rand::Rng::gen_range(&mut rng, -0.5..0.5));
    }
    let mask_seed = draw ^ 0xdead;
    let loss_at = |p: &LstmParams<f64>| -> (f64, LstmParams<f64>) {
        let mut mrng = ChaCha8Rng::seed_from_u64(mask_seed);
        let d = (dropout > 0.0).then_some(Dropout { p: dropout, rng: &mut mrng });
        let (loss, grads, _) = loss_and_gradients(p, inputs.view(), targets.view(), &state, d).unwrap();
        (loss, grads)
    };
    let (_, analytic) = loss_at(&params);
    let analytic: Vec<Vec<f64>> = analytic.tensors().iter().map(|(_, t)| t.iter().copied().collect()).collect();

    let eps = 1e-5;
    let mut worst = 0f64;
    let n_tensors = analytic.len();
    for ti in 0..n_tensors {
        let len = analytic[ti].len();
        for _ in 0..12 {
            let k = rand::Rng::gen_range(&mut rng, 0..len);
            let bump = |params: &mut LstmParams<f64>, delta: f64| {
                let mut tensors = params.tensors_mut();
                let x = tensors[ti].1.iter_mut().nth(k).unwrap();
                *x += delta;
            };
            bump(&mut params, eps);
            let plus = loss_at(&params).0;
            bump(&mut params, -2.0 * eps);
            let minus = loss_at(&params).0;
            bump(&mut params, eps);
            let numeric = (plus - minus) / (2.0 * eps);
            let a = analytic[ti][k];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
            worst = worst.max(rel);
        }
    }
    worst
}

#[test]
fn gradient_check_double_precision() {
    for draw in 0..5 {
        let err = max_relative_error(draw, 0.0);
        assert!(err <= 1e-4, "draw {draw}: max relative error {err:e}");
    }
}

#[test]
fn gradient_check_with_fixed_dropout_mask() {
    for draw in 10..15 {
        let err = max_relative_error(draw, 0.3);
        assert!(err <= 1e-4, "draw {draw}: max relative error {err:e}");
    }
}

#[test]
fn carried_state_is_detached() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let params = LstmParams::<f64>::init_uniform(12, 4, 5, 2, 0.3, &mut rng);
    let w1 = Array2::from_shape_fn((3, 2), |(t, b)| (t + 2 * b) as u32);
    let w2 = Array2::from_shape_fn((3, 2), |(t, b)| (5 + t + b) as u32);
    let w3 = Array2::from_shape_fn((3, 2), |(t, b)| (1 + t * b) as u32);
    let zero = LstmState::zeros(2, 2, 5);

    let (_, _, s1) = loss_and_gradients::<f64, ChaCha8Rng>(&params, w1.view(), w2.view(), &zero, None).unwrap();
    let frozen = params.clone();
    let (_, _, s1_frozen) = loss_and_gradients::<f64, ChaCha8Rng>(&frozen, w1.view(), w2.view(), &zero, None).unwrap();
    assert_eq!(s1, s1_frozen);

    let (la, ga, _) = loss_and_gradients::<f64, ChaCha8Rng>(&params, w2.view(), w3.view(), &s1, None).unwrap();
    let (lb, gb, _) = loss_and_gradients::<f64, ChaCha8Rng>(&params, w2.view(), w3.view(), &s1_frozen, None).unwrap();
    assert_eq!(la, lb);
    assert_eq!(ga, gb);

    // The analytic window-2 gradient matches finite differences taken with
    // the carried state held fixed, not with it recomputed from the parameters.
    let loss2 = |p: &LstmParams<f64>, recompute: bool| {
        let state = if recompute {
            loss_and_gradients::<f64, ChaCha8Rng>(p, w1.view(), w2.view(), &zero, None).unwrap().2
        } else {
            s1.clone()
        };
        loss_and_gradients::<f64, ChaCha8Rng>(p, w2.view(), w3.view(), &state, None).unwrap().0
    };
    let eps = 1e-6;
    let mut fixed_err = 0f64;
    let mut recomputed_err = 0f64;
    for k in 0..10 {
        let mut plus = params.clone();
        plus.layers[0].w_hh[(k, k % 5)] += eps;
        let mut minus = params.clone();
        minus.layers[0].w_hh[(k, k % 5)] -= eps;
        let a = ga.layers[0].w_hh[(k, k % 5)];
        fixed_err = fixed_err.max((a - (loss2(&plus, false) - loss2(&minus, false)) / (2.0 * eps)).abs());
        recomputed_err = recomputed_err.max((a - (loss2(&plus, true) - loss2(&minus, true)) / (2.0 * eps)).abs());
    }
    assert!(fixed_err < 1e-7, "{fixed_err}");
    assert!(recomputed_err > 100.0 * fixed_err, "{recomputed_err} vs {fixed_err}");
}

#[test]
fn clipping_scales_norm_ten_by_0_025() {
    let mut g = LstmParams::<f64>::zeros(3, 2, 2, 1);
    g.out_b[0] = 6.0;
    g.out_b[1] = 8.0;
    let before = clip_global_norm(&mut g, 0.25);
    assert_eq!(before, 10.0);
    assert!((g.out_b[0] - 6.0 * 0.025).abs() < 1e-15);
    assert!((g.out_b[1] - 8.0 * 0.025).abs() < 1e-15);
    assert!((g.global_norm() - 0.25).abs() < 1e-12);
}

proptest! {
    #[test]
    fn clipping_never_increases_norm(values in proptest::collection::vec(-50.0f64..50.0, 6), clip in 0.01f64..20.0) {
        let mut g = LstmParams::<f64>::zeros(3, 2, 1, 1);
        for (x, v) in g.out_w.iter_mut().zip(&values) {
            *x = *v;
        }
        let before = g.global_norm();
        clip_global_norm(&mut g, clip);
        let after = g.global_norm();
        prop_assert!(after <= before + 1e-12);
        prop_assert!(after <= clip + 1e-9);
    }

    #[test]
    fn softmax_rows_sum_to_one(values in proptest::collection::vec(-80.0f32..80.0, 12)) {
        let mut m = Array2::from_shape_vec((3, 4), values).unwrap();
        softmax_rows(&mut m);
        for row in m.rows() {
            let sum: f64 = row.iter().map(|&x| x as f64).sum();
            prop_assert!((sum - 1.0).abs() < 1e-6);
        }
    }
}

#[test]
fn batchify_strips() {
    let stream: Vec<u32> = (0..10).collect();
    let b = batchify(&stream, 2).unwrap();
    assert_eq!(b.dim(), (5, 2));
    assert_eq!(b.column(0).to_vec(), vec![0, 1, 2, 3, 4]);
    assert_eq!(b.column(1).to_vec(), vec![5, 6, 7, 8, 9]);

    let stream: Vec<u32> = (0..11).collect();
    let b = batchify(&stream, 2).unwrap();
    assert_eq!(b.dim(), (5, 2));
    assert_eq!(b.column(1).to_vec(), vec![5, 6, 7, 8, 9]);

    assert_eq!(batchify(&stream, 1).unwrap().column(0).to_vec(), stream);
    assert!(batchify(&stream[..3], 4).is_err());
}

#[test]
fn stream_has_separators_around_sequences() {
    let train = vec![rec("A000001", &[1, 2, 3]), rec("A000002", &[2, 3, 9])];
    let vocab = build_vocab(&train, 1).unwrap();
    let sep = vocab.len() as u32;
    let s = encode_stream(&train, &vocab);
    assert_eq!(s.len(), 9);
    assert_eq!(s[0], sep);
    assert_eq!(s[4], sep);
    assert_eq!(s[8], sep);
}

#[test]
fn zero_model_is_uniform() {
    let train = progressions(0..10, 6);
    let vocab = build_vocab(&train, 1).unwrap();
    let model = LstmLmModel::zeroed(vocab, small_config()).unwrap();
    let v = model.n_tokens();
    let ppl = perplexity(&model, &train).unwrap();
    assert!((ppl - v as f64).abs() < 1e-3 * v as f64, "ppl {ppl} vs {v}");

    let ranked = next_token_topk(&model, &["0", "2"], v).unwrap();
    assert_eq!(ranked.len(), v - 2);
    let total: f64 = ranked.iter().map(|(_, p)| p).sum();
    assert!((total - (v - 2) as f64 / v as f64).abs() < 1e-5);
    let expected: Vec<i64> = {
        let mut t: Vec<i64> = model.vocab.integer_tokens().map(|(_, t)| t.parse().unwrap()).collect();
        t.sort();
        t
    };
    let got: Vec<i64> = ranked.iter().map(|(t, _)| t.parse().unwrap()).collect();
    assert_eq!(got, expected);
}

#[test]
fn confident_logits_give_unit_perplexity() {
    let mut logits = Array2::<f64>::zeros((3, 5));
    let targets = [1u32, 4, 0];
    for (r, &t) in targets.iter().enumerate() {
        logits[(r, t as usize)] = 60.0;
    }
    let (loss, _) = cross_entropy(&logits, &targets);
    assert!((loss.exp() - 1.0).abs() < 1e-12);
}

#[test]
fn forward_rejects_bad_inputs() {
    let train = progressions(0..5, 5);
    let vocab = build_vocab(&train, 1).unwrap();
    let model = LstmLmModel::new(vocab, small_config()).unwrap();
    let bad = Array2::from_elem((2, 1), model.n_tokens() as u32);
    assert!(lm_forward(&model, bad.view(), &model.zero_state(1)).is_err());
    let ok = Array2::from_elem((2, 2), 1u32);
    assert!(lm_forward(&model, ok.view(), &model.zero_state(3)).is_err());
    let (logits, _) = lm_forward(&model, ok.view(), &model.zero_state(2)).unwrap();
    assert_eq!(logits.dim(), (4, model.n_tokens()));
    assert!(next_token_topk::<&str>(&model, &[], 3).is_err());
}

#[test]
fn training_is_deterministic_and_improves_dev() {
    let train = progressions(0..24, 8);
    let dev = progressions(3..7, 8);
    let vocab = build_vocab(&train, 1).unwrap();
    let config = LstmLmConfig {
        dropout: 0.2,
        ..small_config()
    };
    let (m1, log1) = train_lm(&train, &dev, &vocab, &config).unwrap();
    let (m2, log2) = train_lm(&train, &dev, &vocab, &config).unwrap();
    assert_eq!(log1, log2);
    assert_eq!(m1.params, m2.params);
    assert!(log1.best_dev_perplexity() < log1.initial_dev_perplexity);
    let mut prev = log1.initial_dev_perplexity;
    for e in &log1.epochs {
        assert!(e.best_dev_perplexity <= prev);
        prev = e.best_dev_perplexity;
    }
    assert!((perplexity(&m1, &dev).unwrap() - log1.best_dev_perplexity()).abs() < 1e-6 * prev);
}

#[test]
fn learns_step_two_progressions() {
    let train = random_progressions(600, 11);
    let dev = random_progressions(40, 12);
    let vocab = build_vocab(&train, 1).unwrap();
    let config = LstmLmConfig {
        embed_dim: 16,
        hidden_dim: 32,
        bptt_len: 5,
        batch_size: 4,
        lr_start: 20.0,
        epochs: 8,
        ..small_config()
    };
    let (model, log) = train_lm(&train, &dev, &vocab, &config).unwrap();
    let ranked = next_token_topk(&model, &["0", "2", "4", "6"], 3).unwrap();
    assert_eq!(ranked[0].0, "8", "ranking {ranked:?}, log {log:?}");

    let eval = perplexity(&model, &train).unwrap();
    let lossy = LstmLmModel {
        config: LstmLmConfig {
            dropout: 0.5,
            ..model.config.clone()
        },
        ..model.clone()
    };
    let noisy = train_mode_perplexity(&lossy, &train, 9).unwrap();
    assert!(eval <= noisy, "eval {eval} vs train-mode {noisy}");
}

#[test]
fn embeddings_are_the_input_rows() {
    let train = progressions(0..6, 5);
    let vocab = build_vocab(&train, 1).unwrap();
    let model = LstmLmModel::new(vocab, LstmLmConfig { min_count: 1, ..LstmLmConfig::default() }).unwrap();
    let table = extract_embeddings(&model).unwrap();
    assert_eq!(table.dim(), 100);
    assert_eq!(table.source_tag(), LSTM_TAG);
    assert!(!table.has_subword());
    assert_eq!(table.len(), model.vocab.len() - 1);
    for (id, token) in model.vocab.integer_tokens() {
        let row: Vec<f32> = model.params.embedding.row(id as usize).to_vec();
        assert_eq!(table.stored(token).unwrap(), &row[..]);
    }
}

#[test]
fn checkpoint_round_trip() {
    let train = progressions(0..6, 5);
    let vocab = build_vocab(&train, 1).unwrap();
    let model = LstmLmModel::new(vocab, small_config()).unwrap();
    let mut buf = Vec::new();
    write_checkpoint(&model, &mut buf).unwrap();
    assert_eq!(&buf[..8], CHECKPOINT_MAGIC);
    let back = read_checkpoint(&buf[..]).unwrap();
    assert_eq!(back, model);

    let mut corrupt = buf.clone();
    corrupt[0] = b'X';
    assert!(matches!(read_checkpoint(&corrupt[..]), Err(Error::Format(_))));
    assert!(read_checkpoint(&buf[..buf.len() - 3]).is_err());
}



