//! Stacked LSTM forward and backward passes over one truncated-BPTT window.
//!
//! Inputs are `T × B` token ids; flattened activations use row `t · B + b`.
//! Gate order in the packed `4H` weight rows is input, forget, cell, output.

use std::fmt::{Debug, Display};
use std::ops::{AddAssign, MulAssign};

use ndarray::linalg::general_mat_mul;
use ndarray::{s, Array1, Array2, ArrayView2, ArrayViewD, ArrayViewMutD, Axis, LinalgScalar, ScalarOperand, Zip};
use num_traits::{Float, FromPrimitive};
use rand::Rng;

use crate::error::{Error, Result};

pub trait Scalar:
    Float
    + LinalgScalar
    + ScalarOperand
    + FromPrimitive
    + AddAssign
    + MulAssign
    + Debug
    + Display
    + Send
    + Sync
    + 'static
{
}

impl Scalar for f32 {}
impl Scalar for f64 {}

fn cast<F: Scalar>(x: f64) -> F {
    F::from_f64(x).expect("representable constant")
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerParams<F> {
    /// `4H × input_dim`
    pub w_ih: Array2<F>,
    /// `4H × H`
    pub w_hh: Array2<F>,
    /// `4H`
    pub bias: Array1<F>,
}

/// All trainable parameters. Also used to hold gradients of the same shape.
#[derive(Clone, Debug, PartialEq)]
pub struct LstmParams<F> {
    /// `V × E`
    pub embedding: Array2<F>,
    pub layers: Vec<LayerParams<F>>,
    /// `V × H`
    pub out_w: Array2<F>,
    pub out_b: Array1<F>,
}

impl<F: Scalar> LstmParams<F> {
    pub fn zeros(n_tokens: usize, embed_dim: usize, hidden_dim: usize, layers: usize) -> Self {
        let h4 = 4 * hidden_dim;
        LstmParams {
            embedding: Array2::zeros((n_tokens, embed_dim)),
            layers: (0..layers)
                .map(|l| LayerParams {
                    w_ih: Array2::zeros((h4, if l == 0 { embed_dim } else { hidden_dim })),
                    w_hh: Array2::zeros((h4, hidden_dim)),
                    bias: Array1::zeros(h4),
                })
                .collect(),
            out_w: Array2::zeros((n_tokens, hidden_dim)),
            out_b: Array1::zeros(n_tokens),
        }
    }

    /// Uniform `[-range, range]` weights; forget-gate biases start at +1.
    pub fn init_uniform<R: Rng>(
        n_tokens: usize,
        embed_dim: usize,
        hidden_dim: usize,
        layers: usize,
        range: f64,
        rng: &mut R,
    ) -> Self {
        let mut p = Self::zeros(n_tokens, embed_dim, hidden_dim, layers);
        for (name, mut t) in p.tensors_mut() {
            if name.ends_with(".bias") || name == "out_b" {
                continue;
            }
            t.mapv_inplace(|_| cast(rng.gen_range(-range..=range)));
        }
        for layer in &mut p.layers {
            layer
                .bias
                .slice_mut(s![hidden_dim..2 * hidden_dim])
                .fill(F::one());
        }
        p
    }

    pub fn n_tokens(&self) -> usize {
        self.embedding.nrows()
    }

    pub fn embed_dim(&self) -> usize {
        self.embedding.ncols()
    }

    pub fn hidden_dim(&self) -> usize {
        self.out_w.ncols()
    }

    pub fn n_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.n_tokens(), self.embed_dim(), self.hidden_dim(), self.n_layers())
    }

    /// Named views in a fixed order (the checkpoint order).
    pub fn tensors(&self) -> Vec<(String, ArrayViewD<'_, F>)> {
        let mut out = vec![("embedding".to_string(), self.embedding.view().into_dyn())];
        for (l, layer) in self.layers.iter().enumerate() {
            out.push((format!("layer{l}.w_ih"), layer.w_ih.view().into_dyn()));
            out.push((format!("layer{l}.w_hh"), layer.w_hh.view().into_dyn()));
            out.push((format!("layer{l}.bias"), layer.bias.view().into_dyn()));
        }
        out.push(("out_w".to_string(), self.out_w.view().into_dyn()));
        out.push(("out_b".to_string(), self.out_b.view().into_dyn()));
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<(String, ArrayViewMutD<'_, F>)> {
        let mut out = vec![("embedding".to_string(), self.embedding.view_mut().into_dyn())];
        for (l, layer) in self.layers.iter_mut().enumerate() {
            out.push((format!("layer{l}.w_ih"), layer.w_ih.view_mut().into_dyn()));
            out.push((format!("layer{l}.w_hh"), layer.w_hh.view_mut().into_dyn()));
            out.push((format!("layer{l}.bias"), layer.bias.view_mut().into_dyn()));
        }
        out.push(("out_w".to_string(), self.out_w.view_mut().into_dyn()));
        out.push(("out_b".to_string(), self.out_b.view_mut().into_dyn()));
        out
    }

    /// Euclidean norm over every entry of every tensor.
    pub fn global_norm(&self) -> f64 {
        self.tensors()
            .iter()
            .flat_map(|(_, t)| t.iter())
            .map(|x| {
                let x = x.to_f64().unwrap_or(f64::NAN);
                x * x
            })
            .sum::<f64>()
            .sqrt()
    }

    pub fn scale(&mut self, factor: F) {
        for (_, mut t) in self.tensors_mut() {
            t.mapv_inplace(|x| x * factor);
        }
    }

    /// `self += alpha · other`
    pub fn axpy(&mut self, alpha: F, other: &Self) {
        for ((_, mut dst), (_, src)) in self.tensors_mut().into_iter().zip(other.tensors()) {
            Zip::from(&mut dst).and(&src).for_each(|d, &s| *d += alpha * s);
        }
    }

    pub fn all_finite(&self) -> bool {
        self.tensors().iter().all(|(_, t)| t.iter().all(|x| x.is_finite()))
    }

    pub fn cast<G: Scalar>(&self) -> LstmParams<G> {
        let c2 = |a: &Array2<F>| a.mapv(|x| G::from_f64(x.to_f64().unwrap()).unwrap());
        let c1 = |a: &Array1<F>| a.mapv(|x| G::from_f64(x.to_f64().unwrap()).unwrap());
        LstmParams {
            embedding: c2(&self.embedding),
            layers: self
                .layers
                .iter()
                .map(|l| LayerParams {
                    w_ih: c2(&l.w_ih),
                    w_hh: c2(&l.w_hh),
                    bias: c1(&l.bias),
                })
                .collect(),
            out_w: c2(&self.out_w),
            out_b: c1(&self.out_b),
        }
    }
}

/// Per-layer hidden and cell state, each `B × H`.
#[derive(Clone, Debug, PartialEq)]
pub struct LstmState<F> {
    pub h: Vec<Array2<F>>,
    pub c: Vec<Array2<F>>,
}

impl<F: Scalar> LstmState<F> {
    pub fn zeros(layers: usize, batch: usize, hidden: usize) -> Self {
        LstmState {
            h: vec![Array2::zeros((batch, hidden)); layers],
            c: vec![Array2::zeros((batch, hidden)); layers],
        }
    }

    pub fn batch(&self) -> usize {
        self.h.first().map_or(0, |h| h.nrows())
    }
}

/// Inverted dropout configuration for a training-mode pass.
pub struct Dropout<'a, R> {
    pub p: f64,
    pub rng: &'a mut R,
}

struct LayerCache<F> {
    /// layer input (after dropout), `N × in`
    x: Array2<F>,
    i: Array2<F>,
    f: Array2<F>,
    g: Array2<F>,
    o: Array2<F>,
    c: Array2<F>,
    tanh_c: Array2<F>,
    /// outputs, `N × H`
    h: Array2<F>,
    h0: Array2<F>,
    c0: Array2<F>,
    /// dropout mask applied to this layer's output
    mask: Option<Array2<F>>,
}

/// Activations retained for the backward pass.
pub struct ForwardCache<F> {
    inputs: Array2<u32>,
    layers: Vec<LayerCache<F>>,
    /// top-layer output after dropout, `N × H`
    top: Array2<F>,
}

pub struct ForwardPass<F> {
    /// `N × V`, row `t · B + b`
    pub logits: Array2<F>,
    pub state: LstmState<F>,
    pub cache: ForwardCache<F>,
}

fn sigmoid<F: Scalar>(x: F) -> F {
    F::one() / (F::one() + (-x).exp())
}

fn dropout_mask<F: Scalar, R: Rng>(shape: (usize, usize), d: &mut Dropout<'_, R>) -> Array2<F> {
    let keep = 1.0 - d.p;
    let scale: F = cast(1.0 / keep);
    Array2::from_shape_fn(shape, |_| if d.rng.gen::<f64>() < keep { scale } else { F::zero() })
}

/// Runs the network over a `T × B` window from `state`. With `dropout`, masks
/// are applied between layers and before the output projection.
pub fn forward<F: Scalar, R: Rng>(
    params: &LstmParams<F>,
    inputs: ArrayView2<'_, u32>,
    state: &LstmState<F>,
    mut dropout: Option<Dropout<'_, R>>,
) -> Result<ForwardPass<F>> {
    let (steps, batch) = inputs.dim();
    let hidden = params.hidden_dim();
    let n_layers = params.n_layers();
    if state.h.len() != n_layers || state.batch() != batch || state.h[0].ncols() != hidden {
        return Err(Error::invalid(format!(
            "state shape {}×{}×{} does not match {n_layers} layers, batch {batch}, hidden {hidden}",
            state.h.len(),
            state.batch(),
            state.h.first().map_or(0, |h| h.ncols())
        )));
    }
    let v = params.n_tokens();
    if let Some(&bad) = inputs.iter().find(|&&id| id as usize >= v) {
        return Err(Error::invalid(format!("token id {bad} out of range for {v} tokens")));
    }
    let n = steps * batch;
    let mut x = Array2::zeros((n, params.embed_dim()));
    for (row, &id) in inputs.iter().enumerate() {
        x.row_mut(row).assign(&params.embedding.row(id as usize));
    }

    let mut caches = Vec::with_capacity(n_layers);
    let mut new_state = LstmState {
        h: Vec::with_capacity(n_layers),
        c: Vec::with_capacity(n_layers),
    };
    for (l, layer) in params.layers.iter().enumerate() {
        let mut xw = x.dot(&layer.w_ih.t());
        xw += &layer.bias;
        let mut cache = LayerCache {
            x,
            i: Array2::zeros((n, hidden)),
            f: Array2::zeros((n, hidden)),
            g: Array2::zeros((n, hidden)),
            o: Array2::zeros((n, hidden)),
            c: Array2::zeros((n, hidden)),
            tanh_c: Array2::zeros((n, hidden)),
            h: Array2::zeros((n, hidden)),
            h0: state.h[l].clone(),
            c0: state.c[l].clone(),
            mask: None,
        };
        let mut h = state.h[l].clone();
        let mut c = state.c[l].clone();
        let mut gates = Array2::zeros((batch, 4 * hidden));
        for t in 0..steps {
            let rows = t * batch..(t + 1) * batch;
            gates.assign(&xw.slice(s![rows.clone(), ..]));
            general_mat_mul(F::one(), &h, &layer.w_hh.t(), F::one(), &mut gates);
            let ig = gates.slice(s![.., 0..hidden]).mapv(sigmoid);
            let fg = gates.slice(s![.., hidden..2 * hidden]).mapv(sigmoid);
            let gg = gates.slice(s![.., 2 * hidden..3 * hidden]).mapv(F::tanh);
            let og = gates.slice(s![.., 3 * hidden..]).mapv(sigmoid);
            c = &fg * &c + &ig * &gg;
            let tc = c.mapv(F::tanh);
            h = &og * &tc;
            cache.i.slice_mut(s![rows.clone(), ..]).assign(&ig);
            cache.f.slice_mut(s![rows.clone(), ..]).assign(&fg);
            cache.g.slice_mut(s![rows.clone(), ..]).assign(&gg);
            cache.o.slice_mut(s![rows.clone(), ..]).assign(&og);
            cache.c.slice_mut(s![rows.clone(), ..]).assign(&c);
            cache.tanh_c.slice_mut(s![rows.clone(), ..]).assign(&tc);
            cache.h.slice_mut(s![rows, ..]).assign(&h);
        }
        new_state.h.push(h);
        new_state.c.push(c);
        let mut out = cache.h.clone();
        if let Some(d) = dropout.as_mut().filter(|d| d.p > 0.0) {
            let mask = dropout_mask((n, hidden), d);
            out *= &mask;
            cache.mask = Some(mask);
        }
        caches.push(cache);
        x = out;
    }
    let mut logits = x.dot(&params.out_w.t());
    logits += &params.out_b;
    Ok(ForwardPass {
        logits,
        state: new_state,
        cache: ForwardCache {
            inputs: inputs.to_owned(),
            layers: caches,
            top: x,
        },
    })
}

/// Row-wise softmax in place.
pub fn softmax_rows<F: Scalar>(logits: &mut Array2<F>) {
    for mut row in logits.rows_mut() {
        let max = row.iter().copied().fold(F::neg_infinity(), F::max);
        row.mapv_inplace(|x| (x - max).exp());
        let sum = row.iter().copied().fold(F::zero(), |a, b| a + b);
        row.mapv_inplace(|x| x / sum);
    }
}

/// Mean cross-entropy over rows and its gradient with respect to the logits.
pub fn cross_entropy<F: Scalar>(logits: &Array2<F>, targets: &[u32]) -> (f64, Array2<F>) {
    let n = logits.nrows();
    let mut probs = logits.clone();
    softmax_rows(&mut probs);
    let mut total = 0f64;
    for (row, &t) in targets.iter().enumerate() {
        total -= log_prob(logits.row(row).iter().copied(), t as usize);
    }
    let inv: F = cast(1.0 / n as f64);
    let mut grad = probs;
    for (row, &t) in targets.iter().enumerate() {
        grad[(row, t as usize)] = grad[(row, t as usize)] - F::one();
    }
    grad.mapv_inplace(|x| x * inv);
    (total / n as f64, grad)
}

/// `log softmax(row)[target]` via log-sum-exp, in double precision.
fn log_prob<F: Scalar>(row: impl Iterator<Item = F>, target: usize) -> f64 {
    let row: Vec<f64> = row.map(|x| x.to_f64().unwrap()).collect();
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = row.iter().map(|x| (x - max).exp()).sum::<f64>().ln() + max;
    row[target] - lse
}

/// Gradients of the loss whose logit gradient is `d_logits`. Carried state is
/// treated as a constant: no gradient flows into the previous window.
pub fn backward<F: Scalar>(params: &LstmParams<F>, cache: &ForwardCache<F>, d_logits: &Array2<F>) -> LstmParams<F> {
    let mut grads = params.zeros_like();
    let (steps, batch) = cache.inputs.dim();
    let hidden = params.hidden_dim();

    grads.out_w = d_logits.t().dot(&cache.top);
    grads.out_b = d_logits.sum_axis(Axis(0));
    let mut d_h = d_logits.dot(&params.out_w);

    for l in (0..params.n_layers()).rev() {
        let lc = &cache.layers[l];
        let layer = &params.layers[l];
        if let Some(mask) = &lc.mask {
            d_h *= mask;
        }
        let n = steps * batch;
        let mut d_gates = Array2::zeros((n, 4 * hidden));
        let mut dh_next = Array2::<F>::zeros((batch, hidden));
        let mut dc_next = Array2::<F>::zeros((batch, hidden));
        for t in (0..steps).rev() {
            let rows = t * batch..(t + 1) * batch;
            let sl = |a: &Array2<F>| a.slice(s![rows.clone(), ..]).to_owned();
            let (ig, fg, gg, og, tc) = (sl(&lc.i), sl(&lc.f), sl(&lc.g), sl(&lc.o), sl(&lc.tanh_c));
            let c_prev = if t == 0 {
                lc.c0.clone()
            } else {
                lc.c.slice(s![(t - 1) * batch..t * batch, ..]).to_owned()
            };
            let dh = &d_h.slice(s![rows.clone(), ..]) + &dh_next;
            let d_o = &dh * &tc;
            let dc = &dh * &og * &tc.mapv(|x| F::one() - x * x) + &dc_next;
            let d_i = &dc * &gg;
            let d_g = &dc * &ig;
            let d_f = &dc * &c_prev;
            dc_next = &dc * &fg;

            let mut dg = d_gates.slice_mut(s![rows, ..]);
            dg.slice_mut(s![.., 0..hidden])
                .assign(&(&d_i * &ig.mapv(|x| x * (F::one() - x))));
            dg.slice_mut(s![.., hidden..2 * hidden])
                .assign(&(&d_f * &fg.mapv(|x| x * (F::one() - x))));
            dg.slice_mut(s![.., 2 * hidden..3 * hidden])
                .assign(&(&d_g * &gg.mapv(|x| F::one() - x * x)));
            dg.slice_mut(s![.., 3 * hidden..])
                .assign(&(&d_o * &og.mapv(|x| x * (F::one() - x))));
            dh_next = dg.dot(&layer.w_hh);
        }
        // previous hidden states for every step: [h0; h_0 .. h_{T-2}]
        let mut h_prev = Array2::zeros((n, hidden));
        h_prev.slice_mut(s![0..batch, ..]).assign(&lc.h0);
        if steps > 1 {
            h_prev
                .slice_mut(s![batch.., ..])
                .assign(&lc.h.slice(s![..n - batch, ..]));
        }
        let gl = &mut grads.layers[l];
        gl.w_hh = d_gates.t().dot(&h_prev);
        gl.w_ih = d_gates.t().dot(&lc.x);
        gl.bias = d_gates.sum_axis(Axis(0));
        let d_x = d_gates.dot(&layer.w_ih);
        if l > 0 {
            d_h = d_x;
        } else {
            for (row, &id) in cache.inputs.iter().enumerate() {
                let mut g = grads.embedding.row_mut(id as usize);
                g += &d_x.row(row);
            }
        }
    }
    grads
}

/// Loss and gradients for one window; returns the carried state for the next window.
pub fn loss_and_gradients<F: Scalar, R: Rng>(
    params: &LstmParams<F>,
    inputs: ArrayView2<'_, u32>,
    targets: ArrayView2<'_, u32>,
    state: &LstmState<F>,
    dropout: Option<Dropout<'_, R>>,
) -> Result<(f64, LstmParams<F>, LstmState<F>)> {
    let pass = forward(params, inputs, state, dropout)?;
    let targets: Vec<u32> = targets.iter().copied().collect();
    let (loss, d_logits) = cross_entropy(&pass.logits, &targets);
    let grads = backward(params, &pass.cache, &d_logits);
    Ok((loss, grads, pass.state))
}

/// Scales `grads` so their global norm is at most `max_norm`. Returns the
/// norm before clipping.
pub fn clip_global_norm<F: Scalar>(grads: &mut LstmParams<F>, max_norm: f64) -> f64 {
    let norm = grads.global_norm();
    if norm > max_norm && norm > 0.0 {
        grads.scale(cast(max_norm / norm));
    }
    norm
}
