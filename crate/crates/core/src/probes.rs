//! Diagnostic probes: logistic classifiers for divisibility and primality,
//! linear regression for value and digit count.

use std::fmt;
use std::ops::RangeInclusive;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::embed::EmbeddingTable;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Property {
    Even,
    Div3,
    Div4,
    Prime,
    Value,
    Digits,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PropertyKind {
    Binary,
    Regression,
}

impl Property {
    pub const BINARY: [Property; 4] = [Property::Even, Property::Div3, Property::Div4, Property::Prime];
    pub const REGRESSION: [Property; 2] = [Property::Value, Property::Digits];

    pub fn kind(self) -> PropertyKind {
        match self {
            Property::Value | Property::Digits => PropertyKind::Regression,
            _ => PropertyKind::Binary,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Property::Even => "even",
            Property::Div3 => "div3",
            Property::Div4 => "div4",
            Property::Prime => "prime",
            Property::Value => "value",
            Property::Digits => "digits",
        }
    }
}

impl fmt::Display for Property {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Property {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        [Property::BINARY.as_slice(), Property::REGRESSION.as_slice()]
            .concat()
            .into_iter()
            .find(|p| p.as_str() == s)
            .ok_or_else(|| Error::invalid(format!("unknown property {s:?}")))
    }
}

/// Sieve of Eratosthenes up to `limit`, with trial division beyond it.
#[derive(Clone, Debug)]
pub struct PrimeSieve {
    is_prime: Vec<bool>,
}

impl PrimeSieve {
    pub fn new(limit: u64) -> Self {
        let n = limit as usize + 1;
        let mut is_prime = vec![true; n.max(2)];
        is_prime[0] = false;
        is_prime[1] = false;
        let mut p = 2;
        while p * p < n {
            if is_prime[p] {
                (p * p..n).step_by(p).for_each(|m| is_prime[m] = false);
            }
            p += 1;
        }
        is_prime.truncate(n.max(2));
        PrimeSieve { is_prime }
    }

    pub fn is_prime(&self, n: u64) -> bool {
        if let Some(&p) = self.is_prime.get(n as usize) {
            return p;
        }
        n >= 2 && (2..).take_while(|d| d * d <= n).all(|d| !n.is_multiple_of(d))
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum PropertyValue {
    Binary(bool),
    Real(f64),
}

pub fn digit_count(n: u64) -> u32 {
    n.checked_ilog10().map_or(1, |d| d + 1)
}

pub fn property_oracle(n: u64, property: Property, sieve: &PrimeSieve) -> Result<PropertyValue> {
    if n == 0 {
        return Err(Error::invalid("properties are defined for positive integers"));
    }
    Ok(match property {
        Property::Even => PropertyValue::Binary(n.is_multiple_of(2)),
        Property::Div3 => PropertyValue::Binary(n.is_multiple_of(3)),
        Property::Div4 => PropertyValue::Binary(n.is_multiple_of(4)),
        Property::Prime => PropertyValue::Binary(sieve.is_prime(n)),
        Property::Value => PropertyValue::Real(n as f64),
        Property::Digits => PropertyValue::Real(f64::from(digit_count(n))),
    })
}

fn binary_label(n: u64, property: Property, sieve: &PrimeSieve) -> Result<bool> {
    match property_oracle(n, property, sieve)? {
        PropertyValue::Binary(b) => Ok(b),
        PropertyValue::Real(_) => Err(Error::invalid(format!("{property} is not a binary property"))),
    }
}

fn real_target(n: u64, property: Property, sieve: &PrimeSieve) -> Result<f64> {
    match property_oracle(n, property, sieve)? {
        PropertyValue::Real(x) => Ok(x),
        PropertyValue::Binary(_) => Err(Error::invalid(format!("{property} is not a regression target"))),
    }
}

/// Accuracy of always predicting the more frequent class over `range`.
pub fn majority_baseline(property: Property, range: RangeInclusive<u64>) -> Result<f64> {
    let sieve = PrimeSieve::new(*range.end());
    let mut positives = 0usize;
    let mut total = 0usize;
    for n in range {
        positives += binary_label(n, property, &sieve)? as usize;
        total += 1;
    }
    if total == 0 {
        return Err(Error::invalid("empty range"));
    }
    Ok(positives.max(total - positives) as f64 / total as f64)
}

fn majority_of(labels: &[bool]) -> f64 {
    let pos = labels.iter().filter(|&&b| b).count();
    pos.max(labels.len() - pos) as f64 / labels.len() as f64
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogisticConfig {
    pub l2: f64,
    pub max_iters: usize,
    pub tol: f64,
}

impl Default for LogisticConfig {
    fn default() -> Self {
        LogisticConfig {
            l2: 1e-4,
            max_iters: 5000,
            tol: 1e-7,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LogisticModel {
    pub weights: Array1<f64>,
    pub bias: f64,
    pub iterations: usize,
    pub converged: bool,
}

impl LogisticModel {
    pub fn decision(&self, x: ArrayView2<'_, f64>) -> Array1<f64> {
        x.dot(&self.weights) + self.bias
    }

    pub fn predict(&self, x: ArrayView2<'_, f64>) -> Vec<bool> {
        self.decision(x).iter().map(|&z| z >= 0.0).collect()
    }

    pub fn accuracy(&self, x: ArrayView2<'_, f64>, y: &[bool]) -> f64 {
        accuracy(&self.predict(x), y)
    }
}

fn accuracy(pred: &[bool], y: &[bool]) -> f64 {
    let hits = pred.iter().zip(y).filter(|(p, t)| p == t).count();
    hits as f64 / y.len() as f64
}

/// `log(1 + e^z)` without overflow.
fn softplus(z: f64) -> f64 {
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Mean logistic loss plus `l2 · ‖w‖² / 2`, with its gradient `(∂w, ∂b)`.
pub fn logistic_objective(
    weights: ArrayView1<'_, f64>,
    bias: f64,
    x: ArrayView2<'_, f64>,
    y: &[bool],
    l2: f64,
) -> (f64, Array1<f64>, f64) {
    let n = y.len() as f64;
    let z = x.dot(&weights) + bias;
    let mut loss = 0.0;
    let mut residual = Array1::zeros(y.len());
    for (i, (&zi, &yi)) in z.iter().zip(y).enumerate() {
        // -log σ(z) for positives, -log(1 - σ(z)) for negatives
        loss += if yi { softplus(-zi) } else { softplus(zi) };
        residual[i] = sigmoid(zi) - if yi { 1.0 } else { 0.0 };
    }
    let grad_w = x.t().dot(&residual) / n + &weights * l2;
    let grad_b = residual.sum() / n;
    (loss / n + 0.5 * l2 * weights.dot(&weights), grad_w, grad_b)
}

/// Full-batch gradient descent with Armijo backtracking.
pub fn train_logistic(x: ArrayView2<'_, f64>, y: &[bool], config: &LogisticConfig) -> Result<LogisticModel> {
    if x.nrows() != y.len() || y.len() < 2 {
        return Err(Error::invalid(format!(
            "need at least 2 examples with matching labels, got {} rows and {} labels",
            x.nrows(),
            y.len()
        )));
    }
    if y.iter().all(|&b| b) || y.iter().all(|&b| !b) {
        return Err(Error::invalid("logistic regression needs both classes"));
    }
    let mut w = Array1::zeros(x.ncols());
    let mut b = 0.0;
    let mut step = 1.0;
    let (mut f, mut gw, mut gb) = logistic_objective(w.view(), b, x, y, config.l2);
    for iter in 0..config.max_iters {
        let gnorm2 = gw.dot(&gw) + gb * gb;
        if gnorm2.sqrt() <= config.tol {
            return Ok(LogisticModel {
                weights: w,
                bias: b,
                iterations: iter,
                converged: true,
            });
        }
        step *= 2.0;
        loop {
            let w_new = &w - &(&gw * step);
            let b_new = b - step * gb;
            let (f_new, gw_new, gb_new) = logistic_objective(w_new.view(), b_new, x, y, config.l2);
            if f_new <= f - 0.5 * step * gnorm2 {
                (w, b, f, gw, gb) = (w_new, b_new, f_new, gw_new, gb_new);
                break;
            }
            step *= 0.5;
            if step < 1e-20 {
                // no further decrease representable
                return Ok(LogisticModel {
                    weights: w,
                    bias: b,
                    iterations: iter,
                    converged: false,
                });
            }
        }
    }
    Ok(LogisticModel {
        weights: w,
        bias: b,
        iterations: config.max_iters,
        converged: false,
    })
}

/// Per-column affine map to zero mean and unit variance, fitted on one set.
/// Constant columns are only centered.
#[derive(Clone, Debug)]
pub struct Standardizer {
    mean: Array1<f64>,
    scale: Array1<f64>,
}

impl Standardizer {
    pub fn fit(x: ArrayView2<'_, f64>) -> Self {
        let mean = x.mean_axis(Axis(0)).expect("non-empty");
        let scale = x.var_axis(Axis(0), 0.0).mapv(|v| if v > 0.0 { 1.0 / v.sqrt() } else { 1.0 });
        Standardizer { mean, scale }
    }

    pub fn apply(&self, x: ArrayView2<'_, f64>) -> Array2<f64> {
        (&x - &self.mean) * &self.scale
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LinearModel {
    pub weights: Vec<f64>,
    pub bias: f64,
}

impl LinearModel {
    pub fn predict(&self, x: ArrayView2<'_, f64>) -> Vec<f64> {
        x.rows()
            .into_iter()
            .map(|r| r.iter().zip(&self.weights).map(|(a, w)| a * w).sum::<f64>() + self.bias)
            .collect()
    }
}

/// Ridge regression on centered data: `w = (XᵀX + εI)⁻¹ Xᵀy`, bias restores the means.
pub fn fit_linear(x: ArrayView2<'_, f64>, y: &[f64], ridge_eps: f64) -> Result<LinearModel> {
    if x.nrows() != y.len() || y.is_empty() {
        return Err(Error::invalid("feature rows and targets must match and be non-empty"));
    }
    if !(ridge_eps > 0.0) {
        return Err(Error::invalid("ridge_eps must be positive"));
    }
    let (n, d) = x.dim();
    let x_mean = x.mean_axis(Axis(0)).expect("non-empty");
    let y_mean = y.iter().sum::<f64>() / n as f64;
    let xc = DMatrix::from_fn(n, d, |i, j| x[(i, j)] - x_mean[j]);
    let yc = DVector::from_iterator(n, y.iter().map(|v| v - y_mean));
    let rhs = xc.tr_mul(&yc);
    let mut eps = ridge_eps;
    let weights = loop {
        let mut gram = xc.tr_mul(&xc);
        for i in 0..d {
            gram[(i, i)] += eps;
        }
        if let Some(chol) = gram.cholesky() {
            break chol.solve(&rhs);
        }
        // round-off made the Gram matrix indefinite; regularize harder
        eps *= 10.0;
        if !eps.is_finite() {
            return Err(Error::Numerical("ridge system could not be factorized".into()));
        }
    };
    let bias = y_mean - weights.iter().zip(x_mean.iter()).map(|(w, m)| w * m).sum::<f64>();
    Ok(LinearModel {
        weights: weights.iter().copied().collect(),
        bias,
    })
}

/// Coefficient of determination `1 − SS_res / SS_tot`.
pub fn r_squared(y_true: &[f64], y_pred: &[f64]) -> Result<f64> {
    if y_true.len() != y_pred.len() || y_true.len() < 2 {
        return Err(Error::invalid("r² needs at least two paired values"));
    }
    let mean = y_true.iter().sum::<f64>() / y_true.len() as f64;
    let ss_tot: f64 = y_true.iter().map(|y| (y - mean).powi(2)).sum();
    if ss_tot == 0.0 {
        return Err(Error::invalid("r² is undefined for constant targets"));
    }
    let ss_res: f64 = y_true.iter().zip(y_pred).map(|(y, p)| (y - p).powi(2)).sum();
    Ok(1.0 - ss_res / ss_tot)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeReport {
    pub source_tag: String,
    pub property: Property,
    pub accuracy_all: f64,
    pub accuracy_single: f64,
    pub chosen_dimension: usize,
    /// Fraction of train- and test-range integers the table resolves.
    pub coverage: f64,
    /// Majority-class accuracy on the evaluated test integers.
    pub majority_baseline: f64,
    pub n_train: usize,
    pub n_test: usize,
    pub standardized: bool,
    pub shuffled_labels: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegressionReport {
    pub source_tag: String,
    pub target: Property,
    pub r2_all: f64,
    pub r2_single: f64,
    pub chosen_dimension: usize,
    pub coverage: f64,
    pub n: usize,
}

#[derive(Clone, Debug)]
pub struct BinaryProbeSetup {
    pub train: RangeInclusive<u64>,
    pub test: RangeInclusive<u64>,
    pub logistic: LogisticConfig,
    /// Permute labels within each range with this seed (leakage control).
    pub shuffle_labels: Option<u64>,
}

impl Default for BinaryProbeSetup {
    fn default() -> Self {
        BinaryProbeSetup {
            train: 1..=1000,
            test: 1001..=2000,
            logistic: LogisticConfig::default(),
            shuffle_labels: None,
        }
    }
}

/// Vectors of the resolvable integers in `range`, as a matrix.
fn resolve(table: &EmbeddingTable, range: RangeInclusive<u64>) -> (Vec<u64>, Array2<f64>) {
    let mut ids = Vec::new();
    let mut values = Vec::new();
    for n in range {
        if let Some(v) = table.lookup(&n.to_string()) {
            ids.push(n);
            values.extend(v.iter().map(|&x| f64::from(x)));
        }
    }
    let x = Array2::from_shape_vec((ids.len(), table.dim()), values).expect("rows of table dim");
    (ids, x)
}

pub fn probe_binary(table: &EmbeddingTable, property: Property, setup: &BinaryProbeSetup) -> Result<ProbeReport> {
    if property.kind() != PropertyKind::Binary {
        return Err(Error::invalid(format!("{property} is not a binary property")));
    }
    let sieve = PrimeSieve::new(*setup.train.end().max(setup.test.end()));
    let span = setup.train.clone().count() + setup.test.clone().count();
    let (train_ids, train_raw) = resolve(table, setup.train.clone());
    let (test_ids, test_raw) = resolve(table, setup.test.clone());
    let coverage = (train_ids.len() + test_ids.len()) as f64 / span.max(1) as f64;
    if train_ids.is_empty() || test_ids.is_empty() {
        return Err(Error::invalid(format!(
            "table {} resolves no integers in the train or test range",
            table.source_tag()
        )));
    }
    let label = |ids: &[u64]| ids.iter().map(|&n| binary_label(n, property, &sieve)).collect::<Result<Vec<_>>>();
    let mut y_train = label(&train_ids)?;
    let mut y_test = label(&test_ids)?;
    if let Some(seed) = setup.shuffle_labels {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        y_train.shuffle(&mut rng);
        y_test.shuffle(&mut rng);
    }

    let standardizer = Standardizer::fit(train_raw.view());
    let x_train = standardizer.apply(train_raw.view());
    let x_test = standardizer.apply(test_raw.view());

    let all = train_logistic(x_train.view(), &y_train, &setup.logistic)?;
    let accuracy_all = all.accuracy(x_test.view(), &y_test);

    let mut best: Option<(usize, f64, LogisticModel)> = None;
    for d in 0..table.dim() {
        let col = x_train.slice(ndarray::s![.., d..d + 1]);
        let model = train_logistic(col, &y_train, &setup.logistic)?;
        let acc = model.accuracy(col, &y_train);
        if best.as_ref().is_none_or(|(_, b, _)| acc > *b) {
            best = Some((d, acc, model));
        }
    }
    let (chosen_dimension, _, single) = best.expect("dim > 0");
    let accuracy_single = single.accuracy(x_test.slice(ndarray::s![.., chosen_dimension..chosen_dimension + 1]), &y_test);

    Ok(ProbeReport {
        source_tag: table.source_tag().to_string(),
        property,
        accuracy_all,
        accuracy_single,
        chosen_dimension,
        coverage,
        majority_baseline: majority_of(&y_test),
        n_train: train_ids.len(),
        n_test: test_ids.len(),
        standardized: true,
        shuffled_labels: setup.shuffle_labels.is_some(),
    })
}

pub const DEFAULT_RIDGE_EPS: f64 = 1e-8;

/// Fits and scores on the same range.
pub fn probe_regression(
    table: &EmbeddingTable,
    target: Property,
    range: RangeInclusive<u64>,
    ridge_eps: f64,
) -> Result<RegressionReport> {
    if target.kind() != PropertyKind::Regression {
        return Err(Error::invalid(format!("{target} is not a regression target")));
    }
    let sieve = PrimeSieve::new(2);
    let span = range.clone().count();
    let (ids, x) = resolve(table, range);
    if ids.is_empty() {
        return Err(Error::invalid(format!("table {} resolves no integers in range", table.source_tag())));
    }
    let y = ids.iter().map(|&n| real_target(n, target, &sieve)).collect::<Result<Vec<_>>>()?;

    let all = fit_linear(x.view(), &y, ridge_eps)?;
    let r2_all = r_squared(&y, &all.predict(x.view()))?;
    let mut best = (0usize, f64::NEG_INFINITY);
    for d in 0..table.dim() {
        let col = x.slice(ndarray::s![.., d..d + 1]);
        let r2 = r_squared(&y, &fit_linear(col, &y, ridge_eps)?.predict(col))?;
        if r2 > best.1 {
            best = (d, r2);
        }
    }
    Ok(RegressionReport {
        source_tag: table.source_tag().to_string(),
        target,
        r2_all,
        r2_single: best.1,
        chosen_dimension: best.0,
        coverage: ids.len() as f64 / span as f64,
        n: ids.len(),
    })
}
