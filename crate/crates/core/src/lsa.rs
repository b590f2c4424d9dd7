//! Latent semantic analysis: a sequence × integer-type count matrix reduced
//! with randomized truncated SVD.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::corpus::SequenceRecord;
use crate::embed::EmbeddingTable;
use crate::error::{Error, Result};
use crate::vocab::Vocabulary;

pub const LSA_TAG: &str = "OEIS-LSA";

/// Compressed sparse rows of non-negative integer counts.
#[derive(Clone, Debug, PartialEq)]
pub struct SparseCountMatrix {
    rows: usize,
    cols: usize,
    indptr: Vec<usize>,
    indices: Vec<u32>,
    counts: Vec<u32>,
}

impl SparseCountMatrix {
    /// Builds from `(row, col, count)` triplets. Duplicate coordinates are summed;
    /// zero counts are dropped.
    pub fn from_triplets(rows: usize, cols: usize, triplets: &[(usize, usize, u32)]) -> Result<Self> {
        let mut sorted: Vec<(usize, usize, u32)> = triplets.to_vec();
        sorted.sort_unstable_by_key(|&(r, c, _)| (r, c));
        let mut indptr = vec![0usize; rows + 1];
        let mut indices = Vec::with_capacity(sorted.len());
        let mut counts: Vec<u32> = Vec::with_capacity(sorted.len());
        let mut last: Option<(usize, usize)> = None;
        for (r, c, v) in sorted {
            if r >= rows || c >= cols {
                return Err(Error::invalid(format!("entry ({r}, {c}) outside {rows}×{cols}")));
            }
            if v == 0 {
                continue;
            }
            if last == Some((r, c)) {
                *counts.last_mut().unwrap() += v;
                continue;
            }
            indices.push(c as u32);
            counts.push(v);
            indptr[r + 1] += 1;
            last = Some((r, c));
        }
        for r in 0..rows {
            indptr[r + 1] += indptr[r];
        }
        Ok(SparseCountMatrix {
            rows,
            cols,
            indptr,
            indices,
            counts,
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn nnz(&self) -> usize {
        self.counts.len()
    }

    /// Sum of all counts.
    pub fn total(&self) -> u64 {
        self.counts.iter().map(|&c| u64::from(c)).sum()
    }

    /// `(col, count)` pairs of one row, columns ascending.
    pub fn row(&self, r: usize) -> impl Iterator<Item = (usize, u32)> + '_ {
        let span = self.indptr[r]..self.indptr[r + 1];
        self.indices[span.clone()]
            .iter()
            .zip(&self.counts[span])
            .map(|(&c, &v)| (c as usize, v))
    }

    pub fn triplets(&self) -> impl Iterator<Item = (usize, usize, u32)> + '_ {
        (0..self.rows).flat_map(move |r| self.row(r).map(move |(c, v)| (r, c, v)))
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let mut m = DMatrix::zeros(self.rows, self.cols);
        for (r, c, v) in self.triplets() {
            m[(r, c)] = f64::from(v);
        }
        m
    }
}

/// A matrix that can be multiplied with dense blocks from either side.
pub trait LinearOperator {
    fn nrows(&self) -> usize;
    fn ncols(&self) -> usize;
    /// `A · x`
    fn apply(&self, x: &DMatrix<f64>) -> DMatrix<f64>;
    /// `Aᵀ · x`
    fn apply_transpose(&self, x: &DMatrix<f64>) -> DMatrix<f64>;
}

impl LinearOperator for DMatrix<f64> {
    fn nrows(&self) -> usize {
        self.nrows()
    }

    fn ncols(&self) -> usize {
        self.ncols()
    }

    fn apply(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        self * x
    }

    fn apply_transpose(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        self.tr_mul(x)
    }
}

fn to_row_major(m: &DMatrix<f64>) -> Vec<f64> {
    m.transpose().as_slice().to_vec()
}

fn from_row_major(rows: usize, cols: usize, data: Vec<f64>) -> DMatrix<f64> {
    DMatrix::from_row_slice(rows, cols, &data)
}

impl LinearOperator for SparseCountMatrix {
    fn nrows(&self) -> usize {
        self.rows
    }

    fn ncols(&self) -> usize {
        self.cols
    }

    fn apply(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        assert_eq!(x.nrows(), self.cols);
        let width = x.ncols();
        let xr = to_row_major(x);
        let mut out = vec![0f64; self.rows * width];
        for r in 0..self.rows {
            let dst = &mut out[r * width..(r + 1) * width];
            for (c, v) in self.row(r) {
                let v = f64::from(v);
                let src = &xr[c * width..(c + 1) * width];
                dst.iter_mut().zip(src).for_each(|(d, s)| *d += v * s);
            }
        }
        from_row_major(self.rows, width, out)
    }

    fn apply_transpose(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        assert_eq!(x.nrows(), self.rows);
        let width = x.ncols();
        let xr = to_row_major(x);
        let mut out = vec![0f64; self.cols * width];
        for r in 0..self.rows {
            let src = &xr[r * width..(r + 1) * width];
            for (c, v) in self.row(r) {
                let v = f64::from(v);
                let dst = &mut out[c * width..(c + 1) * width];
                dst.iter_mut().zip(src).for_each(|(d, s)| *d += v * s);
            }
        }
        from_row_major(self.cols, width, out)
    }
}

/// Counts of each vocabulary id in each sequence. Out-of-vocabulary terms
/// are counted in the UNK column.
pub fn build_count_matrix(train: &[SequenceRecord], vocab: &Vocabulary) -> SparseCountMatrix {
    let mut triplets = Vec::new();
    let mut row_counts: Vec<(u32, u32)> = Vec::new();
    for (r, record) in train.iter().enumerate() {
        let mut ids = vocab.encode(record);
        ids.sort_unstable();
        row_counts.clear();
        for id in ids {
            match row_counts.last_mut() {
                Some((last, n)) if *last == id => *n += 1,
                _ => row_counts.push((id, 1)),
            }
        }
        triplets.extend(row_counts.iter().map(|&(c, n)| (r, c as usize, n)));
    }
    SparseCountMatrix::from_triplets(train.len(), vocab.len(), &triplets)
        .expect("ids are within the vocabulary")
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct SvdConfig {
    pub oversample: usize,
    pub power_iters: usize,
    pub seed: u64,
}

impl Default for SvdConfig {
    fn default() -> Self {
        SvdConfig {
            oversample: 10,
            power_iters: 4,
            seed: 0,
        }
    }
}

/// Top-k singular triplets: `A ≈ U · diag(S) · Vᵀ`.
#[derive(Clone, Debug)]
pub struct SvdFactors {
    /// rows × k
    pub u: DMatrix<f64>,
    /// k values, non-increasing
    pub singular_values: DVector<f64>,
    /// cols × k
    pub v: DMatrix<f64>,
    /// Number of singular values above the numerical-zero threshold. Values
    /// beyond this index are retained but carry no signal.
    pub numerical_rank: usize,
}

impl SvdFactors {
    pub fn rank(&self) -> usize {
        self.singular_values.len()
    }

    pub fn reconstruct(&self) -> DMatrix<f64> {
        &self.u * DMatrix::from_diagonal(&self.singular_values) * self.v.transpose()
    }
}

fn orthonormalize(m: DMatrix<f64>) -> DMatrix<f64> {
    m.qr().q()
}

/// Randomized subspace iteration: a Gaussian test block of width
/// `k + oversample`, `power_iters` rounds of `A Aᵀ` with re-orthonormalization,
/// then an exact SVD of the projected matrix. Deterministic given `config.seed`.
pub fn truncated_svd<A: LinearOperator>(a: &A, k: usize, config: &SvdConfig) -> Result<SvdFactors> {
    let (m, n) = (a.nrows(), a.ncols());
    if k == 0 || k > m.min(n) {
        return Err(Error::invalid(format!(
            "k = {k} must be in 1..={} for a {m}×{n} matrix",
            m.min(n)
        )));
    }
    let width = (k + config.oversample).min(m.min(n));
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let omega = DMatrix::from_fn(n, width, |_, _| StandardNormal.sample(&mut rng));

    let mut q = orthonormalize(a.apply(&omega));
    for _ in 0..config.power_iters {
        let z = orthonormalize(a.apply_transpose(&q));
        q = orthonormalize(a.apply(&z));
    }
    // B = Qᵀ A = Cᵀ with C = Aᵀ Q (n × width); SVD of the tall C.
    let c = a.apply_transpose(&q);
    let svd = c.svd(true, true);
    let c_u = svd.u.expect("requested U");
    let c_vt = svd.v_t.expect("requested Vᵀ");
    let sigma = svd.singular_values;

    let mut order: Vec<usize> = (0..sigma.len()).collect();
    order.sort_by(|&i, &j| sigma[j].total_cmp(&sigma[i]));
    order.truncate(k);

    let small_u = c_vt.transpose(); // width × width, left vectors of B
    let mut u = DMatrix::zeros(m, k);
    let mut v = DMatrix::zeros(n, k);
    let mut s = DVector::zeros(k);
    for (dst, &src) in order.iter().enumerate() {
        let mut v_col = c_u.column(src).into_owned();
        let mut u_col = &q * small_u.column(src);
        let pivot = v_col.iter().copied().fold(0f64, |best, x| if x.abs() > best.abs() { x } else { best });
        if pivot < 0.0 {
            v_col.neg_mut();
            u_col.neg_mut();
        }
        v.set_column(dst, &v_col);
        u.set_column(dst, &u_col);
        s[dst] = sigma[src];
    }
    let tol = s.get(0).copied().unwrap_or(0.0) * (m.max(n) as f64) * f64::EPSILON;
    let numerical_rank = s.iter().take_while(|&&x| x > tol).count();
    if numerical_rank < k {
        log::warn!("requested rank {k} exceeds numerical rank {numerical_rank}; trailing singular values are ~0");
    }
    Ok(SvdFactors {
        u,
        singular_values: s,
        v,
        numerical_rank,
    })
}

/// LSA vectors for every retained integer type: the rows of `V · diag(S)`.
pub fn lsa_embeddings(
    train: &[SequenceRecord],
    vocab: &Vocabulary,
    k: usize,
    config: &SvdConfig,
) -> Result<EmbeddingTable> {
    let counts = build_count_matrix(train, vocab);
    let factors = truncated_svd(&counts, k, config)?;
    Ok(term_vectors(&factors, vocab))
}

/// Term vectors `V · diag(S)` keyed by the vocabulary's integer tokens.
pub fn term_vectors(factors: &SvdFactors, vocab: &Vocabulary) -> EmbeddingTable {
    let k = factors.rank();
    let mut tokens = Vec::with_capacity(vocab.len());
    let mut matrix = Vec::with_capacity(vocab.len() * k);
    for (id, token) in vocab.integer_tokens() {
        tokens.push(token.clone());
        let row = factors.v.row(id as usize);
        matrix.extend(
            row.iter()
                .zip(factors.singular_values.iter())
                .map(|(x, s)| (x * s) as f32),
        );
    }
    EmbeddingTable::new(LSA_TAG, k, tokens, matrix).expect("finite SVD factors")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::vocab::build_vocab;

    fn rec(id: u32, terms: &[&str]) -> SequenceRecord {
        SequenceRecord::new(&format!("A{id:06}"), terms).unwrap()
    }

    #[test]
    fn count_matrix_rows() {
        let train = vec![rec(1, &["1", "1", "2"]), rec(2, &["1", "1", "2"])];
        let vocab = build_vocab(&train, 1).unwrap();
        let m = build_count_matrix(&train, &vocab);
        let (c1, c2) = (vocab.id("1").unwrap() as usize, vocab.id("2").unwrap() as usize);
        let row0: Vec<_> = m.row(0).collect();
        assert_eq!(row0, vec![(c1, 2), (c2, 1)]);
        assert_eq!(m.row(1).collect::<Vec<_>>(), row0);
        assert_eq!(m.total(), 6);
        assert_eq!(m.cols(), vocab.len());
    }

    #[test]
    fn unk_column_collects_rare_terms() {
        let train = vec![rec(1, &["1", "1", "9"]), rec(2, &["1", "8"])];
        let vocab = build_vocab(&train, 2).unwrap();
        let m = build_count_matrix(&train, &vocab);
        assert_eq!(m.row(0).find(|&(c, _)| c == 0), Some((0, 1)));
        assert_eq!(m.total(), 5);
    }

    #[test]
    fn triplets_merge_duplicates() {
        let m = SparseCountMatrix::from_triplets(2, 2, &[(0, 1, 2), (0, 1, 3), (1, 0, 0)]).unwrap();
        assert_eq!(m.triplets().collect::<Vec<_>>(), vec![(0, 1, 5)]);
        assert!(SparseCountMatrix::from_triplets(1, 1, &[(0, 1, 1)]).is_err());
    }

    #[test]
    fn sparse_products_match_dense() {
        let m = SparseCountMatrix::from_triplets(3, 4, &[(0, 0, 1), (0, 3, 2), (1, 1, 4), (2, 2, 3), (2, 0, 1)]).unwrap();
        let d = m.to_dense();
        let x = DMatrix::from_fn(4, 2, |i, j| (i as f64) - 0.5 * j as f64);
        let y = DMatrix::from_fn(3, 2, |i, j| (i * j) as f64 + 1.0);
        assert!((m.apply(&x) - &d * &x).norm() < 1e-12);
        assert!((m.apply_transpose(&y) - d.tr_mul(&y)).norm() < 1e-12);
    }

    #[test]
    fn rank_one() {
        let m = SparseCountMatrix::from_triplets(2, 2, &[(0, 0, 1), (0, 1, 2), (1, 0, 2), (1, 1, 4)]).unwrap();
        let f = truncated_svd(&m, 1, &SvdConfig::default()).unwrap();
        assert!((f.singular_values[0] - 5.0).abs() < 1e-10);
    }

    #[test]
    fn diagonal() {
        let m = SparseCountMatrix::from_triplets(3, 3, &[(0, 0, 3), (1, 1, 2), (2, 2, 1)]).unwrap();
        let f = truncated_svd(&m, 2, &SvdConfig::default()).unwrap();
        assert!((f.singular_values[0] - 3.0).abs() < 1e-10);
        assert!((f.singular_values[1] - 2.0).abs() < 1e-10);
        assert_eq!(f.numerical_rank, 2);
    }

    #[test]
    fn rank_deficiency_is_flagged() {
        let m = SparseCountMatrix::from_triplets(3, 3, &[(0, 0, 1), (1, 0, 1), (2, 0, 1)]).unwrap();
        let f = truncated_svd(&m, 2, &SvdConfig::default()).unwrap();
        assert_eq!(f.rank(), 2);
        assert_eq!(f.numerical_rank, 1);
        assert!(f.singular_values[1].abs() < 1e-12);
    }

    #[test]
    fn k_out_of_range() {
        let m = SparseCountMatrix::from_triplets(2, 3, &[(0, 0, 1)]).unwrap();
        assert!(truncated_svd(&m, 0, &SvdConfig::default()).is_err());
        assert!(truncated_svd(&m, 3, &SvdConfig::default()).is_err());
    }

    #[test]
    fn identical_columns_give_identical_vectors() {
        // "3" and "4" always co-occur with the same multiplicity
        let train = vec![
            rec(1, &["1", "3", "4", "2"]),
            rec(2, &["3", "4", "3", "4", "5"]),
            rec(3, &["1", "2", "5", "5"]),
        ];
        let vocab = build_vocab(&train, 1).unwrap();
        let table = lsa_embeddings(&train, &vocab, 3, &SvdConfig::default()).unwrap();
        let (a, b) = (table.lookup("3").unwrap(), table.lookup("4").unwrap());
        for (x, y) in a.iter().zip(b.iter()) {
            assert!((x - y).abs() < 1e-5, "{a:?} vs {b:?}");
        }
        assert_eq!(table.source_tag(), LSA_TAG);
        assert!(!table.contains(crate::vocab::UNK));
    }
}
