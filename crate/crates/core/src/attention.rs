//! Dense score matrices, row-wise softmax and the four-block partition of a
//! joint language+vision self-attention score matrix.
//!
//! Language tokens occupy the leading indices of the joint sequence, so the
//! language/language block sits top-left:
//!
//! ```text
//!     | S_LL  S_LV |
//! S = |            |
//!     | S_VL  S_VV |
//! ```

use serde::{Deserialize, Serialize};

use crate::error::{dim_err, Error, Result};

/// Dense row-major matrix of `f64` scores or probabilities.
///
/// Construction validates `data.len() == rows * cols` and that every entry
/// is finite; the same checks run on deserialization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawMatrix")]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

#[derive(Deserialize)]
struct RawMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl TryFrom<RawMatrix> for Matrix {
    type Error = Error;

    fn try_from(raw: RawMatrix) -> Result<Self> {
        Matrix::new(raw.rows, raw.cols, raw.data)
    }
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(dim_err(format!(
                "matrix data has {} entries, expected {rows}x{cols}={}",
                data.len(),
                rows * cols
            )));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::Domain(format!(
                "matrix entry ({}, {}) is not finite",
                pos / cols.max(1),
                pos % cols.max(1)
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    /// Builds a matrix from equal-length rows.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let n_rows = rows.len();
        let n_cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(n_rows * n_cols);
        for (i, row) in rows.iter().enumerate() {
            let row = row.as_ref();
            if row.len() != n_cols {
                return Err(dim_err(format!(
                    "row {i} has {} columns, expected {n_cols}",
                    row.len()
                )));
            }
            data.extend_from_slice(row);
        }
        Self::new(n_rows, n_cols, data)
    }

    /// Builds a matrix entrywise from `f(i, j)`.
    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Self { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub(crate) fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
    }

    #[inline]
    pub(crate) fn add_at(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] += v;
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub(crate) fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn transpose(&self) -> Matrix {
        Matrix::from_fn(self.cols, self.rows, |i, j| self.get(j, i))
    }

    pub fn matmul(&self, other: &Matrix) -> Result<Matrix> {
        matmul(self, other)
    }

    /// Elementwise scaling.
    pub fn scale(&self, k: f64) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|v| v * k).collect(),
        }
    }

    /// Elementwise sum; shapes must agree.
    pub fn add(&self, other: &Matrix) -> Result<Matrix> {
        if self.shape() != other.shape() {
            return Err(dim_err(format!(
                "cannot add {:?} and {:?}",
                self.shape(),
                other.shape()
            )));
        }
        Ok(Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().zip(&other.data).map(|(a, b)| a + b).collect(),
        })
    }

    pub(crate) fn add_assign(&mut self, other: &Matrix) {
        debug_assert_eq!(self.shape(), other.shape());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    /// Copies the `rows x cols` submatrix starting at `(r0, c0)`.
    pub fn submatrix(&self, r0: usize, c0: usize, rows: usize, cols: usize) -> Result<Matrix> {
        if r0 + rows > self.rows || c0 + cols > self.cols {
            return Err(dim_err(format!(
                "submatrix ({r0}..{}, {c0}..{}) exceeds {}x{}",
                r0 + rows,
                c0 + cols,
                self.rows,
                self.cols
            )));
        }
        Ok(Matrix::from_fn(rows, cols, |i, j| self.get(r0 + i, c0 + j)))
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0_f64, |m, v| m.max(v.abs()))
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Matrix product `a * b`.
pub fn matmul(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols != b.rows {
        return Err(dim_err(format!(
            "matmul inner dimensions differ: {}x{} * {}x{}",
            a.rows, a.cols, b.rows, b.cols
        )));
    }
    let mut out = Matrix::zeros(a.rows, b.cols);
    for i in 0..a.rows {
        let a_row = a.row(i);
        let out_row = &mut out.data[i * b.cols..(i + 1) * b.cols];
        for (k, &a_ik) in a_row.iter().enumerate() {
            if a_ik == 0.0 {
                continue;
            }
            for (o, &b_kj) in out_row.iter_mut().zip(b.row(k)) {
                *o += a_ik * b_kj;
            }
        }
    }
    if !out.is_finite() {
        return Err(Error::Domain("matmul overflowed to a non-finite value".into()));
    }
    Ok(out)
}

/// Softmax applied independently to every row, with max-subtraction.
pub fn row_softmax(m: &Matrix) -> Result<Matrix> {
    if m.rows == 0 || m.cols == 0 {
        return Err(dim_err(format!(
            "row_softmax needs a non-empty matrix, got {}x{}",
            m.rows, m.cols
        )));
    }
    let mut out = m.clone();
    for i in 0..m.rows {
        softmax_in_place(out.row_mut(i));
    }
    Ok(out)
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

/// Backward pass of a row-wise softmax: given the softmax output `probs` and
/// the upstream gradient `grad` (same shape), returns the gradient with
/// respect to the pre-softmax scores.
///
/// Uses the pairwise form `p_i * sum_k p_k (g_i - g_k)` rather than
/// `p_i * (g_i - <p, g>)`: on saturated rows the latter cancels two nearly
/// equal large numbers and leaves rounding noise where the true gradient is
/// vanishingly small.
pub(crate) fn row_softmax_backward(probs: &Matrix, grad: &Matrix) -> Matrix {
    let mut out = Matrix::zeros(probs.rows, probs.cols);
    for i in 0..probs.rows {
        let p = probs.row(i);
        let g = grad.row(i);
        for (o, (&pi, &gi)) in out.row_mut(i).iter_mut().zip(p.iter().zip(g)) {
            let acc: f64 = p.iter().zip(g).map(|(&pk, &gk)| pk * (gi - gk)).sum();
            *o = pi * acc;
        }
    }
    out
}

/// A joint self-attention score matrix with the modality lengths that
/// partition it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawBundle")]
pub struct AttentionBundle {
    n_lang: usize,
    n_vis: usize,
    scores: Matrix,
}

#[derive(Deserialize)]
struct RawBundle {
    n_lang: usize,
    n_vis: usize,
    scores: Matrix,
}

impl TryFrom<RawBundle> for AttentionBundle {
    type Error = Error;

    fn try_from(raw: RawBundle) -> Result<Self> {
        AttentionBundle::new(raw.n_lang, raw.n_vis, raw.scores)
    }
}

impl AttentionBundle {
    pub fn new(n_lang: usize, n_vis: usize, scores: Matrix) -> Result<Self> {
        if n_lang == 0 || n_vis == 0 {
            return Err(dim_err(format!(
                "bundle needs n_lang >= 1 and n_vis >= 1, got {n_lang} and {n_vis}"
            )));
        }
        let side = n_lang + n_vis;
        if scores.shape() != (side, side) {
            return Err(dim_err(format!(
                "scores must be {side}x{side} for n_lang={n_lang}, n_vis={n_vis}, got {}x{}",
                scores.rows, scores.cols
            )));
        }
        Ok(Self {
            n_lang,
            n_vis,
            scores,
        })
    }

    pub fn n_lang(&self) -> usize {
        self.n_lang
    }

    pub fn n_vis(&self) -> usize {
        self.n_vis
    }

    pub fn scores(&self) -> &Matrix {
        &self.scores
    }

    pub fn partition(&self) -> BlockPartition {
        partition(self)
    }
}

/// The four modality blocks of a joint score matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockPartition {
    pub s_ll: Matrix,
    pub s_lv: Matrix,
    pub s_vl: Matrix,
    pub s_vv: Matrix,
}

impl BlockPartition {
    /// Validates that the four blocks agree on a single `(n_lang, n_vis)`.
    pub fn new(s_ll: Matrix, s_lv: Matrix, s_vl: Matrix, s_vv: Matrix) -> Result<Self> {
        let n_lang = s_ll.rows;
        let n_vis = s_vv.rows;
        let expected = [
            ("s_ll", s_ll.shape(), (n_lang, n_lang)),
            ("s_lv", s_lv.shape(), (n_lang, n_vis)),
            ("s_vl", s_vl.shape(), (n_vis, n_lang)),
            ("s_vv", s_vv.shape(), (n_vis, n_vis)),
        ];
        for (name, got, want) in expected {
            if got != want {
                return Err(dim_err(format!(
                    "{name} is {}x{}, expected {}x{} for n_lang={n_lang}, n_vis={n_vis}",
                    got.0, got.1, want.0, want.1
                )));
            }
        }
        if n_lang == 0 || n_vis == 0 {
            return Err(dim_err("partition blocks must be non-empty"));
        }
        Ok(Self {
            s_ll,
            s_lv,
            s_vl,
            s_vv,
        })
    }

    pub fn n_lang(&self) -> usize {
        self.s_ll.rows
    }

    pub fn n_vis(&self) -> usize {
        self.s_vv.rows
    }

    /// Reassembles the joint score matrix.
    pub fn reassemble(&self) -> AttentionBundle {
        let (l, v) = (self.n_lang(), self.n_vis());
        let scores = Matrix::from_fn(l + v, l + v, |i, j| match (i < l, j < l) {
            (true, true) => self.s_ll.get(i, j),
            (true, false) => self.s_lv.get(i, j - l),
            (false, true) => self.s_vl.get(i - l, j),
            (false, false) => self.s_vv.get(i - l, j - l),
        });
        AttentionBundle {
            n_lang: l,
            n_vis: v,
            scores,
        }
    }
}

/// Splits a bundle's scores into `S_LL`, `S_LV`, `S_VL` and `S_VV`.
pub fn partition(bundle: &AttentionBundle) -> BlockPartition {
    let (l, v) = (bundle.n_lang, bundle.n_vis);
    let s = &bundle.scores;
    let block = |r0, c0, rows, cols| Matrix::from_fn(rows, cols, |i, j| s.get(r0 + i, c0 + j));
    BlockPartition {
        s_ll: block(0, 0, l, l),
        s_lv: block(0, l, l, v),
        s_vl: block(l, 0, v, l),
        s_vv: block(l, l, v, v),
    }
}

/// Index of the largest entry; ties resolve to the lowest index.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (k, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = k;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m(rows: &[&[f64]]) -> Matrix {
        Matrix::from_rows(rows).unwrap()
    }

    #[test]
    fn partition_indexes_blocks_in_language_first_layout() {
        let scores = Matrix::from_fn(5, 5, |i, j| (10 * i + j) as f64);
        let p = partition(&AttentionBundle::new(2, 3, scores).unwrap());
        assert_eq!(p.s_ll, m(&[&[0., 1.], &[10., 11.]]));
        assert_eq!(p.s_lv, m(&[&[2., 3., 4.], &[12., 13., 14.]]));
        assert_eq!(p.s_vl, m(&[&[20., 21.], &[30., 31.], &[40., 41.]]));
        assert_eq!(
            p.s_vv,
            m(&[&[22., 23., 24.], &[32., 33., 34.], &[42., 43., 44.]])
        );
    }

    #[test]
    fn partition_two_by_two() {
        let (a, b, c, d) = (1.5, -2.0, 0.25, 7.0);
        let p = partition(&AttentionBundle::new(1, 1, m(&[&[a, b], &[c, d]])).unwrap());
        assert_eq!(p.s_ll.data(), &[a]);
        assert_eq!(p.s_lv.data(), &[b]);
        assert_eq!(p.s_vl.data(), &[c]);
        assert_eq!(p.s_vv.data(), &[d]);
    }

    #[test]
    fn bundle_rejects_bad_shapes() {
        assert!(matches!(
            AttentionBundle::new(2, 2, Matrix::zeros(3, 3)),
            Err(Error::Dimension(_))
        ));
        assert!(matches!(
            AttentionBundle::new(0, 3, Matrix::zeros(3, 3)),
            Err(Error::Dimension(_))
        ));
        assert!(AttentionBundle::new(1, 2, Matrix::zeros(3, 3)).is_ok());
    }

    #[test]
    fn partition_new_rejects_inconsistent_blocks() {
        let r = BlockPartition::new(
            Matrix::zeros(2, 2),
            Matrix::zeros(2, 3),
            Matrix::zeros(2, 2),
            Matrix::zeros(3, 3),
        );
        assert!(matches!(r, Err(Error::Dimension(_))));
    }

    #[test]
    fn matrix_rejects_wrong_length_and_non_finite() {
        assert!(matches!(
            Matrix::new(2, 2, vec![1.0; 3]),
            Err(Error::Dimension(_))
        ));
        assert!(matches!(
            Matrix::new(1, 2, vec![1.0, f64::NAN]),
            Err(Error::Domain(_))
        ));
    }

    #[test]
    fn json_schema_round_trip_and_validation() {
        let json = r#"{"n_lang":1,"n_vis":1,"scores":{"rows":2,"cols":2,"data":[1,2,3,4]}}"#;
        let b: AttentionBundle = serde_json::from_str(json).unwrap();
        assert_eq!(b.scores().get(1, 0), 3.0);
        let back = serde_json::to_string(&b).unwrap();
        assert_eq!(
            back,
            r#"{"n_lang":1,"n_vis":1,"scores":{"rows":2,"cols":2,"data":[1.0,2.0,3.0,4.0]}}"#
        );
        let bad = r#"{"rows":2,"cols":2,"data":[1,2,3]}"#;
        assert!(serde_json::from_str::<Matrix>(bad).is_err());
        let bad_bundle = r#"{"n_lang":2,"n_vis":1,"scores":{"rows":2,"cols":2,"data":[1,2,3,4]}}"#;
        assert!(serde_json::from_str::<AttentionBundle>(bad_bundle).is_err());
    }

    #[test]
    fn softmax_examples() {
        let s = row_softmax(&m(&[&[0., 0.]])).unwrap();
        assert_eq!(s.data(), &[0.5, 0.5]);

        let s = row_softmax(&m(&[&[1000., 1000., 1000.]])).unwrap();
        for v in s.data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }

        let s = row_softmax(&m(&[&[0., 3f64.ln()]])).unwrap();
        assert!((s.get(0, 0) - 0.25).abs() < 1e-15);
        assert!((s.get(0, 1) - 0.75).abs() < 1e-15);
    }

    #[test]
    fn softmax_rejects_empty() {
        assert!(matches!(
            row_softmax(&Matrix::zeros(0, 3)),
            Err(Error::Dimension(_))
        ));
        assert!(matches!(
            row_softmax(&Matrix::zeros(2, 0)),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn matmul_examples() {
        let a = m(&[&[1., 2.], &[3., 4.]]);
        let swap = m(&[&[0., 1.], &[1., 0.]]);
        assert_eq!(matmul(&a, &swap).unwrap(), m(&[&[2., 1.], &[4., 3.]]));
        assert_eq!(matmul(&Matrix::identity(2), &a).unwrap(), a);
        assert!(matches!(
            matmul(&a, &Matrix::zeros(3, 1)),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn argmax_breaks_ties_low() {
        assert_eq!(argmax(&[0.3, 0.3, 0.1]), 0);
        assert_eq!(argmax(&[0.1, 0.9, 0.9]), 1);
        assert_eq!(argmax(&[1.0]), 0);
    }
}
