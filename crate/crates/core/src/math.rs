//! Numerically stable scalar and matrix primitives.
//!
//! All probability arithmetic happens in `f64`, whatever precision the
//! activations were stored in.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Lower clamp applied to `q` inside [`kl_divergence`] unless overridden.
pub const DEFAULT_KL_FLOOR: f64 = 1e-10;

/// Lower clamp on the predicted probability inside [`cross_entropy`].
pub const CROSS_ENTROPY_FLOOR: f64 = 1e-12;

const SIMPLEX_TOLERANCE: f64 = 1e-9;

/// A point on the probability simplex over class labels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ProbabilityDistribution(Vec<f64>);

impl ProbabilityDistribution {
    /// Validates nonnegativity and unit mass (within 1e-9).
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.is_empty() {
            return Err(Error::invalid("probability distribution has no classes"));
        }
        if let Some(bad) = probs.iter().find(|p| !p.is_finite() || **p < 0.0) {
            return Err(Error::invalid(format!(
                "probability entry {bad} is not a finite nonnegative value"
            )));
        }
        let total: f64 = probs.iter().sum();
        if (total - 1.0).abs() > SIMPLEX_TOLERANCE {
            return Err(Error::invalid(format!("probabilities sum to {total}, expected 1")));
        }
        Ok(Self(probs))
    }

    /// Uniform mass over `num_classes` classes.
    pub fn uniform(num_classes: usize) -> Self {
        Self(vec![1.0 / num_classes as f64; num_classes])
    }

    pub(crate) fn from_raw(probs: Vec<f64>) -> Self {
        debug_assert!(!probs.is_empty());
        Self(probs)
    }

    pub fn num_classes(&self) -> usize {
        self.0.len()
    }

    pub fn probs(&self) -> &[f64] {
        &self.0
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }

    /// Most probable class, lowest index on ties.
    pub fn argmax(&self) -> usize {
        argmax_unchecked(&self.0)
    }
}

impl AsRef<[f64]> for ProbabilityDistribution {
    fn as_ref(&self) -> &[f64] {
        &self.0
    }
}

/// Row-major dense `f64` matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl DenseMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows.checked_mul(cols) != Some(data.len()) {
            return Err(Error::invalid(format!(
                "matrix data has {} values, expected {rows} x {cols}",
                data.len()
            )));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::invalid(format!(
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

    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, row) in rows.iter().enumerate() {
            let row = row.as_ref();
            if row.len() != cols {
                return Err(Error::invalid(format!(
                    "row {i} has {} columns, expected {cols}",
                    row.len()
                )));
            }
            data.extend_from_slice(row);
        }
        Self::new(rows.len(), cols, data)
    }

    pub(crate) fn from_raw(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        debug_assert_eq!(rows * cols, data.len());
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

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub(crate) fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_iter(&self) -> impl ExactSizeIterator<Item = &[f64]> + '_ {
        (0..self.rows).map(move |i| self.row(i))
    }

    /// Copies the given rows, in order, into a new matrix.
    pub fn select_rows(&self, indices: &[usize]) -> DenseMatrix {
        let mut data = Vec::with_capacity(indices.len() * self.cols);
        for &i in indices {
            data.extend_from_slice(self.row(i));
        }
        Self::from_raw(indices.len(), self.cols, data)
    }

    /// `self · otherᵀ`, i.e. all pairwise row dot products.
    pub fn matmul_transposed(&self, other: &DenseMatrix) -> DenseMatrix {
        assert_eq!(self.cols, other.cols, "inner dimensions differ");
        let mut out = DenseMatrix::zeros(self.rows, other.rows);
        gemm(
            1.0,
            MatRef::row_major(self),
            MatRef::row_major(other).t(),
            0.0,
            &mut out,
        );
        out
    }

    /// `selfᵀ · other`.
    pub fn transpose_matmul(&self, other: &DenseMatrix) -> DenseMatrix {
        assert_eq!(self.rows, other.rows, "inner dimensions differ");
        let mut out = DenseMatrix::zeros(self.cols, other.cols);
        gemm(
            1.0,
            MatRef::row_major(self).t(),
            MatRef::row_major(other),
            0.0,
            &mut out,
        );
        out
    }

    /// `self · other`.
    pub fn matmul(&self, other: &DenseMatrix) -> DenseMatrix {
        assert_eq!(self.cols, other.rows, "inner dimensions differ");
        let mut out = DenseMatrix::zeros(self.rows, other.cols);
        gemm(1.0, MatRef::row_major(self), MatRef::row_major(other), 0.0, &mut out);
        out
    }

    /// Squared Frobenius norm.
    pub fn norm_sq(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

#[derive(Clone, Copy)]
struct MatRef<'a> {
    data: &'a [f64],
    rows: usize,
    cols: usize,
    row_stride: isize,
    col_stride: isize,
}

impl<'a> MatRef<'a> {
    fn row_major(m: &'a DenseMatrix) -> Self {
        Self {
            data: &m.data,
            rows: m.rows,
            cols: m.cols,
            row_stride: m.cols as isize,
            col_stride: 1,
        }
    }

    fn t(self) -> Self {
        Self {
            data: self.data,
            rows: self.cols,
            cols: self.rows,
            row_stride: self.col_stride,
            col_stride: self.row_stride,
        }
    }
}

/// `c ← alpha·a·b + beta·c`. Single-threaded, so results are reproducible bit for bit.
fn gemm(alpha: f64, a: MatRef<'_>, b: MatRef<'_>, beta: f64, c: &mut DenseMatrix) {
    assert_eq!(a.cols, b.rows);
    assert_eq!((a.rows, b.cols), (c.rows, c.cols));
    if c.data.is_empty() {
        return;
    }
    if a.cols == 0 {
        c.data.iter_mut().for_each(|v| *v *= beta);
        return;
    }
    // SAFETY: the strides and extents above describe regions fully inside each slice.
    unsafe {
        matrixmultiply::dgemm(
            a.rows,
            a.cols,
            b.cols,
            alpha,
            a.data.as_ptr(),
            a.row_stride,
            a.col_stride,
            b.data.as_ptr(),
            b.row_stride,
            b.col_stride,
            beta,
            c.data.as_mut_ptr(),
            c.cols as isize,
            1,
        );
    }
}

/// Softmax shifted by the maximum logit, so any finite input is safe.
pub fn softmax(logits: &[f64]) -> Result<ProbabilityDistribution> {
    if logits.is_empty() {
        return Err(Error::invalid("softmax of an empty logit vector"));
    }
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("softmax input contains a non-finite logit"));
    }
    Ok(ProbabilityDistribution::from_raw(softmax_unchecked(logits)))
}

pub(crate) fn softmax_unchecked(logits: &[f64]) -> Vec<f64> {
    let mut out = logits.to_vec();
    softmax_in_place(&mut out);
    out
}

pub(crate) fn softmax_in_place(values: &mut [f64]) {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in values.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    for v in values.iter_mut() {
        *v /= total;
    }
}

/// `Σ p_i ln(p_i / max(q_i, floor))` in nats.
///
/// Terms with `p_i = 0` contribute exactly zero. `q` is floored but not
/// renormalized.
pub fn kl_divergence(p: &ProbabilityDistribution, q: &ProbabilityDistribution, floor: f64) -> Result<f64> {
    if p.num_classes() != q.num_classes() {
        return Err(Error::invalid(format!(
            "distribution lengths differ: {} vs {}",
            p.num_classes(),
            q.num_classes()
        )));
    }
    if !(floor > 0.0 && floor <= 1e-6) {
        return Err(Error::invalid(format!("kl floor {floor} outside (0, 1e-6]")));
    }
    Ok(kl_unchecked(p.probs(), q.probs(), floor))
}

pub(crate) fn kl_unchecked(p: &[f64], q: &[f64], floor: f64) -> f64 {
    p.iter()
        .zip(q)
        .filter(|(pi, _)| **pi > 0.0)
        .map(|(pi, qi)| pi * (pi / qi.max(floor)).ln())
        .sum()
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax_tiebreak(values: &[f64]) -> Result<usize> {
    if values.is_empty() {
        return Err(Error::invalid("argmax of an empty sequence"));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("argmax input contains a non-finite value"));
    }
    Ok(argmax_unchecked(values))
}

pub(crate) fn argmax_unchecked(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate().skip(1) {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

/// `-ln(max(pred[label], 1e-12))`.
pub fn cross_entropy(pred: &ProbabilityDistribution, label: usize) -> Result<f64> {
    let p = pred
        .probs()
        .get(label)
        .ok_or_else(|| Error::invalid(format!("label {label} out of range for {} classes", pred.num_classes())))?;
    Ok(-p.max(CROSS_ENTROPY_FLOOR).ln())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn dist(v: &[f64]) -> ProbabilityDistribution {
        ProbabilityDistribution::new(v.to_vec()).unwrap()
    }

    #[test]
    fn softmax_examples() {
        assert_eq!(softmax(&[0.0, 0.0]).unwrap().probs(), &[0.5, 0.5]);
        assert_eq!(softmax(&[1000.0, 1000.0]).unwrap().probs(), &[0.5, 0.5]);
        let p = softmax(&[1f64.ln(), 3f64.ln()]).unwrap();
        // direct evaluation: exp(l_i) / Σ exp(l_j)
        let direct = [1.0 / 4.0, 3.0 / 4.0];
        for (a, b) in p.probs().iter().zip(direct) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn softmax_rejects_non_finite() {
        assert!(matches!(softmax(&[0.0, f64::NAN]), Err(Error::InvalidInput(_))));
        assert!(matches!(softmax(&[f64::INFINITY, 0.0]), Err(Error::InvalidInput(_))));
    }

    #[test]
    fn kl_examples() {
        let half = dist(&[0.5, 0.5]);
        assert_eq!(kl_divergence(&half, &half, DEFAULT_KL_FLOOR).unwrap(), 0.0);

        let kl = kl_divergence(&half, &dist(&[0.25, 0.75]), DEFAULT_KL_FLOOR).unwrap();
        let oracle = 0.5 * 2f64.ln() + 0.5 * (2.0f64 / 3.0).ln();
        assert!((kl - oracle).abs() < 1e-12);
        assert!((kl - 0.143841).abs() < 1e-6);

        let kl = kl_divergence(&dist(&[0.0, 1.0]), &half, DEFAULT_KL_FLOOR).unwrap();
        assert!((kl - 2f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn kl_floors_q_without_renormalizing() {
        let kl = kl_divergence(&dist(&[0.5, 0.5]), &dist(&[1.0, 0.0]), 1e-10).unwrap();
        let oracle = 0.5 * 0.5f64.ln() + 0.5 * (0.5f64 / 1e-10).ln();
        assert!((kl - oracle).abs() < 1e-12);
    }

    #[test]
    fn kl_errors() {
        let a = dist(&[0.5, 0.5]);
        let b = dist(&[0.2, 0.3, 0.5]);
        assert!(matches!(kl_divergence(&a, &b, 1e-10), Err(Error::InvalidInput(_))));
        assert!(kl_divergence(&a, &a, 0.0).is_err());
        assert!(kl_divergence(&a, &a, 1e-3).is_err());
    }

    #[test]
    fn argmax_examples() {
        assert_eq!(argmax_tiebreak(&[0.5, 0.5]).unwrap(), 0);
        assert_eq!(argmax_tiebreak(&[0.1, 0.7, 0.2]).unwrap(), 1);
        assert_eq!(argmax_tiebreak(&[3.0, 3.0, 3.0]).unwrap(), 0);
        assert!(argmax_tiebreak(&[]).is_err());
    }

    #[test]
    fn cross_entropy_examples() {
        assert_eq!(cross_entropy(&dist(&[1.0, 0.0]), 0).unwrap(), 0.0);
        assert!((cross_entropy(&dist(&[0.5, 0.5]), 1).unwrap() - 2f64.ln()).abs() < 1e-15);
        assert!((cross_entropy(&dist(&[0.25, 0.75]), 0).unwrap() - 4f64.ln()).abs() < 1e-15);
        assert!(cross_entropy(&dist(&[0.5, 0.5]), 2).is_err());
        assert!((cross_entropy(&dist(&[0.0, 1.0]), 0).unwrap() - 1e-12f64.ln().abs()).abs() < 1e-9);
    }

    #[test]
    fn distribution_validation() {
        assert!(ProbabilityDistribution::new(vec![0.5, 0.6]).is_err());
        assert!(ProbabilityDistribution::new(vec![-0.1, 1.1]).is_err());
        assert!(ProbabilityDistribution::new(vec![]).is_err());
        assert!(ProbabilityDistribution::new(vec![0.3, 0.7 + 5e-10]).is_ok());
    }

    #[test]
    fn matrix_products_match_naive() {
        let a = DenseMatrix::from_rows(&[[1.0, 2.0, 3.0], [4.0, 5.0, 6.0]]).unwrap();
        let b = DenseMatrix::from_rows(&[[1.0, 0.0, -1.0], [2.0, 1.0, 0.5]]).unwrap();
        assert_eq!(a.matmul_transposed(&b).data(), &[-2.0, 5.5, -2.0, 16.0]);
        assert_eq!(
            a.transpose_matmul(&b).data(),
            &[9.0, 4.0, 1.0, 12.0, 5.0, 0.5, 15.0, 6.0, 0.0]
        );
        let c = DenseMatrix::from_rows(&[[1.0], [1.0], [2.0]]).unwrap();
        assert_eq!(a.matmul(&c).data(), &[9.0, 21.0]);
    }

    #[test]
    fn matrix_rejects_bad_shapes() {
        assert!(DenseMatrix::new(2, 2, vec![0.0; 3]).is_err());
        assert!(DenseMatrix::new(1, 2, vec![0.0, f64::NAN]).is_err());
        assert!(DenseMatrix::from_rows(&[vec![1.0, 2.0], vec![1.0]]).is_err());
    }

    fn simplex(len: usize) -> impl Strategy<Value = Vec<f64>> {
        prop::collection::vec(0.0f64..1.0, len).prop_map(|v| {
            let total: f64 = v.iter().sum::<f64>() + 1e-3;
            v.iter().map(|x| (x + 1e-3 / v.len() as f64) / total).collect()
        })
    }

    proptest! {
        #[test]
        fn softmax_is_a_distribution(logits in prop::collection::vec(-1e6f64..1e6, 2..20)) {
            let p = softmax(&logits).unwrap();
            prop_assert!(p.probs().iter().all(|v| *v >= 0.0));
            prop_assert!((p.probs().iter().sum::<f64>() - 1.0).abs() < 1e-9);
            prop_assert!(ProbabilityDistribution::new(p.clone().into_vec()).is_ok());
            prop_assert_eq!(argmax_tiebreak(&logits).unwrap(), p.argmax());
        }

        #[test]
        fn kl_self_is_zero(p in simplex(7)) {
            let p = ProbabilityDistribution::new(p).unwrap();
            prop_assert_eq!(kl_divergence(&p, &p, DEFAULT_KL_FLOOR).unwrap(), 0.0);
        }

        #[test]
        fn kl_is_nonnegative((p, q) in (2usize..12).prop_flat_map(|c| (simplex(c), simplex(c)))) {
            let p = ProbabilityDistribution::new(p).unwrap();
            let q = ProbabilityDistribution::new(q).unwrap();
            prop_assert!(kl_divergence(&p, &q, DEFAULT_KL_FLOOR).unwrap() >= -1e-12);
        }
    }
}
