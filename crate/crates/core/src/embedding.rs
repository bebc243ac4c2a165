//! Embedding-space primitives: unit normalization, pairwise similarity and
//! temperature-scaled row softmax, each paired with its analytic backward.
//!
//! Batches are row-major `N x d` matrices. Everything here is a pure function
//! of its inputs.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Norms below this are treated as zero.
pub const MIN_NORM: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Text,
    Audio,
}

/// A single embedding row.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingVector {
    values: Array1<f64>,
    normalized: bool,
}

impl EmbeddingVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::InvalidDims("embedding vector has zero length".into()));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::ShapeMismatch("embedding vector has non-finite entries".into()));
        }
        Ok(Self { values: Array1::from(values), normalized: false })
    }

    pub fn values(&self) -> ArrayView1<'_, f64> {
        self.values.view()
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn is_normalized(&self) -> bool {
        self.normalized
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.values.to_vec()
    }
}

/// Scales `v` to unit L2 norm.
pub fn l2_normalize(v: &EmbeddingVector) -> Result<EmbeddingVector> {
    let norm = v.values.dot(&v.values).sqrt();
    if norm < MIN_NORM {
        return Err(Error::ZeroNorm(norm));
    }
    Ok(EmbeddingVector { values: &v.values / norm, normalized: true })
}

/// `N x d` batch of embeddings for one modality.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingBatch {
    rows: Array2<f64>,
    modality: Modality,
    normalized: bool,
}

impl EmbeddingBatch {
    pub fn new(rows: Array2<f64>, modality: Modality) -> Result<Self> {
        let (n, d) = rows.dim();
        if n == 0 || d == 0 {
            return Err(Error::InvalidDims(format!("embedding batch must be non-empty, got {n}x{d}")));
        }
        if rows.iter().any(|v| !v.is_finite()) {
            return Err(Error::ShapeMismatch("embedding batch has non-finite entries".into()));
        }
        Ok(Self { rows, modality, normalized: false })
    }

    pub fn from_vectors(vectors: &[EmbeddingVector], modality: Modality) -> Result<Self> {
        let first = vectors.first().ok_or_else(|| Error::InvalidDims("empty batch".into()))?;
        let d = first.dim();
        let mut rows = Array2::zeros((vectors.len(), d));
        for (i, v) in vectors.iter().enumerate() {
            if v.dim() != d {
                return Err(Error::DimensionMismatch { expected: d, found: v.dim() });
            }
            rows.row_mut(i).assign(&v.values);
        }
        let normalized = vectors.iter().all(|v| v.normalized);
        Ok(Self { rows, modality, normalized })
    }

    /// Normalizes every row to unit length.
    pub fn normalized(&self) -> Result<Self> {
        let rows = normalize_rows(&self.rows.view())?;
        Ok(Self { rows, modality: self.modality, normalized: true })
    }

    pub(crate) fn from_normalized(rows: Array2<f64>, modality: Modality) -> Self {
        Self { rows, modality, normalized: true }
    }

    pub fn rows(&self) -> ArrayView2<'_, f64> {
        self.rows.view()
    }

    pub fn row(&self, i: usize) -> ArrayView1<'_, f64> {
        self.rows.row(i)
    }

    pub fn len(&self) -> usize {
        self.rows.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.nrows() == 0
    }

    pub fn dim(&self) -> usize {
        self.rows.ncols()
    }

    pub fn modality(&self) -> Modality {
        self.modality
    }

    pub fn is_normalized(&self) -> bool {
        self.normalized
    }

    pub fn into_rows(self) -> Array2<f64> {
        self.rows
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SimilarityKind {
    CrossModal,
    IntraModal,
}

/// `N x M` matrix of inner products between two batches.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityMatrix {
    entries: Array2<f64>,
    kind: SimilarityKind,
}

impl SimilarityMatrix {
    pub fn new(entries: Array2<f64>, kind: SimilarityKind) -> Result<Self> {
        if entries.iter().any(|v| !v.is_finite()) {
            return Err(Error::ShapeMismatch("similarity matrix has non-finite entries".into()));
        }
        Ok(Self { entries, kind })
    }

    pub fn entries(&self) -> ArrayView2<'_, f64> {
        self.entries.view()
    }

    pub fn kind(&self) -> SimilarityKind {
        self.kind
    }

    pub fn shape(&self) -> (usize, usize) {
        self.entries.dim()
    }

    pub fn into_entries(self) -> Array2<f64> {
        self.entries
    }
}

/// `entries[i][j] = xs[i] . ys[j]`. Same-modality inputs produce an
/// intra-modal matrix.
pub fn pairwise_similarity(xs: &EmbeddingBatch, ys: &EmbeddingBatch) -> Result<SimilarityMatrix> {
    if xs.dim() != ys.dim() {
        return Err(Error::DimensionMismatch { expected: xs.dim(), found: ys.dim() });
    }
    let kind = if xs.modality == ys.modality { SimilarityKind::IntraModal } else { SimilarityKind::CrossModal };
    Ok(SimilarityMatrix { entries: xs.rows.dot(&ys.rows.t()), kind })
}

fn check_temperature(temperature: f64) -> Result<()> {
    if temperature > 0.0 && temperature.is_finite() {
        Ok(())
    } else {
        Err(Error::NonPositiveTemperature(temperature))
    }
}

/// Softmax of `m / temperature` along each row.
pub fn row_softmax(m: &ArrayView2<'_, f64>, temperature: f64) -> Result<Array2<f64>> {
    check_temperature(temperature)?;
    let mut out = m / temperature;
    for mut row in out.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |acc, &v| acc.max(v));
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row /= sum;
    }
    Ok(out)
}

/// Log of the row softmax of `m / temperature`, computed without forming the
/// probabilities.
pub fn row_log_softmax(m: &ArrayView2<'_, f64>, temperature: f64) -> Result<Array2<f64>> {
    check_temperature(temperature)?;
    let mut out = m / temperature;
    for mut row in out.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |acc, &v| acc.max(v));
        let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<f64>().ln();
        row.mapv_inplace(|v| v - lse);
    }
    Ok(out)
}

/// Gradient of a loss with respect to the softmax logits, given the softmax
/// output `probs` and the upstream gradient with respect to `probs`.
pub fn softmax_backward(probs: &ArrayView2<'_, f64>, grad_probs: &ArrayView2<'_, f64>) -> Result<Array2<f64>> {
    if probs.dim() != grad_probs.dim() {
        return Err(Error::ShapeMismatch(format!(
            "softmax backward: probs {:?} vs upstream {:?}",
            probs.dim(),
            grad_probs.dim()
        )));
    }
    let dots = (probs * grad_probs).sum_axis(Axis(1)).insert_axis(Axis(1));
    Ok(probs * &(grad_probs - &dots))
}

/// Row-wise L2 normalization.
pub fn normalize_rows(x: &ArrayView2<'_, f64>) -> Result<Array2<f64>> {
    let mut out = x.to_owned();
    for mut row in out.rows_mut() {
        let norm = row.dot(&row).sqrt();
        if norm < MIN_NORM {
            return Err(Error::ZeroNorm(norm));
        }
        row /= norm;
    }
    Ok(out)
}

/// Backward of [`normalize_rows`]: for `y = x / |x|`,
/// `dx = (g - y (y . g)) / |x|`.
pub fn normalize_backward(x: &ArrayView2<'_, f64>, grad_y: &ArrayView2<'_, f64>) -> Result<Array2<f64>> {
    if x.dim() != grad_y.dim() {
        return Err(Error::ShapeMismatch(format!(
            "normalize backward: input {:?} vs upstream {:?}",
            x.dim(),
            grad_y.dim()
        )));
    }
    let mut out = Array2::zeros(x.dim());
    for ((xr, gr), mut outr) in x.rows().into_iter().zip(grad_y.rows()).zip(out.rows_mut()) {
        let norm = xr.dot(&xr).sqrt();
        if norm < MIN_NORM {
            return Err(Error::ZeroNorm(norm));
        }
        let y = &xr / norm;
        let proj = y.dot(&gr);
        outr.assign(&((&gr - &(&y * proj)) / norm));
    }
    Ok(out)
}

/// Backward of `C = X Y^T`: returns `(dX, dY) = (G Y, G^T X)`.
pub fn matmul_backward(
    x: &ArrayView2<'_, f64>,
    y: &ArrayView2<'_, f64>,
    grad_c: &ArrayView2<'_, f64>,
) -> Result<(Array2<f64>, Array2<f64>)> {
    if x.ncols() != y.ncols() || grad_c.dim() != (x.nrows(), y.nrows()) {
        return Err(Error::ShapeMismatch(format!(
            "matmul backward: x {:?}, y {:?}, upstream {:?}",
            x.dim(),
            y.dim(),
            grad_c.dim()
        )));
    }
    Ok((grad_c.dot(y), grad_c.t().dot(x)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::array;

    #[test]
    fn normalize_three_four() {
        let v = EmbeddingVector::new(vec![3.0, 4.0]).unwrap();
        let n = l2_normalize(&v).unwrap();
        assert_abs_diff_eq!(n.values()[0], 0.6, epsilon = 1e-12);
        assert_abs_diff_eq!(n.values()[1], 0.8, epsilon = 1e-12);
        assert!(n.is_normalized());
    }

    #[test]
    fn normalize_unit_is_identity() {
        let v = EmbeddingVector::new(vec![1.0, 0.0, 0.0]).unwrap();
        assert_eq!(l2_normalize(&v).unwrap().into_vec(), vec![1.0, 0.0, 0.0]);
    }

    #[test]
    fn normalize_zero_fails() {
        let v = EmbeddingVector::new(vec![0.0, 0.0]).unwrap();
        assert!(matches!(l2_normalize(&v), Err(Error::ZeroNorm(_))));
    }

    #[test]
    fn similarity_examples() {
        let xs = EmbeddingBatch::new(array![[1.0, 0.0], [0.0, 1.0]], Modality::Text).unwrap();
        let c = pairwise_similarity(&xs, &xs).unwrap();
        assert_eq!(c.entries(), array![[1.0, 0.0], [0.0, 1.0]]);
        assert_eq!(c.kind(), SimilarityKind::IntraModal);

        let a = EmbeddingBatch::new(array![[1.0, 0.0]], Modality::Text).unwrap();
        let b = EmbeddingBatch::new(array![[0.6, 0.8]], Modality::Audio).unwrap();
        let c = pairwise_similarity(&a, &b).unwrap();
        assert_abs_diff_eq!(c.entries()[[0, 0]], 0.6, epsilon = 1e-15);
        assert_eq!(c.kind(), SimilarityKind::CrossModal);

        let d3 = EmbeddingBatch::new(array![[1.0, 0.0, 0.0]], Modality::Audio).unwrap();
        assert!(matches!(pairwise_similarity(&a, &d3), Err(Error::DimensionMismatch { .. })));
    }

    #[test]
    fn softmax_examples() {
        let p = row_softmax(&array![[0.0, 0.0]].view(), 1.0).unwrap();
        assert_abs_diff_eq!(p[[0, 0]], 0.5, epsilon = 1e-15);
        let p = row_softmax(&array![[1.0, 0.0]].view(), 1.0).unwrap();
        assert_abs_diff_eq!(p[[0, 0]], 0.7311, epsilon = 1e-4);
        assert_abs_diff_eq!(p[[0, 1]], 0.2689, epsilon = 1e-4);
        let p = row_softmax(&array![[1000.0, 0.0]].view(), 1.0).unwrap();
        assert_eq!(p[[0, 0]], 1.0);
        assert!(p[[0, 1]] >= 0.0 && p[[0, 1]] < 1e-300);
        assert!(matches!(row_softmax(&array![[1.0]].view(), 0.0), Err(Error::NonPositiveTemperature(_))));
        assert!(row_softmax(&array![[1.0]].view(), -1.0).is_err());
    }

    #[test]
    fn log_softmax_agrees_with_softmax() {
        let m = array![[0.3, -1.2, 2.0], [5.0, 5.0, -3.0]];
        let p = row_softmax(&m.view(), 0.7).unwrap();
        let lp = row_log_softmax(&m.view(), 0.7).unwrap();
        for (a, b) in p.iter().zip(lp.iter()) {
            assert_abs_diff_eq!(a.ln(), *b, epsilon = 1e-13);
        }
    }

    #[test]
    fn single_element_log_softmax_has_zero_gradient() {
        // d/dz log softmax([z])_0 = 1 - p_0 = 0
        let p = row_softmax(&array![[2.5]].view(), 1.0).unwrap();
        let upstream = array![[1.0 / p[[0, 0]]]];
        let g = softmax_backward(&p.view(), &upstream.view()).unwrap();
        assert_abs_diff_eq!(g[[0, 0]], 0.0, epsilon = 1e-15);
    }

    #[test]
    fn backward_shape_errors() {
        let a = Array2::<f64>::ones((2, 3));
        let b = Array2::<f64>::ones((3, 2));
        assert!(matches!(softmax_backward(&a.view(), &b.view()), Err(Error::ShapeMismatch(_))));
        assert!(matches!(normalize_backward(&a.view(), &b.view()), Err(Error::ShapeMismatch(_))));
        assert!(matches!(matmul_backward(&a.view(), &b.view(), &a.view()), Err(Error::ShapeMismatch(_))));
    }
}
