//! Symmetric contrastive loss over a text-audio similarity matrix and its
//! soft-label KL counterpart.
//!
//! `C[i][j]` is the similarity of text `i` with audio `j`. The text-side
//! prediction for audio `i` is the softmax of column `i` of `C / tau` (a
//! distribution over texts); the audio-side prediction for text `i` is the
//! softmax of row `i`. Both losses are minimized and averaged over the batch,
//! so the hard-label loss is the soft-label loss with one-hot targets.

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::embedding::{pairwise_similarity, row_log_softmax, row_softmax, EmbeddingBatch, SimilarityMatrix};
use crate::error::{Error, Result};

/// Default weight of the teacher similarity term in the soft targets.
pub const DEFAULT_BETA: f64 = 0.3;

/// Probabilities below this are floored inside the log.
pub const PROB_FLOOR: f64 = 1e-30;

/// Tolerance on target row sums.
const TARGET_SUM_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SoftLabelConfig {
    pub beta: f64,
    /// Temperature applied to teacher intra-modal rows before mixing.
    pub soft_temperature: f64,
}

impl Default for SoftLabelConfig {
    fn default() -> Self {
        Self { beta: DEFAULT_BETA, soft_temperature: 1.0 }
    }
}

impl SoftLabelConfig {
    pub fn new(beta: f64, soft_temperature: f64) -> Result<Self> {
        let cfg = Self { beta, soft_temperature };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.beta) {
            return Err(Error::InvalidConfig(format!("beta must lie in [0, 1], got {}", self.beta)));
        }
        if !(self.soft_temperature > 0.0 && self.soft_temperature.is_finite()) {
            return Err(Error::NonPositiveTemperature(self.soft_temperature));
        }
        Ok(())
    }
}

/// Row-stochastic targets for both directions.
#[derive(Debug, Clone, PartialEq)]
pub struct SoftTargets {
    /// Row `i`: target distribution over texts for audio `i`.
    pub a2t: Array2<f64>,
    /// Row `i`: target distribution over audios for text `i`.
    pub t2a: Array2<f64>,
}

impl SoftTargets {
    /// One-hot targets for a batch of `n`.
    pub fn hard(n: usize) -> Self {
        Self { a2t: Array2::eye(n), t2a: Array2::eye(n) }
    }

    pub fn len(&self) -> usize {
        self.a2t.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.a2t.nrows() == 0
    }

    fn validate(&self, n: usize) -> Result<()> {
        for (name, m) in [("a2t", &self.a2t), ("t2a", &self.t2a)] {
            if m.dim() != (n, n) {
                return Err(Error::InvalidTargets(format!("{name} is {:?}, expected {n}x{n}", m.dim())));
            }
            for (i, row) in m.rows().into_iter().enumerate() {
                if row.iter().any(|&p| p < 0.0 || !p.is_finite()) {
                    return Err(Error::InvalidTargets(format!("{name} row {i} has a negative or non-finite entry")));
                }
                let sum = row.sum();
                if (sum - 1.0).abs() > TARGET_SUM_TOLERANCE {
                    return Err(Error::InvalidTargets(format!("{name} row {i} sums to {sum}")));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossOutput {
    pub value: f64,
    /// d loss / d C.
    pub grad_c: Array2<f64>,
    /// d loss / d ln(tau).
    pub grad_log_temperature: f64,
}

fn square_dim(c: &ArrayView2<'_, f64>) -> Result<usize> {
    let (rows, cols) = c.dim();
    if rows != cols || rows == 0 {
        return Err(Error::NonSquare { rows, cols });
    }
    Ok(rows)
}

fn finish(c: &ArrayView2<'_, f64>, value: f64, grad_c: Array2<f64>) -> LossOutput {
    // logits are C * exp(-s), so dL/ds = -sum(dL/dC * C)
    let grad_log_temperature = -(&grad_c * c).sum();
    LossOutput { value, grad_c, grad_log_temperature }
}

/// Hard-label symmetric contrastive loss
/// `-(1/2N) sum_i [ln softmax_t(C/tau)_ii + ln softmax_a(C/tau)_ii]`.
pub fn clap_loss(c: &SimilarityMatrix, tau: f64) -> Result<LossOutput> {
    let c = c.entries();
    let n = square_dim(&c)?;
    let ct = c.t();
    let log_a = row_log_softmax(&c, tau)?;
    let log_t = row_log_softmax(&ct, tau)?;
    let floor = PROB_FLOOR.ln();
    let mut value = 0.0;
    for i in 0..n {
        value -= log_t[[i, i]].max(floor) + log_a[[i, i]].max(floor);
    }
    value /= 2.0 * n as f64;

    let mut p_a = log_a.mapv(f64::exp);
    let mut p_t = log_t.mapv(f64::exp);
    for i in 0..n {
        p_a[[i, i]] -= 1.0;
        p_t[[i, i]] -= 1.0;
    }
    let grad_c = (p_a + p_t.t()) / (2.0 * n as f64 * tau);
    Ok(finish(&c, value, grad_c))
}

/// `(C~_t, C~_a)`: intra-batch self-similarities of the teacher text and
/// audio embeddings.
pub fn intra_modal_similarities(
    t_teacher: &EmbeddingBatch,
    a_teacher: &EmbeddingBatch,
) -> Result<(SimilarityMatrix, SimilarityMatrix)> {
    if t_teacher.len() != a_teacher.len() {
        return Err(Error::DimensionMismatch { expected: t_teacher.len(), found: a_teacher.len() });
    }
    if t_teacher.dim() != a_teacher.dim() {
        return Err(Error::DimensionMismatch { expected: t_teacher.dim(), found: a_teacher.dim() });
    }
    Ok((pairwise_similarity(t_teacher, t_teacher)?, pairwise_similarity(a_teacher, a_teacher)?))
}

/// Mixes one-hot labels with softmaxed teacher similarities:
/// `a2t_i = (1 - beta) e_i + beta softmax(C~_a / s)_i`, and `t2a` likewise
/// from `C~_t`.
pub fn soft_targets(
    c_text: &SimilarityMatrix,
    c_audio: &SimilarityMatrix,
    config: &SoftLabelConfig,
) -> Result<SoftTargets> {
    config.validate()?;
    let n = square_dim(&c_text.entries())?;
    let m = square_dim(&c_audio.entries())?;
    if n != m {
        return Err(Error::DimensionMismatch { expected: n, found: m });
    }
    let mix = |sim: &SimilarityMatrix| -> Result<Array2<f64>> {
        let soft = row_softmax(&sim.entries(), config.soft_temperature)?;
        Ok(Array2::eye(n) * (1.0 - config.beta) + soft * config.beta)
    };
    Ok(SoftTargets { a2t: mix(c_audio)?, t2a: mix(c_text)? })
}

fn kl_rows(targets: &Array2<f64>, log_pred: &Array2<f64>) -> f64 {
    let floor = PROB_FLOOR.ln();
    let mut total = 0.0;
    for (p_row, lq_row) in targets.rows().into_iter().zip(log_pred.rows()) {
        for (&p, &lq) in p_row.iter().zip(lq_row.iter()) {
            if p > 0.0 {
                total += p * (p.ln() - lq.max(floor));
            }
        }
    }
    total
}

/// `1/2 (L~_t + L~_a)` with `L~_t = 1/N sum_i KL(a2t_i || softmax_t(C/tau)_i)`
/// and `L~_a = 1/N sum_i KL(t2a_i || softmax_a(C/tau)_i)`.
pub fn soft_label_loss(c: &SimilarityMatrix, tau: f64, targets: &SoftTargets) -> Result<LossOutput> {
    let c = c.entries();
    let n = square_dim(&c)?;
    targets.validate(n)?;
    let ct = c.t();
    let log_a = row_log_softmax(&c, tau)?;
    let log_t = row_log_softmax(&ct, tau)?;
    let value = (kl_rows(&targets.a2t, &log_t) + kl_rows(&targets.t2a, &log_a)) / (2.0 * n as f64);

    let p_a = log_a.mapv(f64::exp) - &targets.t2a;
    let p_t = log_t.mapv(f64::exp) - &targets.a2t;
    let grad_c = (p_a + p_t.t()) / (2.0 * n as f64 * tau);
    Ok(finish(&c, value, grad_c))
}
