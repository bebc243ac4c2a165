//! Teacher and student training loops and checkpoint files.

use std::fs;
use std::path::Path;
use std::time::Instant;

use ndarray::{Array2, ArrayView2, Axis};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::batching::EpochSampler;
use crate::curation::{mix_replay, BatchSource, CuratedPairSet, DEFAULT_REPLAY_PROB};
use crate::embedding::{matmul_backward, pairwise_similarity};
use crate::encoders::{
    audio_features, backward_batch, embed_features, encode_features, init_params, text_features, AudioItem, ModelDims,
    ModelParams, TextItem,
};
use crate::error::{Error, Result};
use crate::jsonl::JsonlWriter;
use crate::loss::{clap_loss, intra_modal_similarities, soft_label_loss, soft_targets, SoftLabelConfig, SoftTargets};
use crate::optim::{AdamHyper, Optimizer, OptimizerKind};

pub const CHECKPOINT_FORMAT_VERSION: u64 = 1;

/// Per-device batch size of the reference training setup.
pub const DEFAULT_BATCH_SIZE: usize = 64;

pub type Pair = (AudioItem, TextItem);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub steps: usize,
    pub learning_rate: f64,
    pub optimizer: OptimizerKind,
    pub adam: AdamHyper,
    pub soft: SoftLabelConfig,
    /// Student objective: hard-label contrastive loss instead of soft-label KL.
    pub hard_labels: bool,
    pub replay_prob: f64,
    pub seed: u64,
    /// Fraction of teacher pairs sampled once, up front.
    pub subset_fraction: f64,
    /// Student starts from the teacher weights rather than a fresh init.
    pub warm_start: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: DEFAULT_BATCH_SIZE,
            steps: 1000,
            learning_rate: 1e-3,
            optimizer: OptimizerKind::Adam,
            adam: AdamHyper::default(),
            soft: SoftLabelConfig::default(),
            hard_labels: false,
            replay_prob: DEFAULT_REPLAY_PROB,
            seed: 0,
            subset_fraction: 1.0,
            warm_start: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return Err(Error::InvalidConfig(format!(
                "contrastive training needs batch size >= 2, got {}",
                self.batch_size
            )));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::InvalidConfig(format!("learning rate must be positive, got {}", self.learning_rate)));
        }
        if !(self.subset_fraction > 0.0 && self.subset_fraction <= 1.0) {
            return Err(Error::InvalidConfig(format!(
                "subset fraction must lie in (0, 1], got {}",
                self.subset_fraction
            )));
        }
        if !(0.0..=1.0).contains(&self.replay_prob) {
            return Err(Error::InvalidProbability(self.replay_prob));
        }
        self.soft.validate()
    }

    /// SHA-256 of the canonical JSON form, hex encoded.
    pub fn content_hash(&self) -> String {
        hex::encode(Sha256::digest(serde_json::to_vec(self).expect("config serializes")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Teacher,
    Student,
}

/// Versioned JSON checkpoint. Arrays are stored as `{"v":1,"dim":[..],"data":[..]}`
/// with shortest round-trip decimal floats, so a reload is bit-exact.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format_version: u64,
    pub role: Role,
    pub step: usize,
    pub config_hash: String,
    pub params: ModelParams,
}

impl Checkpoint {
    pub fn new(role: Role, step: usize, config: &TrainConfig, params: ModelParams) -> Self {
        Self { format_version: CHECKPOINT_FORMAT_VERSION, role, step, config_hash: config.content_hash(), params }
    }

    /// Content hash of the parameters; used as the checkpoint id.
    pub fn id(&self) -> String {
        self.params.content_hash()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        serde_json::to_vec(self).expect("checkpoint serializes")
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        let value: serde_json::Value = serde_json::from_slice(&bytes).map_err(|e| Error::corrupt(path, 1, e))?;
        let found = value.get("format_version").and_then(serde_json::Value::as_u64).unwrap_or(0);
        if found != CHECKPOINT_FORMAT_VERSION {
            return Err(Error::FormatVersionMismatch { path: path.into(), found, expected: CHECKPOINT_FORMAT_VERSION });
        }
        let ckpt: Checkpoint = serde_json::from_value(value).map_err(|e| Error::corrupt(path, 1, e))?;
        ckpt.params.validate()?;
        if !ckpt.params.is_finite() {
            return Err(Error::corrupt(path, 1, "non-finite parameter"));
        }
        Ok(ckpt)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub loss: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub source: Option<BatchSource>,
    pub wall_ms: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub log: Vec<StepRecord>,
    /// Number of distinct pairs the run drew from.
    pub pairs_used: usize,
}

impl TrainOutcome {
    pub fn losses(&self) -> Vec<f64> {
        self.log.iter().map(|r| r.loss).collect()
    }
}

/// Writes the per-step log as JSON lines.
pub fn save_run_log(log: &[StepRecord], path: &Path) -> Result<()> {
    let mut w = JsonlWriter::create(path)?;
    for r in log {
        w.write(r)?;
    }
    w.finish()
}

/// Feature matrices for a list of pairs.
#[derive(Debug, Clone)]
pub struct PairFeatures {
    pub text: Array2<f64>,
    pub audio: Array2<f64>,
}

impl PairFeatures {
    pub fn new(dims: &ModelDims, pairs: &[Pair]) -> Result<Self> {
        let texts: Vec<TextItem> = pairs.iter().map(|(_, t)| t.clone()).collect();
        let audios: Vec<AudioItem> = pairs.iter().map(|(a, _)| a.clone()).collect();
        Ok(Self { text: text_features(dims, &texts)?, audio: audio_features(dims, &audios)? })
    }

    pub fn len(&self) -> usize {
        self.text.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.text.nrows() == 0
    }

    pub fn select(&self, indices: &[usize]) -> (Array2<f64>, Array2<f64>) {
        (self.text.select(Axis(0), indices), self.audio.select(Axis(0), indices))
    }
}

/// Training objective for one batch.
#[derive(Debug, Clone, Copy)]
pub enum Objective<'a> {
    Hard,
    Soft(&'a SoftTargets),
}

/// Loss value and full parameter gradient (including `log_temperature`)
/// for one batch of features.
pub fn batch_loss_and_grads(
    params: &ModelParams,
    text_x: &ArrayView2<'_, f64>,
    audio_x: &ArrayView2<'_, f64>,
    objective: Objective<'_>,
) -> Result<(f64, ModelParams)> {
    let (t, a, cache) = encode_features(params, text_x, audio_x)?;
    let c = pairwise_similarity(&t, &a)?;
    let tau = params.temperature();
    let out = match objective {
        Objective::Hard => clap_loss(&c, tau)?,
        Objective::Soft(targets) => soft_label_loss(&c, tau, targets)?,
    };
    let (grad_t, grad_a) = matmul_backward(&t.rows(), &a.rows(), &out.grad_c.view())?;
    let mut grads = backward_batch(params, &cache, &grad_t.view(), &grad_a.view())?;
    grads.log_temperature = out.grad_log_temperature;
    if !out.value.is_finite() || !grads.log_temperature.is_finite() {
        return Err(Error::NonFiniteGradient { tensor: "log_temperature".into() });
    }
    Ok((out.value, grads))
}

/// Soft targets from the frozen teacher's embeddings of the same batch.
pub fn teacher_soft_targets(
    teacher: &ModelParams,
    text_x: &ArrayView2<'_, f64>,
    audio_x: &ArrayView2<'_, f64>,
    config: &SoftLabelConfig,
) -> Result<SoftTargets> {
    let (t, a) = embed_features(teacher, text_x, audio_x)?;
    let (c_text, c_audio) = intra_modal_similarities(&t, &a)?;
    soft_targets(&c_text, &c_audio, config)
}

/// Seeded subset of `n` indices, of size `round(fraction * n)` (at least 1),
/// in ascending order.
pub fn subset_indices(n: usize, fraction: f64, seed: u64) -> Vec<usize> {
    if fraction >= 1.0 {
        return (0..n).collect();
    }
    let k = ((fraction * n as f64).round() as usize).clamp(1, n.max(1));
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_5b5e);
    let mut idx = sample(&mut rng, n, k).into_vec();
    idx.sort_unstable();
    idx
}

/// Trains a fresh model on `pairs` with the hard-label contrastive loss.
pub fn train_teacher(pairs: &[Pair], dims: &ModelDims, config: &TrainConfig) -> Result<TrainOutcome> {
    config.validate()?;
    let used: Vec<Pair> = subset_indices(pairs.len(), config.subset_fraction, config.seed)
        .into_iter()
        .map(|i| pairs[i].clone())
        .collect();
    if used.len() < config.batch_size {
        return Err(Error::InsufficientData { needed: config.batch_size, available: used.len() });
    }
    let features = PairFeatures::new(dims, &used)?;
    let mut params = init_params(dims, config.seed)?;
    let mut opt = Optimizer::new(config.optimizer, config.learning_rate, config.adam)?;
    let mut sampler = EpochSampler::new(features.len(), config.batch_size, config.seed ^ 0xba7c_4e5a);
    let start = Instant::now();
    let mut log = Vec::with_capacity(config.steps);
    for step in 0..config.steps {
        let (xt, xa) = features.select(&sampler.next_batch());
        let (loss, grads) = batch_loss_and_grads(&params, &xt.view(), &xa.view(), Objective::Hard)?;
        opt.step_model(&mut params, &grads)?;
        log.push(StepRecord { step, loss, source: None, wall_ms: start.elapsed().as_secs_f64() * 1e3 });
    }
    Ok(TrainOutcome {
        checkpoint: Checkpoint::new(Role::Teacher, config.steps, config, params),
        log,
        pairs_used: used.len(),
    })
}

/// Looks up the items behind a curated set's ids.
pub fn resolve_pairs(set: &CuratedPairSet, audios: &[AudioItem], texts: &[TextItem]) -> Result<Vec<Pair>> {
    use std::collections::HashMap;
    let audio_by_id: HashMap<&str, &AudioItem> = audios.iter().map(|a| (a.id.as_str(), a)).collect();
    let text_by_id: HashMap<&str, &TextItem> = texts.iter().map(|t| (t.id.as_str(), t)).collect();
    set.pairs
        .iter()
        .map(|p| {
            let a = audio_by_id
                .get(p.audio_id.as_str())
                .ok_or_else(|| Error::UnknownId { kind: "audio", id: p.audio_id.clone() })?;
            let t = text_by_id
                .get(p.text_id.as_str())
                .ok_or_else(|| Error::UnknownId { kind: "text", id: p.text_id.clone() })?;
            Ok(((*a).clone(), (*t).clone()))
        })
        .collect()
}

/// Continues training from `teacher` on the Improvement-Set, with batches
/// replaced by replay batches at `config.replay_prob`. Unless
/// `config.hard_labels` is set, each batch's targets come from the frozen
/// teacher's intra-modal similarities.
pub fn train_student(
    teacher: &Checkpoint,
    improvement: &[Pair],
    replay_pool: &[Pair],
    config: &TrainConfig,
) -> Result<TrainOutcome> {
    config.validate()?;
    let frozen = &teacher.params;
    frozen.validate()?;
    if improvement.is_empty() && config.replay_prob < 1.0 {
        return Err(Error::InsufficientData { needed: config.batch_size, available: 0 });
    }
    let dims = &frozen.dims;
    for (a, _) in improvement.iter().chain(replay_pool) {
        if a.features.len() != dims.audio_dim {
            return Err(Error::IncompatibleDims(format!(
                "audio {} has {} features, teacher expects {}",
                a.id,
                a.features.len(),
                dims.audio_dim
            )));
        }
    }
    let improvement_x = PairFeatures::new(dims, improvement)?;
    let replay_x = PairFeatures::new(dims, replay_pool)?;
    let mixer = mix_replay(improvement.len(), replay_pool.len(), config.replay_prob, config.batch_size, config.seed)?;

    let mut params = if config.warm_start { frozen.clone() } else { init_params(dims, config.seed)? };
    let mut opt = Optimizer::new(config.optimizer, config.learning_rate, config.adam)?;
    let start = Instant::now();
    let mut log = Vec::with_capacity(config.steps);
    for (step, draw) in mixer.take(config.steps).enumerate() {
        let pool = match draw.source {
            BatchSource::Improvement => &improvement_x,
            BatchSource::Replay => &replay_x,
        };
        let (xt, xa) = pool.select(&draw.indices);
        let (loss, grads) = if config.hard_labels {
            batch_loss_and_grads(&params, &xt.view(), &xa.view(), Objective::Hard)?
        } else {
            let targets = teacher_soft_targets(frozen, &xt.view(), &xa.view(), &config.soft)?;
            batch_loss_and_grads(&params, &xt.view(), &xa.view(), Objective::Soft(&targets))?
        };
        opt.step_model(&mut params, &grads)?;
        log.push(StepRecord { step, loss, source: Some(draw.source), wall_ms: start.elapsed().as_secs_f64() * 1e3 });
    }
    Ok(TrainOutcome {
        checkpoint: Checkpoint::new(Role::Student, config.steps, config, params),
        log,
        pairs_used: improvement.len() + replay_pool.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn subset_is_exact_and_seeded() {
        let idx = subset_indices(1000, 0.1, 3);
        assert_eq!(idx.len(), 100);
        assert_eq!(idx, subset_indices(1000, 0.1, 3));
        assert!(idx.windows(2).all(|w| w[0] < w[1]));
        assert_eq!(subset_indices(7, 1.0, 0), (0..7).collect::<Vec<_>>());
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig { batch_size: 1, ..Default::default() }.validate().is_err());
        assert!(TrainConfig { learning_rate: 0.0, ..Default::default() }.validate().is_err());
        assert!(TrainConfig { subset_fraction: 0.0, ..Default::default() }.validate().is_err());
        assert!(matches!(
            TrainConfig { replay_prob: 2.0, ..Default::default() }.validate(),
            Err(Error::InvalidProbability(_))
        ));
    }

    #[test]
    fn config_hash_tracks_content() {
        let a = TrainConfig::default();
        let b = TrainConfig { seed: 1, ..Default::default() };
        assert_eq!(a.content_hash(), TrainConfig::default().content_hash());
        assert_ne!(a.content_hash(), b.content_hash());
    }
}
