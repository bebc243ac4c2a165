//! Improvement-Set construction with a frozen teacher.
//!
//! * DU matches every training caption against an unpaired audio pool and
//!   keeps pairs whose cross-modal cosine reaches `sigma`.
//! * DS keeps the original training pairs whose caption is text-similar to
//!   at least one prompted in-domain label.
//! * ADS runs DS caption selection, then DU matching restricted to the
//!   selected captions.
//!
//! Curation only ever sees [`AudioItem`]s from the pool, never their class.

use std::collections::HashSet;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::batching::EpochSampler;
use crate::embedding::EmbeddingBatch;
use crate::encoders::{encode_audios, encode_texts, AudioItem, ModelParams, TextItem};
use crate::error::{Error, Result};
use crate::jsonl::{JsonlReader, JsonlWriter};
use crate::zero_shot::{build_prompts, ClassLabel, PromptTemplate};

pub const MANIFEST_FORMAT_VERSION: u64 = 1;
pub const DEFAULT_SIGMA: f64 = 0.7;
pub const DEFAULT_SIGMA_DS: f64 = 0.7;
pub const DEFAULT_REPLAY_PROB: f64 = 0.25;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Strategy {
    Du,
    Ds,
    Ads,
}

impl std::fmt::Display for Strategy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Strategy::Du => "DU",
            Strategy::Ds => "DS",
            Strategy::Ads => "ADS",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MatchMode {
    /// Every (audio, caption) pair at or above the threshold.
    #[default]
    AllAboveThreshold,
    /// Per audio item, its best caption if that reaches the threshold.
    Top1AboveThreshold,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurationConfig {
    /// Cross-modal acceptance threshold.
    pub sigma: f64,
    /// Caption-to-label threshold for DS selection.
    pub sigma_ds: f64,
    pub match_mode: MatchMode,
}

impl Default for CurationConfig {
    fn default() -> Self {
        Self { sigma: DEFAULT_SIGMA, sigma_ds: DEFAULT_SIGMA_DS, match_mode: MatchMode::default() }
    }
}

impl CurationConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("sigma", self.sigma), ("sigma_ds", self.sigma_ds)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::InvalidConfig(format!("{name} must lie in [0, 1], got {v}")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CuratedPair {
    pub audio_id: String,
    pub text_id: String,
    pub similarity: f64,
    pub strategy: Strategy,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CuratedPairSet {
    pub pairs: Vec<CuratedPair>,
    pub strategy: Strategy,
    pub config: CurationConfig,
    pub teacher_id: String,
}

impl CuratedPairSet {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn contains(&self, audio_id: &str, text_id: &str) -> bool {
        self.pairs.iter().any(|p| p.audio_id == audio_id && p.text_id == text_id)
    }
}

/// Teacher embeddings of an unpaired audio pool.
#[derive(Debug, Clone)]
pub struct AudioPool {
    pub ids: Vec<String>,
    pub embeddings: EmbeddingBatch,
}

impl AudioPool {
    pub fn embed(teacher: &ModelParams, audios: &[AudioItem]) -> Result<Self> {
        if audios.is_empty() {
            return Err(Error::EmptyPool("wild audio"));
        }
        Ok(Self { ids: audios.iter().map(|a| a.id.clone()).collect(), embeddings: encode_audios(teacher, audios)? })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

fn match_against_pool(
    captions: &[&TextItem],
    caption_embeddings: &EmbeddingBatch,
    pool: &AudioPool,
    sigma: f64,
    mode: MatchMode,
    strategy: Strategy,
) -> Vec<CuratedPair> {
    let sims = pool.embeddings.rows().dot(&caption_embeddings.rows().t());
    let mut seen = HashSet::new();
    let mut pairs = Vec::new();
    for (j, audio_id) in pool.ids.iter().enumerate() {
        let row = sims.row(j);
        let mut push = |i: usize, s: f64| {
            if seen.insert((audio_id.as_str(), captions[i].id.as_str())) {
                pairs.push(CuratedPair {
                    audio_id: audio_id.clone(),
                    text_id: captions[i].id.clone(),
                    similarity: s,
                    strategy,
                });
            }
        };
        match mode {
            MatchMode::AllAboveThreshold => {
                for (i, &s) in row.iter().enumerate() {
                    if s >= sigma {
                        push(i, s);
                    }
                }
            }
            MatchMode::Top1AboveThreshold => {
                let mut best: Option<(usize, f64)> = None;
                for (i, &s) in row.iter().enumerate() {
                    best = match best {
                        Some((b, bs)) if bs > s || (bs == s && captions[b].id <= captions[i].id) => Some((b, bs)),
                        _ => Some((i, s)),
                    };
                }
                if let Some((i, s)) = best.filter(|&(_, s)| s >= sigma) {
                    push(i, s);
                }
            }
        }
    }
    pairs
}

/// Domain-unspecific curation of `captions` against `wild_audio`.
pub fn curate_du(
    teacher: &ModelParams,
    captions: &[TextItem],
    wild_audio: &[AudioItem],
    config: &CurationConfig,
) -> Result<CuratedPairSet> {
    if captions.is_empty() {
        return Err(Error::EmptyPool("captions"));
    }
    let pool = AudioPool::embed(teacher, wild_audio)?;
    curate_du_pool(teacher, captions, &pool, config)
}

/// [`curate_du`] against a pool whose teacher embeddings are already known.
pub fn curate_du_pool(
    teacher: &ModelParams,
    captions: &[TextItem],
    pool: &AudioPool,
    config: &CurationConfig,
) -> Result<CuratedPairSet> {
    config.validate()?;
    if captions.is_empty() {
        return Err(Error::EmptyPool("captions"));
    }
    if pool.is_empty() {
        return Err(Error::EmptyPool("wild audio"));
    }
    let caption_embeddings = encode_texts(teacher, captions)?;
    let refs: Vec<&TextItem> = captions.iter().collect();
    let pairs = match_against_pool(&refs, &caption_embeddings, pool, config.sigma, config.match_mode, Strategy::Du);
    Ok(CuratedPairSet { pairs, strategy: Strategy::Du, config: *config, teacher_id: teacher.content_hash() })
}

/// Per caption, the maximum cosine against any prompted label.
pub fn ds_caption_scores(
    teacher: &ModelParams,
    captions: &[TextItem],
    domain_labels: &[ClassLabel],
    prompt: &PromptTemplate,
) -> Result<Vec<f64>> {
    if captions.is_empty() {
        return Err(Error::EmptyPool("captions"));
    }
    if domain_labels.is_empty() {
        return Err(Error::EmptyPool("domain labels"));
    }
    let prompts = build_prompts(domain_labels, prompt)?;
    let label_emb = encode_texts(teacher, &prompts)?;
    let caption_emb = encode_texts(teacher, captions)?;
    let sims = caption_emb.rows().dot(&label_emb.rows().t());
    Ok(sims.rows().into_iter().map(|r| r.fold(f64::NEG_INFINITY, |m, &v| m.max(v))).collect())
}

/// Ids of captions whose best label cosine reaches `sigma_ds`.
pub fn select_ds_captions(
    teacher: &ModelParams,
    captions: &[TextItem],
    domain_labels: &[ClassLabel],
    prompt: &PromptTemplate,
    sigma_ds: f64,
) -> Result<Vec<String>> {
    let scores = ds_caption_scores(teacher, captions, domain_labels, prompt)?;
    Ok(captions.iter().zip(scores).filter(|(_, s)| *s >= sigma_ds).map(|(c, _)| c.id.clone()).collect())
}

/// Domain-specific curation: the training pairs whose caption passes DS
/// selection, scored by that caption's best label cosine.
pub fn curate_ds(
    teacher: &ModelParams,
    training_pairs: &[(AudioItem, TextItem)],
    domain_labels: &[ClassLabel],
    prompt: &PromptTemplate,
    config: &CurationConfig,
) -> Result<CuratedPairSet> {
    config.validate()?;
    if training_pairs.is_empty() {
        return Err(Error::EmptyPool("training pairs"));
    }
    let captions: Vec<TextItem> = training_pairs.iter().map(|(_, t)| t.clone()).collect();
    let scores = ds_caption_scores(teacher, &captions, domain_labels, prompt)?;
    let mut seen = HashSet::new();
    let pairs = training_pairs
        .iter()
        .zip(scores)
        .filter(|(_, s)| *s >= config.sigma_ds)
        .filter(|((a, t), _)| seen.insert((a.id.clone(), t.id.clone())))
        .map(|((a, t), s)| CuratedPair {
            audio_id: a.id.clone(),
            text_id: t.id.clone(),
            similarity: s,
            strategy: Strategy::Ds,
        })
        .collect();
    Ok(CuratedPairSet { pairs, strategy: Strategy::Ds, config: *config, teacher_id: teacher.content_hash() })
}

/// Augmented domain-specific curation: DS caption selection followed by DU
/// matching of the selected captions against the wild pool.
pub fn curate_ads(
    teacher: &ModelParams,
    training_pairs: &[(AudioItem, TextItem)],
    domain_labels: &[ClassLabel],
    prompt: &PromptTemplate,
    wild_audio: &[AudioItem],
    config: &CurationConfig,
) -> Result<CuratedPairSet> {
    config.validate()?;
    let pool = AudioPool::embed(teacher, wild_audio)?;
    curate_ads_pool(teacher, training_pairs, domain_labels, prompt, &pool, config)
}

/// [`curate_ads`] against a pre-embedded pool.
pub fn curate_ads_pool(
    teacher: &ModelParams,
    training_pairs: &[(AudioItem, TextItem)],
    domain_labels: &[ClassLabel],
    prompt: &PromptTemplate,
    pool: &AudioPool,
    config: &CurationConfig,
) -> Result<CuratedPairSet> {
    config.validate()?;
    if training_pairs.is_empty() {
        return Err(Error::EmptyPool("training pairs"));
    }
    if pool.is_empty() {
        return Err(Error::EmptyPool("wild audio"));
    }
    let captions: Vec<TextItem> = training_pairs.iter().map(|(_, t)| t.clone()).collect();
    let scores = ds_caption_scores(teacher, &captions, domain_labels, prompt)?;
    let mut seen = HashSet::new();
    let selected: Vec<TextItem> = captions
        .into_iter()
        .zip(scores)
        .filter(|(c, s)| *s >= config.sigma_ds && seen.insert(c.id.clone()))
        .map(|(c, _)| c)
        .collect();
    if selected.is_empty() {
        return Err(Error::EmptyDsCaptionSet);
    }
    let caption_embeddings = encode_texts(teacher, &selected)?;
    let refs: Vec<&TextItem> = selected.iter().collect();
    let pairs = match_against_pool(&refs, &caption_embeddings, pool, config.sigma, config.match_mode, Strategy::Ads);
    Ok(CuratedPairSet { pairs, strategy: Strategy::Ads, config: *config, teacher_id: teacher.content_hash() })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BatchSource {
    Improvement,
    Replay,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BatchDraw {
    pub source: BatchSource,
    /// Indices into the chosen pool.
    pub indices: Vec<usize>,
}

/// Endless stream of batches, each taken from the replay pool with
/// probability `replay_prob` and from the Improvement-Set otherwise.
#[derive(Debug, Clone)]
pub struct ReplayMixer {
    replay_prob: f64,
    coin: ChaCha8Rng,
    improvement: Option<EpochSampler>,
    replay: Option<EpochSampler>,
}

pub fn mix_replay(
    improvement_len: usize,
    replay_len: usize,
    replay_prob: f64,
    batch_size: usize,
    seed: u64,
) -> Result<ReplayMixer> {
    if !(0.0..=1.0).contains(&replay_prob) {
        return Err(Error::InvalidProbability(replay_prob));
    }
    if batch_size == 0 {
        return Err(Error::InvalidConfig("batch size must be positive".into()));
    }
    let sampler = |len: usize, needed: bool, salt: u64| -> Result<Option<EpochSampler>> {
        if !needed {
            return Ok(None);
        }
        if len < batch_size {
            return Err(Error::InsufficientData { needed: batch_size, available: len });
        }
        Ok(Some(EpochSampler::new(len, batch_size, seed ^ salt)))
    };
    Ok(ReplayMixer {
        replay_prob,
        coin: ChaCha8Rng::seed_from_u64(seed),
        improvement: sampler(improvement_len, replay_prob < 1.0, 0x1a2b_3c4d)?,
        replay: sampler(replay_len, replay_prob > 0.0, 0x5e6f_7081)?,
    })
}

impl Iterator for ReplayMixer {
    type Item = BatchDraw;

    fn next(&mut self) -> Option<BatchDraw> {
        let from_replay = self.coin.random_bool(self.replay_prob);
        let (source, sampler) = if from_replay {
            (BatchSource::Replay, self.replay.as_mut())
        } else {
            (BatchSource::Improvement, self.improvement.as_mut())
        };
        let sampler = sampler.expect("sampler exists whenever its probability is positive");
        Some(BatchDraw { source, indices: sampler.next_batch() })
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct ManifestHeader {
    format_version: u64,
    strategy: Strategy,
    config: CurationConfig,
    teacher_checkpoint_id: String,
    pair_count: usize,
}

/// Writes a JSON-lines manifest: a header line, then one pair per line.
pub fn save_manifest(set: &CuratedPairSet, path: &Path) -> Result<()> {
    let mut w = JsonlWriter::create(path)?;
    w.write(&ManifestHeader {
        format_version: MANIFEST_FORMAT_VERSION,
        strategy: set.strategy,
        config: set.config,
        teacher_checkpoint_id: set.teacher_id.clone(),
        pair_count: set.pairs.len(),
    })?;
    for p in &set.pairs {
        w.write(p)?;
    }
    w.finish()
}

pub fn load_manifest(path: &Path) -> Result<CuratedPairSet> {
    let mut r = JsonlReader::open(path)?;
    let header: ManifestHeader = r.header(MANIFEST_FORMAT_VERSION)?;
    let mut pairs = Vec::with_capacity(header.pair_count);
    let mut seen = HashSet::new();
    while let Some(rec) = r.next_record::<CuratedPair>()? {
        if !rec.similarity.is_finite() {
            return Err(r.corrupt("non-finite similarity"));
        }
        if !seen.insert((rec.audio_id.clone(), rec.text_id.clone())) {
            return Err(r.corrupt("duplicate pair"));
        }
        pairs.push(rec);
    }
    if pairs.len() != header.pair_count {
        return Err(r.corrupt(format!("expected {} pairs, found {}", header.pair_count, pairs.len())));
    }
    Ok(CuratedPairSet {
        pairs,
        strategy: header.strategy,
        config: header.config,
        teacher_id: header.teacher_checkpoint_id,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoders::{init_params, ModelDims};
    use crate::zero_shot::labels_from_names;

    fn teacher() -> ModelParams {
        init_params(&ModelDims { embed_dim: 8, ..ModelDims::new(32, 4) }, 11).unwrap()
    }

    fn audio(n: usize) -> Vec<AudioItem> {
        (0..n).map(|i| AudioItem::new(format!("w{i}"), vec![i as f64 * 0.3 - 0.5, 1.0, -(i as f64), 0.2])).collect()
    }

    fn captions() -> Vec<TextItem> {
        ["dog barks", "rain falls", "a siren wails", "dog whines"]
            .iter()
            .enumerate()
            .map(|(i, c)| TextItem::from_caption(format!("c{i}"), c))
            .collect()
    }

    #[test]
    fn du_threshold_extremes() {
        let t = teacher();
        let all = curate_du(&t, &captions(), &audio(5), &CurationConfig { sigma: 0.0, ..Default::default() });
        // cosines may be negative, so sigma=0 need not keep everything here
        let all = all.unwrap();
        assert!(all.pairs.iter().all(|p| p.similarity >= 0.0));
        let none = curate_du(&t, &captions(), &audio(5), &CurationConfig { sigma: 1.0, ..Default::default() }).unwrap();
        assert!(none.pairs.iter().all(|p| p.similarity >= 1.0));
        assert!(matches!(curate_du(&t, &[], &audio(2), &CurationConfig::default()), Err(Error::EmptyPool(_))));
        assert!(matches!(curate_du(&t, &captions(), &[], &CurationConfig::default()), Err(Error::EmptyPool(_))));
    }

    #[test]
    fn top1_mode_keeps_at_most_one_caption_per_audio() {
        let t = teacher();
        let cfg = CurationConfig { sigma: 0.0, match_mode: MatchMode::Top1AboveThreshold, ..Default::default() };
        let set = curate_du(&t, &captions(), &audio(6), &cfg).unwrap();
        let mut ids: Vec<_> = set.pairs.iter().map(|p| p.audio_id.clone()).collect();
        let n = ids.len();
        ids.dedup();
        assert_eq!(ids.len(), n);
    }

    #[test]
    fn top1_ties_go_to_lowest_text_id() {
        let t = teacher();
        let caps = vec![TextItem::from_caption("b", "dog barks"), TextItem::from_caption("a", "barks dog")];
        let cfg = CurationConfig { sigma: -0.0, match_mode: MatchMode::Top1AboveThreshold, ..Default::default() };
        let pool = AudioPool::embed(&t, &audio(3)).unwrap();
        let set = curate_du_pool(&t, &caps, &pool, &CurationConfig { sigma: 0.0, ..cfg }).unwrap();
        assert!(set.pairs.iter().all(|p| p.text_id == "a"));
    }

    #[test]
    fn prompt_identical_caption_is_selected() {
        let t = teacher();
        let labels = labels_from_names(&["dog", "rain"]);
        let mut caps = captions();
        caps.push(TextItem::from_caption("p", "this is a sound of rain"));
        let ids = select_ds_captions(&t, &caps, &labels, &PromptTemplate::default(), 1.0 - 1e-12).unwrap();
        assert_eq!(ids, vec!["p".to_owned()]);
    }

    #[test]
    fn ads_with_unreachable_sigma_ds_fails() {
        let t = teacher();
        let pairs: Vec<_> = audio(4).into_iter().zip(captions()).collect();
        let labels = labels_from_names(&["dog"]);
        let cfg = CurationConfig { sigma_ds: 1.0, ..Default::default() };
        let err = curate_ads(&t, &pairs, &labels, &PromptTemplate::default(), &audio(3), &cfg);
        assert!(matches!(err, Err(Error::EmptyDsCaptionSet)));
    }

    #[test]
    fn invalid_thresholds_rejected() {
        let cfg = CurationConfig { sigma: 1.5, ..Default::default() };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn replay_extremes() {
        let m = mix_replay(10, 10, 0.0, 2, 1).unwrap();
        assert!(m.take(200).all(|d| d.source == BatchSource::Improvement));
        let m = mix_replay(10, 10, 1.0, 2, 1).unwrap();
        assert!(m.take(200).all(|d| d.source == BatchSource::Replay));
        let m = mix_replay(10, 0, 0.0, 2, 1).unwrap();
        assert_eq!(m.take(3).count(), 3);
        assert!(matches!(mix_replay(10, 10, 1.5, 2, 1), Err(Error::InvalidProbability(_))));
        assert!(matches!(mix_replay(10, 1, 0.5, 2, 1), Err(Error::InsufficientData { .. })));
    }

    #[test]
    fn replay_is_seeded() {
        let a: Vec<_> = mix_replay(12, 9, 0.4, 3, 5).unwrap().take(50).collect();
        let b: Vec<_> = mix_replay(12, 9, 0.4, 3, 5).unwrap().take(50).collect();
        assert_eq!(a, b);
    }
}
