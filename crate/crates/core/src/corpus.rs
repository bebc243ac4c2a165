//! Synthetic two-modality corpora, their JSON-lines persistence, and a
//! teacher-keyed binary cache of audio embeddings.
//!
//! Corpus file layout: a header line
//! `{"format_version":1,"class_names":[..],"counts":{"pair":n,"wild":n,"eval":n}}`
//! followed by one record per item:
//! `{"id":..,"kind":"pair"|"wild"|"eval","class":k|null,"caption":..|null,"features":[..]}`.

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use rand::seq::{IndexedRandom, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::curation::AudioPool;
use crate::embedding::{EmbeddingBatch, Modality};
use crate::encoders::{encode_audios, AudioItem, ModelParams, TextItem};
use crate::error::{Error, Result};
use crate::jsonl::{JsonlReader, JsonlWriter};
use crate::zero_shot::{labels_from_names, ClassLabel};

pub const CORPUS_FORMAT_VERSION: u64 = 1;
pub const CACHE_FORMAT_VERSION: u64 = 1;

const SOUND_NAMES: &[&str] = &[
    "dog",
    "rain",
    "siren",
    "engine",
    "bird",
    "crying",
    "clock",
    "helicopter",
    "chainsaw",
    "rooster",
    "sea",
    "crackling",
    "sneezing",
    "keyboard",
    "vacuum",
    "door",
    "thunder",
    "train",
    "cow",
    "church",
    "laughing",
    "footsteps",
    "glass",
    "airplane",
    "cat",
    "frog",
    "insects",
    "wind",
    "toilet",
    "hen",
];

const FILLER: &[&str] = &[
    "a",
    "the",
    "is",
    "heard",
    "in",
    "background",
    "loud",
    "quiet",
    "distant",
    "nearby",
    "while",
    "someone",
    "outside",
    "recording",
    "with",
    "and",
    "this",
    "sound",
    "of",
    "sounds",
    "there",
    "can",
    "be",
];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitFractions {
    pub teacher_train: f64,
    pub wild_pool: f64,
    pub eval: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticCorpusSpec {
    pub num_classes: usize,
    pub items_per_class: usize,
    pub feature_dim: usize,
    /// Standard deviation of the per-coordinate Gaussian noise around each
    /// class prototype.
    pub noise_scale: f64,
    /// Tokens in each class vocabulary, including the class name.
    pub vocab_per_class: usize,
    /// Fraction of a class vocabulary borrowed from the next class.
    pub vocab_overlap: f64,
    /// Class tokens per caption; the first is always the class name.
    pub caption_class_tokens: usize,
    /// Shared filler tokens per caption.
    pub caption_filler_tokens: usize,
    /// Length of a fixed offset added to wild and eval audio, modelling a
    /// recording-condition shift between the caption corpus and the target
    /// domain.
    pub domain_shift: f64,
    pub seed: u64,
    pub splits: SplitFractions,
}

impl Default for SyntheticCorpusSpec {
    fn default() -> Self {
        Self {
            num_classes: 10,
            items_per_class: 50,
            feature_dim: 32,
            noise_scale: 0.2,
            vocab_per_class: 4,
            vocab_overlap: 0.0,
            caption_class_tokens: 2,
            caption_filler_tokens: 2,
            domain_shift: 0.0,
            seed: 0,
            splits: SplitFractions { teacher_train: 0.6, wild_pool: 0.2, eval: 0.2 },
        }
    }
}

impl SyntheticCorpusSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidSpec(msg));
        if self.num_classes < 2 {
            return bad(format!("need at least 2 classes, got {}", self.num_classes));
        }
        if self.items_per_class == 0 || self.feature_dim == 0 {
            return bad("items_per_class and feature_dim must be positive".into());
        }
        if !(self.noise_scale >= 0.0 && self.noise_scale.is_finite()) {
            return bad(format!("noise_scale must be non-negative, got {}", self.noise_scale));
        }
        if !(self.domain_shift >= 0.0 && self.domain_shift.is_finite()) {
            return bad(format!("domain_shift must be non-negative, got {}", self.domain_shift));
        }
        if self.vocab_per_class == 0 || self.caption_class_tokens == 0 {
            return bad("captions need at least one class token".into());
        }
        if !(0.0..=1.0).contains(&self.vocab_overlap) || self.shared_tokens() >= self.vocab_per_class {
            return bad(format!("vocab_overlap {} leaves no class-specific tokens", self.vocab_overlap));
        }
        let s = self.splits;
        if [s.teacher_train, s.wild_pool, s.eval].iter().any(|f| !(0.0..=1.0).contains(f)) {
            return bad("split fractions must lie in [0, 1]".into());
        }
        if (s.teacher_train + s.wild_pool + s.eval - 1.0).abs() > 1e-9 {
            return bad("split fractions must sum to 1".into());
        }
        Ok(())
    }

    fn shared_tokens(&self) -> usize {
        (self.vocab_overlap * self.vocab_per_class as f64).round() as usize
    }

    /// Per-class item counts for (teacher_train, wild_pool, eval).
    pub fn split_counts(&self) -> (usize, usize, usize) {
        let n = self.items_per_class as f64;
        let train = (self.splits.teacher_train * n).round() as usize;
        let wild = ((self.splits.wild_pool * n).round() as usize).min(self.items_per_class - train);
        (train, wild, self.items_per_class - train - wild)
    }

    pub fn class_names(&self) -> Vec<String> {
        (0..self.num_classes)
            .map(|k| match SOUND_NAMES.get(k) {
                Some(name) => (*name).to_owned(),
                None => format!("sound{k}"),
            })
            .collect()
    }

    /// Token vocabulary of every class.
    pub fn class_vocabularies(&self) -> Vec<Vec<String>> {
        let names = self.class_names();
        let own: Vec<Vec<String>> = names
            .iter()
            .map(|n| std::iter::once(n.clone()).chain((1..self.vocab_per_class).map(|j| format!("{n}_{j}"))).collect())
            .collect();
        let shared = self.shared_tokens();
        (0..self.num_classes)
            .map(|k| {
                let next = &own[(k + 1) % self.num_classes];
                let mut v = own[k][..self.vocab_per_class - shared].to_vec();
                v.extend(next[1..=shared].iter().cloned());
                v
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PairRecord {
    pub audio: AudioItem,
    pub text: TextItem,
    pub class: usize,
}

/// Unpaired audio. The class is bookkeeping for analysis only.
#[derive(Debug, Clone, PartialEq)]
pub struct WildRecord {
    pub audio: AudioItem,
    pub class: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalRecord {
    pub audio: AudioItem,
    pub class: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub class_names: Vec<String>,
    pub pairs: Vec<PairRecord>,
    pub wild: Vec<WildRecord>,
    pub eval: Vec<EvalRecord>,
}

impl Corpus {
    pub fn training_pairs(&self) -> Vec<(AudioItem, TextItem)> {
        self.pairs.iter().map(|p| (p.audio.clone(), p.text.clone())).collect()
    }

    pub fn captions(&self) -> Vec<TextItem> {
        self.pairs.iter().map(|p| p.text.clone()).collect()
    }

    /// Wild-pool audio without any class information.
    pub fn wild_audio(&self) -> Vec<AudioItem> {
        self.wild.iter().map(|w| w.audio.clone()).collect()
    }

    pub fn labeled_eval(&self) -> Vec<(AudioItem, usize)> {
        self.eval.iter().map(|e| (e.audio.clone(), e.class)).collect()
    }

    pub fn labels(&self) -> Vec<ClassLabel> {
        labels_from_names(&self.class_names)
    }

    pub fn feature_dim(&self) -> usize {
        self.pairs
            .first()
            .map(|p| p.audio.features.len())
            .or_else(|| self.wild.first().map(|w| w.audio.features.len()))
            .or_else(|| self.eval.first().map(|e| e.audio.features.len()))
            .unwrap_or(0)
    }
}

fn unit_gaussian(dim: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.into_iter().map(|x| x / norm).collect()
}

pub fn generate(spec: &SyntheticCorpusSpec) -> Result<Corpus> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let f = spec.feature_dim;
    let prototypes: Vec<Vec<f64>> = (0..spec.num_classes).map(|_| unit_gaussian(f, &mut rng)).collect();
    let shift: Vec<f64> = unit_gaussian(f, &mut rng).into_iter().map(|x| x * spec.domain_shift).collect();
    let vocab = spec.class_vocabularies();
    let (n_train, n_wild, n_eval) = spec.split_counts();

    let sample = |class: usize, shifted: bool, rng: &mut ChaCha8Rng| -> Vec<f64> {
        (0..f)
            .map(|i| {
                let noise: f64 = StandardNormal.sample(rng);
                let base = prototypes[class][i] + spec.noise_scale * noise;
                if shifted {
                    base + shift[i]
                } else {
                    base
                }
            })
            .collect()
    };

    let mut train = Vec::new();
    let mut wild = Vec::new();
    let mut eval = Vec::new();
    for (k, words) in vocab.iter().enumerate() {
        for _ in 0..n_train {
            let features = sample(k, false, &mut rng);
            let mut tokens = vec![words[0].clone()];
            tokens.extend((1..spec.caption_class_tokens).map(|_| words.choose(&mut rng).expect("vocab").clone()));
            tokens.extend(
                (0..spec.caption_filler_tokens).map(|_| (*FILLER.choose(&mut rng).expect("filler")).to_owned()),
            );
            tokens.shuffle(&mut rng);
            train.push((features, tokens, k));
        }
        for _ in 0..n_wild {
            wild.push((sample(k, true, &mut rng), k));
        }
        for _ in 0..n_eval {
            eval.push((sample(k, true, &mut rng), k));
        }
    }
    train.shuffle(&mut rng);
    wild.shuffle(&mut rng);
    eval.shuffle(&mut rng);

    Ok(Corpus {
        class_names: spec.class_names(),
        pairs: train
            .into_iter()
            .enumerate()
            .map(|(i, (features, tokens, class))| {
                let id = format!("pair-{i:05}");
                PairRecord { audio: AudioItem::new(id.clone(), features), text: TextItem { id, tokens }, class }
            })
            .collect(),
        wild: wild
            .into_iter()
            .enumerate()
            .map(|(i, (features, class))| WildRecord { audio: AudioItem::new(format!("wild-{i:05}"), features), class })
            .collect(),
        eval: eval
            .into_iter()
            .enumerate()
            .map(|(i, (features, class))| EvalRecord { audio: AudioItem::new(format!("eval-{i:05}"), features), class })
            .collect(),
    })
}

#[derive(Debug, Serialize, Deserialize)]
struct Counts {
    pair: usize,
    wild: usize,
    eval: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct CorpusHeader {
    format_version: u64,
    class_names: Vec<String>,
    counts: Counts,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
enum RecordKind {
    Pair,
    Wild,
    Eval,
}

#[derive(Debug, Serialize, Deserialize)]
struct CorpusRecord {
    id: String,
    kind: RecordKind,
    class: Option<usize>,
    caption: Option<String>,
    features: Vec<f64>,
}

pub fn save_corpus(corpus: &Corpus, path: &Path) -> Result<()> {
    let mut w = JsonlWriter::create(path)?;
    w.write(&CorpusHeader {
        format_version: CORPUS_FORMAT_VERSION,
        class_names: corpus.class_names.clone(),
        counts: Counts { pair: corpus.pairs.len(), wild: corpus.wild.len(), eval: corpus.eval.len() },
    })?;
    for p in &corpus.pairs {
        w.write(&CorpusRecord {
            id: p.audio.id.clone(),
            kind: RecordKind::Pair,
            class: Some(p.class),
            caption: Some(p.text.caption()),
            features: p.audio.features.clone(),
        })?;
    }
    for (kind, items) in [
        (RecordKind::Wild, corpus.wild.iter().map(|w| (&w.audio, w.class)).collect::<Vec<_>>()),
        (RecordKind::Eval, corpus.eval.iter().map(|e| (&e.audio, e.class)).collect()),
    ] {
        for (audio, class) in items {
            w.write(&CorpusRecord {
                id: audio.id.clone(),
                kind,
                class: Some(class),
                caption: None,
                features: audio.features.clone(),
            })?;
        }
    }
    w.finish()
}

pub fn load_corpus(path: &Path) -> Result<Corpus> {
    let mut r = JsonlReader::open(path)?;
    let header: CorpusHeader = r.header(CORPUS_FORMAT_VERSION)?;
    let k = header.class_names.len();
    let mut corpus = Corpus { class_names: header.class_names, pairs: Vec::new(), wild: Vec::new(), eval: Vec::new() };
    let mut ids = HashSet::new();
    let mut dim = None;
    while let Some(rec) = r.next_record::<CorpusRecord>()? {
        if rec.features.iter().any(|v| !v.is_finite()) {
            return Err(r.corrupt("non-finite feature"));
        }
        if *dim.get_or_insert(rec.features.len()) != rec.features.len() || rec.features.is_empty() {
            return Err(r.corrupt("inconsistent feature length"));
        }
        if !ids.insert(rec.id.clone()) {
            return Err(r.corrupt(format!("duplicate id {}", rec.id)));
        }
        let class = match rec.class {
            Some(c) if c < k => c,
            Some(c) => return Err(r.corrupt(format!("class {c} out of range"))),
            None => return Err(r.corrupt("missing class")),
        };
        let audio = AudioItem::new(rec.id.clone(), rec.features);
        match rec.kind {
            RecordKind::Pair => {
                let caption = rec.caption.ok_or_else(|| r.corrupt("pair without caption"))?;
                let text = TextItem::from_caption(rec.id, &caption);
                if text.tokens.is_empty() {
                    return Err(r.corrupt("empty caption"));
                }
                corpus.pairs.push(PairRecord { audio, text, class });
            }
            RecordKind::Wild => corpus.wild.push(WildRecord { audio, class }),
            RecordKind::Eval => corpus.eval.push(EvalRecord { audio, class }),
        }
    }
    let c = &header.counts;
    if (corpus.pairs.len(), corpus.wild.len(), corpus.eval.len()) != (c.pair, c.wild, c.eval) {
        return Err(r.corrupt(format!(
            "record counts {}/{}/{} do not match header {}/{}/{}",
            corpus.pairs.len(),
            corpus.wild.len(),
            corpus.eval.len(),
            c.pair,
            c.wild,
            c.eval
        )));
    }
    Ok(corpus)
}

/// Unit-norm audio embeddings keyed by item id and teacher content hash.
///
/// Stored as raw little-endian `f64` rows in `<path>` with a JSON sidecar at
/// `<path>.json` holding the ids, shape and teacher hash.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingCache {
    pub teacher_hash: String,
    pub ids: Vec<String>,
    pub embeddings: Array2<f64>,
}

#[derive(Debug, Serialize, Deserialize)]
struct CacheHeader {
    format_version: u64,
    teacher_hash: String,
    rows: usize,
    dim: usize,
    ids: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CacheStatus {
    Hit,
    Missing,
    Stale,
}

fn sidecar(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

impl EmbeddingCache {
    pub fn build(teacher: &ModelParams, items: &[AudioItem]) -> Result<Self> {
        let batch = encode_audios(teacher, items)?;
        Ok(Self {
            teacher_hash: teacher.content_hash(),
            ids: items.iter().map(|a| a.id.clone()).collect(),
            embeddings: batch.into_rows(),
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let header = CacheHeader {
            format_version: CACHE_FORMAT_VERSION,
            teacher_hash: self.teacher_hash.clone(),
            rows: self.embeddings.nrows(),
            dim: self.embeddings.ncols(),
            ids: self.ids.clone(),
        };
        let side = sidecar(path);
        fs::write(&side, serde_json::to_vec(&header).expect("header serializes")).map_err(|e| Error::io(&side, e))?;
        let bytes: Vec<u8> = self.embeddings.iter().flat_map(|v| v.to_le_bytes()).collect();
        fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let side = sidecar(path);
        let raw = fs::read(&side).map_err(|e| Error::io(&side, e))?;
        let value: serde_json::Value = serde_json::from_slice(&raw).map_err(|e| Error::corrupt(&side, 1, e))?;
        let found = value.get("format_version").and_then(serde_json::Value::as_u64).unwrap_or(0);
        if found != CACHE_FORMAT_VERSION {
            return Err(Error::FormatVersionMismatch { path: side, found, expected: CACHE_FORMAT_VERSION });
        }
        let header: CacheHeader = serde_json::from_value(value).map_err(|e| Error::corrupt(&side, 1, e))?;
        if header.ids.len() != header.rows {
            return Err(Error::corrupt(&side, 1, "id count does not match rows"));
        }
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        if bytes.len() != header.rows * header.dim * 8 {
            return Err(Error::corrupt(
                path,
                0,
                format!("expected {} bytes, found {}", header.rows * header.dim * 8, bytes.len()),
            ));
        }
        let values: Vec<f64> =
            bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk"))).collect();
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::corrupt(path, 0, "non-finite embedding"));
        }
        let embeddings = Array2::from_shape_vec((header.rows, header.dim), values).expect("shape checked");
        Ok(Self { teacher_hash: header.teacher_hash, ids: header.ids, embeddings })
    }

    /// Embeddings for `items` in order. Fails with `StaleCache` when the
    /// cache was built by a different teacher.
    pub fn pool_for(&self, teacher: &ModelParams, items: &[AudioItem]) -> Result<AudioPool> {
        if teacher.content_hash() != self.teacher_hash {
            return Err(Error::StaleCache);
        }
        if items.is_empty() {
            return Err(Error::EmptyPool("wild audio"));
        }
        let index: std::collections::HashMap<&str, usize> =
            self.ids.iter().enumerate().map(|(i, id)| (id.as_str(), i)).collect();
        let mut rows = Array2::zeros((items.len(), self.embeddings.ncols()));
        for (r, item) in items.iter().enumerate() {
            let i = *index
                .get(item.id.as_str())
                .ok_or_else(|| Error::UnknownId { kind: "cached audio", id: item.id.clone() })?;
            rows.row_mut(r).assign(&self.embeddings.row(i));
        }
        Ok(AudioPool {
            ids: items.iter().map(|a| a.id.clone()).collect(),
            embeddings: EmbeddingBatch::from_normalized(rows, Modality::Audio),
        })
    }
}

/// Loads the cache at `path` if it matches `teacher`, otherwise recomputes
/// and rewrites it.
pub fn cached_audio_pool(teacher: &ModelParams, items: &[AudioItem], path: &Path) -> Result<(AudioPool, CacheStatus)> {
    let status = if path.exists() {
        let cache = EmbeddingCache::load(path)?;
        match cache.pool_for(teacher, items) {
            Ok(pool) => return Ok((pool, CacheStatus::Hit)),
            Err(Error::StaleCache) | Err(Error::UnknownId { .. }) => CacheStatus::Stale,
            Err(e) => return Err(e),
        }
    } else {
        CacheStatus::Missing
    };
    let cache = EmbeddingCache::build(teacher, items)?;
    cache.save(path)?;
    Ok((cache.pool_for(teacher, items)?, status))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec() -> SyntheticCorpusSpec {
        SyntheticCorpusSpec { num_classes: 3, items_per_class: 10, feature_dim: 8, seed: 5, ..Default::default() }
    }

    #[test]
    fn generation_is_seeded_and_split() {
        let a = generate(&spec()).unwrap();
        assert_eq!(a, generate(&spec()).unwrap());
        assert_ne!(a, generate(&SyntheticCorpusSpec { seed: 6, ..spec() }).unwrap());
        assert_eq!((a.pairs.len(), a.wild.len(), a.eval.len()), (18, 6, 6));
        let mut ids: Vec<&str> = a
            .pairs
            .iter()
            .map(|p| p.audio.id.as_str())
            .chain(a.wild.iter().map(|w| w.audio.id.as_str()))
            .chain(a.eval.iter().map(|e| e.audio.id.as_str()))
            .collect();
        ids.sort_unstable();
        ids.dedup();
        assert_eq!(ids.len(), 30);
    }

    #[test]
    fn zero_noise_collapses_classes() {
        let c = generate(&SyntheticCorpusSpec { noise_scale: 0.0, ..spec() }).unwrap();
        for p in &c.pairs {
            let same = c.pairs.iter().find(|q| q.class == p.class).unwrap();
            assert_eq!(p.audio.features, same.audio.features);
        }
    }

    #[test]
    fn captions_use_class_vocabulary() {
        let s = spec();
        let vocab = s.class_vocabularies();
        let c = generate(&s).unwrap();
        for p in &c.pairs {
            let class_tokens = p.text.tokens.iter().filter(|t| vocab[p.class].contains(t)).count();
            assert!(class_tokens >= s.caption_class_tokens);
        }
    }

    #[test]
    fn overlap_borrows_from_next_class() {
        let s = SyntheticCorpusSpec { vocab_per_class: 4, vocab_overlap: 0.5, ..spec() };
        let v = s.class_vocabularies();
        assert_eq!(v[0], vec!["dog", "dog_1", "rain_1", "rain_2"]);
    }

    #[test]
    fn invalid_specs() {
        for bad in [
            SyntheticCorpusSpec { num_classes: 1, ..spec() },
            SyntheticCorpusSpec { noise_scale: -1.0, ..spec() },
            SyntheticCorpusSpec { vocab_overlap: 1.0, ..spec() },
            SyntheticCorpusSpec { splits: SplitFractions { teacher_train: 0.5, wild_pool: 0.2, eval: 0.2 }, ..spec() },
        ] {
            assert!(matches!(generate(&bad), Err(Error::InvalidSpec(_))));
        }
    }
}
