#![allow(dead_code)]

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use sonalign::curation::{CuratedPair, MatchMode};
use sonalign::embedding::{SimilarityKind, SimilarityMatrix};
use sonalign::encoders::{encode_audios, encode_texts, init_params, AudioItem, ModelDims, ModelParams, TextItem};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_matrix(rng: &mut impl Rng, rows: usize, cols: usize, scale: f64) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| rng.random_range(-scale..scale))
}

pub fn cross(c: Array2<f64>) -> SimilarityMatrix {
    SimilarityMatrix::new(c, SimilarityKind::CrossModal).unwrap()
}

/// Small random model with every width in `max_dim / 2..=max_dim`, wide
/// enough that no ReLU layer goes entirely dead.
pub fn small_model(rng: &mut impl Rng, audio_dim: usize, max_dim: usize) -> ModelParams {
    let mut w = || rng.random_range(max_dim / 2..=max_dim);
    let mut dims = ModelDims::new(16, audio_dim);
    dims.encoder_hidden = w();
    dims.text_latent = w();
    dims.audio_latent = w();
    dims.projection_hidden = w();
    dims.embed_dim = w();
    let seed = rng.random();
    dims.text_hash_seed = rng.random();
    init_params(&dims, seed).unwrap()
}

pub const WORDS: &[&str] = &[
    "dog", "bark", "rain", "drip", "siren", "wail", "bird", "chirp", "engine", "hum", "door", "knock", "a", "the",
    "loud", "soft",
];

pub fn random_caption(rng: &mut impl Rng, id: String) -> TextItem {
    let n = rng.random_range(1..=5);
    let tokens: Vec<String> = (0..n).map(|_| WORDS[rng.random_range(0..WORDS.len())].to_owned()).collect();
    TextItem { id, tokens }
}

pub fn random_audio(rng: &mut impl Rng, id: String, dim: usize) -> AudioItem {
    AudioItem::new(id, (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect())
}

/// A random toy corpus: `n_pairs` training pairs and `n_wild` unpaired audio.
pub struct ToyCorpus {
    pub model: ModelParams,
    pub pairs: Vec<(AudioItem, TextItem)>,
    pub wild: Vec<AudioItem>,
}

pub fn toy_corpus(seed: u64, n_pairs: usize, n_wild: usize) -> ToyCorpus {
    let mut r = rng(seed);
    let dim = 6;
    let model = small_model(&mut r, dim, 32);
    let pairs = (0..n_pairs)
        .map(|i| (random_audio(&mut r, format!("p{i}"), dim), random_caption(&mut r, format!("t{i}"))))
        .collect();
    let wild = (0..n_wild).map(|i| random_audio(&mut r, format!("w{i}"), dim)).collect();
    ToyCorpus { model, pairs, wild }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn text_rows(model: &ModelParams, texts: &[TextItem]) -> Vec<Vec<f64>> {
    encode_texts(model, texts).unwrap().rows().rows().into_iter().map(|r| r.to_vec()).collect()
}

pub fn audio_rows(model: &ModelParams, audios: &[AudioItem]) -> Vec<Vec<f64>> {
    encode_audios(model, audios).unwrap().rows().rows().into_iter().map(|r| r.to_vec()).collect()
}

/// Double-loop cross-modal filter: `(audio_id, text_id)` in pool order.
pub fn brute_match(
    model: &ModelParams,
    captions: &[TextItem],
    wild: &[AudioItem],
    sigma: f64,
    mode: MatchMode,
) -> Vec<(String, String)> {
    let t = text_rows(model, captions);
    let a = audio_rows(model, wild);
    let mut out = Vec::new();
    for (j, audio) in wild.iter().enumerate() {
        match mode {
            MatchMode::AllAboveThreshold => {
                for (i, caption) in captions.iter().enumerate() {
                    if dot(&a[j], &t[i]) >= sigma {
                        out.push((audio.id.clone(), caption.id.clone()));
                    }
                }
            }
            MatchMode::Top1AboveThreshold => {
                let mut best: Option<(usize, f64)> = None;
                for i in 0..captions.len() {
                    let s = dot(&a[j], &t[i]);
                    let better = match best {
                        None => true,
                        Some((b, bs)) => s > bs || (s == bs && captions[i].id < captions[b].id),
                    };
                    if better {
                        best = Some((i, s));
                    }
                }
                if let Some((i, s)) = best {
                    if s >= sigma {
                        out.push((audio.id.clone(), captions[i].id.clone()));
                    }
                }
            }
        }
    }
    out
}

/// Per caption, the best cosine against any prompt, by double loop.
pub fn brute_ds_scores(model: &ModelParams, captions: &[TextItem], prompts: &[TextItem]) -> Vec<f64> {
    let t = text_rows(model, captions);
    let p = text_rows(model, prompts);
    t.iter()
        .map(|c| {
            let mut best = f64::NEG_INFINITY;
            for q in &p {
                best = best.max(dot(c, q));
            }
            best
        })
        .collect()
}

pub fn ids(pairs: &[CuratedPair]) -> Vec<(String, String)> {
    pairs.iter().map(|p| (p.audio_id.clone(), p.text_id.clone())).collect()
}
