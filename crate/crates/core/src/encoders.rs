//! Toy dual encoders: a hashed bag-of-tokens text featurizer, identity audio
//! features, and trainable ReLU MLP towers with two-layer projection heads.

use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::embedding::{normalize_backward, normalize_rows, EmbeddingBatch, Modality};
use crate::error::{Error, Result};

/// Temperature the contrastive loss starts from.
pub const INITIAL_TEMPERATURE: f64 = 0.007;

/// Number of signed hash slots each token lights up.
const SLOTS_PER_TOKEN: usize = 4;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TextItem {
    pub id: String,
    pub tokens: Vec<String>,
}

impl TextItem {
    /// Splits `caption` on whitespace.
    pub fn from_caption(id: impl Into<String>, caption: &str) -> Self {
        Self { id: id.into(), tokens: caption.split_whitespace().map(str::to_owned).collect() }
    }

    pub fn caption(&self) -> String {
        self.tokens.join(" ")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AudioItem {
    pub id: String,
    pub features: Vec<f64>,
}

impl AudioItem {
    pub fn new(id: impl Into<String>, features: Vec<f64>) -> Self {
        Self { id: id.into(), features }
    }
}

fn token_slots(token: &str, seed: u64, vocab_dim: usize) -> [(usize, f64); SLOTS_PER_TOKEN] {
    let mut hasher = Sha256::new();
    hasher.update(seed.to_le_bytes());
    hasher.update(token.as_bytes());
    let digest = hasher.finalize();
    let mut slots = [(0usize, 0.0f64); SLOTS_PER_TOKEN];
    for (k, slot) in slots.iter_mut().enumerate() {
        let chunk: [u8; 8] = digest[k * 8..(k + 1) * 8].try_into().expect("sha256 is 32 bytes");
        let h = u64::from_le_bytes(chunk);
        let sign = if h >> 63 == 0 { 1.0 } else { -1.0 };
        *slot = ((h % vocab_dim as u64) as usize, sign);
    }
    slots
}

/// Hashed bag-of-tokens features, L2-normalized. Token order does not matter.
pub fn featurize_text(item: &TextItem, vocab_dim: usize, seed: u64) -> Result<Vec<f64>> {
    if vocab_dim < 8 {
        return Err(Error::InvalidDims(format!("vocab_dim must be at least 8, got {vocab_dim}")));
    }
    if item.tokens.is_empty() {
        return Err(Error::EmptyTokenList);
    }
    let mut out = vec![0.0; vocab_dim];
    for token in &item.tokens {
        for (idx, sign) in token_slots(token, seed, vocab_dim) {
            out[idx] += sign;
        }
    }
    let norm = out.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm == 0.0 {
        // every slot cancelled; fall back to a fixed direction
        out[0] = 1.0;
    } else {
        out.iter_mut().for_each(|v| *v /= norm);
    }
    Ok(out)
}

/// Audio items already carry their feature vector.
pub fn featurize_audio(item: &AudioItem) -> &[f64] {
    &item.features
}

/// Dense layer computing `x W + b` with `W` stored as `in x out`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl Dense {
    pub fn input_dim(&self) -> usize {
        self.weight.nrows()
    }

    pub fn output_dim(&self) -> usize {
        self.weight.ncols()
    }
}

/// Feed-forward stack: ReLU between layers, identity on the last.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    pub layers: Vec<Dense>,
}

#[derive(Debug, Clone)]
pub struct MlpCache {
    inputs: Vec<Array2<f64>>,
    pre_activations: Vec<Array2<f64>>,
}

impl Mlp {
    fn init(widths: &[usize], rng: &mut ChaCha8Rng) -> Self {
        let layers = widths
            .windows(2)
            .map(|w| {
                let bound = 1.0 / (w[0] as f64).sqrt();
                let weight = Array2::from_shape_fn((w[0], w[1]), |_| rng.random_range(-bound..bound));
                Dense { weight, bias: Array1::zeros(w[1]) }
            })
            .collect();
        Self { layers }
    }

    fn zeros_like(&self) -> Self {
        let layers = self
            .layers
            .iter()
            .map(|l| Dense { weight: Array2::zeros(l.weight.dim()), bias: Array1::zeros(l.bias.len()) })
            .collect();
        Self { layers }
    }

    pub fn input_dim(&self) -> usize {
        self.layers.first().map_or(0, Dense::input_dim)
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map_or(0, Dense::output_dim)
    }

    pub fn forward(&self, x: &ArrayView2<'_, f64>) -> (Array2<f64>, MlpCache) {
        let last = self.layers.len() - 1;
        let mut cache = MlpCache { inputs: Vec::with_capacity(self.layers.len()), pre_activations: Vec::new() };
        let mut h = x.to_owned();
        for (i, layer) in self.layers.iter().enumerate() {
            let z = h.dot(&layer.weight) + &layer.bias;
            cache.inputs.push(h);
            h = if i < last { z.mapv(|v| v.max(0.0)) } else { z.clone() };
            cache.pre_activations.push(z);
        }
        (h, cache)
    }

    /// Accumulates parameter gradients into `grads` and returns the gradient
    /// with respect to the input.
    pub fn backward(&self, cache: &MlpCache, grad_out: Array2<f64>, grads: &mut Mlp) -> Array2<f64> {
        let last = self.layers.len() - 1;
        let mut g = grad_out;
        for i in (0..self.layers.len()).rev() {
            if i < last {
                g.zip_mut_with(&cache.pre_activations[i], |gv, &z| {
                    if z <= 0.0 {
                        *gv = 0.0;
                    }
                });
            }
            grads.layers[i].weight += &cache.inputs[i].t().dot(&g);
            grads.layers[i].bias += &g.sum_axis(Axis(0));
            g = g.dot(&self.layers[i].weight.t());
        }
        g
    }
}

/// Layer widths and featurizer settings for both towers.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelDims {
    /// Hashed text feature width.
    pub vocab_dim: usize,
    /// Seed of the text feature hash.
    pub text_hash_seed: u64,
    /// Audio feature width `F`.
    pub audio_dim: usize,
    pub encoder_hidden: usize,
    /// Text latent width `T`.
    pub text_latent: usize,
    /// Audio latent width `A`.
    pub audio_latent: usize,
    pub projection_hidden: usize,
    /// Shared embedding width `d`.
    pub embed_dim: usize,
}

impl ModelDims {
    pub fn new(vocab_dim: usize, audio_dim: usize) -> Self {
        Self {
            vocab_dim,
            text_hash_seed: 0,
            audio_dim,
            encoder_hidden: 64,
            text_latent: 32,
            audio_latent: 32,
            projection_hidden: 32,
            embed_dim: 32,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.vocab_dim < 8 {
            return Err(Error::InvalidDims(format!("vocab_dim must be at least 8, got {}", self.vocab_dim)));
        }
        let widths = [
            ("audio_dim", self.audio_dim),
            ("encoder_hidden", self.encoder_hidden),
            ("text_latent", self.text_latent),
            ("audio_latent", self.audio_latent),
            ("projection_hidden", self.projection_hidden),
            ("embed_dim", self.embed_dim),
        ];
        for (name, w) in widths {
            if w == 0 {
                return Err(Error::InvalidDims(format!("{name} must be positive")));
            }
        }
        Ok(())
    }
}

/// Weights of both towers plus the log of the contrastive temperature.
///
/// The same type carries gradients, with `log_temperature` holding the
/// derivative with respect to `ln tau`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub dims: ModelDims,
    pub text_encoder: Mlp,
    pub audio_encoder: Mlp,
    pub text_projection: Mlp,
    pub audio_projection: Mlp,
    pub log_temperature: f64,
}

pub fn init_params(dims: &ModelDims, seed: u64) -> Result<ModelParams> {
    dims.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let text_encoder = Mlp::init(&[dims.vocab_dim, dims.encoder_hidden, dims.text_latent], &mut rng);
    let audio_encoder = Mlp::init(&[dims.audio_dim, dims.encoder_hidden, dims.audio_latent], &mut rng);
    let text_projection = Mlp::init(&[dims.text_latent, dims.projection_hidden, dims.embed_dim], &mut rng);
    let audio_projection = Mlp::init(&[dims.audio_latent, dims.projection_hidden, dims.embed_dim], &mut rng);
    Ok(ModelParams {
        dims: dims.clone(),
        text_encoder,
        audio_encoder,
        text_projection,
        audio_projection,
        log_temperature: INITIAL_TEMPERATURE.ln(),
    })
}

impl ModelParams {
    pub fn temperature(&self) -> f64 {
        self.log_temperature.exp()
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            dims: self.dims.clone(),
            text_encoder: self.text_encoder.zeros_like(),
            audio_encoder: self.audio_encoder.zeros_like(),
            text_projection: self.text_projection.zeros_like(),
            audio_projection: self.audio_projection.zeros_like(),
            log_temperature: 0.0,
        }
    }

    fn towers(&self) -> [(&'static str, &Mlp); 4] {
        [
            ("text_encoder", &self.text_encoder),
            ("audio_encoder", &self.audio_encoder),
            ("text_projection", &self.text_projection),
            ("audio_projection", &self.audio_projection),
        ]
    }

    /// Every tensor as a named flat slice, in a fixed order.
    pub fn tensors(&self) -> Vec<(String, &[f64])> {
        let mut out = Vec::new();
        for (name, mlp) in self.towers() {
            for (i, layer) in mlp.layers.iter().enumerate() {
                out.push((format!("{name}.{i}.weight"), layer.weight.as_slice().expect("standard layout")));
                out.push((format!("{name}.{i}.bias"), layer.bias.as_slice().expect("standard layout")));
            }
        }
        out.push(("log_temperature".to_owned(), std::slice::from_ref(&self.log_temperature)));
        out
    }

    /// Mutable counterpart of [`ModelParams::tensors`], same order.
    pub fn tensors_mut(&mut self) -> Vec<(String, &mut [f64])> {
        let mut out = Vec::new();
        let towers = [
            ("text_encoder", &mut self.text_encoder),
            ("audio_encoder", &mut self.audio_encoder),
            ("text_projection", &mut self.text_projection),
            ("audio_projection", &mut self.audio_projection),
        ];
        for (name, mlp) in towers {
            for (i, layer) in mlp.layers.iter_mut().enumerate() {
                out.push((format!("{name}.{i}.weight"), layer.weight.as_slice_mut().expect("standard layout")));
                out.push((format!("{name}.{i}.bias"), layer.bias.as_slice_mut().expect("standard layout")));
            }
        }
        out.push(("log_temperature".to_owned(), std::slice::from_mut(&mut self.log_temperature)));
        out
    }

    pub fn num_parameters(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.len()).sum()
    }

    /// SHA-256 over dims and the bit patterns of every parameter, hex encoded.
    pub fn content_hash(&self) -> String {
        let mut hasher = Sha256::new();
        hasher.update(serde_json::to_vec(&self.dims).expect("dims serialize"));
        for (name, values) in self.tensors() {
            hasher.update(name.as_bytes());
            for v in values {
                hasher.update(v.to_bits().to_le_bytes());
            }
        }
        hex::encode(hasher.finalize())
    }

    /// In-process identity of the parameter values.
    pub(crate) fn fingerprint(&self) -> u64 {
        let mut h = DefaultHasher::new();
        for (_, values) in self.tensors() {
            values.len().hash(&mut h);
            for v in values {
                v.to_bits().hash(&mut h);
            }
        }
        h.finish()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|(_, t)| t.iter().all(|v| v.is_finite()))
    }

    /// Checks that the tower widths chain from the featurizers to `d`.
    pub fn validate(&self) -> Result<()> {
        self.dims.validate()?;
        let d = &self.dims;
        let expect = [
            ("text_encoder", &self.text_encoder, d.vocab_dim, d.text_latent),
            ("audio_encoder", &self.audio_encoder, d.audio_dim, d.audio_latent),
            ("text_projection", &self.text_projection, d.text_latent, d.embed_dim),
            ("audio_projection", &self.audio_projection, d.audio_latent, d.embed_dim),
        ];
        for (name, mlp, input, output) in expect {
            if mlp.layers.is_empty() {
                return Err(Error::InvalidDims(format!("{name} has no layers")));
            }
            if mlp.input_dim() != input || mlp.output_dim() != output {
                return Err(Error::InvalidDims(format!(
                    "{name} maps {}->{}, expected {input}->{output}",
                    mlp.input_dim(),
                    mlp.output_dim()
                )));
            }
            for w in mlp.layers.windows(2) {
                if w[0].output_dim() != w[1].input_dim() {
                    return Err(Error::InvalidDims(format!("{name} layer widths do not chain")));
                }
            }
            for layer in &mlp.layers {
                if layer.bias.len() != layer.output_dim() {
                    return Err(Error::InvalidDims(format!("{name} bias width mismatch")));
                }
            }
        }
        Ok(())
    }
}

/// Text feature matrix for a list of items.
pub fn text_features(dims: &ModelDims, texts: &[TextItem]) -> Result<Array2<f64>> {
    let mut out = Array2::zeros((texts.len(), dims.vocab_dim));
    for (i, item) in texts.iter().enumerate() {
        let f = featurize_text(item, dims.vocab_dim, dims.text_hash_seed)?;
        out.row_mut(i).assign(&Array1::from(f));
    }
    Ok(out)
}

/// Audio feature matrix for a list of items.
pub fn audio_features(dims: &ModelDims, audios: &[AudioItem]) -> Result<Array2<f64>> {
    let mut out = Array2::zeros((audios.len(), dims.audio_dim));
    for (i, item) in audios.iter().enumerate() {
        let f = featurize_audio(item);
        if f.len() != dims.audio_dim {
            return Err(Error::DimensionMismatch { expected: dims.audio_dim, found: f.len() });
        }
        out.row_mut(i).assign(&ArrayView1::from(f));
    }
    Ok(out)
}

struct TowerCache {
    encoder: MlpCache,
    projection: MlpCache,
    raw: Array2<f64>,
}

fn tower_forward(encoder: &Mlp, projection: &Mlp, x: &ArrayView2<'_, f64>) -> Result<(Array2<f64>, TowerCache)> {
    let (latent, encoder_cache) = encoder.forward(x);
    let (raw, projection_cache) = projection.forward(&latent.view());
    let normalized = normalize_rows(&raw.view())?;
    Ok((normalized, TowerCache { encoder: encoder_cache, projection: projection_cache, raw }))
}

fn tower_backward(
    encoder: &Mlp,
    projection: &Mlp,
    cache: &TowerCache,
    grad: &ArrayView2<'_, f64>,
    enc_grads: &mut Mlp,
    proj_grads: &mut Mlp,
) -> Result<()> {
    let g_raw = normalize_backward(&cache.raw.view(), grad)?;
    let g_latent = projection.backward(&cache.projection, g_raw, proj_grads);
    encoder.backward(&cache.encoder, g_latent, enc_grads);
    Ok(())
}

/// Intermediate values of one [`encode_batch`] call, tied to the parameters
/// that produced them.
pub struct ForwardCache {
    params_fingerprint: u64,
    text: TowerCache,
    audio: TowerCache,
}

impl ForwardCache {
    /// Which hidden ReLU units were active, across all four MLPs.
    pub fn activation_pattern(&self) -> Vec<bool> {
        [&self.text, &self.audio]
            .into_iter()
            .flat_map(|tower| [&tower.encoder, &tower.projection])
            .flat_map(|mlp| {
                let hidden = mlp.pre_activations.len().saturating_sub(1);
                mlp.pre_activations[..hidden].iter().flat_map(|z| z.iter().map(|&v| v > 0.0))
            })
            .collect()
    }
}

/// Unit-norm text embeddings.
pub fn encode_texts(params: &ModelParams, texts: &[TextItem]) -> Result<EmbeddingBatch> {
    if texts.is_empty() {
        return Err(Error::EmptyPool("text batch"));
    }
    let x = text_features(&params.dims, texts)?;
    let (t, _) = tower_forward(&params.text_encoder, &params.text_projection, &x.view())?;
    Ok(EmbeddingBatch::from_normalized(t, Modality::Text))
}

/// Unit-norm audio embeddings.
pub fn encode_audios(params: &ModelParams, audios: &[AudioItem]) -> Result<EmbeddingBatch> {
    if audios.is_empty() {
        return Err(Error::EmptyPool("audio batch"));
    }
    let x = audio_features(&params.dims, audios)?;
    let (a, _) = tower_forward(&params.audio_encoder, &params.audio_projection, &x.view())?;
    Ok(EmbeddingBatch::from_normalized(a, Modality::Audio))
}

/// Embeds a paired batch, keeping what the backward pass needs.
pub fn encode_batch(
    params: &ModelParams,
    texts: &[TextItem],
    audios: &[AudioItem],
) -> Result<(EmbeddingBatch, EmbeddingBatch, ForwardCache)> {
    if texts.len() != audios.len() {
        return Err(Error::LengthMismatch { texts: texts.len(), audios: audios.len() });
    }
    if texts.is_empty() {
        return Err(Error::EmptyPool("batch"));
    }
    let xt = text_features(&params.dims, texts)?;
    let xa = audio_features(&params.dims, audios)?;
    encode_features(params, &xt.view(), &xa.view())
}

/// Normalized embeddings of precomputed feature matrices, without a cache.
pub fn embed_features(
    params: &ModelParams,
    text_x: &ArrayView2<'_, f64>,
    audio_x: &ArrayView2<'_, f64>,
) -> Result<(EmbeddingBatch, EmbeddingBatch)> {
    check_feature_shapes(params, text_x, audio_x)?;
    let (t, _) = tower_forward(&params.text_encoder, &params.text_projection, text_x)?;
    let (a, _) = tower_forward(&params.audio_encoder, &params.audio_projection, audio_x)?;
    Ok((EmbeddingBatch::from_normalized(t, Modality::Text), EmbeddingBatch::from_normalized(a, Modality::Audio)))
}

fn check_feature_shapes(
    params: &ModelParams,
    text_x: &ArrayView2<'_, f64>,
    audio_x: &ArrayView2<'_, f64>,
) -> Result<()> {
    if text_x.nrows() != audio_x.nrows() {
        return Err(Error::LengthMismatch { texts: text_x.nrows(), audios: audio_x.nrows() });
    }
    if text_x.ncols() != params.dims.vocab_dim {
        return Err(Error::DimensionMismatch { expected: params.dims.vocab_dim, found: text_x.ncols() });
    }
    if audio_x.ncols() != params.dims.audio_dim {
        return Err(Error::DimensionMismatch { expected: params.dims.audio_dim, found: audio_x.ncols() });
    }
    Ok(())
}

/// [`encode_batch`] on precomputed feature matrices.
pub fn encode_features(
    params: &ModelParams,
    text_x: &ArrayView2<'_, f64>,
    audio_x: &ArrayView2<'_, f64>,
) -> Result<(EmbeddingBatch, EmbeddingBatch, ForwardCache)> {
    check_feature_shapes(params, text_x, audio_x)?;
    let (t, text) = tower_forward(&params.text_encoder, &params.text_projection, text_x)?;
    let (a, audio) = tower_forward(&params.audio_encoder, &params.audio_projection, audio_x)?;
    let cache = ForwardCache { params_fingerprint: params.fingerprint(), text, audio };
    Ok((EmbeddingBatch::from_normalized(t, Modality::Text), EmbeddingBatch::from_normalized(a, Modality::Audio), cache))
}

/// Parameter gradients given upstream gradients on the normalized text and
/// audio embeddings. `log_temperature` in the result is left at zero; the
/// loss supplies that component.
pub fn backward_batch(
    params: &ModelParams,
    cache: &ForwardCache,
    grad_t: &ArrayView2<'_, f64>,
    grad_a: &ArrayView2<'_, f64>,
) -> Result<ModelParams> {
    if cache.params_fingerprint != params.fingerprint() {
        return Err(Error::StaleCache);
    }
    let mut grads = params.zeros_like();
    tower_backward(
        &params.text_encoder,
        &params.text_projection,
        &cache.text,
        grad_t,
        &mut grads.text_encoder,
        &mut grads.text_projection,
    )?;
    tower_backward(
        &params.audio_encoder,
        &params.audio_projection,
        &cache.audio,
        grad_a,
        &mut grads.audio_encoder,
        &mut grads.audio_projection,
    )?;
    if let Some((name, _)) = grads.tensors().into_iter().find(|(_, t)| t.iter().any(|v| !v.is_finite())) {
        return Err(Error::NonFiniteGradient { tensor: name });
    }
    Ok(grads)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn small_dims() -> ModelDims {
        ModelDims {
            vocab_dim: 16,
            text_hash_seed: 3,
            audio_dim: 5,
            encoder_hidden: 6,
            text_latent: 4,
            audio_latent: 5,
            projection_hidden: 4,
            embed_dim: 3,
        }
    }

    #[test]
    fn text_featurizer_is_deterministic_and_bag_like() {
        let a = TextItem::from_caption("a", "dog barks loudly");
        let b = TextItem::from_caption("b", "loudly barks dog");
        assert_eq!(featurize_text(&a, 64, 1).unwrap(), featurize_text(&a, 64, 1).unwrap());
        assert_eq!(featurize_text(&a, 64, 1).unwrap(), featurize_text(&b, 64, 1).unwrap());
        let f = featurize_text(&a, 64, 1).unwrap();
        assert_abs_diff_eq!(f.iter().map(|v| v * v).sum::<f64>(), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn distinct_tokens_are_not_parallel() {
        let dog = featurize_text(&TextItem::from_caption("d", "dog"), 64, 0).unwrap();
        let cat = featurize_text(&TextItem::from_caption("c", "cat"), 64, 0).unwrap();
        let cos: f64 = dog.iter().zip(&cat).map(|(x, y)| x * y).sum();
        assert!(cos < 1.0 - 1e-9, "cos = {cos}");
    }

    #[test]
    fn text_featurizer_errors() {
        let empty = TextItem { id: "e".into(), tokens: vec![] };
        assert!(matches!(featurize_text(&empty, 64, 0), Err(Error::EmptyTokenList)));
        let item = TextItem::from_caption("x", "dog");
        assert!(matches!(featurize_text(&item, 4, 0), Err(Error::InvalidDims(_))));
    }

    #[test]
    fn audio_featurizer_is_identity() {
        let item = AudioItem::new("a", vec![1.0, 2.0, 3.0]);
        assert_eq!(featurize_audio(&item), &[1.0, 2.0, 3.0]);
    }

    #[test]
    fn init_sets_temperature_and_is_seeded() {
        let p = init_params(&small_dims(), 1).unwrap();
        assert_abs_diff_eq!(p.temperature(), 0.007, epsilon = 1e-12);
        assert_eq!(p, init_params(&small_dims(), 1).unwrap());
        assert_ne!(p, init_params(&small_dims(), 2).unwrap());
        p.validate().unwrap();
        let bound = 1.0 / (16f64).sqrt();
        assert!(p.text_encoder.layers[0].weight.iter().all(|w| w.abs() <= bound));
    }

    #[test]
    fn init_rejects_bad_dims() {
        let mut dims = small_dims();
        dims.embed_dim = 0;
        assert!(matches!(init_params(&dims, 0), Err(Error::InvalidDims(_))));
    }

    fn items(n: usize, seed: u64) -> (Vec<TextItem>, Vec<AudioItem>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let words = ["dog", "rain", "siren", "bird", "engine", "the", "loud"];
        let texts = (0..n)
            .map(|i| {
                let toks: Vec<String> = (0..3).map(|_| words[rng.random_range(0..words.len())].to_owned()).collect();
                TextItem { id: format!("t{i}"), tokens: toks }
            })
            .collect();
        let audios = (0..n)
            .map(|i| AudioItem::new(format!("a{i}"), (0..5).map(|_| rng.random_range(-1.0..1.0)).collect()))
            .collect();
        (texts, audios)
    }

    #[test]
    fn encode_batch_shapes_and_norms() {
        let p = init_params(&small_dims(), 4).unwrap();
        let (texts, audios) = items(4, 9);
        let (t, a, _) = encode_batch(&p, &texts, &audios).unwrap();
        assert_eq!((t.len(), t.dim()), (4, 3));
        assert_eq!((a.len(), a.dim()), (4, 3));
        for i in 0..4 {
            assert_abs_diff_eq!(t.row(i).dot(&t.row(i)), 1.0, epsilon = 1e-9);
            assert_abs_diff_eq!(a.row(i).dot(&a.row(i)), 1.0, epsilon = 1e-9);
        }
        let (t1, a1, _) = encode_batch(&p, &texts[..1], &audios[..1]).unwrap();
        assert_eq!(t1.len(), 1);
        assert_eq!(t1.row(0), t.row(0));
        assert_eq!(a1.row(0), a.row(0));
    }

    #[test]
    fn identical_inputs_give_identical_rows() {
        let p = init_params(&small_dims(), 4).unwrap();
        let (texts, audios) = items(1, 2);
        let texts = vec![texts[0].clone(), texts[0].clone()];
        let audios = vec![audios[0].clone(), audios[0].clone()];
        let (t, a, _) = encode_batch(&p, &texts, &audios).unwrap();
        assert_eq!(t.row(0), t.row(1));
        assert_eq!(a.row(0), a.row(1));
    }

    #[test]
    fn encode_batch_errors() {
        let p = init_params(&small_dims(), 4).unwrap();
        let (texts, audios) = items(3, 1);
        assert!(matches!(encode_batch(&p, &texts, &audios[..2]), Err(Error::LengthMismatch { .. })));
        let bad = vec![AudioItem::new("x", vec![0.0; 7]); 3];
        assert!(matches!(encode_batch(&p, &texts, &bad), Err(Error::DimensionMismatch { .. })));
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let p = init_params(&small_dims(), 4).unwrap();
        let (texts, audios) = items(3, 1);
        let (t, a, cache) = encode_batch(&p, &texts, &audios).unwrap();
        let g =
            backward_batch(&p, &cache, &Array2::zeros(t.rows().dim()).view(), &Array2::zeros(a.rows().dim()).view())
                .unwrap();
        assert!(g.tensors().iter().all(|(_, t)| t.iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn stale_cache_is_rejected() {
        let p = init_params(&small_dims(), 4).unwrap();
        let (texts, audios) = items(2, 1);
        let (t, a, cache) = encode_batch(&p, &texts, &audios).unwrap();
        let mut q = p.clone();
        q.text_encoder.layers[0].bias[0] += 1e-3;
        let r = backward_batch(&q, &cache, &t.rows(), &a.rows());
        assert!(matches!(r, Err(Error::StaleCache)));
    }

    #[test]
    fn tensors_cover_every_parameter() {
        let p = init_params(&small_dims(), 0).unwrap();
        let expected =
            16 * 6 + 6 + 6 * 4 + 4 + 5 * 6 + 6 + 6 * 5 + 5 + 4 * 4 + 4 + 4 * 3 + 3 + 5 * 4 + 4 + 4 * 3 + 3 + 1;
        assert_eq!(p.num_parameters(), expected);
    }
}
