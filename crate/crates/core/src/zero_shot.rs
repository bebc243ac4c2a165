//! Prompted zero-shot classification: embed one prompt per class label and
//! pick the label whose embedding has the largest inner product with the
//! audio embedding.

use ndarray::ArrayView1;
use serde::{Deserialize, Serialize};

use crate::embedding::EmbeddingBatch;
use crate::encoders::{encode_audios, encode_texts, AudioItem, ModelParams, TextItem};
use crate::error::{Error, Result};

pub const DEFAULT_PROMPT: &str = "this is a sound of {}";

const PLACEHOLDER: &str = "{}";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassLabel {
    pub name: String,
    pub index: usize,
}

impl ClassLabel {
    pub fn new(name: impl Into<String>, index: usize) -> Self {
        Self { name: name.into(), index }
    }
}

/// Labels from names, indexed by position.
pub fn labels_from_names<S: AsRef<str>>(names: &[S]) -> Vec<ClassLabel> {
    names.iter().enumerate().map(|(i, n)| ClassLabel::new(n.as_ref(), i)).collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct PromptTemplate(String);

impl PromptTemplate {
    pub fn new(template: impl Into<String>) -> Result<Self> {
        let template = template.into();
        if template.matches(PLACEHOLDER).count() != 1 {
            return Err(Error::BadTemplate(template));
        }
        Ok(Self(template))
    }

    pub fn render(&self, label: &str) -> String {
        self.0.replacen(PLACEHOLDER, label, 1)
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl Default for PromptTemplate {
    fn default() -> Self {
        Self(DEFAULT_PROMPT.to_owned())
    }
}

impl TryFrom<String> for PromptTemplate {
    type Error = Error;

    fn try_from(value: String) -> Result<Self> {
        Self::new(value)
    }
}

impl std::str::FromStr for PromptTemplate {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::new(s)
    }
}

impl std::fmt::Display for PromptTemplate {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl From<PromptTemplate> for String {
    fn from(value: PromptTemplate) -> Self {
        value.0
    }
}

/// One prompt per label, ordered by label index.
pub fn build_prompts(labels: &[ClassLabel], template: &PromptTemplate) -> Result<Vec<TextItem>> {
    if labels.is_empty() {
        return Err(Error::EmptyPool("class labels"));
    }
    let mut sorted: Vec<&ClassLabel> = labels.iter().collect();
    sorted.sort_by_key(|l| l.index);
    for (pos, w) in sorted.windows(2).enumerate() {
        if w[0].index == w[1].index {
            return Err(Error::InvalidConfig(format!("duplicate class index {} (position {pos})", w[0].index)));
        }
    }
    let mut names: Vec<&str> = labels.iter().map(|l| l.name.as_str()).collect();
    names.sort_unstable();
    if names.windows(2).any(|w| w[0] == w[1]) {
        return Err(Error::InvalidConfig("duplicate class names".into()));
    }
    Ok(sorted
        .into_iter()
        .map(|l| TextItem::from_caption(format!("prompt:{}", l.index), &template.render(&l.name)))
        .collect())
}

/// Index of the prompt row with the largest inner product; ties go to the
/// lowest index.
pub fn argmax_similarity(prompt_embeddings: &EmbeddingBatch, audio: ArrayView1<'_, f64>) -> usize {
    let mut best = 0;
    let mut best_score = f64::NEG_INFINITY;
    for (j, row) in prompt_embeddings.rows().rows().into_iter().enumerate() {
        let score = row.dot(&audio);
        if score > best_score {
            best = j;
            best_score = score;
        }
    }
    best
}

pub fn classify(model: &ModelParams, prompts: &[TextItem], audio: &AudioItem) -> Result<usize> {
    let t = encode_texts(model, prompts)?;
    let a = encode_audios(model, std::slice::from_ref(audio))?;
    Ok(argmax_similarity(&t, a.row(0)))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ZeroShotReport {
    pub predictions: Vec<usize>,
    pub correct: usize,
    pub total: usize,
    pub accuracy: f64,
    /// `confusion[true][predicted]`.
    pub confusion: Vec<Vec<usize>>,
}

impl ZeroShotReport {
    /// Correct and total counts per true class.
    pub fn per_class(&self) -> Vec<(usize, usize)> {
        self.confusion.iter().enumerate().map(|(k, row)| (row[k], row.iter().sum())).collect()
    }
}

pub fn evaluate(
    model: &ModelParams,
    prompts: &[TextItem],
    labeled_audio: &[(AudioItem, usize)],
) -> Result<ZeroShotReport> {
    if labeled_audio.is_empty() {
        return Err(Error::EmptyEvalSet);
    }
    let k = prompts.len();
    if let Some((item, class)) = labeled_audio.iter().find(|(_, c)| *c >= k) {
        return Err(Error::InvalidConfig(format!("item {} has class {class} but only {k} prompts", item.id)));
    }
    let t = encode_texts(model, prompts)?;
    let audios: Vec<AudioItem> = labeled_audio.iter().map(|(a, _)| a.clone()).collect();
    let a = encode_audios(model, &audios)?;
    let mut confusion = vec![vec![0usize; k]; k];
    let mut predictions = Vec::with_capacity(audios.len());
    let mut correct = 0;
    for (i, (_, truth)) in labeled_audio.iter().enumerate() {
        let pred = argmax_similarity(&t, a.row(i));
        confusion[*truth][pred] += 1;
        correct += usize::from(pred == *truth);
        predictions.push(pred);
    }
    let total = labeled_audio.len();
    Ok(ZeroShotReport { predictions, correct, total, accuracy: correct as f64 / total as f64, confusion })
}
