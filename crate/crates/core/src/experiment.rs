//! End-to-end recipe: corpus -> teacher -> curation -> students -> zero-shot
//! evaluation, for a full-data teacher and a subset-trained teacher, repeated
//! over several training seeds.

use serde::{Deserialize, Serialize};

use crate::corpus::{generate, Corpus, SplitFractions, SyntheticCorpusSpec};
use crate::curation::{
    curate_ads_pool, curate_ds, curate_du_pool, AudioPool, CuratedPairSet, CurationConfig, MatchMode,
};
use crate::encoders::{ModelDims, TextItem};
use crate::error::Result;
use crate::trainer::{resolve_pairs, subset_indices, train_student, train_teacher, Checkpoint, Pair, TrainConfig};
use crate::zero_shot::{build_prompts, evaluate, PromptTemplate};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecipeConfig {
    pub corpus: SyntheticCorpusSpec,
    pub dims: ModelDims,
    pub teacher: TrainConfig,
    pub student: TrainConfig,
    pub curation: CurationConfig,
    pub prompt: PromptTemplate,
    /// Fraction of teacher pairs for the low-resource teacher.
    pub subset_fraction: f64,
    /// Optimizer steps for the low-resource teacher.
    pub subset_teacher_steps: usize,
    /// The low-resource teacher curates from every training caption and
    /// replays from every training pair, not just the ones it was trained on.
    pub subset_curates_all_pairs: bool,
    /// Training seeds; the corpus is shared across them.
    pub seeds: Vec<u64>,
}

impl RecipeConfig {
    /// Ten classes, 50 captioned pairs per class, a 2000-item wild pool and
    /// a 200-item eval split.
    pub fn desk_scale() -> Self {
        let corpus = SyntheticCorpusSpec {
            num_classes: 10,
            items_per_class: 270,
            feature_dim: 32,
            noise_scale: 0.1,
            vocab_per_class: 2,
            vocab_overlap: 0.0,
            caption_class_tokens: 2,
            caption_filler_tokens: 2,
            domain_shift: 1.0,
            seed: 0,
            splits: SplitFractions { teacher_train: 50.0 / 270.0, wild_pool: 200.0 / 270.0, eval: 20.0 / 270.0 },
        };
        let mut dims = ModelDims::new(256, corpus.feature_dim);
        dims.text_hash_seed = 17;
        let teacher = TrainConfig { batch_size: 16, steps: 300, ..TrainConfig::default() };
        let student = TrainConfig { batch_size: 16, steps: 300, ..TrainConfig::default() };
        Self {
            corpus,
            dims,
            teacher,
            student,
            curation: CurationConfig { sigma: 0.2, sigma_ds: 0.7, match_mode: MatchMode::Top1AboveThreshold },
            prompt: PromptTemplate::default(),
            subset_fraction: 0.1,
            subset_teacher_steps: 60,
            subset_curates_all_pairs: true,
            seeds: vec![0, 1, 2, 3, 4],
        }
    }

    /// Passes iff the recipe's directional claims hold on `report`.
    pub fn check(report: &RecipeReport) -> RecipeVerdict {
        let m = |name| report.mean(name);
        let (teacher, ds, ads_sl) = (m(TEACHER), m(DS), m(ADS_SL));
        let (sub_teacher, sub_ads_sl) = (m(SUBSET_TEACHER), m(SUBSET_ADS_SL));
        RecipeVerdict {
            ds_not_above_ads_sl: ds <= ads_sl,
            ads_sl_gain: ads_sl - teacher,
            subset_below_full: sub_teacher < teacher,
            subset_recovery: sub_ads_sl - sub_teacher,
            subset_gap: teacher - sub_teacher,
        }
    }
}

/// Directional outcome of a recipe run. Gains and gaps are accuracy
/// fractions, not percentage points.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RecipeVerdict {
    pub ds_not_above_ads_sl: bool,
    pub ads_sl_gain: f64,
    pub subset_below_full: bool,
    pub subset_recovery: f64,
    pub subset_gap: f64,
}

impl RecipeVerdict {
    pub const MIN_GAIN: f64 = 0.02;

    pub fn gain_ok(&self) -> bool {
        self.ads_sl_gain >= Self::MIN_GAIN
    }

    pub fn recovery_ok(&self) -> bool {
        self.subset_below_full && self.subset_recovery >= 0.5 * self.subset_gap
    }

    pub fn passed(&self) -> bool {
        self.ds_not_above_ads_sl && self.gain_ok() && self.recovery_ok()
    }
}

/// Accuracy of one model variant across seeds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecipeRow {
    pub name: String,
    pub accuracies: Vec<f64>,
    pub mean: f64,
    pub std: f64,
    /// Improvement-Set size per seed, for student rows.
    #[serde(skip_serializing_if = "Vec::is_empty", default)]
    pub curated_pairs: Vec<usize>,
    pub checkpoint_ids: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecipeReport {
    pub config: RecipeConfig,
    pub rows: Vec<RecipeRow>,
}

impl RecipeReport {
    pub fn row(&self, name: &str) -> Option<&RecipeRow> {
        self.rows.iter().find(|r| r.name == name)
    }

    pub fn mean(&self, name: &str) -> f64 {
        self.row(name).map_or(f64::NAN, |r| r.mean)
    }

    /// Plain-text table with `mean ± std` accuracies in percent.
    pub fn table(&self) -> String {
        let width = self.rows.iter().map(|r| r.name.len()).max().unwrap_or(5).max(5);
        let mut out = format!("{:<width$}  {:>14}  {:>10}\n", "model", "accuracy (%)", "pairs");
        for r in &self.rows {
            let pairs = if r.curated_pairs.is_empty() {
                "-".to_owned()
            } else {
                format!("{:.0}", r.curated_pairs.iter().sum::<usize>() as f64 / r.curated_pairs.len() as f64)
            };
            out.push_str(&format!(
                "{:<width$}  {:>14}  {:>10}\n",
                r.name,
                format!("{:.1} ± {:.1}", 100.0 * r.mean, 100.0 * r.std),
                pairs
            ));
        }
        out
    }
}

/// Mean and sample standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// One trained model from one seed.
#[derive(Debug, Clone)]
pub struct RunArtifact {
    pub name: String,
    pub seed: u64,
    pub checkpoint: Checkpoint,
    pub accuracy: f64,
    pub improvement: Option<CuratedPairSet>,
}

#[derive(Debug, Clone)]
pub struct RecipeOutcome {
    pub corpus: Corpus,
    pub report: RecipeReport,
    pub artifacts: Vec<RunArtifact>,
}

pub const TEACHER: &str = "Teacher";
pub const DU: &str = "DU";
pub const DS: &str = "DS";
pub const ADS: &str = "ADS";
pub const ADS_SL: &str = "ADS+SL";
pub const SUBSET_TEACHER: &str = "Teacher (subset)";
pub const SUBSET_ADS_SL: &str = "ADS+SL (subset teacher)";

const ROW_ORDER: [&str; 7] = [TEACHER, DU, DS, ADS, ADS_SL, SUBSET_TEACHER, SUBSET_ADS_SL];

struct SeedContext<'a> {
    corpus: &'a Corpus,
    cfg: &'a RecipeConfig,
    seed: u64,
    prompts: Vec<TextItem>,
    eval: Vec<(crate::encoders::AudioItem, usize)>,
}

impl SeedContext<'_> {
    fn accuracy(&self, ckpt: &Checkpoint) -> Result<f64> {
        Ok(evaluate(&ckpt.params, &self.prompts, &self.eval)?.accuracy)
    }

    fn student(
        &self,
        teacher: &Checkpoint,
        set: &CuratedPairSet,
        texts: &[TextItem],
        replay: &[Pair],
        hard: bool,
    ) -> Result<Checkpoint> {
        let wild = self.corpus.wild_audio();
        let mut audios = wild;
        audios.extend(self.corpus.pairs.iter().map(|p| p.audio.clone()));
        let improvement = resolve_pairs(set, &audios, texts)?;
        let cfg = TrainConfig { seed: self.seed, hard_labels: hard, ..self.cfg.student.clone() };
        // an Improvement-Set smaller than a batch falls back to replay only
        let cfg = if improvement.len() < cfg.batch_size { TrainConfig { replay_prob: 1.0, ..cfg } } else { cfg };
        Ok(train_student(teacher, &improvement, replay, &cfg)?.checkpoint)
    }

    /// Teacher, then DU/DS/ADS students curated by it. Returns
    /// `(name, checkpoint, improvement)` for every model.
    /// The teacher learns from `teacher_pairs`; curation and replay draw on
    /// `pairs`.
    fn teacher_and_students(
        &self,
        teacher_pairs: &[Pair],
        pairs: &[Pair],
        full_rows: bool,
    ) -> Result<Vec<(&'static str, Checkpoint, Option<CuratedPairSet>)>> {
        let cfg = self.cfg;
        let steps = if full_rows { cfg.teacher.steps } else { cfg.subset_teacher_steps };
        let teacher_cfg = TrainConfig { seed: self.seed, subset_fraction: 1.0, steps, ..cfg.teacher.clone() };
        let teacher = train_teacher(teacher_pairs, &cfg.dims, &teacher_cfg)?.checkpoint;
        let texts: Vec<TextItem> = pairs.iter().map(|(_, t)| t.clone()).collect();
        let labels = self.corpus.labels();
        let pool = AudioPool::embed(&teacher.params, &self.corpus.wild_audio())?;

        let ds = curate_ds(&teacher.params, pairs, &labels, &cfg.prompt, &cfg.curation)?;
        let ds_pairs = resolve_pairs(&ds, &pairs.iter().map(|(a, _)| a.clone()).collect::<Vec<_>>(), &texts)?;
        let ads = curate_ads_pool(&teacher.params, pairs, &labels, &cfg.prompt, &pool, &cfg.curation)?;
        // ADS students replay the DS set; fall back to all pairs if DS is too small
        let ads_replay: &[Pair] = if ds_pairs.len() >= cfg.student.batch_size { &ds_pairs } else { pairs };

        let mut out = Vec::new();
        let (teacher_name, ads_sl_name) = if full_rows { (TEACHER, ADS_SL) } else { (SUBSET_TEACHER, SUBSET_ADS_SL) };
        if full_rows {
            let du = curate_du_pool(&teacher.params, &texts, &pool, &cfg.curation)?;
            let du_student = self.student(&teacher, &du, &texts, pairs, true)?;
            let ds_student = self.student(&teacher, &ds, &texts, pairs, true)?;
            let ads_student = self.student(&teacher, &ads, &texts, ads_replay, true)?;
            out.push((DU, du_student, Some(du)));
            out.push((DS, ds_student, Some(ds)));
            out.push((ADS, ads_student, Some(ads.clone())));
        }
        let ads_sl = self.student(&teacher, &ads, &texts, ads_replay, false)?;
        out.push((ads_sl_name, ads_sl, Some(ads)));
        out.insert(0, (teacher_name, teacher, None));
        Ok(out)
    }
}

/// Runs the full recipe on the corpus described by `cfg.corpus`.
pub fn run_recipe(cfg: &RecipeConfig) -> Result<RecipeOutcome> {
    let corpus = generate(&cfg.corpus)?;
    run_recipe_on(cfg, corpus)
}

/// Runs the recipe on an existing corpus.
pub fn run_recipe_on(cfg: &RecipeConfig, corpus: Corpus) -> Result<RecipeOutcome> {
    cfg.teacher.validate()?;
    cfg.student.validate()?;
    cfg.curation.validate()?;
    let prompts = build_prompts(&corpus.labels(), &cfg.prompt)?;
    let eval = corpus.labeled_eval();
    let all_pairs = corpus.training_pairs();
    let mut artifacts = Vec::new();
    for &seed in &cfg.seeds {
        let ctx = SeedContext { corpus: &corpus, cfg, seed, prompts: prompts.clone(), eval: eval.clone() };
        let subset: Vec<Pair> = subset_indices(all_pairs.len(), cfg.subset_fraction, seed)
            .into_iter()
            .map(|i| all_pairs[i].clone())
            .collect();
        let mut runs = ctx.teacher_and_students(&all_pairs, &all_pairs, true)?;
        let curation_pairs = if cfg.subset_curates_all_pairs { &all_pairs } else { &subset };
        runs.extend(ctx.teacher_and_students(&subset, curation_pairs, false)?);
        for (name, checkpoint, improvement) in runs {
            let accuracy = ctx.accuracy(&checkpoint)?;
            artifacts.push(RunArtifact { name: name.to_owned(), seed, checkpoint, accuracy, improvement });
        }
    }
    let rows = ROW_ORDER
        .iter()
        .map(|&name| {
            let runs: Vec<&RunArtifact> = artifacts.iter().filter(|a| a.name == name).collect();
            let accuracies: Vec<f64> = runs.iter().map(|a| a.accuracy).collect();
            let (mean, std) = mean_std(&accuracies);
            RecipeRow {
                name: name.to_owned(),
                accuracies,
                mean,
                std,
                curated_pairs: runs.iter().filter_map(|a| a.improvement.as_ref().map(CuratedPairSet::len)).collect(),
                checkpoint_ids: runs.iter().map(|a| a.checkpoint.id()).collect(),
            }
        })
        .collect();
    Ok(RecipeOutcome { corpus, report: RecipeReport { config: cfg.clone(), rows }, artifacts })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mean_std_matches_hand_values() {
        let (m, s) = mean_std(&[0.8, 0.9, 1.0]);
        assert!((m - 0.9).abs() < 1e-12);
        assert!((s - 0.1).abs() < 1e-12);
        assert_eq!(mean_std(&[0.5]), (0.5, 0.0));
    }
}
