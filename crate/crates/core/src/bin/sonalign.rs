//! `sonalign`: corpus generation, teacher/student training, curation,
//! zero-shot evaluation, gradient checks and the end-to-end recipe.
//!
//! Exit codes: 0 on success, 1 on runtime failure, 2 on usage errors.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Args, CommandFactory, FromArgMatches, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use sonalign::corpus::{
    cached_audio_pool, generate, load_corpus, save_corpus, CacheStatus, Corpus, SplitFractions, SyntheticCorpusSpec,
};
use sonalign::curation::{
    curate_ads_pool, curate_ds, curate_du_pool, load_manifest, save_manifest, AudioPool, CurationConfig, MatchMode,
    Strategy,
};
use sonalign::encoders::{AudioItem, ModelDims};
use sonalign::experiment::{mean_std, run_recipe, RecipeConfig, RecipeReport};
use sonalign::gradcheck::{self, GradCheckOptions};
use sonalign::optim::OptimizerKind;
use sonalign::trainer::{resolve_pairs, save_run_log, train_student, train_teacher, Checkpoint, Pair, TrainConfig};
use sonalign::zero_shot::{build_prompts, evaluate, labels_from_names, ClassLabel, PromptTemplate, ZeroShotReport};
use sonalign::Error;

const CORPUS_FILE: &str = "corpus.jsonl";
const RUN_MANIFEST: &str = "run-manifest.json";

#[derive(Parser, Debug)]
#[command(name = "sonalign", version, about = "Teacher/student audio-text alignment on synthetic corpora")]
#[command(args_override_self = true)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic captioned-audio corpus.
    GenCorpus(GenCorpusArgs),
    /// Train teacher models on the corpus pairs.
    TrainTeacher(TrainTeacherArgs),
    /// Train students from a teacher on a curated Improvement-Set.
    TrainStudent(TrainStudentArgs),
    /// Curate an Improvement-Set with a teacher.
    Curate(CurateArgs),
    /// Zero-shot evaluation of one or more checkpoints.
    Eval(EvalArgs),
    /// Finite-difference check of every analytic gradient.
    Gradcheck(GradcheckArgs),
    /// Corpus, teachers, curation, students and evaluation in one run.
    Recipe(RecipeArgs),
}

#[derive(Args, Debug)]
struct Common {
    /// Output directory.
    #[arg(short = 'o', long = "out", env = "SONALIGN_OUT_DIR", default_value = "sonalign-out")]
    out: PathBuf,
    /// File of `key = value` lines applied before the command-line flags.
    #[arg(long, value_name = "FILE")]
    config: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct GenCorpusArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    classes: usize,
    /// Items per class across all splits.
    #[arg(long)]
    per_class: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    feature_dim: Option<usize>,
    /// Per-coordinate noise standard deviation.
    #[arg(long)]
    noise: Option<f64>,
    #[arg(long)]
    vocab_per_class: Option<usize>,
    #[arg(long, value_parser = unit_interval)]
    vocab_overlap: Option<f64>,
    #[arg(long)]
    class_tokens: Option<usize>,
    #[arg(long)]
    filler_tokens: Option<usize>,
    /// Offset length applied to wild and eval audio.
    #[arg(long)]
    domain_shift: Option<f64>,
    /// Fractions for teacher-train, wild pool and eval, e.g. `0.6,0.2,0.2`.
    #[arg(long, value_parser = parse_splits)]
    splits: Option<SplitFractions>,
}

#[derive(Args, Debug)]
struct DimsArgs {
    #[arg(long, default_value_t = 256)]
    vocab_dim: usize,
    #[arg(long, default_value_t = 17)]
    hash_seed: u64,
    #[arg(long)]
    encoder_hidden: Option<usize>,
    /// Text and audio latent width.
    #[arg(long)]
    latent: Option<usize>,
    #[arg(long)]
    projection_hidden: Option<usize>,
    #[arg(long)]
    embed_dim: Option<usize>,
}

impl DimsArgs {
    fn dims(&self, audio_dim: usize) -> ModelDims {
        let mut d = ModelDims::new(self.vocab_dim, audio_dim);
        d.text_hash_seed = self.hash_seed;
        if let Some(v) = self.encoder_hidden {
            d.encoder_hidden = v;
        }
        if let Some(v) = self.latent {
            d.text_latent = v;
            d.audio_latent = v;
        }
        if let Some(v) = self.projection_hidden {
            d.projection_hidden = v;
        }
        if let Some(v) = self.embed_dim {
            d.embed_dim = v;
        }
        d
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum OptimizerArg {
    Sgd,
    Adam,
}

#[derive(Args, Debug)]
struct OptimArgs {
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long, value_enum)]
    optimizer: Option<OptimizerArg>,
    /// First seed.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Number of independent runs, seeded `seed`, `seed + 1`, ...
    #[arg(long, default_value_t = 1, value_parser = clap::value_parser!(u64).range(1..))]
    seeds: u64,
}

impl OptimArgs {
    fn apply(&self, mut cfg: TrainConfig) -> TrainConfig {
        if let Some(v) = self.steps {
            cfg.steps = v;
        }
        if let Some(v) = self.batch_size {
            cfg.batch_size = v;
        }
        if let Some(v) = self.lr {
            cfg.learning_rate = v;
        }
        if let Some(v) = self.optimizer {
            cfg.optimizer = match v {
                OptimizerArg::Sgd => OptimizerKind::Sgd,
                OptimizerArg::Adam => OptimizerKind::Adam,
            };
        }
        cfg
    }

    fn seed_list(&self) -> Vec<u64> {
        (self.seed..self.seed + self.seeds).collect()
    }
}

#[derive(Args, Debug)]
struct TrainTeacherArgs {
    #[command(flatten)]
    common: Common,
    /// Corpus file or directory.
    #[arg(long)]
    corpus: PathBuf,
    /// Fraction of training pairs to use.
    #[arg(long, default_value_t = 1.0, value_parser = fraction)]
    subset: f64,
    #[command(flatten)]
    dims: DimsArgs,
    #[command(flatten)]
    optim: OptimArgs,
    #[arg(long, default_value_t = PromptTemplate::default())]
    prompt: PromptTemplate,
}

#[derive(Args, Debug)]
struct TrainStudentArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    teacher: PathBuf,
    #[arg(long)]
    corpus: PathBuf,
    /// Curated Improvement-Set manifest.
    #[arg(long)]
    improvement: PathBuf,
    /// Curated replay manifest; defaults to every corpus training pair.
    #[arg(long)]
    replay: Option<PathBuf>,
    /// Hard-label contrastive loss instead of teacher soft targets.
    #[arg(long)]
    hard_labels: bool,
    #[arg(long, value_parser = unit_interval)]
    beta: Option<f64>,
    #[arg(long)]
    soft_temperature: Option<f64>,
    #[arg(long, value_parser = unit_interval)]
    replay_prob: Option<f64>,
    /// Start from a fresh initialization instead of the teacher weights.
    #[arg(long)]
    cold_start: bool,
    #[command(flatten)]
    optim: OptimArgs,
    #[arg(long, default_value_t = PromptTemplate::default())]
    prompt: PromptTemplate,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum StrategyArg {
    Du,
    Ds,
    Ads,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum ModeArg {
    All,
    Top1,
}

impl From<ModeArg> for MatchMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::All => MatchMode::AllAboveThreshold,
            ModeArg::Top1 => MatchMode::Top1AboveThreshold,
        }
    }
}

#[derive(Args, Debug)]
struct CurateArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    teacher: PathBuf,
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long, value_enum)]
    strategy: StrategyArg,
    #[arg(long, default_value_t = sonalign::curation::DEFAULT_SIGMA, value_parser = unit_interval)]
    sigma: f64,
    #[arg(long, default_value_t = sonalign::curation::DEFAULT_SIGMA_DS, value_parser = unit_interval)]
    sigma_ds: f64,
    #[arg(long, value_enum, default_value_t = ModeArg::All)]
    mode: ModeArg,
    /// In-domain class labels, comma separated, or `corpus` for the corpus
    /// class names. Required by ds and ads.
    #[arg(long, value_delimiter = ',', required_if_eq_any = [("strategy", "ds"), ("strategy", "ads")])]
    labels: Option<Vec<String>>,
    #[arg(long, default_value_t = PromptTemplate::default())]
    prompt: PromptTemplate,
    /// Embedding cache for the wild pool, reused while the teacher matches.
    #[arg(long)]
    cache: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
enum SplitArg {
    Eval,
    Wild,
    Pairs,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[command(flatten)]
    common: Common,
    /// Checkpoints, comma separated.
    #[arg(long, value_delimiter = ',', required = true)]
    checkpoint: Vec<PathBuf>,
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long, default_value_t = PromptTemplate::default())]
    prompt: PromptTemplate,
    #[arg(long, value_enum, default_value_t = SplitArg::Eval)]
    split: SplitArg,
    /// Report path; defaults to `eval-report.json` in the output directory.
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct GradcheckArgs {
    #[arg(long, env = "SONALIGN_OUT_DIR", default_value = "sonalign-out", short = 'o', long = "out")]
    out: PathBuf,
    #[arg(long, value_name = "FILE")]
    config: Option<PathBuf>,
    #[arg(long, default_value_t = 10, value_parser = clap::value_parser!(u64).range(1..))]
    seeds: u64,
    #[arg(long, default_value_t = 0)]
    first_seed: u64,
    #[arg(long, default_value_t = gradcheck::DEFAULT_EPS)]
    eps: f64,
    #[arg(long, default_value_t = gradcheck::DEFAULT_TOLERANCE)]
    tolerance: f64,
    #[arg(long, default_value_t = 16)]
    max_dim: usize,
    #[arg(long, default_value_t = 6)]
    max_batch: usize,
    /// Write the JSON report here.
    #[arg(long)]
    report: Option<PathBuf>,
    #[arg(long, hide = true)]
    inject_sign_flip: Option<String>,
}

#[derive(Args, Debug)]
struct RecipeArgs {
    #[command(flatten)]
    common: Common,
    /// Number of training seeds.
    #[arg(long, default_value_t = 5, value_parser = clap::value_parser!(u64).range(1..))]
    seeds: u64,
    #[arg(long, default_value_t = 0)]
    first_seed: u64,
    #[arg(long)]
    corpus_seed: Option<u64>,
    #[arg(long)]
    noise: Option<f64>,
    #[arg(long)]
    domain_shift: Option<f64>,
    #[arg(long)]
    teacher_steps: Option<usize>,
    #[arg(long)]
    subset_teacher_steps: Option<usize>,
    #[arg(long)]
    student_steps: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long, value_parser = fraction)]
    subset: Option<f64>,
    #[arg(long, value_parser = unit_interval)]
    sigma: Option<f64>,
    #[arg(long, value_parser = unit_interval)]
    sigma_ds: Option<f64>,
    #[arg(long, value_enum)]
    mode: Option<ModeArg>,
    #[arg(long, value_parser = unit_interval)]
    beta: Option<f64>,
    #[arg(long, value_parser = unit_interval)]
    replay_prob: Option<f64>,
    #[arg(long)]
    prompt: Option<PromptTemplate>,
}

fn unit_interval(s: &str) -> std::result::Result<f64, String> {
    let v: f64 = s.parse().map_err(|e| format!("{e}"))?;
    if (0.0..=1.0).contains(&v) {
        Ok(v)
    } else {
        Err(format!("{v} is not in [0, 1]"))
    }
}

fn fraction(s: &str) -> std::result::Result<f64, String> {
    let v: f64 = s.parse().map_err(|e| format!("{e}"))?;
    if v > 0.0 && v <= 1.0 {
        Ok(v)
    } else {
        Err(format!("{v} is not in (0, 1]"))
    }
}

fn parse_splits(s: &str) -> std::result::Result<SplitFractions, String> {
    let parts: Vec<f64> = s
        .split(',')
        .map(|p| p.trim().parse::<f64>().map_err(|e| format!("{p:?}: {e}")))
        .collect::<std::result::Result<_, _>>()?;
    match parts[..] {
        [teacher_train, wild_pool, eval] => Ok(SplitFractions { teacher_train, wild_pool, eval }),
        _ => Err(format!("expected three comma-separated fractions, got {}", parts.len())),
    }
}

/// Splices `key = value` lines from `--config FILE` in right after the
/// subcommand, so that flags given on the command line override them.
fn expand_config(mut argv: Vec<OsString>) -> std::result::Result<Vec<OsString>, String> {
    let mut path = None;
    let mut i = 1;
    while i < argv.len() {
        let arg = argv[i].to_string_lossy().into_owned();
        if arg == "--config" {
            if i + 1 >= argv.len() {
                return Err("--config needs a file".into());
            }
            path = Some(PathBuf::from(argv.remove(i + 1)));
            argv.remove(i);
        } else if let Some(p) = arg.strip_prefix("--config=") {
            path = Some(PathBuf::from(p));
            argv.remove(i);
        } else {
            i += 1;
        }
    }
    let Some(path) = path else { return Ok(argv) };
    let text = fs::read_to_string(&path).map_err(|e| format!("cannot read config {}: {e}", path.display()))?;
    let mut injected = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) =
            line.split_once('=').ok_or_else(|| format!("{}:{}: expected `key = value`", path.display(), n + 1))?;
        let flag = format!("--{}", key.trim().replace('_', "-"));
        let value = value.trim().trim_matches('"');
        match value {
            "true" => injected.push(OsString::from(flag)),
            "false" => {}
            _ => {
                injected.push(OsString::from(flag));
                injected.push(OsString::from(value));
            }
        }
    }
    let at = argv.len().min(2);
    argv.splice(at..at, injected);
    Ok(argv)
}

#[derive(Serialize)]
struct FileHash {
    path: String,
    sha256: String,
}

/// Everything needed to rerun a command and check its outputs.
#[derive(Serialize)]
struct RunManifest {
    tool_version: &'static str,
    command: String,
    argv: Vec<String>,
    config: Value,
    seeds: Vec<u64>,
    inputs: Vec<FileHash>,
    outputs: Vec<FileHash>,
    results: Value,
    elapsed_ms: f64,
}

struct Run {
    command: &'static str,
    argv: Vec<String>,
    out: PathBuf,
    started: Instant,
    inputs: Vec<PathBuf>,
    outputs: Vec<PathBuf>,
}

impl Run {
    fn new(command: &'static str, argv: &[OsString], out: &Path) -> Result<Self> {
        fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
        Ok(Self {
            command,
            argv: argv.iter().map(|a| a.to_string_lossy().into_owned()).collect(),
            out: out.to_path_buf(),
            started: Instant::now(),
            inputs: Vec::new(),
            outputs: Vec::new(),
        })
    }

    fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    fn finish(self, config: Value, seeds: Vec<u64>, results: Value) -> Result<()> {
        let hash_all = |paths: &[PathBuf]| -> Result<Vec<FileHash>> {
            paths
                .iter()
                .map(|p| {
                    let bytes = fs::read(p).with_context(|| format!("hashing {}", p.display()))?;
                    Ok(FileHash { path: p.display().to_string(), sha256: hex::encode(Sha256::digest(&bytes)) })
                })
                .collect()
        };
        let manifest = RunManifest {
            tool_version: env!("CARGO_PKG_VERSION"),
            command: self.command.to_owned(),
            argv: self.argv.clone(),
            config,
            seeds,
            inputs: hash_all(&self.inputs)?,
            outputs: hash_all(&self.outputs)?,
            results,
            elapsed_ms: self.started.elapsed().as_secs_f64() * 1e3,
        };
        write_json(&self.out.join(RUN_MANIFEST), &manifest)
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn corpus_path(p: &Path) -> PathBuf {
    if p.is_dir() {
        p.join(CORPUS_FILE)
    } else {
        p.to_path_buf()
    }
}

fn read_corpus(run: &mut Run, p: &Path) -> Result<Corpus> {
    let path = corpus_path(p);
    let corpus = load_corpus(&path).with_context(|| format!("loading corpus {}", path.display()))?;
    run.inputs.push(path);
    Ok(corpus)
}

fn read_checkpoint(run: &mut Run, p: &Path) -> Result<Checkpoint> {
    let ckpt = Checkpoint::load(p).with_context(|| format!("loading checkpoint {}", p.display()))?;
    run.inputs.push(p.to_path_buf());
    Ok(ckpt)
}

fn pct(v: f64) -> String {
    format!("{:.1}", 100.0 * v)
}

/// `mean ± std` line over several seeds.
fn summary_line(accuracies: &[f64]) -> String {
    let (m, s) = mean_std(accuracies);
    format!("accuracy {} ± {} over {} seeds", pct(m), pct(s), accuracies.len())
}

fn cmd_gen_corpus(a: GenCorpusArgs, argv: &[OsString]) -> Result<()> {
    let mut run = Run::new("gen-corpus", argv, &a.common.out)?;
    let d = SyntheticCorpusSpec::default();
    let splits = a.splits.unwrap_or(d.splits);
    let spec = SyntheticCorpusSpec {
        num_classes: a.classes,
        items_per_class: a.per_class,
        feature_dim: a.feature_dim.unwrap_or(d.feature_dim),
        noise_scale: a.noise.unwrap_or(d.noise_scale),
        vocab_per_class: a.vocab_per_class.unwrap_or(d.vocab_per_class),
        vocab_overlap: a.vocab_overlap.unwrap_or(d.vocab_overlap),
        caption_class_tokens: a.class_tokens.unwrap_or(d.caption_class_tokens),
        caption_filler_tokens: a.filler_tokens.unwrap_or(d.caption_filler_tokens),
        domain_shift: a.domain_shift.unwrap_or(d.domain_shift),
        seed: a.seed,
        splits,
    };
    let corpus = generate(&spec)?;
    let path = run.path(CORPUS_FILE);
    save_corpus(&corpus, &path)?;
    println!(
        "wrote {} pairs, {} wild, {} eval items to {}",
        corpus.pairs.len(),
        corpus.wild.len(),
        corpus.eval.len(),
        path.display()
    );
    run.outputs.push(path);
    let counts = json!({ "pairs": corpus.pairs.len(), "wild": corpus.wild.len(), "eval": corpus.eval.len() });
    run.finish(serde_json::to_value(&spec)?, vec![spec.seed], counts)
}

/// Eval-split accuracy, or `None` when the corpus has no eval items.
fn eval_accuracy(ckpt: &Checkpoint, corpus: &Corpus, prompt: &PromptTemplate) -> Result<Option<f64>> {
    let eval = corpus.labeled_eval();
    if eval.is_empty() {
        return Ok(None);
    }
    let prompts = build_prompts(&corpus.labels(), prompt)?;
    Ok(Some(evaluate(&ckpt.params, &prompts, &eval)?.accuracy))
}

struct SeedResult {
    seed: u64,
    checkpoint: PathBuf,
    id: String,
    pairs_used: usize,
    final_loss: Option<f64>,
    accuracy: Option<f64>,
}

impl SeedResult {
    fn json(&self) -> Value {
        json!({
            "seed": self.seed,
            "checkpoint": self.checkpoint.display().to_string(),
            "checkpoint_id": self.id,
            "pairs_used": self.pairs_used,
            "final_loss": self.final_loss,
            "accuracy": self.accuracy,
        })
    }

    fn print(&self) {
        let acc = self.accuracy.map_or_else(|| "n/a".to_owned(), |v| format!("{}%", pct(v)));
        println!(
            "seed {}: accuracy {acc}, {} pairs, checkpoint {} ({})",
            self.seed,
            self.pairs_used,
            self.checkpoint.display(),
            &self.id[..12]
        );
    }
}

fn report_seeds(results: &[SeedResult]) {
    for r in results {
        r.print();
    }
    let accs: Vec<f64> = results.iter().filter_map(|r| r.accuracy).collect();
    if results.len() > 1 && accs.len() == results.len() {
        println!("{}", summary_line(&accs));
    }
}

fn cmd_train_teacher(a: TrainTeacherArgs, argv: &[OsString]) -> Result<()> {
    let mut run = Run::new("train-teacher", argv, &a.common.out)?;
    let corpus = read_corpus(&mut run, &a.corpus)?;
    let pairs = corpus.training_pairs();
    let dims = a.dims.dims(corpus.feature_dim());
    let base = TrainConfig { subset_fraction: a.subset, ..a.optim.apply(TrainConfig::default()) };
    let mut results = Vec::new();
    for seed in a.optim.seed_list() {
        let cfg = TrainConfig { seed, ..base.clone() };
        let outcome = train_teacher(&pairs, &dims, &cfg)?;
        let path = run.path(&format!("teacher-s{seed}.json"));
        outcome.checkpoint.save(&path)?;
        let log = run.path(&format!("teacher-s{seed}.log.jsonl"));
        save_run_log(&outcome.log, &log)?;
        run.outputs.extend([path.clone(), log]);
        results.push(SeedResult {
            seed,
            checkpoint: path,
            id: outcome.checkpoint.id(),
            pairs_used: outcome.pairs_used,
            final_loss: outcome.log.last().map(|r| r.loss),
            accuracy: eval_accuracy(&outcome.checkpoint, &corpus, &a.prompt)?,
        });
    }
    report_seeds(&results);
    let config = json!({ "train": base, "dims": dims, "prompt": a.prompt, "total_pairs": pairs.len() });
    let seeds = a.optim.seed_list();
    run.finish(config, seeds, Value::Array(results.iter().map(SeedResult::json).collect()))
}

/// Every audio item and caption in the corpus, for resolving curated ids.
fn corpus_items(corpus: &Corpus) -> (Vec<AudioItem>, Vec<sonalign::encoders::TextItem>) {
    let mut audios = corpus.wild_audio();
    audios.extend(corpus.pairs.iter().map(|p| p.audio.clone()));
    (audios, corpus.captions())
}

fn cmd_train_student(a: TrainStudentArgs, argv: &[OsString]) -> Result<()> {
    let mut run = Run::new("train-student", argv, &a.common.out)?;
    let teacher = read_checkpoint(&mut run, &a.teacher)?;
    let corpus = read_corpus(&mut run, &a.corpus)?;
    let (audios, texts) = corpus_items(&corpus);
    let improvement_set =
        load_manifest(&a.improvement).with_context(|| format!("loading {}", a.improvement.display()))?;
    run.inputs.push(a.improvement.clone());
    let improvement = resolve_pairs(&improvement_set, &audios, &texts)?;
    let replay: Vec<Pair> = match &a.replay {
        Some(p) => {
            let set = load_manifest(p).with_context(|| format!("loading {}", p.display()))?;
            run.inputs.push(p.clone());
            resolve_pairs(&set, &audios, &texts)?
        }
        None => corpus.training_pairs(),
    };
    let mut base = a.optim.apply(TrainConfig::default());
    base.hard_labels = a.hard_labels;
    base.warm_start = !a.cold_start;
    if let Some(v) = a.beta {
        base.soft.beta = v;
    }
    if let Some(v) = a.soft_temperature {
        base.soft.soft_temperature = v;
    }
    if let Some(v) = a.replay_prob {
        base.replay_prob = v;
    }
    let mut results = Vec::new();
    for seed in a.optim.seed_list() {
        let cfg = TrainConfig { seed, ..base.clone() };
        let outcome = train_student(&teacher, &improvement, &replay, &cfg)?;
        let path = run.path(&format!("student-s{seed}.json"));
        outcome.checkpoint.save(&path)?;
        let log = run.path(&format!("student-s{seed}.log.jsonl"));
        save_run_log(&outcome.log, &log)?;
        run.outputs.extend([path.clone(), log]);
        results.push(SeedResult {
            seed,
            checkpoint: path,
            id: outcome.checkpoint.id(),
            pairs_used: outcome.pairs_used,
            final_loss: outcome.log.last().map(|r| r.loss),
            accuracy: eval_accuracy(&outcome.checkpoint, &corpus, &a.prompt)?,
        });
    }
    if let Some(t) = eval_accuracy(&teacher, &corpus, &a.prompt)? {
        println!("teacher: accuracy {}%", pct(t));
    }
    report_seeds(&results);
    let config = json!({
        "train": base,
        "teacher_id": teacher.id(),
        "improvement_pairs": improvement.len(),
        "replay_pairs": replay.len(),
        "prompt": a.prompt,
    });
    let seeds = a.optim.seed_list();
    run.finish(config, seeds, Value::Array(results.iter().map(SeedResult::json).collect()))
}

fn resolve_labels(names: &[String], corpus: &Corpus) -> Vec<ClassLabel> {
    if names.len() == 1 && names[0] == "corpus" {
        corpus.labels()
    } else {
        labels_from_names(names)
    }
}

fn cmd_curate(a: CurateArgs, argv: &[OsString]) -> Result<()> {
    let mut run = Run::new("curate", argv, &a.common.out)?;
    let teacher = read_checkpoint(&mut run, &a.teacher)?;
    let corpus = read_corpus(&mut run, &a.corpus)?;
    let config = CurationConfig { sigma: a.sigma, sigma_ds: a.sigma_ds, match_mode: a.mode.into() };
    let labels = a.labels.as_deref().map(|l| resolve_labels(l, &corpus));
    let pairs = corpus.training_pairs();
    let wild = corpus.wild_audio();
    let pool = || -> Result<AudioPool> {
        match &a.cache {
            Some(path) => {
                let (pool, status) = cached_audio_pool(&teacher.params, &wild, path)?;
                let word = match status {
                    CacheStatus::Hit => "hit",
                    CacheStatus::Missing => "built",
                    CacheStatus::Stale => "rebuilt (stale)",
                };
                println!("embedding cache {}: {word}", path.display());
                Ok(pool)
            }
            None => Ok(AudioPool::embed(&teacher.params, &wild)?),
        }
    };
    let set = match (a.strategy, labels.as_deref()) {
        (StrategyArg::Du, _) => curate_du_pool(&teacher.params, &corpus.captions(), &pool()?, &config)?,
        (StrategyArg::Ds, Some(labels)) => curate_ds(&teacher.params, &pairs, labels, &a.prompt, &config)?,
        (StrategyArg::Ads, Some(labels)) => {
            match curate_ads_pool(&teacher.params, &pairs, labels, &a.prompt, &pool()?, &config) {
                Err(Error::EmptyDsCaptionSet) => bail!(
                    "no caption reached --sigma-ds {} against the given labels; lower --sigma-ds or check --labels",
                    a.sigma_ds
                ),
                other => other?,
            }
        }
        (_, None) => unreachable!("clap requires --labels for ds and ads"),
    };
    let strategy = match a.strategy {
        StrategyArg::Du => Strategy::Du,
        StrategyArg::Ds => Strategy::Ds,
        StrategyArg::Ads => Strategy::Ads,
    };
    let path = run.path(&format!("curated-{}.jsonl", strategy.to_string().to_lowercase()));
    save_manifest(&set, &path)?;
    run.outputs.push(path.clone());
    println!("{strategy}: {} pairs (sigma {}, sigma_ds {}) -> {}", set.len(), a.sigma, a.sigma_ds, path.display());
    let results = json!({ "pairs": set.len(), "manifest": path.display().to_string(), "teacher_id": set.teacher_id });
    run.finish(
        json!({ "strategy": strategy, "curation": config, "prompt": a.prompt, "labels": labels }),
        vec![],
        results,
    )
}

#[derive(Serialize)]
struct EvalRow {
    checkpoint: String,
    checkpoint_id: String,
    role: sonalign::trainer::Role,
    step: usize,
    report: ZeroShotReport,
}

#[derive(Serialize)]
struct EvalReport {
    prompt: PromptTemplate,
    split: SplitArg,
    class_names: Vec<String>,
    rows: Vec<EvalRow>,
}

fn cmd_eval(a: EvalArgs, argv: &[OsString]) -> Result<()> {
    let mut run = Run::new("eval", argv, &a.common.out)?;
    let corpus = read_corpus(&mut run, &a.corpus)?;
    let labeled: Vec<(AudioItem, usize)> = match a.split {
        SplitArg::Eval => corpus.labeled_eval(),
        SplitArg::Wild => corpus.wild.iter().map(|w| (w.audio.clone(), w.class)).collect(),
        SplitArg::Pairs => corpus.pairs.iter().map(|p| (p.audio.clone(), p.class)).collect(),
    };
    let prompts = build_prompts(&corpus.labels(), &a.prompt)?;
    let mut rows = Vec::new();
    for path in &a.checkpoint {
        let ckpt = read_checkpoint(&mut run, path)?;
        let report = evaluate(&ckpt.params, &prompts, &labeled)?;
        rows.push(EvalRow {
            checkpoint: path.display().to_string(),
            checkpoint_id: ckpt.id(),
            role: ckpt.role,
            step: ckpt.step,
            report,
        });
    }
    let width = rows.iter().map(|r| r.checkpoint.len()).max().unwrap_or(10).max(10);
    println!("{:<width$}  {:>8}  {:>10}  {:>9}", "checkpoint", "role", "accuracy", "correct");
    for r in &rows {
        let role = serde_json::to_value(r.role)?.as_str().unwrap_or_default().to_owned();
        println!(
            "{:<width$}  {:>8}  {:>9}%  {:>9}",
            r.checkpoint,
            role,
            pct(r.report.accuracy),
            format!("{}/{}", r.report.correct, r.report.total)
        );
    }
    let report = EvalReport { prompt: a.prompt.clone(), split: a.split, class_names: corpus.class_names.clone(), rows };
    let path = a.report.clone().unwrap_or_else(|| run.path("eval-report.json"));
    write_json(&path, &report)?;
    run.outputs.push(path);
    let accs: Vec<f64> = report.rows.iter().map(|r| r.report.accuracy).collect();
    run.finish(json!({ "prompt": a.prompt, "split": a.split }), vec![], json!({ "accuracies": accs }))
}

fn cmd_gradcheck(a: GradcheckArgs) -> Result<()> {
    let opts = GradCheckOptions {
        first_seed: a.first_seed,
        seeds: a.seeds,
        eps: a.eps,
        tolerance: a.tolerance,
        max_dim: a.max_dim,
        max_batch: a.max_batch,
        inject_sign_flip: a.inject_sign_flip.clone(),
    };
    let start = Instant::now();
    let report = gradcheck::run(&opts)?;
    let width = report.tensors.iter().map(|t| t.name.len()).max().unwrap_or(6).max(6);
    println!("{:<width$}  {:>12}  {:>6}  {:>8}  {:>7}  status", "tensor", "max rel err", "seed", "coords", "skipped");
    for t in &report.tensors {
        println!(
            "{:<width$}  {:>12.3e}  {:>6}  {:>8}  {:>7}  {}",
            t.name,
            t.max_rel_error,
            t.worst_seed,
            t.coordinates,
            t.skipped,
            if t.passed { "ok" } else { "FAIL" }
        );
    }
    println!("{} seeds in {:.2}s", report.seeds, start.elapsed().as_secs_f64());
    if let Some(path) = &a.report {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir)?;
        }
        write_json(path, &report)?;
    }
    let failures = report.failures();
    if !failures.is_empty() {
        let names: Vec<&str> = failures.iter().map(|t| t.name.as_str()).collect();
        bail!("gradient check failed at tolerance {:e} for: {}", report.tolerance, names.join(", "));
    }
    println!("all gradients match within {:e}", report.tolerance);
    Ok(())
}

fn slug(name: &str) -> String {
    let mut s: String =
        name.chars().map(|c| if c.is_ascii_alphanumeric() { c.to_ascii_lowercase() } else { '-' }).collect();
    while s.contains("--") {
        s = s.replace("--", "-");
    }
    s.trim_matches('-').to_owned()
}

#[derive(Serialize)]
struct RecipeFile<'a> {
    report: &'a RecipeReport,
    verdict: sonalign::experiment::RecipeVerdict,
}

fn cmd_recipe(a: RecipeArgs, argv: &[OsString]) -> Result<()> {
    let mut run = Run::new("recipe", argv, &a.common.out)?;
    let mut cfg = RecipeConfig::desk_scale();
    cfg.seeds = (a.first_seed..a.first_seed + a.seeds).collect();
    if let Some(v) = a.corpus_seed {
        cfg.corpus.seed = v;
    }
    if let Some(v) = a.noise {
        cfg.corpus.noise_scale = v;
    }
    if let Some(v) = a.domain_shift {
        cfg.corpus.domain_shift = v;
    }
    if let Some(v) = a.teacher_steps {
        cfg.teacher.steps = v;
    }
    if let Some(v) = a.subset_teacher_steps {
        cfg.subset_teacher_steps = v;
    }
    if let Some(v) = a.student_steps {
        cfg.student.steps = v;
    }
    if let Some(v) = a.batch_size {
        cfg.teacher.batch_size = v;
        cfg.student.batch_size = v;
    }
    if let Some(v) = a.subset {
        cfg.subset_fraction = v;
    }
    if let Some(v) = a.sigma {
        cfg.curation.sigma = v;
    }
    if let Some(v) = a.sigma_ds {
        cfg.curation.sigma_ds = v;
    }
    if let Some(v) = a.mode {
        cfg.curation.match_mode = v.into();
    }
    if let Some(v) = a.beta {
        cfg.student.soft.beta = v;
    }
    if let Some(v) = a.replay_prob {
        cfg.student.replay_prob = v;
    }
    if let Some(v) = a.prompt.clone() {
        cfg.prompt = v;
    }

    let outcome = run_recipe(&cfg)?;
    let corpus_file = run.path(CORPUS_FILE);
    save_corpus(&outcome.corpus, &corpus_file)?;
    run.outputs.push(corpus_file);
    let ckpt_dir = run.path("checkpoints");
    let manifest_dir = run.path("curated");
    fs::create_dir_all(&ckpt_dir)?;
    fs::create_dir_all(&manifest_dir)?;
    for art in &outcome.artifacts {
        let stem = format!("{}-s{}", slug(&art.name), art.seed);
        let path = ckpt_dir.join(format!("{stem}.json"));
        art.checkpoint.save(&path)?;
        run.outputs.push(path);
        if let Some(set) = &art.improvement {
            let path = manifest_dir.join(format!("{stem}.jsonl"));
            save_manifest(set, &path)?;
            run.outputs.push(path);
        }
    }
    let verdict = RecipeConfig::check(&outcome.report);
    let table = outcome.report.table();
    let report_path = run.path("report.json");
    write_json(&report_path, &RecipeFile { report: &outcome.report, verdict })?;
    let table_path = run.path("report.txt");
    fs::write(&table_path, &table)?;
    run.outputs.extend([report_path, table_path]);

    print!("{table}");
    let mark = |ok: bool| if ok { "yes" } else { "no" };
    println!("DS does not beat ADS+SL: {}", mark(verdict.ds_not_above_ads_sl));
    println!("ADS+SL gain over teacher: {:+.1} points ({})", 100.0 * verdict.ads_sl_gain, mark(verdict.gain_ok()));
    println!(
        "subset teacher gap {:.1} points, recovered {:+.1} ({})",
        100.0 * verdict.subset_gap,
        100.0 * verdict.subset_recovery,
        mark(verdict.recovery_ok())
    );
    let seeds = cfg.seeds.clone();
    run.finish(serde_json::to_value(&cfg)?, seeds, serde_json::to_value(verdict)?)
}

/// Outcome of parsing: either a command or the process exit code.
fn parse(argv: Vec<OsString>) -> std::result::Result<(Cli, Vec<OsString>), ExitCode> {
    let argv = match expand_config(argv) {
        Ok(a) => a,
        Err(msg) => {
            eprintln!("error: {msg}");
            return Err(ExitCode::from(2));
        }
    };
    let matches = Cli::command().try_get_matches_from(&argv).and_then(|m| Cli::from_arg_matches(&m));
    match matches {
        Ok(cli) => Ok((cli, argv)),
        Err(e) => {
            let _ = e.print();
            Err(ExitCode::from(u8::try_from(e.exit_code()).unwrap_or(2)))
        }
    }
}

fn dispatch(cli: Cli, argv: &[OsString]) -> Result<()> {
    match cli.command {
        Command::GenCorpus(a) => cmd_gen_corpus(a, argv),
        Command::TrainTeacher(a) => cmd_train_teacher(a, argv),
        Command::TrainStudent(a) => cmd_train_student(a, argv),
        Command::Curate(a) => cmd_curate(a, argv),
        Command::Eval(a) => cmd_eval(a, argv),
        Command::Gradcheck(a) => cmd_gradcheck(a),
        Command::Recipe(a) => cmd_recipe(a, argv),
    }
}

fn main() -> ExitCode {
    let (cli, argv) = match parse(std::env::args_os().collect()) {
        Ok(p) => p,
        Err(code) => return code,
    };
    match dispatch(cli, &argv) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
