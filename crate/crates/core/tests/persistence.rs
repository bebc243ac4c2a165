mod common;

use std::fs;

use sonalign::corpus::{
    cached_audio_pool, generate, load_corpus, save_corpus, CacheStatus, EmbeddingCache, SyntheticCorpusSpec,
};
use sonalign::curation::{
    curate_ads, curate_ads_pool, curate_du, curate_du_pool, load_manifest, save_manifest, AudioPool, CurationConfig,
    MatchMode,
};
use sonalign::encoders::init_params;
use sonalign::trainer::{train_teacher, Checkpoint, Role, TrainConfig};
use sonalign::zero_shot::{labels_from_names, PromptTemplate};
use sonalign::Error;

fn small_spec(seed: u64) -> SyntheticCorpusSpec {
    SyntheticCorpusSpec { num_classes: 4, items_per_class: 20, feature_dim: 8, seed, ..Default::default() }
}

fn bits(v: &[f64]) -> Vec<u64> {
    v.iter().map(|x| x.to_bits()).collect()
}

#[test]
fn corpus_round_trips_bit_exactly() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("corpus.jsonl");
    let corpus = generate(&small_spec(3)).unwrap();
    save_corpus(&corpus, &path).unwrap();
    let back = load_corpus(&path).unwrap();
    assert_eq!(back, corpus);
    for (a, b) in corpus.pairs.iter().zip(&back.pairs) {
        assert_eq!(bits(&a.audio.features), bits(&b.audio.features));
    }
    let again = dir.path().join("again.jsonl");
    save_corpus(&back, &again).unwrap();
    assert_eq!(fs::read(&path).unwrap(), fs::read(&again).unwrap());
}

#[test]
fn corpus_generation_is_seeded() {
    assert_eq!(generate(&small_spec(5)).unwrap(), generate(&small_spec(5)).unwrap());
    assert_ne!(generate(&small_spec(5)).unwrap(), generate(&small_spec(6)).unwrap());
}

#[test]
fn corrupt_and_foreign_files_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("corpus.jsonl");
    save_corpus(&generate(&small_spec(1)).unwrap(), &path).unwrap();
    let text = fs::read_to_string(&path).unwrap();

    let truncated: String = text.lines().take(5).map(|l| format!("{l}\n")).collect();
    fs::write(&path, truncated).unwrap();
    assert!(matches!(load_corpus(&path), Err(Error::CorruptRecord { .. })));

    let mut lines: Vec<&str> = text.lines().collect();
    lines[3] = "{not json";
    fs::write(&path, lines.join("\n")).unwrap();
    assert!(matches!(load_corpus(&path), Err(Error::CorruptRecord { line: 4, .. })));

    fs::write(&path, text.replacen("\"format_version\":1", "\"format_version\":99", 1)).unwrap();
    assert!(matches!(load_corpus(&path), Err(Error::FormatVersionMismatch { found: 99, .. })));

    assert!(matches!(load_corpus(&dir.path().join("missing.jsonl")), Err(Error::Io { .. })));
}

#[test]
fn manifest_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let toy = common::toy_corpus(9, 40, 60);
    let captions: Vec<_> = toy.pairs.iter().map(|(_, t)| t.clone()).collect();
    let cfg = CurationConfig { sigma: 0.2, ..Default::default() };
    let set = curate_du(&toy.model, &captions, &toy.wild, &cfg).unwrap();
    assert!(!set.is_empty());
    let path = dir.path().join("du.jsonl");
    save_manifest(&set, &path).unwrap();
    let back = load_manifest(&path).unwrap();
    assert_eq!(back, set);
    assert_eq!(
        bits(&set.pairs.iter().map(|p| p.similarity).collect::<Vec<_>>()),
        bits(&back.pairs.iter().map(|p| p.similarity).collect::<Vec<_>>())
    );
    assert_eq!(back.teacher_id, toy.model.content_hash());
}

#[test]
fn manifest_rejects_duplicates() {
    let dir = tempfile::tempdir().unwrap();
    let toy = common::toy_corpus(10, 20, 30);
    let captions: Vec<_> = toy.pairs.iter().map(|(_, t)| t.clone()).collect();
    let set =
        curate_du(&toy.model, &captions, &toy.wild, &CurationConfig { sigma: 0.0, ..Default::default() }).unwrap();
    let path = dir.path().join("m.jsonl");
    save_manifest(&set, &path).unwrap();
    let mut text = fs::read_to_string(&path).unwrap();
    let dup = text.lines().nth(1).unwrap().to_owned();
    text.push_str(&dup);
    text.push('\n');
    fs::write(&path, text).unwrap();
    assert!(matches!(load_manifest(&path), Err(Error::CorruptRecord { .. })));
}

#[test]
fn checkpoint_round_trips_bit_exactly() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = generate(&small_spec(2)).unwrap();
    let cfg = TrainConfig { batch_size: 8, steps: 5, ..Default::default() };
    let dims = sonalign::encoders::ModelDims::new(32, 8);
    let ckpt = train_teacher(&corpus.training_pairs(), &dims, &cfg).unwrap().checkpoint;
    let path = dir.path().join("t.json");
    ckpt.save(&path).unwrap();
    let back = Checkpoint::load(&path).unwrap();
    assert_eq!(back, ckpt);
    assert_eq!(back.id(), ckpt.id());
    assert_eq!(back.to_bytes(), ckpt.to_bytes());
    assert_eq!(back.params.log_temperature.to_bits(), ckpt.params.log_temperature.to_bits());
    for ((_, a), (_, b)) in ckpt.params.tensors().iter().zip(back.params.tensors()) {
        assert_eq!(bits(a), bits(b));
    }
}

#[test]
fn checkpoint_version_is_checked() {
    let dir = tempfile::tempdir().unwrap();
    let params = init_params(&sonalign::encoders::ModelDims::new(16, 4), 0).unwrap();
    let ckpt = Checkpoint::new(Role::Teacher, 0, &TrainConfig::default(), params);
    let path = dir.path().join("c.json");
    let text = String::from_utf8(ckpt.to_bytes()).unwrap().replacen("\"format_version\":1", "\"format_version\":2", 1);
    fs::write(&path, text).unwrap();
    assert!(matches!(Checkpoint::load(&path), Err(Error::FormatVersionMismatch { found: 2, .. })));
}

#[test]
fn cache_round_trips_and_detects_staleness() {
    let dir = tempfile::tempdir().unwrap();
    let toy = common::toy_corpus(11, 10, 50);
    let path = dir.path().join("wild.bin");
    let cache = EmbeddingCache::build(&toy.model, &toy.wild).unwrap();
    cache.save(&path).unwrap();
    let back = EmbeddingCache::load(&path).unwrap();
    assert_eq!(back, cache);
    assert_eq!(fs::metadata(&path).unwrap().len(), (cache.embeddings.len() * 8) as u64);

    let (_, status) = cached_audio_pool(&toy.model, &toy.wild, &path).unwrap();
    assert_eq!(status, CacheStatus::Hit);
    let other = common::toy_corpus(12, 10, 50).model;
    assert!(matches!(back.pool_for(&other, &toy.wild), Err(Error::StaleCache)));

    let fresh = dir.path().join("fresh.bin");
    let (_, status) = cached_audio_pool(&toy.model, &toy.wild, &fresh).unwrap();
    assert_eq!(status, CacheStatus::Missing);
    let mut bytes = fs::read(&fresh).unwrap();
    bytes.pop();
    fs::write(&fresh, bytes).unwrap();
    assert!(matches!(EmbeddingCache::load(&fresh), Err(Error::CorruptRecord { .. })));
}

#[test]
fn cached_curation_equals_uncached() {
    let dir = tempfile::tempdir().unwrap();
    let labels = labels_from_names(&["dog", "rain", "siren"]);
    let prompt = PromptTemplate::default();
    for seed in 0..5 {
        let toy = common::toy_corpus(20 + seed, 40, 60);
        let captions: Vec<_> = toy.pairs.iter().map(|(_, t)| t.clone()).collect();
        let path = dir.path().join(format!("c{seed}.bin"));
        cached_audio_pool(&toy.model, &toy.wild, &path).unwrap();
        let (pool, status) = cached_audio_pool(&toy.model, &toy.wild, &path).unwrap();
        assert_eq!(status, CacheStatus::Hit);
        assert_eq!(pool.embeddings, AudioPool::embed(&toy.model, &toy.wild).unwrap().embeddings);
        for mode in [MatchMode::AllAboveThreshold, MatchMode::Top1AboveThreshold] {
            let cfg = CurationConfig { sigma: 0.3, sigma_ds: 0.0, match_mode: mode };
            assert_eq!(
                curate_du_pool(&toy.model, &captions, &pool, &cfg).unwrap(),
                curate_du(&toy.model, &captions, &toy.wild, &cfg).unwrap()
            );
            assert_eq!(
                curate_ads_pool(&toy.model, &toy.pairs, &labels, &prompt, &pool, &cfg).unwrap(),
                curate_ads(&toy.model, &toy.pairs, &labels, &prompt, &toy.wild, &cfg).unwrap()
            );
        }
    }
}
