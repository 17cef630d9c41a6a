//! End-to-end training behavior on a small synthetic corpus: loss descent,
//! generalization to held-out families, determinism, and checkpoint
//! round-trips through real files.

use entsiam::binfeed::{synth_corpus, Manifest, SynthSpec};
use entsiam::episodes::{split_classes, ClassSplit, LineageFilter};
use entsiam::obfuscate::obfuscate_corpus;
use entsiam::trainer::{
    evaluate, export_embeddings, init_checkpoint, load_checkpoint, save_checkpoint, train,
    TrainConfig, TrainRun,
};
use std::sync::OnceLock;

const CORPUS_SEED: u64 = 901;
const SPLIT_SEED: u64 = 902;

fn small_corpus() -> Manifest {
    synth_corpus(
        &SynthSpec {
            n_families: 6,
            samples_per_family: 12,
            // Small binaries keep rendering cheap; the family banding
            // survives because segments scale with length.
            len_range: 24 * 1024..=48 * 1024,
            segments: 12,
        },
        CORPUS_SEED,
    )
    .unwrap()
}

fn small_config() -> TrainConfig {
    TrainConfig {
        way: 2,
        shot: 1,
        n_query: 19,
        episodes_train: 120,
        episodes_eval: 40,
        runs: 2,
        channels: 8,
        head_dim: 32,
        seed: 31,
        ..TrainConfig::default()
    }
}

struct Fixture {
    manifest: Manifest,
    split: ClassSplit,
    cfg: TrainConfig,
    run: TrainRun,
}

static FIXTURE: OnceLock<Fixture> = OnceLock::new();

/// One trained model shared by every test here; training it once keeps the
/// suite fast without weakening any individual check.
fn fixture() -> &'static Fixture {
    FIXTURE.get_or_init(|| {
        let manifest = small_corpus();
        let split = split_classes(&manifest, 4, 2, SPLIT_SEED).unwrap();
        let cfg = small_config();
        let run = train(&cfg, &manifest, &split.train_classes).unwrap();
        Fixture {
            manifest,
            split,
            cfg,
            run,
        }
    })
}

#[test]
fn training_reduces_the_loss() {
    let f = fixture();
    assert_eq!(f.run.losses.len(), f.cfg.episodes_train);
    assert!(f.run.losses.iter().all(|r| r.total.is_finite()));
    let mean = |rs: &[entsiam::trainer::LossRecord]| {
        rs.iter().map(|r| r.total).sum::<f64>() / rs.len() as f64
    };
    let head = mean(&f.run.losses[..30]);
    let tail = mean(&f.run.losses[f.run.losses.len() - 30..]);
    assert!(
        tail < 0.9 * head,
        "loss did not descend: first 30 mean {head:.4}, last 30 mean {tail:.4}"
    );
}

#[test]
fn trained_model_beats_an_untrained_one_on_held_out_families() {
    let f = fixture();
    let trained = evaluate(
        &f.run.checkpoint,
        &f.manifest,
        &f.split.test_classes,
        LineageFilter::CleanOnly,
        &f.cfg,
    )
    .unwrap();
    let untrained = evaluate(
        &init_checkpoint(&f.cfg),
        &f.manifest,
        &f.split.test_classes,
        LineageFilter::CleanOnly,
        &f.cfg,
    )
    .unwrap();

    assert!(
        (untrained.mean - 0.5).abs() < 0.12,
        "untrained model should sit at chance, got {:.4}",
        untrained.mean
    );
    assert!(
        trained.mean > untrained.mean + 0.15,
        "training gained too little: trained {:.4} vs untrained {:.4}",
        trained.mean,
        untrained.mean
    );
    assert!(
        trained.mean >= 0.70,
        "trained accuracy {:.4} below expectation",
        trained.mean
    );
}

#[test]
fn identical_configs_produce_identical_checkpoint_files() {
    let manifest = small_corpus();
    let split = split_classes(&manifest, 4, 2, SPLIT_SEED).unwrap();
    let cfg = TrainConfig {
        episodes_train: 25,
        ..small_config()
    };
    let a = train(&cfg, &manifest, &split.train_classes).unwrap();
    let b = train(&cfg, &manifest, &split.train_classes).unwrap();

    let dir = tempfile::tempdir().unwrap();
    let pa = dir.path().join("a.ckpt");
    let pb = dir.path().join("b.ckpt");
    save_checkpoint(&pa, &a.checkpoint).unwrap();
    save_checkpoint(&pb, &b.checkpoint).unwrap();
    assert_eq!(
        std::fs::read(&pa).unwrap(),
        std::fs::read(&pb).unwrap(),
        "same config and corpus must reproduce the same checkpoint bytes"
    );
}

#[test]
fn checkpoint_round_trips_through_evaluation() {
    let f = fixture();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.ckpt");
    save_checkpoint(&path, &f.run.checkpoint).unwrap();
    let loaded = load_checkpoint(&path).unwrap();

    let cfg = TrainConfig {
        episodes_eval: 10,
        ..f.cfg.clone()
    };
    let before = evaluate(
        &f.run.checkpoint,
        &f.manifest,
        &f.split.test_classes,
        LineageFilter::CleanOnly,
        &cfg,
    )
    .unwrap();
    let after = evaluate(
        &loaded,
        &f.manifest,
        &f.split.test_classes,
        LineageFilter::CleanOnly,
        &cfg,
    )
    .unwrap();
    assert_eq!(before, after);
}

#[test]
fn obfuscated_test_episodes_evaluate_end_to_end() {
    let f = fixture();
    let noisy = obfuscate_corpus(&f.manifest, &[200], 0x90, 77).unwrap();
    let report = evaluate(
        &f.run.checkpoint,
        &noisy,
        &f.split.test_classes,
        LineageFilter::ObfuscatedOnly(200),
        &TrainConfig {
            episodes_eval: 10,
            ..f.cfg.clone()
        },
    )
    .unwrap();
    assert!(report.run_means.iter().all(|m| (0.0..=1.0).contains(m)));
}

#[test]
fn embeddings_export_covers_a_real_corpus() {
    let f = fixture();
    let table = export_embeddings(&f.run.checkpoint, &f.manifest, f.cfg.render).unwrap();
    assert_eq!(table.lines().count(), 1 + f.manifest.len());
}
