use dpa_core::dataio::{synth_generate, Corpus, SynthConfig};
use dpa_core::dpa::{
    pretrain_regime, run_regime, summarize, Checkpoint, FinetuneConfig, ModelConfig, OptimConfig, PretrainConfig,
    Regime,
};
use dpa_core::parallel::Execution;

fn small_corpus() -> Corpus {
    let cfg = SynthConfig {
        num_exercises: 40,
        num_pretrain_students: 30,
        num_finetune_students: 20,
        pretrain_min_len: 5,
        finetune_min_len: 5,
        mean_extra_len: 5.0,
        max_len: 20,
    };
    synth_generate(&cfg, 11).unwrap()
}

fn pretrain_cfg(steps: u64) -> PretrainConfig {
    PretrainConfig {
        steps,
        batch_size: 4,
        eval_every: 2,
        eval_sequences: 4,
        optim: OptimConfig {
            warmup: 2,
            ..OptimConfig::default()
        },
        execution: Execution::Parallel,
    }
}

fn finetune_cfg() -> FinetuneConfig {
    FinetuneConfig {
        batch_size: 4,
        eval_every: 2,
        patience: 2,
        max_evals: 3,
        folds: 4,
        ..FinetuneConfig::default()
    }
}

#[test]
fn corpus_survives_disk_round_trip() {
    let corpus = small_corpus();
    let dir = tempfile::tempdir().unwrap();
    corpus.save(dir.path()).unwrap();
    let back = Corpus::load(dir.path()).unwrap();
    assert_eq!(back.pretrain, corpus.pretrain);
    assert_eq!(back.finetune, corpus.finetune);
    assert_eq!(back.exercises.len(), 40);
}

#[test]
fn every_regime_runs_end_to_end() {
    let corpus = small_corpus();
    let model = ModelConfig::desk();
    let fractions = [0.5, 1.0];
    let mut rows = Vec::new();
    for regime in Regime::ALL {
        let run = run_regime(&corpus, regime, &model, &pretrain_cfg(2), &finetune_cfg(), &fractions, 3).unwrap();
        assert_eq!(run.rows.len(), 8, "{regime:?}");
        assert!(run.rows.iter().all(|r| r.test_mae.is_finite() && r.test_mae >= 0.0));
        assert_eq!(run.pretrain.is_empty(), regime == Regime::None);
        rows.extend(run.rows);
    }
    let summary = summarize(&rows);
    assert_eq!(summary.len(), Regime::ALL.len() * 2);
}

#[test]
fn resumed_training_matches_uninterrupted_training() {
    let corpus = small_corpus();
    let model = ModelConfig::desk();
    let (full, _) = pretrain_regime(&corpus, Regime::Dpa, &model, &pretrain_cfg(4), 9, |_, _| Ok(())).unwrap();

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ck.json");
    let (half, _) = pretrain_regime(&corpus, Regime::Dpa, &model, &pretrain_cfg(2), 9, |_, _| Ok(())).unwrap();
    Checkpoint::capture(&half).save(&path).unwrap();
    let mut resumed = Checkpoint::load(&path).unwrap().restore().unwrap();
    let (train, _) = dpa_core::dpa::pretrain_split(&corpus.pretrain, &model, 4).unwrap();
    let cfg = pretrain_cfg(4);
    while resumed.step < 4 {
        resumed.step(&train, &cfg).unwrap();
    }
    for ((_, name, a), (_, _, b)) in full.model.store.iter().zip(resumed.model.store.iter()) {
        assert_eq!(a, b, "{name}");
    }
}
