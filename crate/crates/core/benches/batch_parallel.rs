//! One pre-training gradient batch, rayon workers against the sequential
//! loop. Build with `--no-default-features` to see the parallel arm fall
//! back to sequential.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use dpa_core::dataio::{synth_generate, InteractionSequence, SynthConfig};
use dpa_core::dpa::pretrain::batch_gradients;
use dpa_core::dpa::{prepare_sequence, DpaModel, ModelConfig, Regime};
use dpa_core::numcore::Mode;
use dpa_core::parallel::Execution;

fn batch_gradients_bench(c: &mut Criterion) {
    let synth = SynthConfig {
        num_pretrain_students: 32,
        num_finetune_students: 1,
        ..SynthConfig::default()
    };
    let corpus = synth_generate(&synth, 3).unwrap();
    let cfg = ModelConfig::desk();
    let seqs: Vec<InteractionSequence> = corpus
        .pretrain
        .iter()
        .map(|s| prepare_sequence(s, &cfg).unwrap())
        .collect();
    let model = DpaModel::new(cfg, Regime::Dpa, synth.num_exercises, 5).unwrap();

    let mut group = c.benchmark_group("batch_gradients");
    group.sample_size(10);
    for size in [8, 32] {
        let batch: Vec<&InteractionSequence> = seqs.iter().take(size).collect();
        let seeds: Vec<u64> = (0..size as u64).collect();
        for (label, exec) in [("sequential", Execution::Sequential), ("parallel", Execution::Parallel)] {
            group.bench_with_input(BenchmarkId::new(label, size), &batch, |b, batch| {
                b.iter(|| batch_gradients(&model, batch, Mode::Train, &seeds, exec).unwrap())
            });
        }
    }
    group.finish();
}

criterion_group!(benches, batch_gradients_bench);
criterion_main!(benches);
