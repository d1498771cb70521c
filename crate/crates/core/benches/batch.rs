//! Parallel vs sequential: one training step over a batch, and inference
//! over a split. Build with `--no-default-features` to compile rayon out.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use dam_core::config::Settings;
use dam_core::data::AnnotatedDialogue;
use dam_core::fixtures;
use dam_core::ingestion::DatasetSplit;
use dam_core::model::{DamModel, Prepared};
use dam_core::parallel::Execution;
use dam_core::pipeline::{self, Corpus};
use dam_core::trainer::Trainer;

fn setup(batch_size: usize) -> (tempfile::TempDir, Corpus, Settings) {
    let dir = tempfile::tempdir().unwrap();
    fixtures::write_dataset(dir.path()).unwrap();
    let corpus = Corpus::load(dir.path(), true).unwrap();
    let mut settings = Settings::from_text(fixtures::TOY_CONFIG).unwrap();
    settings.train.batch_size = batch_size;
    (dir, corpus, settings)
}

fn prepared(model: &DamModel, split: &DatasetSplit) -> Vec<Prepared> {
    split
        .instances
        .iter()
        .map(|i| model.prepare(i, split.conversation(i)).unwrap())
        .collect()
}

fn train_step(c: &mut Criterion) {
    let mut group = c.benchmark_group("train_step");
    group.sample_size(20);
    let (_dir, corpus, settings) = setup(32);
    for exec in [Execution::Parallel, Execution::Sequential] {
        let model = pipeline::build_model(&settings, &corpus).unwrap();
        let items = prepared(&model, &corpus.train);
        let ctx = model.edge_context(corpus.train.conversations.values(), exec).unwrap();
        let mut trainer = Trainer::new(model, settings.train.clone(), exec).unwrap();
        let batch: Vec<_> = items.iter().map(|p| (p, corpus.train.conversation(&p.instance))).collect();
        let discourse: Vec<&AnnotatedDialogue> = corpus.discourse.iter().collect();
        group.bench_with_input(BenchmarkId::new(format!("{exec:?}"), batch.len()), &batch, |b, batch| {
            b.iter(|| trainer.train_step(batch, &discourse, &ctx, 1).unwrap())
        });
    }
    group.finish();
}

fn predict(c: &mut Criterion) {
    let mut group = c.benchmark_group("predict_split");
    let (_dir, corpus, settings) = setup(8);
    let model = pipeline::build_model(&settings, &corpus).unwrap();
    for exec in [Execution::Parallel, Execution::Sequential] {
        group.bench_function(format!("{exec:?}"), |b| {
            b.iter(|| pipeline::evaluate_split(&model, &corpus.train, &settings, exec).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, train_step, predict);
criterion_main!(benches);
