use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use knnplus::baselines::{VoteMethod, VotePredictor};
use knnplus::eval::{evaluate, HeadPredictor};
use knnplus::synth::{generate, SynthConfig};
use knnplus::train::{accumulate, Trainer, TrainConfig};
use knnplus::{Execution, HeadConfig, HeadParams, Index, Tables};

const MODES: [(&str, Execution); 2] = [("sequential", Execution::Sequential), ("parallel", Execution::Parallel)];

struct Fixture {
    data: knnplus::synth::SynthData,
    tables: Tables,
    index: Index,
    head: HeadConfig,
    params: HeadParams,
}

fn fixture() -> Fixture {
    let data = generate(&SynthConfig { source_n: 4000, target_n: 512, ..Default::default() }).unwrap();
    let tables = Tables::new(data.vectors.clone());
    let index = Index::build(&data.source, &data.vectors).unwrap();
    let head = HeadConfig { k: 10, ..HeadConfig::new(32) };
    let params = HeadParams::init(&head).unwrap();
    Fixture { data, tables, index, head, params }
}

fn retrieval(c: &mut Criterion, f: &Fixture) {
    let queries: Vec<(&str, &[f64])> =
        f.data.target.examples().iter().map(|e| (e.id.as_str(), f.tables.retrieval.get(&e.id).unwrap())).collect();
    let mut g = c.benchmark_group("query_batch_k20");
    for (name, exec) in MODES {
        g.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| f.index.query_batch(&queries, 20, false, exec).unwrap())
        });
    }
    g.finish();
}

fn gradients(c: &mut Criterion, f: &Fixture) {
    let trainer = Trainer::new(f.head, TrainConfig::default());
    let batches = trainer.prepare_batches(&f.data.target, &f.index, &f.tables, false).unwrap();
    let refs: Vec<_> = batches.iter().take(64).collect();
    let mut g = c.benchmark_group("accumulate_64_queries");
    for (name, exec) in MODES {
        g.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| accumulate(&f.params, &f.head, &refs, exec).unwrap())
        });
    }
    g.finish();
}

fn evaluation(c: &mut Criterion, f: &Fixture) {
    let head = HeadPredictor { config: f.head, params: &f.params, tables: &f.tables };
    let vote = VotePredictor { method: VoteMethod::Majority, k: 10 };
    let mut g = c.benchmark_group("evaluate");
    g.sample_size(20);
    for (name, exec) in MODES {
        g.bench_function(BenchmarkId::new("head", name), |b| {
            b.iter(|| evaluate(&head, &f.data.target, &f.index, &f.tables, 10, false, exec).unwrap())
        });
        g.bench_function(BenchmarkId::new("majority", name), |b| {
            b.iter(|| evaluate(&vote, &f.data.target, &f.index, &f.tables, 10, false, exec).unwrap())
        });
    }
    g.finish();
}

fn benches(c: &mut Criterion) {
    let f = fixture();
    retrieval(c, &f);
    gradients(c, &f);
    evaluation(c, &f);
}

criterion_group!(throughput, benches);
criterion_main!(throughput);
