use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion, Throughput};

use grn_core::graph::{synth_generate, SynthParams};
use grn_core::model::{GrnConfig, GrnModel};
use grn_core::perf::first_event_output;
use grn_core::retention::{retain, Paradigm};
use grn_core::{Matrix, RngState};

const DIM: usize = 32;

fn sequence_retention(c: &mut Criterion) {
    let mut group = c.benchmark_group("retain");
    for len in [128usize, 512] {
        let mut rng = RngState::new(len as u64);
        let scale = 1.0 / (DIM as f64).sqrt();
        let q = rng.normal_matrix(len, DIM, scale);
        let k = rng.normal_matrix(len, DIM, scale);
        let v = rng.normal_matrix(len, DIM, 1.0);
        let w = vec![1.0; len];
        let s = Matrix::zeros(DIM, DIM);
        group.throughput(Throughput::Elements(len as u64));
        for p in [Paradigm::Parallel, Paradigm::Recurrent, Paradigm::Chunkwise(64)] {
            group.bench_with_input(BenchmarkId::new(p.to_string(), len), &p, |b, &p| {
                b.iter(|| retain(black_box(&q), &k, &v, &w, &s, p, false).unwrap())
            });
        }
    }
    group.finish();
}

fn next_event(c: &mut Criterion) {
    let mut group = c.benchmark_group("next_event");
    group.sample_size(20);
    for history in [100usize, 1_000, 10_000] {
        for p in [Paradigm::Parallel, Paradigm::Recurrent] {
            group.bench_with_input(BenchmarkId::new(p.to_string(), history), &p, |b, &p| {
                b.iter(|| first_event_output(p, black_box(history), DIM, 0).unwrap())
            });
        }
    }
    group.finish();
}

fn model_batch(c: &mut Criterion) {
    let params = SynthParams {
        length: 400,
        ..SynthParams::default()
    };
    let stream = synth_generate(&params, &mut RngState::new(0)).unwrap();
    let cfg = GrnConfig {
        edge_feat_dim: stream.edge_feat_dim,
        dropout: 0.0,
        ..GrnConfig::default()
    };
    let model = GrnModel::new(cfg, &mut RngState::new(1)).unwrap();
    let mut group = c.benchmark_group("embed_batch");
    group.sample_size(10);
    group.throughput(Throughput::Elements(stream.len() as u64));
    for p in [Paradigm::Parallel, Paradigm::Recurrent, Paradigm::Chunkwise(32)] {
        group.bench_with_input(BenchmarkId::from_parameter(p), &p, |b, &p| {
            b.iter(|| {
                let mut table = model.new_state_table(stream.num_nodes);
                for batch in stream.events.chunks(200) {
                    black_box(model.embed_batch(batch, &mut table, None, p).unwrap());
                }
            })
        });
    }
    group.finish();
}

criterion_group!(benches, sequence_retention, next_event, model_batch);
criterion_main!(benches);
