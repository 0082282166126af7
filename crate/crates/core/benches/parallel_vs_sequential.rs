//! Sequential against rayon execution of the hot data-parallel loops.

use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use symlab::causal_aux::{prefix_matching_score, PREFIX_SEEDS};
use symlab::cma::{identity_pairs, permutation_test_scores, scan_heads};
use symlab::oracle::{build_oracle, OracleSpec};
use symlab::tasks::{HeadType, IdentityTask};
use symlab::Exec;

const MODES: [(&str, Exec); 2] = [("sequential", Exec::Sequential), ("parallel", Exec::Parallel)];

fn head_scan(c: &mut Criterion) {
    let o = build_oracle(&OracleSpec::default()).unwrap();
    let task = IdentityTask::new(&o.vocab, 2).unwrap();
    let pairs = identity_pairs(&task, HeadType::Abstraction, 10, 0).unwrap();
    let mut g = c.benchmark_group("cma_head_scan_20_pairs");
    g.sample_size(10);
    for (name, exec) in MODES {
        g.bench_with_input(BenchmarkId::from_parameter(name), &exec, |b, &exec| b.iter(|| scan_heads(black_box(&o.model), &pairs, exec).unwrap()));
    }
    g.finish();
}

fn permutations(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let scores: Vec<Vec<f64>> = (0..16).map(|_| (0..400).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
    let mut g = c.benchmark_group("permutation_test_2000");
    g.sample_size(10);
    for (name, exec) in MODES {
        g.bench_with_input(BenchmarkId::from_parameter(name), &exec, |b, &exec| {
            b.iter(|| permutation_test_scores(black_box(&scores), 2000, 0.05, 0, exec).unwrap())
        });
    }
    g.finish();
}

fn prefix_matching(c: &mut Criterion) {
    let o = build_oracle(&OracleSpec::default()).unwrap();
    let mut g = c.benchmark_group("prefix_matching");
    g.sample_size(10);
    for (name, exec) in MODES {
        g.bench_with_input(BenchmarkId::from_parameter(name), &exec, |b, &exec| {
            b.iter(|| prefix_matching_score(black_box(&o.model), &o.vocab, &PREFIX_SEEDS, exec).unwrap())
        });
    }
    g.finish();
}

criterion_group!(benches, head_scan, permutations, prefix_matching);
criterion_main!(benches);
