//! Sequential against parallel execution for the hot kernels. With the
//! `parallel` feature off both arms run sequentially.

use criterion::{black_box, criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use slicewise::cflt::{similarity_heatmap_with, FeatureField, TextEmbedding};
use slicewise::eval::random_baseline;
use slicewise::lesion::report::AnalyticsConfig;
use slicewise::lesion::{connected_components_3d_with, Connectivity};
use slicewise::qagen::{case_facts, generate_manifest, BalancePolicy, RuleTables};
use slicewise::synth::{synth_cohort, SynthConfig};
use slicewise::volume::{BinaryMask, Dims, Spacing};
use slicewise::Execution;

const MODES: [(&str, Execution); 2] = [("sequential", Execution::Sequential), ("parallel", Execution::Parallel)];

fn heatmap(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (grid, n) = ([24, 24, 16], 256);
    let cells: usize = grid.iter().product();
    let dims = Dims::new(96, 96, 64).unwrap();
    let f = FeatureField::new(grid, n, dims, (0..cells * n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
    let t = TextEmbedding::new((0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
    let mut g = c.benchmark_group("heatmap");
    for (name, exec) in MODES {
        g.bench_function(name, |b| b.iter(|| similarity_heatmap_with(black_box(&f), &t, exec).unwrap()));
    }
    g.finish();
}

fn ccl(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let dims = Dims::new(128, 128, 64).unwrap();
    let m = BinaryMask::new(dims, Spacing::unit(), (0..dims.len()).map(|_| rng.gen_bool(0.3)).collect()).unwrap();
    let mut g = c.benchmark_group("ccl");
    g.sample_size(20);
    for conn in [Connectivity::Six, Connectivity::TwentySix] {
        for (name, exec) in MODES {
            g.bench_with_input(BenchmarkId::new(name, format!("{conn:?}")), &m, |b, m| {
                b.iter(|| connected_components_3d_with(m, conn, exec))
            });
        }
    }
    g.finish();
}

fn cohort_kernels(c: &mut Criterion) {
    let cases: Vec<_> = synth_cohort(&SynthConfig { cases: 48, seed: 0, features: false }, Execution::Parallel)
        .into_iter()
        .map(|s| s.case)
        .collect();
    let (rules, analytics) = (RuleTables::default(), AnalyticsConfig::default());
    let mut g = c.benchmark_group("qagen-facts");
    g.sample_size(10);
    for (name, exec) in MODES {
        g.bench_function(name, |b| {
            b.iter(|| exec.map_slice(&cases, |case| case_facts(case, &analytics, &rules, Execution::Sequential).unwrap()))
        });
    }
    g.finish();

    let policy = BalancePolicy { target_per_subtype: 4, ..BalancePolicy::default() };
    let items = generate_manifest(&cases, &rules, &analytics, &policy, Execution::Parallel).unwrap().items;
    let mut g = c.benchmark_group("random-baseline");
    for (name, exec) in MODES {
        g.bench_function(name, |b| b.iter(|| random_baseline(black_box(&items), 0, 2000, exec).unwrap()));
    }
    g.finish();
}

criterion_group!(benches, heatmap, ccl, cohort_kernels);
criterion_main!(benches);
