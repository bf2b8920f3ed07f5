use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion, Throughput};
use gtfdeer::pscan::scan;
use gtfdeer::{ScanKind, ScanMode};
use gtfdeer_bench::affine_seq;

fn bench_scan(c: &mut Criterion) {
    let workers = std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1);
    for (kind, label) in [(ScanKind::Dense, "dense"), (ScanKind::Diagonal, "diagonal")] {
        let mut group = c.benchmark_group(format!("scan_{label}"));
        for exp in [10u32, 14, 17] {
            let len = 1usize << exp;
            let seq = affine_seq(kind, 4, len, 0);
            let z0 = vec![0.0; 4];
            group.throughput(Throughput::Elements(len as u64));
            group.bench_with_input(BenchmarkId::new("sequential", len), &seq, |b, s| {
                b.iter(|| scan(s, &z0, ScanMode::Sequential).unwrap())
            });
            group.bench_with_input(BenchmarkId::new(format!("parallel_{workers}"), len), &seq, |b, s| {
                b.iter(|| scan(s, &z0, ScanMode::Parallel { workers }).unwrap())
            });
        }
        group.finish();
    }
}

criterion_group! {
    name = benches;
    config = Criterion::default().sample_size(10);
    targets = bench_scan
}
criterion_main!(benches);
