//! Sequential against data-parallel execution for the two hot loops: the
//! per-marker regression scan and per-day workload generation. Build with
//! `--no-default-features` to see the fallback used for both modes.

use std::time::Duration;

use burstq_core::kernels::{f_profile, ExecMode, ScanInput};
use burstq_core::workload::{generate_workload, WorkloadProfile};
use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion, Throughput};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const MODES: [(&str, ExecMode); 2] = [
    ("sequential", ExecMode::Sequential),
    ("parallel", ExecMode::Parallel),
];

fn scan_input(individuals: usize, markers: usize) -> ScanInput {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut geno = String::new();
    for _ in 0..individuals {
        let row: Vec<String> = (0..markers)
            .map(|_| rng.random_range(0..3u8).to_string())
            .collect();
        geno.push_str(&row.join(","));
        geno.push('\n');
    }
    let pheno: String = (0..individuals)
        .map(|_| format!("{}\n", rng.random_range(-2.0..2.0f64)))
        .collect();
    ScanInput::parse(&geno, &pheno).expect("generated input parses")
}

fn bench_scan(c: &mut Criterion) {
    let mut group = c.benchmark_group("f_profile");
    for markers in [500, 5000] {
        let data = scan_input(200, markers);
        group.throughput(Throughput::Elements(markers as u64));
        for (name, mode) in MODES {
            group.bench_with_input(BenchmarkId::new(name, markers), &data, |b, d| {
                b.iter(|| f_profile(d, mode))
            });
        }
    }
    group.finish();
}

fn bench_workload(c: &mut Criterion) {
    let profile = WorkloadProfile::default();
    let mut group = c.benchmark_group("generate_workload");
    for days in [30u64, 365] {
        let horizon = Duration::from_secs(days * 86_400);
        group.throughput(Throughput::Elements(days));
        for (name, mode) in MODES {
            group.bench_with_input(BenchmarkId::new(name, days), &horizon, |b, h| {
                b.iter(|| generate_workload(&profile, *h, 1, mode).unwrap())
            });
        }
    }
    group.finish();
}

criterion_group!(benches, bench_scan, bench_workload);
criterion_main!(benches);
