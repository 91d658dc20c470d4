use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use hgzne_core::circuit::{ising_trotter, random_periodic};
use hgzne_core::fit::{fit_multistart, DataSeries, ModelFamily};
use hgzne_core::harness::{find_layout, profile_gate_noise, profile_to_noise, qq_for_circuit, twirled_block_channel, DeviceProfile};
use hgzne_core::sim::run;
use hgzne_core::TwirlMode;

fn simulate(c: &mut Criterion) {
    let profile = DeviceProfile::builtin("fake_quito").unwrap();
    let circ = ising_trotter(4, 0.7, 1.0, std::f64::consts::PI / 15.0, 8).unwrap();
    let noise = profile_to_noise(&profile, &circ).unwrap();
    let mut g = c.benchmark_group("simulate");
    for r in [0, 4] {
        g.bench_function(format!("ising_4q_8steps_r{r}"), |b| {
            b.iter(|| run(black_box(&circ), &noise, r, TwirlMode::Analytic).unwrap())
        });
    }
    g.finish();
}

fn channel(c: &mut Criterion) {
    let profile = DeviceProfile::builtin("fake_quito").unwrap();
    let circ = ising_trotter(4, 0.7, 1.0, std::f64::consts::PI / 15.0, 1).unwrap();
    let layout = find_layout(&profile, &circ).unwrap();
    let gn = profile_gate_noise(&profile, &layout).unwrap();
    c.bench_function("twirled_block_channel_4q", |b| {
        b.iter(|| twirled_block_channel(4, black_box(&circ.periods[0]), &gn).unwrap())
    });
}

fn fit(c: &mut Criterion) {
    let fam = ModelFamily::HybridGe;
    let truth = [0.6, 0.2, 0.05, 0.01, 0.002];
    let ks: Vec<f64> = (0..7).map(|i| (2 * i + 1) as f64).collect();
    let ys: Vec<f64> = ks.iter().map(|&k| fam.eval(&truth, k)).collect();
    let data = DataSeries::from_pairs(&ks, &ys).unwrap();
    let spec = fam.default_spec();
    let mut g = c.benchmark_group("fit");
    g.sample_size(20);
    g.bench_function("hybrid_ge_50_starts", |b| {
        b.iter(|| fit_multistart(black_box(&data), &spec, 50, 0).unwrap())
    });
    g.finish();
}

fn paths(c: &mut Criterion) {
    let profile = DeviceProfile::builtin("fake_lima_dense").unwrap();
    let circ = random_periodic(4, 12, 3).unwrap();
    let noise = profile_to_noise(&profile, &circ).unwrap();
    let mut g = c.benchmark_group("paths");
    g.sample_size(10);
    g.bench_function("qq_10k_samples", |b| {
        b.iter(|| qq_for_circuit(black_box(&circ), &noise, 2, 10_000, 0, 12).unwrap())
    });
    g.finish();
}

criterion_group!(benches, simulate, channel, fit, paths);
criterion_main!(benches);
