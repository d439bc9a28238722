//! Benchmarks for the four hot loops: the Dirichlet solve, one
//! uniformization evaluation, the jump-process sampler, and the Langevin
//! interface step. Sizes are chosen so a full run stays under a minute
//! while still exercising the cache-relevant regimes.

use criterion::{criterion_group, criterion_main, BatchSize, Criterion};

use rcmlab_core::dynamic::{InterfaceField, Potential};
use rcmlab_core::environment::{ConductanceLaw, PositiveLaw, SpeedMeasure, StaticEnvironment};
use rcmlab_core::heatkernel::{transition_density, HeatKernelOptions};
use rcmlab_core::lattice::{ball, Site, Window};
use rcmlab_core::montecarlo::simulate;
use rcmlab_core::operator::killed_green;

fn supercritical() -> StaticEnvironment {
    let law = ConductanceLaw::new(0.7, PositiveLaw::Constant { c: 1.0 }).unwrap();
    StaticEnvironment::sample(law, Window::new(80), 42)
}

fn bench_killed_green(c: &mut Criterion) {
    let env = supercritical();
    let mut group = c.benchmark_group("killed_green");
    for radius in [16, 48] {
        let domain: Vec<Site> = ball(Site::ORIGIN, radius);
        group.bench_function(format!("ball_{radius}"), |b| {
            b.iter(|| killed_green(&env, SpeedMeasure::Vsrw, &domain, Site::ORIGIN).unwrap())
        });
    }
    group.finish();
}

fn bench_heat_kernel(c: &mut Criterion) {
    let env = supercritical();
    let opts = HeatKernelOptions::default();
    c.bench_function("transition_density_t30", |b| {
        b.iter(|| {
            transition_density(&env, SpeedMeasure::Vsrw, Site::ORIGIN, Site::ORIGIN, 30.0, &opts)
                .unwrap()
        })
    });
}

fn bench_walk(c: &mut Criterion) {
    let env = supercritical();
    let mut seed = 0u64;
    c.bench_function("simulate_horizon200", |b| {
        b.iter(|| {
            seed += 1;
            simulate(&env, SpeedMeasure::Vsrw, Site::ORIGIN, 200.0, seed).unwrap()
        })
    });
}

fn bench_interface_step(c: &mut Criterion) {
    c.bench_function("interface_side128_unit_time", |b| {
        b.iter_batched(
            || {
                InterfaceField::new_equilibrated(128, Potential::Quadratic, [0.0, 0.0], 0.04, 7)
                    .unwrap()
            },
            |mut field| field.run(1.0).unwrap(),
            BatchSize::SmallInput,
        )
    });
}

criterion_group!(
    benches,
    bench_killed_green,
    bench_heat_kernel,
    bench_walk,
    bench_interface_step
);
criterion_main!(benches);
