//! Benchmarks for the kernels that dominate end-to-end runtime: the wave
//! forward/adjoint solves, polynomial expansion, flow estimation, and
//! rasterisation.

use aifm_core::acoustics::{
    PlaneWaveSource, PropagateOptions, ReceiverArray, ReceiverLayout, SolverConfig, SourceSet,
    WaveSolver,
};
use aifm_core::flow3d::{estimate_flow, poly_expansion, FlowParams};
use aifm_core::scenario::{rasterize, seed_particles, ScenarioKind, ScenarioSpec};
use aifm_core::volume::{DomainSpec, ScalarVolume};
use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

fn solver_setup(n: usize) -> (DomainSpec, WaveSolver, ScalarVolume, PlaneWaveSource) {
    let h = 1.0 / (n - 1) as f64;
    let domain = DomainSpec::with_extent([1.0; 3], h).unwrap();
    let cfg = SolverConfig::at_cfl(h, 1500.0, 4, 0.6);
    let recv = ReceiverArray::generate(ReceiverLayout::AllAround6, 21, 2.0 * h, &domain).unwrap();
    // a quarter of the usual probe window keeps iterations measurable
    let probe = 0.5 * 3.0_f64.sqrt() / 1500.0;
    let solver = WaveSolver::homogeneous(domain, 1500.0, cfg, &recv, probe).unwrap();
    let f = ScalarVolume::from_fn(domain, |p| {
        let r2: f64 = (0..3).map(|a| (p[a] - 0.5).powi(2)).sum();
        (-r2 / 0.02).exp()
    });
    let src = PlaneWaveSource::new([0.0, 1.0, 0.0], 2e4, 1500.0).unwrap();
    (domain, solver, f, src)
}

fn bench_wave(c: &mut Criterion) {
    let mut group = c.benchmark_group("wave");
    group.sample_size(10);
    for n in [17usize, 33] {
        let (_, solver, f, src) = solver_setup(n);
        group.bench_with_input(BenchmarkId::new("forward", n), &n, |b, _| {
            b.iter(|| {
                solver
                    .propagate(&f, &src, &PropagateOptions::default())
                    .unwrap()
            })
        });
        let sources = SourceSet::new(vec![src]).unwrap();
        let traces = solver.forward_all(&f, &sources).unwrap();
        group.bench_with_input(BenchmarkId::new("adjoint", n), &n, |b, _| {
            b.iter(|| solver.adjoint(&sources, &traces).unwrap())
        });
    }
    group.finish();
}

fn bench_flow(c: &mut Criterion) {
    let mut group = c.benchmark_group("flow");
    group.sample_size(10);
    let dims = 33usize;
    let domain = DomainSpec::with_extent([(dims - 1) as f64; 3], 1.0).unwrap();
    let pattern = |shift: f64| {
        ScalarVolume::from_fn(domain, |p| {
            let mut r2 = 0.0;
            for a in 0..3 {
                let q = (p[a] - shift).rem_euclid(11.0);
                let d = q.min(11.0 - q);
                r2 += d * d;
            }
            (-r2 / 6.0).exp()
        })
    };
    let prev = pattern(0.0);
    let next = pattern(1.5);
    group.bench_function("poly_expansion_33", |b| {
        b.iter(|| poly_expansion(&prev, 1.5).unwrap())
    });
    group.bench_function("estimate_flow_33", |b| {
        b.iter(|| estimate_flow(&prev, &next, &FlowParams::default()).unwrap())
    });
    group.finish();
}

fn bench_rasterize(c: &mut Criterion) {
    let domain = DomainSpec::with_extent([1.0; 3], 1.0 / 48.0).unwrap();
    let spec = ScenarioSpec {
        kind: ScenarioKind::Constant {
            velocity: [0.0, 1.0, 0.0],
        },
        particle_count: 200,
        diameter_range: [0.06, 0.10],
        margin: 0.06,
        seed: 7,
    };
    let particles = seed_particles(&spec, &domain).unwrap();
    c.bench_function("rasterize_200_49", |b| {
        b.iter(|| rasterize(&particles, domain, domain.spacing))
    });
}

criterion_group!(benches, bench_wave, bench_flow, bench_rasterize);
criterion_main!(benches);
