//! Cross-module property tests: linearity of the forward map at scale,
//! reconstruction translation equivariance, and randomized invariants for
//! interpolation, persistence and source formulas.

use aifm_core::acoustics::{
    fibonacci_directions, PlaneWaveSource, ReceiverArray, ReceiverLayout, SolverConfig,
    SourceSet, WaveSolver,
};
use aifm_core::inverse::{invert, InversionProblem, InvertOptions};
use aifm_core::volume::{
    read_volume, trilinear_sample, write_volume, DomainSpec, ScalarVolume,
};
use proptest::prelude::*;

fn unit_domain(n: usize) -> DomainSpec {
    DomainSpec::with_extent([1.0; 3], 1.0 / (n - 1) as f64).unwrap()
}

fn blob(domain: DomainSpec, center: [f64; 3], radius: f64) -> ScalarVolume {
    ScalarVolume::from_fn(domain, |p| {
        let r2: f64 = (0..3).map(|a| (p[a] - center[a]).powi(2)).sum();
        (-r2 / (radius * radius)).exp()
    })
}

/// Forward linearity at the 33^3 scale the solver runs production inversions
/// on: `F(alpha f + beta g) = alpha F(f) + beta F(g)` to 1e-10 relative.
#[test]
fn forward_map_is_linear_on_33_cubed() {
    let n = 33;
    let h = 1.0 / (n - 1) as f64;
    let domain = unit_domain(n);
    let cfg = SolverConfig::at_cfl(h, 1500.0, 4, 0.6);
    let recv = ReceiverArray::generate(ReceiverLayout::AllAround6, 5, 2.0 * h, &domain).unwrap();
    let solver = WaveSolver::homogeneous(domain, 1500.0, cfg, &recv, 1.2e-3).unwrap();
    let sources = SourceSet::fibonacci(2, 2e4, 1500.0).unwrap();
    let f = blob(domain, [0.4, 0.5, 0.55], 0.15);
    let g = blob(domain, [0.62, 0.45, 0.4], 0.2);
    let (alpha, beta) = (1.7, -0.4);
    let mut combo = ScalarVolume::zeros(domain);
    for i in 0..combo.values.len() {
        combo.values[i] = alpha * f.values[i] + beta * g.values[i];
    }
    let tf = solver.forward_all(&f, &sources).unwrap();
    let tg = solver.forward_all(&g, &sources).unwrap();
    let tc = solver.forward_all(&combo, &sources).unwrap();
    let scale = tc
        .samples
        .iter()
        .map(|v| v.abs())
        .fold(0.0, f64::max)
        .max(1e-300);
    for i in 0..tc.samples.len() {
        let expect = alpha * tf.samples[i] + beta * tg.samples[i];
        assert!(
            (tc.samples[i] - expect).abs() <= 1e-10 * scale,
            "sample {i}: {} vs {}",
            tc.samples[i],
            expect
        );
    }
}

/// Shifting the true volume by one interior grid cell moves the
/// reconstruction's centre of mass by one cell, within a quarter cell.
#[test]
fn reconstruction_translation_equivariance() {
    let n = 17;
    let h = 1.0 / (n - 1) as f64;
    let domain = unit_domain(n);
    let cfg = SolverConfig::at_cfl(h, 1500.0, 4, 0.6);
    let recv = ReceiverArray::generate(ReceiverLayout::AllAround6, 4, 2.0 * h, &domain).unwrap();
    let sources = SourceSet::fibonacci(2, 2e4, 1500.0).unwrap();
    let c = ScalarVolume::from_fn(domain, |_| 1500.0);
    let probe = 2.0 * 3.0_f64.sqrt() / 1500.0 + 6.0 / (std::f64::consts::PI * 2e4);
    let solver = WaveSolver::new(domain, &c, cfg, &recv, probe, None).unwrap();

    let reconstruct = |center: [f64; 3]| -> [f64; 3] {
        let f_true = blob(domain, center, 0.12);
        let observed = solver.forward_all(&f_true, &sources).unwrap();
        let problem = InversionProblem::new(
            domain,
            &c,
            sources.clone(),
            &recv,
            observed,
            cfg,
            probe,
            None,
        )
        .unwrap();
        let res = invert(
            &problem,
            &InvertOptions {
                iterations: 30,
                ..Default::default()
            },
            None,
        )
        .unwrap();
        // centre of mass of the half-maximum support, which localises the
        // blob without the diffuse low-amplitude background
        let mut f = res.f_hat;
        let cut = 0.5 * f.max_value();
        for v in f.values.iter_mut() {
            if *v < cut {
                *v = 0.0;
            }
        }
        f.center_of_mass().expect("non-trivial reconstruction")
    };

    let base = reconstruct([0.5, 0.4375, 0.5]);
    let moved = reconstruct([0.5, 0.4375 + h, 0.5]); // one cell along x2
    let shift = [moved[0] - base[0], moved[1] - base[1], moved[2] - base[2]];
    assert!(
        (shift[1] - h).abs() <= 0.25 * h,
        "x2 shift {} vs cell {h}",
        shift[1]
    );
    for a in [0, 2] {
        assert!(shift[a].abs() <= 0.25 * h, "axis {a} drifted by {}", shift[a]);
    }
}

/// Receiver sampling is linear: recording the sum of two fields equals the
/// sum of the recordings.
#[test]
fn receiver_sampling_is_linear() {
    let n = 9;
    let h = 1.0 / (n - 1) as f64;
    let domain = unit_domain(n);
    let cfg = SolverConfig::at_cfl(h, 1500.0, 4, 0.6);
    let recv = ReceiverArray::generate(ReceiverLayout::Sidewalls2, 3, 2.0 * h, &domain).unwrap();
    let solver = WaveSolver::homogeneous(domain, 1500.0, cfg, &recv, 3e-4).unwrap();
    let src = PlaneWaveSource::new([0.0, 1.0, 0.0], 2e4, 1500.0).unwrap();
    let sources = SourceSet::new(vec![src]).unwrap();
    let f = blob(domain, [0.5, 0.45, 0.5], 0.2);
    let g = blob(domain, [0.45, 0.6, 0.5], 0.15);
    let mut sum = f.clone();
    for (s, v) in sum.values.iter_mut().zip(&g.values) {
        *s += v;
    }
    let tf = solver.forward_all(&f, &sources).unwrap();
    let tg = solver.forward_all(&g, &sources).unwrap();
    let ts = solver.forward_all(&sum, &sources).unwrap();
    let scale = ts.samples.iter().map(|v| v.abs()).fold(0.0, f64::max);
    for i in 0..ts.samples.len() {
        assert!((ts.samples[i] - (tf.samples[i] + tg.samples[i])).abs() <= 1e-11 * scale);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    /// Trilinear sampling is linear in the volume at random points.
    #[test]
    fn trilinear_linearity(
        seed in 0u64..1000,
        px in 0.01f64..0.99,
        py in 0.01f64..0.99,
        pz in 0.01f64..0.99,
        alpha in -3.0f64..3.0,
        beta in -3.0f64..3.0,
    ) {
        let domain = unit_domain(6);
        let mut s = seed.wrapping_mul(0x9E3779B97F4A7C15).wrapping_add(1);
        let mut rng = move || {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((s >> 11) as f64 / (1u64 << 53) as f64) - 0.5
        };
        let mut a = ScalarVolume::zeros(domain);
        let mut b = ScalarVolume::zeros(domain);
        for v in a.values.iter_mut() { *v = rng(); }
        for v in b.values.iter_mut() { *v = rng(); }
        let mut combo = ScalarVolume::zeros(domain);
        for i in 0..combo.values.len() {
            combo.values[i] = alpha * a.values[i] + beta * b.values[i];
        }
        let p = [px, py, pz];
        let lhs = trilinear_sample(&combo, p).unwrap();
        let rhs = alpha * trilinear_sample(&a, p).unwrap() + beta * trilinear_sample(&b, p).unwrap();
        let scale = lhs.abs().max(rhs.abs()).max(1.0);
        prop_assert!((lhs - rhs).abs() <= 1e-12 * scale);
    }

    /// Persistence round-trips all finite f32 payloads bit-exactly.
    #[test]
    fn volume_round_trip_bit_exact(seed in 0u64..1000) {
        let domain = unit_domain(7);
        let mut s = seed.wrapping_mul(0x9E3779B97F4A7C15).wrapping_add(7);
        let mut vol = ScalarVolume::zeros(domain);
        for v in vol.values.iter_mut() {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            *v = f32::from_bits(((s >> 32) as u32) & 0x7F7F_FFFF) as f64; // finite f32
        }
        let dir = std::env::temp_dir().join("aifm-prop-tests");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join(format!("rt_{seed}.avol"));
        write_volume(&vol, &path).unwrap();
        let back = read_volume(&path).unwrap();
        std::fs::remove_file(&path).ok();
        prop_assert_eq!(vol.values, back.values);
    }

    /// Ricker wavelets never exceed 1 and peak exactly at tau = 0.
    #[test]
    fn ricker_bounded_by_peak(q0 in 1.0f64..1e6, tau_scale in -10.0f64..10.0) {
        let src = PlaneWaveSource::new([0.0, 0.0, 1.0], q0, 1500.0).unwrap();
        let t_peak = src.onset_delay();
        let t = t_peak + tau_scale / (std::f64::consts::PI * q0);
        let v = src.evaluate([0.0; 3], t);
        prop_assert!(v <= 1.0 + 1e-15);
        let peak = src.evaluate([0.0; 3], t_peak);
        prop_assert!((peak - 1.0).abs() < 1e-15);
    }

    /// Every Fibonacci direction set is unit-norm with positive pairwise
    /// angles and the exact third components.
    #[test]
    fn fibonacci_lattice_invariants(m in 1usize..64) {
        let dirs = fibonacci_directions(m).unwrap();
        prop_assert_eq!(dirs.len(), m);
        for (i, d) in dirs.iter().enumerate() {
            let norm = (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt();
            prop_assert!((norm - 1.0).abs() <= 1e-12);
            let expect = (2.0 * (i + 1) as f64 - 1.0) / m as f64 - 1.0;
            prop_assert_eq!(d[2], expect);
        }
        for i in 0..dirs.len() {
            for j in i + 1..dirs.len() {
                let dot: f64 = (0..3).map(|a| dirs[i][a] * dirs[j][a]).sum();
                prop_assert!(dot < 1.0 - 1e-12);
            }
        }
    }
}
