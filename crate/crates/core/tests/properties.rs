//! Invariants checked on random inputs.

use std::sync::Arc;

use lattice_sde::convergence::{cauchy_diagnostic, moment_field, simulate_levels, uniqueness_crosscheck, z_norm};
use lattice_sde::geometry::{
    estimate_growth_constant, exhaustion_sequence, growth_denominator, sample_configuration, within, Configuration,
    SamplingParams,
};
use lattice_sde::ovsjannikov::{picard_iterate, BandedOperator};
use lattice_sde::sde::{
    check_dissipativity, simulate_truncated, Diffusion, Kernel, KernelShape, ModelSpec, Potential, Scheme,
    SimulationParams,
};
use lattice_sde::spaces::{lp_norm, verify_scale_monotonicity, WeightedSeq};
use proptest::prelude::*;

fn config_strategy() -> impl Strategy<Value = Configuration> {
    (0.2f64..3.0, 1.0f64..8.0, 1usize..=2, 0.3f64..2.0, any::<u64>()).prop_map(|(intensity, s, dim, rho, seed)| {
        sample_configuration(&SamplingParams { intensity, box_halfwidth: s, dim, rho, seed }).unwrap()
    })
}

fn values(n: usize, seed: u64) -> Vec<f64> {
    // cheap deterministic pseudo-random values in [-1, 1]
    (0..n)
        .map(|i| {
            let h = (seed ^ (i as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
            (h >> 11) as f64 / (1u64 << 53) as f64 * 2.0 - 1.0
        })
        .collect()
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 48, failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn neighborhoods_match_brute_force(config in config_strategy()) {
        for x in 0..config.len() {
            let expected: Vec<usize> =
                (0..config.len()).filter(|&y| within(config.point(x), config.point(y), config.rho())).collect();
            let mut got = config.neighbors(x).to_vec();
            got.sort_unstable();
            prop_assert_eq!(&got, &expected);
            prop_assert!(got.contains(&x));
            for &y in config.neighbors(x) {
                prop_assert!(config.neighbors(y).contains(&x));
            }
        }
    }

    #[test]
    fn growth_inequality_holds(config in config_strategy()) {
        prop_assume!(!config.is_empty());
        let n = estimate_growth_constant(&config).unwrap();
        for x in 0..config.len() {
            prop_assert!(config.degree(x) as f64 <= n * growth_denominator(config.radius(x)) * (1.0 + 1e-12));
        }
    }

    #[test]
    fn norm_is_homogeneous_and_subadditive(
        config in config_strategy(), s1 in any::<u64>(), s2 in any::<u64>(),
        c in -100.0f64..100.0, a in 0.01f64..3.0, p in 1.0f64..5.0,
    ) {
        prop_assume!(!config.is_empty());
        let config = Arc::new(config);
        let n = config.len();
        let x = WeightedSeq::new(config.clone(), values(n, s1)).unwrap();
        let y = WeightedSeq::new(config.clone(), values(n, s2)).unwrap();
        let nx = lp_norm(&x, a, p).unwrap();
        let ny = lp_norm(&y, a, p).unwrap();
        let scaled = lp_norm(&x.scaled(c), a, p).unwrap();
        prop_assert!((scaled - c.abs() * nx).abs() <= 1e-12 * (1.0 + c.abs() * nx));
        let sum = lp_norm(&x.try_add(&y).unwrap(), a, p).unwrap();
        prop_assert!(sum <= nx + ny + 1e-12);
    }

    #[test]
    fn norms_decrease_with_weight(
        config in config_strategy(), seed in any::<u64>(), a in 0.01f64..3.0, gap in 1e-6f64..3.0, p in 1.0f64..5.0,
    ) {
        let config = Arc::new(config);
        let z = WeightedSeq::new(config.clone(), values(config.len(), seed)).unwrap();
        prop_assert!(verify_scale_monotonicity(&z, a, a + gap, p).unwrap().ok);
    }

    #[test]
    fn sparse_apply_matches_dense(config in config_strategy(), seed in any::<u64>(), q in 1.0f64..3.0) {
        let config = Arc::new(config);
        let n = config.len();
        let entries = values(n * n, seed);
        let degrees = config.degrees();
        let op = BandedOperator::from_fn(config.clone(), 1.0, q, |x, y| {
            entries[x * n + y] * (degrees[x] as f64).powf(q)
        })
        .unwrap();
        let z = values(n, seed.wrapping_add(1));
        let dense = op.to_dense();
        let mut out = vec![0.0; n];
        op.apply_into(&z, &mut out);
        for x in 0..n {
            let expected: f64 = (0..n).map(|y| dense[x][y] * z[y]).sum();
            prop_assert!((out[x] - expected).abs() <= 1e-12 * (1.0 + expected.abs()));
            for (y, v) in dense[x].iter().enumerate() {
                if !config.neighbors(x).contains(&y) {
                    prop_assert_eq!(*v, 0.0);
                }
            }
        }
    }

    #[test]
    fn picard_iterate_is_truncated_exponential(
        config in config_strategy(), seed in any::<u64>(), iterations in 0usize..8, horizon in 0.1f64..2.0,
    ) {
        prop_assume!(!config.is_empty() && config.len() <= 60);
        let config = Arc::new(config);
        let n = config.len();
        let entries = values(n * n, seed);
        let op = BandedOperator::from_fn(config.clone(), 0.2, 1.0, |x, y| {
            0.2 * entries[x * n + y] * config.degree(x) as f64
        })
        .unwrap();
        let z0 = WeightedSeq::new(config.clone(), values(n, !seed)).unwrap();
        let got = picard_iterate(&op, &z0, horizon, iterations, 4).unwrap();
        let dense = op.to_dense();
        for (t, g) in got.times().iter().zip(got.values()) {
            // sum_{k <= n} (tQ)^k / k! z0 by plain powers
            let mut term = z0.values().to_vec();
            let mut acc = term.clone();
            for k in 1..=iterations {
                term = (0..n).map(|x| (0..n).map(|y| dense[x][y] * term[y]).sum::<f64>() * t / k as f64).collect();
                acc.iter_mut().zip(&term).for_each(|(a, b)| *a += b);
            }
            for (a, b) in g.values().iter().zip(&acc) {
                prop_assert!((a - b).abs() <= 1e-10 * (1.0 + b.abs()));
            }
        }
    }

    #[test]
    fn built_in_models_are_dissipative(
        lambda in 0.1f64..5.0, b in -3.0f64..3.0, cap in 0.0f64..1.0,
        s0 in 0.0f64..2.0, s1 in 0.0f64..1.0, s2 in 0.0f64..0.5, seed in any::<u64>(),
    ) {
        let diffusion = Diffusion { sigma0: s0, sigma1: s1, sigma2: s2 };
        let kernel = Kernel { shape: KernelShape::Triangular, cap };
        for potential in [Potential::Linear { lambda }, Potential::Cubic { b }] {
            let model = ModelSpec::new(potential, kernel, diffusion, 4.0).unwrap();
            let rep = check_dissipativity(&model, 500, 10.0, seed).unwrap();
            prop_assert!(rep.ok(), "{:?} {:?}", potential, rep.witnesses);
        }
    }
}

fn cubic_model() -> ModelSpec {
    ModelSpec::new(
        Potential::Cubic { b: 0.5 },
        Kernel { shape: KernelShape::Constant, cap: 0.1 },
        Diffusion { sigma0: 0.4, sigma1: 0.1, sigma2: 0.01 },
        4.0,
    )
    .unwrap()
}

fn chain(n: usize) -> Arc<Configuration> {
    let pts: Vec<Vec<f64>> = (0..n).map(|i| vec![i as f64 * 0.8 - 3.0]).collect();
    Arc::new(Configuration::from_points(&pts, 1, 1.0, 4.0).unwrap())
}

#[test]
fn diagonal_cauchy_distance_vanishes() {
    let model = cubic_model();
    let config = chain(9);
    let levels = exhaustion_sequence(&config, 3).unwrap();
    let zeta = WeightedSeq::from_fn(config, |_| 0.3).unwrap();
    let mut params = SimulationParams::new(0.5, 0.01, 200, 3, Scheme::Tamed);
    params.record_stride = 5;
    let ens = simulate_levels(&model, &levels, &zeta, &params).unwrap();
    let rep = cauchy_diagnostic(&model, &levels, &ens, 0.5, 1.0).unwrap();
    let diagonal: Vec<_> = rep.rows.iter().filter(|r| r.n == r.m).collect();
    assert!(!diagonal.is_empty());
    for r in diagonal {
        assert_eq!(r.d, 0.0);
    }
}

#[test]
fn moment_norm_decreases_in_alpha() {
    let model = cubic_model();
    let config = chain(9);
    let zeta = WeightedSeq::from_fn(config.clone(), |x| 0.2 * x as f64).unwrap();
    let mut params = SimulationParams::new(0.5, 0.01, 200, 5, Scheme::Tamed);
    params.record_stride = 10;
    let all: Vec<usize> = (0..config.len()).collect();
    let field = moment_field(&simulate_truncated(&model, &all, &zeta, &params).unwrap(), 2.0).unwrap();
    let norms: Vec<f64> = [0.1, 0.5, 1.0, 2.0, 4.0].iter().map(|&a| z_norm(&field, a)).collect();
    assert!(norms.windows(2).all(|w| w[1] <= w[0]), "{norms:?}");
}

#[test]
fn strong_error_shrinks_with_step() {
    let model = cubic_model();
    let config = chain(5);
    let zeta = WeightedSeq::from_fn(config.clone(), |_| 0.5).unwrap();
    let mut params = SimulationParams::new(0.5, 0.02, 400, 9, Scheme::Tamed);
    params.record_stride = 5;
    let all: Vec<usize> = (0..config.len()).collect();
    let rep = uniqueness_crosscheck(&model, &all, &zeta, &params, 1.0).unwrap();
    assert!(rep.fine < rep.coarse, "{rep:?}");
    assert!(rep.ratio > 1.2, "{rep:?}");
}
