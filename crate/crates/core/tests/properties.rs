//! Invariants of the lattice solver, the noise and the run configuration.

use std::sync::Arc;

use kpzlab::config::{ExperimentConfig, Kind};
use kpzlab::grid::{FieldFrame, HeatSemigroup};
use kpzlab::noise::{build_covariance, CovarianceModel, Lineage, NoiseField};
use kpzlab::she::{effective_coupling, step, time_index, Driver, TrackSpec};
use kpzlab::stats::ols;
use kpzlab::GridSpec;
use proptest::prelude::*;

fn small_grid() -> GridSpec {
    GridSpec::new(3, 8, 4.0, 0.05).unwrap()
}

fn small_noise() -> (CovarianceModel, Arc<NoiseField>) {
    let model = build_covariance(&small_grid(), 2.5, 1.0).unwrap();
    let noise = Arc::new(NoiseField::new(&model, &[1.0, 0.5]).unwrap());
    (model, noise)
}

fn positive_field(len: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(0.0f64..10.0, len)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn heat_flow_conserves_mass_and_positivity(values in positive_field(512), t in 0.0f64..4.0) {
        let g = small_grid();
        let sg = HeatSemigroup::new(g);
        let frame = FieldFrame::new(g, 0.0, values).unwrap();
        let out = sg.apply(&frame, t).unwrap();
        let scale = frame.mass().abs().max(1.0);
        prop_assert!((out.mass() - frame.mass()).abs() <= 1e-12 * scale);
        prop_assert!(out.values.iter().all(|&v| v >= -1e-12 * scale));
    }

    #[test]
    fn heat_flow_composes(values in positive_field(512), a in 0.0f64..2.0, b in 0.0f64..2.0) {
        let g = small_grid();
        let sg = HeatSemigroup::new(g);
        let frame = FieldFrame::new(g, 0.0, values).unwrap();
        let two = sg.apply(&sg.apply(&frame, a).unwrap(), b).unwrap();
        let one = sg.apply(&frame, a + b).unwrap();
        for (x, y) in two.values.iter().zip(&one.values) {
            prop_assert!((x - y).abs() <= 1e-10);
        }
    }

    #[test]
    fn heat_kernel_is_symmetric(x in 0usize..512, y in 0usize..512, t in 0.05f64..3.0) {
        let g = small_grid();
        let sg = HeatSemigroup::new(g);
        let from_x = sg.apply(&FieldFrame::delta(g, 0.0, x), t).unwrap();
        let from_y = sg.apply(&FieldFrame::delta(g, 0.0, y), t).unwrap();
        prop_assert!((from_x.values[y] - from_y.values[x]).abs() <= 1e-12 * from_x.values[x].abs());
    }

    #[test]
    fn step_is_positive_and_linear_in_the_field(values in positive_field(512), c in 0.1f64..5.0, beta in 0.0f64..0.5, k in 0i64..50) {
        let (_, noise) = small_noise();
        let g = small_grid();
        let sg = HeatSemigroup::new(g);
        let slice = noise.slice(0, Lineage { master_seed: 3, replica: 1 }, k);
        let frame = FieldFrame::new(g, 0.0, values.clone()).unwrap();
        let scaled = FieldFrame::new(g, 0.0, values.iter().map(|v| c * v).collect()).unwrap();
        let a = step(&frame, &slice, beta, noise.plan(0), &sg).unwrap();
        let b = step(&scaled, &slice, beta, noise.plan(0), &sg).unwrap();
        prop_assert!(a.values.iter().all(|&v| v >= 0.0));
        for (x, y) in a.values.iter().zip(&b.values) {
            prop_assert!((c * x - y).abs() <= 1e-10 * (1.0 + y.abs()));
        }
    }

    #[test]
    fn noise_is_a_function_of_lineage_and_step(seed in any::<u64>(), replica in 0u64..1000, k in -100i64..100) {
        let (_, noise) = small_noise();
        let lin = Lineage { master_seed: seed, replica };
        let a = noise.slice(1, lin, k);
        let b = noise.slice(1, lin, k);
        prop_assert_eq!(&a, &b);
        let other = noise.slice(1, Lineage { master_seed: seed, replica: replica + 1 }, k);
        prop_assert_ne!(a.frame.values, other.frame.values);
    }

    #[test]
    fn zero_coupling_runs_are_the_heat_flow(values in positive_field(512), n in 1i64..20) {
        let (_, noise) = small_noise();
        let g = small_grid();
        let driver = Driver::new(noise);
        let mut end = Vec::new();
        driver
            .run(Lineage { master_seed: 1, replica: 0 }, &[TrackSpec::multiplicative(0, 0.0, 0, values.clone())], n, |j, v| {
                if j == n {
                    end = v.field(0).unwrap().to_vec();
                }
                Ok(())
            })
            .unwrap();
        let expect = HeatSemigroup::new(g).apply(&FieldFrame::new(g, 0.0, values).unwrap(), n as f64 * g.dt).unwrap();
        for (x, y) in end.iter().zip(&expect.values) {
            prop_assert!((x - y).abs() <= 1e-10 * (1.0 + y.abs()));
        }
    }

    #[test]
    fn effective_coupling_scales_as_a_power(beta in 0.0f64..1.0, k in 0i32..6, kappa in 2.01f64..2.99) {
        let eps = 0.5f64.powi(k);
        let c = effective_coupling(beta, eps, kappa);
        prop_assert!((c - beta * eps.powf(kappa / 2.0 - 1.0)).abs() <= 1e-15 * (1.0 + c));
        prop_assert_eq!(effective_coupling(beta, 1.0, kappa), beta);
    }

    #[test]
    fn time_index_roundtrips(j in -10_000i64..10_000) {
        prop_assert_eq!(time_index(j as f64 * 0.05, 0.05).unwrap(), j);
    }

    #[test]
    fn config_digest_tracks_content_not_location(seed in any::<u64>(), replicas in 1u64..10_000, dir in "[a-z]{1,12}") {
        let mut a = ExperimentConfig::new(Kind::She);
        a.seed = seed;
        a.replicas = replicas;
        let mut b = a.clone();
        b.output_dir = dir.into();
        prop_assert_eq!(a.digest(), b.digest());
        b.seed = seed.wrapping_add(1);
        prop_assert_ne!(a.digest(), b.digest());
    }

    #[test]
    fn ols_recovers_lines(a in -10.0f64..10.0, b in -10.0f64..10.0, n in 3usize..40) {
        let x: Vec<f64> = (0..n).map(|i| i as f64 * 0.37 - 2.0).collect();
        let y: Vec<f64> = x.iter().map(|v| a + b * v).collect();
        let fit = ols(&x, &y).unwrap();
        prop_assert!((fit.slope - b).abs() <= 1e-9 * (1.0 + b.abs()));
        prop_assert!((fit.intercept - a).abs() <= 1e-9 * (1.0 + a.abs()));
    }
}
