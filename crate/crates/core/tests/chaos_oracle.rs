//! Simulated doubling differences against the first-order chaos prediction.

use std::sync::Arc;

use kpzlab::grid::GridSpec;
use kpzlab::noise::{build_covariance, NoiseField};
use kpzlab::oracle::doubling_first_chaos;
use kpzlab::stationary::{estimate_z, ZConfig};

#[test]
fn zero_coupling_is_refused() {
    // a log-log fit of an identically zero curve is undefined
    let g = GridSpec::new(3, 16, 8.0, 0.05).unwrap();
    let model = build_covariance(&g, 2.5, 1.0).unwrap();
    assert!(doubling_first_chaos(&model, 0.0, &[1.0, 2.0]).is_err());
}

#[test]
fn first_chaos_is_linear_in_the_coupling() {
    let g = GridSpec::new(3, 16, 8.0, 0.05).unwrap();
    let model = build_covariance(&g, 2.5, 1.0).unwrap();
    let a = doubling_first_chaos(&model, 0.05, &[1.0, 2.0, 4.0]).unwrap();
    let b = doubling_first_chaos(&model, 0.1, &[1.0, 2.0, 4.0]).unwrap();
    for (x, y) in a.total.iter().zip(&b.total) {
        assert!((2.0 * x.value - y.value).abs() <= 1e-12 * y.value);
    }
    assert!((a.nonzero_fit.slope - b.nonzero_fit.slope).abs() < 1e-12);
}

#[test]
fn centred_doubling_norms_match_first_chaos() {
    let g = GridSpec::new(3, 16, 8.0, 0.05).unwrap();
    let model = build_covariance(&g, 2.5, 1.0).unwrap();
    let noise = Arc::new(NoiseField::new(&model, &[1.0]).unwrap());
    let coupling = 0.05;
    let cfg = ZConfig {
        lookbacks: vec![1.0, 2.0, 4.0, 8.0],
        probes: vec![0],
        replicas: 64,
        coupling,
        eps_index: 0,
        master_seed: 21,
    };
    let ens = estimate_z(noise, &cfg).unwrap();
    let sim = ens.doubling_norms_centred();
    let s: Vec<f64> = sim.iter().map(|r| r.0).collect();
    assert_eq!(s, vec![1.0, 2.0, 4.0]);
    let oracle = doubling_first_chaos(&model, coupling, &s).unwrap();
    for ((s, norm, se), want) in sim.iter().zip(&oracle.without_zero_mode) {
        // higher chaos terms are O(coupling^2) relative
        let tol = 4.0 * se + 0.02 * want;
        assert!((norm - want).abs() <= tol, "s = {s}: simulated {norm:.4e} +- {se:.1e}, first chaos {want:.4e}");
    }
}
