use smoothcert::distributions::{RayleighParams, SeededSampler, SmoothingDistribution};
use smoothcert::smoothing_runtime::{
    exact_oracle_probability, smoothed_sweep, Label, SmoothedClassifier, SmoothingConfig, ThresholdOracle,
};

/// Threshold oracles labelled 0 at the identity, with flip points in (1, 4].
fn oracles(count: u64) -> Vec<ThresholdOracle> {
    let u = SeededSampler::new(31, 0).uniforms(0..2 * count);
    u.chunks(2)
        .map(|c| {
            let v = 0.2 + 0.6 * c[0];
            let flip = 1.05 + 2.95 * c[1];
            ThresholdOracle::new(v, v.powf(flip)).unwrap()
        })
        .collect()
}

#[test]
fn certificates_are_sound_for_random_oracles() {
    let dist = SmoothingDistribution::rayleigh(RayleighParams::unit_median());
    for (i, oracle) in oracles(20).iter().enumerate() {
        let cfg = SmoothingConfig::new(20_000, 0.001, dist, i as u64).unwrap();
        let smoothed = SmoothedClassifier::new(oracle, cfg).unwrap();
        let r = smoothed.predict_certify(&oracle.input_tensor()).unwrap();
        assert_eq!(r.label, Label::Class(0), "{oracle:?}");
        let c = r.certificate.unwrap();
        assert!(c.gamma2 <= oracle.critical_factor().unwrap());
        for k in 1..=100 {
            let g = c.gamma1 + (c.gamma2 - c.gamma1) * k as f64 / 101.0;
            let p = exact_oracle_probability(oracle, g, &dist).unwrap();
            assert!(p > 0.5, "{oracle:?}: P = {p} at γ = {g} inside ({}, {})", c.gamma1, c.gamma2);
        }
    }
}

#[test]
fn sweep_covers_the_certificate() {
    let dist = SmoothingDistribution::rayleigh(RayleighParams::unit_median());
    let step = 0.01;
    for (i, oracle) in oracles(6).iter().enumerate() {
        let cfg = SmoothingConfig::new(20_000, 0.001, dist, 100 + i as u64).unwrap();
        let smoothed = SmoothedClassifier::new(oracle, cfg).unwrap();
        let x = oracle.input_tensor();
        let c = smoothed.predict_certify(&x).unwrap().certificate.unwrap();
        let sweep = smoothed_sweep(&smoothed, &x, Some(0), step, 6.0).unwrap().unwrap();
        assert!(sweep.left <= c.gamma1 + step, "{sweep:?} vs {c:?}");
        assert!(sweep.right >= c.gamma2 - step, "{sweep:?} vs {c:?}");
    }
}

#[test]
fn wrong_true_label_gives_no_sweep() {
    let oracle = ThresholdOracle::new(0.5, 0.25).unwrap();
    let dist = SmoothingDistribution::rayleigh(RayleighParams::unit_median());
    let smoothed = SmoothedClassifier::new(&oracle, SmoothingConfig::new(1000, 0.01, dist, 3).unwrap()).unwrap();
    assert!(smoothed_sweep(&smoothed, &oracle.input_tensor(), Some(1), 0.05, 2.0)
        .unwrap()
        .is_none());
}
