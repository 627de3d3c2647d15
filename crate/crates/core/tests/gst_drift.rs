use qubit_char::drift::{DriftSchedule, DriftTarget};
use qubit_char::gst::{
    build_design, lgst, mle_optimize, model_violation, simulate_dataset, Acquisition, GateSet, MleOptions,
    StaticSource,
};

fn deepest_nsigma(amplitude: f64) -> Vec<f64> {
    let truth = GateSet::noisy(1e-3, 5e-4).with_spam(0.01, 0.02);
    let design = build_design(64, 4096).unwrap();
    let schedule = DriftSchedule::sinusoidal(DriftTarget::Amplitude, amplitude, 1.0);
    let acq = Acquisition { drift: (amplitude > 0.0).then_some(&schedule), ..Default::default() };
    let data = simulate_dataset(&design, &StaticSource::new(truth), 3, &acq).unwrap();
    let est = mle_optimize(&design, &data, &lgst(&design, &data).unwrap(), &MleOptions::default()).unwrap();
    let v = model_violation(&design, &data, &est.gate_set).unwrap();
    v.per_depth.iter().map(|d| d.n_sigma).collect()
}

#[test]
fn drift_violation_grows_with_depth() {
    let still = deepest_nsigma(0.0);
    assert!(still.iter().all(|n| n.abs() < 3.5), "{still:?}");
    let drifting = deepest_nsigma(5e-3);
    let deepest = *drifting.last().unwrap();
    assert!(deepest > 3.0, "{drifting:?}");
    assert!(deepest > drifting[0], "{drifting:?}");
}

#[test]
fn datasets_are_seed_deterministic() {
    let design = build_design(4, 100).unwrap();
    let src = StaticSource::new(GateSet::noisy(1e-3, 1e-3));
    let a = simulate_dataset(&design, &src, 9, &Acquisition::default()).unwrap();
    let b = simulate_dataset(&design, &src, 9, &Acquisition::default()).unwrap();
    let c = simulate_dataset(&design, &src, 10, &Acquisition::default()).unwrap();
    assert_eq!(a, b);
    assert_ne!(a, c);
}
