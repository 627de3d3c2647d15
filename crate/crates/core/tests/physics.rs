use proptest::prelude::*;
use qubit_char::qop::{average_gate_fidelity, QubitChannel, POSITIVITY_TOL, TRACE_TOL};
use qubit_char::transmon::{
    coherence_limit_epg, decoherence_error, ideal_x90, idle_error_bound, DeviceParams, PulseParams, Transmon,
};

fn pulse(scale: f64, alpha: f64, df: f64, tbuff: f64) -> PulseParams {
    let p = PulseParams::nominal_x90(20e-9);
    PulseParams { omega0: p.omega0 * scale, alpha, df, tbuff, ..p }
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 16, ..ProptestConfig::default() })]

    #[test]
    fn realized_gates_are_completely_positive(
        scale in 0.9f64..1.1,
        alpha in -1.0f64..0.0,
        df in -2e6f64..2e6,
        tbuff in 0.0f64..5e-9,
    ) {
        let sim = Transmon { steps: 400, ..Transmon::new(DeviceParams::reference()) };
        let g = sim.gate_channel(&pulse(scale, alpha, df, tbuff)).unwrap();
        prop_assert!(g.channel.choi_min_eigenvalue() > -POSITIVITY_TOL);
        prop_assert!((0.0..=1.0).contains(&g.leak_per_gate));
        // trace loss on the qubit block is exactly the leaked population
        let row0 = g.channel.ptm.row(0);
        prop_assert!((row0[0] - 1.0).abs() <= g.leak_per_gate * 2.0 + TRACE_TOL);
        let f = average_gate_fidelity(&g.channel, &QubitChannel::from_unitary(&ideal_x90()));
        prop_assert!(f <= 1.0 + TRACE_TOL);
    }

    #[test]
    fn dissipative_error_grows_with_window(t1 in 50e-6f64..500e-6, ratio in 0.3f64..1.9, extra in 1e-9f64..20e-9) {
        let dev = DeviceParams { t1, t2e: ratio * t1, t1_12: t1 / 2.0, ..DeviceParams::reference() };
        let short = pulse(1.0, -0.5, 0.0, 0.0);
        let long = PulseParams { tbuff: extra, ..short };
        let a = decoherence_error(&dev, &short).unwrap();
        let b = decoherence_error(&dev, &long).unwrap();
        prop_assert!(b > a);
        prop_assert!(idle_error_bound(&dev, 20e-9 + extra) > idle_error_bound(&dev, 20e-9));
    }
}

#[test]
fn closed_system_gate_is_trace_preserving_without_leakage() {
    let sim = Transmon::closed(DeviceParams::reference());
    let g = sim.gate_channel(&pulse(1.0, -0.5, 0.0, 0.0)).unwrap();
    assert!(g.leak_per_gate < 1e-5);
    assert!((g.channel.ptm[(0, 0)] - 1.0).abs() < 1e-5);
}

#[test]
fn coherence_limit_tracks_idle_bound() {
    let dev = DeviceParams::reference();
    let limit = coherence_limit_epg(&dev, 20e-9).unwrap();
    let idle = idle_error_bound(&dev, 20e-9);
    assert!((limit - idle).abs() / idle < 0.02, "{limit} vs {idle}");
    let none = coherence_limit_epg(&dev.without_decoherence(), 20e-9).unwrap();
    assert!(none.abs() < 1e-9);
}

// IRB cannot resolve the ordering on this device (sequence variance from
// amplitude damping is larger than the gap), so the identity-is-lowest
// property is checked on the gate channels themselves.
#[test]
fn identity_window_has_lower_error_than_calibrated_pulse() {
    let dev = DeviceParams::reference();
    let sim = Transmon::new(dev);
    let p = pulse(1.0, -0.5, 0.0, 0.0);
    let x = sim.gate_channel(&p).unwrap();
    let idle = sim.idle_channel(p.duration()).unwrap();
    let r_x = 1.0 - average_gate_fidelity(&x.channel, &QubitChannel::from_unitary(&ideal_x90()));
    let r_i = 1.0 - average_gate_fidelity(&idle.channel, &QubitChannel::identity());
    assert!(r_i < r_x, "idle {r_i:e} vs pulse {r_x:e}");
    assert!((r_i - idle_error_bound(&dev, p.duration())).abs() < 1e-8);
}

#[test]
fn invalid_device_is_rejected() {
    let bad = DeviceParams { t2e: 3.0 * DeviceParams::reference().t1, ..DeviceParams::reference() };
    assert!(coherence_limit_epg(&bad, 20e-9).is_err());
    let positive = DeviceParams { anharm: 240e6, ..DeviceParams::reference() };
    assert!(positive.validate().is_err());
}
