use proptest::prelude::*;
use qubit_char::benchmark::{
    fit_decay, leakage_fit, purity_benchmark, run_irb, run_rb, synthetic_decay_records, AssignmentMatrix,
    ChannelGateSet, DecayModel, PurityMode, RBConfig, RbResult, DEFAULT_LENGTHS,
};
use qubit_char::clifford::InterleavedGate;
use qubit_char::fit::{mean, std_dev};
use qubit_char::qop::QubitChannel;
use qubit_char::transmon::ideal_x90;

fn cfg(seed: u64) -> RBConfig {
    RBConfig { lengths: DEFAULT_LENGTHS.to_vec(), n_sequences: 20, shots: 1024, seed }
}

/// Over a seed ensemble the depolarizing EPC estimates are unbiased and
/// their bootstrap errors match the observed spread.
#[test]
fn depolarizing_estimates_are_calibrated_over_seeds() {
    let q = 1e-3;
    let epc = q / 2.0;
    let gates = ChannelGateSet::depolarizing_per_clifford(q);
    let spam = AssignmentMatrix::default();
    let (mut z_rb, mut z_pb) = (Vec::new(), Vec::new());
    for seed in 1000..1040 {
        let rb = run_rb(&cfg(seed), &gates, &spam, 200).unwrap();
        let pb = purity_benchmark(&cfg(seed), &gates, PurityMode::Tomography { shots: 1024 }, &spam, 200).unwrap();
        z_rb.push((rb.r_clif.value - epc) / rb.r_clif.err);
        z_pb.push((pb.r_dec_clif.value - epc) / pb.r_dec_clif.err);
    }
    for (name, z) in [("rb", &z_rb), ("pb", &z_pb)] {
        assert!(mean(z).abs() < 0.5, "{name} bias {}", mean(z));
        let sd = std_dev(z);
        assert!((0.7..1.4).contains(&sd), "{name} z spread {sd}");
    }
}

#[test]
fn pulse_errors_only_leave_identity_interleave_clean() {
    let pulse = QubitChannel::from_unitary(&ideal_x90()).then(&QubitChannel::depolarizing(2e-3));
    let gates = ChannelGateSet::from_gates(&pulse, &QubitChannel::identity());
    let c = RBConfig { lengths: vec![1, 50, 100, 200, 400, 700], n_sequences: 20, shots: 4096, seed: 5 };
    let spam = AssignmentMatrix::default();
    let reference = run_rb(&c, &gates, &spam, 200).unwrap();
    let r_i = run_irb(&c, &gates, InterleavedGate::I, &reference, &spam, 200).unwrap().r_gate;
    let r_x = run_irb(&c, &gates, InterleavedGate::Xhalf, &reference, &spam, 200).unwrap().r_gate;
    assert!(r_i.value.abs() < 3.0 * r_i.err, "r_I {r_i:?}");
    // one pulse with depolarizing 2e-3 has average error 1e-3
    assert!((r_x.value - 1e-3).abs() < 3.0 * r_x.err, "r_X {r_x:?}");
}

#[test]
fn spam_does_not_bias_decay_rate() {
    let gates = ChannelGateSet::depolarizing_per_clifford(1e-3);
    let clean = run_rb(&cfg(9), &gates, &AssignmentMatrix::default(), 200).unwrap();
    let spam = AssignmentMatrix { p0_given0: 0.97, p0_given1: 0.05 };
    let noisy = run_rb(&cfg(9), &gates, &spam, 200).unwrap();
    assert!((noisy.r_clif.value - 5e-4).abs() < 3.0 * noisy.r_clif.err);
    assert!(noisy.fit.a < clean.fit.a);
}

#[test]
fn bootstrap_is_reproducible() {
    let records = synthetic_decay_records(&[1, 10, 100, 500], 10, 500, (0.5, 0.998, 0.5), 3);
    let a = RbResult::from_records(records.clone(), 100, 17).unwrap();
    let b = RbResult::from_records(records, 100, 17).unwrap();
    assert_eq!(a.fit, b.fit);
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 64, ..ProptestConfig::default() })]

    #[test]
    fn noiseless_decay_is_recovered(a in 0.2f64..0.6, p in 0.95f64..0.99999, b in 0.2f64..0.6) {
        let m: Vec<f64> = DEFAULT_LENGTHS.iter().map(|&l| l as f64).collect();
        let y: Vec<f64> = m.iter().map(|&x| a * p.powf(x) + b).collect();
        let fit = fit_decay(&m, &y, DecayModel::Exponential).unwrap();
        prop_assert!((fit.p - p).abs() < 1e-7, "p {} vs {}", fit.p, p);
    }

    #[test]
    fn noiseless_leakage_is_recovered(gamma in 1e-5f64..1e-3, p_inf in 1e-3f64..0.05, p0 in 0.0f64..1e-3) {
        let m: Vec<f64> = [1usize, 30, 100, 300, 700, 1200, 2000, 3000, 4500, 10000, 30000]
            .iter().map(|&l| l as f64).collect();
        let y: Vec<f64> = m.iter().map(|&x| p_inf * (1.0 - (-gamma * x).exp()) + p0 * (-gamma * x).exp()).collect();
        let fit = leakage_fit(&m, &y).unwrap();
        prop_assert!((fit.gamma_clif.value - gamma).abs() / gamma < 1e-6);
        prop_assert!((fit.leak_clif.value - gamma * (p_inf - p0)).abs() < 1e-9);
    }
}
