use qubit_char::calib::{closed_loop_calibrate, CalibError, CalibOptions};
use qubit_char::transmon::{DeviceParams, PulseParams, Transmon};

#[test]
fn loop_from_nominal_converges_and_restart_is_stable() {
    let sim = Transmon::closed(DeviceParams::reference());
    let nominal = PulseParams::nominal_x90(20e-9);
    let cal = closed_loop_calibrate(&sim, &nominal, &CalibOptions::default()).unwrap();
    assert!(cal.converged && cal.rounds <= 5, "{} rounds", cal.rounds);
    assert!(cal.coherent_error < 1e-6, "{:e}", cal.coherent_error);
    assert!(cal.frame_invariant_error <= cal.coherent_error + 1e-12);
    assert!((cal.pulse.omega0 / nominal.omega0 - 1.0).abs() < 0.01);
    assert!(cal.pulse.alpha < 0.0);
    assert_eq!(cal.history.len(), cal.rounds);

    let again = closed_loop_calibrate(&sim, &cal.pulse, &CalibOptions::default()).unwrap();
    assert!(again.converged);
    assert_eq!(again.rounds, 1);
    assert!(again.coherent_error < 1e-6);
}

#[test]
fn invalid_options_are_rejected() {
    let sim = Transmon::closed(DeviceParams::reference());
    let nominal = PulseParams::nominal_x90(20e-9);
    let even = CalibOptions { amp_repetitions: vec![2], ..CalibOptions::default() };
    assert!(matches!(closed_loop_calibrate(&sim, &nominal, &even), Err(CalibError::InvalidScan(_))));
    let none = CalibOptions { max_rounds: 0, ..CalibOptions::default() };
    assert!(closed_loop_calibrate(&sim, &nominal, &none).is_err());
}
