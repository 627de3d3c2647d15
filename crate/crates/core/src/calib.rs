//! Error-amplifying calibration scans on the simulated transmon and a
//! closed-loop calibrator built from them.

use std::collections::HashMap;
use std::f64::consts::PI;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::fit::golden_section;
use crate::linalg::c;
use crate::qop::{leaky_unitary_fidelity, rz, Mat2, Mat3};
use crate::transmon::{ideal_x90, Propagator, PulseParams, Transmon, TransmonError};

#[derive(Debug, Error)]
pub enum CalibError {
    #[error("invalid scan: {0}")]
    InvalidScan(String),
    #[error(transparent)]
    Transmon(#[from] TransmonError),
}

/// Populations after an amplification sequence, for every sweep point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibScan {
    pub parameter: String,
    pub values: Vec<f64>,
    /// Outer sweep of a 2D scan; `p1`/`p2` are then row-major over
    /// (outer, inner).
    pub outer: Option<(String, Vec<f64>)>,
    pub repetitions: usize,
    pub p1: Vec<f64>,
    pub p2: Vec<f64>,
}

impl CalibScan {
    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        match &self.outer {
            None => {
                out.push_str(&format!("{},p1,p2\n", self.parameter));
                for (k, v) in self.values.iter().enumerate() {
                    out.push_str(&format!("{:.9e},{:.9e},{:.9e}\n", v, self.p1[k], self.p2[k]));
                }
            }
            Some((name, outer)) => {
                out.push_str(&format!("{},{},p1,p2\n", name, self.parameter));
                for (i, o) in outer.iter().enumerate() {
                    for (j, v) in self.values.iter().enumerate() {
                        let k = i * self.values.len() + j;
                        out.push_str(&format!("{:.9e},{:.9e},{:.9e},{:.9e}\n", o, v, self.p1[k], self.p2[k]));
                    }
                }
            }
        }
        out
    }

    /// Row `i` of a 2D scan.
    pub fn row(&self, i: usize) -> &[f64] {
        let n = self.values.len();
        &self.p1[i * n..(i + 1) * n]
    }
}

fn check_sweep(values: &[f64]) -> Result<(), CalibError> {
    if values.is_empty() {
        return Err(CalibError::InvalidScan("sweep is empty".into()));
    }
    if values.windows(2).any(|w| !(w[0] < w[1])) {
        return Err(CalibError::InvalidScan("sweep must be strictly increasing".into()));
    }
    Ok(())
}

/// Final (P₁, P₂) from |0⟩ after a pulse program where each entry is a drive
/// phase. With a tail model each window depends on its own phase and its
/// predecessor's; without one every window is a frame shift of the first.
fn run_phases(sim: &Transmon, base: &PulseParams, phases: &[f64]) -> Result<(f64, f64), TransmonError> {
    let mut cache: HashMap<(u64, Option<u64>), Propagator> = HashMap::new();
    let zero = if sim.tail.is_none() { Some(sim.window_propagator(&base.with_phase(0.0), None)?) } else { None };
    let mut prev: Option<f64> = None;
    let mut rho = Mat3::zeros();
    rho[(0, 0)] = c(1.0, 0.0);
    for &phi in phases {
        let key = match zero {
            Some(_) => (phi.to_bits(), None),
            None => (phi.to_bits(), prev.map(f64::to_bits)),
        };
        if !cache.contains_key(&key) {
            let window = match &zero {
                Some(z) => z.frame_shifted(phi),
                None => sim.window_propagator(&base.with_phase(phi), prev)?,
            };
            cache.insert(key, window);
        }
        rho = cache[&key].apply(&rho);
        prev = Some(phi);
    }
    Ok((rho[(1, 1)].re, rho[(2, 2)].re))
}

fn pi_pair_phases(n_pairs: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(4 * n_pairs);
    for _ in 0..n_pairs {
        out.extend_from_slice(&[0.0, 0.0, PI, PI]);
    }
    out
}

/// `n_pi` X_π gates, each two X_{π/2} pulses, over a sweep of `omega0`.
/// The calibrated amplitude maximizes P₁.
pub fn amp_scan(sim: &Transmon, base: &PulseParams, n_pi: usize, omegas: &[f64]) -> Result<CalibScan, CalibError> {
    if n_pi % 2 == 0 {
        return Err(CalibError::InvalidScan(format!("n_pi must be odd, got {n_pi}")));
    }
    check_sweep(omegas)?;
    let phases = vec![0.0; 2 * n_pi];
    let pops: Vec<(f64, f64)> = omegas
        .par_iter()
        .map(|&w| run_phases(sim, &PulseParams { omega0: w, ..*base }, &phases))
        .collect::<Result<_, _>>()?;
    Ok(CalibScan {
        parameter: "omega0".into(),
        values: omegas.to_vec(),
        outer: None,
        repetitions: n_pi,
        p1: pops.iter().map(|p| p.0).collect(),
        p2: pops.iter().map(|p| p.1).collect(),
    })
}

/// `n_pairs` of (X_π, X_{−π}) over a sweep of the DRAG detuning `df`; the
/// calibrated value minimizes P₁.
pub fn detuning_scan(sim: &Transmon, base: &PulseParams, n_pairs: usize, dfs: &[f64]) -> Result<CalibScan, CalibError> {
    check_sweep(dfs)?;
    let phases = pi_pair_phases(n_pairs);
    let pops: Vec<(f64, f64)> = dfs
        .par_iter()
        .map(|&df| run_phases(sim, &PulseParams { df, ..*base }, &phases))
        .collect::<Result<_, _>>()?;
    Ok(CalibScan {
        parameter: "df".into(),
        values: dfs.to_vec(),
        outer: None,
        repetitions: n_pairs,
        p1: pops.iter().map(|p| p.0).collect(),
        p2: pops.iter().map(|p| p.1).collect(),
    })
}

/// 50 pairs of (X_π, X_{−π}) over a grid of DRAG coefficient (inner) and
/// buffer length (outer). Any tail distortion comes from `sim.tail`.
pub fn buffer_scan(
    sim: &Transmon,
    base: &PulseParams,
    n_pairs: usize,
    alphas: &[f64],
    tbuffs: &[f64],
) -> Result<CalibScan, CalibError> {
    check_sweep(alphas)?;
    check_sweep(tbuffs)?;
    let phases = pi_pair_phases(n_pairs);
    let grid: Vec<(f64, f64)> = tbuffs.iter().flat_map(|&tb| alphas.iter().map(move |&a| (tb, a))).collect();
    let pops: Vec<(f64, f64)> = grid
        .par_iter()
        .map(|&(tbuff, alpha)| run_phases(sim, &PulseParams { tbuff, alpha, ..*base }, &phases))
        .collect::<Result<_, _>>()?;
    Ok(CalibScan {
        parameter: "alpha".into(),
        values: alphas.to_vec(),
        outer: Some(("tbuff".into(), tbuffs.to_vec())),
        repetitions: n_pairs,
        p1: pops.iter().map(|p| p.0).collect(),
        p2: pops.iter().map(|p| p.1).collect(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Extremum {
    Peak,
    Dip,
}

fn extremum_index(y: &[f64], kind: Extremum) -> usize {
    let mut best = 0;
    for k in 1..y.len() {
        let better = match kind {
            Extremum::Peak => y[k] > y[best],
            Extremum::Dip => y[k] < y[best],
        };
        if better {
            best = k;
        }
    }
    best
}

/// Grid extremum refined by a parabola through its neighbours.
pub fn extremum_position(x: &[f64], y: &[f64], kind: Extremum) -> f64 {
    let k = extremum_index(y, kind);
    if k == 0 || k + 1 == x.len() {
        return x[k];
    }
    let (x0, x1, x2) = (x[k - 1], x[k], x[k + 1]);
    let (y0, y1, y2) = (y[k - 1], y[k], y[k + 1]);
    let denom = (x0 - x1) * (x0 - x2) * (x1 - x2);
    let a = (x2 * (y1 - y0) + x1 * (y0 - y2) + x0 * (y2 - y1)) / denom;
    let b = (x2 * x2 * (y0 - y1) + x1 * x1 * (y2 - y0) + x0 * x0 * (y1 - y2)) / denom;
    if a == 0.0 {
        return x1;
    }
    (-b / (2.0 * a)).clamp(x0, x2)
}

/// Full width of the central feature at half height: the distance between
/// the crossings of `(y_ext + y_far)/2` nearest the extremum, where `y_far`
/// is the opposite extreme of the sweep. `None` if a crossing is missing.
pub fn central_width(x: &[f64], y: &[f64], kind: Extremum) -> Option<f64> {
    let k = extremum_index(y, kind);
    let far = match kind {
        Extremum::Peak => y.iter().cloned().fold(f64::INFINITY, f64::min),
        Extremum::Dip => y.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
    };
    let half = 0.5 * (y[k] + far);
    let crosses = |a: f64, b: f64| (a - half) * (b - half) <= 0.0 && a != b;
    let interp = |i: usize, j: usize| x[i] + (half - y[i]) * (x[j] - x[i]) / (y[j] - y[i]);
    let left = (1..=k).rev().find(|&i| crosses(y[i - 1], y[i])).map(|i| interp(i - 1, i))?;
    let right = (k..y.len() - 1).find(|&i| crosses(y[i], y[i + 1])).map(|i| interp(i, i + 1))?;
    Some(right - left)
}

/// Largest shift of the 2D pattern between rows, measured as the change of
/// the row's extremum position along the inner sweep.
pub fn pattern_shift(scan: &CalibScan, kind: Extremum) -> Option<f64> {
    let (_, outer) = scan.outer.as_ref()?;
    let pos: Vec<f64> = (0..outer.len()).map(|i| extremum_position(&scan.values, scan.row(i), kind)).collect();
    let lo = pos.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = pos.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    Some(hi - lo)
}

/// Largest change of P₁ between any row of a 2D scan and its first row.
pub fn pattern_change(scan: &CalibScan) -> Option<f64> {
    let (_, outer) = scan.outer.as_ref()?;
    let first = scan.row(0);
    let worst = (1..outer.len())
        .flat_map(|i| scan.row(i).iter().zip(first).map(|(a, b)| (a - b).abs()))
        .fold(0.0, f64::max);
    Some(worst)
}

/// Coherent error of the X_{π/2} window against the ideal gate, leakage
/// included: `1 − F` from the 2×2 block of the closed-system unitary.
pub fn coherent_gate_error(sim: &Transmon, p: &PulseParams) -> Result<f64, TransmonError> {
    let u = sim.pulse_unitary(p)?;
    let block: Mat2 = u.fixed_view::<2, 2>(0, 0).into_owned();
    Ok(1.0 - leaky_unitary_fidelity(&block, &ideal_x90()))
}

/// Coherent error up to a drive-frame offset: `min_φ 1 − F(U, Z(−φ)·X·Z(φ))`.
/// With only X_{π/2} pulses and virtual Z gates such an offset is a gauge
/// freedom that no sequence can detect. Returns `(error, φ)`.
pub fn frame_invariant_error(sim: &Transmon, p: &PulseParams) -> Result<(f64, f64), TransmonError> {
    let u = sim.pulse_unitary(p)?;
    let block: Mat2 = u.fixed_view::<2, 2>(0, 0).into_owned();
    let target = ideal_x90();
    let err = |phi: f64| 1.0 - leaky_unitary_fidelity(&block, &(rz(-phi) * target * rz(phi)));
    let n = 64;
    let grid: Vec<f64> = (0..n).map(|k| -PI + 2.0 * PI * k as f64 / n as f64).collect();
    let best = grid.iter().cloned().fold((f64::INFINITY, 0.0), |acc, x| if err(x) < acc.0 { (err(x), x) } else { acc });
    let step = 2.0 * PI / n as f64;
    let phi = golden_section(err, best.1 - step, best.1 + step, 1e-12);
    Ok((err(phi), phi))
}

pub fn leak_per_gate(sim: &Transmon, p: &PulseParams) -> Result<f64, TransmonError> {
    Ok(sim.with_decoherence(false).gate_channel(p)?.leak_per_gate)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CalibOptions {
    /// X_π counts of the amplitude scans, in order.
    pub amp_repetitions: Vec<usize>,
    /// (X_π, X_{−π}) pair counts of the DRAG-coefficient scans.
    pub alpha_pairs: Vec<usize>,
    /// (X_π, X_{−π}) pair counts of the detuning scans.
    pub detuning_pairs: Vec<usize>,
    pub max_rounds: usize,
    /// Relative amplitude change below which a round counts as converged.
    pub amp_tol: f64,
    /// Absolute detuning change (Hz) below which a round counts as converged.
    pub df_tol: f64,
    pub alpha_tol: f64,
}

impl Default for CalibOptions {
    fn default() -> Self {
        Self {
            amp_repetitions: vec![1, 11, 51],
            alpha_pairs: vec![1, 10, 50],
            detuning_pairs: vec![10, 50, 100, 200],
            max_rounds: 5,
            amp_tol: 1e-6,
            df_tol: 10.0,
            alpha_tol: 1e-4,
        }
    }
}

impl CalibOptions {
    pub fn validate(&self) -> Result<(), CalibError> {
        if self.amp_repetitions.iter().any(|n| n % 2 == 0) {
            return Err(CalibError::InvalidScan("amplitude repetitions must be odd".into()));
        }
        let empty = self.amp_repetitions.is_empty() || self.alpha_pairs.is_empty() || self.detuning_pairs.is_empty();
        if empty || self.alpha_pairs.contains(&0) || self.detuning_pairs.contains(&0) {
            return Err(CalibError::InvalidScan("every scan needs at least one positive repetition count".into()));
        }
        if self.max_rounds == 0 {
            return Err(CalibError::InvalidScan("max_rounds must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationResult {
    pub pulse: PulseParams,
    pub rounds: usize,
    pub converged: bool,
    /// `1 − F` against the ideal X_{π/2}, leakage included.
    pub coherent_error: f64,
    /// The same after removing an undetectable drive-frame offset.
    pub frame_invariant_error: f64,
    pub leak_per_gate: f64,
    /// Pulse after each round.
    pub history: Vec<PulseParams>,
}

/// Optimum of an amplification sequence near `x0`: a coarse sweep of
/// `±half_range` then golden-section refinement within one grid step.
fn refine<F>(f: F, x0: f64, half_range: f64, kind: Extremum) -> Result<f64, TransmonError>
where
    F: Fn(f64) -> Result<f64, TransmonError> + Sync,
{
    let n = 41;
    let xs: Vec<f64> = (0..n).map(|k| x0 - half_range + 2.0 * half_range * k as f64 / (n - 1) as f64).collect();
    let ys: Vec<f64> = xs.par_iter().map(|&x| f(x)).collect::<Result<_, _>>()?;
    let k = extremum_index(&ys, kind);
    let step = 2.0 * half_range / (n - 1) as f64;
    let sign = if kind == Extremum::Peak { -1.0 } else { 1.0 };
    let objective = |x: f64| f(x).map(|v| sign * v).unwrap_or(f64::INFINITY);
    Ok(golden_section(objective, xs[k] - step, xs[k] + step, step * 1e-9))
}

/// Rough period (Hz) of the detuning fringes for `n` pairs of 20 ns pulses.
fn detuning_period(n: usize, tg: f64) -> f64 {
    3e-2 / (n as f64 * tg)
}

/// Alternates amplitude, DRAG-coefficient and DRAG-detuning refinement with
/// growing amplification until a full round leaves the pulse unchanged.
/// Each scan searches only the central fringe around the running estimate.
pub fn closed_loop_calibrate(
    sim: &Transmon,
    initial: &PulseParams,
    opts: &CalibOptions,
) -> Result<CalibrationResult, CalibError> {
    initial.validate()?;
    opts.validate()?;
    let sim = sim.with_decoherence(false);
    let mut p = *initial;
    let mut history = Vec::new();
    let mut converged = false;
    let mut rounds = 0;
    for round in 0..opts.max_rounds {
        rounds = round + 1;
        let start = p;
        let wide = if round == 0 { 1.0 } else { 0.2 };
        for &n_pi in &opts.amp_repetitions {
            let phases = vec![0.0; 2 * n_pi];
            let half = wide * 0.25 / n_pi as f64 * p.omega0;
            let f = |w: f64| run_phases(&sim, &PulseParams { omega0: w, ..p }, &phases).map(|x| x.0);
            p.omega0 = refine(f, p.omega0, half, Extremum::Peak)?;
        }
        for &n in &opts.alpha_pairs {
            let phases = pi_pair_phases(n);
            let half = wide * 0.5 / n as f64;
            let f = |a: f64| run_phases(&sim, &PulseParams { alpha: a, ..p }, &phases).map(|x| x.0);
            p.alpha = refine(f, p.alpha, half, Extremum::Dip)?;
        }
        for &n in &opts.detuning_pairs {
            let phases = pi_pair_phases(n);
            let half = wide * 0.3 * detuning_period(n, p.tg);
            let f = |df: f64| run_phases(&sim, &PulseParams { df, ..p }, &phases).map(|x| x.0);
            p.df = refine(f, p.df, half, Extremum::Dip)?;
        }
        history.push(p);
        let steady = ((p.omega0 - start.omega0) / start.omega0).abs() < opts.amp_tol
            && (p.df - start.df).abs() < opts.df_tol
            && (p.alpha - start.alpha).abs() < opts.alpha_tol;
        if steady {
            converged = true;
            break;
        }
    }
    Ok(CalibrationResult {
        coherent_error: coherent_gate_error(&sim, &p)?,
        frame_invariant_error: frame_invariant_error(&sim, &p)?.0,
        leak_per_gate: leak_per_gate(&sim, &p)?,
        pulse: p,
        rounds,
        converged,
        history,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::transmon::DeviceParams;

    fn sim() -> Transmon {
        Transmon::closed(DeviceParams::reference())
    }

    fn linspace(a: f64, b: f64, n: usize) -> Vec<f64> {
        (0..n).map(|k| a + (b - a) * k as f64 / (n - 1) as f64).collect()
    }

    #[test]
    fn rejects_even_repetitions_and_unsorted_sweeps() {
        let p = PulseParams::nominal_x90(20e-9);
        assert!(amp_scan(&sim(), &p, 2, &[p.omega0]).is_err());
        assert!(detuning_scan(&sim(), &p, 5, &[1.0, 0.0]).is_err());
        assert!(buffer_scan(&sim(), &p, 5, &[], &[0.0]).is_err());
    }

    #[test]
    fn gaussian_dip_width_matches_fwhm() {
        let s = 0.7;
        let x = linspace(-6.0, 6.0, 2401);
        let y: Vec<f64> = x.iter().map(|v| 1.0 - (-v * v / (2.0 * s * s)).exp()).collect();
        let w = central_width(&x, &y, Extremum::Dip).unwrap();
        assert!((w - 2.0 * (2.0 * 2f64.ln()).sqrt() * s).abs() < 1e-4);
    }

    #[test]
    fn parabola_vertex_is_exact() {
        let x = linspace(-1.0, 1.0, 11);
        let y: Vec<f64> = x.iter().map(|v| 3.0 - 2.0 * (v - 0.137).powi(2)).collect();
        assert!((extremum_position(&x, &y, Extremum::Peak) - 0.137).abs() < 1e-12);
    }

    #[test]
    fn width_missing_when_crossing_outside_sweep() {
        let x = linspace(-1.0, 1.0, 5);
        let y = vec![0.4, 0.2, 0.0, 0.3, 1.0];
        assert!(central_width(&x, &y, Extremum::Dip).is_none());
    }

    #[test]
    fn amp_fringe_narrows_with_repetitions() {
        let p = PulseParams::nominal_x90(20e-9);
        let widths: Vec<f64> = [1usize, 11]
            .iter()
            .map(|&n| {
                let w = linspace(p.omega0 * (1.0 - 0.6 / n as f64), p.omega0 * (1.0 + 0.6 / n as f64), 241);
                let s = amp_scan(&sim(), &p, n, &w).unwrap();
                central_width(&s.values, &s.p1, Extremum::Peak).unwrap()
            })
            .collect();
        let ratio = widths[0] / widths[1];
        assert!((8.0..14.0).contains(&ratio), "ratio {ratio}");
    }

    #[test]
    fn csv_has_one_row_per_point() {
        let p = PulseParams::nominal_x90(20e-9);
        let s = buffer_scan(&sim(), &p, 1, &[-0.6, -0.5], &[0.0, 2e-9]).unwrap();
        let csv = s.to_csv();
        assert!(csv.starts_with("tbuff,alpha,p1,p2\n"));
        assert_eq!(csv.lines().count(), 5);
        assert_eq!(s.row(1).len(), 2);
    }

    #[test]
    fn frame_offset_is_not_counted() {
        let s = sim();
        let p = PulseParams::nominal_x90(20e-9);
        let shifted = p.with_phase(0.3);
        let (a, _) = frame_invariant_error(&s, &p).unwrap();
        let (b, phi) = frame_invariant_error(&s, &shifted).unwrap();
        assert!((a - b).abs() < 1e-10);
        assert!(coherent_gate_error(&s, &shifted).unwrap() > 1e-2);
        assert!(phi.abs() > 0.1);
    }

    #[test]
    fn options_validate() {
        assert!(CalibOptions::default().validate().is_ok());
        let bad = CalibOptions { amp_repetitions: vec![2], ..Default::default() };
        assert!(bad.validate().is_err());
        let none = CalibOptions { detuning_pairs: vec![], ..Default::default() };
        assert!(none.validate().is_err());
    }
}
