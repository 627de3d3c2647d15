//! Randomized, interleaved and purity benchmarking with leakage tracking.
//!
//! Sequences are lists of Clifford indices whose ideal composition is the
//! identity. Two simulators consume them: a channel-level one that chains
//! 5×5 leaky transfer matrices, and a pulse-level one that chains qutrit
//! propagators with frame tracking.

use nalgebra::{DMatrix, DVector, Vector4};
use rand::Rng;
use rand_distr::{Binomial, Distribution};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::clifford::{clifford_group, inverse_for, CliffordError, InterleavedGate, PulseItem, GROUP_ORDER};
use crate::fit::{levenberg_marquardt, std_dev, LmOptions};
use crate::linalg::c;
use crate::qop::{leaky_state, LeakyState, LeakyTransfer, Mat3, QubitChannel};
use crate::seeds;
use crate::transmon::{frame_rotation, PulseParams, Propagator, Transmon, TransmonError};

/// Mean physical slots per Clifford under the compiled convention.
pub const PULSES_PER_CLIFFORD: f64 = 53.0 / 24.0;
pub const DEFAULT_LENGTHS: [usize; 9] = [1, 30, 100, 300, 700, 1200, 2000, 3000, 4500];
pub const DEFAULT_BOOTSTRAP: usize = 1000;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FitError {
    #[error("need at least 4 distinct sequence lengths, got {0}")]
    TooFewPoints(usize),
    #[error("degenerate data: decay amplitude is zero and the rate is unidentifiable")]
    Degenerate,
    #[error("fit did not converge (rss {rss:.3e})")]
    NotConverged { rss: f64, residuals: Vec<f64> },
    #[error("decay parameter {value} outside (0, 1]")]
    OutOfRange { value: f64, residuals: Vec<f64> },
    #[error("invalid data: {0}")]
    InvalidData(String),
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BenchError {
    #[error("invalid benchmark configuration: {0}")]
    InvalidConfig(String),
    #[error("sequence (m = {length}, #{index}) produced an invalid state: {detail}")]
    InvalidState { length: usize, index: usize, detail: String },
    #[error(transparent)]
    Fit(#[from] FitError),
    #[error(transparent)]
    Clifford(#[from] CliffordError),
    #[error(transparent)]
    Transmon(#[from] TransmonError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RBConfig {
    pub lengths: Vec<usize>,
    pub n_sequences: usize,
    pub shots: u64,
    pub seed: u64,
}

impl RBConfig {
    pub fn with_seed(seed: u64) -> Self {
        Self { lengths: DEFAULT_LENGTHS.to_vec(), n_sequences: 20, shots: 1024, seed }
    }

    pub fn validate(&self) -> Result<(), BenchError> {
        let bad = |m: &str| Err(BenchError::InvalidConfig(m.to_string()));
        if self.lengths.is_empty() {
            return bad("length list is empty");
        }
        if self.lengths.windows(2).any(|w| w[0] >= w[1]) {
            return bad("lengths must be strictly increasing");
        }
        if self.lengths[0] == 0 {
            return bad("lengths must be positive");
        }
        if self.n_sequences == 0 || self.shots == 0 {
            return bad("sequence and shot counts must be positive");
        }
        Ok(())
    }
}

/// A pseudo-identity Clifford sequence: random elements (possibly with an
/// interleaved target) followed by the recovery element.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RbSequence {
    pub length: usize,
    pub index: usize,
    pub cliffords: Vec<usize>,
}

fn random_cliffords(seed: u64, length: usize, index: usize) -> Vec<usize> {
    let mut rng = seeds::stream(seed, "rb-sequence", &[length as u64, index as u64]);
    (0..length).map(|_| rng.random_range(0..GROUP_ORDER)).collect()
}

pub fn gen_rb_sequences(cfg: &RBConfig) -> Result<Vec<RbSequence>, BenchError> {
    cfg.validate()?;
    let mut out = Vec::with_capacity(cfg.lengths.len() * cfg.n_sequences);
    for &m in &cfg.lengths {
        for i in 0..cfg.n_sequences {
            let mut cliffords = random_cliffords(cfg.seed, m, i);
            cliffords.push(inverse_for(&cliffords)?);
            out.push(RbSequence { length: m, index: i, cliffords });
        }
    }
    Ok(out)
}

/// Same random Cliffords as the reference run with `target` after each.
pub fn gen_irb_sequences(cfg: &RBConfig, target: InterleavedGate) -> Result<Vec<RbSequence>, BenchError> {
    cfg.validate()?;
    let t = target.clifford_index();
    let mut out = Vec::with_capacity(cfg.lengths.len() * cfg.n_sequences);
    for &m in &cfg.lengths {
        for i in 0..cfg.n_sequences {
            let mut cliffords = Vec::with_capacity(2 * m + 1);
            for c in random_cliffords(cfg.seed, m, i) {
                cliffords.push(c);
                cliffords.push(t);
            }
            cliffords.push(inverse_for(&cliffords)?);
            out.push(RbSequence { length: m, index: i, cliffords });
        }
    }
    Ok(out)
}

/// Exact final-state figures of one sequence.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SequenceOutcome {
    /// Ground-state population.
    pub p0: f64,
    /// Leaked population.
    pub p2: f64,
    /// `Tr[ρ²]` of the qubit block.
    pub purity: f64,
    /// Unnormalized qubit-block expectations `(⟨X⟩, ⟨Y⟩, ⟨Z⟩)`.
    pub bloch: [f64; 3],
}

pub trait SequenceSimulator: Sync {
    fn outcome(&self, cliffords: &[usize]) -> Result<SequenceOutcome, String>;
}

/// Channel-level gate set: one leaky transfer per Clifford.
#[derive(Debug, Clone)]
pub struct ChannelGateSet {
    transfers: Vec<LeakyTransfer>,
    channels: Vec<QubitChannel>,
}

impl ChannelGateSet {
    pub fn from_clifford_channels(channels: Vec<QubitChannel>) -> Result<Self, BenchError> {
        if channels.len() != GROUP_ORDER {
            return Err(BenchError::InvalidConfig(format!("expected 24 Clifford channels, got {}", channels.len())));
        }
        let transfers = channels.iter().map(|c| c.leaky_transfer()).collect();
        Ok(Self { transfers, channels })
    }

    /// Compiles every Clifford from the realized `X_{π/2}` and idle channels.
    pub fn from_gates(pulse: &QubitChannel, idle: &QubitChannel) -> Self {
        let channels: Vec<QubitChannel> =
            (0..GROUP_ORDER).map(|i| clifford_group().program(i).channel(pulse, idle)).collect();
        Self::from_clifford_channels(channels).expect("24 channels")
    }

    pub fn ideal() -> Self {
        Self::from_gates(&QubitChannel::from_unitary(&crate::transmon::ideal_x90()), &QubitChannel::identity())
    }

    /// Ideal Cliffords each followed by `ρ → (1−q)ρ + q·I/2`.
    pub fn depolarizing_per_clifford(q: f64) -> Self {
        let dep = QubitChannel::depolarizing(q);
        let channels = clifford_group().elements().iter().map(|e| e.ptm.then(&dep)).collect();
        Self::from_clifford_channels(channels).expect("24 channels")
    }

    pub fn channel(&self, index: usize) -> &QubitChannel {
        &self.channels[index]
    }
}

fn ground_leaky() -> LeakyState {
    leaky_state(&crate::qop::bloch_state(0.0, 0.0, 1.0), 0.0)
}

impl SequenceSimulator for ChannelGateSet {
    fn outcome(&self, cliffords: &[usize]) -> Result<SequenceOutcome, String> {
        let mut s = ground_leaky();
        for &c in cliffords {
            s = self.transfers[c] * s;
        }
        let r = std::f64::consts::FRAC_1_SQRT_2;
        let v = Vector4::new(s[0], s[1], s[2], s[3]);
        let p0 = (v[0] + v[3]) * r;
        let outcome = SequenceOutcome {
            p0,
            p2: s[4],
            purity: v.norm_squared(),
            bloch: [v[1] * 2f64.sqrt(), v[2] * 2f64.sqrt(), v[3] * 2f64.sqrt()],
        };
        check_outcome(outcome)
    }
}

fn check_outcome(o: SequenceOutcome) -> Result<SequenceOutcome, String> {
    let tol = 1e-9;
    if !(o.p0 >= -tol && o.p0 <= 1.0 + tol && o.p2 >= -tol && o.p2 <= 1.0 + tol && o.p0.is_finite()) {
        return Err(format!("populations out of range: p0 = {}, p2 = {}", o.p0, o.p2));
    }
    Ok(SequenceOutcome { p0: o.p0.clamp(0.0, 1.0), p2: o.p2.clamp(0.0, 1.0), ..o })
}

/// Pulse-level gate set on the qutrit: one composed propagator per Clifford,
/// built from the window propagator of the calibrated pulse, the idle
/// propagator and exact frame rotations.
#[derive(Debug, Clone)]
pub struct PulseGateSet {
    cliffords: Vec<Propagator>,
}

impl PulseGateSet {
    pub fn new(sim: &Transmon, pulse: &PulseParams) -> Result<Self, BenchError> {
        let base = pulse.with_phase(0.0);
        let pulse_prop = sim.window_propagator(&base, None)?;
        let idle_prop = sim.idle_propagator(base.duration())?;
        Ok(Self::from_propagators(&pulse_prop, &idle_prop))
    }

    pub fn from_propagators(pulse: &Propagator, idle: &Propagator) -> Self {
        let cliffords = (0..GROUP_ORDER)
            .map(|i| {
                clifford_group().program(i).items.iter().fold(Propagator::identity(), |acc, item| match item {
                    PulseItem::Pulse => acc.then(pulse),
                    PulseItem::Idle => acc.then(idle),
                    PulseItem::VirtualZ(theta) => acc.then(&Propagator::Unitary(frame_rotation(*theta))),
                })
            })
            .collect();
        Self { cliffords }
    }
}

impl SequenceSimulator for PulseGateSet {
    fn outcome(&self, cliffords: &[usize]) -> Result<SequenceOutcome, String> {
        let mut rho = Mat3::zeros();
        rho[(0, 0)] = c(1.0, 0.0);
        for &k in cliffords {
            rho = self.cliffords[k].apply(&rho);
        }
        let block = rho.fixed_view::<2, 2>(0, 0).into_owned();
        let sx = 2.0 * block[(0, 1)].re;
        let sy = -2.0 * block[(0, 1)].im;
        let sz = (block[(0, 0)] - block[(1, 1)]).re;
        let outcome = SequenceOutcome {
            p0: rho[(0, 0)].re,
            p2: rho[(2, 2)].re,
            purity: (block * block).trace().re,
            bloch: [sx, sy, sz],
        };
        check_outcome(outcome)
    }
}

/// Readout assignment: probability of reporting "0" given the qubit in
/// |0⟩ or in |1⟩ (leaked population reads as |1⟩).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AssignmentMatrix {
    pub p0_given0: f64,
    pub p0_given1: f64,
}

impl Default for AssignmentMatrix {
    fn default() -> Self {
        Self { p0_given0: 1.0, p0_given1: 0.0 }
    }
}

impl AssignmentMatrix {
    pub fn reported_zero(&self, p0: f64) -> f64 {
        (self.p0_given0 * p0 + self.p0_given1 * (1.0 - p0)).clamp(0.0, 1.0)
    }
}

/// One row of a benchmarking dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SequenceRecord {
    pub length: usize,
    pub index: usize,
    pub shots: u64,
    pub successes: u64,
    pub p0_exact: f64,
    pub p2: f64,
    pub purity: f64,
    pub bloch: [f64; 3],
}

impl SequenceRecord {
    pub fn survival(&self) -> f64 {
        self.successes as f64 / self.shots as f64
    }
}

/// Simulates every sequence and draws `shots` binomial samples of the
/// reported ground outcome. Results are in input order regardless of the
/// worker count.
pub fn run_sequences<S: SequenceSimulator + ?Sized>(
    sequences: &[RbSequence],
    sim: &S,
    shots: u64,
    spam: &AssignmentMatrix,
    seed: u64,
    stage: &str,
) -> Result<Vec<SequenceRecord>, BenchError> {
    if shots == 0 {
        return Err(BenchError::InvalidConfig("shots must be positive".into()));
    }
    sequences
        .par_iter()
        .map(|seq| {
            let o = sim.outcome(&seq.cliffords).map_err(|detail| BenchError::InvalidState {
                length: seq.length,
                index: seq.index,
                detail,
            })?;
            let mut rng = seeds::stream(seed, stage, &[seq.length as u64, seq.index as u64]);
            let p = spam.reported_zero(o.p0);
            let successes = Binomial::new(shots, p).expect("p in [0, 1]").sample(&mut rng);
            Ok(SequenceRecord {
                length: seq.length,
                index: seq.index,
                shots,
                successes,
                p0_exact: o.p0,
                p2: o.p2,
                purity: o.purity,
                bloch: o.bloch,
            })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum DecayModel {
    /// `A·pᵐ + B`
    Exponential,
    /// `A·uᵐ⁻¹ + B`
    Purity,
}

impl DecayModel {
    fn exponent(self, m: f64) -> f64 {
        match self {
            DecayModel::Exponential => m,
            DecayModel::Purity => m - 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecayFit {
    pub model: DecayModel,
    pub a: f64,
    pub p: f64,
    pub b: f64,
    pub a_err: f64,
    pub p_err: f64,
    pub b_err: f64,
    pub residuals: Vec<f64>,
    pub converged: bool,
}

impl DecayFit {
    pub fn eval(&self, m: f64) -> f64 {
        self.a * self.p.powf(self.model.exponent(m)) + self.b
    }
}

fn distinct_count(m: &[f64]) -> usize {
    let mut v: Vec<f64> = m.to_vec();
    v.sort_by(|a, b| a.total_cmp(b));
    v.dedup();
    v.len()
}

/// Least-squares fit of a single exponential decay with bounds
/// `p ∈ (0, 1]`, `A, B ∈ [−1, 2]`.
pub fn fit_decay(mvals: &[f64], yvals: &[f64], model: DecayModel) -> Result<DecayFit, FitError> {
    if mvals.len() != yvals.len() {
        return Err(FitError::InvalidData("length mismatch".into()));
    }
    let distinct = distinct_count(mvals);
    if distinct < 4 {
        return Err(FitError::TooFewPoints(distinct));
    }
    if yvals.iter().any(|y| !y.is_finite()) {
        return Err(FitError::InvalidData("non-finite value".into()));
    }
    let ymax = yvals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let ymin = yvals.iter().cloned().fold(f64::INFINITY, f64::min);
    if ymax - ymin <= 1e-12 * ymax.abs().max(1.0) {
        return Err(FitError::Degenerate);
    }
    let n = mvals.len();
    let x: Vec<f64> = mvals.iter().map(|&m| model.exponent(m)).collect();

    let residual = |q: &DVector<f64>| DVector::from_fn(n, |i, _| q[0] * q[1].powf(x[i]) + q[2] - yvals[i]);
    let jacobian = |q: &DVector<f64>| {
        DMatrix::from_fn(n, 3, |i, j| match j {
            0 => q[1].powf(x[i]),
            1 => {
                if x[i] == 0.0 {
                    0.0
                } else {
                    q[0] * x[i] * q[1].powf(x[i] - 1.0)
                }
            }
            _ => 1.0,
        })
    };
    let lower = [-1.0, 1e-12, -1.0];
    let upper = [2.0, 1.0, 2.0];

    let mut starts = vec![spec_initial_guess(mvals, yvals, &x)];
    starts.push(projected_scan(&x, yvals));
    let mut best: Option<crate::fit::LmResult> = None;
    for s in starts {
        let r = levenberg_marquardt(residual, jacobian, DVector::from_vec(s.to_vec()), &lower, &upper, LmOptions::default());
        if best.as_ref().is_none_or(|b| r.rss < b.rss) {
            best = Some(r);
        }
    }
    let res = best.expect("at least one start");
    let residuals: Vec<f64> = res.residuals.iter().cloned().collect();
    if !res.converged {
        return Err(FitError::NotConverged { rss: res.rss, residuals });
    }
    let (a, p, b) = (res.params[0], res.params[1], res.params[2]);
    if !(p > 0.0 && p <= 1.0) {
        return Err(FitError::OutOfRange { value: p, residuals });
    }
    if a.abs() < 1e-9 {
        return Err(FitError::Degenerate);
    }
    let errs = res.standard_errors().unwrap_or_else(|| DVector::zeros(3));
    Ok(DecayFit { model, a, p, b, a_err: errs[0], p_err: errs[1], b_err: errs[2], residuals, converged: true })
}

fn spec_initial_guess(mvals: &[f64], yvals: &[f64], x: &[f64]) -> [f64; 3] {
    let (imin, imax) = {
        let mut imin = 0;
        let mut imax = 0;
        for i in 0..mvals.len() {
            if mvals[i] < mvals[imin] {
                imin = i;
            }
            if mvals[i] > mvals[imax] {
                imax = i;
            }
        }
        (imin, imax)
    };
    let a0 = yvals[imin] - yvals[imax];
    let b0 = yvals[imax];
    // log-linear regression of (y − B0) against the exponent
    let pts: Vec<(f64, f64)> = x
        .iter()
        .zip(yvals)
        .filter(|(_, y)| (*y - b0) * a0.signum() > 0.0)
        .map(|(x, y)| (*x, ((y - b0) * a0.signum()).ln()))
        .collect();
    let p0 = if pts.len() >= 2 {
        let mx = pts.iter().map(|p| p.0).sum::<f64>() / pts.len() as f64;
        let my = pts.iter().map(|p| p.1).sum::<f64>() / pts.len() as f64;
        let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
        let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
        if sxx > 0.0 { (sxy / sxx).exp().clamp(1e-6, 1.0) } else { 0.99 }
    } else {
        0.99
    };
    [a0.clamp(-1.0, 2.0), p0, b0.clamp(-1.0, 2.0)]
}

/// For fixed `p` the model is linear in `(A, B)`; scan `p` on a log grid of
/// `1 − p` and keep the best linear solution.
fn projected_scan(x: &[f64], y: &[f64]) -> [f64; 3] {
    let mut best = (f64::INFINITY, [0.0, 0.99, 0.0]);
    for k in 0..=240 {
        let one_minus = 10f64.powf(-9.0 + 9.0 * k as f64 / 240.0);
        let p = 1.0 - one_minus;
        if let Some((a, b, rss)) = linear_ab(x, y, |e| p.powf(e)) {
            if rss < best.0 {
                best = (rss, [a.clamp(-1.0, 2.0), p, b.clamp(-1.0, 2.0)]);
            }
        }
    }
    best.1
}

/// Least-squares `(A, B)` for `y ≈ A·f(x) + B`.
fn linear_ab<F: Fn(f64) -> f64>(x: &[f64], y: &[f64], f: F) -> Option<(f64, f64, f64)> {
    let n = x.len() as f64;
    let fx: Vec<f64> = x.iter().map(|&e| f(e)).collect();
    let sf: f64 = fx.iter().sum();
    let sff: f64 = fx.iter().map(|v| v * v).sum();
    let sy: f64 = y.iter().sum();
    let sfy: f64 = fx.iter().zip(y).map(|(a, b)| a * b).sum();
    let det = n * sff - sf * sf;
    if det.abs() < 1e-300 {
        return None;
    }
    let a = (n * sfy - sf * sy) / det;
    let b = (sy - a * sf) / n;
    let rss = fx.iter().zip(y).map(|(f, y)| (a * f + b - y).powi(2)).sum();
    Some((a, b, rss))
}

/// Mean of `value` per sequence length, in increasing length order.
pub fn length_means<F: Fn(&SequenceRecord) -> f64>(records: &[SequenceRecord], value: F) -> (Vec<f64>, Vec<f64>) {
    let mut lengths: Vec<usize> = records.iter().map(|r| r.length).collect();
    lengths.sort_unstable();
    lengths.dedup();
    let means = lengths
        .iter()
        .map(|&m| {
            let vals: Vec<f64> = records.iter().filter(|r| r.length == m).map(&value).collect();
            vals.iter().sum::<f64>() / vals.len() as f64
        })
        .collect();
    (lengths.into_iter().map(|m| m as f64).collect(), means)
}

/// Standard deviations of the refitted parameters over resamples that draw
/// sequences with replacement within each length.
pub fn bootstrap<F>(records: &[SequenceRecord], refit: F, n_resamples: usize, seed: u64) -> Vec<f64>
where
    F: Fn(&[SequenceRecord]) -> Option<Vec<f64>> + Sync,
{
    let mut lengths: Vec<usize> = records.iter().map(|r| r.length).collect();
    lengths.sort_unstable();
    lengths.dedup();
    let groups: Vec<Vec<&SequenceRecord>> =
        lengths.iter().map(|&m| records.iter().filter(|r| r.length == m).collect()).collect();
    let samples: Vec<Vec<f64>> = (0..n_resamples)
        .into_par_iter()
        .filter_map(|k| {
            let mut rng = seeds::stream(seed, "bootstrap", &[k as u64]);
            let resampled: Vec<SequenceRecord> = groups
                .iter()
                .flat_map(|g| (0..g.len()).map(|_| g[rng.random_range(0..g.len())].clone()).collect::<Vec<_>>())
                .collect();
            refit(&resampled)
        })
        .collect();
    if samples.is_empty() {
        return Vec::new();
    }
    let k = samples[0].len();
    (0..k).map(|j| std_dev(&samples.iter().map(|s| s[j]).collect::<Vec<_>>())).collect()
}

/// `r = (1 − p)(1 − 1/d)`.
pub fn epc_from_p(p: f64, d: f64) -> f64 {
    (1.0 - p) * (1.0 - 1.0 / d)
}

pub fn epg_avg(r_clif: f64) -> f64 {
    r_clif / PULSES_PER_CLIFFORD
}

/// `r_G = (1 − p_int/p_ref)(1 − 1/d)`; negative values are returned as is.
pub fn epg_interleaved(p_int: f64, p_ref: f64, d: f64) -> f64 {
    (1.0 - p_int / p_ref) * (1.0 - 1.0 / d)
}

/// Decoherence bound from the unitarity: `(1 − √u)(1 − 1/d)`.
pub fn decoherence_epc(u: f64, d: f64) -> f64 {
    (1.0 - u.sqrt()) * (1.0 - 1.0 / d)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub value: f64,
    pub err: f64,
}

impl Estimate {
    pub fn new(value: f64, err: f64) -> Self {
        Self { value, err }
    }

    pub fn scaled(&self, k: f64) -> Self {
        Self { value: self.value * k, err: self.err * k.abs() }
    }
}

fn fit_survival(records: &[SequenceRecord]) -> Result<DecayFit, FitError> {
    let (m, y) = length_means(records, SequenceRecord::survival);
    fit_decay(&m, &y, DecayModel::Exponential)
}

fn with_bootstrap(mut fit: DecayFit, errs: &[f64]) -> DecayFit {
    if errs.len() == 3 {
        fit.a_err = errs[0];
        fit.p_err = errs[1];
        fit.b_err = errs[2];
    }
    fit
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RbResult {
    pub records: Vec<SequenceRecord>,
    pub fit: DecayFit,
    pub r_clif: Estimate,
    pub r_avg: Estimate,
}

impl RbResult {
    pub fn from_records(records: Vec<SequenceRecord>, n_boot: usize, seed: u64) -> Result<Self, BenchError> {
        let fit = fit_survival(&records)?;
        let errs = bootstrap(
            &records,
            |rs| fit_survival(rs).ok().map(|f| vec![f.a, f.p, f.b]),
            n_boot,
            seed,
        );
        let fit = with_bootstrap(fit, &errs);
        let r_clif = Estimate::new(epc_from_p(fit.p, 2.0), fit.p_err * 0.5);
        let r_avg = Estimate::new(epg_avg(r_clif.value), r_clif.err / PULSES_PER_CLIFFORD);
        Ok(Self { records, fit, r_clif, r_avg })
    }
}

/// Reference RB on a simulator.
pub fn run_rb<S: SequenceSimulator + ?Sized>(
    cfg: &RBConfig,
    sim: &S,
    spam: &AssignmentMatrix,
    n_boot: usize,
) -> Result<RbResult, BenchError> {
    let seqs = gen_rb_sequences(cfg)?;
    let records = run_sequences(&seqs, sim, cfg.shots, spam, cfg.seed, "rb-shots")?;
    RbResult::from_records(records, n_boot, seeds::derive_seed(cfg.seed, "rb-bootstrap", &[]))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct IrbResult {
    pub gate: InterleavedGate,
    pub records: Vec<SequenceRecord>,
    pub fit: DecayFit,
    pub r_gate: Estimate,
    /// Set when `p_int > p_ref`.
    pub negative: bool,
}

/// Interleaved RB against an existing reference result.
pub fn run_irb<S: SequenceSimulator + ?Sized>(
    cfg: &RBConfig,
    sim: &S,
    target: InterleavedGate,
    reference: &RbResult,
    spam: &AssignmentMatrix,
    n_boot: usize,
) -> Result<IrbResult, BenchError> {
    let seqs = gen_irb_sequences(cfg, target)?;
    let stage = format!("irb-shots-{}", target.name());
    let records = run_sequences(&seqs, sim, cfg.shots, spam, cfg.seed, &stage)?;
    let fit = fit_survival(&records)?;
    let errs = bootstrap(
        &records,
        |rs| fit_survival(rs).ok().map(|f| vec![f.a, f.p, f.b]),
        n_boot,
        seeds::derive_seed(cfg.seed, "irb-bootstrap", &[target as u64]),
    );
    let fit = with_bootstrap(fit, &errs);
    let p_ref = reference.fit.p;
    let value = epg_interleaved(fit.p, p_ref, 2.0);
    let err = 0.5 * ((fit.p_err / p_ref).powi(2) + (fit.p * reference.fit.p_err / (p_ref * p_ref)).powi(2)).sqrt();
    Ok(IrbResult { gate: target, records, negative: value < 0.0, fit, r_gate: Estimate::new(value, err) })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum PurityMode {
    /// Exact qubit-block purity.
    Exact,
    /// Shot-sampled X/Y/Z tomography with `shots` per basis.
    Tomography { shots: u64 },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PbResult {
    pub records: Vec<SequenceRecord>,
    /// Per-sequence purity as used in the fit.
    pub purities: Vec<f64>,
    pub purity_fit: DecayFit,
    pub r_dec_clif: Estimate,
    pub r_dec_avg: Estimate,
    /// RB fit on the survival data of the same sequences.
    pub rb_fit: DecayFit,
    pub r_prime_avg: Estimate,
    pub incoherent_fraction: f64,
    pub leakage: Option<LeakageFit>,
}

fn sampled_purity(bloch: [f64; 3], shots: u64, rng: &mut impl Rng) -> f64 {
    let n = shots as f64;
    let mut total = 1.0;
    for e in bloch {
        let p = ((1.0 + e) / 2.0).clamp(0.0, 1.0);
        let k = Binomial::new(shots, p).expect("valid").sample(rng) as f64;
        let est = 2.0 * k / n - 1.0;
        // unbiased estimate of ⟨σ⟩²
        total += (n * est * est - 1.0) / (n - 1.0);
    }
    total / 2.0
}

fn purity_fit_from(records: &[SequenceRecord], purities: &[f64]) -> Result<DecayFit, FitError> {
    let (m, y) = length_means_values(records, purities);
    fit_decay(&m, &y, DecayModel::Purity)
}

fn length_means_values(records: &[SequenceRecord], values: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let tagged: Vec<SequenceRecord> = records
        .iter()
        .zip(values)
        .map(|(r, v)| SequenceRecord { purity: *v, ..r.clone() })
        .collect();
    length_means(&tagged, |r| r.purity)
}

/// Purity benchmarking on the RB sequences of `cfg`, with the survival RB fit
/// and the leakage fit on the same sequences.
pub fn purity_benchmark<S: SequenceSimulator + ?Sized>(
    cfg: &RBConfig,
    sim: &S,
    mode: PurityMode,
    spam: &AssignmentMatrix,
    n_boot: usize,
) -> Result<PbResult, BenchError> {
    let seqs = gen_rb_sequences(cfg)?;
    let records = run_sequences(&seqs, sim, cfg.shots, spam, cfg.seed, "pb-shots")?;
    let purities: Vec<f64> = match mode {
        PurityMode::Exact => records.iter().map(|r| r.purity).collect(),
        PurityMode::Tomography { shots } => records
            .iter()
            .map(|r| {
                let mut rng = seeds::stream(cfg.seed, "pb-tomography", &[r.length as u64, r.index as u64]);
                sampled_purity(r.bloch, shots, &mut rng)
            })
            .collect(),
    };
    let tagged: Vec<SequenceRecord> = records
        .iter()
        .zip(&purities)
        .map(|(r, v)| SequenceRecord { purity: *v, ..r.clone() })
        .collect();
    let purity_fit = purity_fit_from(&records, &purities)?;
    let errs = bootstrap(
        &tagged,
        |rs| {
            let (m, y) = length_means(rs, |r| r.purity);
            fit_decay(&m, &y, DecayModel::Purity).ok().map(|f| vec![f.a, f.p, f.b])
        },
        n_boot,
        seeds::derive_seed(cfg.seed, "pb-bootstrap", &[]),
    );
    let purity_fit = with_bootstrap(purity_fit, &errs);
    let u = purity_fit.p;
    let r_dec_clif = Estimate::new(decoherence_epc(u, 2.0), 0.25 * purity_fit.p_err / u.sqrt());
    let r_dec_avg = r_dec_clif.scaled(1.0 / PULSES_PER_CLIFFORD);

    let rb = RbResult::from_records(records.clone(), n_boot, seeds::derive_seed(cfg.seed, "pb-rb-bootstrap", &[]))?;
    let leakage = leakage_from_records(&records, n_boot, seeds::derive_seed(cfg.seed, "pb-leak-bootstrap", &[])).ok();
    Ok(PbResult {
        incoherent_fraction: r_dec_avg.value / rb.r_avg.value,
        records,
        purities,
        purity_fit,
        r_dec_clif,
        r_dec_avg,
        rb_fit: rb.fit,
        r_prime_avg: rb.r_avg,
        leakage,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LeakageFit {
    pub gamma_clif: Estimate,
    pub p2_inf: Estimate,
    pub p2_0: Estimate,
    pub gamma_avg: Estimate,
    /// Initial slope `Γ·(P∞ − P₀)`: population leaving the qubit subspace
    /// per Clifford. Differs from `Γ` when |2⟩ relaxes back within the run.
    pub leak_clif: Estimate,
    pub leak_avg: Estimate,
    pub residuals: Vec<f64>,
}

impl LeakageFit {
    pub fn eval(&self, m: f64) -> f64 {
        let e = (-self.gamma_clif.value * m).exp();
        self.p2_inf.value * (1.0 - e) + self.p2_0.value * e
    }
}

/// Fits `P₂(m) = P∞(1 − e^{−Γm}) + P₀e^{−Γm}`.
pub fn leakage_fit(mvals: &[f64], p2vals: &[f64]) -> Result<LeakageFit, FitError> {
    if mvals.len() != p2vals.len() {
        return Err(FitError::InvalidData("length mismatch".into()));
    }
    let distinct = distinct_count(mvals);
    if distinct < 4 {
        return Err(FitError::TooFewPoints(distinct));
    }
    if p2vals.iter().any(|p| !(0.0..=1.0).contains(p)) {
        return Err(FitError::InvalidData("populations must lie in [0, 1]".into()));
    }
    let n = mvals.len();
    let residual = |q: &DVector<f64>| {
        DVector::from_fn(n, |i, _| {
            let e = (-q[0] * mvals[i]).exp();
            q[1] * (1.0 - e) + q[2] * e - p2vals[i]
        })
    };
    let jacobian = |q: &DVector<f64>| {
        DMatrix::from_fn(n, 3, |i, j| {
            let e = (-q[0] * mvals[i]).exp();
            match j {
                0 => (q[1] - q[2]) * mvals[i] * e,
                1 => 1.0 - e,
                _ => e,
            }
        })
    };
    // scan Γ with (P∞, P₀) solved linearly: y = P∞ + (P₀ − P∞)e^{−Γm}
    let mut best = (f64::INFINITY, [1e-4, 0.0, 0.0]);
    for k in 0..=300 {
        let gamma = 10f64.powf(-9.0 + 9.0 * k as f64 / 300.0);
        if let Some((slope, intercept, rss)) = linear_ab(mvals, p2vals, |m| (-gamma * m).exp()) {
            let start = [gamma, intercept.clamp(0.0, 1.0), (slope + intercept).clamp(0.0, 1.0)];
            if rss < best.0 {
                best = (rss, start);
            }
        }
    }
    let res = levenberg_marquardt(
        residual,
        jacobian,
        DVector::from_vec(best.1.to_vec()),
        &[0.0, 0.0, 0.0],
        &[1.0, 1.0, 1.0],
        LmOptions::default(),
    );
    let residuals: Vec<f64> = res.residuals.iter().cloned().collect();
    if !res.converged {
        return Err(FitError::NotConverged { rss: res.rss, residuals });
    }
    let errs = res.standard_errors().unwrap_or_else(|| DVector::zeros(3));
    let q = &res.params;
    let gamma_clif = Estimate::new(q[0], errs[0]);
    let slope = q[0] * (q[1] - q[2]);
    let slope_err = ((q[1] - q[2]) * errs[0]).hypot(q[0] * errs[1].hypot(errs[2]));
    let leak_clif = Estimate::new(slope, slope_err);
    Ok(LeakageFit {
        gamma_avg: gamma_clif.scaled(1.0 / PULSES_PER_CLIFFORD),
        gamma_clif,
        leak_avg: leak_clif.scaled(1.0 / PULSES_PER_CLIFFORD),
        leak_clif,
        p2_inf: Estimate::new(res.params[1], errs[1]),
        p2_0: Estimate::new(res.params[2], errs[2]),
        residuals,
    })
}

/// Leakage fit on per-length mean `P₂` with bootstrap errors.
pub fn leakage_from_records(records: &[SequenceRecord], n_boot: usize, seed: u64) -> Result<LeakageFit, FitError> {
    let (m, p2) = length_means(records, |r| r.p2);
    let mut fit = leakage_fit(&m, &p2)?;
    let errs = bootstrap(
        records,
        |rs| {
            let (m, p2) = length_means(rs, |r| r.p2);
            leakage_fit(&m, &p2)
                .ok()
                .map(|f| vec![f.gamma_clif.value, f.p2_inf.value, f.p2_0.value, f.leak_clif.value])
        },
        n_boot,
        seed,
    );
    if errs.len() == 4 {
        fit.gamma_clif.err = errs[0];
        fit.p2_inf.err = errs[1];
        fit.p2_0.err = errs[2];
        fit.leak_clif.err = errs[3];
        fit.gamma_avg = fit.gamma_clif.scaled(1.0 / PULSES_PER_CLIFFORD);
        fit.leak_avg = fit.leak_clif.scaled(1.0 / PULSES_PER_CLIFFORD);
    }
    Ok(fit)
}

/// Binomially sampled leakage records from the rate equation, as a
/// synthetic-data oracle for the leakage fit.
pub fn synthetic_leakage_records(
    lengths: &[usize],
    n_sequences: usize,
    shots: u64,
    gamma: f64,
    p_inf: f64,
    p_0: f64,
    seed: u64,
) -> Vec<SequenceRecord> {
    let mut out = Vec::new();
    for &m in lengths {
        let e = (-gamma * m as f64).exp();
        let p = p_inf * (1.0 - e) + p_0 * e;
        for i in 0..n_sequences {
            let mut rng = seeds::stream(seed, "synthetic-leakage", &[m as u64, i as u64]);
            let k = Binomial::new(shots, p).expect("valid").sample(&mut rng);
            out.push(SequenceRecord {
                length: m,
                index: i,
                shots,
                successes: shots - k,
                p0_exact: 1.0 - p,
                p2: k as f64 / shots as f64,
                purity: 1.0,
                bloch: [0.0, 0.0, 1.0],
            });
        }
    }
    out
}

/// Records whose survival is sampled from `A·pᵐ + B`.
pub fn synthetic_decay_records(
    lengths: &[usize],
    n_sequences: usize,
    shots: u64,
    (a, p, b): (f64, f64, f64),
    seed: u64,
) -> Vec<SequenceRecord> {
    let mut out = Vec::new();
    for &m in lengths {
        let y = (a * p.powi(m as i32) + b).clamp(0.0, 1.0);
        for i in 0..n_sequences {
            let mut rng = seeds::stream(seed, "synthetic-decay", &[m as u64, i as u64]);
            let k = Binomial::new(shots, y).expect("valid").sample(&mut rng);
            out.push(SequenceRecord {
                length: m,
                index: i,
                shots,
                successes: k,
                p0_exact: y,
                p2: 0.0,
                purity: 1.0,
                bloch: [0.0, 0.0, 2.0 * y - 1.0],
            });
        }
    }
    out
}

/// Rate summary for reports.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct ErrorRates {
    pub r_clif: Option<Estimate>,
    pub r_avg: Option<Estimate>,
    pub r_gate: Vec<(InterleavedGate, Estimate)>,
    pub r_dec_clif: Option<Estimate>,
    pub r_dec_avg: Option<Estimate>,
    pub gamma_clif: Option<Estimate>,
    pub gamma_avg: Option<Estimate>,
}
