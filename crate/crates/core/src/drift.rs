//! Parameter fluctuations, slow drift schedules and the error budget.

use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::benchmark::{
    fit_decay, gen_rb_sequences, length_means, ChannelGateSet, DecayModel, Estimate, RBConfig, SequenceRecord,
    SequenceSimulator, PULSES_PER_CLIFFORD,
};
use crate::fit::{mean, std_dev};
use crate::seeds;
use crate::transmon::{fidelity_to_unitary, DeviceParams, PulseParams, Transmon, TransmonError};

#[derive(Debug, Error)]
pub enum DriftError {
    #[error("invalid fluctuation spec: {0}")]
    InvalidSpec(String),
    #[error("drift trajectory is unbounded or invalid: {0}")]
    Unbounded(String),
    #[error(transparent)]
    Transmon(#[from] TransmonError),
    #[error(transparent)]
    Bench(#[from] crate::benchmark::BenchError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FluctuationKind {
    /// Relative drive-amplitude fluctuation.
    Amplitude,
    /// Absolute qubit-frequency fluctuation, Hz.
    Frequency,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Correlation {
    PerGate,
    PerSequence,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FluctuationSpec {
    pub kind: FluctuationKind,
    pub sigma: f64,
    pub correlation: Correlation,
}

impl FluctuationSpec {
    pub fn amplitude(sigma: f64) -> Self {
        Self { kind: FluctuationKind::Amplitude, sigma, correlation: Correlation::PerGate }
    }

    pub fn frequency(sigma: f64) -> Self {
        Self { kind: FluctuationKind::Frequency, sigma, correlation: Correlation::PerGate }
    }

    pub fn with_correlation(self, correlation: Correlation) -> Self {
        Self { correlation, ..self }
    }

    pub fn validate(&self) -> Result<(), DriftError> {
        if !(self.sigma >= 0.0 && self.sigma.is_finite()) {
            return Err(DriftError::InvalidSpec(format!("sigma must be finite and non-negative, got {}", self.sigma)));
        }
        Ok(())
    }

    fn apply(&self, sim: &Transmon, value: f64) -> Transmon {
        match self.kind {
            FluctuationKind::Amplitude => Transmon { amp_scale: sim.amp_scale * value, ..sim.clone() },
            FluctuationKind::Frequency => Transmon { freq_offset: sim.freq_offset + value, ..sim.clone() },
        }
    }
}

/// Amplitude multiplier `~ N(1, σ²)` or frequency offset `~ N(0, σ²)`.
pub fn sample_fluctuation<R: Rng + ?Sized>(spec: &FluctuationSpec, rng: &mut R) -> f64 {
    let z: f64 = StandardNormal.sample(rng);
    match spec.kind {
        FluctuationKind::Amplitude => 1.0 + spec.sigma * z,
        FluctuationKind::Frequency => spec.sigma * z,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FluctuationResult {
    pub spec: FluctuationSpec,
    pub epg: Estimate,
    pub n_trials: usize,
}

/// Mean coherent error per X_{π/2} gate caused by a fluctuating parameter,
/// with decoherence disabled.
///
/// Per-gate mode averages `1 − F` of the fluctuated pulse against the
/// nominal one. Per-sequence mode holds one draw fixed over each RB
/// sequence, fits the exact mean survival and reports the excess EPG over
/// the unfluctuated gate set.
pub fn fluctuation_epg(
    spec: &FluctuationSpec,
    dev: &DeviceParams,
    pulse: &PulseParams,
    n_trials: usize,
    seed: u64,
) -> Result<FluctuationResult, DriftError> {
    spec.validate()?;
    if n_trials < 2 {
        return Err(DriftError::InvalidSpec("need at least two trials".into()));
    }
    let sim = Transmon::closed(dev.clone());
    let nominal = sim.pulse_unitary(pulse)?;
    let epg = match spec.correlation {
        Correlation::PerGate => {
            let errs: Vec<f64> = (0..n_trials)
                .into_par_iter()
                .map(|k| {
                    let mut rng = seeds::stream(seed, "fluctuation", &[k as u64]);
                    let v = sample_fluctuation(spec, &mut rng);
                    let prop = spec.apply(&sim, v).window_propagator(pulse, None)?;
                    Ok(1.0 - fidelity_to_unitary(&prop, &nominal))
                })
                .collect::<Result<_, TransmonError>>()?;
            Estimate::new(mean(&errs), std_dev(&errs) / (n_trials as f64).sqrt())
        }
        Correlation::PerSequence => per_sequence_epg(spec, &sim, pulse, n_trials, seed)?,
    };
    Ok(FluctuationResult { spec: *spec, epg, n_trials })
}

fn per_sequence_epg(
    spec: &FluctuationSpec,
    sim: &Transmon,
    pulse: &PulseParams,
    n_sequences: usize,
    seed: u64,
) -> Result<Estimate, DriftError> {
    let cfg = RBConfig { lengths: vec![1, 50, 100, 200, 400, 800], n_sequences, shots: 1, seed };
    let seqs = gen_rb_sequences(&cfg)?;
    let build = |value: Option<f64>| -> Result<ChannelGateSet, TransmonError> {
        let s = match value {
            Some(v) => spec.apply(sim, v),
            None => sim.clone(),
        };
        let g = s.gate_channel(pulse)?;
        let idle = s.idle_channel(pulse.duration())?;
        Ok(ChannelGateSet::from_gates(&g.channel, &idle.channel))
    };
    let survival = |sets: &dyn Fn(usize) -> usize, gate_sets: &[ChannelGateSet]| -> Result<Vec<SequenceRecord>, DriftError> {
        seqs.iter()
            .map(|s| {
                let o = gate_sets[sets(s.index)]
                    .outcome(&s.cliffords)
                    .map_err(|e| DriftError::Unbounded(e))?;
                Ok(SequenceRecord {
                    length: s.length,
                    index: s.index,
                    shots: 1,
                    successes: 0,
                    p0_exact: o.p0,
                    p2: o.p2,
                    purity: o.purity,
                    bloch: o.bloch,
                })
            })
            .collect()
    };
    // one draw per sequence index, shared across lengths
    let draws: Vec<f64> = (0..n_sequences)
        .map(|k| sample_fluctuation(spec, &mut seeds::stream(seed, "fluctuation-sequence", &[k as u64])))
        .collect();
    let fluct: Vec<ChannelGateSet> =
        draws.par_iter().map(|&v| build(Some(v))).collect::<Result<_, TransmonError>>()?;
    let base = vec![build(None)?];
    let epg_of = |records: Vec<SequenceRecord>| -> Result<f64, DriftError> {
        let (m, y) = length_means(&records, |r| r.p0_exact);
        match fit_decay(&m, &y, DecayModel::Exponential) {
            Ok(f) => Ok((1.0 - f.p) * 0.5 / PULSES_PER_CLIFFORD),
            Err(crate::benchmark::FitError::Degenerate) => Ok(0.0),
            Err(e) => Err(crate::benchmark::BenchError::from(e).into()),
        }
    };
    let with = epg_of(survival(&|i| i, &fluct)?)?;
    let without = epg_of(survival(&|_| 0, &base)?)?;
    // per-draw spread gives the Monte Carlo error of the mean
    let per_draw: Vec<f64> = draws
        .iter()
        .map(|&v| {
            let s = spec.apply(sim, v);
            let nominal = sim.pulse_unitary(pulse)?;
            Ok(1.0 - fidelity_to_unitary(&s.window_propagator(pulse, None)?, &nominal))
        })
        .collect::<Result<_, TransmonError>>()?;
    Ok(Estimate::new(with - without, std_dev(&per_draw) / (n_sequences as f64).sqrt()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DriftTarget {
    Amplitude,
    Frequency,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Trajectory {
    /// `A·sin(2π t / period + phase)` with `t` the run fraction.
    Sinusoidal { amplitude: f64, period: f64, #[serde(default)] phase: f64 },
    /// Gaussian random walk with `n_steps` equal steps over the run.
    RandomWalk { step: f64, n_steps: usize, seed: u64 },
}

/// Slow deterministic or random-walk trajectory of one parameter over the
/// wall-clock fraction `t ∈ [0, 1]` of a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DriftSchedule {
    pub target: DriftTarget,
    pub trajectory: Trajectory,
}

/// Instantaneous parameter offsets: fractional amplitude and frequency (Hz).
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct DriftSample {
    pub amplitude: f64,
    pub frequency: f64,
}

const MAX_AMPLITUDE_DRIFT: f64 = 0.5;
const MAX_FREQUENCY_DRIFT: f64 = 100e6;

impl DriftSchedule {
    pub fn sinusoidal(target: DriftTarget, amplitude: f64, period: f64) -> Self {
        Self { target, trajectory: Trajectory::Sinusoidal { amplitude, period, phase: 0.0 } }
    }

    pub fn random_walk(target: DriftTarget, step: f64, n_steps: usize, seed: u64) -> Self {
        Self { target, trajectory: Trajectory::RandomWalk { step, n_steps, seed } }
    }

    fn walk(step: f64, n_steps: usize, seed: u64) -> Vec<f64> {
        let mut rng = seeds::stream(seed, "drift-walk", &[]);
        let normal = Normal::new(0.0, step.abs()).expect("finite step");
        let mut path = Vec::with_capacity(n_steps + 1);
        let mut x = 0.0;
        path.push(x);
        for _ in 0..n_steps {
            x += normal.sample(&mut rng);
            path.push(x);
        }
        path
    }

    /// The full trajectory evaluated on `n` equally spaced points.
    pub fn values(&self, n: usize) -> Vec<f64> {
        let ts: Vec<f64> = (0..n).map(|k| (k as f64 + 0.5) / n as f64).collect();
        match &self.trajectory {
            Trajectory::Sinusoidal { .. } => ts.iter().map(|&t| self.value(t)).collect(),
            Trajectory::RandomWalk { step, n_steps, seed } => {
                let path = Self::walk(*step, *n_steps, *seed);
                ts.iter().map(|&t| path[((t * *n_steps as f64) as usize).min(*n_steps)]).collect()
            }
        }
    }

    pub fn value(&self, t: f64) -> f64 {
        match &self.trajectory {
            Trajectory::Sinusoidal { amplitude, period, phase } => {
                if *amplitude == 0.0 {
                    0.0
                } else {
                    amplitude * (2.0 * std::f64::consts::PI * t / period + phase).sin()
                }
            }
            Trajectory::RandomWalk { step, n_steps, seed } => {
                let path = Self::walk(*step, *n_steps, *seed);
                path[((t.clamp(0.0, 1.0) * *n_steps as f64) as usize).min(*n_steps)]
            }
        }
    }

    pub fn sample(&self, t: f64) -> DriftSample {
        let v = self.value(t);
        match self.target {
            DriftTarget::Amplitude => DriftSample { amplitude: v, frequency: 0.0 },
            DriftTarget::Frequency => DriftSample { amplitude: 0.0, frequency: v },
        }
    }

    pub fn validate(&self) -> Result<(), DriftError> {
        let bound = match self.target {
            DriftTarget::Amplitude => MAX_AMPLITUDE_DRIFT,
            DriftTarget::Frequency => MAX_FREQUENCY_DRIFT,
        };
        let peak = match &self.trajectory {
            Trajectory::Sinusoidal { amplitude, period, phase } => {
                if !(*period > 0.0 && period.is_finite() && phase.is_finite()) {
                    return Err(DriftError::Unbounded(format!("period {period}")));
                }
                amplitude.abs()
            }
            Trajectory::RandomWalk { step, n_steps, seed } => {
                if *n_steps == 0 || !step.is_finite() {
                    return Err(DriftError::Unbounded("random walk needs steps and a finite step size".into()));
                }
                Self::walk(*step, *n_steps, *seed).iter().fold(0.0f64, |m, v| m.max(v.abs()))
            }
        };
        if !(peak <= bound) {
            return Err(DriftError::Unbounded(format!("peak excursion {peak:e} exceeds {bound:e}")));
        }
        Ok(())
    }
}

/// Channel-level RB simulator whose gate set follows a drift schedule
/// indexed by sequence execution order.
pub struct DriftingGateSets {
    sets: Vec<ChannelGateSet>,
    order: std::collections::HashMap<Vec<usize>, usize>,
}

/// Builds one gate set per executed sequence, with the parameter value of the
/// schedule at that sequence's position in the run. The zero schedule yields
/// the undrifted gate set for every sequence.
pub fn inject_drift(
    schedule: &DriftSchedule,
    sim: &Transmon,
    pulse: &PulseParams,
    sequences: &[crate::benchmark::RbSequence],
) -> Result<DriftingGateSets, DriftError> {
    schedule.validate()?;
    let n = sequences.len();
    let values = schedule.values(n);
    let sets: Vec<ChannelGateSet> = values
        .par_iter()
        .map(|&v| {
            let s = match schedule.target {
                DriftTarget::Amplitude => Transmon { amp_scale: sim.amp_scale * (1.0 + v), ..sim.clone() },
                DriftTarget::Frequency => Transmon { freq_offset: sim.freq_offset + v, ..sim.clone() },
            };
            let g = s.gate_channel(pulse)?;
            let idle = s.idle_channel(pulse.duration())?;
            Ok(ChannelGateSet::from_gates(&g.channel, &idle.channel))
        })
        .collect::<Result<_, TransmonError>>()?;
    let order = sequences.iter().enumerate().map(|(k, s)| (s.cliffords.clone(), k)).collect();
    Ok(DriftingGateSets { sets, order })
}

impl SequenceSimulator for DriftingGateSets {
    fn outcome(&self, cliffords: &[usize]) -> Result<crate::benchmark::SequenceOutcome, String> {
        let k = *self.order.get(cliffords).ok_or("sequence not in the drift schedule")?;
        self.sets[k].outcome(cliffords)
    }
}

/// Reduced χ² of an exponential fit to per-sequence survival, with the
/// per-length binomial variance of the mean as weight.
pub fn reduced_chi2(records: &[SequenceRecord]) -> Result<f64, crate::benchmark::FitError> {
    let (m, y) = length_means(records, SequenceRecord::survival);
    let fit = fit_decay(&m, &y, DecayModel::Exponential)?;
    let mut chi2 = 0.0;
    for (k, &mk) in m.iter().enumerate() {
        let group: Vec<&SequenceRecord> = records.iter().filter(|r| r.length as f64 == mk).collect();
        let n_seq = group.len() as f64;
        let shots = group[0].shots as f64;
        let p = fit.eval(mk).clamp(1e-6, 1.0 - 1e-6);
        let var = p * (1.0 - p) / (shots * n_seq);
        chi2 += (y[k] - fit.eval(mk)).powi(2) / var;
    }
    Ok(chi2 / (m.len() as f64 - 3.0))
}

/// Components feeding the budget; any may be missing.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BudgetInputs {
    #[serde(default)]
    pub r_avg: Option<Estimate>,
    #[serde(default)]
    pub r_prime_avg: Option<Estimate>,
    #[serde(default)]
    pub r_dec_avg: Option<Estimate>,
    /// Leakage error per gate.
    #[serde(default)]
    pub gamma_avg: Option<Estimate>,
    #[serde(default)]
    pub coherence_limit: Option<f64>,
    #[serde(default)]
    pub fluct_amp_epg: Option<Estimate>,
    #[serde(default)]
    pub fluct_freq_epg: Option<Estimate>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ErrorBudget {
    pub r_avg: Option<Estimate>,
    pub r_prime_avg: Option<Estimate>,
    pub r_dec_avg: Option<Estimate>,
    pub gamma_avg: Option<Estimate>,
    pub coherence_limit: Option<f64>,
    pub fluct_amp_epg: Option<Estimate>,
    pub fluct_freq_epg: Option<Estimate>,
    /// `r_dec_avg / r'_avg`.
    pub incoherent_fraction: Option<f64>,
    /// `r'_avg − r_dec_avg − γ_avg`.
    pub residual_coherent: Option<Estimate>,
    /// Set when the residual is below minus the summed uncertainties.
    pub inconsistent: bool,
    pub gaps: Vec<String>,
}

pub fn assemble_budget(inputs: &BudgetInputs) -> ErrorBudget {
    let mut gaps = Vec::new();
    let mut note = |present: bool, name: &str| {
        if !present {
            gaps.push(name.to_string());
        }
    };
    note(inputs.r_avg.is_some(), "r_avg");
    note(inputs.r_prime_avg.is_some(), "r_prime_avg");
    note(inputs.r_dec_avg.is_some(), "r_dec_avg");
    note(inputs.gamma_avg.is_some(), "gamma_avg");
    note(inputs.coherence_limit.is_some(), "coherence_limit");
    note(inputs.fluct_amp_epg.is_some(), "fluct_amp_epg");
    note(inputs.fluct_freq_epg.is_some(), "fluct_freq_epg");

    let incoherent_fraction = match (inputs.r_dec_avg, inputs.r_prime_avg) {
        (Some(d), Some(p)) if p.value != 0.0 => Some(d.value / p.value),
        (Some(d), Some(_)) if d.value == 0.0 => Some(0.0),
        _ => None,
    };
    let residual_coherent = match (inputs.r_prime_avg, inputs.r_dec_avg, inputs.gamma_avg) {
        (Some(p), Some(d), Some(g)) => Some(Estimate::new(
            p.value - d.value - g.value,
            (p.err * p.err + d.err * d.err + g.err * g.err).sqrt(),
        )),
        _ => None,
    };
    let inconsistent = match (residual_coherent, inputs.r_prime_avg, inputs.r_dec_avg, inputs.gamma_avg) {
        (Some(r), Some(p), Some(d), Some(g)) => r.value < -(p.err + d.err + g.err),
        _ => false,
    };
    ErrorBudget {
        r_avg: inputs.r_avg,
        r_prime_avg: inputs.r_prime_avg,
        r_dec_avg: inputs.r_dec_avg,
        gamma_avg: inputs.gamma_avg,
        coherence_limit: inputs.coherence_limit,
        fluct_amp_epg: inputs.fluct_amp_epg,
        fluct_freq_epg: inputs.fluct_freq_epg,
        incoherent_fraction,
        residual_coherent,
        inconsistent,
        gaps,
    }
}

impl ErrorBudget {
    pub fn to_table(&self) -> String {
        let fmt = |e: Option<Estimate>| match e {
            Some(e) => format!("{:.3e} ± {:.1e}", e.value, e.err),
            None => "missing".to_string(),
        };
        let mut rows = vec![
            ("r_avg (RB)", fmt(self.r_avg)),
            ("r'_avg (PB run)", fmt(self.r_prime_avg)),
            ("r_dec_avg", fmt(self.r_dec_avg)),
            ("gamma_avg (leakage)", fmt(self.gamma_avg)),
            ("coherence limit", self.coherence_limit.map_or("missing".into(), |v| format!("{v:.3e}"))),
            ("amplitude fluctuation", fmt(self.fluct_amp_epg)),
            ("frequency fluctuation", fmt(self.fluct_freq_epg)),
            ("incoherent fraction", self.incoherent_fraction.map_or("missing".into(), |v| format!("{:.2}%", 100.0 * v))),
            ("residual coherent", fmt(self.residual_coherent)),
        ];
        if self.inconsistent {
            rows.push(("warning", "residual below minus summed uncertainties".into()));
        }
        let mut out = String::new();
        for (k, v) in rows {
            out.push_str(&format!("{k:<24}{v}\n"));
        }
        if !self.gaps.is_empty() {
            out.push_str(&format!("gaps: {}\n", self.gaps.join(", ")));
        }
        out
    }
}
