//! Gate set tomography for the {I, X_{π/2}, Y_{π/2}} gate set.
//!
//! Circuits are `prep fiducial · germ^r · measure fiducial` with binary
//! outcomes. The engine seeds with linear inversion on the Gram frame, then
//! maximizes the binomial likelihood by damped Fisher scoring over either a
//! trace-preserving or a Kraus (CPTP) parameterization.

use std::collections::HashMap;
use std::f64::consts::FRAC_PI_2;
use std::fmt;

use nalgebra::{DMatrix, DVector, Matrix2, Matrix4, SMatrix, Vector4};
use rand_distr::{Binomial, Distribution};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::benchmark::{
    gen_rb_sequences, run_sequences, AssignmentMatrix, BenchError, Estimate, RBConfig, RbResult, SequenceOutcome,
    SequenceSimulator,
};
use crate::clifford::{clifford_group, GROUP_ORDER, IDENTITY};
use crate::drift::{DriftSample, DriftSchedule};
use crate::linalg::{c, C64};
use crate::qop::{
    from_pauli_vector, pauli_basis, rx, ry, rz, to_pauli_vector, Mat2, MeasurementEffect, Ptm, QopError, QubitChannel,
};
use crate::seeds;
use crate::transmon::{PulseParams, Transmon, TransmonError};

/// Non-gauge parameters of a TP qubit gate set with three gates:
/// `3·12 + 3 + 4 − 12`.
pub const MODEL_PARAMS: usize = 31;
pub const DEFAULT_PASSES: usize = 1;

#[derive(Debug, Error)]
pub enum GstError {
    #[error("invalid design: {0}")]
    InvalidDesign(String),
    #[error("fiducials are not informationally complete (singular values {singular_values:?})")]
    NotInformationallyComplete { singular_values: Vec<f64> },
    #[error("dataset does not match the design: {0}")]
    Data(String),
    #[error("model error: {0}")]
    Model(String),
    #[error("design too small: {dof} degrees of freedom")]
    DesignTooSmall { dof: i64 },
    #[error("gauge optimization failed: {0}")]
    Gauge(String),
    #[error("parse error: {0}")]
    Parse(String),
    #[error(transparent)]
    Transmon(#[from] TransmonError),
    #[error(transparent)]
    Qop(#[from] QopError),
    #[error(transparent)]
    Bench(#[from] BenchError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum GateLabel {
    Gi,
    Gx,
    Gy,
}

impl GateLabel {
    pub const ALL: [GateLabel; 3] = [GateLabel::Gi, GateLabel::Gx, GateLabel::Gy];

    fn index(self) -> usize {
        self as usize
    }

    pub fn target_unitary(self) -> Mat2 {
        match self {
            GateLabel::Gi => Mat2::identity(),
            GateLabel::Gx => rx(FRAC_PI_2),
            GateLabel::Gy => ry(FRAC_PI_2),
        }
    }
}

impl fmt::Display for GateLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            GateLabel::Gi => "Gi",
            GateLabel::Gx => "Gx",
            GateLabel::Gy => "Gy",
        })
    }
}

impl std::str::FromStr for GateLabel {
    type Err = GstError;
    fn from_str(s: &str) -> Result<Self, GstError> {
        match s.trim() {
            "Gi" => Ok(GateLabel::Gi),
            "Gx" => Ok(GateLabel::Gx),
            "Gy" => Ok(GateLabel::Gy),
            other => Err(GstError::Parse(format!("unknown gate label {other:?}"))),
        }
    }
}

pub type GateString = Vec<GateLabel>;

/// `Gx:Gx:Gy`; the empty string is written `{}`.
pub fn format_string(s: &[GateLabel]) -> String {
    if s.is_empty() {
        return "{}".to_string();
    }
    s.iter().map(|g| g.to_string()).collect::<Vec<_>>().join(":")
}

pub fn parse_string(s: &str) -> Result<GateString, GstError> {
    let s = s.trim();
    if s.is_empty() || s == "{}" {
        return Ok(Vec::new());
    }
    s.split(':').map(str::parse).collect()
}

pub fn default_fiducials() -> Vec<GateString> {
    use GateLabel::*;
    vec![vec![], vec![Gx], vec![Gy], vec![Gx, Gx, Gx], vec![Gy, Gy, Gy], vec![Gx, Gx]]
}

pub fn default_germs() -> Vec<GateString> {
    use GateLabel::*;
    vec![
        vec![Gi],
        vec![Gx],
        vec![Gy],
        vec![Gx, Gy],
        vec![Gx, Gx, Gy],
        vec![Gx, Gy, Gy],
        vec![Gx, Gy, Gi],
        vec![Gx, Gi, Gy],
        vec![Gx, Gi, Gi],
        vec![Gy, Gi, Gi],
        vec![Gx, Gy, Gy, Gi],
        vec![Gx, Gx, Gy, Gx, Gy, Gy],
    ]
}

/// `prep · germ^reps · meas`; `germ == None` marks a Gram circuit.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Circuit {
    pub prep: usize,
    pub germ: Option<usize>,
    pub reps: usize,
    pub meas: usize,
    /// Smallest depth at which this gate string appears (0 for Gram circuits).
    pub depth: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GSTDesign {
    pub fiducials: Vec<GateString>,
    pub germs: Vec<GateString>,
    pub depths: Vec<usize>,
    pub shots: u64,
    pub circuits: Vec<Circuit>,
}

pub fn build_design(max_depth: usize, shots: u64) -> Result<GSTDesign, GstError> {
    build_design_with(default_fiducials(), default_germs(), max_depth, shots)
}

/// Gram circuits first, then every (germ, depth, prep, meas) combination;
/// later duplicates of an identical gate string are dropped.
pub fn build_design_with(
    fiducials: Vec<GateString>,
    germs: Vec<GateString>,
    max_depth: usize,
    shots: u64,
) -> Result<GSTDesign, GstError> {
    if max_depth == 0 || !max_depth.is_power_of_two() {
        return Err(GstError::InvalidDesign(format!("max depth {max_depth} is not a power of two")));
    }
    if fiducials.is_empty() || germs.is_empty() || germs.iter().any(|g| g.is_empty()) {
        return Err(GstError::InvalidDesign("fiducials and germs must be non-empty".into()));
    }
    if shots == 0 {
        return Err(GstError::InvalidDesign("shots must be positive".into()));
    }
    let depths: Vec<usize> = (0..).map(|k| 1usize << k).take_while(|&l| l <= max_depth).collect();
    let mut design = GSTDesign { fiducials, germs, depths: depths.clone(), shots, circuits: Vec::new() };
    let mut seen: HashMap<GateString, ()> = HashMap::new();
    let mut push = |d: &mut GSTDesign, c: Circuit| {
        let s = d.circuit_string(&c);
        if seen.insert(s, ()).is_none() {
            d.circuits.push(c);
        }
    };
    let nf = design.fiducials.len();
    for i in 0..nf {
        for j in 0..nf {
            push(&mut design, Circuit { prep: i, germ: None, reps: 0, meas: j, depth: 0 });
        }
    }
    for &l in &depths {
        for g in 0..design.germs.len() {
            let reps = (l / design.germs[g].len()).max(1);
            for i in 0..nf {
                for j in 0..nf {
                    push(&mut design, Circuit { prep: i, germ: Some(g), reps, meas: j, depth: l });
                }
            }
        }
    }
    Ok(design)
}

impl GSTDesign {
    /// Gate labels in time order.
    pub fn circuit_string(&self, c: &Circuit) -> GateString {
        let mut s = self.fiducials[c.prep].clone();
        if let Some(g) = c.germ {
            for _ in 0..c.reps {
                s.extend_from_slice(&self.germs[g]);
            }
        }
        s.extend_from_slice(&self.fiducials[c.meas]);
        s
    }

    fn find(&self, prep: usize, germ: Option<usize>, reps: usize, meas: usize) -> Option<usize> {
        let target = self.circuit_string(&Circuit { prep, germ, reps, meas, depth: 0 });
        self.circuits.iter().position(|c| self.circuit_string(c) == target)
    }

    /// Index of the circuit whose string is the single gate `g` between
    /// fiducials `i` and `j`.
    fn lgst_index(&self, i: usize, g: GateLabel, j: usize) -> Option<usize> {
        let germ = self.germs.iter().position(|s| s.as_slice() == [g])?;
        self.find(i, Some(germ), 1, j)
    }

    /// One circuit per line, labels separated by ':'.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for c in &self.circuits {
            out.push_str(&format_string(&self.circuit_string(c)));
            out.push('\n');
        }
        out
    }

    /// Distinct depths present, including 0 for the Gram block.
    pub fn depth_groups(&self) -> Vec<usize> {
        let mut d: Vec<usize> = self.circuits.iter().map(|c| c.depth).collect();
        d.sort_unstable();
        d.dedup();
        d
    }
}

/// Gate set in Pauli-transfer form with SPAM as Pauli vectors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GateSet {
    /// Indexed by `GateLabel`: Gi, Gx, Gy.
    pub gates: [Ptm; 3],
    pub rho: Vector4<f64>,
    pub effect: Vector4<f64>,
}

impl GateSet {
    pub fn ideal() -> Self {
        let gates = GateLabel::ALL.map(|g| QubitChannel::from_unitary(&g.target_unitary()).ptm);
        let ground = to_pauli_vector(&crate::qop::ket_projector2(c(1.0, 0.0), c(0.0, 0.0)));
        Self { gates, rho: ground, effect: ground }
    }

    /// Each ideal gate over-rotated about its own axis by `over_rotation`
    /// and followed by depolarization `q` (the idle gets depolarization only).
    pub fn noisy(over_rotation: f64, q: f64) -> Self {
        let dep = QubitChannel::depolarizing(q).ptm;
        let mut gs = Self::ideal();
        gs.gates[GateLabel::Gi.index()] = dep;
        gs.gates[GateLabel::Gx.index()] = dep * QubitChannel::from_unitary(&rx(FRAC_PI_2 + over_rotation)).ptm;
        gs.gates[GateLabel::Gy.index()] = dep * QubitChannel::from_unitary(&ry(FRAC_PI_2 + over_rotation)).ptm;
        gs
    }

    /// Replaces SPAM by a state with excited population `prep_error` and a
    /// ground projector read out correctly with probability `1 − meas_error`.
    pub fn with_spam(mut self, prep_error: f64, meas_error: f64) -> Self {
        let s = std::f64::consts::FRAC_1_SQRT_2;
        self.rho = Vector4::new(s, 0.0, 0.0, s * (1.0 - 2.0 * prep_error));
        // E = (1−ε)|0⟩⟨0| + ε|1⟩⟨1|
        self.effect = Vector4::new(s, 0.0, 0.0, s * (1.0 - 2.0 * meas_error));
        self
    }

    pub fn from_channels(idle: &QubitChannel, x: &QubitChannel) -> Self {
        let zp = QubitChannel::from_unitary(&rz(FRAC_PI_2)).ptm;
        let zm = QubitChannel::from_unitary(&rz(-FRAC_PI_2)).ptm;
        let mut gs = Self::ideal();
        gs.gates[0] = idle.ptm;
        gs.gates[1] = x.ptm;
        gs.gates[2] = zp * x.ptm * zm;
        gs
    }

    pub fn gate(&self, g: GateLabel) -> &Ptm {
        &self.gates[g.index()]
    }

    pub fn string_ptm(&self, s: &[GateLabel]) -> Ptm {
        s.iter().fold(Ptm::identity(), |acc, g| self.gate(*g) * acc)
    }

    pub fn probability(&self, s: &[GateLabel]) -> f64 {
        self.effect.dot(&(self.string_ptm(s) * self.rho))
    }

    /// `G → M G M⁻¹`, `ρ → Mρ`, `E → E M⁻¹`.
    pub fn gauge_transform(&self, m: &Ptm) -> Result<Self, GstError> {
        let mi = m.try_inverse().ok_or_else(|| GstError::Gauge("singular gauge matrix".into()))?;
        Ok(Self {
            gates: self.gates.map(|g| m * g * mi),
            rho: m * self.rho,
            effect: mi.transpose() * self.effect,
        })
    }

    pub fn rho_matrix(&self) -> Mat2 {
        from_pauli_vector(&self.rho)
    }

    pub fn measurement_effect(&self) -> Result<MeasurementEffect, QopError> {
        MeasurementEffect::new(from_pauli_vector(&self.effect))
    }

    pub fn channels(&self) -> [QubitChannel; 3] {
        self.gates.map(QubitChannel::from_ptm)
    }

    /// Largest per-gate PTM Frobenius distance.
    pub fn max_gate_distance(&self, other: &GateSet) -> f64 {
        (0..3).map(|k| (self.gates[k] - other.gates[k]).norm()).fold(0.0, f64::max)
    }

    fn apply_drift(&self, sample: &DriftSample, gate_time: f64) -> Self {
        if sample.amplitude == 0.0 && sample.frequency == 0.0 {
            return self.clone();
        }
        let mut out = self.clone();
        let theta = FRAC_PI_2 * sample.amplitude;
        out.gates[1] = QubitChannel::from_unitary(&rx(theta)).ptm * out.gates[1];
        out.gates[2] = QubitChannel::from_unitary(&ry(theta)).ptm * out.gates[2];
        if sample.frequency != 0.0 {
            let z = QubitChannel::from_unitary(&rz(2.0 * std::f64::consts::PI * sample.frequency * gate_time)).ptm;
            for g in &mut out.gates {
                *g = z * *g;
            }
        }
        out
    }
}

/// Anything that yields a gate set for a given drift sample.
pub trait GateSetSource: Sync {
    fn gate_set(&self, sample: &DriftSample) -> Result<GateSet, GstError>;
}

/// A fixed gate set. Amplitude drift over-rotates Gx and Gy by the
/// fractional amount; frequency drift adds `Rz(2π·δf·t_gate)` after each gate.
#[derive(Debug, Clone)]
pub struct StaticSource {
    pub gate_set: GateSet,
    pub gate_time: f64,
}

impl StaticSource {
    pub fn new(gate_set: GateSet) -> Self {
        Self { gate_set, gate_time: 20e-9 }
    }
}

impl GateSetSource for StaticSource {
    fn gate_set(&self, sample: &DriftSample) -> Result<GateSet, GstError> {
        Ok(self.gate_set.apply_drift(sample, self.gate_time))
    }
}

/// Pulse-level source: Gx is the simulated pulse window, Gy the same pulse in
/// a frame shifted by π/2, Gi an undriven window of equal length.
#[derive(Debug, Clone)]
pub struct TransmonSource {
    pub sim: Transmon,
    pub pulse: PulseParams,
    pub prep_error: f64,
    pub meas_error: f64,
}

impl GateSetSource for TransmonSource {
    fn gate_set(&self, sample: &DriftSample) -> Result<GateSet, GstError> {
        let sim = Transmon {
            amp_scale: self.sim.amp_scale * (1.0 + sample.amplitude),
            freq_offset: self.sim.freq_offset + sample.frequency,
            ..self.sim.clone()
        };
        let x = sim.gate_channel(&self.pulse)?;
        let idle = sim.idle_channel(self.pulse.duration())?;
        Ok(GateSet::from_channels(&idle.channel, &x.channel).with_spam(self.prep_error, self.meas_error))
    }
}

/// Ground-outcome counts aligned with `design.circuits`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GstDataset {
    pub shots: Vec<u64>,
    pub zeros: Vec<u64>,
}

impl GstDataset {
    pub fn frequencies(&self) -> Vec<f64> {
        self.zeros.iter().zip(&self.shots).map(|(&k, &n)| k as f64 / n as f64).collect()
    }

    pub fn validate(&self, design: &GSTDesign) -> Result<(), GstError> {
        if self.shots.len() != design.circuits.len() || self.zeros.len() != design.circuits.len() {
            return Err(GstError::Data(format!(
                "{} circuits in design, {} rows in dataset",
                design.circuits.len(),
                self.shots.len()
            )));
        }
        if self.zeros.iter().zip(&self.shots).any(|(k, n)| k > n || *n == 0) {
            return Err(GstError::Data("counts exceed shots or zero shots".into()));
        }
        Ok(())
    }

    pub fn to_csv(&self, design: &GSTDesign) -> String {
        let mut out = String::from("circuit,depth,shots,count0\n");
        for (k, c) in design.circuits.iter().enumerate() {
            out.push_str(&format!(
                "{},{},{},{}\n",
                format_string(&design.circuit_string(c)),
                c.depth,
                self.shots[k],
                self.zeros[k]
            ));
        }
        out
    }

    pub fn from_csv(design: &GSTDesign, text: &str) -> Result<Self, GstError> {
        let mut lines = text.lines();
        if lines.next().map(str::trim) != Some("circuit,depth,shots,count0") {
            return Err(GstError::Parse("missing header".into()));
        }
        let index: HashMap<GateString, usize> =
            design.circuits.iter().enumerate().map(|(k, c)| (design.circuit_string(c), k)).collect();
        let mut shots = vec![0; design.circuits.len()];
        let mut zeros = vec![0; design.circuits.len()];
        let mut filled = vec![false; design.circuits.len()];
        for line in lines.filter(|l| !l.trim().is_empty()) {
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 4 {
                return Err(GstError::Parse(format!("bad row {line:?}")));
            }
            let s = parse_string(f[0])?;
            let k = *index.get(&s).ok_or_else(|| GstError::Data(format!("circuit {} not in design", f[0])))?;
            shots[k] = f[2].trim().parse().map_err(|e| GstError::Parse(format!("{e}")))?;
            zeros[k] = f[3].trim().parse().map_err(|e| GstError::Parse(format!("{e}")))?;
            filled[k] = true;
        }
        if filled.iter().any(|f| !f) {
            return Err(GstError::Data("dataset is missing circuits".into()));
        }
        let data = Self { shots, zeros };
        data.validate(design)?;
        Ok(data)
    }
}

/// Cached evaluator of every circuit probability of a design.
struct Predictor {
    pairs: Vec<(usize, usize)>,
    rows: Vec<(usize, Option<usize>, usize)>,
}

impl Predictor {
    fn new(design: &GSTDesign) -> Self {
        let mut pairs: Vec<(usize, usize)> = Vec::new();
        let mut lookup: HashMap<(usize, usize), usize> = HashMap::new();
        let rows = design
            .circuits
            .iter()
            .map(|c| {
                let pair = c.germ.map(|g| {
                    *lookup.entry((g, c.reps)).or_insert_with(|| {
                        pairs.push((g, c.reps));
                        pairs.len() - 1
                    })
                });
                (c.prep, pair, c.meas)
            })
            .collect();
        Self { pairs, rows }
    }

    fn probabilities(&self, design: &GSTDesign, gs: &GateSet) -> Vec<f64> {
        let preps: Vec<Vector4<f64>> = design.fiducials.iter().map(|f| gs.string_ptm(f) * gs.rho).collect();
        let meas: Vec<Vector4<f64>> =
            design.fiducials.iter().map(|f| gs.string_ptm(f).transpose() * gs.effect).collect();
        let germ_ptms: Vec<Ptm> = design.germs.iter().map(|g| gs.string_ptm(g)).collect();
        let powers: Vec<Ptm> = self.pairs.iter().map(|&(g, r)| matrix_power(&germ_ptms[g], r)).collect();
        self.rows
            .iter()
            .map(|&(i, pair, j)| match pair {
                Some(k) => meas[j].dot(&(powers[k] * preps[i])),
                None => meas[j].dot(&preps[i]),
            })
            .collect()
    }
}

fn matrix_power(m: &Ptm, mut n: usize) -> Ptm {
    let mut base = *m;
    let mut acc = Ptm::identity();
    while n > 0 {
        if n & 1 == 1 {
            acc = base * acc;
        }
        base = base * base;
        n >>= 1;
    }
    acc
}

/// Exact circuit probabilities of a gate set.
pub fn circuit_probabilities(design: &GSTDesign, gs: &GateSet) -> Vec<f64> {
    Predictor::new(design).probabilities(design, gs)
}

/// Acquisition plan: each circuit's shots are split over `passes` sweeps of
/// the full circuit list, and drift is evaluated at the wall-clock fraction
/// of each batch.
#[derive(Debug, Clone, Copy)]
pub struct Acquisition<'a> {
    pub passes: usize,
    pub drift: Option<&'a DriftSchedule>,
    /// Drift is evaluated on this many time bins.
    pub time_bins: usize,
    pub order: ExecutionOrder,
}

impl Default for Acquisition<'_> {
    fn default() -> Self {
        Self { passes: DEFAULT_PASSES, drift: None, time_bins: 256, order: ExecutionOrder::Shuffled }
    }
}

/// Wall-clock order of circuits within a pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExecutionOrder {
    /// As listed in the design (depth ascending).
    Design,
    /// A seed-derived permutation, fixed across passes.
    Shuffled,
}

fn execution_slots(n: usize, order: ExecutionOrder, seed: u64) -> Vec<usize> {
    let mut perm: Vec<usize> = (0..n).collect();
    if order == ExecutionOrder::Shuffled {
        use rand::seq::SliceRandom;
        perm.shuffle(&mut seeds::stream(seed, "gst-order", &[]));
    }
    // slot[k] = position of circuit k in the run
    let mut slot = vec![0; n];
    for (pos, &k) in perm.iter().enumerate() {
        slot[k] = pos;
    }
    slot
}

fn check_probability(p: f64) -> Result<f64, GstError> {
    if !(-1e-9..=1.0 + 1e-9).contains(&p) || !p.is_finite() {
        return Err(GstError::Model(format!("circuit probability {p} outside [0, 1]")));
    }
    Ok(p.clamp(0.0, 1.0))
}

pub fn simulate_dataset<S: GateSetSource + ?Sized>(
    design: &GSTDesign,
    source: &S,
    seed: u64,
    acq: &Acquisition<'_>,
) -> Result<GstDataset, GstError> {
    if acq.passes == 0 || acq.time_bins == 0 {
        return Err(GstError::InvalidDesign("passes and time bins must be positive".into()));
    }
    if let Some(d) = acq.drift {
        d.validate().map_err(|e| GstError::Model(e.to_string()))?;
    }
    let n = design.circuits.len();
    let predictor = Predictor::new(design);
    // probability tables per time bin (one table without drift)
    let bins = if acq.drift.is_some() { acq.time_bins } else { 1 };
    let tables: Vec<Vec<f64>> = (0..bins)
        .into_par_iter()
        .map(|b| {
            let t = (b as f64 + 0.5) / bins as f64;
            let sample = acq.drift.map(|d| d.sample(t)).unwrap_or_default();
            let gs = source.gate_set(&sample)?;
            predictor.probabilities(design, &gs).into_iter().map(check_probability).collect()
        })
        .collect::<Result<_, GstError>>()?;
    let passes = acq.passes as u64;
    let slot = execution_slots(n, acq.order, seed);
    let zeros: Vec<u64> = (0..n)
        .into_par_iter()
        .map(|k| {
            let shots = design.shots;
            let mut total = 0;
            for pass in 0..passes {
                let batch = shots / passes + u64::from(pass < shots % passes);
                if batch == 0 {
                    continue;
                }
                let t = (pass as f64 + (slot[k] as f64 + 0.5) / n as f64) / passes as f64;
                let bin = ((t * bins as f64) as usize).min(bins - 1);
                let p = tables[bin][k];
                let mut rng = seeds::stream(seed, "gst-shots", &[k as u64, pass]);
                total += Binomial::new(batch, p).expect("p in [0, 1]").sample(&mut rng);
            }
            total
        })
        .collect();
    Ok(GstDataset { shots: vec![design.shots; n], zeros })
}

/// Singular-value report of the fiducial-pair probability matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct GramReport {
    /// Rows: measurement fiducial, columns: preparation fiducial.
    pub matrix: DMatrix<f64>,
    pub singular_values: Vec<f64>,
    pub rank: usize,
    pub condition: f64,
}

impl GramReport {
    pub fn complete(&self) -> bool {
        self.rank >= 4
    }
}

fn gram_from_frequencies(design: &GSTDesign, f: &[f64]) -> Result<DMatrix<f64>, GstError> {
    let nf = design.fiducials.len();
    let mut g = DMatrix::zeros(nf, nf);
    for j in 0..nf {
        for i in 0..nf {
            let k = design
                .find(i, None, 0, j)
                .ok_or_else(|| GstError::Data(format!("missing Gram circuit ({i}, {j})")))?;
            g[(j, i)] = f[k];
        }
    }
    Ok(g)
}

/// Singular values above `noise` (the expected shot-noise level of a
/// singular value) count toward the rank.
fn gram_report(matrix: DMatrix<f64>, shots: u64) -> GramReport {
    let sv = matrix.clone().svd(false, false).singular_values;
    let mut singular_values: Vec<f64> = sv.iter().cloned().collect();
    singular_values.sort_by(|a, b| b.total_cmp(a));
    let n = matrix.nrows() as f64;
    let noise = (3.0 * n.sqrt() * 0.5 / (shots as f64).sqrt()).max(1e-9 * singular_values[0]);
    let rank = singular_values.iter().filter(|&&s| s > noise).count();
    let condition = if rank >= 4 { singular_values[0] / singular_values[3] } else { f64::INFINITY };
    GramReport { matrix, singular_values, rank, condition }
}

pub fn gram_matrix(design: &GSTDesign, data: &GstDataset) -> Result<GramReport, GstError> {
    data.validate(design)?;
    Ok(gram_report(gram_from_frequencies(design, &data.frequencies())?, design.shots))
}

/// Linear-inversion estimate, brought into the target gauge.
pub fn lgst(design: &GSTDesign, data: &GstDataset) -> Result<GateSet, GstError> {
    data.validate(design)?;
    lgst_from_frequencies(design, &data.frequencies(), design.shots)
}

fn lgst_from_frequencies(design: &GSTDesign, f: &[f64], shots: u64) -> Result<GateSet, GstError> {
    let gram = gram_report(gram_from_frequencies(design, f)?, shots);
    if !gram.complete() {
        return Err(GstError::NotInformationallyComplete { singular_values: gram.singular_values });
    }
    let empty = design
        .fiducials
        .iter()
        .position(|s| s.is_empty())
        .ok_or_else(|| GstError::InvalidDesign("the null fiducial is required".into()))?;
    let nf = design.fiducials.len();
    let svd = gram.matrix.clone().svd(true, true);
    let (u, vt) = (svd.u.expect("requested"), svd.v_t.expect("requested"));
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]));
    let keep = &order[..4];
    let u4 = DMatrix::from_fn(nf, 4, |r, k| u[(r, keep[k])]);
    let v4 = DMatrix::from_fn(nf, 4, |r, k| vt[(keep[k], r)]);
    let s_inv = DMatrix::from_fn(4, 4, |a, b| if a == b { 1.0 / svd.singular_values[keep[a]] } else { 0.0 });

    let mut gates = [Ptm::zeros(); 3];
    for g in GateLabel::ALL {
        let mut p = DMatrix::zeros(nf, nf);
        for j in 0..nf {
            for i in 0..nf {
                let k = design.lgst_index(i, g, j).ok_or_else(|| {
                    GstError::InvalidDesign(format!("design lacks the single-gate germ {g}"))
                })?;
                p[(j, i)] = f[k];
            }
        }
        let est = u4.transpose() * p * &v4 * &s_inv;
        gates[g.index()] = Ptm::from_fn(|a, b| est[(a, b)]);
    }
    let p_rho = gram.matrix.column(empty).into_owned();
    let q_e = gram.matrix.row(empty).into_owned();
    let rho = u4.transpose() * p_rho;
    let e = (q_e * &v4 * &s_inv).transpose();
    let raw = GateSet { gates, rho: Vector4::from_fn(|a, _| rho[a]), effect: Vector4::from_fn(|a, _| e[a]) };

    // initial gauge from the target preparation frame
    let target = GateSet::ideal();
    let b_target = DMatrix::from_fn(4, nf, |a, i| (target.string_ptm(&design.fiducials[i]) * target.rho)[a]);
    let b_est = DMatrix::from_fn(4, nf, |a, i| (raw.string_ptm(&design.fiducials[i]) * raw.rho)[a]);
    let pinv = b_target
        .pseudo_inverse(1e-12)
        .map_err(|e| GstError::Gauge(e.to_string()))?;
    let s0 = b_est * pinv;
    let s0 = Ptm::from_fn(|a, b| s0[(a, b)]);
    let m0 = s0.try_inverse().ok_or_else(|| GstError::Gauge("singular LGST frame".into()))?;
    let seeded = raw.gauge_transform(&m0)?;
    Ok(gauge_optimize(&seeded, &target, &GaugeOptions { tp_only: false, ..Default::default() })?.0)
}

#[derive(Debug, Clone, Copy)]
pub struct GaugeOptions {
    pub gate_weight: f64,
    pub spam_weight: f64,
    /// Restrict to gauge matrices with first row (1, 0, 0, 0).
    pub tp_only: bool,
    pub max_condition: f64,
}

impl Default for GaugeOptions {
    fn default() -> Self {
        Self { gate_weight: 1.0, spam_weight: 0.1, tp_only: true, max_condition: 1e6 }
    }
}

fn gauge_matrix(x: &DVector<f64>, tp_only: bool) -> Ptm {
    let mut m = Ptm::identity();
    if tp_only {
        for k in 0..12 {
            m[(1 + k / 4, k % 4)] += x[k];
        }
    } else {
        for k in 0..16 {
            m[(k / 4, k % 4)] += x[k];
        }
    }
    m
}

fn condition_number(m: &Ptm) -> f64 {
    let sv = m.svd(false, false).singular_values;
    let max = sv.max();
    let min = sv.min();
    if min <= 0.0 { f64::INFINITY } else { max / min }
}

/// Weighted Frobenius alignment of `estimate` to `target` over the gauge
/// group. Returns the transformed set and the gauge matrix.
pub fn gauge_optimize(estimate: &GateSet, target: &GateSet, opts: &GaugeOptions) -> Result<(GateSet, Ptm), GstError> {
    let np = if opts.tp_only { 12 } else { 16 };
    let wg = opts.gate_weight.sqrt();
    let ws = opts.spam_weight.sqrt();
    let residual = |x: &DVector<f64>| -> DVector<f64> {
        let m = gauge_matrix(x, opts.tp_only);
        let n = 3 * 16 + 8;
        let Some(mi) = m.try_inverse() else { return DVector::from_element(n, 1e6) };
        if condition_number(&m) > opts.max_condition {
            return DVector::from_element(n, 1e6);
        }
        let mut r = DVector::zeros(n);
        for g in 0..3 {
            let d = m * estimate.gates[g] * mi - target.gates[g];
            for k in 0..16 {
                r[16 * g + k] = wg * d[k];
            }
        }
        let dr = m * estimate.rho - target.rho;
        let de = mi.transpose() * estimate.effect - target.effect;
        for k in 0..4 {
            r[48 + k] = ws * dr[k];
            r[52 + k] = ws * de[k];
        }
        r
    };
    let jac = |x: &DVector<f64>| numeric_jacobian(&residual, x, 1e-7, false);
    let lower = vec![f64::NEG_INFINITY; np];
    let upper = vec![f64::INFINITY; np];
    let res = crate::fit::levenberg_marquardt(
        residual,
        jac,
        DVector::zeros(np),
        &lower,
        &upper,
        crate::fit::LmOptions { max_iter: 200, tol: 1e-15 },
    );
    let m = gauge_matrix(&res.params, opts.tp_only);
    if condition_number(&m) > opts.max_condition {
        return Err(GstError::Gauge(format!("gauge condition number {:.3e}", condition_number(&m))));
    }
    Ok((estimate.gauge_transform(&m)?, m))
}

/// Central-difference Jacobian, columns evaluated in parallel when asked.
fn numeric_jacobian<F>(f: &F, x: &DVector<f64>, h: f64, parallel: bool) -> DMatrix<f64>
where
    F: Fn(&DVector<f64>) -> DVector<f64> + Sync,
{
    let column = |k: usize| {
        let step = h * x[k].abs().max(1.0);
        let mut xp = x.clone();
        let mut xm = x.clone();
        xp[k] += step;
        xm[k] -= step;
        (f(&xp) - f(&xm)) / (2.0 * step)
    };
    let cols: Vec<DVector<f64>> =
        if parallel { (0..x.len()).into_par_iter().map(column).collect() } else { (0..x.len()).map(column).collect() };
    DMatrix::from_columns(&cols)
}

/// Binomial log-likelihood `Σ n₀ ln p + n₁ ln(1 − p)`.
pub fn log_likelihood(probs: &[f64], data: &GstDataset) -> f64 {
    probs
        .iter()
        .zip(data.zeros.iter().zip(&data.shots))
        .map(|(&p, (&k, &n))| {
            let p = p.clamp(1e-12, 1.0 - 1e-12);
            let (k, n) = (k as f64, n as f64);
            xlogy(k, p) + xlogy(n - k, 1.0 - p)
        })
        .sum()
}

fn xlogy(x: f64, y: f64) -> f64 {
    if x == 0.0 { 0.0 } else { x * y.ln() }
}

/// Saturated-model log-likelihood with `0·log 0 = 0`.
pub fn max_log_likelihood(data: &GstDataset) -> f64 {
    let f = data.frequencies();
    log_likelihood_terms_saturated(&f, data).iter().sum()
}

fn log_likelihood_terms_saturated(f: &[f64], data: &GstDataset) -> Vec<f64> {
    f.iter()
        .zip(data.zeros.iter().zip(&data.shots))
        .map(|(&f, (&k, &n))| {
            let (k, n) = (k as f64, n as f64);
            xlogy(k, f) + xlogy(n - k, 1.0 - f)
        })
        .collect()
}

/// Parameterization of a gate set as a real vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Parameterization {
    /// PTM rows 2-4 free, first row fixed; SPAM Pauli vectors (ρ with unit trace).
    Tp,
    /// Each gate from four Kraus operators normalized to an isometry; ρ from
    /// a Cholesky-like factor; `0 ⪯ E ⪯ I` from a bounded factor.
    Cptp,
}

type Stack8 = SMatrix<C64, 8, 2>;

fn basis() -> [Mat2; 4] {
    pauli_basis()
}

fn herm_inv_sqrt(m: &Mat2) -> Option<Mat2> {
    let eig = m.symmetric_eigen();
    if eig.eigenvalues.iter().any(|&v| v <= 1e-300) {
        return None;
    }
    let d = Matrix2::from_diagonal(&eig.eigenvalues.map(|v| c(1.0 / v.sqrt(), 0.0)));
    Some(eig.eigenvectors * d * eig.eigenvectors.adjoint())
}

fn herm_fn<F: Fn(f64) -> f64>(m: &Mat2, f: F) -> Mat2 {
    let h = (m + m.adjoint()) * c(0.5, 0.0);
    let eig = h.symmetric_eigen();
    let d = Matrix2::from_diagonal(&eig.eigenvalues.map(|v| c(f(v), 0.0)));
    eig.eigenvectors * d * eig.eigenvectors.adjoint()
}

fn kraus_to_ptm(v: &Stack8) -> Ptm {
    let b = basis();
    let ks: Vec<Mat2> = (0..4).map(|m| v.fixed_view::<2, 2>(2 * m, 0).into_owned()).collect();
    Ptm::from_fn(|i, j| ks.iter().map(|k| (b[i] * k * b[j] * k.adjoint()).trace().re).sum())
}

/// Unnormalized Choi matrix `Σ_ab |a⟩⟨b| ⊗ Φ(|a⟩⟨b|)` of a PTM.
fn choi_of(ptm: &Ptm) -> Matrix4<C64> {
    let b = basis();
    let mut j = Matrix4::<C64>::zeros();
    for a in 0..2 {
        for bb in 0..2 {
            let mut e = Mat2::zeros();
            e[(a, bb)] = c(1.0, 0.0);
            let coeffs: Vec<C64> = b.iter().map(|bk| (bk * e).trace()).collect();
            let mut out = Mat2::zeros();
            for l in 0..4 {
                let mut s = c(0.0, 0.0);
                for k in 0..4 {
                    s += coeffs[k] * ptm[(l, k)];
                }
                out += b[l] * s;
            }
            for k in 0..2 {
                for l in 0..2 {
                    j[(2 * a + k, 2 * bb + l)] = out[(k, l)];
                }
            }
        }
    }
    j
}

/// Minimum eigenvalue of the Choi matrix normalized to unit trace per input.
pub fn choi_min_eigenvalue(ptm: &Ptm) -> f64 {
    let j = choi_of(ptm);
    let h = (j + j.adjoint()) * c(0.5, 0.0);
    h.symmetric_eigen().eigenvalues.min()
}

fn ptm_to_kraus(ptm: &Ptm) -> Stack8 {
    let j = choi_of(ptm);
    let h = (j + j.adjoint()) * c(0.5, 0.0);
    let eig = h.symmetric_eigen();
    let mut x = Stack8::zeros();
    for m in 0..4 {
        let lam = eig.eigenvalues[m].max(1e-7);
        let w = eig.eigenvectors.column(m);
        for a in 0..2 {
            for k in 0..2 {
                x[(2 * m + k, a)] = w[2 * a + k] * lam.sqrt();
            }
        }
    }
    x
}

impl Parameterization {
    pub fn len(self) -> usize {
        match self {
            Parameterization::Tp => 3 * 12 + 3 + 4,
            Parameterization::Cptp => 3 * 32 + 8 + 8,
        }
    }

    pub fn is_empty(self) -> bool {
        false
    }

    pub fn encode(self, gs: &GateSet) -> DVector<f64> {
        let mut x = Vec::with_capacity(self.len());
        match self {
            Parameterization::Tp => {
                for g in &gs.gates {
                    for r in 1..4 {
                        for col in 0..4 {
                            x.push(g[(r, col)]);
                        }
                    }
                }
                x.extend((1..4).map(|k| gs.rho[k]));
                x.extend(gs.effect.iter());
            }
            Parameterization::Cptp => {
                for g in &gs.gates {
                    let k = ptm_to_kraus(g);
                    for z in k.iter() {
                        x.push(z.re);
                        x.push(z.im);
                    }
                }
                let rho = herm_fn(&gs.rho_matrix(), |v| v.max(1e-9));
                let rho = rho / rho.trace();
                let t = herm_fn(&rho, |v| v.sqrt());
                for z in t.iter() {
                    x.push(z.re);
                    x.push(z.im);
                }
                let e = herm_fn(&from_pauli_vector(&gs.effect), |v| {
                    let v = v.clamp(1e-7, 1.0 - 1e-7);
                    (v / (1.0 - v)).sqrt()
                });
                for z in e.iter() {
                    x.push(z.re);
                    x.push(z.im);
                }
            }
        }
        DVector::from_vec(x)
    }

    pub fn decode(self, x: &DVector<f64>) -> Option<GateSet> {
        let s = std::f64::consts::FRAC_1_SQRT_2;
        match self {
            Parameterization::Tp => {
                let mut gates = [Ptm::zeros(); 3];
                for (gi, g) in gates.iter_mut().enumerate() {
                    g[(0, 0)] = 1.0;
                    for k in 0..12 {
                        g[(1 + k / 4, k % 4)] = x[12 * gi + k];
                    }
                }
                let rho = Vector4::new(s, x[36], x[37], x[38]);
                let effect = Vector4::new(x[39], x[40], x[41], x[42]);
                Some(GateSet { gates, rho, effect })
            }
            Parameterization::Cptp => {
                let cx = |k: usize| c(x[2 * k], x[2 * k + 1]);
                let mut gates = [Ptm::zeros(); 3];
                for (gi, g) in gates.iter_mut().enumerate() {
                    let stack = Stack8::from_iterator((0..16).map(|k| cx(16 * gi + k)));
                    let norm = herm_inv_sqrt(&(stack.adjoint() * stack))?;
                    *g = kraus_to_ptm(&(stack * norm));
                }
                let t = Mat2::from_iterator((0..4).map(|k| cx(48 + k)));
                let tt = t * t.adjoint();
                let tr = tt.trace().re;
                if tr <= 1e-300 {
                    return None;
                }
                let rho = to_pauli_vector(&(tt / c(tr, 0.0)));
                let xe = Mat2::from_iterator((0..4).map(|k| cx(52 + k)));
                let inner = (Mat2::identity() + xe.adjoint() * xe).try_inverse()?;
                let effect = to_pauli_vector(&(xe * inner * xe.adjoint()));
                Some(GateSet { gates, rho, effect })
            }
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct MleOptions {
    pub parameterization: Parameterization,
    pub max_iter: usize,
    /// Stop once an accepted step raises logL by less than this. Gains far
    /// below 0.5 do not move any parameter by a meaningful fraction of its
    /// standard error.
    pub tol: f64,
}

impl Default for MleOptions {
    fn default() -> Self {
        Self { parameterization: Parameterization::Cptp, max_iter: 100, tol: 1e-4 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GateSetEstimate {
    pub gate_set: GateSet,
    pub log_likelihood: f64,
    pub seed_log_likelihood: f64,
    pub converged: bool,
    pub iterations: usize,
    pub parameterization: Parameterization,
}

/// Maximizes the binomial likelihood from `seed` by damped Fisher scoring:
/// each step solves the weighted Gauss-Newton system with weights
/// `N/(p(1−p))` at the current iterate, accepting only likelihood increases.
pub fn mle_optimize(
    design: &GSTDesign,
    data: &GstDataset,
    seed: &GateSet,
    opts: &MleOptions,
) -> Result<GateSetEstimate, GstError> {
    data.validate(design)?;
    let param = opts.parameterization;
    let predictor = Predictor::new(design);
    let f = data.frequencies();
    let shots: Vec<f64> = data.shots.iter().map(|&n| n as f64).collect();
    let probs = |x: &DVector<f64>| -> Option<Vec<f64>> { param.decode(x).map(|gs| predictor.probabilities(design, &gs)) };

    let seed_ll = log_likelihood(&predictor.probabilities(design, seed), data);
    let mut x = param.encode(seed);
    let mut p = probs(&x).ok_or_else(|| GstError::Model("seed does not decode".into()))?;
    let mut ll = log_likelihood(&p, data);
    let mut lambda = 1e-3;
    let mut converged = false;
    let mut iterations = 0;
    for it in 0..opts.max_iter {
        iterations = it + 1;
        let w: Vec<f64> = p
            .iter()
            .zip(&shots)
            .map(|(&pi, &n)| {
                let q = pi.clamp(0.5 / n, 1.0 - 0.5 / n);
                (n / (q * (1.0 - q))).sqrt()
            })
            .collect();
        let r = DVector::from_fn(p.len(), |k, _| w[k] * (p[k] - f[k]));
        let jac_fn = |y: &DVector<f64>| -> DVector<f64> {
            match probs(y) {
                Some(py) => DVector::from_fn(py.len(), |k, _| w[k] * py[k]),
                None => DVector::from_element(p.len(), f64::NAN),
            }
        };
        let jac = numeric_jacobian(&jac_fn, &x, 1e-6, true);
        if jac.iter().any(|v| !v.is_finite()) {
            break;
        }
        let jtj = jac.transpose() * &jac;
        let grad = jac.transpose() * &r;
        let mut accepted = false;
        for _ in 0..30 {
            let mut a = jtj.clone();
            for i in 0..a.nrows() {
                a[(i, i)] += lambda * jtj[(i, i)].max(1e-12);
            }
            let Some(ch) = a.cholesky() else {
                lambda *= 10.0;
                continue;
            };
            let trial = &x + ch.solve(&(-&grad));
            if let Some(pt) = probs(&trial) {
                let llt = log_likelihood(&pt, data);
                if llt.is_finite() && llt >= ll {
                    let gain = llt - ll;
                    x = trial;
                    p = pt;
                    ll = llt;
                    lambda = (lambda * 0.3).max(1e-12);
                    accepted = true;
                    if gain < opts.tol {
                        converged = true;
                    }
                    break;
                }
            }
            lambda *= 10.0;
        }
        if !accepted {
            converged = true;
            break;
        }
        if converged {
            break;
        }
    }
    let mut gate_set = param.decode(&x).expect("accepted iterates decode");
    let mut final_ll = ll;
    if final_ll < seed_ll && param == Parameterization::Tp {
        gate_set = seed.clone();
        final_ll = seed_ll;
    }
    Ok(GateSetEstimate {
        gate_set,
        log_likelihood: final_ll,
        seed_log_likelihood: seed_ll,
        converged,
        iterations,
        parameterization: param,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DepthViolation {
    pub depth: usize,
    pub n_circuits: usize,
    pub two_delta_logl: f64,
    pub dof: f64,
    pub n_sigma: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ViolationReport {
    pub per_circuit: Vec<f64>,
    pub per_depth: Vec<DepthViolation>,
    pub two_delta_logl: f64,
    pub dof: i64,
    pub n_sigma: f64,
}

impl ViolationReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("depth,n_circuits,two_delta_logl,dof,n_sigma\n");
        for d in &self.per_depth {
            out.push_str(&format!("{},{},{:.6},{},{:.6}\n", d.depth, d.n_circuits, d.two_delta_logl, d.dof, d.n_sigma));
        }
        out
    }
}

/// `N_σ = (2ΔlogL − k)/√(2k)` against the saturated model, in total and per
/// depth group. Per-depth groups use their circuit count as `k`; the total
/// subtracts the non-gauge model parameters.
pub fn model_violation(design: &GSTDesign, data: &GstDataset, model: &GateSet) -> Result<ViolationReport, GstError> {
    data.validate(design)?;
    let dof = design.circuits.len() as i64 - MODEL_PARAMS as i64;
    if dof <= 0 {
        return Err(GstError::DesignTooSmall { dof });
    }
    let probs = circuit_probabilities(design, model);
    let f = data.frequencies();
    let saturated = log_likelihood_terms_saturated(&f, data);
    let per_circuit: Vec<f64> = probs
        .iter()
        .enumerate()
        .map(|(k, &p)| {
            let p = p.clamp(1e-12, 1.0 - 1e-12);
            let (z, n) = (data.zeros[k] as f64, data.shots[k] as f64);
            (2.0 * (saturated[k] - xlogy(z, p) - xlogy(n - z, 1.0 - p))).max(0.0)
        })
        .collect();
    let per_depth = design
        .depth_groups()
        .into_iter()
        .map(|depth| {
            let idx: Vec<usize> = (0..design.circuits.len()).filter(|&k| design.circuits[k].depth == depth).collect();
            let two = idx.iter().map(|&k| per_circuit[k]).sum::<f64>();
            let k = idx.len() as f64;
            DepthViolation { depth, n_circuits: idx.len(), two_delta_logl: two, dof: k, n_sigma: (two - k) / (2.0 * k).sqrt() }
        })
        .collect();
    let total: f64 = per_circuit.iter().sum();
    Ok(ViolationReport {
        n_sigma: (total - dof as f64) / (2.0 * dof as f64).sqrt(),
        per_circuit,
        per_depth,
        two_delta_logl: total,
        dof,
    })
}

/// Shortest {Gx, Gy} word for every Clifford; the identity maps to `[Gi]`.
pub fn clifford_words_xy() -> Vec<GateString> {
    let group = clifford_group();
    let mut words: Vec<Option<GateString>> = vec![None; GROUP_ORDER];
    words[IDENTITY] = Some(Vec::new());
    let mut frontier = vec![IDENTITY];
    let gens = [(GateLabel::Gx, group.find(&rx(FRAC_PI_2)).expect("Clifford")), (GateLabel::Gy, group.find(&ry(FRAC_PI_2)).expect("Clifford"))];
    while !frontier.is_empty() {
        let mut next = Vec::new();
        for &cur in &frontier {
            for &(label, g) in &gens {
                let k = group.compose(cur, g);
                if words[k].is_none() {
                    let mut w = words[cur].clone().expect("visited");
                    w.push(label);
                    words[k] = Some(w);
                    next.push(k);
                }
            }
        }
        frontier = next;
    }
    let mut out: Vec<GateString> = words.into_iter().map(|w| w.expect("generators span the group")).collect();
    out[IDENTITY] = vec![GateLabel::Gi];
    out
}

pub fn gates_per_clifford_xy() -> f64 {
    clifford_words_xy().iter().map(|w| w.len()).sum::<usize>() as f64 / GROUP_ORDER as f64
}

/// RB simulator driven by a GST gate set, including its SPAM.
#[derive(Debug, Clone)]
pub struct GateSetSimulator {
    cliffords: Vec<Ptm>,
    rho: Vector4<f64>,
    effect: Vector4<f64>,
}

impl GateSetSimulator {
    pub fn new(gs: &GateSet) -> Self {
        let cliffords = clifford_words_xy().iter().map(|w| gs.string_ptm(w)).collect();
        Self { cliffords, rho: gs.rho, effect: gs.effect }
    }
}

impl SequenceSimulator for GateSetSimulator {
    fn outcome(&self, cliffords: &[usize]) -> Result<SequenceOutcome, String> {
        let v = cliffords.iter().fold(self.rho, |v, &k| self.cliffords[k] * v);
        let p0 = self.effect.dot(&v);
        if !(-1e-9..=1.0 + 1e-9).contains(&p0) {
            return Err(format!("survival probability {p0} outside [0, 1]"));
        }
        let r = std::f64::consts::SQRT_2;
        Ok(SequenceOutcome {
            p0: p0.clamp(0.0, 1.0),
            p2: (1.0 - r * v[0]).clamp(0.0, 1.0),
            purity: v.norm_squared(),
            bloch: [r * v[1], r * v[2], r * v[3]],
        })
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RbFromGst {
    pub rb: RbResult,
    pub gates_per_clifford: f64,
    /// Error per physical gate of the re-simulated sequences.
    pub r_sim: Estimate,
}

/// Re-simulates RB sequences through a gate set; the EPC is divided by the
/// mean {Gx, Gy} word length of the compilation.
pub fn rb_from_gateset(gs: &GateSet, cfg: &RBConfig, n_boot: usize) -> Result<RbFromGst, GstError> {
    let sim = GateSetSimulator::new(gs);
    let seqs = gen_rb_sequences(cfg)?;
    let records = run_sequences(&seqs, &sim, cfg.shots, &AssignmentMatrix::default(), cfg.seed, "gst-rb-shots")?;
    let rb = RbResult::from_records(records, n_boot, seeds::derive_seed(cfg.seed, "gst-rb-bootstrap", &[]))?;
    let per = gates_per_clifford_xy();
    Ok(RbFromGst { r_sim: rb.r_clif.scaled(1.0 / per), gates_per_clifford: per, rb })
}

/// JSON layout of a persisted estimate (PTMs row-major).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EstimateFile {
    pub gates: std::collections::BTreeMap<String, Vec<Vec<f64>>>,
    pub rho: Vec<f64>,
    pub effect: Vec<f64>,
    pub log_likelihood: f64,
    pub converged: bool,
    pub parameterization: Parameterization,
}

impl From<&GateSetEstimate> for EstimateFile {
    fn from(e: &GateSetEstimate) -> Self {
        let gates = GateLabel::ALL
            .iter()
            .map(|g| {
                let m = e.gate_set.gate(*g);
                (g.to_string(), (0..4).map(|r| (0..4).map(|c| m[(r, c)]).collect()).collect())
            })
            .collect();
        Self {
            gates,
            rho: e.gate_set.rho.iter().cloned().collect(),
            effect: e.gate_set.effect.iter().cloned().collect(),
            log_likelihood: e.log_likelihood,
            converged: e.converged,
            parameterization: e.parameterization,
        }
    }
}

impl EstimateFile {
    pub fn gate_set(&self) -> Result<GateSet, GstError> {
        let mut gs = GateSet::ideal();
        for g in GateLabel::ALL {
            let rows = self.gates.get(&g.to_string()).ok_or_else(|| GstError::Parse(format!("missing gate {g}")))?;
            if rows.len() != 4 || rows.iter().any(|r| r.len() != 4) {
                return Err(GstError::Parse(format!("gate {g} is not 4×4")));
            }
            gs.gates[g.index()] = Ptm::from_fn(|r, c| rows[r][c]);
        }
        if self.rho.len() != 4 || self.effect.len() != 4 {
            return Err(GstError::Parse("SPAM vectors must have 4 entries".into()));
        }
        gs.rho = Vector4::from_column_slice(&self.rho);
        gs.effect = Vector4::from_column_slice(&self.effect);
        Ok(gs)
    }
}
