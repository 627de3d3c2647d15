//! Run configuration, stage commands, persisted artifacts and the run
//! manifest. Every stage is a pure function of (config, seed) apart from
//! the manifest timestamps.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::benchmark::{
    gen_rb_sequences, length_means, purity_benchmark, run_irb, run_sequences, AssignmentMatrix, BenchError,
    ChannelGateSet, DecayFit, Estimate, IrbResult, LeakageFit, PulseGateSet, PurityMode, RBConfig, RbResult,
    SequenceRecord, SequenceSimulator, DEFAULT_BOOTSTRAP, DEFAULT_LENGTHS, PULSES_PER_CLIFFORD,
};
use crate::calib::{
    amp_scan, buffer_scan, central_width, closed_loop_calibrate, detuning_scan, pattern_change, pattern_shift,
    CalibError, CalibOptions, CalibScan, CalibrationResult, Extremum,
};
use crate::clifford::InterleavedGate;
use crate::drift::{
    assemble_budget, fluctuation_epg, inject_drift, reduced_chi2, BudgetInputs, DriftError, DriftSample,
    DriftSchedule, FluctuationKind, FluctuationResult, FluctuationSpec,
};
use crate::gst::{
    build_design, gauge_optimize, lgst, mle_optimize, model_violation, rb_from_gateset, simulate_dataset,
    Acquisition, EstimateFile, ExecutionOrder, GateSet, GateSetEstimate, GateSetSource, GaugeOptions, GstError,
    MleOptions, Parameterization, StaticSource, TransmonSource, ViolationReport,
};
use crate::seeds::derive_seed;
use crate::transmon::{decoherence_error, DeviceParams, PulseParams, PulseTail, Transmon, TransmonError, DEFAULT_STEPS};

pub const SCHEMA_VERSION: u32 = 1;
pub const ARTIFACT_VERSION: &str = env!("CARGO_PKG_VERSION");
pub const MANIFEST_FILE: &str = "manifest.json";
pub const CALIBRATED_CONFIG_FILE: &str = "calibrated_config.json";

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("schema error: {0}")]
    Schema(String),
    #[error("fit failure: {0}")]
    Fit(String),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{0}")]
    Other(String),
}

impl PipelineError {
    /// 2 for configuration problems, 3 for fit/optimizer failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            PipelineError::Schema(_) => 2,
            PipelineError::Fit(_) => 3,
            _ => 1,
        }
    }
}

impl From<BenchError> for PipelineError {
    fn from(e: BenchError) -> Self {
        match e {
            BenchError::InvalidConfig(m) => PipelineError::Schema(m),
            BenchError::Fit(f) => PipelineError::Fit(f.to_string()),
            other => PipelineError::Other(other.to_string()),
        }
    }
}

impl From<GstError> for PipelineError {
    fn from(e: GstError) -> Self {
        match e {
            GstError::InvalidDesign(_) | GstError::DesignTooSmall { .. } | GstError::Parse(_) => {
                PipelineError::Schema(e.to_string())
            }
            GstError::NotInformationallyComplete { .. } | GstError::Gauge(_) => PipelineError::Fit(e.to_string()),
            GstError::Bench(b) => b.into(),
            other => PipelineError::Other(other.to_string()),
        }
    }
}

impl From<CalibError> for PipelineError {
    fn from(e: CalibError) -> Self {
        match e {
            CalibError::InvalidScan(m) => PipelineError::Schema(m),
            CalibError::Transmon(t) => t.into(),
        }
    }
}

impl From<TransmonError> for PipelineError {
    fn from(e: TransmonError) -> Self {
        match e {
            TransmonError::NonConvergence { .. } => PipelineError::Fit(e.to_string()),
            TransmonError::InvalidDevice(_) | TransmonError::InvalidPulse(_) => PipelineError::Schema(e.to_string()),
            other => PipelineError::Other(other.to_string()),
        }
    }
}

impl From<DriftError> for PipelineError {
    fn from(e: DriftError) -> Self {
        match e {
            DriftError::InvalidSpec(m) => PipelineError::Schema(m),
            DriftError::Bench(b) => b.into(),
            DriftError::Transmon(t) => t.into(),
            other => PipelineError::Other(other.to_string()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PulseKeyword {
    Calibrate,
}

/// Explicit pulse parameters, or `"calibrate"` to run the closed loop.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum PulseChoice {
    Keyword(PulseKeyword),
    Params(PulseParams),
}

impl Default for PulseChoice {
    fn default() -> Self {
        PulseChoice::Keyword(PulseKeyword::Calibrate)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SimMode {
    /// Qutrit propagators per Clifford; tracks leakage.
    Pulse,
    /// Qubit PTMs per Clifford.
    Channel,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulationConfig {
    #[serde(default = "default_mode")]
    pub mode: SimMode,
    #[serde(default = "yes")]
    pub decoherence: bool,
    #[serde(default = "default_steps")]
    pub steps: usize,
}

fn default_mode() -> SimMode {
    SimMode::Pulse
}
fn yes() -> bool {
    true
}
fn default_steps() -> usize {
    DEFAULT_STEPS
}

impl Default for SimulationConfig {
    fn default() -> Self {
        Self { mode: default_mode(), decoherence: true, steps: DEFAULT_STEPS }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchmarkConfig {
    #[serde(default = "default_lengths")]
    pub lengths: Vec<usize>,
    #[serde(default = "default_sequences")]
    pub n_sequences: usize,
    #[serde(default = "default_shots")]
    pub shots: u64,
    #[serde(default = "default_bootstrap")]
    pub bootstrap: usize,
    #[serde(default = "default_purity")]
    pub purity_mode: PurityMode,
}

fn default_lengths() -> Vec<usize> {
    DEFAULT_LENGTHS.to_vec()
}
fn default_sequences() -> usize {
    20
}
fn default_shots() -> u64 {
    1024
}
fn default_bootstrap() -> usize {
    DEFAULT_BOOTSTRAP
}
fn default_purity() -> PurityMode {
    PurityMode::Exact
}

impl Default for BenchmarkConfig {
    fn default() -> Self {
        Self {
            lengths: default_lengths(),
            n_sequences: default_sequences(),
            shots: default_shots(),
            bootstrap: default_bootstrap(),
            purity_mode: default_purity(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CalibrationConfig {
    /// Gate length and buffer of the uncalibrated starting pulse.
    #[serde(default = "default_tg")]
    pub tg: f64,
    #[serde(default = "default_tbuff")]
    pub tbuff: f64,
    #[serde(default)]
    pub options: CalibOptions,
    #[serde(default)]
    pub tail: Option<PulseTail>,
    #[serde(default = "default_buffer_sweep")]
    pub buffer_sweep: Vec<f64>,
    /// Half-width of the α sweep of the buffer scan.
    #[serde(default = "default_alpha_span")]
    pub alpha_span: f64,
}

fn default_tg() -> f64 {
    20e-9
}
fn default_tbuff() -> f64 {
    2e-9
}
fn default_buffer_sweep() -> Vec<f64> {
    vec![0.0, 1e-9, 2e-9, 4e-9, 6e-9, 8e-9]
}
fn default_alpha_span() -> f64 {
    0.2
}

impl Default for CalibrationConfig {
    fn default() -> Self {
        Self {
            tg: default_tg(),
            tbuff: default_tbuff(),
            options: CalibOptions::default(),
            tail: None,
            buffer_sweep: default_buffer_sweep(),
            alpha_span: default_alpha_span(),
        }
    }
}

/// Where GST data come from: a parametric model or the pulse simulator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum GstSourceConfig {
    Model { over_rotation: f64, depolarization: f64, prep_error: f64, meas_error: f64 },
    Pulse { prep_error: f64, meas_error: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GstConfig {
    #[serde(default = "default_depth")]
    pub max_depth: usize,
    #[serde(default = "default_shots")]
    pub shots: u64,
    #[serde(default = "default_gst_source")]
    pub source: GstSourceConfig,
    #[serde(default = "default_order")]
    pub order: ExecutionOrder,
    #[serde(default = "default_param")]
    pub parameterization: Parameterization,
    #[serde(default)]
    pub drift: Option<DriftSchedule>,
    /// Bootstrap resamples of the RB re-simulation.
    #[serde(default = "default_gst_bootstrap")]
    pub rb_bootstrap: usize,
}

fn default_depth() -> usize {
    256
}
fn default_gst_source() -> GstSourceConfig {
    GstSourceConfig::Pulse { prep_error: 0.01, meas_error: 0.02 }
}
fn default_order() -> ExecutionOrder {
    ExecutionOrder::Shuffled
}
fn default_param() -> Parameterization {
    Parameterization::Cptp
}
fn default_gst_bootstrap() -> usize {
    200
}

impl Default for GstConfig {
    fn default() -> Self {
        Self {
            max_depth: default_depth(),
            shots: default_shots(),
            source: default_gst_source(),
            order: default_order(),
            parameterization: default_param(),
            drift: None,
            rb_bootstrap: default_gst_bootstrap(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub schema_version: u32,
    pub seed: u64,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    pub device: DeviceParams,
    #[serde(default)]
    pub pulse: PulseChoice,
    #[serde(default)]
    pub simulation: SimulationConfig,
    #[serde(default)]
    pub benchmark: BenchmarkConfig,
    #[serde(default)]
    pub calibration: CalibrationConfig,
    #[serde(default)]
    pub gst: GstConfig,
    #[serde(default)]
    pub fluctuations: Vec<FluctuationSpec>,
    #[serde(default = "default_trials")]
    pub fluctuation_trials: usize,
    /// Schedule for the `drift` command.
    #[serde(default)]
    pub drift: Option<DriftSchedule>,
    #[serde(default)]
    pub spam: AssignmentMatrix,
    /// Optional file of externally supplied budget components; its entries
    /// take precedence over values found in stage outputs.
    #[serde(default)]
    pub budget_inputs: Option<PathBuf>,
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("out")
}
fn default_trials() -> usize {
    400
}

/// Command-line overrides applied after parsing.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub output_dir: Option<PathBuf>,
    pub shots: Option<u64>,
}

impl RunConfig {
    /// Minimal valid configuration for a device.
    pub fn new(device: DeviceParams, seed: u64) -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            seed,
            output_dir: default_output_dir(),
            device,
            pulse: PulseChoice::default(),
            simulation: SimulationConfig::default(),
            benchmark: BenchmarkConfig::default(),
            calibration: CalibrationConfig::default(),
            gst: GstConfig::default(),
            fluctuations: Vec::new(),
            fluctuation_trials: default_trials(),
            drift: None,
            spam: AssignmentMatrix::default(),
            budget_inputs: None,
        }
    }

    pub fn from_json(text: &str) -> Result<Self, PipelineError> {
        let cfg: RunConfig = serde_json::from_str(text).map_err(|e| PipelineError::Schema(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, PipelineError> {
        let text = fs::read_to_string(path).map_err(|source| PipelineError::Io { path: path.into(), source })?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn apply(&mut self, o: &Overrides) -> Result<(), PipelineError> {
        if let Some(s) = o.seed {
            self.seed = s;
        }
        if let Some(d) = &o.output_dir {
            self.output_dir = d.clone();
        }
        if let Some(n) = o.shots {
            self.benchmark.shots = n;
            self.gst.shots = n;
        }
        self.validate()
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        let bad = |m: String| Err(PipelineError::Schema(m));
        if self.schema_version != SCHEMA_VERSION {
            return bad(format!("unsupported schema_version {} (expected {SCHEMA_VERSION})", self.schema_version));
        }
        self.device.validate()?;
        if let PulseChoice::Params(p) = &self.pulse {
            p.validate()?;
        }
        if self.simulation.steps == 0 {
            return bad("simulation.steps must be positive".into());
        }
        self.rb_config().validate()?;
        if self.benchmark.bootstrap < 2 {
            return bad("benchmark.bootstrap must be at least 2".into());
        }
        self.calibration.options.validate()?;
        if !(self.calibration.tg > 0.0 && self.calibration.tbuff >= 0.0) {
            return bad("calibration.tg must be positive and tbuff non-negative".into());
        }
        if self.calibration.buffer_sweep.windows(2).any(|w| !(w[0] < w[1])) || self.calibration.buffer_sweep.is_empty() {
            return bad("calibration.buffer_sweep must be non-empty and strictly increasing".into());
        }
        if !(self.calibration.alpha_span > 0.0) {
            return bad("calibration.alpha_span must be positive".into());
        }
        if self.gst.shots == 0 || self.gst.max_depth == 0 {
            return bad("gst.shots and gst.max_depth must be positive".into());
        }
        for f in &self.fluctuations {
            f.validate()?;
        }
        if self.fluctuation_trials < 2 {
            return bad("fluctuation_trials must be at least 2".into());
        }
        if let Some(d) = &self.drift {
            d.validate()?;
        }
        if let Some(d) = &self.gst.drift {
            d.validate()?;
        }
        Ok(())
    }

    /// JSON form without `output_dir`, so that artifacts do not depend on
    /// where they are written.
    pub fn portable_json(&self) -> serde_json::Value {
        let mut v = serde_json::to_value(self).expect("config serializes");
        v.as_object_mut().expect("config is an object").remove("output_dir");
        v
    }

    /// SHA-256 of the canonical portable JSON form.
    pub fn hash(&self) -> String {
        sha256_hex(self.portable_json().to_string().as_bytes())
    }

    /// RB configuration with the stage seed derived from the master seed.
    pub fn rb_config(&self) -> RBConfig {
        RBConfig {
            lengths: self.benchmark.lengths.clone(),
            n_sequences: self.benchmark.n_sequences,
            shots: self.benchmark.shots,
            seed: derive_seed(self.seed, "benchmark", &[]),
        }
    }

    pub fn transmon(&self) -> Transmon {
        Transmon { steps: self.simulation.steps, ..Transmon::new(self.device) }.with_decoherence(self.simulation.decoherence)
    }

    fn initial_pulse(&self) -> PulseParams {
        match &self.pulse {
            PulseChoice::Params(p) => *p,
            PulseChoice::Keyword(_) => {
                PulseParams { tbuff: self.calibration.tbuff, ..PulseParams::nominal_x90(self.calibration.tg) }
            }
        }
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileDigest {
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub inputs: Vec<FileDigest>,
    pub outputs: Vec<FileDigest>,
    pub started_unix: u64,
    pub finished_unix: u64,
    #[serde(default)]
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub artifact_version: String,
    pub schema_version: u32,
    pub config_hash: String,
    pub seed: u64,
    pub stages: BTreeMap<String, StageRecord>,
}

impl RunManifest {
    /// The manifest already in `dir` if it belongs to the same config,
    /// otherwise a fresh one.
    pub fn open(dir: &Path, cfg: &RunConfig) -> Self {
        let fresh = Self {
            artifact_version: ARTIFACT_VERSION.into(),
            schema_version: SCHEMA_VERSION,
            config_hash: cfg.hash(),
            seed: cfg.seed,
            stages: BTreeMap::new(),
        };
        match fs::read_to_string(dir.join(MANIFEST_FILE)).ok().and_then(|t| serde_json::from_str::<RunManifest>(&t).ok()) {
            Some(m) if m.config_hash == fresh.config_hash && m.artifact_version == fresh.artifact_version => m,
            _ => fresh,
        }
    }

    pub fn save(&self, dir: &Path) -> Result<(), PipelineError> {
        let path = dir.join(MANIFEST_FILE);
        fs::write(&path, serde_json::to_string_pretty(self).expect("manifest serializes"))
            .map_err(|source| PipelineError::Io { path, source })
    }
}

fn unix_now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0)
}

/// Writes stage artifacts under the output directory and records digests.
pub struct StageWriter {
    root: PathBuf,
    name: String,
    started: u64,
    inputs: Vec<FileDigest>,
    outputs: Vec<FileDigest>,
    warnings: Vec<String>,
}

impl StageWriter {
    fn new(root: &Path, name: &str) -> Result<Self, PipelineError> {
        fs::create_dir_all(root).map_err(|source| PipelineError::Io { path: root.into(), source })?;
        Ok(Self { root: root.into(), name: name.into(), started: unix_now(), inputs: vec![], outputs: vec![], warnings: vec![] })
    }

    fn write(&mut self, rel: &str, bytes: &[u8]) -> Result<(), PipelineError> {
        let path = self.root.join(rel);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(|source| PipelineError::Io { path: parent.into(), source })?;
        }
        fs::write(&path, bytes).map_err(|source| PipelineError::Io { path: path.clone(), source })?;
        self.outputs.retain(|d| d.path != rel);
        self.outputs.push(FileDigest { path: rel.into(), sha256: sha256_hex(bytes) });
        Ok(())
    }

    fn write_json<T: Serialize>(&mut self, rel: &str, value: &T) -> Result<(), PipelineError> {
        let mut text = serde_json::to_string_pretty(value).map_err(|e| PipelineError::Other(e.to_string()))?;
        text.push('\n');
        self.write(rel, text.as_bytes())
    }

    fn read_input(&mut self, rel: &str) -> Option<String> {
        let text = fs::read_to_string(self.root.join(rel)).ok()?;
        self.inputs.push(FileDigest { path: rel.into(), sha256: sha256_hex(text.as_bytes()) });
        Some(text)
    }

    fn finish(self, cfg: &RunConfig) -> Result<StageRecord, PipelineError> {
        let record = StageRecord {
            inputs: self.inputs,
            outputs: self.outputs,
            started_unix: self.started,
            finished_unix: unix_now(),
            warnings: self.warnings,
        };
        let mut manifest = RunManifest::open(&self.root, cfg);
        manifest.stages.insert(self.name, record.clone());
        manifest.save(&self.root)?;
        Ok(record)
    }
}

fn records_csv(records: &[SequenceRecord]) -> String {
    let mut out = String::from("length,index,shots,successes,p0_exact,p2,purity\n");
    for r in records {
        out.push_str(&format!("{},{},{},{},{},{},{}\n", r.length, r.index, r.shots, r.successes, r.p0_exact, r.p2, r.purity));
    }
    out
}

/// Per-length mean and standard error of a per-sequence quantity.
fn length_stats<F: Fn(&SequenceRecord) -> f64>(records: &[SequenceRecord], f: F) -> Vec<(f64, f64, f64)> {
    let (m, mean) = length_means(records, &f);
    m.iter()
        .zip(mean)
        .map(|(&mk, mu)| {
            let vals: Vec<f64> = records.iter().filter(|r| r.length as f64 == mk).map(&f).collect();
            let n = vals.len() as f64;
            let var = if n > 1.0 { vals.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / (n - 1.0) } else { 0.0 };
            (mk, mu, (var / n).sqrt())
        })
        .collect()
}

/// Fitted decay and the 0.9999 average-gate-fidelity guide with the same
/// SPAM constants, sampled on a uniform grid.
fn curve_csv(fit: &DecayFit, max_m: f64) -> String {
    let r_clif_guide = 1e-4 * PULSES_PER_CLIFFORD;
    let p_guide = 1.0 - 2.0 * r_clif_guide;
    let mut out = String::from("m,fit,guide_f9999\n");
    let n = 200;
    for k in 0..=n {
        let m = max_m * k as f64 / n as f64;
        let guide = DecayFit { p: p_guide, ..fit.clone() }.eval(m);
        out.push_str(&format!("{},{},{}\n", m, fit.eval(m), guide));
    }
    out
}

fn stats_csv(header: &str, stats: &[(f64, f64, f64)]) -> String {
    let mut out = format!("{header}\n");
    for (m, mu, se) in stats {
        out.push_str(&format!("{m},{mu},{se}\n"));
    }
    out
}

/// Calibrated pulse: explicit parameters, the output of a previous
/// `calibrate` run in the same directory, or a fresh closed-loop run.
fn resolve_pulse(cfg: &RunConfig, w: &mut StageWriter) -> Result<PulseParams, PipelineError> {
    if let PulseChoice::Params(p) = &cfg.pulse {
        return Ok(*p);
    }
    if let Some(text) = w.read_input(CALIBRATED_CONFIG_FILE) {
        let prior = RunConfig::from_json(&text)?;
        if let PulseChoice::Params(p) = prior.pulse {
            return Ok(p);
        }
    }
    let r = closed_loop_calibrate(&cfg.transmon(), &cfg.initial_pulse(), &cfg.calibration.options)?;
    if !r.converged {
        return Err(PipelineError::Fit(format!("calibration did not converge in {} rounds", r.rounds)));
    }
    Ok(r.pulse)
}

fn gate_simulator(cfg: &RunConfig, pulse: &PulseParams) -> Result<Box<dyn SequenceSimulator>, PipelineError> {
    let sim = cfg.transmon();
    Ok(match cfg.simulation.mode {
        SimMode::Pulse => Box::new(PulseGateSet::new(&sim, pulse)?),
        SimMode::Channel => {
            let g = sim.gate_channel(pulse)?;
            let idle = sim.idle_channel(pulse.duration())?;
            Box::new(ChannelGateSet::from_gates(&g.channel, &idle.channel))
        }
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationSummary {
    pub result: CalibrationResult,
    pub amp_widths: Vec<(usize, Option<f64>)>,
    pub detuning_widths: Vec<(usize, Option<f64>)>,
    pub buffer_pattern_change: Option<f64>,
    pub buffer_pattern_shift: Option<f64>,
    pub tail: Option<PulseTail>,
}

fn linspace(a: f64, b: f64, n: usize) -> Vec<f64> {
    (0..n).map(|k| a + (b - a) * k as f64 / (n - 1) as f64).collect()
}

/// Closed-loop calibration plus the amplitude, detuning and buffer scans
/// around the calibrated point.
pub fn cmd_calibrate(cfg: &RunConfig) -> Result<CalibrationSummary, PipelineError> {
    let mut w = StageWriter::new(&cfg.output_dir, "calibrate")?;
    let closed = cfg.transmon().with_decoherence(false);
    let result = closed_loop_calibrate(&closed, &cfg.initial_pulse(), &cfg.calibration.options)?;
    if !result.converged {
        w.write_json("calibrate/diagnostics.json", &result)?;
        w.warnings.push("calibration did not converge".into());
        w.finish(cfg)?;
        return Err(PipelineError::Fit(format!(
            "calibration did not converge in {} rounds (coherent error {:.3e})",
            result.rounds, result.coherent_error
        )));
    }
    let p = result.pulse;
    let mut scans: Vec<(String, CalibScan)> = Vec::new();
    let mut amp_widths = Vec::new();
    for n in [1usize, 11, 51] {
        let span = 0.6 / n as f64;
        let s = amp_scan(&closed, &p, n, &linspace(p.omega0 * (1.0 - span), p.omega0 * (1.0 + span), 161))?;
        amp_widths.push((n, central_width(&s.values, &s.p1, Extremum::Peak)));
        scans.push((format!("calibrate/amp_scan_n{n}.csv"), s));
    }
    let mut detuning_widths = Vec::new();
    let dfs = linspace(p.df - 3e6, p.df + 3e6, 241);
    for n in [50usize, 100, 200] {
        let s = detuning_scan(&closed, &p, n, &dfs)?;
        detuning_widths.push((n, central_width(&s.values, &s.p1, Extremum::Dip)));
        scans.push((format!("calibrate/detuning_scan_n{n}.csv"), s));
    }
    let tailed = Transmon { tail: cfg.calibration.tail, ..closed.clone() };
    let span = cfg.calibration.alpha_span;
    let alphas = linspace(p.alpha - span, p.alpha + span, 81);
    let buffer = buffer_scan(&tailed, &p, 50, &alphas, &cfg.calibration.buffer_sweep)?;
    let summary = CalibrationSummary {
        result: result.clone(),
        amp_widths,
        detuning_widths,
        buffer_pattern_change: pattern_change(&buffer),
        buffer_pattern_shift: pattern_shift(&buffer, Extremum::Dip),
        tail: cfg.calibration.tail,
    };
    scans.push(("calibrate/buffer_scan.csv".into(), buffer));
    for (path, s) in &scans {
        w.write(path, s.to_csv().as_bytes())?;
    }
    w.write_json("calibrate/summary.json", &summary)?;
    let calibrated = RunConfig { pulse: PulseChoice::Params(p), ..cfg.clone() }.portable_json();
    w.write_json(CALIBRATED_CONFIG_FILE, &calibrated)?;
    w.finish(cfg)?;
    Ok(summary)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RbSummary {
    pub pulse: PulseParams,
    pub mode: SimMode,
    pub fit: Option<DecayFit>,
    pub r_clif: Option<Estimate>,
    pub r_avg: Option<Estimate>,
    /// Decoherence-only error of the same pulse window.
    pub coherence_limit: f64,
    pub error: Option<String>,
}

pub fn cmd_rb(cfg: &RunConfig) -> Result<RbSummary, PipelineError> {
    let mut w = StageWriter::new(&cfg.output_dir, "rb")?;
    let pulse = resolve_pulse(cfg, &mut w)?;
    let sim = gate_simulator(cfg, &pulse)?;
    let rb = cfg.rb_config();
    let seqs = gen_rb_sequences(&rb)?;
    let records = run_sequences(&seqs, sim.as_ref(), rb.shots, &cfg.spam, rb.seed, "rb-shots")?;
    w.write("rb/dataset.csv", records_csv(&records).as_bytes())?;
    w.write(
        "rb/plot.csv",
        stats_csv("m,survival,survival_se", &length_stats(&records, SequenceRecord::survival)).as_bytes(),
    )?;
    let coherence_limit = decoherence_error(&cfg.device, &pulse)?;
    let fitted = RbResult::from_records(records, cfg.benchmark.bootstrap, derive_seed(rb.seed, "rb-bootstrap", &[]));
    let summary = match &fitted {
        Ok(r) => {
            let max_m = *rb.lengths.last().expect("validated") as f64;
            w.write("rb/curve.csv", curve_csv(&r.fit, max_m).as_bytes())?;
            RbSummary {
                pulse,
                mode: cfg.simulation.mode,
                fit: Some(r.fit.clone()),
                r_clif: Some(r.r_clif),
                r_avg: Some(r.r_avg),
                coherence_limit,
                error: None,
            }
        }
        Err(e) => {
            w.warnings.push(format!("rb fit failed: {e}"));
            RbSummary { pulse, mode: cfg.simulation.mode, fit: None, r_clif: None, r_avg: None, coherence_limit, error: Some(e.to_string()) }
        }
    };
    w.write_json("rb/fit.json", &summary)?;
    w.finish(cfg)?;
    match fitted {
        Ok(_) => Ok(summary),
        Err(e) => Err(e.into()),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IrbSummary {
    pub gate: InterleavedGate,
    pub p_ref: Estimate,
    pub fit: DecayFit,
    pub r_gate: Estimate,
    pub negative: bool,
}

pub fn cmd_irb(cfg: &RunConfig, gate: InterleavedGate) -> Result<IrbSummary, PipelineError> {
    let stage = format!("irb-{}", gate.name());
    let mut w = StageWriter::new(&cfg.output_dir, &stage)?;
    let pulse = resolve_pulse(cfg, &mut w)?;
    let sim = gate_simulator(cfg, &pulse)?;
    let rb = cfg.rb_config();
    let seqs = gen_rb_sequences(&rb)?;
    let records = run_sequences(&seqs, sim.as_ref(), rb.shots, &cfg.spam, rb.seed, "rb-shots")?;
    let reference = RbResult::from_records(records, cfg.benchmark.bootstrap, derive_seed(rb.seed, "rb-bootstrap", &[]))?;
    let irb: IrbResult = run_irb(&rb, sim.as_ref(), gate, &reference, &cfg.spam, cfg.benchmark.bootstrap)?;
    let dir = format!("irb/{}", gate.name());
    w.write(&format!("{dir}/dataset.csv"), records_csv(&irb.records).as_bytes())?;
    w.write(
        &format!("{dir}/plot.csv"),
        stats_csv("m,survival,survival_se", &length_stats(&irb.records, SequenceRecord::survival)).as_bytes(),
    )?;
    w.write(&format!("{dir}/curve.csv"), curve_csv(&irb.fit, *rb.lengths.last().expect("validated") as f64).as_bytes())?;
    let summary = IrbSummary {
        gate,
        p_ref: Estimate::new(reference.fit.p, reference.fit.p_err),
        fit: irb.fit.clone(),
        r_gate: irb.r_gate,
        negative: irb.negative,
    };
    if irb.negative {
        w.warnings.push("interleaved decay slower than reference".into());
    }
    w.write_json(&format!("{dir}/fit.json"), &summary)?;
    w.finish(cfg)?;
    Ok(summary)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PbSummary {
    pub pulse: PulseParams,
    pub purity_fit: DecayFit,
    pub r_dec_clif: Estimate,
    pub r_dec_avg: Estimate,
    pub rb_fit: DecayFit,
    pub r_prime_avg: Estimate,
    pub incoherent_fraction: f64,
    pub leakage: Option<LeakageFit>,
}

pub fn cmd_pb(cfg: &RunConfig) -> Result<PbSummary, PipelineError> {
    let mut w = StageWriter::new(&cfg.output_dir, "pb")?;
    let pulse = resolve_pulse(cfg, &mut w)?;
    let sim = gate_simulator(cfg, &pulse)?;
    let rb = cfg.rb_config();
    let pb = purity_benchmark(&rb, sim.as_ref(), cfg.benchmark.purity_mode, &cfg.spam, cfg.benchmark.bootstrap)?;
    let tagged: Vec<SequenceRecord> =
        pb.records.iter().zip(&pb.purities).map(|(r, v)| SequenceRecord { purity: *v, ..r.clone() }).collect();
    w.write("pb/dataset.csv", records_csv(&tagged).as_bytes())?;
    w.write("pb/plot.csv", stats_csv("m,purity,purity_se", &length_stats(&tagged, |r| r.purity)).as_bytes())?;
    w.write("pb/leakage_plot.csv", stats_csv("m,p2,p2_se", &length_stats(&tagged, |r| r.p2)).as_bytes())?;
    let max_m = *rb.lengths.last().expect("validated") as f64;
    w.write("pb/curve.csv", curve_csv(&pb.purity_fit, max_m).as_bytes())?;
    if pb.leakage.is_none() {
        w.warnings.push("leakage fit failed".into());
    }
    let summary = PbSummary {
        pulse,
        purity_fit: pb.purity_fit,
        r_dec_clif: pb.r_dec_clif,
        r_dec_avg: pb.r_dec_avg,
        rb_fit: pb.rb_fit,
        r_prime_avg: pb.r_prime_avg,
        incoherent_fraction: pb.incoherent_fraction,
        leakage: pb.leakage,
    };
    w.write_json("pb/fit.json", &summary)?;
    w.finish(cfg)?;
    Ok(summary)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GstSummary {
    pub n_circuits: usize,
    pub lgst_distance_to_source: f64,
    pub distance_to_source: f64,
    pub log_likelihood: f64,
    pub converged: bool,
    pub iterations: usize,
    pub n_sigma: f64,
    pub r_sim: Estimate,
    /// The same RB sequences through the generating gate set.
    pub r_direct: Estimate,
    pub gates_per_clifford: f64,
    /// Physical-gate RB result of a prior `rb` run in the same directory.
    pub r_avg_rb: Option<Estimate>,
    pub violation: ViolationReport,
}

pub fn cmd_gst(cfg: &RunConfig) -> Result<GstSummary, PipelineError> {
    let mut w = StageWriter::new(&cfg.output_dir, "gst")?;
    let g = &cfg.gst;
    let design = build_design(g.max_depth, g.shots)?;
    let source: Box<dyn GateSetSource> = match &g.source {
        GstSourceConfig::Model { over_rotation, depolarization, prep_error, meas_error } => Box::new(StaticSource::new(
            GateSet::noisy(*over_rotation, *depolarization).with_spam(*prep_error, *meas_error),
        )),
        GstSourceConfig::Pulse { prep_error, meas_error } => {
            let pulse = resolve_pulse(cfg, &mut w)?;
            Box::new(TransmonSource { sim: cfg.transmon(), pulse, prep_error: *prep_error, meas_error: *meas_error })
        }
    };
    let truth = source.gate_set(&DriftSample::default())?;
    let acq = Acquisition { drift: g.drift.as_ref(), order: g.order, ..Default::default() };
    let data = simulate_dataset(&design, source.as_ref(), derive_seed(cfg.seed, "gst", &[]), &acq)?;
    w.write("gst/design.txt", design.to_text().as_bytes())?;
    w.write("gst/dataset.csv", data.to_csv(&design).as_bytes())?;

    let seed_gs = lgst(&design, &data)?;
    let gauge = GaugeOptions::default();
    let lgst_distance_to_source = gauge_optimize(&seed_gs, &truth, &gauge)?.0.max_gate_distance(&truth);
    let est = mle_optimize(&design, &data, &seed_gs, &MleOptions { parameterization: g.parameterization, ..Default::default() })?;
    if !est.converged {
        w.warnings.push(format!("MLE did not converge in {} iterations", est.iterations));
    }
    let violation = model_violation(&design, &data, &est.gate_set)?;
    let (to_target, _) = gauge_optimize(&est.gate_set, &GateSet::ideal(), &gauge)?;
    let (to_truth, _) = gauge_optimize(&est.gate_set, &truth, &gauge)?;
    let reported = GateSetEstimate { gate_set: to_target, ..est.clone() };
    w.write_json("gst/estimate.json", &EstimateFile::from(&reported))?;
    w.write("gst/violation.csv", violation.to_csv().as_bytes())?;

    let rb = RBConfig { seed: derive_seed(cfg.seed, "gst-rb", &[]), ..cfg.rb_config() };
    let sim_rb = rb_from_gateset(&to_truth, &rb, g.rb_bootstrap)?;
    let direct = rb_from_gateset(&truth, &rb, g.rb_bootstrap)?;
    let r_avg_rb = w
        .read_input("rb/fit.json")
        .and_then(|t| serde_json::from_str::<RbSummary>(&t).ok())
        .and_then(|s| s.r_avg);
    let summary = GstSummary {
        n_circuits: design.circuits.len(),
        lgst_distance_to_source,
        distance_to_source: to_truth.max_gate_distance(&truth),
        log_likelihood: est.log_likelihood,
        converged: est.converged,
        iterations: est.iterations,
        n_sigma: violation.n_sigma,
        r_sim: sim_rb.r_sim,
        r_direct: direct.r_sim,
        gates_per_clifford: sim_rb.gates_per_clifford,
        r_avg_rb,
        violation,
    };
    w.write_json("gst/summary.json", &summary)?;
    w.finish(cfg)?;
    Ok(summary)
}

fn fluctuation_results(cfg: &RunConfig, pulse: &PulseParams) -> Result<Vec<FluctuationResult>, PipelineError> {
    cfg.fluctuations
        .iter()
        .enumerate()
        .map(|(k, spec)| {
            let seed = derive_seed(cfg.seed, "fluctuation", &[k as u64]);
            Ok(fluctuation_epg(spec, &cfg.device, pulse, cfg.fluctuation_trials, seed)?)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DriftSummary {
    pub schedule: DriftSchedule,
    pub baseline_fit: DecayFit,
    pub drift_fit: DecayFit,
    pub baseline_reduced_chi2: f64,
    pub drift_reduced_chi2: f64,
    pub fluctuations: Vec<FluctuationResult>,
}

/// Channel-level RB with and without the configured drift schedule, plus
/// the fluctuation contributions of the configured specs.
pub fn cmd_drift(cfg: &RunConfig) -> Result<DriftSummary, PipelineError> {
    let schedule = cfg.drift.clone().ok_or_else(|| PipelineError::Schema("the drift command needs a `drift` schedule".into()))?;
    let mut w = StageWriter::new(&cfg.output_dir, "drift")?;
    let pulse = resolve_pulse(cfg, &mut w)?;
    let sim = cfg.transmon();
    let rb = cfg.rb_config();
    let seqs = gen_rb_sequences(&rb)?;
    let g = sim.gate_channel(&pulse)?;
    let idle = sim.idle_channel(pulse.duration())?;
    let baseline = ChannelGateSet::from_gates(&g.channel, &idle.channel);
    let drifting = inject_drift(&schedule, &sim, &pulse, &seqs)?;
    let base_records = run_sequences(&seqs, &baseline, rb.shots, &cfg.spam, rb.seed, "drift-baseline-shots")?;
    let drift_records = run_sequences(&seqs, &drifting, rb.shots, &cfg.spam, rb.seed, "drift-shots")?;
    w.write("drift/baseline_dataset.csv", records_csv(&base_records).as_bytes())?;
    w.write("drift/drift_dataset.csv", records_csv(&drift_records).as_bytes())?;
    let fit = |r: &[SequenceRecord]| -> Result<DecayFit, PipelineError> {
        let (m, y) = length_means(r, SequenceRecord::survival);
        crate::benchmark::fit_decay(&m, &y, crate::benchmark::DecayModel::Exponential).map_err(|e| PipelineError::Fit(e.to_string()))
    };
    let chi2 = |r: &[SequenceRecord]| reduced_chi2(r).map_err(|e| PipelineError::Fit(e.to_string()));
    let summary = DriftSummary {
        schedule,
        baseline_fit: fit(&base_records)?,
        drift_fit: fit(&drift_records)?,
        baseline_reduced_chi2: chi2(&base_records)?,
        drift_reduced_chi2: chi2(&drift_records)?,
        fluctuations: fluctuation_results(cfg, &pulse)?,
    };
    w.write_json("drift/summary.json", &summary)?;
    w.finish(cfg)?;
    Ok(summary)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BudgetReport {
    pub budget: crate::drift::ErrorBudget,
    /// Stage outputs that were looked for but not found.
    pub missing_outputs: Vec<String>,
}

/// Error budget from prior `rb`/`pb` outputs, the coherence limit of the
/// pulse, fluctuation contributions and an optional external input file.
pub fn cmd_budget(cfg: &RunConfig) -> Result<BudgetReport, PipelineError> {
    let mut w = StageWriter::new(&cfg.output_dir, "budget")?;
    let mut inputs = BudgetInputs::default();
    let mut missing = Vec::new();
    match w.read_input("rb/fit.json").map(|t| serde_json::from_str::<RbSummary>(&t)) {
        Some(Ok(s)) => inputs.r_avg = s.r_avg,
        Some(Err(e)) => return Err(PipelineError::Schema(format!("rb/fit.json: {e}"))),
        None => missing.push("rb/fit.json".to_string()),
    }
    match w.read_input("pb/fit.json").map(|t| serde_json::from_str::<PbSummary>(&t)) {
        Some(Ok(s)) => {
            inputs.r_prime_avg = Some(s.r_prime_avg);
            inputs.r_dec_avg = Some(s.r_dec_avg);
            // the rate-equation exponent also contains |2⟩ → |1⟩ return;
            // only the initial slope is error per gate
            inputs.gamma_avg = s.leakage.map(|l| l.leak_avg);
        }
        Some(Err(e)) => return Err(PipelineError::Schema(format!("pb/fit.json: {e}"))),
        None => missing.push("pb/fit.json".to_string()),
    }
    let pulse = resolve_pulse(cfg, &mut w)?;
    inputs.coherence_limit = Some(decoherence_error(&cfg.device, &pulse)?);
    for r in fluctuation_results(cfg, &pulse)? {
        match r.spec.kind {
            FluctuationKind::Amplitude => inputs.fluct_amp_epg = inputs.fluct_amp_epg.or(Some(r.epg)),
            FluctuationKind::Frequency => inputs.fluct_freq_epg = inputs.fluct_freq_epg.or(Some(r.epg)),
        }
    }
    if let Some(path) = &cfg.budget_inputs {
        let text = fs::read_to_string(path).map_err(|source| PipelineError::Io { path: path.clone(), source })?;
        w.inputs.push(FileDigest { path: path.display().to_string(), sha256: sha256_hex(text.as_bytes()) });
        let ext: BudgetInputs = serde_json::from_str(&text).map_err(|e| PipelineError::Schema(format!("{}: {e}", path.display())))?;
        inputs = BudgetInputs {
            r_avg: ext.r_avg.or(inputs.r_avg),
            r_prime_avg: ext.r_prime_avg.or(inputs.r_prime_avg),
            r_dec_avg: ext.r_dec_avg.or(inputs.r_dec_avg),
            gamma_avg: ext.gamma_avg.or(inputs.gamma_avg),
            coherence_limit: ext.coherence_limit.or(inputs.coherence_limit),
            fluct_amp_epg: ext.fluct_amp_epg.or(inputs.fluct_amp_epg),
            fluct_freq_epg: ext.fluct_freq_epg.or(inputs.fluct_freq_epg),
        };
    }
    let budget = assemble_budget(&inputs);
    if budget.inconsistent {
        w.warnings.push("residual coherent error is negative beyond the uncertainties".into());
    }
    let report = BudgetReport { budget, missing_outputs: missing };
    w.write_json("budget/budget.json", &report)?;
    w.write("budget/budget.txt", report.budget.to_table().as_bytes())?;
    w.finish(cfg)?;
    Ok(report)
}

/// Names of the datasets and summaries a full run produces, relative to the
/// output directory.
pub fn deterministic_outputs(dir: &Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        let Ok(entries) = fs::read_dir(&d) else { continue };
        for e in entries.flatten() {
            let p = e.path();
            if p.is_dir() {
                stack.push(p);
            } else if p.file_name().is_some_and(|n| n != MANIFEST_FILE) {
                out.push(p.strip_prefix(dir).expect("inside dir").to_path_buf());
            }
        }
    }
    out.sort();
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn minimal() -> String {
        format!(
            r#"{{"schema_version": 1, "seed": 3, "device": {}}}"#,
            serde_json::to_string(&DeviceParams::reference()).unwrap()
        )
    }

    #[test]
    fn minimal_config_gets_defaults() {
        let cfg = RunConfig::from_json(&minimal()).unwrap();
        assert_eq!(cfg.pulse, PulseChoice::Keyword(PulseKeyword::Calibrate));
        assert_eq!(cfg.benchmark.lengths, DEFAULT_LENGTHS.to_vec());
        assert_eq!(cfg.output_dir, PathBuf::from("out"));
    }

    #[test]
    fn unknown_keys_and_missing_seed_are_schema_errors() {
        let extra = minimal().replacen('{', r#"{"bogus": 1, "#, 1);
        assert_eq!(RunConfig::from_json(&extra).unwrap_err().exit_code(), 2);
        let no_seed = minimal().replace(r#""seed": 3, "#, "");
        assert_eq!(RunConfig::from_json(&no_seed).unwrap_err().exit_code(), 2);
        let no_device = r#"{"schema_version": 1, "seed": 3}"#;
        assert_eq!(RunConfig::from_json(no_device).unwrap_err().exit_code(), 2);
        let wrong_version = minimal().replace(r#""schema_version": 1"#, r#""schema_version": 9"#);
        assert_eq!(RunConfig::from_json(&wrong_version).unwrap_err().exit_code(), 2);
    }

    #[test]
    fn empty_length_list_is_rejected() {
        let mut cfg = RunConfig::from_json(&minimal()).unwrap();
        cfg.benchmark.lengths.clear();
        assert_eq!(cfg.validate().unwrap_err().exit_code(), 2);
    }

    #[test]
    fn explicit_pulse_round_trips() {
        let mut cfg = RunConfig::new(DeviceParams::reference(), 5);
        cfg.pulse = PulseChoice::Params(PulseParams::nominal_x90(20e-9));
        cfg.gst.source = GstSourceConfig::Model { over_rotation: 1e-3, depolarization: 5e-4, prep_error: 0.0, meas_error: 0.0 };
        let back = RunConfig::from_json(&cfg.to_json()).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.hash(), cfg.hash());
        let moved = RunConfig { output_dir: "elsewhere".into(), ..cfg.clone() };
        assert_eq!(moved.hash(), cfg.hash());
    }

    #[test]
    fn overrides_change_hash_and_shots() {
        let mut cfg = RunConfig::new(DeviceParams::reference(), 5);
        let h = cfg.hash();
        cfg.apply(&Overrides { seed: Some(6), shots: Some(100), output_dir: None }).unwrap();
        assert_ne!(cfg.hash(), h);
        assert_eq!(cfg.benchmark.shots, 100);
        assert_eq!(cfg.gst.shots, 100);
    }

    #[test]
    fn stage_seed_depends_on_master_seed() {
        let a = RunConfig::new(DeviceParams::reference(), 1).rb_config().seed;
        let b = RunConfig::new(DeviceParams::reference(), 2).rb_config().seed;
        assert_ne!(a, b);
    }

    #[test]
    fn sha256_of_empty_input() {
        assert_eq!(sha256_hex(b""), "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855");
    }
}
