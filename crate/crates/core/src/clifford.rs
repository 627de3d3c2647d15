//! Single-qubit Clifford group and its compilation into physical π/2 pulses
//! plus virtual-Z frame updates.
//!
//! Every physical pulse is the same calibrated `X_{π/2}`. The other three
//! quarter turns are produced by sandwiching it between frame updates:
//!
//! ```text
//!  Y90 = [VZ(−π/2), X90, VZ(π/2)]
//! −X90 = [VZ(π),    X90, VZ(−π)]
//! −Y90 = [VZ(π/2),  X90, VZ(−π/2)]
//! ```
//!
//! Items are listed in time order and `VZ(θ)` acts as `Rz(θ)`. Each Clifford
//! is compiled from the shortest word over {X90, −X90, Y90, −Y90}; the
//! identity costs one idle slot of the same length as a pulse.

use std::f64::consts::{FRAC_PI_2, PI};
use std::fmt::Write as _;
use std::sync::OnceLock;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::qop::{phase_insensitive_distance, rx, rz, Mat2, Ptm, QubitChannel};

pub const GROUP_ORDER: usize = 24;
pub const IDENTITY: usize = 0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CliffordError {
    #[error("empty Clifford sequence")]
    EmptySequence,
    #[error("Clifford index {0} out of range")]
    BadIndex(usize),
    #[error("operation is not a single-qubit Clifford")]
    NotClifford,
}

/// Physical quarter-turn generators, in tie-break order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum QuarterTurn {
    X90,
    Xm90,
    Y90,
    Ym90,
}

impl QuarterTurn {
    pub const ALL: [QuarterTurn; 4] =
        [QuarterTurn::X90, QuarterTurn::Xm90, QuarterTurn::Y90, QuarterTurn::Ym90];

    pub fn unitary(self) -> Mat2 {
        match self {
            QuarterTurn::X90 => rx(FRAC_PI_2),
            QuarterTurn::Xm90 => rx(-FRAC_PI_2),
            QuarterTurn::Y90 => crate::qop::ry(FRAC_PI_2),
            QuarterTurn::Ym90 => crate::qop::ry(-FRAC_PI_2),
        }
    }

    /// Frame update applied before the physical pulse; the inverse follows it.
    pub fn frame_offset(self) -> f64 {
        match self {
            QuarterTurn::X90 => 0.0,
            QuarterTurn::Xm90 => PI,
            QuarterTurn::Y90 => -FRAC_PI_2,
            QuarterTurn::Ym90 => FRAC_PI_2,
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            QuarterTurn::X90 => "X90",
            QuarterTurn::Xm90 => "-X90",
            QuarterTurn::Y90 => "Y90",
            QuarterTurn::Ym90 => "-Y90",
        }
    }

    #[cfg(test)]
    fn swap_axes(self) -> QuarterTurn {
        match self {
            QuarterTurn::X90 => QuarterTurn::Y90,
            QuarterTurn::Xm90 => QuarterTurn::Ym90,
            QuarterTurn::Y90 => QuarterTurn::X90,
            QuarterTurn::Ym90 => QuarterTurn::Xm90,
        }
    }
}

/// One slot of a compiled program, in time order.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum PulseItem {
    /// The calibrated `X_{π/2}` drive, emitted in the current frame.
    Pulse,
    /// Zero-duration `Rz(θ)` realized as a frame update.
    VirtualZ(f64),
    /// Undriven slot of one pulse length.
    Idle,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct PulseProgram {
    pub items: Vec<PulseItem>,
}

impl PulseProgram {
    pub fn from_word(word: &[QuarterTurn]) -> Self {
        let mut program = PulseProgram::default();
        if word.is_empty() {
            program.items.push(PulseItem::Idle);
            return program;
        }
        for g in word {
            let off = g.frame_offset();
            program.push_frame(off);
            program.items.push(PulseItem::Pulse);
            program.push_frame(-off);
        }
        program
    }

    fn push_frame(&mut self, theta: f64) {
        if theta == 0.0 {
            return;
        }
        if let Some(PulseItem::VirtualZ(prev)) = self.items.last_mut() {
            *prev += theta;
            if *prev == 0.0 {
                self.items.pop();
            }
            return;
        }
        self.items.push(PulseItem::VirtualZ(theta));
    }

    /// Physical slots: pulses plus idles.
    pub fn pulse_count(&self) -> usize {
        self.items.iter().filter(|i| !matches!(i, PulseItem::VirtualZ(_))).count()
    }

    pub fn physical_pulses(&self) -> usize {
        self.items.iter().filter(|i| matches!(i, PulseItem::Pulse)).count()
    }

    /// Ideal operator of the program.
    pub fn unitary(&self) -> Mat2 {
        self.items.iter().fold(Mat2::identity(), |acc, item| {
            let step = match item {
                PulseItem::Pulse => rx(FRAC_PI_2),
                PulseItem::VirtualZ(theta) => rz(*theta),
                PulseItem::Idle => Mat2::identity(),
            };
            step * acc
        })
    }

    /// Channel of the program given realized pulse and idle channels.
    pub fn channel(&self, pulse: &QubitChannel, idle: &QubitChannel) -> QubitChannel {
        let mut out = QubitChannel::identity();
        for item in &self.items {
            out = match item {
                PulseItem::Pulse => out.then(pulse),
                PulseItem::VirtualZ(theta) => out.then(&QubitChannel::from_unitary(&rz(*theta))),
                PulseItem::Idle => out.then(idle),
            };
        }
        out
    }

    pub fn concat(&self, other: &PulseProgram) -> PulseProgram {
        let mut out = self.clone();
        for item in &other.items {
            match item {
                PulseItem::VirtualZ(theta) => out.push_frame(*theta),
                other => out.items.push(*other),
            }
        }
        out
    }
}

#[derive(Debug, Clone)]
pub struct CliffordElement {
    pub index: usize,
    pub unitary: Mat2,
    pub ptm: QubitChannel,
    /// Shortest generator word, lexicographic among ties.
    pub word: Vec<QuarterTurn>,
}

pub struct CliffordGroup {
    elements: Vec<CliffordElement>,
    /// `compose[a][b]`: `a` followed by `b`.
    compose: [[u8; GROUP_ORDER]; GROUP_ORDER],
    inverse: [u8; GROUP_ORDER],
    programs: Vec<PulseProgram>,
}

fn ptm_key(ptm: &Ptm) -> [i8; 16] {
    let mut key = [0i8; 16];
    for (k, v) in ptm.iter().enumerate() {
        key[k] = v.round() as i8;
    }
    key
}

impl CliffordGroup {
    fn build(generators: &[QuarterTurn; 4]) -> Self {
        let mut elements: Vec<CliffordElement> = vec![CliffordElement {
            index: 0,
            unitary: Mat2::identity(),
            ptm: QubitChannel::identity(),
            word: Vec::new(),
        }];
        let mut keys = vec![ptm_key(&elements[0].ptm.ptm)];
        let mut frontier = vec![0usize];
        while !frontier.is_empty() {
            let mut next = Vec::new();
            for &parent in &frontier {
                for &g in generators {
                    let u = g.unitary() * elements[parent].unitary;
                    let ptm = QubitChannel::from_unitary(&u);
                    let key = ptm_key(&ptm.ptm);
                    if keys.contains(&key) {
                        continue;
                    }
                    let mut word = elements[parent].word.clone();
                    word.push(g);
                    let index = elements.len();
                    keys.push(key);
                    elements.push(CliffordElement { index, unitary: u, ptm, word });
                    next.push(index);
                }
            }
            frontier = next;
        }
        assert_eq!(elements.len(), GROUP_ORDER, "quarter turns generate the Clifford group");

        let find = |u: &Mat2| -> usize {
            let key = ptm_key(&QubitChannel::from_unitary(u).ptm);
            keys.iter().position(|k| *k == key).expect("closed under composition")
        };
        let mut compose = [[0u8; GROUP_ORDER]; GROUP_ORDER];
        let mut inverse = [0u8; GROUP_ORDER];
        for a in 0..GROUP_ORDER {
            for b in 0..GROUP_ORDER {
                let idx = find(&(elements[b].unitary * elements[a].unitary));
                compose[a][b] = idx as u8;
                if idx == IDENTITY {
                    inverse[a] = b as u8;
                }
            }
        }
        let programs = elements.iter().map(|e| PulseProgram::from_word(&e.word)).collect();
        Self { elements, compose, inverse, programs }
    }

    pub fn elements(&self) -> &[CliffordElement] {
        &self.elements
    }

    pub fn element(&self, index: usize) -> &CliffordElement {
        &self.elements[index]
    }

    pub fn compose(&self, first: usize, then: usize) -> usize {
        self.compose[first][then] as usize
    }

    pub fn inverse(&self, index: usize) -> usize {
        self.inverse[index] as usize
    }

    pub fn program(&self, index: usize) -> &PulseProgram {
        &self.programs[index]
    }

    /// Index of the Clifford equal to `u` up to global phase.
    pub fn find(&self, u: &Mat2) -> Result<usize, CliffordError> {
        self.elements
            .iter()
            .position(|e| phase_insensitive_distance(&e.unitary, u) < 1e-8)
            .ok_or(CliffordError::NotClifford)
    }

    /// Composition of a time-ordered sequence.
    pub fn product(&self, sequence: &[usize]) -> usize {
        sequence.iter().fold(IDENTITY, |acc, &c| self.compose(acc, c))
    }
}

pub fn clifford_group() -> &'static CliffordGroup {
    static GROUP: OnceLock<CliffordGroup> = OnceLock::new();
    GROUP.get_or_init(|| CliffordGroup::build(&QuarterTurn::ALL))
}

pub fn compile(index: usize) -> Result<PulseProgram, CliffordError> {
    if index >= GROUP_ORDER {
        return Err(CliffordError::BadIndex(index));
    }
    Ok(clifford_group().program(index).clone())
}

/// The Clifford that returns a time-ordered sequence to the identity.
pub fn inverse_for(sequence: &[usize]) -> Result<usize, CliffordError> {
    if sequence.is_empty() {
        return Err(CliffordError::EmptySequence);
    }
    if let Some(&bad) = sequence.iter().find(|&&c| c >= GROUP_ORDER) {
        return Err(CliffordError::BadIndex(bad));
    }
    let group = clifford_group();
    Ok(group.inverse(group.product(sequence)))
}

/// Physical-pulse accounting over the 24 compiled Cliffords.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Census {
    pub counts: Vec<usize>,
    pub words: Vec<String>,
    pub histogram: Vec<usize>,
}

impl Census {
    pub fn total(&self) -> usize {
        self.counts.iter().sum()
    }

    pub fn mean(&self) -> f64 {
        self.total() as f64 / self.counts.len() as f64
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("clifford,pulse_count,word\n");
        for (i, (n, w)) in self.counts.iter().zip(&self.words).enumerate() {
            let _ = writeln!(out, "{i},{n},{w}");
        }
        out
    }
}

fn census_of(group: &CliffordGroup) -> Census {
    let counts: Vec<usize> = (0..GROUP_ORDER).map(|i| group.program(i).pulse_count()).collect();
    let words = group
        .elements()
        .iter()
        .map(|e| {
            if e.word.is_empty() {
                "I".to_string()
            } else {
                e.word.iter().map(|g| g.label()).collect::<Vec<_>>().join(" ")
            }
        })
        .collect();
    let max = counts.iter().copied().max().unwrap_or(0);
    let mut histogram = vec![0; max + 1];
    for &n in &counts {
        histogram[n] += 1;
    }
    Census { counts, words, histogram }
}

pub fn decomposition_census() -> Census {
    census_of(clifford_group())
}

/// Mean physical slots per compiled Clifford.
pub fn pulses_per_clifford() -> f64 {
    decomposition_census().mean()
}

/// Gates available for interleaving; each is one physical slot.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum InterleavedGate {
    I,
    Xhalf,
    Xneghalf,
    Yhalf,
    Yneghalf,
}

impl InterleavedGate {
    pub const ALL: [InterleavedGate; 5] = [
        InterleavedGate::I,
        InterleavedGate::Xhalf,
        InterleavedGate::Xneghalf,
        InterleavedGate::Yhalf,
        InterleavedGate::Yneghalf,
    ];

    pub fn unitary(self) -> Mat2 {
        match self {
            InterleavedGate::I => Mat2::identity(),
            InterleavedGate::Xhalf => QuarterTurn::X90.unitary(),
            InterleavedGate::Xneghalf => QuarterTurn::Xm90.unitary(),
            InterleavedGate::Yhalf => QuarterTurn::Y90.unitary(),
            InterleavedGate::Yneghalf => QuarterTurn::Ym90.unitary(),
        }
    }

    pub fn clifford_index(self) -> usize {
        clifford_group().find(&self.unitary()).expect("interleaved targets are Cliffords")
    }

    pub fn program(self) -> PulseProgram {
        match self {
            InterleavedGate::I => PulseProgram { items: vec![PulseItem::Idle] },
            InterleavedGate::Xhalf => PulseProgram::from_word(&[QuarterTurn::X90]),
            InterleavedGate::Xneghalf => PulseProgram::from_word(&[QuarterTurn::Xm90]),
            InterleavedGate::Yhalf => PulseProgram::from_word(&[QuarterTurn::Y90]),
            InterleavedGate::Yneghalf => PulseProgram::from_word(&[QuarterTurn::Ym90]),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            InterleavedGate::I => "I",
            InterleavedGate::Xhalf => "Xhalf",
            InterleavedGate::Xneghalf => "Xneghalf",
            InterleavedGate::Yhalf => "Yhalf",
            InterleavedGate::Yneghalf => "Yneghalf",
        }
    }
}

impl std::str::FromStr for InterleavedGate {
    type Err = CliffordError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        InterleavedGate::ALL.into_iter().find(|g| g.name() == s).ok_or(CliffordError::NotClifford)
    }
}

/// Check a unitary for Clifford membership by conjugating the Paulis.
pub fn is_clifford(u: &Mat2) -> bool {
    let ptm = QubitChannel::from_unitary(u).ptm;
    ptm.iter().all(|v| (v.abs() - v.abs().round()).abs() < 1e-9)
        && (0..4).all(|j| (0..4).map(|i| ptm[(i, j)].abs().round()).sum::<f64>() == 1.0)
}

#[cfg(test)]
fn swapped_group() -> CliffordGroup {
    let gens = QuarterTurn::ALL.map(QuarterTurn::swap_axes);
    CliffordGroup::build(&gens)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::c;
    use crate::qop::{rotation, sigma};
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    // Independent oracle: BFS over generator words on raw unitaries modulo
    // global phase, without the group tables.
    fn oracle_distances() -> Vec<(Mat2, usize)> {
        let gens: Vec<Mat2> = QuarterTurn::ALL.iter().map(|g| g.unitary()).collect();
        let mut seen: Vec<(Mat2, usize)> = vec![(Mat2::identity(), 0)];
        let mut frontier = vec![Mat2::identity()];
        let mut depth = 0;
        while !frontier.is_empty() {
            depth += 1;
            let mut next = Vec::new();
            for u in &frontier {
                for g in &gens {
                    let v = g * u;
                    if seen.iter().all(|(w, _)| phase_insensitive_distance(w, &v) > 1e-9) {
                        seen.push((v, depth));
                        next.push(v);
                    }
                }
            }
            frontier = next;
        }
        seen
    }

    #[test]
    fn group_has_24_distinct_elements() {
        let g = clifford_group();
        assert_eq!(g.elements().len(), 24);
        for a in 0..24 {
            for b in (a + 1)..24 {
                assert!((g.element(a).ptm.ptm - g.element(b).ptm.ptm).abs().max() > 0.5);
            }
        }
        assert!(g.element(IDENTITY).word.is_empty());
    }

    #[test]
    fn elements_permute_paulis() {
        let paulis = sigma();
        for e in clifford_group().elements() {
            assert!(is_clifford(&e.unitary));
            for p in &paulis {
                let image = e.unitary * p * e.unitary.adjoint();
                let hit = paulis.iter().any(|q| (image - q).norm() < 1e-12 || (image + q).norm() < 1e-12);
                assert!(hit);
            }
        }
        assert!(!is_clifford(&rotation([0.0, 0.0, 1.0], 0.3)));
    }

    #[test]
    fn group_axioms_exhaustive() {
        let g = clifford_group();
        for a in 0..24 {
            assert_eq!(g.compose(a, IDENTITY), a);
            assert_eq!(g.compose(IDENTITY, a), a);
            assert_eq!(g.compose(a, g.inverse(a)), IDENTITY);
            assert_eq!(g.compose(g.inverse(a), a), IDENTITY);
            for b in 0..24 {
                let expect = g.element(b).unitary * g.element(a).unitary;
                assert!(phase_insensitive_distance(&g.element(g.compose(a, b)).unitary, &expect) < 1e-10);
            }
        }
    }

    #[test]
    fn every_program_realizes_its_clifford() {
        let g = clifford_group();
        for e in g.elements() {
            let program = compile(e.index).unwrap();
            assert!(phase_insensitive_distance(&program.unitary(), &e.unitary) < 1e-10);
            let channel = program.channel(
                &QubitChannel::from_unitary(&rx(FRAC_PI_2)),
                &QubitChannel::identity(),
            );
            assert!((channel.ptm - e.ptm.ptm).abs().max() < 1e-10);
        }
    }

    #[test]
    fn program_examples() {
        let g = clifford_group();
        let id = compile(IDENTITY).unwrap();
        assert_eq!(id.physical_pulses(), 0);
        assert_eq!(id.items, vec![PulseItem::Idle]);
        let x90 = g.find(&rx(FRAC_PI_2)).unwrap();
        assert_eq!(compile(x90).unwrap().items, vec![PulseItem::Pulse]);
        assert!(compile(24).is_err());
    }

    #[test]
    fn census_matches_bfs_oracle() {
        let census = decomposition_census();
        let oracle = oracle_distances();
        assert_eq!(oracle.len(), 24);
        let g = clifford_group();
        for (u, depth) in &oracle {
            let idx = g.find(u).unwrap();
            let expected = if *depth == 0 { 1 } else { *depth };
            assert_eq!(census.counts[idx], expected);
        }
        let oracle_sum: usize = oracle.iter().map(|(_, d)| (*d).max(1)).sum();
        assert_eq!(oracle_sum, 53);
        assert_eq!(census.total(), 53);
        assert_abs_diff_eq!(census.mean(), 53.0 / 24.0, epsilon = 1e-15);
        assert_eq!(census.histogram, vec![0, 5, 10, 8, 1]);
    }

    #[test]
    fn census_invariant_under_axis_swap() {
        let swapped = census_of(&swapped_group());
        let g = clifford_group();
        let base = decomposition_census();
        assert_eq!(swapped.histogram, base.histogram);
        // the x↔y swap is conjugation by a π rotation about (x+y)/√2
        let s = std::f64::consts::FRAC_1_SQRT_2;
        let w = rotation([s, s, 0.0], PI);
        let sg = swapped_group();
        for e in sg.elements() {
            let mapped = g.find(&(w * e.unitary * w.adjoint())).unwrap();
            assert_eq!(swapped.counts[e.index], base.counts[mapped]);
        }
    }

    #[test]
    fn census_csv_has_header_and_rows() {
        let csv = decomposition_census().to_csv();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "clifford,pulse_count,word");
        assert_eq!(lines.len(), 25);
        assert_eq!(lines[1], "0,1,I");
    }

    #[test]
    fn inverse_examples() {
        let g = clifford_group();
        assert_eq!(inverse_for(&[]), Err(CliffordError::EmptySequence));
        for c in 0..24 {
            assert_eq!(inverse_for(&[c]).unwrap(), g.inverse(c));
            assert_eq!(inverse_for(&[c, g.inverse(c)]).unwrap(), IDENTITY);
        }
    }

    #[test]
    fn interleaved_gates_are_single_slot_cliffords() {
        for gate in InterleavedGate::ALL {
            let p = gate.program();
            assert_eq!(p.pulse_count(), 1);
            let idx = gate.clifford_index();
            assert!(phase_insensitive_distance(&p.unitary(), &clifford_group().element(idx).unitary) < 1e-10);
            assert_eq!(gate.name().parse::<InterleavedGate>().unwrap(), gate);
        }
        assert!("Z".parse::<InterleavedGate>().is_err());
    }

    #[test]
    fn frame_updates_are_merged() {
        let p = PulseProgram::from_word(&[QuarterTurn::Y90, QuarterTurn::Y90]);
        assert_eq!(
            p.items,
            vec![PulseItem::VirtualZ(-FRAC_PI_2), PulseItem::Pulse, PulseItem::Pulse, PulseItem::VirtualZ(FRAC_PI_2)]
        );
        let q = PulseProgram::from_word(&[QuarterTurn::X90]).concat(&PulseProgram::from_word(&[QuarterTurn::Ym90]));
        assert!(phase_insensitive_distance(&q.unitary(), &(QuarterTurn::Ym90.unitary() * rx(FRAC_PI_2))) < 1e-12);
    }

    proptest! {
        #[test]
        fn random_sequences_compose_to_identity(seq in proptest::collection::vec(0usize..24, 1..100)) {
            let inv = inverse_for(&seq).unwrap();
            let g = clifford_group();
            let mut ptm = Ptm::identity();
            for &c in seq.iter().chain(std::iter::once(&inv)) {
                ptm = g.element(c).ptm.ptm * ptm;
            }
            prop_assert!((ptm - Ptm::identity()).abs().max() < 1e-8);
        }

        #[test]
        fn closure_on_random_pairs(a in 0usize..24, b in 0usize..24) {
            let g = clifford_group();
            let u = g.element(b).unitary * g.element(a).unitary;
            prop_assert!(g.find(&u).is_ok());
            prop_assert!(is_clifford(&(u * c(1.0, 0.0))));
        }
    }
}
