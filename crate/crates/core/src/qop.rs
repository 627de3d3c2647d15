//! Operator algebra for qubits and qutrits: density matrices, Pauli transfer
//! matrices, fidelity and purity.
//!
//! Pauli transfer matrices (PTMs) use the normalized basis `{I, X, Y, Z}/√2`,
//! so the PTM of a unitary is a real orthogonal matrix and
//! `R_ij = Tr[P_i · E(P_j)]`. A qubit state is carried as its coordinate
//! vector `v_i = Tr[P_i ρ]`; a normalized state has `v_0 = 1/√2`.
//!
//! Leakage to the third transmon level is tracked beside the 4×4 qubit PTM as
//! two scalar rates instead of a full qutrit superoperator.

use std::f64::consts::FRAC_1_SQRT_2;

use nalgebra::{Matrix2, Matrix3, Matrix4, Matrix5, SMatrix, Vector4, Vector5};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::{c, C64};

pub type Mat2 = Matrix2<C64>;
pub type Mat3 = Matrix3<C64>;
/// Real 4×4 Pauli transfer matrix.
pub type Ptm = Matrix4<f64>;
/// Qubit coordinates in the normalized Pauli basis plus the |2⟩ population.
pub type LeakyState = Vector5<f64>;
/// 5×5 transfer matrix acting on [`LeakyState`].
pub type LeakyTransfer = Matrix5<f64>;

/// Trace tolerance applied to density matrices produced by the integrators.
pub const TRACE_TOL: f64 = 1e-9;
/// Smallest admissible eigenvalue of a density matrix or Choi matrix.
pub const POSITIVITY_TOL: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum QopError {
    #[error("map is not linear: deviation {deviation:.3e}")]
    NonLinearMap { deviation: f64 },
    #[error("trace {trace} deviates from 1")]
    InvalidTrace { trace: f64 },
    #[error("matrix is not Hermitian (deviation {0:.3e})")]
    NotHermitian(f64),
    #[error("negative eigenvalue {0:.3e}")]
    NegativeEigenvalue(f64),
    #[error("effect eigenvalue {0} outside [0, 1]")]
    InvalidEffect(f64),
    #[error("leakage probability {0} outside [0, 1]")]
    InvalidLeakage(f64),
}

/// The normalized Pauli basis `{I, X, Y, Z}/√2`.
pub fn pauli_basis() -> [Mat2; 4] {
    let s = FRAC_1_SQRT_2;
    [
        Mat2::new(c(s, 0.0), c(0.0, 0.0), c(0.0, 0.0), c(s, 0.0)),
        Mat2::new(c(0.0, 0.0), c(s, 0.0), c(s, 0.0), c(0.0, 0.0)),
        Mat2::new(c(0.0, 0.0), c(0.0, -s), c(0.0, s), c(0.0, 0.0)),
        Mat2::new(c(s, 0.0), c(0.0, 0.0), c(0.0, 0.0), c(-s, 0.0)),
    ]
}

/// Unnormalized Pauli matrices σx, σy, σz.
pub fn sigma() -> [Mat2; 3] {
    let b = pauli_basis();
    let r2 = c(std::f64::consts::SQRT_2, 0.0);
    [b[1] * r2, b[2] * r2, b[3] * r2]
}

fn hs_inner(a: &Mat2, b: &Mat2) -> C64 {
    (a.adjoint() * b).trace()
}

/// Real Pauli coordinates of a Hermitian 2×2 matrix.
pub fn to_pauli_vector(m: &Mat2) -> Vector4<f64> {
    let b = pauli_basis();
    Vector4::from_fn(|i, _| hs_inner(&b[i], m).re)
}

pub fn from_pauli_vector(v: &Vector4<f64>) -> Mat2 {
    let b = pauli_basis();
    (0..4).fold(Mat2::zeros(), |acc, i| acc + b[i] * c(v[i], 0.0))
}

/// Coordinates of the pure state with Bloch vector `(x, y, z)`.
pub fn bloch_state(x: f64, y: f64, z: f64) -> Vector4<f64> {
    Vector4::new(1.0, x, y, z) * FRAC_1_SQRT_2
}

pub fn ket_projector2(a: C64, b: C64) -> Mat2 {
    let v = nalgebra::Vector2::new(a, b);
    v * v.adjoint()
}

pub fn ket_projector3(a: C64, b: C64, d: C64) -> Mat3 {
    let v = nalgebra::Vector3::new(a, b, d);
    v * v.adjoint()
}

fn hermiticity_defect<const D: usize>(m: &SMatrix<C64, D, D>) -> f64 {
    (m - m.adjoint()).iter().map(|z| z.norm()).fold(0.0, f64::max)
}

fn min_eigenvalue<const D: usize>(m: &SMatrix<C64, D, D>) -> f64 {
    let h = (m + m.adjoint()) * c(0.5, 0.0);
    let dynamic = nalgebra::DMatrix::from_fn(D, D, |i, j| h[(i, j)]);
    dynamic.symmetric_eigenvalues().iter().cloned().fold(f64::INFINITY, f64::min)
}

/// `Tr[ρ²]` of a qubit or qutrit density matrix.
pub fn purity<const D: usize>(rho: &SMatrix<C64, D, D>) -> Result<f64, QopError> {
    let tr = rho.trace();
    if (tr.re - 1.0).abs() > 1e-6 || tr.im.abs() > 1e-6 {
        return Err(QopError::InvalidTrace { trace: tr.re });
    }
    Ok(rho.iter().map(|z| z.norm_sqr()).sum())
}

/// A validated qutrit density matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct DensityMatrix3 {
    elements: Mat3,
}

impl DensityMatrix3 {
    pub fn new(elements: Mat3) -> Result<Self, QopError> {
        let herm = hermiticity_defect(&elements);
        if herm > 1e-9 {
            return Err(QopError::NotHermitian(herm));
        }
        let tr = elements.trace().re;
        if (tr - 1.0).abs() > TRACE_TOL {
            return Err(QopError::InvalidTrace { trace: tr });
        }
        let min = min_eigenvalue(&elements);
        if min < -POSITIVITY_TOL {
            return Err(QopError::NegativeEigenvalue(min));
        }
        Ok(Self { elements })
    }

    pub fn ground() -> Self {
        Self::basis(0)
    }

    pub fn basis(level: usize) -> Self {
        let mut m = Mat3::zeros();
        m[(level, level)] = c(1.0, 0.0);
        Self { elements: m }
    }

    /// Embeds a qubit density matrix in the {|0⟩, |1⟩} block.
    pub fn from_qubit(rho: &Mat2) -> Result<Self, QopError> {
        Self::new(embed_qubit(rho))
    }

    pub fn matrix(&self) -> &Mat3 {
        &self.elements
    }

    pub fn into_matrix(self) -> Mat3 {
        self.elements
    }

    pub fn population(&self, level: usize) -> f64 {
        self.elements[(level, level)].re
    }

    pub fn purity(&self) -> f64 {
        self.elements.iter().map(|z| z.norm_sqr()).sum()
    }

    /// Unnormalized 2×2 block on the qubit subspace.
    pub fn qubit_block(&self) -> Mat2 {
        self.elements.fixed_view::<2, 2>(0, 0).into_owned()
    }
}

/// `⟨2|ρ|2⟩`.
pub fn leak_population(rho: &DensityMatrix3) -> f64 {
    rho.population(2)
}

pub fn embed_qubit(m: &Mat2) -> Mat3 {
    let mut out = Mat3::zeros();
    out.fixed_view_mut::<2, 2>(0, 0).copy_from(m);
    out
}

/// A two-outcome POVM element `0 ⪯ E ⪯ I`.
#[derive(Debug, Clone, PartialEq)]
pub struct MeasurementEffect {
    effect: Mat2,
}

impl MeasurementEffect {
    pub fn new(effect: Mat2) -> Result<Self, QopError> {
        let herm = hermiticity_defect(&effect);
        if herm > 1e-9 {
            return Err(QopError::NotHermitian(herm));
        }
        let h = (effect + effect.adjoint()) * c(0.5, 0.0);
        for ev in h.symmetric_eigenvalues().iter() {
            if *ev < -POSITIVITY_TOL || *ev > 1.0 + POSITIVITY_TOL {
                return Err(QopError::InvalidEffect(*ev));
            }
        }
        Ok(Self { effect })
    }

    pub fn ground_projector() -> Self {
        Self { effect: ket_projector2(c(1.0, 0.0), c(0.0, 0.0)) }
    }

    pub fn matrix(&self) -> &Mat2 {
        &self.effect
    }

    pub fn pauli_vector(&self) -> Vector4<f64> {
        to_pauli_vector(&self.effect)
    }
}

/// Qubit operation in Pauli-transfer-matrix form with leakage bookkeeping.
///
/// `ptm` is the map restricted to the qubit subspace. It is trace-decreasing
/// when population leaves to |2⟩; `leak_in` is the mean leaked fraction for a
/// qubit input and `leak_out` the fraction of |2⟩ population returned per
/// application (re-entering as |1⟩).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QubitChannel {
    pub ptm: Ptm,
    pub leak_in: f64,
    pub leak_out: f64,
}

impl QubitChannel {
    pub fn new(ptm: Ptm, leak_in: f64, leak_out: f64) -> Result<Self, QopError> {
        for p in [leak_in, leak_out] {
            if !(0.0..=1.0).contains(&p) {
                return Err(QopError::InvalidLeakage(p));
            }
        }
        Ok(Self { ptm, leak_in, leak_out })
    }

    pub fn from_ptm(ptm: Ptm) -> Self {
        Self { ptm, leak_in: 0.0, leak_out: 0.0 }
    }

    pub fn identity() -> Self {
        Self::from_ptm(Ptm::identity())
    }

    pub fn from_unitary(u: &Mat2) -> Self {
        let b = pauli_basis();
        let ptm = Ptm::from_fn(|i, j| hs_inner(&b[i], &(u * b[j] * u.adjoint())).re);
        Self::from_ptm(ptm)
    }

    /// `ρ → (1−q)ρ + q·I/2`.
    pub fn depolarizing(q: f64) -> Self {
        Self::from_ptm(Ptm::from_diagonal(&Vector4::new(1.0, 1.0 - q, 1.0 - q, 1.0 - q)))
    }

    /// Amplitude damping plus pure dephasing for an idle of duration `t`.
    pub fn thermal_idle(t: f64, t1: f64, t2: f64) -> Self {
        let e1 = (-t / t1).exp();
        let e2 = (-t / t2).exp();
        let mut ptm = Ptm::from_diagonal(&Vector4::new(1.0, e2, e2, e1));
        ptm[(3, 0)] = 1.0 - e1;
        Self::from_ptm(ptm)
    }

    /// `self` followed by `next`.
    pub fn then(&self, next: &QubitChannel) -> QubitChannel {
        let t = next.leaky_transfer() * self.leaky_transfer();
        let ptm = t.fixed_view::<4, 4>(0, 0).into_owned();
        QubitChannel {
            ptm,
            leak_in: (1.0 - ptm[(0, 0)]).clamp(0.0, 1.0),
            leak_out: (1.0 - t[(4, 4)]).clamp(0.0, 1.0),
        }
    }

    pub fn apply(&self, v: &Vector4<f64>) -> Vector4<f64> {
        self.ptm * v
    }

    /// Applies the channel to an arbitrary (possibly non-Hermitian) 2×2 matrix.
    pub fn apply_to_matrix(&self, m: &Mat2) -> Mat2 {
        let b = pauli_basis();
        let coords: Vec<C64> = b.iter().map(|p| hs_inner(p, m)).collect();
        let mut out = Mat2::zeros();
        for i in 0..4 {
            let mut ci = c(0.0, 0.0);
            for (j, cj) in coords.iter().enumerate() {
                ci += *cj * self.ptm[(i, j)];
            }
            out += b[i] * ci;
        }
        out
    }

    pub fn is_trace_preserving(&self, tol: f64) -> bool {
        (self.ptm[(0, 0)] - 1.0).abs() <= tol && (1..4).all(|j| self.ptm[(0, j)].abs() <= tol)
    }

    /// Choi matrix `Σ_ab |a⟩⟨b| ⊗ E(|a⟩⟨b|)`.
    pub fn choi(&self) -> Matrix4<C64> {
        let mut j = Matrix4::<C64>::zeros();
        for a in 0..2 {
            for b in 0..2 {
                let mut e = Mat2::zeros();
                e[(a, b)] = c(1.0, 0.0);
                let out = self.apply_to_matrix(&e);
                for k in 0..2 {
                    for l in 0..2 {
                        j[(2 * a + k, 2 * b + l)] = out[(k, l)];
                    }
                }
            }
        }
        j
    }

    pub fn choi_min_eigenvalue(&self) -> f64 {
        min_eigenvalue(&self.choi())
    }

    pub fn is_completely_positive(&self, tol: f64) -> bool {
        self.choi_min_eigenvalue() >= -tol
    }

    /// 5×5 transfer on (qubit Pauli coordinates, |2⟩ population).
    pub fn leaky_transfer(&self) -> LeakyTransfer {
        let mut t = LeakyTransfer::zeros();
        t.fixed_view_mut::<4, 4>(0, 0).copy_from(&self.ptm);
        // Returned population enters as |1⟩⟨1| = (I − Z)/2.
        t[(0, 4)] = self.leak_out * FRAC_1_SQRT_2;
        t[(3, 4)] = -self.leak_out * FRAC_1_SQRT_2;
        // Lost qubit trace goes to |2⟩: √2 (v0 − (R v)_0).
        for j in 0..4 {
            let kron = if j == 0 { 1.0 } else { 0.0 };
            t[(4, j)] = std::f64::consts::SQRT_2 * (kron - self.ptm[(0, j)]);
        }
        t[(4, 4)] = 1.0 - self.leak_out;
        t
    }
}

/// Embeds a unitary 4×4 PTM into a leak-free 5×5 transfer.
pub fn leak_free_transfer(ptm: &Ptm) -> LeakyTransfer {
    let mut t = LeakyTransfer::identity();
    t.fixed_view_mut::<4, 4>(0, 0).copy_from(ptm);
    t
}

pub fn leaky_state(v: &Vector4<f64>, p2: f64) -> LeakyState {
    LeakyState::new(v[0], v[1], v[2], v[3], p2)
}

/// Ground-state population `⟨0|ρ|0⟩` from leaky coordinates.
pub fn ground_population(s: &LeakyState) -> f64 {
    (s[0] + s[3]) * FRAC_1_SQRT_2
}

/// Tomographs a linear map on 2×2 matrices into a PTM.
///
/// The map is probed on the Pauli basis; linearity is then checked on mixed
/// physical inputs and any deviation above `1e-10` is rejected.
pub fn ptm_from_map<F>(apply: F) -> Result<QubitChannel, QopError>
where
    F: Fn(&Mat2) -> Mat2,
{
    let b = pauli_basis();
    let images: Vec<Mat2> = b.iter().map(&apply).collect();
    let ptm = Ptm::from_fn(|i, j| hs_inner(&b[i], &images[j]).re);
    let channel = QubitChannel::from_ptm(ptm);

    let probes = [
        ket_projector2(c(1.0, 0.0), c(0.0, 0.0)),
        ket_projector2(c(FRAC_1_SQRT_2, 0.0), c(0.0, FRAC_1_SQRT_2)),
        ket_projector2(c(0.6, 0.0), c(0.48, 0.64)),
    ];
    let mut deviation = 0.0f64;
    for (k, rho) in probes.iter().enumerate() {
        let other = &probes[(k + 1) % probes.len()];
        let mix = rho * c(0.3, 0.0) + other * c(0.7, 0.0);
        let direct = apply(&mix);
        let superposed = apply(rho) * c(0.3, 0.0) + apply(other) * c(0.7, 0.0);
        deviation = deviation.max((direct - superposed).norm());
        let predicted = channel.apply_to_matrix(rho);
        deviation = deviation.max((apply(rho) - predicted).norm());
    }
    if deviation > 1e-10 {
        return Err(QopError::NonLinearMap { deviation });
    }
    Ok(channel)
}

/// Average gate fidelity `(Tr[R_idealᵀ R]/2 + 1)/3` of a qubit channel
/// against a unitary target.
pub fn average_gate_fidelity(r: &QubitChannel, ideal: &QubitChannel) -> f64 {
    ((ideal.ptm.transpose() * r.ptm).trace() / 2.0 + 1.0) / 3.0
}

/// Average gate fidelity of a possibly non-unitary (leaky) 2×2 operator `u`
/// against a unitary target `v`: `(Tr[u†u] + |Tr[v†u]|²)/6`.
pub fn leaky_unitary_fidelity(u: &Mat2, v: &Mat2) -> f64 {
    let overlap = (v.adjoint() * u).trace().norm_sqr();
    let norm = (u.adjoint() * u).trace().re;
    (norm + overlap) / 6.0
}

/// `exp(−i θ n·σ/2)` for a unit axis `n`.
pub fn rotation(axis: [f64; 3], theta: f64) -> Mat2 {
    let s = sigma();
    let gen = s[0] * c(axis[0], 0.0) + s[1] * c(axis[1], 0.0) + s[2] * c(axis[2], 0.0);
    let (sn, cs) = (theta / 2.0).sin_cos();
    Mat2::identity() * c(cs, 0.0) - gen * c(0.0, sn)
}

pub fn rx(theta: f64) -> Mat2 {
    rotation([1.0, 0.0, 0.0], theta)
}

pub fn ry(theta: f64) -> Mat2 {
    rotation([0.0, 1.0, 0.0], theta)
}

pub fn rz(theta: f64) -> Mat2 {
    rotation([0.0, 0.0, 1.0], theta)
}

/// Distance between two unitaries modulo a global phase.
pub fn phase_insensitive_distance(a: &Mat2, b: &Mat2) -> f64 {
    let overlap = (a.adjoint() * b).trace();
    if overlap.norm() < 1e-300 {
        return (a - b).norm();
    }
    let phase = overlap / overlap.norm();
    (a * phase - b).norm()
}
