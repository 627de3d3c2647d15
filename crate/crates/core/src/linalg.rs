//! Small dense linear-algebra helpers shared by the simulator and the
//! tomography code.

use nalgebra::{Complex, SMatrix};

pub type C64 = Complex<f64>;

#[inline]
pub fn c(re: f64, im: f64) -> C64 {
    Complex::new(re, im)
}

/// Matrix exponential by scaling and squaring with a truncated Taylor series.
///
/// The simulator only exponentiates small generators (`‖A‖ ≲ 0.1` per step),
/// so the scaling loop rarely runs; the 1-norm bound keeps the series error
/// below double precision regardless.
pub fn expm<const N: usize>(a: &SMatrix<C64, N, N>) -> SMatrix<C64, N, N> {
    let norm = one_norm(a);
    let mut squarings = 0u32;
    let mut scale = 1.0;
    while norm * scale > 0.25 {
        scale *= 0.5;
        squarings += 1;
    }
    let scaled = a * C64::new(scale, 0.0);
    let mut term = SMatrix::<C64, N, N>::identity();
    let mut sum = term;
    for k in 1..=14 {
        term = term * scaled * C64::new(1.0 / k as f64, 0.0);
        sum += term;
        if one_norm(&term) < 1e-18 {
            break;
        }
    }
    for _ in 0..squarings {
        sum = sum * sum;
    }
    sum
}

pub fn one_norm<const N: usize, const M: usize>(a: &SMatrix<C64, N, M>) -> f64 {
    (0..M)
        .map(|j| (0..N).map(|i| a[(i, j)].norm()).sum::<f64>())
        .fold(0.0, f64::max)
}

/// Kronecker product `a ⊗ b` of two square matrices of the same size.
pub fn kron3(a: &SMatrix<C64, 3, 3>, b: &SMatrix<C64, 3, 3>) -> SMatrix<C64, 9, 9> {
    let mut out = SMatrix::<C64, 9, 9>::zeros();
    for i in 0..3 {
        for j in 0..3 {
            let aij = a[(i, j)];
            for k in 0..3 {
                for l in 0..3 {
                    out[(3 * i + k, 3 * j + l)] = aij * b[(k, l)];
                }
            }
        }
    }
    out
}

/// Column-stacking vectorization.
pub fn vec3(m: &SMatrix<C64, 3, 3>) -> SMatrix<C64, 9, 1> {
    let mut v = SMatrix::<C64, 9, 1>::zeros();
    for j in 0..3 {
        for i in 0..3 {
            v[3 * j + i] = m[(i, j)];
        }
    }
    v
}

pub fn unvec3(v: &SMatrix<C64, 9, 1>) -> SMatrix<C64, 3, 3> {
    let mut m = SMatrix::<C64, 3, 3>::zeros();
    for j in 0..3 {
        for i in 0..3 {
            m[(i, j)] = v[3 * j + i];
        }
    }
    m
}

pub fn frobenius<const N: usize, const M: usize>(a: &SMatrix<f64, N, M>) -> f64 {
    a.iter().map(|x| x * x).sum::<f64>().sqrt()
}
