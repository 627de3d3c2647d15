//! Bounded Levenberg-Marquardt for small dense least-squares problems.

use nalgebra::{DMatrix, DVector};

#[derive(Debug, Clone, Copy)]
pub struct LmOptions {
    pub max_iter: usize,
    /// Relative step / cost tolerance.
    pub tol: f64,
}

impl Default for LmOptions {
    fn default() -> Self {
        Self { max_iter: 500, tol: 1e-15 }
    }
}

#[derive(Debug, Clone)]
pub struct LmResult {
    pub params: DVector<f64>,
    pub residuals: DVector<f64>,
    /// Sum of squared residuals.
    pub rss: f64,
    pub iterations: usize,
    pub converged: bool,
    /// `(JᵀJ)⁻¹` at the optimum, when non-singular.
    pub jtj_inverse: Option<DMatrix<f64>>,
}

impl LmResult {
    /// Parameter standard errors scaled by the residual variance.
    pub fn standard_errors(&self) -> Option<DVector<f64>> {
        let n = self.residuals.len();
        let k = self.params.len();
        if n <= k {
            return None;
        }
        let s2 = self.rss / (n - k) as f64;
        self.jtj_inverse
            .as_ref()
            .map(|inv| DVector::from_fn(k, |i, _| (inv[(i, i)].max(0.0) * s2).sqrt()))
    }
}

fn clamp(x: &mut DVector<f64>, lower: &[f64], upper: &[f64]) {
    for i in 0..x.len() {
        x[i] = x[i].clamp(lower[i], upper[i]);
    }
}

/// Minimizes `‖r(x)‖²` within the box `[lower, upper]` by projected damped
/// Gauss-Newton steps.
pub fn levenberg_marquardt<R, J>(
    residual: R,
    jacobian: J,
    x0: DVector<f64>,
    lower: &[f64],
    upper: &[f64],
    opts: LmOptions,
) -> LmResult
where
    R: Fn(&DVector<f64>) -> DVector<f64>,
    J: Fn(&DVector<f64>) -> DMatrix<f64>,
{
    let k = x0.len();
    let mut x = x0;
    clamp(&mut x, lower, upper);
    let mut r = residual(&x);
    let mut rss = r.norm_squared();
    let mut lambda = 1e-3;
    let mut converged = false;
    let mut iterations = 0;
    for it in 0..opts.max_iter {
        iterations = it + 1;
        let jac = jacobian(&x);
        let jtj = jac.transpose() * &jac;
        let grad = jac.transpose() * &r;
        if grad.amax() == 0.0 {
            converged = true;
            break;
        }
        let mut accepted = false;
        for _ in 0..40 {
            let mut a = jtj.clone();
            for i in 0..k {
                a[(i, i)] += lambda * jtj[(i, i)].max(1e-300);
            }
            let step = match a.cholesky() {
                Some(ch) => ch.solve(&(-&grad)),
                None => {
                    lambda *= 10.0;
                    continue;
                }
            };
            let mut trial = &x + &step;
            clamp(&mut trial, lower, upper);
            let rt = residual(&trial);
            let rss_t = rt.norm_squared();
            if rss_t.is_finite() && rss_t <= rss {
                let moved = (&trial - &x).norm();
                let scale = x.norm() + opts.tol;
                let gain = rss - rss_t;
                x = trial;
                r = rt;
                rss = rss_t;
                lambda = (lambda * 0.3).max(1e-15);
                accepted = true;
                if moved <= opts.tol * scale || gain <= opts.tol * rss.max(1e-300) {
                    converged = true;
                }
                break;
            }
            lambda *= 10.0;
        }
        if !accepted {
            // no descent direction left at machine precision
            converged = true;
            break;
        }
        if converged {
            break;
        }
    }
    let jac = jacobian(&x);
    let jtj_inverse = (jac.transpose() * &jac).try_inverse();
    LmResult { params: x, residuals: r, rss, iterations, converged, jtj_inverse }
}

/// Golden-section minimization of a unimodal function on `[a, b]`.
pub fn golden_section<F: Fn(f64) -> f64>(f: F, mut a: f64, mut b: f64, tol: f64) -> f64 {
    let g = (5f64.sqrt() - 1.0) / 2.0;
    let mut c = b - g * (b - a);
    let mut d = a + g * (b - a);
    let mut fc = f(c);
    let mut fd = f(d);
    while (b - a).abs() > tol {
        if fc < fd {
            b = d;
            d = c;
            fd = fc;
            c = b - g * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + g * (b - a);
            fd = f(d);
        }
    }
    0.5 * (a + b)
}

/// Sample standard deviation.
pub fn std_dev(xs: &[f64]) -> f64 {
    if xs.len() < 2 {
        return 0.0;
    }
    let mean = xs.iter().sum::<f64>() / xs.len() as f64;
    (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (xs.len() - 1) as f64).sqrt()
}

pub fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return f64::NAN;
    }
    xs.iter().sum::<f64>() / xs.len() as f64
}
