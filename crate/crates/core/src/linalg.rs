//! Dense linear-algebra helpers shared by the kernel modules.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Relative pivot size below which a full-pivot LU is treated as rank deficient.
const RANK_TOL: f64 = 1e-13;

pub fn inverse(a: &DMatrix<f64>, what: &str) -> Result<DMatrix<f64>> {
    if !a.is_square() {
        return Err(Error::DimensionMismatch { expected: a.nrows(), found: a.ncols() });
    }
    a.clone()
        .lu()
        .try_inverse()
        .ok_or_else(|| Error::Singular(what.to_string()))
}

/// `(shift * I - a)^{-1}`.
pub fn shifted_inverse(a: &DMatrix<f64>, shift: f64, what: &str) -> Result<DMatrix<f64>> {
    let n = a.nrows();
    let mut m = -a.clone();
    for i in 0..n {
        m[(i, i)] += shift;
    }
    inverse(&m, what)
}

/// Matrix exponential `e^{t a}` by scaling and squaring with a Padé approximant.
pub fn expm(a: &DMatrix<f64>, t: f64) -> DMatrix<f64> {
    if t == 0.0 {
        return DMatrix::identity(a.nrows(), a.ncols());
    }
    (a * t).exp()
}

/// `e^{t rate (P - I)} = e^{-rate t} sum_n (rate t)^n / n! P^n` for a stochastic `P`.
///
/// Terms are accumulated until the remaining Poisson mass drops below `1e-16`.
pub fn uniformized_exp(p: &DMatrix<f64>, rate: f64, t: f64) -> DMatrix<f64> {
    let n = p.nrows();
    let lambda = rate * t;
    if lambda == 0.0 {
        return DMatrix::identity(n, n);
    }
    // Poisson weights in log space so large lambda does not underflow e^{-lambda}.
    let mut out = DMatrix::zeros(n, n);
    let mut power = DMatrix::<f64>::identity(n, n);
    let mut log_w = -lambda;
    let mut mass = 0.0;
    let max_terms = (lambda + 40.0 * lambda.sqrt() + 60.0).ceil() as usize;
    for k in 0..=max_terms {
        if k > 0 {
            power = &power * p;
            log_w += lambda.ln() - (k as f64).ln();
        }
        let w = log_w.exp();
        out += &power * w;
        mass += w;
        if k as f64 > lambda && 1.0 - mass < 1e-16 {
            break;
        }
    }
    out
}

/// Left null vector of a rate matrix normalized to a probability vector:
/// solves `pi^T q = 0`, `sum pi = 1`.
///
/// Fails with [`Error::Reducible`] when the null space has dimension above one.
pub fn stationary_of_rate_matrix(q: &DMatrix<f64>) -> Result<DVector<f64>> {
    let n = q.nrows();
    let mut a = q.transpose();
    for j in 0..n {
        a[(n - 1, j)] = 1.0;
    }
    let lu = a.full_piv_lu();
    let u = lu.u();
    let diag: Vec<f64> = (0..n).map(|i| u[(i, i)].abs()).collect();
    let max = diag.iter().cloned().fold(0.0, f64::max);
    let min = diag.iter().cloned().fold(f64::INFINITY, f64::min);
    if !(max > 0.0) || min < RANK_TOL * max {
        return Err(Error::Reducible);
    }
    let mut rhs = DVector::zeros(n);
    rhs[n - 1] = 1.0;
    let mut pi = lu.solve(&rhs).ok_or(Error::Reducible)?;
    // Round-off can leave tiny negative entries in the far tail.
    for x in pi.iter_mut() {
        if *x < 0.0 && *x > -1e-12 {
            *x = 0.0;
        }
    }
    let s = pi.sum();
    pi /= s;
    Ok(pi)
}

/// Stationary distribution of a row-stochastic matrix.
pub fn stationary_of_stochastic(p: &DMatrix<f64>) -> Result<DVector<f64>> {
    let n = p.nrows();
    stationary_of_rate_matrix(&(p - DMatrix::<f64>::identity(n, n)))
}

pub fn row_sums(m: &DMatrix<f64>) -> Vec<f64> {
    (0..m.nrows()).map(|i| m.row(i).sum()).collect()
}

/// Rescales every row of a nonnegative matrix to sum to one.
pub fn normalize_rows(m: &mut DMatrix<f64>) {
    for i in 0..m.nrows() {
        let s: f64 = m.row(i).sum();
        if s > 0.0 {
            m.row_mut(i).scale_mut(1.0 / s);
        }
    }
}
