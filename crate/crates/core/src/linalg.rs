//! Symmetric eigendecomposition (cyclic Jacobi) and a few matrix norms.

use crate::error::{Error, Result};
use crate::matrix::Matrix;

const MAX_SWEEPS: usize = 100;
const REL_TOL: f64 = 1e-12;
const SYMMETRY_TOL: f64 = 1e-9;

/// Eigenvalues sorted descending; column `i` of `eigenvectors` pairs with
/// `eigenvalues[i]`.
#[derive(Debug, Clone, PartialEq)]
pub struct EigenDecomposition {
    pub eigenvalues: Vec<f64>,
    pub eigenvectors: Matrix,
}

impl EigenDecomposition {
    pub fn len(&self) -> usize {
        self.eigenvalues.len()
    }

    pub fn is_empty(&self) -> bool {
        self.eigenvalues.is_empty()
    }

    pub fn eigenvector(&self, i: usize) -> Vec<f64> {
        self.eigenvectors.column(i)
    }

    /// `Σᵢ wᵢ vᵢvᵢᵀ`.
    pub fn weighted_outer_sum(&self, weights: &[f64]) -> Matrix {
        let n = self.eigenvectors.rows();
        let v = &self.eigenvectors;
        let mut out = Matrix::zeros(n, n);
        for (k, &w) in weights.iter().enumerate() {
            if w == 0.0 {
                continue;
            }
            for i in 0..n {
                let wi = w * v[(i, k)];
                if wi == 0.0 {
                    continue;
                }
                for j in 0..n {
                    out[(i, j)] += wi * v[(j, k)];
                }
            }
        }
        out
    }

    /// `V·diag(λ)·Vᵀ`.
    pub fn reconstruct(&self) -> Matrix {
        self.weighted_outer_sum(&self.eigenvalues)
    }
}

fn max_asymmetry(a: &Matrix) -> f64 {
    let n = a.rows();
    let mut worst = 0.0f64;
    for i in 0..n {
        for j in i + 1..n {
            worst = worst.max((a[(i, j)] - a[(j, i)]).abs());
        }
    }
    worst
}

fn off_diagonal_norm(a: &Matrix) -> f64 {
    let n = a.rows();
    let mut s = 0.0;
    for i in 0..n {
        for j in 0..n {
            if i != j {
                s += a[(i, j)] * a[(i, j)];
            }
        }
    }
    s.sqrt()
}

/// Full eigendecomposition of a real symmetric matrix by cyclic Jacobi
/// rotations.
///
/// Sweeps stop once the off-diagonal Frobenius norm falls to `1e-12` of the
/// initial Frobenius norm; failing that within 100 sweeps is an error.
pub fn symmetric_eig(a: &Matrix) -> Result<EigenDecomposition> {
    if !a.is_square() {
        return Err(Error::shape(format!(
            "eigendecomposition needs a square matrix, got {}x{}",
            a.rows(),
            a.cols()
        )));
    }
    if a.rows() == 0 {
        return Err(Error::invalid("eigendecomposition of an empty matrix"));
    }
    if !a.all_finite() {
        return Err(Error::NonFinite("eigensolver input"));
    }
    let asym = max_asymmetry(a);
    if asym > SYMMETRY_TOL * a.max_abs() {
        return Err(Error::NotSymmetric(asym));
    }

    let n = a.rows();
    let mut m = a.clone();
    // work on the exactly symmetric part
    for i in 0..n {
        for j in i + 1..n {
            let avg = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = avg;
            m[(j, i)] = avg;
        }
    }
    // eigenvectors are accumulated as rows so rotations touch contiguous memory
    let mut vt = Matrix::identity(n);
    let threshold = REL_TOL * frobenius_sq(&m).sqrt();

    let mut sweeps = 0;
    loop {
        let off = off_diagonal_norm(&m);
        if off <= threshold {
            break;
        }
        if sweeps == MAX_SWEEPS {
            return Err(Error::NoConvergence {
                sweeps,
                off_norm: off,
            });
        }
        sweeps += 1;
        for p in 0..n {
            for q in p + 1..n {
                let apq = m[(p, q)];
                if apq == 0.0 {
                    continue;
                }
                let theta = (m[(q, q)] - m[(p, p)]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + theta.hypot(1.0));
                let c = 1.0 / t.hypot(1.0);
                let s = t * c;
                rotate(&mut m, p, q, c, s, t);
                rotate_rows(&mut vt, p, q, c, s);
            }
        }
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| m[(j, j)].total_cmp(&m[(i, i)]));
    let eigenvalues = order.iter().map(|&i| m[(i, i)]).collect();
    let eigenvectors = Matrix::from_fn(n, n, |r, c| vt[(order[c], r)]);
    Ok(EigenDecomposition {
        eigenvalues,
        eigenvectors,
    })
}

/// Mutable views of rows `p < q`.
fn two_rows(m: &mut Matrix, p: usize, q: usize) -> (&mut [f64], &mut [f64]) {
    let n = m.cols();
    let (head, tail) = m.as_mut_slice().split_at_mut(q * n);
    (&mut head[p * n..(p + 1) * n], &mut tail[..n])
}

/// `row_p ← c·row_p − s·row_q`, `row_q ← s·row_p + c·row_q`.
fn rotate_rows(m: &mut Matrix, p: usize, q: usize, c: f64, s: f64) {
    let (rp, rq) = two_rows(m, p, q);
    for (x, y) in rp.iter_mut().zip(rq.iter_mut()) {
        let (a, b) = (*x, *y);
        *x = c * a - s * b;
        *y = s * a + c * b;
    }
}

/// Applies `M ← JᵀMJ` for the plane rotation in `(p, q)` to a symmetric
/// `M`: rows `p` and `q` are rotated, then mirrored into the columns.
fn rotate(m: &mut Matrix, p: usize, q: usize, c: f64, s: f64, t: f64) {
    let n = m.rows();
    let (app, aqq, apq) = (m[(p, p)], m[(q, q)], m[(p, q)]);
    rotate_rows(m, p, q, c, s);
    for k in 0..n {
        let (mpk, mqk) = (m[(p, k)], m[(q, k)]);
        m[(k, p)] = mpk;
        m[(k, q)] = mqk;
    }
    m[(p, p)] = app - t * apq;
    m[(q, q)] = aqq + t * apq;
    m[(p, q)] = 0.0;
    m[(q, p)] = 0.0;
}

/// Sum of squared entries.
pub fn frobenius_sq(a: &Matrix) -> f64 {
    a.as_slice().iter().map(|x| x * x).sum()
}

pub fn trace(a: &Matrix) -> Result<f64> {
    if !a.is_square() {
        return Err(Error::shape(format!(
            "trace needs a square matrix, got {}x{}",
            a.rows(),
            a.cols()
        )));
    }
    Ok((0..a.rows()).map(|i| a[(i, i)]).sum())
}
