//! The original Euclidean VICReg terms, used as a baseline and as the
//! linear-kernel reference.

use super::{hinge_sq, LossGradients, LossReport, LossWeights, Objective, TOP_EIGENVALUES};
use crate::error::Result;
use crate::kernels::EmbeddingBatch;
use crate::linalg::symmetric_eig;
use crate::matrix::Matrix;

/// `(1/b)·Σᵢ ‖zᵢ − z′ᵢ‖²`.
pub fn euclidean_invariance(zx: &EmbeddingBatch, zxp: &EmbeddingBatch) -> Result<f64> {
    zx.check_same_shape(zxp)?;
    let s: f64 = zx
        .matrix()
        .as_slice()
        .iter()
        .zip(zxp.matrix().as_slice())
        .map(|(a, b)| (a - b) * (a - b))
        .sum();
    Ok(s / zx.len() as f64)
}

/// Biased per-column variances.
fn column_variances(centered: &Matrix) -> Vec<f64> {
    let b = centered.rows() as f64;
    let mut var = vec![0.0; centered.cols()];
    for row in centered.row_iter() {
        for (v, &x) in var.iter_mut().zip(row) {
            *v += x * x;
        }
    }
    var.iter_mut().for_each(|v| *v /= b);
    var
}

/// `(1/p)·Σⱼ max(0, γ − sqrt(Varⱼ + ε))²` with the biased column variance.
pub fn euclidean_variance(z: &EmbeddingBatch, w: &LossWeights) -> Result<f64> {
    z.require_at_least_two()?;
    w.validate()?;
    Ok(variance_of_centered(&z.matrix().column_centered(), w))
}

fn variance_of_centered(centered: &Matrix, w: &LossWeights) -> f64 {
    let var = column_variances(centered);
    let p = var.len() as f64;
    var.iter()
        .map(|&v| hinge_sq(w.gamma_thresh, (v + w.epsilon).sqrt()))
        .sum::<f64>()
        / p
}

/// `C = Z̃ᵀZ̃/(b−1)`.
fn covariance_matrix(centered: &Matrix) -> Matrix {
    let b = centered.rows() as f64;
    centered
        .t_matmul(centered)
        .expect("square product")
        .scale(1.0 / (b - 1.0))
}

fn off_diagonal_sq(c: &Matrix) -> f64 {
    let p = c.rows();
    let mut s = 0.0;
    for j in 0..p {
        for k in 0..p {
            if j != k {
                s += c[(j, k)] * c[(j, k)];
            }
        }
    }
    s
}

/// `(1/p)·Σ_{j≠k} C[j,k]²` with `C = Z̃ᵀZ̃/(b−1)`.
pub fn euclidean_covariance(z: &EmbeddingBatch) -> Result<f64> {
    z.require_at_least_two()?;
    let c = covariance_matrix(&z.matrix().column_centered());
    Ok(off_diagonal_sq(&c) / z.dim() as f64)
}

/// Euclidean VICReg. Reported eigenvalues are those of the centered linear
/// Gram `Z̃Z̃ᵀ` of the first view.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EuclideanVicreg {
    pub weights: LossWeights,
}

impl EuclideanVicreg {
    pub fn new(weights: LossWeights) -> Self {
        Self { weights }
    }

    fn evaluate(
        &self,
        zx: &EmbeddingBatch,
        zxp: &EmbeddingBatch,
        want_grad: bool,
    ) -> Result<(LossReport, Option<LossGradients>)> {
        let w = &self.weights;
        w.validate()?;
        zx.check_same_shape(zxp)?;
        zx.require_at_least_two()?;
        let (b, p) = (zx.len(), zx.dim());
        let cx = zx.matrix().column_centered();
        let cxp = zxp.matrix().column_centered();
        let covx = covariance_matrix(&cx);
        let covxp = covariance_matrix(&cxp);

        // nonzero spectrum of Z̃Z̃ᵀ equals that of Z̃ᵀZ̃
        let mut top = symmetric_eig(&cx.t_matmul(&cx)?)?.eigenvalues;
        top.resize(top.len().max(TOP_EIGENVALUES), 0.0);
        top.truncate(TOP_EIGENVALUES.min(b));

        let report = LossReport::assemble(
            w,
            euclidean_invariance(zx, zxp)?,
            (variance_of_centered(&cx, w), variance_of_centered(&cxp, w)),
            (off_diagonal_sq(&covx) / p as f64, off_diagonal_sq(&covxp) / p as f64),
            top,
        );
        if !want_grad {
            return Ok((report, None));
        }

        let mut grads = LossGradients::zeros(b, p);
        if w.alpha != 0.0 {
            let d = zx.matrix().sub(zxp.matrix())?;
            let c = 2.0 * w.alpha / b as f64;
            grads.grad_x.add_scaled_in_place(&d, c)?;
            grads.grad_xp.add_scaled_in_place(&d, -c)?;
        }
        for (centered, cov, out) in [(&cx, &covx, &mut grads.grad_x), (&cxp, &covxp, &mut grads.grad_xp)] {
            if w.beta != 0.0 {
                // ∂Varⱼ/∂z_ij = 2·z̃_ij/b
                let slopes: Vec<f64> = column_variances(centered)
                    .iter()
                    .map(|&v| {
                        let s = (v + w.epsilon).sqrt();
                        let h = w.gamma_thresh - s;
                        if h > 0.0 {
                            -h / (p as f64 * s)
                        } else {
                            0.0
                        }
                    })
                    .collect();
                let c = w.beta * 2.0 / b as f64;
                for i in 0..b {
                    for ((o, &x), &sl) in out.row_mut(i).iter_mut().zip(centered.row(i)).zip(&slopes) {
                        *o += c * sl * x;
                    }
                }
            }
            if w.zeta != 0.0 {
                let mut off = cov.clone();
                for j in 0..p {
                    off[(j, j)] = 0.0;
                }
                // Z̃·C_off already has zero column means, so no centering pass
                let g = centered.matmul(&off)?;
                let c = w.zeta * 4.0 / (p as f64 * (b as f64 - 1.0));
                out.add_scaled_in_place(&g, c)?;
            }
        }
        Ok((report, Some(grads.checked()?)))
    }
}

impl Objective for EuclideanVicreg {
    fn loss(&self, zx: &EmbeddingBatch, zxp: &EmbeddingBatch) -> Result<LossReport> {
        Ok(self.evaluate(zx, zxp, false)?.0)
    }

    fn loss_and_grad(
        &self,
        zx: &EmbeddingBatch,
        zxp: &EmbeddingBatch,
    ) -> Result<(LossReport, LossGradients)> {
        let (r, g) = self.evaluate(zx, zxp, true)?;
        Ok((r, g.expect("gradient requested")))
    }

    fn weights(&self) -> &LossWeights {
        &self.weights
    }
}

pub fn euclidean_vicreg_loss(
    zx: &EmbeddingBatch,
    zxp: &EmbeddingBatch,
    w: &LossWeights,
) -> Result<LossReport> {
    EuclideanVicreg::new(*w).loss(zx, zxp)
}

pub fn euclidean_vicreg_grad(
    zx: &EmbeddingBatch,
    zxp: &EmbeddingBatch,
    w: &LossWeights,
) -> Result<LossGradients> {
    Ok(EuclideanVicreg::new(*w).loss_and_grad(zx, zxp)?.1)
}
