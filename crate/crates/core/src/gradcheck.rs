//! Central finite-difference checks of the analytic loss gradients.
//!
//! The median-heuristic bandwidth is pinned at the base point before
//! differencing, matching how the analytic gradient treats it. Random
//! points that sit near a non-smooth spot (hinge kink, clamp at zero, tied
//! eigenvalues, Laplacian coordinate ties) are re-drawn.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;

use crate::error::Result;
use crate::kernels::{
    double_center, gram_resolved, EmbeddingBatch, KernelKind, KernelSpec, ResolvedKernel,
};
use crate::linalg::symmetric_eig;
use crate::loss::{KernelVicreg, LossGradients, LossWeights, Objective};
use crate::matrix::Matrix;

pub const DEFAULT_STEP: f64 = 1e-5;
/// Distance from any kink that a sample point must keep.
const KINK_MARGIN: f64 = 1e-3;
/// Entries this far below the largest gradient entry are compared absolutely.
const RELATIVE_FLOOR: f64 = 1e-3;
const MAX_REDRAWS: usize = 1000;

/// Central differences of the total loss with respect to every coordinate
/// of both views.
pub fn finite_difference_grad(
    objective: &dyn Objective,
    zx: &EmbeddingBatch,
    zxp: &EmbeddingBatch,
    h: f64,
) -> Result<LossGradients> {
    let total = |a: &Matrix, b: &Matrix| -> Result<f64> {
        Ok(objective
            .loss(&EmbeddingBatch::new(a.clone())?, &EmbeddingBatch::new(b.clone())?)?
            .total)
    };
    let mut out = LossGradients {
        grad_x: Matrix::zeros(zx.len(), zx.dim()),
        grad_xp: Matrix::zeros(zx.len(), zx.dim()),
    };
    for view in 0..2 {
        let base = if view == 0 { zx.matrix() } else { zxp.matrix() };
        let other = if view == 0 { zxp.matrix() } else { zx.matrix() };
        for k in 0..base.as_slice().len() {
            let mut plus = base.clone();
            let mut minus = base.clone();
            plus.as_mut_slice()[k] += h;
            minus.as_mut_slice()[k] -= h;
            let (lp, lm) = if view == 0 {
                (total(&plus, other)?, total(&minus, other)?)
            } else {
                (total(other, &plus)?, total(other, &minus)?)
            };
            let g = if view == 0 { &mut out.grad_x } else { &mut out.grad_xp };
            g.as_mut_slice()[k] = (lp - lm) / (2.0 * h);
        }
    }
    Ok(out)
}

/// Largest entrywise relative error, `|a − n| / max(|a|, |n|, floor)`, where
/// `floor` is `1e-3` of the largest entry of either gradient (at least
/// `1e-12`).
pub fn max_relative_error(analytic: &LossGradients, numeric: &LossGradients) -> f64 {
    let pairs = || {
        analytic
            .grad_x
            .as_slice()
            .iter()
            .chain(analytic.grad_xp.as_slice())
            .zip(numeric.grad_x.as_slice().iter().chain(numeric.grad_xp.as_slice()))
    };
    let scale = pairs().fold(0.0f64, |m, (a, n)| m.max(a.abs()).max(n.abs()));
    let floor = (RELATIVE_FLOOR * scale).max(1e-12);
    pairs()
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(floor))
        .fold(0.0, f64::max)
}

/// Whether the loss is smooth in a neighborhood of this point.
fn is_smooth_point(kernel: &ResolvedKernel, w: &LossWeights, zx: &EmbeddingBatch, zxp: &EmbeddingBatch) -> Result<bool> {
    for z in [zx, zxp] {
        let b = z.len() as f64;
        let centered = double_center(&gram_resolved(kernel, z))?;
        let eig = symmetric_eig(centered.matrix())?;
        let lmax = eig.eigenvalues.iter().fold(0.0f64, |m, l| m.max(l.abs()));
        let live: Vec<f64> = eig
            .eigenvalues
            .iter()
            .copied()
            .filter(|l| l.abs() > 1e-9 * lmax.max(1e-300))
            .collect();
        for &l in &live {
            if l / b < KINK_MARGIN {
                return Ok(false);
            }
            if (w.gamma_thresh - (l / b + w.epsilon).sqrt()).abs() < KINK_MARGIN {
                return Ok(false);
            }
        }
        if live.windows(2).any(|p| (p[0] - p[1]).abs() < KINK_MARGIN) {
            return Ok(false);
        }
    }
    if kernel.spec().kind == KernelKind::Laplacian {
        let rows = |z: &EmbeddingBatch| (0..z.len()).map(|i| z.row(i).to_vec()).collect::<Vec<_>>();
        let all: Vec<Vec<f64>> = rows(zx).into_iter().chain(rows(zxp)).collect();
        for i in 0..all.len() {
            for j in i + 1..all.len() {
                if all[i].iter().zip(&all[j]).any(|(a, b)| (a - b).abs() < KINK_MARGIN) {
                    return Ok(false);
                }
            }
        }
    }
    Ok(true)
}

fn random_batch(rng: &mut ChaCha8Rng, b: usize, p: usize) -> Result<EmbeddingBatch> {
    EmbeddingBatch::new(Matrix::from_fn(b, p, |_, _| StandardNormal.sample(rng)))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct KernelCheck {
    pub kernel: KernelKind,
    pub trials: usize,
    pub max_relative_error: f64,
    /// Points discarded for sitting near a kink.
    pub redraws: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradcheckReport {
    pub tolerance: f64,
    pub checks: Vec<KernelCheck>,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.tolerance > 0.0 && self.checks.iter().all(|c| c.max_relative_error <= self.tolerance)
    }
}

/// One smooth random point per trial (`b` in 3..=8, `p` in 1..=5), compared
/// against central differences with step `h`.
pub fn check_kernel(kind: KernelKind, weights: &LossWeights, trials: usize, h: f64, seed: u64) -> Result<KernelCheck> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (kind as u64).wrapping_mul(0x2545_F491_4F6C_DD1D));
    let mut worst = 0.0f64;
    let mut redraws = 0;
    for _ in 0..trials {
        let mut attempts = 0;
        let (objective, zx, zxp) = loop {
            let b = rng.random_range(3..=8);
            let p = rng.random_range(1..=5);
            let zx = random_batch(&mut rng, b, p)?;
            let zxp = random_batch(&mut rng, b, p)?;
            let objective = KernelVicreg::new(KernelSpec::new(kind), *weights).frozen_at(&zx, &zxp)?;
            let kernel = objective.resolve(&zx, &zxp)?;
            if is_smooth_point(&kernel, weights, &zx, &zxp)? {
                break (objective, zx, zxp);
            }
            attempts += 1;
            redraws += 1;
            if attempts == MAX_REDRAWS {
                return Err(crate::Error::invalid(format!(
                    "no smooth sample point found for {} after {MAX_REDRAWS} draws",
                    kind.name()
                )));
            }
        };
        let (_, analytic) = objective.loss_and_grad(&zx, &zxp)?;
        let numeric = finite_difference_grad(&objective, &zx, &zxp, h)?;
        worst = worst.max(max_relative_error(&analytic, &numeric));
    }
    Ok(KernelCheck {
        kernel: kind,
        trials,
        max_relative_error: worst,
        redraws,
    })
}

/// Runs [`check_kernel`] for each kernel with the default loss weights.
pub fn run_gradcheck(kinds: &[KernelKind], trials: usize, tolerance: f64, seed: u64) -> Result<GradcheckReport> {
    let weights = LossWeights::default();
    let checks = kinds
        .iter()
        .map(|&k| check_kernel(k, &weights, trials, DEFAULT_STEP, seed))
        .collect::<Result<Vec<_>>>()?;
    Ok(GradcheckReport { tolerance, checks })
}
