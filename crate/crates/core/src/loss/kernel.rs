use super::{
    hinge_sq, CovarianceVariant, LossGradients, LossReport, LossWeights, Objective,
    TOP_EIGENVALUES,
};
use crate::error::Result;
use crate::kernels::{
    double_center, double_center_matrix, gram_resolved, EmbeddingBatch, KernelSpec,
    ResolvedKernel,
};
use crate::linalg::{frobenius_sq, symmetric_eig, EigenDecomposition};
use crate::matrix::Matrix;

/// Centered Gram of one view and its spectrum.
struct ViewSpectrum {
    centered: Matrix,
    eig: EigenDecomposition,
}

impl ViewSpectrum {
    fn compute(kernel: &ResolvedKernel, z: &EmbeddingBatch) -> Result<Self> {
        z.require_at_least_two()?;
        let centered = double_center(&gram_resolved(kernel, z))?.into_matrix();
        let eig = symmetric_eig(&centered)?;
        Ok(Self { centered, eig })
    }

    fn variance(&self, w: &LossWeights) -> f64 {
        let b = self.centered.rows() as f64;
        let sum: f64 = self
            .eig
            .eigenvalues
            .iter()
            .map(|&l| hinge_sq(w.gamma_thresh, (l.max(0.0) / b + w.epsilon).sqrt()))
            .sum();
        sum / b
    }

    /// `∂L_var/∂K̂ = Σᵢ f′(λᵢ)·vᵢvᵢᵀ`.
    fn variance_grad(&self, w: &LossWeights) -> Matrix {
        let b = self.centered.rows() as f64;
        let slopes: Vec<f64> = self
            .eig
            .eigenvalues
            .iter()
            .map(|&l| {
                if l <= 0.0 {
                    return 0.0;
                }
                let s = (l / b + w.epsilon).sqrt();
                let h = w.gamma_thresh - s;
                if h > 0.0 {
                    -h / (b * b * s)
                } else {
                    0.0
                }
            })
            .collect();
        self.eig.weighted_outer_sum(&slopes)
    }

    fn off_diagonal_mass(&self) -> f64 {
        let diag: f64 = (0..self.centered.rows())
            .map(|i| self.centered[(i, i)].powi(2))
            .sum();
        (frobenius_sq(&self.centered) - diag).max(0.0)
    }

    fn covariance(&self, variant: CovarianceVariant) -> f64 {
        let b = self.centered.rows() as f64;
        match variant {
            CovarianceVariant::Sqrt => self.off_diagonal_mass().sqrt() / b,
            CovarianceVariant::Squared => self.off_diagonal_mass() / (b * b),
        }
    }

    fn covariance_grad(&self, variant: CovarianceVariant) -> Matrix {
        let n = self.centered.rows();
        let b = n as f64;
        let scale = match variant {
            CovarianceVariant::Sqrt => {
                let l = self.covariance(variant);
                if l > 0.0 {
                    1.0 / (b * b * l)
                } else {
                    0.0
                }
            }
            CovarianceVariant::Squared => 2.0 / (b * b),
        };
        let mut g = self.centered.scale(scale);
        for i in 0..n {
            g[(i, i)] = 0.0;
        }
        g
    }

    fn top_eigenvalues(&self) -> Vec<f64> {
        self.eig.eigenvalues.iter().take(TOP_EIGENVALUES).copied().collect()
    }
}

/// `(1/b)·[tr K(x,x) + tr K(x',x') − 2·tr K(x,x')]` under a resolved kernel.
fn invariance_resolved(kernel: &ResolvedKernel, zx: &EmbeddingBatch, zxp: &EmbeddingBatch) -> f64 {
    let b = zx.len();
    let mut s = 0.0;
    for i in 0..b {
        let (u, v) = (zx.row(i), zxp.row(i));
        s += kernel.eval(u, u) + kernel.eval(v, v) - 2.0 * kernel.eval(u, v);
    }
    s / b as f64
}

/// Mean squared RKHS distance between paired views.
///
/// The bandwidth is resolved once from both views stacked.
pub fn kernel_invariance(spec: &KernelSpec, zx: &EmbeddingBatch, zxp: &EmbeddingBatch) -> Result<f64> {
    zx.check_same_shape(zxp)?;
    let kernel = resolve_pair(spec, zx, zxp)?;
    Ok(invariance_resolved(&kernel, zx, zxp))
}

/// `(1/b)·Σᵢ max(0, γ − sqrt(λᵢ/b + ε))²` over the eigenvalues of the
/// centered Gram, with negative eigenvalues clamped to zero.
pub fn kernel_variance(spec: &KernelSpec, z: &EmbeddingBatch, w: &LossWeights) -> Result<f64> {
    w.validate()?;
    let kernel = resolve_single(spec, z)?;
    Ok(ViewSpectrum::compute(&kernel, z)?.variance(w))
}

/// `(1/b)·sqrt(‖K̂‖²_F − Σᵢ K̂ᵢᵢ²)`.
pub fn kernel_covariance(spec: &KernelSpec, z: &EmbeddingBatch) -> Result<f64> {
    let kernel = resolve_single(spec, z)?;
    Ok(ViewSpectrum::compute(&kernel, z)?.covariance(CovarianceVariant::Sqrt))
}

fn resolve_single(spec: &KernelSpec, z: &EmbeddingBatch) -> Result<ResolvedKernel> {
    if spec.kind.uses_bandwidth() {
        ResolvedKernel::for_batch(*spec, z)
    } else {
        ResolvedKernel::new(*spec, 1.0)
    }
}

fn resolve_pair(spec: &KernelSpec, zx: &EmbeddingBatch, zxp: &EmbeddingBatch) -> Result<ResolvedKernel> {
    if spec.kind.uses_bandwidth() {
        ResolvedKernel::for_pair(*spec, zx, zxp)
    } else {
        ResolvedKernel::new(*spec, 1.0)
    }
}

/// The full kernelized objective.
///
/// One bandwidth is resolved per call from the two views stacked and is
/// shared by every Gram matrix in that call; gradients treat it as a
/// constant.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KernelVicreg {
    pub spec: KernelSpec,
    pub weights: LossWeights,
    pub covariance: CovarianceVariant,
}

impl KernelVicreg {
    pub fn new(spec: KernelSpec, weights: LossWeights) -> Self {
        Self {
            spec,
            weights,
            covariance: CovarianceVariant::Sqrt,
        }
    }

    pub fn with_covariance(mut self, variant: CovarianceVariant) -> Self {
        self.covariance = variant;
        self
    }

    /// Kernel with the bandwidth this objective would use on `(zx, zxp)`.
    pub fn resolve(&self, zx: &EmbeddingBatch, zxp: &EmbeddingBatch) -> Result<ResolvedKernel> {
        self.spec.validate()?;
        zx.check_same_shape(zxp)?;
        resolve_pair(&self.spec, zx, zxp)
    }

    /// Copy of this objective whose bandwidth is pinned to the value
    /// resolved on `(zx, zxp)`.
    pub fn frozen_at(&self, zx: &EmbeddingBatch, zxp: &EmbeddingBatch) -> Result<Self> {
        let kernel = self.resolve(zx, zxp)?;
        Ok(Self {
            spec: kernel.frozen_spec(),
            ..*self
        })
    }

    fn evaluate(
        &self,
        zx: &EmbeddingBatch,
        zxp: &EmbeddingBatch,
        want_grad: bool,
    ) -> Result<(LossReport, Option<LossGradients>)> {
        self.weights.validate()?;
        let kernel = self.resolve(zx, zxp)?;
        let w = &self.weights;
        let sx = ViewSpectrum::compute(&kernel, zx)?;
        let sxp = ViewSpectrum::compute(&kernel, zxp)?;

        let report = LossReport::assemble(
            w,
            invariance_resolved(&kernel, zx, zxp),
            (sx.variance(w), sxp.variance(w)),
            (sx.covariance(self.covariance), sxp.covariance(self.covariance)),
            sx.top_eigenvalues(),
        );
        if !want_grad {
            return Ok((report, None));
        }

        let mut grads = LossGradients::zeros(zx.len(), zx.dim());
        if w.alpha != 0.0 {
            invariance_grad(&kernel, zx, zxp, w.alpha, &mut grads);
        }
        for (spectrum, z, out) in [
            (&sx, zx, &mut grads.grad_x),
            (&sxp, zxp, &mut grads.grad_xp),
        ] {
            let mut g_hat = Matrix::zeros(z.len(), z.len());
            if w.beta != 0.0 {
                g_hat.add_scaled_in_place(&spectrum.variance_grad(w), w.beta)?;
            }
            if w.zeta != 0.0 {
                g_hat.add_scaled_in_place(&spectrum.covariance_grad(self.covariance), w.zeta)?;
            }
            let g = double_center_matrix(&g_hat)?;
            chain_through_gram(&kernel, z, &g, out);
        }
        Ok((report, Some(grads.checked()?)))
    }
}

impl Objective for KernelVicreg {
    fn loss(&self, zx: &EmbeddingBatch, zxp: &EmbeddingBatch) -> Result<LossReport> {
        Ok(self.evaluate(zx, zxp, false)?.0)
    }

    fn loss_and_grad(
        &self,
        zx: &EmbeddingBatch,
        zxp: &EmbeddingBatch,
    ) -> Result<(LossReport, LossGradients)> {
        let (report, grads) = self.evaluate(zx, zxp, true)?;
        Ok((report, grads.expect("gradient requested")))
    }

    fn weights(&self) -> &LossWeights {
        &self.weights
    }
}

fn invariance_grad(
    kernel: &ResolvedKernel,
    zx: &EmbeddingBatch,
    zxp: &EmbeddingBatch,
    alpha: f64,
    grads: &mut LossGradients,
) {
    let b = zx.len();
    let c = alpha / b as f64;
    for i in 0..b {
        let (u, v) = (zx.row(i), zxp.row(i));
        let gx = grads.grad_x.row_mut(i);
        // k(u, u) depends on u through both arguments
        kernel.accumulate_grad_first(u, u, kernel.eval(u, u), 2.0 * c, gx);
        kernel.accumulate_grad_first(u, v, kernel.eval(u, v), -2.0 * c, gx);
        let gxp = grads.grad_xp.row_mut(i);
        kernel.accumulate_grad_first(v, v, kernel.eval(v, v), 2.0 * c, gxp);
        kernel.accumulate_grad_first(v, u, kernel.eval(v, u), -2.0 * c, gxp);
    }
}

/// `∂L/∂zₐ += Σⱼ (G[a,j] + G[j,a])·∂k(zₐ, zⱼ)/∂zₐ` for `G = ∂L/∂K`.
fn chain_through_gram(kernel: &ResolvedKernel, z: &EmbeddingBatch, g: &Matrix, out: &mut Matrix) {
    let b = z.len();
    for a in 0..b {
        let za = z.row(a);
        for j in 0..b {
            let coeff = g[(a, j)] + g[(j, a)];
            if coeff == 0.0 {
                continue;
            }
            let zj = z.row(j);
            kernel.accumulate_grad_first(za, zj, kernel.eval(za, zj), coeff, out.row_mut(a));
        }
    }
}

/// Loss report with the default (square-rooted) covariance term.
pub fn kernel_vicreg_loss(
    spec: &KernelSpec,
    zx: &EmbeddingBatch,
    zxp: &EmbeddingBatch,
    w: &LossWeights,
) -> Result<LossReport> {
    KernelVicreg::new(*spec, *w).loss(zx, zxp)
}

/// Analytic gradient of [`kernel_vicreg_loss`] with respect to both views.
pub fn kernel_vicreg_grad(
    spec: &KernelSpec,
    zx: &EmbeddingBatch,
    zxp: &EmbeddingBatch,
    w: &LossWeights,
) -> Result<LossGradients> {
    Ok(KernelVicreg::new(*spec, *w).loss_and_grad(zx, zxp)?.1)
}
