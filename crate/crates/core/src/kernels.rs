//! Kernel functions, Gram matrices and double-centering.
//!
//! All scale-sensitive kernels take a resolved bandwidth `gamma`:
//!
//! | kind               | k(u, v)                              |
//! |--------------------|--------------------------------------|
//! | linear             | u·v                                  |
//! | polynomial         | (u·v + coef0)^degree                 |
//! | rbf                | exp(−γ‖u−v‖₂²)                       |
//! | laplacian          | exp(−γ‖u−v‖₁)                        |
//! | rational quadratic | (1 + γ‖u−v‖₂² / (2α))^(−α)           |
//!
//! With [`Bandwidth::MedianHeuristic`] the bandwidth comes from the batch:
//! `1 / (2·median ‖zᵢ−zⱼ‖²)` for RBF and RQ, `1 / median ‖zᵢ−zⱼ‖₁` for
//! Laplacian, falling back to `1.0` when the median is zero.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::{dot, Matrix};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KernelKind {
    Linear,
    Polynomial,
    Rbf,
    Laplacian,
    RationalQuadratic,
}

impl KernelKind {
    pub const ALL: [KernelKind; 5] = [
        KernelKind::Linear,
        KernelKind::Polynomial,
        KernelKind::Rbf,
        KernelKind::Laplacian,
        KernelKind::RationalQuadratic,
    ];

    pub fn name(self) -> &'static str {
        match self {
            KernelKind::Linear => "linear",
            KernelKind::Polynomial => "polynomial",
            KernelKind::Rbf => "rbf",
            KernelKind::Laplacian => "laplacian",
            KernelKind::RationalQuadratic => "rational_quadratic",
        }
    }

    pub fn parse(s: &str) -> Option<KernelKind> {
        match s.to_ascii_lowercase().as_str() {
            "linear" => Some(KernelKind::Linear),
            "polynomial" | "poly" => Some(KernelKind::Polynomial),
            "rbf" | "gaussian" => Some(KernelKind::Rbf),
            "laplacian" => Some(KernelKind::Laplacian),
            "rational_quadratic" | "rq" => Some(KernelKind::RationalQuadratic),
            _ => None,
        }
    }

    /// Whether the kernel depends only on `u − v`.
    pub fn is_shift_invariant(self) -> bool {
        matches!(
            self,
            KernelKind::Rbf | KernelKind::Laplacian | KernelKind::RationalQuadratic
        )
    }

    pub fn uses_bandwidth(self) -> bool {
        self.is_shift_invariant()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Bandwidth {
    Fixed(f64),
    MedianHeuristic,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KernelSpec {
    pub kind: KernelKind,
    /// Polynomial degree.
    #[serde(default = "default_degree")]
    pub degree: u32,
    /// Polynomial offset.
    #[serde(default = "default_coef0")]
    pub coef0: f64,
    #[serde(default = "default_bandwidth")]
    pub bandwidth: Bandwidth,
    /// Shape parameter of the rational quadratic kernel.
    #[serde(default = "default_rq_alpha")]
    pub rq_alpha: f64,
}

fn default_degree() -> u32 {
    2
}
fn default_coef0() -> f64 {
    1.0
}
fn default_bandwidth() -> Bandwidth {
    Bandwidth::MedianHeuristic
}
fn default_rq_alpha() -> f64 {
    1.0
}

impl KernelSpec {
    /// Spec of the given kind with default parameters (degree 2, coef0 1,
    /// median-heuristic bandwidth, rq_alpha 1).
    pub fn new(kind: KernelKind) -> Self {
        Self {
            kind,
            degree: default_degree(),
            coef0: default_coef0(),
            bandwidth: default_bandwidth(),
            rq_alpha: default_rq_alpha(),
        }
    }

    pub fn linear() -> Self {
        Self::new(KernelKind::Linear)
    }

    pub fn polynomial(degree: u32, coef0: f64) -> Self {
        Self {
            degree,
            coef0,
            ..Self::new(KernelKind::Polynomial)
        }
    }

    pub fn rbf(bandwidth: Bandwidth) -> Self {
        Self {
            bandwidth,
            ..Self::new(KernelKind::Rbf)
        }
    }

    pub fn laplacian(bandwidth: Bandwidth) -> Self {
        Self {
            bandwidth,
            ..Self::new(KernelKind::Laplacian)
        }
    }

    pub fn rational_quadratic(bandwidth: Bandwidth, rq_alpha: f64) -> Self {
        Self {
            bandwidth,
            rq_alpha,
            ..Self::new(KernelKind::RationalQuadratic)
        }
    }

    pub fn with_bandwidth(mut self, bandwidth: Bandwidth) -> Self {
        self.bandwidth = bandwidth;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.kind == KernelKind::Polynomial && self.degree < 1 {
            return Err(Error::invalid("polynomial degree must be >= 1"));
        }
        if !self.coef0.is_finite() {
            return Err(Error::invalid("coef0 must be finite"));
        }
        if let Bandwidth::Fixed(g) = self.bandwidth {
            if !(g > 0.0 && g.is_finite()) {
                return Err(Error::invalid(format!("fixed bandwidth must be > 0, got {g}")));
            }
        }
        if !(self.rq_alpha > 0.0 && self.rq_alpha.is_finite()) {
            return Err(Error::invalid(format!(
                "rq_alpha must be > 0, got {}",
                self.rq_alpha
            )));
        }
        Ok(())
    }
}

/// A `b×p` batch of embeddings; row `i` is `zᵢ`.
///
/// Construction only requires finite entries and at least one row.
/// Operations that are degenerate on a single row (bandwidth estimation,
/// variance, covariance) check `b ≥ 2` themselves.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingBatch(Matrix);

impl EmbeddingBatch {
    pub fn new(data: Matrix) -> Result<Self> {
        if data.rows() == 0 || data.cols() == 0 {
            return Err(Error::invalid("embedding batch must be non-empty"));
        }
        if !data.all_finite() {
            return Err(Error::NonFinite("embedding batch"));
        }
        Ok(Self(data))
    }

    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        Self::new(Matrix::from_rows(rows)?)
    }

    pub fn len(&self) -> usize {
        self.0.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.0.rows() == 0
    }

    pub fn dim(&self) -> usize {
        self.0.cols()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        self.0.row(i)
    }

    pub fn matrix(&self) -> &Matrix {
        &self.0
    }

    pub fn into_matrix(self) -> Matrix {
        self.0
    }

    pub(crate) fn require_at_least_two(&self) -> Result<()> {
        if self.len() < 2 {
            return Err(Error::invalid(format!(
                "batch size must be >= 2, got {}",
                self.len()
            )));
        }
        Ok(())
    }

    pub(crate) fn check_same_shape(&self, other: &EmbeddingBatch) -> Result<()> {
        if self.0.shape() != other.0.shape() {
            return Err(Error::shape(format!(
                "view batches differ: {}x{} vs {}x{}",
                self.len(),
                self.dim(),
                other.len(),
                other.dim()
            )));
        }
        Ok(())
    }
}

/// A kernel with its bandwidth fixed to a concrete value.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ResolvedKernel {
    spec: KernelSpec,
    gamma: f64,
}

impl ResolvedKernel {
    pub fn new(spec: KernelSpec, gamma: f64) -> Result<Self> {
        spec.validate()?;
        if !(gamma > 0.0 && gamma.is_finite()) {
            return Err(Error::invalid(format!("gamma must be > 0, got {gamma}")));
        }
        Ok(Self { spec, gamma })
    }

    /// Resolves the bandwidth of `spec` against `batch`.
    pub fn for_batch(spec: KernelSpec, batch: &EmbeddingBatch) -> Result<Self> {
        let gamma = resolve_bandwidth(&spec, batch)?;
        Self::new(spec, gamma)
    }

    /// Resolves one bandwidth from the row concatenation of two views.
    pub fn for_pair(spec: KernelSpec, a: &EmbeddingBatch, b: &EmbeddingBatch) -> Result<Self> {
        if a.dim() != b.dim() {
            return Err(Error::shape(format!(
                "view dimensions differ: {} vs {}",
                a.dim(),
                b.dim()
            )));
        }
        let joint = EmbeddingBatch(a.matrix().vstack(b.matrix())?);
        Self::for_batch(spec, &joint)
    }

    pub fn spec(&self) -> &KernelSpec {
        &self.spec
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    /// Same kernel with the bandwidth pinned, so it can be re-resolved
    /// against any batch without moving.
    pub fn frozen_spec(&self) -> KernelSpec {
        if self.spec.kind.uses_bandwidth() {
            self.spec.with_bandwidth(Bandwidth::Fixed(self.gamma))
        } else {
            self.spec
        }
    }

    #[inline]
    pub fn eval(&self, u: &[f64], v: &[f64]) -> f64 {
        let g = self.gamma;
        match self.spec.kind {
            KernelKind::Linear => dot(u, v),
            KernelKind::Polynomial => (dot(u, v) + self.spec.coef0).powi(self.spec.degree as i32),
            KernelKind::Rbf => (-g * sq_dist(u, v)).exp(),
            KernelKind::Laplacian => (-g * l1_dist(u, v)).exp(),
            KernelKind::RationalQuadratic => {
                let a = self.spec.rq_alpha;
                (1.0 + g * sq_dist(u, v) / (2.0 * a)).powf(-a)
            }
        }
    }

    /// Accumulates `scale · ∂k(u, v)/∂u` into `out`; `k_uv` is `k(u, v)`.
    #[inline]
    pub fn accumulate_grad_first(&self, u: &[f64], v: &[f64], k_uv: f64, scale: f64, out: &mut [f64]) {
        if scale == 0.0 {
            return;
        }
        let g = self.gamma;
        match self.spec.kind {
            KernelKind::Linear => {
                for (o, &vj) in out.iter_mut().zip(v) {
                    *o += scale * vj;
                }
            }
            KernelKind::Polynomial => {
                let d = self.spec.degree as i32;
                let c = scale * f64::from(self.spec.degree) * (dot(u, v) + self.spec.coef0).powi(d - 1);
                for (o, &vj) in out.iter_mut().zip(v) {
                    *o += c * vj;
                }
            }
            KernelKind::Rbf => {
                let c = -2.0 * g * k_uv * scale;
                for ((o, &uj), &vj) in out.iter_mut().zip(u).zip(v) {
                    *o += c * (uj - vj);
                }
            }
            KernelKind::Laplacian => {
                let c = -g * k_uv * scale;
                for ((o, &uj), &vj) in out.iter_mut().zip(u).zip(v) {
                    *o += c * sign(uj - vj);
                }
            }
            KernelKind::RationalQuadratic => {
                let a = self.spec.rq_alpha;
                let c = -g * k_uv.powf(1.0 + 1.0 / a) * scale;
                for ((o, &uj), &vj) in out.iter_mut().zip(u).zip(v) {
                    *o += c * (uj - vj);
                }
            }
        }
    }
}

#[inline]
fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

#[inline]
pub(crate) fn sq_dist(u: &[f64], v: &[f64]) -> f64 {
    u.iter().zip(v).map(|(a, b)| (a - b) * (a - b)).sum()
}

#[inline]
pub(crate) fn l1_dist(u: &[f64], v: &[f64]) -> f64 {
    u.iter().zip(v).map(|(a, b)| (a - b).abs()).sum()
}

/// Evaluates `k(u, v)` with an already resolved bandwidth `gamma`.
pub fn kernel_eval(spec: &KernelSpec, u: &[f64], v: &[f64], gamma: f64) -> Result<f64> {
    if u.len() != v.len() {
        return Err(Error::shape(format!(
            "kernel arguments differ in length: {} vs {}",
            u.len(),
            v.len()
        )));
    }
    if !u.iter().chain(v).all(|x| x.is_finite()) {
        return Err(Error::NonFinite("kernel argument"));
    }
    let k = ResolvedKernel::new(*spec, gamma)?;
    Ok(k.eval(u, v))
}

/// Median of a non-empty slice; even lengths average the two middle values.
pub(crate) fn median(values: &mut [f64]) -> f64 {
    debug_assert!(!values.is_empty());
    let n = values.len();
    let mid = n / 2;
    let (_, upper, _) = values.select_nth_unstable_by(mid, f64::total_cmp);
    let upper = *upper;
    if n % 2 == 1 {
        upper
    } else {
        let lower = values[..mid]
            .iter()
            .copied()
            .fold(f64::NEG_INFINITY, f64::max);
        0.5 * (lower + upper)
    }
}

/// Bandwidth to use for `spec` on `batch`.
pub fn resolve_bandwidth(spec: &KernelSpec, batch: &EmbeddingBatch) -> Result<f64> {
    batch.require_at_least_two()?;
    if !spec.kind.uses_bandwidth() {
        return Ok(1.0);
    }
    let m = match spec.bandwidth {
        Bandwidth::Fixed(g) => return Ok(g),
        Bandwidth::MedianHeuristic => {
            let dist: fn(&[f64], &[f64]) -> f64 = if spec.kind == KernelKind::Laplacian {
                l1_dist
            } else {
                sq_dist
            };
            let b = batch.len();
            let mut d = Vec::with_capacity(b * (b - 1) / 2);
            for i in 0..b {
                for j in i + 1..b {
                    d.push(dist(batch.row(i), batch.row(j)));
                }
            }
            median(&mut d)
        }
    };
    if m <= 0.0 {
        return Ok(1.0);
    }
    Ok(if spec.kind == KernelKind::Laplacian {
        1.0 / m
    } else {
        1.0 / (2.0 * m)
    })
}

/// Symmetric `b×b` kernel matrix with a centering flag.
#[derive(Debug, Clone, PartialEq)]
pub struct GramMatrix {
    data: Matrix,
    centered: bool,
    kernel: KernelSpec,
    gamma: f64,
}

impl GramMatrix {
    pub fn matrix(&self) -> &Matrix {
        &self.data
    }

    pub fn into_matrix(self) -> Matrix {
        self.data
    }

    pub fn is_centered(&self) -> bool {
        self.centered
    }

    pub fn kernel(&self) -> &KernelSpec {
        &self.kernel
    }

    /// Bandwidth the entries were evaluated with.
    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn size(&self) -> usize {
        self.data.rows()
    }
}

/// `K(x, x')` with `[i, j] = k(xᵢ, x'ⱼ)`; not symmetric in general.
#[derive(Debug, Clone, PartialEq)]
pub struct CrossGramMatrix {
    data: Matrix,
    gamma: f64,
}

impl CrossGramMatrix {
    pub fn matrix(&self) -> &Matrix {
        &self.data
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }
}

/// Builds the uncentered Gram matrix, resolving the bandwidth from `batch`.
pub fn gram(spec: &KernelSpec, batch: &EmbeddingBatch) -> Result<GramMatrix> {
    let kernel = if spec.kind.uses_bandwidth() {
        ResolvedKernel::for_batch(*spec, batch)?
    } else {
        ResolvedKernel::new(*spec, 1.0)?
    };
    Ok(gram_resolved(&kernel, batch))
}

/// Gram matrix under an already resolved kernel.
pub fn gram_resolved(kernel: &ResolvedKernel, batch: &EmbeddingBatch) -> GramMatrix {
    let b = batch.len();
    let mut data = Matrix::zeros(b, b);
    fill_upper(kernel, batch, &mut data);
    for i in 0..b {
        for j in 0..i {
            data[(i, j)] = data[(j, i)];
        }
    }
    GramMatrix {
        data,
        centered: false,
        kernel: *kernel.spec(),
        gamma: kernel.gamma(),
    }
}

#[cfg(not(feature = "parallel"))]
fn fill_upper(kernel: &ResolvedKernel, batch: &EmbeddingBatch, data: &mut Matrix) {
    let b = batch.len();
    for i in 0..b {
        let zi = batch.row(i);
        let row = data.row_mut(i);
        for j in i..b {
            row[j] = kernel.eval(zi, batch.row(j));
        }
    }
}

#[cfg(feature = "parallel")]
fn fill_upper(kernel: &ResolvedKernel, batch: &EmbeddingBatch, data: &mut Matrix) {
    use rayon::prelude::*;

    let b = batch.len();
    data.as_mut_slice()
        .par_chunks_mut(b)
        .enumerate()
        .for_each(|(i, row)| {
            let zi = batch.row(i);
            for j in i..b {
                row[j] = kernel.eval(zi, batch.row(j));
            }
        });
}

/// Cross-view kernel matrix; the bandwidth comes from both views stacked.
pub fn cross_gram(
    spec: &KernelSpec,
    batch_a: &EmbeddingBatch,
    batch_b: &EmbeddingBatch,
) -> Result<CrossGramMatrix> {
    batch_a.check_same_shape(batch_b)?;
    let kernel = if spec.kind.uses_bandwidth() {
        ResolvedKernel::for_pair(*spec, batch_a, batch_b)?
    } else {
        ResolvedKernel::new(*spec, 1.0)?
    };
    Ok(cross_gram_resolved(&kernel, batch_a, batch_b))
}

pub fn cross_gram_resolved(
    kernel: &ResolvedKernel,
    batch_a: &EmbeddingBatch,
    batch_b: &EmbeddingBatch,
) -> CrossGramMatrix {
    let data = Matrix::from_fn(batch_a.len(), batch_b.len(), |i, j| {
        kernel.eval(batch_a.row(i), batch_b.row(j))
    });
    CrossGramMatrix {
        data,
        gamma: kernel.gamma(),
    }
}

/// `H·G·H` for `H = I − 11ᵀ/b`, computed by mean subtraction.
///
/// Works on any square matrix and does not look at a centering flag; the
/// output is symmetric whenever the input is.
pub fn double_center_matrix(g: &Matrix) -> Result<Matrix> {
    if !g.is_square() {
        return Err(Error::shape(format!(
            "centering needs a square matrix, got {}x{}",
            g.rows(),
            g.cols()
        )));
    }
    let b = g.rows();
    let n = b as f64;
    let mut row_means = vec![0.0; b];
    let mut col_means = vec![0.0; b];
    for i in 0..b {
        for (j, &x) in g.row(i).iter().enumerate() {
            row_means[i] += x;
            col_means[j] += x;
        }
    }
    row_means.iter_mut().for_each(|m| *m /= n);
    col_means.iter_mut().for_each(|m| *m /= n);
    let grand = row_means.iter().sum::<f64>() / n;
    Ok(Matrix::from_fn(b, b, |i, j| {
        g[(i, j)] - row_means[i] - col_means[j] + grand
    }))
}

/// Double-centers an uncentered Gram matrix.
pub fn double_center(g: &GramMatrix) -> Result<GramMatrix> {
    if g.centered {
        return Err(Error::AlreadyCentered);
    }
    let b = g.size();
    let n = b as f64;
    // symmetric input: row means equal column means, so only rows are needed
    let means: Vec<f64> = g.data.row_iter().map(|r| r.iter().sum::<f64>() / n).collect();
    let grand = means.iter().sum::<f64>() / n;
    let mut data = Matrix::zeros(b, b);
    for i in 0..b {
        for j in i..b {
            let v = g.data[(i, j)] - means[i] - means[j] + grand;
            data[(i, j)] = v;
            data[(j, i)] = v;
        }
    }
    Ok(GramMatrix {
        data,
        centered: true,
        kernel: g.kernel,
        gamma: g.gamma,
    })
}
