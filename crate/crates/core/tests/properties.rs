use kvicreg_core::kernels::{
    double_center, double_center_matrix, gram, resolve_bandwidth, Bandwidth,
};
use kvicreg_core::linalg::{frobenius_sq, symmetric_eig, trace};
use kvicreg_core::loss::{
    kernel_covariance, kernel_variance, kernel_vicreg_loss, CovarianceVariant, KernelVicreg,
};
use kvicreg_core::{EmbeddingBatch, Error, KernelKind, KernelSpec, LossWeights, Matrix, Objective};
use proptest::prelude::*;

fn matrix(rows: std::ops::RangeInclusive<usize>, cols: std::ops::RangeInclusive<usize>) -> impl Strategy<Value = Matrix> {
    (rows, cols).prop_flat_map(|(r, c)| {
        prop::collection::vec(-3.0f64..3.0, r * c).prop_map(move |v| Matrix::from_vec(r, c, v).unwrap())
    })
}

fn kind() -> impl Strategy<Value = KernelKind> {
    prop::sample::select(KernelKind::ALL.to_vec())
}

fn batch(m: Matrix) -> EmbeddingBatch {
    EmbeddingBatch::new(m).unwrap()
}

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-300)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn centered_gram_is_psd(k in kind(), z in matrix(2..=16, 1..=5)) {
        let c = double_center(&gram(&KernelSpec::new(k), &batch(z)).unwrap()).unwrap();
        let eig = symmetric_eig(c.matrix()).unwrap().eigenvalues;
        let lmax = eig[0].abs();
        prop_assert!(*eig.last().unwrap() >= -1e-8 * lmax.max(1e-12));
    }

    #[test]
    fn centering_is_idempotent(k in kind(), z in matrix(2..=12, 1..=4)) {
        let g = gram(&KernelSpec::new(k), &batch(z)).unwrap();
        let once = double_center_matrix(g.matrix()).unwrap();
        let twice = double_center_matrix(&once).unwrap();
        prop_assert!(twice.sub(&once).unwrap().max_abs() <= 1e-12 * once.max_abs().max(1.0));
        let centered = double_center(&g).unwrap();
        prop_assert!(matches!(double_center(&centered), Err(Error::AlreadyCentered)));
    }

    #[test]
    fn centered_linear_gram_factorizes(z in matrix(2..=12, 1..=5)) {
        let c = double_center(&gram(&KernelSpec::linear(), &batch(z.clone())).unwrap()).unwrap();
        let zc = z.column_centered();
        let expected = zc.matmul(&zc.transpose()).unwrap();
        prop_assert!(c.matrix().sub(&expected).unwrap().max_abs() <= 1e-12 * expected.max_abs().max(1.0));
    }

    #[test]
    fn bandwidth_is_scale_covariant(z in matrix(3..=10, 1..=4), s in 0.1f64..10.0) {
        let b = batch(z.clone());
        let scaled = batch(z.scale(s));
        let rbf = KernelSpec::rbf(Bandwidth::MedianHeuristic);
        let lap = KernelSpec::laplacian(Bandwidth::MedianHeuristic);
        let g = resolve_bandwidth(&rbf, &b).unwrap();
        prop_assume!(g != 1.0 || resolve_bandwidth(&rbf, &scaled).unwrap() != 1.0);
        prop_assert!(rel(resolve_bandwidth(&rbf, &scaled).unwrap(), g / (s * s)) < 1e-12);
        prop_assert!(rel(resolve_bandwidth(&lap, &scaled).unwrap(), resolve_bandwidth(&lap, &b).unwrap() / s) < 1e-12);
    }

    #[test]
    fn loss_terms_are_permutation_invariant(k in kind(), z in matrix(3..=10, 1..=4), seed in 0u64..1000) {
        let zp = z.map(|x| x * 0.9 + 0.05);
        let mut order: Vec<usize> = (0..z.rows()).collect();
        order.rotate_left((seed as usize) % z.rows());
        order.swap(0, z.rows() - 1);
        let w = LossWeights::default();
        let spec = KernelSpec::new(k);
        let a = kernel_vicreg_loss(&spec, &batch(z.clone()), &batch(zp.clone()), &w).unwrap();
        let b = kernel_vicreg_loss(
            &spec,
            &batch(z.select_rows(&order).unwrap()),
            &batch(zp.select_rows(&order).unwrap()),
            &w,
        )
        .unwrap();
        for (x, y) in [(a.total, b.total), (a.invariance, b.invariance), (a.variance_x, b.variance_x), (a.covariance_x, b.covariance_x)] {
            prop_assert!((x - y).abs() <= 1e-10 * x.abs().max(1.0));
        }
    }

    #[test]
    fn variance_and_covariance_ignore_translation(k in kind(), z in matrix(3..=10, 1..=4), t in -5.0f64..5.0) {
        let spec = KernelSpec::new(k);
        // the polynomial kernel is neither shift invariant nor linear
        prop_assume!(k != KernelKind::Polynomial);
        let shifted = z.map(|x| x + t);
        let w = LossWeights::default();
        let (v0, v1) = (kernel_variance(&spec, &batch(z.clone()), &w).unwrap(), kernel_variance(&spec, &batch(shifted.clone()), &w).unwrap());
        let (c0, c1) = (kernel_covariance(&spec, &batch(z)).unwrap(), kernel_covariance(&spec, &batch(shifted)).unwrap());
        prop_assert!((v0 - v1).abs() <= 1e-9 * v0.abs().max(1.0));
        prop_assert!((c0 - c1).abs() <= 1e-9 * c0.abs().max(1.0));
    }

    #[test]
    fn reports_are_nonnegative_and_recombine(
        k in kind(),
        z in matrix(2..=10, 1..=4),
        a in 0.0f64..3.0, b in 0.0f64..3.0, c in 0.0f64..3.0,
        squared in any::<bool>(),
    ) {
        let zp = z.map(|x| x.sin());
        let b_rows = z.rows();
        let w = LossWeights::new(a, b, c);
        let variant = if squared { CovarianceVariant::Squared } else { CovarianceVariant::Sqrt };
        let r = KernelVicreg::new(KernelSpec::new(k), w).with_covariance(variant).loss(&batch(z), &batch(zp)).unwrap();
        for v in [r.invariance, r.variance_x, r.variance_xp, r.covariance_x, r.covariance_xp] {
            prop_assert!(v >= 0.0);
        }
        prop_assert!((r.total - r.recombine(&w)).abs() <= 1e-12 * r.total.abs().max(1e-300));
        prop_assert_eq!(r.top_eigenvalues.len(), b_rows.min(8));
    }

    #[test]
    fn spectrum_survives_rotation(a in matrix(2..=8, 2..=8), q in matrix(8..=8, 8..=8)) {
        let n = a.rows().min(a.cols());
        let a = Matrix::from_fn(n, n, |i, j| a[(i.max(j), i.min(j))]);
        let q = orthonormalize(&Matrix::from_fn(n, n, |i, j| q[(i, j)] + if i == j { 4.0 } else { 0.0 }));
        let rotated = q.t_matmul(&a.matmul(&q).unwrap()).unwrap();
        let rotated = Matrix::from_fn(n, n, |i, j| 0.5 * (rotated[(i, j)] + rotated[(j, i)]));
        let e0 = symmetric_eig(&a).unwrap().eigenvalues;
        let e1 = symmetric_eig(&rotated).unwrap().eigenvalues;
        for (x, y) in e0.iter().zip(&e1) {
            prop_assert!((x - y).abs() <= 1e-9 * a.max_abs().max(1.0));
        }
        let tr = trace(&a).unwrap();
        prop_assert!((e0.iter().sum::<f64>() - tr).abs() <= 1e-10 * tr.abs().max(1.0));
        prop_assert!((e0.iter().map(|l| l * l).sum::<f64>() - frobenius_sq(&a)).abs() <= 1e-10 * frobenius_sq(&a).max(1.0));
    }
}

/// Modified Gram–Schmidt on the columns.
fn orthonormalize(m: &Matrix) -> Matrix {
    let n = m.cols();
    let mut cols: Vec<Vec<f64>> = (0..n).map(|j| m.column(j)).collect();
    for j in 0..n {
        for k in 0..j {
            let d: f64 = cols[j].iter().zip(&cols[k]).map(|(a, b)| a * b).sum();
            let ck = cols[k].clone();
            cols[j].iter_mut().zip(&ck).for_each(|(a, b)| *a -= d * b);
        }
        let norm = cols[j].iter().map(|x| x * x).sum::<f64>().sqrt();
        cols[j].iter_mut().for_each(|x| *x /= norm);
    }
    Matrix::from_fn(m.rows(), n, |i, j| cols[j][i])
}

#[test]
fn constant_batch_is_the_collapse_fixed_point() {
    let z = batch(Matrix::filled(6, 3, 0.7));
    let w = LossWeights::default();
    for k in KernelKind::ALL {
        let spec = KernelSpec::new(k);
        let v = kernel_variance(&spec, &z, &w).unwrap();
        assert!((v - (1.0 - 1e-3f64).powi(2)).abs() < 1e-12, "{k:?}: {v}");
        assert_eq!(kernel_covariance(&spec, &z).unwrap(), 0.0);
    }
}
