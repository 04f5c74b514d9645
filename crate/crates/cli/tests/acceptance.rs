//! Acceptance criteria 1 through 9, one test each. Every test prints a
//! single `criterion N: PASS|FAIL (...)` line; run with `--nocapture` to see
//! them.

mod common;

use std::fs;
use std::time::{Duration, Instant};

use common::{probe_accuracy, read_metrics, run, verdict, write_config};
use kvicreg_core::data::parse_idx;
use kvicreg_core::kernels::{double_center, gram, Bandwidth};
use kvicreg_core::linalg::{frobenius_sq, symmetric_eig, trace};
use kvicreg_core::loss::{euclidean_invariance, kernel_covariance, kernel_invariance};
use kvicreg_core::train::{TrainConfig, EMBEDDINGS_FILE, METRICS_FILE};
use kvicreg_core::{EmbeddingBatch, Error, KernelKind, KernelSpec, LossWeights, Matrix};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

fn normal_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| StandardNormal.sample(rng))
}

fn normal_batch(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> EmbeddingBatch {
    EmbeddingBatch::new(normal_matrix(rng, rows, cols)).unwrap()
}

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / (1.0 + b.abs())
}

fn secs(d: Duration) -> String {
    format!("{:.2}s", d.as_secs_f64())
}

#[test]
fn criterion_1_linear_invariance_equivalence() {
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst = 0.0f64;
    for trial in 0..50 {
        let b = [2, 8, 32][trial % 3];
        let p = [1, 4, 16][(trial / 3) % 3];
        let zx = normal_batch(&mut rng, b, p);
        let zxp = normal_batch(&mut rng, b, p);
        let k = kernel_invariance(&KernelSpec::linear(), &zx, &zxp).unwrap();
        let e = euclidean_invariance(&zx, &zxp).unwrap();
        worst = worst.max(rel(k, e));
    }
    let elapsed = t.elapsed();
    verdict(
        1,
        worst <= 1e-10 && elapsed < Duration::from_secs(1),
        format!("max |kernel - euclidean| / (1 + |value|) = {worst:.2e}, {}", secs(elapsed)),
    );
}

fn biased_column_variances(z: &Matrix) -> Vec<f64> {
    let c = z.column_centered();
    (0..c.cols())
        .map(|j| c.column(j).iter().map(|x| x * x).sum::<f64>() / c.rows() as f64)
        .collect()
}

#[test]
fn criterion_2_kernel_pca_variance_identity() {
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (mut worst_sum, mut worst_eig) = (0.0f64, 0.0f64);
    for _ in 0..20 {
        let b = rng.random_range(2..=40);
        let p = rng.random_range(1..=10);
        let z = normal_batch(&mut rng, b, p);
        let centered = double_center(&gram(&KernelSpec::linear(), &z).unwrap()).unwrap();
        let lambdas = symmetric_eig(centered.matrix()).unwrap().eigenvalues;
        let bf = b as f64;

        let total_var: f64 = biased_column_variances(z.matrix()).iter().sum();
        let sum_l: f64 = lambdas.iter().sum::<f64>() / bf;
        worst_sum = worst_sum.max((sum_l - total_var).abs() / total_var);

        let zc = z.matrix().column_centered();
        let cov = zc.t_matmul(&zc).unwrap().scale(1.0 / (bf - 1.0));
        let cov_eig = symmetric_eig(&cov).unwrap().eigenvalues;
        let nonzero = p.min(b - 1);
        for i in 0..nonzero {
            let expected = (bf - 1.0) / bf * cov_eig[i];
            let got = lambdas[i] / bf;
            worst_eig = worst_eig.max((got - expected).abs() / expected.abs().max(1.0));
        }
    }
    let elapsed = t.elapsed();
    verdict(
        2,
        worst_sum <= 1e-8 && worst_eig <= 1e-8 && elapsed < Duration::from_secs(1),
        format!(
            "trace identity rel err {worst_sum:.2e}, eigenvalue match err {worst_eig:.2e}, {}",
            secs(elapsed)
        ),
    );
}

#[test]
fn criterion_3_gradient_oracle() {
    let t = Instant::now();
    let out = run(&["gradcheck", "--trials", "10", "--tolerance", "1e-4"]);
    let elapsed = t.elapsed();
    let stdout = String::from_utf8_lossy(&out.stdout);
    let kernels_reported = stdout.lines().filter(|l| l.contains("max relative error")).count();
    let worst = stdout
        .lines()
        .filter_map(|l| l.split("max relative error ").nth(1))
        .filter_map(|s| s.split_whitespace().next()?.parse::<f64>().ok())
        .fold(0.0, f64::max);
    verdict(
        3,
        out.status.code() == Some(0) && kernels_reported == 5 && elapsed < Duration::from_secs(30),
        format!(
            "exit {:?}, {kernels_reported} kernels, worst max relative error {worst:.2e}, {}",
            out.status.code(),
            secs(elapsed)
        ),
    );
}

#[test]
fn criterion_4_centering_and_spectrum() {
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (mut row_sum, mut neg, mut tr_err, mut fro_err) = (0.0f64, 0.0f64, 0.0f64, 0.0f64);
    for i in 0..100 {
        let kind = KernelKind::ALL[i % 5];
        let b = rng.random_range(2..=24);
        let p = rng.random_range(1..=6);
        let z = normal_batch(&mut rng, b, p);
        let k = gram(&KernelSpec::new(kind), &z).unwrap();
        let kh = double_center(&k).unwrap();
        let m = kh.matrix();
        let scale = k.matrix().max_abs().max(1.0);
        for r in m.row_iter() {
            row_sum = row_sum.max(r.iter().sum::<f64>().abs() / scale);
        }
        let eig = symmetric_eig(m).unwrap().eigenvalues;
        let lmax = eig[0].abs().max(f64::MIN_POSITIVE);
        neg = neg.max(-eig[eig.len() - 1] / lmax);
        let tr = trace(m).unwrap();
        let fro = frobenius_sq(m);
        tr_err = tr_err.max((eig.iter().sum::<f64>() - tr).abs() / tr.abs().max(f64::MIN_POSITIVE));
        fro_err = fro_err.max((eig.iter().map(|l| l * l).sum::<f64>() - fro).abs() / fro.max(f64::MIN_POSITIVE));
    }
    let elapsed = t.elapsed();
    verdict(
        4,
        row_sum <= 1e-9 && neg <= 1e-8 && tr_err <= 1e-10 && fro_err <= 1e-10 && elapsed < Duration::from_secs(10),
        format!(
            "row sums {row_sum:.1e}, -min/max eig {neg:.1e}, trace {tr_err:.1e}, frobenius {fro_err:.1e}, {}",
            secs(elapsed)
        ),
    );
}

#[test]
fn criterion_5_hs_covariance_oracle() {
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let b = rng.random_range(2..=10);
        let p = rng.random_range(1..=4);
        let z = normal_batch(&mut rng, b, p);
        let zc = z.matrix().column_centered();
        let mut mass = 0.0;
        for i in 0..b {
            for j in 0..b {
                if i != j {
                    let d: f64 = zc.row(i).iter().zip(zc.row(j)).map(|(a, c)| a * c).sum();
                    mass += d * d;
                }
            }
        }
        let expected = mass.sqrt() / b as f64;
        let got = kernel_covariance(&KernelSpec::linear(), &z).unwrap();
        worst = worst.max((got - expected).abs() / expected.abs().max(f64::MIN_POSITIVE));
    }
    let elapsed = t.elapsed();
    verdict(
        5,
        worst <= 1e-10 && elapsed < Duration::from_secs(1),
        format!("max relative error vs brute force {worst:.2e}, {}", secs(elapsed)),
    );
}

/// Real roots of a symmetric 2×2 or 3×3 matrix's characteristic polynomial,
/// descending.
fn char_poly_eigenvalues(a: &Matrix) -> Vec<f64> {
    let mut out = match a.rows() {
        2 => {
            let (p, q, r) = (a[(0, 0)], a[(0, 1)], a[(1, 1)]);
            let mean = (p + r) / 2.0;
            let rad = (((p - r) / 2.0).powi(2) + q * q).sqrt();
            vec![mean + rad, mean - rad]
        }
        3 => {
            // trigonometric solution of the depressed cubic
            let q = (a[(0, 0)] + a[(1, 1)] + a[(2, 2)]) / 3.0;
            let off = a[(0, 1)].powi(2) + a[(0, 2)].powi(2) + a[(1, 2)].powi(2);
            let p2 = (a[(0, 0)] - q).powi(2) + (a[(1, 1)] - q).powi(2) + (a[(2, 2)] - q).powi(2) + 2.0 * off;
            let p = (p2 / 6.0).sqrt();
            if p == 0.0 {
                return vec![q; 3];
            }
            let bm = Matrix::from_fn(3, 3, |i, j| (a[(i, j)] - if i == j { q } else { 0.0 }) / p);
            let det = bm[(0, 0)] * (bm[(1, 1)] * bm[(2, 2)] - bm[(1, 2)] * bm[(2, 1)])
                - bm[(0, 1)] * (bm[(1, 0)] * bm[(2, 2)] - bm[(1, 2)] * bm[(2, 0)])
                + bm[(0, 2)] * (bm[(1, 0)] * bm[(2, 1)] - bm[(1, 1)] * bm[(2, 0)]);
            let phi = (det / 2.0).clamp(-1.0, 1.0).acos() / 3.0;
            let l1 = q + 2.0 * p * phi.cos();
            let l3 = q + 2.0 * p * (phi + 2.0 * std::f64::consts::PI / 3.0).cos();
            vec![l1, 3.0 * q - l1 - l3, l3]
        }
        _ => unreachable!(),
    };
    out.sort_by(|x, y| y.total_cmp(x));
    out
}

#[test]
fn criterion_6_eigensolver_contract() {
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let (mut recon, mut ortho, mut poly) = (0.0f64, 0.0f64, 0.0f64);
    let mut small_cases = 0;
    for i in 0..200 {
        let n = match i % 4 {
            0 => 2,
            1 => 3,
            _ => rng.random_range(1..=64),
        };
        let g = normal_matrix(&mut rng, n, n);
        let a = g.add(&g.transpose()).unwrap().scale(0.5);
        let eig = symmetric_eig(&a).unwrap();
        let scale = a.max_abs().max(1.0);
        recon = recon.max(eig.reconstruct().sub(&a).unwrap().max_abs() / scale);
        let v = &eig.eigenvectors;
        ortho = ortho.max(v.t_matmul(v).unwrap().sub(&Matrix::identity(n)).unwrap().max_abs());
        if n == 2 || n == 3 {
            small_cases += 1;
            for (got, want) in eig.eigenvalues.iter().zip(char_poly_eigenvalues(&a)) {
                poly = poly.max((got - want).abs());
            }
        }
    }
    let elapsed = t.elapsed();
    verdict(
        6,
        recon <= 1e-9 && ortho <= 1e-10 && poly <= 1e-10 && elapsed < Duration::from_secs(20),
        format!(
            "reconstruction {recon:.1e}, orthonormality {ortho:.1e}, char-poly ({small_cases} cases) {poly:.1e}, {}",
            secs(elapsed)
        ),
    );
}

fn ablation_config(beta: f64, out: &std::path::Path) -> TrainConfig {
    TrainConfig {
        kernel: KernelSpec::rbf(Bandwidth::MedianHeuristic),
        weights: Some(LossWeights {
            beta,
            ..LossWeights::new(0.5, 2.0, 3.0)
        }),
        batch_size: 64,
        steps: 500,
        seed: 0,
        output_dir: out.to_path_buf(),
        ..TrainConfig::default()
    }
}

/// Trains and probes one arm of the ablation through the CLI; returns
/// (λ₁ at step 0, λ₁ at the last step, probe test accuracy).
fn ablation_arm(beta: f64, dir: &std::path::Path) -> (f64, f64, f64) {
    let out = dir.join(format!("beta{beta}"));
    let cfg = write_config(dir, &format!("beta{beta}.json"), &ablation_config(beta, &out));
    let cfg = cfg.to_str().unwrap();
    let train = run(&["train", "--config", cfg]);
    assert_eq!(train.status.code(), Some(0), "{}", String::from_utf8_lossy(&train.stderr));
    let probe = run(&["probe", "--config", cfg]);
    assert_eq!(probe.status.code(), Some(0), "{}", String::from_utf8_lossy(&probe.stderr));
    let (header, rows) = read_metrics(&out.join(METRICS_FILE));
    let l1 = header.split(',').position(|c| c == "lambda_1").unwrap();
    let last = rows.last().unwrap();
    assert_eq!(last[0], 500.0);
    (rows[0][l1], last[l1], probe_accuracy(&out))
}

#[test]
fn criterion_7_collapse_ablation() {
    let t = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let (_, with_end, with_acc) = ablation_arm(2.0, dir.path());
    let (without_start, without_end, without_acc) = ablation_arm(0.0, dir.path());
    let elapsed = t.elapsed();
    let b = 64.0;
    let with_ok = with_end > 0.5 * b && with_acc >= 0.90;
    let without_ok = without_end <= 1e-3 * without_start && without_acc <= 0.60;
    verdict(
        7,
        with_ok && without_ok && elapsed < Duration::from_secs(120),
        format!(
            "beta=2: lambda_1(500) {with_end:.3e} (needs > {}), probe {with_acc:.3} (needs >= 0.90); \
             beta=0: lambda_1 {without_start:.3e} -> {without_end:.3e} (ratio {:.2e}, needs <= 1e-3), probe {without_acc:.3} (needs <= 0.60); {}",
            0.5 * b,
            without_end / without_start,
            secs(elapsed)
        ),
    );
}

#[test]
fn criterion_8_determinism() {
    let t = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let mut outputs = Vec::new();
    for run_id in 0..2 {
        let out = dir.path().join(format!("run{run_id}"));
        let cfg = write_config(dir.path(), &format!("run{run_id}.json"), &ablation_config(2.0, &out));
        let r = run(&["train", "--config", cfg.to_str().unwrap()]);
        assert_eq!(r.status.code(), Some(0), "{}", String::from_utf8_lossy(&r.stderr));
        outputs.push((
            fs::read(out.join(METRICS_FILE)).unwrap(),
            fs::read(out.join(EMBEDDINGS_FILE)).unwrap(),
        ));
    }
    let elapsed = t.elapsed();
    let same = outputs[0] == outputs[1];
    verdict(
        8,
        same && elapsed < Duration::from_secs(120),
        format!(
            "metrics.csv {} bytes, embeddings.csv {} bytes, identical: {same}, {}",
            outputs[0].0.len(),
            outputs[0].1.len(),
            secs(elapsed)
        ),
    );
}

fn idx_header(magic: u32, dims: &[u32]) -> Vec<u8> {
    let mut v = magic.to_be_bytes().to_vec();
    for d in dims {
        v.extend_from_slice(&d.to_be_bytes());
    }
    v
}

#[test]
fn criterion_9_idx_ingestion() {
    let t = Instant::now();
    let mut images = idx_header(0x0803, &[2, 2, 2]);
    images.extend_from_slice(&[0, 255, 128, 64, 255, 0, 0, 0]);
    let mut labels = idx_header(0x0801, &[2]);
    labels.extend_from_slice(&[3, 7]);

    let ds = parse_idx(&images, &labels).unwrap();
    let fixture_ok = ds.samples.row(0) == [0.0, 1.0, 128.0 / 255.0, 64.0 / 255.0]
        && ds.samples.row(1) == [1.0, 0.0, 0.0, 0.0]
        && ds.labels == vec![3, 7];

    let header_only = idx_header(0x0803, &[2, 2, 2]);
    let mut bad_magic = images.clone();
    bad_magic[3] = 0x02;
    let mut short_labels = idx_header(0x0801, &[2]);
    short_labels.push(3);
    let mut trailing = images.clone();
    trailing.push(9);
    let cases: Vec<(&str, Vec<u8>, Vec<u8>)> = vec![
        ("header-only images", header_only, labels.clone()),
        ("bad image magic", bad_magic, labels.clone()),
        ("bad label magic", images.clone(), {
            let mut l = labels.clone();
            l[3] = 0x03;
            l
        }),
        ("count mismatch", images.clone(), {
            let mut l = idx_header(0x0801, &[3]);
            l.extend_from_slice(&[3, 7, 1]);
            l
        }),
        ("truncated labels", images.clone(), short_labels),
        ("truncated header", images[..6].to_vec(), labels.clone()),
        ("trailing bytes", trailing, labels.clone()),
    ];
    let mut failures = Vec::new();
    for (name, img, lab) in &cases {
        match parse_idx(img, lab) {
            Err(Error::Format { .. }) => {}
            other => failures.push(format!("{name}: {other:?}")),
        }
    }
    let header_msg = parse_idx(&cases[0].1, &labels).unwrap_err().to_string();
    let header_ok = header_msg.contains("truncated at offset 16");
    let elapsed = t.elapsed();
    verdict(
        9,
        fixture_ok && failures.is_empty() && header_ok && elapsed < Duration::from_secs(1),
        format!(
            "fixture exact: {fixture_ok}, {} malformed cases with offsets, header-only says {header_msg:?}{}, {}",
            cases.len() - failures.len(),
            if failures.is_empty() { String::new() } else { format!(", unexpected: {failures:?}") },
            secs(elapsed)
        ),
    );
}
