//! Datasets, paired-view augmentation and file formats.

use std::f64::consts::PI;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::Matrix;

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

/// Samples with labels. Labels are only used for probing.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub samples: Matrix,
    pub labels: Vec<usize>,
    pub num_classes: usize,
    pub name: String,
}

impl Dataset {
    pub fn new(samples: Matrix, labels: Vec<usize>, name: impl Into<String>) -> Result<Self> {
        if samples.rows() == 0 {
            return Err(Error::invalid("dataset must contain at least one sample"));
        }
        if samples.rows() != labels.len() {
            return Err(Error::shape(format!(
                "{} samples but {} labels",
                samples.rows(),
                labels.len()
            )));
        }
        if !samples.all_finite() {
            return Err(Error::NonFinite("dataset samples"));
        }
        let num_classes = labels.iter().max().map_or(0, |&m| m + 1);
        Ok(Self {
            samples,
            labels,
            num_classes,
            name: name.into(),
        })
    }

    pub fn len(&self) -> usize {
        self.samples.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.rows() == 0
    }

    pub fn dim(&self) -> usize {
        self.samples.cols()
    }

    /// Writes `label,f0,f1,...` with 17 significant digits per real.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        write_labeled_csv(w, "f", &self.samples, &self.labels)
    }
}

/// Formats a real with 17 significant digits.
pub fn format_real(x: f64) -> String {
    format!("{x:.16e}")
}

/// CSV with header `label,{prefix}0,{prefix}1,...`, one row per sample.
pub fn write_labeled_csv<W: Write>(mut w: W, prefix: &str, rows: &Matrix, labels: &[usize]) -> Result<()> {
    if rows.rows() != labels.len() {
        return Err(Error::shape("row and label counts differ"));
    }
    let mut header = String::from("label");
    for j in 0..rows.cols() {
        header.push_str(&format!(",{prefix}{j}"));
    }
    writeln!(w, "{header}")?;
    for (row, label) in rows.row_iter().zip(labels) {
        let mut line = label.to_string();
        for &x in row {
            line.push(',');
            line.push_str(&format_real(x));
        }
        writeln!(w, "{line}")?;
    }
    Ok(())
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

/// Isotropic Gaussian blobs around seed-derived unit-norm centers scaled by
/// `4·spread`.
pub fn make_blobs(num_classes: usize, per_class: usize, dim: usize, spread: f64, seed: u64) -> Result<Dataset> {
    if num_classes == 0 || per_class == 0 || dim == 0 {
        return Err(Error::invalid("blob counts and dimension must be positive"));
    }
    if !(spread > 0.0 && spread.is_finite()) {
        return Err(Error::invalid("spread must be > 0"));
    }
    let centers = blob_centers(num_classes, dim, spread, seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(1));
    let n = num_classes * per_class;
    let mut samples = Matrix::zeros(n, dim);
    let mut labels = Vec::with_capacity(n);
    for c in 0..num_classes {
        for k in 0..per_class {
            let row = samples.row_mut(c * per_class + k);
            for (x, m) in row.iter_mut().zip(centers.row(c)) {
                *x = m + spread * normal(&mut rng);
            }
            labels.push(c);
        }
    }
    Dataset::new(samples, labels, "blobs")
}

/// Class centers used by [`make_blobs`] for the same arguments.
pub fn blob_centers(num_classes: usize, dim: usize, spread: f64, seed: u64) -> Matrix {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centers = Matrix::zeros(num_classes, dim);
    for c in 0..num_classes {
        let row = centers.row_mut(c);
        loop {
            row.iter_mut().for_each(|x| *x = normal(&mut rng));
            let norm = row.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm > 1e-12 {
                row.iter_mut().for_each(|x| *x *= 4.0 * spread / norm);
                break;
            }
        }
    }
    centers
}

fn add_noise(samples: &mut Matrix, sigma: f64, rng: &mut ChaCha8Rng) {
    if sigma > 0.0 {
        for x in samples.as_mut_slice() {
            *x += sigma * normal(rng);
        }
    }
}

fn check_curve_args(per_class: usize, noise_sigma: f64) -> Result<()> {
    if per_class == 0 {
        return Err(Error::invalid("per_class must be >= 1"));
    }
    if !(noise_sigma >= 0.0 && noise_sigma.is_finite()) {
        return Err(Error::invalid("noise_sigma must be >= 0"));
    }
    Ok(())
}

/// Two interleaved half circles: label 0 on `(cos t, sin t)`, label 1 on
/// `(1 − cos t, 1/2 − sin t)`, `t` evenly spaced on `[0, π]`.
pub fn make_two_moons(per_class: usize, noise_sigma: f64, seed: u64) -> Result<Dataset> {
    check_curve_args(per_class, noise_sigma)?;
    let step = if per_class > 1 { PI / (per_class - 1) as f64 } else { 0.0 };
    let mut samples = Matrix::zeros(2 * per_class, 2);
    let mut labels = Vec::with_capacity(2 * per_class);
    for k in 0..per_class {
        let t = k as f64 * step;
        samples.row_mut(k).copy_from_slice(&[t.cos(), t.sin()]);
        labels.push(0);
    }
    for k in 0..per_class {
        let t = k as f64 * step;
        samples
            .row_mut(per_class + k)
            .copy_from_slice(&[1.0 - t.cos(), 0.5 - t.sin()]);
        labels.push(1);
    }
    add_noise(&mut samples, noise_sigma, &mut ChaCha8Rng::seed_from_u64(seed));
    Dataset::new(samples, labels, "moons")
}

/// Concentric circles: label 0 on the unit circle, label 1 at radius
/// `radius_ratio`.
pub fn make_circles(per_class: usize, noise_sigma: f64, radius_ratio: f64, seed: u64) -> Result<Dataset> {
    check_curve_args(per_class, noise_sigma)?;
    if !(radius_ratio > 0.0 && radius_ratio < 1.0) {
        return Err(Error::invalid("radius_ratio must lie in (0, 1)"));
    }
    let mut samples = Matrix::zeros(2 * per_class, 2);
    let mut labels = Vec::with_capacity(2 * per_class);
    for (c, r) in [(0, 1.0), (1, radius_ratio)] {
        for k in 0..per_class {
            let t = 2.0 * PI * k as f64 / per_class as f64;
            samples
                .row_mut(c * per_class + k)
                .copy_from_slice(&[r * t.cos(), r * t.sin()]);
            labels.push(c);
        }
    }
    add_noise(&mut samples, noise_sigma, &mut ChaCha8Rng::seed_from_u64(seed));
    Dataset::new(samples, labels, "circles")
}

/// Strengths of the synthetic augmentation chain, applied in the order
/// rotation → scale → mask → noise.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AugmentationSpec {
    /// Standard deviation of additive Gaussian noise.
    pub noise_sigma: f64,
    /// Maximum rotation, in degrees, applied to consecutive coordinate pairs.
    pub rotation_max_deg: f64,
    /// Multiplicative jitter drawn from `[1 − s, 1 + s]`.
    pub scale_jitter: f64,
    /// Probability of zeroing each coordinate.
    pub mask_prob: f64,
}

impl Default for AugmentationSpec {
    fn default() -> Self {
        Self {
            noise_sigma: 0.3,
            rotation_max_deg: 0.0,
            scale_jitter: 0.1,
            mask_prob: 0.1,
        }
    }
}

impl AugmentationSpec {
    pub fn identity() -> Self {
        Self {
            noise_sigma: 0.0,
            rotation_max_deg: 0.0,
            scale_jitter: 0.0,
            mask_prob: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = |x: f64| x >= 0.0 && x.is_finite();
        if !(ok(self.noise_sigma) && ok(self.rotation_max_deg) && ok(self.scale_jitter)) {
            return Err(Error::invalid("augmentation strengths must be finite and >= 0"));
        }
        if !(0.0..1.0).contains(&self.mask_prob) {
            return Err(Error::invalid(format!(
                "mask_prob must lie in [0, 1), got {}",
                self.mask_prob
            )));
        }
        Ok(())
    }

    fn apply(&self, row: &mut [f64], rng: &mut ChaCha8Rng) {
        if self.rotation_max_deg > 0.0 {
            let max = self.rotation_max_deg.to_radians();
            let (s, c) = rng.random_range(-max..=max).sin_cos();
            for pair in row.chunks_exact_mut(2) {
                let (x, y) = (pair[0], pair[1]);
                pair[0] = c * x - s * y;
                pair[1] = s * x + c * y;
            }
        }
        if self.scale_jitter > 0.0 {
            let f = rng.random_range(1.0 - self.scale_jitter..=1.0 + self.scale_jitter);
            row.iter_mut().for_each(|x| *x *= f);
        }
        if self.mask_prob > 0.0 {
            for x in row.iter_mut() {
                if rng.random::<f64>() < self.mask_prob {
                    *x = 0.0;
                }
            }
        }
        if self.noise_sigma > 0.0 {
            for x in row.iter_mut() {
                *x += self.noise_sigma * normal(rng);
            }
        }
    }
}

/// Two augmented views of the same source rows.
#[derive(Debug, Clone, PartialEq)]
pub struct ViewPairBatch {
    pub view_a: Matrix,
    pub view_b: Matrix,
    pub source_indices: Vec<usize>,
}

/// Mixes a run seed and a batch counter into one augmentation seed.
pub fn batch_seed(seed: u64, counter: u64) -> u64 {
    // splitmix64 finalizer over the pair
    let mut z = seed ^ counter.wrapping_add(0x9E37_79B9_7F4A_7C15).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Draws two independent augmentations of each selected sample.
pub fn augment_pair(ds: &Dataset, indices: &[usize], spec: &AugmentationSpec, seed: u64) -> Result<ViewPairBatch> {
    spec.validate()?;
    let source = ds.samples.select_rows(indices)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut view_a = source.clone();
    let mut view_b = source;
    for i in 0..indices.len() {
        spec.apply(view_a.row_mut(i), &mut rng);
        spec.apply(view_b.row_mut(i), &mut rng);
    }
    Ok(ViewPairBatch {
        view_a,
        view_b,
        source_indices: indices.to_vec(),
    })
}

/// Seeded permutation of `0..n`.
pub fn shuffled_indices(n: usize, seed: u64) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    idx
}

/// Endless stream of minibatch index sets: each epoch is a fresh seeded
/// permutation, cut into batches of `batch_size`, dropping the remainder.
#[derive(Debug, Clone)]
pub struct BatchSampler {
    n: usize,
    batch_size: usize,
    seed: u64,
    epoch: u64,
    order: Vec<usize>,
    pos: usize,
}

impl BatchSampler {
    pub fn new(n: usize, batch_size: usize, seed: u64) -> Result<Self> {
        if batch_size == 0 || batch_size > n {
            return Err(Error::invalid(format!(
                "batch size {batch_size} does not fit a dataset of {n}"
            )));
        }
        Ok(Self {
            n,
            batch_size,
            seed,
            epoch: 0,
            order: shuffled_indices(n, batch_seed(seed, 0)),
            pos: 0,
        })
    }

    pub fn next_batch(&mut self) -> Vec<usize> {
        if self.pos + self.batch_size > self.n {
            self.epoch += 1;
            self.order = shuffled_indices(self.n, batch_seed(self.seed, self.epoch));
            self.pos = 0;
        }
        let out = self.order[self.pos..self.pos + self.batch_size].to_vec();
        self.pos += self.batch_size;
        out
    }
}

struct IdxReader<'a> {
    bytes: &'a [u8],
    offset: usize,
    what: &'static str,
}

impl<'a> IdxReader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.offset < n {
            return Err(Error::Format {
                message: format!("{} file truncated", self.what),
                offset: self.bytes.len(),
            });
        }
        let s = &self.bytes[self.offset..self.offset + n];
        self.offset += n;
        Ok(s)
    }

    fn u32_be(&mut self) -> Result<u32> {
        Ok(u32::from_be_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn magic(&mut self, expected: u32) -> Result<()> {
        let m = self.u32_be()?;
        if m != expected {
            return Err(Error::Format {
                message: format!(
                    "{} file has magic {m:#010x}, expected {expected:#010x}",
                    self.what
                ),
                offset: 0,
            });
        }
        Ok(())
    }
}

/// Parses an IDX image file and its label file. Pixels are rescaled to
/// `[0, 1]` and each image flattened row-major.
pub fn parse_idx(images: &[u8], labels: &[u8]) -> Result<Dataset> {
    let mut img = IdxReader {
        bytes: images,
        offset: 0,
        what: "images",
    };
    img.magic(IDX_IMAGES_MAGIC)?;
    let n = img.u32_be()? as usize;
    let rows = img.u32_be()? as usize;
    let cols = img.u32_be()? as usize;

    let mut lab = IdxReader {
        bytes: labels,
        offset: 0,
        what: "labels",
    };
    lab.magic(IDX_LABELS_MAGIC)?;
    let n_labels = lab.u32_be()? as usize;
    if n_labels != n {
        return Err(Error::Format {
            message: format!("label count {n_labels} disagrees with image count {n}"),
            offset: 4,
        });
    }
    if n == 0 {
        return Err(Error::Format {
            message: "IDX files contain no samples".into(),
            offset: 4,
        });
    }

    let d = rows * cols;
    let pixels = img.take(n * d)?;
    let label_bytes = lab.take(n)?;
    if img.offset != images.len() {
        return Err(Error::Format {
            message: "trailing bytes in images file".into(),
            offset: img.offset,
        });
    }
    if lab.offset != labels.len() {
        return Err(Error::Format {
            message: "trailing bytes in labels file".into(),
            offset: lab.offset,
        });
    }
    let samples = Matrix::from_vec(n, d, pixels.iter().map(|&p| f64::from(p) / 255.0).collect())?;
    let labels = label_bytes.iter().map(|&l| usize::from(l)).collect();
    Dataset::new(samples, labels, "idx")
}

pub fn load_idx(images_path: impl AsRef<Path>, labels_path: impl AsRef<Path>) -> Result<Dataset> {
    let images = std::fs::read(images_path)?;
    let labels = std::fs::read(labels_path)?;
    parse_idx(&images, &labels)
}
