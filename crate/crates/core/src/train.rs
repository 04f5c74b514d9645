//! Run configuration, the self-supervised training loop, and the artifacts
//! it writes (`metrics.csv`, `checkpoint.bin`, `embeddings.csv`).

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::data::{
    augment_pair, batch_seed, format_real, load_idx, make_blobs, make_circles, make_two_moons,
    shuffled_indices, write_labeled_csv, AugmentationSpec, BatchSampler, Dataset,
};
use crate::encoder::{adam_step, AdamState, MlpNetwork};
use crate::error::{Error, Result};
use crate::kernels::{Bandwidth, EmbeddingBatch, KernelSpec};
use crate::loss::{
    CovarianceVariant, EuclideanVicreg, KernelVicreg, LossReport, LossWeights, Objective,
    TOP_EIGENVALUES,
};
use crate::matrix::Matrix;
use crate::probe::{evaluate, fit_probe, ProbeConfig};

/// A metrics row is written whenever `step % LOG_EVERY == 0`, plus once
/// after the last update.
pub const LOG_EVERY: usize = 10;

pub const METRICS_FILE: &str = "metrics.csv";
pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const EMBEDDINGS_FILE: &str = "embeddings.csv";

pub const METRICS_HEADER: &str = "step,total,invariance,variance_x,variance_xp,covariance_x,covariance_xp,lambda_1,lambda_2,lambda_3,lambda_4,lambda_5,lambda_6,lambda_7,lambda_8,wall_ms";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetConfig {
    Blobs {
        num_classes: usize,
        per_class: usize,
        dim: usize,
        spread: f64,
        seed: u64,
    },
    Moons {
        per_class: usize,
        noise_sigma: f64,
        seed: u64,
    },
    Circles {
        per_class: usize,
        noise_sigma: f64,
        radius_ratio: f64,
        seed: u64,
    },
    Idx {
        images: PathBuf,
        labels: PathBuf,
    },
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig::Blobs {
            num_classes: 3,
            per_class: 200,
            dim: 16,
            spread: 1.0,
            seed: 0,
        }
    }
}

impl DatasetConfig {
    pub fn load(&self) -> Result<Dataset> {
        match self {
            DatasetConfig::Blobs { num_classes, per_class, dim, spread, seed } => {
                make_blobs(*num_classes, *per_class, *dim, *spread, *seed)
            }
            DatasetConfig::Moons { per_class, noise_sigma, seed } => {
                make_two_moons(*per_class, *noise_sigma, *seed)
            }
            DatasetConfig::Circles { per_class, noise_sigma, radius_ratio, seed } => {
                make_circles(*per_class, *noise_sigma, *radius_ratio, *seed)
            }
            DatasetConfig::Idx { images, labels } => load_idx(images, labels),
        }
    }
}

/// Everything a `train` run needs. Missing keys take the values of
/// [`TrainConfig::default`], except `weights`, which falls back to the
/// tuned coefficients of the chosen kernel.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Free-form field descriptions; ignored by training.
    #[serde(rename = "_doc", skip_serializing_if = "BTreeMap::is_empty")]
    pub doc: BTreeMap<String, String>,
    pub dataset: DatasetConfig,
    pub encoder_dims: Vec<usize>,
    pub kernel: KernelSpec,
    #[serde(default)]
    pub weights: Option<LossWeights>,
    pub covariance_variant: CovarianceVariant,
    pub euclidean_baseline: bool,
    pub batch_size: usize,
    pub steps: usize,
    pub lr: f64,
    pub seed: u64,
    pub augmentation: AugmentationSpec,
    pub probe: ProbeConfig,
    pub output_dir: PathBuf,
    /// When false the `wall_ms` column is written as 0 so that repeated
    /// runs produce identical files.
    pub record_wall_clock: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let kernel = KernelSpec::rbf(Bandwidth::MedianHeuristic);
        Self {
            doc: BTreeMap::new(),
            dataset: DatasetConfig::default(),
            encoder_dims: vec![16, 32, 32, 8],
            weights: Some(LossWeights::tuned_for(kernel.kind)),
            kernel,
            covariance_variant: CovarianceVariant::Sqrt,
            euclidean_baseline: false,
            batch_size: 128,
            steps: 500,
            lr: 1e-3,
            seed: 0,
            augmentation: AugmentationSpec::default(),
            probe: ProbeConfig::default(),
            output_dir: PathBuf::from("runs/kvicreg"),
            record_wall_clock: false,
        }
    }
}

const FIELD_DOCS: &[(&str, &str)] = &[
    ("dataset", "kind = blobs | moons | circles | idx; idx takes `images` and `labels` paths"),
    ("encoder_dims", "MLP layer widths; the first must equal the dataset dimension"),
    ("kernel", "kind = linear | polynomial | rbf | laplacian | rational_quadratic; bandwidth = \"median_heuristic\" or {\"fixed\": g}"),
    ("weights", "alpha (invariance), beta (variance), zeta (covariance), gamma_thresh, epsilon; null picks per-kernel defaults"),
    ("covariance_variant", "sqrt | squared"),
    ("euclidean_baseline", "true trains the plain Euclidean objective instead of the kernel one"),
    ("batch_size", "pairs per step, at least 2"),
    ("steps", "optimizer updates"),
    ("lr", "Adam learning rate (constant)"),
    ("seed", "drives weight init, batch order and augmentation; --seed overrides it"),
    ("augmentation", "noise_sigma, rotation_max_deg, scale_jitter, mask_prob"),
    ("probe", "epochs and lr of the logistic-regression probe"),
    ("output_dir", "where artifacts go; --out overrides it"),
    ("record_wall_clock", "false writes wall_ms = 0 so reruns are byte-identical"),
];

impl TrainConfig {
    /// Strict JSON parse: unknown keys are rejected with the key name.
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path)?;
        Self::from_json(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// The default config with every field spelled out and annotated.
    pub fn template() -> Self {
        Self {
            doc: FIELD_DOCS
                .iter()
                .map(|(k, v)| (k.to_string(), v.to_string()))
                .collect(),
            ..Self::default()
        }
    }

    pub fn effective_weights(&self) -> LossWeights {
        self.weights.unwrap_or_else(|| LossWeights::tuned_for(self.kernel.kind))
    }

    /// Checks everything that does not require loading the dataset.
    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return Err(Error::invalid("batch_size must be at least 2"));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::invalid("lr must be > 0"));
        }
        if self.encoder_dims.len() < 2 || self.encoder_dims.contains(&0) {
            return Err(Error::invalid("encoder_dims needs at least two positive widths"));
        }
        self.kernel.validate()?;
        self.effective_weights().validate()?;
        self.augmentation.validate()?;
        if let DatasetConfig::Idx { images, labels } = &self.dataset {
            for p in [images, labels] {
                if !p.is_file() {
                    return Err(Error::Io(std::io::Error::new(
                        std::io::ErrorKind::NotFound,
                        format!("dataset file {} not found", p.display()),
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn objective(&self) -> Box<dyn Objective> {
        let w = self.effective_weights();
        if self.euclidean_baseline {
            Box::new(EuclideanVicreg::new(w))
        } else {
            Box::new(KernelVicreg::new(self.kernel, w).with_covariance(self.covariance_variant))
        }
    }
}

/// One line of `metrics.csv`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricsRow {
    pub step: usize,
    pub report: LossReport,
    pub wall_ms: f64,
}

impl MetricsRow {
    pub fn lambdas(&self) -> [f64; TOP_EIGENVALUES] {
        self.report.padded_eigenvalues()
    }

    pub fn to_csv_line(&self) -> String {
        let r = &self.report;
        let mut fields = vec![self.step.to_string()];
        fields.extend(
            [r.total, r.invariance, r.variance_x, r.variance_xp, r.covariance_x, r.covariance_xp]
                .iter()
                .chain(self.lambdas().iter())
                .chain(std::iter::once(&self.wall_ms))
                .map(|&v| format_real(v)),
        );
        fields.join(",")
    }
}

/// Encoder, optimizer and batch stream of a run, advanced one update at a
/// time.
pub struct Trainer {
    dataset: Dataset,
    net: MlpNetwork,
    adam: AdamState,
    objective: Box<dyn Objective>,
    sampler: BatchSampler,
    augmentation: AugmentationSpec,
    seed: u64,
    step: usize,
}

impl Trainer {
    pub fn new(config: &TrainConfig, dataset: Dataset) -> Result<Self> {
        config.validate()?;
        if config.encoder_dims[0] != dataset.dim() {
            return Err(Error::invalid(format!(
                "encoder input width {} does not match dataset dimension {}",
                config.encoder_dims[0],
                dataset.dim()
            )));
        }
        let net = MlpNetwork::init(&config.encoder_dims, config.seed)?;
        let adam = AdamState::new(&net, config.lr)?;
        let sampler = BatchSampler::new(dataset.len(), config.batch_size, config.seed)?;
        Ok(Self {
            dataset,
            net,
            adam,
            objective: config.objective(),
            sampler,
            augmentation: config.augmentation,
            seed: config.seed,
            step: 0,
        })
    }

    /// Number of updates applied so far.
    pub fn step(&self) -> usize {
        self.step
    }

    pub fn network(&self) -> &MlpNetwork {
        &self.net
    }

    pub fn dataset(&self) -> &Dataset {
        &self.dataset
    }

    fn next_views(&mut self) -> Result<(Matrix, Matrix)> {
        let idx = self.sampler.next_batch();
        let pair = augment_pair(
            &self.dataset,
            &idx,
            &self.augmentation,
            batch_seed(self.seed, self.step as u64),
        )?;
        Ok((pair.view_a, pair.view_b))
    }

    /// Draws the next batch and applies one Adam update. The report is the
    /// loss before the update.
    pub fn train_step(&mut self) -> Result<LossReport> {
        let (a, b) = self.next_views()?;
        let (za, tape_a) = self.net.forward(&a)?;
        let (zb, tape_b) = self.net.forward(&b)?;
        let (report, grads) = self
            .objective
            .loss_and_grad(&EmbeddingBatch::new(za)?, &EmbeddingBatch::new(zb)?)?;
        let (mut g, _) = self.net.backward(&tape_a, &grads.grad_x)?;
        let (gb, _) = self.net.backward(&tape_b, &grads.grad_xp)?;
        g.accumulate(&gb)?;
        adam_step(&mut self.net, &g, &mut self.adam)?;
        self.step += 1;
        Ok(report)
    }

    /// Loss on the next batch without updating the encoder. The batch is
    /// consumed, so a later `train_step` sees the one after it.
    pub fn evaluate_next(&mut self) -> Result<LossReport> {
        let (a, b) = self.next_views()?;
        let za = EmbeddingBatch::new(self.net.predict(&a)?)?;
        let zb = EmbeddingBatch::new(self.net.predict(&b)?)?;
        self.objective.loss(&za, &zb)
    }

    /// Encodings of the unaugmented dataset.
    pub fn embeddings(&self) -> Result<Matrix> {
        self.net.predict(&self.dataset.samples)
    }
}

pub fn write_metrics_header<W: Write>(mut w: W) -> Result<()> {
    writeln!(w, "{METRICS_HEADER}")?;
    Ok(())
}

/// What a finished run leaves behind.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub rows: Vec<MetricsRow>,
    pub network: MlpNetwork,
    pub embeddings: Matrix,
    pub labels: Vec<usize>,
    pub output_dir: PathBuf,
}

/// Runs `config.steps` updates, logging every [`LOG_EVERY`] steps and once
/// more after the last update, then writes the three artifacts into
/// `config.output_dir`.
pub fn run_training(config: &TrainConfig) -> Result<TrainOutcome> {
    config.validate()?;
    let dataset = config.dataset.load()?;
    let out_dir = config.output_dir.clone();
    fs::create_dir_all(&out_dir)?;

    let mut trainer = Trainer::new(config, dataset)?;
    let mut metrics = BufWriter::new(File::create(out_dir.join(METRICS_FILE))?);
    write_metrics_header(&mut metrics)?;
    let started = Instant::now();
    let wall_ms = || {
        if config.record_wall_clock {
            started.elapsed().as_secs_f64() * 1e3
        } else {
            0.0
        }
    };

    let mut rows = Vec::new();
    let mut log = |row: MetricsRow, rows: &mut Vec<MetricsRow>| -> Result<()> {
        writeln!(metrics, "{}", row.to_csv_line())?;
        rows.push(row);
        Ok(())
    };
    for step in 0..config.steps {
        let report = trainer.train_step()?;
        if step % LOG_EVERY == 0 {
            log(MetricsRow { step, report, wall_ms: wall_ms() }, &mut rows)?;
        }
    }
    if config.steps > 0 {
        let report = trainer.evaluate_next()?;
        log(MetricsRow { step: config.steps, report, wall_ms: wall_ms() }, &mut rows)?;
    }
    metrics.flush()?;
    drop(metrics);

    let network = trainer.network().clone();
    network.write_checkpoint(BufWriter::new(File::create(out_dir.join(CHECKPOINT_FILE))?))?;
    let embeddings = trainer.embeddings()?;
    let labels = trainer.dataset().labels.clone();
    let mut emb = BufWriter::new(File::create(out_dir.join(EMBEDDINGS_FILE))?);
    write_labeled_csv(&mut emb, "e", &embeddings, &labels)?;
    emb.flush()?;

    Ok(TrainOutcome {
        rows,
        network,
        embeddings,
        labels,
        output_dir: out_dir,
    })
}

/// Train/test accuracy of a linear probe on frozen encodings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ProbeOutcome {
    pub train_accuracy: f64,
    pub test_accuracy: f64,
    pub train_size: usize,
    pub test_size: usize,
    pub split_seed: u64,
}

/// Shuffles with `split_seed`, keeps the first 80% (rounded) for fitting
/// and scores the rest.
pub fn probe_embeddings(
    embeddings: &Matrix,
    labels: &[usize],
    classes: usize,
    split_seed: u64,
    config: &ProbeConfig,
) -> Result<ProbeOutcome> {
    let n = labels.len();
    if embeddings.rows() != n {
        return Err(Error::shape(format!("{} embeddings but {n} labels", embeddings.rows())));
    }
    let order = shuffled_indices(n, split_seed);
    let n_train = ((n as f64) * 0.8).round() as usize;
    if n_train == 0 || n_train == n {
        return Err(Error::invalid(format!("{n} samples are too few for an 80/20 split")));
    }
    let (train, test) = order.split_at(n_train);
    let pick = |ix: &[usize]| -> Result<(Matrix, Vec<usize>)> {
        Ok((embeddings.select_rows(ix)?, ix.iter().map(|&i| labels[i]).collect()))
    };
    let (xtr, ytr) = pick(train)?;
    let (xte, yte) = pick(test)?;
    let model = fit_probe(&xtr, &ytr, classes, config)?;
    Ok(ProbeOutcome {
        train_accuracy: evaluate(&model, &xtr, &ytr)?,
        test_accuracy: evaluate(&model, &xte, &yte)?,
        train_size: train.len(),
        test_size: test.len(),
        split_seed,
    })
}

/// Encodes `dataset` with `network` and probes the result.
pub fn probe_network(
    network: &MlpNetwork,
    dataset: &Dataset,
    split_seed: u64,
    config: &ProbeConfig,
) -> Result<ProbeOutcome> {
    if network.input_dim() != dataset.dim() {
        return Err(Error::invalid(format!(
            "checkpoint expects {} inputs but the dataset has {}",
            network.input_dim(),
            dataset.dim()
        )));
    }
    let emb = network.predict(&dataset.samples)?;
    probe_embeddings(&emb, &dataset.labels, dataset.num_classes, split_seed, config)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_config(dir: &Path) -> TrainConfig {
        TrainConfig {
            dataset: DatasetConfig::Blobs {
                num_classes: 3,
                per_class: 20,
                dim: 4,
                spread: 1.0,
                seed: 0,
            },
            encoder_dims: vec![4, 6, 3],
            batch_size: 8,
            steps: 12,
            output_dir: dir.to_path_buf(),
            ..TrainConfig::default()
        }
    }

    #[test]
    fn header_has_sixteen_columns() {
        assert_eq!(METRICS_HEADER.split(',').count(), 16);
    }

    #[test]
    fn unknown_key_is_named() {
        let err = TrainConfig::from_json(r#"{"stpes": 3}"#).unwrap_err();
        assert!(err.to_string().contains("stpes"), "{err}");
        assert!(err.is_io_or_parse());
    }

    #[test]
    fn unknown_nested_key_is_rejected() {
        let err = TrainConfig::from_json(r#"{"kernel": {"kind": "rbf", "sigma": 1}}"#).unwrap_err();
        assert!(err.to_string().contains("sigma"), "{err}");
        let err = TrainConfig::from_json(r#"{"dataset": {"kind": "moons", "per_class": 3, "noise_sigma": 0.1, "seed": 0, "x": 1}}"#)
            .unwrap_err();
        assert!(err.to_string().contains('x'), "{err}");
    }

    #[test]
    fn template_round_trips() {
        let t = TrainConfig::template();
        let back = TrainConfig::from_json(&t.to_json()).unwrap();
        assert_eq!(back, t);
        assert_eq!(TrainConfig { doc: BTreeMap::new(), ..back }, TrainConfig::default());
    }

    #[test]
    fn empty_object_is_default_with_kernel_weights() {
        let c = TrainConfig::from_json(r#"{"kernel": {"kind": "linear"}}"#).unwrap();
        assert_eq!(c.weights, None);
        assert_eq!(c.effective_weights(), LossWeights::new(0.5, 2.0, 3.0));
    }

    #[test]
    fn rejects_tiny_batch() {
        let c = TrainConfig { batch_size: 1, ..TrainConfig::default() };
        assert!(c.validate().is_err());
    }

    #[test]
    fn metrics_rows_and_files() {
        let dir = tempfile::tempdir().unwrap();
        let out = run_training(&small_config(dir.path())).unwrap();
        let steps: Vec<usize> = out.rows.iter().map(|r| r.step).collect();
        assert_eq!(steps, vec![0, 10, 12]);
        let text = fs::read_to_string(dir.path().join(METRICS_FILE)).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], METRICS_HEADER);
        assert_eq!(lines.len(), 4);
        assert!(lines[1..].iter().all(|l| l.split(',').count() == 16));
        let emb = fs::read_to_string(dir.path().join(EMBEDDINGS_FILE)).unwrap();
        assert!(emb.starts_with("label,e0,e1,e2\n"));
        assert_eq!(emb.lines().count(), 61);
        let bytes = fs::read(dir.path().join(CHECKPOINT_FILE)).unwrap();
        assert_eq!(MlpNetwork::from_checkpoint_bytes(&bytes).unwrap(), out.network);
    }

    #[test]
    fn zero_steps_writes_header_only() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = TrainConfig { steps: 0, ..small_config(dir.path()) };
        let out = run_training(&cfg).unwrap();
        assert!(out.rows.is_empty());
        let text = fs::read_to_string(dir.path().join(METRICS_FILE)).unwrap();
        assert_eq!(text, format!("{METRICS_HEADER}\n"));
        let init = MlpNetwork::init(&cfg.encoder_dims, cfg.seed).unwrap();
        assert_eq!(out.network, init);
    }

    #[test]
    fn mismatched_encoder_input_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = TrainConfig { encoder_dims: vec![5, 3], ..small_config(dir.path()) };
        assert!(run_training(&cfg).is_err());
    }

    #[test]
    fn probe_split_sizes() {
        let emb = Matrix::from_fn(10, 1, |i, _| if i % 2 == 0 { -1.0 } else { 1.0 });
        let labels: Vec<usize> = (0..10).map(|i| i % 2).collect();
        let r = probe_embeddings(&emb, &labels, 2, 3, &ProbeConfig::default()).unwrap();
        assert_eq!((r.train_size, r.test_size), (8, 2));
        assert_eq!(r.test_accuracy, 1.0);
    }
}
