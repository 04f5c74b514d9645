//! WebAssembly bindings behind `www/index.html`. Every export returns a
//! JSON string so the page needs no generated type glue beyond the module
//! itself. The same functions compile natively and are tested there.

use serde::Serialize;
use wasm_bindgen::prelude::wasm_bindgen;

use kvicreg_core::data::{augment_pair, make_blobs, make_circles, make_two_moons, AugmentationSpec, Dataset};
use kvicreg_core::kernels::{double_center, gram};
use kvicreg_core::linalg::symmetric_eig;
use kvicreg_core::loss::{EuclideanVicreg, KernelVicreg, Objective};
use kvicreg_core::train::{DatasetConfig, TrainConfig, Trainer};
use kvicreg_core::{EmbeddingBatch, KernelKind, KernelSpec, LossReport, LossWeights};

type JsResult = Result<String, String>;

fn err(e: impl std::fmt::Display) -> String {
    e.to_string()
}

fn kernel_kind(name: &str) -> Result<KernelKind, String> {
    KernelKind::parse(name).ok_or_else(|| format!("unknown kernel {name:?}"))
}

/// Two-dimensional toy sets, rows grouped by class.
fn toy_dataset(name: &str, per_class: usize, seed: u64) -> Result<Dataset, String> {
    let ds = match name {
        "blobs" => make_blobs(3, per_class, 2, 1.0, seed),
        "moons" => make_two_moons(per_class, 0.1, seed),
        "circles" => make_circles(per_class, 0.05, 0.5, seed),
        other => return Err(format!("unknown dataset {other:?}")),
    }
    .map_err(err)?;
    let mut order: Vec<usize> = (0..ds.len()).collect();
    order.sort_by_key(|&i| ds.labels[i]);
    let samples = ds.samples.select_rows(&order).map_err(err)?;
    let labels = order.iter().map(|&i| ds.labels[i]).collect();
    Dataset::new(samples, labels, ds.name).map_err(err)
}

#[derive(Debug, Serialize)]
struct GramView {
    n: usize,
    gamma: f64,
    labels: Vec<usize>,
    points: Vec<[f64; 2]>,
    /// Double-centered Gram, row-major.
    centered: Vec<f64>,
    eigenvalues: Vec<f64>,
}

/// Centered Gram matrix and its spectrum for a toy dataset.
#[wasm_bindgen]
pub fn gram_view(dataset: &str, kernel: &str, per_class: usize, seed: u64) -> JsResult {
    let ds = toy_dataset(dataset, per_class, seed)?;
    let batch = EmbeddingBatch::new(ds.samples.clone()).map_err(err)?;
    let g = gram(&KernelSpec::new(kernel_kind(kernel)?), &batch).map_err(err)?;
    let centered = double_center(&g).map_err(err)?;
    let eig = symmetric_eig(centered.matrix()).map_err(err)?;
    let view = GramView {
        n: ds.len(),
        gamma: g.gamma(),
        labels: ds.labels.clone(),
        points: ds.samples.row_iter().map(|r| [r[0], r[1]]).collect(),
        centered: centered.matrix().as_slice().to_vec(),
        eigenvalues: eig.eigenvalues,
    };
    serde_json::to_string(&view).map_err(err)
}

#[derive(Debug, Serialize)]
struct LossRow {
    objective: String,
    report: LossReport,
}

/// Loss terms of every kernel (and the Euclidean objective) on two noisy
/// views of a toy dataset, with the per-kernel default weights.
#[wasm_bindgen]
pub fn loss_breakdown(dataset: &str, noise_sigma: f64, per_class: usize, seed: u64) -> JsResult {
    let ds = toy_dataset(dataset, per_class, seed)?;
    let aug = AugmentationSpec {
        noise_sigma,
        ..AugmentationSpec::identity()
    };
    let idx: Vec<usize> = (0..ds.len()).collect();
    let pair = augment_pair(&ds, &idx, &aug, seed).map_err(err)?;
    let zx = EmbeddingBatch::new(pair.view_a).map_err(err)?;
    let zxp = EmbeddingBatch::new(pair.view_b).map_err(err)?;
    let mut rows = Vec::new();
    for kind in KernelKind::ALL {
        let obj = KernelVicreg::new(KernelSpec::new(kind), LossWeights::tuned_for(kind));
        rows.push(LossRow {
            objective: kind.name().to_string(),
            report: obj.loss(&zx, &zxp).map_err(err)?,
        });
    }
    rows.push(LossRow {
        objective: "euclidean".into(),
        report: EuclideanVicreg::new(LossWeights::default()).loss(&zx, &zxp).map_err(err)?,
    });
    serde_json::to_string(&rows).map_err(err)
}

#[derive(Debug, Serialize)]
struct TracePoint {
    step: usize,
    total: f64,
    invariance: f64,
    variance: f64,
    covariance: f64,
    lambdas: Vec<f64>,
}

/// The blobs ablation run (16-d, MLP [16,32,32,8], batch 64), advanced a
/// few steps at a time so the page can plot the spectrum as it evolves.
#[wasm_bindgen]
pub struct CollapseDemo {
    trainer: Trainer,
}

#[wasm_bindgen]
impl CollapseDemo {
    #[wasm_bindgen(constructor)]
    pub fn new(kernel: &str, beta: f64, seed: u64) -> Result<CollapseDemo, String> {
        let kind = kernel_kind(kernel)?;
        let config = TrainConfig {
            dataset: DatasetConfig::default(),
            kernel: KernelSpec::new(kind),
            weights: Some(LossWeights {
                beta,
                ..LossWeights::new(0.5, 2.0, 3.0)
            }),
            batch_size: 64,
            seed,
            ..TrainConfig::default()
        };
        let dataset = config.dataset.load().map_err(err)?;
        Ok(CollapseDemo {
            trainer: Trainer::new(&config, dataset).map_err(err)?,
        })
    }

    /// Runs `steps` updates and returns one trace point per update.
    pub fn advance(&mut self, steps: usize) -> JsResult {
        let mut points = Vec::with_capacity(steps);
        for _ in 0..steps {
            let step = self.trainer.step();
            let r = self.trainer.train_step().map_err(err)?;
            points.push(TracePoint {
                step,
                total: r.total,
                invariance: r.invariance,
                variance: r.variance_x + r.variance_xp,
                covariance: r.covariance_x + r.covariance_xp,
                lambdas: r.top_eigenvalues,
            });
        }
        serde_json::to_string(&points).map_err(err)
    }

    pub fn step(&self) -> usize {
        self.trainer.step()
    }
}
