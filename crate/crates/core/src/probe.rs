//! Linear probe: multinomial logistic regression on frozen embeddings.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::Matrix;

#[derive(Debug, Clone, PartialEq)]
pub struct ProbeModel {
    pub weights: Matrix,
    pub biases: Vec<f64>,
    pub classes: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProbeConfig {
    pub epochs: usize,
    pub lr: f64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self { epochs: 300, lr: 0.1 }
    }
}

fn check_inputs(embeddings: &Matrix, labels: &[usize], classes: usize) -> Result<()> {
    if embeddings.rows() != labels.len() {
        return Err(Error::shape(format!(
            "{} embeddings but {} labels",
            embeddings.rows(),
            labels.len()
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
        return Err(Error::invalid(format!("label {bad} out of range for {classes} classes")));
    }
    Ok(())
}

impl ProbeModel {
    pub fn zeros(dim: usize, classes: usize) -> Self {
        Self {
            weights: Matrix::zeros(dim, classes),
            biases: vec![0.0; classes],
            classes,
        }
    }

    pub fn logits(&self, embeddings: &Matrix) -> Result<Matrix> {
        let mut z = embeddings.matmul(&self.weights)?;
        for i in 0..z.rows() {
            for (v, b) in z.row_mut(i).iter_mut().zip(&self.biases) {
                *v += b;
            }
        }
        Ok(z)
    }

    /// Row-wise softmax of the logits.
    pub fn predict_proba(&self, embeddings: &Matrix) -> Result<Matrix> {
        let mut z = self.logits(embeddings)?;
        for i in 0..z.rows() {
            softmax_in_place(z.row_mut(i));
        }
        Ok(z)
    }

    /// Argmax class per row, ties resolved toward the lowest index.
    pub fn predict(&self, embeddings: &Matrix) -> Result<Vec<usize>> {
        let z = self.logits(embeddings)?;
        Ok(z.row_iter()
            .map(|row| {
                let mut best = 0;
                for (k, &v) in row.iter().enumerate() {
                    if v > row[best] {
                        best = k;
                    }
                }
                best
            })
            .collect())
    }

    /// Mean cross-entropy.
    pub fn cross_entropy(&self, embeddings: &Matrix, labels: &[usize]) -> Result<f64> {
        check_inputs(embeddings, labels, self.classes)?;
        let z = self.logits(embeddings)?;
        let n = labels.len() as f64;
        Ok(z.row_iter()
            .zip(labels)
            .map(|(row, &y)| log_sum_exp(row) - row[y])
            .sum::<f64>()
            / n)
    }
}

fn log_sum_exp(row: &[f64]) -> f64 {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

fn softmax_in_place(row: &mut [f64]) {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut s = 0.0;
    for v in row.iter_mut() {
        *v = (*v - m).exp();
        s += *v;
    }
    row.iter_mut().for_each(|v| *v /= s);
}

/// Full-batch gradient descent on mean softmax cross-entropy from a zero
/// initialization.
pub fn fit_probe(
    embeddings: &Matrix,
    labels: &[usize],
    classes: usize,
    config: &ProbeConfig,
) -> Result<ProbeModel> {
    if classes < 2 {
        return Err(Error::invalid("a probe needs at least two classes"));
    }
    check_inputs(embeddings, labels, classes)?;
    if labels.len() < classes {
        return Err(Error::invalid(format!(
            "{} samples cannot fit {classes} classes",
            labels.len()
        )));
    }
    if !(config.lr > 0.0 && config.lr.is_finite()) {
        return Err(Error::invalid("probe learning rate must be > 0"));
    }
    if !embeddings.all_finite() {
        return Err(Error::NonFinite("probe embeddings"));
    }
    let n = labels.len() as f64;
    let mut model = ProbeModel::zeros(embeddings.cols(), classes);
    for _ in 0..config.epochs {
        // residual P − Y, scaled by 1/n
        let mut r = model.predict_proba(embeddings)?;
        for (i, &y) in labels.iter().enumerate() {
            r[(i, y)] -= 1.0;
        }
        let r = r.scale(1.0 / n);
        let gw = embeddings.t_matmul(&r)?;
        model.weights.add_scaled_in_place(&gw, -config.lr)?;
        for row in r.row_iter() {
            for (b, g) in model.biases.iter_mut().zip(row) {
                *b -= config.lr * g;
            }
        }
    }
    Ok(model)
}

/// Fraction of rows whose predicted class matches the label.
pub fn evaluate(model: &ProbeModel, embeddings: &Matrix, labels: &[usize]) -> Result<f64> {
    if embeddings.cols() != model.weights.rows() {
        return Err(Error::shape(format!(
            "embedding width {} does not match probe input {}",
            embeddings.cols(),
            model.weights.rows()
        )));
    }
    check_inputs(embeddings, labels, usize::MAX)?;
    if labels.is_empty() {
        return Err(Error::invalid("cannot evaluate on zero samples"));
    }
    let pred = model.predict(embeddings)?;
    let correct = pred.iter().zip(labels).filter(|(p, y)| p == y).count();
    Ok(correct as f64 / labels.len() as f64)
}
