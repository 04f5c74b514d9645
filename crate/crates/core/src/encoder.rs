//! Small MLP encoder with hand-written forward/backward passes, Adam, and a
//! flat binary checkpoint format.
//!
//! Checkpoint layout (all integers u32 little-endian, all reals f64
//! little-endian):
//!
//! ```text
//! b"KVRG" | version | layer count | per layer: in, out, weights (in×out, row-major), biases (out)
//! ```

use std::io::{Read, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::matrix::Matrix;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"KVRG";
pub const CHECKPOINT_VERSION: u32 = 1;

/// One affine layer, `y = x·W + b` with `W` of shape `in×out`.
#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub weights: Matrix,
    pub bias: Vec<f64>,
}

impl Layer {
    fn zeros(fan_in: usize, fan_out: usize) -> Self {
        Self {
            weights: Matrix::zeros(fan_in, fan_out),
            bias: vec![0.0; fan_out],
        }
    }

    pub fn fan_in(&self) -> usize {
        self.weights.rows()
    }

    pub fn fan_out(&self) -> usize {
        self.weights.cols()
    }

    fn params(&self) -> impl Iterator<Item = &f64> {
        self.weights.as_slice().iter().chain(&self.bias)
    }

    fn params_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.weights.as_mut_slice().iter_mut().chain(self.bias.iter_mut())
    }
}

/// ReLU on hidden layers, identity on the output layer.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpNetwork {
    layers: Vec<Layer>,
}

/// Per-layer parameter gradients, shaped like the network.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpGradients {
    pub layers: Vec<Layer>,
}

impl MlpGradients {
    pub fn all_finite(&self) -> bool {
        self.layers.iter().all(|l| l.params().all(|x| x.is_finite()))
    }

    /// Accumulates `other` into `self`.
    pub fn accumulate(&mut self, other: &MlpGradients) -> Result<()> {
        if self.layers.len() != other.layers.len() {
            return Err(Error::shape("gradient layer counts differ"));
        }
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            a.weights.add_scaled_in_place(&b.weights, 1.0)?;
            for (x, y) in a.bias.iter_mut().zip(&b.bias) {
                *x += y;
            }
        }
        Ok(())
    }
}

/// Activations cached by [`MlpNetwork::forward`].
#[derive(Debug, Clone)]
pub struct Tape {
    /// Input of each layer (post-activation of the previous one).
    inputs: Vec<Matrix>,
    /// Pre-activation output of each layer.
    pre: Vec<Matrix>,
}

impl MlpNetwork {
    /// Glorot-uniform weights, zero biases, fully determined by `seed`.
    pub fn init(layer_dims: &[usize], seed: u64) -> Result<Self> {
        if layer_dims.len() < 2 {
            return Err(Error::invalid("an MLP needs at least input and output dims"));
        }
        if layer_dims.contains(&0) {
            return Err(Error::invalid("layer dims must be positive"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers = layer_dims
            .windows(2)
            .map(|w| {
                let (fan_in, fan_out) = (w[0], w[1]);
                let s = (6.0 / (fan_in + fan_out) as f64).sqrt();
                let mut layer = Layer::zeros(fan_in, fan_out);
                for x in layer.weights.as_mut_slice() {
                    *x = rng.random_range(-s..s);
                }
                layer
            })
            .collect();
        Ok(Self { layers })
    }

    pub fn from_layers(layers: Vec<Layer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::invalid("an MLP needs at least one layer"));
        }
        for (i, l) in layers.iter().enumerate() {
            if l.bias.len() != l.fan_out() {
                return Err(Error::shape(format!("layer {i}: bias length != fan_out")));
            }
            if let Some(next) = layers.get(i + 1) {
                if next.fan_in() != l.fan_out() {
                    return Err(Error::shape(format!(
                        "layer {i} outputs {} but layer {} expects {}",
                        l.fan_out(),
                        i + 1,
                        next.fan_in()
                    )));
                }
            }
        }
        Ok(Self { layers })
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn layer_dims(&self) -> Vec<usize> {
        let mut dims = vec![self.layers[0].fan_in()];
        dims.extend(self.layers.iter().map(Layer::fan_out));
        dims
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].fan_in()
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].fan_out()
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.params().count()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.layers.iter().all(|l| l.params().all(|x| x.is_finite()))
    }

    pub fn zero_gradients(&self) -> MlpGradients {
        MlpGradients {
            layers: self
                .layers
                .iter()
                .map(|l| Layer::zeros(l.fan_in(), l.fan_out()))
                .collect(),
        }
    }

    pub fn forward(&self, batch: &Matrix) -> Result<(Matrix, Tape)> {
        if batch.cols() != self.input_dim() {
            return Err(Error::shape(format!(
                "input width {} does not match network input {}",
                batch.cols(),
                self.input_dim()
            )));
        }
        let last = self.layers.len() - 1;
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut pre = Vec::with_capacity(self.layers.len());
        let mut x = batch.clone();
        for (k, layer) in self.layers.iter().enumerate() {
            let mut y = x.matmul(&layer.weights)?;
            for i in 0..y.rows() {
                for (v, b) in y.row_mut(i).iter_mut().zip(&layer.bias) {
                    *v += b;
                }
            }
            inputs.push(x);
            x = if k == last { y.clone() } else { y.map(|v| v.max(0.0)) };
            pre.push(y);
        }
        Ok((x, Tape { inputs, pre }))
    }

    /// Forward pass without keeping the tape.
    pub fn predict(&self, batch: &Matrix) -> Result<Matrix> {
        Ok(self.forward(batch)?.0)
    }

    /// Reverse-mode pass: parameter gradients and the gradient with respect
    /// to the input, for the forward map contracted with `grad_output`.
    pub fn backward(&self, tape: &Tape, grad_output: &Matrix) -> Result<(MlpGradients, Matrix)> {
        if tape.pre.len() != self.layers.len() {
            return Err(Error::shape("tape does not belong to this network"));
        }
        let out = &tape.pre[self.layers.len() - 1];
        if grad_output.shape() != out.shape() {
            return Err(Error::shape(format!(
                "grad_output is {}x{}, forward output was {}x{}",
                grad_output.rows(),
                grad_output.cols(),
                out.rows(),
                out.cols()
            )));
        }
        let mut grads = Vec::with_capacity(self.layers.len());
        let mut delta = grad_output.clone();
        for k in (0..self.layers.len()).rev() {
            let layer = &self.layers[k];
            let input = &tape.inputs[k];
            let weights = input.t_matmul(&delta)?;
            let mut bias = vec![0.0; layer.fan_out()];
            for row in delta.row_iter() {
                for (b, d) in bias.iter_mut().zip(row) {
                    *b += d;
                }
            }
            grads.push(Layer { weights, bias });
            delta = delta.matmul(&layer.weights.transpose())?;
            if k > 0 {
                // ReLU mask of the previous layer
                let prev = &tape.pre[k - 1];
                for (d, &p) in delta.as_mut_slice().iter_mut().zip(prev.as_slice()) {
                    if p <= 0.0 {
                        *d = 0.0;
                    }
                }
            }
        }
        grads.reverse();
        Ok((MlpGradients { layers: grads }, delta))
    }

    pub fn write_checkpoint<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(CHECKPOINT_MAGIC)?;
        w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
        w.write_all(&(self.layers.len() as u32).to_le_bytes())?;
        for l in &self.layers {
            w.write_all(&(l.fan_in() as u32).to_le_bytes())?;
            w.write_all(&(l.fan_out() as u32).to_le_bytes())?;
            for x in l.params() {
                w.write_all(&x.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn to_checkpoint_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        self.write_checkpoint(&mut buf).expect("writing to a Vec cannot fail");
        buf
    }

    pub fn read_checkpoint<R: Read>(mut r: R) -> Result<Self> {
        let mut buf = Vec::new();
        r.read_to_end(&mut buf)?;
        Self::from_checkpoint_bytes(&buf)
    }

    pub fn from_checkpoint_bytes(bytes: &[u8]) -> Result<Self> {
        let mut cur = ByteCursor::new(bytes);
        let magic = cur.take(4)?;
        if magic != CHECKPOINT_MAGIC {
            return Err(Error::Format {
                message: "bad checkpoint magic".into(),
                offset: 0,
            });
        }
        let version_at = cur.offset;
        let version = cur.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Format {
                message: format!("unsupported checkpoint version {version}"),
                offset: version_at,
            });
        }
        let count = cur.u32()? as usize;
        if count == 0 {
            return Err(Error::Format {
                message: "checkpoint has no layers".into(),
                offset: cur.offset,
            });
        }
        let mut layers = Vec::with_capacity(count.min(1024));
        for _ in 0..count {
            let dims_at = cur.offset;
            let fan_in = cur.u32()? as usize;
            let fan_out = cur.u32()? as usize;
            if fan_in == 0 || fan_out == 0 {
                return Err(Error::Format {
                    message: "zero layer dimension".into(),
                    offset: dims_at,
                });
            }
            let mut layer = Layer::zeros(fan_in, fan_out);
            for x in layer.params_mut() {
                *x = cur.f64()?;
            }
            layers.push(layer);
        }
        if cur.offset != bytes.len() {
            return Err(Error::Format {
                message: "trailing bytes after checkpoint".into(),
                offset: cur.offset,
            });
        }
        Self::from_layers(layers).map_err(|e| Error::Format {
            message: e.to_string(),
            offset: 12,
        })
    }
}

struct ByteCursor<'a> {
    bytes: &'a [u8],
    offset: usize,
}

impl<'a> ByteCursor<'a> {
    fn new(bytes: &'a [u8]) -> Self {
        Self { bytes, offset: 0 }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.offset < n {
            return Err(Error::Format {
                message: "truncated".into(),
                offset: self.bytes.len(),
            });
        }
        let s = &self.bytes[self.offset..self.offset + n];
        self.offset += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

/// Adam with bias correction.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    first_moment: MlpGradients,
    second_moment: MlpGradients,
}

impl AdamState {
    /// Zero moments with defaults beta1 0.9, beta2 0.999, eps 1e-8.
    pub fn new(net: &MlpNetwork, lr: f64) -> Result<Self> {
        Self::with_params(net, lr, 0.9, 0.999, 1e-8)
    }

    pub fn with_params(net: &MlpNetwork, lr: f64, beta1: f64, beta2: f64, adam_eps: f64) -> Result<Self> {
        if !(lr > 0.0 && lr.is_finite()) {
            return Err(Error::invalid(format!("learning rate must be > 0, got {lr}")));
        }
        if !(0.0 < beta1 && beta1 < 1.0 && 0.0 < beta2 && beta2 < 1.0) {
            return Err(Error::invalid("Adam betas must lie in (0, 1)"));
        }
        if adam_eps <= 0.0 {
            return Err(Error::invalid("adam_eps must be > 0"));
        }
        Ok(Self {
            step: 0,
            lr,
            beta1,
            beta2,
            adam_eps,
            first_moment: net.zero_gradients(),
            second_moment: net.zero_gradients(),
        })
    }
}

/// Applies one Adam update to `net` in place.
pub fn adam_step(net: &mut MlpNetwork, grads: &MlpGradients, state: &mut AdamState) -> Result<()> {
    if grads.layers.len() != net.layers.len()
        || grads
            .layers
            .iter()
            .zip(&net.layers)
            .any(|(g, l)| g.weights.shape() != l.weights.shape() || g.bias.len() != l.bias.len())
        || state.first_moment.layers.len() != net.layers.len()
    {
        return Err(Error::shape("gradients do not match the network"));
    }
    if !grads.all_finite() {
        return Err(Error::NonFinite("parameter gradient"));
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (state.beta1, state.beta2);
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    for (((layer, g), m), v) in net
        .layers
        .iter_mut()
        .zip(&grads.layers)
        .zip(&mut state.first_moment.layers)
        .zip(&mut state.second_moment.layers)
    {
        for (((p, &g), m), v) in layer
            .params_mut()
            .zip(g.params())
            .zip(m.params_mut())
            .zip(v.params_mut())
        {
            *m = b1 * *m + (1.0 - b1) * g;
            *v = b2 * *v + (1.0 - b2) * g * g;
            let m_hat = *m / c1;
            let v_hat = *v / c2;
            *p -= state.lr * m_hat / (v_hat.sqrt() + state.adam_eps);
        }
    }
    Ok(())
}
