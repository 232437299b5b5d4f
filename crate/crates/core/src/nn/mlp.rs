use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;
use alloc::vec;

use rand::Rng;

use super::matrix::{axpy, dot, DenseMatrix};
use crate::error::{Error, Result};
use crate::math;

/// Output transform applied after the last affine layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum Head {
    Linear,
    /// Row-wise softmax, max-shifted.
    Softmax,
    /// Elementwise `log(1 + exp(x))`, strictly positive.
    Softplus,
}

impl Head {
    pub fn name(self) -> &'static str {
        match self {
            Head::Linear => "linear",
            Head::Softmax => "softmax",
            Head::Softplus => "softplus",
        }
    }
}

/// One affine layer. `weight` is `out × in`, `bias` is `1 × out`.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Layer {
    pub weight: DenseMatrix,
    pub bias: DenseMatrix,
}

impl Layer {
    fn zeros(inputs: usize, outputs: usize) -> Self {
        Layer {
            weight: DenseMatrix::zeros(outputs, inputs),
            bias: DenseMatrix::zeros(1, outputs),
        }
    }
}

/// Fixed-depth feedforward network: ReLU on every hidden layer, `head` on
/// the output.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct MlpParams {
    layer_sizes: Vec<usize>,
    layers: Vec<Layer>,
    head: Head,
}

/// Parameter gradients, shaped like the network's layers.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub layers: Vec<Layer>,
}

/// Intermediate values of a forward pass, consumed by backpropagation.
#[derive(Debug, Clone)]
pub struct Forward {
    /// Post-ReLU activations of each hidden layer.
    hidden: Vec<DenseMatrix>,
    /// Output of the last affine layer before the head.
    pub logits: DenseMatrix,
    /// Head applied to `logits`.
    pub output: DenseMatrix,
}

impl MlpParams {
    /// All-zero network.
    pub fn zeros(layer_sizes: &[usize], head: Head) -> Result<Self> {
        if layer_sizes.len() < 2 || layer_sizes.iter().any(|&s| s == 0) {
            return Err(Error::InvalidInput(format!(
                "layer sizes {layer_sizes:?} need an input and an output, all nonzero"
            )));
        }
        let layers = layer_sizes
            .windows(2)
            .map(|w| Layer::zeros(w[0], w[1]))
            .collect();
        Ok(MlpParams {
            layer_sizes: layer_sizes.to_vec(),
            layers,
            head,
        })
    }

    /// Glorot-uniform weights, zero biases.
    pub fn random<R: Rng + ?Sized>(layer_sizes: &[usize], head: Head, rng: &mut R) -> Result<Self> {
        let mut p = Self::zeros(layer_sizes, head)?;
        for layer in &mut p.layers {
            let (out, inp) = (layer.weight.rows(), layer.weight.cols());
            let limit = math::sqrt(6.0 / (inp + out) as f64);
            for w in layer.weight.as_mut_slice() {
                *w = rng.gen_range(-limit..limit);
            }
        }
        Ok(p)
    }

    /// Assembles a network from explicit layers, validating shapes.
    pub fn from_layers(layers: Vec<Layer>, head: Head) -> Result<Self> {
        let first = layers
            .first()
            .ok_or_else(|| Error::InvalidInput("network needs at least one layer".into()))?;
        let mut sizes = Vec::with_capacity(layers.len() + 1);
        sizes.push(first.weight.cols());
        for l in &layers {
            let prev = *sizes.last().unwrap();
            if l.weight.cols() != prev {
                return Err(Error::DimensionMismatch {
                    context: "layer input",
                    expected: prev,
                    found: l.weight.cols(),
                });
            }
            if l.bias.rows() != 1 || l.bias.cols() != l.weight.rows() {
                return Err(Error::DimensionMismatch {
                    context: "layer bias",
                    expected: l.weight.rows(),
                    found: l.bias.cols(),
                });
            }
            sizes.push(l.weight.rows());
        }
        Ok(MlpParams {
            layer_sizes: sizes,
            layers,
            head,
        })
    }

    pub fn layer_sizes(&self) -> &[usize] {
        &self.layer_sizes
    }

    pub fn input_dim(&self) -> usize {
        self.layer_sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.layer_sizes.last().unwrap()
    }

    pub fn head(&self) -> Head {
        self.head
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn n_params(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weight.as_slice().len() + l.bias.as_slice().len())
            .sum()
    }

    /// Parameters in canonical order: per layer, weights then bias.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.n_params());
        for l in &self.layers {
            out.extend_from_slice(l.weight.as_slice());
            out.extend_from_slice(l.bias.as_slice());
        }
        out
    }

    pub fn set_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.n_params() {
            return Err(Error::DimensionMismatch {
                context: "flat parameter vector",
                expected: self.n_params(),
                found: flat.len(),
            });
        }
        let mut offset = 0;
        for l in &mut self.layers {
            for m in [&mut l.weight, &mut l.bias] {
                let n = m.as_slice().len();
                m.as_mut_slice().copy_from_slice(&flat[offset..offset + n]);
                offset += n;
            }
        }
        Ok(())
    }

    /// `(name, matrix)` pairs in canonical order, used by checkpoint formats.
    pub fn named_matrices(&self) -> Vec<(String, &DenseMatrix)> {
        let mut out = Vec::with_capacity(2 * self.layers.len());
        for (i, l) in self.layers.iter().enumerate() {
            out.push((format!("layer{i}.weight"), &l.weight));
            out.push((format!("layer{i}.bias"), &l.bias));
        }
        out
    }

    pub fn zero_gradients(&self) -> Gradients {
        Gradients {
            layers: self
                .layers
                .iter()
                .map(|l| Layer::zeros(l.weight.cols(), l.weight.rows()))
                .collect(),
        }
    }

    pub fn forward(&self, inputs: &DenseMatrix) -> Result<Forward> {
        if inputs.cols() != self.input_dim() {
            return Err(Error::DimensionMismatch {
                context: "network input",
                expected: self.input_dim(),
                found: inputs.cols(),
            });
        }
        let n_layers = self.layers.len();
        let mut hidden = Vec::with_capacity(n_layers.saturating_sub(1));
        let mut logits = DenseMatrix::zeros(0, 0);
        for (k, layer) in self.layers.iter().enumerate() {
            let x = if k == 0 { inputs } else { &hidden[k - 1] };
            let mut z = affine(layer, x);
            if k + 1 < n_layers {
                for v in z.as_mut_slice() {
                    if *v < 0.0 {
                        *v = 0.0;
                    }
                }
                hidden.push(z);
            } else {
                logits = z;
            }
        }
        let output = apply_head(self.head, &logits);
        Ok(Forward {
            hidden,
            logits,
            output,
        })
    }

    /// Forward pass returning only the head output.
    pub fn predict(&self, inputs: &DenseMatrix) -> Result<DenseMatrix> {
        Ok(self.forward(inputs)?.output)
    }

    /// Backpropagates `upstream = dL/d(output)` through the head and all
    /// layers. Returns parameter and input gradients.
    pub fn backward(
        &self,
        inputs: &DenseMatrix,
        forward: &Forward,
        upstream: &DenseMatrix,
    ) -> Result<(Gradients, DenseMatrix)> {
        check_same_shape(upstream, &forward.output, "upstream gradient")?;
        let dlogits = head_backward(self.head, forward, upstream);
        let (g, dx) = self.backward_logits_inner(inputs, forward, dlogits, true)?;
        Ok((g, dx.unwrap()))
    }

    /// Backpropagates `dL/d(logits)`, skipping the head. This is the hot path
    /// for losses whose logit gradient has a closed form (softmax policies).
    pub fn backward_logits(
        &self,
        inputs: &DenseMatrix,
        forward: &Forward,
        dlogits: DenseMatrix,
    ) -> Result<Gradients> {
        check_same_shape(&dlogits, &forward.logits, "logit gradient")?;
        Ok(self.backward_logits_inner(inputs, forward, dlogits, false)?.0)
    }

    /// Parameter gradients for `upstream = dL/d(output)` without computing
    /// input gradients.
    pub fn param_gradients(
        &self,
        inputs: &DenseMatrix,
        forward: &Forward,
        upstream: &DenseMatrix,
    ) -> Result<Gradients> {
        check_same_shape(upstream, &forward.output, "upstream gradient")?;
        let dlogits = head_backward(self.head, forward, upstream);
        Ok(self.backward_logits_inner(inputs, forward, dlogits, false)?.0)
    }

    fn backward_logits_inner(
        &self,
        inputs: &DenseMatrix,
        forward: &Forward,
        dlogits: DenseMatrix,
        want_input_grad: bool,
    ) -> Result<(Gradients, Option<DenseMatrix>)> {
        if inputs.cols() != self.input_dim() || inputs.rows() != forward.logits.rows() {
            return Err(Error::DimensionMismatch {
                context: "backward inputs",
                expected: forward.logits.rows(),
                found: inputs.rows(),
            });
        }
        let mut grads = self.zero_gradients();
        let mut delta = dlogits;
        for k in (0..self.layers.len()).rev() {
            let layer = &self.layers[k];
            let x = if k == 0 { inputs } else { &forward.hidden[k - 1] };
            let g = &mut grads.layers[k];
            let (out_dim, in_dim) = (layer.weight.rows(), layer.weight.cols());
            let need_dx = k > 0 || want_input_grad;
            let mut dx = if need_dx {
                DenseMatrix::zeros(x.rows(), in_dim)
            } else {
                DenseMatrix::zeros(0, 0)
            };
            if out_dim >= in_dim {
                wide_layer_backward(layer, x, &delta, g, need_dx.then_some(&mut dx));
            } else {
                narrow_layer_backward(layer, x, &delta, g, need_dx.then_some(&mut dx));
            }
            if k > 0 {
                // ReLU: derivative 1 where the activation is positive, 0 otherwise
                // (subgradient 0 at the kink).
                let h = &forward.hidden[k - 1];
                for (d, &a) in dx.as_mut_slice().iter_mut().zip(h.as_slice()) {
                    if a <= 0.0 {
                        *d = 0.0;
                    }
                }
                delta = dx;
            } else if want_input_grad {
                return Ok((grads, Some(dx)));
            }
        }
        Ok((grads, None))
    }
}

impl Gradients {
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for l in &self.layers {
            out.extend_from_slice(l.weight.as_slice());
            out.extend_from_slice(l.bias.as_slice());
        }
        out
    }

    pub fn is_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.weight.is_finite() && l.bias.is_finite())
    }

    pub fn scale(&mut self, factor: f64) {
        for l in &mut self.layers {
            for v in l.weight.as_mut_slice().iter_mut().chain(l.bias.as_mut_slice()) {
                *v *= factor;
            }
        }
    }

    pub fn add_assign(&mut self, other: &Gradients) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            for (x, y) in a.weight.as_mut_slice().iter_mut().zip(b.weight.as_slice()) {
                *x += y;
            }
            for (x, y) in a.bias.as_mut_slice().iter_mut().zip(b.bias.as_slice()) {
                *x += y;
            }
        }
    }

    pub fn norm(&self) -> f64 {
        let ss: f64 = self
            .layers
            .iter()
            .flat_map(|l| l.weight.as_slice().iter().chain(l.bias.as_slice()))
            .map(|v| v * v)
            .sum();
        math::sqrt(ss)
    }

    /// Zeroes every entry whose mask bit is `false` (canonical flat order).
    pub fn apply_mask(&mut self, trainable: &[bool]) {
        let mut idx = 0;
        for l in &mut self.layers {
            for v in l.weight.as_mut_slice().iter_mut().chain(l.bias.as_mut_slice()) {
                if !trainable.get(idx).copied().unwrap_or(true) {
                    *v = 0.0;
                }
                idx += 1;
            }
        }
    }
}

fn check_same_shape(a: &DenseMatrix, b: &DenseMatrix, context: &'static str) -> Result<()> {
    if a.rows() != b.rows() {
        return Err(Error::DimensionMismatch {
            context,
            expected: b.rows(),
            found: a.rows(),
        });
    }
    if a.cols() != b.cols() {
        return Err(Error::DimensionMismatch {
            context,
            expected: b.cols(),
            found: a.cols(),
        });
    }
    Ok(())
}

/// Row-major `in x out` copy of a weight matrix, so the inner loops run
/// over output units.
fn transposed(w: &DenseMatrix) -> Vec<f64> {
    let (rows, cols) = (w.rows(), w.cols());
    let src = w.as_slice();
    let mut t = vec![0.0; rows * cols];
    for o in 0..rows {
        for i in 0..cols {
            t[i * rows + o] = src[o * cols + i];
        }
    }
    t
}

fn affine(layer: &Layer, x: &DenseMatrix) -> DenseMatrix {
    let (out_dim, in_dim) = (layer.weight.rows(), layer.weight.cols());
    let bias = layer.bias.as_slice();
    let mut z = DenseMatrix::zeros(x.rows(), out_dim);
    if out_dim >= in_dim {
        let wt = transposed(&layer.weight);
        for b in 0..x.rows() {
            let zb = z.row_mut(b);
            zb.copy_from_slice(bias);
            for (i, &xi) in x.row(b).iter().enumerate() {
                axpy(xi, &wt[i * out_dim..(i + 1) * out_dim], zb);
            }
        }
    } else {
        let w = layer.weight.as_slice();
        for b in 0..x.rows() {
            let xb = x.row(b);
            for (o, zo) in z.row_mut(b).iter_mut().enumerate() {
                *zo = bias[o] + dot(&w[o * in_dim..(o + 1) * in_dim], xb);
            }
        }
    }
    z
}

/// Accumulates one layer's parameter gradients and optionally `dL/dx`, with
/// inner loops over output units.
fn wide_layer_backward(layer: &Layer, x: &DenseMatrix, delta: &DenseMatrix, g: &mut Layer, dx: Option<&mut DenseMatrix>) {
    let (out_dim, in_dim) = (layer.weight.rows(), layer.weight.cols());
    let wt = transposed(&layer.weight);
    let mut gwt = vec![0.0; in_dim * out_dim];
    let gb = g.bias.as_mut_slice();
    let mut dx = dx;
    for b in 0..x.rows() {
        let db = delta.row(b);
        if db.iter().all(|&d| d == 0.0) {
            continue;
        }
        axpy(1.0, db, gb);
        for (i, &xi) in x.row(b).iter().enumerate() {
            axpy(xi, db, &mut gwt[i * out_dim..(i + 1) * out_dim]);
        }
        if let Some(dx) = dx.as_deref_mut() {
            for (i, d) in dx.row_mut(b).iter_mut().enumerate() {
                *d = dot(&wt[i * out_dim..(i + 1) * out_dim], db);
            }
        }
    }
    let gw = g.weight.as_mut_slice();
    for o in 0..out_dim {
        for i in 0..in_dim {
            gw[o * in_dim + i] += gwt[i * out_dim + o];
        }
    }
}

/// Same as [`wide_layer_backward`] with inner loops over inputs.
fn narrow_layer_backward(layer: &Layer, x: &DenseMatrix, delta: &DenseMatrix, g: &mut Layer, dx: Option<&mut DenseMatrix>) {
    let (out_dim, in_dim) = (layer.weight.rows(), layer.weight.cols());
    let w = layer.weight.as_slice();
    let gw = g.weight.as_mut_slice();
    let gb = g.bias.as_mut_slice();
    let mut dx = dx;
    for b in 0..x.rows() {
        let xb = x.row(b);
        let db = delta.row(b);
        for o in 0..out_dim {
            let d = db[o];
            if d == 0.0 {
                continue;
            }
            gb[o] += d;
            axpy(d, xb, &mut gw[o * in_dim..(o + 1) * in_dim]);
            if let Some(dx) = dx.as_deref_mut() {
                axpy(d, &w[o * in_dim..(o + 1) * in_dim], dx.row_mut(b));
            }
        }
    }
}

/// Row-wise softmax with max shift; valid for logits of any finite magnitude.
pub fn softmax_rows(logits: &DenseMatrix) -> DenseMatrix {
    let mut out = logits.clone();
    for b in 0..out.rows() {
        let row = out.row_mut(b);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = math::exp(*v - max);
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
    out
}

fn apply_head(head: Head, logits: &DenseMatrix) -> DenseMatrix {
    match head {
        Head::Linear => logits.clone(),
        Head::Softmax => softmax_rows(logits),
        Head::Softplus => {
            let mut out = logits.clone();
            // Floored so the output stays strictly positive where exp underflows.
            for v in out.as_mut_slice() {
                *v = math::softplus(*v).max(f64::MIN_POSITIVE);
            }
            out
        }
    }
}

fn head_backward(head: Head, forward: &Forward, upstream: &DenseMatrix) -> DenseMatrix {
    match head {
        Head::Linear => upstream.clone(),
        Head::Softplus => {
            let mut d = upstream.clone();
            for (g, &z) in d.as_mut_slice().iter_mut().zip(forward.logits.as_slice()) {
                *g *= math::sigmoid(z);
            }
            d
        }
        Head::Softmax => {
            let p = &forward.output;
            let mut d = DenseMatrix::zeros(p.rows(), p.cols());
            for b in 0..p.rows() {
                let pb = p.row(b);
                let gb = upstream.row(b);
                let inner = dot(pb, gb);
                for (k, dk) in d.row_mut(b).iter_mut().enumerate() {
                    *dk = pb[k] * (gb[k] - inner);
                }
            }
            d
        }
    }
}
