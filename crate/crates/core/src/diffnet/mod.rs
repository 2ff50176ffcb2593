//! Small dense feed-forward networks with hand-derived gradients.
//!
//! Hidden layers use ReLU; the final layer is linear and produces logits.
//! Weights are stored `in x out` so a forward pass over a row-major batch
//! streams through contiguous memory.

mod optim;

pub use optim::{
    lbfgs_minimize, Adam, AdamConfig, Lbfgs, LbfgsConfig, LbfgsOutcome, OptimizerConfig,
    OptimizerState, Sgd,
};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{config_err, Error, Result};
use crate::prob::{clamped_ln, softmax_in_place, ProbVector, LOG_FLOOR};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows * cols != data.len() {
            return config_err(format!(
                "matrix {rows}x{cols} needs {} values, got {}",
                rows * cols,
                data.len()
            ));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Data("matrix contains non-finite entries".into()));
        }
        Ok(Self { rows, cols, data })
    }

    /// Stacks equally long rows.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, r) in rows.iter().enumerate() {
            let r = r.as_ref();
            if r.len() != cols {
                return config_err(format!("row {i} has length {}, expected {cols}", r.len()));
            }
            data.extend_from_slice(r);
        }
        Self::from_vec(rows.len(), cols, data)
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn iter_rows(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks(self.cols.max(1)).take(self.rows)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Activation {
    Relu,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    /// `in x out`
    pub weight: Matrix,
    pub bias: Vec<f64>,
}

impl Dense {
    pub fn input_dim(&self) -> usize {
        self.weight.rows
    }

    pub fn output_dim(&self) -> usize {
        self.weight.cols
    }
}

/// Parameters of a multilayer perceptron.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpParams {
    pub layers: Vec<Dense>,
    pub activation: Activation,
}

impl MlpParams {
    /// He-uniform weights and zero biases. `sizes` lists every layer width
    /// from input to output.
    pub fn he_uniform<R: Rng + ?Sized>(sizes: &[usize], rng: &mut R) -> Result<Self> {
        if sizes.len() < 2 || sizes.iter().any(|&s| s == 0) {
            return config_err(format!("invalid layer sizes {sizes:?}"));
        }
        let layers = sizes
            .windows(2)
            .map(|w| {
                let (fan_in, fan_out) = (w[0], w[1]);
                let limit = (6.0 / fan_in as f64).sqrt();
                let data = (0..fan_in * fan_out).map(|_| rng.random_range(-limit..limit)).collect();
                Dense { weight: Matrix { rows: fan_in, cols: fan_out, data }, bias: vec![0.0; fan_out] }
            })
            .collect();
        Ok(Self { layers, activation: Activation::Relu })
    }

    /// Builds parameters from explicit layers, checking that dimensions chain.
    pub fn from_layers(layers: Vec<Dense>) -> Result<Self> {
        if layers.is_empty() {
            return config_err("network needs at least one layer");
        }
        for (i, l) in layers.iter().enumerate() {
            if l.bias.len() != l.output_dim() {
                return config_err(format!("layer {i}: bias length {} != {}", l.bias.len(), l.output_dim()));
            }
            if i > 0 && layers[i - 1].output_dim() != l.input_dim() {
                return config_err(format!("layer {i}: input dim does not match previous output"));
            }
        }
        let p = Self { layers, activation: Activation::Relu };
        if p.flatten().iter().any(|v| !v.is_finite()) {
            return Err(Error::Data("non-finite parameters".into()));
        }
        Ok(p)
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].input_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].output_dim()
    }

    pub fn sizes(&self) -> Vec<usize> {
        let mut s = vec![self.input_dim()];
        s.extend(self.layers.iter().map(Dense::output_dim));
        s
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(|l| l.weight.data.len() + l.bias.len()).sum()
    }

    /// Layer by layer, weights (row-major) then bias.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        for l in &self.layers {
            out.extend_from_slice(&l.weight.data);
            out.extend_from_slice(&l.bias);
        }
        out
    }

    pub fn assign_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.num_params() {
            return config_err(format!("expected {} parameters, got {}", self.num_params(), flat.len()));
        }
        let mut offset = 0;
        for l in &mut self.layers {
            let nw = l.weight.data.len();
            l.weight.data.copy_from_slice(&flat[offset..offset + nw]);
            offset += nw;
            let nb = l.bias.len();
            l.bias.copy_from_slice(&flat[offset..offset + nb]);
            offset += nb;
        }
        Ok(())
    }

    pub fn zeros_like(&self) -> Self {
        let layers = self
            .layers
            .iter()
            .map(|l| Dense { weight: Matrix::zeros(l.weight.rows, l.weight.cols), bias: vec![0.0; l.bias.len()] })
            .collect();
        Self { layers, activation: self.activation }
    }
}

/// `out = input * weight + bias`, rows independent.
fn affine(input: &Matrix, layer: &Dense) -> Matrix {
    let (n, din, dout) = (input.rows, layer.input_dim(), layer.output_dim());
    let mut out = Matrix::zeros(n, dout);
    for r in 0..n {
        let x = &input.data[r * din..(r + 1) * din];
        let o = &mut out.data[r * dout..(r + 1) * dout];
        o.copy_from_slice(&layer.bias);
        for (k, &xk) in x.iter().enumerate() {
            if xk == 0.0 {
                continue;
            }
            let w = &layer.weight.data[k * dout..(k + 1) * dout];
            for (oj, wj) in o.iter_mut().zip(w) {
                *oj += xk * wj;
            }
        }
    }
    out
}

fn check_input(params: &MlpParams, batch: &Matrix) -> Result<()> {
    if batch.cols != params.input_dim() {
        return config_err(format!(
            "batch has {} columns but network expects {}",
            batch.cols,
            params.input_dim()
        ));
    }
    Ok(())
}

/// Logits for every row of `batch`.
pub fn mlp_forward(params: &MlpParams, batch: &Matrix) -> Result<Matrix> {
    check_input(params, batch)?;
    let last = params.layers.len() - 1;
    let mut h = batch.clone();
    for (i, layer) in params.layers.iter().enumerate() {
        h = affine(&h, layer);
        if i < last {
            relu_in_place(&mut h);
        }
    }
    Ok(h)
}

fn relu_in_place(m: &mut Matrix) {
    for v in &mut m.data {
        if *v < 0.0 {
            *v = 0.0;
        }
    }
}

/// Per-row softmax of a logit matrix.
pub fn softmax_rows(logits: &Matrix) -> Matrix {
    let mut out = logits.clone();
    if out.cols > 0 {
        for row in out.data.chunks_mut(out.cols) {
            softmax_in_place(row);
        }
    }
    out
}

/// Mean of `-w * ln(max(p[label], 1e-12))` over the batch.
pub fn nll_loss(probs: &[ProbVector], labels: &[usize], weights: Option<&[f64]>) -> Result<f64> {
    if probs.is_empty() {
        return Err(Error::Data("nll of an empty batch".into()));
    }
    if labels.len() != probs.len() || weights.is_some_and(|w| w.len() != probs.len()) {
        return config_err("nll: probs, labels and weights must have equal length");
    }
    let mut total = 0.0;
    for (n, (p, &y)) in probs.iter().zip(labels).enumerate() {
        if y >= p.len() {
            return Err(Error::Data(format!("label {y} out of range at index {n}")));
        }
        let w = weights.map_or(1.0, |w| w[n]);
        total -= w * clamped_ln(p[y]);
    }
    Ok(total / probs.len() as f64)
}

/// Scalar losses over network logits that [`backward`] can differentiate.
#[derive(Debug, Clone, Copy)]
pub enum LossSpec<'a> {
    /// Mean over rows of `-w_n ln softmax(logits_n + offsets_n)[label_n]`.
    /// Offsets carry fixed log-prior terms that receive no gradient.
    CrossEntropy {
        labels: &'a [usize],
        weights: Option<&'a [f64]>,
        offsets: Option<&'a Matrix>,
    },
    /// `-scale * sum_n sum_i t_ni ln softmax(logits_n)_i` for soft (possibly
    /// unnormalized count) targets.
    SoftTargets { targets: &'a Matrix, scale: f64 },
    /// Mean over rows of the squared error summed across outputs.
    SquaredError { targets: &'a Matrix },
}

/// Loss value and its gradient with respect to the logits.
pub fn loss_and_logit_grad(logits: &Matrix, spec: &LossSpec<'_>) -> Result<(f64, Matrix)> {
    let (n, k) = (logits.rows, logits.cols);
    if n == 0 {
        return Err(Error::Data("loss over an empty batch".into()));
    }
    let mut grad = Matrix::zeros(n, k);
    let ln_floor = LOG_FLOOR.ln();
    let mut total = 0.0;
    match *spec {
        LossSpec::CrossEntropy { labels, weights, offsets } => {
            if labels.len() != n || weights.is_some_and(|w| w.len() != n) {
                return config_err("cross-entropy: labels/weights length mismatch");
            }
            if let Some(o) = offsets {
                if o.rows != n || o.cols != k {
                    return config_err("cross-entropy: offsets shape mismatch");
                }
            }
            let inv_n = 1.0 / n as f64;
            let mut p = vec![0.0; k];
            for r in 0..n {
                let y = labels[r];
                if y >= k {
                    return Err(Error::Data(format!("label {y} out of range at index {r}")));
                }
                let w = weights.map_or(1.0, |w| w[r]);
                for (j, pj) in p.iter_mut().enumerate() {
                    *pj = logits.get(r, j) + offsets.map_or(0.0, |o| o.get(r, j));
                }
                let lse = crate::prob::log_sum_exp(&p);
                let logp = p[y] - lse;
                let term = -w * logp.max(ln_floor);
                if !term.is_finite() {
                    return Err(Error::NonFinite { index: r, context: "cross-entropy term".into() });
                }
                total += term;
                if logp > ln_floor && w != 0.0 {
                    let g = grad.row_mut(r);
                    for j in 0..k {
                        let pj = (p[j] - lse).exp();
                        g[j] = w * inv_n * (pj - if j == y { 1.0 } else { 0.0 });
                    }
                }
            }
            total *= inv_n;
        }
        LossSpec::SoftTargets { targets, scale } => {
            if targets.rows != n || targets.cols != k {
                return config_err("soft targets shape mismatch");
            }
            let mut p = vec![0.0; k];
            for r in 0..n {
                p.copy_from_slice(logits.row(r));
                let lse = crate::prob::log_sum_exp(&p);
                let t = targets.row(r);
                // only unclamped terms carry gradient
                let mut active_mass = 0.0;
                for j in 0..k {
                    let logp = p[j] - lse;
                    total -= scale * t[j] * logp.max(ln_floor);
                    if logp > ln_floor {
                        active_mass += t[j];
                    }
                }
                if !total.is_finite() {
                    return Err(Error::NonFinite { index: r, context: "soft-target term".into() });
                }
                let g = grad.row_mut(r);
                for j in 0..k {
                    let pj = (p[j] - lse).exp();
                    let logp = p[j] - lse;
                    let own = if logp > ln_floor { t[j] } else { 0.0 };
                    g[j] = scale * (pj * active_mass - own);
                }
            }
        }
        LossSpec::SquaredError { targets } => {
            if targets.rows != n || targets.cols != k {
                return config_err("squared-error targets shape mismatch");
            }
            let inv_n = 1.0 / n as f64;
            for r in 0..n {
                for j in 0..k {
                    let d = logits.get(r, j) - targets.get(r, j);
                    total += d * d;
                    grad.set(r, j, 2.0 * d * inv_n);
                }
                if !total.is_finite() {
                    return Err(Error::NonFinite { index: r, context: "squared error".into() });
                }
            }
            total *= inv_n;
        }
    }
    Ok((total, grad))
}

/// Loss value plus gradient for every parameter.
#[derive(Debug, Clone)]
pub struct Gradient {
    pub loss: f64,
    pub params: MlpParams,
}

/// Exact gradient of the loss described by `spec` with respect to every
/// parameter of the network.
pub fn backward(params: &MlpParams, batch: &Matrix, spec: &LossSpec<'_>) -> Result<Gradient> {
    check_input(params, batch)?;
    let last = params.layers.len() - 1;
    // inputs[i] is the (post-activation) input to layer i
    let mut inputs = Vec::with_capacity(params.layers.len());
    let mut h = batch.clone();
    for (i, layer) in params.layers.iter().enumerate() {
        let mut out = affine(&h, layer);
        if i < last {
            relu_in_place(&mut out);
        }
        inputs.push(h);
        h = out;
    }
    let (loss, mut delta) = loss_and_logit_grad(&h, spec)?;
    let mut grads = params.zeros_like();
    for i in (0..params.layers.len()).rev() {
        let layer = &params.layers[i];
        let input = &inputs[i];
        let (din, dout) = (layer.input_dim(), layer.output_dim());
        let g = &mut grads.layers[i];
        for r in 0..input.rows {
            let d = &delta.data[r * dout..(r + 1) * dout];
            for (b, dj) in g.bias.iter_mut().zip(d) {
                *b += dj;
            }
            let x = &input.data[r * din..(r + 1) * din];
            for (k, &xk) in x.iter().enumerate() {
                if xk == 0.0 {
                    continue;
                }
                let gw = &mut g.weight.data[k * dout..(k + 1) * dout];
                for (gwj, dj) in gw.iter_mut().zip(d) {
                    *gwj += xk * dj;
                }
            }
        }
        if i == 0 {
            break;
        }
        // propagate through the weights and the ReLU that produced `input`
        let mut next = Matrix::zeros(input.rows, din);
        for r in 0..input.rows {
            let d = &delta.data[r * dout..(r + 1) * dout];
            for k in 0..din {
                if input.data[r * din + k] <= 0.0 {
                    continue;
                }
                let w = &layer.weight.data[k * dout..(k + 1) * dout];
                next.data[r * din + k] = w.iter().zip(d).map(|(a, b)| a * b).sum();
            }
        }
        delta = next;
    }
    Ok(Gradient { loss, params: grads })
}

#[cfg(test)]
mod tests;
