//! Dense softmax classifiers (logistic regression and MLPs) with hand-derived
//! backprop.
//!
//! Parameters live in one flat [`ParamVector`]. For each layer `l` the layout is
//! the weight matrix `W_l` (shape `n_{l+1} x n_l`, row-major) followed by the
//! bias vector `b_l`, layers in order. Hidden layers use the configured
//! activation; the output layer is always softmax.

use rand::Rng;
use rand_distr::{Distribution, Uniform};
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Lower bound applied to probabilities before taking logs, and to softmax
/// outputs so every entry stays strictly positive.
pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Tanh,
}

impl Activation {
    #[inline]
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Relu => z.max(0.0),
            Activation::Tanh => z.tanh(),
        }
    }

    /// Derivative expressed through the activation's output.
    #[inline]
    fn derivative_from_output(self, a: f64) -> f64 {
        match self {
            Activation::Relu => {
                if a > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => 1.0 - a * a,
        }
    }
}

/// Offsets of one dense layer inside a [`ParamVector`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerLayout {
    pub n_in: usize,
    pub n_out: usize,
    pub weight_offset: usize,
    pub bias_offset: usize,
}

impl LayerLayout {
    pub fn end(&self) -> usize {
        self.bias_offset + self.n_out
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelSpec {
    layer_sizes: Vec<usize>,
    activation: Activation,
}

impl ModelSpec {
    /// `layer_sizes` runs from the input dimension to the class count.
    pub fn new(layer_sizes: Vec<usize>, activation: Activation) -> Result<Self> {
        if layer_sizes.len() < 2 {
            return Err(Error::Config(format!(
                "layer_sizes needs at least 2 entries (input, classes), got {}",
                layer_sizes.len()
            )));
        }
        if let Some(pos) = layer_sizes.iter().position(|&n| n == 0) {
            return Err(Error::Config(format!("layer_sizes[{pos}] must be >= 1")));
        }
        Ok(Self {
            layer_sizes,
            activation,
        })
    }

    pub fn layer_sizes(&self) -> &[usize] {
        &self.layer_sizes
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn input_dim(&self) -> usize {
        self.layer_sizes[0]
    }

    pub fn n_classes(&self) -> usize {
        *self.layer_sizes.last().expect("validated non-empty")
    }

    pub fn n_layers(&self) -> usize {
        self.layer_sizes.len() - 1
    }

    pub fn layers(&self) -> Vec<LayerLayout> {
        let mut offset = 0;
        self.layer_sizes
            .windows(2)
            .map(|w| {
                let (n_in, n_out) = (w[0], w[1]);
                let layout = LayerLayout {
                    n_in,
                    n_out,
                    weight_offset: offset,
                    bias_offset: offset + n_in * n_out,
                };
                offset = layout.end();
                layout
            })
            .collect()
    }

    pub fn n_params(&self) -> usize {
        self.layer_sizes
            .windows(2)
            .map(|w| w[0] * w[1] + w[1])
            .sum()
    }

    /// Layer that owns flat parameter `index`.
    pub fn layer_of(&self, index: usize) -> usize {
        self.layers()
            .iter()
            .position(|l| index < l.end())
            .unwrap_or(self.n_layers() - 1)
    }

    /// Glorot-uniform weights, zero biases.
    pub fn init_params<R: Rng + ?Sized>(&self, rng: &mut R) -> ParamVector {
        let mut values = vec![0.0; self.n_params()];
        for layer in self.layers() {
            let limit = (6.0 / (layer.n_in + layer.n_out) as f64).sqrt();
            let dist = Uniform::new_inclusive(-limit, limit).expect("finite bounds");
            for w in &mut values[layer.weight_offset..layer.bias_offset] {
                *w = dist.sample(rng);
            }
        }
        ParamVector { values }
    }
}

/// Flat parameter vector θ; its layout is given by a [`ModelSpec`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamVector {
    values: Vec<f64>,
}

impl ParamVector {
    pub fn zeros(spec: &ModelSpec) -> Self {
        Self {
            values: vec![0.0; spec.n_params()],
        }
    }

    pub fn from_values(spec: &ModelSpec, values: Vec<f64>) -> Result<Self> {
        if values.len() != spec.n_params() {
            return Err(Error::Config(format!(
                "parameter vector has {} values, model {:?} needs {}",
                values.len(),
                spec.layer_sizes(),
                spec.n_params()
            )));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::Config(format!(
                "parameter {i} is not finite ({})",
                values[i]
            )));
        }
        Ok(Self { values })
    }

    /// A free-standing parameter vector (no model layout); values must be finite.
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::Config(format!(
                "parameter {i} is not finite ({})",
                values[i]
            )));
        }
        Ok(Self { values })
    }

    /// Unchecked constructor for internally produced vectors (gradients).
    pub(crate) fn from_raw(values: Vec<f64>) -> Self {
        Self { values }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.values
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    fn check(&self, spec: &ModelSpec) -> Result<()> {
        if self.values.len() != spec.n_params() {
            return Err(Error::Config(format!(
                "parameter vector has {} values, model {:?} needs {}",
                self.values.len(),
                spec.layer_sizes(),
                spec.n_params()
            )));
        }
        Ok(())
    }
}

/// Dense row-major matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Config(format!(
                "matrix {rows}x{cols} needs {} values, got {}",
                rows * cols,
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, r) in rows.iter().enumerate() {
            let r = r.as_ref();
            if r.len() != cols {
                return Err(Error::Config(format!(
                    "row {i} has {} columns, expected {cols}",
                    r.len()
                )));
            }
            data.extend_from_slice(r);
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            data,
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    /// Gather the listed rows into a new matrix.
    pub fn select_rows(&self, indices: &[usize]) -> Matrix {
        let mut data = Vec::with_capacity(indices.len() * self.cols);
        for &i in indices {
            data.extend_from_slice(self.row(i));
        }
        Matrix {
            rows: indices.len(),
            cols: self.cols,
            data,
        }
    }
}

/// Features, labels and training-set indices for one update.
#[derive(Debug, Clone)]
pub struct Minibatch {
    pub features: Matrix,
    pub labels: Vec<usize>,
    pub sample_ids: Vec<usize>,
}

impl Minibatch {
    pub fn new(
        features: Matrix,
        labels: Vec<usize>,
        sample_ids: Vec<usize>,
        n_classes: usize,
    ) -> Result<Self> {
        let b = features.rows();
        if b == 0 {
            return Err(Error::Usage("minibatch must contain at least one sample".into()));
        }
        if labels.len() != b || sample_ids.len() != b {
            return Err(Error::Config(format!(
                "minibatch has {b} feature rows, {} labels and {} sample ids",
                labels.len(),
                sample_ids.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= n_classes) {
            return Err(Error::Config(format!(
                "label {bad} out of range for {n_classes} classes"
            )));
        }
        let mut seen = sample_ids.clone();
        seen.sort_unstable();
        if seen.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::Usage("sample ids within a minibatch must be unique".into()));
        }
        Ok(Self {
            features,
            labels,
            sample_ids,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// A categorical distribution over the classes.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictiveDistribution(Vec<f64>);

impl PredictiveDistribution {
    pub const SUM_TOLERANCE: f64 = 1e-9;

    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.is_empty() {
            return Err(Error::Usage("empty probability vector".into()));
        }
        if probs.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::Usage(format!("probabilities outside [0, 1]: {probs:?}")));
        }
        let sum: f64 = probs.iter().sum();
        if (sum - 1.0).abs() > Self::SUM_TOLERANCE {
            return Err(Error::Usage(format!("probabilities sum to {sum}, not 1")));
        }
        Ok(Self(probs))
    }

    pub fn probs(&self) -> &[f64] {
        &self.0
    }

    /// Most probable class; ties go to the lowest index.
    pub fn argmax(&self) -> usize {
        argmax(&self.0)
    }
}

/// Index of the largest entry, lowest index on ties.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// In-place softmax with max-logit subtraction.
fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

fn affine(input: &Matrix, params: &[f64], layer: &LayerLayout) -> Matrix {
    let w = &params[layer.weight_offset..layer.bias_offset];
    let b = &params[layer.bias_offset..layer.end()];
    let mut out = Matrix::zeros(input.rows(), layer.n_out);
    for r in 0..input.rows() {
        let x = input.row(r);
        let z = out.row_mut(r);
        for o in 0..layer.n_out {
            let w_row = &w[o * layer.n_in..(o + 1) * layer.n_in];
            z[o] = b[o] + w_row.iter().zip(x).map(|(a, b)| a * b).sum::<f64>();
        }
    }
    out
}

/// Post-activation outputs of every layer; the last entry holds the raw
/// (unfloored) softmax.
fn forward_layers(params: &ParamVector, spec: &ModelSpec, features: &Matrix) -> Result<Vec<Matrix>> {
    params.check(spec)?;
    if features.cols() != spec.input_dim() {
        return Err(Error::Config(format!(
            "features have {} columns, model expects {}",
            features.cols(),
            spec.input_dim()
        )));
    }
    let layers = spec.layers();
    let mut outputs: Vec<Matrix> = Vec::with_capacity(layers.len());
    for (l, layer) in layers.iter().enumerate() {
        let input = if l == 0 { features } else { &outputs[l - 1] };
        let mut z = affine(input, params.as_slice(), layer);
        if l + 1 == layers.len() {
            for r in 0..z.rows() {
                softmax_in_place(z.row_mut(r));
            }
        } else {
            let act = spec.activation();
            for v in z.data.iter_mut() {
                *v = act.apply(*v);
            }
        }
        outputs.push(z);
    }
    Ok(outputs)
}

/// Class probabilities `[B x C]`, one valid distribution per row.
pub fn forward(params: &ParamVector, spec: &ModelSpec, features: &Matrix) -> Result<Matrix> {
    let mut probs = forward_layers(params, spec, features)?
        .pop()
        .expect("at least one layer");
    for p in probs.data.iter_mut() {
        *p = p.max(PROB_FLOOR);
    }
    Ok(probs)
}

/// `-ln p[i, y_i]`, with the probability floored at [`PROB_FLOOR`].
pub fn per_sample_cross_entropy(probs: &Matrix, labels: &[usize]) -> Result<Vec<f64>> {
    if probs.rows() != labels.len() {
        return Err(Error::Config(format!(
            "{} probability rows but {} labels",
            probs.rows(),
            labels.len()
        )));
    }
    labels
        .iter()
        .enumerate()
        .map(|(i, &y)| {
            let row = probs.row(i);
            let p = row.get(y).copied().ok_or_else(|| {
                Error::Config(format!("label {y} out of range for {} classes", row.len()))
            })?;
            Ok(-p.max(PROB_FLOOR).ln())
        })
        .collect()
}

/// Per-sample losses plus the gradient of `(1/B) * sum_i w_i * CE_i`.
///
/// The gradient treats the softmax as unfloored; the floor only matters for
/// probabilities below 1e-12, where the true-class gradient is already ~-1.
pub fn loss_and_gradient(
    params: &ParamVector,
    spec: &ModelSpec,
    batch: &Minibatch,
    sample_weights: &[f64],
) -> Result<(Vec<f64>, ParamVector)> {
    let b = batch.len();
    if sample_weights.len() != b {
        return Err(Error::Config(format!(
            "{} sample weights for a batch of {b}",
            sample_weights.len()
        )));
    }
    if let Some(w) = sample_weights.iter().find(|w| !w.is_finite() || **w < 0.0) {
        return Err(Error::Usage(format!(
            "sample weights must be finite and nonnegative, got {w}"
        )));
    }
    let n_classes = spec.n_classes();
    if let Some(&bad) = batch.labels.iter().find(|&&y| y >= n_classes) {
        return Err(Error::Config(format!(
            "label {bad} out of range for {n_classes} classes"
        )));
    }
    let outputs = forward_layers(params, spec, &batch.features)?;
    let layers = spec.layers();
    let probs = outputs.last().expect("at least one layer");

    let losses: Vec<f64> = batch
        .labels
        .iter()
        .enumerate()
        .map(|(i, &y)| -probs.row(i)[y].max(PROB_FLOOR).ln())
        .collect();

    // dL/dz at the output: w_i / B * (p - onehot(y))
    let mut delta = probs.clone();
    let inv_b = 1.0 / b as f64;
    for (i, &y) in batch.labels.iter().enumerate() {
        let scale = sample_weights[i] * inv_b;
        let row = delta.row_mut(i);
        row[y] -= 1.0;
        for v in row.iter_mut() {
            *v *= scale;
        }
    }

    let mut grad = vec![0.0; spec.n_params()];
    let act = spec.activation();
    for l in (0..layers.len()).rev() {
        let layer = &layers[l];
        let input = if l == 0 { &batch.features } else { &outputs[l - 1] };
        let (gw, rest) = grad[layer.weight_offset..layer.end()].split_at_mut(layer.n_in * layer.n_out);
        let gb = rest;
        for r in 0..b {
            let d = delta.row(r);
            let x = input.row(r);
            for o in 0..layer.n_out {
                let d_o = d[o];
                if d_o == 0.0 {
                    continue;
                }
                gb[o] += d_o;
                let gw_row = &mut gw[o * layer.n_in..(o + 1) * layer.n_in];
                for (g, &xi) in gw_row.iter_mut().zip(x) {
                    *g += d_o * xi;
                }
            }
        }
        if l > 0 {
            let w = &params.as_slice()[layer.weight_offset..layer.bias_offset];
            let mut prev = Matrix::zeros(b, layer.n_in);
            for r in 0..b {
                let d = delta.row(r);
                let a = input.row(r);
                let p = prev.row_mut(r);
                for o in 0..layer.n_out {
                    let d_o = d[o];
                    if d_o == 0.0 {
                        continue;
                    }
                    let w_row = &w[o * layer.n_in..(o + 1) * layer.n_in];
                    for (pi, &wi) in p.iter_mut().zip(w_row) {
                        *pi += d_o * wi;
                    }
                }
                for (pi, &ai) in p.iter_mut().zip(a) {
                    *pi *= act.derivative_from_output(ai);
                }
            }
            delta = prev;
        }
    }
    Ok((losses, ParamVector::from_raw(grad)))
}

/// Gradient of `(1/B) * sum_i w_i * CE_i` with respect to the parameters.
pub fn backward(
    params: &ParamVector,
    spec: &ModelSpec,
    batch: &Minibatch,
    sample_weights: &[f64],
) -> Result<ParamVector> {
    loss_and_gradient(params, spec, batch, sample_weights).map(|(_, g)| g)
}
