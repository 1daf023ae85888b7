//! Minimal dense network machinery: batched MLP forward/backward with ReLU,
//! deterministic seeded initialization, and k-nearest-neighbor mean
//! aggregation for spatial context. Everything is hand-rolled over `Vec<f64>`
//! so the gradient path stays auditable end to end.

use std::fmt;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, PartialEq)]
pub enum NetworkError {
    InvalidSpec(String),
    ShapeMismatch { expected: usize, got: usize },
    StaleTrace(String),
    BadNeighborCount { k: usize, points: usize },
}

impl fmt::Display for NetworkError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            NetworkError::InvalidSpec(msg) => write!(f, "invalid network spec: {msg}"),
            NetworkError::ShapeMismatch { expected, got } => {
                write!(f, "shape mismatch: expected {expected}, got {got}")
            }
            NetworkError::StaleTrace(msg) => write!(f, "stale forward trace: {msg}"),
            NetworkError::BadNeighborCount { k, points } => {
                write!(f, "k = {k} neighbors requested from {points} points")
            }
        }
    }
}

impl std::error::Error for NetworkError {}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
}

/// Architecture of one MLP: `layer_widths = [d_in, h_1, ..., d_out]`, ReLU
/// between affine layers, and optionally a linear (no activation) last layer.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpSpec {
    pub layer_widths: Vec<usize>,
    pub activation: Activation,
    pub final_linear: bool,
}

impl MlpSpec {
    pub fn new(layer_widths: Vec<usize>, final_linear: bool) -> Result<Self, NetworkError> {
        if layer_widths.len() < 2 {
            return Err(NetworkError::InvalidSpec(format!(
                "need input and output widths, got {} entries",
                layer_widths.len()
            )));
        }
        if layer_widths.iter().any(|&w| w == 0) {
            return Err(NetworkError::InvalidSpec("zero layer width".into()));
        }
        Ok(MlpSpec {
            layer_widths,
            activation: Activation::Relu,
            final_linear,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.layer_widths[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.layer_widths.last().unwrap()
    }

    pub fn num_layers(&self) -> usize {
        self.layer_widths.len() - 1
    }
}

/// One affine layer: row-major `out x in` weight plus bias.
#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
    pub rows: usize,
    pub cols: usize,
}

impl Layer {
    fn zeros(rows: usize, cols: usize) -> Self {
        Layer {
            weight: vec![0.0; rows * cols],
            bias: vec![0.0; rows],
            rows,
            cols,
        }
    }
}

/// Parameter set of one MLP; gradient buffers share this shape.
#[derive(Debug, Clone, PartialEq)]
pub struct Parameters {
    pub layers: Vec<Layer>,
}

impl Parameters {
    pub fn zeros_like(spec: &MlpSpec) -> Self {
        let layers = spec
            .layer_widths
            .windows(2)
            .map(|w| Layer::zeros(w[1], w[0]))
            .collect();
        Parameters { layers }
    }

    pub fn num_params(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weight.len() + l.bias.len())
            .sum()
    }

    /// Visit every parameter in a fixed order (weights then bias, layer by
    /// layer). The same order is used by the flat accessors below.
    pub fn for_each(&self, mut f: impl FnMut(f64)) {
        for layer in &self.layers {
            layer.weight.iter().for_each(|&v| f(v));
            layer.bias.iter().for_each(|&v| f(v));
        }
    }

    pub fn for_each_mut(&mut self, mut f: impl FnMut(&mut f64)) {
        for layer in &mut self.layers {
            layer.weight.iter_mut().for_each(&mut f);
            layer.bias.iter_mut().for_each(&mut f);
        }
    }

    pub fn get_flat(&self, index: usize) -> f64 {
        let mut i = index;
        for layer in &self.layers {
            if i < layer.weight.len() {
                return layer.weight[i];
            }
            i -= layer.weight.len();
            if i < layer.bias.len() {
                return layer.bias[i];
            }
            i -= layer.bias.len();
        }
        panic!("flat index {index} out of range");
    }

    pub fn set_flat(&mut self, index: usize, value: f64) {
        let mut i = index;
        for layer in &mut self.layers {
            if i < layer.weight.len() {
                layer.weight[i] = value;
                return;
            }
            i -= layer.weight.len();
            if i < layer.bias.len() {
                layer.bias[i] = value;
                return;
            }
            i -= layer.bias.len();
        }
        panic!("flat index {index} out of range");
    }
}

/// Seeded parameter init: weights uniform in `(-1/sqrt(fan_in), 1/sqrt(fan_in))`,
/// biases zero. Identical seeds give identical parameters.
pub fn init_params(spec: &MlpSpec, seed: u64) -> Parameters {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = Parameters::zeros_like(spec);
    for layer in &mut params.layers {
        let bound = 1.0 / (layer.cols as f64).sqrt();
        for w in &mut layer.weight {
            *w = rng.gen_range(-bound..bound);
        }
    }
    params
}

/// Everything backward needs: per-layer inputs and pre-activations, plus the
/// shape fingerprint used to reject stale traces.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    /// `layer_inputs[l]` is the batch entering affine layer `l`.
    layer_inputs: Vec<Vec<Vec<f64>>>,
    /// `pre_acts[l]` is the affine output of layer `l` before activation.
    pre_acts: Vec<Vec<Vec<f64>>>,
    widths: Vec<usize>,
    batch: usize,
}

fn affine(layer: &Layer, x: &[f64], out: &mut [f64]) {
    for r in 0..layer.rows {
        let row = &layer.weight[r * layer.cols..(r + 1) * layer.cols];
        let mut acc = layer.bias[r];
        for (w, v) in row.iter().zip(x) {
            acc += w * v;
        }
        out[r] = acc;
    }
}

/// Batched forward pass; returns outputs and the trace for backward.
pub fn forward(
    params: &Parameters,
    spec: &MlpSpec,
    inputs: &[Vec<f64>],
) -> Result<(Vec<Vec<f64>>, ForwardTrace), NetworkError> {
    if params.layers.len() != spec.num_layers() {
        return Err(NetworkError::InvalidSpec(format!(
            "{} parameter layers for a {}-layer spec",
            params.layers.len(),
            spec.num_layers()
        )));
    }
    for row in inputs {
        if row.len() != spec.input_dim() {
            return Err(NetworkError::ShapeMismatch {
                expected: spec.input_dim(),
                got: row.len(),
            });
        }
    }
    let mut trace = ForwardTrace {
        layer_inputs: Vec::with_capacity(spec.num_layers()),
        pre_acts: Vec::with_capacity(spec.num_layers()),
        widths: spec.layer_widths.clone(),
        batch: inputs.len(),
    };
    let mut current: Vec<Vec<f64>> = inputs.to_vec();
    for (l, layer) in params.layers.iter().enumerate() {
        let mut pre: Vec<Vec<f64>> = current
            .iter()
            .map(|x| {
                let mut out = vec![0.0; layer.rows];
                affine(layer, x, &mut out);
                out
            })
            .collect();
        trace.layer_inputs.push(std::mem::take(&mut current));
        let last = l + 1 == spec.num_layers();
        if last && spec.final_linear {
            trace.pre_acts.push(pre.clone());
            current = pre;
        } else {
            trace.pre_acts.push(pre.clone());
            for row in &mut pre {
                for v in row.iter_mut() {
                    if *v < 0.0 {
                        *v = 0.0;
                    }
                }
            }
            current = pre;
        }
    }
    Ok((current, trace))
}

/// Backpropagate `d_out` through the trace; returns parameter gradients
/// (shaped like `params`) and gradients w.r.t. the inputs.
pub fn backward(
    trace: &ForwardTrace,
    params: &Parameters,
    spec: &MlpSpec,
    output_grads: &[Vec<f64>],
) -> Result<(Parameters, Vec<Vec<f64>>), NetworkError> {
    if trace.widths != spec.layer_widths {
        return Err(NetworkError::StaleTrace(
            "trace was produced by a different architecture".into(),
        ));
    }
    if output_grads.len() != trace.batch {
        return Err(NetworkError::StaleTrace(format!(
            "trace holds {} rows, gradients have {}",
            trace.batch,
            output_grads.len()
        )));
    }
    for row in output_grads {
        if row.len() != spec.output_dim() {
            return Err(NetworkError::ShapeMismatch {
                expected: spec.output_dim(),
                got: row.len(),
            });
        }
    }
    let mut grads = Parameters::zeros_like(spec);
    let mut delta: Vec<Vec<f64>> = output_grads.to_vec();
    for l in (0..spec.num_layers()).rev() {
        let layer = &params.layers[l];
        let last = l + 1 == spec.num_layers();
        if !(last && spec.final_linear) {
            // ReLU mask from the stored pre-activations.
            for (row, pre) in delta.iter_mut().zip(&trace.pre_acts[l]) {
                for (d, &z) in row.iter_mut().zip(pre) {
                    if z <= 0.0 {
                        *d = 0.0;
                    }
                }
            }
        }
        let g = &mut grads.layers[l];
        let inputs = &trace.layer_inputs[l];
        let mut next_delta = vec![vec![0.0; layer.cols]; trace.batch];
        for (b, d_row) in delta.iter().enumerate() {
            let x = &inputs[b];
            for r in 0..layer.rows {
                let d = d_row[r];
                if d == 0.0 {
                    continue;
                }
                g.bias[r] += d;
                let wrow = &mut g.weight[r * layer.cols..(r + 1) * layer.cols];
                for (gw, &xv) in wrow.iter_mut().zip(x) {
                    *gw += d * xv;
                }
                let wrow = &layer.weight[r * layer.cols..(r + 1) * layer.cols];
                for (nd, &wv) in next_delta[b].iter_mut().zip(wrow) {
                    *nd += d * wv;
                }
            }
        }
        delta = next_delta;
    }
    Ok((grads, delta))
}

/// Sorted neighbor lists (self included) under squared Euclidean distance,
/// ties broken by point index so runs are deterministic.
pub fn knn_indices(coords: &[[f64; 3]], k: usize) -> Result<Vec<Vec<usize>>, NetworkError> {
    let n = coords.len();
    if k == 0 || k > n {
        return Err(NetworkError::BadNeighborCount { k, points: n });
    }
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let mut dists: Vec<(f64, usize)> = (0..n)
            .map(|j| {
                let dx = coords[i][0] - coords[j][0];
                let dy = coords[i][1] - coords[j][1];
                let dz = coords[i][2] - coords[j][2];
                (dx * dx + dy * dy + dz * dz, j)
            })
            .collect();
        dists.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
        out.push(dists.into_iter().take(k).map(|(_, j)| j).collect());
    }
    Ok(out)
}

/// Mean of each point's k nearest neighbors' features (given neighbor lists).
pub fn knn_mean_with_indices(
    neighbors: &[Vec<usize>],
    features: &[Vec<f64>],
) -> Result<Vec<Vec<f64>>, NetworkError> {
    if neighbors.len() != features.len() {
        return Err(NetworkError::ShapeMismatch {
            expected: neighbors.len(),
            got: features.len(),
        });
    }
    let dim = features.first().map_or(0, Vec::len);
    let mut out = Vec::with_capacity(features.len());
    for nbrs in neighbors {
        let mut acc = vec![0.0; dim];
        for &j in nbrs {
            for (a, &v) in acc.iter_mut().zip(&features[j]) {
                *a += v;
            }
        }
        let inv = 1.0 / nbrs.len() as f64;
        for a in &mut acc {
            *a *= inv;
        }
        out.push(acc);
    }
    Ok(out)
}

/// k-NN mean aggregation in one call: neighbors from `coords`, means over
/// `features`.
pub fn knn_mean_aggregate(
    coords: &[[f64; 3]],
    features: &[Vec<f64>],
    k: usize,
) -> Result<Vec<Vec<f64>>, NetworkError> {
    if coords.len() != features.len() {
        return Err(NetworkError::ShapeMismatch {
            expected: coords.len(),
            got: features.len(),
        });
    }
    knn_mean_with_indices(&knn_indices(coords, k)?, features)
}

/// Adjoint of [`knn_mean_with_indices`]: distributes each output gradient
/// over its contributing neighbors.
pub fn knn_mean_backward(
    neighbors: &[Vec<usize>],
    output_grads: &[Vec<f64>],
) -> Result<Vec<Vec<f64>>, NetworkError> {
    if neighbors.len() != output_grads.len() {
        return Err(NetworkError::ShapeMismatch {
            expected: neighbors.len(),
            got: output_grads.len(),
        });
    }
    let dim = output_grads.first().map_or(0, Vec::len);
    let mut grads = vec![vec![0.0; dim]; neighbors.len()];
    for (nbrs, out_g) in neighbors.iter().zip(output_grads) {
        let inv = 1.0 / nbrs.len() as f64;
        for &j in nbrs {
            for (g, &v) in grads[j].iter_mut().zip(out_g) {
                *g += inv * v;
            }
        }
    }
    Ok(grads)
}
