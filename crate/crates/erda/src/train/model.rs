//! The segmentation model: per-point MLP backbone with one k-NN mean
//! aggregation in the middle, a linear classification head producing logits,
//! and an optional projection MLP whose output feeds the prototype bank.
//!
//! ```text
//! features ─ f1 ─ ReLU ─ knn_mean ─ f2 ─ ReLU ─┬─ head ──────── logits z
//!                                              └─ proj (0–3) ── projected u
//! ```
//!
//! Backward combines the head and projection cotangents at the shared hidden
//! representation and pushes them through the aggregation back into `f1`, so
//! gradients from the pseudo-label branch reach the backbone exactly.

use crate::losses::ScoreVector;
use crate::network::{self, ForwardTrace, MlpSpec, Parameters};
use crate::pseudo::PrototypeBank;

use super::TrainError;

/// Architecture of the full model, derived from config plus data dimensions.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelSpec {
    pub f1: MlpSpec,
    pub f2: MlpSpec,
    pub head: MlpSpec,
    /// `None` when the projection depth is 0 (the bank sees the backbone
    /// output directly).
    pub proj: Option<MlpSpec>,
    pub knn_k: usize,
}

impl ModelSpec {
    /// Build the architecture: backbone `[input → W] ++ knn_mean ++ [W → W]`,
    /// head `[W → K]`, projection of `projection_depth` layers ending at
    /// `projection_dim` with hidden widths `W` (depth 0 disables it).
    pub fn new(
        input_dim: usize,
        num_classes: usize,
        backbone_width: usize,
        projection_depth: usize,
        projection_dim: usize,
        knn_k: usize,
    ) -> Result<Self, TrainError> {
        if input_dim == 0 {
            return Err(TrainError::InvalidConfig("input dimension must be positive".into()));
        }
        if num_classes < 2 {
            return Err(TrainError::InvalidConfig(format!(
                "need at least 2 classes, got {num_classes}"
            )));
        }
        if backbone_width == 0 || projection_dim == 0 {
            return Err(TrainError::InvalidConfig("widths must be positive".into()));
        }
        if knn_k == 0 {
            return Err(TrainError::InvalidConfig("knn_k must be positive".into()));
        }
        if projection_depth > 3 {
            return Err(TrainError::InvalidConfig(format!(
                "projection depth must be at most 3, got {projection_depth}"
            )));
        }
        let w = backbone_width;
        let proj = match projection_depth {
            0 => None,
            depth => {
                let mut widths = vec![w; depth];
                widths.push(projection_dim);
                Some(MlpSpec::new(widths, true)?)
            }
        };
        Ok(ModelSpec {
            f1: MlpSpec::new(vec![input_dim, w], false)?,
            f2: MlpSpec::new(vec![w, w], false)?,
            head: MlpSpec::new(vec![w, num_classes], true)?,
            proj,
            knn_k,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.f1.input_dim()
    }

    pub fn num_classes(&self) -> usize {
        self.head.output_dim()
    }

    pub fn backbone_width(&self) -> usize {
        self.f1.output_dim()
    }

    /// Width of the feature the prototype bank stores.
    pub fn proj_output_dim(&self) -> usize {
        self.proj
            .as_ref()
            .map_or(self.backbone_width(), MlpSpec::output_dim)
    }
}

/// Parameters (or gradients — same shape) of every component.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub f1: Parameters,
    pub f2: Parameters,
    pub head: Parameters,
    pub proj: Option<Parameters>,
}

impl ModelParams {
    /// Seeded initialization; component streams are decorrelated so nearby
    /// seeds do not share tensors.
    pub fn init(spec: &ModelSpec, seed: u64) -> Self {
        let base = seed.wrapping_mul(0x9E37_79B9_7F4A_7C15);
        ModelParams {
            f1: network::init_params(&spec.f1, base ^ 0x00F1_00F1_00F1_00F1),
            f2: network::init_params(&spec.f2, base ^ 0x00F2_00F2_00F2_00F2),
            head: network::init_params(&spec.head, base ^ 0x0EAD_0EAD_0EAD_0EAD),
            proj: spec
                .proj
                .as_ref()
                .map(|p| network::init_params(p, base ^ 0x0901_0901_0901_0901)),
        }
    }

    pub fn zeros_like(spec: &ModelSpec) -> Self {
        ModelParams {
            f1: Parameters::zeros_like(&spec.f1),
            f2: Parameters::zeros_like(&spec.f2),
            head: Parameters::zeros_like(&spec.head),
            proj: spec.proj.as_ref().map(Parameters::zeros_like),
        }
    }

    fn components(&self) -> Vec<&Parameters> {
        let mut parts = vec![&self.f1, &self.f2];
        if let Some(p) = &self.proj {
            parts.push(p);
        }
        parts.push(&self.head);
        parts
    }

    fn components_mut(&mut self) -> Vec<&mut Parameters> {
        let mut parts = vec![&mut self.f1, &mut self.f2];
        if let Some(p) = &mut self.proj {
            parts.push(p);
        }
        parts.push(&mut self.head);
        parts
    }

    pub fn num_params(&self) -> usize {
        self.components().iter().map(|p| p.num_params()).sum()
    }

    /// Flat index across components in the fixed order f1, f2, proj, head.
    pub fn get_flat(&self, mut index: usize) -> f64 {
        for part in self.components() {
            let n = part.num_params();
            if index < n {
                return part.get_flat(index);
            }
            index -= n;
        }
        panic!("flat index out of range");
    }

    pub fn set_flat(&mut self, mut index: usize, value: f64) {
        for part in self.components_mut() {
            let n = part.num_params();
            if index < n {
                part.set_flat(index, value);
                return;
            }
            index -= n;
        }
        panic!("flat index out of range");
    }

    pub fn for_each(&self, mut f: impl FnMut(f64)) {
        for part in self.components() {
            part.for_each(&mut f);
        }
    }

    pub fn for_each_mut(&mut self, mut f: impl FnMut(&mut f64)) {
        for part in self.components_mut() {
            part.for_each_mut(&mut f);
        }
    }

    /// Elementwise combine with another parameter set of identical shape.
    pub fn zip_mut(&mut self, other: &ModelParams, mut f: impl FnMut(&mut f64, f64)) {
        let mut mine = self.components_mut();
        let theirs = other.components();
        assert!(
            mine.len() == theirs.len(),
            "parameter sets have different component counts"
        );
        for (a, b) in mine.iter_mut().zip(theirs) {
            assert!(
                a.layers.len() == b.layers.len(),
                "parameter sets have different layer counts"
            );
            for (la, lb) in a.layers.iter_mut().zip(&b.layers) {
                assert!(
                    la.weight.len() == lb.weight.len() && la.bias.len() == lb.bias.len(),
                    "parameter sets have different layer shapes"
                );
                for (x, &y) in la.weight.iter_mut().zip(&lb.weight) {
                    f(x, y);
                }
                for (x, &y) in la.bias.iter_mut().zip(&lb.bias) {
                    f(x, y);
                }
            }
        }
    }

    pub fn scale(&mut self, c: f64) {
        self.for_each_mut(|x| *x *= c);
    }

    /// Euclidean norm over every entry; the quantity gradient clipping caps.
    pub fn global_norm(&self) -> f64 {
        let mut acc = 0.0;
        self.for_each(|x| acc += x * x);
        acc.sqrt()
    }
}

/// Per-point outputs of one forward pass.
#[derive(Debug, Clone)]
pub struct ModelOutput {
    /// Classification logits `z`, one row of `K` per point.
    pub logits: Vec<Vec<f64>>,
    /// Projected features `u` feeding the prototype bank.
    pub projected: Vec<Vec<f64>>,
}

/// Cached traces for backward.
#[derive(Debug, Clone)]
pub struct ModelTrace {
    f1: ForwardTrace,
    f2: ForwardTrace,
    head: ForwardTrace,
    proj: Option<ForwardTrace>,
    batch: usize,
}

/// Forward over a whole point set; `neighbors` are precomputed k-NN lists
/// (one per point, indices into the same set).
pub fn model_forward(
    params: &ModelParams,
    spec: &ModelSpec,
    features: &[Vec<f64>],
    neighbors: &[Vec<usize>],
) -> Result<(ModelOutput, ModelTrace), TrainError> {
    if neighbors.len() != features.len() {
        return Err(TrainError::InvalidInput(format!(
            "{} neighbor lists for {} points",
            neighbors.len(),
            features.len()
        )));
    }
    let (h1, f1_trace) = network::forward(&params.f1, &spec.f1, features)?;
    let aggregated = network::knn_mean_with_indices(neighbors, &h1)?;
    let (h2, f2_trace) = network::forward(&params.f2, &spec.f2, &aggregated)?;
    let (logits, head_trace) = network::forward(&params.head, &spec.head, &h2)?;
    let (projected, proj_trace) = match (&params.proj, &spec.proj) {
        (Some(p), Some(s)) => {
            let (u, t) = network::forward(p, s, &h2)?;
            (u, Some(t))
        }
        (None, None) => (h2.clone(), None),
        _ => {
            return Err(TrainError::InvalidInput(
                "projection parameters do not match the spec".into(),
            ))
        }
    };
    Ok((
        ModelOutput { logits, projected },
        ModelTrace {
            f1: f1_trace,
            f2: f2_trace,
            head: head_trace,
            proj: proj_trace,
            batch: features.len(),
        },
    ))
}

/// Reverse pass: cotangents on the logits (`dz`) and on the projected
/// features (`du`) produce gradients for every parameter.
pub fn model_backward(
    params: &ModelParams,
    spec: &ModelSpec,
    trace: &ModelTrace,
    neighbors: &[Vec<usize>],
    dz: &[Vec<f64>],
    du: &[Vec<f64>],
) -> Result<ModelParams, TrainError> {
    if dz.len() != trace.batch || du.len() != trace.batch {
        return Err(TrainError::InvalidInput(format!(
            "cotangent rows {}/{} for a batch of {}",
            dz.len(),
            du.len(),
            trace.batch
        )));
    }
    let (head_grads, dh2_head) = network::backward(&trace.head, &params.head, &spec.head, dz)?;
    let (proj_grads, mut dh2) = match (&params.proj, &spec.proj, &trace.proj) {
        (Some(p), Some(s), Some(t)) => {
            let (g, dh2_proj) = network::backward(t, p, s, du)?;
            (Some(g), dh2_proj)
        }
        (None, None, None) => (None, du.to_vec()),
        _ => {
            return Err(TrainError::InvalidInput(
                "projection parameters do not match the spec".into(),
            ))
        }
    };
    for (row, head_row) in dh2.iter_mut().zip(&dh2_head) {
        for (a, &b) in row.iter_mut().zip(head_row) {
            *a += b;
        }
    }
    let (f2_grads, d_aggregated) = network::backward(&trace.f2, &params.f2, &spec.f2, &dh2)?;
    let dh1 = network::knn_mean_backward(neighbors, &d_aggregated)?;
    let (f1_grads, _) = network::backward(&trace.f1, &params.f1, &spec.f1, &dh1)?;
    Ok(ModelParams {
        f1: f1_grads,
        f2: f2_grads,
        head: head_grads,
        proj: proj_grads,
    })
}

/// Temperature-scaled cosine scores of one projected feature against the
/// bank; thin wrapper so the backward pass lives next to its forward.
pub fn cosine_scores(
    bank: &PrototypeBank,
    u: &[f64],
    temperature: f64,
) -> Result<ScoreVector, TrainError> {
    Ok(crate::pseudo::score(bank, u, temperature)?)
}

/// Chain rule through the cosine scores: given `ds_k = dL/ds_k`, returns
/// `dL/du`. Centroids are constants (stop-gradient), so only the feature
/// side is differentiated:
/// `∂cos(u, c)/∂u = (c/|c| − cos · u/|u|) / |u|`, scaled by `1/T`.
pub fn cosine_scores_backward(
    bank: &PrototypeBank,
    u: &[f64],
    temperature: f64,
    ds: &[f64],
) -> Result<Vec<f64>, TrainError> {
    if ds.len() != bank.num_classes() {
        return Err(TrainError::InvalidInput(format!(
            "{} score cotangents for {} classes",
            ds.len(),
            bank.num_classes()
        )));
    }
    if u.len() != bank.dim() {
        return Err(TrainError::InvalidInput(format!(
            "feature width {} does not match bank dimension {}",
            u.len(),
            bank.dim()
        )));
    }
    let u_norm = u.iter().map(|x| x * x).sum::<f64>().sqrt();
    if u_norm == 0.0 {
        return Err(TrainError::InvalidInput(
            "zero-norm projected feature has no defined cosine gradient".into(),
        ));
    }
    let mut du = vec![0.0; u.len()];
    for (k, &g) in ds.iter().enumerate() {
        if !bank.is_initialized(k) {
            return Err(TrainError::InvalidInput(format!(
                "class {k} centroid is uninitialized"
            )));
        }
        let c = bank.centroid(k);
        let c_norm = c.iter().map(|x| x * x).sum::<f64>().sqrt();
        if c_norm == 0.0 {
            return Err(TrainError::InvalidInput(format!(
                "class {k} centroid has zero norm"
            )));
        }
        let dot: f64 = u.iter().zip(c).map(|(a, b)| a * b).sum();
        let cos = dot / (u_norm * c_norm);
        let scale = g / (temperature * u_norm);
        for ((d, &ui), &ci) in du.iter_mut().zip(u).zip(c) {
            *d += scale * (ci / c_norm - cos * ui / u_norm);
        }
    }
    Ok(du)
}
