//! Segmentation metrics and the binary gradient-field grid export.
//!
//! Metrics follow the usual conventions: per-class IoU from a ground-truth ×
//! prediction confusion matrix, mIoU over classes that actually occur (zero
//! union excludes a class from the mean), overall accuracy as the trace
//! fraction. Pseudo-label sharpness is summarized as mean Shannon entropy in
//! nats.
//!
//! The gradient grid tabulates the score-space update `delta = -g_1` of the
//! pseudo-label branch over a square lattice of binary distributions
//! `(p, q) ∈ [ε, 1−ε]²`, one file per (distance, λ) pair — the raw numbers
//! behind a contour plot of how each loss reshapes a pseudo-label.

use std::fmt;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::losses::{self, Distance, LossConfig, ProbVector};

#[derive(Debug, Clone, PartialEq)]
pub enum EvalError {
    InvalidClassCount(usize),
    ClassOutOfRange { id: usize, num_classes: usize },
    EmptyInput(&'static str),
    InvalidSpec(String),
    Loss(losses::LossError),
    Io { path: String, message: String },
}

impl fmt::Display for EvalError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            EvalError::InvalidClassCount(k) => write!(f, "need at least 2 classes, got {k}"),
            EvalError::ClassOutOfRange { id, num_classes } => {
                write!(f, "class id {id} out of range for {num_classes} classes")
            }
            EvalError::EmptyInput(what) => write!(f, "empty input: {what}"),
            EvalError::InvalidSpec(msg) => write!(f, "invalid grid spec: {msg}"),
            EvalError::Loss(e) => write!(f, "loss evaluation failed: {e}"),
            EvalError::Io { path, message } => write!(f, "io error on {path}: {message}"),
        }
    }
}

impl std::error::Error for EvalError {}

impl From<losses::LossError> for EvalError {
    fn from(e: losses::LossError) -> Self {
        EvalError::Loss(e)
    }
}

/// K × K prediction counts, rows indexed by ground truth, columns by
/// prediction.
#[derive(Debug, Clone, PartialEq)]
pub struct ConfusionMatrix {
    counts: Vec<u64>,
    num_classes: usize,
}

impl ConfusionMatrix {
    pub fn new(num_classes: usize) -> Result<Self, EvalError> {
        if num_classes < 2 {
            return Err(EvalError::InvalidClassCount(num_classes));
        }
        Ok(ConfusionMatrix {
            counts: vec![0; num_classes * num_classes],
            num_classes,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn update(&mut self, gt: usize, pred: usize) -> Result<(), EvalError> {
        for id in [gt, pred] {
            if id >= self.num_classes {
                return Err(EvalError::ClassOutOfRange {
                    id,
                    num_classes: self.num_classes,
                });
            }
        }
        self.counts[gt * self.num_classes + pred] += 1;
        Ok(())
    }

    pub fn count(&self, gt: usize, pred: usize) -> u64 {
        self.counts[gt * self.num_classes + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Build directly from parallel ground-truth/prediction label slices.
    pub fn from_labels(
        gt: &[usize],
        pred: &[usize],
        num_classes: usize,
    ) -> Result<Self, EvalError> {
        if gt.len() != pred.len() {
            return Err(EvalError::EmptyInput("gt/pred length mismatch"));
        }
        let mut cm = ConfusionMatrix::new(num_classes)?;
        for (&g, &p) in gt.iter().zip(pred) {
            cm.update(g, p)?;
        }
        Ok(cm)
    }

    /// Derive IoU/OA metrics; the caller supplies the pseudo-label entropy
    /// statistic, which does not live in the confusion matrix.
    pub fn metrics(&self, mean_pseudo_entropy: f64) -> Result<MetricsReport, EvalError> {
        let total = self.total();
        if total == 0 {
            return Err(EvalError::EmptyInput("confusion matrix has no counts"));
        }
        let k = self.num_classes;
        let mut per_class_iou = Vec::with_capacity(k);
        let mut sum = 0.0;
        let mut counted = 0usize;
        let mut trace = 0u64;
        for c in 0..k {
            let tp = self.count(c, c);
            trace += tp;
            let gt_row: u64 = (0..k).map(|j| self.count(c, j)).sum();
            let pred_col: u64 = (0..k).map(|i| self.count(i, c)).sum();
            let union = gt_row + pred_col - tp;
            if union == 0 {
                per_class_iou.push(None);
            } else {
                let iou = tp as f64 / union as f64;
                per_class_iou.push(Some(iou));
                sum += iou;
                counted += 1;
            }
        }
        assert!(counted > 0, "nonempty matrix must have a nonzero union");
        Ok(MetricsReport {
            per_class_iou,
            miou: sum / counted as f64,
            oa: trace as f64 / total as f64,
            mean_pseudo_entropy,
        })
    }
}

/// Evaluation summary. `per_class_iou[k]` is `None` when class `k` occurs in
/// neither ground truth nor predictions; such classes are excluded from
/// `miou`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub per_class_iou: Vec<Option<f64>>,
    pub miou: f64,
    pub oa: f64,
    /// Mean Shannon entropy of the pseudo-labels, in nats.
    pub mean_pseudo_entropy: f64,
}

/// Arithmetic mean of per-point Shannon entropies, in nats.
pub fn mean_pseudo_entropy(pseudo: &[ProbVector]) -> Result<f64, EvalError> {
    if pseudo.is_empty() {
        return Err(EvalError::EmptyInput("no pseudo-labels"));
    }
    let sum: f64 = pseudo.iter().map(losses::entropy).sum();
    Ok(sum / pseudo.len() as f64)
}

/// Lattice description for the binary gradient-field export.
#[derive(Debug, Clone, PartialEq)]
pub struct GradGridSpec {
    pub distance: Distance,
    pub lambda: f64,
    pub resolution: usize,
    /// Distance kept from the simplex boundary: the lattice spans
    /// `[margin, 1 − margin]` in both p and q.
    pub epsilon_margin: f64,
}

impl GradGridSpec {
    pub fn new(
        distance: Distance,
        lambda: f64,
        resolution: usize,
        epsilon_margin: f64,
    ) -> Result<Self, EvalError> {
        let spec = GradGridSpec {
            distance,
            lambda,
            resolution,
            epsilon_margin,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<(), EvalError> {
        if self.resolution < 8 {
            return Err(EvalError::InvalidSpec(format!(
                "resolution must be at least 8, got {}",
                self.resolution
            )));
        }
        if !(self.epsilon_margin > 0.0 && self.epsilon_margin < 0.5) {
            return Err(EvalError::InvalidSpec(format!(
                "epsilon_margin must lie in (0, 0.5), got {}",
                self.epsilon_margin
            )));
        }
        LossConfig::new(self.distance, self.lambda).map_err(EvalError::Loss)?;
        Ok(())
    }

    /// Lattice coordinate `i` of `resolution`, spanning `[ε, 1 − ε]`. Odd
    /// resolutions place the middle point exactly at 0.5.
    fn coordinate(&self, i: usize) -> f64 {
        let last = self.resolution - 1;
        if 2 * i == last {
            return 0.5;
        }
        let t = i as f64 / last as f64;
        self.epsilon_margin + (1.0 - 2.0 * self.epsilon_margin) * t
    }
}

/// Score-space update of the first binary class: `delta = -g_1` where `g` is
/// the pseudo-label-branch gradient at scores `s = (ln p, ln(1−p))` against
/// target `(q, 1−q)`.
pub fn grid_delta(distance: Distance, lambda: f64, p: f64, q: f64) -> Result<f64, EvalError> {
    for (name, v) in [("p", p), ("q", q)] {
        if !(v > 0.0 && v < 1.0) {
            return Err(EvalError::InvalidSpec(format!(
                "{name} must lie strictly inside (0, 1), got {v}"
            )));
        }
    }
    let cfg = LossConfig::new(distance, lambda)?;
    let scores = losses::ScoreVector::new(vec![p.ln(), (1.0 - p).ln()])?;
    let target = ProbVector::new(vec![q, 1.0 - q])?;
    let grad = losses::pseudo_loss_grad_scores(&scores, &target, &cfg)?;
    Ok(-grad[0])
}

/// Tabulate `(p, q, delta)` over the full lattice, `p` varying slowest.
pub fn gradient_grid(spec: &GradGridSpec) -> Result<Vec<[f64; 3]>, EvalError> {
    spec.validate()?;
    let mut rows = Vec::with_capacity(spec.resolution * spec.resolution);
    for i in 0..spec.resolution {
        let p = spec.coordinate(i);
        for j in 0..spec.resolution {
            let q = spec.coordinate(j);
            rows.push([p, q, grid_delta(spec.distance, spec.lambda, p, q)?]);
        }
    }
    Ok(rows)
}

/// Render the grid as a header line plus three-column rows.
pub fn format_gradient_grid(spec: &GradGridSpec) -> Result<String, EvalError> {
    let rows = gradient_grid(spec)?;
    let mut out = String::from("p q delta\n");
    for [p, q, delta] in rows {
        out.push_str(&format!("{p} {q} {delta}\n"));
    }
    Ok(out)
}

pub fn export_gradient_grid(spec: &GradGridSpec, path: &Path) -> Result<(), EvalError> {
    let text = format_gradient_grid(spec)?;
    let io_err = |e: std::io::Error| EvalError::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    };
    let mut file = std::fs::File::create(path).map_err(io_err)?;
    file.write_all(text.as_bytes()).map_err(io_err)?;
    Ok(())
}
