//! Class prototypes and pseudo-label generation.
//!
//! A [`PrototypeBank`] keeps one centroid per class in projected feature
//! space, maintained as an exponential moving average of per-batch class
//! means of *labeled* features. Pseudo-labels for unlabeled points are the
//! softmax of temperature-scaled cosine similarities against the bank. The
//! bank is an out-of-band statistic: no gradient flows through it.

use std::fmt;

use crate::losses::{softmax, ProbVector, ScoreVector};

#[derive(Debug, Clone, PartialEq)]
pub enum PseudoError {
    InvalidConfig(String),
    LengthMismatch { left: usize, right: usize },
    LabelOutOfRange { index: usize, label: usize, num_classes: usize },
    UninitializedClass(usize),
    ZeroNormVector(String),
    EmptyInput(String),
}

impl fmt::Display for PseudoError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PseudoError::InvalidConfig(msg) => write!(f, "invalid prototype config: {msg}"),
            PseudoError::LengthMismatch { left, right } => {
                write!(f, "length mismatch: {left} vs {right}")
            }
            PseudoError::LabelOutOfRange {
                index,
                label,
                num_classes,
            } => write!(
                f,
                "label {label} at row {index} out of range for {num_classes} classes"
            ),
            PseudoError::UninitializedClass(k) => {
                write!(f, "class {k} has no initialized prototype yet")
            }
            PseudoError::ZeroNormVector(msg) => write!(f, "zero-norm vector: {msg}"),
            PseudoError::EmptyInput(msg) => write!(f, "empty input: {msg}"),
        }
    }
}

impl std::error::Error for PseudoError {}

/// Per-class centroids in feature space with momentum-averaged updates.
#[derive(Debug, Clone, PartialEq)]
pub struct PrototypeBank {
    centroids: Vec<Vec<f64>>,
    initialized: Vec<bool>,
    momentum: f64,
}

impl PrototypeBank {
    /// Bank of `num_classes >= 2` zeroed, uninitialized centroids of
    /// dimension `dim >= 1`. `momentum` is the EMA keep-rate in `[0, 1)`.
    pub fn new(num_classes: usize, dim: usize, momentum: f64) -> Result<Self, PseudoError> {
        if num_classes < 2 {
            return Err(PseudoError::InvalidConfig(format!(
                "need at least 2 classes, got {num_classes}"
            )));
        }
        if dim == 0 {
            return Err(PseudoError::InvalidConfig("feature dim must be positive".into()));
        }
        if !(0.0..1.0).contains(&momentum) {
            return Err(PseudoError::InvalidConfig(format!(
                "momentum must lie in [0, 1), got {momentum}"
            )));
        }
        Ok(PrototypeBank {
            centroids: vec![vec![0.0; dim]; num_classes],
            initialized: vec![false; num_classes],
            momentum,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.centroids.len()
    }

    pub fn dim(&self) -> usize {
        self.centroids[0].len()
    }

    pub fn momentum(&self) -> f64 {
        self.momentum
    }

    pub fn centroid(&self, class: usize) -> &[f64] {
        &self.centroids[class]
    }

    pub fn is_initialized(&self, class: usize) -> bool {
        self.initialized[class]
    }

    /// True once every class has received at least one batch mean.
    pub fn fully_initialized(&self) -> bool {
        self.initialized.iter().all(|&b| b)
    }

    /// Reconstruct a bank from checkpoint pieces.
    pub fn from_parts(
        centroids: Vec<Vec<f64>>,
        initialized: Vec<bool>,
        momentum: f64,
    ) -> Result<Self, PseudoError> {
        let bank = PrototypeBank::new(centroids.len(), centroids.first().map_or(0, Vec::len), momentum)?;
        if initialized.len() != centroids.len() {
            return Err(PseudoError::LengthMismatch {
                left: initialized.len(),
                right: centroids.len(),
            });
        }
        let dim = bank.dim();
        if centroids.iter().any(|c| c.len() != dim) {
            return Err(PseudoError::InvalidConfig("ragged centroid dimensions".into()));
        }
        Ok(PrototypeBank {
            centroids,
            initialized,
            momentum,
        })
    }

    pub fn into_parts(self) -> (Vec<Vec<f64>>, Vec<bool>, f64) {
        (self.centroids, self.initialized, self.momentum)
    }
}

/// Mean feature per class over the rows present in the batch; classes with
/// no rows yield `None`.
pub fn batch_class_means(
    features: &[Vec<f64>],
    labels: &[usize],
    num_classes: usize,
) -> Result<Vec<Option<Vec<f64>>>, PseudoError> {
    if features.len() != labels.len() {
        return Err(PseudoError::LengthMismatch {
            left: features.len(),
            right: labels.len(),
        });
    }
    if features.is_empty() {
        return Ok(vec![None; num_classes]);
    }
    let dim = features[0].len();
    let mut sums = vec![vec![0.0; dim]; num_classes];
    let mut counts = vec![0usize; num_classes];
    for (i, (feat, &label)) in features.iter().zip(labels).enumerate() {
        if label >= num_classes {
            return Err(PseudoError::LabelOutOfRange {
                index: i,
                label,
                num_classes,
            });
        }
        if feat.len() != dim {
            return Err(PseudoError::LengthMismatch {
                left: feat.len(),
                right: dim,
            });
        }
        for (s, &v) in sums[label].iter_mut().zip(feat) {
            *s += v;
        }
        counts[label] += 1;
    }
    Ok(sums
        .into_iter()
        .zip(counts)
        .map(|(sum, n)| {
            if n == 0 {
                None
            } else {
                Some(sum.into_iter().map(|v| v / n as f64).collect())
            }
        })
        .collect())
}

/// Fold batch means into the bank: `C_k <- m C_k + (1 - m) mean_k` for
/// classes present; a first-ever mean is copied directly; absent classes
/// keep their centroid.
pub fn momentum_update(
    bank: &mut PrototypeBank,
    batch_means: &[Option<Vec<f64>>],
) -> Result<(), PseudoError> {
    if batch_means.len() != bank.num_classes() {
        return Err(PseudoError::LengthMismatch {
            left: batch_means.len(),
            right: bank.num_classes(),
        });
    }
    let m = bank.momentum;
    for (k, mean) in batch_means.iter().enumerate() {
        let Some(mean) = mean else { continue };
        if mean.len() != bank.dim() {
            return Err(PseudoError::LengthMismatch {
                left: mean.len(),
                right: bank.dim(),
            });
        }
        if bank.initialized[k] {
            for (c, &v) in bank.centroids[k].iter_mut().zip(mean) {
                *c = m * *c + (1.0 - m) * v;
            }
        } else {
            bank.centroids[k].copy_from_slice(mean);
            bank.initialized[k] = true;
        }
    }
    Ok(())
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Cosine similarity scores against every centroid, divided by the
/// temperature: `s_k = cos(feature, C_k) / T`.
pub fn score(
    bank: &PrototypeBank,
    feature: &[f64],
    temperature: f64,
) -> Result<ScoreVector, PseudoError> {
    if !(temperature.is_finite() && temperature > 0.0) {
        return Err(PseudoError::InvalidConfig(format!(
            "temperature must be a positive real, got {temperature}"
        )));
    }
    if feature.len() != bank.dim() {
        return Err(PseudoError::LengthMismatch {
            left: feature.len(),
            right: bank.dim(),
        });
    }
    let fnorm = norm(feature);
    if fnorm == 0.0 {
        return Err(PseudoError::ZeroNormVector("feature".into()));
    }
    let mut scores = Vec::with_capacity(bank.num_classes());
    for k in 0..bank.num_classes() {
        if !bank.initialized[k] {
            return Err(PseudoError::UninitializedClass(k));
        }
        let c = &bank.centroids[k];
        let cnorm = norm(c);
        if cnorm == 0.0 {
            return Err(PseudoError::ZeroNormVector(format!("centroid {k}")));
        }
        let dot: f64 = feature.iter().zip(c).map(|(&a, &b)| a * b).sum();
        scores.push(dot / (fnorm * cnorm * temperature));
    }
    ScoreVector::new(scores).map_err(|e| PseudoError::InvalidConfig(e.to_string()))
}

/// Soft pseudo-labels: softmax of the cosine scores, one row per feature.
pub fn pseudo_labels(
    bank: &PrototypeBank,
    features: &[Vec<f64>],
    temperature: f64,
) -> Result<Vec<ProbVector>, PseudoError> {
    features
        .iter()
        .map(|f| score(bank, f, temperature).map(|s| softmax(&s)))
        .collect()
}

/// How dense soft pseudo-labels are thinned (or not) before the loss.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SelectionStrategy {
    /// Keep every soft label unchanged.
    DenseSoft,
    /// Convert every label to a point mass on its argmax.
    OneHot,
    /// Per class, keep the `k` rows most confident in that class as one-hot
    /// labels; everything else becomes unlabeled. A row claimed by several
    /// classes goes to the lowest class index.
    TopK(usize),
    /// Keep rows whose peak confidence reaches `tau` as one-hot labels.
    Threshold(f64),
}

impl SelectionStrategy {
    pub fn validate(&self) -> Result<(), PseudoError> {
        match self {
            SelectionStrategy::TopK(k) if *k == 0 => {
                Err(PseudoError::InvalidConfig("topk needs k >= 1".into()))
            }
            SelectionStrategy::Threshold(t) if !(t.is_finite() && *t > 0.0 && *t < 1.0) => Err(
                PseudoError::InvalidConfig(format!("threshold must lie in (0, 1), got {t}")),
            ),
            _ => Ok(()),
        }
    }

    pub fn name(&self) -> String {
        match self {
            SelectionStrategy::DenseSoft => "dense".into(),
            SelectionStrategy::OneHot => "one_hot".into(),
            SelectionStrategy::TopK(k) => format!("topk:{k}"),
            SelectionStrategy::Threshold(t) => format!("threshold:{t}"),
        }
    }
}

impl fmt::Display for SelectionStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.name())
    }
}

impl std::str::FromStr for SelectionStrategy {
    type Err = PseudoError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let strategy = match s {
            "dense" => SelectionStrategy::DenseSoft,
            "one_hot" => SelectionStrategy::OneHot,
            other => {
                if let Some(k) = other.strip_prefix("topk:") {
                    let k = k.parse::<usize>().map_err(|_| {
                        PseudoError::InvalidConfig(format!("bad topk count in {other:?}"))
                    })?;
                    SelectionStrategy::TopK(k)
                } else if let Some(t) = other.strip_prefix("threshold:") {
                    let t = t.parse::<f64>().map_err(|_| {
                        PseudoError::InvalidConfig(format!("bad threshold in {other:?}"))
                    })?;
                    SelectionStrategy::Threshold(t)
                } else {
                    return Err(PseudoError::InvalidConfig(format!(
                        "unknown selection {s:?}; expected dense, one_hot, topk:K, or threshold:T"
                    )));
                }
            }
        };
        strategy.validate()?;
        Ok(strategy)
    }
}

impl serde::Serialize for SelectionStrategy {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.serialize_str(&self.name())
    }
}

impl<'de> serde::Deserialize<'de> for SelectionStrategy {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Thin a batch of soft pseudo-labels per the strategy. `None` rows are
/// excluded from the unlabeled loss. `TopK` with `k` beyond the available
/// rows keeps everything available; this is not an error.
pub fn apply_selection(
    pseudo: &[ProbVector],
    strategy: &SelectionStrategy,
) -> Vec<Option<ProbVector>> {
    strategy
        .validate()
        .unwrap_or_else(|e| panic!("invalid selection strategy: {e}"));
    match strategy {
        SelectionStrategy::DenseSoft => pseudo.iter().cloned().map(Some).collect(),
        SelectionStrategy::OneHot => pseudo
            .iter()
            .map(|p| Some(ProbVector::one_hot(p.len(), p.argmax())))
            .collect(),
        SelectionStrategy::Threshold(tau) => pseudo
            .iter()
            .map(|p| {
                let hot = p.argmax();
                (p.values()[hot] >= *tau).then(|| ProbVector::one_hot(p.len(), hot))
            })
            .collect(),
        SelectionStrategy::TopK(k) => {
            let mut out: Vec<Option<ProbVector>> = vec![None; pseudo.len()];
            if pseudo.is_empty() {
                return out;
            }
            let num_classes = pseudo[0].len();
            // Ascending class order makes the lowest class win contested rows.
            for class in 0..num_classes {
                let mut ranked: Vec<usize> = (0..pseudo.len()).collect();
                ranked.sort_by(|&a, &b| {
                    pseudo[b].values()[class]
                        .partial_cmp(&pseudo[a].values()[class])
                        .unwrap()
                        .then(a.cmp(&b))
                });
                for &row in ranked.iter().take(*k) {
                    if out[row].is_none() {
                        out[row] = Some(ProbVector::one_hot(num_classes, class));
                    }
                }
            }
            out
        }
    }
}
