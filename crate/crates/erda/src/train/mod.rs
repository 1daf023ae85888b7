//! The training loop: supervised cross-entropy on the few labeled points
//! plus an α-weighted pseudo-label loss on everything else, with exact
//! gradients flowing through both the prediction branch and — when enabled —
//! the pseudo-labels themselves.
//!
//! One step runs a fixed pipeline: forward the whole batch, fold the labeled
//! projected features into the prototype bank (out of gradient), read
//! pseudo-labels from the frozen bank, assemble the loss, backpropagate both
//! branches, clip by global norm, and apply SGD with momentum. Until every
//! class prototype has been initialized the unlabeled term is skipped
//! (warm-up). Baseline modes reuse the identical code path with reweighted
//! loss terms, so ablation comparisons are exact rather than parallel
//! implementations.

pub mod checkpoint;
pub mod model;

use std::fmt;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{DataError, LabelMask, Scene};
use crate::eval::{ConfusionMatrix, EvalError, MetricsReport};
use crate::losses::{
    self, Distance, LossConfig, LossError, ProbVector, ScoreVector, DEFAULT_LOG_FLOOR,
};
use crate::network::{self, NetworkError};
use crate::pseudo::{self, PrototypeBank, PseudoError, SelectionStrategy};

pub use model::{ModelOutput, ModelParams, ModelSpec};

#[derive(Debug)]
pub enum TrainError {
    InvalidConfig(String),
    InvalidInput(String),
    /// The assembled loss stopped being a real number; carries the last
    /// diagnostics snapshot.
    NonFiniteLoss(Box<Diagnostics>),
    Checkpoint(String),
    Network(NetworkError),
    Pseudo(PseudoError),
    Loss(LossError),
    Eval(EvalError),
    Data(DataError),
}

impl fmt::Display for TrainError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TrainError::InvalidConfig(msg) => write!(f, "invalid config: {msg}"),
            TrainError::InvalidInput(msg) => write!(f, "invalid input: {msg}"),
            TrainError::NonFiniteLoss(diag) => write!(
                f,
                "loss became non-finite (supervised {}, unlabeled {})",
                diag.supervised_loss, diag.unlabeled_loss
            ),
            TrainError::Checkpoint(msg) => write!(f, "checkpoint error: {msg}"),
            TrainError::Network(e) => write!(f, "network error: {e}"),
            TrainError::Pseudo(e) => write!(f, "pseudo-label error: {e}"),
            TrainError::Loss(e) => write!(f, "loss error: {e}"),
            TrainError::Eval(e) => write!(f, "evaluation error: {e}"),
            TrainError::Data(e) => write!(f, "data error: {e}"),
        }
    }
}

impl std::error::Error for TrainError {}

impl From<NetworkError> for TrainError {
    fn from(e: NetworkError) -> Self {
        TrainError::Network(e)
    }
}

impl From<PseudoError> for TrainError {
    fn from(e: PseudoError) -> Self {
        TrainError::Pseudo(e)
    }
}

impl From<LossError> for TrainError {
    fn from(e: LossError) -> Self {
        TrainError::Loss(e)
    }
}

impl From<EvalError> for TrainError {
    fn from(e: EvalError) -> Self {
        TrainError::Eval(e)
    }
}

impl From<DataError> for TrainError {
    fn from(e: DataError) -> Self {
        TrainError::Data(e)
    }
}

/// What the unlabeled points contribute to the objective.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainMode {
    /// Only the labeled cross-entropy term; the bank is still maintained.
    SupervisedOnly,
    /// Standard pseudo-label training: cross-entropy against the selected
    /// targets, treated as constants (no gradient through the labels).
    PseudoBaseline,
    /// Entropy regularization alone (divergence weight forced to 0).
    ErOnly,
    /// Distribution alignment alone (entropy weight forced to 0).
    DaOnly,
    /// The full objective exactly as configured.
    Erda,
}

impl TrainMode {
    pub const ALL: [TrainMode; 5] = [
        TrainMode::SupervisedOnly,
        TrainMode::PseudoBaseline,
        TrainMode::ErOnly,
        TrainMode::DaOnly,
        TrainMode::Erda,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            TrainMode::SupervisedOnly => "supervised_only",
            TrainMode::PseudoBaseline => "pseudo_baseline",
            TrainMode::ErOnly => "er_only",
            TrainMode::DaOnly => "da_only",
            TrainMode::Erda => "erda",
        }
    }
}

impl fmt::Display for TrainMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for TrainMode {
    type Err = TrainError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        TrainMode::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| {
                TrainError::InvalidConfig(format!(
                    "unknown mode {s:?}; expected one of supervised_only, pseudo_baseline, \
                     er_only, da_only, erda"
                ))
            })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LrSchedule {
    Constant,
    Cosine,
}

/// When labeled features are folded into the prototype bank.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProtoUpdate {
    /// Every step, before pseudo-labels are read (freshest prototypes).
    PerStep,
    /// Once per epoch from the epoch's pooled labeled features.
    PerEpoch,
}

/// Full training configuration; the flat field set doubles as the config
/// file schema (TOML, one key per field, all optional).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub mode: TrainMode,
    pub distance: Distance,
    pub lambda: f64,
    pub log_floor: f64,
    /// Weight of the unlabeled loss term.
    pub alpha: f64,
    /// Prototype EMA keep-rate.
    pub momentum_m: f64,
    /// Softmax temperature over cosine scores.
    pub temperature: f64,
    pub lr: f64,
    pub lr_schedule: LrSchedule,
    pub sgd_momentum: f64,
    pub epochs: usize,
    /// Upper bound on points whose loss terms enter one step; scenes larger
    /// than this are processed in shuffled chunks (the forward pass always
    /// spans the whole scene so neighborhood context is intact).
    pub batch_size: usize,
    /// Global-norm gradient clip; `inf` disables clipping.
    pub clip_norm: f64,
    pub selection: SelectionStrategy,
    pub seed: u64,
    /// When false, pseudo-labels are constants in backward and the
    /// projection receives no gradient.
    pub grad_through_labels: bool,
    pub proto_update: ProtoUpdate,
    /// L2-normalize projected features before they enter the bank average.
    pub normalize_features: bool,
    pub backbone_width: usize,
    pub projection_depth: usize,
    pub projection_dim: usize,
    pub knn_k: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            mode: TrainMode::Erda,
            distance: Distance::KlPq,
            lambda: 1.0,
            log_floor: DEFAULT_LOG_FLOOR,
            alpha: 0.1,
            momentum_m: 0.999,
            temperature: 1.0,
            lr: 0.01,
            lr_schedule: LrSchedule::Cosine,
            sgd_momentum: 0.9,
            epochs: 30,
            batch_size: 1_000_000,
            clip_norm: 10.0,
            selection: SelectionStrategy::DenseSoft,
            seed: 0,
            grad_through_labels: true,
            proto_update: ProtoUpdate::PerStep,
            normalize_features: false,
            backbone_width: 32,
            projection_depth: 2,
            projection_dim: 16,
            knn_k: 8,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        self.loss()?;
        if !(self.alpha.is_finite() && self.alpha >= 0.0) {
            return Err(TrainError::InvalidConfig(format!(
                "alpha must be a finite nonnegative real, got {}",
                self.alpha
            )));
        }
        for (name, v) in [("momentum_m", self.momentum_m), ("sgd_momentum", self.sgd_momentum)] {
            if !(v.is_finite() && (0.0..1.0).contains(&v)) {
                return Err(TrainError::InvalidConfig(format!(
                    "{name} must lie in [0, 1), got {v}"
                )));
            }
        }
        for (name, v) in [("temperature", self.temperature), ("lr", self.lr)] {
            if !(v.is_finite() && v > 0.0) {
                return Err(TrainError::InvalidConfig(format!(
                    "{name} must be a positive real, got {v}"
                )));
            }
        }
        if !(self.clip_norm > 0.0) {
            return Err(TrainError::InvalidConfig(format!(
                "clip_norm must be positive (inf allowed), got {}",
                self.clip_norm
            )));
        }
        if self.batch_size == 0 {
            return Err(TrainError::InvalidConfig("batch_size must be positive".into()));
        }
        self.selection.validate()?;
        if self.backbone_width == 0 || self.projection_dim == 0 {
            return Err(TrainError::InvalidConfig("widths must be positive".into()));
        }
        if self.projection_depth > 3 {
            return Err(TrainError::InvalidConfig(format!(
                "projection_depth must be at most 3, got {}",
                self.projection_depth
            )));
        }
        if self.knn_k == 0 {
            return Err(TrainError::InvalidConfig("knn_k must be positive".into()));
        }
        Ok(())
    }

    /// The scalar-loss configuration this training config implies.
    pub fn loss(&self) -> Result<LossConfig, TrainError> {
        Ok(LossConfig::with_log_floor(
            self.distance,
            self.lambda,
            self.log_floor,
        )?)
    }

    /// Parse from the TOML config-file format; unknown keys are rejected by
    /// name.
    pub fn from_toml_str(text: &str) -> Result<Self, TrainError> {
        let cfg: TrainConfig =
            toml::from_str(text).map_err(|e| TrainError::InvalidConfig(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> Result<String, TrainError> {
        toml::to_string(self).map_err(|e| TrainError::InvalidConfig(e.to_string()))
    }

    /// Resolve the mode into concrete loss weights. All five modes run the
    /// same code path on these numbers, which is what makes the mode-algebra
    /// identities exact.
    pub fn effective(&self) -> EffectiveLoss {
        let base = EffectiveLoss {
            distance: self.distance,
            lambda: self.lambda,
            da_weight: 1.0,
            alpha: self.alpha,
            grad_through_labels: self.grad_through_labels,
        };
        match self.mode {
            TrainMode::Erda => base,
            TrainMode::SupervisedOnly => EffectiveLoss { alpha: 0.0, ..base },
            TrainMode::PseudoBaseline => EffectiveLoss {
                distance: Distance::KlPq,
                lambda: 1.0,
                grad_through_labels: false,
                ..base
            },
            TrainMode::ErOnly => EffectiveLoss {
                da_weight: 0.0,
                ..base
            },
            TrainMode::DaOnly => EffectiveLoss { lambda: 0.0, ..base },
        }
    }

    /// Learning rate for a 0-based epoch index.
    pub fn epoch_lr(&self, epoch: usize) -> f64 {
        match self.lr_schedule {
            LrSchedule::Constant => self.lr,
            LrSchedule::Cosine => {
                let total = self.epochs.max(1) as f64;
                self.lr * 0.5 * (1.0 + (std::f64::consts::PI * epoch as f64 / total).cos())
            }
        }
    }
}

/// Mode-resolved loss weights for one run.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EffectiveLoss {
    pub distance: Distance,
    pub lambda: f64,
    pub da_weight: f64,
    pub alpha: f64,
    pub grad_through_labels: bool,
}

/// A scene bundled with its weak-label mask and cached neighbor lists.
#[derive(Debug, Clone)]
pub struct PreparedScene {
    pub scene: Scene,
    pub mask: LabelMask,
    pub neighbors: Vec<Vec<usize>>,
    pub knn_k: usize,
    labeled: Vec<bool>,
}

impl PreparedScene {
    pub fn new(scene: Scene, mask: LabelMask, knn_k: usize) -> Result<Self, TrainError> {
        scene.validate()?;
        if let Some(&last) = mask.indices().last() {
            if last >= scene.len() {
                return Err(TrainError::InvalidInput(format!(
                    "mask index {last} out of range for a {}-point scene",
                    scene.len()
                )));
            }
        }
        let neighbors = network::knn_indices(&scene.coords, knn_k)?;
        let labeled = mask.flags(scene.len());
        Ok(PreparedScene {
            scene,
            mask,
            neighbors,
            knn_k,
            labeled,
        })
    }

    pub fn is_labeled(&self, point: usize) -> bool {
        self.labeled[point]
    }
}

/// Everything that evolves during training.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub spec: ModelSpec,
    pub params: ModelParams,
    pub velocity: ModelParams,
    pub bank: PrototypeBank,
    /// Completed epochs.
    pub epoch: usize,
    pub rng: ChaCha8Rng,
}

impl TrainState {
    pub fn new(cfg: &TrainConfig, input_dim: usize, num_classes: usize) -> Result<Self, TrainError> {
        cfg.validate()?;
        let spec = ModelSpec::new(
            input_dim,
            num_classes,
            cfg.backbone_width,
            cfg.projection_depth,
            cfg.projection_dim,
            cfg.knn_k,
        )?;
        let params = ModelParams::init(&spec, cfg.seed);
        let velocity = ModelParams::zeros_like(&spec);
        let bank = PrototypeBank::new(num_classes, spec.proj_output_dim(), cfg.momentum_m)?;
        Ok(TrainState {
            spec,
            params,
            velocity,
            bank,
            epoch: 0,
            rng: ChaCha8Rng::seed_from_u64(cfg.seed),
        })
    }
}

/// Loss components of one batch.
#[derive(Debug, Clone, PartialEq)]
pub struct Diagnostics {
    pub total: f64,
    pub supervised_loss: f64,
    pub unlabeled_loss: f64,
    pub labeled_count: usize,
    pub unlabeled_count: usize,
    /// Rows the selection strategy kept for the unlabeled term.
    pub selected_count: usize,
    /// Mean entropy of the dense pseudo-labels over the batch's unlabeled
    /// points; `None` when the unlabeled branch did not run.
    pub mean_pseudo_entropy: Option<f64>,
    /// Set when the batch had no labeled points (supervised term is 0).
    pub empty_labeled_warning: bool,
}

/// Mean-and-combine arithmetic of the objective: supervised mean plus
/// `alpha` times the mean over selected unlabeled rows; empty sets
/// contribute zero.
pub(crate) fn combine_terms(sup: &[f64], unl: &[f64], alpha: f64) -> (f64, f64, f64) {
    let sup_mean = if sup.is_empty() {
        0.0
    } else {
        sup.iter().sum::<f64>() / sup.len() as f64
    };
    let unl_mean = if unl.is_empty() {
        0.0
    } else {
        unl.iter().sum::<f64>() / unl.len() as f64
    };
    (sup_mean, unl_mean, sup_mean + alpha * unl_mean)
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    let mut best_val = f64::NEG_INFINITY;
    for (i, &v) in row.iter().enumerate() {
        if v > best_val {
            best = i;
            best_val = v;
        }
    }
    best
}

fn check_scene_fits_spec(prepared: &PreparedScene, spec: &ModelSpec) -> Result<(), TrainError> {
    if prepared.scene.feature_width() != spec.input_dim() {
        return Err(TrainError::InvalidInput(format!(
            "scene feature width {} does not match model input {}",
            prepared.scene.feature_width(),
            spec.input_dim()
        )));
    }
    if prepared.scene.num_classes != spec.num_classes() {
        return Err(TrainError::InvalidInput(format!(
            "scene has {} classes, model has {}",
            prepared.scene.num_classes,
            spec.num_classes()
        )));
    }
    Ok(())
}

fn l2_normalized(v: &[f64]) -> Result<Vec<f64>, TrainError> {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm == 0.0 {
        return Err(TrainError::InvalidInput(
            "cannot L2-normalize a zero feature vector".into(),
        ));
    }
    Ok(v.iter().map(|x| x / norm).collect())
}

/// Objective over one chunk of points given a frozen bank. Shared by the
/// scalar path (finite-difference oracles) and the gradient path (training).
fn objective(
    prepared: &PreparedScene,
    chunk: &[usize],
    out: &ModelOutput,
    trace: Option<&model::ModelTrace>,
    params: &ModelParams,
    spec: &ModelSpec,
    bank: &PrototypeBank,
    cfg: &TrainConfig,
) -> Result<(Diagnostics, Option<ModelParams>), TrainError> {
    let eff = cfg.effective();
    let k = spec.num_classes();
    let n = prepared.scene.len();
    let want_grads = trace.is_some();
    for &i in chunk {
        if i >= n {
            return Err(TrainError::InvalidInput(format!(
                "chunk index {i} out of range for {n} points"
            )));
        }
    }

    let labeled_rows: Vec<usize> = chunk.iter().copied().filter(|&i| prepared.is_labeled(i)).collect();
    let unlabeled_rows: Vec<usize> = chunk
        .iter()
        .copied()
        .filter(|&i| !prepared.is_labeled(i))
        .collect();

    let mut dz = vec![vec![0.0; k]; n];
    let mut du = vec![vec![0.0; spec.proj_output_dim()]; n];

    // Supervised branch: plain cross-entropy against the true labels.
    let mut sup_terms = Vec::with_capacity(labeled_rows.len());
    for &i in &labeled_rows {
        let z = ScoreVector::new(out.logits[i].clone())?;
        let q = losses::softmax(&z);
        let y = ProbVector::one_hot(k, prepared.scene.gt_labels[i]);
        sup_terms.push(losses::cross_entropy(&y, &q)?);
        if want_grads {
            let g = losses::weighted_grad_prediction_scores(
                &y,
                &z,
                Distance::KlPq,
                1.0,
                cfg.log_floor,
            )?;
            let w = 1.0 / labeled_rows.len() as f64;
            for (slot, gi) in dz[i].iter_mut().zip(g) {
                *slot += w * gi;
            }
        }
    }

    // Unlabeled branch: pseudo-labels from the frozen bank, thinned by the
    // selection strategy. Skipped entirely while prototypes are warming up
    // or when the mode zeroes the term.
    let mut unl_terms = Vec::new();
    let mut selected_count = 0usize;
    let mut mean_entropy = None;
    if eff.alpha > 0.0 && !unlabeled_rows.is_empty() && bank.fully_initialized() {
        let mut score_rows = Vec::with_capacity(unlabeled_rows.len());
        let mut dense = Vec::with_capacity(unlabeled_rows.len());
        for &i in &unlabeled_rows {
            let s = model::cosine_scores(bank, &out.projected[i], cfg.temperature)?;
            let p = losses::softmax(&s);
            score_rows.push(s);
            dense.push(p);
        }
        mean_entropy = Some(
            dense.iter().map(losses::entropy).sum::<f64>() / dense.len() as f64,
        );
        let targets = pseudo::apply_selection(&dense, &cfg.selection);
        let soft_targets = matches!(cfg.selection, SelectionStrategy::DenseSoft);
        selected_count = targets.iter().flatten().count();
        if selected_count > 0 {
            let w = eff.alpha / selected_count as f64;
            for (idx, (row, target)) in unlabeled_rows.iter().zip(&targets).enumerate() {
                let Some(target) = target else { continue };
                let i = *row;
                let z = ScoreVector::new(out.logits[i].clone())?;
                let q_pred = losses::softmax(&z);
                unl_terms.push(losses::weighted_pseudo_loss(
                    target,
                    &q_pred,
                    eff.distance,
                    eff.lambda,
                    eff.da_weight,
                    cfg.log_floor,
                )?);
                if want_grads {
                    let gz = losses::weighted_grad_prediction_scores(
                        target,
                        &z,
                        eff.distance,
                        eff.da_weight,
                        cfg.log_floor,
                    )?;
                    for (slot, gi) in dz[i].iter_mut().zip(gz) {
                        *slot += w * gi;
                    }
                    if soft_targets && eff.grad_through_labels {
                        let s = &score_rows[idx];
                        let mut gs = losses::weighted_grad_scores(
                            s,
                            &q_pred,
                            eff.distance,
                            eff.lambda,
                            eff.da_weight,
                            cfg.log_floor,
                        )?;
                        for g in &mut gs {
                            *g *= w;
                        }
                        let gu = model::cosine_scores_backward(
                            bank,
                            &out.projected[i],
                            cfg.temperature,
                            &gs,
                        )?;
                        for (slot, gi) in du[i].iter_mut().zip(gu) {
                            *slot += gi;
                        }
                    }
                }
            }
        }
    }

    let (supervised_loss, unlabeled_loss, total) = combine_terms(&sup_terms, &unl_terms, eff.alpha);
    let diagnostics = Diagnostics {
        total,
        supervised_loss,
        unlabeled_loss,
        labeled_count: labeled_rows.len(),
        unlabeled_count: unlabeled_rows.len(),
        selected_count,
        mean_pseudo_entropy: mean_entropy,
        empty_labeled_warning: labeled_rows.is_empty(),
    };
    if !total.is_finite() {
        return Err(TrainError::NonFiniteLoss(Box::new(diagnostics)));
    }
    let grads = match trace {
        Some(trace) => Some(model::model_backward(
            params,
            spec,
            trace,
            &prepared.neighbors,
            &dz,
            &du,
        )?),
        None => None,
    };
    Ok((diagnostics, grads))
}

/// Objective value over `chunk` with the bank held frozen.
pub fn total_loss(
    prepared: &PreparedScene,
    chunk: &[usize],
    params: &ModelParams,
    spec: &ModelSpec,
    bank: &PrototypeBank,
    cfg: &TrainConfig,
) -> Result<Diagnostics, TrainError> {
    cfg.validate()?;
    check_scene_fits_spec(prepared, spec)?;
    let (out, _trace) = model::model_forward(params, spec, &prepared.scene.features, &prepared.neighbors)?;
    objective(prepared, chunk, &out, None, params, spec, bank, cfg).map(|(d, _)| d)
}

/// Objective and parameter gradients over `chunk` with the bank frozen.
pub fn loss_and_grads(
    prepared: &PreparedScene,
    chunk: &[usize],
    params: &ModelParams,
    spec: &ModelSpec,
    bank: &PrototypeBank,
    cfg: &TrainConfig,
) -> Result<(Diagnostics, ModelParams), TrainError> {
    cfg.validate()?;
    check_scene_fits_spec(prepared, spec)?;
    let (out, trace) = model::model_forward(params, spec, &prepared.scene.features, &prepared.neighbors)?;
    let (diag, grads) = objective(prepared, chunk, &out, Some(&trace), params, spec, bank, cfg)?;
    Ok((diag, grads.expect("gradients requested")))
}

/// Per-class running sums of labeled projected features, pooled across an
/// epoch when prototypes update per epoch.
#[derive(Debug, Clone)]
pub(crate) struct ClassSums {
    sums: Vec<Vec<f64>>,
    counts: Vec<usize>,
}

impl ClassSums {
    fn new(num_classes: usize, dim: usize) -> Self {
        ClassSums {
            sums: vec![vec![0.0; dim]; num_classes],
            counts: vec![0; num_classes],
        }
    }

    fn add(&mut self, class: usize, feature: &[f64]) {
        for (a, &v) in self.sums[class].iter_mut().zip(feature) {
            *a += v;
        }
        self.counts[class] += 1;
    }

    fn merge(&mut self, other: &ClassSums) {
        for (class, other_sum) in other.sums.iter().enumerate() {
            for (a, &v) in self.sums[class].iter_mut().zip(other_sum) {
                *a += v;
            }
            self.counts[class] += other.counts[class];
        }
    }

    fn means(&self) -> Vec<Option<Vec<f64>>> {
        self.sums
            .iter()
            .zip(&self.counts)
            .map(|(sum, &count)| {
                (count > 0).then(|| sum.iter().map(|v| v / count as f64).collect())
            })
            .collect()
    }

    fn is_empty(&self) -> bool {
        self.counts.iter().all(|&c| c == 0)
    }
}

/// Result of one optimization step.
#[derive(Debug, Clone)]
pub struct StepOutcome {
    pub diagnostics: Diagnostics,
    /// Global gradient norm before clipping.
    pub grad_norm: f64,
    pub clipped: bool,
    pub(crate) labeled_sums: Option<ClassSums>,
}

/// One optimization step over `chunk`: forward, bank update from the chunk's
/// labeled projected features, pseudo-labels from the frozen bank, loss,
/// backward through both branches, global-norm clip, SGD-with-momentum
/// update at rate `lr`.
pub fn train_step(
    prepared: &PreparedScene,
    chunk: &[usize],
    state: &mut TrainState,
    cfg: &TrainConfig,
    lr: f64,
) -> Result<StepOutcome, TrainError> {
    check_scene_fits_spec(prepared, &state.spec)?;
    let (out, trace) = model::model_forward(
        &state.params,
        &state.spec,
        &prepared.scene.features,
        &prepared.neighbors,
    )?;

    // Fold labeled projected features into the bank (out of gradient) —
    // immediately for per-step updates, or handed to the epoch pool.
    let k = state.spec.num_classes();
    let mut sums = ClassSums::new(k, state.spec.proj_output_dim());
    for &i in chunk {
        if prepared.is_labeled(i) {
            let feature = if cfg.normalize_features {
                l2_normalized(&out.projected[i])?
            } else {
                out.projected[i].clone()
            };
            sums.add(prepared.scene.gt_labels[i], &feature);
        }
    }
    let labeled_sums = match cfg.proto_update {
        ProtoUpdate::PerStep => {
            pseudo::momentum_update(&mut state.bank, &sums.means())?;
            None
        }
        ProtoUpdate::PerEpoch => Some(sums),
    };

    let (diagnostics, grads) = objective(
        prepared,
        chunk,
        &out,
        Some(&trace),
        &state.params,
        &state.spec,
        &state.bank,
        cfg,
    )?;
    let mut grads = grads.expect("gradients requested");

    let grad_norm = grads.global_norm();
    let clipped = grad_norm > cfg.clip_norm;
    if clipped {
        grads.scale(cfg.clip_norm / grad_norm);
    }

    let TrainState {
        params, velocity, ..
    } = state;
    velocity.zip_mut(&grads, |v, g| *v = cfg.sgd_momentum * *v + g);
    params.zip_mut(velocity, |p, v| *p -= lr * v);

    Ok(StepOutcome {
        diagnostics,
        grad_norm,
        clipped,
        labeled_sums,
    })
}

/// One line of the metrics log; serialized as JSON, one record per line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// 1-based count of completed epochs.
    pub epoch: usize,
    pub train_loss: f64,
    pub supervised_loss: f64,
    pub unlabeled_loss: f64,
    /// Point-weighted mean entropy of dense pseudo-labels over every
    /// unlabeled training point visited this epoch; `null` during warm-up
    /// and in modes that never read pseudo-labels.
    pub mean_pseudo_entropy: Option<f64>,
    pub val_miou: Option<f64>,
    pub val_oa: Option<f64>,
    pub lr: f64,
    pub grad_norm: f64,
}

/// Render records in the line-delimited log format.
pub fn records_to_jsonl(records: &[EpochRecord]) -> String {
    let mut out = String::new();
    for record in records {
        out.push_str(&serde_json::to_string(record).expect("epoch records are plain data"));
        out.push('\n');
    }
    out
}

fn shuffle(values: &mut [usize], rng: &mut ChaCha8Rng) {
    for i in (1..values.len()).rev() {
        let j = rng.gen_range(0..=i);
        values.swap(i, j);
    }
}

/// Run training from `state.epoch` up to `until` (capped at `cfg.epochs`),
/// mutating the state in place and returning one record per completed
/// epoch. Deterministic given the seeded state; resuming a loaded state
/// continues the exact run.
pub fn fit(
    scenes: &[PreparedScene],
    cfg: &TrainConfig,
    state: &mut TrainState,
    val: Option<&PreparedScene>,
    until: Option<usize>,
) -> Result<Vec<EpochRecord>, TrainError> {
    cfg.validate()?;
    if scenes.is_empty() {
        return Err(TrainError::InvalidInput("no training scenes".into()));
    }
    for prepared in scenes.iter().chain(val) {
        check_scene_fits_spec(prepared, &state.spec)?;
        if prepared.knn_k != cfg.knn_k {
            return Err(TrainError::InvalidInput(format!(
                "scene prepared with knn_k {}, config wants {}",
                prepared.knn_k, cfg.knn_k
            )));
        }
    }
    let end = until.unwrap_or(cfg.epochs).min(cfg.epochs);
    let mut records = Vec::new();
    while state.epoch < end {
        let lr = cfg.epoch_lr(state.epoch);
        let mut order: Vec<usize> = (0..scenes.len()).collect();
        shuffle(&mut order, &mut state.rng);

        let mut steps = 0usize;
        let mut total_sum = 0.0;
        let mut sup_sum = 0.0;
        let mut unl_sum = 0.0;
        let mut norm_sum = 0.0;
        let mut entropy_sum = 0.0;
        let mut entropy_points = 0usize;
        let mut epoch_sums: Option<ClassSums> = None;

        for &scene_idx in &order {
            let prepared = &scenes[scene_idx];
            let mut indices: Vec<usize> = (0..prepared.scene.len()).collect();
            shuffle(&mut indices, &mut state.rng);
            for chunk in indices.chunks(cfg.batch_size) {
                let outcome = train_step(prepared, chunk, state, cfg, lr)?;
                steps += 1;
                total_sum += outcome.diagnostics.total;
                sup_sum += outcome.diagnostics.supervised_loss;
                unl_sum += outcome.diagnostics.unlabeled_loss;
                norm_sum += outcome.grad_norm;
                if let Some(h) = outcome.diagnostics.mean_pseudo_entropy {
                    entropy_sum += h * outcome.diagnostics.unlabeled_count as f64;
                    entropy_points += outcome.diagnostics.unlabeled_count;
                }
                if let Some(sums) = outcome.labeled_sums {
                    match &mut epoch_sums {
                        Some(pool) => pool.merge(&sums),
                        None => epoch_sums = Some(sums),
                    }
                }
            }
        }
        if let Some(pool) = epoch_sums {
            if !pool.is_empty() {
                pseudo::momentum_update(&mut state.bank, &pool.means())?;
            }
        }
        state.epoch += 1;

        let (val_miou, val_oa) = match val {
            Some(v) => {
                let report = evaluate(&state.params, &state.spec, &state.bank, v, cfg)?;
                (Some(report.miou), Some(report.oa))
            }
            None => (None, None),
        };
        let n = steps as f64;
        records.push(EpochRecord {
            epoch: state.epoch,
            train_loss: total_sum / n,
            supervised_loss: sup_sum / n,
            unlabeled_loss: unl_sum / n,
            mean_pseudo_entropy: (entropy_points > 0).then(|| entropy_sum / entropy_points as f64),
            val_miou,
            val_oa,
            lr,
            grad_norm: norm_sum / n,
        });
    }
    Ok(records)
}

/// Metrics of the model on one scene: IoU/OA of argmax predictions against
/// ground truth, plus the mean entropy of the bank's pseudo-labels over all
/// points.
pub fn evaluate(
    params: &ModelParams,
    spec: &ModelSpec,
    bank: &PrototypeBank,
    prepared: &PreparedScene,
    cfg: &TrainConfig,
) -> Result<MetricsReport, TrainError> {
    check_scene_fits_spec(prepared, spec)?;
    if !bank.fully_initialized() {
        return Err(TrainError::InvalidInput(
            "cannot evaluate: prototype bank has uninitialized classes".into(),
        ));
    }
    let (out, _) = model::model_forward(params, spec, &prepared.scene.features, &prepared.neighbors)?;
    let mut cm = ConfusionMatrix::new(spec.num_classes())?;
    for (i, row) in out.logits.iter().enumerate() {
        cm.update(prepared.scene.gt_labels[i], argmax(row))?;
    }
    let pseudo = pseudo::pseudo_labels(bank, &out.projected, cfg.temperature)?;
    let entropy = crate::eval::mean_pseudo_entropy(&pseudo)?;
    Ok(cm.metrics(entropy)?)
}
