//! Per-point pseudo-label loss family: `L = lambda * H(p) + D(p, q)` where
//! `p` is the (soft) pseudo-label, `q` the segmentation prediction, and `D`
//! one of four alignment divergences. With `D = KL(p||q)` and `lambda = 1`
//! the loss collapses to the cross-entropy `H(p, q)`.
//!
//! Gradients are taken in score space: `p = softmax(s)` for the pseudo-label
//! branch and `q = softmax(z)` for the prediction branch. Both are produced
//! by one code path — the per-distance `dL/dp` (or `dL/dq`) chained through
//! the softmax Jacobian — so every published closed form and limit row is a
//! specialization, which the tests verify.
//!
//! All information quantities are in nats. Probabilities are clamped at a
//! floor before any logarithm, so gradients near the `KL(p||q)` singularity
//! at vanishing `q` stay large but finite (downstream clipping handles the
//! magnitude). Analytic limit rows that genuinely diverge are reported as
//! signed saturation markers, never raw non-finite floats.

use std::fmt;

/// Default clamp applied to probabilities before logarithms.
pub const DEFAULT_LOG_FLOOR: f64 = 1e-12;

/// Finite magnitude standing in for analytically infinite limit updates.
pub const SATURATION_CAP: f64 = 1e12;

/// Tolerance on the sum-to-one check of [`ProbVector`].
pub const PROB_SUM_TOL: f64 = 1e-9;

/// Tolerance used when checking inputs against a named limit situation.
pub const SITUATION_TOL: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub enum LossError {
    /// Entry set fails the distribution invariants (finiteness, sign, sum).
    InvalidProbability(String),
    /// Score entry is NaN or infinite.
    NonFiniteScore { index: usize },
    /// Paired vectors disagree in length.
    LengthMismatch { left: usize, right: usize },
    /// Configuration field out of range.
    InvalidConfig(String),
    /// A gradient entry came out non-finite despite clamping.
    NonFiniteGradient { index: usize },
    /// Inputs are inconsistent with the named limit situation.
    SituationMismatch(String),
    /// Finite-difference step outside the supported range.
    EpsOutOfRange(f64),
}

impl fmt::Display for LossError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LossError::InvalidProbability(msg) => write!(f, "invalid probability vector: {msg}"),
            LossError::NonFiniteScore { index } => {
                write!(f, "non-finite score at index {index}")
            }
            LossError::LengthMismatch { left, right } => {
                write!(f, "length mismatch: {left} vs {right}")
            }
            LossError::InvalidConfig(msg) => write!(f, "invalid loss config: {msg}"),
            LossError::NonFiniteGradient { index } => {
                write!(f, "non-finite gradient at index {index}")
            }
            LossError::SituationMismatch(msg) => write!(f, "situation mismatch: {msg}"),
            LossError::EpsOutOfRange(eps) => {
                write!(f, "finite-difference step {eps} outside [1e-8, 1e-3]")
            }
        }
    }
}

impl std::error::Error for LossError {}

/// Discrete distribution over `K >= 2` classes: finite, nonnegative entries
/// summing to one within [`PROB_SUM_TOL`].
#[derive(Debug, Clone, PartialEq)]
pub struct ProbVector(Vec<f64>);

impl ProbVector {
    pub fn new(values: Vec<f64>) -> Result<Self, LossError> {
        if values.len() < 2 {
            return Err(LossError::InvalidProbability(format!(
                "need at least 2 classes, got {}",
                values.len()
            )));
        }
        let mut sum = 0.0;
        for (i, &v) in values.iter().enumerate() {
            if !v.is_finite() {
                return Err(LossError::InvalidProbability(format!(
                    "non-finite entry {v} at index {i}"
                )));
            }
            if v < 0.0 {
                return Err(LossError::InvalidProbability(format!(
                    "negative entry {v} at index {i}"
                )));
            }
            sum += v;
        }
        if (sum - 1.0).abs() > PROB_SUM_TOL {
            return Err(LossError::InvalidProbability(format!(
                "entries sum to {sum}, expected 1"
            )));
        }
        Ok(ProbVector(values))
    }

    /// Uniform distribution over `k` classes.
    pub fn uniform(k: usize) -> Self {
        assert!(k >= 2, "need at least 2 classes, got {k}");
        ProbVector(vec![1.0 / k as f64; k])
    }

    /// Point mass on class `hot`.
    pub fn one_hot(k: usize, hot: usize) -> Self {
        assert!(k >= 2, "need at least 2 classes, got {k}");
        assert!(hot < k, "hot index {hot} out of range for {k} classes");
        let mut v = vec![0.0; k];
        v[hot] = 1.0;
        ProbVector(v)
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Index of the largest entry; ties resolve to the lowest index.
    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for i in 1..self.0.len() {
            if self.0[i] > self.0[best] {
                best = i;
            }
        }
        best
    }

    /// Construct without re-validating; internal use where the invariant
    /// holds by construction (softmax output, mixtures of valid vectors).
    pub(crate) fn from_normalized(values: Vec<f64>) -> Self {
        debug_assert!(values.len() >= 2);
        debug_assert!((values.iter().sum::<f64>() - 1.0).abs() <= PROB_SUM_TOL);
        ProbVector(values)
    }
}

/// Unconstrained real score vector over `K >= 2` classes; finite entries.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreVector(Vec<f64>);

impl ScoreVector {
    pub fn new(values: Vec<f64>) -> Result<Self, LossError> {
        if values.len() < 2 {
            return Err(LossError::InvalidProbability(format!(
                "need at least 2 classes, got {}",
                values.len()
            )));
        }
        for (i, &v) in values.iter().enumerate() {
            if !v.is_finite() {
                return Err(LossError::NonFiniteScore { index: i });
            }
        }
        Ok(ScoreVector(values))
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Alignment divergence `D(p, q)` between pseudo-label and prediction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Distance {
    /// `KL(p || q)`
    #[serde(rename = "klpq")]
    KlPq,
    /// `KL(q || p)`
    #[serde(rename = "klqp")]
    KlQp,
    /// Jensen-Shannon divergence
    Js,
    /// Half squared Euclidean distance
    Mse,
}

impl Distance {
    pub const ALL: [Distance; 4] = [Distance::KlPq, Distance::KlQp, Distance::Js, Distance::Mse];

    pub fn name(&self) -> &'static str {
        match self {
            Distance::KlPq => "klpq",
            Distance::KlQp => "klqp",
            Distance::Js => "js",
            Distance::Mse => "mse",
        }
    }
}

impl fmt::Display for Distance {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Loss configuration: divergence kind, entropy weight, log clamp.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct LossConfig {
    pub distance: Distance,
    pub lambda: f64,
    pub log_floor: f64,
}

impl LossConfig {
    pub fn new(distance: Distance, lambda: f64) -> Result<Self, LossError> {
        Self::with_log_floor(distance, lambda, DEFAULT_LOG_FLOOR)
    }

    pub fn with_log_floor(
        distance: Distance,
        lambda: f64,
        log_floor: f64,
    ) -> Result<Self, LossError> {
        let cfg = LossConfig {
            distance,
            lambda,
            log_floor,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), LossError> {
        if !self.lambda.is_finite() || self.lambda < 0.0 {
            return Err(LossError::InvalidConfig(format!(
                "lambda must be a finite nonnegative real, got {}",
                self.lambda
            )));
        }
        if !(self.log_floor > 0.0 && self.log_floor <= 1e-6) {
            return Err(LossError::InvalidConfig(format!(
                "log_floor must lie in (0, 1e-6], got {}",
                self.log_floor
            )));
        }
        Ok(())
    }
}

/// Numerically stable softmax (max-subtracted).
pub fn softmax(scores: &ScoreVector) -> ProbVector {
    let s = scores.values();
    let max = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = s.iter().map(|&v| (v - max).exp()).collect();
    let sum: f64 = out.iter().sum();
    for v in &mut out {
        *v /= sum;
    }
    ProbVector::from_normalized(out)
}

/// Shannon entropy in nats, with `0 ln 0 = 0`.
pub fn entropy(p: &ProbVector) -> f64 {
    let mut h = 0.0;
    for &v in p.values() {
        if v > 0.0 {
            h -= v * v.ln();
        }
    }
    h
}

fn check_len(p: &ProbVector, q: &ProbVector) -> Result<(), LossError> {
    if p.len() != q.len() {
        return Err(LossError::LengthMismatch {
            left: p.len(),
            right: q.len(),
        });
    }
    Ok(())
}

/// Cross-entropy `H(p, q) = -sum_i p_i ln q_i` in nats, `q` clamped at
/// [`DEFAULT_LOG_FLOOR`] before the logarithm.
pub fn cross_entropy(p: &ProbVector, q: &ProbVector) -> Result<f64, LossError> {
    check_len(p, q)?;
    let mut ce = 0.0;
    for (&pi, &qi) in p.values().iter().zip(q.values()) {
        if pi > 0.0 {
            ce -= pi * qi.max(DEFAULT_LOG_FLOOR).ln();
        }
    }
    Ok(ce)
}

fn divergence_with_floor(
    p: &ProbVector,
    q: &ProbVector,
    kind: Distance,
    floor: f64,
) -> Result<f64, LossError> {
    check_len(p, q)?;
    let pv = p.values();
    let qv = q.values();
    let d = match kind {
        Distance::KlPq => {
            let mut d = 0.0;
            for (&pi, &qi) in pv.iter().zip(qv) {
                if pi > 0.0 {
                    d += pi * (pi.ln() - qi.max(floor).ln());
                }
            }
            d
        }
        Distance::KlQp => {
            let mut d = 0.0;
            for (&pi, &qi) in pv.iter().zip(qv) {
                if qi > 0.0 {
                    d += qi * (qi.ln() - pi.max(floor).ln());
                }
            }
            d
        }
        Distance::Js => {
            let m: Vec<f64> = pv.iter().zip(qv).map(|(&a, &b)| 0.5 * (a + b)).collect();
            let hm = entropy(&ProbVector::from_normalized(m));
            hm - 0.5 * entropy(p) - 0.5 * entropy(q)
        }
        Distance::Mse => {
            0.5 * pv
                .iter()
                .zip(qv)
                .map(|(&a, &b)| (a - b) * (a - b))
                .sum::<f64>()
        }
    };
    // Mathematically nonnegative; rounding can dip a hair below zero at p ~= q.
    Ok(d.max(0.0))
}

/// Alignment divergence `D(p, q) >= 0`, zero iff `p = q`. Logs clamped at
/// [`DEFAULT_LOG_FLOOR`].
pub fn divergence(p: &ProbVector, q: &ProbVector, kind: Distance) -> Result<f64, LossError> {
    divergence_with_floor(p, q, kind, DEFAULT_LOG_FLOOR)
}

/// `lambda * H(p) + da_weight * D(p, q)`. The weighted form is the single
/// code path shared by the full loss and the training-mode algebra
/// (entropy-only and alignment-only modes zero one of the weights).
pub(crate) fn weighted_pseudo_loss(
    p: &ProbVector,
    q: &ProbVector,
    kind: Distance,
    lambda: f64,
    da_weight: f64,
    floor: f64,
) -> Result<f64, LossError> {
    Ok(lambda * entropy(p) + da_weight * divergence_with_floor(p, q, kind, floor)?)
}

/// Scalar pseudo-label loss `L = lambda * H(p) + D(p, q)`.
///
/// With `Distance::KlPq` and `lambda = 1` this equals `cross_entropy(p, q)`.
pub fn pseudo_loss(p: &ProbVector, q: &ProbVector, cfg: &LossConfig) -> Result<f64, LossError> {
    cfg.validate()?;
    weighted_pseudo_loss(p, q, cfg.distance, cfg.lambda, 1.0, cfg.log_floor)
}

/// `g_i = p_i (v_i - sum_j p_j v_j)`: pullback of `dL/dp` through softmax.
fn softmax_vjp(p: &[f64], v: &[f64]) -> Vec<f64> {
    let dot: f64 = p.iter().zip(v).map(|(&a, &b)| a * b).sum();
    p.iter().zip(v).map(|(&pi, &vi)| pi * (vi - dot)).collect()
}

fn check_grad_finite(g: Vec<f64>) -> Result<Vec<f64>, LossError> {
    for (i, &v) in g.iter().enumerate() {
        if !v.is_finite() {
            return Err(LossError::NonFiniteGradient { index: i });
        }
    }
    Ok(g)
}

/// `dL/dp_i` of `lambda * H(p) + da_weight * D(p, q)` with clamped logs.
fn weighted_dloss_dp(
    p: &[f64],
    q: &[f64],
    kind: Distance,
    lambda: f64,
    da_weight: f64,
    floor: f64,
) -> Vec<f64> {
    let k = p.len();
    let mut v = vec![0.0; k];
    for i in 0..k {
        let pf = p[i].max(floor);
        let mut d = lambda * (-pf.ln() - 1.0);
        d += da_weight
            * match kind {
                Distance::KlPq => pf.ln() + 1.0 - q[i].max(floor).ln(),
                Distance::KlQp => -q[i] / pf,
                Distance::Js => {
                    let m = 0.5 * (p[i] + q[i]);
                    0.5 * (pf.ln() - m.max(floor).ln())
                }
                Distance::Mse => p[i] - q[i],
            };
        v[i] = d;
    }
    v
}

pub(crate) fn weighted_grad_scores(
    s: &ScoreVector,
    q: &ProbVector,
    kind: Distance,
    lambda: f64,
    da_weight: f64,
    floor: f64,
) -> Result<Vec<f64>, LossError> {
    if s.len() != q.len() {
        return Err(LossError::LengthMismatch {
            left: s.len(),
            right: q.len(),
        });
    }
    let p = softmax(s);
    let v = weighted_dloss_dp(p.values(), q.values(), kind, lambda, da_weight, floor);
    check_grad_finite(softmax_vjp(p.values(), &v))
}

/// Analytic gradient `g_i = dL/ds_i` of the pseudo-label branch, where
/// `p = softmax(s)` and `q` is held constant. Entries sum to zero. Callers
/// apply `delta = -g` for a descent update.
pub fn pseudo_loss_grad_scores(
    s: &ScoreVector,
    q: &ProbVector,
    cfg: &LossConfig,
) -> Result<Vec<f64>, LossError> {
    cfg.validate()?;
    weighted_grad_scores(s, q, cfg.distance, cfg.lambda, 1.0, cfg.log_floor)
}

pub(crate) fn weighted_grad_prediction_scores(
    p: &ProbVector,
    z: &ScoreVector,
    kind: Distance,
    da_weight: f64,
    floor: f64,
) -> Result<Vec<f64>, LossError> {
    if p.len() != z.len() {
        return Err(LossError::LengthMismatch {
            left: p.len(),
            right: z.len(),
        });
    }
    let q = softmax(z);
    let pv = p.values();
    let qv = q.values();
    let k = pv.len();
    // dL/dq_j; the entropy term is constant in q.
    let mut v = vec![0.0; k];
    for j in 0..k {
        let qf = qv[j].max(floor);
        v[j] = da_weight
            * match kind {
                Distance::KlPq => -pv[j] / qf,
                Distance::KlQp => qf.ln() + 1.0 - pv[j].max(floor).ln(),
                Distance::Js => {
                    let m = 0.5 * (pv[j] + qv[j]);
                    0.5 * (qf.ln() - m.max(floor).ln())
                }
                Distance::Mse => qv[j] - pv[j],
            };
    }
    check_grad_finite(softmax_vjp(qv, &v))
}

/// Analytic gradient `dL/dz_i` of the prediction branch, where
/// `q = softmax(z)` and the pseudo-label `p` is held constant.
///
/// For `Distance::KlPq` this is `q - p` for every `lambda`.
pub fn grad_wrt_prediction_scores(
    p: &ProbVector,
    z: &ScoreVector,
    cfg: &LossConfig,
) -> Result<Vec<f64>, LossError> {
    cfg.validate()?;
    weighted_grad_prediction_scores(p, z, cfg.distance, 1.0, cfg.log_floor)
}

/// Central-difference gradient of `f` at `s` with step `eps in [1e-8, 1e-3]`.
pub fn finite_diff_grad<F>(f: F, s: &ScoreVector, eps: f64) -> Result<Vec<f64>, LossError>
where
    F: Fn(&ScoreVector) -> f64,
{
    if !(1e-8..=1e-3).contains(&eps) {
        return Err(LossError::EpsOutOfRange(eps));
    }
    let mut point = s.clone();
    let mut grad = vec![0.0; s.len()];
    for i in 0..s.len() {
        let orig = point.0[i];
        point.0[i] = orig + eps;
        let plus = f(&point);
        point.0[i] = orig - eps;
        let minus = f(&point);
        point.0[i] = orig;
        grad[i] = (plus - minus) / (2.0 * eps);
    }
    Ok(grad)
}

/// Named limit situation for the closed-form update rows.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Situation {
    /// Pseudo-label collapses to a point mass (`p -> one_hot(k)`).
    POneHot,
    /// Prediction is exactly uniform.
    QUniform,
    /// Prediction one-hot, evaluated per coordinate as if hot at that
    /// coordinate.
    QOneHotMatch,
    /// Prediction one-hot at `argmax(q)`; the full limit update vector.
    QOneHotOther,
}

/// One entry of a limit-case update: a finite value or a signed saturation
/// marker standing in for an analytically infinite update.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LimitValue {
    Finite(f64),
    SaturatedPos,
    SaturatedNeg,
}

impl LimitValue {
    /// Collapse to `f64`, mapping saturations to `+/-`[`SATURATION_CAP`],
    /// so downstream arithmetic stays total.
    pub fn as_f64(&self) -> f64 {
        match self {
            LimitValue::Finite(v) => *v,
            LimitValue::SaturatedPos => SATURATION_CAP,
            LimitValue::SaturatedNeg => -SATURATION_CAP,
        }
    }

    pub fn is_saturated(&self) -> bool {
        !matches!(self, LimitValue::Finite(_))
    }
}

/// `t_i = p_i (ln p_i - sum_j p_j ln p_j)`: the recurring entropy-gradient
/// term of the update rows.
fn entropy_terms(p: &[f64], floor: f64) -> Vec<f64> {
    let mean_log: f64 = p.iter().map(|&pi| pi * pi.max(floor).ln()).sum();
    p.iter()
        .map(|&pi| pi * (pi.max(floor).ln() - mean_log))
        .collect()
}

/// Closed-form score update `delta = -g` in a named limit situation.
///
/// - `POneHot`: the limit as `max(p) -> 1`; zero for `KlPq`/`Js`/`Mse`,
///   `q - one_hot(argmax p)` for `KlQp`.
/// - `QUniform`: the update at exactly uniform `q`, evaluated at `p`.
/// - `QOneHotMatch`: entry `i` is the limit of `delta_i` as `q -> one_hot(i)`
///   (a per-coordinate family; `q` must be one-hot but its hot index does not
///   enter the formula). For `KlPq` every entry saturates to `+inf`.
/// - `QOneHotOther`: the limit of the full update vector as
///   `q -> one_hot(argmax q)`: the hot coordinate carries the match-row
///   value, all others the other-row value. For `KlPq` the hot entry
///   saturates to `+inf` and the rest to `-inf`.
///
/// Inputs must be consistent with the situation within [`SITUATION_TOL`].
pub fn limit_case_update(
    situation: Situation,
    p: &ProbVector,
    q: &ProbVector,
    cfg: &LossConfig,
) -> Result<Vec<LimitValue>, LossError> {
    cfg.validate()?;
    check_len(p, q)?;
    let k = p.len();
    let kf = k as f64;
    let pv = p.values();
    let lam = cfg.lambda;
    let floor = cfg.log_floor;
    let t = entropy_terms(pv, floor);
    let fin = |v: f64| LimitValue::Finite(v);

    match situation {
        Situation::POneHot => {
            let hot = p.argmax();
            if pv[hot] < 1.0 - SITUATION_TOL {
                return Err(LossError::SituationMismatch(format!(
                    "POneHot requires max(p) >= {}, got {}",
                    1.0 - SITUATION_TOL,
                    pv[hot]
                )));
            }
            Ok((0..k)
                .map(|i| match cfg.distance {
                    Distance::KlQp => fin(q.values()[i] - if i == hot { 1.0 } else { 0.0 }),
                    _ => fin(0.0),
                })
                .collect())
        }
        Situation::QUniform => {
            for (i, &qi) in q.values().iter().enumerate() {
                if (qi - 1.0 / kf).abs() > SITUATION_TOL {
                    return Err(LossError::SituationMismatch(format!(
                        "QUniform requires q_i = 1/{k}, got {qi} at index {i}"
                    )));
                }
            }
            Ok((0..k)
                .map(|i| match cfg.distance {
                    Distance::KlPq => fin((lam - 1.0) * t[i]),
                    Distance::KlQp => fin(1.0 / kf - pv[i] + lam * t[i]),
                    Distance::Js => {
                        let mut acc = 0.0;
                        for j in 0..k {
                            if j != i {
                                acc += pv[j]
                                    * (0.5
                                        * ((kf * pv[i].max(floor) + 1.0)
                                            / (kf * pv[j].max(floor) + 1.0))
                                            .ln()
                                        + (lam - 0.5)
                                            * (pv[i].max(floor) / pv[j].max(floor)).ln());
                            }
                        }
                        fin(pv[i] * acc)
                    }
                    Distance::Mse => {
                        let sumsq: f64 = pv.iter().map(|&x| x * x).sum();
                        fin(-pv[i] * pv[i] + pv[i] * sumsq + lam * t[i])
                    }
                })
                .collect())
        }
        Situation::QOneHotMatch | Situation::QOneHotOther => {
            let hot = q.argmax();
            if q.values()[hot] < 1.0 - SITUATION_TOL {
                return Err(LossError::SituationMismatch(format!(
                    "one-hot q required: max(q) = {} below {}",
                    q.values()[hot],
                    1.0 - SITUATION_TOL
                )));
            }
            let sumsq: f64 = pv.iter().map(|&x| x * x).sum();
            let match_row = |i: usize| -> LimitValue {
                match cfg.distance {
                    Distance::KlPq => LimitValue::SaturatedPos,
                    Distance::KlQp => fin(1.0 - pv[i] + lam * t[i]),
                    Distance::Js => {
                        let mut acc = 0.0;
                        for j in 0..k {
                            if j != i {
                                acc += pv[j]
                                    * (0.5 * ((pv[i].max(floor) + 1.0) / pv[j].max(floor)).ln()
                                        + (lam - 0.5)
                                            * (pv[i].max(floor) / pv[j].max(floor)).ln());
                            }
                        }
                        fin(pv[i] * acc)
                    }
                    Distance::Mse => {
                        fin(-pv[i] * pv[i] + pv[i] * (1.0 - pv[i]) + pv[i] * sumsq + lam * t[i])
                    }
                }
            };
            if situation == Situation::QOneHotMatch {
                return Ok((0..k).map(match_row).collect());
            }
            Ok((0..k)
                .map(|i| {
                    if i == hot {
                        return match_row(i);
                    }
                    match cfg.distance {
                        Distance::KlPq => LimitValue::SaturatedNeg,
                        Distance::KlQp => fin(-pv[i] + lam * t[i]),
                        Distance::Js => {
                            let mut acc = 0.0;
                            for j in 0..k {
                                if j != i {
                                    let denom =
                                        pv[j].max(floor) + if j == hot { 1.0 } else { 0.0 };
                                    acc += pv[j]
                                        * (0.5 * (pv[i].max(floor) / denom).ln()
                                            + (lam - 0.5)
                                                * (pv[i].max(floor) / pv[j].max(floor)).ln());
                                }
                            }
                            fin(pv[i] * acc)
                        }
                        Distance::Mse => {
                            fin(-pv[i] * pv[i] - pv[i] * pv[hot] + pv[i] * sumsq + lam * t[i])
                        }
                    }
                })
                .collect())
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn pv(v: &[f64]) -> ProbVector {
        ProbVector::new(v.to_vec()).unwrap()
    }

    fn sv(v: &[f64]) -> ScoreVector {
        ScoreVector::new(v.to_vec()).unwrap()
    }

    fn cfg(d: Distance, lambda: f64) -> LossConfig {
        LossConfig::new(d, lambda).unwrap()
    }

    /// Random interior distribution via softmax of bounded scores.
    fn random_prob(rng: &mut ChaCha8Rng, k: usize) -> ProbVector {
        let s: Vec<f64> = (0..k).map(|_| rng.gen_range(-2.0..2.0)).collect();
        softmax(&sv(&s))
    }

    fn random_scores(rng: &mut ChaCha8Rng, k: usize) -> ScoreVector {
        sv(&(0..k).map(|_| rng.gen_range(-3.0..3.0)).collect::<Vec<_>>())
    }

    fn max_abs(v: &[f64]) -> f64 {
        v.iter().fold(0.0_f64, |m, &x| m.max(x.abs()))
    }

    /// Scale-relative max deviation between two gradient vectors.
    fn rel_err(a: &[f64], b: &[f64]) -> f64 {
        let scale = max_abs(a).max(max_abs(b));
        if scale < 1e-9 {
            return 0.0;
        }
        a.iter()
            .zip(b)
            .fold(0.0_f64, |m, (&x, &y)| m.max((x - y).abs()))
            / scale
    }

    #[test]
    fn softmax_frozen_values() {
        let p = softmax(&sv(&[1.0, 2.0, 3.0]));
        let expected = [
            0.09003057317038046,
            0.24472847105479764,
            0.6652409557748219,
        ];
        for (a, e) in p.values().iter().zip(expected) {
            assert_relative_eq!(*a, e, epsilon = 1e-12);
        }
    }

    #[test]
    fn softmax_handles_large_scores() {
        let p = softmax(&sv(&[1000.0, 1000.0, 999.0]));
        assert!(p.values().iter().all(|v| v.is_finite()));
        assert_relative_eq!(p.values().iter().sum::<f64>(), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn entropy_frozen_values() {
        assert_relative_eq!(entropy(&pv(&[0.7, 0.3])), 0.6108643020548935, epsilon = 1e-12);
        assert_eq!(entropy(&ProbVector::one_hot(5, 2)), 0.0);
        assert_relative_eq!(
            entropy(&ProbVector::uniform(13)),
            2.5649493574615367,
            epsilon = 1e-12
        );
        assert_relative_eq!(entropy(&ProbVector::uniform(13)), 13.0_f64.ln(), epsilon = 1e-15);
    }

    #[test]
    fn cross_entropy_frozen_value() {
        let ce = cross_entropy(&pv(&[0.7, 0.3]), &pv(&[0.6, 0.4])).unwrap();
        assert_relative_eq!(ce, 0.63246515619844, epsilon = 1e-12);
    }

    #[test]
    fn divergence_frozen_values() {
        let p = pv(&[0.7, 0.3]);
        let q = pv(&[0.6, 0.4]);
        assert_relative_eq!(
            divergence(&p, &q, Distance::KlPq).unwrap(),
            0.02160085414354651,
            epsilon = 1e-12
        );
        assert_relative_eq!(
            divergence(&p, &q, Distance::KlQp).unwrap(),
            0.022582421084357387,
            epsilon = 1e-12
        );
        assert_relative_eq!(
            divergence(&p, &q, Distance::Js).unwrap(),
            0.005508654502557553,
            epsilon = 1e-12
        );
        assert_relative_eq!(divergence(&p, &q, Distance::Mse).unwrap(), 0.01, epsilon = 1e-15);
    }

    #[test]
    fn pseudo_loss_lambda2_frozen_value() {
        let l = pseudo_loss(&pv(&[0.7, 0.3]), &pv(&[0.6, 0.4]), &cfg(Distance::KlPq, 2.0))
            .unwrap();
        assert_relative_eq!(l, 1.2433294582533336, epsilon = 1e-12);
    }

    #[test]
    fn pseudo_loss_collapses_to_cross_entropy() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let c = cfg(Distance::KlPq, 1.0);
        for _ in 0..200 {
            let k = rng.gen_range(2..=13);
            let p = random_prob(&mut rng, k);
            let q = random_prob(&mut rng, k);
            let lhs = pseudo_loss(&p, &q, &c).unwrap();
            let rhs = cross_entropy(&p, &q).unwrap();
            assert_relative_eq!(lhs, rhs, epsilon = 1e-12, max_relative = 1e-12);
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for dist in Distance::ALL {
            for lambda in [0.0, 1.0, 2.0] {
                let c = cfg(dist, lambda);
                for &k in &[2usize, 5, 13] {
                    for _ in 0..10 {
                        let s = random_scores(&mut rng, k);
                        let q = random_prob(&mut rng, k);
                        let g = pseudo_loss_grad_scores(&s, &q, &c).unwrap();
                        let fd = finite_diff_grad(
                            |x| pseudo_loss(&softmax(x), &q, &c).unwrap(),
                            &s,
                            1e-5,
                        )
                        .unwrap();
                        assert!(
                            rel_err(&g, &fd) < 1e-6,
                            "{dist} lambda={lambda} K={k}: rel err {}",
                            rel_err(&g, &fd)
                        );
                    }
                }
            }
        }
    }

    #[test]
    fn prediction_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for dist in Distance::ALL {
            for lambda in [0.0, 1.0, 2.0] {
                let c = cfg(dist, lambda);
                for &k in &[2usize, 5, 13] {
                    for _ in 0..10 {
                        let z = random_scores(&mut rng, k);
                        let p = random_prob(&mut rng, k);
                        let g = grad_wrt_prediction_scores(&p, &z, &c).unwrap();
                        let fd = finite_diff_grad(
                            |x| pseudo_loss(&p, &softmax(x), &c).unwrap(),
                            &z,
                            1e-5,
                        )
                        .unwrap();
                        assert!(
                            rel_err(&g, &fd) < 1e-6,
                            "{dist} lambda={lambda} K={k}: rel err {}",
                            rel_err(&g, &fd)
                        );
                    }
                }
            }
        }
    }

    #[test]
    fn klpq_prediction_gradient_is_q_minus_p() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for lambda in [0.0, 1.0, 2.0] {
            let c = cfg(Distance::KlPq, lambda);
            for _ in 0..50 {
                let k = rng.gen_range(2..=13);
                let z = random_scores(&mut rng, k);
                let p = random_prob(&mut rng, k);
                let q = softmax(&z);
                let g = grad_wrt_prediction_scores(&p, &z, &c).unwrap();
                for i in 0..k {
                    assert_relative_eq!(
                        g[i],
                        q.values()[i] - p.values()[i],
                        epsilon = 1e-12,
                        max_relative = 1e-9
                    );
                }
            }
        }
    }

    #[test]
    fn klpq_prediction_gradient_onehot_uniform_example() {
        // p one-hot on the second class, q = softmax(0, 0) uniform: q - p.
        let p = ProbVector::one_hot(2, 1);
        let z = sv(&[0.0, 0.0]);
        let g = grad_wrt_prediction_scores(&p, &z, &cfg(Distance::KlPq, 1.0)).unwrap();
        assert_relative_eq!(g[0], 0.5, epsilon = 1e-12);
        assert_relative_eq!(g[1], -0.5, epsilon = 1e-12);
    }

    #[test]
    fn klpq_lambda1_uniform_q_gradient_vanishes() {
        // Entropy regularization exactly cancels the alignment pull when the
        // prediction carries no information.
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let c = cfg(Distance::KlPq, 1.0);
        for &k in &[2usize, 5, 13] {
            for _ in 0..20 {
                let s = random_scores(&mut rng, k);
                let q = ProbVector::uniform(k);
                let g = pseudo_loss_grad_scores(&s, &q, &c).unwrap();
                assert!(max_abs(&g) < 1e-9, "K={k}: residual {}", max_abs(&g));
            }
        }
    }

    #[test]
    fn near_uniform_q_gradient_shrinks_linearly() {
        // |g|_inf <= 4 K delta for q within delta of uniform (KlPq, lambda=1):
        // the plateau around the uniform prediction is approached smoothly.
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let c = cfg(Distance::KlPq, 1.0);
        for &k in &[2usize, 5, 13] {
            let bound_scale = 4.0 * k as f64;
            for _ in 0..10 {
                let s = random_scores(&mut rng, k);
                for &delta in &[1e-2, 1e-3, 1e-4, 1e-5, 1e-6] {
                    let mut qv = vec![1.0 / k as f64; k];
                    // Zero-sum perturbation with max deviation delta.
                    qv[0] += delta;
                    qv[1] -= delta;
                    let q = ProbVector::new(qv).unwrap();
                    let g = pseudo_loss_grad_scores(&s, &q, &c).unwrap();
                    assert!(
                        max_abs(&g) <= bound_scale * delta,
                        "K={k} delta={delta}: |g|={} bound={}",
                        max_abs(&g),
                        bound_scale * delta
                    );
                }
            }
        }
    }

    #[test]
    fn confident_pseudo_label_freezes_klpq_js_mse() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        for dist in [Distance::KlPq, Distance::Js, Distance::Mse] {
            for lambda in [0.0, 1.0, 2.0] {
                let c = cfg(dist, lambda);
                for &k in &[2usize, 5, 13] {
                    let hot = rng.gen_range(0..k);
                    // max(p) = 1 - 1e-6 via direct construction.
                    let eps = 1e-6;
                    let mut p = vec![eps / (k - 1) as f64; k];
                    p[hot] = 1.0 - eps;
                    // Recover scores with softmax(s) = p exactly enough.
                    let s = sv(&p.iter().map(|&x| x.ln()).collect::<Vec<_>>());
                    let q = random_prob(&mut rng, k);
                    let g = pseudo_loss_grad_scores(&s, &q, &c).unwrap();
                    let norm = g.iter().map(|x| x * x).sum::<f64>().sqrt();
                    assert!(
                        norm < 1e-3,
                        "{dist} lambda={lambda} K={k}: norm {norm}"
                    );
                }
            }
        }
    }

    #[test]
    fn confident_pseudo_label_klqp_limit() {
        // KlQp keeps pulling even at a confident p: delta -> q - one_hot(k).
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        for lambda in [0.0, 1.0, 2.0] {
            let c = cfg(Distance::KlQp, lambda);
            for &k in &[2usize, 5, 13] {
                let hot = rng.gen_range(0..k);
                let eps = 1e-6;
                let mut p = vec![eps / (k - 1) as f64; k];
                p[hot] = 1.0 - eps;
                let s = sv(&p.iter().map(|&x| x.ln()).collect::<Vec<_>>());
                let q = random_prob(&mut rng, k);
                let g = pseudo_loss_grad_scores(&s, &q, &c).unwrap();
                for i in 0..k {
                    let delta = -g[i];
                    let expected = q.values()[i] - if i == hot { 1.0 } else { 0.0 };
                    assert!(
                        (delta - expected).abs() < 1e-4,
                        "lambda={lambda} K={k} i={i}: {delta} vs {expected}"
                    );
                }
            }
        }
    }

    #[test]
    fn limit_rows_match_direct_gradients() {
        // Every closed-form row must be a specialization of the chain-rule
        // gradient evaluated at the limit point (finite kinds).
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        for dist in Distance::ALL {
            for lambda in [0.0, 1.0, 2.0] {
                let c = cfg(dist, lambda);
                for &k in &[2usize, 5, 7] {
                    let p = random_prob(&mut rng, k);
                    let s = sv(&p.values().iter().map(|&x| x.ln()).collect::<Vec<_>>());

                    // QUniform row vs direct gradient at exactly uniform q.
                    let qu = ProbVector::uniform(k);
                    let row = limit_case_update(Situation::QUniform, &p, &qu, &c).unwrap();
                    let g = pseudo_loss_grad_scores(&s, &qu, &c).unwrap();
                    for i in 0..k {
                        assert!(
                            (row[i].as_f64() + g[i]).abs() < 1e-9,
                            "{dist} lambda={lambda} QUniform i={i}"
                        );
                    }

                    // QOneHot rows vs direct gradient at exactly one-hot q
                    // (KlPq saturates there, checked separately).
                    if dist != Distance::KlPq {
                        for hot in 0..k {
                            let qh = ProbVector::one_hot(k, hot);
                            let other =
                                limit_case_update(Situation::QOneHotOther, &p, &qh, &c).unwrap();
                            let match_row =
                                limit_case_update(Situation::QOneHotMatch, &p, &qh, &c).unwrap();
                            let g = pseudo_loss_grad_scores(&s, &qh, &c).unwrap();
                            for i in 0..k {
                                assert!(
                                    (other[i].as_f64() + g[i]).abs() < 1e-9,
                                    "{dist} lambda={lambda} QOneHotOther hot={hot} i={i}: {} vs {}",
                                    other[i].as_f64(),
                                    -g[i]
                                );
                            }
                            assert!((match_row[hot].as_f64() + g[hot]).abs() < 1e-9);
                        }
                    }

                    // POneHot row vs direct gradient at a confident p.
                    let hot = rng.gen_range(0..k);
                    let eps = 1e-9;
                    let mut pc = vec![eps / (k - 1) as f64; k];
                    pc[hot] = 1.0 - eps;
                    let sc = sv(&pc.iter().map(|&x| x.ln()).collect::<Vec<_>>());
                    let q = random_prob(&mut rng, k);
                    let pc = ProbVector::new(pc).unwrap();
                    let row = limit_case_update(Situation::POneHot, &pc, &q, &c).unwrap();
                    let g = pseudo_loss_grad_scores(&sc, &q, &c).unwrap();
                    for i in 0..k {
                        assert!(
                            (row[i].as_f64() + g[i]).abs() < 1e-6,
                            "{dist} lambda={lambda} POneHot i={i}: {} vs {}",
                            row[i].as_f64(),
                            -g[i]
                        );
                    }
                }
            }
        }
    }

    #[test]
    fn limit_uniform_q_klpq_lambda1_is_zero_vector() {
        let mut rng = ChaCha8Rng::seed_from_u64(16);
        let c = cfg(Distance::KlPq, 1.0);
        let p = random_prob(&mut rng, 5);
        let row = limit_case_update(Situation::QUniform, &p, &ProbVector::uniform(5), &c).unwrap();
        for v in row {
            assert_eq!(v, LimitValue::Finite(0.0));
        }
    }

    #[test]
    fn limit_uniform_q_klqp_lambda0_example() {
        let c = cfg(Distance::KlQp, 0.0);
        let p = pv(&[0.7, 0.3]);
        let row = limit_case_update(Situation::QUniform, &p, &ProbVector::uniform(2), &c).unwrap();
        assert_relative_eq!(row[0].as_f64(), -0.2, epsilon = 1e-12);
        assert_relative_eq!(row[1].as_f64(), 0.2, epsilon = 1e-12);
    }

    #[test]
    fn limit_p_onehot_is_zero_for_non_klqp() {
        let q = pv(&[0.2, 0.5, 0.3]);
        let p = ProbVector::one_hot(3, 1);
        for dist in [Distance::KlPq, Distance::Js, Distance::Mse] {
            let row = limit_case_update(Situation::POneHot, &p, &q, &cfg(dist, 1.0)).unwrap();
            assert!(row.iter().all(|v| *v == LimitValue::Finite(0.0)), "{dist}");
        }
        let row = limit_case_update(Situation::POneHot, &p, &q, &cfg(Distance::KlQp, 1.0)).unwrap();
        assert_relative_eq!(row[0].as_f64(), 0.2, epsilon = 1e-12);
        assert_relative_eq!(row[1].as_f64(), -0.5, epsilon = 1e-12);
        assert_relative_eq!(row[2].as_f64(), 0.3, epsilon = 1e-12);
    }

    #[test]
    fn klpq_onehot_q_saturates_with_signs() {
        let p = pv(&[0.25, 0.25, 0.5]);
        let q = ProbVector::one_hot(3, 1);
        let c = cfg(Distance::KlPq, 1.0);
        let m = limit_case_update(Situation::QOneHotMatch, &p, &q, &c).unwrap();
        assert!(m.iter().all(|v| *v == LimitValue::SaturatedPos));
        assert!(m.iter().all(|v| v.as_f64() == SATURATION_CAP));
        let o = limit_case_update(Situation::QOneHotOther, &p, &q, &c).unwrap();
        assert_eq!(o[1], LimitValue::SaturatedPos);
        assert_eq!(o[0], LimitValue::SaturatedNeg);
        assert_eq!(o[2], LimitValue::SaturatedNeg);
        assert!(o[0].as_f64() == -SATURATION_CAP && o[0].is_saturated());
    }

    #[test]
    fn limit_situation_mismatch_errors() {
        let p = pv(&[0.6, 0.4]);
        let q = pv(&[0.6, 0.4]);
        let c = cfg(Distance::KlPq, 1.0);
        for situation in [
            Situation::POneHot,
            Situation::QUniform,
            Situation::QOneHotMatch,
            Situation::QOneHotOther,
        ] {
            let err = limit_case_update(situation, &p, &q, &c).unwrap_err();
            assert!(matches!(err, LossError::SituationMismatch(_)), "{situation:?}");
        }
    }

    #[test]
    fn finite_diff_is_exact_on_linear_functions() {
        let s = sv(&[0.3, -1.2, 2.0]);
        let a = [2.0, -0.5, 1.5];
        let fd = finite_diff_grad(
            |x| x.values().iter().zip(a).map(|(&v, c)| v * c).sum(),
            &s,
            1e-5,
        )
        .unwrap();
        for (f, c) in fd.iter().zip(a) {
            assert_relative_eq!(*f, c, epsilon = 1e-9);
        }
    }

    #[test]
    fn finite_diff_rejects_bad_eps() {
        let s = sv(&[0.0, 1.0]);
        for eps in [0.0, 1e-9, 1e-2, -1e-5, f64::NAN] {
            let err = finite_diff_grad(|_| 0.0, &s, eps).unwrap_err();
            assert!(matches!(err, LossError::EpsOutOfRange(_)));
        }
    }

    #[test]
    fn validation_errors() {
        assert!(matches!(
            ProbVector::new(vec![0.5]),
            Err(LossError::InvalidProbability(_))
        ));
        assert!(matches!(
            ProbVector::new(vec![0.6, 0.6]),
            Err(LossError::InvalidProbability(_))
        ));
        assert!(matches!(
            ProbVector::new(vec![-0.1, 1.1]),
            Err(LossError::InvalidProbability(_))
        ));
        assert!(matches!(
            ScoreVector::new(vec![0.0, f64::NAN]),
            Err(LossError::NonFiniteScore { index: 1 })
        ));
        assert!(matches!(
            LossConfig::new(Distance::Js, -0.5),
            Err(LossError::InvalidConfig(_))
        ));
        assert!(matches!(
            LossConfig::with_log_floor(Distance::Js, 1.0, 0.5),
            Err(LossError::InvalidConfig(_))
        ));
        assert!(matches!(
            cross_entropy(&pv(&[0.5, 0.5]), &ProbVector::uniform(3)),
            Err(LossError::LengthMismatch { left: 2, right: 3 })
        ));
    }

    #[test]
    fn clamped_logs_keep_gradients_finite_near_singularity() {
        // q with a zero entry drives KL(p||q) toward its singularity; the
        // floor turns that into a large finite pull.
        let s = sv(&[0.0, 0.0]);
        let q = ProbVector::one_hot(2, 0);
        let g = pseudo_loss_grad_scores(&s, &q, &cfg(Distance::KlPq, 1.0)).unwrap();
        assert!(g.iter().all(|v| v.is_finite()));
        assert!(max_abs(&g) > 1.0);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn prop_softmax_is_shift_invariant(
            raw in proptest::collection::vec(-30.0_f64..30.0, 2..10),
            shift in -50.0_f64..50.0,
        ) {
            let a = softmax(&sv(&raw));
            let shifted: Vec<f64> = raw.iter().map(|v| v + shift).collect();
            let b = softmax(&sv(&shifted));
            for (x, y) in a.values().iter().zip(b.values()) {
                prop_assert!((x - y).abs() < 1e-12);
            }
        }

        #[test]
        fn prop_softmax_sums_to_one(raw in proptest::collection::vec(-300.0_f64..300.0, 2..10)) {
            let p = softmax(&sv(&raw));
            prop_assert!((p.values().iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert!(p.values().iter().all(|&v| v >= 0.0));
        }

        #[test]
        fn prop_entropy_bounds(raw in proptest::collection::vec(-10.0_f64..10.0, 2..14)) {
            let p = softmax(&sv(&raw));
            let h = entropy(&p);
            prop_assert!(h >= 0.0);
            prop_assert!(h <= (p.len() as f64).ln() + 1e-12);
        }

        #[test]
        fn prop_gibbs_inequality(
            raw_p in proptest::collection::vec(-5.0_f64..5.0, 2..10),
            raw_q in proptest::collection::vec(-5.0_f64..5.0, 2..10),
        ) {
            let k = raw_p.len().min(raw_q.len());
            let p = softmax(&sv(&raw_p[..k]));
            let q = softmax(&sv(&raw_q[..k]));
            prop_assert!(cross_entropy(&p, &q).unwrap() >= entropy(&p) - 1e-12);
        }

        #[test]
        fn prop_divergences_nonnegative_and_zero_at_equality(
            raw in proptest::collection::vec(-5.0_f64..5.0, 2..10),
        ) {
            let p = softmax(&sv(&raw));
            for kind in Distance::ALL {
                let d = divergence(&p, &p, kind).unwrap();
                prop_assert!(d.abs() < 1e-12, "{kind}: d(p,p) = {d}");
            }
        }

        #[test]
        fn prop_divergences_positive_off_equality(
            raw_p in proptest::collection::vec(-4.0_f64..4.0, 3..8),
            raw_q in proptest::collection::vec(-4.0_f64..4.0, 3..8),
        ) {
            let k = raw_p.len().min(raw_q.len());
            let p = softmax(&sv(&raw_p[..k]));
            let q = softmax(&sv(&raw_q[..k]));
            let apart = p
                .values()
                .iter()
                .zip(q.values())
                .any(|(a, b)| (a - b).abs() > 1e-3);
            if apart {
                for kind in Distance::ALL {
                    prop_assert!(divergence(&p, &q, kind).unwrap() > 0.0, "{kind}");
                }
            }
        }

        #[test]
        fn prop_score_gradients_sum_to_zero(
            raw_s in proptest::collection::vec(-4.0_f64..4.0, 2..10),
            raw_q in proptest::collection::vec(-4.0_f64..4.0, 2..10),
            lambda in 0.0_f64..2.0,
        ) {
            let k = raw_s.len().min(raw_q.len());
            let s = sv(&raw_s[..k]);
            let q = softmax(&sv(&raw_q[..k]));
            for kind in Distance::ALL {
                let c = cfg(kind, lambda);
                let g = pseudo_loss_grad_scores(&s, &q, &c).unwrap();
                prop_assert!(g.iter().sum::<f64>().abs() < 1e-9, "{kind}");
                let gz = grad_wrt_prediction_scores(&q, &s, &c).unwrap();
                prop_assert!(gz.iter().sum::<f64>().abs() < 1e-9, "{kind}");
            }
        }
    }
}
