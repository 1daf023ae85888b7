//! Finite-difference verification suites for every analytical gradient in
//! the crate, from the closed-form score-space gradients up through the full
//! objective. Each suite returns per-cell worst-case relative errors so a
//! failure names the exact (distance, lambda, K) combination that broke.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::{gen_blob_scene, mask_labels, WeakSetting};
use crate::losses::{self, Distance, LossConfig, LossError, ProbVector, ScoreVector};
use crate::network::{self, MlpSpec, NetworkError, Parameters};
use crate::pseudo;
use crate::train::{self, model, PreparedScene, TrainConfig, TrainError, TrainState};

/// Central-difference step for the score-space suites.
pub const BRANCH_EPS: f64 = 1e-5;
/// Relative-error budget for the score-space and small-network suites.
pub const BRANCH_TOL: f64 = 1e-5;
/// Central-difference step for the end-to-end objective suite.
pub const END_TO_END_EPS: f64 = 1e-6;
/// Relative-error budget for the end-to-end suite (looser: composition
/// depth stacks rounding error).
pub const END_TO_END_TOL: f64 = 1e-4;

/// Worst relative deviation between two gradient vectors: the largest
/// component difference divided by the larger vector's sup-norm, guarded
/// against the all-zero case.
pub fn max_rel_err(a: &[f64], b: &[f64]) -> f64 {
    assert!(a.len() == b.len(), "gradient lengths differ");
    let scale = a
        .iter()
        .chain(b)
        .fold(0.0_f64, |m, &v| m.max(v.abs()))
        .max(1e-12);
    let dev = a
        .iter()
        .zip(b)
        .fold(0.0_f64, |m, (&x, &y)| m.max((x - y).abs()));
    dev / scale
}

/// One verified cell: a named gradient path and its worst observed error.
#[derive(Debug, Clone)]
pub struct CellReport {
    pub name: String,
    pub max_rel_err: f64,
    pub tolerance: f64,
}

impl CellReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err < self.tolerance
    }

    pub fn render(&self) -> String {
        format!(
            "{} {:<32} max_rel_err={:.3e} (tol {:.0e})",
            if self.passed() { "PASS" } else { "FAIL" },
            self.name,
            self.max_rel_err,
            self.tolerance
        )
    }
}

/// A batch of cells from one or more suites.
#[derive(Debug, Clone, Default)]
pub struct GradCheckReport {
    pub cells: Vec<CellReport>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.cells.iter().all(CellReport::passed)
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        for cell in &self.cells {
            out.push_str(&cell.render());
            out.push('\n');
        }
        out.push_str(&format!(
            "{}: {} of {} cells passed\n",
            if self.passed() { "OK" } else { "FAILED" },
            self.cells.iter().filter(|c| c.passed()).count(),
            self.cells.len()
        ));
        out
    }

    pub fn merge(&mut self, other: GradCheckReport) {
        self.cells.extend(other.cells);
    }
}

fn random_scores(rng: &mut ChaCha8Rng, k: usize) -> ScoreVector {
    let values: Vec<f64> = (0..k).map(|_| rng.gen_range(-3.0..3.0)).collect();
    ScoreVector::new(values).expect("bounded scores are valid")
}

fn random_prob(rng: &mut ChaCha8Rng, k: usize) -> ProbVector {
    losses::softmax(&random_scores(rng, k))
}

const LAMBDAS: [f64; 3] = [0.0, 1.0, 2.0];
const CLASS_COUNTS: [usize; 3] = [2, 5, 13];

/// d(pseudo_loss)/d(scores of p) versus central differences for every
/// (distance, lambda, K) cell, `trials` random (s, q) pairs each.
pub fn pseudo_branch_suite(trials: usize, seed: u64) -> Result<GradCheckReport, LossError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = GradCheckReport::default();
    for kind in Distance::ALL {
        for lambda in LAMBDAS {
            let cfg = LossConfig::new(kind, lambda)?;
            for k in CLASS_COUNTS {
                let mut worst = 0.0_f64;
                for _ in 0..trials {
                    let s = random_scores(&mut rng, k);
                    let q = random_prob(&mut rng, k);
                    let analytic = losses::pseudo_loss_grad_scores(&s, &q, &cfg)?;
                    let fd = losses::finite_diff_grad(
                        |s| {
                            losses::pseudo_loss(&losses::softmax(s), &q, &cfg)
                                .expect("valid inputs")
                        },
                        &s,
                        BRANCH_EPS,
                    )?;
                    worst = worst.max(max_rel_err(&analytic, &fd));
                }
                report.cells.push(CellReport {
                    name: format!("pseudo {kind} lambda={lambda} K={k}"),
                    max_rel_err: worst,
                    tolerance: BRANCH_TOL,
                });
            }
        }
    }
    Ok(report)
}

/// d(pseudo_loss)/d(scores of q) — the prediction branch, p held constant —
/// versus central differences over the same grid of cells.
pub fn prediction_branch_suite(trials: usize, seed: u64) -> Result<GradCheckReport, LossError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = GradCheckReport::default();
    for kind in Distance::ALL {
        for lambda in LAMBDAS {
            let cfg = LossConfig::new(kind, lambda)?;
            for k in CLASS_COUNTS {
                let mut worst = 0.0_f64;
                for _ in 0..trials {
                    let z = random_scores(&mut rng, k);
                    let p = random_prob(&mut rng, k);
                    let analytic = losses::grad_wrt_prediction_scores(&p, &z, &cfg)?;
                    let fd = losses::finite_diff_grad(
                        |z| {
                            losses::pseudo_loss(&p, &losses::softmax(z), &cfg)
                                .expect("valid inputs")
                        },
                        &z,
                        BRANCH_EPS,
                    )?;
                    worst = worst.max(max_rel_err(&analytic, &fd));
                }
                report.cells.push(CellReport {
                    name: format!("prediction {kind} lambda={lambda} K={k}"),
                    max_rel_err: worst,
                    tolerance: BRANCH_TOL,
                });
            }
        }
    }
    Ok(report)
}

/// Backpropagation through random small MLPs against finite differences of
/// a random linear functional of the outputs.
pub fn network_suite(seed: u64) -> Result<GradCheckReport, NetworkError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = GradCheckReport::default();
    let shapes: [(Vec<usize>, bool, usize); 3] = [
        (vec![4, 7, 5], false, 9),
        (vec![3, 8, 8, 2], true, 16),
        (vec![5, 6], true, 4),
    ];
    for (batch_idx, (widths, final_linear, batch)) in shapes.into_iter().enumerate() {
        let spec = MlpSpec::new(widths, final_linear)?;
        let params = network::init_params(&spec, seed ^ (batch_idx as u64 + 1));
        let inputs: Vec<Vec<f64>> = (0..batch)
            .map(|_| (0..spec.input_dim()).map(|_| rng.gen_range(-1.5..1.5)).collect())
            .collect();
        let direction: Vec<Vec<f64>> = (0..batch)
            .map(|_| (0..spec.output_dim()).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .collect();

        let scalar = |params: &Parameters| -> Result<f64, NetworkError> {
            let (out, _) = network::forward(params, &spec, &inputs)?;
            Ok(out
                .iter()
                .zip(&direction)
                .map(|(row, w)| row.iter().zip(w).map(|(&o, &wi)| o * wi).sum::<f64>())
                .sum())
        };

        let (_, trace) = network::forward(&params, &spec, &inputs)?;
        let (grads, _) = network::backward(&trace, &params, &spec, &direction)?;
        let mut analytic = Vec::with_capacity(params.num_params());
        for i in 0..params.num_params() {
            analytic.push(grads.get_flat(i));
        }

        let mut fd = Vec::with_capacity(params.num_params());
        let mut probe = params.clone();
        for i in 0..params.num_params() {
            let orig = probe.get_flat(i);
            probe.set_flat(i, orig + END_TO_END_EPS);
            let hi = scalar(&probe)?;
            probe.set_flat(i, orig - END_TO_END_EPS);
            let lo = scalar(&probe)?;
            probe.set_flat(i, orig);
            fd.push((hi - lo) / (2.0 * END_TO_END_EPS));
        }
        report.cells.push(CellReport {
            name: format!("network mlp#{batch_idx} B={batch}"),
            max_rel_err: max_rel_err(&analytic, &fd),
            tolerance: BRANCH_TOL,
        });
    }
    Ok(report)
}

/// Fixture for the end-to-end objective check: a small prepared scene, a
/// config, and a state whose bank is initialized without disturbing the
/// freshly seeded parameters.
pub fn end_to_end_fixture(
    distance: Distance,
    lambda: f64,
    grad_through_labels: bool,
    seed: u64,
) -> Result<(PreparedScene, TrainConfig, TrainState), TrainError> {
    // 64-point toy batch: 4 classes x 16 points.
    let scene = gen_blob_scene(4, 16, 3, 1.0, seed)?;
    let mask = mask_labels(&scene, &WeakSetting::Ratio(0.1), seed)?;
    let cfg = TrainConfig {
        distance,
        lambda,
        grad_through_labels,
        alpha: 0.5,
        temperature: 0.5,
        momentum_m: 0.9,
        backbone_width: 8,
        projection_depth: 2,
        projection_dim: 4,
        knn_k: 4,
        ..TrainConfig::default()
    };
    let width = scene.feature_width();
    let prepared = PreparedScene::new(scene, mask, cfg.knn_k)?;
    let mut state = TrainState::new(&cfg, width, 4)?;

    // Initialize the bank from the labeled projected features so the
    // unlabeled branch participates, leaving parameters untouched.
    let (out, _) = model::model_forward(
        &state.params,
        &state.spec,
        &prepared.scene.features,
        &prepared.neighbors,
    )?;
    let mut features = Vec::new();
    let mut labels = Vec::new();
    for i in 0..prepared.scene.len() {
        if prepared.is_labeled(i) {
            features.push(out.projected[i].clone());
            labels.push(prepared.scene.gt_labels[i]);
        }
    }
    let means = pseudo::batch_class_means(&features, &labels, 4)?;
    pseudo::momentum_update(&mut state.bank, &means)?;
    if !state.bank.fully_initialized() {
        return Err(TrainError::InvalidInput(
            "fixture mask failed to cover every class".into(),
        ));
    }
    Ok((prepared, cfg, state))
}

/// Worst relative error of analytical `loss_and_grads` against central
/// finite differences of `total_loss` over every model parameter.
pub fn end_to_end_cell(
    distance: Distance,
    lambda: f64,
    seed: u64,
) -> Result<CellReport, TrainError> {
    let (prepared, cfg, state) = end_to_end_fixture(distance, lambda, true, seed)?;
    let chunk: Vec<usize> = (0..prepared.scene.len()).collect();

    let (_, grads) = train::loss_and_grads(
        &prepared,
        &chunk,
        &state.params,
        &state.spec,
        &state.bank,
        &cfg,
    )?;
    let n = state.params.num_params();
    let mut analytic = Vec::with_capacity(n);
    for i in 0..n {
        analytic.push(grads.get_flat(i));
    }

    let mut fd = Vec::with_capacity(n);
    let mut probe = state.params.clone();
    for i in 0..n {
        let orig = probe.get_flat(i);
        probe.set_flat(i, orig + END_TO_END_EPS);
        let hi = train::total_loss(&prepared, &chunk, &probe, &state.spec, &state.bank, &cfg)?
            .total;
        probe.set_flat(i, orig - END_TO_END_EPS);
        let lo = train::total_loss(&prepared, &chunk, &probe, &state.spec, &state.bank, &cfg)?
            .total;
        probe.set_flat(i, orig);
        fd.push((hi - lo) / (2.0 * END_TO_END_EPS));
    }
    Ok(CellReport {
        name: format!("end_to_end {distance} lambda={lambda}"),
        max_rel_err: max_rel_err(&analytic, &fd),
        tolerance: END_TO_END_TOL,
    })
}

/// The full objective check across every distance at the canonical weights.
pub fn end_to_end_suite(seed: u64) -> Result<GradCheckReport, TrainError> {
    let mut report = GradCheckReport::default();
    for kind in Distance::ALL {
        report.cells.push(end_to_end_cell(kind, 1.0, seed)?);
    }
    report.cells.push(end_to_end_cell(Distance::Js, 2.0, seed)?);
    report.cells.push(end_to_end_cell(Distance::KlQp, 0.0, seed)?);
    Ok(report)
}

/// Every suite, in report order: pseudo branch, prediction branch, network
/// backward, end-to-end objective.
pub fn full_report(trials: usize, seed: u64) -> Result<GradCheckReport, TrainError> {
    let mut report = pseudo_branch_suite(trials, seed).map_err(TrainError::Loss)?;
    report.merge(prediction_branch_suite(trials, seed.wrapping_add(1)).map_err(TrainError::Loss)?);
    report.merge(network_suite(seed.wrapping_add(2)).map_err(TrainError::Network)?);
    report.merge(end_to_end_suite(seed.wrapping_add(3))?);
    Ok(report)
}
