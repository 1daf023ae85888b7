//! The desk-scale benchmark: a fixed family of synthetic scenes sharing one
//! class geometry, weak masks, seeded training cells, and ablation sweeps
//! that emit byte-reproducible summary tables.
//!
//! Every cell is an independent full training run — own parameters, own RNG
//! stream — so sweep rows can be compared without hidden coupling through
//! shared state.

use std::fmt;

use crate::data::{gen_blob_scene_shared, mask_labels, LabelMask, WeakSetting};
use crate::eval::MetricsReport;
use crate::losses::Distance;
use crate::pseudo::SelectionStrategy;
use crate::train::{
    evaluate, fit, EpochRecord, PreparedScene, TrainConfig, TrainError, TrainMode, TrainState,
};

/// Shape of the synthetic benchmark dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct BenchmarkSpec {
    pub num_classes: usize,
    pub train_scenes: usize,
    pub points_per_class: usize,
    /// Extra feature dimensions beyond the three coordinates.
    pub feature_dim: usize,
    pub noise_sigma: f64,
    pub setting: WeakSetting,
    /// Seeds the shared class geometry and, offset per scene, the points.
    pub scene_seed: u64,
}

/// The standard benchmark every directional criterion runs on: 5 classes,
/// 5 training scenes of 1000 points, 1% labels, one held-out scene.
pub fn standard_benchmark() -> BenchmarkSpec {
    BenchmarkSpec {
        num_classes: 5,
        train_scenes: 5,
        points_per_class: 200,
        feature_dim: 10,
        noise_sigma: 2.0,
        setting: WeakSetting::Ratio(0.01),
        scene_seed: 90_210,
    }
}

/// Training configuration tuned for the standard benchmark. Sweeps override
/// individual fields; the rest stays fixed so rows are comparable.
pub fn standard_config() -> TrainConfig {
    TrainConfig {
        temperature: 0.2,
        momentum_m: 0.9,
        alpha: 0.5,
        lr: 0.05,
        epochs: 60,
        ..TrainConfig::default()
    }
}

/// The seeds every standard-benchmark comparison averages over.
pub const STANDARD_SEEDS: [u64; 5] = [1, 2, 3, 4, 5];

/// The smallest hard-selection size swept on the standard benchmark; also
/// the selection used by the hard-pseudo-label reference rows.
pub const STANDARD_TOP_K: usize = 32;

/// Prepared benchmark scenes: training set plus one held-out validation
/// scene drawn around the same anchors (full ground truth, empty mask).
#[derive(Debug, Clone)]
pub struct BenchmarkData {
    pub train: Vec<PreparedScene>,
    pub val: PreparedScene,
}

impl BenchmarkData {
    pub fn feature_width(&self) -> usize {
        self.val.scene.feature_width()
    }

    pub fn num_classes(&self) -> usize {
        self.val.scene.num_classes
    }
}

/// Generate and prepare the benchmark scenes for a given neighbor count.
pub fn build_benchmark(spec: &BenchmarkSpec, knn_k: usize) -> Result<BenchmarkData, TrainError> {
    let mut train = Vec::with_capacity(spec.train_scenes);
    for i in 0..spec.train_scenes {
        let scene = gen_blob_scene_shared(
            spec.num_classes,
            spec.points_per_class,
            spec.feature_dim,
            spec.noise_sigma,
            spec.scene_seed,
            spec.scene_seed + 1 + i as u64,
        )?;
        let mask = mask_labels(&scene, &spec.setting, spec.scene_seed + 101 + i as u64)?;
        train.push(PreparedScene::new(scene, mask, knn_k)?);
    }
    let val_scene = gen_blob_scene_shared(
        spec.num_classes,
        spec.points_per_class,
        spec.feature_dim,
        spec.noise_sigma,
        spec.scene_seed,
        spec.scene_seed + 1001,
    )?;
    let n = val_scene.len();
    let val = PreparedScene::new(val_scene, LabelMask::new(vec![], n)?, knn_k)?;
    Ok(BenchmarkData { train, val })
}

/// One finished training cell.
#[derive(Debug, Clone)]
pub struct CellRun {
    pub records: Vec<EpochRecord>,
    pub report: MetricsReport,
}

impl CellRun {
    /// The last training epoch's mean pseudo-label entropy, when the mode
    /// produced pseudo-labels at all.
    pub fn final_train_entropy(&self) -> Option<f64> {
        self.records.last().and_then(|r| r.mean_pseudo_entropy)
    }
}

/// Train one cell from scratch under `cfg` with its seed replaced by `seed`,
/// then evaluate on the held-out scene.
pub fn run_cell(cfg: &TrainConfig, data: &BenchmarkData, seed: u64) -> Result<CellRun, TrainError> {
    let cfg = TrainConfig { seed, ..cfg.clone() };
    let mut state = TrainState::new(&cfg, data.feature_width(), data.num_classes())?;
    let records = fit(&data.train, &cfg, &mut state, Some(&data.val), None)?;
    let report = evaluate(&state.params, &state.spec, &state.bank, &data.val, &cfg)?;
    Ok(CellRun { records, report })
}

/// Which config field an ablation sweep varies.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AblateAxis {
    Mode,
    Distance,
    Lambda,
    Selection,
}

impl AblateAxis {
    pub fn name(&self) -> &'static str {
        match self {
            AblateAxis::Mode => "mode",
            AblateAxis::Distance => "distance",
            AblateAxis::Lambda => "lambda",
            AblateAxis::Selection => "selection",
        }
    }
}

impl fmt::Display for AblateAxis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for AblateAxis {
    type Err = TrainError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "mode" => Ok(AblateAxis::Mode),
            "distance" => Ok(AblateAxis::Distance),
            "lambda" => Ok(AblateAxis::Lambda),
            "selection" => Ok(AblateAxis::Selection),
            other => Err(TrainError::InvalidConfig(format!(
                "unknown ablation axis {other:?}; expected mode, distance, lambda, or selection"
            ))),
        }
    }
}

/// Apply one swept value to a base config.
pub fn apply_axis_value(
    cfg: &TrainConfig,
    axis: AblateAxis,
    value: &str,
) -> Result<TrainConfig, TrainError> {
    let mut cfg = cfg.clone();
    match axis {
        AblateAxis::Mode => cfg.mode = value.parse::<TrainMode>()?,
        AblateAxis::Distance => {
            cfg.distance = Distance::ALL
                .into_iter()
                .find(|d| d.name() == value)
                .ok_or_else(|| {
                    TrainError::InvalidConfig(format!(
                        "unknown distance {value:?}; expected klpq, klqp, js, or mse"
                    ))
                })?;
        }
        AblateAxis::Lambda => {
            cfg.lambda = value.parse::<f64>().map_err(|_| {
                TrainError::InvalidConfig(format!("bad lambda value {value:?}"))
            })?;
        }
        AblateAxis::Selection => cfg.selection = value.parse::<SelectionStrategy>()?,
    }
    cfg.validate()?;
    Ok(cfg)
}

/// One row of an ablation table: a swept value with per-seed results.
#[derive(Debug, Clone)]
pub struct AblationRow {
    pub value: String,
    pub miou: Vec<f64>,
    pub oa: Vec<f64>,
    /// Final-epoch pseudo-label entropy per seed; empty when the mode never
    /// reads pseudo-labels.
    pub entropy: Vec<f64>,
}

impl AblationRow {
    pub fn mean_miou(&self) -> f64 {
        mean(&self.miou)
    }

    pub fn mean_oa(&self) -> f64 {
        mean(&self.oa)
    }

    pub fn mean_entropy(&self) -> Option<f64> {
        (!self.entropy.is_empty()).then(|| mean(&self.entropy))
    }
}

fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

/// Sweep `axis` over `values`, training every (value, seed) cell from
/// scratch. Cells run sequentially and rows assemble in argument order, so
/// the table is reproducible byte for byte.
pub fn ablate(
    cfg: &TrainConfig,
    data: &BenchmarkData,
    axis: AblateAxis,
    values: &[String],
    seeds: &[u64],
) -> Result<Vec<AblationRow>, TrainError> {
    if values.is_empty() || seeds.is_empty() {
        return Err(TrainError::InvalidInput(
            "ablation needs at least one value and one seed".into(),
        ));
    }
    let mut rows = Vec::with_capacity(values.len());
    for value in values {
        let cell_cfg = apply_axis_value(cfg, axis, value)?;
        let mut row = AblationRow {
            value: value.clone(),
            miou: Vec::with_capacity(seeds.len()),
            oa: Vec::with_capacity(seeds.len()),
            entropy: Vec::new(),
        };
        for &seed in seeds {
            let run = run_cell(&cell_cfg, data, seed)?;
            row.miou.push(run.report.miou);
            row.oa.push(run.report.oa);
            if let Some(h) = run.final_train_entropy() {
                row.entropy.push(h);
            }
        }
        rows.push(row);
    }
    Ok(rows)
}

/// Render an ablation sweep as a fixed-width text table.
pub fn render_table(axis: AblateAxis, seeds: &[u64], rows: &[AblationRow]) -> String {
    let mut out = String::new();
    let seed_list: Vec<String> = seeds.iter().map(u64::to_string).collect();
    out.push_str(&format!(
        "axis: {axis}   seeds: {}\n",
        seed_list.join(",")
    ));
    out.push_str(&format!(
        "{:<16} {:>10} {:>10} {:>10}   per-seed mIoU\n",
        "value", "mean_mIoU", "mean_OA", "mean_ent"
    ));
    for row in rows {
        let ent = match row.mean_entropy() {
            Some(h) => format!("{h:.4}"),
            None => "-".into(),
        };
        let per_seed: Vec<String> = row.miou.iter().map(|m| format!("{m:.4}")).collect();
        out.push_str(&format!(
            "{:<16} {:>10.4} {:>10.4} {:>10}   {}\n",
            row.value,
            row.mean_miou(),
            row.mean_oa(),
            ent,
            per_seed.join(" ")
        ));
    }
    out
}
