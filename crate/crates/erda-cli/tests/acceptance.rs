//! The nine-point acceptance gate for the workbench: exact gradient math,
//! limit structure, algebraic identities, an end-to-end derivative audit,
//! directional benchmark orderings, gradient-field grid structure, and CLI
//! determinism.
//!
//! Runs as a plain binary (no libtest harness) so each criterion prints
//! exactly one `ACCEPTANCE <n> <name>: PASS/FAIL` line; the process exits
//! nonzero when any criterion fails. Tolerances and runtime budgets are
//! pinned as constants next to the criterion that uses them.

use std::error::Error;
use std::path::Path;
use std::process::{Command, ExitCode};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use erda::eval::{export_gradient_grid, GradGridSpec};
use erda::experiment::{
    build_benchmark, run_cell, standard_benchmark, standard_config, BenchmarkData, CellRun,
    STANDARD_SEEDS, STANDARD_TOP_K,
};
use erda::gradcheck::{self, GradCheckReport, BRANCH_TOL, END_TO_END_TOL};
use erda::losses::{
    cross_entropy, divergence, entropy, pseudo_loss, pseudo_loss_grad_scores, Distance,
    LossConfig, ProbVector, ScoreVector,
};
use erda::pseudo::SelectionStrategy;
use erda::train::{TrainConfig, TrainError, TrainMode};

type CritResult = Result<String, Box<dyn Error>>;

fn main() -> ExitCode {
    let mut failures = 0usize;

    run(1, "pseudo-branch gradient exactness", Some(30.0), crit1_gradient_exactness, &mut failures);
    run(2, "limit cases", Some(5.0), crit2_limit_cases, &mut failures);
    run(3, "algebraic identities", Some(5.0), crit3_identities, &mut failures);
    run(4, "end-to-end gradient", Some(120.0), crit4_end_to_end, &mut failures);

    // Criteria 5-7 share one set of trained benchmark cells; the training
    // cost is charged to criterion 5's budget.
    let mut cells: Option<BenchCells> = None;
    run(5, "ablation direction (mode axis)", Some(600.0), || {
        let built = BenchCells::build()?;
        let outcome = built.crit5_mode_ordering();
        cells = Some(built);
        outcome
    }, &mut failures);
    run(6, "entropy direction", None, || match &cells {
        Some(c) => c.crit6_entropy_direction(),
        None => Err("benchmark cells unavailable (criterion 5 failed to build)".into()),
    }, &mut failures);
    run(7, "dense beats sparse", None, || match &cells {
        Some(c) => c.crit7_dense_beats_sparse(),
        None => Err("benchmark cells unavailable (criterion 5 failed to build)".into()),
    }, &mut failures);

    run(8, "gradient-grid structure", Some(10.0), crit8_grid_structure, &mut failures);
    run(9, "CLI determinism", None, crit9_cli_determinism, &mut failures);

    println!("acceptance: {} of 9 criteria passed", 9 - failures);
    if failures == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}

/// Time one criterion, print its single line, and count failures. A result
/// inside budget passes; a slow pass is reported as a budget failure.
fn run(
    number: usize,
    name: &str,
    budget_secs: Option<f64>,
    criterion: impl FnOnce() -> CritResult,
    failures: &mut usize,
) {
    let start = Instant::now();
    let outcome = criterion();
    let secs = start.elapsed().as_secs_f64();
    match outcome {
        Ok(detail) => {
            if let Some(budget) = budget_secs {
                if secs >= budget {
                    println!(
                        "ACCEPTANCE {number} {name}: FAIL (took {secs:.1} s, budget {budget} s; {detail})"
                    );
                    *failures += 1;
                    return;
                }
            }
            println!("ACCEPTANCE {number} {name}: PASS ({detail}; {secs:.1} s)");
        }
        Err(err) => {
            println!("ACCEPTANCE {number} {name}: FAIL ({err}; {secs:.1} s)");
            *failures += 1;
        }
    }
}

fn worst_cell(report: &GradCheckReport) -> f64 {
    report
        .cells
        .iter()
        .map(|c| c.max_rel_err)
        .fold(0.0, f64::max)
}

fn euclidean_norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Random scores in [-6, 6]: softmaxed probabilities span roughly five
/// orders of magnitude without approaching the log floor.
fn random_scores(rng: &mut ChaCha8Rng, k: usize) -> ScoreVector {
    ScoreVector::new((0..k).map(|_| rng.gen_range(-6.0..6.0)).collect()).unwrap()
}

fn random_prob(rng: &mut ChaCha8Rng, k: usize) -> ProbVector {
    erda::losses::softmax(&random_scores(rng, k))
}

/// Scores whose softmax sits within 1e-6 of `one_hot(hot)` in every
/// component: the off components land at 5e-8, so even at K = 13 the hot
/// component is within 6e-7 of one.
fn near_one_hot_scores(k: usize, hot: usize) -> ScoreVector {
    let off = 5e-8f64.ln();
    ScoreVector::new((0..k).map(|i| if i == hot { 0.0 } else { off }).collect()).unwrap()
}

const CLASS_COUNTS: [usize; 3] = [2, 5, 13];
const LAMBDAS: [f64; 3] = [0.0, 1.0, 2.0];

/// Criterion 1: analytic pseudo-branch gradients match central finite
/// differences over 100 random (s, q) pairs for every distance, lambda in
/// {0, 1, 2}, and K in {2, 5, 13}.
fn crit1_gradient_exactness() -> CritResult {
    const TRIALS: usize = 100;
    let report = gradcheck::pseudo_branch_suite(TRIALS, 7)?;
    let worst = worst_cell(&report);
    if !report.passed() {
        return Err(format!("worst cell max_rel_err {worst:.3e} >= {BRANCH_TOL:.0e}").into());
    }
    Ok(format!(
        "{} cells x {TRIALS} pairs, worst max_rel_err {worst:.3e} < {BRANCH_TOL:.0e}",
        report.cells.len()
    ))
}

const CRIT2_UNIFORM_NORM_TOL: f64 = 1e-9;
const CRIT2_UPDATE_TOL: f64 = 1e-4;
const CRIT2_CONFIDENT_NORM_TOL: f64 = 1e-3;
const CRIT2_TRIALS: usize = 50;

/// Criterion 2: the loss family's limit structure. (a) KLpq at lambda = 1
/// is exactly cross-entropy, so a uniform q gives zero gradient for any p;
/// (b) KLqp at a near-one-hot p updates toward q - onehot(k); (c) JS, MSE,
/// and KLpq all go quiet at a confident p.
fn crit2_limit_cases() -> CritResult {
    let mut rng = ChaCha8Rng::seed_from_u64(20);

    // (a) KLpq, lambda = 1, uniform q: gradient norm < 1e-9 for arbitrary p.
    let ce = LossConfig::new(Distance::KlPq, 1.0)?;
    let mut worst_a = 0.0f64;
    for k in CLASS_COUNTS {
        let q = ProbVector::uniform(k);
        for _ in 0..CRIT2_TRIALS {
            let s = random_scores(&mut rng, k);
            let g = pseudo_loss_grad_scores(&s, &q, &ce)?;
            worst_a = worst_a.max(euclidean_norm(&g));
        }
    }
    if worst_a >= CRIT2_UNIFORM_NORM_TOL {
        return Err(format!(
            "uniform-q gradient norm {worst_a:.3e} >= {CRIT2_UNIFORM_NORM_TOL:.0e}"
        )
        .into());
    }

    // (b) KLqp, p within 1e-6 of onehot(k): the descent update -g lands
    // within 1e-4 of q - onehot(k) for every lambda (the entropy term is
    // flat at a one-hot p).
    let mut worst_b = 0.0f64;
    for k in CLASS_COUNTS {
        for lambda in LAMBDAS {
            let cfg = LossConfig::new(Distance::KlQp, lambda)?;
            for _ in 0..CRIT2_TRIALS {
                let hot = rng.gen_range(0..k);
                let s = near_one_hot_scores(k, hot);
                let q = random_prob(&mut rng, k);
                let g = pseudo_loss_grad_scores(&s, &q, &cfg)?;
                for i in 0..k {
                    let expected = q.values()[i] - if i == hot { 1.0 } else { 0.0 };
                    worst_b = worst_b.max((-g[i] - expected).abs());
                }
            }
        }
    }
    if worst_b >= CRIT2_UPDATE_TOL {
        return Err(format!(
            "KLqp update deviates from q - onehot by {worst_b:.3e} >= {CRIT2_UPDATE_TOL:.0e}"
        )
        .into());
    }

    // (c) JS, MSE, KLpq at a near-one-hot p: gradient norm < 1e-3.
    let mut worst_c = 0.0f64;
    for kind in [Distance::Js, Distance::Mse, Distance::KlPq] {
        for lambda in LAMBDAS {
            let cfg = LossConfig::new(kind, lambda)?;
            for k in CLASS_COUNTS {
                for _ in 0..CRIT2_TRIALS {
                    let hot = rng.gen_range(0..k);
                    let s = near_one_hot_scores(k, hot);
                    let q = random_prob(&mut rng, k);
                    let g = pseudo_loss_grad_scores(&s, &q, &cfg)?;
                    worst_c = worst_c.max(euclidean_norm(&g));
                }
            }
        }
    }
    if worst_c >= CRIT2_CONFIDENT_NORM_TOL {
        return Err(format!(
            "confident-p gradient norm {worst_c:.3e} >= {CRIT2_CONFIDENT_NORM_TOL:.0e}"
        )
        .into());
    }

    Ok(format!(
        "uniform-q |g| {worst_a:.1e} < {CRIT2_UNIFORM_NORM_TOL:.0e}; KLqp update off by {worst_b:.1e} < {CRIT2_UPDATE_TOL:.0e}; confident-p |g| {worst_c:.1e} < {CRIT2_CONFIDENT_NORM_TOL:.0e}"
    ))
}

const CRIT3_TOL: f64 = 1e-9;
const CRIT3_PAIRS: usize = 1000;

/// Criterion 3: KL(p||q) = H(p,q) - H(p) and pseudo_loss(KLpq, lambda=1) =
/// H(p,q), each within 1e-9 over 1000 random pairs.
fn crit3_identities() -> CritResult {
    let mut rng = ChaCha8Rng::seed_from_u64(30);
    let ce = LossConfig::new(Distance::KlPq, 1.0)?;
    let mut worst_kl = 0.0f64;
    let mut worst_loss = 0.0f64;
    for trial in 0..CRIT3_PAIRS {
        let k = CLASS_COUNTS[trial % CLASS_COUNTS.len()];
        let p = random_prob(&mut rng, k);
        let q = random_prob(&mut rng, k);
        let kl = divergence(&p, &q, Distance::KlPq)?;
        let hpq = cross_entropy(&p, &q)?;
        worst_kl = worst_kl.max((kl - (hpq - entropy(&p))).abs());
        worst_loss = worst_loss.max((pseudo_loss(&p, &q, &ce)? - hpq).abs());
    }
    let worst = worst_kl.max(worst_loss);
    if worst >= CRIT3_TOL {
        return Err(format!("identity deviation {worst:.3e} >= {CRIT3_TOL:.0e}").into());
    }
    Ok(format!(
        "{CRIT3_PAIRS} pairs: KL split off by {worst_kl:.1e}, CE collapse off by {worst_loss:.1e} (tol {CRIT3_TOL:.0e})"
    ))
}

/// Criterion 4: finite differences of the full objective with respect to
/// every backbone, projection, and head parameter on a 64-point scene match
/// the analytic backward pass, with gradients flowing through the labels.
fn crit4_end_to_end() -> CritResult {
    let report = gradcheck::end_to_end_suite(10)?;
    let worst = worst_cell(&report);
    if !report.passed() {
        return Err(format!("worst cell max_rel_err {worst:.3e} >= {END_TO_END_TOL:.0e}").into());
    }
    Ok(format!(
        "{} cells, worst max_rel_err {worst:.3e} < {END_TO_END_TOL:.0e}",
        report.cells.len()
    ))
}

/// One trained benchmark family per (mode, selection) the directional
/// criteria compare.
struct BenchCells {
    sup: Vec<CellRun>,
    bl_topk: Vec<CellRun>,
    bl_dense: Vec<CellRun>,
    er_dense: Vec<CellRun>,
    erda_dense: Vec<CellRun>,
    erda_topk: Vec<CellRun>,
}

fn family(
    data: &BenchmarkData,
    mode: TrainMode,
    selection: SelectionStrategy,
) -> Result<Vec<CellRun>, TrainError> {
    let cfg = TrainConfig {
        mode,
        selection,
        ..standard_config()
    };
    STANDARD_SEEDS
        .iter()
        .map(|&seed| run_cell(&cfg, data, seed))
        .collect()
}

fn mean_miou(cells: &[CellRun]) -> f64 {
    cells.iter().map(|c| c.report.miou).sum::<f64>() / cells.len() as f64
}

fn mean_final_entropy(cells: &[CellRun]) -> Result<f64, Box<dyn Error>> {
    let mut sum = 0.0;
    for cell in cells {
        sum += cell
            .final_train_entropy()
            .ok_or("cell produced no pseudo-label entropy")?;
    }
    Ok(sum / cells.len() as f64)
}

impl BenchCells {
    /// Train all thirty standard-benchmark cells (six variants, five seeds).
    fn build() -> Result<Self, TrainError> {
        let data = build_benchmark(&standard_benchmark(), standard_config().knn_k)?;
        let topk = SelectionStrategy::TopK(STANDARD_TOP_K);
        Ok(BenchCells {
            sup: family(&data, TrainMode::SupervisedOnly, SelectionStrategy::DenseSoft)?,
            bl_topk: family(&data, TrainMode::PseudoBaseline, topk)?,
            bl_dense: family(&data, TrainMode::PseudoBaseline, SelectionStrategy::DenseSoft)?,
            er_dense: family(&data, TrainMode::ErOnly, SelectionStrategy::DenseSoft)?,
            erda_dense: family(&data, TrainMode::Erda, SelectionStrategy::DenseSoft)?,
            erda_topk: family(&data, TrainMode::Erda, topk)?,
        })
    }

    /// Criterion 5: mean mIoU ordering supervised-only < one-hot top-k
    /// pseudo-label baseline < full method, with the full method winning in
    /// at least 4 of 5 seeds.
    fn crit5_mode_ordering(&self) -> CritResult {
        let sup = mean_miou(&self.sup);
        let baseline = mean_miou(&self.bl_topk);
        let full = mean_miou(&self.erda_dense);
        let wins = self
            .erda_dense
            .iter()
            .zip(&self.bl_topk)
            .filter(|(e, b)| e.report.miou > b.report.miou)
            .count();
        if !(sup < baseline && baseline < full) {
            return Err(format!(
                "mIoU ordering violated: supervised {sup:.4}, baseline {baseline:.4}, erda {full:.4}"
            )
            .into());
        }
        if wins < 4 {
            return Err(format!("erda beats the baseline in only {wins} of 5 seeds").into());
        }
        Ok(format!(
            "mIoU supervised {sup:.4} < baseline {baseline:.4} < erda {full:.4}; erda wins {wins}/5 seeds"
        ))
    }

    /// Criterion 6: at matched epochs, mean final-epoch pseudo-label entropy
    /// under entropy regularization alone sits strictly below the no-ER
    /// soft-pseudo-label run.
    fn crit6_entropy_direction(&self) -> CritResult {
        let er = mean_final_entropy(&self.er_dense)?;
        let no_er = mean_final_entropy(&self.bl_dense)?;
        if er >= no_er {
            return Err(format!("ER entropy {er:.4} >= no-ER entropy {no_er:.4}").into());
        }
        Ok(format!("ER entropy {er:.4} < no-ER soft-label entropy {no_er:.4} (nats)"))
    }

    /// Criterion 7: under the full method, dense soft labels reach mean mIoU
    /// at least as high as the smallest swept top-k selection.
    fn crit7_dense_beats_sparse(&self) -> CritResult {
        let dense = mean_miou(&self.erda_dense);
        let sparse = mean_miou(&self.erda_topk);
        if dense < sparse {
            return Err(format!(
                "dense {dense:.4} < topk:{STANDARD_TOP_K} {sparse:.4}"
            )
            .into());
        }
        Ok(format!("dense {dense:.4} >= topk:{STANDARD_TOP_K} {sparse:.4}"))
    }
}

const CRIT8_RESOLUTION: usize = 41;
const CRIT8_MARGIN: f64 = 1e-3;
const CRIT8_FLAT_TOL: f64 = 1e-9;

/// Criterion 8: across the twelve exported (distance, lambda) grids, the
/// q = 0.5 line is flat (|delta| < 1e-9 everywhere) for KLpq at lambda = 1
/// and for no other combination.
fn crit8_grid_structure() -> CritResult {
    let dir = tempfile::tempdir()?;
    let mut flat: Vec<String> = Vec::new();
    let mut flattest_other = f64::INFINITY;
    let mut klpq1_max = f64::NAN;
    for distance in Distance::ALL {
        for lambda in LAMBDAS {
            let name = format!("{} lambda={lambda}", distance.name());
            let path = dir
                .path()
                .join(format!("grid_{}_lambda{lambda}.txt", distance.name()));
            let spec = GradGridSpec::new(distance, lambda, CRIT8_RESOLUTION, CRIT8_MARGIN)?;
            export_gradient_grid(&spec, &path)?;
            let line_max = uniform_line_max(&path)?;
            let is_klpq1 = distance == Distance::KlPq && lambda == 1.0;
            if is_klpq1 {
                klpq1_max = line_max;
            } else {
                flattest_other = flattest_other.min(line_max);
            }
            if line_max < CRIT8_FLAT_TOL {
                flat.push(name);
            }
        }
    }
    if flat != ["klpq lambda=1"] {
        return Err(format!(
            "expected exactly klpq lambda=1 to be flat at q=0.5, got {flat:?}"
        )
        .into());
    }
    Ok(format!(
        "klpq lambda=1 line max |delta| {klpq1_max:.1e} < {CRIT8_FLAT_TOL:.0e}; flattest other grid {flattest_other:.1e}"
    ))
}

/// Max |delta| over the q = 0.5 rows of an exported grid file.
fn uniform_line_max(path: &Path) -> Result<f64, Box<dyn Error>> {
    let text = std::fs::read_to_string(path)?;
    let mut rows = 0usize;
    let mut line_max = 0.0f64;
    for line in text.lines().skip(1) {
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 3 {
            return Err(format!("malformed grid row {line:?} in {}", path.display()).into());
        }
        let q: f64 = fields[1].parse()?;
        if (q - 0.5).abs() < 1e-9 {
            rows += 1;
            line_max = line_max.max(fields[2].parse::<f64>()?.abs());
        }
    }
    if rows != CRIT8_RESOLUTION {
        return Err(format!(
            "expected {CRIT8_RESOLUTION} rows on the q=0.5 line, found {rows} in {}",
            path.display()
        )
        .into());
    }
    Ok(line_max)
}

/// Criterion 9: two `train` runs with the same config and seed write
/// byte-identical logs, and stopping at an intermediate epoch then resuming
/// from the checkpoint reproduces the uninterrupted log exactly.
fn crit9_cli_determinism() -> CritResult {
    let bin = env!("CARGO_BIN_EXE_erda");
    let dir = tempfile::tempdir()?;
    let root = dir.path();
    let run = |args: &[&str]| -> Result<(), Box<dyn Error>> {
        let output = Command::new(bin).current_dir(root).args(args).output()?;
        if !output.status.success() {
            return Err(format!(
                "`erda {}` failed: {}",
                args.join(" "),
                String::from_utf8_lossy(&output.stderr).trim()
            )
            .into());
        }
        Ok(())
    };

    let shape = [
        "--classes", "3", "--points-per-class", "40", "--feature-dim", "2",
        "--noise-sigma", "1.5", "--anchor-seed", "99",
    ];
    let mut gen_train = vec!["gen", "--out-dir", "data", "--scenes", "2",
        "--setting", "ratio:0.1", "--seed", "11"];
    gen_train.extend_from_slice(&shape);
    run(&gen_train)?;
    let mut gen_val = vec!["gen", "--out-dir", "val", "--scenes", "1", "--seed", "500"];
    gen_val.extend_from_slice(&shape);
    run(&gen_val)?;

    std::fs::write(
        root.join("cfg.toml"),
        "epochs = 6\nbackbone_width = 8\nprojection_dim = 4\nknn_k = 4\n\
         temperature = 0.2\nmomentum_m = 0.9\nlr = 0.05\nseed = 3\n",
    )?;
    let scenes = [
        "--scene", "data/scene_00.txt", "--mask", "data/mask_00.txt",
        "--scene", "data/scene_01.txt", "--mask", "data/mask_01.txt",
        "--val", "val/scene_00.txt",
    ];
    let train = |extra: &[&str]| -> Result<(), Box<dyn Error>> {
        let mut args = vec!["train"];
        args.extend_from_slice(extra);
        args.extend_from_slice(&scenes);
        run(&args)
    };

    train(&["--config", "cfg.toml", "--log-out", "full_a.jsonl", "--checkpoint-out", "full.ckpt"])?;
    train(&["--config", "cfg.toml", "--log-out", "full_b.jsonl"])?;
    let full_a = std::fs::read(root.join("full_a.jsonl"))?;
    let full_b = std::fs::read(root.join("full_b.jsonl"))?;
    if full_a.is_empty() {
        return Err("training log is empty".into());
    }
    if full_a != full_b {
        return Err("re-run produced a different metrics log".into());
    }

    train(&["--config", "cfg.toml", "--until-epoch", "3", "--log-out", "part1.jsonl",
        "--checkpoint-out", "part.ckpt"])?;
    train(&["--resume", "part.ckpt", "--log-out", "part2.jsonl",
        "--checkpoint-out", "resumed.ckpt"])?;
    let mut joined = std::fs::read(root.join("part1.jsonl"))?;
    joined.extend(std::fs::read(root.join("part2.jsonl"))?);
    if joined != full_a {
        return Err("resumed log does not concatenate to the uninterrupted log".into());
    }
    if std::fs::read(root.join("full.ckpt"))? != std::fs::read(root.join("resumed.ckpt"))? {
        return Err("resumed checkpoint differs from the uninterrupted checkpoint".into());
    }
    Ok(format!(
        "re-run log byte-identical ({} bytes); 3+3 resume reproduces it; final checkpoints identical",
        full_a.len()
    ))
}
