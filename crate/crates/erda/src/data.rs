//! Synthetic point-cloud scenes, weak-label masks, and their text formats.
//!
//! A scene is `N` points with 3-D coordinates, an `F`-wide feature vector per
//! point (the first three feature columns repeat the coordinates, the rest
//! carry a per-class signature), and dense ground-truth labels. Weak masks
//! pick the tiny labeled subset used for training; everything else is only
//! consulted by evaluation.
//!
//! File formats (all plain text, floats in shortest round-trip form):
//!
//! - scene: header `N F K`, then one row per point:
//!   `x y z f_1 .. f_F label`;
//! - mask: one labeled point index per line, ascending.

use std::fmt;
use std::io::Write;
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, PartialEq)]
pub enum DataError {
    InvalidScene(String),
    InvalidMask(String),
    InvalidSetting(String),
    /// A class has no points at all, so coverage cannot be forced.
    MissingClass(usize),
    /// Parse failure; `line` is 1-based within the file.
    Parse { line: usize, message: String },
    Io(String),
}

impl fmt::Display for DataError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DataError::InvalidScene(msg) => write!(f, "invalid scene: {msg}"),
            DataError::InvalidMask(msg) => write!(f, "invalid mask: {msg}"),
            DataError::InvalidSetting(msg) => write!(f, "invalid weak setting: {msg}"),
            DataError::MissingClass(k) => {
                write!(f, "class {k} has no points; cannot force coverage")
            }
            DataError::Parse { line, message } => write!(f, "parse error at line {line}: {message}"),
            DataError::Io(msg) => write!(f, "io error: {msg}"),
        }
    }
}

impl std::error::Error for DataError {}

impl From<std::io::Error> for DataError {
    fn from(e: std::io::Error) -> Self {
        DataError::Io(e.to_string())
    }
}

/// A point cloud with dense ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub coords: Vec<[f64; 3]>,
    pub features: Vec<Vec<f64>>,
    pub gt_labels: Vec<usize>,
    pub num_classes: usize,
}

impl Scene {
    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    pub fn feature_width(&self) -> usize {
        self.features.first().map_or(0, Vec::len)
    }

    pub fn validate(&self) -> Result<(), DataError> {
        let n = self.coords.len();
        if self.num_classes < 2 {
            return Err(DataError::InvalidScene(format!(
                "need at least 2 classes, got {}",
                self.num_classes
            )));
        }
        if n < self.num_classes {
            return Err(DataError::InvalidScene(format!(
                "{n} points cannot cover {} classes",
                self.num_classes
            )));
        }
        if self.features.len() != n || self.gt_labels.len() != n {
            return Err(DataError::InvalidScene("ragged point arrays".into()));
        }
        let width = self.feature_width();
        if width == 0 {
            return Err(DataError::InvalidScene("empty feature vectors".into()));
        }
        for (i, c) in self.coords.iter().enumerate() {
            if c.iter().any(|v| !v.is_finite()) {
                return Err(DataError::InvalidScene(format!(
                    "non-finite coordinate at point {i}"
                )));
            }
        }
        for (i, feat) in self.features.iter().enumerate() {
            if feat.len() != width {
                return Err(DataError::InvalidScene(format!(
                    "feature width {} at point {i}, expected {width}",
                    feat.len()
                )));
            }
            if feat.iter().any(|v| !v.is_finite()) {
                return Err(DataError::InvalidScene(format!(
                    "non-finite feature at point {i}"
                )));
            }
        }
        for (i, &label) in self.gt_labels.iter().enumerate() {
            if label >= self.num_classes {
                return Err(DataError::InvalidScene(format!(
                    "label {label} at point {i} out of range for {} classes",
                    self.num_classes
                )));
            }
        }
        Ok(())
    }
}

/// Strictly ascending indices of the labeled points.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelMask {
    indices: Vec<usize>,
}

impl LabelMask {
    pub fn new(mut indices: Vec<usize>, num_points: usize) -> Result<Self, DataError> {
        indices.sort_unstable();
        for pair in indices.windows(2) {
            if pair[0] == pair[1] {
                return Err(DataError::InvalidMask(format!(
                    "duplicate index {}",
                    pair[0]
                )));
            }
        }
        if let Some(&last) = indices.last() {
            if last >= num_points {
                return Err(DataError::InvalidMask(format!(
                    "index {last} out of range for {num_points} points"
                )));
            }
        }
        Ok(LabelMask { indices })
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    /// Per-point labeled flags for a scene of `num_points`.
    pub fn flags(&self, num_points: usize) -> Vec<bool> {
        let mut flags = vec![false; num_points];
        for &i in &self.indices {
            flags[i] = true;
        }
        flags
    }
}

/// Which points keep their labels.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum WeakSetting {
    /// Exactly one labeled point per class.
    OnePoint,
    /// `round(fraction * N)` labeled points, at least one per class.
    Ratio(f64),
}

impl WeakSetting {
    pub fn validate(&self) -> Result<(), DataError> {
        match self {
            WeakSetting::OnePoint => Ok(()),
            WeakSetting::Ratio(f) => {
                if f.is_finite() && *f > 0.0 && *f <= 1.0 {
                    Ok(())
                } else {
                    Err(DataError::InvalidSetting(format!(
                        "ratio must lie in (0, 1], got {f}"
                    )))
                }
            }
        }
    }
}

impl std::str::FromStr for WeakSetting {
    type Err = DataError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let setting = match s {
            "1pt" => WeakSetting::OnePoint,
            other => {
                if let Some(f) = other.strip_prefix("ratio:") {
                    let f = f.parse::<f64>().map_err(|_| {
                        DataError::InvalidSetting(format!("bad ratio in {other:?}"))
                    })?;
                    WeakSetting::Ratio(f)
                } else {
                    return Err(DataError::InvalidSetting(format!(
                        "unknown weak setting {s:?}; expected 1pt or ratio:F"
                    )));
                }
            }
        };
        setting.validate()?;
        Ok(setting)
    }
}

/// Marsaglia polar method over the seeded uniform stream; one value per call
/// keeps draw order independent of usage pattern.
fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    loop {
        let u: f64 = rng.gen_range(-1.0..1.0);
        let v: f64 = rng.gen_range(-1.0..1.0);
        let s = u * u + v * v;
        if s > 0.0 && s < 1.0 {
            return u * (-2.0 * s.ln() / s).sqrt();
        }
    }
}

const ANCHOR_RADIUS: f64 = 4.0;

/// Noiseless per-class anchors in feature space: circle coordinates followed
/// by a seeded unit-scale class signature of width `feature_dim`. Class means
/// of a zero-noise scene equal these exactly.
pub fn class_anchors(num_classes: usize, feature_dim: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x616e_63_68_6f72); // "anchor"
    (0..num_classes)
        .map(|k| {
            let theta = 2.0 * std::f64::consts::PI * k as f64 / num_classes as f64;
            let mut anchor = vec![ANCHOR_RADIUS * theta.cos(), ANCHOR_RADIUS * theta.sin(), 0.0];
            anchor.extend((0..feature_dim).map(|_| gaussian(&mut rng)));
            anchor
        })
        .collect()
}

/// Generate `num_classes` Gaussian blobs of `points_per_class` points each.
/// Features are the (noisy) coordinates plus `feature_dim` extra per-class
/// signal dimensions, all corrupted by `noise_sigma`. Deterministic in
/// `seed`; with `noise_sigma = 0` every point sits exactly on its anchor.
pub fn gen_blob_scene(
    num_classes: usize,
    points_per_class: usize,
    feature_dim: usize,
    noise_sigma: f64,
    seed: u64,
) -> Result<Scene, DataError> {
    gen_blob_scene_shared(num_classes, points_per_class, feature_dim, noise_sigma, seed, seed)
}

/// Like [`gen_blob_scene`] but with the class geometry pinned separately:
/// scenes sharing `anchor_seed` draw around the same anchors (so one model
/// can train on several of them and be evaluated on a held-out one), while
/// `noise_seed` varies the actual points.
pub fn gen_blob_scene_shared(
    num_classes: usize,
    points_per_class: usize,
    feature_dim: usize,
    noise_sigma: f64,
    anchor_seed: u64,
    noise_seed: u64,
) -> Result<Scene, DataError> {
    if num_classes < 2 {
        return Err(DataError::InvalidScene(format!(
            "need at least 2 classes, got {num_classes}"
        )));
    }
    if points_per_class == 0 {
        return Err(DataError::InvalidScene("points_per_class must be positive".into()));
    }
    if !(noise_sigma.is_finite() && noise_sigma >= 0.0) {
        return Err(DataError::InvalidScene(format!(
            "noise_sigma must be a finite nonnegative real, got {noise_sigma}"
        )));
    }
    let anchors = class_anchors(num_classes, feature_dim, anchor_seed);
    let mut rng = ChaCha8Rng::seed_from_u64(noise_seed);
    let n = num_classes * points_per_class;
    let mut scene = Scene {
        coords: Vec::with_capacity(n),
        features: Vec::with_capacity(n),
        gt_labels: Vec::with_capacity(n),
        num_classes,
    };
    for (k, anchor) in anchors.iter().enumerate() {
        for _ in 0..points_per_class {
            let coord = [
                anchor[0] + noise_sigma * gaussian(&mut rng),
                anchor[1] + noise_sigma * gaussian(&mut rng),
                anchor[2] + noise_sigma * gaussian(&mut rng),
            ];
            let mut feat = coord.to_vec();
            feat.extend(
                anchor[3..]
                    .iter()
                    .map(|&a| a + noise_sigma * gaussian(&mut rng)),
            );
            scene.coords.push(coord);
            scene.features.push(feat);
            scene.gt_labels.push(k);
        }
    }
    Ok(scene)
}

/// Draw a weak-label mask. `Ratio` targets `round(f * N)` points (promoted
/// to one per class when that falls short) and forces every class to appear:
/// a missed class deterministically displaces the latest pick of a
/// multiply-covered class. `OnePoint` picks one random point per class.
pub fn mask_labels(
    scene: &Scene,
    setting: &WeakSetting,
    seed: u64,
) -> Result<LabelMask, DataError> {
    setting.validate()?;
    scene.validate()?;
    let n = scene.len();
    let k = scene.num_classes;
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); k];
    for (i, &label) in scene.gt_labels.iter().enumerate() {
        by_class[label].push(i);
    }
    if let Some(empty) = by_class.iter().position(Vec::is_empty) {
        return Err(DataError::MissingClass(empty));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    match setting {
        WeakSetting::OnePoint => {
            let picks = by_class
                .iter()
                .map(|points| points[rng.gen_range(0..points.len())])
                .collect();
            LabelMask::new(picks, n)
        }
        WeakSetting::Ratio(f) => {
            let target = ((f * n as f64).round() as usize).clamp(k, n);
            // Partial Fisher-Yates: the first `target` entries of a shuffle.
            let mut pool: Vec<usize> = (0..n).collect();
            for i in 0..target {
                let j = rng.gen_range(i..n);
                pool.swap(i, j);
            }
            let mut picks: Vec<usize> = pool[..target].to_vec();
            let mut covered = vec![0usize; k];
            for &i in &picks {
                covered[scene.gt_labels[i]] += 1;
            }
            let selected: std::collections::HashSet<usize> = picks.iter().copied().collect();
            let mut selected = selected;
            for class in 0..k {
                if covered[class] > 0 {
                    continue;
                }
                // Swap in the lowest-index point of the missing class for the
                // most recent pick whose class keeps at least one point.
                let incoming = *by_class[class]
                    .iter()
                    .find(|i| !selected.contains(i))
                    .expect("class has points and none are selected");
                let victim = picks
                    .iter()
                    .rposition(|&i| covered[scene.gt_labels[i]] > 1)
                    .ok_or_else(|| {
                        DataError::InvalidMask(format!(
                            "cannot cover class {class}: no multiply-covered class to displace"
                        ))
                    })?;
                let outgoing = picks[victim];
                covered[scene.gt_labels[outgoing]] -= 1;
                covered[class] += 1;
                selected.remove(&outgoing);
                selected.insert(incoming);
                picks[victim] = incoming;
            }
            LabelMask::new(picks, n)
        }
    }
}

fn parse_field<T: std::str::FromStr>(
    field: Option<&str>,
    line: usize,
    what: &str,
) -> Result<T, DataError> {
    let raw = field.ok_or_else(|| DataError::Parse {
        line,
        message: format!("missing {what}"),
    })?;
    raw.parse().map_err(|_| DataError::Parse {
        line,
        message: format!("bad {what}: {raw:?}"),
    })
}

/// Serialize a scene to its text form.
pub fn format_scene(scene: &Scene) -> Result<String, DataError> {
    scene.validate()?;
    let width = scene.feature_width();
    let mut out = String::new();
    out.push_str(&format!("{} {} {}\n", scene.len(), width, scene.num_classes));
    for i in 0..scene.len() {
        let c = scene.coords[i];
        out.push_str(&format!("{} {} {}", c[0], c[1], c[2]));
        for v in &scene.features[i] {
            out.push_str(&format!(" {v}"));
        }
        out.push_str(&format!(" {}\n", scene.gt_labels[i]));
    }
    Ok(out)
}

/// Parse a scene from its text form; errors carry 1-based line numbers.
pub fn parse_scene(text: &str) -> Result<Scene, DataError> {
    let mut lines = text.lines().enumerate();
    let (_, header) = lines.next().ok_or(DataError::Parse {
        line: 1,
        message: "empty scene file".into(),
    })?;
    let mut fields = header.split_whitespace();
    let n: usize = parse_field(fields.next(), 1, "point count N")?;
    let width: usize = parse_field(fields.next(), 1, "feature width F")?;
    let k: usize = parse_field(fields.next(), 1, "class count K")?;
    if fields.next().is_some() {
        return Err(DataError::Parse {
            line: 1,
            message: "trailing fields in header".into(),
        });
    }
    let mut scene = Scene {
        coords: Vec::with_capacity(n),
        features: Vec::with_capacity(n),
        gt_labels: Vec::with_capacity(n),
        num_classes: k,
    };
    for (idx, raw) in lines {
        let line = idx + 1;
        if raw.trim().is_empty() {
            continue;
        }
        let mut fields = raw.split_whitespace();
        let x: f64 = parse_field(fields.next(), line, "x coordinate")?;
        let y: f64 = parse_field(fields.next(), line, "y coordinate")?;
        let z: f64 = parse_field(fields.next(), line, "z coordinate")?;
        let mut feat = Vec::with_capacity(width);
        for j in 0..width {
            feat.push(parse_field(fields.next(), line, &format!("feature {}", j + 1))?);
        }
        let label: usize = parse_field(fields.next(), line, "label")?;
        if fields.next().is_some() {
            return Err(DataError::Parse {
                line,
                message: "trailing fields after label".into(),
            });
        }
        if label >= k {
            return Err(DataError::Parse {
                line,
                message: format!("label {label} out of range for {k} classes"),
            });
        }
        scene.coords.push([x, y, z]);
        scene.features.push(feat);
        scene.gt_labels.push(label);
    }
    if scene.len() != n {
        return Err(DataError::Parse {
            line: 1,
            message: format!("header promises {n} points, file has {}", scene.len()),
        });
    }
    scene.validate()?;
    Ok(scene)
}

pub fn save_scene(scene: &Scene, path: &Path) -> Result<(), DataError> {
    let mut file = std::fs::File::create(path)?;
    file.write_all(format_scene(scene)?.as_bytes())?;
    Ok(())
}

pub fn load_scene(path: &Path) -> Result<Scene, DataError> {
    parse_scene(&std::fs::read_to_string(path)?)
}

pub fn format_mask(mask: &LabelMask) -> String {
    let mut out = String::new();
    for &i in mask.indices() {
        out.push_str(&format!("{i}\n"));
    }
    out
}

/// Parse a mask file (one ascending index per line) against a scene of
/// `num_points`.
pub fn parse_mask(text: &str, num_points: usize) -> Result<LabelMask, DataError> {
    let mut indices = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        if raw.trim().is_empty() {
            continue;
        }
        let value: usize = raw.trim().parse().map_err(|_| DataError::Parse {
            line,
            message: format!("bad point index: {raw:?}"),
        })?;
        if let Some(&prev) = indices.last() {
            if value <= prev {
                return Err(DataError::Parse {
                    line,
                    message: format!("indices must be strictly ascending: {value} after {prev}"),
                });
            }
        }
        if value >= num_points {
            return Err(DataError::Parse {
                line,
                message: format!("index {value} out of range for {num_points} points"),
            });
        }
        indices.push(value);
    }
    LabelMask::new(indices, num_points)
}

pub fn save_mask(mask: &LabelMask, path: &Path) -> Result<(), DataError> {
    let mut file = std::fs::File::create(path)?;
    file.write_all(format_mask(mask).as_bytes())?;
    Ok(())
}

pub fn load_mask(path: &Path, num_points: usize) -> Result<LabelMask, DataError> {
    parse_mask(&std::fs::read_to_string(path)?, num_points)
}
