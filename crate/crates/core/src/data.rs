//! Synthetic 2-D classification datasets, labeled/unlabeled splitting, and
//! weak/strong point augmentation.
//!
//! Ground-truth labels of unlabeled points are kept in a private field and
//! surface only through [`SslDataset::oracle_labels`]; no trainer reads them.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetKind {
    TwoMoons,
    Blobs,
    Rings,
}

impl std::fmt::Display for DatasetKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            DatasetKind::TwoMoons => "two_moons",
            DatasetKind::Blobs => "blobs",
            DatasetKind::Rings => "rings",
        };
        f.write_str(s)
    }
}

/// Row-major feature matrix for a batch of points.
#[derive(Clone, Debug)]
pub struct Batch {
    pub data: Vec<f64>,
    pub n: usize,
    pub dim: usize,
}

impl Batch {
    pub fn from_rows(rows: &[Vec<f64>]) -> Batch {
        let dim = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * dim);
        for r in rows {
            data.extend_from_slice(r);
        }
        Batch { data, n: rows.len(), dim }
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    /// Rows of `self` followed by rows of `other`.
    pub fn concat(&self, other: &Batch) -> Result<Batch> {
        if self.dim != other.dim {
            return Err(Error::ShapeMismatch {
                op: "batch concat",
                lhs: vec![self.n, self.dim],
                rhs: vec![other.n, other.dim],
            });
        }
        let mut data = Vec::with_capacity((self.n + other.n) * self.dim);
        data.extend_from_slice(&self.data);
        data.extend_from_slice(&other.data);
        Ok(Batch { data, n: self.n + other.n, dim: self.dim })
    }
}

/// Fully-labeled dataset as produced by the generators.
#[derive(Clone, Debug)]
pub struct LabeledSet {
    pub points: Vec<Vec<f64>>,
    pub labels: Vec<usize>,
    pub num_classes: usize,
    pub dim: usize,
}

/// Deterministic synthetic dataset; classes balanced within one point.
pub fn make_dataset(
    kind: DatasetKind,
    total: usize,
    noise: f64,
    num_classes: usize,
    seed: u64,
) -> Result<LabeledSet> {
    if noise < 0.0 {
        return Err(Error::Config(format!("noise must be >= 0, got {noise}")));
    }
    if num_classes < 2 {
        return Err(Error::Config(format!("num_classes must be >= 2, got {num_classes}")));
    }
    if total < 2 * num_classes {
        return Err(Error::Config(format!(
            "total {total} too small for {num_classes} classes (need >= {})",
            2 * num_classes
        )));
    }
    if matches!(kind, DatasetKind::TwoMoons | DatasetKind::Rings) && num_classes != 2 {
        return Err(Error::Config(format!("{kind} supports exactly 2 classes, got {num_classes}")));
    }
    let mut rng = crate::rng::from_seed(seed);
    let mut points = Vec::with_capacity(total);
    let mut labels = Vec::with_capacity(total);
    for i in 0..total {
        let class = i % num_classes; // round-robin keeps balance within +-1
        let point = match kind {
            DatasetKind::TwoMoons => {
                let t = rng.gen::<f64>() * std::f64::consts::PI;
                let (mut x, mut y) = if class == 0 {
                    (t.cos(), t.sin())
                } else {
                    (1.0 - t.cos(), 0.5 - t.sin())
                };
                if noise > 0.0 {
                    x += noise * rng.sample::<f64, _>(StandardNormal);
                    y += noise * rng.sample::<f64, _>(StandardNormal);
                }
                vec![x, y]
            }
            DatasetKind::Blobs => {
                let angle = 2.0 * std::f64::consts::PI * class as f64 / num_classes as f64;
                let (cx, cy) = (4.0 * angle.cos(), 4.0 * angle.sin());
                let dx = if noise > 0.0 { noise * rng.sample::<f64, _>(StandardNormal) } else { 0.0 };
                let dy = if noise > 0.0 { noise * rng.sample::<f64, _>(StandardNormal) } else { 0.0 };
                vec![cx + dx, cy + dy]
            }
            DatasetKind::Rings => {
                let angle = rng.gen::<f64>() * 2.0 * std::f64::consts::PI;
                let base = if class == 0 { 1.0 } else { 2.0 };
                let r = if noise > 0.0 {
                    base + noise * rng.sample::<f64, _>(StandardNormal)
                } else {
                    base
                };
                vec![r * angle.cos(), r * angle.sin()]
            }
        };
        points.push(point);
        labels.push(class);
    }
    Ok(LabeledSet { points, labels, num_classes, dim: 2 })
}

/// Labeled/unlabeled/test split for semi-supervised training.
#[derive(Clone, Debug)]
pub struct SslDataset {
    labeled_x: Vec<Vec<f64>>,
    labeled_y: Vec<usize>,
    unlabeled_x: Vec<Vec<f64>>,
    /// Ground truth of the unlabeled pool; diagnostics only.
    oracle_y: Option<Vec<usize>>,
    test_x: Vec<Vec<f64>>,
    test_y: Vec<usize>,
    pub num_classes: usize,
    pub dim: usize,
}

impl SslDataset {
    pub fn labeled(&self) -> (&[Vec<f64>], &[usize]) {
        (&self.labeled_x, &self.labeled_y)
    }

    pub fn unlabeled(&self) -> &[Vec<f64>] {
        &self.unlabeled_x
    }

    pub fn test(&self) -> (&[Vec<f64>], &[usize]) {
        (&self.test_x, &self.test_y)
    }

    pub fn n_labeled(&self) -> usize {
        self.labeled_x.len()
    }

    pub fn n_unlabeled(&self) -> usize {
        self.unlabeled_x.len()
    }

    /// Hidden ground truth of the unlabeled pool, for pseudo-label accuracy
    /// diagnostics only. Training paths must not call this.
    pub fn oracle_labels(&self) -> Option<&[usize]> {
        self.oracle_y.as_deref()
    }

    /// Swap the hidden labels; used by leakage audits to prove trainers
    /// never read them.
    pub fn replace_oracle_labels(&mut self, labels: Option<Vec<usize>>) {
        self.oracle_y = labels;
    }

    /// Mean of all training points (labeled + unlabeled); the rotation pivot
    /// for strong augmentation.
    pub fn centroid(&self) -> Vec<f64> {
        let mut c = vec![0.0; self.dim];
        let total = self.labeled_x.len() + self.unlabeled_x.len();
        for p in self.labeled_x.iter().chain(self.unlabeled_x.iter()) {
            for (acc, v) in c.iter_mut().zip(p) {
                *acc += v;
            }
        }
        if total > 0 {
            for v in &mut c {
                *v /= total as f64;
            }
        }
        c
    }
}

/// Split a full dataset into exactly `labels_per_class` labeled points per
/// class, a held-out test set, and the unlabeled remainder.
pub fn split_ssl(
    full: &LabeledSet,
    labels_per_class: usize,
    test_fraction: f64,
    seed: u64,
) -> Result<SslDataset> {
    let total = full.points.len();
    if !(0.0..1.0).contains(&test_fraction) {
        return Err(Error::Config(format!("test_fraction must be in [0,1), got {test_fraction}")));
    }
    if labels_per_class == 0 {
        return Err(Error::Config("labels_per_class must be >= 1".into()));
    }
    let budget = ((1.0 - test_fraction) * total as f64).floor() as usize;
    if labels_per_class * full.num_classes > budget {
        return Err(Error::Config(format!(
            "labels_per_class {} x {} classes exceeds the non-test budget {}",
            labels_per_class, full.num_classes, budget
        )));
    }
    let mut rng = crate::rng::from_seed(seed);
    let mut order: Vec<usize> = (0..total).collect();
    order.shuffle(&mut rng);

    let test_n = (test_fraction * total as f64).floor() as usize;
    let (test_idx, train_idx) = order.split_at(test_n);

    let mut picked = vec![false; total];
    let mut labeled_idx = Vec::with_capacity(labels_per_class * full.num_classes);
    for class in 0..full.num_classes {
        let mut need = labels_per_class;
        for &i in train_idx.iter() {
            if need == 0 {
                break;
            }
            if full.labels[i] == class {
                picked[i] = true;
                labeled_idx.push(i);
                need -= 1;
            }
        }
        if need > 0 {
            return Err(Error::Config(format!(
                "class {class} has too few training points for {labels_per_class} labels"
            )));
        }
    }

    let mut ds = SslDataset {
        labeled_x: labeled_idx.iter().map(|&i| full.points[i].clone()).collect(),
        labeled_y: labeled_idx.iter().map(|&i| full.labels[i]).collect(),
        unlabeled_x: Vec::new(),
        oracle_y: Some(Vec::new()),
        test_x: test_idx.iter().map(|&i| full.points[i].clone()).collect(),
        test_y: test_idx.iter().map(|&i| full.labels[i]).collect(),
        num_classes: full.num_classes,
        dim: full.dim,
    };
    for &i in train_idx.iter() {
        if !picked[i] {
            ds.unlabeled_x.push(full.points[i].clone());
            ds.oracle_y.as_mut().unwrap().push(full.labels[i]);
        }
    }
    Ok(ds)
}

/// Point augmentation parameters. Weak is Gaussian jitter; strong is a
/// random rotation about the training-set centroid followed by jitter.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentationSpec {
    pub weak_jitter_std: f64,
    pub strong_jitter_std: f64,
    pub strong_rotation_max_deg: f64,
    pub seed: u64,
}

impl Default for AugmentationSpec {
    fn default() -> Self {
        AugmentationSpec {
            weak_jitter_std: 0.08,
            strong_jitter_std: 0.12,
            strong_rotation_max_deg: 10.0,
            seed: 0,
        }
    }
}

impl AugmentationSpec {
    pub fn validate(&self) -> Result<()> {
        if self.weak_jitter_std < 0.0 || self.strong_jitter_std < self.weak_jitter_std {
            return Err(Error::Config(
                "require 0 <= weak_jitter_std <= strong_jitter_std".into(),
            ));
        }
        if !(0.0..=180.0).contains(&self.strong_rotation_max_deg) {
            return Err(Error::Config(format!(
                "strong_rotation_max_deg must be in [0,180], got {}",
                self.strong_rotation_max_deg
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Strength {
    Weak,
    Strong,
}

/// Rotate a 2-D point about a pivot by `angle_deg`.
pub fn rotate_about(x: &[f64], centroid: &[f64], angle_deg: f64) -> Vec<f64> {
    let rad = angle_deg.to_radians();
    let (s, c) = rad.sin_cos();
    let dx = x[0] - centroid[0];
    let dy = x[1] - centroid[1];
    vec![centroid[0] + c * dx - s * dy, centroid[1] + s * dx + c * dy]
}

/// One augmented view of `x`. Zero-parameter specs return `x` unchanged and
/// draw nothing from the RNG. Rotation applies only to 2-D inputs.
pub fn augment(
    x: &[f64],
    spec: &AugmentationSpec,
    strength: Strength,
    centroid: &[f64],
    rng: &mut ChaCha8Rng,
) -> Vec<f64> {
    let mut out = x.to_vec();
    if strength == Strength::Strong && spec.strong_rotation_max_deg > 0.0 && x.len() == 2 {
        let angle = rng.gen_range(-spec.strong_rotation_max_deg..=spec.strong_rotation_max_deg);
        out = rotate_about(&out, centroid, angle);
    }
    let std = match strength {
        Strength::Weak => spec.weak_jitter_std,
        Strength::Strong => spec.strong_jitter_std,
    };
    if std > 0.0 {
        for v in &mut out {
            *v += std * rng.sample::<f64, _>(StandardNormal);
        }
    }
    out
}

/// Coupled labeled/unlabeled batch stream: `labeled_batch` labeled and
/// `mu * labeled_batch` unlabeled indices per step, cycling with per-epoch
/// reshuffles on each side independently.
pub struct BatchSampler {
    labeled_order: Vec<usize>,
    labeled_pos: usize,
    unlabeled_order: Vec<usize>,
    unlabeled_pos: usize,
    rng: ChaCha8Rng,
    pub labeled_batch: usize,
    pub mu: usize,
}

impl BatchSampler {
    pub fn new(ds: &SslDataset, labeled_batch: usize, mu: usize, seed: u64) -> Result<Self> {
        if labeled_batch == 0 || mu == 0 {
            return Err(Error::Config("labeled_batch and mu must be >= 1".into()));
        }
        if ds.n_labeled() == 0 || ds.n_unlabeled() == 0 {
            return Err(Error::Config("sampler requires nonempty labeled and unlabeled splits".into()));
        }
        let mut rng = crate::rng::from_seed(seed);
        let mut labeled_order: Vec<usize> = (0..ds.n_labeled()).collect();
        labeled_order.shuffle(&mut rng);
        let mut unlabeled_order: Vec<usize> = (0..ds.n_unlabeled()).collect();
        unlabeled_order.shuffle(&mut rng);
        Ok(BatchSampler {
            labeled_order,
            labeled_pos: 0,
            unlabeled_order,
            unlabeled_pos: 0,
            rng,
            labeled_batch,
            mu,
        })
    }

    fn draw(order: &mut Vec<usize>, pos: &mut usize, rng: &mut ChaCha8Rng, count: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(count);
        while out.len() < count {
            if *pos == order.len() {
                order.shuffle(rng);
                *pos = 0;
            }
            out.push(order[*pos]);
            *pos += 1;
        }
        out
    }

    /// Indices of the next coupled batch pair.
    pub fn next_indices(&mut self) -> (Vec<usize>, Vec<usize>) {
        let l = Self::draw(&mut self.labeled_order, &mut self.labeled_pos, &mut self.rng, self.labeled_batch);
        let u = Self::draw(
            &mut self.unlabeled_order,
            &mut self.unlabeled_pos,
            &mut self.rng,
            self.mu * self.labeled_batch,
        );
        (l, u)
    }
}

// CSV dump/load: header `x0,..,xd-1,label,split`; unlabeled rows carry -1.

pub fn save_csv(ds: &SslDataset, path: &Path) -> Result<()> {
    let mut out = String::new();
    for d in 0..ds.dim {
        out.push_str(&format!("x{d},"));
    }
    out.push_str("label,split\n");
    let mut write_row = |x: &[f64], label: i64, split: &str| {
        for v in x {
            out.push_str(&format!("{v},"));
        }
        out.push_str(&format!("{label},{split}\n"));
    };
    for (x, y) in ds.labeled_x.iter().zip(&ds.labeled_y) {
        write_row(x, *y as i64, "labeled");
    }
    for x in &ds.unlabeled_x {
        write_row(x, -1, "unlabeled");
    }
    for (x, y) in ds.test_x.iter().zip(&ds.test_y) {
        write_row(x, *y as i64, "test");
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn load_csv(path: &Path) -> Result<SslDataset> {
    let text = fs::read_to_string(path)?;
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| Error::Parse("empty dataset csv".into()))?;
    let cols: Vec<&str> = header.split(',').collect();
    if cols.len() < 4 || cols[cols.len() - 2] != "label" || cols[cols.len() - 1] != "split" {
        return Err(Error::Parse(format!("unexpected dataset header `{header}`")));
    }
    let dim = cols.len() - 2;
    let mut ds = SslDataset {
        labeled_x: Vec::new(),
        labeled_y: Vec::new(),
        unlabeled_x: Vec::new(),
        oracle_y: None, // ground truth is not exported
        test_x: Vec::new(),
        test_y: Vec::new(),
        num_classes: 0,
        dim,
    };
    for (lineno, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let parts: Vec<&str> = line.split(',').collect();
        if parts.len() != dim + 2 {
            return Err(Error::Parse(format!("row {}: expected {} fields", lineno + 2, dim + 2)));
        }
        let mut x = Vec::with_capacity(dim);
        for p in &parts[..dim] {
            x.push(p.parse::<f64>().map_err(|e| Error::Parse(format!("row {}: {e}", lineno + 2)))?);
        }
        let label: i64 =
            parts[dim].parse().map_err(|e| Error::Parse(format!("row {}: {e}", lineno + 2)))?;
        match parts[dim + 1] {
            "labeled" => {
                ds.labeled_x.push(x);
                ds.labeled_y.push(label as usize);
            }
            "unlabeled" => ds.unlabeled_x.push(x),
            "test" => {
                ds.test_x.push(x);
                ds.test_y.push(label as usize);
            }
            other => return Err(Error::Parse(format!("row {}: unknown split `{other}`", lineno + 2))),
        }
    }
    ds.num_classes = ds
        .labeled_y
        .iter()
        .chain(ds.test_y.iter())
        .max()
        .map_or(0, |m| m + 1)
        .max(2);
    Ok(ds)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    #[test]
    fn two_moons_noiseless_points_lie_on_arcs() {
        let ds = make_dataset(DatasetKind::TwoMoons, 100, 0.0, 2, 3).unwrap();
        for (p, &y) in ds.points.iter().zip(&ds.labels) {
            let d = if y == 0 {
                ((p[0].powi(2) + p[1].powi(2)).sqrt() - 1.0).abs().max(if p[1] >= -1e-12 { 0.0 } else { 1.0 })
            } else {
                let (dx, dy) = (p[0] - 1.0, p[1] - 0.5);
                ((dx * dx + dy * dy).sqrt() - 1.0).abs().max(if dy <= 1e-12 { 0.0 } else { 1.0 })
            };
            assert!(d < 1e-9, "point {p:?} class {y} off arc by {d}");
        }
    }

    #[test]
    fn blobs_are_exactly_balanced() {
        let ds = make_dataset(DatasetKind::Blobs, 90, 0.5, 3, 1).unwrap();
        let mut counts = [0usize; 3];
        for &y in &ds.labels {
            counts[y] += 1;
        }
        assert_eq!(counts, [30, 30, 30]);
    }

    #[test]
    fn moons_reject_three_classes() {
        assert!(matches!(
            make_dataset(DatasetKind::TwoMoons, 60, 0.1, 3, 0),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn generators_are_deterministic() {
        let a = make_dataset(DatasetKind::Rings, 64, 0.05, 2, 9).unwrap();
        let b = make_dataset(DatasetKind::Rings, 64, 0.05, 2, 9).unwrap();
        assert_eq!(a.points, b.points);
        assert_eq!(a.labels, b.labels);
    }

    #[test]
    fn split_counts_and_partition() {
        let full = make_dataset(DatasetKind::TwoMoons, 1000, 0.1, 2, 5).unwrap();
        let ds = split_ssl(&full, 4, 0.2, 7).unwrap();
        assert_eq!(ds.n_labeled(), 8);
        assert_eq!(ds.test().0.len(), 200);
        assert_eq!(ds.n_labeled() + ds.n_unlabeled() + ds.test().0.len(), 1000);

        // per-class balance is exact
        for class in 0..2 {
            assert_eq!(ds.labeled().1.iter().filter(|&&y| y == class).count(), 4);
        }

        // partition: every original point appears exactly once
        let key = |p: &[f64]| (p[0].to_bits(), p[1].to_bits());
        let mut seen: HashSet<(u64, u64)> = HashSet::new();
        for p in ds
            .labeled()
            .0
            .iter()
            .chain(ds.unlabeled().iter())
            .chain(ds.test().0.iter())
        {
            assert!(seen.insert(key(p)), "duplicate point {p:?}");
        }
        for p in &full.points {
            assert!(seen.contains(&key(p)), "missing point {p:?}");
        }
    }

    #[test]
    fn split_rejects_insufficient_points() {
        let full = make_dataset(DatasetKind::TwoMoons, 20, 0.1, 2, 5).unwrap();
        assert!(matches!(split_ssl(&full, 15, 0.2, 7), Err(Error::Config(_))));
    }

    #[test]
    fn augment_zero_spec_is_identity() {
        let spec = AugmentationSpec {
            weak_jitter_std: 0.0,
            strong_jitter_std: 0.0,
            strong_rotation_max_deg: 0.0,
            seed: 0,
        };
        let mut rng = crate::rng::from_seed(0);
        let x = vec![0.3, -0.7];
        assert_eq!(augment(&x, &spec, Strength::Strong, &[0.0, 0.0], &mut rng), x);
        assert_eq!(augment(&x, &spec, Strength::Weak, &[0.0, 0.0], &mut rng), x);
    }

    #[test]
    fn rotation_by_quarter_turn() {
        let rotated = rotate_about(&[1.0, 0.0], &[0.0, 0.0], 90.0);
        assert!((rotated[0]).abs() < 1e-12);
        assert!((rotated[1] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn weak_jitter_is_unbiased() {
        let spec = AugmentationSpec {
            weak_jitter_std: 0.1,
            strong_jitter_std: 0.2,
            strong_rotation_max_deg: 0.0,
            seed: 0,
        };
        let mut rng = crate::rng::from_seed(13);
        let x = vec![1.0, 2.0];
        let n = 10_000;
        let mut mean = [0.0f64; 2];
        for _ in 0..n {
            let a = augment(&x, &spec, Strength::Weak, &[0.0, 0.0], &mut rng);
            mean[0] += a[0] - x[0];
            mean[1] += a[1] - x[1];
        }
        for m in mean {
            // 3 sigma of the mean of n draws with std 0.1
            assert!((m / n as f64).abs() < 3.0 * 0.1 / (n as f64).sqrt());
        }
    }

    #[test]
    fn sampler_batch_sizes_follow_mu() {
        let full = make_dataset(DatasetKind::TwoMoons, 1200, 0.1, 2, 5).unwrap();
        let ds = split_ssl(&full, 16, 0.2, 7).unwrap();
        let mut s = BatchSampler::new(&ds, 64, 7, 1).unwrap();
        let (l, u) = s.next_indices();
        assert_eq!(l.len(), 64);
        assert_eq!(u.len(), 448);

        let mut s1 = BatchSampler::new(&ds, 32, 1, 1).unwrap();
        let (l1, u1) = s1.next_indices();
        assert_eq!(l1.len(), u1.len());
    }

    #[test]
    fn sampler_visits_labeled_points_evenly() {
        let full = make_dataset(DatasetKind::TwoMoons, 200, 0.1, 2, 5).unwrap();
        let ds = split_ssl(&full, 5, 0.2, 7).unwrap(); // n = 10
        let mut s = BatchSampler::new(&ds, 64, 1, 3).unwrap();
        let steps = 25;
        let mut counts = vec![0usize; ds.n_labeled()];
        for _ in 0..steps {
            let (l, _) = s.next_indices();
            for i in l {
                counts[i] += 1;
            }
        }
        let expected = (steps * 64) as f64 / ds.n_labeled() as f64;
        for c in counts {
            assert!((c as f64 - expected).abs() <= 1.0, "count {c} vs expected {expected}");
        }
    }

    #[test]
    fn sampler_rejects_empty_splits() {
        let full = make_dataset(DatasetKind::TwoMoons, 20, 0.1, 2, 5).unwrap();
        // labels_per_class consumes the whole training pool: unlabeled empty
        let ds = split_ssl(&full, 8, 0.2, 7).unwrap();
        assert_eq!(ds.n_unlabeled(), 0);
        assert!(matches!(BatchSampler::new(&ds, 4, 1, 1), Err(Error::Config(_))));
    }

    #[test]
    fn sampler_is_deterministic() {
        let full = make_dataset(DatasetKind::TwoMoons, 300, 0.1, 2, 5).unwrap();
        let ds = split_ssl(&full, 4, 0.2, 7).unwrap();
        let mut a = BatchSampler::new(&ds, 8, 2, 11).unwrap();
        let mut b = BatchSampler::new(&ds, 8, 2, 11).unwrap();
        for _ in 0..20 {
            assert_eq!(a.next_indices(), b.next_indices());
        }
    }

    #[test]
    fn csv_round_trip_preserves_splits() {
        let full = make_dataset(DatasetKind::Blobs, 60, 0.4, 3, 2).unwrap();
        let ds = split_ssl(&full, 3, 0.25, 4).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ds.csv");
        save_csv(&ds, &path).unwrap();
        let loaded = load_csv(&path).unwrap();
        assert_eq!(loaded.labeled().0, ds.labeled().0);
        assert_eq!(loaded.labeled().1, ds.labeled().1);
        assert_eq!(loaded.unlabeled(), ds.unlabeled());
        assert_eq!(loaded.test().0, ds.test().0);
        // ground truth of unlabeled points is not exported
        assert!(loaded.oracle_labels().is_none());
    }
}
