//! Measurement apparatus: the sharpness probe, 1-D/2-D loss-landscape scans,
//! and the gradient-angle diagnostic.
//!
//! Landscape cells are independent and evaluated in parallel; results merge
//! by grid index, so values are identical for any worker count.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Batch;
use crate::error::{Error, Result};
use crate::losses::{consistency_loss, cross_entropy, pseudo_targets_from, MaskedTargets};
use crate::model::{perturb, random_direction, MlpSpec, ParamVector};
use crate::optim::sam_perturbation;
use crate::tensor::Tape;

#[derive(Clone, Copy, Debug)]
pub struct GradientAngle {
    pub degrees: f64,
    /// Set when either input had (numerically) zero norm; the angle is then
    /// reported as 0 instead of NaN.
    pub degenerate: bool,
}

/// Angle in degrees between two gradients, clamped into [0, 180].
pub fn gradient_angle(a: &ParamVector, b: &ParamVector) -> GradientAngle {
    let (na, nb) = (a.l2_norm(), b.l2_norm());
    if na < 1e-300 || nb < 1e-300 {
        return GradientAngle { degrees: 0.0, degenerate: true };
    }
    if a.values() == b.values() {
        // identical objectives must read exactly zero, not rounding noise
        return GradientAngle { degrees: 0.0, degenerate: false };
    }
    let cos = a
        .values()
        .iter()
        .zip(b.values())
        .map(|(x, y)| (x / na) * (y / nb))
        .sum::<f64>()
        .clamp(-1.0, 1.0);
    GradientAngle { degrees: cos.acos().to_degrees(), degenerate: false }
}

#[derive(Clone, Copy, Debug)]
pub struct SharpnessReport {
    /// Loss increase at the worst-case perturbation, `L(theta+eps*) - L(theta)`.
    pub value: f64,
    pub eps_norm: f64,
    pub degenerate: bool,
}

/// Generic sharpness probe: `loss` is evaluated at `theta + eps*` where
/// `eps*` comes from the supplied gradient at `theta`.
pub fn sharpness_probe_fn(
    loss: &mut dyn FnMut(&ParamVector) -> Result<f64>,
    grad_at_theta: &ParamVector,
    theta: &ParamVector,
    rho: f64,
) -> Result<SharpnessReport> {
    if rho <= 0.0 {
        return Err(Error::Contract(format!("probe rho must be > 0, got {rho}")));
    }
    let p = sam_perturbation(grad_at_theta, rho)?;
    if p.degenerate {
        return Ok(SharpnessReport { value: 0.0, eps_norm: 0.0, degenerate: true });
    }
    let base = loss(theta)?;
    let moved = perturb(theta, &p.epsilon)?;
    let after = loss(&moved)?;
    Ok(SharpnessReport { value: after - base, eps_norm: p.epsilon.l2_norm(), degenerate: false })
}

/// Cross-entropy sharpness of a model on a probe batch with (pseudo-)labels.
pub fn sharpness_probe(
    model: &MlpSpec,
    theta: &ParamVector,
    xs: &Batch,
    labels: &[usize],
    rho: f64,
) -> Result<SharpnessReport> {
    let tape = Tape::new();
    let params = model.bind(&tape, theta, true)?;
    let x = tape.leaf(&[xs.n, xs.dim], xs.data.clone(), false)?;
    let loss_t = cross_entropy(&model.apply(&params, &x)?, labels)?;
    loss_t.backward()?;
    let grad = params.grad_vector();
    let mut loss = |point: &ParamVector| -> Result<f64> {
        let tape = Tape::new();
        let params = model.bind(&tape, point, false)?;
        let x = tape.leaf(&[xs.n, xs.dim], xs.data.clone(), false)?;
        cross_entropy(&model.apply(&params, &x)?, labels)?.item()
    };
    sharpness_probe_fn(&mut loss, &grad, theta, rho)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProbeTag {
    Labeled,
    Unlabeled,
}

/// Loss functional scanned by the landscape instruments.
pub enum ProbeData<'a> {
    /// Cross-entropy against true labels.
    Labeled { xs: &'a Batch, ys: &'a [usize] },
    /// Consistency against pseudo-targets frozen once at the base point, so
    /// every grid cell measures the same functional.
    Unlabeled { xs: &'a Batch, tau: f64 },
}

impl ProbeData<'_> {
    fn tag(&self) -> ProbeTag {
        match self {
            ProbeData::Labeled { .. } => ProbeTag::Labeled,
            ProbeData::Unlabeled { .. } => ProbeTag::Unlabeled,
        }
    }
}

enum ProbeLoss<'a> {
    Ce { xs: &'a Batch, ys: &'a [usize] },
    Consistency { xs: &'a Batch, targets: MaskedTargets },
}

impl ProbeLoss<'_> {
    fn eval(&self, model: &MlpSpec, point: &ParamVector) -> Result<f64> {
        let tape = Tape::new();
        match self {
            ProbeLoss::Ce { xs, ys } => {
                let params = model.bind(&tape, point, false)?;
                let x = tape.leaf(&[xs.n, xs.dim], xs.data.clone(), false)?;
                cross_entropy(&model.apply(&params, &x)?, ys)?.item()
            }
            ProbeLoss::Consistency { xs, targets } => {
                let params = model.bind(&tape, point, false)?;
                let x = tape.leaf(&[xs.n, xs.dim], xs.data.clone(), false)?;
                consistency_loss(&model.apply(&params, &x)?, targets)?.item()
            }
        }
    }
}

fn freeze_probe<'a>(model: &MlpSpec, theta: &ParamVector, probe: &'a ProbeData) -> Result<ProbeLoss<'a>> {
    match probe {
        ProbeData::Labeled { xs, ys } => Ok(ProbeLoss::Ce { xs, ys }),
        ProbeData::Unlabeled { xs, tau } => {
            let anchors = model.logits(theta, xs)?;
            let targets = pseudo_targets_from(&anchors, xs.n, model.num_classes, *tau)?;
            Ok(ProbeLoss::Consistency { xs, targets })
        }
    }
}

/// Loss values over a line or plane through parameter space.
#[derive(Clone, Debug)]
pub struct LandscapeGrid {
    pub offsets_a: Vec<f64>,
    /// `[0.0]` for 1-D scans.
    pub offsets_b: Vec<f64>,
    /// Row-major over (a, b).
    pub loss: Vec<f64>,
    pub tag: ProbeTag,
    pub seeds: (u64, Option<u64>),
    pub filter_normalized: bool,
}

fn symmetric_offsets(range: f64, num_points: usize, what: &str) -> Result<Vec<f64>> {
    if num_points < 3 {
        return Err(Error::Config(format!("{what} needs at least 3 points, got {num_points}")));
    }
    if num_points % 2 == 0 {
        return Err(Error::Config(format!(
            "{what} needs an odd point count so the grid contains offset zero, got {num_points}"
        )));
    }
    if range <= 0.0 {
        return Err(Error::Config(format!("{what} range must be > 0, got {range}")));
    }
    let half = (num_points / 2) as f64;
    Ok((0..num_points).map(|i| (i as f64 - half) / half * range).collect())
}

fn point_at(theta: &ParamVector, dirs: &[(&ParamVector, f64)]) -> Result<ParamVector> {
    // Zero offsets reuse theta directly: the center cell reproduces the
    // unperturbed loss bit for bit.
    if dirs.iter().all(|(_, t)| *t == 0.0) {
        return Ok(theta.clone());
    }
    let mut p = theta.clone();
    for (d, t) in dirs {
        p.axpy(*t, d)?;
    }
    Ok(p)
}

/// Loss curve along a seeded random direction through `theta`.
pub fn landscape_1d(
    model: &MlpSpec,
    theta: &ParamVector,
    probe: &ProbeData,
    seed: u64,
    t_range: f64,
    num_points: usize,
    filter_normalized: bool,
) -> Result<LandscapeGrid> {
    let offsets = symmetric_offsets(t_range, num_points, "landscape_1d")?;
    let dir = random_direction(theta, seed, filter_normalized);
    let loss_fn = freeze_probe(model, theta, probe)?;
    let loss = offsets
        .par_iter()
        .map(|&t| loss_fn.eval(model, &point_at(theta, &[(&dir, t)])?))
        .collect::<Result<Vec<f64>>>()?;
    Ok(LandscapeGrid {
        offsets_a: offsets,
        offsets_b: vec![0.0],
        loss,
        tag: probe.tag(),
        seeds: (seed, None),
        filter_normalized,
    })
}

/// Loss surface over a plane spanned by two seeded random directions.
pub fn landscape_2d(
    model: &MlpSpec,
    theta: &ParamVector,
    probe: &ProbeData,
    seeds: (u64, u64),
    range: f64,
    n: usize,
    filter_normalized: bool,
) -> Result<LandscapeGrid> {
    let offsets = symmetric_offsets(range, n, "landscape_2d")?;
    let d1 = random_direction(theta, seeds.0, filter_normalized);
    let d2 = random_direction(theta, seeds.1, filter_normalized);
    let loss_fn = freeze_probe(model, theta, probe)?;
    let cells: Vec<(usize, usize)> = (0..n).flat_map(|i| (0..n).map(move |j| (i, j))).collect();
    let loss = cells
        .par_iter()
        .map(|&(i, j)| loss_fn.eval(model, &point_at(theta, &[(&d1, offsets[i]), (&d2, offsets[j])])?))
        .collect::<Result<Vec<f64>>>()?;
    Ok(LandscapeGrid {
        offsets_a: offsets.clone(),
        offsets_b: offsets,
        loss,
        tag: probe.tag(),
        seeds: (seeds.0, Some(seeds.1)),
        filter_normalized,
    })
}

impl LandscapeGrid {
    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.loss[i * self.offsets_b.len() + j]
    }

    /// Central second difference along `a` at the grid center; a curvature
    /// proxy for flatness comparisons.
    pub fn center_second_difference(&self) -> Option<f64> {
        let n = self.offsets_a.len();
        if n < 3 || self.offsets_b.len() != 1 {
            return None;
        }
        let c = n / 2;
        let h = self.offsets_a[c + 1] - self.offsets_a[c];
        Some((self.loss[c + 1] - 2.0 * self.loss[c] + self.loss[c - 1]) / (h * h))
    }

    /// `a,b,loss` rows (1-D grids use b = 0).
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut out = String::from("a,b,loss\n");
        for (i, a) in self.offsets_a.iter().enumerate() {
            for (j, b) in self.offsets_b.iter().enumerate() {
                let _ = writeln!(out, "{a},{b},{}", self.at(i, j));
            }
        }
        fs::write(path, out)?;
        Ok(())
    }

    /// JSON header describing how the grid was produced.
    pub fn write_header_json(&self, path: &Path) -> Result<()> {
        let header = serde_json::json!({
            "tag": self.tag,
            "seeds": [self.seeds.0, self.seeds.1],
            "range_a": self.offsets_a.last().copied().unwrap_or(0.0),
            "range_b": if self.offsets_b.len() > 1 { self.offsets_b.last().copied() } else { None },
            "points_a": self.offsets_a.len(),
            "points_b": self.offsets_b.len(),
            "filter_normalized": self.filter_normalized,
        });
        fs::write(path, serde_json::to_string_pretty(&header).map_err(|e| Error::Parse(e.to_string()))?)?;
        Ok(())
    }
}

/// Fraction of unlabeled points whose current model prediction matches the
/// hidden ground truth. Diagnostics only.
pub fn pseudo_label_accuracy(model: &MlpSpec, theta: &ParamVector, ds: &crate::data::SslDataset) -> Result<Option<f64>> {
    let Some(truth) = ds.oracle_labels() else {
        return Ok(None);
    };
    let xs = Batch::from_rows(ds.unlabeled());
    let logits = model.logits(theta, &xs)?;
    Ok(Some(crate::losses::accuracy(&logits, xs.n, model.num_classes, truth)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn quad_theta(values: Vec<f64>) -> ParamVector {
        let spec = MlpSpec::new(1, vec![], 2).unwrap();
        ParamVector::from_values(spec.layout(), values).unwrap()
    }

    fn quad_loss(p: &ParamVector) -> Result<f64> {
        Ok(0.5 * p.values().iter().map(|v| v * v).sum::<f64>())
    }

    fn quad_grad(p: &ParamVector) -> ParamVector {
        ParamVector::from_values(p.layout().clone(), p.values().to_vec()).unwrap()
    }

    #[test]
    fn angle_hand_cases() {
        let a = quad_theta(vec![1.0, 0.0, 0.0, 0.0]);
        let b = quad_theta(vec![2.0, 0.0, 0.0, 0.0]);
        assert_abs_diff_eq!(gradient_angle(&a, &b).degrees, 0.0, epsilon = 1e-12);

        let c = quad_theta(vec![0.0, 3.0, 0.0, 0.0]);
        assert_abs_diff_eq!(gradient_angle(&a, &c).degrees, 90.0, epsilon = 1e-9);

        let d = quad_theta(vec![-1.0, 0.0, 0.0, 0.0]);
        assert_abs_diff_eq!(gradient_angle(&a, &d).degrees, 180.0, epsilon = 1e-9);
    }

    #[test]
    fn angle_zero_vector_is_flagged() {
        let a = quad_theta(vec![0.0; 4]);
        let b = quad_theta(vec![1.0, 2.0, 3.0, 4.0]);
        let r = gradient_angle(&a, &b);
        assert!(r.degenerate);
        assert_eq!(r.degrees, 0.0);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn angle_invariant_to_positive_scaling(
            s1 in 0.001f64..1000.0,
            s2 in 0.001f64..1000.0,
            vals in proptest::collection::vec(-3.0f64..3.0, 8),
        ) {
            let a = quad_theta(vals[..4].to_vec());
            let b = quad_theta(vals[4..].to_vec());
            prop_assume!(a.l2_norm() > 1e-6 && b.l2_norm() > 1e-6);
            let mut a2 = a.clone();
            a2.scale(s1);
            let mut b2 = b.clone();
            b2.scale(s2);
            let base = gradient_angle(&a, &b).degrees;
            let scaled = gradient_angle(&a2, &b2).degrees;
            prop_assert!((base - scaled).abs() < 1e-9);
        }
    }

    #[test]
    fn sharpness_quadratic_closed_form() {
        // f = 0.5||theta||^2 at theta=(1,0,...): eps* = (rho,0,..),
        // sharpness = 0.5((1+rho)^2 - 1) = rho + rho^2/2; at rho=0.1: 0.105.
        let theta = quad_theta(vec![1.0, 0.0, 0.0, 0.0]);
        let grad = quad_grad(&theta);
        let mut f = |p: &ParamVector| quad_loss(p);
        let r = sharpness_probe_fn(&mut f, &grad, &theta, 0.1).unwrap();
        assert_abs_diff_eq!(r.value, 0.105, epsilon = 1e-12);
    }

    #[test]
    fn sharpness_at_stationary_point_is_flagged_zero() {
        let theta = quad_theta(vec![0.0; 4]);
        let grad = quad_grad(&theta);
        let mut f = |p: &ParamVector| quad_loss(p);
        let r = sharpness_probe_fn(&mut f, &grad, &theta, 0.1).unwrap();
        assert!(r.degenerate);
        assert_eq!(r.value, 0.0);
    }

    #[test]
    fn sharpness_nondecreasing_in_rho_on_quadratic() {
        let theta = quad_theta(vec![0.6, -0.8, 0.0, 0.0]);
        let grad = quad_grad(&theta);
        let mut prev = 0.0;
        for rho in [0.01, 0.05, 0.1, 0.5, 1.0] {
            let mut f = |p: &ParamVector| quad_loss(p);
            let r = sharpness_probe_fn(&mut f, &grad, &theta, rho).unwrap();
            assert!(r.value >= prev, "rho {rho}: {} < {prev}", r.value);
            prev = r.value;
        }
    }

    #[test]
    fn sharpness_first_order_lower_bound() {
        // sharpness >= rho*||grad|| - C*rho^2 with C a local curvature fit.
        let model = MlpSpec::new(2, vec![4], 2).unwrap();
        let theta = model.init_params(3);
        let xs = Batch::from_rows(&[vec![0.5, -0.1], vec![-0.4, 0.9], vec![0.2, 0.3]]);
        let ys = vec![0, 1, 0];
        let rho = 1e-3;
        let r = sharpness_probe(&model, &theta, &xs, &ys, rho).unwrap();
        assert!(!r.degenerate);

        let tape = Tape::new();
        let params = model.bind(&tape, &theta, true).unwrap();
        let x = tape.leaf(&[xs.n, xs.dim], xs.data.clone(), false).unwrap();
        cross_entropy(&model.apply(&params, &x).unwrap(), &ys).unwrap().backward().unwrap();
        let gnorm = params.grad_vector().l2_norm();
        assert!(gnorm > 1e-3);
        // fit the quadratic coefficient from a doubled radius
        let r2 = sharpness_probe(&model, &theta, &xs, &ys, 2.0 * rho).unwrap();
        let c = ((r2.value - 2.0 * r.value) / (2.0 * rho * rho)).abs();
        assert!(r.value >= rho * gnorm - c * rho * rho - 1e-12, "{} vs {}", r.value, rho * gnorm);
    }

    #[test]
    fn landscape_zero_offset_is_bit_exact_and_quadratic_matches() {
        let model = MlpSpec::new(1, vec![], 2).unwrap();
        let theta = ParamVector::from_values(model.layout(), vec![0.7, -0.3, 0.1, 0.4]).unwrap();
        let xs = Batch::from_rows(&[vec![1.0], vec![-0.5]]);
        let ys = vec![0, 1];
        let probe = ProbeData::Labeled { xs: &xs, ys: &ys };
        let grid = landscape_1d(&model, &theta, &probe, 7, 0.5, 9, false).unwrap();

        let direct = {
            let tape = Tape::new();
            let params = model.bind(&tape, &theta, false).unwrap();
            let x = tape.leaf(&[2, 1], xs.data.clone(), false).unwrap();
            cross_entropy(&model.apply(&params, &x).unwrap(), &ys).unwrap().item().unwrap()
        };
        assert_eq!(grid.loss[4].to_bits(), direct.to_bits());
    }

    #[test]
    fn landscape_1d_matches_analytic_parabola() {
        // Scan the generic quadratic through the functional interface by
        // driving the same math the scanner uses.
        let theta = quad_theta(vec![0.3, 0.4, 0.0, 0.0]);
        let dir = random_direction(&theta, 5, false);
        let offsets = symmetric_offsets(1.0, 11, "test").unwrap();
        for &t in &offsets {
            let p = point_at(&theta, &[(&dir, t)]).unwrap();
            let got = quad_loss(&p).unwrap();
            // analytic: 0.5||theta + t d||^2
            let expect: f64 = 0.5
                * theta
                    .values()
                    .iter()
                    .zip(dir.values())
                    .map(|(a, d)| (a + t * d) * (a + t * d))
                    .sum::<f64>();
            assert_abs_diff_eq!(got, expect, epsilon = 1e-9);
        }
    }

    #[test]
    fn landscape_2d_center_cell_and_finiteness() {
        let model = MlpSpec::new(2, vec![3], 2).unwrap();
        let theta = model.init_params(11);
        let xs = Batch::from_rows(&[vec![0.2, 0.8], vec![-0.6, 0.1], vec![0.4, -0.4]]);
        let probe = ProbeData::Unlabeled { xs: &xs, tau: 0.0 };
        let grid = landscape_2d(&model, &theta, &probe, (3, 4), 0.8, 5, true).unwrap();
        assert!(grid.loss.iter().all(|v| v.is_finite()));

        let anchors = model.logits(&theta, &xs).unwrap();
        let targets = pseudo_targets_from(&anchors, 3, 2, 0.0).unwrap();
        let direct = {
            let tape = Tape::new();
            let params = model.bind(&tape, &theta, false).unwrap();
            let x = tape.leaf(&[3, 2], xs.data.clone(), false).unwrap();
            consistency_loss(&model.apply(&params, &x).unwrap(), &targets).unwrap().item().unwrap()
        };
        assert_eq!(grid.at(2, 2).to_bits(), direct.to_bits());
    }

    #[test]
    fn landscape_rejects_even_point_counts() {
        let model = MlpSpec::new(2, vec![3], 2).unwrap();
        let theta = model.init_params(0);
        let xs = Batch::from_rows(&[vec![0.0, 0.0]]);
        let ys = vec![0];
        let probe = ProbeData::Labeled { xs: &xs, ys: &ys };
        assert!(landscape_1d(&model, &theta, &probe, 1, 1.0, 8, false).is_err());
    }

    #[test]
    fn scans_are_identical_across_worker_counts() {
        let model = MlpSpec::new(2, vec![4], 2).unwrap();
        let theta = model.init_params(2);
        let xs = Batch::from_rows(&[vec![0.1, 0.9], vec![-0.7, 0.3], vec![0.5, 0.5], vec![-0.2, -0.8]]);
        let ys = vec![0, 1, 0, 1];

        let run = |threads: usize| {
            let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
            pool.install(|| {
                let probe = ProbeData::Labeled { xs: &xs, ys: &ys };
                landscape_2d(&model, &theta, &probe, (9, 10), 1.0, 7, true).unwrap().loss
            })
        };
        let a = run(1);
        let b = run(4);
        assert_eq!(a.len(), b.len());
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
    }

    #[test]
    fn pseudo_label_accuracy_reads_only_the_oracle() {
        let full = crate::data::make_dataset(crate::data::DatasetKind::Blobs, 60, 0.4, 2, 3).unwrap();
        let mut ds = crate::data::split_ssl(&full, 2, 0.2, 5).unwrap();
        let model = MlpSpec::new(2, vec![4], 2).unwrap();
        let theta = model.init_params(1);
        let base = pseudo_label_accuracy(&model, &theta, &ds).unwrap().unwrap();
        assert!((0.0..=1.0).contains(&base));

        // flipping the hidden labels flips the measured accuracy
        let flipped: Vec<usize> =
            ds.oracle_labels().unwrap().iter().map(|&y| 1 - y).collect();
        ds.replace_oracle_labels(Some(flipped));
        let inverted = pseudo_label_accuracy(&model, &theta, &ds).unwrap().unwrap();
        assert!((base + inverted - 1.0).abs() < 1e-12);

        ds.replace_oracle_labels(None);
        assert!(pseudo_label_accuracy(&model, &theta, &ds).unwrap().is_none());
    }

    #[test]
    fn grid_csv_export_shape() {
        let model = MlpSpec::new(2, vec![3], 2).unwrap();
        let theta = model.init_params(1);
        let xs = Batch::from_rows(&[vec![0.3, 0.3]]);
        let ys = vec![1];
        let probe = ProbeData::Labeled { xs: &xs, ys: &ys };
        let grid = landscape_1d(&model, &theta, &probe, 3, 0.5, 5, false).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let csv_path = dir.path().join("grid.csv");
        grid.write_csv(&csv_path).unwrap();
        grid.write_header_json(&dir.path().join("grid.json")).unwrap();
        let text = std::fs::read_to_string(csv_path).unwrap();
        assert!(text.starts_with("a,b,loss\n"));
        assert_eq!(text.lines().count(), 6);
    }
}
