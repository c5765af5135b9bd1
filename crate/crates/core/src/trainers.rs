//! End-to-end training loops: supervised baseline, pseudo-label/consistency
//! SSL baseline, FlatMatch (two propagations or buffered), and the
//! fixed-label stabilized variant.
//!
//! All trainers share one batch stream convention: every step draws a
//! coupled (labeled, unlabeled) index pair from the same sampler, and
//! trainers that need no unlabeled data simply ignore that half. This keeps
//! labeled streams aligned across methods so degenerate configs coincide
//! exactly. Evaluation uses an EMA shadow of the weights; the raw model is
//! kept alongside it in the train output.

use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{
    augment, make_dataset, split_ssl, AugmentationSpec, Batch, BatchSampler, DatasetKind,
    SslDataset, Strength,
};
use crate::diagnostics::{gradient_angle, sharpness_probe};
use crate::error::{Error, Result};
use crate::losses::{accuracy, consistency_loss, cross_entropy, pseudo_targets_from, softmax_rows};
use crate::model::{MlpSpec, ParamVector};
use crate::optim::{
    ema_update, flatmatch_step_views, sgd_step, FlatMatchConfig, GradBuffer, SgdState,
    StepDiagnostics,
};
use crate::tensor::Tape;

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelCfg {
    pub hidden_dims: Vec<usize>,
}

impl Default for ModelCfg {
    fn default() -> Self {
        ModelCfg { hidden_dims: vec![16, 16] }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetCfg {
    pub kind: DatasetKind,
    pub total: usize,
    pub noise: f64,
    pub num_classes: usize,
    pub labels_per_class: usize,
    pub test_fraction: f64,
}

impl Default for DatasetCfg {
    fn default() -> Self {
        DatasetCfg {
            kind: DatasetKind::TwoMoons,
            total: 1000,
            noise: 0.1,
            num_classes: 2,
            labels_per_class: 4,
            test_fraction: 0.2,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerCfg {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

impl Default for OptimizerCfg {
    fn default() -> Self {
        OptimizerCfg { lr: 0.03, momentum: 0.9, weight_decay: 5e-4 }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FixedLabelCfg {
    pub enabled: bool,
    /// Number of high-confidence unlabeled points whose pseudo-labels are
    /// frozen at the phase boundary.
    pub num_fix: usize,
    pub pretrain_epochs: usize,
}

impl Default for FixedLabelCfg {
    fn default() -> Self {
        FixedLabelCfg { enabled: false, num_fix: 64, pretrain_epochs: 16 }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalCfg {
    /// Radius of the sharpness probe logged at eval points.
    pub probe_rho: f64,
    /// Probe batch size drawn from the head of the test set.
    pub probe_batch: usize,
    /// Decay of the weight EMA used as the evaluation model.
    pub ema_decay: f64,
}

impl Default for EvalCfg {
    fn default() -> Self {
        EvalCfg { probe_rho: 0.05, probe_batch: 256, ema_decay: 0.999 }
    }
}

/// Landscape-scan settings; read only by the landscape experiment.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LandscapeCfg {
    /// Which trainer produces the scanned model:
    /// supervised | ssl_baseline | flatmatch | flatmatch_e.
    pub source: String,
    pub t_range: f64,
    pub points: usize,
    pub grid_range: f64,
    pub grid_n: usize,
    pub dir_seed1: u64,
    pub dir_seed2: u64,
    pub filter_normalized: bool,
    /// Rotation applied to the probe batches; probes use heavier rotation
    /// than training so the scans expose generalization structure.
    pub probe_rotation_deg: f64,
    pub probe_batch: usize,
}

impl Default for LandscapeCfg {
    fn default() -> Self {
        LandscapeCfg {
            source: "flatmatch".into(),
            t_range: 1.0,
            points: 41,
            grid_range: 1.0,
            grid_n: 21,
            dir_seed1: 101,
            dir_seed2: 102,
            filter_normalized: true,
            probe_rotation_deg: 90.0,
            probe_batch: 128,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub seed: u64,
    pub epochs: usize,
    pub steps_per_epoch: usize,
    /// Evaluate and append a record every this many steps.
    pub eval_every: usize,
    pub labeled_batch: usize,
    /// Unlabeled-to-labeled batch ratio.
    pub mu: usize,
    pub model: ModelCfg,
    pub dataset: DatasetCfg,
    pub augment: AugmentationSpec,
    pub optimizer: OptimizerCfg,
    pub flatmatch: FlatMatchConfig,
    pub fixed_label: FixedLabelCfg,
    pub eval: EvalCfg,
    pub landscape: LandscapeCfg,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            seed: 0,
            epochs: 200,
            steps_per_epoch: 50,
            eval_every: 50,
            labeled_batch: 64,
            mu: 7,
            model: ModelCfg::default(),
            dataset: DatasetCfg::default(),
            augment: AugmentationSpec::default(),
            optimizer: OptimizerCfg::default(),
            flatmatch: FlatMatchConfig::default(),
            fixed_label: FixedLabelCfg::default(),
            eval: EvalCfg::default(),
            landscape: LandscapeCfg::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs < 1 {
            return Err(Error::Config("epochs must be >= 1".into()));
        }
        if self.steps_per_epoch < 1 {
            return Err(Error::Config("steps_per_epoch must be >= 1".into()));
        }
        if self.eval_every < 1 {
            return Err(Error::Config("eval_every must be >= 1".into()));
        }
        if self.labeled_batch < 1 {
            return Err(Error::Config("labeled_batch must be >= 1".into()));
        }
        if self.mu < 1 {
            return Err(Error::Config("mu must be >= 1".into()));
        }
        if self.dataset.labels_per_class < 1 {
            return Err(Error::Config("dataset.labels_per_class must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.dataset.test_fraction) {
            return Err(Error::Config(format!(
                "dataset.test_fraction must be in [0,1), got {}",
                self.dataset.test_fraction
            )));
        }
        if matches!(self.dataset.kind, DatasetKind::TwoMoons | DatasetKind::Rings)
            && self.dataset.num_classes != 2
        {
            return Err(Error::Config(format!(
                "dataset.kind {} supports exactly 2 classes",
                self.dataset.kind
            )));
        }
        if self.optimizer.lr <= 0.0 {
            return Err(Error::Config(format!("optimizer.lr must be > 0, got {}", self.optimizer.lr)));
        }
        if !(0.0..1.0).contains(&self.optimizer.momentum) {
            return Err(Error::Config(format!(
                "optimizer.momentum must be in [0,1), got {}",
                self.optimizer.momentum
            )));
        }
        self.augment.validate()?;
        self.flatmatch.validate()?;
        if self.fixed_label.enabled {
            if self.fixed_label.pretrain_epochs >= self.epochs {
                return Err(Error::Config(format!(
                    "fixed_label.pretrain_epochs {} must be < epochs {}",
                    self.fixed_label.pretrain_epochs, self.epochs
                )));
            }
            if self.flatmatch.efficient {
                return Err(Error::Config(
                    "fixed_label.enabled requires flatmatch.efficient = false; the buffered \
                     perturbation never sees the fixed rows"
                        .into(),
                ));
            }
        }
        if !(0.0..1.0).contains(&self.eval.ema_decay) {
            return Err(Error::Config(format!(
                "eval.ema_decay must be in [0,1), got {}",
                self.eval.ema_decay
            )));
        }
        if self.eval.probe_rho <= 0.0 {
            return Err(Error::Config(format!(
                "eval.probe_rho must be > 0, got {}",
                self.eval.probe_rho
            )));
        }
        for (name, n) in [("landscape.points", self.landscape.points), ("landscape.grid_n", self.landscape.grid_n)] {
            if n < 3 || n % 2 == 0 {
                return Err(Error::Config(format!(
                    "{name} must be odd and >= 3 so scans contain offset zero, got {n}"
                )));
            }
        }
        if !matches!(
            self.landscape.source.as_str(),
            "supervised" | "ssl_baseline" | "flatmatch" | "flatmatch_e"
        ) {
            return Err(Error::Config(format!(
                "landscape.source must be one of supervised|ssl_baseline|flatmatch|flatmatch_e, got `{}`",
                self.landscape.source
            )));
        }
        Ok(())
    }

    pub fn total_steps(&self) -> usize {
        self.epochs * self.steps_per_epoch
    }
}

/// One evaluation-point row of a training run.
#[derive(Clone, Debug, Serialize)]
pub struct ExperimentRecord {
    pub step: usize,
    pub loss_l: f64,
    pub loss_u: f64,
    pub xsharp: f64,
    pub test_acc: f64,
    pub test_err: f64,
    pub mask_rate: f64,
    pub sharpness: f64,
    pub grad_angle_deg: f64,
    pub grad_norm_l: f64,
    /// Wall-clock milliseconds since training start. The one column allowed
    /// to differ between reruns of the same seed.
    pub wall_ms: f64,
    /// Accuracy of the raw (non-EMA) model; kept out of the CSV schema.
    pub raw_test_acc: f64,
}

pub const RECORD_CSV_HEADER: &str =
    "step,loss_l,loss_u,xsharp,test_acc,test_err,mask_rate,sharpness,grad_angle_deg,grad_norm_l,wall_ms";

impl ExperimentRecord {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{},{}",
            self.step,
            self.loss_l,
            self.loss_u,
            self.xsharp,
            self.test_acc,
            self.test_err,
            self.mask_rate,
            self.sharpness,
            self.grad_angle_deg,
            self.grad_norm_l,
            self.wall_ms
        )
    }

    /// Equality of every trained quantity; wall time is excluded because
    /// clock readings are not reproducible.
    pub fn same_metrics(&self, other: &ExperimentRecord) -> bool {
        self.step == other.step
            && self.loss_l.to_bits() == other.loss_l.to_bits()
            && self.loss_u.to_bits() == other.loss_u.to_bits()
            && self.xsharp.to_bits() == other.xsharp.to_bits()
            && self.test_acc.to_bits() == other.test_acc.to_bits()
            && self.test_err.to_bits() == other.test_err.to_bits()
            && self.mask_rate.to_bits() == other.mask_rate.to_bits()
            && self.sharpness.to_bits() == other.sharpness.to_bits()
            && self.grad_angle_deg.to_bits() == other.grad_angle_deg.to_bits()
            && self.grad_norm_l.to_bits() == other.grad_norm_l.to_bits()
            && self.raw_test_acc.to_bits() == other.raw_test_acc.to_bits()
    }
}

pub fn write_records_csv(records: &[ExperimentRecord], path: &Path) -> Result<()> {
    let mut out = String::from(RECORD_CSV_HEADER);
    out.push('\n');
    for r in records {
        let _ = writeln!(out, "{}", r.csv_row());
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Final models plus the record trail of one run.
pub struct TrainOutput {
    pub theta: ParamVector,
    pub theta_ema: ParamVector,
    pub records: Vec<ExperimentRecord>,
    /// `(unlabeled index, frozen label)` pairs chosen at the phase boundary
    /// of the fixed-label variant.
    pub fixed_set: Option<Vec<(usize, usize)>>,
}

impl TrainOutput {
    pub fn final_test_err(&self) -> f64 {
        self.records.last().map_or(f64::NAN, |r| r.test_err)
    }
}

type Sink<'a> = &'a mut dyn FnMut(&ExperimentRecord) -> Result<()>;

#[derive(Clone, Copy, Debug, Default)]
struct StepMetrics {
    loss_l: f64,
    loss_u: f64,
    xsharp: f64,
    mask_rate: f64,
    grad_angle_deg: f64,
    grad_norm_l: f64,
}

impl From<&StepDiagnostics> for StepMetrics {
    fn from(d: &StepDiagnostics) -> Self {
        StepMetrics {
            loss_l: d.loss_l,
            loss_u: 0.0,
            xsharp: d.xsharp,
            mask_rate: d.mask_rate,
            grad_angle_deg: d.grad_angle_deg,
            grad_norm_l: d.grad_norm_l,
        }
    }
}

fn gather_labeled(ds: &SslDataset, idx: &[usize]) -> (Batch, Vec<usize>) {
    let (xs, ys) = ds.labeled();
    let rows: Vec<Vec<f64>> = idx.iter().map(|&i| xs[i].clone()).collect();
    let labels: Vec<usize> = idx.iter().map(|&i| ys[i]).collect();
    (Batch::from_rows(&rows), labels)
}

fn gather_unlabeled(ds: &SslDataset, idx: &[usize]) -> Batch {
    let xs = ds.unlabeled();
    let rows: Vec<Vec<f64>> = idx.iter().map(|&i| xs[i].clone()).collect();
    Batch::from_rows(&rows)
}

fn augment_batch(
    batch: &Batch,
    spec: &AugmentationSpec,
    strength: Strength,
    centroid: &[f64],
    rng: &mut ChaCha8Rng,
) -> Batch {
    let rows: Vec<Vec<f64>> =
        (0..batch.n).map(|i| augment(batch.row(i), spec, strength, centroid, rng)).collect();
    Batch::from_rows(&rows)
}

/// Batch roles with their own augmentation streams. Trainers sharing a role
/// at the same step draw identical views no matter what else they augment.
mod aug_role {
    pub const LABELED: &str = "aug:labeled";
    pub const UNLABELED_WEAK: &str = "aug:unlabeled_weak";
    pub const UNLABELED_STRONG: &str = "aug:unlabeled_strong";
    pub const FIXED: &str = "aug:fixed";
}

/// Labeled cross-entropy value and gradient at `theta`.
fn supervised_grad(
    model: &MlpSpec,
    theta: &ParamVector,
    x_l: &Batch,
    y_l: &[usize],
) -> Result<(f64, ParamVector)> {
    let tape = Tape::new();
    let params = model.bind(&tape, theta, true)?;
    let x = tape.leaf(&[x_l.n, x_l.dim], x_l.data.clone(), false)?;
    let loss_t = cross_entropy(&model.apply(&params, &x)?, y_l)?;
    let loss = loss_t.item()?;
    loss_t.backward()?;
    Ok((loss, params.grad_vector()))
}

struct Setup {
    model: MlpSpec,
    ds: SslDataset,
    sampler: BatchSampler,
    augment_spec: AugmentationSpec,
    /// Master seed of the per-(role, step) augmentation streams.
    aug_master: u64,
    centroid: Vec<f64>,
    theta: ParamVector,
    sgd: SgdState,
    buf: GradBuffer,
    ema: ParamVector,
    ema_decay: f64,
    probe_x: Batch,
    probe_y: Vec<usize>,
    probe_rho: f64,
    eval_every: usize,
    total_steps: usize,
    start: Instant,
    records: Vec<ExperimentRecord>,
}

fn setup(cfg: &TrainConfig) -> Result<Setup> {
    cfg.validate()?;
    let full = make_dataset(
        cfg.dataset.kind,
        cfg.dataset.total,
        cfg.dataset.noise,
        cfg.dataset.num_classes,
        crate::rng::derived_seed(cfg.seed, "dataset"),
    )?;
    let ds = split_ssl(
        &full,
        cfg.dataset.labels_per_class,
        cfg.dataset.test_fraction,
        crate::rng::derived_seed(cfg.seed, "split"),
    )?;
    let model = MlpSpec::new(ds.dim, cfg.model.hidden_dims.clone(), ds.num_classes)?;
    let theta = model.init_params(crate::rng::derived_seed(cfg.seed, "init"));
    let sgd = SgdState::new(
        cfg.optimizer.lr,
        cfg.optimizer.momentum,
        cfg.optimizer.weight_decay,
        theta.layout().clone(),
    )?;
    let buf = GradBuffer::new(theta.layout().clone(), cfg.flatmatch.alpha)?;
    let sampler = BatchSampler::new(&ds, cfg.labeled_batch, cfg.mu, crate::rng::derived_seed(cfg.seed, "sampler"))?;
    let centroid = ds.centroid();
    let (test_x, test_y) = ds.test();
    let probe_n = cfg.eval.probe_batch.min(test_x.len());
    let probe_x = Batch::from_rows(&test_x[..probe_n]);
    let probe_y = test_y[..probe_n].to_vec();
    let ema = theta.clone();
    Ok(Setup {
        model,
        sampler,
        augment_spec: cfg.augment.clone(),
        aug_master: cfg.seed ^ cfg.augment.seed.rotate_left(17),
        centroid,
        theta,
        sgd,
        buf,
        ema,
        ema_decay: cfg.eval.ema_decay,
        probe_x,
        probe_y,
        probe_rho: cfg.eval.probe_rho,
        eval_every: cfg.eval_every,
        total_steps: cfg.total_steps(),
        start: Instant::now(),
        records: Vec::new(),
        ds,
    })
}

impl Setup {
    /// Augmented view of a batch under the stream for (role, step).
    fn view(&self, batch: &Batch, strength: Strength, role: &str, step: usize) -> Batch {
        let mut rng = crate::rng::stream_indexed(self.aug_master, role, step as u64);
        augment_batch(batch, &self.augment_spec, strength, &self.centroid, &mut rng)
    }

    fn update_weight_ema(&mut self) {
        let d = self.ema_decay;
        for (s, t) in self.ema.values_mut().iter_mut().zip(self.theta.values()) {
            *s = d * *s + (1.0 - d) * t;
        }
    }

    fn test_accuracy(&self, theta: &ParamVector) -> Result<f64> {
        let (test_x, test_y) = self.ds.test();
        let xs = Batch::from_rows(test_x);
        let logits = self.model.logits(theta, &xs)?;
        Ok(accuracy(&logits, xs.n, self.model.num_classes, test_y))
    }

    fn maybe_record(&mut self, step: usize, m: &StepMetrics, sink: Sink) -> Result<()> {
        if step % self.eval_every != 0 && step != self.total_steps {
            return Ok(());
        }
        let test_acc = self.test_accuracy(&self.ema)?;
        let raw_test_acc = self.test_accuracy(&self.theta)?;
        let sharp = sharpness_probe(&self.model, &self.ema, &self.probe_x, &self.probe_y, self.probe_rho)?;
        let record = ExperimentRecord {
            step,
            loss_l: m.loss_l,
            loss_u: m.loss_u,
            xsharp: m.xsharp,
            test_acc,
            test_err: 1.0 - test_acc,
            mask_rate: m.mask_rate,
            sharpness: sharp.value,
            grad_angle_deg: m.grad_angle_deg,
            grad_norm_l: m.grad_norm_l,
            wall_ms: self.start.elapsed().as_secs_f64() * 1e3,
            raw_test_acc,
        };
        for v in [record.loss_l, record.loss_u, record.xsharp, record.grad_norm_l] {
            if !v.is_finite() {
                return Err(Error::Numeric(format!("non-finite metric {v} at step {step}")));
            }
        }
        sink(&record)?;
        self.records.push(record);
        Ok(())
    }

    fn finish(self, fixed_set: Option<Vec<(usize, usize)>>) -> TrainOutput {
        TrainOutput { theta: self.theta, theta_ema: self.ema, records: self.records, fixed_set }
    }
}

/// Labeled-data-only baseline; consumes the same coupled batch stream as the
/// SSL trainers and ignores the unlabeled half.
pub fn train_supervised(cfg: &TrainConfig) -> Result<TrainOutput> {
    train_supervised_with(cfg, &mut |_| Ok(()))
}

pub fn train_supervised_with(cfg: &TrainConfig, sink: Sink) -> Result<TrainOutput> {
    let mut s = setup(cfg)?;
    for step in 1..=s.total_steps {
        let (li, _ui) = s.sampler.next_indices();
        let (x_l_raw, y_l) = gather_labeled(&s.ds, &li);
        let x_l = s.view(&x_l_raw, Strength::Weak, aug_role::LABELED, step);
        let (loss_l, grad) = supervised_grad(&s.model, &s.theta, &x_l, &y_l)?;
        sgd_step(&mut s.theta, &grad, &mut s.sgd)?;
        s.update_weight_ema();
        let m = StepMetrics {
            loss_l,
            grad_norm_l: grad.l2_norm(),
            // total objective equals the labeled loss, so the angle is zero
            ..StepMetrics::default()
        };
        s.maybe_record(step, &m, sink)?;
    }
    Ok(s.finish(None))
}

/// FixMatch-style instantiation of the general SSL objective: labeled
/// cross-entropy plus confidence-masked consistency of strong views against
/// pseudo-labels from weak views.
pub fn train_ssl_baseline(cfg: &TrainConfig) -> Result<TrainOutput> {
    train_ssl_baseline_with(cfg, &mut |_| Ok(()))
}

pub fn train_ssl_baseline_with(cfg: &TrainConfig, sink: Sink) -> Result<TrainOutput> {
    let mut s = setup(cfg)?;
    for step in 1..=s.total_steps {
        let m = ssl_baseline_step(&mut s, &cfg.flatmatch, step)?;
        s.maybe_record(step, &m, sink)?;
    }
    Ok(s.finish(None))
}

fn ssl_baseline_step(s: &mut Setup, fm: &FlatMatchConfig, step: usize) -> Result<StepMetrics> {
    let (li, ui) = s.sampler.next_indices();
    let (x_l_raw, y_l) = gather_labeled(&s.ds, &li);
    let x_l = s.view(&x_l_raw, Strength::Weak, aug_role::LABELED, step);
    let x_u = gather_unlabeled(&s.ds, &ui);
    let weak = s.view(&x_u, Strength::Weak, aug_role::UNLABELED_WEAK, step);
    let strong = s.view(&x_u, Strength::Strong, aug_role::UNLABELED_STRONG, step);

    let anchor = s.model.logits(&s.theta, &weak)?;
    let targets = pseudo_targets_from(&anchor, x_u.n, s.model.num_classes, fm.tau)?;

    let tape = Tape::new();
    let params = s.model.bind(&tape, &s.theta, true)?;
    let xl_t = tape.leaf(&[x_l.n, x_l.dim], x_l.data.clone(), false)?;
    let loss_l_t = cross_entropy(&s.model.apply(&params, &xl_t)?, &y_l)?;
    let loss_l = loss_l_t.item()?;
    loss_l_t.backward()?;
    let grad_l = params.grad_vector();

    let xu_t = tape.leaf(&[strong.n, strong.dim], strong.data.clone(), false)?;
    let loss_u_t = consistency_loss(&s.model.apply(&params, &xu_t)?, &targets)?;
    let loss_u = loss_u_t.item()?;
    loss_u_t.backward()?;
    let total = params.grad_vector(); // grad_l + grad_u by accumulation

    let angle = gradient_angle(&grad_l, &total);
    sgd_step(&mut s.theta, &total, &mut s.sgd)?;
    // keep the buffer warm so a later FlatMatch phase starts from history
    ema_update(&mut s.buf, &grad_l, fm.ema_convention)?;
    s.update_weight_ema();

    Ok(StepMetrics {
        loss_l,
        loss_u,
        xsharp: 0.0,
        mask_rate: targets.mask_rate,
        grad_angle_deg: angle.degrees,
        grad_norm_l: grad_l.l2_norm(),
    })
}

/// FlatMatch (or FlatMatch-e when `flatmatch.efficient` is set). The anchor
/// model reads the weak view and the perturbed model reads the strong view
/// of the same unlabeled rows, so the cross-sharpness term subsumes the
/// baseline's consistency loss: at `rho = 0` this trainer coincides with the
/// SSL baseline, and at `lambda_xsharp = 0` with the supervised one.
pub fn train_flatmatch(cfg: &TrainConfig) -> Result<TrainOutput> {
    train_flatmatch_with(cfg, &mut |_| Ok(()))
}

pub fn train_flatmatch_with(cfg: &TrainConfig, sink: Sink) -> Result<TrainOutput> {
    let mut s = setup(cfg)?;
    for step in 1..=s.total_steps {
        let (li, ui) = s.sampler.next_indices();
        let (x_l_raw, y_l) = gather_labeled(&s.ds, &li);
        let x_l = s.view(&x_l_raw, Strength::Weak, aug_role::LABELED, step);
        let x_u_raw = gather_unlabeled(&s.ds, &ui);
        let x_u_anchor = s.view(&x_u_raw, Strength::Weak, aug_role::UNLABELED_WEAK, step);
        let x_u_student = s.view(&x_u_raw, Strength::Strong, aug_role::UNLABELED_STRONG, step);
        let diag = flatmatch_step_views(
            &s.model,
            &mut s.theta,
            &x_l,
            &y_l,
            &x_u_anchor,
            &x_u_student,
            None,
            &cfg.flatmatch,
            &mut s.sgd,
            &mut s.buf,
        )?;
        s.update_weight_ema();
        s.maybe_record(step, &StepMetrics::from(&diag), sink)?;
    }
    Ok(s.finish(None))
}

/// The `k` most confident unlabeled points under `theta`, as
/// `(unlabeled index, argmax label)` pairs in descending confidence order.
/// Ties break toward the lower dataset index.
pub fn select_topk_confident(
    model: &MlpSpec,
    theta: &ParamVector,
    unlabeled: &[Vec<f64>],
    k: usize,
) -> Result<Vec<(usize, usize)>> {
    if k > unlabeled.len() {
        return Err(Error::Config(format!(
            "num_fix {k} exceeds the unlabeled pool size {}",
            unlabeled.len()
        )));
    }
    if k == 0 {
        return Ok(Vec::new());
    }
    let xs = Batch::from_rows(unlabeled);
    let logits = model.logits(theta, &xs)?;
    let probs = softmax_rows(&logits, xs.n, model.num_classes);
    let mut ranked: Vec<(usize, f64, usize)> = (0..xs.n)
        .map(|i| {
            let row = &probs[i * model.num_classes..(i + 1) * model.num_classes];
            let label = crate::losses::argmax_row(row);
            (i, row[label], label)
        })
        .collect();
    ranked.sort_by(|a, b| b.1.partial_cmp(&a.1).expect("finite confidences").then(a.0.cmp(&b.0)));
    Ok(ranked[..k].iter().map(|&(i, _, y)| (i, y)).collect())
}

/// Two-phase stabilized variant: SSL pre-training, then FlatMatch whose
/// perturbation loss also sees the frozen top-confidence points. The frozen
/// rows join only the first propagation; the second propagation treats every
/// unlabeled point as unlabeled.
pub fn train_flatmatch_fixed_labels(cfg: &TrainConfig) -> Result<TrainOutput> {
    train_flatmatch_fixed_labels_with(cfg, &mut |_| Ok(()))
}

pub fn train_flatmatch_fixed_labels_with(cfg: &TrainConfig, sink: Sink) -> Result<TrainOutput> {
    if !cfg.fixed_label.enabled {
        return Err(Error::Config("fixed_label.enabled must be set for this trainer".into()));
    }
    let mut s = setup(cfg)?;
    if cfg.fixed_label.num_fix > s.ds.n_unlabeled() {
        return Err(Error::Config(format!(
            "fixed_label.num_fix {} exceeds the unlabeled pool size {}",
            cfg.fixed_label.num_fix,
            s.ds.n_unlabeled()
        )));
    }
    let boundary = cfg.fixed_label.pretrain_epochs * cfg.steps_per_epoch;

    let mut fixed_set: Vec<(usize, usize)> = Vec::new();
    let mut fixed_batch: Option<(Batch, Vec<usize>)> = None;

    for step in 1..=s.total_steps {
        if step <= boundary {
            let m = ssl_baseline_step(&mut s, &cfg.flatmatch, step)?;
            s.maybe_record(step, &m, sink)?;
            if step == boundary && cfg.fixed_label.num_fix > 0 {
                fixed_set =
                    select_topk_confident(&s.model, &s.theta, s.ds.unlabeled(), cfg.fixed_label.num_fix)?;
                let rows: Vec<Vec<f64>> =
                    fixed_set.iter().map(|&(i, _)| s.ds.unlabeled()[i].clone()).collect();
                let labels: Vec<usize> = fixed_set.iter().map(|&(_, y)| y).collect();
                fixed_batch = Some((Batch::from_rows(&rows), labels));
            }
            continue;
        }
        let (li, ui) = s.sampler.next_indices();
        let (x_l_raw, y_l) = gather_labeled(&s.ds, &li);
        let x_l = s.view(&x_l_raw, Strength::Weak, aug_role::LABELED, step);
        let x_u_raw = gather_unlabeled(&s.ds, &ui);
        let x_u_anchor = s.view(&x_u_raw, Strength::Weak, aug_role::UNLABELED_WEAK, step);
        let x_u_student = s.view(&x_u_raw, Strength::Strong, aug_role::UNLABELED_STRONG, step);
        let fixed_view = fixed_batch
            .as_ref()
            .map(|(b, y)| (s.view(b, Strength::Weak, aug_role::FIXED, step), y.clone()));
        let fixed = fixed_view.as_ref().map(|(b, y)| (b, y.as_slice()));
        let diag = flatmatch_step_views(
            &s.model,
            &mut s.theta,
            &x_l,
            &y_l,
            &x_u_anchor,
            &x_u_student,
            fixed,
            &cfg.flatmatch,
            &mut s.sgd,
            &mut s.buf,
        )?;
        s.update_weight_ema();
        s.maybe_record(step, &StepMetrics::from(&diag), sink)?;
    }
    Ok(s.finish(Some(fixed_set)))
}
