//! Parameter-space optimizers: SGD with momentum and weight decay, the
//! worst-case (dual-norm) perturbation, the cross-sharpness regularizer, the
//! FlatMatch two-propagation step, its buffered-gradient shortcut, and the
//! gradient memory buffer.
//!
//! Step anatomy (non-efficient): the first propagation forwards the
//! concatenated labeled+unlabeled batch at `theta`, backprops the labeled
//! cross-entropy to obtain the perturbation direction, and keeps the
//! unlabeled logits as frozen anchors. The second propagation computes the
//! labeled gradient at `theta` and the consistency gradient at the perturbed
//! point `theta_tilde`; the two are summed and applied to `theta`. The
//! efficient variant replaces the first propagation with the buffered
//! gradient direction and a no-grad anchor forward.

use serde::{Deserialize, Serialize};

use crate::data::Batch;
use crate::error::{Error, Result};
use crate::losses::{consistency_loss, cross_entropy, kl_consistency_loss, pseudo_targets_from, MaskedTargets};
use crate::model::{perturb, MlpSpec, ParamVector, TapedParams};
use crate::tensor::{Tape, Tensor};

/// SGD with momentum and decoupled-from-nothing L2 weight decay:
/// `v <- momentum*v + g + wd*theta; theta <- theta - lr*v`.
#[derive(Clone, Debug)]
pub struct SgdState {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: ParamVector,
}

impl SgdState {
    pub fn new(
        lr: f64,
        momentum: f64,
        weight_decay: f64,
        layout: std::sync::Arc<crate::model::Layout>,
    ) -> Result<Self> {
        if lr <= 0.0 {
            return Err(Error::Config(format!("lr must be > 0, got {lr}")));
        }
        if !(0.0..1.0).contains(&momentum) {
            return Err(Error::Config(format!("momentum must be in [0,1), got {momentum}")));
        }
        if weight_decay < 0.0 {
            return Err(Error::Config(format!("weight_decay must be >= 0, got {weight_decay}")));
        }
        Ok(SgdState { lr, momentum, weight_decay, velocity: ParamVector::zeros(layout) })
    }

    pub fn velocity(&self) -> &ParamVector {
        &self.velocity
    }
}

pub fn sgd_step(theta: &mut ParamVector, grad: &ParamVector, state: &mut SgdState) -> Result<()> {
    if !std::sync::Arc::ptr_eq(theta.layout(), state.velocity.layout())
        && theta.layout().as_ref() != state.velocity.layout().as_ref()
    {
        return Err(Error::Contract("sgd_step: layouts differ".into()));
    }
    if let Some(i) = grad.values().iter().position(|v| !v.is_finite()) {
        return Err(Error::Numeric(format!(
            "non-finite gradient component {} at coordinate {i}",
            grad.values()[i]
        )));
    }
    let (momentum, wd, lr) = (state.momentum, state.weight_decay, state.lr);
    for ((v, g), t) in state
        .velocity
        .values_mut()
        .iter_mut()
        .zip(grad.values())
        .zip(theta.values().to_vec())
    {
        *v = momentum * *v + g + wd * t;
    }
    for (t, v) in theta.values_mut().iter_mut().zip(state.velocity.values()) {
        *t -= lr * v;
    }
    Ok(())
}

/// EMA memory buffer of historical labeled-data gradients.
#[derive(Clone, Debug)]
pub struct GradBuffer {
    m: ParamVector,
    pub alpha: f64,
    pub step_count: usize,
}

impl GradBuffer {
    pub fn new(layout: std::sync::Arc<crate::model::Layout>, alpha: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&alpha) || alpha == 0.0 {
            return Err(Error::Config(format!("alpha must be in (0,1), got {alpha}")));
        }
        Ok(GradBuffer { m: ParamVector::zeros(layout), alpha, step_count: 0 })
    }

    pub fn buffer(&self) -> &ParamVector {
        &self.m
    }

    /// Overwrite the buffered gradient (equivalence tests and warm starts).
    pub fn set_buffer(&mut self, m: ParamVector) -> Result<()> {
        if m.layout().as_ref() != self.m.layout().as_ref() {
            return Err(Error::Contract("set_buffer: layouts differ".into()));
        }
        self.m = m;
        Ok(())
    }
}

/// Which side of the EMA update carries `alpha`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmaConvention {
    /// `M <- alpha*M + (1-alpha)*g`: alpha weighs history, so a large alpha
    /// smooths.
    Conventional,
    /// `M <- (1-alpha)*M + alpha*g`: the update written in the source
    /// algorithm, kept selectable for fidelity runs.
    PaperLiteral,
}

pub fn ema_update(buf: &mut GradBuffer, g: &ParamVector, convention: EmaConvention) -> Result<()> {
    if g.layout().as_ref() != buf.m.layout().as_ref() {
        return Err(Error::Contract("ema_update: layouts differ".into()));
    }
    let alpha = buf.alpha;
    let (keep, take) = match convention {
        EmaConvention::Conventional => (alpha, 1.0 - alpha),
        EmaConvention::PaperLiteral => (1.0 - alpha, alpha),
    };
    for (m, gv) in buf.m.values_mut().iter_mut().zip(g.values()) {
        *m = keep * *m + take * gv;
    }
    buf.step_count += 1;
    Ok(())
}

#[derive(Clone, Debug)]
pub struct SamPerturbation {
    pub epsilon: ParamVector,
    /// Set when the driving gradient was (numerically) zero.
    pub degenerate: bool,
}

/// Dual-norm solution of the inner maximization: `rho * g / ||g||_2`.
/// A vanishing gradient yields the zero perturbation with a flag rather than
/// an error; a perfectly fit batch is a legitimate late-training state.
pub fn sam_perturbation(grad: &ParamVector, rho: f64) -> Result<SamPerturbation> {
    if rho < 0.0 {
        return Err(Error::Contract(format!("rho must be >= 0, got {rho}")));
    }
    if let Some(i) = grad.values().iter().position(|v| !v.is_finite()) {
        return Err(Error::Numeric(format!(
            "non-finite gradient component {} at coordinate {i}",
            grad.values()[i]
        )));
    }
    let mut epsilon = ParamVector::zeros(grad.layout().clone());
    if rho == 0.0 {
        return Ok(SamPerturbation { epsilon, degenerate: false });
    }
    let norm = grad.l2_norm();
    if norm < 1e-12 {
        return Ok(SamPerturbation { epsilon, degenerate: true });
    }
    let scale = rho / norm;
    for (e, g) in epsilon.values_mut().iter_mut().zip(grad.values()) {
        *e = scale * g;
    }
    Ok(SamPerturbation { epsilon, degenerate: false })
}

/// Distance criterion between the perturbed and anchor predictions.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DistanceKind {
    /// Cross-entropy against the anchor's hard argmax labels.
    HardCe,
    /// KL divergence against the anchor's full softmax rows.
    SoftKl,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FlatMatchConfig {
    /// Perturbation radius of the inner maximization (L2 ball).
    pub rho: f64,
    /// EMA factor of the gradient memory buffer.
    pub alpha: f64,
    /// Confidence threshold gating unlabeled rows.
    pub tau: f64,
    /// Weight on the cross-sharpness term.
    pub lambda_xsharp: f64,
    /// Use the buffered gradient instead of the first propagation.
    pub efficient: bool,
    pub ema_convention: EmaConvention,
    pub distance: DistanceKind,
    /// Apply the threshold indicator inside the regularizer.
    pub confidence_mask: bool,
}

impl Default for FlatMatchConfig {
    fn default() -> Self {
        FlatMatchConfig {
            rho: 0.1,
            alpha: 0.999,
            tau: 0.95,
            lambda_xsharp: 1.0,
            efficient: false,
            ema_convention: EmaConvention::Conventional,
            distance: DistanceKind::HardCe,
            confidence_mask: true,
        }
    }
}

impl FlatMatchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.rho < 0.0 {
            return Err(Error::Config(format!("flatmatch.rho must be >= 0, got {}", self.rho)));
        }
        if self.lambda_xsharp < 0.0 {
            return Err(Error::Config(format!(
                "flatmatch.lambda_xsharp must be >= 0, got {}",
                self.lambda_xsharp
            )));
        }
        if !(0.0..1.0).contains(&self.alpha) || self.alpha == 0.0 {
            return Err(Error::Config(format!("flatmatch.alpha must be in (0,1), got {}", self.alpha)));
        }
        if !(0.0..=1.0).contains(&self.tau) {
            return Err(Error::Config(format!("flatmatch.tau must be in [0,1], got {}", self.tau)));
        }
        Ok(())
    }

    fn targets(&self, anchor_logits: &[f64], rows: usize, cols: usize) -> Result<MaskedTargets> {
        let t = pseudo_targets_from(anchor_logits, rows, cols, self.tau)?;
        Ok(if self.confidence_mask { t } else { t.without_mask() })
    }

    fn distance_loss(&self, student: &Tensor, targets: &MaskedTargets) -> Result<Tensor> {
        match self.distance {
            DistanceKind::HardCe => consistency_loss(student, targets),
            DistanceKind::SoftKl => kl_consistency_loss(student, targets),
        }
    }
}

/// Cross-sharpness loss with its perturbed-branch parameter handles.
pub struct XSharpLoss {
    pub loss: Tensor,
    pub targets: MaskedTargets,
    pub params_tilde: TapedParams,
}

impl XSharpLoss {
    /// Gradient through the perturbed branch, in `theta` coordinates.
    pub fn backward_grad(&self) -> Result<ParamVector> {
        self.loss.backward()?;
        Ok(self.params_tilde.grad_vector())
    }
}

/// Prediction-disagreement regularizer between the anchor model `theta` and
/// the worst-case model `theta_tilde` on an unlabeled batch. The anchor
/// branch is frozen: targets come from a no-grad forward at `theta`, and the
/// returned loss differentiates only through `theta_tilde`.
pub fn cross_sharpness(
    tape: &Tape,
    model: &MlpSpec,
    theta: &ParamVector,
    theta_tilde: &ParamVector,
    x_u: &Batch,
    cfg: &FlatMatchConfig,
) -> Result<XSharpLoss> {
    if theta.layout().as_ref() != theta_tilde.layout().as_ref() {
        return Err(Error::Contract("cross_sharpness: layouts differ".into()));
    }
    let anchor = model.logits(theta, x_u)?;
    let targets = cfg.targets(&anchor, x_u.n, model.num_classes)?;
    let params_tilde = model.bind(tape, theta_tilde, true)?;
    let x = tape.leaf(&[x_u.n, x_u.dim], x_u.data.clone(), false)?;
    let student = model.apply(&params_tilde, &x)?;
    let loss = cfg.distance_loss(&student, &targets)?;
    Ok(XSharpLoss { loss, targets, params_tilde })
}

/// Per-step numbers surfaced to trainers and records.
#[derive(Clone, Debug)]
pub struct StepDiagnostics {
    pub loss_l: f64,
    pub xsharp: f64,
    pub eps_norm: f64,
    pub mask_rate: f64,
    pub grad_norm_l: f64,
    pub grad_norm_total: f64,
    pub grad_angle_deg: f64,
    pub degenerate: bool,
}

/// One FlatMatch update with the anchor and student reading the same
/// unlabeled view (the literal form of the regularizer).
pub fn flatmatch_step(
    model: &MlpSpec,
    theta: &mut ParamVector,
    x_l: &Batch,
    y_l: &[usize],
    x_u: &Batch,
    cfg: &FlatMatchConfig,
    sgd: &mut SgdState,
    buf: &mut GradBuffer,
) -> Result<StepDiagnostics> {
    flatmatch_step_views(model, theta, x_l, y_l, x_u, x_u, None, cfg, sgd, buf)
}

/// FlatMatch update with distinct anchor/student views and optional
/// fixed-label rows in the perturbation loss.
///
/// `x_u_anchor` feeds the frozen-target branch at `theta`; `x_u_student`
/// (row-aligned views of the same points) feeds the perturbed branch at
/// `theta_tilde`. Passing the same batch twice recovers the literal
/// regularizer; passing weak/strong views recovers the drop-in composition
/// with a consistency-based trainer, whose unlabeled loss this term then
/// subsumes. Fixed rows enter only the first propagation.
#[allow(clippy::too_many_arguments)]
pub fn flatmatch_step_views(
    model: &MlpSpec,
    theta: &mut ParamVector,
    x_l: &Batch,
    y_l: &[usize],
    x_u_anchor: &Batch,
    x_u_student: &Batch,
    fixed: Option<(&Batch, &[usize])>,
    cfg: &FlatMatchConfig,
    sgd: &mut SgdState,
    buf: &mut GradBuffer,
) -> Result<StepDiagnostics> {
    cfg.validate()?;
    if x_l.n == 0 || x_u_anchor.n == 0 {
        return Err(Error::Contract("flatmatch_step: batches must be nonempty".into()));
    }
    if y_l.len() != x_l.n {
        return Err(Error::Contract("flatmatch_step: label count does not match batch".into()));
    }
    if x_u_student.n != x_u_anchor.n {
        return Err(Error::Contract(
            "flatmatch_step: anchor and student views must align row for row".into(),
        ));
    }
    if fixed.is_some() && cfg.efficient {
        return Err(Error::Contract(
            "fixed-label rows require the two-propagation mode; the buffered perturbation would ignore them"
                .into(),
        ));
    }

    // Perturbation direction and frozen anchor logits.
    let (eps, degenerate, anchor_logits) = if cfg.efficient {
        let p = sam_perturbation(buf.buffer(), cfg.rho)?;
        let anchors = model.logits(theta, x_u_anchor)?;
        (p.epsilon, p.degenerate, anchors)
    } else {
        // First propagation: joint forward at theta over the perturbation
        // rows followed by the unlabeled rows; backward of the labeled
        // cross-entropy. Unlabeled rows receive zero cotangents, so the
        // resulting gradient equals the labeled-only gradient exactly while
        // the anchors come for free.
        let (perturb_x, perturb_y): (Batch, Vec<usize>) = match fixed {
            Some((fx, fy)) => {
                let x = x_l.concat(fx)?;
                let mut y = y_l.to_vec();
                y.extend_from_slice(fy);
                (x, y)
            }
            None => (x_l.clone(), y_l.to_vec()),
        };
        let tape = Tape::new();
        let joint = perturb_x.concat(x_u_anchor)?;
        let input = tape.leaf(&[joint.n, joint.dim], joint.data, false)?;
        let params = model.bind(&tape, theta, true)?;
        let logits = model.apply(&params, &input)?;
        let labeled_logits = logits.slice_rows(0, perturb_x.n)?;
        let anchors = logits.slice_rows(perturb_x.n, x_u_anchor.n)?.value();
        cross_entropy(&labeled_logits, &perturb_y)?.backward()?;
        let p = sam_perturbation(&params.grad_vector(), cfg.rho)?;
        (p.epsilon, p.degenerate, anchors)
    };
    let eps_norm = eps.l2_norm();
    let theta_tilde = perturb(theta, &eps)?;

    // Second propagation, labeled branch at theta.
    let tape_l = Tape::new();
    let params_l = model.bind(&tape_l, theta, true)?;
    let x_l_t = tape_l.leaf(&[x_l.n, x_l.dim], x_l.data.clone(), false)?;
    let loss_l_t = cross_entropy(&model.apply(&params_l, &x_l_t)?, y_l)?;
    let loss_l = loss_l_t.item()?;
    loss_l_t.backward()?;
    let grad_l = params_l.grad_vector();

    // Second propagation, cross-sharpness branch at theta_tilde.
    let targets = cfg.targets(&anchor_logits, x_u_anchor.n, model.num_classes)?;
    let tape_u = Tape::new();
    let params_u = model.bind(&tape_u, &theta_tilde, true)?;
    let x_u_t = tape_u.leaf(&[x_u_student.n, x_u_student.dim], x_u_student.data.clone(), false)?;
    let student = model.apply(&params_u, &x_u_t)?;
    let xsharp_t = cfg.distance_loss(&student, &targets)?;
    let xsharp = xsharp_t.item()?;
    xsharp_t.backward()?;
    let grad_x = params_u.grad_vector();

    // Combined direction applied to theta; the zero-weight branch is skipped
    // so the degenerate config reproduces supervised SGD bit for bit.
    let mut total = grad_l.clone();
    if cfg.lambda_xsharp != 0.0 {
        total.axpy(cfg.lambda_xsharp, &grad_x)?;
    }
    let angle = crate::diagnostics::gradient_angle(&grad_l, &total);
    sgd_step(theta, &total, sgd)?;
    ema_update(buf, &grad_l, cfg.ema_convention)?;

    Ok(StepDiagnostics {
        loss_l,
        xsharp,
        eps_norm,
        mask_rate: targets.mask_rate,
        grad_norm_l: grad_l.l2_norm(),
        grad_norm_total: total.l2_norm(),
        grad_angle_deg: angle.degrees,
        degenerate,
    })
}
