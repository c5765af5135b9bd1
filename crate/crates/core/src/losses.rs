//! Classification losses, pseudo-label generation, and confidence masking.
//!
//! Loss builders assemble their graphs from the audited tensor op set; the
//! numerically delicate parts (row maxima, one-hot selectors, masks) enter as
//! detached constants so gradients flow only where intended.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Stable row-wise softmax over a row-major value buffer.
pub fn softmax_rows(values: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows * cols];
    for r in 0..rows {
        let row = &values[r * cols..(r + 1) * cols];
        let m = row.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        let mut denom = 0.0;
        for (j, &v) in row.iter().enumerate() {
            let e = (v - m).exp();
            out[r * cols + j] = e;
            denom += e;
        }
        for j in 0..cols {
            out[r * cols + j] /= denom;
        }
    }
    out
}

/// Argmax with ties broken by the lowest class index.
pub fn argmax_row(row: &[f64]) -> usize {
    let mut best = 0;
    for (j, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = j;
        }
    }
    best
}

/// Fraction of correct argmax predictions.
pub fn accuracy(logits: &[f64], rows: usize, cols: usize, labels: &[usize]) -> f64 {
    if rows == 0 {
        return 0.0;
    }
    let hits = (0..rows)
        .filter(|&r| argmax_row(&logits[r * cols..(r + 1) * cols]) == labels[r])
        .count();
    hits as f64 / rows as f64
}

/// Pseudo-labels, confidences, and the threshold mask for a batch of
/// unlabeled predictions.
#[derive(Clone, Debug)]
pub struct MaskedTargets {
    pub pseudo_labels: Vec<usize>,
    pub confidences: Vec<f64>,
    pub mask: Vec<bool>,
    pub mask_rate: f64,
    pub tau: f64,
    /// Full anchor softmax rows; consumed by the soft-target variant.
    pub probs: Vec<f64>,
    pub num_classes: usize,
}

impl MaskedTargets {
    pub fn masked_in(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    /// Force-select every row (used when threshold gating is disabled).
    pub fn without_mask(mut self) -> MaskedTargets {
        self.mask = vec![true; self.mask.len()];
        self.mask_rate = if self.mask.is_empty() { 0.0 } else { 1.0 };
        self
    }
}

/// Argmax pseudo-labels with max-softmax confidences; `mask[i]` holds exactly
/// when `confidences[i] > tau`.
pub fn pseudo_targets_from(values: &[f64], rows: usize, cols: usize, tau: f64) -> Result<MaskedTargets> {
    if !(0.0..=1.0).contains(&tau) {
        return Err(Error::Contract(format!("tau must be in [0,1], got {tau}")));
    }
    let probs = softmax_rows(values, rows, cols);
    let mut pseudo_labels = Vec::with_capacity(rows);
    let mut confidences = Vec::with_capacity(rows);
    let mut mask = Vec::with_capacity(rows);
    for r in 0..rows {
        let row = &probs[r * cols..(r + 1) * cols];
        let label = argmax_row(row);
        pseudo_labels.push(label);
        confidences.push(row[label]);
        mask.push(row[label] > tau);
    }
    let mask_rate = if rows == 0 {
        0.0
    } else {
        mask.iter().filter(|&&m| m).count() as f64 / rows as f64
    };
    Ok(MaskedTargets { pseudo_labels, confidences, mask, mask_rate, tau, probs, num_classes: cols })
}

/// Tensor-facing wrapper over [`pseudo_targets_from`].
pub fn pseudo_targets(logits: &Tensor, tau: f64) -> Result<MaskedTargets> {
    let shape = logits.shape();
    if shape.len() != 2 {
        return Err(Error::Contract(format!("pseudo_targets expects [b,C] logits, got {shape:?}")));
    }
    pseudo_targets_from(&logits.value(), shape[0], shape[1], tau)
}

fn check_logits_2d(logits: &Tensor, op: &'static str) -> Result<(usize, usize)> {
    let shape = logits.shape();
    if shape.len() != 2 {
        return Err(Error::Contract(format!("{op} expects [b,C] logits, got {shape:?}")));
    }
    Ok((shape[0], shape[1]))
}

/// Per-row `logsumexp - picked_logit` as a `[b,1]` tensor, with the row
/// maxima entering as detached constants (exact for both value and gradient).
fn ce_rows(logits: &Tensor, onehot: &[f64], rows: usize, cols: usize) -> Result<Tensor> {
    let tape = logits.tape();
    let values = logits.value();
    let mut row_max = Vec::with_capacity(rows * cols);
    let mut max_col = Vec::with_capacity(rows);
    for r in 0..rows {
        let m = values[r * cols..(r + 1) * cols]
            .iter()
            .fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        max_col.push(m);
        for _ in 0..cols {
            row_max.push(m);
        }
    }
    let shifted = logits.sub(&tape.constant(&[rows, cols], row_max)?)?;
    let ones_c = tape.ones(&[cols, 1]);
    let lse = shifted.exp().matmul(&ones_c)?.log()?; // [b,1], log-sum-exp of shifted rows
    let picked = logits.mul(&tape.constant(&[rows, cols], onehot.to_vec())?)?.matmul(&ones_c)?;
    lse.add(&tape.constant(&[rows, 1], max_col)?)?.sub(&picked)
}

/// Mean cross-entropy of logits against integer class labels.
pub fn cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<Tensor> {
    let (rows, cols) = check_logits_2d(logits, "cross_entropy")?;
    if labels.len() != rows {
        return Err(Error::Contract(format!(
            "cross_entropy got {} labels for {} rows",
            labels.len(),
            rows
        )));
    }
    if rows == 0 {
        return Err(Error::Contract("cross_entropy on an empty batch".into()));
    }
    let mut onehot = vec![0.0; rows * cols];
    for (r, &y) in labels.iter().enumerate() {
        if y >= cols {
            return Err(Error::Contract(format!("label {y} out of range for {cols} classes")));
        }
        onehot[r * cols + y] = 1.0;
    }
    Ok(ce_rows(logits, &onehot, rows, cols)?.sum().scale(1.0 / rows as f64))
}

/// Mean hard-pseudo-label cross-entropy over the masked-in rows. An
/// all-false mask yields an exact zero that still participates in the graph,
/// so callers can backpropagate unconditionally.
pub fn consistency_loss(student_logits: &Tensor, targets: &MaskedTargets) -> Result<Tensor> {
    let (rows, cols) = check_logits_2d(student_logits, "consistency_loss")?;
    if targets.pseudo_labels.len() != rows || targets.num_classes != cols {
        return Err(Error::Contract(format!(
            "consistency_loss targets for {}x{} do not match logits {}x{}",
            targets.pseudo_labels.len(),
            targets.num_classes,
            rows,
            cols
        )));
    }
    let k = targets.masked_in();
    if k == 0 {
        return Ok(student_logits.sum().scale(0.0));
    }
    let mut onehot = vec![0.0; rows * cols];
    let mut weights = vec![0.0; rows];
    for r in 0..rows {
        onehot[r * cols + targets.pseudo_labels[r]] = 1.0;
        if targets.mask[r] {
            weights[r] = 1.0;
        }
    }
    let tape = student_logits.tape();
    let ce = ce_rows(student_logits, &onehot, rows, cols)?;
    Ok(ce.mul(&tape.constant(&[rows, 1], weights)?)?.sum().scale(1.0 / k as f64))
}

/// Masked KL(anchor || student) against the frozen anchor distributions;
/// exactly zero when the student reproduces the anchor.
pub fn kl_consistency_loss(student_logits: &Tensor, targets: &MaskedTargets) -> Result<Tensor> {
    let (rows, cols) = check_logits_2d(student_logits, "kl_consistency_loss")?;
    if targets.probs.len() != rows * cols {
        return Err(Error::Contract("kl_consistency_loss targets do not match logits".into()));
    }
    let k = targets.masked_in();
    if k == 0 {
        return Ok(student_logits.sum().scale(0.0));
    }
    let tape = student_logits.tape();
    let values = student_logits.value();
    // log softmax of the student, row maxima detached
    let mut row_max = Vec::with_capacity(rows * cols);
    for r in 0..rows {
        let m = values[r * cols..(r + 1) * cols]
            .iter()
            .fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        for _ in 0..cols {
            row_max.push(m);
        }
    }
    let shifted = student_logits.sub(&tape.constant(&[rows, cols], row_max)?)?;
    let ones_c = tape.ones(&[cols, 1]);
    let lse = shifted.exp().matmul(&ones_c)?.log()?; // [b,1]
    let log_p_student = shifted.sub(&lse.matmul(&tape.ones(&[1, cols]))?)?;

    // sum_c p_a (log p_a - log p_s), masked rows only
    let mut weighted_anchor = vec![0.0; rows * cols];
    let mut anchor_entropy_term = vec![0.0; rows];
    for r in 0..rows {
        if !targets.mask[r] {
            continue;
        }
        for c in 0..cols {
            let p = targets.probs[r * cols + c];
            weighted_anchor[r * cols + c] = p;
            if p > 0.0 {
                anchor_entropy_term[r] += p * p.ln();
            }
        }
    }
    let cross = log_p_student
        .mul(&tape.constant(&[rows, cols], weighted_anchor)?)?
        .sum();
    let const_part: f64 = anchor_entropy_term.iter().sum();
    tape.scalar(const_part).sub(&cross).map(|t| t.scale(1.0 / k as f64))
}
