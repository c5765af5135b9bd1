//! Small MLP classifiers over a flat parameter view.
//!
//! The model spec is immutable and shareable; all mutable state lives in
//! [`ParamVector`], a flat `f64` array plus the layout needed to reconstruct
//! per-layer blocks. Perturbation, cloning, and direction generation all act
//! on the flat view.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::data::Batch;
use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
}

/// Architecture of a fully-connected classifier.
#[derive(Clone, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct MlpSpec {
    pub input_dim: usize,
    pub hidden_dims: Vec<usize>,
    pub num_classes: usize,
    pub activation: Activation,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BlockKind {
    Weight,
    Bias,
}

/// One named parameter block inside the flat vector.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LayoutEntry {
    pub name: String,
    pub kind: BlockKind,
    pub shape: Vec<usize>,
    pub offset: usize,
}

impl LayoutEntry {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Ordered block map for a flat parameter vector.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Layout {
    entries: Vec<LayoutEntry>,
    total_len: usize,
}

impl Layout {
    pub fn new(entries: Vec<LayoutEntry>) -> Result<Self> {
        let mut expected = 0usize;
        for e in &entries {
            if e.offset != expected {
                return Err(Error::Contract(format!(
                    "layout entry {} at offset {} expected {}",
                    e.name, e.offset, expected
                )));
            }
            expected += e.len();
        }
        Ok(Layout { entries, total_len: expected })
    }

    pub fn entries(&self) -> &[LayoutEntry] {
        &self.entries
    }

    pub fn total_len(&self) -> usize {
        self.total_len
    }
}

fn same_layout(a: &Arc<Layout>, b: &Arc<Layout>) -> bool {
    Arc::ptr_eq(a, b) || a == b
}

fn ensure_same_layout(op: &'static str, a: &Arc<Layout>, b: &Arc<Layout>) -> Result<()> {
    if same_layout(a, b) {
        Ok(())
    } else {
        Err(Error::Contract(format!("{op}: parameter layouts differ")))
    }
}

/// Flat view of all model parameters.
#[derive(Clone, Debug)]
pub struct ParamVector {
    values: Vec<f64>,
    layout: Arc<Layout>,
}

impl ParamVector {
    pub fn zeros(layout: Arc<Layout>) -> Self {
        let n = layout.total_len();
        ParamVector { values: vec![0.0; n], layout }
    }

    pub fn from_values(layout: Arc<Layout>, values: Vec<f64>) -> Result<Self> {
        if values.len() != layout.total_len() {
            return Err(Error::Contract(format!(
                "value length {} does not match layout length {}",
                values.len(),
                layout.total_len()
            )));
        }
        Ok(ParamVector { values, layout })
    }

    pub fn layout(&self) -> &Arc<Layout> {
        &self.layout
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn block(&self, entry: &LayoutEntry) -> &[f64] {
        &self.values[entry.offset..entry.offset + entry.len()]
    }

    /// Overflow-safe Euclidean norm.
    pub fn l2_norm(&self) -> f64 {
        l2_norm(&self.values)
    }

    pub fn dot(&self, other: &ParamVector) -> Result<f64> {
        ensure_same_layout("dot", &self.layout, &other.layout)?;
        Ok(self.values.iter().zip(&other.values).map(|(a, b)| a * b).sum())
    }

    /// `self += c * other`.
    pub fn axpy(&mut self, c: f64, other: &ParamVector) -> Result<()> {
        ensure_same_layout("axpy", &self.layout, &other.layout)?;
        for (dst, src) in self.values.iter_mut().zip(&other.values) {
            *dst += c * src;
        }
        Ok(())
    }

    pub fn scale(&mut self, c: f64) {
        for v in &mut self.values {
            *v *= c;
        }
    }
}

/// Overflow-safe Euclidean norm of a slice.
pub(crate) fn l2_norm(values: &[f64]) -> f64 {
    let peak = values.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if peak == 0.0 || !peak.is_finite() {
        return if peak.is_finite() { 0.0 } else { f64::INFINITY };
    }
    let sum: f64 = values.iter().map(|v| (v / peak) * (v / peak)).sum();
    peak * sum.sqrt()
}

/// `theta + eps` as a new vector; neither input is modified.
pub fn perturb(theta: &ParamVector, eps: &ParamVector) -> Result<ParamVector> {
    ensure_same_layout("perturb", theta.layout(), eps.layout())?;
    let values = theta.values.iter().zip(&eps.values).map(|(t, e)| t + e).collect();
    Ok(ParamVector { values, layout: theta.layout.clone() })
}

/// Gaussian probe direction, optionally filter-normalized: each weight
/// column (one output unit) and each bias block is rescaled to the matching
/// block norm of `theta`. Blocks of `theta` with zero norm keep the raw
/// Gaussian draw.
pub fn random_direction(theta: &ParamVector, seed: u64, filter_normalized: bool) -> ParamVector {
    let mut rng = crate::rng::from_seed(seed);
    let mut values: Vec<f64> =
        (0..theta.len()).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
    if filter_normalized {
        for entry in theta.layout.entries() {
            let lo = entry.offset;
            let hi = lo + entry.len();
            match entry.kind {
                BlockKind::Weight => {
                    let (rows, cols) = (entry.shape[0], entry.shape[1]);
                    for j in 0..cols {
                        let theta_col: Vec<f64> =
                            (0..rows).map(|i| theta.values[lo + i * cols + j]).collect();
                        let dir_col: Vec<f64> =
                            (0..rows).map(|i| values[lo + i * cols + j]).collect();
                        let tn = l2_norm(&theta_col);
                        let dn = l2_norm(&dir_col);
                        if tn > 0.0 && dn > 0.0 {
                            let s = tn / dn;
                            for i in 0..rows {
                                values[lo + i * cols + j] *= s;
                            }
                        }
                    }
                }
                BlockKind::Bias => {
                    let tn = l2_norm(theta.block(entry));
                    let dn = l2_norm(&values[lo..hi]);
                    if tn > 0.0 && dn > 0.0 {
                        let s = tn / dn;
                        for v in &mut values[lo..hi] {
                            *v *= s;
                        }
                    }
                }
            }
        }
    }
    ParamVector { values, layout: theta.layout.clone() }
}

/// Parameter blocks bound onto a tape for one forward/backward pass.
pub struct TapedParams {
    tensors: Vec<Tensor>,
    layout: Arc<Layout>,
}

impl TapedParams {
    pub fn layout(&self) -> &Arc<Layout> {
        &self.layout
    }

    /// Gather accumulated leaf gradients into a flat vector (zeros where a
    /// block received none).
    pub fn grad_vector(&self) -> ParamVector {
        let mut out = ParamVector::zeros(self.layout.clone());
        for (entry, tensor) in self.layout.entries().iter().zip(&self.tensors) {
            if let Some(g) = tensor.grad() {
                out.values[entry.offset..entry.offset + entry.len()].copy_from_slice(&g);
            }
        }
        out
    }
}

impl MlpSpec {
    pub fn new(input_dim: usize, hidden_dims: Vec<usize>, num_classes: usize) -> Result<Self> {
        if input_dim < 1 || hidden_dims.iter().any(|&d| d < 1) {
            return Err(Error::Config("all model dimensions must be >= 1".into()));
        }
        if num_classes < 2 {
            return Err(Error::Config(format!("num_classes must be >= 2, got {num_classes}")));
        }
        Ok(MlpSpec { input_dim, hidden_dims, num_classes, activation: Activation::Relu })
    }

    fn dims(&self) -> Vec<usize> {
        let mut dims = Vec::with_capacity(self.hidden_dims.len() + 2);
        dims.push(self.input_dim);
        dims.extend_from_slice(&self.hidden_dims);
        dims.push(self.num_classes);
        dims
    }

    pub fn layout(&self) -> Arc<Layout> {
        let dims = self.dims();
        let mut entries = Vec::new();
        let mut offset = 0usize;
        for (i, pair) in dims.windows(2).enumerate() {
            let (fan_in, fan_out) = (pair[0], pair[1]);
            entries.push(LayoutEntry {
                name: format!("w{i}"),
                kind: BlockKind::Weight,
                shape: vec![fan_in, fan_out],
                offset,
            });
            offset += fan_in * fan_out;
            entries.push(LayoutEntry {
                name: format!("b{i}"),
                kind: BlockKind::Bias,
                shape: vec![1, fan_out],
                offset,
            });
            offset += fan_out;
        }
        Arc::new(Layout::new(entries).expect("contiguous by construction"))
    }

    /// He-scaled weights (std = sqrt(2 / fan_in)), zero biases, seeded.
    pub fn init_params(&self, seed: u64) -> ParamVector {
        let layout = self.layout();
        let mut rng = crate::rng::from_seed(seed);
        let mut theta = ParamVector::zeros(layout.clone());
        for entry in layout.entries() {
            if entry.kind == BlockKind::Weight {
                let std = (2.0 / entry.shape[0] as f64).sqrt();
                for i in 0..entry.len() {
                    theta.values[entry.offset + i] = std * rng.sample::<f64, _>(StandardNormal);
                }
            }
        }
        theta
    }

    /// Bind `theta` as leaf tensors on `tape`.
    pub fn bind(&self, tape: &Tape, theta: &ParamVector, trainable: bool) -> Result<TapedParams> {
        let expected = self.layout();
        if !same_layout(&expected, theta.layout()) {
            return Err(Error::Contract("bind: parameter layout does not match model spec".into()));
        }
        let mut tensors = Vec::with_capacity(theta.layout().entries().len());
        for entry in theta.layout().entries() {
            tensors.push(tape.leaf(&entry.shape, theta.block(entry).to_vec(), trainable)?);
        }
        Ok(TapedParams { tensors, layout: theta.layout().clone() })
    }

    /// Forward propagation of a `[batch, input_dim]` tensor to logits.
    pub fn apply(&self, params: &TapedParams, x: &Tensor) -> Result<Tensor> {
        let shape = x.shape();
        if shape.len() != 2 || shape[1] != self.input_dim {
            return Err(Error::Contract(format!(
                "input shape {:?} does not match input_dim {}",
                shape, self.input_dim
            )));
        }
        let rows = shape[0];
        let layers = self.dims().len() - 1;
        let mut h = x.clone();
        for layer in 0..layers {
            let w = &params.tensors[2 * layer];
            let b = &params.tensors[2 * layer + 1];
            // Row-broadcast the bias with a ones-column matmul so the
            // backward rule stays inside the audited op set.
            let ones = h.tape().ones(&[rows, 1]);
            let z = h.matmul(w)?.add(&ones.matmul(b)?)?;
            h = if layer + 1 < layers { z.relu() } else { z };
        }
        Ok(h)
    }

    /// Bind-and-apply convenience for single-batch passes.
    pub fn forward(
        &self,
        tape: &Tape,
        theta: &ParamVector,
        x: &Tensor,
        trainable: bool,
    ) -> Result<(Tensor, TapedParams)> {
        let params = self.bind(tape, theta, trainable)?;
        let logits = self.apply(&params, x)?;
        Ok((logits, params))
    }

    /// Inference-only logits for a raw batch; nothing is recorded.
    pub fn logits(&self, theta: &ParamVector, batch: &Batch) -> Result<Vec<f64>> {
        let tape = Tape::new();
        let x = tape.leaf(&[batch.n, batch.dim], batch.data.clone(), false)?;
        let (logits, _) = self.forward(&tape, theta, &x, false)?;
        Ok(logits.value())
    }
}

// Checkpoints are a text layout manifest plus raw little-endian f64 values.

fn layout_path(stem: &Path) -> PathBuf {
    stem.with_extension("layout")
}

fn bin_path(stem: &Path) -> PathBuf {
    stem.with_extension("bin")
}

/// Write `<stem>.layout` and `<stem>.bin`. Round-trip is bit-exact.
pub fn save_checkpoint(theta: &ParamVector, stem: &Path) -> Result<()> {
    let mut manifest = String::new();
    for entry in theta.layout().entries() {
        let shape = entry.shape.iter().map(|d| d.to_string()).collect::<Vec<_>>().join("x");
        let _ = writeln!(manifest, "{},{},{}", entry.name, shape, entry.offset);
    }
    fs::write(layout_path(stem), manifest)?;
    let mut bytes = Vec::with_capacity(theta.len() * 8);
    for v in theta.values() {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(bin_path(stem), bytes)?;
    Ok(())
}

pub fn load_checkpoint(stem: &Path) -> Result<ParamVector> {
    let manifest = fs::read_to_string(layout_path(stem))?;
    let mut entries = Vec::new();
    for (lineno, line) in manifest.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let parts: Vec<&str> = line.split(',').collect();
        if parts.len() != 3 {
            return Err(Error::Parse(format!("layout line {}: expected name,shape,offset", lineno + 1)));
        }
        let name = parts[0].to_string();
        let shape: Vec<usize> = parts[1]
            .split('x')
            .map(|d| d.parse::<usize>().map_err(|e| Error::Parse(format!("layout line {}: {e}", lineno + 1))))
            .collect::<Result<_>>()?;
        let offset: usize =
            parts[2].parse().map_err(|e| Error::Parse(format!("layout line {}: {e}", lineno + 1)))?;
        let kind = if name.starts_with('b') { BlockKind::Bias } else { BlockKind::Weight };
        entries.push(LayoutEntry { name, kind, shape, offset });
    }
    let layout = Arc::new(Layout::new(entries)?);
    let bytes = fs::read(bin_path(stem))?;
    if bytes.len() != layout.total_len() * 8 {
        return Err(Error::Parse(format!(
            "checkpoint data length {} does not match layout length {}",
            bytes.len() / 8,
            layout.total_len()
        )));
    }
    let values: Vec<f64> =
        bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
    ParamVector::from_values(layout, values)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::losses::softmax_rows;

    fn spec() -> MlpSpec {
        MlpSpec::new(2, vec![4], 3).unwrap()
    }

    #[test]
    fn layout_round_trip_is_identity() {
        let s = spec();
        let layout = s.layout();
        assert_eq!(layout.total_len(), 2 * 4 + 4 + 4 * 3 + 3);
        let theta = s.init_params(3);
        // flatten∘unflatten: rebuild from blocks and compare.
        let mut rebuilt = vec![0.0; layout.total_len()];
        for e in layout.entries() {
            rebuilt[e.offset..e.offset + e.len()].copy_from_slice(theta.block(e));
        }
        assert_eq!(rebuilt, theta.values());
    }

    #[test]
    fn zero_params_give_zero_logits() {
        let s = spec();
        let theta = ParamVector::zeros(s.layout());
        let batch = Batch::from_rows(&[vec![0.3, -1.0], vec![5.0, 2.0]]);
        let logits = s.logits(&theta, &batch).unwrap();
        assert_eq!(logits, vec![0.0; 6]);
    }

    #[test]
    fn single_layer_projection_is_hand_checkable() {
        let s = MlpSpec::new(2, vec![], 2).unwrap();
        let mut theta = ParamVector::zeros(s.layout());
        // w0 = [[1,0],[0,1]], b0 = [0.5, -0.5]
        theta.values_mut()[0] = 1.0;
        theta.values_mut()[3] = 1.0;
        theta.values_mut()[4] = 0.5;
        theta.values_mut()[5] = -0.5;
        let logits = s.logits(&theta, &Batch::from_rows(&[vec![2.0, 3.0]])).unwrap();
        assert_eq!(logits, vec![2.5, 2.5]);
    }

    #[test]
    fn softmax_rows_sum_to_one_on_random_params() {
        let s = spec();
        let theta = s.init_params(17);
        let batch = Batch::from_rows(&[vec![0.1, 0.7], vec![-2.0, 1.0], vec![3.0, -3.0]]);
        let logits = s.logits(&theta, &batch).unwrap();
        let probs = softmax_rows(&logits, 3, 3);
        for r in 0..3 {
            let sum: f64 = probs[r * 3..(r + 1) * 3].iter().sum();
            assert!((sum - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn forward_under_reconstructed_copy_is_bit_identical() {
        let s = spec();
        let theta = s.init_params(5);
        let copy = ParamVector::from_values(theta.layout().clone(), theta.values().to_vec()).unwrap();
        let batch = Batch::from_rows(&[vec![0.2, 0.4], vec![1.5, -0.3]]);
        let a = s.logits(&theta, &batch).unwrap();
        let b = s.logits(&copy, &batch).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
    }

    #[test]
    fn perturb_identity_and_inverse() {
        let s = spec();
        let theta = s.init_params(8);
        let zero = ParamVector::zeros(theta.layout().clone());
        let same = perturb(&theta, &zero).unwrap();
        assert_eq!(same.values(), theta.values());

        let eps = random_direction(&theta, 21, false);
        let there = perturb(&theta, &eps).unwrap();
        let mut back_eps = eps.clone();
        back_eps.scale(-1.0);
        let back = perturb(&there, &back_eps).unwrap();
        for (a, b) in back.values().iter().zip(theta.values()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn perturb_norm_and_no_alias() {
        let s = spec();
        let theta = s.init_params(1);
        let eps = random_direction(&theta, 2, false);
        let moved = perturb(&theta, &eps).unwrap();
        let mut diff = moved.clone();
        diff.axpy(-1.0, &theta).unwrap();
        assert!((diff.l2_norm() - eps.l2_norm()).abs() < 1e-12);

        let before = theta.values().to_vec();
        let mut mutated = moved;
        mutated.values_mut()[0] = 1234.0;
        assert_eq!(theta.values(), before.as_slice());
    }

    #[test]
    fn direction_is_deterministic_in_seed() {
        let s = spec();
        let theta = s.init_params(4);
        let a = random_direction(&theta, 33, true);
        let b = random_direction(&theta, 33, true);
        assert_eq!(a.values(), b.values());
    }

    #[test]
    fn filter_normalized_blocks_match_theta_norms() {
        let s = MlpSpec::new(3, vec![5], 2).unwrap();
        let mut theta = s.init_params(9);
        // make biases nonzero so every block participates
        for e in theta.layout().entries().to_vec() {
            if e.kind == BlockKind::Bias {
                for i in 0..e.len() {
                    theta.values_mut()[e.offset + i] = 0.3 + i as f64 * 0.1;
                }
            }
        }
        let dir = random_direction(&theta, 77, true);
        for e in theta.layout().entries() {
            match e.kind {
                BlockKind::Weight => {
                    let (rows, cols) = (e.shape[0], e.shape[1]);
                    for j in 0..cols {
                        let tn = l2_norm(
                            &(0..rows).map(|i| theta.values()[e.offset + i * cols + j]).collect::<Vec<_>>(),
                        );
                        let dn = l2_norm(
                            &(0..rows).map(|i| dir.values()[e.offset + i * cols + j]).collect::<Vec<_>>(),
                        );
                        assert!((tn - dn).abs() < 1e-9, "column {j} of {}", e.name);
                    }
                }
                BlockKind::Bias => {
                    let tn = l2_norm(theta.block(e));
                    let dn = l2_norm(dir.block(e));
                    assert!((tn - dn).abs() < 1e-9, "bias {}", e.name);
                }
            }
        }
    }

    #[test]
    fn zero_block_falls_back_to_raw_gaussian() {
        let s = MlpSpec::new(2, vec![], 2).unwrap();
        let theta = ParamVector::zeros(s.layout()); // every block zero
        let dir = random_direction(&theta, 5, true);
        let raw = random_direction(&theta, 5, false);
        assert_eq!(dir.values(), raw.values());
    }

    #[test]
    fn high_dim_directions_are_nearly_orthogonal() {
        let s = MlpSpec::new(100, vec![96], 4).unwrap(); // ~10k params
        let theta = s.init_params(0);
        let a = random_direction(&theta, 50, false);
        let b = random_direction(&theta, 51, false);
        let cos = a.dot(&b).unwrap() / (a.l2_norm() * b.l2_norm());
        assert!(cos.abs() < 0.1, "cosine {cos}");
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let s = spec();
        let theta = s.init_params(123);
        let dir = tempfile::tempdir().unwrap();
        let stem = dir.path().join("ckpt");
        save_checkpoint(&theta, &stem).unwrap();
        let loaded = load_checkpoint(&stem).unwrap();
        assert_eq!(loaded.len(), theta.len());
        for (a, b) in loaded.values().iter().zip(theta.values()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
        assert_eq!(loaded.layout().entries(), theta.layout().entries());
    }

    #[test]
    fn bind_rejects_foreign_layout() {
        let a = MlpSpec::new(2, vec![4], 3).unwrap();
        let b = MlpSpec::new(2, vec![5], 3).unwrap();
        let theta_b = b.init_params(0);
        let tape = Tape::new();
        assert!(matches!(a.bind(&tape, &theta_b, true), Err(Error::Contract(_))));
    }
}
