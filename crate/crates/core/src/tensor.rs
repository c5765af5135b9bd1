//! Minimal reverse-mode automatic differentiation over dense `f64` arrays.
//!
//! A [`Tape`] is a per-forward-pass arena of nodes. Every operation appends
//! its output node; inputs always precede outputs, so reverse node order is a
//! valid reverse topological order and [`Tensor::backward`] visits each node
//! exactly once. Operations are recorded only when some input requires
//! gradients; inference-mode forwards cost no backward bookkeeping.
//!
//! Broadcasting is restricted to equal shapes and scalar-with-array so every
//! backward rule stays auditable by hand.

use std::cell::RefCell;
use std::rc::Rc;

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum BinKind {
    Equal,
    ScalarLhs,
    ScalarRhs,
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Matmul { a: usize, b: usize, m: usize, k: usize, n: usize },
    Add { a: usize, b: usize, kind: BinKind },
    Sub { a: usize, b: usize, kind: BinKind },
    Mul { a: usize, b: usize, kind: BinKind },
    Scale { a: usize, c: f64 },
    Relu { a: usize },
    Exp { a: usize },
    Log { a: usize },
    Sum { a: usize },
    SliceRows { a: usize, start: usize, rows: usize, cols: usize },
}

struct Node {
    shape: Vec<usize>,
    data: Vec<f64>,
    grad: Option<Vec<f64>>,
    requires_grad: bool,
    op: Op,
}

/// Computation tape: an append-only arena of value nodes plus the operation
/// record needed to replay the chain rule in reverse.
#[derive(Clone)]
pub struct Tape {
    nodes: Rc<RefCell<Vec<Node>>>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Rc::new(RefCell::new(Vec::new())) }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, shape: Vec<usize>, data: Vec<f64>, requires_grad: bool, op: Op) -> Tensor {
        let mut nodes = self.nodes.borrow_mut();
        let id = nodes.len();
        nodes.push(Node { shape, data, grad: None, requires_grad, op });
        Tensor { tape: self.clone(), id }
    }

    /// New leaf tensor. `data` length must match the shape product.
    pub fn leaf(&self, shape: &[usize], data: Vec<f64>, requires_grad: bool) -> Result<Tensor> {
        let numel: usize = shape.iter().product();
        if data.len() != numel {
            return Err(Error::Contract(format!(
                "leaf data length {} does not match shape {:?}",
                data.len(),
                shape
            )));
        }
        Ok(self.push(shape.to_vec(), data, requires_grad, Op::Leaf))
    }

    /// Constant leaf (no gradient).
    pub fn constant(&self, shape: &[usize], data: Vec<f64>) -> Result<Tensor> {
        self.leaf(shape, data, false)
    }

    pub fn scalar(&self, value: f64) -> Tensor {
        self.push(vec![1], vec![value], false, Op::Leaf)
    }

    pub fn ones(&self, shape: &[usize]) -> Tensor {
        let numel: usize = shape.iter().product();
        self.push(shape.to_vec(), vec![1.0; numel], false, Op::Leaf)
    }

    fn same_tape(&self, other: &Tape) -> bool {
        Rc::ptr_eq(&self.nodes, &other.nodes)
    }
}

/// Handle into a [`Tape`] node. Cheap to clone; all math goes through the
/// owning tape.
#[derive(Clone)]
pub struct Tensor {
    tape: Tape,
    id: usize,
}

impl std::fmt::Debug for Tensor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tensor")
            .field("id", &self.id)
            .field("shape", &self.shape())
            .finish()
    }
}

fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for p in 0..k {
            let av = a[i * k + p];
            let brow = &b[p * n..(p + 1) * n];
            let orow = &mut out[i * n..(i + 1) * n];
            for j in 0..n {
                orow[j] += av * brow[j];
            }
        }
    }
    out
}

impl Tensor {
    /// Handle to the owning tape.
    pub fn tape(&self) -> Tape {
        self.tape.clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].shape.clone()
    }

    pub fn numel(&self) -> usize {
        self.tape.nodes.borrow()[self.id].data.len()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.nodes.borrow()[self.id].requires_grad
    }

    /// Copy of the forward value.
    pub fn value(&self) -> Vec<f64> {
        self.tape.nodes.borrow()[self.id].data.clone()
    }

    /// Scalar value; contract error when the tensor is not a scalar.
    pub fn item(&self) -> Result<f64> {
        let nodes = self.tape.nodes.borrow();
        let node = &nodes[self.id];
        if node.data.len() != 1 {
            return Err(Error::Contract(format!(
                "item() on non-scalar tensor of shape {:?}",
                node.shape
            )));
        }
        Ok(node.data[0])
    }

    /// Copy of the accumulated gradient, if any backward pass has reached
    /// this tensor.
    pub fn grad(&self) -> Option<Vec<f64>> {
        self.tape.nodes.borrow()[self.id].grad.clone()
    }

    pub fn zero_grad(&self) {
        self.tape.nodes.borrow_mut()[self.id].grad = None;
    }

    fn binary_kind(&self, other: &Tensor, op: &'static str) -> Result<BinKind> {
        let nodes = self.tape.nodes.borrow();
        let (sa, sb) = (&nodes[self.id].shape, &nodes[other.id].shape);
        if sa == sb {
            Ok(BinKind::Equal)
        } else if nodes[self.id].data.len() == 1 {
            Ok(BinKind::ScalarLhs)
        } else if nodes[other.id].data.len() == 1 {
            Ok(BinKind::ScalarRhs)
        } else {
            Err(Error::ShapeMismatch { op, lhs: sa.clone(), rhs: sb.clone() })
        }
    }

    fn binary(
        &self,
        other: &Tensor,
        name: &'static str,
        f: impl Fn(f64, f64) -> f64,
        make: impl Fn(usize, usize, BinKind) -> Op,
    ) -> Result<Tensor> {
        if !self.tape.same_tape(&other.tape) {
            return Err(Error::Contract(format!("{name}: operands live on different tapes")));
        }
        let kind = self.binary_kind(other, name)?;
        let (data, shape, requires) = {
            let nodes = self.tape.nodes.borrow();
            let (na, nb) = (&nodes[self.id], &nodes[other.id]);
            let data: Vec<f64> = match kind {
                BinKind::Equal => na.data.iter().zip(&nb.data).map(|(x, y)| f(*x, *y)).collect(),
                BinKind::ScalarLhs => nb.data.iter().map(|y| f(na.data[0], *y)).collect(),
                BinKind::ScalarRhs => na.data.iter().map(|x| f(*x, nb.data[0])).collect(),
            };
            let shape = if kind == BinKind::ScalarLhs { nb.shape.clone() } else { na.shape.clone() };
            (data, shape, na.requires_grad || nb.requires_grad)
        };
        let op = if requires { make(self.id, other.id, kind) } else { Op::Leaf };
        Ok(self.tape.push(shape, data, requires, op))
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.binary(other, "add", |x, y| x + y, |a, b, kind| Op::Add { a, b, kind })
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.binary(other, "sub", |x, y| x - y, |a, b, kind| Op::Sub { a, b, kind })
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        self.binary(other, "mul", |x, y| x * y, |a, b, kind| Op::Mul { a, b, kind })
    }

    /// Multiply by a compile-time constant; no gradient flows to `c`.
    pub fn scale(&self, c: f64) -> Tensor {
        let (data, shape, requires) = {
            let nodes = self.tape.nodes.borrow();
            let n = &nodes[self.id];
            (n.data.iter().map(|x| c * x).collect(), n.shape.clone(), n.requires_grad)
        };
        let op = if requires { Op::Scale { a: self.id, c } } else { Op::Leaf };
        self.tape.push(shape, data, requires, op)
    }

    pub fn relu(&self) -> Tensor {
        let (data, shape, requires) = {
            let nodes = self.tape.nodes.borrow();
            let n = &nodes[self.id];
            let data = n.data.iter().map(|&x| if x > 0.0 { x } else { 0.0 }).collect();
            (data, n.shape.clone(), n.requires_grad)
        };
        let op = if requires { Op::Relu { a: self.id } } else { Op::Leaf };
        self.tape.push(shape, data, requires, op)
    }

    pub fn exp(&self) -> Tensor {
        let (data, shape, requires) = {
            let nodes = self.tape.nodes.borrow();
            let n = &nodes[self.id];
            (n.data.iter().map(|x| x.exp()).collect(), n.shape.clone(), n.requires_grad)
        };
        let op = if requires { Op::Exp { a: self.id } } else { Op::Leaf };
        self.tape.push(shape, data, requires, op)
    }

    /// Natural log. Callers clamp first: non-positive inputs are a domain
    /// error, not a NaN.
    pub fn log(&self) -> Result<Tensor> {
        let (data, shape, requires) = {
            let nodes = self.tape.nodes.borrow();
            let n = &nodes[self.id];
            let mut data = Vec::with_capacity(n.data.len());
            for (i, &x) in n.data.iter().enumerate() {
                if x <= 0.0 {
                    return Err(Error::Domain(format!("log of non-positive value {x} at index {i}")));
                }
                data.push(x.ln());
            }
            (data, n.shape.clone(), n.requires_grad)
        };
        let op = if requires { Op::Log { a: self.id } } else { Op::Leaf };
        Ok(self.tape.push(shape, data, requires, op))
    }

    /// Sum of all elements, as a `[1]` tensor.
    pub fn sum(&self) -> Tensor {
        let (total, requires) = {
            let nodes = self.tape.nodes.borrow();
            let n = &nodes[self.id];
            (n.data.iter().sum(), n.requires_grad)
        };
        let op = if requires { Op::Sum { a: self.id } } else { Op::Leaf };
        self.tape.push(vec![1], vec![total], requires, op)
    }

    /// Matrix product of two rank-2 tensors.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        if !self.tape.same_tape(&other.tape) {
            return Err(Error::Contract("matmul: operands live on different tapes".into()));
        }
        let (data, m, k, n, requires) = {
            let nodes = self.tape.nodes.borrow();
            let (na, nb) = (&nodes[self.id], &nodes[other.id]);
            if na.shape.len() != 2 || nb.shape.len() != 2 || na.shape[1] != nb.shape[0] {
                return Err(Error::ShapeMismatch {
                    op: "matmul",
                    lhs: na.shape.clone(),
                    rhs: nb.shape.clone(),
                });
            }
            let (m, k, n) = (na.shape[0], na.shape[1], nb.shape[1]);
            (matmul_raw(&na.data, &nb.data, m, k, n), m, k, n, na.requires_grad || nb.requires_grad)
        };
        let op = if requires { Op::Matmul { a: self.id, b: other.id, m, k, n } } else { Op::Leaf };
        Ok(self.tape.push(vec![m, n], data, requires, op))
    }

    /// Rows `[start, start+rows)` of a rank-2 tensor.
    pub fn slice_rows(&self, start: usize, rows: usize) -> Result<Tensor> {
        let (data, cols, requires) = {
            let nodes = self.tape.nodes.borrow();
            let n = &nodes[self.id];
            if n.shape.len() != 2 {
                return Err(Error::Contract(format!("slice_rows on shape {:?}", n.shape)));
            }
            let cols = n.shape[1];
            if start + rows > n.shape[0] {
                return Err(Error::Contract(format!(
                    "slice_rows {}..{} out of bounds for {} rows",
                    start,
                    start + rows,
                    n.shape[0]
                )));
            }
            (n.data[start * cols..(start + rows) * cols].to_vec(), cols, n.requires_grad)
        };
        let op = if requires { Op::SliceRows { a: self.id, start, rows, cols } } else { Op::Leaf };
        Ok(self.tape.push(vec![rows, cols], data, requires, op))
    }

    /// Reverse pass from a scalar root. Gradients of every `requires_grad`
    /// node reachable from the root are accumulated into its `grad` buffer;
    /// repeated calls without zeroing sum their contributions.
    pub fn backward(&self) -> Result<()> {
        let mut nodes = self.tape.nodes.borrow_mut();
        {
            let root = &nodes[self.id];
            if root.data.len() != 1 {
                return Err(Error::Contract(format!(
                    "backward root must be scalar, got shape {:?}",
                    root.shape
                )));
            }
            if !root.requires_grad {
                return Ok(());
            }
        }

        // Per-call cotangents, merged into persistent grads at each node.
        let mut ct: Vec<Option<Vec<f64>>> = vec![None; self.id + 1];
        ct[self.id] = Some(vec![1.0]);

        for id in (0..=self.id).rev() {
            let Some(g) = ct[id].take() else { continue };

            // Accumulate into the node's persistent gradient.
            {
                let node = &mut nodes[id];
                match node.grad.as_mut() {
                    Some(buf) => {
                        for (dst, src) in buf.iter_mut().zip(&g) {
                            *dst += *src;
                        }
                    }
                    None => node.grad = Some(g.clone()),
                }
            }

            let op = nodes[id].op.clone();
            let send = |target: usize, contrib: Vec<f64>, ct: &mut Vec<Option<Vec<f64>>>| {
                match ct[target].as_mut() {
                    Some(buf) => {
                        for (dst, src) in buf.iter_mut().zip(&contrib) {
                            *dst += *src;
                        }
                    }
                    None => ct[target] = Some(contrib),
                }
            };

            match op {
                Op::Leaf => {}
                Op::Matmul { a, b, m, k, n } => {
                    if nodes[a].requires_grad {
                        // dA = dC . B^T
                        let mut da = vec![0.0; m * k];
                        let bd = &nodes[b].data;
                        for i in 0..m {
                            for j in 0..n {
                                let d = g[i * n + j];
                                let arow = &mut da[i * k..(i + 1) * k];
                                for p in 0..k {
                                    arow[p] += d * bd[p * n + j];
                                }
                            }
                        }
                        send(a, da, &mut ct);
                    }
                    if nodes[b].requires_grad {
                        // dB = A^T . dC
                        let mut db = vec![0.0; k * n];
                        let ad = &nodes[a].data;
                        for i in 0..m {
                            for p in 0..k {
                                let av = ad[i * k + p];
                                let grow = &g[i * n..(i + 1) * n];
                                let brow = &mut db[p * n..(p + 1) * n];
                                for j in 0..n {
                                    brow[j] += av * grow[j];
                                }
                            }
                        }
                        send(b, db, &mut ct);
                    }
                }
                Op::Add { a, b, kind } => {
                    if nodes[a].requires_grad {
                        let da = match kind {
                            BinKind::ScalarLhs => vec![g.iter().sum()],
                            _ => g.clone(),
                        };
                        send(a, da, &mut ct);
                    }
                    if nodes[b].requires_grad {
                        let db = match kind {
                            BinKind::ScalarRhs => vec![g.iter().sum()],
                            _ => g.clone(),
                        };
                        send(b, db, &mut ct);
                    }
                }
                Op::Sub { a, b, kind } => {
                    if nodes[a].requires_grad {
                        let da = match kind {
                            BinKind::ScalarLhs => vec![g.iter().sum()],
                            _ => g.clone(),
                        };
                        send(a, da, &mut ct);
                    }
                    if nodes[b].requires_grad {
                        let db = match kind {
                            BinKind::ScalarRhs => vec![-g.iter().sum::<f64>()],
                            _ => g.iter().map(|x| -x).collect(),
                        };
                        send(b, db, &mut ct);
                    }
                }
                Op::Mul { a, b, kind } => {
                    let (ad, bd) = {
                        let na = &nodes[a];
                        let nb = &nodes[b];
                        (na.data.clone(), nb.data.clone())
                    };
                    if nodes[a].requires_grad {
                        let da = match kind {
                            BinKind::Equal => g.iter().zip(&bd).map(|(gi, y)| gi * y).collect(),
                            BinKind::ScalarLhs => vec![g.iter().zip(&bd).map(|(gi, y)| gi * y).sum()],
                            BinKind::ScalarRhs => g.iter().map(|gi| gi * bd[0]).collect(),
                        };
                        send(a, da, &mut ct);
                    }
                    if nodes[b].requires_grad {
                        let db = match kind {
                            BinKind::Equal => g.iter().zip(&ad).map(|(gi, x)| gi * x).collect(),
                            BinKind::ScalarLhs => g.iter().map(|gi| gi * ad[0]).collect(),
                            BinKind::ScalarRhs => vec![g.iter().zip(&ad).map(|(gi, x)| gi * x).sum()],
                        };
                        send(b, db, &mut ct);
                    }
                }
                Op::Scale { a, c } => {
                    if nodes[a].requires_grad {
                        send(a, g.iter().map(|gi| c * gi).collect(), &mut ct);
                    }
                }
                Op::Relu { a } => {
                    if nodes[a].requires_grad {
                        // Subgradient 0 at exactly 0.
                        let da = nodes[a]
                            .data
                            .iter()
                            .zip(&g)
                            .map(|(&x, gi)| if x > 0.0 { *gi } else { 0.0 })
                            .collect();
                        send(a, da, &mut ct);
                    }
                }
                Op::Exp { a } => {
                    if nodes[a].requires_grad {
                        let out = nodes[id].data.clone();
                        send(a, g.iter().zip(&out).map(|(gi, y)| gi * y).collect(), &mut ct);
                    }
                }
                Op::Log { a } => {
                    if nodes[a].requires_grad {
                        let da = nodes[a].data.iter().zip(&g).map(|(&x, gi)| gi / x).collect();
                        send(a, da, &mut ct);
                    }
                }
                Op::Sum { a } => {
                    if nodes[a].requires_grad {
                        send(a, vec![g[0]; nodes[a].data.len()], &mut ct);
                    }
                }
                Op::SliceRows { a, start, rows, cols } => {
                    if nodes[a].requires_grad {
                        let mut da = vec![0.0; nodes[a].data.len()];
                        da[start * cols..(start + rows) * cols].copy_from_slice(&g[..rows * cols]);
                        send(a, da, &mut ct);
                    }
                }
            }
        }
        Ok(())
    }
}

/// Max over coordinates of |analytic - central difference| / max(1, |analytic|).
///
/// `f` is evaluated at symmetric perturbations of each coordinate of `theta`;
/// `analytic` is the gradient under test. The central-difference side is the
/// independent oracle used throughout the test suites.
pub fn finite_diff_max_rel_err(
    f: &mut dyn FnMut(&[f64]) -> Result<f64>,
    theta: &[f64],
    analytic: &[f64],
    step: f64,
) -> Result<f64> {
    if step <= 0.0 {
        return Err(Error::Contract(format!("finite-difference step must be > 0, got {step}")));
    }
    if analytic.len() != theta.len() {
        return Err(Error::Contract(format!(
            "gradient length {} does not match parameter length {}",
            analytic.len(),
            theta.len()
        )));
    }
    let mut point = theta.to_vec();
    let mut worst = 0.0f64;
    for i in 0..theta.len() {
        let orig = point[i];
        point[i] = orig + step;
        let up = f(&point)?;
        point[i] = orig - step;
        let down = f(&point)?;
        point[i] = orig;
        if !up.is_finite() || !down.is_finite() {
            return Err(Error::Numeric(format!(
                "non-finite loss during finite differences at coordinate {i}"
            )));
        }
        let numeric = (up - down) / (2.0 * step);
        let rel = (analytic[i] - numeric).abs() / analytic[i].abs().max(1.0);
        if rel > worst {
            worst = rel;
        }
    }
    Ok(worst)
}
