//! Dense f64 tensors and a define-by-run reverse-mode differentiation graph.
//!
//! A `Graph` is an arena of nodes created in execution order. Each operation
//! validates shapes, evaluates immediately, and records what it needs for the
//! backward pass. `backward` walks the arena in reverse creation order, which
//! is already a topological order, and accumulates gradients additively into
//! every node that requires them. Forward records can be replayed to verify
//! that the stored activations are reproducible bitwise.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::fft;

// ── Tensor ──────────────────────────────────────────────────────────────────

/// Dense row-major f64 tensor. Detached tensors (no `node_id`) are plain
/// values and can move freely between threads; tensors stored in a graph
/// carry their node index.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    pub requires_grad: bool,
    pub grad: Option<Vec<f64>>,
    pub node_id: Option<usize>,
}

impl Tensor {
    /// Build a tensor, validating that every extent is positive and the
    /// buffer length matches the shape product.
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.is_empty() {
            return Err(Error::dim("tensor", "shape must have at least one axis"));
        }
        if shape.iter().any(|&e| e == 0) {
            return Err(Error::dim(
                "tensor",
                format!("shape extents must be positive, got {shape:?}"),
            ));
        }
        let expect: usize = shape.iter().product();
        if expect != data.len() {
            return Err(Error::dim(
                "tensor",
                format!("shape {shape:?} needs {expect} values, got {}", data.len()),
            ));
        }
        Ok(Tensor {
            shape,
            data,
            requires_grad: false,
            grad: None,
            node_id: None,
        })
    }

    pub fn scalar(v: f64) -> Self {
        Tensor::new(vec![1], vec![v]).unwrap()
    }

    /// 1-d tensor from a nonempty buffer.
    pub fn vector(data: Vec<f64>) -> Result<Self> {
        let n = data.len();
        Tensor::new(vec![n], data)
    }

    /// 2-d tensor from a row-major buffer.
    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Tensor::new(vec![rows, cols], data)
    }

    pub fn zeros(shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        Tensor::new(shape.to_vec(), vec![0.0; n])
    }

    pub fn with_requires_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// Copy of this tensor detached from any graph.
    pub fn detached(&self) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.clone(),
            requires_grad: self.requires_grad,
            grad: None,
            node_id: None,
        }
    }
}

// ── Operation records ───────────────────────────────────────────────────────

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    Matmul(usize, usize),
    Transpose(usize),
    AddRow(usize, usize),
    TileRows(usize, usize),
    Prelu { x: usize, slope: usize },
    Tanh(usize),
    Sigmoid(usize),
    Softmax { x: usize, axis: usize, mask: Option<Arc<Vec<bool>>> },
    L2Normalize(usize),
    L2NormalizeRows(usize),
    Concat { parts: Vec<usize>, axis: usize },
    SumAll(usize),
    MeanAll(usize),
    MeanRows(usize),
    Reshape(usize),
    SliceRows { x: usize, start: usize, len: usize },
    GatherRows { table: usize, ids: Arc<Vec<usize>> },
    CountSketch { x: usize, h: Arc<Vec<usize>>, s: Arc<Vec<f64>> },
    CircularConv(usize, usize),
    SignedSqrt(usize),
    CrossEntropy { logits: usize, target: usize },
}

impl Op {
    fn label(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::Matmul(..) => "matmul",
            Op::Transpose(..) => "transpose",
            Op::AddRow(..) => "add_row",
            Op::TileRows(..) => "tile_rows",
            Op::Prelu { .. } => "prelu",
            Op::Tanh(..) => "tanh",
            Op::Sigmoid(..) => "sigmoid",
            Op::Softmax { .. } => "softmax",
            Op::L2Normalize(..) => "l2_normalize",
            Op::L2NormalizeRows(..) => "l2_normalize_rows",
            Op::Concat { .. } => "concat",
            Op::SumAll(..) => "sum",
            Op::MeanAll(..) => "mean",
            Op::MeanRows(..) => "mean_rows",
            Op::Reshape(..) => "reshape",
            Op::SliceRows { .. } => "slice_rows",
            Op::GatherRows { .. } => "gather_rows",
            Op::CountSketch { .. } => "count_sketch",
            Op::CircularConv(..) => "circular_conv",
            Op::SignedSqrt(..) => "signed_sqrt",
            Op::CrossEntropy { .. } => "cross_entropy",
        }
    }
}

#[derive(Debug)]
struct Node {
    tensor: Tensor,
    op: Op,
    name: Option<String>,
}

/// Handle to a node inside one specific `Graph`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

// ── Kernels ─────────────────────────────────────────────────────────────────

pub(crate) mod kernels {
    /// C = A(m x k) * B(k x n), row major, i-k-j loop order so the inner
    /// loop walks contiguous rows of B and C.
    pub fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            let arow = &a[i * k..(i + 1) * k];
            let crow = &mut c[i * n..(i + 1) * n];
            for (p, &av) in arow.iter().enumerate() {
                let brow = &b[p * n..(p + 1) * n];
                for (cv, &bv) in crow.iter_mut().zip(brow) {
                    *cv += av * bv;
                }
            }
        }
        c
    }

    /// C = A(m x n) * B(k x n)^T -> (m x k); rows of A dotted with rows of B.
    pub fn matmul_nt(a: &[f64], b: &[f64], m: usize, n: usize, k: usize) -> Vec<f64> {
        let mut c = vec![0.0; m * k];
        for i in 0..m {
            let arow = &a[i * n..(i + 1) * n];
            for p in 0..k {
                let brow = &b[p * n..(p + 1) * n];
                let mut dot = 0.0;
                for (av, bv) in arow.iter().zip(brow) {
                    dot += av * bv;
                }
                c[i * k + p] = dot;
            }
        }
        c
    }

    /// C += A(m x k)^T * B(m x n) -> (k x n), accumulated into `c`.
    pub fn matmul_tn_acc(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, c: &mut [f64]) {
        for i in 0..m {
            let arow = &a[i * k..(i + 1) * k];
            let brow = &b[i * n..(i + 1) * n];
            for (p, &av) in arow.iter().enumerate() {
                if av == 0.0 {
                    continue;
                }
                let crow = &mut c[p * n..(p + 1) * n];
                for (cv, &bv) in crow.iter_mut().zip(brow) {
                    *cv += av * bv;
                }
            }
        }
    }

    /// Softmax over one strided slice, honoring an exclusion mask
    /// (`mask[k] == true` means position k is excluded and outputs exact 0).
    pub fn softmax_strided(
        x: &[f64],
        out: &mut [f64],
        start: usize,
        stride: usize,
        count: usize,
        mask: Option<&[bool]>,
    ) {
        let masked = |k: usize| mask.map_or(false, |m| m[k]);
        let mut maxv = f64::NEG_INFINITY;
        for k in 0..count {
            if !masked(k) {
                maxv = maxv.max(x[start + k * stride]);
            }
        }
        let mut sum = 0.0;
        for k in 0..count {
            let idx = start + k * stride;
            if masked(k) {
                out[idx] = 0.0;
            } else {
                let e = (x[idx] - maxv).exp();
                out[idx] = e;
                sum += e;
            }
        }
        for k in 0..count {
            let idx = start + k * stride;
            if !masked(k) {
                out[idx] /= sum;
            }
        }
    }

    pub fn l2_normalize(x: &[f64], eps: f64) -> Vec<f64> {
        let norm = x.iter().map(|v| v * v).sum::<f64>().sqrt();
        let denom = norm + eps;
        x.iter().map(|v| v / denom).collect()
    }
}

pub const L2_EPS: f64 = 1e-12;

// ── Graph ───────────────────────────────────────────────────────────────────

/// Define-by-run computation graph over `Tensor` nodes.
pub struct Graph {
    nodes: Vec<Node>,
    nonfinite: Option<(usize, &'static str)>,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            nonfinite: None,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn t(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].tensor
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.t(v).shape()
    }

    pub fn data(&self, v: Var) -> &[f64] {
        self.t(v).data()
    }

    /// Detached copy of a node's value.
    pub fn detach(&self, v: Var) -> Tensor {
        self.t(v).detached()
    }

    /// Gradient of a node after `backward`, if one was accumulated.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.t(v).grad.as_deref()
    }

    /// Move a node's gradient out of the graph.
    pub fn take_grad(&mut self, v: Var) -> Option<Vec<f64>> {
        self.nodes[v.0].tensor.grad.take()
    }

    /// First node whose forward value contained a non-finite entry, with a
    /// human-readable description (leaf name or op label plus node id).
    pub fn first_nonfinite(&self) -> Option<(Var, String)> {
        self.nonfinite.map(|(id, label)| {
            let desc = match &self.nodes[id].name {
                Some(name) => format!("{name} (node {id})"),
                None => format!("{label} (node {id})"),
            };
            (Var(id), desc)
        })
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<f64>, op: Op, requires_grad: bool) -> Var {
        let id = self.nodes.len();
        if self.nonfinite.is_none() && data.iter().any(|v| !v.is_finite()) {
            self.nonfinite = Some((id, op.label()));
        }
        self.nodes.push(Node {
            tensor: Tensor {
                shape,
                data,
                requires_grad,
                grad: None,
                node_id: Some(id),
            },
            op,
            name: None,
        });
        Var(id)
    }

    /// Insert a tensor as a leaf, keeping its `requires_grad` flag.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        let rg = t.requires_grad;
        self.push(t.shape, t.data, Op::Leaf, rg)
    }

    /// Insert a named leaf (names show up in diagnostics).
    pub fn leaf_named(&mut self, t: Tensor, name: &str) -> Var {
        let v = self.leaf(t);
        self.nodes[v.0].name = Some(name.to_string());
        v
    }

    /// Insert a constant leaf; never receives gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t.shape, t.data, Op::Leaf, false)
    }

    pub fn scalar(&mut self, v: f64) -> Var {
        self.constant(Tensor::scalar(v))
    }

    fn rg(&self, v: Var) -> bool {
        self.t(v).requires_grad
    }

    fn check_var(&self, op: &'static str, v: Var) -> Result<()> {
        if v.0 >= self.nodes.len() {
            return Err(Error::contract(op, format!("variable {} not in graph", v.0)));
        }
        Ok(())
    }

    fn check_same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.t(a).shape() != self.t(b).shape() {
            return Err(Error::dim(
                op,
                format!("{:?} vs {:?}", self.t(a).shape(), self.t(b).shape()),
            ));
        }
        Ok(())
    }

    // ── Elementwise ops ────────────────────────────────────────────────────

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_var("add", a)?;
        self.check_var("add", b)?;
        self.check_same_shape("add", a, b)?;
        let data: Vec<f64> = self
            .t(a)
            .data()
            .iter()
            .zip(self.t(b).data())
            .map(|(x, y)| x + y)
            .collect();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(self.t(a).shape().to_vec(), data, Op::Add(a.0, b.0), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_var("sub", a)?;
        self.check_var("sub", b)?;
        self.check_same_shape("sub", a, b)?;
        let data: Vec<f64> = self
            .t(a)
            .data()
            .iter()
            .zip(self.t(b).data())
            .map(|(x, y)| x - y)
            .collect();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(self.t(a).shape().to_vec(), data, Op::Sub(a.0, b.0), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_var("mul", a)?;
        self.check_var("mul", b)?;
        self.check_same_shape("mul", a, b)?;
        let data: Vec<f64> = self
            .t(a)
            .data()
            .iter()
            .zip(self.t(b).data())
            .map(|(x, y)| x * y)
            .collect();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(self.t(a).shape().to_vec(), data, Op::Mul(a.0, b.0), rg))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        self.check_var("scale", a)?;
        let data: Vec<f64> = self.t(a).data().iter().map(|x| x * c).collect();
        let rg = self.rg(a);
        Ok(self.push(self.t(a).shape().to_vec(), data, Op::Scale(a.0, c), rg))
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.check_var("tanh", a)?;
        let data: Vec<f64> = self.t(a).data().iter().map(|x| x.tanh()).collect();
        let rg = self.rg(a);
        Ok(self.push(self.t(a).shape().to_vec(), data, Op::Tanh(a.0), rg))
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.check_var("sigmoid", a)?;
        let data: Vec<f64> = self
            .t(a)
            .data()
            .iter()
            .map(|x| 1.0 / (1.0 + (-x).exp()))
            .collect();
        let rg = self.rg(a);
        Ok(self.push(self.t(a).shape().to_vec(), data, Op::Sigmoid(a.0), rg))
    }

    /// Parametric ReLU with a per-channel learnable slope on the last axis.
    /// `slope` is 1-d with length equal to the channel count, or length 1 to
    /// share one slope. Exactly-zero inputs take the positive branch.
    pub fn prelu(&mut self, x: Var, slope: Var) -> Result<Var> {
        self.check_var("prelu", x)?;
        self.check_var("prelu", slope)?;
        let channels = *self.t(x).shape().last().unwrap();
        let st = self.t(slope);
        if st.rank() != 1 || (st.len() != channels && st.len() != 1) {
            return Err(Error::dim(
                "prelu",
                format!(
                    "slope must be 1-d of length {channels} or 1, got shape {:?}",
                    st.shape()
                ),
            ));
        }
        let sdata = st.data();
        let share = sdata.len() == 1;
        let data: Vec<f64> = self
            .t(x)
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| {
                if v >= 0.0 {
                    v
                } else {
                    let c = if share { 0 } else { i % channels };
                    sdata[c] * v
                }
            })
            .collect();
        let rg = self.rg(x) || self.rg(slope);
        Ok(self.push(
            self.t(x).shape().to_vec(),
            data,
            Op::Prelu { x: x.0, slope: slope.0 },
            rg,
        ))
    }

    // ── Linear algebra ─────────────────────────────────────────────────────

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_var("matmul", a)?;
        self.check_var("matmul", b)?;
        let (at, bt) = (self.t(a), self.t(b));
        if at.rank() != 2 || bt.rank() != 2 {
            return Err(Error::dim(
                "matmul",
                format!("requires 2-d operands, got {:?} and {:?}", at.shape(), bt.shape()),
            ));
        }
        let (m, k) = (at.shape()[0], at.shape()[1]);
        let (k2, n) = (bt.shape()[0], bt.shape()[1]);
        if k != k2 {
            return Err(Error::dim(
                "matmul",
                format!("inner dimensions differ: {k} vs {k2}"),
            ));
        }
        let data = kernels::matmul(at.data(), bt.data(), m, k, n);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(vec![m, n], data, Op::Matmul(a.0, b.0), rg))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        self.check_var("transpose", a)?;
        let at = self.t(a);
        if at.rank() != 2 {
            return Err(Error::dim(
                "transpose",
                format!("requires a 2-d operand, got {:?}", at.shape()),
            ));
        }
        let (m, n) = (at.shape()[0], at.shape()[1]);
        let src = at.data();
        let mut data = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                data[j * m + i] = src[i * n + j];
            }
        }
        let rg = self.rg(a);
        Ok(self.push(vec![n, m], data, Op::Transpose(a.0), rg))
    }

    /// Broadcast-add a 1-d row vector to every row of a matrix.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        self.check_var("add_row", x)?;
        self.check_var("add_row", row)?;
        let (xt, rt) = (self.t(x), self.t(row));
        if xt.rank() != 2 || rt.rank() != 1 || rt.len() != xt.shape()[1] {
            return Err(Error::dim(
                "add_row",
                format!("matrix {:?} with row {:?}", xt.shape(), rt.shape()),
            ));
        }
        let (m, n) = (xt.shape()[0], xt.shape()[1]);
        let mut data = xt.data().to_vec();
        let rdata = rt.data();
        for i in 0..m {
            for j in 0..n {
                data[i * n + j] += rdata[j];
            }
        }
        let rg = self.rg(x) || self.rg(row);
        Ok(self.push(vec![m, n], data, Op::AddRow(x.0, row.0), rg))
    }

    /// Broadcast a single row ([n] or [1, n]) into `m` identical rows.
    pub fn tile_rows(&mut self, row: Var, m: usize) -> Result<Var> {
        self.check_var("tile_rows", row)?;
        if m == 0 {
            return Err(Error::dim("tile_rows", "row count must be positive"));
        }
        let rt = self.t(row);
        let n = match rt.shape() {
            [n] => *n,
            [1, n] => *n,
            other => {
                return Err(Error::dim(
                    "tile_rows",
                    format!("expected a single row, got shape {other:?}"),
                ))
            }
        };
        let mut data = Vec::with_capacity(m * n);
        for _ in 0..m {
            data.extend_from_slice(rt.data());
        }
        let rg = self.rg(row);
        Ok(self.push(vec![m, n], data, Op::TileRows(row.0, m), rg))
    }

    // ── Normalizations ─────────────────────────────────────────────────────

    /// Softmax along `axis`, with an optional exclusion mask over that axis.
    /// Masked positions emit exactly 0 and receive no gradient.
    pub fn softmax(&mut self, x: Var, axis: usize, mask: Option<&[bool]>) -> Result<Var> {
        self.check_var("softmax", x)?;
        let xt = self.t(x);
        if xt.rank() > 2 {
            return Err(Error::dim(
                "softmax",
                format!("supports rank 1 and 2, got {:?}", xt.shape()),
            ));
        }
        if axis >= xt.rank() {
            return Err(Error::dim(
                "softmax",
                format!("axis {axis} out of range for shape {:?}", xt.shape()),
            ));
        }
        let extent = xt.shape()[axis];
        if let Some(m) = mask {
            if m.len() != extent {
                return Err(Error::dim(
                    "softmax",
                    format!("mask length {} vs axis extent {extent}", m.len()),
                ));
            }
            if m.iter().all(|&b| b) {
                return Err(Error::degenerate("softmax", "every position is masked"));
            }
        }
        let shape = xt.shape().to_vec();
        let src = xt.data();
        let mut out = vec![0.0; src.len()];
        match (xt.rank(), axis) {
            (1, 0) => kernels::softmax_strided(src, &mut out, 0, 1, extent, mask),
            (2, 1) => {
                let (m, n) = (shape[0], shape[1]);
                for i in 0..m {
                    kernels::softmax_strided(src, &mut out, i * n, 1, n, mask);
                }
            }
            (2, 0) => {
                let (m, n) = (shape[0], shape[1]);
                for j in 0..n {
                    kernels::softmax_strided(src, &mut out, j, n, m, mask);
                }
            }
            _ => unreachable!(),
        }
        let rg = self.rg(x);
        let mask_arc = mask.map(|m| Arc::new(m.to_vec()));
        Ok(self.push(shape, out, Op::Softmax { x: x.0, axis, mask: mask_arc }, rg))
    }

    /// Whole-tensor l2 normalization: y = x / (|x| + eps). The zero tensor
    /// maps to zero.
    pub fn l2_normalize(&mut self, x: Var) -> Result<Var> {
        self.check_var("l2_normalize", x)?;
        let data = kernels::l2_normalize(self.t(x).data(), L2_EPS);
        let rg = self.rg(x);
        Ok(self.push(self.t(x).shape().to_vec(), data, Op::L2Normalize(x.0), rg))
    }

    /// Row-wise l2 normalization of a matrix.
    pub fn l2_normalize_rows(&mut self, x: Var) -> Result<Var> {
        self.check_var("l2_normalize_rows", x)?;
        let xt = self.t(x);
        if xt.rank() != 2 {
            return Err(Error::dim(
                "l2_normalize_rows",
                format!("requires a 2-d operand, got {:?}", xt.shape()),
            ));
        }
        let (m, n) = (xt.shape()[0], xt.shape()[1]);
        let src = xt.data();
        let mut data = Vec::with_capacity(m * n);
        for i in 0..m {
            data.extend(kernels::l2_normalize(&src[i * n..(i + 1) * n], L2_EPS));
        }
        let rg = self.rg(x);
        Ok(self.push(vec![m, n], data, Op::L2NormalizeRows(x.0), rg))
    }

    // ── Structure ops ──────────────────────────────────────────────────────

    /// Concatenate tensors of equal rank along `axis` (rank 1 or 2).
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::degenerate("concat", "no operands"));
        }
        for &p in parts {
            self.check_var("concat", p)?;
        }
        let rank = self.t(parts[0]).rank();
        if rank > 2 || axis >= rank {
            return Err(Error::dim(
                "concat",
                format!("axis {axis} invalid for rank {rank}"),
            ));
        }
        for &p in parts {
            if self.t(p).rank() != rank {
                return Err(Error::dim("concat", "operands differ in rank"));
            }
            for d in 0..rank {
                if d != axis && self.t(p).shape()[d] != self.t(parts[0]).shape()[d] {
                    return Err(Error::dim(
                        "concat",
                        format!(
                            "extent mismatch on axis {d}: {:?} vs {:?}",
                            self.t(p).shape(),
                            self.t(parts[0]).shape()
                        ),
                    ));
                }
            }
        }
        let mut shape = self.t(parts[0]).shape().to_vec();
        shape[axis] = parts.iter().map(|&p| self.t(p).shape()[axis]).sum();
        let data = if rank == 1 || axis == 0 {
            // Rows (or flat vectors) stack back to back.
            let mut data = Vec::with_capacity(shape.iter().product());
            for &p in parts {
                data.extend_from_slice(self.t(p).data());
            }
            data
        } else {
            // axis == 1: interleave row fragments.
            let rows = shape[0];
            let total_cols = shape[1];
            let mut data = Vec::with_capacity(rows * total_cols);
            for i in 0..rows {
                for &p in parts {
                    let cols = self.t(p).shape()[1];
                    let src = self.t(p).data();
                    data.extend_from_slice(&src[i * cols..(i + 1) * cols]);
                }
            }
            data
        };
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(
            shape,
            data,
            Op::Concat { parts: parts.iter().map(|p| p.0).collect(), axis },
            rg,
        ))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        self.check_var("sum", x)?;
        let total: f64 = self.t(x).data().iter().sum();
        let rg = self.rg(x);
        Ok(self.push(vec![1], vec![total], Op::SumAll(x.0), rg))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        self.check_var("mean", x)?;
        let t = self.t(x);
        let total: f64 = t.data().iter().sum();
        let v = total / t.len() as f64;
        let rg = self.rg(x);
        Ok(self.push(vec![1], vec![v], Op::MeanAll(x.0), rg))
    }

    /// Column means of a matrix, returned as a single row [1, n].
    pub fn mean_rows(&mut self, x: Var) -> Result<Var> {
        self.check_var("mean_rows", x)?;
        let xt = self.t(x);
        if xt.rank() != 2 {
            return Err(Error::dim(
                "mean_rows",
                format!("requires a 2-d operand, got {:?}", xt.shape()),
            ));
        }
        let (m, n) = (xt.shape()[0], xt.shape()[1]);
        let src = xt.data();
        let mut data = vec![0.0; n];
        for i in 0..m {
            for j in 0..n {
                data[j] += src[i * n + j];
            }
        }
        for v in data.iter_mut() {
            *v /= m as f64;
        }
        let rg = self.rg(x);
        Ok(self.push(vec![1, n], data, Op::MeanRows(x.0), rg))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        self.check_var("reshape", x)?;
        if shape.is_empty() || shape.iter().any(|&e| e == 0) {
            return Err(Error::dim(
                "reshape",
                format!("extents must be positive, got {shape:?}"),
            ));
        }
        let want: usize = shape.iter().product();
        if want != self.t(x).len() {
            return Err(Error::dim(
                "reshape",
                format!("{:?} has {} values, target {shape:?} needs {want}", self.t(x).shape(), self.t(x).len()),
            ));
        }
        let data = self.t(x).data().to_vec();
        let rg = self.rg(x);
        Ok(self.push(shape.to_vec(), data, Op::Reshape(x.0), rg))
    }

    /// Contiguous slice along axis 0: elements of a vector or rows of a
    /// matrix.
    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        self.check_var("slice_rows", x)?;
        let xt = self.t(x);
        let rows = xt.shape()[0];
        if len == 0 || start + len > rows {
            return Err(Error::dim(
                "slice_rows",
                format!("range {start}..{} out of {rows} rows", start + len),
            ));
        }
        let (shape, data) = match xt.rank() {
            1 => (vec![len], xt.data()[start..start + len].to_vec()),
            2 => {
                let n = xt.shape()[1];
                (vec![len, n], xt.data()[start * n..(start + len) * n].to_vec())
            }
            _ => {
                return Err(Error::dim(
                    "slice_rows",
                    format!("supports rank 1 and 2, got {:?}", xt.shape()),
                ))
            }
        };
        let rg = self.rg(x);
        Ok(self.push(shape, data, Op::SliceRows { x: x.0, start, len }, rg))
    }

    /// Gather rows of a matrix by index (embedding lookup). Gradient
    /// scatters back into the gathered rows only.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        self.check_var("gather_rows", table)?;
        let tt = self.t(table);
        if tt.rank() != 2 {
            return Err(Error::dim(
                "gather_rows",
                format!("table must be 2-d, got {:?}", tt.shape()),
            ));
        }
        if ids.is_empty() {
            return Err(Error::degenerate("gather_rows", "no indices"));
        }
        let (rows, cols) = (tt.shape()[0], tt.shape()[1]);
        if let Some(&bad) = ids.iter().find(|&&i| i >= rows) {
            return Err(Error::contract(
                "gather_rows",
                format!("row index {bad} out of range for {rows} rows"),
            ));
        }
        let src = tt.data();
        let mut data = Vec::with_capacity(ids.len() * cols);
        for &i in ids {
            data.extend_from_slice(&src[i * cols..(i + 1) * cols]);
        }
        let rg = self.rg(table);
        Ok(self.push(
            vec![ids.len(), cols],
            data,
            Op::GatherRows { table: table.0, ids: Arc::new(ids.to_vec()) },
            rg,
        ))
    }

    // ── Sketch and fusion ops ──────────────────────────────────────────────

    /// Count sketch projection: out[j] = sum over i with h[i] == j of
    /// s[i] * x[i].
    pub fn count_sketch(&mut self, x: Var, h: &Arc<Vec<usize>>, s: &Arc<Vec<f64>>, d: usize) -> Result<Var> {
        self.check_var("count_sketch", x)?;
        let xt = self.t(x);
        if xt.rank() != 1 {
            return Err(Error::dim(
                "count_sketch",
                format!("input must be 1-d, got {:?}", xt.shape()),
            ));
        }
        let n = xt.len();
        if h.len() != n || s.len() != n {
            return Err(Error::dim(
                "count_sketch",
                format!("hash/sign arrays of length {}/{} vs input {n}", h.len(), s.len()),
            ));
        }
        if d == 0 {
            return Err(Error::contract("count_sketch", "projection size must be positive"));
        }
        if let Some(&bad) = h.iter().find(|&&j| j >= d) {
            return Err(Error::contract(
                "count_sketch",
                format!("hash value {bad} out of range for d = {d}"),
            ));
        }
        let src = xt.data();
        let mut data = vec![0.0; d];
        for i in 0..n {
            data[h[i]] += s[i] * src[i];
        }
        let rg = self.rg(x);
        Ok(self.push(
            vec![d],
            data,
            Op::CountSketch { x: x.0, h: Arc::clone(h), s: Arc::clone(s) },
            rg,
        ))
    }

    /// Circular convolution of two equal-length power-of-two vectors via the
    /// transform pair. Gradient flows to both operands by circular
    /// correlation.
    pub fn circular_conv(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_var("circular_conv", a)?;
        self.check_var("circular_conv", b)?;
        let (at, bt) = (self.t(a), self.t(b));
        if at.rank() != 1 || bt.rank() != 1 || at.len() != bt.len() {
            return Err(Error::dim(
                "circular_conv",
                format!("requires equal-length vectors, got {:?} and {:?}", at.shape(), bt.shape()),
            ));
        }
        let data = fft::circular_convolve(at.data(), bt.data())
            .map_err(|_| Error::contract("circular_conv", format!("length {} is not a power of two", at.len())))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(vec![at.len()], data, Op::CircularConv(a.0, b.0), rg))
    }

    /// Signed square root: y = sign(x) * sqrt(|x|).
    pub fn signed_sqrt(&mut self, x: Var) -> Result<Var> {
        self.check_var("signed_sqrt", x)?;
        let data: Vec<f64> = self
            .t(x)
            .data()
            .iter()
            .map(|&v| v.signum() * v.abs().sqrt())
            .collect();
        let rg = self.rg(x);
        Ok(self.push(self.t(x).shape().to_vec(), data, Op::SignedSqrt(x.0), rg))
    }

    /// Cross entropy of a 1-d logit vector against a target class index,
    /// computed with max subtraction. Gradient is softmax minus one-hot.
    pub fn cross_entropy(&mut self, logits: Var, target: usize) -> Result<Var> {
        self.check_var("cross_entropy", logits)?;
        let lt = self.t(logits);
        if lt.rank() != 1 {
            return Err(Error::dim(
                "cross_entropy",
                format!("logits must be 1-d, got {:?}", lt.shape()),
            ));
        }
        if target >= lt.len() {
            return Err(Error::contract(
                "cross_entropy",
                format!("target {target} out of range for {} classes", lt.len()),
            ));
        }
        let z = lt.data();
        let maxv = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = z.iter().map(|v| (v - maxv).exp()).sum::<f64>().ln() + maxv;
        let loss = lse - z[target];
        let rg = self.rg(logits);
        Ok(self.push(vec![1], vec![loss], Op::CrossEntropy { logits: logits.0, target }, rg))
    }

    // ── Backward ───────────────────────────────────────────────────────────

    /// Reverse-mode sweep from a scalar loss. Gradients accumulate
    /// additively across fan-out and are stored on every node that requires
    /// them; earlier gradients on this graph are replaced.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        self.check_var("backward", loss)?;
        if self.t(loss).len() != 1 {
            return Err(Error::contract(
                "backward",
                format!("loss must be scalar, got shape {:?}", self.t(loss).shape()),
            ));
        }
        for node in self.nodes.iter_mut() {
            node.tensor.grad = None;
        }
        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; n];
        grads[loss.0] = Some(vec![1.0]);
        for id in (0..=loss.0).rev() {
            if !self.nodes[id].tensor.requires_grad {
                grads[id] = None;
                continue;
            }
            let dz = match grads[id].take() {
                Some(g) => g,
                None => continue,
            };
            self.backprop_node(id, &dz, &mut grads);
            self.nodes[id].tensor.grad = Some(dz);
        }
        Ok(())
    }

    fn backprop_node(&self, id: usize, dz: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let op = self.nodes[id].op.clone();
        let needs = |this: &Self, i: usize| this.nodes[i].tensor.requires_grad;
        // Fetch-or-init a gradient accumulator for node i.
        macro_rules! acc {
            ($i:expr) => {{
                let len = self.nodes[$i].tensor.len();
                grads[$i].get_or_insert_with(|| vec![0.0; len])
            }};
        }
        match op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                if needs(self, a) {
                    for (g, d) in acc!(a).iter_mut().zip(dz) {
                        *g += d;
                    }
                }
                if needs(self, b) {
                    for (g, d) in acc!(b).iter_mut().zip(dz) {
                        *g += d;
                    }
                }
            }
            Op::Sub(a, b) => {
                if needs(self, a) {
                    for (g, d) in acc!(a).iter_mut().zip(dz) {
                        *g += d;
                    }
                }
                if needs(self, b) {
                    for (g, d) in acc!(b).iter_mut().zip(dz) {
                        *g -= d;
                    }
                }
            }
            Op::Mul(a, b) => {
                if needs(self, a) {
                    let bd = self.nodes[b].tensor.data().to_vec();
                    for ((g, d), bv) in acc!(a).iter_mut().zip(dz).zip(&bd) {
                        *g += d * bv;
                    }
                }
                if needs(self, b) {
                    let ad = self.nodes[a].tensor.data().to_vec();
                    for ((g, d), av) in acc!(b).iter_mut().zip(dz).zip(&ad) {
                        *g += d * av;
                    }
                }
            }
            Op::Scale(a, c) => {
                if needs(self, a) {
                    for (g, d) in acc!(a).iter_mut().zip(dz) {
                        *g += c * d;
                    }
                }
            }
            Op::Matmul(a, b) => {
                let (m, k) = {
                    let s = self.nodes[a].tensor.shape();
                    (s[0], s[1])
                };
                let n = self.nodes[b].tensor.shape()[1];
                if needs(self, a) {
                    let bd = self.nodes[b].tensor.data();
                    let da = kernels::matmul_nt(dz, bd, m, n, k);
                    for (g, d) in acc!(a).iter_mut().zip(&da) {
                        *g += d;
                    }
                }
                if needs(self, b) {
                    let ad = self.nodes[a].tensor.data().to_vec();
                    kernels::matmul_tn_acc(&ad, dz, m, k, n, acc!(b));
                }
            }
            Op::Transpose(a) => {
                if needs(self, a) {
                    let (n, m) = {
                        let s = self.nodes[id].tensor.shape();
                        (s[0], s[1])
                    };
                    let ga = acc!(a);
                    for j in 0..n {
                        for i in 0..m {
                            ga[i * n + j] += dz[j * m + i];
                        }
                    }
                }
            }
            Op::AddRow(x, r) => {
                let n = self.nodes[r].tensor.len();
                if needs(self, x) {
                    for (g, d) in acc!(x).iter_mut().zip(dz) {
                        *g += d;
                    }
                }
                if needs(self, r) {
                    let gr = acc!(r);
                    for (i, d) in dz.iter().enumerate() {
                        gr[i % n] += d;
                    }
                }
            }
            Op::TileRows(row, m) => {
                if needs(self, row) {
                    let n = self.nodes[row].tensor.len();
                    let gr = acc!(row);
                    for i in 0..m {
                        for j in 0..n {
                            gr[j] += dz[i * n + j];
                        }
                    }
                }
            }
            Op::Prelu { x, slope } => {
                let channels = *self.nodes[x].tensor.shape().last().unwrap();
                let share = self.nodes[slope].tensor.len() == 1;
                let xd = self.nodes[x].tensor.data().to_vec();
                let sd = self.nodes[slope].tensor.data().to_vec();
                if needs(self, x) {
                    let gx = acc!(x);
                    for (i, (&v, d)) in xd.iter().zip(dz).enumerate() {
                        let c = if share { 0 } else { i % channels };
                        gx[i] += if v >= 0.0 { *d } else { sd[c] * d };
                    }
                }
                if needs(self, slope) {
                    let gs = acc!(slope);
                    for (i, (&v, d)) in xd.iter().zip(dz).enumerate() {
                        if v < 0.0 {
                            let c = if share { 0 } else { i % channels };
                            gs[c] += v * d;
                        }
                    }
                }
            }
            Op::Tanh(a) => {
                if needs(self, a) {
                    let yd = self.nodes[id].tensor.data().to_vec();
                    for ((g, d), y) in acc!(a).iter_mut().zip(dz).zip(&yd) {
                        *g += d * (1.0 - y * y);
                    }
                }
            }
            Op::Sigmoid(a) => {
                if needs(self, a) {
                    let yd = self.nodes[id].tensor.data().to_vec();
                    for ((g, d), y) in acc!(a).iter_mut().zip(dz).zip(&yd) {
                        *g += d * y * (1.0 - y);
                    }
                }
            }
            Op::Softmax { x, axis, ref mask } => {
                if needs(self, x) {
                    let y = self.nodes[id].tensor.data().to_vec();
                    let shape = self.nodes[id].tensor.shape().to_vec();
                    let rank = shape.len();
                    let slices: Vec<(usize, usize, usize)> = match (rank, axis) {
                        (1, 0) => vec![(0, 1, shape[0])],
                        (2, 1) => (0..shape[0]).map(|i| (i * shape[1], 1, shape[1])).collect(),
                        (2, 0) => (0..shape[1]).map(|j| (j, shape[1], shape[0])).collect(),
                        _ => unreachable!(),
                    };
                    let masked = |k: usize| mask.as_ref().map_or(false, |m| m[k]);
                    let gx = acc!(x);
                    for (start, stride, count) in slices {
                        let mut inner = 0.0;
                        for k in 0..count {
                            let idx = start + k * stride;
                            inner += dz[idx] * y[idx];
                        }
                        for k in 0..count {
                            if masked(k) {
                                continue;
                            }
                            let idx = start + k * stride;
                            gx[idx] += y[idx] * (dz[idx] - inner);
                        }
                    }
                }
            }
            Op::L2Normalize(x) => {
                if needs(self, x) {
                    let xd = self.nodes[x].tensor.data().to_vec();
                    l2_backward(&xd, dz, acc!(x));
                }
            }
            Op::L2NormalizeRows(x) => {
                if needs(self, x) {
                    let xd = self.nodes[x].tensor.data().to_vec();
                    let (m, n) = {
                        let s = self.nodes[x].tensor.shape();
                        (s[0], s[1])
                    };
                    let gx = acc!(x);
                    for i in 0..m {
                        l2_backward(
                            &xd[i * n..(i + 1) * n],
                            &dz[i * n..(i + 1) * n],
                            &mut gx[i * n..(i + 1) * n],
                        );
                    }
                }
            }
            Op::Concat { ref parts, axis } => {
                let rank = self.nodes[id].tensor.rank();
                if rank == 1 || axis == 0 {
                    let mut offset = 0;
                    for &p in parts {
                        let len = self.nodes[p].tensor.len();
                        if needs(self, p) {
                            for (g, d) in acc!(p).iter_mut().zip(&dz[offset..offset + len]) {
                                *g += d;
                            }
                        }
                        offset += len;
                    }
                } else {
                    let rows = self.nodes[id].tensor.shape()[0];
                    let total_cols = self.nodes[id].tensor.shape()[1];
                    let mut col_offset = 0;
                    for &p in parts {
                        let cols = self.nodes[p].tensor.shape()[1];
                        if needs(self, p) {
                            let gp = acc!(p);
                            for i in 0..rows {
                                for j in 0..cols {
                                    gp[i * cols + j] += dz[i * total_cols + col_offset + j];
                                }
                            }
                        }
                        col_offset += cols;
                    }
                }
            }
            Op::SumAll(x) => {
                if needs(self, x) {
                    for g in acc!(x).iter_mut() {
                        *g += dz[0];
                    }
                }
            }
            Op::MeanAll(x) => {
                if needs(self, x) {
                    let len = self.nodes[x].tensor.len() as f64;
                    for g in acc!(x).iter_mut() {
                        *g += dz[0] / len;
                    }
                }
            }
            Op::MeanRows(x) => {
                if needs(self, x) {
                    let (m, n) = {
                        let s = self.nodes[x].tensor.shape();
                        (s[0], s[1])
                    };
                    let gx = acc!(x);
                    for i in 0..m {
                        for j in 0..n {
                            gx[i * n + j] += dz[j] / m as f64;
                        }
                    }
                }
            }
            Op::Reshape(x) => {
                if needs(self, x) {
                    for (g, d) in acc!(x).iter_mut().zip(dz) {
                        *g += d;
                    }
                }
            }
            Op::SliceRows { x, start, len } => {
                if needs(self, x) {
                    let row = if self.nodes[x].tensor.rank() == 2 {
                        self.nodes[x].tensor.shape()[1]
                    } else {
                        1
                    };
                    let gx = acc!(x);
                    for (k, d) in dz.iter().enumerate() {
                        gx[start * row + k] += d;
                    }
                    let _ = len;
                }
            }
            Op::GatherRows { table, ref ids } => {
                if needs(self, table) {
                    let cols = self.nodes[table].tensor.shape()[1];
                    let gt = acc!(table);
                    for (r, &i) in ids.iter().enumerate() {
                        for j in 0..cols {
                            gt[i * cols + j] += dz[r * cols + j];
                        }
                    }
                }
            }
            Op::CountSketch { x, ref h, ref s } => {
                if needs(self, x) {
                    let gx = acc!(x);
                    for i in 0..h.len() {
                        gx[i] += s[i] * dz[h[i]];
                    }
                }
            }
            Op::CircularConv(a, b) => {
                if needs(self, a) {
                    let bd = self.nodes[b].tensor.data();
                    let da = fft::circular_correlate(dz, bd).expect("pow2 validated at construction");
                    for (g, d) in acc!(a).iter_mut().zip(&da) {
                        *g += d;
                    }
                }
                if needs(self, b) {
                    let ad = self.nodes[a].tensor.data();
                    let db = fft::circular_correlate(dz, ad).expect("pow2 validated at construction");
                    for (g, d) in acc!(b).iter_mut().zip(&db) {
                        *g += d;
                    }
                }
            }
            Op::SignedSqrt(x) => {
                if needs(self, x) {
                    let xd = self.nodes[x].tensor.data().to_vec();
                    for ((g, d), &v) in acc!(x).iter_mut().zip(dz).zip(&xd) {
                        let denom = (2.0 * v.abs().sqrt()).max(1e-12);
                        *g += d / denom;
                    }
                }
            }
            Op::CrossEntropy { logits, target } => {
                if needs(self, logits) {
                    let z = self.nodes[logits].tensor.data().to_vec();
                    let maxv = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let sum: f64 = z.iter().map(|v| (v - maxv).exp()).sum();
                    let gl = acc!(logits);
                    for (j, g) in gl.iter_mut().enumerate() {
                        let p = (z[j] - maxv).exp() / sum;
                        let onehot = if j == target { 1.0 } else { 0.0 };
                        *g += dz[0] * (p - onehot);
                    }
                }
            }
        }
    }

    // ── Replay ─────────────────────────────────────────────────────────────

    /// Recompute every non-leaf node from its recorded inputs and compare
    /// with the stored activations. Returns true when every value matches
    /// bitwise.
    pub fn replay(&self) -> bool {
        for id in 0..self.nodes.len() {
            if let Some(fresh) = self.eval_op(id) {
                let stored = self.nodes[id].tensor.data();
                if fresh.len() != stored.len() {
                    return false;
                }
                if fresh
                    .iter()
                    .zip(stored)
                    .any(|(a, b)| a.to_bits() != b.to_bits())
                {
                    return false;
                }
            }
        }
        true
    }

    fn eval_op(&self, id: usize) -> Option<Vec<f64>> {
        let d = |i: usize| self.nodes[i].tensor.data();
        let sh = |i: usize| self.nodes[i].tensor.shape();
        match &self.nodes[id].op {
            Op::Leaf => None,
            Op::Add(a, b) => Some(d(*a).iter().zip(d(*b)).map(|(x, y)| x + y).collect()),
            Op::Sub(a, b) => Some(d(*a).iter().zip(d(*b)).map(|(x, y)| x - y).collect()),
            Op::Mul(a, b) => Some(d(*a).iter().zip(d(*b)).map(|(x, y)| x * y).collect()),
            Op::Scale(a, c) => Some(d(*a).iter().map(|x| x * c).collect()),
            Op::Matmul(a, b) => Some(kernels::matmul(
                d(*a),
                d(*b),
                sh(*a)[0],
                sh(*a)[1],
                sh(*b)[1],
            )),
            Op::Transpose(a) => {
                let (m, n) = (sh(*a)[0], sh(*a)[1]);
                let src = d(*a);
                let mut out = vec![0.0; m * n];
                for i in 0..m {
                    for j in 0..n {
                        out[j * m + i] = src[i * n + j];
                    }
                }
                Some(out)
            }
            Op::AddRow(x, r) => {
                let (m, n) = (sh(*x)[0], sh(*x)[1]);
                let mut out = d(*x).to_vec();
                let row = d(*r);
                for i in 0..m {
                    for j in 0..n {
                        out[i * n + j] += row[j];
                    }
                }
                Some(out)
            }
            Op::TileRows(row, m) => {
                let src = d(*row);
                let mut out = Vec::with_capacity(m * src.len());
                for _ in 0..*m {
                    out.extend_from_slice(src);
                }
                Some(out)
            }
            Op::Prelu { x, slope } => {
                let channels = *sh(*x).last().unwrap();
                let sd = d(*slope);
                let share = sd.len() == 1;
                Some(
                    d(*x)
                        .iter()
                        .enumerate()
                        .map(|(i, &v)| {
                            if v >= 0.0 {
                                v
                            } else {
                                sd[if share { 0 } else { i % channels }] * v
                            }
                        })
                        .collect(),
                )
            }
            Op::Tanh(a) => Some(d(*a).iter().map(|x| x.tanh()).collect()),
            Op::Sigmoid(a) => Some(d(*a).iter().map(|x| 1.0 / (1.0 + (-x).exp())).collect()),
            Op::Softmax { x, axis, mask } => {
                let shape = sh(*x);
                let src = d(*x);
                let mut out = vec![0.0; src.len()];
                let m = mask.as_ref().map(|m| m.as_slice());
                match (shape.len(), *axis) {
                    (1, 0) => kernels::softmax_strided(src, &mut out, 0, 1, shape[0], m),
                    (2, 1) => {
                        for i in 0..shape[0] {
                            kernels::softmax_strided(src, &mut out, i * shape[1], 1, shape[1], m);
                        }
                    }
                    (2, 0) => {
                        for j in 0..shape[1] {
                            kernels::softmax_strided(src, &mut out, j, shape[1], shape[0], m);
                        }
                    }
                    _ => unreachable!(),
                }
                Some(out)
            }
            Op::L2Normalize(x) => Some(kernels::l2_normalize(d(*x), L2_EPS)),
            Op::L2NormalizeRows(x) => {
                let (m, n) = (sh(*x)[0], sh(*x)[1]);
                let src = d(*x);
                let mut out = Vec::with_capacity(m * n);
                for i in 0..m {
                    out.extend(kernels::l2_normalize(&src[i * n..(i + 1) * n], L2_EPS));
                }
                Some(out)
            }
            Op::Concat { parts, axis } => {
                let rank = self.nodes[id].tensor.rank();
                if rank == 1 || *axis == 0 {
                    let mut out = Vec::new();
                    for &p in parts {
                        out.extend_from_slice(d(p));
                    }
                    Some(out)
                } else {
                    let rows = self.nodes[id].tensor.shape()[0];
                    let mut out = Vec::new();
                    for i in 0..rows {
                        for &p in parts {
                            let cols = sh(p)[1];
                            out.extend_from_slice(&d(p)[i * cols..(i + 1) * cols]);
                        }
                    }
                    Some(out)
                }
            }
            Op::SumAll(x) => Some(vec![d(*x).iter().sum()]),
            Op::MeanAll(x) => Some(vec![d(*x).iter().sum::<f64>() / d(*x).len() as f64]),
            Op::MeanRows(x) => {
                let (m, n) = (sh(*x)[0], sh(*x)[1]);
                let src = d(*x);
                let mut out = vec![0.0; n];
                for i in 0..m {
                    for j in 0..n {
                        out[j] += src[i * n + j];
                    }
                }
                for v in out.iter_mut() {
                    *v /= m as f64;
                }
                Some(out)
            }
            Op::Reshape(x) => Some(d(*x).to_vec()),
            Op::SliceRows { x, start, len } => {
                let row = if sh(*x).len() == 2 { sh(*x)[1] } else { 1 };
                Some(d(*x)[start * row..(start + len) * row].to_vec())
            }
            Op::GatherRows { table, ids } => {
                let cols = sh(*table)[1];
                let src = d(*table);
                let mut out = Vec::with_capacity(ids.len() * cols);
                for &i in ids.iter() {
                    out.extend_from_slice(&src[i * cols..(i + 1) * cols]);
                }
                Some(out)
            }
            Op::CountSketch { x, h, s } => {
                let src = d(*x);
                let mut out = vec![0.0; self.nodes[id].tensor.len()];
                for i in 0..h.len() {
                    out[h[i]] += s[i] * src[i];
                }
                Some(out)
            }
            Op::CircularConv(a, b) => Some(fft::circular_convolve(d(*a), d(*b)).unwrap()),
            Op::SignedSqrt(x) => Some(d(*x).iter().map(|&v| v.signum() * v.abs().sqrt()).collect()),
            Op::CrossEntropy { logits, target } => {
                let z = d(*logits);
                let maxv = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let lse = z.iter().map(|v| (v - maxv).exp()).sum::<f64>().ln() + maxv;
                Some(vec![lse - z[*target]])
            }
        }
    }
}

/// Backward of y = x / (|x| + eps) for one flat slice.
fn l2_backward(x: &[f64], dz: &[f64], gx: &mut [f64]) {
    let norm = x.iter().map(|v| v * v).sum::<f64>().sqrt();
    let denom = norm + L2_EPS;
    let dot: f64 = dz.iter().zip(x).map(|(d, v)| d * v).sum();
    for ((g, d), &v) in gx.iter_mut().zip(dz).zip(x) {
        let correction = if norm > 0.0 {
            v * dot / (norm * denom * denom)
        } else {
            0.0
        };
        *g += d / denom - correction;
    }
}
