//! Reverse-mode automatic differentiation over dense tensors.
//!
//! The tape is define-by-run: recording an operation computes its value
//! immediately, so a graph is rebuilt for every training step. The op set is
//! closed and every kind is checked against central finite differences in the
//! test suite. Shape mixing is always explicit; there is no broadcasting.

use std::collections::HashMap;

use thiserror::Error;

use crate::tensor::{numel, Tensor};

#[derive(Debug, Error)]
pub enum TapeError {
    #[error("node {node} ({op}): shape mismatch: {detail}")]
    ShapeMismatch {
        node: usize,
        op: &'static str,
        detail: String,
    },
    #[error("node {node} ({op}): non-finite value during {phase}")]
    NonFinite {
        node: usize,
        op: &'static str,
        phase: &'static str,
    },
    #[error("backward requires a scalar output, got shape {0:?}")]
    NonScalarOutput(Vec<usize>),
    #[error("{0}")]
    Contract(String),
}

#[derive(Debug, Error)]
pub enum ParamError {
    #[error("duplicate parameter name {0:?}")]
    DuplicateName(String),
    #[error("unknown parameter name {0:?}")]
    UnknownName(String),
    #[error("parameter {name:?} has shape {current:?}, refusing {offered:?}")]
    ShapeChange {
        name: String,
        current: Vec<usize>,
        offered: Vec<usize>,
    },
}

/// Handle to a tape node.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Param { slot: usize },
    Affine { x: NodeId, w: NodeId, b: NodeId },
    Relu { x: NodeId },
    Add { a: NodeId, b: NodeId },
    Sub { a: NodeId, b: NodeId },
    Mul { a: NodeId, b: NodeId },
    Scale { x: NodeId, factor: f64 },
    ConvCircular { x: NodeId, w: NodeId, b: NodeId, dilation: usize },
    Sum { x: NodeId },
    Mean { x: NodeId },
    SqNorm { x: NodeId },
    PairwiseSqDists { a: NodeId, b: NodeId },
    RqKernel { dists: NodeId, bandwidths: Vec<f64> },
    StopGradient,
    Reshape { x: NodeId },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Param { .. } => "param",
            Op::Affine { .. } => "affine",
            Op::Relu { .. } => "relu",
            Op::Add { .. } => "add",
            Op::Sub { .. } => "sub",
            Op::Mul { .. } => "mul",
            Op::Scale { .. } => "scale",
            Op::ConvCircular { .. } => "conv_circular",
            Op::Sum { .. } => "sum",
            Op::Mean { .. } => "mean",
            Op::SqNorm { .. } => "sq_norm",
            Op::PairwiseSqDists { .. } => "pairwise_sq_dists",
            Op::RqKernel { .. } => "rq_kernel",
            Op::StopGradient => "stop_gradient",
            Op::Reshape { .. } => "reshape",
        }
    }
}

struct Node {
    op: Op,
    value: Tensor,
    requires_grad: bool,
}

/// Named parameter store. Entry order is insertion order and shapes are
/// frozen at insertion.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Tensor>,
    by_name: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, value: Tensor) -> Result<(), ParamError> {
        if self.by_name.contains_key(name) {
            return Err(ParamError::DuplicateName(name.to_string()));
        }
        self.by_name.insert(name.to_string(), self.names.len());
        self.names.push(name.to_string());
        self.values.push(value);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.by_name.get(name).map(|&i| &self.values[i])
    }

    pub fn set(&mut self, name: &str, value: Tensor) -> Result<(), ParamError> {
        let idx = *self
            .by_name
            .get(name)
            .ok_or_else(|| ParamError::UnknownName(name.to_string()))?;
        if self.values[idx].shape() != value.shape() {
            return Err(ParamError::ShapeChange {
                name: name.to_string(),
                current: self.values[idx].shape().to_vec(),
                offered: value.shape().to_vec(),
            });
        }
        self.values[idx] = value;
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn scalar_count(&self) -> usize {
        self.values.iter().map(Tensor::len).sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names
            .iter()
            .map(String::as_str)
            .zip(self.values.iter())
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.names
            .iter()
            .map(String::as_str)
            .zip(self.values.iter_mut())
    }

    pub fn name_at(&self, slot: usize) -> &str {
        &self.names[slot]
    }

    pub fn value_at(&self, slot: usize) -> &Tensor {
        &self.values[slot]
    }

    pub fn value_at_mut(&mut self, slot: usize) -> &mut Tensor {
        &mut self.values[slot]
    }
}

/// Per-parameter gradients keyed by the slot order used in [`Tape::bind_params`].
pub struct Gradients {
    by_slot: Vec<Tensor>,
}

impl Gradients {
    pub fn slot(&self, slot: usize) -> &Tensor {
        &self.by_slot[slot]
    }

    pub fn slots(&self) -> &[Tensor] {
        &self.by_slot
    }

    pub fn all_finite(&self) -> bool {
        self.by_slot.iter().all(Tensor::all_finite)
    }
}

/// Define-by-run gradient tape. Confined to one worker; build a fresh tape
/// per evaluation.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    param_nodes: Vec<NodeId>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    fn push(&mut self, op: Op, value: Tensor, requires_grad: bool) -> Result<NodeId, TapeError> {
        let id = NodeId(self.nodes.len());
        if !value.all_finite() {
            return Err(TapeError::NonFinite {
                node: id.0,
                op: op.name(),
                phase: "forward",
            });
        }
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
        });
        Ok(id)
    }

    fn requires(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    fn shape_err(&self, op: &'static str, detail: String) -> TapeError {
        TapeError::ShapeMismatch {
            node: self.nodes.len(),
            op,
            detail,
        }
    }

    /// Constant input; contributes no gradient.
    pub fn leaf(&mut self, value: Tensor) -> Result<NodeId, TapeError> {
        self.push(Op::Leaf, value, false)
    }

    /// Trainable leaf. Slot indices count up from zero in bind order.
    pub fn param(&mut self, value: Tensor) -> Result<NodeId, TapeError> {
        let slot = self.param_nodes.len();
        let id = self.push(Op::Param { slot }, value, true)?;
        self.param_nodes.push(id);
        Ok(id)
    }

    /// Binds every entry of `store`, in store order. The returned ids are
    /// aligned with gradient slots.
    pub fn bind_params(&mut self, store: &ParamStore) -> Result<Vec<NodeId>, TapeError> {
        store
            .iter()
            .map(|(_, value)| self.param(value.clone()))
            .collect()
    }

    /// `y = x W + b` for `x: [n, p]`, `w: [p, q]`, `b: [q]`.
    pub fn affine(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId, TapeError> {
        let (xs, ws, bs) = (
            self.nodes[x.0].value.shape(),
            self.nodes[w.0].value.shape(),
            self.nodes[b.0].value.shape(),
        );
        if xs.len() != 2 || ws.len() != 2 || bs.len() != 1 || xs[1] != ws[0] || ws[1] != bs[0] {
            return Err(self.shape_err(
                "affine",
                format!("x {xs:?} · w {ws:?} + b {bs:?}"),
            ));
        }
        let (n, p, q) = (xs[0], xs[1], ws[1]);
        let xv = self.nodes[x.0].value.data();
        let wv = self.nodes[w.0].value.data();
        let bv = self.nodes[b.0].value.data();
        let mut out = vec![0.0; n * q];
        for i in 0..n {
            let row = &mut out[i * q..(i + 1) * q];
            row.copy_from_slice(bv);
            for k in 0..p {
                let xik = xv[i * p + k];
                let wrow = &wv[k * q..(k + 1) * q];
                for (o, wv) in row.iter_mut().zip(wrow) {
                    *o += xik * wv;
                }
            }
        }
        let rg = self.requires(x) || self.requires(w) || self.requires(b);
        self.push(Op::Affine { x, w, b }, Tensor::new(vec![n, q], out).unwrap(), rg)
    }

    pub fn relu(&mut self, x: NodeId) -> Result<NodeId, TapeError> {
        let v = &self.nodes[x.0].value;
        let out = Tensor::new(
            v.shape().to_vec(),
            v.data().iter().map(|&a| a.max(0.0)).collect(),
        )
        .unwrap();
        let rg = self.requires(x);
        self.push(Op::Relu { x }, out, rg)
    }

    fn elementwise(
        &mut self,
        a: NodeId,
        b: NodeId,
        op: fn(f64, f64) -> f64,
        make: fn(NodeId, NodeId) -> Op,
        name: &'static str,
    ) -> Result<NodeId, TapeError> {
        let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if av.shape() != bv.shape() {
            return Err(self.shape_err(name, format!("{:?} vs {:?}", av.shape(), bv.shape())));
        }
        let data = av
            .data()
            .iter()
            .zip(bv.data())
            .map(|(&x, &y)| op(x, y))
            .collect();
        let out = Tensor::new(av.shape().to_vec(), data).unwrap();
        let rg = self.requires(a) || self.requires(b);
        self.push(make(a, b), out, rg)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TapeError> {
        self.elementwise(a, b, |x, y| x + y, |a, b| Op::Add { a, b }, "add")
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TapeError> {
        self.elementwise(a, b, |x, y| x - y, |a, b| Op::Sub { a, b }, "sub")
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TapeError> {
        self.elementwise(a, b, |x, y| x * y, |a, b| Op::Mul { a, b }, "mul")
    }

    pub fn scale(&mut self, x: NodeId, factor: f64) -> Result<NodeId, TapeError> {
        let v = &self.nodes[x.0].value;
        let out = Tensor::new(
            v.shape().to_vec(),
            v.data().iter().map(|&a| a * factor).collect(),
        )
        .unwrap();
        let rg = self.requires(x);
        self.push(Op::Scale { x, factor }, out, rg)
    }

    /// Circular 1D convolution with dilation. `x: [n, c_in, width]`,
    /// `w: [c_out, c_in, k]`, `b: [c_out]`. Tap `t` reads offset `t·dilation`,
    /// so a kernel with 1 at tap 0 is the identity.
    pub fn conv_circular(
        &mut self,
        x: NodeId,
        w: NodeId,
        b: NodeId,
        dilation: usize,
    ) -> Result<NodeId, TapeError> {
        let (xs, ws, bs) = (
            self.nodes[x.0].value.shape(),
            self.nodes[w.0].value.shape(),
            self.nodes[b.0].value.shape(),
        );
        if xs.len() != 3 || ws.len() != 3 || bs.len() != 1 || xs[1] != ws[1] || ws[0] != bs[0] {
            return Err(self.shape_err(
                "conv_circular",
                format!("x {xs:?}, w {ws:?}, b {bs:?}"),
            ));
        }
        if dilation == 0 {
            return Err(TapeError::Contract("conv dilation must be >= 1".into()));
        }
        let (n, c_in, width) = (xs[0], xs[1], xs[2]);
        let (c_out, k) = (ws[0], ws[2]);
        let xv = self.nodes[x.0].value.data();
        let wv = self.nodes[w.0].value.data();
        let bv = self.nodes[b.0].value.data();
        let mut out = vec![0.0; n * c_out * width];
        for bi in 0..n {
            for o in 0..c_out {
                let row = &mut out[(bi * c_out + o) * width..(bi * c_out + o + 1) * width];
                row.iter_mut().for_each(|v| *v = bv[o]);
                for c in 0..c_in {
                    let xin = &xv[(bi * c_in + c) * width..(bi * c_in + c + 1) * width];
                    for t in 0..k {
                        let wk = wv[(o * c_in + c) * k + t];
                        if wk == 0.0 {
                            continue;
                        }
                        let off = (t * dilation) % width;
                        // split the circular read into two contiguous runs
                        let head = width - off;
                        for i in 0..head {
                            row[i] += wk * xin[i + off];
                        }
                        for i in head..width {
                            row[i] += wk * xin[i + off - width];
                        }
                    }
                }
            }
        }
        let rg = self.requires(x) || self.requires(w) || self.requires(b);
        self.push(
            Op::ConvCircular { x, w, b, dilation },
            Tensor::new(vec![n, c_out, width], out).unwrap(),
            rg,
        )
    }

    pub fn sum(&mut self, x: NodeId) -> Result<NodeId, TapeError> {
        let total: f64 = self.nodes[x.0].value.data().iter().sum();
        let rg = self.requires(x);
        self.push(Op::Sum { x }, Tensor::scalar(total), rg)
    }

    pub fn mean(&mut self, x: NodeId) -> Result<NodeId, TapeError> {
        let v = &self.nodes[x.0].value;
        if v.is_empty() {
            return Err(TapeError::Contract("mean of an empty tensor".into()));
        }
        let m = v.data().iter().sum::<f64>() / v.len() as f64;
        let rg = self.requires(x);
        self.push(Op::Mean { x }, Tensor::scalar(m), rg)
    }

    /// Squared L2 norm over all entries.
    pub fn sq_norm(&mut self, x: NodeId) -> Result<NodeId, TapeError> {
        let total: f64 = self.nodes[x.0].value.data().iter().map(|&a| a * a).sum();
        let rg = self.requires(x);
        self.push(Op::SqNorm { x }, Tensor::scalar(total), rg)
    }

    /// `D[i, j] = Σ_c (a[i, c] − b[j, c])²` for `a: [n, d]`, `b: [m, d]`.
    pub fn pairwise_sq_dists(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TapeError> {
        let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let (ashape, bshape) = (av.shape(), bv.shape());
        if ashape.len() != 2 || bshape.len() != 2 || ashape[1] != bshape[1] {
            return Err(self.shape_err(
                "pairwise_sq_dists",
                format!("{ashape:?} vs {bshape:?}"),
            ));
        }
        let (n, m, d) = (ashape[0], bshape[0], ashape[1]);
        let (ad, bd) = (av.data(), bv.data());
        let mut out = vec![0.0; n * m];
        if a == b {
            // Within-set distances are symmetric with a zero diagonal.
            for i in 0..n {
                let ai = &ad[i * d..(i + 1) * d];
                for j in i + 1..n {
                    let bj = &ad[j * d..(j + 1) * d];
                    let mut acc = 0.0;
                    for c in 0..d {
                        let diff = ai[c] - bj[c];
                        acc += diff * diff;
                    }
                    out[i * m + j] = acc;
                    out[j * m + i] = acc;
                }
            }
        } else if d == 3 {
            for i in 0..n {
                let (a0, a1, a2) = (ad[i * 3], ad[i * 3 + 1], ad[i * 3 + 2]);
                let row = &mut out[i * m..(i + 1) * m];
                for (j, o) in row.iter_mut().enumerate() {
                    let d0 = a0 - bd[j * 3];
                    let d1 = a1 - bd[j * 3 + 1];
                    let d2 = a2 - bd[j * 3 + 2];
                    *o = d0 * d0 + d1 * d1 + d2 * d2;
                }
            }
        } else {
            for i in 0..n {
                let ai = &ad[i * d..(i + 1) * d];
                for j in 0..m {
                    let bj = &bd[j * d..(j + 1) * d];
                    let mut acc = 0.0;
                    for c in 0..d {
                        let diff = ai[c] - bj[c];
                        acc += diff * diff;
                    }
                    out[i * m + j] = acc;
                }
            }
        }
        let rg = self.requires(a) || self.requires(b);
        self.push(
            Op::PairwiseSqDists { a, b },
            Tensor::new(vec![n, m], out).unwrap(),
            rg,
        )
    }

    /// Rational-quadratic kernel mixture applied to a squared-distance
    /// matrix: `K = Σ_q σ_q² / (σ_q² + D)`.
    pub fn rq_kernel(&mut self, dists: NodeId, bandwidths: &[f64]) -> Result<NodeId, TapeError> {
        if bandwidths.is_empty() {
            return Err(TapeError::Contract("empty kernel bandwidth set".into()));
        }
        let v = &self.nodes[dists.0].value;
        let n = v.len();
        let mut data = vec![0.0; n];
        for s in bandwidths {
            let s2 = s * s;
            let dv = v.data();
            for (o, &d) in data.iter_mut().zip(dv) {
                *o += s2 / (s2 + d);
            }
        }
        let out = Tensor::new(v.shape().to_vec(), data).unwrap();
        let rg = self.requires(dists);
        // The kernel value is bounded in (0, |σ|] for any non-negative
        // distance, so no overflow scan is needed; the distance node has
        // already been checked.
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node {
            op: Op::RqKernel {
                dists,
                bandwidths: bandwidths.to_vec(),
            },
            value: out,
            requires_grad: rg,
        });
        Ok(id)
    }

    /// Identity in value, zero in adjoint.
    pub fn stop_gradient(&mut self, x: NodeId) -> Result<NodeId, TapeError> {
        let value = self.nodes[x.0].value.clone();
        self.push(Op::StopGradient, value, false)
    }

    /// Identity in value and gradient; only the shape changes.
    pub fn reshape(&mut self, x: NodeId, shape: Vec<usize>) -> Result<NodeId, TapeError> {
        let v = &self.nodes[x.0].value;
        if numel(&shape) != v.len() {
            return Err(self.shape_err(
                "reshape",
                format!("{:?} -> {shape:?}", v.shape()),
            ));
        }
        let out = Tensor::new(shape, v.data().to_vec()).unwrap();
        let rg = self.requires(x);
        self.push(Op::Reshape { x }, out, rg)
    }

    /// Reverse pass from a scalar `output`. Returns one gradient per bound
    /// parameter slot; parameters off the path get zero gradients.
    pub fn backward(&self, output: NodeId) -> Result<Gradients, TapeError> {
        let out_node = &self.nodes[output.0];
        if !out_node.value.is_scalar() {
            return Err(TapeError::NonScalarOutput(out_node.value.shape().to_vec()));
        }

        let mut adjoints: Vec<Option<Vec<f64>>> = vec![None; output.0 + 1];
        adjoints[output.0] = Some(vec![1.0]);

        for idx in (0..=output.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            // Parameter adjoints are terminal; leave them in place for collection.
            if matches!(node.op, Op::Param { .. }) {
                if let Some(g) = &adjoints[idx] {
                    if !crate::tensor::all_finite_slice(g) {
                        return Err(TapeError::NonFinite {
                            node: idx,
                            op: node.op.name(),
                            phase: "backward",
                        });
                    }
                }
                continue;
            }
            let Some(grad) = adjoints[idx].take() else {
                continue;
            };
            if !crate::tensor::all_finite_slice(&grad) {
                return Err(TapeError::NonFinite {
                    node: idx,
                    op: node.op.name(),
                    phase: "backward",
                });
            }
            self.propagate(idx, grad, &mut adjoints);
        }

        let by_slot = self
            .param_nodes
            .iter()
            .enumerate()
            .map(|(slot, id)| {
                debug_assert!(
                    matches!(self.nodes[id.0].op, Op::Param { slot: s } if s == slot),
                    "parameter binding order corrupted"
                );
                let shape = self.nodes[id.0].value.shape().to_vec();
                match adjoints.get(id.0).and_then(Option::as_ref) {
                    Some(g) => Tensor::new(shape, g.clone()).unwrap(),
                    None => Tensor::zeros(shape),
                }
            })
            .collect();
        Ok(Gradients { by_slot })
    }

    fn accumulate(&self, adjoints: &mut [Option<Vec<f64>>], target: NodeId, contrib: &[f64]) {
        if !self.requires(target) {
            return;
        }
        match &mut adjoints[target.0] {
            Some(existing) => {
                for (e, c) in existing.iter_mut().zip(contrib) {
                    *e += c;
                }
            }
            slot @ None => *slot = Some(contrib.to_vec()),
        }
    }

    /// Like [`Self::accumulate`] but takes ownership, so a first contribution
    /// lands without a copy.
    fn accumulate_owned(&self, adjoints: &mut [Option<Vec<f64>>], target: NodeId, contrib: Vec<f64>) {
        if !self.requires(target) {
            return;
        }
        match &mut adjoints[target.0] {
            Some(existing) => {
                for (e, c) in existing.iter_mut().zip(&contrib) {
                    *e += c;
                }
            }
            slot @ None => *slot = Some(contrib),
        }
    }

    fn adjoint_buf(&self, adjoints: &mut Vec<Option<Vec<f64>>>, target: NodeId) -> bool {
        if !self.requires(target) {
            return false;
        }
        if adjoints[target.0].is_none() {
            adjoints[target.0] = Some(vec![0.0; self.nodes[target.0].value.len()]);
        }
        true
    }

    fn propagate(&self, idx: usize, mut grad: Vec<f64>, adjoints: &mut Vec<Option<Vec<f64>>>) {
        match &self.nodes[idx].op {
            Op::Leaf | Op::Param { .. } | Op::StopGradient => {}
            Op::Relu { x } => {
                let xv = self.nodes[x.0].value.data();
                for (g, &v) in grad.iter_mut().zip(xv) {
                    if v <= 0.0 {
                        *g = 0.0;
                    }
                }
                self.accumulate_owned(adjoints, *x, grad);
            }
            Op::Add { a, b } => {
                if self.requires(*a) {
                    self.accumulate(adjoints, *a, &grad);
                }
                self.accumulate_owned(adjoints, *b, grad);
            }
            Op::Sub { a, b } => {
                if self.requires(*a) {
                    self.accumulate(adjoints, *a, &grad);
                }
                if self.requires(*b) {
                    grad.iter_mut().for_each(|g| *g = -*g);
                    self.accumulate_owned(adjoints, *b, grad);
                }
            }
            Op::Mul { a, b } => {
                if self.requires(*a) {
                    let bv = self.nodes[b.0].value.data();
                    if self.requires(*b) {
                        let contrib: Vec<f64> =
                            grad.iter().zip(bv).map(|(&g, &v)| g * v).collect();
                        self.accumulate(adjoints, *a, &contrib);
                    } else {
                        for (g, &v) in grad.iter_mut().zip(bv) {
                            *g *= v;
                        }
                        self.accumulate_owned(adjoints, *a, grad);
                        return;
                    }
                }
                if self.requires(*b) {
                    let av = self.nodes[a.0].value.data();
                    for (g, &v) in grad.iter_mut().zip(av) {
                        *g *= v;
                    }
                    self.accumulate_owned(adjoints, *b, grad);
                }
            }
            Op::Scale { x, factor } => {
                if self.requires(*x) {
                    let factor = *factor;
                    grad.iter_mut().for_each(|g| *g *= factor);
                    self.accumulate_owned(adjoints, *x, grad);
                }
            }
            Op::Sum { x } => {
                if self.requires(*x) {
                    let len = self.nodes[x.0].value.len();
                    match &mut adjoints[x.0] {
                        Some(buf) => buf.iter_mut().for_each(|v| *v += grad[0]),
                        slot @ None => *slot = Some(vec![grad[0]; len]),
                    }
                }
            }
            Op::Mean { x } => {
                if self.requires(*x) {
                    let len = self.nodes[x.0].value.len();
                    let g = grad[0] / len as f64;
                    match &mut adjoints[x.0] {
                        Some(buf) => buf.iter_mut().for_each(|v| *v += g),
                        slot @ None => *slot = Some(vec![g; len]),
                    }
                }
            }
            Op::SqNorm { x } => {
                if self.requires(*x) {
                    let xv = self.nodes[x.0].value.data();
                    let g = grad[0];
                    match &mut adjoints[x.0] {
                        Some(buf) => {
                            for (b, &v) in buf.iter_mut().zip(xv) {
                                *b += 2.0 * v * g;
                            }
                        }
                        slot @ None => {
                            *slot = Some(xv.iter().map(|&v| 2.0 * v * g).collect())
                        }
                    }
                }
            }
            Op::Affine { x, w, b } => {
                let xs = self.nodes[x.0].value.shape();
                let ws = self.nodes[w.0].value.shape();
                let (n, p, q) = (xs[0], xs[1], ws[1]);
                if self.adjoint_buf(adjoints, *x) {
                    let wv = self.nodes[w.0].value.data();
                    let buf = adjoints[x.0].as_mut().unwrap();
                    for i in 0..n {
                        for k in 0..p {
                            let mut acc = 0.0;
                            let wrow = &wv[k * q..(k + 1) * q];
                            let grow = &grad[i * q..(i + 1) * q];
                            for c in 0..q {
                                acc += grow[c] * wrow[c];
                            }
                            buf[i * p + k] += acc;
                        }
                    }
                }
                if self.adjoint_buf(adjoints, *w) {
                    let xv = self.nodes[x.0].value.data();
                    let buf = adjoints[w.0].as_mut().unwrap();
                    for i in 0..n {
                        let grow = &grad[i * q..(i + 1) * q];
                        for k in 0..p {
                            let xik = xv[i * p + k];
                            let wrow = &mut buf[k * q..(k + 1) * q];
                            for c in 0..q {
                                wrow[c] += xik * grow[c];
                            }
                        }
                    }
                }
                if self.adjoint_buf(adjoints, *b) {
                    let buf = adjoints[b.0].as_mut().unwrap();
                    for i in 0..n {
                        let grow = &grad[i * q..(i + 1) * q];
                        for c in 0..q {
                            buf[c] += grow[c];
                        }
                    }
                }
            }
            Op::ConvCircular { x, w, b, dilation } => {
                let xs = self.nodes[x.0].value.shape();
                let ws = self.nodes[w.0].value.shape();
                let (n, c_in, width) = (xs[0], xs[1], xs[2]);
                let (c_out, k) = (ws[0], ws[2]);
                if self.adjoint_buf(adjoints, *x) {
                    let wv = self.nodes[w.0].value.data();
                    let buf = adjoints[x.0].as_mut().unwrap();
                    for bi in 0..n {
                        for o in 0..c_out {
                            let grow = &grad[(bi * c_out + o) * width..(bi * c_out + o + 1) * width];
                            for c in 0..c_in {
                                let xbuf =
                                    &mut buf[(bi * c_in + c) * width..(bi * c_in + c + 1) * width];
                                for t in 0..k {
                                    let wk = wv[(o * c_in + c) * k + t];
                                    if wk == 0.0 {
                                        continue;
                                    }
                                    let off = (t * dilation) % width;
                                    let head = width - off;
                                    for i in 0..head {
                                        xbuf[i + off] += wk * grow[i];
                                    }
                                    for i in head..width {
                                        xbuf[i + off - width] += wk * grow[i];
                                    }
                                }
                            }
                        }
                    }
                }
                if self.adjoint_buf(adjoints, *w) {
                    let xv = self.nodes[x.0].value.data();
                    let buf = adjoints[w.0].as_mut().unwrap();
                    for bi in 0..n {
                        for o in 0..c_out {
                            let grow = &grad[(bi * c_out + o) * width..(bi * c_out + o + 1) * width];
                            for c in 0..c_in {
                                let xin =
                                    &xv[(bi * c_in + c) * width..(bi * c_in + c + 1) * width];
                                for t in 0..k {
                                    let off = (t * dilation) % width;
                                    let head = width - off;
                                    let mut acc = 0.0;
                                    for i in 0..head {
                                        acc += grow[i] * xin[i + off];
                                    }
                                    for i in head..width {
                                        acc += grow[i] * xin[i + off - width];
                                    }
                                    buf[(o * c_in + c) * k + t] += acc;
                                }
                            }
                        }
                    }
                }
                if self.adjoint_buf(adjoints, *b) {
                    let buf = adjoints[b.0].as_mut().unwrap();
                    for bi in 0..n {
                        for o in 0..c_out {
                            let grow = &grad[(bi * c_out + o) * width..(bi * c_out + o + 1) * width];
                            buf[o] += grow.iter().sum::<f64>();
                        }
                    }
                }
            }
            Op::PairwiseSqDists { a, b } => {
                let ashape = self.nodes[a.0].value.shape();
                let bshape = self.nodes[b.0].value.shape();
                let (n, m, d) = (ashape[0], bshape[0], ashape[1]);
                let av = self.nodes[a.0].value.data();
                let bv = self.nodes[b.0].value.data();
                if a == b {
                    // Both argument slots hit the same tensor:
                    // dx[i] = Σ_j 2(g[i,j] + g[j,i])(x_i − x_j)
                    if self.adjoint_buf(adjoints, *a) {
                        let buf = adjoints[a.0].as_mut().unwrap();
                        if d == 3 {
                            for i in 0..n {
                                let (x0, x1, x2) = (av[i * 3], av[i * 3 + 1], av[i * 3 + 2]);
                                let (mut s0, mut s1, mut s2) = (0.0, 0.0, 0.0);
                                for j in 0..n {
                                    let g2 = 2.0 * (grad[i * n + j] + grad[j * n + i]);
                                    s0 += g2 * (x0 - av[j * 3]);
                                    s1 += g2 * (x1 - av[j * 3 + 1]);
                                    s2 += g2 * (x2 - av[j * 3 + 2]);
                                }
                                buf[i * 3] += s0;
                                buf[i * 3 + 1] += s1;
                                buf[i * 3 + 2] += s2;
                            }
                        } else {
                            for i in 0..n {
                                for j in 0..n {
                                    let g2 = 2.0 * (grad[i * n + j] + grad[j * n + i]);
                                    for c in 0..d {
                                        buf[i * d + c] += g2 * (av[i * d + c] - av[j * d + c]);
                                    }
                                }
                            }
                        }
                    }
                    return;
                }
                if self.adjoint_buf(adjoints, *a) {
                    let buf = adjoints[a.0].as_mut().unwrap();
                    if d == 3 {
                        for i in 0..n {
                            let (a0, a1, a2) = (av[i * 3], av[i * 3 + 1], av[i * 3 + 2]);
                            let grow = &grad[i * m..(i + 1) * m];
                            let (mut s0, mut s1, mut s2) = (0.0, 0.0, 0.0);
                            for (j, &g) in grow.iter().enumerate() {
                                let g2 = 2.0 * g;
                                s0 += g2 * (a0 - bv[j * 3]);
                                s1 += g2 * (a1 - bv[j * 3 + 1]);
                                s2 += g2 * (a2 - bv[j * 3 + 2]);
                            }
                            buf[i * 3] += s0;
                            buf[i * 3 + 1] += s1;
                            buf[i * 3 + 2] += s2;
                        }
                    } else {
                        for i in 0..n {
                            for j in 0..m {
                                let g = 2.0 * grad[i * m + j];
                                for c in 0..d {
                                    buf[i * d + c] += g * (av[i * d + c] - bv[j * d + c]);
                                }
                            }
                        }
                    }
                }
                if self.adjoint_buf(adjoints, *b) {
                    let buf = adjoints[b.0].as_mut().unwrap();
                    if d == 3 {
                        for j in 0..m {
                            let (b0, b1, b2) = (bv[j * 3], bv[j * 3 + 1], bv[j * 3 + 2]);
                            let (mut s0, mut s1, mut s2) = (0.0, 0.0, 0.0);
                            for i in 0..n {
                                let g2 = 2.0 * grad[i * m + j];
                                s0 += g2 * (av[i * 3] - b0);
                                s1 += g2 * (av[i * 3 + 1] - b1);
                                s2 += g2 * (av[i * 3 + 2] - b2);
                            }
                            buf[j * 3] -= s0;
                            buf[j * 3 + 1] -= s1;
                            buf[j * 3 + 2] -= s2;
                        }
                    } else {
                        for i in 0..n {
                            for j in 0..m {
                                let g = 2.0 * grad[i * m + j];
                                for c in 0..d {
                                    buf[j * d + c] -= g * (av[i * d + c] - bv[j * d + c]);
                                }
                            }
                        }
                    }
                }
            }
            Op::RqKernel { dists, bandwidths } => {
                if self.requires(*dists) {
                    // dK/dD = Σ_q −σ_q² / (σ_q² + D)²
                    let dv = self.nodes[dists.0].value.data();
                    let mut contrib = vec![0.0; grad.len()];
                    for s in bandwidths {
                        let s2 = s * s;
                        for ((c, &d), g) in contrib.iter_mut().zip(dv).zip(&grad) {
                            let r = 1.0 / (s2 + d);
                            *c -= s2 * r * r * g;
                        }
                    }
                    self.accumulate_owned(adjoints, *dists, contrib);
                }
            }
            Op::Reshape { x } => {
                self.accumulate_owned(adjoints, *x, grad);
            }
        }
    }
}
