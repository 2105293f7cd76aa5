//! Reverse-mode automatic differentiation over a fixed operator set.
//!
//! A [`Graph`] records every executed op in execution order, which is a valid
//! topological order, so `backward` is a single reverse sweep. Graphs are
//! single-threaded; independent graphs may be built on separate threads.

use std::collections::BTreeMap;

use crate::params::{ParamId, ParamStore};
use crate::tensor::{cols_of, gemm, invalid, rows_of, split_axis, Real, Result, Tensor, TensorError};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Input,
    Param(ParamId),
    MatMul { a: NodeId, b: NodeId, m: usize, k: usize, n: usize },
    MatMulNt { a: NodeId, b: NodeId, m: usize, k: usize, n: usize },
    Transpose { a: NodeId, rows: usize, cols: usize },
    Add { a: NodeId, b: NodeId },
    Sub { a: NodeId, b: NodeId },
    Mul { a: NodeId, b: NodeId },
    Div { a: NodeId, b: NodeId },
    Minimum { a: NodeId, b: NodeId },
    Maximum { a: NodeId, b: NodeId },
    AddRow { a: NodeId, row: NodeId },
    ScaleRows { a: NodeId, s: NodeId },
    Scale { a: NodeId, c: Real },
    AddScalar { a: NodeId },
    Relu { a: NodeId },
    Gelu { a: NodeId },
    Softplus { a: NodeId },
    Exp { a: NodeId },
    Log { a: NodeId },
    Abs { a: NodeId },
    Pow { a: NodeId, p: Real },
    Sum { a: NodeId },
    SumRows { a: NodeId },
    Concat { inputs: Vec<NodeId>, axis: usize },
    Slice { a: NodeId, axis: usize, start: usize },
    Gather { a: NodeId, idx: Vec<usize> },
    Reshape { a: NodeId },
    Softmax { a: NodeId, axis: usize },
    LayerNorm { a: NodeId, gamma: NodeId, beta: NodeId, axis: usize, rstd: Vec<Real> },
    MaxOverSet { a: NodeId, argmax: Vec<usize> },
    MeanOverSet { a: NodeId, set: usize },
    L1Norm { a: NodeId },
    L2Normalize { a: NodeId, norms: Vec<Real> },
    CrossEntropy { logits: NodeId, targets: Vec<usize>, probs: Vec<Real> },
}

#[derive(Debug, Clone)]
struct Node {
    shape: Vec<usize>,
    value: Vec<Real>,
    op: Op,
    requires_grad: bool,
}

/// Gradients produced by one backward sweep.
#[derive(Debug, Clone, Default)]
pub struct Gradients {
    leaves: BTreeMap<NodeId, Vec<Real>>,
    params: BTreeMap<ParamId, Vec<Real>>,
}

impl Gradients {
    /// Gradient of an input leaf created with `requires_grad`.
    pub fn node(&self, id: NodeId) -> Option<&[Real]> {
        self.leaves.get(&id).map(Vec::as_slice)
    }

    pub fn param(&self, id: ParamId) -> Option<&[Real]> {
        self.params.get(&id).map(Vec::as_slice)
    }

    /// Parameter gradients in ascending id order.
    pub fn params(&self) -> impl Iterator<Item = (ParamId, &[Real])> {
        self.params.iter().map(|(k, v)| (*k, v.as_slice()))
    }

    /// Sums another set of gradients into this one (fixed key order).
    pub fn merge(&mut self, other: &Gradients) {
        for (k, v) in &other.params {
            match self.params.get_mut(k) {
                Some(dst) => dst.iter_mut().zip(v).for_each(|(a, b)| *a += *b),
                None => {
                    self.params.insert(*k, v.clone());
                }
            }
        }
    }
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    param_nodes: BTreeMap<ParamId, NodeId>,
    frozen: Option<Vec<bool>>,
    no_grad: bool,
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    /// A graph that records values only; parameters enter as constants.
    pub fn inference() -> Self {
        Graph {
            no_grad: true,
            ..Self::default()
        }
    }

    /// Parameters whose flag is `true` enter this graph as constants.
    pub fn with_frozen(frozen: Vec<bool>) -> Self {
        Graph {
            frozen: Some(frozen),
            ..Self::default()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &[Real] {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    pub fn scalar(&self, id: NodeId) -> Real {
        self.nodes[id.0].value[0]
    }

    pub fn tensor(&self, id: NodeId) -> Tensor {
        let n = &self.nodes[id.0];
        Tensor::new(&n.shape, n.value.clone()).expect("node invariant")
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<Real>, op: Op, requires_grad: bool) -> NodeId {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        self.nodes.push(Node {
            shape,
            value,
            op,
            requires_grad: requires_grad && !self.no_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn rg(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|id| self.nodes[id.0].requires_grad)
    }

    fn node(&self, id: NodeId) -> &Node {
        &self.nodes[id.0]
    }

    /// Adds a tensor as a leaf; it is differentiable iff `t.requires_grad()`.
    pub fn input(&mut self, t: &Tensor) -> NodeId {
        self.push(t.shape().to_vec(), t.data().to_vec(), Op::Input, t.requires_grad())
    }

    /// Adds a non-differentiable constant.
    pub fn constant(&mut self, shape: &[usize], data: Vec<Real>) -> Result<NodeId> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(TensorError::ShapeMismatch {
                op: "constant",
                lhs: shape.to_vec(),
                rhs: vec![data.len()],
            });
        }
        Ok(self.push(shape.to_vec(), data, Op::Input, false))
    }

    /// Brings a stored parameter into the graph (once per graph).
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> NodeId {
        if let Some(n) = self.param_nodes.get(&id) {
            return *n;
        }
        let t = store.get(id);
        let trainable = !self
            .frozen
            .as_ref()
            .is_some_and(|f| f.get(id.index()).copied().unwrap_or(false));
        let n = self.push(t.shape().to_vec(), t.data().to_vec(), Op::Param(id), trainable);
        self.param_nodes.insert(id, n);
        n
    }

    // ---- linear algebra -------------------------------------------------

    /// `a [.., k] · b [k, n] -> [.., n]`.
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (sa, sb) = (self.node(a).shape.clone(), self.node(b).shape.clone());
        if sa.is_empty() || sb.len() != 2 || cols_of(&sa) != sb[0] {
            return Err(TensorError::ShapeMismatch { op: "matmul", lhs: sa, rhs: sb });
        }
        let (m, k, n) = (rows_of(&sa), sb[0], sb[1]);
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, &self.node(a).value, (k, 1), &self.node(b).value, (n, 1), &mut out, false);
        let mut shape = sa;
        *shape.last_mut().unwrap() = n;
        let rg = self.rg(&[a, b]);
        Ok(self.push(shape, out, Op::MatMul { a, b, m, k, n }, rg))
    }

    /// `a [m, k] · bᵀ` with `b [n, k]` -> `[m, n]`.
    pub fn matmul_nt(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (sa, sb) = (self.node(a).shape.clone(), self.node(b).shape.clone());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[1] {
            return Err(TensorError::ShapeMismatch { op: "matmul_nt", lhs: sa, rhs: sb });
        }
        let (m, k, n) = (sa[0], sa[1], sb[0]);
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, &self.node(a).value, (k, 1), &self.node(b).value, (1, k), &mut out, false);
        let rg = self.rg(&[a, b]);
        Ok(self.push(vec![m, n], out, Op::MatMulNt { a, b, m, k, n }, rg))
    }

    pub fn transpose(&mut self, a: NodeId) -> Result<NodeId> {
        let s = self.node(a).shape.clone();
        if s.len() != 2 {
            return Err(invalid("transpose", format!("expected rank 2, got {s:?}")));
        }
        let (r, c) = (s[0], s[1]);
        let v = &self.node(a).value;
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = v[i * c + j];
            }
        }
        let rg = self.rg(&[a]);
        Ok(self.push(vec![c, r], out, Op::Transpose { a, rows: r, cols: c }, rg))
    }

    // ---- elementwise ------------------------------------------------------

    fn same_shape(&self, op: &'static str, a: NodeId, b: NodeId) -> Result<()> {
        let (sa, sb) = (&self.node(a).shape, &self.node(b).shape);
        if sa != sb {
            return Err(TensorError::ShapeMismatch { op, lhs: sa.clone(), rhs: sb.clone() });
        }
        Ok(())
    }

    fn binary(&mut self, op_name: &'static str, a: NodeId, b: NodeId, f: impl Fn(Real, Real) -> Real, op: Op) -> Result<NodeId> {
        self.same_shape(op_name, a, b)?;
        let out = self.node(a).value.iter().zip(&self.node(b).value).map(|(x, y)| f(*x, *y)).collect();
        let rg = self.rg(&[a, b]);
        Ok(self.push(self.node(a).shape.clone(), out, op, rg))
    }

    fn unary(&mut self, a: NodeId, f: impl Fn(Real) -> Real, op: Op) -> NodeId {
        let out = self.node(a).value.iter().map(|x| f(*x)).collect();
        let rg = self.rg(&[a]);
        self.push(self.node(a).shape.clone(), out, op, rg)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary("add", a, b, |x, y| x + y, Op::Add { a, b })
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub { a, b })
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul { a, b })
    }

    pub fn div(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary("div", a, b, |x, y| x / y, Op::Div { a, b })
    }

    /// Elementwise minimum; ties route the gradient to `a`.
    pub fn minimum(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary("minimum", a, b, |x, y| if x <= y { x } else { y }, Op::Minimum { a, b })
    }

    /// Elementwise maximum; ties route the gradient to `a`.
    pub fn maximum(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary("maximum", a, b, |x, y| if x >= y { x } else { y }, Op::Maximum { a, b })
    }

    /// Adds a `[n]` row to every row of `a [.., n]`.
    pub fn add_row(&mut self, a: NodeId, row: NodeId) -> Result<NodeId> {
        let (sa, sr) = (self.node(a).shape.clone(), self.node(row).shape.clone());
        let n = cols_of(&sa);
        if sr.iter().product::<usize>() != n || sa.is_empty() {
            return Err(TensorError::ShapeMismatch { op: "add_row", lhs: sa, rhs: sr });
        }
        let r = &self.node(row).value;
        let out = self.node(a).value.chunks(n).flat_map(|c| c.iter().zip(r).map(|(x, y)| x + y)).collect();
        let rg = self.rg(&[a, row]);
        Ok(self.push(sa, out, Op::AddRow { a, row }, rg))
    }

    /// Multiplies row `i` of `a [m, n]` by `s[i]` (`s` has `m` entries).
    pub fn scale_rows(&mut self, a: NodeId, s: NodeId) -> Result<NodeId> {
        let (sa, ss) = (self.node(a).shape.clone(), self.node(s).shape.clone());
        let (m, n) = (rows_of(&sa), cols_of(&sa));
        if ss.iter().product::<usize>() != m || sa.is_empty() {
            return Err(TensorError::ShapeMismatch { op: "scale_rows", lhs: sa, rhs: ss });
        }
        let sv = &self.node(s).value;
        let out = self.node(a).value.chunks(n).zip(sv).flat_map(|(c, f)| c.iter().map(move |x| x * f)).collect();
        let rg = self.rg(&[a, s]);
        Ok(self.push(sa, out, Op::ScaleRows { a, s }, rg))
    }

    pub fn scale(&mut self, a: NodeId, c: Real) -> NodeId {
        self.unary(a, |x| x * c, Op::Scale { a, c })
    }

    pub fn add_scalar(&mut self, a: NodeId, c: Real) -> NodeId {
        self.unary(a, |x| x + c, Op::AddScalar { a })
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        self.unary(a, |x| if x > 0.0 { x } else { 0.0 }, Op::Relu { a })
    }

    /// Tanh approximation of GELU.
    pub fn gelu(&mut self, a: NodeId) -> NodeId {
        self.unary(
            a,
            |x| {
                let u = GELU_C as Real * (x + 0.044715 * x * x * x);
                0.5 * x * (1.0 + u.tanh())
            },
            Op::Gelu { a },
        )
    }

    pub fn softplus(&mut self, a: NodeId) -> NodeId {
        self.unary(a, softplus, Op::Softplus { a })
    }

    pub fn exp(&mut self, a: NodeId) -> NodeId {
        self.unary(a, Real::exp, Op::Exp { a })
    }

    /// Natural log; defined for strictly positive inputs.
    pub fn log(&mut self, a: NodeId) -> NodeId {
        self.unary(a, Real::ln, Op::Log { a })
    }

    pub fn abs(&mut self, a: NodeId) -> NodeId {
        self.unary(a, Real::abs, Op::Abs { a })
    }

    /// `x^p`; defined for strictly positive inputs.
    pub fn pow(&mut self, a: NodeId, p: Real) -> NodeId {
        self.unary(a, |x| x.powf(p), Op::Pow { a, p })
    }

    // ---- reductions -----------------------------------------------------

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let s = self.node(a).value.iter().sum();
        let rg = self.rg(&[a]);
        self.push(vec![], vec![s], Op::Sum { a }, rg)
    }

    pub fn mean(&mut self, a: NodeId) -> NodeId {
        let n = self.node(a).value.len().max(1);
        let s = self.sum(a);
        self.scale(s, 1.0 / n as Real)
    }

    /// Column sums: `[.., n] -> [n]`.
    pub fn sum_rows(&mut self, a: NodeId) -> NodeId {
        let n = cols_of(&self.node(a).shape);
        let mut out = vec![0.0; n];
        for c in self.node(a).value.chunks(n.max(1)) {
            out.iter_mut().zip(c).for_each(|(o, x)| *o += *x);
        }
        let rg = self.rg(&[a]);
        self.push(vec![n], out, Op::SumRows { a }, rg)
    }

    /// Max over consecutive groups of `set` rows: `[g·set, d] -> [g, d]`.
    /// Ties pick the earliest row.
    pub fn max_over_set(&mut self, a: NodeId, set: usize) -> Result<NodeId> {
        let (g, d) = self.set_dims("max_over_set", a, set)?;
        let v = &self.node(a).value;
        let mut out = vec![Real::NEG_INFINITY; g * d];
        let mut argmax = vec![0usize; g * d];
        for gi in 0..g {
            for s in 0..set {
                let row = gi * set + s;
                for j in 0..d {
                    let x = v[row * d + j];
                    if x > out[gi * d + j] || s == 0 {
                        out[gi * d + j] = x;
                        argmax[gi * d + j] = row;
                    }
                }
            }
        }
        let rg = self.rg(&[a]);
        Ok(self.push(vec![g, d], out, Op::MaxOverSet { a, argmax }, rg))
    }

    /// Mean over consecutive groups of `set` rows: `[g·set, d] -> [g, d]`.
    pub fn mean_over_set(&mut self, a: NodeId, set: usize) -> Result<NodeId> {
        let (g, d) = self.set_dims("mean_over_set", a, set)?;
        let v = &self.node(a).value;
        let mut out = vec![0.0; g * d];
        for gi in 0..g {
            for s in 0..set {
                let row = gi * set + s;
                for j in 0..d {
                    out[gi * d + j] += v[row * d + j];
                }
            }
        }
        let inv = 1.0 / set as Real;
        out.iter_mut().for_each(|x| *x *= inv);
        let rg = self.rg(&[a]);
        Ok(self.push(vec![g, d], out, Op::MeanOverSet { a, set }, rg))
    }

    fn set_dims(&self, op: &'static str, a: NodeId, set: usize) -> Result<(usize, usize)> {
        let s = &self.node(a).shape;
        let (rows, d) = (rows_of(s), cols_of(s));
        if set == 0 || s.len() < 2 || rows % set != 0 {
            return Err(invalid(op, format!("{rows} rows not divisible into sets of {set}")));
        }
        Ok((rows / set, d))
    }

    /// Row-wise L1 norm: `[.., n] -> [rows]`.
    pub fn l1_norm(&mut self, a: NodeId) -> NodeId {
        let s = self.node(a).shape.clone();
        let n = cols_of(&s).max(1);
        let out: Vec<Real> = self.node(a).value.chunks(n).map(|c| c.iter().map(|x| x.abs()).sum()).collect();
        let rg = self.rg(&[a]);
        self.push(vec![out.len()], out, Op::L1Norm { a }, rg)
    }

    /// Row-wise L2 normalisation. Rows with norm below 1e-12 map to zero.
    pub fn l2_normalize(&mut self, a: NodeId) -> NodeId {
        let s = self.node(a).shape.clone();
        let n = cols_of(&s).max(1);
        let mut norms = Vec::new();
        let mut out = Vec::with_capacity(self.node(a).value.len());
        for c in self.node(a).value.chunks(n) {
            let nrm = c.iter().map(|x| x * x).sum::<Real>().sqrt();
            norms.push(nrm);
            if nrm < 1e-12 {
                out.extend(std::iter::repeat_n(0.0, c.len()));
            } else {
                out.extend(c.iter().map(|x| x / nrm));
            }
        }
        let rg = self.rg(&[a]);
        self.push(s, out, Op::L2Normalize { a, norms }, rg)
    }

    // ---- shape ----------------------------------------------------------

    pub fn reshape(&mut self, a: NodeId, shape: &[usize]) -> Result<NodeId> {
        let s = &self.node(a).shape;
        if shape.iter().product::<usize>() != self.node(a).value.len() {
            return Err(TensorError::ShapeMismatch { op: "reshape", lhs: s.clone(), rhs: shape.to_vec() });
        }
        let v = self.node(a).value.clone();
        let rg = self.rg(&[a]);
        Ok(self.push(shape.to_vec(), v, Op::Reshape { a }, rg))
    }

    /// Concatenates along `axis`; all other extents must agree.
    pub fn concat(&mut self, inputs: &[NodeId], axis: usize) -> Result<NodeId> {
        let first = inputs.first().ok_or_else(|| invalid("concat", "no inputs"))?;
        let s0 = self.node(*first).shape.clone();
        if axis >= s0.len() {
            return Err(TensorError::AxisOutOfRange { op: "concat", axis, rank: s0.len() });
        }
        let mut total = 0;
        for id in inputs {
            let s = &self.node(*id).shape;
            let ok = s.len() == s0.len() && s.iter().zip(&s0).enumerate().all(|(i, (x, y))| i == axis || x == y);
            if !ok {
                return Err(TensorError::ShapeMismatch { op: "concat", lhs: s0, rhs: s.clone() });
            }
            total += s[axis];
        }
        let (outer, _, inner) = split_axis(&s0, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for id in inputs {
                let n = &self.node(*id);
                let len = n.shape[axis] * inner;
                out.extend_from_slice(&n.value[o * len..(o + 1) * len]);
            }
        }
        let mut shape = s0;
        shape[axis] = total;
        let rg = self.rg(inputs);
        Ok(self.push(shape, out, Op::Concat { inputs: inputs.to_vec(), axis }, rg))
    }

    /// Keeps indices `start..end` along `axis`.
    pub fn slice(&mut self, a: NodeId, axis: usize, start: usize, end: usize) -> Result<NodeId> {
        let s = self.node(a).shape.clone();
        if axis >= s.len() {
            return Err(TensorError::AxisOutOfRange { op: "slice", axis, rank: s.len() });
        }
        if start > end || end > s[axis] {
            return Err(invalid("slice", format!("range {start}..{end} outside extent {}", s[axis])));
        }
        let (outer, len, inner) = split_axis(&s, axis);
        let v = &self.node(a).value;
        let mut out = Vec::with_capacity(outer * (end - start) * inner);
        for o in 0..outer {
            let base = o * len * inner;
            out.extend_from_slice(&v[base + start * inner..base + end * inner]);
        }
        let mut shape = s;
        shape[axis] = end - start;
        let rg = self.rg(&[a]);
        Ok(self.push(shape, out, Op::Slice { a, axis, start }, rg))
    }

    /// Selects rows (first axis) by index; repeats allowed.
    pub fn gather(&mut self, a: NodeId, idx: &[usize]) -> Result<NodeId> {
        let s = self.node(a).shape.clone();
        if s.is_empty() {
            return Err(invalid("gather", "cannot gather from a scalar"));
        }
        let inner: usize = s[1..].iter().product();
        if let Some(bad) = idx.iter().find(|&&i| i >= s[0]) {
            return Err(invalid("gather", format!("index {bad} out of range for {} rows", s[0])));
        }
        let v = &self.node(a).value;
        let mut out = Vec::with_capacity(idx.len() * inner);
        for &i in idx {
            out.extend_from_slice(&v[i * inner..(i + 1) * inner]);
        }
        let mut shape = s;
        shape[0] = idx.len();
        let rg = self.rg(&[a]);
        Ok(self.push(shape, out, Op::Gather { a, idx: idx.to_vec() }, rg))
    }

    /// Row lookup into an embedding table `[vocab, dim]`.
    pub fn embedding_lookup(&mut self, table: NodeId, ids: &[usize]) -> Result<NodeId> {
        if self.node(table).shape.len() != 2 {
            return Err(invalid("embedding_lookup", "table must be rank 2"));
        }
        self.gather(table, ids)
    }

    // ---- normalisation --------------------------------------------------

    pub fn softmax(&mut self, a: NodeId, axis: usize) -> Result<NodeId> {
        let s = self.node(a).shape.clone();
        if axis >= s.len() {
            return Err(TensorError::AxisOutOfRange { op: "softmax", axis, rank: s.len() });
        }
        let (outer, len, inner) = split_axis(&s, axis);
        let v = &self.node(a).value;
        let mut out = vec![0.0; v.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| o * len * inner + j * inner + i;
                let mx = (0..len).map(|j| v[at(j)]).fold(Real::NEG_INFINITY, Real::max);
                let mut z = 0.0;
                for j in 0..len {
                    let e = (v[at(j)] - mx).exp();
                    out[at(j)] = e;
                    z += e;
                }
                for j in 0..len {
                    out[at(j)] /= z;
                }
            }
        }
        let rg = self.rg(&[a]);
        Ok(self.push(s, out, Op::Softmax { a, axis }, rg))
    }

    /// Normalises along `axis` then applies per-position `gamma`, `beta`.
    pub fn layer_norm(&mut self, a: NodeId, gamma: NodeId, beta: NodeId, axis: usize, eps: Real) -> Result<NodeId> {
        let s = self.node(a).shape.clone();
        if axis >= s.len() {
            return Err(TensorError::AxisOutOfRange { op: "layer_norm", axis, rank: s.len() });
        }
        let (outer, len, inner) = split_axis(&s, axis);
        for p in [gamma, beta] {
            if self.node(p).value.len() != len {
                return Err(TensorError::ShapeMismatch { op: "layer_norm", lhs: s, rhs: self.node(p).shape.clone() });
            }
        }
        let v = &self.node(a).value;
        let (gv, bv) = (&self.node(gamma).value, &self.node(beta).value);
        let mut out = vec![0.0; v.len()];
        let mut rstd = Vec::with_capacity(outer * inner);
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| o * len * inner + j * inner + i;
                let mean = (0..len).map(|j| v[at(j)]).sum::<Real>() / len as Real;
                let var = (0..len).map(|j| (v[at(j)] - mean).powi(2)).sum::<Real>() / len as Real;
                let r = 1.0 / (var + eps).sqrt();
                rstd.push(r);
                for j in 0..len {
                    out[at(j)] = (v[at(j)] - mean) * r * gv[j] + bv[j];
                }
            }
        }
        let rg = self.rg(&[a, gamma, beta]);
        Ok(self.push(s, out, Op::LayerNorm { a, gamma, beta, axis, rstd }, rg))
    }

    /// Per-row `-log softmax(logits)[target]`: `[m, c] -> [m]`.
    pub fn cross_entropy_with_logits(&mut self, logits: NodeId, targets: &[usize]) -> Result<NodeId> {
        let s = self.node(logits).shape.clone();
        let (m, c) = (rows_of(&s), cols_of(&s));
        if s.len() != 2 || targets.len() != m {
            return Err(TensorError::ShapeMismatch { op: "cross_entropy", lhs: s, rhs: vec![targets.len()] });
        }
        if let Some(bad) = targets.iter().find(|&&t| t >= c) {
            return Err(invalid("cross_entropy", format!("target {bad} out of range for {c} classes")));
        }
        let v = &self.node(logits).value;
        let mut probs = vec![0.0; m * c];
        let mut out = Vec::with_capacity(m);
        for r in 0..m {
            let row = &v[r * c..(r + 1) * c];
            let mx = row.iter().copied().fold(Real::NEG_INFINITY, Real::max);
            let z: Real = row.iter().map(|x| (x - mx).exp()).sum();
            let lz = z.ln() + mx;
            for j in 0..c {
                probs[r * c + j] = (row[j] - lz).exp();
            }
            out.push(lz - row[targets[r]]);
        }
        let rg = self.rg(&[logits]);
        Ok(self.push(vec![m], out, Op::CrossEntropy { logits, targets: targets.to_vec(), probs }, rg))
    }

    // ---- backward -------------------------------------------------------

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        let ln = &self.nodes[loss.0];
        if ln.value.len() != 1 {
            return Err(TensorError::NonScalarLoss(ln.shape.clone()));
        }
        let mut grads: Vec<Option<Vec<Real>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        let mut result = Gradients::default();
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                grads[i] = None;
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            match &node.op {
                Op::Input => {
                    result.leaves.insert(NodeId(i), g);
                }
                Op::Param(pid) => {
                    result.params.insert(*pid, g);
                }
                op => self.backprop(op, node, &g, &mut grads),
            }
        }
        Ok(result)
    }

    /// Runs backward and adds parameter gradients into the store.
    pub fn backward_into(&self, loss: NodeId, store: &mut ParamStore) -> Result<Gradients> {
        let g = self.backward(loss)?;
        store.accumulate(&g)?;
        Ok(g)
    }

    fn slot<'a>(&self, grads: &'a mut [Option<Vec<Real>>], id: NodeId) -> Option<&'a mut Vec<Real>> {
        let n = &self.nodes[id.0];
        if !n.requires_grad {
            return None;
        }
        Some(grads[id.0].get_or_insert_with(|| vec![0.0; n.value.len()]))
    }

    fn backprop(&self, op: &Op, node: &Node, g: &[Real], grads: &mut [Option<Vec<Real>>]) {
        let y = &node.value;
        match op {
            Op::Input | Op::Param(_) => unreachable!(),
            Op::MatMul { a, b, m, k, n } => {
                let (m, k, n) = (*m, *k, *n);
                let bv = &self.node(*b).value;
                if let Some(ga) = self.slot(grads, *a) {
                    // dA = dC · Bᵀ
                    gemm(m, n, k, g, (n, 1), bv, (1, n), ga, true);
                }
                let av = &self.node(*a).value;
                if let Some(gb) = self.slot(grads, *b) {
                    // dB = Aᵀ · dC
                    gemm(k, m, n, av, (1, k), g, (n, 1), gb, true);
                }
            }
            Op::MatMulNt { a, b, m, k, n } => {
                let (m, k, n) = (*m, *k, *n);
                let bv = &self.node(*b).value;
                if let Some(ga) = self.slot(grads, *a) {
                    // dA = dC · B
                    gemm(m, n, k, g, (n, 1), bv, (k, 1), ga, true);
                }
                let av = &self.node(*a).value;
                if let Some(gb) = self.slot(grads, *b) {
                    // dB = dCᵀ · A
                    gemm(n, m, k, g, (1, n), av, (k, 1), gb, true);
                }
            }
            Op::Transpose { a, rows, cols } => {
                if let Some(ga) = self.slot(grads, *a) {
                    for i in 0..*rows {
                        for j in 0..*cols {
                            ga[i * cols + j] += g[j * rows + i];
                        }
                    }
                }
            }
            Op::Add { a, b } => {
                for id in [a, b] {
                    if let Some(gx) = self.slot(grads, *id) {
                        gx.iter_mut().zip(g).for_each(|(x, d)| *x += d);
                    }
                }
            }
            Op::Sub { a, b } => {
                if let Some(ga) = self.slot(grads, *a) {
                    ga.iter_mut().zip(g).for_each(|(x, d)| *x += d);
                }
                if let Some(gb) = self.slot(grads, *b) {
                    gb.iter_mut().zip(g).for_each(|(x, d)| *x -= d);
                }
            }
            Op::Mul { a, b } => {
                let (av, bv) = (&self.node(*a).value, &self.node(*b).value);
                if let Some(ga) = self.slot(grads, *a) {
                    for i in 0..g.len() {
                        ga[i] += g[i] * bv[i];
                    }
                }
                if let Some(gb) = self.slot(grads, *b) {
                    for i in 0..g.len() {
                        gb[i] += g[i] * av[i];
                    }
                }
            }
            Op::Div { a, b } => {
                let (av, bv) = (&self.node(*a).value, &self.node(*b).value);
                if let Some(ga) = self.slot(grads, *a) {
                    for i in 0..g.len() {
                        ga[i] += g[i] / bv[i];
                    }
                }
                if let Some(gb) = self.slot(grads, *b) {
                    for i in 0..g.len() {
                        gb[i] -= g[i] * av[i] / (bv[i] * bv[i]);
                    }
                }
            }
            Op::Minimum { a, b } | Op::Maximum { a, b } => {
                let is_min = matches!(op, Op::Minimum { .. });
                let (av, bv) = (&self.node(*a).value, &self.node(*b).value);
                let pick_a: Vec<bool> = av
                    .iter()
                    .zip(bv)
                    .map(|(x, y)| if is_min { x <= y } else { x >= y })
                    .collect();
                if let Some(ga) = self.slot(grads, *a) {
                    for i in 0..g.len() {
                        if pick_a[i] {
                            ga[i] += g[i];
                        }
                    }
                }
                if let Some(gb) = self.slot(grads, *b) {
                    for i in 0..g.len() {
                        if !pick_a[i] {
                            gb[i] += g[i];
                        }
                    }
                }
            }
            Op::AddRow { a, row } => {
                if let Some(ga) = self.slot(grads, *a) {
                    ga.iter_mut().zip(g).for_each(|(x, d)| *x += d);
                }
                if let Some(gr) = self.slot(grads, *row) {
                    let n = gr.len();
                    for c in g.chunks(n) {
                        gr.iter_mut().zip(c).for_each(|(x, d)| *x += d);
                    }
                }
            }
            Op::ScaleRows { a, s } => {
                let n = cols_of(&node.shape).max(1);
                let sv = &self.node(*s).value;
                if let Some(ga) = self.slot(grads, *a) {
                    for (r, f) in sv.iter().enumerate() {
                        for j in 0..n {
                            ga[r * n + j] += g[r * n + j] * f;
                        }
                    }
                }
                let av = &self.node(*a).value;
                if let Some(gs) = self.slot(grads, *s) {
                    for (r, gsr) in gs.iter_mut().enumerate() {
                        *gsr += (0..n).map(|j| g[r * n + j] * av[r * n + j]).sum::<Real>();
                    }
                }
            }
            Op::Scale { a, c } => {
                if let Some(ga) = self.slot(grads, *a) {
                    ga.iter_mut().zip(g).for_each(|(x, d)| *x += d * c);
                }
            }
            Op::AddScalar { a } | Op::Reshape { a } => {
                if let Some(ga) = self.slot(grads, *a) {
                    ga.iter_mut().zip(g).for_each(|(x, d)| *x += d);
                }
            }
            Op::Relu { a } => {
                if let Some(ga) = self.slot(grads, *a) {
                    for i in 0..g.len() {
                        if y[i] > 0.0 {
                            ga[i] += g[i];
                        }
                    }
                }
            }
            Op::Gelu { a } => {
                let av = &self.node(*a).value;
                if let Some(ga) = self.slot(grads, *a) {
                    let c = GELU_C as Real;
                    for i in 0..g.len() {
                        let x = av[i];
                        let t = (c * (x + 0.044715 * x * x * x)).tanh();
                        let d = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * c * (1.0 + 3.0 * 0.044715 * x * x);
                        ga[i] += g[i] * d;
                    }
                }
            }
            Op::Softplus { a } => {
                let av = &self.node(*a).value;
                if let Some(ga) = self.slot(grads, *a) {
                    for i in 0..g.len() {
                        ga[i] += g[i] * sigmoid(av[i]);
                    }
                }
            }
            Op::Exp { a } => {
                if let Some(ga) = self.slot(grads, *a) {
                    for i in 0..g.len() {
                        ga[i] += g[i] * y[i];
                    }
                }
            }
            Op::Log { a } => {
                let av = &self.node(*a).value;
                if let Some(ga) = self.slot(grads, *a) {
                    for i in 0..g.len() {
                        ga[i] += g[i] / av[i];
                    }
                }
            }
            Op::Abs { a } => {
                let av = &self.node(*a).value;
                if let Some(ga) = self.slot(grads, *a) {
                    for i in 0..g.len() {
                        ga[i] += g[i] * sign(av[i]);
                    }
                }
            }
            Op::Pow { a, p } => {
                let av = &self.node(*a).value;
                if let Some(ga) = self.slot(grads, *a) {
                    for i in 0..g.len() {
                        ga[i] += g[i] * p * av[i].powf(p - 1.0);
                    }
                }
            }
            Op::Sum { a } => {
                if let Some(ga) = self.slot(grads, *a) {
                    ga.iter_mut().for_each(|x| *x += g[0]);
                }
            }
            Op::SumRows { a } => {
                if let Some(ga) = self.slot(grads, *a) {
                    let n = g.len().max(1);
                    for c in ga.chunks_mut(n) {
                        c.iter_mut().zip(g).for_each(|(x, d)| *x += d);
                    }
                }
            }
            Op::Concat { inputs, axis } => {
                let (outer, total, inner) = split_axis(&node.shape, *axis);
                let mut offset = 0;
                for id in inputs {
                    let len = self.node(*id).shape[*axis];
                    if let Some(gx) = self.slot(grads, *id) {
                        for o in 0..outer {
                            let src = o * total * inner + offset * inner;
                            let dst = o * len * inner;
                            for t in 0..len * inner {
                                gx[dst + t] += g[src + t];
                            }
                        }
                    }
                    offset += len;
                }
            }
            Op::Slice { a, axis, start } => {
                let src_shape = &self.node(*a).shape;
                let (outer, len, inner) = split_axis(src_shape, *axis);
                let width = node.shape[*axis];
                if let Some(ga) = self.slot(grads, *a) {
                    for o in 0..outer {
                        let base = o * len * inner + start * inner;
                        let gbase = o * width * inner;
                        for t in 0..width * inner {
                            ga[base + t] += g[gbase + t];
                        }
                    }
                }
            }
            Op::Gather { a, idx } => {
                let inner: usize = node.shape[1..].iter().product();
                if let Some(ga) = self.slot(grads, *a) {
                    for (r, &i) in idx.iter().enumerate() {
                        for t in 0..inner {
                            ga[i * inner + t] += g[r * inner + t];
                        }
                    }
                }
            }
            Op::Softmax { a, axis } => {
                let (outer, len, inner) = split_axis(&node.shape, *axis);
                if let Some(ga) = self.slot(grads, *a) {
                    for o in 0..outer {
                        for i in 0..inner {
                            let at = |j: usize| o * len * inner + j * inner + i;
                            let dot: Real = (0..len).map(|j| g[at(j)] * y[at(j)]).sum();
                            for j in 0..len {
                                ga[at(j)] += y[at(j)] * (g[at(j)] - dot);
                            }
                        }
                    }
                }
            }
            Op::LayerNorm { a, gamma, beta, axis, rstd } => {
                let (outer, len, inner) = split_axis(&node.shape, *axis);
                let av = &self.node(*a).value;
                let gv = &self.node(*gamma).value;
                let mut xhat = vec![0.0; av.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |j: usize| o * len * inner + j * inner + i;
                        let mean = (0..len).map(|j| av[at(j)]).sum::<Real>() / len as Real;
                        let r = rstd[o * inner + i];
                        for j in 0..len {
                            xhat[at(j)] = (av[at(j)] - mean) * r;
                        }
                    }
                }
                if let Some(gg) = self.slot(grads, *gamma) {
                    for o in 0..outer {
                        for j in 0..len {
                            for i in 0..inner {
                                let p = o * len * inner + j * inner + i;
                                gg[j] += g[p] * xhat[p];
                            }
                        }
                    }
                }
                if let Some(gb) = self.slot(grads, *beta) {
                    for o in 0..outer {
                        for j in 0..len {
                            for i in 0..inner {
                                gb[j] += g[o * len * inner + j * inner + i];
                            }
                        }
                    }
                }
                if let Some(ga) = self.slot(grads, *a) {
                    let nf = len as Real;
                    for o in 0..outer {
                        for i in 0..inner {
                            let at = |j: usize| o * len * inner + j * inner + i;
                            let r = rstd[o * inner + i];
                            let mut sum_d = 0.0;
                            let mut sum_dx = 0.0;
                            for j in 0..len {
                                let d = g[at(j)] * gv[j];
                                sum_d += d;
                                sum_dx += d * xhat[at(j)];
                            }
                            for j in 0..len {
                                let d = g[at(j)] * gv[j];
                                ga[at(j)] += r * (d - sum_d / nf - xhat[at(j)] * sum_dx / nf);
                            }
                        }
                    }
                }
            }
            Op::MaxOverSet { a, argmax } => {
                let d = cols_of(&node.shape);
                if let Some(ga) = self.slot(grads, *a) {
                    for (p, &row) in argmax.iter().enumerate() {
                        ga[row * d + p % d] += g[p];
                    }
                }
            }
            Op::MeanOverSet { a, set } => {
                let d = cols_of(&node.shape);
                let inv = 1.0 / *set as Real;
                if let Some(ga) = self.slot(grads, *a) {
                    for (row, c) in ga.chunks_mut(d).enumerate() {
                        let gi = row / set;
                        for j in 0..d {
                            c[j] += g[gi * d + j] * inv;
                        }
                    }
                }
            }
            Op::L1Norm { a } => {
                let av = &self.node(*a).value;
                if let Some(ga) = self.slot(grads, *a) {
                    let n = av.len() / g.len().max(1);
                    for (i, x) in av.iter().enumerate() {
                        ga[i] += g[i / n.max(1)] * sign(*x);
                    }
                }
            }
            Op::L2Normalize { a, norms } => {
                let n = cols_of(&node.shape).max(1);
                if let Some(ga) = self.slot(grads, *a) {
                    for (r, &nrm) in norms.iter().enumerate() {
                        if nrm < 1e-12 {
                            continue;
                        }
                        let yr = &y[r * n..(r + 1) * n];
                        let gr = &g[r * n..(r + 1) * n];
                        let dot: Real = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for j in 0..n {
                            ga[r * n + j] += (gr[j] - yr[j] * dot) / nrm;
                        }
                    }
                }
            }
            Op::CrossEntropy { logits, targets, probs } => {
                let c = cols_of(&self.node(*logits).shape);
                if let Some(gl) = self.slot(grads, *logits) {
                    for (r, &t) in targets.iter().enumerate() {
                        for j in 0..c {
                            let onehot = if j == t { 1.0 } else { 0.0 };
                            gl[r * c + j] += g[r] * (probs[r * c + j] - onehot);
                        }
                    }
                }
            }
        }
    }
}

pub fn softplus(x: Real) -> Real {
    if x > 20.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

pub fn sigmoid(x: Real) -> Real {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn sign(x: Real) -> Real {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: &[Real], b: &[Real], tol: Real) -> bool {
        a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
    }

    #[test]
    fn matmul_identity() {
        let mut g = Graph::new();
        let a = g.constant(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let i = g.constant(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let c = g.matmul(a, i).unwrap();
        assert_eq!(g.value(c), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut g = Graph::new();
        let a = g.constant(&[2, 3], vec![0.0; 6]).unwrap();
        let b = g.constant(&[2, 2], vec![0.0; 4]).unwrap();
        let err = g.matmul(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[2, 2]"), "{msg}");
    }

    #[test]
    fn softmax_uniform_and_axis_error() {
        let mut g = Graph::new();
        let a = g.constant(&[3], vec![0.0; 3]).unwrap();
        let s = g.softmax(a, 0).unwrap();
        assert!(close(g.value(s), &[1.0 / 3.0; 3], 1e-12));
        assert!(matches!(g.softmax(a, 1), Err(TensorError::AxisOutOfRange { .. })));
    }

    #[test]
    fn l2_normalize_three_four() {
        let mut g = Graph::new();
        let a = g.constant(&[2], vec![3.0, 4.0]).unwrap();
        let n = g.l2_normalize(a);
        assert!(close(g.value(n), &[0.6, 0.8], 1e-12));
        let z = g.constant(&[2], vec![0.0, 0.0]).unwrap();
        let nz = g.l2_normalize(z);
        assert_eq!(g.value(nz), &[0.0, 0.0]);
    }

    #[test]
    fn sum_gradient_is_ones() {
        let mut g = Graph::new();
        let x = g.input(&Tensor::vector(vec![1.0, 2.0, 3.0]).with_grad());
        let s = g.sum(x);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.node(x).unwrap(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn square_gradient() {
        let mut g = Graph::new();
        let x = g.input(&Tensor::vector(vec![3.0]).with_grad());
        let y = g.mul(x, x).unwrap();
        let s = g.sum(y);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.node(x).unwrap(), &[6.0]);
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut g = Graph::new();
        let x = g.input(&Tensor::vector(vec![1.0, 2.0]).with_grad());
        assert!(matches!(g.backward(x), Err(TensorError::NonScalarLoss(_))));
    }

    #[test]
    fn param_grads_accumulate_across_backward_calls() {
        let mut store = ParamStore::new();
        let w = store.add("w", Tensor::vector(vec![2.0]));
        for _ in 0..2 {
            let mut g = Graph::new();
            let x = g.param(&store, w);
            let y = g.mul(x, x).unwrap();
            let s = g.sum(y);
            g.backward_into(s, &mut store).unwrap();
        }
        assert_eq!(store.get(w).grad().unwrap(), &[8.0]);
        store.zero_grad();
        assert_eq!(store.get(w).grad().unwrap(), &[0.0]);
    }

    #[test]
    fn frozen_params_receive_no_gradient() {
        let mut store = ParamStore::new();
        let w = store.add("w", Tensor::vector(vec![2.0]));
        let mut g = Graph::with_frozen(vec![true]);
        let x = g.param(&store, w);
        let y = g.mul(x, x).unwrap();
        let s = g.sum(y);
        let grads = g.backward(s).unwrap();
        assert!(grads.param(w).is_none());
    }

    #[test]
    fn max_over_set_ties_pick_first() {
        let mut g = Graph::new();
        let x = g.input(&Tensor::new(&[2, 1], vec![1.0, 1.0]).unwrap().with_grad());
        let m = g.max_over_set(x, 2).unwrap();
        let s = g.sum(m);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.node(x).unwrap(), &[1.0, 0.0]);
    }

    #[test]
    fn cross_entropy_uniform() {
        let mut g = Graph::new();
        let l = g.constant(&[1, 4], vec![0.0; 4]).unwrap();
        let ce = g.cross_entropy_with_logits(l, &[2]).unwrap();
        assert!((g.value(ce)[0] - (4.0 as Real).ln()).abs() < 1e-12);
    }
}
