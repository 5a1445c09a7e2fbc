//! Tape-based reverse-mode differentiation.
//!
//! Every op appends a node holding its forward value to the tape. Nodes only
//! reference earlier nodes, so a reverse sweep over the tape visits each node
//! after all of its consumers. All graph values are rank-2 `[rows, cols]`.

use indexmap::IndexMap;

use super::params::ParamStore;
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

/// Axis of a rank-2 value: `Rows` reduces over rows (down each column),
/// `Cols` reduces over columns (along each row).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Axis {
    Rows,
    Cols,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(NodeId, NodeId),
    MatMulNT(NodeId, NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    AddRowBias(NodeId, NodeId),
    Scale(NodeId, f64),
    AddConst(NodeId),
    Tanh(NodeId),
    Sigmoid(NodeId),
    Softmax(NodeId, Axis),
    Sum(NodeId, Axis),
    SumAll(NodeId),
    L2NormalizeRows(NodeId),
    Cosine(NodeId, NodeId),
    Conv1d {
        x: NodeId,
        w: NodeId,
        b: NodeId,
        stride: usize,
        pad_left: usize,
    },
    SliceCols {
        x: NodeId,
        start: usize,
    },
    Row {
        x: NodeId,
        index: usize,
    },
    StackRows(Vec<NodeId>),
    ConcatCols(NodeId, NodeId),
    StraightThrough(NodeId),
    MseToConst {
        x: NodeId,
        target: Vec<f64>,
    },
    HingeRank {
        sim: NodeId,
        margin: f64,
    },
}

#[derive(Debug, Clone)]
struct Node {
    value: Tensor,
    op: Op,
}

/// Norms at or below this pass through `l2_normalize` unchanged.
pub const NORM_EPS: f64 = 1e-8;

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: IndexMap<String, NodeId>,
}

fn dims(t: &Tensor, op: &'static str) -> Result<(usize, usize)> {
    t.dims2().ok_or_else(|| Error::shape(op, t.shape(), &[]))
}

impl Graph {
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

    fn push(&mut self, value: Tensor, op: Op) -> NodeId {
        self.nodes.push(Node { value, op });
        NodeId(self.nodes.len() - 1)
    }

    /// Constant input. Rank-1 tensors are promoted to a single row.
    pub fn constant(&mut self, t: Tensor) -> Result<NodeId> {
        let t = match t.shape().len() {
            1 => Tensor::row(t.into_values()),
            2 => t,
            _ => return Err(Error::shape("constant", t.shape(), &[])),
        };
        Ok(self.push(t, Op::Leaf))
    }

    /// Parameter leaf. Repeated requests for the same name return the same node.
    pub fn param(&mut self, store: &ParamStore, name: &str) -> Result<NodeId> {
        if let Some(&id) = self.params.get(name) {
            return Ok(id);
        }
        let t = store.get(name)?;
        let mut value = match t.shape().len() {
            1 => Tensor::row(t.values().to_vec()),
            2 => Tensor::new(t.shape().to_vec(), t.values().to_vec())?,
            _ => return Err(Error::shape("param", t.shape(), &[])),
        };
        value.clear_grad();
        let id = self.push(value, Op::Leaf);
        self.params.insert(name.to_string(), id);
        Ok(id)
    }

    pub fn param_nodes(&self) -> impl Iterator<Item = (&str, NodeId)> {
        self.params.iter().map(|(k, v)| (k.as_str(), *v))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (m, k) = dims(self.value(a), "matmul")?;
        let (k2, n) = dims(self.value(b), "matmul")?;
        if k != k2 {
            return Err(Error::shape("matmul", self.value(a).shape(), self.value(b).shape()));
        }
        let out = matmul_raw(self.value(a).values(), self.value(b).values(), m, k, n);
        Ok(self.push(Tensor::matrix(m, n, out)?, Op::MatMul(a, b)))
    }

    /// `a · bᵀ` for `a: [m, k]`, `b: [n, k]`.
    pub fn matmul_nt(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (m, k) = dims(self.value(a), "matmul_nt")?;
        let (n, k2) = dims(self.value(b), "matmul_nt")?;
        if k != k2 {
            return Err(Error::shape("matmul_nt", self.value(a).shape(), self.value(b).shape()));
        }
        let av = self.value(a).values();
        let bv = self.value(b).values();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let ar = &av[i * k..(i + 1) * k];
            for j in 0..n {
                out[i * n + j] = dot(ar, &bv[j * k..(j + 1) * k]);
            }
        }
        Ok(self.push(Tensor::matrix(m, n, out)?, Op::MatMulNT(a, b)))
    }

    /// Fully connected layer `x · wᵀ + b` with `w: [out, in]`, `b: [1, out]`.
    pub fn linear(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
        let y = self.matmul_nt(x, w)?;
        self.add_row_bias(y, b)
    }

    fn binary_same(&mut self, a: NodeId, b: NodeId, name: &'static str) -> Result<(Vec<usize>, &[f64], &[f64])> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::shape(name, ta.shape(), tb.shape()));
        }
        Ok((ta.shape().to_vec(), ta.values(), tb.values()))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (shape, av, bv) = self.binary_same(a, b, "add")?;
        let out = av.iter().zip(bv).map(|(x, y)| x + y).collect();
        let t = Tensor::new(shape, out)?;
        Ok(self.push(t, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (shape, av, bv) = self.binary_same(a, b, "sub")?;
        let out = av.iter().zip(bv).map(|(x, y)| x - y).collect();
        let t = Tensor::new(shape, out)?;
        Ok(self.push(t, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (shape, av, bv) = self.binary_same(a, b, "mul")?;
        let out = av.iter().zip(bv).map(|(x, y)| x * y).collect();
        let t = Tensor::new(shape, out)?;
        Ok(self.push(t, Op::Mul(a, b)))
    }

    /// Adds a `[1, n]` bias to every row of `a: [m, n]`.
    pub fn add_row_bias(&mut self, a: NodeId, bias: NodeId) -> Result<NodeId> {
        let (m, n) = dims(self.value(a), "add_row_bias")?;
        let tb = self.value(bias);
        if tb.len() != n {
            return Err(Error::shape("add_row_bias", self.value(a).shape(), tb.shape()));
        }
        let bv = tb.values();
        let mut out = self.value(a).values().to_vec();
        for row in out.chunks_mut(n) {
            for (o, b) in row.iter_mut().zip(bv) {
                *o += b;
            }
        }
        Ok(self.push(Tensor::matrix(m, n, out)?, Op::AddRowBias(a, bias)))
    }

    pub fn scale(&mut self, a: NodeId, k: f64) -> NodeId {
        let t = self.value(a);
        let out = t.values().iter().map(|v| v * k).collect();
        let t = Tensor::new(t.shape().to_vec(), out).expect("shape preserved");
        self.push(t, Op::Scale(a, k))
    }

    /// Adds a constant offset; the gradient passes to `a` unchanged.
    pub fn add_const(&mut self, a: NodeId, offset: &[f64]) -> Result<NodeId> {
        let t = self.value(a);
        if t.len() != offset.len() {
            return Err(Error::shape("add_const", t.shape(), &[offset.len()]));
        }
        let out = t.values().iter().zip(offset).map(|(x, c)| x + c).collect();
        let t = Tensor::new(t.shape().to_vec(), out)?;
        Ok(self.push(t, Op::AddConst(a)))
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        let t = self.value(a);
        let out = t.values().iter().map(|v| v.tanh()).collect();
        let t = Tensor::new(t.shape().to_vec(), out).expect("shape preserved");
        self.push(t, Op::Tanh(a))
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        let t = self.value(a);
        let out = t.values().iter().map(|&v| sigmoid(v)).collect();
        let t = Tensor::new(t.shape().to_vec(), out).expect("shape preserved");
        self.push(t, Op::Sigmoid(a))
    }

    pub fn softmax(&mut self, a: NodeId, axis: Axis) -> Result<NodeId> {
        let t = self.value(a);
        let (m, n) = dims(t, "softmax")?;
        let mut out = t.values().to_vec();
        for_each_lane(m, n, axis, |idx| {
            let max = idx.iter().map(|&i| out[i]).fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for &i in idx {
                out[i] = (out[i] - max).exp();
                z += out[i];
            }
            for &i in idx {
                out[i] /= z;
            }
        });
        Ok(self.push(Tensor::matrix(m, n, out)?, Op::Softmax(a, axis)))
    }

    /// Sum along `axis`; `Rows` yields `[1, n]`, `Cols` yields `[m, 1]`.
    pub fn sum(&mut self, a: NodeId, axis: Axis) -> Result<NodeId> {
        let t = self.value(a);
        let (m, n) = dims(t, "sum")?;
        let v = t.values();
        let out = match axis {
            Axis::Rows => {
                let mut o = vec![0.0; n];
                for row in v.chunks(n) {
                    for (acc, x) in o.iter_mut().zip(row) {
                        *acc += x;
                    }
                }
                Tensor::matrix(1, n, o)?
            }
            Axis::Cols => Tensor::matrix(m, 1, v.chunks(n).map(|r| r.iter().sum()).collect())?,
        };
        Ok(self.push(out, Op::Sum(a, axis)))
    }

    pub fn sum_all(&mut self, a: NodeId) -> NodeId {
        let s = self.value(a).values().iter().sum();
        self.push(Tensor::scalar(s), Op::SumAll(a))
    }

    /// Scales each row to unit L2 norm. Rows with norm at or below
    /// [`NORM_EPS`] pass through unchanged.
    pub fn l2_normalize(&mut self, a: NodeId) -> Result<NodeId> {
        let t = self.value(a);
        let (m, n) = dims(t, "l2_normalize")?;
        let mut out = t.values().to_vec();
        for row in out.chunks_mut(n) {
            let norm = dot(row, row).sqrt();
            if norm > NORM_EPS {
                row.iter_mut().for_each(|v| *v /= norm);
            }
        }
        Ok(self.push(Tensor::matrix(m, n, out)?, Op::L2NormalizeRows(a)))
    }

    /// Cosine similarity of two equally sized values, as a `[1, 1]` scalar.
    /// Zero-norm operands give similarity 0.
    pub fn cosine_similarity(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (_, av, bv) = self.binary_same(a, b, "cosine_similarity")?;
        let (na, nb) = (dot(av, av).sqrt(), dot(bv, bv).sqrt());
        let c = if na > 0.0 && nb > 0.0 { dot(av, bv) / (na * nb) } else { 0.0 };
        Ok(self.push(Tensor::scalar(c), Op::Cosine(a, b)))
    }

    /// 1-d convolution over time.
    ///
    /// `x: [T, c_in]`, `w: [c_out, kernel * c_in]` laid out tap-major
    /// (`w[o][k * c_in + c]`), `b: [1, c_out]`. The sequence is padded with
    /// `floor((kernel-1)/2)` zero frames on the left and `ceil((kernel-1)/2)`
    /// on the right, so the output has `ceil(T / stride)` frames.
    pub fn conv1d(&mut self, x: NodeId, w: NodeId, b: NodeId, kernel: usize, stride: usize) -> Result<NodeId> {
        if kernel == 0 || stride == 0 {
            return Err(Error::invalid("conv1d: kernel and stride must be positive"));
        }
        let (t_in, c_in) = dims(self.value(x), "conv1d")?;
        let (c_out, wk) = dims(self.value(w), "conv1d")?;
        if wk != kernel * c_in {
            return Err(Error::shape("conv1d", self.value(x).shape(), self.value(w).shape()));
        }
        if self.value(b).len() != c_out {
            return Err(Error::shape("conv1d", self.value(w).shape(), self.value(b).shape()));
        }
        let pad_left = (kernel - 1) / 2;
        let padded = t_in + kernel - 1;
        if padded < kernel {
            return Err(Error::invalid("conv1d: sequence shorter than one window"));
        }
        let t_out = (padded - kernel) / stride + 1;
        let (xv, wv, bv) = (self.value(x).values(), self.value(w).values(), self.value(b).values());
        let mut out = vec![0.0; t_out * c_out];
        for t in 0..t_out {
            for o in 0..c_out {
                let wrow = &wv[o * wk..(o + 1) * wk];
                let mut acc = bv[o];
                for k in 0..kernel {
                    let p = t * stride + k;
                    if p < pad_left || p - pad_left >= t_in {
                        continue;
                    }
                    let src = p - pad_left;
                    acc += dot(&wrow[k * c_in..(k + 1) * c_in], &xv[src * c_in..(src + 1) * c_in]);
                }
                out[t * c_out + o] = acc;
            }
        }
        Ok(self.push(
            Tensor::matrix(t_out, c_out, out)?,
            Op::Conv1d {
                x,
                w,
                b,
                stride,
                pad_left,
            },
        ))
    }

    pub fn slice_cols(&mut self, x: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let (m, n) = dims(self.value(x), "slice_cols")?;
        if len == 0 || start + len > n {
            return Err(Error::shape("slice_cols", self.value(x).shape(), &[start, len]));
        }
        let v = self.value(x).values();
        let out = v.chunks(n).flat_map(|r| r[start..start + len].iter().copied()).collect();
        Ok(self.push(Tensor::matrix(m, len, out)?, Op::SliceCols { x, start }))
    }

    pub fn row(&mut self, x: NodeId, index: usize) -> Result<NodeId> {
        let (m, n) = dims(self.value(x), "row")?;
        if index >= m {
            return Err(Error::shape("row", self.value(x).shape(), &[index]));
        }
        let out = self.value(x).row_slice(index).to_vec();
        Ok(self.push(Tensor::matrix(1, n, out)?, Op::Row { x, index }))
    }

    /// Stacks `[r_i, n]` values vertically.
    pub fn stack_rows(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let first = parts.first().ok_or_else(|| Error::invalid("stack_rows: no inputs"))?;
        let (_, n) = dims(self.value(*first), "stack_rows")?;
        let mut out = Vec::new();
        let mut m = 0;
        for &p in parts {
            let (r, c) = dims(self.value(p), "stack_rows")?;
            if c != n {
                return Err(Error::shape("stack_rows", self.value(*first).shape(), self.value(p).shape()));
            }
            out.extend_from_slice(self.value(p).values());
            m += r;
        }
        Ok(self.push(Tensor::matrix(m, n, out)?, Op::StackRows(parts.to_vec())))
    }

    pub fn concat_cols(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (m, p) = dims(self.value(a), "concat_cols")?;
        let (m2, q) = dims(self.value(b), "concat_cols")?;
        if m != m2 {
            return Err(Error::shape("concat_cols", self.value(a).shape(), self.value(b).shape()));
        }
        let (av, bv) = (self.value(a).values(), self.value(b).values());
        let mut out = Vec::with_capacity(m * (p + q));
        for r in 0..m {
            out.extend_from_slice(&av[r * p..(r + 1) * p]);
            out.extend_from_slice(&bv[r * q..(r + 1) * q]);
        }
        Ok(self.push(Tensor::matrix(m, p + q, out)?, Op::ConcatCols(a, b)))
    }

    /// Forward value is `quantized`; backward copies the upstream gradient
    /// to `x` unchanged.
    pub fn straight_through(&mut self, x: NodeId, quantized: Tensor) -> Result<NodeId> {
        if quantized.len() != self.value(x).len() {
            return Err(Error::shape("straight_through", self.value(x).shape(), quantized.shape()));
        }
        let value = Tensor::new(self.value(x).shape().to_vec(), quantized.into_values())?;
        Ok(self.push(value, Op::StraightThrough(x)))
    }

    /// Mean over all elements of `(x - target)^2`; `target` is constant.
    pub fn mse_to_const(&mut self, x: NodeId, target: &[f64]) -> Result<NodeId> {
        let xv = self.value(x).values();
        if xv.len() != target.len() {
            return Err(Error::shape("mse_to_const", self.value(x).shape(), &[target.len()]));
        }
        let s: f64 = xv.iter().zip(target).map(|(a, b)| (a - b) * (a - b)).sum();
        let v = s / xv.len() as f64;
        Ok(self.push(
            Tensor::scalar(v),
            Op::MseToConst {
                x,
                target: target.to_vec(),
            },
        ))
    }

    /// Bidirectional batch hinge loss over a `[B, B]` similarity matrix whose
    /// entry `(i, j)` is `cos(caption_i, image_j)`.
    pub fn hinge_rank(&mut self, sim: NodeId, margin: f64) -> Result<NodeId> {
        let (b, b2) = dims(self.value(sim), "hinge_rank")?;
        if b != b2 {
            return Err(Error::shape("hinge_rank", self.value(sim).shape(), &[]));
        }
        if b < 2 {
            return Err(Error::invalid("hinge loss needs a batch of at least 2"));
        }
        let v = hinge_rank_value(self.value(sim).values(), b, margin);
        Ok(self.push(Tensor::scalar(v), Op::HingeRank { sim, margin }))
    }

    /// One LSTM time step built from primitive ops.
    ///
    /// `x_proj: [1, 4H]` is the input projection `x_t · W_ihᵀ + b` for this
    /// step; `w_hh: [4H, H]`. Gate order is input, forget, cell, output.
    pub fn lstm_step(&mut self, x_proj: NodeId, h: NodeId, c: NodeId, w_hh: NodeId, hidden: usize) -> Result<(NodeId, NodeId)> {
        let rec = self.matmul_nt(h, w_hh)?;
        let gates = self.add(x_proj, rec)?;
        let i_pre = self.slice_cols(gates, 0, hidden)?;
        let f_pre = self.slice_cols(gates, hidden, hidden)?;
        let g_pre = self.slice_cols(gates, 2 * hidden, hidden)?;
        let o_pre = self.slice_cols(gates, 3 * hidden, hidden)?;
        let i = self.sigmoid(i_pre);
        let f = self.sigmoid(f_pre);
        let g = self.tanh(g_pre);
        let o = self.sigmoid(o_pre);
        let fc = self.mul(f, c)?;
        let ig = self.mul(i, g)?;
        let c_new = self.add(fc, ig)?;
        let tc = self.tanh(c_new);
        let h_new = self.mul(o, tc)?;
        Ok((h_new, c_new))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(Error::NotScalar(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            self.backprop_node(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn backprop_node(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[idx];
        let val = |id: NodeId| self.nodes[id.0].value.values();
        let shape = |id: NodeId| self.nodes[id.0].value.dims2().expect("rank-2");
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = shape(*a);
                let (_, n) = shape(*b);
                let (av, bv) = (val(*a), val(*b));
                // ga = g · bᵀ ; gb = aᵀ · g
                let mut ga = vec![0.0; m * k];
                for i in 0..m {
                    for kk in 0..k {
                        ga[i * k + kk] = dot(&g[i * n..(i + 1) * n], &bv[kk * n..(kk + 1) * n]);
                    }
                }
                let mut gb = vec![0.0; k * n];
                for i in 0..m {
                    for kk in 0..k {
                        let a_ik = av[i * k + kk];
                        if a_ik == 0.0 {
                            continue;
                        }
                        axpy(&mut gb[kk * n..(kk + 1) * n], a_ik, &g[i * n..(i + 1) * n]);
                    }
                }
                accum(grads, *a, ga);
                accum(grads, *b, gb);
            }
            Op::MatMulNT(a, b) => {
                let (m, k) = shape(*a);
                let (n, _) = shape(*b);
                let (av, bv) = (val(*a), val(*b));
                // y = a bᵀ ; ga = g · b ; gb = gᵀ · a
                let mut ga = vec![0.0; m * k];
                let mut gb = vec![0.0; n * k];
                for i in 0..m {
                    for j in 0..n {
                        let gij = g[i * n + j];
                        if gij == 0.0 {
                            continue;
                        }
                        axpy(&mut ga[i * k..(i + 1) * k], gij, &bv[j * k..(j + 1) * k]);
                        axpy(&mut gb[j * k..(j + 1) * k], gij, &av[i * k..(i + 1) * k]);
                    }
                }
                accum(grads, *a, ga);
                accum(grads, *b, gb);
            }
            Op::Add(a, b) => {
                accum(grads, *a, g.to_vec());
                accum(grads, *b, g.to_vec());
            }
            Op::Sub(a, b) => {
                accum(grads, *a, g.to_vec());
                accum(grads, *b, g.iter().map(|v| -v).collect());
            }
            Op::Mul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                accum(grads, *a, g.iter().zip(bv).map(|(g, b)| g * b).collect());
                accum(grads, *b, g.iter().zip(av).map(|(g, a)| g * a).collect());
            }
            Op::AddRowBias(a, bias) => {
                let (_, n) = shape(*a);
                let mut gb = vec![0.0; n];
                for row in g.chunks(n) {
                    for (acc, x) in gb.iter_mut().zip(row) {
                        *acc += x;
                    }
                }
                accum(grads, *a, g.to_vec());
                accum(grads, *bias, gb);
            }
            Op::Scale(a, k) => accum(grads, *a, g.iter().map(|v| v * k).collect()),
            Op::AddConst(a) | Op::StraightThrough(a) => accum(grads, *a, g.to_vec()),
            Op::Tanh(a) => {
                let y = node.value.values();
                accum(grads, *a, g.iter().zip(y).map(|(g, y)| g * (1.0 - y * y)).collect());
            }
            Op::Sigmoid(a) => {
                let y = node.value.values();
                accum(grads, *a, g.iter().zip(y).map(|(g, y)| g * y * (1.0 - y)).collect());
            }
            Op::Softmax(a, axis) => {
                let (m, n) = shape(*a);
                let y = node.value.values();
                let mut gx = vec![0.0; m * n];
                for_each_lane(m, n, *axis, |idx| {
                    let s: f64 = idx.iter().map(|&i| g[i] * y[i]).sum();
                    for &i in idx {
                        gx[i] = y[i] * (g[i] - s);
                    }
                });
                accum(grads, *a, gx);
            }
            Op::Sum(a, axis) => {
                let (m, n) = shape(*a);
                let mut gx = vec![0.0; m * n];
                for r in 0..m {
                    for c in 0..n {
                        gx[r * n + c] = match axis {
                            Axis::Rows => g[c],
                            Axis::Cols => g[r],
                        };
                    }
                }
                accum(grads, *a, gx);
            }
            Op::SumAll(a) => {
                let n = val(*a).len();
                accum(grads, *a, vec![g[0]; n]);
            }
            Op::L2NormalizeRows(a) => {
                let (_, n) = shape(*a);
                let (x, y) = (val(*a), node.value.values());
                let mut gx = g.to_vec();
                for r in 0..x.len() / n {
                    let xr = &x[r * n..(r + 1) * n];
                    let norm = dot(xr, xr).sqrt();
                    if norm <= NORM_EPS {
                        continue;
                    }
                    let yr = &y[r * n..(r + 1) * n];
                    let gr = &g[r * n..(r + 1) * n];
                    let yg = dot(yr, gr);
                    for c in 0..n {
                        gx[r * n + c] = (gr[c] - yr[c] * yg) / norm;
                    }
                }
                accum(grads, *a, gx);
            }
            Op::Cosine(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                let (na, nb) = (dot(av, av).sqrt(), dot(bv, bv).sqrt());
                if na > 0.0 && nb > 0.0 {
                    let c = node.value.values()[0];
                    let ga = av
                        .iter()
                        .zip(bv)
                        .map(|(x, y)| g[0] * (y / (na * nb) - c * x / (na * na)))
                        .collect();
                    let gb = av
                        .iter()
                        .zip(bv)
                        .map(|(x, y)| g[0] * (x / (na * nb) - c * y / (nb * nb)))
                        .collect();
                    accum(grads, *a, ga);
                    accum(grads, *b, gb);
                }
            }
            Op::Conv1d {
                x,
                w,
                b,
                stride,
                pad_left,
            } => {
                let (t_in, c_in) = shape(*x);
                let (c_out, wk) = shape(*w);
                let kernel = wk / c_in;
                let (t_out, _) = node.value.dims2().expect("rank-2");
                let (xv, wv) = (val(*x), val(*w));
                let mut gx = vec![0.0; t_in * c_in];
                let mut gw = vec![0.0; c_out * wk];
                let mut gb = vec![0.0; c_out];
                for t in 0..t_out {
                    for o in 0..c_out {
                        let go = g[t * c_out + o];
                        if go == 0.0 {
                            continue;
                        }
                        gb[o] += go;
                        for k in 0..kernel {
                            let p = t * stride + k;
                            if p < *pad_left || p - pad_left >= t_in {
                                continue;
                            }
                            let src = p - pad_left;
                            let wo = o * wk + k * c_in;
                            axpy(&mut gw[wo..wo + c_in], go, &xv[src * c_in..(src + 1) * c_in]);
                            axpy(&mut gx[src * c_in..(src + 1) * c_in], go, &wv[wo..wo + c_in]);
                        }
                    }
                }
                accum(grads, *x, gx);
                accum(grads, *w, gw);
                accum(grads, *b, gb);
            }
            Op::SliceCols { x, start } => {
                let (m, n) = shape(*x);
                let len = g.len() / m;
                let mut gx = vec![0.0; m * n];
                for r in 0..m {
                    gx[r * n + start..r * n + start + len].copy_from_slice(&g[r * len..(r + 1) * len]);
                }
                accum(grads, *x, gx);
            }
            Op::Row { x, index } => {
                let (m, n) = shape(*x);
                let mut gx = vec![0.0; m * n];
                gx[index * n..(index + 1) * n].copy_from_slice(g);
                accum(grads, *x, gx);
            }
            Op::StackRows(parts) => {
                let mut off = 0;
                for p in parts {
                    let len = val(*p).len();
                    accum(grads, *p, g[off..off + len].to_vec());
                    off += len;
                }
            }
            Op::ConcatCols(a, b) => {
                let (m, p) = shape(*a);
                let (_, q) = shape(*b);
                let mut ga = Vec::with_capacity(m * p);
                let mut gb = Vec::with_capacity(m * q);
                for r in 0..m {
                    let row = &g[r * (p + q)..(r + 1) * (p + q)];
                    ga.extend_from_slice(&row[..p]);
                    gb.extend_from_slice(&row[p..]);
                }
                accum(grads, *a, ga);
                accum(grads, *b, gb);
            }
            Op::MseToConst { x, target } => {
                let xv = val(*x);
                let n = xv.len() as f64;
                accum(
                    grads,
                    *x,
                    xv.iter().zip(target).map(|(a, t)| g[0] * 2.0 * (a - t) / n).collect(),
                );
            }
            Op::HingeRank { sim, margin } => {
                let (b, _) = shape(*sim);
                let s = val(*sim);
                let mut gs = vec![0.0; b * b];
                for i in 0..b {
                    let pos = s[i * b + i];
                    for j in 0..b {
                        if i == j {
                            continue;
                        }
                        if s[i * b + j] - pos + margin > 0.0 {
                            gs[i * b + j] += g[0];
                            gs[i * b + i] -= g[0];
                        }
                        if s[j * b + i] - pos + margin > 0.0 {
                            gs[j * b + i] += g[0];
                            gs[i * b + i] -= g[0];
                        }
                    }
                }
                accum(grads, *sim, gs);
            }
        }
    }
}

/// Gradients of every node reached by a backward sweep.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn wrt(&self, id: NodeId) -> Option<&[f64]> {
        self.grads.get(id.0).and_then(|g| g.as_deref())
    }
}

/// Per-parameter gradients, in parameter-store order.
pub type GradMap = IndexMap<String, Vec<f64>>;

/// Runs the backward sweep from `loss` and stores the gradient of every
/// parameter in `store`. Parameters the loss does not reach get zeros.
pub fn reverse_accumulate(graph: &Graph, loss: NodeId, store: &mut ParamStore) -> Result<GradMap> {
    let grads = graph.backward(loss)?;
    let mut out = GradMap::new();
    for (name, tensor) in store.iter_mut() {
        let g = graph
            .params
            .get(name)
            .and_then(|&id| grads.wrt(id))
            .map(|g| g.to_vec())
            .unwrap_or_else(|| vec![0.0; tensor.len()]);
        tensor.set_grad(g.clone())?;
        out.insert(name.clone(), g);
    }
    Ok(out)
}

fn accum(grads: &mut [Option<Vec<f64>>], id: NodeId, contrib: Vec<f64>) {
    match &mut grads[id.0] {
        slot @ None => *slot = Some(contrib),
        Some(acc) => {
            for (a, c) in acc.iter_mut().zip(&contrib) {
                *a += c;
            }
        }
    }
}

fn for_each_lane(m: usize, n: usize, axis: Axis, mut f: impl FnMut(&[usize])) {
    match axis {
        Axis::Cols => {
            let mut idx = vec![0; n];
            for r in 0..m {
                for (c, i) in idx.iter_mut().enumerate() {
                    *i = r * n + c;
                }
                f(&idx);
            }
        }
        Axis::Rows => {
            let mut idx = vec![0; m];
            for c in 0..n {
                for (r, i) in idx.iter_mut().enumerate() {
                    *i = r * n + c;
                }
                f(&idx);
            }
        }
    }
}

/// `max(0, v)` that lets NaN through so bad batches are not hidden.
#[inline]
fn hinge(v: f64) -> f64 {
    if v < 0.0 {
        0.0
    } else {
        v
    }
}

pub(crate) fn hinge_rank_value(s: &[f64], b: usize, margin: f64) -> f64 {
    let mut total = 0.0;
    for i in 0..b {
        let pos = s[i * b + i];
        for j in 0..b {
            if i != j {
                total += hinge(s[i * b + j] - pos + margin);
                total += hinge(s[j * b + i] - pos + margin);
            }
        }
    }
    total
}

pub(crate) fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for kk in 0..k {
            let a_ik = a[i * k + kk];
            if a_ik != 0.0 {
                axpy(&mut out[i * n..(i + 1) * n], a_ik, &b[kk * n..(kk + 1) * n]);
            }
        }
    }
    out
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
fn axpy(y: &mut [f64], a: f64, x: &[f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

#[inline]
pub(crate) fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

/// Index of the row of `codes: [n, d]` nearest to `x` in Euclidean distance.
/// Ties go to the lowest index.
pub fn argmin_distance(x: &[f64], codes: &[f64], d: usize) -> Result<(usize, f64)> {
    if d == 0 || x.len() != d || codes.is_empty() || !codes.len().is_multiple_of(d) {
        return Err(Error::shape("argmin_distance", &[x.len()], &[codes.len() / d.max(1), d]));
    }
    let mut best = (0, f64::INFINITY);
    for (j, e) in codes.chunks(d).enumerate() {
        let dist: f64 = x.iter().zip(e).map(|(a, b)| (a - b) * (a - b)).sum();
        if dist < best.1 {
            best = (j, dist);
        }
    }
    Ok(best)
}
