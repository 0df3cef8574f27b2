//! Dynamic reverse-mode tape.
//!
//! Every forward op appends a node holding its value. When at least one input
//! requires a gradient the node also records how to push gradients back to its
//! inputs. Nodes are appended in evaluation order, so the node vector is
//! already a topological order and `backward` walks it in reverse.

use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    /// Input or parameter; also used for untracked results.
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    MatMul(Var, Var),
    Tanh(Var),
    Relu(Var),
    Exp(Var),
    Log(Var),
    Neg(Var),
    Sum(Var),
    Mean(Var),
    Concat(Vec<Var>),
    /// Contiguous flat range `[offset, offset + len)` of the input.
    Slice {
        input: Var,
        offset: usize,
    },
    Reshape(Var),
    /// Gather along the last axis.
    Gather {
        input: Var,
        indices: Vec<usize>,
    },
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    LogSoftmax {
        input: Var,
        axis: usize,
    },
    LogSumExp {
        input: Var,
        axis: usize,
    },
    L2Norm(Var),
    /// `h_t = tanh(x_t + h_{t-1} W)` over all rows, backpropagated through time.
    TanhRnn {
        input: Var,
        w_rec: Var,
        reverse: bool,
    },
    /// `s_t = v · tanh(k_t + q)`; `hidden` keeps the tanh activations.
    AdditiveScores {
        keys: Var,
        query: Var,
        v: Var,
        hidden: Vec<f64>,
    },
}

#[derive(Clone, Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    /// Gradient accumulator of a leaf that requires grad, created by the
    /// first backward pass that reaches it.
    grad: Option<Tensor>,
}

/// Splits `shape` around `axis` into (outer, axis length, inner) extents.
fn axis_extents(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

/// `rhs` broadcasts against `lhs` when its shape is a suffix of `lhs`'s shape.
fn broadcast_ok(lhs: &[usize], rhs: &[usize]) -> bool {
    rhs.len() <= lhs.len() && lhs[lhs.len() - rhs.len()..] == *rhs
}

#[derive(Default, Debug, Clone)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Number of nodes that carry a backward rule.
    pub fn recorded_ops(&self) -> usize {
        self.nodes.iter().filter(|n| !matches!(n.op, Op::Leaf)).count()
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of a leaf; `None` until a backward pass reaches it.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn zero_grad(&mut self, vars: &[Var]) {
        for &v in vars {
            if let Some(g) = self.nodes[v.0].grad.as_mut() {
                g.data_mut().iter_mut().for_each(|x| *x = 0.0);
            }
        }
    }

    fn push(&mut self, name: &'static str, value: Tensor, op: Op, inputs: &[Var]) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op: name });
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        let op = if requires_grad { op } else { Op::Leaf };
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn binary(&mut self, name: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if !broadcast_ok(va.shape(), vb.shape()) {
            return Err(Error::shape(name, format!("{:?} with {:?}", va.shape(), vb.shape())));
        }
        let m = vb.len();
        let mut data = Vec::with_capacity(va.len());
        if m > 0 {
            for chunk in va.data().chunks_exact(m) {
                data.extend(chunk.iter().zip(vb.data()).map(|(&x, &y)| f(x, y)));
            }
        }
        let out = Tensor::new(va.shape().to_vec(), data)?;
        self.push(name, out, op, &[a, b])
    }

    /// Elementwise `a + b`; `b` may broadcast over the leading dims of `a`.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let out = self.value(a).map(|x| c * x);
        self.push("scale", out, Op::Scale(a, c), &[a])
    }

    /// `[m, k] x [k, n] -> [m, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.rank() != 2 || vb.rank() != 2 || va.cols() != vb.rows() {
            return Err(Error::shape("matmul", format!("{:?} x {:?}", va.shape(), vb.shape())));
        }
        let (m, k, n) = (va.rows(), va.cols(), vb.cols());
        let out = Tensor::matrix(m, n, matmul_raw(va.data(), vb.data(), m, k, n))?;
        self.push("matmul", out, Op::MatMul(a, b), &[a, b])
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(tanh);
        self.push("tanh", out, Op::Tanh(a), &[a])
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(|x| x.max(0.0));
        self.push("relu", out, Op::Relu(a), &[a])
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(f64::exp);
        self.push("exp", out, Op::Exp(a), &[a])
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(f64::ln);
        self.push("log", out, Op::Log(a), &[a])
    }

    pub fn neg(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(|x| -x);
        self.push("neg", out, Op::Neg(a), &[a])
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let out = Tensor::scalar(self.value(a).data().iter().sum());
        self.push("sum", out, Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a);
        if v.is_empty() {
            return Err(Error::Empty("mean"));
        }
        let out = Tensor::scalar(v.data().iter().sum::<f64>() / v.len() as f64);
        self.push("mean", out, Op::Mean(a), &[a])
    }

    /// Concatenate along axis 0. All parts must share their trailing shape.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or(Error::Empty("concat"))?;
        let tail = self.shape(*first).get(1..).unwrap_or(&[]).to_vec();
        let mut lead = 0;
        let mut data = Vec::new();
        for &p in parts {
            let v = self.value(p);
            if v.rank() == 0 || v.shape()[1..] != tail[..] {
                return Err(Error::shape(
                    "concat",
                    format!("part {:?} vs trailing {tail:?}", v.shape()),
                ));
            }
            lead += v.shape()[0];
            data.extend_from_slice(v.data());
        }
        let mut shape = vec![lead];
        shape.extend(tail);
        let out = Tensor::new(shape, data)?;
        self.push("concat", out, Op::Concat(parts.to_vec()), parts)
    }

    /// Stack equally shaped tensors along a new leading axis.
    pub fn stack(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or(Error::Empty("stack"))?;
        let inner = self.shape(*first).to_vec();
        let mut data = Vec::new();
        for &p in parts {
            let v = self.value(p);
            if v.shape() != inner.as_slice() {
                return Err(Error::shape("stack", format!("{:?} vs {inner:?}", v.shape())));
            }
            data.extend_from_slice(v.data());
        }
        let mut shape = vec![parts.len()];
        shape.extend(inner);
        let out = Tensor::new(shape, data)?;
        self.push("stack", out, Op::Concat(parts.to_vec()), parts)
    }

    /// Rows `[start, start + len)` along axis 0.
    pub fn slice(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let v = self.value(a);
        if v.rank() == 0 || start + len > v.shape()[0] {
            return Err(Error::shape(
                "slice",
                format!("[{start}, {}) of {:?}", start + len, v.shape()),
            ));
        }
        let inner: usize = v.shape()[1..].iter().product();
        let mut shape = v.shape().to_vec();
        shape[0] = len;
        let data = v.data()[start * inner..(start + len) * inner].to_vec();
        let out = Tensor::new(shape, data)?;
        self.push(
            "slice",
            out,
            Op::Slice {
                input: a,
                offset: start * inner,
            },
            &[a],
        )
    }

    /// Row `i` of a rank-2 tensor as a rank-1 tensor.
    pub fn row(&mut self, a: Var, i: usize) -> Result<Var> {
        let v = self.value(a);
        if v.rank() != 2 || i >= v.rows() {
            return Err(Error::shape("row", format!("row {i} of {:?}", v.shape())));
        }
        let c = v.cols();
        let out = Tensor::vector(v.data()[i * c..(i + 1) * c].to_vec());
        self.push(
            "row",
            out,
            Op::Slice {
                input: a,
                offset: i * c,
            },
            &[a],
        )
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        let out = self.value(a).clone().reshape(shape)?;
        self.push("reshape", out, Op::Reshape(a), &[a])
    }

    /// Pick entries along the last axis: `out[..., j] = a[..., indices[j]]`.
    pub fn gather(&mut self, a: Var, indices: &[usize]) -> Result<Var> {
        let v = self.value(a);
        let c = v.cols();
        if v.rank() == 0 || indices.iter().any(|&i| i >= c) {
            return Err(Error::shape(
                "gather",
                format!("indices out of range for {:?}", v.shape()),
            ));
        }
        let outer = v.len() / c;
        let mut data = Vec::with_capacity(outer * indices.len());
        for o in 0..outer {
            let row = &v.data()[o * c..(o + 1) * c];
            data.extend(indices.iter().map(|&i| row[i]));
        }
        let mut shape = v.shape().to_vec();
        *shape.last_mut().unwrap() = indices.len();
        let out = Tensor::new(shape, data)?;
        self.push(
            "gather",
            out,
            Op::Gather {
                input: a,
                indices: indices.to_vec(),
            },
            &[a],
        )
    }

    /// Rows of a `[V, d]` table selected by `ids`, giving `[ids.len(), d]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let t = self.value(table);
        if t.rank() != 2 {
            return Err(Error::shape("embedding", format!("table {:?}", t.shape())));
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= t.rows()) {
            return Err(Error::UnknownToken(bad));
        }
        let d = t.cols();
        let mut data = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            data.extend_from_slice(t.row(i));
        }
        let out = Tensor::matrix(ids.len(), d, data)?;
        self.push(
            "embedding",
            out,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            &[table],
        )
    }

    /// Tanh recurrence over the rows of `input` (`T × d`) with recurrent
    /// weights `w_rec` (`d × d`) and a zero initial state. With `reverse` the
    /// recurrence runs from the last row to the first; rows stay in input order.
    pub fn tanh_rnn(&mut self, input: Var, w_rec: Var, reverse: bool) -> Result<Var> {
        let (x, w) = (self.value(input), self.value(w_rec));
        if x.rank() != 2 || w.rank() != 2 || w.rows() != x.cols() || w.cols() != x.cols() {
            return Err(Error::shape(
                "tanh_rnn",
                format!("input {:?}, w_rec {:?}", x.shape(), w.shape()),
            ));
        }
        let (t_len, d) = (x.rows(), x.cols());
        let mut out = vec![0.0; t_len * d];
        let mut prev: Option<usize> = None;
        for t in rnn_order(t_len, reverse) {
            let xt = &x.data()[t * d..(t + 1) * d];
            let pre: Vec<f64> = match prev {
                Some(p) => {
                    let rec = matmul_raw(&out[p * d..(p + 1) * d], w.data(), 1, d, d);
                    xt.iter().zip(&rec).map(|(a, b)| a + b).collect()
                }
                None => xt.to_vec(),
            };
            for (o, v) in out[t * d..(t + 1) * d].iter_mut().zip(&pre) {
                *o = tanh(*v);
            }
            prev = Some(t);
        }
        let out = Tensor::matrix(t_len, d, out)?;
        self.push("tanh_rnn", out, Op::TanhRnn { input, w_rec, reverse }, &[input, w_rec])
    }

    /// Additive attention energies `s_t = Σ_j v_j tanh(keys[t, j] + query_j)`.
    /// `keys` is `T × A`; `query` and `v` hold `A` values each (any shape).
    pub fn additive_scores(&mut self, keys: Var, query: Var, v: Var) -> Result<Var> {
        let (k, q, w) = (self.value(keys), self.value(query), self.value(v));
        if k.rank() != 2 || q.len() != k.cols() || w.len() != k.cols() {
            return Err(Error::shape(
                "additive_scores",
                format!("keys {:?}, query {:?}, v {:?}", k.shape(), q.shape(), w.shape()),
            ));
        }
        let (t_len, a) = (k.rows(), k.cols());
        let mut hidden = Vec::with_capacity(t_len * a);
        for row in k.data().chunks_exact(a) {
            hidden.extend(row.iter().zip(q.data()).map(|(x, y)| tanh(x + y)));
        }
        let scores = matmul_raw(&hidden, w.data(), t_len, a, 1);
        let out = Tensor::vector(scores);
        self.push(
            "additive_scores",
            out,
            Op::AdditiveScores { keys, query, v, hidden },
            &[keys, query, v],
        )
    }

    pub fn log_softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let v = self.value(a);
        if axis >= v.rank() {
            return Err(Error::shape("log_softmax", format!("axis {axis} of {:?}", v.shape())));
        }
        let (outer, n, inner) = axis_extents(v.shape(), axis);
        let mut data = v.data().to_vec();
        for o in 0..outer {
            for j in 0..inner {
                let idx = |i: usize| (o * n + i) * inner + j;
                let lse = logsumexp_strided((0..n).map(|i| v.data()[idx(i)]));
                for i in 0..n {
                    data[idx(i)] -= lse;
                }
            }
        }
        let out = Tensor::new(v.shape().to_vec(), data)?;
        self.push("log_softmax", out, Op::LogSoftmax { input: a, axis }, &[a])
    }

    /// Overflow-safe `log Σ exp` reducing `axis`.
    pub fn logsumexp(&mut self, a: Var, axis: usize) -> Result<Var> {
        let v = self.value(a);
        if axis >= v.rank() {
            return Err(Error::shape("logsumexp", format!("axis {axis} of {:?}", v.shape())));
        }
        let (outer, n, inner) = axis_extents(v.shape(), axis);
        let mut data = Vec::with_capacity(outer * inner);
        for o in 0..outer {
            for j in 0..inner {
                data.push(logsumexp_strided((0..n).map(|i| v.data()[(o * n + i) * inner + j])));
            }
        }
        let mut shape = v.shape().to_vec();
        shape.remove(axis);
        let out = Tensor::new(shape, data)?;
        self.push("logsumexp", out, Op::LogSumExp { input: a, axis }, &[a])
    }

    pub fn l2_norm(&mut self, a: Var) -> Result<Var> {
        let out = Tensor::scalar(self.value(a).l2_norm());
        self.push("l2_norm", out, Op::L2Norm(a), &[a])
    }

    /// Accumulate `d loss / d leaf` into every leaf that requires grad.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(Error::NonScalarLoss(lv.shape().to_vec()));
        }
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Leaf => {
                    grads[idx] = Some(g);
                }
                &Op::Add(a, b) => {
                    self.acc(&mut grads, a, |d| add_into(d, &g));
                    self.acc(&mut grads, b, |d| reduce_into(d, &g, 1.0));
                }
                &Op::Sub(a, b) => {
                    self.acc(&mut grads, a, |d| add_into(d, &g));
                    self.acc(&mut grads, b, |d| reduce_into(d, &g, -1.0));
                }
                &Op::Mul(a, b) => {
                    let (va, vb) = (self.value(a).data(), self.value(b).data());
                    let m = vb.len();
                    self.acc(&mut grads, a, |d| {
                        for (dc, gc) in d.chunks_exact_mut(m).zip(g.chunks_exact(m)) {
                            for ((x, gi), y) in dc.iter_mut().zip(gc).zip(vb) {
                                *x += gi * y;
                            }
                        }
                    });
                    self.acc(&mut grads, b, |d| {
                        for (gc, ac) in g.chunks_exact(m).zip(va.chunks_exact(m)) {
                            for ((x, gi), ai) in d.iter_mut().zip(gc).zip(ac) {
                                *x += gi * ai;
                            }
                        }
                    });
                }
                &Op::Scale(a, c) => {
                    self.acc(&mut grads, a, |d| d.iter_mut().zip(&g).for_each(|(x, gi)| *x += c * gi));
                }
                &Op::MatMul(a, b) => {
                    let (va, vb) = (self.value(a), self.value(b));
                    let (m, k, n) = (va.rows(), va.cols(), vb.cols());
                    self.acc(&mut grads, a, |d| {
                        // dA = G Bᵀ
                        for i in 0..m {
                            for p in 0..k {
                                let brow = &vb.data()[p * n..(p + 1) * n];
                                let grow = &g[i * n..(i + 1) * n];
                                d[i * k + p] += dot(grow, brow);
                            }
                        }
                    });
                    self.acc(&mut grads, b, |d| {
                        // dB = Aᵀ G
                        for i in 0..m {
                            let grow = &g[i * n..(i + 1) * n];
                            for p in 0..k {
                                let aip = va.data()[i * k + p];
                                if aip != 0.0 {
                                    let drow = &mut d[p * n..(p + 1) * n];
                                    drow.iter_mut().zip(grow).for_each(|(x, gj)| *x += aip * gj);
                                }
                            }
                        }
                    });
                }
                &Op::Tanh(a) => {
                    let y = node.value.data();
                    self.acc(&mut grads, a, |d| {
                        for i in 0..d.len() {
                            d[i] += g[i] * (1.0 - y[i] * y[i]);
                        }
                    });
                }
                &Op::Relu(a) => {
                    let x = self.value(a).data();
                    self.acc(&mut grads, a, |d| {
                        for i in 0..d.len() {
                            if x[i] > 0.0 {
                                d[i] += g[i];
                            }
                        }
                    });
                }
                &Op::Exp(a) => {
                    let y = node.value.data();
                    self.acc(&mut grads, a, |d| {
                        for i in 0..d.len() {
                            d[i] += g[i] * y[i];
                        }
                    });
                }
                &Op::Log(a) => {
                    let x = self.value(a).data();
                    self.acc(&mut grads, a, |d| {
                        for i in 0..d.len() {
                            d[i] += g[i] / x[i];
                        }
                    });
                }
                &Op::Neg(a) => {
                    self.acc(&mut grads, a, |d| d.iter_mut().zip(&g).for_each(|(x, gi)| *x -= gi));
                }
                &Op::Sum(a) => {
                    self.acc(&mut grads, a, |d| d.iter_mut().for_each(|x| *x += g[0]));
                }
                &Op::Mean(a) => {
                    let n = self.value(a).len() as f64;
                    self.acc(&mut grads, a, |d| d.iter_mut().for_each(|x| *x += g[0] / n));
                }
                Op::Concat(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let n = self.value(p).len();
                        let chunk = &g[offset..offset + n];
                        self.acc(&mut grads, p, |d| add_into(d, chunk));
                        offset += n;
                    }
                }
                &Op::Slice { input, offset } => {
                    self.acc(&mut grads, input, |d| add_into(&mut d[offset..offset + g.len()], &g));
                }
                &Op::Reshape(a) => {
                    self.acc(&mut grads, a, |d| add_into(d, &g));
                }
                Op::Gather { input, indices } => {
                    let c = self.value(*input).cols();
                    let k = indices.len();
                    self.acc(&mut grads, *input, |d| {
                        for (o, gchunk) in g.chunks(k).enumerate() {
                            for (j, &i) in indices.iter().enumerate() {
                                d[o * c + i] += gchunk[j];
                            }
                        }
                    });
                }
                Op::Embedding { table, ids } => {
                    let dcols = self.value(*table).cols();
                    self.acc(&mut grads, *table, |d| {
                        for (r, &i) in ids.iter().enumerate() {
                            add_into(&mut d[i * dcols..(i + 1) * dcols], &g[r * dcols..(r + 1) * dcols]);
                        }
                    });
                }
                &Op::LogSoftmax { input, axis } => {
                    let y = &node.value;
                    let (outer, n, inner) = axis_extents(y.shape(), axis);
                    self.acc(&mut grads, input, |d| {
                        for o in 0..outer {
                            for j in 0..inner {
                                let idx = |i: usize| (o * n + i) * inner + j;
                                let gsum: f64 = (0..n).map(|i| g[idx(i)]).sum();
                                for i in 0..n {
                                    d[idx(i)] += g[idx(i)] - y.data()[idx(i)].exp() * gsum;
                                }
                            }
                        }
                    });
                }
                &Op::LogSumExp { input, axis } => {
                    let x = self.value(input);
                    let y = node.value.data();
                    let (outer, n, inner) = axis_extents(x.shape(), axis);
                    self.acc(&mut grads, input, |d| {
                        for o in 0..outer {
                            for j in 0..inner {
                                let out = o * inner + j;
                                for i in 0..n {
                                    let at = (o * n + i) * inner + j;
                                    d[at] += g[out] * (x.data()[at] - y[out]).exp();
                                }
                            }
                        }
                    });
                }
                &Op::TanhRnn { input, w_rec, reverse } => {
                    let h = node.value.data();
                    let w = self.value(w_rec).data();
                    let d = self.value(w_rec).rows();
                    let t_len = h.len() / d;
                    let order: Vec<usize> = rnn_order(t_len, reverse).collect();
                    let mut dpre = vec![0.0; t_len * d];
                    let mut carry = vec![0.0; d];
                    for (i, &t) in order.iter().enumerate().rev() {
                        let ht = &h[t * d..(t + 1) * d];
                        let gt = &g[t * d..(t + 1) * d];
                        let dp = &mut dpre[t * d..(t + 1) * d];
                        for j in 0..d {
                            dp[j] = (gt[j] + carry[j]) * (1.0 - ht[j] * ht[j]);
                        }
                        if i > 0 {
                            for (p, c) in carry.iter_mut().enumerate() {
                                *c = dot(dp, &w[p * d..(p + 1) * d]);
                            }
                        }
                    }
                    self.acc(&mut grads, input, |dx| add_into(dx, &dpre));
                    self.acc(&mut grads, w_rec, |dw| {
                        for i in 1..order.len() {
                            let (prev, t) = (order[i - 1], order[i]);
                            let dp = &dpre[t * d..(t + 1) * d];
                            for (p, &hp) in h[prev * d..(prev + 1) * d].iter().enumerate() {
                                let row = &mut dw[p * d..(p + 1) * d];
                                row.iter_mut().zip(dp).for_each(|(x, gj)| *x += hp * gj);
                            }
                        }
                    });
                }
                Op::AdditiveScores { keys, query, v, hidden } => {
                    let w = self.value(*v).data();
                    let a = w.len();
                    let mut de = vec![0.0; hidden.len()];
                    for (t, (row, drow)) in hidden.chunks_exact(a).zip(de.chunks_exact_mut(a)).enumerate() {
                        for j in 0..a {
                            drow[j] = g[t] * w[j] * (1.0 - row[j] * row[j]);
                        }
                    }
                    self.acc(&mut grads, *keys, |dk| add_into(dk, &de));
                    self.acc(&mut grads, *query, |dq| reduce_into(dq, &de, 1.0));
                    self.acc(&mut grads, *v, |dv| {
                        for (t, row) in hidden.chunks_exact(a).enumerate() {
                            dv.iter_mut().zip(row).for_each(|(x, hj)| *x += g[t] * hj);
                        }
                    });
                }
                &Op::L2Norm(a) => {
                    let norm = node.value.item();
                    if norm > 0.0 {
                        let x = self.value(a).data();
                        self.acc(&mut grads, a, |d| {
                            for i in 0..d.len() {
                                d[i] += g[0] * x[i] / norm;
                            }
                        });
                    }
                }
            }
        }

        for (idx, g) in grads.into_iter().enumerate() {
            let Some(g) = g else { continue };
            let node = &mut self.nodes[idx];
            if !matches!(node.op, Op::Leaf) {
                continue;
            }
            match node.grad.as_mut() {
                Some(acc) => add_into(acc.data_mut(), &g),
                None => node.grad = Some(Tensor::new(node.value.shape().to_vec(), g)?),
            }
        }
        Ok(())
    }

    fn acc(&self, grads: &mut [Option<Vec<f64>>], v: Var, f: impl FnOnce(&mut [f64])) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        let slot = grads[v.0].get_or_insert_with(|| vec![0.0; self.nodes[v.0].value.len()]);
        f(slot);
    }
}

fn rnn_order(len: usize, reverse: bool) -> Box<dyn DoubleEndedIterator<Item = usize>> {
    if reverse {
        Box::new((0..len).rev())
    } else {
        Box::new(0..len)
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
}

/// Sum `src` over the leading dims that were broadcast into `dst`'s shape.
fn reduce_into(dst: &mut [f64], src: &[f64], sign: f64) {
    let m = dst.len();
    for chunk in src.chunks_exact(m) {
        dst.iter_mut().zip(chunk).for_each(|(d, s)| *d += sign * s);
    }
}

/// Four independent partial sums so the loop vectorises.
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0; 4];
    let (ca, cb) = (a.chunks_exact(4), b.chunks_exact(4));
    let tail: f64 = ca.remainder().iter().zip(cb.remainder()).map(|(x, y)| x * y).sum();
    for (x, y) in ca.zip(cb) {
        for j in 0..4 {
            acc[j] += x[j] * y[j];
        }
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

pub(crate) fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            orow.iter_mut().zip(brow).for_each(|(o, bv)| *o += aip * bv);
        }
    }
    out
}

/// `tanh` through a single `exp`, within a few ulp of `f64::tanh`. Small
/// arguments, where the subtraction would cancel, use the library routine.
pub fn tanh(x: f64) -> f64 {
    let a = x.abs();
    if a < 0.0625 {
        return x.tanh();
    }
    (1.0 - 2.0 / ((2.0 * a).exp() + 1.0)).copysign(x)
}

/// `log Σ exp` over an iterator, shifted by the max for overflow safety.
pub fn logsumexp_strided(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let max = values.clone().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    max + values.map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// `log Σ exp` of a slice.
pub fn logsumexp(values: &[f64]) -> f64 {
    logsumexp_strided(values.iter().copied())
}
