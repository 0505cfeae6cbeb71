//! Tape of recorded operations and their reverse-mode adjoints.
//!
//! A [`Graph`] is built fresh for every forward pass. Nodes are appended in
//! evaluation order, so a single reverse sweep over the node list visits
//! every consumer before its producers.

use super::kernels::wide_or_narrow;
use super::params::{ParamId, ParamStore};
use super::tensor::{gemm_acc, matmul_raw, split_axis, transpose_raw, Tensor};
use super::DiffError;

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Batch-norm statistics source.
#[derive(Clone, Copy, Debug)]
pub enum NormStats<'a> {
    /// Normalize with the statistics of the current batch.
    Batch,
    /// Normalize with externally tracked running statistics.
    Running { mean: &'a [f64], var: &'a [f64] },
}

/// Per-channel statistics observed by a batch-norm node in batch mode.
#[derive(Clone, Debug, PartialEq)]
pub struct ObservedStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

pub const BN_EPS: f64 = 1e-5;

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddBias(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Relu(Var),
    Log(Var),
    Pow(Var, f64),
    Clamp(Var, f64, f64),
    Concat(Vec<Var>, usize),
    Sum(Var, usize),
    SumAll(Var),
    Reshape(Var),
    Transpose(Var),
    Slice {
        src: Var,
        row0: usize,
        col0: usize,
    },
    GroupMeanRows(Var, usize),
    Softmax(Var, usize),
    Normalize(Var, usize),
    Gather(Var, Vec<usize>),
    Conv1d {
        x: Var,
        k: Var,
        b: Var,
    },
    BlockAttention {
        inputs: [Var; 3],
        dims: AttnDims,
        probs: Vec<f64>,
    },
    ConvBnReluMean {
        /// `[x, k, b, gamma, beta]`
        inputs: [Var; 5],
        dims: ConvDims,
        y: Vec<f64>,
        mean: Vec<f64>,
        inv_std: Vec<f64>,
        batch: bool,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        batch: bool,
    },
}

#[derive(Clone, Copy, Debug)]
struct AttnDims {
    batch: usize,
    c: usize,
    heads: usize,
    dk: usize,
}

#[derive(Clone, Copy, Debug)]
struct ConvDims {
    n: usize,
    cin: usize,
    cout: usize,
    t: usize,
    width: usize,
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Primitive operations addressable by kind, for table-driven callers.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Primitive {
    MatMul,
    Add,
    Relu,
    Concat(usize),
    Mean(usize),
    Flatten,
    Linear,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    params: Vec<(Var, ParamId)>,
    observed: Vec<(String, ObservedStats)>,
}

fn mismatch(op: &'static str, a: &[usize], b: &[usize]) -> DiffError {
    DiffError::ShapeMismatch {
        op,
        left: a.to_vec(),
        right: b.to_vec(),
    }
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

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        debug_assert!(value.is_finite() || !requires_grad, "non-finite forward value");
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    /// Scalar value of a one-element node.
    pub fn item(&self, v: Var) -> f64 {
        self.nodes[v.0].value.data()[0]
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Leaf that gradients are accumulated for.
    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Leaf holding a copy of a stored parameter; its gradient flows back
    /// through [`Graph::accumulate_param_grads`].
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        let p = store.get(id);
        let v = self.push(p.value.clone(), Op::Leaf, p.trainable);
        self.params.push((v, id));
        v
    }

    /// Copy of `v` that blocks gradient flow.
    pub fn detach(&mut self, v: Var) -> Var {
        let t = self.value(v).clone();
        self.constant(t)
    }

    /// Batch statistics recorded by batch-norm nodes, keyed by layer name.
    pub fn observed_stats(&self) -> &[(String, ObservedStats)] {
        &self.observed
    }

    pub fn apply(&mut self, kind: Primitive, inputs: &[Var]) -> Result<Var, DiffError> {
        let need = match kind {
            Primitive::MatMul | Primitive::Add => 2,
            Primitive::Relu | Primitive::Mean(_) | Primitive::Flatten => 1,
            Primitive::Linear => 3,
            Primitive::Concat(_) => inputs.len().max(1),
        };
        if inputs.len() != need {
            return Err(DiffError::InvalidArgument {
                op: "apply",
                msg: format!("{kind:?} takes {need} inputs, got {}", inputs.len()),
            });
        }
        match kind {
            Primitive::MatMul => self.matmul(inputs[0], inputs[1]),
            Primitive::Add => self.add(inputs[0], inputs[1]),
            Primitive::Relu => Ok(self.relu(inputs[0])),
            Primitive::Concat(axis) => self.concat(inputs, axis),
            Primitive::Mean(axis) => self.mean(inputs[0], axis),
            Primitive::Flatten => Ok(self.flatten(inputs[0])),
            Primitive::Linear => self.linear(inputs[0], inputs[1], inputs[2]),
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let (m, k, n) = match (sa, sb) {
            ([m, k], [k2, n]) if k == k2 => (*m, *k, *n),
            _ => return Err(mismatch("matmul", sa, sb)),
        };
        let out = matmul_raw(self.value(a).data(), self.value(b).data(), m, k, n);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMul(a, b), rg))
    }

    fn zip_same(&mut self, op: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Result<Tensor, DiffError> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(mismatch(op, ta.shape(), tb.shape()));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(ta.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        let t = self.zip_same("add", a, b, |x, y| x + y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        let t = self.zip_same("sub", a, b, |x, y| x - y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        let t = self.zip_same("mul", a, b, |x, y| x * y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, Op::Mul(a, b), rg))
    }

    /// Adds a vector along the last axis of `a`.
    pub fn add_bias(&mut self, a: Var, bias: Var) -> Result<Var, DiffError> {
        let (ta, tb) = (self.value(a), self.value(bias));
        let n = *ta.shape().last().unwrap_or(&0);
        if tb.numel() != n || tb.rank() != 1 {
            return Err(mismatch("add_bias", ta.shape(), tb.shape()));
        }
        let mut data = ta.data().to_vec();
        for chunk in data.chunks_mut(n) {
            for (x, &b) in chunk.iter_mut().zip(tb.data()) {
                *x += b;
            }
        }
        let t = Tensor::new(ta.shape().to_vec(), data)?;
        let rg = self.rg(a) || self.rg(bias);
        Ok(self.push(t, Op::AddBias(a, bias), rg))
    }

    /// `x · w + b` with `x: m×in`, `w: in×out`, `b: out`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var, DiffError> {
        let y = self.matmul(x, w)?;
        self.add_bias(y, b)
    }

    fn map(&mut self, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let ta = self.value(a);
        let data = ta.data().iter().map(|&x| f(x)).collect();
        let t = Tensor::new(ta.shape().to_vec(), data).expect("same shape");
        let rg = self.rg(a);
        self.push(t, op, rg)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        self.map(a, Op::Scale(a, c), |x| x * c)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        self.map(a, Op::AddScalar(a), |x| x + c)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.map(a, Op::Relu(a), |x| x.max(0.0))
    }

    pub fn log(&mut self, a: Var) -> Var {
        self.map(a, Op::Log(a), f64::ln)
    }

    /// Elementwise `a^e` for nonnegative `a`.
    pub fn pow(&mut self, a: Var, e: f64) -> Var {
        self.map(a, Op::Pow(a, e), |x| if e == 0.0 { 1.0 } else { x.powf(e) })
    }

    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        self.map(a, Op::Clamp(a, lo, hi), |x| x.clamp(lo, hi))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var, DiffError> {
        let first = parts.first().ok_or(DiffError::InvalidArgument {
            op: "concat",
            msg: "no inputs".into(),
        })?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(DiffError::InvalidArgument {
                op: "concat",
                msg: format!("axis {axis} out of range for {base:?}"),
            });
        }
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            let compatible =
                s.len() == base.len() && s.iter().zip(&base).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(mismatch("concat", &base, s));
            }
            total += s[axis];
        }
        let (outer, _, inner) = split_axis(&base, axis);
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &p in parts {
                let t = self.value(p);
                let len = t.shape()[axis] * inner;
                data.extend_from_slice(&t.data()[o * len..(o + 1) * len]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(Tensor::new(shape, data)?, Op::Concat(parts.to_vec(), axis), rg))
    }

    /// Sum along `axis`, removing it (rank-1 inputs reduce to shape `[1]`).
    pub fn sum(&mut self, a: Var, axis: usize) -> Result<Var, DiffError> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() {
            return Err(DiffError::InvalidArgument {
                op: "sum",
                msg: format!("axis {axis} out of range for {shape:?}"),
            });
        }
        let (outer, n, inner) = split_axis(&shape, axis);
        let src = self.value(a).data();
        let mut out = vec![0.0; outer * inner];
        if inner == 1 {
            for (d, row) in out.iter_mut().zip(src.chunks_exact(n)) {
                *d = sum4(row);
            }
        } else {
            for o in 0..outer {
                for i in 0..n {
                    let row = &src[(o * n + i) * inner..(o * n + i + 1) * inner];
                    add_into(&mut out[o * inner..(o + 1) * inner], row);
                }
            }
        }
        let mut new_shape = shape;
        new_shape.remove(axis);
        if new_shape.is_empty() {
            new_shape.push(1);
        }
        let rg = self.rg(a);
        Ok(self.push(Tensor::new(new_shape, out)?, Op::Sum(a, axis), rg))
    }

    pub fn mean(&mut self, a: Var, axis: usize) -> Result<Var, DiffError> {
        let n = *self.shape(a).get(axis).unwrap_or(&1);
        let s = self.sum(a, axis)?;
        Ok(self.scale(s, 1.0 / n as f64))
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let s: f64 = self.value(a).data().iter().sum();
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::SumAll(a), rg)
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let n = self.value(a).numel();
        let s = self.sum_all(a);
        self.scale(s, 1.0 / n as f64)
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var, DiffError> {
        let t = self.value(a).clone().reshaped(shape)?;
        let rg = self.rg(a);
        Ok(self.push(t, Op::Reshape(a), rg))
    }

    pub fn flatten(&mut self, a: Var) -> Var {
        let n = self.value(a).numel();
        self.reshape(a, vec![n]).expect("flatten keeps element count")
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var, DiffError> {
        let ta = self.value(a);
        let (r, c) = ta.dims2().ok_or_else(|| DiffError::InvalidArgument {
            op: "transpose",
            msg: format!("rank-2 input required, got {:?}", ta.shape()),
        })?;
        let src = ta.data();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = src[i * c + j];
            }
        }
        let rg = self.rg(a);
        Ok(self.push(Tensor::new(vec![c, r], out)?, Op::Transpose(a), rg))
    }

    /// Rectangular block `[row0, row0+rows) × [col0, col0+cols)` of a matrix.
    pub fn slice(&mut self, a: Var, row0: usize, rows: usize, col0: usize, cols: usize) -> Result<Var, DiffError> {
        let ta = self.value(a);
        let (r, c) = ta.dims2().ok_or_else(|| DiffError::InvalidArgument {
            op: "slice",
            msg: format!("rank-2 input required, got {:?}", ta.shape()),
        })?;
        if rows == 0 || cols == 0 || row0 + rows > r || col0 + cols > c {
            return Err(DiffError::InvalidArgument {
                op: "slice",
                msg: format!("block {rows}x{cols} at ({row0},{col0}) outside {r}x{c}"),
            });
        }
        let src = ta.data();
        let mut out = Vec::with_capacity(rows * cols);
        for i in row0..row0 + rows {
            out.extend_from_slice(&src[i * c + col0..i * c + col0 + cols]);
        }
        let rg = self.rg(a);
        Ok(self.push(
            Tensor::new(vec![rows, cols], out)?,
            Op::Slice { src: a, row0, col0 },
            rg,
        ))
    }

    /// Averages consecutive groups of `group` rows: `(n·group)×f -> n×f`.
    pub fn group_mean_rows(&mut self, a: Var, group: usize) -> Result<Var, DiffError> {
        let ta = self.value(a);
        let (r, c) = ta.dims2().ok_or_else(|| DiffError::InvalidArgument {
            op: "group_mean_rows",
            msg: format!("rank-2 input required, got {:?}", ta.shape()),
        })?;
        if group == 0 || r % group != 0 {
            return Err(DiffError::InvalidArgument {
                op: "group_mean_rows",
                msg: format!("{r} rows not divisible into groups of {group}"),
            });
        }
        let n = r / group;
        let src = ta.data();
        let inv = 1.0 / group as f64;
        let mut out = vec![0.0; n * c];
        for g in 0..n {
            let dst = &mut out[g * c..(g + 1) * c];
            for i in g * group..(g + 1) * group {
                for (d, &s) in dst.iter_mut().zip(&src[i * c..(i + 1) * c]) {
                    *d += s;
                }
            }
            for d in dst.iter_mut() {
                *d *= inv;
            }
        }
        let rg = self.rg(a);
        Ok(self.push(Tensor::new(vec![n, c], out)?, Op::GroupMeanRows(a, group), rg))
    }

    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var, DiffError> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() {
            return Err(DiffError::InvalidArgument {
                op: "softmax",
                msg: format!("axis {axis} out of range for {shape:?}"),
            });
        }
        let out = softmax_raw(self.value(a).data(), &shape, axis);
        let rg = self.rg(a);
        Ok(self.push(Tensor::new(shape, out)?, Op::Softmax(a, axis), rg))
    }

    /// Divides by the sum along `axis` (inputs must be positive).
    pub fn normalize(&mut self, a: Var, axis: usize) -> Result<Var, DiffError> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() {
            return Err(DiffError::InvalidArgument {
                op: "normalize",
                msg: format!("axis {axis} out of range for {shape:?}"),
            });
        }
        let (outer, n, inner) = split_axis(&shape, axis);
        let mut out = self.value(a).data().to_vec();
        for o in 0..outer {
            for j in 0..inner {
                let idx = |i: usize| (o * n + i) * inner + j;
                let s: f64 = (0..n).map(|i| out[idx(i)]).sum();
                for i in 0..n {
                    out[idx(i)] /= s;
                }
            }
        }
        let rg = self.rg(a);
        Ok(self.push(Tensor::new(shape, out)?, Op::Normalize(a, axis), rg))
    }

    /// Picks `a[b, idx[b]]` from every row of a matrix.
    pub fn gather(&mut self, a: Var, idx: &[usize]) -> Result<Var, DiffError> {
        let ta = self.value(a);
        let (r, c) = ta.dims2().ok_or_else(|| DiffError::InvalidArgument {
            op: "gather",
            msg: format!("rank-2 input required, got {:?}", ta.shape()),
        })?;
        if idx.len() != r || idx.iter().any(|&i| i >= c) {
            return Err(DiffError::InvalidArgument {
                op: "gather",
                msg: format!("{} indices for a {r}x{c} matrix", idx.len()),
            });
        }
        let out = idx.iter().enumerate().map(|(b, &i)| ta.get2(b, i)).collect();
        let rg = self.rg(a);
        Ok(self.push(Tensor::vector(out), Op::Gather(a, idx.to_vec()), rg))
    }

    /// Scaled dot-product attention inside each block of `rows / batch`
    /// consecutive rows, split into `heads` column groups:
    /// `softmax(Q_h K_hᵀ / √d_h) V_h` per block and head, heads concatenated
    /// back in column order. `q`, `k`, `v` are `[rows, d]`.
    pub fn block_attention(&mut self, q: Var, k: Var, v: Var, batch: usize, heads: usize) -> Result<Var, DiffError> {
        const OP: &str = "block_attention";
        let (sq, sk, sv) = (self.shape(q), self.shape(k), self.shape(v));
        if sq.len() != 2 || sq != sk {
            return Err(mismatch(OP, sq, sk));
        }
        if sq != sv {
            return Err(mismatch(OP, sq, sv));
        }
        let (rows, d) = (sq[0], sq[1]);
        if batch == 0 || heads == 0 || rows % batch != 0 || d % heads != 0 {
            return Err(DiffError::InvalidArgument {
                op: OP,
                msg: format!("[{rows}, {d}] does not split into {batch} blocks and {heads} heads"),
            });
        }
        let dims = AttnDims {
            batch,
            c: rows / batch,
            heads,
            dk: d / heads,
        };
        let (qs, ks, vs) = (self.value(q).data(), self.value(k).data(), self.value(v).data());
        let AttnDims { c, dk, .. } = dims;
        let scale = 1.0 / (dk as f64).sqrt();
        let mut probs = vec![0.0; batch * heads * c * c];
        let mut out = vec![0.0; rows * d];
        for s in 0..batch {
            for h in 0..heads {
                let p = &mut probs[(s * heads + h) * c * c..(s * heads + h + 1) * c * c];
                let col = h * dk;
                for i in 0..c {
                    let qi = &qs[(s * c + i) * d + col..][..dk];
                    let pr = &mut p[i * c..(i + 1) * c];
                    for (j, pj) in pr.iter_mut().enumerate() {
                        *pj = dot(qi, &ks[(s * c + j) * d + col..][..dk]) * scale;
                    }
                    let row = softmax_raw(pr, &[c], 0);
                    pr.copy_from_slice(&row);
                    let oi = &mut out[(s * c + i) * d + col..][..dk];
                    for (j, &pj) in pr.iter().enumerate() {
                        axpy(oi, pj, &vs[(s * c + j) * d + col..][..dk]);
                    }
                }
            }
        }
        let rg = self.rg(q) || self.rg(k) || self.rg(v);
        Ok(self.push(
            Tensor::new(vec![rows, d], out)?,
            Op::BlockAttention {
                inputs: [q, k, v],
                dims,
                probs,
            },
            rg,
        ))
    }

    /// Same-length 1-D convolution: `x: [n, c_in, t]` (or `[c_in, t]`),
    /// `k: [c_out, c_in, width]` with odd width, `b: [c_out]`.
    pub fn conv1d(&mut self, x: Var, k: Var, b: Var) -> Result<Var, DiffError> {
        let d = self.conv_dims("conv1d", x, k, b)?;
        let out = conv1d_raw(self.value(x).data(), self.value(k).data(), self.value(b).data(), d);
        let shape = if self.shape(x).len() == 2 {
            vec![d.cout, d.t]
        } else {
            vec![d.n, d.cout, d.t]
        };
        let rg = self.rg(x) || self.rg(k) || self.rg(b);
        Ok(self.push(Tensor::new(shape, out)?, Op::Conv1d { x, k, b }, rg))
    }

    fn conv_dims(&self, op: &'static str, x: Var, k: Var, b: Var) -> Result<ConvDims, DiffError> {
        let (sx, sk, sb) = (self.shape(x), self.shape(k), self.shape(b));
        let (n, cin, t) = match *sx {
            [cin, t] => (1, cin, t),
            [n, cin, t] => (n, cin, t),
            _ => return Err(mismatch(op, sx, sk)),
        };
        let (cout, kin, width) = match *sk {
            [o, i, w] => (o, i, w),
            _ => return Err(mismatch(op, sx, sk)),
        };
        if width % 2 == 0 {
            return Err(DiffError::InvalidArgument {
                op,
                msg: format!("kernel width must be odd, got {width}"),
            });
        }
        if kin != cin {
            return Err(mismatch(op, sx, sk));
        }
        if sb != [cout] {
            return Err(mismatch(op, sk, sb));
        }
        Ok(ConvDims { n, cin, cout, t, width })
    }

    /// `mean_t ReLU(BN(conv1d(x, k, b)))` as one node: `x: [n, c_in, t]`
    /// gives `[n, c_out]`. Batch norm treats the conv channels as features,
    /// as [`Graph::batch_norm`] does for a rank-3 input. Only the convolution
    /// output is kept; normalization and rectification are recomputed in
    /// the backward pass, which keeps memory at one `[n, c_out, t]` buffer.
    #[allow(clippy::too_many_arguments)]
    pub fn conv_bn_relu_mean(
        &mut self,
        x: Var,
        k: Var,
        b: Var,
        gamma: Var,
        beta: Var,
        stats: NormStats<'_>,
        key: &str,
    ) -> Result<Var, DiffError> {
        const OP: &str = "conv_bn_relu_mean";
        if self.shape(x).len() != 3 {
            return Err(mismatch(OP, self.shape(x), self.shape(k)));
        }
        let ids = [x, k, b, gamma, beta];
        if (0..5).any(|i| (i + 1..5).any(|j| ids[i] == ids[j])) {
            return Err(DiffError::InvalidArgument {
                op: OP,
                msg: "inputs must be distinct nodes".into(),
            });
        }
        let d = self.conv_dims(OP, x, k, b)?;
        if self.shape(gamma) != [d.cout] || self.shape(beta) != [d.cout] {
            return Err(mismatch(OP, self.shape(k), self.shape(gamma)));
        }
        let y = conv1d_raw(self.value(x).data(), self.value(k).data(), self.value(b).data(), d);
        let (mean, var, batch) = match stats {
            NormStats::Batch => {
                if d.n * d.t < 2 {
                    return Err(DiffError::InvalidArgument {
                        op: OP,
                        msg: "batch statistics need at least 2 values per channel".into(),
                    });
                }
                let (m, v) = channel_stats(&y, d.n, d.cout, d.t);
                (m, v, true)
            }
            NormStats::Running { mean, var } => {
                if mean.len() != d.cout || var.len() != d.cout {
                    return Err(mismatch(OP, self.shape(gamma), &[mean.len()]));
                }
                (mean.to_vec(), var.to_vec(), false)
            }
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
        let (gm, bt) = (self.value(gamma).data(), self.value(beta).data());
        let inv_t = 1.0 / d.t as f64;
        let mut out = vec![0.0; d.n * d.cout];
        for (r, row) in y.chunks_exact(d.t).enumerate() {
            let ch = r % d.cout;
            let (m, is, gc, bc) = (mean[ch], inv_std[ch], gm[ch], bt[ch]);
            out[r] = row.iter().map(|&v| (gc * ((v - m) * is) + bc).max(0.0)).sum::<f64>() * inv_t;
        }
        if batch {
            self.observed.push((
                key.to_string(),
                ObservedStats {
                    mean: mean.clone(),
                    var,
                },
            ));
        }
        let rg = ids.iter().any(|&v| self.rg(v));
        Ok(self.push(
            Tensor::new(vec![d.n, d.cout], out)?,
            Op::ConvBnReluMean {
                inputs: ids,
                dims: d,
                y,
                mean,
                inv_std,
                batch,
            },
            rg,
        ))
    }

    /// Per-channel normalization of `[batch, channels]` or
    /// `[batch, channels, time]`; channel is axis 1 and statistics pool over
    /// every other axis. Biased variance, epsilon [`BN_EPS`].
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        stats: NormStats<'_>,
        key: &str,
    ) -> Result<Var, DiffError> {
        let sx = self.shape(x).to_vec();
        let (outer, c, inner) = match sx[..] {
            [b, f] => (b, f, 1),
            [b, f, t] => (b, f, t),
            _ => {
                return Err(DiffError::InvalidArgument {
                    op: "batch_norm",
                    msg: format!("rank-2 or rank-3 input required, got {sx:?}"),
                })
            }
        };
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(mismatch("batch_norm", &sx, self.shape(gamma)));
        }
        let count = outer * inner;
        let xs = self.value(x).data();
        let (mean, var, batch) = match stats {
            NormStats::Batch => {
                if count < 2 {
                    return Err(DiffError::InvalidArgument {
                        op: "batch_norm",
                        msg: "batch statistics need at least 2 values per channel".into(),
                    });
                }
                let mut mean = vec![0.0; c];
                let mut var = vec![0.0; c];
                for o in 0..outer {
                    for ch in 0..c {
                        let base = (o * c + ch) * inner;
                        mean[ch] += xs[base..base + inner].iter().sum::<f64>();
                    }
                }
                mean.iter_mut().for_each(|m| *m /= count as f64);
                for o in 0..outer {
                    for ch in 0..c {
                        let base = (o * c + ch) * inner;
                        var[ch] += xs[base..base + inner]
                            .iter()
                            .map(|v| (v - mean[ch]).powi(2))
                            .sum::<f64>();
                    }
                }
                var.iter_mut().for_each(|v| *v /= count as f64);
                (mean, var, true)
            }
            NormStats::Running { mean, var } => {
                if mean.len() != c || var.len() != c {
                    return Err(mismatch("batch_norm", &sx, &[mean.len()]));
                }
                (mean.to_vec(), var.to_vec(), false)
            }
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
        let g = self.value(gamma).data();
        let bt = self.value(beta).data();
        let mut xhat = vec![0.0; xs.len()];
        let mut out = vec![0.0; xs.len()];
        for o in 0..outer {
            for ch in 0..c {
                let base = (o * c + ch) * inner;
                for i in base..base + inner {
                    xhat[i] = (xs[i] - mean[ch]) * inv_std[ch];
                    out[i] = g[ch] * xhat[i] + bt[ch];
                }
            }
        }
        if batch {
            self.observed.push((key.to_string(), ObservedStats { mean, var }));
        }
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        Ok(self.push(
            Tensor::new(sx, out)?,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch,
            },
            rg,
        ))
    }

    /// Reverse sweep from a one-element node. Gradients of earlier sweeps are
    /// discarded.
    pub fn backward(&mut self, root: Var) -> Result<(), DiffError> {
        let shape = self.shape(root);
        if self.value(root).numel() != 1 {
            return Err(DiffError::NonScalar(shape.to_vec()));
        }
        self.grads = vec![None; self.nodes.len()];
        self.grads[root.0] = Some(vec![1.0]);
        for id in (0..=root.0).rev() {
            if !self.nodes[id].requires_grad {
                continue;
            }
            let Some(g) = self.grads[id].take() else {
                continue;
            };
            self.propagate(id, &g);
            self.grads[id] = Some(g);
        }
        Ok(())
    }

    pub fn grad(&self, v: Var) -> Option<Tensor> {
        let g = self.grads.get(v.0)?.as_ref()?;
        Tensor::new(self.shape(v).to_vec(), g.clone()).ok()
    }

    /// Adds the gradients of every parameter leaf into the store.
    pub fn accumulate_param_grads(&self, store: &mut ParamStore) {
        for &(v, id) in &self.params {
            if let Some(Some(g)) = self.grads.get(v.0) {
                let p = store.get_mut(id);
                for (d, s) in p.grad.data_mut().iter_mut().zip(g) {
                    *d += s;
                }
            }
        }
    }

    fn propagate(&mut self, id: usize, g: &[f64]) {
        // Node values are read through `nodes` while `grads` is written.
        let nodes = &self.nodes;
        let grads = &mut self.grads;
        match &nodes[id].op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = val(nodes, *a).dims2().expect("matrix");
                let n = shp(nodes, *b)[1];
                if rgn(nodes, *a) {
                    // dA = G·Bᵀ, dB = Aᵀ·G
                    let bt = transpose_raw(val(nodes, *b).data(), k, n);
                    acc(nodes, grads, *a, |ga| gemm_acc(ga, g, &bt, m, n, k));
                }
                if rgn(nodes, *b) {
                    let at = transpose_raw(val(nodes, *a).data(), m, k);
                    acc(nodes, grads, *b, |gb| gemm_acc(gb, &at, g, k, m, n));
                }
            }
            Op::Add(a, b) => {
                acc(nodes, grads, *a, |ga| add_into(ga, g));
                acc(nodes, grads, *b, |gb| add_into(gb, g));
            }
            Op::Sub(a, b) => {
                acc(nodes, grads, *a, |ga| add_into(ga, g));
                acc(nodes, grads, *b, |gb| gb.iter_mut().zip(g).for_each(|(d, s)| *d -= s));
            }
            Op::Mul(a, b) => {
                let av = val(nodes, *a).data();
                let bv = val(nodes, *b).data();
                acc(nodes, grads, *a, |ga| {
                    for i in 0..g.len() {
                        ga[i] += g[i] * bv[i];
                    }
                });
                acc(nodes, grads, *b, |gb| {
                    for i in 0..g.len() {
                        gb[i] += g[i] * av[i];
                    }
                });
            }
            Op::AddBias(a, bias) => {
                acc(nodes, grads, *a, |ga| add_into(ga, g));
                let n = val(nodes, *bias).numel();
                acc(nodes, grads, *bias, |gb| {
                    for chunk in g.chunks(n) {
                        add_into(gb, chunk);
                    }
                });
            }
            Op::Scale(a, c) => {
                let c = *c;
                acc(nodes, grads, *a, |ga| {
                    ga.iter_mut().zip(g).for_each(|(d, s)| *d += c * s)
                });
            }
            Op::AddScalar(a) | Op::Reshape(a) => acc(nodes, grads, *a, |ga| add_into(ga, g)),
            Op::Relu(a) => {
                let av = val(nodes, *a).data();
                acc(nodes, grads, *a, |ga| {
                    for i in 0..g.len() {
                        if av[i] > 0.0 {
                            ga[i] += g[i];
                        }
                    }
                });
            }
            Op::Log(a) => {
                let av = val(nodes, *a).data();
                acc(nodes, grads, *a, |ga| {
                    for i in 0..g.len() {
                        ga[i] += g[i] / av[i];
                    }
                });
            }
            Op::Pow(a, e) => {
                let e = *e;
                let av = val(nodes, *a).data();
                acc(nodes, grads, *a, |ga| {
                    if e == 0.0 {
                        return;
                    }
                    for i in 0..g.len() {
                        let d = if av[i] == 0.0 && e < 1.0 {
                            0.0
                        } else {
                            e * av[i].powf(e - 1.0)
                        };
                        ga[i] += g[i] * d;
                    }
                });
            }
            Op::Clamp(a, lo, hi) => {
                let (lo, hi) = (*lo, *hi);
                let av = val(nodes, *a).data();
                acc(nodes, grads, *a, |ga| {
                    for i in 0..g.len() {
                        if av[i] >= lo && av[i] <= hi {
                            ga[i] += g[i];
                        }
                    }
                });
            }
            Op::Concat(parts, axis) => {
                let out_shape = nodes[id].value.shape().to_vec();
                let (outer, total, inner) = split_axis(&out_shape, *axis);
                let mut offset = 0;
                for &p in parts {
                    let len = shp(nodes, p)[*axis];
                    acc(nodes, grads, p, |gp| {
                        for o in 0..outer {
                            let src = (o * total + offset) * inner;
                            let dst = o * len * inner;
                            add_into(&mut gp[dst..dst + len * inner], &g[src..src + len * inner]);
                        }
                    });
                    offset += len;
                }
            }
            Op::Sum(a, axis) => {
                let shape = shp(nodes, *a).to_vec();
                let (outer, n, inner) = split_axis(&shape, *axis);
                acc(nodes, grads, *a, |ga| {
                    if inner == 1 {
                        for (row, &s) in ga.chunks_exact_mut(n).zip(g) {
                            row.iter_mut().for_each(|d| *d += s);
                        }
                        return;
                    }
                    for o in 0..outer {
                        for i in 0..n {
                            let dst = (o * n + i) * inner;
                            add_into(&mut ga[dst..dst + inner], &g[o * inner..(o + 1) * inner]);
                        }
                    }
                });
            }
            Op::SumAll(a) => {
                let s = g[0];
                acc(nodes, grads, *a, |ga| ga.iter_mut().for_each(|d| *d += s));
            }
            Op::Transpose(a) => {
                let (r, c) = val(nodes, *a).dims2().expect("matrix");
                acc(nodes, grads, *a, |ga| {
                    for i in 0..r {
                        for j in 0..c {
                            ga[i * c + j] += g[j * r + i];
                        }
                    }
                });
            }
            Op::Slice { src, row0, col0 } => {
                let (_, c) = val(nodes, *src).dims2().expect("matrix");
                let (rows, cols) = nodes[id].value.dims2().expect("matrix");
                let (row0, col0) = (*row0, *col0);
                acc(nodes, grads, *src, |gs| {
                    for i in 0..rows {
                        let dst = (row0 + i) * c + col0;
                        add_into(&mut gs[dst..dst + cols], &g[i * cols..(i + 1) * cols]);
                    }
                });
            }
            Op::GroupMeanRows(a, group) => {
                let (r, c) = val(nodes, *a).dims2().expect("matrix");
                let inv = 1.0 / *group as f64;
                let group = *group;
                acc(nodes, grads, *a, |ga| {
                    for i in 0..r {
                        let src = &g[(i / group) * c..(i / group + 1) * c];
                        for (d, &s) in ga[i * c..(i + 1) * c].iter_mut().zip(src) {
                            *d += s * inv;
                        }
                    }
                });
            }
            Op::Softmax(a, axis) => {
                let y = nodes[id].value.data();
                let shape = shp(nodes, *a).to_vec();
                let (outer, n, inner) = split_axis(&shape, *axis);
                acc(nodes, grads, *a, |ga| {
                    for o in 0..outer {
                        for j in 0..inner {
                            let idx = |i: usize| (o * n + i) * inner + j;
                            let dot: f64 = (0..n).map(|i| g[idx(i)] * y[idx(i)]).sum();
                            for i in 0..n {
                                ga[idx(i)] += y[idx(i)] * (g[idx(i)] - dot);
                            }
                        }
                    }
                });
            }
            Op::Normalize(a, axis) => {
                let y = nodes[id].value.data();
                let x = val(nodes, *a).data();
                let shape = shp(nodes, *a).to_vec();
                let (outer, n, inner) = split_axis(&shape, *axis);
                acc(nodes, grads, *a, |ga| {
                    for o in 0..outer {
                        for j in 0..inner {
                            let idx = |i: usize| (o * n + i) * inner + j;
                            let s: f64 = (0..n).map(|i| x[idx(i)]).sum();
                            let dot: f64 = (0..n).map(|i| g[idx(i)] * y[idx(i)]).sum();
                            for i in 0..n {
                                ga[idx(i)] += (g[idx(i)] - dot) / s;
                            }
                        }
                    }
                });
            }
            Op::Gather(a, idx) => {
                let c = shp(nodes, *a)[1];
                acc(nodes, grads, *a, |ga| {
                    for (b, &i) in idx.iter().enumerate() {
                        ga[b * c + i] += g[b];
                    }
                });
            }
            Op::Conv1d { x, k, b } => conv1d_backward(nodes, grads, g, *x, *k, *b),
            Op::BlockAttention { inputs, dims, probs } => {
                block_attention_backward(nodes, grads, g, *inputs, *dims, probs)
            }
            Op::ConvBnReluMean {
                inputs,
                dims,
                y,
                mean,
                inv_std,
                batch,
            } => conv_bn_relu_mean_backward(nodes, grads, g, *inputs, *dims, y, mean, inv_std, *batch),
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch,
            } => {
                let sx = shp(nodes, *x).to_vec();
                let (outer, c, inner) = match sx[..] {
                    [b, f] => (b, f, 1),
                    [b, f, t] => (b, f, t),
                    _ => unreachable!("checked in forward"),
                };
                let count = (outer * inner) as f64;
                let mut sum_g = vec![0.0; c];
                let mut sum_gx = vec![0.0; c];
                for o in 0..outer {
                    for ch in 0..c {
                        let base = (o * c + ch) * inner;
                        for i in base..base + inner {
                            sum_g[ch] += g[i];
                            sum_gx[ch] += g[i] * xhat[i];
                        }
                    }
                }
                acc(nodes, grads, *beta, |gb| add_into(gb, &sum_g));
                acc(nodes, grads, *gamma, |gg| add_into(gg, &sum_gx));
                let gam = val(nodes, *gamma).data();
                let batch = *batch;
                acc(nodes, grads, *x, |gx| {
                    for o in 0..outer {
                        for ch in 0..c {
                            let base = (o * c + ch) * inner;
                            let scale = gam[ch] * inv_std[ch];
                            for i in base..base + inner {
                                gx[i] += if batch {
                                    scale * (g[i] - sum_g[ch] / count - xhat[i] * sum_gx[ch] / count)
                                } else {
                                    scale * g[i]
                                };
                            }
                        }
                    }
                });
            }
        }
    }
}

fn block_attention_backward(
    nodes: &[Node],
    grads: &mut [Option<Vec<f64>>],
    g: &[f64],
    [q, k, v]: [Var; 3],
    dims: AttnDims,
    probs: &[f64],
) {
    let AttnDims { batch, c, heads, dk } = dims;
    let d = heads * dk;
    let scale = 1.0 / (dk as f64).sqrt();
    let (qs, ks, vs) = (val(nodes, q).data(), val(nodes, k).data(), val(nodes, v).data());
    let (mut dq, mut dkv, mut dv) = (vec![0.0; qs.len()], vec![0.0; qs.len()], vec![0.0; qs.len()]);
    let mut ds = vec![0.0; c * c];
    for s in 0..batch {
        for h in 0..heads {
            let p = &probs[(s * heads + h) * c * c..(s * heads + h + 1) * c * c];
            let col = h * dk;
            let at = |r: usize| (s * c + r) * d + col;
            for i in 0..c {
                let gi = &g[at(i)..][..dk];
                let pr = &p[i * c..(i + 1) * c];
                let dsr = &mut ds[i * c..(i + 1) * c];
                for (j, &pij) in pr.iter().enumerate() {
                    axpy(&mut dv[at(j)..][..dk], pij, gi);
                    dsr[j] = dot(gi, &vs[at(j)..][..dk]);
                }
                let inner: f64 = pr.iter().zip(dsr.iter()).map(|(a, b)| a * b).sum();
                for (dst, &pij) in dsr.iter_mut().zip(pr) {
                    *dst = pij * (*dst - inner) * scale;
                }
            }
            for i in 0..c {
                for j in 0..c {
                    let w = ds[i * c + j];
                    axpy(&mut dq[at(i)..][..dk], w, &ks[at(j)..][..dk]);
                    axpy(&mut dkv[at(j)..][..dk], w, &qs[at(i)..][..dk]);
                }
            }
        }
    }
    acc(nodes, grads, q, |gq| add_into(gq, &dq));
    acc(nodes, grads, k, |gk| add_into(gk, &dkv));
    acc(nodes, grads, v, |gv| add_into(gv, &dv));
}

wide_or_narrow! {
fn conv1d_raw(xs: &[f64], ks: &[f64], bs: &[f64], d: ConvDims) -> Vec<f64> {
    let ConvDims { n, cin, cout, t, width } = d;
    let pad = width / 2;
    let mut out = vec![0.0; n * cout * t];
    for s in 0..n {
        for o in 0..cout {
            let dst = &mut out[(s * cout + o) * t..(s * cout + o + 1) * t];
            dst.fill(bs[o]);
            for i in 0..cin {
                let src = &xs[(s * cin + i) * t..(s * cin + i + 1) * t];
                let kern = &ks[(o * cin + i) * width..(o * cin + i + 1) * width];
                for (j, &w) in kern.iter().enumerate() {
                    let (lo, hi) = valid_range(j, pad, t);
                    axpy(&mut dst[lo..hi], w, &src[lo + j - pad..hi + j - pad]);
                }
            }
        }
    }
    out
}}

/// Gradient buffers of a node's inputs, held outside `grads` while one
/// backward kernel writes several of them at once.
fn take_buf(nodes: &[Node], grads: &mut [Option<Vec<f64>>], v: Var) -> Option<Vec<f64>> {
    rgn(nodes, v).then(|| grads[v.0].take().unwrap_or_else(|| vec![0.0; nodes[v.0].value.numel()]))
}

fn put_buf(grads: &mut [Option<Vec<f64>>], v: Var, buf: Option<Vec<f64>>) {
    if buf.is_some() {
        grads[v.0] = buf;
    }
}

wide_or_narrow! {
/// Convolution adjoints for one sample: `go` is `[c_out, t]`, `xs` and `gx`
/// are that sample's `[c_in, t]` input and input gradient.
fn conv_sample_backward(
    go: &[f64],
    xs: &[f64],
    ks: &[f64],
    d: ConvDims,
    gk: Option<&mut [f64]>,
    gb: Option<&mut [f64]>,
    gx: Option<&mut [f64]>,
) {
    let ConvDims { cin, cout, t, width, .. } = d;
    let pad = width / 2;
    if let Some(gb) = gb {
        for (o, row) in go.chunks_exact(t).enumerate() {
            gb[o] += sum4(row);
        }
    }
    if let Some(gk) = gk {
        for o in 0..cout {
            let go = &go[o * t..(o + 1) * t];
            for i in 0..cin {
                let src = &xs[i * t..(i + 1) * t];
                for j in 0..width {
                    let (lo, hi) = valid_range(j, pad, t);
                    gk[(o * cin + i) * width + j] += dot(&go[lo..hi], &src[lo + j - pad..hi + j - pad]);
                }
            }
        }
    }
    if let Some(gx) = gx {
        for o in 0..cout {
            let go = &go[o * t..(o + 1) * t];
            for i in 0..cin {
                let dst = &mut gx[i * t..(i + 1) * t];
                let kern = &ks[(o * cin + i) * width..(o * cin + i + 1) * width];
                for (j, &w) in kern.iter().enumerate() {
                    let (lo, hi) = valid_range(j, pad, t);
                    axpy(&mut dst[lo + j - pad..hi + j - pad], w, &go[lo..hi]);
                }
            }
        }
    }
}}

fn conv1d_backward(nodes: &[Node], grads: &mut [Option<Vec<f64>>], g: &[f64], x: Var, k: Var, b: Var) {
    let (n, cin, t) = match *shp(nodes, x) {
        [cin, t] => (1, cin, t),
        [n, cin, t] => (n, cin, t),
        _ => unreachable!("checked in forward"),
    };
    let sk = shp(nodes, k);
    let d = ConvDims {
        n,
        cin,
        cout: sk[0],
        t,
        width: sk[2],
    };
    let (xs, ks) = (val(nodes, x).data(), val(nodes, k).data());
    let (mut gx, mut gk, mut gb) = (
        take_buf(nodes, grads, x),
        take_buf(nodes, grads, k),
        take_buf(nodes, grads, b),
    );
    let (xl, ol) = (cin * t, d.cout * t);
    for s in 0..n {
        conv_sample_backward(
            &g[s * ol..(s + 1) * ol],
            &xs[s * xl..(s + 1) * xl],
            ks,
            d,
            gk.as_deref_mut(),
            gb.as_deref_mut(),
            gx.as_mut().map(|v| &mut v[s * xl..(s + 1) * xl]),
        );
    }
    put_buf(grads, x, gx);
    put_buf(grads, k, gk);
    put_buf(grads, b, gb);
}

#[allow(clippy::too_many_arguments)]
fn conv_bn_relu_mean_backward(
    nodes: &[Node],
    grads: &mut [Option<Vec<f64>>],
    g: &[f64],
    [x, k, b, gamma, beta]: [Var; 5],
    d: ConvDims,
    y: &[f64],
    mean: &[f64],
    inv_std: &[f64],
    batch: bool,
) {
    let ConvDims { n, cin, cout, t, .. } = d;
    let (gm, bt) = (val(nodes, gamma).data(), val(nodes, beta).data());
    let inv_t = 1.0 / t as f64;
    // The gradient reaching the normalized value is g/t wherever the ReLU
    // is open. Its per-channel sums feed beta, gamma and the batch terms.
    let mut sum_g = vec![0.0; cout];
    let mut sum_gx = vec![0.0; cout];
    for (r, row) in y.chunks_exact(t).enumerate() {
        let ch = r % cout;
        let gz = g[r] * inv_t;
        if gz == 0.0 {
            continue;
        }
        for &v in row {
            let xhat = (v - mean[ch]) * inv_std[ch];
            if gm[ch] * xhat + bt[ch] > 0.0 {
                sum_g[ch] += gz;
                sum_gx[ch] += gz * xhat;
            }
        }
    }
    acc(nodes, grads, beta, |gb| add_into(gb, &sum_g));
    acc(nodes, grads, gamma, |gg| add_into(gg, &sum_gx));
    if !(rgn(nodes, x) || rgn(nodes, k) || rgn(nodes, b)) {
        return;
    }
    let count = (n * t) as f64;
    let (xs, ks) = (val(nodes, x).data(), val(nodes, k).data());
    let (mut gx, mut gk, mut gb) = (
        take_buf(nodes, grads, x),
        take_buf(nodes, grads, k),
        take_buf(nodes, grads, b),
    );
    let mut gy = vec![0.0; cout * t];
    for s in 0..n {
        for o in 0..cout {
            let r = s * cout + o;
            let gz = g[r] * inv_t;
            let scale = gm[o] * inv_std[o];
            let (mg, mgx) = if batch {
                (sum_g[o] / count, sum_gx[o] / count)
            } else {
                (0.0, 0.0)
            };
            for (dst, &v) in gy[o * t..(o + 1) * t].iter_mut().zip(&y[r * t..(r + 1) * t]) {
                let xhat = (v - mean[o]) * inv_std[o];
                let up = if gm[o] * xhat + bt[o] > 0.0 { gz } else { 0.0 };
                *dst = scale * (up - mg - xhat * mgx);
            }
        }
        conv_sample_backward(
            &gy,
            &xs[s * cin * t..(s + 1) * cin * t],
            ks,
            d,
            gk.as_deref_mut(),
            gb.as_deref_mut(),
            gx.as_mut().map(|v| &mut v[s * cin * t..(s + 1) * cin * t]),
        );
    }
    put_buf(grads, x, gx);
    put_buf(grads, k, gk);
    put_buf(grads, b, gb);
}

/// Per-channel mean and biased variance of `[outer, c, inner]` data.
fn channel_stats(xs: &[f64], outer: usize, c: usize, inner: usize) -> (Vec<f64>, Vec<f64>) {
    let count = (outer * inner) as f64;
    let mut mean = vec![0.0; c];
    let mut var = vec![0.0; c];
    for (r, row) in xs.chunks_exact(inner).enumerate() {
        mean[r % c] += row.iter().sum::<f64>();
    }
    mean.iter_mut().for_each(|m| *m /= count);
    for (r, row) in xs.chunks_exact(inner).enumerate() {
        let m = mean[r % c];
        var[r % c] += row.iter().map(|v| (v - m) * (v - m)).sum::<f64>();
    }
    var.iter_mut().for_each(|v| *v /= count);
    (mean, var)
}

fn val(nodes: &[Node], v: Var) -> &Tensor {
    &nodes[v.0].value
}

fn shp(nodes: &[Node], v: Var) -> &[usize] {
    nodes[v.0].value.shape()
}

fn rgn(nodes: &[Node], v: Var) -> bool {
    nodes[v.0].requires_grad
}

/// Applies `f` to `v`'s gradient buffer, allocating it on first use; no-op
/// for nodes that do not require gradients.
fn acc(nodes: &[Node], grads: &mut [Option<Vec<f64>>], v: Var, f: impl FnOnce(&mut [f64])) {
    if !nodes[v.0].requires_grad {
        return;
    }
    let n = nodes[v.0].value.numel();
    f(grads[v.0].get_or_insert_with(|| vec![0.0; n]));
}

/// Output positions `t` for which tap `j` reads inside `[0, len)`.
fn valid_range(j: usize, pad: usize, len: usize) -> (usize, usize) {
    let lo = pad.saturating_sub(j);
    let hi = (len + pad).saturating_sub(j).min(len);
    (lo, hi.max(lo))
}

/// `dst += w·src` element-wise.
#[inline]
pub(crate) fn axpy(dst: &mut [f64], w: f64, src: &[f64]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += w * s;
    }
}

/// Dot product with four interleaved partial sums, so the loop vectorizes
/// while the summation order stays fixed.
#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len().min(b.len());
    let (a, b) = (&a[..n], &b[..n]);
    let mut acc = [0.0; 4];
    let mut ca = a.chunks_exact(4);
    let mut cb = b.chunks_exact(4);
    for (x, y) in (&mut ca).zip(&mut cb) {
        for l in 0..4 {
            acc[l] += x[l] * y[l];
        }
    }
    let tail: f64 = ca.remainder().iter().zip(cb.remainder()).map(|(x, y)| x * y).sum();
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

#[inline]
fn sum4(a: &[f64]) -> f64 {
    let mut acc = [0.0; 4];
    let mut c = a.chunks_exact(4);
    for x in &mut c {
        for l in 0..4 {
            acc[l] += x[l];
        }
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + c.remainder().iter().sum::<f64>()
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

/// Max-shifted softmax along `axis` of a row-major buffer.
pub fn softmax_raw(data: &[f64], shape: &[usize], axis: usize) -> Vec<f64> {
    let (outer, n, inner) = split_axis(shape, axis);
    let mut out = data.to_vec();
    for o in 0..outer {
        for j in 0..inner {
            let idx = |i: usize| (o * n + i) * inner + j;
            let max = (0..n).map(|i| data[idx(i)]).fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for i in 0..n {
                let e = (data[idx(i)] - max).exp();
                out[idx(i)] = e;
                sum += e;
            }
            for i in 0..n {
                out[idx(i)] /= sum;
            }
        }
    }
    out
}
