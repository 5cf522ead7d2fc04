//! Operation tape. Nodes are appended in evaluation order, so the tape is
//! already topologically sorted and backward is a single reverse sweep.

use super::kernels::{self, AttentionDims, AttentionGrads, AttentionMask};
use super::{DType, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Constant,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    ScaleBy(Var, Var),
    Exp(Var),
    Log(Var),
    Softplus(Var),
    Gelu(Var),
    Sum(Var),
    Mean(Var),
    Transpose(Var),
    Reshape(Var),
    ConcatRows(Vec<Var>),
    SliceRows {
        src: Var,
        start: usize,
    },
    Gather {
        table: Var,
        ids: Vec<usize>,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        probs: Vec<f64>,
    },
    L2Normalize {
        x: Var,
        norms: Vec<f64>,
    },
    GroupMaxRows {
        src: Var,
        argmax: Vec<usize>,
    },
    LogSoftmaxRows(Var),
}

#[derive(Debug)]
struct Node {
    shape: Vec<usize>,
    dtype: DType,
    data: Vec<f64>,
    op: Op,
    requires_grad: bool,
}

/// A recorded computation. Confined to one thread; build a fresh graph per
/// forward pass.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Result of [`Graph::backward`]: gradients for every node that requires one.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    visited: usize,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Adds the gradient of `v` into `tensor.grad`.
    pub fn accumulate_into(&self, v: Var, tensor: &mut Tensor) -> Result<()> {
        let Some(g) = self.get(v) else {
            return Ok(());
        };
        if g.len() != tensor.len() {
            return Err(Error::shape("accumulate_into", "gradient length differs"));
        }
        match tensor.grad.as_mut() {
            Some(acc) => acc.iter_mut().zip(g).for_each(|(a, b)| *a += b),
            None => tensor.grad = Some(g.to_vec()),
        }
        Ok(())
    }

    /// Number of operations whose backward rule ran.
    pub fn visited(&self) -> usize {
        self.visited
    }
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, dtype: DType, mut data: Vec<f64>, op: Op) -> Var {
        debug_assert_eq!(numel(&shape), data.len());
        if dtype == DType::Float32 {
            for x in &mut data {
                *x = *x as f32 as f64;
            }
        }
        let requires_grad = match &op {
            Op::Leaf | Op::Constant => false,
            other => parents(other).iter().any(|p| self.nodes[p.0].requires_grad),
        };
        self.nodes.push(Node {
            shape,
            dtype,
            data,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records a leaf; it is differentiated iff `tensor.requires_grad`.
    pub fn leaf(&mut self, tensor: &Tensor) -> Var {
        self.nodes.push(Node {
            shape: tensor.shape().to_vec(),
            dtype: tensor.dtype(),
            data: tensor.data().to_vec(),
            op: Op::Leaf,
            requires_grad: tensor.requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, tensor: Tensor) -> Var {
        let shape = tensor.shape().to_vec();
        let dtype = tensor.dtype();
        let data = tensor.data().to_vec();
        self.nodes.push(Node {
            shape,
            dtype,
            data,
            op: Op::Constant,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].data
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn dtype(&self, v: Var) -> DType {
        self.nodes[v.0].dtype
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn scalar_value(&self, v: Var) -> f64 {
        self.nodes[v.0].data[0]
    }

    pub fn tensor(&self, v: Var) -> Tensor {
        let n = &self.nodes[v.0];
        Tensor::new(n.shape.clone(), n.dtype, n.data.clone()).expect("recorded shape")
    }

    fn cols(&self, v: Var) -> usize {
        *self.nodes[v.0].shape.last().expect("non-empty shape")
    }

    fn dt2(&self, a: Var, b: Var) -> DType {
        self.nodes[a.0].dtype.promote(self.nodes[b.0].dtype)
    }

    fn matrix_dims(&self, v: Var, op: &'static str) -> Result<(usize, usize)> {
        match self.shape(v) {
            [r, c] => Ok((*r, *c)),
            s => Err(Error::shape(op, format!("expected a matrix, got {s:?}"))),
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (n, k) = self.matrix_dims(a, "matmul")?;
        let (k2, m) = self.matrix_dims(b, "matmul")?;
        if k != k2 {
            return Err(Error::shape("matmul", format!("[{n},{k}] x [{k2},{m}]")));
        }
        let data = kernels::mm(self.value(a), self.value(b), n, k, m);
        let dt = self.dt2(a, b);
        Ok(self.push(vec![n, m], dt, data, Op::MatMul(a, b)))
    }

    fn same_shape(&self, a: Var, b: Var, op: &'static str) -> Result<()> {
        if self.shape(a) == self.shape(b) {
            Ok(())
        } else {
            Err(Error::shape(
                op,
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ))
        }
    }

    fn zip_with(&mut self, a: Var, b: Var, name: &'static str, f: fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        self.same_shape(a, b, name)?;
        let data = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(x, y)| f(*x, *y))
            .collect();
        let dt = self.dt2(a, b);
        Ok(self.push(self.shape(a).to_vec(), dt, data, op))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    /// Adds a `[c]` vector to every trailing-axis slice of `a`.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var> {
        let c = self.cols(a);
        if self.shape(bias) != [c] {
            return Err(Error::shape(
                "add_row",
                format!("bias {:?} for width {c}", self.shape(bias)),
            ));
        }
        let b = self.value(bias);
        let data = self
            .value(a)
            .iter()
            .enumerate()
            .map(|(i, x)| x + b[i % c])
            .collect();
        let dt = self.dt2(a, bias);
        Ok(self.push(self.shape(a).to_vec(), dt, data, Op::AddRow(a, bias)))
    }

    /// `a · w + b` for `a[n,k]`, `w[k,m]`, `b[m]`.
    pub fn linear(&mut self, a: Var, w: Var, b: Var) -> Result<Var> {
        let y = self.matmul(a, w)?;
        self.add_row(y, b)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let data = self.value(a).iter().map(|x| x * c).collect();
        self.push(self.shape(a).to_vec(), self.dtype(a), data, Op::Scale(a, c))
    }

    /// Multiplies every element of `a` by the scalar node `s`.
    pub fn scale_by(&mut self, a: Var, s: Var) -> Result<Var> {
        if numel(self.shape(s)) != 1 {
            return Err(Error::shape("scale_by", "factor must be a scalar"));
        }
        let c = self.scalar_value(s);
        let data = self.value(a).iter().map(|x| x * c).collect();
        let dt = self.dt2(a, s);
        Ok(self.push(self.shape(a).to_vec(), dt, data, Op::ScaleBy(a, s)))
    }

    fn map(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let data = self.value(a).iter().map(|x| f(*x)).collect();
        self.push(self.shape(a).to_vec(), self.dtype(a), data, op)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.map(a, f64::exp, Op::Exp(a))
    }

    pub fn log(&mut self, a: Var) -> Var {
        self.map(a, f64::ln, Op::Log(a))
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        self.map(a, softplus, Op::Softplus(a))
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        self.map(a, gelu, Op::Gelu(a))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).iter().sum();
        self.push(vec![1], self.dtype(a), vec![s], Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let s = v.iter().sum::<f64>() / v.len() as f64;
        self.push(vec![1], self.dtype(a), vec![s], Op::Mean(a))
    }

    pub fn dot(&mut self, a: Var, b: Var) -> Result<Var> {
        let p = self.mul(a, b)?;
        Ok(self.sum(p))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.matrix_dims(a, "transpose")?;
        let src = self.value(a);
        let mut data = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                data[j * r + i] = src[i * c + j];
            }
        }
        Ok(self.push(vec![c, r], self.dtype(a), data, Op::Transpose(a)))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        if numel(shape) != numel(self.shape(a)) || shape.contains(&0) {
            return Err(Error::shape(
                "reshape",
                format!("{:?} -> {shape:?}", self.shape(a)),
            ));
        }
        let data = self.value(a).to_vec();
        Ok(self.push(shape.to_vec(), self.dtype(a), data, Op::Reshape(a)))
    }

    /// Stacks matrices with equal width along the leading axis.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(Error::shape("concat_rows", "no inputs"));
        };
        let c = self.cols(first);
        let mut rows = 0;
        let mut dtype = self.dtype(first);
        let mut data = Vec::new();
        for &p in parts {
            let (r, pc) = self.matrix_dims(p, "concat_rows")?;
            if pc != c {
                return Err(Error::shape("concat_rows", format!("width {pc} vs {c}")));
            }
            rows += r;
            dtype = dtype.promote(self.dtype(p));
            data.extend_from_slice(self.value(p));
        }
        Ok(self.push(vec![rows, c], dtype, data, Op::ConcatRows(parts.to_vec())))
    }

    pub fn slice_rows(&mut self, src: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.matrix_dims(src, "slice_rows")?;
        if len == 0 || start + len > r {
            return Err(Error::shape(
                "slice_rows",
                format!("rows {start}..{} of {r}", start + len),
            ));
        }
        let data = self.value(src)[start * c..(start + len) * c].to_vec();
        Ok(self.push(vec![len, c], self.dtype(src), data, Op::SliceRows { src, start }))
    }

    /// Row lookup `table[ids[i]]`.
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (v, c) = self.matrix_dims(table, "gather")?;
        if ids.is_empty() {
            return Err(Error::shape("gather", "no ids"));
        }
        let src = self.value(table);
        let mut data = Vec::with_capacity(ids.len() * c);
        for &id in ids {
            if id >= v {
                return Err(Error::invalid(format!("id {id} outside table of {v} rows")));
            }
            data.extend_from_slice(&src[id * c..(id + 1) * c]);
        }
        Ok(self.push(
            vec![ids.len(), c],
            self.dtype(table),
            data,
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
        ))
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let c = self.cols(x);
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(Error::shape("layer_norm", "gain/bias width"));
        }
        let (y, xhat, rstd) =
            kernels::layer_norm_forward(self.value(x), self.value(gamma), self.value(beta), c);
        let dt = self.dtype(x).promote(self.dtype(gamma));
        Ok(self.push(
            self.shape(x).to_vec(),
            dt,
            y,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
        ))
    }

    /// Multi-head masked softmax attention. `mask = None` allows every pair.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        mask: Option<&AttentionMask>,
        heads: usize,
    ) -> Result<Var> {
        kernels::check_attention_shapes(self.shape(q), self.shape(k), self.shape(v), heads)?;
        let (n, d) = (self.shape(q)[0], self.shape(q)[1]);
        let m = self.shape(k)[0];
        if let Some(mk) = mask {
            if mk.rows() != n || mk.cols() != m {
                return Err(Error::shape(
                    "attention",
                    format!("mask {}x{} for {n}x{m} scores", mk.rows(), mk.cols()),
                ));
            }
        }
        let dims = AttentionDims { n, m, d, heads };
        let (out, probs) =
            kernels::attention_forward(self.value(q), self.value(k), self.value(v), &dims, mask)?;
        let dt = self.dt2(q, k).promote(self.dtype(v));
        Ok(self.push(
            vec![n, d],
            dt,
            out,
            Op::Attention {
                q,
                k,
                v,
                heads,
                probs,
            },
        ))
    }

    pub fn l2_normalize(&mut self, x: Var) -> Result<Var> {
        let c = self.cols(x);
        let (y, norms) = kernels::normalize_rows(self.value(x), c)?;
        Ok(self.push(
            self.shape(x).to_vec(),
            self.dtype(x),
            y,
            Op::L2Normalize { x, norms },
        ))
    }

    /// For `src[g*group, c]`, returns `[g, c]` with the column-wise maximum over
    /// each consecutive block of `group` rows.
    pub fn group_max_rows(&mut self, src: Var, group: usize) -> Result<Var> {
        let (r, c) = self.matrix_dims(src, "group_max_rows")?;
        if group == 0 || r % group != 0 {
            return Err(Error::shape(
                "group_max_rows",
                format!("{r} rows in groups of {group}"),
            ));
        }
        let g = r / group;
        let v = self.value(src);
        let mut data = vec![f64::NEG_INFINITY; g * c];
        let mut argmax = vec![0; g * c];
        for gi in 0..g {
            for q in 0..group {
                let row = gi * group + q;
                for j in 0..c {
                    let x = v[row * c + j];
                    if x > data[gi * c + j] {
                        data[gi * c + j] = x;
                        argmax[gi * c + j] = row;
                    }
                }
            }
        }
        Ok(self.push(
            vec![g, c],
            self.dtype(src),
            data,
            Op::GroupMaxRows { src, argmax },
        ))
    }

    pub fn log_softmax_rows(&mut self, x: Var) -> Var {
        let c = self.cols(x);
        let mut data = self.value(x).to_vec();
        for row in data.chunks_mut(c) {
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = mx + row.iter().map(|v| (v - mx).exp()).sum::<f64>().ln();
            row.iter_mut().for_each(|v| *v -= lse);
        }
        self.push(self.shape(x).to_vec(), self.dtype(x), data, Op::LogSoftmaxRows(x))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let shape = self.shape(loss);
        if numel(shape) != 1 {
            return Err(Error::NonScalarLoss(shape.to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        let mut visited = 0;
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad || matches!(node.op, Op::Leaf | Op::Constant) {
                continue;
            }
            let Some(dy) = grads[idx].take() else {
                continue;
            };
            visited += 1;
            self.backprop(node, &dy, &mut grads);
            grads[idx] = Some(dy);
        }
        Ok(Gradients { grads, visited })
    }

    fn backprop(&self, node: &Node, dy: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        macro_rules! with_grad {
            ($v:expr, |$g:ident| $body:block) => {
                if let Some($g) = grad_slot(nodes, grads, $v) {
                    $body
                }
            };
        }
        let val = |v: Var| -> &[f64] { &nodes[v.0].data };
        match &node.op {
            Op::Leaf | Op::Constant => {}
            Op::MatMul(a, b) => {
                let (n, k) = (nodes[a.0].shape[0], nodes[a.0].shape[1]);
                let m = nodes[b.0].shape[1];
                with_grad!(*a, |ga| {
                    kernels::mm_nt_acc(ga, dy, val(*b), n, m, k);
                });
                with_grad!(*b, |gb| {
                    kernels::mm_tn_acc(gb, val(*a), dy, n, k, m);
                });
            }
            Op::Add(a, b) => {
                with_grad!(*a, |ga| {
                    add_into(ga, dy);
                });
                with_grad!(*b, |gb| {
                    add_into(gb, dy);
                });
            }
            Op::Sub(a, b) => {
                with_grad!(*a, |ga| {
                    add_into(ga, dy);
                });
                with_grad!(*b, |gb| {
                    gb.iter_mut().zip(dy).for_each(|(g, d)| *g -= d);
                });
            }
            Op::Mul(a, b) => {
                with_grad!(*a, |ga| {
                    for ((g, d), y) in ga.iter_mut().zip(dy).zip(val(*b)) {
                        *g += d * y;
                    }
                });
                with_grad!(*b, |gb| {
                    for ((g, d), x) in gb.iter_mut().zip(dy).zip(val(*a)) {
                        *g += d * x;
                    }
                });
            }
            Op::AddRow(a, bias) => {
                with_grad!(*a, |ga| {
                    add_into(ga, dy);
                });
                with_grad!(*bias, |gb| {
                    let c = gb.len();
                    for (i, d) in dy.iter().enumerate() {
                        gb[i % c] += d;
                    }
                });
            }
            Op::Scale(a, c) => {
                with_grad!(*a, |ga| {
                    ga.iter_mut().zip(dy).for_each(|(g, d)| *g += c * d);
                });
            }
            Op::ScaleBy(a, s) => {
                let c = val(*s)[0];
                with_grad!(*a, |ga| {
                    ga.iter_mut().zip(dy).for_each(|(g, d)| *g += c * d);
                });
                with_grad!(*s, |gs| {
                    gs[0] += dy.iter().zip(val(*a)).map(|(d, x)| d * x).sum::<f64>();
                });
            }
            Op::Exp(a) => {
                with_grad!(*a, |ga| {
                    for ((g, d), y) in ga.iter_mut().zip(dy).zip(&node.data) {
                        *g += d * y;
                    }
                });
            }
            Op::Log(a) => {
                with_grad!(*a, |ga| {
                    for ((g, d), x) in ga.iter_mut().zip(dy).zip(val(*a)) {
                        *g += d / x;
                    }
                });
            }
            Op::Softplus(a) => {
                with_grad!(*a, |ga| {
                    for ((g, d), x) in ga.iter_mut().zip(dy).zip(val(*a)) {
                        *g += d * sigmoid(*x);
                    }
                });
            }
            Op::Gelu(a) => {
                with_grad!(*a, |ga| {
                    for ((g, d), x) in ga.iter_mut().zip(dy).zip(val(*a)) {
                        *g += d * gelu_grad(*x);
                    }
                });
            }
            Op::Sum(a) => {
                with_grad!(*a, |ga| {
                    ga.iter_mut().for_each(|g| *g += dy[0]);
                });
            }
            Op::Mean(a) => {
                with_grad!(*a, |ga| {
                    let s = dy[0] / ga.len() as f64;
                    ga.iter_mut().for_each(|g| *g += s);
                });
            }
            Op::Transpose(a) => {
                let (r, c) = (nodes[a.0].shape[0], nodes[a.0].shape[1]);
                with_grad!(*a, |ga| {
                    for i in 0..r {
                        for j in 0..c {
                            ga[i * c + j] += dy[j * r + i];
                        }
                    }
                });
            }
            Op::Reshape(a) => {
                with_grad!(*a, |ga| {
                    add_into(ga, dy);
                });
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for p in parts {
                    let len = nodes[p.0].data.len();
                    with_grad!(*p, |gp| {
                        add_into(gp, &dy[off..off + len]);
                    });
                    off += len;
                }
            }
            Op::SliceRows { src, start } => {
                let c = nodes[src.0].shape[1];
                with_grad!(*src, |gs| {
                    add_into(&mut gs[start * c..start * c + dy.len()], dy);
                });
            }
            Op::Gather { table, ids } => {
                let c = nodes[table.0].shape[1];
                with_grad!(*table, |gt| {
                    for (i, &id) in ids.iter().enumerate() {
                        add_into(&mut gt[id * c..(id + 1) * c], &dy[i * c..(i + 1) * c]);
                    }
                });
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let c = nodes[gamma.0].data.len();
                let gam = val(*gamma);
                with_grad!(*gamma, |gg| {
                    for (i, d) in dy.iter().enumerate() {
                        gg[i % c] += d * xhat[i];
                    }
                });
                with_grad!(*beta, |gb| {
                    for (i, d) in dy.iter().enumerate() {
                        gb[i % c] += d;
                    }
                });
                with_grad!(*x, |gx| {
                    for (r, rs) in rstd.iter().enumerate() {
                        let row = r * c..(r + 1) * c;
                        let dyr = &dy[row.clone()];
                        let xh = &xhat[row.clone()];
                        let mut mean_dxhat = 0.0;
                        let mut mean_dxhat_xhat = 0.0;
                        for j in 0..c {
                            let dxh = dyr[j] * gam[j];
                            mean_dxhat += dxh;
                            mean_dxhat_xhat += dxh * xh[j];
                        }
                        mean_dxhat /= c as f64;
                        mean_dxhat_xhat /= c as f64;
                        let gr = &mut gx[row];
                        for j in 0..c {
                            let dxh = dyr[j] * gam[j];
                            gr[j] += rs * (dxh - mean_dxhat - xh[j] * mean_dxhat_xhat);
                        }
                    }
                });
            }
            Op::Attention {
                q,
                k,
                v,
                heads,
                probs,
            } => {
                let dims = AttentionDims {
                    n: nodes[q.0].shape[0],
                    m: nodes[k.0].shape[0],
                    d: nodes[q.0].shape[1],
                    heads: *heads,
                };
                // q, k and v may be the same node.
                let want = |v: Var| nodes[v.0].requires_grad;
                let mut dq = want(*q).then(|| vec![0.0; nodes[q.0].data.len()]);
                let mut dk = want(*k).then(|| vec![0.0; nodes[k.0].data.len()]);
                let mut dv = want(*v).then(|| vec![0.0; nodes[v.0].data.len()]);
                kernels::attention_backward(
                    dy,
                    val(*q),
                    val(*k),
                    val(*v),
                    probs,
                    &dims,
                    AttentionGrads {
                        dq: dq.as_deref_mut(),
                        dk: dk.as_deref_mut(),
                        dv: dv.as_deref_mut(),
                    },
                );
                for (var, g) in [(*q, dq), (*k, dk), (*v, dv)] {
                    if let Some(g) = g {
                        with_grad!(var, |acc| {
                            add_into(acc, &g);
                        });
                    }
                }
            }
            Op::L2Normalize { x, norms } => {
                let c = nodes[x.0].shape.last().copied().unwrap_or(1);
                let y = &node.data;
                with_grad!(*x, |gx| {
                    for (r, norm) in norms.iter().enumerate() {
                        let row = r * c..(r + 1) * c;
                        let yr = &y[row.clone()];
                        let dyr = &dy[row.clone()];
                        let proj: f64 = yr.iter().zip(dyr).map(|(a, b)| a * b).sum();
                        for (j, g) in gx[row].iter_mut().enumerate() {
                            *g += (dyr[j] - yr[j] * proj) / norm;
                        }
                    }
                });
            }
            Op::GroupMaxRows { src, argmax } => {
                let c = nodes[src.0].shape[1];
                with_grad!(*src, |gs| {
                    for (i, &row) in argmax.iter().enumerate() {
                        gs[row * c + i % c] += dy[i];
                    }
                });
            }
            Op::LogSoftmaxRows(x) => {
                let c = *node.shape.last().unwrap();
                let y = &node.data;
                with_grad!(*x, |gx| {
                    for r in 0..y.len() / c {
                        let row = r * c..(r + 1) * c;
                        let total: f64 = dy[row.clone()].iter().sum();
                        for j in row {
                            gx[j] += dy[j] - y[j].exp() * total;
                        }
                    }
                });
            }
        }
    }
}

/// Zero-initialised gradient buffer for `v`, or `None` if it is not differentiated.
fn grad_slot<'a>(nodes: &[Node], grads: &'a mut [Option<Vec<f64>>], v: Var) -> Option<&'a mut Vec<f64>> {
    if !nodes[v.0].requires_grad {
        return None;
    }
    Some(grads[v.0].get_or_insert_with(|| vec![0.0; nodes[v.0].data.len()]))
}

fn add_into(acc: &mut [f64], x: &[f64]) {
    acc.iter_mut().zip(x).for_each(|(a, b)| *a += b);
}

fn parents(op: &Op) -> Vec<Var> {
    match op {
        Op::Leaf | Op::Constant => vec![],
        Op::MatMul(a, b) | Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => vec![*a, *b],
        Op::AddRow(a, b) | Op::ScaleBy(a, b) => vec![*a, *b],
        Op::Scale(a, _)
        | Op::Exp(a)
        | Op::Log(a)
        | Op::Softplus(a)
        | Op::Gelu(a)
        | Op::Sum(a)
        | Op::Mean(a)
        | Op::Transpose(a)
        | Op::Reshape(a)
        | Op::LogSoftmaxRows(a) => vec![*a],
        Op::ConcatRows(parts) => parts.clone(),
        Op::SliceRows { src, .. } | Op::GroupMaxRows { src, .. } => vec![*src],
        Op::Gather { table, .. } => vec![*table],
        Op::LayerNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
        Op::Attention { q, k, v, .. } => vec![*q, *k, *v],
        Op::L2Normalize { x, .. } => vec![*x],
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + 0.044715 * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}
