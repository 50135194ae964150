//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] borrows a [`ParamStore`] and records every forward primitive as
//! a node. Parameters occupy the first node ids without being copied. Calling
//! [`Graph::backward`] on a scalar node walks the tape in reverse and leaves a
//! gradient on every reachable leaf that requires one.

use crate::error::{KagsError, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{Float, Tensor};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BnMode {
    Train,
    Eval,
}

/// Batch statistics observed by a training-mode BatchNorm, to be folded into
/// the running buffers once the step is done.
#[derive(Clone, Debug)]
pub struct BnUpdate<T> {
    pub mean_id: ParamId,
    pub var_id: ParamId,
    pub batch_mean: Vec<T>,
    pub batch_var_unbiased: Vec<T>,
}

enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Relu(Var),
    Sigmoid(Var),
    Tanh(Var),
    SoftmaxRows(Var),
    Transpose(Var),
    Reshape(Var),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceCols(Var, usize),
    SliceRows(Var, usize),
    Sum(Var),
    SumRows(Var),
    SumCols(Var),
    GatherRows(Var, Vec<usize>),
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
        batch_stats: bool,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        mask: Vec<bool>,
        probs: Vec<T>,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

pub struct Graph<'p, T: Float> {
    params: &'p ParamStore<T>,
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Tensor<T>>>,
    backward_done: bool,
    bn_updates: Vec<BnUpdate<T>>,
}

fn add_into<T: Float>(slot: &mut Option<Tensor<T>>, g: Tensor<T>) {
    match slot {
        Some(acc) => acc
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .for_each(|(a, &b)| *a += b),
        None => *slot = Some(g),
    }
}

impl<'p, T: Float> Graph<'p, T> {
    pub fn new(params: &'p ParamStore<T>) -> Self {
        Graph {
            params,
            nodes: Vec::new(),
            grads: Vec::new(),
            backward_done: false,
            bn_updates: Vec::new(),
        }
    }

    pub fn params(&self) -> &'p ParamStore<T> {
        self.params
    }

    fn n_params(&self) -> usize {
        self.params.len()
    }

    pub fn param(&self, id: ParamId) -> Var {
        Var(id.index())
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        let np = self.n_params();
        if v.0 < np {
            self.params.get(ParamId(v.0))
        } else {
            &self.nodes[v.0 - np].value
        }
    }

    /// Largest absolute value held by any node recorded so far.
    pub fn max_abs_value(&self) -> T {
        self.nodes
            .iter()
            .flat_map(|n| n.value.data())
            .fold(T::zero(), |m, &x| m.max(x.abs()))
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.value(v).shape()
    }

    fn requires_grad(&self, v: Var) -> bool {
        let np = self.n_params();
        if v.0 < np {
            self.params.entry(ParamId(v.0)).trainable
        } else {
            self.nodes[v.0 - np].requires_grad
        }
    }

    fn push(&mut self, name: &'static str, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Result<Var> {
        if !value.is_finite() {
            return Err(KagsError::NonFinite { op: name });
        }
        let requires_grad = inputs.iter().any(|&v| self.requires_grad(v));
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.n_params() + self.nodes.len() - 1))
    }

    /// A differentiable leaf (gradient checks, inputs under test).
    pub fn input(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: true,
        });
        Var(self.n_params() + self.nodes.len() - 1)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: false,
        });
        Var(self.n_params() + self.nodes.len() - 1)
    }

    pub fn bn_updates(&self) -> &[BnUpdate<T>] {
        &self.bn_updates
    }

    pub fn take_bn_updates(&mut self) -> Vec<BnUpdate<T>> {
        std::mem::take(&mut self.bn_updates)
    }

    // ── forward primitives ───────────────────────────────────────────

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        self.push("matmul", out, Op::MatMul(a, b), &[a, b])
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(KagsError::dim(
                op,
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        Ok(())
    }

    fn zip_map(&self, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Tensor<T> {
        let (va, vb) = (self.value(a), self.value(b));
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(va.shape().to_vec(), data).expect("same shape")
    }

    fn map(&self, a: Var, f: impl Fn(T) -> T) -> Tensor<T> {
        let va = self.value(a);
        Tensor::new(va.shape().to_vec(), va.data().iter().map(|&x| f(x)).collect())
            .expect("same shape")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out = self.zip_map(a, b, |x, y| x + y);
        self.push("add", out, Op::Add(a, b), &[a, b])
    }

    /// `a (m×n) + row (1×n)`, broadcasting the row.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (m, n) = self.value(a).dims2("add_row")?;
        let (r, n2) = self.value(row).dims2("add_row")?;
        if r != 1 || n != n2 {
            return Err(KagsError::dim(
                "add_row",
                format!("{:?} + {:?}", self.shape(a), self.shape(row)),
            ));
        }
        let rv = self.value(row).data();
        let mut out = self.value(a).clone();
        for i in 0..m {
            for j in 0..n {
                out.data_mut()[i * n + j] += rv[j];
            }
        }
        self.push("add_row", out, Op::AddRow(a, row), &[a, row])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let out = self.zip_map(a, b, |x, y| x * y);
        self.push("mul", out, Op::Mul(a, b), &[a, b])
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let c = T::of(c);
        let out = self.map(a, |x| x * c);
        self.push("scale", out, Op::Scale(a, c), &[a])
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let out = self.map(a, |x| if x > T::zero() { x } else { T::zero() });
        self.push("relu", out, Op::Relu(a), &[a])
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        let out = self.map(a, sigmoid);
        self.push("sigmoid", out, Op::Sigmoid(a), &[a])
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        let out = self.map(a, |x| x.tanh());
        self.push("tanh", out, Op::Tanh(a), &[a])
    }

    /// Row-wise softmax, stabilised by subtracting each row's maximum.
    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let out = softmax_rows(self.value(a))?;
        self.push("softmax_rows", out, Op::SoftmaxRows(a), &[a])
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        self.value(a).dims2("transpose")?;
        let out = self.value(a).transpose2();
        self.push("transpose", out, Op::Transpose(a), &[a])
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self
            .value(a)
            .reshape(shape)
            .map_err(|_| KagsError::dim("reshape", format!("{:?} -> {shape:?}", self.shape(a))))?;
        self.push("reshape", out, Op::Reshape(a), &[a])
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(KagsError::dim("concat_cols", "no inputs"));
        }
        let m = self.value(parts[0]).dims2("concat_cols")?.0;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = self.value(p).dims2("concat_cols")?;
            if r != m {
                return Err(KagsError::dim(
                    "concat_cols",
                    format!("row counts {m} and {r} differ"),
                ));
            }
            widths.push(c);
        }
        let n: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(m * n);
        for i in 0..m {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(i));
            }
        }
        let out = Tensor::new(vec![m, n], data)?;
        self.push("concat_cols", out, Op::ConcatCols(parts.to_vec()), parts)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(KagsError::dim("concat_rows", "no inputs"));
        }
        let n = self.value(parts[0]).dims2("concat_rows")?.1;
        let mut data = Vec::new();
        let mut m = 0;
        for &p in parts {
            let (r, c) = self.value(p).dims2("concat_rows")?;
            if c != n {
                return Err(KagsError::dim(
                    "concat_rows",
                    format!("column counts {n} and {c} differ"),
                ));
            }
            m += r;
            data.extend_from_slice(self.value(p).data());
        }
        let out = Tensor::new(vec![m, n], data)?;
        self.push("concat_rows", out, Op::ConcatRows(parts.to_vec()), parts)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, width: usize) -> Result<Var> {
        let (m, n) = self.value(a).dims2("slice_cols")?;
        if width == 0 || start + width > n {
            return Err(KagsError::dim(
                "slice_cols",
                format!("columns {start}..{} of {n}", start + width),
            ));
        }
        let src = self.value(a);
        let mut data = Vec::with_capacity(m * width);
        for i in 0..m {
            data.extend_from_slice(&src.row(i)[start..start + width]);
        }
        let out = Tensor::new(vec![m, width], data)?;
        self.push("slice_cols", out, Op::SliceCols(a, start), &[a])
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, count: usize) -> Result<Var> {
        let (m, n) = self.value(a).dims2("slice_rows")?;
        if count == 0 || start + count > m {
            return Err(KagsError::dim(
                "slice_rows",
                format!("rows {start}..{} of {m}", start + count),
            ));
        }
        let data = self.value(a).data()[start * n..(start + count) * n].to_vec();
        let out = Tensor::new(vec![count, n], data)?;
        self.push("slice_rows", out, Op::SliceRows(a, start), &[a])
    }

    /// Sum of all elements, as a scalar of shape `[1]`.
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let out = Tensor::scalar(self.value(a).sum());
        self.push("sum", out, Op::Sum(a), &[a])
    }

    /// `m×n → m×1`.
    pub fn sum_rows(&mut self, a: Var) -> Result<Var> {
        let (m, n) = self.value(a).dims2("sum_rows")?;
        let v = self.value(a);
        let data = (0..m).map(|i| v.row(i).iter().copied().sum()).collect();
        let out = Tensor::new(vec![m, 1], data)?;
        let _ = n;
        self.push("sum_rows", out, Op::SumRows(a), &[a])
    }

    /// `m×n → 1×n`.
    pub fn sum_cols(&mut self, a: Var) -> Result<Var> {
        let (m, n) = self.value(a).dims2("sum_cols")?;
        let v = self.value(a);
        let mut data = vec![T::zero(); n];
        for i in 0..m {
            for (d, &x) in data.iter_mut().zip(v.row(i)) {
                *d += x;
            }
        }
        let out = Tensor::new(vec![1, n], data)?;
        self.push("sum_cols", out, Op::SumCols(a), &[a])
    }

    /// Row lookup (embedding tables).
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (rows, n) = self.value(table).dims2("gather_rows")?;
        if ids.is_empty() {
            return Err(KagsError::dim("gather_rows", "empty index list"));
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= rows) {
            return Err(KagsError::dim(
                "gather_rows",
                format!("index {bad} out of range for {rows} rows"),
            ));
        }
        let t = self.value(table);
        let mut data = Vec::with_capacity(ids.len() * n);
        for &i in ids {
            data.extend_from_slice(t.row(i));
        }
        let out = Tensor::new(vec![ids.len(), n], data)?;
        self.push("gather_rows", out, Op::GatherRows(table, ids.to_vec()), &[table])
    }

    /// BatchNorm over the rows of `x` (one feature per column).
    ///
    /// Uses batch statistics only in training mode with more than one row;
    /// otherwise normalises with the running buffers.
    pub fn batchnorm_rows(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running: (ParamId, ParamId),
        mode: BnMode,
    ) -> Result<Var> {
        let (m, d) = self.value(x).dims2("batchnorm_rows")?;
        for p in [gamma, beta] {
            if self.shape(p) != [1, d] {
                return Err(KagsError::dim(
                    "batchnorm_rows",
                    format!("scale/shift {:?} for width {d}", self.shape(p)),
                ));
            }
        }
        let eps = T::of(BN_EPS);
        let batch_stats = mode == BnMode::Train && m > 1;
        let xv = self.value(x).data();
        let (mean, var): (Vec<T>, Vec<T>) = if batch_stats {
            let mf = T::of(m as f64);
            let mut mean = vec![T::zero(); d];
            for i in 0..m {
                for j in 0..d {
                    mean[j] += xv[i * d + j];
                }
            }
            mean.iter_mut().for_each(|v| *v = *v / mf);
            let mut var = vec![T::zero(); d];
            for i in 0..m {
                for j in 0..d {
                    let c = xv[i * d + j] - mean[j];
                    var[j] += c * c;
                }
            }
            var.iter_mut().for_each(|v| *v = *v / mf);
            (mean, var)
        } else {
            let rm = self.params.get(running.0);
            let rv = self.params.get(running.1);
            if rm.numel() != d || rv.numel() != d {
                return Err(KagsError::dim("batchnorm_rows", "running stats width"));
            }
            (rm.data().to_vec(), rv.data().to_vec())
        };
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut xhat = vec![T::zero(); m * d];
        let mut out = vec![T::zero(); m * d];
        for i in 0..m {
            for j in 0..d {
                let h = (xv[i * d + j] - mean[j]) * inv_std[j];
                xhat[i * d + j] = h;
                out[i * d + j] = g[j] * h + b[j];
            }
        }
        if batch_stats {
            let scale = T::of(m as f64 / (m as f64 - 1.0));
            self.bn_updates.push(BnUpdate {
                mean_id: running.0,
                var_id: running.1,
                batch_mean: mean,
                batch_var_unbiased: var.iter().map(|&v| v * scale).collect(),
            });
        }
        let out = Tensor::new(vec![m, d], out)?;
        self.push(
            "batchnorm_rows",
            out,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            },
            &[x, gamma, beta],
        )
    }

    /// Summed token cross-entropy `−Σ log softmax(logits)[row, target]` over
    /// unmasked rows.
    pub fn cross_entropy_sum(&mut self, logits: Var, targets: &[usize], mask: &[bool]) -> Result<Var> {
        let (m, v) = self.value(logits).dims2("cross_entropy")?;
        if targets.len() != m || mask.len() != m {
            return Err(KagsError::dim(
                "cross_entropy",
                format!("{m} logit rows, {} targets, {} mask entries", targets.len(), mask.len()),
            ));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= v) {
            return Err(KagsError::Contract(format!(
                "target id {bad} outside vocabulary of size {v}"
            )));
        }
        let probs = softmax_rows(self.value(logits))?;
        let mut loss = T::zero();
        let lv = self.value(logits);
        for i in 0..m {
            if !mask[i] {
                continue;
            }
            let row = lv.row(i);
            let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = mx + row.iter().map(|&x| (x - mx).exp()).sum::<T>().ln();
            loss += lse - row[targets[i]];
        }
        let out = Tensor::scalar(loss);
        self.push(
            "cross_entropy",
            out,
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                mask: mask.to_vec(),
                probs: probs.into_data(),
            },
            &[logits],
        )
    }

    // ── reverse pass ─────────────────────────────────────────────────

    pub fn backward(&mut self, root: Var) -> Result<()> {
        if self.backward_done {
            return Err(KagsError::Contract(
                "backward called twice without zero_grad".into(),
            ));
        }
        if self.value(root).numel() != 1 {
            return Err(KagsError::Contract(format!(
                "backward root must be a scalar, got shape {:?}",
                self.shape(root)
            )));
        }
        let total = self.n_params() + self.nodes.len();
        self.grads = (0..total).map(|_| None).collect();
        self.backward_done = true;
        if !self.requires_grad(root) {
            return Ok(());
        }
        let shape = self.shape(root).to_vec();
        self.grads[root.0] = Some(Tensor::full(&shape, T::one()));
        let np = self.n_params();
        for id in (np..=root.0).rev() {
            let node = &self.nodes[id - np];
            if matches!(node.op, Op::Leaf) || !node.requires_grad {
                continue;
            }
            let Some(g) = self.grads[id].take() else {
                continue;
            };
            for (input, gi) in self.input_grads(id - np, &g)? {
                if self.requires_grad(input) {
                    add_into(&mut self.grads[input.0], gi);
                }
            }
        }
        Ok(())
    }

    /// Clears gradients so the graph may be differentiated again.
    pub fn zero_grad(&mut self) {
        self.grads.clear();
        self.backward_done = false;
    }

    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient of every parameter, indexed by [`ParamId`]; `None` when unreached.
    pub fn take_param_grads(&mut self) -> Vec<Option<Tensor<T>>> {
        let np = self.n_params();
        self.grads.iter_mut().take(np).map(|g| g.take()).collect()
    }

    fn input_grads(&self, idx: usize, g: &Tensor<T>) -> Result<Vec<(Var, Tensor<T>)>> {
        let node = &self.nodes[idx];
        let y = &node.value;
        let shape_of = |v: Var| self.value(v).shape().to_vec();
        let make = |shape: Vec<usize>, data: Vec<T>| Tensor::new(shape, data).expect("grad shape");
        let gd = g.data();
        Ok(match &node.op {
            Op::Leaf => Vec::new(),
            Op::MatMul(a, b) => {
                let va = self.value(*a);
                let vb = self.value(*b);
                let mut out = Vec::with_capacity(2);
                if self.requires_grad(*a) {
                    out.push((*a, g.matmul(&vb.transpose2())?));
                }
                if self.requires_grad(*b) {
                    out.push((*b, va.transpose2().matmul(g)?));
                }
                out
            }
            Op::Add(a, b) => vec![(*a, g.clone()), (*b, g.clone())],
            Op::AddRow(a, row) => {
                let (m, n) = g.dims2("add_row")?;
                let mut gr = vec![T::zero(); n];
                for i in 0..m {
                    for j in 0..n {
                        gr[j] += gd[i * n + j];
                    }
                }
                vec![(*a, g.clone()), (*row, make(vec![1, n], gr))]
            }
            Op::Mul(a, b) => {
                let va = self.value(*a).data();
                let vb = self.value(*b).data();
                let ga = gd.iter().zip(vb).map(|(&g, &y)| g * y).collect();
                let gb = gd.iter().zip(va).map(|(&g, &x)| g * x).collect();
                vec![(*a, make(shape_of(*a), ga)), (*b, make(shape_of(*b), gb))]
            }
            Op::Scale(a, c) => vec![(*a, make(shape_of(*a), gd.iter().map(|&g| g * *c).collect()))],
            Op::Relu(a) => {
                let yd = y.data();
                let ga = gd
                    .iter()
                    .zip(yd)
                    .map(|(&g, &y)| if y > T::zero() { g } else { T::zero() })
                    .collect();
                vec![(*a, make(shape_of(*a), ga))]
            }
            Op::Sigmoid(a) => {
                let ga = gd
                    .iter()
                    .zip(y.data())
                    .map(|(&g, &s)| g * s * (T::one() - s))
                    .collect();
                vec![(*a, make(shape_of(*a), ga))]
            }
            Op::Tanh(a) => {
                let ga = gd
                    .iter()
                    .zip(y.data())
                    .map(|(&g, &t)| g * (T::one() - t * t))
                    .collect();
                vec![(*a, make(shape_of(*a), ga))]
            }
            Op::SoftmaxRows(a) => {
                let (m, n) = y.dims2("softmax_rows")?;
                let yd = y.data();
                let mut ga = vec![T::zero(); m * n];
                for i in 0..m {
                    let r = i * n..(i + 1) * n;
                    let dot: T = gd[r.clone()].iter().zip(&yd[r.clone()]).map(|(&g, &y)| g * y).sum();
                    for j in r {
                        ga[j] = yd[j] * (gd[j] - dot);
                    }
                }
                vec![(*a, make(vec![m, n], ga))]
            }
            Op::Transpose(a) => vec![(*a, g.transpose2())],
            Op::Reshape(a) => vec![(*a, make(shape_of(*a), gd.to_vec()))],
            Op::ConcatCols(parts) => {
                let (m, n) = g.dims2("concat_cols")?;
                let mut out = Vec::with_capacity(parts.len());
                let mut off = 0;
                for &p in parts {
                    let w = self.value(p).shape()[1];
                    let mut d = Vec::with_capacity(m * w);
                    for i in 0..m {
                        d.extend_from_slice(&gd[i * n + off..i * n + off + w]);
                    }
                    out.push((p, make(vec![m, w], d)));
                    off += w;
                }
                out
            }
            Op::ConcatRows(parts) => {
                let mut out = Vec::with_capacity(parts.len());
                let mut off = 0;
                for &p in parts {
                    let len = self.value(p).numel();
                    out.push((p, make(shape_of(p), gd[off..off + len].to_vec())));
                    off += len;
                }
                out
            }
            Op::SliceCols(a, start) => {
                let (m, n) = self.value(*a).dims2("slice_cols")?;
                let w = y.shape()[1];
                let mut ga = vec![T::zero(); m * n];
                for i in 0..m {
                    ga[i * n + start..i * n + start + w].copy_from_slice(&gd[i * w..(i + 1) * w]);
                }
                vec![(*a, make(vec![m, n], ga))]
            }
            Op::SliceRows(a, start) => {
                let (m, n) = self.value(*a).dims2("slice_rows")?;
                let mut ga = vec![T::zero(); m * n];
                ga[start * n..start * n + gd.len()].copy_from_slice(gd);
                vec![(*a, make(vec![m, n], ga))]
            }
            Op::Sum(a) => {
                let s = shape_of(*a);
                let n = self.value(*a).numel();
                vec![(*a, make(s, vec![gd[0]; n]))]
            }
            Op::SumRows(a) => {
                let (m, n) = self.value(*a).dims2("sum_rows")?;
                let ga = (0..m * n).map(|k| gd[k / n]).collect();
                vec![(*a, make(vec![m, n], ga))]
            }
            Op::SumCols(a) => {
                let (m, n) = self.value(*a).dims2("sum_cols")?;
                let ga = (0..m * n).map(|k| gd[k % n]).collect();
                vec![(*a, make(vec![m, n], ga))]
            }
            Op::GatherRows(table, ids) => {
                let (rows, n) = self.value(*table).dims2("gather_rows")?;
                let mut gt = vec![T::zero(); rows * n];
                for (k, &i) in ids.iter().enumerate() {
                    for j in 0..n {
                        gt[i * n + j] += gd[k * n + j];
                    }
                }
                vec![(*table, make(vec![rows, n], gt))]
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            } => {
                let (m, d) = y.dims2("batchnorm_rows")?;
                let gam = self.value(*gamma).data();
                let mut dgamma = vec![T::zero(); d];
                let mut dbeta = vec![T::zero(); d];
                for i in 0..m {
                    for j in 0..d {
                        dgamma[j] += gd[i * d + j] * xhat[i * d + j];
                        dbeta[j] += gd[i * d + j];
                    }
                }
                let mut dx = vec![T::zero(); m * d];
                if *batch_stats {
                    let mf = T::of(m as f64);
                    for j in 0..d {
                        // dxhat = g * gamma; dx = inv_std/m (m dxhat − Σdxhat − xhat Σ dxhat·xhat)
                        let mut s1 = T::zero();
                        let mut s2 = T::zero();
                        for i in 0..m {
                            let dh = gd[i * d + j] * gam[j];
                            s1 += dh;
                            s2 += dh * xhat[i * d + j];
                        }
                        for i in 0..m {
                            let dh = gd[i * d + j] * gam[j];
                            dx[i * d + j] = inv_std[j] / mf * (mf * dh - s1 - xhat[i * d + j] * s2);
                        }
                    }
                } else {
                    for i in 0..m {
                        for j in 0..d {
                            dx[i * d + j] = gd[i * d + j] * gam[j] * inv_std[j];
                        }
                    }
                }
                vec![
                    (*x, make(vec![m, d], dx)),
                    (*gamma, make(vec![1, d], dgamma)),
                    (*beta, make(vec![1, d], dbeta)),
                ]
            }
            Op::CrossEntropy {
                logits,
                targets,
                mask,
                probs,
            } => {
                let (m, v) = self.value(*logits).dims2("cross_entropy")?;
                let mut gl = vec![T::zero(); m * v];
                for i in 0..m {
                    if !mask[i] {
                        continue;
                    }
                    for j in 0..v {
                        gl[i * v + j] = probs[i * v + j] * gd[0];
                    }
                    gl[i * v + targets[i]] -= gd[0];
                }
                vec![(*logits, make(vec![m, v], gl))]
            }
        })
    }
}

pub fn sigmoid<T: Float>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// Row-wise softmax on a plain tensor.
pub fn softmax_rows<T: Float>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let (m, n) = x.dims2("softmax_rows")?;
    let mut out = Vec::with_capacity(m * n);
    for i in 0..m {
        let row = x.row(i);
        let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
        let start = out.len();
        out.extend(row.iter().map(|&v| (v - mx).exp()));
        let s: T = out[start..].iter().copied().sum();
        out[start..].iter_mut().for_each(|v| *v = *v / s);
    }
    Tensor::new(vec![m, n], out)
}
