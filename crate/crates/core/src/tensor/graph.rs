use std::borrow::Cow;
use std::collections::BTreeMap;

use rand::Rng;

use super::kernels::{gemm_nn, gemm_nt, gemm_tn};
use super::{rows_cols, Result, Tensor, TensorError};

/// Handle to a node recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Transpose(Var),
    Reshape(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    SoftmaxRows(Var),
    LayerNormRows(Var),
    Dropout(Var, Vec<f64>),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    GatherRows(Var, Vec<usize>),
    Sum(Var),
    SumSquaredError(Var, Var),
    MeanRowGroups(Var, usize),
    SoftmaxCrossEntropy(Var, Vec<usize>, Vec<f64>),
    Im2Col { x: Var, seq: usize, kernel: usize },
}

#[derive(Debug)]
struct Node<'a> {
    dims: Vec<usize>,
    value: Cow<'a, [f64]>,
    op: Op,
    requires_grad: bool,
    slot: Option<usize>,
}

/// Layer-norm epsilon inside the square root.
pub const LAYERNORM_EPS: f64 = 1e-5;

/// Per-slot gradients produced by [`Graph::backward`].
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Gradients {
    by_slot: BTreeMap<usize, Vec<f64>>,
}

impl Gradients {
    pub fn get(&self, slot: usize) -> Option<&[f64]> {
        self.by_slot.get(&slot).map(Vec::as_slice)
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, &[f64])> {
        self.by_slot.iter().map(|(k, v)| (*k, v.as_slice()))
    }

    pub fn is_empty(&self) -> bool {
        self.by_slot.is_empty()
    }

    /// `self += scale · other`, slot by slot.
    pub fn add_scaled(&mut self, other: &Gradients, scale: f64) {
        for (slot, g) in &other.by_slot {
            let acc = self.by_slot.entry(*slot).or_insert_with(|| vec![0.0; g.len()]);
            for (a, b) in acc.iter_mut().zip(g) {
                *a += scale * b;
            }
        }
    }

    pub fn scale(&mut self, s: f64) {
        for g in self.by_slot.values_mut() {
            g.iter_mut().for_each(|x| *x *= s);
        }
    }

    /// Adds each slot's gradient into `tensors[slot].grad`.
    pub fn accumulate_into(&self, tensors: &mut [Tensor]) -> Result<()> {
        for (slot, g) in &self.by_slot {
            let t = tensors
                .get_mut(*slot)
                .ok_or_else(|| TensorError::Contract(format!("gradient slot {slot} has no tensor")))?;
            t.accumulate_grad(g)?;
        }
        Ok(())
    }

    /// Same as [`Gradients::accumulate_into`] with slots shifted by `offset`.
    pub fn accumulate_into_offset(&self, tensors: &mut [Tensor], offset: usize) -> Result<()> {
        for (slot, g) in self.by_slot.range(offset..offset + tensors.len()) {
            tensors[slot - offset].accumulate_grad(g)?;
        }
        Ok(())
    }
}

/// Reverse-mode tape. Parameters are borrowed, intermediates are owned.
#[derive(Debug, Default)]
pub struct Graph<'a> {
    nodes: Vec<Node<'a>>,
}

impl<'a> Graph<'a> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, dims: Vec<usize>, value: Vec<f64>, op: Op, requires_grad: bool) -> Var {
        debug_assert_eq!(dims.iter().product::<usize>(), value.len());
        self.nodes.push(Node {
            dims,
            value: Cow::Owned(value),
            op,
            requires_grad,
            slot: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// Non-differentiable input.
    pub fn constant(&mut self, dims: Vec<usize>, data: Vec<f64>) -> Result<Var> {
        let t = Tensor::new(dims, data)?;
        let (dims, data) = (t.dims, t.data);
        Ok(self.push(dims, data, Op::Leaf, false))
    }

    /// Registers a borrowed tensor. Gradients flow to `slot` only when
    /// `tensor.requires_grad` is set.
    pub fn param(&mut self, tensor: &'a Tensor, slot: usize) -> Var {
        self.nodes.push(Node {
            dims: tensor.dims.clone(),
            value: Cow::Borrowed(&tensor.data),
            op: Op::Leaf,
            requires_grad: tensor.requires_grad,
            slot: tensor.requires_grad.then_some(slot),
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn dims(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].dims
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[0]
    }

    pub fn to_tensor(&self, v: Var) -> Tensor {
        let n = &self.nodes[v.0];
        Tensor::new(n.dims.clone(), n.value.to_vec()).unwrap()
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn mat(&self, v: Var, op: &'static str) -> Result<(usize, usize)> {
        rows_cols(self.dims(v)).ok_or_else(|| TensorError::Shape {
            op,
            lhs: self.dims(v).to_vec(),
            rhs: vec![],
        })
    }

    fn shape_err(&self, op: &'static str, a: Var, b: Var) -> TensorError {
        TensorError::Shape {
            op,
            lhs: self.dims(a).to_vec(),
            rhs: self.dims(b).to_vec(),
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (r, k) = self.mat(a, "matmul")?;
        let (k2, n) = self.mat(b, "matmul")?;
        if k != k2 {
            return Err(self.shape_err("matmul", a, b));
        }
        let mut out = vec![0.0; r * n];
        gemm_nn(self.value(a), self.value(b), &mut out, r, k, n);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(vec![r, n], out, Op::MatMul(a, b), rg))
    }

    /// `a · bᵀ`
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        let (r, k) = self.mat(a, "matmul_t")?;
        let (n, k2) = self.mat(b, "matmul_t")?;
        if k != k2 {
            return Err(self.shape_err("matmul_t", a, b));
        }
        let mut out = vec![0.0; r * n];
        gemm_nt(self.value(a), self.value(b), &mut out, r, k, n);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(vec![r, n], out, Op::MatMulT(a, b), rg))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.mat(a, "transpose")?;
        let x = self.value(a);
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = x[i * c + j];
            }
        }
        let rg = self.rg(a);
        Ok(self.push(vec![c, r], out, Op::Transpose(a), rg))
    }

    pub fn reshape(&mut self, a: Var, dims: Vec<usize>) -> Result<Var> {
        if dims.iter().product::<usize>() != self.value(a).len() {
            return Err(TensorError::Shape {
                op: "reshape",
                lhs: self.dims(a).to_vec(),
                rhs: dims,
            });
        }
        let out = self.value(a).to_vec();
        let rg = self.rg(a);
        Ok(self.push(dims, out, Op::Reshape(a), rg))
    }

    fn zip_with(&mut self, a: Var, b: Var, name: &'static str, op: Op, f: fn(f64, f64) -> f64) -> Result<Var> {
        if self.dims(a) != self.dims(b) {
            return Err(self.shape_err(name, a, b));
        }
        let out = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        let rg = self.rg(a) || self.rg(b);
        let dims = self.dims(a).to_vec();
        Ok(self.push(dims, out, op, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, "add", Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, "sub", Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, "mul", Op::Mul(a, b), |x, y| x * y)
    }

    fn row_broadcast(&mut self, x: Var, row: Var, name: &'static str) -> Result<(usize, usize)> {
        let (r, c) = self.mat(x, name)?;
        if self.value(row).len() != c {
            return Err(self.shape_err(name, x, row));
        }
        Ok((r, c))
    }

    /// Adds a length-`c` vector to every row.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (r, c) = self.row_broadcast(x, bias, "add_row")?;
        let b = self.value(bias);
        let out = self
            .value(x)
            .chunks(c)
            .flat_map(|row| row.iter().zip(b).map(|(v, bb)| v + bb))
            .collect();
        let rg = self.rg(x) || self.rg(bias);
        Ok(self.push(vec![r, c], out, Op::AddRow(x, bias), rg))
    }

    /// Multiplies every row elementwise by a length-`c` vector.
    pub fn mul_row(&mut self, x: Var, gain: Var) -> Result<Var> {
        let (r, c) = self.row_broadcast(x, gain, "mul_row")?;
        let g = self.value(gain);
        let out = self
            .value(x)
            .chunks(c)
            .flat_map(|row| row.iter().zip(g).map(|(v, gg)| v * gg))
            .collect();
        let rg = self.rg(x) || self.rg(gain);
        Ok(self.push(vec![r, c], out, Op::MulRow(x, gain), rg))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let out = self.value(x).iter().map(|v| v * s).collect();
        let (dims, rg) = (self.dims(x).to_vec(), self.rg(x));
        self.push(dims, out, Op::Scale(x, s), rg)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect();
        let (dims, rg) = (self.dims(x).to_vec(), self.rg(x));
        self.push(dims, out, Op::Relu(x), rg)
    }

    /// Row-wise softmax with max subtraction.
    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let (r, c) = self.mat(x, "softmax_rows")?;
        let mut out = self.value(x).to_vec();
        for row in out.chunks_mut(c) {
            softmax_in_place(row);
        }
        let rg = self.rg(x);
        Ok(self.push(vec![r, c], out, Op::SoftmaxRows(x), rg))
    }

    /// Row-wise `(x − μ)/sqrt(var + ε)` with population variance and no
    /// affine parameters.
    pub fn layernorm_rows(&mut self, x: Var) -> Result<Var> {
        let (r, c) = self.mat(x, "layernorm_rows")?;
        if c < 2 {
            return Err(TensorError::Contract("layernorm needs at least two columns".into()));
        }
        let mut out = self.value(x).to_vec();
        for row in out.chunks_mut(c) {
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let inv = 1.0 / (var + LAYERNORM_EPS).sqrt();
            row.iter_mut().for_each(|v| *v = (*v - mean) * inv);
        }
        let rg = self.rg(x);
        Ok(self.push(vec![r, c], out, Op::LayerNormRows(x), rg))
    }

    /// Inverted dropout. `rng = None` is inference mode and returns `x`.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, rate: f64, rng: Option<&mut R>) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(TensorError::Contract(format!("dropout rate {rate} outside [0,1)")));
        }
        let Some(rng) = rng else { return Ok(x) };
        if rate == 0.0 {
            return Ok(x);
        }
        let keep = 1.0 / (1.0 - rate);
        let mask: Vec<f64> = (0..self.value(x).len())
            .map(|_| if rng.random::<f64>() < rate { 0.0 } else { keep })
            .collect();
        let out = self.value(x).iter().zip(&mask).map(|(v, m)| v * m).collect();
        let (dims, rg) = (self.dims(x).to_vec(), self.rg(x));
        Ok(self.push(dims, out, Op::Dropout(x, mask), rg))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| TensorError::Contract("concat of nothing".into()))?;
        let (r, _) = self.mat(first, "concat_cols")?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (pr, pc) = self.mat(p, "concat_cols")?;
            if pr != r {
                return Err(self.shape_err("concat_cols", first, p));
            }
            widths.push(pc);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(r * total);
        for i in 0..r {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p)[i * w..(i + 1) * w]);
            }
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(vec![r, total], out, Op::ConcatCols(parts.to_vec()), rg))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| TensorError::Contract("concat of nothing".into()))?;
        let (_, c) = self.mat(first, "concat_rows")?;
        let mut rows = 0;
        for &p in parts {
            let (pr, pc) = self.mat(p, "concat_rows")?;
            if pc != c {
                return Err(self.shape_err("concat_rows", first, p));
            }
            rows += pr;
        }
        let mut out = Vec::with_capacity(rows * c);
        for &p in parts {
            out.extend_from_slice(self.value(p));
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(vec![rows, c], out, Op::ConcatRows(parts.to_vec()), rg))
    }

    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let (r, c) = self.mat(x, "gather_rows")?;
        if idx.is_empty() {
            return Err(TensorError::Contract("gather of no rows".into()));
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= r) {
            return Err(TensorError::Shape {
                op: "gather_rows",
                lhs: vec![r, c],
                rhs: vec![bad],
            });
        }
        let v = self.value(x);
        let out = idx
            .iter()
            .flat_map(|&i| v[i * c..(i + 1) * c].iter().copied())
            .collect();
        let rg = self.rg(x);
        Ok(self.push(vec![idx.len(), c], out, Op::GatherRows(x, idx.to_vec()), rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).iter().sum();
        let rg = self.rg(x);
        self.push(vec![1], vec![s], Op::Sum(x), rg)
    }

    /// `Σ (a − b)²` as a scalar.
    pub fn sum_squared_error(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.dims(a) != self.dims(b) {
            return Err(self.shape_err("sum_squared_error", a, b));
        }
        let s = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(x, y)| (x - y) * (x - y))
            .sum();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(vec![1], vec![s], Op::SumSquaredError(a, b), rg))
    }

    /// Averages consecutive groups of `group` rows: `(B·group)×C → B×C`.
    pub fn mean_row_groups(&mut self, x: Var, group: usize) -> Result<Var> {
        let (r, c) = self.mat(x, "mean_row_groups")?;
        if group == 0 || r % group != 0 {
            return Err(TensorError::Shape {
                op: "mean_row_groups",
                lhs: vec![r, c],
                rhs: vec![group],
            });
        }
        let b = r / group;
        let v = self.value(x);
        let mut out = vec![0.0; b * c];
        for i in 0..r {
            let o = &mut out[(i / group) * c..(i / group + 1) * c];
            for (acc, &val) in o.iter_mut().zip(&v[i * c..(i + 1) * c]) {
                *acc += val;
            }
        }
        let inv = 1.0 / group as f64;
        out.iter_mut().for_each(|x| *x *= inv);
        let rg = self.rg(x);
        Ok(self.push(vec![b, c], out, Op::MeanRowGroups(x, group), rg))
    }

    /// Mean negative log-likelihood of `labels` under row-softmax of `logits`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (r, c) = self.mat(logits, "softmax_cross_entropy")?;
        if labels.len() != r {
            return Err(TensorError::Shape {
                op: "softmax_cross_entropy",
                lhs: vec![r, c],
                rhs: vec![labels.len()],
            });
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= c) {
            return Err(TensorError::Contract(format!(
                "label {bad} out of range for {c} classes"
            )));
        }
        let mut probs = self.value(logits).to_vec();
        let mut loss = 0.0;
        for (row, &y) in probs.chunks_mut(c).zip(labels) {
            softmax_in_place(row);
            loss -= row[y].max(f64::MIN_POSITIVE).ln();
        }
        loss /= r as f64;
        let rg = self.rg(logits);
        Ok(self.push(
            vec![1],
            vec![loss],
            Op::SoftmaxCrossEntropy(logits, labels.to_vec(), probs),
            rg,
        ))
    }

    /// Unfolds `(B·seq)×C` sequences into `(B·seq)×(kernel·C)` windows with
    /// zero padding of `kernel/2` on each side of every sequence.
    pub fn im2col(&mut self, x: Var, seq: usize, kernel: usize) -> Result<Var> {
        let (r, c) = self.mat(x, "im2col")?;
        if seq == 0 || r % seq != 0 || kernel.is_multiple_of(2) {
            return Err(TensorError::Shape {
                op: "im2col",
                lhs: vec![r, c],
                rhs: vec![seq, kernel],
            });
        }
        let pad = kernel / 2;
        let v = self.value(x);
        let mut out = vec![0.0; r * kernel * c];
        for row in 0..r {
            let (b, t) = (row / seq, row % seq);
            for k in 0..kernel {
                let src = t as isize + k as isize - pad as isize;
                if src < 0 || src >= seq as isize {
                    continue;
                }
                let src_row = b * seq + src as usize;
                let dst = row * kernel * c + k * c;
                out[dst..dst + c].copy_from_slice(&v[src_row * c..(src_row + 1) * c]);
            }
        }
        let rg = self.rg(x);
        Ok(self.push(vec![r, kernel * c], out, Op::Im2Col { x, seq, kernel }, rg))
    }

    /// Gradients of a scalar `loss` with respect to every registered
    /// trainable parameter.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        self.backward_with_seed(loss, 1.0)
    }

    /// Like [`Graph::backward`] with `d loss = seed`.
    pub fn backward_with_seed(&self, loss: Var, seed: f64) -> Result<Gradients> {
        if self.nodes[loss.0].value.len() != 1 {
            return Err(TensorError::Contract(format!(
                "backward needs a scalar loss, got dims {:?}",
                self.nodes[loss.0].dims
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![seed]);
        let mut out = Gradients::default();

        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            if !node.requires_grad {
                continue;
            }
            self.propagate(&node.op, id, &g, &mut grads);
            if let Some(slot) = node.slot {
                match out.by_slot.get_mut(&slot) {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                    None => {
                        out.by_slot.insert(slot, g);
                    }
                }
            }
        }
        Ok(out)
    }

    fn propagate(&self, op: &Op, id: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[id];
        match op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (r, k) = rows_cols(self.dims(*a)).unwrap();
                let n = node.dims[1];
                if self.rg(*a) {
                    gemm_nt(g, self.value(*b), self.acc(grads, *a), r, n, k);
                }
                if self.rg(*b) {
                    gemm_tn(self.value(*a), g, self.acc(grads, *b), r, k, n);
                }
            }
            Op::MatMulT(a, b) => {
                let (r, k) = rows_cols(self.dims(*a)).unwrap();
                let n = node.dims[1];
                if self.rg(*a) {
                    gemm_nn(g, self.value(*b), self.acc(grads, *a), r, n, k);
                }
                if self.rg(*b) {
                    gemm_tn(g, self.value(*a), self.acc(grads, *b), r, n, k);
                }
            }
            Op::Transpose(a) => {
                let (r, c) = rows_cols(self.dims(*a)).unwrap();
                let acc = self.acc(grads, *a);
                for i in 0..r {
                    for j in 0..c {
                        acc[i * c + j] += g[j * r + i];
                    }
                }
            }
            Op::Reshape(a) => add_into(self.acc(grads, *a), g),
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if self.rg(v) {
                        add_into(self.acc(grads, v), g);
                    }
                }
            }
            Op::Sub(a, b) => {
                if self.rg(*a) {
                    add_into(self.acc(grads, *a), g);
                }
                if self.rg(*b) {
                    self.acc(grads, *b).iter_mut().zip(g).for_each(|(x, y)| *x -= y);
                }
            }
            Op::Mul(a, b) => {
                if self.rg(*a) {
                    let bv = self.value(*b);
                    let acc = self.acc(grads, *a);
                    for i in 0..g.len() {
                        acc[i] += g[i] * bv[i];
                    }
                }
                if self.rg(*b) {
                    let av = self.value(*a);
                    let acc = self.acc(grads, *b);
                    for i in 0..g.len() {
                        acc[i] += g[i] * av[i];
                    }
                }
            }
            Op::AddRow(x, bias) => {
                let c = node.dims[1];
                if self.rg(*x) {
                    add_into(self.acc(grads, *x), g);
                }
                if self.rg(*bias) {
                    let acc = self.acc(grads, *bias);
                    for row in g.chunks(c) {
                        add_into(acc, row);
                    }
                }
            }
            Op::MulRow(x, gain) => {
                let c = node.dims[1];
                if self.rg(*x) {
                    let gv = self.value(*gain);
                    let acc = self.acc(grads, *x);
                    for (i, d) in g.iter().enumerate() {
                        acc[i] += d * gv[i % c];
                    }
                }
                if self.rg(*gain) {
                    let xv = self.value(*x);
                    let acc = self.acc(grads, *gain);
                    for (i, d) in g.iter().enumerate() {
                        acc[i % c] += d * xv[i];
                    }
                }
            }
            Op::Scale(x, s) => {
                let acc = self.acc(grads, *x);
                acc.iter_mut().zip(g).for_each(|(a, d)| *a += s * d);
            }
            Op::Relu(x) => {
                let xv = self.value(*x);
                let acc = self.acc(grads, *x);
                for i in 0..g.len() {
                    if xv[i] > 0.0 {
                        acc[i] += g[i];
                    }
                }
            }
            Op::SoftmaxRows(x) => {
                let c = node.dims[1];
                let y = &node.value;
                let acc = self.acc(grads, *x);
                for ((yr, gr), ar) in y.chunks(c).zip(g.chunks(c)).zip(acc.chunks_mut(c)) {
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for j in 0..c {
                        ar[j] += yr[j] * (gr[j] - dot);
                    }
                }
            }
            Op::LayerNormRows(x) => {
                let c = node.dims[1];
                let xv = self.value(*x);
                let y = &node.value;
                let acc = self.acc(grads, *x);
                let cf = c as f64;
                for (((xr, yr), gr), ar) in xv.chunks(c).zip(y.chunks(c)).zip(g.chunks(c)).zip(acc.chunks_mut(c)) {
                    let mean = xr.iter().sum::<f64>() / cf;
                    let var = xr.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cf;
                    let inv = 1.0 / (var + LAYERNORM_EPS).sqrt();
                    let g_mean = gr.iter().sum::<f64>() / cf;
                    let gy_mean = gr.iter().zip(yr).map(|(a, b)| a * b).sum::<f64>() / cf;
                    for j in 0..c {
                        ar[j] += inv * (gr[j] - g_mean - yr[j] * gy_mean);
                    }
                }
            }
            Op::Dropout(x, mask) => {
                let acc = self.acc(grads, *x);
                for i in 0..g.len() {
                    acc[i] += g[i] * mask[i];
                }
            }
            Op::ConcatCols(parts) => {
                let total = node.dims[1];
                let mut offset = 0;
                for &p in parts {
                    let (r, w) = rows_cols(self.dims(p)).unwrap();
                    if self.rg(p) {
                        let acc = self.acc(grads, p);
                        for i in 0..r {
                            add_into(
                                &mut acc[i * w..(i + 1) * w],
                                &g[i * total + offset..i * total + offset + w],
                            );
                        }
                    }
                    offset += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let n = self.value(p).len();
                    if self.rg(p) {
                        add_into(self.acc(grads, p), &g[offset..offset + n]);
                    }
                    offset += n;
                }
            }
            Op::GatherRows(x, idx) => {
                let c = node.dims[1];
                let acc = self.acc(grads, *x);
                for (k, &i) in idx.iter().enumerate() {
                    add_into(&mut acc[i * c..(i + 1) * c], &g[k * c..(k + 1) * c]);
                }
            }
            Op::Sum(x) => {
                let d = g[0];
                self.acc(grads, *x).iter_mut().for_each(|a| *a += d);
            }
            Op::SumSquaredError(a, b) => {
                let d = g[0];
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.rg(*a) {
                    let acc = self.acc(grads, *a);
                    for i in 0..av.len() {
                        acc[i] += 2.0 * d * (av[i] - bv[i]);
                    }
                }
                if self.rg(*b) {
                    let acc = self.acc(grads, *b);
                    for i in 0..av.len() {
                        acc[i] -= 2.0 * d * (av[i] - bv[i]);
                    }
                }
            }
            Op::MeanRowGroups(x, group) => {
                let c = node.dims[1];
                let inv = 1.0 / *group as f64;
                let acc = self.acc(grads, *x);
                for (i, row) in acc.chunks_mut(c).enumerate() {
                    let src = &g[(i / group) * c..(i / group + 1) * c];
                    for (a, d) in row.iter_mut().zip(src) {
                        *a += d * inv;
                    }
                }
            }
            Op::SoftmaxCrossEntropy(logits, labels, probs) => {
                let d = g[0] / labels.len() as f64;
                let c = probs.len() / labels.len();
                let acc = self.acc(grads, *logits);
                for (b, &y) in labels.iter().enumerate() {
                    for j in 0..c {
                        let onehot = if j == y { 1.0 } else { 0.0 };
                        acc[b * c + j] += d * (probs[b * c + j] - onehot);
                    }
                }
            }
            Op::Im2Col { x, seq, kernel } => {
                let (r, c) = rows_cols(self.dims(*x)).unwrap();
                let pad = kernel / 2;
                let acc = self.acc(grads, *x);
                for row in 0..r {
                    let (b, t) = (row / seq, row % seq);
                    for k in 0..*kernel {
                        let src = t as isize + k as isize - pad as isize;
                        if src < 0 || src >= *seq as isize {
                            continue;
                        }
                        let src_row = b * seq + src as usize;
                        let from = row * kernel * c + k * c;
                        add_into(&mut acc[src_row * c..(src_row + 1) * c], &g[from..from + c]);
                    }
                }
            }
        }
    }

    fn acc<'g>(&self, grads: &'g mut [Option<Vec<f64>>], v: Var) -> &'g mut [f64] {
        let n = self.nodes[v.0].value.len();
        grads[v.0].get_or_insert_with(|| vec![0.0; n])
    }
}

fn add_into(acc: &mut [f64], g: &[f64]) {
    acc.iter_mut().zip(g).for_each(|(a, b)| *a += b);
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    row.iter_mut().for_each(|v| *v /= sum);
}
