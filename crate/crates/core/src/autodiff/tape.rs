use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a tensor recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Pointwise operations accepted by [`Tape::elementwise`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ElementwiseOp {
    Add,
    Sub,
    Mul,
    Sigmoid,
    Tanh,
    Relu,
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Unary {
    Sigmoid,
    Tanh,
    Relu,
    Log,
    Exp,
    Neg,
    Scale(f64),
    Clamp(f64, f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Binary {
    Add,
    Sub,
    Mul,
}

/// Reduction kinds for [`Tape::reduce`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Reduction {
    Sum,
    Mean,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Unary(Var, Unary),
    Binary(Var, Var, Binary),
    MatMul(Var, Var),
    AddRow(Var, Var),
    MaskedSoftmax(Var),
    Gather(Var, Vec<usize>),
    Reduce(Var, Reduction, Option<usize>),
    ScaleRows(Var, Var),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceRows(Var, usize),
    SliceCols(Var, usize),
    Transpose(Var),
    Reshape(Var),
    SelectRows(Vec<bool>, Var, Var),
    MaskedMax(Vec<Var>, Vec<usize>),
    Pick(Var, Vec<usize>),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Records primitive applications for one forward pass and replays them in
/// reverse to produce gradients.
///
/// Nodes are appended in execution order, so every node's inputs precede it.
/// A tape supports exactly one [`backward`](Tape::backward) call.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    consumed: bool,
}

/// Gradients of the leaves of a tape with respect to a scalar loss.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of a leaf that requires grad and was reachable from the loss.
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.grads.get(var.0).and_then(Option::as_ref)
    }

    /// Like [`get`](Self::get) but yields zeros of `like`'s shape when the
    /// leaf received no gradient.
    pub fn get_or_zeros(&self, var: Var, like: &Tensor) -> Tensor {
        self.get(var)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(like.shape()))
    }
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

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    pub fn shape(&self, var: Var) -> &[usize] {
        self.nodes[var.0].value.shape()
    }

    /// Records a trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Records a leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, var: Var) -> bool {
        self.nodes[var.0].requires_grad
    }

    fn record(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|&v| self.rg(v));
        self.push(value, op, requires_grad)
    }

    // ---- pointwise ------------------------------------------------------

    pub fn elementwise(&mut self, op: ElementwiseOp, inputs: &[Var]) -> Result<Var> {
        let arity = match op {
            ElementwiseOp::Add | ElementwiseOp::Sub | ElementwiseOp::Mul => 2,
            _ => 1,
        };
        if inputs.len() != arity {
            return Err(Error::Contract(format!(
                "{op:?} takes {arity} inputs, got {}",
                inputs.len()
            )));
        }
        match op {
            ElementwiseOp::Add => self.add(inputs[0], inputs[1]),
            ElementwiseOp::Sub => self.sub(inputs[0], inputs[1]),
            ElementwiseOp::Mul => self.mul(inputs[0], inputs[1]),
            ElementwiseOp::Sigmoid => Ok(self.sigmoid(inputs[0])),
            ElementwiseOp::Tanh => Ok(self.tanh(inputs[0])),
            ElementwiseOp::Relu => Ok(self.relu(inputs[0])),
        }
    }

    fn unary(&mut self, x: Var, kind: Unary) -> Var {
        let f: fn(f64, Unary) -> f64 = |v, k| match k {
            Unary::Sigmoid => sigmoid(v),
            Unary::Tanh => v.tanh(),
            Unary::Relu => v.max(0.0),
            Unary::Log => v.ln(),
            Unary::Exp => v.exp(),
            Unary::Neg => -v,
            Unary::Scale(c) => c * v,
            Unary::Clamp(lo, hi) => v.clamp(lo, hi),
        };
        let src = &self.nodes[x.0].value;
        let data = src.data().iter().map(|&v| f(v, kind)).collect();
        let value = Tensor::new(src.shape().to_vec(), data).expect("shape preserved");
        self.record(value, Op::Unary(x, kind), &[x])
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Sigmoid)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Tanh)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Relu)
    }

    /// Natural log; callers keep inputs positive (see [`clamp`](Self::clamp)).
    pub fn log(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Log)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Exp)
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Neg)
    }

    /// Multiplies by a constant.
    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        self.unary(x, Unary::Scale(factor))
    }

    /// Clamps into `[lo, hi]`; the gradient is zero where clamping was active.
    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Var {
        self.unary(x, Unary::Clamp(lo, hi))
    }

    fn binary(&mut self, a: Var, b: Var, kind: Binary, name: &'static str) -> Result<Var> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let (na, nb) = (ta.numel(), tb.numel());
        let shape = if ta.shape() == tb.shape() {
            ta.shape().to_vec()
        } else if na == 1 {
            tb.shape().to_vec()
        } else if nb == 1 {
            ta.shape().to_vec()
        } else {
            return Err(Error::dim(name, ta.shape(), tb.shape()));
        };
        let n = na.max(nb);
        let (da, db) = (ta.data(), tb.data());
        let data = (0..n)
            .map(|i| {
                let x = if na == 1 { da[0] } else { da[i] };
                let y = if nb == 1 { db[0] } else { db[i] };
                match kind {
                    Binary::Add => x + y,
                    Binary::Sub => x - y,
                    Binary::Mul => x * y,
                }
            })
            .collect();
        let value = Tensor::new(shape, data)?;
        Ok(self.record(value, Op::Binary(a, b, kind), &[a, b]))
    }

    /// Elementwise sum; shapes must match or one side must hold one element.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Binary::Add, "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Binary::Sub, "sub")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Binary::Mul, "mul")
    }

    // ---- linear algebra -------------------------------------------------

    /// `[m×k] · [k×n] → [m×n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let (m, k) = ta
            .dims2()
            .map_err(|_| Error::dim("matmul", ta.shape(), tb.shape()))?;
        let (k2, n) = tb
            .dims2()
            .map_err(|_| Error::dim("matmul", ta.shape(), tb.shape()))?;
        if k != k2 {
            return Err(Error::dim("matmul", ta.shape(), tb.shape()));
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, ta.data(), false, tb.data(), false, &mut out, 0.0);
        let value = Tensor::new(vec![m, n], out)?;
        Ok(self.record(value, Op::MatMul(a, b), &[a, b]))
    }

    /// Adds a length-`n` row vector to every row of an `[m×n]` matrix.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[bias.0].value);
        let (m, n) = ta
            .dims2()
            .map_err(|_| Error::dim("add_row", ta.shape(), tb.shape()))?;
        if tb.shape() != [n] {
            return Err(Error::dim("add_row", ta.shape(), tb.shape()));
        }
        let mut data = ta.data().to_vec();
        for r in 0..m {
            for (x, &b) in data[r * n..(r + 1) * n].iter_mut().zip(tb.data()) {
                *x += b;
            }
        }
        let value = Tensor::new(vec![m, n], data)?;
        Ok(self.record(value, Op::AddRow(a, bias), &[a, bias]))
    }

    // ---- normalisation --------------------------------------------------

    /// Softmax over the last axis of a `[L]` or `[B×L]` tensor, restricted to
    /// positions where `mask` is true. Masked outputs are exactly zero.
    pub fn masked_softmax(&mut self, scores: Var, mask: &[bool]) -> Result<Var> {
        let t = &self.nodes[scores.0].value;
        let width = match t.shape() {
            [l] => *l,
            [_, l] => *l,
            s => return Err(Error::dim("masked_softmax", s, &[mask.len()])),
        };
        if mask.len() != t.numel() {
            return Err(Error::dim("masked_softmax", t.shape(), &[mask.len()]));
        }
        let mut out = vec![0.0; t.numel()];
        for (row, (x, (m, o))) in t
            .data()
            .chunks(width.max(1))
            .zip(mask.chunks(width.max(1)).zip(out.chunks_mut(width.max(1))))
            .enumerate()
        {
            let max = x
                .iter()
                .zip(m)
                .filter(|(_, &keep)| keep)
                .map(|(&v, _)| v)
                .fold(f64::NEG_INFINITY, f64::max);
            if max == f64::NEG_INFINITY {
                return Err(Error::EmptySequence(format!(
                    "softmax row {row} has no unmasked positions"
                )));
            }
            let mut total = 0.0;
            for ((&v, &keep), o) in x.iter().zip(m).zip(o.iter_mut()) {
                if keep {
                    *o = (v - max).exp();
                    total += *o;
                }
            }
            for o in o.iter_mut() {
                *o /= total;
            }
        }
        let value = Tensor::new(t.shape().to_vec(), out)?;
        Ok(self.record(value, Op::MaskedSoftmax(scores), &[scores]))
    }

    /// Row-wise softmax with every position active.
    pub fn softmax_rows(&mut self, scores: Var) -> Result<Var> {
        let mask = vec![true; self.value(scores).numel()];
        self.masked_softmax(scores, &mask)
    }

    // ---- indexing -------------------------------------------------------

    /// Gathers rows of a `[V×d]` table (or entries of a `[V]` vector).
    /// Repeated ids accumulate gradient on the shared row.
    pub fn embedding_lookup(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let t = &self.nodes[table.0].value;
        let (vocab, width, out_shape) = match t.shape() {
            [v] => (*v, 1, vec![ids.len()]),
            [v, d] => (*v, *d, vec![ids.len(), *d]),
            s => return Err(Error::dim("embedding_lookup", s, &[ids.len()])),
        };
        let mut data = Vec::with_capacity(ids.len() * width);
        for &id in ids {
            if id >= vocab {
                return Err(Error::Vocabulary { id, size: vocab });
            }
            data.extend_from_slice(&t.data()[id * width..(id + 1) * width]);
        }
        let value = Tensor::new(out_shape, data)?;
        Ok(self.record(value, Op::Gather(table, ids.to_vec()), &[table]))
    }

    /// Selects `x[n, idx[n]]` from an `[N×K]` matrix.
    pub fn pick(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let t = &self.nodes[x.0].value;
        let (n, k) = t.dims2()?;
        if idx.len() != n {
            return Err(Error::dim("pick", t.shape(), &[idx.len()]));
        }
        let mut data = Vec::with_capacity(n);
        for (r, &c) in idx.iter().enumerate() {
            if c >= k {
                return Err(Error::Contract(format!("pick index {c} outside {k} columns")));
            }
            data.push(t.data()[r * k + c]);
        }
        let value = Tensor::vector(data);
        Ok(self.record(value, Op::Pick(x, idx.to_vec()), &[x]))
    }

    // ---- reductions -----------------------------------------------------

    /// Reduces along `axis`, or over everything (yielding a scalar) when
    /// `axis` is `None`.
    pub fn reduce(&mut self, x: Var, kind: Reduction, axis: Option<usize>) -> Result<Var> {
        let t = &self.nodes[x.0].value;
        let value = match axis {
            None => {
                let s: f64 = t.data().iter().sum();
                let n = t.numel().max(1) as f64;
                Tensor::scalar(if kind == Reduction::Mean { s / n } else { s })
            }
            Some(axis) => {
                if axis >= t.rank() {
                    return Err(Error::InvalidAxis {
                        axis,
                        shape: t.shape().to_vec(),
                    });
                }
                let (outer, len, inner) = split_axis(t.shape(), axis);
                let mut out = vec![0.0; outer * inner];
                for o in 0..outer {
                    for a in 0..len {
                        let base = (o * len + a) * inner;
                        for i in 0..inner {
                            out[o * inner + i] += t.data()[base + i];
                        }
                    }
                }
                if kind == Reduction::Mean && len > 0 {
                    out.iter_mut().for_each(|v| *v /= len as f64);
                }
                let mut shape = t.shape().to_vec();
                shape.remove(axis);
                Tensor::new(shape, out)?
            }
        };
        Ok(self.record(value, Op::Reduce(x, kind, axis), &[x]))
    }

    pub fn sum(&mut self, x: Var, axis: Option<usize>) -> Result<Var> {
        self.reduce(x, Reduction::Sum, axis)
    }

    pub fn mean(&mut self, x: Var, axis: Option<usize>) -> Result<Var> {
        self.reduce(x, Reduction::Mean, axis)
    }

    // ---- structural -----------------------------------------------------

    /// Multiplies row `i` of an `[n×d]` matrix by entry `i` of a `[n]` vector.
    pub fn scale_rows(&mut self, h: Var, g: Var) -> Result<Var> {
        let (th, tg) = (&self.nodes[h.0].value, &self.nodes[g.0].value);
        let (n, d) = th
            .dims2()
            .map_err(|_| Error::dim("scale_rows", th.shape(), tg.shape()))?;
        if tg.shape() != [n] {
            return Err(Error::dim("scale_rows", th.shape(), tg.shape()));
        }
        let mut data = th.data().to_vec();
        for (row, &s) in data.chunks_mut(d.max(1)).zip(tg.data()) {
            row.iter_mut().for_each(|v| *v *= s);
        }
        let value = Tensor::new(vec![n, d], data)?;
        Ok(self.record(value, Op::ScaleRows(h, g), &[h, g]))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Contract("concat_cols of nothing".into()))?;
        let (m, _) = self.value(*first).dims2()?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = self.value(p).dims2()?;
            if r != m {
                return Err(Error::dim("concat_cols", self.shape(*first), self.shape(p)));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(m * total);
        for r in 0..m {
            for (&p, &w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&self.value(p).data()[r * w..(r + 1) * w]);
            }
        }
        let value = Tensor::new(vec![m, total], data)?;
        Ok(self.record(value, Op::ConcatCols(parts.to_vec()), parts))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Contract("concat_rows of nothing".into()))?;
        let (_, n) = self.value(*first).dims2()?;
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let (r, c) = self.value(p).dims2()?;
            if c != n {
                return Err(Error::dim("concat_rows", self.shape(*first), self.shape(p)));
            }
            rows += r;
            data.extend_from_slice(self.value(p).data());
        }
        let value = Tensor::new(vec![rows, n], data)?;
        Ok(self.record(value, Op::ConcatRows(parts.to_vec()), parts))
    }

    /// Rows `start..end` of a matrix.
    pub fn slice_rows(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let t = self.value(x);
        let (m, n) = t.dims2()?;
        if start > end || end > m {
            return Err(Error::dim("slice_rows", t.shape(), &[start, end]));
        }
        let value = Tensor::new(vec![end - start, n], t.data()[start * n..end * n].to_vec())?;
        Ok(self.record(value, Op::SliceRows(x, start), &[x]))
    }

    /// Columns `start..end` of a matrix.
    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let t = self.value(x);
        let (m, n) = t.dims2()?;
        if start > end || end > n {
            return Err(Error::dim("slice_cols", t.shape(), &[start, end]));
        }
        let w = end - start;
        let mut data = Vec::with_capacity(m * w);
        for r in 0..m {
            data.extend_from_slice(&t.data()[r * n + start..r * n + end]);
        }
        let value = Tensor::new(vec![m, w], data)?;
        Ok(self.record(value, Op::SliceCols(x, start), &[x]))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let (m, n) = t.dims2()?;
        let mut data = vec![0.0; m * n];
        for r in 0..m {
            for c in 0..n {
                data[c * m + r] = t.data()[r * n + c];
            }
        }
        let value = Tensor::new(vec![n, m], data)?;
        Ok(self.record(value, Op::Transpose(x), &[x]))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x);
        if shape.iter().product::<usize>() != t.numel() {
            return Err(Error::dim("reshape", t.shape(), shape));
        }
        let value = Tensor::new(shape.to_vec(), t.data().to_vec())?;
        Ok(self.record(value, Op::Reshape(x), &[x]))
    }

    /// Row `i` of the result is row `i` of `on_true` when `mask[i]`, else of
    /// `on_false`. Values are copied, not blended.
    pub fn select_rows(&mut self, mask: &[bool], on_true: Var, on_false: Var) -> Result<Var> {
        let (ta, tb) = (self.value(on_true), self.value(on_false));
        let (m, n) = ta.dims2()?;
        if ta.shape() != tb.shape() || mask.len() != m {
            return Err(Error::dim("select_rows", ta.shape(), tb.shape()));
        }
        let mut data = Vec::with_capacity(m * n);
        for (r, &keep) in mask.iter().enumerate() {
            let src = if keep { ta } else { tb };
            data.extend_from_slice(&src.data()[r * n..(r + 1) * n]);
        }
        let value = Tensor::new(vec![m, n], data)?;
        Ok(self.record(
            value,
            Op::SelectRows(mask.to_vec(), on_true, on_false),
            &[on_true, on_false],
        ))
    }

    /// Elementwise maximum across `steps` (each `[B×F]`), where row `b` of
    /// step `t` participates only if `valid[t][b]`.
    pub fn masked_max(&mut self, steps: &[Var], valid: &[Vec<bool>]) -> Result<Var> {
        let first = steps
            .first()
            .ok_or_else(|| Error::EmptySequence("masked_max over no steps".into()))?;
        let (b, f) = self.value(*first).dims2()?;
        if valid.len() != steps.len() || valid.iter().any(|v| v.len() != b) {
            return Err(Error::dim("masked_max", &[steps.len(), b], &[valid.len()]));
        }
        let mut out = vec![f64::NEG_INFINITY; b * f];
        let mut arg = vec![usize::MAX; b * f];
        for (t, &s) in steps.iter().enumerate() {
            let v = self.value(s);
            if v.shape() != [b, f] {
                return Err(Error::dim("masked_max", &[b, f], v.shape()));
            }
            for r in 0..b {
                if !valid[t][r] {
                    continue;
                }
                for c in 0..f {
                    let x = v.data()[r * f + c];
                    if arg[r * f + c] == usize::MAX || x > out[r * f + c] {
                        out[r * f + c] = x;
                        arg[r * f + c] = t;
                    }
                }
            }
        }
        if arg.contains(&usize::MAX) && f > 0 {
            return Err(Error::EmptySequence("masked_max row with no valid step".into()));
        }
        let value = Tensor::new(vec![b, f], out)?;
        Ok(self.record(value, Op::MaskedMax(steps.to_vec(), arg), steps))
    }

    // ---- reverse pass ---------------------------------------------------

    /// Propagates d`loss` back to every reachable leaf that requires grad.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        if self.consumed {
            return Err(Error::TapeConsumed);
        }
        let lv = &self.nodes[loss.0].value;
        if lv.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                lv.shape()
            )));
        }
        self.consumed = true;

        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if matches!(node.op, Op::Leaf) || !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
        }

        let grads = grads
            .into_iter()
            .zip(&self.nodes)
            .map(|(g, node)| match (g, &node.op) {
                (Some(g), Op::Leaf) if node.requires_grad => {
                    Some(Tensor::new(node.value.shape().to_vec(), g).expect("grad shape"))
                }
                _ => None,
            })
            .collect();
        Ok(Gradients { grads })
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let out = &self.nodes[i].value;
        let val = |v: Var| &self.nodes[v.0].value;
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Unary(x, kind) => {
                if !self.rg(*x) {
                    return;
                }
                let xin = val(*x).data();
                let y = out.data();
                let buf = slot(grads, *x, xin.len());
                for k in 0..xin.len() {
                    let d = match kind {
                        Unary::Sigmoid => y[k] * (1.0 - y[k]),
                        Unary::Tanh => 1.0 - y[k] * y[k],
                        Unary::Relu => {
                            if xin[k] > 0.0 {
                                1.0
                            } else {
                                0.0
                            }
                        }
                        Unary::Log => 1.0 / xin[k],
                        Unary::Exp => y[k],
                        Unary::Neg => -1.0,
                        Unary::Scale(c) => *c,
                        Unary::Clamp(lo, hi) => {
                            if xin[k] >= *lo && xin[k] <= *hi {
                                1.0
                            } else {
                                0.0
                            }
                        }
                    };
                    buf[k] += g[k] * d;
                }
            }
            Op::Binary(a, b, kind) => {
                let (da, db) = (val(*a).data(), val(*b).data());
                let (na, nb) = (da.len(), db.len());
                let n = g.len();
                let at = |d: &[f64], k: usize| if d.len() == 1 { d[0] } else { d[k] };
                if self.rg(*a) {
                    let buf = slot(grads, *a, na);
                    for k in 0..n {
                        let d = match kind {
                            Binary::Add | Binary::Sub => 1.0,
                            Binary::Mul => at(db, k),
                        };
                        buf[if na == 1 { 0 } else { k }] += g[k] * d;
                    }
                }
                if self.rg(*b) {
                    let buf = slot(grads, *b, nb);
                    for k in 0..n {
                        let d = match kind {
                            Binary::Add => 1.0,
                            Binary::Sub => -1.0,
                            Binary::Mul => at(da, k),
                        };
                        buf[if nb == 1 { 0 } else { k }] += g[k] * d;
                    }
                }
            }
            Op::MatMul(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                let (m, k) = (ta.shape()[0], ta.shape()[1]);
                let n = tb.shape()[1];
                if self.rg(*a) {
                    let buf = slot(grads, *a, m * k);
                    gemm(m, n, k, g, false, tb.data(), true, buf, 1.0);
                }
                if self.rg(*b) {
                    let buf = slot(grads, *b, k * n);
                    gemm(k, m, n, ta.data(), true, g, false, buf, 1.0);
                }
            }
            Op::AddRow(a, bias) => {
                let n = val(*bias).numel();
                if self.rg(*a) {
                    let buf = slot(grads, *a, g.len());
                    buf.iter_mut().zip(g).for_each(|(b, v)| *b += v);
                }
                if self.rg(*bias) {
                    let buf = slot(grads, *bias, n);
                    for row in g.chunks(n.max(1)) {
                        buf.iter_mut().zip(row).for_each(|(b, v)| *b += v);
                    }
                }
            }
            Op::MaskedSoftmax(x) => {
                if !self.rg(*x) {
                    return;
                }
                let width = *out.shape().last().unwrap_or(&1);
                let buf = slot(grads, *x, g.len());
                for ((y, gr), b) in out
                    .data()
                    .chunks(width.max(1))
                    .zip(g.chunks(width.max(1)))
                    .zip(buf.chunks_mut(width.max(1)))
                {
                    let dot: f64 = y.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for k in 0..y.len() {
                        b[k] += y[k] * (gr[k] - dot);
                    }
                }
            }
            Op::Gather(table, ids) => {
                if !self.rg(*table) {
                    return;
                }
                let t = val(*table);
                let width = if t.rank() == 1 { 1 } else { t.shape()[1] };
                let buf = slot(grads, *table, t.numel());
                for (r, &id) in ids.iter().enumerate() {
                    let dst = &mut buf[id * width..(id + 1) * width];
                    dst.iter_mut()
                        .zip(&g[r * width..(r + 1) * width])
                        .for_each(|(d, v)| *d += v);
                }
            }
            Op::Pick(x, idx) => {
                if !self.rg(*x) {
                    return;
                }
                let t = val(*x);
                let k = t.shape()[1];
                let buf = slot(grads, *x, t.numel());
                for (r, &c) in idx.iter().enumerate() {
                    buf[r * k + c] += g[r];
                }
            }
            Op::Reduce(x, kind, axis) => {
                if !self.rg(*x) {
                    return;
                }
                let t = val(*x);
                let buf = slot(grads, *x, t.numel());
                match axis {
                    None => {
                        let scale = match kind {
                            Reduction::Sum => 1.0,
                            Reduction::Mean => 1.0 / t.numel().max(1) as f64,
                        };
                        buf.iter_mut().for_each(|b| *b += g[0] * scale);
                    }
                    Some(axis) => {
                        let (outer, len, inner) = split_axis(t.shape(), *axis);
                        let scale = match kind {
                            Reduction::Sum => 1.0,
                            Reduction::Mean => 1.0 / len.max(1) as f64,
                        };
                        for o in 0..outer {
                            for a in 0..len {
                                let base = (o * len + a) * inner;
                                for ii in 0..inner {
                                    buf[base + ii] += g[o * inner + ii] * scale;
                                }
                            }
                        }
                    }
                }
            }
            Op::ScaleRows(h, s) => {
                let (th, ts) = (val(*h), val(*s));
                let d = th.shape()[1];
                if self.rg(*h) {
                    let buf = slot(grads, *h, th.numel());
                    for (r, &sv) in ts.data().iter().enumerate() {
                        for c in 0..d {
                            buf[r * d + c] += g[r * d + c] * sv;
                        }
                    }
                }
                if self.rg(*s) {
                    let buf = slot(grads, *s, ts.numel());
                    for (r, b) in buf.iter_mut().enumerate() {
                        let row = &th.data()[r * d..(r + 1) * d];
                        *b += row
                            .iter()
                            .zip(&g[r * d..(r + 1) * d])
                            .map(|(x, y)| x * y)
                            .sum::<f64>();
                    }
                }
            }
            Op::ConcatCols(parts) => {
                let m = out.shape()[0];
                let total = out.shape()[1];
                let mut offset = 0;
                for &p in parts {
                    let w = val(p).shape()[1];
                    if self.rg(p) {
                        let buf = slot(grads, p, m * w);
                        for r in 0..m {
                            for c in 0..w {
                                buf[r * w + c] += g[r * total + offset + c];
                            }
                        }
                    }
                    offset += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let len = val(p).numel();
                    if self.rg(p) {
                        let buf = slot(grads, p, len);
                        buf.iter_mut()
                            .zip(&g[offset..offset + len])
                            .for_each(|(b, v)| *b += v);
                    }
                    offset += len;
                }
            }
            Op::SliceRows(x, start) => {
                if !self.rg(*x) {
                    return;
                }
                let t = val(*x);
                let n = t.shape()[1];
                let buf = slot(grads, *x, t.numel());
                buf[start * n..start * n + g.len()]
                    .iter_mut()
                    .zip(g)
                    .for_each(|(b, v)| *b += v);
            }
            Op::SliceCols(x, start) => {
                if !self.rg(*x) {
                    return;
                }
                let t = val(*x);
                let (m, n) = (t.shape()[0], t.shape()[1]);
                let w = out.shape()[1];
                let buf = slot(grads, *x, t.numel());
                for r in 0..m {
                    for c in 0..w {
                        buf[r * n + start + c] += g[r * w + c];
                    }
                }
            }
            Op::Transpose(x) => {
                if !self.rg(*x) {
                    return;
                }
                let (n, m) = (out.shape()[0], out.shape()[1]);
                let buf = slot(grads, *x, n * m);
                for r in 0..n {
                    for c in 0..m {
                        buf[c * n + r] += g[r * m + c];
                    }
                }
            }
            Op::Reshape(x) => {
                if !self.rg(*x) {
                    return;
                }
                let buf = slot(grads, *x, g.len());
                buf.iter_mut().zip(g).for_each(|(b, v)| *b += v);
            }
            Op::SelectRows(mask, a, b) => {
                let n = out.shape()[1];
                for (var, want) in [(*a, true), (*b, false)] {
                    if !self.rg(var) {
                        continue;
                    }
                    let buf = slot(grads, var, g.len());
                    for (r, &keep) in mask.iter().enumerate() {
                        if keep == want {
                            buf[r * n..(r + 1) * n]
                                .iter_mut()
                                .zip(&g[r * n..(r + 1) * n])
                                .for_each(|(d, v)| *d += v);
                        }
                    }
                }
            }
            Op::MaskedMax(steps, arg) => {
                for (t, &s) in steps.iter().enumerate() {
                    if !self.rg(s) {
                        continue;
                    }
                    let buf = slot(grads, s, g.len());
                    for (k, &a) in arg.iter().enumerate() {
                        if a == t {
                            buf[k] += g[k];
                        }
                    }
                }
            }
        }
    }
}

fn slot(grads: &mut [Option<Vec<f64>>], var: Var, len: usize) -> &mut Vec<f64> {
    grads[var.0].get_or_insert_with(|| vec![0.0; len])
}

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

/// Numerically safe logistic function.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `c ← beta·c + op(a)·op(b)` with `op(a)` of shape `m×k` and `op(b)` of
/// shape `k×n`; the `*_t` flags read the stored matrix as transposed.
#[allow(clippy::too_many_arguments)]
fn gemm(m: usize, k: usize, n: usize, a: &[f64], a_t: bool, b: &[f64], b_t: bool, c: &mut [f64], beta: f64) {
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        c.iter_mut().for_each(|v| *v *= beta);
        return;
    }
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    debug_assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    // SAFETY: the slices cover the m×k, k×n and m×n extents addressed by
    // the strides above, and `c` does not alias `a` or `b`.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}
