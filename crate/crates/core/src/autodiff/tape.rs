//! Define-by-run computation tape.
//!
//! Every operation appends a node holding its output value and enough saved
//! state to run its adjoint. Nodes are only ever appended, so the node
//! index order is a topological order and backward is a single reverse
//! sweep.

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

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
    },
    Add {
        a: Var,
        b: Var,
    },
    AddBias {
        a: Var,
        bias: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    Scale {
        a: Var,
        factor: f64,
    },
    Concat {
        parts: Vec<Var>,
        axis: usize,
    },
    Tanh {
        a: Var,
    },
    Sigmoid {
        a: Var,
    },
    Sum {
        a: Var,
    },
    Mean {
        a: Var,
    },
    MeanRows {
        a: Var,
    },
    Slice {
        a: Var,
        start: usize,
    },
    SelectRows {
        a: Var,
        rows: Vec<usize>,
    },
    SqDist {
        a: Var,
        b: Var,
    },
    SoftmaxCrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<f64>,
    },
    LstmCell {
        input: Var,
        state: Var,
        weight: Var,
        bias: Var,
        // activated gates laid out as [i | f | g | o], each of width H
        gates: Vec<f64>,
        cell_tanh: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `var`, or `None` when `var`
    /// does not require a gradient or is unreachable from the loss.
    pub fn get(&self, var: Var) -> Option<&[f64]> {
        self.grads.get(var.0).and_then(|g| g.as_deref())
    }
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    consumed: bool,
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records `tensor` as a leaf. Its `requires_grad` flag decides whether
    /// backward produces a gradient for it.
    pub fn leaf(&mut self, tensor: Tensor) -> Var {
        let requires_grad = tensor.requires_grad();
        self.push(tensor.with_requires_grad(false), Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, tensor: Tensor) -> Var {
        self.push(tensor.with_requires_grad(false), Op::Leaf, false)
    }

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    pub fn shape(&self, var: Var) -> &[usize] {
        self.nodes[var.0].value.shape()
    }

    pub fn requires_grad(&self, var: Var) -> bool {
        self.nodes[var.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn mismatch(&self, op: &'static str, a: Var, b: Var) -> Error {
        Error::Dimension {
            op,
            lhs: self.shape(a).to_vec(),
            rhs: self.shape(b).to_vec(),
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let (m, k) = av.dims2();
        if bv.rank() != 2 || bv.shape()[0] != k {
            return Err(self.mismatch("matmul", a, b));
        }
        let n = bv.shape()[1];
        let (x, y) = (av.values(), bv.values());
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &mut out[i * n..(i + 1) * n];
            for p in 0..k {
                let s = x[i * k + p];
                if s == 0.0 {
                    continue;
                }
                for (o, w) in row.iter_mut().zip(&y[p * n..(p + 1) * n]) {
                    *o += s * w;
                }
            }
        }
        let shape = if av.rank() <= 1 { vec![n] } else { vec![m, n] };
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(Tensor::new(shape, out)?, Op::MatMul { a, b }, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(self.mismatch("add", a, b));
        }
        let out: Vec<f64> = self
            .value(a)
            .values()
            .iter()
            .zip(self.value(b).values())
            .map(|(x, y)| x + y)
            .collect();
        let shape = self.shape(a).to_vec();
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(Tensor::new(shape, out)?, Op::Add { a, b }, rg))
    }

    /// Adds a length-`n` bias to every row of an `m×n` (or length-`n`) input.
    pub fn add_bias(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (_, n) = self.value(a).dims2();
        if self.value(bias).numel() != n || self.value(bias).rank() > 1 {
            return Err(self.mismatch("add_bias", a, bias));
        }
        let b = self.value(bias).values();
        let mut out = self.value(a).values().to_vec();
        for row in out.chunks_mut(n.max(1)) {
            for (o, x) in row.iter_mut().zip(b) {
                *o += x;
            }
        }
        let shape = self.shape(a).to_vec();
        let rg = self.any_grad(&[a, bias]);
        Ok(self.push(Tensor::new(shape, out)?, Op::AddBias { a, bias }, rg))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(self.mismatch("mul", a, b));
        }
        let out: Vec<f64> = self
            .value(a)
            .values()
            .iter()
            .zip(self.value(b).values())
            .map(|(x, y)| x * y)
            .collect();
        let shape = self.shape(a).to_vec();
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(Tensor::new(shape, out)?, Op::Mul { a, b }, rg))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let out: Vec<f64> = self.value(a).values().iter().map(|x| x * factor).collect();
        let shape = self.shape(a).to_vec();
        let rg = self.any_grad(&[a]);
        let value = Tensor::new(shape, out).expect("scale preserves shape");
        self.push(value, Op::Scale { a, factor }, rg)
    }

    /// Concatenates along `axis` of the 2-D view.
    ///
    /// Axis 0 stacks rows (vectors become rows of a matrix). Axis 1 joins
    /// columns; when every part is a vector the result stays a vector.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::contract("autodiff", "concat of zero tensors"))?;
        let (rows0, cols0) = self.value(first).dims2();
        let value = match axis {
            0 => {
                let mut values = Vec::new();
                let mut rows = 0;
                for &p in parts {
                    let (r, c) = self.value(p).dims2();
                    if c != cols0 {
                        return Err(self.mismatch("concat", first, p));
                    }
                    rows += r;
                    values.extend_from_slice(self.value(p).values());
                }
                Tensor::new(vec![rows, cols0], values)?
            }
            1 => {
                let mut cols = 0;
                for &p in parts {
                    let (r, c) = self.value(p).dims2();
                    if r != rows0 {
                        return Err(self.mismatch("concat", first, p));
                    }
                    cols += c;
                }
                let mut values = Vec::with_capacity(rows0 * cols);
                for i in 0..rows0 {
                    for &p in parts {
                        values.extend_from_slice(self.value(p).row(i));
                    }
                }
                let all_vectors = parts.iter().all(|&p| self.value(p).rank() <= 1);
                let shape = if all_vectors {
                    vec![cols]
                } else {
                    vec![rows0, cols]
                };
                Tensor::new(shape, values)?
            }
            _ => {
                return Err(Error::contract(
                    "autodiff",
                    format!("concat axis {axis} unsupported"),
                ))
            }
        };
        let rg = self.any_grad(parts);
        Ok(self.push(
            value,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            rg,
        ))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let out: Vec<f64> = self.value(a).values().iter().map(|x| x.tanh()).collect();
        let shape = self.shape(a).to_vec();
        let rg = self.any_grad(&[a]);
        self.push(Tensor::new(shape, out).expect("shape"), Op::Tanh { a }, rg)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out: Vec<f64> = self.value(a).values().iter().map(|&x| sigmoid(x)).collect();
        let shape = self.shape(a).to_vec();
        let rg = self.any_grad(&[a]);
        self.push(
            Tensor::new(shape, out).expect("shape"),
            Op::Sigmoid { a },
            rg,
        )
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).values().iter().sum();
        let rg = self.any_grad(&[a]);
        self.push(Tensor::scalar(s), Op::Sum { a }, rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let v = self.value(a).values();
        let s = v.iter().sum::<f64>() / v.len().max(1) as f64;
        let rg = self.any_grad(&[a]);
        self.push(Tensor::scalar(s), Op::Mean { a }, rg)
    }

    /// Column means of an `m×n` input, giving a length-`n` vector.
    pub fn mean_rows(&mut self, a: Var) -> Result<Var> {
        let (m, n) = self.value(a).dims2();
        if m == 0 {
            return Err(Error::contract("autodiff", "mean_rows of an empty matrix"));
        }
        let mut out = vec![0.0; n];
        for row in self.value(a).values().chunks(n.max(1)) {
            for (o, x) in out.iter_mut().zip(row) {
                *o += x;
            }
        }
        for o in &mut out {
            *o /= m as f64;
        }
        let rg = self.any_grad(&[a]);
        Ok(self.push(Tensor::vector(out), Op::MeanRows { a }, rg))
    }

    /// Contiguous sub-vector `[start, start + len)` of a vector.
    pub fn slice(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let v = self.value(a);
        if v.rank() != 1 || start + len > v.numel() {
            return Err(Error::Dimension {
                op: "slice",
                lhs: v.shape().to_vec(),
                rhs: vec![start, start + len],
            });
        }
        let out = v.values()[start..start + len].to_vec();
        let rg = self.any_grad(&[a]);
        Ok(self.push(Tensor::vector(out), Op::Slice { a, start }, rg))
    }

    /// Gathers the listed rows (repeats allowed) into a new matrix.
    pub fn select_rows(&mut self, a: Var, rows: &[usize]) -> Result<Var> {
        let (m, n) = self.value(a).dims2();
        let mut out = Vec::with_capacity(rows.len() * n);
        for &r in rows {
            if r >= m {
                return Err(Error::Index {
                    module: "autodiff",
                    index: r,
                    bound: m,
                });
            }
            out.extend_from_slice(self.value(a).row(r));
        }
        let rg = self.any_grad(&[a]);
        Ok(self.push(
            Tensor::new(vec![rows.len(), n], out)?,
            Op::SelectRows {
                a,
                rows: rows.to_vec(),
            },
            rg,
        ))
    }

    /// Pairwise squared Euclidean distances between the rows of `a`
    /// (`m×d`) and the rows of `b` (`k×d`), giving `m×k`. A vector `a`
    /// yields a length-`k` vector.
    pub fn sq_dist(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, d) = self.value(a).dims2();
        let (k, d2) = self.value(b).dims2();
        if d != d2 {
            return Err(self.mismatch("sq_dist", a, b));
        }
        let (x, y) = (self.value(a).values(), self.value(b).values());
        let mut out = Vec::with_capacity(m * k);
        for i in 0..m {
            let xi = &x[i * d..(i + 1) * d];
            for j in 0..k {
                let yj = &y[j * d..(j + 1) * d];
                out.push(xi.iter().zip(yj).map(|(p, q)| (p - q) * (p - q)).sum());
            }
        }
        let shape = if self.value(a).rank() <= 1 {
            vec![k]
        } else {
            vec![m, k]
        };
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(Tensor::new(shape, out)?, Op::SqDist { a, b }, rg))
    }

    /// Mean over rows of `-log softmax(logits_i)[targets_i]`, stabilized by
    /// subtracting each row's maximum.
    pub fn softmax_cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let (n, k) = self.value(logits).dims2();
        if targets.len() != n {
            return Err(Error::Dimension {
                op: "softmax_cross_entropy",
                lhs: self.shape(logits).to_vec(),
                rhs: vec![targets.len()],
            });
        }
        if n == 0 {
            return Err(Error::contract(
                "autodiff",
                "softmax_cross_entropy over zero rows",
            ));
        }
        let z = self.value(logits).values();
        let mut probs = vec![0.0; n * k];
        let mut loss = 0.0;
        for (i, &t) in targets.iter().enumerate() {
            if t >= k {
                return Err(Error::Index {
                    module: "autodiff",
                    index: t,
                    bound: k,
                });
            }
            let row = &z[i * k..(i + 1) * k];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut denom = 0.0;
            for (p, &v) in probs[i * k..(i + 1) * k].iter_mut().zip(row) {
                *p = (v - max).exp();
                denom += *p;
            }
            for p in &mut probs[i * k..(i + 1) * k] {
                *p /= denom;
            }
            loss += denom.ln() - (row[t] - max);
        }
        let rg = self.any_grad(&[logits]);
        Ok(self.push(
            Tensor::scalar(loss / n as f64),
            Op::SoftmaxCrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            rg,
        ))
    }

    /// One step of a gated recurrent cell with input, forget and output
    /// gates and a separate cell state.
    ///
    /// `state` packs `[h | c]` (length `2H`); the result packs the next
    /// `[h' | c']`. `weight` is `(E + H)×4H` with rows for the input then
    /// the previous hidden state, and gate columns ordered `[i | f | g | o]`.
    pub fn lstm_cell(&mut self, input: Var, state: Var, weight: Var, bias: Var) -> Result<Var> {
        let e = self.value(input).numel();
        let s = self.value(state).numel();
        if !s.is_multiple_of(2) {
            return Err(self.mismatch("lstm_cell", input, state));
        }
        let h = s / 2;
        let w = self.value(weight);
        if w.shape() != [e + h, 4 * h] {
            return Err(Error::Dimension {
                op: "lstm_cell",
                lhs: w.shape().to_vec(),
                rhs: vec![e + h, 4 * h],
            });
        }
        if self.value(bias).numel() != 4 * h {
            return Err(self.mismatch("lstm_cell", weight, bias));
        }
        let wv = w.values();
        let mut z = self.value(bias).values().to_vec();
        let x = self.value(input).values();
        let st = self.value(state).values();
        for (r, &u) in x.iter().chain(&st[..h]).enumerate() {
            if u == 0.0 {
                continue;
            }
            for (zj, wj) in z.iter_mut().zip(&wv[r * 4 * h..(r + 1) * 4 * h]) {
                *zj += u * wj;
            }
        }
        let mut gates = z;
        for (j, g) in gates.iter_mut().enumerate() {
            *g = if (2 * h..3 * h).contains(&j) {
                g.tanh()
            } else {
                sigmoid(*g)
            };
        }
        let mut out = vec![0.0; 2 * h];
        let mut cell_tanh = vec![0.0; h];
        for j in 0..h {
            let (i_g, f_g, g_g, o_g) = (gates[j], gates[h + j], gates[2 * h + j], gates[3 * h + j]);
            let c = f_g * st[h + j] + i_g * g_g;
            cell_tanh[j] = c.tanh();
            out[j] = o_g * cell_tanh[j];
            out[h + j] = c;
        }
        let rg = self.any_grad(&[input, state, weight, bias]);
        Ok(self.push(
            Tensor::vector(out),
            Op::LstmCell {
                input,
                state,
                weight,
                bias,
                gates,
                cell_tanh,
            },
            rg,
        ))
    }

    /// Reverse sweep from a scalar `loss`. A tape can be differentiated only
    /// once; values stay readable afterwards.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        if self.consumed {
            return Err(Error::contract(
                "autodiff",
                "tape already consumed by backward",
            ));
        }
        if self.value(loss).numel() != 1 {
            return Err(Error::contract(
                "autodiff",
                format!(
                    "backward needs a scalar loss, got shape {:?}",
                    self.shape(loss)
                ),
            ));
        }
        self.consumed = true;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        if !self.nodes[loss.0].requires_grad {
            return Ok(Gradients { grads });
        }
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        // Only leaves keep gradients; interior buffers are dropped.
        for (node, grad) in self.nodes.iter().zip(grads.iter_mut()) {
            if !matches!(node.op, Op::Leaf) || !node.requires_grad {
                *grad = None;
            }
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        fn acc<'g>(
            nodes: &[Node],
            grads: &'g mut [Option<Vec<f64>>],
            v: Var,
        ) -> Option<&'g mut Vec<f64>> {
            if !nodes[v.0].requires_grad {
                return None;
            }
            let n = nodes[v.0].value.numel();
            Some(grads[v.0].get_or_insert_with(|| vec![0.0; n]))
        }
        match &nodes[idx].op {
            Op::Leaf => {}
            Op::MatMul { a, b } => {
                let av = &nodes[a.0].value;
                let bv = &nodes[b.0].value;
                let (m, k) = av.dims2();
                let n = bv.shape()[1];
                if let Some(da) = acc(nodes, grads, *a) {
                    let y = bv.values();
                    for i in 0..m {
                        let gi = &g[i * n..(i + 1) * n];
                        for p in 0..k {
                            da[i * k + p] += gi
                                .iter()
                                .zip(&y[p * n..(p + 1) * n])
                                .map(|(u, w)| u * w)
                                .sum::<f64>();
                        }
                    }
                }
                if let Some(db) = acc(nodes, grads, *b) {
                    let x = av.values();
                    for i in 0..m {
                        let gi = &g[i * n..(i + 1) * n];
                        for p in 0..k {
                            let s = x[i * k + p];
                            if s == 0.0 {
                                continue;
                            }
                            for (d, u) in db[p * n..(p + 1) * n].iter_mut().zip(gi) {
                                *d += s * u;
                            }
                        }
                    }
                }
            }
            Op::Add { a, b } => {
                for v in [a, b] {
                    if let Some(d) = acc(nodes, grads, *v) {
                        for (x, y) in d.iter_mut().zip(g) {
                            *x += y;
                        }
                    }
                }
            }
            Op::AddBias { a, bias } => {
                if let Some(d) = acc(nodes, grads, *a) {
                    for (x, y) in d.iter_mut().zip(g) {
                        *x += y;
                    }
                }
                if let Some(d) = acc(nodes, grads, *bias) {
                    let n = d.len();
                    for row in g.chunks(n.max(1)) {
                        for (x, y) in d.iter_mut().zip(row) {
                            *x += y;
                        }
                    }
                }
            }
            Op::Mul { a, b } => {
                let (av, bv) = (nodes[a.0].value.values(), nodes[b.0].value.values());
                if let Some(d) = acc(nodes, grads, *a) {
                    for ((x, y), w) in d.iter_mut().zip(g).zip(bv) {
                        *x += y * w;
                    }
                }
                if let Some(d) = acc(nodes, grads, *b) {
                    for ((x, y), w) in d.iter_mut().zip(g).zip(av) {
                        *x += y * w;
                    }
                }
            }
            Op::Scale { a, factor } => {
                if let Some(d) = acc(nodes, grads, *a) {
                    for (x, y) in d.iter_mut().zip(g) {
                        *x += y * factor;
                    }
                }
            }
            Op::Concat { parts, axis } => {
                let out = &nodes[idx].value;
                let (rows, cols) = out.dims2();
                let mut offset = 0;
                for p in parts {
                    let (pr, pc) = nodes[p.0].value.dims2();
                    if let Some(d) = acc(nodes, grads, *p) {
                        if *axis == 0 {
                            for (x, y) in d.iter_mut().zip(&g[offset * cols..(offset + pr) * cols])
                            {
                                *x += y;
                            }
                        } else {
                            for i in 0..rows {
                                let src = &g[i * cols + offset..i * cols + offset + pc];
                                for (x, y) in d[i * pc..(i + 1) * pc].iter_mut().zip(src) {
                                    *x += y;
                                }
                            }
                        }
                    }
                    offset += if *axis == 0 { pr } else { pc };
                }
            }
            Op::Tanh { a } => {
                let out = nodes[idx].value.values();
                if let Some(d) = acc(nodes, grads, *a) {
                    for ((x, y), t) in d.iter_mut().zip(g).zip(out) {
                        *x += y * (1.0 - t * t);
                    }
                }
            }
            Op::Sigmoid { a } => {
                let out = nodes[idx].value.values();
                if let Some(d) = acc(nodes, grads, *a) {
                    for ((x, y), s) in d.iter_mut().zip(g).zip(out) {
                        *x += y * s * (1.0 - s);
                    }
                }
            }
            Op::Sum { a } => {
                if let Some(d) = acc(nodes, grads, *a) {
                    for x in d.iter_mut() {
                        *x += g[0];
                    }
                }
            }
            Op::Mean { a } => {
                if let Some(d) = acc(nodes, grads, *a) {
                    let scale = g[0] / d.len() as f64;
                    for x in d.iter_mut() {
                        *x += scale;
                    }
                }
            }
            Op::MeanRows { a } => {
                let (m, n) = nodes[a.0].value.dims2();
                if let Some(d) = acc(nodes, grads, *a) {
                    for row in d.chunks_mut(n.max(1)) {
                        for (x, y) in row.iter_mut().zip(g) {
                            *x += y / m as f64;
                        }
                    }
                }
            }
            Op::Slice { a, start } => {
                if let Some(d) = acc(nodes, grads, *a) {
                    for (x, y) in d[*start..*start + g.len()].iter_mut().zip(g) {
                        *x += y;
                    }
                }
            }
            Op::SelectRows { a, rows } => {
                let (_, n) = nodes[a.0].value.dims2();
                if let Some(d) = acc(nodes, grads, *a) {
                    for (i, &r) in rows.iter().enumerate() {
                        for (x, y) in d[r * n..(r + 1) * n].iter_mut().zip(&g[i * n..(i + 1) * n]) {
                            *x += y;
                        }
                    }
                }
            }
            Op::SqDist { a, b } => {
                let (m, dim) = nodes[a.0].value.dims2();
                let (k, _) = nodes[b.0].value.dims2();
                let (x, y) = (nodes[a.0].value.values(), nodes[b.0].value.values());
                if let Some(da) = acc(nodes, grads, *a) {
                    for i in 0..m {
                        for j in 0..k {
                            let w = 2.0 * g[i * k + j];
                            for t in 0..dim {
                                da[i * dim + t] += w * (x[i * dim + t] - y[j * dim + t]);
                            }
                        }
                    }
                }
                if let Some(db) = acc(nodes, grads, *b) {
                    for i in 0..m {
                        for j in 0..k {
                            let w = 2.0 * g[i * k + j];
                            for t in 0..dim {
                                db[j * dim + t] -= w * (x[i * dim + t] - y[j * dim + t]);
                            }
                        }
                    }
                }
            }
            Op::SoftmaxCrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let n = targets.len();
                let k = probs.len() / n;
                if let Some(d) = acc(nodes, grads, *logits) {
                    let scale = g[0] / n as f64;
                    for (i, &t) in targets.iter().enumerate() {
                        for j in 0..k {
                            let onehot = if j == t { 1.0 } else { 0.0 };
                            d[i * k + j] += scale * (probs[i * k + j] - onehot);
                        }
                    }
                }
            }
            Op::LstmCell {
                input,
                state,
                weight,
                bias,
                gates,
                cell_tanh,
            } => {
                let h = cell_tanh.len();
                let st = nodes[state.0].value.values();
                let (dh, dc_out) = g.split_at(h);
                let mut dz = vec![0.0; 4 * h];
                let mut dc_prev = vec![0.0; h];
                for j in 0..h {
                    let (i_g, f_g, g_g, o_g) =
                        (gates[j], gates[h + j], gates[2 * h + j], gates[3 * h + j]);
                    let tc = cell_tanh[j];
                    let d_o = dh[j] * tc;
                    let dc = dc_out[j] + dh[j] * o_g * (1.0 - tc * tc);
                    dz[j] = dc * g_g * i_g * (1.0 - i_g);
                    dz[h + j] = dc * st[h + j] * f_g * (1.0 - f_g);
                    dz[2 * h + j] = dc * i_g * (1.0 - g_g * g_g);
                    dz[3 * h + j] = d_o * o_g * (1.0 - o_g);
                    dc_prev[j] = dc * f_g;
                }
                let x = nodes[input.0].value.values();
                let e = x.len();
                if let Some(db) = acc(nodes, grads, *bias) {
                    for (d, v) in db.iter_mut().zip(&dz) {
                        *d += v;
                    }
                }
                if let Some(dw) = acc(nodes, grads, *weight) {
                    for (r, &u) in x.iter().chain(&st[..h]).enumerate() {
                        if u == 0.0 {
                            continue;
                        }
                        for (d, v) in dw[r * 4 * h..(r + 1) * 4 * h].iter_mut().zip(&dz) {
                            *d += u * v;
                        }
                    }
                }
                let wv = nodes[weight.0].value.values();
                let row_dot = |r: usize| -> f64 {
                    wv[r * 4 * h..(r + 1) * 4 * h]
                        .iter()
                        .zip(&dz)
                        .map(|(w, v)| w * v)
                        .sum()
                };
                if let Some(dx) = acc(nodes, grads, *input) {
                    for (r, d) in dx.iter_mut().enumerate() {
                        *d += row_dot(r);
                    }
                }
                if let Some(ds) = acc(nodes, grads, *state) {
                    for j in 0..h {
                        ds[j] += row_dot(e + j);
                        ds[h + j] += dc_prev[j];
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn param(values: Vec<f64>, shape: Vec<usize>) -> Tensor {
        Tensor::new(shape, values).unwrap().with_requires_grad(true)
    }

    #[test]
    fn identity_matmul_is_noop() {
        let mut tape = Tape::new();
        let a_vals: Vec<f64> = (0..9).map(|i| i as f64 * 0.5 - 1.0).collect();
        let i3 = tape.constant(Tensor::identity(3));
        let a = tape.constant(Tensor::matrix(3, 3, a_vals.clone()).unwrap());
        let out = tape.matmul(i3, a).unwrap();
        assert_eq!(tape.value(out).values(), a_vals.as_slice());
    }

    #[test]
    fn matmul_shape_algebra_and_mismatch() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[3, 4]));
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.shape(c), &[2, 4]);
        let err = tape.matmul(b, a).unwrap_err();
        assert!(err.to_string().contains("[3, 4]") && err.to_string().contains("[2, 3]"));
    }

    #[test]
    fn square_has_derivative_six_at_three() {
        let mut tape = Tape::new();
        let x = tape.leaf(param(vec![3.0], vec![1]));
        let sq = tape.mul(x, x).unwrap();
        let loss = tape.sum(sq);
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(x).unwrap(), &[6.0]);
    }

    #[test]
    fn unreachable_tensor_gets_no_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(param(vec![1.0, 2.0], vec![2]));
        let y = tape.leaf(param(vec![5.0], vec![1]));
        let loss = tape.sum(x);
        let grads = tape.backward(loss).unwrap();
        assert!(grads.get(y).is_none());
        assert_eq!(grads.get(x).unwrap(), &[1.0, 1.0]);
    }

    #[test]
    fn second_backward_is_rejected() {
        let mut tape = Tape::new();
        let x = tape.leaf(param(vec![1.0], vec![1]));
        let loss = tape.sum(x);
        tape.backward(loss).unwrap();
        assert!(matches!(tape.backward(loss), Err(Error::Contract { .. })));
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut tape = Tape::new();
        let x = tape.leaf(param(vec![1.0, 2.0], vec![2]));
        assert!(matches!(tape.backward(x), Err(Error::Contract { .. })));
    }

    #[test]
    fn cross_entropy_reference_values() {
        let mut tape = Tape::new();
        let uniform = tape.constant(Tensor::zeros(&[3, 4]));
        let l = tape.softmax_cross_entropy(uniform, &[0, 1, 3]).unwrap();
        assert!((tape.value(l).item() - 4f64.ln()).abs() < 1e-12);

        let sat = tape.constant(Tensor::vector(vec![0.0, 50.0, 0.0]));
        let l = tape.softmax_cross_entropy(sat, &[1]).unwrap();
        assert!(tape.value(l).item() < 1e-9);

        assert!(matches!(
            tape.softmax_cross_entropy(sat, &[3]),
            Err(Error::Index {
                index: 3,
                bound: 3,
                ..
            })
        ));
    }

    #[test]
    fn tanh_derivative_at_zero_is_one() {
        let mut tape = Tape::new();
        let x = tape.leaf(param(vec![0.0], vec![1]));
        let t = tape.tanh(x);
        let loss = tape.sum(t);
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(x).unwrap(), &[1.0]);
    }

    #[test]
    fn sq_dist_gradient_is_twice_difference() {
        let u = vec![0.3, -1.2, 2.0];
        let v = vec![1.0, 0.5, -0.25];
        let mut tape = Tape::new();
        let a = tape.leaf(param(u.clone(), vec![3]));
        let b = tape.constant(Tensor::vector(v.clone()));
        let d = tape.sq_dist(a, b).unwrap();
        let loss = tape.sum(d);
        let grads = tape.backward(loss).unwrap();
        for ((g, x), y) in grads.get(a).unwrap().iter().zip(&u).zip(&v) {
            assert!((g - 2.0 * (x - y)).abs() < 1e-15);
        }
    }

    #[test]
    fn concat_shapes() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::vector(vec![1.0, 2.0]));
        let b = tape.constant(Tensor::vector(vec![3.0, 4.0]));
        let rows = tape.concat(&[a, b], 0).unwrap();
        assert_eq!(tape.shape(rows), &[2, 2]);
        let cols = tape.concat(&[a, b], 1).unwrap();
        assert_eq!(tape.shape(cols), &[4]);
        let wide = tape.concat(&[rows, rows], 1).unwrap();
        assert_eq!(tape.shape(wide), &[2, 4]);
        assert_eq!(tape.value(wide).row(1), &[3.0, 4.0, 3.0, 4.0]);
    }
}
