//! Reverse-mode differentiation over a linear (Wengert) tape.
//!
//! Each op appends a node holding its output value and, when any input
//! requires a gradient, the information its backward rule needs. Nodes are
//! appended in execution order, so walking the tape backwards from the loss
//! is a valid reverse topological traversal.

use crate::error::{Error, Result};
use crate::kernels;
use crate::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
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
        m: usize,
        k: usize,
        n: usize,
    },
    BatchMatMul {
        a: Var,
        b: Var,
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
        trans_b: bool,
    },
    AddBias {
        x: Var,
        bias: Var,
    },
    Add {
        a: Var,
        b: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    Scale {
        x: Var,
        factor: f32,
    },
    Gelu {
        x: Var,
    },
    Softmax {
        x: Var,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        normalized: Vec<f32>,
        inv_std: Vec<f32>,
    },
    Gather {
        x: Var,
        index: Vec<usize>,
    },
    GatherRows {
        x: Var,
        rows: Vec<usize>,
    },
    OverwriteRows {
        base: Var,
        src: Var,
        rows: Vec<usize>,
    },
    MeanRows {
        x: Var,
        group: usize,
    },
    Sum {
        x: Var,
    },
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<f32>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    grad: Option<Vec<f32>>,
    requires_grad: bool,
    op: Op,
}

#[derive(Debug)]
pub struct Tape {
    nodes: Vec<Node>,
    recording: bool,
    backward_done: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Tape::new()
    }
}

impl Tape {
    /// A tape that records backward information.
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            recording: true,
            backward_done: false,
        }
    }

    /// A tape that only evaluates. Every node is treated as a constant.
    pub fn no_grad() -> Self {
        Tape {
            nodes: Vec::new(),
            recording: false,
            backward_done: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        let requires_grad = requires_grad && self.recording;
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn grad(&self, v: Var) -> Option<&[f32]> {
        self.nodes[v.0].grad.as_deref()
    }

    /// Gradient of `v` as a tensor, zero-filled if no gradient reached it.
    pub fn grad_tensor(&self, v: Var) -> Tensor {
        let value = &self.nodes[v.0].value;
        match &self.nodes[v.0].grad {
            Some(g) => Tensor::new(value.shape().to_vec(), g.clone()).expect("grad matches value"),
            None => Tensor::zeros(value.shape()),
        }
    }

    /// Clears all gradients so `backward` may run again.
    pub fn zero_grad(&mut self) {
        for node in &mut self.nodes {
            node.grad = None;
        }
        self.backward_done = false;
    }

    fn push(&mut self, value: Tensor, inputs: &[Var], op: Op) -> Var {
        let requires_grad = self.recording && inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        let op = if requires_grad { op } else { Op::Leaf };
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn data(&self, v: Var) -> &[f32] {
        self.nodes[v.0].value.data()
    }

    /// `[m×k] · [k×n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::Shape {
                op: "matmul",
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let out = kernels::matmul(self.data(a), self.data(b), m, k, n);
        let value = Tensor::new(vec![m, n], out)?;
        Ok(self.push(value, &[a, b], Op::MatMul { a, b, m, k, n }))
    }

    /// Batched `[B×m×k] · [B×k×n]`, or `[B×m×k] · [B×n×k]ᵀ` when `trans_b`.
    pub fn batch_matmul(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let mismatch = || Error::Shape {
            op: "batch_matmul",
            lhs: sa.to_vec(),
            rhs: sb.to_vec(),
        };
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] {
            return Err(mismatch());
        }
        let (batch, m, k) = (sa[0], sa[1], sa[2]);
        let n = if trans_b {
            if sb[2] != k {
                return Err(mismatch());
            }
            sb[1]
        } else {
            if sb[1] != k {
                return Err(mismatch());
            }
            sb[2]
        };
        let (da, db) = (self.data(a), self.data(b));
        let mut out = vec![0.0f32; batch * m * n];
        for i in 0..batch {
            let ai = &da[i * m * k..(i + 1) * m * k];
            let bi = &db[i * k * n..(i + 1) * k * n];
            let ci = &mut out[i * m * n..(i + 1) * m * n];
            if trans_b {
                kernels::matmul_a_bt_acc(ai, bi, ci, m, k, n);
            } else {
                kernels::matmul_acc(ai, bi, ci, m, k, n);
            }
        }
        let value = Tensor::new(vec![batch, m, n], out)?;
        Ok(self.push(
            value,
            &[a, b],
            Op::BatchMatMul {
                a,
                b,
                batch,
                m,
                k,
                n,
                trans_b,
            },
        ))
    }

    /// Adds `bias[C]` to every last-dim slice of `x[..., C]`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let c = self.value(x).last_dim();
        if self.shape(bias) != [c] {
            return Err(Error::Shape {
                op: "add_bias",
                lhs: self.shape(x).to_vec(),
                rhs: self.shape(bias).to_vec(),
            });
        }
        let mut out = self.data(x).to_vec();
        let b = self.data(bias);
        for row in out.chunks_exact_mut(c) {
            for (o, &bv) in row.iter_mut().zip(b) {
                *o += bv;
            }
        }
        let value = Tensor::new(self.shape(x).to_vec(), out)?;
        Ok(self.push(value, &[x, bias], Op::AddBias { x, bias }))
    }

    /// `x · w + b` for `x[T×in]`, `w[in×out]`, `b[out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let y = self.matmul(x, w)?;
        self.add_bias(y, b)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Shape {
                op,
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(x, y)| x + y)
            .collect();
        let value = Tensor::new(self.shape(a).to_vec(), out)?;
        Ok(self.push(value, &[a, b], Op::Add { a, b }))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let out = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(x, y)| x * y)
            .collect();
        let value = Tensor::new(self.shape(a).to_vec(), out)?;
        Ok(self.push(value, &[a, b], Op::Mul { a, b }))
    }

    pub fn scale(&mut self, x: Var, factor: f32) -> Var {
        let out = self.data(x).iter().map(|v| v * factor).collect();
        let value = Tensor::new(self.shape(x).to_vec(), out).expect("same shape");
        self.push(value, &[x], Op::Scale { x, factor })
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let out = self.data(x).iter().map(|&v| kernels::gelu(v)).collect();
        let value = Tensor::new(self.shape(x).to_vec(), out).expect("same shape");
        self.push(value, &[x], Op::Gelu { x })
    }

    /// Softmax over the last dimension.
    pub fn softmax(&mut self, x: Var) -> Var {
        let width = self.value(x).last_dim();
        let out = kernels::softmax_rows(self.data(x), width);
        let value = Tensor::new(self.shape(x).to_vec(), out).expect("same shape");
        self.push(value, &[x], Op::Softmax { x })
    }

    /// Per-token normalization over the last dimension, then `γ·x̂ + β`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f32) -> Result<Var> {
        let c = self.value(x).last_dim();
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(Error::Shape {
                op: "layer_norm",
                lhs: self.shape(x).to_vec(),
                rhs: self.shape(gamma).to_vec(),
            });
        }
        let xs = self.data(x);
        let (g, b) = (self.data(gamma), self.data(beta));
        let rows = xs.len() / c;
        let mut normalized = vec![0.0f32; xs.len()];
        let mut inv_std = vec![0.0f32; rows];
        let mut out = vec![0.0f32; xs.len()];
        for r in 0..rows {
            let row = &xs[r * c..(r + 1) * c];
            let mean = row.iter().sum::<f32>() / c as f32;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f32>() / c as f32;
            let rstd = 1.0 / (var + eps).sqrt();
            inv_std[r] = rstd;
            for j in 0..c {
                let xh = (row[j] - mean) * rstd;
                normalized[r * c + j] = xh;
                out[r * c + j] = xh * g[j] + b[j];
            }
        }
        let value = Tensor::new(self.shape(x).to_vec(), out)?;
        let op = if self.recording {
            Op::LayerNorm {
                x,
                gamma,
                beta,
                normalized,
                inv_std,
            }
        } else {
            Op::Leaf
        };
        Ok(self.push(value, &[x, gamma, beta], op))
    }

    /// `out[i] = x.flat[index[i]]`, reshaped to `shape`.
    pub fn gather(&mut self, x: Var, index: Vec<usize>, shape: &[usize]) -> Result<Var> {
        let src = self.data(x);
        if let Some(&bad) = index.iter().find(|&&i| i >= src.len()) {
            return Err(Error::Index {
                what: "gather source",
                index: bad,
                len: src.len(),
            });
        }
        let out = index.iter().map(|&i| src[i]).collect();
        let value = Tensor::new(shape.to_vec(), out)?;
        let op = if self.recording {
            Op::Gather { x, index }
        } else {
            Op::Leaf
        };
        Ok(self.push(value, &[x], op))
    }

    /// Selects whole rows of a 2-D tensor, `out[i] = x[rows[i]]`.
    pub fn gather_rows(&mut self, x: Var, rows: Vec<usize>) -> Result<Var> {
        let shape = self.shape(x);
        if shape.len() != 2 {
            return Err(Error::Shape {
                op: "gather_rows",
                lhs: shape.to_vec(),
                rhs: vec![],
            });
        }
        let (n_rows, c) = (shape[0], shape[1]);
        if let Some(&bad) = rows.iter().find(|&&r| r >= n_rows) {
            return Err(Error::Index {
                what: "gather_rows",
                index: bad,
                len: n_rows,
            });
        }
        let src = self.data(x);
        let mut out = Vec::with_capacity(rows.len() * c);
        for &r in &rows {
            out.extend_from_slice(&src[r * c..(r + 1) * c]);
        }
        let value = Tensor::new(vec![rows.len(), c], out)?;
        let op = if self.recording {
            Op::GatherRows { x, rows }
        } else {
            Op::Leaf
        };
        Ok(self.push(value, &[x], op))
    }

    /// Copy of `base` with `base[rows[i]] = src[i]`. Rows not listed pass
    /// through unchanged. `rows` must not repeat.
    pub fn overwrite_rows(&mut self, base: Var, src: Var, rows: Vec<usize>) -> Result<Var> {
        let (sb, ss) = (self.shape(base), self.shape(src));
        if sb.len() != 2 || ss.len() != 2 || sb[1] != ss[1] || ss[0] != rows.len() {
            return Err(Error::Shape {
                op: "overwrite_rows",
                lhs: sb.to_vec(),
                rhs: ss.to_vec(),
            });
        }
        let (n_rows, c) = (sb[0], sb[1]);
        if let Some(&bad) = rows.iter().find(|&&r| r >= n_rows) {
            return Err(Error::Index {
                what: "overwrite_rows",
                index: bad,
                len: n_rows,
            });
        }
        let mut out = self.data(base).to_vec();
        let s = self.data(src);
        for (i, &r) in rows.iter().enumerate() {
            out[r * c..(r + 1) * c].copy_from_slice(&s[i * c..(i + 1) * c]);
        }
        let value = Tensor::new(vec![n_rows, c], out)?;
        let op = if self.recording {
            Op::OverwriteRows { base, src, rows }
        } else {
            Op::Leaf
        };
        Ok(self.push(value, &[base, src], op))
    }

    /// Averages consecutive groups of `group` rows: `[G·group × C] → [G × C]`.
    pub fn mean_rows(&mut self, x: Var, group: usize) -> Result<Var> {
        let shape = self.shape(x);
        if shape.len() != 2 || group == 0 || !shape[0].is_multiple_of(group) {
            return Err(Error::Shape {
                op: "mean_rows",
                lhs: shape.to_vec(),
                rhs: vec![group],
            });
        }
        let (rows, c) = (shape[0], shape[1]);
        let groups = rows / group;
        let src = self.data(x);
        let mut out = vec![0.0f32; groups * c];
        for g in 0..groups {
            let acc = &mut out[g * c..(g + 1) * c];
            for r in 0..group {
                let row = &src[(g * group + r) * c..(g * group + r + 1) * c];
                for (a, &v) in acc.iter_mut().zip(row) {
                    *a += v;
                }
            }
            let inv = 1.0 / group as f32;
            for a in acc.iter_mut() {
                *a *= inv;
            }
        }
        let value = Tensor::new(vec![groups, c], out)?;
        Ok(self.push(value, &[x], Op::MeanRows { x, group }))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s: f32 = self.data(x).iter().sum();
        self.push(Tensor::scalar(s), &[x], Op::Sum { x })
    }

    /// Mean softmax cross-entropy of `logits[B×K]` against integer labels.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let shape = self.shape(logits);
        if shape.len() != 2 || shape[0] != labels.len() {
            return Err(Error::Shape {
                op: "cross_entropy",
                lhs: shape.to_vec(),
                rhs: vec![labels.len()],
            });
        }
        let k = shape[1];
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(Error::Index {
                what: "class label",
                index: bad,
                len: k,
            });
        }
        let probs = kernels::softmax_rows(self.data(logits), k);
        let mut loss = 0.0f32;
        for (row, &label) in probs.chunks_exact(k).zip(labels) {
            // NaN must survive the clamp so divergence stays visible
            let p = row[label];
            loss -= if p.is_nan() {
                p
            } else {
                p.max(f32::MIN_POSITIVE)
            }
            .ln();
        }
        loss /= labels.len() as f32;
        let op = Op::CrossEntropy {
            logits,
            labels: labels.to_vec(),
            probs,
        };
        Ok(self.push(Tensor::scalar(loss), &[logits], op))
    }

    /// Accumulates d`loss`/d`v` into every node that requires a gradient.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_done {
            return Err(Error::Autodiff(
                "backward already ran on this tape; call zero_grad first".into(),
            ));
        }
        if self.nodes[loss.0].value.numel() != 1 {
            return Err(Error::Autodiff(format!(
                "loss must be scalar, got shape {:?}",
                self.nodes[loss.0].value.shape()
            )));
        }
        if !self.nodes[loss.0].requires_grad {
            return Err(Error::Autodiff(
                "loss is detached from every parameter".into(),
            ));
        }
        self.backward_done = true;
        self.nodes[loss.0].grad = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad || matches!(self.nodes[i].op, Op::Leaf) {
                continue;
            }
            let Some(grad) = self.nodes[i].grad.take() else {
                continue;
            };
            self.propagate(i, &grad);
            self.nodes[i].grad = Some(grad);
        }
        Ok(())
    }

    /// Adds `delta` into the gradient buffer of `v`, if it wants one.
    fn accumulate(&mut self, v: Var, delta: impl FnOnce(&mut [f32])) {
        let node = &mut self.nodes[v.0];
        if !node.requires_grad {
            return;
        }
        let n = node.value.numel();
        let g = node.grad.get_or_insert_with(|| vec![0.0; n]);
        delta(g);
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn propagate(&mut self, i: usize, dy: &[f32]) {
        // Temporarily move the op out so its saved state can be borrowed while
        // other nodes are mutated.
        let op = std::mem::replace(&mut self.nodes[i].op, Op::Leaf);
        match &op {
            Op::Leaf => {}
            &Op::MatMul { a, b, m, k, n } => {
                if self.wants(a) {
                    let bv = self.data(b).to_vec();
                    self.accumulate(a, |g| kernels::matmul_a_bt_acc(dy, &bv, g, m, n, k));
                }
                if self.wants(b) {
                    let av = self.data(a).to_vec();
                    self.accumulate(b, |g| kernels::matmul_at_b_acc(&av, dy, g, m, k, n));
                }
            }
            &Op::BatchMatMul {
                a,
                b,
                batch,
                m,
                k,
                n,
                trans_b,
            } => {
                if self.wants(a) {
                    let bv = self.data(b).to_vec();
                    self.accumulate(a, |g| {
                        for t in 0..batch {
                            let dyt = &dy[t * m * n..(t + 1) * m * n];
                            let bt = &bv[t * k * n..(t + 1) * k * n];
                            let gt = &mut g[t * m * k..(t + 1) * m * k];
                            if trans_b {
                                // C = A·Bᵀ, B is [n×k]: dA = dC·B
                                kernels::matmul_acc(dyt, bt, gt, m, n, k);
                            } else {
                                kernels::matmul_a_bt_acc(dyt, bt, gt, m, n, k);
                            }
                        }
                    });
                }
                if self.wants(b) {
                    let av = self.data(a).to_vec();
                    self.accumulate(b, |g| {
                        for t in 0..batch {
                            let dyt = &dy[t * m * n..(t + 1) * m * n];
                            let at = &av[t * m * k..(t + 1) * m * k];
                            let gt = &mut g[t * k * n..(t + 1) * k * n];
                            if trans_b {
                                // dB = dCᵀ·A, [n×m]·[m×k]
                                kernels::matmul_at_b_acc(dyt, at, gt, m, n, k);
                            } else {
                                kernels::matmul_at_b_acc(at, dyt, gt, m, k, n);
                            }
                        }
                    });
                }
            }
            &Op::AddBias { x, bias } => {
                self.accumulate(x, |g| add_into(g, dy));
                let c = self.value(bias).numel();
                self.accumulate(bias, |g| {
                    for row in dy.chunks_exact(c) {
                        add_into(g, row);
                    }
                });
            }
            &Op::Add { a, b } => {
                self.accumulate(a, |g| add_into(g, dy));
                self.accumulate(b, |g| add_into(g, dy));
            }
            &Op::Mul { a, b } => {
                if self.wants(a) {
                    let bv = self.data(b).to_vec();
                    self.accumulate(a, |g| {
                        for ((gi, &d), &bi) in g.iter_mut().zip(dy).zip(&bv) {
                            *gi += d * bi;
                        }
                    });
                }
                if self.wants(b) {
                    let av = self.data(a).to_vec();
                    self.accumulate(b, |g| {
                        for ((gi, &d), &ai) in g.iter_mut().zip(dy).zip(&av) {
                            *gi += d * ai;
                        }
                    });
                }
            }
            &Op::Scale { x, factor } => {
                self.accumulate(x, |g| {
                    for (gi, &d) in g.iter_mut().zip(dy) {
                        *gi += d * factor;
                    }
                });
            }
            &Op::Gelu { x } => {
                let xv = self.data(x).to_vec();
                self.accumulate(x, |g| {
                    for ((gi, &d), &xi) in g.iter_mut().zip(dy).zip(&xv) {
                        *gi += d * kernels::gelu_grad(xi);
                    }
                });
            }
            &Op::Softmax { x } => {
                let y = self.nodes[i].value.data().to_vec();
                let width = self.nodes[i].value.last_dim();
                self.accumulate(x, |g| {
                    for ((gr, yr), dr) in g
                        .chunks_exact_mut(width)
                        .zip(y.chunks_exact(width))
                        .zip(dy.chunks_exact(width))
                    {
                        let dot: f32 = yr.iter().zip(dr).map(|(a, b)| a * b).sum();
                        for ((gi, &yi), &di) in gr.iter_mut().zip(yr).zip(dr) {
                            *gi += yi * (di - dot);
                        }
                    }
                });
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                normalized,
                inv_std,
            } => {
                let (x, gamma, beta) = (*x, *gamma, *beta);
                let c = self.value(gamma).numel();
                if self.wants(x) {
                    let gv = self.data(gamma).to_vec();
                    self.accumulate(x, |g| {
                        for (r, &rstd) in inv_std.iter().enumerate() {
                            let xh = &normalized[r * c..(r + 1) * c];
                            let d = &dy[r * c..(r + 1) * c];
                            let mut mean_dxh = 0.0f32;
                            let mut mean_dxh_xh = 0.0f32;
                            for j in 0..c {
                                let dxh = d[j] * gv[j];
                                mean_dxh += dxh;
                                mean_dxh_xh += dxh * xh[j];
                            }
                            mean_dxh /= c as f32;
                            mean_dxh_xh /= c as f32;
                            for j in 0..c {
                                let dxh = d[j] * gv[j];
                                g[r * c + j] += rstd * (dxh - mean_dxh - xh[j] * mean_dxh_xh);
                            }
                        }
                    });
                }
                self.accumulate(gamma, |g| {
                    for (xh, d) in normalized.chunks_exact(c).zip(dy.chunks_exact(c)) {
                        for j in 0..c {
                            g[j] += d[j] * xh[j];
                        }
                    }
                });
                self.accumulate(beta, |g| {
                    for d in dy.chunks_exact(c) {
                        add_into(g, d);
                    }
                });
            }
            Op::Gather { x, index } => {
                self.accumulate(*x, |g| {
                    for (&src, &d) in index.iter().zip(dy) {
                        g[src] += d;
                    }
                });
            }
            Op::GatherRows { x, rows } => {
                let c = self.value(*x).last_dim();
                self.accumulate(*x, |g| {
                    for (i, &r) in rows.iter().enumerate() {
                        add_into(&mut g[r * c..(r + 1) * c], &dy[i * c..(i + 1) * c]);
                    }
                });
            }
            Op::OverwriteRows { base, src, rows } => {
                let c = self.value(*base).last_dim();
                self.accumulate(*base, |g| {
                    let mut masked = dy.to_vec();
                    for &r in rows {
                        masked[r * c..(r + 1) * c].fill(0.0);
                    }
                    add_into(g, &masked);
                });
                self.accumulate(*src, |g| {
                    for (i, &r) in rows.iter().enumerate() {
                        add_into(&mut g[i * c..(i + 1) * c], &dy[r * c..(r + 1) * c]);
                    }
                });
            }
            &Op::MeanRows { x, group } => {
                let c = self.value(x).last_dim();
                let inv = 1.0 / group as f32;
                self.accumulate(x, |g| {
                    for (r, row) in g.chunks_exact_mut(c).enumerate() {
                        let d = &dy[(r / group) * c..(r / group + 1) * c];
                        for (gi, &di) in row.iter_mut().zip(d) {
                            *gi += di * inv;
                        }
                    }
                });
            }
            &Op::Sum { x } => {
                let d = dy[0];
                self.accumulate(x, |g| {
                    for gi in g.iter_mut() {
                        *gi += d;
                    }
                });
            }
            Op::CrossEntropy {
                logits,
                labels,
                probs,
            } => {
                let k = self.value(*logits).last_dim();
                let scale = dy[0] / labels.len() as f32;
                self.accumulate(*logits, |g| {
                    for (b, &label) in labels.iter().enumerate() {
                        for j in 0..k {
                            let target = if j == label { 1.0 } else { 0.0 };
                            g[b * k + j] += scale * (probs[b * k + j] - target);
                        }
                    }
                });
            }
        }
        self.nodes[i].op = op;
    }
}

fn add_into(dst: &mut [f32], src: &[f32]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}
