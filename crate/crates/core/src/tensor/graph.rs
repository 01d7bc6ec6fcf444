//! Computation graph (Wengert tape) with reverse-mode gradients.
//!
//! Nodes are appended in creation order, which is a valid topological
//! order, so the backward pass is a single reverse sweep and the
//! traversal order is deterministic.

use super::{FlopCounter, Result, Tensor, TensorError};

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
        trans_b: bool,
    },
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Softmax {
        x: Var,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    Concat {
        parts: Vec<Var>,
        axis: usize,
    },
    Slice {
        x: Var,
        axis: usize,
        start: usize,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<f64>,
    },
    Sum(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

pub const LAYER_NORM_EPS: f64 = 1e-6;

/// Records operations on tensors for later differentiation.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    flops: FlopCounter,
    scope: Vec<String>,
}

fn dims2(t: &Tensor, what: &str) -> Result<(usize, usize)> {
    match t.shape() {
        [m, n] => Ok((*m, *n)),
        s => Err(TensorError::Shape(format!(
            "{what} expects a 2-D tensor, got {s:?}"
        ))),
    }
}

/// `c (+)= a · b` with optional transposition of `b`; all row-major.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_trans: bool,
    b: &[f64],
    b_trans: bool,
    c: &mut [f64],
    accumulate: bool,
) {
    // a is m×k (stored k×m when transposed), b is k×n (stored n×k when transposed)
    let (rsa, csa) = if a_trans {
        (1, m as isize)
    } else {
        (k as isize, 1)
    };
    let (rsb, csb) = if b_trans {
        (1, k as isize)
    } else {
        (n as isize, 1)
    };
    let beta = if accumulate { 1.0 } else { 0.0 };
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

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
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

    /// Adds a leaf. Gradients are computed for it when `requires_grad`.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn flops(&self) -> &FlopCounter {
        &self.flops
    }

    pub fn push_scope(&mut self, name: impl Into<String>) {
        self.scope.push(name.into());
    }

    pub fn pop_scope(&mut self) {
        self.scope.pop();
    }

    fn tag(&self) -> String {
        if self.scope.is_empty() {
            "matmul".to_string()
        } else {
            self.scope.join(".")
        }
    }

    /// `a · b` for `a: [m×k]`, `b: [k×n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false)
    }

    /// `a · bᵀ` for `a: [m×k]`, `b: [n×k]`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (m, k) = dims2(self.value(a), "matmul")?;
        let (b0, b1) = dims2(self.value(b), "matmul")?;
        let (kb, n) = if trans_b { (b1, b0) } else { (b0, b1) };
        if k != kb {
            return Err(TensorError::Shape(format!(
                "matmul inner dimensions differ: [{m}×{k}] · [{kb}×{n}]"
            )));
        }
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            self.value(a).data(),
            false,
            self.value(b).data(),
            trans_b,
            &mut out,
            false,
        );
        let tag = self.tag();
        self.flops.record(&tag, 2 * (m * k * n) as u64);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(
            Tensor::new(vec![m, n], out)?,
            Op::MatMul { a, b, trans_b },
            rg,
        ))
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(TensorError::Shape(format!(
                "{what}: shapes {:?} and {:?} differ",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x + y)
            .collect();
        let value = Tensor::new(self.value(a).shape().to_vec(), data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Add(a, b), rg))
    }

    /// Adds a row vector (length = last axis of `a`) to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let n = self.value(a).cols();
        if self.value(row).len() != n {
            return Err(TensorError::Shape(format!(
                "add_row: row of length {} for last axis {n}",
                self.value(row).len()
            )));
        }
        let r = self.value(row).data();
        let data = self
            .value(a)
            .data()
            .iter()
            .enumerate()
            .map(|(i, x)| x + r[i % n])
            .collect();
        let value = Tensor::new(self.value(a).shape().to_vec(), data)?;
        let rg = self.rg(a) || self.rg(row);
        Ok(self.push(value, Op::AddRow(a, row), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x * y)
            .collect();
        let value = Tensor::new(self.value(a).shape().to_vec(), data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let data = self.value(a).data().iter().map(|x| x * s).collect();
        let value = Tensor::new(self.value(a).shape().to_vec(), data).expect("same shape");
        let rg = self.rg(a);
        self.push(value, Op::Scale(a, s), rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let data = self
            .value(a)
            .data()
            .iter()
            .map(|&x| if x > 0.0 { x } else { 0.0 })
            .collect();
        let value = Tensor::new(self.value(a).shape().to_vec(), data).expect("same shape");
        let rg = self.rg(a);
        self.push(value, Op::Relu(a), rg)
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        self.softmax_masked(x, None)
    }

    /// Softmax over the last axis where row `i` only sees columns
    /// `j <= i + offset`; masked entries get probability exactly zero.
    pub fn softmax_causal(&mut self, x: Var, offset: usize) -> Result<Var> {
        self.softmax_masked(x, Some(offset))
    }

    fn softmax_masked(&mut self, x: Var, causal: Option<usize>) -> Result<Var> {
        let t = self.value(x);
        let n = t.cols();
        if n == 0 {
            return Err(TensorError::Input("softmax over an empty axis".into()));
        }
        let rows = t.len() / n;
        let mut out = vec![0.0; t.len()];
        for r in 0..rows {
            let src = &t.data()[r * n..(r + 1) * n];
            let visible = match causal {
                Some(off) => (r + off + 1).min(n),
                None => n,
            };
            let dst = &mut out[r * n..(r + 1) * n];
            let max = src[..visible]
                .iter()
                .copied()
                .fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for j in 0..visible {
                let e = (src[j] - max).exp();
                dst[j] = e;
                sum += e;
            }
            for v in &mut dst[..visible] {
                *v /= sum;
            }
        }
        let value = Tensor::new(t.shape().to_vec(), out)?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::Softmax { x }, rg))
    }

    /// Layer normalization over the last axis followed by `gamma`/`beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let t = self.value(x);
        let n = t.cols();
        if self.value(gamma).len() != n || self.value(beta).len() != n {
            return Err(TensorError::Shape(format!(
                "layer_norm: scale/shift must have length {n}"
            )));
        }
        let rows = t.len() / n;
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut xhat = vec![0.0; t.len()];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; t.len()];
        for r in 0..rows {
            let src = &t.data()[r * n..(r + 1) * n];
            let mean = src.iter().sum::<f64>() / n as f64;
            let var = src.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let rs = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            rstd[r] = rs;
            for j in 0..n {
                let h = (src[j] - mean) * rs;
                xhat[r * n + j] = h;
                out[r * n + j] = h * g[j] + b[j];
            }
        }
        let value = Tensor::new(t.shape().to_vec(), out)?;
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        Ok(self.push(
            value,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            rg,
        ))
    }

    /// Gathers rows of `table` by id.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (v, d) = dims2(self.value(table), "embedding")?;
        if ids.is_empty() {
            return Err(TensorError::Input("embedding lookup with no ids".into()));
        }
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= v {
                return Err(TensorError::Input(format!(
                    "token id {id} outside table of {v} rows"
                )));
            }
            out.extend_from_slice(self.value(table).row(id));
        }
        let value = Tensor::new(vec![ids.len(), d], out)?;
        let rg = self.rg(table);
        Ok(self.push(
            value,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            rg,
        ))
    }

    /// Concatenates 2-D tensors along `axis` (0 = rows, 1 = columns).
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        if parts.is_empty() {
            return Err(TensorError::Input("concat of nothing".into()));
        }
        if axis > 1 {
            return Err(TensorError::Shape(format!(
                "concat axis {axis} on 2-D tensors"
            )));
        }
        let dims: Vec<(usize, usize)> = parts
            .iter()
            .map(|&p| dims2(self.value(p), "concat"))
            .collect::<Result<_>>()?;
        let value = if axis == 0 {
            let n = dims[0].1;
            if dims.iter().any(|d| d.1 != n) {
                return Err(TensorError::Shape(format!(
                    "concat rows: column counts differ {dims:?}"
                )));
            }
            let m = dims.iter().map(|d| d.0).sum();
            let mut out = Vec::with_capacity(m * n);
            for &p in parts {
                out.extend_from_slice(self.value(p).data());
            }
            Tensor::new(vec![m, n], out)?
        } else {
            let m = dims[0].0;
            if dims.iter().any(|d| d.0 != m) {
                return Err(TensorError::Shape(format!(
                    "concat cols: row counts differ {dims:?}"
                )));
            }
            let n: usize = dims.iter().map(|d| d.1).sum();
            let mut out = Vec::with_capacity(m * n);
            for r in 0..m {
                for &p in parts {
                    out.extend_from_slice(self.value(p).row(r));
                }
            }
            Tensor::new(vec![m, n], out)?
        };
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(
            value,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            rg,
        ))
    }

    /// Takes `len` rows (axis 0) or columns (axis 1) starting at `start`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let (m, n) = dims2(self.value(x), "slice")?;
        let extent = if axis == 0 { m } else { n };
        if axis > 1 || len == 0 || start + len > extent {
            return Err(TensorError::Shape(format!(
                "slice [{start}, {}) along axis {axis} of [{m}×{n}]",
                start + len
            )));
        }
        let t = self.value(x);
        let value = if axis == 0 {
            Tensor::new(
                vec![len, n],
                t.data()[start * n..(start + len) * n].to_vec(),
            )?
        } else {
            let mut out = Vec::with_capacity(m * len);
            for r in 0..m {
                out.extend_from_slice(&t.row(r)[start..start + len]);
            }
            Tensor::new(vec![m, len], out)?
        };
        let rg = self.rg(x);
        Ok(self.push(value, Op::Slice { x, axis, start }, rg))
    }

    /// Mean negative log-likelihood of integer `targets` under row-wise
    /// softmax of `logits: [n×V]`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let (n, v) = dims2(self.value(logits), "cross_entropy")?;
        if targets.len() != n {
            return Err(TensorError::Shape(format!(
                "{} targets for {n} rows",
                targets.len()
            )));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= v) {
            return Err(TensorError::Input(format!(
                "target id {bad} outside vocabulary of {v}"
            )));
        }
        let t = self.value(logits);
        let mut probs = vec![0.0; n * v];
        let mut loss = 0.0;
        for r in 0..n {
            let row = t.row(r);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for j in 0..v {
                let e = (row[j] - max).exp();
                probs[r * v + j] = e;
                sum += e;
            }
            for p in &mut probs[r * v..(r + 1) * v] {
                *p /= sum;
            }
            loss += sum.ln() + max - row[targets[r]];
        }
        let value = Tensor::scalar(loss / n as f64);
        let rg = self.rg(logits);
        Ok(self.push(
            value,
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            rg,
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).len() as f64;
        let s = self.sum(x);
        self.scale(s, 1.0 / n)
    }

    /// Sum of several scalars.
    pub fn add_all(&mut self, xs: &[Var]) -> Result<Var> {
        let (&first, rest) = xs
            .split_first()
            .ok_or_else(|| TensorError::Input("sum of no terms".into()))?;
        rest.iter().try_fold(first, |acc, &x| self.add(acc, x))
    }

    /// Populates gradients of every node reachable from the scalar `loss`.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(TensorError::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for id in (0..=loss.0).rev() {
            if !self.nodes[id].requires_grad {
                continue;
            }
            let Some(gout) = grads[id].take() else {
                continue;
            };
            self.backprop_node(id, &gout, &mut grads)?;
            grads[id] = Some(gout);
        }
        self.grads = grads;
        Ok(())
    }

    /// Gradient of the last [`Graph::backward`] call with respect to `v`.
    /// Nodes that require grad but were unreachable get a zero gradient.
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        if !self.rg(v) {
            return None;
        }
        let shape = self.value(v).shape().to_vec();
        match self.grads.get(v.0).and_then(Option::as_ref) {
            Some(g) => Some(Tensor::new(shape, g.clone()).expect("grad shape")),
            None => Some(Tensor::zeros(&shape)),
        }
    }

    fn backprop_node(&self, id: usize, gout: &[f64], grads: &mut [Option<Vec<f64>>]) -> Result<()> {
        let node = &self.nodes[id];
        let acc = |v: Var, g: Vec<f64>, grads: &mut [Option<Vec<f64>>]| {
            if !self.rg(v) {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => existing.iter_mut().zip(&g).for_each(|(e, x)| *e += x),
                slot => *slot = Some(g),
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b, trans_b } => {
                let (m, k) = dims2(self.value(*a), "matmul")?;
                let n = node.value.cols();
                if self.rg(*a) {
                    // dA = dC · Bᵀ  (or dC · B when b was used transposed)
                    let mut da = vec![0.0; m * k];
                    gemm(
                        m,
                        n,
                        k,
                        gout,
                        false,
                        self.value(*b).data(),
                        !trans_b,
                        &mut da,
                        false,
                    );
                    acc(*a, da, grads);
                }
                if self.rg(*b) {
                    let mut db = vec![0.0; k * n];
                    if *trans_b {
                        // B is n×k: dB = dCᵀ · A
                        gemm(
                            n,
                            m,
                            k,
                            gout,
                            true,
                            self.value(*a).data(),
                            false,
                            &mut db,
                            false,
                        );
                    } else {
                        gemm(
                            k,
                            m,
                            n,
                            self.value(*a).data(),
                            true,
                            gout,
                            false,
                            &mut db,
                            false,
                        );
                    }
                    acc(*b, db, grads);
                }
            }
            Op::Add(a, b) => {
                acc(*a, gout.to_vec(), grads);
                acc(*b, gout.to_vec(), grads);
            }
            Op::AddRow(a, row) => {
                acc(*a, gout.to_vec(), grads);
                if self.rg(*row) {
                    let n = self.value(*row).len();
                    let mut g = vec![0.0; n];
                    for (i, v) in gout.iter().enumerate() {
                        g[i % n] += v;
                    }
                    acc(*row, g, grads);
                }
            }
            Op::Mul(a, b) => {
                if self.rg(*a) {
                    let g = gout
                        .iter()
                        .zip(self.value(*b).data())
                        .map(|(g, y)| g * y)
                        .collect();
                    acc(*a, g, grads);
                }
                if self.rg(*b) {
                    let g = gout
                        .iter()
                        .zip(self.value(*a).data())
                        .map(|(g, x)| g * x)
                        .collect();
                    acc(*b, g, grads);
                }
            }
            Op::Scale(a, s) => acc(*a, gout.iter().map(|g| g * s).collect(), grads),
            Op::Relu(a) => {
                let g = gout
                    .iter()
                    .zip(self.value(*a).data())
                    .map(|(g, &x)| if x > 0.0 { *g } else { 0.0 })
                    .collect();
                acc(*a, g, grads);
            }
            Op::Softmax { x } => {
                let y = node.value.data();
                let n = node.value.cols();
                let mut g = vec![0.0; y.len()];
                for r in 0..y.len() / n {
                    let ys = &y[r * n..(r + 1) * n];
                    let gs = &gout[r * n..(r + 1) * n];
                    let dot: f64 = ys.iter().zip(gs).map(|(a, b)| a * b).sum();
                    for j in 0..n {
                        g[r * n + j] = ys[j] * (gs[j] - dot);
                    }
                }
                acc(*x, g, grads);
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let n = node.value.cols();
                let rows = xhat.len() / n;
                let gam = self.value(*gamma).data();
                if self.rg(*gamma) {
                    let mut gg = vec![0.0; n];
                    for i in 0..xhat.len() {
                        gg[i % n] += gout[i] * xhat[i];
                    }
                    acc(*gamma, gg, grads);
                }
                if self.rg(*beta) {
                    let mut gb = vec![0.0; n];
                    for (i, v) in gout.iter().enumerate() {
                        gb[i % n] += v;
                    }
                    acc(*beta, gb, grads);
                }
                if self.rg(*x) {
                    let mut gx = vec![0.0; xhat.len()];
                    for r in 0..rows {
                        let base = r * n;
                        let mut sum_g = 0.0;
                        let mut sum_gx = 0.0;
                        for j in 0..n {
                            let gh = gout[base + j] * gam[j];
                            sum_g += gh;
                            sum_gx += gh * xhat[base + j];
                        }
                        let inv_n = 1.0 / n as f64;
                        for j in 0..n {
                            let gh = gout[base + j] * gam[j];
                            gx[base + j] =
                                rstd[r] * (gh - inv_n * sum_g - xhat[base + j] * inv_n * sum_gx);
                        }
                    }
                    acc(*x, gx, grads);
                }
            }
            Op::Embedding { table, ids } => {
                let t = self.value(*table);
                let d = t.cols();
                let mut g = vec![0.0; t.len()];
                for (r, &id) in ids.iter().enumerate() {
                    for j in 0..d {
                        g[id * d + j] += gout[r * d + j];
                    }
                }
                acc(*table, g, grads);
            }
            Op::Concat { parts, axis } => {
                let total_cols = node.value.cols();
                let mut offset = 0;
                for &p in parts {
                    let (pm, pn) = dims2(self.value(p), "concat")?;
                    if self.rg(p) {
                        let g = if *axis == 0 {
                            gout[offset * pn..(offset + pm) * pn].to_vec()
                        } else {
                            let mut g = Vec::with_capacity(pm * pn);
                            for r in 0..pm {
                                g.extend_from_slice(
                                    &gout[r * total_cols + offset..r * total_cols + offset + pn],
                                );
                            }
                            g
                        };
                        acc(p, g, grads);
                    }
                    offset += if *axis == 0 { pm } else { pn };
                }
            }
            Op::Slice { x, axis, start } => {
                let (m, n) = dims2(self.value(*x), "slice")?;
                let mut g = vec![0.0; m * n];
                let (om, on) = dims2(&node.value, "slice")?;
                if *axis == 0 {
                    g[start * n..(start + om) * n].copy_from_slice(gout);
                } else {
                    for r in 0..m {
                        g[r * n + start..r * n + start + on]
                            .copy_from_slice(&gout[r * on..(r + 1) * on]);
                    }
                }
                acc(*x, g, grads);
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let v = self.value(*logits).cols();
                let n = targets.len();
                let scale = gout[0] / n as f64;
                let mut g: Vec<f64> = probs.iter().map(|p| p * scale).collect();
                for (r, &t) in targets.iter().enumerate() {
                    g[r * v + t] -= scale;
                }
                acc(*logits, g, grads);
            }
            Op::Sum(x) => {
                let n = self.value(*x).len();
                acc(*x, vec![gout[0]; n], grads);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(rows: &[&[f64]]) -> Tensor {
        Tensor::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    /// Scalar triple loop, independent of the gemm kernel.
    fn naive_matmul(a: &Tensor, b: &Tensor) -> Tensor {
        let (m, k, n) = (a.rows(), a.cols(), b.cols());
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                let mut s = 0.0;
                for p in 0..k {
                    s += a.at(i, p) * b.at(p, j);
                }
                out[i * n + j] = s;
            }
        }
        Tensor::new(vec![m, n], out).unwrap()
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let a = t(&[&[1.0, 2.0], &[3.0, 4.0]]);
        let b = t(&[&[5.0, 6.0], &[7.0, 8.0]]);
        let expected = naive_matmul(&a, &b);
        assert_eq!(expected.data(), &[19.0, 22.0, 43.0, 50.0]);
        let mut g = Graph::new();
        let (va, vb) = (g.constant(a), g.constant(b));
        let c = g.matmul(va, vb).unwrap();
        assert_eq!(g.value(c), &expected);
        assert_eq!(g.flops().total(), 2 * 2 * 2 * 2);
    }

    #[test]
    fn matmul_identity_and_zero() {
        let mut rng = rand::rng();
        let a = Tensor::rand_uniform(&[3, 4], -1.0, 1.0, &mut rng);
        let mut g = Graph::new();
        let va = g.constant(a.clone());
        let id = g.constant(Tensor::identity(4));
        let z = g.constant(Tensor::zeros(&[4, 2]));
        let ai = g.matmul(va, id).unwrap();
        let az = g.matmul(va, z).unwrap();
        assert_eq!(g.value(ai), &a);
        assert!(g.value(az).data().iter().all(|&v| v == 0.0));
        assert_eq!(g.flops().total(), 2 * 3 * 4 * 4 + 2 * 3 * 4 * 2);
    }

    #[test]
    fn matmul_shape_mismatch() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[2, 3]));
        assert!(matches!(g.matmul(a, b), Err(TensorError::Shape(_))));
        assert!(g.matmul_nt(a, b).is_ok());
    }

    #[test]
    fn softmax_uniform_and_normalized() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(&[1, 3]));
        let s = g.softmax(x).unwrap();
        for &v in g.value(s).data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let mut rng = rand::rng();
        let y = g.constant(Tensor::rand_uniform(&[5, 7], -30.0, 30.0, &mut rng));
        let s = g.softmax(y).unwrap();
        for r in 0..5 {
            let sum: f64 = g.value(s).row(r).iter().sum();
            assert!((sum - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn causal_softmax_masks_future() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(&[3, 3]));
        let s = g.softmax_causal(x, 0).unwrap();
        let v = g.value(s);
        assert_eq!(v.row(0), &[1.0, 0.0, 0.0]);
        assert_eq!(v.row(1), &[0.5, 0.5, 0.0]);
    }

    #[test]
    fn layer_norm_of_constant_row_is_zero() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::filled(&[2, 4], 3.5));
        let gamma = g.constant(Tensor::filled(&[4], 1.0));
        let beta = g.constant(Tensor::zeros(&[4]));
        let y = g.layer_norm(x, gamma, beta).unwrap();
        assert!(g.value(y).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn cross_entropy_uniform_is_ln_v() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(&[1, 8]));
        for target in 0..8 {
            let l = g.cross_entropy(x, &[target]).unwrap();
            assert!((g.value(l).item() - 8f64.ln()).abs() < 1e-12);
        }
        assert!((8f64.ln() - 2.0794).abs() < 1e-4);
        assert!(matches!(
            g.cross_entropy(x, &[8]),
            Err(TensorError::Input(_))
        ));
    }

    #[test]
    fn empty_axis_and_bad_ids_are_input_errors() {
        let mut g = Graph::new();
        let table = g.constant(Tensor::zeros(&[4, 2]));
        assert!(matches!(
            g.embedding(table, &[4]),
            Err(TensorError::Input(_))
        ));
        assert!(matches!(
            g.embedding(table, &[]),
            Err(TensorError::Input(_))
        ));
    }

    #[test]
    fn linear_gradient_is_outer_product() {
        // loss = sum(W·x): dW[i][j] = x[j]
        let mut g = Graph::new();
        let w = g.leaf(Tensor::zeros(&[3, 2]), true);
        let x = g.constant(t(&[&[2.0], &[-1.0]]));
        let y = g.matmul(w, x).unwrap();
        let loss = g.sum(y);
        g.backward(loss).unwrap();
        let gw = g.grad(w).unwrap();
        for i in 0..3 {
            assert_eq!(gw.row(i), &[2.0, -1.0]);
        }
        assert!(g.grad(x).is_none());
    }

    #[test]
    fn unrelated_parameter_gets_zero_grad() {
        let mut g = Graph::new();
        let w = g.leaf(Tensor::filled(&[2, 2], 1.0), true);
        let u = g.leaf(Tensor::filled(&[2], 1.0), true);
        let loss = g.sum(u);
        g.backward(loss).unwrap();
        assert!(g.grad(w).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn backward_needs_scalar() {
        let mut g = Graph::new();
        let w = g.leaf(Tensor::zeros(&[2, 2]), true);
        assert!(matches!(g.backward(w), Err(TensorError::Usage(_))));
    }

    #[test]
    fn concat_and_slice_roundtrip() {
        let mut g = Graph::new();
        let a = g.constant(t(&[&[1.0, 2.0], &[3.0, 4.0]]));
        let b = g.constant(t(&[&[5.0], &[6.0]]));
        let c = g.concat(&[a, b], 1).unwrap();
        assert_eq!(g.value(c).data(), &[1.0, 2.0, 5.0, 3.0, 4.0, 6.0]);
        let s = g.slice(c, 1, 2, 1).unwrap();
        assert_eq!(g.value(s), g.value(b));
        let r = g.concat(&[a, a], 0).unwrap();
        assert_eq!(g.value(r).shape(), &[4, 2]);
        assert!(g.slice(r, 0, 3, 2).is_err());
    }
}
