//! Reverse-mode automatic differentiation on a linear tape.
//!
//! Every operation appends a node holding its forward value and the inputs
//! needed to run its vector-Jacobian product. `Tape::backward` walks the nodes
//! in reverse, accumulating gradients only through nodes that require them.

use crate::error::{Error, Result};
use crate::tensor::{self, Tensor, COSINE_EPS};

const LAYER_NORM_EPS: f64 = 1e-5;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    MatMulTn(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Sigmoid(Var),
    Gelu(Var),
    SoftmaxRows(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    MeanRows(Var),
    Cosine(Var, Var),
    Dot(Var, Var),
    Sum(Var),
    Stack(Vec<Var>),
    Reshape(Var),
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(Option::take)
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

    /// Record a leaf. Gradients are accumulated for it when `requires_grad`.
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
        self.nodes[v.0].requires_grad
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

    fn dims(&self, v: Var, what: &str) -> Result<(usize, usize)> {
        self.value(v)
            .matrix_dims()
            .map_err(|e| Error::dim(format!("{what}: {e}")))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims(a, "matmul lhs")?;
        let (k2, n) = self.dims(b, "matmul rhs")?;
        if k != k2 {
            return Err(Error::dim(format!("matmul {m}×{k} by {k2}×{n}")));
        }
        let out = tensor::matmul(self.value(a).data(), self.value(b).data(), m, k, n);
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMul(a, b), rg))
    }

    /// `a · bᵀ`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims(a, "matmul_nt lhs")?;
        let (n, k2) = self.dims(b, "matmul_nt rhs")?;
        if k != k2 {
            return Err(Error::dim(format!("matmul_nt {m}×{k} by ({n}×{k2})ᵀ")));
        }
        let out = tensor::matmul_nt(self.value(a).data(), self.value(b).data(), m, k, n);
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMulNt(a, b), rg))
    }

    /// `aᵀ · b`.
    pub fn matmul_tn(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims(a, "matmul_tn lhs")?;
        let (m2, n) = self.dims(b, "matmul_tn rhs")?;
        if m != m2 {
            return Err(Error::dim(format!("matmul_tn ({m}×{k})ᵀ by {m2}×{n}")));
        }
        let out = tensor::matmul_tn(self.value(a).data(), self.value(b).data(), m, k, n);
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(Tensor::new(vec![k, n], out)?, Op::MatMulTn(a, b), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(Error::dim(format!(
                "add {:?} and {:?}",
                va.shape(),
                vb.shape()
            )));
        }
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| x + y).collect();
        let value = Tensor::new(va.shape().to_vec(), data)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(value, Op::Add(a, b), rg))
    }

    /// Add a length-`n` vector to every row of an `m×n` matrix.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (m, n) = self.dims(x, "add_row")?;
        let vb = self.value(bias);
        if vb.len() != n {
            return Err(Error::dim(format!("add_row: bias of {} for {n} columns", vb.len())));
        }
        let b = vb.data();
        let mut data = self.value(x).data().to_vec();
        for r in 0..m {
            for (o, bv) in data[r * n..(r + 1) * n].iter_mut().zip(b) {
                *o += bv;
            }
        }
        let rg = self.any_grad(&[x, bias]);
        Ok(self.push(Tensor::new(vec![m, n], data)?, Op::AddRow(x, bias), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(Error::dim(format!(
                "mul {:?} and {:?}",
                va.shape(),
                vb.shape()
            )));
        }
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| x * y).collect();
        let value = Tensor::new(va.shape().to_vec(), data)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(value, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let v = self.value(x);
        let value = Tensor::new(v.shape().to_vec(), v.data().iter().map(|x| x * c).collect())
            .expect("same shape");
        let rg = self.any_grad(&[x]);
        self.push(value, Op::Scale(x, c), rg)
    }

    fn map(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let v = self.value(x);
        let value = Tensor::new(v.shape().to_vec(), v.data().iter().map(|&x| f(x)).collect())
            .expect("same shape");
        let rg = self.any_grad(&[x]);
        self.push(value, op, rg)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.map(x, tensor::sigmoid, Op::Sigmoid(x))
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        self.map(x, tensor::gelu, Op::Gelu(x))
    }

    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let (m, n) = self.dims(x, "softmax_rows")?;
        let mut data = self.value(x).data().to_vec();
        for r in 0..m {
            tensor::softmax_in_place(&mut data[r * n..(r + 1) * n]);
        }
        let rg = self.any_grad(&[x]);
        Ok(self.push(Tensor::new(vec![m, n], data)?, Op::SoftmaxRows(x), rg))
    }

    /// Row-wise layer normalization with affine `gamma`, `beta` (length `n`).
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let (m, n) = self.dims(x, "layer_norm")?;
        if self.value(gamma).len() != n || self.value(beta).len() != n {
            return Err(Error::dim(format!("layer_norm affine params must have length {n}")));
        }
        let xs = self.value(x).data();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut xhat = vec![0.0; m * n];
        let mut inv_std = vec![0.0; m];
        let mut out = vec![0.0; m * n];
        for r in 0..m {
            let row = &xs[r * n..(r + 1) * n];
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            inv_std[r] = is;
            for c in 0..n {
                let h = (row[c] - mean) * is;
                xhat[r * n + c] = h;
                out[r * n + c] = g[c] * h + b[c];
            }
        }
        let rg = self.any_grad(&[x, gamma, beta]);
        let op = Op::LayerNorm {
            x,
            gamma,
            beta,
            xhat,
            inv_std,
        };
        Ok(self.push(Tensor::new(vec![m, n], out)?, op, rg))
    }

    /// Column means of an `m×n` matrix, giving a length-`n` vector.
    pub fn mean_rows(&mut self, x: Var) -> Result<Var> {
        let (m, n) = self.dims(x, "mean_rows")?;
        if m == 0 || n == 0 {
            return Err(Error::dim("mean over an empty matrix"));
        }
        let out = tensor::mean_rows(self.value(x).data(), m, n);
        let rg = self.any_grad(&[x]);
        Ok(self.push(Tensor::vector(out), Op::MeanRows(x), rg))
    }

    pub fn cosine(&mut self, u: Var, v: Var) -> Result<Var> {
        let c = tensor::cosine_similarity(self.value(u).data(), self.value(v).data())?;
        let rg = self.any_grad(&[u, v]);
        Ok(self.push(Tensor::scalar(c), Op::Cosine(u, v), rg))
    }

    pub fn dot(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.len() != vb.len() {
            return Err(Error::dim(format!("dot of {} and {} values", va.len(), vb.len())));
        }
        let d = tensor::dot(va.data(), vb.data());
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(Tensor::scalar(d), Op::Dot(a, b), rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        let rg = self.any_grad(&[x]);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    /// Gather single-element vars into one tensor of the given shape.
    pub fn stack(&mut self, items: &[Var], shape: Vec<usize>) -> Result<Var> {
        let data = items
            .iter()
            .map(|&v| self.value(v).item())
            .collect::<Result<Vec<_>>>()?;
        let value = Tensor::new(shape, data)?;
        let rg = self.any_grad(items);
        Ok(self.push(value, Op::Stack(items.to_vec()), rg))
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape)?;
        let rg = self.any_grad(&[x]);
        Ok(self.push(value, Op::Reshape(x), rg))
    }

    /// Mean over rows of `-log softmax(logits_row)[target]`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let (m, n) = self.dims(logits, "cross_entropy")?;
        if targets.len() != m {
            return Err(Error::dim(format!("{} targets for {m} rows", targets.len())));
        }
        if let Some(&t) = targets.iter().find(|&&t| t >= n) {
            return Err(Error::arg(format!("target column {t} out of range for {n} columns")));
        }
        let mut probs = self.value(logits).data().to_vec();
        let mut loss = 0.0;
        for (r, &t) in targets.iter().enumerate() {
            let row = &mut probs[r * n..(r + 1) * n];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            loss += lse - row[t];
            tensor::softmax_in_place(row);
        }
        loss /= m as f64;
        let rg = self.any_grad(&[logits]);
        let op = Op::CrossEntropy {
            logits,
            targets: targets.to_vec(),
            probs,
        };
        Ok(self.push(Tensor::scalar(loss), op, rg))
    }

    /// `softmax(Q Kᵀ / √d) V` with a row-wise softmax.
    pub fn scaled_dot_attention(&mut self, q: Var, k: Var, v: Var) -> Result<Var> {
        let (_, d) = self.dims(q, "attention queries")?;
        let (nk, dk) = self.dims(k, "attention keys")?;
        let (nv, _) = self.dims(v, "attention values")?;
        if d != dk {
            return Err(Error::dim(format!("query width {d} vs key width {dk}")));
        }
        if nk != nv {
            return Err(Error::dim(format!("{nk} keys but {nv} values")));
        }
        if nk == 0 {
            return Err(Error::dim("attention over zero keys"));
        }
        let logits = self.matmul_nt(q, k)?;
        let logits = self.scale(logits, 1.0 / (d as f64).sqrt());
        let weights = self.softmax_rows(logits)?;
        self.matmul(weights, v)
    }

    /// Gradients of the scalar `root` with respect to every node that needs one.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        let rv = self.value(root);
        if rv.len() != 1 {
            return Err(Error::dim(format!(
                "backward from non-scalar of shape {:?}",
                rv.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; root.0 + 1];
        grads[root.0] = Some(vec![1.0]);

        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(node, &g, &mut grads);
            grads[i] = Some(g);
        }

        let grads = grads
            .into_iter()
            .enumerate()
            .map(|(i, g)| {
                g.map(|g| Tensor::new(self.nodes[i].value.shape().to_vec(), g).expect("grad shape"))
            })
            .collect();
        Ok(Gradients { grads })
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let val = |v: Var| self.nodes[v.0].value.data();
        let needs = |v: Var| self.nodes[v.0].requires_grad;
        let mut acc = |v: Var, delta: Vec<f64>| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => existing.iter_mut().zip(delta).for_each(|(e, d)| *e += d),
                slot @ None => *slot = Some(delta),
            }
        };
        let mdims = |v: Var| self.nodes[v.0].value.matrix_dims().expect("matrix");

        match &node.op {
            Op::Leaf => {}
            &Op::MatMul(a, b) => {
                let (m, k) = mdims(a);
                let (_, n) = mdims(b);
                if needs(a) {
                    acc(a, tensor::matmul_nt(g, val(b), m, n, k));
                }
                if needs(b) {
                    acc(b, tensor::matmul_tn(val(a), g, m, k, n));
                }
            }
            &Op::MatMulNt(a, b) => {
                let (m, k) = mdims(a);
                let (n, _) = mdims(b);
                if needs(a) {
                    acc(a, tensor::matmul(g, val(b), m, n, k));
                }
                if needs(b) {
                    acc(b, tensor::matmul_tn(g, val(a), m, n, k));
                }
            }
            &Op::MatMulTn(a, b) => {
                let (m, k) = mdims(a);
                let (_, n) = mdims(b);
                if needs(a) {
                    acc(a, tensor::matmul_nt(val(b), g, m, n, k));
                }
                if needs(b) {
                    acc(b, tensor::matmul(val(a), g, m, k, n));
                }
            }
            &Op::Add(a, b) => {
                acc(a, g.to_vec());
                acc(b, g.to_vec());
            }
            &Op::AddRow(x, bias) => {
                let (m, n) = mdims(x);
                acc(x, g.to_vec());
                if needs(bias) {
                    acc(bias, tensor::mean_rows(g, m, n).iter().map(|v| v * m as f64).collect());
                }
            }
            &Op::Mul(a, b) => {
                if needs(a) {
                    acc(a, g.iter().zip(val(b)).map(|(g, y)| g * y).collect());
                }
                if needs(b) {
                    acc(b, g.iter().zip(val(a)).map(|(g, x)| g * x).collect());
                }
            }
            &Op::Scale(x, c) => acc(x, g.iter().map(|g| g * c).collect()),
            &Op::Sigmoid(x) => {
                let y = node.value.data();
                acc(x, g.iter().zip(y).map(|(g, y)| g * y * (1.0 - y)).collect());
            }
            &Op::Gelu(x) => {
                acc(x, g.iter().zip(val(x)).map(|(g, &x)| g * tensor::gelu_grad(x)).collect());
            }
            &Op::SoftmaxRows(x) => {
                let (m, n) = mdims(x);
                let y = node.value.data();
                let mut dx = vec![0.0; m * n];
                for r in 0..m {
                    let (gr, yr) = (&g[r * n..(r + 1) * n], &y[r * n..(r + 1) * n]);
                    let s = tensor::dot(gr, yr);
                    for c in 0..n {
                        dx[r * n + c] = yr[c] * (gr[c] - s);
                    }
                }
                acc(x, dx);
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let (m, n) = mdims(*x);
                let gm = val(*gamma);
                if needs(*gamma) {
                    let mut dg = vec![0.0; n];
                    for r in 0..m {
                        for c in 0..n {
                            dg[c] += g[r * n + c] * xhat[r * n + c];
                        }
                    }
                    acc(*gamma, dg);
                }
                if needs(*beta) {
                    acc(*beta, tensor::mean_rows(g, m, n).iter().map(|v| v * m as f64).collect());
                }
                if needs(*x) {
                    let nf = n as f64;
                    let mut dx = vec![0.0; m * n];
                    for r in 0..m {
                        let dxhat: Vec<f64> = (0..n).map(|c| g[r * n + c] * gm[c]).collect();
                        let xh = &xhat[r * n..(r + 1) * n];
                        let sum_d: f64 = dxhat.iter().sum();
                        let sum_dx: f64 = tensor::dot(&dxhat, xh);
                        for c in 0..n {
                            dx[r * n + c] =
                                inv_std[r] / nf * (nf * dxhat[c] - sum_d - xh[c] * sum_dx);
                        }
                    }
                    acc(*x, dx);
                }
            }
            &Op::MeanRows(x) => {
                let (m, n) = mdims(x);
                let inv = 1.0 / m as f64;
                let mut dx = vec![0.0; m * n];
                for r in 0..m {
                    for c in 0..n {
                        dx[r * n + c] = g[c] * inv;
                    }
                }
                acc(x, dx);
            }
            &Op::Cosine(u, v) => {
                let (uu, vv) = (val(u), val(v));
                let (nu, nv) = (tensor::norm(uu), tensor::norm(vv));
                let den = nu * nv + COSINE_EPS;
                let d = tensor::dot(uu, vv);
                let g0 = g[0];
                let grad_side = |a: &[f64], b: &[f64], na: f64, nb: f64| -> Vec<f64> {
                    let radial = if na > 0.0 { d * nb / (den * den * na) } else { 0.0 };
                    a.iter()
                        .zip(b)
                        .map(|(ai, bi)| g0 * (bi / den - radial * ai))
                        .collect()
                };
                if needs(u) {
                    acc(u, grad_side(uu, vv, nu, nv));
                }
                if needs(v) {
                    acc(v, grad_side(vv, uu, nv, nu));
                }
            }
            &Op::Dot(a, b) => {
                if needs(a) {
                    acc(a, val(b).iter().map(|y| g[0] * y).collect());
                }
                if needs(b) {
                    acc(b, val(a).iter().map(|x| g[0] * x).collect());
                }
            }
            &Op::Sum(x) => acc(x, vec![g[0]; self.nodes[x.0].value.len()]),
            Op::Stack(items) => {
                for (i, &v) in items.iter().enumerate() {
                    acc(v, vec![g[i]]);
                }
            }
            &Op::Reshape(x) => acc(x, g.to_vec()),
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let (m, n) = mdims(*logits);
                let scale = g[0] / m as f64;
                let mut dx: Vec<f64> = probs.iter().map(|p| p * scale).collect();
                for (r, &t) in targets.iter().enumerate() {
                    dx[r * n + t] -= scale;
                }
                acc(*logits, dx);
            }
        }
    }
}

/// Attention on plain tensors, for callers that do not need gradients.
pub fn scaled_dot_attention(q: &Tensor, k: &Tensor, v: &Tensor) -> Result<Tensor> {
    let mut tape = Tape::new();
    let (q, k, v) = (
        tape.constant(q.clone()),
        tape.constant(k.clone()),
        tape.constant(v.clone()),
    );
    let out = tape.scaled_dot_attention(q, k, v)?;
    Ok(tape.value(out).clone())
}
