//! Dense f64 tensors with reverse-mode automatic differentiation.
//!
//! Every value in the engine is a [`Tensor`]: a row-major `Vec<f64>` plus a
//! shape. Tensors that participate in training carry `requires_grad` and
//! accumulate gradients when [`Tensor::backward`] runs on a scalar loss.
//! The graph is built eagerly: each op output keeps handles to its parents
//! and a closure that routes the output gradient back to them. Ops whose
//! inputs are all gradient-free record nothing, so frozen-weight forward
//! passes cost no tape.

use std::cell::RefCell;
use std::collections::HashSet;
use std::fmt;
use std::rc::Rc;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};

type BackwardFn = Box<dyn Fn(&[f64], &[Tensor])>;

struct Inner {
    data: Vec<f64>,
    shape: Vec<usize>,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
    parents: Vec<Tensor>,
    backward_fn: Option<BackwardFn>,
}

/// Shared handle to a tensor node. Cloning is cheap and aliases the node.
pub struct Tensor {
    inner: Rc<RefCell<Inner>>,
}

impl Clone for Tensor {
    fn clone(&self) -> Self {
        Tensor { inner: Rc::clone(&self.inner) }
    }
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let inner = self.inner.borrow();
        write!(
            f,
            "Tensor(shape={:?}, requires_grad={}, data[..4]={:?})",
            inner.shape,
            inner.requires_grad,
            &inner.data[..inner.data.len().min(4)]
        )
    }
}

// ── Construction ────────────────────────────────────────────────────

impl Tensor {
    /// Leaf tensor from raw data. Errors unless `product(shape) == data.len()`.
    pub fn new(data: Vec<f64>, shape: &[usize], requires_grad: bool) -> Result<Tensor> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::Shape(format!(
                "shape {:?} implies {} elements, got {}",
                shape,
                expected,
                data.len()
            )));
        }
        Ok(Self::leaf_node(data, shape.to_vec(), requires_grad))
    }

    pub fn zeros(shape: &[usize]) -> Tensor {
        let n: usize = shape.iter().product();
        Self::leaf_node(vec![0.0; n], shape.to_vec(), false)
    }

    pub fn full(shape: &[usize], value: f64) -> Tensor {
        let n: usize = shape.iter().product();
        Self::leaf_node(vec![value; n], shape.to_vec(), false)
    }

    pub fn scalar(value: f64) -> Tensor {
        Self::leaf_node(vec![value], vec![1], false)
    }

    /// Seeded Gaussian leaf with standard deviation `std`.
    pub fn randn<R: Rng>(shape: &[usize], std: f64, requires_grad: bool, rng: &mut R) -> Tensor {
        let n: usize = shape.iter().product();
        let dist = Normal::new(0.0, std).expect("std must be finite and non-negative");
        let data: Vec<f64> = (0..n).map(|_| dist.sample(rng)).collect();
        Self::leaf_node(data, shape.to_vec(), requires_grad)
    }

    fn leaf_node(data: Vec<f64>, shape: Vec<usize>, requires_grad: bool) -> Tensor {
        Tensor {
            inner: Rc::new(RefCell::new(Inner {
                data,
                shape,
                requires_grad,
                grad: None,
                parents: Vec::new(),
                backward_fn: None,
            })),
        }
    }

    fn op_node(data: Vec<f64>, shape: Vec<usize>, parents: Vec<Tensor>, bw: BackwardFn) -> Tensor {
        Tensor {
            inner: Rc::new(RefCell::new(Inner {
                data,
                shape,
                requires_grad: true,
                grad: None,
                parents,
                backward_fn: Some(bw),
            })),
        }
    }

    /// Builds either a recording node or, when no input needs gradients, a
    /// plain leaf. `make_bw` is only invoked in the recording case.
    fn result_of(
        data: Vec<f64>,
        shape: Vec<usize>,
        parents: Vec<Tensor>,
        make_bw: impl FnOnce() -> BackwardFn,
    ) -> Tensor {
        if parents.iter().any(Tensor::requires_grad) {
            Self::op_node(data, shape, parents, make_bw())
        } else {
            Self::leaf_node(data, shape, false)
        }
    }
}

// ── Accessors ───────────────────────────────────────────────────────

impl Tensor {
    pub fn shape(&self) -> Vec<usize> {
        self.inner.borrow().shape.clone()
    }

    pub fn numel(&self) -> usize {
        self.inner.borrow().data.len()
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.inner.borrow().data.clone()
    }

    /// Scalar value. Panics if the tensor does not hold exactly one element.
    pub fn item(&self) -> f64 {
        let inner = self.inner.borrow();
        assert_eq!(inner.data.len(), 1, "item() on tensor of shape {:?}", inner.shape);
        inner.data[0]
    }

    pub fn requires_grad(&self) -> bool {
        self.inner.borrow().requires_grad
    }

    /// Current gradient, if one has been allocated.
    pub fn grad(&self) -> Option<Vec<f64>> {
        self.inner.borrow().grad.clone()
    }

    /// Resets the gradient to exact zeros (allocating it if needed).
    /// No-op on tensors that do not require gradients.
    pub fn zero_grad(&self) {
        let mut inner = self.inner.borrow_mut();
        if inner.requires_grad {
            let n = inner.data.len();
            inner.grad = Some(vec![0.0; n]);
        }
    }

    /// Copy of the data as a fresh gradient-free leaf.
    pub fn detach(&self) -> Tensor {
        let inner = self.inner.borrow();
        Self::leaf_node(inner.data.clone(), inner.shape.clone(), false)
    }

    /// True when both handles point at the same node.
    pub fn same_node(&self, other: &Tensor) -> bool {
        Rc::ptr_eq(&self.inner, &other.inner)
    }

    fn accum_grad(&self, delta: &[f64]) {
        let mut inner = self.inner.borrow_mut();
        if !inner.requires_grad {
            return;
        }
        let n = inner.data.len();
        debug_assert_eq!(delta.len(), n);
        let grad = inner.grad.get_or_insert_with(|| vec![0.0; n]);
        for (g, d) in grad.iter_mut().zip(delta) {
            *g += d;
        }
    }

    /// In-place update of leaf data; used by the optimizer and loaders.
    pub(crate) fn with_data_mut(&self, f: impl FnOnce(&mut [f64])) {
        f(&mut self.inner.borrow_mut().data);
    }
}

// ── Backward pass ───────────────────────────────────────────────────

impl Tensor {
    /// Reverse-mode sweep from a scalar output. Populates `grad` on every
    /// reachable tensor with `requires_grad`, accumulating into existing
    /// gradients.
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward() requires a scalar, got shape {:?}",
                self.shape()
            )));
        }
        if !self.requires_grad() {
            // Loss is disconnected from every learnable leaf; nothing to do.
            return Ok(());
        }

        // Post-order DFS: parents appear before children, so the reversed
        // list visits each node only after all of its consumers.
        let mut topo: Vec<Tensor> = Vec::new();
        let mut visited: HashSet<usize> = HashSet::new();
        let mut stack: Vec<(Tensor, bool)> = vec![(self.clone(), false)];
        while let Some((node, expanded)) = stack.pop() {
            let key = Rc::as_ptr(&node.inner) as usize;
            if expanded {
                topo.push(node);
                continue;
            }
            if !visited.insert(key) {
                continue;
            }
            let parents: Vec<Tensor> = node.inner.borrow().parents.clone();
            stack.push((node, true));
            for p in parents {
                if p.requires_grad() {
                    stack.push((p, false));
                }
            }
        }

        self.accum_grad(&[1.0]);
        for node in topo.iter().rev() {
            let inner = node.inner.borrow();
            if let (Some(bw), Some(grad)) = (&inner.backward_fn, &inner.grad) {
                bw(grad, &inner.parents);
            }
        }
        Ok(())
    }
}

// ── Raw kernels ─────────────────────────────────────────────────────

fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        for p in 0..k {
            let aik = a[i * k + p];
            if aik == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            let crow = &mut c[i * n..(i + 1) * n];
            for j in 0..n {
                crow[j] += aik * brow[j];
            }
        }
    }
    c
}

fn transpose_raw(a: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut t = vec![0.0; rows * cols];
    for i in 0..rows {
        for j in 0..cols {
            t[j * rows + i] = a[i * cols + j];
        }
    }
    t
}

fn dims2(shape: &[usize], what: &str) -> Result<(usize, usize)> {
    if shape.len() != 2 {
        return Err(Error::Shape(format!("{what} requires a 2-d tensor, got {shape:?}")));
    }
    Ok((shape[0], shape[1]))
}

// ── Operations ──────────────────────────────────────────────────────

impl Tensor {
    /// Matrix product `self[m×k] · rhs[k×n]`.
    pub fn matmul(&self, rhs: &Tensor) -> Result<Tensor> {
        let (m, k) = dims2(&self.shape(), "matmul lhs")?;
        let (k2, n) = dims2(&rhs.shape(), "matmul rhs")?;
        if k != k2 {
            return Err(Error::Shape(format!(
                "matmul inner dims disagree: [{m}×{k}] · [{k2}×{n}]"
            )));
        }
        let out = matmul_raw(&self.inner.borrow().data, &rhs.inner.borrow().data, m, k, n);
        let (lhs, rhs_t) = (self.clone(), rhs.clone());
        Ok(Self::result_of(out, vec![m, n], vec![lhs, rhs_t], || {
            let a_data = self.to_vec();
            let b_data = rhs.to_vec();
            Box::new(move |g, parents| {
                if parents[0].requires_grad() {
                    let bt = transpose_raw(&b_data, k, n);
                    parents[0].accum_grad(&matmul_raw(g, &bt, m, n, k));
                }
                if parents[1].requires_grad() {
                    let at = transpose_raw(&a_data, m, k);
                    parents[1].accum_grad(&matmul_raw(&at, g, k, m, n));
                }
            })
        }))
    }

    fn zip_same_shape(&self, rhs: &Tensor, what: &str) -> Result<Vec<f64>> {
        let (a, b) = (self.inner.borrow(), rhs.inner.borrow());
        if a.shape != b.shape {
            return Err(Error::Shape(format!(
                "{what}: shapes {:?} and {:?} differ",
                a.shape, b.shape
            )));
        }
        Ok(Vec::with_capacity(a.data.len()))
    }

    /// Elementwise sum; shapes must match exactly.
    pub fn add(&self, rhs: &Tensor) -> Result<Tensor> {
        let mut out = self.zip_same_shape(rhs, "add")?;
        {
            let (a, b) = (self.inner.borrow(), rhs.inner.borrow());
            out.extend(a.data.iter().zip(&b.data).map(|(x, y)| x + y));
        }
        Ok(Self::result_of(out, self.shape(), vec![self.clone(), rhs.clone()], || {
            Box::new(move |g, parents| {
                parents[0].accum_grad(g);
                parents[1].accum_grad(g);
            })
        }))
    }

    /// Elementwise difference; shapes must match exactly.
    pub fn sub(&self, rhs: &Tensor) -> Result<Tensor> {
        let mut out = self.zip_same_shape(rhs, "sub")?;
        {
            let (a, b) = (self.inner.borrow(), rhs.inner.borrow());
            out.extend(a.data.iter().zip(&b.data).map(|(x, y)| x - y));
        }
        Ok(Self::result_of(out, self.shape(), vec![self.clone(), rhs.clone()], || {
            Box::new(move |g, parents| {
                parents[0].accum_grad(g);
                if parents[1].requires_grad() {
                    let neg: Vec<f64> = g.iter().map(|x| -x).collect();
                    parents[1].accum_grad(&neg);
                }
            })
        }))
    }

    /// Elementwise product; shapes must match exactly.
    pub fn mul(&self, rhs: &Tensor) -> Result<Tensor> {
        let mut out = self.zip_same_shape(rhs, "mul")?;
        {
            let (a, b) = (self.inner.borrow(), rhs.inner.borrow());
            out.extend(a.data.iter().zip(&b.data).map(|(x, y)| x * y));
        }
        Ok(Self::result_of(out, self.shape(), vec![self.clone(), rhs.clone()], || {
            let a_data = self.to_vec();
            let b_data = rhs.to_vec();
            Box::new(move |g, parents| {
                if parents[0].requires_grad() {
                    let da: Vec<f64> = g.iter().zip(&b_data).map(|(g, b)| g * b).collect();
                    parents[0].accum_grad(&da);
                }
                if parents[1].requires_grad() {
                    let db: Vec<f64> = g.iter().zip(&a_data).map(|(g, a)| g * a).collect();
                    parents[1].accum_grad(&db);
                }
            })
        }))
    }

    /// Multiplication by a constant.
    pub fn scale(&self, c: f64) -> Tensor {
        let out: Vec<f64> = self.inner.borrow().data.iter().map(|x| x * c).collect();
        Self::result_of(out, self.shape(), vec![self.clone()], || {
            Box::new(move |g, parents| {
                let d: Vec<f64> = g.iter().map(|x| x * c).collect();
                parents[0].accum_grad(&d);
            })
        })
    }

    /// Adds a length-`n` row vector to every row of an `[m×n]` matrix.
    pub fn add_row(&self, row: &Tensor) -> Result<Tensor> {
        let (m, n) = dims2(&self.shape(), "add_row lhs")?;
        let rshape = row.shape();
        if rshape != [n] {
            return Err(Error::Shape(format!(
                "add_row: row shape {rshape:?} does not match {n} columns"
            )));
        }
        let out = {
            let (a, r) = (self.inner.borrow(), row.inner.borrow());
            let mut out = Vec::with_capacity(m * n);
            for i in 0..m {
                for j in 0..n {
                    out.push(a.data[i * n + j] + r.data[j]);
                }
            }
            out
        };
        Ok(Self::result_of(out, vec![m, n], vec![self.clone(), row.clone()], || {
            Box::new(move |g, parents| {
                parents[0].accum_grad(g);
                if parents[1].requires_grad() {
                    let mut dr = vec![0.0; n];
                    for i in 0..m {
                        for j in 0..n {
                            dr[j] += g[i * n + j];
                        }
                    }
                    parents[1].accum_grad(&dr);
                }
            })
        }))
    }

    /// 2-d transpose.
    pub fn transpose(&self) -> Result<Tensor> {
        let (m, n) = dims2(&self.shape(), "transpose")?;
        let out = transpose_raw(&self.inner.borrow().data, m, n);
        Ok(Self::result_of(out, vec![n, m], vec![self.clone()], || {
            Box::new(move |g, parents| {
                parents[0].accum_grad(&transpose_raw(g, n, m));
            })
        }))
    }

    /// Stacks 2-d tensors with equal column counts along the row axis.
    pub fn concat_rows(parts: &[&Tensor]) -> Result<Tensor> {
        if parts.is_empty() {
            return Err(Error::Contract("concat_rows of zero tensors".into()));
        }
        let (_, cols) = dims2(&parts[0].shape(), "concat_rows")?;
        let mut rows = 0usize;
        let mut row_counts = Vec::with_capacity(parts.len());
        for p in parts {
            let (r, c) = dims2(&p.shape(), "concat_rows")?;
            if c != cols {
                return Err(Error::Shape(format!(
                    "concat_rows: column counts differ ({c} vs {cols})"
                )));
            }
            rows += r;
            row_counts.push(r);
        }
        let mut out = Vec::with_capacity(rows * cols);
        for p in parts {
            out.extend_from_slice(&p.inner.borrow().data);
        }
        let parents: Vec<Tensor> = parts.iter().map(|p| (*p).clone()).collect();
        Ok(Self::result_of(out, vec![rows, cols], parents, || {
            Box::new(move |g, parents| {
                let mut offset = 0usize;
                for (p, r) in parents.iter().zip(&row_counts) {
                    let len = r * cols;
                    if p.requires_grad() {
                        p.accum_grad(&g[offset..offset + len]);
                    }
                    offset += len;
                }
            })
        }))
    }

    /// Rows `r0..r1` of a 2-d tensor.
    pub fn slice_rows(&self, r0: usize, r1: usize) -> Result<Tensor> {
        let (m, n) = dims2(&self.shape(), "slice_rows")?;
        if r0 > r1 || r1 > m {
            return Err(Error::Index(format!("slice_rows {r0}..{r1} of {m} rows")));
        }
        let out = self.inner.borrow().data[r0 * n..r1 * n].to_vec();
        Ok(Self::result_of(out, vec![r1 - r0, n], vec![self.clone()], || {
            Box::new(move |g, parents| {
                let mut dx = vec![0.0; m * n];
                dx[r0 * n..r1 * n].copy_from_slice(g);
                parents[0].accum_grad(&dx);
            })
        }))
    }

    /// Columns `c0..c1` of a 2-d tensor.
    pub fn slice_cols(&self, c0: usize, c1: usize) -> Result<Tensor> {
        let (m, n) = dims2(&self.shape(), "slice_cols")?;
        if c0 > c1 || c1 > n {
            return Err(Error::Index(format!("slice_cols {c0}..{c1} of {n} columns")));
        }
        let w = c1 - c0;
        let out = {
            let a = self.inner.borrow();
            let mut out = Vec::with_capacity(m * w);
            for i in 0..m {
                out.extend_from_slice(&a.data[i * n + c0..i * n + c1]);
            }
            out
        };
        Ok(Self::result_of(out, vec![m, w], vec![self.clone()], || {
            Box::new(move |g, parents| {
                let mut dx = vec![0.0; m * n];
                for i in 0..m {
                    dx[i * n + c0..i * n + c1].copy_from_slice(&g[i * w..(i + 1) * w]);
                }
                parents[0].accum_grad(&dx);
            })
        }))
    }

    /// Numerically stabilized softmax along `axis`. Rejects non-finite input.
    pub fn softmax(&self, axis: usize) -> Result<Tensor> {
        let shape = self.shape();
        if axis >= shape.len() {
            return Err(Error::Shape(format!("softmax axis {axis} of shape {shape:?}")));
        }
        {
            let inner = self.inner.borrow();
            if inner.data.iter().any(|x| !x.is_finite()) {
                return Err(Error::Numeric("softmax on non-finite input".into()));
            }
        }
        let axis_len = shape[axis];
        let outer: usize = shape[..axis].iter().product();
        let inner_len: usize = shape[axis + 1..].iter().product();
        let mut out = vec![0.0; self.numel()];
        {
            let data = &self.inner.borrow().data;
            for o in 0..outer {
                for i in 0..inner_len {
                    let idx = |a: usize| o * axis_len * inner_len + a * inner_len + i;
                    let mut max = f64::NEG_INFINITY;
                    for a in 0..axis_len {
                        max = max.max(data[idx(a)]);
                    }
                    let mut sum = 0.0;
                    for a in 0..axis_len {
                        let e = (data[idx(a)] - max).exp();
                        out[idx(a)] = e;
                        sum += e;
                    }
                    for a in 0..axis_len {
                        out[idx(a)] /= sum;
                    }
                }
            }
        }
        let y = out.clone();
        Ok(Self::result_of(out, shape, vec![self.clone()], || {
            Box::new(move |g, parents| {
                // dx = y ⊙ (g − Σ_axis g⊙y)
                let mut dx = vec![0.0; y.len()];
                for o in 0..outer {
                    for i in 0..inner_len {
                        let idx = |a: usize| o * axis_len * inner_len + a * inner_len + i;
                        let mut dot = 0.0;
                        for a in 0..axis_len {
                            dot += g[idx(a)] * y[idx(a)];
                        }
                        for a in 0..axis_len {
                            dx[idx(a)] = y[idx(a)] * (g[idx(a)] - dot);
                        }
                    }
                }
                parents[0].accum_grad(&dx);
            })
        }))
    }

    /// Mean cross-entropy of `[B×C]` logits against integer labels.
    pub fn cross_entropy(&self, labels: &[usize]) -> Result<Tensor> {
        let (b, c) = dims2(&self.shape(), "cross_entropy")?;
        if labels.len() != b {
            return Err(Error::Shape(format!(
                "cross_entropy: {b} logit rows but {} labels",
                labels.len()
            )));
        }
        if let Some(bad) = labels.iter().find(|&&l| l >= c) {
            return Err(Error::Index(format!("label {bad} out of range for {c} classes")));
        }
        let mut probs = vec![0.0; b * c];
        let mut loss = 0.0;
        {
            let data = &self.inner.borrow().data;
            for i in 0..b {
                let row = &data[i * c..(i + 1) * c];
                let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let mut sum = 0.0;
                for j in 0..c {
                    let e = (row[j] - max).exp();
                    probs[i * c + j] = e;
                    sum += e;
                }
                for j in 0..c {
                    probs[i * c + j] /= sum;
                }
                loss -= (row[labels[i]] - max) - sum.ln();
            }
        }
        loss /= b as f64;
        let labels = labels.to_vec();
        Ok(Self::result_of(vec![loss], vec![1], vec![self.clone()], || {
            Box::new(move |g, parents| {
                let scale = g[0] / b as f64;
                let mut dx = probs.clone();
                for (i, &l) in labels.iter().enumerate() {
                    dx[i * c + l] -= 1.0;
                }
                for v in &mut dx {
                    *v *= scale;
                }
                parents[0].accum_grad(&dx);
            })
        }))
    }

    /// Layer normalization over the last dimension with learnable `gamma`,
    /// `beta` of that length.
    pub fn layer_norm(&self, gamma: &Tensor, beta: &Tensor, eps: f64) -> Result<Tensor> {
        let shape = self.shape();
        let d = *shape.last().ok_or_else(|| Error::Shape("layer_norm on 0-d tensor".into()))?;
        if gamma.shape() != [d] || beta.shape() != [d] {
            return Err(Error::Shape(format!(
                "layer_norm: gamma/beta must have shape [{d}], got {:?}/{:?}",
                gamma.shape(),
                beta.shape()
            )));
        }
        let rows = self.numel() / d;
        let mut out = vec![0.0; self.numel()];
        let mut xhat = vec![0.0; self.numel()];
        let mut inv_std = vec![0.0; rows];
        {
            let x = self.inner.borrow();
            let gm = gamma.inner.borrow();
            let bt = beta.inner.borrow();
            for r in 0..rows {
                let row = &x.data[r * d..(r + 1) * d];
                let mean = row.iter().sum::<f64>() / d as f64;
                let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d as f64;
                let istd = 1.0 / (var + eps).sqrt();
                inv_std[r] = istd;
                for j in 0..d {
                    let xh = (row[j] - mean) * istd;
                    xhat[r * d + j] = xh;
                    out[r * d + j] = xh * gm.data[j] + bt.data[j];
                }
            }
        }
        let parents = vec![self.clone(), gamma.clone(), beta.clone()];
        Ok(Self::result_of(out, shape, parents, || {
            let gamma_data = gamma.to_vec();
            Box::new(move |g, parents| {
                if parents[0].requires_grad() {
                    let mut dx = vec![0.0; xhat.len()];
                    for r in 0..rows {
                        let mut sum_gy = 0.0;
                        let mut sum_gyx = 0.0;
                        for j in 0..d {
                            let gy = g[r * d + j] * gamma_data[j];
                            sum_gy += gy;
                            sum_gyx += gy * xhat[r * d + j];
                        }
                        let m_gy = sum_gy / d as f64;
                        let m_gyx = sum_gyx / d as f64;
                        for j in 0..d {
                            let gy = g[r * d + j] * gamma_data[j];
                            dx[r * d + j] = (gy - m_gy - xhat[r * d + j] * m_gyx) * inv_std[r];
                        }
                    }
                    parents[0].accum_grad(&dx);
                }
                if parents[1].requires_grad() {
                    let mut dg = vec![0.0; d];
                    for r in 0..rows {
                        for j in 0..d {
                            dg[j] += g[r * d + j] * xhat[r * d + j];
                        }
                    }
                    parents[1].accum_grad(&dg);
                }
                if parents[2].requires_grad() {
                    let mut db = vec![0.0; d];
                    for r in 0..rows {
                        for j in 0..d {
                            db[j] += g[r * d + j];
                        }
                    }
                    parents[2].accum_grad(&db);
                }
            })
        }))
    }

    /// GELU activation (tanh approximation).
    pub fn gelu(&self) -> Tensor {
        const C: f64 = 0.7978845608028654; // sqrt(2/pi)
        let out: Vec<f64> = self
            .inner
            .borrow()
            .data
            .iter()
            .map(|&x| 0.5 * x * (1.0 + (C * (x + 0.044715 * x * x * x)).tanh()))
            .collect();
        Self::result_of(out, self.shape(), vec![self.clone()], || {
            let x_data = self.to_vec();
            Box::new(move |g, parents| {
                let dx: Vec<f64> = g
                    .iter()
                    .zip(&x_data)
                    .map(|(g, &x)| {
                        let u = C * (x + 0.044715 * x * x * x);
                        let t = u.tanh();
                        let sech2 = 1.0 - t * t;
                        let du = C * (1.0 + 3.0 * 0.044715 * x * x);
                        g * (0.5 * (1.0 + t) + 0.5 * x * sech2 * du)
                    })
                    .collect();
                parents[0].accum_grad(&dx);
            })
        })
    }

    /// Sum of all entries as a scalar.
    pub fn sum_all(&self) -> Tensor {
        let s: f64 = self.inner.borrow().data.iter().sum();
        let n = self.numel();
        Self::result_of(vec![s], vec![1], vec![self.clone()], || {
            Box::new(move |g, parents| {
                parents[0].accum_grad(&vec![g[0]; n]);
            })
        })
    }

    /// Mean of all entries as a scalar.
    pub fn mean_all(&self) -> Tensor {
        let n = self.numel();
        let s: f64 = self.inner.borrow().data.iter().sum();
        Self::result_of(vec![s / n as f64], vec![1], vec![self.clone()], || {
            Box::new(move |g, parents| {
                parents[0].accum_grad(&vec![g[0] / n as f64; n]);
            })
        })
    }

    /// Mean absolute error against another tensor of identical shape.
    /// Subgradient at ties is zero.
    pub fn mean_abs_error(&self, rhs: &Tensor) -> Result<Tensor> {
        self.zip_same_shape(rhs, "mean_abs_error")?;
        let n = self.numel();
        let (total, signs) = {
            let (a, b) = (self.inner.borrow(), rhs.inner.borrow());
            let mut total = 0.0;
            let mut signs = Vec::with_capacity(n);
            for (x, y) in a.data.iter().zip(&b.data) {
                let d = x - y;
                total += d.abs();
                signs.push(if d > 0.0 {
                    1.0
                } else if d < 0.0 {
                    -1.0
                } else {
                    0.0
                });
            }
            (total, signs)
        };
        Ok(Self::result_of(vec![total / n as f64], vec![1], vec![self.clone(), rhs.clone()], || {
            Box::new(move |g, parents| {
                let scale = g[0] / n as f64;
                if parents[0].requires_grad() {
                    let da: Vec<f64> = signs.iter().map(|s| s * scale).collect();
                    parents[0].accum_grad(&da);
                }
                if parents[1].requires_grad() {
                    let db: Vec<f64> = signs.iter().map(|s| -s * scale).collect();
                    parents[1].accum_grad(&db);
                }
            })
        }))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::Error;

    fn t(data: &[f64], shape: &[usize]) -> Tensor {
        Tensor::new(data.to_vec(), shape, false).unwrap()
    }

    fn p(data: &[f64], shape: &[usize]) -> Tensor {
        Tensor::new(data.to_vec(), shape, true).unwrap()
    }

    #[test]
    fn new_rejects_shape_data_mismatch() {
        assert!(matches!(
            Tensor::new(vec![1.0, 2.0], &[3], false),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn matmul_identity() {
        let a = t(&[1.0, 2.0, 3.0, 4.0], &[2, 2]);
        let i = t(&[1.0, 0.0, 0.0, 1.0], &[2, 2]);
        assert_eq!(i.matmul(&a).unwrap().to_vec(), a.to_vec());
    }

    #[test]
    fn matmul_hand_example() {
        // [[1,2],[3,4]] × [[0],[1]] = [[2],[4]]
        let a = t(&[1.0, 2.0, 3.0, 4.0], &[2, 2]);
        let b = t(&[0.0, 1.0], &[2, 1]);
        assert_eq!(a.matmul(&b).unwrap().to_vec(), vec![2.0, 4.0]);
    }

    #[test]
    fn matmul_zero_annihilates() {
        let z = Tensor::zeros(&[2, 2]);
        let a = t(&[5.0, -1.0, 2.0, 7.0], &[2, 2]);
        assert_eq!(z.matmul(&a).unwrap().to_vec(), vec![0.0; 4]);
    }

    #[test]
    fn matmul_shape_error() {
        let a = t(&[1.0, 2.0], &[1, 2]);
        let b = t(&[1.0], &[1, 1]);
        assert!(matches!(a.matmul(&b), Err(Error::Shape(_))));
    }

    #[test]
    fn softmax_uniform_and_shift_invariance() {
        let x = t(&[0.0, 0.0, 0.0], &[1, 3]);
        let y = x.softmax(1).unwrap().to_vec();
        for v in &y {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let a = t(&[0.3, 1.3], &[1, 2]).softmax(1).unwrap().to_vec();
        let b = t(&[100.3, 101.3], &[1, 2]).softmax(1).unwrap().to_vec();
        assert!((a[0] - b[0]).abs() < 1e-12);
        assert!((a.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn softmax_matches_scalar_formula() {
        let y = t(&[1.0, 2.0, 3.0], &[1, 3]).softmax(1).unwrap().to_vec();
        let z: f64 = (1f64).exp() + (2f64).exp() + (3f64).exp();
        for (j, v) in y.iter().enumerate() {
            assert!((v - ((j as f64 + 1.0).exp() / z)).abs() < 1e-14);
        }
    }

    #[test]
    fn softmax_rejects_nan() {
        let x = t(&[f64::NAN, 0.0], &[1, 2]);
        assert!(matches!(x.softmax(1), Err(Error::Numeric(_))));
    }

    #[test]
    fn cross_entropy_uniform_is_ln_c() {
        for c in [2usize, 5, 17] {
            let logits = t(&vec![0.42; c], &[1, c]);
            let loss = logits.cross_entropy(&[0]).unwrap().item();
            assert!((loss - (c as f64).ln()).abs() < 1e-12);
        }
    }

    #[test]
    fn cross_entropy_huge_margin_is_near_zero() {
        let logits = t(&[50.0, 0.0, 0.0], &[1, 3]);
        assert!(logits.cross_entropy(&[0]).unwrap().item() < 1e-12);
    }

    #[test]
    fn cross_entropy_hand_example() {
        // -log softmax([1,2,3])[2]
        let logits = t(&[1.0, 2.0, 3.0], &[1, 3]);
        let z: f64 = (1f64).exp() + (2f64).exp() + (3f64).exp();
        let expected = -((3f64).exp() / z).ln();
        assert!((logits.cross_entropy(&[2]).unwrap().item() - expected).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_label_out_of_range() {
        let logits = t(&[0.0, 0.0], &[1, 2]);
        assert!(matches!(logits.cross_entropy(&[2]), Err(Error::Index(_))));
    }

    #[test]
    fn backward_square() {
        // f(x) = x², x = 3 → df/dx = 6
        let x = p(&[3.0], &[1, 1]);
        let y = x.mul(&x).unwrap().sum_all();
        y.backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![6.0]);
    }

    #[test]
    fn backward_sum_of_matvec_is_column_sums() {
        let a = t(&[1.0, 2.0, 3.0, 4.0, 5.0, 6.0], &[2, 3]);
        let x = p(&[0.5, -1.0, 2.0], &[3, 1]);
        let y = a.matmul(&x).unwrap().sum_all();
        y.backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![1.0 + 4.0, 2.0 + 5.0, 3.0 + 6.0]);
    }

    #[test]
    fn backward_skips_frozen_leaves() {
        let w = t(&[1.0, 2.0], &[1, 2]);
        let x = p(&[3.0, 4.0], &[2, 1]);
        let y = w.matmul(&x).unwrap().sum_all();
        y.backward().unwrap();
        assert!(w.grad().is_none());
        assert!(x.grad().is_some());
    }

    #[test]
    fn backward_requires_scalar() {
        let x = p(&[1.0, 2.0], &[1, 2]);
        let y = x.scale(2.0);
        assert!(matches!(y.backward(), Err(Error::Contract(_))));
    }

    #[test]
    fn backward_accumulates_across_calls() {
        let x = p(&[2.0], &[1, 1]);
        let y1 = x.scale(3.0).sum_all();
        y1.backward().unwrap();
        let y2 = x.scale(1.0).sum_all();
        y2.backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![4.0]);
        x.zero_grad();
        assert_eq!(x.grad().unwrap(), vec![0.0]);
    }

    #[test]
    fn detach_blocks_gradients() {
        let x = p(&[1.0], &[1, 1]);
        let d = x.detach();
        let y = d.scale(5.0).sum_all();
        y.backward().unwrap();
        assert!(x.grad().is_none());
        assert!(!d.requires_grad());
    }

    #[test]
    fn concat_and_slice_roundtrip_gradients() {
        let a = p(&[1.0, 2.0], &[1, 2]);
        let b = p(&[3.0, 4.0, 5.0, 6.0], &[2, 2]);
        let cat = Tensor::concat_rows(&[&a, &b]).unwrap();
        assert_eq!(cat.shape(), vec![3, 2]);
        let s = cat.slice_rows(1, 3).unwrap(); // only b's rows
        let loss = s.sum_all();
        loss.backward().unwrap();
        assert_eq!(a.grad().unwrap(), vec![0.0, 0.0]);
        assert_eq!(b.grad().unwrap(), vec![1.0; 4]);
    }

    #[test]
    fn mean_abs_error_basics() {
        let a = t(&[1.0, 2.0], &[1, 2]);
        let b = t(&[1.0, 4.0], &[1, 2]);
        assert!((a.mean_abs_error(&b).unwrap().item() - 1.0).abs() < 1e-15);
        assert_eq!(a.mean_abs_error(&a).unwrap().item(), 0.0);
    }

    #[test]
    fn layer_norm_normalizes_rows() {
        let x = t(&[1.0, 2.0, 3.0, 4.0], &[1, 4]);
        let gamma = t(&[1.0; 4], &[4]);
        let beta = t(&[0.0; 4], &[4]);
        let y = x.layer_norm(&gamma, &beta, 1e-6).unwrap().to_vec();
        let mean: f64 = y.iter().sum::<f64>() / 4.0;
        let var: f64 = y.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 4.0;
        assert!(mean.abs() < 1e-12);
        assert!((var - 1.0).abs() < 1e-4);
    }

    #[test]
    fn same_input_twice_accumulates_both_paths() {
        // f(x) = x·x + x → f'(2) = 2·2 + 1 = 5
        let x = p(&[2.0], &[1, 1]);
        let y = x.mul(&x).unwrap().add(&x).unwrap().sum_all();
        y.backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![5.0]);
    }
}
