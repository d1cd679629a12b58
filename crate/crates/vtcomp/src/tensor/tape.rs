//! Reverse-mode automatic differentiation on a tensor-level tape.
//!
//! Every operation appends one node holding the result tensor and enough
//! bookkeeping to push gradients back to its inputs. [`Tape::backward`] walks
//! nodes in reverse creation order with a fixed per-op input order, so
//! identical inputs always produce bitwise-identical gradients. A tape is
//! confined to one logical thread; the [`Tensor`] values it yields are plain
//! data and may travel freely.
//!
//! Every forward op checks its output for NaN/Inf and fails instead of
//! propagating poison; optimizers rely on this to detect divergence.

use crate::error::{Error, Result};
use crate::tensor::{matmul, row_softmax, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Matmul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    /// Row-broadcast multiply: `a[m x n] * v[1 x n]`, i.e. `a . diag(v)`.
    MulRowVec(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Transpose(Var),
    RowSoftmax(Var),
    /// `ln(max(x, eps))`; gradient is `1/x` above the clamp and 0 below it.
    LnClamped(Var, f64),
    SumAll(Var),
    RowSum(Var),
    ColSum(Var),
    /// Max over all entries; subgradient goes to the first maximum in
    /// row-major order (tie-break frozen for determinism).
    MaxAll { x: Var, argmax: usize },
    ConcatRows(Var, Var),
    GatherRows { x: Var, idx: Vec<usize> },
    /// Fractional-stride average pooling over rows: output row `i` averages
    /// `kernel` consecutive input rows anchored at `round(i*n/m)`, clamped to
    /// keep the window in range.
    FracAvgPool { x: Var, kernel: usize },
}

struct Node {
    value: Tensor,
    grad: Option<Tensor>,
    requires_grad: bool,
    op: Op,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Window anchor for fractional-stride pooling: `round(i * n / m)` clamped so
/// the window `[a, a+kernel)` stays inside `[0, n)`. Shared by the pooling op
/// and the pooling-style baselines so their windows agree exactly.
pub fn frac_window_anchor(i: usize, n: usize, m: usize, kernel: usize) -> usize {
    debug_assert!(kernel <= n && m >= 1);
    let a = ((i * n) as f64 / m as f64).round() as usize;
    a.min(n - kernel)
}

impl Tape {
    pub fn new() -> Tape {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, false, Op::Leaf)
    }

    /// Leaf that accumulates a gradient during [`Tape::backward`].
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, true, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Gradient of the last `backward` target with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.nodes[v.0].grad.as_ref()
    }

    fn push(&mut self, value: Tensor, requires_grad: bool, op: Op) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn checked(
        &mut self,
        op_name: &'static str,
        value: Tensor,
        requires_grad: bool,
        op: Op,
    ) -> Result<Var> {
        if !value.all_finite() {
            return Err(Error::NonFinite { op: op_name });
        }
        Ok(self.push(value, requires_grad, op))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = matmul(self.value(a), self.value(b))?;
        let rg = self.needs(a) || self.needs(b);
        self.checked("matmul", value, rg, Op::Matmul(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = ew(self.value(a), self.value(b), "add", |x, y| x + y)?;
        let rg = self.needs(a) || self.needs(b);
        self.checked("add", value, rg, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = ew(self.value(a), self.value(b), "sub", |x, y| x - y)?;
        let rg = self.needs(a) || self.needs(b);
        self.checked("sub", value, rg, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = ew(self.value(a), self.value(b), "mul", |x, y| x * y)?;
        let rg = self.needs(a) || self.needs(b);
        self.checked("mul", value, rg, Op::Mul(a, b))
    }

    pub fn mul_row_vec(&mut self, a: Var, v: Var) -> Result<Var> {
        let (av, vv) = (self.value(a), self.value(v));
        if av.rank() != 2 || vv.rank() != 2 || vv.nrows() != 1 || vv.ncols() != av.ncols() {
            return Err(Error::shape(
                "mul_row_vec",
                format!("{:?} x {:?}", av.shape(), vv.shape()),
            ));
        }
        let (m, n) = (av.nrows(), av.ncols());
        let mut out = Tensor::zeros(&[m, n]);
        for i in 0..m {
            for j in 0..n {
                out.data_mut()[i * n + j] = av.at2(i, j) * vv.at2(0, j);
            }
        }
        let rg = self.needs(a) || self.needs(v);
        self.checked("mul_row_vec", out, rg, Op::MulRowVec(a, v))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let mut value = self.value(a).clone();
        for x in value.data_mut() {
            *x *= c;
        }
        let rg = self.needs(a);
        self.checked("scale", value, rg, Op::Scale(a, c))
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Result<Var> {
        let mut value = self.value(a).clone();
        for x in value.data_mut() {
            *x += c;
        }
        let rg = self.needs(a);
        self.checked("add_scalar", value, rg, Op::AddScalar(a))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let av = self.value(a);
        if av.rank() != 2 {
            return Err(Error::shape("transpose", format!("{:?}", av.shape())));
        }
        let value = transpose_value(av);
        let rg = self.needs(a);
        self.checked("transpose", value, rg, Op::Transpose(a))
    }

    pub fn row_softmax(&mut self, a: Var) -> Result<Var> {
        let value = row_softmax(self.value(a))?;
        let rg = self.needs(a);
        self.checked("row_softmax", value, rg, Op::RowSoftmax(a))
    }

    pub fn ln_clamped(&mut self, a: Var, eps: f64) -> Result<Var> {
        let mut value = self.value(a).clone();
        for x in value.data_mut() {
            *x = x.max(eps).ln();
        }
        let rg = self.needs(a);
        self.checked("ln_clamped", value, rg, Op::LnClamped(a, eps))
    }

    pub fn sum_all(&mut self, a: Var) -> Result<Var> {
        let s: f64 = self.value(a).data().iter().sum();
        let rg = self.needs(a);
        self.checked("sum_all", Tensor::scalar(s), rg, Op::SumAll(a))
    }

    pub fn row_sum(&mut self, a: Var) -> Result<Var> {
        let av = self.value(a);
        if av.rank() != 2 {
            return Err(Error::shape("row_sum", format!("{:?}", av.shape())));
        }
        let (m, n) = (av.nrows(), av.ncols());
        let mut out = Tensor::zeros(&[m, 1]);
        for i in 0..m {
            out.data_mut()[i] = av.row(i).iter().sum();
        }
        let _ = n;
        let rg = self.needs(a);
        self.checked("row_sum", out, rg, Op::RowSum(a))
    }

    pub fn col_sum(&mut self, a: Var) -> Result<Var> {
        let av = self.value(a);
        if av.rank() != 2 {
            return Err(Error::shape("col_sum", format!("{:?}", av.shape())));
        }
        let (m, n) = (av.nrows(), av.ncols());
        let mut out = Tensor::zeros(&[1, n]);
        for i in 0..m {
            for j in 0..n {
                out.data_mut()[j] += av.at2(i, j);
            }
        }
        let rg = self.needs(a);
        self.checked("col_sum", out, rg, Op::ColSum(a))
    }

    pub fn max_all(&mut self, a: Var) -> Result<Var> {
        let av = self.value(a);
        if av.is_empty() {
            return Err(Error::shape("max_all", "empty tensor"));
        }
        let mut argmax = 0;
        let mut best = av.data()[0];
        for (i, &x) in av.data().iter().enumerate().skip(1) {
            if x > best {
                best = x;
                argmax = i;
            }
        }
        let rg = self.needs(a);
        self.checked("max_all", Tensor::scalar(best), rg, Op::MaxAll { x: a, argmax })
    }

    pub fn concat_rows(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.rank() != 2 || bv.rank() != 2 || av.ncols() != bv.ncols() {
            return Err(Error::shape(
                "concat_rows",
                format!("{:?} | {:?}", av.shape(), bv.shape()),
            ));
        }
        let n = av.ncols();
        let mut data = Vec::with_capacity((av.nrows() + bv.nrows()) * n);
        data.extend_from_slice(av.data());
        data.extend_from_slice(bv.data());
        let value = Tensor::from_vec(&[av.nrows() + bv.nrows(), n], data)?;
        let rg = self.needs(a) || self.needs(b);
        self.checked("concat_rows", value, rg, Op::ConcatRows(a, b))
    }

    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let av = self.value(a);
        if av.rank() != 2 {
            return Err(Error::shape("gather_rows", format!("{:?}", av.shape())));
        }
        let n = av.ncols();
        let mut data = Vec::with_capacity(idx.len() * n);
        for &i in idx {
            if i >= av.nrows() {
                return Err(Error::invalid(
                    "gather_rows",
                    format!("row {} out of {}", i, av.nrows()),
                ));
            }
            data.extend_from_slice(av.row(i));
        }
        let value = Tensor::from_vec(&[idx.len(), n], data)?;
        let rg = self.needs(a);
        self.checked(
            "gather_rows",
            value,
            rg,
            Op::GatherRows {
                x: a,
                idx: idx.to_vec(),
            },
        )
    }

    /// Average-pools `m` output rows from `n` input rows with a real-valued
    /// stride `n/m`. Gradients spread uniformly over each window.
    pub fn frac_avg_pool(&mut self, a: Var, m: usize, kernel: usize) -> Result<Var> {
        let av = self.value(a);
        if av.rank() != 2 {
            return Err(Error::shape("frac_avg_pool", format!("{:?}", av.shape())));
        }
        let (n, d) = (av.nrows(), av.ncols());
        if m == 0 || kernel == 0 || kernel > n {
            return Err(Error::invalid(
                "frac_avg_pool",
                format!("m={} kernel={} n={}", m, kernel, n),
            ));
        }
        let mut out = Tensor::zeros(&[m, d]);
        for i in 0..m {
            let a0 = frac_window_anchor(i, n, m, kernel);
            for t in 0..kernel {
                for j in 0..d {
                    out.data_mut()[i * d + j] += av.at2(a0 + t, j);
                }
            }
            for j in 0..d {
                out.data_mut()[i * d + j] /= kernel as f64;
            }
        }
        let rg = self.needs(a);
        self.checked("frac_avg_pool", out, rg, Op::FracAvgPool { x: a, kernel })
    }

    fn accumulate(&mut self, v: Var, delta: &Tensor) {
        let node = &mut self.nodes[v.0];
        if !node.requires_grad {
            return;
        }
        let grad = node
            .grad
            .get_or_insert_with(|| Tensor::zeros(node.value.shape()));
        for (g, d) in grad.data_mut().iter_mut().zip(delta.data()) {
            *g += d;
        }
    }

    /// Reverse sweep from a scalar `loss`. Existing gradients are cleared
    /// first; afterwards [`Tape::grad`] returns `dloss/dv` for every node with
    /// `requires_grad`, including leaves created via [`Tape::param`].
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(Error::shape(
                "backward",
                format!("loss has shape {:?}", self.value(loss).shape()),
            ));
        }
        for node in &mut self.nodes {
            node.grad = None;
        }
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        let seed_shape = self.nodes[loss.0].value.shape().to_vec();
        self.nodes[loss.0].grad = Some(Tensor::from_vec(&seed_shape, vec![1.0])?);

        for id in (0..=loss.0).rev() {
            if !self.nodes[id].requires_grad {
                continue;
            }
            let Some(g) = self.nodes[id].grad.clone() else {
                continue;
            };
            match &self.nodes[id].op {
                Op::Leaf => {}
                Op::Matmul(a, b) => {
                    let (a, b) = (*a, *b);
                    if self.needs(a) {
                        let bt = transpose_value(self.value(b));
                        let da = matmul(&g, &bt)?;
                        self.accumulate(a, &da);
                    }
                    if self.needs(b) {
                        let at = transpose_value(self.value(a));
                        let db = matmul(&at, &g)?;
                        self.accumulate(b, &db);
                    }
                }
                Op::Add(a, b) => {
                    let (a, b) = (*a, *b);
                    self.accumulate(a, &g);
                    self.accumulate(b, &g);
                }
                Op::Sub(a, b) => {
                    let (a, b) = (*a, *b);
                    self.accumulate(a, &g);
                    let mut neg = g.clone();
                    for x in neg.data_mut() {
                        *x = -*x;
                    }
                    self.accumulate(b, &neg);
                }
                Op::Mul(a, b) => {
                    let (a, b) = (*a, *b);
                    if self.needs(a) {
                        let da = ew(&g, self.value(b), "mul", |x, y| x * y)?;
                        self.accumulate(a, &da);
                    }
                    if self.needs(b) {
                        let db = ew(&g, self.value(a), "mul", |x, y| x * y)?;
                        self.accumulate(b, &db);
                    }
                }
                Op::MulRowVec(a, v) => {
                    let (a, v) = (*a, *v);
                    let (m, n) = (g.nrows(), g.ncols());
                    if self.needs(a) {
                        let vv = self.value(v);
                        let mut da = Tensor::zeros(&[m, n]);
                        for i in 0..m {
                            for j in 0..n {
                                da.data_mut()[i * n + j] = g.at2(i, j) * vv.at2(0, j);
                            }
                        }
                        self.accumulate(a, &da);
                    }
                    if self.needs(v) {
                        let av = self.value(a);
                        let mut dv = Tensor::zeros(&[1, n]);
                        for i in 0..m {
                            for j in 0..n {
                                dv.data_mut()[j] += g.at2(i, j) * av.at2(i, j);
                            }
                        }
                        self.accumulate(v, &dv);
                    }
                }
                Op::Scale(a, c) => {
                    let (a, c) = (*a, *c);
                    let mut da = g.clone();
                    for x in da.data_mut() {
                        *x *= c;
                    }
                    self.accumulate(a, &da);
                }
                Op::AddScalar(a) => {
                    let a = *a;
                    self.accumulate(a, &g);
                }
                Op::Transpose(a) => {
                    let a = *a;
                    let da = transpose_value(&g);
                    self.accumulate(a, &da);
                }
                Op::RowSoftmax(a) => {
                    let a = *a;
                    let y = &self.nodes[id].value;
                    let (m, n) = (y.nrows(), y.ncols());
                    let mut da = Tensor::zeros(&[m, n]);
                    for i in 0..m {
                        let mut dot = 0.0;
                        for k in 0..n {
                            dot += g.at2(i, k) * y.at2(i, k);
                        }
                        for j in 0..n {
                            da.data_mut()[i * n + j] = y.at2(i, j) * (g.at2(i, j) - dot);
                        }
                    }
                    self.accumulate(a, &da);
                }
                Op::LnClamped(a, eps) => {
                    let (a, eps) = (*a, *eps);
                    let xv = self.value(a);
                    let mut da = g.clone();
                    for (d, &x) in da.data_mut().iter_mut().zip(xv.data()) {
                        *d = if x >= eps { *d / x } else { 0.0 };
                    }
                    self.accumulate(a, &da);
                }
                Op::SumAll(a) => {
                    let a = *a;
                    let gs = g.data()[0];
                    let shape = self.value(a).shape().to_vec();
                    let da = Tensor::from_vec(&shape, vec![gs; self.value(a).len()])?;
                    self.accumulate(a, &da);
                }
                Op::RowSum(a) => {
                    let a = *a;
                    let av_shape = self.value(a).shape().to_vec();
                    let (m, n) = (av_shape[0], av_shape[1]);
                    let mut da = Tensor::zeros(&[m, n]);
                    for i in 0..m {
                        for j in 0..n {
                            da.data_mut()[i * n + j] = g.data()[i];
                        }
                    }
                    self.accumulate(a, &da);
                }
                Op::ColSum(a) => {
                    let a = *a;
                    let av_shape = self.value(a).shape().to_vec();
                    let (m, n) = (av_shape[0], av_shape[1]);
                    let mut da = Tensor::zeros(&[m, n]);
                    for i in 0..m {
                        for j in 0..n {
                            da.data_mut()[i * n + j] = g.data()[j];
                        }
                    }
                    self.accumulate(a, &da);
                }
                Op::MaxAll { x, argmax } => {
                    let (x, argmax) = (*x, *argmax);
                    let gs = g.data()[0];
                    let shape = self.value(x).shape().to_vec();
                    let mut da = Tensor::zeros(&shape);
                    da.data_mut()[argmax] = gs;
                    self.accumulate(x, &da);
                }
                Op::ConcatRows(a, b) => {
                    let (a, b) = (*a, *b);
                    let n = g.ncols();
                    let ra = self.value(a).nrows();
                    let rb = self.value(b).nrows();
                    let da = Tensor::from_vec(&[ra, n], g.data()[..ra * n].to_vec())?;
                    let db = Tensor::from_vec(&[rb, n], g.data()[ra * n..].to_vec())?;
                    self.accumulate(a, &da);
                    self.accumulate(b, &db);
                }
                Op::GatherRows { x, idx } => {
                    let (x, idx) = (*x, idx.clone());
                    let shape = self.value(x).shape().to_vec();
                    let n = shape[1];
                    let mut da = Tensor::zeros(&shape);
                    for (out_row, &src) in idx.iter().enumerate() {
                        for j in 0..n {
                            da.data_mut()[src * n + j] += g.at2(out_row, j);
                        }
                    }
                    self.accumulate(x, &da);
                }
                Op::FracAvgPool { x, kernel } => {
                    let (x, kernel) = (*x, *kernel);
                    let shape = self.value(x).shape().to_vec();
                    let (n, d) = (shape[0], shape[1]);
                    let m = g.nrows();
                    let mut da = Tensor::zeros(&[n, d]);
                    for i in 0..m {
                        let a0 = frac_window_anchor(i, n, m, kernel);
                        for t in 0..kernel {
                            for j in 0..d {
                                da.data_mut()[(a0 + t) * d + j] += g.at2(i, j) / kernel as f64;
                            }
                        }
                    }
                    self.accumulate(x, &da);
                }
            }
        }
        Ok(())
    }
}

fn ew(a: &Tensor, b: &Tensor, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
    if a.shape() != b.shape() {
        return Err(Error::shape(
            op,
            format!("{:?} vs {:?}", a.shape(), b.shape()),
        ));
    }
    let data = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| f(x, y))
        .collect();
    Tensor::from_vec(a.shape(), data)
}

pub fn transpose_value(t: &Tensor) -> Tensor {
    debug_assert_eq!(t.rank(), 2);
    let (m, n) = (t.nrows(), t.ncols());
    let mut out = Tensor::zeros(&[n, m]);
    for i in 0..m {
        for j in 0..n {
            out.data_mut()[j * m + i] = t.at2(i, j);
        }
    }
    out
}
