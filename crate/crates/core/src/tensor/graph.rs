//! Reverse-mode differentiation over a dynamically recorded tape.
//!
//! Every op appends a node holding its forward value. `backward` walks the
//! tape once in reverse and returns the adjoint of every node that depends on
//! a parameter or a gradient-tracked leaf. Most ops work on 2-D values viewed
//! as `rows × cols` (leading axes folded into rows).

use std::rc::Rc;

use super::array::{gemm, Tensor};
use super::params::{ParamId, ParamStore};
use crate::error::{Error, Result};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

/// Index value that makes [`Graph::gather`] emit a zero.
pub const GATHER_ZERO: u32 = u32::MAX;

/// Epsilon inside the layer-norm square root.
pub const LAYER_NORM_EPS: f64 = 1e-10;

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    MatMul { a: Var, b: Var, ta: bool, tb: bool },
    Softmax(Var),
    LayerNorm { x: Var, inv_std: Vec<f64> },
    Relu(Var),
    Gelu(Var),
    Silu(Var),
    Tanh(Var),
    Square(Var),
    Sum(Var),
    Mean(Var),
    Gather { x: Var, index: Rc<[u32]> },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceCols { x: Var, start: usize },
    SliceRows { x: Var, start: usize },
    Reshape(Var),
    CrossEntropy { logits: Var, probs: Tensor, targets: Vec<usize>, mask: Vec<bool>, count: usize },
    StraightThrough(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    tracked: bool,
}

/// Computation tape. Borrows the parameter store it reads from.
pub struct Graph<'a> {
    store: Option<&'a ParamStore>,
    nodes: Vec<Node>,
    param_vars: Vec<Option<Var>>,
    params_used: Vec<(ParamId, Var)>,
}

impl Default for Graph<'_> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'a> Graph<'a> {
    /// A tape with no parameters; only constants and tracked leaves.
    pub fn new() -> Self {
        Self {
            store: None,
            nodes: Vec::new(),
            param_vars: Vec::new(),
            params_used: Vec::new(),
        }
    }

    pub fn with_params(store: &'a ParamStore) -> Self {
        Self {
            store: Some(store),
            nodes: Vec::new(),
            param_vars: vec![None; store.len()],
            params_used: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn dims(&self, v: Var) -> (usize, usize) {
        let t = &self.nodes[v.0].value;
        (t.rows(), t.cols())
    }

    fn push(&mut self, value: Tensor, op: Op, tracked: bool) -> Var {
        self.nodes.push(Node { value, op, tracked });
        Var(self.nodes.len() - 1)
    }

    fn tracked(&self, v: Var) -> bool {
        self.nodes[v.0].tracked
    }

    /// Untracked input.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Input whose gradient is reported by [`Gradients::wrt`].
    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Parameter from the bound store; repeated calls share one node.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_vars.get(id.0).copied().flatten() {
            return v;
        }
        let store = self.store.expect("graph has no parameter store");
        let v = self.push(store.value(id).clone(), Op::Leaf, true);
        if self.param_vars.len() <= id.0 {
            self.param_vars.resize(id.0 + 1, None);
        }
        self.param_vars[id.0] = Some(v);
        self.params_used.push((id, v));
        v
    }

    /// Copy of `x` cut off from the tape (stop-gradient).
    pub fn detach(&mut self, x: Var) -> Var {
        let t = self.value(x).clone();
        self.constant(t)
    }

    fn check_same(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(format!(
                "{what}: {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    fn finite(&self, t: &Tensor, what: &str) -> Result<()> {
        if t.is_finite() {
            Ok(())
        } else {
            Err(Error::numeric(format!("{what} produced a non-finite value")))
        }
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same(a, b, "add")?;
        let t = self.value(a).zip_map(self.value(b), |x, y| x + y)?;
        let tr = self.tracked(a) || self.tracked(b);
        Ok(self.push(t, Op::Add(a, b), tr))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same(a, b, "sub")?;
        let t = self.value(a).zip_map(self.value(b), |x, y| x - y)?;
        let tr = self.tracked(a) || self.tracked(b);
        Ok(self.push(t, Op::Sub(a, b), tr))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same(a, b, "mul")?;
        let t = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        let tr = self.tracked(a) || self.tracked(b);
        Ok(self.push(t, Op::Mul(a, b), tr))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let t = self.value(a).map(|x| x * s);
        let tr = self.tracked(a);
        self.push(t, Op::Scale(a, s), tr)
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        let t = self.value(a).map(|x| x + s);
        let tr = self.tracked(a);
        self.push(t, Op::AddScalar(a), tr)
    }

    fn row_operand(&self, x: Var, b: Var, what: &str) -> Result<usize> {
        let d = self.dims(x).1;
        if self.value(b).len() != d {
            return Err(Error::shape(format!(
                "{what}: row vector of {} entries against {d} columns",
                self.value(b).len()
            )));
        }
        Ok(d)
    }

    /// `x[i, j] + b[j]` for every row `i`.
    pub fn add_row(&mut self, x: Var, b: Var) -> Result<Var> {
        let d = self.row_operand(x, b, "add_row")?;
        let bv = self.value(b).data().to_vec();
        let mut t = self.value(x).clone();
        for (i, v) in t.data_mut().iter_mut().enumerate() {
            *v += bv[i % d];
        }
        let tr = self.tracked(x) || self.tracked(b);
        Ok(self.push(t, Op::AddRow(x, b), tr))
    }

    /// `x[i, j] * b[j]` for every row `i`.
    pub fn mul_row(&mut self, x: Var, b: Var) -> Result<Var> {
        let d = self.row_operand(x, b, "mul_row")?;
        let bv = self.value(b).data().to_vec();
        let mut t = self.value(x).clone();
        for (i, v) in t.data_mut().iter_mut().enumerate() {
            *v *= bv[i % d];
        }
        let tr = self.tracked(x) || self.tracked(b);
        Ok(self.push(t, Op::MulRow(x, b), tr))
    }

    fn matmul_general(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Result<Var> {
        let (ar, ac) = self.dims(a);
        let (br, bc) = self.dims(b);
        let (m, k) = if ta { (ac, ar) } else { (ar, ac) };
        let (k2, n) = if tb { (bc, br) } else { (br, bc) };
        if k != k2 {
            return Err(Error::shape(format!(
                "matmul inner dims {k} vs {k2} ({:?} x {:?})",
                self.shape(a),
                self.shape(b)
            )));
        }
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            self.value(a).data(),
            ta,
            self.value(b).data(),
            tb,
            &mut out,
            0.0,
        );
        let t = Tensor::new(&[m, n], out)?;
        let tr = self.tracked(a) || self.tracked(b);
        Ok(self.push(t, Op::MatMul { a, b, ta, tb }, tr))
    }

    /// `a · b`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_general(a, b, false, false)
    }

    /// `a · bᵀ`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_general(a, b, false, true)
    }

    /// Row-wise softmax.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let mut t = self.value(x).clone();
        let c = t.cols();
        if c == 0 {
            return Err(Error::shape("softmax over zero columns"));
        }
        for row in t.data_mut().chunks_mut(c) {
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for v in row.iter_mut() {
                *v = (*v - m).exp();
                s += *v;
            }
            for v in row.iter_mut() {
                *v /= s;
            }
        }
        self.finite(&t, "softmax")?;
        let tr = self.tracked(x);
        Ok(self.push(t, Op::Softmax(x), tr))
    }

    /// Row-wise normalization to zero mean and unit variance (no affine).
    pub fn layer_norm(&mut self, x: Var) -> Result<Var> {
        let mut t = self.value(x).clone();
        let c = t.cols();
        if c == 0 {
            return Err(Error::shape("layer_norm over zero columns"));
        }
        let mut inv_std = Vec::with_capacity(t.rows());
        for row in t.data_mut().chunks_mut(c) {
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let r = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            for v in row.iter_mut() {
                *v = (*v - mean) * r;
            }
            inv_std.push(r);
        }
        self.finite(&t, "layer_norm")?;
        let tr = self.tracked(x);
        Ok(self.push(t, Op::LayerNorm { x, inv_std }, tr))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let t = self.value(x).map(|v| v.max(0.0));
        let tr = self.tracked(x);
        self.push(t, Op::Relu(x), tr)
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, x: Var) -> Var {
        let t = self.value(x).map(gelu);
        let tr = self.tracked(x);
        self.push(t, Op::Gelu(x), tr)
    }

    pub fn silu(&mut self, x: Var) -> Var {
        let t = self.value(x).map(|v| v * sigmoid(v));
        let tr = self.tracked(x);
        self.push(t, Op::Silu(x), tr)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let t = self.value(x).map(f64::tanh);
        let tr = self.tracked(x);
        self.push(t, Op::Tanh(x), tr)
    }

    pub fn square(&mut self, x: Var) -> Var {
        let t = self.value(x).map(|v| v * v);
        let tr = self.tracked(x);
        self.push(t, Op::Square(x), tr)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let t = Tensor::scalar(self.value(x).sum());
        let tr = self.tracked(x);
        self.push(t, Op::Sum(x), tr)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = Tensor::scalar(self.value(x).mean());
        let tr = self.tracked(x);
        self.push(t, Op::Mean(x), tr)
    }

    /// Mean of squared differences.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        let d = self.sub(a, b)?;
        let s = self.square(d);
        Ok(self.mean(s))
    }

    /// `out.flat[i] = x.flat[index[i]]`, or zero where `index[i] == GATHER_ZERO`.
    pub fn gather(&mut self, x: Var, index: Rc<[u32]>, out_shape: &[usize]) -> Result<Var> {
        let n: usize = out_shape.iter().product();
        if n != index.len() {
            return Err(Error::shape(format!(
                "gather index has {} entries, output shape {out_shape:?}",
                index.len()
            )));
        }
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(n);
        for &i in index.iter() {
            if i == GATHER_ZERO {
                out.push(0.0);
            } else {
                let v = *src
                    .get(i as usize)
                    .ok_or_else(|| Error::shape(format!("gather index {i} out of range")))?;
                out.push(v);
            }
        }
        let t = Tensor::new(out_shape, out)?;
        let tr = self.tracked(x);
        Ok(self.push(t, Op::Gather { x, index }, tr))
    }

    /// Select whole rows of a 2-D value (embedding lookup).
    pub fn gather_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let (r, c) = self.dims(x);
        let mut index = Vec::with_capacity(rows.len() * c);
        for &i in rows {
            if i >= r {
                return Err(Error::shape(format!("row {i} out of {r}")));
            }
            index.extend((0..c).map(|j| (i * c + j) as u32));
        }
        self.gather(x, index.into(), &[rows.len(), c])
    }

    pub fn concat_cols(&mut self, xs: &[Var]) -> Result<Var> {
        let rows = self.dims(xs[0]).0;
        if xs.iter().any(|&v| self.dims(v).0 != rows) {
            return Err(Error::shape("concat_cols row counts differ"));
        }
        let widths: Vec<usize> = xs.iter().map(|&v| self.dims(v).1).collect();
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(rows * total);
        for i in 0..rows {
            for (&v, &w) in xs.iter().zip(&widths) {
                out.extend_from_slice(&self.value(v).data()[i * w..(i + 1) * w]);
            }
        }
        let t = Tensor::new(&[rows, total], out)?;
        let tr = xs.iter().any(|&v| self.tracked(v));
        Ok(self.push(t, Op::ConcatCols(xs.to_vec()), tr))
    }

    pub fn concat_rows(&mut self, xs: &[Var]) -> Result<Var> {
        let cols = self.dims(xs[0]).1;
        if xs.iter().any(|&v| self.dims(v).1 != cols) {
            return Err(Error::shape("concat_rows column counts differ"));
        }
        let mut out = Vec::new();
        for &v in xs {
            out.extend_from_slice(self.value(v).data());
        }
        let rows = out.len() / cols.max(1);
        let t = Tensor::new(&[rows, cols], out)?;
        let tr = xs.iter().any(|&v| self.tracked(v));
        Ok(self.push(t, Op::ConcatRows(xs.to_vec()), tr))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let (r, c) = self.dims(x);
        if start > end || end > c {
            return Err(Error::shape(format!("column slice {start}..{end} of {c}")));
        }
        let w = end - start;
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(r * w);
        for i in 0..r {
            out.extend_from_slice(&src[i * c + start..i * c + end]);
        }
        let t = Tensor::new(&[r, w], out)?;
        let tr = self.tracked(x);
        Ok(self.push(t, Op::SliceCols { x, start }, tr))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let (r, c) = self.dims(x);
        if start > end || end > r {
            return Err(Error::shape(format!("row slice {start}..{end} of {r}")));
        }
        let t = Tensor::new(
            &[end - start, c],
            self.value(x).data()[start * c..end * c].to_vec(),
        )?;
        let tr = self.tracked(x);
        Ok(self.push(t, Op::SliceRows { x, start }, tr))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().reshape(shape)?;
        let tr = self.tracked(x);
        Ok(self.push(t, Op::Reshape(x), tr))
    }

    /// Mean token cross-entropy over the rows where `loss_mask` is true.
    pub fn cross_entropy(
        &mut self,
        logits: Var,
        targets: &[usize],
        loss_mask: &[bool],
    ) -> Result<Var> {
        let (rows, c) = self.dims(logits);
        if targets.len() != rows || loss_mask.len() != rows {
            return Err(Error::shape(format!(
                "cross_entropy: {rows} rows, {} targets, {} mask entries",
                targets.len(),
                loss_mask.len()
            )));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= c) {
            return Err(Error::shape(format!("target {bad} out of {c} classes")));
        }
        let count = loss_mask.iter().filter(|&&m| m).count();
        if count == 0 {
            return Err(Error::Degenerate("every position is masked out of the loss".into()));
        }
        let mut probs = self.value(logits).clone();
        let mut loss = 0.0;
        for (i, row) in probs.data_mut().chunks_mut(c).enumerate() {
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            if loss_mask[i] {
                loss += lse - row[targets[i]];
            }
            for v in row.iter_mut() {
                *v = (*v - lse).exp();
            }
        }
        let t = Tensor::scalar(loss / count as f64);
        self.finite(&t, "cross_entropy")?;
        let tr = self.tracked(logits);
        Ok(self.push(
            t,
            Op::CrossEntropy {
                logits,
                probs,
                targets: targets.to_vec(),
                mask: loss_mask.to_vec(),
                count,
            },
            tr,
        ))
    }

    /// Forward value of `quantized`, gradient routed unchanged to `x`.
    pub fn straight_through(&mut self, x: Var, quantized: Var) -> Result<Var> {
        self.check_same(x, quantized, "straight_through")?;
        let t = self.value(quantized).clone();
        let tr = self.tracked(x);
        Ok(self.push(t, Op::StraightThrough(x), tr))
    }

    /// Reverse sweep from a scalar output.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(Error::shape(format!(
                "backward needs a scalar, got {:?}",
                self.shape(loss)
            )));
        }
        if !self.value(loss).is_finite() {
            return Err(Error::numeric("loss is not finite"));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.shape(loss), 1.0));

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.tracked || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(dy) = grads[idx].take() else { continue };
            self.propagate(idx, &dy, &mut grads)?;
            grads[idx] = Some(dy);
        }

        Ok(Gradients {
            grads,
            params: self.params_used.clone(),
        })
    }

    fn propagate(&self, idx: usize, dy: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let node = &self.nodes[idx];
        let y = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.acc(grads, *a, || dy.clone())?;
                self.acc(grads, *b, || dy.clone())?;
            }
            Op::Sub(a, b) => {
                self.acc(grads, *a, || dy.clone())?;
                self.acc(grads, *b, || dy.map(|v| -v))?;
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                self.acc(grads, *a, || dy.zip_map(vb, |g, x| g * x).unwrap())?;
                self.acc(grads, *b, || dy.zip_map(va, |g, x| g * x).unwrap())?;
            }
            Op::Scale(a, s) => {
                let s = *s;
                self.acc(grads, *a, || dy.map(|v| v * s))?;
            }
            Op::AddScalar(a) => self.acc(grads, *a, || dy.clone())?,
            Op::AddRow(x, b) => {
                self.acc(grads, *x, || dy.clone())?;
                let shape = self.shape(*b).to_vec();
                self.acc(grads, *b, || {
                    let d = dy.cols();
                    let mut g = vec![0.0; d];
                    for row in dy.data().chunks(d) {
                        for (gj, v) in g.iter_mut().zip(row) {
                            *gj += v;
                        }
                    }
                    Tensor::new(&shape, g).unwrap()
                })?;
            }
            Op::MulRow(x, b) => {
                let (vx, vb) = (self.value(*x), self.value(*b));
                let d = dy.cols();
                self.acc(grads, *x, || {
                    let mut g = dy.clone();
                    for (i, v) in g.data_mut().iter_mut().enumerate() {
                        *v *= vb.data()[i % d];
                    }
                    g
                })?;
                let shape = self.shape(*b).to_vec();
                self.acc(grads, *b, || {
                    let mut g = vec![0.0; d];
                    for (i, (gy, xv)) in dy.data().iter().zip(vx.data()).enumerate() {
                        g[i % d] += gy * xv;
                    }
                    Tensor::new(&shape, g).unwrap()
                })?;
            }
            Op::MatMul { a, b, ta, tb } => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let (m, n) = (dy.rows(), dy.cols());
                let k = if *ta { va.rows() } else { va.cols() };
                if self.tracked(*a) {
                    // dA = dY·Bᵀ (or its transpose when `ta`)
                    let mut g = vec![0.0; m * k];
                    if *ta {
                        // A is k×m; dA = B·dYᵀ (k×m)
                        gemm(k, n, m, vb.data(), *tb, dy.data(), true, &mut g, 0.0);
                    } else {
                        gemm(m, n, k, dy.data(), false, vb.data(), !*tb, &mut g, 0.0);
                    }
                    let g = Tensor::new(va.shape(), g)?;
                    self.acc(grads, *a, || g)?;
                }
                if self.tracked(*b) {
                    let mut g = vec![0.0; k * n];
                    if *tb {
                        // B is n×k; dB = dYᵀ·A (n×k)
                        gemm(n, m, k, dy.data(), true, va.data(), *ta, &mut g, 0.0);
                    } else {
                        gemm(k, m, n, va.data(), !*ta, dy.data(), false, &mut g, 0.0);
                    }
                    let g = Tensor::new(vb.shape(), g)?;
                    self.acc(grads, *b, || g)?;
                }
            }
            Op::Softmax(x) => {
                self.acc(grads, *x, || {
                    let c = y.cols();
                    let mut g = dy.clone();
                    for (gr, yr) in g.data_mut().chunks_mut(c).zip(y.data().chunks(c)) {
                        let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                        for (gv, yv) in gr.iter_mut().zip(yr) {
                            *gv = yv * (*gv - dot);
                        }
                    }
                    g
                })?;
            }
            Op::LayerNorm { x, inv_std } => {
                self.acc(grads, *x, || {
                    let c = y.cols();
                    let mut g = dy.clone();
                    for ((gr, yr), r) in g
                        .data_mut()
                        .chunks_mut(c)
                        .zip(y.data().chunks(c))
                        .zip(inv_std)
                    {
                        let mean_g = gr.iter().sum::<f64>() / c as f64;
                        let mean_gy =
                            gr.iter().zip(yr).map(|(a, b)| a * b).sum::<f64>() / c as f64;
                        for (gv, yv) in gr.iter_mut().zip(yr) {
                            *gv = r * (*gv - mean_g - yv * mean_gy);
                        }
                    }
                    g
                })?;
            }
            Op::Relu(x) => {
                let vx = self.value(*x);
                self.acc(grads, *x, || {
                    dy.zip_map(vx, |g, v| if v > 0.0 { g } else { 0.0 }).unwrap()
                })?;
            }
            Op::Gelu(x) => {
                let vx = self.value(*x);
                self.acc(grads, *x, || dy.zip_map(vx, |g, v| g * gelu_grad(v)).unwrap())?;
            }
            Op::Silu(x) => {
                let vx = self.value(*x);
                self.acc(grads, *x, || {
                    dy.zip_map(vx, |g, v| {
                        let s = sigmoid(v);
                        g * (s + v * s * (1.0 - s))
                    })
                    .unwrap()
                })?;
            }
            Op::Tanh(x) => {
                self.acc(grads, *x, || dy.zip_map(y, |g, t| g * (1.0 - t * t)).unwrap())?;
            }
            Op::Square(x) => {
                let vx = self.value(*x);
                self.acc(grads, *x, || dy.zip_map(vx, |g, v| 2.0 * g * v).unwrap())?;
            }
            Op::Sum(x) => {
                let g = dy.data()[0];
                let shape = self.shape(*x).to_vec();
                self.acc(grads, *x, || Tensor::full(&shape, g))?;
            }
            Op::Mean(x) => {
                let shape = self.shape(*x).to_vec();
                let n = self.value(*x).len().max(1) as f64;
                let g = dy.data()[0] / n;
                self.acc(grads, *x, || Tensor::full(&shape, g))?;
            }
            Op::Gather { x, index } => {
                let shape = self.shape(*x).to_vec();
                self.acc(grads, *x, || {
                    let mut g = Tensor::zeros(&shape);
                    let gd = g.data_mut();
                    for (&i, &v) in index.iter().zip(dy.data()) {
                        if i != GATHER_ZERO {
                            gd[i as usize] += v;
                        }
                    }
                    g
                })?;
            }
            Op::ConcatCols(xs) => {
                let rows = dy.rows();
                let total = dy.cols();
                let mut off = 0;
                for &v in xs {
                    let w = self.dims(v).1;
                    let shape = self.shape(v).to_vec();
                    self.acc(grads, v, || {
                        let mut g = Vec::with_capacity(rows * w);
                        for i in 0..rows {
                            g.extend_from_slice(&dy.data()[i * total + off..i * total + off + w]);
                        }
                        Tensor::new(&shape, g).unwrap()
                    })?;
                    off += w;
                }
            }
            Op::ConcatRows(xs) => {
                let mut off = 0;
                for &v in xs {
                    let n = self.value(v).len();
                    let shape = self.shape(v).to_vec();
                    self.acc(grads, v, || {
                        Tensor::new(&shape, dy.data()[off..off + n].to_vec()).unwrap()
                    })?;
                    off += n;
                }
            }
            Op::SliceCols { x, start } => {
                let (r, c) = self.dims(*x);
                let shape = self.shape(*x).to_vec();
                let w = dy.cols();
                self.acc(grads, *x, || {
                    let mut g = Tensor::zeros(&shape);
                    for i in 0..r {
                        g.data_mut()[i * c + start..i * c + start + w]
                            .copy_from_slice(&dy.data()[i * w..(i + 1) * w]);
                    }
                    g
                })?;
            }
            Op::SliceRows { x, start } => {
                let c = self.dims(*x).1;
                let shape = self.shape(*x).to_vec();
                self.acc(grads, *x, || {
                    let mut g = Tensor::zeros(&shape);
                    g.data_mut()[start * c..start * c + dy.len()].copy_from_slice(dy.data());
                    g
                })?;
            }
            Op::Reshape(x) => {
                let shape = self.shape(*x).to_vec();
                self.acc(grads, *x, || dy.clone().reshape(&shape).unwrap())?;
            }
            Op::CrossEntropy {
                logits,
                probs,
                targets,
                mask,
                count,
            } => {
                let scale = dy.data()[0] / *count as f64;
                self.acc(grads, *logits, || {
                    let c = probs.cols();
                    let mut g = probs.clone();
                    for (i, row) in g.data_mut().chunks_mut(c).enumerate() {
                        if mask[i] {
                            row[targets[i]] -= 1.0;
                            row.iter_mut().for_each(|v| *v *= scale);
                        } else {
                            row.iter_mut().for_each(|v| *v = 0.0);
                        }
                    }
                    g
                })?;
            }
            Op::StraightThrough(x) => self.acc(grads, *x, || dy.clone())?,
        }
        Ok(())
    }

    fn acc(
        &self,
        grads: &mut [Option<Tensor>],
        v: Var,
        g: impl FnOnce() -> Tensor,
    ) -> Result<()> {
        if !self.tracked(v) {
            return Ok(());
        }
        let g = g();
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g)?,
            slot @ None => *slot = Some(g),
        }
        Ok(())
    }
}

/// Adjoints produced by [`Graph::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    params: Vec<(ParamId, Var)>,
}

impl Gradients {
    /// Gradient of the loss with respect to `v`, if `v` is tracked and reached.
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn param_grads(&self) -> impl Iterator<Item = (ParamId, &Tensor)> {
        self.params
            .iter()
            .filter_map(|&(id, v)| self.wrt(v).map(|g| (id, g)))
    }
}

pub(crate) fn sigmoid(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

pub(crate) fn gelu(v: f64) -> f64 {
    0.5 * v * (1.0 + (GELU_C * (v + 0.044715 * v * v * v)).tanh())
}

fn gelu_grad(v: f64) -> f64 {
    let u = GELU_C * (v + 0.044715 * v * v * v);
    let t = u.tanh();
    let du = GELU_C * (1.0 + 3.0 * 0.044715 * v * v);
    0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * du
}
