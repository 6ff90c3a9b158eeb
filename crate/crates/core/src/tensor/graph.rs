//! Define-by-run reverse-mode differentiation.
//!
//! Every forward op appends a node to a [`Graph`]; node indices are therefore
//! already a topological order and [`Graph::backward`] walks them in reverse.
//! A graph is single-use: after one backward pass it refuses a second.

use super::array::{matmul_into, matmul_nt_into, matmul_tn_into, Tensor};
use crate::error::{Error, Result};

/// Below this Euclidean norm a row cannot be normalized.
pub const MIN_ROW_NORM: f64 = 1e-12;
/// Variance epsilon used by [`Graph::layer_norm`].
pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Elementwise {
    Add,
    Sub,
    Mul,
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    Binary(Elementwise, Var, Var),
    /// Right operand is a one-element tensor broadcast over the left.
    BinaryScalar(Elementwise, Var, Var),
    Scale(Var, f64),
    Exp(Var),
    Log(Var),
    Gelu(Var),
    Elu(Var),
    Clamp(Var, f64, f64),
    RowSoftmax(Var),
    L2NormalizeRows(Var, Vec<f64>),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    AddRowBias(Var, Var),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceCols(Var, usize, usize),
    Reshape(Var),
    Transpose(Var),
    ReduceSum(Var),
    ReduceMean(Var),
    /// Scalar output whose partial derivatives w.r.t. each input were
    /// computed alongside the value.
    Fused(Vec<(Var, Tensor)>),
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Tensor>>,
    consumed: bool,
}

fn shape_err(op: &'static str, a: &Tensor, b: &Tensor) -> Error {
    Error::Shape {
        op,
        lhs: a.shape().to_vec(),
        rhs: b.shape().to_vec(),
    }
}

fn gelu(x: f64) -> (f64, f64) {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    const K: f64 = 0.044_715;
    let u = C * (x + K * x * x * x);
    let t = u.tanh();
    let y = 0.5 * x * (1.0 + t);
    let dy = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * C * (1.0 + 3.0 * K * x * x);
    (y, dy)
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    /// Every node in recording order.
    pub fn vars(&self) -> impl Iterator<Item = Var> {
        (0..self.nodes.len()).map(Var)
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Trainable leaf; receives a gradient on backward.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient of the last backward root w.r.t. `v`, if `v` takes part in it.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape().len() != 2 || bv.shape().len() != 2 || av.cols() != bv.rows() {
            return Err(shape_err("matmul", av, bv));
        }
        let (m, k, n) = (av.rows(), av.cols(), bv.cols());
        let mut out = vec![0.0; m * n];
        matmul_into(av.data(), bv.data(), &mut out, m, k, n);
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::matrix(m, n, out)?, Op::MatMul(a, b), rg))
    }

    pub fn elementwise(&mut self, a: Var, b: Var, kind: Elementwise) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let f = |x: f64, y: f64| match kind {
            Elementwise::Add => x + y,
            Elementwise::Sub => x - y,
            Elementwise::Mul => x * y,
        };
        let rg = self.rg(&[a, b]);
        if av.shape() == bv.shape() {
            let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect();
            let out = Tensor::new(av.shape().to_vec(), data)?;
            Ok(self.push(out, Op::Binary(kind, a, b), rg))
        } else if bv.len() == 1 && bv.shape().len() <= 1 {
            let y = bv.item();
            let out = av.map(|x| f(x, y));
            Ok(self.push(out, Op::BinaryScalar(kind, a, b), rg))
        } else if av.len() == 1 && av.shape().len() <= 1 && kind != Elementwise::Sub {
            // commutative ops: put the scalar on the right
            self.elementwise(b, a, kind)
        } else {
            Err(shape_err("elementwise", av, bv))
        }
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(a, b, Elementwise::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(a, b, Elementwise::Sub)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(a, b, Elementwise::Mul)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a).map(|x| x * c);
        let rg = self.rg(&[a]);
        self.push(out, Op::Scale(a, c), rg)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f64::exp);
        let rg = self.rg(&[a]);
        self.push(out, Op::Exp(a), rg)
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        let av = self.value(a);
        if let Some(bad) = av.data().iter().find(|&&x| !(x > 0.0)) {
            return Err(Error::domain("log", format!("non-positive input {bad}")));
        }
        let out = av.map(f64::ln);
        let rg = self.rg(&[a]);
        Ok(self.push(out, Op::Log(a), rg))
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| gelu(x).0);
        let rg = self.rg(&[a]);
        self.push(out, Op::Gelu(a), rg)
    }

    /// ELU with unit slope parameter (continuously differentiable at 0).
    pub fn elu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| if x > 0.0 { x } else { x.exp_m1() });
        let rg = self.rg(&[a]);
        self.push(out, Op::Elu(a), rg)
    }

    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        let out = self.value(a).map(|x| x.clamp(lo, hi));
        let rg = self.rg(&[a]);
        self.push(out, Op::Clamp(a, lo, hi), rg)
    }

    /// Softmax over each row, with the row maximum subtracted first.
    pub fn row_softmax(&mut self, a: Var) -> Result<Var> {
        let av = self.value(a);
        if !av.is_finite() {
            return Err(Error::non_finite("row_softmax input"));
        }
        let mut out = av.clone();
        for i in 0..out.rows() {
            let row = out.row_mut(i);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                total += *v;
            }
            for v in row.iter_mut() {
                *v /= total;
            }
        }
        let rg = self.rg(&[a]);
        Ok(self.push(out, Op::RowSoftmax(a), rg))
    }

    pub fn l2_normalize_rows(&mut self, a: Var) -> Result<Var> {
        let av = self.value(a);
        let mut out = av.clone();
        let mut norms = Vec::with_capacity(av.rows());
        for i in 0..out.rows() {
            let row = out.row_mut(i);
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if !(norm >= MIN_ROW_NORM) {
                return Err(Error::Degenerate {
                    op: "l2_normalize_rows",
                    row: i,
                    norm,
                });
            }
            row.iter_mut().for_each(|v| *v /= norm);
            norms.push(norm);
        }
        let rg = self.rg(&[a]);
        Ok(self.push(out, Op::L2NormalizeRows(a, norms), rg))
    }

    /// Per-row normalization with population variance, then `gain ⊙ x̂ + bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let xv = self.value(x);
        let d = xv.cols();
        let (gv, bv) = (self.value(gain), self.value(bias));
        if d < 2 || gv.len() != d || bv.len() != d {
            return Err(shape_err("layer_norm", xv, gv));
        }
        let rows = xv.rows();
        let mut xhat = vec![0.0; rows * d];
        let mut rstd = Vec::with_capacity(rows);
        let mut out = vec![0.0; rows * d];
        for i in 0..rows {
            let row = xv.row(i);
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let r = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            for j in 0..d {
                let h = (row[j] - mean) * r;
                xhat[i * d + j] = h;
                out[i * d + j] = h * gv.data()[j] + bv.data()[j];
            }
            rstd.push(r);
        }
        let out = Tensor::new(xv.shape().to_vec(), out)?;
        let rg = self.rg(&[x, gain, bias]);
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
            rg,
        ))
    }

    /// Adds a length-`n` bias to every row of an `m×n` matrix.
    pub fn add_row_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (xv, bv) = (self.value(x), self.value(bias));
        let n = xv.cols();
        if bv.len() != n || xv.shape().len() != 2 {
            return Err(shape_err("add_row_bias", xv, bv));
        }
        let mut out = xv.clone();
        for i in 0..out.rows() {
            for (o, b) in out.row_mut(i).iter_mut().zip(bv.data()) {
                *o += b;
            }
        }
        let rg = self.rg(&[x, bias]);
        Ok(self.push(out, Op::AddRowBias(x, bias), rg))
    }

    /// Concatenates along the leading axis. Vectors concatenate as vectors,
    /// matrices stack their rows.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or_else(|| Error::domain("concat_rows", "no inputs"))?;
        let tail: Vec<usize> = self.value(*first).shape().iter().skip(1).copied().collect();
        let mut data = Vec::new();
        let mut lead = 0;
        for p in parts {
            let pv = self.value(*p);
            if pv.shape().len() != tail.len() + 1 || pv.shape()[1..] != tail[..] {
                return Err(shape_err("concat_rows", self.value(*first), pv));
            }
            lead += pv.shape()[0];
            data.extend_from_slice(pv.data());
        }
        let mut shape = vec![lead];
        shape.extend(tail);
        let rg = self.rg(parts);
        Ok(self.push(Tensor::new(shape, data)?, Op::ConcatRows(parts.to_vec()), rg))
    }

    /// Concatenates matrices with equal row counts side by side.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or_else(|| Error::domain("concat_cols", "no inputs"))?;
        let rows = self.value(*first).rows();
        let mut total = 0;
        for p in parts {
            let pv = self.value(*p);
            if pv.shape().len() != 2 || pv.rows() != rows {
                return Err(shape_err("concat_cols", self.value(*first), pv));
            }
            total += pv.cols();
        }
        let mut out = vec![0.0; rows * total];
        let mut offset = 0;
        for p in parts {
            let pv = self.value(*p);
            let c = pv.cols();
            for i in 0..rows {
                out[i * total + offset..i * total + offset + c].copy_from_slice(pv.row(i));
            }
            offset += c;
        }
        let rg = self.rg(parts);
        Ok(self.push(Tensor::matrix(rows, total, out)?, Op::ConcatCols(parts.to_vec()), rg))
    }

    /// Columns `start..end` of a matrix.
    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let xv = self.value(x);
        if xv.shape().len() != 2 || start >= end || end > xv.cols() {
            return Err(Error::Shape {
                op: "slice_cols",
                lhs: xv.shape().to_vec(),
                rhs: vec![start, end],
            });
        }
        let w = end - start;
        let mut out = Vec::with_capacity(xv.rows() * w);
        for i in 0..xv.rows() {
            out.extend_from_slice(&xv.row(i)[start..end]);
        }
        let out = Tensor::matrix(xv.rows(), w, out)?;
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::SliceCols(x, start, end), rg))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).reshaped(shape)?;
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::Reshape(x), rg))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        if xv.shape().len() != 2 {
            return Err(Error::Shape {
                op: "transpose",
                lhs: xv.shape().to_vec(),
                rhs: vec![],
            });
        }
        let out = xv.transposed();
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::Transpose(x), rg))
    }

    pub fn reduce_sum(&mut self, x: Var) -> Var {
        let out = Tensor::scalar(self.value(x).sum());
        let rg = self.rg(&[x]);
        self.push(out, Op::ReduceSum(x), rg)
    }

    pub fn reduce_mean(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let out = Tensor::scalar(xv.sum() / xv.len() as f64);
        let rg = self.rg(&[x]);
        self.push(out, Op::ReduceMean(x), rg)
    }

    /// Records a scalar computed outside the graph together with its partial
    /// derivatives w.r.t. `inputs`. Each local gradient must match the shape
    /// of its input.
    pub fn fused_scalar(&mut self, value: f64, inputs: Vec<(Var, Tensor)>) -> Result<Var> {
        for (v, g) in &inputs {
            let vv = self.value(*v);
            if vv.shape() != g.shape() {
                return Err(shape_err("fused_scalar", vv, g));
            }
        }
        let vars: Vec<Var> = inputs.iter().map(|(v, _)| *v).collect();
        let rg = self.rg(&vars);
        Ok(self.push(Tensor::scalar(value), Op::Fused(inputs), rg))
    }

    /// Populates gradients of the scalar `root` w.r.t. every node that
    /// requires one. The graph cannot be differentiated again afterwards.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        if self.consumed {
            return Err(Error::GraphConsumed);
        }
        let root_shape = self.value(root).shape().to_vec();
        if root_shape.iter().product::<usize>() != 1 {
            return Err(Error::NonScalarRoot(root_shape));
        }
        self.consumed = true;
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Tensor::full(&root_shape, 1.0));

        for idx in (0..=root.0).rev() {
            let Some(upstream) = grads[idx].take() else {
                continue;
            };
            if !self.nodes[idx].requires_grad {
                continue;
            }
            self.propagate(idx, &upstream, &mut grads)?;
            grads[idx] = Some(upstream);
        }
        for (g, node) in grads.iter_mut().zip(&self.nodes) {
            if !node.requires_grad {
                *g = None;
            }
        }
        self.grads = grads;
        Ok(())
    }

    fn propagate(&self, idx: usize, up: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let node = &self.nodes[idx];
        let out = &node.value;
        let mut acc = |v: Var, g: Tensor| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => {
                    for (e, x) in existing.data_mut().iter_mut().zip(g.data()) {
                        *e += x;
                    }
                }
                slot => *slot = Some(g),
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k, n) = (av.rows(), av.cols(), bv.cols());
                if self.requires_grad(*a) {
                    let mut ga = vec![0.0; m * k];
                    matmul_nt_into(up.data(), bv.data(), &mut ga, m, n, k);
                    acc(*a, Tensor::matrix(m, k, ga)?);
                }
                if self.requires_grad(*b) {
                    let mut gb = vec![0.0; k * n];
                    matmul_tn_into(av.data(), up.data(), &mut gb, m, k, n);
                    acc(*b, Tensor::matrix(k, n, gb)?);
                }
            }
            Op::Binary(kind, a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (ga, gb) = match kind {
                    Elementwise::Add => (up.clone(), up.clone()),
                    Elementwise::Sub => (up.clone(), up.map(|x| -x)),
                    Elementwise::Mul => (zip_map(up, bv, |g, y| g * y), zip_map(up, av, |g, x| g * x)),
                };
                acc(*a, ga);
                acc(*b, gb);
            }
            Op::BinaryScalar(kind, a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let y = bv.item();
                let (ga, gb) = match kind {
                    Elementwise::Add => (up.clone(), up.sum()),
                    Elementwise::Sub => (up.clone(), -up.sum()),
                    Elementwise::Mul => (
                        up.map(|g| g * y),
                        up.data().iter().zip(av.data()).map(|(g, x)| g * x).sum(),
                    ),
                };
                acc(*a, ga);
                acc(*b, Tensor::full(bv.shape(), gb));
            }
            Op::Scale(a, c) => acc(*a, up.map(|g| g * c)),
            Op::Exp(a) => acc(*a, zip_map(up, out, |g, y| g * y)),
            Op::Log(a) => acc(*a, zip_map(up, self.value(*a), |g, x| g / x)),
            Op::Gelu(a) => acc(*a, zip_map(up, self.value(*a), |g, x| g * gelu(x).1)),
            Op::Elu(a) => acc(
                *a,
                zip_map(up, self.value(*a), |g, x| if x > 0.0 { g } else { g * x.exp() }),
            ),
            Op::Clamp(a, lo, hi) => acc(
                *a,
                zip_map(up, self.value(*a), |g, x| if x >= *lo && x <= *hi { g } else { 0.0 }),
            ),
            Op::RowSoftmax(a) => {
                let mut gx = up.clone();
                for i in 0..out.rows() {
                    let y = out.row(i);
                    let dot: f64 = up.row(i).iter().zip(y).map(|(g, y)| g * y).sum();
                    for (gv, (&g, &yv)) in gx.row_mut(i).iter_mut().zip(up.row(i).iter().zip(y)) {
                        *gv = yv * (g - dot);
                    }
                }
                acc(*a, gx);
            }
            Op::L2NormalizeRows(a, norms) => {
                let mut gx = up.clone();
                for (i, norm) in norms.iter().enumerate() {
                    let y = out.row(i);
                    let dot: f64 = up.row(i).iter().zip(y).map(|(g, y)| g * y).sum();
                    for (gv, (&g, &yv)) in gx.row_mut(i).iter_mut().zip(up.row(i).iter().zip(y)) {
                        *gv = (g - yv * dot) / norm;
                    }
                }
                acc(*a, gx);
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let d = out.cols();
                let gv = self.value(*gain).data();
                let mut gx = vec![0.0; out.len()];
                let mut ggain = vec![0.0; d];
                let mut gbias = vec![0.0; d];
                for (i, r) in rstd.iter().enumerate() {
                    let up_row = up.row(i);
                    let xh = &xhat[i * d..(i + 1) * d];
                    let mut sum_dx = 0.0;
                    let mut sum_dx_xh = 0.0;
                    for j in 0..d {
                        let dxh = up_row[j] * gv[j];
                        sum_dx += dxh;
                        sum_dx_xh += dxh * xh[j];
                        ggain[j] += up_row[j] * xh[j];
                        gbias[j] += up_row[j];
                    }
                    for j in 0..d {
                        let dxh = up_row[j] * gv[j];
                        gx[i * d + j] = r / d as f64 * (d as f64 * dxh - sum_dx - xh[j] * sum_dx_xh);
                    }
                }
                acc(*x, Tensor::new(out.shape().to_vec(), gx)?);
                acc(*gain, Tensor::new(self.value(*gain).shape().to_vec(), ggain)?);
                acc(*bias, Tensor::new(self.value(*bias).shape().to_vec(), gbias)?);
            }
            Op::AddRowBias(x, b) => {
                let mut gb = vec![0.0; out.cols()];
                for i in 0..out.rows() {
                    for (s, g) in gb.iter_mut().zip(up.row(i)) {
                        *s += g;
                    }
                }
                acc(*x, up.clone());
                acc(*b, Tensor::new(self.value(*b).shape().to_vec(), gb)?);
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for p in parts {
                    let pv = self.value(*p);
                    let n = pv.len();
                    let g = Tensor::new(pv.shape().to_vec(), up.data()[offset..offset + n].to_vec())?;
                    acc(*p, g);
                    offset += n;
                }
            }
            Op::ConcatCols(parts) => {
                let total = out.cols();
                let mut offset = 0;
                for p in parts {
                    let pv = self.value(*p);
                    let c = pv.cols();
                    let mut g = Vec::with_capacity(pv.len());
                    for i in 0..pv.rows() {
                        g.extend_from_slice(&up.data()[i * total + offset..i * total + offset + c]);
                    }
                    acc(*p, Tensor::matrix(pv.rows(), c, g)?);
                    offset += c;
                }
            }
            Op::SliceCols(x, start, end) => {
                let xv = self.value(*x);
                let mut g = Tensor::zeros(xv.shape());
                let w = end - start;
                for i in 0..xv.rows() {
                    g.row_mut(i)[*start..*end].copy_from_slice(&up.data()[i * w..(i + 1) * w]);
                }
                acc(*x, g);
            }
            Op::Reshape(x) => acc(*x, up.reshaped(self.value(*x).shape())?),
            Op::Transpose(x) => acc(*x, up.transposed()),
            Op::ReduceSum(x) => acc(*x, Tensor::full(self.value(*x).shape(), up.item())),
            Op::ReduceMean(x) => {
                let xv = self.value(*x);
                acc(*x, Tensor::full(xv.shape(), up.item() / xv.len() as f64));
            }
            Op::Fused(inputs) => {
                let g = up.item();
                for (v, local) in inputs {
                    acc(*v, local.map(|d| d * g));
                }
            }
        }
        Ok(())
    }
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::new(a.shape().to_vec(), data).expect("zip_map operands share a shape")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m(rows: usize, cols: usize, data: &[f64]) -> Tensor {
        Tensor::matrix(rows, cols, data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_by_identity_and_by_hand() {
        let mut g = Graph::new();
        let a = g.constant(m(2, 3, &[1., 2., 3., 4., 5., 6.]));
        let i = g.constant(Tensor::identity(3));
        let ai = g.matmul(a, i).unwrap();
        assert_eq!(g.value(ai), g.value(a));

        let x = g.constant(m(2, 2, &[1., 2., 3., 4.]));
        let ones = g.constant(m(2, 1, &[1., 1.]));
        let y = g.matmul(x, ones).unwrap();
        assert_eq!(g.value(y).data(), &[3., 7.]);
    }

    #[test]
    fn matmul_shape_error_reports_both_shapes() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[2, 3]));
        match g.matmul(a, b) {
            Err(Error::Shape { lhs, rhs, .. }) => {
                assert_eq!(lhs, vec![2, 3]);
                assert_eq!(rhs, vec![2, 3]);
            }
            other => panic!("expected shape error, got {other:?}"),
        }
    }

    #[test]
    fn add_zero_and_exp_log_roundtrip() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::vector(vec![0.5, 2.0, 7.25]));
        let zero = g.constant(Tensor::scalar(0.0));
        let y = g.add(x, zero).unwrap();
        assert_eq!(g.value(y), g.value(x));
        let l = g.log(x).unwrap();
        let e = g.exp(l);
        assert!(g.value(e).max_abs_diff(g.value(x)) < 1e-12);
    }

    #[test]
    fn log_rejects_non_positive() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::vector(vec![1.0, 0.0]));
        assert!(matches!(g.log(x), Err(Error::Domain { op: "log", .. })));
    }

    #[test]
    fn softmax_uniform_and_stable() {
        let mut g = Graph::new();
        let x = g.constant(m(2, 4, &[3.0; 8]));
        let y = g.row_softmax(x).unwrap();
        assert!(g.value(y).data().iter().all(|&p| (p - 0.25).abs() < 1e-15));

        let big = g.constant(m(1, 2, &[1000.0, 0.0]));
        let p = g.row_softmax(big).unwrap();
        assert_eq!(g.value(p).data(), &[1.0, 0.0]);
    }

    #[test]
    fn normalize_rows() {
        let mut g = Graph::new();
        let x = g.constant(m(2, 2, &[3., 4., 0.6, 0.8]));
        let y = g.l2_normalize_rows(x).unwrap();
        let yv = g.value(y).data();
        assert!((yv[0] - 0.6).abs() < 1e-15 && (yv[1] - 0.8).abs() < 1e-15);
        assert!((yv[2] - 0.6).abs() < 1e-15 && (yv[3] - 0.8).abs() < 1e-15);

        let z = g.constant(m(1, 2, &[0.0, 1e-13]));
        assert!(matches!(g.l2_normalize_rows(z), Err(Error::Degenerate { row: 0, .. })));
    }

    #[test]
    fn layer_norm_values() {
        let mut g = Graph::new();
        let gain = g.constant(Tensor::ones(&[2]));
        let bias = g.constant(Tensor::zeros(&[2]));
        let c = g.constant(m(1, 2, &[5.0, 5.0]));
        let y = g.layer_norm(c, gain, bias).unwrap();
        assert_eq!(g.value(y).data(), &[0.0, 0.0]);

        let x = g.constant(m(1, 2, &[1.0, -1.0]));
        let y = g.layer_norm(x, gain, bias).unwrap();
        // variance 1, so x̂ = ±1/sqrt(1 + 1e-5)
        let expect = 1.0 / (1.0f64 + 1e-5).sqrt();
        let yv = g.value(y).data();
        assert!((yv[0] - expect).abs() < 1e-15 && (yv[1] + expect).abs() < 1e-15);
        assert!((yv[0] - 1.0).abs() < 1e-4);
    }

    #[test]
    fn shape_algebra() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::vector(vec![1.0, 2.0]));
        let b = g.constant(Tensor::vector(vec![3.0]));
        let c = g.concat_rows(&[a, b]).unwrap();
        assert_eq!(g.value(c).data(), &[1., 2., 3.]);

        let ones = g.constant(Tensor::ones(&[2, 3]));
        let s = g.reduce_sum(ones);
        assert_eq!(g.value(s).item(), 6.0);
        let mean = g.reduce_mean(ones);
        assert_eq!(g.value(mean).item(), 1.0);
        let t = g.transpose(ones).unwrap();
        let tt = g.transpose(t).unwrap();
        assert_eq!(g.value(tt), g.value(ones));
    }

    #[test]
    fn backward_simple_cases() {
        let mut g = Graph::new();
        let x = g.param(Tensor::matrix(2, 2, vec![1., -2., 3., 0.5]).unwrap());
        let s = g.reduce_sum(x);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[1.0; 4]);

        let mut g = Graph::new();
        let x = g.param(Tensor::vector(vec![1.0, 2.0]));
        let sq = g.mul(x, x).unwrap();
        let s = g.reduce_sum(sq);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[2.0, 4.0]);
    }

    #[test]
    fn backward_errors() {
        let mut g = Graph::new();
        let x = g.param(Tensor::vector(vec![1.0, 2.0]));
        assert!(matches!(g.backward(x), Err(Error::NonScalarRoot(_))));
        let s = g.reduce_sum(x);
        g.backward(s).unwrap();
        assert!(matches!(g.backward(s), Err(Error::GraphConsumed)));
    }

    #[test]
    fn constants_get_no_gradient() {
        let mut g = Graph::new();
        let x = g.param(Tensor::vector(vec![1.0, 2.0]));
        let c = g.constant(Tensor::vector(vec![3.0, 4.0]));
        let p = g.mul(x, c).unwrap();
        let s = g.reduce_sum(p);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[3.0, 4.0]);
        assert!(g.grad(c).is_none());
    }
}
