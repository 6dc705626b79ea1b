//! Reverse-mode differentiation over dense `f64` tensors.
//!
//! A [`Tape`] records every operation as it is evaluated. Node ids are
//! assigned in evaluation order, so the record is already topologically
//! sorted and [`Tape::backward`] simply walks it in reverse.
//!
//! Leaf gradients accumulate across `backward` calls until
//! [`Tape::zero_grad`] is invoked.

mod gradcheck;

pub use gradcheck::{finite_difference_check, finite_difference_report, FdCoordinate};

use std::cell::{Ref, RefCell};

use crate::error::{Error, Result};
use crate::tensor::{matmul_nt_raw, matmul_tn_raw, Tensor};

/// Guard applied to norm and cosine denominators.
pub const NORM_EPS: f64 = 1e-12;

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(usize, usize),
    Transpose(usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    BcastAdd(usize, usize),
    BcastMul(usize, usize),
    Scale(usize, f64),
    AddScalar(usize),
    Relu(usize),
    Log(usize),
    Exp(usize),
    /// `min(c, x)`; ties follow the constant.
    MinConst(usize, f64),
    /// `max(x, c)`; ties follow `x`.
    MaxConst(usize, f64),
    Sum(usize),
    Mean(usize),
    L2Norm(usize),
    MeanRows(usize),
    SoftmaxRows(usize, f64),
    LogSoftmaxRows(usize, f64),
    Cosine(usize, usize),
    CosineRows(usize, usize),
    CosineMatrix(usize, usize),
    Diag(usize),
    WithDiagonal(usize, usize),
    Pick(usize, Vec<usize>),
    BatchNorm {
        x: usize,
        scale: usize,
        shift: usize,
        x_hat: Tensor,
        inv_std: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    grad: Option<Tensor>,
}

/// Record of evaluated operations.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var({}, {:?})", self.id, self.value().shape())
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Trainable input: receives gradients.
    pub fn leaf(&self, value: Tensor) -> Var<'_> {
        self.push_unchecked(value, Op::Leaf, true)
    }

    /// Input that never receives gradients.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push_unchecked(value, Op::Leaf, false)
    }

    /// Accumulated gradient of a leaf; zeros if none has reached it yet.
    pub fn grad(&self, var: Var<'_>) -> Tensor {
        let nodes = self.nodes.borrow();
        let node = &nodes[var.id];
        node.grad
            .clone()
            .unwrap_or_else(|| Tensor::zeros(node.value.shape()))
    }

    pub fn zero_grad(&self) {
        for node in self.nodes.borrow_mut().iter_mut() {
            node.grad = None;
        }
    }

    fn push_unchecked(&self, value: Tensor, op: Op, requires_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn push(&self, name: &'static str, value: Tensor, op: Op, parents: &[usize]) -> Result<Var<'_>> {
        if !value.all_finite() {
            return Err(Error::Numeric(name.to_string()));
        }
        let requires_grad = {
            let nodes = self.nodes.borrow();
            parents.iter().any(|&p| nodes[p].requires_grad)
        };
        Ok(self.push_unchecked(value, op, requires_grad))
    }

    fn value(&self, id: usize) -> Ref<'_, Tensor> {
        Ref::map(self.nodes.borrow(), |n| &n[id].value)
    }

    /// Backpropagates from a single-element `loss`, adding into leaf gradients.
    pub fn backward(&self, loss: Var<'_>) -> Result<()> {
        let mut nodes = self.nodes.borrow_mut();
        let root = loss.id;
        if nodes[root].value.numel() != 1 {
            return Err(Error::shape("backward", nodes[root].value.shape(), &[]));
        }
        if !nodes[root].requires_grad {
            return Ok(());
        }
        let mut grads: Vec<Option<Tensor>> = (0..=root).map(|_| None).collect();
        grads[root] = Some(Tensor::ones(nodes[root].value.shape()));

        for id in (0..=root).rev() {
            let Some(g) = grads[id].take() else { continue };
            if !nodes[id].requires_grad {
                continue;
            }
            if let Op::Leaf = nodes[id].op {
                match &mut nodes[id].grad {
                    Some(acc) => acc.axpy(1.0, &g)?,
                    slot @ None => *slot = Some(g),
                }
                continue;
            }
            let contributions = local_grads(&nodes, id, &g)?;
            for (parent, pg) in contributions {
                if !nodes[parent].requires_grad {
                    continue;
                }
                match &mut grads[parent] {
                    Some(acc) => acc.axpy(1.0, &pg)?,
                    slot @ None => *slot = Some(pg),
                }
            }
        }
        Ok(())
    }
}

fn rows_cols(t: &Tensor) -> (usize, usize) {
    (t.rows(), t.cols())
}

fn require_rank2(op: &'static str, t: &Tensor) -> Result<(usize, usize)> {
    if t.rank() != 2 {
        return Err(Error::shape(op, t.shape(), &[0, 0]));
    }
    Ok(rows_cols(t))
}

/// Shape check for broadcasting `b` onto `a`: each dim of `b` equals `a`'s or is 1;
/// a single-element `b` of any rank is a scalar.
fn broadcast_ok(a: &Tensor, b: &Tensor) -> bool {
    if b.numel() == 1 {
        return true;
    }
    a.rank() == 2
        && b.rank() == 2
        && (b.shape()[0] == a.shape()[0] || b.shape()[0] == 1)
        && (b.shape()[1] == a.shape()[1] || b.shape()[1] == 1)
}

fn broadcast_index(a_cols: usize, b: &Tensor) -> impl Fn(usize) -> usize + '_ {
    let (br, bc) = if b.numel() == 1 { (1, 1) } else { (b.shape()[0], b.shape()[1]) };
    move |flat: usize| {
        let (r, c) = (flat / a_cols, flat % a_cols);
        let rb = if br == 1 { 0 } else { r };
        let cb = if bc == 1 { 0 } else { c };
        rb * bc + cb
    }
}

fn softmax_row(row: &[f64], tau: f64, out: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (o, &v) in out.iter_mut().zip(row) {
        *o = ((v - max) / tau).exp();
        sum += *o;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
}

fn log_softmax_row(row: &[f64], tau: f64, out: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = row.iter().map(|&v| ((v - max) / tau).exp()).sum::<f64>().ln();
    for (o, &v) in out.iter_mut().zip(row) {
        *o = (v - max) / tau - lse;
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Returns `(cos, 1/denominator, guarded, |u|^2, |v|^2)`.
fn cosine_parts(u: &[f64], v: &[f64]) -> (f64, f64, bool, f64, f64) {
    let nu2 = dot(u, u);
    let nv2 = dot(v, v);
    let prod = (nu2 * nv2).sqrt();
    let uv = dot(u, v);
    if prod >= NORM_EPS {
        (uv / prod, 1.0 / prod, false, nu2, nv2)
    } else {
        (uv / NORM_EPS, 1.0 / NORM_EPS, true, nu2, nv2)
    }
}

/// Adds `g * dc/du` into `du` and `g * dc/dv` into `dv`.
fn cosine_backward(u: &[f64], v: &[f64], g: f64, du: &mut [f64], dv: &mut [f64]) {
    let (c, inv_den, guarded, nu2, nv2) = cosine_parts(u, v);
    for k in 0..u.len() {
        let mut gu = v[k] * inv_den;
        let mut gv = u[k] * inv_den;
        if !guarded {
            gu -= c * u[k] / nu2;
            gv -= c * v[k] / nv2;
        }
        du[k] += g * gu;
        dv[k] += g * gv;
    }
}

fn local_grads(nodes: &[Node], id: usize, g: &Tensor) -> Result<Vec<(usize, Tensor)>> {
    let val = |i: usize| &nodes[i].value;
    let out = &nodes[id].value;
    let res = match &nodes[id].op {
        Op::Leaf => Vec::new(),
        Op::MatMul(a, b) => {
            let (av, bv) = (val(*a), val(*b));
            let (m, k) = rows_cols(av);
            let n = bv.cols();
            let ga = matmul_nt_raw(g.data(), bv.data(), m, n, k);
            let gb = matmul_tn_raw(av.data(), g.data(), m, k, n);
            vec![(*a, Tensor::matrix(m, k, ga)), (*b, Tensor::matrix(k, n, gb))]
        }
        Op::Transpose(a) => vec![(*a, g.transpose()?)],
        Op::Add(a, b) => vec![(*a, g.clone()), (*b, g.clone())],
        Op::Sub(a, b) => vec![(*a, g.clone()), (*b, g.map(|v| -v))],
        Op::Mul(a, b) => {
            let ga = g.zip_map(val(*b), |x, y| x * y)?;
            let gb = g.zip_map(val(*a), |x, y| x * y)?;
            vec![(*a, ga), (*b, gb)]
        }
        Op::BcastAdd(a, b) => {
            let bv = val(*b);
            let idx = broadcast_index(out.cols(), bv);
            let mut gb = Tensor::zeros(bv.shape());
            for (flat, &gv) in g.data().iter().enumerate() {
                gb.data_mut()[idx(flat)] += gv;
            }
            vec![(*a, g.clone()), (*b, gb)]
        }
        Op::BcastMul(a, b) => {
            let (av, bv) = (val(*a), val(*b));
            let idx = broadcast_index(out.cols(), bv);
            let mut ga = Tensor::zeros(av.shape());
            let mut gb = Tensor::zeros(bv.shape());
            for (flat, &gv) in g.data().iter().enumerate() {
                let j = idx(flat);
                ga.data_mut()[flat] = gv * bv.data()[j];
                gb.data_mut()[j] += gv * av.data()[flat];
            }
            vec![(*a, ga), (*b, gb)]
        }
        Op::Scale(a, s) => vec![(*a, g.map(|v| v * s))],
        Op::AddScalar(a) => vec![(*a, g.clone())],
        Op::Relu(a) => vec![(*a, g.zip_map(val(*a), |gv, x| if x > 0.0 { gv } else { 0.0 })?)],
        Op::Log(a) => vec![(*a, g.zip_map(val(*a), |gv, x| gv / x)?)],
        Op::Exp(a) => vec![(*a, g.zip_map(out, |gv, y| gv * y)?)],
        Op::MinConst(a, c) => {
            let c = *c;
            vec![(*a, g.zip_map(val(*a), |gv, x| if x < c { gv } else { 0.0 })?)]
        }
        Op::MaxConst(a, c) => {
            let c = *c;
            vec![(*a, g.zip_map(val(*a), |gv, x| if x >= c { gv } else { 0.0 })?)]
        }
        Op::Sum(a) => vec![(*a, Tensor::full(val(*a).shape(), g.item()))],
        Op::Mean(a) => {
            let n = val(*a).numel() as f64;
            vec![(*a, Tensor::full(val(*a).shape(), g.item() / n))]
        }
        Op::L2Norm(a) => {
            let x = val(*a);
            let norm = out.item().max(NORM_EPS);
            let gv = g.item();
            vec![(*a, x.map(|v| gv * v / norm))]
        }
        Op::MeanRows(a) => {
            let x = val(*a);
            let (m, n) = rows_cols(x);
            let mut ga = Tensor::zeros(x.shape());
            for r in 0..m {
                for c in 0..n {
                    ga.data_mut()[r * n + c] = g.data()[c] / m as f64;
                }
            }
            vec![(*a, ga)]
        }
        Op::SoftmaxRows(a, tau) => {
            let (m, n) = rows_cols(out);
            let mut ga = Tensor::zeros(out.shape());
            for r in 0..m {
                let y = out.row(r);
                let gr = g.row(r);
                let s = dot(gr, y);
                let dst = ga.row_mut(r);
                for c in 0..n {
                    dst[c] = y[c] * (gr[c] - s) / tau;
                }
            }
            vec![(*a, ga)]
        }
        Op::LogSoftmaxRows(a, tau) => {
            let (m, n) = rows_cols(out);
            let mut ga = Tensor::zeros(out.shape());
            for r in 0..m {
                let y = out.row(r);
                let gr = g.row(r);
                let s: f64 = gr.iter().sum();
                let dst = ga.row_mut(r);
                for c in 0..n {
                    dst[c] = (gr[c] - y[c].exp() * s) / tau;
                }
            }
            vec![(*a, ga)]
        }
        Op::Cosine(a, b) => {
            let (u, v) = (val(*a), val(*b));
            let mut du = Tensor::zeros(u.shape());
            let mut dv = Tensor::zeros(v.shape());
            cosine_backward(u.data(), v.data(), g.item(), du.data_mut(), dv.data_mut());
            vec![(*a, du), (*b, dv)]
        }
        Op::CosineRows(a, b) => {
            let (u, v) = (val(*a), val(*b));
            let mut du = Tensor::zeros(u.shape());
            let mut dv = Tensor::zeros(v.shape());
            for r in 0..u.rows() {
                let gr = g.data()[r];
                if gr == 0.0 {
                    continue;
                }
                cosine_backward(u.row(r), v.row(r), gr, du.row_mut(r), dv.row_mut(r));
            }
            vec![(*a, du), (*b, dv)]
        }
        Op::CosineMatrix(a, b) => {
            let (u, v) = (val(*a), val(*b));
            let mut du = Tensor::zeros(u.shape());
            let mut dv = Tensor::zeros(v.shape());
            let n = v.rows();
            let d = u.cols();
            let mut tmp_u = vec![0.0; d];
            let mut tmp_v = vec![0.0; d];
            for i in 0..u.rows() {
                for j in 0..n {
                    let gij = g.data()[i * n + j];
                    if gij == 0.0 {
                        continue;
                    }
                    tmp_u.iter_mut().for_each(|x| *x = 0.0);
                    tmp_v.iter_mut().for_each(|x| *x = 0.0);
                    cosine_backward(u.row(i), v.row(j), gij, &mut tmp_u, &mut tmp_v);
                    for (dst, t) in du.row_mut(i).iter_mut().zip(&tmp_u) {
                        *dst += t;
                    }
                    for (dst, t) in dv.row_mut(j).iter_mut().zip(&tmp_v) {
                        *dst += t;
                    }
                }
            }
            vec![(*a, du), (*b, dv)]
        }
        Op::Diag(a) => {
            let n = val(*a).rows();
            let mut ga = Tensor::zeros([n, n]);
            for i in 0..n {
                ga.data_mut()[i * n + i] = g.data()[i];
            }
            vec![(*a, ga)]
        }
        Op::WithDiagonal(a, d) => {
            let n = out.rows();
            let mut ga = g.clone();
            let mut gd = Tensor::zeros(val(*d).shape());
            for i in 0..n {
                gd.data_mut()[i] = g.data()[i * n + i];
                ga.data_mut()[i * n + i] = 0.0;
            }
            vec![(*a, ga), (*d, gd)]
        }
        Op::Pick(a, indices) => {
            let x = val(*a);
            let n = x.cols();
            let mut ga = Tensor::zeros(x.shape());
            for (r, &c) in indices.iter().enumerate() {
                ga.data_mut()[r * n + c] = g.data()[r];
            }
            vec![(*a, ga)]
        }
        Op::BatchNorm {
            x,
            scale,
            shift,
            x_hat,
            inv_std,
        } => {
            let (m, n) = rows_cols(x_hat);
            let gamma = val(*scale);
            let mut g_scale = Tensor::zeros(gamma.shape());
            let mut g_shift = Tensor::zeros(gamma.shape());
            let mut gx = Tensor::zeros(x_hat.shape());
            #[allow(clippy::needless_range_loop)]
            for c in 0..n {
                let mut sum_g = 0.0;
                let mut sum_gx = 0.0;
                for r in 0..m {
                    let gv = g.data()[r * n + c];
                    sum_g += gv;
                    sum_gx += gv * x_hat.data()[r * n + c];
                }
                g_scale.data_mut()[c] = sum_gx;
                g_shift.data_mut()[c] = sum_g;
                let gm = gamma.data()[c];
                let k = gm * inv_std[c] / m as f64;
                for r in 0..m {
                    let i = r * n + c;
                    gx.data_mut()[i] =
                        k * (m as f64 * g.data()[i] - sum_g - x_hat.data()[i] * sum_gx);
                }
            }
            vec![(*x, gx), (*scale, g_scale), (*shift, g_shift)]
        }
    };
    Ok(res)
}

impl<'t> Var<'t> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    /// Borrow of the recorded value.
    pub fn value(&self) -> Ref<'t, Tensor> {
        self.tape.value(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    /// Single-element value.
    pub fn item(&self) -> f64 {
        self.value().item()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.nodes.borrow()[self.id].requires_grad
    }

    /// Same value, cut off from the graph.
    pub fn detach(&self) -> Var<'t> {
        let v = self.value().clone();
        self.tape.constant(v)
    }

    fn same_shape(&self, other: Var<'t>, op: &'static str) -> Result<()> {
        let (a, b) = (self.value(), other.value());
        if a.shape() != b.shape() {
            return Err(Error::shape(op, a.shape(), b.shape()));
        }
        Ok(())
    }

    pub fn matmul(self, other: Var<'t>) -> Result<Var<'t>> {
        let out = self.value().matmul(&other.value())?;
        self.tape.push("matmul", out, Op::MatMul(self.id, other.id), &[self.id, other.id])
    }

    pub fn t(self) -> Result<Var<'t>> {
        let out = self.value().transpose()?;
        self.tape.push("transpose", out, Op::Transpose(self.id), &[self.id])
    }

    pub fn add(self, other: Var<'t>) -> Result<Var<'t>> {
        self.same_shape(other, "add")?;
        let out = self.value().zip_map(&other.value(), |a, b| a + b)?;
        self.tape.push("add", out, Op::Add(self.id, other.id), &[self.id, other.id])
    }

    pub fn sub(self, other: Var<'t>) -> Result<Var<'t>> {
        self.same_shape(other, "sub")?;
        let out = self.value().zip_map(&other.value(), |a, b| a - b)?;
        self.tape.push("sub", out, Op::Sub(self.id, other.id), &[self.id, other.id])
    }

    pub fn mul(self, other: Var<'t>) -> Result<Var<'t>> {
        self.same_shape(other, "mul")?;
        let out = self.value().zip_map(&other.value(), |a, b| a * b)?;
        self.tape.push("mul", out, Op::Mul(self.id, other.id), &[self.id, other.id])
    }

    fn broadcast(self, other: Var<'t>, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let (a, b) = (self.value(), other.value());
        if !broadcast_ok(&a, &b) {
            return Err(Error::shape(op, a.shape(), b.shape()));
        }
        let idx = broadcast_index(a.cols(), &b);
        let data = a
            .data()
            .iter()
            .enumerate()
            .map(|(flat, &x)| f(x, b.data()[idx(flat)]))
            .collect();
        Tensor::new(a.shape(), data)
    }

    /// `self + other` with `other` broadcast over unit dimensions (row, column or scalar).
    pub fn bcast_add(self, other: Var<'t>) -> Result<Var<'t>> {
        let out = self.broadcast(other, "bcast_add", |a, b| a + b)?;
        self.tape.push("bcast_add", out, Op::BcastAdd(self.id, other.id), &[self.id, other.id])
    }

    /// `self * other` with `other` broadcast over unit dimensions.
    pub fn bcast_mul(self, other: Var<'t>) -> Result<Var<'t>> {
        let out = self.broadcast(other, "bcast_mul", |a, b| a * b)?;
        self.tape.push("bcast_mul", out, Op::BcastMul(self.id, other.id), &[self.id, other.id])
    }

    pub fn scale(self, s: f64) -> Result<Var<'t>> {
        let out = self.value().map(|v| v * s);
        self.tape.push("scale", out, Op::Scale(self.id, s), &[self.id])
    }

    pub fn neg(self) -> Result<Var<'t>> {
        self.scale(-1.0)
    }

    pub fn add_scalar(self, s: f64) -> Result<Var<'t>> {
        let out = self.value().map(|v| v + s);
        self.tape.push("add_scalar", out, Op::AddScalar(self.id), &[self.id])
    }

    /// Rectifier; the subgradient at 0 is 0.
    pub fn relu(self) -> Result<Var<'t>> {
        let out = self.value().map(|v| v.max(0.0));
        self.tape.push("relu", out, Op::Relu(self.id), &[self.id])
    }

    pub fn log(self) -> Result<Var<'t>> {
        let out = {
            let x = self.value();
            if let Some(bad) = x.data().iter().find(|&&v| v <= 0.0) {
                return Err(Error::Domain {
                    op: "log",
                    msg: format!("non-positive input {bad}"),
                });
            }
            x.map(f64::ln)
        };
        self.tape.push("log", out, Op::Log(self.id), &[self.id])
    }

    pub fn exp(self) -> Result<Var<'t>> {
        let out = self.value().map(f64::exp);
        self.tape.push("exp", out, Op::Exp(self.id), &[self.id])
    }

    /// `min(c, self)` elementwise. Gradient passes only where `self < c`.
    pub fn min_const(self, c: f64) -> Result<Var<'t>> {
        let out = self.value().map(|v| if v < c { v } else { c });
        self.tape.push("min_const", out, Op::MinConst(self.id, c), &[self.id])
    }

    /// `max(self, c)` elementwise. Gradient passes where `self >= c`.
    pub fn clamp_min(self, c: f64) -> Result<Var<'t>> {
        let out = self.value().map(|v| if v >= c { v } else { c });
        self.tape.push("clamp_min", out, Op::MaxConst(self.id, c), &[self.id])
    }

    fn nonempty(&self, op: &'static str) -> Result<()> {
        if self.value().numel() == 0 {
            return Err(Error::shape(op, self.value().shape(), &[1]));
        }
        Ok(())
    }

    pub fn sum(self) -> Result<Var<'t>> {
        self.nonempty("sum")?;
        let out = Tensor::scalar(self.value().sum());
        self.tape.push("sum", out, Op::Sum(self.id), &[self.id])
    }

    pub fn mean(self) -> Result<Var<'t>> {
        self.nonempty("mean")?;
        let out = {
            let x = self.value();
            Tensor::scalar(x.sum() / x.numel() as f64)
        };
        self.tape.push("mean", out, Op::Mean(self.id), &[self.id])
    }

    /// Euclidean norm of all entries.
    pub fn l2norm(self) -> Result<Var<'t>> {
        self.nonempty("l2norm")?;
        let out = Tensor::scalar(self.value().data().iter().map(|v| v * v).sum::<f64>().sqrt());
        self.tape.push("l2norm", out, Op::L2Norm(self.id), &[self.id])
    }

    /// Column means of an `m×n` matrix as a `1×n` row.
    pub fn mean_rows(self) -> Result<Var<'t>> {
        let out = {
            let x = self.value();
            let (m, n) = require_rank2("mean_rows", &x)?;
            if m == 0 {
                return Err(Error::shape("mean_rows", x.shape(), &[1, n]));
            }
            let mut acc = vec![0.0; n];
            for r in 0..m {
                for (a, v) in acc.iter_mut().zip(x.row(r)) {
                    *a += v;
                }
            }
            Tensor::matrix(1, n, acc.into_iter().map(|v| v / m as f64).collect())
        };
        self.tape.push("mean_rows", out, Op::MeanRows(self.id), &[self.id])
    }

    fn check_tau(tau: f64) -> Result<()> {
        if !(tau > 0.0) || !tau.is_finite() {
            return Err(Error::param(format!("temperature must be positive, got {tau}")));
        }
        Ok(())
    }

    /// Row-wise `softmax(x / tau)`; a vector is treated as one row.
    pub fn softmax(self, tau: f64) -> Result<Var<'t>> {
        Self::check_tau(tau)?;
        let out = {
            let x = self.value();
            let mut out = Tensor::zeros(x.shape());
            for r in 0..x.rows() {
                softmax_row(x.row(r), tau, out.row_mut(r));
            }
            out
        };
        self.tape.push("softmax", out, Op::SoftmaxRows(self.id, tau), &[self.id])
    }

    /// Row-wise `log(softmax(x / tau))`.
    pub fn log_softmax(self, tau: f64) -> Result<Var<'t>> {
        Self::check_tau(tau)?;
        let out = {
            let x = self.value();
            let mut out = Tensor::zeros(x.shape());
            for r in 0..x.rows() {
                log_softmax_row(x.row(r), tau, out.row_mut(r));
            }
            out
        };
        self.tape.push("log_softmax", out, Op::LogSoftmaxRows(self.id, tau), &[self.id])
    }

    /// Cosine similarity of two equally long tensors, treated as flat vectors.
    /// The denominator is `max(|u||v|, 1e-12)`.
    pub fn cosine(self, other: Var<'t>) -> Result<Var<'t>> {
        let out = {
            let (u, v) = (self.value(), other.value());
            if u.numel() != v.numel() {
                return Err(Error::shape("cosine", u.shape(), v.shape()));
            }
            Tensor::scalar(cosine_parts(u.data(), v.data()).0)
        };
        self.tape.push("cosine", out, Op::Cosine(self.id, other.id), &[self.id, other.id])
    }

    /// Cosine between matching rows of two `m×d` matrices, as an `m×1` column.
    pub fn cosine_rows(self, other: Var<'t>) -> Result<Var<'t>> {
        let out = {
            let (u, v) = (self.value(), other.value());
            if u.rank() != 2 || u.shape() != v.shape() {
                return Err(Error::shape("cosine_rows", u.shape(), v.shape()));
            }
            let data = (0..u.rows()).map(|r| cosine_parts(u.row(r), v.row(r)).0).collect();
            Tensor::matrix(u.rows(), 1, data)
        };
        self.tape.push("cosine_rows", out, Op::CosineRows(self.id, other.id), &[self.id, other.id])
    }

    /// All-pairs cosine between rows of `m×d` and `n×d`, giving `m×n`.
    pub fn cosine_matrix(self, other: Var<'t>) -> Result<Var<'t>> {
        let out = {
            let (u, v) = (self.value(), other.value());
            if u.rank() != 2 || v.rank() != 2 || u.cols() != v.cols() {
                return Err(Error::shape("cosine_matrix", u.shape(), v.shape()));
            }
            let (m, n) = (u.rows(), v.rows());
            let mut data = Vec::with_capacity(m * n);
            for i in 0..m {
                for j in 0..n {
                    data.push(cosine_parts(u.row(i), v.row(j)).0);
                }
            }
            Tensor::matrix(m, n, data)
        };
        self.tape
            .push("cosine_matrix", out, Op::CosineMatrix(self.id, other.id), &[self.id, other.id])
    }

    /// Diagonal of a square matrix as an `n×1` column.
    pub fn diag(self) -> Result<Var<'t>> {
        let out = {
            let x = self.value();
            let (m, n) = require_rank2("diag", &x)?;
            if m != n {
                return Err(Error::shape("diag", x.shape(), &[m, m]));
            }
            Tensor::matrix(n, 1, (0..n).map(|i| x.get(i, i)).collect())
        };
        self.tape.push("diag", out, Op::Diag(self.id), &[self.id])
    }

    /// Copy of a square matrix with its diagonal replaced by the `n×1` column `diag`.
    pub fn with_diagonal(self, diag: Var<'t>) -> Result<Var<'t>> {
        let out = {
            let (x, d) = (self.value(), diag.value());
            let (m, n) = require_rank2("with_diagonal", &x)?;
            if m != n || d.numel() != n {
                return Err(Error::shape("with_diagonal", x.shape(), d.shape()));
            }
            let mut out = x.clone();
            for i in 0..n {
                out.data_mut()[i * n + i] = d.data()[i];
            }
            out
        };
        self.tape
            .push("with_diagonal", out, Op::WithDiagonal(self.id, diag.id), &[self.id, diag.id])
    }

    /// `out[r] = self[r, indices[r]]` as an `m×1` column.
    pub fn pick(self, indices: &[usize]) -> Result<Var<'t>> {
        let out = {
            let x = self.value();
            let (m, n) = require_rank2("pick", &x)?;
            if indices.len() != m {
                return Err(Error::shape("pick", x.shape(), &[indices.len()]));
            }
            if let Some(&bad) = indices.iter().find(|&&c| c >= n) {
                return Err(Error::Label(format!("index {bad} out of range for {n} columns")));
            }
            Tensor::matrix(m, 1, indices.iter().enumerate().map(|(r, &c)| x.get(r, c)).collect())
        };
        self.tape
            .push("pick", out, Op::Pick(self.id, indices.to_vec()), &[self.id])
    }

    /// Training-mode batch normalisation over rows with population variance.
    ///
    /// Returns the output plus the batch mean and variance per column so the
    /// caller can update running statistics.
    pub fn batch_norm(self, scale: Var<'t>, shift: Var<'t>, eps: f64) -> Result<(Var<'t>, Vec<f64>, Vec<f64>)> {
        let (out, x_hat, inv_std, mean, var) = {
            let (x, gamma, beta) = (self.value(), scale.value(), shift.value());
            let (m, n) = require_rank2("batch_norm", &x)?;
            if gamma.numel() != n || beta.numel() != n {
                return Err(Error::shape("batch_norm", x.shape(), gamma.shape()));
            }
            let mut mean = vec![0.0; n];
            let mut var = vec![0.0; n];
            for r in 0..m {
                for (acc, v) in mean.iter_mut().zip(x.row(r)) {
                    *acc += v;
                }
            }
            mean.iter_mut().for_each(|v| *v /= m as f64);
            for r in 0..m {
                for c in 0..n {
                    let d = x.get(r, c) - mean[c];
                    var[c] += d * d;
                }
            }
            var.iter_mut().for_each(|v| *v /= m as f64);
            let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
            let mut x_hat = Tensor::zeros(x.shape());
            let mut out = Tensor::zeros(x.shape());
            for r in 0..m {
                for c in 0..n {
                    let h = (x.get(r, c) - mean[c]) * inv_std[c];
                    x_hat.data_mut()[r * n + c] = h;
                    out.data_mut()[r * n + c] = h * gamma.data()[c] + beta.data()[c];
                }
            }
            (out, x_hat, inv_std, mean, var)
        };
        let op = Op::BatchNorm {
            x: self.id,
            scale: scale.id,
            shift: shift.id,
            x_hat,
            inv_std,
        };
        let y = self.tape.push("batch_norm", out, op, &[self.id, scale.id, shift.id])?;
        Ok((y, mean, var))
    }
}
