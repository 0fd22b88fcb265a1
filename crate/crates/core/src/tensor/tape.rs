//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Nodes are appended in evaluation order, so the tape is already a
//! topological sort; `backward` walks it once from the loss towards the
//! leaves. Leaves may borrow their value (frozen model weights) to avoid
//! copying large matrices into every step's tape.

use super::kernel::{gemm, Operand};
use super::{log_softmax_in_place, softmax_in_place, Tensor};
use crate::error::{Error, Result};
use std::borrow::Cow;

const RMS_EPS: f64 = 1e-6;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Silu(Var),
    Exp(Var),
    Log(Var),
    Sum(Var),
    Mean(Var),
    L1(Var),
    SoftmaxRows(Var),
    LogSoftmaxRows(Var),
    RmsNormRows { x: Var, inv_rms: Vec<f64> },
    RowScale(Var, Var),
    ConcatCols(Vec<Var>),
    GatherRows { src: Var, idx: Vec<usize> },
    ScatterAddRows { src: Var, idx: Vec<usize> },
    GatherElems { src: Var, flat: Vec<usize> },
    NormalizeRows(Var),
    KlRows { student: Var, teacher: Tensor },
    NllRows { logits: Var, targets: Vec<usize> },
}

struct Node<'a> {
    value: Cow<'a, Tensor>,
    op: Op,
    requires_grad: bool,
}

/// A single-use recording of a computation. Build one per training step.
#[derive(Default)]
pub struct Tape<'a> {
    nodes: Vec<Node<'a>>,
}

/// Gradients of a scalar loss with respect to every tape leaf.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient for `v`; zero when `v` did not influence the loss.
    pub fn get(&self, v: Var) -> Tensor {
        match &self.grads[v.0] {
            Some(g) => g.clone(),
            None => Tensor::zeros(&self.shapes[v.0]),
        }
    }

    pub fn take(&mut self, v: Var) -> Tensor {
        self.grads[v.0]
            .take()
            .unwrap_or_else(|| Tensor::zeros(&self.shapes[v.0]))
    }
}

fn rows_cols(t: &Tensor) -> (usize, usize) {
    (t.rows(), t.cols())
}

impl<'a> Tape<'a> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
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

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn leaf(&mut self, value: Cow<'a, Tensor>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Trainable leaf owning its value.
    pub fn param(&mut self, t: Tensor) -> Var {
        self.leaf(Cow::Owned(t), true)
    }

    /// Trainable leaf borrowing its value.
    pub fn param_ref(&mut self, t: &'a Tensor) -> Var {
        self.leaf(Cow::Borrowed(t), true)
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.leaf(Cow::Owned(t), false)
    }

    pub fn constant_ref(&mut self, t: &'a Tensor) -> Var {
        self.leaf(Cow::Borrowed(t), false)
    }

    fn push(&mut self, name: &'static str, value: Tensor, op: Op, parents: &[Var]) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite(name));
        }
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            value: Cow::Owned(value),
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(Error::shape(op, format!("{sa:?} vs {sb:?}")));
        }
        Ok(())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        self.push("matmul", out, Op::MatMul(a, b), &[a, b])
    }

    fn zip_with(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Tensor> {
        self.same_shape(name, a, b)?;
        let (va, vb) = (self.value(a), self.value(b));
        let data = va
            .data()
            .iter()
            .zip(vb.data())
            .map(|(x, y)| f(*x, *y))
            .collect();
        Ok(Tensor::from_parts(va.shape().to_vec(), data))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_with("add", a, b, |x, y| x + y)?;
        self.push("add", out, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_with("sub", a, b, |x, y| x - y)?;
        self.push("sub", out, Op::Sub(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_with("mul", a, b, |x, y| x * y)?;
        self.push("mul", out, Op::Mul(a, b), &[a, b])
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let out = self.value(a).map(|x| x * c);
        self.push("scale", out, Op::Scale(a, c), &[a])
    }

    pub fn silu(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(|x| x * sigmoid(x));
        self.push("silu", out, Op::Silu(a), &[a])
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(f64::exp);
        self.push("exp", out, Op::Exp(a), &[a])
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(f64::ln);
        self.push("log", out, Op::Log(a), &[a])
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let out = Tensor::from_parts(vec![1], vec![self.value(a).sum()]);
        self.push("sum", out, Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a);
        if v.is_empty() {
            return Err(Error::InvalidArgument("mean of an empty tensor".into()));
        }
        let out = Tensor::from_parts(vec![1], vec![v.sum() / v.len() as f64]);
        self.push("mean", out, Op::Mean(a), &[a])
    }

    /// ℓ1 norm, Σ|x|.
    pub fn l1(&mut self, a: Var) -> Result<Var> {
        let out = Tensor::from_parts(
            vec![1],
            vec![self.value(a).data().iter().map(|x| x.abs()).sum()],
        );
        self.push("l1", out, Op::L1(a), &[a])
    }

    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let mut out = self.value(a).clone();
        for r in 0..out.rows() {
            softmax_in_place(out.row_mut(r));
        }
        self.push("softmax_rows", out, Op::SoftmaxRows(a), &[a])
    }

    pub fn log_softmax_rows(&mut self, a: Var) -> Result<Var> {
        let mut out = self.value(a).clone();
        for r in 0..out.rows() {
            log_softmax_in_place(out.row_mut(r));
        }
        self.push("log_softmax_rows", out, Op::LogSoftmaxRows(a), &[a])
    }

    /// Parameter-free RMS normalisation of each row.
    pub fn rms_norm_rows(&mut self, a: Var) -> Result<Var> {
        let mut out = self.value(a).clone();
        let cols = out.cols() as f64;
        let mut inv_rms = Vec::with_capacity(out.rows());
        for r in 0..out.rows() {
            let row = out.row_mut(r);
            let ms = row.iter().map(|v| v * v).sum::<f64>() / cols;
            let inv = 1.0 / (ms + RMS_EPS).sqrt();
            row.iter_mut().for_each(|v| *v *= inv);
            inv_rms.push(inv);
        }
        self.push(
            "rms_norm_rows",
            out,
            Op::RmsNormRows { x: a, inv_rms },
            &[a],
        )
    }

    /// Multiplies row `i` of `x` by `s[i]`.
    pub fn row_scale(&mut self, x: Var, s: Var) -> Result<Var> {
        let (vx, vs) = (self.value(x), self.value(s));
        if vs.len() != vx.rows() {
            return Err(Error::shape(
                "row_scale",
                format!("{} scales for {} rows", vs.len(), vx.rows()),
            ));
        }
        let mut out = vx.clone();
        for r in 0..out.rows() {
            let c = vs.data()[r];
            out.row_mut(r).iter_mut().for_each(|v| *v *= c);
        }
        self.push("row_scale", out, Op::RowScale(x, s), &[x, s])
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = parts
            .first()
            .map(|p| self.value(*p).rows())
            .ok_or_else(|| Error::InvalidArgument("concat of nothing".into()))?;
        if parts.iter().any(|p| self.value(*p).rows() != rows) {
            return Err(Error::shape("concat_cols", "row counts differ"));
        }
        let total: usize = parts.iter().map(|p| self.value(*p).cols()).sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for p in parts {
                data.extend_from_slice(self.value(*p).row(r));
            }
        }
        let out = Tensor::from_parts(vec![rows, total], data);
        self.push("concat_cols", out, Op::ConcatCols(parts.to_vec()), parts)
    }

    pub fn gather_rows(&mut self, src: Var, idx: &[usize]) -> Result<Var> {
        let v = self.value(src);
        let (rows, cols) = rows_cols(v);
        if let Some(bad) = idx.iter().find(|&&i| i >= rows) {
            return Err(Error::InvalidArgument(format!(
                "gather row {bad} of {rows}"
            )));
        }
        let mut data = Vec::with_capacity(idx.len() * cols);
        for &i in idx {
            data.extend_from_slice(v.row(i));
        }
        let out = Tensor::from_parts(vec![idx.len(), cols], data);
        self.push(
            "gather_rows",
            out,
            Op::GatherRows {
                src,
                idx: idx.to_vec(),
            },
            &[src],
        )
    }

    /// Output has `out_rows` rows; row `idx[r]` accumulates `src[r]`.
    pub fn scatter_add_rows(&mut self, src: Var, idx: &[usize], out_rows: usize) -> Result<Var> {
        let v = self.value(src);
        let (rows, cols) = rows_cols(v);
        if idx.len() != rows {
            return Err(Error::shape(
                "scatter_add_rows",
                format!("{} indices for {rows} rows", idx.len()),
            ));
        }
        if let Some(bad) = idx.iter().find(|&&i| i >= out_rows) {
            return Err(Error::InvalidArgument(format!(
                "scatter row {bad} of {out_rows}"
            )));
        }
        let mut out = Tensor::zeros(&[out_rows, cols]);
        for (r, &i) in idx.iter().enumerate() {
            for (o, s) in out.row_mut(i).iter_mut().zip(v.row(r)) {
                *o += s;
            }
        }
        self.push(
            "scatter_add_rows",
            out,
            Op::ScatterAddRows {
                src,
                idx: idx.to_vec(),
            },
            &[src],
        )
    }

    /// Picks entries of `src` by flat row-major index into a tensor of `shape`.
    pub fn gather_elems(&mut self, src: Var, flat: &[usize], shape: Vec<usize>) -> Result<Var> {
        let v = self.value(src);
        if shape.iter().product::<usize>() != flat.len() {
            return Err(Error::shape(
                "gather_elems",
                format!("{} picks into {shape:?}", flat.len()),
            ));
        }
        if let Some(bad) = flat.iter().find(|&&i| i >= v.len()) {
            return Err(Error::InvalidArgument(format!(
                "gather element {bad} of {}",
                v.len()
            )));
        }
        let data = flat.iter().map(|&i| v.data()[i]).collect();
        let out = Tensor::from_parts(shape, data);
        self.push(
            "gather_elems",
            out,
            Op::GatherElems {
                src,
                flat: flat.to_vec(),
            },
            &[src],
        )
    }

    /// Divides each row by its sum.
    pub fn normalize_rows(&mut self, a: Var) -> Result<Var> {
        let mut out = self.value(a).clone();
        for r in 0..out.rows() {
            let row = out.row_mut(r);
            let s: f64 = row.iter().sum();
            row.iter_mut().for_each(|v| *v /= s);
        }
        self.push("normalize_rows", out, Op::NormalizeRows(a), &[a])
    }

    /// Mean over rows of KL(teacher ‖ softmax(student)); `teacher` holds
    /// row-stochastic probabilities and is not differentiated.
    pub fn kl_rows(&mut self, student: Var, teacher: Tensor) -> Result<Var> {
        let s = self.value(student);
        if s.shape() != teacher.shape() {
            return Err(Error::shape(
                "kl_rows",
                format!("{:?} vs {:?}", s.shape(), teacher.shape()),
            ));
        }
        let rows = s.rows();
        let mut total = 0.0;
        let mut logq = vec![0.0; s.cols()];
        for r in 0..rows {
            logq.copy_from_slice(s.row(r));
            log_softmax_in_place(&mut logq);
            for (p, lq) in teacher.row(r).iter().zip(&logq) {
                if *p > 0.0 {
                    total += p * (p.ln() - lq);
                }
            }
        }
        let out = Tensor::from_parts(vec![1], vec![total / rows as f64]);
        self.push("kl_rows", out, Op::KlRows { student, teacher }, &[student])
    }

    /// Mean negative log-likelihood of `targets` under row-wise softmax.
    pub fn nll_rows(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let s = self.value(logits);
        if targets.len() != s.rows() {
            return Err(Error::shape(
                "nll_rows",
                format!("{} targets for {} rows", targets.len(), s.rows()),
            ));
        }
        if let Some(bad) = targets.iter().find(|&&t| t >= s.cols()) {
            return Err(Error::InvalidArgument(format!(
                "target {bad} of {}",
                s.cols()
            )));
        }
        let mut total = 0.0;
        let mut row = vec![0.0; s.cols()];
        for (r, &t) in targets.iter().enumerate() {
            row.copy_from_slice(s.row(r));
            log_softmax_in_place(&mut row);
            total -= row[t];
        }
        let out = Tensor::from_parts(vec![1], vec![total / targets.len() as f64]);
        self.push(
            "nll_rows",
            out,
            Op::NllRows {
                logits,
                targets: targets.to_vec(),
            },
            &[logits],
        )
    }

    /// Gradients of the scalar `loss` with respect to every node that
    /// requires them.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(Error::shape(
                "backward",
                format!("loss must be scalar, got {:?}", self.value(loss).shape()),
            ));
        }
        let n = self.nodes.len();
        let mut grads: Vec<Option<Tensor>> = (0..n).map(|_| None).collect();
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(Tensor::full(&[1], 1.0));
        }
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
        }
        let shapes = self
            .nodes
            .iter()
            .map(|n| n.value.shape().to_vec())
            .collect();
        Ok(Gradients { grads, shapes })
    }

    fn wants(&self, v: Var, at: usize) -> bool {
        assert!(v.0 < at, "tape parents must precede their children");
        self.nodes[v.0].requires_grad
    }

    fn propagate(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[i];
        let y = &*node.value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let (m, k) = (va.rows(), va.cols());
                let nc = vb.cols();
                if self.wants(*a, i) {
                    let buf = slot(grads, *a, va.shape());
                    gemm(
                        m,
                        nc,
                        k,
                        Operand::plain(g.data(), nc),
                        Operand::transposed(vb.data(), nc),
                        buf,
                        true,
                    );
                }
                if self.wants(*b, i) {
                    let buf = slot(grads, *b, vb.shape());
                    gemm(
                        k,
                        m,
                        nc,
                        Operand::transposed(va.data(), k),
                        Operand::plain(g.data(), nc),
                        buf,
                        true,
                    );
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if self.wants(v, i) {
                        axpy(slot(grads, v, y.shape()), g.data(), 1.0);
                    }
                }
            }
            Op::Sub(a, b) => {
                if self.wants(*a, i) {
                    axpy(slot(grads, *a, y.shape()), g.data(), 1.0);
                }
                if self.wants(*b, i) {
                    axpy(slot(grads, *b, y.shape()), g.data(), -1.0);
                }
            }
            Op::Mul(a, b) => {
                if self.wants(*a, i) {
                    let other = self.value(*b).data();
                    let buf = slot(grads, *a, y.shape());
                    for ((o, gg), w) in buf.iter_mut().zip(g.data()).zip(other) {
                        *o += gg * w;
                    }
                }
                if self.wants(*b, i) {
                    let other = self.value(*a).data();
                    let buf = slot(grads, *b, y.shape());
                    for ((o, gg), w) in buf.iter_mut().zip(g.data()).zip(other) {
                        *o += gg * w;
                    }
                }
            }
            Op::Scale(a, c) => {
                if self.wants(*a, i) {
                    axpy(slot(grads, *a, y.shape()), g.data(), *c);
                }
            }
            Op::Silu(a) => {
                if self.wants(*a, i) {
                    let x = self.value(*a).data();
                    let buf = slot(grads, *a, y.shape());
                    for ((o, gg), &xv) in buf.iter_mut().zip(g.data()).zip(x) {
                        let s = sigmoid(xv);
                        *o += gg * s * (1.0 + xv * (1.0 - s));
                    }
                }
            }
            Op::Exp(a) => {
                if self.wants(*a, i) {
                    let buf = slot(grads, *a, y.shape());
                    for ((o, gg), yv) in buf.iter_mut().zip(g.data()).zip(y.data()) {
                        *o += gg * yv;
                    }
                }
            }
            Op::Log(a) => {
                if self.wants(*a, i) {
                    let x = self.value(*a).data();
                    let buf = slot(grads, *a, y.shape());
                    for ((o, gg), xv) in buf.iter_mut().zip(g.data()).zip(x) {
                        *o += gg / xv;
                    }
                }
            }
            Op::Sum(a) | Op::Mean(a) | Op::L1(a) => {
                if self.wants(*a, i) {
                    let x = self.value(*a);
                    let mut c = g.data()[0];
                    if matches!(node.op, Op::Mean(_)) {
                        c /= x.len() as f64;
                    }
                    let is_l1 = matches!(node.op, Op::L1(_));
                    let buf = slot(grads, *a, x.shape());
                    for (o, xv) in buf.iter_mut().zip(x.data()) {
                        *o += if is_l1 { c * sign0(*xv) } else { c };
                    }
                }
            }
            Op::SoftmaxRows(a) => {
                if self.wants(*a, i) {
                    let cols = y.cols();
                    let buf = slot(grads, *a, y.shape());
                    for r in 0..y.rows() {
                        let (yr, gr) = (y.row(r), g.row(r));
                        let dot: f64 = yr.iter().zip(gr).map(|(p, q)| p * q).sum();
                        let out = &mut buf[r * cols..(r + 1) * cols];
                        for ((o, yv), gv) in out.iter_mut().zip(yr).zip(gr) {
                            *o += yv * (gv - dot);
                        }
                    }
                }
            }
            Op::LogSoftmaxRows(a) => {
                if self.wants(*a, i) {
                    let cols = y.cols();
                    let buf = slot(grads, *a, y.shape());
                    for r in 0..y.rows() {
                        let (yr, gr) = (y.row(r), g.row(r));
                        let gs: f64 = gr.iter().sum();
                        let out = &mut buf[r * cols..(r + 1) * cols];
                        for ((o, yv), gv) in out.iter_mut().zip(yr).zip(gr) {
                            *o += gv - yv.exp() * gs;
                        }
                    }
                }
            }
            Op::RmsNormRows { x, inv_rms } => {
                if self.wants(*x, i) {
                    let cols = y.cols();
                    let buf = slot(grads, *x, y.shape());
                    for (r, inv) in inv_rms.iter().enumerate() {
                        let (yr, gr) = (y.row(r), g.row(r));
                        let dot: f64 =
                            yr.iter().zip(gr).map(|(p, q)| p * q).sum::<f64>() / cols as f64;
                        let out = &mut buf[r * cols..(r + 1) * cols];
                        for ((o, yv), gv) in out.iter_mut().zip(yr).zip(gr) {
                            *o += inv * (gv - yv * dot);
                        }
                    }
                }
            }
            Op::RowScale(x, s) => {
                let (vx, vs) = (self.value(*x), self.value(*s));
                let cols = vx.cols();
                if self.wants(*x, i) {
                    let buf = slot(grads, *x, vx.shape());
                    for r in 0..vx.rows() {
                        let c = vs.data()[r];
                        for (o, gv) in buf[r * cols..(r + 1) * cols].iter_mut().zip(g.row(r)) {
                            *o += c * gv;
                        }
                    }
                }
                if self.wants(*s, i) {
                    let buf = slot(grads, *s, vs.shape());
                    for (r, o) in buf.iter_mut().enumerate() {
                        *o += vx
                            .row(r)
                            .iter()
                            .zip(g.row(r))
                            .map(|(a, b)| a * b)
                            .sum::<f64>();
                    }
                }
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for p in parts {
                    let vp = self.value(*p);
                    let pc = vp.cols();
                    if self.wants(*p, i) {
                        let buf = slot(grads, *p, vp.shape());
                        for r in 0..vp.rows() {
                            let src = &g.row(r)[offset..offset + pc];
                            axpy(&mut buf[r * pc..(r + 1) * pc], src, 1.0);
                        }
                    }
                    offset += pc;
                }
            }
            Op::GatherRows { src, idx } => {
                if self.wants(*src, i) {
                    let vs = self.value(*src);
                    let cols = vs.cols();
                    let buf = slot(grads, *src, vs.shape());
                    for (r, &from) in idx.iter().enumerate() {
                        axpy(&mut buf[from * cols..(from + 1) * cols], g.row(r), 1.0);
                    }
                }
            }
            Op::ScatterAddRows { src, idx } => {
                if self.wants(*src, i) {
                    let vs = self.value(*src);
                    let cols = vs.cols();
                    let buf = slot(grads, *src, vs.shape());
                    for (r, &to) in idx.iter().enumerate() {
                        axpy(&mut buf[r * cols..(r + 1) * cols], g.row(to), 1.0);
                    }
                }
            }
            Op::GatherElems { src, flat } => {
                if self.wants(*src, i) {
                    let vs = self.value(*src);
                    let buf = slot(grads, *src, vs.shape());
                    for (gv, &f) in g.data().iter().zip(flat) {
                        buf[f] += gv;
                    }
                }
            }
            Op::NormalizeRows(a) => {
                if self.wants(*a, i) {
                    let va = self.value(*a);
                    let cols = va.cols();
                    let buf = slot(grads, *a, va.shape());
                    for r in 0..va.rows() {
                        let total: f64 = va.row(r).iter().sum();
                        let (yr, gr) = (y.row(r), g.row(r));
                        let dot: f64 = yr.iter().zip(gr).map(|(p, q)| p * q).sum();
                        for (o, gv) in buf[r * cols..(r + 1) * cols].iter_mut().zip(gr) {
                            *o += (gv - dot) / total;
                        }
                    }
                }
            }
            Op::KlRows { student, teacher } => {
                if self.wants(*student, i) {
                    let vs = self.value(*student);
                    let c = g.data()[0] / vs.rows() as f64;
                    let cols = vs.cols();
                    let buf = slot(grads, *student, vs.shape());
                    let mut q = vec![0.0; cols];
                    for r in 0..vs.rows() {
                        q.copy_from_slice(vs.row(r));
                        softmax_in_place(&mut q);
                        for ((o, qv), pv) in buf[r * cols..(r + 1) * cols]
                            .iter_mut()
                            .zip(&q)
                            .zip(teacher.row(r))
                        {
                            *o += c * (qv - pv);
                        }
                    }
                }
            }
            Op::NllRows { logits, targets } => {
                if self.wants(*logits, i) {
                    let vs = self.value(*logits);
                    let c = g.data()[0] / vs.rows() as f64;
                    let cols = vs.cols();
                    let buf = slot(grads, *logits, vs.shape());
                    let mut q = vec![0.0; cols];
                    for (r, &t) in targets.iter().enumerate() {
                        q.copy_from_slice(vs.row(r));
                        softmax_in_place(&mut q);
                        q[t] -= 1.0;
                        axpy(&mut buf[r * cols..(r + 1) * cols], &q, c);
                    }
                }
            }
        }
    }
}

fn slot<'g>(grads: &'g mut [Option<Tensor>], v: Var, shape: &[usize]) -> &'g mut [f64] {
    grads[v.0]
        .get_or_insert_with(|| Tensor::zeros(shape))
        .data_mut()
}

fn axpy(dst: &mut [f64], src: &[f64], c: f64) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += c * s;
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn sign0(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}
