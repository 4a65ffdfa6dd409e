use std::cell::{Cell, RefCell};
use std::rc::Rc;

use super::conv::{self, ConvGeom};
use super::gemm::gemm;
use super::{check_permutation, inverse_permutation, Scalar, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(usize, usize),
    Scale(usize, f64),
    Sum(usize),
    Relu(usize),
    Conv2d {
        x: usize,
        kernel: usize,
        bias: Option<usize>,
        geom: ConvGeom,
    },
    MatMul(usize, usize),
    Reshape(usize),
    Permute(usize, Vec<usize>),
    PixelShuffle(usize, usize),
    Mse(usize, usize),
    L1(usize, usize),
}

struct Node<T> {
    value: Rc<Tensor<T>>,
    op: Op,
    requires_grad: bool,
}

/// Records operations in execution order so [`Tape::backward`] can replay
/// them in reverse. One tape per forward pass; it is not reusable after
/// `backward`.
pub struct Tape<T: Scalar = f32> {
    nodes: RefCell<Vec<Node<T>>>,
    consumed: Cell<bool>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Handle to a value recorded on a [`Tape`].
pub struct Var<'t, T: Scalar = f32> {
    tape: &'t Tape<T>,
    id: usize,
}

impl<T: Scalar> Clone for Var<'_, T> {
    fn clone(&self) -> Self {
        *self
    }
}

impl<T: Scalar> Copy for Var<'_, T> {}

impl<T: Scalar> std::fmt::Debug for Var<'_, T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.shape())
    }
}

/// Gradients produced by [`Tape::backward`], indexed by leaf.
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, var: Var<'_, T>) -> Option<&Tensor<T>> {
        self.grads.get(var.id).and_then(Option::as_ref)
    }

    pub fn take(&mut self, var: Var<'_, T>) -> Option<Tensor<T>> {
        self.grads.get_mut(var.id).and_then(Option::take)
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            consumed: Cell::new(false),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Trainable input; receives a gradient on `backward`.
    pub fn leaf(&self, value: Tensor<T>) -> Var<'_, T> {
        self.push(value, Op::Leaf, true)
    }

    /// Input that never receives a gradient.
    pub fn constant(&self, value: Tensor<T>) -> Var<'_, T> {
        self.push(value, Op::Leaf, false)
    }

    fn push(&self, value: Tensor<T>, op: Op, requires_grad: bool) -> Var<'_, T> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            op,
            requires_grad,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn value(&self, id: usize) -> Rc<Tensor<T>> {
        Rc::clone(&self.nodes.borrow()[id].value)
    }

    fn needs_grad(&self, id: usize) -> bool {
        self.nodes.borrow()[id].requires_grad
    }

    fn record(&self, value: Tensor<T>, op: Op, inputs: &[usize]) -> Var<'_, T> {
        let rg = inputs.iter().any(|&i| self.needs_grad(i));
        self.push(value, op, rg)
    }

    fn owns(&self, var: Var<'_, T>) -> bool {
        std::ptr::eq(self, var.tape)
    }

    /// Back-propagates from a scalar `loss`, returning gradients for every
    /// leaf created with [`Tape::leaf`].
    pub fn backward(&self, loss: Var<'_, T>) -> Result<Gradients<T>> {
        if !self.owns(loss) {
            return Err(Error::Autodiff("loss belongs to a different tape".into()));
        }
        if self.consumed.replace(true) {
            return Err(Error::Autodiff("tape already consumed by backward".into()));
        }
        let nodes = self.nodes.borrow();
        if nodes[loss.id].value.numel() != 1 {
            return Err(Error::Autodiff(format!(
                "loss must be scalar, got shape {:?}",
                nodes[loss.id].value.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..nodes.len()).map(|_| None).collect();
        if !nodes[loss.id].requires_grad {
            return Ok(Gradients { grads });
        }
        grads[loss.id] = Some(Tensor::full(nodes[loss.id].value.shape(), T::one()));

        for id in (0..=loss.id).rev() {
            let node = &nodes[id];
            if matches!(node.op, Op::Leaf) || !node.requires_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            let rg = |i: usize| nodes[i].requires_grad;
            let val = |i: usize| &*nodes[i].value;
            let mut acc = |i: usize, t: Tensor<T>| accumulate(&mut grads[i], t);
            match &node.op {
                Op::Leaf => unreachable!(),
                Op::Add(a, b) => {
                    if rg(*a) {
                        acc(*a, g.clone());
                    }
                    if rg(*b) {
                        acc(*b, g);
                    }
                }
                Op::Scale(a, c) => {
                    let c = T::from_f64(*c);
                    acc(*a, g.map(|v| v * c));
                }
                Op::Sum(a) => {
                    acc(*a, Tensor::full(val(*a).shape(), g.data()[0]));
                }
                Op::Relu(a) => {
                    let out = &node.value;
                    let data = g
                        .data()
                        .iter()
                        .zip(out.data())
                        .map(|(&gv, &o)| if o > T::zero() { gv } else { T::zero() })
                        .collect();
                    acc(*a, Tensor::new(g.shape(), data)?);
                }
                Op::Conv2d {
                    x,
                    kernel,
                    bias,
                    geom,
                } => {
                    let want = (rg(*x), rg(*kernel), bias.is_some_and(rg));
                    let cg = conv::conv2d_backward(
                        geom,
                        val(*x).data(),
                        val(*kernel).data(),
                        g.data(),
                        want,
                    );
                    if let Some(dx) = cg.dx {
                        acc(*x, Tensor::new(val(*x).shape(), dx)?);
                    }
                    if let Some(dk) = cg.dkernel {
                        acc(*kernel, Tensor::new(val(*kernel).shape(), dk)?);
                    }
                    if let (Some(b), Some(db)) = (bias, cg.dbias) {
                        acc(*b, Tensor::new(val(*b).shape(), db)?);
                    }
                }
                Op::MatMul(a, b) => {
                    let (da, db) = matmul_backward(val(*a), val(*b), &g, rg(*a), rg(*b));
                    if let Some(da) = da {
                        acc(*a, da);
                    }
                    if let Some(db) = db {
                        acc(*b, db);
                    }
                }
                Op::Reshape(a) => acc(*a, g.reshape(val(*a).shape())?),
                Op::Permute(a, order) => acc(*a, g.permute(&inverse_permutation(order))?),
                Op::PixelShuffle(a, r) => {
                    let s = val(*a).shape();
                    let data =
                        conv::pixel_unshuffle(g.data(), s[0], s[1] / (r * r), s[2], s[3], *r);
                    acc(*a, Tensor::new(s, data)?);
                }
                Op::Mse(p, t) => {
                    let (pv, tv) = (val(*p), val(*t));
                    let scale = T::from_f64(2.0) * g.data()[0] / T::from_f64(pv.numel() as f64);
                    let dp: Vec<T> = pv
                        .data()
                        .iter()
                        .zip(tv.data())
                        .map(|(&a, &b)| (a - b) * scale)
                        .collect();
                    if rg(*t) {
                        acc(
                            *t,
                            Tensor::new(tv.shape(), dp.iter().map(|&v| -v).collect())?,
                        );
                    }
                    if rg(*p) {
                        acc(*p, Tensor::new(pv.shape(), dp)?);
                    }
                }
                Op::L1(p, t) => {
                    let (pv, tv) = (val(*p), val(*t));
                    let scale = g.data()[0] / T::from_f64(pv.numel() as f64);
                    let dp: Vec<T> = pv
                        .data()
                        .iter()
                        .zip(tv.data())
                        .map(|(&a, &b)| sign(a - b) * scale)
                        .collect();
                    if rg(*t) {
                        acc(
                            *t,
                            Tensor::new(tv.shape(), dp.iter().map(|&v| -v).collect())?,
                        );
                    }
                    if rg(*p) {
                        acc(*p, Tensor::new(pv.shape(), dp)?);
                    }
                }
            }
        }
        Ok(Gradients { grads })
    }
}

fn sign<T: Scalar>(v: T) -> T {
    if v > T::zero() {
        T::one()
    } else if v < T::zero() {
        -T::one()
    } else {
        T::zero()
    }
}

fn accumulate<T: Scalar>(slot: &mut Option<Tensor<T>>, t: Tensor<T>) {
    match slot {
        None => *slot = Some(t),
        Some(existing) => {
            for (a, b) in existing.data_mut().iter_mut().zip(t.data()) {
                *a += *b;
            }
        }
    }
}

/// Batch size, rows, cols of a rank-2 or rank-3 operand (rank 2 = shared).
fn mat_dims(shape: &[usize]) -> Option<(Option<usize>, usize, usize)> {
    match *shape {
        [r, c] => Some((None, r, c)),
        [p, r, c] => Some((Some(p), r, c)),
        _ => None,
    }
}

fn matmul_forward<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (Some((pa, m, k)), Some((pb, k2, n))) = (mat_dims(a.shape()), mat_dims(b.shape())) else {
        return Err(Error::shape(
            "batched_matmul",
            format!(
                "operands must be rank 2 or 3, got {:?} and {:?}",
                a.shape(),
                b.shape()
            ),
        ));
    };
    if k != k2 {
        return Err(Error::shape(
            "batched_matmul",
            format!("inner dimensions differ: {:?} x {:?}", a.shape(), b.shape()),
        ));
    }
    match (pa, pb) {
        (Some(p), Some(q)) if p != q => Err(Error::shape(
            "batched_matmul",
            format!("batch dimensions differ: {p} vs {q}"),
        )),
        (None, None) => {
            let mut c = vec![T::zero(); m * n];
            gemm(m, k, n, a.data(), false, b.data(), false, &mut c, false);
            Tensor::new(&[m, n], c)
        }
        (Some(p), None) => {
            let mut c = vec![T::zero(); p * m * n];
            gemm(p * m, k, n, a.data(), false, b.data(), false, &mut c, false);
            Tensor::new(&[p, m, n], c)
        }
        (None, Some(p)) | (Some(p), Some(_)) => {
            let a_batched = pa.is_some();
            let mut c = vec![T::zero(); p * m * n];
            for i in 0..p {
                let ai = if a_batched {
                    &a.data()[i * m * k..(i + 1) * m * k]
                } else {
                    a.data()
                };
                let bi = &b.data()[i * k * n..(i + 1) * k * n];
                gemm(
                    m,
                    k,
                    n,
                    ai,
                    false,
                    bi,
                    false,
                    &mut c[i * m * n..(i + 1) * m * n],
                    false,
                );
            }
            Tensor::new(&[p, m, n], c)
        }
    }
}

fn matmul_backward<T: Scalar>(
    a: &Tensor<T>,
    b: &Tensor<T>,
    g: &Tensor<T>,
    want_a: bool,
    want_b: bool,
) -> (Option<Tensor<T>>, Option<Tensor<T>>) {
    let (pa, m, k) = mat_dims(a.shape()).expect("checked in forward");
    let (pb, _, n) = mat_dims(b.shape()).expect("checked in forward");
    let gd = g.data();
    let mut da = want_a.then(|| vec![T::zero(); a.numel()]);
    let mut db = want_b.then(|| vec![T::zero(); b.numel()]);
    match (pa, pb) {
        (None, None) => {
            if let Some(da) = da.as_mut() {
                gemm(m, n, k, gd, false, b.data(), true, da, false);
            }
            if let Some(db) = db.as_mut() {
                gemm(k, m, n, a.data(), true, gd, false, db, false);
            }
        }
        (Some(p), None) => {
            if let Some(da) = da.as_mut() {
                gemm(p * m, n, k, gd, false, b.data(), true, da, false);
            }
            if let Some(db) = db.as_mut() {
                gemm(k, p * m, n, a.data(), true, gd, false, db, false);
            }
        }
        (_, Some(p)) => {
            let a_batched = pa.is_some();
            for i in 0..p {
                let gi = &gd[i * m * n..(i + 1) * m * n];
                let bi = &b.data()[i * k * n..(i + 1) * k * n];
                if let Some(da) = da.as_mut() {
                    if a_batched {
                        gemm(
                            m,
                            n,
                            k,
                            gi,
                            false,
                            bi,
                            true,
                            &mut da[i * m * k..(i + 1) * m * k],
                            false,
                        );
                    } else {
                        gemm(m, n, k, gi, false, bi, true, da, true);
                    }
                }
                if let Some(db) = db.as_mut() {
                    let ai = if a_batched {
                        &a.data()[i * m * k..(i + 1) * m * k]
                    } else {
                        a.data()
                    };
                    gemm(
                        k,
                        m,
                        n,
                        ai,
                        true,
                        gi,
                        false,
                        &mut db[i * k * n..(i + 1) * k * n],
                        false,
                    );
                }
            }
        }
    }
    (
        da.map(|d| Tensor::new(a.shape(), d).expect("same shape")),
        db.map(|d| Tensor::new(b.shape(), d).expect("same shape")),
    )
}

impl<'t, T: Scalar> Var<'t, T> {
    pub fn value(&self) -> Rc<Tensor<T>> {
        self.tape.value(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.needs_grad(self.id)
    }

    pub fn tape(&self) -> &'t Tape<T> {
        self.tape
    }

    fn same_tape(&self, other: Var<'_, T>, op: &'static str) -> Result<()> {
        if self.tape.owns(other) {
            Ok(())
        } else {
            Err(Error::Autodiff(format!(
                "{op}: operands recorded on different tapes"
            )))
        }
    }

    #[allow(clippy::should_implement_trait)] // fallible, so not `ops::Add`
    pub fn add(self, other: Var<'t, T>) -> Result<Self> {
        self.same_tape(other, "add")?;
        let (a, b) = (self.value(), other.value());
        if a.shape() != b.shape() {
            return Err(Error::shape(
                "add",
                format!("{:?} vs {:?}", a.shape(), b.shape()),
            ));
        }
        let data = a
            .data()
            .iter()
            .zip(b.data())
            .map(|(&x, &y)| x + y)
            .collect();
        let out = Tensor::new(a.shape(), data)?;
        Ok(self
            .tape
            .record(out, Op::Add(self.id, other.id), &[self.id, other.id]))
    }

    pub fn scale(self, c: f64) -> Self {
        let cv = T::from_f64(c);
        let out = self.value().map(|v| v * cv);
        self.tape.record(out, Op::Scale(self.id, c), &[self.id])
    }

    pub fn sum(self) -> Self {
        let out = Tensor::scalar(self.value().sum());
        self.tape.record(out, Op::Sum(self.id), &[self.id])
    }

    /// Elementwise `max(0, x)`; the subgradient at 0 is 0.
    pub fn relu(self) -> Self {
        let out = self
            .value()
            .map(|v| if v > T::zero() { v } else { T::zero() });
        self.tape.record(out, Op::Relu(self.id), &[self.id])
    }

    /// Cross-correlation of `[B, Cin, H, W]` with `[Cout, Cin, kh, kw]` plus a
    /// per-channel bias.
    pub fn conv2d(
        self,
        kernel: Var<'t, T>,
        bias: Option<Var<'t, T>>,
        stride: usize,
        pad: usize,
    ) -> Result<Self> {
        self.same_tape(kernel, "conv2d")?;
        if let Some(b) = bias {
            self.same_tape(b, "conv2d")?;
        }
        let (x, k) = (self.value(), kernel.value());
        let geom = conv_geometry(x.shape(), k.shape(), stride, pad)?;
        let bias_val = bias.map(|b| b.value());
        if let Some(bv) = &bias_val {
            if bv.shape() != [geom.c_out] {
                return Err(Error::shape(
                    "conv2d",
                    format!(
                        "bias shape {:?} does not match {} output channels",
                        bv.shape(),
                        geom.c_out
                    ),
                ));
            }
        }
        let data = conv::conv2d_forward(
            &geom,
            x.data(),
            k.data(),
            bias_val.as_ref().map(|b| b.data()),
        );
        let out = Tensor::new(&[geom.batch, geom.c_out, geom.h_out, geom.w_out], data)?;
        let mut inputs = vec![self.id, kernel.id];
        inputs.extend(bias.map(|b| b.id));
        let op = Op::Conv2d {
            x: self.id,
            kernel: kernel.id,
            bias: bias.map(|b| b.id),
            geom,
        };
        Ok(self.tape.record(out, op, &inputs))
    }

    /// Matrix product where either side may carry a leading batch axis;
    /// a rank-2 operand is shared across the batch.
    pub fn matmul(self, other: Var<'t, T>) -> Result<Self> {
        self.same_tape(other, "batched_matmul")?;
        let out = matmul_forward(&self.value(), &other.value())?;
        Ok(self
            .tape
            .record(out, Op::MatMul(self.id, other.id), &[self.id, other.id]))
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Self> {
        let out = (*self.value()).clone().reshape(shape)?;
        Ok(self.tape.record(out, Op::Reshape(self.id), &[self.id]))
    }

    pub fn permute(self, order: &[usize]) -> Result<Self> {
        let v = self.value();
        check_permutation(order, v.shape().len())?;
        let out = v.permute(order)?;
        Ok(self
            .tape
            .record(out, Op::Permute(self.id, order.to_vec()), &[self.id]))
    }

    /// Sub-pixel rearrangement `[B, C*r*r, H, W] -> [B, C, r*H, r*W]`.
    pub fn pixel_shuffle(self, r: usize) -> Result<Self> {
        let v = self.value();
        let &[b, crr, h, w] = v.shape() else {
            return Err(Error::shape(
                "subpixel_upsample",
                format!("expected rank 4, got {:?}", v.shape()),
            ));
        };
        if r == 0 || crr % (r * r) != 0 {
            return Err(Error::shape(
                "subpixel_upsample",
                format!("{crr} channels not divisible by r^2 = {}", r * r),
            ));
        }
        let c = crr / (r * r);
        let out = Tensor::new(
            &[b, c, h * r, w * r],
            conv::pixel_shuffle(v.data(), b, c, h, w, r),
        )?;
        Ok(self
            .tape
            .record(out, Op::PixelShuffle(self.id, r), &[self.id]))
    }

    pub fn mse(self, target: Var<'t, T>) -> Result<Self> {
        let [p, t] = self.loss_operands(target, "mse_loss")?;
        let n = T::from_f64(p.numel() as f64);
        let s: T = p
            .data()
            .iter()
            .zip(t.data())
            .map(|(&a, &b)| (a - b) * (a - b))
            .sum();
        Ok(self.tape.record(
            Tensor::scalar(s / n),
            Op::Mse(self.id, target.id),
            &[self.id, target.id],
        ))
    }

    pub fn l1(self, target: Var<'t, T>) -> Result<Self> {
        let [p, t] = self.loss_operands(target, "l1_loss")?;
        let n = T::from_f64(p.numel() as f64);
        let s: T = p
            .data()
            .iter()
            .zip(t.data())
            .map(|(&a, &b)| (a - b).abs())
            .sum();
        Ok(self.tape.record(
            Tensor::scalar(s / n),
            Op::L1(self.id, target.id),
            &[self.id, target.id],
        ))
    }

    fn loss_operands(self, target: Var<'t, T>, op: &'static str) -> Result<[Rc<Tensor<T>>; 2]> {
        self.same_tape(target, op)?;
        let (p, t) = (self.value(), target.value());
        if p.shape() != t.shape() {
            return Err(Error::shape(
                op,
                format!("{:?} vs {:?}", p.shape(), t.shape()),
            ));
        }
        Ok([p, t])
    }
}

fn conv_geometry(x: &[usize], k: &[usize], stride: usize, pad: usize) -> Result<ConvGeom> {
    let (&[batch, c_in, h, w], &[c_out, kc, kh, kw]) = (x, k) else {
        return Err(Error::shape(
            "conv2d",
            format!("expected rank-4 input and kernel, got {x:?} and {k:?}"),
        ));
    };
    if kc != c_in {
        return Err(Error::shape(
            "conv2d",
            format!("input channels (axis 1) {c_in} != kernel input channels (axis 1) {kc}"),
        ));
    }
    if kh % 2 == 0 || kw % 2 == 0 {
        return Err(Error::shape(
            "conv2d",
            format!("kernel extent {kh}x{kw} must be odd (axes 2, 3)"),
        ));
    }
    if stride == 0 {
        return Err(Error::shape("conv2d", "stride must be at least 1"));
    }
    if h + 2 * pad < kh || w + 2 * pad < kw {
        return Err(Error::shape(
            "conv2d",
            format!(
                "kernel {kh}x{kw} larger than padded input {}x{} (axes 2, 3)",
                h + 2 * pad,
                w + 2 * pad
            ),
        ));
    }
    Ok(ConvGeom {
        batch,
        c_in,
        h,
        w,
        c_out,
        kh,
        kw,
        stride,
        pad,
        h_out: (h + 2 * pad - kh) / stride + 1,
        w_out: (w + 2 * pad - kw) / stride + 1,
    })
}
