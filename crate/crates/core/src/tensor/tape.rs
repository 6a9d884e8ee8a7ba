//! Tape-recorded reverse-mode automatic differentiation.
//!
//! Every primitive pushes a node (output value + the op that produced it) onto
//! a shared Wengert list. `backward` walks the list once in reverse, seeding
//! the scalar loss with gradient 1 and accumulating into every reachable
//! `requires_grad` leaf. A tape is consumed exactly once; leaves that the loss
//! cannot reach receive an explicit zero gradient.

use super::kernels::{
    conv2d_backward_f32, conv2d_forward_f32, matmul_nn_f32, matmul_nt_acc_f32, transpose_f32,
    upsample_backward_f32, upsample_forward, ConvDims,
};
use super::{numel, Tensor};
use crate::error::{Error, Result};
use std::cell::RefCell;
use std::rc::Rc;

/// Recorded primitive. Input operands are node indices on the same tape.
#[derive(Debug, Clone)]
pub enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    AddScalar(usize, f32),
    MulScalar(usize, f32),
    /// 2-D matrix product (m,k) x (k,n).
    Matmul { a: usize, b: usize },
    /// Row-broadcast bias add: (n,l) + (l).
    AddRow { a: usize, b: usize },
    Relu(usize),
    LeakyRelu(usize, f32),
    Sigmoid(usize),
    Tanh(usize),
    /// Softmax over the last dimension of a rank-1 or rank-2 tensor.
    Softmax(usize),
    Mean(usize),
    Sum(usize),
    L2Norm(usize),
    Clamp01(usize),
    Sign(usize),
    Conv2d { input: usize, weight: usize, bias: usize, stride: usize, padding: usize },
    Upsample { input: usize, factor: usize },
    /// Channel concatenation of two (n,c,h,w) tensors.
    ConcatCh(usize, usize),
    /// Spatial window copy starting at (r0,c0); output shape fixes the extent.
    Crop { input: usize, r0: usize, c0: usize },
    /// Adjoint of crop: paste input at (r0,c0) into a larger zero canvas.
    Place { input: usize, r0: usize, c0: usize },
    /// Single element of a rank-1 tensor as a scalar.
    Index { input: usize, at: usize },
    Reshape(usize),
    /// Fused mean softmax-cross-entropy over (n,l) logits.
    SoftmaxXent { logits: usize, labels: Vec<usize> },
}

pub(super) struct Node {
    pub(super) shape: Vec<usize>,
    pub(super) data: Vec<f32>,
    pub(super) op: Op,
    pub(super) needs_grad: bool,
    pub(super) requires_grad: bool,
    pub(super) grad: Option<Vec<f32>>,
}

pub(super) struct TapeInner {
    pub(super) nodes: Vec<Node>,
    pub(super) consumed: bool,
}

/// Shared recording surface. Cheap to clone (reference-counted); confined to a
/// single thread together with all its [`Var`]s.
#[derive(Clone)]
pub struct Tape {
    pub(super) inner: Rc<RefCell<TapeInner>>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Tape {
        Tape { inner: Rc::new(RefCell::new(TapeInner { nodes: Vec::new(), consumed: false })) }
    }

    /// Record an input tensor. Gradient participation follows
    /// `tensor.requires_grad`.
    pub fn leaf(&self, t: Tensor) -> Var {
        let rg = t.requires_grad;
        let (shape, data) = t.into_parts();
        self.push(shape, data, Op::Leaf, rg, rg)
    }

    /// Record a constant that never receives a gradient.
    pub fn constant(&self, t: Tensor) -> Var {
        let (shape, data) = t.into_parts();
        self.push(shape, data, Op::Leaf, false, false)
    }

    pub fn len(&self) -> usize {
        self.inner.borrow().nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, shape: Vec<usize>, data: Vec<f32>, op: Op, needs: bool, rg: bool) -> Var {
        debug_assert_eq!(numel(&shape), data.len());
        let mut inner = self.inner.borrow_mut();
        inner.nodes.push(Node { shape, data, op, needs_grad: needs, requires_grad: rg, grad: None });
        Var { tape: Rc::clone(&self.inner), idx: inner.nodes.len() - 1 }
    }
}

/// Handle to one recorded tensor on a tape.
#[derive(Clone)]
pub struct Var {
    pub(super) tape: Rc<RefCell<TapeInner>>,
    pub(super) idx: usize,
}

fn add_assign(dst: &mut [f32], src: &[f32]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

impl Var {
    fn tape_handle(&self) -> Tape {
        Tape { inner: Rc::clone(&self.tape) }
    }

    /// The tape this var is recorded on.
    pub fn tape(&self) -> Tape {
        self.tape_handle()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.borrow().nodes[self.idx].shape.clone()
    }

    pub fn len(&self) -> usize {
        self.tape.borrow().nodes[self.idx].data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Copy the node's value out as a plain tensor.
    pub fn value(&self) -> Tensor {
        let inner = self.tape.borrow();
        let node = &inner.nodes[self.idx];
        Tensor::from_vec(node.shape.clone(), node.data.clone()).expect("node invariant")
    }

    pub fn scalar(&self) -> Result<f32> {
        let inner = self.tape.borrow();
        let node = &inner.nodes[self.idx];
        if node.data.len() != 1 {
            return Err(Error::contract("Var::scalar", format!("shape {:?} is not scalar", node.shape)));
        }
        Ok(node.data[0])
    }

    /// Gradient filled by the last `backward` call, if this var is a
    /// `requires_grad` leaf.
    pub fn grad(&self) -> Option<Tensor> {
        let inner = self.tape.borrow();
        let node = &inner.nodes[self.idx];
        node.grad
            .as_ref()
            .map(|g| Tensor::from_vec(node.shape.clone(), g.clone()).expect("grad shape invariant"))
    }

    fn same_tape(&self, other: &Var, context: &'static str) -> Result<()> {
        if !Rc::ptr_eq(&self.tape, &other.tape) {
            return Err(Error::contract(context, "operands recorded on different tapes"));
        }
        Ok(())
    }

    fn unary(
        &self,
        context: &'static str,
        f: impl FnOnce(&[f32]) -> Vec<f32>,
        op: impl FnOnce(usize) -> Op,
    ) -> Var {
        let (shape, data, needs) = {
            let inner = self.tape.borrow();
            let node = &inner.nodes[self.idx];
            (node.shape.clone(), f(&node.data), node.needs_grad)
        };
        let _ = context;
        self.tape_handle().push(shape, data, op(self.idx), needs, false)
    }

    fn zip(&self, other: &Var, context: &'static str, f: impl Fn(f32, f32) -> f32, op: impl FnOnce(usize, usize) -> Op) -> Result<Var> {
        self.same_tape(other, context)?;
        let (shape, data, needs) = {
            let inner = self.tape.borrow();
            let a = &inner.nodes[self.idx];
            let b = &inner.nodes[other.idx];
            if a.shape != b.shape {
                return Err(Error::shape(context, format!("{:?} vs {:?}", a.shape, b.shape)));
            }
            let data: Vec<f32> = a.data.iter().zip(&b.data).map(|(&x, &y)| f(x, y)).collect();
            (a.shape.clone(), data, a.needs_grad || b.needs_grad)
        };
        Ok(self.tape_handle().push(shape, data, op(self.idx, other.idx), needs, false))
    }

    pub fn add(&self, other: &Var) -> Result<Var> {
        self.zip(other, "add", |x, y| x + y, Op::Add)
    }

    pub fn sub(&self, other: &Var) -> Result<Var> {
        self.zip(other, "sub", |x, y| x - y, Op::Sub)
    }

    pub fn mul(&self, other: &Var) -> Result<Var> {
        self.zip(other, "mul", |x, y| x * y, Op::Mul)
    }

    pub fn add_scalar(&self, c: f32) -> Var {
        self.unary("add_scalar", |d| d.iter().map(|&x| x + c).collect(), |i| Op::AddScalar(i, c))
    }

    pub fn mul_scalar(&self, c: f32) -> Var {
        self.unary("mul_scalar", |d| d.iter().map(|&x| x * c).collect(), |i| Op::MulScalar(i, c))
    }

    pub fn relu(&self) -> Var {
        self.unary("relu", |d| d.iter().map(|&x| x.max(0.0)).collect(), Op::Relu)
    }

    pub fn leaky_relu(&self, slope: f32) -> Var {
        self.unary(
            "leaky_relu",
            |d| d.iter().map(|&x| if x > 0.0 { x } else { slope * x }).collect(),
            |i| Op::LeakyRelu(i, slope),
        )
    }

    pub fn sigmoid(&self) -> Var {
        self.unary("sigmoid", |d| d.iter().map(|&x| 1.0 / (1.0 + (-x).exp())).collect(), Op::Sigmoid)
    }

    pub fn tanh(&self) -> Var {
        self.unary("tanh", |d| d.iter().map(|&x| x.tanh()).collect(), Op::Tanh)
    }

    pub fn clamp01(&self) -> Var {
        self.unary("clamp01", |d| d.iter().map(|&x| x.clamp(0.0, 1.0)).collect(), Op::Clamp01)
    }

    /// sign(0) = 0; gradient is zero everywhere.
    pub fn sign(&self) -> Var {
        self.unary(
            "sign",
            |d| d.iter().map(|&x| if x > 0.0 { 1.0 } else if x < 0.0 { -1.0 } else { 0.0 }).collect(),
            Op::Sign,
        )
    }

    /// Softmax over the last dimension of a rank-1 or rank-2 tensor,
    /// max-stabilized with 64-bit denominators.
    pub fn softmax(&self) -> Result<Var> {
        let (shape, data, needs) = {
            let inner = self.tape.borrow();
            let node = &inner.nodes[self.idx];
            if node.shape.is_empty() || node.shape.len() > 2 {
                return Err(Error::shape("softmax", format!("rank {} unsupported", node.shape.len())));
            }
            let l = *node.shape.last().unwrap();
            let rows = node.data.len() / l;
            let mut out = vec![0.0f32; node.data.len()];
            for r in 0..rows {
                let row = &node.data[r * l..(r + 1) * l];
                let m = row.iter().fold(f32::NEG_INFINITY, |a, &b| a.max(b));
                let mut denom = 0.0f64;
                for &z in row {
                    denom += ((z - m) as f64).exp();
                }
                for (o, &z) in out[r * l..(r + 1) * l].iter_mut().zip(row) {
                    *o = (((z - m) as f64).exp() / denom) as f32;
                }
            }
            (node.shape.clone(), out, node.needs_grad)
        };
        Ok(self.tape_handle().push(shape, data, Op::Softmax(self.idx), needs, false))
    }

    fn reduce(&self, f: impl FnOnce(&[f32]) -> f32, op: impl FnOnce(usize) -> Op) -> Var {
        let (v, needs) = {
            let inner = self.tape.borrow();
            let node = &inner.nodes[self.idx];
            (f(&node.data), node.needs_grad)
        };
        self.tape_handle().push(vec![1], vec![v], op(self.idx), needs, false)
    }

    pub fn sum(&self) -> Var {
        self.reduce(|d| d.iter().map(|&x| x as f64).sum::<f64>() as f32, Op::Sum)
    }

    pub fn mean(&self) -> Var {
        self.reduce(
            |d| (d.iter().map(|&x| x as f64).sum::<f64>() / d.len() as f64) as f32,
            Op::Mean,
        )
    }

    pub fn l2_norm(&self) -> Var {
        self.reduce(
            |d| d.iter().map(|&x| x as f64 * x as f64).sum::<f64>().sqrt() as f32,
            Op::L2Norm,
        )
    }

    /// 2-D matrix product.
    pub fn matmul(&self, other: &Var) -> Result<Var> {
        self.same_tape(other, "matmul")?;
        let (shape, data, needs) = {
            let inner = self.tape.borrow();
            let a = &inner.nodes[self.idx];
            let b = &inner.nodes[other.idx];
            if a.shape.len() != 2 || b.shape.len() != 2 || a.shape[1] != b.shape[0] {
                return Err(Error::shape("matmul", format!("{:?} x {:?}", a.shape, b.shape)));
            }
            let (m, k, n) = (a.shape[0], a.shape[1], b.shape[1]);
            let mut out = vec![0.0f32; m * n];
            matmul_nn_f32(&a.data, &b.data, &mut out, m, k, n);
            (vec![m, n], out, a.needs_grad || b.needs_grad)
        };
        Ok(self.tape_handle().push(shape, data, Op::Matmul { a: self.idx, b: other.idx }, needs, false))
    }

    /// Bias add broadcast over rows: self (n,l) + bias (l).
    pub fn add_row(&self, bias: &Var) -> Result<Var> {
        self.same_tape(bias, "add_row")?;
        let (shape, data, needs) = {
            let inner = self.tape.borrow();
            let a = &inner.nodes[self.idx];
            let b = &inner.nodes[bias.idx];
            if a.shape.len() != 2 || b.shape.len() != 1 || a.shape[1] != b.shape[0] {
                return Err(Error::shape("add_row", format!("{:?} + {:?}", a.shape, b.shape)));
            }
            let l = b.shape[0];
            let mut out = a.data.clone();
            for row in out.chunks_mut(l) {
                add_assign(row, &b.data);
            }
            (a.shape.clone(), out, a.needs_grad || b.needs_grad)
        };
        Ok(self.tape_handle().push(shape, data, Op::AddRow { a: self.idx, b: bias.idx }, needs, false))
    }

    /// 2-D convolution over (n,c,h,w) input with (o,c,k,k) weight and (o) bias.
    pub fn conv2d(&self, weight: &Var, bias: &Var, stride: usize, padding: usize) -> Result<Var> {
        self.same_tape(weight, "conv2d")?;
        self.same_tape(bias, "conv2d")?;
        if stride < 1 {
            return Err(Error::param("conv2d", format!("stride {stride} must be >= 1")));
        }
        let (shape, data, needs) = {
            let inner = self.tape.borrow();
            let x = &inner.nodes[self.idx];
            let w = &inner.nodes[weight.idx];
            let b = &inner.nodes[bias.idx];
            if x.shape.len() != 4 || w.shape.len() != 4 || b.shape.len() != 1 {
                return Err(Error::shape(
                    "conv2d",
                    format!("input {:?}, weight {:?}, bias {:?}", x.shape, w.shape, b.shape),
                ));
            }
            if w.shape[1] != x.shape[1] {
                return Err(Error::shape(
                    "conv2d",
                    format!("input channels {} vs weight channels {}", x.shape[1], w.shape[1]),
                ));
            }
            if w.shape[2] != w.shape[3] {
                return Err(Error::shape("conv2d", format!("non-square kernel {:?}", w.shape)));
            }
            if b.shape[0] != w.shape[0] {
                return Err(Error::shape(
                    "conv2d",
                    format!("bias {} vs output channels {}", b.shape[0], w.shape[0]),
                ));
            }
            if w.shape[2] > x.shape[2] + 2 * padding || w.shape[2] > x.shape[3] + 2 * padding {
                return Err(Error::shape(
                    "conv2d",
                    format!("kernel {} exceeds padded input {:?}", w.shape[2], x.shape),
                ));
            }
            let dims = ConvDims::new(&x.shape, &w.shape, stride, padding);
            let out = conv2d_forward_f32(&x.data, &w.data, &b.data, &dims);
            (
                vec![dims.n, dims.o, dims.ho, dims.wo],
                out,
                x.needs_grad || w.needs_grad || b.needs_grad,
            )
        };
        Ok(self.tape_handle().push(
            shape,
            data,
            Op::Conv2d { input: self.idx, weight: weight.idx, bias: bias.idx, stride, padding },
            needs,
            false,
        ))
    }

    /// Nearest-neighbor upsampling by an integer factor.
    pub fn upsample_nearest(&self, factor: usize) -> Result<Var> {
        if factor < 1 {
            return Err(Error::param("upsample_nearest", format!("factor {factor} must be >= 1")));
        }
        let (shape, data, needs) = {
            let inner = self.tape.borrow();
            let x = &inner.nodes[self.idx];
            if x.shape.len() != 4 {
                return Err(Error::shape("upsample_nearest", format!("rank {} != 4", x.shape.len())));
            }
            let (n, c, h, w) = (x.shape[0], x.shape[1], x.shape[2], x.shape[3]);
            let out = upsample_forward(&x.data, n, c, h, w, factor);
            (vec![n, c, h * factor, w * factor], out, x.needs_grad)
        };
        Ok(self.tape_handle().push(shape, data, Op::Upsample { input: self.idx, factor }, needs, false))
    }

    /// Concatenate along the channel axis.
    pub fn concat_channels(&self, other: &Var) -> Result<Var> {
        self.same_tape(other, "concat_channels")?;
        let (shape, data, needs) = {
            let inner = self.tape.borrow();
            let a = &inner.nodes[self.idx];
            let b = &inner.nodes[other.idx];
            if a.shape.len() != 4
                || b.shape.len() != 4
                || a.shape[0] != b.shape[0]
                || a.shape[2] != b.shape[2]
                || a.shape[3] != b.shape[3]
            {
                return Err(Error::shape(
                    "concat_channels",
                    format!("{:?} cat {:?}", a.shape, b.shape),
                ));
            }
            let (n, ca, cb) = (a.shape[0], a.shape[1], b.shape[1]);
            let hw = a.shape[2] * a.shape[3];
            let mut out = Vec::with_capacity((ca + cb) * n * hw);
            for s in 0..n {
                out.extend_from_slice(&a.data[s * ca * hw..(s + 1) * ca * hw]);
                out.extend_from_slice(&b.data[s * cb * hw..(s + 1) * cb * hw]);
            }
            (
                vec![n, ca + cb, a.shape[2], a.shape[3]],
                out,
                a.needs_grad || b.needs_grad,
            )
        };
        Ok(self.tape_handle().push(shape, data, Op::ConcatCh(self.idx, other.idx), needs, false))
    }

    /// Copy the spatial window of height `h`, width `w` starting at (r0,c0).
    pub fn crop(&self, r0: usize, c0: usize, h: usize, w: usize) -> Result<Var> {
        let (shape, data, needs) = {
            let inner = self.tape.borrow();
            let x = &inner.nodes[self.idx];
            if x.shape.len() != 4 {
                return Err(Error::shape("crop", format!("rank {} != 4", x.shape.len())));
            }
            let (n, c, hh, ww) = (x.shape[0], x.shape[1], x.shape[2], x.shape[3]);
            if r0 + h > hh || c0 + w > ww || h == 0 || w == 0 {
                return Err(Error::placement(
                    "crop",
                    format!("window {h}x{w}@({r0},{c0}) outside {hh}x{ww}"),
                ));
            }
            let mut out = Vec::with_capacity(n * c * h * w);
            for img in 0..n * c {
                let plane = &x.data[img * hh * ww..(img + 1) * hh * ww];
                for r in 0..h {
                    let s = (r0 + r) * ww + c0;
                    out.extend_from_slice(&plane[s..s + w]);
                }
            }
            (vec![n, c, h, w], out, x.needs_grad)
        };
        Ok(self.tape_handle().push(shape, data, Op::Crop { input: self.idx, r0, c0 }, needs, false))
    }

    /// Paste this tensor at (r0,c0) into a zeroed (out_h,out_w) canvas.
    pub fn place(&self, r0: usize, c0: usize, out_h: usize, out_w: usize) -> Result<Var> {
        let (shape, data, needs) = {
            let inner = self.tape.borrow();
            let x = &inner.nodes[self.idx];
            if x.shape.len() != 4 {
                return Err(Error::shape("place", format!("rank {} != 4", x.shape.len())));
            }
            let (n, c, h, w) = (x.shape[0], x.shape[1], x.shape[2], x.shape[3]);
            if r0 + h > out_h || c0 + w > out_w {
                return Err(Error::placement(
                    "place",
                    format!("patch {h}x{w}@({r0},{c0}) outside {out_h}x{out_w}"),
                ));
            }
            let mut out = vec![0.0f32; n * c * out_h * out_w];
            for img in 0..n * c {
                let src = &x.data[img * h * w..(img + 1) * h * w];
                let dst = &mut out[img * out_h * out_w..(img + 1) * out_h * out_w];
                for r in 0..h {
                    let d = (r0 + r) * out_w + c0;
                    dst[d..d + w].copy_from_slice(&src[r * w..(r + 1) * w]);
                }
            }
            (vec![n, c, out_h, out_w], out, x.needs_grad)
        };
        Ok(self.tape_handle().push(shape, data, Op::Place { input: self.idx, r0, c0 }, needs, false))
    }

    /// One element of a rank-1 tensor, as a scalar node.
    pub fn index(&self, at: usize) -> Result<Var> {
        let (v, needs) = {
            let inner = self.tape.borrow();
            let x = &inner.nodes[self.idx];
            if x.shape.len() != 1 {
                return Err(Error::shape("index", format!("rank {} != 1", x.shape.len())));
            }
            if at >= x.data.len() {
                return Err(Error::param("index", format!("{at} out of range {}", x.data.len())));
            }
            (x.data[at], x.needs_grad)
        };
        Ok(self.tape_handle().push(vec![1], vec![v], Op::Index { input: self.idx, at }, needs, false))
    }

    pub fn reshape(&self, shape: Vec<usize>) -> Result<Var> {
        let (data, needs) = {
            let inner = self.tape.borrow();
            let x = &inner.nodes[self.idx];
            if numel(&shape) != x.data.len() {
                return Err(Error::shape(
                    "reshape",
                    format!("cannot view {:?} as {:?}", x.shape, shape),
                ));
            }
            (x.data.clone(), x.needs_grad)
        };
        Ok(self.tape_handle().push(shape, data, Op::Reshape(self.idx), needs, false))
    }

    /// Mean softmax-cross-entropy of (n,l) logits against integer labels,
    /// computed stably in f64 per row.
    pub fn softmax_cross_entropy(&self, labels: &[usize]) -> Result<Var> {
        let (v, needs) = {
            let inner = self.tape.borrow();
            let x = &inner.nodes[self.idx];
            if x.shape.len() != 2 {
                return Err(Error::shape("softmax_cross_entropy", format!("rank {} != 2", x.shape.len())));
            }
            let (n, l) = (x.shape[0], x.shape[1]);
            if labels.len() != n {
                return Err(Error::shape(
                    "softmax_cross_entropy",
                    format!("{} labels for {} rows", labels.len(), n),
                ));
            }
            if let Some(&bad) = labels.iter().find(|&&y| y >= l) {
                return Err(Error::param("softmax_cross_entropy", format!("label {bad} >= {l}")));
            }
            let mut total = 0.0f64;
            for (r, &y) in labels.iter().enumerate() {
                let row = &x.data[r * l..(r + 1) * l];
                let m = row.iter().fold(f32::NEG_INFINITY, |a, &b| a.max(b)) as f64;
                let mut lse = 0.0f64;
                for &z in row {
                    lse += (z as f64 - m).exp();
                }
                total += lse.ln() - (row[y] as f64 - m);
            }
            ((total / n as f64) as f32, x.needs_grad)
        };
        Ok(self.tape_handle().push(
            vec![1],
            vec![v],
            Op::SoftmaxXent { logits: self.idx, labels: labels.to_vec() },
            needs,
            false,
        ))
    }

    /// Reverse pass from a scalar loss. Fills `grad` on every reachable
    /// `requires_grad` leaf and zeroes unreachable ones. Consumes the tape.
    pub fn backward(&self) -> Result<()> {
        let inner = &mut *self.tape.borrow_mut();
        if inner.consumed {
            return Err(Error::state("backward", "tape already consumed by a previous backward"));
        }
        if inner.nodes[self.idx].data.len() != 1 {
            return Err(Error::contract(
                "backward",
                format!("loss shape {:?} is not scalar", inner.nodes[self.idx].shape),
            ));
        }
        inner.consumed = true;
        let mut grads: Vec<Option<Vec<f32>>> = inner.nodes.iter().map(|_| None).collect();
        grads[self.idx] = Some(vec![1.0]);
        {
            let nodes = &inner.nodes;
            for i in (0..=self.idx).rev() {
                if !nodes[i].needs_grad || grads[i].is_none() {
                    continue;
                }
                if matches!(nodes[i].op, Op::Leaf) {
                    continue;
                }
                let g = grads[i].take().expect("checked above");
                backprop_node(nodes, i, &g, &mut grads);
            }
        }
        for (node, g) in inner.nodes.iter_mut().zip(grads.into_iter()) {
            if matches!(node.op, Op::Leaf) && node.requires_grad {
                node.grad = Some(g.unwrap_or_else(|| vec![0.0; node.data.len()]));
            }
        }
        Ok(())
    }
}

fn slot<'a>(grads: &'a mut [Option<Vec<f32>>], j: usize, len: usize) -> &'a mut Vec<f32> {
    grads[j].get_or_insert_with(|| vec![0.0; len])
}

/// Apply the backward rule of node `i`, whose output gradient is `g`,
/// accumulating into its inputs' gradient slots.
fn backprop_node(nodes: &[Node], i: usize, g: &[f32], grads: &mut [Option<Vec<f32>>]) {
    match &nodes[i].op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            if nodes[*a].needs_grad {
                add_assign(slot(grads, *a, g.len()), g);
            }
            if nodes[*b].needs_grad {
                add_assign(slot(grads, *b, g.len()), g);
            }
        }
        Op::Sub(a, b) => {
            if nodes[*a].needs_grad {
                add_assign(slot(grads, *a, g.len()), g);
            }
            if nodes[*b].needs_grad {
                let gb = slot(grads, *b, g.len());
                for (d, s) in gb.iter_mut().zip(g) {
                    *d -= s;
                }
            }
        }
        Op::Mul(a, b) => {
            if nodes[*a].needs_grad {
                let bd = &nodes[*b].data;
                let ga = slot(grads, *a, g.len());
                for ((d, s), x) in ga.iter_mut().zip(g).zip(bd) {
                    *d += s * x;
                }
            }
            if nodes[*b].needs_grad {
                let ad = &nodes[*a].data;
                let gb = slot(grads, *b, g.len());
                for ((d, s), x) in gb.iter_mut().zip(g).zip(ad) {
                    *d += s * x;
                }
            }
        }
        Op::AddScalar(a, _) => {
            if nodes[*a].needs_grad {
                add_assign(slot(grads, *a, g.len()), g);
            }
        }
        Op::MulScalar(a, c) => {
            if nodes[*a].needs_grad {
                let ga = slot(grads, *a, g.len());
                for (d, s) in ga.iter_mut().zip(g) {
                    *d += s * c;
                }
            }
        }
        Op::Matmul { a, b } => {
            let (m, k) = (nodes[*a].shape[0], nodes[*a].shape[1]);
            let n = nodes[*b].shape[1];
            if nodes[*a].needs_grad {
                let bd = &nodes[*b].data;
                let ga = slot(grads, *a, m * k);
                matmul_nt_acc_f32(g, bd, ga, m, n, k);
            }
            if nodes[*b].needs_grad {
                let at = transpose_f32(&nodes[*a].data, m, k);
                let mut tmp = vec![0.0f32; k * n];
                matmul_nn_f32(&at, g, &mut tmp, k, m, n);
                add_assign(slot(grads, *b, k * n), &tmp);
            }
        }
        Op::AddRow { a, b } => {
            let l = nodes[*b].shape[0];
            if nodes[*a].needs_grad {
                add_assign(slot(grads, *a, g.len()), g);
            }
            if nodes[*b].needs_grad {
                let gb = slot(grads, *b, l);
                for (col, gv) in gb.iter_mut().enumerate() {
                    let mut acc = 0.0f64;
                    let mut j = col;
                    while j < g.len() {
                        acc += g[j] as f64;
                        j += l;
                    }
                    *gv += acc as f32;
                }
            }
        }
        Op::Relu(a) => {
            if nodes[*a].needs_grad {
                let xd = &nodes[*a].data;
                let ga = slot(grads, *a, g.len());
                for ((d, s), x) in ga.iter_mut().zip(g).zip(xd) {
                    if *x > 0.0 {
                        *d += s;
                    }
                }
            }
        }
        Op::LeakyRelu(a, slope) => {
            if nodes[*a].needs_grad {
                let xd = &nodes[*a].data;
                let ga = slot(grads, *a, g.len());
                for ((d, s), x) in ga.iter_mut().zip(g).zip(xd) {
                    *d += if *x > 0.0 { *s } else { s * slope };
                }
            }
        }
        Op::Sigmoid(a) => {
            if nodes[*a].needs_grad {
                let yd = &nodes[i].data;
                let ga = slot(grads, *a, g.len());
                for ((d, s), y) in ga.iter_mut().zip(g).zip(yd) {
                    *d += s * y * (1.0 - y);
                }
            }
        }
        Op::Tanh(a) => {
            if nodes[*a].needs_grad {
                let yd = &nodes[i].data;
                let ga = slot(grads, *a, g.len());
                for ((d, s), y) in ga.iter_mut().zip(g).zip(yd) {
                    *d += s * (1.0 - y * y);
                }
            }
        }
        Op::Softmax(a) => {
            if nodes[*a].needs_grad {
                let y = &nodes[i].data;
                let l = *nodes[i].shape.last().unwrap();
                let ga = slot(grads, *a, g.len());
                for r in 0..y.len() / l {
                    let yr = &y[r * l..(r + 1) * l];
                    let gr = &g[r * l..(r + 1) * l];
                    let mut dot = 0.0f64;
                    for (gv, yv) in gr.iter().zip(yr) {
                        dot += *gv as f64 * *yv as f64;
                    }
                    let gar = &mut ga[r * l..(r + 1) * l];
                    for ((d, gv), yv) in gar.iter_mut().zip(gr).zip(yr) {
                        *d += yv * (gv - dot as f32);
                    }
                }
            }
        }
        Op::Mean(a) => {
            if nodes[*a].needs_grad {
                let n = nodes[*a].data.len();
                let gv = g[0] / n as f32;
                let ga = slot(grads, *a, n);
                for d in ga.iter_mut() {
                    *d += gv;
                }
            }
        }
        Op::Sum(a) => {
            if nodes[*a].needs_grad {
                let n = nodes[*a].data.len();
                let ga = slot(grads, *a, n);
                for d in ga.iter_mut() {
                    *d += g[0];
                }
            }
        }
        Op::L2Norm(a) => {
            if nodes[*a].needs_grad {
                let norm = nodes[i].data[0];
                if norm > 0.0 {
                    let xd = &nodes[*a].data;
                    let scale = g[0] / norm;
                    let ga = slot(grads, *a, xd.len());
                    for (d, x) in ga.iter_mut().zip(xd) {
                        *d += scale * x;
                    }
                }
            }
        }
        Op::Clamp01(a) => {
            if nodes[*a].needs_grad {
                let xd = &nodes[*a].data;
                let ga = slot(grads, *a, g.len());
                for ((d, s), x) in ga.iter_mut().zip(g).zip(xd) {
                    if *x > 0.0 && *x < 1.0 {
                        *d += s;
                    }
                }
            }
        }
        Op::Sign(_) => {}
        Op::Conv2d { input, weight, bias, stride, padding } => {
            let dims = ConvDims::new(&nodes[*input].shape, &nodes[*weight].shape, *stride, *padding);
            let mut gi = if nodes[*input].needs_grad {
                Some(grads[*input].take().unwrap_or_else(|| vec![0.0; nodes[*input].data.len()]))
            } else {
                None
            };
            let mut gw = if nodes[*weight].needs_grad {
                Some(grads[*weight].take().unwrap_or_else(|| vec![0.0; nodes[*weight].data.len()]))
            } else {
                None
            };
            let mut gb = if nodes[*bias].needs_grad {
                Some(grads[*bias].take().unwrap_or_else(|| vec![0.0; nodes[*bias].data.len()]))
            } else {
                None
            };
            conv2d_backward_f32(
                &nodes[*input].data,
                &nodes[*weight].data,
                g,
                &dims,
                gi.as_deref_mut(),
                gw.as_deref_mut(),
                gb.as_deref_mut(),
            );
            if let Some(v) = gi {
                grads[*input] = Some(v);
            }
            if let Some(v) = gw {
                grads[*weight] = Some(v);
            }
            if let Some(v) = gb {
                grads[*bias] = Some(v);
            }
        }
        Op::Upsample { input, factor } => {
            if nodes[*input].needs_grad {
                let sh = &nodes[*input].shape;
                let (n, c, h, w) = (sh[0], sh[1], sh[2], sh[3]);
                let gi = slot(grads, *input, nodes[*input].data.len());
                upsample_backward_f32(g, n, c, h, w, *factor, gi);
            }
        }
        Op::ConcatCh(a, b) => {
            let (n, ca) = (nodes[*a].shape[0], nodes[*a].shape[1]);
            let cb = nodes[*b].shape[1];
            let hw = nodes[*a].shape[2] * nodes[*a].shape[3];
            if nodes[*a].needs_grad {
                let ga = slot(grads, *a, nodes[*a].data.len());
                for s in 0..n {
                    let src = &g[s * (ca + cb) * hw..s * (ca + cb) * hw + ca * hw];
                    add_assign(&mut ga[s * ca * hw..(s + 1) * ca * hw], src);
                }
            }
            if nodes[*b].needs_grad {
                let gb = slot(grads, *b, nodes[*b].data.len());
                for s in 0..n {
                    let off = s * (ca + cb) * hw + ca * hw;
                    let src = &g[off..off + cb * hw];
                    add_assign(&mut gb[s * cb * hw..(s + 1) * cb * hw], src);
                }
            }
        }
        Op::Crop { input, r0, c0 } => {
            if nodes[*input].needs_grad {
                let osh = nodes[i].shape.clone();
                let ish = &nodes[*input].shape;
                let (n, c, h, w) = (osh[0], osh[1], osh[2], osh[3]);
                let (hh, ww) = (ish[2], ish[3]);
                let gi = slot(grads, *input, nodes[*input].data.len());
                for img in 0..n * c {
                    let src = &g[img * h * w..(img + 1) * h * w];
                    let dst = &mut gi[img * hh * ww..(img + 1) * hh * ww];
                    for r in 0..h {
                        let d = (r0 + r) * ww + c0;
                        add_assign(&mut dst[d..d + w], &src[r * w..(r + 1) * w]);
                    }
                }
            }
        }
        Op::Place { input, r0, c0 } => {
            if nodes[*input].needs_grad {
                let ish = nodes[*input].shape.clone();
                let osh = &nodes[i].shape;
                let (n, c, h, w) = (ish[0], ish[1], ish[2], ish[3]);
                let (oh, ow) = (osh[2], osh[3]);
                let gi = slot(grads, *input, nodes[*input].data.len());
                for img in 0..n * c {
                    let src = &g[img * oh * ow..(img + 1) * oh * ow];
                    let dst = &mut gi[img * h * w..(img + 1) * h * w];
                    for r in 0..h {
                        let s = (r0 + r) * ow + c0;
                        add_assign(&mut dst[r * w..(r + 1) * w], &src[s..s + w]);
                    }
                }
            }
        }
        Op::Index { input, at } => {
            if nodes[*input].needs_grad {
                let gi = slot(grads, *input, nodes[*input].data.len());
                gi[*at] += g[0];
            }
        }
        Op::Reshape(a) => {
            if nodes[*a].needs_grad {
                add_assign(slot(grads, *a, g.len()), g);
            }
        }
        Op::SoftmaxXent { logits, labels } => {
            if nodes[*logits].needs_grad {
                let x = &nodes[*logits].data;
                let l = nodes[*logits].shape[1];
                let n = labels.len();
                let scale = g[0] as f64 / n as f64;
                let gl = slot(grads, *logits, x.len());
                for (r, &y) in labels.iter().enumerate() {
                    let row = &x[r * l..(r + 1) * l];
                    let m = row.iter().fold(f32::NEG_INFINITY, |a, &b| a.max(b)) as f64;
                    let mut denom = 0.0f64;
                    for &z in row {
                        denom += (z as f64 - m).exp();
                    }
                    let gr = &mut gl[r * l..(r + 1) * l];
                    for (c, (d, &z)) in gr.iter_mut().zip(row).enumerate() {
                        let p = (z as f64 - m).exp() / denom;
                        let onehot = if c == y { 1.0 } else { 0.0 };
                        *d += (scale * (p - onehot)) as f32;
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn leaf_grad(t: Tensor, f: impl FnOnce(&Var) -> Var) -> Vec<f32> {
        let tape = Tape::new();
        let x = tape.leaf(t.requires_grad(true));
        let loss = f(&x);
        loss.backward().unwrap();
        x.grad().unwrap().data().to_vec()
    }

    #[test]
    fn sum_grad_is_ones() {
        let g = leaf_grad(
            Tensor::from_vec(vec![2, 3], vec![1.0, -2.0, 0.5, 3.0, 0.0, -1.0]).unwrap(),
            |x| x.sum(),
        );
        assert_eq!(g, vec![1.0; 6]);
    }

    #[test]
    fn sum_of_squares_grad() {
        let g = leaf_grad(Tensor::from_vec(vec![3], vec![1.0, 2.0, 3.0]).unwrap(), |x| {
            x.mul(x).unwrap().sum()
        });
        assert_eq!(g, vec![2.0, 4.0, 6.0]);
    }

    #[test]
    fn fan_out_accumulates() {
        // loss = sum(x) + sum(x) must yield all-twos, not all-ones.
        let g = leaf_grad(Tensor::from_vec(vec![4], vec![0.1, 0.2, 0.3, 0.4]).unwrap(), |x| {
            x.sum().add(&x.sum()).unwrap()
        });
        assert_eq!(g, vec![2.0; 4]);
    }

    #[test]
    fn unreachable_leaf_gets_zero() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::from_vec(vec![2], vec![1.0, 2.0]).unwrap().requires_grad(true));
        let y = tape.leaf(Tensor::from_vec(vec![2], vec![3.0, 4.0]).unwrap().requires_grad(true));
        let loss = x.sum();
        loss.backward().unwrap();
        assert_eq!(y.grad().unwrap().data(), &[0.0, 0.0]);
    }

    #[test]
    fn double_backward_is_state_error() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(2.0).requires_grad(true));
        let loss = x.mul(&x).unwrap();
        loss.backward().unwrap();
        assert!(matches!(loss.backward(), Err(Error::State { .. })));
    }

    #[test]
    fn non_scalar_loss_is_contract_error() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::from_vec(vec![2], vec![1.0, 2.0]).unwrap().requires_grad(true));
        assert!(matches!(x.backward(), Err(Error::Contract { .. })));
    }

    #[test]
    fn cross_tape_operands_rejected() {
        let t1 = Tape::new();
        let t2 = Tape::new();
        let a = t1.leaf(Tensor::scalar(1.0));
        let b = t2.leaf(Tensor::scalar(2.0));
        assert!(matches!(a.add(&b), Err(Error::Contract { .. })));
    }

    #[test]
    fn sign_matches_convention_and_blocks_grad() {
        let tape = Tape::new();
        let x = tape.leaf(
            Tensor::from_vec(vec![3], vec![-2.0, 0.0, 5.0]).unwrap().requires_grad(true),
        );
        let s = x.sign();
        assert_eq!(s.value().data(), &[-1.0, 0.0, 1.0]);
        let loss = s.sum();
        loss.backward().unwrap();
        assert_eq!(x.grad().unwrap().data(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn clamp_blocks_grad_outside_unit_box() {
        let tape = Tape::new();
        let x = tape.leaf(
            Tensor::from_vec(vec![4], vec![-0.5, 0.25, 0.75, 1.5]).unwrap().requires_grad(true),
        );
        let loss = x.clamp01().sum();
        loss.backward().unwrap();
        assert_eq!(x.grad().unwrap().data(), &[0.0, 1.0, 1.0, 0.0]);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::from_vec(vec![2, 3], vec![1.0, 2.0, 3.0, -1.0, 0.0, 1.0]).unwrap());
        let p = x.softmax().unwrap();
        for row in p.value().data().chunks(3) {
            let s: f64 = row.iter().map(|&v| v as f64).sum();
            assert!((s - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn softmax_cross_entropy_reference_values() {
        // Equal logits over 10 classes -> ln 10.
        let tape = Tape::new();
        let x = tape.leaf(Tensor::from_vec(vec![1, 10], vec![0.3; 10]).unwrap());
        let l = x.softmax_cross_entropy(&[4]).unwrap();
        assert!((l.scalar().unwrap() as f64 - 10.0f64.ln()).abs() < 1e-6);
        // Logits (10, 0) with label 0 -> ln(1 + e^-10) = 4.5398e-5.
        let tape = Tape::new();
        let x = tape.leaf(Tensor::from_vec(vec![1, 2], vec![10.0, 0.0]).unwrap());
        let l = x.softmax_cross_entropy(&[0]).unwrap();
        let expect = (1.0f64 + (-10.0f64).exp()).ln();
        assert!((l.scalar().unwrap() as f64 - expect).abs() < 1e-9, "{}", l.scalar().unwrap());
    }

    #[test]
    fn matmul_grads_match_hand_derivation() {
        // loss = sum(A B); dA = ones * B^T, dB = A^T * ones.
        let tape = Tape::new();
        let a = tape.leaf(
            Tensor::from_vec(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap().requires_grad(true),
        );
        let b = tape.leaf(
            Tensor::from_vec(vec![2, 2], vec![5.0, 6.0, 7.0, 8.0]).unwrap().requires_grad(true),
        );
        let loss = a.matmul(&b).unwrap().sum();
        loss.backward().unwrap();
        assert_eq!(a.grad().unwrap().data(), &[11.0, 15.0, 11.0, 15.0]);
        assert_eq!(b.grad().unwrap().data(), &[4.0, 4.0, 6.0, 6.0]);
    }

    #[test]
    fn upsample_then_sum_grad_is_block_count() {
        let tape = Tape::new();
        let x = tape.leaf(
            Tensor::from_vec(vec![1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap().requires_grad(true),
        );
        let loss = x.upsample_nearest(2).unwrap().sum();
        loss.backward().unwrap();
        assert_eq!(x.grad().unwrap().data(), &[4.0; 4]);
    }

    #[test]
    fn crop_place_round_trip_grads() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::uniform(vec![1, 2, 4, 4], 0.0, 1.0, 5).unwrap().requires_grad(true));
        let c = x.crop(1, 1, 2, 2).unwrap();
        let p = c.place(1, 1, 4, 4).unwrap();
        assert_eq!(p.value().data()[5], x.value().data()[5]);
        let loss = p.sum();
        loss.backward().unwrap();
        let g = x.grad().unwrap();
        // Only the cropped window participates in the loss.
        let expected: Vec<f32> = (0..32)
            .map(|i| {
                let (r, c) = ((i % 16) / 4, i % 4);
                if (1..3).contains(&r) && (1..3).contains(&c) {
                    1.0
                } else {
                    0.0
                }
            })
            .collect();
        assert_eq!(g.data(), &expected[..]);
    }

    #[test]
    fn concat_splits_gradient() {
        let tape = Tape::new();
        let a = tape.leaf(Tensor::full(vec![1, 1, 2, 2], 1.0).requires_grad(true));
        let b = tape.leaf(Tensor::full(vec![1, 2, 2, 2], 2.0).requires_grad(true));
        let cat = a.concat_channels(&b).unwrap();
        assert_eq!(cat.shape(), vec![1, 3, 2, 2]);
        let loss = cat.mul_scalar(3.0).sum();
        loss.backward().unwrap();
        assert_eq!(a.grad().unwrap().data(), &[3.0; 4]);
        assert_eq!(b.grad().unwrap().data(), &[3.0; 8]);
    }

    #[test]
    fn dead_branch_is_not_differentiated() {
        // y participates in no grad path; its needs_grad stays false through ops
        // on constants, and backward leaves its grad zeroed.
        let tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(3.0).requires_grad(true));
        let k = tape.constant(Tensor::scalar(4.0));
        let dead = k.mul_scalar(2.0);
        let loss = x.mul(&x).unwrap().add(&dead.mul_scalar(0.0)).unwrap();
        loss.backward().unwrap();
        assert_eq!(x.grad().unwrap().data(), &[6.0]);
    }

    #[test]
    fn conv_identity_kernel_grad_passes_through() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::uniform(vec![1, 1, 3, 3], 0.0, 1.0, 9).unwrap().requires_grad(true));
        let w = tape.leaf(Tensor::from_vec(vec![1, 1, 1, 1], vec![1.0]).unwrap());
        let b = tape.leaf(Tensor::from_vec(vec![1], vec![0.0]).unwrap());
        let y = x.conv2d(&w, &b, 1, 0).unwrap();
        assert_eq!(y.value().data(), x.value().data());
        y.sum().backward().unwrap();
        assert_eq!(x.grad().unwrap().data(), &[1.0; 9]);
    }

    #[test]
    fn conv_channel_mismatch_is_shape_error() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::zeros(vec![1, 3, 4, 4]));
        let w = tape.leaf(Tensor::zeros(vec![2, 4, 3, 3]));
        let b = tape.leaf(Tensor::zeros(vec![2]));
        assert!(matches!(x.conv2d(&w, &b, 1, 1), Err(Error::Shape { .. })));
    }

    #[test]
    fn upsample_factor_zero_is_param_error() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::zeros(vec![1, 1, 2, 2]));
        assert!(matches!(x.upsample_nearest(0), Err(Error::Param { .. })));
    }
}
