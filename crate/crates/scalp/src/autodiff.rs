//! Reverse-mode differentiation on a recorded tape.
//!
//! Every primitive application is evaluated eagerly and recorded as a node;
//! nodes reference their inputs by index, so the tape is topologically
//! ordered by construction. Two backward sweeps are provided:
//!
//! * [`Var::backward`] — computes gradient values directly and consumes the
//!   tape. Gradients for a node used by several operations accumulate
//!   additively, in recorded-tape order, which keeps seeded runs
//!   bit-reproducible.
//! * [`Var::backward_retaining`] — expresses each gradient as further tape
//!   operations, so the result can be differentiated again. This is what
//!   second- and third-order derivatives are built from.
//!
//! A tape is single-threaded; tensors pulled out of it are plain values and
//! may be shared freely. Distinct tapes can run on distinct threads.

use std::cell::RefCell;
use std::collections::HashMap;
use std::rc::Rc;

use crate::error::{Error, Result};
use crate::kernels;
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Matmul(usize, usize),
    Conv2d { x: usize, k: usize, stride: usize, pad: usize },
    /// Adjoint of Conv2d w.r.t. its input; produces an `[cin, xh, xw]` tensor.
    Conv2dInputGrad { gy: usize, k: usize, stride: usize, pad: usize },
    /// Adjoint of Conv2d w.r.t. its kernel; produces `[cout, cin, kh, kw]`.
    Conv2dKernelGrad { x: usize, gy: usize, stride: usize, pad: usize },
    Relu(usize),
    /// 0/1 indicator of `x > 0`; carries no gradient of its own.
    ReluMask(usize),
    Sigmoid(usize),
    Exp(usize),
    Log(usize),
    Recip(usize),
    Sqrt(usize),
    Clamp { x: usize, lo: f64, hi: f64 },
    /// 0/1 indicator of `lo <= x <= hi`; carries no gradient.
    ClampMask(usize),
    SumAxis { x: usize, axis: usize },
    MaxAxis { x: usize, axis: usize },
    /// First-argmax indicator along an axis; carries no gradient.
    MaxMask(usize),
    RepeatAxis { x: usize, axis: usize },
    Concat { xs: Vec<usize>, axis: usize },
    SliceAxis { x: usize, axis: usize, start: usize, len: usize },
    Permute { x: usize, perm: Vec<usize> },
    Reshape { x: usize },
    BilinearUp(usize),
    /// Adjoint of BilinearUp; scatters a target grid back onto the source.
    BilinearDown(usize),
}

impl Op {
    fn inputs(&self) -> Vec<usize> {
        match *self {
            Op::Leaf => vec![],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::Matmul(a, b) => vec![a, b],
            Op::Conv2d { x, k, .. } => vec![x, k],
            Op::Conv2dInputGrad { gy, k, .. } => vec![gy, k],
            Op::Conv2dKernelGrad { x, gy, .. } => vec![x, gy],
            Op::Relu(x)
            | Op::ReluMask(x)
            | Op::Sigmoid(x)
            | Op::Exp(x)
            | Op::Log(x)
            | Op::Recip(x)
            | Op::Sqrt(x) => vec![x],
            Op::Clamp { x, .. } => vec![x],
            Op::ClampMask(x)
            | Op::MaxMask(x)
            | Op::BilinearUp(x)
            | Op::BilinearDown(x) => vec![x],
            Op::SumAxis { x, .. }
            | Op::MaxAxis { x, .. }
            | Op::RepeatAxis { x, .. }
            | Op::SliceAxis { x, .. }
            | Op::Permute { x, .. }
            | Op::Reshape { x } => vec![x],
            Op::Concat { ref xs, .. } => xs.clone(),
        }
    }

    /// Mask-style ops are piecewise constant; their own derivative is zero.
    fn blocks_grad(&self) -> bool {
        matches!(self, Op::ReluMask(_) | Op::ClampMask(_) | Op::MaxMask(_))
    }
}

struct Node {
    op: Op,
    value: Tensor,
    requires_grad: bool,
}

struct TapeInner {
    nodes: Vec<Node>,
    consumed: bool,
}

/// A recording of primitive operations; see the module docs.
#[derive(Clone)]
pub struct Tape {
    inner: Rc<RefCell<TapeInner>>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape { inner: Rc::new(RefCell::new(TapeInner { nodes: Vec::new(), consumed: false })) }
    }

    fn push(&self, op: Op, value: Tensor, requires_grad: bool) -> Var {
        let mut inner = self.inner.borrow_mut();
        let id = inner.nodes.len();
        inner.nodes.push(Node { op, value, requires_grad });
        Var { tape: self.clone(), id }
    }

    /// Record a differentiable input.
    pub fn leaf(&self, value: Tensor) -> Var {
        self.push(Op::Leaf, value, true)
    }

    /// Record a non-differentiable input (data, labels, fixed coefficients).
    pub fn constant(&self, value: Tensor) -> Var {
        self.push(Op::Leaf, value, false)
    }

    pub fn scalar(&self, v: f64) -> Var {
        self.constant(Tensor::scalar(v))
    }

    pub fn len(&self) -> usize {
        self.inner.borrow().nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn is_consumed(&self) -> bool {
        self.inner.borrow().consumed
    }

    fn same_tape(&self, other: &Tape) -> bool {
        Rc::ptr_eq(&self.inner, &other.inner)
    }
}

/// Handle to one recorded tensor on a [`Tape`].
#[derive(Clone)]
pub struct Var {
    tape: Tape,
    id: usize,
}

impl std::fmt::Debug for Var {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Var").field("id", &self.id).field("shape", &self.shape()).finish()
    }
}

/// Gradient values produced by a consuming backward pass, indexed by the
/// tape nodes they belong to. Nodes the seed does not reach report `None`.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: &Var) -> Option<&Tensor> {
        self.grads.get(v.id).and_then(|g| g.as_ref())
    }

    /// Gradient of `v`, with zeros when the seed does not reach it.
    pub fn or_zeros(&self, v: &Var) -> Tensor {
        match self.get(v) {
            Some(t) => t.clone(),
            None => Tensor::zeros(&v.shape()),
        }
    }
}

/// Gradients expressed as tape variables; differentiable again.
pub struct VarGrads {
    map: HashMap<usize, Var>,
}

impl VarGrads {
    pub fn get(&self, v: &Var) -> Option<&Var> {
        self.map.get(&v.id)
    }
}

fn shape_err(op: &'static str, detail: String) -> Error {
    Error::ShapeMismatch { op, detail }
}

/// Elementwise combine with scalar-with-tensor broadcasting.
fn ew(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    if a.shape() == b.shape() {
        let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(a.shape().to_vec(), data).unwrap()
    } else if a.is_scalar() {
        let x = a.item();
        b.map(|y| f(x, y))
    } else {
        let y = b.item();
        a.map(|x| f(x, y))
    }
}

fn sum_all_tensor(t: &Tensor) -> Tensor {
    Tensor::scalar(t.data().iter().sum())
}

impl Var {
    pub fn tape(&self) -> &Tape {
        &self.tape
    }

    pub fn value(&self) -> Tensor {
        self.tape.inner.borrow().nodes[self.id].value.clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.inner.borrow().nodes[self.id].value.shape().to_vec()
    }

    pub fn item(&self) -> f64 {
        self.tape.inner.borrow().nodes[self.id].value.item()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.inner.borrow().nodes[self.id].requires_grad
    }

    fn rg(&self) -> bool {
        self.requires_grad()
    }

    fn with_value<R>(&self, f: impl FnOnce(&Tensor) -> R) -> R {
        f(&self.tape.inner.borrow().nodes[self.id].value)
    }

    fn binary_shapes(&self, other: &Var, op: &'static str) -> Result<()> {
        if !self.tape.same_tape(&other.tape) {
            return Err(shape_err(op, "operands live on different tapes".into()));
        }
        let (a, b) = (self.shape(), other.shape());
        if a == b || a.is_empty() || b.is_empty() {
            Ok(())
        } else {
            Err(shape_err(op, format!("operand shapes {a:?} and {b:?}")))
        }
    }

    pub fn add(&self, other: &Var) -> Result<Var> {
        self.binary_shapes(other, "add")?;
        let v = self.with_value(|a| other.with_value(|b| ew(a, b, |x, y| x + y)));
        Ok(self.tape.push(Op::Add(self.id, other.id), v, self.rg() || other.rg()))
    }

    pub fn sub(&self, other: &Var) -> Result<Var> {
        self.binary_shapes(other, "sub")?;
        let v = self.with_value(|a| other.with_value(|b| ew(a, b, |x, y| x - y)));
        Ok(self.tape.push(Op::Sub(self.id, other.id), v, self.rg() || other.rg()))
    }

    pub fn mul(&self, other: &Var) -> Result<Var> {
        self.binary_shapes(other, "mul")?;
        let v = self.with_value(|a| other.with_value(|b| ew(a, b, |x, y| x * y)));
        Ok(self.tape.push(Op::Mul(self.id, other.id), v, self.rg() || other.rg()))
    }

    pub fn add_const(&self, c: f64) -> Var {
        let c = self.tape.scalar(c);
        self.add(&c).unwrap()
    }

    pub fn mul_const(&self, c: f64) -> Var {
        let c = self.tape.scalar(c);
        self.mul(&c).unwrap()
    }

    pub fn matmul(&self, other: &Var) -> Result<Var> {
        if !self.tape.same_tape(&other.tape) {
            return Err(shape_err("matmul", "operands live on different tapes".into()));
        }
        let (a, b) = (self.shape(), other.shape());
        if a.len() != 2 || b.len() != 2 || a[1] != b[0] {
            return Err(shape_err("matmul", format!("operand shapes {a:?} and {b:?}")));
        }
        let v = self.with_value(|x| other.with_value(|y| kernels::matmul(x, y)));
        Ok(self.tape.push(Op::Matmul(self.id, other.id), v, self.rg() || other.rg()))
    }

    /// 2-D convolution with zero padding: input `[cin, h, w]`, kernel
    /// `[cout, cin, kh, kw]`.
    pub fn conv2d(&self, kernel: &Var, stride: usize, pad: usize) -> Result<Var> {
        if !self.tape.same_tape(&kernel.tape) {
            return Err(shape_err("conv2d", "operands live on different tapes".into()));
        }
        let (xs, ks) = (self.shape(), kernel.shape());
        if xs.len() != 3 || ks.len() != 4 || xs[0] != ks[1] {
            return Err(shape_err("conv2d", format!("input {xs:?} vs kernel {ks:?}")));
        }
        if stride == 0 {
            return Err(shape_err("conv2d", "stride must be positive".into()));
        }
        if xs[1] + 2 * pad < ks[2] || xs[2] + 2 * pad < ks[3] {
            return Err(shape_err(
                "conv2d",
                format!("kernel {ks:?} larger than padded input {xs:?} (pad {pad})"),
            ));
        }
        let v = self.with_value(|x| kernel.with_value(|k| kernels::conv2d(x, k, stride, pad)));
        Ok(self.tape.push(
            Op::Conv2d { x: self.id, k: kernel.id, stride, pad },
            v,
            self.rg() || kernel.rg(),
        ))
    }

    fn unary(&self, op: Op, v: Tensor) -> Var {
        let rg = self.rg() && !op.blocks_grad();
        self.tape.push(op, v, rg)
    }

    pub fn relu(&self) -> Var {
        let v = self.with_value(|x| x.map(|e| if e > 0.0 { e } else { 0.0 }));
        self.unary(Op::Relu(self.id), v)
    }

    fn relu_mask(&self) -> Var {
        let v = self.with_value(|x| x.map(|e| if e > 0.0 { 1.0 } else { 0.0 }));
        self.unary(Op::ReluMask(self.id), v)
    }

    pub fn sigmoid(&self) -> Var {
        let v = self.with_value(|x| x.map(|e| 1.0 / (1.0 + (-e).exp())));
        self.unary(Op::Sigmoid(self.id), v)
    }

    pub fn exp(&self) -> Var {
        let v = self.with_value(|x| x.map(f64::exp));
        self.unary(Op::Exp(self.id), v)
    }

    pub fn log(&self) -> Var {
        let v = self.with_value(|x| x.map(f64::ln));
        self.unary(Op::Log(self.id), v)
    }

    pub fn recip(&self) -> Var {
        let v = self.with_value(|x| x.map(|e| 1.0 / e));
        self.unary(Op::Recip(self.id), v)
    }

    pub fn sqrt(&self) -> Var {
        let v = self.with_value(|x| x.map(f64::sqrt));
        self.unary(Op::Sqrt(self.id), v)
    }

    pub fn clamp(&self, lo: f64, hi: f64) -> Var {
        let v = self.with_value(|x| x.map(|e| e.clamp(lo, hi)));
        self.unary(Op::Clamp { x: self.id, lo, hi }, v)
    }

    fn clamp_mask(&self, lo: f64, hi: f64) -> Var {
        let v = self.with_value(|x| x.map(|e| if (lo..=hi).contains(&e) { 1.0 } else { 0.0 }));
        self.unary(Op::ClampMask(self.id), v)
    }

    fn check_axis(&self, axis: usize, op: &'static str) -> Result<()> {
        let s = self.shape();
        if axis >= s.len() {
            return Err(shape_err(op, format!("axis {axis} out of range for shape {s:?}")));
        }
        Ok(())
    }

    pub fn sum_axis(&self, axis: usize) -> Result<Var> {
        self.check_axis(axis, "sum")?;
        let v = self.with_value(|x| kernels::sum_axis(x, axis));
        Ok(self.unary(Op::SumAxis { x: self.id, axis }, v))
    }

    /// Mean over one axis, built from sum and a constant scale.
    pub fn mean_axis(&self, axis: usize) -> Result<Var> {
        self.check_axis(axis, "mean")?;
        let n = self.shape()[axis] as f64;
        Ok(self.sum_axis(axis)?.mul_const(1.0 / n))
    }

    pub fn max_axis(&self, axis: usize) -> Result<Var> {
        self.check_axis(axis, "max")?;
        let v = self.with_value(|x| kernels::max_axis(x, axis));
        Ok(self.unary(Op::MaxAxis { x: self.id, axis }, v))
    }

    fn max_mask(&self, axis: usize) -> Var {
        let v = self.with_value(|x| kernels::max_mask(x, axis));
        self.unary(Op::MaxMask(self.id), v)
    }

    /// Insert a new axis of length `n` at `axis`, repeating the data.
    pub fn repeat_axis(&self, axis: usize, n: usize) -> Result<Var> {
        let s = self.shape();
        if axis > s.len() || n == 0 {
            return Err(shape_err("repeat", format!("axis {axis}, n {n} for shape {s:?}")));
        }
        let v = self.with_value(|x| kernels::repeat_axis(x, axis, n));
        Ok(self.unary(Op::RepeatAxis { x: self.id, axis }, v))
    }

    pub fn permute(&self, perm: &[usize]) -> Result<Var> {
        let s = self.shape();
        let mut seen = vec![false; s.len()];
        let valid = perm.len() == s.len()
            && perm.iter().all(|&p| {
                if p >= s.len() || seen[p] {
                    false
                } else {
                    seen[p] = true;
                    true
                }
            });
        if !valid {
            return Err(shape_err("permute", format!("perm {perm:?} for shape {s:?}")));
        }
        let v = self.with_value(|x| kernels::permute(x, perm));
        Ok(self.unary(Op::Permute { x: self.id, perm: perm.to_vec() }, v))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Var> {
        let v = self.with_value(|x| x.reshaped(shape))?;
        Ok(self.unary(Op::Reshape { x: self.id }, v))
    }

    pub fn slice_axis(&self, axis: usize, start: usize, len: usize) -> Result<Var> {
        self.check_axis(axis, "slice")?;
        let s = self.shape();
        if len == 0 || start + len > s[axis] {
            return Err(shape_err(
                "slice",
                format!("range {start}..{} on axis {axis} of {s:?}", start + len),
            ));
        }
        let v = self.with_value(|x| kernels::slice_axis(x, axis, start, len));
        Ok(self.unary(Op::SliceAxis { x: self.id, axis, start, len }, v))
    }

    pub fn concat(vars: &[Var], axis: usize) -> Result<Var> {
        let first = vars.first().ok_or_else(|| shape_err("concat", "no inputs".into()))?;
        let base = first.shape();
        for v in vars {
            if !first.tape.same_tape(&v.tape) {
                return Err(shape_err("concat", "operands live on different tapes".into()));
            }
            let s = v.shape();
            let compatible = s.len() == base.len()
                && axis < s.len()
                && s.iter().zip(&base).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(shape_err("concat", format!("shapes {base:?} vs {s:?} on axis {axis}")));
            }
        }
        let values: Vec<Tensor> = vars.iter().map(|v| v.value()).collect();
        let refs: Vec<&Tensor> = values.iter().collect();
        let out = kernels::concat(&refs, axis);
        let rg = vars.iter().any(Var::rg);
        let ids = vars.iter().map(|v| v.id).collect();
        Ok(first.tape.push(Op::Concat { xs: ids, axis }, out, rg))
    }

    /// Bilinear upsample of a 2-D tensor, align-corners-false (sample centers
    /// at `(i + 0.5) / scale - 0.5`, clamped at the borders).
    pub fn upsample_bilinear(&self, th: usize, tw: usize) -> Result<Var> {
        let s = self.shape();
        if s.len() != 2 {
            return Err(shape_err("upsample", format!("want a 2-D tensor, got {s:?}")));
        }
        if th < s[0] || tw < s[1] {
            return Err(shape_err("upsample", format!("target {th}x{tw} below source {s:?}")));
        }
        let v = self.with_value(|x| kernels::bilinear_up(x, th, tw));
        Ok(self.unary(Op::BilinearUp(self.id), v))
    }

    fn bilinear_down(&self, sh: usize, sw: usize) -> Var {
        let v = self.with_value(|x| kernels::bilinear_down_adjoint(x, sh, sw));
        self.unary(Op::BilinearDown(self.id), v)
    }

    pub fn sum_all(&self) -> Var {
        let n = self.shape().iter().product::<usize>();
        self.reshape(&[n]).unwrap().sum_axis(0).unwrap()
    }

    pub fn mean_all(&self) -> Var {
        let n = self.shape().iter().product::<usize>() as f64;
        self.sum_all().mul_const(1.0 / n)
    }

    pub fn dot(&self, other: &Var) -> Result<Var> {
        Ok(self.mul(other)?.sum_all())
    }

    /// Scale to unit Euclidean norm over all elements; `1e-12` is added to
    /// the norm so the zero tensor maps to (near) zero instead of NaN.
    pub fn l2_normalize(&self) -> Var {
        let norm = self.mul(self).unwrap().sum_all().sqrt();
        let inv = norm.add_const(1e-12).recip();
        self.mul(&inv).unwrap()
    }

    // ------------------------------------------------------------------
    // Backward sweeps
    // ------------------------------------------------------------------

    fn mark_ancestors(&self) -> Vec<bool> {
        let inner = self.tape.inner.borrow();
        let mut interesting = vec![false; inner.nodes.len()];
        if !inner.nodes[self.id].requires_grad {
            return interesting;
        }
        let mut stack = vec![self.id];
        while let Some(id) = stack.pop() {
            if interesting[id] {
                continue;
            }
            interesting[id] = true;
            for input in inner.nodes[id].op.inputs() {
                if inner.nodes[input].requires_grad && !interesting[input] {
                    stack.push(input);
                }
            }
        }
        interesting
    }

    /// Reverse sweep producing gradient values. Consumes the tape: a second
    /// backward call on the same tape reports [`Error::TapeConsumed`].
    ///
    /// Contributions that are identically zero are skipped, so branches that
    /// were scaled to zero leave no numeric trace in the accumulators.
    pub fn backward(&self, seed: &Tensor) -> Result<Gradients> {
        {
            let mut inner = self.tape.inner.borrow_mut();
            if inner.consumed {
                return Err(Error::TapeConsumed);
            }
            let out_shape = inner.nodes[self.id].value.shape();
            if seed.shape() != out_shape {
                return Err(Error::SeedShape {
                    seed: seed.shape().to_vec(),
                    output: out_shape.to_vec(),
                });
            }
            inner.consumed = true;
        }
        let interesting = self.mark_ancestors();
        let inner = self.tape.inner.borrow();
        let mut grads: Vec<Option<Tensor>> = vec![None; inner.nodes.len()];
        if interesting[self.id] {
            grads[self.id] = Some(seed.clone());
        }

        fn acc(grads: &mut [Option<Tensor>], id: usize, contrib: Tensor) {
            if contrib.is_all_zero() {
                return;
            }
            match &mut grads[id] {
                Some(g) => {
                    for (a, &b) in g.data_mut().iter_mut().zip(contrib.data()) {
                        if b != 0.0 {
                            *a += b;
                        }
                    }
                }
                slot @ None => *slot = Some(contrib),
            }
        }

        for id in (0..=self.id).rev() {
            if !interesting[id] {
                continue;
            }
            let g = match grads[id].clone() {
                Some(g) => g,
                None => continue,
            };
            let node = &inner.nodes[id];
            let val = |i: usize| &inner.nodes[i].value;
            let needs = |i: usize| inner.nodes[i].requires_grad;
            match node.op {
                Op::Leaf | Op::ReluMask(_) | Op::ClampMask(_) | Op::MaxMask(_) => {}
                Op::Add(a, b) => {
                    if needs(a) {
                        let c = if val(a).is_scalar() && !g.is_scalar() {
                            sum_all_tensor(&g)
                        } else {
                            g.clone()
                        };
                        acc(&mut grads, a, c);
                    }
                    if needs(b) {
                        let c = if val(b).is_scalar() && !g.is_scalar() {
                            sum_all_tensor(&g)
                        } else {
                            g.clone()
                        };
                        acc(&mut grads, b, c);
                    }
                }
                Op::Sub(a, b) => {
                    if needs(a) {
                        let c = if val(a).is_scalar() && !g.is_scalar() {
                            sum_all_tensor(&g)
                        } else {
                            g.clone()
                        };
                        acc(&mut grads, a, c);
                    }
                    if needs(b) {
                        let neg = g.map(|v| -v);
                        let c = if val(b).is_scalar() && !g.is_scalar() {
                            sum_all_tensor(&neg)
                        } else {
                            neg
                        };
                        acc(&mut grads, b, c);
                    }
                }
                Op::Mul(a, b) => {
                    if needs(a) {
                        let prod = ew(&g, val(b), |x, y| x * y);
                        let c = if val(a).is_scalar() && !prod.is_scalar() {
                            sum_all_tensor(&prod)
                        } else {
                            prod
                        };
                        acc(&mut grads, a, c);
                    }
                    if needs(b) {
                        let prod = ew(&g, val(a), |x, y| x * y);
                        let c = if val(b).is_scalar() && !prod.is_scalar() {
                            sum_all_tensor(&prod)
                        } else {
                            prod
                        };
                        acc(&mut grads, b, c);
                    }
                }
                Op::Matmul(a, b) => {
                    if needs(a) {
                        let bt = kernels::permute(val(b), &[1, 0]);
                        acc(&mut grads, a, kernels::matmul(&g, &bt));
                    }
                    if needs(b) {
                        let at = kernels::permute(val(a), &[1, 0]);
                        acc(&mut grads, b, kernels::matmul(&at, &g));
                    }
                }
                Op::Conv2d { x, k, stride, pad } => {
                    let (xh, xw) = (val(x).shape()[1], val(x).shape()[2]);
                    let (kh, kw) = (val(k).shape()[2], val(k).shape()[3]);
                    if needs(x) {
                        acc(
                            &mut grads,
                            x,
                            kernels::conv2d_input_grad(&g, val(k), stride, pad, xh, xw),
                        );
                    }
                    if needs(k) {
                        acc(
                            &mut grads,
                            k,
                            kernels::conv2d_kernel_grad(val(x), &g, stride, pad, kh, kw),
                        );
                    }
                }
                Op::Conv2dInputGrad { gy, k, stride, pad, .. } => {
                    // d/d(gy) <s, input_grad(gy,k)> = conv(s, k)
                    // d/d(k)  <s, input_grad(gy,k)> = kernel_grad(s, gy)
                    let (kh, kw) = (val(k).shape()[2], val(k).shape()[3]);
                    if needs(gy) {
                        acc(&mut grads, gy, kernels::conv2d(&g, val(k), stride, pad));
                    }
                    if needs(k) {
                        acc(
                            &mut grads,
                            k,
                            kernels::conv2d_kernel_grad(&g, val(gy), stride, pad, kh, kw),
                        );
                    }
                }
                Op::Conv2dKernelGrad { x, gy, stride, pad, .. } => {
                    // d/d(x)  <kernel_grad(x,gy), t> = input_grad(gy, t)
                    // d/d(gy) <kernel_grad(x,gy), t> = conv(x, t)
                    let (xh, xw) = (val(x).shape()[1], val(x).shape()[2]);
                    if needs(x) {
                        acc(
                            &mut grads,
                            x,
                            kernels::conv2d_input_grad(val(gy), &g, stride, pad, xh, xw),
                        );
                    }
                    if needs(gy) {
                        acc(&mut grads, gy, kernels::conv2d(val(x), &g, stride, pad));
                    }
                }
                Op::Relu(x) => {
                    if needs(x) {
                        let m = val(x).map(|e| if e > 0.0 { 1.0 } else { 0.0 });
                        acc(&mut grads, x, ew(&g, &m, |a, b| a * b));
                    }
                }
                Op::Sigmoid(x) => {
                    if needs(x) {
                        let y = &node.value;
                        let d = ew(&g, y, |a, s| a * s * (1.0 - s));
                        acc(&mut grads, x, d);
                    }
                }
                Op::Exp(x) => {
                    if needs(x) {
                        acc(&mut grads, x, ew(&g, &node.value, |a, y| a * y));
                    }
                }
                Op::Log(x) => {
                    if needs(x) {
                        acc(&mut grads, x, ew(&g, val(x), |a, v| a / v));
                    }
                }
                Op::Recip(x) => {
                    if needs(x) {
                        acc(&mut grads, x, ew(&g, &node.value, |a, y| -a * y * y));
                    }
                }
                Op::Sqrt(x) => {
                    if needs(x) {
                        acc(&mut grads, x, ew(&g, &node.value, |a, y| a * 0.5 / y));
                    }
                }
                Op::Clamp { x, lo, hi } => {
                    if needs(x) {
                        let m = val(x).map(|e| if (lo..=hi).contains(&e) { 1.0 } else { 0.0 });
                        acc(&mut grads, x, ew(&g, &m, |a, b| a * b));
                    }
                }
                Op::SumAxis { x, axis } => {
                    if needs(x) {
                        let n = val(x).shape()[axis];
                        acc(&mut grads, x, kernels::repeat_axis(&g, axis, n));
                    }
                }
                Op::MaxAxis { x, axis } => {
                    if needs(x) {
                        let n = val(x).shape()[axis];
                        let rep = kernels::repeat_axis(&g, axis, n);
                        let mask = kernels::max_mask(val(x), axis);
                        acc(&mut grads, x, ew(&rep, &mask, |a, b| a * b));
                    }
                }
                Op::RepeatAxis { x, axis, .. } => {
                    if needs(x) {
                        acc(&mut grads, x, kernels::sum_axis(&g, axis));
                    }
                }
                Op::Concat { ref xs, axis } => {
                    let mut at = 0;
                    for &xid in xs {
                        let len = val(xid).shape()[axis];
                        if needs(xid) {
                            acc(&mut grads, xid, kernels::slice_axis(&g, axis, at, len));
                        }
                        at += len;
                    }
                }
                Op::SliceAxis { x, axis, start, .. } => {
                    if needs(x) {
                        let full = val(x).shape()[axis];
                        acc(&mut grads, x, kernels::embed_axis(&g, axis, start, full));
                    }
                }
                Op::Permute { x, ref perm } => {
                    if needs(x) {
                        acc(&mut grads, x, kernels::permute(&g, &kernels::inverse_perm(perm)));
                    }
                }
                Op::Reshape { x } => {
                    if needs(x) {
                        acc(&mut grads, x, g.reshaped(val(x).shape()).unwrap());
                    }
                }
                Op::BilinearUp(x) => {
                    if needs(x) {
                        let (sh, sw) = (val(x).shape()[0], val(x).shape()[1]);
                        acc(&mut grads, x, kernels::bilinear_down_adjoint(&g, sh, sw));
                    }
                }
                Op::BilinearDown(x) => {
                    if needs(x) {
                        let (th, tw) = (val(x).shape()[0], val(x).shape()[1]);
                        acc(&mut grads, x, kernels::bilinear_up(&g, th, tw));
                    }
                }
            }
        }
        Ok(Gradients { grads })
    }

    /// Reverse sweep where every gradient is itself built from tape
    /// primitives, so the returned variables can be seeded into another
    /// backward pass. Does not consume the tape.
    pub fn backward_retaining(&self, seed: &Var) -> Result<VarGrads> {
        if !self.tape.same_tape(&seed.tape) {
            return Err(shape_err("backward", "seed lives on a different tape".into()));
        }
        {
            let inner = self.tape.inner.borrow();
            if inner.consumed {
                return Err(Error::TapeConsumed);
            }
            let out_shape = inner.nodes[self.id].value.shape();
            if seed.shape() != out_shape {
                return Err(Error::SeedShape {
                    seed: seed.shape().to_vec(),
                    output: out_shape.to_vec(),
                });
            }
        }
        let interesting = self.mark_ancestors();
        let mut grads: HashMap<usize, Var> = HashMap::new();
        if interesting[self.id] {
            grads.insert(self.id, seed.clone());
        }

        let var = |id: usize| Var { tape: self.tape.clone(), id };
        let needs = |id: usize| self.tape.inner.borrow().nodes[id].requires_grad;
        let acc = |grads: &mut HashMap<usize, Var>, id: usize, contrib: Var| {
            match grads.remove(&id) {
                Some(g) => grads.insert(id, g.add(&contrib).expect("vjp accumulate")),
                None => grads.insert(id, contrib),
            };
        };
        // Reduce a contribution for a scalar operand of a broadcasting op.
        let fit = |target: usize, contrib: Var| -> Var {
            let scalar_target = self.tape.inner.borrow().nodes[target].value.is_scalar();
            if scalar_target && !contrib.shape().is_empty() {
                contrib.sum_all()
            } else {
                contrib
            }
        };

        for id in (0..=self.id).rev() {
            if !interesting[id] {
                continue;
            }
            let g = match grads.get(&id) {
                Some(g) => g.clone(),
                None => continue,
            };
            let op = self.tape.inner.borrow().nodes[id].op.clone();
            match op {
                Op::Leaf | Op::ReluMask(_) | Op::ClampMask(_) | Op::MaxMask(_) => {}
                Op::Add(a, b) => {
                    if needs(a) {
                        let c = fit(a, g.clone());
                        acc(&mut grads, a, c);
                    }
                    if needs(b) {
                        let c = fit(b, g.clone());
                        acc(&mut grads, b, c);
                    }
                }
                Op::Sub(a, b) => {
                    if needs(a) {
                        let c = fit(a, g.clone());
                        acc(&mut grads, a, c);
                    }
                    if needs(b) {
                        let c = fit(b, g.mul_const(-1.0));
                        acc(&mut grads, b, c);
                    }
                }
                Op::Mul(a, b) => {
                    if needs(a) {
                        let c = fit(a, g.mul(&var(b)).expect("vjp mul"));
                        acc(&mut grads, a, c);
                    }
                    if needs(b) {
                        let c = fit(b, g.mul(&var(a)).expect("vjp mul"));
                        acc(&mut grads, b, c);
                    }
                }
                Op::Matmul(a, b) => {
                    if needs(a) {
                        let bt = var(b).permute(&[1, 0]).expect("vjp matmul");
                        acc(&mut grads, a, g.matmul(&bt).expect("vjp matmul"));
                    }
                    if needs(b) {
                        let at = var(a).permute(&[1, 0]).expect("vjp matmul");
                        acc(&mut grads, b, at.matmul(&g).expect("vjp matmul"));
                    }
                }
                Op::Conv2d { x, k, stride, pad } => {
                    let xs = var(x).shape();
                    let ks = var(k).shape();
                    if needs(x) {
                        let v = g.with_value(|gt| {
                            var(k).with_value(|kt| {
                                kernels::conv2d_input_grad(gt, kt, stride, pad, xs[1], xs[2])
                            })
                        });
                        let node = self.tape.push(
                            Op::Conv2dInputGrad { gy: g.id, k, stride, pad },
                            v,
                            true,
                        );
                        acc(&mut grads, x, node);
                    }
                    if needs(k) {
                        let v = g.with_value(|gt| {
                            var(x).with_value(|xt| {
                                kernels::conv2d_kernel_grad(xt, gt, stride, pad, ks[2], ks[3])
                            })
                        });
                        let node = self.tape.push(
                            Op::Conv2dKernelGrad { x, gy: g.id, stride, pad },
                            v,
                            true,
                        );
                        acc(&mut grads, k, node);
                    }
                }
                Op::Conv2dInputGrad { gy, k, stride, pad, .. } => {
                    let ks = var(k).shape();
                    if needs(gy) {
                        acc(&mut grads, gy, g.conv2d(&var(k), stride, pad).expect("vjp conv"));
                    }
                    if needs(k) {
                        let v = g.with_value(|gt| {
                            var(gy).with_value(|gyt| {
                                kernels::conv2d_kernel_grad(gt, gyt, stride, pad, ks[2], ks[3])
                            })
                        });
                        let node = self.tape.push(
                            Op::Conv2dKernelGrad { x: g.id, gy, stride, pad },
                            v,
                            true,
                        );
                        acc(&mut grads, k, node);
                    }
                }
                Op::Conv2dKernelGrad { x, gy, stride, pad, .. } => {
                    let xs = var(x).shape();
                    if needs(x) {
                        let v = g.with_value(|gt| {
                            var(gy).with_value(|gyt| {
                                kernels::conv2d_input_grad(gyt, gt, stride, pad, xs[1], xs[2])
                            })
                        });
                        let node = self.tape.push(
                            Op::Conv2dInputGrad { gy, k: g.id, stride, pad },
                            v,
                            true,
                        );
                        acc(&mut grads, x, node);
                    }
                    if needs(gy) {
                        acc(&mut grads, gy, var(x).conv2d(&g, stride, pad).expect("vjp conv"));
                    }
                }
                Op::Relu(x) => {
                    if needs(x) {
                        let m = var(x).relu_mask();
                        acc(&mut grads, x, g.mul(&m).expect("vjp relu"));
                    }
                }
                Op::Sigmoid(x) => {
                    if needs(x) {
                        let y = var(id);
                        let one_minus = y.mul_const(-1.0).add_const(1.0);
                        let d = y.mul(&one_minus).expect("vjp sigmoid");
                        acc(&mut grads, x, g.mul(&d).expect("vjp sigmoid"));
                    }
                }
                Op::Exp(x) => {
                    if needs(x) {
                        acc(&mut grads, x, g.mul(&var(id)).expect("vjp exp"));
                    }
                }
                Op::Log(x) => {
                    if needs(x) {
                        let inv = var(x).recip();
                        acc(&mut grads, x, g.mul(&inv).expect("vjp log"));
                    }
                }
                Op::Recip(x) => {
                    if needs(x) {
                        let y = var(id);
                        let yy = y.mul(&y).expect("vjp recip");
                        acc(&mut grads, x, g.mul(&yy).expect("vjp recip").mul_const(-1.0));
                    }
                }
                Op::Sqrt(x) => {
                    if needs(x) {
                        let half_inv = var(id).recip().mul_const(0.5);
                        acc(&mut grads, x, g.mul(&half_inv).expect("vjp sqrt"));
                    }
                }
                Op::Clamp { x, lo, hi } => {
                    if needs(x) {
                        let m = var(x).clamp_mask(lo, hi);
                        acc(&mut grads, x, g.mul(&m).expect("vjp clamp"));
                    }
                }
                Op::SumAxis { x, axis } => {
                    if needs(x) {
                        let n = var(x).shape()[axis];
                        acc(&mut grads, x, g.repeat_axis(axis, n).expect("vjp sum"));
                    }
                }
                Op::MaxAxis { x, axis } => {
                    if needs(x) {
                        let n = var(x).shape()[axis];
                        let rep = g.repeat_axis(axis, n).expect("vjp max");
                        let mask = var(x).max_mask(axis);
                        acc(&mut grads, x, rep.mul(&mask).expect("vjp max"));
                    }
                }
                Op::RepeatAxis { x, axis, .. } => {
                    if needs(x) {
                        acc(&mut grads, x, g.sum_axis(axis).expect("vjp repeat"));
                    }
                }
                Op::Concat { xs, axis } => {
                    let mut at = 0;
                    for xid in xs {
                        let len = var(xid).shape()[axis];
                        if needs(xid) {
                            let c = g.slice_axis(axis, at, len).expect("vjp concat");
                            acc(&mut grads, xid, c);
                        }
                        at += len;
                    }
                }
                Op::SliceAxis { x, axis, start, len } => {
                    if needs(x) {
                        let full = var(x).shape()[axis];
                        let mut parts = Vec::new();
                        if start > 0 {
                            let mut shape = g.shape();
                            shape[axis] = start;
                            parts.push(self.tape.constant(Tensor::zeros(&shape)));
                        }
                        parts.push(g.clone());
                        if start + len < full {
                            let mut shape = g.shape();
                            shape[axis] = full - start - len;
                            parts.push(self.tape.constant(Tensor::zeros(&shape)));
                        }
                        acc(&mut grads, x, Var::concat(&parts, axis).expect("vjp slice"));
                    }
                }
                Op::Permute { x, perm } => {
                    if needs(x) {
                        let inv = kernels::inverse_perm(&perm);
                        acc(&mut grads, x, g.permute(&inv).expect("vjp permute"));
                    }
                }
                Op::Reshape { x } => {
                    if needs(x) {
                        let shape = var(x).shape();
                        acc(&mut grads, x, g.reshape(&shape).expect("vjp reshape"));
                    }
                }
                Op::BilinearUp(x) => {
                    if needs(x) {
                        let s = var(x).shape();
                        acc(&mut grads, x, g.bilinear_down(s[0], s[1]));
                    }
                }
                Op::BilinearDown(x) => {
                    if needs(x) {
                        let s = var(x).shape();
                        acc(&mut grads, x, g.upsample_bilinear(s[0], s[1]).expect("vjp bilinear"));
                    }
                }
            }
        }
        Ok(VarGrads { map: grads })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn relu_matches_definition() {
        let tape = Tape::new();
        let x = tape.leaf(t(&[3], &[-1.0, 0.0, 2.0]));
        assert_eq!(x.relu().value().data(), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn square_gradient_at_three_is_six() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(3.0));
        let y = x.mul(&x).unwrap();
        let grads = y.backward(&Tensor::scalar(1.0)).unwrap();
        assert_eq!(grads.get(&x).unwrap().item(), 6.0);
    }

    #[test]
    fn sum_gradient_is_all_ones() {
        let tape = Tape::new();
        let x = tape.leaf(t(&[4], &[1.0, -2.0, 0.5, 9.0]));
        let y = x.sum_all();
        let grads = y.backward(&Tensor::scalar(1.0)).unwrap();
        assert_eq!(grads.get(&x).unwrap().data(), &[1.0, 1.0, 1.0, 1.0]);
    }

    #[test]
    fn sigmoid_gradient_at_zero_is_quarter() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(0.0));
        let y = x.sigmoid();
        let grads = y.backward(&Tensor::scalar(1.0)).unwrap();
        assert!((grads.get(&x).unwrap().item() - 0.25).abs() < 1e-15);
    }

    #[test]
    fn second_backward_on_consumed_tape_errors() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(2.0));
        let y = x.exp();
        y.backward(&Tensor::scalar(1.0)).unwrap();
        let err = y.backward(&Tensor::scalar(1.0)).unwrap_err();
        assert!(matches!(err, Error::TapeConsumed));
    }

    #[test]
    fn seed_shape_is_checked() {
        let tape = Tape::new();
        let x = tape.leaf(t(&[2], &[1.0, 2.0]));
        let y = x.relu();
        let err = y.backward(&Tensor::scalar(1.0)).unwrap_err();
        assert!(matches!(err, Error::SeedShape { .. }));
    }

    #[test]
    fn fanout_gradients_accumulate_additively() {
        // y = x*x + x*x: grad should be 4x.
        let tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(1.5));
        let a = x.mul(&x).unwrap();
        let b = x.mul(&x).unwrap();
        let y = a.add(&b).unwrap();
        let grads = y.backward(&Tensor::scalar(1.0)).unwrap();
        assert_eq!(grads.get(&x).unwrap().item(), 6.0);
    }

    #[test]
    fn shape_mismatch_names_the_primitive() {
        let tape = Tape::new();
        let a = tape.leaf(t(&[2], &[1.0, 2.0]));
        let b = tape.leaf(t(&[3], &[1.0, 2.0, 3.0]));
        let err = a.add(&b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("add"), "message was {msg}");
        assert!(msg.contains("[2]") && msg.contains("[3]"), "message was {msg}");
    }

    #[test]
    fn permute_then_inverse_is_identity_on_data_and_grads() {
        let tape = Tape::new();
        let x = tape.leaf(t(&[2, 3, 2], &(0..12).map(|v| v as f64).collect::<Vec<_>>()));
        let y = x.permute(&[2, 0, 1]).unwrap().permute(&[1, 2, 0]).unwrap();
        assert_eq!(y.value(), x.value());
        // Pick an asymmetric scalar readout so gradients are distinctive.
        let coeff = tape.constant(Tensor::from_fn(&[2, 3, 2], |i| (i[0] + 2 * i[1]) as f64));
        let loss = y.mul(&coeff).unwrap().sum_all();
        let grads = loss.backward(&Tensor::scalar(1.0)).unwrap();
        assert_eq!(grads.get(&x).unwrap(), &coeff.value());
    }

    #[test]
    fn matmul_with_identity_is_identity() {
        let tape = Tape::new();
        let eye = tape.constant(Tensor::from_fn(&[3, 3], |i| f64::from(i[0] == i[1])));
        let a = tape.leaf(t(&[3, 2], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let y = eye.matmul(&a).unwrap();
        assert_eq!(y.value(), a.value());
    }

    #[test]
    fn scalar_broadcast_add_and_mul() {
        let tape = Tape::new();
        let x = tape.leaf(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let c = tape.leaf(Tensor::scalar(10.0));
        let y = x.mul(&c).unwrap().add(&c).unwrap();
        assert_eq!(y.value().data(), &[20.0, 30.0, 40.0, 50.0]);
        let grads = y.backward(&Tensor::ones(&[2, 2])).unwrap();
        assert_eq!(grads.get(&x).unwrap().data(), &[10.0; 4]);
        // d/dc (sum of x*c + c) = sum(x) + 4
        assert_eq!(grads.get(&c).unwrap().item(), 14.0);
    }

    #[test]
    fn l2_normalize_returns_unit_norm() {
        let tape = Tape::new();
        let x = tape.leaf(t(&[3], &[3.0, 0.0, 4.0]));
        let y = x.l2_normalize();
        let norm: f64 = y.value().data().iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!((norm - 1.0).abs() < 1e-9);
    }

    #[test]
    fn backward_is_linear_across_summed_graphs() {
        // backward(f + g) == backward(f) + backward(g) at the same point
        let point = t(&[3], &[0.3, -0.7, 1.1]);

        let run = |combined: bool| -> Vec<f64> {
            let tape = Tape::new();
            let x = tape.leaf(point.clone());
            let f = x.sigmoid().sum_all();
            let g = x.mul(&x).unwrap().sum_all();
            let out = if combined { f.add(&g).unwrap() } else { f };
            let grads = out.backward(&Tensor::scalar(1.0)).unwrap();
            grads.get(&x).unwrap().data().to_vec()
        };

        let combined = run(true);
        // separate: f alone, then g alone on fresh tapes
        let tape = Tape::new();
        let x = tape.leaf(point.clone());
        let g = x.mul(&x).unwrap().sum_all();
        let g_grads = g.backward(&Tensor::scalar(1.0)).unwrap();
        let f_alone = run(false);
        for i in 0..3 {
            let separate = f_alone[i] + g_grads.get(&x).unwrap().data()[i];
            assert!((combined[i] - separate).abs() < 1e-12);
        }
    }

    #[test]
    fn retaining_backward_supports_second_derivatives() {
        // y = x^3, dy/dx = 3x^2, d2y/dx2 = 6x at x = 2 -> 12.
        let tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(2.0));
        let y = x.mul(&x).unwrap().mul(&x).unwrap();
        let seed = tape.scalar(1.0);
        let first = y.backward_retaining(&seed).unwrap();
        let dx = first.get(&x).unwrap().clone();
        assert!((dx.item() - 12.0).abs() < 1e-12);
        let second = dx.backward_retaining(&seed).unwrap();
        let d2 = second.get(&x).unwrap();
        assert!((d2.item() - 12.0).abs() < 1e-12);
        // and a third order: d3y/dx3 = 6
        let third = second.get(&x).unwrap().backward_retaining(&seed).unwrap();
        assert!((third.get(&x).unwrap().item() - 6.0).abs() < 1e-12);
    }

    #[test]
    fn retaining_backward_through_sigmoid_matches_closed_form() {
        // f = sigmoid(x); f'' = f(1-f)(1-2f).
        let x0 = 0.37;
        let tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(x0));
        let y = x.sigmoid();
        let seed = tape.scalar(1.0);
        let first = y.backward_retaining(&seed).unwrap();
        let d1 = first.get(&x).unwrap().clone();
        let second = d1.backward_retaining(&seed).unwrap();
        let d2 = second.get(&x).unwrap().item();
        let s = 1.0 / (1.0 + (-x0_f64()).exp());
        fn x0_f64() -> f64 {
            0.37
        }
        let want = s * (1.0 - s) * (1.0 - 2.0 * s);
        assert!((d2 - want).abs() < 1e-12, "got {d2}, want {want}");
    }

    #[test]
    fn zero_scaled_branch_leaves_no_trace() {
        // total = 1*f + 0*g must produce bitwise the same gradient as f alone.
        let point = t(&[4], &[0.2, -1.0, 0.55, 2.0]);
        let tape1 = Tape::new();
        let x1 = tape1.leaf(point.clone());
        let f1 = x1.sigmoid().sum_all();
        let g1 = x1.exp().sum_all();
        let total = f1.mul_const(1.0).add(&g1.mul_const(0.0)).unwrap();
        let grads1 = total.backward(&Tensor::scalar(1.0)).unwrap();

        let tape2 = Tape::new();
        let x2 = tape2.leaf(point);
        let f2 = x2.sigmoid().sum_all();
        let grads2 = f2.backward(&Tensor::scalar(1.0)).unwrap();

        let a = grads1.get(&x1).unwrap();
        let b = grads2.get(&x2).unwrap();
        for (x, y) in a.data().iter().zip(b.data()) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
    }
}
