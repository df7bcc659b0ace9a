//! Tape-based reverse-mode differentiation over the kernel set in
//! [`tensor`](super::tensor).
//!
//! A [`Var`] is a tensor value plus, when it was produced by a recording
//! [`Tape`], the id of its node. Values built from constants only never touch
//! a tape, so the same composed function serves plain evaluation and
//! differentiation.

use std::cell::RefCell;
use std::rc::Rc;
use std::sync::Arc;

use super::tensor::{BinaryOp, ReduceOp, Tensor, UnaryOp};
use crate::error::{Error, Result};
use crate::scalar::Real;

enum Op<T> {
    Leaf,
    MatMul { a: Tensor<T>, b: Tensor<T>, ta: bool, tb: bool },
    Binary { op: BinaryOp, a: Tensor<T>, b: Tensor<T> },
    Unary { op: UnaryOp, x: Tensor<T>, y: Tensor<T> },
    Reduce { op: ReduceOp, axis: usize, x: Tensor<T>, y: Tensor<T> },
    Reshape { from: Vec<usize> },
    Permute { perm: Vec<usize> },
    GatherRows { rows: Arc<Vec<usize>>, from: Vec<usize> },
    Concat { left: usize, right: usize },
    Slice { start: usize, full: usize },
    RowKron { x: Tensor<T> },
    Conv { x: Tensor<T>, w: Tensor<T> },
    LayerNorm { xhat: Tensor<T>, rstd: Tensor<T>, gamma: Tensor<T> },
    Gelu { x: Tensor<T> },
}

struct Node<T> {
    op: Op<T>,
    inputs: Vec<Option<usize>>,
    shape: Vec<usize>,
}

struct TapeInner<T> {
    nodes: Vec<Node<T>>,
    generation: u64,
}

/// Append-only operation record. Single-threaded; use one tape per session.
pub struct Tape<T> {
    inner: Rc<RefCell<TapeInner<T>>>,
}

impl<T> Clone for Tape<T> {
    fn clone(&self) -> Self {
        Tape { inner: Rc::clone(&self.inner) }
    }
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

#[derive(Clone)]
struct NodeRef<T> {
    tape: Tape<T>,
    id: usize,
    generation: u64,
}

/// A tensor value, optionally tracked by a tape.
#[derive(Clone)]
pub struct Var<T> {
    value: Tensor<T>,
    node: Option<NodeRef<T>>,
}

impl<T: Real> std::fmt::Debug for Var<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Var")
            .field("value", &self.value)
            .field("node", &self.node.as_ref().map(|n| n.id))
            .finish()
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Tape {
            inner: Rc::new(RefCell::new(TapeInner { nodes: Vec::new(), generation: 0 })),
        }
    }

    /// Registers a differentiable input.
    pub fn leaf(&self, value: Tensor<T>) -> Var<T> {
        let shape = value.shape().to_vec();
        let node = self.push(Op::Leaf, vec![], shape);
        Var { value, node: Some(node) }
    }

    pub fn len(&self) -> usize {
        self.inner.borrow().nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Drops every recorded node. Vars recorded before the reset become stale
    /// and are rejected by later operations and by `backward`.
    pub fn reset(&self) {
        let mut inner = self.inner.borrow_mut();
        inner.nodes.clear();
        inner.generation += 1;
    }

    fn push(&self, op: Op<T>, inputs: Vec<Option<usize>>, shape: Vec<usize>) -> NodeRef<T> {
        let mut inner = self.inner.borrow_mut();
        debug_assert!(inputs.iter().flatten().all(|&i| i < inner.nodes.len()));
        inner.nodes.push(Node { op, inputs, shape });
        NodeRef {
            tape: self.clone(),
            id: inner.nodes.len() - 1,
            generation: inner.generation,
        }
    }

    fn same(&self, other: &Tape<T>) -> bool {
        Rc::ptr_eq(&self.inner, &other.inner)
    }
}

/// Gradients produced by [`Var::backward`].
pub struct Gradients<T> {
    tape: Tape<T>,
    generation: u64,
    grads: Vec<Option<Tensor<T>>>,
    shapes: Vec<Vec<usize>>,
}

impl<T: Real> Gradients<T> {
    /// Gradient with respect to a recorded var. Leaves that did not influence
    /// the output get zeros.
    pub fn wrt(&self, v: &Var<T>) -> Result<Tensor<T>> {
        let node = v
            .node
            .as_ref()
            .ok_or_else(|| Error::Tape("gradient requested for an unrecorded tensor".into()))?;
        if !node.tape.same(&self.tape) || node.generation != self.generation {
            return Err(Error::Tape("var belongs to a different tape or epoch".into()));
        }
        match &self.grads[node.id] {
            Some(g) => Ok(g.clone()),
            None => Tensor::zeros(&self.shapes[node.id]),
        }
    }
}

fn accumulate<T: Real>(slot: &mut Option<Tensor<T>>, g: Tensor<T>) -> Result<()> {
    *slot = Some(match slot.take() {
        None => g,
        Some(prev) => prev.add(&g)?,
    });
    Ok(())
}

impl<T: Real> Var<T> {
    /// Untracked value.
    pub fn constant(value: Tensor<T>) -> Self {
        Var { value, node: None }
    }

    pub fn value(&self) -> &Tensor<T> {
        &self.value
    }

    pub fn into_value(self) -> Tensor<T> {
        self.value
    }

    pub fn shape(&self) -> &[usize] {
        self.value.shape()
    }

    pub fn is_tracked(&self) -> bool {
        self.node.is_some()
    }

    fn record(inputs: &[&Var<T>], value: Tensor<T>, op: impl FnOnce() -> Op<T>) -> Result<Self> {
        let mut tape: Option<&Tape<T>> = None;
        for v in inputs {
            if let Some(n) = &v.node {
                match tape {
                    None => tape = Some(&n.tape),
                    Some(t) if !t.same(&n.tape) => {
                        return Err(Error::Tape("operands recorded on different tapes".into()))
                    }
                    _ => {}
                }
                if n.generation != n.tape.inner.borrow().generation {
                    return Err(Error::Tape("operand recorded before tape reset".into()));
                }
            }
        }
        let Some(tape) = tape else {
            return Ok(Var::constant(value));
        };
        let ids = inputs.iter().map(|v| v.node.as_ref().map(|n| n.id)).collect();
        let node = tape.push(op(), ids, value.shape().to_vec());
        Ok(Var { value, node: Some(node) })
    }

    // ---- primitives --------------------------------------------------

    pub fn matmul_t(&self, b: &Var<T>, ta: bool, tb: bool) -> Result<Self> {
        let y = self.value.matmul_t(&b.value, ta, tb)?;
        Self::record(&[self, b], y, || Op::MatMul {
            a: self.value.clone(),
            b: b.value.clone(),
            ta,
            tb,
        })
    }

    pub fn matmul(&self, b: &Var<T>) -> Result<Self> {
        self.matmul_t(b, false, false)
    }

    pub fn binary(&self, op: BinaryOp, b: &Var<T>) -> Result<Self> {
        let y = self.value.binary(op, &b.value)?;
        Self::record(&[self, b], y, || Op::Binary { op, a: self.value.clone(), b: b.value.clone() })
    }

    pub fn add(&self, b: &Var<T>) -> Result<Self> {
        self.binary(BinaryOp::Add, b)
    }

    pub fn sub(&self, b: &Var<T>) -> Result<Self> {
        self.binary(BinaryOp::Sub, b)
    }

    pub fn mul(&self, b: &Var<T>) -> Result<Self> {
        self.binary(BinaryOp::Mul, b)
    }

    pub fn div(&self, b: &Var<T>) -> Result<Self> {
        self.binary(BinaryOp::Div, b)
    }

    pub fn unary(&self, op: UnaryOp) -> Result<Self> {
        let y = self.value.unary(op);
        let keep_y = matches!(op, UnaryOp::Exp);
        Self::record(&[self], y.clone(), || Op::Unary {
            op,
            x: self.value.clone(),
            y: if keep_y { y } else { self.value.clone() },
        })
    }

    pub fn square(&self) -> Result<Self> {
        self.unary(UnaryOp::Square)
    }

    pub fn scale(&self, c: f64) -> Result<Self> {
        self.unary(UnaryOp::Scale(c))
    }

    pub fn add_scalar(&self, c: f64) -> Result<Self> {
        self.unary(UnaryOp::AddScalar(c))
    }

    pub fn exp(&self) -> Result<Self> {
        self.unary(UnaryOp::Exp)
    }

    pub fn abs(&self) -> Result<Self> {
        self.unary(UnaryOp::Abs)
    }

    pub fn reduce(&self, op: ReduceOp, axis: usize, keepdim: bool) -> Result<Self> {
        let y = self.value.reduce(op, axis, keepdim)?;
        let keep = y.reshape(&super::tensor::reduced_shape(self.shape(), axis, true))?;
        Self::record(&[self], y, || Op::Reduce { op, axis, x: self.value.clone(), y: keep })
    }

    pub fn sum(&self, axis: usize, keepdim: bool) -> Result<Self> {
        self.reduce(ReduceOp::Sum, axis, keepdim)
    }

    pub fn mean(&self, axis: usize, keepdim: bool) -> Result<Self> {
        self.reduce(ReduceOp::Mean, axis, keepdim)
    }

    pub fn max(&self, axis: usize, keepdim: bool) -> Result<Self> {
        self.reduce(ReduceOp::Max, axis, keepdim)
    }

    /// Sum of every element, as a `[1]` tensor.
    pub fn sum_all(&self) -> Result<Self> {
        self.reshape(&[self.value.numel()])?.sum(0, false)
    }

    pub fn mean_all(&self) -> Result<Self> {
        self.reshape(&[self.value.numel()])?.mean(0, false)
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        let y = self.value.reshape(shape)?;
        Self::record(&[self], y, || Op::Reshape { from: self.shape().to_vec() })
    }

    pub fn permute(&self, perm: &[usize]) -> Result<Self> {
        let y = self.value.permute(perm)?;
        Self::record(&[self], y, || Op::Permute { perm: perm.to_vec() })
    }

    pub fn transpose(&self) -> Result<Self> {
        let rank = self.value.rank();
        if rank < 2 {
            return Err(Error::invalid_shape("transpose", self.shape(), "rank must be at least 2"));
        }
        let mut perm: Vec<usize> = (0..rank).collect();
        perm.swap(rank - 2, rank - 1);
        self.permute(&perm)
    }

    pub fn gather_rows(&self, rows: Arc<Vec<usize>>, out_shape: &[usize]) -> Result<Self> {
        let y = self.value.gather_rows(&rows, out_shape)?;
        Self::record(&[self], y, || Op::GatherRows { rows, from: self.shape().to_vec() })
    }

    pub fn concat_last(&self, other: &Var<T>) -> Result<Self> {
        let y = self.value.concat_last(&other.value)?;
        Self::record(&[self, other], y, || Op::Concat {
            left: self.value.last_dim(),
            right: other.value.last_dim(),
        })
    }

    pub fn slice_last(&self, start: usize, len: usize) -> Result<Self> {
        let y = self.value.slice_last(start, len)?;
        Self::record(&[self], y, || Op::Slice { start, full: self.value.last_dim() })
    }

    pub fn row_kron(&self) -> Result<Self> {
        let y = self.value.row_kron();
        Self::record(&[self], y, || Op::RowKron { x: self.value.clone() })
    }

    pub fn conv2d_3x3(&self, w: &Var<T>, bias: Option<&Var<T>>) -> Result<Self> {
        let y = self.value.conv2d_3x3(&w.value, bias.map(|b| &b.value))?;
        let op = || Op::Conv { x: self.value.clone(), w: w.value.clone() };
        match bias {
            Some(b) => Self::record(&[self, w, b], y, op),
            None => Self::record(&[self, w], y, op),
        }
    }

    pub fn pixel_shuffle(&self, s: usize) -> Result<Self> {
        let (b, h, w, cs) = super::tensor::dims4("pixel_shuffle", self.shape())?;
        if s == 0 || cs % (s * s) != 0 {
            return Err(Error::invalid_shape(
                "pixel_shuffle",
                self.shape(),
                format!("channels not divisible by {s}^2"),
            ));
        }
        let c = cs / (s * s);
        self.reshape(&[b, h, w, c, s, s])?
            .permute(&[0, 1, 4, 2, 5, 3])?
            .reshape(&[b, h * s, w * s, c])
    }

    pub fn layer_norm(&self, gamma: &Var<T>, beta: &Var<T>, eps: f64) -> Result<Self> {
        let (y, xhat, rstd) = self.value.layer_norm_parts(&gamma.value, &beta.value, eps)?;
        Self::record(&[self, gamma, beta], y, || Op::LayerNorm {
            xhat,
            rstd,
            gamma: gamma.value.clone(),
        })
    }

    pub fn gelu(&self) -> Result<Self> {
        let y = self.value.gelu();
        Self::record(&[self], y, || Op::Gelu { x: self.value.clone() })
    }

    // ---- reverse pass ------------------------------------------------

    /// Backpropagates from a single-element output (seed 1).
    pub fn backward(&self) -> Result<Gradients<T>> {
        if self.value.numel() != 1 {
            return Err(Error::Tape(format!(
                "backward without a seed needs a scalar output, got shape {:?}",
                self.shape()
            )));
        }
        self.backward_with_seed(Tensor::ones(self.shape())?)
    }

    /// Backpropagates a caller-supplied seed gradient of the output's shape.
    pub fn backward_with_seed(&self, seed: Tensor<T>) -> Result<Gradients<T>> {
        let node = self
            .node
            .as_ref()
            .ok_or_else(|| Error::Tape("backward called on an unrecorded tensor".into()))?;
        if seed.shape() != self.shape() {
            return Err(Error::shape("backward seed", seed.shape(), self.shape()));
        }
        let inner = node.tape.inner.borrow();
        if node.generation != inner.generation {
            return Err(Error::Tape("output recorded before tape reset".into()));
        }
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; inner.nodes.len()];
        grads[node.id] = Some(seed);
        for id in (0..=node.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let n = &inner.nodes[id];
            if let Op::Leaf = n.op {
                grads[id] = Some(g);
                continue;
            }
            let needs: Vec<bool> = n.inputs.iter().map(Option::is_some).collect();
            let input_grads = vjp(&n.op, &g, &needs)?;
            for (slot, ig) in n.inputs.iter().zip(input_grads) {
                if let (Some(i), Some(ig)) = (slot, ig) {
                    accumulate(&mut grads[*i], ig)?;
                }
            }
        }
        let shapes = inner.nodes.iter().map(|n| n.shape.clone()).collect();
        Ok(Gradients {
            tape: node.tape.clone(),
            generation: node.generation,
            grads,
            shapes,
        })
    }
}

/// Vector-Jacobian products for one node. Returns one optional gradient per input.
fn vjp<T: Real>(op: &Op<T>, g: &Tensor<T>, needs: &[bool]) -> Result<Vec<Option<Tensor<T>>>> {
    let want = |i: usize| needs.get(i).copied().unwrap_or(false);
    Ok(match op {
        Op::Leaf => vec![],
        Op::MatMul { a, b, ta, tb } => {
            // C = op(A) op(B)
            let ga = if want(0) {
                Some(match (ta, tb) {
                    (false, false) => g.matmul_t(b, false, true)?,
                    (false, true) => g.matmul_t(b, false, false)?,
                    (true, false) => b.matmul_t(g, false, true)?,
                    (true, true) => b.matmul_t(g, true, true)?,
                })
            } else {
                None
            };
            let gb = if want(1) {
                Some(match (ta, tb) {
                    (false, false) => a.matmul_t(g, true, false)?,
                    (false, true) => g.matmul_t(a, true, false)?,
                    (true, false) => a.matmul_t(g, false, false)?,
                    (true, true) => g.matmul_t(a, true, true)?,
                })
            } else {
                None
            };
            vec![ga, gb]
        }
        Op::Binary { op, a, b } => {
            let bshape = b.shape();
            let (ga, gb) = match op {
                BinaryOp::Add => (
                    want(0).then(|| g.clone()),
                    if want(1) { Some(g.sum_to_shape(bshape)?) } else { None },
                ),
                BinaryOp::Sub => (
                    want(0).then(|| g.clone()),
                    if want(1) { Some(g.sum_to_shape(bshape)?.scale(-1.0)) } else { None },
                ),
                BinaryOp::Mul => (
                    if want(0) { Some(g.mul(b)?) } else { None },
                    if want(1) { Some(g.mul(a)?.sum_to_shape(bshape)?) } else { None },
                ),
                BinaryOp::Div => (
                    if want(0) { Some(g.div(b)?) } else { None },
                    if want(1) {
                        Some(g.mul(a)?.div(&b.square())?.sum_to_shape(bshape)?.scale(-1.0))
                    } else {
                        None
                    },
                ),
            };
            vec![ga, gb]
        }
        Op::Unary { op, x, y } => {
            let gx = match op {
                UnaryOp::Square => g.mul(x)?.scale(2.0),
                UnaryOp::Scale(c) => g.scale(*c),
                UnaryOp::AddScalar(_) => g.clone(),
                UnaryOp::Exp => g.mul(y)?,
                UnaryOp::Abs => g.mul(&x.map(|v| if v > T::zero() {
                    T::one()
                } else if v < T::zero() {
                    -T::one()
                } else {
                    T::zero()
                }))?,
            };
            vec![Some(gx)]
        }
        Op::Reduce { op, axis, x, y } => {
            let keep_shape = y.shape();
            let gk = g.reshape(keep_shape)?;
            let gx = match op {
                ReduceOp::Sum => gk.expand_axis(x.shape(), *axis),
                ReduceOp::Mean => gk
                    .expand_axis(x.shape(), *axis)
                    .scale(1.0 / x.shape()[*axis] as f64),
                ReduceOp::Max => max_backward(x, y, &gk, *axis),
            };
            vec![Some(gx)]
        }
        Op::Reshape { from } => vec![Some(g.reshape(from)?)],
        Op::Permute { perm } => {
            let mut inv = vec![0; perm.len()];
            for (i, &p) in perm.iter().enumerate() {
                inv[p] = i;
            }
            vec![Some(g.permute(&inv)?)]
        }
        Op::GatherRows { rows, from } => vec![Some(g.scatter_add_rows(rows, from)?)],
        Op::Concat { left, right } => vec![
            if want(0) { Some(g.slice_last(0, *left)?) } else { None },
            if want(1) { Some(g.slice_last(*left, *right)?) } else { None },
        ],
        Op::Slice { start, full } => {
            let len = g.last_dim();
            let mut out = Vec::with_capacity(g.rows() * full);
            for row in g.data().chunks_exact(len) {
                out.extend(std::iter::repeat_n(T::zero(), *start));
                out.extend_from_slice(row);
                out.extend(std::iter::repeat_n(T::zero(), full - start - len));
            }
            let mut shape = g.shape().to_vec();
            *shape.last_mut().unwrap() = *full;
            vec![Some(Tensor::from_vec(&shape, out)?)]
        }
        Op::RowKron { x } => {
            let d = x.last_dim();
            let mut out = Vec::with_capacity(x.numel());
            for (row, grow) in x.data().chunks_exact(d).zip(g.data().chunks_exact(d * d)) {
                for a in 0..d {
                    let mut acc = T::zero();
                    for b in 0..d {
                        acc = acc + (grow[a * d + b] + grow[b * d + a]) * row[b];
                    }
                    out.push(acc);
                }
            }
            vec![Some(Tensor::from_vec(x.shape(), out)?)]
        }
        Op::Conv { x, w } => {
            let (dx, dw, db) = x.conv2d_3x3_backward(w, g);
            vec![want(0).then_some(dx), want(1).then_some(dw), want(2).then_some(db)]
        }
        Op::LayerNorm { xhat, rstd, gamma } => {
            let c = xhat.last_dim();
            let n = T::from_usize(c).unwrap();
            let gd = g.data();
            let xh = xhat.data();
            let gm = gamma.data();
            let mut dx = Vec::with_capacity(xhat.numel());
            let mut dgamma = vec![T::zero(); c];
            let mut dbeta = vec![T::zero(); c];
            for (r, &rs) in rstd.data().iter().enumerate() {
                let grow = &gd[r * c..(r + 1) * c];
                let xrow = &xh[r * c..(r + 1) * c];
                let mut mean_dxh = T::zero();
                let mut mean_dxh_xh = T::zero();
                for k in 0..c {
                    let dxh = grow[k] * gm[k];
                    mean_dxh = mean_dxh + dxh;
                    mean_dxh_xh = mean_dxh_xh + dxh * xrow[k];
                    dgamma[k] = dgamma[k] + grow[k] * xrow[k];
                    dbeta[k] = dbeta[k] + grow[k];
                }
                mean_dxh = mean_dxh / n;
                mean_dxh_xh = mean_dxh_xh / n;
                for k in 0..c {
                    let dxh = grow[k] * gm[k];
                    dx.push(rs * (dxh - mean_dxh - xrow[k] * mean_dxh_xh));
                }
            }
            vec![
                Some(Tensor::from_vec(xhat.shape(), dx)?),
                want(1).then(|| Tensor::from_vec(&[c], dgamma)).transpose()?,
                want(2).then(|| Tensor::from_vec(&[c], dbeta)).transpose()?,
            ]
        }
        Op::Gelu { x } => vec![Some(g.mul(&x.gelu_grad())?)],
    })
}

/// Routes the gradient to the first maximal element along `axis`.
fn max_backward<T: Real>(x: &Tensor<T>, y_keep: &Tensor<T>, g_keep: &Tensor<T>, axis: usize) -> Tensor<T> {
    let shape = x.shape();
    let outer: usize = shape[..axis].iter().product();
    let len = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    let (xd, yd, gd) = (x.data(), y_keep.data(), g_keep.data());
    let mut out = vec![T::zero(); x.numel()];
    for o in 0..outer {
        for i in 0..inner {
            let target = yd[o * inner + i];
            for k in 0..len {
                let idx = (o * len + k) * inner + i;
                if xd[idx] == target {
                    out[idx] = gd[o * inner + i];
                    break;
                }
            }
        }
    }
    Tensor::from_vec(shape, out).unwrap()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::from_vec(shape, v.to_vec()).unwrap()
    }

    #[test]
    fn sum_of_squares() {
        let tape = Tape::new();
        let x = tape.leaf(t(&[3], &[1., 2., 3.]));
        let f = x.square().unwrap().sum_all().unwrap();
        let g = f.backward().unwrap();
        assert_eq!(g.wrt(&x).unwrap().data(), &[2., 4., 6.]);
    }

    #[test]
    fn constant_graph_gives_zero_gradients() {
        let tape = Tape::new();
        let x = tape.leaf(t(&[2], &[1., 2.]));
        let c = Var::constant(t(&[2], &[5., 6.]));
        let y = c.square().unwrap().sum_all().unwrap();
        assert!(!y.is_tracked());
        // output depends only on constants: not recorded, so backward errors
        assert!(y.backward().is_err());
        // a tracked output not touching x gives x zeros
        let z = tape.leaf(t(&[1], &[3.]));
        let out = z.scale(2.0).unwrap();
        let g = out.backward().unwrap();
        assert_eq!(g.wrt(&x).unwrap().data(), &[0., 0.]);
    }

    #[test]
    fn backward_on_unrecorded_errors() {
        let v = Var::constant(t(&[1], &[1.]));
        assert!(matches!(v.backward(), Err(Error::Tape(_))));
    }

    #[test]
    fn non_scalar_needs_seed() {
        let tape = Tape::new();
        let x = tape.leaf(t(&[2], &[1., 2.]));
        let y = x.scale(3.0).unwrap();
        assert!(y.backward().is_err());
        let g = y.backward_with_seed(t(&[2], &[1., -1.])).unwrap();
        assert_eq!(g.wrt(&x).unwrap().data(), &[3., -3.]);
    }

    #[test]
    fn reset_invalidates_old_vars() {
        let tape = Tape::new();
        let x = tape.leaf(t(&[1], &[1.]));
        tape.reset();
        assert!(tape.is_empty());
        assert!(x.scale(2.0).is_err());
    }

    #[test]
    fn mixing_tapes_is_rejected() {
        let (t1, t2) = (Tape::new(), Tape::new());
        let a = t1.leaf(t(&[1], &[1.]));
        let b = t2.leaf(t(&[1], &[1.]));
        assert!(a.add(&b).is_err());
    }

    #[test]
    fn fan_out_accumulates() {
        let tape = Tape::new();
        let x = tape.leaf(t(&[2], &[1., -2.]));
        let y = x.mul(&x).unwrap().add(&x).unwrap().sum_all().unwrap();
        let g = y.backward().unwrap().wrt(&x).unwrap();
        assert_eq!(g.data(), &[3., -3.]);
    }
}
