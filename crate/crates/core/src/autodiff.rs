//! Reverse-mode automatic differentiation over an append-only expression graph.
//!
//! Every node stores its eagerly computed value. [`ExprGraph::grad`] walks the
//! graph backwards from a scalar. With `create_graph` set, every backward
//! rule is itself recorded as graph nodes built from the same primitive set,
//! so the returned gradients can be differentiated again. Without it, the
//! backward pass runs on plain tensors and leaves the graph untouched.
//!
//! Broadcasting is limited to rank-0 scalars combined with tensors.

use std::rc::Rc;

use crate::error::{Error, Result};
use crate::tensor::{Shape, Tensor};

/// Handle to a node of an [`ExprGraph`]. Only meaningful for the graph that
/// created it; the shape is looked up through [`ExprGraph::shape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct VarRef(usize);

impl VarRef {
    pub fn id(self) -> usize {
        self.0
    }
}

/// Primitive operation kinds accepted by [`ExprGraph::apply`].
#[derive(Clone, Debug, PartialEq)]
pub enum OpKind {
    MatMul,
    Add,
    Sub,
    Mul,
    Reshape(Vec<usize>),
    /// Axis permutation; `None` reverses the axes (plain matrix transpose).
    Transpose(Option<Vec<usize>>),
    /// Concatenate rank-1/rank-2 inputs along the given axis.
    Concat(usize),
    Sum,
    Mean,
    Square,
    Tanh,
    Sin,
    Relu,
    LnCosh,
    NormSq,
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Constant,
    MatMul(VarRef, VarRef),
    Add(VarRef, VarRef),
    Sub(VarRef, VarRef),
    Mul(VarRef, VarRef),
    Reshape(VarRef),
    Transpose(VarRef, Vec<usize>),
    Concat(Vec<VarRef>, usize),
    Sum(VarRef),
    Mean(VarRef),
    Square(VarRef),
    Tanh(VarRef),
    Sin(VarRef),
    Relu(VarRef),
    LnCosh(VarRef),
    NormSq(VarRef),
}

impl Op {
    fn parents(&self) -> Vec<VarRef> {
        match self {
            Op::Leaf | Op::Constant => Vec::new(),
            Op::MatMul(a, b) | Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => vec![*a, *b],
            Op::Concat(parts, _) => parts.clone(),
            Op::Reshape(a)
            | Op::Transpose(a, _)
            | Op::Sum(a)
            | Op::Mean(a)
            | Op::Square(a)
            | Op::Tanh(a)
            | Op::Sin(a)
            | Op::Relu(a)
            | Op::LnCosh(a)
            | Op::NormSq(a) => vec![*a],
        }
    }
}

struct Node {
    op: Op,
    value: Rc<Tensor>,
}

/// ln(cosh(x)) in the overflow-safe form |x| + ln((1 + e^{-2|x|}) / 2).
pub fn ln_cosh(x: f64) -> f64 {
    let a = x.abs();
    a + (-2.0 * a).exp().ln_1p() - std::f64::consts::LN_2
}

#[derive(Default)]
pub struct ExprGraph {
    nodes: Vec<Node>,
}

/// Gradients of a scalar with respect to a list of nodes.
///
/// Values are always present. When the gradient was requested with
/// `create_graph`, [`GradientMap::node`] also returns the graph node holding
/// each gradient so it can be differentiated again.
#[derive(Debug, Clone)]
pub struct GradientMap {
    wrt: Vec<VarRef>,
    values: Vec<Tensor>,
    nodes: Option<Vec<VarRef>>,
}

impl GradientMap {
    pub fn get(&self, v: VarRef) -> Option<&Tensor> {
        self.wrt.iter().position(|&w| w == v).map(|i| &self.values[i])
    }

    pub fn node(&self, v: VarRef) -> Option<VarRef> {
        let i = self.wrt.iter().position(|&w| w == v)?;
        self.nodes.as_ref().map(|n| n[i])
    }

    pub fn values(&self) -> &[Tensor] {
        &self.values
    }

    pub fn into_values(self) -> Vec<Tensor> {
        self.values
    }

    pub fn nodes(&self) -> Option<&[VarRef]> {
        self.nodes.as_deref()
    }
}

impl ExprGraph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Differentiable input.
    pub fn variable(&mut self, value: Tensor) -> VarRef {
        self.push_unchecked(Op::Leaf, value)
    }

    /// Input that gradients never flow into.
    pub fn constant(&mut self, value: Tensor) -> VarRef {
        self.push_unchecked(Op::Constant, value)
    }

    pub fn scalar(&mut self, value: f64) -> VarRef {
        self.constant(Tensor::scalar(value))
    }

    pub fn value(&self, v: VarRef) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: VarRef) -> &Shape {
        self.nodes[v.0].value.shape()
    }

    pub fn dims(&self, v: VarRef) -> &[usize] {
        self.nodes[v.0].value.dims()
    }

    fn push_unchecked(&mut self, op: Op, value: Tensor) -> VarRef {
        self.nodes.push(Node {
            op,
            value: Rc::new(value),
        });
        VarRef(self.nodes.len() - 1)
    }

    fn push(&mut self, op: Op, value: Tensor, name: &'static str) -> Result<VarRef> {
        if !value.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "{name} produced a non-finite value"
            )));
        }
        Ok(self.push_unchecked(op, value))
    }

    fn check(&self, v: VarRef) -> Result<()> {
        if v.0 < self.nodes.len() {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!(
                "node {} does not exist in this graph",
                v.0
            )))
        }
    }

    /// Append one primitive operation and compute its value.
    pub fn apply(&mut self, kind: OpKind, inputs: &[VarRef]) -> Result<VarRef> {
        for &v in inputs {
            self.check(v)?;
        }
        let expected = match &kind {
            OpKind::Concat(_) => None,
            OpKind::MatMul | OpKind::Add | OpKind::Sub | OpKind::Mul => Some(2),
            _ => Some(1),
        };
        if let Some(n) = expected {
            if inputs.len() != n {
                return Err(Error::InvalidArgument(format!(
                    "{kind:?} expects {n} inputs, got {}",
                    inputs.len()
                )));
            }
        }
        match kind {
            OpKind::MatMul => {
                let v = self.value(inputs[0]).matmul(self.value(inputs[1]))?;
                self.push(Op::MatMul(inputs[0], inputs[1]), v, "matmul")
            }
            OpKind::Add => {
                let v = self
                    .value(inputs[0])
                    .zip_broadcast(self.value(inputs[1]), "add", |a, b| a + b)?;
                self.push(Op::Add(inputs[0], inputs[1]), v, "add")
            }
            OpKind::Sub => {
                let v = self
                    .value(inputs[0])
                    .zip_broadcast(self.value(inputs[1]), "sub", |a, b| a - b)?;
                self.push(Op::Sub(inputs[0], inputs[1]), v, "sub")
            }
            OpKind::Mul => {
                let v = self
                    .value(inputs[0])
                    .zip_broadcast(self.value(inputs[1]), "mul", |a, b| a * b)?;
                self.push(Op::Mul(inputs[0], inputs[1]), v, "mul")
            }
            OpKind::Reshape(dims) => {
                let v = self.value(inputs[0]).reshape(&dims)?;
                Ok(self.push_unchecked(Op::Reshape(inputs[0]), v))
            }
            OpKind::Transpose(perm) => {
                let rank = self.shape(inputs[0]).rank();
                let perm = perm.unwrap_or_else(|| (0..rank).rev().collect());
                let v = self.value(inputs[0]).permute(&perm)?;
                Ok(self.push_unchecked(Op::Transpose(inputs[0], perm), v))
            }
            OpKind::Concat(axis) => {
                let parts: Vec<&Tensor> = inputs.iter().map(|&v| self.value(v)).collect();
                let v = Tensor::concat(&parts, axis)?;
                Ok(self.push_unchecked(Op::Concat(inputs.to_vec(), axis), v))
            }
            OpKind::Sum => {
                let v = Tensor::scalar(self.value(inputs[0]).sum());
                self.push(Op::Sum(inputs[0]), v, "sum")
            }
            OpKind::Mean => {
                let v = Tensor::scalar(self.value(inputs[0]).mean());
                self.push(Op::Mean(inputs[0]), v, "mean")
            }
            OpKind::Square => {
                let v = self.value(inputs[0]).map(|x| x * x);
                self.push(Op::Square(inputs[0]), v, "square")
            }
            OpKind::Tanh => {
                let v = self.value(inputs[0]).map(f64::tanh);
                Ok(self.push_unchecked(Op::Tanh(inputs[0]), v))
            }
            OpKind::Sin => {
                let v = self.value(inputs[0]).map(f64::sin);
                Ok(self.push_unchecked(Op::Sin(inputs[0]), v))
            }
            OpKind::Relu => {
                let v = self.value(inputs[0]).map(|x| x.max(0.0));
                Ok(self.push_unchecked(Op::Relu(inputs[0]), v))
            }
            OpKind::LnCosh => {
                let v = self.value(inputs[0]).map(ln_cosh);
                Ok(self.push_unchecked(Op::LnCosh(inputs[0]), v))
            }
            OpKind::NormSq => {
                let v = Tensor::scalar(self.value(inputs[0]).data().iter().map(|x| x * x).sum());
                self.push(Op::NormSq(inputs[0]), v, "norm_sq")
            }
        }
    }

    pub fn matmul(&mut self, a: VarRef, b: VarRef) -> Result<VarRef> {
        self.apply(OpKind::MatMul, &[a, b])
    }

    pub fn add(&mut self, a: VarRef, b: VarRef) -> Result<VarRef> {
        self.apply(OpKind::Add, &[a, b])
    }

    pub fn sub(&mut self, a: VarRef, b: VarRef) -> Result<VarRef> {
        self.apply(OpKind::Sub, &[a, b])
    }

    pub fn mul(&mut self, a: VarRef, b: VarRef) -> Result<VarRef> {
        self.apply(OpKind::Mul, &[a, b])
    }

    pub fn reshape(&mut self, a: VarRef, dims: &[usize]) -> Result<VarRef> {
        self.apply(OpKind::Reshape(dims.to_vec()), &[a])
    }

    pub fn transpose(&mut self, a: VarRef) -> Result<VarRef> {
        self.apply(OpKind::Transpose(None), &[a])
    }

    pub fn permute(&mut self, a: VarRef, perm: &[usize]) -> Result<VarRef> {
        self.apply(OpKind::Transpose(Some(perm.to_vec())), &[a])
    }

    pub fn concat(&mut self, parts: &[VarRef], axis: usize) -> Result<VarRef> {
        self.apply(OpKind::Concat(axis), parts)
    }

    pub fn sum(&mut self, a: VarRef) -> Result<VarRef> {
        self.apply(OpKind::Sum, &[a])
    }

    pub fn mean(&mut self, a: VarRef) -> Result<VarRef> {
        self.apply(OpKind::Mean, &[a])
    }

    pub fn square(&mut self, a: VarRef) -> Result<VarRef> {
        self.apply(OpKind::Square, &[a])
    }

    pub fn tanh(&mut self, a: VarRef) -> Result<VarRef> {
        self.apply(OpKind::Tanh, &[a])
    }

    pub fn sin(&mut self, a: VarRef) -> Result<VarRef> {
        self.apply(OpKind::Sin, &[a])
    }

    pub fn relu(&mut self, a: VarRef) -> Result<VarRef> {
        self.apply(OpKind::Relu, &[a])
    }

    pub fn ln_cosh(&mut self, a: VarRef) -> Result<VarRef> {
        self.apply(OpKind::LnCosh, &[a])
    }

    pub fn norm_sq(&mut self, a: VarRef) -> Result<VarRef> {
        self.apply(OpKind::NormSq, &[a])
    }

    /// `a * s` for a plain number `s`.
    pub fn scale(&mut self, a: VarRef, s: f64) -> Result<VarRef> {
        let c = self.scalar(s);
        self.mul(a, c)
    }

    /// Row sums of a rank-2 node, as a `rows x 1` column.
    pub fn row_sum(&mut self, a: VarRef) -> Result<VarRef> {
        let dims = self.dims(a).to_vec();
        if dims.len() != 2 {
            return Err(Error::ShapeMismatch {
                op: "row_sum",
                lhs: dims,
                rhs: vec![0, 0],
            });
        }
        let ones = self.constant(Tensor::ones(&[dims[1], 1])?);
        self.matmul(a, ones)
    }

    /// Reverse-mode gradient of the rank-0 node `scalar` with respect to `wrt`.
    ///
    /// Nodes in `wrt` that `scalar` does not depend on get a zero gradient.
    pub fn grad(&mut self, scalar: VarRef, wrt: &[VarRef], create_graph: bool) -> Result<GradientMap> {
        self.check(scalar)?;
        for &w in wrt {
            self.check(w)?;
        }
        if !self.shape(scalar).is_scalar() {
            return Err(Error::Contract(format!(
                "grad requires a rank-0 output, got shape {:?}",
                self.dims(scalar)
            )));
        }
        if create_graph {
            let mut backend = Recording { graph: self };
            let grads = backward(&mut backend, scalar, wrt)?;
            let values = grads.iter().map(|&v| self.value(v).clone()).collect();
            Ok(GradientMap {
                wrt: wrt.to_vec(),
                values,
                nodes: Some(grads),
            })
        } else {
            let mut backend = Eager { graph: self };
            let grads = backward(&mut backend, scalar, wrt)?;
            let values = grads
                .into_iter()
                .map(|g| Rc::try_unwrap(g).unwrap_or_else(|rc| (*rc).clone()))
                .collect();
            Ok(GradientMap {
                wrt: wrt.to_vec(),
                values,
                nodes: None,
            })
        }
    }
}

/// Arithmetic used by backward rules, implemented once on plain tensors and
/// once as recorded graph nodes.
trait Backend {
    type V: Clone;
    fn graph(&self) -> &ExprGraph;
    fn forward(&mut self, v: VarRef) -> Self::V;
    fn constant(&mut self, t: Tensor) -> Self::V;
    fn dims(&self, v: &Self::V) -> Vec<usize>;
    fn matmul(&mut self, a: &Self::V, b: &Self::V) -> Result<Self::V>;
    fn add(&mut self, a: &Self::V, b: &Self::V) -> Result<Self::V>;
    fn sub(&mut self, a: &Self::V, b: &Self::V) -> Result<Self::V>;
    fn mul(&mut self, a: &Self::V, b: &Self::V) -> Result<Self::V>;
    fn reshape(&mut self, a: &Self::V, dims: &[usize]) -> Result<Self::V>;
    fn permute(&mut self, a: &Self::V, perm: &[usize]) -> Result<Self::V>;
    fn sum(&mut self, a: &Self::V) -> Result<Self::V>;
    fn square(&mut self, a: &Self::V) -> Result<Self::V>;
    fn tanh(&mut self, a: &Self::V) -> Result<Self::V>;
    fn sin(&mut self, a: &Self::V) -> Result<Self::V>;

    fn transpose(&mut self, a: &Self::V) -> Result<Self::V> {
        let rank = self.dims(a).len();
        let perm: Vec<usize> = (0..rank).rev().collect();
        self.permute(a, &perm)
    }

    fn scalar(&mut self, s: f64) -> Self::V {
        self.constant(Tensor::scalar(s))
    }
}

struct Eager<'g> {
    graph: &'g ExprGraph,
}

impl Backend for Eager<'_> {
    type V = Rc<Tensor>;

    fn graph(&self) -> &ExprGraph {
        self.graph
    }
    fn forward(&mut self, v: VarRef) -> Self::V {
        Rc::clone(&self.graph.nodes[v.0].value)
    }
    fn constant(&mut self, t: Tensor) -> Self::V {
        Rc::new(t)
    }
    fn dims(&self, v: &Self::V) -> Vec<usize> {
        v.dims().to_vec()
    }
    fn matmul(&mut self, a: &Self::V, b: &Self::V) -> Result<Self::V> {
        Ok(Rc::new(a.matmul(b)?))
    }
    fn add(&mut self, a: &Self::V, b: &Self::V) -> Result<Self::V> {
        Ok(Rc::new(a.zip_broadcast(b, "add", |x, y| x + y)?))
    }
    fn sub(&mut self, a: &Self::V, b: &Self::V) -> Result<Self::V> {
        Ok(Rc::new(a.zip_broadcast(b, "sub", |x, y| x - y)?))
    }
    fn mul(&mut self, a: &Self::V, b: &Self::V) -> Result<Self::V> {
        Ok(Rc::new(a.zip_broadcast(b, "mul", |x, y| x * y)?))
    }
    fn reshape(&mut self, a: &Self::V, dims: &[usize]) -> Result<Self::V> {
        Ok(Rc::new(a.reshape(dims)?))
    }
    fn permute(&mut self, a: &Self::V, perm: &[usize]) -> Result<Self::V> {
        Ok(Rc::new(a.permute(perm)?))
    }
    fn sum(&mut self, a: &Self::V) -> Result<Self::V> {
        Ok(Rc::new(Tensor::scalar(a.sum())))
    }
    fn square(&mut self, a: &Self::V) -> Result<Self::V> {
        Ok(Rc::new(a.map(|x| x * x)))
    }
    fn tanh(&mut self, a: &Self::V) -> Result<Self::V> {
        Ok(Rc::new(a.map(f64::tanh)))
    }
    fn sin(&mut self, a: &Self::V) -> Result<Self::V> {
        Ok(Rc::new(a.map(f64::sin)))
    }
}

struct Recording<'g> {
    graph: &'g mut ExprGraph,
}

impl Backend for Recording<'_> {
    type V = VarRef;

    fn graph(&self) -> &ExprGraph {
        self.graph
    }
    fn forward(&mut self, v: VarRef) -> VarRef {
        v
    }
    fn constant(&mut self, t: Tensor) -> VarRef {
        self.graph.constant(t)
    }
    fn dims(&self, v: &VarRef) -> Vec<usize> {
        self.graph.dims(*v).to_vec()
    }
    fn matmul(&mut self, a: &VarRef, b: &VarRef) -> Result<VarRef> {
        self.graph.matmul(*a, *b)
    }
    fn add(&mut self, a: &VarRef, b: &VarRef) -> Result<VarRef> {
        self.graph.add(*a, *b)
    }
    fn sub(&mut self, a: &VarRef, b: &VarRef) -> Result<VarRef> {
        self.graph.sub(*a, *b)
    }
    fn mul(&mut self, a: &VarRef, b: &VarRef) -> Result<VarRef> {
        self.graph.mul(*a, *b)
    }
    fn reshape(&mut self, a: &VarRef, dims: &[usize]) -> Result<VarRef> {
        self.graph.reshape(*a, dims)
    }
    fn permute(&mut self, a: &VarRef, perm: &[usize]) -> Result<VarRef> {
        self.graph.permute(*a, perm)
    }
    fn sum(&mut self, a: &VarRef) -> Result<VarRef> {
        self.graph.sum(*a)
    }
    fn square(&mut self, a: &VarRef) -> Result<VarRef> {
        self.graph.square(*a)
    }
    fn tanh(&mut self, a: &VarRef) -> Result<VarRef> {
        self.graph.tanh(*a)
    }
    fn sin(&mut self, a: &VarRef) -> Result<VarRef> {
        self.graph.sin(*a)
    }
}

/// Sum `g` down to `target` dims when the forward op broadcast a scalar.
fn unbroadcast<B: Backend>(b: &mut B, g: &B::V, target: &[usize]) -> Result<B::V> {
    if target.is_empty() && !b.dims(g).is_empty() {
        b.sum(g)
    } else {
        Ok(g.clone())
    }
}

/// `rows x total` selection matrix picking columns `offset..offset+width`.
fn column_selector(total: usize, offset: usize, width: usize) -> Result<Tensor> {
    let mut s = Tensor::zeros(&[total, width])?;
    for j in 0..width {
        s.data_mut()[(offset + j) * width + j] = 1.0;
    }
    Ok(s)
}

fn concat_backward<B: Backend>(
    b: &mut B,
    g: &B::V,
    part_dims: &[Vec<usize>],
    axis: usize,
) -> Result<Vec<B::V>> {
    let total: usize = part_dims.iter().map(|d| d[axis]).sum();
    let rank1 = part_dims[0].len() == 1;
    let g2 = if rank1 {
        b.reshape(g, &[total, 1])?
    } else {
        g.clone()
    };
    let mut out = Vec::with_capacity(part_dims.len());
    let mut offset = 0;
    for dims in part_dims {
        let width = dims[axis];
        let sel = column_selector(total, offset, width)?;
        let piece = if axis == 1 {
            let s = b.constant(sel);
            b.matmul(&g2, &s)?
        } else {
            let s = b.constant(sel.transpose()?);
            b.matmul(&s, &g2)?
        };
        out.push(if rank1 { b.reshape(&piece, dims)? } else { piece });
        offset += width;
    }
    Ok(out)
}

fn backward<B: Backend>(b: &mut B, scalar: VarRef, wrt: &[VarRef]) -> Result<Vec<B::V>> {
    let n = scalar.0 + 1;
    // Nodes that depend on some `wrt` entry; only those receive gradients.
    let mut reaches = vec![false; n];
    for &w in wrt {
        if w.0 < n {
            reaches[w.0] = true;
        }
    }
    for i in 0..n {
        if !reaches[i] {
            reaches[i] = b.graph().nodes[i].op.parents().iter().any(|p| reaches[p.0]);
        }
    }
    let keep: Vec<bool> = (0..n).map(|i| wrt.iter().any(|w| w.0 == i)).collect();

    let mut grads: Vec<Option<B::V>> = vec![None; n];
    if reaches[scalar.0] {
        grads[scalar.0] = Some(b.constant(Tensor::scalar(1.0)));
    }

    for i in (0..n).rev() {
        if !reaches[i] {
            continue;
        }
        let g = if keep[i] {
            match &grads[i] {
                Some(g) => g.clone(),
                None => continue,
            }
        } else {
            match grads[i].take() {
                Some(g) => g,
                None => continue,
            }
        };
        let op = b.graph().nodes[i].op.clone();
        let mut contribute = |b: &mut B, p: VarRef, delta: B::V| -> Result<()> {
            if !reaches[p.0] {
                return Ok(());
            }
            grads[p.0] = Some(match grads[p.0].take() {
                Some(acc) => b.add(&acc, &delta)?,
                None => delta,
            });
            Ok(())
        };
        match op {
            Op::Leaf | Op::Constant => {}
            Op::MatMul(x, y) => {
                if reaches[x.0] {
                    let yv = b.forward(y);
                    let yt = b.transpose(&yv)?;
                    let d = b.matmul(&g, &yt)?;
                    contribute(b, x, d)?;
                }
                if reaches[y.0] {
                    let xv = b.forward(x);
                    let xt = b.transpose(&xv)?;
                    let d = b.matmul(&xt, &g)?;
                    contribute(b, y, d)?;
                }
            }
            Op::Add(x, y) | Op::Sub(x, y) => {
                let is_sub = matches!(op, Op::Sub(..));
                if reaches[x.0] {
                    let xd = b.graph().dims(x).to_vec();
                    let d = unbroadcast(b, &g, &xd)?;
                    contribute(b, x, d)?;
                }
                if reaches[y.0] {
                    let yd = b.graph().dims(y).to_vec();
                    let d = unbroadcast(b, &g, &yd)?;
                    let d = if is_sub {
                        let m = b.scalar(-1.0);
                        b.mul(&d, &m)?
                    } else {
                        d
                    };
                    contribute(b, y, d)?;
                }
            }
            Op::Mul(x, y) => {
                if reaches[x.0] {
                    let yv = b.forward(y);
                    let d = b.mul(&g, &yv)?;
                    let xd = b.graph().dims(x).to_vec();
                    let d = unbroadcast(b, &d, &xd)?;
                    contribute(b, x, d)?;
                }
                if reaches[y.0] {
                    let xv = b.forward(x);
                    let d = b.mul(&g, &xv)?;
                    let yd = b.graph().dims(y).to_vec();
                    let d = unbroadcast(b, &d, &yd)?;
                    contribute(b, y, d)?;
                }
            }
            Op::Reshape(x) => {
                let xd = b.graph().dims(x).to_vec();
                let d = b.reshape(&g, &xd)?;
                contribute(b, x, d)?;
            }
            Op::Transpose(x, perm) => {
                let mut inv = vec![0; perm.len()];
                for (k, &p) in perm.iter().enumerate() {
                    inv[p] = k;
                }
                let d = b.permute(&g, &inv)?;
                contribute(b, x, d)?;
            }
            Op::Concat(parts, axis) => {
                let part_dims: Vec<Vec<usize>> = parts.iter().map(|p| b.graph().dims(*p).to_vec()).collect();
                let pieces = concat_backward(b, &g, &part_dims, axis)?;
                for (p, d) in parts.into_iter().zip(pieces) {
                    contribute(b, p, d)?;
                }
            }
            Op::Sum(x) | Op::Mean(x) => {
                let xd = b.graph().dims(x).to_vec();
                let fill = if matches!(op, Op::Mean(_)) {
                    1.0 / xd.iter().product::<usize>() as f64
                } else {
                    1.0
                };
                let c = b.constant(Tensor::full(&xd, fill)?);
                let d = b.mul(&c, &g)?;
                contribute(b, x, d)?;
            }
            Op::Square(x) => {
                let xv = b.forward(x);
                let gx = b.mul(&g, &xv)?;
                let two = b.scalar(2.0);
                let d = b.mul(&gx, &two)?;
                contribute(b, x, d)?;
            }
            Op::NormSq(x) => {
                let xv = b.forward(x);
                let two = b.scalar(2.0);
                let g2 = b.mul(&g, &two)?;
                let d = b.mul(&xv, &g2)?;
                contribute(b, x, d)?;
            }
            Op::Tanh(x) => {
                let y = b.forward(VarRef(i));
                let y2 = b.square(&y)?;
                let one = b.scalar(1.0);
                let deriv = b.sub(&one, &y2)?;
                let d = b.mul(&g, &deriv)?;
                contribute(b, x, d)?;
            }
            Op::Sin(x) => {
                let xv = b.forward(x);
                let shift = b.scalar(std::f64::consts::FRAC_PI_2);
                let arg = b.add(&xv, &shift)?;
                let cos = b.sin(&arg)?;
                let d = b.mul(&g, &cos)?;
                contribute(b, x, d)?;
            }
            Op::Relu(x) => {
                let step = b.graph().value(x).map(|v| if v > 0.0 { 1.0 } else { 0.0 });
                let s = b.constant(step);
                let d = b.mul(&g, &s)?;
                contribute(b, x, d)?;
            }
            Op::LnCosh(x) => {
                let xv = b.forward(x);
                let t = b.tanh(&xv)?;
                let d = b.mul(&g, &t)?;
                contribute(b, x, d)?;
            }
        }
    }

    wrt.iter()
        .map(|&w| match grads.get(w.0).and_then(|g| g.clone()) {
            Some(g) => Ok(g),
            None => {
                let dims = b.graph().dims(w).to_vec();
                let z = if dims.is_empty() {
                    Tensor::scalar(0.0)
                } else {
                    Tensor::zeros(&dims)?
                };
                Ok(b.constant(z))
            }
        })
        .collect()
}
