//! Eager computation graph with a differentiable gradient operator.
//!
//! Every operation evaluates its value immediately and records the op and its
//! parents. [`Graph::grad`] walks the recorded graph in reverse topological
//! order and builds the adjoints out of ordinary graph operations, so the
//! gradient nodes it returns can themselves be differentiated again.

use std::cell::RefCell;
use std::rc::Rc;

use ndarray::{ArrayD, Axis, Ix2, IxDyn, Slice};

use super::tensor::{broadcast_shapes, sum_to, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
enum Op {
    Leaf,
    Constant,
    Add,
    Sub,
    Mul,
    Div,
    Neg,
    Scale(f64),
    Offset(f64),
    MatMul,
    Transpose,
    Exp,
    Log,
    Sigmoid,
    Softplus,
    Tanh,
    Square,
    SumAll,
    SumAxis(usize),
    BroadcastTo(Vec<usize>),
    SumTo(Vec<usize>),
    Reshape(Vec<usize>),
    Concat(usize),
    Slice { axis: usize, start: usize, end: usize },
}

struct Node {
    value: Rc<Tensor>,
    op: Op,
    parents: Vec<usize>,
    requires_grad: bool,
}

/// Arena of nodes. Nodes are only ever appended, so insertion order is a
/// topological order.
#[derive(Default)]
pub struct Graph {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy)]
pub struct Var<'g> {
    id: usize,
    graph: &'g Graph,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Var")
            .field("id", &self.id)
            .field("value", &*self.value())
            .finish()
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor, op: Op, parents: Vec<usize>) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        let requires_grad = match op {
            Op::Leaf => true,
            Op::Constant => false,
            _ => parents.iter().any(|&p| nodes[p].requires_grad),
        };
        let id = nodes.len();
        nodes.push(Node {
            value: Rc::new(value),
            op,
            parents,
            requires_grad,
        });
        Var { id, graph: self }
    }

    /// A differentiable input (parameter or latent variable).
    pub fn leaf(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, Vec::new())
    }

    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Constant, Vec::new())
    }

    pub fn scalar(&self, value: f64) -> Var<'_> {
        self.constant(Tensor::scalar(value))
    }

    pub fn zeros(&self, shape: &[usize]) -> Var<'_> {
        self.constant(Tensor::zeros(shape))
    }

    /// Value of a node. Values are computed once, when the node is created.
    pub fn eval(&self, var: Var<'_>) -> Tensor {
        (*var.value()).clone()
    }

    fn value_of(&self, id: usize) -> Rc<Tensor> {
        Rc::clone(&self.nodes.borrow()[id].value)
    }

    pub fn concat(&self, parts: &[Var<'_>], axis: usize) -> Result<Var<'_>> {
        let first = parts.first().ok_or(Error::Argument("concat of zero tensors".into()))?;
        let values: Vec<Rc<Tensor>> = parts.iter().map(|p| p.value()).collect();
        let base = first.shape();
        if axis >= base.len() {
            return Err(Error::Shape {
                op: "concat",
                lhs: base,
                rhs: vec![axis],
            });
        }
        for v in &values {
            let s = v.shape();
            let ok = s.len() == base.len()
                && s.iter().zip(&base).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !ok {
                return Err(Error::Shape {
                    op: "concat",
                    lhs: base.clone(),
                    rhs: s.to_vec(),
                });
            }
        }
        let views: Vec<_> = values.iter().map(|v| v.array().view()).collect();
        let out = ndarray::concatenate(Axis(axis), &views).expect("shapes checked");
        Ok(self.push(
            Tensor::from_array(out),
            Op::Concat(axis),
            parts.iter().map(|p| p.id).collect(),
        ))
    }

    /// Reverse-mode gradient of a scalar `output` with respect to `wrt`.
    ///
    /// The returned nodes live in this graph and are differentiable. A `wrt`
    /// node that `output` does not depend on gets a zero tensor.
    pub fn grad<'g>(&'g self, output: Var<'g>, wrt: &[Var<'g>]) -> Result<Vec<Var<'g>>> {
        let out_shape = output.shape();
        if output.value().len() != 1 {
            return Err(Error::Shape {
                op: "grad (output must be scalar)",
                lhs: out_shape,
                rhs: vec![1],
            });
        }
        let n = output.id + 1;
        let (ops, parents): (Vec<Op>, Vec<Vec<usize>>) = {
            let nodes = self.nodes.borrow();
            nodes[..n]
                .iter()
                .map(|node| (node.op.clone(), node.parents.clone()))
                .unzip()
        };

        // Nodes that depend on some wrt node...
        let mut reach = vec![false; n];
        for w in wrt {
            if w.id < n {
                reach[w.id] = true;
            }
        }
        let start = wrt.iter().map(|w| w.id).min().unwrap_or(n);
        for i in start..n {
            if !reach[i] {
                reach[i] = parents[i].iter().any(|&p| reach[p]);
            }
        }
        // ...and that the output depends on.
        let mut needed = vec![false; n];
        needed[output.id] = reach[output.id];
        for i in (0..n).rev() {
            if needed[i] {
                for &p in &parents[i] {
                    if reach[p] {
                        needed[p] = true;
                    }
                }
            }
        }

        let mut adjoint: Vec<Option<Var<'g>>> = vec![None; n];
        adjoint[output.id] = Some(self.constant(Tensor::full(&out_shape, 1.0)));
        for i in (0..n).rev() {
            if !needed[i] || parents[i].is_empty() {
                continue;
            }
            let Some(g) = adjoint[i] else { continue };
            let node = Var { id: i, graph: self };
            let inputs: Vec<Var<'g>> = parents[i].iter().map(|&p| Var { id: p, graph: self }).collect();
            let contributions = vjp(&ops[i], node, &inputs, g)?;
            for (k, contribution) in contributions.into_iter().enumerate() {
                let p = parents[i][k];
                if !reach[p] {
                    continue;
                }
                if let Some(c) = contribution {
                    adjoint[p] = Some(match adjoint[p] {
                        None => c,
                        Some(prev) => prev.add(c)?,
                    });
                }
            }
        }

        Ok(wrt
            .iter()
            .map(|w| {
                if w.id < n {
                    if let Some(a) = adjoint[w.id] {
                        return a;
                    }
                }
                self.zeros(&w.shape())
            })
            .collect())
    }
}

/// Vector-Jacobian products, expressed as graph operations.
fn vjp<'g>(op: &Op, out: Var<'g>, inputs: &[Var<'g>], g: Var<'g>) -> Result<Vec<Option<Var<'g>>>> {
    let one = |v: Var<'g>| Ok(vec![Some(v)]);
    match op {
        Op::Leaf | Op::Constant => Ok(vec![]),
        Op::Add => {
            let (a, b) = (inputs[0], inputs[1]);
            Ok(vec![Some(g.sum_to(&a.shape())?), Some(g.sum_to(&b.shape())?)])
        }
        Op::Sub => {
            let (a, b) = (inputs[0], inputs[1]);
            Ok(vec![Some(g.sum_to(&a.shape())?), Some(g.neg().sum_to(&b.shape())?)])
        }
        Op::Mul => {
            let (a, b) = (inputs[0], inputs[1]);
            Ok(vec![
                Some(g.mul(b)?.sum_to(&a.shape())?),
                Some(g.mul(a)?.sum_to(&b.shape())?),
            ])
        }
        Op::Div => {
            let (a, b) = (inputs[0], inputs[1]);
            Ok(vec![
                Some(g.div(b)?.sum_to(&a.shape())?),
                Some(g.mul(out)?.div(b)?.neg().sum_to(&b.shape())?),
            ])
        }
        Op::Neg => one(g.neg()),
        Op::Scale(c) => one(g.scale(*c)),
        Op::Offset(_) => one(g),
        Op::MatMul => {
            let (a, b) = (inputs[0], inputs[1]);
            Ok(vec![Some(g.matmul(b.t()?)?), Some(a.t()?.matmul(g)?)])
        }
        Op::Transpose => one(g.t()?),
        Op::Exp => one(g.mul(out)?),
        Op::Log => one(g.div(inputs[0])?),
        Op::Sigmoid => one(g.mul(out.mul(out.neg().offset(1.0))?)?),
        Op::Softplus => one(g.mul(inputs[0].sigmoid())?),
        Op::Tanh => one(g.mul(out.square().neg().offset(1.0))?),
        Op::Square => one(g.mul(inputs[0])?.scale(2.0)),
        Op::SumAll => one(g.broadcast_to(&inputs[0].shape())?),
        Op::SumAxis(axis) => {
            let in_shape = inputs[0].shape();
            let mut kept = in_shape.clone();
            kept[*axis] = 1;
            one(g.reshape(&kept)?.broadcast_to(&in_shape)?)
        }
        Op::BroadcastTo(_) => one(g.sum_to(&inputs[0].shape())?),
        Op::SumTo(_) => one(g.broadcast_to(&inputs[0].shape())?),
        Op::Reshape(_) => one(g.reshape(&inputs[0].shape())?),
        Op::Concat(axis) => {
            let mut offset = 0;
            let mut parts = Vec::with_capacity(inputs.len());
            for input in inputs {
                let extent = input.shape()[*axis];
                parts.push(Some(g.slice(*axis, offset, offset + extent)?));
                offset += extent;
            }
            Ok(parts)
        }
        Op::Slice { axis, start, end } => {
            let graph = g.graph;
            let in_shape = inputs[0].shape();
            let mut pieces = Vec::with_capacity(3);
            if *start > 0 {
                let mut s = in_shape.clone();
                s[*axis] = *start;
                pieces.push(graph.zeros(&s));
            }
            pieces.push(g);
            if *end < in_shape[*axis] {
                let mut s = in_shape.clone();
                s[*axis] = in_shape[*axis] - end;
                pieces.push(graph.zeros(&s));
            }
            if pieces.len() == 1 {
                one(g)
            } else {
                one(graph.concat(&pieces, *axis)?)
            }
        }
    }
}

fn stable_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn stable_softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

impl<'g> Var<'g> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn graph(&self) -> &'g Graph {
        self.graph
    }

    pub fn value(&self) -> Rc<Tensor> {
        self.graph.value_of(self.id)
    }

    /// Value of a one-element node.
    pub fn item(&self) -> f64 {
        self.value().item()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.graph.nodes.borrow()[self.id].requires_grad
    }

    fn unary(&self, op: Op, f: impl Fn(f64) -> f64) -> Var<'g> {
        let value = self.value().map(f);
        self.graph.push(value, op, vec![self.id])
    }

    fn binary(
        &self,
        other: Var<'g>,
        op: Op,
        name: &'static str,
        f: impl Fn(&ArrayD<f64>, &ArrayD<f64>) -> ArrayD<f64>,
    ) -> Result<Var<'g>> {
        let (a, b) = (self.value(), other.value());
        broadcast_shapes(name, a.shape(), b.shape())?;
        let value = Tensor::from_array(f(a.array(), b.array()));
        Ok(self.graph.push(value, op, vec![self.id, other.id]))
    }

    pub fn add(&self, other: Var<'g>) -> Result<Var<'g>> {
        self.binary(other, Op::Add, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: Var<'g>) -> Result<Var<'g>> {
        self.binary(other, Op::Sub, "sub", |a, b| a - b)
    }

    pub fn mul(&self, other: Var<'g>) -> Result<Var<'g>> {
        self.binary(other, Op::Mul, "mul", |a, b| a * b)
    }

    pub fn div(&self, other: Var<'g>) -> Result<Var<'g>> {
        self.binary(other, Op::Div, "div", |a, b| a / b)
    }

    pub fn neg(&self) -> Var<'g> {
        self.unary(Op::Neg, |x| -x)
    }

    pub fn scale(&self, c: f64) -> Var<'g> {
        self.unary(Op::Scale(c), |x| c * x)
    }

    pub fn offset(&self, c: f64) -> Var<'g> {
        self.unary(Op::Offset(c), |x| x + c)
    }

    pub fn exp(&self) -> Var<'g> {
        self.unary(Op::Exp, f64::exp)
    }

    pub fn log(&self) -> Result<Var<'g>> {
        let value = self.value();
        if let Some(bad) = value.data().iter().find(|v| v.is_nan() || **v <= 0.0) {
            return Err(Error::Domain {
                op: "log",
                detail: format!("non-positive input {bad}"),
            });
        }
        Ok(self.unary(Op::Log, f64::ln))
    }

    pub fn sigmoid(&self) -> Var<'g> {
        self.unary(Op::Sigmoid, stable_sigmoid)
    }

    pub fn softplus(&self) -> Var<'g> {
        self.unary(Op::Softplus, stable_softplus)
    }

    /// `log(sigmoid(x)) = -softplus(-x)`.
    pub fn log_sigmoid(&self) -> Var<'g> {
        self.neg().softplus().neg()
    }

    pub fn tanh(&self) -> Var<'g> {
        self.unary(Op::Tanh, f64::tanh)
    }

    pub fn square(&self) -> Var<'g> {
        self.unary(Op::Square, |x| x * x)
    }

    pub fn matmul(&self, other: Var<'g>) -> Result<Var<'g>> {
        let (a, b) = (self.value(), other.value());
        let mismatch = || Error::Shape {
            op: "matmul",
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        };
        let a2 = a.array().view().into_dimensionality::<Ix2>().map_err(|_| mismatch())?;
        let b2 = b.array().view().into_dimensionality::<Ix2>().map_err(|_| mismatch())?;
        if a2.ncols() != b2.nrows() {
            return Err(mismatch());
        }
        let value = Tensor::from_array(a2.dot(&b2).into_dyn());
        Ok(self.graph.push(value, Op::MatMul, vec![self.id, other.id]))
    }

    /// Matrix transpose (rank 2 only).
    pub fn t(&self) -> Result<Var<'g>> {
        let a = self.value();
        if a.ndim() != 2 {
            return Err(Error::Shape {
                op: "transpose",
                lhs: a.shape().to_vec(),
                rhs: vec![2],
            });
        }
        let value = Tensor::from_array(a.array().t().as_standard_layout().into_owned());
        Ok(self.graph.push(value, Op::Transpose, vec![self.id]))
    }

    pub fn sum(&self) -> Var<'g> {
        let value = Tensor::scalar(self.value().data().iter().sum());
        self.graph.push(value, Op::SumAll, vec![self.id])
    }

    pub fn mean(&self) -> Var<'g> {
        let n = self.value().len().max(1) as f64;
        self.sum().scale(1.0 / n)
    }

    /// Sum over one axis, removing it.
    pub fn sum_axis(&self, axis: usize) -> Result<Var<'g>> {
        let a = self.value();
        if axis >= a.ndim() {
            return Err(Error::Shape {
                op: "sum_axis",
                lhs: a.shape().to_vec(),
                rhs: vec![axis],
            });
        }
        let value = Tensor::from_array(a.array().sum_axis(Axis(axis)));
        Ok(self.graph.push(value, Op::SumAxis(axis), vec![self.id]))
    }

    pub fn broadcast_to(&self, shape: &[usize]) -> Result<Var<'g>> {
        let a = self.value();
        if a.shape() == shape {
            return Ok(*self);
        }
        let view = a.array().broadcast(IxDyn(shape)).ok_or_else(|| Error::Shape {
            op: "broadcast_to",
            lhs: a.shape().to_vec(),
            rhs: shape.to_vec(),
        })?;
        let value = Tensor::from_array(view.to_owned());
        Ok(self.graph.push(value, Op::BroadcastTo(shape.to_vec()), vec![self.id]))
    }

    /// Sum over broadcast axes so the result has `shape`.
    pub fn sum_to(&self, shape: &[usize]) -> Result<Var<'g>> {
        let a = self.value();
        if a.shape() == shape {
            return Ok(*self);
        }
        let target = broadcast_shapes("sum_to", shape, a.shape())?;
        if target != a.shape() {
            return Err(Error::Shape {
                op: "sum_to",
                lhs: a.shape().to_vec(),
                rhs: shape.to_vec(),
            });
        }
        let value = Tensor::from_array(sum_to(a.array(), shape));
        Ok(self.graph.push(value, Op::SumTo(shape.to_vec()), vec![self.id]))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Var<'g>> {
        let a = self.value();
        if a.shape() == shape {
            return Ok(*self);
        }
        let value = a.reshape(shape).map_err(|_| Error::Shape {
            op: "reshape",
            lhs: a.shape().to_vec(),
            rhs: shape.to_vec(),
        })?;
        Ok(self.graph.push(value, Op::Reshape(shape.to_vec()), vec![self.id]))
    }

    /// Half-open slice `start..end` along `axis`.
    pub fn slice(&self, axis: usize, start: usize, end: usize) -> Result<Var<'g>> {
        let a = self.value();
        if axis >= a.ndim() || start > end || end > a.shape()[axis] {
            return Err(Error::Shape {
                op: "slice",
                lhs: a.shape().to_vec(),
                rhs: vec![axis, start, end],
            });
        }
        let view = a
            .array()
            .slice_axis(Axis(axis), Slice::from(start as isize..end as isize));
        let value = Tensor::from_array(view.to_owned());
        Ok(self
            .graph
            .push(value, Op::Slice { axis, start, end }, vec![self.id]))
    }

    /// Constant copy of this node's value; gradients do not flow through it.
    pub fn detach(&self) -> Var<'g> {
        self.graph.constant((*self.value()).clone())
    }
}
