//! Eager tape with re-entrant reverse-mode differentiation.
//!
//! Every operation computes its forward value immediately and records a node.
//! [`backward`] walks the tape in reverse and *emits the adjoint computation
//! as ordinary nodes built from the same kernel set*, so gradients are
//! themselves differentiable: calling [`backward`] on an expression of
//! earlier gradients yields exact second-order derivatives.
//!
//! Kernel set: add, sub, mul (elementwise, with one-element broadcast),
//! scalar-mul, matmul (with transpose flags), concat, slice, sum, mean,
//! tanh, sigmoid, exp, log, softmax (last axis), relu.

use std::cell::RefCell;
use std::rc::Rc;

use super::{DiffError, Tensor};

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    ScalarMul(f64, usize),
    Matmul {
        a: usize,
        b: usize,
        ta: bool,
        tb: bool,
    },
    Concat {
        inputs: Vec<usize>,
        axis: usize,
    },
    Slice {
        input: usize,
        axis: usize,
        start: usize,
        len: usize,
    },
    Sum(usize),
    Mean(usize),
    Tanh(usize),
    Sigmoid(usize),
    Exp(usize),
    Log(usize),
    Softmax(usize),
    Relu(usize),
}

struct Node {
    op: Op,
    value: Tensor,
    needs_grad: bool,
}

#[derive(Default)]
struct GraphInner {
    nodes: Vec<Node>,
}

/// Append-only computation tape. Cheap to clone (shared handle).
#[derive(Clone, Default)]
pub struct Graph {
    inner: Rc<RefCell<GraphInner>>,
}

/// Handle to one node of a [`Graph`].
#[derive(Clone)]
pub struct Var {
    graph: Graph,
    id: usize,
}

impl std::fmt::Debug for Var {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Var")
            .field("id", &self.id)
            .field("shape", &self.shape())
            .finish()
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    /// Number of recorded nodes.
    pub fn len(&self) -> usize {
        self.inner.borrow().nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, op: Op, value: Tensor, needs_grad: bool) -> Var {
        let mut inner = self.inner.borrow_mut();
        inner.nodes.push(Node {
            op,
            value,
            needs_grad,
        });
        Var {
            graph: self.clone(),
            id: inner.nodes.len() - 1,
        }
    }

    /// Leaf that gradients flow *through* but never *into*.
    pub fn constant(&self, t: Tensor) -> Var {
        self.push(Op::Leaf, t, false)
    }

    /// Leaf tracked for differentiation.
    pub fn param(&self, t: Tensor) -> Var {
        self.push(Op::Leaf, t, true)
    }

    /// Constant copy of `v`: same value, no gradient path.
    pub fn detach(&self, v: &Var) -> Var {
        self.constant(v.value())
    }

    /// Concatenates along `axis` (0 for rank 1; 0 or 1 for rank 2).
    pub fn concat(&self, parts: &[&Var], axis: usize) -> Result<Var, DiffError> {
        if parts.is_empty() {
            return Err(DiffError::ContractViolation("concat of no parts".into()));
        }
        for p in parts {
            self.check_same(p, "concat")?;
        }
        let (value, needs_grad) = {
            let inner = self.inner.borrow();
            let first = &inner.nodes[parts[0].id].value;
            let rank = first.rank();
            if rank == 0 || axis >= rank {
                return Err(DiffError::InvalidShape {
                    op: "concat",
                    shape: first.shape().to_vec(),
                    reason: format!("axis {axis} invalid for rank {rank}"),
                });
            }
            let mut out_shape = first.shape().to_vec();
            for p in &parts[1..] {
                let t = &inner.nodes[p.id].value;
                if t.rank() != rank || (0..rank).any(|d| d != axis && t.shape()[d] != out_shape[d])
                {
                    return Err(DiffError::ShapeMismatch {
                        op: "concat",
                        lhs: out_shape.clone(),
                        rhs: t.shape().to_vec(),
                    });
                }
                out_shape[axis] += t.shape()[axis];
            }
            let mut data = Vec::with_capacity(out_shape.iter().product());
            if axis == 0 {
                for p in parts {
                    data.extend_from_slice(inner.nodes[p.id].value.data());
                }
            } else {
                let rows = out_shape[0];
                for r in 0..rows {
                    for p in parts {
                        let t = &inner.nodes[p.id].value;
                        let c = t.shape()[1];
                        data.extend_from_slice(&t.data()[r * c..(r + 1) * c]);
                    }
                }
            }
            let needs = parts.iter().any(|p| inner.nodes[p.id].needs_grad);
            (Tensor::new(out_shape, data)?, needs)
        };
        Ok(self.push(
            Op::Concat {
                inputs: parts.iter().map(|p| p.id).collect(),
                axis,
            },
            value,
            needs_grad,
        ))
    }

    fn check_same(&self, v: &Var, op: &'static str) -> Result<(), DiffError> {
        if Rc::ptr_eq(&self.inner, &v.graph.inner) {
            Ok(())
        } else {
            Err(DiffError::ContractViolation(format!(
                "{op}: operands belong to different graphs"
            )))
        }
    }

    fn var(&self, id: usize) -> Var {
        Var {
            graph: self.clone(),
            id,
        }
    }
}

enum Broadcast {
    None,
    LhsScalar,
    RhsScalar,
}

fn ew_forward(
    op: &'static str,
    a: &Tensor,
    b: &Tensor,
    f: impl Fn(f64, f64) -> f64,
) -> Result<(Tensor, Broadcast), DiffError> {
    if a.shape() == b.shape() {
        let data = a.data().iter().zip(b.data()).map(|(x, y)| f(*x, *y)).collect();
        Ok((Tensor::new(a.shape().to_vec(), data)?, Broadcast::None))
    } else if a.numel() == 1 && b.numel() == 1 {
        // Single-element operands with different layouts (e.g. [] vs [1,1]):
        // keep the higher-rank shape so rank-strict consumers still fit.
        let data = vec![f(a.data()[0], b.data()[0])];
        if a.rank() >= b.rank() {
            Ok((Tensor::new(a.shape().to_vec(), data)?, Broadcast::RhsScalar))
        } else {
            Ok((Tensor::new(b.shape().to_vec(), data)?, Broadcast::LhsScalar))
        }
    } else if b.numel() == 1 {
        let s = b.data()[0];
        let data = a.data().iter().map(|x| f(*x, s)).collect();
        Ok((Tensor::new(a.shape().to_vec(), data)?, Broadcast::RhsScalar))
    } else if a.numel() == 1 {
        let s = a.data()[0];
        let data = b.data().iter().map(|y| f(s, *y)).collect();
        Ok((Tensor::new(b.shape().to_vec(), data)?, Broadcast::LhsScalar))
    } else {
        Err(DiffError::ShapeMismatch {
            op,
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        })
    }
}

fn matmul_forward(
    a: &Tensor,
    b: &Tensor,
    ta: bool,
    tb: bool,
) -> Result<Tensor, DiffError> {
    if a.rank() != 2 || b.rank() != 2 {
        return Err(DiffError::InvalidShape {
            op: "matmul",
            shape: if a.rank() != 2 {
                a.shape().to_vec()
            } else {
                b.shape().to_vec()
            },
            reason: "matmul requires rank-2 operands".to_string(),
        });
    }
    let (m, ka) = if ta {
        (a.shape()[1], a.shape()[0])
    } else {
        (a.shape()[0], a.shape()[1])
    };
    let (kb, n) = if tb {
        (b.shape()[1], b.shape()[0])
    } else {
        (b.shape()[0], b.shape()[1])
    };
    if ka != kb {
        return Err(DiffError::ShapeMismatch {
            op: "matmul",
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    let k = ka;
    let mut out = vec![0.0; m * n];
    let ad = a.data();
    let bd = b.data();
    match (ta, tb) {
        (false, false) => {
            for i in 0..m {
                for l in 0..k {
                    let av = ad[i * k + l];
                    if av == 0.0 {
                        continue;
                    }
                    let brow = &bd[l * n..(l + 1) * n];
                    let orow = &mut out[i * n..(i + 1) * n];
                    for j in 0..n {
                        orow[j] += av * brow[j];
                    }
                }
            }
        }
        (false, true) => {
            for i in 0..m {
                let arow = &ad[i * k..(i + 1) * k];
                for j in 0..n {
                    let brow = &bd[j * k..(j + 1) * k];
                    let mut acc = 0.0;
                    for l in 0..k {
                        acc += arow[l] * brow[l];
                    }
                    out[i * n + j] = acc;
                }
            }
        }
        (true, false) => {
            for l in 0..k {
                let arow = &ad[l * m..(l + 1) * m];
                let brow = &bd[l * n..(l + 1) * n];
                for i in 0..m {
                    let av = arow[i];
                    if av == 0.0 {
                        continue;
                    }
                    let orow = &mut out[i * n..(i + 1) * n];
                    for j in 0..n {
                        orow[j] += av * brow[j];
                    }
                }
            }
        }
        (true, true) => {
            for i in 0..m {
                for j in 0..n {
                    let mut acc = 0.0;
                    for l in 0..k {
                        acc += ad[l * m + i] * bd[j * k + l];
                    }
                    out[i * n + j] = acc;
                }
            }
        }
    }
    Tensor::new(vec![m, n], out)
}

fn softmax_forward(x: &Tensor) -> Result<Tensor, DiffError> {
    let rank = x.rank();
    if rank == 0 {
        return Err(DiffError::InvalidShape {
            op: "softmax",
            shape: x.shape().to_vec(),
            reason: "softmax needs rank ≥ 1".to_string(),
        });
    }
    let cols = x.shape()[rank - 1];
    if cols == 0 {
        return Err(DiffError::InvalidShape {
            op: "softmax",
            shape: x.shape().to_vec(),
            reason: "softmax over empty axis".to_string(),
        });
    }
    let mut data = x.data().to_vec();
    for row in data.chunks_mut(cols) {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
    Tensor::new(x.shape().to_vec(), data)
}

impl Var {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn graph(&self) -> &Graph {
        &self.graph
    }

    /// Copy of the forward value.
    pub fn value(&self) -> Tensor {
        self.graph.inner.borrow().nodes[self.id].value.clone()
    }

    /// Reads the forward value without cloning.
    pub fn with_value<R>(&self, f: impl FnOnce(&Tensor) -> R) -> R {
        f(&self.graph.inner.borrow().nodes[self.id].value)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.with_value(|t| t.shape().to_vec())
    }

    pub fn numel(&self) -> usize {
        self.with_value(|t| t.numel())
    }

    /// Sole value of a one-element node.
    pub fn item(&self) -> Result<f64, DiffError> {
        self.with_value(|t| t.item())
    }

    fn needs_grad(&self) -> bool {
        self.graph.inner.borrow().nodes[self.id].needs_grad
    }

    fn binary(
        &self,
        other: &Var,
        opname: &'static str,
        f: impl Fn(f64, f64) -> f64,
        make: impl Fn(usize, usize) -> Op,
    ) -> Result<Var, DiffError> {
        self.graph.check_same(other, opname)?;
        let (value, needs) = {
            let inner = self.graph.inner.borrow();
            let a = &inner.nodes[self.id];
            let b = &inner.nodes[other.id];
            let (value, _) = ew_forward(opname, &a.value, &b.value, f)?;
            (value, a.needs_grad || b.needs_grad)
        };
        Ok(self.graph.push(make(self.id, other.id), value, needs))
    }

    pub fn add(&self, other: &Var) -> Result<Var, DiffError> {
        self.binary(other, "add", |x, y| x + y, Op::Add)
    }

    pub fn sub(&self, other: &Var) -> Result<Var, DiffError> {
        self.binary(other, "sub", |x, y| x - y, Op::Sub)
    }

    pub fn mul(&self, other: &Var) -> Result<Var, DiffError> {
        self.binary(other, "mul", |x, y| x * y, Op::Mul)
    }

    /// Multiplication by a compile-time constant scalar.
    pub fn scalar_mul(&self, k: f64) -> Var {
        let (value, needs) = {
            let inner = self.graph.inner.borrow();
            let n = &inner.nodes[self.id];
            let data = n.value.data().iter().map(|v| k * v).collect();
            (
                Tensor::new(n.value.shape().to_vec(), data).expect("shape preserved"),
                n.needs_grad,
            )
        };
        self.graph.push(Op::ScalarMul(k, self.id), value, needs)
    }

    /// Matrix product with optional transposes: `op(a) · op(b)`.
    pub fn matmul(&self, other: &Var, ta: bool, tb: bool) -> Result<Var, DiffError> {
        self.graph.check_same(other, "matmul")?;
        let (value, needs) = {
            let inner = self.graph.inner.borrow();
            let a = &inner.nodes[self.id];
            let b = &inner.nodes[other.id];
            (
                matmul_forward(&a.value, &b.value, ta, tb)?,
                a.needs_grad || b.needs_grad,
            )
        };
        Ok(self.graph.push(
            Op::Matmul {
                a: self.id,
                b: other.id,
                ta,
                tb,
            },
            value,
            needs,
        ))
    }

    /// Contiguous range along `axis`.
    pub fn slice(&self, axis: usize, start: usize, len: usize) -> Result<Var, DiffError> {
        let (value, needs) = {
            let inner = self.graph.inner.borrow();
            let n = &inner.nodes[self.id];
            let t = &n.value;
            let rank = t.rank();
            if rank == 0 || axis >= rank {
                return Err(DiffError::InvalidShape {
                    op: "slice",
                    shape: t.shape().to_vec(),
                    reason: format!("axis {axis} invalid for rank {rank}"),
                });
            }
            if start + len > t.shape()[axis] || len == 0 {
                return Err(DiffError::InvalidShape {
                    op: "slice",
                    shape: t.shape().to_vec(),
                    reason: format!("range {start}..{} out of bounds", start + len),
                });
            }
            let mut shape = t.shape().to_vec();
            shape[axis] = len;
            let data: Vec<f64> = if axis == 0 {
                let row = if rank == 2 { t.shape()[1] } else { 1 };
                t.data()[start * row..(start + len) * row].to_vec()
            } else {
                let cols = t.shape()[1];
                (0..t.shape()[0])
                    .flat_map(|r| t.data()[r * cols + start..r * cols + start + len].to_vec())
                    .collect()
            };
            (Tensor::new(shape, data)?, n.needs_grad)
        };
        Ok(self.graph.push(
            Op::Slice {
                input: self.id,
                axis,
                start,
                len,
            },
            value,
            needs,
        ))
    }

    fn unary(
        &self,
        opname: &'static str,
        f: impl Fn(f64) -> f64,
        make: impl Fn(usize) -> Op,
        domain: Option<&dyn Fn(f64) -> bool>,
    ) -> Result<Var, DiffError> {
        let (value, needs) = {
            let inner = self.graph.inner.borrow();
            let n = &inner.nodes[self.id];
            if let Some(ok) = domain {
                if let Some((i, v)) = n
                    .value
                    .data()
                    .iter()
                    .enumerate()
                    .find(|(_, v)| !ok(**v))
                {
                    return Err(DiffError::Domain {
                        op: opname,
                        index: i,
                        value: *v,
                    });
                }
            }
            let data = n.value.data().iter().map(|v| f(*v)).collect();
            (
                Tensor::new(n.value.shape().to_vec(), data)?,
                n.needs_grad,
            )
        };
        Ok(self.graph.push(make(self.id), value, needs))
    }

    pub fn tanh(&self) -> Var {
        self.unary("tanh", f64::tanh, Op::Tanh, None).expect("total")
    }

    pub fn sigmoid(&self) -> Var {
        self.unary("sigmoid", |v| 1.0 / (1.0 + (-v).exp()), Op::Sigmoid, None)
            .expect("total")
    }

    pub fn exp(&self) -> Var {
        self.unary("exp", f64::exp, Op::Exp, None).expect("total")
    }

    /// Natural log; every element must be strictly positive.
    pub fn log(&self) -> Result<Var, DiffError> {
        self.unary("log", f64::ln, Op::Log, Some(&|v: f64| v > 0.0))
    }

    pub fn relu(&self) -> Var {
        self.unary("relu", |v| v.max(0.0), Op::Relu, None).expect("total")
    }

    /// Softmax over the last axis, numerically stabilized.
    pub fn softmax(&self) -> Result<Var, DiffError> {
        let (value, needs) = {
            let inner = self.graph.inner.borrow();
            let n = &inner.nodes[self.id];
            (softmax_forward(&n.value)?, n.needs_grad)
        };
        Ok(self.graph.push(Op::Softmax(self.id), value, needs))
    }

    /// Sum of all elements (scalar).
    pub fn sum(&self) -> Var {
        let (value, needs) = {
            let inner = self.graph.inner.borrow();
            let n = &inner.nodes[self.id];
            (Tensor::scalar(n.value.data().iter().sum()), n.needs_grad)
        };
        self.graph.push(Op::Sum(self.id), value, needs)
    }

    /// Mean of all elements (scalar). Errors on empty tensors.
    pub fn mean(&self) -> Result<Var, DiffError> {
        let (value, needs) = {
            let inner = self.graph.inner.borrow();
            let n = &inner.nodes[self.id];
            if n.value.numel() == 0 {
                return Err(DiffError::ContractViolation("mean of empty tensor".into()));
            }
            let s: f64 = n.value.data().iter().sum();
            (
                Tensor::scalar(s / n.value.numel() as f64),
                n.needs_grad,
            )
        };
        Ok(self.graph.push(Op::Mean(self.id), value, needs))
    }
}

/// Spreads a one-element gradient over `shape`, or passes it through when the
/// shapes already agree; reduces a full gradient to one element when the
/// target was broadcast.
fn fit_gradient(g: &Var, shape: &[usize]) -> Result<Var, DiffError> {
    let gshape = g.shape();
    if gshape == shape {
        return Ok(g.clone());
    }
    let target_numel: usize = shape.iter().product();
    if target_numel == 1 {
        let s = g.sum();
        if shape.is_empty() {
            return Ok(s);
        }
        let ones = g.graph().constant(Tensor::full(shape, 1.0));
        return ones.mul(&s);
    }
    // g is one-element, target is larger: broadcast.
    let ones = g.graph().constant(Tensor::full(shape, 1.0));
    g.mul(&ones)
}

fn accumulate(
    slots: &mut [Option<Var>],
    id: usize,
    contrib: Var,
    graph: &Graph,
) -> Result<(), DiffError> {
    if !graph.inner.borrow().nodes[id].needs_grad {
        return Ok(());
    }
    slots[id] = Some(match slots[id].take() {
        Some(existing) => existing.add(&contrib)?,
        None => contrib,
    });
    Ok(())
}

/// Reverse-mode gradients of a scalar `loss` with respect to each var in
/// `wrt`. The returned gradients are graph nodes, so they can be combined
/// into new expressions and differentiated again. Parameters unreachable
/// from `loss` get an exact zero gradient of their own shape.
pub fn backward(loss: &Var, wrt: &[&Var]) -> Result<Vec<Var>, DiffError> {
    let graph = loss.graph().clone();
    for w in wrt {
        graph.check_same(w, "backward")?;
    }
    if loss.numel() != 1 {
        return Err(DiffError::ContractViolation(format!(
            "backward: loss must be scalar, got shape {:?}",
            loss.shape()
        )));
    }
    let mut adj: Vec<Option<Var>> = vec![None; loss.id + 1];
    let seed_shape = loss.shape();
    adj[loss.id] = Some(graph.constant(Tensor::full(&seed_shape, 1.0)));
    if !loss.needs_grad() {
        adj[loss.id] = None;
    }

    for id in (0..=loss.id).rev() {
        let Some(g) = adj[id].clone() else { continue };
        let op = graph.inner.borrow().nodes[id].op.clone();
        match op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                let (sa, sb) = {
                    let inner = graph.inner.borrow();
                    (
                        inner.nodes[a].value.shape().to_vec(),
                        inner.nodes[b].value.shape().to_vec(),
                    )
                };
                accumulate(&mut adj, a, fit_gradient(&g, &sa)?, &graph)?;
                accumulate(&mut adj, b, fit_gradient(&g, &sb)?, &graph)?;
            }
            Op::Sub(a, b) => {
                let (sa, sb) = {
                    let inner = graph.inner.borrow();
                    (
                        inner.nodes[a].value.shape().to_vec(),
                        inner.nodes[b].value.shape().to_vec(),
                    )
                };
                accumulate(&mut adj, a, fit_gradient(&g, &sa)?, &graph)?;
                let neg = g.scalar_mul(-1.0);
                accumulate(&mut adj, b, fit_gradient(&neg, &sb)?, &graph)?;
            }
            Op::Mul(a, b) => {
                let (sa, sb) = {
                    let inner = graph.inner.borrow();
                    (
                        inner.nodes[a].value.shape().to_vec(),
                        inner.nodes[b].value.shape().to_vec(),
                    )
                };
                let va = graph.var(a);
                let vb = graph.var(b);
                accumulate(&mut adj, a, fit_gradient(&g.mul(&vb)?, &sa)?, &graph)?;
                accumulate(&mut adj, b, fit_gradient(&g.mul(&va)?, &sb)?, &graph)?;
            }
            Op::ScalarMul(k, x) => {
                accumulate(&mut adj, x, g.scalar_mul(k), &graph)?;
            }
            Op::Matmul { a, b, ta, tb } => {
                let va = graph.var(a);
                let vb = graph.var(b);
                let (da, db) = match (ta, tb) {
                    (false, false) => (g.matmul(&vb, false, true)?, va.matmul(&g, true, false)?),
                    (true, false) => (vb.matmul(&g, false, true)?, va.matmul(&g, false, false)?),
                    (false, true) => (g.matmul(&vb, false, false)?, g.matmul(&va, true, false)?),
                    (true, true) => (vb.matmul(&g, true, true)?, g.matmul(&va, true, true)?),
                };
                accumulate(&mut adj, a, da, &graph)?;
                accumulate(&mut adj, b, db, &graph)?;
            }
            Op::Concat { inputs, axis } => {
                let mut offset = 0;
                for inp in inputs {
                    let len = graph.inner.borrow().nodes[inp].value.shape()[axis];
                    let piece = g.slice(axis, offset, len)?;
                    accumulate(&mut adj, inp, piece, &graph)?;
                    offset += len;
                }
            }
            Op::Slice {
                input,
                axis,
                start,
                len,
            } => {
                let in_shape = graph.inner.borrow().nodes[input].value.shape().to_vec();
                let total = in_shape[axis];
                let mut parts: Vec<Var> = Vec::with_capacity(3);
                if start > 0 {
                    let mut s = in_shape.clone();
                    s[axis] = start;
                    parts.push(graph.constant(Tensor::zeros(&s)));
                }
                parts.push(g.clone());
                if start + len < total {
                    let mut s = in_shape.clone();
                    s[axis] = total - start - len;
                    parts.push(graph.constant(Tensor::zeros(&s)));
                }
                let refs: Vec<&Var> = parts.iter().collect();
                let padded = if refs.len() == 1 {
                    parts[0].clone()
                } else {
                    graph.concat(&refs, axis)?
                };
                accumulate(&mut adj, input, padded, &graph)?;
            }
            Op::Sum(x) => {
                let shape = graph.inner.borrow().nodes[x].value.shape().to_vec();
                accumulate(&mut adj, x, fit_gradient(&g, &shape)?, &graph)?;
            }
            Op::Mean(x) => {
                let shape = graph.inner.borrow().nodes[x].value.shape().to_vec();
                let n: usize = shape.iter().product();
                let scaled = g.scalar_mul(1.0 / n as f64);
                accumulate(&mut adj, x, fit_gradient(&scaled, &shape)?, &graph)?;
            }
            Op::Tanh(x) => {
                let y = graph.var(id);
                let ones = graph.constant(Tensor::full(&y.shape(), 1.0));
                let d = ones.sub(&y.mul(&y)?)?;
                accumulate(&mut adj, x, g.mul(&d)?, &graph)?;
            }
            Op::Sigmoid(x) => {
                let y = graph.var(id);
                let ones = graph.constant(Tensor::full(&y.shape(), 1.0));
                let d = y.mul(&ones.sub(&y)?)?;
                accumulate(&mut adj, x, g.mul(&d)?, &graph)?;
            }
            Op::Exp(x) => {
                let y = graph.var(id);
                accumulate(&mut adj, x, g.mul(&y)?, &graph)?;
            }
            Op::Log(x) => {
                // d/dx log x = 1/x = exp(-log x), reusing the forward value.
                let y = graph.var(id);
                let inv = y.scalar_mul(-1.0).exp();
                accumulate(&mut adj, x, g.mul(&inv)?, &graph)?;
            }
            Op::Softmax(x) => {
                let y = graph.var(id);
                let gy = g.mul(&y)?;
                let shape = y.shape();
                let rank = shape.len();
                let contrib = if rank == 2 {
                    let n = shape[1];
                    let ones_col = graph.constant(Tensor::full(&[n, 1], 1.0));
                    let ones_row = graph.constant(Tensor::full(&[1, n], 1.0));
                    let rowsum = gy.matmul(&ones_col, false, false)?;
                    let spread = rowsum.matmul(&ones_row, false, false)?;
                    y.mul(&g.sub(&spread)?)?
                } else {
                    let s = gy.sum();
                    y.mul(&g.sub(&s)?)?
                };
                accumulate(&mut adj, x, contrib, &graph)?;
            }
            Op::Relu(x) => {
                let mask = {
                    let inner = graph.inner.borrow();
                    let t = &inner.nodes[x].value;
                    let data = t.data().iter().map(|v| if *v > 0.0 { 1.0 } else { 0.0 });
                    Tensor::new(t.shape().to_vec(), data.collect())?
                };
                let mask = graph.constant(mask);
                accumulate(&mut adj, x, g.mul(&mask)?, &graph)?;
            }
        }
    }

    wrt.iter()
        .map(|w| match adj.get(w.id).and_then(|o| o.as_ref()) {
            Some(v) => Ok(v.clone()),
            None => {
                let shape = w.shape();
                Ok(graph.constant(Tensor::zeros(&shape)))
            }
        })
        .collect()
}

/// Differentiates an expression of first-order gradients: computes
/// `grads = ∂loss/∂inner_wrt`, feeds them to `expr` to build a scalar, and
/// returns the gradients of that scalar with respect to `outer_wrt`.
pub fn second_order_grad(
    loss: &Var,
    inner_wrt: &[&Var],
    outer_wrt: &[&Var],
    expr: impl FnOnce(&[Var]) -> Result<Var, DiffError>,
) -> Result<Vec<Var>, DiffError> {
    let grads = backward(loss, inner_wrt)?;
    let objective = expr(&grads)?;
    backward(&objective, outer_wrt)
}
