use ndarray::{ArrayD, Axis, Ix2, IxDyn};
use std::cell::RefCell;
use std::collections::HashMap;
use std::fmt;
use std::rc::Rc;
use thiserror::Error;

pub type NodeId = usize;

/// Primitive operations recorded on the tape. Node ids reference inputs,
/// which always precede the node itself.
#[derive(Clone, Debug)]
pub enum Op {
    /// Input node: constant or parameter. Which one it is only matters to the
    /// caller of [`backward`].
    Leaf,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Div(NodeId, NodeId),
    Neg(NodeId),
    /// `[n,k] x [k,m] -> [n,m]`
    MatMul(NodeId, NodeId),
    Transpose(NodeId),
    Exp(NodeId),
    Ln(NodeId),
    Sqrt(NodeId),
    Sin(NodeId),
    Cos(NodeId),
    Sigmoid(NodeId),
    /// `(1/beta) * ln(1 + exp(beta * x))`, computed in a numerically stable form.
    Softplus { x: NodeId, beta: f64 },
    Relu(NodeId),
    /// Elementwise max; on ties the gradient flows to the first argument.
    MaxElem(NodeId, NodeId),
    /// Elementwise min; on ties the gradient flows to the first argument.
    MinElem(NodeId, NodeId),
    /// x^c for a constant exponent.
    PowConst { x: NodeId, c: f64 },
    /// Full reduction to a 0-d scalar.
    Sum(NodeId),
    /// Numpy-style reduction onto a broadcast-compatible smaller shape.
    SumTo { x: NodeId, shape: Vec<usize> },
    BroadcastTo { x: NodeId, shape: Vec<usize> },
    /// Product along one axis (axis removed from the shape).
    ProdAxis { x: NodeId, axis: usize },
    Reshape { x: NodeId, shape: Vec<usize> },
    /// Columns `start..end` of a 2-d array.
    SliceCols { x: NodeId, start: usize, end: usize },
    /// Embed a 2-d array as columns `start..start+w` of a zero matrix with
    /// `total` columns. Adjoint of `SliceCols`.
    PadCols { x: NodeId, total: usize, start: usize },
    ConcatCols(Vec<NodeId>),
    /// Row selection (with repetition allowed) from a 2-d array.
    Gather { x: NodeId, rows: Rc<Vec<usize>> },
    /// Scatter-add rows into a zero matrix of `total` rows. Adjoint of `Gather`.
    ScatterRows { x: NodeId, rows: Rc<Vec<usize>>, total: usize },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Div(..) => "div",
            Op::Neg(..) => "neg",
            Op::MatMul(..) => "matmul",
            Op::Transpose(..) => "transpose",
            Op::Exp(..) => "exp",
            Op::Ln(..) => "ln",
            Op::Sqrt(..) => "sqrt",
            Op::Sin(..) => "sin",
            Op::Cos(..) => "cos",
            Op::Sigmoid(..) => "sigmoid",
            Op::Softplus { .. } => "softplus",
            Op::Relu(..) => "relu",
            Op::MaxElem(..) => "max",
            Op::MinElem(..) => "min",
            Op::PowConst { .. } => "pow_const",
            Op::Sum(..) => "sum",
            Op::SumTo { .. } => "sum_to",
            Op::BroadcastTo { .. } => "broadcast_to",
            Op::ProdAxis { .. } => "prod_axis",
            Op::Reshape { .. } => "reshape",
            Op::SliceCols { .. } => "slice_cols",
            Op::PadCols { .. } => "pad_cols",
            Op::ConcatCols(..) => "concat_cols",
            Op::Gather { .. } => "gather",
            Op::ScatterRows { .. } => "scatter_rows",
        }
    }

    fn inputs(&self) -> Vec<NodeId> {
        match self {
            Op::Leaf => vec![],
            Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::Div(a, b)
            | Op::MatMul(a, b)
            | Op::MaxElem(a, b)
            | Op::MinElem(a, b) => vec![*a, *b],
            Op::Neg(a)
            | Op::Transpose(a)
            | Op::Exp(a)
            | Op::Ln(a)
            | Op::Sqrt(a)
            | Op::Sin(a)
            | Op::Cos(a)
            | Op::Sigmoid(a)
            | Op::Relu(a)
            | Op::Sum(a) => vec![*a],
            Op::Softplus { x, .. }
            | Op::PowConst { x, .. }
            | Op::SumTo { x, .. }
            | Op::BroadcastTo { x, .. }
            | Op::ProdAxis { x, .. }
            | Op::Reshape { x, .. }
            | Op::SliceCols { x, .. }
            | Op::PadCols { x, .. }
            | Op::Gather { x, .. }
            | Op::ScatterRows { x, .. } => vec![*x],
            Op::ConcatCols(xs) => xs.clone(),
        }
    }
}

#[derive(Debug, Error)]
pub enum DiffError {
    #[error("shape mismatch in `{op}`: operand shapes {shapes:?}")]
    ShapeMismatch { op: &'static str, shapes: Vec<Vec<usize>> },
    #[error("`backward` requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("variables belong to different tapes")]
    TapeMismatch,
}

struct Node {
    op: Op,
    value: ArrayD<f64>,
}

#[derive(Default)]
struct TapeInner {
    nodes: Vec<Node>,
}

/// Append-only record of primitive operations. Cheap to clone (shared handle).
#[derive(Clone, Default)]
pub struct Tape {
    inner: Rc<RefCell<TapeInner>>,
}

/// Handle to one tape node.
#[derive(Clone)]
pub struct Var {
    tape: Tape,
    id: NodeId,
}

impl fmt::Debug for Var {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Var(#{}, shape {:?})", self.id, self.shape())
    }
}

fn scalar_array(v: f64) -> ArrayD<f64> {
    ArrayD::from_elem(IxDyn(&[]), v)
}

/// Numpy-style broadcast of two shapes, or `None` if incompatible.
fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let n = a.len().max(b.len());
    let mut out = vec![0usize; n];
    for i in 0..n {
        let da = if i < n - a.len() { 1 } else { a[i - (n - a.len())] };
        let db = if i < n - b.len() { 1 } else { b[i - (n - b.len())] };
        if da == db {
            out[i] = da;
        } else if da == 1 {
            out[i] = db;
        } else if db == 1 {
            out[i] = da;
        } else {
            return None;
        }
    }
    Some(out)
}

fn broadcast_to(x: &ArrayD<f64>, shape: &[usize]) -> ArrayD<f64> {
    x.broadcast(IxDyn(shape))
        .expect("broadcast_to: incompatible shape")
        .to_owned()
}

/// Reduce `x` onto `shape` by summing over broadcast axes.
fn sum_to(x: &ArrayD<f64>, shape: &[usize]) -> ArrayD<f64> {
    if x.shape() == shape {
        return x.clone();
    }
    let lead = x.ndim() - shape.len();
    let mut out = x.clone();
    for _ in 0..lead {
        out = out.sum_axis(Axis(0));
    }
    for (i, &d) in shape.iter().enumerate() {
        if d == 1 && out.shape()[i] != 1 {
            let collapsed = out.sum_axis(Axis(i));
            out = collapsed.insert_axis(Axis(i));
        }
    }
    out
}

fn stable_softplus(x: f64, beta: f64) -> f64 {
    let bx = beta * x;
    if bx > 30.0 {
        x
    } else if bx < -30.0 {
        (bx).exp() / beta
    } else {
        (1.0 + bx.exp()).ln() / beta
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.inner.borrow().nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn same_tape(&self, other: &Tape) -> bool {
        Rc::ptr_eq(&self.inner, &other.inner)
    }

    fn push(&self, op: Op, value: ArrayD<f64>) -> Var {
        let mut inner = self.inner.borrow_mut();
        debug_assert!(
            op.inputs().iter().all(|&i| i < inner.nodes.len()),
            "tape inputs must precede the node"
        );
        inner.nodes.push(Node { op, value });
        Var { tape: self.clone(), id: inner.nodes.len() - 1 }
    }

    fn value_of(&self, id: NodeId) -> ArrayD<f64> {
        self.inner.borrow().nodes[id].value.clone()
    }

    fn shape_of(&self, id: NodeId) -> Vec<usize> {
        self.inner.borrow().nodes[id].value.shape().to_vec()
    }

    /// Record an input node holding `value`.
    pub fn input(&self, value: ArrayD<f64>) -> Var {
        self.push(Op::Leaf, value)
    }

    pub fn scalar(&self, v: f64) -> Var {
        self.input(scalar_array(v))
    }

    pub fn vector(&self, v: &[f64]) -> Var {
        self.input(ArrayD::from_shape_vec(IxDyn(&[v.len()]), v.to_vec()).unwrap())
    }

    pub fn zeros(&self, shape: &[usize]) -> Var {
        self.input(ArrayD::zeros(IxDyn(shape)))
    }

    /// Record `op` referencing already-recorded inputs; the single entry point
    /// for every primitive. Validates shapes and evaluates the forward value.
    pub fn apply(&self, op: Op) -> Result<Var, DiffError> {
        let value = self.eval(&op)?;
        Ok(self.push(op, value))
    }

    fn eval(&self, op: &Op) -> Result<ArrayD<f64>, DiffError> {
        let inner = self.inner.borrow();
        let val = |id: NodeId| &inner.nodes[id].value;
        let mismatch = |op: &Op, ids: &[NodeId]| DiffError::ShapeMismatch {
            op: op.name(),
            shapes: ids.iter().map(|&i| val(i).shape().to_vec()).collect(),
        };

        let bin = |a: NodeId, b: NodeId, f: fn(f64, f64) -> f64| -> Result<ArrayD<f64>, DiffError> {
            let (xa, xb) = (val(a), val(b));
            let shape = broadcast_shape(xa.shape(), xb.shape()).ok_or_else(|| mismatch(op, &[a, b]))?;
            let ba = xa.broadcast(IxDyn(&shape)).unwrap();
            let bb = xb.broadcast(IxDyn(&shape)).unwrap();
            let mut out = ba.to_owned();
            out.zip_mut_with(&bb, |x, &y| *x = f(*x, y));
            Ok(out)
        };
        let un = |a: NodeId, f: fn(f64) -> f64| -> Result<ArrayD<f64>, DiffError> {
            Ok(val(a).mapv(f))
        };

        match *op {
            Op::Leaf => unreachable!("leaves carry their value at creation"),
            Op::Add(a, b) => bin(a, b, |x, y| x + y),
            Op::Sub(a, b) => bin(a, b, |x, y| x - y),
            Op::Mul(a, b) => bin(a, b, |x, y| x * y),
            Op::Div(a, b) => bin(a, b, |x, y| x / y),
            Op::MaxElem(a, b) => bin(a, b, f64::max),
            Op::MinElem(a, b) => bin(a, b, f64::min),
            Op::Neg(a) => un(a, |x| -x),
            Op::Exp(a) => un(a, f64::exp),
            Op::Ln(a) => un(a, f64::ln),
            Op::Sqrt(a) => un(a, f64::sqrt),
            Op::Sin(a) => un(a, f64::sin),
            Op::Cos(a) => un(a, f64::cos),
            Op::Sigmoid(a) => un(a, sigmoid),
            Op::Relu(a) => un(a, |x| x.max(0.0)),
            Op::Softplus { x, beta } => Ok(val(x).mapv(|v| stable_softplus(v, beta))),
            Op::PowConst { x, c } => Ok(val(x).mapv(|v| v.powf(c))),
            Op::MatMul(a, b) => {
                let (xa, xb) = (val(a), val(b));
                if xa.ndim() != 2 || xb.ndim() != 2 || xa.shape()[1] != xb.shape()[0] {
                    return Err(mismatch(op, &[a, b]));
                }
                let va = xa.view().into_dimensionality::<Ix2>().unwrap();
                let vb = xb.view().into_dimensionality::<Ix2>().unwrap();
                Ok(va.dot(&vb).into_dyn())
            }
            Op::Transpose(a) => {
                let xa = val(a);
                if xa.ndim() != 2 {
                    return Err(mismatch(op, &[a]));
                }
                Ok(xa.t().to_owned())
            }
            Op::Sum(a) => Ok(scalar_array(val(a).sum())),
            Op::SumTo { x, ref shape } => {
                let xv = val(x);
                if broadcast_shape(xv.shape(), shape) != Some(xv.shape().to_vec()) {
                    return Err(mismatch(op, &[x]));
                }
                Ok(sum_to(xv, shape))
            }
            Op::BroadcastTo { x, ref shape } => {
                let xv = val(x);
                if broadcast_shape(xv.shape(), shape) != Some(shape.clone()) {
                    return Err(mismatch(op, &[x]));
                }
                Ok(broadcast_to(xv, shape))
            }
            Op::ProdAxis { x, axis } => {
                let xv = val(x);
                if axis >= xv.ndim() {
                    return Err(mismatch(op, &[x]));
                }
                Ok(xv.map_axis(Axis(axis), |lane| lane.product()))
            }
            Op::Reshape { x, ref shape } => {
                let xv = val(x);
                if xv.len() != shape.iter().product::<usize>() {
                    return Err(mismatch(op, &[x]));
                }
                Ok(xv
                    .to_shape(IxDyn(shape))
                    .map_err(|_| mismatch(op, &[x]))?
                    .to_owned())
            }
            Op::SliceCols { x, start, end } => {
                let xv = val(x);
                if xv.ndim() != 2 || start > end || end > xv.shape()[1] {
                    return Err(mismatch(op, &[x]));
                }
                Ok(xv.slice(ndarray::s![.., start..end]).to_owned().into_dyn())
            }
            Op::PadCols { x, total, start } => {
                let xv = val(x);
                if xv.ndim() != 2 || start + xv.shape()[1] > total {
                    return Err(mismatch(op, &[x]));
                }
                let (n, w) = (xv.shape()[0], xv.shape()[1]);
                let mut out = ArrayD::zeros(IxDyn(&[n, total]));
                out.slice_mut(ndarray::s![.., start..start + w]).assign(xv);
                Ok(out)
            }
            Op::ConcatCols(ref xs) => {
                if xs.is_empty() || xs.iter().any(|&i| val(i).ndim() != 2) {
                    return Err(mismatch(op, xs));
                }
                let n = val(xs[0]).shape()[0];
                if xs.iter().any(|&i| val(i).shape()[0] != n) {
                    return Err(mismatch(op, xs));
                }
                let views: Vec<_> = xs
                    .iter()
                    .map(|&i| val(i).view().into_dimensionality::<Ix2>().unwrap())
                    .collect();
                let out = ndarray::concatenate(Axis(1), &views).unwrap();
                Ok(out.into_dyn())
            }
            Op::Gather { x, ref rows } => {
                let xv = val(x);
                if xv.ndim() != 2 || rows.iter().any(|&r| r >= xv.shape()[0]) {
                    return Err(mismatch(op, &[x]));
                }
                let v2 = xv.view().into_dimensionality::<Ix2>().unwrap();
                let mut out = ndarray::Array2::zeros((rows.len(), xv.shape()[1]));
                for (i, &r) in rows.iter().enumerate() {
                    out.row_mut(i).assign(&v2.row(r));
                }
                Ok(out.into_dyn())
            }
            Op::ScatterRows { x, ref rows, total } => {
                let xv = val(x);
                if xv.ndim() != 2 || xv.shape()[0] != rows.len() || rows.iter().any(|&r| r >= total) {
                    return Err(mismatch(op, &[x]));
                }
                let v2 = xv.view().into_dimensionality::<Ix2>().unwrap();
                let mut out = ndarray::Array2::zeros((total, xv.shape()[1]));
                for (i, &r) in rows.iter().enumerate() {
                    let mut row = out.row_mut(r);
                    row += &v2.row(i);
                }
                Ok(out.into_dyn())
            }
        }
    }
}

macro_rules! unary_method {
    ($name:ident, $variant:ident) => {
        pub fn $name(&self) -> Var {
            self.tape.apply(Op::$variant(self.id)).unwrap()
        }
    };
}

impl Var {
    pub fn id(&self) -> NodeId {
        self.id
    }

    pub fn tape(&self) -> &Tape {
        &self.tape
    }

    pub fn value(&self) -> ArrayD<f64> {
        self.tape.value_of(self.id)
    }

    pub fn scalar_value(&self) -> f64 {
        let v = self.value();
        debug_assert_eq!(v.len(), 1, "scalar_value on non-scalar");
        *v.iter().next().unwrap()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.shape_of(self.id)
    }

    /// Re-enter the value as a fresh leaf: same numbers, no gradient history.
    pub fn detach(&self) -> Var {
        self.tape.input(self.value())
    }

    fn bin(&self, other: &Var, make: fn(NodeId, NodeId) -> Op) -> Var {
        assert!(self.tape.same_tape(&other.tape), "variables from different tapes");
        self.tape.apply(make(self.id, other.id)).unwrap()
    }

    unary_method!(exp, Exp);
    unary_method!(ln, Ln);
    unary_method!(sqrt, Sqrt);
    unary_method!(sin, Sin);
    unary_method!(cos, Cos);
    unary_method!(sigmoid, Sigmoid);
    unary_method!(relu, Relu);
    unary_method!(neg, Neg);
    unary_method!(t, Transpose);
    unary_method!(sum, Sum);

    pub fn softplus(&self, beta: f64) -> Var {
        self.tape.apply(Op::Softplus { x: self.id, beta }).unwrap()
    }

    pub fn powc(&self, c: f64) -> Var {
        self.tape.apply(Op::PowConst { x: self.id, c }).unwrap()
    }

    pub fn square(&self) -> Var {
        self.bin(self, Op::Mul)
    }

    pub fn maxe(&self, other: &Var) -> Var {
        self.bin(other, Op::MaxElem)
    }

    pub fn mine(&self, other: &Var) -> Var {
        self.bin(other, Op::MinElem)
    }

    pub fn matmul(&self, other: &Var) -> Var {
        self.bin(other, Op::MatMul)
    }

    pub fn sum_to(&self, shape: &[usize]) -> Var {
        self.tape.apply(Op::SumTo { x: self.id, shape: shape.to_vec() }).unwrap()
    }

    pub fn broadcast(&self, shape: &[usize]) -> Var {
        self.tape.apply(Op::BroadcastTo { x: self.id, shape: shape.to_vec() }).unwrap()
    }

    pub fn prod_axis(&self, axis: usize) -> Var {
        self.tape.apply(Op::ProdAxis { x: self.id, axis }).unwrap()
    }

    pub fn reshape(&self, shape: &[usize]) -> Var {
        self.tape.apply(Op::Reshape { x: self.id, shape: shape.to_vec() }).unwrap()
    }

    pub fn slice_cols(&self, start: usize, end: usize) -> Var {
        self.tape.apply(Op::SliceCols { x: self.id, start, end }).unwrap()
    }

    pub fn gather(&self, rows: &[usize]) -> Var {
        self.tape
            .apply(Op::Gather { x: self.id, rows: Rc::new(rows.to_vec()) })
            .unwrap()
    }

    pub fn mean(&self) -> Var {
        let n = self.value().len() as f64;
        &self.sum() * (1.0 / n)
    }

    /// Mean along one axis.
    pub fn mean_axis(&self, axis: usize) -> Var {
        let shape = self.shape();
        let mut target = shape.clone();
        target[axis] = 1;
        let reduced = self.sum_to(&target);
        let mut out_shape = shape.clone();
        out_shape.remove(axis);
        &reduced.reshape(&out_shape) * (1.0 / shape[axis] as f64)
    }

    pub fn abs(&self) -> Var {
        self.maxe(&self.neg())
    }

    pub fn clamp_min(&self, lo: f64) -> Var {
        let c = self.tape.scalar(lo);
        self.maxe(&c)
    }

    pub fn clamp_max(&self, hi: f64) -> Var {
        let c = self.tape.scalar(hi);
        self.mine(&c)
    }
}

pub fn concat_cols(vars: &[&Var]) -> Var {
    assert!(!vars.is_empty());
    let tape = vars[0].tape.clone();
    assert!(vars.iter().all(|v| tape.same_tape(&v.tape)));
    tape.apply(Op::ConcatCols(vars.iter().map(|v| v.id).collect())).unwrap()
}

macro_rules! binop {
    ($trait:ident, $method:ident, $variant:ident) => {
        impl std::ops::$trait for &Var {
            type Output = Var;
            fn $method(self, rhs: &Var) -> Var {
                self.bin(rhs, Op::$variant)
            }
        }
        impl std::ops::$trait<f64> for &Var {
            type Output = Var;
            fn $method(self, rhs: f64) -> Var {
                let c = self.tape.scalar(rhs);
                self.bin(&c, Op::$variant)
            }
        }
    };
}

binop!(Add, add, Add);
binop!(Sub, sub, Sub);
binop!(Mul, mul, Mul);
binop!(Div, div, Div);

impl std::ops::Neg for &Var {
    type Output = Var;
    fn neg(self) -> Var {
        Var::neg(self)
    }
}

/// Gradients of `sum(output)` with respect to each of `wrt`, returned as new
/// differentiable tape variables (reverse accumulation emitting VJP nodes).
pub fn grad(output: &Var, wrt: &[&Var]) -> Vec<Var> {
    let tape = output.tape.clone();
    for w in wrt {
        assert!(tape.same_tape(&w.tape), "grad: variables from different tapes");
    }
    let limit = output.id + 1;

    // Reachability of `output` from below, over the original node range.
    let ops: Vec<Op> = {
        let inner = tape.inner.borrow();
        inner.nodes[..limit].iter().map(|n| n.op.clone()).collect()
    };
    let mut reachable = vec![false; limit];
    reachable[output.id] = true;
    for id in (0..limit).rev() {
        if reachable[id] {
            for i in ops[id].inputs() {
                reachable[i] = true;
            }
        }
    }

    let mut adjoints: HashMap<NodeId, Var> = HashMap::new();
    let seed_shape = output.shape();
    let seed = tape.input(ArrayD::from_elem(IxDyn(&seed_shape), 1.0));
    adjoints.insert(output.id, seed);

    let accumulate = |adjoints: &mut HashMap<NodeId, Var>, id: NodeId, contrib: Var| {
        // Adjoints of broadcasting ops may arrive in the broadcast shape;
        // reduce to the node's own shape before accumulating.
        let own_shape = tape.shape_of(id);
        let contrib = if contrib.shape() == own_shape { contrib } else { contrib.sum_to(&own_shape) };
        match adjoints.remove(&id) {
            Some(prev) => {
                let s = &prev + &contrib;
                adjoints.insert(id, s);
            }
            None => {
                adjoints.insert(id, contrib);
            }
        }
    };

    let var_at = |id: NodeId| Var { tape: tape.clone(), id };

    for id in (0..limit).rev() {
        if !reachable[id] {
            continue;
        }
        let Some(g) = adjoints.get(&id).cloned() else { continue };
        let op = ops[id].clone();
        match op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                accumulate(&mut adjoints, a, g.clone());
                accumulate(&mut adjoints, b, g);
            }
            Op::Sub(a, b) => {
                accumulate(&mut adjoints, a, g.clone());
                accumulate(&mut adjoints, b, g.neg());
            }
            Op::Mul(a, b) => {
                accumulate(&mut adjoints, a, &g * &var_at(b));
                accumulate(&mut adjoints, b, &g * &var_at(a));
            }
            Op::Div(a, b) => {
                let vb = var_at(b);
                accumulate(&mut adjoints, a, &g / &vb);
                let gb = &(&g.neg() * &var_at(a)) / &(&vb * &vb);
                accumulate(&mut adjoints, b, gb);
            }
            Op::Neg(a) => accumulate(&mut adjoints, a, g.neg()),
            Op::MatMul(a, b) => {
                let (va, vb) = (var_at(a), var_at(b));
                accumulate(&mut adjoints, a, g.matmul(&vb.t()));
                accumulate(&mut adjoints, b, va.t().matmul(&g));
            }
            Op::Transpose(a) => accumulate(&mut adjoints, a, g.t()),
            Op::Exp(a) => accumulate(&mut adjoints, a, &g * &var_at(id)),
            Op::Ln(a) => accumulate(&mut adjoints, a, &g / &var_at(a)),
            Op::Sqrt(a) => {
                let ga = &(&g * 0.5) / &var_at(id);
                accumulate(&mut adjoints, a, ga);
            }
            Op::Sin(a) => accumulate(&mut adjoints, a, &g * &var_at(a).cos()),
            Op::Cos(a) => accumulate(&mut adjoints, a, &g.neg() * &var_at(a).sin()),
            Op::Sigmoid(a) => {
                let y = var_at(id);
                let one = tape.scalar(1.0);
                let ga = &g * &(&y * &(&one - &y));
                accumulate(&mut adjoints, a, ga);
            }
            Op::Softplus { x, beta } => {
                let ga = &g * &(&var_at(x) * beta).sigmoid();
                accumulate(&mut adjoints, x, ga);
            }
            Op::Relu(a) => {
                let mask = tape.input(tape.value_of(a).mapv(|v| if v > 0.0 { 1.0 } else { 0.0 }));
                accumulate(&mut adjoints, a, &g * &mask);
            }
            Op::MaxElem(a, b) | Op::MinElem(a, b) => {
                // First argument wins ties; masks are constants (a.e. exact).
                let is_max = matches!(ops[id], Op::MaxElem(..));
                let (xa, xb) = (tape.value_of(a), tape.value_of(b));
                let shape = broadcast_shape(xa.shape(), xb.shape()).unwrap();
                let ba = xa.broadcast(IxDyn(&shape)).unwrap().to_owned();
                let bb = xb.broadcast(IxDyn(&shape)).unwrap().to_owned();
                let mut mask_a = ba.clone();
                mask_a.zip_mut_with(&bb, |x, &y| {
                    let a_wins = if is_max { *x >= y } else { *x <= y };
                    *x = if a_wins { 1.0 } else { 0.0 };
                });
                let mask_b = mask_a.mapv(|m| 1.0 - m);
                let (ma, mb) = (tape.input(mask_a), tape.input(mask_b));
                accumulate(&mut adjoints, a, &g * &ma);
                accumulate(&mut adjoints, b, &g * &mb);
            }
            Op::PowConst { x, c } => {
                let gx = &(&g * c) * &var_at(x).powc(c - 1.0);
                accumulate(&mut adjoints, x, gx);
            }
            Op::Sum(a) => {
                let shape = tape.shape_of(a);
                accumulate(&mut adjoints, a, g.broadcast(&shape));
            }
            Op::SumTo { x, .. } => {
                let shape = tape.shape_of(x);
                accumulate(&mut adjoints, x, g.broadcast(&shape));
            }
            Op::BroadcastTo { x, .. } => {
                let shape = tape.shape_of(x);
                accumulate(&mut adjoints, x, g.sum_to(&shape));
            }
            Op::ProdAxis { x, axis } => {
                // d prod / d x_i = prod / x_i. Callers keep factors away from 0.
                let shape = tape.shape_of(x);
                let mut unsq = tape.shape_of(id);
                unsq.insert(axis, 1);
                let expand = |v: &Var| v.reshape(&unsq).broadcast(&shape);
                let gx = &(&expand(&g) * &expand(&var_at(id))) / &var_at(x);
                accumulate(&mut adjoints, x, gx);
            }
            Op::Reshape { x, .. } => {
                let shape = tape.shape_of(x);
                accumulate(&mut adjoints, x, g.reshape(&shape));
            }
            Op::SliceCols { x, start, .. } => {
                let total = tape.shape_of(x)[1];
                let gx = tape.apply(Op::PadCols { x: g.id, total, start }).unwrap();
                accumulate(&mut adjoints, x, gx);
            }
            Op::PadCols { x, start, .. } => {
                let w = tape.shape_of(x)[1];
                let gx = g.slice_cols(start, start + w);
                accumulate(&mut adjoints, x, gx);
            }
            Op::ConcatCols(xs) => {
                let mut start = 0;
                for xi in xs {
                    let w = tape.shape_of(xi)[1];
                    let gx = g.slice_cols(start, start + w);
                    accumulate(&mut adjoints, xi, gx);
                    start += w;
                }
            }
            Op::Gather { x, rows } => {
                let total = tape.shape_of(x)[0];
                let gx = tape
                    .apply(Op::ScatterRows { x: g.id, rows: rows.clone(), total })
                    .unwrap();
                accumulate(&mut adjoints, x, gx);
            }
            Op::ScatterRows { x, rows, .. } => {
                let gx = tape
                    .apply(Op::Gather { x: g.id, rows: rows.clone() })
                    .unwrap();
                accumulate(&mut adjoints, x, gx);
            }
        }
    }

    wrt.iter()
        .map(|w| match adjoints.get(&w.id) {
            Some(v) => v.clone(),
            None => tape.input(ArrayD::zeros(IxDyn(&w.shape()))),
        })
        .collect()
}

/// Reverse accumulation from a scalar loss; returns the gradient arrays for
/// the given parameter variables.
pub fn backward(loss: &Var, params: &[&Var]) -> Result<Vec<ArrayD<f64>>, DiffError> {
    if !loss.shape().is_empty() && loss.value().len() != 1 {
        return Err(DiffError::NonScalarLoss(loss.shape()));
    }
    Ok(grad(loss, params).iter().map(|v| v.value()).collect())
}
