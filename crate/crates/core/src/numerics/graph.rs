//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every primitive applied to its [`Var`]s in creation
//! order, which is already a topological order. [`backward`] sweeps the tape
//! once in reverse and returns plain gradient tensors; [`grad`] performs the
//! same sweep but records the adjoint computations on the tape, so the
//! resulting gradients are themselves differentiable. The latter is what the
//! gradient-norm penalty and backprop-through-Langevin chains rely on.
//!
//! The vector-Jacobian products are written once against the [`Ad`] trait and
//! instantiated for both plain tensors and recorded variables.

use std::cell::RefCell;
use std::rc::Rc;

use super::rng::RngStream;
use super::tensor::{self, Tensor};
use super::NumericsError;

type Result<T> = std::result::Result<T, NumericsError>;

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul { ta: bool, tb: bool },
    Add,
    Sub,
    Mul,
    Div,
    Scale(f64),
    AddScalar,
    AddRow,
    SumRows,
    BroadcastRows,
    SumCols,
    BroadcastCols,
    Sum,
    Mean,
    BroadcastScalar,
    MulScalar,
    Abs(Rc<Tensor>),
    Square,
    LeakyRelu(Rc<Tensor>),
    Softplus,
    Sigmoid,
    Exp,
    Log,
}

struct Node {
    value: Rc<Tensor>,
    op: Op,
    parents: Vec<usize>,
    requires_grad: bool,
}

/// A differentiation tape. Cloning yields another handle to the same tape.
#[derive(Clone, Default)]
pub struct Graph {
    nodes: Rc<RefCell<Vec<Node>>>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    /// Number of recorded nodes.
    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// A trainable leaf: gradients flow to it.
    pub fn param(&self, value: Tensor) -> Var {
        self.push(Rc::new(value), Op::Leaf, Vec::new(), true)
    }

    /// A constant leaf: no gradient is tracked through it.
    pub fn constant(&self, value: Tensor) -> Var {
        self.push(Rc::new(value), Op::Leaf, Vec::new(), false)
    }

    pub fn scalar(&self, value: f64) -> Var {
        self.constant(Tensor::scalar(value))
    }

    /// Standard-normal constant drawn from `rng`.
    pub fn randn(&self, shape: impl Into<Vec<usize>>, rng: &mut RngStream) -> Var {
        self.constant(Tensor::randn(shape, rng))
    }

    fn constant_rc(&self, value: Rc<Tensor>) -> Var {
        self.push(value, Op::Leaf, Vec::new(), false)
    }

    fn push(&self, value: Rc<Tensor>, op: Op, parents: Vec<usize>, requires_grad: bool) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        let id = nodes.len();
        nodes.push(Node {
            value: value.clone(),
            op,
            parents,
            requires_grad,
        });
        Var {
            graph: self.clone(),
            id,
            value,
            requires_grad,
        }
    }

    fn handle(&self, id: usize) -> Var {
        let nodes = self.nodes.borrow();
        let n = &nodes[id];
        Var {
            graph: self.clone(),
            id,
            value: n.value.clone(),
            requires_grad: n.requires_grad,
        }
    }

    fn same(&self, other: &Graph) -> bool {
        Rc::ptr_eq(&self.nodes, &other.nodes)
    }
}

/// A value recorded on a [`Graph`].
#[derive(Clone)]
pub struct Var {
    graph: Graph,
    id: usize,
    value: Rc<Tensor>,
    requires_grad: bool,
}

impl std::fmt::Debug for Var {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}({:?})", self.id, self.value)
    }
}

impl Var {
    pub fn value(&self) -> &Tensor {
        &self.value
    }

    pub fn shape(&self) -> &[usize] {
        self.value.shape()
    }

    pub fn item(&self) -> f64 {
        self.value.item()
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn graph(&self) -> &Graph {
        &self.graph
    }

    /// The same value as a constant, cutting gradient flow.
    pub fn detach(&self) -> Var {
        self.graph.constant_rc(self.value.clone())
    }

    fn check_graph(&self, other: &Var, op: &'static str) -> Result<()> {
        if self.graph.same(&other.graph) {
            Ok(())
        } else {
            Err(NumericsError::ForeignGraph { op })
        }
    }

    fn record(&self, value: Tensor, op: Op, name: &'static str) -> Result<Var> {
        let value = value.check_finite(name)?;
        Ok(self.graph.push(Rc::new(value), op, vec![self.id], self.requires_grad))
    }

    fn record2(&self, other: &Var, value: Tensor, op: Op, name: &'static str) -> Result<Var> {
        self.check_graph(other, name)?;
        let value = value.check_finite(name)?;
        Ok(self.graph.push(
            Rc::new(value),
            op,
            vec![self.id, other.id],
            self.requires_grad || other.requires_grad,
        ))
    }

    /// Matrix product `self · other`.
    pub fn matmul(&self, other: &Var) -> Result<Var> {
        self.mm(other, false, false)
    }

    /// `self · otherᵀ`, the dense-layer product with a `[out, in]` weight.
    pub fn matmul_t(&self, other: &Var) -> Result<Var> {
        self.mm(other, false, true)
    }

    fn mm(&self, other: &Var, ta: bool, tb: bool) -> Result<Var> {
        let v = tensor::matmul(&self.value, &other.value, ta, tb)?;
        self.record2(other, v, Op::MatMul { ta, tb }, "matmul")
    }

    pub fn add(&self, other: &Var) -> Result<Var> {
        let v = self.value.zip(&other.value, "add", |a, b| a + b)?;
        self.record2(other, v, Op::Add, "add")
    }

    pub fn sub(&self, other: &Var) -> Result<Var> {
        let v = self.value.zip(&other.value, "sub", |a, b| a - b)?;
        self.record2(other, v, Op::Sub, "sub")
    }

    /// Elementwise product.
    pub fn mul(&self, other: &Var) -> Result<Var> {
        let v = self.value.zip(&other.value, "mul", |a, b| a * b)?;
        self.record2(other, v, Op::Mul, "mul")
    }

    /// Elementwise quotient.
    pub fn div(&self, other: &Var) -> Result<Var> {
        let v = self.value.zip(&other.value, "div", |a, b| a / b)?;
        self.record2(other, v, Op::Div, "div")
    }

    pub fn scale(&self, c: f64) -> Result<Var> {
        self.record(self.value.map(|a| a * c), Op::Scale(c), "scale")
    }

    pub fn neg(&self) -> Result<Var> {
        self.scale(-1.0)
    }

    pub fn add_scalar(&self, c: f64) -> Result<Var> {
        self.record(self.value.map(|a| a + c), Op::AddScalar, "add_scalar")
    }

    /// Adds a `[cols]` row vector to every row of a `[rows, cols]` matrix.
    pub fn add_row(&self, row: &Var) -> Result<Var> {
        let v = tensor::add_row(&self.value, &row.value)?;
        self.record2(row, v, Op::AddRow, "add_row")
    }

    /// Sums over rows, `[r, c] -> [c]`.
    pub fn sum_rows(&self) -> Result<Var> {
        let v = tensor::sum_rows(&self.value)?;
        self.record(v, Op::SumRows, "sum_rows")
    }

    pub fn broadcast_rows(&self, n: usize) -> Result<Var> {
        let v = tensor::broadcast_rows(&self.value, n);
        self.record(v, Op::BroadcastRows, "broadcast_rows")
    }

    /// Sums over columns, `[r, c] -> [r, 1]`.
    pub fn sum_cols(&self) -> Result<Var> {
        let v = tensor::sum_cols(&self.value)?;
        self.record(v, Op::SumCols, "sum_cols")
    }

    pub fn broadcast_cols(&self, n: usize) -> Result<Var> {
        if self.value.cols() != 1 || self.value.shape().len() != 2 {
            return Err(NumericsError::ShapeMismatch {
                op: "broadcast_cols",
                lhs: self.shape().to_vec(),
                rhs: vec![self.value.rows(), 1],
            });
        }
        let v = tensor::broadcast_cols(&self.value, n);
        self.record(v, Op::BroadcastCols, "broadcast_cols")
    }

    /// Sum of all elements, as a scalar.
    pub fn sum(&self) -> Result<Var> {
        self.record(Tensor::scalar(Tensor::sum(&self.value)), Op::Sum, "sum")
    }

    pub fn mean(&self) -> Result<Var> {
        let n = self.value.len().max(1) as f64;
        self.record(Tensor::scalar(Tensor::sum(&self.value) / n), Op::Mean, "mean")
    }

    /// Expands a scalar to `shape`.
    pub fn broadcast_scalar(&self, shape: &[usize]) -> Result<Var> {
        self.expect_scalar("broadcast_scalar")?;
        let v = Tensor::full(shape.to_vec(), self.value.item());
        self.record(v, Op::BroadcastScalar, "broadcast_scalar")
    }

    /// Multiplies every element by the scalar variable `s`.
    pub fn mul_scalar(&self, s: &Var) -> Result<Var> {
        s.expect_scalar("mul_scalar")?;
        let c = s.value.item();
        let v = self.value.map(|a| a * c);
        self.record2(s, v, Op::MulScalar, "mul_scalar")
    }

    fn expect_scalar(&self, op: &'static str) -> Result<()> {
        if self.value.shape().is_empty() {
            Ok(())
        } else {
            Err(NumericsError::ShapeMismatch {
                op,
                lhs: self.shape().to_vec(),
                rhs: Vec::new(),
            })
        }
    }

    pub fn abs(&self) -> Result<Var> {
        let sign = Rc::new(self.value.map(|a| {
            if a > 0.0 {
                1.0
            } else if a < 0.0 {
                -1.0
            } else {
                0.0
            }
        }));
        self.record(self.value.map(f64::abs), Op::Abs(sign), "abs")
    }

    pub fn square(&self) -> Result<Var> {
        self.record(self.value.map(|a| a * a), Op::Square, "square")
    }

    /// `Σ|x|`.
    pub fn l1_norm(&self) -> Result<Var> {
        self.abs()?.sum()
    }

    /// `Σx²`.
    pub fn sq_l2_norm(&self) -> Result<Var> {
        self.square()?.sum()
    }

    pub fn leaky_relu(&self, slope: f64) -> Result<Var> {
        let mask = Rc::new(self.value.map(|a| if a > 0.0 { 1.0 } else { slope }));
        let v = self.value.zip(&mask, "leaky_relu", |a, m| a * m)?;
        self.record(v, Op::LeakyRelu(mask), "leaky_relu")
    }

    /// `log(1 + exp(x))`.
    pub fn softplus(&self) -> Result<Var> {
        self.record(self.value.map(tensor::softplus), Op::Softplus, "softplus")
    }

    pub fn sigmoid(&self) -> Result<Var> {
        self.record(self.value.map(tensor::sigmoid), Op::Sigmoid, "sigmoid")
    }

    pub fn exp(&self) -> Result<Var> {
        self.record(self.value.map(f64::exp), Op::Exp, "exp")
    }

    pub fn log(&self) -> Result<Var> {
        self.record(self.value.map(f64::ln), Op::Log, "log")
    }
}

/// Arithmetic shared by plain tensors and recorded variables, so each
/// vector-Jacobian product is written once.
trait Ad: Clone + Sized {
    fn constant(&self, t: Rc<Tensor>) -> Self;
    fn val(&self) -> &Tensor;
    fn mm(&self, o: &Self, ta: bool, tb: bool) -> Result<Self>;
    fn add(&self, o: &Self) -> Result<Self>;
    fn mul(&self, o: &Self) -> Result<Self>;
    fn div(&self, o: &Self) -> Result<Self>;
    fn scale(&self, c: f64) -> Result<Self>;
    fn add_scalar(&self, c: f64) -> Result<Self>;
    fn sum_rows(&self) -> Result<Self>;
    fn broadcast_rows(&self, n: usize) -> Result<Self>;
    fn sum_cols(&self) -> Result<Self>;
    fn broadcast_cols(&self, n: usize) -> Result<Self>;
    fn sum(&self) -> Result<Self>;
    fn broadcast_scalar(&self, shape: &[usize]) -> Result<Self>;
    fn mul_scalar(&self, s: &Self) -> Result<Self>;
    fn sigmoid(&self) -> Result<Self>;
}

impl Ad for Rc<Tensor> {
    fn constant(&self, t: Rc<Tensor>) -> Self {
        t
    }
    fn val(&self) -> &Tensor {
        self
    }
    fn mm(&self, o: &Self, ta: bool, tb: bool) -> Result<Self> {
        Ok(Rc::new(tensor::matmul(self, o, ta, tb)?))
    }
    fn add(&self, o: &Self) -> Result<Self> {
        Ok(Rc::new(self.zip(o, "add", |a, b| a + b)?))
    }
    fn mul(&self, o: &Self) -> Result<Self> {
        Ok(Rc::new(self.zip(o, "mul", |a, b| a * b)?))
    }
    fn div(&self, o: &Self) -> Result<Self> {
        Ok(Rc::new(self.zip(o, "div", |a, b| a / b)?))
    }
    fn scale(&self, c: f64) -> Result<Self> {
        Ok(Rc::new(self.map(|a| a * c)))
    }
    fn add_scalar(&self, c: f64) -> Result<Self> {
        Ok(Rc::new(self.map(|a| a + c)))
    }
    fn sum_rows(&self) -> Result<Self> {
        Ok(Rc::new(tensor::sum_rows(self)?))
    }
    fn broadcast_rows(&self, n: usize) -> Result<Self> {
        Ok(Rc::new(tensor::broadcast_rows(self, n)))
    }
    fn sum_cols(&self) -> Result<Self> {
        Ok(Rc::new(tensor::sum_cols(self)?))
    }
    fn broadcast_cols(&self, n: usize) -> Result<Self> {
        Ok(Rc::new(tensor::broadcast_cols(self, n)))
    }
    fn sum(&self) -> Result<Self> {
        Ok(Rc::new(Tensor::scalar(Tensor::sum(self))))
    }
    fn broadcast_scalar(&self, shape: &[usize]) -> Result<Self> {
        Ok(Rc::new(Tensor::full(shape.to_vec(), self.item())))
    }
    fn mul_scalar(&self, s: &Self) -> Result<Self> {
        let c = s.item();
        Ok(Rc::new(self.map(|a| a * c)))
    }
    fn sigmoid(&self) -> Result<Self> {
        Ok(Rc::new(self.map(tensor::sigmoid)))
    }
}

impl Ad for Var {
    fn constant(&self, t: Rc<Tensor>) -> Self {
        self.graph.constant_rc(t)
    }
    fn val(&self) -> &Tensor {
        &self.value
    }
    fn mm(&self, o: &Self, ta: bool, tb: bool) -> Result<Self> {
        Var::mm(self, o, ta, tb)
    }
    fn add(&self, o: &Self) -> Result<Self> {
        Var::add(self, o)
    }
    fn mul(&self, o: &Self) -> Result<Self> {
        Var::mul(self, o)
    }
    fn div(&self, o: &Self) -> Result<Self> {
        Var::div(self, o)
    }
    fn scale(&self, c: f64) -> Result<Self> {
        Var::scale(self, c)
    }
    fn add_scalar(&self, c: f64) -> Result<Self> {
        Var::add_scalar(self, c)
    }
    fn sum_rows(&self) -> Result<Self> {
        Var::sum_rows(self)
    }
    fn broadcast_rows(&self, n: usize) -> Result<Self> {
        Var::broadcast_rows(self, n)
    }
    fn sum_cols(&self) -> Result<Self> {
        Var::sum_cols(self)
    }
    fn broadcast_cols(&self, n: usize) -> Result<Self> {
        Var::broadcast_cols(self, n)
    }
    fn sum(&self) -> Result<Self> {
        Var::sum(self)
    }
    fn broadcast_scalar(&self, shape: &[usize]) -> Result<Self> {
        Var::broadcast_scalar(self, shape)
    }
    fn mul_scalar(&self, s: &Self) -> Result<Self> {
        Var::mul_scalar(self, s)
    }
    fn sigmoid(&self) -> Result<Self> {
        Var::sigmoid(self)
    }
}

/// Adjoints of the (at most two) parents of `op`, given the output adjoint
/// `g`. Only parents flagged in `need` are computed.
fn vjp<T: Ad>(op: &Op, g: &T, parents: &[T], out: &T, need: [bool; 2]) -> Result<[Option<T>; 2]> {
    let a = &parents[0];
    let when = |flag: bool, f: &dyn Fn() -> Result<T>| -> Result<Option<T>> {
        if flag {
            f().map(Some)
        } else {
            Ok(None)
        }
    };
    let r = match op {
        Op::Leaf => [None, None],
        Op::MatMul { ta, tb } => {
            let b = &parents[1];
            let ga = when(need[0], &|| match (ta, tb) {
                (false, false) => g.mm(b, false, true),
                (false, true) => g.mm(b, false, false),
                (true, false) => b.mm(g, false, true),
                (true, true) => b.mm(g, true, true),
            })?;
            let gb = when(need[1], &|| match (ta, tb) {
                (false, false) => a.mm(g, true, false),
                (true, false) => a.mm(g, false, false),
                (false, true) => g.mm(a, true, false),
                (true, true) => g.mm(a, true, true),
            })?;
            [ga, gb]
        }
        Op::Add => [when(need[0], &|| Ok(g.clone()))?, when(need[1], &|| Ok(g.clone()))?],
        Op::Sub => [when(need[0], &|| Ok(g.clone()))?, when(need[1], &|| g.scale(-1.0))?],
        Op::Mul => {
            let b = &parents[1];
            [when(need[0], &|| g.mul(b))?, when(need[1], &|| g.mul(a))?]
        }
        Op::Div => {
            let b = &parents[1];
            [
                when(need[0], &|| g.div(b))?,
                when(need[1], &|| g.mul(out)?.div(b)?.scale(-1.0))?,
            ]
        }
        Op::Scale(c) => [Some(g.scale(*c)?), None],
        Op::AddScalar => [Some(g.clone()), None],
        Op::AddRow => [when(need[0], &|| Ok(g.clone()))?, when(need[1], &|| g.sum_rows())?],
        Op::SumRows => [Some(g.broadcast_rows(a.val().rows())?), None],
        Op::BroadcastRows => [Some(g.sum_rows()?), None],
        Op::SumCols => [Some(g.broadcast_cols(a.val().cols())?), None],
        Op::BroadcastCols => [Some(g.sum_cols()?), None],
        Op::Sum => [Some(g.broadcast_scalar(a.val().shape())?), None],
        Op::Mean => {
            let n = a.val().len().max(1) as f64;
            [Some(g.broadcast_scalar(a.val().shape())?.scale(1.0 / n)?), None]
        }
        Op::BroadcastScalar => [Some(g.sum()?), None],
        Op::MulScalar => {
            let s = &parents[1];
            [when(need[0], &|| g.mul_scalar(s))?, when(need[1], &|| g.mul(a)?.sum())?]
        }
        Op::Abs(sign) => [Some(g.mul(&g.constant(sign.clone()))?), None],
        Op::Square => [Some(g.mul(a)?.scale(2.0)?), None],
        Op::LeakyRelu(mask) => [Some(g.mul(&g.constant(mask.clone()))?), None],
        Op::Softplus => [Some(g.mul(&a.sigmoid()?)?), None],
        Op::Sigmoid => {
            let one_minus = out.scale(-1.0)?.add_scalar(1.0)?;
            [Some(g.mul(&out.mul(&one_minus)?)?), None]
        }
        Op::Exp => [Some(g.mul(out)?), None],
        Op::Log => [Some(g.div(a)?), None],
    };
    Ok(r)
}

/// Shared reverse sweep. `handle(id)` materialises node `id` in the adjoint
/// representation `T`; adjoints of ids in `keep` are returned.
fn sweep<T: Ad>(
    graph: &Graph,
    loss_id: usize,
    seed: T,
    keep: &[usize],
    handle: impl Fn(usize) -> T,
) -> Result<Vec<Option<T>>> {
    let n = loss_id + 1;
    // Only nodes downstream of a requested variable need adjoints; this
    // keeps a gradient taken mid-chain from sweeping the chain's history.
    let relevant = {
        let nodes = graph.nodes.borrow();
        let mut r = vec![false; n];
        for &k in keep {
            if k < n {
                r[k] = true;
            }
        }
        let start = keep.iter().copied().min().unwrap_or(n);
        for id in start..n {
            if !r[id] && nodes[id].parents.iter().any(|&p| r[p]) {
                r[id] = true;
            }
        }
        r
    };
    if !relevant[loss_id] {
        return Ok(vec![None; keep.len()]);
    }
    let mut adj: Vec<Option<T>> = vec![None; n];
    let mut kept: Vec<Option<T>> = vec![None; keep.len()];
    adj[loss_id] = Some(seed);
    for id in (0..n).rev() {
        let Some(g) = adj[id].take() else { continue };
        for (slot, &k) in kept.iter_mut().zip(keep) {
            if k == id {
                *slot = Some(g.clone());
            }
        }
        let (op, parents, need) = {
            let nodes = graph.nodes.borrow();
            let node = &nodes[id];
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let mut need = [false; 2];
            for (i, &p) in node.parents.iter().enumerate() {
                need[i] = nodes[p].requires_grad && relevant[p];
            }
            (node.op.clone(), node.parents.clone(), need)
        };
        let handles: Vec<T> = parents.iter().map(|&p| handle(p)).collect();
        let out = handle(id);
        let grads = vjp(&op, &g, &handles, &out, need)?;
        for ((&p, pg), needed) in parents.iter().zip(grads).zip(need) {
            let (Some(pg), true) = (pg, needed) else { continue };
            adj[p] = Some(match adj[p].take() {
                None => pg,
                Some(prev) => prev.add(&pg)?,
            });
        }
    }
    Ok(kept)
}

fn check_loss(loss: &Var, wrt: &[&Var]) -> Result<()> {
    if !loss.value.is_scalar() {
        return Err(NumericsError::NotScalar(loss.shape().to_vec()));
    }
    for w in wrt {
        loss.check_graph(w, "backward")?;
    }
    Ok(())
}

/// Gradients returned by [`backward`], aligned with the requested variables.
#[derive(Clone, Debug)]
pub struct Gradients {
    pub grads: Vec<Tensor>,
    /// `true` where the variable had no path to the loss; its gradient is zero.
    pub unreached: Vec<bool>,
}

impl Gradients {
    pub fn any_unreached(&self) -> bool {
        self.unreached.iter().any(|&u| u)
    }
}

/// Exact reverse-mode gradients of the scalar `loss` with respect to `wrt`.
pub fn backward(loss: &Var, wrt: &[&Var]) -> Result<Gradients> {
    check_loss(loss, wrt)?;
    let graph = &loss.graph;
    let keep: Vec<usize> = wrt.iter().map(|w| w.id).collect();
    let seed = Rc::new(Tensor::full(loss.shape().to_vec(), 1.0));
    let kept = if loss.requires_grad {
        sweep(graph, loss.id, seed, &keep, |id| graph.nodes.borrow()[id].value.clone())?
    } else {
        vec![None; keep.len()]
    };
    let mut grads = Vec::with_capacity(wrt.len());
    let mut unreached = Vec::with_capacity(wrt.len());
    for (w, g) in wrt.iter().zip(kept) {
        match g {
            Some(g) => {
                grads.push(Rc::try_unwrap(g).unwrap_or_else(|rc| (*rc).clone()));
                unreached.push(false);
            }
            None => {
                grads.push(Tensor::zeros(w.shape().to_vec()));
                unreached.push(true);
            }
        }
    }
    Ok(Gradients { grads, unreached })
}

/// Gradients of `loss` with respect to `wrt`, recorded on the graph so they
/// can be differentiated again.
pub fn grad(loss: &Var, wrt: &[&Var]) -> Result<Vec<Var>> {
    check_loss(loss, wrt)?;
    let graph = &loss.graph;
    let keep: Vec<usize> = wrt.iter().map(|w| w.id).collect();
    let seed = graph.constant(Tensor::full(loss.shape().to_vec(), 1.0));
    let kept = if loss.requires_grad {
        sweep(graph, loss.id, seed, &keep, |id| graph.handle(id))?
    } else {
        vec![None; keep.len()]
    };
    Ok(wrt
        .iter()
        .zip(kept)
        .map(|(w, g)| g.unwrap_or_else(|| graph.constant(Tensor::zeros(w.shape().to_vec()))))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol * (1.0 + a.abs().max(b.abs()))
    }

    #[test]
    fn half_squared_norm_gradient() {
        let g = Graph::new();
        let z = g.param(Tensor::vector(vec![1.0, -2.0]));
        let loss = z.sq_l2_norm().unwrap().scale(0.5).unwrap();
        let grads = backward(&loss, &[&z]).unwrap();
        assert_eq!(grads.grads[0].data(), &[1.0, -2.0]);
        assert!(!grads.any_unreached());
    }

    #[test]
    fn constant_loss_has_zero_gradients() {
        let g = Graph::new();
        let z = g.param(Tensor::vector(vec![3.0, 4.0]));
        let loss = g.scalar(5.0);
        let grads = backward(&loss, &[&z]).unwrap();
        assert_eq!(grads.grads[0].data(), &[0.0, 0.0]);
    }

    #[test]
    fn unused_param_is_flagged() {
        let g = Graph::new();
        let a = g.param(Tensor::scalar(2.0));
        let b = g.param(Tensor::vector(vec![1.0, 1.0]));
        let loss = a.square().unwrap();
        let grads = backward(&loss, &[&a, &b]).unwrap();
        assert_eq!(grads.grads[0].item(), 4.0);
        assert_eq!(grads.grads[1].data(), &[0.0, 0.0]);
        assert_eq!(grads.unreached, vec![false, true]);
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let g = Graph::new();
        let z = g.param(Tensor::vector(vec![1.0, 2.0]));
        assert!(matches!(backward(&z, &[&z]), Err(NumericsError::NotScalar(_))));
    }

    #[test]
    fn shared_subexpression_accumulates() {
        // f = x * x + x, f' = 2x + 1
        let g = Graph::new();
        let x = g.param(Tensor::scalar(3.0));
        let f = x.mul(&x).unwrap().add(&x).unwrap();
        let grads = backward(&f, &[&x]).unwrap();
        assert_eq!(grads.grads[0].item(), 7.0);
    }

    #[test]
    fn softplus_at_zero() {
        let g = Graph::new();
        let x = g.constant(Tensor::scalar(0.0));
        assert!(close(x.softplus().unwrap().item(), std::f64::consts::LN_2, 1e-12));
        let zero = g.constant(Tensor::zeros([5]));
        assert_eq!(zero.l1_norm().unwrap().item(), 0.0);
    }

    #[test]
    fn second_derivative_through_grad() {
        // f(x) = x³ → f'(x) = 3x², and d/dx (f'(x))² = 2·3x²·6x = 36x³.
        let g = Graph::new();
        let x = g.param(Tensor::scalar(1.5));
        let f = x.mul(&x).unwrap().mul(&x).unwrap();
        let df = grad(&f, &[&x]).unwrap().remove(0);
        assert!(close(df.item(), 3.0 * 1.5 * 1.5, 1e-14));
        let pen = df.square().unwrap();
        let d2 = backward(&pen, &[&x]).unwrap();
        assert!(close(d2.grads[0].item(), 36.0 * 1.5f64.powi(3), 1e-12));
    }

    #[test]
    fn non_finite_is_a_fault() {
        let g = Graph::new();
        let x = g.param(Tensor::scalar(-1.0));
        assert!(matches!(x.log(), Err(NumericsError::NonFinite { op: "log" })));
        let big = g.param(Tensor::scalar(1000.0));
        assert!(big.exp().is_err());
    }

    #[test]
    fn vars_from_different_graphs_do_not_mix() {
        let a = Graph::new().param(Tensor::scalar(1.0));
        let b = Graph::new().param(Tensor::scalar(1.0));
        assert!(matches!(a.add(&b), Err(NumericsError::ForeignGraph { .. })));
    }
}
