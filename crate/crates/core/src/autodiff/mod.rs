//! Reverse-mode automatic differentiation over dense tensors.
//!
//! A [`Graph`] is a tape: every operator appends a node holding its output
//! and the indices of its inputs. Inputs always precede outputs on the tape,
//! so walking it backwards is a valid reverse topological order and cycles
//! cannot be expressed.
//!
//! ```
//! use nofonet::autodiff::{Graph, Tensor};
//!
//! let g = Graph::new();
//! let x = g.leaf(Tensor::new(vec![3], vec![1.0, -2.0, 0.5]).unwrap());
//! let sq = g.mul(x, x).unwrap();
//! let loss = g.sum(sq);
//! let grads = g.backward(loss).unwrap();
//! assert_eq!(grads.get(x).unwrap().data(), &[2.0, -4.0, 1.0]);
//! ```
//!
//! Operators outside the built-in set plug in through [`CustomOp`].

mod kernels;
pub mod parallel;
mod param;
mod tensor;

use std::cell::RefCell;
use std::fmt;
use std::rc::Rc;

pub use kernels::ConvGeometry;
pub use param::{load_checkpoint, save_checkpoint, Binding, ParamStore, Parameter};
pub use tensor::Tensor;

use crate::error::{Error, Result};

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// An operator defined outside this module.
///
/// `backward` receives the forward inputs, the forward output and the
/// gradient flowing into the output, and returns one gradient per input
/// (`None` for inputs it does not differentiate).
pub trait CustomOp: fmt::Debug {
    fn name(&self) -> &'static str;
    fn backward(&self, inputs: &[&Tensor], output: &Tensor, grad: &Tensor) -> Result<Vec<Option<Tensor>>>;
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, f64),
    Shift(Var),
    Sqrt(Var),
    Sum(Var),
    Mean(Var),
    LeakyRelu(Var, f64),
    Conv3d { x: Var, w: Var, b: Option<Var>, geo: ConvGeometry },
    Upsample2x(Var),
    Concat(Var, Var),
    AddChannel(Var, Var),
    BoxSum(Var, usize),
    Custom { inputs: Vec<Var>, op: Box<dyn CustomOp> },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Div(..) => "div",
            Op::Scale(..) => "scale",
            Op::Shift(..) => "shift",
            Op::Sqrt(..) => "sqrt",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
            Op::LeakyRelu(..) => "leaky_relu",
            Op::Conv3d { .. } => "conv3d",
            Op::Upsample2x(..) => "upsample2x",
            Op::Concat(..) => "concat",
            Op::AddChannel(..) => "add_channel",
            Op::BoxSum(..) => "box_sum",
            Op::Custom { op, .. } => op.name(),
        }
    }

    fn parents(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::Div(a, b) => vec![*a, *b],
            Op::Concat(a, b) | Op::AddChannel(a, b) => vec![*a, *b],
            Op::Scale(a, _)
            | Op::Shift(a)
            | Op::Sqrt(a)
            | Op::Sum(a)
            | Op::Mean(a)
            | Op::LeakyRelu(a, _)
            | Op::Upsample2x(a)
            | Op::BoxSum(a, _) => vec![*a],
            Op::Conv3d { x, w, b, .. } => {
                let mut v = vec![*x, *w];
                v.extend(b);
                v
            }
            Op::Custom { inputs, .. } => inputs.clone(),
        }
    }
}

#[derive(Debug)]
struct Node {
    value: Rc<Tensor>,
    op: Op,
    needs_grad: bool,
}

/// Reverse-mode tape. Build one per training step.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: RefCell<Vec<Node>>,
    check_finite: bool,
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Grads {
    grads: Vec<Option<Tensor>>,
}

impl Grads {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    /// A graph that fails any operator producing NaN or infinity.
    pub fn with_finite_checks() -> Self {
        Graph { nodes: RefCell::default(), check_finite: true }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor, op: Op) -> Result<Var> {
        if self.check_finite && !value.all_finite() {
            return Err(Error::NonFinite(format!("output of {}", op.name())));
        }
        let mut nodes = self.nodes.borrow_mut();
        let needs_grad = op.parents().iter().any(|p| nodes[p.0].needs_grad);
        nodes.push(Node { value: Rc::new(value), op, needs_grad });
        Ok(Var(nodes.len() - 1))
    }

    /// Differentiable input.
    pub fn leaf(&self, value: Tensor) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value: Rc::new(value), op: Op::Leaf, needs_grad: true });
        Var(nodes.len() - 1)
    }

    /// Input that never receives a gradient.
    pub fn constant(&self, value: Tensor) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value: Rc::new(value), op: Op::Leaf, needs_grad: false });
        Var(nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> Rc<Tensor> {
        Rc::clone(&self.nodes.borrow()[v.0].value)
    }

    pub fn scalar_value(&self, v: Var) -> f64 {
        self.nodes.borrow()[v.0].value.item()
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.0].value.shape().to_vec()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes.borrow()[v.0].needs_grad
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<(Rc<Tensor>, Rc<Tensor>)> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::Shape { op, expected: ta.shape().to_vec(), got: tb.shape().to_vec() });
        }
        Ok((ta, tb))
    }

    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = self.same_shape("add", a, b)?;
        self.push(ta.zip_map(&tb, |x, y| x + y), Op::Add(a, b))
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = self.same_shape("sub", a, b)?;
        self.push(ta.zip_map(&tb, |x, y| x - y), Op::Sub(a, b))
    }

    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = self.same_shape("mul", a, b)?;
        self.push(ta.zip_map(&tb, |x, y| x * y), Op::Mul(a, b))
    }

    pub fn div(&self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = self.same_shape("div", a, b)?;
        self.push(ta.zip_map(&tb, |x, y| x / y), Op::Div(a, b))
    }

    pub fn scale(&self, a: Var, c: f64) -> Var {
        let t = self.value(a).map(|x| x * c);
        self.push(t, Op::Scale(a, c)).expect("scale of finite value")
    }

    pub fn shift(&self, a: Var, c: f64) -> Var {
        let t = self.value(a).map(|x| x + c);
        self.push(t, Op::Shift(a)).expect("shift of finite value")
    }

    pub fn square(&self, a: Var) -> Var {
        self.mul(a, a).expect("square shares shape with itself")
    }

    pub fn sqrt(&self, a: Var) -> Result<Var> {
        let t = self.value(a);
        if let Some(bad) = t.data().iter().find(|v| **v < 0.0) {
            return Err(Error::invalid(format!("sqrt of negative value {bad}")));
        }
        self.push(t.map(f64::sqrt), Op::Sqrt(a))
    }

    pub fn sum(&self, a: Var) -> Var {
        let s = self.value(a).sum();
        self.push(Tensor::scalar(s), Op::Sum(a)).expect("sum")
    }

    pub fn mean(&self, a: Var) -> Var {
        let t = self.value(a);
        let m = t.sum() / t.numel() as f64;
        self.push(Tensor::scalar(m), Op::Mean(a)).expect("mean")
    }

    pub fn leaky_relu(&self, a: Var, slope: f64) -> Var {
        let t = self.value(a).map(|x| if x >= 0.0 { x } else { slope * x });
        self.push(t, Op::LeakyRelu(a, slope)).expect("leaky_relu")
    }

    pub fn conv3d(&self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let (tx, tw) = (self.value(x), self.value(w));
        let kernel = tw.shape().get(2).copied().unwrap_or(0);
        let geo = ConvGeometry { stride, pad, kernel };
        let tb = b.map(|b| self.value(b));
        let out = kernels::conv3d_forward(&tx, &tw, tb.as_deref(), geo)?;
        self.push(out, Op::Conv3d { x, w, b, geo })
    }

    pub fn upsample2x(&self, x: Var) -> Result<Var> {
        let out = kernels::upsample2x_forward(&self.value(x))?;
        self.push(out, Op::Upsample2x(x))
    }

    /// Stacks two `[C, D, H, W]` tensors along the channel axis.
    pub fn concat(&self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let [ca, da, ha, wa] = ta.dims4("concat")?;
        let [cb, db, hb, wb] = tb.dims4("concat")?;
        if [da, ha, wa] != [db, hb, wb] {
            return Err(Error::Shape { op: "concat", expected: vec![da, ha, wa], got: vec![db, hb, wb] });
        }
        let mut data = Vec::with_capacity(ta.numel() + tb.numel());
        data.extend_from_slice(ta.data());
        data.extend_from_slice(tb.data());
        self.push(Tensor::new(vec![ca + cb, da, ha, wa], data)?, Op::Concat(a, b))
    }

    /// Adds `v[c]` to every voxel of channel `c` of `x`.
    pub fn add_channel(&self, x: Var, v: Var) -> Result<Var> {
        let (tx, tv) = (self.value(x), self.value(v));
        let [c, d, h, w] = tx.dims4("add_channel")?;
        if tv.shape() != [c] {
            return Err(Error::Shape { op: "add_channel", expected: vec![c], got: tv.shape().to_vec() });
        }
        let n = d * h * w;
        let mut out = tx.as_ref().clone();
        for (i, chunk) in out.data_mut().chunks_mut(n).enumerate() {
            let add = tv.data()[i];
            chunk.iter_mut().for_each(|x| *x += add);
        }
        self.push(out, Op::AddChannel(x, v))
    }

    /// Windowed sum over a `(2r+1)³` neighbourhood, truncated at the borders.
    pub fn box_sum(&self, x: Var, radius: usize) -> Result<Var> {
        let out = kernels::box_sum(&self.value(x), radius)?;
        self.push(out, Op::BoxSum(x, radius))
    }

    /// Appends the result of an externally defined operator.
    pub fn custom(&self, inputs: Vec<Var>, output: Tensor, op: Box<dyn CustomOp>) -> Result<Var> {
        self.push(output, Op::Custom { inputs, op })
    }

    /// Backpropagates from a scalar root. The tape is left untouched, so this
    /// may be called repeatedly.
    pub fn backward(&self, root: Var) -> Result<Grads> {
        let nodes = self.nodes.borrow();
        let root_node = nodes.get(root.0).ok_or_else(|| Error::Graph("root not on this tape".into()))?;
        if !root_node.value.is_scalar() {
            return Err(Error::Graph(format!(
                "backward needs a scalar root, got shape {:?}",
                root_node.value.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; nodes.len()];
        grads[root.0] = Some(Tensor::full(root_node.value.shape(), 1.0));

        for i in (0..=root.0).rev() {
            let node = &nodes[i];
            if !node.needs_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            let val = |v: Var| -> &Tensor { &nodes[v.0].value };
            let wants = |v: Var| nodes[v.0].needs_grad;
            let mut contribs: Vec<(Var, Tensor)> = Vec::new();
            match &node.op {
                Op::Leaf => unreachable!(),
                Op::Add(a, b) => {
                    contribs.push((*a, g.clone()));
                    contribs.push((*b, g));
                }
                Op::Sub(a, b) => {
                    contribs.push((*b, g.map(|x| -x)));
                    contribs.push((*a, g));
                }
                Op::Mul(a, b) => {
                    if wants(*a) {
                        contribs.push((*a, g.zip_map(val(*b), |x, y| x * y)));
                    }
                    if wants(*b) {
                        contribs.push((*b, g.zip_map(val(*a), |x, y| x * y)));
                    }
                }
                Op::Div(a, b) => {
                    let tb = val(*b);
                    if wants(*a) {
                        contribs.push((*a, g.zip_map(tb, |x, y| x / y)));
                    }
                    if wants(*b) {
                        // d(a/b)/db = -out/b
                        let q = node.value.zip_map(tb, |o, y| -o / y);
                        contribs.push((*b, g.zip_map(&q, |x, y| x * y)));
                    }
                }
                Op::Scale(a, c) => contribs.push((*a, g.map(|x| x * c))),
                Op::Shift(a) => contribs.push((*a, g)),
                Op::Sqrt(a) => contribs.push((*a, g.zip_map(&node.value, |x, s| 0.5 * x / s))),
                Op::Sum(a) => contribs.push((*a, Tensor::full(val(*a).shape(), g.item()))),
                Op::Mean(a) => {
                    let t = val(*a);
                    contribs.push((*a, Tensor::full(t.shape(), g.item() / t.numel() as f64)));
                }
                Op::LeakyRelu(a, slope) => {
                    let d = g.zip_map(val(*a), |x, inp| if inp >= 0.0 { x } else { slope * x });
                    contribs.push((*a, d));
                }
                Op::Conv3d { x, w, b, geo } => {
                    let (tx, tw) = (val(*x), val(*w));
                    if wants(*x) {
                        let xs = tx.dims4("conv3d input")?;
                        contribs.push((*x, kernels::conv3d_backward_input(xs, tw, &g, *geo)?));
                    }
                    if wants(*w) {
                        contribs.push((*w, kernels::conv3d_backward_weight(tx, tw.shape(), &g, *geo)?));
                    }
                    if let Some(b) = b.filter(|b| wants(*b)) {
                        contribs.push((b, kernels::channel_sums(&g)?));
                    }
                }
                Op::Upsample2x(a) => {
                    contribs.push((*a, kernels::upsample2x_backward(val(*a).shape(), &g)?));
                }
                Op::Concat(a, b) => {
                    let split = val(*a).numel();
                    let mut data = g.into_data();
                    let tail = data.split_off(split);
                    contribs.push((*a, Tensor::new(val(*a).shape().to_vec(), data)?));
                    contribs.push((*b, Tensor::new(val(*b).shape().to_vec(), tail)?));
                }
                Op::AddChannel(x, v) => {
                    if wants(*v) {
                        contribs.push((*v, kernels::channel_sums(&g)?));
                    }
                    contribs.push((*x, g));
                }
                Op::BoxSum(a, r) => contribs.push((*a, kernels::box_sum(&g, *r)?)),
                Op::Custom { inputs, op } => {
                    let ins: Vec<&Tensor> = inputs.iter().map(|v| val(*v)).collect();
                    let outs = op.backward(&ins, &node.value, &g)?;
                    if outs.len() != inputs.len() {
                        return Err(Error::Graph(format!("{} returned wrong gradient count", op.name())));
                    }
                    for (v, t) in inputs.iter().zip(outs) {
                        if let Some(t) = t {
                            contribs.push((*v, t));
                        }
                    }
                }
            }
            for (p, t) in contribs {
                if p.0 >= i {
                    return Err(Error::Graph(format!("cycle through node {i}")));
                }
                if !wants(p) {
                    continue;
                }
                if t.shape() != val(p).shape() {
                    return Err(Error::Shape {
                        op: "backward",
                        expected: val(p).shape().to_vec(),
                        got: t.shape().to_vec(),
                    });
                }
                match &mut grads[p.0] {
                    Some(acc) => acc.add_assign(&t),
                    slot @ None => *slot = Some(t),
                }
            }
        }
        // leaves that needed a gradient but were unreachable get zeros
        for (i, node) in nodes.iter().enumerate().take(root.0 + 1) {
            if node.needs_grad && matches!(node.op, Op::Leaf) && grads[i].is_none() {
                grads[i] = Some(Tensor::zeros(node.value.shape()));
            }
        }
        Ok(Grads { grads })
    }
}
