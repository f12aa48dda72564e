use std::cell::RefCell;
use std::rc::Rc;

use crate::scalar::Scalar;
use crate::tensor::{matmul_raw, ShapeError, Tensor};

pub type NodeId = usize;

/// Sentinel in gather/scatter index maps meaning "no source element" (reads as zero).
pub const NO_INDEX: u32 = u32::MAX;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum AutodiffError {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },
    #[error("non-finite value produced at node {node} ({op})")]
    NonFinite { node: NodeId, op: &'static str },
    #[error("seed shape {seed:?} does not match output shape {output:?}")]
    SeedShape {
        seed: Vec<usize>,
        output: Vec<usize>,
    },
    #[error("variable belongs to a different graph")]
    ForeignVar,
    #[error(transparent)]
    Tensor(#[from] ShapeError),
}

pub type Result<T> = std::result::Result<T, AutodiffError>;

#[derive(Debug, Clone)]
pub(crate) enum Unary<T> {
    Neg,
    Scale(T),
    AddScalar(T),
    Tanh,
    Sigmoid,
    Softplus,
    LeakyRelu(T),
    /// Derivative mask of `LeakyRelu`; treated as locally constant.
    LeakySlope(T),
    Clamp(T, T),
    /// Derivative mask of `Clamp`; treated as locally constant.
    ClampMask(T, T),
    Exp,
    Log,
    Powf(T),
    Square,
}

#[derive(Debug, Clone)]
pub(crate) enum Op<T> {
    Leaf,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Unary(NodeId, Unary<T>),
    MatMul {
        a: NodeId,
        b: NodeId,
        ta: bool,
        tb: bool,
    },
    AddRow(NodeId, NodeId),
    SumAll(NodeId),
    BroadcastScalar {
        src: NodeId,
        shape: Vec<usize>,
    },
    SumRows(NodeId),
    BroadcastRows {
        src: NodeId,
        rows: usize,
    },
    SumCols(NodeId),
    BroadcastCols {
        src: NodeId,
        cols: usize,
    },
    ConcatCols(NodeId, NodeId),
    SliceCols {
        src: NodeId,
        start: usize,
        len: usize,
    },
    PadCols {
        src: NodeId,
        start: usize,
        total: usize,
    },
    Gather {
        src: NodeId,
        index: Rc<[u32]>,
        shape: Vec<usize>,
    },
    ScatterAdd {
        src: NodeId,
        index: Rc<[u32]>,
        shape: Vec<usize>,
    },
    Reshape {
        src: NodeId,
        shape: Vec<usize>,
    },
}

impl<T> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Unary(_, u) => match u {
                Unary::Neg => "neg",
                Unary::Scale(_) => "scale",
                Unary::AddScalar(_) => "add_scalar",
                Unary::Tanh => "tanh",
                Unary::Sigmoid => "sigmoid",
                Unary::Softplus => "softplus",
                Unary::LeakyRelu(_) => "leaky_relu",
                Unary::LeakySlope(_) => "leaky_slope",
                Unary::Clamp(..) => "clamp",
                Unary::ClampMask(..) => "clamp_mask",
                Unary::Exp => "exp",
                Unary::Log => "log",
                Unary::Powf(_) => "powf",
                Unary::Square => "square",
            },
            Op::MatMul { .. } => "matmul",
            Op::AddRow(..) => "add_row",
            Op::SumAll(_) => "sum",
            Op::BroadcastScalar { .. } => "broadcast_scalar",
            Op::SumRows(_) => "sum_rows",
            Op::BroadcastRows { .. } => "broadcast_rows",
            Op::SumCols(_) => "sum_cols",
            Op::BroadcastCols { .. } => "broadcast_cols",
            Op::ConcatCols(..) => "concat_cols",
            Op::SliceCols { .. } => "slice_cols",
            Op::PadCols { .. } => "pad_cols",
            Op::Gather { .. } => "gather",
            Op::ScatterAdd { .. } => "scatter_add",
            Op::Reshape { .. } => "reshape",
        }
    }

    fn inputs(&self) -> [Option<NodeId>; 2] {
        match self {
            Op::Leaf => [None, None],
            Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::AddRow(a, b)
            | Op::ConcatCols(a, b)
            | Op::MatMul { a, b, .. } => [Some(*a), Some(*b)],
            Op::Unary(a, _)
            | Op::SumAll(a)
            | Op::SumRows(a)
            | Op::SumCols(a)
            | Op::BroadcastScalar { src: a, .. }
            | Op::BroadcastRows { src: a, .. }
            | Op::BroadcastCols { src: a, .. }
            | Op::SliceCols { src: a, .. }
            | Op::PadCols { src: a, .. }
            | Op::Gather { src: a, .. }
            | Op::ScatterAdd { src: a, .. }
            | Op::Reshape { src: a, .. } => [Some(*a), None],
        }
    }

    /// Ops whose output is piecewise constant in their input.
    fn blocks_gradient(&self) -> bool {
        matches!(
            self,
            Op::Unary(_, Unary::LeakySlope(_)) | Op::Unary(_, Unary::ClampMask(..))
        )
    }
}

struct Node<T> {
    op: Op<T>,
    value: Rc<Tensor<T>>,
    requires_grad: bool,
}

/// Define-by-run computation record.
///
/// Nodes are appended in evaluation order, so inputs always precede
/// outputs. Gradients produced by [`Graph::backward`] and [`Graph::grad`]
/// are themselves nodes of the same graph and can be differentiated again.
pub struct Graph<T: Scalar> {
    nodes: RefCell<Vec<Node<T>>>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy)]
pub struct Var<'g, T: Scalar> {
    graph: &'g Graph<T>,
    id: NodeId,
}

impl<T: Scalar> std::fmt::Debug for Var<'_, T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var({})", self.id)
    }
}

fn shape_err(op: &'static str, detail: String) -> AutodiffError {
    AutodiffError::Shape { op, detail }
}

fn stable_sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

fn stable_softplus<T: Scalar>(x: T) -> T {
    x.max(T::zero()) + (-x.abs()).exp().ln_1p()
}

fn apply_unary<T: Scalar>(u: &Unary<T>, x: T) -> T {
    match *u {
        Unary::Neg => -x,
        Unary::Scale(c) => c * x,
        Unary::AddScalar(c) => x + c,
        Unary::Tanh => x.tanh(),
        Unary::Sigmoid => stable_sigmoid(x),
        Unary::Softplus => stable_softplus(x),
        Unary::LeakyRelu(a) => {
            if x > T::zero() {
                x
            } else {
                a * x
            }
        }
        Unary::LeakySlope(a) => {
            if x > T::zero() {
                T::one()
            } else {
                a
            }
        }
        Unary::Clamp(lo, hi) => x.max(lo).min(hi),
        Unary::ClampMask(lo, hi) => {
            if x >= lo && x <= hi {
                T::one()
            } else {
                T::zero()
            }
        }
        Unary::Exp => x.exp(),
        Unary::Log => x.ln(),
        Unary::Powf(c) => x.powf(c),
        Unary::Square => x * x,
    }
}

/// Evaluates one op given its input values.
fn compute<T: Scalar>(op: &Op<T>, get: &dyn Fn(NodeId) -> Rc<Tensor<T>>) -> Result<Tensor<T>> {
    let name = op.name();
    let out = match op {
        Op::Leaf => unreachable!("leaves carry their own value"),
        Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => {
            let (a, b) = (get(*a), get(*b));
            if a.shape() != b.shape() {
                return Err(shape_err(name, format!("{:?} vs {:?}", a.shape(), b.shape())));
            }
            let f: fn(T, T) -> T = match op {
                Op::Add(..) => |x, y| x + y,
                Op::Sub(..) => |x, y| x - y,
                _ => |x, y| x * y,
            };
            let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
            Tensor::new(a.shape().to_vec(), data)?
        }
        Op::Unary(a, u) => get(*a).map(|x| apply_unary(u, x)),
        Op::MatMul { a, b, ta, tb } => {
            let (a, b) = (get(*a), get(*b));
            let (ar, ac) = (a.rows(), a.cols());
            let (br, bc) = (b.rows(), b.cols());
            let k1 = if *ta { ar } else { ac };
            let k2 = if *tb { bc } else { br };
            if k1 != k2 {
                return Err(shape_err(
                    name,
                    format!("{:?}{} x {:?}{}", a.shape(), if *ta { "ᵀ" } else { "" }, b.shape(), if *tb { "ᵀ" } else { "" }),
                ));
            }
            let (data, m, n) = matmul_raw(a.data(), ar, ac, *ta, b.data(), br, bc, *tb);
            Tensor::new(vec![m, n], data)?
        }
        Op::AddRow(a, b) => {
            let (a, b) = (get(*a), get(*b));
            let (n, m) = (a.rows(), a.cols());
            if b.len() != m {
                return Err(shape_err(name, format!("{:?} + row {:?}", a.shape(), b.shape())));
            }
            let mut data = a.data().to_vec();
            for r in 0..n {
                for (o, &bv) in data[r * m..(r + 1) * m].iter_mut().zip(b.data()) {
                    *o = *o + bv;
                }
            }
            Tensor::new(vec![n, m], data)?
        }
        Op::SumAll(a) => Tensor::scalar(get(*a).data().iter().copied().sum()),
        Op::BroadcastScalar { src, shape } => {
            let s = get(*src);
            if s.len() != 1 {
                return Err(shape_err(name, format!("source {:?} is not a scalar", s.shape())));
            }
            Tensor::full(shape.clone(), s.item())
        }
        Op::SumRows(a) => {
            let a = get(*a);
            let (n, m) = (a.rows(), a.cols());
            let mut data = vec![T::zero(); m];
            for r in 0..n {
                for (o, &v) in data.iter_mut().zip(&a.data()[r * m..(r + 1) * m]) {
                    *o = *o + v;
                }
            }
            Tensor::new(vec![1, m], data)?
        }
        Op::BroadcastRows { src, rows } => {
            let s = get(*src);
            if s.rows() != 1 {
                return Err(shape_err(name, format!("source {:?} is not a row", s.shape())));
            }
            let m = s.cols();
            let mut data = Vec::with_capacity(rows * m);
            for _ in 0..*rows {
                data.extend_from_slice(s.data());
            }
            Tensor::new(vec![*rows, m], data)?
        }
        Op::SumCols(a) => {
            let a = get(*a);
            let (n, m) = (a.rows(), a.cols());
            let data = (0..n).map(|r| a.data()[r * m..(r + 1) * m].iter().copied().sum()).collect();
            Tensor::new(vec![n, 1], data)?
        }
        Op::BroadcastCols { src, cols } => {
            let s = get(*src);
            if s.cols() != 1 {
                return Err(shape_err(name, format!("source {:?} is not a column", s.shape())));
            }
            let n = s.rows();
            let mut data = Vec::with_capacity(n * cols);
            for &v in s.data() {
                data.extend(std::iter::repeat_n(v, *cols));
            }
            Tensor::new(vec![n, *cols], data)?
        }
        Op::ConcatCols(a, b) => {
            let (a, b) = (get(*a), get(*b));
            if a.rows() != b.rows() {
                return Err(shape_err(name, format!("{:?} | {:?}", a.shape(), b.shape())));
            }
            let (n, p, q) = (a.rows(), a.cols(), b.cols());
            let mut data = Vec::with_capacity(n * (p + q));
            for r in 0..n {
                data.extend_from_slice(a.row(r));
                data.extend_from_slice(b.row(r));
            }
            Tensor::new(vec![n, p + q], data)?
        }
        Op::SliceCols { src, start, len } => {
            let s = get(*src);
            let (n, m) = (s.rows(), s.cols());
            if start + len > m || *len == 0 {
                return Err(shape_err(name, format!("cols {start}..{} of {:?}", start + len, s.shape())));
            }
            let mut data = Vec::with_capacity(n * len);
            for r in 0..n {
                data.extend_from_slice(&s.row(r)[*start..start + len]);
            }
            Tensor::new(vec![n, *len], data)?
        }
        Op::PadCols { src, start, total } => {
            let s = get(*src);
            let (n, len) = (s.rows(), s.cols());
            if start + len > *total {
                return Err(shape_err(name, format!("{:?} at {start} into {total}", s.shape())));
            }
            let mut data = vec![T::zero(); n * total];
            for r in 0..n {
                data[r * total + start..r * total + start + len].copy_from_slice(s.row(r));
            }
            Tensor::new(vec![n, *total], data)?
        }
        Op::Gather { src, index, shape } => {
            let s = get(*src);
            let sd = s.data();
            if let Some(&bad) = index.iter().find(|&&i| i != NO_INDEX && i as usize >= sd.len()) {
                return Err(shape_err(name, format!("index {bad} out of range {}", sd.len())));
            }
            let data = index
                .iter()
                .map(|&i| if i == NO_INDEX { T::zero() } else { sd[i as usize] })
                .collect();
            Tensor::new(shape.clone(), data)?
        }
        Op::ScatterAdd { src, index, shape } => {
            let s = get(*src);
            if index.len() != s.len() {
                return Err(shape_err(name, format!("index map {} vs source {}", index.len(), s.len())));
            }
            let total: usize = shape.iter().product();
            let mut data = vec![T::zero(); total];
            for (&i, &v) in index.iter().zip(s.data()) {
                if i != NO_INDEX {
                    let i = i as usize;
                    if i >= total {
                        return Err(shape_err(name, format!("index {i} out of range {total}")));
                    }
                    data[i] = data[i] + v;
                }
            }
            Tensor::new(shape.clone(), data)?
        }
        Op::Reshape { src, shape } => (*get(*src)).clone().reshaped(shape.clone())?,
    };
    Ok(out)
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push_leaf(&self, value: Tensor<T>, requires_grad: bool) -> Result<Var<'_, T>> {
        let mut nodes = self.nodes.borrow_mut();
        let id = nodes.len();
        if !value.is_finite() {
            return Err(AutodiffError::NonFinite { node: id, op: "leaf" });
        }
        nodes.push(Node {
            op: Op::Leaf,
            value: Rc::new(value),
            requires_grad,
        });
        Ok(Var { graph: self, id })
    }

    /// A differentiable leaf (a parameter or an input we need gradients for).
    pub fn param(&self, value: Tensor<T>) -> Result<Var<'_, T>> {
        self.push_leaf(value, true)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&self, value: Tensor<T>) -> Result<Var<'_, T>> {
        self.push_leaf(value, false)
    }

    pub fn scalar_const(&self, value: f64) -> Result<Var<'_, T>> {
        self.constant(Tensor::scalar(T::lit(value)))
    }

    fn value_of(&self, id: NodeId) -> Rc<Tensor<T>> {
        Rc::clone(&self.nodes.borrow()[id].value)
    }

    fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes.borrow()[id].requires_grad
    }

    pub(crate) fn push(&self, op: Op<T>) -> Result<Var<'_, T>> {
        let value = compute(&op, &|id| self.value_of(id))?;
        let requires_grad = !op.blocks_gradient()
            && op.inputs().iter().flatten().any(|&i| self.requires_grad(i));
        let mut nodes = self.nodes.borrow_mut();
        let id = nodes.len();
        if !value.is_finite() {
            return Err(AutodiffError::NonFinite { node: id, op: op.name() });
        }
        nodes.push(Node {
            op,
            value: Rc::new(value),
            requires_grad,
        });
        Ok(Var { graph: self, id })
    }

    fn var(&self, id: NodeId) -> Var<'_, T> {
        Var { graph: self, id }
    }

    fn check_owner(&self, v: &Var<'_, T>) -> Result<()> {
        if std::ptr::eq(v.graph, self) {
            Ok(())
        } else {
            Err(AutodiffError::ForeignVar)
        }
    }

    /// Reverse-mode gradients of `output` with respect to every
    /// differentiable leaf it depends on.
    pub fn backward<'g>(&'g self, output: Var<'g, T>, seed: Option<Tensor<T>>) -> Result<Gradients<'g, T>> {
        self.check_owner(&output)?;
        let relevant: Vec<bool> = {
            let nodes = self.nodes.borrow();
            nodes[..=output.id].iter().map(|n| n.requires_grad).collect()
        };
        let grads = self.reverse_sweep(output, seed, &relevant)?;
        Ok(Gradients { graph: self, grads })
    }

    /// Gradients of `output` with respect to `wrt` only. Unreachable
    /// variables get an explicit zero tensor.
    pub fn grad<'g>(&'g self, output: Var<'g, T>, wrt: &[Var<'g, T>], seed: Option<Tensor<T>>) -> Result<Vec<Var<'g, T>>> {
        self.check_owner(&output)?;
        let mut relevant = vec![false; output.id + 1];
        {
            let nodes = self.nodes.borrow();
            for w in wrt {
                self.check_owner(w)?;
                if w.id <= output.id && nodes[w.id].requires_grad {
                    relevant[w.id] = true;
                }
            }
            if let Some(start) = wrt.iter().map(|w| w.id).min() {
                for id in start..=output.id {
                    let node = &nodes[id];
                    if !relevant[id] && !node.op.blocks_gradient() {
                        relevant[id] = node.op.inputs().iter().flatten().any(|&i| relevant[i]);
                    }
                }
            }
        }
        let grads = self.reverse_sweep(output, seed, &relevant)?;
        wrt.iter()
            .map(|w| match grads.get(w.id).copied().flatten() {
                Some(g) => Ok(self.var(g)),
                None => self.constant(Tensor::zeros(w.shape())),
            })
            .collect()
    }

    fn reverse_sweep(&self, output: Var<'_, T>, seed: Option<Tensor<T>>, relevant: &[bool]) -> Result<Vec<Option<NodeId>>> {
        let out_shape = output.shape();
        let seed = match seed {
            Some(s) if s.shape() != out_shape.as_slice() => {
                return Err(AutodiffError::SeedShape {
                    seed: s.shape().to_vec(),
                    output: out_shape,
                })
            }
            Some(s) => s,
            None => Tensor::ones(out_shape),
        };
        let mut grads: Vec<Option<NodeId>> = vec![None; output.id + 1];
        if !relevant[output.id] {
            return Ok(grads);
        }
        grads[output.id] = Some(self.constant(seed)?.id);

        for id in (0..=output.id).rev() {
            let Some(gid) = grads[id] else { continue };
            if !relevant[id] {
                continue;
            }
            let op = self.nodes.borrow()[id].op.clone();
            let g = self.var(gid);
            let contributions = self.vjp(&op, id, g)?;
            for (input, contrib) in contributions {
                if !relevant[input] {
                    continue;
                }
                grads[input] = Some(match grads[input] {
                    Some(prev) => self.var(prev).add(contrib)?.id,
                    None => contrib.id,
                });
            }
        }
        Ok(grads)
    }

    /// Vector-Jacobian products for one node, expressed as graph ops.
    fn vjp<'g>(&'g self, op: &Op<T>, id: NodeId, g: Var<'g, T>) -> Result<Vec<(NodeId, Var<'g, T>)>> {
        let y = self.var(id);
        let out = match op {
            Op::Leaf => vec![],
            Op::Add(a, b) => vec![(*a, g), (*b, g)],
            Op::Sub(a, b) => vec![(*a, g), (*b, g.neg()?)],
            Op::Mul(a, b) => {
                let (va, vb) = (self.var(*a), self.var(*b));
                let mut v = Vec::with_capacity(2);
                if self.requires_grad(*a) {
                    v.push((*a, g.mul(vb)?));
                }
                if self.requires_grad(*b) {
                    v.push((*b, g.mul(va)?));
                }
                v
            }
            Op::Unary(src, u) => {
                let x = self.var(*src);
                let d = match *u {
                    Unary::Neg => g.neg()?,
                    Unary::Scale(c) => g.scale_t(c)?,
                    Unary::AddScalar(_) => g,
                    Unary::Tanh => g.mul(y.square()?.neg()?.add_scalar(1.0)?)?,
                    Unary::Sigmoid => g.mul(y.mul(y.neg()?.add_scalar(1.0)?)?)?,
                    Unary::Softplus => g.mul(x.sigmoid()?)?,
                    Unary::LeakyRelu(alpha) => g.mul(x.unary(Unary::LeakySlope(alpha))?)?,
                    Unary::Clamp(lo, hi) => g.mul(x.unary(Unary::ClampMask(lo, hi))?)?,
                    Unary::LeakySlope(_) | Unary::ClampMask(..) => return Ok(vec![]),
                    Unary::Exp => g.mul(y)?,
                    Unary::Log => g.mul(x.powf_t(-T::one())?)?,
                    Unary::Powf(c) => g.mul(x.powf_t(c - T::one())?.scale_t(c)?)?,
                    Unary::Square => g.mul(x.scale(2.0)?)?,
                };
                vec![(*src, d)]
            }
            Op::MatMul { a, b, ta, tb } => {
                let (va, vb) = (self.var(*a), self.var(*b));
                let mut v = Vec::with_capacity(2);
                if self.requires_grad(*a) {
                    let da = if *ta {
                        vb.matmul_t(g, *tb, true)?
                    } else {
                        g.matmul_t(vb, false, !*tb)?
                    };
                    v.push((*a, da));
                }
                if self.requires_grad(*b) {
                    let db = if *tb {
                        g.matmul_t(va, true, *ta)?
                    } else {
                        va.matmul_t(g, !*ta, false)?
                    };
                    v.push((*b, db));
                }
                v
            }
            Op::AddRow(a, b) => vec![(*a, g), (*b, g.sum_rows()?)],
            Op::SumAll(a) => vec![(*a, g.broadcast_scalar(self.var(*a).shape())?)],
            Op::BroadcastScalar { src, .. } => {
                let s = g.sum()?;
                let src_shape = self.var(*src).shape();
                let s = if src_shape.as_slice() == [1] { s } else { s.reshape(src_shape)? };
                vec![(*src, s)]
            }
            Op::SumRows(a) => vec![(*a, g.broadcast_rows(self.var(*a).value().rows())?)],
            Op::BroadcastRows { src, .. } => vec![(*src, g.sum_rows()?)],
            Op::SumCols(a) => vec![(*a, g.broadcast_cols(self.var(*a).value().cols())?)],
            Op::BroadcastCols { src, .. } => vec![(*src, g.sum_cols()?)],
            Op::ConcatCols(a, b) => {
                let p = self.var(*a).value().cols();
                let q = self.var(*b).value().cols();
                vec![(*a, g.slice_cols(0, p)?), (*b, g.slice_cols(p, q)?)]
            }
            Op::SliceCols { src, start, .. } => {
                let total = self.var(*src).value().cols();
                vec![(*src, g.pad_cols(*start, total)?)]
            }
            Op::PadCols { src, start, .. } => {
                let len = self.var(*src).value().cols();
                vec![(*src, g.slice_cols(*start, len)?)]
            }
            Op::Gather { src, index, .. } => {
                let shape = self.var(*src).shape();
                vec![(*src, g.scatter_add(Rc::clone(index), shape)?)]
            }
            Op::ScatterAdd { src, index, .. } => {
                let shape = self.var(*src).shape();
                vec![(*src, g.gather(Rc::clone(index), shape)?)]
            }
            Op::Reshape { src, .. } => vec![(*src, g.reshape(self.var(*src).shape())?)],
        };
        Ok(out)
    }

    /// Re-evaluates every recorded op with some leaves replaced, returning
    /// the values of `outputs`. The graph itself is left untouched.
    pub fn replay(&self, overrides: &[(Var<'_, T>, Tensor<T>)], outputs: &[Var<'_, T>]) -> Result<Vec<Tensor<T>>> {
        let nodes = self.nodes.borrow();
        let mut values: Vec<Rc<Tensor<T>>> = Vec::with_capacity(nodes.len());
        let last = outputs.iter().map(|v| v.id).max().unwrap_or(0);
        for (id, node) in nodes.iter().enumerate().take(last + 1) {
            let v = match &node.op {
                Op::Leaf => match overrides.iter().find(|(var, _)| var.id == id) {
                    Some((_, t)) => {
                        if t.shape() != node.value.shape() {
                            return Err(shape_err("replay", format!("override {:?} for leaf {:?}", t.shape(), node.value.shape())));
                        }
                        Rc::new(t.clone())
                    }
                    None => Rc::clone(&node.value),
                },
                op => {
                    let t = compute(op, &|i| Rc::clone(&values[i]))?;
                    if !t.is_finite() {
                        return Err(AutodiffError::NonFinite { node: id, op: op.name() });
                    }
                    Rc::new(t)
                }
            };
            values.push(v);
        }
        Ok(outputs.iter().map(|o| (*values[o.id]).clone()).collect())
    }
}

/// Result of [`Graph::backward`].
pub struct Gradients<'g, T: Scalar> {
    graph: &'g Graph<T>,
    grads: Vec<Option<NodeId>>,
}

impl<'g, T: Scalar> Gradients<'g, T> {
    /// Gradient node for `v`, or `None` when `v` does not influence the output.
    pub fn get(&self, v: Var<'g, T>) -> Option<Var<'g, T>> {
        self.grads.get(v.id).copied().flatten().map(|id| self.graph.var(id))
    }

    /// Gradient value for `v`, zero-filled when `v` does not influence the output.
    pub fn value(&self, v: Var<'g, T>) -> Tensor<T> {
        match self.get(v) {
            Some(g) => (*g.value()).clone(),
            None => Tensor::zeros(v.shape()),
        }
    }
}

impl<'g, T: Scalar> Var<'g, T> {
    pub fn id(&self) -> NodeId {
        self.id
    }

    pub fn graph(&self) -> &'g Graph<T> {
        self.graph
    }

    pub fn value(&self) -> Rc<Tensor<T>> {
        self.graph.value_of(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.graph.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn item(&self) -> T {
        self.value().item()
    }

    pub fn requires_grad(&self) -> bool {
        self.graph.requires_grad(self.id)
    }

    fn unary(self, u: Unary<T>) -> Result<Self> {
        self.graph.push(Op::Unary(self.id, u))
    }

    fn same_graph(&self, other: &Self) -> Result<()> {
        self.graph.check_owner(other)
    }

    pub fn add(self, other: Self) -> Result<Self> {
        self.same_graph(&other)?;
        self.graph.push(Op::Add(self.id, other.id))
    }

    pub fn sub(self, other: Self) -> Result<Self> {
        self.same_graph(&other)?;
        self.graph.push(Op::Sub(self.id, other.id))
    }

    pub fn mul(self, other: Self) -> Result<Self> {
        self.same_graph(&other)?;
        self.graph.push(Op::Mul(self.id, other.id))
    }

    pub fn neg(self) -> Result<Self> {
        self.unary(Unary::Neg)
    }

    pub fn scale(self, c: f64) -> Result<Self> {
        self.unary(Unary::Scale(T::lit(c)))
    }

    pub fn scale_t(self, c: T) -> Result<Self> {
        self.unary(Unary::Scale(c))
    }

    pub fn add_scalar(self, c: f64) -> Result<Self> {
        self.unary(Unary::AddScalar(T::lit(c)))
    }

    pub fn tanh(self) -> Result<Self> {
        self.unary(Unary::Tanh)
    }

    pub fn sigmoid(self) -> Result<Self> {
        self.unary(Unary::Sigmoid)
    }

    /// `ln(1 + e^x)`, evaluated without overflow.
    pub fn softplus(self) -> Result<Self> {
        self.unary(Unary::Softplus)
    }

    pub fn leaky_relu(self, alpha: f64) -> Result<Self> {
        self.unary(Unary::LeakyRelu(T::lit(alpha)))
    }

    pub fn relu(self) -> Result<Self> {
        self.leaky_relu(0.0)
    }

    pub fn clamp(self, lo: f64, hi: f64) -> Result<Self> {
        self.unary(Unary::Clamp(T::lit(lo), T::lit(hi)))
    }

    pub fn exp(self) -> Result<Self> {
        self.unary(Unary::Exp)
    }

    pub fn ln(self) -> Result<Self> {
        self.unary(Unary::Log)
    }

    pub fn powf(self, c: f64) -> Result<Self> {
        self.unary(Unary::Powf(T::lit(c)))
    }

    pub fn powf_t(self, c: T) -> Result<Self> {
        self.unary(Unary::Powf(c))
    }

    pub fn square(self) -> Result<Self> {
        self.unary(Unary::Square)
    }

    pub fn sqrt(self) -> Result<Self> {
        self.powf(0.5)
    }

    pub fn matmul(self, other: Self) -> Result<Self> {
        self.matmul_t(other, false, false)
    }

    /// `op(self) · op(other)` with optional transposes.
    pub fn matmul_t(self, other: Self, ta: bool, tb: bool) -> Result<Self> {
        self.same_graph(&other)?;
        self.graph.push(Op::MatMul {
            a: self.id,
            b: other.id,
            ta,
            tb,
        })
    }

    /// Adds a `[1, m]` row to every row of `self`.
    pub fn add_row(self, row: Self) -> Result<Self> {
        self.same_graph(&row)?;
        self.graph.push(Op::AddRow(self.id, row.id))
    }

    pub fn sum(self) -> Result<Self> {
        self.graph.push(Op::SumAll(self.id))
    }

    pub fn mean(self) -> Result<Self> {
        let n = self.value().len();
        self.sum()?.scale(1.0 / n as f64)
    }

    pub fn broadcast_scalar(self, shape: Vec<usize>) -> Result<Self> {
        self.graph.push(Op::BroadcastScalar { src: self.id, shape })
    }

    /// Sum over rows: `[n, m] -> [1, m]`.
    pub fn sum_rows(self) -> Result<Self> {
        self.graph.push(Op::SumRows(self.id))
    }

    pub fn broadcast_rows(self, rows: usize) -> Result<Self> {
        self.graph.push(Op::BroadcastRows { src: self.id, rows })
    }

    /// Sum over columns: `[n, m] -> [n, 1]`.
    pub fn sum_cols(self) -> Result<Self> {
        self.graph.push(Op::SumCols(self.id))
    }

    pub fn broadcast_cols(self, cols: usize) -> Result<Self> {
        self.graph.push(Op::BroadcastCols { src: self.id, cols })
    }

    pub fn concat_cols(self, other: Self) -> Result<Self> {
        self.same_graph(&other)?;
        self.graph.push(Op::ConcatCols(self.id, other.id))
    }

    pub fn slice_cols(self, start: usize, len: usize) -> Result<Self> {
        self.graph.push(Op::SliceCols { src: self.id, start, len })
    }

    pub fn pad_cols(self, start: usize, total: usize) -> Result<Self> {
        self.graph.push(Op::PadCols { src: self.id, start, total })
    }

    /// `out[i] = self[index[i]]`, or zero for [`NO_INDEX`].
    pub fn gather(self, index: Rc<[u32]>, shape: Vec<usize>) -> Result<Self> {
        self.graph.push(Op::Gather { src: self.id, index, shape })
    }

    /// `out[index[i]] += self[i]`; the adjoint of [`Var::gather`].
    pub fn scatter_add(self, index: Rc<[u32]>, shape: Vec<usize>) -> Result<Self> {
        self.graph.push(Op::ScatterAdd { src: self.id, index, shape })
    }

    pub fn reshape(self, shape: Vec<usize>) -> Result<Self> {
        self.graph.push(Op::Reshape { src: self.id, shape })
    }

    /// A constant copy of this value, cut from the graph.
    pub fn detach(self) -> Result<Self> {
        self.graph.constant((*self.value()).clone())
    }

    /// `self * s` where `s` is a single-element variable.
    pub fn mul_scalar_var(self, s: Self) -> Result<Self> {
        let b = s.broadcast_scalar(self.shape())?;
        self.mul(b)
    }

    /// Multiplies each row `i` by `col[i]` (`col` is `[n, 1]`).
    pub fn mul_col(self, col: Self) -> Result<Self> {
        let m = self.value().cols();
        self.mul(col.broadcast_cols(m)?)
    }

    /// Multiplies every row elementwise by `row` (`[1, m]`).
    pub fn mul_row(self, row: Self) -> Result<Self> {
        let n = self.value().rows();
        self.mul(row.broadcast_rows(n)?)
    }
}
