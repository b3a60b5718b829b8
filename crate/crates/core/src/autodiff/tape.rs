use std::cell::{Ref, RefCell};

use nalgebra::{DMatrix, SymmetricEigen};

use super::tensor::{at, zip_broadcast, Tensor};
use super::AdError;

/// Handle to a value recorded on a [`Tape`]. Only meaningful for the tape that created it.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Node(usize);

impl Node {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Unary {
    Neg,
    Tanh,
    Exp,
    Log,
    Sqrt,
    Sin,
    Cos,
    Sigmoid,
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add(Node, Node),
    Sub(Node, Node),
    Mul(Node, Node),
    Div(Node, Node),
    Max(Node, Node),
    Unary(Node, Unary),
    Powi(Node, i32),
    Scale(Node, f64),
    Offset(Node),
    MatMul(Node, Node),
    Transpose(Node),
    Sum(Node),
    SumRows(Node),
    SumCols(Node),
    Clamp(Node, f64, f64),
    GatherRows(Node, Vec<usize>),
    SelectCols(Node, Vec<usize>),
    ConcatRows(Vec<Node>),
    ConcatCols(Vec<Node>),
    Element(Node, usize, usize),
    SymSqrt {
        input: Node,
        vectors: Tensor,
        roots: Vec<f64>,
    },
}

struct Inner {
    values: Vec<Tensor>,
    ops: Vec<Op>,
    grad: Vec<bool>,
}

/// Episode-scoped reverse-mode tape.
///
/// Nodes are appended in creation order, so the index order is a topological
/// order and backward accumulation walks indices downward.
pub struct Tape {
    inner: RefCell<Inner>,
    recording: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

/// Adjoints for the requested variables, in request order.
#[derive(Clone, Debug, PartialEq)]
pub struct GradientMap {
    entries: Vec<(Node, Tensor)>,
}

impl GradientMap {
    pub fn get(&self, node: Node) -> Option<&Tensor> {
        self.entries.iter().find(|(n, _)| *n == node).map(|(_, t)| t)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &(Node, Tensor)> {
        self.entries.iter()
    }

    pub fn into_tensors(self) -> Vec<Tensor> {
        self.entries.into_iter().map(|(_, t)| t).collect()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            inner: RefCell::new(Inner {
                values: Vec::new(),
                ops: Vec::new(),
                grad: Vec::new(),
            }),
            recording: true,
        }
    }

    /// Tape on which `variable` behaves like `constant`; nothing is recorded for backward.
    pub fn no_grad() -> Self {
        Self {
            recording: false,
            ..Self::new()
        }
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    pub fn len(&self) -> usize {
        self.inner.borrow().values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor, op: Op, grad: bool) -> Node {
        let mut inner = self.inner.borrow_mut();
        let idx = inner.values.len();
        inner.values.push(value);
        inner.ops.push(if grad { op } else { Op::Leaf });
        inner.grad.push(grad);
        Node(idx)
    }

    fn needs(&self, nodes: &[Node]) -> bool {
        let inner = self.inner.borrow();
        nodes.iter().any(|n| inner.grad[n.0])
    }

    pub fn constant(&self, value: Tensor) -> Node {
        self.push(value, Op::Leaf, false)
    }

    pub fn scalar(&self, value: f64) -> Node {
        self.constant(Tensor::scalar(value))
    }

    /// Trainable leaf.
    pub fn variable(&self, value: Tensor) -> Node {
        let rec = self.recording;
        self.push(value, Op::Leaf, rec)
    }

    pub fn value(&self, n: Node) -> Ref<'_, Tensor> {
        Ref::map(self.inner.borrow(), |i| &i.values[n.0])
    }

    pub fn value_cloned(&self, n: Node) -> Tensor {
        self.inner.borrow().values[n.0].clone()
    }

    /// First element of the node value; the value of a scalar node.
    pub fn item(&self, n: Node) -> f64 {
        self.inner.borrow().values[n.0].item()
    }

    pub fn shape(&self, n: Node) -> (usize, usize) {
        self.inner.borrow().values[n.0].shape()
    }

    /// Whether the node depends on a variable through a differentiable path.
    pub fn requires_grad(&self, n: Node) -> bool {
        self.inner.borrow().grad[n.0]
    }

    fn binary(
        &self,
        name: &'static str,
        a: Node,
        b: Node,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Node, AdError> {
        let value = {
            let inner = self.inner.borrow();
            zip_broadcast(name, &inner.values[a.0], &inner.values[b.0], f)?
        };
        let g = self.needs(&[a, b]);
        Ok(self.push(value, op, g))
    }

    pub fn add(&self, a: Node, b: Node) -> Result<Node, AdError> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&self, a: Node, b: Node) -> Result<Node, AdError> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&self, a: Node, b: Node) -> Result<Node, AdError> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&self, a: Node, b: Node) -> Result<Node, AdError> {
        self.binary("div", a, b, |x, y| x / y, Op::Div(a, b))
    }

    /// Elementwise maximum; ties send the adjoint to `a`.
    pub fn max(&self, a: Node, b: Node) -> Result<Node, AdError> {
        self.binary("max", a, b, |x, y| if x >= y { x } else { y }, Op::Max(a, b))
    }

    fn unary(&self, a: Node, kind: Unary) -> Result<Node, AdError> {
        let value = {
            let inner = self.inner.borrow();
            let v = &inner.values[a.0];
            match kind {
                Unary::Log | Unary::Sqrt => {
                    if let Some(&bad) = v.data().iter().find(|&&x| !(x > 0.0)) {
                        return Err(AdError::Domain {
                            op: if kind == Unary::Log { "log" } else { "sqrt" },
                            value: bad,
                        });
                    }
                }
                _ => {}
            }
            let f: fn(f64) -> f64 = match kind {
                Unary::Neg => |x: f64| -x,
                Unary::Tanh => f64::tanh,
                Unary::Exp => f64::exp,
                Unary::Log => f64::ln,
                Unary::Sqrt => f64::sqrt,
                Unary::Sin => f64::sin,
                Unary::Cos => f64::cos,
                Unary::Sigmoid => sigmoid,
            };
            v.map(f)
        };
        let g = self.needs(&[a]);
        Ok(self.push(value, Op::Unary(a, kind), g))
    }

    pub fn neg(&self, a: Node) -> Result<Node, AdError> {
        self.unary(a, Unary::Neg)
    }

    pub fn tanh(&self, a: Node) -> Result<Node, AdError> {
        self.unary(a, Unary::Tanh)
    }

    pub fn exp(&self, a: Node) -> Result<Node, AdError> {
        self.unary(a, Unary::Exp)
    }

    pub fn log(&self, a: Node) -> Result<Node, AdError> {
        self.unary(a, Unary::Log)
    }

    pub fn sqrt(&self, a: Node) -> Result<Node, AdError> {
        self.unary(a, Unary::Sqrt)
    }

    pub fn sin(&self, a: Node) -> Result<Node, AdError> {
        self.unary(a, Unary::Sin)
    }

    pub fn cos(&self, a: Node) -> Result<Node, AdError> {
        self.unary(a, Unary::Cos)
    }

    pub fn sigmoid(&self, a: Node) -> Result<Node, AdError> {
        self.unary(a, Unary::Sigmoid)
    }

    pub fn powi(&self, a: Node, n: i32) -> Result<Node, AdError> {
        let value = self.inner.borrow().values[a.0].map(|x| x.powi(n));
        let g = self.needs(&[a]);
        Ok(self.push(value, Op::Powi(a, n), g))
    }

    /// Multiplication by a fixed real.
    pub fn scale(&self, a: Node, s: f64) -> Result<Node, AdError> {
        let value = self.inner.borrow().values[a.0].scale(s);
        let g = self.needs(&[a]);
        Ok(self.push(value, Op::Scale(a, s), g))
    }

    /// Addition of a fixed real.
    pub fn offset(&self, a: Node, s: f64) -> Result<Node, AdError> {
        let value = self.inner.borrow().values[a.0].map(|x| x + s);
        let g = self.needs(&[a]);
        Ok(self.push(value, Op::Offset(a), g))
    }

    pub fn matmul(&self, a: Node, b: Node) -> Result<Node, AdError> {
        let value = {
            let inner = self.inner.borrow();
            inner.values[a.0].matmul(&inner.values[b.0])?
        };
        let g = self.needs(&[a, b]);
        Ok(self.push(value, Op::MatMul(a, b), g))
    }

    pub fn transpose(&self, a: Node) -> Result<Node, AdError> {
        let value = self.inner.borrow().values[a.0].transpose();
        let g = self.needs(&[a]);
        Ok(self.push(value, Op::Transpose(a), g))
    }

    /// Sum of all entries (1×1).
    pub fn sum(&self, a: Node) -> Result<Node, AdError> {
        let value = Tensor::scalar(self.inner.borrow().values[a.0].sum());
        let g = self.needs(&[a]);
        Ok(self.push(value, Op::Sum(a), g))
    }

    pub fn mean(&self, a: Node) -> Result<Node, AdError> {
        let n = self.inner.borrow().values[a.0].len() as f64;
        let s = self.sum(a)?;
        self.scale(s, 1.0 / n)
    }

    /// Sum over rows, giving a 1×cols row.
    pub fn sum_rows(&self, a: Node) -> Result<Node, AdError> {
        let value = {
            let inner = self.inner.borrow();
            let v = &inner.values[a.0];
            v.reduce_to(1, v.cols())
        };
        let g = self.needs(&[a]);
        Ok(self.push(value, Op::SumRows(a), g))
    }

    /// Sum over columns, giving a rows×1 column.
    pub fn sum_cols(&self, a: Node) -> Result<Node, AdError> {
        let value = {
            let inner = self.inner.borrow();
            let v = &inner.values[a.0];
            v.reduce_to(v.rows(), 1)
        };
        let g = self.needs(&[a]);
        Ok(self.push(value, Op::SumCols(a), g))
    }

    /// Clip into `[lo, hi]`; the adjoint passes only where the input was inside.
    pub fn clamp(&self, a: Node, lo: f64, hi: f64) -> Result<Node, AdError> {
        let value = self.inner.borrow().values[a.0].map(|x| x.clamp(lo, hi));
        let g = self.needs(&[a]);
        Ok(self.push(value, Op::Clamp(a, lo, hi), g))
    }

    /// Rows of `a` in the order given (repetition allowed).
    pub fn gather_rows(&self, a: Node, rows: &[usize]) -> Result<Node, AdError> {
        let value = {
            let inner = self.inner.borrow();
            let v = &inner.values[a.0];
            let mut data = Vec::with_capacity(rows.len() * v.cols());
            for &r in rows {
                if r >= v.rows() {
                    return Err(AdError::Index {
                        op: "gather_rows",
                        index: r,
                        extent: v.rows(),
                    });
                }
                data.extend_from_slice(v.row_slice(r));
            }
            Tensor::new(rows.len(), v.cols(), data)?
        };
        let g = self.needs(&[a]);
        Ok(self.push(value, Op::GatherRows(a, rows.to_vec()), g))
    }

    /// Columns of `a` in the order given.
    pub fn select_cols(&self, a: Node, cols: &[usize]) -> Result<Node, AdError> {
        let value = {
            let inner = self.inner.borrow();
            let v = &inner.values[a.0];
            let mut data = Vec::with_capacity(cols.len() * v.rows());
            for r in 0..v.rows() {
                for &c in cols {
                    if c >= v.cols() {
                        return Err(AdError::Index {
                            op: "select_cols",
                            index: c,
                            extent: v.cols(),
                        });
                    }
                    data.push(v.get(r, c));
                }
            }
            Tensor::new(v.rows(), cols.len(), data)?
        };
        let g = self.needs(&[a]);
        Ok(self.push(value, Op::SelectCols(a, cols.to_vec()), g))
    }

    /// Vertical stacking of nodes with equal column counts.
    pub fn concat_rows(&self, parts: &[Node]) -> Result<Node, AdError> {
        let value = {
            let inner = self.inner.borrow();
            let first = parts.first().ok_or(AdError::Empty { op: "concat_rows" })?;
            let cols = inner.values[first.0].cols();
            let mut data = Vec::new();
            let mut rows = 0;
            for p in parts {
                let v = &inner.values[p.0];
                if v.cols() != cols {
                    return Err(AdError::Shape {
                        op: "concat_rows",
                        lhs: inner.values[first.0].shape(),
                        rhs: v.shape(),
                    });
                }
                rows += v.rows();
                data.extend_from_slice(v.data());
            }
            Tensor::new(rows, cols, data)?
        };
        let g = self.needs(parts);
        Ok(self.push(value, Op::ConcatRows(parts.to_vec()), g))
    }

    /// Horizontal stacking of nodes with equal row counts.
    pub fn concat_cols(&self, parts: &[Node]) -> Result<Node, AdError> {
        let value = {
            let inner = self.inner.borrow();
            let first = parts.first().ok_or(AdError::Empty { op: "concat_cols" })?;
            let rows = inner.values[first.0].rows();
            let mut cols = 0;
            for p in parts {
                let v = &inner.values[p.0];
                if v.rows() != rows {
                    return Err(AdError::Shape {
                        op: "concat_cols",
                        lhs: inner.values[first.0].shape(),
                        rhs: v.shape(),
                    });
                }
                cols += v.cols();
            }
            let mut data = Vec::with_capacity(rows * cols);
            for r in 0..rows {
                for p in parts {
                    data.extend_from_slice(inner.values[p.0].row_slice(r));
                }
            }
            Tensor::new(rows, cols, data)?
        };
        let g = self.needs(parts);
        Ok(self.push(value, Op::ConcatCols(parts.to_vec()), g))
    }

    /// Single entry as a 1×1 node.
    pub fn element(&self, a: Node, r: usize, c: usize) -> Result<Node, AdError> {
        let value = {
            let inner = self.inner.borrow();
            let v = &inner.values[a.0];
            if r >= v.rows() || c >= v.cols() {
                return Err(AdError::Index {
                    op: "element",
                    index: r * v.cols() + c,
                    extent: v.len(),
                });
            }
            Tensor::scalar(v.get(r, c))
        };
        let g = self.needs(&[a]);
        Ok(self.push(value, Op::Element(a, r, c), g))
    }

    /// Principal square root of a symmetric matrix through its eigendecomposition.
    /// Negative eigenvalues are clamped to zero.
    pub fn sym_sqrt(&self, a: Node) -> Result<Node, AdError> {
        let (value, vectors, roots) = {
            let inner = self.inner.borrow();
            let v = &inner.values[a.0];
            if v.rows() != v.cols() {
                return Err(AdError::Shape {
                    op: "sym_sqrt",
                    lhs: v.shape(),
                    rhs: v.shape(),
                });
            }
            let n = v.rows();
            let m = DMatrix::from_row_slice(n, n, v.data());
            let sym = (&m + m.transpose()) * 0.5;
            let eig = SymmetricEigen::new(sym);
            let roots: Vec<f64> = eig.eigenvalues.iter().map(|&l| l.max(0.0).sqrt()).collect();
            let mut vectors = Tensor::zeros(n, n);
            for i in 0..n {
                for j in 0..n {
                    vectors.set(i, j, eig.eigenvectors[(i, j)]);
                }
            }
            let mut value = Tensor::zeros(n, n);
            for i in 0..n {
                for j in 0..n {
                    let s: f64 = (0..n)
                        .map(|k| vectors.get(i, k) * roots[k] * vectors.get(j, k))
                        .sum();
                    value.set(i, j, s);
                }
            }
            (value, vectors, roots)
        };
        let g = self.needs(&[a]);
        Ok(self.push(
            value,
            Op::SymSqrt {
                input: a,
                vectors,
                roots,
            },
            g,
        ))
    }

    /// Identity forward, zero adjoint to the input.
    pub fn stop_gradient(&self, a: Node) -> Node {
        let value = self.inner.borrow().values[a.0].clone();
        self.push(value, Op::Leaf, false)
    }

    /// `sg(a) + b - sg(b)`: forward value of `a`, gradient of `b`.
    pub fn with_gradient_of(&self, a: Node, b: Node) -> Result<Node, AdError> {
        let sa = self.stop_gradient(a);
        let sb = self.stop_gradient(b);
        let d = self.sub(b, sb)?;
        self.add(sa, d)
    }

    /// Reverse sweep from a scalar `loss`. Adjoints are accumulated in
    /// descending node index order, which fixes the summation order.
    pub fn backward(&self, loss: Node, variables: &[Node]) -> Result<GradientMap, AdError> {
        let inner = self.inner.borrow();
        let lshape = inner.values[loss.0].shape();
        if lshape != (1, 1) {
            return Err(AdError::NonScalarLoss(lshape));
        }
        let mut adj: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        let mut keep = vec![false; loss.0 + 1];
        for v in variables {
            if v.0 <= loss.0 {
                keep[v.0] = true;
            }
        }
        if inner.grad[loss.0] {
            adj[loss.0] = Some(Tensor::scalar(1.0));
        }
        let mut kept: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        for i in (0..=loss.0).rev() {
            if !inner.grad[i] {
                continue;
            }
            let Some(g) = adj[i].take() else { continue };
            if keep[i] {
                kept[i] = Some(g.clone());
            }
            propagate(&inner, i, &g, &mut adj)?;
        }
        let entries = variables
            .iter()
            .map(|&v| {
                let shape = inner.values[v.0].shape();
                let t = if v.0 <= loss.0 {
                    kept[v.0].clone()
                } else {
                    None
                };
                (v, t.unwrap_or_else(|| Tensor::zeros(shape.0, shape.1)))
            })
            .collect();
        Ok(GradientMap { entries })
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn accumulate(inner: &Inner, adj: &mut [Option<Tensor>], n: Node, g: Tensor) {
    if !inner.grad[n.0] {
        return;
    }
    match &mut adj[n.0] {
        Some(a) => a.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

fn reduce_for(inner: &Inner, n: Node, g: Tensor) -> Tensor {
    let (r, c) = inner.values[n.0].shape();
    g.reduce_to(r, c)
}

fn propagate(inner: &Inner, i: usize, g: &Tensor, adj: &mut [Option<Tensor>]) -> Result<(), AdError> {
    let out = &inner.values[i];
    match &inner.ops[i] {
        Op::Leaf => {}
        Op::Add(a, b) => {
            accumulate(inner, adj, *a, reduce_for(inner, *a, g.clone()));
            accumulate(inner, adj, *b, reduce_for(inner, *b, g.clone()));
        }
        Op::Sub(a, b) => {
            accumulate(inner, adj, *a, reduce_for(inner, *a, g.clone()));
            accumulate(inner, adj, *b, reduce_for(inner, *b, g.scale(-1.0)));
        }
        Op::Mul(a, b) => {
            let (va, vb) = (&inner.values[a.0], &inner.values[b.0]);
            if inner.grad[a.0] {
                let ga = zip_broadcast("mul", g, vb, |x, y| x * y)?;
                accumulate(inner, adj, *a, reduce_for(inner, *a, ga));
            }
            if inner.grad[b.0] {
                let gb = zip_broadcast("mul", g, va, |x, y| x * y)?;
                accumulate(inner, adj, *b, reduce_for(inner, *b, gb));
            }
        }
        Op::Div(a, b) => {
            let vb = &inner.values[b.0];
            if inner.grad[a.0] {
                let ga = zip_broadcast("div", g, vb, |x, y| x / y)?;
                accumulate(inner, adj, *a, reduce_for(inner, *a, ga));
            }
            if inner.grad[b.0] {
                // d(a/b)/db = -(a/b)/b
                let (rows, cols) = out.shape();
                let mut gb = Tensor::zeros(rows, cols);
                for r in 0..rows {
                    for c in 0..cols {
                        gb.set(r, c, -g.get(r, c) * out.get(r, c) / at(vb, r, c));
                    }
                }
                accumulate(inner, adj, *b, reduce_for(inner, *b, gb));
            }
        }
        Op::Max(a, b) => {
            let (va, vb) = (&inner.values[a.0], &inner.values[b.0]);
            let (rows, cols) = out.shape();
            let mut ga = Tensor::zeros(rows, cols);
            let mut gb = Tensor::zeros(rows, cols);
            for r in 0..rows {
                for c in 0..cols {
                    if at(va, r, c) >= at(vb, r, c) {
                        ga.set(r, c, g.get(r, c));
                    } else {
                        gb.set(r, c, g.get(r, c));
                    }
                }
            }
            accumulate(inner, adj, *a, reduce_for(inner, *a, ga));
            accumulate(inner, adj, *b, reduce_for(inner, *b, gb));
        }
        Op::Unary(a, kind) => {
            let x = &inner.values[a.0];
            let d: Vec<f64> = g
                .data()
                .iter()
                .zip(x.data())
                .zip(out.data())
                .map(|((&g, &x), &y)| {
                    g * match kind {
                        Unary::Neg => -1.0,
                        Unary::Tanh => 1.0 - y * y,
                        Unary::Exp => y,
                        Unary::Log => 1.0 / x,
                        Unary::Sqrt => 0.5 / y,
                        Unary::Sin => x.cos(),
                        Unary::Cos => -x.sin(),
                        Unary::Sigmoid => y * (1.0 - y),
                    }
                })
                .collect();
            accumulate(inner, adj, *a, Tensor::new(x.rows(), x.cols(), d)?);
        }
        Op::Powi(a, n) => {
            let x = &inner.values[a.0];
            let n = *n;
            let d: Vec<f64> = g
                .data()
                .iter()
                .zip(x.data())
                .map(|(&g, &x)| if n == 0 { 0.0 } else { g * n as f64 * x.powi(n - 1) })
                .collect();
            accumulate(inner, adj, *a, Tensor::new(x.rows(), x.cols(), d)?);
        }
        Op::Scale(a, s) => accumulate(inner, adj, *a, g.scale(*s)),
        Op::Offset(a) => accumulate(inner, adj, *a, g.clone()),
        Op::MatMul(a, b) => {
            if inner.grad[a.0] {
                let ga = g.matmul(&inner.values[b.0].transpose())?;
                accumulate(inner, adj, *a, ga);
            }
            if inner.grad[b.0] {
                let gb = inner.values[a.0].transpose().matmul(g)?;
                accumulate(inner, adj, *b, gb);
            }
        }
        Op::Transpose(a) => accumulate(inner, adj, *a, g.transpose()),
        Op::Sum(a) => {
            let (r, c) = inner.values[a.0].shape();
            accumulate(inner, adj, *a, Tensor::filled(r, c, g.item()));
        }
        Op::SumRows(a) | Op::SumCols(a) => {
            let (r, c) = inner.values[a.0].shape();
            let ga = zip_broadcast("sum", &Tensor::zeros(r, c), g, |_, y| y)?;
            accumulate(inner, adj, *a, ga);
        }
        Op::Clamp(a, lo, hi) => {
            let x = &inner.values[a.0];
            let d: Vec<f64> = g
                .data()
                .iter()
                .zip(x.data())
                .map(|(&g, &x)| if x >= *lo && x <= *hi { g } else { 0.0 })
                .collect();
            accumulate(inner, adj, *a, Tensor::new(x.rows(), x.cols(), d)?);
        }
        Op::GatherRows(a, rows) => {
            let (r, c) = inner.values[a.0].shape();
            let mut ga = Tensor::zeros(r, c);
            for (k, &src) in rows.iter().enumerate() {
                for j in 0..c {
                    let v = ga.get(src, j) + g.get(k, j);
                    ga.set(src, j, v);
                }
            }
            accumulate(inner, adj, *a, ga);
        }
        Op::SelectCols(a, cols) => {
            let (r, c) = inner.values[a.0].shape();
            let mut ga = Tensor::zeros(r, c);
            for row in 0..r {
                for (k, &src) in cols.iter().enumerate() {
                    let v = ga.get(row, src) + g.get(row, k);
                    ga.set(row, src, v);
                }
            }
            accumulate(inner, adj, *a, ga);
        }
        Op::ConcatRows(parts) => {
            let mut offset = 0;
            for p in parts {
                let (r, c) = inner.values[p.0].shape();
                let data = g.data()[offset * c..(offset + r) * c].to_vec();
                offset += r;
                accumulate(inner, adj, *p, Tensor::new(r, c, data)?);
            }
        }
        Op::ConcatCols(parts) => {
            let mut offset = 0;
            for p in parts {
                let (r, c) = inner.values[p.0].shape();
                let mut gp = Tensor::zeros(r, c);
                for row in 0..r {
                    for col in 0..c {
                        gp.set(row, col, g.get(row, offset + col));
                    }
                }
                offset += c;
                accumulate(inner, adj, *p, gp);
            }
        }
        Op::Element(a, r, c) => {
            let (rows, cols) = inner.values[a.0].shape();
            let mut ga = Tensor::zeros(rows, cols);
            ga.set(*r, *c, g.item());
            accumulate(inner, adj, *a, ga);
        }
        Op::SymSqrt {
            input,
            vectors,
            roots,
        } => {
            // In the eigenbasis the derivative of the square root divides by r_i + r_j.
            let rotated = vectors.transpose().matmul(g)?.matmul(vectors)?;
            let n = roots.len();
            let mut scaled = Tensor::zeros(n, n);
            for i in 0..n {
                for j in 0..n {
                    let den = roots[i] + roots[j];
                    if den > 0.0 {
                        scaled.set(i, j, rotated.get(i, j) / den);
                    }
                }
            }
            let ga = vectors.matmul(&scaled)?.matmul(&vectors.transpose())?;
            accumulate(inner, adj, *input, ga);
        }
    }
    Ok(())
}
