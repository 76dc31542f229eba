//! Reverse-mode automatic differentiation on an explicit tape.
//!
//! A [`Graph`] is an append-only list of nodes. Node ids are assigned in
//! creation order, so every parent id is smaller than its child id and the
//! list is already a topological order. [`Graph::forward`] evaluates the
//! whole tape for a set of input bindings; [`Graph::backward`] sweeps it in
//! reverse and returns adjoints for every parameter node.
//!
//! Two operators exist purely to shape gradient flow:
//!
//! * [`Graph::stop_gradient`] forwards its argument and blocks the adjoint.
//! * [`Graph::straight_through`] forwards its *second* argument and hands its
//!   full adjoint to its *first* argument.
//!
//! [`Graph::quantize`] selects the nearest codebook row; its adjoint reaches
//! the selected row only, never the query.

mod gradcheck;
mod tensor;

use std::collections::{BTreeMap, HashMap};

use thiserror::Error;

pub use gradcheck::{
    finite_diff_check, finite_diff_check_only, relative_error, GradientReport, ParamError,
    RELATIVE_FLOOR,
};
pub use tensor::Tensor;

use tensor::{matmul, matmul_nt_acc, matmul_tn_acc};

pub type NodeId = usize;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GraphError {
    #[error("shape mismatch at node {node} ({op}): {detail}")]
    ShapeMismatch { node: NodeId, op: &'static str, detail: String },
    #[error("input `{name}` (node {node}) is not bound")]
    UnboundInput { node: NodeId, name: String },
    #[error("binding for input `{name}` (node {node}) has shape {got:?}, expected {expected:?}")]
    BindingShape { node: NodeId, name: String, expected: Vec<usize>, got: Vec<usize> },
    #[error("loss node {node} is not scalar (shape {shape:?})")]
    NonScalarLoss { node: NodeId, shape: Vec<usize> },
    #[error("forward pass has not been run")]
    NotEvaluated,
    #[error("gaussian-kl node {node}: standard deviation must be positive, got {value}")]
    NonPositiveSigma { node: NodeId, value: f64 },
    #[error("quantize node {node}: query is not finite")]
    NonFiniteQuery { node: NodeId },
    #[error("quantize node {node}: empty codebook")]
    EmptyCodebook { node: NodeId },
    #[error("unknown parameter `{0}`")]
    UnknownParameter(String),
}

pub type Result<T> = std::result::Result<T, GraphError>;

#[derive(Clone, Debug, PartialEq)]
pub enum Op {
    /// Named placeholder bound at [`Graph::forward`] time.
    Input(String),
    /// Fixed value carried by the tape; never receives gradient.
    Constant,
    /// Named trainable value carried by the tape.
    Parameter(String),
    MatMul(NodeId, NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    /// `[r, n] + [1, n]`, the bias broadcast.
    AddRow(NodeId, NodeId),
    Sigmoid(NodeId),
    Tanh(NodeId),
    Exp(NodeId),
    Square(NodeId),
    Sum(NodeId),
    Mean(NodeId),
    /// Mean over rows, `[r, n] -> [1, n]` (the pooling reduce).
    MeanRows(NodeId),
    ConcatCols(NodeId, NodeId),
    /// Repeat a `[1, n]` row `r` times.
    Tile(NodeId, usize),
    /// Row `i` of a matrix as `[1, n]`.
    Row(NodeId, usize),
    StackRows(Vec<NodeId>),
    StopGradient(NodeId),
    /// Value of `.1`, adjoint to `.0`.
    StraightThrough(NodeId, NodeId),
    /// Nearest row of `codebook` to `query` (both `[1, D]` / `[M, D]`).
    Quantize { query: NodeId, codebook: NodeId },
    /// `KL(N(mu, sigma^2) || N(0, 1))` summed over elements.
    GaussianKl(NodeId, NodeId),
    /// Tanh recurrence `h_t = tanh(pre_t + h_(t-1) wh)` with `h = 0` before
    /// the first step, scanned in reverse row order when `reverse`.
    Recurrence { pre: NodeId, wh: NodeId, reverse: bool },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Input(_) => "input",
            Op::Constant => "constant",
            Op::Parameter(_) => "parameter",
            Op::MatMul(..) => "matmul",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::AddRow(..) => "add_row",
            Op::Sigmoid(_) => "sigmoid",
            Op::Tanh(_) => "tanh",
            Op::Exp(_) => "exp",
            Op::Square(_) => "square",
            Op::Sum(_) => "sum",
            Op::Mean(_) => "mean",
            Op::MeanRows(_) => "mean_rows",
            Op::ConcatCols(..) => "concat_cols",
            Op::Tile(..) => "tile",
            Op::Row(..) => "row",
            Op::StackRows(_) => "stack_rows",
            Op::StopGradient(_) => "stop_gradient",
            Op::StraightThrough(..) => "straight_through",
            Op::Quantize { .. } => "quantize",
            Op::GaussianKl(..) => "gaussian_kl",
            Op::Recurrence { .. } => "recurrence",
        }
    }

    fn parents(&self) -> Vec<NodeId> {
        match self {
            Op::Input(_) | Op::Constant | Op::Parameter(_) => vec![],
            Op::MatMul(a, b)
            | Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::AddRow(a, b)
            | Op::ConcatCols(a, b)
            | Op::StraightThrough(a, b)
            | Op::GaussianKl(a, b) => vec![*a, *b],
            Op::Quantize { query, codebook } => vec![*query, *codebook],
            Op::Recurrence { pre, wh, .. } => vec![*pre, *wh],
            Op::Scale(a, _)
            | Op::Sigmoid(a)
            | Op::Tanh(a)
            | Op::Exp(a)
            | Op::Square(a)
            | Op::Sum(a)
            | Op::Mean(a)
            | Op::MeanRows(a)
            | Op::Tile(a, _)
            | Op::Row(a, _)
            | Op::StopGradient(a) => vec![*a],
            Op::StackRows(ids) => ids.clone(),
        }
    }
}

#[derive(Clone, Debug)]
struct Node {
    op: Op,
    shape: Vec<usize>,
    requires_grad: bool,
}

/// Parameter adjoints keyed by parameter name.
pub type Gradients = BTreeMap<String, Tensor>;

#[derive(Clone, Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    values: Vec<Option<Tensor>>,
    params: HashMap<String, NodeId>,
    quantized: HashMap<NodeId, usize>,
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn mismatch(node: NodeId, op: &'static str, detail: String) -> GraphError {
    GraphError::ShapeMismatch { node, op, detail }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn op(&self, id: NodeId) -> &Op {
        &self.nodes[id].op
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        &self.nodes[id].shape
    }

    fn push(&mut self, op: Op, shape: Vec<usize>, value: Option<Tensor>) -> NodeId {
        let requires_grad = match &op {
            Op::Parameter(_) => true,
            Op::Input(_) | Op::Constant | Op::StopGradient(_) => false,
            Op::StraightThrough(a, _) => self.nodes[*a].requires_grad,
            Op::Quantize { codebook, .. } => self.nodes[*codebook].requires_grad,
            other => other.parents().iter().any(|&p| self.nodes[p].requires_grad),
        };
        self.nodes.push(Node { op, shape, requires_grad });
        self.values.push(value);
        self.nodes.len() - 1
    }

    fn next_id(&self) -> NodeId {
        self.nodes.len()
    }

    pub fn input(&mut self, name: &str, shape: &[usize]) -> NodeId {
        self.push(Op::Input(name.to_string()), shape.to_vec(), None)
    }

    pub fn constant(&mut self, value: Tensor) -> NodeId {
        let shape = value.shape.clone();
        self.push(Op::Constant, shape, Some(value))
    }

    /// Registers a named parameter. Registering the same name twice
    /// returns the existing node.
    pub fn parameter(&mut self, name: &str, value: Tensor) -> NodeId {
        if let Some(&id) = self.params.get(name) {
            return id;
        }
        let shape = value.shape.clone();
        let id = self.push(Op::Parameter(name.to_string()), shape, Some(value));
        self.params.insert(name.to_string(), id);
        id
    }

    pub fn parameter_id(&self, name: &str) -> Option<NodeId> {
        self.params.get(name).copied()
    }

    /// Parameter names in ascending node-id order.
    pub fn parameter_names(&self) -> Vec<String> {
        let mut v: Vec<(NodeId, &String)> = self.params.iter().map(|(k, &v)| (v, k)).collect();
        v.sort();
        v.into_iter().map(|(_, k)| k.clone()).collect()
    }

    pub fn set_parameter(&mut self, name: &str, value: Tensor) -> Result<()> {
        let id = self.parameter_id(name).ok_or_else(|| GraphError::UnknownParameter(name.into()))?;
        if value.shape != self.nodes[id].shape {
            return Err(mismatch(id, "parameter", format!("new value has shape {:?}", value.shape)));
        }
        self.values[id] = Some(value);
        Ok(())
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (sa, sb) = (&self.nodes[a].shape, &self.nodes[b].shape);
        let id = self.next_id();
        if sa.len() != 2 || sb.is_empty() || sa[1] != sb[0] {
            return Err(mismatch(id, "matmul", format!("{sa:?} x {sb:?}")));
        }
        let shape = if sb.len() == 1 { vec![sa[0]] } else { vec![sa[0], sb[1]] };
        Ok(self.push(Op::MatMul(a, b), shape, None))
    }

    fn same_shape(&mut self, op: Op, a: NodeId, b: NodeId) -> Result<NodeId> {
        let id = self.next_id();
        if self.nodes[a].shape != self.nodes[b].shape {
            let detail = format!("{:?} vs {:?}", self.nodes[a].shape, self.nodes[b].shape);
            return Err(mismatch(id, op.name(), detail));
        }
        let shape = self.nodes[a].shape.clone();
        Ok(self.push(op, shape, None))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape(Op::Add(a, b), a, b)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape(Op::Sub(a, b), a, b)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape(Op::Mul(a, b), a, b)
    }

    pub fn straight_through(&mut self, grad_to: NodeId, value_from: NodeId) -> Result<NodeId> {
        self.same_shape(Op::StraightThrough(grad_to, value_from), grad_to, value_from)
    }

    pub fn gaussian_kl(&mut self, mu: NodeId, sigma: NodeId) -> Result<NodeId> {
        let id = self.next_id();
        if self.nodes[mu].shape != self.nodes[sigma].shape {
            let detail = format!("{:?} vs {:?}", self.nodes[mu].shape, self.nodes[sigma].shape);
            return Err(mismatch(id, "gaussian_kl", detail));
        }
        Ok(self.push(Op::GaussianKl(mu, sigma), vec![], None))
    }

    fn unary(&mut self, op: Op, a: NodeId) -> NodeId {
        let shape = self.nodes[a].shape.clone();
        self.push(op, shape, None)
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        self.unary(Op::Scale(a, c), a)
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        self.unary(Op::Sigmoid(a), a)
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        self.unary(Op::Tanh(a), a)
    }

    pub fn exp(&mut self, a: NodeId) -> NodeId {
        self.unary(Op::Exp(a), a)
    }

    pub fn square(&mut self, a: NodeId) -> NodeId {
        self.unary(Op::Square(a), a)
    }

    pub fn stop_gradient(&mut self, a: NodeId) -> NodeId {
        self.unary(Op::StopGradient(a), a)
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Sum(a), vec![], None)
    }

    pub fn mean(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Mean(a), vec![], None)
    }

    pub fn add_row(&mut self, a: NodeId, row: NodeId) -> Result<NodeId> {
        let id = self.next_id();
        let (sa, sr) = (&self.nodes[a].shape, &self.nodes[row].shape);
        let cols = match sr.as_slice() {
            [n] | [1, n] => *n,
            _ => return Err(mismatch(id, "add_row", format!("bias shape {sr:?}"))),
        };
        if sa.len() != 2 || sa[1] != cols {
            return Err(mismatch(id, "add_row", format!("{sa:?} + row {sr:?}")));
        }
        let shape = sa.clone();
        Ok(self.push(Op::AddRow(a, row), shape, None))
    }

    pub fn mean_rows(&mut self, a: NodeId) -> Result<NodeId> {
        let id = self.next_id();
        let s = &self.nodes[a].shape;
        if s.len() != 2 || s[0] == 0 {
            return Err(mismatch(id, "mean_rows", format!("{s:?}")));
        }
        let shape = vec![1, s[1]];
        Ok(self.push(Op::MeanRows(a), shape, None))
    }

    pub fn concat_cols(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let id = self.next_id();
        let (sa, sb) = (&self.nodes[a].shape, &self.nodes[b].shape);
        if sa.len() != 2 || sb.len() != 2 || sa[0] != sb[0] {
            return Err(mismatch(id, "concat_cols", format!("{sa:?} | {sb:?}")));
        }
        let shape = vec![sa[0], sa[1] + sb[1]];
        Ok(self.push(Op::ConcatCols(a, b), shape, None))
    }

    pub fn tile(&mut self, a: NodeId, rows: usize) -> Result<NodeId> {
        let id = self.next_id();
        let s = &self.nodes[a].shape;
        if s.len() != 2 || s[0] != 1 {
            return Err(mismatch(id, "tile", format!("expected [1, n], got {s:?}")));
        }
        let shape = vec![rows, s[1]];
        Ok(self.push(Op::Tile(a, rows), shape, None))
    }

    pub fn row(&mut self, a: NodeId, i: usize) -> Result<NodeId> {
        let id = self.next_id();
        let s = &self.nodes[a].shape;
        if s.len() != 2 || i >= s[0] {
            return Err(mismatch(id, "row", format!("row {i} of {s:?}")));
        }
        let shape = vec![1, s[1]];
        Ok(self.push(Op::Row(a, i), shape, None))
    }

    pub fn stack_rows(&mut self, ids: Vec<NodeId>) -> Result<NodeId> {
        let id = self.next_id();
        let Some(&first) = ids.first() else {
            return Err(mismatch(id, "stack_rows", "no rows".into()));
        };
        let s = self.nodes[first].shape.clone();
        if s.len() != 2 || s[0] != 1 || ids.iter().any(|&r| self.nodes[r].shape != s) {
            return Err(mismatch(id, "stack_rows", "rows must all be [1, n]".into()));
        }
        let shape = vec![ids.len(), s[1]];
        Ok(self.push(Op::StackRows(ids), shape, None))
    }

    /// `pre` is `[T, U]`, `wh` is `[U, U]`; returns the `[T, U]` states.
    pub fn recurrence(&mut self, pre: NodeId, wh: NodeId, reverse: bool) -> Result<NodeId> {
        let id = self.next_id();
        let (sp, sw) = (&self.nodes[pre].shape, &self.nodes[wh].shape);
        if sp.len() != 2 || sw.len() != 2 || sw[0] != sp[1] || sw[1] != sp[1] {
            return Err(mismatch(id, "recurrence", format!("pre {sp:?}, wh {sw:?}")));
        }
        let shape = sp.clone();
        Ok(self.push(Op::Recurrence { pre, wh, reverse }, shape, None))
    }

    pub fn quantize(&mut self, query: NodeId, codebook: NodeId) -> Result<NodeId> {
        let id = self.next_id();
        let (sq, sc) = (&self.nodes[query].shape, &self.nodes[codebook].shape);
        if sq.len() != 2 || sq[0] != 1 || sc.len() != 2 || sc[1] != sq[1] {
            return Err(mismatch(id, "quantize", format!("query {sq:?}, codebook {sc:?}")));
        }
        if sc[0] == 0 {
            return Err(GraphError::EmptyCodebook { node: id });
        }
        let shape = sq.clone();
        Ok(self.push(Op::Quantize { query, codebook }, shape, None))
    }

    /// Codeword index chosen by a quantize node in the last forward pass.
    pub fn quantized_index(&self, id: NodeId) -> Option<usize> {
        self.quantized.get(&id).copied()
    }

    pub fn value(&self, id: NodeId) -> Result<&Tensor> {
        self.values[id].as_ref().ok_or(GraphError::NotEvaluated)
    }

    /// Evaluates every node. `bindings` supplies values for named inputs.
    pub fn forward(&mut self, bindings: &HashMap<String, Tensor>) -> Result<()> {
        for id in 0..self.nodes.len() {
            let v = match &self.nodes[id].op {
                Op::Constant | Op::Parameter(_) => continue,
                Op::Input(name) => {
                    let Some(t) = bindings.get(name) else {
                        if self.values[id].is_some() {
                            continue;
                        }
                        return Err(GraphError::UnboundInput { node: id, name: name.clone() });
                    };
                    if t.shape != self.nodes[id].shape {
                        return Err(GraphError::BindingShape {
                            node: id,
                            name: name.clone(),
                            expected: self.nodes[id].shape.clone(),
                            got: t.shape.clone(),
                        });
                    }
                    t.clone()
                }
                _ => self.eval_node(id)?,
            };
            self.values[id] = Some(v);
        }
        Ok(())
    }

    /// Forward pass with no external bindings.
    pub fn run(&mut self) -> Result<()> {
        self.forward(&HashMap::new())
    }

    fn val(&self, id: NodeId) -> &Tensor {
        self.values[id].as_ref().expect("parents evaluated before children")
    }

    fn eval_node(&mut self, id: NodeId) -> Result<Tensor> {
        let op = self.nodes[id].op.clone();
        let shape = self.nodes[id].shape.clone();
        let t = match op {
            Op::Input(_) | Op::Constant | Op::Parameter(_) => unreachable!(),
            Op::MatMul(a, b) => matmul(self.val(a), self.val(b)),
            Op::Add(a, b) => self.val(a).zip_map(self.val(b), |x, y| x + y),
            Op::Sub(a, b) => self.val(a).zip_map(self.val(b), |x, y| x - y),
            Op::Mul(a, b) => self.val(a).zip_map(self.val(b), |x, y| x * y),
            Op::Scale(a, c) => self.val(a).scaled(c),
            Op::AddRow(a, r) => {
                let (av, rv) = (self.val(a), self.val(r));
                let n = av.cols();
                let mut out = av.clone();
                for chunk in out.values.chunks_mut(n) {
                    for (o, b) in chunk.iter_mut().zip(&rv.values) {
                        *o += b;
                    }
                }
                out
            }
            Op::Sigmoid(a) => self.val(a).map(sigmoid),
            Op::Tanh(a) => self.val(a).map(f64::tanh),
            Op::Exp(a) => self.val(a).map(f64::exp),
            Op::Square(a) => self.val(a).map(|x| x * x),
            Op::Sum(a) => Tensor::scalar(self.val(a).sum()),
            Op::Mean(a) => {
                let v = self.val(a);
                Tensor::scalar(v.sum() / v.len() as f64)
            }
            Op::MeanRows(a) => {
                let v = self.val(a);
                let (r, n) = v.dims2();
                let mut out = vec![0.0; n];
                for chunk in v.values.chunks(n) {
                    for (o, x) in out.iter_mut().zip(chunk) {
                        *o += x;
                    }
                }
                let inv = 1.0 / r as f64;
                out.iter_mut().for_each(|o| *o *= inv);
                Tensor::new(shape, out)
            }
            Op::ConcatCols(a, b) => {
                let (av, bv) = (self.val(a), self.val(b));
                let (r, na) = av.dims2();
                let nb = bv.cols();
                let mut out = Vec::with_capacity(r * (na + nb));
                for i in 0..r {
                    out.extend_from_slice(av.row_slice(i));
                    out.extend_from_slice(bv.row_slice(i));
                }
                Tensor::new(shape, out)
            }
            Op::Tile(a, rows) => {
                let v = self.val(a);
                let mut out = Vec::with_capacity(rows * v.len());
                for _ in 0..rows {
                    out.extend_from_slice(&v.values);
                }
                Tensor::new(shape, out)
            }
            Op::Row(a, i) => Tensor::new(shape, self.val(a).row_slice(i).to_vec()),
            Op::StackRows(ids) => {
                let mut out = Vec::with_capacity(shape.iter().product());
                for r in ids {
                    out.extend_from_slice(&self.val(r).values);
                }
                Tensor::new(shape, out)
            }
            Op::StopGradient(a) => self.val(a).clone(),
            Op::StraightThrough(_, b) => self.val(b).clone(),
            Op::Quantize { query, codebook } => {
                let q = self.val(query);
                if !q.is_finite() {
                    return Err(GraphError::NonFiniteQuery { node: id });
                }
                let cb = self.val(codebook);
                let m = nearest_row(cb, &q.values);
                let row = cb.row_slice(m).to_vec();
                self.quantized.insert(id, m);
                Tensor::new(shape, row)
            }
            Op::GaussianKl(mu, sigma) => {
                let (m, s) = (self.val(mu), self.val(sigma));
                let mut kl = 0.0;
                for (&mv, &sv) in m.values.iter().zip(&s.values) {
                    if sv.is_nan() || sv <= 0.0 {
                        return Err(GraphError::NonPositiveSigma { node: id, value: sv });
                    }
                    kl += 0.5 * (mv * mv + sv * sv - 1.0 - 2.0 * sv.ln());
                }
                Tensor::scalar(kl)
            }
            Op::Recurrence { pre, wh, reverse } => {
                let (p, w) = (self.val(pre), self.val(wh));
                let (steps, u) = p.dims2();
                let mut out = vec![0.0; steps * u];
                let mut prev: Option<usize> = None;
                for t in scan_order(steps, reverse) {
                    let mut a = p.row_slice(t).to_vec();
                    if let Some(q) = prev {
                        let h = &out[q * u..(q + 1) * u];
                        for (i, hi) in h.iter().enumerate() {
                            for (aj, wj) in a.iter_mut().zip(&w.values[i * u..(i + 1) * u]) {
                                *aj += hi * wj;
                            }
                        }
                    }
                    for (o, av) in out[t * u..(t + 1) * u].iter_mut().zip(&a) {
                        *o = av.tanh();
                    }
                    prev = Some(t);
                }
                Tensor::new(shape, out)
            }
        };
        Ok(t)
    }

    /// Adjoints of every parameter with respect to the scalar `loss` node.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        let adj = self.adjoints(loss)?;
        let mut out = Gradients::new();
        for (name, &id) in &self.params {
            let g = adj[id].clone().unwrap_or_else(|| Tensor::zeros(&self.nodes[id].shape));
            out.insert(name.clone(), g);
        }
        Ok(out)
    }

    /// Full adjoint table; `None` where no gradient reaches a node.
    pub fn adjoints(&self, loss: NodeId) -> Result<Vec<Option<Tensor>>> {
        let shape = &self.nodes[loss].shape;
        if shape.iter().product::<usize>() != 1 {
            return Err(GraphError::NonScalarLoss { node: loss, shape: shape.clone() });
        }
        if self.values[loss].is_none() {
            return Err(GraphError::NotEvaluated);
        }
        let mut adj: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        adj[loss] = Some(Tensor { shape: shape.clone(), values: vec![1.0] });
        for id in (0..=loss).rev() {
            if !self.nodes[id].requires_grad {
                continue;
            }
            let Some(g) = adj[id].take() else { continue };
            self.propagate(id, &g, &mut adj);
            adj[id] = Some(g);
        }
        Ok(adj)
    }

    fn wants(&self, id: NodeId) -> bool {
        self.nodes[id].requires_grad
    }

    fn slot<'a>(&self, adj: &'a mut [Option<Tensor>], id: NodeId) -> &'a mut Tensor {
        adj[id].get_or_insert_with(|| Tensor::zeros(&self.nodes[id].shape))
    }

    fn accumulate(&self, adj: &mut [Option<Tensor>], id: NodeId, g: &Tensor) {
        if self.wants(id) {
            self.slot(adj, id).add_assign(g);
        }
    }

    fn propagate(&self, id: NodeId, g: &Tensor, adj: &mut [Option<Tensor>]) {
        match &self.nodes[id].op {
            Op::Input(_) | Op::Constant | Op::Parameter(_) | Op::StopGradient(_) => {}
            &Op::MatMul(a, b) => {
                let (av, bv) = (self.val(a), self.val(b));
                let (m, k) = av.dims2();
                let n = bv.cols();
                if self.wants(a) {
                    matmul_nt_acc(&mut self.slot(adj, a).values, &g.values, &bv.values, m, k, n);
                }
                if self.wants(b) {
                    matmul_tn_acc(&mut self.slot(adj, b).values, &av.values, &g.values, m, k, n);
                }
            }
            &Op::Add(a, b) => {
                self.accumulate(adj, a, g);
                self.accumulate(adj, b, g);
            }
            &Op::Sub(a, b) => {
                self.accumulate(adj, a, g);
                if self.wants(b) {
                    let s = self.slot(adj, b);
                    for (o, x) in s.values.iter_mut().zip(&g.values) {
                        *o -= x;
                    }
                }
            }
            &Op::Mul(a, b) => {
                if self.wants(a) {
                    let d = g.zip_map(self.val(b), |x, y| x * y);
                    self.slot(adj, a).add_assign(&d);
                }
                if self.wants(b) {
                    let d = g.zip_map(self.val(a), |x, y| x * y);
                    self.slot(adj, b).add_assign(&d);
                }
            }
            &Op::Scale(a, c) => {
                if self.wants(a) {
                    let s = self.slot(adj, a);
                    for (o, x) in s.values.iter_mut().zip(&g.values) {
                        *o += c * x;
                    }
                }
            }
            &Op::AddRow(a, r) => {
                self.accumulate(adj, a, g);
                if self.wants(r) {
                    let n = g.cols();
                    let s = self.slot(adj, r);
                    for chunk in g.values.chunks(n) {
                        for (o, x) in s.values.iter_mut().zip(chunk) {
                            *o += x;
                        }
                    }
                }
            }
            &Op::Sigmoid(a) => {
                if self.wants(a) {
                    let y = self.val(id);
                    let s = self.slot(adj, a);
                    for ((o, x), yv) in s.values.iter_mut().zip(&g.values).zip(&y.values) {
                        *o += x * yv * (1.0 - yv);
                    }
                }
            }
            &Op::Tanh(a) => {
                if self.wants(a) {
                    let y = self.val(id);
                    let s = self.slot(adj, a);
                    for ((o, x), yv) in s.values.iter_mut().zip(&g.values).zip(&y.values) {
                        *o += x * (1.0 - yv * yv);
                    }
                }
            }
            &Op::Exp(a) => {
                if self.wants(a) {
                    let y = self.val(id);
                    let s = self.slot(adj, a);
                    for ((o, x), yv) in s.values.iter_mut().zip(&g.values).zip(&y.values) {
                        *o += x * yv;
                    }
                }
            }
            &Op::Square(a) => {
                if self.wants(a) {
                    let xv = self.val(a);
                    let s = self.slot(adj, a);
                    for ((o, x), v) in s.values.iter_mut().zip(&g.values).zip(&xv.values) {
                        *o += 2.0 * v * x;
                    }
                }
            }
            &Op::Sum(a) => {
                if self.wants(a) {
                    let gv = g.item();
                    self.slot(adj, a).values.iter_mut().for_each(|o| *o += gv);
                }
            }
            &Op::Mean(a) => {
                if self.wants(a) {
                    let s = self.slot(adj, a);
                    let gv = g.item() / s.len() as f64;
                    s.values.iter_mut().for_each(|o| *o += gv);
                }
            }
            &Op::MeanRows(a) => {
                if self.wants(a) {
                    let s = self.slot(adj, a);
                    let (r, n) = s.dims2();
                    let inv = 1.0 / r as f64;
                    for chunk in s.values.chunks_mut(n) {
                        for (o, x) in chunk.iter_mut().zip(&g.values) {
                            *o += x * inv;
                        }
                    }
                }
            }
            &Op::ConcatCols(a, b) => {
                let na = self.nodes[a].shape[1];
                let n = g.cols();
                if self.wants(a) {
                    let s = self.slot(adj, a);
                    for (i, chunk) in s.values.chunks_mut(na).enumerate() {
                        for (o, x) in chunk.iter_mut().zip(&g.values[i * n..i * n + na]) {
                            *o += x;
                        }
                    }
                }
                if self.wants(b) {
                    let nb = n - na;
                    let s = self.slot(adj, b);
                    for (i, chunk) in s.values.chunks_mut(nb).enumerate() {
                        for (o, x) in chunk.iter_mut().zip(&g.values[i * n + na..(i + 1) * n]) {
                            *o += x;
                        }
                    }
                }
            }
            &Op::Tile(a, _) => {
                if self.wants(a) {
                    let s = self.slot(adj, a);
                    let n = s.len();
                    for chunk in g.values.chunks(n) {
                        for (o, x) in s.values.iter_mut().zip(chunk) {
                            *o += x;
                        }
                    }
                }
            }
            &Op::Row(a, i) => {
                if self.wants(a) {
                    let s = self.slot(adj, a);
                    let n = s.cols();
                    for (o, x) in s.values[i * n..(i + 1) * n].iter_mut().zip(&g.values) {
                        *o += x;
                    }
                }
            }
            Op::StackRows(ids) => {
                let n = g.cols();
                for (i, &r) in ids.iter().enumerate() {
                    if self.wants(r) {
                        let s = self.slot(adj, r);
                        for (o, x) in s.values.iter_mut().zip(&g.values[i * n..(i + 1) * n]) {
                            *o += x;
                        }
                    }
                }
            }
            &Op::StraightThrough(a, _) => self.accumulate(adj, a, g),
            &Op::Quantize { codebook, .. } => {
                if self.wants(codebook) {
                    let m = self.quantized[&id];
                    let s = self.slot(adj, codebook);
                    let n = s.cols();
                    for (o, x) in s.values[m * n..(m + 1) * n].iter_mut().zip(&g.values) {
                        *o += x;
                    }
                }
            }
            &Op::GaussianKl(mu, sigma) => {
                let gv = g.item();
                if self.wants(mu) {
                    let mv = self.val(mu);
                    let s = self.slot(adj, mu);
                    for (o, m) in s.values.iter_mut().zip(&mv.values) {
                        *o += gv * m;
                    }
                }
                if self.wants(sigma) {
                    let sv = self.val(sigma);
                    let s = self.slot(adj, sigma);
                    for (o, x) in s.values.iter_mut().zip(&sv.values) {
                        *o += gv * (x - 1.0 / x);
                    }
                }
            }
            &Op::Recurrence { pre, wh, reverse } => {
                let (h, w) = (self.val(id), self.val(wh));
                let (steps, u) = h.dims2();
                let order: Vec<usize> = scan_order(steps, reverse).collect();
                let mut dpre = vec![0.0; steps * u];
                let mut dw = vec![0.0; u * u];
                let mut carry = vec![0.0; u];
                for (k, &t) in order.iter().enumerate().rev() {
                    let ht = h.row_slice(t);
                    let da: Vec<f64> = (0..u)
                        .map(|j| (g.values[t * u + j] + carry[j]) * (1.0 - ht[j] * ht[j]))
                        .collect();
                    dpre[t * u..(t + 1) * u].copy_from_slice(&da);
                    carry.iter_mut().for_each(|c| *c = 0.0);
                    if k > 0 {
                        let hp = h.row_slice(order[k - 1]);
                        for i in 0..u {
                            let wi = &w.values[i * u..(i + 1) * u];
                            let dwi = &mut dw[i * u..(i + 1) * u];
                            for j in 0..u {
                                dwi[j] += hp[i] * da[j];
                                carry[i] += wi[j] * da[j];
                            }
                        }
                    }
                }
                if self.wants(pre) {
                    let s = self.slot(adj, pre);
                    s.values.iter_mut().zip(&dpre).for_each(|(o, x)| *o += x);
                }
                if self.wants(wh) {
                    let s = self.slot(adj, wh);
                    s.values.iter_mut().zip(&dw).for_each(|(o, x)| *o += x);
                }
            }
        }
    }
}

fn scan_order(steps: usize, reverse: bool) -> Box<dyn Iterator<Item = usize>> {
    if reverse {
        Box::new((0..steps).rev())
    } else {
        Box::new(0..steps)
    }
}

/// Index of the row of `codebook` closest to `query` in squared Euclidean
/// distance; ties go to the lowest index.
pub(crate) fn nearest_row(codebook: &Tensor, query: &[f64]) -> usize {
    let n = codebook.cols();
    let mut best = (0, f64::INFINITY);
    for (m, row) in codebook.values.chunks(n).enumerate() {
        let d: f64 = row.iter().zip(query).map(|(c, q)| (c - q) * (c - q)).sum();
        if d < best.1 {
            best = (m, d);
        }
    }
    best.0
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_param(g: &mut Graph, name: &str, v: f64) -> NodeId {
        g.parameter(name, Tensor::scalar(v))
    }

    #[test]
    fn sigmoid_of_zero_is_half() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::scalar(0.0));
        let s = g.sigmoid(x);
        g.run().unwrap();
        assert_eq!(g.value(s).unwrap().item(), 0.5);
    }

    #[test]
    fn identity_matmul_through_input_binding() {
        let mut g = Graph::new();
        let i = g.constant(Tensor::identity(3));
        let v = g.input("v", &[3]);
        let y = g.matmul(i, v).unwrap();
        let vt = Tensor::vector(vec![0.3, -1.0, 7.5]);
        g.forward(&HashMap::from([("v".to_string(), vt.clone())])).unwrap();
        assert_eq!(g.value(y).unwrap(), &vt);
    }

    #[test]
    fn mean_square_of_identical_is_zero() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::row(vec![1.0, 2.0, 3.0]));
        let b = g.constant(Tensor::row(vec![1.0, 2.0, 3.0]));
        let d = g.sub(a, b).unwrap();
        let sq = g.square(d);
        let m = g.mean(sq);
        g.run().unwrap();
        assert_eq!(g.value(m).unwrap().item(), 0.0);
    }

    #[test]
    fn square_gradient() {
        let mut g = Graph::new();
        let x = scalar_param(&mut g, "x", 3.0);
        let y = g.square(x);
        g.run().unwrap();
        assert_eq!(g.backward(y).unwrap()["x"].item(), 6.0);
    }

    #[test]
    fn stop_gradient_halves_the_product_rule() {
        let mut g = Graph::new();
        let x = scalar_param(&mut g, "x", 2.0);
        let sx = g.stop_gradient(x);
        let y = g.mul(x, sx).unwrap();
        g.run().unwrap();
        assert_eq!(g.value(y).unwrap().item(), 4.0);
        assert_eq!(g.backward(y).unwrap()["x"].item(), 2.0);
    }

    #[test]
    fn straight_through_routing() {
        let mut g = Graph::new();
        let ze = scalar_param(&mut g, "ze", 0.7);
        let zq = scalar_param(&mut g, "zq", 3.0);
        let y = g.straight_through(ze, zq).unwrap();
        let l = g.square(y);
        g.run().unwrap();
        let grads = g.backward(l).unwrap();
        assert_eq!(g.value(l).unwrap().item(), 9.0);
        assert_eq!(grads["ze"].item(), 6.0);
        assert_eq!(grads["zq"].item(), 0.0);
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut g = Graph::new();
        let x = g.parameter("x", Tensor::row(vec![1.0, 2.0]));
        let y = g.square(x);
        g.run().unwrap();
        assert!(matches!(g.backward(y), Err(GraphError::NonScalarLoss { .. })));
    }

    #[test]
    fn unbound_input_names_the_node() {
        let mut g = Graph::new();
        let x = g.input("frames", &[2, 2]);
        let _ = g.square(x);
        let err = g.run().unwrap_err();
        assert_eq!(err, GraphError::UnboundInput { node: x, name: "frames".into() });
        assert!(err.to_string().contains("frames"));
    }

    #[test]
    fn binding_shape_checked() {
        let mut g = Graph::new();
        g.input("v", &[3]);
        let bad = HashMap::from([("v".to_string(), Tensor::vector(vec![1.0, 2.0]))]);
        assert!(matches!(g.forward(&bad), Err(GraphError::BindingShape { .. })));
    }

    #[test]
    fn build_time_shape_mismatch() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[2, 3]));
        assert!(matches!(g.matmul(a, b), Err(GraphError::ShapeMismatch { op: "matmul", .. })));
        let c = g.constant(Tensor::zeros(&[3, 2]));
        assert!(g.add(a, c).is_err());
    }

    #[test]
    fn quantize_routes_gradient_to_selected_row_only() {
        let mut g = Graph::new();
        let q = g.parameter("q", Tensor::row(vec![0.9, 1.2]));
        let cb = g.parameter("cb", Tensor::from_rows(&[vec![0.0, 0.0], vec![1.0, 1.0], vec![5.0, 5.0]]));
        let zq = g.quantize(q, cb).unwrap();
        let s = g.sum(zq);
        g.run().unwrap();
        assert_eq!(g.quantized_index(zq), Some(1));
        let grads = g.backward(s).unwrap();
        assert_eq!(grads["q"].values, vec![0.0, 0.0]);
        assert_eq!(grads["cb"].values, vec![0.0, 0.0, 1.0, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn gaussian_kl_closed_form() {
        let mut g = Graph::new();
        let mu = g.constant(Tensor::scalar(1.0));
        let s = g.constant(Tensor::scalar(1.0));
        let kl = g.gaussian_kl(mu, s).unwrap();
        g.run().unwrap();
        assert!((g.value(kl).unwrap().item() - 0.5).abs() < 1e-15);

        let mut g = Graph::new();
        let mu = g.constant(Tensor::scalar(0.0));
        let s = g.constant(Tensor::scalar(-0.1));
        g.gaussian_kl(mu, s).unwrap();
        assert!(matches!(g.run(), Err(GraphError::NonPositiveSigma { .. })));
    }

    #[test]
    fn shared_parameter_registered_once() {
        let mut g = Graph::new();
        let a = g.parameter("w", Tensor::scalar(1.0));
        let b = g.parameter("w", Tensor::scalar(5.0));
        assert_eq!(a, b);
        assert_eq!(g.parameter_names(), vec!["w".to_string()]);
    }

    fn recurrence_pair(reverse: bool) -> (Graph, NodeId, Graph, NodeId) {
        let pre = Tensor::matrix(4, 3, (0..12).map(|i| ((i * 7 % 5) as f64 - 2.0) * 0.3).collect());
        let wh = Tensor::matrix(3, 3, (0..9).map(|i| ((i * 4 % 7) as f64 - 3.0) * 0.2).collect());
        let weights = Tensor::matrix(4, 3, (0..12).map(|i| (i as f64 - 5.5) * 0.1).collect());

        let mut fused = Graph::new();
        let p = fused.parameter("pre", pre.clone());
        let w = fused.parameter("wh", wh.clone());
        let h = fused.recurrence(p, w, reverse).unwrap();
        let c = fused.constant(weights.clone());
        let m = fused.mul(h, c).unwrap();
        let loss_f = fused.sum(m);

        let mut unrolled = Graph::new();
        let p = unrolled.parameter("pre", pre);
        let w = unrolled.parameter("wh", wh);
        let mut states = vec![0; 4];
        let mut prev = None;
        let order: Vec<usize> = if reverse { vec![3, 2, 1, 0] } else { vec![0, 1, 2, 3] };
        for t in order {
            let mut a = unrolled.row(p, t).unwrap();
            if let Some(hp) = prev {
                let r = unrolled.matmul(hp, w).unwrap();
                a = unrolled.add(a, r).unwrap();
            }
            let h = unrolled.tanh(a);
            states[t] = h;
            prev = Some(h);
        }
        let h = unrolled.stack_rows(states).unwrap();
        let c = unrolled.constant(weights);
        let m = unrolled.mul(h, c).unwrap();
        let loss_u = unrolled.sum(m);
        (fused, loss_f, unrolled, loss_u)
    }

    #[test]
    fn recurrence_matches_unrolled_cells() {
        for reverse in [false, true] {
            let (mut f, lf, mut u, lu) = recurrence_pair(reverse);
            f.run().unwrap();
            u.run().unwrap();
            let (vf, vu) = (f.value(lf).unwrap().item(), u.value(lu).unwrap().item());
            assert!((vf - vu).abs() < 1e-14, "{vf} {vu}");
            let (gf, gu) = (f.backward(lf).unwrap(), u.backward(lu).unwrap());
            for name in ["pre", "wh"] {
                assert!(gf[name].max_abs_diff(&gu[name]) < 1e-14, "{name} reverse={reverse}");
            }
        }
    }

    #[test]
    fn recurrence_rejects_bad_shapes() {
        let mut g = Graph::new();
        let p = g.constant(Tensor::zeros(&[4, 3]));
        let w = g.constant(Tensor::zeros(&[2, 3]));
        assert!(matches!(g.recurrence(p, w, false), Err(GraphError::ShapeMismatch { .. })));
    }
}
