//! Tape-based reverse-mode automatic differentiation over dense `f64` matrices.
//!
//! Every value is a 2-D matrix; scalars are `1 × 1` and batches of points are
//! `rows × features`. Operations are recorded on a [`Tape`] in topological
//! order. Two backward sweeps are provided:
//!
//! - [`Tape::grad`] returns plain matrices and is what the optimizer uses.
//! - [`Tape::grad_graph`] records the backward sweep itself on the tape, so the
//!   returned gradients are again differentiable. Input derivatives of a network
//!   (including second order) are built this way, and the training loss that
//!   contains them can then be differentiated with respect to the parameters.
//!
//! ```
//! use weakform::diffcore::Tape;
//!
//! let tape = Tape::new();
//! let x = tape.scalar_var(3.0);
//! let y = x.square();
//! let g = tape.grad(&y, &[&x]).unwrap();
//! assert_eq!(g[0][[0, 0]], 6.0);
//! ```

use std::cell::RefCell;
use std::rc::Rc;

use ndarray::{Array2, Axis, Zip};

#[doc(hidden)]
pub mod fastmath;

pub type Matrix = Array2<f64>;
pub type NodeId = usize;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum DiffError {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: (usize, usize),
        rhs: (usize, usize),
    },
    #[error("{op} expects {expected} operand(s), got {got}")]
    Arity {
        op: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("gradient requested of a non-scalar output with shape {0:?}")]
    NonScalar((usize, usize)),
    #[error("input derivative of order {0} is not supported (orders 1 and 2 only)")]
    UnsupportedOrder(usize),
    #[error("input derivative along axis {axis} of a {width}-wide input")]
    Axis { axis: usize, width: usize },
}

/// Primitive operations that can be recorded on a tape.
///
/// Binary elementwise ops broadcast a `1 × c`, `r × 1` or `1 × 1` operand
/// against the other operand.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum PrimOp {
    Add,
    Sub,
    Mul,
    Div,
    MatMul,
    /// Elementwise power with a constant exponent.
    Pow(f64),
    Exp,
    Ln,
    Tanh,
    Softplus,
    Sigmoid,
    /// Sum of all entries, `1 × 1` result.
    Sum,
    /// Mean of all entries, `1 × 1` result.
    Mean,
    Square,
    Neg,
    /// Multiply by a constant.
    Scale(f64),
    Transpose,
    /// Row-major reshape.
    Reshape(usize, usize),
    /// Broadcast a `1 × c`, `r × 1` or `1 × 1` value to the given shape.
    Broadcast(usize, usize),
    /// Sum over broadcast axes down to the given shape (inverse of `Broadcast`).
    SumTo(usize, usize),
}

impl PrimOp {
    fn arity(self) -> usize {
        match self {
            PrimOp::Add | PrimOp::Sub | PrimOp::Mul | PrimOp::Div | PrimOp::MatMul => 2,
            _ => 1,
        }
    }

    fn name(self) -> &'static str {
        match self {
            PrimOp::Add => "add",
            PrimOp::Sub => "sub",
            PrimOp::Mul => "mul",
            PrimOp::Div => "div",
            PrimOp::MatMul => "matmul",
            PrimOp::Pow(_) => "pow",
            PrimOp::Exp => "exp",
            PrimOp::Ln => "ln",
            PrimOp::Tanh => "tanh",
            PrimOp::Softplus => "softplus",
            PrimOp::Sigmoid => "sigmoid",
            PrimOp::Sum => "sum",
            PrimOp::Mean => "mean",
            PrimOp::Square => "square",
            PrimOp::Neg => "neg",
            PrimOp::Scale(_) => "scale",
            PrimOp::Transpose => "transpose",
            PrimOp::Reshape(..) => "reshape",
            PrimOp::Broadcast(..) => "broadcast",
            PrimOp::SumTo(..) => "sum_to",
        }
    }
}

#[derive(Clone)]
struct Operand {
    node: Option<NodeId>,
    value: Rc<Matrix>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum Kind {
    Leaf,
    Prim(PrimOp),
}

struct Node {
    kind: Kind,
    inputs: Vec<Operand>,
    value: Rc<Matrix>,
    aux: Option<Matrix>,
}

/// Append-only record of operations. Single-threaded; build a fresh tape per
/// evaluation.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// A matrix value, optionally attached to a tape node. Values without a node
/// are constants and carry zero derivative.
#[derive(Clone)]
pub struct Var<'t> {
    tape: &'t Tape,
    node: Option<NodeId>,
    value: Rc<Matrix>,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Var")
            .field("node", &self.node)
            .field("shape", &self.shape())
            .finish()
    }
}

fn shape(m: &Matrix) -> (usize, usize) {
    let s = m.shape();
    (s[0], s[1])
}

fn broadcast_dim(a: usize, b: usize) -> Option<usize> {
    if a == b {
        Some(a)
    } else if a == 1 {
        Some(b)
    } else if b == 1 {
        Some(a)
    } else {
        None
    }
}

fn broadcast_shape(op: &'static str, a: &Matrix, b: &Matrix) -> Result<(usize, usize), DiffError> {
    let (sa, sb) = (shape(a), shape(b));
    match (broadcast_dim(sa.0, sb.0), broadcast_dim(sa.1, sb.1)) {
        (Some(r), Some(c)) => Ok((r, c)),
        _ => Err(DiffError::Shape { op, lhs: sa, rhs: sb }),
    }
}

fn zip_broadcast(
    op: &'static str,
    a: &Matrix,
    b: &Matrix,
    f: impl Fn(f64, f64) -> f64,
) -> Result<Matrix, DiffError> {
    let out_shape = broadcast_shape(op, a, b)?;
    let av = a.broadcast(out_shape).expect("checked broadcast");
    let bv = b.broadcast(out_shape).expect("checked broadcast");
    Ok(Zip::from(&av).and(&bv).map_collect(|&x, &y| f(x, y)))
}

fn broadcast_to(op: &'static str, m: &Matrix, target: (usize, usize)) -> Result<Matrix, DiffError> {
    let s = shape(m);
    let ok = (s.0 == target.0 || s.0 == 1) && (s.1 == target.1 || s.1 == 1);
    if !ok {
        return Err(DiffError::Shape { op, lhs: s, rhs: target });
    }
    Ok(m.broadcast(target).expect("checked broadcast").to_owned())
}

fn sum_to(op: &'static str, m: &Matrix, target: (usize, usize)) -> Result<Matrix, DiffError> {
    let s = shape(m);
    let ok = (target.0 == s.0 || target.0 == 1) && (target.1 == s.1 || target.1 == 1);
    if !ok {
        return Err(DiffError::Shape { op, lhs: s, rhs: target });
    }
    let mut out = m.clone();
    if target.0 != s.0 {
        out = out.sum_axis(Axis(0)).insert_axis(Axis(0));
    }
    if target.1 != s.1 {
        out = out.sum_axis(Axis(1)).insert_axis(Axis(1));
    }
    Ok(out)
}

fn scalar_matrix(v: f64) -> Matrix {
    Array2::from_elem((1, 1), v)
}

/// Forward evaluation of one primitive, plus an auxiliary cache for the
/// backward rule (the sigmoid of a softplus input).
fn forward(op: PrimOp, inputs: &[&Matrix]) -> Result<(Matrix, Option<Matrix>), DiffError> {
    if op == PrimOp::Softplus {
        if inputs.len() != 1 {
            return Err(DiffError::Arity {
                op: "softplus",
                expected: 1,
                got: inputs.len(),
            });
        }
        let a = inputs[0].as_standard_layout();
        let mut sp = Matrix::zeros(a.dim());
        let mut sig = Matrix::zeros(a.dim());
        fastmath::softplus_into(
            a.as_slice().expect("standard layout"),
            sp.as_slice_mut().expect("fresh array"),
            sig.as_slice_mut().expect("fresh array"),
        );
        return Ok((sp, Some(sig)));
    }
    Ok((forward_plain(op, inputs)?, None))
}

fn forward_plain(op: PrimOp, inputs: &[&Matrix]) -> Result<Matrix, DiffError> {
    if inputs.len() != op.arity() {
        return Err(DiffError::Arity {
            op: op.name(),
            expected: op.arity(),
            got: inputs.len(),
        });
    }
    let a = inputs[0];
    Ok(match op {
        PrimOp::Add => zip_broadcast("add", a, inputs[1], |x, y| x + y)?,
        PrimOp::Sub => zip_broadcast("sub", a, inputs[1], |x, y| x - y)?,
        PrimOp::Mul => zip_broadcast("mul", a, inputs[1], |x, y| x * y)?,
        PrimOp::Div => zip_broadcast("div", a, inputs[1], |x, y| x / y)?,
        PrimOp::MatMul => {
            let b = inputs[1];
            if a.ncols() != b.nrows() {
                return Err(DiffError::Shape {
                    op: "matmul",
                    lhs: shape(a),
                    rhs: shape(b),
                });
            }
            a.dot(b)
        }
        PrimOp::Pow(p) => a.mapv(|x| x.powf(p)),
        PrimOp::Exp => a.mapv(f64::exp),
        PrimOp::Ln => a.mapv(f64::ln),
        PrimOp::Tanh => {
            let a = a.as_standard_layout();
            let mut out = Matrix::zeros(a.dim());
            fastmath::tanh_into(a.as_slice().expect("standard layout"), out.as_slice_mut().expect("fresh array"));
            out
        }
        PrimOp::Softplus => a.mapv(|z| fastmath::softplus_and_sigmoid(z).0),
        PrimOp::Sigmoid => a.mapv(fastmath::sigmoid),
        PrimOp::Sum => scalar_matrix(a.sum()),
        PrimOp::Mean => scalar_matrix(a.sum() / a.len() as f64),
        PrimOp::Square => a.mapv(|x| x * x),
        PrimOp::Neg => a.mapv(|x| -x),
        PrimOp::Scale(c) => a.mapv(|x| c * x),
        PrimOp::Transpose => a.t().to_owned(),
        PrimOp::Reshape(r, c) => {
            if r * c != a.len() {
                return Err(DiffError::Shape {
                    op: "reshape",
                    lhs: shape(a),
                    rhs: (r, c),
                });
            }
            a.as_standard_layout()
                .into_owned()
                .into_shape_with_order((r, c))
                .expect("length checked")
        }
        PrimOp::Broadcast(r, c) => broadcast_to("broadcast", a, (r, c))?,
        PrimOp::SumTo(r, c) => sum_to("sum_to", a, (r, c))?,
    })
}

/// Numeric vector-Jacobian product of one node: returns the contribution to
/// each input (None for inputs that do not need one).
fn backward_numeric(
    op: PrimOp,
    inputs: &[Operand],
    out: &Matrix,
    aux: Option<&Matrix>,
    g: &Matrix,
    needs: &[bool],
) -> Result<Vec<Option<Matrix>>, DiffError> {
    let a = &*inputs[0].value;
    let sa = shape(a);
    let mut res: Vec<Option<Matrix>> = vec![None; inputs.len()];
    match op {
        PrimOp::Add | PrimOp::Sub => {
            if needs[0] {
                res[0] = Some(sum_to("add", g, sa)?);
            }
            if needs[1] {
                let gb = sum_to("add", g, shape(&inputs[1].value))?;
                res[1] = Some(if op == PrimOp::Sub { -gb } else { gb });
            }
        }
        PrimOp::Mul => {
            let b = &*inputs[1].value;
            if needs[0] {
                res[0] = Some(sum_to("mul", &zip_broadcast("mul", g, b, |x, y| x * y)?, sa)?);
            }
            if needs[1] {
                res[1] = Some(sum_to(
                    "mul",
                    &zip_broadcast("mul", g, a, |x, y| x * y)?,
                    shape(b),
                )?);
            }
        }
        PrimOp::Div => {
            let b = &*inputs[1].value;
            if needs[0] {
                res[0] = Some(sum_to("div", &zip_broadcast("div", g, b, |x, y| x / y)?, sa)?);
            }
            if needs[1] {
                // d(a/b)/db = -out / b
                let t = zip_broadcast("div", out, b, |o, y| -o / y)?;
                res[1] = Some(sum_to("div", &(g * &t), shape(b))?);
            }
        }
        PrimOp::MatMul => {
            let b = &*inputs[1].value;
            if needs[0] {
                res[0] = Some(g.dot(&b.t()));
            }
            if needs[1] {
                res[1] = Some(a.t().dot(g));
            }
        }
        PrimOp::Pow(p) => {
            res[0] = Some(Zip::from(g).and(a).map_collect(|&gi, &x| gi * p * x.powf(p - 1.0)));
        }
        PrimOp::Exp => res[0] = Some(g * out),
        PrimOp::Ln => res[0] = Some(g / a),
        PrimOp::Tanh => res[0] = Some(Zip::from(g).and(out).map_collect(|&gi, &o| gi * (1.0 - o * o))),
        PrimOp::Softplus => {
            res[0] = Some(match aux {
                Some(sig) => g * sig,
                None => Zip::from(g).and(a).map_collect(|&gi, &x| gi * fastmath::sigmoid(x)),
            });
        }
        PrimOp::Sigmoid => {
            res[0] = Some(Zip::from(g).and(out).map_collect(|&gi, &o| gi * o * (1.0 - o)));
        }
        PrimOp::Sum => res[0] = Some(Array2::from_elem(sa, g[[0, 0]])),
        PrimOp::Mean => res[0] = Some(Array2::from_elem(sa, g[[0, 0]] / a.len() as f64)),
        PrimOp::Square => res[0] = Some(Zip::from(g).and(a).map_collect(|&gi, &x| 2.0 * x * gi)),
        PrimOp::Neg => res[0] = Some(-g),
        PrimOp::Scale(c) => res[0] = Some(g * c),
        PrimOp::Transpose => res[0] = Some(g.t().to_owned()),
        PrimOp::Reshape(..) => {
            res[0] = Some(
                g.as_standard_layout()
                    .into_owned()
                    .into_shape_with_order(sa)
                    .expect("reshape preserves length"),
            )
        }
        PrimOp::Broadcast(..) => res[0] = Some(sum_to("broadcast", g, sa)?),
        PrimOp::SumTo(..) => res[0] = Some(broadcast_to("sum_to", g, sa)?),
    }
    Ok(res)
}

impl Tape {
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

    fn push(&self, kind: Kind, inputs: Vec<Operand>, value: Rc<Matrix>, aux: Option<Matrix>) -> NodeId {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            kind,
            inputs,
            value,
            aux,
        });
        nodes.len() - 1
    }

    /// Registers a differentiable leaf.
    pub fn var(&self, value: Matrix) -> Var<'_> {
        let value = Rc::new(value);
        let node = self.push(Kind::Leaf, Vec::new(), value.clone(), None);
        Var {
            tape: self,
            node: Some(node),
            value,
        }
    }

    pub fn scalar_var(&self, v: f64) -> Var<'_> {
        self.var(scalar_matrix(v))
    }

    /// A value with no tape node (zero derivative).
    pub fn constant(&self, value: Matrix) -> Var<'_> {
        Var {
            tape: self,
            node: None,
            value: Rc::new(value),
        }
    }

    pub fn scalar(&self, v: f64) -> Var<'_> {
        self.constant(scalar_matrix(v))
    }

    /// Records `op` applied to `inputs`. When every input is a constant the
    /// result is a constant as well and nothing is recorded.
    pub fn record<'t>(&'t self, op: PrimOp, inputs: &[&Var<'t>]) -> Result<Var<'t>, DiffError> {
        let values: Vec<&Matrix> = inputs.iter().map(|v| &*v.value).collect();
        let (value, aux) = forward(op, &values)?;
        let value = Rc::new(value);
        if inputs.iter().all(|v| v.node.is_none()) {
            return Ok(Var {
                tape: self,
                node: None,
                value,
            });
        }
        let operands = inputs
            .iter()
            .map(|v| Operand {
                node: v.node,
                value: v.value.clone(),
            })
            .collect();
        let node = self.push(Kind::Prim(op), operands, value.clone(), aux);
        Ok(Var {
            tape: self,
            node: Some(node),
            value,
        })
    }

    /// Re-evaluates every node from its inputs. Leaves return their stored value.
    pub fn replay(&self) -> Result<Vec<Matrix>, DiffError> {
        let nodes = self.nodes.borrow();
        let mut out: Vec<Matrix> = Vec::with_capacity(nodes.len());
        for node in nodes.iter() {
            let v = match node.kind {
                Kind::Leaf => (*node.value).clone(),
                Kind::Prim(op) => {
                    let ins: Vec<&Matrix> = node
                        .inputs
                        .iter()
                        .map(|o| match o.node {
                            Some(id) => &out[id],
                            None => &*o.value,
                        })
                        .collect();
                    forward(op, &ins)?.0
                }
            };
            out.push(v);
        }
        Ok(out)
    }

    /// True when every node's inputs were recorded before it.
    pub fn is_topologically_ordered(&self) -> bool {
        self.nodes
            .borrow()
            .iter()
            .enumerate()
            .all(|(id, n)| n.inputs.iter().all(|o| o.node.is_none_or(|p| p < id)))
    }

    fn check_scalar(output: &Var<'_>) -> Result<(), DiffError> {
        let s = output.shape();
        if s != (1, 1) {
            return Err(DiffError::NonScalar(s));
        }
        Ok(())
    }

    /// Marks the nodes in `0..=out` that lie on a path from some `wrt` node.
    fn needs_mask(&self, out: NodeId, wrt: &[&Var<'_>]) -> Vec<bool> {
        let nodes = self.nodes.borrow();
        let mut needs = vec![false; out + 1];
        for v in wrt {
            if let Some(id) = v.node {
                if id <= out {
                    needs[id] = true;
                }
            }
        }
        for id in 0..=out {
            if !needs[id] {
                needs[id] = nodes[id].inputs.iter().any(|o| o.node.is_some_and(|p| needs[p]));
            }
        }
        needs
    }

    /// Reverse sweep returning plain gradients `∂output/∂wrt_i`. Entries that
    /// are constants or not ancestors of `output` get zero matrices.
    pub fn grad(&self, output: &Var<'_>, wrt: &[&Var<'_>]) -> Result<Vec<Matrix>, DiffError> {
        Self::check_scalar(output)?;
        let zeros = || wrt.iter().map(|v| Matrix::zeros(v.value.dim())).collect::<Vec<_>>();
        let Some(out) = output.node else {
            return Ok(zeros());
        };
        let needs = self.needs_mask(out, wrt);
        let mut keep = vec![false; out + 1];
        for v in wrt {
            if let Some(id) = v.node.filter(|&id| id <= out) {
                keep[id] = true;
            }
        }
        let nodes = self.nodes.borrow();
        let mut grads: Vec<Option<Matrix>> = vec![None; out + 1];
        grads[out] = Some(scalar_matrix(1.0));
        for id in (0..=out).rev() {
            if !needs[id] {
                continue;
            }
            let node = &nodes[id];
            let Kind::Prim(op) = node.kind else { continue };
            let g = if keep[id] { grads[id].clone() } else { grads[id].take() };
            let Some(g) = g else { continue };
            let input_needs: Vec<bool> = node
                .inputs
                .iter()
                .map(|o| o.node.is_some_and(|p| needs[p]))
                .collect();
            if !input_needs.iter().any(|&b| b) {
                continue;
            }
            let contribs = backward_numeric(op, &node.inputs, &node.value, node.aux.as_ref(), &g, &input_needs)?;
            for (operand, c) in node.inputs.iter().zip(contribs) {
                if let (Some(p), Some(c)) = (operand.node, c) {
                    match &mut grads[p] {
                        Some(acc) => *acc += &c,
                        slot @ None => *slot = Some(c),
                    }
                }
            }
        }
        Ok(wrt
            .iter()
            .map(|v| {
                v.node
                    .filter(|&id| id <= out)
                    .and_then(|id| grads[id].clone())
                    .unwrap_or_else(|| Matrix::zeros(v.value.dim()))
            })
            .collect())
    }

    /// Reverse sweep recorded on the tape. The returned gradients are
    /// differentiable with respect to anything upstream of them.
    pub fn grad_graph<'t>(&'t self, output: &Var<'t>, wrt: &[&Var<'t>]) -> Result<Vec<Var<'t>>, DiffError> {
        Self::check_scalar(output)?;
        let zero = |v: &Var<'t>| self.constant(Matrix::zeros(v.value.dim()));
        let Some(out) = output.node else {
            return Ok(wrt.iter().map(|v| zero(v)).collect());
        };
        let needs = self.needs_mask(out, wrt);
        let mut grads: Vec<Option<Var<'t>>> = vec![None; out + 1];
        grads[out] = Some(self.scalar(1.0));
        for id in (0..=out).rev() {
            if !needs[id] {
                continue;
            }
            let (kind, inputs, value) = {
                let nodes = self.nodes.borrow();
                let n = &nodes[id];
                (n.kind, n.inputs.clone(), n.value.clone())
            };
            let Kind::Prim(op) = kind else { continue };
            let Some(g) = grads[id].clone() else { continue };
            let input_needs: Vec<bool> = inputs.iter().map(|o| o.node.is_some_and(|p| needs[p])).collect();
            if !input_needs.iter().any(|&b| b) {
                continue;
            }
            let ins: Vec<Var<'t>> = inputs
                .iter()
                .map(|o| Var {
                    tape: self,
                    node: o.node,
                    value: o.value.clone(),
                })
                .collect();
            let out_var = Var {
                tape: self,
                node: Some(id),
                value,
            };
            let contribs = self.backward_graph(op, &ins, &out_var, &g, &input_needs)?;
            for (operand, c) in inputs.iter().zip(contribs) {
                if let (Some(p), Some(c)) = (operand.node, c) {
                    grads[p] = Some(match grads[p].take() {
                        Some(acc) => acc.add(&c)?,
                        None => c,
                    });
                }
            }
        }
        Ok(wrt
            .iter()
            .map(|v| {
                v.node
                    .filter(|&id| id <= out)
                    .and_then(|id| grads[id].clone())
                    .unwrap_or_else(|| zero(v))
            })
            .collect())
    }

    fn backward_graph<'t>(
        &'t self,
        op: PrimOp,
        ins: &[Var<'t>],
        out: &Var<'t>,
        g: &Var<'t>,
        needs: &[bool],
    ) -> Result<Vec<Option<Var<'t>>>, DiffError> {
        let a = &ins[0];
        let (ar, ac) = a.shape();
        let mut res: Vec<Option<Var<'t>>> = vec![None; ins.len()];
        match op {
            PrimOp::Add | PrimOp::Sub => {
                if needs[0] {
                    res[0] = Some(g.sum_to(ar, ac)?);
                }
                if needs[1] {
                    let (br, bc) = ins[1].shape();
                    let gb = g.sum_to(br, bc)?;
                    res[1] = Some(if op == PrimOp::Sub { gb.neg() } else { gb });
                }
            }
            PrimOp::Mul => {
                let b = &ins[1];
                if needs[0] {
                    res[0] = Some(g.mul(b)?.sum_to(ar, ac)?);
                }
                if needs[1] {
                    let (br, bc) = b.shape();
                    res[1] = Some(g.mul(a)?.sum_to(br, bc)?);
                }
            }
            PrimOp::Div => {
                let b = &ins[1];
                if needs[0] {
                    res[0] = Some(g.div(b)?.sum_to(ar, ac)?);
                }
                if needs[1] {
                    let (br, bc) = b.shape();
                    res[1] = Some(g.mul(out)?.div(b)?.neg().sum_to(br, bc)?);
                }
            }
            PrimOp::MatMul => {
                let b = &ins[1];
                if needs[0] {
                    res[0] = Some(g.matmul(&b.transpose())?);
                }
                if needs[1] {
                    res[1] = Some(a.transpose().matmul(g)?);
                }
            }
            PrimOp::Pow(p) => res[0] = Some(g.mul(&a.pow(p - 1.0).scale(p))?),
            PrimOp::Exp => res[0] = Some(g.mul(out)?),
            PrimOp::Ln => res[0] = Some(g.div(a)?),
            PrimOp::Tanh => {
                let one_minus = out.square().neg().add_scalar(1.0)?;
                res[0] = Some(g.mul(&one_minus)?);
            }
            PrimOp::Softplus => res[0] = Some(g.mul(&a.sigmoid())?),
            PrimOp::Sigmoid => {
                let d = out.mul(&out.neg().add_scalar(1.0)?)?;
                res[0] = Some(g.mul(&d)?);
            }
            PrimOp::Sum => res[0] = Some(g.broadcast(ar, ac)?),
            PrimOp::Mean => res[0] = Some(g.scale(1.0 / (ar * ac) as f64).broadcast(ar, ac)?),
            PrimOp::Square => res[0] = Some(g.mul(&a.scale(2.0))?),
            PrimOp::Neg => res[0] = Some(g.neg()),
            PrimOp::Scale(c) => res[0] = Some(g.scale(c)),
            PrimOp::Transpose => res[0] = Some(g.transpose()),
            PrimOp::Reshape(..) => res[0] = Some(g.reshape(ar, ac)?),
            PrimOp::Broadcast(..) => res[0] = Some(g.sum_to(ar, ac)?),
            PrimOp::SumTo(..) => res[0] = Some(g.broadcast(ar, ac)?),
        }
        Ok(res)
    }
}

impl<'t> Var<'t> {
    pub fn value(&self) -> &Matrix {
        &self.value
    }

    pub fn shape(&self) -> (usize, usize) {
        shape(&self.value)
    }

    /// The single entry of a `1 × 1` value.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.shape(), (1, 1));
        self.value[[0, 0]]
    }

    pub fn node(&self) -> Option<NodeId> {
        self.node
    }

    pub fn is_constant(&self) -> bool {
        self.node.is_none()
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    fn unary(&self, op: PrimOp) -> Var<'t> {
        self.tape.record(op, &[self]).expect("unary ops cannot fail")
    }

    fn binary(&self, op: PrimOp, rhs: &Var<'t>) -> Result<Var<'t>, DiffError> {
        self.tape.record(op, &[self, rhs])
    }

    pub fn add(&self, rhs: &Var<'t>) -> Result<Var<'t>, DiffError> {
        self.binary(PrimOp::Add, rhs)
    }

    pub fn sub(&self, rhs: &Var<'t>) -> Result<Var<'t>, DiffError> {
        self.binary(PrimOp::Sub, rhs)
    }

    pub fn mul(&self, rhs: &Var<'t>) -> Result<Var<'t>, DiffError> {
        self.binary(PrimOp::Mul, rhs)
    }

    pub fn div(&self, rhs: &Var<'t>) -> Result<Var<'t>, DiffError> {
        self.binary(PrimOp::Div, rhs)
    }

    pub fn matmul(&self, rhs: &Var<'t>) -> Result<Var<'t>, DiffError> {
        self.binary(PrimOp::MatMul, rhs)
    }

    pub fn add_scalar(&self, c: f64) -> Result<Var<'t>, DiffError> {
        self.add(&self.tape.scalar(c))
    }

    pub fn pow(&self, p: f64) -> Var<'t> {
        self.unary(PrimOp::Pow(p))
    }

    pub fn exp(&self) -> Var<'t> {
        self.unary(PrimOp::Exp)
    }

    pub fn ln(&self) -> Var<'t> {
        self.unary(PrimOp::Ln)
    }

    pub fn tanh(&self) -> Var<'t> {
        self.unary(PrimOp::Tanh)
    }

    pub fn softplus(&self) -> Var<'t> {
        self.unary(PrimOp::Softplus)
    }

    pub fn sigmoid(&self) -> Var<'t> {
        self.unary(PrimOp::Sigmoid)
    }

    pub fn sum(&self) -> Var<'t> {
        self.unary(PrimOp::Sum)
    }

    pub fn mean(&self) -> Var<'t> {
        self.unary(PrimOp::Mean)
    }

    pub fn square(&self) -> Var<'t> {
        self.unary(PrimOp::Square)
    }

    pub fn neg(&self) -> Var<'t> {
        self.unary(PrimOp::Neg)
    }

    pub fn scale(&self, c: f64) -> Var<'t> {
        self.unary(PrimOp::Scale(c))
    }

    pub fn transpose(&self) -> Var<'t> {
        self.unary(PrimOp::Transpose)
    }

    pub fn reshape(&self, rows: usize, cols: usize) -> Result<Var<'t>, DiffError> {
        self.tape.record(PrimOp::Reshape(rows, cols), &[self])
    }

    pub fn broadcast(&self, rows: usize, cols: usize) -> Result<Var<'t>, DiffError> {
        if self.shape() == (rows, cols) {
            return Ok(self.clone());
        }
        self.tape.record(PrimOp::Broadcast(rows, cols), &[self])
    }

    pub fn sum_to(&self, rows: usize, cols: usize) -> Result<Var<'t>, DiffError> {
        if self.shape() == (rows, cols) {
            return Ok(self.clone());
        }
        self.tape.record(PrimOp::SumTo(rows, cols), &[self])
    }

    /// Column `j` as an `rows × 1` value.
    pub fn column(&self, j: usize) -> Result<Var<'t>, DiffError> {
        let width = self.shape().1;
        if j >= width {
            return Err(DiffError::Axis { axis: j, width });
        }
        let mut e = Matrix::zeros((width, 1));
        e[[j, 0]] = 1.0;
        self.matmul(&self.tape.constant(e))
    }
}

/// Row-wise gradient of a batched function: `output` is `n × 1` with row `i`
/// depending only on row `i` of `input` (`n × d`). Returns the recorded
/// `n × d` matrix of per-row gradients.
pub fn input_gradient<'t>(output: &Var<'t>, input: &Var<'t>) -> Result<Var<'t>, DiffError> {
    let tape = output.tape();
    let total = output.sum();
    Ok(tape.grad_graph(&total, &[input])?.remove(0))
}

/// `∂f/∂x_dim` (order 1) or `∂²f/∂x_dim²` (order 2) at `point`, still attached
/// to the tape so that it can be differentiated further (e.g. with respect to
/// network parameters captured by `f`).
///
/// `point` may be a batch (`n × d`) provided `f` acts row-wise and returns an
/// `n × 1` column; the result is then `n × 1`.
pub fn input_derivative<'t, F>(
    tape: &'t Tape,
    f: F,
    point: &Var<'t>,
    dim: usize,
    order: usize,
) -> Result<Var<'t>, DiffError>
where
    F: Fn(&Var<'t>) -> Result<Var<'t>, DiffError>,
{
    if !(1..=2).contains(&order) {
        return Err(DiffError::UnsupportedOrder(order));
    }
    let width = point.shape().1;
    if dim >= width {
        return Err(DiffError::Axis { axis: dim, width });
    }
    // Differentiating needs the point on the tape.
    let x = if point.is_constant() {
        tape.var(point.value().clone())
    } else {
        point.clone()
    };
    let y = f(&x)?;
    let first = input_gradient(&y, &x)?.column(dim)?;
    if order == 1 {
        return Ok(first);
    }
    input_gradient(&first, &x)?.column(dim)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn fd_scalar(f: impl Fn(f64) -> f64, x: f64, h: f64) -> f64 {
        (f(x + h) - f(x - h)) / (2.0 * h)
    }

    #[test]
    fn record_examples() {
        let tape = Tape::new();
        let a = tape.scalar_var(2.0);
        let b = tape.scalar_var(3.0);
        assert_eq!(tape.record(PrimOp::Mul, &[&a, &b]).unwrap().item(), 6.0);
        let z = tape.scalar_var(0.0);
        let sp = tape.record(PrimOp::Softplus, &[&z]).unwrap().item();
        assert!((sp - std::f64::consts::LN_2).abs() < 1e-15);
        assert_eq!(tape.record(PrimOp::Tanh, &[&z]).unwrap().item(), 0.0);
    }

    #[test]
    fn shape_mismatch_is_reported() {
        let tape = Tape::new();
        let a = tape.var(Matrix::zeros((2, 3)));
        let b = tape.var(Matrix::zeros((2, 3)));
        assert!(matches!(a.matmul(&b), Err(DiffError::Shape { op: "matmul", .. })));
        let c = tape.var(Matrix::zeros((3, 2)));
        assert!(matches!(a.add(&c), Err(DiffError::Shape { op: "add", .. })));
        assert!(matches!(
            tape.record(PrimOp::Add, &[&a]),
            Err(DiffError::Arity { .. })
        ));
    }

    #[test]
    fn grad_examples() {
        let tape = Tape::new();
        let x = tape.scalar_var(3.0);
        let y = x.square();
        assert_eq!(tape.grad(&y, &[&x]).unwrap()[0][[0, 0]], 6.0);

        let z = tape.scalar_var(0.0);
        let s = z.softplus();
        assert_eq!(tape.grad(&s, &[&z]).unwrap()[0][[0, 0]], 0.5);
    }

    #[test]
    fn non_scalar_output_rejected() {
        let tape = Tape::new();
        let x = tape.var(Matrix::ones((2, 1)));
        let y = x.square();
        assert_eq!(tape.grad(&y, &[&x]).unwrap_err(), DiffError::NonScalar((2, 1)));
        assert!(tape.grad_graph(&y, &[&x]).is_err());
    }

    #[test]
    fn unrelated_and_constant_inputs_get_zero() {
        let tape = Tape::new();
        let x = tape.scalar_var(2.0);
        let unrelated = tape.var(Matrix::ones((2, 2)));
        let c = tape.constant(array![[5.0]]);
        let y = x.mul(&c).unwrap();
        let g = tape.grad(&y, &[&x, &unrelated, &c]).unwrap();
        assert_eq!(g[0][[0, 0]], 5.0);
        assert_eq!(g[1], Matrix::zeros((2, 2)));
        assert_eq!(g[2], Matrix::zeros((1, 1)));

        // constant output
        let k = tape.constant(array![[1.0]]);
        assert_eq!(tape.grad(&k, &[&x]).unwrap()[0], Matrix::zeros((1, 1)));
    }

    #[test]
    fn input_derivative_cubic() {
        let tape = Tape::new();
        let p = tape.scalar_var(2.0);
        fn cube<'t>(x: &Var<'t>) -> Result<Var<'t>, DiffError> {
            Ok(x.pow(3.0))
        }
        let d1 = input_derivative(&tape, cube, &p, 0, 1).unwrap();
        let d2 = input_derivative(&tape, cube, &p, 0, 2).unwrap();
        assert!((d1.item() - 12.0).abs() < 1e-12);
        assert!((d2.item() - 12.0).abs() < 1e-12);
        assert_eq!(
            input_derivative(&tape, cube, &p, 0, 3).unwrap_err(),
            DiffError::UnsupportedOrder(3)
        );
        assert!(matches!(
            input_derivative(&tape, cube, &p, 1, 1),
            Err(DiffError::Axis { .. })
        ));
    }

    #[test]
    fn nested_second_derivative_wrt_parameter() {
        // f(x) = tanh(w x); d²f/dx² = -2 w² t (1 - t²), t = tanh(w x)
        let tape = Tape::new();
        let w = tape.scalar_var(0.7);
        let x = tape.scalar_var(0.3);
        let d2 = input_derivative(&tape, |x| Ok(x.mul(&w)?.tanh()), &x, 0, 2).unwrap();
        let analytic = |w: f64| {
            let t = (w * 0.3f64).tanh();
            -2.0 * w * w * t * (1.0 - t * t)
        };
        assert!((d2.item() - analytic(0.7)).abs() < 1e-12);
        let g = tape.grad(&d2, &[&w]).unwrap()[0][[0, 0]];
        let fd = fd_scalar(analytic, 0.7, 1e-6);
        assert!((g - fd).abs() < 1e-6 * fd.abs().max(1.0), "{g} vs {fd}");
    }

    #[test]
    fn replay_is_bit_exact_and_ordered() {
        let tape = Tape::new();
        let w = tape.var(array![[0.3, -1.2], [0.8, 0.1]]);
        let x = tape.constant(array![[1.0, 2.0], [-0.5, 0.25], [3.0, 1.0]]);
        let b = tape.var(array![[0.1, -0.2]]);
        let h = x.matmul(&w).unwrap().add(&b).unwrap().softplus();
        let loss = h.tanh().square().mean();
        let _ = tape.grad_graph(&loss, &[&w]).unwrap();
        assert!(tape.is_topologically_ordered());
        let nodes = tape.nodes.borrow();
        let replayed = tape.replay().unwrap();
        for (n, r) in nodes.iter().zip(&replayed) {
            assert_eq!(&*n.value, r);
        }
    }

    #[test]
    fn graph_and_numeric_backward_agree() {
        let tape = Tape::new();
        let w = tape.var(array![[0.3, -1.2, 0.5], [0.8, 0.1, -0.4]]);
        let b = tape.var(array![[0.1, -0.2, 0.05]]);
        let x = tape.constant(array![[1.0, 2.0], [-0.5, 0.25], [3.0, 1.0], [0.2, -0.7]]);
        let z = x.matmul(&w).unwrap().add(&b).unwrap();
        let y = z
            .softplus()
            .mul(&z.tanh())
            .unwrap()
            .div(&z.sigmoid().add_scalar(1.0).unwrap())
            .unwrap()
            .pow(2.0)
            .sub(&z.exp().scale(0.1))
            .unwrap()
            .sum_to(4, 1)
            .unwrap()
            .reshape(2, 2)
            .unwrap()
            .transpose()
            .broadcast(2, 2)
            .unwrap()
            .square()
            .add(&z.square().add_scalar(1.0).unwrap().ln().mean())
            .unwrap()
            .neg()
            .sum();
        let numeric = tape.grad(&y, &[&w, &b]).unwrap();
        let graph = tape.grad_graph(&y, &[&w, &b]).unwrap();
        for (n, g) in numeric.iter().zip(&graph) {
            for (a, b) in n.iter().zip(g.value().iter()) {
                assert!((a - b).abs() <= 1e-12 * a.abs().max(1.0), "{a} vs {b}");
            }
        }
    }
}
