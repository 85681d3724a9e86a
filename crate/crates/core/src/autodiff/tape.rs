use std::cell::RefCell;

use super::{AutodiffError, Scalar, Tensor};

type NodeId = usize;

#[derive(Debug, Clone)]
enum Op<S> {
    Leaf,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Div(NodeId, NodeId),
    Neg(NodeId),
    Scale(NodeId, S),
    AddConst(NodeId),
    Square(NodeId),
    Exp(NodeId),
    Log(NodeId),
    Relu(NodeId),
    MatMul(NodeId, NodeId),
    Transpose(NodeId),
    Reshape(NodeId),
    Sum(NodeId),
    SumAxis(NodeId, usize),
    LogSumExp(NodeId),
    Softmax(NodeId),
    WeightedPool(NodeId, NodeId),
    ExpandRows(NodeId),
    ExpandCols(NodeId),
}

#[derive(Debug)]
struct Node<S> {
    value: Tensor<S>,
    op: Op<S>,
    requires_grad: bool,
}

/// Append-only record of a computation. Node ids increase in creation
/// order, so reverse id order is a valid reverse topological order.
#[derive(Debug, Default)]
pub struct Tape<S> {
    nodes: RefCell<Vec<Node<S>>>,
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t, S> {
    tape: &'t Tape<S>,
    id: NodeId,
}

impl<S> std::fmt::Debug for Var<'_, S> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var({})", self.id)
    }
}

/// Gradients produced by [`Tape::backward`], indexed by node.
#[derive(Debug)]
pub struct Gradients<S> {
    grads: Vec<Option<Tensor<S>>>,
    shapes: Vec<Vec<usize>>,
}

impl<S: Scalar> Gradients<S> {
    /// Gradient of the loss w.r.t. `var`; exactly zero for nodes the loss
    /// does not depend on.
    pub fn wrt(&self, var: Var<'_, S>) -> Tensor<S> {
        match self.grads.get(var.id).and_then(|g| g.as_ref()) {
            Some(g) => g.clone(),
            None => Tensor::zeros(&self.shapes[var.id]),
        }
    }
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.borrow().is_empty()
    }

    /// Trainable input.
    pub fn leaf(&self, value: Tensor<S>) -> Var<'_, S> {
        self.push(value, Op::Leaf, true)
    }

    /// Input that never receives a gradient.
    pub fn constant(&self, value: Tensor<S>) -> Var<'_, S> {
        self.push(value, Op::Leaf, false)
    }

    pub fn scalar(&self, value: S) -> Var<'_, S> {
        self.constant(Tensor::scalar(value))
    }

    fn push(&self, value: Tensor<S>, op: Op<S>, requires_grad: bool) -> Var<'_, S> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn requires(&self, ids: &[NodeId]) -> bool {
        let nodes = self.nodes.borrow();
        ids.iter().any(|&i| nodes[i].requires_grad)
    }

    fn record(
        &self,
        name: &'static str,
        value: Tensor<S>,
        op: Op<S>,
        parents: &[NodeId],
    ) -> Result<Var<'_, S>, AutodiffError> {
        if !value.is_finite() {
            return Err(AutodiffError::NonFinite { op: name });
        }
        let rg = self.requires(parents);
        Ok(self.push(value, op, rg))
    }

    /// Reverse pass from a scalar-shaped `loss`.
    pub fn backward(&self, loss: Var<'_, S>) -> Result<Gradients<S>, AutodiffError> {
        let nodes = self.nodes.borrow();
        let n = nodes.len();
        let shapes: Vec<Vec<usize>> = nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        if nodes[loss.id].value.len() != 1 {
            return Err(AutodiffError::NonScalarLoss {
                shape: shapes[loss.id].clone(),
            });
        }
        let mut grads: Vec<Option<Tensor<S>>> = vec![None; n];
        grads[loss.id] = Some(Tensor::full(&shapes[loss.id], S::one()));

        for id in (0..=loss.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            if node.requires_grad {
                for (parent, contrib) in backward_rule(&nodes, id, &g)? {
                    if !nodes[parent].requires_grad {
                        continue;
                    }
                    match &mut grads[parent] {
                        Some(acc) => {
                            for (a, c) in acc.data_mut().iter_mut().zip(contrib.data()) {
                                *a = *a + *c;
                            }
                        }
                        slot => *slot = Some(contrib),
                    }
                }
            }
            grads[id] = Some(g);
        }
        Ok(Gradients { grads, shapes })
    }
}

fn broadcast_parent<S: Scalar>(parent: &Tensor<S>, contrib: Tensor<S>) -> Tensor<S> {
    if parent.is_scalar() && !contrib.is_scalar() {
        Tensor::scalar(contrib.sum())
    } else {
        contrib
    }
}

/// Expands a scalar operand to `len` copies, or borrows the data as-is.
fn expand<S: Scalar>(t: &Tensor<S>, len: usize) -> std::borrow::Cow<'_, [S]> {
    if t.is_scalar() && len != 1 {
        std::borrow::Cow::Owned(vec![t.item(); len])
    } else {
        std::borrow::Cow::Borrowed(t.data())
    }
}

fn backward_rule<S: Scalar>(
    nodes: &[Node<S>],
    id: NodeId,
    g: &Tensor<S>,
) -> Result<Vec<(NodeId, Tensor<S>)>, AutodiffError> {
    let out = &nodes[id].value;
    let val = |i: NodeId| &nodes[i].value;
    let out_shape = out.shape().to_vec();
    let with_shape = |data: Vec<S>| Tensor::new(out_shape.clone(), data);
    let rules = match nodes[id].op {
        Op::Leaf => Vec::new(),
        Op::Add(a, b) => vec![
            (a, broadcast_parent(val(a), g.clone())),
            (b, broadcast_parent(val(b), g.clone())),
        ],
        Op::Sub(a, b) => vec![
            (a, broadcast_parent(val(a), g.clone())),
            (b, broadcast_parent(val(b), g.map(|x| -x))),
        ],
        Op::Mul(a, b) => {
            let av = expand(val(a), g.len());
            let bv = expand(val(b), g.len());
            let ga: Vec<S> = g.data().iter().zip(bv.iter()).map(|(&g, &b)| g * b).collect();
            let gb: Vec<S> = g.data().iter().zip(av.iter()).map(|(&g, &a)| g * a).collect();
            vec![
                (a, broadcast_parent(val(a), with_shape(ga)?)),
                (b, broadcast_parent(val(b), with_shape(gb)?)),
            ]
        }
        Op::Div(a, b) => {
            let bv = expand(val(b), g.len());
            let ga: Vec<S> = g.data().iter().zip(bv.iter()).map(|(&g, &b)| g / b).collect();
            let gb: Vec<S> = g
                .data()
                .iter()
                .zip(out.data())
                .zip(bv.iter())
                .map(|((&g, &o), &b)| -g * o / b)
                .collect();
            vec![
                (a, broadcast_parent(val(a), with_shape(ga)?)),
                (b, broadcast_parent(val(b), with_shape(gb)?)),
            ]
        }
        Op::Neg(a) => vec![(a, g.map(|x| -x))],
        Op::Scale(a, c) => vec![(a, g.map(|x| x * c))],
        Op::AddConst(a) => vec![(a, g.clone())],
        Op::Square(a) => {
            let two = S::from_f64(2.0);
            vec![(a, g.zip_map(val(a), |g, x| two * g * x))]
        }
        Op::Exp(a) => vec![(a, g.zip_map(out, |g, y| g * y))],
        Op::Log(a) => vec![(a, g.zip_map(val(a), |g, x| g / x))],
        Op::Relu(a) => vec![(
            a,
            g.zip_map(val(a), |g, x| if x > S::zero() { g } else { S::zero() }),
        )],
        Op::MatMul(a, b) => {
            let ga = g.matmul(&val(b).transpose()?)?;
            let gb = val(a).transpose()?.matmul(g)?;
            vec![(a, ga), (b, gb)]
        }
        Op::Transpose(a) => vec![(a, g.transpose()?)],
        Op::Reshape(a) => vec![(a, g.reshaped(val(a).shape().to_vec())?)],
        Op::Sum(a) => vec![(a, Tensor::full(val(a).shape(), g.item()))],
        Op::SumAxis(a, axis) => {
            let shape = val(a).shape();
            let (outer, len, inner) = split_axis(shape, axis);
            let mut data = vec![S::zero(); outer * len * inner];
            for o in 0..outer {
                for l in 0..len {
                    for i in 0..inner {
                        data[(o * len + l) * inner + i] = g.data()[o * inner + i];
                    }
                }
            }
            vec![(a, Tensor::new(shape.to_vec(), data)?)]
        }
        Op::LogSumExp(a) => {
            let x = val(a);
            let k = *x.shape().last().unwrap_or(&1);
            let mut data = vec![S::zero(); x.len()];
            for (r, chunk) in x.data().chunks(k.max(1)).enumerate() {
                let lse = out.data()[r];
                for (c, &s) in chunk.iter().enumerate() {
                    data[r * k + c] = g.data()[r] * (s - lse).exp();
                }
            }
            vec![(a, Tensor::new(x.shape().to_vec(), data)?)]
        }
        Op::Softmax(a) => {
            let k = *out.shape().last().unwrap_or(&1);
            let mut data = vec![S::zero(); out.len()];
            for (r, (y, gr)) in out
                .data()
                .chunks(k.max(1))
                .zip(g.data().chunks(k.max(1)))
                .enumerate()
            {
                let dot: S = y.iter().zip(gr).map(|(&y, &g)| y * g).sum();
                for c in 0..k {
                    data[r * k + c] = y[c] * (gr[c] - dot);
                }
            }
            vec![(a, Tensor::new(out.shape().to_vec(), data)?)]
        }
        Op::WeightedPool(x, w) => {
            let xv = val(x);
            let wv = val(w);
            let (b, l, f) = (xv.shape()[0], xv.shape()[1], xv.shape()[2]);
            let mut gx = vec![S::zero(); b * l * f];
            let mut gw = vec![S::zero(); l];
            for bi in 0..b {
                let grow = &g.data()[bi * f..(bi + 1) * f];
                for li in 0..l {
                    let base = (bi * l + li) * f;
                    let wl = wv.data()[li];
                    let mut acc = S::zero();
                    for fi in 0..f {
                        gx[base + fi] = wl * grow[fi];
                        acc = acc + xv.data()[base + fi] * grow[fi];
                    }
                    gw[li] = gw[li] + acc;
                }
            }
            vec![
                (x, Tensor::new(xv.shape().to_vec(), gx)?),
                (w, Tensor::new(wv.shape().to_vec(), gw)?),
            ]
        }
        Op::ExpandRows(a) => {
            let f = val(a).len();
            let mut data = vec![S::zero(); f];
            for row in g.data().chunks(f.max(1)) {
                for (d, &x) in data.iter_mut().zip(row) {
                    *d = *d + x;
                }
            }
            vec![(a, Tensor::new(val(a).shape().to_vec(), data)?)]
        }
        Op::ExpandCols(a) => {
            let k = out.shape()[1];
            let data = g
                .data()
                .chunks(k.max(1))
                .map(|row| row.iter().copied().sum())
                .take(val(a).len())
                .collect();
            vec![(a, Tensor::new(val(a).shape().to_vec(), data)?)]
        }
    };
    Ok(rules)
}

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

impl<'t, S: Scalar> Var<'t, S> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape<S> {
        self.tape
    }

    pub fn value(&self) -> Tensor<S> {
        self.tape.nodes.borrow()[self.id].value.clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    /// Value of a single-element node.
    pub fn item(&self) -> S {
        self.tape.nodes.borrow()[self.id].value.item()
    }

    fn with_values<R>(&self, other: Var<'t, S>, f: impl FnOnce(&Tensor<S>, &Tensor<S>) -> R) -> R {
        let nodes = self.tape.nodes.borrow();
        f(&nodes[self.id].value, &nodes[other.id].value)
    }

    fn with_value<R>(&self, f: impl FnOnce(&Tensor<S>) -> R) -> R {
        let nodes = self.tape.nodes.borrow();
        f(&nodes[self.id].value)
    }

    fn binary(
        self,
        other: Var<'t, S>,
        name: &'static str,
        op: Op<S>,
        f: impl Fn(S, S) -> S,
    ) -> Result<Var<'t, S>, AutodiffError> {
        let value = self.with_values(other, |a, b| {
            if a.shape() == b.shape() {
                Ok(a.zip_map(b, &f))
            } else if b.is_scalar() {
                let s = b.item();
                Ok(a.map(|x| f(x, s)))
            } else if a.is_scalar() {
                let s = a.item();
                Ok(b.map(|x| f(s, x)))
            } else {
                Err(AutodiffError::ShapeMismatch {
                    op: name,
                    lhs: a.shape().to_vec(),
                    rhs: b.shape().to_vec(),
                })
            }
        })?;
        self.tape.record(name, value, op, &[self.id, other.id])
    }

    fn unary(
        self,
        name: &'static str,
        op: Op<S>,
        f: impl Fn(&Tensor<S>) -> Result<Tensor<S>, AutodiffError>,
    ) -> Result<Var<'t, S>, AutodiffError> {
        let value = self.with_value(f)?;
        self.tape.record(name, value, op, &[self.id])
    }

    /// Elementwise sum; a rank-0 operand broadcasts.
    pub fn add(self, other: Var<'t, S>) -> Result<Var<'t, S>, AutodiffError> {
        self.binary(other, "add", Op::Add(self.id, other.id), |a, b| a + b)
    }

    pub fn sub(self, other: Var<'t, S>) -> Result<Var<'t, S>, AutodiffError> {
        self.binary(other, "sub", Op::Sub(self.id, other.id), |a, b| a - b)
    }

    pub fn mul(self, other: Var<'t, S>) -> Result<Var<'t, S>, AutodiffError> {
        self.binary(other, "mul", Op::Mul(self.id, other.id), |a, b| a * b)
    }

    pub fn div(self, other: Var<'t, S>) -> Result<Var<'t, S>, AutodiffError> {
        self.binary(other, "div", Op::Div(self.id, other.id), |a, b| a / b)
    }

    pub fn neg(self) -> Result<Var<'t, S>, AutodiffError> {
        self.unary("neg", Op::Neg(self.id), |a| Ok(a.map(|x| -x)))
    }

    /// Multiplication by a constant that is not tracked.
    pub fn scale(self, c: f64) -> Result<Var<'t, S>, AutodiffError> {
        let c = S::from_f64(c);
        self.unary("scale", Op::Scale(self.id, c), |a| Ok(a.map(|x| x * c)))
    }

    pub fn add_const(self, c: f64) -> Result<Var<'t, S>, AutodiffError> {
        let c = S::from_f64(c);
        self.unary("add_const", Op::AddConst(self.id), |a| Ok(a.map(|x| x + c)))
    }

    pub fn square(self) -> Result<Var<'t, S>, AutodiffError> {
        self.unary("square", Op::Square(self.id), |a| Ok(a.map(|x| x * x)))
    }

    pub fn exp(self) -> Result<Var<'t, S>, AutodiffError> {
        self.unary("exp", Op::Exp(self.id), |a| Ok(a.map(|x| x.exp())))
    }

    pub fn log(self) -> Result<Var<'t, S>, AutodiffError> {
        self.unary("log", Op::Log(self.id), |a| {
            if a.data().iter().any(|&x| x <= S::zero()) {
                return Err(AutodiffError::LogDomain);
            }
            Ok(a.map(|x| x.ln()))
        })
    }

    /// `max(x, 0)`.
    pub fn relu(self) -> Result<Var<'t, S>, AutodiffError> {
        self.unary("relu", Op::Relu(self.id), |a| {
            Ok(a.map(|x| if x > S::zero() { x } else { S::zero() }))
        })
    }

    pub fn matmul(self, other: Var<'t, S>) -> Result<Var<'t, S>, AutodiffError> {
        let value = self.with_values(other, |a, b| a.matmul(b))?;
        self.tape
            .record("matmul", value, Op::MatMul(self.id, other.id), &[self.id, other.id])
    }

    pub fn t(self) -> Result<Var<'t, S>, AutodiffError> {
        self.unary("transpose", Op::Transpose(self.id), |a| a.transpose())
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'t, S>, AutodiffError> {
        self.unary("reshape", Op::Reshape(self.id), |a| a.reshaped(shape.to_vec()))
    }

    /// Sum of all entries, rank-0 result.
    pub fn sum(self) -> Result<Var<'t, S>, AutodiffError> {
        self.unary("sum", Op::Sum(self.id), |a| Ok(Tensor::scalar(a.sum())))
    }

    pub fn mean(self) -> Result<Var<'t, S>, AutodiffError> {
        let n = self.with_value(|a| a.len());
        if n == 0 {
            return Err(AutodiffError::InvalidAxis {
                op: "mean",
                axis: 0,
                shape: self.shape(),
            });
        }
        self.sum()?.scale(1.0 / n as f64)
    }

    /// Sum over `axis`, dropping it.
    pub fn sum_axis(self, axis: usize) -> Result<Var<'t, S>, AutodiffError> {
        self.unary("sum_axis", Op::SumAxis(self.id, axis), |a| {
            let shape = a.shape();
            if axis >= shape.len() {
                return Err(AutodiffError::InvalidAxis {
                    op: "sum_axis",
                    axis,
                    shape: shape.to_vec(),
                });
            }
            let (outer, len, inner) = split_axis(shape, axis);
            let mut data = vec![S::zero(); outer * inner];
            for o in 0..outer {
                for l in 0..len {
                    for i in 0..inner {
                        data[o * inner + i] = data[o * inner + i] + a.data()[(o * len + l) * inner + i];
                    }
                }
            }
            let mut out_shape = shape.to_vec();
            out_shape.remove(axis);
            Tensor::new(out_shape, data)
        })
    }

    /// Max-shifted `log Σ exp` over the last axis.
    pub fn logsumexp(self) -> Result<Var<'t, S>, AutodiffError> {
        self.unary("logsumexp", Op::LogSumExp(self.id), |a| {
            let shape = a.shape();
            let Some(&k) = shape.last() else {
                return Err(AutodiffError::InvalidAxis {
                    op: "logsumexp",
                    axis: 0,
                    shape: Vec::new(),
                });
            };
            if k == 0 {
                return Err(AutodiffError::InvalidAxis {
                    op: "logsumexp",
                    axis: shape.len() - 1,
                    shape: shape.to_vec(),
                });
            }
            let data = a.data().chunks(k).map(|row| logsumexp_row(row)).collect();
            Tensor::new(shape[..shape.len() - 1].to_vec(), data)
        })
    }

    /// Softmax over the last axis.
    pub fn softmax(self) -> Result<Var<'t, S>, AutodiffError> {
        self.unary("softmax", Op::Softmax(self.id), |a| {
            let shape = a.shape();
            let k = match shape.last() {
                Some(&k) if k > 0 => k,
                _ => {
                    return Err(AutodiffError::InvalidAxis {
                        op: "softmax",
                        axis: shape.len().saturating_sub(1),
                        shape: shape.to_vec(),
                    })
                }
            };
            let mut data = Vec::with_capacity(a.len());
            for row in a.data().chunks(k) {
                softmax_row_into(row, &mut data);
            }
            Tensor::new(shape.to_vec(), data)
        })
    }

    /// `out[b, f] = Σ_l w[l] · x[b, l, f]` for `x: [B, L, F]`, `w: [L]`.
    pub fn weighted_pool(self, w: Var<'t, S>) -> Result<Var<'t, S>, AutodiffError> {
        let value = self.with_values(w, |x, w| {
            let xs = x.shape();
            if xs.len() != 3 || w.shape() != [xs[1]] {
                return Err(AutodiffError::ShapeMismatch {
                    op: "weighted_pool",
                    lhs: xs.to_vec(),
                    rhs: w.shape().to_vec(),
                });
            }
            let (b, l, f) = (xs[0], xs[1], xs[2]);
            let mut data = vec![S::zero(); b * f];
            for bi in 0..b {
                for li in 0..l {
                    let wl = w.data()[li];
                    let base = (bi * l + li) * f;
                    for fi in 0..f {
                        data[bi * f + fi] = data[bi * f + fi] + wl * x.data()[base + fi];
                    }
                }
            }
            Tensor::new(vec![b, f], data)
        })?;
        self.tape.record(
            "weighted_pool",
            value,
            Op::WeightedPool(self.id, w.id),
            &[self.id, w.id],
        )
    }

    /// `[F] -> [n, F]` by repeating the vector as rows.
    pub fn expand_rows(self, n: usize) -> Result<Var<'t, S>, AutodiffError> {
        self.unary("expand_rows", Op::ExpandRows(self.id), |a| {
            if a.rank() != 1 {
                return Err(AutodiffError::InvalidAxis {
                    op: "expand_rows",
                    axis: 0,
                    shape: a.shape().to_vec(),
                });
            }
            let f = a.len();
            let mut data = Vec::with_capacity(n * f);
            for _ in 0..n {
                data.extend_from_slice(a.data());
            }
            Tensor::new(vec![n, f], data)
        })
    }

    /// `[n] -> [n, k]` by repeating each entry along a new last axis.
    pub fn expand_cols(self, k: usize) -> Result<Var<'t, S>, AutodiffError> {
        self.unary("expand_cols", Op::ExpandCols(self.id), |a| {
            if a.rank() != 1 {
                return Err(AutodiffError::InvalidAxis {
                    op: "expand_cols",
                    axis: 0,
                    shape: a.shape().to_vec(),
                });
            }
            let data = a
                .data()
                .iter()
                .flat_map(|&x| std::iter::repeat_n(x, k))
                .collect();
            Tensor::new(vec![a.len(), k], data)
        })
    }
}

pub(crate) fn logsumexp_row<S: Scalar>(row: &[S]) -> S {
    let m = row.iter().copied().fold(S::neg_infinity(), S::max);
    if !m.is_finite() {
        return m;
    }
    m + row.iter().map(|&s| (s - m).exp()).sum::<S>().ln()
}

pub(crate) fn softmax_row_into<S: Scalar>(row: &[S], out: &mut Vec<S>) {
    let m = row.iter().copied().fold(S::neg_infinity(), S::max);
    let start = out.len();
    let mut z = S::zero();
    for &s in row {
        let e = (s - m).exp();
        z = z + e;
        out.push(e);
    }
    for v in &mut out[start..] {
        *v = *v / z;
    }
}
