use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug)]
enum Unary {
    Relu,
    Sigmoid,
    Log1p,
    SignedLog1p,
    SoftSign,
    Sqrt,
}

#[derive(Clone, Copy, Debug)]
enum Binary {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(NodeId, NodeId),
    Binary(Binary, NodeId, NodeId),
    Unary(Unary, NodeId),
    Softmax(NodeId),
    Transpose(NodeId),
    Concat {
        parts: Vec<NodeId>,
        axis: usize,
    },
    Slice {
        src: NodeId,
        axis: usize,
        start: usize,
    },
    Sum(NodeId),
    Scale(NodeId, f64),
    AddScalar(NodeId),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Append-only computation tape.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Result of [`Graph::backward`]: one optional gradient per node.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of the root with respect to `id`, if `id` was reachable.
    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.grads.get(id.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, id: NodeId) -> Option<Tensor> {
        self.grads.get_mut(id.0).and_then(Option::take)
    }
}

fn broadcast_dim(op: &'static str, a: &Tensor, b: &Tensor) -> Result<(usize, usize)> {
    let (ra, ca) = a.dims()?;
    let (rb, cb) = b.dims()?;
    let pick = |x: usize, y: usize| {
        if x == y || y == 1 {
            Some(x)
        } else if x == 1 {
            Some(y)
        } else {
            None
        }
    };
    match (pick(ra, rb), pick(ca, cb)) {
        (Some(r), Some(c)) => Ok((r, c)),
        _ => Err(Error::shape(op, a.shape(), b.shape())),
    }
}

#[inline]
fn at(t: &Tensor, r: usize, c: usize, i: usize, j: usize) -> f64 {
    let ii = if r == 1 { 0 } else { i };
    let jj = if c == 1 { 0 } else { j };
    t.values()[ii * c + jj]
}

fn broadcast_map(
    a: &Tensor,
    b: &Tensor,
    rows: usize,
    cols: usize,
    f: impl Fn(f64, f64, usize) -> f64,
) -> Tensor {
    let (ra, ca) = a.dims().expect("rank-2");
    let (rb, cb) = b.dims().expect("rank-2");
    let mut out = Vec::with_capacity(rows * cols);
    for i in 0..rows {
        for j in 0..cols {
            out.push(f(at(a, ra, ca, i, j), at(b, rb, cb, i, j), i * cols + j));
        }
    }
    Tensor::matrix(rows, cols, out).expect("broadcast shape")
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

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> NodeId {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn needs(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|id| self.nodes[id.0].needs_grad)
    }

    /// Differentiable leaf (parameter or input whose gradient is wanted).
    pub fn leaf(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf excluded from gradient propagation.
    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Leaf, false)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (self.value(a), self.value(b));
        let (_, k) = va.dims()?;
        let (k2, _) = vb.dims()?;
        if k != k2 {
            return Err(Error::shape("matmul", va.shape(), vb.shape()));
        }
        let out = Tensor::matmul_raw(va, vb);
        let ng = self.needs(&[a, b]);
        Ok(self.push(out, Op::MatMul(a, b), ng))
    }

    fn binary(&mut self, kind: Binary, a: NodeId, b: NodeId) -> Result<NodeId> {
        let name = match kind {
            Binary::Add => "add",
            Binary::Sub => "sub",
            Binary::Mul => "mul",
            Binary::Div => "div",
        };
        let (va, vb) = (self.value(a), self.value(b));
        let (r, c) = broadcast_dim(name, va, vb)?;
        let out = broadcast_map(va, vb, r, c, |x, y, _| match kind {
            Binary::Add => x + y,
            Binary::Sub => x - y,
            Binary::Mul => x * y,
            Binary::Div => x / y,
        });
        let ng = self.needs(&[a, b]);
        Ok(self.push(out, Op::Binary(kind, a, b), ng))
    }

    /// Elementwise sum; either operand may broadcast along a unit axis.
    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(Binary::Add, a, b)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(Binary::Sub, a, b)
    }

    /// Elementwise (Hadamard) product with broadcasting.
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(Binary::Mul, a, b)
    }

    pub fn div(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(Binary::Div, a, b)
    }

    fn unary(&mut self, kind: Unary, a: NodeId) -> NodeId {
        let out = self.value(a).map(|x| match kind {
            Unary::Relu => x.max(0.0),
            Unary::Sigmoid => sigmoid(x),
            Unary::Log1p => x.ln_1p(),
            Unary::SignedLog1p => x.signum() * x.abs().ln_1p(),
            Unary::SoftSign => x / (1.0 + x.abs()),
            Unary::Sqrt => x.sqrt(),
        });
        let ng = self.needs(&[a]);
        self.push(out, Op::Unary(kind, a), ng)
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        self.unary(Unary::Relu, a)
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        self.unary(Unary::Sigmoid, a)
    }

    pub fn log1p(&mut self, a: NodeId) -> NodeId {
        self.unary(Unary::Log1p, a)
    }

    /// `sign(x) * ln(1 + |x|)`.
    pub fn signed_log1p(&mut self, a: NodeId) -> NodeId {
        self.unary(Unary::SignedLog1p, a)
    }

    /// `x / (1 + |x|)`.
    pub fn soft_sign(&mut self, a: NodeId) -> NodeId {
        self.unary(Unary::SoftSign, a)
    }

    pub fn sqrt(&mut self, a: NodeId) -> NodeId {
        self.unary(Unary::Sqrt, a)
    }

    /// Row-wise softmax over the last axis.
    pub fn softmax(&mut self, a: NodeId) -> Result<NodeId> {
        let va = self.value(a);
        let (r, c) = va.dims()?;
        let mut out = va.values().to_vec();
        for row in out.chunks_mut(c) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                total += *v;
            }
            for v in row.iter_mut() {
                *v /= total;
            }
        }
        let out = Tensor::matrix(r, c, out)?;
        let ng = self.needs(&[a]);
        Ok(self.push(out, Op::Softmax(a), ng))
    }

    pub fn transpose(&mut self, a: NodeId) -> Result<NodeId> {
        self.value(a).dims()?;
        let out = self.value(a).transpose();
        let ng = self.needs(&[a]);
        Ok(self.push(out, Op::Transpose(a), ng))
    }

    /// Concatenation along `axis` (0 stacks rows, 1 joins columns).
    pub fn concat(&mut self, parts: &[NodeId], axis: usize) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(Error::InvalidArgument("concat of zero parts".into()));
        }
        if axis > 1 {
            return Err(Error::InvalidArgument(format!("concat axis {axis}")));
        }
        let first = self.value(parts[0]).dims()?;
        let mut dims = Vec::with_capacity(parts.len());
        for &p in parts {
            let d = self.value(p).dims()?;
            let compatible = if axis == 0 {
                d.1 == first.1
            } else {
                d.0 == first.0
            };
            if !compatible {
                return Err(Error::shape(
                    "concat",
                    self.value(parts[0]).shape(),
                    self.value(p).shape(),
                ));
            }
            dims.push(d);
        }
        let out = if axis == 0 {
            let rows: usize = dims.iter().map(|d| d.0).sum();
            let mut values = Vec::with_capacity(rows * first.1);
            for &p in parts {
                values.extend_from_slice(self.value(p).values());
            }
            Tensor::matrix(rows, first.1, values)?
        } else {
            let cols: usize = dims.iter().map(|d| d.1).sum();
            let mut values = Vec::with_capacity(first.0 * cols);
            for i in 0..first.0 {
                for &p in parts {
                    values.extend_from_slice(self.value(p).row(i));
                }
            }
            Tensor::matrix(first.0, cols, values)?
        };
        let ng = self.needs(parts);
        Ok(self.push(
            out,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            ng,
        ))
    }

    /// `len` consecutive rows (axis 0) or columns (axis 1) starting at `start`.
    pub fn slice(&mut self, src: NodeId, axis: usize, start: usize, len: usize) -> Result<NodeId> {
        let v = self.value(src);
        let (r, c) = v.dims()?;
        let extent = match axis {
            0 => r,
            1 => c,
            _ => return Err(Error::InvalidArgument(format!("slice axis {axis}"))),
        };
        if len == 0 || start + len > extent {
            return Err(Error::shape("slice", v.shape(), &[start, len]));
        }
        let out = if axis == 0 {
            Tensor::matrix(len, c, v.values()[start * c..(start + len) * c].to_vec())?
        } else {
            let mut values = Vec::with_capacity(r * len);
            for i in 0..r {
                values.extend_from_slice(&v.row(i)[start..start + len]);
            }
            Tensor::matrix(r, len, values)?
        };
        let ng = self.needs(&[src]);
        Ok(self.push(out, Op::Slice { src, axis, start }, ng))
    }

    /// Sum over `axis` keeping it as a unit dimension, or over everything when `None`.
    pub fn sum(&mut self, src: NodeId, axis: Option<usize>) -> Result<NodeId> {
        let v = self.value(src);
        let (r, c) = v.dims()?;
        let out = match axis {
            None => Tensor::scalar(v.values().iter().sum()),
            Some(0) => {
                let mut acc = vec![0.0; c];
                for i in 0..r {
                    for (a, &x) in acc.iter_mut().zip(v.row(i)) {
                        *a += x;
                    }
                }
                Tensor::matrix(1, c, acc)?
            }
            Some(1) => Tensor::matrix(r, 1, (0..r).map(|i| v.row(i).iter().sum()).collect())?,
            Some(a) => return Err(Error::InvalidArgument(format!("sum axis {a}"))),
        };
        let ng = self.needs(&[src]);
        Ok(self.push(out, Op::Sum(src), ng))
    }

    pub fn mean(&mut self, src: NodeId, axis: Option<usize>) -> Result<NodeId> {
        let (r, c) = self.value(src).dims()?;
        let n = match axis {
            None => r * c,
            Some(0) => r,
            Some(_) => c,
        };
        let s = self.sum(src, axis)?;
        Ok(self.scale(s, 1.0 / n as f64))
    }

    pub fn scale(&mut self, a: NodeId, factor: f64) -> NodeId {
        let out = self.value(a).map(|x| x * factor);
        let ng = self.needs(&[a]);
        self.push(out, Op::Scale(a, factor), ng)
    }

    pub fn add_scalar(&mut self, a: NodeId, offset: f64) -> NodeId {
        let out = self.value(a).map(|x| x + offset);
        let ng = self.needs(&[a]);
        self.push(out, Op::AddScalar(a), ng)
    }

    /// Reverse sweep from a scalar `root`.
    ///
    /// Gradients accumulate additively when a node feeds several consumers.
    pub fn backward(&self, root: NodeId) -> Result<Gradients> {
        let root_value = self.value(root);
        if root_value.len() != 1 {
            return Err(Error::InvalidArgument(format!(
                "backward requires a scalar root, got shape {:?}",
                root_value.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; root.0 + 1];
        grads[root.0] = Some(Tensor::filled(1, 1, 1.0).reshape_like(root_value.shape()));

        for idx in (0..=root.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            for (parent, pg) in self.local_grads(node, &g) {
                if !self.nodes[parent.0].needs_grad {
                    continue;
                }
                match &mut grads[parent.0] {
                    Some(acc) => acc.add_assign(&pg),
                    slot => *slot = Some(pg),
                }
            }
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn local_grads(&self, node: &Node, g: &Tensor) -> Vec<(NodeId, Tensor)> {
        match &node.op {
            Op::Leaf => Vec::new(),
            Op::MatMul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let mut out = Vec::with_capacity(2);
                if self.nodes[a.0].needs_grad {
                    out.push((
                        *a,
                        Tensor::matmul_raw(g, &vb.transpose()).reshape_like(va.shape()),
                    ));
                }
                if self.nodes[b.0].needs_grad {
                    out.push((
                        *b,
                        Tensor::matmul_raw(&va.transpose(), g).reshape_like(vb.shape()),
                    ));
                }
                out
            }
            Op::Binary(kind, a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let (r, c) = g.dims().expect("rank-2");
                let (ra, ca) = va.dims().expect("rank-2");
                let (rb, cb) = vb.dims().expect("rank-2");
                let gv = g.values();
                let ga = match kind {
                    Binary::Add | Binary::Sub => g.clone(),
                    Binary::Mul => broadcast_map(va, vb, r, c, |_, y, k| gv[k] * y),
                    Binary::Div => broadcast_map(va, vb, r, c, |_, y, k| gv[k] / y),
                };
                let gb = match kind {
                    Binary::Add => g.clone(),
                    Binary::Sub => g.map(|x| -x),
                    Binary::Mul => broadcast_map(va, vb, r, c, |x, _, k| gv[k] * x),
                    Binary::Div => broadcast_map(va, vb, r, c, |x, y, k| -gv[k] * x / (y * y)),
                };
                vec![
                    (*a, ga.reduce_to(ra, ca).reshape_like(va.shape())),
                    (*b, gb.reduce_to(rb, cb).reshape_like(vb.shape())),
                ]
            }
            Op::Unary(kind, a) => {
                let x = self.value(*a);
                let y = &node.value;
                let local = match kind {
                    Unary::Relu => x.map(|v| if v > 0.0 { 1.0 } else { 0.0 }),
                    Unary::Sigmoid => y.map(|s| s * (1.0 - s)),
                    Unary::Log1p => x.map(|v| 1.0 / (1.0 + v)),
                    Unary::SignedLog1p => x.map(|v| 1.0 / (1.0 + v.abs())),
                    Unary::SoftSign => x.map(|v| {
                        let d = 1.0 + v.abs();
                        1.0 / (d * d)
                    }),
                    Unary::Sqrt => y.map(|s| 0.5 / s),
                };
                vec![(*a, g.zip(&local, |u, l| u * l))]
            }
            Op::Softmax(a) => {
                let y = &node.value;
                let c = y.cols();
                let mut out = Vec::with_capacity(y.len());
                for (yr, gr) in y.values().chunks(c).zip(g.values().chunks(c)) {
                    let dot: f64 = yr.iter().zip(gr).map(|(p, q)| p * q).sum();
                    out.extend(yr.iter().zip(gr).map(|(p, q)| p * (q - dot)));
                }
                let t = Tensor::new(y.shape().to_vec(), out).expect("softmax grad");
                vec![(*a, t)]
            }
            Op::Transpose(a) => {
                let shape = self.value(*a).shape().to_vec();
                vec![(*a, g.transpose().reshape_like(&shape))]
            }
            Op::Concat { parts, axis } => {
                let mut offset = 0;
                let mut out = Vec::with_capacity(parts.len());
                for &p in parts {
                    let v = self.value(p);
                    let (pr, pc) = v.dims().expect("rank-2");
                    let piece = if *axis == 0 {
                        let gc = g.cols();
                        Tensor::matrix(pr, pc, g.values()[offset * gc..(offset + pr) * gc].to_vec())
                            .expect("concat grad")
                    } else {
                        let mut values = Vec::with_capacity(pr * pc);
                        for i in 0..pr {
                            values.extend_from_slice(&g.row(i)[offset..offset + pc]);
                        }
                        Tensor::matrix(pr, pc, values).expect("concat grad")
                    };
                    offset += if *axis == 0 { pr } else { pc };
                    out.push((p, piece.reshape_like(v.shape())));
                }
                out
            }
            Op::Slice { src, axis, start } => {
                let v = self.value(*src);
                let (r, c) = v.dims().expect("rank-2");
                let mut full = vec![0.0; r * c];
                let (gr, gc) = g.dims().expect("rank-2");
                for i in 0..gr {
                    for j in 0..gc {
                        let (si, sj) = if *axis == 0 {
                            (start + i, j)
                        } else {
                            (i, start + j)
                        };
                        full[si * c + sj] = g.values()[i * gc + j];
                    }
                }
                vec![(
                    *src,
                    Tensor::new(v.shape().to_vec(), full).expect("slice grad"),
                )]
            }
            Op::Sum(src) => {
                let v = self.value(*src);
                let (r, c) = v.dims().expect("rank-2");
                let (gr, gc) = g.dims().expect("rank-2");
                let mut full = Vec::with_capacity(r * c);
                for i in 0..r {
                    for j in 0..c {
                        full.push(at(g, gr, gc, i, j));
                    }
                }
                vec![(
                    *src,
                    Tensor::new(v.shape().to_vec(), full).expect("sum grad"),
                )]
            }
            Op::Scale(a, factor) => vec![(*a, g.map(|x| x * factor))],
            Op::AddScalar(a) => vec![(*a, g.clone())],
        }
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
