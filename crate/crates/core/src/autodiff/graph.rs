use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Reduction axis of a matrix.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Axis {
    /// Reduce over rows, producing `1 × cols`.
    Rows,
    /// Reduce over columns, producing `rows × 1`.
    Cols,
}

/// Vector-Jacobian product of an operator implemented outside this module.
///
/// `backward` receives the forward inputs, the forward output and the
/// gradient flowing into the output; it returns one optional gradient per
/// input (same shape as that input).
pub trait CustomOp: Send + Sync {
    fn name(&self) -> &'static str;
    fn backward(&self, inputs: &[&Tensor], output: &Tensor, grad: &Tensor) -> Vec<Option<Tensor>>;
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Relu(Var),
    Abs(Var),
    Square(Var),
    Scale(Var, f64),
    Sum(Var, Option<Axis>),
    Mean(Var, Option<Axis>),
    Softmax(Var, Axis),
    Concat(Vec<Var>, Axis),
    Reshape(Var),
    Custom(Vec<Var>, Box<dyn CustomOp>),
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Append-only record of primitive applications.
///
/// Nodes are only ever appended, so every node's inputs precede it and a
/// reverse sweep over insertion order is a valid topological order.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    consumed: bool,
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

/// How the second operand of an elementwise binary op lines up with the first.
#[derive(Clone, Copy)]
enum Broadcast {
    Same,
    Column,
    Row,
    Scalar,
}

fn broadcast_kind(a: &[usize], b: &[usize]) -> Option<Broadcast> {
    if a == b {
        return Some(Broadcast::Same);
    }
    if b == [1] || b == [1, 1] {
        return Some(Broadcast::Scalar);
    }
    match (a, b) {
        ([r, _], [rb, 1]) if r == rb => Some(Broadcast::Column),
        ([_, c], [1, cb]) if c == cb => Some(Broadcast::Row),
        _ => None,
    }
}

#[inline]
fn bidx(kind: Broadcast, idx: usize, cols: usize) -> usize {
    match kind {
        Broadcast::Same => idx,
        Broadcast::Column => idx / cols,
        Broadcast::Row => idx % cols,
        Broadcast::Scalar => 0,
    }
}

/// Sums a full-shape gradient back down to the broadcast operand's shape.
fn unbroadcast(kind: Broadcast, grad: &Tensor, target: &[usize]) -> Tensor {
    match kind {
        Broadcast::Same => grad.clone(),
        _ => {
            let cols = grad.cols();
            let mut out = Tensor::zeros(target);
            let o = out.data_mut();
            for (i, g) in grad.data().iter().enumerate() {
                o[bidx(kind, i, cols)] += g;
            }
            out
        }
    }
}

pub(crate) fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += aip * bv;
            }
        }
    }
    out
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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// A differentiable leaf; [`Graph::backward`] reports its gradient.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push_raw(value, Op::Leaf, true)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push_raw(value, Op::Leaf, false)
    }

    fn push_raw(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var], kind: &str) -> Result<Var> {
        if self.consumed {
            return Err(Error::Graph("graph already consumed by backward".into()));
        }
        if !value.is_finite() {
            return Err(Error::NonFinite(kind.to_string()));
        }
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        Ok(self.push_raw(value, op, needs_grad))
    }

    /// Records an operator whose forward value was computed by the caller.
    pub fn custom(&mut self, inputs: &[Var], value: Tensor, op: Box<dyn CustomOp>) -> Result<Var> {
        let name = op.name();
        self.push(value, Op::Custom(inputs.to_vec(), op), inputs, name)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.value(a).dims2()?;
        let (k2, n) = self.value(b).dims2()?;
        if k != k2 {
            return Err(Error::Shape(format!("matmul {m}x{k} by {k2}x{n}")));
        }
        let out = matmul_raw(self.value(a).data(), self.value(b).data(), m, k, n);
        self.push(
            Tensor::new(vec![m, n], out)?,
            Op::MatMul(a, b),
            &[a, b],
            "matmul",
        )
    }

    fn binary(
        &mut self,
        a: Var,
        b: Var,
        name: &str,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Tensor> {
        let (ta, tb) = (self.value(a), self.value(b));
        let kind = broadcast_kind(ta.shape(), tb.shape()).ok_or_else(|| {
            Error::Shape(format!("{name} {:?} with {:?}", ta.shape(), tb.shape()))
        })?;
        let cols = ta.cols();
        let bd = tb.data();
        let out: Vec<f64> = ta
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| f(x, bd[bidx(kind, i, cols)]))
            .collect();
        Tensor::new(ta.shape().to_vec(), out)
    }

    /// Elementwise sum; `b` may be a matching column (`rows × 1`), row
    /// (`1 × cols`) or scalar, broadcast across `a`.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary(a, b, "add", |x, y| x + y)?;
        self.push(t, Op::Add(a, b), &[a, b], "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary(a, b, "sub", |x, y| x - y)?;
        self.push(t, Op::Sub(a, b), &[a, b], "sub")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary(a, b, "mul", |x, y| x * y)?;
        self.push(t, Op::Mul(a, b), &[a, b], "mul")
    }

    fn unary(&mut self, a: Var, op: Op, name: &str, f: impl Fn(f64) -> f64) -> Result<Var> {
        let t = self.value(a);
        let out = Tensor::new(t.shape().to_vec(), t.data().iter().map(|&x| f(x)).collect())?;
        self.push(out, op, &[a], name)
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Op::Relu(a), "relu", |x| if x > 0.0 { x } else { 0.0 })
    }

    pub fn abs(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Op::Abs(a), "abs", f64::abs)
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Op::Square(a), "square", |x| x * x)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        self.unary(a, Op::Scale(a, s), "scale", |x| x * s)
    }

    fn reduce(t: &Tensor, axis: Option<Axis>) -> Result<Tensor> {
        match axis {
            None => Ok(Tensor::scalar(t.data().iter().sum())),
            Some(ax) => {
                let (r, c) = t.dims2()?;
                let d = t.data();
                match ax {
                    Axis::Rows => {
                        let mut out = vec![0.0; c];
                        for i in 0..r {
                            for (o, x) in out.iter_mut().zip(&d[i * c..(i + 1) * c]) {
                                *o += x;
                            }
                        }
                        Tensor::new(vec![1, c], out)
                    }
                    Axis::Cols => {
                        let out = (0..r).map(|i| d[i * c..(i + 1) * c].iter().sum()).collect();
                        Tensor::new(vec![r, 1], out)
                    }
                }
            }
        }
    }

    fn reduce_count(t: &Tensor, axis: Option<Axis>) -> usize {
        match axis {
            None => t.len(),
            Some(Axis::Rows) => t.rows(),
            Some(Axis::Cols) => t.cols(),
        }
    }

    /// Sum over one axis (kept with size 1) or over everything (`axis = None`,
    /// giving a scalar). Summation runs in ascending index order.
    pub fn sum(&mut self, a: Var, axis: Option<Axis>) -> Result<Var> {
        let t = Self::reduce(self.value(a), axis)?;
        self.push(t, Op::Sum(a, axis), &[a], "sum")
    }

    pub fn mean(&mut self, a: Var, axis: Option<Axis>) -> Result<Var> {
        let src = self.value(a);
        let count = Self::reduce_count(src, axis) as f64;
        let mut t = Self::reduce(src, axis)?;
        t.data_mut().iter_mut().for_each(|x| *x /= count);
        self.push(t, Op::Mean(a, axis), &[a], "mean")
    }

    pub fn softmax(&mut self, a: Var, axis: Axis) -> Result<Var> {
        let t = self.value(a);
        let (r, c) = t.dims2()?;
        let mut out = t.data().to_vec();
        let lanes: Vec<Vec<usize>> = match axis {
            Axis::Cols => (0..r).map(|i| (i * c..(i + 1) * c).collect()).collect(),
            Axis::Rows => (0..c)
                .map(|j| (0..r).map(|i| i * c + j).collect())
                .collect(),
        };
        for lane in lanes {
            let m = lane
                .iter()
                .map(|&i| out[i])
                .fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for &i in &lane {
                out[i] = (out[i] - m).exp();
                z += out[i];
            }
            for &i in &lane {
                out[i] /= z;
            }
        }
        let t = Tensor::new(vec![r, c], out)?;
        self.push(t, Op::Softmax(a, axis), &[a], "softmax")
    }

    pub fn concat(&mut self, parts: &[Var], axis: Axis) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::Shape("concat of nothing".into()));
        }
        let dims: Vec<(usize, usize)> = parts
            .iter()
            .map(|&p| self.value(p).dims2())
            .collect::<Result<_>>()?;
        let t = match axis {
            Axis::Rows => {
                let c = dims[0].1;
                if dims.iter().any(|d| d.1 != c) {
                    return Err(Error::Shape(
                        "concat rows with differing column counts".into(),
                    ));
                }
                let data: Vec<f64> = parts
                    .iter()
                    .flat_map(|&p| self.value(p).data().to_vec())
                    .collect();
                Tensor::new(vec![dims.iter().map(|d| d.0).sum(), c], data)?
            }
            Axis::Cols => {
                let r = dims[0].0;
                if dims.iter().any(|d| d.0 != r) {
                    return Err(Error::Shape(
                        "concat columns with differing row counts".into(),
                    ));
                }
                let total: usize = dims.iter().map(|d| d.1).sum();
                let mut data = Vec::with_capacity(r * total);
                for i in 0..r {
                    for &p in parts {
                        data.extend_from_slice(self.value(p).row(i));
                    }
                }
                Tensor::new(vec![r, total], data)?
            }
        };
        self.push(t, Op::Concat(parts.to_vec(), axis), parts, "concat")
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(a).clone().reshape(shape.to_vec())?;
        self.push(t, Op::Reshape(a), &[a], "reshape")
    }

    /// Reverse sweep from a scalar `loss`.
    ///
    /// Returns gradients for every node that depends on a differentiable
    /// leaf. A graph can be swept only once.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        if self.consumed {
            return Err(Error::Graph(
                "backward called twice on the same graph".into(),
            ));
        }
        if self.value(loss).len() != 1 {
            return Err(Error::Shape(format!(
                "loss must be scalar, got {:?}",
                self.shape(loss)
            )));
        }
        self.consumed = true;
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.shape(loss), 1.0));

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let contributions = self.vjp(node, &g)?;
            for (v, c) in contributions {
                if !self.nodes[v.0].needs_grad {
                    continue;
                }
                if !c.is_finite() {
                    return Err(Error::NonFinite(format!("gradient into node {}", v.0)));
                }
                match &mut grads[v.0] {
                    Some(acc) => acc.add_assign(&c),
                    slot @ None => *slot = Some(c),
                }
            }
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn vjp(&self, node: &Node, g: &Tensor) -> Result<Vec<(Var, Tensor)>> {
        let val = |v: Var| &self.nodes[v.0].value;
        let mapped = |src: &Tensor, f: &dyn Fn(f64, f64) -> f64| -> Result<Tensor> {
            Tensor::new(
                src.shape().to_vec(),
                src.data()
                    .iter()
                    .zip(g.data())
                    .map(|(&x, &gy)| f(x, gy))
                    .collect(),
            )
        };
        Ok(match &node.op {
            Op::Leaf => vec![],
            Op::MatMul(a, b) => {
                let (m, k) = val(*a).dims2()?;
                let n = val(*b).cols();
                let (ad, bd, gd) = (val(*a).data(), val(*b).data(), g.data());
                let mut ga = vec![0.0; m * k];
                for i in 0..m {
                    for p in 0..k {
                        let mut s = 0.0;
                        for j in 0..n {
                            s += gd[i * n + j] * bd[p * n + j];
                        }
                        ga[i * k + p] = s;
                    }
                }
                let mut gb = vec![0.0; k * n];
                for i in 0..m {
                    for p in 0..k {
                        let aip = ad[i * k + p];
                        for j in 0..n {
                            gb[p * n + j] += aip * gd[i * n + j];
                        }
                    }
                }
                vec![
                    (*a, Tensor::new(vec![m, k], ga)?),
                    (*b, Tensor::new(vec![k, n], gb)?),
                ]
            }
            Op::Add(a, b) | Op::Sub(a, b) => {
                let kind =
                    broadcast_kind(val(*a).shape(), val(*b).shape()).expect("checked in forward");
                let mut gb = unbroadcast(kind, g, val(*b).shape());
                if matches!(node.op, Op::Sub(..)) {
                    gb.data_mut().iter_mut().for_each(|x| *x = -*x);
                }
                vec![(*a, g.clone()), (*b, gb)]
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                let kind = broadcast_kind(ta.shape(), tb.shape()).expect("checked in forward");
                let cols = ta.cols();
                let ga: Vec<f64> = g
                    .data()
                    .iter()
                    .enumerate()
                    .map(|(i, gy)| gy * tb.data()[bidx(kind, i, cols)])
                    .collect();
                let full_gb = Tensor::new(
                    g.shape().to_vec(),
                    g.data()
                        .iter()
                        .zip(ta.data())
                        .map(|(gy, x)| gy * x)
                        .collect(),
                )?;
                vec![
                    (*a, Tensor::new(ta.shape().to_vec(), ga)?),
                    (*b, unbroadcast(kind, &full_gb, tb.shape())),
                ]
            }
            Op::Relu(a) => vec![(
                *a,
                mapped(val(*a), &|x, gy| if x > 0.0 { gy } else { 0.0 })?,
            )],
            Op::Abs(a) => vec![(
                *a,
                mapped(val(*a), &|x, gy| {
                    if x > 0.0 {
                        gy
                    } else if x < 0.0 {
                        -gy
                    } else {
                        0.0
                    }
                })?,
            )],
            Op::Square(a) => vec![(*a, mapped(val(*a), &|x, gy| 2.0 * x * gy)?)],
            Op::Scale(a, s) => vec![(*a, mapped(val(*a), &|_, gy| gy * s)?)],
            Op::Sum(a, axis) | Op::Mean(a, axis) => {
                let src = val(*a);
                let div = if matches!(node.op, Op::Mean(..)) {
                    Self::reduce_count(src, *axis) as f64
                } else {
                    1.0
                };
                let cols = src.cols();
                let out: Vec<f64> = (0..src.len())
                    .map(|i| {
                        let gi = match axis {
                            None => 0,
                            Some(Axis::Rows) => i % cols,
                            Some(Axis::Cols) => i / cols,
                        };
                        g.data()[gi] / div
                    })
                    .collect();
                vec![(*a, Tensor::new(src.shape().to_vec(), out)?)]
            }
            Op::Softmax(a, axis) => {
                let y = &node.value;
                let (r, c) = y.dims2()?;
                let (yd, gd) = (y.data(), g.data());
                let mut out = vec![0.0; r * c];
                let lanes: Vec<Vec<usize>> = match axis {
                    Axis::Cols => (0..r).map(|i| (i * c..(i + 1) * c).collect()).collect(),
                    Axis::Rows => (0..c)
                        .map(|j| (0..r).map(|i| i * c + j).collect())
                        .collect(),
                };
                for lane in lanes {
                    let dot: f64 = lane.iter().map(|&i| yd[i] * gd[i]).sum();
                    for &i in &lane {
                        out[i] = yd[i] * (gd[i] - dot);
                    }
                }
                vec![(*a, Tensor::new(vec![r, c], out)?)]
            }
            Op::Concat(parts, axis) => {
                let (_, total_c) = g.dims2()?;
                let mut res = Vec::with_capacity(parts.len());
                let mut offset = 0;
                for &p in parts {
                    let (pr, pc) = val(p).dims2()?;
                    let mut data = Vec::with_capacity(pr * pc);
                    match axis {
                        Axis::Rows => {
                            data.extend_from_slice(&g.data()[offset * pc..(offset + pr) * pc])
                        }
                        Axis::Cols => {
                            for i in 0..pr {
                                data.extend_from_slice(
                                    &g.data()[i * total_c + offset..i * total_c + offset + pc],
                                );
                            }
                        }
                    }
                    offset += if matches!(axis, Axis::Rows) { pr } else { pc };
                    res.push((p, Tensor::new(vec![pr, pc], data)?));
                }
                res
            }
            Op::Reshape(a) => vec![(*a, g.clone().reshape(val(*a).shape().to_vec())?)],
            Op::Custom(inputs, op) => {
                let ins: Vec<&Tensor> = inputs.iter().map(|&v| val(v)).collect();
                let gs = op.backward(&ins, &node.value, g);
                inputs
                    .iter()
                    .zip(gs)
                    .filter_map(|(&v, gv)| gv.map(|t| (v, t)))
                    .collect()
            }
        })
    }
}
