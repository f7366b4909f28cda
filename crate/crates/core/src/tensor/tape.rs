use std::cell::{Cell, RefCell};
use std::fmt;

use super::kernels::{mm, mm_at, mm_bt, sigmoid, softplus};
use super::Tensor;
use crate::error::{Error, Result};

const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Debug)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Min(usize, usize),
    Max(usize, usize),
    Scale(usize, f64),
    AddScalar(usize),
    Relu(usize),
    Sigmoid(usize),
    Softplus(usize),
    Abs(usize),
    Matmul {
        a: usize,
        b: usize,
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
    },
    Transpose {
        a: usize,
        batch: usize,
        r: usize,
        c: usize,
    },
    Reshape(usize),
    ConcatRows(Vec<usize>),
    ConcatCols {
        parts: Vec<usize>,
        widths: Vec<usize>,
        rows: usize,
    },
    SliceRows {
        a: usize,
        start: usize,
        end: usize,
        width: usize,
    },
    SliceCols {
        a: usize,
        rows: usize,
        width: usize,
        start: usize,
        end: usize,
    },
    GatherRows {
        a: usize,
        index: Vec<usize>,
        width: usize,
    },
    Linear {
        x: usize,
        w: usize,
        b: Option<usize>,
        rows: usize,
        inp: usize,
        out: usize,
    },
    Softmax {
        a: usize,
        outer: usize,
        len: usize,
        inner: usize,
    },
    MeanPool {
        a: usize,
        outer: usize,
        len: usize,
        inner: usize,
    },
    Sum(usize),
    Mean(usize),
    LayerNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        rows: usize,
        dim: usize,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    CrossEntropy {
        logits: usize,
        targets: Vec<usize>,
        probs: Vec<f64>,
        classes: usize,
    },
}

struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    op: Op,
    requires_grad: bool,
}

/// Recording of one forward pass.
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    weight_grad_factor: Cell<f64>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl fmt::Debug for Tape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tape({} nodes)", self.nodes.borrow().len())
    }
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.shape())
    }
}

/// Gradients produced by [`Tape::backward`].
pub struct Grads {
    grads: Vec<Option<Vec<f64>>>,
}

impl Grads {
    pub fn of(&self, v: Var<'_>) -> Option<&[f64]> {
        self.grads.get(v.id).and_then(|g| g.as_deref())
    }

    pub fn take(&mut self, v: Var<'_>) -> Option<Vec<f64>> {
        self.grads.get_mut(v.id).and_then(Option::take)
    }
}

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

impl Tape {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            weight_grad_factor: Cell::new(1.0),
        }
    }

    /// Scales the weight gradient of every `linear` op. Only for checking that
    /// the finite-difference harness catches a wrong backward pass.
    #[doc(hidden)]
    pub fn inject_weight_grad_fault(&self, factor: f64) {
        self.weight_grad_factor.set(factor);
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, shape: Vec<usize>, value: Vec<f64>, op: Op, requires_grad: bool) -> Var<'_> {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            shape,
            value,
            op,
            requires_grad,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    /// Records a tensor; it is differentiated when `t.requires_grad`.
    pub fn leaf(&self, t: &Tensor) -> Var<'_> {
        self.push(t.shape.clone(), t.data.clone(), Op::Leaf, t.requires_grad)
    }

    pub fn constant(&self, shape: impl Into<Vec<usize>>, data: Vec<f64>) -> Result<Var<'_>> {
        let t = Tensor::new(shape, data)?;
        Ok(self.push(t.shape, t.data, Op::Leaf, false))
    }

    pub fn variable(&self, shape: impl Into<Vec<usize>>, data: Vec<f64>) -> Result<Var<'_>> {
        let t = Tensor::new(shape, data)?;
        Ok(self.push(t.shape, t.data, Op::Leaf, true))
    }

    fn rg(&self, ids: &[usize]) -> bool {
        let nodes = self.nodes.borrow();
        ids.iter().any(|&i| nodes[i].requires_grad)
    }

    pub fn concat_rows<'t>(&'t self, parts: &[Var<'t>]) -> Result<Var<'t>> {
        let first = parts.first().ok_or_else(|| Error::shape("concat_rows", &[], &[]))?;
        let tail = first.shape()[1..].to_vec();
        let mut rows = 0;
        let mut value = Vec::new();
        {
            let nodes = self.nodes.borrow();
            for p in parts {
                let n = &nodes[p.id];
                if n.shape[1..] != tail[..] {
                    return Err(Error::shape("concat_rows", &first.shape(), &n.shape));
                }
                rows += n.shape[0];
                value.extend_from_slice(&n.value);
            }
        }
        let mut shape = vec![rows];
        shape.extend(tail);
        let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
        let rg = self.rg(&ids);
        Ok(self.push(shape, value, Op::ConcatRows(ids), rg))
    }

    /// Concatenates along the last axis.
    pub fn concat_cols<'t>(&'t self, parts: &[Var<'t>]) -> Result<Var<'t>> {
        let first = parts.first().ok_or_else(|| Error::shape("concat_cols", &[], &[]))?;
        let fshape = first.shape();
        let lead = &fshape[..fshape.len() - 1];
        let rows: usize = lead.iter().product();
        let mut widths = Vec::new();
        {
            let nodes = self.nodes.borrow();
            for p in parts {
                let s = &nodes[p.id].shape;
                if s.len() != fshape.len() || s[..s.len() - 1] != *lead {
                    return Err(Error::shape("concat_cols", &fshape, s));
                }
                widths.push(s[s.len() - 1]);
            }
        }
        let total: usize = widths.iter().sum();
        let mut value = vec![0.0; rows * total];
        {
            let nodes = self.nodes.borrow();
            let mut off = 0;
            for (p, &w) in parts.iter().zip(&widths) {
                let src = &nodes[p.id].value;
                for r in 0..rows {
                    value[r * total + off..r * total + off + w].copy_from_slice(&src[r * w..(r + 1) * w]);
                }
                off += w;
            }
        }
        let mut shape = lead.to_vec();
        shape.push(total);
        let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
        let rg = self.rg(&ids);
        Ok(self.push(
            shape,
            value,
            Op::ConcatCols {
                parts: ids,
                widths,
                rows,
            },
            rg,
        ))
    }

    /// Stacks equal-shaped values along a new leading axis.
    pub fn stack<'t>(&'t self, parts: &[Var<'t>]) -> Result<Var<'t>> {
        let lifted = parts
            .iter()
            .map(|p| {
                let mut s = vec![1];
                s.extend(p.shape());
                p.reshape(s)
            })
            .collect::<Result<Vec<_>>>()?;
        self.concat_rows(&lifted)
    }

    /// Reverse pass from a single-element `loss`.
    pub fn backward(&self, loss: Var<'_>) -> Result<Grads> {
        let nodes = self.nodes.borrow();
        if nodes[loss.id].value.len() != 1 {
            return Err(Error::shape("backward", &nodes[loss.id].shape, &[1]));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; nodes.len()];
        grads[loss.id] = Some(vec![1.0]);
        let wfactor = self.weight_grad_factor.get();

        for id in (0..=loss.id).rev() {
            let node = &nodes[id];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            let val = |i: usize| nodes[i].value.as_slice();
            let mut acc = |i: usize, f: &mut dyn FnMut(&mut [f64])| {
                if nodes[i].requires_grad {
                    let buf = grads[i].get_or_insert_with(|| vec![0.0; nodes[i].value.len()]);
                    f(buf);
                }
            };
            match &node.op {
                Op::Leaf => {}
                Op::Add(a, b) => {
                    acc(*a, &mut |ga| ga.iter_mut().zip(&g).for_each(|(x, y)| *x += y));
                    acc(*b, &mut |gb| gb.iter_mut().zip(&g).for_each(|(x, y)| *x += y));
                }
                Op::Sub(a, b) => {
                    acc(*a, &mut |ga| ga.iter_mut().zip(&g).for_each(|(x, y)| *x += y));
                    acc(*b, &mut |gb| gb.iter_mut().zip(&g).for_each(|(x, y)| *x -= y));
                }
                Op::Mul(a, b) => {
                    let (va, vb) = (val(*a), val(*b));
                    acc(*a, &mut |ga| {
                        for i in 0..ga.len() {
                            ga[i] += g[i] * vb[i];
                        }
                    });
                    acc(*b, &mut |gb| {
                        for i in 0..gb.len() {
                            gb[i] += g[i] * va[i];
                        }
                    });
                }
                Op::Div(a, b) => {
                    let (va, vb) = (val(*a), val(*b));
                    acc(*a, &mut |ga| {
                        for i in 0..ga.len() {
                            ga[i] += g[i] / vb[i];
                        }
                    });
                    acc(*b, &mut |gb| {
                        for i in 0..gb.len() {
                            gb[i] -= g[i] * va[i] / (vb[i] * vb[i]);
                        }
                    });
                }
                Op::Min(a, b) | Op::Max(a, b) => {
                    let is_min = matches!(node.op, Op::Min(..));
                    let (va, vb) = (val(*a), val(*b));
                    let pick_a = |i: usize| if is_min { va[i] <= vb[i] } else { va[i] >= vb[i] };
                    acc(*a, &mut |ga| {
                        for i in 0..ga.len() {
                            if pick_a(i) {
                                ga[i] += g[i];
                            }
                        }
                    });
                    acc(*b, &mut |gb| {
                        for i in 0..gb.len() {
                            if !pick_a(i) {
                                gb[i] += g[i];
                            }
                        }
                    });
                }
                Op::Scale(a, c) => acc(*a, &mut |ga| ga.iter_mut().zip(&g).for_each(|(x, y)| *x += c * y)),
                Op::AddScalar(a) => acc(*a, &mut |ga| ga.iter_mut().zip(&g).for_each(|(x, y)| *x += y)),
                Op::Relu(a) => {
                    let va = val(*a);
                    acc(*a, &mut |ga| {
                        for i in 0..ga.len() {
                            if va[i] > 0.0 {
                                ga[i] += g[i];
                            }
                        }
                    });
                }
                Op::Sigmoid(a) => {
                    let y = &node.value;
                    acc(*a, &mut |ga| {
                        for i in 0..ga.len() {
                            ga[i] += g[i] * y[i] * (1.0 - y[i]);
                        }
                    });
                }
                Op::Softplus(a) => {
                    let va = val(*a);
                    acc(*a, &mut |ga| {
                        for i in 0..ga.len() {
                            ga[i] += g[i] * sigmoid(va[i]);
                        }
                    });
                }
                Op::Abs(a) => {
                    let va = val(*a);
                    acc(*a, &mut |ga| {
                        for i in 0..ga.len() {
                            if va[i] > 0.0 {
                                ga[i] += g[i];
                            } else if va[i] < 0.0 {
                                ga[i] -= g[i];
                            }
                        }
                    });
                }
                &Op::Matmul { a, b, batch, m, k, n } => {
                    let (va, vb) = (val(a), val(b));
                    acc(a, &mut |ga| {
                        for t in 0..batch {
                            mm_bt(
                                &g[t * m * n..(t + 1) * m * n],
                                &vb[t * k * n..(t + 1) * k * n],
                                &mut ga[t * m * k..(t + 1) * m * k],
                                m,
                                n,
                                k,
                            );
                        }
                    });
                    acc(b, &mut |gb| {
                        for t in 0..batch {
                            mm_at(
                                &va[t * m * k..(t + 1) * m * k],
                                &g[t * m * n..(t + 1) * m * n],
                                &mut gb[t * k * n..(t + 1) * k * n],
                                m,
                                k,
                                n,
                            );
                        }
                    });
                }
                &Op::Transpose { a, batch, r, c } => acc(a, &mut |ga| {
                    for t in 0..batch {
                        let base = t * r * c;
                        for i in 0..r {
                            for j in 0..c {
                                ga[base + i * c + j] += g[base + j * r + i];
                            }
                        }
                    }
                }),
                Op::Reshape(a) => acc(*a, &mut |ga| ga.iter_mut().zip(&g).for_each(|(x, y)| *x += y)),
                Op::ConcatRows(parts) => {
                    let mut off = 0;
                    for &p in parts {
                        let len = nodes[p].value.len();
                        acc(p, &mut |gp| {
                            gp.iter_mut().zip(&g[off..off + len]).for_each(|(x, y)| *x += y)
                        });
                        off += len;
                    }
                }
                Op::ConcatCols { parts, widths, rows } => {
                    let total: usize = widths.iter().sum();
                    let mut off = 0;
                    for (&p, &w) in parts.iter().zip(widths) {
                        acc(p, &mut |gp| {
                            for r in 0..*rows {
                                for j in 0..w {
                                    gp[r * w + j] += g[r * total + off + j];
                                }
                            }
                        });
                        off += w;
                    }
                }
                &Op::SliceRows { a, start, end, width } => acc(a, &mut |ga| {
                    ga[start * width..end * width]
                        .iter_mut()
                        .zip(&g)
                        .for_each(|(x, y)| *x += y)
                }),
                &Op::SliceCols {
                    a,
                    rows,
                    width,
                    start,
                    end,
                } => acc(a, &mut |ga| {
                    let w = end - start;
                    for r in 0..rows {
                        for j in 0..w {
                            ga[r * width + start + j] += g[r * w + j];
                        }
                    }
                }),
                Op::GatherRows { a, index, width } => acc(*a, &mut |ga| {
                    for (i, &src) in index.iter().enumerate() {
                        for j in 0..*width {
                            ga[src * width + j] += g[i * width + j];
                        }
                    }
                }),
                &Op::Linear {
                    x,
                    w,
                    b,
                    rows,
                    inp,
                    out,
                } => {
                    let (vx, vw) = (val(x), val(w));
                    acc(x, &mut |gx| mm_bt(&g, vw, gx, rows, out, inp));
                    acc(w, &mut |gw| {
                        if wfactor == 1.0 {
                            mm_at(vx, &g, gw, rows, inp, out);
                        } else {
                            let mut tmp = vec![0.0; inp * out];
                            mm_at(vx, &g, &mut tmp, rows, inp, out);
                            gw.iter_mut().zip(&tmp).for_each(|(x, y)| *x += wfactor * y);
                        }
                    });
                    if let Some(b) = b {
                        acc(b, &mut |gb| {
                            for r in 0..rows {
                                for j in 0..out {
                                    gb[j] += g[r * out + j];
                                }
                            }
                        });
                    }
                }
                &Op::Softmax { a, outer, len, inner } => {
                    let y = &node.value;
                    acc(a, &mut |ga| {
                        for o in 0..outer {
                            for i in 0..inner {
                                let at = |l: usize| (o * len + l) * inner + i;
                                let s: f64 = (0..len).map(|l| g[at(l)] * y[at(l)]).sum();
                                for l in 0..len {
                                    ga[at(l)] += y[at(l)] * (g[at(l)] - s);
                                }
                            }
                        }
                    });
                }
                &Op::MeanPool { a, outer, len, inner } => acc(a, &mut |ga| {
                    let scale = 1.0 / len as f64;
                    for o in 0..outer {
                        for l in 0..len {
                            for i in 0..inner {
                                ga[(o * len + l) * inner + i] += g[o * inner + i] * scale;
                            }
                        }
                    }
                }),
                Op::Sum(a) => acc(*a, &mut |ga| ga.iter_mut().for_each(|x| *x += g[0])),
                Op::Mean(a) => acc(*a, &mut |ga| {
                    let s = g[0] / ga.len() as f64;
                    ga.iter_mut().for_each(|x| *x += s)
                }),
                Op::LayerNorm {
                    x,
                    gamma,
                    beta,
                    rows,
                    dim,
                    xhat,
                    inv_std,
                } => {
                    let vg = val(*gamma);
                    acc(*gamma, &mut |gg| {
                        for r in 0..*rows {
                            for j in 0..*dim {
                                gg[j] += g[r * dim + j] * xhat[r * dim + j];
                            }
                        }
                    });
                    acc(*beta, &mut |gb| {
                        for r in 0..*rows {
                            for j in 0..*dim {
                                gb[j] += g[r * dim + j];
                            }
                        }
                    });
                    acc(*x, &mut |gx| {
                        let d = *dim as f64;
                        for (r, &istd) in inv_std.iter().enumerate().take(*rows) {
                            let row = r * dim..(r + 1) * dim;
                            let dxhat: Vec<f64> = (0..*dim).map(|j| g[row.start + j] * vg[j]).collect();
                            let s1: f64 = dxhat.iter().sum();
                            let s2: f64 = dxhat.iter().zip(&xhat[row.clone()]).map(|(a, b)| a * b).sum();
                            for j in 0..*dim {
                                gx[row.start + j] += istd / d * (d * dxhat[j] - s1 - xhat[row.start + j] * s2);
                            }
                        }
                    });
                }
                Op::CrossEntropy {
                    logits,
                    targets,
                    probs,
                    classes,
                } => acc(*logits, &mut |gl| {
                    let scale = g[0] / targets.len() as f64;
                    for (r, &t) in targets.iter().enumerate() {
                        for c in 0..*classes {
                            let onehot = if c == t { 1.0 } else { 0.0 };
                            gl[r * classes + c] += scale * (probs[r * classes + c] - onehot);
                        }
                    }
                }),
            }
        }
        Ok(Grads { grads })
    }
}

impl<'t> Var<'t> {
    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].shape.clone()
    }

    pub fn value(&self) -> Vec<f64> {
        self.tape.nodes.borrow()[self.id].value.clone()
    }

    pub fn to_tensor(&self) -> Tensor {
        let nodes = self.tape.nodes.borrow();
        Tensor {
            shape: nodes[self.id].shape.clone(),
            data: nodes[self.id].value.clone(),
            requires_grad: false,
            grad: None,
        }
    }

    /// Value of a single-element variable.
    pub fn item(&self) -> f64 {
        self.tape.nodes.borrow()[self.id].value[0]
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.nodes.borrow()[self.id].requires_grad
    }

    fn with_value<R>(&self, f: impl FnOnce(&[usize], &[f64]) -> R) -> R {
        let nodes = self.tape.nodes.borrow();
        f(&nodes[self.id].shape, &nodes[self.id].value)
    }

    fn unary(&self, op: Op, f: impl Fn(f64) -> f64) -> Var<'t> {
        let (shape, value) = self.with_value(|s, v| (s.to_vec(), v.iter().map(|&x| f(x)).collect()));
        let rg = self.requires_grad();
        self.tape.push(shape, value, op, rg)
    }

    fn binary(&self, other: Var<'t>, name: &'static str, op: Op, f: impl Fn(f64, f64) -> f64) -> Result<Var<'t>> {
        let nodes = self.tape.nodes.borrow();
        let (a, b) = (&nodes[self.id], &nodes[other.id]);
        if a.shape != b.shape {
            return Err(Error::shape(name, &a.shape, &b.shape));
        }
        let value = a.value.iter().zip(&b.value).map(|(&x, &y)| f(x, y)).collect();
        let shape = a.shape.clone();
        let rg = a.requires_grad || b.requires_grad;
        drop(nodes);
        Ok(self.tape.push(shape, value, op, rg))
    }

    pub fn add(&self, o: Var<'t>) -> Result<Var<'t>> {
        self.binary(o, "add", Op::Add(self.id, o.id), |a, b| a + b)
    }
    pub fn sub(&self, o: Var<'t>) -> Result<Var<'t>> {
        self.binary(o, "sub", Op::Sub(self.id, o.id), |a, b| a - b)
    }
    pub fn mul(&self, o: Var<'t>) -> Result<Var<'t>> {
        self.binary(o, "mul", Op::Mul(self.id, o.id), |a, b| a * b)
    }
    pub fn div(&self, o: Var<'t>) -> Result<Var<'t>> {
        self.binary(o, "div", Op::Div(self.id, o.id), |a, b| a / b)
    }
    pub fn minimum(&self, o: Var<'t>) -> Result<Var<'t>> {
        self.binary(o, "minimum", Op::Min(self.id, o.id), f64::min)
    }
    pub fn maximum(&self, o: Var<'t>) -> Result<Var<'t>> {
        self.binary(o, "maximum", Op::Max(self.id, o.id), f64::max)
    }

    pub fn scale(&self, c: f64) -> Var<'t> {
        self.unary(Op::Scale(self.id, c), |x| c * x)
    }
    pub fn add_scalar(&self, c: f64) -> Var<'t> {
        self.unary(Op::AddScalar(self.id), |x| x + c)
    }
    pub fn relu(&self) -> Var<'t> {
        self.unary(Op::Relu(self.id), |x| x.max(0.0))
    }
    pub fn sigmoid(&self) -> Var<'t> {
        self.unary(Op::Sigmoid(self.id), sigmoid)
    }
    pub fn softplus(&self) -> Var<'t> {
        self.unary(Op::Softplus(self.id), softplus)
    }
    pub fn abs(&self) -> Var<'t> {
        self.unary(Op::Abs(self.id), f64::abs)
    }

    pub fn sum(&self) -> Var<'t> {
        let s = self.with_value(|_, v| v.iter().sum());
        self.tape.push(vec![1], vec![s], Op::Sum(self.id), self.requires_grad())
    }

    pub fn mean(&self) -> Var<'t> {
        let s = self.with_value(|_, v| v.iter().sum::<f64>() / v.len() as f64);
        self.tape
            .push(vec![1], vec![s], Op::Mean(self.id), self.requires_grad())
    }

    /// `[m,k]·[k,n]`, or batched `[B,m,k]·[B,k,n]`.
    pub fn matmul(&self, o: Var<'t>) -> Result<Var<'t>> {
        let (sa, sb) = (self.shape(), o.shape());
        let (batch, m, k, n) = match (sa.as_slice(), sb.as_slice()) {
            ([m, k], [k2, n]) if k == k2 => (1, *m, *k, *n),
            ([b, m, k], [b2, k2, n]) if b == b2 && k == k2 => (*b, *m, *k, *n),
            _ => return Err(Error::shape("matmul", &sa, &sb)),
        };
        let mut value = vec![0.0; batch * m * n];
        {
            let nodes = self.tape.nodes.borrow();
            let (va, vb) = (&nodes[self.id].value, &nodes[o.id].value);
            for t in 0..batch {
                mm(
                    &va[t * m * k..(t + 1) * m * k],
                    &vb[t * k * n..(t + 1) * k * n],
                    &mut value[t * m * n..(t + 1) * m * n],
                    m,
                    k,
                    n,
                );
            }
        }
        let shape = if sa.len() == 2 { vec![m, n] } else { vec![batch, m, n] };
        let rg = self.tape.rg(&[self.id, o.id]);
        Ok(self.tape.push(
            shape,
            value,
            Op::Matmul {
                a: self.id,
                b: o.id,
                batch,
                m,
                k,
                n,
            },
            rg,
        ))
    }

    /// Swaps the last two axes.
    pub fn transpose(&self) -> Result<Var<'t>> {
        let s = self.shape();
        if s.len() < 2 {
            return Err(Error::shape("transpose", &s, &[]));
        }
        let (r, c) = (s[s.len() - 2], s[s.len() - 1]);
        let batch = s[..s.len() - 2].iter().product();
        let value = self.with_value(|_, v| {
            let mut out = vec![0.0; v.len()];
            for t in 0..batch {
                let base = t * r * c;
                for i in 0..r {
                    for j in 0..c {
                        out[base + j * r + i] = v[base + i * c + j];
                    }
                }
            }
            out
        });
        let mut shape = s.clone();
        let nd = shape.len();
        shape.swap(nd - 2, nd - 1);
        Ok(self.tape.push(
            shape,
            value,
            Op::Transpose {
                a: self.id,
                batch,
                r,
                c,
            },
            self.requires_grad(),
        ))
    }

    pub fn reshape(&self, shape: impl Into<Vec<usize>>) -> Result<Var<'t>> {
        let shape = shape.into();
        let (old, value) = self.with_value(|s, v| (s.to_vec(), v.to_vec()));
        if shape.contains(&0) || shape.iter().product::<usize>() != value.len() {
            return Err(Error::shape("reshape", &old, &shape));
        }
        Ok(self.tape.push(shape, value, Op::Reshape(self.id), self.requires_grad()))
    }

    /// Rows `[start, end)` along the first axis.
    pub fn slice_rows(&self, start: usize, end: usize) -> Result<Var<'t>> {
        let s = self.shape();
        if start >= end || end > s[0] {
            return Err(Error::shape("slice_rows", &s, &[start, end]));
        }
        let width: usize = s[1..].iter().product();
        let value = self.with_value(|_, v| v[start * width..end * width].to_vec());
        let mut shape = s.clone();
        shape[0] = end - start;
        Ok(self.tape.push(
            shape,
            value,
            Op::SliceRows {
                a: self.id,
                start,
                end,
                width,
            },
            self.requires_grad(),
        ))
    }

    /// Columns `[start, end)` of the last axis.
    pub fn slice_cols(&self, start: usize, end: usize) -> Result<Var<'t>> {
        let s = self.shape();
        let width = s[s.len() - 1];
        if start >= end || end > width {
            return Err(Error::shape("slice_cols", &s, &[start, end]));
        }
        let rows: usize = s[..s.len() - 1].iter().product();
        let w = end - start;
        let value = self.with_value(|_, v| {
            let mut out = Vec::with_capacity(rows * w);
            for r in 0..rows {
                out.extend_from_slice(&v[r * width + start..r * width + end]);
            }
            out
        });
        let mut shape = s.clone();
        let nd = shape.len();
        shape[nd - 1] = w;
        Ok(self.tape.push(
            shape,
            value,
            Op::SliceCols {
                a: self.id,
                rows,
                width,
                start,
                end,
            },
            self.requires_grad(),
        ))
    }

    /// Selects rows of the first axis by index (repeats allowed).
    pub fn gather_rows(&self, index: &[usize]) -> Result<Var<'t>> {
        let s = self.shape();
        if index.is_empty() || index.iter().any(|&i| i >= s[0]) {
            return Err(Error::shape("gather_rows", &s, index));
        }
        let width: usize = s[1..].iter().product();
        let value = self.with_value(|_, v| {
            index
                .iter()
                .flat_map(|&i| v[i * width..(i + 1) * width].iter().copied())
                .collect()
        });
        let mut shape = s.clone();
        shape[0] = index.len();
        Ok(self.tape.push(
            shape,
            value,
            Op::GatherRows {
                a: self.id,
                index: index.to_vec(),
                width,
            },
            self.requires_grad(),
        ))
    }

    /// `x·W + b` over the last axis; `x: [..., in]`, `W: [in, out]`, `b: [out]`.
    pub fn linear(&self, w: Var<'t>, b: Option<Var<'t>>) -> Result<Var<'t>> {
        let (sx, sw) = (self.shape(), w.shape());
        let inp = sx[sx.len() - 1];
        if sw.len() != 2 || sw[0] != inp {
            return Err(Error::shape("linear", &sx, &sw));
        }
        let out = sw[1];
        if let Some(b) = b {
            if b.shape() != [out] {
                return Err(Error::shape("linear bias", &sw, &b.shape()));
            }
        }
        let rows: usize = sx[..sx.len() - 1].iter().product();
        let mut value = vec![0.0; rows * out];
        {
            let nodes = self.tape.nodes.borrow();
            if let Some(b) = b {
                let vb = &nodes[b.id].value;
                for r in 0..rows {
                    value[r * out..(r + 1) * out].copy_from_slice(vb);
                }
            }
            mm(&nodes[self.id].value, &nodes[w.id].value, &mut value, rows, inp, out);
        }
        let mut shape = sx.clone();
        let nd = shape.len();
        shape[nd - 1] = out;
        let mut ids = vec![self.id, w.id];
        ids.extend(b.map(|b| b.id));
        let rg = self.tape.rg(&ids);
        Ok(self.tape.push(
            shape,
            value,
            Op::Linear {
                x: self.id,
                w: w.id,
                b: b.map(|b| b.id),
                rows,
                inp,
                out,
            },
            rg,
        ))
    }

    pub fn softmax(&self, axis: usize) -> Result<Var<'t>> {
        let s = self.shape();
        if axis >= s.len() {
            return Err(Error::shape("softmax", &s, &[axis]));
        }
        let (outer, len, inner) = split_axis(&s, axis);
        let value = self.with_value(|_, v| {
            let mut out = vec![0.0; v.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let at = |l: usize| (o * len + l) * inner + i;
                    let max = (0..len).map(|l| v[at(l)]).fold(f64::NEG_INFINITY, f64::max);
                    let mut z = 0.0;
                    for l in 0..len {
                        let e = (v[at(l)] - max).exp();
                        out[at(l)] = e;
                        z += e;
                    }
                    for l in 0..len {
                        out[at(l)] /= z;
                    }
                }
            }
            out
        });
        Ok(self.tape.push(
            s,
            value,
            Op::Softmax {
                a: self.id,
                outer,
                len,
                inner,
            },
            self.requires_grad(),
        ))
    }

    /// Mean over `axis`, which is removed from the shape.
    pub fn mean_pool(&self, axis: usize) -> Result<Var<'t>> {
        let s = self.shape();
        if axis >= s.len() {
            return Err(Error::shape("mean_pool", &s, &[axis]));
        }
        let (outer, len, inner) = split_axis(&s, axis);
        let value = self.with_value(|_, v| {
            let mut out = vec![0.0; outer * inner];
            for o in 0..outer {
                for l in 0..len {
                    for i in 0..inner {
                        out[o * inner + i] += v[(o * len + l) * inner + i];
                    }
                }
            }
            out.iter_mut().for_each(|x| *x /= len as f64);
            out
        });
        let mut shape: Vec<usize> = s
            .iter()
            .enumerate()
            .filter(|&(i, _)| i != axis)
            .map(|(_, &d)| d)
            .collect();
        if shape.is_empty() {
            shape.push(1);
        }
        Ok(self.tape.push(
            shape,
            value,
            Op::MeanPool {
                a: self.id,
                outer,
                len,
                inner,
            },
            self.requires_grad(),
        ))
    }

    /// Normalizes the last axis, then applies `gamma`/`beta` of that width.
    pub fn layer_norm(&self, gamma: Var<'t>, beta: Var<'t>) -> Result<Var<'t>> {
        let s = self.shape();
        let dim = s[s.len() - 1];
        if gamma.shape() != [dim] || beta.shape() != [dim] {
            return Err(Error::shape("layer_norm", &s, &gamma.shape()));
        }
        let rows = self.with_value(|_, v| v.len()) / dim;
        let (value, xhat, inv_std) = {
            let nodes = self.tape.nodes.borrow();
            let (v, vg, vb) = (&nodes[self.id].value, &nodes[gamma.id].value, &nodes[beta.id].value);
            let mut out = vec![0.0; v.len()];
            let mut xhat = vec![0.0; v.len()];
            let mut inv_std = vec![0.0; rows];
            for r in 0..rows {
                let row = &v[r * dim..(r + 1) * dim];
                let mean = row.iter().sum::<f64>() / dim as f64;
                let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / dim as f64;
                let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
                inv_std[r] = is;
                for j in 0..dim {
                    let h = (row[j] - mean) * is;
                    xhat[r * dim + j] = h;
                    out[r * dim + j] = h * vg[j] + vb[j];
                }
            }
            (out, xhat, inv_std)
        };
        let rg = self.tape.rg(&[self.id, gamma.id, beta.id]);
        Ok(self.tape.push(
            s,
            value,
            Op::LayerNorm {
                x: self.id,
                gamma: gamma.id,
                beta: beta.id,
                rows,
                dim,
                xhat,
                inv_std,
            },
            rg,
        ))
    }

    /// Mean negative log-likelihood of `targets` under `softmax(self)` over
    /// the last axis. `self` is `[C]` or `[rows, C]`.
    pub fn cross_entropy(&self, targets: &[usize]) -> Result<Var<'t>> {
        let s = self.shape();
        let classes = s[s.len() - 1];
        let rows: usize = s[..s.len() - 1].iter().product();
        if targets.len() != rows || targets.iter().any(|&t| t >= classes) {
            return Err(Error::shape("cross_entropy", &s, &[targets.len()]));
        }
        let (loss, probs) = self.with_value(|_, v| {
            let mut probs = vec![0.0; v.len()];
            let mut loss = 0.0;
            for (r, &t) in targets.iter().enumerate() {
                let row = &v[r * classes..(r + 1) * classes];
                let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = row.iter().map(|x| (x - max).exp()).sum();
                let log_z = max + z.ln();
                loss += log_z - row[t];
                for c in 0..classes {
                    probs[r * classes + c] = (row[c] - log_z).exp();
                }
            }
            (loss / rows as f64, probs)
        });
        Ok(self.tape.push(
            vec![1],
            vec![loss],
            Op::CrossEntropy {
                logits: self.id,
                targets: targets.to_vec(),
                probs,
                classes,
            },
            self.requires_grad(),
        ))
    }

    /// Sum of absolute differences.
    pub fn l1_loss(&self, o: Var<'t>) -> Result<Var<'t>> {
        Ok(self.sub(o)?.abs().sum())
    }

    /// Index of the maximum along `axis` (lowest index on ties). Not
    /// differentiable; the result is detached from the tape.
    pub fn argmax(&self, axis: usize) -> Result<Vec<usize>> {
        let s = self.shape();
        if axis >= s.len() {
            return Err(Error::shape("argmax", &s, &[axis]));
        }
        let (outer, len, inner) = split_axis(&s, axis);
        Ok(self.with_value(|_, v| {
            let mut out = Vec::with_capacity(outer * inner);
            for o in 0..outer {
                for i in 0..inner {
                    let mut best = 0;
                    for l in 1..len {
                        if v[(o * len + l) * inner + i] > v[(o * len + best) * inner + i] {
                            best = l;
                        }
                    }
                    out.push(best);
                }
            }
            out
        }))
    }
}

/// `softmax(q·kᵀ / sqrt(d))·v` over the last two axes.
pub fn scaled_dot_attention<'t>(q: Var<'t>, k: Var<'t>, v: Var<'t>) -> Result<Var<'t>> {
    let d = *q.shape().last().unwrap_or(&1) as f64;
    let scores = q.matmul(k.transpose()?)?.scale(1.0 / d.sqrt());
    let rank = scores.shape().len();
    scores.softmax(rank - 1)?.matmul(v)
}
