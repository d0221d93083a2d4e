//! Tape-based reverse-mode automatic differentiation over dense f64 tensors.
//!
//! A [`Tape`] records every forward operation; [`Tape::backward`] replays the
//! record in reverse and accumulates gradients via the chain rule.  Tapes are
//! rebuilt from scratch every training step and are strictly single-threaded;
//! parallel evaluation uses one tape per thread over copied parameters.
//!
//! Forward results are checked for finiteness: any overflow (or domain error
//! such as `log(0)`) surfaces as [`Error::NonFinite`] instead of a NaN that
//! would silently poison the gradients.

use std::cell::RefCell;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// How the right operand of a binary elementwise op maps onto the left.
#[derive(Debug, Clone, Copy, PartialEq)]
enum Broadcast {
    /// Identical shapes.
    None,
    /// Right operand is a single value applied everywhere.
    ScalarRhs,
    /// Left is `[rows, cols]`, right is `[cols]`, applied to every row.
    RowRhs,
}

#[derive(Debug, Clone)]
enum Recorded {
    Leaf,
    Matmul { a: usize, b: usize },
    Add { a: usize, b: usize, bcast: Broadcast },
    Mul { a: usize, b: usize, bcast: Broadcast },
    Div { a: usize, b: usize, bcast: Broadcast },
    Min { a: usize, b: usize, bcast: Broadcast },
    Neg { a: usize },
    Exp { a: usize },
    Log { a: usize },
    Square { a: usize },
    Sqrt { a: usize },
    Elu { a: usize },
    Softplus { a: usize },
    Sigmoid { a: usize },
    Sum { a: usize, axis: Option<usize> },
    Mean { a: usize, axis: Option<usize> },
    LogSumExp { a: usize, axis: usize },
    ColumnL2Norm { a: usize },
    Concat { axis: usize, inputs: Vec<usize> },
    Reshape { a: usize },
}

struct Node {
    values: Tensor,
    op: Recorded,
}

/// Operation selector for the generic [`Tape::apply`] entry point.
#[derive(Debug, Clone, PartialEq)]
pub enum OpKind {
    Matmul,
    Add,
    Mul,
    Div,
    Neg,
    Exp,
    Log,
    Square,
    Sqrt,
    Sum(Option<usize>),
    Mean(Option<usize>),
    LogSumExp(usize),
    Elu,
    Softplus,
    Sigmoid,
    ColumnL2Norm,
    MinWithScalarBroadcast,
    Concat(usize),
    Reshape(Vec<usize>),
}

/// Handle to a value recorded on a tape.  Cheap to copy; all arithmetic
/// methods return new handles on the same tape.
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var({})", self.id)
    }
}

/// Recording tape.  Create one per forward/backward pass.
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

/// Numerically stable `ln(1 + e^x)`.
pub fn softplus_scalar(x: f64) -> f64 {
    if x > 0.0 { x + (-x).exp().ln_1p() } else { x.exp().ln_1p() }
}

/// Inverse of [`softplus_scalar`] for `y > 0`: `ln(e^y − 1)`.
pub fn softplus_inv_scalar(y: f64) -> f64 {
    assert!(y > 0.0, "softplus inverse needs a positive argument, got {y}");
    if y > 30.0 {
        // e^{-y} underflows the ln_1p term
        y + (-(-y).exp()).ln_1p()
    } else {
        y.exp_m1().ln()
    }
}

pub fn sigmoid_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn decide_broadcast(op: &'static str, lhs: &[usize], rhs: &[usize], rlen: usize) -> Result<Broadcast> {
    if lhs == rhs {
        Ok(Broadcast::None)
    } else if rlen == 1 {
        Ok(Broadcast::ScalarRhs)
    } else if lhs.len() == 2 && rhs.len() == 1 && rhs[0] == lhs[1] {
        Ok(Broadcast::RowRhs)
    } else {
        Err(Error::ShapeMismatch { op, lhs: lhs.to_vec(), rhs: rhs.to_vec() })
    }
}

/// `(outer, axis_len, inner)` decomposition used by axis reductions:
/// flat index = `(o * axis_len + j) * inner + i`.
fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn drop_axis(shape: &[usize], axis: usize) -> Vec<usize> {
    let mut s = shape.to_vec();
    s.remove(axis);
    s
}

// ── raw matmul kernels ───────────────────────────────────────────────

fn matmul_nn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for j in 0..n {
                orow[j] += av * brow[j];
            }
        }
    }
    out
}

/// `g [m,n] · bᵀ` where `b` is `[k,n]`, giving `[m,k]`.
fn matmul_nt(g: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * k];
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        let orow = &mut out[i * k..(i + 1) * k];
        for p in 0..k {
            let brow = &b[p * n..(p + 1) * n];
            let mut s = 0.0;
            for j in 0..n {
                s += grow[j] * brow[j];
            }
            orow[p] = s;
        }
    }
    out
}

/// `aᵀ · g` where `a` is `[m,k]` and `g` is `[m,n]`, giving `[k,n]`.
fn matmul_tn(a: &[f64], g: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; k * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let grow = &g[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let orow = &mut out[p * n..(p + 1) * n];
            for j in 0..n {
                orow[j] += av * grow[j];
            }
        }
    }
    out
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: RefCell::new(Vec::new()) }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.borrow().is_empty()
    }

    /// Record an input value.  Leaves are not finiteness-checked; they carry
    /// caller-supplied data (parameters, observations, noise draws).
    pub fn leaf(&self, t: &Tensor) -> Var<'_> {
        self.leaf_owned(t.clone())
    }

    pub fn leaf_owned(&self, t: Tensor) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { values: t, op: Recorded::Leaf });
        Var { tape: self, id: nodes.len() - 1 }
    }

    pub fn scalar(&self, v: f64) -> Var<'_> {
        self.leaf_owned(Tensor::scalar(v))
    }

    pub fn value(&self, v: Var<'_>) -> Tensor {
        self.nodes.borrow()[v.id].values.clone()
    }

    fn shape_of(&self, id: usize) -> Vec<usize> {
        self.nodes.borrow()[id].values.shape().to_vec()
    }

    fn push(&self, op_name: &'static str, values: Tensor, op: Recorded) -> Result<Var<'_>> {
        if !values.is_all_finite() {
            return Err(Error::NonFinite { op: op_name });
        }
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { values, op });
        Ok(Var { tape: self, id: nodes.len() - 1 })
    }

    /// Generic dispatcher.  `inputs` must all live on this tape.
    pub fn apply<'t>(&'t self, kind: OpKind, inputs: &[Var<'t>]) -> Result<Var<'t>> {
        for v in inputs {
            if !std::ptr::eq(v.tape, self) {
                return Err(Error::TapeMismatch);
            }
        }
        let kind_desc = format!("{kind:?}");
        let got = inputs.len();
        let arity_err = move |want: usize| Error::InvalidConfig {
            msg: format!("{kind_desc} expects {want} input(s), got {got}"),
        };
        match kind {
            OpKind::Matmul => {
                if inputs.len() != 2 {
                    return Err(arity_err(2));
                }
                self.matmul(inputs[0], inputs[1])
            }
            OpKind::Add | OpKind::Mul | OpKind::Div | OpKind::MinWithScalarBroadcast => {
                if inputs.len() != 2 {
                    return Err(arity_err(2));
                }
                self.binary(kind, inputs[0], inputs[1])
            }
            OpKind::Concat(axis) => self.concat(inputs, axis),
            OpKind::Sum(axis) => {
                if inputs.len() != 1 {
                    return Err(arity_err(1));
                }
                self.reduce(inputs[0], axis, false)
            }
            OpKind::Mean(axis) => {
                if inputs.len() != 1 {
                    return Err(arity_err(1));
                }
                self.reduce(inputs[0], axis, true)
            }
            OpKind::LogSumExp(axis) => {
                if inputs.len() != 1 {
                    return Err(arity_err(1));
                }
                self.logsumexp(inputs[0], axis)
            }
            OpKind::ColumnL2Norm => {
                if inputs.len() != 1 {
                    return Err(arity_err(1));
                }
                self.column_l2_norm(inputs[0])
            }
            OpKind::Reshape(shape) => {
                if inputs.len() != 1 {
                    return Err(arity_err(1));
                }
                self.reshape(inputs[0], shape)
            }
            _ => {
                if inputs.len() != 1 {
                    return Err(arity_err(1));
                }
                self.unary(kind, inputs[0])
            }
        }
    }

    fn matmul<'t>(&'t self, a: Var<'t>, b: Var<'t>) -> Result<Var<'t>> {
        let (values, rec) = {
            let nodes = self.nodes.borrow();
            let (sa, sb) = (nodes[a.id].values.shape(), nodes[b.id].values.shape());
            if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
                return Err(Error::ShapeMismatch {
                    op: "matmul",
                    lhs: sa.to_vec(),
                    rhs: sb.to_vec(),
                });
            }
            let (m, k, n) = (sa[0], sa[1], sb[1]);
            let out = matmul_nn(nodes[a.id].values.data(), nodes[b.id].values.data(), m, k, n);
            (Tensor::new(vec![m, n], out), Recorded::Matmul { a: a.id, b: b.id })
        };
        self.push("matmul", values, rec)
    }

    fn binary<'t>(&'t self, kind: OpKind, a: Var<'t>, b: Var<'t>) -> Result<Var<'t>> {
        let name: &'static str = match kind {
            OpKind::Add => "add",
            OpKind::Mul => "mul",
            OpKind::Div => "div",
            OpKind::MinWithScalarBroadcast => "min_with_scalar_broadcast",
            _ => unreachable!(),
        };
        let (values, rec) = {
            let nodes = self.nodes.borrow();
            let (ta, tb) = (&nodes[a.id].values, &nodes[b.id].values);
            let bcast = decide_broadcast(name, ta.shape(), tb.shape(), tb.len())?;
            let (ad, bd) = (ta.data(), tb.data());
            let cols = if ta.rank() == 2 { ta.shape()[1] } else { 1 };
            let fetch = |i: usize| match bcast {
                Broadcast::None => bd[i],
                Broadcast::ScalarRhs => bd[0],
                Broadcast::RowRhs => bd[i % cols],
            };
            let out: Vec<f64> = match kind {
                OpKind::Add => ad.iter().enumerate().map(|(i, &x)| x + fetch(i)).collect(),
                OpKind::Mul => ad.iter().enumerate().map(|(i, &x)| x * fetch(i)).collect(),
                OpKind::Div => ad.iter().enumerate().map(|(i, &x)| x / fetch(i)).collect(),
                OpKind::MinWithScalarBroadcast => {
                    ad.iter().enumerate().map(|(i, &x)| x.min(fetch(i))).collect()
                }
                _ => unreachable!(),
            };
            let values = Tensor::new(ta.shape().to_vec(), out);
            let rec = match kind {
                OpKind::Add => Recorded::Add { a: a.id, b: b.id, bcast },
                OpKind::Mul => Recorded::Mul { a: a.id, b: b.id, bcast },
                OpKind::Div => Recorded::Div { a: a.id, b: b.id, bcast },
                OpKind::MinWithScalarBroadcast => Recorded::Min { a: a.id, b: b.id, bcast },
                _ => unreachable!(),
            };
            (values, rec)
        };
        self.push(name, values, rec)
    }

    fn unary<'t>(&'t self, kind: OpKind, a: Var<'t>) -> Result<Var<'t>> {
        let (name, values, rec): (&'static str, Tensor, Recorded) = {
            let nodes = self.nodes.borrow();
            let ta = &nodes[a.id].values;
            let map = |f: fn(f64) -> f64| -> Vec<f64> { ta.data().iter().map(|&x| f(x)).collect() };
            let (name, out, rec) = match kind {
                OpKind::Neg => ("negate", map(|x| -x), Recorded::Neg { a: a.id }),
                OpKind::Exp => ("exp", map(f64::exp), Recorded::Exp { a: a.id }),
                OpKind::Log => ("log", map(f64::ln), Recorded::Log { a: a.id }),
                OpKind::Square => ("square", map(|x| x * x), Recorded::Square { a: a.id }),
                OpKind::Sqrt => ("sqrt", map(f64::sqrt), Recorded::Sqrt { a: a.id }),
                OpKind::Elu => (
                    "elu",
                    map(|x| if x > 0.0 { x } else { x.exp() - 1.0 }),
                    Recorded::Elu { a: a.id },
                ),
                OpKind::Softplus => ("softplus", map(softplus_scalar), Recorded::Softplus { a: a.id }),
                OpKind::Sigmoid => ("sigmoid", map(sigmoid_scalar), Recorded::Sigmoid { a: a.id }),
                _ => unreachable!("unary dispatch"),
            };
            (name, Tensor::new(ta.shape().to_vec(), out), rec)
        };
        self.push(name, values, rec)
    }

    fn reduce<'t>(&'t self, a: Var<'t>, axis: Option<usize>, mean: bool) -> Result<Var<'t>> {
        let name = if mean { "mean" } else { "sum" };
        let values = {
            let nodes = self.nodes.borrow();
            let ta = &nodes[a.id].values;
            match axis {
                None => {
                    let mut s: f64 = ta.data().iter().sum();
                    if mean {
                        s /= ta.len().max(1) as f64;
                    }
                    Tensor::scalar(s)
                }
                Some(ax) => {
                    if ax >= ta.rank() {
                        return Err(Error::InvalidAxis { op: name, axis: ax, rank: ta.rank() });
                    }
                    let (outer, alen, inner) = axis_split(ta.shape(), ax);
                    let mut out = vec![0.0; outer * inner];
                    let d = ta.data();
                    for o in 0..outer {
                        for j in 0..alen {
                            let base = (o * alen + j) * inner;
                            for i in 0..inner {
                                out[o * inner + i] += d[base + i];
                            }
                        }
                    }
                    if mean {
                        let scale = 1.0 / alen as f64;
                        out.iter_mut().for_each(|v| *v *= scale);
                    }
                    Tensor::new(drop_axis(ta.shape(), ax), out)
                }
            }
        };
        let rec = if mean { Recorded::Mean { a: a.id, axis } } else { Recorded::Sum { a: a.id, axis } };
        self.push(name, values, rec)
    }

    fn logsumexp<'t>(&'t self, a: Var<'t>, axis: usize) -> Result<Var<'t>> {
        let values = {
            let nodes = self.nodes.borrow();
            let ta = &nodes[a.id].values;
            if axis >= ta.rank() {
                return Err(Error::InvalidAxis { op: "logsumexp", axis, rank: ta.rank() });
            }
            let (outer, alen, inner) = axis_split(ta.shape(), axis);
            let d = ta.data();
            let mut out = vec![0.0; outer * inner];
            for o in 0..outer {
                for i in 0..inner {
                    let mut m = f64::NEG_INFINITY;
                    for j in 0..alen {
                        m = m.max(d[(o * alen + j) * inner + i]);
                    }
                    let mut s = 0.0;
                    for j in 0..alen {
                        s += (d[(o * alen + j) * inner + i] - m).exp();
                    }
                    out[o * inner + i] = m + s.ln();
                }
            }
            Tensor::new(drop_axis(ta.shape(), axis), out)
        };
        self.push("logsumexp", values, Recorded::LogSumExp { a: a.id, axis })
    }

    fn column_l2_norm<'t>(&'t self, a: Var<'t>) -> Result<Var<'t>> {
        let values = {
            let nodes = self.nodes.borrow();
            let ta = &nodes[a.id].values;
            if ta.rank() != 2 {
                return Err(Error::ShapeMismatch {
                    op: "column_l2_norm",
                    lhs: ta.shape().to_vec(),
                    rhs: vec![],
                });
            }
            let (r, c) = (ta.shape()[0], ta.shape()[1]);
            let d = ta.data();
            let mut out = vec![0.0; c];
            for row in 0..r {
                for col in 0..c {
                    let x = d[row * c + col];
                    out[col] += x * x;
                }
            }
            for (col, v) in out.iter_mut().enumerate() {
                *v = v.sqrt();
                if *v < 1e-12 {
                    return Err(Error::DegenerateColumn { index: col, norm: *v });
                }
            }
            Tensor::new(vec![c], out)
        };
        self.push("column_l2_norm", values, Recorded::ColumnL2Norm { a: a.id })
    }

    fn concat<'t>(&'t self, inputs: &[Var<'t>], axis: usize) -> Result<Var<'t>> {
        if inputs.is_empty() {
            return Err(Error::InvalidConfig { msg: "concat of zero tensors".into() });
        }
        let values = {
            let nodes = self.nodes.borrow();
            let first = nodes[inputs[0].id].values.shape().to_vec();
            if axis >= first.len() {
                return Err(Error::InvalidAxis { op: "concat", axis, rank: first.len() });
            }
            let mut total_axis = 0usize;
            for v in inputs {
                let s = nodes[v.id].values.shape();
                if s.len() != first.len()
                    || s.iter().enumerate().any(|(i, &d)| i != axis && d != first[i])
                {
                    return Err(Error::ShapeMismatch {
                        op: "concat",
                        lhs: first.clone(),
                        rhs: s.to_vec(),
                    });
                }
                total_axis += s[axis];
            }
            let mut out_shape = first.clone();
            out_shape[axis] = total_axis;
            let (outer, _, inner) = axis_split(&out_shape, axis);
            let mut out = vec![0.0; outer * total_axis * inner];
            let mut offset = 0usize;
            for v in inputs {
                let t = &nodes[v.id].values;
                let alen = t.shape()[axis];
                let block = alen * inner;
                let d = t.data();
                for o in 0..outer {
                    let dst = (o * total_axis + offset) * inner;
                    out[dst..dst + block].copy_from_slice(&d[o * block..(o + 1) * block]);
                }
                offset += alen;
            }
            Tensor::new(out_shape, out)
        };
        self.push(
            "concat",
            values,
            Recorded::Concat { axis, inputs: inputs.iter().map(|v| v.id).collect() },
        )
    }

    fn reshape<'t>(&'t self, a: Var<'t>, shape: Vec<usize>) -> Result<Var<'t>> {
        let values = {
            let nodes = self.nodes.borrow();
            nodes[a.id].values.reshaped(shape)?
        };
        self.push("reshape", values, Recorded::Reshape { a: a.id })
    }

    /// Reverse pass from a scalar loss.  Returns every node's accumulated
    /// gradient; look entries up with [`GradientMap::grad`].
    pub fn backward(&self, loss: Var<'_>) -> Result<GradientMap> {
        if !std::ptr::eq(loss.tape, self) {
            return Err(Error::TapeMismatch);
        }
        let nodes = self.nodes.borrow();
        if nodes[loss.id].values.len() != 1 {
            return Err(Error::NotScalar { shape: nodes[loss.id].values.shape().to_vec() });
        }
        let n = nodes.len();
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; n];
        grads[loss.id] = Some(vec![1.0]);

        // rhs gradient accumulation under broadcast
        let accum_rhs = |gb: &mut [f64], g: &[f64], bcast: Broadcast, cols: usize, f: &mut dyn FnMut(usize) -> f64| {
            match bcast {
                Broadcast::None => {
                    for (i, slot) in gb.iter_mut().enumerate() {
                        *slot += f(i) * g[i];
                    }
                }
                Broadcast::ScalarRhs => {
                    for (i, &gv) in g.iter().enumerate() {
                        gb[0] += f(i) * gv;
                    }
                }
                Broadcast::RowRhs => {
                    for (i, &gv) in g.iter().enumerate() {
                        gb[i % cols] += f(i) * gv;
                    }
                }
            }
        };

        for id in (0..n).rev() {
            let g = match grads[id].take() {
                Some(g) => g,
                None => continue,
            };
            let node = &nodes[id];
            macro_rules! acc {
                ($pid:expr, $idx:expr, $val:expr) => {{
                    let pid = $pid;
                    if grads[pid].is_none() {
                        grads[pid] = Some(vec![0.0; nodes[pid].values.len()]);
                    }
                    grads[pid].as_mut().unwrap()[$idx] += $val;
                }};
            }
            match &node.op {
                Recorded::Leaf => {
                    grads[id] = Some(g); // keep for extraction
                }
                Recorded::Matmul { a, b } => {
                    let (sa, sb) = (nodes[*a].values.shape(), nodes[*b].values.shape());
                    let (m, k, nn) = (sa[0], sa[1], sb[1]);
                    let da = matmul_nt(&g, nodes[*b].values.data(), m, k, nn);
                    let db = matmul_tn(nodes[*a].values.data(), &g, m, k, nn);
                    if grads[*a].is_none() {
                        grads[*a] = Some(vec![0.0; m * k]);
                    }
                    for (slot, v) in grads[*a].as_mut().unwrap().iter_mut().zip(&da) {
                        *slot += v;
                    }
                    if grads[*b].is_none() {
                        grads[*b] = Some(vec![0.0; k * nn]);
                    }
                    for (slot, v) in grads[*b].as_mut().unwrap().iter_mut().zip(&db) {
                        *slot += v;
                    }
                }
                Recorded::Add { a, b, bcast } => {
                    let cols = nodes[*a].values.cols();
                    for (i, &gv) in g.iter().enumerate() {
                        acc!(*a, i, gv);
                    }
                    if grads[*b].is_none() {
                        grads[*b] = Some(vec![0.0; nodes[*b].values.len()]);
                    }
                    let mut gb = grads[*b].take().unwrap();
                    accum_rhs(&mut gb, &g, *bcast, cols, &mut |_| 1.0);
                    grads[*b] = Some(gb);
                }
                Recorded::Mul { a, b, bcast } => {
                    let cols = nodes[*a].values.cols();
                    let (ad, bd) = (nodes[*a].values.data(), nodes[*b].values.data());
                    let fetch_b = |i: usize| match bcast {
                        Broadcast::None => bd[i],
                        Broadcast::ScalarRhs => bd[0],
                        Broadcast::RowRhs => bd[i % cols],
                    };
                    for (i, &gv) in g.iter().enumerate() {
                        acc!(*a, i, gv * fetch_b(i));
                    }
                    if grads[*b].is_none() {
                        grads[*b] = Some(vec![0.0; nodes[*b].values.len()]);
                    }
                    let mut gb = grads[*b].take().unwrap();
                    accum_rhs(&mut gb, &g, *bcast, cols, &mut |i| ad[i]);
                    grads[*b] = Some(gb);
                }
                Recorded::Div { a, b, bcast } => {
                    let cols = nodes[*a].values.cols();
                    let (ad, bd) = (nodes[*a].values.data(), nodes[*b].values.data());
                    let fetch_b = |i: usize| match bcast {
                        Broadcast::None => bd[i],
                        Broadcast::ScalarRhs => bd[0],
                        Broadcast::RowRhs => bd[i % cols],
                    };
                    for (i, &gv) in g.iter().enumerate() {
                        acc!(*a, i, gv / fetch_b(i));
                    }
                    if grads[*b].is_none() {
                        grads[*b] = Some(vec![0.0; nodes[*b].values.len()]);
                    }
                    let mut gb = grads[*b].take().unwrap();
                    accum_rhs(&mut gb, &g, *bcast, cols, &mut |i| {
                        let bv = fetch_b(i);
                        -ad[i] / (bv * bv)
                    });
                    grads[*b] = Some(gb);
                }
                Recorded::Min { a, b, bcast } => {
                    // Ties route gradient to the second (cap) argument.
                    let cols = nodes[*a].values.cols();
                    let (ad, bd) = (nodes[*a].values.data(), nodes[*b].values.data());
                    let fetch_b = |i: usize| match bcast {
                        Broadcast::None => bd[i],
                        Broadcast::ScalarRhs => bd[0],
                        Broadcast::RowRhs => bd[i % cols],
                    };
                    for (i, &gv) in g.iter().enumerate() {
                        if ad[i] < fetch_b(i) {
                            acc!(*a, i, gv);
                        }
                    }
                    if grads[*b].is_none() {
                        grads[*b] = Some(vec![0.0; nodes[*b].values.len()]);
                    }
                    let mut gb = grads[*b].take().unwrap();
                    accum_rhs(&mut gb, &g, *bcast, cols, &mut |i| {
                        if ad[i] < fetch_b(i) { 0.0 } else { 1.0 }
                    });
                    grads[*b] = Some(gb);
                }
                Recorded::Neg { a } => {
                    for (i, &gv) in g.iter().enumerate() {
                        acc!(*a, i, -gv);
                    }
                }
                Recorded::Exp { a } => {
                    let out = node.values.data();
                    for (i, &gv) in g.iter().enumerate() {
                        acc!(*a, i, gv * out[i]);
                    }
                }
                Recorded::Log { a } => {
                    let ad = nodes[*a].values.data();
                    for (i, &gv) in g.iter().enumerate() {
                        acc!(*a, i, gv / ad[i]);
                    }
                }
                Recorded::Square { a } => {
                    let ad = nodes[*a].values.data();
                    for (i, &gv) in g.iter().enumerate() {
                        acc!(*a, i, gv * 2.0 * ad[i]);
                    }
                }
                Recorded::Sqrt { a } => {
                    let out = node.values.data();
                    for (i, &gv) in g.iter().enumerate() {
                        acc!(*a, i, gv * 0.5 / out[i]);
                    }
                }
                Recorded::Elu { a } => {
                    let ad = nodes[*a].values.data();
                    for (i, &gv) in g.iter().enumerate() {
                        let d = if ad[i] > 0.0 { 1.0 } else { ad[i].exp() };
                        acc!(*a, i, gv * d);
                    }
                }
                Recorded::Softplus { a } => {
                    let ad = nodes[*a].values.data();
                    for (i, &gv) in g.iter().enumerate() {
                        acc!(*a, i, gv * sigmoid_scalar(ad[i]));
                    }
                }
                Recorded::Sigmoid { a } => {
                    let out = node.values.data();
                    for (i, &gv) in g.iter().enumerate() {
                        acc!(*a, i, gv * out[i] * (1.0 - out[i]));
                    }
                }
                Recorded::Sum { a, axis } | Recorded::Mean { a, axis } => {
                    let mean = matches!(node.op, Recorded::Mean { .. });
                    let in_shape = nodes[*a].values.shape().to_vec();
                    match axis {
                        None => {
                            let scale = if mean { 1.0 / nodes[*a].values.len() as f64 } else { 1.0 };
                            let gv = g[0] * scale;
                            for i in 0..nodes[*a].values.len() {
                                acc!(*a, i, gv);
                            }
                        }
                        Some(ax) => {
                            let (outer, alen, inner) = axis_split(&in_shape, *ax);
                            let scale = if mean { 1.0 / alen as f64 } else { 1.0 };
                            for o in 0..outer {
                                for j in 0..alen {
                                    for i in 0..inner {
                                        acc!(*a, (o * alen + j) * inner + i, g[o * inner + i] * scale);
                                    }
                                }
                            }
                        }
                    }
                }
                Recorded::LogSumExp { a, axis } => {
                    let in_shape = nodes[*a].values.shape().to_vec();
                    let ad = nodes[*a].values.data();
                    let out = node.values.data();
                    let (outer, alen, inner) = axis_split(&in_shape, *axis);
                    for o in 0..outer {
                        for j in 0..alen {
                            for i in 0..inner {
                                let soft = (ad[(o * alen + j) * inner + i] - out[o * inner + i]).exp();
                                acc!(*a, (o * alen + j) * inner + i, g[o * inner + i] * soft);
                            }
                        }
                    }
                }
                Recorded::ColumnL2Norm { a } => {
                    let ad = nodes[*a].values.data();
                    let out = node.values.data();
                    let c = out.len();
                    let r = nodes[*a].values.len() / c;
                    for row in 0..r {
                        for col in 0..c {
                            acc!(*a, row * c + col, g[col] * ad[row * c + col] / out[col]);
                        }
                    }
                }
                Recorded::Concat { axis, inputs } => {
                    let out_shape = node.values.shape().to_vec();
                    let (outer, total_axis, inner) = axis_split(&out_shape, *axis);
                    let mut offset = 0usize;
                    for pid in inputs {
                        let alen = nodes[*pid].values.shape()[*axis];
                        let block = alen * inner;
                        for o in 0..outer {
                            let src = (o * total_axis + offset) * inner;
                            for t in 0..block {
                                acc!(*pid, o * block + t, g[src + t]);
                            }
                        }
                        offset += alen;
                    }
                }
                Recorded::Reshape { a } => {
                    for (i, &gv) in g.iter().enumerate() {
                        acc!(*a, i, gv);
                    }
                }
            }
        }

        let shapes = nodes.iter().map(|n| n.values.shape().to_vec()).collect();
        Ok(GradientMap { grads, shapes })
    }
}

/// Gradients of a scalar loss with respect to every tape node.
///
/// Every leaf registered on the tape has a well-defined entry; nodes the loss
/// does not depend on report zero.
pub struct GradientMap {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl GradientMap {
    pub fn grad(&self, v: Var<'_>) -> Tensor {
        match &self.grads[v.id] {
            Some(g) => Tensor::new(self.shapes[v.id].clone(), g.clone()),
            None => Tensor::zeros(&self.shapes[v.id]),
        }
    }
}

// Result-returning arithmetic cannot implement the std operator traits, so
// the conventional method names stay.
#[allow(clippy::should_implement_trait)]
impl<'t> Var<'t> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn value(&self) -> Tensor {
        self.tape.value(*self)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.shape_of(self.id)
    }

    pub fn item(&self) -> f64 {
        self.value().item()
    }

    pub fn matmul(self, rhs: Var<'t>) -> Result<Var<'t>> {
        self.tape.apply(OpKind::Matmul, &[self, rhs])
    }

    pub fn add(self, rhs: Var<'t>) -> Result<Var<'t>> {
        self.tape.apply(OpKind::Add, &[self, rhs])
    }

    pub fn sub(self, rhs: Var<'t>) -> Result<Var<'t>> {
        self.add(rhs.neg()?)
    }

    pub fn mul(self, rhs: Var<'t>) -> Result<Var<'t>> {
        self.tape.apply(OpKind::Mul, &[self, rhs])
    }

    pub fn div(self, rhs: Var<'t>) -> Result<Var<'t>> {
        self.tape.apply(OpKind::Div, &[self, rhs])
    }

    pub fn min_bcast(self, rhs: Var<'t>) -> Result<Var<'t>> {
        self.tape.apply(OpKind::MinWithScalarBroadcast, &[self, rhs])
    }

    pub fn neg(self) -> Result<Var<'t>> {
        self.tape.apply(OpKind::Neg, &[self])
    }

    pub fn exp(self) -> Result<Var<'t>> {
        self.tape.apply(OpKind::Exp, &[self])
    }

    pub fn log(self) -> Result<Var<'t>> {
        self.tape.apply(OpKind::Log, &[self])
    }

    pub fn square(self) -> Result<Var<'t>> {
        self.tape.apply(OpKind::Square, &[self])
    }

    pub fn sqrt(self) -> Result<Var<'t>> {
        self.tape.apply(OpKind::Sqrt, &[self])
    }

    pub fn elu(self) -> Result<Var<'t>> {
        self.tape.apply(OpKind::Elu, &[self])
    }

    pub fn softplus(self) -> Result<Var<'t>> {
        self.tape.apply(OpKind::Softplus, &[self])
    }

    pub fn sigmoid(self) -> Result<Var<'t>> {
        self.tape.apply(OpKind::Sigmoid, &[self])
    }

    pub fn sum(self, axis: Option<usize>) -> Result<Var<'t>> {
        self.tape.apply(OpKind::Sum(axis), &[self])
    }

    pub fn mean(self, axis: Option<usize>) -> Result<Var<'t>> {
        self.tape.apply(OpKind::Mean(axis), &[self])
    }

    pub fn logsumexp(self, axis: usize) -> Result<Var<'t>> {
        self.tape.apply(OpKind::LogSumExp(axis), &[self])
    }

    pub fn column_l2_norm(self) -> Result<Var<'t>> {
        self.tape.apply(OpKind::ColumnL2Norm, &[self])
    }

    pub fn reshape(self, shape: Vec<usize>) -> Result<Var<'t>> {
        self.tape.apply(OpKind::Reshape(shape), &[self])
    }

    pub fn add_scalar(self, v: f64) -> Result<Var<'t>> {
        let s = self.tape.scalar(v);
        self.add(s)
    }

    pub fn mul_scalar(self, v: f64) -> Result<Var<'t>> {
        let s = self.tape.scalar(v);
        self.mul(s)
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }
}

/// Default step for [`finite_difference_check`].
pub const DEFAULT_FD_EPS: f64 = 1e-6;

/// Central-difference gradient oracle.
///
/// Evaluates `f` once with autodiff, then re-evaluates forward twice per
/// parameter coordinate, and returns the maximum over coordinates of
/// `|central − autodiff| / max(1, |autodiff|)`.
pub fn finite_difference_check<F>(f: F, params: &[Tensor], eps: f64) -> Result<f64>
where
    F: for<'a> Fn(&'a Tape, &[Var<'a>]) -> Result<Var<'a>>,
{
    if eps <= 0.0 {
        return Err(Error::OutOfRange { op: "finite_difference_check", msg: format!("eps must be positive, got {eps}") });
    }
    let eval = |ps: &[Tensor]| -> Result<f64> {
        let tape = Tape::new();
        let vars: Vec<Var<'_>> = ps.iter().map(|p| tape.leaf(p)).collect();
        let out = f(&tape, &vars)?;
        let v = out.item();
        if !v.is_finite() {
            return Err(Error::NonFinite { op: "finite_difference_check" });
        }
        Ok(v)
    };

    // autodiff pass
    let tape = Tape::new();
    let vars: Vec<Var<'_>> = params.iter().map(|p| tape.leaf(p)).collect();
    let loss = f(&tape, &vars)?;
    if !loss.item().is_finite() {
        return Err(Error::NonFinite { op: "finite_difference_check" });
    }
    let gmap = tape.backward(loss)?;
    let ad_grads: Vec<Tensor> = vars.iter().map(|v| gmap.grad(*v)).collect();

    let mut work: Vec<Tensor> = params.to_vec();
    let mut max_rel = 0.0f64;
    for (pi, grad) in ad_grads.iter().enumerate() {
        for j in 0..grad.len() {
            let orig = work[pi].data()[j];
            work[pi].data_mut()[j] = orig + eps;
            let up = eval(&work)?;
            work[pi].data_mut()[j] = orig - eps;
            let down = eval(&work)?;
            work[pi].data_mut()[j] = orig;
            let central = (up - down) / (2.0 * eps);
            let ad = grad.data()[j];
            let rel = (central - ad).abs() / ad.abs().max(1.0);
            max_rel = max_rel.max(rel);
        }
    }
    Ok(max_rel)
}
