//! Reverse-mode automatic differentiation over rank-2 arrays.
//!
//! A [`Tape`] records every operation as it is evaluated; [`Var`] is a cheap
//! handle into it. Scalars are `1 × 1` arrays and vectors are rows or
//! columns. Binary elementwise ops broadcast a size-1 dimension against any
//! size, and the backward pass sums gradients back down to the parent shape.
//! Reductions over an axis keep that axis with length 1.
//!
//! ```
//! use pacm_core::autodiff::Tape;
//!
//! let tape = Tape::new();
//! let x = tape.scalar(3.0);
//! let y = x * x;
//! let g = tape.grad(y, &[x]).unwrap();
//! assert_eq!(g[0][[0, 0]], 6.0);
//! ```

use crate::error::{usage, Error, Result};
use ndarray::linalg::general_mat_mul;
use ndarray::{concatenate, s, Array2, ArrayView2, Axis, Zip};
use std::cell::{Ref, RefCell};
use std::fmt;
use std::ops::{Add, Div, Mul, Neg, Sub};

const LEAKY_SLOPE: f64 = 0.2;

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Neg(usize),
    Scale(usize, f64),
    Offset(usize),
    Exp(usize),
    Log(usize),
    Tanh(usize),
    Elu(usize),
    LeakyRelu(usize),
    Powf(usize, f64),
    MatMul(usize, usize),
    Affine(usize, usize, usize),
    SumAll(usize),
    SumAxis(usize),
    MaxAxis(usize, usize, Vec<usize>),
    LogSumExpAxis(usize),
    Slice(usize, [usize; 4]),
    Reshape(usize),
    Transpose(usize),
    Concat(Vec<usize>, usize),
    StopGradient(usize),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Div(..) => "div",
            Op::Neg(_) => "neg",
            Op::Scale(..) => "scale",
            Op::Offset(_) => "offset",
            Op::Exp(_) => "exp",
            Op::Log(_) => "log",
            Op::Tanh(_) => "tanh",
            Op::Elu(_) => "elu",
            Op::LeakyRelu(_) => "leaky_relu",
            Op::Powf(..) => "powf",
            Op::MatMul(..) => "matmul",
            Op::Affine(..) => "affine",
            Op::SumAll(_) => "sum",
            Op::SumAxis(..) => "sum_axis",
            Op::MaxAxis(..) => "max_axis",
            Op::LogSumExpAxis(..) => "log_sum_exp",
            Op::Slice(..) => "slice",
            Op::Reshape(_) => "reshape",
            Op::Transpose(_) => "transpose",
            Op::Concat(..) => "concat",
            Op::StopGradient(_) => "stop_gradient",
        }
    }

    fn parents(&self) -> Vec<usize> {
        match self {
            Op::Leaf => vec![],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::Div(a, b) | Op::MatMul(a, b) => {
                vec![*a, *b]
            }
            Op::Neg(a)
            | Op::Scale(a, _)
            | Op::Offset(a)
            | Op::Exp(a)
            | Op::Log(a)
            | Op::Tanh(a)
            | Op::Elu(a)
            | Op::LeakyRelu(a)
            | Op::Powf(a, _)
            | Op::SumAll(a)
            | Op::SumAxis(a)
            | Op::MaxAxis(a, _, _)
            | Op::LogSumExpAxis(a)
            | Op::Slice(a, _)
            | Op::Reshape(a)
            | Op::Transpose(a)
            | Op::StopGradient(a) => vec![*a],
            Op::Affine(h, w, b) => vec![*h, *w, *b],
            Op::Concat(parts, _) => parts.clone(),
        }
    }
}

struct Node {
    value: Array2<f64>,
    op: Op,
}

/// Append-only record of a computation.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

impl fmt::Debug for Tape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tape").field("len", &self.len()).finish()
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Var")
            .field("id", &self.id)
            .field("shape", &self.shape())
            .finish()
    }
}

fn broadcast_shape(a: (usize, usize), b: (usize, usize)) -> (usize, usize) {
    let dim = |x: usize, y: usize| {
        if x == y || y == 1 {
            x
        } else if x == 1 {
            y
        } else {
            panic!("cannot broadcast shapes {a:?} and {b:?}")
        }
    };
    (dim(a.0, b.0), dim(a.1, b.1))
}

fn shape_of(a: &Array2<f64>) -> (usize, usize) {
    a.dim()
}

fn zip_broadcast(
    a: &Array2<f64>,
    b: &Array2<f64>,
    f: impl Fn(f64, f64) -> f64,
) -> Array2<f64> {
    let (sa, sb) = (shape_of(a), shape_of(b));
    let shape = broadcast_shape(sa, sb);
    if let (Some(xs), Some(ys)) = (a.as_slice(), b.as_slice()) {
        let collect = |data: Vec<f64>| Array2::from_shape_vec(shape, data).expect("broadcast shape");
        if sa == sb {
            return collect(xs.iter().zip(ys).map(|(x, y)| f(*x, *y)).collect());
        }
        if sa == shape && sb.0 == 1 {
            // b is a row (or scalar) repeated down a
            let mut out = Vec::with_capacity(xs.len());
            for row in xs.chunks_exact(shape.1) {
                if sb.1 == 1 {
                    out.extend(row.iter().map(|x| f(*x, ys[0])));
                } else {
                    out.extend(row.iter().zip(ys).map(|(x, y)| f(*x, *y)));
                }
            }
            return collect(out);
        }
        if sa == shape && sb.1 == 1 {
            let mut out = Vec::with_capacity(xs.len());
            for (row, y) in xs.chunks_exact(shape.1).zip(ys) {
                out.extend(row.iter().map(|x| f(*x, *y)));
            }
            return collect(out);
        }
    }
    let av = a.broadcast(shape).expect("broadcast");
    let bv = b.broadcast(shape).expect("broadcast");
    Zip::from(&av).and(&bv).map_collect(|x, y| f(*x, *y))
}

/// Sums `g` down to `shape` along broadcast dimensions.
fn reduce_to(g: &Array2<f64>, shape: (usize, usize)) -> Array2<f64> {
    let rows = if shape.0 == 1 && g.nrows() != 1 {
        g.sum_axis(Axis(0)).insert_axis(Axis(0))
    } else {
        g.clone()
    };
    if shape.1 == 1 && rows.ncols() != 1 {
        rows.sum_axis(Axis(1)).insert_axis(Axis(1))
    } else {
        rows
    }
}

fn reduce_to_owned(g: Array2<f64>, shape: (usize, usize)) -> Array2<f64> {
    if g.dim() == shape {
        g
    } else {
        reduce_to(&g, shape)
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Array2<f64>, op: Op) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value, op });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    /// New input node.
    pub fn var(&self, value: Array2<f64>) -> Var<'_> {
        self.push(value, Op::Leaf)
    }

    pub fn scalar(&self, value: f64) -> Var<'_> {
        self.var(Array2::from_elem((1, 1), value))
    }

    /// `1 × len` row vector.
    pub fn row(&self, values: &[f64]) -> Var<'_> {
        self.var(Array2::from_shape_vec((1, values.len()), values.to_vec()).expect("row shape"))
    }

    /// `len × 1` column vector.
    pub fn column(&self, values: &[f64]) -> Var<'_> {
        self.var(Array2::from_shape_vec((values.len(), 1), values.to_vec()).expect("column shape"))
    }

    fn value_ref(&self, id: usize) -> Ref<'_, Array2<f64>> {
        Ref::map(self.nodes.borrow(), |n| &n[id].value)
    }

    fn unary(&self, a: usize, op: Op, f: impl Fn(f64) -> f64) -> Var<'_> {
        let value = self.value_ref(a).mapv(f);
        self.push(value, op)
    }

    fn binary(&self, a: usize, b: usize, op: Op, f: impl Fn(f64, f64) -> f64) -> Var<'_> {
        let value = {
            let nodes = self.nodes.borrow();
            zip_broadcast(&nodes[a].value, &nodes[b].value, f)
        };
        self.push(value, op)
    }

    /// Concatenates along `axis` (0 stacks rows, 1 stacks columns).
    pub fn concat<'t>(&'t self, parts: &[Var<'t>], axis: usize) -> Var<'t> {
        assert!(!parts.is_empty(), "concat of nothing");
        assert!(axis < 2, "axis must be 0 or 1");
        let value = {
            let nodes = self.nodes.borrow();
            let views: Vec<ArrayView2<f64>> = parts.iter().map(|p| nodes[p.id].value.view()).collect();
            concatenate(Axis(axis), &views).expect("concat shapes")
        };
        self.push(value, Op::Concat(parts.iter().map(|p| p.id).collect(), axis))
    }

    /// Gradients of the scalar `output` with respect to each of `inputs`.
    ///
    /// Inputs that do not influence the output receive zeros. A NaN that
    /// reaches the output or a returned gradient is reported with the first
    /// offending operation and its immediate ancestry.
    pub fn grad(&self, output: Var<'_>, inputs: &[Var<'_>]) -> Result<Vec<Array2<f64>>> {
        let nodes = self.nodes.borrow();
        if nodes[output.id].value.dim() != (1, 1) {
            return usage(format!(
                "gradient output must be scalar, got shape {:?}",
                nodes[output.id].value.dim()
            ));
        }
        let grads = self.sweep(&nodes, output.id, inputs, false)?;
        let poisoned = nodes[output.id].value[[0, 0]].is_nan()
            || grads.iter().any(|g| g.iter().any(|v| v.is_nan()));
        if poisoned {
            // Slow path: rerun with per-node checks to locate the source.
            self.sweep(&nodes, output.id, inputs, true)?;
            return Err(self.nan_error(&nodes, output.id));
        }
        Ok(grads)
    }

    fn sweep(&self, nodes: &[Node], out: usize, inputs: &[Var<'_>], check: bool) -> Result<Vec<Array2<f64>>> {
        let mut live = vec![false; out + 1];
        live[out] = true;
        for id in (0..=out).rev() {
            if live[id] {
                for p in nodes[id].op.parents() {
                    live[p] = true;
                }
            }
        }
        if check {
            for id in 0..=out {
                if live[id] && nodes[id].value.iter().any(|v| v.is_nan()) {
                    return Err(self.nan_error(nodes, id));
                }
            }
        }
        // Only nodes downstream of a requested input carry gradient.
        let mut need = vec![false; out + 1];
        let mut wanted = vec![false; out + 1];
        for v in inputs {
            if v.id <= out {
                need[v.id] = true;
                wanted[v.id] = true;
            }
        }
        for id in 0..=out {
            if live[id] && !need[id] && !matches!(nodes[id].op, Op::StopGradient(_)) {
                need[id] = nodes[id].op.parents().iter().any(|&p| need[p]);
            }
        }

        let mut grads: Vec<Option<Array2<f64>>> = vec![None; out + 1];
        grads[out] = Some(Array2::ones((1, 1)));
        let mut kept: Vec<Option<Array2<f64>>> = vec![None; out + 1];
        for id in (0..=out).rev() {
            let Some(g) = grads[id].take() else { continue };
            if check && g.iter().any(|v| v.is_nan()) {
                return Err(self.nan_error(nodes, id));
            }
            if wanted[id] {
                kept[id] = Some(g.clone());
            }
            for (p, pg) in backward(nodes, id, g, &need) {
                if !need[p] {
                    continue;
                }
                match &mut grads[p] {
                    Some(acc) => *acc += &pg,
                    slot => *slot = Some(pg),
                }
            }
        }
        Ok(inputs
            .iter()
            .map(|v| {
                kept.get(v.id)
                    .and_then(|g| g.clone())
                    .unwrap_or_else(|| Array2::zeros(nodes[v.id].value.dim()))
            })
            .collect())
    }

    fn nan_error(&self, nodes: &[Node], id: usize) -> Error {
        let mut lines = Vec::new();
        let mut frontier = vec![(id, 0usize)];
        while let Some((n, depth)) = frontier.pop() {
            let op = &nodes[n].op;
            lines.push(format!(
                "{}#{n} {} {:?}",
                "  ".repeat(depth),
                op.name(),
                nodes[n].value.dim()
            ));
            if depth < 3 {
                frontier.extend(op.parents().into_iter().rev().map(|p| (p, depth + 1)));
            }
        }
        Error::NonFinite {
            op: nodes[id].op.name(),
            node: id,
            trace: lines.join("\n"),
        }
    }
}

/// Contributions of `Σ sign · parent`. Broadcast parents are reduced from a
/// borrow; `g` itself moves into the last full-shape parent.
fn sum_parents(
    g: Array2<f64>,
    parents: [(usize, f64); 2],
    need: &[bool],
    shape: &impl Fn(usize) -> (usize, usize),
) -> Vec<(usize, Array2<f64>)> {
    let signed = |p: usize, sign: f64, piece: Array2<f64>| (p, if sign < 0.0 { -piece } else { piece });
    let mut out = Vec::with_capacity(2);
    let mut full = Vec::with_capacity(2);
    for (p, sign) in parents.into_iter().filter(|(p, _)| need[*p]) {
        if shape(p) == g.dim() {
            full.push((p, sign));
        } else {
            out.push(signed(p, sign, reduce_to(&g, shape(p))));
        }
    }
    if let Some((&(last, last_sign), rest)) = full.split_last() {
        for &(p, sign) in rest {
            out.push(signed(p, sign, g.clone()));
        }
        out.push(signed(last, last_sign, g));
    }
    out
}

/// Parent gradient contributions of node `id` given its output gradient.
fn backward(nodes: &[Node], id: usize, g: Array2<f64>, need: &[bool]) -> Vec<(usize, Array2<f64>)> {
    let node = &nodes[id];
    let out = &node.value;
    let val = |i: usize| &nodes[i].value;
    let shape = |i: usize| nodes[i].value.dim();
    match &node.op {
        Op::Leaf | Op::StopGradient(_) => vec![],
        Op::Add(a, b) => sum_parents(g, [(*a, 1.0), (*b, 1.0)], need, &shape),
        Op::Sub(a, b) => sum_parents(g, [(*a, 1.0), (*b, -1.0)], need, &shape),
        Op::Mul(a, b) => {
            let mut v = Vec::with_capacity(2);
            if need[*a] {
                v.push((*a, reduce_to_owned(zip_broadcast(&g, val(*b), |x, y| x * y), shape(*a))));
            }
            if need[*b] {
                v.push((*b, reduce_to_owned(zip_broadcast(&g, val(*a), |x, y| x * y), shape(*b))));
            }
            v
        }
        Op::Div(a, b) => {
            let mut v = Vec::with_capacity(2);
            if need[*a] {
                v.push((*a, reduce_to_owned(zip_broadcast(&g, val(*b), |x, y| x / y), shape(*a))));
            }
            if need[*b] {
                // d(a/b)/db = -out / b
                let gb = zip_broadcast(&(&g * out), val(*b), |x, y| -x / y);
                v.push((*b, reduce_to_owned(gb, shape(*b))));
            }
            v
        }
        Op::Neg(a) => vec![(*a, -g)],
        Op::Scale(a, c) => vec![(*a, g * *c)],
        Op::Offset(a) => vec![(*a, g)],
        Op::Exp(a) => vec![(*a, g * out)],
        Op::Log(a) => vec![(*a, g / val(*a))],
        Op::Tanh(a) => {
            let mut g = g;
            Zip::from(&mut g).and(out).for_each(|g, t| *g *= 1.0 - t * t);
            vec![(*a, g)]
        }
        Op::Elu(a) => {
            let mut g = g;
            Zip::from(&mut g).and(val(*a)).and(out).for_each(|g, x, y| {
                if *x <= 0.0 {
                    *g *= y + 1.0;
                }
            });
            vec![(*a, g)]
        }
        Op::LeakyRelu(a) => {
            let mut g = g;
            Zip::from(&mut g).and(val(*a)).for_each(|g, x| {
                if *x <= 0.0 {
                    *g *= LEAKY_SLOPE;
                }
            });
            vec![(*a, g)]
        }
        Op::Powf(a, p) => {
            let mut g = g;
            Zip::from(&mut g).and(val(*a)).for_each(|g, x| *g *= p * x.powf(p - 1.0));
            vec![(*a, g)]
        }
        Op::MatMul(a, b) => {
            let mut v = Vec::with_capacity(2);
            if need[*a] {
                v.push((*a, g.dot(&val(*b).t())));
            }
            if need[*b] {
                v.push((*b, val(*a).t().dot(&g)));
            }
            v
        }
        Op::Affine(h, w, b) => {
            let mut v = Vec::with_capacity(3);
            if need[*h] {
                v.push((*h, g.dot(&val(*w).t())));
            }
            if need[*w] {
                v.push((*w, val(*h).t().dot(&g)));
            }
            if need[*b] {
                v.push((*b, g.sum_axis(Axis(0)).insert_axis(Axis(0))));
            }
            v
        }
        Op::SumAll(a) => vec![(*a, Array2::from_elem(shape(*a), g[[0, 0]]))],
        Op::SumAxis(a) => vec![(
            *a,
            g.broadcast(shape(*a)).expect("sum broadcast").to_owned(),
        )],
        Op::MaxAxis(a, axis, argmax) => {
            let mut ga = Array2::zeros(shape(*a));
            for (k, idx) in argmax.iter().enumerate() {
                if *axis == 0 {
                    ga[[*idx, k]] = g[[0, k]];
                } else {
                    ga[[k, *idx]] = g[[k, 0]];
                }
            }
            vec![(*a, ga)]
        }
        Op::LogSumExpAxis(a) => {
            // softmax weights exp(x - lse)
            let gb = g.broadcast(shape(*a)).expect("lse broadcast");
            let ob = out.broadcast(shape(*a)).expect("lse broadcast");
            let ga = Zip::from(&gb)
                .and(&ob)
                .and(val(*a))
                .map_collect(|g, l, x| if *x == f64::NEG_INFINITY { 0.0 } else { g * (x - l).exp() });
            vec![(*a, ga)]
        }
        Op::Slice(a, [r0, r1, c0, c1]) => {
            let mut ga = Array2::zeros(shape(*a));
            ga.slice_mut(s![*r0..*r1, *c0..*c1]).assign(&g);
            vec![(*a, ga)]
        }
        Op::Reshape(a) => vec![(
            *a,
            g.as_standard_layout()
                .into_owned()
                .into_shape_with_order(shape(*a))
                .expect("reshape grad"),
        )],
        Op::Transpose(a) => vec![(*a, g.t().as_standard_layout().into_owned())],
        Op::Concat(parts, axis) => {
            let mut offset = 0;
            parts
                .iter()
                .filter_map(|p| {
                    let (r, c) = shape(*p);
                    let start = offset;
                    offset += if *axis == 0 { r } else { c };
                    if !need[*p] {
                        return None;
                    }
                    let piece = if *axis == 0 {
                        g.slice(s![start..start + r, ..]).to_owned()
                    } else {
                        g.slice(s![.., start..start + c]).to_owned()
                    };
                    Some((*p, piece))
                })
                .collect()
        }
    }
}

impl<'t> Var<'t> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn shape(&self) -> (usize, usize) {
        self.tape.value_ref(self.id).dim()
    }

    pub fn value(&self) -> Array2<f64> {
        self.tape.value_ref(self.id).clone()
    }

    /// Value of a `1 × 1` node.
    pub fn scalar(&self) -> f64 {
        let v = self.tape.value_ref(self.id);
        assert_eq!(v.dim(), (1, 1), "not a scalar node");
        v[[0, 0]]
    }

    /// A constant on the same tape.
    pub fn constant(&self, value: Array2<f64>) -> Var<'t> {
        self.tape.var(value)
    }

    pub fn exp(self) -> Var<'t> {
        self.tape.unary(self.id, Op::Exp(self.id), f64::exp)
    }

    pub fn ln(self) -> Var<'t> {
        self.tape.unary(self.id, Op::Log(self.id), f64::ln)
    }

    pub fn tanh(self) -> Var<'t> {
        self.tape.unary(self.id, Op::Tanh(self.id), f64::tanh)
    }

    pub fn elu(self) -> Var<'t> {
        self.tape
            .unary(self.id, Op::Elu(self.id), |x| if x > 0.0 { x } else { x.exp() - 1.0 })
    }

    pub fn leaky_relu(self) -> Var<'t> {
        self.tape.unary(self.id, Op::LeakyRelu(self.id), |x| {
            if x > 0.0 {
                x
            } else {
                LEAKY_SLOPE * x
            }
        })
    }

    pub fn powf(self, p: f64) -> Var<'t> {
        self.tape.unary(self.id, Op::Powf(self.id, p), |x| x.powf(p))
    }

    pub fn square(self) -> Var<'t> {
        self * self
    }

    pub fn scale(self, c: f64) -> Var<'t> {
        self.tape.unary(self.id, Op::Scale(self.id, c), |x| x * c)
    }

    pub fn add_scalar(self, c: f64) -> Var<'t> {
        self.tape.unary(self.id, Op::Offset(self.id), |x| x + c)
    }

    pub fn matmul(self, other: Var<'t>) -> Var<'t> {
        let value = {
            let nodes = self.tape.nodes.borrow();
            nodes[self.id].value.dot(&nodes[other.id].value)
        };
        self.tape.push(value, Op::MatMul(self.id, other.id))
    }

    /// `self · w + b` with `b` a row added to every output row.
    pub fn affine(self, w: Var<'t>, b: Var<'t>) -> Var<'t> {
        let value = {
            let nodes = self.tape.nodes.borrow();
            let (h, w, b) = (&nodes[self.id].value, &nodes[w.id].value, &nodes[b.id].value);
            assert_eq!(b.dim(), (1, w.ncols()), "affine bias must be a 1 x out row");
            let mut out = b.broadcast((h.nrows(), w.ncols())).expect("bias broadcast").to_owned();
            general_mat_mul(1.0, h, w, 1.0, &mut out);
            out
        };
        self.tape.push(value, Op::Affine(self.id, w.id, b.id))
    }

    pub fn sum(self) -> Var<'t> {
        let total = self.tape.value_ref(self.id).sum();
        self.tape.push(Array2::from_elem((1, 1), total), Op::SumAll(self.id))
    }

    pub fn mean(self) -> Var<'t> {
        let len = self.tape.value_ref(self.id).len();
        self.sum().scale(1.0 / len as f64)
    }

    pub fn sum_axis(self, axis: usize) -> Var<'t> {
        let value = self
            .tape
            .value_ref(self.id)
            .sum_axis(Axis(axis))
            .insert_axis(Axis(axis));
        self.tape.push(value, Op::SumAxis(self.id))
    }

    pub fn mean_axis(self, axis: usize) -> Var<'t> {
        let len = self.tape.value_ref(self.id).len_of(Axis(axis));
        self.sum_axis(axis).scale(1.0 / len as f64)
    }

    /// Maximum along `axis`; the subgradient goes to the lowest index among ties.
    pub fn max_axis(self, axis: usize) -> Var<'t> {
        let (value, argmax) = {
            let v = self.tape.value_ref(self.id);
            let mut best = Vec::new();
            let mut idx = Vec::new();
            for lane in v.lanes(Axis(axis)) {
                let (mut bi, mut bv) = (0, f64::NEG_INFINITY);
                for (i, x) in lane.iter().enumerate() {
                    if *x > bv || i == 0 {
                        bi = i;
                        bv = *x;
                    }
                }
                best.push(bv);
                idx.push(bi);
            }
            let shape = if axis == 0 { (1, best.len()) } else { (best.len(), 1) };
            (Array2::from_shape_vec(shape, best).expect("max shape"), idx)
        };
        self.tape.push(value, Op::MaxAxis(self.id, axis, argmax))
    }

    /// Stable `log Σ exp` along `axis`.
    pub fn log_sum_exp(self, axis: usize) -> Var<'t> {
        let value = {
            let v = self.tape.value_ref(self.id);
            let sums: Vec<f64> = v
                .lanes(Axis(axis))
                .into_iter()
                .map(|lane| {
                    let m = lane.fold(f64::NEG_INFINITY, |a, b| a.max(*b));
                    if m.is_infinite() {
                        m
                    } else {
                        m + lane.fold(0.0, |acc, x| acc + (x - m).exp()).ln()
                    }
                })
                .collect();
            let shape = if axis == 0 { (1, sums.len()) } else { (sums.len(), 1) };
            Array2::from_shape_vec(shape, sums).expect("lse shape")
        };
        self.tape.push(value, Op::LogSumExpAxis(self.id))
    }

    /// `log_sum_exp(axis) - log(len)`.
    pub fn log_mean_exp(self, axis: usize) -> Var<'t> {
        let len = self.tape.value_ref(self.id).len_of(Axis(axis));
        self.log_sum_exp(axis).add_scalar(-(len as f64).ln())
    }

    /// Sub-block `rows × cols` (half-open ranges).
    pub fn slice(self, rows: std::ops::Range<usize>, cols: std::ops::Range<usize>) -> Var<'t> {
        let value = self
            .tape
            .value_ref(self.id)
            .slice(s![rows.clone(), cols.clone()])
            .to_owned();
        self.tape.push(
            value,
            Op::Slice(self.id, [rows.start, rows.end, cols.start, cols.end]),
        )
    }

    pub fn rows(self, range: std::ops::Range<usize>) -> Var<'t> {
        let cols = self.shape().1;
        self.slice(range, 0..cols)
    }

    pub fn cols(self, range: std::ops::Range<usize>) -> Var<'t> {
        let rows = self.shape().0;
        self.slice(0..rows, range)
    }

    /// Row-major reshape.
    pub fn reshape(self, rows: usize, cols: usize) -> Var<'t> {
        let value = {
            let v = self.tape.value_ref(self.id);
            assert_eq!(v.len(), rows * cols, "reshape size mismatch");
            Array2::from_shape_vec((rows, cols), v.iter().copied().collect()).expect("reshape")
        };
        self.tape.push(value, Op::Reshape(self.id))
    }

    pub fn t(self) -> Var<'t> {
        let value = self.tape.value_ref(self.id).t().as_standard_layout().into_owned();
        self.tape.push(value, Op::Transpose(self.id))
    }

    /// Same value, zero gradient.
    pub fn stop_gradient(self) -> Var<'t> {
        let value = self.value();
        self.tape.push(value, Op::StopGradient(self.id))
    }
}

/// Gradient of `x ↦ f(x)` through the tape; `x` is fed as a `1 × len` row.
pub fn gradient(
    f: impl for<'t> Fn(Var<'t>) -> Result<Var<'t>>,
    x: &[f64],
) -> Result<(f64, Vec<f64>)> {
    let tape = Tape::new();
    let input = tape.row(x);
    let out = f(input)?;
    let value = out.scalar();
    let g = tape.grad(out, &[input])?;
    Ok((value, g[0].iter().copied().collect()))
}

/// Largest coordinate-wise disagreement `|a - b| / max(1e-8, |a| + |b|)`
/// between the reverse-mode gradient and central differences with step `eps`.
pub fn finite_diff_check(
    f: impl for<'t> Fn(Var<'t>) -> Result<Var<'t>>,
    x: &[f64],
    eps: f64,
) -> Result<f64> {
    if !(eps > 0.0) {
        return usage(format!("finite-difference step must be positive, got {eps}"));
    }
    let (_, analytic) = gradient(&f, x)?;
    let eval = |point: &[f64]| -> Result<f64> {
        let tape = Tape::new();
        Ok(f(tape.row(point))?.scalar())
    };
    let mut worst: f64 = 0.0;
    let mut point = x.to_vec();
    for (i, a) in analytic.iter().enumerate() {
        point[i] = x[i] + eps;
        let up = eval(&point)?;
        point[i] = x[i] - eps;
        let down = eval(&point)?;
        point[i] = x[i];
        let numeric = (up - down) / (2.0 * eps);
        let err = (a - numeric).abs() / (a.abs() + numeric.abs()).max(1e-8);
        worst = worst.max(err);
    }
    Ok(worst)
}

macro_rules! binary_op {
    ($trait:ident, $method:ident, $variant:ident, $f:expr) => {
        impl<'t> $trait for Var<'t> {
            type Output = Var<'t>;
            fn $method(self, rhs: Var<'t>) -> Var<'t> {
                self.tape
                    .binary(self.id, rhs.id, Op::$variant(self.id, rhs.id), $f)
            }
        }
    };
}

binary_op!(Add, add, Add, |a, b| a + b);
binary_op!(Sub, sub, Sub, |a, b| a - b);
binary_op!(Mul, mul, Mul, |a, b| a * b);
binary_op!(Div, div, Div, |a, b| a / b);

impl<'t> Neg for Var<'t> {
    type Output = Var<'t>;
    fn neg(self) -> Var<'t> {
        self.tape.unary(self.id, Op::Neg(self.id), |x| -x)
    }
}

impl<'t> Add<f64> for Var<'t> {
    type Output = Var<'t>;
    fn add(self, rhs: f64) -> Var<'t> {
        self.add_scalar(rhs)
    }
}

impl<'t> Sub<f64> for Var<'t> {
    type Output = Var<'t>;
    fn sub(self, rhs: f64) -> Var<'t> {
        self.add_scalar(-rhs)
    }
}

impl<'t> Mul<f64> for Var<'t> {
    type Output = Var<'t>;
    fn mul(self, rhs: f64) -> Var<'t> {
        self.scale(rhs)
    }
}

impl<'t> Div<f64> for Var<'t> {
    type Output = Var<'t>;
    fn div(self, rhs: f64) -> Var<'t> {
        self.scale(1.0 / rhs)
    }
}
