use super::params::ParamStore;
use super::tensor::{
    axis_split, broadcast_map, broadcast_shape, gemm, gemm_nt, gemm_tn, matmul_shapes, numel, strides, Tensor,
};
use super::{AutodiffError, Result};
use crate::rng::RngState;
use crate::scalar::Scalar;
use indexmap::IndexMap;
use std::cell::RefCell;

/// Boolean mask broadcast against the tensor it is applied to. `true` hides
/// a position.
#[derive(Debug, Clone, PartialEq)]
pub struct Mask {
    pub shape: Vec<usize>,
    pub data: Vec<bool>,
}

impl Mask {
    /// `[n, n]` look-ahead mask: position `i` may only see `j <= i`.
    pub fn causal(n: usize) -> Self {
        let mut data = vec![false; n * n];
        for i in 0..n {
            for j in i + 1..n {
                data[i * n + j] = true;
            }
        }
        Self { shape: vec![n, n], data }
    }
}

enum Op<T> {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Neg(usize),
    Scale(usize, T),
    Shift(usize),
    Exp(usize),
    Log(usize),
    Tanh(usize),
    Elu(usize),
    Softplus(usize),
    Broadcast(usize),
    Reshape(usize),
    Permute(usize, Vec<usize>),
    Slice { x: usize, axis: usize, start: usize },
    Concat { xs: Vec<usize>, axis: usize },
    MatMul(usize, usize),
    Sum { x: usize, axis: usize },
    SumAll(usize),
    Softmax { x: usize, axis: usize },
    MaskedFill { x: usize, hidden: Vec<bool> },
    LayerNorm { x: usize, gamma: usize, beta: usize, xhat: Vec<T>, rstd: Vec<T> },
    Dropout { x: usize, scale: Vec<T> },
}

struct Node<T> {
    op: Op<T>,
    value: Tensor<T>,
}

/// Records a computation for reverse-mode differentiation.
pub struct Tape<T> {
    nodes: RefCell<Vec<Node<T>>>,
    params: RefCell<IndexMap<String, usize>>,
    train: bool,
    rng: RefCell<Option<RngState>>,
}

/// Handle to a value on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t, T> {
    tape: &'t Tape<T>,
    id: usize,
}

impl<T> std::fmt::Debug for Var<'_, T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var({})", self.id)
    }
}

/// Result of [`Tape::backward`].
pub struct Gradients<T> {
    by_node: Vec<Option<Tensor<T>>>,
    params: IndexMap<String, usize>,
    shapes: Vec<Vec<usize>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn wrt(&self, v: Var<'_, T>) -> Tensor<T> {
        self.by_node[v.id].clone().unwrap_or_else(|| Tensor::zeros(&self.shapes[v.id]))
    }

    /// Gradient for every trainable parameter of `store`, zero when the
    /// parameter was never reached.
    pub fn params(&self, store: &ParamStore<T>) -> IndexMap<String, Tensor<T>> {
        store
            .iter()
            .filter(|(_, p)| p.trainable)
            .map(|(name, p)| {
                let g = self
                    .params
                    .get(name)
                    .and_then(|&id| self.by_node[id].clone())
                    .unwrap_or_else(|| Tensor::zeros(p.value.shape()));
                (name.clone(), g)
            })
            .collect()
    }
}

fn elu<T: Scalar>(x: T) -> T {
    if x > T::zero() {
        x
    } else {
        x.exp_m1()
    }
}

fn softplus<T: Scalar>(x: T) -> T {
    x.max(T::zero()) + (-x.abs()).exp().ln_1p()
}

fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

impl<T: Scalar> Tape<T> {
    /// Evaluation tape: dropout is the identity.
    pub fn new() -> Self {
        Self { nodes: RefCell::new(Vec::new()), params: RefCell::new(IndexMap::new()), train: false, rng: RefCell::new(None) }
    }

    /// Training tape; dropout masks are drawn from `rng`.
    pub fn training(rng: RngState) -> Self {
        Self { nodes: RefCell::new(Vec::new()), params: RefCell::new(IndexMap::new()), train: true, rng: RefCell::new(Some(rng)) }
    }

    pub fn is_training(&self) -> bool {
        self.train
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Hands back the dropout generator so the caller can continue its stream.
    pub fn take_rng(&self) -> Option<RngState> {
        self.rng.borrow_mut().take()
    }

    fn push(&self, op: Op<T>, value: Tensor<T>) -> Var<'_, T> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { op, value });
        Var { tape: self, id: nodes.len() - 1 }
    }

    pub fn constant(&self, value: Tensor<T>) -> Var<'_, T> {
        self.push(Op::Leaf, value)
    }

    pub fn scalar(&self, v: T) -> Var<'_, T> {
        self.constant(Tensor::scalar(v))
    }

    /// Registers (once) and returns the leaf for parameter `name`.
    pub fn param(&self, store: &ParamStore<T>, name: &str) -> Result<Var<'_, T>> {
        if let Some(&id) = self.params.borrow().get(name) {
            return Ok(Var { tape: self, id });
        }
        let p = store.get(name).ok_or_else(|| AutodiffError::UnknownParam(name.to_string()))?;
        let v = self.constant(p.value.clone());
        if p.trainable {
            self.params.borrow_mut().insert(name.to_string(), v.id);
        }
        Ok(v)
    }

    pub fn value(&self, v: Var<'_, T>) -> Tensor<T> {
        self.nodes.borrow()[v.id].value.clone()
    }

    /// Reverse sweep from a one-element `loss`. Each call starts from fresh
    /// gradient buffers.
    pub fn backward(&self, loss: Var<'_, T>) -> Result<Gradients<T>> {
        let nodes = self.nodes.borrow();
        let lshape = nodes[loss.id].value.shape().to_vec();
        if numel(&lshape) != 1 {
            return Err(AutodiffError::NonScalarLoss(lshape));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..nodes.len()).map(|_| None).collect();
        grads[loss.id] = Some(Tensor::ones(&lshape));
        for id in (0..=loss.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            backprop(&nodes, id, &g, &mut grads);
            grads[id] = Some(g);
        }
        Ok(Gradients {
            by_node: grads,
            params: self.params.borrow().clone(),
            shapes: nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
        })
    }
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn acc<T: Scalar>(grads: &mut [Option<Tensor<T>>], id: usize, g: Tensor<T>) {
    match &mut grads[id] {
        Some(cur) => cur.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

fn acc_mapped<T: Scalar>(
    grads: &mut [Option<Tensor<T>>],
    nodes: &[Node<T>],
    id: usize,
    map: &[usize],
    contrib: impl Fn(usize) -> T,
) {
    let shape = nodes[id].value.shape();
    let mut out = vec![T::zero(); numel(shape)];
    for (o, &src) in map.iter().enumerate() {
        out[src] += contrib(o);
    }
    acc(grads, id, Tensor::new(shape.to_vec(), out).expect("gradient shape"));
}

fn unary_grad<T: Scalar>(
    nodes: &[Node<T>],
    grads: &mut [Option<Tensor<T>>],
    x: usize,
    y: &Tensor<T>,
    g: &Tensor<T>,
    d: impl Fn(T, T) -> T,
) {
    let xv = &nodes[x].value;
    let data = xv.data().iter().zip(y.data()).zip(g.data()).map(|((&xi, &yi), &gi)| gi * d(xi, yi)).collect();
    acc(grads, x, Tensor::new(xv.shape().to_vec(), data).expect("gradient shape"));
}

fn backprop<T: Scalar>(nodes: &[Node<T>], id: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
    let node = &nodes[id];
    let out_shape = node.value.shape();
    let gd = g.data();
    match &node.op {
        Op::Leaf => {}
        Op::Add(a, b) | Op::Sub(a, b) => {
            let sign = if matches!(node.op, Op::Sub(..)) { -T::one() } else { T::one() };
            acc(grads, *a, g.reduce_to(nodes[*a].value.shape()));
            acc(grads, *b, g.reduce_to(nodes[*b].value.shape()).map(|v| v * sign));
        }
        Op::Mul(a, b) => {
            let (av, bv) = (nodes[*a].value.data(), nodes[*b].value.data());
            let ma = broadcast_map(nodes[*a].value.shape(), out_shape);
            let mb = broadcast_map(nodes[*b].value.shape(), out_shape);
            acc_mapped(grads, nodes, *a, &ma, |o| gd[o] * bv[mb[o]]);
            acc_mapped(grads, nodes, *b, &mb, |o| gd[o] * av[ma[o]]);
        }
        Op::Div(a, b) => {
            let (av, bv) = (nodes[*a].value.data(), nodes[*b].value.data());
            let ma = broadcast_map(nodes[*a].value.shape(), out_shape);
            let mb = broadcast_map(nodes[*b].value.shape(), out_shape);
            acc_mapped(grads, nodes, *a, &ma, |o| gd[o] / bv[mb[o]]);
            acc_mapped(grads, nodes, *b, &mb, |o| -gd[o] * av[ma[o]] / (bv[mb[o]] * bv[mb[o]]));
        }
        Op::Neg(x) => acc(grads, *x, g.map(|v| -v)),
        Op::Scale(x, c) => {
            let c = *c;
            acc(grads, *x, g.map(|v| v * c))
        }
        Op::Shift(x) => acc(grads, *x, g.clone()),
        Op::Exp(x) => unary_grad(nodes, grads, *x, &node.value, g, |_, y| y),
        Op::Log(x) => unary_grad(nodes, grads, *x, &node.value, g, |x, _| T::one() / x),
        Op::Tanh(x) => unary_grad(nodes, grads, *x, &node.value, g, |_, y| T::one() - y * y),
        Op::Elu(x) => unary_grad(nodes, grads, *x, &node.value, g, |x, _| if x > T::zero() { T::one() } else { x.exp() }),
        Op::Softplus(x) => unary_grad(nodes, grads, *x, &node.value, g, |x, _| sigmoid(x)),
        Op::Broadcast(x) => acc(grads, *x, g.reduce_to(nodes[*x].value.shape())),
        Op::Reshape(x) => acc(grads, *x, g.reshaped(nodes[*x].value.shape()).expect("reshape back")),
        Op::Permute(x, perm) => {
            let mut inv = vec![0; perm.len()];
            for (i, &p) in perm.iter().enumerate() {
                inv[p] = i;
            }
            acc(grads, *x, permute_raw(g, &inv));
        }
        Op::Slice { x, axis, start } => {
            let xs = nodes[*x].value.shape();
            let (outer, len, inner) = axis_split(xs, *axis);
            let w = out_shape[*axis];
            let mut out = vec![T::zero(); numel(xs)];
            for o in 0..outer {
                for j in 0..w {
                    let src = (o * w + j) * inner;
                    let dst = (o * len + start + j) * inner;
                    out[dst..dst + inner].copy_from_slice(&gd[src..src + inner]);
                }
            }
            acc(grads, *x, Tensor::new(xs.to_vec(), out).expect("slice grad"));
        }
        Op::Concat { xs, axis } => {
            let (outer, total, inner) = axis_split(out_shape, *axis);
            let mut offset = 0;
            for &x in xs {
                let shp = nodes[x].value.shape();
                let w = shp[*axis];
                let mut out = Vec::with_capacity(numel(shp));
                for o in 0..outer {
                    let s = (o * total + offset) * inner;
                    out.extend_from_slice(&gd[s..s + w * inner]);
                }
                acc(grads, x, Tensor::new(shp.to_vec(), out).expect("concat grad"));
                offset += w;
            }
        }
        Op::MatMul(a, b) => {
            let (ash, bsh) = (nodes[*a].value.shape(), nodes[*b].value.shape());
            let (batch, m, k, n, shared) = matmul_shapes(ash, bsh).expect("checked in forward");
            let (av, bv) = (nodes[*a].value.data(), nodes[*b].value.data());
            let mut ga = vec![T::zero(); av.len()];
            let mut gb = vec![T::zero(); bv.len()];
            for bi in 0..batch {
                let aoff = bi * m * k;
                let boff = if shared { 0 } else { bi * k * n };
                let goff = bi * m * n;
                gemm_nt(&gd[goff..goff + m * n], &bv[boff..boff + k * n], &mut ga[aoff..aoff + m * k], m, k, n);
                gemm_tn(&av[aoff..aoff + m * k], &gd[goff..goff + m * n], &mut gb[boff..boff + k * n], m, k, n);
            }
            acc(grads, *a, Tensor::new(ash.to_vec(), ga).expect("matmul grad"));
            acc(grads, *b, Tensor::new(bsh.to_vec(), gb).expect("matmul grad"));
        }
        Op::Sum { x, axis } => {
            let xs = nodes[*x].value.shape();
            let (outer, len, inner) = axis_split(xs, *axis);
            let mut out = vec![T::zero(); numel(xs)];
            for o in 0..outer {
                for j in 0..len {
                    for i in 0..inner {
                        out[(o * len + j) * inner + i] = gd[o * inner + i];
                    }
                }
            }
            acc(grads, *x, Tensor::new(xs.to_vec(), out).expect("sum grad"));
        }
        Op::SumAll(x) => acc(grads, *x, Tensor::full(nodes[*x].value.shape(), gd[0])),
        Op::Softmax { x, axis } => {
            let (outer, len, inner) = axis_split(out_shape, *axis);
            let y = node.value.data();
            let mut out = vec![T::zero(); y.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let at = |j: usize| (o * len + j) * inner + i;
                    let dot: T = (0..len).map(|j| gd[at(j)] * y[at(j)]).sum();
                    for j in 0..len {
                        out[at(j)] = y[at(j)] * (gd[at(j)] - dot);
                    }
                }
            }
            acc(grads, *x, Tensor::new(out_shape.to_vec(), out).expect("softmax grad"));
        }
        Op::MaskedFill { x, hidden } => {
            let data = gd.iter().zip(hidden).map(|(&v, &h)| if h { T::zero() } else { v }).collect();
            acc(grads, *x, Tensor::new(out_shape.to_vec(), data).expect("mask grad"));
        }
        Op::LayerNorm { x, gamma, beta, xhat, rstd } => {
            let dim = *out_shape.last().expect("layer norm rank");
            let rows = xhat.len() / dim;
            let gam = nodes[*gamma].value.data();
            let nd = T::lit(dim as f64);
            let mut gx = vec![T::zero(); xhat.len()];
            let mut gg = vec![T::zero(); dim];
            let mut gb = vec![T::zero(); dim];
            for r in 0..rows {
                let s = r * dim;
                let mut m1 = T::zero();
                let mut m2 = T::zero();
                for j in 0..dim {
                    let dxh = gd[s + j] * gam[j];
                    m1 += dxh;
                    m2 += dxh * xhat[s + j];
                    gg[j] += gd[s + j] * xhat[s + j];
                    gb[j] += gd[s + j];
                }
                m1 = m1 / nd;
                m2 = m2 / nd;
                for j in 0..dim {
                    let dxh = gd[s + j] * gam[j];
                    gx[s + j] = rstd[r] * (dxh - m1 - xhat[s + j] * m2);
                }
            }
            acc(grads, *x, Tensor::new(out_shape.to_vec(), gx).expect("ln grad"));
            acc(grads, *gamma, Tensor::new(vec![dim], gg).expect("ln grad"));
            acc(grads, *beta, Tensor::new(vec![dim], gb).expect("ln grad"));
        }
        Op::Dropout { x, scale } => {
            let data = gd.iter().zip(scale).map(|(&v, &s)| v * s).collect();
            acc(grads, *x, Tensor::new(out_shape.to_vec(), data).expect("dropout grad"));
        }
    }
}

fn permute_raw<T: Scalar>(x: &Tensor<T>, perm: &[usize]) -> Tensor<T> {
    let xs = x.shape();
    let out_shape: Vec<usize> = perm.iter().map(|&p| xs[p]).collect();
    let xst = strides(xs);
    let eff: Vec<usize> = perm.iter().map(|&p| xst[p]).collect();
    let n = x.len();
    let r = out_shape.len();
    let mut data = Vec::with_capacity(n);
    let mut idx = vec![0usize; r];
    let mut cur = 0usize;
    let xd = x.data();
    for _ in 0..n {
        data.push(xd[cur]);
        for ax in (0..r).rev() {
            idx[ax] += 1;
            cur += eff[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            cur -= eff[ax] * idx[ax];
            idx[ax] = 0;
        }
    }
    Tensor::new(out_shape, data).expect("permute")
}

impl<'t, T: Scalar> Var<'t, T> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape<T> {
        self.tape
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn value(&self) -> Tensor<T> {
        self.tape.value(*self)
    }

    fn with_value<R>(&self, f: impl FnOnce(&Tensor<T>) -> R) -> R {
        f(&self.tape.nodes.borrow()[self.id].value)
    }

    fn binary(self, other: Self, op: &'static str, f: impl Fn(T, T) -> T) -> Result<(Tensor<T>, Vec<usize>)> {
        let nodes = self.tape.nodes.borrow();
        let (a, b) = (&nodes[self.id].value, &nodes[other.id].value);
        let shape = broadcast_shape(a.shape(), b.shape()).ok_or_else(|| AutodiffError::Shape {
            op,
            a: a.shape().to_vec(),
            b: b.shape().to_vec(),
        })?;
        let data = if a.shape() == b.shape() {
            a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect()
        } else {
            let ma = broadcast_map(a.shape(), &shape);
            let mb = broadcast_map(b.shape(), &shape);
            ma.iter().zip(&mb).map(|(&i, &j)| f(a.data()[i], b.data()[j])).collect()
        };
        Ok((Tensor::new(shape.clone(), data)?, shape))
    }

    pub fn add(self, other: Self) -> Result<Self> {
        let (v, _) = self.binary(other, "add", |a, b| a + b)?;
        Ok(self.tape.push(Op::Add(self.id, other.id), v))
    }

    pub fn sub(self, other: Self) -> Result<Self> {
        let (v, _) = self.binary(other, "sub", |a, b| a - b)?;
        Ok(self.tape.push(Op::Sub(self.id, other.id), v))
    }

    pub fn mul(self, other: Self) -> Result<Self> {
        let (v, _) = self.binary(other, "mul", |a, b| a * b)?;
        Ok(self.tape.push(Op::Mul(self.id, other.id), v))
    }

    pub fn div(self, other: Self) -> Result<Self> {
        if other.with_value(|t| t.data().iter().any(|&v| v == T::zero())) {
            return Err(AutodiffError::Domain { op: "div", detail: "division by zero".into() });
        }
        let (v, _) = self.binary(other, "div", |a, b| a / b)?;
        Ok(self.tape.push(Op::Div(self.id, other.id), v))
    }

    fn unary(self, op: Op<T>, f: impl Fn(T) -> T) -> Self {
        let v = self.with_value(|t| t.map(f));
        self.tape.push(op, v)
    }

    pub fn neg(self) -> Self {
        self.unary(Op::Neg(self.id), |v| -v)
    }

    pub fn scale(self, c: T) -> Self {
        self.unary(Op::Scale(self.id, c), |v| v * c)
    }

    pub fn add_scalar(self, c: T) -> Self {
        self.unary(Op::Shift(self.id), |v| v + c)
    }

    pub fn exp(self) -> Self {
        self.unary(Op::Exp(self.id), |v| v.exp())
    }

    pub fn log(self) -> Result<Self> {
        if let Some(bad) = self.with_value(|t| t.data().iter().copied().find(|&v| !(v > T::zero()))) {
            return Err(AutodiffError::Domain { op: "log", detail: format!("nonpositive argument {bad}") });
        }
        Ok(self.unary(Op::Log(self.id), |v| v.ln()))
    }

    pub fn tanh(self) -> Self {
        self.unary(Op::Tanh(self.id), |v| v.tanh())
    }

    pub fn elu(self) -> Self {
        self.unary(Op::Elu(self.id), elu)
    }

    pub fn softplus(self) -> Self {
        self.unary(Op::Softplus(self.id), softplus)
    }

    pub fn broadcast_to(self, shape: &[usize]) -> Result<Self> {
        let v = self.with_value(|t| {
            match broadcast_shape(t.shape(), shape) {
                Some(s) if s == shape => {
                    let map = broadcast_map(t.shape(), shape);
                    Ok(Tensor::new(shape.to_vec(), map.iter().map(|&i| t.data()[i]).collect())?)
                }
                _ => Err(AutodiffError::Shape { op: "broadcast", a: t.shape().to_vec(), b: shape.to_vec() }),
            }
        })?;
        Ok(self.tape.push(Op::Broadcast(self.id), v))
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Self> {
        let v = self.with_value(|t| t.reshaped(shape))?;
        Ok(self.tape.push(Op::Reshape(self.id), v))
    }

    pub fn permute(self, perm: &[usize]) -> Result<Self> {
        let v = self.with_value(|t| {
            let mut seen = vec![false; t.rank()];
            if perm.len() != t.rank() || perm.iter().any(|&p| p >= t.rank() || std::mem::replace(&mut seen[p], true)) {
                return Err(AutodiffError::Shape { op: "permute", a: t.shape().to_vec(), b: perm.to_vec() });
            }
            Ok(permute_raw(t, perm))
        })?;
        Ok(self.tape.push(Op::Permute(self.id, perm.to_vec()), v))
    }

    /// Swaps the last two axes.
    pub fn transpose(self) -> Result<Self> {
        let r = self.shape().len();
        if r < 2 {
            return Err(AutodiffError::Axis { op: "transpose", axis: 1, rank: r });
        }
        let mut perm: Vec<usize> = (0..r).collect();
        perm.swap(r - 2, r - 1);
        self.permute(&perm)
    }

    fn check_axis(&self, op: &'static str, axis: usize) -> Result<Vec<usize>> {
        let shape = self.shape();
        if axis >= shape.len() {
            return Err(AutodiffError::Axis { op, axis, rank: shape.len() });
        }
        Ok(shape)
    }

    pub fn slice(self, axis: usize, start: usize, end: usize) -> Result<Self> {
        let shape = self.check_axis("slice", axis)?;
        if start > end || end > shape[axis] {
            return Err(AutodiffError::Shape { op: "slice", a: shape, b: vec![start, end] });
        }
        let (outer, len, inner) = axis_split(&shape, axis);
        let w = end - start;
        let v = self.with_value(|t| {
            let mut data = Vec::with_capacity(outer * w * inner);
            for o in 0..outer {
                let s = (o * len + start) * inner;
                data.extend_from_slice(&t.data()[s..s + w * inner]);
            }
            let mut out_shape = shape.clone();
            out_shape[axis] = w;
            Tensor::new(out_shape, data)
        })?;
        Ok(self.tape.push(Op::Slice { x: self.id, axis, start }, v))
    }

    pub fn concat(parts: &[Self], axis: usize) -> Result<Self> {
        let first = parts.first().ok_or(AutodiffError::Empty("concat"))?;
        let tape = first.tape;
        let base = first.check_axis("concat", axis)?;
        let nodes = tape.nodes.borrow();
        let mut total = 0;
        for p in parts {
            let s = nodes[p.id].value.shape();
            let compatible = s.len() == base.len() && s.iter().zip(&base).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(AutodiffError::Shape { op: "concat", a: base.clone(), b: s.to_vec() });
            }
            total += s[axis];
        }
        let (outer, _, inner) = axis_split(&base, axis);
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for p in parts {
                let t = &nodes[p.id].value;
                let w = t.shape()[axis];
                let s = o * w * inner;
                data.extend_from_slice(&t.data()[s..s + w * inner]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let v = Tensor::new(shape, data)?;
        drop(nodes);
        Ok(tape.push(Op::Concat { xs: parts.iter().map(|p| p.id).collect(), axis }, v))
    }

    pub fn matmul(self, other: Self) -> Result<Self> {
        let v = {
            let nodes = self.tape.nodes.borrow();
            let (a, b) = (&nodes[self.id].value, &nodes[other.id].value);
            let (batch, m, k, n, shared) = matmul_shapes(a.shape(), b.shape()).ok_or_else(|| AutodiffError::Shape {
                op: "matmul",
                a: a.shape().to_vec(),
                b: b.shape().to_vec(),
            })?;
            let mut out = vec![T::zero(); batch * m * n];
            for bi in 0..batch {
                let boff = if shared { 0 } else { bi * k * n };
                gemm(
                    &a.data()[bi * m * k..(bi + 1) * m * k],
                    &b.data()[boff..boff + k * n],
                    &mut out[bi * m * n..(bi + 1) * m * n],
                    m,
                    k,
                    n,
                );
            }
            let mut shape = a.shape()[..a.rank() - 2].to_vec();
            shape.extend([m, n]);
            Tensor::new(shape, out)?
        };
        Ok(self.tape.push(Op::MatMul(self.id, other.id), v))
    }

    /// Sum over `axis`, which is removed from the shape.
    pub fn sum_axis(self, axis: usize) -> Result<Self> {
        let shape = self.check_axis("sum", axis)?;
        let (outer, len, inner) = axis_split(&shape, axis);
        let v = self.with_value(|t| {
            let d = t.data();
            let mut out = vec![T::zero(); outer * inner];
            for o in 0..outer {
                for j in 0..len {
                    for i in 0..inner {
                        out[o * inner + i] += d[(o * len + j) * inner + i];
                    }
                }
            }
            let mut s = shape.clone();
            s.remove(axis);
            Tensor::new(s, out)
        })?;
        Ok(self.tape.push(Op::Sum { x: self.id, axis }, v))
    }

    pub fn mean_axis(self, axis: usize) -> Result<Self> {
        let n = self.check_axis("mean", axis)?[axis];
        Ok(self.sum_axis(axis)?.scale(T::one() / T::lit(n as f64)))
    }

    pub fn sum(self) -> Self {
        let v = self.with_value(|t| Tensor::scalar(t.data().iter().copied().sum()));
        self.tape.push(Op::SumAll(self.id), v)
    }

    pub fn mean(self) -> Self {
        let n = self.with_value(|t| t.len());
        self.sum().scale(T::one() / T::lit(n as f64))
    }

    pub fn softmax(self, axis: usize) -> Result<Self> {
        let shape = self.check_axis("softmax", axis)?;
        let (outer, len, inner) = axis_split(&shape, axis);
        let v = self.with_value(|t| {
            let d = t.data();
            let mut out = vec![T::zero(); d.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let at = |j: usize| (o * len + j) * inner + i;
                    let mx = (0..len).map(|j| d[at(j)]).fold(T::neg_infinity(), T::max);
                    if mx == T::neg_infinity() {
                        return Err(AutodiffError::AllMasked);
                    }
                    let mut z = T::zero();
                    for j in 0..len {
                        let e = (d[at(j)] - mx).exp();
                        out[at(j)] = e;
                        z += e;
                    }
                    for j in 0..len {
                        out[at(j)] = out[at(j)] / z;
                    }
                }
            }
            Tensor::new(shape.clone(), out)
        })?;
        Ok(self.tape.push(Op::Softmax { x: self.id, axis }, v))
    }

    /// Sets hidden positions to `-inf`.
    pub fn masked_fill(self, mask: &Mask) -> Result<Self> {
        let shape = self.shape();
        match broadcast_shape(&mask.shape, &shape) {
            Some(s) if s == shape => {}
            _ => return Err(AutodiffError::Shape { op: "masked_fill", a: shape, b: mask.shape.clone() }),
        }
        let map = broadcast_map(&mask.shape, &shape);
        let hidden: Vec<bool> = map.iter().map(|&i| mask.data[i]).collect();
        let v = self.with_value(|t| {
            let d = t.data().iter().zip(&hidden).map(|(&v, &h)| if h { T::neg_infinity() } else { v }).collect();
            Tensor::new(shape.clone(), d)
        })?;
        Ok(self.tape.push(Op::MaskedFill { x: self.id, hidden }, v))
    }

    /// Normalizes over the last axis, then applies `gamma`, `beta` (both
    /// `[dim]`). A row with no spread normalizes to exact zeros.
    pub fn layer_norm(self, gamma: Self, beta: Self, eps: T) -> Result<Self> {
        let shape = self.shape();
        let dim = *shape.last().ok_or(AutodiffError::Axis { op: "layer_norm", axis: 0, rank: 0 })?;
        for p in [gamma, beta] {
            if p.shape() != [dim] {
                return Err(AutodiffError::Shape { op: "layer_norm", a: shape.clone(), b: p.shape() });
            }
        }
        let nodes = self.tape.nodes.borrow();
        let x = nodes[self.id].value.data();
        let (gv, bv) = (nodes[gamma.id].value.data(), nodes[beta.id].value.data());
        let rows = x.len() / dim;
        let nd = T::lit(dim as f64);
        let mut xhat = vec![T::zero(); x.len()];
        let mut rstd = vec![T::zero(); rows];
        let mut out = vec![T::zero(); x.len()];
        for r in 0..rows {
            let row = &x[r * dim..(r + 1) * dim];
            let mean = row.iter().copied().sum::<T>() / nd;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / nd;
            rstd[r] = T::one() / (var + eps).sqrt();
            let flat = row.iter().all(|&v| v == row[0]);
            for j in 0..dim {
                let h = if flat { T::zero() } else { (row[j] - mean) * rstd[r] };
                xhat[r * dim + j] = h;
                out[r * dim + j] = h * gv[j] + bv[j];
            }
        }
        drop(nodes);
        let v = Tensor::new(shape, out)?;
        Ok(self.tape.push(Op::LayerNorm { x: self.id, gamma: gamma.id, beta: beta.id, xhat, rstd }, v))
    }

    /// Inverted dropout. Identity on evaluation tapes and at `rate == 0`.
    pub fn dropout(self, rate: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&rate) {
            return Err(AutodiffError::Domain { op: "dropout", detail: format!("rate {rate} outside [0, 1)") });
        }
        if !self.tape.train || rate == 0.0 {
            return Ok(self);
        }
        let n = self.with_value(|t| t.len());
        let keep = T::lit(1.0 / (1.0 - rate));
        let scale: Vec<T> = {
            let mut rng = self.tape.rng.borrow_mut();
            let rng = rng.as_mut().ok_or(AutodiffError::Domain { op: "dropout", detail: "training tape without rng".into() })?;
            (0..n).map(|_| if rng.uniform() < rate { T::zero() } else { keep }).collect()
        };
        let v = self.with_value(|t| {
            Tensor::new(t.shape().to_vec(), t.data().iter().zip(&scale).map(|(&v, &s)| v * s).collect())
        })?;
        Ok(self.tape.push(Op::Dropout { x: self.id, scale }, v))
    }
}
