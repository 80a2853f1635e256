//! Scalar reverse-mode tape.
//!
//! Every primitive records its local partial derivatives at forward time, so the
//! backward sweep is a single pass over the edge list in reverse node order.
//! A [`Tape`] built with [`Tape::detached`] evaluates the same code without
//! recording anything, which is how inference and finite-difference probes run.

use std::cell::{Cell, RefCell};
use std::ops::{Add, Div, Mul, Neg, Sub};

use super::tensor::{ParamId, ParamStore};
use super::DiffError;

const NO_NODE: u32 = u32::MAX;

#[derive(Clone, Copy, Debug)]
struct Edge {
    parent: u32,
    partial: f64,
}

#[derive(Clone, Copy, Debug)]
struct Span {
    start: u32,
    len: u32,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct Leaf {
    pub node: u32,
    pub param: ParamId,
    pub index: u32,
}

/// First non-finite value seen while recording.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Fault {
    pub primitive: &'static str,
    pub operand: usize,
}

#[derive(Default)]
struct Inner {
    spans: Vec<Span>,
    edges: Vec<Edge>,
    leaves: Vec<Leaf>,
}

/// Wengert list of executed primitives.
pub struct Tape {
    recording: bool,
    inner: RefCell<Inner>,
    fault: Cell<Option<Fault>>,
    consumed: Cell<bool>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            recording: true,
            inner: RefCell::new(Inner::default()),
            fault: Cell::new(None),
            consumed: Cell::new(false),
        }
    }

    /// A tape that evaluates values only. Every variable it hands out is a constant.
    pub fn detached() -> Self {
        Self {
            recording: false,
            ..Self::new()
        }
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    /// Drops all recorded nodes but keeps the allocations.
    pub fn reset(&mut self) {
        let inner = self.inner.get_mut();
        inner.spans.clear();
        inner.edges.clear();
        inner.leaves.clear();
        self.fault.set(None);
        self.consumed.set(false);
    }

    pub fn len(&self) -> usize {
        self.inner.borrow().spans.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn fault(&self) -> Option<Fault> {
        self.fault.get()
    }

    pub fn constant(&self, val: f64) -> Var<'_> {
        if !val.is_finite() {
            self.note_fault("constant", 0);
        }
        Var {
            tape: self,
            id: NO_NODE,
            val,
        }
    }

    /// Free leaf that is not tied to any parameter tensor.
    pub fn var(&self, val: f64) -> Var<'_> {
        if !val.is_finite() {
            self.note_fault("leaf", 0);
        }
        if !self.recording {
            return self.constant(val);
        }
        let id = self.push_node(std::iter::empty());
        Var {
            tape: self,
            id,
            val,
        }
    }

    /// Reads entry `index` of parameter `param` as a leaf.
    pub fn param(&self, store: &ParamStore, param: ParamId, index: usize) -> Var<'_> {
        let tensor = store.get(param);
        let val = tensor.values()[index];
        if !self.recording || !tensor.requires_grad() {
            return self.constant(val);
        }
        let id = self.push_node(std::iter::empty());
        self.inner.borrow_mut().leaves.push(Leaf {
            node: id,
            param,
            index: index as u32,
        });
        Var {
            tape: self,
            id,
            val,
        }
    }

    pub(crate) fn node_var(&self, index: usize, val: f64) -> Var<'_> {
        Var {
            tape: self,
            id: index as u32,
            val,
        }
    }

    fn note_fault(&self, primitive: &'static str, operand: usize) {
        if self.fault.get().is_none() {
            self.fault.set(Some(Fault { primitive, operand }));
        }
    }

    fn push_node(&self, parents: impl Iterator<Item = (u32, f64)>) -> u32 {
        let mut inner = self.inner.borrow_mut();
        let start = inner.edges.len() as u32;
        inner.edges.extend(
            parents
                .filter(|&(p, _)| p != NO_NODE)
                .map(|(parent, partial)| Edge { parent, partial }),
        );
        let len = inner.edges.len() as u32 - start;
        let id = inner.spans.len() as u32;
        inner.spans.push(Span { start, len });
        id
    }

    fn unary(&self, op: &'static str, a: Var<'_>, val: f64, da: f64) -> Var<'_> {
        if !val.is_finite() {
            self.note_fault(op, 0);
        }
        let id = if self.recording && a.id != NO_NODE {
            self.push_node(std::iter::once((a.id, da)))
        } else {
            NO_NODE
        };
        Var { tape: self, id, val }
    }

    fn binary(
        &self,
        op: &'static str,
        a: Var<'_>,
        b: Var<'_>,
        val: f64,
        da: f64,
        db: f64,
    ) -> Var<'_> {
        if !val.is_finite() {
            let operand = if !a.val.is_finite() {
                0
            } else if !b.val.is_finite() {
                1
            } else if op == "div" {
                1
            } else {
                0
            };
            self.note_fault(op, operand);
        }
        let id = if self.recording && (a.id != NO_NODE || b.id != NO_NODE) {
            self.push_node([(a.id, da), (b.id, db)].into_iter())
        } else {
            NO_NODE
        };
        Var { tape: self, id, val }
    }

    /// Records a node with an arbitrary number of parents and precomputed partials.
    ///
    /// This is how fused kernels (interpolation, rasterization losses, selection)
    /// plug their hand-derived adjoints into the tape.
    pub fn custom<'t>(
        &'t self,
        op: &'static str,
        val: f64,
        parents: impl IntoIterator<Item = (Var<'t>, f64)>,
    ) -> Var<'t> {
        if !val.is_finite() {
            self.note_fault(op, 0);
        }
        let id = if self.recording {
            // Collected first: building the parents may itself record leaves.
            let parents: Vec<(u32, f64)> = parents.into_iter().map(|(v, d)| (v.id, d)).collect();
            let any = parents.iter().any(|&(p, _)| p != NO_NODE);
            let id = self.push_node(parents.into_iter());
            if any {
                id
            } else {
                // nothing to differentiate through; the node stays but is unreachable
                NO_NODE
            }
        } else {
            NO_NODE
        };
        Var { tape: self, id, val }
    }

    pub fn sum<'t>(&'t self, xs: &[Var<'t>]) -> Var<'t> {
        let val = xs.iter().fold(0.0, |acc, x| acc + x.val);
        self.custom("sum", val, xs.iter().map(|&x| (x, 1.0)))
    }

    /// Inner product with constant weights.
    pub fn dot_const<'t>(&'t self, xs: &[Var<'t>], weights: &[f64]) -> Var<'t> {
        debug_assert_eq!(xs.len(), weights.len());
        let val = xs
            .iter()
            .zip(weights)
            .fold(0.0, |acc, (x, w)| acc + x.val * w);
        self.custom("dot", val, xs.iter().zip(weights).map(|(&x, &w)| (x, w)))
    }

    /// Inner product of two variable vectors.
    pub fn dot<'t>(&'t self, xs: &[Var<'t>], ys: &[Var<'t>]) -> Var<'t> {
        debug_assert_eq!(xs.len(), ys.len());
        let val = xs.iter().zip(ys).fold(0.0, |acc, (x, y)| acc + x.val * y.val);
        self.custom(
            "dot",
            val,
            xs.iter()
                .zip(ys)
                .flat_map(|(&x, &y)| [(x, y.val), (y, x.val)]),
        )
    }

    /// Selects `xs[index]`.
    pub fn gather<'t>(&'t self, xs: &[Var<'t>], index: usize) -> Var<'t> {
        let x = xs[index];
        self.unary("gather", x, x.val, 1.0)
    }

    /// Softmax with max subtraction. Each output depends on every input.
    pub fn softmax<'t>(&'t self, xs: &[Var<'t>]) -> Vec<Var<'t>> {
        let probs = softmax_values(xs.iter().map(|x| x.val));
        (0..xs.len())
            .map(|i| {
                let si = probs[i];
                self.custom(
                    "softmax",
                    si,
                    xs.iter().enumerate().map(|(j, &x)| {
                        let kron = if i == j { 1.0 } else { 0.0 };
                        (x, si * (kron - probs[j]))
                    }),
                )
            })
            .collect()
    }

    /// Maximum over a slice; ties go to the lowest index, which receives the whole gradient.
    pub fn max_all<'t>(&'t self, xs: &[Var<'t>]) -> Var<'t> {
        let idx = argmax(xs.iter().map(|x| x.val));
        self.gather(xs, idx)
    }

    /// Reverse sweep from `root`. A tape can be swept once.
    pub fn backward(&self, root: Var<'_>) -> Result<Gradients, DiffError> {
        if self.consumed.get() {
            return Err(DiffError::DeadTape);
        }
        if let Some(f) = self.fault.get() {
            return Err(DiffError::NonFinite {
                primitive: f.primitive,
                operand: f.operand,
            });
        }
        self.consumed.set(true);
        let mut inner = self.inner.borrow_mut();
        let mut adj = vec![0.0; inner.spans.len()];
        if root.id != NO_NODE {
            adj[root.id as usize] = 1.0;
            for i in (0..=root.id as usize).rev() {
                let g = adj[i];
                if g == 0.0 {
                    continue;
                }
                let span = inner.spans[i];
                for e in &inner.edges[span.start as usize..(span.start + span.len) as usize] {
                    adj[e.parent as usize] += e.partial * g;
                }
            }
        }
        let leaves = std::mem::take(&mut inner.leaves);
        Ok(Gradients { adj, leaves })
    }
}

/// Softmax of plain values, with max subtraction.
pub fn softmax_values(xs: impl Iterator<Item = f64> + Clone) -> Vec<f64> {
    let m = xs.clone().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = xs.map(|x| (x - m).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|v| v / z).collect()
}

/// Index of the largest value, lowest index on ties.
pub fn argmax(xs: impl Iterator<Item = f64>) -> usize {
    let mut best = 0;
    let mut best_val = f64::NEG_INFINITY;
    for (i, x) in xs.enumerate() {
        if i == 0 || x > best_val {
            best = i;
            best_val = x;
        }
    }
    best
}

/// Adjoints produced by one backward sweep.
#[derive(Debug, Clone)]
pub struct Gradients {
    adj: Vec<f64>,
    leaves: Vec<Leaf>,
}

impl Gradients {
    /// d(root)/d(v). Zero for constants.
    pub fn wrt(&self, v: Var<'_>) -> f64 {
        if v.id == NO_NODE {
            0.0
        } else {
            self.adj[v.id as usize]
        }
    }

    /// Adds parameter adjoints into the store's gradient buffers, in leaf order.
    pub fn accumulate(&self, store: &mut ParamStore) {
        for leaf in &self.leaves {
            let g = self.adj[leaf.node as usize];
            if g != 0.0 {
                store.get_mut(leaf.param).grad_mut()[leaf.index as usize] += g;
            }
        }
    }

    /// Parameter adjoints as an ordered sparse list, for merging across workers.
    pub fn into_sparse(self) -> SparseGrad {
        let entries = self
            .leaves
            .iter()
            .filter_map(|leaf| {
                let g = self.adj[leaf.node as usize];
                (g != 0.0).then_some((leaf.param, leaf.index, g))
            })
            .collect();
        SparseGrad { entries }
    }
}

/// Ordered list of `(param, index, adjoint)` contributions.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SparseGrad {
    pub entries: Vec<(ParamId, u32, f64)>,
}

impl SparseGrad {
    pub fn apply(&self, store: &mut ParamStore) {
        self.apply_scaled(store, 1.0);
    }

    pub fn apply_scaled(&self, store: &mut ParamStore, scale: f64) {
        for &(p, i, g) in &self.entries {
            store.get_mut(p).grad_mut()[i as usize] += g * scale;
        }
    }

    pub fn extend(&mut self, other: SparseGrad) {
        self.entries.extend(other.entries);
    }
}

/// A scalar on a tape.
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: u32,
    val: f64,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        if self.id == NO_NODE {
            write!(f, "Var(const {})", self.val)
        } else {
            write!(f, "Var(#{} = {})", self.id, self.val)
        }
    }
}

impl<'t> Var<'t> {
    #[inline]
    pub fn val(self) -> f64 {
        self.val
    }

    pub fn tape(self) -> &'t Tape {
        self.tape
    }

    /// True when no gradient can flow through this value.
    pub fn is_constant(self) -> bool {
        self.id == NO_NODE
    }

    /// Same value, cut from the graph.
    pub fn detach(self) -> Var<'t> {
        self.tape.constant(self.val)
    }

    pub fn cst(self, c: f64) -> Var<'t> {
        self.tape.constant(c)
    }

    pub fn exp(self) -> Self {
        let e = self.val.exp();
        self.tape.unary("exp", self, e, e)
    }

    /// exp(x) - 1 without cancellation near zero.
    pub fn exp_m1(self) -> Self {
        self.tape
            .unary("exp_m1", self, self.val.exp_m1(), self.val.exp())
    }

    pub fn ln(self) -> Self {
        self.tape.unary("log", self, self.val.ln(), 1.0 / self.val)
    }

    /// ln(1 + x) without cancellation near zero.
    pub fn ln_1p(self) -> Self {
        self.tape
            .unary("log1p", self, self.val.ln_1p(), 1.0 / (1.0 + self.val))
    }

    pub fn sqrt(self) -> Self {
        let s = self.val.sqrt();
        self.tape.unary("sqrt", self, s, 0.5 / s)
    }

    pub fn square(self) -> Self {
        self.tape
            .unary("square", self, self.val * self.val, 2.0 * self.val)
    }

    pub fn powi(self, n: i32) -> Self {
        let d = n as f64 * self.val.powi(n - 1);
        self.tape.unary("powi", self, self.val.powi(n), d)
    }

    pub fn sin(self) -> Self {
        self.tape
            .unary("sin", self, self.val.sin(), self.val.cos())
    }

    pub fn cos(self) -> Self {
        self.tape
            .unary("cos", self, self.val.cos(), -self.val.sin())
    }

    pub fn tanh(self) -> Self {
        let t = self.val.tanh();
        self.tape.unary("tanh", self, t, 1.0 - t * t)
    }

    pub fn sigmoid(self) -> Self {
        let s = sigmoid(self.val);
        self.tape.unary("sigmoid", self, s, s * (1.0 - s))
    }

    pub fn softplus(self) -> Self {
        self.tape
            .unary("softplus", self, softplus(self.val), sigmoid(self.val))
    }

    pub fn relu(self) -> Self {
        if self.val > 0.0 {
            self.tape.unary("relu", self, self.val, 1.0)
        } else {
            self.tape.unary("relu", self, 0.0, 0.0)
        }
    }

    pub fn abs(self) -> Self {
        let d = if self.val < 0.0 { -1.0 } else { 1.0 };
        self.tape.unary("abs", self, self.val.abs(), d)
    }

    /// Clamp with gradient 1 inside `[lo, hi]` (inclusive) and 0 outside.
    pub fn clamp(self, lo: f64, hi: f64) -> Self {
        if self.val < lo {
            self.tape.unary("clamp", self, lo, 0.0)
        } else if self.val > hi {
            self.tape.unary("clamp", self, hi, 0.0)
        } else {
            self.tape.unary("clamp", self, self.val, 1.0)
        }
    }

    /// Larger operand; on ties the receiver wins.
    pub fn max(self, other: Var<'t>) -> Self {
        if self.val >= other.val {
            self.tape.binary("max", self, other, self.val, 1.0, 0.0)
        } else {
            self.tape.binary("max", self, other, other.val, 0.0, 1.0)
        }
    }

    /// Smaller operand; on ties the receiver wins.
    pub fn min(self, other: Var<'t>) -> Self {
        if self.val <= other.val {
            self.tape.binary("min", self, other, self.val, 1.0, 0.0)
        } else {
            self.tape.binary("min", self, other, other.val, 0.0, 1.0)
        }
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[inline]
pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x + (-x).exp()
    } else {
        x.exp().ln_1p()
    }
}

/// Inverse of [`sigmoid`].
pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

impl<'t> Add for Var<'t> {
    type Output = Var<'t>;
    fn add(self, rhs: Var<'t>) -> Var<'t> {
        self.tape
            .binary("add", self, rhs, self.val + rhs.val, 1.0, 1.0)
    }
}

impl<'t> Sub for Var<'t> {
    type Output = Var<'t>;
    fn sub(self, rhs: Var<'t>) -> Var<'t> {
        self.tape
            .binary("sub", self, rhs, self.val - rhs.val, 1.0, -1.0)
    }
}

impl<'t> Mul for Var<'t> {
    type Output = Var<'t>;
    fn mul(self, rhs: Var<'t>) -> Var<'t> {
        self.tape
            .binary("mul", self, rhs, self.val * rhs.val, rhs.val, self.val)
    }
}

impl<'t> Div for Var<'t> {
    type Output = Var<'t>;
    fn div(self, rhs: Var<'t>) -> Var<'t> {
        let q = self.val / rhs.val;
        self.tape
            .binary("div", self, rhs, q, 1.0 / rhs.val, -q / rhs.val)
    }
}

impl<'t> Neg for Var<'t> {
    type Output = Var<'t>;
    fn neg(self) -> Var<'t> {
        self.tape.unary("neg", self, -self.val, -1.0)
    }
}

impl<'t> Add<f64> for Var<'t> {
    type Output = Var<'t>;
    fn add(self, rhs: f64) -> Var<'t> {
        self.tape.unary("add", self, self.val + rhs, 1.0)
    }
}

impl<'t> Sub<f64> for Var<'t> {
    type Output = Var<'t>;
    fn sub(self, rhs: f64) -> Var<'t> {
        self.tape.unary("sub", self, self.val - rhs, 1.0)
    }
}

impl<'t> Mul<f64> for Var<'t> {
    type Output = Var<'t>;
    fn mul(self, rhs: f64) -> Var<'t> {
        self.tape.unary("mul", self, self.val * rhs, rhs)
    }
}

impl<'t> Div<f64> for Var<'t> {
    type Output = Var<'t>;
    fn div(self, rhs: f64) -> Var<'t> {
        self.tape.unary("div", self, self.val / rhs, 1.0 / rhs)
    }
}

impl<'t> Add<Var<'t>> for f64 {
    type Output = Var<'t>;
    fn add(self, rhs: Var<'t>) -> Var<'t> {
        rhs + self
    }
}

impl<'t> Sub<Var<'t>> for f64 {
    type Output = Var<'t>;
    fn sub(self, rhs: Var<'t>) -> Var<'t> {
        rhs.tape.unary("sub", rhs, self - rhs.val, -1.0)
    }
}

impl<'t> Mul<Var<'t>> for f64 {
    type Output = Var<'t>;
    fn mul(self, rhs: Var<'t>) -> Var<'t> {
        rhs * self
    }
}

impl<'t> Div<Var<'t>> for f64 {
    type Output = Var<'t>;
    fn div(self, rhs: Var<'t>) -> Var<'t> {
        let q = self / rhs.val;
        rhs.tape.unary("div", rhs, q, -q / rhs.val)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diff::ParamTensor;

    #[test]
    fn square_value_and_grad() {
        let tape = Tape::new();
        let x = tape.var(3.0);
        let y = x * x;
        assert_eq!(y.val(), 9.0);
        let g = tape.backward(y).unwrap();
        assert_eq!(g.wrt(x), 6.0);
    }

    #[test]
    fn exp_and_sigmoid_at_zero() {
        let tape = Tape::new();
        let x = tape.var(0.0);
        let y = x.exp();
        assert_eq!(y.val(), 1.0);
        assert_eq!(tape.backward(y).unwrap().wrt(x), 1.0);

        let tape = Tape::new();
        let x = tape.var(0.0);
        let y = x.sigmoid();
        assert_eq!(y.val(), 0.5);
        assert_eq!(tape.backward(y).unwrap().wrt(x), 0.25);
    }

    #[test]
    fn sum_of_vector_gives_unit_grads() {
        let tape = Tape::new();
        let xs: Vec<_> = [1.0, 2.0, 3.0].iter().map(|&v| tape.var(v)).collect();
        let s = tape.sum(&xs);
        assert_eq!(s.val(), 6.0);
        let g = tape.backward(s).unwrap();
        for x in xs {
            assert_eq!(g.wrt(x), 1.0);
        }
    }

    #[test]
    fn softmax_gather_grads() {
        // s = softmax([0, 0]); root = s[0]; ds0/dx = (0.25, -0.25)
        let tape = Tape::new();
        let xs = [tape.var(0.0), tape.var(0.0)];
        let s = tape.softmax(&xs);
        let root = tape.gather(&s, 0);
        assert_eq!(root.val(), 0.5);
        let g = tape.backward(root).unwrap();
        assert_eq!(g.wrt(xs[0]), 0.25);
        assert_eq!(g.wrt(xs[1]), -0.25);
    }

    #[test]
    fn independent_param_has_zero_grad() {
        let mut store = ParamStore::new();
        let a = store.add(ParamTensor::new("a", &[1], vec![2.0]).unwrap());
        let b = store.add(ParamTensor::new("b", &[1], vec![5.0]).unwrap());
        let tape = Tape::new();
        let x = tape.param(&store, a, 0);
        let _unused = tape.param(&store, b, 0);
        let y = x * x;
        let g = tape.backward(y).unwrap();
        g.accumulate(&mut store);
        assert_eq!(store.get(a).grad(), &[4.0]);
        assert_eq!(store.get(b).grad(), &[0.0]);
    }

    #[test]
    fn backward_twice_is_an_error() {
        let tape = Tape::new();
        let x = tape.var(1.0);
        let y = x * 2.0;
        tape.backward(y).unwrap();
        assert!(matches!(tape.backward(y), Err(DiffError::DeadTape)));
    }

    #[test]
    fn non_finite_is_reported_with_primitive() {
        let tape = Tape::new();
        let x = tape.var(0.0);
        let y = x.ln();
        let z = y * 2.0;
        match tape.backward(z) {
            Err(DiffError::NonFinite { primitive, operand }) => {
                assert_eq!(primitive, "log");
                assert_eq!(operand, 0);
            }
            other => panic!("unexpected {other:?}"),
        }

        let tape = Tape::new();
        let a = tape.var(1.0);
        let b = tape.var(0.0);
        let q = a / b;
        match tape.backward(q) {
            Err(DiffError::NonFinite { primitive, operand }) => {
                assert_eq!((primitive, operand), ("div", 1));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn max_ties_route_to_lowest_index() {
        let tape = Tape::new();
        let xs = [tape.var(1.0), tape.var(3.0), tape.var(3.0)];
        let m = tape.max_all(&xs);
        let g = tape.backward(m).unwrap();
        assert_eq!(
            [g.wrt(xs[0]), g.wrt(xs[1]), g.wrt(xs[2])],
            [0.0, 1.0, 0.0]
        );
        assert_eq!(argmax([2.0, 2.0, 2.0].into_iter()), 0);
    }

    #[test]
    fn detached_tape_records_nothing() {
        let tape = Tape::detached();
        let x = tape.var(2.0);
        let y = (x * x).exp();
        assert!(y.is_constant());
        assert_eq!(tape.len(), 0);
        assert_eq!(y.val(), 4.0f64.exp());
    }

    #[test]
    fn reset_rearms_the_tape() {
        let mut tape = Tape::new();
        {
            let x = tape.var(1.0);
            tape.backward(x * 3.0).unwrap();
        }
        tape.reset();
        let x = tape.var(2.0);
        let g = tape.backward(x * x).unwrap();
        assert_eq!(g.wrt(x), 4.0);
    }
}
