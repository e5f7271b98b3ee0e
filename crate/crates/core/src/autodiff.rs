//! Define-by-run reverse-mode automatic differentiation.
//!
//! A [`Tape`] records every operation in execution order. Nodes hold their
//! forward value plus a [`Backward`] implementation; [`Tape::backward`] walks
//! the nodes once in reverse recording order and accumulates gradients into
//! every leaf that requires them. A tape supports exactly one backward pass.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Shape, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Everything a backward rule may look at.
pub struct BackwardCtx<'a, T> {
    pub inputs: &'a [&'a Tensor<T>],
    pub output: &'a Tensor<T>,
    pub grad: &'a Tensor<T>,
    /// `needs_grad[i]` is false when input `i` does not lead to any leaf that
    /// requires a gradient; rules may skip that input's computation.
    pub needs_grad: &'a [bool],
}

/// Vector-Jacobian product of one recorded operation.
pub trait Backward<T: Scalar>: Send {
    fn name(&self) -> &'static str;

    /// Returns one entry per input: the gradient of the loss with respect to
    /// that input, or `None` when it was not requested.
    fn backward(&self, ctx: &BackwardCtx<'_, T>) -> Vec<Option<Tensor<T>>>;
}

struct Node<T: Scalar> {
    value: Tensor<T>,
    inputs: Vec<Var>,
    rule: Option<Box<dyn Backward<T>>>,
    requires_grad: bool,
    name: Option<String>,
}

/// Recorded computation graph.
pub struct Tape<T: Scalar> {
    nodes: Vec<Node<T>>,
    grad_enabled: bool,
    consumed: bool,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new(), grad_enabled: true, consumed: false }
    }

    /// A tape that never records backward rules; parameters are plain constants.
    pub fn inference() -> Self {
        Tape { nodes: Vec::new(), grad_enabled: false, consumed: false }
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, node: Node<T>) -> Var {
        self.nodes.push(node);
        Var(self.nodes.len() - 1)
    }

    /// Input leaf; gets a gradient only if `requires_grad` and the tape records.
    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        let requires_grad = requires_grad && self.grad_enabled;
        self.push(Node { value, inputs: Vec::new(), rule: None, requires_grad, name: None })
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    /// Named trainable leaf. Its gradient is reported under `name`.
    pub fn param(&mut self, name: impl Into<String>, value: Tensor<T>) -> Var {
        let requires_grad = self.grad_enabled;
        self.push(Node { value, inputs: Vec::new(), rule: None, requires_grad, name: Some(name.into()) })
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> Shape {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Records the result of an operation. Fails if `value` holds NaN or Inf.
    pub fn record<B: Backward<T> + 'static>(&mut self, value: Tensor<T>, inputs: &[Var], rule: B) -> Result<Var> {
        if !value.all_finite() {
            return Err(Error::NonFinite { op: rule.name() });
        }
        let requires_grad = self.grad_enabled && inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        let rule: Option<Box<dyn Backward<T>>> = if requires_grad { Some(Box::new(rule)) } else { None };
        Ok(self.push(Node { value, inputs: inputs.to_vec(), rule, requires_grad, name: None }))
    }

    /// Reverse pass from a `(1, 1, 1, 1)` loss.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients<T>> {
        if self.consumed {
            return Err(Error::GraphConsumed);
        }
        if self.nodes.is_empty() {
            return Err(Error::EmptyGraph);
        }
        let loss_shape = self.shape(loss);
        if loss_shape != Shape::scalar() {
            return Err(Error::NonScalarLoss(loss_shape));
        }
        self.consumed = true;

        let count = loss.0 + 1;
        let mut reachable = vec![false; count];
        reachable[loss.0] = true;
        for i in (0..count).rev() {
            if reachable[i] && self.nodes[i].requires_grad {
                for v in &self.nodes[i].inputs {
                    reachable[v.0] = true;
                }
            }
        }

        let mut grads: Vec<Option<Tensor<T>>> = (0..count).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::ones(Shape::scalar()));
        for i in (0..count).rev() {
            let node = &self.nodes[i];
            let Some(rule) = node.rule.as_ref() else { continue };
            let Some(grad) = grads[i].take() else { continue };
            let inputs: Vec<&Tensor<T>> = node.inputs.iter().map(|v| &self.nodes[v.0].value).collect();
            let needs: Vec<bool> = node.inputs.iter().map(|v| self.nodes[v.0].requires_grad).collect();
            let ctx = BackwardCtx { inputs: &inputs, output: &node.value, grad: &grad, needs_grad: &needs };
            let input_grads = rule.backward(&ctx);
            debug_assert_eq!(input_grads.len(), node.inputs.len(), "{} returned wrong arity", rule.name());
            for (v, g) in node.inputs.iter().zip(input_grads) {
                let Some(g) = g else { continue };
                if !self.nodes[v.0].requires_grad {
                    continue;
                }
                debug_assert_eq!(g.shape(), self.nodes[v.0].value.shape(), "{} gradient shape", rule.name());
                match &mut grads[v.0] {
                    Some(acc) => acc.add_assign(&g),
                    slot @ None => *slot = Some(g),
                }
            }
        }

        let mut by_var = BTreeMap::new();
        for (i, g) in grads.into_iter().enumerate() {
            let node = &self.nodes[i];
            if node.rule.is_none() && node.requires_grad && reachable[i] {
                by_var.insert(Var(i), g.unwrap_or_else(|| Tensor::zeros(node.value.shape())));
            }
        }
        let names = self
            .nodes
            .iter()
            .enumerate()
            .filter_map(|(i, n)| n.name.as_ref().map(|s| (s.clone(), Var(i))))
            .filter(|(_, v)| by_var.contains_key(v))
            .collect();
        // Saved values are no longer needed.
        for node in &mut self.nodes {
            node.rule = None;
        }
        Ok(Gradients { by_var, names })
    }
}

/// Leaf gradients produced by [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients<T: Scalar> {
    by_var: BTreeMap<Var, Tensor<T>>,
    names: BTreeMap<String, Var>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.by_var.get(&v)
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor<T>> {
        self.names.get(name).and_then(|v| self.by_var.get(v))
    }

    /// Named gradients in lexicographic order.
    pub fn named(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names.iter().map(|(k, v)| (k.as_str(), &self.by_var[v]))
    }

    pub fn into_named(mut self) -> BTreeMap<String, Tensor<T>> {
        let names = std::mem::take(&mut self.names);
        names.into_iter().filter_map(|(k, v)| self.by_var.remove(&v).map(|g| (k, g))).collect()
    }
}

// ---------------------------------------------------------------------------
// Elementwise arithmetic with restricted broadcasting
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BinaryOp {
    Add,
    Sub,
    Mul,
}

/// How `b` maps onto `a`: each of n, c and the (h, w) pair either matches or is 1.
#[derive(Clone, Copy, Debug)]
struct Broadcast {
    out: Shape,
    rhs: Shape,
}

impl Broadcast {
    fn new(a: Shape, b: Shape) -> Result<Self> {
        let n_ok = b.n == a.n || b.n == 1;
        let c_ok = b.c == a.c || b.c == 1;
        let hw_ok = (b.h, b.w) == (a.h, a.w) || (b.h, b.w) == (1, 1);
        if n_ok && c_ok && hw_ok {
            Ok(Broadcast { out: a, rhs: b })
        } else {
            Err(Error::shape(format!("cannot broadcast {} onto {}", b, a)))
        }
    }

    #[inline]
    fn rhs_index(&self, n: usize, c: usize, p: usize) -> usize {
        let bn = if self.rhs.n == 1 { 0 } else { n };
        let bc = if self.rhs.c == 1 { 0 } else { c };
        let bp = if self.rhs.h * self.rhs.w == 1 { 0 } else { p };
        (bn * self.rhs.c + bc) * self.rhs.plane() + bp
    }

    fn for_each(&self, mut f: impl FnMut(usize, usize)) {
        let plane = self.out.plane();
        let mut i = 0;
        for n in 0..self.out.n {
            for c in 0..self.out.c {
                for p in 0..plane {
                    f(i, self.rhs_index(n, c, p));
                    i += 1;
                }
            }
        }
    }
}

struct BinaryBackward {
    op: BinaryOp,
    bc: Broadcast,
}

impl<T: Scalar> Backward<T> for BinaryBackward {
    fn name(&self) -> &'static str {
        match self.op {
            BinaryOp::Add => "add",
            BinaryOp::Sub => "sub",
            BinaryOp::Mul => "mul",
        }
    }

    fn backward(&self, ctx: &BackwardCtx<'_, T>) -> Vec<Option<Tensor<T>>> {
        let (a, b, g) = (ctx.inputs[0], ctx.inputs[1], ctx.grad.data());
        let ga = ctx.needs_grad[0].then(|| match self.op {
            BinaryOp::Add | BinaryOp::Sub => ctx.grad.clone(),
            BinaryOp::Mul => {
                let mut out = Tensor::zeros(a.shape());
                let (o, bd) = (out.data_mut(), b.data());
                self.bc.for_each(|i, j| o[i] = g[i] * bd[j]);
                out
            }
        });
        let gb = ctx.needs_grad[1].then(|| {
            let mut out = Tensor::zeros(b.shape());
            let o = out.data_mut();
            match self.op {
                BinaryOp::Add => self.bc.for_each(|i, j| o[j] += g[i]),
                BinaryOp::Sub => self.bc.for_each(|i, j| o[j] -= g[i]),
                BinaryOp::Mul => {
                    let ad = a.data();
                    self.bc.for_each(|i, j| o[j] += g[i] * ad[i]);
                }
            }
            out
        });
        vec![ga, gb]
    }
}

/// `a ∘ b` where `b` is equal-shaped or broadcast over n, c, or the spatial plane.
pub fn elementwise<T: Scalar>(tape: &mut Tape<T>, op: BinaryOp, a: Var, b: Var) -> Result<Var> {
    let bc = Broadcast::new(tape.shape(a), tape.shape(b))?;
    let (av, bv) = (tape.value(a), tape.value(b));
    let mut out = Tensor::zeros(bc.out);
    {
        let (o, ad, bd) = (out.data_mut(), av.data(), bv.data());
        match op {
            BinaryOp::Add => bc.for_each(|i, j| o[i] = ad[i] + bd[j]),
            BinaryOp::Sub => bc.for_each(|i, j| o[i] = ad[i] - bd[j]),
            BinaryOp::Mul => bc.for_each(|i, j| o[i] = ad[i] * bd[j]),
        }
    }
    tape.record(out, &[a, b], BinaryBackward { op, bc })
}

pub fn add<T: Scalar>(tape: &mut Tape<T>, a: Var, b: Var) -> Result<Var> {
    elementwise(tape, BinaryOp::Add, a, b)
}

pub fn sub<T: Scalar>(tape: &mut Tape<T>, a: Var, b: Var) -> Result<Var> {
    elementwise(tape, BinaryOp::Sub, a, b)
}

pub fn mul<T: Scalar>(tape: &mut Tape<T>, a: Var, b: Var) -> Result<Var> {
    elementwise(tape, BinaryOp::Mul, a, b)
}

// ---------------------------------------------------------------------------
// Reductions and scaling
// ---------------------------------------------------------------------------

struct SumBackward {
    scale: f64,
}

impl<T: Scalar> Backward<T> for SumBackward {
    fn name(&self) -> &'static str {
        "sum"
    }

    fn backward(&self, ctx: &BackwardCtx<'_, T>) -> Vec<Option<Tensor<T>>> {
        let g = ctx.grad.data()[0] * T::lit(self.scale);
        vec![Some(Tensor::full(ctx.inputs[0].shape(), g))]
    }
}

/// Sum of all elements, shape `(1, 1, 1, 1)`.
pub fn sum<T: Scalar>(tape: &mut Tape<T>, x: Var) -> Result<Var> {
    let s = tape.value(x).sum();
    tape.record(Tensor::scalar(s), &[x], SumBackward { scale: 1.0 })
}

/// Mean of all elements, shape `(1, 1, 1, 1)`.
pub fn mean<T: Scalar>(tape: &mut Tape<T>, x: Var) -> Result<Var> {
    let n = tape.value(x).len();
    let s = tape.value(x).sum() / T::lit(n as f64);
    tape.record(Tensor::scalar(s), &[x], SumBackward { scale: 1.0 / n as f64 })
}

struct ScaleBackward {
    factor: f64,
}

impl<T: Scalar> Backward<T> for ScaleBackward {
    fn name(&self) -> &'static str {
        "scale"
    }

    fn backward(&self, ctx: &BackwardCtx<'_, T>) -> Vec<Option<Tensor<T>>> {
        let f = T::lit(self.factor);
        vec![Some(ctx.grad.map(|g| g * f))]
    }
}

/// `factor · x`.
pub fn scale<T: Scalar>(tape: &mut Tape<T>, x: Var, factor: f64) -> Result<Var> {
    let f = T::lit(factor);
    let out = tape.value(x).map(|v| v * f);
    tape.record(out, &[x], ScaleBackward { factor })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::finite_diff_check;

    fn t(shape: [usize; 4], v: &[f64]) -> Tensor<f64> {
        Tensor::from_vec(shape, v.to_vec()).unwrap()
    }

    fn random(shape: [usize; 4], seed: u64) -> Tensor<f64> {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let n = Shape::from(shape).numel();
        t(shape, &(0..n).map(|_| rng.random_range(-1.0..1.0)).collect::<Vec<_>>())
    }

    #[test]
    fn add_direct_arithmetic() {
        let mut tape = Tape::new();
        let a = tape.constant(t([1, 1, 1, 2], &[1.0, 2.0]));
        let b = tape.constant(t([1, 1, 1, 2], &[3.0, 4.0]));
        let c = add(&mut tape, a, b).unwrap();
        assert_eq!(tape.value(c).data(), &[4.0, 6.0]);
    }

    #[test]
    fn mul_by_ones_is_identity() {
        let x = random([2, 3, 4, 4], 1);
        let mut tape = Tape::new();
        let a = tape.constant(x.clone());
        let ones = tape.constant(Tensor::ones(x.shape()));
        let y = mul(&mut tape, a, ones).unwrap();
        assert_eq!(tape.value(y), &x);
    }

    #[test]
    fn broadcast_rules() {
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(Tensor::zeros([2, 3, 4, 4]));
        for ok in [[1, 3, 1, 1], [2, 3, 1, 1], [2, 1, 4, 4], [1, 1, 1, 1], [2, 3, 4, 4]] {
            let b = tape.constant(Tensor::zeros(ok));
            assert!(add(&mut tape, a, b).is_ok(), "{:?}", ok);
        }
        for bad in [[1, 2, 1, 1], [2, 3, 4, 1], [3, 3, 4, 4], [2, 3, 2, 2]] {
            let b = tape.constant(Tensor::zeros(bad));
            assert!(add(&mut tape, a, b).is_err(), "{:?}", bad);
        }
    }

    #[test]
    fn grad_of_sum_mul_matches_other_operand() {
        let a = random([2, 3, 4, 4], 2);
        let b = random([2, 3, 4, 4], 3);
        let mut tape = Tape::new();
        let av = tape.leaf(a.clone(), true);
        let bv = tape.constant(b.clone());
        let p = mul(&mut tape, av, bv).unwrap();
        let s = sum(&mut tape, p).unwrap();
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(av).unwrap(), &b);

        let bb = b.clone();
        let report = finite_diff_check(
            move |tape, x| {
                let bv = tape.constant(bb.clone());
                let p = mul(tape, x, bv)?;
                sum(tape, p)
            },
            &a,
            1e-4,
        )
        .unwrap();
        assert!(report.passed, "{:?}", report);
    }

    #[test]
    fn broadcast_gradients_reduce() {
        for (bshape, seed) in [([1, 3, 1, 1], 4), ([2, 3, 1, 1], 5), ([2, 1, 4, 4], 6)] {
            let a = random([2, 3, 4, 4], seed);
            let b = random(bshape, seed + 10);
            for op in [BinaryOp::Add, BinaryOp::Sub, BinaryOp::Mul] {
                let aa = a.clone();
                let report = finite_diff_check(
                    move |tape, bv| {
                        let av = tape.constant(aa.clone());
                        let y = elementwise(tape, op, av, bv)?;
                        let y2 = mul(tape, y, y)?;
                        sum(tape, y2)
                    },
                    &b,
                    1e-4,
                )
                .unwrap();
                assert!(report.passed, "{:?} {:?}: {:?}", op, bshape, report);
            }
        }
    }

    #[test]
    fn linear_and_quadratic_cases() {
        let x = random([1, 2, 3, 3], 7);
        let w = random([1, 2, 3, 3], 8);
        let mut tape = Tape::new();
        let wv = tape.leaf(w.clone(), true);
        let xv = tape.constant(x.clone());
        let p = mul(&mut tape, wv, xv).unwrap();
        let l = sum(&mut tape, p).unwrap();
        assert_eq!(tape.backward(l).unwrap().get(wv).unwrap(), &x);

        let mut tape = Tape::new();
        let wv = tape.leaf(w.clone(), true);
        let sq = mul(&mut tape, wv, wv).unwrap();
        let s = sum(&mut tape, sq).unwrap();
        let l = scale(&mut tape, s, 0.5).unwrap();
        assert_eq!(tape.backward(l).unwrap().get(wv).unwrap(), &w);
    }

    #[test]
    fn each_node_visited_once() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::<f64>::ones([1, 1, 1, 1]), true);
        let y = add(&mut tape, x, x).unwrap();
        let s = sum(&mut tape, y).unwrap();
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[2.0]);
    }

    #[test]
    fn backward_errors() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::ones([1, 1, 2, 2]), true);
        assert!(matches!(tape.backward(x), Err(Error::NonScalarLoss(_))));
        let s = sum(&mut tape, x).unwrap();
        assert!(tape.backward(s).is_ok());
        assert!(matches!(tape.backward(s), Err(Error::GraphConsumed)));
        assert!(matches!(Tape::<f64>::new().backward(Var(0)), Err(Error::EmptyGraph)));
    }

    #[test]
    fn unused_params_get_no_gradient_but_reachable_ones_get_zeros() {
        let mut tape = Tape::<f64>::new();
        let a = tape.param("a", Tensor::ones([1, 1, 1, 1]));
        let b = tape.param("b", Tensor::ones([1, 1, 1, 1]));
        let zero = tape.constant(Tensor::zeros([1, 1, 1, 1]));
        let z = mul(&mut tape, a, zero).unwrap();
        let l = sum(&mut tape, z).unwrap();
        let g = tape.backward(l).unwrap();
        assert_eq!(g.by_name("a").unwrap().data(), &[0.0]);
        assert!(g.by_name("b").is_none());
        let _ = b;
    }

    #[test]
    fn non_finite_forward_is_reported() {
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(Tensor::full([1, 1, 1, 1], f64::MAX));
        assert!(matches!(add(&mut tape, a, a), Err(Error::NonFinite { op: "add" })));
    }
}
