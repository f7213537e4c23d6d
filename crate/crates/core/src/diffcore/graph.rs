//! Reverse-mode tape over batched 2-D arrays.
//!
//! Every recorded value is an `rows x cols` array; rows index samples and
//! columns index features. A `1 x 1` array plays the role of a scalar. Binary
//! elementwise operations broadcast along axes of length one, which covers
//! bias rows, per-sample columns and scalars without general broadcasting.
//!
//! The backward pass visits nodes in strictly decreasing record order, so
//! gradient accumulation order is fixed and repeated runs are bit-identical.

use std::cell::RefCell;
use std::fmt;

use ndarray::{s, Array2, Axis, Zip};

use super::DiffError;
use crate::scalar::Real;

#[derive(Debug, Clone)]
enum Op<T> {
    Leaf,
    Constant,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Neg(usize),
    Scale(usize, T),
    Offset(usize),
    Tanh(usize),
    Exp(usize),
    Ln(usize),
    Sqrt(usize),
    Square(usize),
    Powf(usize, T),
    Max(usize, usize),
    Min(usize, usize),
    MatMul(usize, usize),
    Cols { src: usize, start: usize },
    Concat(Vec<usize>),
    SumCols(usize),
    SumAll(usize),
    Select { index: Array2<u8>, inputs: Vec<usize> },
    PassThrough(usize),
}

impl<T> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Constant => "constant",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Div(..) => "div",
            Op::Neg(_) => "neg",
            Op::Scale(..) => "scale",
            Op::Offset(_) => "offset",
            Op::Tanh(_) => "tanh",
            Op::Exp(_) => "exp",
            Op::Ln(_) => "ln",
            Op::Sqrt(_) => "sqrt",
            Op::Square(_) => "square",
            Op::Powf(..) => "powf",
            Op::Max(..) => "max",
            Op::Min(..) => "min",
            Op::MatMul(..) => "matmul",
            Op::Cols { .. } => "cols",
            Op::Concat(_) => "concat",
            Op::SumCols(_) => "sum_cols",
            Op::SumAll(_) => "sum_all",
            Op::Select { .. } => "select",
            Op::PassThrough(_) => "clamp",
        }
    }
}

struct NodeRec<T> {
    value: Array2<T>,
    op: Op<T>,
}

/// Recording of one expression graph. Create one per loss evaluation.
pub struct Graph<T: Real> {
    nodes: RefCell<Vec<NodeRec<T>>>,
}

/// Handle to a recorded value.
#[derive(Clone, Copy)]
pub struct Var<'g, T: Real> {
    graph: &'g Graph<T>,
    id: usize,
}

impl<T: Real> fmt::Debug for Var<'_, T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let (r, c) = self.shape();
        write!(f, "Var#{}[{}x{}]", self.id, r, c)
    }
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::with_capacity(1024)),
        }
    }

    /// Number of recorded nodes.
    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// A differentiable input (trainable parameter or input variable).
    pub fn leaf(&self, value: Array2<T>) -> Var<'_, T> {
        self.push(value, Op::Leaf)
    }

    /// A value that never receives a gradient.
    pub fn constant(&self, value: Array2<T>) -> Var<'_, T> {
        self.push(value, Op::Constant)
    }

    pub fn scalar_leaf(&self, v: T) -> Var<'_, T> {
        self.leaf(Array2::from_elem((1, 1), v))
    }

    pub fn scalar(&self, v: T) -> Var<'_, T> {
        self.constant(Array2::from_elem((1, 1), v))
    }

    fn push(&self, value: Array2<T>, op: Op<T>) -> Var<'_, T> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(NodeRec { value, op });
        Var {
            graph: self,
            id: nodes.len() - 1,
        }
    }

    fn with_value<R>(&self, id: usize, f: impl FnOnce(&Array2<T>) -> R) -> R {
        let nodes = self.nodes.borrow();
        f(&nodes[id].value)
    }

    fn unary(&self, a: usize, f: impl FnOnce(&Array2<T>) -> Array2<T>, op: Op<T>) -> Var<'_, T> {
        let value = self.with_value(a, f);
        self.push(value, op)
    }

    fn binary(
        &self,
        a: usize,
        b: usize,
        name: &str,
        f: impl FnOnce(&Array2<T>, &Array2<T>) -> Array2<T>,
        op: Op<T>,
    ) -> Var<'_, T> {
        let value = {
            let nodes = self.nodes.borrow();
            let (va, vb) = (&nodes[a].value, &nodes[b].value);
            check_broadcast(name, va.dim(), vb.dim());
            f(va, vb)
        };
        self.push(value, op)
    }

    /// Reverse pass from a `1 x 1` loss node.
    ///
    /// Partial derivatives are exact for the recorded graph. Branch choices
    /// made during recording (selection, max/min) stay frozen.
    pub fn backward(&self, loss: Var<'_, T>) -> Result<Gradients<T>, DiffError> {
        debug_assert!(std::ptr::eq(loss.graph, self));
        let nodes = self.nodes.borrow();
        let shape = nodes[loss.id].value.dim();
        if shape != (1, 1) {
            return Err(DiffError::NotScalar { shape });
        }
        let n = loss.id + 1;
        let mut adj: Vec<Option<Array2<T>>> = vec![None; n];
        adj[loss.id] = Some(Array2::from_elem((1, 1), T::one()));

        for i in (0..n).rev() {
            let node = &nodes[i];
            let g = match &node.op {
                Op::Leaf => continue,
                Op::Constant => {
                    adj[i] = None;
                    continue;
                }
                _ => match adj[i].take() {
                    Some(g) => g,
                    None => continue,
                },
            };
            let val = |j: usize| &nodes[j].value;
            let name = node.op.name();
            let mut acc = |j: usize, c: Array2<T>| accumulate(&mut adj, &nodes, i, name, j, c);
            match &node.op {
                Op::Leaf | Op::Constant => unreachable!(),
                Op::Add(a, b) => {
                    acc(*a, reduce_to(&g, val(*a).dim()))?;
                    acc(*b, reduce_to(&g, val(*b).dim()))?;
                }
                Op::Sub(a, b) => {
                    acc(*a, reduce_to(&g, val(*a).dim()))?;
                    acc(*b, reduce_to(&g.mapv(|x| -x), val(*b).dim()))?;
                }
                Op::Mul(a, b) => {
                    let ga = &g * val(*b);
                    let gb = &g * val(*a);
                    acc(*a, reduce_to(&ga, val(*a).dim()))?;
                    acc(*b, reduce_to(&gb, val(*b).dim()))?;
                }
                Op::Div(a, b) => {
                    let ga = &g / val(*b);
                    let gb = -(&ga * &node.value);
                    acc(*a, reduce_to(&ga, val(*a).dim()))?;
                    acc(*b, reduce_to(&gb, val(*b).dim()))?;
                }
                Op::Neg(a) => acc(*a, g.mapv(|x| -x))?,
                Op::Scale(a, c) => {
                    let c = *c;
                    acc(*a, g.mapv(|x| x * c))?
                }
                Op::Offset(a) | Op::PassThrough(a) => acc(*a, g)?,
                Op::Tanh(a) => {
                    let mut d = g;
                    Zip::from(&mut d)
                        .and(&node.value)
                        .for_each(|d, &y| *d = *d * (T::one() - y * y));
                    acc(*a, d)?
                }
                Op::Exp(a) => acc(*a, g * &node.value)?,
                Op::Ln(a) => acc(*a, g / val(*a))?,
                Op::Sqrt(a) => {
                    let half = T::lit(0.5);
                    let mut d = g;
                    Zip::from(&mut d)
                        .and(&node.value)
                        .for_each(|d, &y| *d = *d * half / y);
                    acc(*a, d)?
                }
                Op::Square(a) => {
                    let two = T::lit(2.0);
                    let mut d = g;
                    Zip::from(&mut d)
                        .and(val(*a))
                        .for_each(|d, &x| *d = *d * two * x);
                    acc(*a, d)?
                }
                Op::Powf(a, e) => {
                    let e = *e;
                    let mut d = g;
                    Zip::from(&mut d)
                        .and(val(*a))
                        .for_each(|d, &x| *d = *d * e * x.powf(e - T::one()));
                    acc(*a, d)?
                }
                Op::Max(a, b) | Op::Min(a, b) => {
                    let is_max = matches!(node.op, Op::Max(..));
                    let (va, vb) = (val(*a), val(*b));
                    let shape = node.value.dim();
                    let mut ga = Array2::zeros(shape);
                    let mut gb = Array2::zeros(shape);
                    let va_b = va.broadcast(shape).expect("checked at record time");
                    let vb_b = vb.broadcast(shape).expect("checked at record time");
                    Zip::from(&mut ga)
                        .and(&mut gb)
                        .and(&g)
                        .and(&va_b)
                        .and(&vb_b)
                        .for_each(|ga, gb, &g, &x, &y| {
                            let left = if is_max { x >= y } else { x <= y };
                            if left {
                                *ga = g;
                            } else {
                                *gb = g;
                            }
                        });
                    acc(*a, reduce_to(&ga, va.dim()))?;
                    acc(*b, reduce_to(&gb, vb.dim()))?;
                }
                Op::MatMul(a, b) => {
                    let ga = g.dot(&val(*b).t());
                    let gb = val(*a).t().dot(&g);
                    acc(*a, ga)?;
                    acc(*b, gb)?;
                }
                Op::Cols { src, start } => {
                    let mut d = Array2::zeros(val(*src).dim());
                    d.slice_mut(s![.., *start..*start + g.ncols()]).assign(&g);
                    acc(*src, d)?
                }
                Op::Concat(parts) => {
                    let mut col = 0;
                    for &p in parts {
                        let w = val(p).ncols();
                        acc(p, g.slice(s![.., col..col + w]).to_owned())?;
                        col += w;
                    }
                }
                Op::SumCols(a) => {
                    let shape = val(*a).dim();
                    let d = g.broadcast(shape).expect("row sums broadcast").to_owned();
                    acc(*a, d)?
                }
                Op::SumAll(a) => {
                    let shape = val(*a).dim();
                    acc(*a, Array2::from_elem(shape, g[[0, 0]]))?
                }
                Op::Select { index, inputs } => {
                    for (k, &inp) in inputs.iter().enumerate() {
                        let k = k as u8;
                        let mut d = Array2::zeros(g.dim());
                        Zip::from(&mut d)
                            .and(&g)
                            .and(index)
                            .for_each(|d, &g, &ix| {
                                if ix == k {
                                    *d = g;
                                }
                            });
                        acc(inp, reduce_to(&d, val(inp).dim()))?;
                    }
                }
            }
        }
        Ok(Gradients { adj })
    }
}

fn accumulate<T: Real>(
    adj: &mut [Option<Array2<T>>],
    nodes: &[NodeRec<T>],
    at: usize,
    op: &'static str,
    target: usize,
    contrib: Array2<T>,
) -> Result<(), DiffError> {
    if matches!(nodes[target].op, Op::Constant) {
        return Ok(());
    }
    if contrib.iter().any(|v| !v.is_finite()) {
        return Err(DiffError::NonFinite { op, node: at });
    }
    match &mut adj[target] {
        Some(existing) => Zip::from(existing).and(&contrib).for_each(|e, &c| *e = *e + c),
        slot @ None => *slot = Some(contrib),
    }
    Ok(())
}

fn check_broadcast(op: &str, a: (usize, usize), b: (usize, usize)) {
    let ok = |x: usize, y: usize| x == y || x == 1 || y == 1;
    assert!(
        ok(a.0, b.0) && ok(a.1, b.1),
        "{op}: incompatible shapes {}x{} and {}x{}",
        a.0,
        a.1,
        b.0,
        b.1
    );
}

/// Sums `g` down to `shape` along broadcast axes.
pub(crate) fn reduce_to<T: Real>(g: &Array2<T>, shape: (usize, usize)) -> Array2<T> {
    let mut out = g.clone();
    if shape.0 == 1 && out.nrows() != 1 {
        out = out.sum_axis(Axis(0)).insert_axis(Axis(0));
    }
    if shape.1 == 1 && out.ncols() != 1 {
        out = out.sum_axis(Axis(1)).insert_axis(Axis(1));
    }
    out
}

/// Broadcasting elementwise combination of two arrays.
pub(crate) fn zip_broadcast<T: Real>(
    a: &Array2<T>,
    b: &Array2<T>,
    f: impl Fn(T, T) -> T,
) -> Array2<T> {
    let shape = (a.nrows().max(b.nrows()), a.ncols().max(b.ncols()));
    if a.dim() == shape && b.dim() == shape {
        let mut out = a.clone();
        Zip::from(&mut out).and(b).for_each(|x, &y| *x = f(*x, y));
        return out;
    }
    let ab = a.broadcast(shape).expect("broadcastable lhs");
    let bb = b.broadcast(shape).expect("broadcastable rhs");
    Zip::from(&ab).and(&bb).map_collect(|&x, &y| f(x, y))
}

/// Adjoints of the leaves of a graph after a backward pass.
pub struct Gradients<T: Real> {
    adj: Vec<Option<Array2<T>>>,
}

impl<T: Real> Gradients<T> {
    /// Gradient with respect to `v`; zeros when `v` does not reach the loss.
    pub fn wrt(&self, v: Var<'_, T>) -> Array2<T> {
        match self.adj.get(v.id).and_then(|a| a.as_ref()) {
            Some(a) => a.clone(),
            None => Array2::zeros(v.shape()),
        }
    }

    /// Gradients of `vars` flattened in row-major order and concatenated.
    pub fn flat(&self, vars: &[Var<'_, T>]) -> Vec<T> {
        let mut out = Vec::new();
        for &v in vars {
            match self.adj.get(v.id).and_then(|a| a.as_ref()) {
                Some(a) => out.extend(a.iter().copied()),
                None => out.extend(std::iter::repeat_n(T::zero(), v.len())),
            }
        }
        out
    }
}

impl<'g, T: Real> Var<'g, T> {
    pub fn graph(&self) -> &'g Graph<T> {
        self.graph
    }

    pub fn id(&self) -> usize {
        self.id
    }

    pub fn value(&self) -> Array2<T> {
        self.graph.with_value(self.id, |v| v.clone())
    }

    /// Value of a `1 x 1` node.
    pub fn item(&self) -> T {
        self.graph.with_value(self.id, |v| v[[0, 0]])
    }

    pub fn shape(&self) -> (usize, usize) {
        self.graph.with_value(self.id, |v| v.dim())
    }

    pub fn len(&self) -> usize {
        let (r, c) = self.shape();
        r * c
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn with_value<R>(&self, f: impl FnOnce(&Array2<T>) -> R) -> R {
        self.graph.with_value(self.id, f)
    }

    pub fn constant_like(&self, a: Array2<T>) -> Self {
        self.graph.constant(a)
    }

    pub fn add(self, rhs: Self) -> Self {
        self.graph.binary(
            self.id,
            rhs.id,
            "add",
            |a, b| zip_broadcast(a, b, |x, y| x + y),
            Op::Add(self.id, rhs.id),
        )
    }

    pub fn sub(self, rhs: Self) -> Self {
        self.graph.binary(
            self.id,
            rhs.id,
            "sub",
            |a, b| zip_broadcast(a, b, |x, y| x - y),
            Op::Sub(self.id, rhs.id),
        )
    }

    pub fn mul(self, rhs: Self) -> Self {
        self.graph.binary(
            self.id,
            rhs.id,
            "mul",
            |a, b| zip_broadcast(a, b, |x, y| x * y),
            Op::Mul(self.id, rhs.id),
        )
    }

    pub fn div(self, rhs: Self) -> Self {
        self.graph.binary(
            self.id,
            rhs.id,
            "div",
            |a, b| zip_broadcast(a, b, |x, y| x / y),
            Op::Div(self.id, rhs.id),
        )
    }

    /// Elementwise maximum; ties send the gradient to `self`.
    pub fn maximum(self, rhs: Self) -> Self {
        self.graph.binary(
            self.id,
            rhs.id,
            "max",
            |a, b| zip_broadcast(a, b, |x, y| if x >= y { x } else { y }),
            Op::Max(self.id, rhs.id),
        )
    }

    /// Elementwise minimum; ties send the gradient to `self`.
    pub fn minimum(self, rhs: Self) -> Self {
        self.graph.binary(
            self.id,
            rhs.id,
            "min",
            |a, b| zip_broadcast(a, b, |x, y| if x <= y { x } else { y }),
            Op::Min(self.id, rhs.id),
        )
    }

    pub fn neg(self) -> Self {
        self.graph.unary(self.id, |a| a.mapv(|x| -x), Op::Neg(self.id))
    }

    pub fn scale(self, c: T) -> Self {
        self.graph
            .unary(self.id, |a| a.mapv(|x| x * c), Op::Scale(self.id, c))
    }

    pub fn offset(self, c: T) -> Self {
        self.graph
            .unary(self.id, |a| a.mapv(|x| x + c), Op::Offset(self.id))
    }

    pub fn tanh(self) -> Self {
        self.graph
            .unary(self.id, |a| a.mapv(|x| x.tanh()), Op::Tanh(self.id))
    }

    pub fn exp(self) -> Self {
        self.graph
            .unary(self.id, |a| a.mapv(|x| x.exp()), Op::Exp(self.id))
    }

    pub fn ln(self) -> Self {
        self.graph
            .unary(self.id, |a| a.mapv(|x| x.ln()), Op::Ln(self.id))
    }

    pub fn sqrt(self) -> Self {
        self.graph
            .unary(self.id, |a| a.mapv(|x| x.sqrt()), Op::Sqrt(self.id))
    }

    pub fn square(self) -> Self {
        self.graph
            .unary(self.id, |a| a.mapv(|x| x * x), Op::Square(self.id))
    }

    pub fn powf(self, e: T) -> Self {
        self.graph
            .unary(self.id, |a| a.mapv(|x| x.powf(e)), Op::Powf(self.id, e))
    }

    pub fn matmul(self, rhs: Self) -> Self {
        let value = {
            let nodes = self.graph.nodes.borrow();
            let (a, b) = (&nodes[self.id].value, &nodes[rhs.id].value);
            assert_eq!(
                a.ncols(),
                b.nrows(),
                "matmul: inner dimensions {} and {} differ",
                a.ncols(),
                b.nrows()
            );
            a.dot(b)
        };
        self.graph.push(value, Op::MatMul(self.id, rhs.id))
    }

    /// Contiguous column block `start..start + len`.
    pub fn cols(self, start: usize, len: usize) -> Self {
        self.graph.unary(
            self.id,
            |a| {
                assert!(start + len <= a.ncols(), "cols: range out of bounds");
                a.slice(s![.., start..start + len]).to_owned()
            },
            Op::Cols {
                src: self.id,
                start,
            },
        )
    }

    pub fn concat_cols(parts: &[Self]) -> Self {
        assert!(!parts.is_empty(), "concat: no parts");
        let graph = parts[0].graph;
        let value = {
            let nodes = graph.nodes.borrow();
            let views: Vec<_> = parts.iter().map(|p| nodes[p.id].value.view()).collect();
            ndarray::concatenate(Axis(1), &views).expect("concat: row counts differ")
        };
        graph.push(value, Op::Concat(parts.iter().map(|p| p.id).collect()))
    }

    /// Row sums, `rows x 1`.
    pub fn sum_cols(self) -> Self {
        self.graph.unary(
            self.id,
            |a| a.sum_axis(Axis(1)).insert_axis(Axis(1)),
            Op::SumCols(self.id),
        )
    }

    /// Sum of all entries, `1 x 1`.
    pub fn sum_all(self) -> Self {
        self.graph.unary(
            self.id,
            |a| Array2::from_elem((1, 1), a.sum()),
            Op::SumAll(self.id),
        )
    }

    /// Picks, per entry, the option named by `index`. Options broadcast to
    /// the index shape.
    pub fn select(index: &Array2<u8>, options: &[Self]) -> Self {
        assert!(!options.is_empty(), "select: no options");
        let graph = options[0].graph;
        let value = {
            let nodes = graph.nodes.borrow();
            let shape = index.dim();
            let views: Vec<_> = options
                .iter()
                .map(|o| {
                    nodes[o.id]
                        .value
                        .broadcast(shape)
                        .expect("select: option does not broadcast to index shape")
                })
                .collect();
            let mut out = Array2::zeros(shape);
            for ((r, c), v) in out.indexed_iter_mut() {
                *v = views[index[[r, c]] as usize][[r, c]];
            }
            out
        };
        graph.push(
            value,
            Op::Select {
                index: index.clone(),
                inputs: options.iter().map(|o| o.id).collect(),
            },
        )
    }

    /// Clamps into `[lo, hi]` while passing the gradient through unchanged.
    /// Used to absorb rounding excursions of composed maps.
    pub fn clamp_pass(self, lo: T, hi: T) -> Self {
        self.graph.unary(
            self.id,
            |a| a.mapv(|x| x.max(lo).min(hi)),
            Op::PassThrough(self.id),
        )
    }
}

macro_rules! impl_bin_op {
    ($trait:ident, $method:ident) => {
        impl<'g, T: Real> std::ops::$trait for Var<'g, T> {
            type Output = Var<'g, T>;
            fn $method(self, rhs: Self) -> Self::Output {
                Var::$method(self, rhs)
            }
        }
    };
}

impl_bin_op!(Add, add);
impl_bin_op!(Sub, sub);
impl_bin_op!(Mul, mul);
impl_bin_op!(Div, div);

impl<'g, T: Real> std::ops::Neg for Var<'g, T> {
    type Output = Var<'g, T>;
    fn neg(self) -> Self::Output {
        Var::neg(self)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn fd<F: Fn(f64) -> f64>(f: F, x: f64) -> f64 {
        let h = 1e-5;
        (f(x + h) - f(x - h)) / (2.0 * h)
    }

    #[test]
    fn square_gradient() {
        let g = Graph::<f64>::new();
        let th = g.scalar_leaf(3.0);
        let loss = th * th;
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.wrt(th)[[0, 0]], 6.0);
    }

    #[test]
    fn tanh_gradient_at_zero() {
        let g = Graph::<f64>::new();
        let th = g.scalar_leaf(0.0);
        let grads = g.backward(th.tanh()).unwrap();
        assert_eq!(grads.wrt(th)[[0, 0]], 1.0);
    }

    #[test]
    fn unreachable_leaf_gets_zero() {
        let g = Graph::<f64>::new();
        let a = g.scalar_leaf(2.0);
        let b = g.leaf(Array2::ones((2, 3)));
        let grads = g.backward(a.exp()).unwrap();
        assert_eq!(grads.wrt(b), Array2::zeros((2, 3)));
        assert_eq!(grads.flat(&[a, b]).len(), 7);
    }

    #[test]
    fn primitives_match_finite_differences() {
        // Points kept away from max/min ties.
        let xs = [0.3, 1.7, 0.9];
        type F = fn(Var<'_, f64>) -> Var<'_, f64>;
        let cases: Vec<(&str, F, fn(f64) -> f64)> = vec![
            ("tanh", |v| v.tanh(), |x| x.tanh()),
            ("exp", |v| v.exp(), |x| x.exp()),
            ("ln", |v| v.ln(), |x| x.ln()),
            ("sqrt", |v| v.sqrt(), |x| x.sqrt()),
            ("square", |v| v.square(), |x| x * x),
            ("powf", |v| v.powf(2.5), |x| x.powf(2.5)),
            ("scale", |v| v.scale(-1.5), |x| -1.5 * x),
            ("offset", |v| v.offset(4.0), |x| x + 4.0),
            ("neg", |v| -v, |x| -x),
            (
                "max",
                |v| {
                    let c = v.constant_like(array![[1.0]]);
                    v.maximum(c)
                },
                |x| x.max(1.0),
            ),
            (
                "min",
                |v| {
                    let c = v.constant_like(array![[1.0]]);
                    v.minimum(c)
                },
                |x| x.min(1.0),
            ),
        ];
        for (name, f, fr) in cases {
            for &x in &xs {
                let g = Graph::new();
                let v = g.scalar_leaf(x);
                let out = f(v);
                assert!((out.item() - fr(x)).abs() < 1e-14, "{name} value");
                let grads = g.backward(out).unwrap();
                let analytic = grads.wrt(v)[[0, 0]];
                let numeric = fd(fr, x);
                let rel = (analytic - numeric).abs() / numeric.abs().max(1e-8);
                assert!(rel < 1e-5, "{name} at {x}: {analytic} vs {numeric}");
            }
        }
    }

    #[test]
    fn binary_ops_with_broadcast_match_finite_differences() {
        let a0 = array![[0.5, -1.2, 2.0], [1.5, 0.7, -0.3]];
        let b0 = array![[1.1, 0.6, -2.2]];
        let eval = |a: &Array2<f64>, b: &Array2<f64>, grad: bool| {
            let g = Graph::new();
            let va = g.leaf(a.clone());
            let vb = g.leaf(b.clone());
            let e = (va * vb + va / vb - vb) .sum_all();
            let loss = e.square();
            let val = loss.item();
            if grad {
                let gr = g.backward(loss).unwrap();
                (val, Some((gr.wrt(va), gr.wrt(vb))))
            } else {
                (val, None)
            }
        };
        let (_, grads) = eval(&a0, &b0, true);
        let (ga, gb) = grads.unwrap();
        let h = 1e-5;
        for ((r, c), &an) in ga.indexed_iter() {
            let mut p = a0.clone();
            p[[r, c]] += h;
            let mut m = a0.clone();
            m[[r, c]] -= h;
            let num = (eval(&p, &b0, false).0 - eval(&m, &b0, false).0) / (2.0 * h);
            assert!((an - num).abs() / num.abs().max(1e-8) < 1e-5);
        }
        for ((r, c), &an) in gb.indexed_iter() {
            let mut p = b0.clone();
            p[[r, c]] += h;
            let mut m = b0.clone();
            m[[r, c]] -= h;
            let num = (eval(&a0, &p, false).0 - eval(&a0, &m, false).0) / (2.0 * h);
            assert!((an - num).abs() / num.abs().max(1e-8) < 1e-5);
        }
    }

    #[test]
    fn matmul_cols_concat_select_gradients() {
        let x0 = array![[0.2, -0.4], [0.9, 0.1], [-0.5, 0.3]];
        let w0 = array![[0.3, -0.7, 1.1], [0.5, 0.2, -0.9]];
        let idx = array![[0u8, 1], [1, 0], [0, 0]];
        let f = |w: &Array2<f64>, grad: bool| {
            let g = Graph::new();
            let x = g.constant(x0.clone());
            let wv = g.leaf(w.clone());
            let y = x.matmul(wv).tanh();
            let a = y.cols(0, 2);
            let b = y.cols(1, 2).exp();
            let sel = Var::select(&idx, &[a, b]);
            let cat = Var::concat_cols(&[sel, y.cols(2, 1)]);
            let loss = cat.square().sum_cols().sum_all();
            let v = loss.item();
            (v, grad.then(|| g.backward(loss).unwrap().wrt(wv)))
        };
        let (_, gw) = f(&w0, true);
        let gw = gw.unwrap();
        let h = 1e-5;
        for ((r, c), &an) in gw.indexed_iter() {
            let mut p = w0.clone();
            p[[r, c]] += h;
            let mut m = w0.clone();
            m[[r, c]] -= h;
            let num = (f(&p, false).0 - f(&m, false).0) / (2.0 * h);
            assert!((an - num).abs() / num.abs().max(1e-8) < 1e-5, "{an} {num}");
        }
    }

    #[test]
    fn non_finite_backward_names_operation() {
        let g = Graph::<f64>::new();
        let x = g.scalar_leaf(0.0);
        let loss = x.sqrt();
        match g.backward(loss) {
            Err(DiffError::NonFinite { op, .. }) => assert_eq!(op, "sqrt"),
            other => panic!("expected non-finite error, got {:?}", other.err()),
        }
    }

    #[test]
    fn max_tie_takes_left_branch() {
        let g = Graph::<f64>::new();
        let a = g.scalar_leaf(1.0);
        let b = g.scalar_leaf(1.0);
        let gr = g.backward(a.maximum(b)).unwrap();
        assert_eq!(gr.wrt(a)[[0, 0]], 1.0);
        assert_eq!(gr.wrt(b)[[0, 0]], 0.0);
    }

    #[test]
    fn backward_is_deterministic() {
        let run = || {
            let g = Graph::<f64>::new();
            let w = g.leaf(array![[0.1, 0.2], [0.3, 0.4]]);
            let x = g.constant(array![[1.0, 2.0], [3.0, 4.0], [5.0, 6.0]]);
            let l = x.matmul(w).tanh().square().sum_all();
            (l.item(), g.backward(l).unwrap().wrt(w))
        };
        let (a, ga) = run();
        let (b, gb) = run();
        assert_eq!(a.to_bits(), b.to_bits());
        assert!(ga.iter().zip(gb.iter()).all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let g = Graph::<f64>::new();
        let x = g.leaf(Array2::ones((2, 2)));
        assert!(matches!(g.backward(x.tanh()), Err(DiffError::NotScalar { .. })));
    }
}
