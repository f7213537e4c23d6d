//! One operation vocabulary over three evaluation modes.
//!
//! Model code is written once against [`Tensor`] and runs on plain arrays
//! (fast inference), on tape variables (parameter gradients), or on duals
//! (gradients of input derivatives).

use ndarray::{s, Array2, Axis, Zip};

use super::dual::Dual;
use super::graph::{zip_broadcast, Var};
use crate::scalar::Real;

pub trait Tensor<T: Real>: Clone {
    /// Primal value.
    fn value(&self) -> Array2<T>;
    fn shape(&self) -> (usize, usize);
    /// A constant living in the same evaluation context as `self`.
    fn lift(&self, a: Array2<T>) -> Self;

    fn add(&self, rhs: &Self) -> Self;
    fn sub(&self, rhs: &Self) -> Self;
    fn mul(&self, rhs: &Self) -> Self;
    fn div(&self, rhs: &Self) -> Self;
    fn neg(&self) -> Self;
    fn scale(&self, c: T) -> Self;
    fn offset(&self, c: T) -> Self;
    fn tanh(&self) -> Self;
    fn exp(&self) -> Self;
    fn ln(&self) -> Self;
    fn sqrt(&self) -> Self;
    fn square(&self) -> Self;
    fn powf(&self, e: T) -> Self;
    fn maximum(&self, rhs: &Self) -> Self;
    fn minimum(&self, rhs: &Self) -> Self;
    fn matmul(&self, rhs: &Self) -> Self;
    fn cols(&self, start: usize, len: usize) -> Self;
    fn concat_cols(parts: &[Self]) -> Self;
    fn sum_cols(&self) -> Self;
    fn sum_all(&self) -> Self;
    fn select(index: &Array2<u8>, options: &[Self]) -> Self;
    fn clamp_pass(&self, lo: T, hi: T) -> Self;

    fn filled(&self, rows: usize, cols: usize, v: T) -> Self {
        self.lift(Array2::from_elem((rows, cols), v))
    }
}

impl<T: Real> Tensor<T> for Array2<T> {
    fn value(&self) -> Array2<T> {
        self.clone()
    }
    fn shape(&self) -> (usize, usize) {
        self.dim()
    }
    fn lift(&self, a: Array2<T>) -> Self {
        a
    }
    fn add(&self, rhs: &Self) -> Self {
        zip_broadcast(self, rhs, |x, y| x + y)
    }
    fn sub(&self, rhs: &Self) -> Self {
        zip_broadcast(self, rhs, |x, y| x - y)
    }
    fn mul(&self, rhs: &Self) -> Self {
        zip_broadcast(self, rhs, |x, y| x * y)
    }
    fn div(&self, rhs: &Self) -> Self {
        zip_broadcast(self, rhs, |x, y| x / y)
    }
    fn neg(&self) -> Self {
        self.mapv(|x| -x)
    }
    fn scale(&self, c: T) -> Self {
        self.mapv(|x| x * c)
    }
    fn offset(&self, c: T) -> Self {
        self.mapv(|x| x + c)
    }
    fn tanh(&self) -> Self {
        self.mapv(|x| x.tanh())
    }
    fn exp(&self) -> Self {
        self.mapv(|x| x.exp())
    }
    fn ln(&self) -> Self {
        self.mapv(|x| x.ln())
    }
    fn sqrt(&self) -> Self {
        self.mapv(|x| x.sqrt())
    }
    fn square(&self) -> Self {
        self.mapv(|x| x * x)
    }
    fn powf(&self, e: T) -> Self {
        self.mapv(|x| x.powf(e))
    }
    fn maximum(&self, rhs: &Self) -> Self {
        zip_broadcast(self, rhs, |x, y| if x >= y { x } else { y })
    }
    fn minimum(&self, rhs: &Self) -> Self {
        zip_broadcast(self, rhs, |x, y| if x <= y { x } else { y })
    }
    fn matmul(&self, rhs: &Self) -> Self {
        self.dot(rhs)
    }
    fn cols(&self, start: usize, len: usize) -> Self {
        self.slice(s![.., start..start + len]).to_owned()
    }
    fn concat_cols(parts: &[Self]) -> Self {
        let views: Vec<_> = parts.iter().map(|p| p.view()).collect();
        ndarray::concatenate(Axis(1), &views).expect("concat: row counts differ")
    }
    fn sum_cols(&self) -> Self {
        self.sum_axis(Axis(1)).insert_axis(Axis(1))
    }
    fn sum_all(&self) -> Self {
        Array2::from_elem((1, 1), self.sum())
    }
    fn select(index: &Array2<u8>, options: &[Self]) -> Self {
        let shape = index.dim();
        let views: Vec<_> = options
            .iter()
            .map(|o| o.broadcast(shape).expect("select: option does not broadcast"))
            .collect();
        let mut out = Array2::zeros(shape);
        Zip::indexed(&mut out).for_each(|(r, c), v| {
            *v = views[index[[r, c]] as usize][[r, c]];
        });
        out
    }
    fn clamp_pass(&self, lo: T, hi: T) -> Self {
        self.mapv(|x| x.max(lo).min(hi))
    }
}

impl<'g, T: Real> Tensor<T> for Var<'g, T> {
    fn value(&self) -> Array2<T> {
        Var::value(self)
    }
    fn shape(&self) -> (usize, usize) {
        Var::shape(self)
    }
    fn lift(&self, a: Array2<T>) -> Self {
        self.constant_like(a)
    }
    fn add(&self, rhs: &Self) -> Self {
        Var::add(*self, *rhs)
    }
    fn sub(&self, rhs: &Self) -> Self {
        Var::sub(*self, *rhs)
    }
    fn mul(&self, rhs: &Self) -> Self {
        Var::mul(*self, *rhs)
    }
    fn div(&self, rhs: &Self) -> Self {
        Var::div(*self, *rhs)
    }
    fn neg(&self) -> Self {
        Var::neg(*self)
    }
    fn scale(&self, c: T) -> Self {
        Var::scale(*self, c)
    }
    fn offset(&self, c: T) -> Self {
        Var::offset(*self, c)
    }
    fn tanh(&self) -> Self {
        Var::tanh(*self)
    }
    fn exp(&self) -> Self {
        Var::exp(*self)
    }
    fn ln(&self) -> Self {
        Var::ln(*self)
    }
    fn sqrt(&self) -> Self {
        Var::sqrt(*self)
    }
    fn square(&self) -> Self {
        Var::square(*self)
    }
    fn powf(&self, e: T) -> Self {
        Var::powf(*self, e)
    }
    fn maximum(&self, rhs: &Self) -> Self {
        Var::maximum(*self, *rhs)
    }
    fn minimum(&self, rhs: &Self) -> Self {
        Var::minimum(*self, *rhs)
    }
    fn matmul(&self, rhs: &Self) -> Self {
        Var::matmul(*self, *rhs)
    }
    fn cols(&self, start: usize, len: usize) -> Self {
        Var::cols(*self, start, len)
    }
    fn concat_cols(parts: &[Self]) -> Self {
        Var::concat_cols(parts)
    }
    fn sum_cols(&self) -> Self {
        Var::sum_cols(*self)
    }
    fn sum_all(&self) -> Self {
        Var::sum_all(*self)
    }
    fn select(index: &Array2<u8>, options: &[Self]) -> Self {
        Var::select(index, options)
    }
    fn clamp_pass(&self, lo: T, hi: T) -> Self {
        Var::clamp_pass(*self, lo, hi)
    }
}

impl<'g, T: Real> Tensor<T> for Dual<'g, T> {
    fn value(&self) -> Array2<T> {
        self.primal.value()
    }
    fn shape(&self) -> (usize, usize) {
        self.primal.shape()
    }
    fn lift(&self, a: Array2<T>) -> Self {
        Dual::constant(self.primal.constant_like(a), self.dirs())
    }
    fn add(&self, rhs: &Self) -> Self {
        Dual::add(self, rhs)
    }
    fn sub(&self, rhs: &Self) -> Self {
        Dual::sub(self, rhs)
    }
    fn mul(&self, rhs: &Self) -> Self {
        Dual::mul(self, rhs)
    }
    fn div(&self, rhs: &Self) -> Self {
        Dual::div(self, rhs)
    }
    fn neg(&self) -> Self {
        Dual::neg(self)
    }
    fn scale(&self, c: T) -> Self {
        Dual::scale(self, c)
    }
    fn offset(&self, c: T) -> Self {
        Dual::offset(self, c)
    }
    fn tanh(&self) -> Self {
        Dual::tanh(self)
    }
    fn exp(&self) -> Self {
        Dual::exp(self)
    }
    fn ln(&self) -> Self {
        Dual::ln(self)
    }
    fn sqrt(&self) -> Self {
        Dual::sqrt(self)
    }
    fn square(&self) -> Self {
        Dual::square(self)
    }
    fn powf(&self, e: T) -> Self {
        Dual::powf(self, e)
    }
    fn maximum(&self, rhs: &Self) -> Self {
        Dual::maximum(self, rhs)
    }
    fn minimum(&self, rhs: &Self) -> Self {
        Dual::minimum(self, rhs)
    }
    fn matmul(&self, rhs: &Self) -> Self {
        Dual::matmul(self, rhs)
    }
    fn cols(&self, start: usize, len: usize) -> Self {
        Dual::cols(self, start, len)
    }
    fn concat_cols(parts: &[Self]) -> Self {
        Dual::concat_cols(parts)
    }
    fn sum_cols(&self) -> Self {
        Dual::sum_cols(self)
    }
    fn sum_all(&self) -> Self {
        Dual::sum_all(self)
    }
    fn select(index: &Array2<u8>, options: &[Self]) -> Self {
        Dual::select(index, options)
    }
    fn clamp_pass(&self, lo: T, hi: T) -> Self {
        Dual::clamp_pass(self, lo, hi)
    }
}

/// Creates the parameter handles a model evaluates with.
pub trait Binder<T: Real> {
    type Out: Tensor<T>;
    fn bind(&mut self, a: &Array2<T>) -> Self::Out;
}

/// Binds parameters as plain values.
#[derive(Default)]
pub struct ValueBinder;

impl<T: Real> Binder<T> for ValueBinder {
    type Out = Array2<T>;
    fn bind(&mut self, a: &Array2<T>) -> Array2<T> {
        a.clone()
    }
}

/// Binds parameters as tape leaves and remembers them in binding order.
pub struct VarBinder<'g, T: Real> {
    graph: &'g super::Graph<T>,
    pub vars: Vec<Var<'g, T>>,
}

impl<'g, T: Real> VarBinder<'g, T> {
    pub fn new(graph: &'g super::Graph<T>) -> Self {
        Self {
            graph,
            vars: Vec::new(),
        }
    }
}

impl<'g, T: Real> Binder<T> for VarBinder<'g, T> {
    type Out = Var<'g, T>;
    fn bind(&mut self, a: &Array2<T>) -> Var<'g, T> {
        let v = self.graph.leaf(a.clone());
        self.vars.push(v);
        v
    }
}

/// Binds parameters as tape leaves wrapped in duals with zero tangents.
pub struct DualBinder<'g, T: Real> {
    graph: &'g super::Graph<T>,
    dirs: usize,
    pub vars: Vec<Var<'g, T>>,
}

impl<'g, T: Real> DualBinder<'g, T> {
    pub fn new(graph: &'g super::Graph<T>, dirs: usize) -> Self {
        Self {
            graph,
            dirs,
            vars: Vec::new(),
        }
    }
}

impl<'g, T: Real> Binder<T> for DualBinder<'g, T> {
    type Out = Dual<'g, T>;
    fn bind(&mut self, a: &Array2<T>) -> Dual<'g, T> {
        let v = self.graph.leaf(a.clone());
        self.vars.push(v);
        Dual::constant(v, self.dirs)
    }
}
