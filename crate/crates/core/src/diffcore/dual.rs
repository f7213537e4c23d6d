//! Forward-mode tangents whose components are themselves tape nodes.
//!
//! A [`Dual`] carries a primal [`Var`] and one tangent per seeded input
//! direction. Because every tangent rule is recorded on the same [`Graph`],
//! a reverse pass through an expression that contains directional
//! derivatives yields exact parameter gradients of those derivatives.

use ndarray::{Array2, Zip};

use super::graph::{Graph, Var};
use super::DiffError;
use crate::scalar::Real;

/// Primal value plus directional derivatives, all recorded on one tape.
/// A `None` tangent is an exact zero and costs nothing.
#[derive(Clone, Debug)]
pub struct Dual<'g, T: Real> {
    pub primal: Var<'g, T>,
    pub tangents: Vec<Option<Var<'g, T>>>,
}

/// Result of a single directional derivative.
#[derive(Clone, Copy, Debug)]
pub struct Tangent<'g, T: Real> {
    pub primal: Var<'g, T>,
    pub tangent: Var<'g, T>,
}

impl<'g, T: Real> Dual<'g, T> {
    /// A value with zero derivative in each of `dirs` directions.
    pub fn constant(primal: Var<'g, T>, dirs: usize) -> Self {
        Self {
            primal,
            tangents: vec![None; dirs],
        }
    }

    /// Seeds input `x` (rows = samples) with one tangent per direction.
    /// Each direction is a row vector applied to every sample.
    pub fn seed(graph: &'g Graph<T>, x: Array2<T>, directions: &[Vec<T>]) -> Result<Self, DiffError> {
        let cols = x.ncols();
        let rows = x.nrows();
        let mut tangents = Vec::with_capacity(directions.len());
        for d in directions {
            if d.len() != cols {
                return Err(DiffError::DimensionMismatch {
                    expected: cols,
                    found: d.len(),
                });
            }
            let t = Array2::from_shape_fn((rows, cols), |(_, c)| d[c]);
            tangents.push(Some(graph.constant(t)));
        }
        Ok(Self {
            primal: graph.constant(x),
            tangents,
        })
    }

    /// Seeds `x` along every coordinate axis, so tangent `j` is `d/dx_j`.
    pub fn seed_axes(graph: &'g Graph<T>, x: Array2<T>) -> Self {
        let d = x.ncols();
        let axes: Vec<Vec<T>> = (0..d)
            .map(|j| (0..d).map(|k| if j == k { T::one() } else { T::zero() }).collect())
            .collect();
        Self::seed(graph, x, &axes).expect("axis directions have input width")
    }

    pub fn dirs(&self) -> usize {
        self.tangents.len()
    }

    pub fn graph(&self) -> &'g Graph<T> {
        self.primal.graph()
    }

    /// Tangent `j`, materialising zeros when it is structurally absent.
    pub fn tangent(&self, j: usize) -> Var<'g, T> {
        match self.tangents[j] {
            Some(t) => t,
            None => self.graph().constant(Array2::zeros(self.primal.shape())),
        }
    }

    fn zeros_like(&self, shape: (usize, usize)) -> Var<'g, T> {
        self.graph().constant(Array2::zeros(shape))
    }

    /// Broadcasts a tangent up to `shape` when its operand was broadcast.
    fn expand(t: Var<'g, T>, shape: (usize, usize)) -> Var<'g, T> {
        if t.shape() == shape {
            t
        } else {
            let z = t.graph().constant(Array2::zeros(shape));
            t.add(z)
        }
    }

    fn map_tangents(&self, primal: Var<'g, T>, f: impl Fn(Var<'g, T>) -> Var<'g, T>) -> Self {
        Self {
            primal,
            tangents: self.tangents.iter().map(|t| t.map(&f)).collect(),
        }
    }

    fn any_tangent(&self) -> bool {
        self.tangents.iter().any(Option::is_some)
    }

    pub fn add(&self, rhs: &Self) -> Self {
        let primal = self.primal.add(rhs.primal);
        let shape = primal.shape();
        let tangents = self
            .tangents
            .iter()
            .zip(&rhs.tangents)
            .map(|(a, b)| match (a, b) {
                (Some(a), Some(b)) => Some(a.add(*b)),
                (Some(a), None) => Some(Self::expand(*a, shape)),
                (None, Some(b)) => Some(Self::expand(*b, shape)),
                (None, None) => None,
            })
            .collect();
        Self { primal, tangents }
    }

    pub fn sub(&self, rhs: &Self) -> Self {
        let primal = self.primal.sub(rhs.primal);
        let shape = primal.shape();
        let tangents = self
            .tangents
            .iter()
            .zip(&rhs.tangents)
            .map(|(a, b)| match (a, b) {
                (Some(a), Some(b)) => Some(a.sub(*b)),
                (Some(a), None) => Some(Self::expand(*a, shape)),
                (None, Some(b)) => Some(Self::expand(b.neg(), shape)),
                (None, None) => None,
            })
            .collect();
        Self { primal, tangents }
    }

    pub fn mul(&self, rhs: &Self) -> Self {
        let primal = self.primal.mul(rhs.primal);
        let shape = primal.shape();
        let tangents = self
            .tangents
            .iter()
            .zip(&rhs.tangents)
            .map(|(a, b)| match (a, b) {
                (Some(a), Some(b)) => Some(a.mul(rhs.primal).add(self.primal.mul(*b))),
                (Some(a), None) => Some(Self::expand(a.mul(rhs.primal), shape)),
                (None, Some(b)) => Some(Self::expand(self.primal.mul(*b), shape)),
                (None, None) => None,
            })
            .collect();
        Self { primal, tangents }
    }

    pub fn div(&self, rhs: &Self) -> Self {
        let primal = self.primal.div(rhs.primal);
        let shape = primal.shape();
        let tangents = self
            .tangents
            .iter()
            .zip(&rhs.tangents)
            .map(|(a, b)| match (a, b) {
                (Some(a), Some(b)) => Some(a.sub(primal.mul(*b)).div(rhs.primal)),
                (Some(a), None) => Some(Self::expand(a.div(rhs.primal), shape)),
                (None, Some(b)) => Some(Self::expand(primal.mul(*b).div(rhs.primal).neg(), shape)),
                (None, None) => None,
            })
            .collect();
        Self { primal, tangents }
    }

    pub fn neg(&self) -> Self {
        self.map_tangents(self.primal.neg(), |t| t.neg())
    }

    pub fn scale(&self, c: T) -> Self {
        self.map_tangents(self.primal.scale(c), |t| t.scale(c))
    }

    pub fn offset(&self, c: T) -> Self {
        self.map_tangents(self.primal.offset(c), |t| t)
    }

    pub fn tanh(&self) -> Self {
        let y = self.primal.tanh();
        if !self.any_tangent() {
            return Self::constant(y, self.dirs());
        }
        let fac = y.square().neg().offset(T::one());
        self.map_tangents(y, |t| t.mul(fac))
    }

    pub fn exp(&self) -> Self {
        let y = self.primal.exp();
        self.map_tangents(y, |t| t.mul(y))
    }

    pub fn ln(&self) -> Self {
        let x = self.primal;
        self.map_tangents(x.ln(), |t| t.div(x))
    }

    pub fn sqrt(&self) -> Self {
        let y = self.primal.sqrt();
        if !self.any_tangent() {
            return Self::constant(y, self.dirs());
        }
        let den = y.scale(T::lit(2.0));
        self.map_tangents(y, |t| t.div(den))
    }

    pub fn square(&self) -> Self {
        let x = self.primal;
        if !self.any_tangent() {
            return Self::constant(x.square(), self.dirs());
        }
        let fac = x.scale(T::lit(2.0));
        self.map_tangents(x.square(), |t| t.mul(fac))
    }

    pub fn powf(&self, e: T) -> Self {
        let x = self.primal;
        if !self.any_tangent() {
            return Self::constant(x.powf(e), self.dirs());
        }
        let fac = x.powf(e - T::one()).scale(e);
        self.map_tangents(x.powf(e), |t| t.mul(fac))
    }

    fn pick(&self, rhs: &Self, primal: Var<'g, T>, take_left: impl Fn(T, T) -> bool) -> Self {
        let shape = primal.shape();
        if !self.any_tangent() && !rhs.any_tangent() {
            return Self::constant(primal, self.dirs());
        }
        let (va, vb) = (self.primal.value(), rhs.primal.value());
        let va = va.broadcast(shape).expect("broadcast lhs").to_owned();
        let vb = vb.broadcast(shape).expect("broadcast rhs").to_owned();
        let index = Zip::from(&va)
            .and(&vb)
            .map_collect(|&x, &y| if take_left(x, y) { 0u8 } else { 1u8 });
        let tangents = self
            .tangents
            .iter()
            .zip(&rhs.tangents)
            .map(|(a, b)| {
                if a.is_none() && b.is_none() {
                    return None;
                }
                let a = a.unwrap_or_else(|| self.zeros_like(shape));
                let b = b.unwrap_or_else(|| self.zeros_like(shape));
                Some(Var::select(&index, &[a, b]))
            })
            .collect();
        Self { primal, tangents }
    }

    pub fn maximum(&self, rhs: &Self) -> Self {
        let primal = self.primal.maximum(rhs.primal);
        self.pick(rhs, primal, |x, y| x >= y)
    }

    pub fn minimum(&self, rhs: &Self) -> Self {
        let primal = self.primal.minimum(rhs.primal);
        self.pick(rhs, primal, |x, y| x <= y)
    }

    pub fn matmul(&self, rhs: &Self) -> Self {
        let primal = self.primal.matmul(rhs.primal);
        let tangents = self
            .tangents
            .iter()
            .zip(&rhs.tangents)
            .map(|(a, b)| match (a, b) {
                (Some(a), Some(b)) => Some(a.matmul(rhs.primal).add(self.primal.matmul(*b))),
                (Some(a), None) => Some(a.matmul(rhs.primal)),
                (None, Some(b)) => Some(self.primal.matmul(*b)),
                (None, None) => None,
            })
            .collect();
        Self { primal, tangents }
    }

    pub fn cols(&self, start: usize, len: usize) -> Self {
        self.map_tangents(self.primal.cols(start, len), |t| t.cols(start, len))
    }

    pub fn concat_cols(parts: &[Self]) -> Self {
        let primal = Var::concat_cols(&parts.iter().map(|p| p.primal).collect::<Vec<_>>());
        let dirs = parts[0].dirs();
        let tangents = (0..dirs)
            .map(|j| {
                if parts.iter().all(|p| p.tangents[j].is_none()) {
                    return None;
                }
                let ts: Vec<_> = parts.iter().map(|p| p.tangent(j)).collect();
                Some(Var::concat_cols(&ts))
            })
            .collect();
        Self { primal, tangents }
    }

    pub fn sum_cols(&self) -> Self {
        self.map_tangents(self.primal.sum_cols(), |t| t.sum_cols())
    }

    pub fn sum_all(&self) -> Self {
        self.map_tangents(self.primal.sum_all(), |t| t.sum_all())
    }

    pub fn select(index: &Array2<u8>, options: &[Self]) -> Self {
        let primal = Var::select(index, &options.iter().map(|o| o.primal).collect::<Vec<_>>());
        let shape = index.dim();
        let dirs = options[0].dirs();
        let tangents = (0..dirs)
            .map(|j| {
                if options.iter().all(|o| o.tangents[j].is_none()) {
                    return None;
                }
                let ts: Vec<_> = options
                    .iter()
                    .map(|o| o.tangents[j].unwrap_or_else(|| o.zeros_like(shape)))
                    .collect();
                Some(Var::select(index, &ts))
            })
            .collect();
        Self { primal, tangents }
    }

    pub fn clamp_pass(&self, lo: T, hi: T) -> Self {
        self.map_tangents(self.primal.clamp_pass(lo, hi), |t| t)
    }
}

/// Directional derivative of `f` at `x` along `v`, recorded on `graph`.
///
/// `f` maps the seeded input to its output; the returned tangent equals
/// `J_f(x) v` row by row and stays differentiable with respect to any
/// parameters `f` closes over.
pub fn directional<'g, T: Real>(
    graph: &'g Graph<T>,
    x: Array2<T>,
    v: &[T],
    f: impl FnOnce(&Dual<'g, T>) -> Dual<'g, T>,
) -> Result<Tangent<'g, T>, DiffError> {
    let seeded = Dual::seed(graph, x, &[v.to_vec()])?;
    let out = f(&seeded);
    Ok(Tangent {
        primal: out.primal,
        tangent: out.tangent(0),
    })
}
