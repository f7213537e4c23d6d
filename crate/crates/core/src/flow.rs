//! The bounded flow: affine rescale of a box onto `[-1,1]^d`, CDF coupling
//! layers with a three-element adaptive mesh, and the block-triangular
//! composition that freezes one trailing coordinate after every stage.

use ndarray::{s, Array2};
use rand::Rng;
use thiserror::Error;

use crate::diffcore::Tensor;
use crate::nets::{Mlp, MlpSpec, NetError, Parametrized};
use crate::scalar::{clamp_within, Real};

/// Knot range constant.
pub const ALPHA: f64 = 65.0 / 99.0;
/// Second-knot constant.
pub const BETA: f64 = 0.485;
/// Density-perturbation constant.
pub const LAYER_GAMMA: f64 = 0.99;

/// Below this `|w_{i+1} - w_i|` the inverse uses the linear solution.
const FLAT_SEGMENT: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FlowError {
    #[error("value {value} at row {row}, column {col} lies outside {domain}")]
    OutOfRange {
        row: usize,
        col: usize,
        value: f64,
        domain: &'static str,
    },
    #[error("invalid architecture: {0}")]
    Architecture(String),
    #[error("expected {expected} columns, found {found}")]
    Width { expected: usize, found: usize },
    #[error("squeeze index {k} outside 1..={max}")]
    Squeeze { k: usize, max: usize },
    #[error(transparent)]
    Net(#[from] NetError),
}

/// Axis-aligned box `[a_1,b_1] x ... x [a_d,b_d]`.
#[derive(Debug, Clone, PartialEq)]
pub struct BoxDomain<T> {
    lower: Vec<T>,
    upper: Vec<T>,
}

impl<T: Real> BoxDomain<T> {
    pub fn new(lower: Vec<T>, upper: Vec<T>) -> Result<Self, FlowError> {
        if lower.is_empty() || lower.len() != upper.len() {
            return Err(FlowError::Architecture(format!(
                "box bounds of lengths {} and {}",
                lower.len(),
                upper.len()
            )));
        }
        if lower
            .iter()
            .zip(&upper)
            .any(|(a, b)| !(a.is_finite() && b.is_finite() && a < b))
        {
            return Err(NetError::EmptyBox.into());
        }
        Ok(Self { lower, upper })
    }

    pub fn cube(dim: usize, lo: T, hi: T) -> Result<Self, FlowError> {
        Self::new(vec![lo; dim], vec![hi; dim])
    }

    pub fn dim(&self) -> usize {
        self.lower.len()
    }

    pub fn lower(&self) -> &[T] {
        &self.lower
    }

    pub fn upper(&self) -> &[T] {
        &self.upper
    }

    pub fn volume(&self) -> T {
        self.lower
            .iter()
            .zip(&self.upper)
            .fold(T::one(), |v, (a, b)| v * (*b - *a))
    }

    pub fn center(&self) -> Vec<T> {
        self.lower
            .iter()
            .zip(&self.upper)
            .map(|(a, b)| (*a + *b) * T::lit(0.5))
            .collect()
    }

    pub fn contains(&self, x: &[T]) -> bool {
        x.len() == self.dim()
            && x
                .iter()
                .zip(self.lower.iter().zip(&self.upper))
                .all(|(v, (a, b))| v >= a && v <= b)
    }

    pub fn contains_strict(&self, x: &[T]) -> bool {
        x.len() == self.dim()
            && x
                .iter()
                .zip(self.lower.iter().zip(&self.upper))
                .all(|(v, (a, b))| v > a && v < b)
    }

    /// Uniform points in the box.
    pub fn sample_uniform<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Array2<T> {
        let d = self.dim();
        let mut out = Array2::zeros((n, d));
        for mut row in out.rows_mut() {
            for j in 0..d {
                let u: f64 = rng.random();
                row[j] = self.lower[j] + (self.upper[j] - self.lower[j]) * T::lit(u);
            }
        }
        out
    }
}

/// `y = scale * x + shift`, mapping the box onto `[-1,1]^d`.
#[derive(Debug, Clone, PartialEq)]
pub struct AffineMap<T> {
    domain: BoxDomain<T>,
    scale: Vec<T>,
    shift: Vec<T>,
    logdet: T,
}

impl<T: Real> AffineMap<T> {
    pub fn new(domain: BoxDomain<T>) -> Self {
        let two = T::lit(2.0);
        let mut scale = Vec::with_capacity(domain.dim());
        let mut shift = Vec::with_capacity(domain.dim());
        let mut logdet = T::zero();
        for (&a, &b) in domain.lower.iter().zip(&domain.upper) {
            scale.push(two / (b - a));
            shift.push(-(b + a) / (b - a));
            logdet = logdet + (two / (b - a)).ln();
        }
        Self {
            domain,
            scale,
            shift,
            logdet,
        }
    }

    pub fn domain(&self) -> &BoxDomain<T> {
        &self.domain
    }

    pub fn scale(&self) -> &[T] {
        &self.scale
    }

    pub fn shift(&self) -> &[T] {
        &self.shift
    }

    pub fn logdet(&self) -> T {
        self.logdet
    }

    /// Maps points of the box to `[-1,1]^d`, clamping rounding overshoot.
    pub fn forward<E: Tensor<T>>(&self, x: &E) -> Result<E, FlowError> {
        let d = self.domain.dim();
        let (_, cols) = x.shape();
        if cols != d {
            return Err(FlowError::Width {
                expected: d,
                found: cols,
            });
        }
        let value = x.value();
        let mut clamp = false;
        for ((r, c), &v) in value.indexed_iter() {
            let (a, b) = (self.domain.lower[c], self.domain.upper[c]);
            let tol = T::boundary_tol() * (b - a).max(T::one());
            match clamp_within(v, a, b, tol) {
                Some(w) => clamp |= w != v,
                None => {
                    return Err(FlowError::OutOfRange {
                        row: r,
                        col: c,
                        value: v.as_f64(),
                        domain: "the domain box",
                    })
                }
            }
        }
        let scale = row_vec(&self.scale);
        let shift = row_vec(&self.shift);
        let y = x.mul(&x.lift(scale)).add(&x.lift(shift));
        Ok(if clamp {
            y.clamp_pass(-T::one(), T::one())
        } else {
            y
        })
    }

    /// Maps `[-1,1]^d` back to the box.
    pub fn inverse(&self, y: &Array2<T>) -> Array2<T> {
        let mut x = y.clone();
        for (j, mut col) in x.columns_mut().into_iter().enumerate() {
            let (a, b) = (self.domain.lower[j], self.domain.upper[j]);
            let half = (b - a) * T::lit(0.5);
            let mid = (b + a) * T::lit(0.5);
            col.mapv_inplace(|v| (mid + half * v).max(a).min(b));
        }
        x
    }
}

fn row_vec<T: Real>(v: &[T]) -> Array2<T> {
    Array2::from_shape_vec((1, v.len()), v.to_vec()).expect("row vector")
}

/// Constrained knots and densities for a batch: every field is `n x b`.
#[derive(Debug, Clone)]
pub struct Knots<E> {
    pub s1: E,
    pub s2: E,
    pub h: [E; 3],
    pub w: [E; 4],
    pub q1: E,
    pub q2: E,
}

/// Maps raw network output `[s1 | s2 | w0 | w1 | w2 | w3]` (each block `b`
/// columns) to knots and normalized densities.
pub fn constrain<T: Real, E: Tensor<T>>(raw: &E, b: usize) -> Knots<E> {
    let half = T::lit(0.5);
    let one = T::one();
    let s1 = raw
        .cols(0, b)
        .tanh()
        .scale(T::lit(ALPHA))
        .offset(T::lit(-1.0 / 3.0));
    let frac = raw.cols(b, b).tanh().scale(T::lit(BETA)).offset(half);
    let s2 = s1.add(&s1.neg().offset(one).mul(&frac));
    let h = [s1.offset(one), s2.sub(&s1), s2.neg().offset(one)];
    let u: Vec<E> = (0..4)
        .map(|i| {
            raw.cols((2 + i) * b, b)
                .tanh()
                .scale(T::lit(LAYER_GAMMA))
                .offset(one)
        })
        .collect();
    let c = trapezoid_sum(&u, &h);
    let w = [u[0].div(&c), u[1].div(&c), u[2].div(&c), u[3].div(&c)];
    let q1 = w[0].add(&w[1]).mul(&h[0]).scale(half);
    let q2 = q1.add(&w[1].add(&w[2]).mul(&h[1]).scale(half));
    Knots {
        s1,
        s2,
        h,
        w,
        q1,
        q2,
    }
}

fn trapezoid_sum<T: Real, E: Tensor<T>>(u: &[E], h: &[E; 3]) -> E {
    let half = T::lit(0.5);
    let a = u[0].add(&u[1]).mul(&h[0]).scale(half);
    let b = u[1].add(&u[2]).mul(&h[1]).scale(half);
    let c = u[2].add(&u[3]).mul(&h[2]).scale(half);
    a.add(&b).add(&c)
}

/// Elementwise branch index: 0 for `x <= s1`, 1 for `s1 < x <= s2`, else 2.
fn branch_index<T: Real>(x: &Array2<T>, s1: &Array2<T>, s2: &Array2<T>) -> Array2<u8> {
    let mut idx = Array2::zeros(x.dim());
    ndarray::Zip::from(&mut idx)
        .and(x)
        .and(s1)
        .and(s2)
        .for_each(|i, &v, &a, &b| {
            *i = if v <= a {
                0
            } else if v <= b {
                1
            } else {
                2
            }
        });
    idx
}

/// CDF `F(x)` and density `p(x)` of the piecewise-linear density, for `x` in
/// `[-1,1]` elementwise. The branch is chosen from primal values and frozen.
pub fn cdf_with_density<T: Real, E: Tensor<T>>(k: &Knots<E>, x: &E) -> (E, E) {
    let (n, b) = x.shape();
    let idx = branch_index(&x.value(), &k.s1.value(), &k.s2.value());
    let start = E::select(&idx, &[x.filled(n, b, -T::one()), k.s1.clone(), k.s2.clone()]);
    let wl = E::select(&idx, &[k.w[0].clone(), k.w[1].clone(), k.w[2].clone()]);
    let wr = E::select(&idx, &[k.w[1].clone(), k.w[2].clone(), k.w[3].clone()]);
    let h = E::select(&idx, &k.h);
    let q = E::select(&idx, &[x.filled(n, b, T::zero()), k.q1.clone(), k.q2.clone()]);
    let t = x.sub(&start);
    let slope = wr.sub(&wl).div(&h);
    let f = slope
        .scale(T::lit(0.5))
        .mul(&t.square())
        .add(&wl.mul(&t))
        .add(&q);
    let p = wl.add(&slope.mul(&t));
    (f, p)
}

/// Scalar inverse on one segment using the cancellation-free root.
fn invert_segment<T: Real>(r: T, wl: T, wr: T, h: T) -> T {
    let dw = wr - wl;
    let t = if dw.abs() < T::lit(FLAT_SEGMENT) {
        r / wl
    } else {
        let disc = (wl * wl + T::lit(2.0) * dw * r / h).max(T::zero());
        T::lit(2.0) * r / (wl + disc.sqrt())
    };
    t.max(T::zero()).min(h)
}

/// One dimension's constrained parameters on `[-1,1]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CouplingParams<T> {
    /// Knots `s_0 = -1 < s_1 < s_2 < s_3 = 1`.
    pub s: [T; 4],
    /// Nodal densities.
    pub w: [T; 4],
    /// Prefix masses, `q_0 = 0` and `q_3 = 1`.
    pub q: [T; 4],
    /// Normalizer of the unnormalized densities `1 + gamma tanh(w_hat)`.
    pub c: T,
}

impl<T: Real> CouplingParams<T> {
    pub fn from_raw(raw: [T; 6]) -> Self {
        let row = Array2::from_shape_vec((1, 6), raw.to_vec()).expect("1x6");
        let k = constrain(&row, 1);
        let g = |a: &Array2<T>| a[[0, 0]];
        let u0 = T::one() + T::lit(LAYER_GAMMA) * raw[2].tanh();
        let w = [g(&k.w[0]), g(&k.w[1]), g(&k.w[2]), g(&k.w[3])];
        let q1 = g(&k.q1);
        let q2 = g(&k.q2);
        let q3 = q2 + (w[2] + w[3]) * g(&k.h[2]) * T::lit(0.5);
        Self {
            s: [-T::one(), g(&k.s1), g(&k.s2), T::one()],
            w,
            q: [T::zero(), q1, q2, q3],
            c: u0 / w[0],
        }
    }

    fn segment(&self, s: T) -> usize {
        if s <= self.s[1] {
            0
        } else if s <= self.s[2] {
            1
        } else {
            2
        }
    }

    fn check_unit(v: T, lo: T, hi: T) -> Result<T, FlowError> {
        clamp_within(v, lo, hi, T::boundary_tol()).ok_or(FlowError::OutOfRange {
            row: 0,
            col: 0,
            value: v.as_f64(),
            domain: "the unit interval",
        })
    }

    /// Density at `s`.
    pub fn density(&self, s: T) -> Result<T, FlowError> {
        let s = Self::check_unit(s, -T::one(), T::one())?;
        let i = self.segment(s);
        let h = self.s[i + 1] - self.s[i];
        Ok(self.w[i] + (self.w[i + 1] - self.w[i]) / h * (s - self.s[i]))
    }

    pub fn cdf_eval(&self, s: T) -> Result<T, FlowError> {
        let s = Self::check_unit(s, -T::one(), T::one())?;
        let i = self.segment(s);
        let h = self.s[i + 1] - self.s[i];
        let t = s - self.s[i];
        let slope = (self.w[i + 1] - self.w[i]) / h;
        Ok(slope * T::lit(0.5) * (t * t) + self.w[i] * t + self.q[i])
    }

    pub fn cdf_invert(&self, q: T) -> Result<T, FlowError> {
        let q = Self::check_unit(q, T::zero(), T::one())?;
        let i = if q <= self.q[1] {
            0
        } else if q <= self.q[2] {
            1
        } else {
            2
        };
        let h = self.s[i + 1] - self.s[i];
        let t = invert_segment(q - self.q[i], self.w[i], self.w[i + 1], h);
        Ok((self.s[i] + t).max(-T::one()).min(T::one()))
    }
}

/// Checks `[-1,1]` membership with rounding tolerance; clamps if needed.
fn unit_guard<T: Real, E: Tensor<T>>(x: &E) -> Result<E, FlowError> {
    let mut clamp = false;
    for ((r, c), &v) in x.value().indexed_iter() {
        match clamp_within(v, -T::one(), T::one(), T::boundary_tol()) {
            Some(w) => clamp |= w != v,
            None => {
                return Err(FlowError::OutOfRange {
                    row: r,
                    col: c,
                    value: v.as_f64(),
                    domain: "[-1,1]",
                })
            }
        }
    }
    Ok(if clamp {
        x.clamp_pass(-T::one(), T::one())
    } else {
        x.clone()
    })
}

/// A CDF coupling layer on `m` active coordinates. The first
/// `ceil(m/2)` coordinates condition the rest when `cond_first`, and the
/// roles swap otherwise.
#[derive(Debug, Clone, PartialEq)]
pub struct CouplingLayer<T> {
    active: usize,
    cond_first: bool,
    net: Mlp<T>,
}

impl<T: Real> CouplingLayer<T> {
    fn split(active: usize, cond_first: bool) -> (usize, usize) {
        let d1 = active.div_ceil(2);
        if cond_first {
            (d1, active - d1)
        } else {
            (active - d1, d1)
        }
    }

    pub fn spec(active: usize, cond_first: bool, width: usize, hidden: usize) -> MlpSpec {
        let (c, u) = Self::split(active, cond_first);
        MlpSpec::coupling(c, u, width, hidden)
    }

    pub fn new(active: usize, cond_first: bool, net: Mlp<T>) -> Result<Self, FlowError> {
        let (c, u) = Self::split(active, cond_first);
        if active < 2 || net.spec().input != c || net.spec().output != 6 * u {
            return Err(FlowError::Architecture(format!(
                "coupling on {active} dims needs a {c} -> {} network",
                6 * u
            )));
        }
        Ok(Self {
            active,
            cond_first,
            net,
        })
    }

    pub fn active(&self) -> usize {
        self.active
    }

    pub fn cond_first(&self) -> bool {
        self.cond_first
    }

    pub fn net(&self) -> &Mlp<T> {
        &self.net
    }

    pub fn net_mut(&mut self) -> &mut Mlp<T> {
        &mut self.net
    }

    /// Column ranges `(cond_start, cond_len, upd_start, upd_len)`.
    fn ranges(&self) -> (usize, usize, usize, usize) {
        let (c, u) = Self::split(self.active, self.cond_first);
        if self.cond_first {
            (0, c, c, u)
        } else {
            (u, c, 0, u)
        }
    }

    /// Forward map on `n x m` inputs in `[-1,1]`, with the `n x 1` log-det.
    pub fn forward_bound<E: Tensor<T>>(&self, params: &[E], x: &E) -> Result<(E, E), FlowError> {
        let (cs, cl, us, ul) = self.ranges();
        let x = unit_guard(x)?;
        let cond = x.cols(cs, cl);
        let upd = x.cols(us, ul);
        let raw = self.net.forward_bound(params, &cond)?;
        let knots = constrain(&raw, ul);
        let (f, p) = cdf_with_density(&knots, &upd);
        let z = f.scale(T::lit(2.0)).offset(-T::one());
        let logdet = p.scale(T::lit(2.0)).ln().sum_cols();
        let out = if self.cond_first {
            E::concat_cols(&[cond, z])
        } else {
            E::concat_cols(&[z, cond])
        };
        Ok((out, logdet))
    }

    pub fn forward(&self, x: &Array2<T>) -> Result<(Array2<T>, Array2<T>), FlowError> {
        let params: Vec<Array2<T>> = self.net.tensors().into_iter().cloned().collect();
        self.forward_bound(&params, x)
    }

    pub fn inverse(&self, z: &Array2<T>) -> Result<Array2<T>, FlowError> {
        let (cs, cl, us, ul) = self.ranges();
        let z = unit_guard(z)?;
        let cond = z.slice(s![.., cs..cs + cl]).to_owned();
        let raw = self.net.forward(&cond)?;
        let k = constrain(&raw, ul);
        let mut out = z.clone();
        for r in 0..z.nrows() {
            for j in 0..ul {
                let at = |a: &Array2<T>| a[[r, j]];
                let q = ((z[[r, us + j]] + T::one()) * T::lit(0.5)).min(T::one());
                let (s1, s2) = (at(&k.s1), at(&k.s2));
                let (q1, q2) = (at(&k.q1), at(&k.q2));
                let w = [at(&k.w[0]), at(&k.w[1]), at(&k.w[2]), at(&k.w[3])];
                let x = if q <= q1 {
                    -T::one() + invert_segment(q, w[0], w[1], at(&k.h[0]))
                } else if q <= q2 {
                    s1 + invert_segment(q - q1, w[1], w[2], at(&k.h[1]))
                } else {
                    s2 + invert_segment(q - q2, w[2], w[3], at(&k.h[2]))
                };
                out[[r, us + j]] = x.max(-T::one()).min(T::one());
            }
        }
        Ok(out)
    }
}

/// Shape of the flow: `blocks` partition blocks (the first holds
/// `dim - blocks + 1` coordinates, the rest one each), coupling depth and
/// hidden width per stage.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FlowArch {
    pub dim: usize,
    pub blocks: usize,
    pub depths: Vec<usize>,
    pub widths: Vec<usize>,
    pub hidden_layers: usize,
}

impl FlowArch {
    pub fn new(
        dim: usize,
        blocks: usize,
        depths: Vec<usize>,
        widths: Vec<usize>,
        hidden_layers: usize,
    ) -> Result<Self, FlowError> {
        let arch = Self {
            dim,
            blocks,
            depths,
            widths,
            hidden_layers,
        };
        arch.validate()?;
        Ok(arch)
    }

    /// One coordinate deactivated per stage, same width everywhere.
    pub fn kr(dim: usize, depths: Vec<usize>, width: usize) -> Result<Self, FlowError> {
        let stages = depths.len();
        Self::new(dim, dim, depths, vec![width; stages], 2)
    }

    /// A single stage over all coordinates with no squeezing.
    pub fn classical(dim: usize, layers: usize, width: usize) -> Result<Self, FlowError> {
        Self::new(dim, 2, vec![layers], vec![width], 2)
    }

    /// `l_1 = first`, then `l_k = l_{k-1} - 2` while `l_{k-1} >= 6`.
    pub fn depth_schedule(first: usize, stages: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(stages);
        let mut l = first;
        for _ in 0..stages {
            out.push(l);
            if l >= 6 {
                l -= 2;
            }
        }
        out
    }

    pub fn stages(&self) -> usize {
        self.blocks - 1
    }

    /// Active coordinates during stage `k` (1-based).
    pub fn active_at(&self, k: usize) -> usize {
        self.dim - k + 1
    }

    pub fn validate(&self) -> Result<(), FlowError> {
        let fail = |m: String| Err(FlowError::Architecture(m));
        if self.dim < 2 {
            return fail(format!("dimension {} < 2", self.dim));
        }
        if self.blocks < 2 || self.blocks > self.dim {
            return fail(format!("block count {} outside 2..={}", self.blocks, self.dim));
        }
        if self.depths.len() != self.stages() || self.widths.len() != self.stages() {
            return fail(format!(
                "{} stages need {0} depths and widths, got {} and {}",
                self.stages(),
                self.depths.len(),
                self.widths.len()
            ));
        }
        if self.depths.iter().chain(&self.widths).any(|&v| v == 0) || self.hidden_layers == 0 {
            return fail("depths, widths and hidden layer count must be positive".into());
        }
        Ok(())
    }
}

/// Exact trainable-parameter count of a flow with this architecture.
pub fn count_dofs(arch: &FlowArch) -> usize {
    (1..=arch.stages())
        .map(|k| {
            let m = arch.active_at(k);
            (0..arch.depths[k - 1])
                .map(|i| {
                    CouplingLayer::<f64>::spec(m, i % 2 == 0, arch.widths[k - 1], arch.hidden_layers)
                        .num_params()
                })
                .sum::<usize>()
        })
        .sum()
}

/// Parameter count of two consecutive coupling layers with two hidden layers
/// of width `w` on `m` active coordinates.
pub fn pair_dofs(w: usize, m: usize) -> usize {
    2 * w * w + (7 * w + 6) * m + 4 * w
}

/// Drops the last active coordinate after stage `k` of a flow with
/// `blocks` blocks. Returns the remaining active part and the frozen column.
pub fn squeeze<T: Real, E: Tensor<T>>(x: &E, k: usize, blocks: usize) -> Result<(E, E), FlowError> {
    let max = blocks.saturating_sub(2);
    if k == 0 || k > max {
        return Err(FlowError::Squeeze { k, max });
    }
    let (_, m) = x.shape();
    Ok((x.cols(0, m - 1), x.cols(m - 1, 1)))
}

/// The composed bijection from the domain box onto `[-1,1]^d`.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowModel<T> {
    affine: AffineMap<T>,
    arch: FlowArch,
    stages: Vec<Vec<CouplingLayer<T>>>,
}

impl<T: Real> FlowModel<T> {
    fn build(
        domain: BoxDomain<T>,
        arch: FlowArch,
        mut make: impl FnMut(MlpSpec) -> Mlp<T>,
    ) -> Result<Self, FlowError> {
        arch.validate()?;
        if domain.dim() != arch.dim {
            return Err(FlowError::Width {
                expected: arch.dim,
                found: domain.dim(),
            });
        }
        let mut stages = Vec::with_capacity(arch.stages());
        for k in 1..=arch.stages() {
            let m = arch.active_at(k);
            let mut layers = Vec::with_capacity(arch.depths[k - 1]);
            for i in 0..arch.depths[k - 1] {
                let first = i % 2 == 0;
                let spec = CouplingLayer::<T>::spec(m, first, arch.widths[k - 1], arch.hidden_layers);
                layers.push(CouplingLayer::new(m, first, make(spec))?);
            }
            stages.push(layers);
        }
        Ok(Self {
            affine: AffineMap::new(domain),
            arch,
            stages,
        })
    }

    /// All parameters zero: the flow reduces to the affine map.
    pub fn zeros(domain: BoxDomain<T>, arch: FlowArch) -> Result<Self, FlowError> {
        Self::build(domain, arch, Mlp::zeros)
    }

    /// Glorot hidden layers and zero output layers: identity couplings that
    /// still receive nonzero gradients.
    pub fn new<R: Rng + ?Sized>(
        domain: BoxDomain<T>,
        arch: FlowArch,
        rng: &mut R,
    ) -> Result<Self, FlowError> {
        Self::build(domain, arch, |spec| Mlp::glorot(spec, rng, true))
    }

    pub fn arch(&self) -> &FlowArch {
        &self.arch
    }

    pub fn affine(&self) -> &AffineMap<T> {
        &self.affine
    }

    pub fn domain(&self) -> &BoxDomain<T> {
        self.affine.domain()
    }

    pub fn dim(&self) -> usize {
        self.arch.dim
    }

    pub fn stages(&self) -> &[Vec<CouplingLayer<T>>] {
        &self.stages
    }

    fn layers(&self) -> impl Iterator<Item = &CouplingLayer<T>> {
        self.stages.iter().flatten()
    }

    /// Section names aligned with [`Parametrized::tensors`].
    pub fn tensor_names(&self) -> Vec<String> {
        let mut out = Vec::new();
        for (k, stage) in self.stages.iter().enumerate() {
            for (i, layer) in stage.iter().enumerate() {
                for n in layer.net.tensor_names() {
                    out.push(format!("stage{}.layer{}.{n}", k + 1, i + 1));
                }
            }
        }
        out
    }

    /// `z = f(x)` and `log |det grad f(x)|` (`n x 1`) with bound parameters.
    pub fn forward_bound<E: Tensor<T>>(&self, params: &[E], x: &E) -> Result<(E, E), FlowError> {
        let (n, _) = x.shape();
        let mut active = self.affine.forward(x)?;
        let mut logdet = x.filled(n, 1, self.affine.logdet());
        let mut frozen: Vec<E> = Vec::new();
        let mut offset = 0;
        let last = self.stages.len();
        for (k, stage) in self.stages.iter().enumerate() {
            for layer in stage {
                let np = 2 * (layer.net.spec().hidden.len() + 1);
                let (y, ld) = layer.forward_bound(&params[offset..offset + np], &active)?;
                offset += np;
                active = y;
                logdet = logdet.add(&ld);
            }
            if k + 1 < last {
                let (rest, dropped) = squeeze(&active, k + 1, self.arch.blocks)?;
                active = rest;
                frozen.push(dropped);
            }
        }
        frozen.reverse();
        let mut parts = vec![active];
        parts.extend(frozen);
        let z = if parts.len() == 1 {
            parts.pop().expect("one part")
        } else {
            E::concat_cols(&parts)
        };
        Ok((z, logdet))
    }

    pub fn forward(&self, x: &Array2<T>) -> Result<(Array2<T>, Array2<T>), FlowError> {
        let params: Vec<Array2<T>> = self.tensors().into_iter().cloned().collect();
        self.forward_bound(&params, x)
    }

    /// `x = f^{-1}(z)` for `z` in `[-1,1]^d`.
    pub fn inverse(&self, z: &Array2<T>) -> Result<Array2<T>, FlowError> {
        let d = self.dim();
        if z.ncols() != d {
            return Err(FlowError::Width {
                expected: d,
                found: z.ncols(),
            });
        }
        let z = unit_guard(z)?;
        let last_m = self.arch.active_at(self.stages.len());
        let mut active = z.slice(s![.., 0..last_m]).to_owned();
        for (k, stage) in self.stages.iter().enumerate().rev() {
            if k + 1 < self.stages.len() {
                let m = self.arch.active_at(k + 1);
                let col = z.slice(s![.., m - 1..m]);
                active = ndarray::concatenate![ndarray::Axis(1), active, col];
            }
            for layer in stage.iter().rev() {
                active = layer.inverse(&active)?;
            }
        }
        Ok(self.affine.inverse(&active))
    }
}

impl<T: Real> Parametrized<T> for FlowModel<T> {
    fn tensors(&self) -> Vec<&Array2<T>> {
        self.layers().flat_map(|l| l.net.tensors()).collect()
    }

    fn tensors_mut(&mut self) -> Vec<&mut Array2<T>> {
        self.stages
            .iter_mut()
            .flatten()
            .flat_map(|l| l.net.tensors_mut())
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::PI;

    fn random_params(rng: &mut ChaCha8Rng, scale: f64) -> CouplingParams<f64> {
        let mut raw = [0.0; 6];
        raw.iter_mut()
            .for_each(|r| *r = rng.random_range(-scale..scale));
        CouplingParams::from_raw(raw)
    }

    fn random_model(d: usize, arch: FlowArch, seed: u64) -> FlowModel<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dom = BoxDomain::cube(d, -1.0, 1.0).unwrap();
        let mut m = FlowModel::zeros(dom, arch).unwrap();
        m.randomize(&mut rng, 0.5);
        m
    }

    #[test]
    fn affine_examples() {
        let unit = AffineMap::new(BoxDomain::cube(3, -1.0, 1.0).unwrap());
        assert_eq!(unit.logdet(), 0.0);
        let m = AffineMap::new(BoxDomain::cube(2, 0.0, PI).unwrap());
        assert!((m.scale()[0] - 2.0 / PI).abs() < 1e-15);
        assert_eq!(m.shift(), &[-1.0, -1.0]);
        assert!((m.logdet() - 2.0 * (2.0 / PI).ln()).abs() < 1e-15);
        assert!((m.logdet() + 0.9032).abs() < 1e-4);
        let y = m.forward(&array![[0.0, PI], [PI, 0.0]]).unwrap();
        assert_eq!(y, array![[-1.0, 1.0], [1.0, -1.0]]);
        let x = m.inverse(&y);
        assert!((x[[0, 1]] - PI).abs() < 1e-15);
    }

    #[test]
    fn affine_tolerance_and_rejection() {
        let m = AffineMap::new(BoxDomain::cube(1, 0.0, 1.0).unwrap());
        let y = m.forward(&array![[1.0 + 1e-14]]).unwrap();
        assert_eq!(y[[0, 0]], 1.0);
        assert!(matches!(
            m.forward(&array![[1.0 + 1e-9]]),
            Err(FlowError::OutOfRange { .. })
        ));
        assert!(m.forward(&array![[0.5, 0.5]]).is_err());
    }

    #[test]
    fn zero_raw_gives_uniform() {
        let p = CouplingParams::<f64>::from_raw([0.0; 6]);
        let third = 1.0 / 3.0;
        for (a, b) in p.s.iter().zip([-1.0, -third, third, 1.0]) {
            assert!((a - b).abs() < 1e-15);
        }
        assert!(p.w.iter().all(|w| (w - 0.5).abs() < 1e-15));
        assert!((p.c - 2.0).abs() < 1e-15);
        assert!((p.cdf_eval(0.0).unwrap() - 0.5).abs() < 1e-15);
        for q in [0.0, 0.1, 0.37, 0.5, 0.99, 1.0] {
            assert!((p.cdf_invert(q).unwrap() - (2.0 * q - 1.0)).abs() < 1e-15);
        }
    }

    #[test]
    fn saturated_first_knot() {
        let p = CouplingParams::<f64>::from_raw([40.0, 0.0, 0.0, 0.0, 0.0, 0.0]);
        assert!((p.s[1] - 32.0 / 99.0).abs() < 1e-15);
        let p = CouplingParams::<f64>::from_raw([-40.0, 0.0, 0.0, 0.0, 0.0, 0.0]);
        assert!((p.s[1] + 98.0 / 99.0).abs() < 1e-15);
    }

    #[test]
    fn cdf_matches_quadrature() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..5 {
            let p = random_params(&mut rng, 3.0);
            for _ in 0..20 {
                let s: f64 = rng.random_range(-1.0..1.0);
                // Simpson's rule is exact on each linear piece.
                let mut expected = 0.0;
                let mut lo = -1.0;
                for &knot in &p.s[1..] {
                    let hi = knot.min(s);
                    if hi > lo {
                        let f = |x: f64| p.density(x).unwrap();
                        expected += (hi - lo) / 6.0 * (f(lo) + 4.0 * f(0.5 * (lo + hi)) + f(hi));
                    }
                    lo = knot;
                    if knot >= s {
                        break;
                    }
                }
                let got = p.cdf_eval(s).unwrap();
                assert!((got - expected).abs() < 1e-12, "{got} vs {expected}");
            }
        }
    }

    #[test]
    fn cdf_endpoints_and_range_errors() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let p = random_params(&mut rng, 2.0);
        assert_eq!(p.cdf_eval(-1.0).unwrap(), 0.0);
        assert!((p.cdf_eval(1.0).unwrap() - 1.0).abs() < 1e-15);
        assert_eq!(p.cdf_invert(0.0).unwrap(), -1.0);
        assert!((p.cdf_invert(1.0).unwrap() - 1.0).abs() < 1e-15);
        assert!(p.cdf_eval(1.1).is_err());
        assert!(p.cdf_invert(-0.1).is_err());
    }

    #[test]
    fn inverse_round_trip_thousand_pairs() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        for _ in 0..1000 {
            let p = random_params(&mut rng, 4.0);
            let q: f64 = rng.random();
            let s = p.cdf_invert(q).unwrap();
            assert!((p.cdf_eval(s).unwrap() - q).abs() < 1e-12);
        }
    }

    #[test]
    fn vector_cdf_agrees_with_scalar() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let raw = Array2::from_shape_fn((5, 12), |_| rng.random_range(-2.0..2.0));
        let x = Array2::from_shape_fn((5, 2), |_| rng.random_range(-1.0..1.0));
        let k = constrain(&raw, 2);
        let (f, p) = cdf_with_density(&k, &x);
        for r in 0..5 {
            for j in 0..2 {
                let row = raw.row(r);
                let cp = CouplingParams::<f64>::from_raw([
                    row[j],
                    row[2 + j],
                    row[4 + j],
                    row[6 + j],
                    row[8 + j],
                    row[10 + j],
                ]);
                assert!((cp.cdf_eval(x[[r, j]]).unwrap() - f[[r, j]]).abs() < 1e-15);
                assert!((cp.density(x[[r, j]]).unwrap() - p[[r, j]]).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn zero_coupling_is_identity() {
        let spec = CouplingLayer::<f64>::spec(3, true, 8, 2);
        let layer = CouplingLayer::new(3, true, Mlp::<f64>::zeros(spec)).unwrap();
        let x = array![[0.1, -0.7, 0.9], [1.0, -1.0, 0.0]];
        let (z, ld) = layer.forward(&x).unwrap();
        for (a, b) in z.iter().zip(x.iter()) {
            assert!((a - b).abs() < 1e-15);
        }
        assert!(ld.iter().all(|v| v.abs() < 1e-15));
        let back = layer.inverse(&x).unwrap();
        for (a, b) in back.iter().zip(x.iter()) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn coupling_preserves_boundary() {
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let spec = CouplingLayer::<f64>::spec(2, false, 6, 2);
        let mut net = Mlp::<f64>::zeros(spec);
        net.randomize(&mut rng, 1.0);
        let layer = CouplingLayer::new(2, false, net).unwrap();
        let (z, _) = layer.forward(&array![[-1.0, 0.3], [1.0, -0.4]]).unwrap();
        assert_eq!(z[[0, 0]], -1.0);
        assert!((z[[1, 0]] - 1.0).abs() < 1e-15);
        let x = layer.inverse(&array![[-1.0, 0.3], [1.0, -0.4]]).unwrap();
        assert_eq!(x[[0, 0]], -1.0);
        assert_eq!(x[[1, 0]], 1.0);
    }

    fn fd_logdet(model: &FlowModel<f64>, x: &Array2<f64>) -> f64 {
        let d = x.ncols();
        let h = 1e-6;
        let mut jac = dense::Matrix::zeros(d);
        for j in 0..d {
            let mut xp = x.clone();
            xp[[0, j]] += h;
            let mut xm = x.clone();
            xm[[0, j]] -= h;
            let zp = model.forward(&xp).unwrap().0;
            let zm = model.forward(&xm).unwrap().0;
            for i in 0..d {
                jac.set(i, j, (zp[[0, i]] - zm[[0, i]]) / (2.0 * h));
            }
        }
        jac.det().abs().ln()
    }

    /// Minimal dense determinant by partial-pivot elimination, test-only.
    mod dense {
        pub struct Matrix {
            n: usize,
            a: Vec<f64>,
        }
        impl Matrix {
            pub fn zeros(n: usize) -> Self {
                Self { n, a: vec![0.0; n * n] }
            }
            pub fn set(&mut self, i: usize, j: usize, v: f64) {
                self.a[i * self.n + j] = v;
            }
            pub fn det(mut self) -> f64 {
                let n = self.n;
                let mut det = 1.0;
                for c in 0..n {
                    let p = (c..n)
                        .max_by(|&i, &j| {
                            self.a[i * n + c].abs().total_cmp(&self.a[j * n + c].abs())
                        })
                        .unwrap();
                    if p != c {
                        for k in 0..n {
                            self.a.swap(c * n + k, p * n + k);
                        }
                        det = -det;
                    }
                    let piv = self.a[c * n + c];
                    det *= piv;
                    for r in c + 1..n {
                        let f = self.a[r * n + c] / piv;
                        for k in c..n {
                            self.a[r * n + k] -= f * self.a[c * n + k];
                        }
                    }
                }
                det
            }
        }
    }

    #[test]
    fn logdet_matches_finite_difference() {
        let mut rng = ChaCha8Rng::seed_from_u64(16);
        for (d, seed) in [(2usize, 1u64), (3, 2)] {
            let arch = FlowArch::kr(d, vec![4; d - 1], 6).unwrap();
            let model = random_model(d, arch, seed);
            for _ in 0..10 {
                let x = Array2::from_shape_fn((1, d), |_| rng.random_range(-0.95..0.95));
                let (_, ld) = model.forward(&x).unwrap();
                let fd = fd_logdet(&model, &x);
                assert!((ld[[0, 0]] - fd).abs() < 1e-5, "d={d}: {} vs {fd}", ld[[0, 0]]);
            }
        }
    }

    #[test]
    fn zero_model_is_affine() {
        let dom = BoxDomain::cube(2, 0.0, PI).unwrap();
        let model = FlowModel::zeros(dom, FlowArch::kr(2, vec![4], 8).unwrap()).unwrap();
        let x = array![[0.3, 2.0], [PI, 0.0], [1.0, 1.0]];
        let (z, ld) = model.forward(&x).unwrap();
        let y = model.affine().forward(&x).unwrap();
        assert_eq!(z, y);
        assert!(ld.iter().all(|&v| v == model.affine().logdet()));
        assert_eq!(z.row(1).to_vec(), vec![1.0, -1.0]);
        let mid = model.inverse(&array![[0.0, 0.0]]).unwrap();
        assert!((mid[[0, 0]] - PI / 2.0).abs() < 1e-15);
        assert!((mid[[0, 1]] - PI / 2.0).abs() < 1e-15);
    }

    #[test]
    fn squeeze_examples() {
        let x = array![[1.0, 2.0, 3.0, 4.0]];
        let (a, f) = squeeze(&x, 1, 4).unwrap();
        assert_eq!(a, array![[1.0, 2.0, 3.0]]);
        assert_eq!(f, array![[4.0]]);
        let (a, _) = squeeze(&array![[1.0, 2.0, 3.0]], 2, 4).unwrap();
        assert_eq!(a.ncols(), 2);
        assert!(squeeze(&x, 3, 4).is_err());
        assert!(squeeze(&x, 0, 4).is_err());
    }

    #[test]
    fn frozen_coordinates_pass_through_final_stages() {
        // Stage 1 transforms all four coordinates; later stages never touch
        // the coordinate frozen after stage 1.
        let model = random_model(4, FlowArch::kr(4, vec![2, 2, 2], 5).unwrap(), 3);
        let x = array![[0.1, -0.3, 0.5, 0.2]];
        let (z, _) = model.forward(&x).unwrap();
        let mut after_stage1 = x.clone();
        for l in &model.stages()[0] {
            after_stage1 = l.forward(&after_stage1).unwrap().0;
        }
        assert_eq!(z[[0, 3]], after_stage1[[0, 3]]);
    }

    #[test]
    fn later_stages_ignore_frozen_coordinate() {
        // With an identity first stage, the trailing coordinate is frozen
        // immediately and cannot influence the others.
        let mut model = random_model(4, FlowArch::kr(4, vec![3, 3, 3], 5).unwrap(), 4);
        for layer in &mut model.stages[0] {
            layer.net = Mlp::zeros(layer.net.spec().clone());
        }
        let x = array![[0.1, -0.3, 0.5, 0.2]];
        let (z, _) = model.forward(&x).unwrap();
        let mut x2 = x.clone();
        x2[[0, 3]] = -0.6;
        let (z2, _) = model.forward(&x2).unwrap();
        for j in 0..3 {
            assert_eq!(z[[0, j]], z2[[0, j]]);
        }
        assert_eq!(z2[[0, 3]], -0.6);
        let mut x3 = x.clone();
        x3[[0, 0]] = 0.7;
        assert_ne!(model.forward(&x3).unwrap().0[[0, 1]], z[[0, 1]]);
    }

    #[test]
    fn corners_map_to_corners() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let dom = BoxDomain::<f64>::new(vec![0.0, -2.0, 1.0], vec![1.0, 2.0, 5.0]).unwrap();
        let mut model = FlowModel::zeros(dom, FlowArch::kr(3, vec![3, 3], 6).unwrap()).unwrap();
        model.randomize(&mut rng, 0.7);
        let x = array![[0.0, 2.0, 1.0], [1.0, -2.0, 5.0]];
        let (z, _) = model.forward(&x).unwrap();
        let expect = array![[-1.0, 1.0, -1.0], [1.0, -1.0, 1.0]];
        for (a, b) in z.iter().zip(expect.iter()) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn model_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for d in [2usize, 4, 8] {
            let arch = FlowArch::kr(d, FlowArch::depth_schedule(6, d - 1), 8).unwrap();
            let model = random_model(d, arch, d as u64);
            let z = Array2::from_shape_fn((200, d), |_| rng.random_range(-1.0..1.0));
            let x = model.inverse(&z).unwrap();
            let (z2, _) = model.forward(&x).unwrap();
            let err = (&z2 - &z).iter().fold(0.0f64, |m, v| m.max(v.abs()));
            assert!(err < 1e-10, "d={d}: {err}");
        }
    }

    #[test]
    fn dof_counts() {
        assert_eq!(pair_dofs(32, 2), 2636);
        let arch = FlowArch::kr(2, vec![2], 32).unwrap();
        assert_eq!(count_dofs(&arch), 2636);
        let dom = BoxDomain::cube(2, 0.0, 1.0).unwrap();
        assert_eq!(FlowModel::<f64>::zeros(dom, arch).unwrap().num_params(), 2636);
        // Pair formula holds at every stage of a deeper model.
        let arch = FlowArch::kr(5, vec![4, 2, 6, 2], 7).unwrap();
        let expected: usize = (1..=4)
            .map(|k| arch.depths[k - 1] / 2 * pair_dofs(7, arch.active_at(k)))
            .sum();
        assert_eq!(count_dofs(&arch), expected);
    }

    #[test]
    fn depth_schedule_rule() {
        assert_eq!(FlowArch::depth_schedule(16, 7), vec![16, 14, 12, 10, 8, 6, 4]);
        assert_eq!(FlowArch::depth_schedule(4, 3), vec![4, 4, 4]);
        assert!(FlowArch::kr(3, vec![2], 4).is_err());
        assert!(FlowArch::new(4, 5, vec![1; 4], vec![1; 4], 2).is_err());
    }

    #[test]
    fn classical_has_single_stage() {
        let model = random_model(4, FlowArch::classical(4, 3, 6).unwrap(), 8);
        assert_eq!(model.stages().len(), 1);
        assert_eq!(model.stages()[0][0].active(), 4);
        let z = array![[0.2, -0.9, 0.4, 0.0]];
        let x = model.inverse(&z).unwrap();
        let (z2, _) = model.forward(&x).unwrap();
        assert!((&z2 - &z).iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn f32_flow_runs() {
        let dom = BoxDomain::cube(2, 0.0f32, 1.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut model = FlowModel::zeros(dom, FlowArch::kr(2, vec![2], 4).unwrap()).unwrap();
        model.randomize(&mut rng, 0.3);
        let z = Array2::from_elem((3, 2), 0.25f32);
        let x = model.inverse(&z).unwrap();
        let (z2, _) = model.forward(&x).unwrap();
        assert!((&z2 - &z).iter().all(|v| v.abs() < 1e-4));
    }

    proptest! {
        #[test]
        fn knot_bounds_hold(raw in prop::array::uniform6(-50.0f64..50.0)) {
            let p = CouplingParams::from_raw(raw);
            prop_assert!(p.s[1] >= -98.0 / 99.0 - 1e-15 && p.s[1] <= 32.0 / 99.0 + 1e-15);
            prop_assert!(p.s[1] < p.s[2] && p.s[2] < 1.0);
            prop_assert!(p.s[2] - p.s[1] >= 0.015 * (1.0 - p.s[1]) * (1.0 - 1e-12));
            prop_assert!(p.w.iter().all(|&w| w > 0.0));
            prop_assert!(p.w.iter().all(|&w| w > 0.01 / p.c * (1.0 - 1e-12) && w < 1.99 / p.c * (1.0 + 1e-12)));
            prop_assert!((p.q[3] - 1.0).abs() < 1e-14);
        }

        #[test]
        fn cdf_strictly_increasing(raw in prop::array::uniform6(-5.0f64..5.0), a in -1.0f64..1.0, b in -1.0f64..1.0) {
            prop_assume!((a - b).abs() > 1e-9);
            let p = CouplingParams::from_raw(raw);
            let (lo, hi) = if a < b { (a, b) } else { (b, a) };
            prop_assert!(p.cdf_eval(lo).unwrap() < p.cdf_eval(hi).unwrap());
        }

        #[test]
        fn cdf_round_trip(raw in prop::array::uniform6(-5.0f64..5.0), q in 0.0f64..=1.0) {
            let p = CouplingParams::from_raw(raw);
            let s = p.cdf_invert(q).unwrap();
            prop_assert!((p.cdf_eval(s).unwrap() - q).abs() < 1e-12);
        }
    }
}
