//! Benchmark distributions and PDE instances with exact solutions.

use std::f64::consts::{E, PI};
use std::sync::OnceLock;

use ndarray::{Array1, Array2, Axis};
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

use crate::diffcore::Tensor;
use crate::estimate::TrainConfig;
use crate::flow::{BoxDomain, FlowArch};
use crate::pdesolve::{Fields, LossWeights, PdeProblem, SolveConfig};
use crate::scalar::Real;

#[derive(Debug, Error, PartialEq)]
pub enum ProblemError {
    #[error("point {row} lies outside the support of {truth}")]
    OutsideSupport { truth: &'static str, row: usize },
    #[error("expected {expected} columns, found {found}")]
    Width { expected: usize, found: usize },
    #[error("unknown {kind} {name:?}")]
    Unknown { kind: &'static str, name: String },
}

/// A reference distribution with sampler and exact log-density.
pub trait SyntheticTruth: Send + Sync {
    fn name(&self) -> &'static str;
    fn domain(&self) -> BoxDomain<f64>;
    fn sample(&self, n: usize, rng: &mut dyn RngCore) -> Array2<f64>;
    fn log_pdf(&self, x: &Array2<f64>) -> Result<Array1<f64>, ProblemError>;

    /// Closed-form entropy, when available.
    fn entropy(&self) -> Option<f64> {
        None
    }

    /// Monte-Carlo entropy with its standard error.
    fn entropy_estimate(&self, n: usize, rng: &mut dyn RngCore) -> Result<(f64, f64), ProblemError> {
        let lp = self.log_pdf(&self.sample(n, rng))?;
        let mean = -lp.mean().unwrap_or(f64::NAN);
        let var = lp.var(1.0);
        Ok((mean, (var / n as f64).sqrt()))
    }
}

fn check_width(x: &Array2<f64>, d: usize) -> Result<(), ProblemError> {
    if x.ncols() != d {
        return Err(ProblemError::Width {
            expected: d,
            found: x.ncols(),
        });
    }
    Ok(())
}

/// Radial density `1/r` on `1 <= r <= e` with uniform angle.
#[derive(Debug, Clone, Copy, Default)]
pub struct Annulus;

impl Annulus {
    /// Entropy of the polar density `1/(2 pi r)` on `[1,e] x [0, 2 pi]`.
    pub fn polar_entropy() -> f64 {
        0.5 + (2.0 * PI).ln()
    }
}

impl SyntheticTruth for Annulus {
    fn name(&self) -> &'static str {
        "annulus"
    }

    fn domain(&self) -> BoxDomain<f64> {
        BoxDomain::cube(2, -E, E).expect("valid box")
    }

    fn sample(&self, n: usize, rng: &mut dyn RngCore) -> Array2<f64> {
        let mut out = Array2::zeros((n, 2));
        for mut row in out.rows_mut() {
            let theta = 2.0 * PI * rng.random::<f64>();
            let r = rng.random::<f64>().exp();
            row[0] = r * theta.cos();
            row[1] = r * theta.sin();
        }
        out
    }

    fn log_pdf(&self, x: &Array2<f64>) -> Result<Array1<f64>, ProblemError> {
        check_width(x, 2)?;
        let tol = 1e-12;
        x.rows()
            .into_iter()
            .enumerate()
            .map(|(row, p)| {
                let r2 = p[0] * p[0] + p[1] * p[1];
                if r2 < 1.0 - tol || r2 > E * E + tol {
                    return Err(ProblemError::OutsideSupport {
                        truth: "annulus",
                        row,
                    });
                }
                Ok(-(2.0 * PI * r2).ln())
            })
            .collect()
    }

    /// Entropy of the Cartesian density `1/(2 pi (x^2+y^2))`.
    fn entropy(&self) -> Option<f64> {
        Some(1.0 + (2.0 * PI).ln())
    }
}

/// Monte-Carlo estimate of the mixture mass inside the box.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MixtureNormalizer {
    pub c: f64,
    pub samples: usize,
    pub seed: u64,
}

pub const NORMALIZER_SAMPLES: usize = 10_000_000;
pub const NORMALIZER_SEED: u64 = 0x6b72_6e65_7401;

/// Six isotropic Gaussians restricted to `[-1,1]^2`.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianMixture {
    pub centers: [[f64; 2]; 6],
    pub sigma: f64,
    pub normalizer: MixtureNormalizer,
}

impl GaussianMixture {
    pub const SIGMA: f64 = 0.15;

    /// Center `i` in `1..=6`.
    pub fn center(i: usize) -> [f64; 2] {
        let a = i as f64 * PI / 3.0;
        [0.8 * a.cos() + 0.3, 0.8 * a.sin() + 0.3]
    }

    /// Mixture with the shared default normalizer.
    pub fn new() -> Self {
        static DEFAULT: OnceLock<MixtureNormalizer> = OnceLock::new();
        let n = *DEFAULT.get_or_init(|| Self::estimate_normalizer(NORMALIZER_SAMPLES, NORMALIZER_SEED));
        Self::with_normalizer(n)
    }

    pub fn with_normalizer(normalizer: MixtureNormalizer) -> Self {
        let mut centers = [[0.0; 2]; 6];
        for (i, c) in centers.iter_mut().enumerate() {
            *c = Self::center(i + 1);
        }
        Self {
            centers,
            sigma: Self::SIGMA,
            normalizer,
        }
    }

    /// Unnormalized average of the six component densities.
    pub fn mixture_pdf(centers: &[[f64; 2]; 6], sigma: f64, y: [f64; 2]) -> f64 {
        let s2 = sigma * sigma;
        let k = 1.0 / (2.0 * PI * s2);
        centers
            .iter()
            .map(|c| {
                let (a, b) = (y[0] - c[0], y[1] - c[1]);
                k * (-(a * a + b * b) / (2.0 * s2)).exp()
            })
            .sum::<f64>()
            / 6.0
    }

    /// `C ~ (4/M) sum_j (1/6) sum_i N(y^j)` with `y^j` uniform on the box.
    pub fn estimate_normalizer(samples: usize, seed: u64) -> MixtureNormalizer {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut centers = [[0.0; 2]; 6];
        for (i, c) in centers.iter_mut().enumerate() {
            *c = Self::center(i + 1);
        }
        let mut sum = 0.0;
        for _ in 0..samples {
            let y = [2.0 * rng.random::<f64>() - 1.0, 2.0 * rng.random::<f64>() - 1.0];
            sum += Self::mixture_pdf(&centers, Self::SIGMA, y);
        }
        MixtureNormalizer {
            c: 4.0 * sum / samples as f64,
            samples,
            seed,
        }
    }
}

impl Default for GaussianMixture {
    fn default() -> Self {
        Self::new()
    }
}

impl SyntheticTruth for GaussianMixture {
    fn name(&self) -> &'static str {
        "gaussian-mixture"
    }

    fn domain(&self) -> BoxDomain<f64> {
        BoxDomain::cube(2, -1.0, 1.0).expect("valid box")
    }

    fn sample(&self, n: usize, rng: &mut dyn RngCore) -> Array2<f64> {
        let mut out = Array2::zeros((0, 2));
        while out.nrows() < n {
            let c = self.centers[rng.random_range(0..6)];
            let a: f64 = rng.sample(StandardNormal);
            let b: f64 = rng.sample(StandardNormal);
            let y = [c[0] + self.sigma * a, c[1] + self.sigma * b];
            if y.iter().all(|v| v.abs() <= 1.0) {
                out.push_row(ndarray::ArrayView1::from(&y)).expect("width");
            }
        }
        out
    }

    fn log_pdf(&self, x: &Array2<f64>) -> Result<Array1<f64>, ProblemError> {
        check_width(x, 2)?;
        let ln_c = self.normalizer.c.ln();
        x.rows()
            .into_iter()
            .enumerate()
            .map(|(row, p)| {
                if p.iter().any(|v| v.abs() > 1.0 + 1e-12) {
                    return Err(ProblemError::OutsideSupport {
                        truth: "gaussian-mixture",
                        row,
                    });
                }
                Ok(Self::mixture_pdf(&self.centers, self.sigma, [p[0], p[1]]).ln() - ln_c)
            })
            .collect()
    }
}

/// Monte-Carlo estimate of the probability of the admissible set.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MassEstimate {
    pub mass: f64,
    pub samples: usize,
    pub seed: u64,
}

impl MassEstimate {
    pub fn std_error(&self) -> f64 {
        (self.mass * (1.0 - self.mass) / self.samples as f64).sqrt()
    }
}

pub const MASS_SAMPLES: usize = 10_000_000;
pub const MASS_SEED: u64 = 0x686f_6c65_7302;

/// I.i.d. logistic coordinates restricted to a box with an elliptic hole in
/// every adjacent coordinate pair.
#[derive(Debug, Clone, PartialEq)]
pub struct LogisticHoles {
    pub dim: usize,
    pub scale: f64,
    pub radius: f64,
    pub aspect: f64,
    pub half_width: f64,
    pub mass: MassEstimate,
}

impl LogisticHoles {
    /// `d = 8`, `s = 2`, `C = 5`, aspect 3, box `[-10,10]^8`.
    pub fn standard() -> Self {
        static DEFAULT: OnceLock<MassEstimate> = OnceLock::new();
        let mut t = Self::unestimated(8, 2.0, 5.0, 3.0, 10.0);
        t.mass = *DEFAULT.get_or_init(|| t.estimate_mass(MASS_SAMPLES, MASS_SEED));
        t
    }

    /// Instance whose mass is estimated with the given sample count and seed.
    pub fn new(dim: usize, scale: f64, radius: f64, aspect: f64, half_width: f64, samples: usize, seed: u64) -> Self {
        let mut t = Self::unestimated(dim, scale, radius, aspect, half_width);
        t.mass = t.estimate_mass(samples, seed);
        t
    }

    fn unestimated(dim: usize, scale: f64, radius: f64, aspect: f64, half_width: f64) -> Self {
        Self {
            dim,
            scale,
            radius,
            aspect,
            half_width,
            mass: MassEstimate {
                mass: f64::NAN,
                samples: 0,
                seed: 0,
            },
        }
    }

    /// Rotation angle of pair `j` in `1..dim`.
    pub fn angle(j: usize) -> f64 {
        if j.is_multiple_of(2) {
            PI / 4.0
        } else {
            3.0 * PI / 4.0
        }
    }

    /// `|diag(aspect, 1) Rot(theta_j) [a, b]|`.
    pub fn pair_norm(&self, j: usize, a: f64, b: f64) -> f64 {
        let (s, c) = Self::angle(j).sin_cos();
        let u = self.aspect * (c * a - s * b);
        let v = s * a + c * b;
        u.hypot(v)
    }

    pub fn admissible(&self, y: &[f64]) -> bool {
        y.iter().all(|v| v.abs() <= self.half_width)
            && (1..self.dim).all(|j| self.pair_norm(j, y[j - 1], y[j]) >= self.radius)
    }

    fn draw_logistic(&self, rng: &mut dyn RngCore) -> f64 {
        loop {
            let u: f64 = rng.random();
            if u > 0.0 {
                return self.scale * (u / (1.0 - u)).ln();
            }
        }
    }

    pub fn estimate_mass(&self, samples: usize, seed: u64) -> MassEstimate {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut y = vec![0.0; self.dim];
        let mut hits = 0usize;
        for _ in 0..samples {
            for v in y.iter_mut() {
                *v = self.draw_logistic(&mut rng);
            }
            hits += usize::from(self.admissible(&y));
        }
        MassEstimate {
            mass: hits as f64 / samples as f64,
            samples,
            seed,
        }
    }

    /// Samples with the number of proposals it took.
    pub fn sample_counted(&self, n: usize, rng: &mut dyn RngCore) -> (Array2<f64>, usize) {
        let mut out = Array2::zeros((n, self.dim));
        let mut y = vec![0.0; self.dim];
        let (mut filled, mut proposals) = (0, 0);
        while filled < n {
            for v in y.iter_mut() {
                *v = self.draw_logistic(rng);
            }
            proposals += 1;
            if self.admissible(&y) {
                out.row_mut(filled).assign(&ndarray::ArrayView1::from(&y));
                filled += 1;
            }
        }
        (out, proposals)
    }

    fn log_logistic(&self, y: f64) -> f64 {
        let t = y.abs() / self.scale;
        -t - self.scale.ln() - 2.0 * (-t).exp().ln_1p()
    }
}

impl SyntheticTruth for LogisticHoles {
    fn name(&self) -> &'static str {
        "logistic-holes"
    }

    fn domain(&self) -> BoxDomain<f64> {
        BoxDomain::cube(self.dim, -self.half_width, self.half_width).expect("valid box")
    }

    fn sample(&self, n: usize, rng: &mut dyn RngCore) -> Array2<f64> {
        self.sample_counted(n, rng).0
    }

    /// Inadmissible points map to negative infinity.
    fn log_pdf(&self, x: &Array2<f64>) -> Result<Array1<f64>, ProblemError> {
        check_width(x, self.dim)?;
        let ln_mass = self.mass.mass.ln();
        Ok(x.map_axis(Axis(1), |row| {
            let y = row.to_vec();
            if !self.admissible(&y) {
                return f64::NEG_INFINITY;
            }
            y.iter().map(|&v| self.log_logistic(v)).sum::<f64>() - ln_mass
        }))
    }
}

/// Looks up a truth by its name.
pub fn truth_by_name(name: &str) -> Result<Box<dyn SyntheticTruth>, ProblemError> {
    match name {
        "annulus" => Ok(Box::new(Annulus)),
        "gaussian-mixture" => Ok(Box::new(GaussianMixture::new())),
        "logistic-holes" => Ok(Box::new(LogisticHoles::standard())),
        _ => Err(ProblemError::Unknown {
            kind: "truth",
            name: name.to_string(),
        }),
    }
}

fn cos_product<T: Real>(x: &Array2<T>) -> Array1<T> {
    x.map_axis(Axis(1), |r| r.iter().fold(T::one(), |acc, v| acc * v.cos()))
}

fn grad_cos_product<T: Real>(x: &Array2<T>) -> Array2<T> {
    let mut g = Array2::zeros(x.dim());
    for (r, row) in x.rows().into_iter().enumerate() {
        for j in 0..row.len() {
            let mut v = -row[j].sin();
            for (i, xi) in row.iter().enumerate() {
                if i != j {
                    v = v * xi.cos();
                }
            }
            g[[r, j]] = v;
        }
    }
    g
}

fn column<T: Real>(v: Array1<T>) -> Array2<T> {
    v.insert_axis(Axis(1))
}

/// `-lap p + p = f` on `(0, pi)^d` with zero Neumann data and exact solution
/// `p = c (prod cos x_i + 9/8)`, `c = 8 / (9 pi^d)`.
#[derive(Debug, Clone, PartialEq)]
pub struct EllipticCosine<T> {
    dim: usize,
    domain: BoxDomain<T>,
}

impl<T: Real> EllipticCosine<T> {
    pub fn new(dim: usize) -> Self {
        Self {
            dim,
            domain: BoxDomain::cube(dim, T::zero(), T::PI()).expect("valid box"),
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    fn c(&self) -> T {
        T::lit(8.0 / (9.0 * PI.powi(self.dim as i32)))
    }

    pub fn exact_p(&self, x: &Array2<T>) -> Array1<T> {
        let c = self.c();
        cos_product(x).mapv(|v| c * (v + T::lit(9.0 / 8.0)))
    }

    pub fn forcing(&self, x: &Array2<T>) -> Array1<T> {
        let c = self.c();
        let k = T::lit(self.dim as f64 + 1.0);
        cos_product(x).mapv(|v| c * (k * v + T::lit(9.0 / 8.0)))
    }
}

/// The four-dimensional elliptic benchmark.
pub fn fourdim_problem<T: Real>() -> EllipticCosine<T> {
    EllipticCosine::new(4)
}

impl<T: Real> PdeProblem<T> for EllipticCosine<T> {
    fn name(&self) -> &str {
        "elliptic-cosine"
    }

    fn domain(&self) -> &BoxDomain<T> {
        &self.domain
    }

    fn unknowns(&self) -> usize {
        1
    }

    fn residuals<E: Tensor<T>>(&self, x: &Array2<T>, fields: &[Fields<E>]) -> Vec<E> {
        let f = &fields[0];
        let forcing = f.p.lift(column(self.forcing(x)));
        vec![f.p.sub(&f.div_g).sub(&forcing)]
    }

    fn exact(&self, x: &Array2<T>) -> Option<Vec<Fields<Array2<T>>>> {
        let c = self.c();
        let grad = grad_cos_product(x).mapv(|v| c * v);
        let lap = cos_product(x).mapv(|v| -T::lit(self.dim as f64) * c * v);
        Some(vec![Fields {
            p: column(self.exact_p(x)),
            grad_p: grad.clone(),
            g: grad,
            div_g: column(lap),
        }])
    }
}

/// Stationary Keller-Segel system on `(0, pi)^2`:
/// `lap u - div(u grad v) + f = 0`, `-lap v + v = u`, zero Neumann data.
/// Unknown 0 is `u`, unknown 1 is `v`.
#[derive(Debug, Clone, PartialEq)]
pub struct KellerSegel<T> {
    domain: BoxDomain<T>,
}

impl<T: Real> Default for KellerSegel<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> KellerSegel<T> {
    pub fn new() -> Self {
        Self {
            domain: BoxDomain::cube(2, T::zero(), T::PI()).expect("valid box"),
        }
    }

    fn pi2() -> T {
        T::PI() * T::PI()
    }

    pub fn exact_u(&self, x: &Array2<T>) -> Array1<T> {
        cos_product(x).mapv(|c| (c + T::one()) / Self::pi2())
    }

    pub fn exact_v(&self, x: &Array2<T>) -> Array1<T> {
        cos_product(x).mapv(|c| (c + T::lit(3.0)) / (T::lit(3.0) * Self::pi2()))
    }

    /// Forcing that makes the exact pair solve the system:
    /// `f = 2C/pi^2 + (|grad C|^2 - 2C^2 - 2C) / (3 pi^4)` with
    /// `C = cos x cos y`.
    pub fn forcing(&self, x: &Array2<T>) -> Array1<T> {
        let two = T::lit(2.0);
        let pi4 = Self::pi2() * Self::pi2();
        x.map_axis(Axis(1), |r| {
            let (sx, cx) = r[0].sin_cos();
            let (sy, cy) = r[1].sin_cos();
            let c = cx * cy;
            let grad2 = sx * sx * cy * cy + cx * cx * sy * sy;
            two * c / Self::pi2() + (grad2 - two * c * c - two * c) / (T::lit(3.0) * pi4)
        })
    }
}

/// The Keller-Segel benchmark.
pub fn keller_segel_problem<T: Real>() -> KellerSegel<T> {
    KellerSegel::new()
}

impl<T: Real> PdeProblem<T> for KellerSegel<T> {
    fn name(&self) -> &str {
        "keller-segel"
    }

    fn domain(&self) -> &BoxDomain<T> {
        &self.domain
    }

    fn unknowns(&self) -> usize {
        2
    }

    /// `div phi - phi . psi - (div psi) u + f` and `-div psi + v - u`.
    fn residuals<E: Tensor<T>>(&self, x: &Array2<T>, fields: &[Fields<E>]) -> Vec<E> {
        let (u, v) = (&fields[0], &fields[1]);
        let f = u.p.lift(column(self.forcing(x)));
        let chem = u.g.mul(&v.g).sum_cols();
        let first = u.div_g.sub(&chem).sub(&v.div_g.mul(&u.p)).add(&f);
        let second = v.p.sub(&v.div_g).sub(&u.p);
        vec![first, second]
    }

    fn exact(&self, x: &Array2<T>) -> Option<Vec<Fields<Array2<T>>>> {
        let pi2 = Self::pi2();
        let three = T::lit(3.0);
        let gc = grad_cos_product(x);
        let lap_c = cos_product(x).mapv(|c| -T::lit(2.0) * c);
        let gu = gc.mapv(|v| v / pi2);
        let gv = gc.mapv(|v| v / (three * pi2));
        Some(vec![
            Fields {
                p: column(self.exact_u(x)),
                grad_p: gu.clone(),
                g: gu,
                div_g: column(lap_c.mapv(|v| v / pi2)),
            },
            Fields {
                p: column(self.exact_v(x)),
                grad_p: gv.clone(),
                g: gv,
                div_g: column(lap_c.mapv(|v| v / (three * pi2))),
            },
        ])
    }
}

/// Architecture and training settings of a density benchmark.
#[derive(Debug, Clone, PartialEq)]
pub struct DensitySetup {
    pub arch: FlowArch,
    pub train: TrainConfig<f64>,
    pub n_train: usize,
    pub n_validation: usize,
}

/// Architecture, loss weights and solver settings of a PDE benchmark.
#[derive(Debug, Clone, PartialEq)]
pub struct PdeSetup {
    pub arch: FlowArch,
    pub solve: SolveConfig<f64>,
    pub weights: LossWeights<f64>,
    pub n_pde: usize,
    pub n_boundary: usize,
    pub n_validation: usize,
}

/// Two-dimensional density benchmarks: 8 CDF layers, 32 hidden neurons.
pub fn planar_density_setup() -> DensitySetup {
    DensitySetup {
        arch: FlowArch::kr(2, vec![8], 32).expect("valid architecture"),
        train: TrainConfig {
            epochs: 4000,
            batch_size: 4096,
            lr: 1e-3,
            decay: 1.0,
            decay_every: 1,
            eval_every: 10,
            chunk: 4096,
        },
        n_train: 20_000,
        n_validation: 20_000,
    }
}

/// Logistic holes with the block-triangular flow: `K = 8`,
/// depths `16, 14, ..., 4`, 32 hidden neurons.
pub fn logistic_kr_setup() -> DensitySetup {
    let stages = 7;
    let mut s = logistic_common();
    s.arch = FlowArch::kr(8, FlowArch::depth_schedule(16, stages), 32).expect("valid architecture");
    s
}

/// Logistic holes with 18 half-half CDF layers of 64 hidden neurons.
pub fn logistic_classical_setup() -> DensitySetup {
    let mut s = logistic_common();
    s.arch = FlowArch::classical(8, 18, 64).expect("valid architecture");
    s
}

fn logistic_common() -> DensitySetup {
    let n_train = 1_000_000;
    let batch = 200_000;
    DensitySetup {
        arch: FlowArch::classical(8, 2, 2).expect("valid architecture"),
        train: TrainConfig {
            epochs: 10_000,
            batch_size: batch,
            lr: 1e-3,
            decay: 0.5,
            decay_every: (5000 * n_train / batch) as u64,
            eval_every: 100,
            chunk: 8192,
        },
        n_train,
        n_validation: 1_000_000,
    }
}

/// Four-dimensional elliptic benchmark: depths `8, 6, 6`.
pub fn fourdim_setup() -> PdeSetup {
    let n_pde = 4000;
    let batch = 2000;
    PdeSetup {
        arch: FlowArch::kr(4, vec![8, 6, 6], 32).expect("valid architecture"),
        solve: SolveConfig {
            epochs: 500,
            batch_size: batch,
            lr: 1e-3,
            decay: 0.5,
            decay_every: (500 * n_pde / batch) as u64,
            adaptive_rounds: 4,
            update_rate: 0.8,
            eval_every: 50,
            chunk: 1000,
        },
        weights: LossWeights::new(1.0, 0.0, 1.0).expect("non-negative"),
        n_pde,
        n_boundary: 4000,
        n_validation: 50_000,
    }
}

/// Keller-Segel benchmark: 8 CDF layers per unknown.
pub fn keller_segel_setup() -> PdeSetup {
    let n_pde: usize = 10_000;
    let batch = 1024;
    PdeSetup {
        arch: FlowArch::kr(2, vec![8], 32).expect("valid architecture"),
        solve: SolveConfig {
            epochs: 100,
            batch_size: batch,
            lr: 1e-3,
            decay: 0.5,
            decay_every: (200 * n_pde.div_ceil(batch)) as u64,
            adaptive_rounds: 5,
            update_rate: 0.8,
            eval_every: 20,
            chunk: 1024,
        },
        weights: LossWeights::new(1.0, 0.0, 1.0).expect("non-negative"),
        n_pde,
        n_boundary: 4000,
        n_validation: 1_000_000,
    }
}
