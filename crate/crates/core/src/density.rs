//! Densities induced by a flow with a uniform prior on `[-1,1]^d`.

use ndarray::{Array1, Array2, Axis};
use rand::Rng;
use thiserror::Error;

use crate::diffcore::{Dual, DualBinder, Graph, Tensor};
use crate::flow::{FlowError, FlowModel};
use crate::nets::Parametrized;
use crate::scalar::Real;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DensityError {
    #[error(transparent)]
    Flow(#[from] FlowError),
    #[error("empty point set")]
    Empty,
    #[error("{points} points but {values} reference log-densities")]
    Length { points: usize, values: usize },
    #[error("reference entropy {0} too close to zero")]
    Degenerate(f64),
}

/// Log-density of the uniform prior on `[-1,1]^d`.
pub fn prior_log_density<T: Real>(dim: usize) -> T {
    -T::lit(dim as f64) * T::lit(2.0).ln()
}

impl<T: Real> FlowModel<T> {
    /// `n x 1` log-densities with bound parameters.
    pub fn log_pdf_bound<E: Tensor<T>>(&self, params: &[E], x: &E) -> Result<E, FlowError> {
        let (_, logdet) = self.forward_bound(params, x)?;
        Ok(logdet.offset(prior_log_density(self.dim())))
    }

    pub fn log_pdf(&self, x: &Array2<T>) -> Result<Array1<T>, FlowError> {
        let params: Vec<Array2<T>> = self.tensors().into_iter().cloned().collect();
        Ok(self.log_pdf_bound(&params, x)?.column(0).to_owned())
    }

    /// Input gradient of the log-density, `n x d`.
    pub fn grad_log_pdf(&self, x: &Array2<T>) -> Result<Array2<T>, FlowError> {
        let graph = Graph::new();
        let d = self.dim();
        let xd = Dual::seed_axes(&graph, x.clone());
        let mut binder = DualBinder::new(&graph, d);
        let params = self.bind(&mut binder);
        let lp = self.log_pdf_bound(&params, &xd)?;
        let cols: Vec<Array2<T>> = (0..d).map(|j| lp.tangent(j).value()).collect();
        let views: Vec<_> = cols.iter().map(|c| c.view()).collect();
        Ok(ndarray::concatenate(Axis(1), &views).expect("n x 1 columns"))
    }

    /// Exact samples: uniform `z` pushed through the inverse flow.
    pub fn sample<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Result<Array2<T>, FlowError> {
        let z = Array2::from_shape_simple_fn((n, self.dim()), || {
            T::lit(2.0 * rng.random::<f64>() - 1.0)
        });
        self.inverse(&z)
    }

    /// Mean negative log-likelihood as a `1 x 1` tensor.
    pub fn cross_entropy_bound<E: Tensor<T>>(&self, params: &[E], x: &E) -> Result<E, FlowError> {
        let (n, _) = x.shape();
        Ok(self
            .log_pdf_bound(params, x)?
            .sum_all()
            .scale(-T::one() / T::lit(n as f64)))
    }

    pub fn cross_entropy(&self, x: &Array2<T>) -> Result<T, DensityError> {
        if x.nrows() == 0 {
            return Err(DensityError::Empty);
        }
        let lp = self.log_pdf(x)?;
        Ok(-lp.sum() / T::lit(x.nrows() as f64))
    }

    /// Monte-Carlo relative KL divergence from reference log-densities at
    /// samples of the reference distribution.
    pub fn relative_kl(&self, x: &Array2<T>, true_logp: &[T]) -> Result<T, DensityError> {
        let lp = self.log_pdf(x)?;
        relative_kl_from(&lp.to_vec(), true_logp)
    }
}

/// `sum(true - model) / -sum(true)`.
pub fn relative_kl_from<T: Real>(model_logp: &[T], true_logp: &[T]) -> Result<T, DensityError> {
    if model_logp.len() != true_logp.len() {
        return Err(DensityError::Length {
            points: model_logp.len(),
            values: true_logp.len(),
        });
    }
    if model_logp.is_empty() {
        return Err(DensityError::Empty);
    }
    let num: T = true_logp.iter().zip(model_logp).map(|(t, m)| *t - *m).sum();
    let den: T = -true_logp.iter().copied().sum::<T>();
    if den.abs() < T::lit(1e-12) {
        return Err(DensityError::Degenerate(den.as_f64()));
    }
    Ok(num / den)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::VarBinder;
    use crate::flow::{BoxDomain, FlowArch};
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::PI;

    fn random_2d(seed: u64, lo: f64, hi: f64) -> FlowModel<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dom = BoxDomain::cube(2, lo, hi).unwrap();
        let mut m = FlowModel::zeros(dom, FlowArch::kr(2, vec![4], 8).unwrap()).unwrap();
        m.randomize(&mut rng, 0.6);
        m
    }

    fn trapezoid_mass(m: &FlowModel<f64>, n: usize) -> f64 {
        let (a, b) = (m.domain().lower()[0], m.domain().upper()[0]);
        let h = (b - a) / (n - 1) as f64;
        let mut grid = Array2::zeros((n * n, 2));
        for i in 0..n {
            for j in 0..n {
                grid[[i * n + j, 0]] = a + i as f64 * h;
                grid[[i * n + j, 1]] = a + j as f64 * h;
            }
        }
        let lp = m.log_pdf(&grid).unwrap();
        let mut acc = 0.0;
        for i in 0..n {
            for j in 0..n {
                let wi = if i == 0 || i == n - 1 { 0.5 } else { 1.0 };
                let wj = if j == 0 || j == n - 1 { 0.5 } else { 1.0 };
                acc += wi * wj * lp[i * n + j].exp();
            }
        }
        acc * h * h
    }

    #[test]
    fn zero_model_is_uniform_on_box() {
        let dom = BoxDomain::cube(2, 0.0, PI).unwrap();
        let m = FlowModel::zeros(dom, FlowArch::kr(2, vec![2], 4).unwrap()).unwrap();
        let lp = m.log_pdf(&array![[0.1, 0.2], [3.0, 1.5]]).unwrap();
        assert!(lp.iter().all(|v| (v + 2.0 * PI.ln()).abs() < 1e-14));
        let g = m.grad_log_pdf(&array![[0.1, 0.2]]).unwrap();
        assert!(g.iter().all(|&v| v == 0.0));
        let cube = BoxDomain::cube(3, -1.0, 1.0).unwrap();
        let m = FlowModel::zeros(cube, FlowArch::kr(3, vec![2, 2], 4).unwrap()).unwrap();
        let lp = m.log_pdf(&array![[0.5, -0.2, 0.0]]).unwrap();
        assert_eq!(lp[0], -3.0 * 2f64.ln());
        assert!((m.cross_entropy(&array![[0.1, 0.1, 0.1]]).unwrap() - 3.0 * 2f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn random_model_normalizes() {
        for seed in 0..3 {
            let mass = trapezoid_mass(&random_2d(seed, 0.0, PI), 512);
            assert!((mass - 1.0).abs() < 1e-3, "seed {seed}: {mass}");
        }
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let m = random_2d(7, -1.0, 1.0);
        let x = array![[0.13, -0.41], [0.62, 0.27], [-0.8, 0.05]];
        let g = m.grad_log_pdf(&x).unwrap();
        let h = 1e-6;
        for j in 0..2 {
            let mut xp = x.clone();
            xp.column_mut(j).mapv_inplace(|v| v + h);
            let mut xm = x.clone();
            xm.column_mut(j).mapv_inplace(|v| v - h);
            let fd = (m.log_pdf(&xp).unwrap() - m.log_pdf(&xm).unwrap()) / (2.0 * h);
            for r in 0..3 {
                let rel = (g[[r, j]] - fd[r]).abs() / fd[r].abs().max(1e-3);
                assert!(rel < 1e-4, "row {r} dim {j}: {} vs {}", g[[r, j]], fd[r]);
            }
        }
    }

    #[test]
    fn density_gradient_chain_rule() {
        let m = random_2d(8, -1.0, 1.0);
        let x = array![[0.3, 0.4]];
        let graph = Graph::new();
        let xd = Dual::seed_axes(&graph, x.clone());
        let mut b = DualBinder::new(&graph, 2);
        let params = m.bind(&mut b);
        let p = m.log_pdf_bound(&params, &xd).unwrap().exp();
        let glp = m.grad_log_pdf(&x).unwrap();
        let pv = p.value()[[0, 0]];
        for j in 0..2 {
            let gp = p.tangent(j).value()[[0, 0]];
            assert!((gp - pv * glp[[0, j]]).abs() < 1e-13);
        }
    }

    #[test]
    fn samples_stay_in_box_and_center() {
        let dom = BoxDomain::<f64>::new(vec![0.0, 1.0], vec![2.0, 5.0]).unwrap();
        let m = FlowModel::zeros(dom, FlowArch::kr(2, vec![2], 4).unwrap()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let n = 100_000;
        let s = m.sample(n, &mut rng).unwrap();
        assert!(s.rows().into_iter().all(|r| m.domain().contains(&r.to_vec())));
        let mean = s.mean_axis(Axis(0)).unwrap();
        // Uniform on [0,2] has sd 1/sqrt(3); on [1,5], 2/sqrt(3).
        let se = [1.0 / 3f64.sqrt(), 2.0 / 3f64.sqrt()].map(|sd| 3.0 * sd / (n as f64).sqrt());
        assert!((mean[0] - 1.0).abs() < se[0]);
        assert!((mean[1] - 3.0).abs() < se[1]);
        let r = random_2d(2, -1.0, 1.0).sample(1000, &mut rng).unwrap();
        assert!(r.iter().all(|v| v.abs() <= 1.0));
    }

    #[test]
    fn sample_entropy_matches_quadrature() {
        let m = random_2d(3, -1.0, 1.0);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let s = m.sample(100_000, &mut rng).unwrap();
        let mc = m.log_pdf(&s).unwrap().mean().unwrap();
        let n = 400;
        let h = 2.0 / n as f64;
        let mut grid = Array2::zeros((n * n, 2));
        for i in 0..n {
            for j in 0..n {
                grid[[i * n + j, 0]] = -1.0 + (i as f64 + 0.5) * h;
                grid[[i * n + j, 1]] = -1.0 + (j as f64 + 0.5) * h;
            }
        }
        let lp = m.log_pdf(&grid).unwrap();
        let quad: f64 = lp.iter().map(|l| l.exp() * l).sum::<f64>() * h * h;
        assert!((mc - quad).abs() < 1e-2, "{mc} vs {quad}");
    }

    #[test]
    fn cross_entropy_is_mean_negative_log_likelihood() {
        let m = random_2d(5, -1.0, 1.0);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x = Array2::from_shape_simple_fn((100, 2), || rng.random_range(-1.0..1.0));
        let lp = m.log_pdf(&x).unwrap();
        let expected = -lp.iter().sum::<f64>() / 100.0;
        assert!((m.cross_entropy(&x).unwrap() - expected).abs() < 1e-14);
        let one = x.slice(ndarray::s![0..1, ..]).to_owned();
        assert!((m.cross_entropy(&one).unwrap() + lp[0]).abs() < 1e-15);
        let g = Graph::new();
        let mut b = VarBinder::new(&g);
        let params = m.bind(&mut b);
        let ce = m.cross_entropy_bound(&params, &g.constant(x)).unwrap();
        assert!((ce.item() - expected).abs() < 1e-14);
    }

    #[test]
    fn relative_kl_cases() {
        let m = random_2d(9, -1.0, 1.0);
        let x = array![[0.1, 0.2], [-0.3, 0.4]];
        let lp = m.log_pdf(&x).unwrap().to_vec();
        assert_eq!(m.relative_kl(&x, &lp).unwrap(), 0.0);
        assert!(matches!(
            relative_kl_from(&[1.0], &[0.0]),
            Err(DensityError::Degenerate(_))
        ));
        assert!(relative_kl_from(&[1.0, 2.0], &[0.0]).is_err());
        assert!((relative_kl_from::<f64>(&[-2.0, -2.0], &[-1.0, -2.0]).unwrap() - 1.0 / 3.0).abs() < 1e-15);
    }
}
