//! Fully connected tanh networks and the hard Neumann envelope for
//! auxiliary gradient fields.

use ndarray::Array2;
use rand::Rng;
use thiserror::Error;

use crate::diffcore::{Binder, Tensor};
use crate::scalar::Real;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum NetError {
    #[error("layer widths must be positive")]
    ZeroWidth,
    #[error("input width mismatch: expected {expected}, found {found}")]
    InputWidth { expected: usize, found: usize },
    #[error("box must satisfy lower < upper in every coordinate")]
    EmptyBox,
    #[error("parameter count mismatch: expected {expected}, found {found}")]
    ParamCount { expected: usize, found: usize },
}

/// Layer widths of a tanh MLP with identity output.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MlpSpec {
    pub input: usize,
    pub hidden: Vec<usize>,
    pub output: usize,
}

impl MlpSpec {
    pub fn new(input: usize, hidden: Vec<usize>, output: usize) -> Result<Self, NetError> {
        if input == 0 || output == 0 || hidden.contains(&0) {
            return Err(NetError::ZeroWidth);
        }
        Ok(Self {
            input,
            hidden,
            output,
        })
    }

    /// Parameter network of a coupling layer: `cond -> width x depth -> 6 * updated`.
    pub fn coupling(cond: usize, updated: usize, width: usize, hidden_layers: usize) -> Self {
        Self {
            input: cond,
            hidden: vec![width; hidden_layers],
            output: 6 * updated,
        }
    }

    /// Auxiliary gradient network `d -> 64 -> 32 -> 32 -> 32 -> d`.
    pub fn gradient_field(dim: usize) -> Self {
        Self {
            input: dim,
            hidden: vec![64, 32, 32, 32],
            output: dim,
        }
    }

    fn widths(&self) -> Vec<usize> {
        let mut w = Vec::with_capacity(self.hidden.len() + 2);
        w.push(self.input);
        w.extend(&self.hidden);
        w.push(self.output);
        w
    }

    pub fn num_params(&self) -> usize {
        self.widths().windows(2).map(|p| p[0] * p[1] + p[1]).sum()
    }
}

/// Dense layer `y = x W + b`, `W` of shape `in x out`, `b` of shape `1 x out`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear<T> {
    pub weight: Array2<T>,
    pub bias: Array2<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mlp<T> {
    spec: MlpSpec,
    layers: Vec<Linear<T>>,
}

impl<T: Real> Mlp<T> {
    pub fn zeros(spec: MlpSpec) -> Self {
        let layers = spec
            .widths()
            .windows(2)
            .map(|p| Linear {
                weight: Array2::zeros((p[0], p[1])),
                bias: Array2::zeros((1, p[1])),
            })
            .collect();
        Self { spec, layers }
    }

    /// Glorot-uniform weights and zero biases. With `zero_output` the last
    /// layer is all zeros, which makes a coupling layer start as the identity.
    pub fn glorot<R: Rng + ?Sized>(spec: MlpSpec, rng: &mut R, zero_output: bool) -> Self {
        let mut net = Self::zeros(spec);
        let last = net.layers.len() - 1;
        for (i, layer) in net.layers.iter_mut().enumerate() {
            if zero_output && i == last {
                continue;
            }
            let (fan_in, fan_out) = layer.weight.dim();
            let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
            layer
                .weight
                .mapv_inplace(|_| T::lit(rng.random_range(-bound..bound)));
        }
        net
    }

    pub fn spec(&self) -> &MlpSpec {
        &self.spec
    }

    pub fn layers(&self) -> &[Linear<T>] {
        &self.layers
    }

    /// Section names aligned with [`Parametrized::tensors`].
    pub fn tensor_names(&self) -> Vec<String> {
        (0..self.layers.len())
            .flat_map(|i| [format!("w{i}"), format!("b{i}")])
            .collect()
    }

    /// Forward pass with parameters produced by [`Parametrized::bind`].
    pub fn forward_bound<E: Tensor<T>>(&self, params: &[E], x: &E) -> Result<E, NetError> {
        let (_, cols) = x.shape();
        if cols != self.spec.input {
            return Err(NetError::InputWidth {
                expected: self.spec.input,
                found: cols,
            });
        }
        debug_assert_eq!(params.len(), 2 * self.layers.len());
        let last = self.layers.len() - 1;
        let mut h = x.clone();
        for (i, wb) in params.chunks(2).enumerate() {
            h = h.matmul(&wb[0]).add(&wb[1]);
            if i != last {
                h = h.tanh();
            }
        }
        Ok(h)
    }

    /// Forward pass on plain values.
    pub fn forward(&self, x: &Array2<T>) -> Result<Array2<T>, NetError> {
        let params: Vec<Array2<T>> = self.tensors().into_iter().cloned().collect();
        self.forward_bound(&params, x)
    }
}

/// A model whose trainable state is an ordered list of arrays.
pub trait Parametrized<T: Real> {
    /// Parameter tensors in binding order.
    fn tensors(&self) -> Vec<&Array2<T>>;
    fn tensors_mut(&mut self) -> Vec<&mut Array2<T>>;

    fn num_params(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    fn flat(&self) -> Vec<T> {
        self.tensors()
            .into_iter()
            .flat_map(|t| t.iter().copied().collect::<Vec<_>>())
            .collect()
    }

    fn set_flat(&mut self, values: &[T]) -> Result<(), NetError> {
        let n = self.num_params();
        if values.len() != n {
            return Err(NetError::ParamCount {
                expected: n,
                found: values.len(),
            });
        }
        let mut it = values.iter();
        for t in self.tensors_mut() {
            t.iter_mut().for_each(|v| *v = *it.next().expect("length checked"));
        }
        Ok(())
    }

    fn bind<B: Binder<T>>(&self, binder: &mut B) -> Vec<B::Out> {
        self.tensors().into_iter().map(|t| binder.bind(t)).collect()
    }

    /// Overwrites every parameter with an independent draw from `U(-scale, scale)`.
    fn randomize<R: Rng + ?Sized>(&mut self, rng: &mut R, scale: f64) {
        for t in self.tensors_mut() {
            t.mapv_inplace(|_| T::lit(rng.random_range(-scale..scale)));
        }
    }
}

impl<T: Real> Parametrized<T> for Mlp<T> {
    fn tensors(&self) -> Vec<&Array2<T>> {
        self.layers
            .iter()
            .flat_map(|l| [&l.weight, &l.bias])
            .collect()
    }

    fn tensors_mut(&mut self) -> Vec<&mut Array2<T>> {
        self.layers
            .iter_mut()
            .flat_map(|l| [&mut l.weight, &mut l.bias])
            .collect()
    }
}

/// Multiplies component `i` of a vector field by `(x_i - a_i)(b_i - x_i)`,
/// so the field has zero normal component on every face of the box.
#[derive(Debug, Clone, PartialEq)]
pub struct BoundaryEnvelope<T> {
    lower: Vec<T>,
    upper: Vec<T>,
}

impl<T: Real> BoundaryEnvelope<T> {
    pub fn new(lower: Vec<T>, upper: Vec<T>) -> Result<Self, NetError> {
        if lower.len() != upper.len() || lower.is_empty() {
            return Err(NetError::InputWidth {
                expected: lower.len(),
                found: upper.len(),
            });
        }
        if lower.iter().zip(&upper).any(|(a, b)| !(a < b)) {
            return Err(NetError::EmptyBox);
        }
        Ok(Self { lower, upper })
    }

    pub fn dim(&self) -> usize {
        self.lower.len()
    }

    /// Envelope factors `(x_i - a_i)(b_i - x_i)` for a batch.
    pub fn factor<E: Tensor<T>>(&self, x: &E) -> E {
        let lo = Array2::from_shape_vec((1, self.dim()), self.lower.clone()).expect("row");
        let hi = Array2::from_shape_vec((1, self.dim()), self.upper.clone()).expect("row");
        let a = x.lift(lo);
        let b = x.lift(hi);
        x.sub(&a).mul(&b.sub(x))
    }

    /// Applies the envelope to a raw network output evaluated at `x`.
    pub fn apply<E: Tensor<T>>(&self, raw: &E, x: &E) -> Result<E, NetError> {
        if raw.shape() != x.shape() || x.shape().1 != self.dim() {
            return Err(NetError::InputWidth {
                expected: self.dim(),
                found: raw.shape().1,
            });
        }
        Ok(raw.mul(&self.factor(x)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::{Dual, Graph, VarBinder};
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::PI;

    #[test]
    fn zero_network_outputs_zero() {
        let net = Mlp::<f64>::zeros(MlpSpec::new(3, vec![8, 8], 4).unwrap());
        let y = net.forward(&array![[0.3, -1.0, 2.0], [1.0, 1.0, 1.0]]).unwrap();
        assert_eq!(y, Array2::zeros((2, 4)));
    }

    #[test]
    fn one_one_one_chain() {
        let mut net = Mlp::<f64>::zeros(MlpSpec::new(1, vec![1], 1).unwrap());
        for l in net.tensors_mut().into_iter().step_by(2) {
            l.fill(1.0);
        }
        let y = net.forward(&array![[0.5]]).unwrap();
        assert!((y[[0, 0]] - 0.5f64.tanh()).abs() < 1e-15);
        assert!((y[[0, 0]] - 0.4621).abs() < 1e-4);
    }

    #[test]
    fn coupling_output_width() {
        let spec = MlpSpec::coupling(3, 5, 32, 2);
        assert_eq!(spec.output, 30);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let net = Mlp::<f64>::glorot(spec, &mut rng, true);
        let y = net.forward(&Array2::from_elem((4, 3), 0.2)).unwrap();
        assert_eq!(y.dim(), (4, 30));
        assert!(y.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn input_width_checked() {
        let net = Mlp::<f64>::zeros(MlpSpec::new(2, vec![4], 1).unwrap());
        assert!(matches!(
            net.forward(&array![[1.0, 2.0, 3.0]]),
            Err(NetError::InputWidth { expected: 2, found: 3 })
        ));
        assert!(MlpSpec::new(2, vec![0], 1).is_err());
    }

    #[test]
    fn param_count_matches_tensors() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let net = Mlp::<f64>::glorot(MlpSpec::gradient_field(2), &mut rng, false);
        let n: usize = net.tensors().iter().map(|t| t.len()).sum();
        assert_eq!(n, net.spec().num_params());
        assert_eq!(n, 2 * 64 + 64 + 64 * 32 + 32 + 2 * (32 * 32 + 32) + 32 * 2 + 2);
    }

    #[test]
    fn glorot_bounds() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let net = Mlp::<f64>::glorot(MlpSpec::new(4, vec![10], 6).unwrap(), &mut rng, false);
        let b0 = (6.0f64 / 14.0).sqrt();
        assert!(net.layers()[0].weight.iter().all(|w| w.abs() <= b0));
        assert!(net.layers()[0].bias.iter().all(|&b| b == 0.0));
    }

    #[test]
    fn envelope_values() {
        let env = BoundaryEnvelope::new(vec![0.0, 0.0], vec![PI, PI]).unwrap();
        let x = array![[0.0, 1.0], [PI / 2.0, PI / 2.0]];
        let raw = Array2::<f64>::ones((2, 2));
        let g = env.apply(&raw, &x).unwrap();
        assert_eq!(g[[0, 0]], 0.0);
        assert!((g[[1, 0]] - PI * PI / 4.0).abs() < 1e-14);
        assert!((g[[1, 0]] - 2.4674).abs() < 1e-4);
        let z = env.apply(&Array2::zeros((2, 2)), &x).unwrap();
        assert!(z.iter().all(|&v| v == 0.0));
        assert!(BoundaryEnvelope::new(vec![1.0], vec![1.0]).is_err());
    }

    #[test]
    fn mlp_directional_derivatives_match_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let net = Mlp::<f64>::glorot(MlpSpec::new(3, vec![7, 5], 2).unwrap(), &mut rng, false);
        let x0 = array![[0.3, -0.2, 0.8], [-0.5, 0.1, 0.4]];
        let g = Graph::new();
        let xd = Dual::seed_axes(&g, x0.clone());
        let mut binder = crate::diffcore::DualBinder::new(&g, 3);
        let params = net.bind(&mut binder);
        let y = net.forward_bound(&params, &xd).unwrap();
        let h = 1e-6;
        for j in 0..3 {
            let t = y.tangent(j).value();
            let mut xp = x0.clone();
            xp.column_mut(j).mapv_inplace(|v| v + h);
            let mut xm = x0.clone();
            xm.column_mut(j).mapv_inplace(|v| v - h);
            let num = (net.forward(&xp).unwrap() - net.forward(&xm).unwrap()) / (2.0 * h);
            for (a, b) in t.iter().zip(num.iter()) {
                assert!((a - b).abs() / b.abs().max(1e-6) < 1e-5, "{a} vs {b}");
            }
        }
        // Tape mode gives the same primal.
        let g2 = Graph::new();
        let mut vb = VarBinder::new(&g2);
        let p2 = net.bind(&mut vb);
        let x2 = g2.constant(x0.clone());
        let y2 = net.forward_bound(&p2, &x2).unwrap();
        assert_eq!(y2.value(), net.forward(&x0).unwrap());
    }
}
