//! Physics-informed training of density unknowns for first-order systems
//! `N[x; p, g] = 0, g = grad p`, with adaptive collocation.
//!
//! Each unknown is a flow density `p` paired with an auxiliary network `g`
//! whose normal component vanishes on the boundary. Input derivatives are
//! forward tangents recorded on the reverse tape, so `grad p` and `div g`
//! enter the loss and still receive parameter gradients.

use std::ops::Range;
use std::time::Instant;

use ndarray::{s, Array1, Array2, Axis};
use rand::Rng;
use thiserror::Error;

use crate::diffcore::{AdamState, DiffError, Dual, DualBinder, Graph, LrSchedule, Tensor, Var};
use crate::estimate::{chunked_gradient, shuffle_batches, ChunkLoss, MetricRecord, MetricTrace};
use crate::flow::{BoxDomain, FlowArch, FlowError, FlowModel};
use crate::nets::{BoundaryEnvelope, Mlp, MlpSpec, NetError, Parametrized};
use crate::scalar::Real;

#[derive(Debug, Error)]
pub enum PdeError {
    #[error(transparent)]
    Flow(#[from] FlowError),
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Diff(#[from] DiffError),
    #[error("point {row} is not on the boundary")]
    NotOnBoundary { row: usize },
    #[error("non-finite residual at {point:?}")]
    NonFiniteResidual { point: Vec<f64> },
    #[error("invalid solver configuration: {0}")]
    Config(String),
    #[error("solver aborted in phase {phase} at epoch {epoch}: {source}")]
    Aborted {
        phase: usize,
        epoch: usize,
        trace: MetricTrace,
        #[source]
        source: Box<PdeError>,
    },
}

/// Values entering a residual for one unknown, each with one row per point:
/// `p` is `n x 1`, `grad_p` and `g` are `n x d`, `div_g` is `n x 1`.
#[derive(Debug, Clone)]
pub struct Fields<E> {
    pub p: E,
    pub grad_p: E,
    pub g: E,
    pub div_g: E,
}

pub trait PdeProblem<T: Real> {
    fn name(&self) -> &str;
    fn domain(&self) -> &BoxDomain<T>;
    fn unknowns(&self) -> usize;

    /// One `n x 1` residual per equation at the points `x`.
    fn residuals<E: Tensor<T>>(&self, x: &Array2<T>, fields: &[Fields<E>]) -> Vec<E>;

    /// Exact fields of every unknown, when known.
    fn exact(&self, _x: &Array2<T>) -> Option<Vec<Fields<Array2<T>>>> {
        None
    }

    /// Unknown whose density drives adaptive resampling.
    fn sampling_unknown(&self) -> usize {
        0
    }
}

/// A density unknown: flow for `p` and an enveloped network for `grad p`.
#[derive(Debug, Clone, PartialEq)]
pub struct Unknown<T> {
    pub flow: FlowModel<T>,
    pub gnet: Mlp<T>,
    pub envelope: BoundaryEnvelope<T>,
}

impl<T: Real> Unknown<T> {
    /// Glorot hidden layers with zero output layers in both networks: the
    /// density starts uniform and `g` starts at zero.
    pub fn new<R: Rng + ?Sized>(
        domain: BoxDomain<T>,
        arch: FlowArch,
        rng: &mut R,
    ) -> Result<Self, PdeError> {
        let d = domain.dim();
        let envelope = BoundaryEnvelope::new(domain.lower().to_vec(), domain.upper().to_vec())?;
        let flow = FlowModel::new(domain, arch, rng)?;
        let gnet = Mlp::glorot(MlpSpec::gradient_field(d), rng, true);
        Ok(Self {
            flow,
            gnet,
            envelope,
        })
    }

    pub fn from_parts(flow: FlowModel<T>, gnet: Mlp<T>) -> Result<Self, PdeError> {
        let dom = flow.domain();
        let d = dom.dim();
        if gnet.spec().input != d || gnet.spec().output != d {
            return Err(NetError::InputWidth {
                expected: d,
                found: gnet.spec().input,
            }
            .into());
        }
        let envelope = BoundaryEnvelope::new(dom.lower().to_vec(), dom.upper().to_vec())?;
        Ok(Self {
            flow,
            gnet,
            envelope,
        })
    }

    pub fn dim(&self) -> usize {
        self.flow.dim()
    }

    /// Names of the tensors in [`Parametrized::tensors`] order.
    pub fn tensor_names(&self) -> Vec<String> {
        let mut out: Vec<String> = self.flow.tensor_names().into_iter().map(|n| format!("flow.{n}")).collect();
        out.extend(self.gnet.tensor_names().into_iter().map(|n| format!("gnet.{n}")));
        out
    }

    /// Records the fields at `x` on `graph`, returning them with the
    /// parameter leaves in [`Parametrized::tensors`] order.
    #[allow(clippy::type_complexity)]
    pub fn record<'g>(
        &self,
        graph: &'g Graph<T>,
        x: &Array2<T>,
    ) -> Result<(Fields<Var<'g, T>>, Vec<Var<'g, T>>), PdeError> {
        let d = self.dim();
        let xd = Dual::seed_axes(graph, x.clone());
        let mut binder = DualBinder::new(graph, d);
        let params = self.bind(&mut binder);
        let nf = self.flow.tensors().len();
        let p = self.flow.log_pdf_bound(&params[..nf], &xd)?.exp();
        let grad_p: Vec<Var<'g, T>> = (0..d).map(|j| p.tangent(j)).collect();
        let raw = self.gnet.forward_bound(&params[nf..], &xd)?;
        let g = self.envelope.apply(&raw, &xd)?;
        let mut div = g.tangent(0).cols(0, 1);
        for j in 1..d {
            div = div.add(g.tangent(j).cols(j, 1));
        }
        Ok((
            Fields {
                p: p.primal,
                grad_p: Var::concat_cols(&grad_p),
                g: g.primal,
                div_g: div,
            },
            binder.vars,
        ))
    }

    /// Field values at `x`.
    pub fn fields(&self, x: &Array2<T>) -> Result<Fields<Array2<T>>, PdeError> {
        let graph = Graph::new();
        let (f, _) = self.record(&graph, x)?;
        Ok(Fields {
            p: f.p.value(),
            grad_p: f.grad_p.value(),
            g: f.g.value(),
            div_g: f.div_g.value(),
        })
    }

    pub fn density(&self, x: &Array2<T>) -> Result<Array1<T>, PdeError> {
        Ok(self.flow.log_pdf(x)?.mapv(|v| v.exp()))
    }
}

impl<T: Real> Parametrized<T> for Unknown<T> {
    fn tensors(&self) -> Vec<&Array2<T>> {
        let mut t = self.flow.tensors();
        t.extend(self.gnet.tensors());
        t
    }

    fn tensors_mut(&mut self) -> Vec<&mut Array2<T>> {
        let mut t = self.flow.tensors_mut();
        t.extend(self.gnet.tensors_mut());
        t
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights<T> {
    pub pde: T,
    pub boundary: T,
    pub grad: T,
}

impl<T: Real> LossWeights<T> {
    pub fn new(pde: T, boundary: T, grad: T) -> Result<Self, PdeError> {
        if [pde, boundary, grad].iter().any(|w| !(*w >= T::zero())) {
            return Err(PdeError::Config("loss weights must be non-negative".into()));
        }
        Ok(Self {
            pde,
            boundary,
            grad,
        })
    }
}

fn mean_rows<T: Real, E: Tensor<T>>(e: &E) -> E {
    let (n, _) = e.shape();
    e.sum_all().scale(T::one() / T::lit(n as f64))
}

/// Mean over points of the summed squared residuals.
pub fn residual_loss<T: Real, P: PdeProblem<T>, E: Tensor<T>>(
    problem: &P,
    x: &Array2<T>,
    fields: &[Fields<E>],
) -> E {
    let r = problem.residuals(x, fields);
    let mut total = mean_rows(&r[0].square());
    for e in &r[1..] {
        total = total.add(&mean_rows(&e.square()));
    }
    total
}

/// Mean over points of `|g - grad p|^2`, summed over unknowns.
pub fn gradient_match_loss<T: Real, E: Tensor<T>>(fields: &[Fields<E>]) -> E {
    let term = |f: &Fields<E>| mean_rows(&f.g.sub(&f.grad_p).square());
    let mut total = term(&fields[0]);
    for f in &fields[1..] {
        total = total.add(&term(f));
    }
    total
}

/// Outward unit normals of boundary points. Corner points take the normal
/// of the lowest-index face they lie on.
pub fn outward_normals<T: Real>(domain: &BoxDomain<T>, xb: &Array2<T>) -> Result<Array2<T>, PdeError> {
    let mut n = Array2::zeros(xb.dim());
    for (r, row) in xb.rows().into_iter().enumerate() {
        if !domain.contains(&row.to_vec()) {
            return Err(PdeError::NotOnBoundary { row: r });
        }
        let face = (0..domain.dim()).find_map(|j| {
            let (a, b) = (domain.lower()[j], domain.upper()[j]);
            let tol = T::boundary_tol() * (b - a).max(T::one());
            if (row[j] - a).abs() <= tol {
                Some((j, -T::one()))
            } else if (row[j] - b).abs() <= tol {
                Some((j, T::one()))
            } else {
                None
            }
        });
        match face {
            Some((j, sign)) => n[[r, j]] = sign,
            None => return Err(PdeError::NotOnBoundary { row: r }),
        }
    }
    Ok(n)
}

/// Mean over boundary points of `(g . n)^2`, summed over the given fields.
pub fn boundary_loss<T: Real, E: Tensor<T>>(normals: &Array2<T>, gs: &[E]) -> E {
    let term = |g: &E| mean_rows(&g.mul(&g.lift(normals.clone())).sum_cols().square());
    let mut total = term(&gs[0]);
    for g in &gs[1..] {
        total = total.add(&term(g));
    }
    total
}

pub fn total_loss<T: Real, E: Tensor<T>>(w: &LossWeights<T>, pde: &E, boundary: &E, grad: &E) -> E {
    pde.scale(w.pde)
        .add(&boundary.scale(w.boundary))
        .add(&grad.scale(w.grad))
}

/// Interior and boundary collocation points with the sampling mixture.
#[derive(Debug, Clone, PartialEq)]
pub struct CollocationState<T> {
    pub interior: Array2<T>,
    pub boundary: Array2<T>,
    /// Weights of the mixture `rho`: index 0 is the uniform density, then
    /// one entry per refresh.
    pub mixture: Vec<T>,
    pub round: usize,
}

impl<T: Real> CollocationState<T> {
    /// Uniform interior points and boundary points spread evenly over faces.
    pub fn uniform<R: Rng + ?Sized>(
        domain: &BoxDomain<T>,
        n_pde: usize,
        n_boundary: usize,
        rng: &mut R,
    ) -> Self {
        let d = domain.dim();
        let mut interior = Array2::zeros((0, d));
        while interior.nrows() < n_pde {
            let cand = domain.sample_uniform(n_pde - interior.nrows(), rng);
            for row in cand.rows() {
                if domain.contains_strict(&row.to_vec()) {
                    interior.push_row(row).expect("width");
                }
            }
        }
        let mut boundary = domain.sample_uniform(n_boundary, rng);
        for (i, mut row) in boundary.rows_mut().into_iter().enumerate() {
            let face = i % (2 * d);
            let j = face / 2;
            row[j] = if face.is_multiple_of(2) {
                domain.lower()[j]
            } else {
                domain.upper()[j]
            };
        }
        Self {
            interior,
            boundary,
            mixture: vec![T::one()],
            round: 0,
        }
    }
}

/// Replaces the first `floor(rate * N)` interior points by fresh model
/// samples placed first, keeping the last `N - N_new` old points.
pub fn adaptive_refresh<T: Real, R: Rng + ?Sized>(
    state: &CollocationState<T>,
    model: &FlowModel<T>,
    rate: T,
    rng: &mut R,
) -> Result<CollocationState<T>, PdeError> {
    if !(rate > T::zero() && rate <= T::one()) {
        return Err(PdeError::Config("update rate must lie in (0, 1]".into()));
    }
    let n = state.interior.nrows();
    let n_new = (rate * T::lit(n as f64)).floor().to_usize().unwrap_or(0).min(n);
    let dom = model.domain();
    let mut fresh = Array2::zeros((0, dom.dim()));
    while fresh.nrows() < n_new {
        let cand = model.sample(n_new - fresh.nrows(), rng)?;
        for row in cand.rows() {
            if dom.contains_strict(&row.to_vec()) {
                fresh.push_row(row).expect("width");
            }
        }
    }
    let kept = state.interior.slice(s![n_new.., ..]);
    let interior = ndarray::concatenate![Axis(0), fresh, kept];
    let mut mixture: Vec<T> = state.mixture.iter().map(|&w| w * (T::one() - rate)).collect();
    mixture.push(rate);
    Ok(CollocationState {
        interior,
        boundary: state.boundary.clone(),
        mixture,
        round: state.round + 1,
    })
}

/// Loss values of one evaluation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossTerms<T> {
    pub total: T,
    pub pde: T,
    pub boundary: T,
    pub grad: T,
}

struct PinnLoss<'a, T: Real, P> {
    problem: &'a P,
    unknowns: &'a [Unknown<T>],
    weights: LossWeights<T>,
    interior: Array2<T>,
    boundary: Option<(Array2<T>, Array2<T>)>,
}

impl<T: Real, P: PdeProblem<T>> PinnLoss<'_, T, P> {
    fn rows(&self) -> usize {
        self.interior.nrows() + self.boundary.as_ref().map_or(0, |b| b.0.nrows())
    }
}

impl<T: Real, P: PdeProblem<T>> ChunkLoss<T> for PinnLoss<'_, T, P> {
    type Error = PdeError;

    fn record<'g>(
        &self,
        graph: &'g Graph<T>,
        rows: Range<usize>,
    ) -> Result<(Var<'g, T>, Vec<Var<'g, T>>, Vec<T>), PdeError> {
        let ni = self.interior.nrows();
        let zero = graph.scalar(T::zero());
        let mut params: Vec<Vec<Var<'g, T>>> = Vec::new();
        let (mut pde, mut grad, mut bnd) = (zero, zero, zero);
        let int_rows = rows.start.min(ni)..rows.end.min(ni);
        if !int_rows.is_empty() {
            let share = T::lit(int_rows.len() as f64 / ni as f64);
            let x = self.interior.slice(s![int_rows, ..]).to_owned();
            let mut fields = Vec::with_capacity(self.unknowns.len());
            for u in self.unknowns {
                let (f, vars) = u.record(graph, &x)?;
                fields.push(f);
                params.push(vars);
            }
            let res = self.problem.residuals(&x, &fields);
            for r in &res {
                if let Some(row) = r.value().column(0).iter().position(|v| !v.is_finite()) {
                    return Err(PdeError::NonFiniteResidual {
                        point: x.row(row).iter().map(|v| v.as_f64()).collect(),
                    });
                }
            }
            pde = residual_loss(self.problem, &x, &fields).scale(share);
            grad = gradient_match_loss(&fields).scale(share);
        }
        if let Some((xb, normals)) = &self.boundary {
            let nb = xb.nrows();
            let b_rows = rows.start.max(ni) - ni..rows.end.max(ni) - ni;
            if !b_rows.is_empty() {
                let share = T::lit(b_rows.len() as f64 / nb as f64);
                let x = xb.slice(s![b_rows.clone(), ..]).to_owned();
                let nrm = normals.slice(s![b_rows, ..]).to_owned();
                let mut gs = Vec::with_capacity(self.unknowns.len());
                let fresh = params.is_empty();
                for (i, u) in self.unknowns.iter().enumerate() {
                    // Parameter leaves must be shared with the interior part.
                    let vars = if fresh {
                        let mut b = crate::diffcore::VarBinder::new(graph);
                        let v = u.bind(&mut b);
                        params.push(b.vars);
                        v
                    } else {
                        params[i].clone()
                    };
                    let nf = u.flow.tensors().len();
                    let xv = graph.constant(x.clone());
                    let raw = u.gnet.forward_bound(&vars[nf..], &xv)?;
                    gs.push(u.envelope.apply(&raw, &xv)?);
                }
                bnd = boundary_loss(&nrm, &gs).scale(share);
            }
        }
        let total = total_loss(&self.weights, &pde, &bnd, &grad);
        let terms = vec![total.item(), pde.item(), bnd.item(), grad.item()];
        Ok((total, params.concat(), terms))
    }
}

fn num_params_all<T: Real>(unknowns: &[Unknown<T>]) -> usize {
    unknowns.iter().map(|u| u.num_params()).sum()
}

fn flat_all<T: Real>(unknowns: &[Unknown<T>]) -> Vec<T> {
    unknowns.iter().flat_map(|u| u.flat()).collect()
}

fn set_flat_all<T: Real>(unknowns: &mut [Unknown<T>], v: &[T]) {
    let mut at = 0;
    for u in unknowns {
        let n = u.num_params();
        u.set_flat(&v[at..at + n]).expect("length");
        at += n;
    }
}

/// Total loss and its gradient with respect to all unknowns' parameters
/// (concatenated in unknown order), evaluated in chunks of `chunk` rows.
pub fn loss_gradient<T: Real, P: PdeProblem<T>>(
    problem: &P,
    unknowns: &[Unknown<T>],
    weights: &LossWeights<T>,
    interior: &Array2<T>,
    boundary: Option<&Array2<T>>,
    chunk: usize,
) -> Result<(LossTerms<T>, Vec<T>), PdeError> {
    let boundary = match boundary {
        Some(b) if b.nrows() > 0 && weights.boundary > T::zero() => {
            Some((b.clone(), outward_normals(problem.domain(), b)?))
        }
        _ => None,
    };
    let loss = PinnLoss {
        problem,
        unknowns,
        weights: *weights,
        interior: interior.clone(),
        boundary,
    };
    let (g, t) = chunked_gradient(&loss, loss.rows(), chunk.max(1), num_params_all(unknowns))?;
    Ok((
        LossTerms {
            total: t[0],
            pde: t[1],
            boundary: t[2],
            grad: t[3],
        },
        g,
    ))
}

/// Relative L2 error of each unknown's density against the exact solution.
pub fn relative_l2<T: Real, P: PdeProblem<T>>(
    problem: &P,
    unknowns: &[Unknown<T>],
    x: &Array2<T>,
) -> Result<Option<Vec<T>>, PdeError> {
    let Some(exact) = problem.exact(x) else {
        return Ok(None);
    };
    let mut out = Vec::with_capacity(unknowns.len());
    for (u, e) in unknowns.iter().zip(&exact) {
        let p = u.density(x)?;
        let ex = e.p.column(0);
        let num: T = p.iter().zip(ex.iter()).map(|(a, b)| (*a - *b) * (*a - *b)).sum();
        let den: T = ex.iter().map(|b| *b * *b).sum();
        out.push((num / den).sqrt());
    }
    Ok(Some(out))
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolveConfig<T> {
    /// Epochs per training phase.
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: T,
    pub decay: T,
    /// Optimizer steps between decays, counted across phases.
    pub decay_every: u64,
    /// Refreshes between phases; zero gives plain training.
    pub adaptive_rounds: usize,
    pub update_rate: T,
    pub eval_every: usize,
    pub chunk: usize,
}

impl<T: Real> SolveConfig<T> {
    pub fn schedule(&self) -> LrSchedule<T> {
        LrSchedule {
            initial: self.lr,
            decay: self.decay,
            every: self.decay_every,
        }
    }

    fn validate(&self, n_pde: usize) -> Result<(), PdeError> {
        let bad = |m: &str| Err(PdeError::Config(m.to_string()));
        if n_pde == 0 || self.batch_size == 0 || self.batch_size > n_pde {
            return bad("batch size must be in 1..=number of interior points");
        }
        if !(self.update_rate > T::zero() && self.update_rate <= T::one()) {
            return bad("update rate must lie in (0, 1]");
        }
        if !(self.decay > T::zero() && self.decay <= T::one()) || !(self.lr > T::zero()) {
            return bad("learning rate must be positive and decay in (0, 1]");
        }
        if self.decay_every == 0 || self.eval_every == 0 || self.chunk == 0 {
            return bad("decay step, evaluation cadence and chunk must be positive");
        }
        Ok(())
    }
}

pub struct SolveOutput<T> {
    pub trace: MetricTrace,
    pub state: CollocationState<T>,
}

/// Runs `adaptive_rounds + 1` phases of minibatch Adam on the total loss,
/// refreshing collocation points between phases. Epochs in the trace are
/// counted across phases. On failure the unknowns keep the last parameters
/// that produced a finite step.
pub fn solve<T: Real, P: PdeProblem<T>, R: Rng + ?Sized>(
    problem: &P,
    unknowns: &mut [Unknown<T>],
    weights: &LossWeights<T>,
    config: &SolveConfig<T>,
    initial: CollocationState<T>,
    validation: Option<&Array2<T>>,
    rng: &mut R,
) -> Result<SolveOutput<T>, PdeError> {
    config.validate(initial.interior.nrows())?;
    if unknowns.len() != problem.unknowns() {
        return Err(PdeError::Config(format!(
            "{} needs {} unknowns, got {}",
            problem.name(),
            problem.unknowns(),
            unknowns.len()
        )));
    }
    let clock = Instant::now();
    let mut trace = MetricTrace::default();
    let mut adam = AdamState::new(num_params_all(unknowns), config.schedule());
    let mut state = initial;
    let rel = |u: &[Unknown<T>]| -> Result<Vec<f64>, PdeError> {
        Ok(match validation {
            Some(v) => relative_l2(problem, u, v)?
                .map(|r| r.iter().map(|e| e.as_f64()).collect())
                .unwrap_or_default(),
            None => Vec::new(),
        })
    };
    let record = |trace: &mut MetricTrace,
                      epoch: usize,
                      phase: usize,
                      t: LossTerms<T>,
                      rel: Vec<f64>,
                      lr: T| {
        trace.push(MetricRecord {
            epoch,
            phase,
            loss_total: t.total.as_f64(),
            loss_pde: t.pde.as_f64(),
            loss_b: t.boundary.as_f64(),
            loss_fit: t.grad.as_f64(),
            rel,
            lr: lr.as_f64(),
            wall_s: clock.elapsed().as_secs_f64(),
        })
    };
    let (t0, _) = loss_gradient(
        problem,
        unknowns,
        weights,
        &state.interior,
        Some(&state.boundary),
        config.chunk,
    )?;
    record(&mut trace, 0, 0, t0, rel(unknowns)?, adam.lr());
    let mut epoch = 0;
    for phase in 0..=config.adaptive_rounds {
        if phase > 0 {
            let src = &unknowns[problem.sampling_unknown()].flow;
            state = adaptive_refresh(&state, src, config.update_rate, rng).map_err(|e| {
                PdeError::Aborted {
                    phase,
                    epoch,
                    trace: trace.clone(),
                    source: Box::new(e),
                }
            })?;
        }
        for _ in 0..config.epochs {
            epoch += 1;
            let n = state.interior.nrows();
            let batches = shuffle_batches(n, config.batch_size, rng);
            let nb = state.boundary.nrows();
            let bbatches = if nb > 0 && weights.boundary > T::zero() {
                shuffle_batches(nb, nb.div_ceil(batches.len()), rng)
            } else {
                Vec::new()
            };
            let mut acc = LossTerms {
                total: T::zero(),
                pde: T::zero(),
                boundary: T::zero(),
                grad: T::zero(),
            };
            for (k, idx) in batches.iter().enumerate() {
                let x = state.interior.select(Axis(0), idx);
                let xb = bbatches.get(k).map(|b| state.boundary.select(Axis(0), b));
                let step = loss_gradient(problem, unknowns, weights, &x, xb.as_ref(), config.chunk)
                    .and_then(|(t, g)| {
                        let mut p = flat_all(unknowns);
                        adam.step(&mut p, &g)?;
                        set_flat_all(unknowns, &p);
                        Ok(t)
                    });
                let t = step.map_err(|e| PdeError::Aborted {
                    phase,
                    epoch,
                    trace: trace.clone(),
                    source: Box::new(e),
                })?;
                let share = T::lit(idx.len() as f64 / n as f64);
                acc.total = acc.total + t.total * share;
                acc.pde = acc.pde + t.pde * share;
                acc.boundary = acc.boundary + t.boundary * share;
                acc.grad = acc.grad + t.grad * share;
            }
            let phase_end = epoch % config.epochs.max(1) == 0;
            if epoch % config.eval_every == 0 || phase_end {
                let r = rel(unknowns).map_err(|e| PdeError::Aborted {
                    phase,
                    epoch,
                    trace: trace.clone(),
                    source: Box::new(e),
                })?;
                record(&mut trace, epoch, phase, acc, r, adam.lr());
            }
        }
    }
    Ok(SolveOutput { trace, state })
}
