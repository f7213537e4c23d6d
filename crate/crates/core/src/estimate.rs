//! Maximum-likelihood training of a flow density on samples.

use std::ops::Range;
use std::time::Instant;

use ndarray::{Array2, Axis};
use rand::seq::SliceRandom;
use rand::Rng;
use thiserror::Error;

use crate::density::{relative_kl_from, DensityError};
use crate::diffcore::{AdamState, DiffError, Graph, LrSchedule, Var, VarBinder};
use crate::flow::{FlowError, FlowModel};
use crate::nets::Parametrized;
use crate::scalar::Real;

/// One row of a metric trace. Density runs leave `loss_pde` and `loss_b`
/// at zero and report cross entropy in `loss_fit`; `rel` holds the
/// relative KL (density) or one relative L2 error per unknown (PDE).
#[derive(Debug, Clone, PartialEq)]
pub struct MetricRecord {
    pub epoch: usize,
    pub phase: usize,
    pub loss_total: f64,
    pub loss_pde: f64,
    pub loss_b: f64,
    pub loss_fit: f64,
    pub rel: Vec<f64>,
    pub lr: f64,
    pub wall_s: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct MetricTrace {
    pub records: Vec<MetricRecord>,
}

impl MetricTrace {
    pub fn push(&mut self, r: MetricRecord) {
        debug_assert!(self
            .records
            .last()
            .is_none_or(|l| (l.phase, l.epoch) < (r.phase, r.epoch)));
        self.records.push(r);
    }

    pub fn last(&self) -> Option<&MetricRecord> {
        self.records.last()
    }

    /// Equality ignoring wall-clock time.
    pub fn same_numbers(&self, other: &Self) -> bool {
        self.records.len() == other.records.len()
            && self.records.iter().zip(&other.records).all(|(a, b)| {
                let mut b = b.clone();
                b.wall_s = a.wall_s;
                *a == b
            })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig<T> {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: T,
    /// Multiplicative decay `eta`.
    pub decay: T,
    /// Optimizer steps between decays.
    pub decay_every: u64,
    /// Epochs between validation evaluations.
    pub eval_every: usize,
    /// Rows per recorded graph; bounds memory without changing the result.
    pub chunk: usize,
}

impl<T: Real> TrainConfig<T> {
    pub fn schedule(&self) -> LrSchedule<T> {
        LrSchedule {
            initial: self.lr,
            decay: self.decay,
            every: self.decay_every,
        }
    }

    pub fn validate(&self, rows: usize) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::Config(m.to_string()));
        if rows == 0 {
            return bad("empty training set");
        }
        if self.batch_size == 0 || self.batch_size > rows {
            return bad("batch size must be in 1..=dataset size");
        }
        if !(self.decay > T::zero() && self.decay <= T::one()) {
            return bad("decay must lie in (0, 1]");
        }
        if self.decay_every == 0 || self.chunk == 0 || self.eval_every == 0 {
            return bad("decay step, chunk and evaluation cadence must be positive");
        }
        if !(self.lr > T::zero()) {
            return bad("learning rate must be positive");
        }
        Ok(())
    }
}

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Flow(#[from] FlowError),
    #[error(transparent)]
    Density(#[from] DensityError),
    #[error(transparent)]
    Diff(#[from] DiffError),
    /// Training stopped on a numerical failure; the model holds the last
    /// parameters that produced a finite step.
    #[error("training aborted at epoch {epoch}: {source}")]
    Aborted {
        epoch: usize,
        trace: MetricTrace,
        #[source]
        source: Box<TrainError>,
    },
}

/// A random permutation of `0..n` cut into consecutive batches; the last
/// batch may be shorter.
pub fn shuffle_batches<R: Rng + ?Sized>(n: usize, batch: usize, rng: &mut R) -> Vec<Vec<usize>> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    idx.chunks(batch.max(1)).map(|c| c.to_vec()).collect()
}

/// A loss over a row range whose chunks can be recorded independently.
pub(crate) trait ChunkLoss<T: Real> {
    type Error: From<DiffError>;

    /// Records the loss on `rows`, already weighted by its share of the
    /// batch, and returns it with the parameter leaves and the weighted
    /// values of the reported terms.
    #[allow(clippy::type_complexity)]
    fn record<'g>(
        &self,
        graph: &'g Graph<T>,
        rows: Range<usize>,
    ) -> Result<(Var<'g, T>, Vec<Var<'g, T>>, Vec<T>), Self::Error>;
}

/// Sums gradients and reported terms over fixed-size chunks in order.
pub(crate) fn chunked_gradient<T: Real, L: ChunkLoss<T>>(
    loss: &L,
    rows: usize,
    chunk: usize,
    num_params: usize,
) -> Result<(Vec<T>, Vec<T>), L::Error> {
    let mut grad = vec![T::zero(); num_params];
    let mut terms: Vec<T> = Vec::new();
    let mut start = 0;
    while start < rows {
        let end = (start + chunk).min(rows);
        let graph = Graph::new();
        let (l, vars, t) = loss.record(&graph, start..end)?;
        let g = graph.backward(l)?.flat(&vars);
        grad.iter_mut().zip(&g).for_each(|(a, b)| *a = *a + *b);
        if terms.is_empty() {
            terms = t;
        } else {
            terms.iter_mut().zip(&t).for_each(|(a, b)| *a = *a + *b);
        }
        start = end;
    }
    Ok((grad, terms))
}

struct CrossEntropyLoss<'a, T: Real> {
    model: &'a FlowModel<T>,
    batch: &'a Array2<T>,
}

impl<T: Real> ChunkLoss<T> for CrossEntropyLoss<'_, T> {
    type Error = TrainError;

    fn record<'g>(
        &self,
        graph: &'g Graph<T>,
        rows: Range<usize>,
    ) -> Result<(Var<'g, T>, Vec<Var<'g, T>>, Vec<T>), TrainError> {
        let share = T::lit(rows.len() as f64 / self.batch.nrows() as f64);
        let x = graph.constant(self.batch.slice(ndarray::s![rows, ..]).to_owned());
        let mut binder = VarBinder::new(graph);
        let params = self.model.bind(&mut binder);
        let ce = self.model.cross_entropy_bound(&params, &x)?.scale(share);
        let v = ce.item();
        Ok((ce, binder.vars, vec![v]))
    }
}

/// Cross entropy and its parameter gradient on a batch.
pub fn cross_entropy_gradient<T: Real>(
    model: &FlowModel<T>,
    batch: &Array2<T>,
    chunk: usize,
) -> Result<(T, Vec<T>), TrainError> {
    let loss = CrossEntropyLoss { model, batch };
    let (g, t) = chunked_gradient(&loss, batch.nrows(), chunk.max(1), model.num_params())?;
    Ok((t[0], g))
}

/// Validation set with reference log-densities.
pub struct Validation<'a, T> {
    pub points: &'a Array2<T>,
    pub true_logp: &'a [T],
}

/// Shuffled minibatch Adam on the cross entropy. Records epoch 0 before
/// any step, then every `eval_every` epochs and at the last epoch.
pub fn train_density<T: Real, R: Rng + ?Sized>(
    model: &mut FlowModel<T>,
    data: &Array2<T>,
    validation: Option<Validation<'_, T>>,
    config: &TrainConfig<T>,
    rng: &mut R,
) -> Result<MetricTrace, TrainError> {
    config.validate(data.nrows())?;
    let clock = Instant::now();
    let mut trace = MetricTrace::default();
    let mut adam = AdamState::new(model.num_params(), config.schedule());
    let evaluate = |model: &FlowModel<T>| -> Result<Vec<f64>, TrainError> {
        Ok(match &validation {
            Some(v) => {
                let lp = model.log_pdf(v.points)?;
                vec![relative_kl_from(&lp.to_vec(), v.true_logp)?.as_f64()]
            }
            None => Vec::new(),
        })
    };
    let initial = model.cross_entropy(data)?.as_f64();
    trace.push(MetricRecord {
        epoch: 0,
        phase: 0,
        loss_total: initial,
        loss_pde: 0.0,
        loss_b: 0.0,
        loss_fit: initial,
        rel: evaluate(model)?,
        lr: adam.lr().as_f64(),
        wall_s: clock.elapsed().as_secs_f64(),
    });
    for epoch in 1..=config.epochs {
        let mut epoch_loss = T::zero();
        let mut seen = 0usize;
        let step = (|| -> Result<(), TrainError> {
            for idx in shuffle_batches(data.nrows(), config.batch_size, rng) {
                let batch = data.select(Axis(0), &idx);
                let (loss, grad) = cross_entropy_gradient(model, &batch, config.chunk)?;
                let mut params = model.flat();
                adam.step(&mut params, &grad)?;
                model.set_flat(&params).expect("length preserved");
                epoch_loss = epoch_loss + loss * T::lit(idx.len() as f64);
                seen += idx.len();
            }
            Ok(())
        })();
        if let Err(e) = step {
            return Err(TrainError::Aborted {
                epoch,
                trace,
                source: Box::new(e),
            });
        }
        if epoch % config.eval_every == 0 || epoch == config.epochs {
            let loss = (epoch_loss / T::lit(seen as f64)).as_f64();
            let rel = match evaluate(model) {
                Ok(r) => r,
                Err(e) => {
                    return Err(TrainError::Aborted {
                        epoch,
                        trace,
                        source: Box::new(e),
                    })
                }
            };
            trace.push(MetricRecord {
                epoch,
                phase: 0,
                loss_total: loss,
                loss_pde: 0.0,
                loss_b: 0.0,
                loss_fit: loss,
                rel,
                lr: adam.lr().as_f64(),
                wall_s: clock.elapsed().as_secs_f64(),
            });
        }
    }
    Ok(trace)
}
