//! Pipelines behind the subcommands.

use std::path::{Path, PathBuf};

use bkrnet::estimate::{train_density, TrainError, Validation};
use bkrnet::flow::{count_dofs, FlowModel};
use bkrnet::nets::{Mlp, MlpSpec, Parametrized};
use bkrnet::pdesolve::{relative_l2, solve, CollocationState, PdeError, PdeProblem, Unknown};
use bkrnet::problems::{truth_by_name, EllipticCosine, KellerSegel, SyntheticTruth};
use ndarray::{Array1, Array2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::{load_into, sections, Checkpoint, RngState, Section};
use crate::config::{RunConfig, Task};
use crate::io::{atomic_write, dataset_csv, metrics_csv, read_dataset, table_csv};
use crate::CliError;

pub const METRICS_FILE: &str = "metrics.csv";
pub const FINAL_CHECKPOINT: &str = "final.ckpt";
pub const ABORT_CHECKPOINT: &str = "last_good.ckpt";

/// Stream used for validation points, separate from the training stream.
const VALIDATION_STREAM: u64 = 1;

pub fn gen_data(truth: &str, n: usize, seed: u64, out: &Path, with_logp: bool) -> Result<(), CliError> {
    let t = truth_by_name(truth)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = t.sample(n, &mut rng);
    let lp = if with_logp { Some(t.log_pdf(&x)?) } else { None };
    atomic_write(out, &dataset_csv(&x, lp.as_ref()))?;
    Ok(())
}

fn write_checkpoint(path: &Path, ck: &Checkpoint) -> Result<(), CliError> {
    atomic_write(path, ck.to_text().as_bytes())?;
    Ok(())
}

pub fn read_checkpoint(path: &Path) -> Result<Checkpoint, CliError> {
    let text = std::fs::read_to_string(path).map_err(|source| crate::io::IoError::Fs {
        path: path.to_path_buf(),
        source,
    })?;
    Ok(Checkpoint::parse(&text)?)
}

fn flow_names(prefix: &str, model: &FlowModel<f64>) -> Vec<String> {
    model.tensor_names().into_iter().map(|n| format!("{prefix}{n}")).collect()
}

/// Checkpoint of a density run.
pub fn density_checkpoint(cfg: &RunConfig, model: &FlowModel<f64>, rng: &ChaCha8Rng) -> Checkpoint {
    Checkpoint {
        config: cfg.clone(),
        rng: RngState::capture(rng),
        round: 0,
        params: sections(flow_names("flow.", model), model.tensors()),
        state: Vec::new(),
    }
}

/// Rebuilds the density model stored in a checkpoint.
pub fn density_model(ck: &Checkpoint) -> Result<FlowModel<f64>, CliError> {
    let truth = truth_by_name(&ck.config.target)?;
    let arch = ck.config.arch()?;
    let mut model = FlowModel::zeros(truth.domain(), arch.clone())?;
    if ck.num_params() != count_dofs(&arch) {
        return Err(CliError::Mismatch(format!(
            "checkpoint holds {} parameters, architecture has {}",
            ck.num_params(),
            count_dofs(&arch)
        )));
    }
    let names = model.tensor_names();
    load_into(ck, "flow.", names, model.tensors_mut())?;
    Ok(model)
}

fn ensure_same_run(cfg: &RunConfig, ck: &Checkpoint) -> Result<(), CliError> {
    if ck.config.target != cfg.target || ck.config.arch()? != cfg.arch()? {
        return Err(CliError::Mismatch(format!(
            "checkpoint is for {} with depths {:?}, config asks for {} with depths {:?}",
            ck.config.target, ck.config.flow.depths, cfg.target, cfg.flow.depths
        )));
    }
    Ok(())
}

/// Training data and validation points with true log-densities.
#[allow(clippy::type_complexity)]
pub fn density_data(
    cfg: &RunConfig,
    truth: &dyn SyntheticTruth,
    rng: &mut ChaCha8Rng,
) -> Result<(Array2<f64>, Array2<f64>, Array1<f64>), CliError> {
    let Task::Density(d) = &cfg.task else {
        return Err(CliError::Mismatch(format!("{} is not a density benchmark", cfg.target)));
    };
    let data = match &d.train {
        Some(p) => read_dataset(p)?.points,
        None => truth.sample(d.n_train, rng),
    };
    let (val, lp) = match &d.validation {
        Some(p) => {
            let ds = read_dataset(p)?;
            let lp = match ds.true_logp {
                Some(lp) => lp,
                None => truth.log_pdf(&ds.points)?,
            };
            (ds.points, lp)
        }
        None => {
            let mut vr = ChaCha8Rng::seed_from_u64(cfg.seed);
            vr.set_stream(VALIDATION_STREAM);
            let v = truth.sample(d.n_validation, &mut vr);
            let lp = truth.log_pdf(&v)?;
            (v, lp)
        }
    };
    if data.ncols() != truth.domain().dim() || val.ncols() != truth.domain().dim() {
        return Err(CliError::Mismatch(format!(
            "data has {} columns, {} needs {}",
            data.ncols(),
            cfg.target,
            truth.domain().dim()
        )));
    }
    Ok((data, val, lp))
}

pub fn train_density_run(cfg: &RunConfig, out: &Path, checkpoint: Option<&Path>) -> Result<(), CliError> {
    let truth = truth_by_name(&cfg.target)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (data, val, lp) = density_data(cfg, truth.as_ref(), &mut rng)?;
    let mut model = match checkpoint {
        Some(p) => {
            let ck = read_checkpoint(p)?;
            ensure_same_run(cfg, &ck)?;
            rng = ck.rng.restore();
            density_model(&ck)?
        }
        None => FlowModel::new(truth.domain(), cfg.arch()?, &mut rng)?,
    };
    let lp = lp.to_vec();
    let validation = Validation {
        points: &val,
        true_logp: &lp,
    };
    let result = train_density(&mut model, &data, Some(validation), &cfg.train_config(), &mut rng);
    match result {
        Ok(trace) => {
            atomic_write(&out.join(METRICS_FILE), &metrics_csv(&trace, true))?;
            write_checkpoint(&out.join(FINAL_CHECKPOINT), &density_checkpoint(cfg, &model, &rng))
        }
        Err(TrainError::Aborted { epoch, trace, source }) => {
            atomic_write(&out.join(METRICS_FILE), &metrics_csv(&trace, true))?;
            write_checkpoint(&out.join(ABORT_CHECKPOINT), &density_checkpoint(cfg, &model, &rng))?;
            Err(CliError::Aborted {
                epoch,
                checkpoint: out.join(ABORT_CHECKPOINT),
                message: source.to_string(),
            })
        }
        Err(e) => Err(e.into()),
    }
}

/// A PDE benchmark by name.
pub enum PdeInstance {
    Elliptic(EllipticCosine<f64>),
    KellerSegel(KellerSegel<f64>),
}

impl PdeInstance {
    pub fn by_name(name: &str) -> Result<Self, CliError> {
        match name {
            "elliptic-4d" => Ok(Self::Elliptic(EllipticCosine::new(4))),
            "elliptic-2d" => Ok(Self::Elliptic(EllipticCosine::new(2))),
            "keller-segel" => Ok(Self::KellerSegel(KellerSegel::new())),
            _ => Err(CliError::Mismatch(format!("{name} is not a PDE benchmark"))),
        }
    }
}

fn unknown_prefix(i: usize) -> String {
    format!("u{}.", i + 1)
}

/// Checkpoint of a PDE run, including the collocation state.
pub fn pde_checkpoint(
    cfg: &RunConfig,
    unknowns: &[Unknown<f64>],
    state: Option<&CollocationState<f64>>,
    rng: &ChaCha8Rng,
) -> Checkpoint {
    let mut params = Vec::new();
    for (i, u) in unknowns.iter().enumerate() {
        let names = u.tensor_names().into_iter().map(|n| format!("{}{n}", unknown_prefix(i))).collect();
        params.extend(sections(names, u.tensors()));
    }
    let state_sections = state
        .map(|s| {
            vec![
                Section {
                    name: "collocation.interior".into(),
                    values: s.interior.clone(),
                },
                Section {
                    name: "collocation.boundary".into(),
                    values: s.boundary.clone(),
                },
                Section {
                    name: "collocation.mixture".into(),
                    values: Array2::from_shape_vec((1, s.mixture.len()), s.mixture.clone()).expect("row"),
                },
            ]
        })
        .unwrap_or_default();
    Checkpoint {
        config: cfg.clone(),
        rng: RngState::capture(rng),
        round: state.map_or(0, |s| s.round),
        params,
        state: state_sections,
    }
}

/// Rebuilds the unknowns stored in a checkpoint.
pub fn pde_unknowns<P: PdeProblem<f64>>(problem: &P, ck: &Checkpoint) -> Result<Vec<Unknown<f64>>, CliError> {
    let arch = ck.config.arch()?;
    let d = problem.domain().dim();
    let mut out = Vec::new();
    for i in 0..problem.unknowns() {
        let flow = FlowModel::zeros(problem.domain().clone(), arch.clone())?;
        let mut u = Unknown::from_parts(flow, Mlp::zeros(MlpSpec::gradient_field(d)))?;
        let names = u.tensor_names();
        load_into(ck, &unknown_prefix(i), names, u.tensors_mut())?;
        out.push(u);
    }
    let expected: usize = out.iter().map(|u| u.num_params()).sum();
    if expected != ck.num_params() {
        return Err(CliError::Mismatch(format!(
            "checkpoint holds {} parameters, model has {expected}",
            ck.num_params()
        )));
    }
    Ok(out)
}

fn collocation_from(ck: &Checkpoint) -> Option<CollocationState<f64>> {
    Some(CollocationState {
        interior: ck.state("collocation.interior")?.clone(),
        boundary: ck.state("collocation.boundary")?.clone(),
        mixture: ck.state("collocation.mixture")?.iter().copied().collect(),
        round: ck.round,
    })
}

fn validation_points<P: PdeProblem<f64>>(problem: &P, n: usize, seed: u64) -> Array2<f64> {
    let mut vr = ChaCha8Rng::seed_from_u64(seed);
    vr.set_stream(VALIDATION_STREAM);
    problem.domain().sample_uniform(n, &mut vr)
}

fn solve_with<P: PdeProblem<f64>>(
    problem: &P,
    cfg: &RunConfig,
    out: &Path,
    checkpoint: Option<&Path>,
) -> Result<(), CliError> {
    let Task::Pde(p) = &cfg.task else {
        return Err(CliError::Mismatch(format!("{} is not a PDE benchmark", cfg.target)));
    };
    let (solve_cfg, weights) = cfg.solve_config().expect("pde task");
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (mut unknowns, state) = match checkpoint {
        Some(path) => {
            let ck = read_checkpoint(path)?;
            ensure_same_run(cfg, &ck)?;
            rng = ck.rng.restore();
            let u = pde_unknowns(problem, &ck)?;
            let st = collocation_from(&ck)
                .filter(|s| s.interior.nrows() == p.n_interior)
                .unwrap_or_else(|| CollocationState::uniform(problem.domain(), p.n_interior, p.n_boundary, &mut rng));
            (u, st)
        }
        None => {
            let arch = cfg.arch()?;
            let mut u = Vec::new();
            for _ in 0..problem.unknowns() {
                u.push(Unknown::new(problem.domain().clone(), arch.clone(), &mut rng)?);
            }
            let st = CollocationState::uniform(problem.domain(), p.n_interior, p.n_boundary, &mut rng);
            (u, st)
        }
    };
    let val = validation_points(problem, p.n_validation, cfg.seed);
    match solve(problem, &mut unknowns, &weights, &solve_cfg, state, Some(&val), &mut rng) {
        Ok(res) => {
            atomic_write(&out.join(METRICS_FILE), &metrics_csv(&res.trace, false))?;
            write_checkpoint(
                &out.join(FINAL_CHECKPOINT),
                &pde_checkpoint(cfg, &unknowns, Some(&res.state), &rng),
            )
        }
        Err(PdeError::Aborted {
            epoch, trace, source, ..
        }) => {
            atomic_write(&out.join(METRICS_FILE), &metrics_csv(&trace, false))?;
            write_checkpoint(&out.join(ABORT_CHECKPOINT), &pde_checkpoint(cfg, &unknowns, None, &rng))?;
            Err(CliError::Aborted {
                epoch,
                checkpoint: out.join(ABORT_CHECKPOINT),
                message: source.to_string(),
            })
        }
        Err(e) => Err(e.into()),
    }
}

pub fn solve_pde_run(cfg: &RunConfig, out: &Path, checkpoint: Option<&Path>) -> Result<(), CliError> {
    match PdeInstance::by_name(&cfg.target)? {
        PdeInstance::Elliptic(p) => solve_with(&p, cfg, out, checkpoint),
        PdeInstance::KellerSegel(p) => solve_with(&p, cfg, out, checkpoint),
    }
}

/// Flow of the requested unknown (or the density model) in a checkpoint.
pub fn checkpoint_flow(ck: &Checkpoint, unknown: usize) -> Result<FlowModel<f64>, CliError> {
    if ck.config.is_density() {
        if unknown != 0 {
            return Err(CliError::Mismatch("density checkpoints hold one model".into()));
        }
        return density_model(ck);
    }
    let mut us = match PdeInstance::by_name(&ck.config.target)? {
        PdeInstance::Elliptic(p) => pde_unknowns(&p, ck)?,
        PdeInstance::KellerSegel(p) => pde_unknowns(&p, ck)?,
    };
    if unknown >= us.len() {
        return Err(CliError::Mismatch(format!("unknown {} out of range 1..={}", unknown + 1, us.len())));
    }
    Ok(us.swap_remove(unknown).flow)
}

pub fn sample_run(checkpoint: &Path, n: usize, seed: u64, out: &Path, unknown: usize) -> Result<(), CliError> {
    let ck = read_checkpoint(checkpoint)?;
    let model = checkpoint_flow(&ck, unknown)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = model.sample(n, &mut rng)?;
    atomic_write(out, &dataset_csv(&x, None))?;
    Ok(())
}

/// Summary metrics of a checkpoint on fresh points, as `(name, value)`.
pub fn eval_summary(ck: &Checkpoint, n: usize, seed: u64) -> Result<Vec<(String, f64)>, CliError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    if ck.config.is_density() {
        let truth = truth_by_name(&ck.config.target)?;
        let model = density_model(ck)?;
        let x = truth.sample(n, &mut rng);
        let lp = truth.log_pdf(&x)?.to_vec();
        return Ok(vec![
            ("cross_entropy".into(), model.cross_entropy(&x)?),
            ("rel_kl".into(), model.relative_kl(&x, &lp)?),
        ]);
    }
    fn rel<P: PdeProblem<f64>>(p: &P, ck: &Checkpoint, n: usize, rng: &mut ChaCha8Rng) -> Result<Vec<f64>, CliError> {
        let us = pde_unknowns(p, ck)?;
        let x = p.domain().sample_uniform(n, rng);
        Ok(relative_l2(p, &us, &x)?.unwrap_or_default())
    }
    let errs = match PdeInstance::by_name(&ck.config.target)? {
        PdeInstance::Elliptic(p) => rel(&p, ck, n, &mut rng)?,
        PdeInstance::KellerSegel(p) => rel(&p, ck, n, &mut rng)?,
    };
    Ok(errs
        .into_iter()
        .enumerate()
        .map(|(i, e)| (if i == 0 { "rel_l2".into() } else { format!("rel_l2_{}", i + 1) }, e))
        .collect())
}

/// Density values of every model in a checkpoint at the points of `data`.
pub fn eval_points(ck: &Checkpoint, data: &Path) -> Result<Vec<u8>, CliError> {
    let x = read_dataset(data)?.points;
    if ck.config.is_density() {
        let lp = density_model(ck)?.log_pdf(&x)?;
        return Ok(table_csv(&x, &["logp".into()], &[lp]));
    }
    let count = match PdeInstance::by_name(&ck.config.target)? {
        PdeInstance::Elliptic(_) => 1,
        PdeInstance::KellerSegel(_) => 2,
    };
    let mut names = Vec::new();
    let mut cols = Vec::new();
    for i in 0..count {
        let flow = checkpoint_flow(ck, i)?;
        names.push(format!("p{}", i + 1));
        cols.push(flow.log_pdf(&x)?.mapv(f64::exp));
    }
    Ok(table_csv(&x, &names, &cols))
}

pub fn eval_run(
    checkpoint: &Path,
    out: &Path,
    n: usize,
    seed: u64,
    data: Option<&PathBuf>,
) -> Result<Vec<(String, f64)>, CliError> {
    let ck = read_checkpoint(checkpoint)?;
    if let Some(d) = data {
        atomic_write(out, &eval_points(&ck, d)?)?;
        return Ok(Vec::new());
    }
    let summary = eval_summary(&ck, n, seed)?;
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["metric", "value"]).expect("in-memory write");
    for (k, v) in &summary {
        w.write_record([k.clone(), crate::io::fmt_real(*v)]).expect("in-memory write");
    }
    atomic_write(out, &w.into_inner().expect("in-memory flush"))?;
    Ok(summary)
}
