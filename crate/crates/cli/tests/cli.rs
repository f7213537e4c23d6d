use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

use bkrnet::estimate::{train_density, Validation};
use bkrnet::flow::count_dofs;
use bkrnet_cli::checkpoint::Checkpoint;
use bkrnet_cli::commands::{density_checkpoint, density_data, density_model, read_checkpoint};
use bkrnet_cli::config::RunConfig;
use bkrnet_cli::io::read_dataset;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_bkrnet"))
}

fn run_ok(args: &[&str]) {
    let out = bin().args(args).output().unwrap();
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
}

const ANNULUS: &str = "problem = annulus
seed = 5
flow.depths = 2
flow.width = 8
train.epochs = 3
train.batch_size = 200
train.eval_every = 1
train.chunk = 128
data.n_train = 400
data.n_validation = 300
";

const ELLIPTIC: &str = "problem = elliptic-2d
seed = 3
flow.depths = 2
flow.width = 8
train.epochs = 2
train.batch_size = 50
train.eval_every = 1
pde.n_interior = 100
pde.n_boundary = 8
pde.n_validation = 200
adapt.rounds = 1
";

const KELLER_SEGEL: &str = "problem = keller-segel
seed = 4
flow.depths = 2
flow.width = 8
train.epochs = 1
train.batch_size = 60
train.eval_every = 1
pde.n_interior = 60
pde.n_boundary = 8
pde.n_validation = 100
adapt.rounds = 1
";

fn write_config(dir: &Path, name: &str, text: &str) -> PathBuf {
    let p = dir.join(name);
    fs::write(&p, text).unwrap();
    p
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Metrics file without its wall-clock column.
fn metrics_without_wall(path: &Path) -> Vec<String> {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .map(|l| l.rsplit_once(',').unwrap().0.to_string())
        .collect()
}

#[test]
fn gen_data_writes_coordinate_columns() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("train.csv");
    run_ok(&["gen-data", "--truth", "annulus", "-n", "20000", "--seed", "7", "--out", s(&out)]);
    let text = fs::read_to_string(&out).unwrap();
    assert_eq!(text.lines().next().unwrap(), "x1,x2");
    let ds = read_dataset(&out).unwrap();
    assert_eq!(ds.points.dim(), (20000, 2));
    assert!(ds.true_logp.is_none());
    let with = dir.path().join("val.csv");
    run_ok(&["gen-data", "--truth", "gaussian-mixture", "-n", "50", "--seed", "7", "--out", s(&with), "--with-logp"]);
    assert_eq!(read_dataset(&with).unwrap().true_logp.unwrap().len(), 50);
}

#[test]
fn train_density_is_deterministic_and_resumable() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "annulus.cfg", ANNULUS);
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    run_ok(&["train-density", "--config", s(&cfg), "--out", s(&a)]);
    run_ok(&["train-density", "--config", s(&cfg), "--out", s(&b)]);
    let ma = metrics_without_wall(&a.join("metrics.csv"));
    assert_eq!(ma, metrics_without_wall(&b.join("metrics.csv")));
    assert_eq!(ma[0], "epoch,phase,loss_total,loss_pde,loss_b,loss_ce,rel_kl,lr");
    assert_eq!(ma.len(), 5);
    assert_eq!(
        fs::read(a.join("final.ckpt")).unwrap(),
        fs::read(b.join("final.ckpt")).unwrap()
    );

    // Load then save is byte-identical, and the parameter count matches.
    let text = fs::read_to_string(a.join("final.ckpt")).unwrap();
    let ck = Checkpoint::parse(&text).unwrap();
    assert_eq!(ck.to_text(), text);
    assert_eq!(ck.num_params(), count_dofs(&ck.config.arch().unwrap()));

    // Resuming for more epochs works from the stored RNG state.
    let c = dir.path().join("c");
    run_ok(&["train-density", "--config", s(&cfg), "--out", s(&c), "--checkpoint", s(&a.join("final.ckpt"))]);
    assert!(c.join("final.ckpt").exists());
}

#[test]
fn zero_epoch_resume_reproduces_pre_save_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = RunConfig::parse(ANNULUS).unwrap();
    let truth = bkrnet::problems::Annulus;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (data, val, lp) = density_data(&cfg, &truth, &mut rng).unwrap();
    let mut model =
        bkrnet::flow::FlowModel::new(bkrnet::problems::SyntheticTruth::domain(&truth), cfg.arch().unwrap(), &mut rng)
            .unwrap();
    let lp = lp.to_vec();
    let v = || Validation {
        points: &val,
        true_logp: &lp,
    };
    train_density(&mut model, &data, Some(v()), &cfg.train_config(), &mut rng).unwrap();
    let ck_path = dir.path().join("saved.ckpt");
    fs::write(&ck_path, density_checkpoint(&cfg, &model, &rng).to_text()).unwrap();

    cfg.train.epochs = 0;
    let before = train_density(&mut model.clone(), &data, Some(v()), &cfg.train_config(), &mut rng.clone()).unwrap();
    let cfg_path = write_config(dir.path(), "zero.cfg", &cfg.to_text());
    let out = dir.path().join("resumed");
    run_ok(&["train-density", "--config", s(&cfg_path), "--out", s(&out), "--checkpoint", s(&ck_path)]);
    let after = metrics_without_wall(&out.join("metrics.csv"));
    let expected = format!(
        "0,0,{0:.16e},{1:.16e},{1:.16e},{0:.16e},{2:.16e},{3:.16e}",
        before.records[0].loss_total, 0.0, before.records[0].rel[0], before.records[0].lr
    );
    assert_eq!(after[1], expected);
    assert_eq!(density_model(&read_checkpoint(&ck_path).unwrap()).unwrap(), model);
}

#[test]
fn sampling_twice_with_one_seed_gives_identical_files() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "annulus.cfg", ANNULUS);
    let run = dir.path().join("run1");
    run_ok(&["train-density", "--config", s(&cfg), "--out", s(&run)]);
    let ck = run.join("final.ckpt");
    let (s1, s2, s3) = (dir.path().join("s1.csv"), dir.path().join("s2.csv"), dir.path().join("s3.csv"));
    run_ok(&["sample", "--checkpoint", s(&ck), "-n", "1000", "--seed", "3", "--out", s(&s1)]);
    run_ok(&["sample", "--checkpoint", s(&ck), "-n", "1000", "--seed", "3", "--out", s(&s2)]);
    run_ok(&["sample", "--checkpoint", s(&ck), "-n", "1000", "--seed", "4", "--out", s(&s3)]);
    assert_eq!(fs::read(&s1).unwrap(), fs::read(&s2).unwrap());
    assert_ne!(fs::read(&s1).unwrap(), fs::read(&s3).unwrap());
    let pts = read_dataset(&s1).unwrap().points;
    assert_eq!(pts.dim(), (1000, 2));
    assert!(pts.iter().all(|v| v.abs() <= std::f64::consts::E));

    let ev = dir.path().join("eval.csv");
    run_ok(&["eval", "--checkpoint", s(&ck), "--out", s(&ev), "-n", "500", "--seed", "1"]);
    let text = fs::read_to_string(&ev).unwrap();
    assert!(text.starts_with("metric,value\ncross_entropy,"));
    assert!(text.contains("\nrel_kl,"));
    let tab = dir.path().join("tab.csv");
    run_ok(&["eval", "--checkpoint", s(&ck), "--out", s(&tab), "--data", s(&s1)]);
    assert!(fs::read_to_string(&tab).unwrap().starts_with("x1,x2,logp\n"));
}

#[test]
fn invalid_inputs_fail_with_messages() {
    let dir = tempfile::tempdir().unwrap();
    let bad = write_config(dir.path(), "bad.cfg", "problem = annulus\ntrain.lr = -0.1\n");
    let out = bin()
        .args(["train-density", "--config", s(&bad), "--out", s(dir.path())])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("train.lr"));

    let unknown = write_config(dir.path(), "unknown.cfg", "problem = annulus\nflow.colour = red\n");
    let out = bin()
        .args(["train-density", "--config", s(&unknown), "--out", s(dir.path())])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("flow.colour"));

    let cfg = write_config(dir.path(), "annulus.cfg", ANNULUS);
    let run = dir.path().join("run");
    run_ok(&["train-density", "--config", s(&cfg), "--out", s(&run)]);
    let ck = run.join("final.ckpt");
    let tampered = dir.path().join("tampered.ckpt");
    fs::write(&tampered, fs::read_to_string(&ck).unwrap().replace("version = 1", "version = 7")).unwrap();
    let out = bin()
        .args(["sample", "--checkpoint", s(&tampered), "-n", "5", "--out", s(&dir.path().join("x.csv"))])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("version 7"));

    let out = bin().args(["solve-pde", "--problem", "annulus", "--out", s(dir.path())]).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn solve_pde_writes_metrics_and_resumes() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "e.cfg", ELLIPTIC);
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    run_ok(&["solve-pde", "--config", s(&cfg), "--out", s(&a)]);
    run_ok(&["solve-pde", "--config", s(&cfg), "--out", s(&b)]);
    let m = metrics_without_wall(&a.join("metrics.csv"));
    assert_eq!(m, metrics_without_wall(&b.join("metrics.csv")));
    assert_eq!(m[0], "epoch,phase,loss_total,loss_pde,loss_b,loss_g,rel_l2,lr");
    // Epoch 0, then two epochs in each of two phases.
    assert_eq!(m.len(), 6);
    let text = fs::read_to_string(a.join("final.ckpt")).unwrap();
    let ck = Checkpoint::parse(&text).unwrap();
    assert_eq!(ck.to_text(), text);
    assert_eq!(ck.round, 1);
    assert_eq!(ck.state("collocation.interior").unwrap().nrows(), 100);
    assert_eq!(ck.state("collocation.mixture").unwrap().len(), 2);
    let c = dir.path().join("c");
    run_ok(&["solve-pde", "--config", s(&cfg), "--out", s(&c), "--checkpoint", s(&a.join("final.ckpt"))]);
    assert_eq!(Checkpoint::parse(&fs::read_to_string(c.join("final.ckpt")).unwrap()).unwrap().round, 2);
}

#[test]
fn systems_report_one_error_per_unknown() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "ks.cfg", KELLER_SEGEL);
    let a = dir.path().join("a");
    run_ok(&["solve-pde", "--config", s(&cfg), "--out", s(&a)]);
    let m = metrics_without_wall(&a.join("metrics.csv"));
    assert_eq!(m[0], "epoch,phase,loss_total,loss_pde,loss_b,loss_g,rel_l2,rel_l2_2,lr");
    let ck = a.join("final.ckpt");
    let (s1, s2) = (dir.path().join("u.csv"), dir.path().join("v.csv"));
    run_ok(&["sample", "--checkpoint", s(&ck), "-n", "20", "--out", s(&s1), "--unknown", "1"]);
    run_ok(&["sample", "--checkpoint", s(&ck), "-n", "20", "--out", s(&s2), "--unknown", "2"]);
    assert_ne!(fs::read(&s1).unwrap(), fs::read(&s2).unwrap());
    let ev = dir.path().join("ev.csv");
    run_ok(&["eval", "--checkpoint", s(&ck), "--out", s(&ev), "-n", "100"]);
    let text = fs::read_to_string(&ev).unwrap();
    assert!(text.contains("\nrel_l2,") && text.contains("\nrel_l2_2,"));
    let tab = dir.path().join("tab.csv");
    run_ok(&["eval", "--checkpoint", s(&ck), "--out", s(&tab), "--data", s(&s1)]);
    assert!(fs::read_to_string(&tab).unwrap().starts_with("x1,x2,p1,p2\n"));
}
