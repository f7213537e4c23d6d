//! Dataset and metric CSV files, written atomically.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use bkrnet::estimate::MetricTrace;
use ndarray::{Array1, Array2};

#[derive(Debug, thiserror::Error)]
pub enum IoError {
    #[error("{path}: {source}")]
    Fs {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Csv {
        path: PathBuf,
        #[source]
        source: csv::Error,
    },
    #[error("{path}: {message}")]
    Format { path: PathBuf, message: String },
}

fn fs_err(path: &Path) -> impl FnOnce(std::io::Error) -> IoError + '_ {
    move |source| IoError::Fs {
        path: path.to_path_buf(),
        source,
    }
}

/// Writes `bytes` to a sibling temporary file, syncs it and renames it over
/// `path`, so readers never see a partial file.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<(), IoError> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    fs::create_dir_all(dir).map_err(fs_err(dir))?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(fs_err(dir))?;
    tmp.write_all(bytes).map_err(fs_err(path))?;
    tmp.as_file().sync_all().map_err(fs_err(path))?;
    tmp.persist(path).map_err(|e| IoError::Fs {
        path: path.to_path_buf(),
        source: e.error,
    })?;
    Ok(())
}

/// Decimal text with 17 significant digits.
pub fn fmt_real(v: f64) -> String {
    format!("{v:.16e}")
}

fn csv_bytes(header: &[String], rows: impl Iterator<Item = Vec<String>>) -> Vec<u8> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header).expect("in-memory write");
    for r in rows {
        w.write_record(&r).expect("in-memory write");
    }
    w.into_inner().expect("in-memory flush")
}

/// Points as columns `x1..xd`, with an optional `true_logp` column.
pub fn dataset_csv(x: &Array2<f64>, logp: Option<&Array1<f64>>) -> Vec<u8> {
    let mut header: Vec<String> = (1..=x.ncols()).map(|j| format!("x{j}")).collect();
    if logp.is_some() {
        header.push("true_logp".into());
    }
    csv_bytes(
        &header,
        x.rows().into_iter().enumerate().map(|(i, r)| {
            let mut row: Vec<String> = r.iter().map(|v| fmt_real(*v)).collect();
            if let Some(lp) = logp {
                row.push(fmt_real(lp[i]));
            }
            row
        }),
    )
}

/// Points with named value columns.
pub fn table_csv(x: &Array2<f64>, names: &[String], values: &[Array1<f64>]) -> Vec<u8> {
    let mut header: Vec<String> = (1..=x.ncols()).map(|j| format!("x{j}")).collect();
    header.extend(names.iter().cloned());
    csv_bytes(
        &header,
        x.rows().into_iter().enumerate().map(|(i, r)| {
            let mut row: Vec<String> = r.iter().map(|v| fmt_real(*v)).collect();
            row.extend(values.iter().map(|c| fmt_real(c[i])));
            row
        }),
    )
}

pub struct Dataset {
    pub points: Array2<f64>,
    pub true_logp: Option<Array1<f64>>,
}

pub fn read_dataset(path: &Path) -> Result<Dataset, IoError> {
    let csv_err = |source| IoError::Csv {
        path: path.to_path_buf(),
        source,
    };
    let format = |message: String| IoError::Format {
        path: path.to_path_buf(),
        message,
    };
    let mut r = csv::Reader::from_path(path).map_err(csv_err)?;
    let header = r.headers().map_err(csv_err)?.clone();
    let has_logp = header.iter().next_back() == Some("true_logp");
    let d = header.len() - usize::from(has_logp);
    for (j, h) in header.iter().take(d).enumerate() {
        if h != format!("x{}", j + 1) {
            return Err(format(format!("column {} is {h:?}, expected x{}", j + 1, j + 1)));
        }
    }
    if d == 0 {
        return Err(format("no coordinate columns".into()));
    }
    let mut values = Vec::new();
    let mut logp = Vec::new();
    for (i, rec) in r.records().enumerate() {
        let rec = rec.map_err(csv_err)?;
        for (j, field) in rec.iter().enumerate() {
            let v: f64 = field
                .trim()
                .parse()
                .map_err(|_| format(format!("row {}, column {}: {field:?} is not a number", i + 1, j + 1)))?;
            if j < d {
                values.push(v);
            } else {
                logp.push(v);
            }
        }
    }
    let n = values.len() / d;
    let points = Array2::from_shape_vec((n, d), values).map_err(|e| format(e.to_string()))?;
    Ok(Dataset {
        points,
        true_logp: has_logp.then(|| Array1::from(logp)),
    })
}

/// Metric columns: `epoch, phase, loss_total, loss_pde, loss_b, <fit>,
/// <rel>[, <rel>_2, ...], lr, wall_s`.
pub fn metrics_csv(trace: &MetricTrace, density: bool) -> Vec<u8> {
    let rel_count = trace.records.iter().map(|r| r.rel.len()).max().unwrap_or(0).max(1);
    let (fit, rel) = if density { ("loss_ce", "rel_kl") } else { ("loss_g", "rel_l2") };
    let mut header: Vec<String> = ["epoch", "phase", "loss_total", "loss_pde", "loss_b", fit]
        .iter()
        .map(|s| s.to_string())
        .collect();
    header.push(rel.into());
    header.extend((2..=rel_count).map(|i| format!("{rel}_{i}")));
    header.push("lr".into());
    header.push("wall_s".into());
    csv_bytes(
        &header,
        trace.records.iter().map(|r| {
            let mut row = vec![
                r.epoch.to_string(),
                r.phase.to_string(),
                fmt_real(r.loss_total),
                fmt_real(r.loss_pde),
                fmt_real(r.loss_b),
                fmt_real(r.loss_fit),
            ];
            row.extend((0..rel_count).map(|i| r.rel.get(i).map(|v| fmt_real(*v)).unwrap_or_default()));
            row.push(fmt_real(r.lr));
            row.push(format!("{:.3}", r.wall_s));
            row
        }),
    )
}
