//! Trajectory data and the block-Hankel matrices built from it.
//!
//! Signals are stored column-per-sample: a log with input dimension `p` and
//! `T` samples holds a `p x T` matrix. A block-Hankel matrix of order `l`
//! stacks `l` consecutive sample vectors per column.

use std::fs::File;
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{dim_err, Error, Result};
use crate::layout::PartitionLayout;

/// Singular values below this fraction of the largest count as zero.
pub const DEFAULT_RANK_TOL: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryLog {
    u: DMatrix<f64>,
    eps: DMatrix<f64>,
    y: DMatrix<f64>,
    dt: f64,
}

impl TrajectoryLog {
    /// `u` is `n_u x T`, `eps` has length `T`, `y` is `n_y x T`.
    pub fn new(u: DMatrix<f64>, eps: DVector<f64>, y: DMatrix<f64>, dt: f64) -> Result<Self> {
        let t = eps.len();
        if t == 0 {
            return Err(Error::InsufficientData { needed: 1, have: 0 });
        }
        if u.ncols() != t || y.ncols() != t {
            return dim_err(format!(
                "sequence lengths differ: u {}, eps {}, y {}",
                u.ncols(),
                t,
                y.ncols()
            ));
        }
        if !(dt > 0.0) {
            return Err(Error::InvalidParameter(format!("dt must be positive, got {dt}")));
        }
        Ok(Self { u, eps: DMatrix::from_row_slice(1, t, eps.as_slice()), y, dt })
    }

    /// Builds a log from per-sample vectors.
    pub fn from_samples(u: &[Vec<f64>], eps: &[f64], y: &[Vec<f64>], dt: f64) -> Result<Self> {
        let t = eps.len();
        if u.len() != t || y.len() != t {
            return dim_err("per-sample sequences have different lengths");
        }
        let nu = u.first().map_or(0, Vec::len);
        let ny = y.first().map_or(0, Vec::len);
        if u.iter().any(|s| s.len() != nu) || y.iter().any(|s| s.len() != ny) {
            return dim_err("samples have inconsistent dimensions");
        }
        let u = DMatrix::from_fn(nu, t, |r, c| u[c][r]);
        let y = DMatrix::from_fn(ny, t, |r, c| y[c][r]);
        Self::new(u, DVector::from_column_slice(eps), y, dt)
    }

    pub fn len(&self) -> usize {
        self.eps.ncols()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn u(&self) -> &DMatrix<f64> {
        &self.u
    }

    pub fn eps(&self) -> DVector<f64> {
        DVector::from_row_slice(self.eps.as_slice())
    }

    pub fn eps_matrix(&self) -> &DMatrix<f64> {
        &self.eps
    }

    pub fn y(&self) -> &DMatrix<f64> {
        &self.y
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn u_dim(&self) -> usize {
        self.u.nrows()
    }

    pub fn y_dim(&self) -> usize {
        self.y.nrows()
    }

    /// Samples `start..start + len`, flattened sample-major (the layout of
    /// `u_ini`, `y_ini` and friends).
    pub fn window(&self, start: usize, len: usize) -> Result<(DVector<f64>, DVector<f64>, DVector<f64>)> {
        if start + len > self.len() {
            return Err(Error::InsufficientData { needed: start + len, have: self.len() });
        }
        let flat = |m: &DMatrix<f64>| {
            DVector::from_iterator(m.nrows() * len, m.columns(start, len).iter().copied())
        };
        Ok((flat(&self.u), flat(&self.eps), flat(&self.y)))
    }
}

/// Past/future partition of the order-`(T_ini + N)` Hankel matrices of a log.
#[derive(Debug, Clone)]
pub struct HankelBlocks {
    pub up: DMatrix<f64>,
    pub uf: DMatrix<f64>,
    pub ep: DMatrix<f64>,
    pub ef: DMatrix<f64>,
    pub yp: DMatrix<f64>,
    pub yf: DMatrix<f64>,
    pub t_ini: usize,
    pub horizon: usize,
}

impl HankelBlocks {
    pub fn g_dim(&self) -> usize {
        self.up.ncols()
    }

    pub fn u_dim(&self) -> usize {
        self.up.nrows() / self.t_ini
    }

    pub fn y_dim(&self) -> usize {
        self.yp.nrows() / self.t_ini
    }

    /// Output prediction through the data-based representation: finds the
    /// minimum-norm `g` matching `(u_ini, eps_ini, y_ini, u, eps)` in the least
    /// squares sense and returns `Y_f g`.
    pub fn predict(
        &self,
        u_ini: &DVector<f64>,
        eps_ini: &DVector<f64>,
        y_ini: &DVector<f64>,
        u: &DVector<f64>,
        eps: &DVector<f64>,
    ) -> Result<DVector<f64>> {
        let blocks = [&self.up, &self.ep, &self.yp, &self.uf, &self.ef];
        let rhs = [u_ini, eps_ini, y_ini, u, eps];
        for (b, r) in blocks.iter().zip(rhs.iter()) {
            if b.nrows() != r.len() {
                return dim_err(format!("prediction input of length {} for block with {} rows", r.len(), b.nrows()));
            }
        }
        let lhs = vstack(&blocks);
        let rhs = vstack_vec(&rhs);
        let g = least_norm_solve(lhs, &rhs)?;
        Ok(&self.yf * g)
    }
}

/// Minimum-norm least-squares solution through the SVD, truncating singular
/// values below `1e-10` of the largest.
pub fn least_norm_solve(a: DMatrix<f64>, b: &DVector<f64>) -> Result<DVector<f64>> {
    let svd = a.svd(true, true);
    let smax = svd.singular_values.max();
    svd.solve(b, smax * 1e-10)
        .map_err(|e| Error::Factorization(e.to_string()))
}

pub(crate) fn vstack(blocks: &[&DMatrix<f64>]) -> DMatrix<f64> {
    let cols = blocks.first().map_or(0, |b| b.ncols());
    let rows: usize = blocks.iter().map(|b| b.nrows()).sum();
    let mut out = DMatrix::zeros(rows, cols);
    let mut r = 0;
    for b in blocks {
        out.rows_mut(r, b.nrows()).copy_from(*b);
        r += b.nrows();
    }
    out
}

pub(crate) fn vstack_vec(parts: &[&DVector<f64>]) -> DVector<f64> {
    DVector::from_iterator(
        parts.iter().map(|p| p.len()).sum(),
        parts.iter().flat_map(|p| p.iter().copied()),
    )
}

/// Block-Hankel matrix with `order` block rows of the column-per-sample
/// sequence `seq`.
pub fn build_hankel(seq: &DMatrix<f64>, order: usize) -> Result<DMatrix<f64>> {
    let (dim, t) = seq.shape();
    if order == 0 {
        return Err(Error::InvalidParameter("Hankel order must be at least 1".into()));
    }
    if order > t {
        return dim_err(format!("Hankel order {order} exceeds sequence length {t}"));
    }
    let cols = t - order + 1;
    let mut h = DMatrix::zeros(order * dim, cols);
    for j in 0..cols {
        for k in 0..order {
            h.view_mut((k * dim, j), (dim, 1)).copy_from(&seq.column(j + k));
        }
    }
    Ok(h)
}

/// Numerical rank with singular values below `rel_tol * sigma_max` treated as zero.
pub fn numerical_rank(m: &DMatrix<f64>, rel_tol: f64) -> usize {
    if m.is_empty() {
        return 0;
    }
    let sv = m.singular_values();
    let smax = sv.max();
    if smax <= 0.0 {
        return 0;
    }
    sv.iter().filter(|&&s| s > rel_tol * smax).count()
}

pub fn is_persistently_exciting(seq: &DMatrix<f64>, order: usize, rel_tol: f64) -> Result<bool> {
    let h = build_hankel(seq, order)?;
    if h.nrows() > h.ncols() {
        return Ok(false);
    }
    Ok(numerical_rank(&h, rel_tol) == h.nrows())
}

pub fn split_past_future(log: &TrajectoryLog, t_ini: usize, horizon: usize) -> Result<HankelBlocks> {
    let l = t_ini + horizon;
    if t_ini == 0 || horizon == 0 {
        return Err(Error::InvalidParameter("T_ini and N must be positive".into()));
    }
    if log.len() < l {
        return Err(Error::InsufficientData { needed: l, have: log.len() });
    }
    let split = |seq: &DMatrix<f64>| -> Result<(DMatrix<f64>, DMatrix<f64>)> {
        let h = build_hankel(seq, l)?;
        let d = seq.nrows();
        Ok((h.rows(0, t_ini * d).into_owned(), h.rows(t_ini * d, horizon * d).into_owned()))
    };
    let (up, uf) = split(&log.u)?;
    let (ep, ef) = split(&log.eps)?;
    let (yp, yf) = split(&log.y)?;
    Ok(HankelBlocks { up, uf, ep, ef, yp, yf, t_ini, horizon })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DataMode {
    Centralized { n: usize, m: usize },
    Local { m_i: usize },
}

/// Shortest data length whose input can be persistently exciting of the
/// order the data-based representation needs.
pub fn min_data_length(mode: DataMode, t_ini: usize, horizon: usize) -> usize {
    match mode {
        DataMode::Centralized { n, m } => (n + 1) * (t_ini + horizon + 2 * m + 2 * n) - 1,
        DataMode::Local { m_i } => 2 * (t_ini + horizon + 2 * m_i + 2) - 1,
    }
}

/// Persistent-excitation order required of the input data.
pub fn required_pe_order(mode: DataMode, t_ini: usize, horizon: usize) -> usize {
    match mode {
        DataMode::Centralized { n, m } => t_ini + horizon + 2 * n + 2 * m,
        DataMode::Local { m_i } => t_ini + horizon + 2 + 2 * m_i,
    }
}

/// Splits a centralized log into per-subsystem logs. Subsystem `i + 1`'s
/// reference input is the velocity error of the last vehicle of subsystem `i`.
pub fn partition_centralized_log(log: &TrajectoryLog, layout: &PartitionLayout) -> Result<Vec<TrajectoryLog>> {
    if log.u_dim() != layout.n() || log.y_dim() != layout.central_y_dim() {
        return dim_err(format!(
            "log has u-dim {} / y-dim {}, layout expects {} / {}",
            log.u_dim(),
            log.y_dim(),
            layout.n(),
            layout.central_y_dim()
        ));
    }
    let t = log.len();
    let mut out = Vec::with_capacity(layout.n());
    let mut eps = log.eps();
    for i in 0..layout.n() {
        let off = layout.y_offset(i);
        let dim = layout.subsystem_y_dim(i);
        let y_i = log.y.rows(off, dim).into_owned();
        let u_i = log.u.rows(i, 1).into_owned();
        let next_eps = DVector::from_iterator(t, y_i.row(layout.hdv_count(i)).iter().copied());
        out.push(TrajectoryLog::new(u_i, eps, y_i, log.dt)?);
        eps = next_eps;
    }
    Ok(out)
}

/// Restacks subsystem logs into the centralized `(u, y)` layout.
pub fn restack(logs: &[TrajectoryLog]) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let us: Vec<&DMatrix<f64>> = logs.iter().map(|l| &l.u).collect();
    let ys: Vec<&DMatrix<f64>> = logs.iter().map(|l| &l.y).collect();
    if us.iter().chain(ys.iter()).any(|m| m.ncols() != logs[0].len()) {
        return dim_err("subsystem logs have different lengths");
    }
    Ok((vstack(&us), vstack(&ys)))
}

/// Sidecar metadata stored next to a trajectory CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryMeta {
    pub dt: f64,
    pub samples: usize,
    /// HDV counts per subsystem of the chain the log came from.
    pub layout: Option<Vec<usize>>,
    /// `None` for a centralized log, otherwise the 0-based subsystem index.
    pub subsystem: Option<usize>,
}

pub fn meta_path(csv_path: &Path) -> PathBuf {
    csv_path.with_extension("meta.json")
}

/// Writes `log` as CSV (one sample per row) plus a JSON metadata sidecar.
pub fn write_log_csv(
    log: &TrajectoryLog,
    path: &Path,
    y_names: &[String],
    layout: Option<&PartitionLayout>,
    subsystem: Option<usize>,
) -> Result<()> {
    if y_names.len() != log.y_dim() {
        return dim_err("one name per output channel required");
    }
    let mut w = csv::Writer::from_path(path)?;
    let mut header: Vec<String> = (1..=log.u_dim()).map(|i| format!("u_{i}")).collect();
    header.push("eps".into());
    header.extend(y_names.iter().cloned());
    w.write_record(&header)?;
    for k in 0..log.len() {
        let uk = log.u.column(k);
        let yk = log.y.column(k);
        let row = uk
            .iter()
            .chain(std::iter::once(&log.eps[(0, k)]))
            .chain(yk.iter())
            .map(|v| format!("{v:e}"));
        w.write_record(row)?;
    }
    w.flush()?;
    let meta = TrajectoryMeta {
        dt: log.dt,
        samples: log.len(),
        layout: layout.map(|l| l.hdv_counts().to_vec()),
        subsystem,
    };
    serde_json::to_writer_pretty(File::create(meta_path(path))?, &meta)?;
    Ok(())
}

/// Reads a CSV written by [`write_log_csv`] together with its sidecar.
pub fn read_log_csv(path: &Path) -> Result<(TrajectoryLog, TrajectoryMeta, Vec<String>)> {
    let meta: TrajectoryMeta = serde_json::from_reader(File::open(meta_path(path))?)?;
    let mut r = csv::Reader::from_path(path)?;
    let header: Vec<String> = r.headers()?.iter().map(str::to_owned).collect();
    let nu = header.iter().take_while(|h| h.starts_with("u_")).count();
    if header.get(nu).map(String::as_str) != Some("eps") {
        return dim_err("CSV header must be u_1..u_n, eps, outputs");
    }
    let y_names = header[nu + 1..].to_vec();
    let mut u = Vec::new();
    let mut eps = Vec::new();
    let mut y = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let vals: Vec<f64> = rec
            .iter()
            .map(|s| s.trim().parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::InvalidParameter(format!("bad number in {}: {e}", path.display())))?;
        if vals.len() != header.len() {
            return dim_err("CSV row width differs from header");
        }
        u.push(vals[..nu].to_vec());
        eps.push(vals[nu]);
        y.push(vals[nu + 1..].to_vec());
    }
    if eps.len() != meta.samples {
        return dim_err(format!("metadata says {} samples, CSV has {}", meta.samples, eps.len()));
    }
    let log = TrajectoryLog::from_samples(&u, &eps, &y, meta.dt)?;
    Ok((log, meta, y_names))
}
