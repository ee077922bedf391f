//! CSV and plot-data output, and offline re-verification of runs.
//!
//! A run named `<stem>` produces `<stem>.csv` (one row per step),
//! `<stem>.run.json` (metadata and headline metrics), `<stem>_heatmap.dat`
//! (`t vehicle v` blocks separated by blank lines, for `splot ... with pm3d`)
//! and `<stem>_profile.dat` (`t v_0 v_1 ...`, for `plot ... using 1:k`).

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::config::Mode;
use super::run::{real_cost, total_fuel, RunMetrics, Trajectory};
use super::sweep::DegradationTable;
use crate::central::Weights;
use crate::error::{dim_err, Error, Result};
use crate::layout::PartitionLayout;

/// Relative tolerance for re-deriving cost and fuel from a trajectory file.
pub const RECOMPUTE_TOL: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub name: String,
    pub mode: Mode,
    pub seed: u64,
    pub hdv_counts: Vec<usize>,
    pub weights: Weights,
    pub dt: f64,
    pub steps: usize,
    pub real_cost: f64,
    pub fuel: f64,
    pub mean_iterations: f64,
    pub max_iterations: usize,
    pub mean_solve_time: f64,
    pub max_solve_time: f64,
}

impl RunRecord {
    pub fn from_metrics(m: &RunMetrics) -> Self {
        Self {
            name: m.name.clone(),
            mode: m.mode,
            seed: m.seed,
            hdv_counts: m.layout.hdv_counts().to_vec(),
            weights: m.weights,
            dt: m.trajectory.dt,
            steps: m.trajectory.steps(),
            real_cost: m.real_cost,
            fuel: m.fuel,
            mean_iterations: m.mean_iterations(),
            max_iterations: m.iterations.iter().copied().max().unwrap_or(0),
            mean_solve_time: m.mean_solve_time(),
            max_solve_time: m.max_solve_time(),
        }
    }

    pub fn stem(&self) -> String {
        run_stem(&self.name, self.mode, self.seed)
    }
}

pub fn run_stem(name: &str, mode: Mode, seed: u64) -> String {
    format!("{name}_{mode}_s{seed}")
}

fn trajectory_header(layout: &PartitionLayout) -> Vec<String> {
    let nv = layout.vehicle_count() + 1;
    let mut h = vec!["step".to_string(), "time".to_string()];
    h.extend((0..nv).map(|k| format!("v_{k}")));
    h.extend((0..nv).map(|k| format!("a_{k}")));
    h.extend((1..nv).map(|k| format!("s_{k}")));
    h.extend((1..=layout.n()).map(|i| format!("u_{i}")));
    h.extend(layout.central_y_names());
    h
}

pub fn write_trajectory_csv(traj: &Trajectory, layout: &PartitionLayout, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(trajectory_header(layout))?;
    for k in 0..traj.steps() {
        let mut row = vec![k.to_string(), (k as f64 * traj.dt).to_string()];
        for table in [&traj.vel[k], &traj.acc[k], &traj.spacing[k], &traj.u[k], &traj.y[k]] {
            row.extend(table.iter().map(f64::to_string));
        }
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_trajectory_csv(path: &Path, layout: &PartitionLayout, dt: f64) -> Result<Trajectory> {
    let mut r = csv::Reader::from_path(path)?;
    let expected = trajectory_header(layout);
    let header: Vec<&str> = r.headers()?.iter().collect();
    if header != expected.iter().map(String::as_str).collect::<Vec<_>>() {
        return dim_err(format!("{} does not match the run layout", path.display()));
    }
    let nv = layout.vehicle_count() + 1;
    let widths = [nv, nv, nv - 1, layout.n(), layout.central_y_dim()];
    let mut traj = Trajectory { dt, ..Default::default() };
    for rec in r.records() {
        let rec = rec?;
        let vals = rec
            .iter()
            .skip(2)
            .map(|s| s.parse::<f64>().map_err(|e| Error::InvalidParameter(format!("bad number '{s}': {e}"))))
            .collect::<Result<Vec<f64>>>()?;
        let mut off = 0;
        let mut take = |w: usize| {
            let v = vals[off..off + w].to_vec();
            off += w;
            v
        };
        traj.vel.push(take(widths[0]));
        traj.acc.push(take(widths[1]));
        traj.spacing.push(take(widths[2]));
        traj.u.push(take(widths[3]));
        traj.y.push(take(widths[4]));
    }
    Ok(traj)
}

/// Velocity heatmap and profile files for gnuplot.
pub fn write_plot_data(traj: &Trajectory, dir: &Path, stem: &str) -> Result<()> {
    let mut heat = BufWriter::new(File::create(dir.join(format!("{stem}_heatmap.dat")))?);
    let mut prof = BufWriter::new(File::create(dir.join(format!("{stem}_profile.dat")))?);
    writeln!(heat, "# t vehicle v")?;
    writeln!(prof, "# t v_0 .. v_{}", traj.vel.first().map_or(0, |v| v.len().saturating_sub(1)))?;
    for (k, v) in traj.vel.iter().enumerate() {
        let t = k as f64 * traj.dt;
        for (j, vj) in v.iter().enumerate() {
            writeln!(heat, "{t} {j} {vj}")?;
        }
        writeln!(heat)?;
        write!(prof, "{t}")?;
        for vj in v {
            write!(prof, " {vj}")?;
        }
        writeln!(prof)?;
    }
    heat.flush()?;
    prof.flush()?;
    Ok(())
}

/// Writes trajectory, metadata and plot data of one run into `dir`.
pub fn write_run(m: &RunMetrics, dir: &Path) -> Result<RunRecord> {
    fs::create_dir_all(dir)?;
    let rec = RunRecord::from_metrics(m);
    let stem = rec.stem();
    write_trajectory_csv(&m.trajectory, &m.layout, &dir.join(format!("{stem}.csv")))?;
    fs::write(dir.join(format!("{stem}.run.json")), serde_json::to_string_pretty(&rec)?)?;
    write_plot_data(&m.trajectory, dir, &stem)?;
    Ok(rec)
}

fn rel_close(a: f64, b: f64) -> bool {
    (a - b).abs() <= RECOMPUTE_TOL * a.abs().max(b.abs()).max(f64::MIN_POSITIVE)
}

/// Re-derives cost and fuel from a trajectory and checks the run invariants.
pub fn verify_run(rec: &RunRecord, traj: &Trajectory) -> Result<()> {
    let layout = PartitionLayout::new(rec.hdv_counts.clone())?;
    let fail = |what: String| Err(Error::InvalidParameter(format!("run {}: {what}", rec.stem())));
    if traj.steps() != rec.steps {
        return fail(format!("{} rows for {} steps", traj.steps(), rec.steps));
    }
    let cost = real_cost(traj, &layout, &rec.weights);
    if !rel_close(cost, rec.real_cost) {
        return fail(format!("recomputed cost {cost} differs from reported {}", rec.real_cost));
    }
    let fuel = total_fuel(traj);
    if !rel_close(fuel, rec.fuel) {
        return fail(format!("recomputed fuel {fuel} differs from reported {}", rec.fuel));
    }
    if !(rec.real_cost >= 0.0 && rec.fuel >= 0.0) {
        return fail("negative cost or fuel".into());
    }
    if traj.steps() > 0 && traj.min_spacing() <= 0.0 {
        return fail(format!("spacing {} is not positive", traj.min_spacing()));
    }
    Ok(())
}

/// Lists the run records in `dir`, sorted by file name.
pub fn find_runs(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.to_string_lossy().ends_with(".run.json"))
        .collect();
    out.sort();
    Ok(out)
}

pub fn read_run(json: &Path) -> Result<(RunRecord, Trajectory)> {
    let rec: RunRecord = serde_json::from_str(&fs::read_to_string(json)?)?;
    let layout = PartitionLayout::new(rec.hdv_counts.clone())?;
    let csv = json.with_file_name(format!("{}.csv", rec.stem()));
    let traj = read_trajectory_csv(&csv, &layout, rec.dt)?;
    Ok((rec, traj))
}

/// Deterministic per-run summary (no timings).
pub fn write_summary(records: &[RunRecord], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["name", "mode", "seed", "steps", "real_cost", "fuel_ml", "mean_iterations", "max_iterations"])?;
    for r in records {
        w.write_record([
            r.name.clone(),
            r.mode.to_string(),
            r.seed.to_string(),
            r.steps.to_string(),
            r.real_cost.to_string(),
            r.fuel.to_string(),
            r.mean_iterations.to_string(),
            r.max_iterations.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Controller wall times per run.
pub fn write_timing(records: &[RunRecord], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["name", "mode", "seed", "mean_solve_time_s", "max_solve_time_s"])?;
    for r in records {
        w.write_record([
            r.name.clone(),
            r.mode.to_string(),
            r.seed.to_string(),
            r.mean_solve_time.to_string(),
            r.max_solve_time.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_degradation(table: &DegradationTable, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["max_iterations", "delay_steps", "delay_s", "mean_cost", "degradation_percent"])?;
    for r in &table.rows {
        w.write_record([
            r.condition.max_iterations.to_string(),
            r.condition.delay_steps.to_string(),
            r.condition.delay_seconds().to_string(),
            r.mean_cost.to_string(),
            r.degradation_percent.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Verifies every run in `dir` against its trajectory file and rewrites
/// `summary.csv`, `timing.csv` and the plot data.
pub fn report_dir(dir: &Path) -> Result<Vec<RunRecord>> {
    let mut records = Vec::new();
    for json in find_runs(dir)? {
        let (rec, traj) = read_run(&json)?;
        verify_run(&rec, &traj)?;
        write_plot_data(&traj, dir, &rec.stem())?;
        records.push(rec);
    }
    write_summary(&records, &dir.join("summary.csv"))?;
    write_timing(&records, &dir.join("timing.csv"))?;
    Ok(records)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::DT;

    fn toy() -> (Trajectory, PartitionLayout) {
        let layout = PartitionLayout::new(vec![1]).unwrap();
        let traj = Trajectory {
            dt: DT,
            vel: vec![vec![15.0, 14.5, 15.25], vec![15.1, 14.6, 15.0]],
            acc: vec![vec![0.0, 0.3, -0.1], vec![0.1, 1.0 / 3.0, 0.0]],
            spacing: vec![vec![20.0, 19.0], vec![20.5, 19.1]],
            u: vec![vec![0.3], vec![1.0 / 3.0]],
            y: vec![vec![-0.5, 0.25, 0.0], vec![-0.4, 0.0, 0.5]],
        };
        (traj, layout)
    }

    #[test]
    fn trajectory_csv_round_trip_is_exact() {
        let (traj, layout) = toy();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.csv");
        write_trajectory_csv(&traj, &layout, &p).unwrap();
        assert_eq!(read_trajectory_csv(&p, &layout, DT).unwrap(), traj);
    }

    #[test]
    fn verify_detects_tampering() {
        let (traj, layout) = toy();
        let w = Weights::default();
        let mut rec = RunRecord {
            name: "toy".into(),
            mode: Mode::None,
            seed: 0,
            hdv_counts: layout.hdv_counts().to_vec(),
            weights: w,
            dt: DT,
            steps: 2,
            real_cost: real_cost(&traj, &layout, &w),
            fuel: total_fuel(&traj),
            mean_iterations: 0.0,
            max_iterations: 0,
            mean_solve_time: 0.0,
            max_solve_time: 0.0,
        };
        verify_run(&rec, &traj).unwrap();
        rec.real_cost *= 1.0 + 1e-6;
        assert!(verify_run(&rec, &traj).is_err());
    }

    #[test]
    fn heatmap_has_a_block_per_step() {
        let (traj, _) = toy();
        let dir = tempfile::tempdir().unwrap();
        write_plot_data(&traj, dir.path(), "x").unwrap();
        let s = fs::read_to_string(dir.path().join("x_heatmap.dat")).unwrap();
        assert_eq!(s.matches("\n\n").count(), 2);
        let p = fs::read_to_string(dir.path().join("x_profile.dat")).unwrap();
        assert_eq!(p.lines().count(), 3);
    }
}
