//! Offline data collection on the nonlinear plant.

use std::fs;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::ScenarioConfig;
use crate::error::{dim_err, Error, Result};
use crate::layout::PartitionLayout;
use crate::sim::{CavDrive, HdvParams, Plant, DT};
use crate::traj::{
    is_persistently_exciting, partition_centralized_log, read_log_csv, required_pe_order, vstack, write_log_csv,
    DataMode, TrajectoryLog, DEFAULT_RANK_TOL,
};

/// RNG for one purpose of one seed.
pub(crate) fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

const PARAM_STREAM: u64 = 0;
const DATA_NOISE_STREAM: u64 = 1;
const EXCITATION_STREAM: u64 = 2;
pub(crate) const RUN_NOISE_STREAM: u64 = 3;

/// Frozen HDV parameters of a scenario, one per HDV in chain order.
pub fn draw_hdv_params(cfg: &ScenarioConfig) -> Result<Vec<HdvParams>> {
    let layout = cfg.layout()?;
    let mut rng = stream_rng(cfg.seeds.hdv_params, PARAM_STREAM);
    Ok((0..layout.m()).map(|_| HdvParams::draw(&mut rng)).collect())
}

#[derive(Debug, Clone)]
pub struct CollectedData {
    pub layout: PartitionLayout,
    pub hdv_params: Vec<HdvParams>,
    /// Centralized log of length `T`, when configured.
    pub central: Option<TrajectoryLog>,
    /// One log of length `T_i` per subsystem.
    pub local: Vec<TrajectoryLog>,
    /// Data seed that produced excitation passing the rank checks.
    pub data_seed: u64,
    pub attempts: usize,
}

/// Simulates `samples` steps of excitation from equilibrium and returns the
/// centralized log.
pub fn simulate_excitation(
    cfg: &ScenarioConfig,
    layout: &PartitionLayout,
    params: &[HdvParams],
    seed: u64,
    samples: usize,
) -> Result<TrajectoryLog> {
    let mut plant = Plant::new(layout.clone(), params, cfg.equilibrium, DT, stream_rng(seed, DATA_NOISE_STREAM))?;
    let mut exc = stream_rng(seed, EXCITATION_STREAM);
    let c = cfg.collection;
    let eq = cfg.equilibrium;
    let cavs = layout.cav_positions();
    let n = layout.n();
    let mut u = DMatrix::zeros(n, samples);
    let mut eps = DVector::zeros(samples);
    let mut y = DMatrix::zeros(layout.central_y_dim(), samples);
    let dither = |rng: &mut ChaCha8Rng| if c.excitation > 0.0 { rng.gen_range(-c.excitation..=c.excitation) } else { 0.0 };
    for k in 0..samples {
        y.set_column(k, &plant.central_output());
        eps[k] = plant.head_error();
        let st = plant.state();
        let cmd: Vec<f64> = cavs
            .iter()
            .map(|&p| {
                let fb = c.cav_spacing_gain * (st.spacing(p) - eq.s_star_cav) + c.cav_velocity_gain * (st.vel[p - 1] - st.vel[p]);
                (fb + dither(&mut exc)).clamp(cfg.bounds.a_min, cfg.bounds.a_max)
            })
            .collect();
        let head = -c.head_gain * plant.head_error() + dither(&mut exc);
        let acc = plant.step(CavDrive::Input(&cmd), head)?;
        for (i, &p) in cavs.iter().enumerate() {
            u[(i, k)] = acc[p - 1];
        }
    }
    TrajectoryLog::new(u, eps, y, DT)
}

/// Stacked `[u; eps]` of a log.
fn excitation_signal(log: &TrajectoryLog) -> DMatrix<f64> {
    vstack(&[log.u(), log.eps_matrix()])
}

fn truncate(log: &TrajectoryLog, len: usize) -> Result<TrajectoryLog> {
    if len > log.len() {
        return dim_err(format!("cannot take {len} samples of a {}-sample log", log.len()));
    }
    TrajectoryLog::new(
        log.u().columns(0, len).into_owned(),
        log.eps().rows(0, len).into_owned(),
        log.y().columns(0, len).into_owned(),
        log.dt(),
    )
}

/// Rank checks on the collected inputs (the CAV inputs together with the
/// external reference signal).
pub fn check_excitation(
    central: Option<&TrajectoryLog>,
    local: &[TrajectoryLog],
    layout: &PartitionLayout,
    t_ini: usize,
    horizon: usize,
) -> Result<bool> {
    if let Some(log) = central {
        let order = required_pe_order(DataMode::Centralized { n: layout.n(), m: layout.m() }, t_ini, horizon);
        if !is_persistently_exciting(&excitation_signal(log), order, DEFAULT_RANK_TOL)? {
            return Ok(false);
        }
    }
    for (i, log) in local.iter().enumerate() {
        let order = required_pe_order(DataMode::Local { m_i: layout.hdv_count(i) }, t_ini, horizon);
        if !is_persistently_exciting(&excitation_signal(log), order, DEFAULT_RANK_TOL)? {
            return Ok(false);
        }
    }
    Ok(true)
}

/// Collects centralized and per-subsystem data. The local logs are the first
/// `T_i` samples of the same chain run, partitioned. A run that collides or
/// fails the rank checks is repeated with the next seed.
pub fn collect_data(cfg: &ScenarioConfig) -> Result<CollectedData> {
    cfg.validate()?;
    let layout = cfg.layout()?;
    let params = draw_hdv_params(cfg)?;
    let samples = cfg.data.centralized.unwrap_or(0).max(cfg.data.local);
    let attempts = cfg.collection.max_retries + 1;
    for attempt in 0..attempts {
        let seed = cfg.seeds.data.wrapping_add(attempt as u64);
        let full = match simulate_excitation(cfg, &layout, &params, seed, samples) {
            Ok(log) => log,
            Err(Error::Collision { .. }) => continue,
            Err(e) => return Err(e),
        };
        let central = cfg.data.centralized.map(|t| truncate(&full, t)).transpose()?;
        let local = partition_centralized_log(&truncate(&full, cfg.data.local)?, &layout)?;
        if check_excitation(central.as_ref(), &local, &layout, cfg.horizons.t_ini, cfg.horizons.horizon)? {
            return Ok(CollectedData {
                layout,
                hdv_params: params,
                central,
                local,
                data_seed: seed,
                attempts: attempt + 1,
            });
        }
    }
    Err(Error::NotPersistentlyExciting { attempts })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct DataManifest {
    hdv_counts: Vec<usize>,
    hdv_params: Vec<HdvParams>,
    data_seed: u64,
    attempts: usize,
    central: bool,
}

/// Writes `central.csv`, `sub_<i>.csv` (1-based) and `data.json` into `dir`.
pub fn write_collected(data: &CollectedData, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let layout = &data.layout;
    if let Some(log) = &data.central {
        write_log_csv(log, &dir.join("central.csv"), &layout.central_y_names(), Some(layout), None)?;
    }
    for (i, log) in data.local.iter().enumerate() {
        let path = dir.join(format!("sub_{}.csv", i + 1));
        write_log_csv(log, &path, &layout.subsystem_y_names(i), Some(layout), Some(i))?;
    }
    let manifest = DataManifest {
        hdv_counts: layout.hdv_counts().to_vec(),
        hdv_params: data.hdv_params.clone(),
        data_seed: data.data_seed,
        attempts: data.attempts,
        central: data.central.is_some(),
    };
    fs::write(dir.join("data.json"), serde_json::to_string_pretty(&manifest)?)?;
    Ok(())
}

pub fn read_collected(dir: &Path) -> Result<CollectedData> {
    let manifest: DataManifest = serde_json::from_str(&fs::read_to_string(dir.join("data.json"))?)?;
    let layout = PartitionLayout::new(manifest.hdv_counts)?;
    let central = if manifest.central { Some(read_log_csv(&dir.join("central.csv"))?.0) } else { None };
    let local = (0..layout.n())
        .map(|i| read_log_csv(&dir.join(format!("sub_{}.csv", i + 1))).map(|r| r.0))
        .collect::<Result<Vec<_>>>()?;
    if manifest.hdv_params.len() != layout.m() {
        return dim_err("HDV parameter count does not match the layout");
    }
    Ok(CollectedData {
        layout,
        hdv_params: manifest.hdv_params,
        central,
        local,
        data_seed: manifest.data_seed,
        attempts: manifest.attempts,
    })
}
