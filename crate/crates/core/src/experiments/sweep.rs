//! Multi-seed comparisons and the imperfect-communication sweep.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::collect::collect_data;
use super::config::{Mode, ScenarioConfig};
use super::run::{mean, run_closed_loop, RunMetrics};
use crate::error::Result;

/// Runs every mode on every seed. Data is collected once per seed and shared
/// by the modes. Results are ordered by seed, then by mode.
pub fn compare(cfg: &ScenarioConfig, seeds: &[u64], modes: &[Mode]) -> Result<Vec<RunMetrics>> {
    let per_seed = seeds
        .par_iter()
        .map(|&seed| {
            let cfg = cfg.clone().with_seed(seed);
            let data = collect_data(&cfg)?;
            modes.iter().map(|&m| run_closed_loop(&cfg, m, &data)).collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(per_seed.into_iter().flatten().collect())
}

/// Mean real cost of each mode over a set of runs.
pub fn mean_costs(runs: &[RunMetrics], modes: &[Mode]) -> Vec<(Mode, f64)> {
    modes
        .iter()
        .map(|&m| (m, mean(runs.iter().filter(|r| r.mode == m).map(|r| r.real_cost))))
        .collect()
}

/// One communication condition of the distributed controller.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Condition {
    pub max_iterations: usize,
    pub delay_steps: usize,
}

impl Condition {
    pub fn delay_seconds(&self) -> f64 {
        self.delay_steps as f64 * crate::sim::DT
    }
}

/// Iteration caps {none, 2, 1} crossed with delays {0, 0.2 s}. `uncapped`
/// stands for "no limit".
pub fn standard_conditions(uncapped: usize) -> Vec<Condition> {
    [0, 4]
        .into_iter()
        .flat_map(|d| [uncapped, 2, 1].map(|k| Condition { max_iterations: k, delay_steps: d }))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DegradationRow {
    pub condition: Condition,
    pub mean_cost: f64,
    /// Percent increase of the mean cost over the ideal run.
    pub degradation_percent: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DegradationTable {
    pub seeds: Vec<u64>,
    pub ideal_cost: f64,
    pub rows: Vec<DegradationRow>,
}

impl DegradationTable {
    pub fn row(&self, c: Condition) -> Option<&DegradationRow> {
        self.rows.iter().find(|r| r.condition == c)
    }
}

/// Mean real cost of the distributed controller under each condition,
/// relative to the configured (ideal) policy with no delay.
pub fn sweep_imperfect(cfg: &ScenarioConfig, conditions: &[Condition], seeds: &[u64]) -> Result<DegradationTable> {
    let ideal = Condition { max_iterations: cfg.admm.policy.max_iterations, delay_steps: 0 };
    let per_seed = seeds
        .par_iter()
        .map(|&seed| {
            let base = cfg.clone().with_seed(seed);
            let data = collect_data(&base)?;
            std::iter::once(&ideal)
                .chain(conditions)
                .map(|c| {
                    let mut run = base.clone();
                    run.admm.policy.max_iterations = c.max_iterations;
                    run.admm.policy.delay_steps = c.delay_steps;
                    run_closed_loop(&run, Mode::Distributed, &data).map(|m| m.real_cost)
                })
                .collect::<Result<Vec<f64>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    let col_mean = |j: usize| mean(per_seed.iter().map(|costs| costs[j]));
    let ideal_cost = col_mean(0);
    let rows = conditions
        .iter()
        .enumerate()
        .map(|(j, &c)| {
            let mean_cost = col_mean(j + 1);
            DegradationRow { condition: c, mean_cost, degradation_percent: 100.0 * (mean_cost - ideal_cost) / ideal_cost }
        })
        .collect();
    Ok(DegradationTable { seeds: seeds.to_vec(), ideal_cost, rows })
}
