//! Scenario configuration, data collection, closed-loop runs, sweeps and
//! report files.

mod collect;
mod config;
mod report;
mod run;
mod sweep;

pub use collect::{check_excitation, collect_data, draw_hdv_params, read_collected, simulate_excitation, write_collected, CollectedData};
pub use config::{
    brake_profile, Collection, DataLengths, Horizons, LayoutSpec, Mode, Penetration, Regularization, ScenarioConfig, Seeds,
};
pub use report::{
    find_runs, read_run, read_trajectory_csv, report_dir, run_stem, verify_run, write_degradation, write_plot_data,
    write_run, write_summary, write_timing, write_trajectory_csv, RunRecord, RECOMPUTE_TOL,
};
pub use run::{real_cost, run_closed_loop, total_fuel, ClosedLoop, RunMetrics, Trajectory};
pub use sweep::{compare, mean_costs, standard_conditions, sweep_imperfect, Condition, DegradationRow, DegradationTable};
