//! Receding-horizon closed-loop runs and their metrics.

use std::time::Instant;

use nalgebra::{DMatrix, DVector};

use super::collect::{stream_rng, CollectedData, RUN_NOISE_STREAM};
use super::config::{Mode, ScenarioConfig};
use crate::admm::DistributedController;
use crate::central::{central_output_weights, CentralController, CentralProblem, PastWindow, Weights};
use crate::coop::build_cooperative;
use crate::error::{Error, Result};
use crate::layout::PartitionLayout;
use crate::sim::{fuel_rate, CavDrive, Plant, DT};
use crate::traj::{partition_centralized_log, split_past_future, TrajectoryLog};

/// Sampled closed-loop signals. Row `k` of every table is step `k`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Trajectory {
    pub dt: f64,
    /// Velocities of all vehicles (head first) at the start of each step.
    pub vel: Vec<Vec<f64>>,
    /// Accelerations applied over each step (head first).
    pub acc: Vec<Vec<f64>>,
    /// Spacing of every follower at the start of each step.
    pub spacing: Vec<Vec<f64>>,
    /// CAV accelerations over each step.
    pub u: Vec<Vec<f64>>,
    /// Centralized output at the start of each step.
    pub y: Vec<Vec<f64>>,
}

impl Trajectory {
    pub fn steps(&self) -> usize {
        self.vel.len()
    }

    /// Peak-to-peak velocity of vehicle `k` (0 is the head).
    pub fn velocity_range(&self, k: usize) -> f64 {
        let (lo, hi) = self.vel.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v[k]), hi.max(v[k])));
        hi - lo
    }

    pub fn min_spacing(&self) -> f64 {
        self.spacing.iter().flatten().copied().fold(f64::INFINITY, f64::min)
    }
}

/// Quadratic output and input penalty summed over all recorded steps.
pub fn real_cost(traj: &Trajectory, layout: &PartitionLayout, weights: &Weights) -> f64 {
    let q = central_output_weights(layout, weights);
    traj.y
        .iter()
        .zip(&traj.u)
        .map(|(y, u)| {
            let yq: f64 = y.iter().zip(q.iter()).map(|(v, w)| w * v * v).sum();
            yq + weights.w_u * u.iter().map(|v| v * v).sum::<f64>()
        })
        .sum()
}

/// Fuel of all followers in mL.
pub fn total_fuel(traj: &Trajectory) -> f64 {
    traj.vel
        .iter()
        .zip(&traj.acc)
        .map(|(v, a)| v.iter().zip(a).skip(1).map(|(&v, &a)| fuel_rate(v, a)).sum::<f64>() * traj.dt)
        .sum()
}

#[derive(Debug, Clone)]
pub struct RunMetrics {
    pub name: String,
    pub mode: Mode,
    pub seed: u64,
    pub layout: PartitionLayout,
    pub weights: Weights,
    pub real_cost: f64,
    pub fuel: f64,
    /// Controller wall time of each controlled step in seconds.
    pub solve_times: Vec<f64>,
    /// Solver iterations of each controlled step.
    pub iterations: Vec<usize>,
    pub trajectory: Trajectory,
}

impl RunMetrics {
    pub fn mean_iterations(&self) -> f64 {
        mean(self.iterations.iter().map(|&k| k as f64))
    }

    pub fn mean_solve_time(&self) -> f64 {
        mean(self.solve_times.iter().copied())
    }

    pub fn max_solve_time(&self) -> f64 {
        self.solve_times.iter().copied().fold(0.0, f64::max)
    }
}

pub(crate) fn mean(it: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = it.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

enum Controller {
    None,
    Central(Box<CentralController>),
    Distributed(Box<DistributedController>),
}

fn build_controller(cfg: &ScenarioConfig, mode: Mode, data: &CollectedData) -> Result<Controller> {
    let (t_ini, horizon) = (cfg.horizons.t_ini, cfg.horizons.horizon);
    Ok(match mode {
        Mode::None => Controller::None,
        Mode::Central => {
            let log = data
                .central
                .as_ref()
                .ok_or_else(|| Error::InvalidParameter("centralized mode needs a centralized log".into()))?;
            let blocks = split_past_future(log, t_ini, horizon)?;
            let problem = CentralProblem::new(blocks, data.layout.clone(), cfg.controller(Mode::Central))?;
Controller::Central(Box::new(CentralController::new(problem)?))
        }
        Mode::Distributed => {
            let blocks = data
                .local
                .iter()
                .map(|l| split_past_future(l, t_ini, horizon))
                .collect::<Result<Vec<_>>>()?;
            let problem = build_cooperative(&data.layout, blocks, &cfg.controller(Mode::Distributed))?;
            Controller::Distributed(Box::new(DistributedController::new(problem, cfg.admm)?))
        }
    })
}

/// A closed-loop run that can be advanced step by step. After a failure the
/// signals recorded so far remain available through [`ClosedLoop::metrics`].
pub struct ClosedLoop {
    name: String,
    mode: Mode,
    seed: u64,
    t_ini: usize,
    steps: usize,
    weights: Weights,
    head: crate::sim::HeadProfile,
    layout: PartitionLayout,
    q_diag: DVector<f64>,
    plant: Plant,
    controller: Controller,
    k: usize,
    real_cost: f64,
    fuel: f64,
    solve_times: Vec<f64>,
    iterations: Vec<usize>,
    traj: Trajectory,
}

impl ClosedLoop {
    pub fn new(cfg: &ScenarioConfig, mode: Mode, data: &CollectedData) -> Result<Self> {
        cfg.validate()?;
        let layout = cfg.layout()?;
        if layout != data.layout {
            return Err(Error::InvalidParameter("collected data belongs to a different layout".into()));
        }
        let controller = build_controller(cfg, mode, data)?;
        let mut plant = Plant::new(
            layout.clone(),
            &data.hdv_params,
            cfg.equilibrium,
            DT,
            stream_rng(cfg.seeds.noise, RUN_NOISE_STREAM),
        )?;
        plant.state_mut().vel[0] = cfg.head.initial_velocity();
        Ok(Self {
            name: cfg.name.clone(),
            mode,
            seed: cfg.seeds.noise,
            t_ini: cfg.horizons.t_ini,
            steps: cfg.steps(),
            weights: cfg.weights,
            head: cfg.head.clone(),
            q_diag: central_output_weights(&layout, &cfg.weights),
            layout,
            plant,
            controller,
            k: 0,
            real_cost: 0.0,
            fuel: 0.0,
            solve_times: Vec::new(),
            iterations: Vec::new(),
            traj: Trajectory { dt: DT, ..Default::default() },
        })
    }

    pub fn is_done(&self) -> bool {
        self.k >= self.steps
    }

    pub fn run(&mut self) -> Result<()> {
        while !self.is_done() {
            self.advance()?;
        }
        Ok(())
    }

    /// Past window of the last `T_ini` recorded samples as a centralized log.
    fn past_log(&self) -> Result<TrajectoryLog> {
        let (t, s) = (self.t_ini, self.k - self.t_ini);
        let n = self.layout.n();
        let p = self.layout.central_y_dim();
        let u = DMatrix::from_fn(n, t, |i, j| self.traj.u[s + j][i]);
        let y = DMatrix::from_fn(p, t, |i, j| self.traj.y[s + j][i]);
        let eps = DVector::from_fn(t, |j, _| self.traj.vel[s + j][0] - self.plant.equilibrium().v_star);
        TrajectoryLog::new(u, eps, y, DT)
    }

    fn control(&mut self) -> Result<Option<DVector<f64>>> {
        if matches!(self.controller, Controller::None) {
            return Ok(None);
        }
        if self.k < self.t_ini {
            return Ok(Some(DVector::zeros(self.layout.n())));
        }
        let log = self.past_log()?;
        let t = self.t_ini;
        let start = Instant::now();
        let (u, iters) = match &mut self.controller {
            Controller::None => unreachable!(),
            Controller::Central(c) => {
                let (u_ini, eps_ini, y_ini) = log.window(0, t)?;
                let step = c.step(&PastWindow { u_ini, eps_ini, y_ini })?;
                (step.u_apply, step.iterations)
            }
            Controller::Distributed(d) => {
                let pasts = partition_centralized_log(&log, &self.layout)?
                    .iter()
                    .map(|l| l.window(0, t).map(|(u_ini, eps_ini, y_ini)| PastWindow { u_ini, eps_ini, y_ini }))
                    .collect::<Result<Vec<_>>>()?;
                let step = d.step(&pasts)?;
                (step.u_apply, step.iterations)
            }
        };
        self.solve_times.push(start.elapsed().as_secs_f64());
        self.iterations.push(iters);
        Ok(Some(u))
    }

    /// Measures, computes the CAV inputs and advances the plant by one step.
    pub fn advance(&mut self) -> Result<()> {
        let y = self.plant.central_output();
        let st = self.plant.state().clone();
        let cmd = self.control()?;
        let head_acc = self.head.accel(self.k, DT);
        let drive = match &cmd {
            Some(u) => CavDrive::Input(u.as_slice()),
            None => CavDrive::Human,
        };
        let acc = self.plant.step(drive, head_acc)?;
        let u: Vec<f64> = self.layout.cav_positions().iter().map(|&p| acc[p - 1]).collect();

        let yq: f64 = y.iter().zip(self.q_diag.iter()).map(|(v, w)| w * v * v).sum();
        self.real_cost += yq + self.weights.w_u * u.iter().map(|v| v * v).sum::<f64>();
        self.fuel += st.vel.iter().skip(1).zip(&acc).map(|(&v, &a)| fuel_rate(v, a)).sum::<f64>() * DT;

        let mut all_acc = Vec::with_capacity(acc.len() + 1);
        all_acc.push(head_acc);
        all_acc.extend_from_slice(&acc);
        self.traj.spacing.push((1..st.len()).map(|k| st.spacing(k)).collect());
        self.traj.vel.push(st.vel);
        self.traj.acc.push(all_acc);
        self.traj.u.push(u);
        self.traj.y.push(y.as_slice().to_vec());
        self.k += 1;
        Ok(())
    }

    pub fn metrics(&self) -> RunMetrics {
        RunMetrics {
            name: self.name.clone(),
            mode: self.mode,
            seed: self.seed,
            layout: self.layout.clone(),
            weights: self.weights,
            real_cost: self.real_cost,
            fuel: self.fuel,
            solve_times: self.solve_times.clone(),
            iterations: self.iterations.clone(),
            trajectory: self.traj.clone(),
        }
    }
}

/// Runs the configured scenario under one controller.
pub fn run_closed_loop(cfg: &ScenarioConfig, mode: Mode, data: &CollectedData) -> Result<RunMetrics> {
    let mut run = ClosedLoop::new(cfg, mode, data)?;
    run.run()?;
    Ok(run.metrics())
}
