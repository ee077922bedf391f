//! Distributed solution of the cooperative problem by a tailored ADMM.
//!
//! Every subsystem owns a [`Worker`] holding its coefficient vector `g_i`,
//! the auxiliary copy `z_i`, the projected spacing and input sequences
//! `s_i`, `u_i` and the duals `mu_i, eta_i, phi_i, theta_i`. One iteration:
//!
//! 1. worker `i` sends `eta_bar_i = eta_i - rho K_i Y_{i,f} z_i` forward;
//! 2. all workers update `g_i` by one pre-factorized KKT solve;
//! 3. worker `i` sends `eps_bar_i = E_{i,f} g_i` backward;
//! 4. all workers update `z_i` (closed form), `s_i` and `u_i` (clamps);
//! 5. all workers update their duals.
//!
//! Rounds are synchronous. Iterates are carried over between control steps.

mod bus;
mod residual;

use std::time::Instant;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use bus::{Message, MessageBus, MessageKind};
pub use residual::{residuals, Residuals};

use crate::central::PastWindow;
use crate::coop::{CoopProblem, SubsystemProblem};
use crate::error::{dim_err, Error, Result};
use crate::qp::{factor_kkt_auto, project_interval};

/// Iteration budget, message delay and stopping tolerances.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CommPolicy {
    pub max_iterations: usize,
    /// Message delay in control steps.
    pub delay_steps: usize,
    pub delta_abs: f64,
    pub delta_rel: f64,
}

impl Default for CommPolicy {
    fn default() -> Self {
        Self { max_iterations: 300, delay_steps: 0, delta_abs: 0.1, delta_rel: 1e-3 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdmmSettings {
    pub rho: f64,
    pub policy: CommPolicy,
}

impl Default for AdmmSettings {
    fn default() -> Self {
        Self { rho: 1.0, policy: CommPolicy::default() }
    }
}

impl AdmmSettings {
    pub fn validate(&self) -> Result<()> {
        if !(self.rho > 0.0) || self.policy.max_iterations == 0 {
            return Err(Error::InvalidParameter("rho > 0 and max_iterations >= 1 required".into()));
        }
        if !(self.policy.delta_abs >= 0.0 && self.policy.delta_rel >= 0.0) {
            return Err(Error::InvalidParameter("tolerances must be nonnegative".into()));
        }
        Ok(())
    }
}

/// Primal and dual iterates of one subsystem.
#[derive(Debug, Clone, PartialEq)]
pub struct WorkerState {
    pub g: DVector<f64>,
    pub z: DVector<f64>,
    pub s: DVector<f64>,
    pub u: DVector<f64>,
    pub mu: DVector<f64>,
    /// Unused (kept at zero) for the last subsystem.
    pub eta: DVector<f64>,
    pub phi: DVector<f64>,
    pub theta: DVector<f64>,
}

impl WorkerState {
    fn zeros(d: usize, horizon: usize) -> Self {
        Self {
            g: DVector::zeros(d),
            z: DVector::zeros(d),
            s: DVector::zeros(horizon),
            u: DVector::zeros(horizon),
            mu: DVector::zeros(d),
            eta: DVector::zeros(horizon),
            phi: DVector::zeros(horizon),
            theta: DVector::zeros(horizon),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub(crate) struct PrevZsu {
    pub z: DVector<f64>,
    pub s: DVector<f64>,
    pub u: DVector<f64>,
}

/// One subsystem's share of the algorithm, with its pre-factorized operators.
#[derive(Debug, Clone)]
pub struct Worker {
    sub: SubsystemProblem,
    last: bool,
    rho: f64,
    /// Blocks of the inverse KKT matrix: `g = -psi_gg q + psi_gb b`.
    psi_gg: DMatrix<f64>,
    psi_gb: DMatrix<f64>,
    /// Cholesky factor of `I + W W'` with `W = K_i Y_{i,f}`; absent for the last subsystem.
    hz: Option<Cholesky<f64, Dyn>>,
    c_g: DVector<f64>,
    b_g: DVector<f64>,
    g_b: DVector<f64>,
    pub state: WorkerState,
    pub(crate) prev: PrevZsu,
    busy: f64,
}

impl Worker {
    /// Pre-factorizes the g- and z-updates for penalty `rho`.
    pub fn new(sub: SubsystemProblem, last: bool, rho: f64) -> Result<Self> {
        let d = sub.g_dim();
        let nh = sub.horizon();
        let mut hg = sub.q_g.clone();
        let mut aug = DMatrix::identity(d, d) + sub.pyf.tr_mul(&sub.pyf) + sub.blocks.uf.tr_mul(&sub.blocks.uf);
        if !sub.is_head() {
            aug += sub.blocks.ef.tr_mul(&sub.blocks.ef);
        }
        hg += aug * (rho / 2.0);
        let factor = factor_kkt_auto(&hg, &sub.a_g)?;
        let p = sub.a_g.nrows();
        let inv = factor.solve_mat(&DMatrix::identity(d + p, d + p))?;
        let psi_gg = inv.view((0, 0), (d, d)).into_owned();
        let psi_gb = inv.view((0, d), (d, p)).into_owned();
        let hz = if last {
            None
        } else {
            let w = &sub.kyf;
            let m = DMatrix::identity(nh, nh) + w * w.transpose();
            Some(Cholesky::new(m).ok_or_else(|| Error::Factorization("I + W W' not positive definite".into()))?)
        };
        let state = WorkerState::zeros(d, nh);
        let prev = PrevZsu { z: state.z.clone(), s: state.s.clone(), u: state.u.clone() };
        Ok(Self {
            c_g: DVector::zeros(d),
            b_g: DVector::zeros(p),
            g_b: DVector::zeros(d),
            sub,
            last,
            rho,
            psi_gg,
            psi_gb,
            hz,
            state,
            prev,
            busy: 0.0,
        })
    }

    pub fn problem(&self) -> &SubsystemProblem {
        &self.sub
    }

    pub fn index(&self) -> usize {
        self.sub.index
    }

    pub fn g_dim(&self) -> usize {
        self.sub.g_dim()
    }

    pub fn horizon(&self) -> usize {
        self.sub.horizon()
    }

    pub fn b_g(&self) -> &DVector<f64> {
        &self.b_g
    }

    /// Loads the current past window (changes `c_g` and `b_g` only).
    pub fn set_past(&mut self, past: &PastWindow) -> Result<()> {
        self.b_g = self.sub.b_g(past)?;
        self.c_g = self.sub.linear_term(past).0;
        self.g_b = &self.psi_gb * &self.b_g;
        Ok(())
    }

    pub fn eta_bar(&self) -> DVector<f64> {
        &self.state.eta - &self.sub.kyf * &self.state.z * self.rho
    }

    pub fn eps_bar(&self) -> DVector<f64> {
        &self.sub.blocks.ef * &self.state.g
    }

    /// Linear term of the g-subproblem.
    pub fn q_g(&self, eta_bar_in: &DVector<f64>) -> DVector<f64> {
        let st = &self.state;
        let rho = self.rho;
        let mut v = &st.mu - &st.z * rho;
        v -= self.sub.pyf.tr_mul(&(&st.phi + &st.s * rho));
        v -= self.sub.blocks.uf.tr_mul(&(&st.theta + &st.u * rho));
        if !self.sub.is_head() {
            v += self.sub.blocks.ef.tr_mul(eta_bar_in);
        }
        &self.c_g + v * 0.5
    }

    /// Step 1: `g <- argmin` of the augmented Lagrangian over `A_g g = b_g`.
    pub fn update_g(&mut self, eta_bar_in: &DVector<f64>) {
        let t = Instant::now();
        let q = self.q_g(eta_bar_in);
        self.state.g = &self.g_b - &self.psi_gg * q;
        self.busy += t.elapsed().as_secs_f64();
    }

    /// Step 2: closed-form `z` and clamped `s`, `u`.
    pub fn update_zsu(&mut self, eps_bar_in: &DVector<f64>) {
        let t = Instant::now();
        let rho = self.rho;
        let st = &mut self.state;
        self.prev = PrevZsu { z: st.z.clone(), s: st.s.clone(), u: st.u.clone() };
        st.z = match &self.hz {
            None => &st.g + &st.mu / rho,
            Some(chol) => {
                let w = &self.sub.kyf;
                let r = &st.mu + &st.g * rho + w.tr_mul(&(&st.eta + eps_bar_in * rho));
                let corr = w.tr_mul(&chol.solve(&(w * &r)));
                (r - corr) / rho
            }
        };
        let b = &self.sub.cfg.bounds;
        let pyg = &self.sub.pyf * &st.g;
        st.s = project_interval(&(pyg - &st.phi / rho), b.s_err_min, b.s_err_max);
        let ug = &self.sub.blocks.uf * &st.g;
        st.u = project_interval(&(ug - &st.theta / rho), b.a_min, b.a_max);
        self.busy += t.elapsed().as_secs_f64();
    }

    /// Step 3: dual ascent.
    pub fn update_duals(&mut self, eps_bar_in: &DVector<f64>) {
        let t = Instant::now();
        let rho = self.rho;
        let st = &mut self.state;
        st.mu += (&st.g - &st.z) * rho;
        if !self.last {
            st.eta += (eps_bar_in - &self.sub.kyf * &st.z) * rho;
        }
        st.phi += (&st.s - &self.sub.pyf * &st.g) * rho;
        st.theta += (&st.u - &self.sub.blocks.uf * &st.g) * rho;
        self.busy += t.elapsed().as_secs_f64();
    }

    /// Seconds spent in updates since the last call.
    fn take_busy(&mut self) -> f64 {
        std::mem::take(&mut self.busy)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopReason {
    Converged,
    IterationCap,
}

#[derive(Debug, Clone)]
pub struct AdmmStep {
    /// First sample of each `u_i`.
    pub u_apply: DVector<f64>,
    pub iterations: usize,
    pub stop: StopReason,
    pub residuals: Residuals,
    /// `sum_i f_i(g_i)` at the final iterate.
    pub objective: f64,
    /// Seconds of update work per worker.
    pub worker_time: Vec<f64>,
    pub messages: usize,
}

/// Receding-horizon distributed controller.
#[derive(Debug, Clone)]
pub struct DistributedController {
    workers: Vec<Worker>,
    bus: MessageBus,
    settings: AdmmSettings,
    pasts: Vec<PastWindow>,
}

impl DistributedController {
    pub fn new(problem: CoopProblem, settings: AdmmSettings) -> Result<Self> {
        settings.validate()?;
        let n = problem.n();
        let horizon = problem.horizon();
        let workers = problem
            .subs
            .into_par_iter()
            .enumerate()
            .map(|(i, s)| Worker::new(s, i + 1 == n, settings.rho))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { workers, bus: MessageBus::new(n, horizon, settings.policy.delay_steps), settings, pasts: Vec::new() })
    }

    pub fn workers(&self) -> &[Worker] {
        &self.workers
    }

    pub fn workers_mut(&mut self) -> &mut [Worker] {
        &mut self.workers
    }

    pub fn settings(&self) -> &AdmmSettings {
        &self.settings
    }

    pub fn bus(&self) -> &MessageBus {
        &self.bus
    }

    /// Loads the past windows for a new control step.
    pub fn set_pasts(&mut self, pasts: &[PastWindow]) -> Result<()> {
        if pasts.len() != self.workers.len() {
            return dim_err(format!("{} past windows for {} subsystems", pasts.len(), self.workers.len()));
        }
        for (w, p) in self.workers.iter_mut().zip(pasts) {
            w.set_past(p)?;
        }
        self.pasts = pasts.to_vec();
        Ok(())
    }

    /// One synchronous round. Returns the residuals after it.
    pub fn iterate(&mut self, k: usize) -> Result<Residuals> {
        let n = self.workers.len();
        for i in 0..n.saturating_sub(1) {
            let payload = self.workers[i].eta_bar();
            self.bus.post(Message { kind: MessageKind::EtaBar, sender: i, iteration: k, payload })?;
        }
        let eta_in: Vec<DVector<f64>> = (0..n).map(|i| self.bus.eta_bar_for(i)).collect();
        self.workers.par_iter_mut().zip(eta_in.par_iter()).for_each(|(w, e)| w.update_g(e));

        for i in 1..n {
            let payload = self.workers[i].eps_bar();
            self.bus.post(Message { kind: MessageKind::EpsBar, sender: i, iteration: k, payload })?;
        }
        let eps_in: Vec<DVector<f64>> = (0..n).map(|i| self.bus.eps_bar_for(i)).collect();
        self.workers.par_iter_mut().zip(eps_in.par_iter()).for_each(|(w, e)| {
            w.update_zsu(e);
            w.update_duals(e);
        });
        let p = &self.settings.policy;
        Ok(residuals(&self.workers, &eps_in, self.settings.rho, p.delta_abs, p.delta_rel))
    }

    /// Runs iterations until the stopping rule or the cap, then reports the
    /// first input sample of every subsystem.
    pub fn step(&mut self, pasts: &[PastWindow]) -> Result<AdmmStep> {
        self.set_pasts(pasts)?;
        let cap = self.settings.policy.max_iterations;
        let mut res = Residuals::default();
        let mut stop = StopReason::IterationCap;
        let mut iterations = cap;
        for k in 1..=cap {
            res = self.iterate(k)?;
            if res.converged() {
                stop = StopReason::Converged;
                iterations = k;
                break;
            }
        }
        let messages = self.bus.messages_this_step();
        self.bus.end_step();
        let u_apply = DVector::from_iterator(self.workers.len(), self.workers.iter().map(|w| w.state.u[0]));
        let objective = self.objective();
        let worker_time = self.workers.iter_mut().map(Worker::take_busy).collect();
        Ok(AdmmStep { u_apply, iterations, stop, residuals: res, objective, worker_time, messages })
    }

    /// `sum_i f_i(g_i)` at the current iterate and past windows.
    pub fn objective(&self) -> f64 {
        self.workers
            .iter()
            .zip(&self.pasts)
            .map(|(w, p)| w.sub.objective(&w.state.g, p))
            .sum()
    }

    /// Stacked `g` of all workers.
    pub fn stacked_g(&self) -> DVector<f64> {
        let parts: Vec<&DVector<f64>> = self.workers.iter().map(|w| &w.state.g).collect();
        crate::traj::vstack_vec(&parts)
    }

    /// Predicted input sequences `u_i`.
    pub fn u_sequences(&self) -> Vec<DVector<f64>> {
        self.workers.iter().map(|w| w.state.u.clone()).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::central::{ControllerConfig, Weights};
    use crate::coop::build_cooperative;
    use crate::layout::PartitionLayout;
    use crate::qp::EqQp;
    use crate::sim::{linearized_chain, HdvParams, DT};
    use crate::traj::{partition_centralized_log, split_past_future, TrajectoryLog};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn small_problem(seed: u64) -> (CoopProblem, Vec<PastWindow>) {
        let layout = PartitionLayout::new(vec![1, 1]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params: Vec<HdvParams> = (0..2).map(|_| HdvParams::draw(&mut rng)).collect();
        let sys = linearized_chain(&layout, &params, 15.0, DT).unwrap();
        let t = 80;
        let u = DMatrix::from_fn(2, t, |_, _| rng.gen_range(-1.0..1.0));
        let e = DMatrix::from_fn(1, t, |_, _| rng.gen_range(-1.0..1.0));
        let (_, y) = sys.rollout(&DVector::zeros(sys.state_dim()), &u, &e);
        let log = TrajectoryLog::new(u, e.row(0).transpose(), y, DT).unwrap();
        let logs = partition_centralized_log(&log, &layout).unwrap();
        let blocks = logs.iter().map(|l| split_past_future(l, 5, 5).unwrap()).collect();
        let cfg = ControllerConfig::regularized(Weights::default(), 2.0, 1e2);
        let prob = build_cooperative(&layout, blocks, &cfg).unwrap();
        let pasts = logs
            .iter()
            .map(|l| {
                let (u, e, y) = l.window(40, 5).unwrap();
                PastWindow { u_ini: u, eps_ini: e, y_ini: y }
            })
            .collect();
        (prob, pasts)
    }

    fn random_duals(ctl: &mut DistributedController, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for w in ctl.workers_mut() {
            let st = &mut w.state;
            for v in [&mut st.z, &mut st.s, &mut st.u, &mut st.mu, &mut st.eta, &mut st.phi, &mut st.theta] {
                v.iter_mut().for_each(|x| *x = rng.gen_range(-1.0..1.0));
            }
        }
    }

    #[test]
    fn g_update_matches_equality_qp_oracle() {
        let (prob, pasts) = small_problem(1);
        let rho = 1.3;
        let mut ctl = DistributedController::new(prob, AdmmSettings { rho, ..Default::default() }).unwrap();
        ctl.set_pasts(&pasts).unwrap();
        random_duals(&mut ctl, 2);
        let eta_in = DVector::from_fn(5, |i, _| 0.1 * i as f64);
        let w = &mut ctl.workers_mut()[1];
        // Augmented Lagrangian in g written out term by term.
        let sub = w.problem().clone();
        let st = w.state.clone();
        let d = sub.g_dim();
        let mut h = &sub.q_g * 2.0;
        h += DMatrix::<f64>::identity(d, d) * rho;
        h += sub.pyf.tr_mul(&sub.pyf) * rho + sub.blocks.uf.tr_mul(&sub.blocks.uf) * rho;
        h += sub.blocks.ef.tr_mul(&sub.blocks.ef) * rho;
        let (c, _) = sub.linear_term(&pasts[1]);
        let mut q = c * 2.0 + &st.mu - &st.z * rho;
        q -= sub.pyf.tr_mul(&st.phi) + sub.pyf.tr_mul(&st.s) * rho;
        q -= sub.blocks.uf.tr_mul(&st.theta) + sub.blocks.uf.tr_mul(&st.u) * rho;
        q += sub.blocks.ef.tr_mul(&eta_in);
        let oracle = EqQp::new(h, q, sub.a_g.clone(), w.b_g().clone()).unwrap().solve().unwrap().0;
        w.update_g(&eta_in);
        assert!((&w.state.g - &oracle).amax() <= 1e-8 * (1.0 + oracle.amax()));
        let eq = (&sub.a_g * &w.state.g - w.b_g()).norm();
        assert!(eq <= 1e-8 * (1.0 + w.b_g().norm()), "equality residual {eq:e}");
    }

    #[test]
    fn last_z_update_is_shifted_copy() {
        let (prob, pasts) = small_problem(3);
        let mut ctl = DistributedController::new(prob, AdmmSettings::default()).unwrap();
        ctl.set_pasts(&pasts).unwrap();
        random_duals(&mut ctl, 4);
        let w = &mut ctl.workers_mut()[1];
        w.update_g(&DVector::zeros(5));
        w.update_zsu(&DVector::zeros(5));
        let expected = &w.state.g + &w.state.mu;
        assert!((&w.state.z - expected).amax() < 1e-14);
    }

    #[test]
    fn z_update_solves_its_normal_equations() {
        let (prob, pasts) = small_problem(5);
        let rho = 0.7;
        let mut ctl = DistributedController::new(prob, AdmmSettings { rho, ..Default::default() }).unwrap();
        ctl.set_pasts(&pasts).unwrap();
        random_duals(&mut ctl, 6);
        let eps = DVector::from_fn(5, |i, _| (i as f64).sin());
        let w = &mut ctl.workers_mut()[0];
        w.update_g(&DVector::zeros(5));
        w.update_zsu(&eps);
        let st = &w.state;
        let wm = &w.problem().kyf;
        let d = st.z.len();
        let lhs = (DMatrix::<f64>::identity(d, d) + wm.tr_mul(wm)) * rho * &st.z;
        let rhs = &st.mu + &st.g * rho + wm.tr_mul(&(&st.eta + &eps * rho));
        assert!((lhs - rhs).amax() < 1e-9);
    }

    #[test]
    fn consensus_leaves_duals_unchanged() {
        let (prob, pasts) = small_problem(7);
        let mut ctl = DistributedController::new(prob, AdmmSettings::default()).unwrap();
        ctl.set_pasts(&pasts).unwrap();
        let w = &mut ctl.workers_mut()[0];
        w.state.g = DVector::from_fn(w.g_dim(), |i, _| 1e-3 * i as f64);
        w.state.z = w.state.g.clone();
        w.state.s = &w.problem().pyf * &w.state.g;
        w.state.u = &w.problem().blocks.uf * &w.state.g;
        let eps = &w.problem().kyf * &w.state.z;
        let before = w.state.clone();
        w.update_duals(&eps);
        assert_eq!(w.state.mu, before.mu);
        assert!((&w.state.eta - &before.eta).amax() < 1e-15);
        assert!((&w.state.phi - &before.phi).amax() < 1e-15);
        assert!((&w.state.theta - &before.theta).amax() < 1e-15);
    }

    #[test]
    fn clamps_inputs_above_the_limit() {
        let (prob, pasts) = small_problem(8);
        let mut ctl = DistributedController::new(prob, AdmmSettings::default()).unwrap();
        ctl.set_pasts(&pasts).unwrap();
        let w = &mut ctl.workers_mut()[0];
        w.state.theta = DVector::from_element(5, -1e3);
        w.update_zsu(&DVector::zeros(5));
        assert!(w.state.u.iter().all(|&v| v == 2.0));
    }

    #[test]
    fn message_budget_and_iteration_cap() {
        let (prob, pasts) = small_problem(9);
        let policy = CommPolicy { max_iterations: 1, ..Default::default() };
        let mut ctl = DistributedController::new(prob, AdmmSettings { rho: 1.0, policy }).unwrap();
        let out = ctl.step(&pasts).unwrap();
        assert_eq!(out.iterations, 1);
        assert_eq!(out.stop, StopReason::IterationCap);
        assert_eq!(out.messages, 2);
        assert_eq!(out.u_apply[0], ctl.workers()[0].state.u[0]);
    }

    #[test]
    fn converges_to_the_stacked_qp_optimum() {
        let (prob, pasts) = small_problem(12);
        let qp = prob.stacked_qp(&pasts).unwrap();
        let oracle = crate::qp::solve_active_set(&qp, Default::default()).unwrap();
        let best = prob.objective(&oracle.x, &pasts);
        let policy = CommPolicy { max_iterations: 20000, delta_abs: 1e-7, delta_rel: 1e-9, ..Default::default() };
        let mut ctl = DistributedController::new(prob.clone(), AdmmSettings { rho: 300.0, policy }).unwrap();
        let out = ctl.step(&pasts).unwrap();
        assert_eq!(out.stop, StopReason::Converged, "{} iterations", out.iterations);
        assert!((out.objective - best).abs() <= 1e-4 * (1.0 + best.abs()), "{} vs {best}", out.objective);
        assert!(prob.coupling_violation(&ctl.stacked_g()) < 1e-5);
    }

    #[test]
    fn determinism() {
        let run = || {
            let (prob, pasts) = small_problem(10);
            let mut ctl = DistributedController::new(prob, AdmmSettings::default()).unwrap();
            let a = ctl.step(&pasts).unwrap();
            (a.u_apply, a.iterations, ctl.stacked_g())
        };
        assert_eq!(run(), run());
    }
}
