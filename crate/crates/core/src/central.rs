//! Centralized DeeP-LCC: one QP in the Hankel coefficient vector `g` for the
//! whole mixed platoon.
//!
//! The regularized cost is
//!
//! ```text
//! V(U_f g, Y_f g) + lambda_g |g|^2 + lambda_y |Y_p g - y_ini|^2
//! ```
//!
//! subject to `U_p g = u_ini`, `E_p g = eps_ini`, `E_f g = eps_hat` and
//! bounds on `U_f g` and on the CAV spacing rows of `Y_f g`. The slack on the
//! past outputs is substituted out, so `g` is the only decision variable.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{dim_err, Error, Result};
use crate::layout::PartitionLayout;
use crate::qp::{ActiveSetSettings, ActiveSetSolver, BoxQp, BoxQpSolver, EqQp, QpSettings, QpSolution, QpStatus};
use crate::sim::{A_MAX, A_MIN};
use crate::traj::{min_data_length, vstack, DataMode, HankelBlocks};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Weights {
    pub w_v: f64,
    pub w_s: f64,
    pub w_u: f64,
}

impl Default for Weights {
    fn default() -> Self {
        Self { w_v: 1.0, w_s: 0.5, w_u: 0.1 }
    }
}

/// Input and spacing-error limits.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bounds {
    pub a_min: f64,
    pub a_max: f64,
    pub s_err_min: f64,
    pub s_err_max: f64,
}

impl Default for Bounds {
    fn default() -> Self {
        // Spacing limits 5 m and 40 m around s* = 20 m.
        Self { a_min: A_MIN, a_max: A_MAX, s_err_min: -15.0, s_err_max: 20.0 }
    }
}

/// How the past-trajectory constraint is treated.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Formulation {
    /// Exact `Y_p g = y_ini`, no regularization (noise-free data).
    Linear,
    Regularized { lambda_g: f64, lambda_y: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ControllerConfig {
    pub weights: Weights,
    pub formulation: Formulation,
    pub bounds: Bounds,
}

impl ControllerConfig {
    pub fn regularized(weights: Weights, lambda_g: f64, lambda_y: f64) -> Self {
        Self { weights, formulation: Formulation::Regularized { lambda_g, lambda_y }, bounds: Bounds::default() }
    }

    pub fn validate(&self) -> Result<()> {
        let w = &self.weights;
        if !(w.w_v >= 0.0 && w.w_s >= 0.0 && w.w_u > 0.0) {
            return Err(Error::InvalidParameter("weights must be nonnegative with w_u > 0".into()));
        }
        if let Formulation::Regularized { lambda_g, lambda_y } = self.formulation {
            if !(lambda_g > 0.0 && lambda_y > 0.0) {
                return Err(Error::InvalidParameter("lambda_g and lambda_y must be positive".into()));
            }
        }
        let b = &self.bounds;
        if !(b.a_min < b.a_max && b.s_err_min < b.s_err_max) {
            return Err(Error::InvalidParameter("empty input or spacing bounds".into()));
        }
        Ok(())
    }
}

/// The last `T_ini` samples, flattened sample-major.
#[derive(Debug, Clone, PartialEq)]
pub struct PastWindow {
    pub u_ini: DVector<f64>,
    pub eps_ini: DVector<f64>,
    pub y_ini: DVector<f64>,
}

impl PastWindow {
    pub fn zeros(u_dim: usize, y_dim: usize, t_ini: usize) -> Self {
        Self {
            u_ini: DVector::zeros(u_dim * t_ini),
            eps_ini: DVector::zeros(t_ini),
            y_ini: DVector::zeros(y_dim * t_ini),
        }
    }

    fn check(&self, blocks: &HankelBlocks) -> Result<()> {
        if self.u_ini.len() != blocks.up.nrows()
            || self.eps_ini.len() != blocks.ep.nrows()
            || self.y_ini.len() != blocks.yp.nrows()
        {
            return dim_err(format!(
                "past window lengths {}/{}/{} vs Hankel rows {}/{}/{}",
                self.u_ini.len(),
                self.eps_ini.len(),
                self.y_ini.len(),
                blocks.up.nrows(),
                blocks.ep.nrows(),
                blocks.yp.nrows()
            ));
        }
        Ok(())
    }
}

/// Per-sample output weights of the centralized output.
pub fn central_output_weights(layout: &PartitionLayout, w: &Weights) -> DVector<f64> {
    let parts: Vec<DVector<f64>> = (0..layout.n()).map(|i| subsystem_output_weights(layout.hdv_count(i), w)).collect();
    DVector::from_iterator(layout.central_y_dim(), parts.iter().flat_map(|p| p.iter().copied()))
}

/// `diag(w_v, .., w_v, w_s)` with `m_i + 1` velocity weights.
pub fn subsystem_output_weights(m_i: usize, w: &Weights) -> DVector<f64> {
    let mut q = DVector::from_element(m_i + 2, w.w_v);
    q[m_i + 1] = w.w_s;
    q
}

/// `sum_k |y(k)|_Q^2 + w_u |u(k)|^2` over column-per-sample sequences.
pub fn quadratic_cost(u: &DMatrix<f64>, y: &DMatrix<f64>, q_diag: &DVector<f64>, w_u: f64) -> f64 {
    let yc: f64 = y.column_iter().map(|c| c.component_mul(&c).dot(q_diag)).sum();
    yc + w_u * u.norm_squared()
}

/// Same cost on flattened sample-major sequences.
pub fn quadratic_cost_flat(u: &DVector<f64>, y: &DVector<f64>, q_diag: &DVector<f64>, w_u: f64) -> f64 {
    let d = q_diag.len();
    let yc: f64 = y.iter().enumerate().map(|(i, v)| q_diag[i % d] * v * v).sum();
    yc + w_u * u.norm_squared()
}

/// `M' diag(w) M` for a block of rows whose weights repeat with period `w.len()`.
pub(crate) fn weighted_gram(m: &DMatrix<f64>, w: &DVector<f64>) -> DMatrix<f64> {
    let mut scaled = m.clone();
    let d = w.len();
    for (r, mut row) in scaled.row_iter_mut().enumerate() {
        row *= w[r % d].sqrt();
    }
    scaled.tr_mul(&scaled)
}

/// Quadratic form of the regularized (or linear) cost in `g`:
/// `V = g' Q_g g + 2 c_g' g + const`, with `c_g` depending on `y_ini` only.
pub(crate) fn cost_hessian(blocks: &HankelBlocks, q_diag: &DVector<f64>, cfg: &ControllerConfig) -> DMatrix<f64> {
    let mut qg = weighted_gram(&blocks.yf, q_diag);
    qg += blocks.uf.tr_mul(&blocks.uf) * cfg.weights.w_u;
    if let Formulation::Regularized { lambda_g, lambda_y } = cfg.formulation {
        qg += blocks.yp.tr_mul(&blocks.yp) * lambda_y;
        for i in 0..qg.nrows() {
            qg[(i, i)] += lambda_g;
        }
    }
    symmetrize(&mut qg);
    qg
}

pub(crate) fn symmetrize(m: &mut DMatrix<f64>) {
    let t = m.transpose();
    *m += t;
    *m *= 0.5;
}

/// Central problem data that does not change between control steps.
#[derive(Debug, Clone)]
pub struct CentralProblem {
    pub blocks: HankelBlocks,
    pub layout: PartitionLayout,
    pub cfg: ControllerConfig,
    pub q_diag: DVector<f64>,
    /// `Q_g`; the QP Hessian is `2 Q_g`.
    pub q_g: DMatrix<f64>,
    pub eq_rows: DMatrix<f64>,
    pub bound_map: DMatrix<f64>,
    pub lower: DVector<f64>,
    pub upper: DVector<f64>,
    /// Reference estimate for the future head-vehicle velocity error.
    pub eps_hat: DVector<f64>,
}

impl CentralProblem {
    pub fn new(blocks: HankelBlocks, layout: PartitionLayout, cfg: ControllerConfig) -> Result<Self> {
        cfg.validate()?;
        if blocks.u_dim() != layout.n() || blocks.y_dim() != layout.central_y_dim() {
            return dim_err(format!(
                "Hankel blocks for u-dim {} / y-dim {}, layout needs {} / {}",
                blocks.u_dim(),
                blocks.y_dim(),
                layout.n(),
                layout.central_y_dim()
            ));
        }
        let t = blocks.g_dim() + blocks.t_ini + blocks.horizon - 1;
        let needed = min_data_length(DataMode::Centralized { n: layout.n(), m: layout.m() }, blocks.t_ini, blocks.horizon);
        if t < needed {
            return Err(Error::InsufficientData { needed, have: t });
        }
        let n_horizon = blocks.horizon;
        let q_diag = central_output_weights(&layout, &cfg.weights);
        let q_g = cost_hessian(&blocks, &q_diag, &cfg);
        let eq_rows = match cfg.formulation {
            Formulation::Regularized { .. } => vstack(&[&blocks.up, &blocks.ep, &blocks.ef]),
            Formulation::Linear => vstack(&[&blocks.up, &blocks.ep, &blocks.yp, &blocks.ef]),
        };
        let ny = layout.central_y_dim();
        let spacing = layout.central_spacing_rows();
        let rows: Vec<usize> = (0..n_horizon).flat_map(|k| spacing.iter().map(move |r| k * ny + r)).collect();
        let sy = blocks.yf.select_rows(rows.iter());
        let bound_map = vstack(&[&blocks.uf, &sy]);
        let nu = blocks.uf.nrows();
        let b = &cfg.bounds;
        let lower = DVector::from_fn(bound_map.nrows(), |i, _| if i < nu { b.a_min } else { b.s_err_min });
        let upper = DVector::from_fn(bound_map.nrows(), |i, _| if i < nu { b.a_max } else { b.s_err_max });
        let eps_hat = DVector::zeros(n_horizon);
        Ok(Self { blocks, layout, cfg, q_diag, q_g, eq_rows, bound_map, lower, upper, eps_hat })
    }

    pub fn g_dim(&self) -> usize {
        self.blocks.g_dim()
    }

    /// Linear term `c_g` and constant of the cost for the given past.
    pub fn linear_term(&self, past: &PastWindow) -> (DVector<f64>, f64) {
        match self.cfg.formulation {
            Formulation::Regularized { lambda_y, .. } => (
                -self.blocks.yp.tr_mul(&past.y_ini) * lambda_y,
                lambda_y * past.y_ini.norm_squared(),
            ),
            Formulation::Linear => (DVector::zeros(self.g_dim()), 0.0),
        }
    }

    pub fn eq_rhs(&self, past: &PastWindow) -> DVector<f64> {
        let mut parts = vec![&past.u_ini, &past.eps_ini];
        if self.cfg.formulation == Formulation::Linear {
            parts.push(&past.y_ini);
        }
        parts.push(&self.eps_hat);
        crate::traj::vstack_vec(&parts)
    }

    /// The full QP for one control step (`1/2 g' (2 Q_g) g + (2 c_g)' g`).
    pub fn assemble(&self, past: &PastWindow) -> Result<BoxQp> {
        past.check(&self.blocks)?;
        let (c_g, _) = self.linear_term(past);
        let eq = EqQp::new(&self.q_g * 2.0, c_g * 2.0, self.eq_rows.clone(), self.eq_rhs(past))?;
        BoxQp::new(eq, Some(self.bound_map.clone()), self.lower.clone(), self.upper.clone())
    }

    /// `g' Q_g g + 2 c_g' g + const`, the cost including regularization.
    pub fn objective(&self, g: &DVector<f64>, past: &PastWindow) -> f64 {
        let (c_g, k) = self.linear_term(past);
        g.dot(&(&self.q_g * g)) + 2.0 * c_g.dot(g) + k
    }
}

pub fn assemble_central(
    blocks: &HankelBlocks,
    layout: &PartitionLayout,
    past: &PastWindow,
    cfg: &ControllerConfig,
) -> Result<BoxQp> {
    CentralProblem::new(blocks.clone(), layout.clone(), *cfg)?.assemble(past)
}

#[derive(Debug, Clone)]
pub struct CentralStep {
    /// First input sample per CAV, clipped to the input bounds.
    pub u_apply: DVector<f64>,
    pub u_pred: DVector<f64>,
    pub y_pred: DVector<f64>,
    pub g: DVector<f64>,
    pub objective: f64,
    pub iterations: usize,
    pub status: QpStatus,
}

/// QP solver behind the centralized controller.
#[derive(Debug, Clone)]
pub enum CentralSolver {
    /// Dual active-set method; exact up to round-off.
    ActiveSet(ActiveSetSolver),
    /// Operator splitting with the given tolerances.
    Splitting(Box<BoxQpSolver>),
}

impl CentralSolver {
    fn solve(&mut self, q: &DVector<f64>, b: &DVector<f64>, lower: &DVector<f64>, upper: &DVector<f64>) -> Result<QpSolution> {
        match self {
            Self::ActiveSet(s) => s.solve(q, b, lower, upper),
            Self::Splitting(s) => s.solve(q, b, lower, upper),
        }
    }
}

/// Receding-horizon centralized controller with a cached QP factorization.
#[derive(Debug, Clone)]
pub struct CentralController {
    problem: CentralProblem,
    solver: CentralSolver,
}

impl CentralController {
    pub fn new(problem: CentralProblem) -> Result<Self> {
        let solver = ActiveSetSolver::new(
            &(&problem.q_g * 2.0),
            &problem.eq_rows,
            Some(&problem.bound_map),
            ActiveSetSettings::default(),
        )?;
        Ok(Self { problem, solver: CentralSolver::ActiveSet(solver) })
    }

    pub fn with_splitting(problem: CentralProblem, settings: QpSettings) -> Result<Self> {
        let solver = BoxQpSolver::new(&(&problem.q_g * 2.0), &problem.eq_rows, Some(&problem.bound_map), settings)?;
        Ok(Self { problem, solver: CentralSolver::Splitting(Box::new(solver)) })
    }

    pub fn problem(&self) -> &CentralProblem {
        &self.problem
    }

    pub fn step(&mut self, past: &PastWindow) -> Result<CentralStep> {
        solve_central_step(&self.problem, &mut self.solver, past)
    }
}

pub fn solve_central_step(problem: &CentralProblem, solver: &mut CentralSolver, past: &PastWindow) -> Result<CentralStep> {
    past.check(&problem.blocks)?;
    let (c_g, _) = problem.linear_term(past);
    let sol = solver.solve(&(c_g * 2.0), &problem.eq_rhs(past), &problem.lower, &problem.upper)?;
    if sol.status == QpStatus::PrimalInfeasible {
        return Err(Error::Infeasible(format!(
            "centralized QP (|u_ini| = {:.3e}, |y_ini| = {:.3e})",
            past.u_ini.norm(),
            past.y_ini.norm()
        )));
    }
    let g = sol.x;
    let u_pred = &problem.blocks.uf * &g;
    let y_pred = &problem.blocks.yf * &g;
    let n = problem.layout.n();
    let b = &problem.cfg.bounds;
    let u_apply = DVector::from_fn(n, |i, _| u_pred[i].clamp(b.a_min, b.a_max));
    Ok(CentralStep {
        objective: problem.objective(&g, past),
        u_apply,
        u_pred,
        y_pred,
        g,
        iterations: sol.iterations,
        status: sol.status,
    })
}
