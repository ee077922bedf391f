//! Cooperative DeeP-LCC: one data-driven problem per CF-LCC subsystem,
//! linked by the requirement that the predicted reference input of
//! subsystem `i + 1` equals the predicted velocity error of the last vehicle
//! of subsystem `i`.
//!
//! Each subsystem cost is written in its own coefficient vector `g_i` as
//! `f_i(g_i) = g_i' Q_gi g_i + 2 c_gi' g_i + const` with domain
//! `A_gi g_i = b_gi`. The couplings are `E_{i+1,f} g_{i+1} = K_i Y_{i,f} g_i`.

use nalgebra::{DMatrix, DVector};

use crate::central::{
    cost_hessian, subsystem_output_weights, quadratic_cost, ControllerConfig, Formulation, PastWindow, Weights,
};
use crate::error::{dim_err, Error, Result};
use crate::qp::{BoxQp, EqQp};
use crate::traj::{min_data_length, vstack, vstack_vec, DataMode, HankelBlocks};

pub use crate::layout::PartitionLayout;

/// Row selectors over a horizon of stacked subsystem outputs.
#[derive(Debug, Clone, PartialEq)]
pub struct Selectors {
    /// Picks the velocity error of the last vehicle of the subsystem.
    pub k: DMatrix<f64>,
    /// Picks the CAV spacing error.
    pub p: DMatrix<f64>,
}

pub fn build_selectors(m_i: usize, horizon: usize) -> Selectors {
    let d = m_i + 2;
    let mut k = DMatrix::zeros(horizon, horizon * d);
    let mut p = DMatrix::zeros(horizon, horizon * d);
    for r in 0..horizon {
        k[(r, r * d + m_i)] = 1.0;
        p[(r, r * d + m_i + 1)] = 1.0;
    }
    Selectors { k, p }
}

/// Data of one subsystem that stays fixed during closed-loop control.
#[derive(Debug, Clone)]
pub struct SubsystemProblem {
    pub index: usize,
    pub m_i: usize,
    pub blocks: HankelBlocks,
    pub cfg: ControllerConfig,
    pub q_diag: DVector<f64>,
    pub q_g: DMatrix<f64>,
    /// Rows of `A_gi`.
    pub a_g: DMatrix<f64>,
    /// `K_i Y_{i,f}`
    pub kyf: DMatrix<f64>,
    /// `P_i Y_{i,f}`
    pub pyf: DMatrix<f64>,
}

impl SubsystemProblem {
    pub fn new(index: usize, m_i: usize, blocks: HankelBlocks, cfg: ControllerConfig) -> Result<Self> {
        cfg.validate()?;
        if blocks.u_dim() != 1 || blocks.y_dim() != m_i + 2 {
            return dim_err(format!(
                "subsystem {index}: Hankel blocks for u-dim {} / y-dim {}, expected 1 / {}",
                blocks.u_dim(),
                blocks.y_dim(),
                m_i + 2
            ));
        }
        let t = blocks.g_dim() + blocks.t_ini + blocks.horizon - 1;
        let needed = min_data_length(DataMode::Local { m_i }, blocks.t_ini, blocks.horizon);
        if t < needed {
            return Err(Error::InsufficientData { needed, have: t });
        }
        let sel = build_selectors(m_i, blocks.horizon);
        let q_diag = subsystem_output_weights(m_i, &cfg.weights);
        let q_g = cost_hessian(&blocks, &q_diag, &cfg) ;
        let mut rows = vec![&blocks.up, &blocks.ep];
        if cfg.formulation == Formulation::Linear {
            rows.push(&blocks.yp);
        }
        if index == 0 {
            rows.push(&blocks.ef);
        }
        let a_g = vstack(&rows);
        let kyf = &sel.k * &blocks.yf;
        let pyf = &sel.p * &blocks.yf;
        Ok(Self { index, m_i, blocks, cfg, q_diag, q_g, a_g, kyf, pyf })
    }

    pub fn g_dim(&self) -> usize {
        self.blocks.g_dim()
    }

    pub fn horizon(&self) -> usize {
        self.blocks.horizon
    }

    pub fn is_head(&self) -> bool {
        self.index == 0
    }

    /// `(c_gi, const)` for the current past window.
    pub fn linear_term(&self, past: &PastWindow) -> (DVector<f64>, f64) {
        match self.cfg.formulation {
            Formulation::Regularized { lambda_y, .. } => (
                -self.blocks.yp.tr_mul(&past.y_ini) * lambda_y,
                lambda_y * past.y_ini.norm_squared(),
            ),
            Formulation::Linear => (DVector::zeros(self.g_dim()), 0.0),
        }
    }

    /// `b_gi`; the head subsystem also pins its future reference to zero.
    pub fn b_g(&self, past: &PastWindow) -> Result<DVector<f64>> {
        if past.u_ini.len() != self.blocks.up.nrows()
            || past.eps_ini.len() != self.blocks.ep.nrows()
            || past.y_ini.len() != self.blocks.yp.nrows()
        {
            return dim_err(format!("subsystem {}: past window does not match Hankel blocks", self.index));
        }
        let zeros = DVector::zeros(self.horizon());
        let mut parts = vec![&past.u_ini, &past.eps_ini];
        if self.cfg.formulation == Formulation::Linear {
            parts.push(&past.y_ini);
        }
        if self.is_head() {
            parts.push(&zeros);
        }
        Ok(vstack_vec(&parts))
    }

    /// `f_i(g)` including the constant.
    pub fn objective(&self, g: &DVector<f64>, past: &PastWindow) -> f64 {
        let (c, k) = self.linear_term(past);
        g.dot(&(&self.q_g * g)) + 2.0 * c.dot(g) + k
    }
}

/// All subsystems of a chain.
#[derive(Debug, Clone)]
pub struct CoopProblem {
    pub layout: PartitionLayout,
    pub subs: Vec<SubsystemProblem>,
}

pub fn build_cooperative(layout: &PartitionLayout, blocks: Vec<HankelBlocks>, cfg: &ControllerConfig) -> Result<CoopProblem> {
    if blocks.len() != layout.n() {
        return dim_err(format!("{} Hankel block sets for {} subsystems", blocks.len(), layout.n()));
    }
    let horizon = blocks[0].horizon;
    let t_ini = blocks[0].t_ini;
    if blocks.iter().any(|b| b.horizon != horizon || b.t_ini != t_ini) {
        return dim_err("subsystems must share T_ini and N");
    }
    let subs = blocks
        .into_iter()
        .enumerate()
        .map(|(i, b)| SubsystemProblem::new(i, layout.hdv_count(i), b, *cfg))
        .collect::<Result<Vec<_>>>()?;
    Ok(CoopProblem { layout: layout.clone(), subs })
}

impl CoopProblem {
    pub fn n(&self) -> usize {
        self.subs.len()
    }

    pub fn horizon(&self) -> usize {
        self.subs[0].horizon()
    }

    pub fn g_offsets(&self) -> Vec<usize> {
        let mut off = Vec::with_capacity(self.n());
        let mut acc = 0;
        for s in &self.subs {
            off.push(acc);
            acc += s.g_dim();
        }
        off
    }

    pub fn total_g_dim(&self) -> usize {
        self.subs.iter().map(SubsystemProblem::g_dim).sum()
    }

    /// `sum_i f_i(g_i)` for stacked `g`.
    pub fn objective(&self, g: &DVector<f64>, pasts: &[PastWindow]) -> f64 {
        let off = self.g_offsets();
        self.subs
            .iter()
            .zip(pasts)
            .enumerate()
            .map(|(i, (s, p))| s.objective(&g.rows(off[i], s.g_dim()).into_owned(), p))
            .sum()
    }

    /// Largest violation of the coupling equalities at stacked `g`.
    pub fn coupling_violation(&self, g: &DVector<f64>) -> f64 {
        let off = self.g_offsets();
        (0..self.n().saturating_sub(1))
            .map(|i| {
                let gi = g.rows(off[i], self.subs[i].g_dim());
                let gj = g.rows(off[i + 1], self.subs[i + 1].g_dim());
                (&self.subs[i + 1].blocks.ef * gj - &self.subs[i].kyf * gi).amax()
            })
            .fold(0.0, f64::max)
    }

    /// The whole cooperative problem as a single QP in the stacked `g`, with
    /// the local domains, the couplings and the input/spacing bounds.
    pub fn stacked_qp(&self, pasts: &[PastWindow]) -> Result<BoxQp> {
        if pasts.len() != self.n() {
            return dim_err("one past window per subsystem required");
        }
        let nt = self.total_g_dim();
        let off = self.g_offsets();
        let horizon = self.horizon();
        let mut h = DMatrix::zeros(nt, nt);
        let mut q = DVector::zeros(nt);
        let local_rows: usize = self.subs.iter().map(|s| s.a_g.nrows()).sum();
        let coupling_rows = horizon * (self.n() - 1);
        let mut a = DMatrix::zeros(local_rows + coupling_rows, nt);
        let mut b = DVector::zeros(local_rows + coupling_rows);
        let mut gmap = DMatrix::zeros(2 * horizon * self.n(), nt);
        let mut lower = DVector::zeros(2 * horizon * self.n());
        let mut upper = DVector::zeros(2 * horizon * self.n());
        let mut r = 0;
        for (i, s) in self.subs.iter().enumerate() {
            let d = s.g_dim();
            h.view_mut((off[i], off[i]), (d, d)).copy_from(&(&s.q_g * 2.0));
            let (c, _) = s.linear_term(&pasts[i]);
            q.rows_mut(off[i], d).copy_from(&(c * 2.0));
            let bi = s.b_g(&pasts[i])?;
            a.view_mut((r, off[i]), (s.a_g.nrows(), d)).copy_from(&s.a_g);
            b.rows_mut(r, bi.len()).copy_from(&bi);
            r += s.a_g.nrows();
            let gr = 2 * horizon * i;
            gmap.view_mut((gr, off[i]), (horizon, d)).copy_from(&s.blocks.uf);
            gmap.view_mut((gr + horizon, off[i]), (horizon, d)).copy_from(&s.pyf);
            let bd = &s.cfg.bounds;
            for k in 0..horizon {
                lower[gr + k] = bd.a_min;
                upper[gr + k] = bd.a_max;
                lower[gr + horizon + k] = bd.s_err_min;
                upper[gr + horizon + k] = bd.s_err_max;
            }
        }
        for i in 0..self.n() - 1 {
            let (si, sj) = (&self.subs[i], &self.subs[i + 1]);
            a.view_mut((r, off[i]), (horizon, si.g_dim())).copy_from(&(-&si.kyf));
            a.view_mut((r, off[i + 1]), (horizon, sj.g_dim())).copy_from(&sj.blocks.ef);
            r += horizon;
        }
        BoxQp::new(EqQp::new(h, q, a, b)?, Some(gmap), lower, upper)
    }
}

/// `sum_i sum_k |y_i(k)|_{Q_i}^2 + w_u u_i(k)^2` over per-subsystem
/// column-per-sample sequences.
pub fn cooperative_cost(u_seqs: &[DMatrix<f64>], y_seqs: &[DMatrix<f64>], layout: &PartitionLayout, w: &Weights) -> Result<f64> {
    if u_seqs.len() != layout.n() || y_seqs.len() != layout.n() {
        return dim_err("one sequence per subsystem required");
    }
    let mut total = 0.0;
    for i in 0..layout.n() {
        let q = subsystem_output_weights(layout.hdv_count(i), w);
        if y_seqs[i].nrows() != q.len() || u_seqs[i].nrows() != 1 {
            return dim_err(format!("subsystem {i}: sequence dimensions do not match the layout"));
        }
        total += quadratic_cost(&u_seqs[i], &y_seqs[i], &q, w.w_u);
    }
    Ok(total)
}
