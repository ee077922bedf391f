//! Primal/dual residuals of the four constraint groups and the stopping test.
//!
//! Groups: (1) `g_i = z_i`, (2) `E_{i+1,f} g_{i+1} = K_i Y_{i,f} z_i`,
//! (3) `s_i = P_i Y_{i,f} g_i`, (4) `u_i = U_{i,f} g_i`. Each tolerance sums
//! `sqrt(k) abs + rel * max(|A x|, |B y|)` (primal) and
//! `sqrt(l) abs + rel * |A' kappa|` (dual) over the members of the group,
//! with `k` and `l` the lengths of the vectors inside the norms.

use super::Worker;

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Residuals {
    pub r_pri: [f64; 4],
    pub r_dual: [f64; 4],
    pub tol_pri: [f64; 4],
    pub tol_dual: [f64; 4],
}

impl Residuals {
    pub fn converged(&self) -> bool {
        (0..4).all(|k| self.r_pri[k] <= self.tol_pri[k] && self.r_dual[k] <= self.tol_dual[k])
    }
}

/// Evaluates the residuals after a completed iteration. `eps_bar_in[i]` is
/// the backward message worker `i` used in this iteration.
pub fn residuals(workers: &[Worker], eps_bar_in: &[nalgebra::DVector<f64>], rho: f64, abs: f64, rel: f64) -> Residuals {
    let mut r = Residuals::default();
    let n = workers.len();
    for (i, w) in workers.iter().enumerate() {
        let st = &w.state;
        let d = w.g_dim() as f64;
        let nh = w.horizon() as f64;
        let sub = w.problem();

        r.r_pri[0] += (&st.g - &st.z).norm();
        r.tol_pri[0] += d.sqrt() * abs + rel * st.g.norm().max(st.z.norm());
        r.r_dual[0] += rho * (&st.z - &w.prev.z).norm();
        r.tol_dual[0] += d.sqrt() * abs + rel * st.mu.norm();

        if i + 1 < n {
            let next = workers[i + 1].problem();
            let wz = &sub.kyf * &st.z;
            let eg = &eps_bar_in[i];
            r.r_pri[1] += (eg - &wz).norm();
            r.tol_pri[1] += nh.sqrt() * abs + rel * eg.norm().max(wz.norm());
            let dwz = &sub.kyf * (&st.z - &w.prev.z);
            r.r_dual[1] += rho * next.blocks.ef.tr_mul(&dwz).norm();
            let dn = next.g_dim() as f64;
            r.tol_dual[1] += dn.sqrt() * abs + rel * next.blocks.ef.tr_mul(&st.eta).norm();
        }

        let pyg = &sub.pyf * &st.g;
        r.r_pri[2] += (&st.s - &pyg).norm();
        r.tol_pri[2] += nh.sqrt() * abs + rel * pyg.norm().max(st.s.norm());
        r.r_dual[2] += rho * sub.pyf.tr_mul(&(&st.s - &w.prev.s)).norm();
        r.tol_dual[2] += d.sqrt() * abs + rel * sub.pyf.tr_mul(&st.phi).norm();

        let ug = &sub.blocks.uf * &st.g;
        r.r_pri[3] += (&st.u - &ug).norm();
        r.tol_pri[3] += nh.sqrt() * abs + rel * ug.norm().max(st.u.norm());
        r.r_dual[3] += rho * sub.blocks.uf.tr_mul(&(&st.u - &w.prev.u)).norm();
        r.tol_dual[3] += d.sqrt() * abs + rel * sub.blocks.uf.tr_mul(&st.theta).norm();
    }
    r
}
