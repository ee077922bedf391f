//! Operator-splitting solver for convex QPs with equality rows and bounds:
//!
//! ```text
//! min 1/2 x' H x + q' x   s.t.   A x = b,   lower <= G x <= upper
//! ```
//!
//! `G` defaults to the identity (plain variable bounds). The iteration is
//! the relaxed ADMM splitting `z = C x` with `C = [A; G]`, applied to a
//! Ruiz-equilibrated copy of the problem. When `H + C' R C` is positive
//! definite the proximal term is dropped, which lets every iteration run in
//! constraint space with a precomputed `C (H + C' R C)^-1 C'`. The
//! factorization is kept across solves so only `q`, `b` and the bounds may
//! change between calls; the previous solution is used as warm start.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use super::kkt::{check_symmetric, factor_kkt_auto};
use super::EqQp;
use crate::error::{dim_err, Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct QpSettings {
    pub rho: f64,
    /// Proximal weight, used only when the constraint-space form is unavailable.
    pub sigma: f64,
    pub alpha: f64,
    pub eps_abs: f64,
    pub eps_rel: f64,
    pub eps_pinf: f64,
    pub max_iter: usize,
    pub check_every: usize,
    pub scaling_iters: usize,
    /// Refine the solution by solving the KKT system of the guessed active set.
    pub polish: bool,
    pub warm_start: bool,
}

impl Default for QpSettings {
    fn default() -> Self {
        Self {
            rho: 0.1,
            sigma: 1e-6,
            alpha: 1.6,
            eps_abs: 1e-3,
            eps_rel: 1e-3,
            eps_pinf: 1e-6,
            max_iter: 4000,
            check_every: 10,
            scaling_iters: 10,
            polish: false,
            warm_start: true,
        }
    }
}

impl QpSettings {
    /// Tight settings with polishing, for oracle comparisons.
    pub fn accurate() -> Self {
        Self { eps_abs: 1e-9, eps_rel: 1e-9, max_iter: 20000, polish: true, warm_start: false, ..Self::default() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QpStatus {
    Solved,
    /// Tolerances not reached within the iteration budget; the last iterate is returned.
    MaxIter,
    PrimalInfeasible,
}

#[derive(Debug, Clone)]
pub struct QpSolution {
    pub x: DVector<f64>,
    /// Multipliers of the equality rows.
    pub y_eq: DVector<f64>,
    /// Multipliers of the bound rows (negative at an active lower bound).
    pub y_bound: DVector<f64>,
    pub status: QpStatus,
    pub iterations: usize,
    pub objective: f64,
    pub prim_res: f64,
    pub dual_res: f64,
    pub polished: bool,
}

/// `EqQp` plus bounds on `G x` (on `x` itself when `g` is `None`).
#[derive(Debug, Clone)]
pub struct BoxQp {
    pub eq: EqQp,
    pub g: Option<DMatrix<f64>>,
    pub lower: DVector<f64>,
    pub upper: DVector<f64>,
}

impl BoxQp {
    pub fn new(eq: EqQp, g: Option<DMatrix<f64>>, lower: DVector<f64>, upper: DVector<f64>) -> Result<Self> {
        let rows = g.as_ref().map_or(eq.dim(), |g| g.nrows());
        if let Some(g) = &g {
            if g.ncols() != eq.dim() {
                return dim_err("bound map column count differs from variable count");
            }
        }
        if lower.len() != rows || upper.len() != rows {
            return dim_err(format!("{rows} bound rows, bounds of length {} / {}", lower.len(), upper.len()));
        }
        check_bounds(&lower, &upper)?;
        Ok(Self { eq, g, lower, upper })
    }

    pub fn bound_rows(&self) -> usize {
        self.lower.len()
    }

    pub fn objective(&self, x: &DVector<f64>) -> f64 {
        self.eq.objective(x)
    }

    /// Largest violation of equalities and bounds at `x`.
    pub fn violation(&self, x: &DVector<f64>) -> f64 {
        let eq = (&self.eq.a * x - &self.eq.b).amax();
        let gx = match &self.g {
            Some(g) => g * x,
            None => x.clone(),
        };
        let mut v = if self.eq.b.is_empty() { 0.0 } else { eq };
        for i in 0..gx.len() {
            v = v.max(self.lower[i] - gx[i]).max(gx[i] - self.upper[i]);
        }
        v
    }
}

fn check_bounds(lower: &DVector<f64>, upper: &DVector<f64>) -> Result<()> {
    if lower.iter().zip(upper.iter()).any(|(l, u)| l > u || l.is_nan() || u.is_nan()) {
        return Err(Error::InvalidParameter("lower bound exceeds upper bound".into()));
    }
    Ok(())
}

/// One-shot solve.
pub fn solve_box_qp(prob: &BoxQp, settings: &QpSettings) -> Result<QpSolution> {
    let mut s = BoxQpSolver::new(&prob.eq.h, &prob.eq.a, prob.g.as_ref(), settings.clone())?;
    s.solve(&prob.eq.q, &prob.eq.b, &prob.lower, &prob.upper)
}

#[derive(Debug, Clone)]
enum LinSys {
    Reduced {
        chol: Cholesky<f64, Dyn>,
        /// `C K C'`
        s: DMatrix<f64>,
        /// `K C'`
        kct: DMatrix<f64>,
    },
    Full {
        chol: Cholesky<f64, Dyn>,
    },
}

#[derive(Debug, Clone)]
struct WarmState {
    x: DVector<f64>,
    z: DVector<f64>,
    y: DVector<f64>,
    wbar: DVector<f64>,
}

/// Reusable solver for a fixed `(H, A, G)` structure.
#[derive(Debug, Clone)]
pub struct BoxQpSolver {
    settings: QpSettings,
    h: DMatrix<f64>,
    c: DMatrix<f64>,
    n: usize,
    p: usize,
    // Scaled data.
    hs: DMatrix<f64>,
    cs: DMatrix<f64>,
    d: DVector<f64>,
    e: DVector<f64>,
    cost: f64,
    rho: DVector<f64>,
    lin: LinSys,
    warm: Option<WarmState>,
}

impl BoxQpSolver {
    pub fn new(h: &DMatrix<f64>, a: &DMatrix<f64>, g: Option<&DMatrix<f64>>, settings: QpSettings) -> Result<Self> {
        let n = h.nrows();
        if h.ncols() != n || a.ncols() != n || g.is_some_and(|g| g.ncols() != n) {
            return dim_err("H, A and G must share the variable dimension");
        }
        check_symmetric(h)?;
        if !(settings.rho > 0.0 && settings.alpha > 0.0 && settings.alpha < 2.0) || settings.max_iter == 0 {
            return Err(Error::InvalidParameter("rho > 0, 0 < alpha < 2 and max_iter >= 1 required".into()));
        }
        let p = a.nrows();
        let gm = g.cloned().unwrap_or_else(|| DMatrix::identity(n, n));
        let mut c = DMatrix::zeros(p + gm.nrows(), n);
        c.rows_mut(0, p).copy_from(a);
        c.rows_mut(p, gm.nrows()).copy_from(&gm);
        let (hs, cs, d, e, cost) = ruiz(h, &c, settings.scaling_iters);
        let m = c.nrows();
        let rho = DVector::from_fn(m, |i, _| if i < p { settings.rho * 1e3 } else { settings.rho });
        let lin = build_linsys(&hs, &cs, &rho, settings.sigma)?;
        Ok(Self { settings, h: h.clone(), c, n, p, hs, cs, d, e, cost, rho, lin, warm: None })
    }

    pub fn settings(&self) -> &QpSettings {
        &self.settings
    }

    pub fn reset_warm_start(&mut self) {
        self.warm = None;
    }

    /// Whether iterations run in constraint space (no proximal term).
    pub fn is_reduced(&self) -> bool {
        matches!(self.lin, LinSys::Reduced { .. })
    }

    pub fn solve(
        &mut self,
        q: &DVector<f64>,
        b: &DVector<f64>,
        lower: &DVector<f64>,
        upper: &DVector<f64>,
    ) -> Result<QpSolution> {
        let (n, p, m) = (self.n, self.p, self.c.nrows());
        if q.len() != n || b.len() != p || lower.len() != m - p || upper.len() != m - p {
            return dim_err(format!(
                "q {}, b {}, bounds {}/{} for n {n}, {p} equalities, {} bound rows",
                q.len(),
                b.len(),
                lower.len(),
                upper.len(),
                m - p
            ));
        }
        check_bounds(lower, upper)?;
        let st = &self.settings;
        let mut l = DVector::zeros(m);
        let mut u = DVector::zeros(m);
        l.rows_mut(0, p).copy_from(b);
        u.rows_mut(0, p).copy_from(b);
        l.rows_mut(p, m - p).copy_from(lower);
        u.rows_mut(p, m - p).copy_from(upper);
        let ls = l.component_mul(&self.e);
        let us = u.component_mul(&self.e);
        let qs = q.component_mul(&self.d) * self.cost;

        let warm = if st.warm_start { self.warm.take() } else { None };
        let WarmState { mut x, mut z, mut y, mut wbar } = warm.unwrap_or_else(|| WarmState {
            x: DVector::zeros(n),
            z: DVector::zeros(m),
            y: DVector::zeros(m),
            wbar: DVector::zeros(m),
        });
        z = project_box(&z, &ls, &us);
        let rho = self.rho.clone();
        let alpha = st.alpha;

        // Constraint-space offsets for the reduced form.
        let (xq, zq) = match &self.lin {
            LinSys::Reduced { chol, .. } => {
                let xq = -chol.solve(&qs);
                let zq = &self.cs * &xq;
                (xq, zq)
            }
            LinSys::Full { .. } => (DVector::zeros(0), DVector::zeros(0)),
        };

        let mut status = QpStatus::MaxIter;
        let mut iterations = st.max_iter;
        let mut res = (f64::INFINITY, f64::INFINITY);
        let mut y_prev = y.clone();
        for k in 1..=st.max_iter {
            y_prev.copy_from(&y);
            let zt = match &self.lin {
                LinSys::Reduced { s, .. } => {
                    let w = rho.component_mul(&z) - &y;
                    let zt = &zq + s * &w;
                    wbar = &w * alpha + &wbar * (1.0 - alpha);
                    zt
                }
                LinSys::Full { chol } => {
                    let w = rho.component_mul(&z) - &y;
                    let rhs = &x * st.sigma - &qs + self.cs.tr_mul(&w);
                    let xt = chol.solve(&rhs);
                    let zt = &self.cs * &xt;
                    x = &xt * alpha + &x * (1.0 - alpha);
                    zt
                }
            };
            let zr = &zt * alpha + &z * (1.0 - alpha);
            let z_new = project_box(&(&zr + y.component_div(&rho)), &ls, &us);
            y += rho.component_mul(&(&zr - &z_new));
            z = z_new;

            if k % st.check_every == 0 || k == st.max_iter {
                if let LinSys::Reduced { kct, .. } = &self.lin {
                    x = &xq + kct * &wbar;
                }
                res = self.residuals(&x, &z, &y, &qs);
                let tol = self.tolerances(&x, &z, &y, &qs);
                if res.0 <= tol.0 && res.1 <= tol.1 {
                    status = QpStatus::Solved;
                    iterations = k;
                    break;
                }
                if self.infeasible(&(&y - &y_prev), &ls, &us) {
                    status = QpStatus::PrimalInfeasible;
                    iterations = k;
                    break;
                }
            }
        }

        let x_out = x.component_mul(&self.d);
        let y_out = y.component_mul(&self.e) / self.cost;
        let z_out = z.component_div(&self.e);
        self.warm = Some(WarmState { x, z, y, wbar });

        let mut sol = QpSolution {
            objective: 0.5 * x_out.dot(&(&self.h * &x_out)) + q.dot(&x_out),
            y_eq: y_out.rows(0, p).into_owned(),
            y_bound: y_out.rows(p, m - p).into_owned(),
            x: x_out,
            status,
            iterations,
            prim_res: res.0,
            dual_res: res.1,
            polished: false,
        };
        if self.settings.polish && status != QpStatus::PrimalInfeasible {
            self.polish(&mut sol, &z_out, &y_out, q, &l, &u)?;
        }
        Ok(sol)
    }

    /// Unscaled primal and dual residual (infinity norms).
    fn residuals(&self, x: &DVector<f64>, z: &DVector<f64>, y: &DVector<f64>, qs: &DVector<f64>) -> (f64, f64) {
        let prim = (&self.cs * x - z).component_div(&self.e).amax();
        let dual = (&self.hs * x + qs + self.cs.tr_mul(y)).component_div(&self.d).amax() / self.cost;
        (prim, dual)
    }

    fn tolerances(&self, x: &DVector<f64>, z: &DVector<f64>, y: &DVector<f64>, qs: &DVector<f64>) -> (f64, f64) {
        let st = &self.settings;
        let cx = (&self.cs * x).component_div(&self.e).amax();
        let zn = z.component_div(&self.e).amax();
        let hx = (&self.hs * x).component_div(&self.d).amax();
        let cty = self.cs.tr_mul(y).component_div(&self.d).amax();
        let qn = qs.component_div(&self.d).amax();
        (
            st.eps_abs + st.eps_rel * cx.max(zn),
            st.eps_abs + st.eps_rel * hx.max(cty).max(qn) / self.cost,
        )
    }

    fn infeasible(&self, dy: &DVector<f64>, ls: &DVector<f64>, us: &DVector<f64>) -> bool {
        let scale = dy.component_mul(&self.e).amax();
        if !(scale > 1e-12) {
            return false;
        }
        let eps = self.settings.eps_pinf * scale;
        if self.cs.tr_mul(dy).component_div(&self.d).amax() > eps {
            return false;
        }
        let mut support = 0.0;
        for i in 0..dy.len() {
            let t = if dy[i] > 0.0 {
                dy[i] * us[i]
            } else if dy[i] < 0.0 {
                dy[i] * ls[i]
            } else {
                0.0
            };
            if !t.is_finite() {
                return false;
            }
            support += t;
        }
        support < -eps
    }

    /// Active-set refinement: solve the equality QP with the guessed active
    /// rows and keep it if it is feasible and sign-consistent.
    fn polish(
        &self,
        sol: &mut QpSolution,
        z: &DVector<f64>,
        y: &DVector<f64>,
        q: &DVector<f64>,
        l: &DVector<f64>,
        u: &DVector<f64>,
    ) -> Result<()> {
        let (n, p, m) = (self.n, self.p, self.c.nrows());
        let mut rows = Vec::new();
        let mut rhs_vals = Vec::new();
        let mut kind = Vec::new();
        for i in 0..m {
            if i < p {
                rows.push(i);
                rhs_vals.push(l[i]);
                kind.push(0i8);
            } else if z[i] - l[i] < -y[i] {
                rows.push(i);
                rhs_vals.push(l[i]);
                kind.push(-1);
            } else if u[i] - z[i] < y[i] {
                rows.push(i);
                rhs_vals.push(u[i]);
                kind.push(1);
            }
        }
        let ca = self.c.select_rows(rows.iter());
        let factor = match factor_kkt_auto(&self.h, &ca) {
            Ok(f) => f,
            Err(Error::Factorization(_)) => return Ok(()),
            Err(e) => return Err(e),
        };
        let mut rhs = DVector::zeros(n + rows.len());
        rhs.rows_mut(0, n).copy_from(&(-q));
        for (j, v) in rhs_vals.iter().enumerate() {
            rhs[n + j] = *v;
        }
        let s = factor.solve(&rhs)?;
        let xp = s.rows(0, n).into_owned();
        let nu = s.rows(n, rows.len()).into_owned();
        let cx = &self.c * &xp;
        let mut viol = 0.0f64;
        for i in 0..m {
            viol = viol.max(l[i] - cx[i]).max(cx[i] - u[i]);
        }
        let tol = self.settings.eps_abs.max(1e-9) * (1.0 + cx.amax());
        let signs_ok = kind.iter().zip(nu.iter()).all(|(k, v)| match k {
            -1 => *v <= tol,
            1 => *v >= -tol,
            _ => true,
        });
        if viol <= tol && signs_ok {
            let mut yfull = DVector::zeros(m);
            for (j, &i) in rows.iter().enumerate() {
                yfull[i] = nu[j];
            }
            sol.objective = 0.5 * xp.dot(&(&self.h * &xp)) + q.dot(&xp);
            sol.prim_res = viol.max(0.0);
            sol.dual_res = (&self.h * &xp + q + self.c.tr_mul(&yfull)).amax();
            sol.y_eq = yfull.rows(0, p).into_owned();
            sol.y_bound = yfull.rows(p, m - p).into_owned();
            sol.x = xp;
            sol.status = QpStatus::Solved;
            sol.polished = true;
        }
        Ok(())
    }
}

/// Projection onto the interval `[lo, hi]` applied to every entry.
pub fn project_interval(v: &DVector<f64>, lo: f64, hi: f64) -> DVector<f64> {
    v.map(|x| x.clamp(lo, hi))
}

/// Euclidean projection onto the box `[l, u]`.
pub fn project_box(v: &DVector<f64>, l: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
    DVector::from_fn(v.len(), |i, _| v[i].max(l[i]).min(u[i]))
}

fn build_linsys(hs: &DMatrix<f64>, cs: &DMatrix<f64>, rho: &DVector<f64>, sigma: f64) -> Result<LinSys> {
    let mut crc = cs.clone();
    for (i, mut row) in crc.row_iter_mut().enumerate() {
        row *= rho[i];
    }
    let base = hs + cs.tr_mul(&crc);
    let n = hs.nrows();
    if let Some(chol) = Cholesky::new(base.clone()) {
        let diag = chol.l_dirty().diagonal();
        let (lo, hi) = (diag.min(), diag.max());
        // Only trust the reduced form when the factor is comfortably nonsingular.
        if lo > 1e-6 * hi {
            let mut w = cs.transpose();
            chol.l_dirty().solve_lower_triangular_mut(&mut w);
            let s = w.tr_mul(&w);
            let mut kct = w;
            chol.l().tr_solve_lower_triangular_mut(&mut kct);
            return Ok(LinSys::Reduced { chol, s, kct });
        }
    }
    let m = base + DMatrix::identity(n, n) * sigma;
    let chol = Cholesky::new(m).ok_or_else(|| Error::Factorization("splitting system not positive definite".into()))?;
    Ok(LinSys::Full { chol })
}

/// Modified Ruiz equilibration of `(H, C)` plus a cost scaling.
fn ruiz(h: &DMatrix<f64>, c: &DMatrix<f64>, iters: usize) -> (DMatrix<f64>, DMatrix<f64>, DVector<f64>, DVector<f64>, f64) {
    let (n, m) = (h.nrows(), c.nrows());
    let mut hs = h.clone();
    let mut cs = c.clone();
    let mut d = DVector::from_element(n, 1.0);
    let mut e = DVector::from_element(m, 1.0);
    let inv_sqrt = |v: f64| if v < 1e-4 { 1.0 } else { 1.0 / v.sqrt().clamp(1e-2, 1e2) };
    for _ in 0..iters {
        let dd = DVector::from_fn(n, |j, _| {
            let hn = hs.column(j).amax();
            let cn = if m > 0 { cs.column(j).amax() } else { 0.0 };
            inv_sqrt(hn.max(cn))
        });
        let de = DVector::from_fn(m, |i, _| inv_sqrt(cs.row(i).amax()));
        for j in 0..n {
            for i in 0..n {
                hs[(i, j)] *= dd[i] * dd[j];
            }
            for i in 0..m {
                cs[(i, j)] *= de[i] * dd[j];
            }
        }
        d.component_mul_assign(&dd);
        e.component_mul_assign(&de);
    }
    let mean_col = if n > 0 { (0..n).map(|j| hs.column(j).amax()).sum::<f64>() / n as f64 } else { 1.0 };
    let cost = if mean_col < 1e-4 { 1.0 } else { (1.0 / mean_col).clamp(1e-4, 1e4) };
    hs *= cost;
    (hs, cs, d, e, cost)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn no_eq(n: usize) -> (DMatrix<f64>, DVector<f64>) {
        (DMatrix::zeros(0, n), DVector::zeros(0))
    }

    #[test]
    fn scalar_active_bound() {
        let (a, b) = no_eq(1);
        let eq = EqQp::new(DMatrix::identity(1, 1), DVector::zeros(1), a, b).unwrap();
        let prob = BoxQp::new(eq, None, DVector::from_element(1, 1.0), DVector::from_element(1, f64::INFINITY)).unwrap();
        let sol = solve_box_qp(&prob, &QpSettings::default()).unwrap();
        assert_eq!(sol.status, QpStatus::Solved);
        assert_abs_diff_eq!(sol.x[0], 1.0, epsilon = 1e-2);
        let sol = solve_box_qp(&prob, &QpSettings::accurate()).unwrap();
        assert_abs_diff_eq!(sol.x[0], 1.0, epsilon = 1e-10);
        assert!(sol.y_bound[0] < 0.0);
    }

    #[test]
    fn projection_onto_box() {
        let c = DVector::from_vec(vec![-0.5, 0.3, 1.7, 0.0, 2.0]);
        let (a, b) = no_eq(5);
        let eq = EqQp::new(DMatrix::identity(5, 5), -&c, a, b).unwrap();
        let prob = BoxQp::new(eq, None, DVector::zeros(5), DVector::from_element(5, 1.0)).unwrap();
        let sol = solve_box_qp(&prob, &QpSettings::accurate()).unwrap();
        for i in 0..5 {
            assert_abs_diff_eq!(sol.x[i], c[i].clamp(0.0, 1.0), epsilon = 1e-9);
        }
    }

    #[test]
    fn detects_infeasibility() {
        // x1 + x2 = 3 with both in [0, 1].
        let eq = EqQp::new(
            DMatrix::identity(2, 2),
            DVector::zeros(2),
            DMatrix::from_row_slice(1, 2, &[1.0, 1.0]),
            DVector::from_element(1, 3.0),
        )
        .unwrap();
        let prob = BoxQp::new(eq, None, DVector::zeros(2), DVector::from_element(2, 1.0)).unwrap();
        let sol = solve_box_qp(&prob, &QpSettings::default()).unwrap();
        assert_eq!(sol.status, QpStatus::PrimalInfeasible);
    }

    #[test]
    fn semidefinite_cost_uses_available_form() {
        // Zero cost with an equality and a bound: any feasible point is optimal.
        let eq = EqQp::new(
            DMatrix::zeros(3, 3),
            DVector::from_vec(vec![1.0, 0.0, 0.0]),
            DMatrix::from_row_slice(1, 3, &[1.0, 1.0, 1.0]),
            DVector::from_element(1, 1.0),
        )
        .unwrap();
        let prob = BoxQp::new(eq, None, DVector::zeros(3), DVector::from_element(3, 1.0)).unwrap();
        let sol = solve_box_qp(&prob, &QpSettings::accurate()).unwrap();
        assert_eq!(sol.status, QpStatus::Solved);
        assert_abs_diff_eq!(sol.objective, 0.0, epsilon = 1e-8);
        assert!(prob.violation(&sol.x) < 1e-8);
    }

    #[test]
    fn warm_start_reuses_structure() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let l = DMatrix::from_fn(20, 20, |_, _| rng.gen_range(-1.0..1.0));
        let h = &l * l.transpose() + DMatrix::identity(20, 20);
        let a = DMatrix::from_fn(3, 20, |_, _| rng.gen_range(-1.0..1.0));
        let mut s = BoxQpSolver::new(&h, &a, None, QpSettings::default()).unwrap();
        assert!(s.is_reduced());
        let q = DVector::from_fn(20, |_, _| rng.gen_range(-5.0..5.0));
        let b = DVector::from_fn(3, |_, _| rng.gen_range(-1.0..1.0));
        let lo = DVector::from_element(20, -0.5);
        let hi = DVector::from_element(20, 0.5);
        let first = s.solve(&q, &b, &lo, &hi).unwrap();
        let second = s.solve(&q, &b, &lo, &hi).unwrap();
        assert_eq!(first.status, QpStatus::Solved);
        assert!(second.iterations <= first.iterations);
    }

    #[test]
    fn rejects_crossed_bounds() {
        let (a, b) = no_eq(1);
        let eq = EqQp::new(DMatrix::identity(1, 1), DVector::zeros(1), a, b).unwrap();
        assert!(BoxQp::new(eq, None, DVector::from_element(1, 1.0), DVector::from_element(1, 0.0)).is_err());
    }
}
