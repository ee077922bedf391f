//! Dual active-set solver (Goldfarb-Idnani) for
//! `min 1/2 x'Hx + q'x  s.t.  A x = b,  l <= C x <= u`.
//!
//! The equality-constrained KKT matrix is factored once. With
//! `K^{-1} [C'; 0] = [Z; Zn]` and `M = C Z`, adding bound multipliers `lam`
//! moves the solution to `x = x0 - Z lam`, so the iteration runs on the
//! bound rows alone: each step solves a small system in `M` restricted to
//! the active set. Reduced Hessian positive definite is required.

use nalgebra::{DMatrix, DVector};

use super::boxqp::{BoxQp, QpSolution, QpStatus};
use super::kkt::{factor_kkt_auto, stack2, KktFactor};
use crate::error::{dim_err, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ActiveSetSettings {
    /// Largest bound violation accepted as feasible.
    pub feas_tol: f64,
    /// Iteration cap as a multiple of the bound row count.
    pub max_iter_factor: usize,
}

impl Default for ActiveSetSettings {
    fn default() -> Self {
        Self { feas_tol: 1e-9, max_iter_factor: 10 }
    }
}

#[derive(Debug, Clone)]
pub struct ActiveSetSolver {
    factor: KktFactor,
    h: DMatrix<f64>,
    c: DMatrix<f64>,
    /// `K^{-1} [C'; 0]`, primal rows first.
    kc: DMatrix<f64>,
    m: DMatrix<f64>,
    settings: ActiveSetSettings,
}

#[derive(Clone, Copy)]
struct Active {
    idx: usize,
    /// +1 at the upper bound, -1 at the lower bound.
    side: f64,
    /// Nonnegative multiplier of `side * c_idx' x <= side * bound`.
    mu: f64,
}

impl ActiveSetSolver {
    /// `c = None` bounds `x` itself.
    pub fn new(h: &DMatrix<f64>, a: &DMatrix<f64>, c: Option<&DMatrix<f64>>, settings: ActiveSetSettings) -> Result<Self> {
        let n = h.nrows();
        let c = c.cloned().unwrap_or_else(|| DMatrix::identity(n, n));
        if c.ncols() != n {
            return dim_err("bound map column count differs from variable count");
        }
        let factor = factor_kkt_auto(h, a)?;
        let p = a.nrows();
        let mut rhs = DMatrix::zeros(n + p, c.nrows());
        rhs.view_mut((0, 0), (n, c.nrows())).copy_from(&c.transpose());
        let kc = factor.solve_mat(&rhs)?;
        let m = &c * kc.rows(0, n);
        let m = (&m + m.transpose()) * 0.5;
        Ok(Self { factor, h: h.clone(), c, kc, m, settings })
    }

    pub fn bound_rows(&self) -> usize {
        self.c.nrows()
    }

    /// Full `[x; nu]` for bound multipliers `lam` on the rows in `act`.
    fn shifted(&self, sol0: &DVector<f64>, act: &[Active]) -> DVector<f64> {
        let mut s = sol0.clone();
        for a in act {
            s.axpy(-a.side * a.mu, &self.kc.column(a.idx), 1.0);
        }
        s
    }

    /// `C x` for the active multipliers.
    fn bound_values(&self, s0: &DVector<f64>, act: &[Active]) -> DVector<f64> {
        let mut s = s0.clone();
        for a in act {
            s.axpy(-a.side * a.mu, &self.m.column(a.idx), 1.0);
        }
        s
    }

    /// Solves for the active multipliers' step `r = S_W^{-1} N_W' Psi n_p`.
    fn dual_direction(&self, act: &[Active], p: usize, side_p: f64) -> Result<DVector<f64>> {
        let k = act.len();
        if k == 0 {
            return Ok(DVector::zeros(0));
        }
        let s = DMatrix::from_fn(k, k, |i, j| act[i].side * act[j].side * self.m[(act[i].idx, act[j].idx)]);
        let rhs = DVector::from_fn(k, |i, _| act[i].side * side_p * self.m[(act[i].idx, p)]);
        if let Some(ch) = s.clone().cholesky() {
            return Ok(ch.solve(&rhs));
        }
        s.lu().solve(&rhs).ok_or_else(|| Error::Factorization("active-set system singular".into()))
    }

    pub fn solve(&self, q: &DVector<f64>, b: &DVector<f64>, lower: &DVector<f64>, upper: &DVector<f64>) -> Result<QpSolution> {
        let n = self.factor.primal_dim();
        let rows = self.c.nrows();
        if q.len() != n || b.len() != self.factor.dual_dim() || lower.len() != rows || upper.len() != rows {
            return dim_err("active-set solve: inconsistent q, b or bounds");
        }
        if lower.iter().zip(upper.iter()).any(|(l, u)| l > u) {
            return Err(Error::InvalidParameter("lower bound exceeds upper bound".into()));
        }
        let sol0 = self.factor.solve(&stack2(&(-q), b))?;
        let s0 = &self.c * sol0.rows(0, n);
        let tol = self.settings.feas_tol;
        let max_iter = self.settings.max_iter_factor * rows.max(1);
        let mut act: Vec<Active> = Vec::new();
        let mut iterations = 0;
        let mut status = QpStatus::Solved;

        'outer: loop {
            let s = self.bound_values(&s0, &act);
            let mut best: Option<(usize, f64, f64)> = None;
            for i in 0..rows {
                if act.iter().any(|a| a.idx == i) {
                    continue;
                }
                let (v, side) = if s[i] - upper[i] > lower[i] - s[i] { (s[i] - upper[i], 1.0) } else { (lower[i] - s[i], -1.0) };
                if v > tol * (1.0 + s[i].abs()) && best.is_none_or(|(_, bv, _)| v > bv) {
                    best = Some((i, v, side));
                }
            }
            let Some((p, _, side_p)) = best else { break };
            let bound_p = if side_p > 0.0 { upper[p] } else { -lower[p] };
            let mut mu_p = 0.0;
            loop {
                iterations += 1;
                if iterations > max_iter {
                    status = QpStatus::MaxIter;
                    break 'outer;
                }
                let r = self.dual_direction(&act, p, side_p)?;
                let mut a = self.m[(p, p)];
                for (j, aj) in act.iter().enumerate() {
                    a -= side_p * aj.side * self.m[(p, aj.idx)] * r[j];
                }
                let mut t1 = f64::INFINITY;
                let mut block = None;
                for (j, aj) in act.iter().enumerate() {
                    if r[j] > 1e-12 && aj.mu / r[j] < t1 {
                        t1 = aj.mu / r[j];
                        block = Some(j);
                    }
                }
                let mut with_p = act.clone();
                with_p.push(Active { idx: p, side: side_p, mu: mu_p });
                let sp = self.bound_values(&s0, &with_p)[p];
                let viol = side_p * sp - bound_p;
                let t2 = if a > 1e-14 * self.m[(p, p)].abs().max(1e-300) { viol / a } else { f64::INFINITY };
                if !t1.is_finite() && !t2.is_finite() {
                    status = QpStatus::PrimalInfeasible;
                    break 'outer;
                }
                let t = t1.min(t2).max(0.0);
                for (j, aj) in act.iter_mut().enumerate() {
                    aj.mu = (aj.mu - t * r[j]).max(0.0);
                }
                mu_p += t;
                if t2 <= t1 {
                    act.push(Active { idx: p, side: side_p, mu: mu_p });
                    break;
                }
                act.remove(block.expect("finite t1 has a blocking row"));
            }
        }

        let sol = self.shifted(&sol0, &act);
        let x = sol.rows(0, n).into_owned();
        let y_eq = sol.rows(n, sol.len() - n).into_owned();
        let mut y_bound = DVector::zeros(rows);
        for a in &act {
            y_bound[a.idx] = a.side * a.mu;
        }
        let cx = &self.c * &x;
        let prim_res = (0..rows).fold(0.0f64, |v, i| v.max(lower[i] - cx[i]).max(cx[i] - upper[i]));
        let objective = 0.5 * x.dot(&(&self.h * &x)) + q.dot(&x);
        Ok(QpSolution { x, y_eq, y_bound, status, iterations, objective, prim_res, dual_res: 0.0, polished: false })
    }
}

/// One-shot solve of a [`BoxQp`].
pub fn solve_active_set(prob: &BoxQp, settings: ActiveSetSettings) -> Result<QpSolution> {
    let solver = ActiveSetSolver::new(&prob.eq.h, &prob.eq.a, prob.g.as_ref(), settings)?;
    solver.solve(&prob.eq.q, &prob.eq.b, &prob.lower, &prob.upper)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::qp::EqQp;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Brute force over every assignment of {free, lower, upper} to the bound
    /// rows, keeping the best KKT-feasible candidate.
    fn enumerate_oracle(prob: &BoxQp) -> f64 {
        let c = prob.g.clone().unwrap();
        let rows = c.nrows();
        let mut best = f64::INFINITY;
        for code in 0..3usize.pow(rows as u32) {
            let mut a = prob.eq.a.clone();
            let mut b = prob.eq.b.clone();
            let mut k = code;
            for i in 0..rows {
                let choice = k % 3;
                k /= 3;
                if choice == 0 {
                    continue;
                }
                let val = if choice == 1 { prob.lower[i] } else { prob.upper[i] };
                let r = a.nrows();
                a = a.insert_row(r, 0.0);
                a.row_mut(r).copy_from(&c.row(i));
                b = b.push(val);
            }
            let Ok(eq) = EqQp::new(prob.eq.h.clone(), prob.eq.q.clone(), a, b) else { continue };
            let Ok((x, _)) = eq.solve() else { continue };
            if prob.violation(&x) < 1e-8 {
                best = best.min(prob.objective(&x));
            }
        }
        best
    }

    fn random_problem(rng: &mut ChaCha8Rng, n: usize, p: usize, rows: usize) -> BoxQp {
        let l = DMatrix::from_fn(n, n, |_, _| rng.gen_range(-1.0..1.0));
        let h = &l * l.transpose() + DMatrix::identity(n, n) * 0.1;
        let q = DVector::from_fn(n, |_, _| rng.gen_range(-3.0..3.0));
        let a = DMatrix::from_fn(p, n, |_, _| rng.gen_range(-1.0..1.0));
        let b = DVector::from_fn(p, |_, _| rng.gen_range(-0.5..0.5));
        let c = DMatrix::from_fn(rows, n, |_, _| rng.gen_range(-1.0..1.0));
        let lower = DVector::from_fn(rows, |_, _| rng.gen_range(-1.0..0.0));
        let upper = DVector::from_fn(rows, |_, _| rng.gen_range(0.0..1.0));
        BoxQp::new(EqQp::new(h, q, a, b).unwrap(), Some(c), lower, upper).unwrap()
    }

    #[test]
    fn matches_enumeration_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..40 {
            let prob = random_problem(&mut rng, 6, 2, 5);
            let sol = solve_active_set(&prob, ActiveSetSettings::default()).unwrap();
            assert_eq!(sol.status, QpStatus::Solved);
            let oracle = enumerate_oracle(&prob);
            assert!((sol.objective - oracle).abs() <= 1e-8 * (1.0 + oracle.abs()), "{} vs {oracle}", sol.objective);
            assert!(prob.violation(&sol.x) < 1e-8);
        }
    }

    #[test]
    fn kkt_conditions_hold() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let prob = random_problem(&mut rng, 30, 5, 20);
        let sol = solve_active_set(&prob, ActiveSetSettings::default()).unwrap();
        let c = prob.g.as_ref().unwrap();
        let stat = &prob.eq.h * &sol.x + &prob.eq.q + prob.eq.a.transpose() * &sol.y_eq + c.transpose() * &sol.y_bound;
        assert!(stat.amax() < 1e-8, "stationarity {}", stat.amax());
        let cx = c * &sol.x;
        for i in 0..cx.len() {
            let y = sol.y_bound[i];
            if y > 0.0 {
                assert!((cx[i] - prob.upper[i]).abs() < 1e-8);
            } else if y < 0.0 {
                assert!((cx[i] - prob.lower[i]).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn scalar_active_bound_is_exact() {
        let eq = EqQp::new(DMatrix::identity(1, 1), DVector::zeros(1), DMatrix::zeros(0, 1), DVector::zeros(0)).unwrap();
        let prob = BoxQp::new(eq, None, DVector::from_element(1, 1.0), DVector::from_element(1, f64::INFINITY)).unwrap();
        let sol = solve_active_set(&prob, ActiveSetSettings::default()).unwrap();
        assert_eq!(sol.x[0], 1.0);
        assert_eq!(sol.iterations, 1);
    }

    #[test]
    fn infeasible_bounds_are_reported() {
        // x1 + x2 = 3 with both in [0, 1].
        let eq = EqQp::new(
            DMatrix::identity(2, 2),
            DVector::zeros(2),
            DMatrix::from_row_slice(1, 2, &[1.0, 1.0]),
            DVector::from_element(1, 3.0),
        )
        .unwrap();
        let prob = BoxQp::new(eq, None, DVector::zeros(2), DVector::from_element(2, 1.0)).unwrap();
        let sol = solve_active_set(&prob, ActiveSetSettings::default()).unwrap();
        assert_eq!(sol.status, QpStatus::PrimalInfeasible);
    }
}
