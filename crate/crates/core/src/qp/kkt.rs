//! Equality-constrained QPs and their KKT systems.

use nalgebra::{DMatrix, DVector, LU};

use crate::error::{dim_err, Error, Result};

/// Fallback regularization used when the plain KKT matrix is singular.
pub const FALLBACK_REG: f64 = 1e-9;

/// `min 1/2 x' H x + q' x  s.t.  A x = b`.
#[derive(Debug, Clone)]
pub struct EqQp {
    pub h: DMatrix<f64>,
    pub q: DVector<f64>,
    pub a: DMatrix<f64>,
    pub b: DVector<f64>,
}

impl EqQp {
    pub fn new(h: DMatrix<f64>, q: DVector<f64>, a: DMatrix<f64>, b: DVector<f64>) -> Result<Self> {
        let n = h.nrows();
        if h.ncols() != n || q.len() != n || a.ncols() != n || a.nrows() != b.len() {
            return dim_err(format!(
                "H {:?}, q {}, A {:?}, b {}",
                h.shape(),
                q.len(),
                a.shape(),
                b.len()
            ));
        }
        check_symmetric(&h)?;
        Ok(Self { h, q, a, b })
    }

    pub fn dim(&self) -> usize {
        self.q.len()
    }

    /// Minimizer and equality multipliers.
    pub fn solve(&self) -> Result<(DVector<f64>, DVector<f64>)> {
        let f = factor_kkt_auto(&self.h, &self.a)?;
        let sol = f.solve(&stack2(&(-&self.q), &self.b))?;
        let n = self.dim();
        Ok((sol.rows(0, n).into_owned(), sol.rows(n, self.b.len()).into_owned()))
    }

    pub fn objective(&self, x: &DVector<f64>) -> f64 {
        0.5 * x.dot(&(&self.h * x)) + self.q.dot(x)
    }
}

pub(crate) fn check_symmetric(h: &DMatrix<f64>) -> Result<()> {
    let asym = (h - h.transpose()).amax();
    if asym > 1e-10 * h.amax().max(1.0) {
        return Err(Error::InvalidParameter(format!("cost matrix not symmetric (max asymmetry {asym:e})")));
    }
    Ok(())
}

pub(crate) fn stack2(a: &DVector<f64>, b: &DVector<f64>) -> DVector<f64> {
    let mut v = DVector::zeros(a.len() + b.len());
    v.rows_mut(0, a.len()).copy_from(a);
    v.rows_mut(a.len(), b.len()).copy_from(b);
    v
}

/// LU factorization of `[[H + reg I, A'], [A, -reg I]]`, reusable across
/// right-hand sides.
#[derive(Debug, Clone)]
pub struct KktFactor {
    lu: LU<f64, nalgebra::Dyn, nalgebra::Dyn>,
    kkt: DMatrix<f64>,
    n: usize,
    p: usize,
    reg: f64,
}

/// Pivots below this fraction of the largest are treated as zero.
const PIVOT_TOL: f64 = 1e-13;

pub fn kkt_matrix(h: &DMatrix<f64>, a: &DMatrix<f64>, reg: f64) -> DMatrix<f64> {
    let n = h.nrows();
    let p = a.nrows();
    let mut k = DMatrix::zeros(n + p, n + p);
    k.view_mut((0, 0), (n, n)).copy_from(h);
    for i in 0..n {
        k[(i, i)] += reg;
    }
    k.view_mut((n, 0), (p, n)).copy_from(a);
    k.view_mut((0, n), (n, p)).copy_from(&a.transpose());
    for i in 0..p {
        k[(n + i, n + i)] = -reg;
    }
    k
}

pub fn factor_kkt(h: &DMatrix<f64>, a: &DMatrix<f64>, reg: f64) -> Result<KktFactor> {
    let n = h.nrows();
    if h.ncols() != n || a.ncols() != n {
        return dim_err(format!("H {:?} and A {:?} do not form a square KKT matrix", h.shape(), a.shape()));
    }
    if reg < 0.0 {
        return Err(Error::InvalidParameter("regularization must be nonnegative".into()));
    }
    let kkt = kkt_matrix(h, a, reg);
    let lu = kkt.clone().lu();
    let u = lu.u();
    let diag = u.diagonal().abs();
    let (dmin, dmax) = (diag.min(), diag.max());
    if !(dmax > 0.0) || dmin <= PIVOT_TOL * dmax || !dmin.is_finite() {
        return Err(Error::Factorization(format!(
            "KKT matrix of size {} singular (pivot ratio {:e}, reg {reg:e})",
            n + a.nrows(),
            if dmax > 0.0 { dmin / dmax } else { 0.0 }
        )));
    }
    Ok(KktFactor { lu, kkt, n, p: a.nrows(), reg })
}

/// Plain factorization first, regularized fallback on failure.
pub fn factor_kkt_auto(h: &DMatrix<f64>, a: &DMatrix<f64>) -> Result<KktFactor> {
    match factor_kkt(h, a, 0.0) {
        Ok(f) => Ok(f),
        Err(Error::Factorization(_)) => factor_kkt(h, a, FALLBACK_REG),
        Err(e) => Err(e),
    }
}

impl KktFactor {
    pub fn primal_dim(&self) -> usize {
        self.n
    }

    pub fn dual_dim(&self) -> usize {
        self.p
    }

    pub fn reg(&self) -> f64 {
        self.reg
    }

    /// The factored matrix.
    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.kkt
    }

    /// Solves the factored system with two steps of iterative refinement.
    pub fn solve(&self, rhs: &DVector<f64>) -> Result<DVector<f64>> {
        if rhs.len() != self.n + self.p {
            return dim_err(format!("rhs of length {} for KKT of size {}", rhs.len(), self.n + self.p));
        }
        let mut x = self.lu.solve(rhs).ok_or_else(|| Error::Factorization("LU solve failed".into()))?;
        for _ in 0..2 {
            let r = rhs - &self.kkt * &x;
            if let Some(dx) = self.lu.solve(&r) {
                x += dx;
            }
        }
        Ok(x)
    }

    /// Solves for every column of `rhs`.
    pub fn solve_mat(&self, rhs: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        if rhs.nrows() != self.n + self.p {
            return dim_err("rhs row count differs from KKT size");
        }
        let mut x = self.lu.solve(rhs).ok_or_else(|| Error::Factorization("LU solve failed".into()))?;
        let r = rhs - &self.kkt * &x;
        if let Some(dx) = self.lu.solve(&r) {
            x += dx;
        }
        Ok(x)
    }

    /// Relative residual `|K x - rhs| / max(1, |rhs|)`.
    pub fn residual(&self, x: &DVector<f64>, rhs: &DVector<f64>) -> f64 {
        (&self.kkt * x - rhs).norm() / rhs.norm().max(1.0)
    }
}
