//! Mixed-traffic plant: optimal-velocity-model HDVs, double-integrator CAVs,
//! head-vehicle perturbation profiles, the small-signal LTI model of a
//! subsystem, and the instantaneous fuel model.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{dim_err, Error, Result};
use crate::layout::{PartitionLayout, Role};

pub const DT: f64 = 0.05;
pub const A_MIN: f64 = -5.0;
pub const A_MAX: f64 = 2.0;
/// Half-width of the uniform acceleration noise on HDVs.
pub const HDV_NOISE: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HdvParams {
    pub alpha: f64,
    pub beta: f64,
    pub s_st: f64,
    pub s_go: f64,
    pub v_max: f64,
}

impl Default for HdvParams {
    fn default() -> Self {
        Self::NOMINAL
    }
}

impl HdvParams {
    pub const NOMINAL: Self = Self { alpha: 0.6, beta: 0.9, s_st: 5.0, s_go: 35.0, v_max: 30.0 };

    pub fn validate(&self) -> Result<()> {
        let ok = self.alpha > 0.0
            && self.beta > 0.0
            && self.s_st > 0.0
            && self.s_st < self.s_go
            && self.v_max > 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidParameter(format!("invalid HDV parameters {self:?}")))
        }
    }

    /// Heterogeneous draw around the nominal values.
    pub fn draw(rng: &mut impl Rng) -> Self {
        Self {
            alpha: 0.6 + rng.gen_range(-0.2..=0.2),
            beta: 0.9 + rng.gen_range(-0.2..=0.2),
            s_go: 35.0 + rng.gen_range(-5.0..=5.0),
            ..Self::NOMINAL
        }
    }

    /// Spacing-dependent desired velocity.
    pub fn v_des(&self, s: f64) -> f64 {
        if s <= self.s_st {
            0.0
        } else if s >= self.s_go {
            self.v_max
        } else {
            self.v_max / 2.0 * (1.0 - (PI * (s - self.s_st) / (self.s_go - self.s_st)).cos())
        }
    }

    pub fn v_des_slope(&self, s: f64) -> f64 {
        if s <= self.s_st || s >= self.s_go {
            0.0
        } else {
            let w = PI / (self.s_go - self.s_st);
            self.v_max / 2.0 * w * (w * (s - self.s_st)).sin()
        }
    }

    /// Spacing at which the desired velocity equals `v_star`, by bisection.
    pub fn equilibrium_spacing(&self, v_star: f64) -> Result<f64> {
        if !(v_star > 0.0 && v_star < self.v_max) {
            return Err(Error::NoInteriorEquilibrium(v_star));
        }
        let (mut lo, mut hi) = (self.s_st, self.s_go);
        while hi - lo > 1e-11 {
            let mid = 0.5 * (lo + hi);
            if self.v_des(mid) < v_star {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        Ok(0.5 * (lo + hi))
    }

    /// Continuous-time small-signal coefficients `(a1, a2, a3)` at `v_star`.
    pub fn linear_coeffs(&self, v_star: f64) -> Result<(f64, f64, f64)> {
        let s = self
            .equilibrium_spacing(v_star)
            .map_err(|_| Error::Linearization(format!("no differentiable equilibrium at v* = {v_star}")))?;
        Ok((self.alpha * self.v_des_slope(s), self.alpha + self.beta, self.beta))
    }
}

/// OVM acceleration with additive noise, saturated to `[A_MIN, A_MAX]`.
pub fn hdv_accel(p: &HdvParams, s: f64, s_dot: f64, v: f64, noise: f64) -> f64 {
    (p.alpha * (p.v_des(s) - v) + p.beta * s_dot + noise).clamp(A_MIN, A_MAX)
}

/// Instantaneous fuel consumption rate in mL/s.
pub fn fuel_rate(v: f64, a: f64) -> f64 {
    let r = 0.333 + 0.00108 * v * v + 1.2 * a;
    if r <= 0.0 {
        0.444
    } else {
        let mut f = 0.444 + 0.09 * r * v;
        if a > 0.0 {
            f += 0.054 * a * a * v;
        }
        f
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Equilibrium {
    pub v_star: f64,
    pub s_star_cav: f64,
}

impl Default for Equilibrium {
    fn default() -> Self {
        Self { v_star: 15.0, s_star_cav: 20.0 }
    }
}

impl Equilibrium {
    pub fn s_star_hdv(&self, p: &HdvParams) -> Result<f64> {
        p.equilibrium_spacing(self.v_star)
    }
}

/// Head-vehicle behaviour.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum HeadProfile {
    /// Constant accelerations held for the given durations, starting at `v0`.
    Piecewise { v0: f64, segments: Vec<AccelSegment> },
    /// `mean` for `hold` seconds, then `mean + amplitude * sin(2 pi (t - hold) / period)`.
    Sinusoid { mean: f64, amplitude: f64, period: f64, hold: f64, duration: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AccelSegment {
    pub duration: f64,
    pub accel: f64,
}

impl HeadProfile {
    pub fn duration(&self) -> f64 {
        match self {
            Self::Piecewise { segments, .. } => segments.iter().map(|s| s.duration).sum(),
            Self::Sinusoid { duration, .. } => *duration,
        }
    }

    pub fn initial_velocity(&self) -> f64 {
        match self {
            Self::Piecewise { v0, .. } => *v0,
            Self::Sinusoid { mean, .. } => *mean,
        }
    }

    pub fn steps(&self, dt: f64) -> usize {
        (self.duration() / dt).round() as usize
    }

    /// Commanded head acceleration over step `k` (from `k dt` to `(k+1) dt`).
    pub fn accel(&self, k: usize, dt: f64) -> f64 {
        match self {
            Self::Piecewise { segments, .. } => {
                // Midpoint lookup keeps segment edges on step boundaries robust.
                let t = (k as f64 + 0.5) * dt;
                let mut end = 0.0;
                for s in segments {
                    end += s.duration;
                    if t < end {
                        return s.accel;
                    }
                }
                0.0
            }
            Self::Sinusoid { .. } => {
                (self.sinusoid_velocity((k + 1) as f64 * dt) - self.sinusoid_velocity(k as f64 * dt)) / dt
            }
        }
    }

    fn sinusoid_velocity(&self, t: f64) -> f64 {
        match self {
            Self::Sinusoid { mean, amplitude, period, hold, .. } => {
                if t <= *hold {
                    *mean
                } else {
                    mean + amplitude * (2.0 * PI * (t - hold) / period).sin()
                }
            }
            Self::Piecewise { .. } => unreachable!(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            Self::Piecewise { v0, segments } => {
                let mut v = *v0;
                if v < 0.0 {
                    return Err(Error::InvalidParameter("negative initial head velocity".into()));
                }
                for s in segments {
                    if s.duration < 0.0 {
                        return Err(Error::InvalidParameter("negative segment duration".into()));
                    }
                    v += s.accel * s.duration;
                    if v < -1e-9 {
                        return Err(Error::InvalidParameter("head profile reaches negative velocity".into()));
                    }
                }
                Ok(())
            }
            Self::Sinusoid { mean, amplitude, period, hold, duration } => {
                if *period <= 0.0 || *hold < 0.0 || *duration <= 0.0 || mean - amplitude.abs() < 0.0 {
                    return Err(Error::InvalidParameter("invalid sinusoid head profile".into()));
                }
                Ok(())
            }
        }
    }
}

/// Positions and velocities of the head (index 0) and its followers.
#[derive(Debug, Clone, PartialEq)]
pub struct ChainState {
    pub pos: Vec<f64>,
    pub vel: Vec<f64>,
}

impl ChainState {
    /// Spacing of follower `k` (1-based) to the vehicle ahead.
    pub fn spacing(&self, k: usize) -> f64 {
        self.pos[k - 1] - self.pos[k]
    }

    pub fn len(&self) -> usize {
        self.pos.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pos.is_empty()
    }
}

/// How CAVs are driven during a plant step.
#[derive(Debug, Clone, Copy)]
pub enum CavDrive<'a> {
    /// Commanded accelerations, one per CAV.
    Input(&'a [f64]),
    /// CAVs behave as HDVs with nominal OVM parameters.
    Human,
}

/// The nonlinear mixed-traffic plant.
#[derive(Debug, Clone)]
pub struct Plant {
    layout: PartitionLayout,
    roles: Vec<Role>,
    /// One entry per follower; CAV entries hold nominal parameters.
    params: Vec<HdvParams>,
    equilibrium: Equilibrium,
    state: ChainState,
    dt: f64,
    rng: ChaCha8Rng,
    noise_scale: f64,
    time: f64,
}

impl Plant {
    /// Plant initialized at equilibrium. `hdv_params` holds one entry per HDV
    /// in chain order.
    pub fn new(
        layout: PartitionLayout,
        hdv_params: &[HdvParams],
        equilibrium: Equilibrium,
        dt: f64,
        rng: ChaCha8Rng,
    ) -> Result<Self> {
        if hdv_params.len() != layout.m() {
            return dim_err(format!("{} HDV parameter sets for {} HDVs", hdv_params.len(), layout.m()));
        }
        if !(dt > 0.0) {
            return Err(Error::InvalidParameter("dt must be positive".into()));
        }
        let roles = layout.roles();
        let mut it = hdv_params.iter();
        let mut params = Vec::with_capacity(roles.len());
        for r in &roles {
            params.push(match r {
                Role::Cav => HdvParams::NOMINAL,
                Role::Hdv => *it.next().unwrap(),
            });
        }
        for p in &params {
            p.validate()?;
        }
        let mut pos = vec![0.0];
        for (r, p) in roles.iter().zip(&params) {
            let s = match r {
                Role::Cav => equilibrium.s_star_cav,
                Role::Hdv => equilibrium.s_star_hdv(p)?,
            };
            pos.push(pos.last().unwrap() - s);
        }
        let vel = vec![equilibrium.v_star; pos.len()];
        Ok(Self {
            layout,
            roles,
            params,
            equilibrium,
            state: ChainState { pos, vel },
            dt,
            rng,
            noise_scale: 1.0,
            time: 0.0,
        })
    }

    /// Scales the HDV acceleration noise (0 disables it).
    pub fn with_noise_scale(mut self, scale: f64) -> Self {
        self.noise_scale = scale;
        self
    }

    pub fn state(&self) -> &ChainState {
        &self.state
    }

    pub fn state_mut(&mut self) -> &mut ChainState {
        &mut self.state
    }

    pub fn layout(&self) -> &PartitionLayout {
        &self.layout
    }

    pub fn roles(&self) -> &[Role] {
        &self.roles
    }

    pub fn equilibrium(&self) -> &Equilibrium {
        &self.equilibrium
    }

    pub fn time(&self) -> f64 {
        self.time
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    /// Advances one forward-Euler step. Returns the applied acceleration of
    /// every follower (index 0 is vehicle 1).
    pub fn step(&mut self, cav: CavDrive<'_>, head_accel: f64) -> Result<Vec<f64>> {
        if let CavDrive::Input(u) = cav {
            if u.len() != self.layout.n() {
                return dim_err(format!("{} CAV inputs for {} CAVs", u.len(), self.layout.n()));
            }
        }
        let nf = self.roles.len();
        // One noise draw per follower every step so the stream does not
        // depend on how the CAVs are driven.
        let noise: Vec<f64> = (0..nf)
            .map(|_| self.noise_scale * self.rng.gen_range(-HDV_NOISE..=HDV_NOISE))
            .collect();
        let st = &self.state;
        let mut acc = Vec::with_capacity(nf);
        let mut cav_idx = 0;
        for k in 1..=nf {
            let human = |p: &HdvParams, w: f64| {
                hdv_accel(p, st.spacing(k), st.vel[k - 1] - st.vel[k], st.vel[k], w)
            };
            let a = match (self.roles[k - 1], cav) {
                (Role::Hdv, _) => human(&self.params[k - 1], noise[k - 1]),
                (Role::Cav, CavDrive::Human) => human(&self.params[k - 1], noise[k - 1]),
                (Role::Cav, CavDrive::Input(u)) => u[cav_idx].clamp(A_MIN, A_MAX),
            };
            if self.roles[k - 1] == Role::Cav {
                cav_idx += 1;
            }
            acc.push(a);
        }
        let dt = self.dt;
        let st = &mut self.state;
        for k in 0..=nf {
            st.pos[k] += st.vel[k] * dt;
        }
        st.vel[0] = (st.vel[0] + head_accel * dt).max(0.0);
        for k in 1..=nf {
            st.vel[k] = (st.vel[k] + acc[k - 1] * dt).max(0.0);
        }
        self.time += dt;
        for k in 1..=nf {
            if st.spacing(k) <= 0.0 {
                return Err(Error::Collision { ahead: k - 1, behind: k, time: self.time });
            }
        }
        Ok(acc)
    }

    /// Velocity error of the head vehicle.
    pub fn head_error(&self) -> f64 {
        self.state.vel[0] - self.equilibrium.v_star
    }

    /// Centralized output vector (subsystem outputs in chain order).
    pub fn central_output(&self) -> DVector<f64> {
        let mut y = DVector::zeros(self.layout.central_y_dim());
        let mut r = 0;
        for i in 0..self.layout.n() {
            let veh = self.layout.subsystem_vehicles(i);
            for &k in &veh {
                y[r] = self.state.vel[k] - self.equilibrium.v_star;
                r += 1;
            }
            y[r] = self.state.spacing(veh[0]) - self.equilibrium.s_star_cav;
            r += 1;
        }
        y
    }
}

/// Discrete-time LTI model `x+ = A x + B u + H eps`, `y = C x`.
#[derive(Debug, Clone, PartialEq)]
pub struct LtiSystem {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub h: DMatrix<f64>,
    pub c: DMatrix<f64>,
}

impl LtiSystem {
    pub fn state_dim(&self) -> usize {
        self.a.nrows()
    }

    /// Simulates from `x0` with column-per-sample inputs; returns `(x_T, y)`
    /// where `y` column `k` is the output at the state before step `k`.
    pub fn rollout(&self, x0: &DVector<f64>, u: &DMatrix<f64>, eps: &DMatrix<f64>) -> (DVector<f64>, DMatrix<f64>) {
        let t = u.ncols();
        let mut x = x0.clone();
        let mut y = DMatrix::zeros(self.c.nrows(), t);
        for k in 0..t {
            y.set_column(k, &(&self.c * &x));
            x = &self.a * &x + &self.b * u.column(k) + &self.h * eps.column(k);
        }
        (x, y)
    }
}

/// Forward-Euler discretization of the small-signal model of one subsystem
/// (a CAV followed by `params.len()` HDVs). State is
/// `[v_err(CAV), v_err(HDVs), s_err(CAV), s_err(HDVs)]`, output is
/// `[v_err(CAV), v_err(HDVs), s_err(CAV)]`.
pub fn linearized_subsystem(params: &[HdvParams], v_star: f64, dt: f64) -> Result<LtiSystem> {
    let m = params.len();
    let nx = 2 * (m + 1);
    let mut ac = DMatrix::zeros(nx, nx);
    let sv = m + 1;
    ac[(sv, 0)] = -1.0;
    for (j, p) in params.iter().enumerate() {
        let (a1, a2, a3) = p.linear_coeffs(v_star)?;
        let v = j + 1;
        let s = sv + j + 1;
        ac[(v, s)] = a1;
        ac[(v, v)] = -a2;
        ac[(v, v - 1)] = a3;
        ac[(s, v - 1)] = 1.0;
        ac[(s, v)] = -1.0;
    }
    let a = DMatrix::identity(nx, nx) + ac * dt;
    let mut b = DMatrix::zeros(nx, 1);
    b[(0, 0)] = dt;
    let mut h = DMatrix::zeros(nx, 1);
    h[(sv, 0)] = dt;
    let mut c = DMatrix::zeros(m + 2, nx);
    for r in 0..=m {
        c[(r, r)] = 1.0;
    }
    c[(m + 1, sv)] = 1.0;
    Ok(LtiSystem { a, b, h, c })
}

/// Composes the subsystem models of a whole chain: subsystem `i + 1` is
/// driven by the velocity error of the last vehicle of subsystem `i`.
pub fn linearized_chain(layout: &PartitionLayout, hdv_params: &[HdvParams], v_star: f64, dt: f64) -> Result<LtiSystem> {
    if hdv_params.len() != layout.m() {
        return dim_err("one parameter set per HDV required");
    }
    let mut subs = Vec::with_capacity(layout.n());
    let mut off = 0;
    for i in 0..layout.n() {
        let m_i = layout.hdv_count(i);
        subs.push(linearized_subsystem(&hdv_params[off..off + m_i], v_star, dt)?);
        off += m_i;
    }
    let nx: usize = subs.iter().map(LtiSystem::state_dim).sum();
    let ny = layout.central_y_dim();
    let mut a = DMatrix::zeros(nx, nx);
    let mut b = DMatrix::zeros(nx, layout.n());
    let mut h = DMatrix::zeros(nx, 1);
    let mut c = DMatrix::zeros(ny, nx);
    let mut xo = 0;
    let mut yo = 0;
    let mut prev: Option<(usize, DMatrix<f64>)> = None;
    for (i, s) in subs.iter().enumerate() {
        let d = s.state_dim();
        a.view_mut((xo, xo), (d, d)).copy_from(&s.a);
        b.view_mut((xo, i), (d, 1)).copy_from(&s.b);
        match &prev {
            None => h.view_mut((xo, 0), (d, 1)).copy_from(&s.h),
            Some((pxo, last_row)) => {
                let coupling = &s.h * last_row;
                a.view_mut((xo, *pxo), (d, coupling.ncols())).copy_from(&coupling);
            }
        }
        c.view_mut((yo, xo), (s.c.nrows(), d)).copy_from(&s.c);
        // Row of C picking the last vehicle's velocity error.
        let m_i = layout.hdv_count(i);
        prev = Some((xo, s.c.rows(m_i, 1).into_owned()));
        xo += d;
        yo += s.c.nrows();
    }
    Ok(LtiSystem { a, b, h, c })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::SeedableRng;

    const NOM: HdvParams = HdvParams::NOMINAL;

    #[test]
    fn ovm_examples() {
        assert_abs_diff_eq!(hdv_accel(&NOM, 20.0, 0.0, 15.0, 0.0), 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(hdv_accel(&NOM, 40.0, 0.0, 30.0, 0.0), 0.0, epsilon = 1e-12);
        assert_eq!(hdv_accel(&NOM, 5.0, 0.0, 10.0, 0.0), -5.0);
        assert_eq!(hdv_accel(&NOM, 40.0, 5.0, 0.0, 0.0), 2.0);
    }

    #[test]
    fn equilibrium_spacing_examples() {
        assert_abs_diff_eq!(NOM.equilibrium_spacing(15.0).unwrap(), 20.0, epsilon = 1e-10);
        let p = HdvParams { s_go: 40.0, ..NOM };
        assert_abs_diff_eq!(p.equilibrium_spacing(15.0).unwrap(), 22.5, epsilon = 1e-10);
        let s = NOM.equilibrium_spacing(1e-9).unwrap();
        assert!(s > NOM.s_st && s < NOM.s_st + 0.01);
        assert!(matches!(NOM.equilibrium_spacing(0.0), Err(Error::NoInteriorEquilibrium(_))));
        assert!(NOM.equilibrium_spacing(30.0).is_err());
    }

    #[test]
    fn linear_coefficients() {
        let (a1, a2, a3) = NOM.linear_coeffs(15.0).unwrap();
        assert_abs_diff_eq!(a1, 0.6 * PI / 2.0, epsilon = 1e-9);
        assert_abs_diff_eq!(a2, 1.5);
        assert_abs_diff_eq!(a3, 0.9);
        assert!(matches!(NOM.linear_coeffs(31.0), Err(Error::Linearization(_))));
    }

    #[test]
    fn fuel_examples() {
        assert_abs_diff_eq!(fuel_rate(15.0, 0.0), 1.2216, epsilon = 1e-12);
        assert_abs_diff_eq!(fuel_rate(0.0, 0.0), 0.444);
        assert_abs_diff_eq!(fuel_rate(15.0, -2.0), 0.444);
        let r = 0.333 + 0.00108 * 100.0 + 1.2;
        assert_abs_diff_eq!(fuel_rate(10.0, 1.0), 0.444 + 0.09 * r * 10.0 + 0.054 * 10.0, epsilon = 1e-12);
    }

    fn plant(layout: Vec<usize>, seed: u64) -> Plant {
        let layout = PartitionLayout::new(layout).unwrap();
        let params = vec![NOM; layout.m()];
        Plant::new(layout, &params, Equilibrium::default(), DT, ChaCha8Rng::seed_from_u64(seed)).unwrap()
    }

    #[test]
    fn equilibrium_is_fixed_point() {
        let mut p = plant(vec![2, 1], 0).with_noise_scale(0.0);
        let x0 = p.state().clone();
        for k in 1..=400 {
            p.step(CavDrive::Input(&[0.0, 0.0]), 0.0).unwrap();
            assert!(p.central_output().amax() < 1e-9);
            for (a, b) in p.state().pos.iter().zip(&x0.pos) {
                assert_abs_diff_eq!(a - b, 15.0 * DT * k as f64, epsilon = 1e-8);
            }
        }
    }

    #[test]
    fn human_cavs_hold_equilibrium() {
        let mut p = plant(vec![1, 1], 0).with_noise_scale(0.0);
        for _ in 0..200 {
            p.step(CavDrive::Human, 0.0).unwrap();
        }
        assert!(p.central_output().amax() < 1e-9);
    }

    #[test]
    fn single_follower_spacing_decays() {
        let mut p = plant(vec![0], 0).with_noise_scale(0.0);
        // Treat the CAV as human so it follows the OVM; perturb its spacing.
        for k in 1..p.state().len() {
            p.state_mut().pos[k] -= 1.0;
        }
        let mut peak = 1.0f64;
        let mut window_max = 0.0f64;
        for k in 0..1200 {
            p.step(CavDrive::Human, 0.0).unwrap();
            window_max = window_max.max(p.central_output()[1].abs());
            if (k + 1) % 200 == 0 {
                assert!(window_max <= peak + 1e-12);
                peak = window_max;
                window_max = 0.0;
            }
        }
        assert!(p.central_output()[1].abs() < 1e-3);
    }

    #[test]
    fn brake_amplifies_in_all_hdv_chain() {
        let profile = HeadProfile::Piecewise {
            v0: 15.0,
            segments: vec![
                AccelSegment { duration: 1.0, accel: 0.0 },
                AccelSegment { duration: 1.0, accel: -5.0 },
                AccelSegment { duration: 3.0, accel: 0.0 },
                AccelSegment { duration: 5.0, accel: 1.0 },
                AccelSegment { duration: 20.0, accel: 0.0 },
            ],
        };
        let mut p = plant(vec![9], 3);
        let mut vmin = vec![f64::INFINITY; 11];
        for k in 0..profile.steps(DT) {
            p.step(CavDrive::Human, profile.accel(k, DT)).unwrap();
            for (m, v) in vmin.iter_mut().zip(&p.state().vel) {
                *m = m.min(*v);
            }
        }
        assert_abs_diff_eq!(vmin[0], 10.0, epsilon = 1e-9);
        assert!(vmin[10] < vmin[0]);
    }

    #[test]
    fn saturation_and_collision() {
        let mut p = plant(vec![0], 0).with_noise_scale(0.0);
        let acc = p.step(CavDrive::Input(&[50.0]), 0.0).unwrap();
        assert_eq!(acc, vec![A_MAX]);
        let mut p = plant(vec![0], 0);
        let err = (0..200).find_map(|_| p.step(CavDrive::Input(&[2.0]), -5.0).err());
        assert!(matches!(err, Some(Error::Collision { ahead: 0, behind: 1, .. })));
    }

    #[test]
    fn determinism() {
        let run = |seed| {
            let mut p = plant(vec![2, 2], seed);
            for _ in 0..100 {
                p.step(CavDrive::Input(&[0.3, -0.2]), 0.1).unwrap();
            }
            p.state().clone()
        };
        assert_eq!(run(5), run(5));
        assert_ne!(run(5), run(6));
    }

    #[test]
    fn head_profiles() {
        let p = HeadProfile::Piecewise {
            v0: 15.0,
            segments: vec![AccelSegment { duration: 1.0, accel: 0.0 }, AccelSegment { duration: 1.0, accel: -5.0 }],
        };
        assert_eq!(p.steps(DT), 40);
        assert_eq!(p.accel(19, DT), 0.0);
        assert_eq!(p.accel(20, DT), -5.0);
        assert_eq!(p.accel(40, DT), 0.0);
        let s = HeadProfile::Sinusoid { mean: 15.0, amplitude: 4.0, period: 10.0, hold: 1.0, duration: 30.0 };
        let mut v = 15.0;
        for k in 0..s.steps(DT) {
            v += s.accel(k, DT) * DT;
            let t = (k + 1) as f64 * DT;
            let exact = if t <= 1.0 { 15.0 } else { 15.0 + 4.0 * (2.0 * PI * (t - 1.0) / 10.0).sin() };
            assert_abs_diff_eq!(v, exact, epsilon = 1e-9);
        }
        assert!(HeadProfile::Sinusoid { mean: 3.0, amplitude: 4.0, period: 10.0, hold: 0.0, duration: 1.0 }
            .validate()
            .is_err());
    }

    #[test]
    fn cav_only_subsystem_model() {
        let sys = linearized_subsystem(&[], 15.0, DT).unwrap();
        assert_eq!(sys.state_dim(), 2);
        assert_eq!(sys.b.as_slice(), &[DT, 0.0]);
        assert_eq!(sys.h.as_slice(), &[0.0, DT]);
        assert_eq!(sys.c, DMatrix::identity(2, 2));
    }

    /// Small-signal response of the nonlinear plant against the discrete model.
    fn pulse_gap(amp: f64, v_star: f64) -> f64 {
        let params = [NOM, HdvParams { alpha: 0.5, beta: 1.0, s_go: 33.0, ..NOM }];
        let layout = PartitionLayout::new(vec![2]).unwrap();
        let eq = Equilibrium { v_star, s_star_cav: 20.0 };
        let mut p = Plant::new(layout, &params, eq, DT, ChaCha8Rng::seed_from_u64(0))
            .unwrap()
            .with_noise_scale(0.0);
        let sys = linearized_subsystem(&params, v_star, DT).unwrap();
        let mut x = DVector::zeros(sys.state_dim());
        let mut gap = 0.0f64;
        for k in 0..100 {
            let u = if k < 10 { amp } else { 0.0 };
            p.step(CavDrive::Input(&[u]), 0.0).unwrap();
            x = &sys.a * &x + &sys.b * u;
            gap = gap.max((p.central_output() - &sys.c * &x).amax());
        }
        gap
    }

    #[test]
    fn linear_model_matches_small_pulse() {
        assert!(pulse_gap(0.01, 15.0) < 1e-3);
    }

    #[test]
    fn linearization_error_is_second_order() {
        // At v* = v_max / 2 the desired-velocity curve has an inflection point
        // and the quadratic term vanishes, so probe a different equilibrium.
        let ratio = pulse_gap(0.2, 10.0) / pulse_gap(0.1, 10.0);
        assert!((ratio - 4.0).abs() < 4.0 * 0.5, "ratio {ratio}");
    }

    #[test]
    fn chain_model_matches_subsystem_composition() {
        let layout = PartitionLayout::new(vec![1, 0, 2]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let params: Vec<HdvParams> = (0..3).map(|_| HdvParams::draw(&mut rng)).collect();
        let chain = linearized_chain(&layout, &params, 15.0, DT).unwrap();
        assert_eq!(chain.c.nrows(), layout.central_y_dim());
        let t = 60;
        let u = DMatrix::from_fn(3, t, |_, _| rng.gen_range(-1.0..1.0));
        let e = DMatrix::from_fn(1, t, |_, _| rng.gen_range(-1.0..1.0));
        let (_, y) = chain.rollout(&DVector::zeros(chain.state_dim()), &u, &e);
        let subs = [
            linearized_subsystem(&params[0..1], 15.0, DT).unwrap(),
            linearized_subsystem(&[], 15.0, DT).unwrap(),
            linearized_subsystem(&params[1..3], 15.0, DT).unwrap(),
        ];
        let mut eps = e.clone();
        for (i, s) in subs.iter().enumerate() {
            let (_, yi) = s.rollout(&DVector::zeros(s.state_dim()), &u.rows(i, 1).into_owned(), &eps);
            let off = layout.y_offset(i);
            assert!((y.rows(off, yi.nrows()) - &yi).amax() < 1e-12);
            eps = yi.rows(layout.hdv_count(i), 1).into_owned();
        }
    }

    #[test]
    fn heterogeneous_draws_stay_in_range() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..500 {
            let p = HdvParams::draw(&mut rng);
            assert!((0.4..=0.8).contains(&p.alpha));
            assert!((0.7..=1.1).contains(&p.beta));
            assert!((30.0..=40.0).contains(&p.s_go));
            p.validate().unwrap();
        }
    }
}
