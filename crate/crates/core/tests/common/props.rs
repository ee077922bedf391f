//! Invariant checks shared by the property-test target and the acceptance
//! runner. Each check takes a generated input and returns a proptest result.

use deeplcc::coop::build_selectors;
use deeplcc::qp::{project_box, project_interval, solve_active_set, ActiveSetSettings, BoxQp, EqQp, QpStatus};
use deeplcc::traj::{build_hankel, is_persistently_exciting, partition_centralized_log, restack, TrajectoryLog};
use deeplcc::PartitionLayout;
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use proptest::test_runner::TestCaseError;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const CASES: u32 = 1000;

type Check = std::result::Result<(), TestCaseError>;

fn random_matrix(rng: &mut ChaCha8Rng, r: usize, c: usize) -> DMatrix<f64> {
    DMatrix::from_fn(r, c, |_, _| rng.gen_range(-1.0..1.0))
}

fn random_vector(rng: &mut ChaCha8Rng, n: usize) -> DVector<f64> {
    DVector::from_fn(n, |_, _| rng.gen_range(-1.0..1.0))
}

pub fn hankel_input() -> impl Strategy<Value = (u64, usize, usize, f64)> {
    (any::<u64>(), 1usize..4, 1usize..30, 0.0f64..1.0)
}

pub fn hankel_shift_structure((seed, dim, len, order_frac): (u64, usize, usize, f64)) -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let seq = random_matrix(&mut rng, dim, len);
    let order = 1 + ((len - 1) as f64 * order_frac) as usize;
    let h = build_hankel(&seq, order).unwrap();
    let cols = len - order + 1;
    prop_assert_eq!(h.shape(), (order * dim, cols));
    for j in 0..cols {
        for k in 0..order {
            for r in 0..dim {
                prop_assert_eq!(h[(k * dim + r, j)], seq[(r, j + k)]);
            }
        }
    }
    // block (k + 1, j) equals block (k, j + 1)
    for j in 0..cols.saturating_sub(1) {
        for k in 0..order - 1 {
            prop_assert_eq!(h.view(((k + 1) * dim, j), (dim, 1)), h.view((k * dim, j + 1), (dim, 1)));
        }
    }
    Ok(())
}

pub fn pe_input() -> impl Strategy<Value = (u64, usize, usize, usize, usize)> {
    (any::<u64>(), 1usize..3, 4usize..40, 2usize..12, 0usize..3)
}

pub fn pe_monotonicity((seed, dim, len, order, period_kind): (u64, usize, usize, usize, usize)) -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut seq = random_matrix(&mut rng, dim, len);
    // short periods make PE fail at higher orders
    if period_kind > 0 {
        let period = period_kind + 1;
        for t in period..len {
            for r in 0..dim {
                seq[(r, t)] = seq[(r, t - period)];
            }
        }
    }
    let order = order.min(len);
    let tol = 1e-9;
    if is_persistently_exciting(&seq, order, tol).unwrap() {
        prop_assert!(is_persistently_exciting(&seq, order - 1, tol).unwrap());
    }
    let prefix = seq.columns(0, len - 1).into_owned();
    if order < len && is_persistently_exciting(&prefix, order, tol).unwrap() {
        prop_assert!(is_persistently_exciting(&seq, order, tol).unwrap());
    }
    Ok(())
}

pub fn partition_input() -> impl Strategy<Value = (u64, Vec<usize>, usize)> {
    (any::<u64>(), proptest::collection::vec(0usize..4, 1..5), 1usize..20)
}

pub fn partition_round_trip((seed, counts, len): (u64, Vec<usize>, usize)) -> Check {
    let layout = PartitionLayout::new(counts).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let u = random_matrix(&mut rng, layout.n(), len);
    let eps = random_vector(&mut rng, len);
    let y = random_matrix(&mut rng, layout.central_y_dim(), len);
    let log = TrajectoryLog::new(u.clone(), eps.clone(), y.clone(), 0.05).unwrap();
    let parts = partition_centralized_log(&log, &layout).unwrap();
    prop_assert_eq!(parts.len(), layout.n());
    let (u2, y2) = restack(&parts).unwrap();
    prop_assert_eq!(u2, u);
    prop_assert_eq!(y2, y);
    prop_assert_eq!(parts[0].eps(), eps);
    for i in 1..layout.n() {
        let last = parts[i - 1].y().row(layout.hdv_count(i - 1)).transpose();
        prop_assert_eq!(parts[i].eps(), last);
        prop_assert_eq!(parts[i].y_dim(), layout.hdv_count(i) + 2);
    }
    let again = PartitionLayout::from_cav_positions(&layout.cav_positions(), layout.vehicle_count()).unwrap();
    prop_assert_eq!(again.hdv_counts(), layout.hdv_counts());
    Ok(())
}

pub fn selector_input() -> impl Strategy<Value = (u64, usize, usize)> {
    (any::<u64>(), 0usize..5, 1usize..30)
}

pub fn selector_extraction((seed, m_i, horizon): (u64, usize, usize)) -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let y = random_matrix(&mut rng, m_i + 2, horizon);
    let flat = DVector::from_column_slice(y.as_slice());
    let sel = build_selectors(m_i, horizon);
    let ky = &sel.k * &flat;
    let py = &sel.p * &flat;
    for t in 0..horizon {
        prop_assert_eq!(ky[t], y[(m_i, t)]);
        prop_assert_eq!(py[t], y[(m_i + 1, t)]);
    }
    prop_assert_eq!((&sel.k * sel.p.transpose()).amax(), 0.0);
    prop_assert_eq!(&sel.k * sel.k.transpose(), DMatrix::identity(horizon, horizon));
    Ok(())
}

pub fn projection_input() -> impl Strategy<Value = (u64, usize, f64)> {
    (any::<u64>(), 1usize..12, 0.1f64..10.0)
}

pub fn projection_idempotence((seed, n, scale): (u64, usize, f64)) -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let v = random_vector(&mut rng, n) * scale;
    let a = random_vector(&mut rng, n);
    let b = random_vector(&mut rng, n);
    let lower = a.zip_map(&b, f64::min);
    let upper = a.zip_map(&b, f64::max);
    let p = project_box(&v, &lower, &upper);
    prop_assert_eq!(project_box(&p, &lower, &upper), p.clone());
    for i in 0..n {
        prop_assert!(lower[i] <= p[i] && p[i] <= upper[i]);
    }
    let w = DVector::from_fn(n, |i, _| rng.gen_range(lower[i]..=upper[i]));
    prop_assert!((&p - &v).norm() <= (&w - &v).norm() + 1e-12);
    let lo = lower.min();
    let hi = lo + scale;
    let q = project_interval(&v, lo, hi);
    prop_assert_eq!(project_interval(&q, lo, hi), q.clone());
    prop_assert!(q.iter().all(|x| (lo..=hi).contains(x)));
    Ok(())
}

pub fn feasibility_input() -> impl Strategy<Value = (u64, usize, usize, bool)> {
    (any::<u64>(), 1usize..7, 0usize..3, any::<bool>())
}

pub fn box_equality_feasibility((seed, n, eq_rows, general): (u64, usize, usize, bool)) -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let eq_rows = eq_rows.min(n - 1);
    let l = random_matrix(&mut rng, n, n);
    let h = &l * l.transpose() + DMatrix::identity(n, n) * 0.1;
    let h = (&h + h.transpose()) * 0.5;
    let q = random_vector(&mut rng, n) * 5.0;
    let a = random_matrix(&mut rng, eq_rows, n);
    let x0 = random_vector(&mut rng, n);
    let b = &a * &x0;
    let g = general.then(|| random_matrix(&mut rng, n + 1, n));
    let gx0 = g.as_ref().map_or(x0.clone(), |g| g * &x0);
    let rows = gx0.len();
    let mut lower = DVector::from_fn(rows, |i, _| gx0[i] - rng.gen_range(0.0..1.0));
    let mut upper = DVector::from_fn(rows, |i, _| gx0[i] + rng.gen_range(0.0..1.0));
    if rows > 1 {
        lower[0] = f64::NEG_INFINITY;
        upper[rows - 1] = f64::INFINITY;
    }
    let prob = BoxQp::new(EqQp::new(h, q, a, b).unwrap(), g, lower, upper).unwrap();
    let sol = solve_active_set(&prob, ActiveSetSettings::default()).unwrap();
    prop_assert_eq!(sol.status, QpStatus::Solved);
    prop_assert!(prob.violation(&sol.x) <= 1e-8, "violation {}", prob.violation(&sol.x));
    prop_assert!(prob.objective(&sol.x) <= prob.objective(&x0) + 1e-9);
    Ok(())
}
