//! Dense convex QP machinery.

mod active;
mod boxqp;
mod kkt;

pub use active::{solve_active_set, ActiveSetSettings, ActiveSetSolver};
pub use boxqp::{project_box, project_interval, solve_box_qp, BoxQp, BoxQpSolver, QpSettings, QpSolution, QpStatus};
pub use kkt::{factor_kkt, factor_kkt_auto, kkt_matrix, EqQp, KktFactor, FALLBACK_REG};
