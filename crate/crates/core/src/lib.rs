//! Data-enabled predictive leading cruise control for mixed traffic.
//!
//! The crate covers trajectory data and Hankel matrices ([`traj`]), the
//! nonlinear traffic plant ([`sim`]), dense QP solvers ([`qp`]), the
//! centralized controller ([`central`]), the cooperative decomposition
//! ([`coop`]), its distributed ADMM solver ([`admm`]) and the experiment
//! harness ([`experiments`]).

pub mod error;
pub mod layout;
pub mod qp;
pub mod central;
pub mod coop;
pub mod admm;
pub mod experiments;
pub mod sim;
pub mod traj;

pub use error::{Error, Result};
pub use layout::{PartitionLayout, Role};
