//! Decomposition of a vehicle chain into car-following leading cruise control
//! subsystems: one CAV followed by `m_i` HDVs.
//!
//! Vehicles are indexed from 1 (the vehicle directly behind the head vehicle,
//! which is always CAV 1) to `n + m`. The output vector of subsystem `i` is
//! `[v_err(CAV i), v_err(HDV 1), .., v_err(HDV m_i), s_err(CAV i)]`, and the
//! centralized output stacks the subsystem outputs in chain order.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Role {
    Cav,
    Hdv,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PartitionLayout {
    hdv_counts: Vec<usize>,
}

impl PartitionLayout {
    pub fn new(hdv_counts: Vec<usize>) -> Result<Self> {
        if hdv_counts.is_empty() {
            return Err(Error::InvalidParameter("layout needs at least one CAV".into()));
        }
        Ok(Self { hdv_counts })
    }

    /// Builds the layout from 1-based CAV positions in a chain of `vehicles`
    /// followers. The first follower must be a CAV.
    pub fn from_cav_positions(positions: &[usize], vehicles: usize) -> Result<Self> {
        if positions.first() != Some(&1) {
            return Err(Error::InvalidParameter(
                "the vehicle behind the head must be a CAV".into(),
            ));
        }
        if positions.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::InvalidParameter("CAV positions must increase".into()));
        }
        let last = *positions.last().unwrap();
        if last > vehicles {
            return Err(Error::InvalidParameter(format!(
                "CAV position {last} beyond chain length {vehicles}"
            )));
        }
        let mut counts: Vec<usize> = positions.windows(2).map(|w| w[1] - w[0] - 1).collect();
        counts.push(vehicles - last);
        Self::new(counts)
    }

    /// Number of CAVs (= number of subsystems).
    pub fn n(&self) -> usize {
        self.hdv_counts.len()
    }

    /// Total number of HDVs.
    pub fn m(&self) -> usize {
        self.hdv_counts.iter().sum()
    }

    pub fn hdv_counts(&self) -> &[usize] {
        &self.hdv_counts
    }

    pub fn hdv_count(&self, i: usize) -> usize {
        self.hdv_counts[i]
    }

    pub fn vehicle_count(&self) -> usize {
        self.n() + self.m()
    }

    /// 1-based chain position of CAV `i` (0-based subsystem index).
    pub fn cav_position(&self, i: usize) -> usize {
        1 + i + self.hdv_counts[..i].iter().sum::<usize>()
    }

    pub fn cav_positions(&self) -> Vec<usize> {
        (0..self.n()).map(|i| self.cav_position(i)).collect()
    }

    /// 1-based chain positions of the vehicles of subsystem `i`, CAV first.
    pub fn subsystem_vehicles(&self, i: usize) -> Vec<usize> {
        let p = self.cav_position(i);
        (p..=p + self.hdv_counts[i]).collect()
    }

    /// Roles of followers 1..=n+m (index 0 of the result is vehicle 1).
    pub fn roles(&self) -> Vec<Role> {
        let mut roles = Vec::with_capacity(self.vehicle_count());
        for &m_i in &self.hdv_counts {
            roles.push(Role::Cav);
            roles.extend(std::iter::repeat(Role::Hdv).take(m_i));
        }
        roles
    }

    pub fn subsystem_y_dim(&self, i: usize) -> usize {
        self.hdv_counts[i] + 2
    }

    pub fn central_y_dim(&self) -> usize {
        2 * self.n() + self.m()
    }

    /// Row offset of subsystem `i`'s output block inside the centralized output.
    pub fn y_offset(&self, i: usize) -> usize {
        (0..i).map(|j| self.subsystem_y_dim(j)).sum()
    }

    /// Rows of the centralized output holding CAV spacing errors.
    pub fn central_spacing_rows(&self) -> Vec<usize> {
        (0..self.n())
            .map(|i| self.y_offset(i) + self.hdv_counts[i] + 1)
            .collect()
    }

    /// Channel names of the centralized output, in row order.
    pub fn central_y_names(&self) -> Vec<String> {
        (0..self.n()).flat_map(|i| self.subsystem_y_names(i)).collect()
    }

    pub fn subsystem_y_names(&self, i: usize) -> Vec<String> {
        let vehicles = self.subsystem_vehicles(i);
        let mut names: Vec<String> = vehicles.iter().map(|v| format!("v_err_{v}")).collect();
        names.push(format!("s_err_{}", vehicles[0]));
        names
    }
}
