//! Agent dynamics: the discrete-time pair `(A, B)` with its input box, exact
//! zero-order-hold sampling, and the two vehicle models used by the shipped
//! scenarios (AUV diving and CAV longitudinal motion).

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::linalg;
use crate::topology::Peer;
use crate::trajectory::{Trajectory, TrajectoryRole};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("input box must contain the origin in its interior (component {component}: [{lower}, {upper}])")]
    BoxNotInterior { component: usize, lower: f64, upper: f64 },
    #[error("(A, B) is not controllable (controllability rank {rank} < {n})")]
    NotControllable { rank: usize, n: usize },
    #[error("I_y - M_qdot is zero")]
    DegenerateInertia,
    #[error("parameter `{0}` must be positive")]
    NonPositiveParameter(&'static str),
}

/// Discrete-time agent model `x(t+1) = A x(t) + B u(t)` with `u ∈ [lower, upper]`.
#[derive(Debug, Clone, PartialEq)]
pub struct SystemModel {
    a: DMatrix<f64>,
    b: DMatrix<f64>,
    input_lower: DVector<f64>,
    input_upper: DVector<f64>,
}

impl SystemModel {
    /// Validates dimensions, box interiority and controllability of `(A, B)`.
    pub fn new(
        a: DMatrix<f64>,
        b: DMatrix<f64>,
        input_lower: DVector<f64>,
        input_upper: DVector<f64>,
    ) -> Result<Self, ModelError> {
        let n = a.nrows();
        if !a.is_square() || n == 0 {
            return Err(ModelError::DimensionMismatch(format!(
                "A is {}x{}, expected non-empty square",
                a.nrows(),
                a.ncols()
            )));
        }
        if b.nrows() != n || b.ncols() == 0 {
            return Err(ModelError::DimensionMismatch(format!(
                "B is {}x{}, expected {n}xm with m >= 1",
                b.nrows(),
                b.ncols()
            )));
        }
        let m = b.ncols();
        if input_lower.len() != m || input_upper.len() != m {
            return Err(ModelError::DimensionMismatch(format!(
                "input bounds have lengths {}/{}, expected {m}",
                input_lower.len(),
                input_upper.len()
            )));
        }
        for c in 0..m {
            let (lo, hi) = (input_lower[c], input_upper[c]);
            if !(lo < 0.0 && 0.0 < hi) {
                return Err(ModelError::BoxNotInterior { component: c, lower: lo, upper: hi });
            }
        }
        let rank = linalg::rank(&linalg::controllability_matrix(&a, &b), 1e-10);
        if rank < n {
            return Err(ModelError::NotControllable { rank, n });
        }
        Ok(Self { a, b, input_lower, input_upper })
    }

    pub fn a(&self) -> &DMatrix<f64> {
        &self.a
    }

    pub fn b(&self) -> &DMatrix<f64> {
        &self.b
    }

    pub fn state_dim(&self) -> usize {
        self.a.nrows()
    }

    pub fn input_dim(&self) -> usize {
        self.b.ncols()
    }

    pub fn input_lower(&self) -> &DVector<f64> {
        &self.input_lower
    }

    pub fn input_upper(&self) -> &DVector<f64> {
        &self.input_upper
    }

    /// Largest amount by which `u` leaves the input box (0 when inside).
    pub fn box_violation(&self, u: &DVector<f64>) -> f64 {
        u.iter()
            .enumerate()
            .map(|(c, &v)| (self.input_lower[c] - v).max(v - self.input_upper[c]).max(0.0))
            .fold(0.0, f64::max)
    }

    /// `A x + B u`. The plant never clips its input.
    pub fn step(&self, x: &DVector<f64>, u: &DVector<f64>) -> Result<DVector<f64>, ModelError> {
        if x.len() != self.state_dim() || u.len() != self.input_dim() {
            return Err(ModelError::DimensionMismatch(format!(
                "state/input lengths {}/{}, expected {}/{}",
                x.len(),
                u.len(),
                self.state_dim(),
                self.input_dim()
            )));
        }
        Ok(&self.a * x + &self.b * u)
    }

    /// Zero-input propagation `A^k x0`, the trajectory the leader broadcasts.
    pub fn leader_trajectory(&self, x0: &DVector<f64>, horizon: usize) -> Trajectory {
        let zeros = vec![DVector::zeros(self.input_dim()); horizon];
        Trajectory::rollout(&self.a, &self.b, x0, zeros, TrajectoryRole::Assumed)
    }
}

/// Free function form of [`SystemModel::step`].
pub fn plant_step(model: &SystemModel, x: &DVector<f64>, u: &DVector<f64>) -> Result<DVector<f64>, ModelError> {
    model.step(x, u)
}

/// Exact sampling of `ẋ = A_c x + B_c u` under a zero-order hold.
///
/// Both matrices come from one exponential of the augmented generator
/// `[[A_c, B_c], [0, 0]]·Δt`.
pub fn zoh_discretize(a_c: &DMatrix<f64>, b_c: &DMatrix<f64>, dt: f64) -> (DMatrix<f64>, DMatrix<f64>) {
    let n = a_c.nrows();
    let m = b_c.ncols();
    let mut gen = DMatrix::zeros(n + m, n + m);
    gen.view_mut((0, 0), (n, n)).copy_from(&(a_c * dt));
    gen.view_mut((0, n), (n, m)).copy_from(&(b_c * dt));
    let e = expm(&gen);
    (
        e.view((0, 0), (n, n)).into_owned(),
        e.view((0, n), (n, m)).into_owned(),
    )
}

/// Matrix exponential by scaling and squaring of a truncated Taylor series.
pub fn expm(m: &DMatrix<f64>) -> DMatrix<f64> {
    let n = m.nrows();
    let norm = m.row_iter().map(|r| r.iter().map(|v| v.abs()).sum::<f64>()).fold(0.0, f64::max);
    let mut squarings = 0u32;
    if norm > 0.5 {
        squarings = (norm / 0.5).log2().ceil() as u32;
    }
    let scaled = m / 2f64.powi(squarings as i32);

    let mut result = DMatrix::identity(n, n);
    let mut term = DMatrix::identity(n, n);
    for k in 1..=30 {
        term = &term * &scaled / k as f64;
        if term.amax() == 0.0 {
            break;
        }
        result += &term;
        if term.amax() <= f64::EPSILON * 1e-3 * result.amax() {
            break;
        }
    }
    for _ in 0..squarings {
        result = &result * &result;
    }
    result
}

/// Simplified pitch-plane diving dynamics with state `[z, θ, q]` and the
/// stern-plane angle as input.
#[derive(Debug, Clone, PartialEq)]
pub struct AuvParams {
    pub surge_speed: f64,
    pub m_qdot: f64,
    pub m_uq: f64,
    pub m_uu_delta_s: f64,
    pub z_g: f64,
    pub z_b: f64,
    pub weight: f64,
    pub buoyancy: f64,
    pub i_y: f64,
    pub stern_lower: f64,
    pub stern_upper: f64,
}

impl AuvParams {
    pub fn continuous_model(&self) -> Result<(DMatrix<f64>, DMatrix<f64>), ModelError> {
        let denom = self.i_y - self.m_qdot;
        if denom == 0.0 {
            return Err(ModelError::DegenerateInertia);
        }
        let u = self.surge_speed;
        let restoring = self.z_g * self.weight - self.z_b * self.buoyancy;
        let a_c = DMatrix::from_row_slice(
            3,
            3,
            &[
                0.0, -u, 0.0, //
                0.0, 0.0, 1.0, //
                0.0, -restoring / denom, self.m_uq * u / denom,
            ],
        );
        let b_c = DMatrix::from_column_slice(3, 1, &[0.0, 0.0, self.m_uu_delta_s * u * u / denom]);
        Ok((a_c, b_c))
    }
}

pub fn auv_continuous_model(params: &AuvParams) -> Result<(DMatrix<f64>, DMatrix<f64>), ModelError> {
    params.continuous_model()
}

/// Vehicle physics needed to recover the driveline torque command.
#[derive(Debug, Clone, PartialEq)]
pub struct DrivelineParams {
    pub mass: f64,
    pub tire_radius: f64,
    pub efficiency: f64,
    pub drag_coefficient: f64,
    pub rolling_coefficient: f64,
    pub gravity: f64,
    pub slope: f64,
}

impl DrivelineParams {
    /// Torque command that turns the nonlinear longitudinal dynamics into
    /// the first-order lag `τȧ + a = u`.
    pub fn feedback_torque(&self, tau: f64, v: f64, a: f64, u: f64) -> f64 {
        let resist = self.mass * self.gravity * (self.rolling_coefficient * self.slope.cos() + self.slope.sin());
        (self.tire_radius / self.efficiency)
            * (self.drag_coefficient * v * (2.0 * tau * a + v) + resist + self.mass * u)
    }
}

/// Longitudinal vehicle model with state `[p, v, a]` and desired
/// acceleration as input.
#[derive(Debug, Clone, PartialEq)]
pub struct CavParams {
    pub tau: f64,
    pub input_lower: f64,
    pub input_upper: f64,
    pub spacing: f64,
    pub driveline: Option<DrivelineParams>,
}

impl CavParams {
    pub fn continuous_model(&self) -> Result<(DMatrix<f64>, DMatrix<f64>), ModelError> {
        if self.tau <= 0.0 {
            return Err(ModelError::NonPositiveParameter("tau"));
        }
        let a_c = DMatrix::from_row_slice(
            3,
            3,
            &[
                0.0, 1.0, 0.0, //
                0.0, 0.0, 1.0, //
                0.0, 0.0, -1.0 / self.tau,
            ],
        );
        let b_c = DMatrix::from_column_slice(3, 1, &[0.0, 0.0, 1.0 / self.tau]);
        Ok((a_c, b_c))
    }
}

pub fn cav_continuous_model(params: &CavParams) -> Result<(DMatrix<f64>, DMatrix<f64>), ModelError> {
    params.continuous_model()
}

pub fn feedback_linearization_torque(driveline: &DrivelineParams, tau: f64, v: f64, a: f64, u: f64) -> f64 {
    driveline.feedback_torque(tau, v, a, u)
}

/// Acceleration maneuver of a dynamic leader, sampled at `t·Δt`.
#[derive(Debug, Clone, PartialEq)]
pub enum LeaderProfile {
    /// Zero input.
    None,
    /// `0` up to 2 s, `sin π(t−5)` on (2, 6] s, `0` afterwards.
    CavSine,
    /// Piecewise-constant table of `(time, input)` breakpoints; the input is
    /// zero before the first breakpoint.
    Table(Vec<(f64, DVector<f64>)>),
}

impl LeaderProfile {
    pub fn is_zero_input(&self) -> bool {
        matches!(self, LeaderProfile::None)
    }

    pub fn input_at(&self, time: f64, input_dim: usize) -> DVector<f64> {
        match self {
            LeaderProfile::None => DVector::zeros(input_dim),
            LeaderProfile::CavSine => DVector::from_element(input_dim, cav_leader_acceleration(time)),
            LeaderProfile::Table(rows) => rows
                .iter()
                .rev()
                .find(|(t, _)| *t <= time)
                .map(|(_, u)| u.clone())
                .unwrap_or_else(|| DVector::zeros(input_dim)),
        }
    }
}

pub fn cav_leader_acceleration(time: f64) -> f64 {
    if time <= 2.0 || time > 6.0 {
        0.0
    } else {
        (PI * (time - 5.0)).sin()
    }
}

/// Per-follower target displacement `δ_i`; follower `i` should settle at
/// `x_0 − δ_i`. The leader's offset is zero.
#[derive(Debug, Clone, PartialEq)]
pub struct FormationOffset {
    offsets: Vec<DVector<f64>>,
    leader: DVector<f64>,
}

impl FormationOffset {
    pub fn zero(followers: usize, state_dim: usize) -> Self {
        Self {
            offsets: vec![DVector::zeros(state_dim); followers],
            leader: DVector::zeros(state_dim),
        }
    }

    /// Platoon spacing: follower number `i` (1-based) sits `i·d_0` behind.
    pub fn platoon(followers: usize, state_dim: usize, spacing: f64) -> Self {
        let offsets = (0..followers)
            .map(|idx| {
                let mut d = DVector::zeros(state_dim);
                d[0] = (idx + 1) as f64 * spacing;
                d
            })
            .collect();
        Self { offsets, leader: DVector::zeros(state_dim) }
    }

    pub fn from_vectors(offsets: Vec<DVector<f64>>) -> Self {
        let n = offsets.first().map_or(0, |d| d.len());
        Self { offsets, leader: DVector::zeros(n) }
    }

    pub fn follower(&self, i: usize) -> &DVector<f64> {
        &self.offsets[i]
    }

    pub fn of(&self, peer: Peer) -> &DVector<f64> {
        match peer {
            Peer::Leader => &self.leader,
            Peer::Follower(j) => &self.offsets[j],
        }
    }

    pub fn len(&self) -> usize {
        self.offsets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.offsets.is_empty()
    }
}
