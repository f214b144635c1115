//! Distributed model predictive control for leader-following consensus of
//! input-constrained linear multi-agent systems.
//!
//! Each follower solves a local sum-of-norms receding-horizon problem with a
//! terminal equality on its own assumed terminal state. Assumed terminal
//! states are advanced by a discrete-time consensus protocol whose gain comes
//! from a modified algebraic Riccati equation.

pub mod dmpc_engine;
pub mod linalg;
pub mod local_ocp;
pub mod plant_models;
pub mod sim_harness;
pub mod terminal_gain;
pub mod topology;
pub mod trajectory;

pub use plant_models::{FormationOffset, SystemModel};
pub use terminal_gain::TerminalGain;
pub use topology::{Peer, Topology};
pub use trajectory::{Trajectory, TrajectoryRole};
