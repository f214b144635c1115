use nalgebra::{DMatrix, DVector};

/// Which role a horizon-indexed trajectory plays in a round.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrajectoryRole {
    Assumed,
    Predicted,
    Optimal,
}

/// States `k = 0..=N_p` and inputs `k = 0..N_p` over one prediction horizon.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub states: Vec<DVector<f64>>,
    pub inputs: Vec<DVector<f64>>,
    pub role: TrajectoryRole,
}

impl Trajectory {
    /// Rolls `x0` forward through `x(k+1) = A x(k) + B u(k)`.
    pub fn rollout(
        a: &DMatrix<f64>,
        b: &DMatrix<f64>,
        x0: &DVector<f64>,
        inputs: Vec<DVector<f64>>,
        role: TrajectoryRole,
    ) -> Self {
        let mut states = Vec::with_capacity(inputs.len() + 1);
        states.push(x0.clone());
        for u in &inputs {
            let next = a * states.last().unwrap() + b * u;
            states.push(next);
        }
        Self { states, inputs, role }
    }

    pub fn horizon(&self) -> usize {
        self.inputs.len()
    }

    pub fn terminal(&self) -> &DVector<f64> {
        self.states.last().expect("trajectory has at least one state")
    }

    /// Largest violation of `x(k+1) = A x(k) + B u(k)` over the horizon.
    pub fn dynamics_defect(&self, a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
        self.inputs
            .iter()
            .enumerate()
            .map(|(k, u)| (a * &self.states[k] + b * u - &self.states[k + 1]).amax())
            .fold(0.0, f64::max)
    }

    pub fn with_role(mut self, role: TrajectoryRole) -> Self {
        self.role = role;
        self
    }
}
