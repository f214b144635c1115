//! Synchronous DMPC rounds: assumed-trajectory exchange, local solves,
//! first-input application and the terminal update of the assumed tail.

use std::collections::BTreeMap;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use thiserror::Error;

use crate::local_ocp::{self, OcpError, ProblemData, SolverTolerances, Weights};
use crate::plant_models::{FormationOffset, LeaderProfile, ModelError, SystemModel};
use crate::terminal_gain::TerminalGain;
use crate::topology::{Peer, Topology};
use crate::trajectory::{Trajectory, TrajectoryRole};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EngineError {
    #[error("initial input of agent {} at step {k} leaves the box by {violation:e}", agent + 1)]
    InitInputOutOfBounds { agent: usize, k: usize, violation: f64 },
    #[error("local problem of agent {} infeasible at t = {t}: {source}", agent + 1)]
    LocalInfeasible { agent: usize, t: usize, source: OcpError },
    #[error("terminal input of agent {} at t = {t} leaves the box by {violation:e}", agent + 1)]
    TerminalInputOutOfBounds { agent: usize, t: usize, violation: f64 },
    #[error("agent setup: {0}")]
    Setup(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

impl EngineError {
    /// Round index at which the run stopped, when the error comes from a round.
    pub fn round(&self) -> Option<usize> {
        match self {
            EngineError::LocalInfeasible { t, .. } | EngineError::TerminalInputOutOfBounds { t, .. } => Some(*t),
            _ => None,
        }
    }
}

/// One follower as seen by the engine. `controller` is the model used for
/// prediction and the terminal law; `plant` is what the input is applied to.
#[derive(Debug, Clone)]
pub struct AgentRuntime {
    pub id: usize,
    pub controller: SystemModel,
    pub plant: SystemModel,
    pub weights: Weights,
    pub gain: Arc<TerminalGain>,
    pub in_neighbors: Vec<Peer>,
    pub out_neighbors: Vec<usize>,
    pub state: DVector<f64>,
    pub assumed: Trajectory,
}

/// Assumed states broadcast by `sender` for round `t`.
#[derive(Debug, Clone, PartialEq)]
pub struct RoundMessage {
    pub sender: Peer,
    pub t: usize,
    pub states: Vec<DVector<f64>>,
}

#[derive(Debug, Clone)]
pub struct Leader {
    pub model: SystemModel,
    pub state: DVector<f64>,
    pub profile: LeaderProfile,
}

/// Uniform additive input disturbance in `[-bound, bound]` per component.
#[derive(Debug, Clone)]
pub struct Disturbance {
    pub bound: f64,
    rng: ChaCha8Rng,
}

impl Disturbance {
    pub fn new(bound: f64, seed: u64) -> Self {
        Self { bound, rng: ChaCha8Rng::seed_from_u64(seed) }
    }

    fn sample(&mut self, dim: usize) -> DVector<f64> {
        if self.bound == 0.0 {
            return DVector::zeros(dim);
        }
        DVector::from_fn(dim, |_, _| self.rng.random_range(-self.bound..=self.bound))
    }
}

/// Cost and feasibility of the shifted previous optimum in the new problem.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ShiftCheck {
    pub feasible: bool,
    pub cost: f64,
    pub box_violation: f64,
    pub terminal_violation: f64,
}

/// Per-agent outcome of one round.
#[derive(Debug, Clone, PartialEq)]
pub struct AgentStep {
    pub state: DVector<f64>,
    pub commanded: DVector<f64>,
    pub applied: DVector<f64>,
    pub objective: f64,
    pub used_incumbent: bool,
    /// `x_i^a(N_p|t)`, the terminal state the round was solved against.
    pub assumed_terminal: DVector<f64>,
    /// `x_i^*(N_p|t)`.
    pub optimal_terminal: DVector<f64>,
    /// Appended `u_i^a(N_p−1|t+1)`.
    pub terminal_input: DVector<f64>,
    /// Appended `x_i^a(N_p|t+1)`.
    pub next_assumed_terminal: DVector<f64>,
    /// `None` at `t = 0`, where the assumed trajectory is the initialization.
    pub shift: Option<ShiftCheck>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RoundReport {
    pub t: usize,
    pub leader_state: DVector<f64>,
    /// `A^{N_p} x_0(t)`.
    pub leader_terminal: DVector<f64>,
    pub leader_input: DVector<f64>,
    pub agents: Vec<AgentStep>,
}

/// Engine configuration shared by all agents.
#[derive(Debug, Clone)]
pub struct EngineConfig {
    pub horizon: usize,
    pub dt: f64,
    pub tolerances: SolverTolerances,
}

#[derive(Debug, Clone)]
pub struct Engine {
    pub config: EngineConfig,
    pub agents: Vec<AgentRuntime>,
    pub leader: Leader,
    pub offsets: FormationOffset,
    pub disturbance: Option<Disturbance>,
    pub t: usize,
}

/// Per-agent description handed to [`Engine::new`].
#[derive(Debug, Clone)]
pub struct AgentSpec {
    pub controller: SystemModel,
    pub plant: SystemModel,
    pub weights: Weights,
    pub gain: Arc<TerminalGain>,
    pub initial_state: DVector<f64>,
    pub initial_inputs: Option<Vec<DVector<f64>>>,
}

/// Builds the initial assumed trajectory: supplied (or zero) inputs rolled
/// forward from `x0` through the controller model.
pub fn initialize(
    agent: usize,
    model: &SystemModel,
    x0: &DVector<f64>,
    horizon: usize,
    inputs: Option<&[DVector<f64>]>,
) -> Result<Trajectory, EngineError> {
    let inputs = match inputs {
        Some(seq) => {
            if seq.len() != horizon {
                return Err(EngineError::Setup(format!(
                    "agent {} has {} initial inputs, horizon is {horizon}",
                    agent + 1,
                    seq.len()
                )));
            }
            for (k, u) in seq.iter().enumerate() {
                if u.len() != model.input_dim() {
                    return Err(EngineError::Setup(format!("agent {} initial input {k} has wrong length", agent + 1)));
                }
                let violation = model.box_violation(u);
                if violation > 0.0 {
                    return Err(EngineError::InitInputOutOfBounds { agent, k, violation });
                }
            }
            seq.to_vec()
        }
        None => vec![DVector::zeros(model.input_dim()); horizon],
    };
    Ok(Trajectory::rollout(model.a(), model.b(), x0, inputs, TrajectoryRole::Assumed))
}

/// `(1/|𝕀_i|)·K·Σ_{j∈𝕀_i} [(x_j^a + δ_j − δ_i) − x_i^a]` over the in-neighbor
/// terminal states, in the order given.
pub fn terminal_input(
    agent: usize,
    own_terminal: &DVector<f64>,
    neighbor_terminals: &[(Peer, &DVector<f64>)],
    k: &DMatrix<f64>,
    offsets: &FormationOffset,
) -> DVector<f64> {
    let mut sum = DVector::zeros(own_terminal.len());
    for (peer, x) in neighbor_terminals {
        sum += local_ocp::neighbor_target(x, *peer, agent, offsets) - own_terminal;
    }
    (k * sum) / neighbor_terminals.len() as f64
}

impl Engine {
    pub fn new(
        config: EngineConfig,
        topology: &Topology,
        specs: Vec<AgentSpec>,
        leader: Leader,
        offsets: FormationOffset,
        disturbance: Option<Disturbance>,
    ) -> Result<Self, EngineError> {
        let n = topology.follower_count();
        if specs.len() != n || offsets.len() != n {
            return Err(EngineError::Setup(format!(
                "{} agent specs and {} offsets for {n} followers",
                specs.len(),
                offsets.len()
            )));
        }
        let mut agents = Vec::with_capacity(n);
        for (id, spec) in specs.into_iter().enumerate() {
            let assumed = initialize(
                id,
                &spec.controller,
                &spec.initial_state,
                config.horizon,
                spec.initial_inputs.as_deref(),
            )?;
            let in_neighbors = topology.pinned_in_neighbors(id).to_vec();
            if in_neighbors.is_empty() {
                return Err(EngineError::Setup(format!("agent {} has no in-neighbors", id + 1)));
            }
            agents.push(AgentRuntime {
                id,
                controller: spec.controller,
                plant: spec.plant,
                weights: spec.weights,
                gain: spec.gain,
                in_neighbors,
                out_neighbors: topology.out_neighbors(id).to_vec(),
                state: spec.initial_state,
                assumed,
            });
        }
        Ok(Self { config, agents, leader, offsets, disturbance, t: 0 })
    }

    fn messages(&self) -> BTreeMap<Peer, RoundMessage> {
        let mut out = BTreeMap::new();
        let leader = self.leader.model.leader_trajectory(&self.leader.state, self.config.horizon);
        out.insert(Peer::Leader, RoundMessage { sender: Peer::Leader, t: self.t, states: leader.states });
        for a in &self.agents {
            let sender = Peer::Follower(a.id);
            out.insert(sender, RoundMessage { sender, t: self.t, states: a.assumed.states.clone() });
        }
        out
    }

    /// Executes one round and advances the clock.
    pub fn round(&mut self) -> Result<RoundReport, EngineError> {
        let t = self.t;
        let np = self.config.horizon;
        let messages = self.messages();

        // delivery: each agent only receives what its in-neighbors sent
        let inboxes: Vec<BTreeMap<Peer, Trajectory>> = self
            .agents
            .iter()
            .map(|a| {
                a.in_neighbors
                    .iter()
                    .map(|p| {
                        let msg = &messages[p];
                        let traj = Trajectory { states: msg.states.clone(), inputs: Vec::new(), role: TrajectoryRole::Assumed };
                        (*p, traj)
                    })
                    .collect()
            })
            .collect();

        let tol = self.config.tolerances;
        let offsets = &self.offsets;
        let solved: Vec<Result<(local_ocp::OcpSolution, Option<ShiftCheck>), EngineError>> = self
            .agents
            .par_iter()
            .zip(inboxes.par_iter())
            .map(|(a, inbox)| {
                let data = ProblemData {
                    agent: a.id,
                    model: &a.controller,
                    weights: &a.weights,
                    horizon: np,
                    state: &a.state,
                    assumed_self: &a.assumed,
                    in_neighbors: &a.in_neighbors,
                    received: inbox,
                    offsets,
                };
                let wrap = |source| EngineError::LocalInfeasible { agent: a.id, t, source };
                let problem = local_ocp::build_problem(&data).map_err(wrap)?;
                let shift = (t > 0).then(|| {
                    let z = problem.incumbent.as_ref().expect("built problems carry the assumed inputs");
                    ShiftCheck {
                        feasible: problem.is_feasible(z, tol.feasibility),
                        cost: problem.objective(z),
                        box_violation: problem.box_violation(z),
                        terminal_violation: problem.terminal_violation(z),
                    }
                });
                let sol = local_ocp::solve(&problem, &tol).map_err(wrap)?;
                Ok((sol, shift))
            })
            .collect();
        let mut solutions = Vec::with_capacity(solved.len());
        for r in solved {
            solutions.push(r?);
        }

        // commit
        let leader_terminal = messages[&Peer::Leader].states[np].clone();
        let mut steps = Vec::with_capacity(self.agents.len());
        let mut next = Vec::with_capacity(self.agents.len());
        for (a, (sol, shift)) in self.agents.iter().zip(solutions) {
            let m = a.controller.input_dim();
            let commanded = sol.trajectory.inputs[0].clone();
            debug_assert_eq!(commanded.len(), m);
            let applied = match self.disturbance.as_mut() {
                Some(d) => &commanded + d.sample(m),
                None => commanded.clone(),
            };
            let state_next = a.plant.step(&a.state, &applied)?;

            let neighbor_terminals: Vec<(Peer, &DVector<f64>)> =
                a.in_neighbors.iter().map(|p| (*p, &messages[p].states[np])).collect();
            let own_terminal = a.assumed.terminal();
            let u_term = terminal_input(a.id, own_terminal, &neighbor_terminals, &a.gain.k, &self.offsets);
            let violation = a.controller.box_violation(&u_term);
            if violation > tol.feasibility {
                return Err(EngineError::TerminalInputOutOfBounds { agent: a.id, t, violation });
            }

            let optimal_terminal = sol.trajectory.terminal().clone();
            let appended = a.controller.a() * &optimal_terminal + a.controller.b() * &u_term;
            let mut inputs: Vec<DVector<f64>> = sol.trajectory.inputs[1..].to_vec();
            inputs.push(u_term.clone());
            let mut states: Vec<DVector<f64>> = sol.trajectory.states[1..].to_vec();
            states.push(appended.clone());

            steps.push(AgentStep {
                state: a.state.clone(),
                commanded,
                applied,
                objective: sol.objective,
                used_incumbent: sol.used_incumbent,
                assumed_terminal: own_terminal.clone(),
                optimal_terminal,
                terminal_input: u_term,
                next_assumed_terminal: appended,
                shift,
            });
            next.push((state_next, Trajectory { states, inputs, role: TrajectoryRole::Assumed }));
        }

        for (a, (state, assumed)) in self.agents.iter_mut().zip(next) {
            a.state = state;
            a.assumed = assumed;
        }
        let leader_state = self.leader.state.clone();
        let leader_input = self.leader.profile.input_at(t as f64 * self.config.dt, self.leader.model.input_dim());
        self.leader.state = self.leader.model.step(&leader_state, &leader_input)?;
        self.t += 1;

        Ok(RoundReport { t, leader_state, leader_terminal, leader_input, agents: steps })
    }
}

/// Outcome of one scaled run in [`feasibility_probe`].
#[derive(Debug, Clone, PartialEq)]
pub struct ProbeEntry {
    pub scale: f64,
    pub feasible: bool,
    pub rounds_completed: usize,
    pub failure: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProbeReport {
    /// Largest scale whose run completed without infeasibility.
    pub best: Option<f64>,
    pub entries: Vec<ProbeEntry>,
}

/// Runs `rounds` rounds for each scale with an engine built by `build`, which
/// is expected to scale the initial follower errors by the given factor.
pub fn feasibility_probe<F>(scales: &[f64], rounds: usize, mut build: F) -> Result<ProbeReport, EngineError>
where
    F: FnMut(f64) -> Result<Engine, EngineError>,
{
    let mut entries = Vec::with_capacity(scales.len());
    for &scale in scales {
        if !(scale >= 0.0) {
            return Err(EngineError::Setup(format!("probe scale {scale} must be non-negative")));
        }
        let mut engine = build(scale)?;
        let mut failure = None;
        let mut done = 0;
        while done < rounds {
            match engine.round() {
                Ok(_) => done += 1,
                Err(e @ (EngineError::LocalInfeasible { .. } | EngineError::TerminalInputOutOfBounds { .. })) => {
                    failure = Some(e.to_string());
                    break;
                }
                Err(e) => return Err(e),
            }
        }
        entries.push(ProbeEntry { scale, feasible: failure.is_none(), rounds_completed: done, failure });
    }
    let best = entries.iter().filter(|e| e.feasible).map(|e| e.scale).fold(None, |acc: Option<f64>, s| {
        Some(acc.map_or(s, |a| a.max(s)))
    });
    Ok(ProbeReport { best, entries })
}
