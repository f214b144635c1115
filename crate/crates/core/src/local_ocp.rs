//! Per-agent open-loop problem.
//!
//! The input sequence `z = [u(0); …; u(N_p−1)]` is the only decision
//! variable; states are eliminated through the prediction matrices
//! `x(k) = A^k x₀ + Σ_{j<k} A^{k−1−j} B u(j)`. The objective is a sum of
//! weighted (square-root) norms of affine maps of `z`, subject to the input
//! box and the terminal equality `x(N_p) = x^a(N_p)`.
//!
//! The terminal equality is reduced through an SVD of the terminal
//! prediction block, so unreachable targets are reported before any conic
//! solve and fully determined problems are solved by elimination. Everything
//! else goes to an interior-point conic solver over the epigraph form.

use std::collections::BTreeMap;

use clarabel::algebra::CscMatrix;
use clarabel::solver::{
    DefaultSettings, DefaultSolver, IPSolver, NonnegativeConeT, SecondOrderConeT, SolverStatus, SupportedConeT,
    ZeroConeT,
};
use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::linalg;
use crate::plant_models::{FormationOffset, SystemModel};
use crate::topology::{Peer, Topology};
use crate::trajectory::{Trajectory, TrajectoryRole};

pub const DEFAULT_TOL_OBJ: f64 = 1e-6;
pub const DEFAULT_TOL_FEAS: f64 = 1e-8;
/// Loewner-order slack for the weight condition.
pub const WEIGHT_CONDITION_SLACK: f64 = 1e-10;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum OcpError {
    #[error("trajectory for {who} spans horizon {got}, expected {expected}")]
    HorizonMismatch { who: String, expected: usize, got: usize },
    #[error("no assumed trajectory received from {0:?}")]
    MissingNeighborTrajectory(Peer),
    #[error("terminal constraint cannot be met inside the input box")]
    Infeasible,
    #[error("solver stalled: {0}")]
    SolverStall(String),
    #[error("weight `{0}` must be symmetric positive semidefinite with matching dimensions")]
    InvalidWeight(&'static str),
}

/// Stage-cost weights of one agent: input `R`, self-deviation `F`,
/// neighbor-deviation `G`.
#[derive(Debug, Clone, PartialEq)]
pub struct Weights {
    pub r: DMatrix<f64>,
    pub f: DMatrix<f64>,
    pub g: DMatrix<f64>,
}

impl Weights {
    pub fn new(r: DMatrix<f64>, f: DMatrix<f64>, g: DMatrix<f64>) -> Result<Self, OcpError> {
        for (name, w) in [("R", &r), ("F", &f), ("G", &g)] {
            if !linalg::is_symmetric(w, 1e-12) {
                return Err(OcpError::InvalidWeight(name));
            }
            let scale = w.amax().max(1.0);
            if w.nrows() > 0 && linalg::min_sym_eigenvalue(w) < -1e-12 * scale {
                return Err(OcpError::InvalidWeight(name));
            }
        }
        if f.nrows() != g.nrows() {
            return Err(OcpError::InvalidWeight("F/G"));
        }
        Ok(Self { r, f, g })
    }

    pub fn check_dims(&self, model: &SystemModel) -> Result<(), OcpError> {
        if self.r.nrows() != model.input_dim() {
            return Err(OcpError::InvalidWeight("R"));
        }
        if self.f.nrows() != model.state_dim() {
            return Err(OcpError::InvalidWeight("F"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolverTolerances {
    pub objective: f64,
    pub feasibility: f64,
    pub max_iterations: u32,
}

impl Default for SolverTolerances {
    fn default() -> Self {
        Self {
            objective: DEFAULT_TOL_OBJ,
            feasibility: DEFAULT_TOL_FEAS,
            max_iterations: 200,
        }
    }
}

/// `‖W^{1/2}(v)‖ = √(vᵀWv)`.
pub fn weighted_norm(v: &DVector<f64>, w: &DMatrix<f64>) -> f64 {
    linalg::weighted_norm(v, w)
}

/// `‖u‖_R + ‖x − x^a‖_F + Σ_j ‖x − target_j‖_G`.
pub fn stage_cost(
    weights: &Weights,
    u: &DVector<f64>,
    x_pred: &DVector<f64>,
    x_assumed_self: &DVector<f64>,
    neighbor_targets: &[DVector<f64>],
) -> f64 {
    weighted_norm(u, &weights.r)
        + weighted_norm(&(x_pred - x_assumed_self), &weights.f)
        + neighbor_targets
            .iter()
            .map(|t| weighted_norm(&(x_pred - t), &weights.g))
            .sum::<f64>()
}

/// One objective term `‖M z + c‖₂` (the weight factor already folded in).
#[derive(Debug, Clone, PartialEq)]
pub struct NormTerm {
    pub map: DMatrix<f64>,
    pub offset: DVector<f64>,
}

impl NormTerm {
    fn eval(&self, z: &DVector<f64>) -> f64 {
        (&self.map * z + &self.offset).norm()
    }
}

/// Condensed form of one agent's problem.
#[derive(Debug, Clone, PartialEq)]
pub struct OcpProblem {
    pub horizon: usize,
    pub state_dim: usize,
    pub input_dim: usize,
    pub initial_state: DVector<f64>,
    /// `A^k x₀` for `k = 0..=N_p`.
    pub free_response: Vec<DVector<f64>>,
    /// Input-to-state blocks of `x(k)`, each `n × m·N_p`.
    pub prediction: Vec<DMatrix<f64>>,
    pub terms: Vec<NormTerm>,
    /// Objective part that does not depend on `z` (e.g. the `k = 0` state terms).
    pub constant_cost: f64,
    pub lower: DVector<f64>,
    pub upper: DVector<f64>,
    pub terminal_target: DVector<f64>,
    /// Warm candidate (the agent's own assumed inputs, i.e. the shifted
    /// previous optimum); used whenever it is feasible and no worse.
    pub incumbent: Option<DVector<f64>>,
}

/// Everything one agent knows when it poses its problem.
pub struct ProblemData<'a> {
    pub agent: usize,
    pub model: &'a SystemModel,
    pub weights: &'a Weights,
    pub horizon: usize,
    pub state: &'a DVector<f64>,
    pub assumed_self: &'a Trajectory,
    pub in_neighbors: &'a [Peer],
    pub received: &'a BTreeMap<Peer, Trajectory>,
    pub offsets: &'a FormationOffset,
}

/// Target for agent `i` derived from peer `j`'s assumed state:
/// `x_j^a + δ_j − δ_i`.
pub fn neighbor_target(
    peer_state: &DVector<f64>,
    peer: Peer,
    agent: usize,
    offsets: &FormationOffset,
) -> DVector<f64> {
    peer_state + offsets.of(peer) - offsets.follower(agent)
}

pub fn build_problem(data: &ProblemData<'_>) -> Result<OcpProblem, OcpError> {
    let model = data.model;
    let np = data.horizon;
    let n = model.state_dim();
    let m = model.input_dim();
    let nz = m * np;
    data.weights.check_dims(model)?;

    // neighbors transmit states only, so their horizon is read off the states
    let check = |who: String, t: &Trajectory| {
        if t.states.len() != np + 1 {
            Err(OcpError::HorizonMismatch { who, expected: np, got: t.states.len().saturating_sub(1) })
        } else {
            Ok(())
        }
    };
    check(format!("agent {}", data.agent + 1), data.assumed_self)?;
    if data.assumed_self.inputs.len() != np {
        return Err(OcpError::HorizonMismatch {
            who: format!("agent {} inputs", data.agent + 1),
            expected: np,
            got: data.assumed_self.inputs.len(),
        });
    }
    let mut peers = Vec::with_capacity(data.in_neighbors.len());
    for &p in data.in_neighbors {
        let t = data.received.get(&p).ok_or(OcpError::MissingNeighborTrajectory(p))?;
        check(format!("{p:?}"), t)?;
        peers.push((p, t));
    }

    let a = model.a();
    let b = model.b();
    let mut free_response = Vec::with_capacity(np + 1);
    let mut prediction = Vec::with_capacity(np + 1);
    free_response.push(data.state.clone());
    prediction.push(DMatrix::zeros(n, nz));
    for k in 0..np {
        let mut next = a * &prediction[k];
        next.view_mut((0, k * m), (n, m)).copy_from(b);
        free_response.push(a * &free_response[k]);
        prediction.push(next);
    }

    let l_r = linalg::psd_factor(&data.weights.r);
    let l_f = linalg::psd_factor(&data.weights.f);
    let l_g = linalg::psd_factor(&data.weights.g);

    let mut terms = Vec::new();
    let mut constant_cost = 0.0;
    let mut push = |map: DMatrix<f64>, offset: DVector<f64>| {
        if map.nrows() == 0 {
            return;
        }
        if map.iter().all(|v| *v == 0.0) {
            constant_cost += offset.norm();
        } else {
            terms.push(NormTerm { map, offset });
        }
    };

    for k in 0..np {
        if l_r.nrows() > 0 {
            let mut sel = DMatrix::zeros(l_r.nrows(), nz);
            sel.view_mut((0, k * m), (l_r.nrows(), m)).copy_from(&l_r);
            push(sel, DVector::zeros(l_r.nrows()));
        }
        if l_f.nrows() > 0 {
            push(
                &l_f * &prediction[k],
                &l_f * (&free_response[k] - &data.assumed_self.states[k]),
            );
        }
        if l_g.nrows() > 0 {
            for (p, t) in &peers {
                let target = neighbor_target(&t.states[k], *p, data.agent, data.offsets);
                push(&l_g * &prediction[k], &l_g * (&free_response[k] - target));
            }
        }
    }

    let lower = DVector::from_iterator(nz, (0..np).flat_map(|_| model.input_lower().iter().cloned()));
    let upper = DVector::from_iterator(nz, (0..np).flat_map(|_| model.input_upper().iter().cloned()));
    let incumbent = DVector::from_iterator(nz, data.assumed_self.inputs.iter().flat_map(|u| u.iter().cloned()));

    Ok(OcpProblem {
        horizon: np,
        state_dim: n,
        input_dim: m,
        initial_state: data.state.clone(),
        terminal_target: data.assumed_self.terminal().clone(),
        free_response,
        prediction,
        terms,
        constant_cost,
        lower,
        upper,
        incumbent: Some(incumbent),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct OcpSolution {
    pub trajectory: Trajectory,
    pub inputs: DVector<f64>,
    pub objective: f64,
    /// True when the warm candidate was returned instead of the conic solution.
    pub used_incumbent: bool,
    pub iterations: u32,
}

impl OcpProblem {
    pub fn objective(&self, z: &DVector<f64>) -> f64 {
        self.constant_cost + self.terms.iter().map(|t| t.eval(z)).sum::<f64>()
    }

    pub fn terminal_state(&self, z: &DVector<f64>) -> DVector<f64> {
        &self.free_response[self.horizon] + &self.prediction[self.horizon] * z
    }

    pub fn box_violation(&self, z: &DVector<f64>) -> f64 {
        z.iter()
            .enumerate()
            .map(|(i, &v)| (self.lower[i] - v).max(v - self.upper[i]).max(0.0))
            .fold(0.0, f64::max)
    }

    /// `‖x(N_p) − x^a(N_p)‖_∞`.
    pub fn terminal_violation(&self, z: &DVector<f64>) -> f64 {
        (self.terminal_state(z) - &self.terminal_target).amax()
    }

    /// Box violation is absolute; the terminal defect is measured relative
    /// to the magnitude of the target state.
    pub fn is_feasible(&self, z: &DVector<f64>, tol: f64) -> bool {
        z.len() == self.lower.len()
            && self.box_violation(z) <= tol
            && self.terminal_violation(z) <= tol * (1.0 + self.terminal_target.amax())
    }

    pub fn trajectory(&self, z: &DVector<f64>, role: TrajectoryRole) -> Trajectory {
        let m = self.input_dim;
        let states = (0..=self.horizon)
            .map(|k| &self.free_response[k] + &self.prediction[k] * z)
            .collect();
        let inputs = (0..self.horizon)
            .map(|k| z.rows(k * m, m).into_owned())
            .collect();
        Trajectory { states, inputs, role }
    }

    fn clamp(&self, z: &mut DVector<f64>) {
        for i in 0..z.len() {
            z[i] = z[i].clamp(self.lower[i], self.upper[i]);
        }
    }
}

/// Orthonormal reduction of `Γ_N z = target − A^{N_p}x₀`.
struct ReducedEquality {
    /// `r × nz`, orthonormal rows spanning the row space of `Γ_N`.
    rows: DMatrix<f64>,
    rhs: DVector<f64>,
}

fn reduce_equality(problem: &OcpProblem, tol: f64) -> Result<ReducedEquality, OcpError> {
    let gamma = &problem.prediction[problem.horizon];
    let rhs = &problem.terminal_target - &problem.free_response[problem.horizon];
    let svd = gamma.clone().svd(true, true);
    let u = svd.u.as_ref().expect("requested U");
    let v_t = svd.v_t.as_ref().expect("requested Vᵀ");
    let smax = svd.singular_values.iter().cloned().fold(0.0, f64::max);
    let keep: Vec<usize> = (0..svd.singular_values.len())
        .filter(|&i| svd.singular_values[i] > 1e-10 * smax.max(f64::MIN_POSITIVE))
        .collect();

    let mut rows = DMatrix::zeros(keep.len(), gamma.ncols());
    let mut reduced_rhs = DVector::zeros(keep.len());
    let mut explained = DVector::zeros(rhs.len());
    for (r, &i) in keep.iter().enumerate() {
        let ui = u.column(i);
        let coef = ui.dot(&rhs);
        explained += ui * coef;
        rows.row_mut(r).copy_from(&v_t.row(i));
        reduced_rhs[r] = coef / svd.singular_values[i];
    }
    if (&rhs - explained).amax() > tol * (1.0 + problem.terminal_target.amax()) {
        return Err(OcpError::Infeasible);
    }
    Ok(ReducedEquality { rows, rhs: reduced_rhs })
}

fn dense_to_csc(m: &DMatrix<f64>) -> CscMatrix<f64> {
    let (rows, cols) = m.shape();
    let mut colptr = Vec::with_capacity(cols + 1);
    let mut rowval = Vec::new();
    let mut nzval = Vec::new();
    colptr.push(0);
    for c in 0..cols {
        for r in 0..rows {
            let v = m[(r, c)];
            if v != 0.0 {
                rowval.push(r);
                nzval.push(v);
            }
        }
        colptr.push(rowval.len());
    }
    CscMatrix::new(rows, cols, colptr, rowval, nzval)
}

/// Alternating projection between the equality subspace and the box; only
/// ever used to remove interior-point round-off.
fn polish(problem: &OcpProblem, eq: &ReducedEquality, z: &mut DVector<f64>) {
    for _ in 0..4 {
        let defect = &eq.rhs - &eq.rows * &*z;
        *z += eq.rows.transpose() * defect;
        problem.clamp(z);
    }
}

fn solve_conic(
    problem: &OcpProblem,
    eq: &ReducedEquality,
    tol: &SolverTolerances,
) -> Result<(DVector<f64>, u32), OcpError> {
    let nz = problem.lower.len();
    let nt = problem.terms.len();
    let nvar = nz + nt;
    let r = eq.rows.nrows();
    let soc_rows: usize = problem.terms.iter().map(|t| t.map.nrows() + 1).sum();
    let ncon = r + 2 * nz + soc_rows;

    let mut a = DMatrix::zeros(ncon, nvar);
    let mut b = vec![0.0; ncon];
    let mut cones: Vec<SupportedConeT<f64>> = Vec::new();

    if r > 0 {
        a.view_mut((0, 0), (r, nz)).copy_from(&eq.rows);
        b[..r].copy_from_slice(eq.rhs.as_slice());
        cones.push(ZeroConeT(r));
    }
    let mut row = r;
    for i in 0..nz {
        a[(row, i)] = 1.0;
        b[row] = problem.upper[i];
        a[(row + nz, i)] = -1.0;
        b[row + nz] = -problem.lower[i];
        row += 1;
    }
    row += nz;
    cones.push(NonnegativeConeT(2 * nz));
    for (ti, term) in problem.terms.iter().enumerate() {
        let k = term.map.nrows();
        a[(row, nz + ti)] = -1.0;
        a.view_mut((row + 1, 0), (k, nz)).copy_from(&(-&term.map));
        b[row + 1..row + 1 + k].copy_from_slice(term.offset.as_slice());
        cones.push(SecondOrderConeT(k + 1));
        row += k + 1;
    }

    let mut q = vec![0.0; nvar];
    for v in q.iter_mut().skip(nz) {
        *v = 1.0;
    }
    let p = CscMatrix::zeros((nvar, nvar));
    let settings = DefaultSettings {
        verbose: false,
        max_iter: tol.max_iterations,
        tol_gap_abs: 1e-10,
        tol_gap_rel: 1e-10,
        tol_feas: 1e-10,
        max_threads: 1,
        ..DefaultSettings::default()
    };
    let mut solver = DefaultSolver::new(&p, &q, &dense_to_csc(&a), &b, &cones, settings)
        .map_err(|e| OcpError::SolverStall(e.to_string()))?;
    solver.solve();
    let status = solver.solution.status;
    match status {
        SolverStatus::Solved | SolverStatus::AlmostSolved => {
            let z = DVector::from_column_slice(&solver.solution.x[..nz]);
            Ok((z, solver.solution.iterations))
        }
        SolverStatus::PrimalInfeasible | SolverStatus::AlmostPrimalInfeasible => Err(OcpError::Infeasible),
        other => Err(OcpError::SolverStall(format!("{other:?}"))),
    }
}

/// Solves the condensed problem. The returned point satisfies the box and
/// terminal equality within `tol.feasibility` and its objective is the
/// lower of the conic solution and the feasible incumbent.
pub fn solve(problem: &OcpProblem, tol: &SolverTolerances) -> Result<OcpSolution, OcpError> {
    let nz = problem.lower.len();
    let eq = reduce_equality(problem, tol.feasibility)?;

    let incumbent = problem
        .incumbent
        .as_ref()
        .filter(|z| problem.is_feasible(z, tol.feasibility))
        .map(|z| (z.clone(), problem.objective(z)));

    // An incumbent at zero cost is optimal; the conic solve could only
    // return an approximation of it.
    if let Some((z, cost)) = &incumbent {
        if *cost == 0.0 {
            return Ok(OcpSolution {
                trajectory: problem.trajectory(z, TrajectoryRole::Optimal),
                inputs: z.clone(),
                objective: 0.0,
                used_incumbent: true,
                iterations: 0,
            });
        }
    }

    let (mut z, iterations) = if eq.rows.nrows() == nz {
        // fully determined by the terminal constraint
        (eq.rows.transpose() * &eq.rhs, 0)
    } else {
        solve_conic(problem, &eq, tol)?
    };
    polish(problem, &eq, &mut z);

    if !problem.is_feasible(&z, tol.feasibility) {
        if eq.rows.nrows() == nz {
            return Err(OcpError::Infeasible);
        }
        return match incumbent {
            Some((inc, cost)) => Ok(OcpSolution {
                trajectory: problem.trajectory(&inc, TrajectoryRole::Optimal),
                inputs: inc,
                objective: cost,
                used_incumbent: true,
                iterations,
            }),
            None => Err(OcpError::SolverStall(format!(
                "feasibility defect box {:e}, terminal {:e}",
                problem.box_violation(&z),
                problem.terminal_violation(&z)
            ))),
        };
    }
    let objective = problem.objective(&z);
    if let Some((inc, cost)) = incumbent {
        if cost <= objective {
            return Ok(OcpSolution {
                trajectory: problem.trajectory(&inc, TrajectoryRole::Optimal),
                inputs: inc,
                objective: cost,
                used_incumbent: true,
                iterations,
            });
        }
    }
    Ok(OcpSolution {
        trajectory: problem.trajectory(&z, TrajectoryRole::Optimal),
        inputs: z,
        objective,
        used_incumbent: false,
        iterations,
    })
}

/// Per-agent verdict of `F_i ⪰ |𝕆_i|·Σ_{j∈𝕆_i} G_j`.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightConditionReport {
    pub holds: bool,
    /// Smallest eigenvalue of each residual matrix.
    pub min_eigenvalues: Vec<f64>,
}

pub fn check_weight_condition(topology: &Topology, weights: &[Weights]) -> WeightConditionReport {
    let min_eigenvalues: Vec<f64> = (0..topology.follower_count())
        .map(|i| {
            let outs = topology.out_neighbors(i);
            let mut residual = weights[i].f.clone();
            for &j in outs {
                residual -= &weights[j].g * outs.len() as f64;
            }
            linalg::min_sym_eigenvalue(&residual)
        })
        .collect();
    WeightConditionReport {
        holds: min_eigenvalues.iter().all(|&e| e >= -WEIGHT_CONDITION_SLACK),
        min_eigenvalues,
    }
}
