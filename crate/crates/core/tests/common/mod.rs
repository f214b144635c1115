//! Independent oracles shared by the integration tests. Nothing here calls
//! into the library's own numerics for the quantity being checked.
#![allow(dead_code)]

use std::collections::BTreeMap;
use std::path::PathBuf;

use dmpc::local_ocp::{self, OcpError, OcpProblem, ProblemData, SolverTolerances, Weights};
use dmpc::sim_harness::{self, ScenarioConfig};
use dmpc::{FormationOffset, Peer, SystemModel, Trajectory, TrajectoryRole};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn scenario_path(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("scenarios").join(format!("{name}.toml"))
}

pub fn scenario(name: &str) -> ScenarioConfig {
    sim_harness::load_scenario(scenario_path(name)).unwrap_or_else(|e| panic!("{name}: {e}"))
}

// ---------------------------------------------------------------------------
// stacked terminal propagator

/// Row-normalized pinned Laplacian `(D + B)⁻¹(D + B − 𝒜)` built from the raw
/// adjacency (row = receiver) and pinning vector.
pub fn normalized_laplacian(adjacency: &DMatrix<f64>, pinning: &DVector<f64>) -> DMatrix<f64> {
    let n = adjacency.nrows();
    let mut out = DMatrix::zeros(n, n);
    for i in 0..n {
        let d: f64 = adjacency.row(i).sum() + pinning[i];
        for j in 0..n {
            let l = if i == j { d - adjacency[(i, j)] } else { -adjacency[(i, j)] };
            out[(i, j)] = l / d;
        }
    }
    out
}

/// Block propagator of stacked assumed terminal errors:
/// block `(i, j)` is `δ_ij A_i − L̂_ij B_i K_i`.
pub fn terminal_propagator_oracle(cfg: &ScenarioConfig) -> DMatrix<f64> {
    let n = cfg.state_dim();
    let big_n = cfg.follower_count();
    let l_hat = normalized_laplacian(cfg.topology.adjacency(), cfg.topology.pinning());
    let mut out = DMatrix::zeros(n * big_n, n * big_n);
    for i in 0..big_n {
        let model = &cfg.controllers[i];
        let bk = model.b() * &cfg.gains[i].k;
        for j in 0..big_n {
            let mut block = &bk * -l_hat[(i, j)];
            if i == j {
                block += model.a();
            }
            out.view_mut((i * n, j * n), (n, n)).copy_from(&block);
        }
    }
    out
}

// ---------------------------------------------------------------------------
// local problem oracle

/// One randomized single-input local problem with a leader and one peer.
#[derive(Debug, Clone)]
pub struct OcpInstance {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub lo: f64,
    pub hi: f64,
    pub horizon: usize,
    pub x0: DVector<f64>,
    pub r: f64,
    pub f: DMatrix<f64>,
    pub g: DMatrix<f64>,
    pub own_states: Vec<DVector<f64>>,
    pub own_inputs: Vec<DVector<f64>>,
    pub leader: Vec<DVector<f64>>,
    pub peer: Vec<DVector<f64>>,
    pub offset_self: DVector<f64>,
    pub offset_peer: DVector<f64>,
}

fn uniform_matrix(rng: &mut ChaCha8Rng, r: usize, c: usize, span: f64) -> DMatrix<f64> {
    DMatrix::from_fn(r, c, |_, _| rng.random_range(-span..span))
}

fn uniform_vector(rng: &mut ChaCha8Rng, n: usize, span: f64) -> DVector<f64> {
    DVector::from_fn(n, |_, _| rng.random_range(-span..span))
}

fn rollout(a: &DMatrix<f64>, b: &DMatrix<f64>, x0: &DVector<f64>, inputs: &[DVector<f64>]) -> Vec<DVector<f64>> {
    let mut xs = vec![x0.clone()];
    for u in inputs {
        let next = a * xs.last().unwrap() + b * u;
        xs.push(next);
    }
    xs
}

impl OcpInstance {
    pub fn state_dim(&self) -> usize {
        self.a.nrows()
    }

    pub fn input_dim(&self) -> usize {
        self.b.ncols()
    }

    /// Feasible instance: the own assumed trajectory is the rollout of an
    /// in-box input sequence, so its terminal state is reachable.
    pub fn random(seed: u64, n: usize, m: usize, horizon: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (a, b) = loop {
            let a = uniform_matrix(&mut rng, n, n, 1.5);
            let b = uniform_matrix(&mut rng, n, m, 1.5);
            let ok = if m == 1 {
                horizon < n || determined_block(&a, &b, horizon).determinant().abs() > 0.05
            } else {
                b.clone().svd(false, false).singular_values.min() > 0.2
            };
            if ok {
                break (a, b);
            }
        };
        let lo = rng.random_range(-2.0..-0.2);
        let hi = rng.random_range(0.2..2.0);
        let x0 = uniform_vector(&mut rng, n, 2.0);
        let own_inputs: Vec<DVector<f64>> =
            (0..horizon).map(|_| DVector::from_fn(m, |_, _| rng.random_range(lo..hi))).collect();
        let mut own_states = rollout(&a, &b, &x0, &own_inputs);
        for x in own_states.iter_mut().take(horizon).skip(1) {
            *x += uniform_vector(&mut rng, n, 0.5);
        }
        let leader = (0..=horizon).map(|_| uniform_vector(&mut rng, n, 2.0)).collect();
        let peer = (0..=horizon).map(|_| uniform_vector(&mut rng, n, 2.0)).collect();
        let lf = uniform_matrix(&mut rng, n, n, 1.0);
        let lg = uniform_matrix(&mut rng, n, n, 1.0);
        Self {
            r: rng.random_range(0.1..3.0),
            f: &lf * lf.transpose(),
            g: &lg * lg.transpose(),
            offset_self: uniform_vector(&mut rng, n, 1.0),
            offset_peer: uniform_vector(&mut rng, n, 1.0),
            a,
            b,
            lo,
            hi,
            horizon,
            x0,
            own_states,
            own_inputs,
            leader,
            peer,
        }
    }

    pub fn terminal_target(&self) -> &DVector<f64> {
        self.own_states.last().unwrap()
    }

    /// Objective by direct simulation of the input sequence.
    pub fn cost(&self, inputs: &[DVector<f64>]) -> f64 {
        let xs = rollout(&self.a, &self.b, &self.x0, inputs);
        let qf = |v: &DVector<f64>, w: &DMatrix<f64>| (v.transpose() * w * v)[(0, 0)].max(0.0).sqrt();
        let mut total = 0.0;
        for k in 0..self.horizon {
            let x = &xs[k];
            total += self.r.sqrt() * inputs[k].norm();
            total += qf(&(x - &self.own_states[k]), &self.f);
            total += qf(&(x - (&self.leader[k] - &self.offset_self)), &self.g);
            total += qf(&(x - (&self.peer[k] + &self.offset_peer - &self.offset_self)), &self.g);
        }
        total
    }

    pub fn terminal_state(&self, inputs: &[DVector<f64>]) -> DVector<f64> {
        rollout(&self.a, &self.b, &self.x0, inputs).pop().unwrap()
    }

    /// The same problem posed through the library, with no warm candidate.
    pub fn library_problem(&self) -> Result<OcpProblem, OcpError> {
        let n = self.state_dim();
        let m = self.input_dim();
        let model = SystemModel::new(
            self.a.clone(),
            self.b.clone(),
            DVector::from_element(m, self.lo),
            DVector::from_element(m, self.hi),
        )
        .expect("instance is controllable");
        let weights = Weights::new(DMatrix::identity(m, m) * self.r, self.f.clone(), self.g.clone())?;
        let own = Trajectory {
            states: self.own_states.clone(),
            inputs: self.own_inputs.clone(),
            role: TrajectoryRole::Assumed,
        };
        let mut received = BTreeMap::new();
        received.insert(
            Peer::Leader,
            Trajectory { states: self.leader.clone(), inputs: Vec::new(), role: TrajectoryRole::Assumed },
        );
        received.insert(
            Peer::Follower(1),
            Trajectory { states: self.peer.clone(), inputs: Vec::new(), role: TrajectoryRole::Assumed },
        );
        let offsets = FormationOffset::from_vectors(vec![self.offset_self.clone(), self.offset_peer.clone()]);
        debug_assert_eq!(offsets.follower(0).len(), n);
        let mut p = local_ocp::build_problem(&ProblemData {
            agent: 0,
            model: &model,
            weights: &weights,
            horizon: self.horizon,
            state: &self.x0,
            assumed_self: &own,
            in_neighbors: &[Peer::Leader, Peer::Follower(1)],
            received: &received,
            offsets: &offsets,
        })?;
        p.incumbent = None;
        Ok(p)
    }

    pub fn solve_library(&self) -> Result<local_ocp::OcpSolution, OcpError> {
        local_ocp::solve(&self.library_problem()?, &SolverTolerances::default())
    }

    /// Single-input parametrization: the last `n` inputs are fixed by the
    /// terminal equality as an affine map `g + H·u_free` of the first ones.
    fn elimination(&self) -> (DVector<f64>, DMatrix<f64>) {
        let n = self.state_dim();
        let np = self.horizon;
        let free = np - n;
        let c = determined_block(&self.a, &self.b, np);
        let c_inv = c.try_inverse().expect("determined block is invertible");
        let rhs0 = self.terminal_target() - self.a.pow(np as u32) * &self.x0;
        let g = &c_inv * rhs0;
        let mut h = DMatrix::zeros(n, free);
        for j in 0..free {
            let col = self.a.pow((np - 1 - j) as u32) * self.b.column(0);
            h.set_column(j, &(-(&c_inv * col)));
        }
        (g, h)
    }

    fn inputs_from(&self, free: &[f64], g: &DVector<f64>, h: &DMatrix<f64>) -> Vec<DVector<f64>> {
        let det = g + h * DVector::from_column_slice(free);
        free.iter()
            .cloned()
            .chain(det.iter().cloned())
            .map(|u| DVector::from_element(1, u))
            .collect()
    }

    /// Exhaustive grid refinement over the exact feasible set; `None` when
    /// the box excludes every solution of the terminal equality.
    pub fn brute_force(&self) -> Option<(f64, Vec<DVector<f64>>)> {
        assert_eq!(self.input_dim(), 1, "oracle covers single-input systems");
        let n = self.state_dim();
        assert!(self.horizon >= n && self.horizon - n <= 2);
        let (g, h) = self.elimination();
        let (lo, hi) = (self.lo, self.hi);
        match self.horizon - n {
            0 => {
                let inputs = self.inputs_from(&[], &g, &h);
                let inside = inputs.iter().all(|u| u[0] >= lo - 1e-12 && u[0] <= hi + 1e-12);
                inside.then(|| (self.cost(&inputs), inputs))
            }
            1 => {
                let mut iv = (lo, hi);
                for k in 0..n {
                    iv = intersect(iv, affine_interval(g[k], h[(k, 0)], lo, hi));
                }
                let (u0, best) = grid_min(|u| self.cost(&self.inputs_from(&[u], &g, &h)), iv)?;
                Some((best, self.inputs_from(&[u0], &g, &h)))
            }
            _ => {
                // n = 1, N_p = 3: one determined input g + h0·u0 + h1·u1
                let (g0, h0, h1) = (g[0], h[(0, 0)], h[(0, 1)]);
                let reach = (lo - (h1 * lo).max(h1 * hi), hi - (h1 * lo).min(h1 * hi));
                let outer = intersect((lo, hi), affine_interval(g0, h0, reach.0, reach.1));
                let inner = |u0: f64| intersect((lo, hi), affine_interval(g0 + h0 * u0, h1, lo, hi));
                let (u0, best) = grid_min(
                    |u0| {
                        grid_min(|u1| self.cost(&self.inputs_from(&[u0, u1], &g, &h)), inner(u0))
                            .map_or(f64::INFINITY, |(_, v)| v)
                    },
                    outer,
                )?;
                let (u1, _) = grid_min(|u1| self.cost(&self.inputs_from(&[u0, u1], &g, &h)), inner(u0))?;
                Some((best, self.inputs_from(&[u0, u1], &g, &h)))
            }
        }
    }
}

/// `[A^{n−1}b, …, Ab, b]`: terminal-state columns of the last `n` inputs.
fn determined_block(a: &DMatrix<f64>, b: &DMatrix<f64>, horizon: usize) -> DMatrix<f64> {
    let n = a.nrows();
    let mut c = DMatrix::zeros(n, n);
    for (col, j) in (horizon - n..horizon).enumerate() {
        c.set_column(col, &(a.pow((horizon - 1 - j) as u32) * b.column(0)));
    }
    c
}

/// `{u : c + h·u ∈ [lo, hi]}`.
fn affine_interval(c: f64, h: f64, lo: f64, hi: f64) -> (f64, f64) {
    if h.abs() < 1e-14 {
        if c >= lo && c <= hi {
            (f64::NEG_INFINITY, f64::INFINITY)
        } else {
            (1.0, 0.0)
        }
    } else {
        let (p, q) = ((lo - c) / h, (hi - c) / h);
        (p.min(q), p.max(q))
    }
}

fn intersect(a: (f64, f64), b: (f64, f64)) -> (f64, f64) {
    (a.0.max(b.0), a.1.min(b.1))
}

/// Minimum of a convex function on `[lo, hi]` by repeated grid refinement
/// around the best sample.
pub fn grid_min(f: impl Fn(f64) -> f64, (mut lo, mut hi): (f64, f64)) -> Option<(f64, f64)> {
    if lo > hi + 1e-12 {
        return None;
    }
    if lo > hi {
        hi = lo;
    }
    const POINTS: usize = 33;
    let mut best = (lo, f(lo));
    for _ in 0..80 {
        let pts: Vec<f64> = (0..POINTS).map(|k| lo + (hi - lo) * k as f64 / (POINTS - 1) as f64).collect();
        let vals: Vec<f64> = pts.iter().map(|&u| f(u)).collect();
        let i = (0..POINTS).min_by(|&p, &q| vals[p].total_cmp(&vals[q])).unwrap();
        if vals[i] <= best.1 {
            best = (pts[i], vals[i]);
        }
        lo = pts[i.saturating_sub(1)];
        hi = pts[(i + 1).min(POINTS - 1)];
        if hi - lo < 1e-13 {
            break;
        }
    }
    best.1.is_finite().then_some(best)
}

/// Instance shapes for the randomized comparison: `n ≤ 2`, `N_p ≤ 3`.
pub fn oracle_shape(seed: u64) -> (usize, usize) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let n = rng.random_range(1..=2);
    let horizon = rng.random_range(n.max(2)..=3);
    (n, horizon)
}

/// Largest `|J_library − J_oracle|` over `count` random instances, plus the
/// largest feasibility defect of the library point.
pub fn ocp_oracle_sweep(count: u64) -> Result<(f64, f64), String> {
    let mut worst_gap: f64 = 0.0;
    let mut worst_defect: f64 = 0.0;
    for seed in 0..count {
        let (n, horizon) = oracle_shape(seed);
        let inst = OcpInstance::random(seed, n, 1, horizon);
        let (oracle, _) = inst.brute_force().ok_or(format!("seed {seed}: oracle found no feasible point"))?;
        let sol = inst.solve_library().map_err(|e| format!("seed {seed}: {e}"))?;
        let inputs: Vec<DVector<f64>> = sol.inputs.iter().map(|&u| DVector::from_element(1, u)).collect();
        let direct = inst.cost(&inputs);
        let box_defect = inputs.iter().map(|u| (inst.lo - u[0]).max(u[0] - inst.hi).max(0.0)).fold(0.0, f64::max);
        let terminal_defect = (inst.terminal_state(&inputs) - inst.terminal_target()).amax();
        worst_defect = worst_defect.max(box_defect).max(terminal_defect);
        // the reported objective must be the objective of the returned point
        worst_gap = worst_gap.max((sol.objective - direct).abs()).max((sol.objective - oracle).abs());
    }
    Ok((worst_gap, worst_defect))
}

/// Forced problems (`N_p = 1`, square invertible `B`): the only solution is
/// `u = B⁻¹(x_T − A x₀)`. Returns the largest input and objective mismatch.
pub fn forced_elimination_sweep(count: u64) -> Result<f64, String> {
    let mut worst: f64 = 0.0;
    for seed in 0..count {
        let n = 1 + (seed % 2) as usize;
        let inst = OcpInstance::random(1000 + seed, n, n, 1);
        let b_inv = inst.b.clone().try_inverse().ok_or("singular B")?;
        let u = b_inv * (inst.terminal_target() - &inst.a * &inst.x0);
        let sol = inst.solve_library().map_err(|e| format!("seed {seed}: {e}"))?;
        worst = worst.max((&sol.inputs - &u).amax());
        worst = worst.max((sol.objective - inst.cost(&[u])).abs());
    }
    Ok(worst)
}

/// Box-infeasible problems, forced and free. Returns the first result that
/// is not `Infeasible`.
pub fn infeasible_cases() -> Result<(), String> {
    // forced: the unique solution leaves the box
    for seed in 0..6u64 {
        let mut inst = OcpInstance::random(2000 + seed, 1, 1, 1);
        let u = if seed % 2 == 0 { inst.hi + 0.5 } else { inst.lo - 0.5 };
        let target = &inst.a * &inst.x0 + &inst.b * DVector::from_element(1, u);
        *inst.own_states.last_mut().unwrap() = target;
        match inst.solve_library() {
            Err(OcpError::Infeasible) => {}
            other => return Err(format!("forced seed {seed}: {other:?}")),
        }
    }
    // free: the target lies far outside the reachable set of the box
    for seed in 0..6u64 {
        let mut inst = OcpInstance::random(3000 + seed, 1, 1, 3);
        let reach: f64 = (0..3).map(|j| (inst.a.pow(j) * &inst.b)[(0, 0)].abs()).sum::<f64>()
            * inst.lo.abs().max(inst.hi);
        let free = (inst.a.pow(3) * &inst.x0)[0];
        *inst.own_states.last_mut().unwrap() = DVector::from_element(1, free + 3.0 * reach + 1.0);
        match inst.solve_library() {
            Err(OcpError::Infeasible) => {}
            other => return Err(format!("free seed {seed}: {other:?}")),
        }
    }
    Ok(())
}
