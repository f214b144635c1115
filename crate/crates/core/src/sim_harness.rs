//! Scenario files, end-to-end runs, run metrics and output files.
//!
//! A scenario is a TOML document. Matrices are written either as a scalar
//! (a multiple of the identity), a flat array (a diagonal) or an array of
//! rows. Agents are numbered from 1 in files and outputs; the leader is 0.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dmpc_engine::{
    self, AgentSpec, Disturbance, Engine, EngineConfig, EngineError, Leader, ProbeReport, RoundReport,
};
use crate::linalg;
use crate::local_ocp::{self, SolverTolerances, Weights, DEFAULT_TOL_FEAS, DEFAULT_TOL_OBJ};
use crate::plant_models::{
    zoh_discretize, AuvParams, CavParams, FormationOffset, LeaderProfile, ModelError, SystemModel,
};
use crate::terminal_gain::{self, DeltaInterval, GainError, TerminalGain};
use crate::topology::{Peer, Topology, TopologyError};

pub const DEFAULT_TRUNCATION_TOL: f64 = 1e-12;
/// Hard cap on cost-to-go terms per series.
const MAX_SERIES_TERMS: usize = 1_000_000;

#[derive(Debug, Error)]
pub enum ValidationError {
    #[error("controllability fails: {0}")]
    Uncontrollable(String),
    #[error("no spanning tree rooted at the leader: {0}")]
    NoSpanningTree(String),
    #[error("disc radius {delta} outside the admissible interval ({lo}, {hi})")]
    DeltaInadmissible { delta: f64, lo: f64, hi: f64 },
    #[error("weight condition F_i >= |O_i| sum G_j fails for agents {agents:?} (min eigenvalues {min_eigenvalues:?})")]
    WeightCondition { agents: Vec<usize>, min_eigenvalues: Vec<f64> },
    #[error("input box does not contain the origin in its interior: {0}")]
    BoxInterior(String),
    #[error("invalid scenario: {0}")]
    Invalid(String),
    #[error("terminal gain synthesis failed: {0}")]
    Gain(#[from] GainError),
}

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("cannot parse scenario: {0}")]
    Parse(String),
    #[error(transparent)]
    Validation(#[from] ValidationError),
    #[error("run stopped{}: {source}", round.map(|t| format!(" at round {t}")).unwrap_or_default())]
    Engine { round: Option<usize>, source: EngineError },
    #[error("metric requires a zero-input leader")]
    DynamicLeaderUnsupported,
    #[error("stacked terminal matrix has spectral radius {0} >= 1")]
    DivergentSeries(f64),
    #[error("i/o: {0}")]
    Io(String),
}

impl From<EngineError> for HarnessError {
    fn from(source: EngineError) -> Self {
        HarnessError::Engine { round: source.round(), source }
    }
}

impl HarnessError {
    /// Process exit code used by the command-line tool.
    pub fn exit_code(&self) -> i32 {
        match self {
            HarnessError::Parse(_) | HarnessError::Validation(_) => 1,
            HarnessError::Engine { .. } | HarnessError::DynamicLeaderUnsupported | HarnessError::DivergentSeries(_) => 2,
            HarnessError::Io(_) => 3,
        }
    }
}

// ---------------------------------------------------------------------------
// file schema

#[derive(Debug, Clone, Deserialize, Serialize, PartialEq)]
#[serde(untagged)]
pub enum MatrixSpec {
    Scalar(f64),
    Diagonal(Vec<f64>),
    Full(Vec<Vec<f64>>),
}

impl MatrixSpec {
    pub fn to_matrix(&self, n: usize) -> Result<DMatrix<f64>, ValidationError> {
        match self {
            MatrixSpec::Scalar(s) => Ok(DMatrix::identity(n, n) * *s),
            MatrixSpec::Diagonal(d) if d.len() == n => Ok(DMatrix::from_diagonal(&DVector::from_column_slice(d))),
            MatrixSpec::Diagonal(d) => Err(ValidationError::Invalid(format!("diagonal of length {}, expected {n}", d.len()))),
            MatrixSpec::Full(rows) => rows_to_matrix(rows, n, n),
        }
    }
}

fn rows_to_matrix(rows: &[Vec<f64>], nrows: usize, ncols: usize) -> Result<DMatrix<f64>, ValidationError> {
    if rows.len() != nrows || rows.iter().any(|r| r.len() != ncols) {
        return Err(ValidationError::Invalid(format!("matrix must be {nrows}x{ncols}")));
    }
    Ok(DMatrix::from_fn(nrows, ncols, |i, j| rows[i][j]))
}

fn raw_matrix(rows: &[Vec<f64>]) -> Result<DMatrix<f64>, ValidationError> {
    let ncols = rows.first().map_or(0, |r| r.len());
    rows_to_matrix(rows, rows.len(), ncols)
}

#[derive(Debug, Clone, Deserialize, Serialize, PartialEq)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ModelSpec {
    Auv {
        surge_speed: f64,
        m_qdot: f64,
        m_uq: f64,
        m_uu_delta_s: f64,
        z_g: f64,
        z_b: f64,
        weight: f64,
        buoyancy: f64,
        i_y: f64,
        stern_lower: f64,
        stern_upper: f64,
    },
    Cav {
        tau: f64,
        input_lower: f64,
        input_upper: f64,
    },
    Continuous {
        a: Vec<Vec<f64>>,
        b: Vec<Vec<f64>>,
        input_lower: Vec<f64>,
        input_upper: Vec<f64>,
    },
    Discrete {
        a: Vec<Vec<f64>>,
        b: Vec<Vec<f64>>,
        input_lower: Vec<f64>,
        input_upper: Vec<f64>,
    },
}

impl ModelSpec {
    pub fn build(&self, dt: f64) -> Result<SystemModel, ValidationError> {
        let model_err = |e: ModelError| match e {
            ModelError::NotControllable { .. } => ValidationError::Uncontrollable(e.to_string()),
            ModelError::BoxNotInterior { .. } => ValidationError::BoxInterior(e.to_string()),
            other => ValidationError::Invalid(other.to_string()),
        };
        let (a, b, lo, hi) = match self {
            ModelSpec::Auv {
                surge_speed,
                m_qdot,
                m_uq,
                m_uu_delta_s,
                z_g,
                z_b,
                weight,
                buoyancy,
                i_y,
                stern_lower,
                stern_upper,
            } => {
                let p = AuvParams {
                    surge_speed: *surge_speed,
                    m_qdot: *m_qdot,
                    m_uq: *m_uq,
                    m_uu_delta_s: *m_uu_delta_s,
                    z_g: *z_g,
                    z_b: *z_b,
                    weight: *weight,
                    buoyancy: *buoyancy,
                    i_y: *i_y,
                    stern_lower: *stern_lower,
                    stern_upper: *stern_upper,
                };
                let (a_c, b_c) = p.continuous_model().map_err(model_err)?;
                let (a, b) = zoh_discretize(&a_c, &b_c, dt);
                (a, b, vec![*stern_lower], vec![*stern_upper])
            }
            ModelSpec::Cav { tau, input_lower, input_upper } => {
                let p = CavParams { tau: *tau, input_lower: *input_lower, input_upper: *input_upper, spacing: 1.0, driveline: None };
                let (a_c, b_c) = p.continuous_model().map_err(model_err)?;
                let (a, b) = zoh_discretize(&a_c, &b_c, dt);
                (a, b, vec![*input_lower], vec![*input_upper])
            }
            ModelSpec::Continuous { a, b, input_lower, input_upper } => {
                let (a_c, b_c) = (raw_matrix(a)?, raw_matrix(b)?);
                if !a_c.is_square() || b_c.nrows() != a_c.nrows() {
                    return Err(ValidationError::Invalid("continuous A/B dimensions disagree".into()));
                }
                let (a, b) = zoh_discretize(&a_c, &b_c, dt);
                (a, b, input_lower.clone(), input_upper.clone())
            }
            ModelSpec::Discrete { a, b, input_lower, input_upper } => {
                (raw_matrix(a)?, raw_matrix(b)?, input_lower.clone(), input_upper.clone())
            }
        };
        SystemModel::new(a, b, DVector::from_vec(lo), DVector::from_vec(hi)).map_err(model_err)
    }
}

#[derive(Debug, Clone, Deserialize, Serialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct TopologySpec {
    pub adjacency: Vec<Vec<u8>>,
    pub pinning: Vec<u8>,
}

#[derive(Debug, Clone, Deserialize, Serialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct WeightSpec {
    pub r: MatrixSpec,
    pub f: MatrixSpec,
    pub g: MatrixSpec,
}

#[derive(Debug, Clone, Deserialize, Serialize, PartialEq)]
#[serde(untagged)]
pub enum DeltaSpec {
    Value(f64),
    Keyword(String),
}

#[derive(Debug, Clone, Deserialize, Serialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct GainSpec {
    pub q: MatrixSpec,
    #[serde(default = "auto_delta")]
    pub delta: DeltaSpec,
}

fn auto_delta() -> DeltaSpec {
    DeltaSpec::Keyword("auto".into())
}

#[derive(Debug, Clone, Deserialize, Serialize, PartialEq, Default)]
#[serde(deny_unknown_fields)]
pub struct FormationSpec {
    /// Platoon spacing `d_0`: follower `i` targets `x_0 − [i·d_0, 0, …]`.
    pub spacing: Option<f64>,
    /// Explicit per-follower offsets.
    pub offsets: Option<Vec<Vec<f64>>>,
}

#[derive(Debug, Clone, Deserialize, Serialize, PartialEq)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum LeaderProfileSpec {
    None,
    CavSine,
    /// Rows `[time, u_1, …, u_m]`, piecewise constant from each time on.
    Table { rows: Vec<Vec<f64>> },
}

#[derive(Debug, Clone, Deserialize, Serialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct LeaderSpec {
    pub state: Vec<f64>,
    #[serde(default = "no_profile")]
    pub profile: LeaderProfileSpec,
}

fn no_profile() -> LeaderProfileSpec {
    LeaderProfileSpec::None
}

#[derive(Debug, Clone, Deserialize, Serialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct DisturbanceSpec {
    pub bound: f64,
    #[serde(default)]
    pub seed: u64,
}

#[derive(Debug, Clone, Deserialize, Serialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct ModelOverride {
    /// 1-based follower number.
    pub agent: usize,
    pub model: ModelSpec,
}

#[derive(Debug, Clone, Deserialize, Serialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct ToleranceSpec {
    #[serde(default = "default_tol_obj")]
    pub objective: f64,
    #[serde(default = "default_tol_feas")]
    pub feasibility: f64,
}

fn default_tol_obj() -> f64 {
    DEFAULT_TOL_OBJ
}

fn default_tol_feas() -> f64 {
    DEFAULT_TOL_FEAS
}

impl Default for ToleranceSpec {
    fn default() -> Self {
        Self { objective: DEFAULT_TOL_OBJ, feasibility: DEFAULT_TOL_FEAS }
    }
}

/// The on-disk scenario document.
#[derive(Debug, Clone, Deserialize, Serialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct ScenarioFile {
    pub name: String,
    pub dt: f64,
    pub horizon: usize,
    /// Run length in seconds.
    pub duration: f64,
    pub model: ModelSpec,
    pub topology: TopologySpec,
    /// One entry shared by all followers, or one per follower.
    pub weights: Vec<WeightSpec>,
    pub initial_states: Vec<Vec<f64>>,
    pub leader: LeaderSpec,
    pub gain: GainSpec,
    #[serde(default)]
    pub formation: FormationSpec,
    pub disturbance: Option<DisturbanceSpec>,
    #[serde(default)]
    pub plant_override: Vec<ModelOverride>,
    #[serde(default)]
    pub controller_override: Vec<ModelOverride>,
    /// Per-component convergence band on `|e_i|`.
    pub convergence_thresholds: Vec<f64>,
    #[serde(default)]
    pub tolerances: ToleranceSpec,
    /// Skip the weight-condition gate (ablation runs).
    #[serde(default)]
    pub waive_weight_condition: bool,
}

// ---------------------------------------------------------------------------
// validated scenario

#[derive(Debug, Clone, Serialize, PartialEq)]
pub struct Verdict {
    pub name: String,
    pub holds: bool,
    pub detail: String,
}

impl Verdict {
    fn new(name: &str, holds: bool, detail: impl Into<String>) -> Self {
        Self { name: name.to_string(), holds, detail: detail.into() }
    }
}

#[derive(Debug, Clone)]
pub struct ScenarioConfig {
    pub name: String,
    pub dt: f64,
    pub horizon: usize,
    pub steps: usize,
    pub nominal: SystemModel,
    pub controllers: Vec<SystemModel>,
    pub plants: Vec<SystemModel>,
    pub topology: Topology,
    pub weights: Vec<Weights>,
    pub initial_states: Vec<DVector<f64>>,
    pub leader_state: DVector<f64>,
    pub leader_profile: LeaderProfile,
    pub offsets: FormationOffset,
    pub q: DMatrix<f64>,
    pub delta: f64,
    pub delta_interval: DeltaInterval,
    pub gains: Vec<Arc<TerminalGain>>,
    pub disturbance: Option<DisturbanceSpec>,
    pub thresholds: DVector<f64>,
    pub tolerances: SolverTolerances,
    pub weight_condition_waived: bool,
    pub verdicts: Vec<Verdict>,
}

impl ScenarioConfig {
    pub fn follower_count(&self) -> usize {
        self.topology.follower_count()
    }

    pub fn state_dim(&self) -> usize {
        self.nominal.state_dim()
    }

    pub fn input_dim(&self) -> usize {
        self.nominal.input_dim()
    }

    pub fn has_dynamic_leader(&self) -> bool {
        !self.leader_profile.is_zero_input()
    }

    /// Propagator of the stacked assumed terminal errors. Row block `i` is
    /// `A_i e_i − B_i K_i Σ_j (𝒟_B⁻¹ℒ_B)_ij e_j`; with identical controllers
    /// this is `I ⊗ A − 𝒟_B⁻¹ℒ_B ⊗ BK`.
    pub fn terminal_propagator(&self) -> DMatrix<f64> {
        let n = self.state_dim();
        let big_n = self.follower_count();
        let lap = self
            .topology
            .normalized_pinned_laplacian()
            .expect("validated topology has an invertible pinned degree");
        let mut m = DMatrix::zeros(n * big_n, n * big_n);
        for i in 0..big_n {
            let c = &self.controllers[i];
            let bk = c.b() * &self.gains[i].k;
            for j in 0..big_n {
                let mut block = -&bk * lap[(i, j)];
                if i == j {
                    block += c.a();
                }
                m.view_mut((i * n, j * n), (n, n)).copy_from(&block);
            }
        }
        m
    }
}

pub fn parse_scenario(text: &str) -> Result<ScenarioFile, HarnessError> {
    toml::from_str(text).map_err(|e| HarnessError::Parse(e.to_string()))
}

pub fn load_scenario(path: impl AsRef<Path>) -> Result<ScenarioConfig, HarnessError> {
    let text = std::fs::read_to_string(path.as_ref())
        .map_err(|e| HarnessError::Io(format!("{}: {e}", path.as_ref().display())))?;
    Ok(validate(&parse_scenario(&text)?)?)
}

fn vector(v: &[f64], n: usize, what: &str) -> Result<DVector<f64>, ValidationError> {
    if v.len() != n {
        return Err(ValidationError::Invalid(format!("{what} has length {}, expected {n}", v.len())));
    }
    Ok(DVector::from_column_slice(v))
}

fn topology_error(e: TopologyError) -> ValidationError {
    match e {
        TopologyError::IsolatedAgent(_) | TopologyError::SingularPinnedDegree => ValidationError::NoSpanningTree(e.to_string()),
        other => ValidationError::Invalid(other.to_string()),
    }
}

/// Runs every check, in order, and returns the verdict list together with
/// the first failure (if any). `check` reports all verdicts even on failure.
pub fn assess(file: &ScenarioFile) -> (Vec<Verdict>, Result<ScenarioConfig, ValidationError>) {
    let mut verdicts = Vec::new();
    let result = assess_into(file, &mut verdicts);
    (verdicts, result)
}

pub fn validate(file: &ScenarioFile) -> Result<ScenarioConfig, ValidationError> {
    assess(file).1
}

fn assess_into(file: &ScenarioFile, verdicts: &mut Vec<Verdict>) -> Result<ScenarioConfig, ValidationError> {
    if !(file.dt > 0.0) || !(file.duration > 0.0) {
        return Err(ValidationError::Invalid("dt and duration must be positive".into()));
    }
    if file.horizon == 0 {
        return Err(ValidationError::Invalid("horizon must be at least 1".into()));
    }
    let steps = (file.duration / file.dt).round() as usize;

    let record = |verdicts: &mut Vec<Verdict>, name: &str, r: &Result<SystemModel, ValidationError>| match r {
        Ok(_) => {}
        Err(e @ ValidationError::Uncontrollable(_)) => verdicts.push(Verdict::new(name, false, e.to_string())),
        Err(e @ ValidationError::BoxInterior(_)) => verdicts.push(Verdict::new("box_interior", false, e.to_string())),
        Err(_) => {}
    };
    let nominal = file.model.build(file.dt);
    record(verdicts, "controllability", &nominal);
    let nominal = nominal?;
    let (n, m) = (nominal.state_dim(), nominal.input_dim());

    let topology = Topology::new(&file.topology.adjacency, &file.topology.pinning);
    if let Err(e) = &topology {
        if matches!(e, TopologyError::IsolatedAgent(_) | TopologyError::SingularPinnedDegree) {
            verdicts.push(Verdict::new("spanning_tree", false, e.to_string()));
        }
    }
    let topology = topology.map_err(topology_error)?;
    let big_n = topology.follower_count();

    let per_agent = |overrides: &[ModelOverride], what: &str| -> Result<Vec<SystemModel>, ValidationError> {
        let mut models = vec![nominal.clone(); big_n];
        for o in overrides {
            if o.agent == 0 || o.agent > big_n {
                return Err(ValidationError::Invalid(format!("{what} names agent {} of {big_n}", o.agent)));
            }
            let model = o.model.build(file.dt)?;
            if model.state_dim() != n || model.input_dim() != m {
                return Err(ValidationError::Invalid(format!("{what} for agent {} changes dimensions", o.agent)));
            }
            models[o.agent - 1] = model;
        }
        Ok(models)
    };
    let controllers = per_agent(&file.controller_override, "controller_override")?;
    let plants = per_agent(&file.plant_override, "plant_override")?;
    verdicts.push(Verdict::new("controllability", true, format!("rank {n} for every controller model")));
    verdicts.push(Verdict::new("box_interior", true, "origin interior to every input box"));

    let rooted = topology.has_leader_rooted_spanning_tree();
    verdicts.push(Verdict::new(
        "spanning_tree",
        rooted,
        if rooted { "every follower reachable from the leader" } else { "some follower unreachable from the leader" },
    ));
    if !rooted {
        return Err(ValidationError::NoSpanningTree("some follower is unreachable from the leader".into()));
    }

    let weights = match file.weights.len() {
        1 => vec![file.weights[0].clone(); big_n],
        len if len == big_n => file.weights.clone(),
        len => return Err(ValidationError::Invalid(format!("{len} weight entries for {big_n} followers"))),
    };
    let weights = weights
        .iter()
        .map(|w| {
            Weights::new(w.r.to_matrix(m)?, w.f.to_matrix(n)?, w.g.to_matrix(n)?)
                .map_err(|e| ValidationError::Invalid(e.to_string()))
        })
        .collect::<Result<Vec<_>, _>>()?;

    let report = local_ocp::check_weight_condition(&topology, &weights);
    let failing: Vec<usize> = report
        .min_eigenvalues
        .iter()
        .enumerate()
        .filter(|(_, &e)| e < -local_ocp::WEIGHT_CONDITION_SLACK)
        .map(|(i, _)| i + 1)
        .collect();
    verdicts.push(Verdict::new(
        "weight_condition",
        report.holds,
        format!(
            "min residual eigenvalues {:?}{}",
            report.min_eigenvalues,
            if file.waive_weight_condition { " (waived)" } else { "" }
        ),
    ));
    if !report.holds && !file.waive_weight_condition {
        return Err(ValidationError::WeightCondition { agents: failing, min_eigenvalues: report.min_eigenvalues });
    }

    let mut interval = terminal_gain::admissible_delta_interval(&topology, &nominal)?;
    for c in &controllers {
        interval = interval.intersect(&terminal_gain::admissible_delta_interval(&topology, c)?);
    }
    let (lo, hi) = interval.bounds();
    let delta = match &file.gain.delta {
        DeltaSpec::Value(d) => *d,
        DeltaSpec::Keyword(k) if k == "auto" => interval.default_delta().unwrap_or(f64::NAN),
        DeltaSpec::Keyword(k) => return Err(ValidationError::Invalid(format!("delta must be a number or \"auto\", got {k:?}"))),
    };
    let admissible = interval.contains(delta);
    verdicts.push(Verdict::new(
        "delta_admissible",
        admissible,
        format!("delta {delta} in ({lo}, {hi}){}", match interval {
            DeltaInterval::Open { rank_warning: true, .. } => ", unstable A with rank(B) != 1",
            _ => "",
        }),
    ));
    if !admissible {
        return Err(ValidationError::DeltaInadmissible { delta, lo, hi });
    }

    let q = file.gain.q.to_matrix(n)?;
    let mut cache: Vec<(SystemModel, Arc<TerminalGain>)> = Vec::new();
    let mut gains = Vec::with_capacity(big_n);
    for c in &controllers {
        let gain = match cache.iter().find(|(model, _)| model == c) {
            Some((_, g)) => g.clone(),
            None => {
                let g = Arc::new(TerminalGain::synthesize(c, &q, delta)?);
                cache.push((c.clone(), g.clone()));
                g
            }
        };
        gains.push(gain);
    }
    let worst_disc = gains.iter().map(|g| g.disc.max_spectral_radius).fold(0.0, f64::max);
    verdicts.push(Verdict::new(
        "disc_stability",
        true,
        format!("max spectral radius {worst_disc} over {} samples", gains[0].disc.samples),
    ));

    let initial_states = if file.initial_states.len() == big_n {
        file.initial_states
            .iter()
            .enumerate()
            .map(|(i, x)| vector(x, n, &format!("initial state of agent {}", i + 1)))
            .collect::<Result<Vec<_>, _>>()?
    } else {
        return Err(ValidationError::Invalid(format!(
            "{} initial states for {big_n} followers",
            file.initial_states.len()
        )));
    };
    let leader_state = vector(&file.leader.state, n, "leader state")?;
    let leader_profile = match &file.leader.profile {
        LeaderProfileSpec::None => LeaderProfile::None,
        LeaderProfileSpec::CavSine => LeaderProfile::CavSine,
        LeaderProfileSpec::Table { rows } => LeaderProfile::Table(
            rows.iter()
                .map(|r| {
                    if r.len() != m + 1 {
                        return Err(ValidationError::Invalid("leader table rows are [time, u...]".into()));
                    }
                    Ok((r[0], DVector::from_column_slice(&r[1..])))
                })
                .collect::<Result<Vec<_>, _>>()?,
        ),
    };

    let offsets = match (&file.formation.spacing, &file.formation.offsets) {
        (Some(_), Some(_)) => return Err(ValidationError::Invalid("formation sets both spacing and offsets".into())),
        (Some(d0), None) => {
            if !(*d0 > 0.0) {
                return Err(ValidationError::Invalid("spacing must be positive".into()));
            }
            FormationOffset::platoon(big_n, n, *d0)
        }
        (None, Some(rows)) => {
            if rows.len() != big_n {
                return Err(ValidationError::Invalid(format!("{} offsets for {big_n} followers", rows.len())));
            }
            FormationOffset::from_vectors(rows.iter().map(|r| vector(r, n, "offset")).collect::<Result<_, _>>()?)
        }
        (None, None) => FormationOffset::zero(big_n, n),
    };
    // offsets must be equilibria of the free dynamics for the error recursion
    for (i, c) in controllers.iter().enumerate() {
        let d = offsets.follower(i);
        let drift = (c.a() * d - d).amax();
        if drift > 1e-9 * (1.0 + d.amax()) {
            return Err(ValidationError::Invalid(format!(
                "offset of agent {} is not invariant under A (drift {drift:e})",
                i + 1
            )));
        }
    }

    if let Some(d) = &file.disturbance {
        if !(d.bound >= 0.0) {
            return Err(ValidationError::Invalid("disturbance bound must be non-negative".into()));
        }
    }
    let thresholds = vector(&file.convergence_thresholds, n, "convergence_thresholds")?;
    let tolerances = SolverTolerances {
        objective: file.tolerances.objective,
        feasibility: file.tolerances.feasibility,
        ..SolverTolerances::default()
    };

    let config = ScenarioConfig {
        name: file.name.clone(),
        dt: file.dt,
        horizon: file.horizon,
        steps,
        nominal,
        controllers,
        plants,
        topology,
        weights,
        initial_states,
        leader_state,
        leader_profile,
        offsets,
        q,
        delta,
        delta_interval: interval,
        gains,
        disturbance: file.disturbance.clone(),
        thresholds,
        tolerances,
        weight_condition_waived: file.waive_weight_condition,
        verdicts: Vec::new(),
    };
    let rho = linalg::spectral_radius(&config.terminal_propagator());
    verdicts.push(Verdict::new("terminal_consensus", rho < 1.0, format!("spectral radius of the terminal propagator {rho}")));
    if rho >= 1.0 {
        return Err(ValidationError::Invalid(format!("terminal propagator has spectral radius {rho} >= 1")));
    }
    Ok(ScenarioConfig { verdicts: verdicts.clone(), ..config })
}

// ---------------------------------------------------------------------------
// runs

/// Per-step record of a run.
#[derive(Debug, Clone)]
pub struct SimLog {
    pub dt: f64,
    pub follower_count: usize,
    pub state_dim: usize,
    pub input_dim: usize,
    pub offsets: FormationOffset,
    pub rounds: Vec<RoundReport>,
    pub disturbed: bool,
}

impl SimLog {
    pub fn len(&self) -> usize {
        self.rounds.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rounds.is_empty()
    }

    /// Rows in `trace.csv`: `T·(N+1)`.
    pub fn row_count(&self) -> usize {
        self.rounds.len() * (self.follower_count + 1)
    }

    /// Stacked `E^a(N_p|t) = [x_i^a(N_p|t) + δ_i − A^{N_p}x_0(t)]_i`.
    pub fn terminal_errors(&self) -> Vec<DVector<f64>> {
        let n = self.state_dim;
        self.rounds
            .iter()
            .map(|r| {
                let mut e = DVector::zeros(n * self.follower_count);
                for (i, a) in r.agents.iter().enumerate() {
                    let ei = &a.assumed_terminal + self.offsets.follower(i) - &r.leader_terminal;
                    e.rows_mut(i * n, n).copy_from(&ei);
                }
                e
            })
            .collect()
    }
}

/// Builds an engine whose initial follower errors relative to the
/// offset-corrected leader are scaled by `scale`.
pub fn build_engine(config: &ScenarioConfig, scale: f64, seed: Option<u64>) -> Result<Engine, EngineError> {
    let specs = (0..config.follower_count())
        .map(|i| {
            let target = &config.leader_state - config.offsets.follower(i);
            AgentSpec {
                controller: config.controllers[i].clone(),
                plant: config.plants[i].clone(),
                weights: config.weights[i].clone(),
                gain: config.gains[i].clone(),
                initial_state: &target + (&config.initial_states[i] - &target) * scale,
                initial_inputs: None,
            }
        })
        .collect();
    let leader = Leader {
        model: config.nominal.clone(),
        state: config.leader_state.clone(),
        profile: config.leader_profile.clone(),
    };
    let disturbance = config
        .disturbance
        .as_ref()
        .map(|d| Disturbance::new(d.bound, seed.unwrap_or(d.seed)));
    let engine_config = EngineConfig { horizon: config.horizon, dt: config.dt, tolerances: config.tolerances };
    Engine::new(engine_config, &config.topology, specs, leader, config.offsets.clone(), disturbance)
}

pub fn run_scenario(config: &ScenarioConfig) -> Result<SimLog, HarnessError> {
    run_scenario_seeded(config, None)
}

/// Runs `config.steps` rounds; `seed` overrides the disturbance seed.
pub fn run_scenario_seeded(config: &ScenarioConfig, seed: Option<u64>) -> Result<SimLog, HarnessError> {
    let mut engine = build_engine(config, 1.0, seed)?;
    let mut rounds = Vec::with_capacity(config.steps);
    for _ in 0..config.steps {
        rounds.push(engine.round()?);
    }
    Ok(SimLog {
        dt: config.dt,
        follower_count: config.follower_count(),
        state_dim: config.state_dim(),
        input_dim: config.input_dim(),
        offsets: config.offsets.clone(),
        rounds,
        disturbed: config.disturbance.as_ref().is_some_and(|d| d.bound > 0.0),
    })
}

pub fn probe_scenario(config: &ScenarioConfig, scales: &[f64]) -> Result<ProbeReport, HarnessError> {
    Ok(dmpc_engine::feasibility_probe(scales, config.steps, |s| build_engine(config, s, None))?)
}

// ---------------------------------------------------------------------------
// metrics

#[derive(Debug, Clone, PartialEq)]
pub struct ErrorSeries {
    /// `errors[i][t] = x_i(t) + δ_i − x_0(t)`.
    pub errors: Vec<Vec<DVector<f64>>>,
    /// `max_t ‖e_i(t)‖_∞` per agent.
    pub max_norm: Vec<f64>,
    /// First index after which `|e_i|` stays inside the band, per agent.
    pub convergence_index: Vec<Option<usize>>,
}

impl ErrorSeries {
    pub fn converged(&self) -> bool {
        self.convergence_index.iter().all(Option::is_some)
    }

    /// Latest convergence index over all agents.
    pub fn convergence_time(&self) -> Option<usize> {
        self.convergence_index.iter().try_fold(0, |acc, c| c.map(|c| acc.max(c)))
    }
}

pub fn consensus_error_series(log: &SimLog, thresholds: &DVector<f64>) -> ErrorSeries {
    let errors: Vec<Vec<DVector<f64>>> = (0..log.follower_count)
        .map(|i| {
            log.rounds
                .iter()
                .map(|r| &r.agents[i].state + log.offsets.follower(i) - &r.leader_state)
                .collect()
        })
        .collect();
    let max_norm = errors.iter().map(|s| s.iter().map(|e| e.amax()).fold(0.0, f64::max)).collect();
    let inside = |e: &DVector<f64>| e.iter().zip(thresholds.iter()).all(|(v, b)| v.abs() <= *b);
    let convergence_index = errors
        .iter()
        .map(|s| {
            let last_out = s.iter().rposition(|e| !inside(e));
            match last_out {
                None => Some(0),
                Some(k) if k + 1 < s.len() => Some(k + 1),
                Some(_) => None,
            }
        })
        .collect();
    ErrorSeries { errors, max_norm, convergence_index }
}

/// `‖E^a(N_p|t) − Ā·E^a(N_p|t−1)‖₂` per step (0 at `t = 0`).
pub fn terminal_recursion_residuals(log: &SimLog, config: &ScenarioConfig) -> Result<Vec<f64>, HarnessError> {
    Ok(agent_recursion_residuals(log, config)?
        .into_iter()
        .map(|per_agent| per_agent.iter().map(|r| r * r).sum::<f64>().sqrt())
        .collect())
}

/// Per-agent blocks of the recursion residual, indexed `[t][i]`.
pub fn agent_recursion_residuals(log: &SimLog, config: &ScenarioConfig) -> Result<Vec<Vec<f64>>, HarnessError> {
    if config.has_dynamic_leader() {
        return Err(HarnessError::DynamicLeaderUnsupported);
    }
    let a_bar = config.terminal_propagator();
    let n = log.state_dim;
    let errors = log.terminal_errors();
    let mut out = Vec::with_capacity(errors.len());
    for t in 0..errors.len() {
        if t == 0 {
            out.push(vec![0.0; log.follower_count]);
            continue;
        }
        let d = &errors[t] - &a_bar * &errors[t - 1];
        out.push((0..log.follower_count).map(|i| d.rows(i * n, n).norm()).collect());
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct LyapunovSeries {
    pub j_star: Vec<f64>,
    /// Truncated cost-to-go sums.
    pub q_star: Vec<f64>,
    /// Geometric bound on the discarded tail, included in `v`.
    pub tail_bound: Vec<f64>,
    pub v: Vec<f64>,
}

/// Stage cost of the terminal consensus law at stacked error `e`, summed
/// over agents: `‖(1/|𝕀_i|)K_i Σ_j (e_i − e_j)‖_{R_i} + Σ_j ‖e_i − e_j‖_{G_i}`.
pub fn terminal_stage_cost(config: &ScenarioConfig, e: &DVector<f64>) -> f64 {
    let n = config.state_dim();
    let zero = DVector::zeros(n);
    let err = |p: &Peer| match p {
        Peer::Leader => zero.clone(),
        Peer::Follower(j) => e.rows(j * n, n).into_owned(),
    };
    let mut total = 0.0;
    for i in 0..config.follower_count() {
        let ei = e.rows(i * n, n).into_owned();
        let peers = config.topology.pinned_in_neighbors(i);
        let mut sum = DVector::zeros(n);
        for p in peers {
            let d = &ei - err(p);
            total += local_ocp::weighted_norm(&d, &config.weights[i].g);
            sum += d;
        }
        let u = (&config.gains[i].k * sum) / peers.len() as f64;
        total += local_ocp::weighted_norm(&u, &config.weights[i].r);
    }
    total
}

/// Lipschitz constant `c` with `terminal_stage_cost(e) ≤ c‖e‖₂`.
fn stage_cost_lipschitz(config: &ScenarioConfig) -> f64 {
    let n = config.state_dim();
    let big_n = config.follower_count();
    let mut c = 0.0;
    for i in 0..big_n {
        let peers = config.topology.pinned_in_neighbors(i);
        let l_g = linalg::psd_factor(&config.weights[i].g);
        let l_r = linalg::psd_factor(&config.weights[i].r);
        let mut sum_sel = DMatrix::zeros(n, n * big_n);
        for p in peers {
            let mut sel = DMatrix::zeros(n, n * big_n);
            sel.view_mut((0, i * n), (n, n)).fill_with_identity();
            if let Peer::Follower(j) = p {
                sel.view_mut((0, j * n), (n, n)).copy_from(&(-DMatrix::<f64>::identity(n, n)));
            }
            if l_g.nrows() > 0 {
                c += (&l_g * &sel).norm_squared().sqrt();
            }
            sum_sel += sel;
        }
        if l_r.nrows() > 0 {
            c += (&l_r * &config.gains[i].k * sum_sel / peers.len() as f64).norm();
        }
    }
    c
}

/// `V(t) = Σ_i J_i*(t) + q_i*(t)` with `q*` summed along the terminal
/// error recursion until a stage term drops below `truncation_tol`.
pub fn lyapunov_series(log: &SimLog, config: &ScenarioConfig, truncation_tol: f64) -> Result<LyapunovSeries, HarnessError> {
    if config.has_dynamic_leader() {
        return Err(HarnessError::DynamicLeaderUnsupported);
    }
    let a_bar = config.terminal_propagator();
    let rho = linalg::spectral_radius(&a_bar);
    if rho >= 1.0 {
        return Err(HarnessError::DivergentSeries(rho));
    }
    // smallest power p with ‖Ā^p‖₂ < 1, for the tail bound
    let mut powers = vec![DMatrix::identity(a_bar.nrows(), a_bar.ncols())];
    let contraction = loop {
        let next = powers.last().unwrap() * &a_bar;
        let norm = next.clone().svd(false, false).singular_values.max();
        if norm < 1.0 {
            break norm;
        }
        powers.push(next);
        if powers.len() > 10_000 {
            return Err(HarnessError::DivergentSeries(rho));
        }
    };
    let block_norm: f64 = powers.iter().map(|p| p.clone().svd(false, false).singular_values.max()).sum();
    let lipschitz = stage_cost_lipschitz(config);

    let errors = log.terminal_errors();
    let mut out = LyapunovSeries { j_star: Vec::new(), q_star: Vec::new(), tail_bound: Vec::new(), v: Vec::new() };
    for (t, r) in log.rounds.iter().enumerate() {
        let j: f64 = r.agents.iter().map(|a| a.objective).sum();
        let mut e = errors[t].clone();
        let mut q = 0.0;
        let mut terms = 0;
        loop {
            let s = terminal_stage_cost(config, &e);
            q += s;
            e = &a_bar * e;
            terms += 1;
            if s < truncation_tol || terms >= MAX_SERIES_TERMS {
                break;
            }
        }
        let tail = lipschitz * block_norm * e.norm() / (1.0 - contraction);
        out.j_star.push(j);
        out.q_star.push(q);
        out.tail_bound.push(tail);
        out.v.push(j + q + tail);
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// outputs

#[derive(Debug, Clone, Serialize)]
pub struct ShiftSummary {
    pub rounds_checked: usize,
    pub all_feasible: bool,
    /// `max_t (J_i*(t) − shifted cost)`; non-positive when the bound holds.
    pub max_cost_excess: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct Summary {
    pub scenario: String,
    pub rounds: usize,
    pub dt: f64,
    pub converged: bool,
    /// Seconds, `null` when the agent never settles in the band.
    pub convergence_time: Vec<Option<f64>>,
    pub max_input_magnitude: Vec<f64>,
    pub max_error_norm: Vec<f64>,
    pub min_v: Option<f64>,
    pub final_v: Option<f64>,
    pub max_recursion_residual: Option<f64>,
    pub delta: f64,
    pub terminal_spectral_radius: f64,
    pub shift: ShiftSummary,
    pub verdicts: Vec<Verdict>,
}

pub fn summarize(log: &SimLog, config: &ScenarioConfig) -> Summary {
    let series = consensus_error_series(log, &config.thresholds);
    let lyap = lyapunov_series(log, config, DEFAULT_TRUNCATION_TOL).ok();
    let residual = terminal_recursion_residuals(log, config)
        .ok()
        .map(|r| r.into_iter().fold(0.0, f64::max));
    let max_input = (0..log.follower_count)
        .map(|i| log.rounds.iter().map(|r| r.agents[i].applied.amax()).fold(0.0, f64::max))
        .collect();
    let mut shift = ShiftSummary { rounds_checked: 0, all_feasible: true, max_cost_excess: f64::NEG_INFINITY };
    for r in &log.rounds {
        for a in &r.agents {
            if let Some(s) = a.shift {
                shift.rounds_checked += 1;
                shift.all_feasible &= s.feasible;
                shift.max_cost_excess = shift.max_cost_excess.max(a.objective - s.cost);
            }
        }
    }
    if shift.rounds_checked == 0 {
        shift.max_cost_excess = 0.0;
    }
    Summary {
        scenario: config.name.clone(),
        rounds: log.len(),
        dt: log.dt,
        converged: series.converged(),
        convergence_time: series.convergence_index.iter().map(|c| c.map(|k| k as f64 * log.dt)).collect(),
        max_input_magnitude: max_input,
        max_error_norm: series.max_norm.clone(),
        min_v: lyap.as_ref().map(|l| l.v.iter().cloned().fold(f64::INFINITY, f64::min)),
        final_v: lyap.as_ref().and_then(|l| l.v.last().cloned()),
        max_recursion_residual: residual,
        delta: config.delta,
        terminal_spectral_radius: linalg::spectral_radius(&config.terminal_propagator()),
        shift,
        verdicts: config.verdicts.clone(),
    }
}

fn num(out: &mut String, v: f64) {
    write!(out, ",{v:.16e}").unwrap();
}

/// Renders `trace.csv`.
pub fn trace_csv(log: &SimLog) -> String {
    let (n, m) = (log.state_dim, log.input_dim);
    let mut out = String::from("t,agent_id");
    for c in 1..=n {
        write!(out, ",x{c}").unwrap();
    }
    for c in 1..=m {
        write!(out, ",u{c}").unwrap();
    }
    out.push_str(",J_star");
    for c in 1..=n {
        write!(out, ",e{c}").unwrap();
    }
    out.push('\n');
    for r in &log.rounds {
        write!(out, "{},0", r.t).unwrap();
        r.leader_state.iter().for_each(|v| num(&mut out, *v));
        r.leader_input.iter().for_each(|v| num(&mut out, *v));
        num(&mut out, 0.0);
        (0..n).for_each(|_| num(&mut out, 0.0));
        out.push('\n');
        for (i, a) in r.agents.iter().enumerate() {
            write!(out, "{},{}", r.t, i + 1).unwrap();
            a.state.iter().for_each(|v| num(&mut out, *v));
            a.applied.iter().for_each(|v| num(&mut out, *v));
            num(&mut out, a.objective);
            let e = &a.state + log.offsets.follower(i) - &r.leader_state;
            e.iter().for_each(|v| num(&mut out, *v));
            out.push('\n');
        }
    }
    out
}

/// Renders `terminal.csv`; the residual column is empty when the recursion
/// does not apply (dynamic leader).
pub fn terminal_csv(log: &SimLog, residuals: Option<&[Vec<f64>]>) -> String {
    let n = log.state_dim;
    let mut out = String::from("t,agent_id");
    for c in 1..=n {
        write!(out, ",x{c}").unwrap();
    }
    out.push_str(",residual\n");
    for (t, r) in log.rounds.iter().enumerate() {
        write!(out, "{},0", r.t).unwrap();
        r.leader_terminal.iter().for_each(|v| num(&mut out, *v));
        out.push_str(",\n");
        for (i, a) in r.agents.iter().enumerate() {
            write!(out, "{},{}", r.t, i + 1).unwrap();
            a.assumed_terminal.iter().for_each(|v| num(&mut out, *v));
            match residuals {
                Some(res) => num(&mut out, res[t][i]),
                None => out.push(','),
            }
            out.push('\n');
        }
    }
    out
}

/// Writes `trace.csv`, `terminal.csv` and `summary.json` into `out_dir`.
/// Everything is rendered before the first file is created.
pub fn emit_outputs(log: &SimLog, config: &ScenarioConfig, out_dir: impl AsRef<Path>) -> Result<Summary, HarnessError> {
    if log.is_empty() {
        return Err(HarnessError::Io("refusing to write outputs for an empty log".into()));
    }
    let residuals = agent_recursion_residuals(log, config).ok();
    let summary = summarize(log, config);
    let mut files = BTreeMap::new();
    files.insert("trace.csv", trace_csv(log));
    files.insert("terminal.csv", terminal_csv(log, residuals.as_deref()));
    files.insert(
        "summary.json",
        serde_json::to_string_pretty(&summary).map_err(|e| HarnessError::Io(e.to_string()))? + "\n",
    );
    let dir = out_dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| HarnessError::Io(format!("{}: {e}", dir.display())))?;
    for (name, body) in &files {
        let path = dir.join(name);
        std::fs::write(&path, body).map_err(|e| HarnessError::Io(format!("{}: {e}", path.display())))?;
    }
    Ok(summary)
}
