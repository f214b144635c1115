//! Terminal consensus gain synthesis.
//!
//! The gain comes from the modified algebraic Riccati equation
//!
//! ```text
//! P = AᵀPA − (1−δ²)·AᵀPB(BᵀPB + I)⁻¹BᵀPA + Q
//! K = (BᵀPB + I)⁻¹BᵀPA
//! ```
//!
//! and is accepted only if `A − (1−σ)BK` is Schur stable on the sampled
//! disc `|σ| < δ`. `K` carries the sign that makes `A − BK` the stabilized
//! direction; the terminal update law applies it as `u = K·(mean neighbor
//! terminal − own terminal)`.

use std::f64::consts::PI;

use nalgebra::{Complex, DMatrix};
use thiserror::Error;

use crate::linalg;
use crate::plant_models::SystemModel;
use crate::topology::{Topology, TopologyError};

pub const MARE_MAX_ITERATIONS: usize = 100_000;
pub const MARE_STEP_TOLERANCE: f64 = 1e-13;
pub const MARE_RESIDUAL_TOLERANCE: f64 = 1e-10;
/// Eigenvalues whose magnitude exceeds `1 + UNSTABLE_MARGIN` count as unstable.
pub const UNSTABLE_MARGIN: f64 = 1e-9;
pub const DEFAULT_DISC_SAMPLES: usize = 64;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GainError {
    #[error("Riccati iteration did not converge within {iterations} iterations (last relative step {last_step:e})")]
    NonConvergence { iterations: usize, last_step: f64 },
    #[error("Riccati solution is not positive definite (min eigenvalue {min_eigenvalue:e})")]
    NotPositiveDefinite { min_eigenvalue: f64 },
    #[error("A - (1-σ)BK is not Schur stable on the disc: radius {} at σ = {}", .0.max_spectral_radius, .0.worst_sigma)]
    DiscUnstable(DiscReport),
    #[error("disc check needs at least 64 phase samples, got {0}")]
    TooFewSamples(usize),
    #[error("Riccati relative residual {0:e} exceeds tolerance")]
    ResidualTooLarge(f64),
    #[error("design weight Q must be symmetric positive definite and {n}x{n}")]
    InvalidDesignWeight { n: usize },
    #[error(transparent)]
    Topology(#[from] TopologyError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct DiscReport {
    pub max_spectral_radius: f64,
    pub worst_sigma: Complex<f64>,
    pub samples: usize,
}

impl DiscReport {
    pub fn passes(&self) -> bool {
        self.max_spectral_radius < 1.0
    }
}

/// Right-hand side of the Riccati fixed-point map.
fn mare_map(a: &DMatrix<f64>, b: &DMatrix<f64>, q: &DMatrix<f64>, delta: f64, p: &DMatrix<f64>) -> DMatrix<f64> {
    let m = b.ncols();
    let at = a.transpose();
    let pb = p * b;
    let s = b.transpose() * &pb + DMatrix::identity(m, m);
    let s_inv = s.try_inverse().expect("BᵀPB + I is positive definite");
    let apb = &at * &pb;
    let ata = &at * p * a;
    &ata - (&apb * s_inv * apb.transpose()) * (1.0 - delta * delta) + q
}

/// Frobenius norm of the Riccati defect at `p`.
pub fn mare_residual(model: &SystemModel, q: &DMatrix<f64>, delta: f64, p: &DMatrix<f64>) -> f64 {
    (mare_map(model.a(), model.b(), q, delta, p) - p).norm()
}

/// Fixed-point iteration from `P₀ = Q`, symmetrized every step.
pub fn solve_mare(model: &SystemModel, q: &DMatrix<f64>, delta: f64) -> Result<DMatrix<f64>, GainError> {
    let n = model.state_dim();
    if q.shape() != (n, n) || !linalg::is_symmetric(q, 1e-12) || linalg::min_sym_eigenvalue(q) <= 0.0 {
        return Err(GainError::InvalidDesignWeight { n });
    }
    let mut p = q.clone();
    let mut last_step = f64::INFINITY;
    let mut converged = false;
    for _ in 0..MARE_MAX_ITERATIONS {
        let next = linalg::symmetrize(&mare_map(model.a(), model.b(), q, delta, &p));
        if !next.iter().all(|v| v.is_finite()) {
            break;
        }
        last_step = (&next - &p).norm() / next.norm();
        p = next;
        if last_step < MARE_STEP_TOLERANCE {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(GainError::NonConvergence {
            iterations: MARE_MAX_ITERATIONS,
            last_step,
        });
    }
    let min_eigenvalue = linalg::min_sym_eigenvalue(&p);
    if min_eigenvalue <= 0.0 {
        return Err(GainError::NotPositiveDefinite { min_eigenvalue });
    }
    Ok(p)
}

/// `K = (BᵀPB + I)⁻¹BᵀPA`.
pub fn terminal_gain(p: &DMatrix<f64>, model: &SystemModel) -> DMatrix<f64> {
    let b = model.b();
    let m = b.ncols();
    let s = b.transpose() * p * b + DMatrix::identity(m, m);
    s.try_inverse().expect("BᵀPB + I is positive definite") * b.transpose() * p * model.a()
}

/// Spectral radius of the complex matrix `A − (1−σ)BK`, computed through
/// its real 2n×2n embedding (same spectrum plus conjugates).
fn disc_mode_radius(a: &DMatrix<f64>, bk: &DMatrix<f64>, sigma: Complex<f64>) -> f64 {
    let n = a.nrows();
    let re = a - bk * (1.0 - sigma.re);
    let im = bk * sigma.im;
    let mut emb = DMatrix::zeros(2 * n, 2 * n);
    emb.view_mut((0, 0), (n, n)).copy_from(&re);
    emb.view_mut((n, n), (n, n)).copy_from(&re);
    emb.view_mut((0, n), (n, n)).copy_from(&(-&im));
    emb.view_mut((n, 0), (n, n)).copy_from(&im);
    linalg::spectral_radius(&emb)
}

/// Samples `σ` on the rings `|σ| ∈ {0, δ/2, 0.99δ}` with `phase_samples`
/// uniformly spaced phases each.
pub fn verify_schur_disc(
    model: &SystemModel,
    k: &DMatrix<f64>,
    delta: f64,
    phase_samples: usize,
) -> Result<DiscReport, GainError> {
    if phase_samples < 64 {
        return Err(GainError::TooFewSamples(phase_samples));
    }
    let bk = model.b() * k;
    let mut report = DiscReport {
        max_spectral_radius: f64::NEG_INFINITY,
        worst_sigma: Complex::new(0.0, 0.0),
        samples: 0,
    };
    for radius in [0.0, 0.5 * delta, 0.99 * delta] {
        for s in 0..phase_samples {
            let phase = 2.0 * PI * s as f64 / phase_samples as f64;
            let sigma = Complex::from_polar(radius, phase);
            let r = disc_mode_radius(model.a(), &bk, sigma);
            report.samples += 1;
            if r > report.max_spectral_radius {
                report.max_spectral_radius = r;
                report.worst_sigma = sigma;
            }
        }
    }
    if report.passes() {
        Ok(report)
    } else {
        Err(GainError::DiscUnstable(report))
    }
}

/// Open interval of admissible disc radii `δ`.
#[derive(Debug, Clone, PartialEq)]
pub enum DeltaInterval {
    Open {
        lo: f64,
        hi: f64,
        /// Set when `A` has unstable eigenvalues but `B` is not rank one,
        /// so the upper bound is not backed by the existence result.
        rank_warning: bool,
    },
    Empty { lo: f64, hi: f64 },
}

impl DeltaInterval {
    pub fn bounds(&self) -> (f64, f64) {
        match *self {
            DeltaInterval::Open { lo, hi, .. } | DeltaInterval::Empty { lo, hi } => (lo, hi),
        }
    }

    pub fn is_empty(&self) -> bool {
        matches!(self, DeltaInterval::Empty { .. })
    }

    pub fn contains(&self, delta: f64) -> bool {
        match *self {
            DeltaInterval::Open { lo, hi, .. } => lo < delta && delta < hi,
            DeltaInterval::Empty { .. } => false,
        }
    }

    /// Geometric midpoint `√(lo·hi)`, or the arithmetic one when `lo = 0`
    /// (the geometric midpoint would sit on the excluded endpoint).
    pub fn default_delta(&self) -> Option<f64> {
        match *self {
            DeltaInterval::Open { lo, hi, .. } if lo > 0.0 => Some((lo * hi).sqrt()),
            DeltaInterval::Open { lo, hi, .. } => Some(0.5 * (lo + hi)),
            DeltaInterval::Empty { .. } => None,
        }
    }

    /// Intersection, used when agents run different controller models.
    pub fn intersect(&self, other: &DeltaInterval) -> DeltaInterval {
        let (lo1, hi1) = self.bounds();
        let (lo2, hi2) = other.bounds();
        let (lo, hi) = (lo1.max(lo2), hi1.min(hi2));
        let warn = |d: &DeltaInterval| matches!(d, DeltaInterval::Open { rank_warning: true, .. });
        if self.is_empty() || other.is_empty() || lo >= hi {
            DeltaInterval::Empty { lo, hi }
        } else {
            DeltaInterval::Open { lo, hi, rank_warning: warn(self) || warn(other) }
        }
    }
}

pub fn admissible_delta_interval(topology: &Topology, model: &SystemModel) -> Result<DeltaInterval, GainError> {
    let lo = topology.spectral_radius_pinned()?;
    let unstable: Vec<f64> = linalg::eigen_magnitudes(model.a())
        .into_iter()
        .filter(|&m| m > 1.0 + UNSTABLE_MARGIN)
        .collect();
    let (hi, rank_warning) = if unstable.is_empty() {
        (1.0, false)
    } else {
        let product: f64 = unstable.iter().product();
        (1.0 / product, linalg::rank(model.b(), 1e-10) != 1)
    };
    Ok(if lo < hi {
        DeltaInterval::Open { lo, hi, rank_warning }
    } else {
        DeltaInterval::Empty { lo, hi }
    })
}

/// `Ā = I_N ⊗ A − 𝒟_B⁻¹ℒ_B ⊗ BK`, the propagator of stacked assumed
/// terminal errors.
#[derive(Debug, Clone, PartialEq)]
pub struct StackedTerminal {
    pub matrix: DMatrix<f64>,
    pub spectral_radius: f64,
}

pub fn stacked_terminal_matrix(
    topology: &Topology,
    model: &SystemModel,
    k: &DMatrix<f64>,
) -> Result<StackedTerminal, GainError> {
    let n_agents = topology.follower_count();
    let lap = topology.normalized_pinned_laplacian()?;
    let matrix = linalg::kron(&DMatrix::identity(n_agents, n_agents), model.a())
        - linalg::kron(&lap, &(model.b() * k));
    let spectral_radius = linalg::spectral_radius(&matrix);
    Ok(StackedTerminal { matrix, spectral_radius })
}

/// Synthesized terminal ingredients for one controller model.
#[derive(Debug, Clone, PartialEq)]
pub struct TerminalGain {
    pub p: DMatrix<f64>,
    pub k: DMatrix<f64>,
    pub q: DMatrix<f64>,
    pub delta: f64,
    pub mare_residual: f64,
    pub disc: DiscReport,
}

impl TerminalGain {
    /// Solves the Riccati equation, forms `K`, and gates on the residual and
    /// the sampled disc check.
    pub fn synthesize(model: &SystemModel, q: &DMatrix<f64>, delta: f64) -> Result<Self, GainError> {
        let p = solve_mare(model, q, delta)?;
        let residual = mare_residual(model, q, delta, &p);
        if residual / p.norm() > MARE_RESIDUAL_TOLERANCE {
            return Err(GainError::ResidualTooLarge(residual / p.norm()));
        }
        let k = terminal_gain(&p, model);
        let disc = verify_schur_disc(model, &k, delta, DEFAULT_DISC_SAMPLES)?;
        Ok(Self {
            p,
            k,
            q: q.clone(),
            delta,
            mare_residual: residual,
            disc,
        })
    }

    pub fn relative_residual(&self) -> f64 {
        self.mare_residual / self.p.norm()
    }
}
