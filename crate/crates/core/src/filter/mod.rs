//! Consensus Kalman filtering with partial sharing: gain computations, the
//! local covariance recursion, and the consensus stability bound.

mod agent;
mod run;

pub use agent::{consensus_innovation, filter_step, AgentRuntime, Fragment};
pub use run::{
    compute_gains, full_filter_run, run_online, simulate_run, AgentGains, GainTrajectory,
    GainVariant, InitialConditions, NetworkRun, NoiseMode, RunTrace, Scenario,
};

use crate::error::{Error, Result};
use crate::linalg::{self, Matrix};
use crate::model::{NetworkGraph, ObservationModel};
use crate::selection::SelectionSchedule;

/// Suboptimal Kalman gain `K = A P Hᵀ (R + H P Hᵀ)⁻¹`.
pub fn kalman_gain(p: &Matrix, obs: &ObservationModel, a: &Matrix) -> Result<Matrix> {
    let h = obs.h();
    let innovation = linalg::symmetrized(obs.r() + h * p * h.transpose());
    // K = (S⁻¹ H P Aᵀ)ᵀ with S symmetric
    let rhs = h * p * a.transpose();
    let kt = linalg::spd_solve(&innovation, &rhs, "innovation covariance R + H P Hᵀ")?;
    Ok(kt.transpose())
}

/// `F̂ = A − K H`.
pub fn decoupled_transition(a: &Matrix, k: &Matrix, obs: &ObservationModel) -> Matrix {
    a - k * obs.h()
}

/// One step of the local covariance recursion
/// `P⁺ = F̂ P F̂ᵀ + K R Kᵀ + Q`, symmetrized.
pub fn riccati_step(p: &Matrix, a: &Matrix, q: &Matrix, obs: &ObservationModel, k: &Matrix) -> Matrix {
    let f = decoupled_transition(a, k, obs);
    let next = &f * p * f.transpose() + k * obs.r() * k.transpose() + q;
    linalg::symmetrized(next)
}

/// `M̄ = P⁻¹ + Hᵀ R⁻¹ H`.
pub fn information_matrix(p: &Matrix, obs: &ObservationModel) -> Result<Matrix> {
    let p_inv = linalg::spd_inverse(p, "filter covariance P")?;
    Ok(linalg::symmetrized(p_inv + obs.information()?))
}

/// Consensus gain `C = γ A M̄⁻¹`.
pub fn consensus_gain(gamma: f64, a: &Matrix, p: &Matrix, obs: &ObservationModel) -> Result<Matrix> {
    let m_bar = information_matrix(p, obs)?;
    consensus_gain_from_information(gamma, a, &m_bar)
}

pub(crate) fn consensus_gain_from_information(gamma: f64, a: &Matrix, m_bar: &Matrix) -> Result<Matrix> {
    let ct = linalg::spd_solve(m_bar, &a.transpose(), "information matrix M̄")?;
    Ok(ct.transpose() * gamma)
}

/// Converged solution of the local covariance recursion.
#[derive(Debug, Clone)]
pub struct SteadyState {
    pub covariance: Matrix,
    pub iterations: usize,
    pub last_delta: f64,
}

pub const STEADY_STATE_TOLERANCE: f64 = 1e-11;
pub const STEADY_STATE_MAX_ITERATIONS: usize = 100_000;

/// Iterates the covariance recursion with the suboptimal gain from `P(0) = I`
/// until the Frobenius change drops below `1e-11`.
pub fn steady_state_covariance(a: &Matrix, q: &Matrix, obs: &ObservationModel) -> Result<SteadyState> {
    let m = a.nrows();
    let mut p = Matrix::identity(m, m);
    let mut last_delta = f64::INFINITY;
    for it in 1..=STEADY_STATE_MAX_ITERATIONS {
        let k = kalman_gain(&p, obs, a)?;
        let next = riccati_step(&p, a, q, obs, &k);
        last_delta = (&next - &p).norm();
        p = next;
        if !last_delta.is_finite() {
            break;
        }
        if last_delta < STEADY_STATE_TOLERANCE {
            return Ok(SteadyState {
                covariance: p,
                iterations: it,
                last_delta,
            });
        }
    }
    Err(Error::NoConvergence {
        what: "steady-state covariance",
        iterations: STEADY_STATE_MAX_ITERATIONS,
        last_delta,
    })
}

/// Quantities entering the consensus step-size bound.
#[derive(Debug, Clone)]
pub struct StabilityProfile {
    /// `blockdiag{(P_i + (Hᵢᵀ Rᵢ⁻¹ Hᵢ)⁻¹)⁻¹}`
    pub lambda_i: Matrix,
    /// `blockdiag{M̄ᵢ⁻¹}`
    pub lambda_ii: Matrix,
    pub lambda_i_min: f64,
    /// `λmax((L ⊗ I) Λ_II (L ⊗ I))`
    pub coupled_max: f64,
    pub sharing_probability: f64,
    pub gamma_star: f64,
}

impl StabilityProfile {
    /// The bound for another sharing probability, all else fixed.
    pub fn gamma_star_for(&self, sharing_probability: f64) -> f64 {
        (self.lambda_i_min / self.coupled_max).sqrt() / sharing_probability.sqrt()
    }
}

/// Upper bound `γ*` on the consensus step size:
/// `γ* = (1/√p_e) · (λmin(Λ_I) / λmax((L⊗I) Λ_II (L⊗I)))^{1/2}`.
pub fn gamma_bound(
    graph: &NetworkGraph,
    steady: &[Matrix],
    observers: &[ObservationModel],
    sharing_probability: f64,
) -> Result<StabilityProfile> {
    let agents = graph.agent_count();
    if steady.len() != agents || observers.len() != agents {
        return Err(Error::Dimension(format!(
            "gamma bound needs {agents} covariances and observers, got {} and {}",
            steady.len(),
            observers.len()
        )));
    }
    if !(sharing_probability > 0.0 && sharing_probability <= 1.0) {
        return Err(Error::InvalidArgument(format!(
            "sharing probability {sharing_probability} outside (0, 1]"
        )));
    }
    let mut blocks_i = Vec::with_capacity(agents);
    let mut blocks_ii = Vec::with_capacity(agents);
    for (p, obs) in steady.iter().zip(observers) {
        let info = obs.information()?;
        let info_inv = linalg::spd_inverse(&info, "measurement information Hᵀ R⁻¹ H")?;
        blocks_i.push(linalg::spd_inverse(&(p + info_inv), "P + (Hᵀ R⁻¹ H)⁻¹")?);
        blocks_ii.push(linalg::spd_inverse(&information_matrix(p, obs)?, "information matrix M̄")?);
    }
    let m = steady[0].nrows();
    let lambda_i = linalg::block_diag(&blocks_i);
    let lambda_ii = linalg::block_diag(&blocks_ii);
    let lap = linalg::kron(&crate::model::laplacian(graph), &Matrix::identity(m, m));
    let coupled = linalg::symmetrized(&lap * &lambda_ii * &lap);
    let (lambda_i_min, _) = linalg::sym_eigen_extremes(&lambda_i);
    let (_, coupled_max) = linalg::sym_eigen_extremes(&coupled);
    if !(coupled_max > 0.0) || !(lambda_i_min > 0.0) {
        return Err(Error::Singular("stability bound eigenvalues"));
    }
    let gamma_star = (lambda_i_min / coupled_max).sqrt() / sharing_probability.sqrt();
    Ok(StabilityProfile {
        lambda_i,
        lambda_ii,
        lambda_i_min,
        coupled_max,
        sharing_probability,
        gamma_star,
    })
}

/// Warns (and reports `false`) when `A` is numerically singular; the
/// stability argument behind the consensus gain uses `A⁻¹`.
pub fn check_transition_invertible(a: &Matrix) -> bool {
    let svd = a.clone().svd(false, false);
    let max = svd.singular_values.max();
    let min = svd.singular_values.min();
    let ok = max > 0.0 && min / max > 1e-12;
    if !ok {
        tracing::warn!(
            min_singular_value = min,
            "state transition matrix is singular; the consensus stability bound is only a heuristic"
        );
    }
    ok
}

/// Gain minimizing the trace of the exact local error covariance when the
/// cross covariances with the neighbors are available:
///
/// `K* = ((A − C Σⱼ Sⱼ) Pᵢ + C Σⱼ Sⱼ Pⱼᵢ) Hᵢᵀ (Rᵢ + Hᵢ Pᵢ Hᵢᵀ)⁻¹`.
///
/// `neighbors` holds `(S_j(k), P_ji(k))` for every `j ∈ N_i`.
pub fn optimal_gain_full(
    p_i: &Matrix,
    neighbors: &[(&SelectionSchedule, &Matrix)],
    c_i: &Matrix,
    a: &Matrix,
    obs: &ObservationModel,
) -> Result<Matrix> {
    let m = a.nrows();
    let mut coupled = a.clone();
    let mut cross = Matrix::zeros(m, m);
    for (s_j, p_ji) in neighbors {
        if p_ji.shape() != (m, m) || s_j.state_dim() != m {
            return Err(Error::Dimension("cross covariance or selection has wrong size".into()));
        }
        coupled -= s_j.mask_columns(c_i);
        cross += s_j.mask_rows(p_ji);
    }
    let h = obs.h();
    let g = coupled * p_i + c_i * cross;
    let innovation = linalg::symmetrized(obs.r() + h * p_i * h.transpose());
    let kt = linalg::spd_solve(&innovation, &(h * g.transpose()), "innovation covariance M")?;
    Ok(kt.transpose())
}
