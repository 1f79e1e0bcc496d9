use crate::error::{Error, Result};
use crate::linalg::{Matrix, Vector};
use crate::model::ObservationModel;
use crate::selection::SelectionSchedule;

use super::{
    consensus_gain_from_information, decoupled_transition, information_matrix, kalman_gain,
    riccati_step,
};

/// Local state of one filtering agent.
#[derive(Debug, Clone)]
pub struct AgentRuntime {
    pub estimate: Vector,
    /// Local covariance `P_i(k)` of the suboptimal recursion.
    pub covariance: Matrix,
    pub kalman_gain: Matrix,
    pub consensus_gain: Matrix,
    /// `F̂ = A − K H` for the current gain.
    pub f_hat: Matrix,
    /// `M̄ = P⁻¹ + Hᵀ R⁻¹ H` at the time the gains were computed.
    pub information: Matrix,
    frozen: bool,
}

impl AgentRuntime {
    pub fn new(estimate: Vector, covariance: Matrix, obs_dim: usize) -> Self {
        let m = estimate.len();
        Self {
            estimate,
            covariance,
            kalman_gain: Matrix::zeros(m, obs_dim),
            consensus_gain: Matrix::zeros(m, m),
            f_hat: Matrix::zeros(m, m),
            information: Matrix::zeros(m, m),
            frozen: false,
        }
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    /// Keeps the current gains for all later steps.
    pub fn freeze(&mut self) {
        self.frozen = true;
    }

    /// Recomputes `K`, `C`, `F̂` and `M̄` from the current covariance unless frozen.
    pub fn refresh_gains(&mut self, a: &Matrix, obs: &ObservationModel, gamma: f64) -> Result<()> {
        if self.frozen {
            return Ok(());
        }
        let k = kalman_gain(&self.covariance, obs, a)?;
        let m_bar = information_matrix(&self.covariance, obs)?;
        self.consensus_gain = consensus_gain_from_information(gamma, a, &m_bar)?;
        self.f_hat = decoupled_transition(a, &k, obs);
        self.kalman_gain = k;
        self.information = m_bar;
        Ok(())
    }

    pub fn set_gains(&mut self, kalman: Matrix, consensus: Matrix, a: &Matrix, obs: &ObservationModel) {
        self.f_hat = decoupled_transition(a, &kalman, obs);
        self.kalman_gain = kalman;
        self.consensus_gain = consensus;
    }

    /// `A x̂ + K (y − H x̂) + C Σⱼ (Sⱼ x̄ⱼ − Sⱼ x̂)` with the gains already in place.
    pub fn updated_estimate(
        &self,
        y: &Vector,
        received: &[Fragment<'_>],
        a: &Matrix,
        obs: &ObservationModel,
    ) -> Result<Vector> {
        let innovation = y - obs.h() * &self.estimate;
        let mut next = a * &self.estimate + &self.kalman_gain * innovation;
        if !received.is_empty() {
            next += &self.consensus_gain * consensus_innovation(&self.estimate, received)?;
        }
        Ok(next)
    }
}

/// The part of a neighbor's (possibly perturbed) estimate that it chose to share.
#[derive(Debug, Clone)]
pub struct Fragment<'a> {
    pub selection: &'a SelectionSchedule,
    /// `S_j x̄_j`; entries outside the selection are ignored.
    pub values: Vector,
}

/// `Σⱼ (Sⱼ x̄ⱼ − Sⱼ x̂ᵢ)`: missing entries are filled with the agent's own estimate.
pub fn consensus_innovation(estimate: &Vector, received: &[Fragment<'_>]) -> Result<Vector> {
    let m = estimate.len();
    let mut sum = Vector::zeros(m);
    for frag in received {
        if frag.values.len() != m || frag.selection.state_dim() != m {
            return Err(Error::Dimension(format!(
                "fragment of length {} (selection over {}) for a state of dimension {m}",
                frag.values.len(),
                frag.selection.state_dim()
            )));
        }
        for &idx in frag.selection.indices() {
            sum[idx] += frag.values[idx] - estimate[idx];
        }
    }
    Ok(sum)
}

/// One step of the partial-sharing consensus filter for a single agent:
/// gains from the current covariance, then the estimate update, then the
/// covariance update.
pub fn filter_step(
    agent: &AgentRuntime,
    y: &Vector,
    received: &[Fragment<'_>],
    a: &Matrix,
    q: &Matrix,
    obs: &ObservationModel,
    gamma: f64,
) -> Result<AgentRuntime> {
    if y.len() != obs.obs_dim() {
        return Err(Error::Dimension(format!(
            "observation of length {} for a sensor of dimension {}",
            y.len(),
            obs.obs_dim()
        )));
    }
    let mut next = agent.clone();
    next.refresh_gains(a, obs, gamma)?;
    next.estimate = next.updated_estimate(y, received, a, obs)?;
    next.covariance = riccati_step(&agent.covariance, a, q, obs, &next.kalman_gain);
    Ok(next)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::filter::kalman_gain;

    fn setup() -> (Matrix, Matrix, ObservationModel) {
        let a = Matrix::from_row_slice(2, 2, &[0.9, 0.1, 0.0, 0.8]);
        let q = Matrix::identity(2, 2) * 0.1;
        let obs = ObservationModel::new(Matrix::identity(2, 2), Matrix::identity(2, 2) * 0.5).unwrap();
        (a, q, obs)
    }

    #[test]
    fn isolated_agent_is_a_kalman_filter() {
        let (a, q, obs) = setup();
        let agent = AgentRuntime::new(Vector::from_column_slice(&[1.0, -1.0]), Matrix::identity(2, 2), 2);
        let y = Vector::from_column_slice(&[0.5, 0.2]);
        let next = filter_step(&agent, &y, &[], &a, &q, &obs, 0.4).unwrap();
        let k = kalman_gain(&agent.covariance, &obs, &a).unwrap();
        let expected = &a * &agent.estimate + &k * (&y - obs.h() * &agent.estimate);
        assert!((next.estimate - expected).norm() < 1e-14);
        assert!((next.kalman_gain - k).norm() < 1e-14);
    }

    #[test]
    fn consensual_neighbors_add_nothing() {
        let (a, q, obs) = setup();
        let agent = AgentRuntime::new(Vector::from_column_slice(&[0.3, 0.7]), Matrix::identity(2, 2), 2);
        let full = SelectionSchedule::full(2);
        let frag = Fragment {
            selection: &full,
            values: agent.estimate.clone(),
        };
        let y = Vector::from_column_slice(&[0.1, 0.4]);
        let with = filter_step(&agent, &y, &[frag.clone(), frag], &a, &q, &obs, 0.5).unwrap();
        let without = filter_step(&agent, &y, &[], &a, &q, &obs, 0.5).unwrap();
        assert!((with.estimate - without.estimate).norm() < 1e-15);
    }

    #[test]
    fn missing_entries_use_own_estimate() {
        let x = Vector::from_column_slice(&[1.0, 2.0, 3.0]);
        let s = SelectionSchedule::from_indices(3, vec![1], 1).unwrap();
        let frag = Fragment {
            selection: &s,
            values: Vector::from_column_slice(&[100.0, 5.0, 100.0]),
        };
        let innov = consensus_innovation(&x, &[frag]).unwrap();
        assert_eq!(innov, Vector::from_column_slice(&[0.0, 3.0, 0.0]));
    }

    #[test]
    fn fragment_dimension_mismatch() {
        let (a, q, obs) = setup();
        let agent = AgentRuntime::new(Vector::zeros(2), Matrix::identity(2, 2), 2);
        let s = SelectionSchedule::full(3);
        let frag = Fragment {
            selection: &s,
            values: Vector::zeros(3),
        };
        let err = filter_step(&agent, &Vector::zeros(2), &[frag], &a, &q, &obs, 0.1).unwrap_err();
        assert!(matches!(err, Error::Dimension(_)));
    }

    #[test]
    fn frozen_gains_persist() {
        let (a, q, obs) = setup();
        let mut agent = AgentRuntime::new(Vector::zeros(2), Matrix::identity(2, 2) * 3.0, 2);
        agent.refresh_gains(&a, &obs, 0.2).unwrap();
        agent.freeze();
        let k0 = agent.kalman_gain.clone();
        let mut cur = agent;
        for _ in 0..5 {
            cur = filter_step(&cur, &Vector::zeros(2), &[], &a, &q, &obs, 0.2).unwrap();
        }
        assert_eq!(cur.kalman_gain, k0);
        assert!(cur.is_frozen());
    }
}
