//! Network-wide error covariance propagation, steady states under attack,
//! and the MSE metrics.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::filter::{AgentGains, GainTrajectory, NoiseMode, RunTrace, Scenario};
use crate::linalg::{self, Matrix};
use crate::model::{NetworkGraph, ObservationModel, StateSpaceModel};
use crate::selection::SelectionSchedule;

/// `(1/L) Σᵢ tr(Pᵢ)`.
pub fn mse_from_blocks(blocks: &[Matrix]) -> f64 {
    blocks.iter().map(linalg::trace).sum::<f64>() / blocks.len() as f64
}

/// `(1/L) Σᵢ tr(Pᵢᵢ)` of a joint covariance with `m × m` blocks.
pub fn mse_from_joint(p: &Matrix, m: usize) -> f64 {
    let agents = p.nrows() / m;
    linalg::trace(p) / agents as f64
}

/// Network-wide trace of a (steady) joint covariance.
pub fn nmse(p: &Matrix) -> f64 {
    linalg::trace(p)
}

/// `F_i = A − K_i H_i − C_i Σ_{j∈N_i} S_j`.
pub fn coupled_transitions(
    model: &StateSpaceModel,
    gains: &[AgentGains],
    graph: &NetworkGraph,
    schedules: &[SelectionSchedule],
) -> Vec<Matrix> {
    (0..model.agent_count())
        .map(|i| {
            let mut f = model.a() - &gains[i].kalman * model.agent(i).h();
            for &j in graph.neighbors(i) {
                f -= schedules[j].mask_columns(&gains[i].consensus);
            }
            f
        })
        .collect()
}

/// `F̂_i = A − K_i H_i`.
pub fn decoupled_transitions(model: &StateSpaceModel, gains: &[AgentGains]) -> Vec<Matrix> {
    gains
        .iter()
        .zip(model.agents())
        .map(|(g, obs)| model.a() - &g.kalman * obs.h())
        .collect()
}

/// `Ã = diag(Fᵢ) + C (E ⊗ I) S`, assembled densely.
pub fn assemble_atilde(
    diag: &[Matrix],
    consensus: &[Matrix],
    graph: &NetworkGraph,
    schedules: &[SelectionSchedule],
) -> Matrix {
    let m = diag[0].nrows();
    let mut out = linalg::block_diag(diag);
    for i in 0..diag.len() {
        for &j in graph.neighbors(i) {
            linalg::set_block(&mut out, i, j, &schedules[j].mask_columns(&consensus[i]));
        }
    }
    debug_assert_eq!(out.nrows(), diag.len() * m);
    out
}

/// `Q̃ = blockdiag(Kᵢ Rᵢ Kᵢᵀ) + 1 1ᵀ ⊗ Q`.
pub fn assemble_qtilde(model: &StateSpaceModel, gains: &[AgentGains]) -> Matrix {
    let m = model.state_dim();
    let n = model.agent_count() * m;
    let mut out = Matrix::zeros(n, n);
    add_process_terms(&mut out, model, gains);
    out
}

pub(crate) fn add_process_terms(p: &mut Matrix, model: &StateSpaceModel, gains: &[AgentGains]) {
    let m = model.state_dim();
    let agents = model.agent_count();
    for i in 0..agents {
        for j in 0..agents {
            let mut view = p.view_mut((i * m, j * m), (m, m));
            view += model.q();
        }
        let k = &gains[i].kalman;
        let krk = k * model.agent(i).r() * k.transpose();
        let mut view = p.view_mut((i * m, i * m), (m, m));
        view += krk;
    }
}

/// `Γ = C (E ⊗ I) S (diag(z) ⊗ I)`; `byzantine = None` keeps all columns.
pub fn assemble_injection(
    consensus: &[Matrix],
    graph: &NetworkGraph,
    schedules: &[SelectionSchedule],
    byzantine: Option<&[usize]>,
) -> Matrix {
    let agents = consensus.len();
    let m = consensus[0].nrows();
    let mut out = Matrix::zeros(agents * m, agents * m);
    for i in 0..agents {
        for &j in graph.neighbors(i) {
            if byzantine.is_none_or(|b| b.contains(&j)) {
                linalg::set_block(&mut out, i, j, &schedules[j].mask_columns(&consensus[i]));
            }
        }
    }
    out
}

/// Columns of `Γ` belonging to the Byzantine agents, in the order of `byzantine`.
pub(crate) fn injection_columns(
    consensus: &[Matrix],
    graph: &NetworkGraph,
    schedules: &[SelectionSchedule],
    byzantine: &[usize],
) -> Matrix {
    let agents = consensus.len();
    let m = consensus[0].nrows();
    let mut out = Matrix::zeros(agents * m, byzantine.len() * m);
    for (col, &b) in byzantine.iter().enumerate() {
        for &i in graph.neighbors(b) {
            out.view_mut((i * m, col * m), (m, m))
                .copy_from(&schedules[b].mask_columns(&consensus[i]));
        }
    }
    out
}

/// Block-sparse `Ã`: one diagonal block per agent plus `Cᵢ Sⱼ` for every edge.
#[derive(Debug, Clone)]
pub struct BlockTransition {
    m: usize,
    diag: Vec<Matrix>,
    off: Vec<Vec<(usize, Matrix)>>,
}

impl BlockTransition {
    pub fn new(
        diag: Vec<Matrix>,
        consensus: &[Matrix],
        graph: &NetworkGraph,
        schedules: &[SelectionSchedule],
    ) -> Self {
        let m = diag[0].nrows();
        let off = (0..diag.len())
            .map(|i| {
                graph
                    .neighbors(i)
                    .iter()
                    .map(|&j| (j, schedules[j].mask_columns(&consensus[i])))
                    .collect()
            })
            .collect();
        Self { m, diag, off }
    }

    /// True error dynamics with `Fᵢ = A − KᵢHᵢ − Cᵢ Σⱼ Sⱼ`.
    pub fn coupled(
        model: &StateSpaceModel,
        gains: &[AgentGains],
        graph: &NetworkGraph,
        schedules: &[SelectionSchedule],
    ) -> Self {
        let consensus: Vec<Matrix> = gains.iter().map(|g| g.consensus.clone()).collect();
        Self::new(coupled_transitions(model, gains, graph, schedules), &consensus, graph, schedules)
    }

    /// `Ã P`.
    pub fn left_multiply(&self, p: &Matrix) -> Matrix {
        let m = self.m;
        let mut out = Matrix::zeros(p.nrows(), p.ncols());
        for (i, f) in self.diag.iter().enumerate() {
            let mut rows = out.rows_mut(i * m, m);
            rows.gemm(1.0, f, &p.rows(i * m, m), 0.0);
            for (j, cs) in &self.off[i] {
                rows.gemm(1.0, cs, &p.rows(j * m, m), 1.0);
            }
        }
        out
    }

    /// `Ã P Ãᵀ` for symmetric `P`, symmetrized.
    pub fn congruence(&self, p: &Matrix) -> Matrix {
        let half = self.left_multiply(p);
        linalg::symmetrized(self.left_multiply(&half.transpose()))
    }

    pub fn to_dense(&self) -> Matrix {
        let n = self.diag.len() * self.m;
        let mut out = Matrix::zeros(n, n);
        for (i, f) in self.diag.iter().enumerate() {
            linalg::set_block(&mut out, i, i, f);
            for (j, cs) in &self.off[i] {
                linalg::set_block(&mut out, i, *j, cs);
            }
        }
        out
    }
}

/// Joint error covariance with its one-step inputs.
#[derive(Debug, Clone)]
pub struct NetworkErrorState {
    pub covariance: Matrix,
    pub atilde: Matrix,
    pub qtilde: Matrix,
    pub injection: Matrix,
}

/// `P⁺ = Ã P Ãᵀ + Q̃ + Γ Σ Γᵀ`, dense and symmetrized.
pub fn network_error_step(state: &NetworkErrorState, sigma: &Matrix) -> Result<Matrix> {
    let n = state.covariance.nrows();
    for (name, mat) in [
        ("Ã", &state.atilde),
        ("Q̃", &state.qtilde),
        ("Γ", &state.injection),
        ("Σ", sigma),
    ] {
        if mat.shape() != (n, n) {
            return Err(Error::Dimension(format!("{name} is {:?}, expected {n}×{n}", mat.shape())));
        }
    }
    let next = &state.atilde * &state.covariance * state.atilde.transpose()
        + &state.qtilde
        + &state.injection * sigma * state.injection.transpose();
    Ok(linalg::symmetrized(next))
}

/// Output of the deterministic covariance pass, `k = 0..=horizon`.
#[derive(Debug, Clone)]
pub struct CovarianceSeries {
    /// Realized joint recursion with the realized `S(k)`.
    pub mse_prime: Vec<f64>,
    /// Local recursion with the expected, `p_e`-scaled attack term.
    pub mse_analytic: Vec<f64>,
    pub final_joint: Matrix,
    pub final_local: Vec<Matrix>,
}

/// `Σ_{s,p∈N_i} Σ_sp` for every agent.
pub fn neighborhood_attack_blocks(sigma: &Matrix, graph: &NetworkGraph, m: usize) -> Vec<Matrix> {
    (0..graph.agent_count())
        .map(|i| {
            let mut acc = Matrix::zeros(m, m);
            for &s in graph.neighbors(i) {
                for &p in graph.neighbors(i) {
                    acc += sigma.view((s * m, p * m), (m, m));
                }
            }
            acc
        })
        .collect()
}

/// Runs the joint recursion and the expected local recursion for a scenario
/// with the given gains.
pub fn realized_covariance(scenario: &Scenario, gains: &GainTrajectory, horizon: usize) -> Result<CovarianceSeries> {
    let model = &scenario.model;
    let graph = &scenario.graph;
    let m = model.state_dim();
    let agents = model.agent_count();
    let p_e = scenario.sharing_probability();
    let spread2 = scenario.init.spread * scenario.init.spread;
    let mut joint = linalg::block_diag(&vec![&scenario.init.covariance * spread2; agents]);
    let mut local = vec![scenario.init.covariance.clone(); agents];
    let attack_blocks = scenario
        .attack
        .as_ref()
        .map(|plan| neighborhood_attack_blocks(plan.sigma(), graph, m));
    let mut mse_prime = Vec::with_capacity(horizon + 1);
    let mut mse_analytic = Vec::with_capacity(horizon + 1);
    let mut cursor = scenario.cursor();
    for k in 0..horizon {
        mse_prime.push(mse_from_joint(&joint, m));
        mse_analytic.push(mse_from_blocks(&local));
        let schedules = cursor.current();
        let g = gains.at(k);
        let transition = BlockTransition::coupled(model, g, graph, schedules);
        let mut next = transition.congruence(&joint);
        add_process_terms(&mut next, model, g);
        let attacked = scenario.attacked_at(k);
        if attacked {
            let plan = scenario.attack.as_ref().expect("attacked implies a plan");
            let consensus: Vec<Matrix> = g.iter().map(|a| a.consensus.clone()).collect();
            let cols = injection_columns(&consensus, graph, schedules, plan.byzantine());
            let t = cols * plan.byzantine_factor();
            next += &t * t.transpose();
            linalg::symmetrize(&mut next);
        }
        joint = next;
        for i in 0..agents {
            let obs = model.agent(i);
            let f = model.a() - &g[i].kalman * obs.h();
            let mut p = &f * &local[i] * f.transpose() + &g[i].kalman * obs.r() * g[i].kalman.transpose() + model.q();
            if attacked {
                let blocks = attack_blocks.as_ref().expect("attack blocks present");
                p += (&g[i].consensus * &blocks[i] * g[i].consensus.transpose()) * p_e;
            }
            local[i] = linalg::symmetrized(p);
        }
        cursor.advance();
    }
    mse_prime.push(mse_from_joint(&joint, m));
    mse_analytic.push(mse_from_blocks(&local));
    Ok(CovarianceSeries {
        mse_prime,
        mse_analytic,
        final_joint: joint,
        final_local: local,
    })
}

/// Solves `X = F X Fᵀ + W` by squaring (Smith's doubling iteration).
pub fn discrete_lyapunov(f: &Matrix, w: &Matrix) -> Result<Matrix> {
    let rho = linalg::spectral_radius(f);
    if !(rho < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "Lyapunov recursion needs a stable transition, spectral radius is {rho}"
        )));
    }
    let mut x = w.clone();
    let mut a = f.clone();
    let mut last_delta = f64::INFINITY;
    for _ in 0..64 {
        let term = &a * &x * a.transpose();
        last_delta = term.norm();
        x += term;
        if last_delta <= 1e-16 * x.norm() {
            return Ok(linalg::symmetrized(x));
        }
        a = &a * &a;
    }
    Err(Error::NoConvergence {
        what: "discrete Lyapunov equation",
        iterations: 64,
        last_delta,
    })
}

/// Steady local covariances under attack with frozen gains:
///
/// `Pᵢ = F̂ᵢ Pᵢ F̂ᵢᵀ + Kᵢ Rᵢ Kᵢᵀ + Q + p_e Cᵢ (Σ_{s,p∈Nᵢ} Σ_sp) Cᵢᵀ`.
pub fn steady_state_attacked(
    model: &StateSpaceModel,
    gains: &[AgentGains],
    graph: &NetworkGraph,
    sigma: &Matrix,
    sharing_probability: f64,
) -> Result<Vec<Matrix>> {
    let m = model.state_dim();
    let n = model.agent_count() * m;
    if sigma.shape() != (n, n) {
        return Err(Error::Dimension(format!("Σ must be {n}×{n}")));
    }
    let blocks = neighborhood_attack_blocks(sigma, graph, m);
    gains
        .iter()
        .zip(model.agents())
        .zip(&blocks)
        .map(|((g, obs), block)| {
            let f = model.a() - &g.kalman * obs.h();
            let w = &g.kalman * obs.r() * g.kalman.transpose()
                + model.q()
                + (&g.consensus * block * g.consensus.transpose()) * sharing_probability;
            discrete_lyapunov(&f, &linalg::symmetrized(w))
        })
        .collect()
}

/// Contribution of the attack alone to the steady local covariances.
pub fn steady_attack_contribution(
    model: &StateSpaceModel,
    gains: &[AgentGains],
    graph: &NetworkGraph,
    sigma: &Matrix,
    sharing_probability: f64,
) -> Result<Vec<Matrix>> {
    let m = model.state_dim();
    let blocks = neighborhood_attack_blocks(sigma, graph, m);
    gains
        .iter()
        .zip(model.agents())
        .zip(&blocks)
        .map(|((g, obs), block)| {
            let f = model.a() - &g.kalman * obs.h();
            let w = (&g.consensus * block * g.consensus.transpose()) * sharing_probability;
            discrete_lyapunov(&f, &linalg::symmetrized(w))
        })
        .collect()
}

/// Averages the squared errors of `runs` Monte-Carlo runs; runs execute in
/// parallel and are merged in run order.
pub fn empirical_mse(
    scenario: &Scenario,
    gains: &GainTrajectory,
    horizon: usize,
    runs: usize,
    seed: u64,
    noise: NoiseMode,
) -> Result<Vec<f64>> {
    if runs == 0 {
        return Err(Error::InvalidArgument("at least one run required".into()));
    }
    let traces: Vec<RunTrace> = (0..runs as u64)
        .into_par_iter()
        .map(|run| crate::filter::simulate_run(scenario, gains, horizon, seed, run, noise))
        .collect::<Result<_>>()?;
    let mut sum = vec![0.0; horizon + 1];
    for t in &traces {
        for (acc, v) in sum.iter_mut().zip(&t.mse) {
            *acc += v;
        }
    }
    Ok(sum.into_iter().map(|v| v / runs as f64).collect())
}

/// Mean of `series[start..end]`.
pub fn window_mean(series: &[f64], start: usize, end: usize) -> f64 {
    let end = end.min(series.len());
    let start = start.min(end);
    if start == end {
        return f64::NAN;
    }
    series[start..end].iter().sum::<f64>() / (end - start) as f64
}

/// Gains of every agent computed from their steady-state covariances.
pub fn steady_gains(model: &StateSpaceModel, steady: &[Matrix], gamma: f64) -> Result<Vec<AgentGains>> {
    steady
        .iter()
        .zip(model.agents())
        .map(|(p, obs): (&Matrix, &ObservationModel)| {
            Ok(AgentGains {
                kalman: crate::filter::kalman_gain(p, obs, model.a())?,
                consensus: crate::filter::consensus_gain(gamma, model.a(), p, obs)?,
            })
        })
        .collect()
}
