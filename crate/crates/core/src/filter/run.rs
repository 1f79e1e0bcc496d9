//! Network-level runs: gain trajectories, Monte-Carlo simulation and the
//! online per-agent loop.

use crate::analysis::{self, BlockTransition, CovarianceSeries};
use crate::attack::AttackPlan;
use crate::error::{Error, Result};
use crate::linalg::{self, Matrix, Vector};
use crate::model::{NetworkGraph, StateSpaceModel};
use crate::rng::{self, StreamTag};
use crate::selection::SelectionSchedule;

use super::agent::{AgentRuntime, Fragment};
use super::{consensus_gain, filter_step, kalman_gain, optimal_gain_full, riccati_step};

/// Which Kalman gain the agents run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum GainVariant {
    /// Local gain that ignores cross covariances.
    Suboptimal,
    /// Gain computed from the exact joint error covariance.
    Full,
}

impl GainVariant {
    pub fn name(self) -> &'static str {
        match self {
            GainVariant::Suboptimal => "suboptimal",
            GainVariant::Full => "full",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NoiseMode {
    Stochastic,
    /// No process, observation or attack noise; only the initial error.
    NoiseFree,
}

/// Truth at `k = 0` and the filters' prior.
///
/// Each agent starts from `x̂_i(0) = x(0) + spread · P0^{1/2} z_i` with
/// independent `z_i ~ N(0, I)`, and believes `P_i(0) = P0`.
#[derive(Debug, Clone)]
pub struct InitialConditions {
    pub state: Vector,
    pub covariance: Matrix,
    pub spread: f64,
}

impl InitialConditions {
    pub fn standard(m: usize) -> Self {
        Self {
            state: Vector::zeros(m),
            covariance: Matrix::identity(m, m),
            spread: 1.0,
        }
    }
}

/// Everything needed to run the network filter.
#[derive(Debug, Clone)]
pub struct Scenario {
    pub model: StateSpaceModel,
    pub graph: NetworkGraph,
    /// Selection schedules at `k = 0`.
    pub schedules: Vec<SelectionSchedule>,
    pub gamma: f64,
    pub variant: GainVariant,
    pub init: InitialConditions,
    /// Gains freeze once every local covariance moves less than this (Frobenius).
    pub freeze_tolerance: f64,
    /// Gains freeze no later than one step before this instant.
    pub attack_start: Option<usize>,
    pub attack: Option<AttackPlan>,
}

pub const DEFAULT_FREEZE_TOLERANCE: f64 = 1e-9;

impl Scenario {
    pub fn new(
        model: StateSpaceModel,
        graph: NetworkGraph,
        schedules: Vec<SelectionSchedule>,
        gamma: f64,
        variant: GainVariant,
    ) -> Result<Self> {
        let m = model.state_dim();
        let scenario = Self {
            init: InitialConditions::standard(m),
            model,
            graph,
            schedules,
            gamma,
            variant,
            freeze_tolerance: DEFAULT_FREEZE_TOLERANCE,
            attack_start: None,
            attack: None,
        };
        scenario.validate()?;
        Ok(scenario)
    }

    pub fn validate(&self) -> Result<()> {
        let m = self.model.state_dim();
        let agents = self.model.agent_count();
        if self.graph.agent_count() != agents {
            return Err(Error::Dimension(format!(
                "graph has {} agents, model has {agents}",
                self.graph.agent_count()
            )));
        }
        if self.schedules.len() != agents || self.schedules.iter().any(|s| s.state_dim() != m) {
            return Err(Error::Dimension("one selection schedule of dimension m per agent required".into()));
        }
        if !(self.gamma >= 0.0 && self.gamma.is_finite()) {
            return Err(Error::InvalidArgument(format!("consensus step {} must be finite and >= 0", self.gamma)));
        }
        if self.init.state.len() != m || self.init.covariance.shape() != (m, m) {
            return Err(Error::Dimension("initial state or covariance has wrong size".into()));
        }
        if let Some(k0) = self.attack_start {
            if k0 == 0 {
                return Err(Error::InvalidArgument("attack start must be >= 1".into()));
            }
        }
        if let Some(plan) = &self.attack {
            if Some(plan.start()) != self.attack_start {
                return Err(Error::InvalidArgument(
                    "attack plan start differs from the scenario's attack start".into(),
                ));
            }
            plan.check_dimensions(agents, m)?;
        }
        Ok(())
    }

    pub fn agent_count(&self) -> usize {
        self.model.agent_count()
    }

    pub fn state_dim(&self) -> usize {
        self.model.state_dim()
    }

    /// Mean of the agents' sharing probabilities `l/m`.
    pub fn sharing_probability(&self) -> f64 {
        self.schedules.iter().map(|s| s.sharing_probability()).sum::<f64>() / self.schedules.len() as f64
    }

    pub fn with_attack_start(mut self, k0: usize) -> Result<Self> {
        self.attack_start = Some(k0);
        self.validate()?;
        Ok(self)
    }

    pub fn with_attack(mut self, plan: AttackPlan) -> Result<Self> {
        self.attack_start = Some(plan.start());
        self.attack = Some(plan);
        self.validate()?;
        Ok(self)
    }

    pub(crate) fn cursor(&self) -> ScheduleCursor<'_> {
        ScheduleCursor {
            current: self.schedules.clone(),
            k: 0,
            plan: self.attack.as_ref(),
        }
    }

    /// `true` if perturbations are injected at step `k`.
    pub(crate) fn attacked_at(&self, k: usize) -> bool {
        matches!(&self.attack, Some(plan) if k >= plan.start())
    }
}

/// Realized `S_i(k)` sequence, including designed Byzantine patterns from `k₀` on.
pub(crate) struct ScheduleCursor<'a> {
    current: Vec<SelectionSchedule>,
    k: usize,
    plan: Option<&'a AttackPlan>,
}

impl ScheduleCursor<'_> {
    pub fn current(&mut self) -> &[SelectionSchedule] {
        if let Some(plan) = self.plan {
            if self.k == plan.start() {
                for (agent, pattern) in plan.designed_patterns() {
                    self.current[*agent] = pattern.clone();
                }
            }
        }
        &self.current
    }

    pub fn advance(&mut self) {
        // apply a pending override before shifting
        self.current();
        for s in &mut self.current {
            *s = s.advance();
        }
        self.k += 1;
    }
}

/// Gains of one agent at one step.
#[derive(Debug, Clone, PartialEq)]
pub struct AgentGains {
    pub kalman: Matrix,
    pub consensus: Matrix,
}

/// Per-step gains for the whole network, constant after the freeze step.
#[derive(Debug, Clone)]
pub struct GainTrajectory {
    steps: Vec<Vec<AgentGains>>,
    pub freeze_step: Option<usize>,
    /// Local covariances the last gains were computed from.
    pub local_covariances: Vec<Matrix>,
}

impl GainTrajectory {
    pub fn at(&self, k: usize) -> &[AgentGains] {
        let idx = k.min(self.steps.len() - 1);
        &self.steps[idx]
    }

    /// Gains in force after the freeze, or the last computed ones.
    pub fn last(&self) -> &[AgentGains] {
        self.steps.last().expect("gain trajectory is never empty")
    }

    pub fn computed_steps(&self) -> usize {
        self.steps.len()
    }
}

fn freeze_now(k: usize, deadline: Option<usize>, delta: Option<f64>, tol: f64) -> bool {
    deadline == Some(k) || matches!(delta, Some(d) if d < tol)
}

fn max_block_delta(prev: &[Matrix], next: &[Matrix]) -> f64 {
    prev.iter()
        .zip(next)
        .map(|(a, b)| (a - b).norm())
        .fold(0.0, f64::max)
}

/// Computes the gains the agents use at every step up to `horizon − 1`.
///
/// Gains never depend on the attack: they freeze at the latest one step
/// before the attack starts.
pub fn compute_gains(scenario: &Scenario, horizon: usize) -> Result<GainTrajectory> {
    scenario.validate()?;
    if horizon == 0 {
        return Err(Error::InvalidArgument("horizon must be >= 1".into()));
    }
    match scenario.variant {
        GainVariant::Suboptimal => suboptimal_gains(scenario, horizon),
        GainVariant::Full => full_gains(scenario, horizon),
    }
}

fn suboptimal_gains(scenario: &Scenario, horizon: usize) -> Result<GainTrajectory> {
    let model = &scenario.model;
    let deadline = scenario.attack_start.map(|k0| k0 - 1);
    let mut local = vec![scenario.init.covariance.clone(); model.agent_count()];
    let mut prev: Option<Vec<Matrix>> = None;
    let mut steps = Vec::new();
    for k in 0..horizon {
        let delta = prev.as_ref().map(|p| max_block_delta(p, &local));
        let mut gains = Vec::with_capacity(local.len());
        for (p, obs) in local.iter().zip(model.agents()) {
            gains.push(AgentGains {
                kalman: kalman_gain(p, obs, model.a())?,
                consensus: consensus_gain(scenario.gamma, model.a(), p, obs)?,
            });
        }
        if freeze_now(k, deadline, delta, scenario.freeze_tolerance) {
            steps.push(gains);
            tracing::debug!(step = k, "gains frozen");
            return Ok(GainTrajectory {
                steps,
                freeze_step: Some(k),
                local_covariances: local,
            });
        }
        let next: Vec<Matrix> = local
            .iter()
            .zip(model.agents())
            .zip(&gains)
            .map(|((p, obs), g)| riccati_step(p, model.a(), model.q(), obs, &g.kalman))
            .collect();
        steps.push(gains);
        prev = Some(std::mem::replace(&mut local, next));
    }
    Ok(GainTrajectory {
        steps,
        freeze_step: None,
        local_covariances: local,
    })
}

fn full_gains(scenario: &Scenario, horizon: usize) -> Result<GainTrajectory> {
    let model = &scenario.model;
    let graph = &scenario.graph;
    let m = model.state_dim();
    let agents = model.agent_count();
    let deadline = scenario.attack_start.map(|k0| k0 - 1);
    // the agents' nominal prior: independent errors with covariance P0
    let mut joint = linalg::block_diag(&vec![scenario.init.covariance.clone(); agents]);
    let mut cursor = scenario.cursor();
    let mut prev: Option<Vec<Matrix>> = None;
    let mut steps = Vec::new();
    for k in 0..horizon {
        let local: Vec<Matrix> = (0..agents).map(|i| linalg::block(&joint, i, i, m)).collect();
        let delta = prev.as_ref().map(|p| max_block_delta(p, &local));
        let schedules = cursor.current().to_vec();
        let mut gains = Vec::with_capacity(agents);
        for i in 0..agents {
            let obs = model.agent(i);
            let c = consensus_gain(scenario.gamma, model.a(), &local[i], obs)?;
            let cross: Vec<Matrix> = graph.neighbors(i).iter().map(|&j| linalg::block(&joint, j, i, m)).collect();
            let pairs: Vec<(&SelectionSchedule, &Matrix)> = graph
                .neighbors(i)
                .iter()
                .zip(&cross)
                .map(|(&j, p_ji)| (&schedules[j], p_ji))
                .collect();
            let kalman = optimal_gain_full(&local[i], &pairs, &c, model.a(), obs)?;
            gains.push(AgentGains { kalman, consensus: c });
        }
        if freeze_now(k, deadline, delta, scenario.freeze_tolerance) {
            steps.push(gains);
            return Ok(GainTrajectory {
                steps,
                freeze_step: Some(k),
                local_covariances: local,
            });
        }
        let transition = BlockTransition::coupled(model, &gains, graph, &schedules);
        let mut next = transition.congruence(&joint);
        analysis::add_process_terms(&mut next, model, &gains);
        joint = next;
        steps.push(gains);
        prev = Some(local);
        cursor.advance();
    }
    let local = (0..agents).map(|i| linalg::block(&joint, i, i, m)).collect();
    Ok(GainTrajectory {
        steps,
        freeze_step: None,
        local_covariances: local,
    })
}

/// Per-step error statistics of one run, `k = 0..=horizon`.
#[derive(Debug, Clone, PartialEq)]
pub struct RunTrace {
    /// `(1/L) Σᵢ ‖x̂ᵢ(k) − x(k)‖²`
    pub mse: Vec<f64>,
    /// `maxᵢ ‖x̂ᵢ(k) − x(k)‖`
    pub max_error: Vec<f64>,
    pub freeze_step: Option<usize>,
}

struct RunNoise {
    mode: NoiseMode,
    process: rng::SimRng,
    observation: rng::SimRng,
    perturbation: rng::SimRng,
}

impl RunNoise {
    fn new(seed: u64, run: u64, mode: NoiseMode) -> Self {
        Self {
            mode,
            process: rng::stream(seed, Some(run), StreamTag::ProcessNoise),
            observation: rng::stream(seed, Some(run), StreamTag::ObservationNoise),
            perturbation: rng::stream(seed, Some(run), StreamTag::Perturbation),
        }
    }

    fn observe(&mut self, scenario: &Scenario, x: &Vector) -> Vec<Vector> {
        scenario
            .model
            .agents()
            .iter()
            .map(|obs| match self.mode {
                NoiseMode::Stochastic => crate::model::observe(obs, x, &mut self.observation),
                NoiseMode::NoiseFree => obs.h() * x,
            })
            .collect()
    }

    fn perturbation(&mut self, scenario: &Scenario, k: usize) -> Option<Vector> {
        if self.mode == NoiseMode::NoiseFree || !scenario.attacked_at(k) {
            return None;
        }
        scenario.attack.as_ref().map(|plan| plan.draw_perturbation(&mut self.perturbation))
    }

    fn process(&mut self, scenario: &Scenario) -> Option<Vector> {
        match self.mode {
            NoiseMode::Stochastic => Some(scenario.model.process_noise(&mut self.process)),
            NoiseMode::NoiseFree => None,
        }
    }
}

fn initial_estimates(scenario: &Scenario, seed: u64, run: u64) -> Vec<Vector> {
    let (factor, _) = linalg::psd_factor(&scenario.init.covariance);
    let mut r = rng::stream(seed, Some(run), StreamTag::InitialEstimate);
    (0..scenario.agent_count())
        .map(|_| &scenario.init.state + rng::gaussian_with_factor(&mut r, &factor) * scenario.init.spread)
        .collect()
}

fn record(trace: &mut RunTrace, estimates: &[Vector], x: &Vector) {
    let mut sum = 0.0;
    let mut max = 0.0f64;
    for est in estimates {
        let e2 = (est - x).norm_squared();
        sum += e2;
        max = max.max(e2.sqrt());
    }
    trace.mse.push(sum / estimates.len() as f64);
    trace.max_error.push(max);
}

fn shared_values(schedules: &[SelectionSchedule], estimates: &[Vector], delta: Option<&Vector>) -> Vec<Vector> {
    let m = estimates.first().map_or(0, |e| e.len());
    estimates
        .iter()
        .enumerate()
        .map(|(j, est)| {
            let mut v = est.clone();
            if let Some(d) = delta {
                v += d.rows(j * m, m);
            }
            schedules[j].mask(&v)
        })
        .collect()
}

/// One Monte-Carlo run with precomputed gains.
pub fn simulate_run(
    scenario: &Scenario,
    gains: &GainTrajectory,
    horizon: usize,
    seed: u64,
    run: u64,
    noise: NoiseMode,
) -> Result<RunTrace> {
    let model = &scenario.model;
    let graph = &scenario.graph;
    let mut noise_src = RunNoise::new(seed, run, noise);
    let mut x = scenario.init.state.clone();
    let mut estimates = initial_estimates(scenario, seed, run);
    let mut cursor = scenario.cursor();
    let mut trace = RunTrace {
        mse: Vec::with_capacity(horizon + 1),
        max_error: Vec::with_capacity(horizon + 1),
        freeze_step: gains.freeze_step,
    };
    for k in 0..horizon {
        record(&mut trace, &estimates, &x);
        let schedules = cursor.current();
        let delta = noise_src.perturbation(scenario, k);
        let ys = noise_src.observe(scenario, &x);
        let shared = shared_values(schedules, &estimates, delta.as_ref());
        let step_gains = gains.at(k);
        let mut next = Vec::with_capacity(estimates.len());
        for (i, est) in estimates.iter().enumerate() {
            let obs = model.agent(i);
            let g = &step_gains[i];
            let mut innov = Vector::zeros(est.len());
            for &j in graph.neighbors(i) {
                for &idx in schedules[j].indices() {
                    innov[idx] += shared[j][idx] - est[idx];
                }
            }
            let xi = model.a() * est + &g.kalman * (&ys[i] - obs.h() * est) + &g.consensus * innov;
            next.push(xi);
        }
        estimates = next;
        x = model.a() * &x;
        if let Some(w) = noise_src.process(scenario) {
            x += w;
        }
        cursor.advance();
    }
    record(&mut trace, &estimates, &x);
    Ok(trace)
}

/// Runs the suboptimal filter agent by agent through [`filter_step`],
/// computing and freezing gains online.
pub fn run_online(scenario: &Scenario, horizon: usize, seed: u64, run: u64, noise: NoiseMode) -> Result<RunTrace> {
    scenario.validate()?;
    if scenario.variant != GainVariant::Suboptimal {
        return Err(Error::InvalidArgument(
            "the online loop runs the suboptimal gain only".into(),
        ));
    }
    let model = &scenario.model;
    let graph = &scenario.graph;
    let deadline = scenario.attack_start.map(|k0| k0 - 1);
    let mut noise_src = RunNoise::new(seed, run, noise);
    let mut x = scenario.init.state.clone();
    let mut agents: Vec<AgentRuntime> = initial_estimates(scenario, seed, run)
        .into_iter()
        .zip(model.agents())
        .map(|(est, obs)| AgentRuntime::new(est, scenario.init.covariance.clone(), obs.obs_dim()))
        .collect();
    let mut prev_cov: Option<Vec<Matrix>> = None;
    let mut freeze_step = None;
    let mut cursor = scenario.cursor();
    let mut trace = RunTrace {
        mse: Vec::with_capacity(horizon + 1),
        max_error: Vec::with_capacity(horizon + 1),
        freeze_step: None,
    };
    for k in 0..horizon {
        let estimates: Vec<Vector> = agents.iter().map(|a| a.estimate.clone()).collect();
        record(&mut trace, &estimates, &x);
        if freeze_step.is_none() {
            let cov: Vec<Matrix> = agents.iter().map(|a| a.covariance.clone()).collect();
            let delta = prev_cov.as_ref().map(|p| max_block_delta(p, &cov));
            if freeze_now(k, deadline, delta, scenario.freeze_tolerance) {
                for (agent, obs) in agents.iter_mut().zip(model.agents()) {
                    agent.refresh_gains(model.a(), obs, scenario.gamma)?;
                    agent.freeze();
                }
                freeze_step = Some(k);
            }
            prev_cov = Some(cov);
        }
        let schedules = cursor.current();
        let delta = noise_src.perturbation(scenario, k);
        let ys = noise_src.observe(scenario, &x);
        let shared = shared_values(schedules, &estimates, delta.as_ref());
        let mut next = Vec::with_capacity(agents.len());
        for (i, agent) in agents.iter().enumerate() {
            let received: Vec<Fragment<'_>> = graph
                .neighbors(i)
                .iter()
                .map(|&j| Fragment {
                    selection: &schedules[j],
                    values: shared[j].clone(),
                })
                .collect();
            next.push(filter_step(
                agent,
                &ys[i],
                &received,
                model.a(),
                model.q(),
                model.agent(i),
                scenario.gamma,
            )?);
        }
        agents = next;
        x = model.a() * &x;
        if let Some(w) = noise_src.process(scenario) {
            x += w;
        }
        cursor.advance();
    }
    let estimates: Vec<Vector> = agents.iter().map(|a| a.estimate.clone()).collect();
    record(&mut trace, &estimates, &x);
    trace.freeze_step = freeze_step;
    Ok(trace)
}

/// A run of the network together with its exact covariance propagation.
#[derive(Debug, Clone)]
pub struct NetworkRun {
    pub gains: GainTrajectory,
    pub covariance: CovarianceSeries,
    pub trace: RunTrace,
}

/// Runs the filter with the gain computed from the exact joint covariance.
pub fn full_filter_run(scenario: &Scenario, horizon: usize, seed: u64) -> Result<NetworkRun> {
    let mut scenario = scenario.clone();
    scenario.variant = GainVariant::Full;
    let gains = compute_gains(&scenario, horizon)?;
    let covariance = analysis::realized_covariance(&scenario, &gains, horizon)?;
    let trace = simulate_run(&scenario, &gains, horizon, seed, 0, NoiseMode::Stochastic)?;
    Ok(NetworkRun {
        gains,
        covariance,
        trace,
    })
}
