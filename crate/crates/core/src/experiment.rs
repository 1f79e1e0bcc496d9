//! Experiment configuration, named presets, orchestration and export.
//!
//! Configuration files are flat `key = value` lines; `#` starts a comment
//! and list values are comma separated:
//!
//! ```text
//! seed = 7
//! selection.l = 2, 4, 6, 8
//! attack.enabled = true
//! attack.sigma = random, optimal
//! ```

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::analysis::{self, window_mean};
use crate::attack::{self, AttackObjectiveContext, AttackPlan};
use crate::error::{Error, Result};
use crate::filter::{self, GainVariant, NoiseMode, Scenario};
use crate::linalg::{self, Matrix};
use crate::model::{self, NetworkGraph, BENCHMARK_STATE_DIM};
use crate::rng::{self, StreamTag};
use crate::selection::{self, SelectionSchedule};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum SigmaMode {
    None,
    Random,
    Optimal,
}

impl SigmaMode {
    pub fn name(self) -> &'static str {
        match self {
            SigmaMode::None => "none",
            SigmaMode::Random => "random",
            SigmaMode::Optimal => "optimal",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum SelectMode {
    Schedule,
    Bcd,
}

impl SelectMode {
    pub fn name(self) -> &'static str {
        match self {
            SelectMode::Schedule => "schedule",
            SelectMode::Bcd => "bcd",
        }
    }
}

/// What the consensus step size is scaled against.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GammaReference {
    /// `γ = multiplier · γ*(p_e = 1)`, the same gain for every `l`.
    FullSharing,
    /// `γ = multiplier · γ*(l/m)`.
    PerL,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepKind {
    None,
    /// Number of Byzantine agents.
    Byzantine,
    /// Attack budget per agent, `tr(Σ)/L`.
    Trace,
}

impl SweepKind {
    pub fn name(self) -> &'static str {
        match self {
            SweepKind::None => "none",
            SweepKind::Byzantine => "byzantine",
            SweepKind::Trace => "trace",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttackConfig {
    pub enabled: bool,
    pub byzantine: usize,
    pub k0: usize,
    pub eta: f64,
    pub sigma: Vec<SigmaMode>,
    pub select: Vec<SelectMode>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub agents: usize,
    pub edge_prob: f64,
    pub l_values: Vec<usize>,
    pub tau: usize,
    /// Initial pattern shared by every agent; random per agent when absent.
    pub pattern: Option<Vec<bool>>,
    pub gamma_multiplier: f64,
    pub gamma_reference: GammaReference,
    pub variants: Vec<GainVariant>,
    pub horizon: usize,
    pub runs: usize,
    pub noise: NoiseMode,
    pub init_spread: f64,
    /// First step of the window steady values are averaged over.
    pub steady_from: Option<usize>,
    pub attack: AttackConfig,
    pub bcd_iterations: usize,
    pub output_dir: Option<PathBuf>,
    pub sweep: SweepKind,
    pub sweep_values: Vec<f64>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            agents: model::BENCHMARK_AGENTS,
            edge_prob: model::BENCHMARK_EDGE_PROB,
            l_values: vec![2, 4, 6, 8],
            tau: 1,
            pattern: None,
            gamma_multiplier: 0.9,
            gamma_reference: GammaReference::FullSharing,
            variants: vec![GainVariant::Suboptimal],
            horizon: 150,
            runs: 100,
            noise: NoiseMode::Stochastic,
            init_spread: 1.0,
            steady_from: None,
            attack: AttackConfig {
                enabled: false,
                byzantine: 5,
                k0: 30,
                eta: model::BENCHMARK_AGENTS as f64,
                sigma: vec![SigmaMode::Random],
                select: vec![SelectMode::Schedule],
            },
            bcd_iterations: 10,
            output_dir: None,
            sweep: SweepKind::None,
            sweep_values: Vec::new(),
        }
    }
}

pub const PRESETS: [&str; 7] = ["fig2", "fig3", "fig5", "fig6", "fig7", "fig8", "fig9"];

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "yes" | "1" | "on" => Ok(true),
        "false" | "no" | "0" | "off" => Ok(false),
        _ => Err(Error::config(key, format!("expected true or false, got `{v}`"))),
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::config(key, format!("cannot parse `{v}` as a number")))
}

fn parse_list<T>(key: &str, v: &str, item: impl Fn(&str, &str) -> Result<T>) -> Result<Vec<T>> {
    let items: Vec<T> = v
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| item(key, s))
        .collect::<Result<_>>()?;
    if items.is_empty() {
        return Err(Error::config(key, "empty list"));
    }
    Ok(items)
}

fn parse_sigma(key: &str, v: &str) -> Result<SigmaMode> {
    match v {
        "none" => Ok(SigmaMode::None),
        "random" => Ok(SigmaMode::Random),
        "optimal" => Ok(SigmaMode::Optimal),
        _ => Err(Error::config(key, format!("unknown covariance mode `{v}` (none, random, optimal)"))),
    }
}

fn parse_select(key: &str, v: &str) -> Result<SelectMode> {
    match v {
        "schedule" => Ok(SelectMode::Schedule),
        "bcd" => Ok(SelectMode::Bcd),
        _ => Err(Error::config(key, format!("unknown selection mode `{v}` (schedule, bcd)"))),
    }
}

fn join<T: fmt::Display>(items: &[T]) -> String {
    items.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(", ")
}

impl ExperimentConfig {
    pub fn preset(name: &str) -> Result<Self> {
        let mut c = Self::default();
        match name {
            "fig2" => {
                c.horizon = 100;
            }
            "fig3" => {
                c.attack.enabled = true;
                c.variants = vec![GainVariant::Suboptimal, GainVariant::Full];
            }
            "fig5" => {
                c.attack.enabled = true;
                c.attack.select = vec![SelectMode::Schedule, SelectMode::Bcd];
            }
            "fig6" => {
                c.attack.enabled = true;
                c.attack.sigma = vec![SigmaMode::Random, SigmaMode::Optimal];
            }
            "fig7" => {
                c.attack.enabled = true;
                c.attack.sigma = vec![SigmaMode::Random, SigmaMode::Optimal];
                c.horizon = 200;
                c.steady_from = Some(120);
            }
            "fig8" => {
                c.attack.enabled = true;
                c.attack.sigma = vec![SigmaMode::Optimal];
                c.sweep = SweepKind::Byzantine;
                c.sweep_values = (1..=10).map(f64::from).collect();
            }
            "fig9" => {
                c.attack.enabled = true;
                c.attack.sigma = vec![SigmaMode::Optimal];
                c.sweep = SweepKind::Trace;
                c.sweep_values = vec![0.25, 0.5, 1.0, 2.0, 4.0];
            }
            _ => {
                return Err(Error::config(
                    "preset",
                    format!("unknown preset `{name}`; known: {}", PRESETS.join(", ")),
                ))
            }
        }
        c.validate()?;
        Ok(c)
    }

    /// Parses a configuration file on top of the defaults.
    pub fn parse(text: &str) -> Result<Self> {
        let mut c = Self::default();
        let mut seen = BTreeMap::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Parse(format!("line {}: expected `key = value`", lineno + 1)))?;
            let key = key.trim();
            let value = value.trim().trim_matches('"').trim();
            if seen.insert(key.to_string(), lineno).is_some() {
                return Err(Error::config(key, "given more than once"));
            }
            c.set(key, value)?;
        }
        c.validate()?;
        Ok(c)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        Self::parse(&fs::read_to_string(path)?)
    }

    /// Sets a single key.
    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        match key {
            "seed" => self.seed = parse_num(key, v)?,
            "network.agents" => self.agents = parse_num(key, v)?,
            "network.edge_prob" => self.edge_prob = parse_num(key, v)?,
            "selection.l" => self.l_values = parse_list(key, v, parse_num)?,
            "selection.tau" => self.tau = parse_num(key, v)?,
            "selection.pattern" => {
                self.pattern = Some(selection::parse_pattern(v).map_err(|e| Error::config(key, e.to_string()))?)
            }
            "gamma.multiplier" => self.gamma_multiplier = parse_num(key, v)?,
            "gamma.reference" => {
                self.gamma_reference = match v {
                    "full_sharing" => GammaReference::FullSharing,
                    "per_l" => GammaReference::PerL,
                    _ => return Err(Error::config(key, format!("expected full_sharing or per_l, got `{v}`"))),
                }
            }
            "filter.variant" => {
                self.variants = match v {
                    "suboptimal" => vec![GainVariant::Suboptimal],
                    "full" => vec![GainVariant::Full],
                    "both" => vec![GainVariant::Suboptimal, GainVariant::Full],
                    _ => return Err(Error::config(key, format!("expected suboptimal, full or both, got `{v}`"))),
                }
            }
            "sim.horizon" => self.horizon = parse_num(key, v)?,
            "sim.runs" => self.runs = parse_num(key, v)?,
            "sim.noise" => self.noise = if parse_bool(key, v)? { NoiseMode::Stochastic } else { NoiseMode::NoiseFree },
            "sim.steady_from" => self.steady_from = Some(parse_num(key, v)?),
            "init.spread" => self.init_spread = parse_num(key, v)?,
            "attack.enabled" => self.attack.enabled = parse_bool(key, v)?,
            "attack.byzantine" => self.attack.byzantine = parse_num(key, v)?,
            "attack.k0" => self.attack.k0 = parse_num(key, v)?,
            "attack.eta" => self.attack.eta = parse_num(key, v)?,
            "attack.sigma" => self.attack.sigma = parse_list(key, v, parse_sigma)?,
            "attack.select" => self.attack.select = parse_list(key, v, parse_select)?,
            "bcd.iterations" => self.bcd_iterations = parse_num(key, v)?,
            "output.dir" => self.output_dir = Some(PathBuf::from(v)),
            "sweep.kind" => {
                self.sweep = match v {
                    "none" => SweepKind::None,
                    "byzantine" => SweepKind::Byzantine,
                    "trace" => SweepKind::Trace,
                    _ => return Err(Error::config(key, format!("expected none, byzantine or trace, got `{v}`"))),
                }
            }
            "sweep.values" => self.sweep_values = parse_list(key, v, parse_num)?,
            _ => return Err(Error::config(key, "unknown key")),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let m = BENCHMARK_STATE_DIM;
        if self.agents < 2 {
            return Err(Error::config("network.agents", "need at least 2 agents"));
        }
        if !(self.edge_prob > 0.0 && self.edge_prob <= 1.0) {
            return Err(Error::config("network.edge_prob", "must lie in (0, 1]"));
        }
        for &l in &self.l_values {
            if l == 0 || l > m {
                return Err(Error::config(
                    "selection.l",
                    format!("l = {l} outside 1..={m} (state dimension m = {m})"),
                ));
            }
        }
        if let Some(p) = &self.pattern {
            if p.len() != m {
                return Err(Error::config("selection.pattern", format!("pattern must have {m} entries")));
            }
            let ones = p.iter().filter(|&&b| b).count();
            if self.l_values != [ones] {
                return Err(Error::config(
                    "selection.l",
                    format!("a fixed pattern with {ones} ones requires l = {ones}"),
                ));
            }
        }
        if !(self.gamma_multiplier > 0.0 && self.gamma_multiplier <= 1.0) {
            return Err(Error::config("gamma.multiplier", "must lie in (0, 1]"));
        }
        if self.horizon == 0 {
            return Err(Error::config("sim.horizon", "must be positive"));
        }
        if self.runs == 0 {
            return Err(Error::config("sim.runs", "must be positive"));
        }
        if !(self.init_spread >= 0.0 && self.init_spread.is_finite()) {
            return Err(Error::config("init.spread", "must be finite and >= 0"));
        }
        if let Some(s) = self.steady_from {
            if s >= self.horizon {
                return Err(Error::config("sim.steady_from", "must be below the horizon"));
            }
        }
        if self.bcd_iterations == 0 {
            return Err(Error::config("bcd.iterations", "must be positive"));
        }
        let a = &self.attack;
        if a.enabled {
            if a.byzantine == 0 || a.byzantine > self.agents {
                return Err(Error::config("attack.byzantine", format!("must lie in 1..={}", self.agents)));
            }
            if a.k0 == 0 || a.k0 >= self.horizon {
                return Err(Error::config("attack.k0", "must lie in 1..horizon"));
            }
            if !(a.eta > 0.0 && a.eta.is_finite()) {
                return Err(Error::config("attack.eta", "must be positive"));
            }
        }
        match self.sweep {
            SweepKind::None => {}
            SweepKind::Byzantine | SweepKind::Trace => {
                if !a.enabled {
                    return Err(Error::config("sweep.kind", "sweeps need attack.enabled = true"));
                }
                if self.sweep_values.is_empty() {
                    return Err(Error::config("sweep.values", "sweep needs values"));
                }
                for &v in &self.sweep_values {
                    let ok = match self.sweep {
                        SweepKind::Byzantine => v.fract() == 0.0 && v >= 1.0 && v <= self.agents as f64,
                        _ => v > 0.0 && v.is_finite(),
                    };
                    if !ok {
                        return Err(Error::config("sweep.values", format!("invalid sweep value {v}")));
                    }
                }
            }
        }
        Ok(())
    }

    pub fn steady_window(&self) -> (usize, usize) {
        (self.steady_from.unwrap_or(self.horizon * 2 / 3), self.horizon + 1)
    }

    /// Canonical text form; parses back to the same configuration.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let mut put = |k: &str, v: String| {
            out.push_str(k);
            out.push_str(" = ");
            out.push_str(&v);
            out.push('\n');
        };
        put("seed", self.seed.to_string());
        put("network.agents", self.agents.to_string());
        put("network.edge_prob", self.edge_prob.to_string());
        put("selection.l", join(&self.l_values));
        put("selection.tau", self.tau.to_string());
        if let Some(p) = &self.pattern {
            put("selection.pattern", p.iter().map(|&b| if b { '1' } else { '0' }).collect());
        }
        put("gamma.multiplier", self.gamma_multiplier.to_string());
        put(
            "gamma.reference",
            match self.gamma_reference {
                GammaReference::FullSharing => "full_sharing",
                GammaReference::PerL => "per_l",
            }
            .into(),
        );
        put(
            "filter.variant",
            match self.variants.as_slice() {
                [GainVariant::Suboptimal] => "suboptimal",
                [GainVariant::Full] => "full",
                _ => "both",
            }
            .into(),
        );
        put("sim.horizon", self.horizon.to_string());
        put("sim.runs", self.runs.to_string());
        put("sim.noise", (self.noise == NoiseMode::Stochastic).to_string());
        if let Some(s) = self.steady_from {
            put("sim.steady_from", s.to_string());
        }
        put("init.spread", self.init_spread.to_string());
        put("attack.enabled", self.attack.enabled.to_string());
        put("attack.byzantine", self.attack.byzantine.to_string());
        put("attack.k0", self.attack.k0.to_string());
        put("attack.eta", self.attack.eta.to_string());
        put("attack.sigma", self.attack.sigma.iter().map(|s| s.name()).collect::<Vec<_>>().join(", "));
        put("attack.select", self.attack.select.iter().map(|s| s.name()).collect::<Vec<_>>().join(", "));
        put("bcd.iterations", self.bcd_iterations.to_string());
        if let Some(d) = &self.output_dir {
            put("output.dir", d.display().to_string());
        }
        put("sweep.kind", self.sweep.name().into());
        if !self.sweep_values.is_empty() {
            put("sweep.values", join(&self.sweep_values));
        }
        out
    }
}

/// The network and the quantities every cell shares.
#[derive(Debug, Clone)]
pub struct Setup {
    pub model: model::StateSpaceModel,
    pub graph: NetworkGraph,
    pub steady: Vec<Matrix>,
    /// Stability profile at full sharing; other `p_e` follow by scaling.
    pub profile: filter::StabilityProfile,
    pub transition_invertible: bool,
}

impl Setup {
    pub fn build(cfg: &ExperimentConfig) -> Result<Self> {
        let (model, graph) = model::benchmark_model_with(cfg.seed, cfg.agents, cfg.edge_prob)?;
        let steady: Vec<Matrix> = model
            .agents()
            .iter()
            .map(|o| filter::steady_state_covariance(model.a(), model.q(), o).map(|s| s.covariance))
            .collect::<Result<_>>()?;
        let profile = filter::gamma_bound(&graph, &steady, model.agents(), 1.0)?;
        let transition_invertible = filter::check_transition_invertible(model.a());
        Ok(Self {
            model,
            graph,
            steady,
            profile,
            transition_invertible,
        })
    }

    pub fn gamma_star(&self, l: usize) -> f64 {
        self.profile.gamma_star_for(l as f64 / self.model.state_dim() as f64)
    }

    pub fn gamma(&self, cfg: &ExperimentConfig, l: usize) -> f64 {
        let reference = match cfg.gamma_reference {
            GammaReference::FullSharing => self.profile.gamma_star,
            GammaReference::PerL => self.gamma_star(l),
        };
        cfg.gamma_multiplier * reference
    }

    /// Initial selection schedules for sharing level `l`, shared by all runs.
    pub fn schedules(&self, cfg: &ExperimentConfig, l: usize) -> Result<Vec<SelectionSchedule>> {
        let m = self.model.state_dim();
        (0..self.model.agent_count())
            .map(|i| match &cfg.pattern {
                Some(bits) => SelectionSchedule::from_bits(bits, l, cfg.tau),
                None => {
                    let mut r = rng::stream(
                        cfg.seed,
                        None,
                        StreamTag::Schedule {
                            agent: i as u64,
                            shared: l as u64,
                        },
                    );
                    SelectionSchedule::random(m, l, cfg.tau, &mut r)
                }
            })
            .collect()
    }
}

/// Identifies one configuration cell.
#[derive(Debug, Clone, PartialEq)]
pub struct CellKey {
    pub l: usize,
    pub variant: GainVariant,
    pub sigma: SigmaMode,
    pub select: SelectMode,
    pub sweep_value: Option<f64>,
}

impl CellKey {
    pub fn label(&self) -> String {
        let mut s = format!("l{}_{}_{}_{}", self.l, self.variant.name(), self.sigma.name(), self.select.name());
        if let Some(v) = self.sweep_value {
            s.push_str(&format!("_sweep{v}"));
        }
        s
    }
}

/// Per-cell results.
#[derive(Debug, Clone)]
pub struct CellResult {
    pub key: CellKey,
    pub gamma: f64,
    pub gamma_star: f64,
    pub freeze_step: Option<usize>,
    pub byzantine: Vec<usize>,
    pub mse_empirical: Vec<f64>,
    pub mse_prime: Vec<f64>,
    pub mse_analytic: Vec<f64>,
    /// Steady local-recursion MSE with gains from the steady covariances.
    pub steady_analytic: f64,
    pub steady_empirical: f64,
    pub steady_prime: f64,
    pub design: Option<DesignArtifact>,
    pub bcd_objective: Vec<f64>,
    pub withheld: Vec<usize>,
    pub attack_state: Option<AttackState>,
}

/// Everything a scenario run produces.
#[derive(Debug, Clone)]
pub struct ExperimentOutput {
    pub config: ExperimentConfig,
    pub cells: Vec<CellResult>,
    pub gamma_star_full: f64,
    pub transition_invertible: bool,
    pub graph: NetworkGraph,
}

struct CellPlan {
    key: CellKey,
    byzantine_count: usize,
    eta: f64,
}

fn cell_plans(cfg: &ExperimentConfig) -> Vec<CellPlan> {
    let sweep: Vec<Option<f64>> = match cfg.sweep {
        SweepKind::None => vec![None],
        _ => cfg.sweep_values.iter().copied().map(Some).collect(),
    };
    let sigmas: Vec<SigmaMode> = if cfg.attack.enabled { cfg.attack.sigma.clone() } else { vec![SigmaMode::None] };
    let selects: Vec<SelectMode> = if cfg.attack.enabled { cfg.attack.select.clone() } else { vec![SelectMode::Schedule] };
    let mut plans = Vec::new();
    for &l in &cfg.l_values {
        for &variant in &cfg.variants {
            for &sigma in &sigmas {
                for &select in &selects {
                    for &sv in &sweep {
                        let (byzantine_count, eta) = match (cfg.sweep, sv) {
                            (SweepKind::Byzantine, Some(v)) => (v as usize, cfg.attack.eta),
                            (SweepKind::Trace, Some(v)) => (cfg.attack.byzantine, v * cfg.agents as f64),
                            _ => (cfg.attack.byzantine, cfg.attack.eta),
                        };
                        plans.push(CellPlan {
                            key: CellKey {
                                l,
                                variant,
                                sigma,
                                select,
                                sweep_value: sv,
                            },
                            byzantine_count,
                            eta,
                        });
                    }
                }
            }
        }
    }
    plans
}

/// Runs every configuration cell and returns the series and artifacts.
pub fn run_scenario(cfg: &ExperimentConfig) -> Result<ExperimentOutput> {
    cfg.validate()?;
    let setup = Setup::build(cfg)?;
    let mut cells = Vec::new();
    for plan in cell_plans(cfg) {
        tracing::info!(cell = %plan.key.label(), "running cell");
        cells.push(run_cell(cfg, &setup, &plan)?);
    }
    Ok(ExperimentOutput {
        config: cfg.clone(),
        cells,
        gamma_star_full: setup.profile.gamma_star,
        transition_invertible: setup.transition_invertible,
        graph: setup.graph.clone(),
    })
}

fn run_cell(cfg: &ExperimentConfig, setup: &Setup, plan: &CellPlan) -> Result<CellResult> {
    let key = &plan.key;
    let m = setup.model.state_dim();
    let agents = setup.model.agent_count();
    let gamma = setup.gamma(cfg, key.l);
    let schedules = setup.schedules(cfg, key.l)?;
    let mut scenario = Scenario::new(setup.model.clone(), setup.graph.clone(), schedules.clone(), gamma, key.variant)?;
    scenario.init.spread = cfg.init_spread;
    let attacked = cfg.attack.enabled && key.sigma != SigmaMode::None;
    if attacked {
        scenario = scenario.with_attack_start(cfg.attack.k0)?;
    }
    let gains = filter::compute_gains(&scenario, cfg.horizon)?;
    let steady_gains = analysis::steady_gains(&setup.model, &setup.steady, gamma)?;
    let p_e = scenario.sharing_probability();

    let mut design = None;
    let mut bcd_objective = Vec::new();
    let mut withheld = Vec::new();
    let mut attack_state = None;
    let mut byzantine = Vec::new();
    let mut sigma = Matrix::zeros(agents * m, agents * m);
    if attacked {
        let k0 = cfg.attack.k0;
        byzantine = attack::byzantine_set(&setup.graph, plan.byzantine_count)?;
        let frozen = gains.at(k0);
        let consensus: Vec<Matrix> = frozen.iter().map(|g| g.consensus.clone()).collect();
        let at_k0: Vec<SelectionSchedule> = schedules.iter().map(|s| s.advance_by(k0)).collect();
        let state = AttackState::capture(&setup.graph, &consensus, &at_k0, &byzantine, plan.eta, cfg.bcd_iterations, None);
        sigma = match key.sigma {
            SigmaMode::Random => {
                let mut r = rng::stream(cfg.seed, None, StreamTag::RandomSigma);
                attack::random_covariance(agents, &byzantine, plan.eta, m, &mut r)?
            }
            SigmaMode::Optimal => {
                let gam = analysis::assemble_injection(&consensus, &setup.graph, &at_k0, Some(&byzantine));
                attack::design_covariance(&gam, plan.eta, &byzantine, m)?.sigma
            }
            SigmaMode::None => unreachable!("attacked cells have a covariance mode"),
        };
        let mut patterns = Vec::new();
        if key.select == SelectMode::Bcd {
            let ctx = AttackObjectiveContext::new(&consensus, &setup.graph, &byzantine);
            let initial: Vec<Vec<bool>> = byzantine.iter().map(|&i| at_k0[i].bits()).collect();
            let out = attack::bcd_design(&ctx, &sigma, key.l, cfg.bcd_iterations, &initial)?;
            bcd_objective = out.objective.clone();
            withheld = out.withheld.clone();
            patterns = attack::designed_schedules(&byzantine, &out.patterns, &at_k0)?;
        }
        let artifact = DesignArtifact {
            sigma: Some(sigma.clone()),
            patterns: if patterns.is_empty() {
                None
            } else {
                Some(patterns.iter().map(|(i, s)| (*i, s.bits())).collect())
            },
        };
        design = Some(artifact);
        attack_state = Some(AttackState { sigma: to_rows(&sigma), ..state });
        let attack_plan = AttackPlan::new(byzantine.clone(), sigma.clone(), plan.eta, k0, m)?.with_designed_patterns(patterns)?;
        scenario = scenario.with_attack(attack_plan)?;
    }

    let covariance = analysis::realized_covariance(&scenario, &gains, cfg.horizon)?;
    let empirical = analysis::empirical_mse(&scenario, &gains, cfg.horizon, cfg.runs, cfg.seed, cfg.noise)?;
    let steady_local = analysis::steady_state_attacked(&setup.model, &steady_gains, &setup.graph, &sigma, p_e)?;
    let (from, to) = cfg.steady_window();
    Ok(CellResult {
        key: key.clone(),
        gamma,
        gamma_star: setup.gamma_star(key.l),
        freeze_step: gains.freeze_step,
        byzantine,
        steady_analytic: analysis::mse_from_blocks(&steady_local),
        steady_empirical: window_mean(&empirical, from, to),
        steady_prime: window_mean(&covariance.mse_prime, from, to),
        mse_empirical: empirical,
        mse_prime: covariance.mse_prime,
        mse_analytic: covariance.mse_analytic,
        design,
        bcd_objective,
        withheld,
        attack_state,
    })
}

pub const CSV_HEADER: &str = "k,l,variant,sigma_mode,s_mode,mse_empirical,mse_prime,mse_analytic";

/// Twelve significant digits in scientific notation.
pub fn format_value(v: f64) -> String {
    format!("{v:.11e}")
}

/// Series CSV. Sweeps emit one steady row per grid point with two extra
/// columns; other experiments emit one row per step and cell.
pub fn export_csv(output: &ExperimentOutput) -> Result<String> {
    if output.cells.is_empty() {
        return Err(Error::InvalidArgument("nothing to export".into()));
    }
    let sweep = output.config.sweep;
    let mut out = String::from(CSV_HEADER);
    if sweep != SweepKind::None {
        out.push_str(",sweep,sweep_value");
    }
    out.push('\n');
    for cell in &output.cells {
        let k = &cell.key;
        let prefix = format!("{},{},{},{}", k.l, k.variant.name(), k.sigma.name(), k.select.name());
        if sweep != SweepKind::None {
            out.push_str(&format!(
                "{},{prefix},{},{},{},{},{}\n",
                output.config.horizon,
                format_value(cell.steady_empirical),
                format_value(cell.steady_prime),
                format_value(cell.steady_analytic),
                sweep.name(),
                k.sweep_value.map(format_value).unwrap_or_default()
            ));
            continue;
        }
        for step in 0..cell.mse_empirical.len() {
            out.push_str(&format!(
                "{step},{prefix},{},{},{}\n",
                format_value(cell.mse_empirical[step]),
                format_value(cell.mse_prime[step]),
                format_value(cell.mse_analytic[step])
            ));
        }
    }
    Ok(out)
}

pub fn sha256_hex(data: &[u8]) -> String {
    hex::encode(Sha256::digest(data))
}

/// `key = value` lines describing how the artifacts were produced.
pub fn manifest(output: &ExperimentOutput, csv: &str) -> String {
    let cfg = &output.config;
    let mut lines = vec![
        ("seed".to_string(), cfg.seed.to_string()),
        ("agents".into(), cfg.agents.to_string()),
        ("edge_prob".into(), cfg.edge_prob.to_string()),
        ("state_dim".into(), BENCHMARK_STATE_DIM.to_string()),
        ("edges".into(), output.graph.edges().len().to_string()),
        ("graph_stream_seed".into(), rng::stream_seed(cfg.seed, None, StreamTag::Graph { attempt: 0 }).to_string()),
        ("noise_levels_stream_seed".into(), rng::stream_seed(cfg.seed, None, StreamTag::NoiseLevels).to_string()),
        ("runs".into(), cfg.runs.to_string()),
        ("horizon".into(), cfg.horizon.to_string()),
        ("gamma_multiplier".into(), cfg.gamma_multiplier.to_string()),
        ("gamma_star_full_sharing".into(), format_value(output.gamma_star_full)),
        ("transition_invertible".into(), output.transition_invertible.to_string()),
    ];
    for cell in &output.cells {
        let label = cell.key.label();
        lines.push((format!("{label}.gamma"), format_value(cell.gamma)));
        lines.push((format!("{label}.gamma_star"), format_value(cell.gamma_star)));
        lines.push((format!("{label}.gamma_within_bound"), (cell.gamma <= cell.gamma_star).to_string()));
        lines.push((
            format!("{label}.freeze_step"),
            cell.freeze_step.map_or("none".into(), |k| k.to_string()),
        ));
        if !cell.byzantine.is_empty() {
            lines.push((format!("{label}.byzantine"), join(&cell.byzantine)));
        }
        lines.push((format!("{label}.steady_analytic"), format_value(cell.steady_analytic)));
        if let Some(d) = &cell.design {
            lines.push((format!("{label}.design_sha256"), sha256_hex(d.to_text().as_bytes())));
        }
        if !cell.withheld.is_empty() {
            lines.push((format!("{label}.withheld"), join(&cell.withheld)));
        }
    }
    lines.push(("series_sha256".into(), sha256_hex(csv.as_bytes())));
    let mut out = String::new();
    for (k, v) in lines {
        out.push_str(&format!("{k} = {v}\n"));
    }
    out
}

pub const PLOT_TEMPLATE: &str = r#"# Plots series.csv; requires pandas and matplotlib.
import pandas as pd
import matplotlib.pyplot as plt

df = pd.read_csv("series.csv")
keys = ["l", "variant", "sigma_mode", "s_mode"]
fig, ax = plt.subplots()
if "sweep" in df.columns:
    for key, g in df.groupby(keys):
        ax.plot(g["sweep_value"], g["mse_analytic"], marker="o", label=" ".join(map(str, key)))
    ax.set_xlabel(df["sweep"].iloc[0])
else:
    for key, g in df.groupby(keys):
        ax.plot(g["k"], g["mse_empirical"], label=" ".join(map(str, key)))
        ax.plot(g["k"], g["mse_prime"], linestyle="--")
    ax.set_xlabel("k")
ax.set_ylabel("MSE")
ax.legend(fontsize="small")
fig.savefig("series.png", dpi=150)
"#;

/// Writes `series.csv`, `manifest.txt`, `plot.py`, plus one design artifact
/// and one attack state per attacked cell. Returns the CSV text.
pub fn write_artifacts(output: &ExperimentOutput, dir: &Path) -> Result<String> {
    fs::create_dir_all(dir)?;
    let csv = export_csv(output)?;
    fs::write(dir.join("series.csv"), &csv)?;
    fs::write(dir.join("manifest.txt"), manifest(output, &csv))?;
    fs::write(dir.join("plot.py"), PLOT_TEMPLATE)?;
    for cell in &output.cells {
        let label = cell.key.label();
        if let Some(d) = &cell.design {
            fs::write(dir.join(format!("design_{label}.txt")), d.to_text())?;
        }
        if let Some(s) = &cell.attack_state {
            fs::write(dir.join(format!("state_{label}.json")), s.to_json()?)?;
        }
    }
    Ok(csv)
}

fn to_rows(m: &Matrix) -> Vec<Vec<f64>> {
    (0..m.nrows()).map(|r| m.row(r).iter().copied().collect()).collect()
}

fn from_rows(rows: &[Vec<f64>], what: &str) -> Result<Matrix> {
    let n = rows.len();
    let c = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != c) {
        return Err(Error::Parse(format!("{what}: ragged rows")));
    }
    Ok(Matrix::from_fn(n, c, |i, j| rows[i][j]))
}

/// What the attacker knows at the attack start, in portable form.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackState {
    pub agents: usize,
    pub state_dim: usize,
    pub edges: Vec<(usize, usize)>,
    /// Frozen consensus gains, row-major.
    pub consensus: Vec<Vec<Vec<f64>>>,
    /// `S_i(k₀)` as 0/1 strings.
    pub patterns: Vec<String>,
    pub tau: usize,
    pub shared: usize,
    pub byzantine: Vec<usize>,
    pub eta: f64,
    pub bcd_iterations: usize,
    /// Current attack covariance (row-major), used by selection design.
    pub sigma: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DesignMode {
    Covariance,
    Selection,
    Both,
}

impl std::str::FromStr for DesignMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cov" => Ok(DesignMode::Covariance),
            "select" => Ok(DesignMode::Selection),
            "both" => Ok(DesignMode::Both),
            _ => Err(Error::config("mode", format!("expected cov, select or both, got `{s}`"))),
        }
    }
}

impl AttackState {
    pub fn capture(
        graph: &NetworkGraph,
        consensus: &[Matrix],
        schedules: &[SelectionSchedule],
        byzantine: &[usize],
        eta: f64,
        bcd_iterations: usize,
        sigma: Option<&Matrix>,
    ) -> Self {
        let m = consensus[0].nrows();
        let agents = consensus.len();
        Self {
            agents,
            state_dim: m,
            edges: graph.edges(),
            consensus: consensus.iter().map(to_rows).collect(),
            patterns: schedules.iter().map(|s| s.to_string()).collect(),
            tau: schedules[0].tau(),
            shared: schedules[0].shared(),
            byzantine: byzantine.to_vec(),
            eta,
            bcd_iterations,
            sigma: to_rows(&sigma.cloned().unwrap_or_else(|| Matrix::zeros(agents * m, agents * m))),
        }
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::Parse(e.to_string()))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Parse(format!("attack state: {e}")))
    }

    fn parts(&self) -> Result<(NetworkGraph, Vec<Matrix>, Vec<SelectionSchedule>, Matrix)> {
        let graph = NetworkGraph::from_edges(self.agents, &self.edges)?;
        let consensus: Vec<Matrix> = self
            .consensus
            .iter()
            .map(|c| from_rows(c, "consensus gain"))
            .collect::<Result<_>>()?;
        if consensus.len() != self.agents || consensus.iter().any(|c| c.shape() != (self.state_dim, self.state_dim)) {
            return Err(Error::Dimension("consensus gains do not match agents × m × m".into()));
        }
        let schedules: Vec<SelectionSchedule> = self
            .patterns
            .iter()
            .map(|p| SelectionSchedule::from_bits(&selection::parse_pattern(p)?, self.shared, self.tau))
            .collect::<Result<_>>()?;
        if schedules.len() != self.agents || schedules.iter().any(|s| s.state_dim() != self.state_dim) {
            return Err(Error::Dimension("one pattern of length m per agent required".into()));
        }
        let sigma = from_rows(&self.sigma, "sigma")?;
        let n = self.agents * self.state_dim;
        if sigma.shape() != (n, n) {
            return Err(Error::Dimension(format!("Σ must be {n}×{n}")));
        }
        Ok((graph, consensus, schedules, sigma))
    }

    /// Designs `Σ*`, the Byzantine patterns at `k₀`, or both (covariance first).
    pub fn design(&self, mode: DesignMode) -> Result<DesignArtifact> {
        let (graph, consensus, schedules, mut sigma) = self.parts()?;
        let m = self.state_dim;
        let mut out = DesignArtifact {
            sigma: None,
            patterns: None,
        };
        if matches!(mode, DesignMode::Covariance | DesignMode::Both) {
            let gam = analysis::assemble_injection(&consensus, &graph, &schedules, Some(&self.byzantine));
            sigma = attack::design_covariance(&gam, self.eta, &self.byzantine, m)?.sigma;
            out.sigma = Some(sigma.clone());
        }
        if matches!(mode, DesignMode::Selection | DesignMode::Both) {
            let ctx = AttackObjectiveContext::new(&consensus, &graph, &self.byzantine);
            let initial: Vec<Vec<bool>> = self.byzantine.iter().map(|&i| schedules[i].bits()).collect();
            let res = attack::bcd_design(&ctx, &sigma, self.shared, self.bcd_iterations, &initial)?;
            out.patterns = Some(self.byzantine.iter().copied().zip(res.patterns).collect());
        }
        Ok(out)
    }
}

/// Designed attack in portable text form.
#[derive(Debug, Clone, PartialEq)]
pub struct DesignArtifact {
    pub sigma: Option<Matrix>,
    pub patterns: Option<Vec<(usize, Vec<bool>)>>,
}

impl DesignArtifact {
    /// `sigma R C` followed by `R` rows, then `patterns N` and `agent bits` lines.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        if let Some(s) = &self.sigma {
            out.push_str(&format!("sigma {} {}\n", s.nrows(), s.ncols()));
            for r in 0..s.nrows() {
                let row: Vec<String> = s.row(r).iter().map(|v| format!("{v:.17e}")).collect();
                out.push_str(&row.join(" "));
                out.push('\n');
            }
        }
        if let Some(p) = &self.patterns {
            out.push_str(&format!("patterns {}\n", p.len()));
            for (agent, bits) in p {
                let s: String = bits.iter().map(|&b| if b { '1' } else { '0' }).collect();
                out.push_str(&format!("{agent} {s}\n"));
            }
        }
        out
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        let mut out = DesignArtifact {
            sigma: None,
            patterns: None,
        };
        while let Some(line) = lines.next() {
            let mut parts = line.split_whitespace();
            match parts.next() {
                Some("sigma") => {
                    let r: usize = parse_num("sigma", parts.next().unwrap_or(""))?;
                    let c: usize = parse_num("sigma", parts.next().unwrap_or(""))?;
                    let mut data = Vec::with_capacity(r * c);
                    for _ in 0..r {
                        let row = lines.next().ok_or_else(|| Error::Parse("truncated sigma".into()))?;
                        for v in row.split_whitespace() {
                            data.push(parse_num::<f64>("sigma", v)?);
                        }
                    }
                    if data.len() != r * c {
                        return Err(Error::Parse("sigma has the wrong number of values".into()));
                    }
                    out.sigma = Some(Matrix::from_row_slice(r, c, &data));
                }
                Some("patterns") => {
                    let n: usize = parse_num("patterns", parts.next().unwrap_or(""))?;
                    let mut p = Vec::with_capacity(n);
                    for _ in 0..n {
                        let row = lines.next().ok_or_else(|| Error::Parse("truncated patterns".into()))?;
                        let (a, bits) = row
                            .split_once(' ')
                            .ok_or_else(|| Error::Parse(format!("bad pattern line `{row}`")))?;
                        p.push((parse_num("patterns", a)?, selection::parse_pattern(bits.trim())?));
                    }
                    out.patterns = Some(p);
                }
                Some(other) => return Err(Error::Parse(format!("unexpected section `{other}`"))),
                None => {}
            }
        }
        Ok(out)
    }
}

/// `γ*` per sharing level and the step sizes a configuration would use.
#[derive(Debug, Clone)]
pub struct GammaReport {
    pub gamma_star_full: f64,
    pub lambda_i_min: f64,
    pub coupled_max: f64,
    /// `(l, γ*(l/m), γ, γ ≤ γ*)`
    pub rows: Vec<(usize, f64, f64, bool)>,
    pub transition_invertible: bool,
}

pub fn gamma_report(cfg: &ExperimentConfig) -> Result<GammaReport> {
    cfg.validate()?;
    let setup = Setup::build(cfg)?;
    let rows = cfg
        .l_values
        .iter()
        .map(|&l| {
            let star = setup.gamma_star(l);
            let g = setup.gamma(cfg, l);
            (l, star, g, g <= star)
        })
        .collect();
    Ok(GammaReport {
        gamma_star_full: setup.profile.gamma_star,
        lambda_i_min: setup.profile.lambda_i_min,
        coupled_max: setup.profile.coupled_max,
        rows,
        transition_invertible: setup.transition_invertible,
    })
}

/// Steady-state local MSE for one sharing level and one attack covariance,
/// with gains from the steady covariances.
pub fn steady_mse(setup: &Setup, gamma: f64, sigma: &Matrix, l: usize) -> Result<f64> {
    let gains = analysis::steady_gains(&setup.model, &setup.steady, gamma)?;
    let p_e = l as f64 / setup.model.state_dim() as f64;
    let blocks = analysis::steady_state_attacked(&setup.model, &gains, &setup.graph, sigma, p_e)?;
    Ok(analysis::mse_from_blocks(&blocks))
}

/// Helper for tests and tools: the injection matrix `Γ(k₀)` of a cell.
pub fn injection_at(
    setup: &Setup,
    consensus: &[Matrix],
    schedules: &[SelectionSchedule],
    k0: usize,
    byzantine: &[usize],
) -> Matrix {
    let at_k0: Vec<SelectionSchedule> = schedules.iter().map(|s| s.advance_by(k0)).collect();
    analysis::assemble_injection(consensus, &setup.graph, &at_k0, Some(byzantine))
}

/// Largest relative gap between two values, for reports.
pub fn relative_gap(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs().max(f64::MIN_POSITIVE)
}

/// Symmetric positive-definiteness check used by tools reading artifacts.
pub fn is_psd(m: &Matrix, tol: f64) -> bool {
    linalg::sym_eigen_extremes(m).0 >= -tol
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quick(mut c: ExperimentConfig) -> ExperimentConfig {
        c.agents = 6;
        c.edge_prob = 0.6;
        c.runs = 3;
        c.horizon = 40;
        c.attack.k0 = 10;
        c.attack.byzantine = c.attack.byzantine.min(2);
        c.attack.eta = 6.0;
        if c.sweep == SweepKind::Byzantine {
            c.sweep_values = vec![1.0, 2.0];
        }
        c
    }

    #[test]
    fn presets_have_expected_parameters() {
        let f5 = ExperimentConfig::preset("fig5").unwrap();
        assert_eq!(f5.bcd_iterations, 10);
        let f3 = ExperimentConfig::preset("fig3").unwrap();
        assert_eq!(f3.attack.k0, 30);
        assert_eq!(f3.attack.byzantine, 5);
        assert_eq!(f3.attack.eta, 25.0);
        assert!(!ExperimentConfig::preset("fig2").unwrap().attack.enabled);
        assert!(ExperimentConfig::preset("fig4").is_err());
    }

    #[test]
    fn config_roundtrip_and_errors() {
        for name in PRESETS {
            let c = ExperimentConfig::preset(name).unwrap();
            assert_eq!(ExperimentConfig::parse(&c.to_text()).unwrap(), c);
        }
        let err = ExperimentConfig::parse("selection.l = 9\n").unwrap_err();
        match err {
            Error::Config { key, message } => {
                assert_eq!(key, "selection.l");
                assert!(message.contains("l = 9"));
            }
            other => panic!("unexpected {other:?}"),
        }
        assert!(matches!(ExperimentConfig::parse("bogus = 1"), Err(Error::Config { .. })));
        assert!(matches!(ExperimentConfig::parse("attack.sigma = fancy"), Err(Error::Config { .. })));
        assert!(ExperimentConfig::parse("no equals sign").is_err());
        let c = ExperimentConfig::parse("# comment\nseed = 9 # trailing\nselection.pattern = \"11000000\"\nselection.l = 2\n").unwrap();
        assert_eq!(c.seed, 9);
        assert_eq!(c.pattern.as_ref().unwrap().iter().filter(|&&b| b).count(), 2);
    }

    #[test]
    fn csv_is_deterministic_and_parses_back() {
        let mut c = quick(ExperimentConfig::preset("fig6").unwrap());
        c.l_values = vec![2, 8];
        let a = export_csv(&run_scenario(&c).unwrap()).unwrap();
        let b = export_csv(&run_scenario(&c).unwrap()).unwrap();
        assert_eq!(a, b);
        let mut lines = a.lines();
        assert_eq!(lines.next(), Some(CSV_HEADER));
        for line in lines {
            for field in line.split(',').skip(5) {
                let v: f64 = field.parse().unwrap();
                assert_eq!(format_value(v), field);
                assert!(v.is_finite() && v >= 0.0);
            }
        }
    }

    #[test]
    fn sweep_emits_one_row_per_point() {
        let c = quick(ExperimentConfig::preset("fig8").unwrap());
        let out = run_scenario(&c).unwrap();
        let csv = export_csv(&out).unwrap();
        assert!(csv.starts_with(&format!("{CSV_HEADER},sweep,sweep_value\n")));
        assert_eq!(csv.lines().count(), 1 + c.l_values.len() * c.sweep_values.len());
    }

    #[test]
    fn empty_output_is_an_error() {
        let c = quick(ExperimentConfig::preset("fig2").unwrap());
        let mut out = run_scenario(&c).unwrap();
        out.cells.clear();
        assert!(export_csv(&out).is_err());
    }

    #[test]
    fn attack_state_roundtrip_and_design() {
        let c = quick(ExperimentConfig::preset("fig5").unwrap());
        let out = run_scenario(&c).unwrap();
        let cell = out.cells.iter().find(|c| c.key.select == SelectMode::Bcd).unwrap();
        let state = cell.attack_state.clone().unwrap();
        let back = AttackState::from_json(&state.to_json().unwrap()).unwrap();
        assert_eq!(back, state);
        let d = back.design(DesignMode::Both).unwrap();
        let text = d.to_text();
        let parsed = DesignArtifact::parse(&text).unwrap();
        assert_eq!(parsed.patterns, d.patterns);
        let (a, b) = (parsed.sigma.unwrap(), d.sigma.unwrap());
        assert_eq!(a, b);
        assert!(is_psd(&a, 1e-9));
    }

    #[test]
    fn artifacts_are_written() {
        let dir = tempfile::tempdir().unwrap();
        let c = quick(ExperimentConfig::preset("fig3").unwrap());
        let out = run_scenario(&c).unwrap();
        let csv = write_artifacts(&out, dir.path()).unwrap();
        let manifest = fs::read_to_string(dir.path().join("manifest.txt")).unwrap();
        assert!(manifest.contains(&format!("series_sha256 = {}", sha256_hex(csv.as_bytes()))));
        assert!(manifest.contains("gamma_within_bound = true"));
        assert!(dir.path().join("plot.py").exists());
    }

    #[test]
    fn unattacked_full_sharing_settles() {
        let mut c = quick(ExperimentConfig::preset("fig2").unwrap());
        c.l_values = vec![8];
        let out = run_scenario(&c).unwrap();
        let s = &out.cells[0].mse_prime;
        assert!(s[s.len() - 1] < s[0]);
        let tail = &s[s.len() - 10..];
        for w in tail.windows(2) {
            assert!((w[1] - w[0]).abs() < 1e-8 * w[0]);
        }
    }
}
