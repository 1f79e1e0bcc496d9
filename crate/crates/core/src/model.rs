//! Linear state-space model, per-agent observation models and the
//! communication graph.

use std::collections::VecDeque;
use std::fmt::Write as _;

use rand::Rng;

use crate::error::{Error, Result};
use crate::linalg::{self, Matrix, Vector};
use crate::rng::{self, SimRng, StreamTag};

/// Local sensor of one agent: `y = H x + v`, `v ~ N(0, R)`.
#[derive(Debug, Clone)]
pub struct ObservationModel {
    h: Matrix,
    r: Matrix,
    r_factor: Matrix,
}

impl ObservationModel {
    pub fn new(h: Matrix, r: Matrix) -> Result<Self> {
        let n = h.nrows();
        if n == 0 {
            return Err(Error::InvalidArgument(
                "observation dimension must be at least 1".into(),
            ));
        }
        if r.shape() != (n, n) {
            return Err(Error::Dimension(format!(
                "R is {}x{} but H has {} rows",
                r.nrows(),
                r.ncols(),
                n
            )));
        }
        if linalg::asymmetry(&r) > 1e-12 * (1.0 + r.norm()) {
            return Err(Error::InvalidArgument("R must be symmetric".into()));
        }
        let r_factor = r
            .clone()
            .cholesky()
            .ok_or(Error::Singular("observation noise covariance R"))?
            .l();
        Ok(Self { h, r, r_factor })
    }

    pub fn h(&self) -> &Matrix {
        &self.h
    }

    pub fn r(&self) -> &Matrix {
        &self.r
    }

    pub fn obs_dim(&self) -> usize {
        self.h.nrows()
    }

    pub fn state_dim(&self) -> usize {
        self.h.ncols()
    }

    /// `Hᵀ R⁻¹ H`, the information contributed by one measurement.
    pub fn information(&self) -> Result<Matrix> {
        let r_inv_h = linalg::spd_solve(&self.r, &self.h, "observation noise covariance R")?;
        Ok(linalg::symmetrized(self.h.transpose() * r_inv_h))
    }
}

/// Global dynamics `x(k+1) = A x(k) + w(k)`, `w ~ N(0, Q)`, plus one
/// observation model per agent.
#[derive(Debug, Clone)]
pub struct StateSpaceModel {
    a: Matrix,
    q: Matrix,
    q_factor: Matrix,
    agents: Vec<ObservationModel>,
}

impl StateSpaceModel {
    pub fn new(a: Matrix, q: Matrix, agents: Vec<ObservationModel>) -> Result<Self> {
        let m = a.nrows();
        if a.ncols() != m {
            return Err(Error::Dimension("A must be square".into()));
        }
        if q.shape() != (m, m) {
            return Err(Error::Dimension(format!("Q must be {m}x{m}")));
        }
        if linalg::asymmetry(&q) > 1e-12 * (1.0 + q.norm()) {
            return Err(Error::InvalidArgument("Q must be symmetric".into()));
        }
        let (q_factor, min_eig) = linalg::psd_factor(&q);
        if min_eig < -1e-10 {
            return Err(Error::NotPsd(min_eig));
        }
        if let Some(bad) = agents.iter().position(|o| o.state_dim() != m) {
            return Err(Error::Dimension(format!(
                "H of agent {bad} has {} columns, expected {m}",
                agents[bad].state_dim()
            )));
        }
        Ok(Self {
            a,
            q,
            q_factor,
            agents,
        })
    }

    pub fn a(&self) -> &Matrix {
        &self.a
    }

    pub fn q(&self) -> &Matrix {
        &self.q
    }

    pub fn state_dim(&self) -> usize {
        self.a.nrows()
    }

    pub fn agent_count(&self) -> usize {
        self.agents.len()
    }

    pub fn agent(&self, i: usize) -> &ObservationModel {
        &self.agents[i]
    }

    pub fn agents(&self) -> &[ObservationModel] {
        &self.agents
    }

    pub(crate) fn process_noise(&self, rng: &mut SimRng) -> Vector {
        rng::gaussian_with_factor(rng, &self.q_factor)
    }

    /// Same dynamics with a different process-noise covariance.
    pub fn with_process_noise(&self, q: Matrix) -> Result<Self> {
        Self::new(self.a.clone(), q, self.agents.clone())
    }
}

/// Undirected connected communication graph.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NetworkGraph {
    neighbors: Vec<Vec<usize>>,
}

impl NetworkGraph {
    /// Builds a graph from an edge list; rejects self loops, out-of-range
    /// nodes and disconnected graphs.
    pub fn from_edges(agents: usize, edges: &[(usize, usize)]) -> Result<Self> {
        let g = Self::from_edges_unchecked(agents, edges)?;
        if !g.is_connected() {
            return Err(Error::InvalidArgument("graph is not connected".into()));
        }
        Ok(g)
    }

    fn from_edges_unchecked(agents: usize, edges: &[(usize, usize)]) -> Result<Self> {
        if agents == 0 {
            return Err(Error::InvalidArgument("graph needs at least one agent".into()));
        }
        let mut neighbors = vec![Vec::new(); agents];
        for &(i, j) in edges {
            if i >= agents || j >= agents {
                return Err(Error::InvalidArgument(format!(
                    "edge ({i}, {j}) out of range for {agents} agents"
                )));
            }
            if i == j {
                return Err(Error::InvalidArgument(format!("self loop at {i}")));
            }
            if !neighbors[i].contains(&j) {
                neighbors[i].push(j);
                neighbors[j].push(i);
            }
        }
        for n in &mut neighbors {
            n.sort_unstable();
        }
        Ok(Self { neighbors })
    }

    pub fn agent_count(&self) -> usize {
        self.neighbors.len()
    }

    /// `N_i`, sorted ascending, excluding `i`.
    pub fn neighbors(&self, i: usize) -> &[usize] {
        &self.neighbors[i]
    }

    pub fn degree(&self, i: usize) -> usize {
        self.neighbors[i].len()
    }

    pub fn is_edge(&self, i: usize, j: usize) -> bool {
        self.neighbors[i].binary_search(&j).is_ok()
    }

    /// Edges `(i, j)` with `i < j`, in lexicographic order.
    pub fn edges(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for (i, ns) in self.neighbors.iter().enumerate() {
            out.extend(ns.iter().filter(|&&j| j > i).map(|&j| (i, j)));
        }
        out
    }

    pub fn adjacency(&self) -> Matrix {
        let n = self.agent_count();
        Matrix::from_fn(n, n, |i, j| if self.is_edge(i, j) { 1.0 } else { 0.0 })
    }

    pub fn degree_matrix(&self) -> Matrix {
        let n = self.agent_count();
        Matrix::from_fn(n, n, |i, j| if i == j { self.degree(i) as f64 } else { 0.0 })
    }

    pub fn is_connected(&self) -> bool {
        let n = self.agent_count();
        let mut seen = vec![false; n];
        let mut queue = VecDeque::from([0usize]);
        seen[0] = true;
        let mut count = 1;
        while let Some(i) = queue.pop_front() {
            for &j in &self.neighbors[i] {
                if !seen[j] {
                    seen[j] = true;
                    count += 1;
                    queue.push_back(j);
                }
            }
        }
        count == n
    }

    /// Graphviz rendering with zero-based node ids.
    pub fn to_dot(&self) -> String {
        let mut s = String::from("graph g {\n");
        for i in 0..self.agent_count() {
            if self.degree(i) == 0 {
                let _ = writeln!(s, "  {i};");
            }
        }
        for (i, j) in self.edges() {
            let _ = writeln!(s, "  {i} -- {j};");
        }
        s.push_str("}\n");
        s
    }
}

/// Laplacian `D − E` of the graph.
pub fn laplacian(g: &NetworkGraph) -> Matrix {
    g.degree_matrix() - g.adjacency()
}

const MAX_GRAPH_ATTEMPTS: u64 = 1000;

/// Erdős–Rényi graph `G(agents, edge_prob)`, redrawn with the next sub-seed
/// until it is connected.
pub fn build_network(seed: u64, agents: usize, edge_prob: f64) -> Result<NetworkGraph> {
    if agents < 2 {
        return Err(Error::InvalidArgument("a network needs at least 2 agents".into()));
    }
    if !(edge_prob > 0.0 && edge_prob <= 1.0) {
        return Err(Error::InvalidArgument(format!(
            "edge probability {edge_prob} outside (0, 1]"
        )));
    }
    for attempt in 0..MAX_GRAPH_ATTEMPTS {
        let mut rng = rng::stream(seed, None, StreamTag::Graph { attempt });
        let mut edges = Vec::new();
        for i in 0..agents {
            for j in (i + 1)..agents {
                if rng.random::<f64>() < edge_prob {
                    edges.push((i, j));
                }
            }
        }
        let g = NetworkGraph::from_edges_unchecked(agents, &edges)?;
        if g.is_connected() {
            return Ok(g);
        }
    }
    Err(Error::Disconnected {
        attempts: MAX_GRAPH_ATTEMPTS as usize,
        edge_prob,
    })
}

/// Trajectory `x(0..=horizon)` of the state, `x(0) = x0`.
pub fn simulate_truth(
    model: &StateSpaceModel,
    x0: &Vector,
    horizon: usize,
    rng: &mut SimRng,
) -> Vec<Vector> {
    let mut xs = Vec::with_capacity(horizon + 1);
    xs.push(x0.clone());
    for k in 0..horizon {
        let next = model.a() * &xs[k] + model.process_noise(rng);
        xs.push(next);
    }
    xs
}

pub fn observe(obs: &ObservationModel, x: &Vector, rng: &mut SimRng) -> Vector {
    obs.h() * x + rng::gaussian_with_factor(rng, &obs.r_factor)
}

pub const BENCHMARK_AGENTS: usize = 25;
pub const BENCHMARK_STATE_DIM: usize = 8;
pub const BENCHMARK_EDGE_PROB: f64 = 0.2;

/// 2×2 core of the target-tracking transition matrix (`A = core ⊗ I₄`).
pub fn benchmark_transition_core() -> Matrix {
    Matrix::from_row_slice(2, 2, &[0.6, 0.005, 0.25, 0.6])
}

pub fn benchmark_observation_matrix() -> Matrix {
    let core = Matrix::from_row_slice(
        4,
        4,
        &[
            1.0, 1.0, 0.0, 0.0, //
            1.0, 0.0, 0.0, 0.0, //
            0.0, 0.0, 1.0, 0.0, //
            0.0, 0.0, 1.0, 1.0,
        ],
    );
    linalg::kron(&core, &Matrix::identity(2, 2))
}

/// Target-tracking benchmark: `m = n = 8`, `Q = 0.1 I`, `R_i = μ_i I` with
/// `μ_i ~ U(0, 1)`, and a random connected network.
pub fn benchmark_model(seed: u64) -> Result<(StateSpaceModel, NetworkGraph)> {
    benchmark_model_with(seed, BENCHMARK_AGENTS, BENCHMARK_EDGE_PROB)
}

pub fn benchmark_model_with(
    seed: u64,
    agents: usize,
    edge_prob: f64,
) -> Result<(StateSpaceModel, NetworkGraph)> {
    let graph = build_network(seed, agents, edge_prob)?;
    let a = linalg::kron(&benchmark_transition_core(), &Matrix::identity(4, 4));
    let q = Matrix::identity(BENCHMARK_STATE_DIM, BENCHMARK_STATE_DIM) * 0.1;
    let h = benchmark_observation_matrix();
    let mut rng = rng::stream(seed, None, StreamTag::NoiseLevels);
    let mut observers = Vec::with_capacity(agents);
    for _ in 0..agents {
        // open interval: R must stay positive definite
        let mu = loop {
            let u: f64 = rng.random();
            if u > 0.0 {
                break u;
            }
        };
        let r = Matrix::identity(BENCHMARK_STATE_DIM, BENCHMARK_STATE_DIM) * mu;
        observers.push(ObservationModel::new(h.clone(), r)?);
    }
    let model = StateSpaceModel::new(a, q, observers)?;
    Ok((model, graph))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn path3() -> NetworkGraph {
        NetworkGraph::from_edges(3, &[(0, 1), (1, 2)]).unwrap()
    }

    #[test]
    fn k2_is_the_only_two_node_graph() {
        let g = build_network(1, 2, 1.0).unwrap();
        assert_eq!(g.edges(), vec![(0, 1)]);
        let l = laplacian(&g);
        assert_eq!(l, Matrix::from_row_slice(2, 2, &[1.0, -1.0, -1.0, 1.0]));
    }

    #[test]
    fn path_laplacian() {
        let l = laplacian(&path3());
        let expected =
            Matrix::from_row_slice(3, 3, &[1.0, -1.0, 0.0, -1.0, 2.0, -1.0, 0.0, -1.0, 1.0]);
        assert_eq!(l, expected);
    }

    #[test]
    fn build_network_is_deterministic_and_connected() {
        let a = build_network(7, 25, 0.15).unwrap();
        let b = build_network(7, 25, 0.15).unwrap();
        assert_eq!(a, b);
        assert!(a.is_connected());
        let l = laplacian(&a);
        for i in 0..25 {
            assert!(l.row(i).sum().abs() < 1e-12);
        }
        let ev = linalg::sym_eigenvalues(&l);
        assert!(ev[0].abs() < 1e-10, "smallest eigenvalue {}", ev[0]);
        assert!(ev[1] > 1e-8, "algebraic connectivity {}", ev[1]);
    }

    #[test]
    fn build_network_rejects_bad_arguments() {
        assert!(build_network(1, 1, 0.5).is_err());
        assert!(build_network(1, 5, 0.0).is_err());
        assert!(matches!(
            build_network(1, 40, 1e-6),
            Err(Error::Disconnected { attempts: 1000, .. })
        ));
    }

    #[test]
    fn from_edges_validates() {
        assert!(NetworkGraph::from_edges(3, &[(0, 0)]).is_err());
        assert!(NetworkGraph::from_edges(3, &[(0, 1)]).is_err());
        assert!(NetworkGraph::from_edges(2, &[(0, 2)]).is_err());
    }

    #[test]
    fn dot_export() {
        assert_eq!(path3().to_dot(), "graph g {\n  0 -- 1;\n  1 -- 2;\n}\n");
    }

    #[test]
    fn noise_free_truth_is_matrix_power() {
        let (model, _) = benchmark_model(3).unwrap();
        let model = model
            .with_process_noise(Matrix::zeros(8, 8))
            .unwrap();
        let x0 = Vector::from_fn(8, |i, _| (i + 1) as f64);
        let mut rng = rng::stream(0, Some(0), StreamTag::ProcessNoise);
        let xs = simulate_truth(&model, &x0, 5, &mut rng);
        let mut expected = x0.clone();
        for x in &xs {
            assert!((x - &expected).norm() < 1e-12);
            expected = model.a() * expected;
        }
    }

    #[test]
    fn truth_is_reproducible() {
        let (model, _) = benchmark_model(3).unwrap();
        let x0 = Vector::zeros(8);
        let a = simulate_truth(&model, &x0, 50, &mut rng::stream(5, Some(1), StreamTag::ProcessNoise));
        let b = simulate_truth(&model, &x0, 50, &mut rng::stream(5, Some(1), StreamTag::ProcessNoise));
        assert_eq!(a, b);
    }

    #[test]
    fn benchmark_model_shape() {
        let (model, graph) = benchmark_model(11).unwrap();
        assert_eq!(model.state_dim(), 8);
        assert_eq!(model.agent_count(), 25);
        assert_eq!(graph.agent_count(), 25);
        assert_eq!(model.q(), &(Matrix::identity(8, 8) * 0.1));
        for obs in model.agents() {
            assert_eq!(obs.obs_dim(), 8);
            let mu = obs.r()[(0, 0)];
            assert!(mu > 0.0 && mu < 1.0);
            assert_eq!(obs.r(), &(Matrix::identity(8, 8) * mu));
        }
    }

    #[test]
    fn benchmark_transition_is_stable_and_invertible() {
        let core = benchmark_transition_core();
        // oracle: closed-form eigenvalues 0.6 ± sqrt(0.005 * 0.25)
        let expected = 0.6 + (0.005f64 * 0.25).sqrt();
        let (model, _) = benchmark_model(1).unwrap();
        let rho = linalg::spectral_radius(model.a());
        assert!((rho - expected).abs() < 1e-12);
        assert!((rho - 0.635).abs() < 1e-3);
        let det = core[(0, 0)] * core[(1, 1)] - core[(0, 1)] * core[(1, 0)];
        assert!((det - 0.35875).abs() < 1e-15);
        assert!((core.determinant() - 0.35875).abs() < 1e-12);
    }

    #[test]
    fn tiny_observation_noise_recovers_hx() {
        let h = benchmark_observation_matrix();
        let obs = ObservationModel::new(h.clone(), Matrix::identity(8, 8) * 1e-12).unwrap();
        let x = Vector::from_fn(8, |i, _| i as f64 - 3.0);
        let y = observe(&obs, &x, &mut rng::stream(1, Some(0), StreamTag::ObservationNoise));
        assert!((y - h * x).amax() < 1e-5);
    }

    #[test]
    fn observation_noise_statistics() {
        // H = I, x = e1, R = I: sample mean within a 3-sigma band
        let obs = ObservationModel::new(Matrix::identity(3, 3), Matrix::identity(3, 3)).unwrap();
        let x = Vector::from_column_slice(&[1.0, 0.0, 0.0]);
        let mut rng = rng::stream(2, Some(0), StreamTag::ObservationNoise);
        let n = 10_000;
        let mut mean = Vector::zeros(3);
        for _ in 0..n {
            mean += observe(&obs, &x, &mut rng);
        }
        mean /= n as f64;
        let band = 3.0 / (n as f64).sqrt();
        assert!((mean - x).amax() < band);
    }

    #[test]
    fn zero_observation_matrix_gives_pure_noise() {
        let r = Matrix::from_row_slice(2, 2, &[2.0, 0.5, 0.5, 1.0]);
        let obs = ObservationModel::new(Matrix::zeros(2, 3), r.clone()).unwrap();
        let x = Vector::from_column_slice(&[5.0, -3.0, 1.0]);
        let mut rng = rng::stream(4, Some(0), StreamTag::ObservationNoise);
        let n = 20_000;
        let mut cov = Matrix::zeros(2, 2);
        for _ in 0..n {
            let y = observe(&obs, &x, &mut rng);
            cov += &y * y.transpose();
        }
        cov /= n as f64;
        assert!((cov - r).amax() < 0.1);
    }

    #[test]
    fn increments_have_process_covariance() {
        let model = StateSpaceModel::new(
            Matrix::identity(2, 2),
            Matrix::identity(2, 2),
            vec![ObservationModel::new(Matrix::identity(2, 2), Matrix::identity(2, 2)).unwrap()],
        )
        .unwrap();
        let xs = simulate_truth(
            &model,
            &Vector::zeros(2),
            20_000,
            &mut rng::stream(9, Some(0), StreamTag::ProcessNoise),
        );
        let mut cov = Matrix::zeros(2, 2);
        for w in xs.windows(2) {
            let d = &w[1] - &w[0];
            cov += &d * d.transpose();
        }
        cov /= (xs.len() - 1) as f64;
        assert!((cov - Matrix::identity(2, 2)).amax() < 0.05);
    }

    #[test]
    fn invalid_models_are_rejected() {
        let obs = ObservationModel::new(Matrix::identity(2, 2), Matrix::identity(2, 2)).unwrap();
        assert!(StateSpaceModel::new(Matrix::zeros(2, 3), Matrix::zeros(2, 2), vec![]).is_err());
        assert!(matches!(
            StateSpaceModel::new(Matrix::identity(2, 2), -Matrix::identity(2, 2), vec![obs.clone()]),
            Err(Error::NotPsd(_))
        ));
        assert!(StateSpaceModel::new(
            Matrix::identity(3, 3),
            Matrix::identity(3, 3),
            vec![obs]
        )
        .is_err());
        assert!(ObservationModel::new(Matrix::identity(2, 2), Matrix::zeros(2, 2)).is_err());
    }
}
