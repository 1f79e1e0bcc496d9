//! Byzantine perturbations and the attacker's two design levers: the
//! selection patterns shared at the attack start and the perturbation
//! covariance.

use rand::seq::SliceRandom;

use crate::error::{Error, Result};
use crate::linalg::{self, Matrix, Vector};
use crate::model::NetworkGraph;
use crate::rng::{self, SimRng};
use crate::selection::SelectionSchedule;

/// The `count` highest-degree agents, ties broken by lower index; returned sorted.
pub fn byzantine_set(graph: &NetworkGraph, count: usize) -> Result<Vec<usize>> {
    let agents = graph.agent_count();
    if count == 0 || count > agents {
        return Err(Error::InvalidArgument(format!(
            "Byzantine count {count} outside 1..={agents}"
        )));
    }
    let mut order: Vec<usize> = (0..agents).collect();
    order.sort_by(|&a, &b| graph.degree(b).cmp(&graph.degree(a)).then(a.cmp(&b)));
    let mut chosen = order[..count].to_vec();
    chosen.sort_unstable();
    Ok(chosen)
}

pub const SIGMA_PSD_TOLERANCE: f64 = 1e-8;

/// A coordinated attack: who perturbs, how, from when.
#[derive(Debug, Clone)]
pub struct AttackPlan {
    byzantine: Vec<usize>,
    sigma: Matrix,
    eta: f64,
    start: usize,
    block: usize,
    /// Factor `F` of the Byzantine sub-block with `F Fᵀ = Σ_BB`.
    factor: Matrix,
    designed: Vec<(usize, SelectionSchedule)>,
}

impl AttackPlan {
    /// Validates `Σ` (symmetric, PSD, trace within budget, zero outside the
    /// Byzantine blocks) and prepares its factor.
    pub fn new(byzantine: Vec<usize>, sigma: Matrix, eta: f64, start: usize, block: usize) -> Result<Self> {
        let mut byzantine = byzantine;
        byzantine.sort_unstable();
        byzantine.dedup();
        let n = sigma.nrows();
        if sigma.ncols() != n || block == 0 || n % block != 0 {
            return Err(Error::Dimension(format!("Σ of shape {:?} with blocks of {block}", sigma.shape())));
        }
        let agents = n / block;
        if byzantine.iter().any(|&b| b >= agents) {
            return Err(Error::InvalidArgument("Byzantine agent index out of range".into()));
        }
        if !(eta > 0.0) {
            return Err(Error::InvalidArgument(format!("stealth budget η = {eta} must be > 0")));
        }
        if start == 0 {
            return Err(Error::InvalidArgument("attack start must be >= 1".into()));
        }
        if linalg::asymmetry(&sigma) > 1e-10 * (1.0 + sigma.amax()) {
            return Err(Error::InvalidArgument("Σ is not symmetric".into()));
        }
        let tr = linalg::trace(&sigma);
        if tr > eta + 1e-9 {
            return Err(Error::InvalidArgument(format!("tr(Σ) = {tr} exceeds η = {eta}")));
        }
        let is_byz = mask(agents, &byzantine);
        for i in 0..agents {
            for j in 0..agents {
                if (!is_byz[i] || !is_byz[j]) && sigma.view((i * block, j * block), (block, block)).amax() != 0.0 {
                    return Err(Error::InvalidArgument(format!(
                        "Σ block ({i}, {j}) must be zero: agent outside the Byzantine set"
                    )));
                }
            }
        }
        let sub = byzantine_block(&sigma, &byzantine, block);
        let (factor, min_eig) = if sub.nrows() == 0 {
            (Matrix::zeros(0, 0), 0.0)
        } else {
            linalg::psd_factor(&sub)
        };
        if min_eig < -SIGMA_PSD_TOLERANCE {
            return Err(Error::NotPsd(min_eig));
        }
        Ok(Self {
            byzantine,
            sigma,
            eta,
            start,
            block,
            factor,
            designed: Vec::new(),
        })
    }

    pub fn byzantine(&self) -> &[usize] {
        &self.byzantine
    }

    pub fn sigma(&self) -> &Matrix {
        &self.sigma
    }

    pub fn eta(&self) -> f64 {
        self.eta
    }

    pub fn start(&self) -> usize {
        self.start
    }

    pub fn byzantine_factor(&self) -> &Matrix {
        &self.factor
    }

    /// Membership indicator `z`.
    pub fn membership(&self) -> Vec<bool> {
        mask(self.sigma.nrows() / self.block, &self.byzantine)
    }

    /// Selection schedules the Byzantine agents switch to at the attack start.
    pub fn designed_patterns(&self) -> &[(usize, SelectionSchedule)] {
        &self.designed
    }

    pub fn with_designed_patterns(mut self, patterns: Vec<(usize, SelectionSchedule)>) -> Result<Self> {
        for (agent, s) in &patterns {
            if !self.byzantine.contains(agent) {
                return Err(Error::InvalidArgument(format!("agent {agent} is not Byzantine")));
            }
            if s.state_dim() != self.block {
                return Err(Error::Dimension("designed pattern has the wrong length".into()));
            }
        }
        self.designed = patterns;
        Ok(self)
    }

    pub(crate) fn check_dimensions(&self, agents: usize, m: usize) -> Result<()> {
        if self.block != m || self.sigma.nrows() != agents * m {
            return Err(Error::Dimension(format!(
                "attack covariance is {}×{} with blocks of {}, network needs {}×{} with blocks of {m}",
                self.sigma.nrows(),
                self.sigma.ncols(),
                self.block,
                agents * m,
                agents * m
            )));
        }
        Ok(())
    }

    /// `δ ~ N(0, Σ)`; entries of regular agents are exactly zero.
    pub fn draw_perturbation(&self, rng: &mut SimRng) -> Vector {
        let mut out = Vector::zeros(self.sigma.nrows());
        if self.factor.nrows() == 0 {
            return out;
        }
        let sub = rng::gaussian_with_factor(rng, &self.factor);
        let m = self.block;
        for (c, &b) in self.byzantine.iter().enumerate() {
            out.rows_mut(b * m, m).copy_from(&sub.rows(c * m, m));
        }
        out
    }
}

/// Free-standing form of [`AttackPlan::draw_perturbation`].
pub fn draw_perturbation(plan: &AttackPlan, rng: &mut SimRng) -> Vector {
    plan.draw_perturbation(rng)
}

fn mask(agents: usize, members: &[usize]) -> Vec<bool> {
    let mut z = vec![false; agents];
    for &b in members {
        z[b] = true;
    }
    z
}

fn byzantine_block(sigma: &Matrix, byzantine: &[usize], m: usize) -> Matrix {
    let n = byzantine.len() * m;
    Matrix::from_fn(n, n, |r, c| {
        let (bi, bj) = (byzantine[r / m], byzantine[c / m]);
        sigma[(bi * m + r % m, bj * m + c % m)]
    })
}

fn embed_byzantine_block(sub: &Matrix, byzantine: &[usize], agents: usize, m: usize) -> Matrix {
    let mut out = Matrix::zeros(agents * m, agents * m);
    for (a, &bi) in byzantine.iter().enumerate() {
        for (b, &bj) in byzantine.iter().enumerate() {
            out.view_mut((bi * m, bj * m), (m, m))
                .copy_from(&sub.view((a * m, b * m), (m, m)));
        }
    }
    out
}

/// `W Wᵀ` on the Byzantine blocks with Gaussian `W`, scaled to `tr = η`.
pub fn random_covariance(agents: usize, byzantine: &[usize], eta: f64, m: usize, rng: &mut SimRng) -> Result<Matrix> {
    if !(eta > 0.0) {
        return Err(Error::InvalidArgument(format!("η = {eta} must be > 0")));
    }
    if byzantine.iter().any(|&b| b >= agents) {
        return Err(Error::InvalidArgument("Byzantine agent index out of range".into()));
    }
    let n = byzantine.len() * m;
    let w = rng::standard_normal_matrix(rng, n, n);
    let mut sub = &w * w.transpose();
    let tr = linalg::trace(&sub);
    if tr <= 0.0 {
        return Err(Error::Singular("random covariance draw"));
    }
    sub *= eta / tr;
    linalg::symmetrize(&mut sub);
    Ok(embed_byzantine_block(&sub, byzantine, agents, m))
}

/// `U_ij = Σ_{q∈N_i∩N_j} C_qᵀ C_q`.
pub fn u_matrix(i: usize, j: usize, consensus: &[Matrix], graph: &NetworkGraph) -> Matrix {
    let m = consensus[0].nrows();
    let mut out = Matrix::zeros(m, m);
    for &q in graph.neighbors(i) {
        if graph.is_edge(q, j) {
            out += consensus[q].transpose() * &consensus[q];
        }
    }
    out
}

/// Coupling blocks `U_ij` over the Byzantine set.
#[derive(Debug, Clone)]
pub struct AttackObjectiveContext {
    byzantine: Vec<usize>,
    m: usize,
    /// `u[a][b] = U_{B[a], B[b]}`
    u: Vec<Vec<Matrix>>,
}

impl AttackObjectiveContext {
    pub fn new(consensus: &[Matrix], graph: &NetworkGraph, byzantine: &[usize]) -> Self {
        let u = byzantine
            .iter()
            .map(|&i| byzantine.iter().map(|&j| u_matrix(i, j, consensus, graph)).collect())
            .collect();
        Self {
            byzantine: byzantine.to_vec(),
            m: consensus[0].nrows(),
            u,
        }
    }

    pub fn byzantine(&self) -> &[usize] {
        &self.byzantine
    }

    pub fn u(&self, a: usize, b: usize) -> &Matrix {
        &self.u[a][b]
    }

    /// Elementwise products `W_ab = U_ab ⊙ Σ_ab`, so that the objective is
    /// `Σ_ab s_aᵀ W_ab s_b`.
    fn weights(&self, sigma: &Matrix) -> Vec<Vec<Matrix>> {
        let m = self.m;
        self.byzantine
            .iter()
            .enumerate()
            .map(|(a, &i)| {
                self.byzantine
                    .iter()
                    .enumerate()
                    .map(|(b, &j)| {
                        let s = sigma.view((i * m, j * m), (m, m));
                        self.u[a][b].component_mul(&s)
                    })
                    .collect()
            })
            .collect()
    }
}

/// `Σ_{i,j∈B} tr(U_ij S_j Σ_ji S_i)`; `patterns[a]` belongs to `ctx.byzantine()[a]`.
pub fn attack_objective(ctx: &AttackObjectiveContext, patterns: &[Vec<bool>], sigma: &Matrix) -> f64 {
    let m = ctx.m;
    let mut total = 0.0;
    for (a, &i) in ctx.byzantine.iter().enumerate() {
        for (b, &j) in ctx.byzantine.iter().enumerate() {
            let u = &ctx.u[a][b];
            for r in (0..m).filter(|&r| patterns[a][r]) {
                for c in (0..m).filter(|&c| patterns[b][c]) {
                    // tr(U S_j Σ_ji S_i) = Σ_{r∈S_i, c∈S_j} U[r,c] Σ_ji[c,r]
                    total += u[(r, c)] * sigma[(j * m + c, i * m + r)];
                }
            }
        }
    }
    total
}

/// Result of a single block update.
#[derive(Debug, Clone, PartialEq)]
pub struct SubproblemSolution {
    pub pattern: Vec<bool>,
    /// Value of the agent-dependent part `sᵀ W_ii s + 2 Σ_{j≠i} sᵀ W_ij s_j`.
    pub value: f64,
}

fn indices_of(bits: &[bool]) -> Vec<usize> {
    bits.iter().enumerate().filter(|(_, &b)| b).map(|(i, _)| i).collect()
}

fn better(candidate: (f64, &[usize]), best: (f64, &[usize])) -> bool {
    let tol = 1e-12 * best.0.abs().max(1.0);
    if candidate.0 > best.0 + tol {
        return true;
    }
    if candidate.0 < best.0 - tol {
        return false;
    }
    // equal values: more shared entries first, then the lexicographically smaller set
    match candidate.1.len().cmp(&best.1.len()) {
        std::cmp::Ordering::Greater => true,
        std::cmp::Ordering::Less => false,
        std::cmp::Ordering::Equal => candidate.1 < best.1,
    }
}

fn subproblem_terms(weights: &[Vec<Matrix>], a: usize, current: &[Vec<bool>]) -> (Matrix, Vector) {
    let quad = weights[a][a].clone();
    let m = quad.nrows();
    let mut lin = Vector::zeros(m);
    for (b, pat) in current.iter().enumerate() {
        if b == a {
            continue;
        }
        let s = Vector::from_iterator(m, pat.iter().map(|&x| if x { 1.0 } else { 0.0 }));
        lin += (&weights[a][b] * s) * 2.0;
    }
    (quad, lin)
}

fn evaluate(quad: &Matrix, lin: &Vector, idx: &[usize]) -> f64 {
    let mut v = 0.0;
    for &r in idx {
        v += lin[r];
        for &c in idx {
            v += quad[(r, c)];
        }
    }
    v
}

/// Largest state dimension solved by exhaustive enumeration.
pub const EXHAUSTIVE_LIMIT: usize = 20;

/// Best pattern for Byzantine agent `ctx.byzantine()[a]` with at most `l`
/// shared entries, the other patterns held fixed.
///
/// Exhaustive over all nonempty patterns when `m ≤ 20`; ties prefer more
/// shared entries, then the lexicographically smallest index set.
pub fn bcd_subproblem(
    ctx: &AttackObjectiveContext,
    a: usize,
    current: &[Vec<bool>],
    sigma: &Matrix,
    l: usize,
) -> Result<SubproblemSolution> {
    let weights = ctx.weights(sigma);
    solve_subproblem(&weights, a, current, l)
}

fn solve_subproblem(weights: &[Vec<Matrix>], a: usize, current: &[Vec<bool>], l: usize) -> Result<SubproblemSolution> {
    let m = weights[a][a].nrows();
    if l == 0 || l > m {
        return Err(Error::InvalidArgument(format!("l = {l} outside 1..={m}")));
    }
    let (quad, lin) = subproblem_terms(weights, a, current);
    if m > EXHAUSTIVE_LIMIT {
        return Ok(relaxed_subproblem(&quad, &lin, l));
    }
    let mut best_idx: Vec<usize> = Vec::new();
    let mut best_val = f64::NEG_INFINITY;
    for mask in 1u32..(1u32 << m) {
        if mask.count_ones() as usize > l {
            continue;
        }
        let idx: Vec<usize> = (0..m).filter(|&r| mask & (1 << r) != 0).collect();
        let val = evaluate(&quad, &lin, &idx);
        if best_val == f64::NEG_INFINITY || better((val, &idx), (best_val, &best_idx)) {
            best_val = val;
            best_idx = idx;
        }
    }
    let mut pattern = vec![false; m];
    for &r in &best_idx {
        pattern[r] = true;
    }
    Ok(SubproblemSolution {
        pattern,
        value: best_val,
    })
}

/// Projected gradient ascent on the box/trace relaxation, rounded to the
/// `l` largest entries.
fn relaxed_subproblem(quad: &Matrix, lin: &Vector, l: usize) -> SubproblemSolution {
    let m = quad.nrows();
    let mut s = Vector::from_element(m, l as f64 / m as f64);
    let scale = quad.norm() * 2.0 + lin.norm() + 1e-12;
    let step = 1.0 / scale;
    for _ in 0..500 {
        let grad = (quad + quad.transpose()) * &s + lin;
        s += grad * step;
        project_capped_simplex(&mut s, l as f64);
    }
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&x, &y| s[y].total_cmp(&s[x]).then(x.cmp(&y)));
    let mut idx: Vec<usize> = order[..l].to_vec();
    idx.sort_unstable();
    let mut pattern = vec![false; m];
    for &r in &idx {
        pattern[r] = true;
    }
    SubproblemSolution {
        value: evaluate(quad, lin, &idx),
        pattern,
    }
}

/// Euclidean projection onto `{0 ≤ s ≤ 1, Σ s ≤ cap}`.
fn project_capped_simplex(s: &mut Vector, cap: f64) {
    let clip = |v: &Vector, shift: f64| v.map(|x| (x - shift).clamp(0.0, 1.0));
    let plain = clip(s, 0.0);
    if plain.sum() <= cap {
        *s = plain;
        return;
    }
    let (mut lo, mut hi) = (0.0, s.max());
    for _ in 0..100 {
        let mid = 0.5 * (lo + hi);
        if clip(s, mid).sum() > cap {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    *s = clip(s, hi);
}

/// Result of the block-coordinate design.
#[derive(Debug, Clone)]
pub struct BcdOutcome {
    /// One pattern per Byzantine agent, in `ctx.byzantine()` order.
    pub patterns: Vec<Vec<bool>>,
    /// Objective before the first sweep and after each sweep.
    pub objective: Vec<f64>,
    /// Byzantine agents whose best pattern shares fewer than `l` entries.
    pub withheld: Vec<usize>,
}

/// Cyclic block-coordinate ascent over the Byzantine agents (ascending index),
/// each block solved exactly against the latest patterns of the others.
pub fn bcd_design(
    ctx: &AttackObjectiveContext,
    sigma: &Matrix,
    l: usize,
    iterations: usize,
    initial: &[Vec<bool>],
) -> Result<BcdOutcome> {
    if iterations == 0 {
        return Err(Error::InvalidArgument("BCD needs at least one iteration".into()));
    }
    if initial.len() != ctx.byzantine.len() || initial.iter().any(|p| p.len() != ctx.m) {
        return Err(Error::Dimension("one initial pattern of length m per Byzantine agent".into()));
    }
    let weights = ctx.weights(sigma);
    let mut patterns = initial.to_vec();
    let mut objective = vec![attack_objective(ctx, &patterns, sigma)];
    for _ in 0..iterations {
        for a in 0..patterns.len() {
            patterns[a] = solve_subproblem(&weights, a, &patterns, l)?.pattern;
        }
        objective.push(attack_objective(ctx, &patterns, sigma));
    }
    let withheld = patterns
        .iter()
        .zip(&ctx.byzantine)
        .filter(|(p, _)| p.iter().filter(|&&b| b).count() < l)
        .map(|(_, &i)| i)
        .collect::<Vec<_>>();
    if !withheld.is_empty() {
        tracing::info!(?withheld, "designed patterns share fewer than l entries");
    }
    Ok(BcdOutcome {
        patterns,
        objective,
        withheld,
    })
}

/// Turns designed patterns into schedules that keep shifting after `k₀`.
pub fn designed_schedules(
    byzantine: &[usize],
    patterns: &[Vec<bool>],
    template: &[SelectionSchedule],
) -> Result<Vec<(usize, SelectionSchedule)>> {
    byzantine
        .iter()
        .zip(patterns)
        .map(|(&i, bits)| {
            let base = &template[i];
            let s = SelectionSchedule::from_indices(base.state_dim(), indices_of(bits), base.tau())?;
            Ok((i, s))
        })
        .collect()
}

/// Solution of `max tr(Γ Σ Γᵀ)` over `Σ ⪰ 0`, `tr Σ ≤ η`, supported on the Byzantine blocks.
#[derive(Debug, Clone)]
pub struct CovarianceDesign {
    pub sigma: Matrix,
    pub objective: f64,
    pub lambda_max: f64,
    /// Top eigenvalue was repeated; a canonical direction was chosen.
    pub degenerate: bool,
    /// `Γ` vanishes on the Byzantine columns; `Σ = 0`.
    pub zero_injection: bool,
}

/// Rank-one optimum `Σ* = η v vᵀ` with `v` the top eigenvector of `ΓᵀΓ`
/// restricted to Byzantine coordinates.
///
/// For a repeated top eigenvalue `v` is the normalized projection of the
/// first coordinate vector with a nonzero projection onto the eigenspace.
/// The sign makes the largest-magnitude entry positive.
pub fn design_covariance(gamma: &Matrix, eta: f64, byzantine: &[usize], m: usize) -> Result<CovarianceDesign> {
    if !(eta > 0.0) {
        return Err(Error::InvalidArgument(format!("η = {eta} must be > 0")));
    }
    let n = gamma.ncols();
    if gamma.nrows() != n || n % m != 0 {
        return Err(Error::Dimension(format!("Γ must be square with blocks of {m}")));
    }
    let agents = n / m;
    if byzantine.is_empty() || byzantine.iter().any(|&b| b >= agents) {
        return Err(Error::InvalidArgument("Byzantine set empty or out of range".into()));
    }
    let bm = byzantine.len() * m;
    let mut cols = Matrix::zeros(n, bm);
    for (c, &b) in byzantine.iter().enumerate() {
        cols.columns_mut(c * m, m).copy_from(&gamma.columns(b * m, m));
    }
    let gram = linalg::symmetrized(cols.transpose() * &cols);
    let eig = linalg::sym_eigen(&gram);
    let lambda_max = eig.eigenvalues.max();
    if !(lambda_max > 1e-300) || cols.amax() == 0.0 {
        return Ok(CovarianceDesign {
            sigma: Matrix::zeros(n, n),
            objective: 0.0,
            lambda_max: 0.0,
            degenerate: false,
            zero_injection: true,
        });
    }
    let tol = 1e-10 * lambda_max;
    let top: Vec<usize> = (0..bm).filter(|&k| eig.eigenvalues[k] >= lambda_max - tol).collect();
    let degenerate = top.len() > 1;
    let mut v = if degenerate {
        let basis = Matrix::from_fn(bm, top.len(), |r, c| eig.eigenvectors[(r, top[c])]);
        let mut chosen = None;
        for a in 0..bm {
            let proj = &basis * basis.row(a).transpose();
            if proj.norm() > 1e-8 {
                chosen = Some(proj.normalize());
                break;
            }
        }
        chosen.ok_or(Error::Singular("top eigenspace of ΓᵀΓ"))?
    } else {
        eig.eigenvectors.column(top[0]).into_owned()
    };
    let lead = v.iamax();
    if v[lead] < 0.0 {
        v = -v;
    }
    let sub = (&v * v.transpose()) * eta;
    let sigma = embed_byzantine_block(&sub, byzantine, agents, m);
    let objective = linalg::trace(&(&cols * &sub * cols.transpose()));
    Ok(CovarianceDesign {
        sigma,
        objective,
        lambda_max,
        degenerate,
        zero_injection: false,
    })
}

/// Random feasible point for sampling checks: random PSD Byzantine block,
/// trace scaled to `η`, optionally of low rank.
pub fn random_feasible_sigma(agents: usize, byzantine: &[usize], eta: f64, m: usize, rng: &mut SimRng) -> Result<Matrix> {
    let n = byzantine.len() * m;
    let mut ranks: Vec<usize> = (1..=n).collect();
    ranks.shuffle(rng);
    let w = rng::standard_normal_matrix(rng, n, ranks[0]);
    let mut sub = &w * w.transpose();
    sub *= eta / linalg::trace(&sub);
    Ok(embed_byzantine_block(&linalg::symmetrized(sub), byzantine, agents, m))
}
