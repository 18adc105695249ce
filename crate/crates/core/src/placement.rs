//! Placement of one new stubborn agent: choose `k` non-stubborn targets that
//! will follow it so as to maximise an objective of the new equilibrium.
//!
//! The opinion-sum objective `f(S)` is monotone and submodular when the agent
//! holds opinion one, so the greedy choice is within `1 - 1/e` of optimal.
//! The threshold objective `g(S)` has no such guarantee.
//!
//! Greedy gains for the opinion sum use the closed form
//!
//! ```text
//! f(S ∪ {k}) - f(S) = -p (θ_a - θ_k) / (1 - p H⁻¹_kk) · Σ_i H⁻¹_ik
//! ```
//!
//! where `H = G - p Σ_{i∈S} e_i e_iᵀ` is the current modified matrix and
//! `θ` the current equilibrium. Both `H⁻¹_kk` and the column sum come from one
//! column solve against the current factorisation.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::centrality::nonstubborn_scores;
use crate::error::{Error, Result};
use crate::graph::{AgentId, Network};
use crate::linsys::{clamp_unit, Solver, SolverConfig, SystemMatrices};

/// Largest subset count `brute_force_place` will enumerate.
pub const BRUTE_FORCE_LIMIT: u128 = 1_000_000;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Objective {
    /// Mean equilibrium opinion over non-stubborn agents.
    MeanShift,
    /// Number of non-stubborn agents with equilibrium opinion strictly above `tau`.
    ThresholdCount { tau: f64 },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "size")]
pub enum CandidatePool {
    All,
    /// The `m` non-stubborn agents with the highest centrality in the
    /// original network. Fixed for the whole run.
    TopHic(usize),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlacementProblem {
    pub budget: usize,
    pub p_agent: f64,
    pub theta_agent: f64,
    pub objective: Objective,
    pub pool: CandidatePool,
}

impl PlacementProblem {
    /// Opinion-one agent, mean objective, pool of the top 1000 by centrality.
    pub fn new(budget: usize, p_agent: f64) -> Self {
        PlacementProblem {
            budget,
            p_agent,
            theta_agent: 1.0,
            objective: Objective::MeanShift,
            pool: CandidatePool::TopHic(1000),
        }
    }

    pub fn with_objective(mut self, objective: Objective) -> Self {
        self.objective = objective;
        self
    }

    pub fn with_pool(mut self, pool: CandidatePool) -> Self {
        self.pool = pool;
        self
    }

    pub fn with_theta_agent(mut self, theta: f64) -> Self {
        self.theta_agent = theta;
        self
    }

    fn check(&self, sys: &SystemMatrices) -> Result<()> {
        if self.budget > sys.n_free() {
            return Err(Error::config(format!(
                "budget {} exceeds the {} non-stubborn agents",
                self.budget,
                sys.n_free()
            )));
        }
        if !(self.p_agent > 0.0 && self.p_agent <= 1.0) {
            return Err(Error::config(format!("agent probability {} outside (0, 1]", self.p_agent)));
        }
        if !(0.0..=1.0).contains(&self.theta_agent) {
            return Err(Error::config(format!("agent opinion {} outside [0, 1]", self.theta_agent)));
        }
        if let Objective::ThresholdCount { tau } = self.objective {
            if !(tau > 0.0 && tau < 1.0) {
                return Err(Error::config(format!("threshold {tau} outside (0, 1)")));
            }
        }
        if self.pool == CandidatePool::TopHic(0) {
            return Err(Error::config("candidate pool size must be positive"));
        }
        Ok(())
    }

    fn uses_fast_gains(&self) -> bool {
        self.objective == Objective::MeanShift && self.theta_agent == 1.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Greedy,
    OutDegree,
    PostingRate,
    Hic,
    BruteForce,
}

/// Benchmark orderings of the non-stubborn agents.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ordering {
    OutDegree,
    PostingRate,
    Hic,
}

impl From<Ordering> for Method {
    fn from(o: Ordering) -> Method {
        match o {
            Ordering::OutDegree => Method::OutDegree,
            Ordering::PostingRate => Method::PostingRate,
            Ordering::Hic => Method::Hic,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlacementResult {
    pub method: Method,
    /// Targets in selection order.
    pub targets: Vec<AgentId>,
    /// Objective after each prefix of `targets`, length `k + 1`.
    pub objective_values: Vec<f64>,
    /// Non-stubborn equilibrium after all targets, clamped, in row order.
    pub final_theta: Vec<f64>,
    /// Gain that decided each greedy step (empty for other methods).
    pub gains: Vec<f64>,
    pub notes: Vec<String>,
}

pub fn objective_value(theta: &[f64], objective: Objective) -> f64 {
    match objective {
        Objective::MeanShift => {
            if theta.is_empty() {
                0.0
            } else {
                theta.iter().sum::<f64>() / theta.len() as f64
            }
        }
        Objective::ThresholdCount { tau } => theta.iter().filter(|&&x| x > tau).count() as f64,
    }
}

/// Equilibrium with a fixed set of targets, plus the factorisation needed to
/// evaluate adding one more.
pub struct PlacementState<'a> {
    solver: Solver<'a>,
    rows: Vec<usize>,
    p_agent: f64,
    theta_agent: f64,
    config: SolverConfig,
    theta: Vec<f64>,
}

impl<'a> PlacementState<'a> {
    pub fn new(
        sys: &'a SystemMatrices,
        targets: &[AgentId],
        p_agent: f64,
        theta_agent: f64,
        config: SolverConfig,
    ) -> Result<Self> {
        let rows = targets
            .iter()
            .map(|&t| sys.row_of(t).ok_or_else(|| Error::domain(format!("target {t} is not non-stubborn"))))
            .collect::<Result<Vec<_>>>()?;
        Self::from_rows(sys, rows, p_agent, theta_agent, config)
    }

    fn from_rows(
        sys: &'a SystemMatrices,
        rows: Vec<usize>,
        p_agent: f64,
        theta_agent: f64,
        config: SolverConfig,
    ) -> Result<Self> {
        let solver = Solver::with_rows(sys, rows.clone(), p_agent, theta_agent, config)?;
        let theta = solver.equilibrium(sys.stubborn_opinions())?.theta_v1;
        Ok(PlacementState { solver, rows, p_agent, theta_agent, config, theta })
    }

    /// Current (unclamped) equilibrium in row order.
    pub fn theta(&self) -> &[f64] {
        &self.theta
    }

    pub fn opinion_sum(&self) -> f64 {
        self.theta.iter().sum()
    }

    pub fn objective(&self, objective: Objective) -> f64 {
        objective_value(&clamp_unit(&self.theta), objective)
    }

    pub fn targets(&self) -> Vec<AgentId> {
        let v1 = self.solver.system().v1();
        self.rows.iter().map(|&r| v1[r]).collect()
    }

    fn row(&self, candidate: AgentId) -> Result<usize> {
        let row = self
            .solver
            .system()
            .row_of(candidate)
            .ok_or_else(|| Error::domain(format!("candidate {candidate} is not non-stubborn")))?;
        if self.rows.contains(&row) {
            return Err(Error::domain(format!("candidate {candidate} is already targeted")));
        }
        Ok(row)
    }

    /// Exact change in the opinion sum from adding `candidate`, via the
    /// rank-one closed form (no refactorisation).
    pub fn marginal_gain_mean(&self, candidate: AgentId) -> Result<f64> {
        let row = self.row(candidate)?;
        self.fast_gain(row)
    }

    fn fast_gain(&self, row: usize) -> Result<f64> {
        let col = self.solver.inverse_column(row)?;
        let h_kk = col[row];
        let col_sum: f64 = col.iter().sum();
        let p = self.p_agent;
        Ok(-p * (self.theta_agent - self.theta[row]) / (1.0 - p * h_kk) * col_sum)
    }

    /// Equilibrium after adding `candidate`, by a fresh factorisation.
    pub fn resolve_with(&self, candidate: AgentId) -> Result<Vec<f64>> {
        let row = self.row(candidate)?;
        self.resolve_row(row)
    }

    fn resolve_row(&self, row: usize) -> Result<Vec<f64>> {
        let mut rows = self.rows.clone();
        rows.push(row);
        let sys = self.solver.system();
        let solver = Solver::with_rows(sys, rows, self.p_agent, self.theta_agent, self.config)?;
        Ok(solver.equilibrium(sys.stubborn_opinions())?.theta_v1)
    }

    pub fn commit(&self, candidate: AgentId) -> Result<PlacementState<'a>> {
        let row = self.row(candidate)?;
        self.commit_row(row)
    }

    fn commit_row(&self, row: usize) -> Result<PlacementState<'a>> {
        let mut rows = self.rows.clone();
        rows.push(row);
        Self::from_rows(self.solver.system(), rows, self.p_agent, self.theta_agent, self.config)
    }
}

/// Objective value after every prefix of `targets`, by full solves.
pub fn prefix_values(sys: &SystemMatrices, problem: &PlacementProblem, targets: &[AgentId]) -> Result<Vec<f64>> {
    prefix_values_with(sys, problem, targets, SolverConfig::default())
}

fn prefix_values_with(
    sys: &SystemMatrices,
    problem: &PlacementProblem,
    targets: &[AgentId],
    config: SolverConfig,
) -> Result<Vec<f64>> {
    (0..=targets.len())
        .into_par_iter()
        .map(|len| {
            PlacementState::new(sys, &targets[..len], problem.p_agent, problem.theta_agent, config)
                .map(|s| s.objective(problem.objective))
        })
        .collect()
}

/// Rows sorted by descending key, ascending id on ties.
fn order_rows(keys: &[f64]) -> Vec<usize> {
    let mut rows: Vec<usize> = (0..keys.len()).collect();
    rows.sort_by(|&a, &b| keys[b].total_cmp(&keys[a]).then(a.cmp(&b)));
    rows
}

fn candidate_pool(sys: &SystemMatrices, pool: CandidatePool, config: SolverConfig) -> Result<Vec<usize>> {
    let n1 = sys.n_free();
    match pool {
        CandidatePool::TopHic(m) if m < n1 => {
            let solver = Solver::new(sys, None, config)?;
            let scores = nonstubborn_scores(&solver)?;
            let mut top: Vec<usize> = order_rows(&scores).into_iter().take(m).collect();
            top.sort_unstable();
            Ok(top)
        }
        _ => Ok((0..n1).collect()),
    }
}

pub fn greedy_place(network: &Network, sys: &SystemMatrices, problem: &PlacementProblem) -> Result<PlacementResult> {
    greedy_place_with(network, sys, problem, SolverConfig::default())
}

pub fn greedy_place_with(
    _network: &Network,
    sys: &SystemMatrices,
    problem: &PlacementProblem,
    config: SolverConfig,
) -> Result<PlacementResult> {
    problem.check(sys)?;
    let pool = candidate_pool(sys, problem.pool, config)?;
    if pool.len() < problem.budget {
        return Err(Error::config(format!(
            "candidate pool has {} agents, fewer than the budget {}",
            pool.len(),
            problem.budget
        )));
    }
    let fast = problem.uses_fast_gains();
    let mut notes = Vec::new();
    if !fast {
        notes.push("gains evaluated by full re-solve".to_string());
    }

    let mut state = PlacementState::from_rows(sys, Vec::new(), problem.p_agent, problem.theta_agent, config)?;
    let mut values = vec![state.objective(problem.objective)];
    let mut gains = Vec::with_capacity(problem.budget);

    for step in 0..problem.budget {
        let candidates: Vec<usize> = pool.iter().copied().filter(|r| !state.rows.contains(r)).collect();
        let base_mean = objective_value(&state.theta, Objective::MeanShift);
        let base_obj = state.objective(problem.objective);
        // (row, primary gain, mean gain used only as threshold fallback)
        let evals: Vec<(usize, f64, f64)> = candidates
            .par_iter()
            .map(|&row| {
                if fast {
                    state.fast_gain(row).map(|g| (row, g, g))
                } else {
                    let theta = state.resolve_row(row)?;
                    let primary = match problem.objective {
                        Objective::MeanShift => theta.iter().sum::<f64>() - state.opinion_sum(),
                        obj => objective_value(&clamp_unit(&theta), obj) - base_obj,
                    };
                    let mean_gain = objective_value(&theta, Objective::MeanShift) - base_mean;
                    Ok((row, primary, mean_gain))
                }
            })
            .collect::<Result<_>>()?;

        let best_by = |key: fn(&(usize, f64, f64)) -> f64| {
            evals
                .iter()
                .copied()
                .reduce(|best, e| if key(&e) > key(&best) { e } else { best })
                .expect("candidate list is non-empty")
        };
        let mut best = best_by(|e| e.1);
        if matches!(problem.objective, Objective::ThresholdCount { .. }) && best.1 <= 0.0 {
            best = best_by(|e| e.2);
            notes.push(format!(
                "step {}: no candidate raises the threshold count; chose by mean-opinion gain",
                step + 1
            ));
        }
        gains.push(best.1);
        state = state.commit_row(best.0)?;
        values.push(state.objective(problem.objective));
    }

    Ok(PlacementResult {
        method: Method::Greedy,
        targets: state.targets(),
        objective_values: values,
        final_theta: clamp_unit(&state.theta),
        gains,
        notes,
    })
}

pub fn baseline_place(
    network: &Network,
    sys: &SystemMatrices,
    problem: &PlacementProblem,
    ordering: Ordering,
) -> Result<PlacementResult> {
    baseline_place_with(network, sys, problem, ordering, SolverConfig::default())
}

pub fn baseline_place_with(
    network: &Network,
    sys: &SystemMatrices,
    problem: &PlacementProblem,
    ordering: Ordering,
    config: SolverConfig,
) -> Result<PlacementResult> {
    problem.check(sys)?;
    let keys: Vec<f64> = match ordering {
        Ordering::OutDegree => sys.v1().iter().map(|&a| network.out_degree(a) as f64).collect(),
        Ordering::PostingRate => sys.v1().iter().map(|&a| network.posting_rate(a).unwrap_or(0.0)).collect(),
        Ordering::Hic => nonstubborn_scores(&Solver::new(sys, None, config)?)?,
    };
    let targets: Vec<AgentId> = order_rows(&keys)
        .into_iter()
        .take(problem.budget)
        .map(|r| sys.v1()[r])
        .collect();
    let values = prefix_values_with(sys, problem, &targets, config)?;
    let final_state = PlacementState::new(sys, &targets, problem.p_agent, problem.theta_agent, config)?;
    Ok(PlacementResult {
        method: ordering.into(),
        targets,
        objective_values: values,
        final_theta: clamp_unit(final_state.theta()),
        gains: Vec::new(),
        notes: Vec::new(),
    })
}

fn binomial(n: usize, k: usize) -> u128 {
    let k = k.min(n - k);
    (0..k).fold(1u128, |acc, i| acc * (n - i) as u128 / (i + 1) as u128)
}

/// Lexicographic `k`-subsets of `0..n`.
fn combinations(n: usize, k: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    if k > n {
        return out;
    }
    let mut idx: Vec<usize> = (0..k).collect();
    loop {
        out.push(idx.clone());
        let Some(i) = (0..k).rev().find(|&i| idx[i] != i + n - k) else {
            return out;
        };
        idx[i] += 1;
        for j in i + 1..k {
            idx[j] = idx[j - 1] + 1;
        }
    }
}

/// Exact optimum by enumerating every `k`-subset. Ties go to the
/// lexicographically smallest subset.
pub fn brute_force_place(_network: &Network, sys: &SystemMatrices, problem: &PlacementProblem) -> Result<PlacementResult> {
    problem.check(sys)?;
    let n1 = sys.n_free();
    let k = problem.budget;
    let count = binomial(n1, k);
    if count > BRUTE_FORCE_LIMIT {
        return Err(Error::config(format!(
            "brute force would evaluate {count} subsets (limit {BRUTE_FORCE_LIMIT})"
        )));
    }
    let config = SolverConfig::default();
    let subsets = combinations(n1, k);
    let values: Vec<f64> = subsets
        .par_iter()
        .map(|rows| {
            PlacementState::from_rows(sys, rows.clone(), problem.p_agent, problem.theta_agent, config)
                .map(|s| s.objective(problem.objective))
        })
        .collect::<Result<_>>()?;
    let best = (0..subsets.len())
        .reduce(|b, i| if values[i] > values[b] { i } else { b })
        .expect("at least the empty subset");
    let targets: Vec<AgentId> = subsets[best].iter().map(|&r| sys.v1()[r]).collect();
    let objective_values = prefix_values_with(sys, problem, &targets, config)?;
    let state = PlacementState::new(sys, &targets, problem.p_agent, problem.theta_agent, config)?;
    Ok(PlacementResult {
        method: Method::BruteForce,
        targets,
        objective_values,
        final_theta: clamp_unit(state.theta()),
        gains: Vec::new(),
        notes: Vec::new(),
    })
}
