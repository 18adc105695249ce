//! Harmonic influence centrality: the change in the average non-stubborn
//! equilibrium opinion when an agent is made stubborn and its opinion is
//! flipped from zero to one.
//!
//! For a stubborn agent `i` this is `-(1/|V₁|) Σ_j (G⁻¹F)_{ji}`. For a
//! non-stubborn agent `i` it is the limit of attaching ever more stubborn
//! followers-of-nobody to `i`, which reduces to
//! `(Σ_j G⁻¹_{ji} / G⁻¹_{ii} - 1) / (|V₁| - 1)`.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::AgentId;
use crate::linsys::{Solver, SolverConfig, SystemMatrices};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CentralityKind {
    Stubborn,
    Nonstubborn,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AgentScore {
    pub agent: AgentId,
    pub kind: CentralityKind,
    pub score: f64,
}

/// Scores for every agent, each kind ranked separately (descending score,
/// ascending id on ties). The two kinds average over different populations
/// and are not mixed unless asked for.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CentralityReport {
    pub stubborn: Vec<AgentScore>,
    pub nonstubborn: Vec<AgentScore>,
    /// Why non-stubborn scores are missing, if they are.
    pub nonstubborn_omitted: Option<String>,
}

impl CentralityReport {
    pub fn score(&self, agent: AgentId) -> Option<f64> {
        self.stubborn
            .iter()
            .chain(&self.nonstubborn)
            .find(|s| s.agent == agent)
            .map(|s| s.score)
    }

    /// Both kinds in one ranking when `mix` is set, otherwise stubborn
    /// ranking followed by non-stubborn ranking.
    pub fn ranked(&self, mix: bool) -> Vec<AgentScore> {
        let mut all: Vec<AgentScore> = self.stubborn.iter().chain(&self.nonstubborn).copied().collect();
        if mix {
            sort_ranking(&mut all);
        }
        all
    }

    pub fn is_empty(&self) -> bool {
        self.stubborn.is_empty() && self.nonstubborn.is_empty()
    }
}

fn sort_ranking(v: &mut [AgentScore]) {
    v.sort_by(|a, b| b.score.total_cmp(&a.score).then(a.agent.cmp(&b.agent)));
}

/// Scores of all stubborn agents in column order, from one transposed solve.
pub(crate) fn stubborn_scores(solver: &Solver<'_>) -> Result<Vec<f64>> {
    let sys = solver.system();
    let n1 = sys.n_free();
    if n1 == 0 {
        return Ok(vec![0.0; sys.n_fixed()]);
    }
    // y = column sums of G⁻¹; Σ_j (G⁻¹F)_{ji} = Σ_k y_k F_{ki}.
    let y = solver.column_sums_of_inverse()?;
    let mut c = vec![0.0; sys.n_fixed()];
    for (k, yk) in y.iter().enumerate() {
        for (col, v) in sys.f().row(k) {
            c[col] += yk * v;
        }
    }
    Ok(c.into_iter().map(|s| -s / n1 as f64).collect())
}

fn nonstubborn_score(solver: &Solver<'_>, row: usize) -> Result<f64> {
    let n1 = solver.system().n_free();
    let col = solver.inverse_column(row)?;
    let diag = col[row];
    if diag >= 0.0 {
        return Err(Error::Numerical(format!("inverse diagonal {diag} is not negative")));
    }
    let sum: f64 = col.iter().sum();
    Ok((sum / diag - 1.0) / (n1 - 1) as f64)
}

/// Scores of all non-stubborn agents in row order; one column solve each,
/// evaluated on the rayon pool.
pub(crate) fn nonstubborn_scores(solver: &Solver<'_>) -> Result<Vec<f64>> {
    let n1 = solver.system().n_free();
    if n1 < 2 {
        return Err(Error::domain(format!(
            "non-stubborn centrality needs at least two non-stubborn agents, have {n1}"
        )));
    }
    (0..n1).into_par_iter().map(|r| nonstubborn_score(solver, r)).collect()
}

pub fn hic_stubborn(sys: &SystemMatrices, agent: AgentId) -> Result<f64> {
    let col = sys
        .column_of(agent)
        .ok_or_else(|| Error::domain(format!("agent {agent} is not stubborn")))?;
    if sys.n_free() == 0 {
        return Err(Error::domain("network has no non-stubborn agents"));
    }
    let solver = Solver::new(sys, None, SolverConfig::default())?;
    Ok(stubborn_scores(&solver)?[col])
}

pub fn hic_nonstubborn(sys: &SystemMatrices, agent: AgentId) -> Result<f64> {
    let row = sys
        .row_of(agent)
        .ok_or_else(|| Error::domain(format!("agent {agent} is not non-stubborn")))?;
    if sys.n_free() < 2 {
        return Err(Error::domain("non-stubborn centrality needs at least two non-stubborn agents"));
    }
    let solver = Solver::new(sys, None, SolverConfig::default())?;
    nonstubborn_score(&solver, row)
}

pub fn rank_all(sys: &SystemMatrices) -> Result<CentralityReport> {
    rank_all_with(sys, SolverConfig::default())
}

pub fn rank_all_with(sys: &SystemMatrices, config: SolverConfig) -> Result<CentralityReport> {
    let solver = Solver::new(sys, None, config)?;
    let mut report = CentralityReport::default();
    if sys.n_free() == 0 {
        report.nonstubborn_omitted = Some("network has no non-stubborn agents".into());
        // Stubborn scores average over an empty population.
        return Ok(report);
    }
    report.stubborn = stubborn_scores(&solver)?
        .into_iter()
        .zip(sys.v0())
        .map(|(score, &agent)| AgentScore { agent, kind: CentralityKind::Stubborn, score })
        .collect();
    if sys.n_free() < 2 {
        report.nonstubborn_omitted =
            Some("only one non-stubborn agent; the non-stubborn formula averages over |V1|-1 = 0 agents".into());
    } else {
        report.nonstubborn = nonstubborn_scores(&solver)?
            .into_iter()
            .zip(sys.v1())
            .map(|(score, &agent)| AgentScore { agent, kind: CentralityKind::Nonstubborn, score })
            .collect();
    }
    sort_ranking(&mut report.stubborn);
    sort_ranking(&mut report.nonstubborn);
    Ok(report)
}
