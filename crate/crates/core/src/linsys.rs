//! Block system matrices and the equilibrium solve `-G θ = F θ₀`.
//!
//! Non-stubborn agents index the rows of `G` and `F`; stubborn agents index
//! the columns of `F`. For a non-stubborn agent `i`:
//!
//! * `G[i][i] = -Σ_{j ∈ N_i} p_ji` (all in-neighbours, stubborn or not),
//! * `G[i][k] = p_ki` for non-stubborn in-neighbours `k`,
//! * `F[i][s] = p_si` for stubborn in-neighbours `s`.
//!
//! so every row of `[F G]` sums to zero. When the network passes
//! [`validate`](crate::graph::validate), `-G` is a nonsingular M-matrix and
//! `-G⁻¹` is entrywise nonnegative.
//!
//! A placed stubborn agent with probability `p` and opinion `θ_a` followed by
//! the targets `S` is handled without touching the graph: the system becomes
//! `(-G + p Σ_{i∈S} e_i e_iᵀ) θ = F θ₀ + p θ_a Σ_{i∈S} e_i`.

use std::io::Write;

use faer::linalg::solvers::SolveCore;
use faer::sparse::{linalg::solvers::Lu, SparseColMat, Triplet};
use faer::{Conj, Mat};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{validate, AgentId, Network};

/// Compressed sparse rows.
#[derive(Clone, Debug)]
pub(crate) struct Csr {
    n_rows: usize,
    n_cols: usize,
    row_ptr: Vec<usize>,
    cols: Vec<usize>,
    vals: Vec<f64>,
}

impl Csr {
    fn from_rows(n_cols: usize, rows: Vec<Vec<(usize, f64)>>) -> Self {
        let mut row_ptr = Vec::with_capacity(rows.len() + 1);
        let mut cols = Vec::new();
        let mut vals = Vec::new();
        row_ptr.push(0);
        for mut row in rows {
            row.sort_by_key(|&(c, _)| c);
            for (c, v) in row {
                cols.push(c);
                vals.push(v);
            }
            row_ptr.push(cols.len());
        }
        Csr { n_rows: row_ptr.len() - 1, n_cols, row_ptr, cols, vals }
    }

    pub(crate) fn row(&self, i: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let r = self.row_ptr[i]..self.row_ptr[i + 1];
        self.cols[r.clone()].iter().copied().zip(self.vals[r].iter().copied())
    }

    fn entries(&self) -> impl Iterator<Item = (usize, usize, f64)> + '_ {
        (0..self.n_rows).flat_map(move |i| self.row(i).map(move |(c, v)| (i, c, v)))
    }

    fn nnz(&self) -> usize {
        self.vals.len()
    }

    fn to_dense(&self) -> Vec<Vec<f64>> {
        let mut d = vec![vec![0.0; self.n_cols]; self.n_rows];
        for (i, c, v) in self.entries() {
            d[i][c] += v;
        }
        d
    }

    /// `y = A x`
    fn mul(&self, x: &[f64], y: &mut [f64]) {
        for (i, yi) in y.iter_mut().enumerate() {
            *yi = self.row(i).map(|(c, v)| v * x[c]).sum();
        }
    }

    /// `y = Aᵀ x`
    fn mul_t(&self, x: &[f64], y: &mut [f64]) {
        y.iter_mut().for_each(|v| *v = 0.0);
        for i in 0..self.n_rows {
            for (c, v) in self.row(i) {
                y[c] += v * x[i];
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Slot {
    Free(usize),
    Fixed(usize),
}

/// The `G` and `F` blocks of the update matrix together with the index maps
/// between agents and rows/columns.
#[derive(Clone, Debug)]
pub struct SystemMatrices {
    g: Csr,
    f: Csr,
    v1: Vec<AgentId>,
    v0: Vec<AgentId>,
    slots: Vec<Slot>,
    theta_v0: Vec<f64>,
}

/// Which block to dump.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Block {
    G,
    F,
}

impl SystemMatrices {
    /// Number of non-stubborn agents (rows of `G`).
    pub fn n_free(&self) -> usize {
        self.v1.len()
    }

    /// Number of stubborn agents (columns of `F`).
    pub fn n_fixed(&self) -> usize {
        self.v0.len()
    }

    /// Row order: non-stubborn agents ascending by id.
    pub fn v1(&self) -> &[AgentId] {
        &self.v1
    }

    /// Column order of `F`: stubborn agents ascending by id.
    pub fn v0(&self) -> &[AgentId] {
        &self.v0
    }

    pub fn row_of(&self, agent: AgentId) -> Option<usize> {
        match self.slots.get(agent.0)? {
            Slot::Free(r) => Some(*r),
            Slot::Fixed(_) => None,
        }
    }

    pub fn column_of(&self, agent: AgentId) -> Option<usize> {
        match self.slots.get(agent.0)? {
            Slot::Fixed(c) => Some(*c),
            Slot::Free(_) => None,
        }
    }

    /// Stubborn opinions in column order.
    pub fn stubborn_opinions(&self) -> &[f64] {
        &self.theta_v0
    }

    pub fn g_dense(&self) -> Vec<Vec<f64>> {
        self.g.to_dense()
    }

    pub fn f_dense(&self) -> Vec<Vec<f64>> {
        self.f.to_dense()
    }

    pub fn g_nnz(&self) -> usize {
        self.g.nnz()
    }

    pub(crate) fn f(&self) -> &Csr {
        &self.f
    }

    /// Largest eigenvalue of `(G + Gᵀ)/2`, from a dense symmetric
    /// eigensolve. Negative when `-G` is positive definite in the symmetric
    /// sense.
    pub fn hermitian_part_max_eigenvalue(&self) -> Result<f64> {
        let n = self.n_free();
        if n == 0 {
            return Err(Error::domain("network has no non-stubborn agents"));
        }
        let mut h = Mat::<f64>::zeros(n, n);
        for (i, j, v) in self.g.entries() {
            h[(i, j)] += 0.5 * v;
            h[(j, i)] += 0.5 * v;
        }
        let eig = h
            .self_adjoint_eigenvalues(faer::Side::Lower)
            .map_err(|e| Error::Numerical(format!("eigensolve failed: {e:?}")))?;
        Ok(eig[n - 1])
    }

    /// `F θ₀` for the given stubborn opinions.
    pub fn stubborn_drive(&self, theta_v0: &[f64]) -> Vec<f64> {
        let mut b = vec![0.0; self.n_free()];
        self.f.mul(theta_v0, &mut b);
        b
    }

    /// Writes one block in MatrixMarket coordinate format (1-based indices).
    pub fn write_matrix_market<W: Write>(&self, block: Block, mut w: W) -> std::io::Result<()> {
        let m = match block {
            Block::G => &self.g,
            Block::F => &self.f,
        };
        writeln!(w, "%%MatrixMarket matrix coordinate real general")?;
        writeln!(w, "{} {} {}", m.n_rows, m.n_cols, m.nnz())?;
        for (i, c, v) in m.entries() {
            writeln!(w, "{} {} {:e}", i + 1, c + 1, v)?;
        }
        Ok(())
    }
}

/// Builds `G` and `F` from a network that passes validation.
pub fn assemble(network: &Network) -> Result<SystemMatrices> {
    let report = validate(network);
    if let Some(&(agent, sum)) = report.row_sum_violations.first() {
        return Err(Error::Precondition(format!(
            "agent '{}' has in-neighbour probabilities summing to {sum} > 1",
            network.label(agent)
        )));
    }
    if let Some(&agent) = report.unreachable_nonstubborn.first() {
        return Err(Error::Precondition(format!(
            "non-stubborn agent '{}' is not reachable from any stubborn agent ({} unreachable in total)",
            network.label(agent),
            report.unreachable_nonstubborn.len()
        )));
    }
    Ok(assemble_unchecked(network))
}

fn assemble_unchecked(network: &Network) -> SystemMatrices {
    let mut slots = Vec::with_capacity(network.n_agents());
    let (mut v0, mut v1) = (Vec::new(), Vec::new());
    for a in network.agents() {
        if network.is_stubborn(a) {
            slots.push(Slot::Fixed(v0.len()));
            v0.push(a);
        } else {
            slots.push(Slot::Free(v1.len()));
            v1.push(a);
        }
    }
    let mut g_rows = Vec::with_capacity(v1.len());
    let mut f_rows = Vec::with_capacity(v1.len());
    for (row, &a) in v1.iter().enumerate() {
        let mut g_row = Vec::new();
        let mut f_row = Vec::new();
        let mut diag = 0.0;
        for e in network.in_edges(a) {
            diag -= e.prob;
            match slots[e.source.0] {
                Slot::Free(c) => g_row.push((c, e.prob)),
                Slot::Fixed(c) => f_row.push((c, e.prob)),
            }
        }
        g_row.push((row, diag));
        g_rows.push(g_row);
        f_rows.push(f_row);
    }
    let theta_v0 = v0.iter().map(|&a| network.stubborn_opinion(a).unwrap_or(0.0)).collect();
    SystemMatrices {
        g: Csr::from_rows(v1.len(), g_rows),
        f: Csr::from_rows(v0.len(), f_rows),
        v1,
        v0,
        slots,
        theta_v0,
    }
}

/// A placed stubborn agent followed by `targets`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Modification {
    pub targets: Vec<AgentId>,
    pub p_agent: f64,
    pub theta_agent: f64,
}

impl Modification {
    pub fn new(targets: Vec<AgentId>, p_agent: f64, theta_agent: f64) -> Self {
        Modification { targets, p_agent, theta_agent }
    }

    fn check(&self, sys: &SystemMatrices) -> Result<Vec<usize>> {
        if !(self.p_agent > 0.0 && self.p_agent <= 1.0) {
            return Err(Error::domain(format!("agent probability {} outside (0, 1]", self.p_agent)));
        }
        if !(0.0..=1.0).contains(&self.theta_agent) {
            return Err(Error::domain(format!("agent opinion {} outside [0, 1]", self.theta_agent)));
        }
        let mut rows = Vec::with_capacity(self.targets.len());
        for &t in &self.targets {
            let r = sys
                .row_of(t)
                .ok_or_else(|| Error::domain(format!("target {t} is not a non-stubborn agent")))?;
            if rows.contains(&r) {
                return Err(Error::domain(format!("target {t} listed twice")));
            }
            rows.push(r);
        }
        Ok(rows)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SolverConfig {
    /// Systems with fewer rows than this are factorised directly.
    pub direct_threshold: usize,
    /// Relative residual tolerance, `‖Mx-b‖∞ ≤ tol · max(1, ‖b‖∞)`.
    pub tolerance: f64,
    /// Iteration cap of the Krylov solver is `max_iter_factor · n`.
    pub max_iter_factor: usize,
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig { direct_threshold: 50_000, tolerance: 1e-10, max_iter_factor: 10 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SolveMethod {
    Direct,
    Iterative,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SolveStats {
    pub method: SolveMethod,
    /// Refinement steps (direct) or Krylov iterations.
    pub iterations: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EquilibriumSolution {
    /// Non-stubborn opinions in row order. Not clamped.
    pub theta_v1: Vec<f64>,
    pub residual_norm: f64,
    pub stats: SolveStats,
}

impl EquilibriumSolution {
    /// Opinions clamped to `[0, 1]` for reporting. Clamps larger than 1e-8
    /// are logged.
    pub fn clamped(&self) -> Vec<f64> {
        clamp_unit(&self.theta_v1)
    }
}

pub(crate) fn clamp_unit(theta: &[f64]) -> Vec<f64> {
    theta
        .iter()
        .map(|&x| {
            let c = x.clamp(0.0, 1.0);
            if (c - x).abs() > 1e-8 {
                log::warn!("clamping equilibrium value {x} to {c}");
            }
            c
        })
        .collect()
}

enum Backend {
    Empty,
    Direct(Lu<usize, f64>),
    Iterative { inv_diag: Vec<f64> },
}

/// Factorised (or preconditioned) `M = -G + p Σ_{i∈S} e_i e_iᵀ`. Immutable
/// once built; solves take `&self` and may run concurrently.
pub struct Solver<'a> {
    sys: &'a SystemMatrices,
    shift_rows: Vec<usize>,
    p_agent: f64,
    theta_agent: f64,
    backend: Backend,
    config: SolverConfig,
}

impl<'a> Solver<'a> {
    pub fn new(sys: &'a SystemMatrices, modification: Option<&Modification>, config: SolverConfig) -> Result<Self> {
        let (rows, p, th) = match modification {
            Some(m) => (m.check(sys)?, m.p_agent, m.theta_agent),
            None => (Vec::new(), 0.0, 0.0),
        };
        Self::with_rows(sys, rows, p, th, config)
    }

    /// Like [`Solver::new`] with targets given as row indices.
    pub(crate) fn with_rows(
        sys: &'a SystemMatrices,
        shift_rows: Vec<usize>,
        p_agent: f64,
        theta_agent: f64,
        config: SolverConfig,
    ) -> Result<Self> {
        let n = sys.n_free();
        let mut diag_shift = vec![0.0; n];
        for &r in &shift_rows {
            diag_shift[r] += p_agent;
        }
        let backend = if n == 0 {
            Backend::Empty
        } else if n < config.direct_threshold {
            let mut trip = Vec::with_capacity(sys.g.nnz());
            for (i, c, v) in sys.g.entries() {
                let v = if i == c { -v + diag_shift[i] } else { -v };
                trip.push(Triplet::new(i, c, v));
            }
            let m = SparseColMat::<usize, f64>::try_new_from_triplets(n, n, &trip)
                .map_err(|e| Error::Numerical(format!("cannot build sparse matrix: {e:?}")))?;
            let lu = m
                .sp_lu()
                .map_err(|e| Error::Numerical(format!("sparse LU failed: {e:?}")))?;
            Backend::Direct(lu)
        } else {
            let mut inv_diag = vec![0.0; n];
            for i in 0..n {
                let d = sys.g.row(i).find(|&(c, _)| c == i).map(|(_, v)| -v).unwrap_or(0.0) + diag_shift[i];
                if d <= 0.0 {
                    return Err(Error::Numerical(format!(
                        "row {i} has zero diagonal; agent {} has no influence",
                        sys.v1[i]
                    )));
                }
                inv_diag[i] = 1.0 / d;
            }
            Backend::Iterative { inv_diag }
        };
        Ok(Solver { sys, shift_rows, p_agent, theta_agent, backend, config })
    }

    pub fn system(&self) -> &'a SystemMatrices {
        self.sys
    }

    /// `y = M x`
    fn apply(&self, x: &[f64], y: &mut [f64]) {
        self.sys.g.mul(x, y);
        y.iter_mut().for_each(|v| *v = -*v);
        for &r in &self.shift_rows {
            y[r] += self.p_agent * x[r];
        }
    }

    /// `y = Mᵀ x`
    fn apply_t(&self, x: &[f64], y: &mut [f64]) {
        self.sys.g.mul_t(x, y);
        y.iter_mut().for_each(|v| *v = -*v);
        for &r in &self.shift_rows {
            y[r] += self.p_agent * x[r];
        }
    }

    fn residual(&self, x: &[f64], b: &[f64], transpose: bool) -> Vec<f64> {
        let mut r = vec![0.0; x.len()];
        if transpose {
            self.apply_t(x, &mut r);
        } else {
            self.apply(x, &mut r);
        }
        r.iter_mut().zip(b).for_each(|(ri, bi)| *ri = bi - *ri);
        r
    }

    /// Solves `M x = b` (or `Mᵀ x = b`), checking the residual.
    fn solve_m(&self, b: &[f64], transpose: bool) -> Result<(Vec<f64>, f64, SolveStats)> {
        let n = b.len();
        let bound = self.config.tolerance * inf_norm(b).max(1.0);
        match &self.backend {
            Backend::Empty => Ok((Vec::new(), 0.0, SolveStats { method: SolveMethod::Direct, iterations: 0 })),
            Backend::Direct(lu) => {
                let lu_solve = |rhs: &[f64]| {
                    let mut m = Mat::<f64>::from_fn(n, 1, |i, _| rhs[i]);
                    if transpose {
                        lu.solve_transpose_in_place_with_conj(Conj::No, m.as_mut());
                    } else {
                        lu.solve_in_place_with_conj(Conj::No, m.as_mut());
                    }
                    (0..n).map(|i| m[(i, 0)]).collect::<Vec<f64>>()
                };
                let mut x = lu_solve(b);
                check_finite(&x)?;
                let mut r = self.residual(&x, b, transpose);
                let mut steps = 0;
                while inf_norm(&r) > bound && steps < 3 {
                    let dx = lu_solve(&r);
                    x.iter_mut().zip(&dx).for_each(|(xi, di)| *xi += di);
                    r = self.residual(&x, b, transpose);
                    steps += 1;
                }
                let res = inf_norm(&r);
                if res > bound {
                    return Err(Error::Numerical(format!(
                        "direct solve residual {res:e} exceeds {bound:e} after {steps} refinement steps"
                    )));
                }
                Ok((x, res, SolveStats { method: SolveMethod::Direct, iterations: steps }))
            }
            Backend::Iterative { inv_diag } => {
                let max_iter = (self.config.max_iter_factor * n).max(20);
                let (x, iters) = bicgstab(
                    |v, out| if transpose { self.apply_t(v, out) } else { self.apply(v, out) },
                    inv_diag,
                    b,
                    bound,
                    max_iter,
                )?;
                let res = inf_norm(&self.residual(&x, b, transpose));
                if res > bound {
                    return Err(Error::Numerical(format!(
                        "iterative solve stalled: residual {res:e} > {bound:e} after {iters} iterations"
                    )));
                }
                Ok((x, res, SolveStats { method: SolveMethod::Iterative, iterations: iters }))
            }
        }
    }

    /// Equilibrium opinions of the non-stubborn agents.
    pub fn equilibrium(&self, theta_v0: &[f64]) -> Result<EquilibriumSolution> {
        if theta_v0.len() != self.sys.n_fixed() {
            return Err(Error::domain(format!(
                "expected {} stubborn opinions, got {}",
                self.sys.n_fixed(),
                theta_v0.len()
            )));
        }
        if let Some(x) = theta_v0.iter().find(|x| !(0.0..=1.0).contains(*x)) {
            return Err(Error::domain(format!("stubborn opinion {x} outside [0, 1]")));
        }
        let mut rhs = self.sys.stubborn_drive(theta_v0);
        for &r in &self.shift_rows {
            rhs[r] += self.p_agent * self.theta_agent;
        }
        let (theta_v1, residual_norm, stats) = self.solve_m(&rhs, false)?;
        Ok(EquilibriumSolution { theta_v1, residual_norm, stats })
    }

    /// Column `row` of `H⁻¹` where `H = G - p Σ e_i e_iᵀ`. Entries are ≤ 0.
    pub fn inverse_column(&self, row: usize) -> Result<Vec<f64>> {
        let n = self.sys.n_free();
        if row >= n {
            return Err(Error::domain(format!("row {row} out of range (n = {n})")));
        }
        let mut e = vec![0.0; n];
        e[row] = -1.0;
        Ok(self.solve_m(&e, false)?.0)
    }

    /// `x` with `H x = 1`, i.e. row sums of `H⁻¹`.
    pub fn row_sums_of_inverse(&self) -> Result<Vec<f64>> {
        let b = vec![-1.0; self.sys.n_free()];
        Ok(self.solve_m(&b, false)?.0)
    }

    /// `y` with `Hᵀ y = 1`, i.e. column sums of `H⁻¹`.
    pub fn column_sums_of_inverse(&self) -> Result<Vec<f64>> {
        let b = vec![-1.0; self.sys.n_free()];
        Ok(self.solve_m(&b, true)?.0)
    }
}

fn inf_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

fn check_finite(x: &[f64]) -> Result<()> {
    if x.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::Numerical("system is singular: solution has non-finite entries".into()))
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Jacobi-preconditioned BiCGSTAB. Stops when the true-residual estimate
/// drops below `bound` (∞-norm).
fn bicgstab(
    apply: impl Fn(&[f64], &mut [f64]),
    inv_diag: &[f64],
    b: &[f64],
    bound: f64,
    max_iter: usize,
) -> Result<(Vec<f64>, usize)> {
    let n = b.len();
    let mut x = vec![0.0; n];
    let mut r = b.to_vec();
    if inf_norm(&r) <= bound {
        return Ok((x, 0));
    }
    let r_hat = r.clone();
    let (mut rho, mut alpha, mut omega) = (1.0, 1.0, 1.0);
    let mut v = vec![0.0; n];
    let mut p = vec![0.0; n];
    let mut y = vec![0.0; n];
    let mut s = vec![0.0; n];
    let mut z = vec![0.0; n];
    let mut t = vec![0.0; n];
    for it in 1..=max_iter {
        let rho_new = dot(&r_hat, &r);
        if rho_new == 0.0 {
            return Err(Error::Numerical("BiCGSTAB breakdown (rho = 0)".into()));
        }
        let beta = (rho_new / rho) * (alpha / omega);
        rho = rho_new;
        for i in 0..n {
            p[i] = r[i] + beta * (p[i] - omega * v[i]);
            y[i] = inv_diag[i] * p[i];
        }
        apply(&y, &mut v);
        alpha = rho / dot(&r_hat, &v);
        for i in 0..n {
            s[i] = r[i] - alpha * v[i];
        }
        if inf_norm(&s) <= bound {
            for i in 0..n {
                x[i] += alpha * y[i];
            }
            return Ok((x, it));
        }
        for i in 0..n {
            z[i] = inv_diag[i] * s[i];
        }
        apply(&z, &mut t);
        let tt = dot(&t, &t);
        omega = if tt > 0.0 { dot(&t, &s) / tt } else { 0.0 };
        for i in 0..n {
            x[i] += alpha * y[i] + omega * z[i];
            r[i] = s[i] - omega * t[i];
        }
        if inf_norm(&r) <= bound {
            return Ok((x, it));
        }
        if omega == 0.0 {
            return Err(Error::Numerical("BiCGSTAB breakdown (omega = 0)".into()));
        }
    }
    Ok((x, max_iter))
}

/// Equilibrium of the (optionally modified) system with default settings.
pub fn solve_equilibrium(
    sys: &SystemMatrices,
    theta_v0: &[f64],
    modification: Option<&Modification>,
) -> Result<EquilibriumSolution> {
    Solver::new(sys, modification, SolverConfig::default())?.equilibrium(theta_v0)
}

/// Row sums of the inverse of the (optionally modified) `G`; all ≤ 0.
pub fn row_sums_of_inverse(sys: &SystemMatrices, modification: Option<&Modification>) -> Result<Vec<f64>> {
    Solver::new(sys, modification, SolverConfig::default())?.row_sums_of_inverse()
}

/// Column sums of the inverse of the (optionally modified) `G`; all ≤ 0.
pub fn column_sums_of_inverse(sys: &SystemMatrices, modification: Option<&Modification>) -> Result<Vec<f64>> {
    Solver::new(sys, modification, SolverConfig::default())?.column_sums_of_inverse()
}

/// Column of `G⁻¹` belonging to non-stubborn agent `agent`.
pub fn inverse_column(sys: &SystemMatrices, agent: AgentId) -> Result<Vec<f64>> {
    let row = sys
        .row_of(agent)
        .ok_or_else(|| Error::domain(format!("agent {agent} is not non-stubborn")))?;
    Solver::new(sys, None, SolverConfig::default())?.inverse_column(row)
}
