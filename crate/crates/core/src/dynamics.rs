//! Stochastic simulation of the opinion process with decaying stubbornness.
//!
//! Each non-stubborn agent independently picks at most one source per step
//! (source `j` with probability `p_ji`, nobody otherwise) and moves toward
//! that source's verbalised opinion by `ω_i(t)`. Every agent reads the state
//! at `t` and writes the state at `t + 1`.
//!
//! Random numbers come from a counter-based hash of
//! `(seed, replica, step, agent, lane)`, so a replica's path does not depend
//! on how replicas are scheduled across threads.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{validate, AgentId, Network, ROW_SUM_TOLERANCE};
use crate::linsys::{assemble, solve_equilibrium};

/// Slopes above this are reported as non-convergent by [`rate_estimate`].
pub const NONCONVERGENCE_SLOPE: f64 = -0.1;

/// Replicas simulated between two in-order reductions.
const REPLICA_CHUNK: usize = 32;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ScheduleKind {
    /// `ω(t) = w`.
    Constant { w: f64 },
    /// `ω(t) = c / (t + τ + 1)^δ`.
    PowerLaw { c: f64, tau: f64, delta: f64 },
}

impl ScheduleKind {
    #[inline]
    pub fn weight(&self, t: u64) -> f64 {
        match *self {
            ScheduleKind::Constant { w } => w,
            ScheduleKind::PowerLaw { c, tau, delta } => {
                let x = t as f64 + tau + 1.0;
                if delta == 1.0 {
                    c / x
                } else {
                    c / x.powf(delta)
                }
            }
        }
    }

    pub fn check(&self) -> Result<()> {
        match *self {
            ScheduleKind::Constant { w } => {
                if !(0.0..=1.0).contains(&w) {
                    return Err(Error::config(format!("constant weight {w} is outside [0, 1]")));
                }
            }
            ScheduleKind::PowerLaw { c, tau, delta } => {
                if !(delta > 0.0 && delta <= 1.0) {
                    return Err(Error::config(format!("exponent delta = {delta} is outside (0, 1]")));
                }
                if !(tau >= 0.0) || !tau.is_finite() {
                    return Err(Error::config(format!("offset tau = {tau} must be finite and non-negative")));
                }
                if !(c >= 0.0) || c > (tau + 1.0).powf(delta) {
                    return Err(Error::config(format!(
                        "scale c = {c} must lie in [0, (tau+1)^delta] so that every weight is in [0, 1]"
                    )));
                }
            }
        }
        Ok(())
    }

    /// `Σ_t ω(t) = ∞`.
    pub fn sum_diverges(&self) -> bool {
        match *self {
            ScheduleKind::Constant { w } => w > 0.0,
            ScheduleKind::PowerLaw { c, delta, .. } => c > 0.0 && delta <= 1.0,
        }
    }

    /// `Σ_t ω(t)² < ∞`.
    pub fn square_sum_converges(&self) -> bool {
        match *self {
            ScheduleKind::Constant { w } => w == 0.0,
            ScheduleKind::PowerLaw { c, delta, .. } => c == 0.0 || delta > 0.5,
        }
    }
}

/// Stubbornness weights, either shared by all agents or one per agent
/// (indexed by agent id; entries for stubborn agents are ignored).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StubbornnessSchedule {
    Uniform(ScheduleKind),
    PerAgent(Vec<ScheduleKind>),
}

impl StubbornnessSchedule {
    pub fn constant(w: f64) -> Self {
        StubbornnessSchedule::Uniform(ScheduleKind::Constant { w })
    }

    pub fn power_law(c: f64, tau: f64, delta: f64) -> Self {
        StubbornnessSchedule::Uniform(ScheduleKind::PowerLaw { c, tau, delta })
    }

    pub fn kinds(&self) -> &[ScheduleKind] {
        match self {
            StubbornnessSchedule::Uniform(k) => std::slice::from_ref(k),
            StubbornnessSchedule::PerAgent(v) => v,
        }
    }

    pub fn check(&self, n_agents: usize) -> Result<()> {
        if let StubbornnessSchedule::PerAgent(v) = self {
            if v.len() != n_agents {
                return Err(Error::config(format!(
                    "per-agent schedule has {} entries for {n_agents} agents",
                    v.len()
                )));
            }
        }
        self.kinds().iter().try_for_each(ScheduleKind::check)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VerbalizationModel {
    /// The post is the opinion itself.
    Exact,
    /// The post is 1 with probability equal to the opinion, else 0.
    #[default]
    Bernoulli,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OpinionState {
    pub theta: Vec<f64>,
    pub t: u64,
}

/// Random stream of one replica.
#[derive(Clone, Copy, Debug)]
pub struct ReplicaStream {
    key: u64,
}

#[inline]
fn mix(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

const GOLDEN: u64 = 0x9e37_79b9_7f4a_7c15;

impl ReplicaStream {
    pub fn new(seed: u64, replica: u64) -> Self {
        ReplicaStream { key: mix(mix(seed.wrapping_add(GOLDEN)) ^ replica.wrapping_mul(GOLDEN).wrapping_add(1)) }
    }

    #[inline]
    fn step_key(&self, t: u64) -> u64 {
        mix(self.key ^ t.wrapping_mul(0xd1b5_4a32_d192_ed03).wrapping_add(GOLDEN))
    }

    /// Uniform draw in `[0, 1)`.
    #[inline]
    fn uniform(step_key: u64, agent: usize, lane: u64) -> f64 {
        let h = mix(step_key ^ ((agent as u64) << 1 | lane).wrapping_add(1).wrapping_mul(GOLDEN));
        (h >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }
}

/// Network, schedule and verbalisation compiled for fast stepping.
#[derive(Clone, Debug)]
pub struct Dynamics {
    n: usize,
    free: Vec<usize>,
    offsets: Vec<usize>,
    sources: Vec<usize>,
    cumulative: Vec<f64>,
    schedule: StubbornnessSchedule,
    verbalization: VerbalizationModel,
    stubborn_opinions: Vec<(usize, f64)>,
}

impl Dynamics {
    pub fn new(network: &Network, schedule: StubbornnessSchedule, verbalization: VerbalizationModel) -> Result<Self> {
        schedule.check(network.n_agents())?;
        let mut free = Vec::new();
        let mut offsets = vec![0];
        let mut sources = Vec::new();
        let mut cumulative = Vec::new();
        for i in network.nonstubborn_agents() {
            let sum = network.in_probability_sum(i);
            if sum > 1.0 + ROW_SUM_TOLERANCE {
                return Err(Error::Precondition(format!(
                    "incoming probabilities of agent {} sum to {sum} > 1",
                    network.label(i)
                )));
            }
            let mut acc = 0.0;
            for e in network.in_edges(i) {
                acc += e.prob;
                sources.push(e.source.index());
                cumulative.push(acc);
            }
            free.push(i.index());
            offsets.push(sources.len());
        }
        let stubborn_opinions = network
            .stubborn_agents()
            .map(|s| (s.index(), network.stubborn_opinion(s).unwrap_or(0.0)))
            .collect();
        Ok(Dynamics {
            n: network.n_agents(),
            free,
            offsets,
            sources,
            cumulative,
            schedule,
            verbalization,
            stubborn_opinions,
        })
    }

    pub fn n_agents(&self) -> usize {
        self.n
    }

    /// Non-stubborn agents in ascending id order.
    pub fn free_agents(&self) -> impl Iterator<Item = AgentId> + '_ {
        self.free.iter().map(|&i| AgentId(i))
    }

    /// Starting state: stubborn opinions, and `initial` for everyone else.
    pub fn initial_state(&self, initial: &[f64]) -> Result<OpinionState> {
        if initial.len() != self.n {
            return Err(Error::config(format!("initial state has {} entries for {} agents", initial.len(), self.n)));
        }
        if let Some(x) = initial.iter().find(|x| !(0.0..=1.0).contains(*x)) {
            return Err(Error::domain(format!("initial opinion {x} is outside [0, 1]")));
        }
        let mut theta = initial.to_vec();
        for &(i, op) in &self.stubborn_opinions {
            theta[i] = op;
        }
        Ok(OpinionState { theta, t: 0 })
    }

    /// Writes the state at `t + 1` into `next`.
    pub fn step_into(&self, cur: &[f64], t: u64, stream: &ReplicaStream, next: &mut Vec<f64>) {
        next.clear();
        next.extend_from_slice(cur);
        let key = stream.step_key(t);
        let uniform_w = match &self.schedule {
            StubbornnessSchedule::Uniform(k) => Some(k.weight(t)),
            StubbornnessSchedule::PerAgent(_) => None,
        };
        if uniform_w == Some(0.0) {
            return;
        }
        for (k, &i) in self.free.iter().enumerate() {
            let lo = self.offsets[k];
            let hi = self.offsets[k + 1];
            if lo == hi {
                continue;
            }
            let u = ReplicaStream::uniform(key, i, 0);
            let cum = &self.cumulative[lo..hi];
            let pos = cum.partition_point(|&c| c <= u);
            if pos == cum.len() {
                continue;
            }
            let source = cur[self.sources[lo + pos]];
            let y = match self.verbalization {
                VerbalizationModel::Exact => source,
                VerbalizationModel::Bernoulli => {
                    if ReplicaStream::uniform(key, i, 1) < source {
                        1.0
                    } else {
                        0.0
                    }
                }
            };
            let w = match (&self.schedule, uniform_w) {
                (_, Some(w)) => w,
                (StubbornnessSchedule::PerAgent(v), None) => v[i].weight(t),
                (StubbornnessSchedule::Uniform(_), None) => unreachable!(),
            };
            let th = cur[i];
            next[i] = (th + w * (y - th)).clamp(0.0, 1.0);
        }
    }

    pub fn step(&self, state: &OpinionState, stream: &ReplicaStream) -> OpinionState {
        let mut next = Vec::with_capacity(self.n);
        self.step_into(&state.theta, state.t, stream, &mut next);
        OpinionState { theta: next, t: state.t + 1 }
    }
}

/// One step of the process; see [`Dynamics`] for repeated stepping.
pub fn step(
    state: &OpinionState,
    network: &Network,
    schedule: &StubbornnessSchedule,
    verbalization: VerbalizationModel,
    stream: &ReplicaStream,
) -> Result<OpinionState> {
    let dynamics = Dynamics::new(network, schedule.clone(), verbalization)?;
    if state.theta.len() != dynamics.n {
        return Err(Error::config("state length does not match the network"));
    }
    Ok(dynamics.step(state, stream))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Sampling {
    /// `0, s, 2s, …` and the final step.
    Every { interval: u64 },
    /// `0` and `round(10^(k/per_decade))`, plus the final step.
    Logarithmic { per_decade: u32 },
    /// Exactly these steps (sorted and deduplicated, `0` and the final step added).
    Times { times: Vec<u64> },
}

impl Sampling {
    /// Strictly increasing sample steps in `[0, steps]`, always including both ends.
    pub fn times(&self, steps: u64) -> Result<Vec<u64>> {
        let mut out = vec![0];
        match self {
            Sampling::Every { interval } => {
                if *interval == 0 {
                    return Err(Error::config("sampling interval must be positive"));
                }
                let mut t = *interval;
                while t < steps {
                    out.push(t);
                    t = t.saturating_add(*interval);
                }
            }
            Sampling::Logarithmic { per_decade } => {
                if *per_decade == 0 {
                    return Err(Error::config("samples per decade must be positive"));
                }
                for k in 0.. {
                    let t = 10f64.powf(k as f64 / *per_decade as f64).round() as u64;
                    if t >= steps {
                        break;
                    }
                    out.push(t);
                }
            }
            Sampling::Times { times } => out.extend(times.iter().copied().filter(|&t| t < steps)),
        }
        out.push(steps);
        out.sort_unstable();
        out.dedup();
        Ok(out)
    }
}

/// How non-stubborn agents start.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum InitialOpinions {
    /// The network's opinion column, `fallback` where it is empty.
    Network { fallback: f64 },
    Constant { value: f64 },
}

impl Default for InitialOpinions {
    fn default() -> Self {
        InitialOpinions::Network { fallback: 0.5 }
    }
}

impl InitialOpinions {
    fn resolve(&self, network: &Network) -> Vec<f64> {
        network
            .agents()
            .map(|i| match *self {
                InitialOpinions::Network { fallback } => network.opinion(i).unwrap_or(fallback),
                InitialOpinions::Constant { value } => value,
            })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimulationConfig {
    pub steps: u64,
    pub replicas: usize,
    pub seed: u64,
    pub sampling: Sampling,
    pub verbalization: VerbalizationModel,
    pub initial: InitialOpinions,
}

impl SimulationConfig {
    pub fn new(steps: u64, replicas: usize, seed: u64) -> Self {
        SimulationConfig {
            steps,
            replicas,
            seed,
            sampling: Sampling::Logarithmic { per_decade: 10 },
            verbalization: VerbalizationModel::default(),
            initial: InitialOpinions::default(),
        }
    }

    pub fn with_sampling(mut self, sampling: Sampling) -> Self {
        self.sampling = sampling;
        self
    }

    pub fn with_verbalization(mut self, verbalization: VerbalizationModel) -> Self {
        self.verbalization = verbalization;
        self
    }

    pub fn with_initial(mut self, initial: InitialOpinions) -> Self {
        self.initial = initial;
        self
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceSample {
    pub t: u64,
    /// Average over non-stubborn agents of the replica-mean opinion.
    pub mean: f64,
    /// Average over non-stubborn agents of the across-replica variance.
    pub var: f64,
    /// Replica mean of `‖θ_V₁(t) − θ*‖₂`, when the equilibrium is defined.
    pub dist_to_eq: Option<f64>,
    /// Replica mean of `‖Cθ(t)‖₂` over all agents.
    pub centering_norm: f64,
    pub agent_mean: Vec<f64>,
    /// Across-replica sample variance (zero for a single replica).
    pub agent_var: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimulationTrace {
    /// Non-stubborn agents, in the order of the per-agent vectors.
    pub agents: Vec<AgentId>,
    pub replicas: usize,
    pub equilibrium: Option<Vec<f64>>,
    pub samples: Vec<TraceSample>,
}

impl SimulationTrace {
    pub fn last(&self) -> &TraceSample {
        self.samples.last().expect("trace always has samples")
    }

    pub fn at(&self, t: u64) -> Option<&TraceSample> {
        self.samples.iter().find(|s| s.t == t)
    }
}

struct Observation {
    free: Vec<f64>,
    centering: f64,
    dist: Option<f64>,
}

fn centering_norm(theta: &[f64]) -> f64 {
    if theta.is_empty() {
        return 0.0;
    }
    let m = theta.iter().sum::<f64>() / theta.len() as f64;
    theta.iter().map(|x| (x - m) * (x - m)).sum::<f64>().sqrt()
}

fn run_replica(
    dynamics: &Dynamics,
    start: &OpinionState,
    stream: ReplicaStream,
    times: &[u64],
    equilibrium: Option<&[f64]>,
) -> Vec<Observation> {
    let mut cur = start.theta.clone();
    let mut next = Vec::with_capacity(cur.len());
    let mut out = Vec::with_capacity(times.len());
    let mut t = 0;
    for &target in times {
        while t < target {
            dynamics.step_into(&cur, t, &stream, &mut next);
            std::mem::swap(&mut cur, &mut next);
            t += 1;
        }
        let free: Vec<f64> = dynamics.free.iter().map(|&i| cur[i]).collect();
        let dist = equilibrium.map(|eq| free.iter().zip(eq).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt());
        out.push(Observation { free, centering: centering_norm(&cur), dist });
    }
    out
}

/// Equilibrium of a valid network, in ascending non-stubborn id order.
fn equilibrium_of(network: &Network) -> Result<Option<Vec<f64>>> {
    if network.n_stubborn() == 0 || network.n_stubborn() == network.n_agents() || !validate(network).is_valid() {
        return Ok(None);
    }
    let sys = assemble(network)?;
    let sol = solve_equilibrium(&sys, sys.stubborn_opinions(), None)?;
    let theta = sol.clamped();
    Ok(Some(network.nonstubborn_agents().map(|a| theta[sys.row_of(a).expect("free agent")]).collect()))
}

/// Runs `replicas` independent copies for `steps` steps and summarises them
/// at the sample times. Replicas run on the current rayon pool; the result
/// does not depend on the pool size.
pub fn run(network: &Network, schedule: &StubbornnessSchedule, config: &SimulationConfig) -> Result<SimulationTrace> {
    if config.steps == 0 || config.replicas == 0 {
        return Err(Error::config("steps and replicas must both be at least 1"));
    }
    let dynamics = Dynamics::new(network, schedule.clone(), config.verbalization)?;
    let start = dynamics.initial_state(&config.initial.resolve(network))?;
    let times = config.sampling.times(config.steps)?;
    let equilibrium = equilibrium_of(network)?;
    let n1 = dynamics.free.len();

    // Welford accumulators per (sample, agent).
    let mut count = 0.0;
    let mut mean = vec![vec![0.0; n1]; times.len()];
    let mut m2 = vec![vec![0.0; n1]; times.len()];
    let mut centering = vec![0.0; times.len()];
    let mut dist = vec![0.0; times.len()];

    let mut first = 0;
    while first < config.replicas {
        let last = (first + REPLICA_CHUNK).min(config.replicas);
        let chunk: Vec<Vec<Observation>> = (first..last)
            .into_par_iter()
            .map(|r| {
                let stream = ReplicaStream::new(config.seed, r as u64);
                run_replica(&dynamics, &start, stream, &times, equilibrium.as_deref())
            })
            .collect();
        for obs in chunk {
            count += 1.0;
            for (s, o) in obs.into_iter().enumerate() {
                for (a, x) in o.free.into_iter().enumerate() {
                    let d = x - mean[s][a];
                    mean[s][a] += d / count;
                    m2[s][a] += d * (x - mean[s][a]);
                }
                centering[s] += (o.centering - centering[s]) / count;
                if let Some(d) = o.dist {
                    dist[s] += (d - dist[s]) / count;
                }
            }
        }
        first = last;
    }

    let avg = |v: &[f64]| if v.is_empty() { 0.0 } else { v.iter().sum::<f64>() / v.len() as f64 };
    let samples = times
        .iter()
        .enumerate()
        .map(|(s, &t)| {
            let agent_var: Vec<f64> = if config.replicas > 1 {
                m2[s].iter().map(|v| v / (count - 1.0)).collect()
            } else {
                vec![0.0; n1]
            };
            TraceSample {
                t,
                mean: avg(&mean[s]),
                var: avg(&agent_var),
                dist_to_eq: equilibrium.as_ref().map(|_| dist[s]),
                centering_norm: centering[s],
                agent_mean: mean[s].clone(),
                agent_var,
            }
        })
        .collect();
    Ok(SimulationTrace { agents: dynamics.free_agents().collect(), replicas: config.replicas, equilibrium, samples })
}

/// `τ(P) = 1 − min_{i,j} Σ_s min(p_is, p_js)` for a row-stochastic `P`.
///
/// Evaluated as `max_{i,j} Σ_s (p_is − p_js)⁺`, which is the same quantity
/// for stochastic rows but does not cancel when the overlap is close to one.
pub fn ergodicity_coefficient(p: &[Vec<f64>]) -> Result<f64> {
    let n = p.len();
    for (i, row) in p.iter().enumerate() {
        if row.len() != n {
            return Err(Error::domain(format!("row {i} has {} entries, expected {n}", row.len())));
        }
        if let Some(x) = row.iter().find(|x| !(**x >= 0.0) || !x.is_finite()) {
            return Err(Error::domain(format!("row {i} has invalid entry {x}")));
        }
        let sum: f64 = row.iter().sum();
        if (sum - 1.0).abs() > ROW_SUM_TOLERANCE {
            return Err(Error::domain(format!("row {i} sums to {sum}, not 1")));
        }
    }
    let mut tau = 0.0f64;
    for i in 0..n {
        for j in 0..n {
            if i != j {
                let excess: f64 = p[i].iter().zip(&p[j]).map(|(a, b)| (a - b).max(0.0)).sum();
                tau = tau.max(excess);
            }
        }
    }
    Ok(tau.min(1.0))
}

/// Whether every pair of rows of the expected update matrix shares a
/// nonzero column. The support of row `i` is `i` itself (the retained
/// opinion) and every source of `i`; a stubborn row is supported on `i` only.
pub fn is_scrambling(network: &Network) -> bool {
    let supports: Vec<Vec<usize>> = network
        .agents()
        .map(|i| {
            let mut s = vec![i.index()];
            if !network.is_stubborn(i) {
                s.extend(network.in_edges(i).iter().filter(|e| e.prob > 0.0).map(|e| e.source.index()));
            }
            s.sort_unstable();
            s
        })
        .collect();
    let share = |a: &[usize], b: &[usize]| {
        let (mut x, mut y) = (0, 0);
        while x < a.len() && y < b.len() {
            match a[x].cmp(&b[y]) {
                std::cmp::Ordering::Less => x += 1,
                std::cmp::Ordering::Greater => y += 1,
                std::cmp::Ordering::Equal => return true,
            }
        }
        false
    };
    (0..supports.len()).all(|i| (i + 1..supports.len()).all(|j| share(&supports[i], &supports[j])))
}

/// Checks the hypotheses under which opinions reach consensus, returning a
/// configuration error naming the first one that fails.
pub fn check_consensus_hypotheses(network: &Network, schedule: &StubbornnessSchedule) -> Result<()> {
    schedule.check(network.n_agents())?;
    if network.n_stubborn() > 0 {
        return Err(Error::config(format!(
            "consensus hypothesis fails: network has {} stubborn agents, expected none",
            network.n_stubborn()
        )));
    }
    if !is_scrambling(network) {
        return Err(Error::config("consensus hypothesis fails: update matrix is not scrambling"));
    }
    if !schedule.kinds().iter().all(ScheduleKind::sum_diverges) {
        return Err(Error::config("consensus hypothesis fails: sum of weights converges (Σω < ∞)"));
    }
    if !schedule.kinds().iter().all(ScheduleKind::square_sum_converges) {
        return Err(Error::config("consensus hypothesis fails: sum of squared weights diverges (Σω² = ∞)"));
    }
    Ok(())
}

/// [`run`] on a network without stubborn agents, after checking the
/// consensus hypotheses.
pub fn consensus_run(
    network: &Network,
    schedule: &StubbornnessSchedule,
    config: &SimulationConfig,
) -> Result<SimulationTrace> {
    check_consensus_hypotheses(network, schedule)?;
    run(network, schedule, config)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RateFit {
    /// Least-squares slope of `log dist` against `log t`.
    pub slope: f64,
    pub intercept: f64,
    pub points: usize,
    pub converging: bool,
}

fn fit_log_log(points: &[(f64, f64)]) -> Result<RateFit> {
    let usable: Vec<(f64, f64)> =
        points.iter().filter(|(t, d)| *t > 0.0 && *d > 0.0).map(|(t, d)| (t.ln(), d.ln())).collect();
    if usable.len() < 2 {
        return Err(Error::domain("fewer than two samples with positive time and distance"));
    }
    let n = usable.len() as f64;
    let mx = usable.iter().map(|p| p.0).sum::<f64>() / n;
    let my = usable.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = usable.iter().map(|p| (p.0 - mx) * (p.0 - mx)).sum();
    let sxy: f64 = usable.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    if sxx == 0.0 {
        return Err(Error::domain("all samples share one time"));
    }
    let slope = sxy / sxx;
    Ok(RateFit { slope, intercept: my - slope * mx, points: usable.len(), converging: slope < NONCONVERGENCE_SLOPE })
}

fn distance_points(trace: &SimulationTrace) -> Result<Vec<(f64, f64)>> {
    trace
        .samples
        .iter()
        .filter(|s| s.t > 0)
        .map(|s| {
            s.dist_to_eq
                .map(|d| (s.t as f64, d))
                .ok_or_else(|| Error::domain("trace has no distance to equilibrium"))
        })
        .collect()
}

/// Decay exponent of the distance to equilibrium over the trailing half of
/// the samples (those with `t > 0`).
pub fn rate_estimate(trace: &SimulationTrace) -> Result<RateFit> {
    let points = distance_points(trace)?;
    if points.len() < 4 {
        return Err(Error::domain(format!("rate fit needs at least 4 samples, have {}", points.len())));
    }
    fit_log_log(&points[points.len() / 2..])
}

/// Like [`rate_estimate`] but over the samples with `t ≥ from`.
pub fn rate_estimate_since(trace: &SimulationTrace, from: u64) -> Result<RateFit> {
    let points: Vec<(f64, f64)> = distance_points(trace)?.into_iter().filter(|p| p.0 >= from as f64).collect();
    if points.len() < 4 {
        return Err(Error::domain(format!("rate fit needs at least 4 samples, have {}", points.len())));
    }
    fit_log_log(&points)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VerdictStatus {
    Pass,
    Fail,
    Skipped,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Verdict {
    pub property: String,
    pub status: VerdictStatus,
    pub detail: String,
}

impl Verdict {
    fn new(property: &str, status: VerdictStatus, detail: String) -> Self {
        Verdict { property: property.into(), status, detail }
    }

    fn check(property: &str, ok: bool, detail: String) -> Self {
        let status = if ok { VerdictStatus::Pass } else { VerdictStatus::Fail };
        Verdict::new(property, status, detail)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SuiteConfig {
    pub steps: u64,
    pub replicas: usize,
    pub seed: u64,
    pub schedule: StubbornnessSchedule,
    pub verbalization: VerbalizationModel,
    /// Absolute tolerance on replica means.
    pub band: f64,
}

impl SuiteConfig {
    pub fn new(steps: u64, replicas: usize, seed: u64) -> Self {
        SuiteConfig {
            steps,
            replicas,
            seed,
            schedule: StubbornnessSchedule::power_law(1.0, 1.0, 1.0),
            verbalization: VerbalizationModel::default(),
            band: 0.02,
        }
    }
}

/// Runs the simulation checks that apply to `network`:
///
/// * `equilibrium-mean`: replica means at the final step sit within
///   `3·SE` and `band` of `θ*`, from both all-0 and all-1 starts.
/// * `variance-decay`: mean across-replica variance at `T` is at most a
///   quarter of its value at `T/100`.
/// * `convergence-rate`: the log-log slope of the distance to `θ*` over the
///   last decade is at most `-0.4` (power-law schedules with exponent 1 only).
/// * `consensus`: without stubborn agents, `‖Cθ(T)‖` falls below 10% of
///   `‖Cθ(0)‖`.
pub fn property_suite(network: &Network, config: &SuiteConfig) -> Result<Vec<Verdict>> {
    let mut out = Vec::new();
    let t = config.steps;
    let base = SimulationConfig::new(t, config.replicas, config.seed).with_verbalization(config.verbalization);
    let equilibrium = equilibrium_of(network)?;

    if let Some(eq) = equilibrium {
        let mut times = Sampling::Logarithmic { per_decade: 10 }.times(t)?;
        times.push((t / 100).max(1));
        let low = run(
            network,
            &config.schedule,
            &base
                .clone()
                .with_sampling(Sampling::Times { times })
                .with_initial(InitialOpinions::Constant { value: 0.0 }),
        )?;
        let high = run(
            network,
            &config.schedule,
            &SimulationConfig { seed: config.seed.wrapping_add(1), ..base.clone() }
                .with_sampling(Sampling::Times { times: vec![] })
                .with_initial(InitialOpinions::Constant { value: 1.0 }),
        )?;
        let r = config.replicas as f64;
        let (lo, hi) = (low.last(), high.last());
        let mut worst = 0.0f64;
        let mut ok = true;
        for a in 0..eq.len() {
            let se_lo = (lo.agent_var[a] / r).sqrt();
            let se_hi = (hi.agent_var[a] / r).sqrt();
            let e_lo = (lo.agent_mean[a] - eq[a]).abs();
            let e_hi = (hi.agent_mean[a] - eq[a]).abs();
            let gap = (lo.agent_mean[a] - hi.agent_mean[a]).abs();
            let se_gap = (se_lo * se_lo + se_hi * se_hi).sqrt();
            ok &= e_lo <= (3.0 * se_lo).max(f64::EPSILON) && e_lo <= config.band;
            ok &= e_hi <= (3.0 * se_hi).max(f64::EPSILON) && e_hi <= config.band;
            ok &= gap <= (3.0 * se_gap).max(f64::EPSILON) && gap <= config.band;
            worst = worst.max(e_lo).max(e_hi);
        }
        out.push(Verdict::check(
            "equilibrium-mean",
            ok,
            format!("largest |mean - theta*| = {worst:.3e} over {} agents", eq.len()),
        ));

        let early = low.at((t / 100).max(1)).expect("sampled").var;
        let late = lo.var;
        let ratio = if early > 0.0 { late / early } else if late == 0.0 { 0.0 } else { f64::INFINITY };
        out.push(Verdict::check(
            "variance-decay",
            ratio <= 0.25,
            format!("var(T) / var(T/100) = {ratio:.4}"),
        ));

        out.push(rate_verdict(network, config, &low)?);
    } else if network.n_stubborn() > 0 {
        let why = "equilibrium is not defined for this network".to_string();
        for p in ["equilibrium-mean", "variance-decay", "convergence-rate"] {
            out.push(Verdict::new(p, VerdictStatus::Skipped, why.clone()));
        }
    } else {
        for p in ["equilibrium-mean", "variance-decay", "convergence-rate"] {
            out.push(Verdict::new(p, VerdictStatus::Skipped, "network has no stubborn agents".into()));
        }
    }

    if network.n_stubborn() > 0 {
        out.push(Verdict::new("consensus", VerdictStatus::Skipped, "network has stubborn agents".into()));
    } else {
        match consensus_run(network, &config.schedule, &base) {
            Ok(trace) => {
                let start = trace.samples[0].centering_norm;
                let end = trace.last().centering_norm;
                out.push(Verdict::check(
                    "consensus",
                    end <= 0.1 * start,
                    format!("|C theta| fell from {start:.4e} to {end:.4e}"),
                ));
            }
            Err(Error::Config(msg)) => out.push(Verdict::new("consensus", VerdictStatus::Skipped, msg)),
            Err(e) => return Err(e),
        }
    }
    Ok(out)
}

fn rate_verdict(network: &Network, config: &SuiteConfig, trace: &SimulationTrace) -> Result<Verdict> {
    const NAME: &str = "convergence-rate";
    let c = match config.schedule {
        StubbornnessSchedule::Uniform(ScheduleKind::PowerLaw { c, delta, .. }) if delta == 1.0 => c,
        _ => {
            return Ok(Verdict::new(
                NAME,
                VerdictStatus::Skipped,
                "needs a uniform power-law schedule with exponent 1".into(),
            ))
        }
    };
    let lambda = assemble(network)?.hermitian_part_max_eigenvalue()?;
    if lambda >= 0.0 || c <= 1.0 / (2.0 * lambda.abs()) {
        return Ok(Verdict::new(
            NAME,
            VerdictStatus::Skipped,
            format!("scale c = {c} does not exceed 1/|lambda_max(G + G^T)| (lambda_max of (G+G^T)/2 is {lambda:.6})"),
        ));
    }
    match rate_estimate_since(trace, (config.steps / 10).max(1)) {
        Ok(fit) => Ok(Verdict::check(NAME, fit.slope <= -0.4, format!("fitted slope {:.4}", fit.slope))),
        Err(Error::Domain(msg)) => Ok(Verdict::new(NAME, VerdictStatus::Skipped, msg)),
        Err(e) => Err(e),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::NetworkBuilder;

    fn two_sources() -> Network {
        let mut b = NetworkBuilder::new();
        b.stubborn("s0", 0.0);
        b.stubborn("s1", 1.0);
        b.edge("s0", "v", 0.5).unwrap();
        b.edge("s1", "v", 0.5).unwrap();
        b.build().unwrap()
    }

    fn follower(p: f64) -> Network {
        let mut b = NetworkBuilder::new();
        b.stubborn("s", 0.8);
        b.edge("s", "v", p).unwrap();
        b.build().unwrap()
    }

    #[test]
    fn zero_weight_keeps_state() {
        let net = two_sources();
        let d = Dynamics::new(&net, StubbornnessSchedule::constant(0.0), VerbalizationModel::Bernoulli).unwrap();
        let s0 = d.initial_state(&[0.0, 0.0, 0.3]).unwrap();
        let s1 = d.step(&s0, &ReplicaStream::new(1, 0));
        assert_eq!(s1.theta, s0.theta);
        assert_eq!(s1.t, 1);
    }

    #[test]
    fn full_weight_copies_source() {
        let net = follower(1.0);
        let d = Dynamics::new(&net, StubbornnessSchedule::constant(1.0), VerbalizationModel::Exact).unwrap();
        let s = d.step(&d.initial_state(&[0.0, 0.1]).unwrap(), &ReplicaStream::new(3, 0));
        assert_eq!(s.theta, vec![0.8, 0.8]);
    }

    #[test]
    fn harmonic_weights_give_running_average() {
        // ω(t) = 1/(t+1) and a source that always fires: θ(t) is the mean of
        // the first t posts, here all equal to 0.8.
        let net = follower(1.0);
        let d = Dynamics::new(&net, StubbornnessSchedule::power_law(1.0, 0.0, 1.0), VerbalizationModel::Exact).unwrap();
        let stream = ReplicaStream::new(0, 0);
        let mut s = d.initial_state(&[0.0, 0.2]).unwrap();
        for _ in 0..50 {
            s = d.step(&s, &stream);
            assert!((s.theta[1] - 0.8).abs() < 1e-15);
        }
    }

    #[test]
    fn bernoulli_running_average_counts_ones() {
        let net = follower(1.0);
        let d =
            Dynamics::new(&net, StubbornnessSchedule::power_law(1.0, 0.0, 1.0), VerbalizationModel::Bernoulli).unwrap();
        let stream = ReplicaStream::new(11, 4);
        let mut s = d.initial_state(&[0.0, 0.5]).unwrap();
        let mut ones = 0.0;
        for t in 1..=200u64 {
            let prev = s.theta[1];
            s = d.step(&s, &stream);
            // recover the post from the update
            let w = 1.0 / t as f64;
            let y = (s.theta[1] - (1.0 - w) * prev) / w;
            ones += y.round();
            assert!((s.theta[1] - ones / t as f64).abs() < 1e-12);
        }
    }

    #[test]
    fn step_function_checks_state_length() {
        let net = two_sources();
        let s = OpinionState { theta: vec![0.0], t: 0 };
        let r = step(&s, &net, &StubbornnessSchedule::constant(0.5), VerbalizationModel::Exact, &ReplicaStream::new(0, 0));
        assert!(matches!(r, Err(Error::Config(_))));
    }

    #[test]
    fn schedule_checks() {
        assert!(StubbornnessSchedule::power_law(3.0, 1.0, 1.0).check(1).is_err());
        assert!(StubbornnessSchedule::power_law(2.0, 1.0, 1.0).check(1).is_ok());
        assert!(StubbornnessSchedule::power_law(1.0, 1.0, 1.5).check(1).is_err());
        assert!(StubbornnessSchedule::constant(1.5).check(1).is_err());
        assert!(StubbornnessSchedule::PerAgent(vec![ScheduleKind::Constant { w: 0.1 }]).check(2).is_err());
        let k = ScheduleKind::PowerLaw { c: 1.0, tau: 1.0, delta: 0.3 };
        assert!(k.sum_diverges() && !k.square_sum_converges());
        assert_eq!(ScheduleKind::PowerLaw { c: 1.0, tau: 1.0, delta: 1.0 }.weight(2), 0.25);
    }

    #[test]
    fn stream_is_reproducible_and_uniformish() {
        let a = ReplicaStream::new(5, 2);
        let b = ReplicaStream::new(5, 2);
        let k = a.step_key(9);
        assert_eq!(k, b.step_key(9));
        assert_ne!(k, ReplicaStream::new(5, 3).step_key(9));
        let n = 100_000;
        let m: f64 = (0..n).map(|i| ReplicaStream::uniform(a.step_key(i), 0, 0)).sum::<f64>() / n as f64;
        assert!((m - 0.5).abs() < 0.005);
    }

    #[test]
    fn sample_times() {
        assert_eq!(Sampling::Every { interval: 3 }.times(10).unwrap(), vec![0, 3, 6, 9, 10]);
        assert_eq!(Sampling::Logarithmic { per_decade: 1 }.times(1000).unwrap(), vec![0, 1, 10, 100, 1000]);
        assert_eq!(Sampling::Times { times: vec![5, 2, 5, 40] }.times(20).unwrap(), vec![0, 2, 5, 20]);
        assert!(Sampling::Every { interval: 0 }.times(10).is_err());
    }

    #[test]
    fn all_stubborn_trace_is_constant() {
        let mut b = NetworkBuilder::new();
        b.stubborn("a", 0.2);
        b.stubborn("b", 0.9);
        let net = b.build().unwrap();
        let cfg = SimulationConfig::new(100, 3, 1).with_sampling(Sampling::Every { interval: 10 });
        let trace = run(&net, &StubbornnessSchedule::constant(0.5), &cfg).unwrap();
        let c0 = trace.samples[0].centering_norm;
        assert!(trace.samples.iter().all(|s| s.centering_norm == c0 && s.mean == 0.0 && s.var == 0.0));
        assert!(trace.equilibrium.is_none());
    }

    #[test]
    fn run_is_deterministic_and_stubborn_fixed() {
        let net = two_sources();
        let cfg = SimulationConfig::new(500, 40, 9).with_sampling(Sampling::Every { interval: 50 });
        let sched = StubbornnessSchedule::power_law(1.0, 1.0, 1.0);
        let a = run(&net, &sched, &cfg).unwrap();
        let b = run(&net, &sched, &cfg).unwrap();
        assert_eq!(a, b);
        let c = run(&net, &sched, &SimulationConfig { seed: 10, ..cfg }).unwrap();
        assert_ne!(a.last().mean, c.last().mean);
        assert_eq!(a.equilibrium.as_deref(), Some(&[0.5][..]));
        for s in &a.samples {
            assert!(s.agent_mean.iter().all(|x| (0.0..=1.0).contains(x)));
        }
    }

    #[test]
    fn replica_count_one_has_zero_variance() {
        let cfg = SimulationConfig::new(50, 1, 0);
        let trace = run(&two_sources(), &StubbornnessSchedule::constant(0.3), &cfg).unwrap();
        assert!(trace.samples.iter().all(|s| s.var == 0.0));
        assert!(run(&two_sources(), &StubbornnessSchedule::constant(0.3), &SimulationConfig::new(0, 1, 0)).is_err());
    }

    #[test]
    fn ergodicity_hand_cases() {
        let half = vec![vec![0.5, 0.5], vec![0.5, 0.5]];
        assert_eq!(ergodicity_coefficient(&half).unwrap(), 0.0);
        let id = vec![vec![1.0, 0.0], vec![0.0, 1.0]];
        assert_eq!(ergodicity_coefficient(&id).unwrap(), 1.0);
        let p = vec![vec![0.6, 0.4], vec![0.3, 0.7]];
        assert_eq!(ergodicity_coefficient(&p).unwrap(), 0.3);
        assert!(matches!(ergodicity_coefficient(&[vec![0.6, 0.6], vec![0.5, 0.5]]), Err(Error::Domain(_))));
        assert!(matches!(ergodicity_coefficient(&[vec![1.5, -0.5], vec![0.5, 0.5]]), Err(Error::Domain(_))));
    }

    #[test]
    fn scrambling_cases() {
        let mut b = NetworkBuilder::new();
        b.agent("a");
        b.agent("b");
        b.agent("c");
        b.edge("a", "b", 0.3).unwrap();
        b.edge("b", "a", 0.3).unwrap();
        b.edge("c", "a", 0.3).unwrap();
        b.edge("c", "b", 0.3).unwrap();
        b.edge("a", "c", 0.3).unwrap();
        assert!(is_scrambling(&b.build().unwrap()));

        let mut b = NetworkBuilder::new();
        b.agent("a");
        b.agent("b");
        b.agent("x");
        b.agent("y");
        b.edge("x", "a", 0.5).unwrap();
        b.edge("y", "b", 0.5).unwrap();
        assert!(!is_scrambling(&b.build().unwrap()));

        let mut b = NetworkBuilder::new();
        let names = ["a", "b", "c", "d"];
        for s in names {
            for d in names {
                if s != d {
                    b.edge(s, d, 0.25).unwrap();
                }
            }
        }
        assert!(is_scrambling(&b.build().unwrap()));
    }

    fn triangle() -> Network {
        let mut b = NetworkBuilder::new();
        for (name, op) in [("a", 0.0), ("b", 0.5), ("c", 1.0)] {
            let id = b.agent(name);
            b.set_opinion(id, Some(op));
        }
        for (s, d) in [("a", "b"), ("b", "c"), ("c", "a"), ("b", "a"), ("c", "b"), ("a", "c")] {
            b.edge(s, d, 0.3).unwrap();
        }
        b.build().unwrap()
    }

    #[test]
    fn consensus_hypotheses() {
        let net = triangle();
        let cfg = SimulationConfig::new(10, 1, 0);
        let err = consensus_run(&net, &StubbornnessSchedule::constant(0.5), &cfg).unwrap_err();
        assert!(matches!(&err, Error::Config(m) if m.contains("squared")));
        let err = consensus_run(&two_sources(), &StubbornnessSchedule::power_law(1.0, 1.0, 1.0), &cfg).unwrap_err();
        assert!(matches!(&err, Error::Config(m) if m.contains("stubborn")));
    }

    #[test]
    fn identical_opinions_stay_in_consensus() {
        let mut b = NetworkBuilder::new();
        for name in ["a", "b", "c"] {
            let id = b.agent(name);
            b.set_opinion(id, Some(0.4));
        }
        for (s, d) in [("a", "b"), ("b", "c"), ("c", "a")] {
            b.edge(s, d, 0.5).unwrap();
        }
        let cfg = SimulationConfig::new(200, 4, 2).with_verbalization(VerbalizationModel::Exact);
        let trace = consensus_run(&b.build().unwrap(), &StubbornnessSchedule::power_law(1.0, 1.0, 1.0), &cfg).unwrap();
        assert!(trace.samples.iter().all(|s| s.centering_norm < 1e-15));
    }

    fn synthetic(f: impl Fn(f64) -> f64) -> SimulationTrace {
        let samples = Sampling::Logarithmic { per_decade: 5 }
            .times(100_000)
            .unwrap()
            .into_iter()
            .map(|t| TraceSample {
                t,
                mean: 0.0,
                var: 0.0,
                dist_to_eq: Some(f(t as f64)),
                centering_norm: 0.0,
                agent_mean: vec![],
                agent_var: vec![],
            })
            .collect();
        SimulationTrace { agents: vec![], replicas: 1, equilibrium: Some(vec![]), samples }
    }

    #[test]
    fn rate_fit_recovers_exponent() {
        let fit = rate_estimate(&synthetic(|t| 3.0 / t.sqrt())).unwrap();
        assert!((fit.slope + 0.5).abs() < 0.01);
        assert!(fit.converging);
        let flat = rate_estimate(&synthetic(|_| 0.2)).unwrap();
        assert!(flat.slope.abs() < 1e-12);
        assert!(!flat.converging);
        let since = rate_estimate_since(&synthetic(|t| 1.0 / t), 1000).unwrap();
        assert!((since.slope + 1.0).abs() < 1e-9);
    }

    #[test]
    fn rate_fit_needs_four_samples() {
        let mut trace = synthetic(|t| 1.0 / t);
        trace.samples.truncate(4); // t = 0 is not usable
        assert!(matches!(rate_estimate(&trace), Err(Error::Domain(_))));
        trace.samples[1].dist_to_eq = None;
        assert!(rate_estimate(&trace).is_err());
    }

    #[test]
    fn suite_on_e2() {
        let cfg = SuiteConfig::new(20_000, 100, 3);
        let verdicts = property_suite(&two_sources(), &cfg).unwrap();
        let status = |p: &str| verdicts.iter().find(|v| v.property == p).unwrap().status;
        assert_eq!(status("equilibrium-mean"), VerdictStatus::Pass);
        assert_eq!(status("variance-decay"), VerdictStatus::Pass);
        assert_eq!(status("consensus"), VerdictStatus::Skipped);
    }
}
