//! Seeded synthetic networks for tests, benchmarks and the `generate`
//! subcommand. Every generator returns a network that passes
//! [`validate`](crate::graph::validate).

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{normalize_rates, AgentId, Network, NetworkBuilder};

/// Random network with `n` agents of which `n_stubborn` are stubborn.
/// Agent ids are shuffled, every non-stubborn agent is reachable from a
/// stubborn one, and in-probability sums lie in `[0.2, 1]`.
pub fn random_network(n: usize, n_stubborn: usize, mean_extra_edges: f64, seed: u64) -> Result<Network> {
    if n_stubborn == 0 || n_stubborn > n {
        return Err(Error::config(format!("need 1 <= stubborn agents <= {n}, got {n_stubborn}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    let mut b = NetworkBuilder::new();
    let ids: Vec<AgentId> = (0..n).map(|i| b.agent(&format!("a{i}"))).collect();
    // order[..n_stubborn] are stubborn; later positions attach to earlier ones.
    for (pos, &i) in order.iter().enumerate() {
        if pos < n_stubborn {
            let op = if rng.random_bool(0.7) { rng.random_range(0..2) as f64 } else { rng.random::<f64>() };
            b.set_stubborn(ids[i], true).set_opinion(ids[i], Some(op));
        } else {
            b.set_opinion(ids[i], Some(rng.random::<f64>()));
        }
    }
    for pos in n_stubborn..n {
        let dst = order[pos];
        let mut sources = vec![order[rng.random_range(0..pos)]];
        let extra = poisson(&mut rng, mean_extra_edges);
        for _ in 0..extra {
            let s = rng.random_range(0..n);
            if s != dst && !sources.contains(&s) {
                sources.push(s);
            }
        }
        let weights: Vec<f64> = sources.iter().map(|_| 0.05 + rng.random::<f64>()).collect();
        let total: f64 = weights.iter().sum();
        let target = if rng.random_bool(0.2) { 1.0 } else { rng.random_range(0.2..1.0) };
        for (s, w) in sources.iter().zip(&weights) {
            b.add_edge(ids[*s], ids[dst], (w / total * target).min(1.0))?;
        }
    }
    // A few edges into stubborn agents, which the model ignores.
    for &s in &order[..n_stubborn] {
        if n > 1 && rng.random_bool(0.3) {
            let src = order[rng.random_range(0..n)];
            if src != s {
                b.add_edge(ids[src], ids[s], rng.random_range(0.1..1.0))?;
            }
        }
    }
    b.build()
}

fn poisson<R: Rng>(rng: &mut R, mean: f64) -> usize {
    // Knuth; means here are small.
    let l = (-mean).exp();
    let mut k = 0;
    let mut p = rng.random::<f64>();
    while p > l {
        k += 1;
        p *= rng.random::<f64>();
    }
    k
}

/// Network whose non-stubborn block `G` is symmetric: free agents are joined
/// by reciprocal edges of equal probability, and stubborn agents feed a
/// random subset of free agents.
pub fn symmetric_network(n_free: usize, n_stubborn: usize, seed: u64) -> Result<Network> {
    if n_free == 0 || n_stubborn == 0 {
        return Err(Error::config("need at least one free and one stubborn agent"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut b = NetworkBuilder::new();
    let stubborn: Vec<AgentId> =
        (0..n_stubborn).map(|s| b.stubborn(&format!("s{s}"), if s % 2 == 0 { 0.0 } else { 1.0 })).collect();
    let free: Vec<AgentId> = (0..n_free).map(|i| b.agent(&format!("v{i}"))).collect();
    let budget = 0.6 / n_free as f64;
    // A path keeps everything connected; extra chords with probability 0.4.
    for i in 0..n_free {
        for j in i + 1..n_free {
            if j == i + 1 || rng.random_bool(0.4) {
                let p = budget * rng.random_range(0.2..1.0);
                b.add_edge(free[i], free[j], p)?;
                b.add_edge(free[j], free[i], p)?;
            }
        }
    }
    for (k, &v) in free.iter().enumerate() {
        for (s, &src) in stubborn.iter().enumerate() {
            if k % n_stubborn == s || rng.random_bool(0.3) {
                b.add_edge(src, v, 0.3 / n_stubborn as f64 * rng.random_range(0.2..1.0))?;
            }
        }
    }
    b.build()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PowerLawSpec {
    pub n: usize,
    /// Accounts each newcomer follows.
    pub follows: usize,
    /// Probability that a followed account follows back.
    pub follow_back: f64,
    pub stubborn_fraction: f64,
    /// Pareto tail index of the posting rates.
    pub rate_tail: f64,
}

impl PowerLawSpec {
    pub fn new(n: usize) -> Self {
        PowerLawSpec { n, follows: 3, follow_back: 0.2, stubborn_fraction: 0.05, rate_tail: 1.5 }
    }
}

/// Preferential-attachment follower graph with heavy-tailed posting rates,
/// normalised to probabilities. The first `follows + 1` agents are stubborn,
/// plus a random `stubborn_fraction` of the rest; stubborn opinions are 0 or 1.
pub fn power_law_network(spec: &PowerLawSpec, seed: u64) -> Result<Network> {
    let m = spec.follows.max(1);
    if spec.n <= m + 1 {
        return Err(Error::config(format!("need more than {} agents", m + 1)));
    }
    if !(0.0..=1.0).contains(&spec.follow_back) || !(0.0..=1.0).contains(&spec.stubborn_fraction) {
        return Err(Error::config("follow-back and stubborn fractions must lie in [0, 1]"));
    }
    if !(spec.rate_tail > 0.0) {
        return Err(Error::config("rate tail index must be positive"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut b = NetworkBuilder::new();
    let ids: Vec<AgentId> = (0..spec.n).map(|i| b.agent(&format!("u{i}"))).collect();
    // `targets` holds each agent once plus once per follower.
    let mut targets: Vec<usize> = (0..=m).collect();
    for dst in m + 1..spec.n {
        let mut chosen: Vec<usize> = Vec::with_capacity(m);
        while chosen.len() < m {
            let s = targets[rng.random_range(0..targets.len())];
            if !chosen.contains(&s) {
                chosen.push(s);
            }
        }
        for &s in &chosen {
            b.add_edge(ids[s], ids[dst], 1.0)?;
            targets.push(s);
            if rng.random_bool(spec.follow_back) {
                b.add_edge(ids[dst], ids[s], 1.0)?;
            }
        }
        targets.push(dst);
    }
    for (i, &id) in ids.iter().enumerate() {
        let u: f64 = rng.random();
        b.set_rate(id, Some((1.0 - u).powf(-1.0 / spec.rate_tail)));
        if i <= m || rng.random_bool(spec.stubborn_fraction) {
            let op = if rng.random_bool(0.5) { 1.0 } else { 0.0 };
            b.set_stubborn(id, true).set_opinion(id, Some(op));
        } else {
            b.set_opinion(id, Some(rng.random()));
        }
    }
    normalize_rates(&b.build()?)
}
