//! Dense reference computations built straight from the edge lists, without
//! going through the library's assembly or solvers.
#![allow(dead_code)]

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use stubborn::graph::{AgentId, Network};
use stubborn::synth::random_network;

pub struct Dense {
    pub v1: Vec<AgentId>,
    pub v0: Vec<AgentId>,
    pub g: DMatrix<f64>,
    pub f: DMatrix<f64>,
    pub theta0: DVector<f64>,
}

impl Dense {
    pub fn new(net: &Network) -> Self {
        let v1: Vec<AgentId> = net.agents().filter(|&a| !net.is_stubborn(a)).collect();
        let v0: Vec<AgentId> = net.agents().filter(|&a| net.is_stubborn(a)).collect();
        let pos = |set: &[AgentId], a: AgentId| set.iter().position(|&x| x == a);
        let mut g = DMatrix::zeros(v1.len(), v1.len());
        let mut f = DMatrix::zeros(v1.len(), v0.len());
        for (r, &i) in v1.iter().enumerate() {
            for e in net.in_edges(i) {
                g[(r, r)] -= e.prob;
                match (pos(&v1, e.source), pos(&v0, e.source)) {
                    (Some(c), _) => g[(r, c)] += e.prob,
                    (_, Some(c)) => f[(r, c)] += e.prob,
                    _ => unreachable!(),
                }
            }
        }
        let theta0 = DVector::from_iterator(v0.len(), v0.iter().map(|&s| net.stubborn_opinion(s).unwrap()));
        Dense { v1, v0, g, f, theta0 }
    }

    pub fn row_of(&self, a: AgentId) -> usize {
        self.v1.iter().position(|&x| x == a).unwrap()
    }

    pub fn equilibrium_with(&self, theta0: &DVector<f64>) -> DVector<f64> {
        (-&self.g).lu().solve(&(&self.f * theta0)).expect("nonsingular")
    }

    pub fn equilibrium(&self) -> DVector<f64> {
        self.equilibrium_with(&self.theta0)
    }

    /// `-G⁻¹F`.
    pub fn influence(&self) -> DMatrix<f64> {
        (-&self.g).lu().solve(&self.f).expect("nonsingular")
    }

    pub fn inverse(&self) -> DMatrix<f64> {
        self.g.clone().try_inverse().expect("nonsingular")
    }

    /// Equilibrium after a new stubborn agent with opinion `theta_a` reaches
    /// each target with probability `p`: one more column of `F`.
    pub fn modified_equilibrium(&self, targets: &[AgentId], p: f64, theta_a: f64) -> DVector<f64> {
        let mut g = self.g.clone();
        let mut b = &self.f * &self.theta0;
        for &t in targets {
            let r = self.row_of(t);
            g[(r, r)] -= p;
            b[r] += p * theta_a;
        }
        (-g).lu().solve(&b).expect("nonsingular")
    }

    /// Change of the mean equilibrium when stubborn agent `s` goes from 0 to 1.
    pub fn stubborn_flip(&self, s: AgentId) -> f64 {
        let c = self.v0.iter().position(|&x| x == s).unwrap();
        let mut lo = self.theta0.clone();
        let mut hi = self.theta0.clone();
        lo[c] = 0.0;
        hi[c] = 1.0;
        (self.equilibrium_with(&hi) - self.equilibrium_with(&lo)).mean()
    }

    /// Change of the mean over the other non-stubborn agents when `i` is
    /// pinned at 1 instead of 0.
    pub fn pin_flip(&self, i: AgentId) -> f64 {
        let r = self.row_of(i);
        let keep: Vec<usize> = (0..self.v1.len()).filter(|&k| k != r).collect();
        let g = self.g.select_rows(&keep).select_columns(&keep);
        let col = self.g.column(r).select_rows(&keep);
        let solve = |x: f64| {
            let b = &self.f.select_rows(&keep) * &self.theta0 + &col * x;
            (-&g).clone().lu().solve(&b).expect("nonsingular")
        };
        (solve(1.0) - solve(0.0)).mean()
    }
}

/// Reproducible corpus of valid random networks with `n` in `sizes` and
/// between one and `n/2` stubborn agents.
pub fn corpus(count: usize, sizes: std::ops::RangeInclusive<usize>, seed: u64) -> Vec<Network> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| {
            let n = rng.random_range(sizes.clone());
            let n0 = rng.random_range(1..=(n / 2).max(1));
            let extra = rng.random_range(0.5..3.0);
            random_network(n, n0, extra, rng.random()).unwrap()
        })
        .collect()
}

/// Networks with exactly `n1` non-stubborn agents.
pub fn corpus_with_free(count: usize, n1: std::ops::RangeInclusive<usize>, seed: u64) -> Vec<Network> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| {
            let free = rng.random_range(n1.clone());
            let n0 = rng.random_range(1..=3);
            random_network(free + n0, n0, rng.random_range(0.5..2.5), rng.random()).unwrap()
        })
        .collect()
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}
