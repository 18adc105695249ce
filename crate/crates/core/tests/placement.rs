mod common;

use common::{corpus_with_free, max_abs_diff, Dense};
use proptest::prelude::*;
use stubborn::graph::AgentId;
use stubborn::linsys::{assemble, SolverConfig, SystemMatrices};
use stubborn::placement::{
    brute_force_place, greedy_place, objective_value, CandidatePool, Objective, PlacementProblem, PlacementState,
};
use stubborn::synth::random_network;

fn mean_after(sys: &SystemMatrices, targets: &[AgentId], p: f64) -> f64 {
    let s = PlacementState::new(sys, targets, p, 1.0, SolverConfig::default()).unwrap();
    s.opinion_sum() / sys.n_free() as f64
}

#[test]
fn fast_gains_equal_full_resolves_along_greedy_runs() {
    for (n, k, seed) in [(120, 10, 1), (300, 6, 2)] {
        let net = random_network(n, n / 10, 2.0, seed).unwrap();
        let sys = assemble(&net).unwrap();
        let mut state = PlacementState::new(&sys, &[], 0.4, 1.0, SolverConfig::default()).unwrap();
        for _ in 0..k {
            let chosen = state.targets();
            let mut best: Option<(f64, AgentId)> = None;
            for &c in sys.v1().iter().filter(|a| !chosen.contains(a)) {
                let fast = state.marginal_gain_mean(c).unwrap();
                let slow: f64 = state.resolve_with(c).unwrap().iter().sum::<f64>() - state.opinion_sum();
                assert!((fast - slow).abs() <= 1e-8, "candidate {c}: {fast} vs {slow}");
                if best.is_none_or(|(g, _)| fast > g) {
                    best = Some((fast, c));
                }
            }
            state = state.commit(best.unwrap().1).unwrap();
        }
    }
}

#[test]
fn greedy_trajectory_matches_dense_oracle() {
    for net in corpus_with_free(8, 10..=40, 3) {
        let sys = assemble(&net).unwrap();
        let dense = Dense::new(&net);
        let problem = PlacementProblem::new(4, 0.3).with_pool(CandidatePool::All);
        let res = greedy_place(&net, &sys, &problem).unwrap();
        assert_eq!(res.objective_values.len(), 5);
        for (len, &v) in res.objective_values.iter().enumerate() {
            let oracle = dense.modified_equilibrium(&res.targets[..len], 0.3, 1.0).mean();
            assert!((v - oracle).abs() <= 1e-10);
        }
        let last: Vec<f64> = dense.v1.iter().map(|&a| res.final_theta[sys.row_of(a).unwrap()]).collect();
        let oracle: Vec<f64> = dense.modified_equilibrium(&res.targets, 0.3, 1.0).iter().map(|x| x.clamp(0.0, 1.0)).collect();
        assert!(max_abs_diff(&last, &oracle) <= 1e-10);
    }
}

/// `f(S) = mean equilibrium with the new agent on S`, for every subset of
/// the non-stubborn agents, indexed by bitmask over row order.
fn all_subset_values(sys: &SystemMatrices, p: f64) -> Vec<f64> {
    let v1 = sys.v1();
    (0u32..1 << v1.len())
        .map(|mask| {
            let set: Vec<AgentId> = (0..v1.len()).filter(|b| mask >> b & 1 == 1).map(|b| v1[b]).collect();
            mean_after(sys, &set, p)
        })
        .collect()
}

#[test]
fn mean_objective_is_monotone_and_submodular() {
    let mut checked = 0u64;
    for (idx, net) in corpus_with_free(20, 3..=7, 4).into_iter().enumerate() {
        let sys = assemble(&net).unwrap();
        let p = 0.1 + 0.8 * (idx as f64 / 19.0);
        let f = all_subset_values(&sys, p);
        let n1 = sys.n_free();
        let full = (1u32 << n1) - 1;
        for t in 0..=full {
            // every subset s of t
            let mut s = t;
            loop {
                for j in (0..n1).filter(|j| t >> j & 1 == 0) {
                    let bit = 1 << j;
                    let gain_s = f[(s | bit) as usize] - f[s as usize];
                    let gain_t = f[(t | bit) as usize] - f[t as usize];
                    assert!(gain_t >= -1e-9, "monotonicity");
                    assert!(gain_s >= gain_t - 1e-9, "submodularity");
                    checked += 1;
                }
                if s == 0 {
                    break;
                }
                s = (s - 1) & t;
            }
        }
    }
    assert!(checked > 1000);
}

#[test]
fn greedy_is_within_the_approximation_bound() {
    let bound = 1.0 - (-1.0f64).exp();
    for (idx, net) in corpus_with_free(20, 4..=12, 5).into_iter().enumerate() {
        let sys = assemble(&net).unwrap();
        let k = 1 + idx % 3;
        let problem = PlacementProblem::new(k, 0.25).with_pool(CandidatePool::All);
        let greedy = greedy_place(&net, &sys, &problem).unwrap();
        let brute = brute_force_place(&net, &sys, &problem).unwrap();
        let g = *greedy.objective_values.last().unwrap();
        let b = *brute.objective_values.last().unwrap();
        assert!(g >= bound * b - 1e-9);
        // The bound is on the gain over the empty set as well.
        let base = greedy.objective_values[0];
        assert!(g - base >= bound * (b - base) - 1e-9);
        assert!(b >= g - 1e-12);
    }
}

#[test]
fn threshold_objective_counts_agents_above_tau() {
    let net = random_network(40, 6, 2.0, 8).unwrap();
    let sys = assemble(&net).unwrap();
    let problem = PlacementProblem::new(3, 0.5)
        .with_objective(Objective::ThresholdCount { tau: 0.6 })
        .with_pool(CandidatePool::All);
    let res = greedy_place(&net, &sys, &problem).unwrap();
    let count = objective_value(&res.final_theta, Objective::ThresholdCount { tau: 0.6 });
    assert_eq!(*res.objective_values.last().unwrap(), count);
    assert!(res.objective_values.iter().all(|v| v.fract() == 0.0));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn greedy_values_never_decrease(n in 6usize..60, k in 1usize..5, p in 0.05f64..1.0, seed in any::<u64>()) {
        let net = random_network(n, (n / 5).max(1), 1.5, seed).unwrap();
        let sys = assemble(&net).unwrap();
        let k = k.min(sys.n_free());
        let res = greedy_place(&net, &sys, &PlacementProblem::new(k, p)).unwrap();
        prop_assert_eq!(res.targets.len(), k);
        prop_assert!(res.objective_values.windows(2).all(|w| w[1] >= w[0] - 1e-12));
        let mut uniq = res.targets.clone();
        uniq.sort();
        uniq.dedup();
        prop_assert_eq!(uniq.len(), k);
    }
}
