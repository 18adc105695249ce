mod common;

use common::{corpus, max_abs_diff, Dense};
use nalgebra::DMatrix;
use proptest::prelude::*;
use stubborn::graph::{load_network, validate, NetworkBuilder, ProbabilitySource};
use stubborn::linsys::{
    assemble, column_sums_of_inverse, inverse_column, row_sums_of_inverse, solve_equilibrium, Solver, SolverConfig,
};
use stubborn::synth::random_network;

fn library_equilibrium(net: &stubborn::graph::Network, dense: &Dense) -> Vec<f64> {
    let sys = assemble(net).unwrap();
    let sol = solve_equilibrium(&sys, sys.stubborn_opinions(), None).unwrap();
    dense.v1.iter().map(|&a| sol.theta_v1[sys.row_of(a).unwrap()]).collect()
}

#[test]
fn sparse_solve_matches_dense_oracle() {
    for net in corpus(40, 5..=120, 1) {
        let dense = Dense::new(&net);
        let ours = library_equilibrium(&net, &dense);
        let oracle: Vec<f64> = dense.equilibrium().iter().copied().collect();
        assert!(max_abs_diff(&ours, &oracle) <= 1e-10);
    }
}

#[test]
fn influence_matrix_is_stochastic_and_inverse_nonpositive() {
    for net in corpus(40, 5..=80, 2) {
        let dense = Dense::new(&net);
        let w = dense.influence();
        for r in 0..w.nrows() {
            assert!((w.row(r).sum() - 1.0).abs() <= 1e-10);
            assert!(w.row(r).iter().all(|&x| x >= -1e-12));
        }
        let sys = assemble(&net).unwrap();
        // -G⁻¹ ≥ 0: columns of G⁻¹ are non-positive.
        for &a in dense.v1.iter().take(5) {
            assert!(inverse_column(&sys, a).unwrap().iter().all(|&x| x <= 1e-12));
        }
        let rows = row_sums_of_inverse(&sys, None).unwrap();
        let cols = column_sums_of_inverse(&sys, None).unwrap();
        let inv = dense.inverse();
        for (k, &a) in sys.v1().iter().enumerate() {
            let d = dense.row_of(a);
            assert!((rows[k] - inv.row(d).sum()).abs() <= 1e-9 * (1.0 + rows[k].abs()));
            assert!((cols[k] - inv.column(d).sum()).abs() <= 1e-9 * (1.0 + cols[k].abs()));
        }
    }
}

#[test]
fn iterative_backend_agrees_with_direct() {
    let net = random_network(400, 30, 2.0, 9).unwrap();
    let sys = assemble(&net).unwrap();
    let direct = Solver::new(&sys, None, SolverConfig::default()).unwrap().equilibrium(sys.stubborn_opinions()).unwrap();
    let cfg = SolverConfig { direct_threshold: 0, ..SolverConfig::default() };
    let iter = Solver::new(&sys, None, cfg).unwrap().equilibrium(sys.stubborn_opinions()).unwrap();
    assert!(max_abs_diff(&direct.theta_v1, &iter.theta_v1) <= 1e-8);
}

#[test]
fn three_agent_hermitian_part_has_positive_eigenvalue() {
    let net = load_network(
        "src,dst,prob\nk,j,0.01\nj,i,0.25\ni,j,0.49\n".as_bytes(),
        "id,opinion,rate,stubborn\nk,1,,1\ni,,,0\nj,,,0\n".as_bytes(),
        ProbabilitySource::Given,
    )
    .unwrap();
    let sys = assemble(&net).unwrap();
    let expected = -3.0 / 8.0 + 6101f64.sqrt() / 200.0;
    assert!((sys.hermitian_part_max_eigenvalue().unwrap() - expected).abs() <= 1e-12);
    let g = DMatrix::from_fn(2, 2, |i, j| sys.g_dense()[i][j]);
    let h = (&g + g.transpose()) * 0.5;
    let eig = h.symmetric_eigen().eigenvalues;
    assert!((eig.max() - expected).abs() <= 1e-12);
}

#[test]
fn consensus_when_one_stubborn_opinion() {
    let net = random_network(60, 1, 2.0, 4).unwrap();
    let sys = assemble(&net).unwrap();
    let theta = solve_equilibrium(&sys, sys.stubborn_opinions(), None).unwrap().theta_v1;
    let s = sys.stubborn_opinions()[0];
    assert!(theta.iter().all(|&x| (x - s).abs() <= 1e-10));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn equilibrium_stays_in_unit_interval(n in 3usize..60, frac in 0.05f64..0.5, seed in any::<u64>()) {
        let n0 = ((n as f64 * frac) as usize).max(1);
        let net = random_network(n, n0, 1.5, seed).unwrap();
        let sys = assemble(&net).unwrap();
        let theta = solve_equilibrium(&sys, sys.stubborn_opinions(), None).unwrap().theta_v1;
        let (lo, hi) = sys.stubborn_opinions().iter().fold((1.0f64, 0.0f64), |(l, h), &x| (l.min(x), h.max(x)));
        for x in theta {
            prop_assert!(x >= lo - 1e-12 && x <= hi + 1e-12);
        }
    }

    #[test]
    fn raising_a_stubborn_opinion_never_lowers_anyone(n in 3usize..40, seed in any::<u64>(), pick in any::<prop::sample::Index>()) {
        let net = random_network(n, (n / 3).max(1), 1.5, seed).unwrap();
        let sys = assemble(&net).unwrap();
        let base = sys.stubborn_opinions().to_vec();
        let mut up = base.clone();
        let c = pick.index(up.len());
        up[c] = 1.0;
        let a = solve_equilibrium(&sys, &base, None).unwrap().theta_v1;
        let b = solve_equilibrium(&sys, &up, None).unwrap().theta_v1;
        for (x, y) in a.iter().zip(&b) {
            prop_assert!(y >= &(x - 1e-12));
        }
    }

    #[test]
    fn assembly_rows_sum_to_zero(n in 3usize..50, seed in any::<u64>()) {
        let net = random_network(n, (n / 4).max(1), 2.0, seed).unwrap();
        prop_assert!(validate(&net).is_valid());
        let sys = assemble(&net).unwrap();
        let g = sys.g_dense();
        let f = sys.f_dense();
        for r in 0..sys.n_free() {
            let s: f64 = g[r].iter().sum::<f64>() + f[r].iter().sum::<f64>();
            prop_assert!(s.abs() <= 1e-12);
        }
    }
}

#[test]
fn single_stubborn_follower_chain() {
    let mut b = NetworkBuilder::new();
    b.stubborn("s", 0.3);
    b.edge("s", "a", 0.2).unwrap();
    b.edge("a", "b", 0.9).unwrap();
    b.edge("b", "c", 0.1).unwrap();
    let net = b.build().unwrap();
    let sys = assemble(&net).unwrap();
    let theta = solve_equilibrium(&sys, sys.stubborn_opinions(), None).unwrap().theta_v1;
    assert!(theta.iter().all(|&x| (x - 0.3).abs() < 1e-14));
}
