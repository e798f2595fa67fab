mod common;

use common::*;
use proptest::prelude::*;
use rand::Rng;
use sonfed_core::oracle::{solve_reference, OracleConfig};
use sonfed_core::{Convention, FederationProblem, LossSpec, Partition, PenaltyKind, Stack};

fn labels_to_partition(labels: &[usize]) -> Partition {
    Partition::from_labels(labels)
}

fn mixed_losses(seed: u64, n: usize, d: usize) -> Vec<LossSpec> {
    let mut r = rng(seed);
    (0..n)
        .map(|i| {
            let a: Vec<f64> = (0..d).map(|_| r.gen_range(-3.0..3.0)).collect();
            if i % 2 == 0 {
                LossSpec::quadratic(a).unwrap()
            } else {
                LossSpec::huber(a, r.gen_range(0.2..2.0)).unwrap()
            }
        })
        .collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn lifting_identity(
        seed in any::<u64>(),
        labels in prop::collection::vec(0usize..4, 2..9),
        lambda in 0.0..3.0f64,
        mean in any::<bool>(),
        ordered in any::<bool>(),
    ) {
        let n = labels.len();
        let conv = match (mean, ordered) {
            (true, true) => Convention::MEAN_ORDERED,
            (true, false) => Convention::MEAN_UNORDERED,
            (false, true) => Convention::SUM_ORDERED,
            (false, false) => Convention::SUM_UNORDERED,
        };
        let p = FederationProblem::new(mixed_losses(seed, n, 2), PenaltyKind::SumOfNorms { lambda }, conv).unwrap();
        let part = labels_to_partition(&labels);
        let reduced = p.clustered_reduction(&part).unwrap();
        let w = random_stack(&mut rng(seed ^ 1), part.num_blocks(), 2, 4.0);
        let a = reduced.objective(&w).unwrap();
        let b = p.objective(&w.lift(&part)).unwrap();
        prop_assert!((a - b).abs() <= 1e-12 * (1.0 + b.abs()), "{a} vs {b}");
    }

    #[test]
    fn convention_bridge(seed in any::<u64>(), n in 2usize..8, lambda in 0.0..3.0f64) {
        let losses = mixed_losses(seed, n, 3);
        let x = random_stack(&mut rng(seed ^ 7), n, 3, 4.0);
        let obj = |conv: Convention, lambda: f64| {
            FederationProblem::new(losses.clone(), PenaltyKind::SumOfNorms { lambda }, conv).unwrap().objective(&x).unwrap()
        };
        let loss_mean = obj(Convention::MEAN_ORDERED, 0.0);
        let pen = obj(Convention::SUM_ORDERED, lambda) - obj(Convention::SUM_ORDERED, 0.0);
        let sum_ordered = obj(Convention::SUM_ORDERED, lambda);
        prop_assert!((sum_ordered - (n as f64 * loss_mean + pen)).abs() <= 1e-10 * (1.0 + sum_ordered));
        let pen_unordered = obj(Convention::SUM_UNORDERED, lambda) - obj(Convention::SUM_UNORDERED, 0.0);
        prop_assert!((pen_unordered - 0.5 * pen).abs() <= 1e-12 * (1.0 + pen));
    }

    #[test]
    fn singleton_reduction_is_identity(seed in any::<u64>(), n in 2usize..7, lambda in 0.0..2.0f64) {
        let p = FederationProblem::new(mixed_losses(seed, n, 2), PenaltyKind::SumOfNorms { lambda }, Convention::MEAN_ORDERED).unwrap();
        let reduced = p.clustered_reduction(&Partition::singletons(n)).unwrap();
        let x = random_stack(&mut rng(seed), n, 2, 3.0);
        let (a, b) = (reduced.objective(&x).unwrap(), p.objective(&x).unwrap());
        prop_assert!((a - b).abs() <= 1e-12 * (1.0 + b.abs()));
    }
}

#[test]
fn residual_small_at_oracle_solutions() {
    for seed in 0..8 {
        let n = 3 + (seed as usize % 4);
        let mut r = rng(seed);
        let lambda = r.gen_range(0.05..1.5);
        for conv in [Convention::SUM_ORDERED, Convention::MEAN_ORDERED] {
            let p = FederationProblem::new(mixed_losses(seed, n, 2), PenaltyKind::SumOfNorms { lambda }, conv).unwrap();
            let res = solve_reference(&p, &OracleConfig::default()).unwrap();
            assert!(res.converged, "seed {seed}");
            let tie = 1e-7 * (1.0 + res.x.mean_norm());
            assert!(p.subgradient_residual(&res.x, tie).unwrap() <= 1e-6, "seed {seed}");
        }
    }
}

#[test]
fn optimal_value_nondecreasing_in_lambda() {
    let pl = planted(3, &[3, 3], 2, 0.5, 4.0);
    let mut prev = f64::NEG_INFINITY;
    for k in 0..12 {
        let lambda = 0.02 * 1.6f64.powi(k);
        let p = quad(&pl.anchors, son(lambda), Convention::SUM_ORDERED);
        let v = solve_reference(&p, &OracleConfig::default()).unwrap().objective_value;
        assert!(v >= prev - 1e-9, "lambda {lambda}: {v} < {prev}");
        prev = v;
    }
}

#[test]
fn single_user_collapses_to_local() {
    let a = vec![1.5, -0.5];
    for penalty in [
        son(3.0),
        PenaltyKind::SquaredNorms { gamma: 2.0 },
        PenaltyKind::LocalOnly,
        PenaltyKind::GlobalConsensus,
    ] {
        let p = quad(&[a.clone()], penalty.clone(), Convention::default());
        let x = solve_reference(&p, &OracleConfig::default()).unwrap().x;
        assert!(sonfed_core::linalg::dist(&x[0], &a) < 1e-8, "{penalty:?}");
    }
}

#[test]
fn default_convention_is_mean_ordered() {
    assert_eq!(Convention::default(), Convention::MEAN_ORDERED);
}

#[test]
fn stack_length_checked() {
    let p = two_point(1.0, Convention::SUM_ORDERED);
    let err = p.objective(&Stack::new(vec![vec![0.0]])).unwrap_err();
    assert!(err.to_string().contains("expected 2"), "{err}");
}

#[test]
fn penalty_weights_must_be_nonnegative() {
    let losses = vec![LossSpec::quadratic(vec![0.0]).unwrap(); 2];
    assert!(FederationProblem::new(losses.clone(), son(-1.0), Convention::default()).is_err());
    assert!(FederationProblem::new(
        losses,
        PenaltyKind::SquaredNorms { gamma: f64::NAN },
        Convention::default()
    )
    .is_err());
}
