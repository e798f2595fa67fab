mod common;

use common::*;
use proptest::prelude::*;
use sonfed_core::clustering::{
    default_lambda_init, default_tie_tol, extract_partition, num_distinct_models, solution_path,
    within_cluster_distance, PathConfig, PathSolver,
};
use sonfed_core::oracle::{solve_reference, OracleConfig};
use sonfed_core::pdmm::PdmmConfig;
use sonfed_core::theory::{assumption3_profile, theorem3_interval};
use sonfed_core::{Convention, Partition, Stack};

fn stack1(v: &[f64]) -> Stack {
    Stack::new(v.iter().map(|&a| vec![a]).collect())
}

#[test]
fn extraction_examples() {
    assert_eq!(extract_partition(&stack1(&[2.0, 2.0, 2.0]), 1e-9).num_blocks(), 1);
    let p = extract_partition(&stack1(&[0.0, 1e-9, 5.0]), 1e-6);
    assert_eq!(p.blocks(), &[vec![0, 1], vec![2]]);
    // chaining joins the ends even though they are 1.8 tol apart
    let tau = 0.01;
    let p = extract_partition(&stack1(&[0.0, 0.9 * tau, 1.8 * tau]), tau);
    assert_eq!(p.num_blocks(), 1);
}

#[test]
fn tie_tolerance_is_relative() {
    let x = Stack::new(vec![vec![3.0, 4.0], vec![0.0, 0.0]]);
    assert!((default_tie_tol(&x) - 1e-5 * 3.5).abs() < 1e-18);
    assert_eq!(num_distinct_models(&stack1(&[100.0, 100.0 + 1e-4, 0.0]), 1e-6), 2);
    assert_eq!(num_distinct_models(&stack1(&[100.0, 100.0 + 1e-3, 0.0]), 1e-6), 3);
}

#[test]
fn within_cluster_distance_averages_pairs() {
    let x = stack1(&[0.0, 1.0, 3.0, 10.0, 12.0, 7.0]);
    let part = Partition::from_labels(&[0, 0, 0, 1, 1, 2]);
    // cluster 0: (1 + 3 + 2) / 3, cluster 1: 2, singletons skipped
    assert!((within_cluster_distance(&x, &part) - 2.0).abs() < 1e-15);
}

#[test]
fn two_user_path_fuses_at_threshold() {
    let p = two_point(0.1, Convention::SUM_ORDERED);
    let cfg = PathConfig {
        lambda_init: Some(0.1),
        growth_c: 2.0,
        ..PathConfig::default()
    };
    let path = solution_path(&p, &cfg).unwrap();
    let got: Vec<(f64, usize)> = path.entries.iter().map(|e| (e.lambda, e.num_clusters)).collect();
    assert_eq!(got, vec![(0.1, 2), (0.2, 2), (0.4, 2), (0.8, 2), (1.6, 1)]);
    assert!(path.entries.iter().all(|e| e.converged));
}

#[test]
fn identical_losses_fuse_immediately() {
    let p = quad(&vec![vec![1.0, -1.0]; 4], son(1.0), Convention::SUM_ORDERED);
    let path = solution_path(&p, &PathConfig::default()).unwrap();
    assert_eq!(path.entries.len(), 1);
    assert_eq!(path.entries[0].num_clusters, 1);
    assert_eq!(path.entries[0].lambda, default_lambda_init(&p).unwrap());
}

#[test]
fn recovery_segment_meets_interval() {
    let mut anchors = Vec::new();
    for c in [0.0, 8.0, 16.0] {
        for o in [0.0, 0.05, 0.2, 0.1] {
            anchors.push(vec![c + o]);
        }
    }
    let part = Partition::from_labels(&[0, 0, 0, 0, 1, 1, 1, 1, 2, 2, 2, 2]);
    let p = quad(&anchors, son(1.0), Convention::SUM_ORDERED);
    let prof = assumption3_profile(&p, &part, &[]).unwrap();
    let (lo, hi) = theorem3_interval(&prof, &part, Convention::SUM_ORDERED).unwrap();
    let path = solution_path(
        &p,
        &PathConfig {
            growth_c: 1.2,
            ..PathConfig::default()
        },
    )
    .unwrap();
    let three: Vec<usize> = (0..path.entries.len())
        .filter(|&r| path.entries[r].num_clusters == 3)
        .collect();
    assert!(!three.is_empty());
    assert!(three.windows(2).all(|w| w[1] == w[0] + 1), "not contiguous");
    for &r in &three {
        assert!(path.entries[r].partition.same_grouping(&part));
    }
    let (a, b) = (
        path.entries[three[0]].lambda,
        path.entries[*three.last().unwrap()].lambda,
    );
    assert!(a <= hi && lo <= b, "[{a}, {b}] vs [{lo}, {hi}]");
}

#[test]
fn cluster_counts_never_increase() {
    for seed in 0..8 {
        let pl = planted(seed, &[3, 2, 4], 2, 0.6, 3.0);
        let p = quad(&pl.anchors, son(1.0), Convention::SUM_ORDERED);
        let path = solution_path(&p, &PathConfig::default()).unwrap();
        let counts: Vec<usize> = path.entries.iter().map(|e| e.num_clusters).collect();
        assert_eq!(*counts.last().unwrap(), 1, "seed {seed}");
        assert!(counts.windows(2).all(|w| w[1] <= w[0]), "seed {seed}: {counts:?}");
    }
}

#[test]
fn warm_and_cold_solves_agree() {
    let pl = planted(2, &[3, 3], 2, 0.6, 3.0);
    let p = quad(&pl.anchors, son(1.0), Convention::SUM_ORDERED);
    let path = solution_path(&p, &PathConfig::default()).unwrap();
    for e in &path.entries {
        let cold = solve_reference(&p.with_penalty(son(e.lambda)).unwrap(), &OracleConfig::default()).unwrap();
        assert!((cold.objective_value - e.objective).abs() <= 1e-6);
    }
}

#[test]
fn pdmm_path_runs() {
    let pl = planted(1, &[2, 2], 2, 0.2, 3.0);
    let p = quad(&pl.anchors, son(1.0), Convention::SUM_ORDERED);
    let cfg = PathConfig {
        lambda_init: Some(0.05),
        growth_c: 3.0,
        max_steps: 6,
        solver: PathSolver::Pdmm(PdmmConfig::damped(4, 0.4, 3000, 0)),
        ..PathConfig::default()
    };
    let path = solution_path(&p, &cfg).unwrap();
    assert!(!path.entries.is_empty());
    assert_eq!(path.entries.last().unwrap().num_clusters, 1);
    let lines = path.to_json_lines();
    assert_eq!(lines.lines().count(), path.entries.len());
    assert!(path.summary_csv().starts_with("lambda,num_clusters,objective\n"));
}

#[test]
fn path_config_is_validated() {
    let p = two_point(1.0, Convention::SUM_ORDERED);
    for cfg in [
        PathConfig {
            growth_c: 1.0,
            ..PathConfig::default()
        },
        PathConfig {
            lambda_init: Some(0.0),
            ..PathConfig::default()
        },
        PathConfig {
            tie_tol: Some(-1.0),
            ..PathConfig::default()
        },
        PathConfig {
            max_steps: 0,
            ..PathConfig::default()
        },
    ] {
        assert!(solution_path(&p, &cfg).is_err());
    }
    let local = p.with_penalty(sonfed_core::PenaltyKind::LocalOnly).unwrap();
    assert!(solution_path(&local, &PathConfig::default()).is_err());
}

proptest! {
    #[test]
    fn extraction_is_permutation_equivariant(
        vals in prop::collection::vec(0u8..6, 2..12),
        perm_seed in any::<u64>(),
    ) {
        use rand::seq::SliceRandom;
        let x = Stack::new(vals.iter().map(|&v| vec![f64::from(v), 0.5 * f64::from(v)]).collect());
        let mut perm: Vec<usize> = (0..vals.len()).collect();
        perm.shuffle(&mut rng(perm_seed));
        let y = Stack::new(perm.iter().map(|&i| x[i].clone()).collect());
        let px = extract_partition(&x, 1e-9);
        let py = extract_partition(&y, 1e-9);
        let lx = px.labels();
        let ly = py.labels();
        prop_assert_eq!(px.num_blocks(), py.num_blocks());
        for a in 0..perm.len() {
            for b in 0..perm.len() {
                prop_assert_eq!(ly[a] == ly[b], lx[perm[a]] == lx[perm[b]]);
            }
        }
    }
}
