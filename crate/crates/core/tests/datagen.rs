use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sonfed_core::datagen::{generate, BenchmarkSpec, ClusterGeometry, EllipseSpec};

fn unit_circle() -> EllipseSpec {
    EllipseSpec {
        center: [1.5, -2.0],
        semi_axes: [1.0, 1.0],
        rotation: 0.3,
        label: 1,
    }
}

#[test]
fn single_cluster_pool_is_balanced() {
    let spec = BenchmarkSpec {
        clusters: ClusterGeometry::default_set()[..1].to_vec(),
        ..BenchmarkSpec::default()
    };
    let data = generate(&spec).unwrap();
    assert_eq!(data.cluster_train.len(), 1);
    let pool = &data.cluster_train[0];
    assert_eq!(pool.len(), 200);
    assert_eq!(pool.iter().filter(|p| p.label == 1).count(), 100);
}

#[test]
fn circle_samples_are_uniform() {
    let e = unit_circle();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let pts: Vec<[f64; 2]> = (0..10_000).map(|_| e.sample(&mut rng)).collect();
    let mean = [
        pts.iter().map(|p| p[0]).sum::<f64>() / 1e4,
        pts.iter().map(|p| p[1]).sum::<f64>() / 1e4,
    ];
    assert!((mean[0] - 1.5).abs() < 0.05 && (mean[1] + 2.0).abs() < 0.05);
    assert!(pts.iter().all(|&p| e.level(p) <= 1.0));
    // a uniform disk puts a quarter of its mass within half the radius
    let inner = pts.iter().filter(|p| (p[0] - 1.5).hypot(p[1] + 2.0) <= 0.5).count() as f64 / 1e4;
    assert!((inner - 0.25).abs() < 0.02, "{inner}");
}

#[test]
fn rotated_ellipse_level_matches_frame() {
    let e = EllipseSpec {
        center: [0.0, 0.0],
        semi_axes: [2.0, 1.0],
        rotation: std::f64::consts::FRAC_PI_2,
        label: -1,
    };
    // the long axis points along y after a quarter turn
    assert!((e.level([0.0, 2.0]) - 1.0).abs() < 1e-12);
    assert!((e.level([1.0, 0.0]) - 1.0).abs() < 1e-12);
    assert!(!e.contains([1.5, 0.0]));
}

#[test]
fn every_point_lies_in_its_ellipse() {
    let spec = BenchmarkSpec::default();
    let data = generate(&spec).unwrap();
    for (k, c) in spec.clusters.iter().enumerate() {
        for p in data.cluster_train[k].iter().chain(&data.cluster_test[k]) {
            let e = if p.label == 1 { &c.positive } else { &c.negative };
            assert!(e.level([p.x[0], p.x[1]]) <= 1.0 + 1e-12);
        }
    }
    assert!(spec.clusters.iter().all(|c| c.classes_overlap(0)));
}

#[test]
fn users_draw_from_their_cluster_pool() {
    let spec = BenchmarkSpec::default();
    let data = generate(&spec).unwrap();
    assert_eq!(data.user_datasets.len(), 60);
    assert_eq!(data.true_partition.num_blocks(), 3);
    for (u, ds) in data.user_datasets.iter().enumerate() {
        let k = data.user_cluster[u];
        assert_eq!(k, u / 20);
        assert_eq!(ds.len(), 10);
        for p in ds {
            assert!(data.cluster_train[k].contains(p));
        }
        // without replacement
        for a in 0..ds.len() {
            for b in a + 1..ds.len() {
                assert_ne!(ds[a], ds[b]);
            }
        }
    }
}

#[test]
fn sample_fraction_sets_user_size() {
    let spec = BenchmarkSpec {
        sample_fraction: Some(0.85),
        users_per_cluster: 4,
        ..BenchmarkSpec::default()
    };
    let data = generate(&spec).unwrap();
    assert!(data.user_datasets.iter().all(|d| d.len() == 170));
}

#[test]
fn generation_is_deterministic() {
    let spec = BenchmarkSpec {
        seed: 42,
        ..BenchmarkSpec::default()
    };
    let a = generate(&spec).unwrap();
    assert_eq!(a, generate(&spec).unwrap());
    assert_eq!(a.users_csv(), generate(&spec).unwrap().users_csv());
    assert_ne!(a, generate(&BenchmarkSpec { seed: 43, ..spec }).unwrap());
}

#[test]
fn exports() {
    let spec = BenchmarkSpec::default();
    let data = generate(&spec).unwrap();
    let users = data.users_csv();
    assert_eq!(users.lines().count(), 1 + 600);
    assert_eq!(users.lines().next().unwrap(), "x1,x2,label,cluster,user");
    assert_eq!(data.test_csv().lines().count(), 1 + 600);
    let json = serde_json::to_string(&data).unwrap();
    let back: sonfed_core::datagen::BenchmarkData = serde_json::from_str(&json).unwrap();
    assert_eq!(back, data);
    let spec_json = serde_json::to_string(&spec).unwrap();
    assert_eq!(serde_json::from_str::<BenchmarkSpec>(&spec_json).unwrap(), spec);
}

#[test]
fn bad_specs_rejected() {
    let mut spec = BenchmarkSpec::default();
    spec.clusters[0].positive.semi_axes = [0.0, 1.0];
    assert!(generate(&spec).is_err());
    let spec = BenchmarkSpec {
        points_per_user: 500,
        ..BenchmarkSpec::default()
    };
    assert!(generate(&spec).is_err());
    let spec = BenchmarkSpec {
        sample_fraction: Some(1.5),
        ..BenchmarkSpec::default()
    };
    assert!(generate(&spec).is_err());
    let spec = BenchmarkSpec {
        clusters: vec![],
        ..BenchmarkSpec::default()
    };
    assert!(generate(&spec).is_err());
}
