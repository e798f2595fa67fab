use proptest::prelude::*;
use sonfed_core::linalg::{dist, norm, sub};
use sonfed_core::losses::{loss_grad, loss_value};
use sonfed_core::{LabeledPoint, LossSpec};

fn central_diff(f: &LossSpec, x: &[f64], h: f64) -> Vec<f64> {
    (0..x.len())
        .map(|k| {
            let mut p = x.to_vec();
            let mut m = x.to_vec();
            p[k] += h;
            m[k] -= h;
            (f.value(&p).unwrap() - f.value(&m).unwrap()) / (2.0 * h)
        })
        .collect()
}

fn hinge_strategy() -> impl Strategy<Value = LossSpec> {
    (
        prop::collection::vec((prop::collection::vec(-3.0..3.0f64, 2), any::<bool>()), 1..12),
        0.0..1.0f64,
    )
        .prop_map(|(pts, c)| {
            let pts = pts
                .into_iter()
                .map(|(x, pos)| LabeledPoint::new(x, if pos { 1 } else { -1 }))
                .collect();
            LossSpec::squared_hinge(pts, c).unwrap()
        })
}

fn loss_strategy() -> impl Strategy<Value = LossSpec> {
    prop_oneof![
        prop::collection::vec(-5.0..5.0f64, 3).prop_map(|a| LossSpec::quadratic(a).unwrap()),
        (prop::collection::vec(-5.0..5.0f64, 3), 0.1..3.0f64).prop_map(|(a, d)| LossSpec::huber(a, d).unwrap()),
        hinge_strategy(),
    ]
}

fn point_for(f: &LossSpec) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-6.0..6.0f64, f.dim())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn gradient_matches_central_differences((f, x) in loss_strategy().prop_flat_map(|f| { let s = point_for(&f); (Just(f), s) })) {
        let g = loss_grad(&f, &x).unwrap();
        let fd = central_diff(&f, &x, 1e-6);
        let err = dist(&g, &fd);
        prop_assert!(err <= 1e-4 * norm(&g).max(1.0), "g {g:?} fd {fd:?}");
    }

    #[test]
    fn gradient_is_lipschitz((f, x, y) in loss_strategy().prop_flat_map(|f| { let a = point_for(&f); let b = point_for(&f); (Just(f), a, b) })) {
        let gx = f.grad(&x).unwrap();
        let gy = f.grad(&y).unwrap();
        prop_assert!(dist(&gx, &gy) <= f.lipschitz() * dist(&x, &y) * (1.0 + 1e-9) + 1e-15);
    }

    #[test]
    fn midpoint_convexity((f, x, y) in loss_strategy().prop_flat_map(|f| { let a = point_for(&f); let b = point_for(&f); (Just(f), a, b) })) {
        let mid: Vec<f64> = x.iter().zip(&y).map(|(a, b)| 0.5 * (a + b)).collect();
        let lhs = f.value(&mid).unwrap();
        let rhs = 0.5 * f.value(&x).unwrap() + 0.5 * f.value(&y).unwrap();
        prop_assert!(lhs <= rhs + 1e-12 * (1.0 + rhs.abs()));
    }

    #[test]
    fn quadratic_gradient_gap_is_constant(
        a in prop::collection::vec(-5.0..5.0f64, 2),
        b in prop::collection::vec(-5.0..5.0f64, 2),
        x in prop::collection::vec(-9.0..9.0f64, 2),
    ) {
        let fa = LossSpec::quadratic(a.clone()).unwrap();
        let fb = LossSpec::quadratic(b.clone()).unwrap();
        let gap = sub(&fa.grad(&x).unwrap(), &fb.grad(&x).unwrap());
        let want = sub(&b, &a);
        prop_assert!(dist(&gap, &want) <= 1e-12);
    }

    #[test]
    fn hinge_curvature_metadata(f in hinge_strategy()) {
        let sonfed_core::LossKind::SquaredHinge { reg_c, points } = f.kind().clone() else { unreachable!() };
        if reg_c > 0.0 {
            prop_assert!(f.strong_mu().unwrap() >= reg_c);
        }
        // power iteration on the augmented Gram matrix
        let rows: Vec<Vec<f64>> = points.iter().map(|p| {
            let l = f64::from(p.label);
            vec![l * p.x[0], l * p.x[1], -l]
        }).collect();
        let mut v = vec![1.0, 0.7, 0.3];
        let mut lam = 0.0;
        for _ in 0..2000 {
            let mut w = [0.0; 3];
            for r in &rows {
                let s: f64 = r.iter().zip(&v).map(|(a, b)| a * b).sum();
                for k in 0..3 { w[k] += s * r[k]; }
            }
            lam = norm(&w) / norm(&v);
            let nw = norm(&w);
            if nw == 0.0 { break; }
            v = w.iter().map(|x| x / nw).collect();
        }
        let want = reg_c + 2.0 / rows.len() as f64 * lam;
        prop_assert!((f.lipschitz() - want).abs() <= 1e-6 * want.max(1.0), "{} vs {}", f.lipschitz(), want);
    }
}

#[test]
fn metadata_of_fixed_kinds() {
    let q = LossSpec::quadratic(vec![1.0, 2.0]).unwrap();
    assert_eq!((q.lipschitz(), q.strong_mu()), (1.0, Some(1.0)));
    let h = LossSpec::huber(vec![0.0], 0.5).unwrap();
    assert_eq!(h.lipschitz(), 1.0);
}

#[test]
fn hinge_gradient_single_point() {
    let f = LossSpec::squared_hinge(vec![LabeledPoint::new(vec![1.0, 0.0], 1)], 0.0).unwrap();
    let g = f.grad(&[0.0, 0.0, 0.0]).unwrap();
    assert_eq!(g, vec![-2.0, 0.0, 2.0]);
    let fd = central_diff(&f, &[0.0, 0.0, 0.0], 1e-6);
    assert!(dist(&g, &fd) <= 1e-4 * norm(&g));
}

#[test]
fn huber_value_matches_integrated_derivative() {
    let f = LossSpec::huber(vec![0.0], 1.0).unwrap();
    assert!((loss_value(&f, &[3.0]).unwrap() - 2.5).abs() < 1e-15);
    // trapezoid rule on the derivative min(|t|, 1) over [0, 3]
    let n = 300_000;
    let h = 3.0 / n as f64;
    let mut s = 0.0;
    for k in 0..=n {
        let t = k as f64 * h;
        let w = if k == 0 || k == n { 0.5 } else { 1.0 };
        s += w * t.min(1.0);
    }
    assert!((s * h - 2.5).abs() < 1e-8);
}

#[test]
fn huber_gradient_outside_zone() {
    let f = LossSpec::huber(vec![0.0], 1.0).unwrap();
    let g = f.grad(&[3.0]).unwrap();
    assert_eq!(g, vec![1.0]);
    let fd = central_diff(&f, &[3.0], 1e-6);
    assert!((fd[0] - 1.0).abs() < 1e-6);
}

#[test]
fn quadratic_gradient_is_displacement() {
    let f = LossSpec::quadratic(vec![1.0, -2.0]).unwrap();
    assert_eq!(f.grad(&[3.0, 0.0]).unwrap(), vec![2.0, 2.0]);
    assert_eq!(f.grad(&[1.0, -2.0]).unwrap(), vec![0.0, 0.0]);
}

#[test]
fn loss_specs_parse_from_json() {
    let f: LossSpec = serde_json::from_str(r#"{"kind":"huber","anchor":[1.0],"delta":2.0}"#).unwrap();
    assert_eq!(f.lipschitz(), 1.0);
    let g: LossSpec =
        serde_json::from_str(r#"{"kind":"squared_hinge","points":[{"x":[1.0],"label":-1}],"reg_c":0.5}"#).unwrap();
    assert_eq!(g.dim(), 2);
    assert!(serde_json::from_str::<LossSpec>(r#"{"kind":"huber","anchor":[1.0],"delta":0.0}"#).is_err());
}
