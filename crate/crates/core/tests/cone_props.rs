use orbm_core::cone::{contains, embed, inward_normal, invert, least_push, ConeParams, Point, QCoords};
use proptest::prelude::*;

fn log_uniform_q(d: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-4.0f64..2.0, d).prop_map(|v| v.into_iter().map(|e| 10f64.powf(e)).collect())
}

fn params() -> impl Strategy<Value = ConeParams> {
    (2usize..=5, 1.0f64..3.0, 0.5f64..20.0).prop_map(|(d, a, mu)| ConeParams::new(d, a, mu).unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn round_trip(q in log_uniform_q(3), mu in prop::sample::select(vec![1.0, 3.0, 10.0])) {
        let p = ConeParams::example(mu).unwrap();
        let x = embed(&QCoords(q.clone()), &p);
        let (back, faces) = invert(&x, &p).unwrap();
        let qmax = q.iter().cloned().fold(0.0, f64::max);
        for (a, b) in back.0.iter().zip(&q) {
            prop_assert!((a - b).abs() <= 1e-8 * (1.0 + qmax));
        }
        prop_assert!(faces.is_interior());
    }

    #[test]
    fn embedded_points_are_in_positive_orthant(p in params(), seed in any::<u64>()) {
        let q: Vec<f64> = (0..p.d).map(|j| ((seed >> (j * 7)) % 97) as f64 / 10.0).collect();
        prop_assume!(q.iter().sum::<f64>() > 0.0);
        let x = embed(&QCoords(q), &p);
        prop_assert!(contains(&x.0, &p));
        prop_assert!(x.0.iter().all(|&v| v > 0.0));
    }

    #[test]
    fn normals_on_faces(q in log_uniform_q(3), h in 0usize..3, mu in 1.0f64..20.0, r in prop::sample::select(vec![0.1, 1.0, 10.0])) {
        let p = ConeParams::example(mu).unwrap();
        let mut q = q;
        q[h] = 0.0;
        let x = embed(&QCoords(q), &p);
        let n = inward_normal(h, &x, &p).unwrap();
        let len = n.iter().map(|v| v * v).sum::<f64>().sqrt();
        prop_assert!((len - 1.0).abs() <= 1e-10);
        let radial: f64 = n.iter().zip(&x.0).map(|(a, b)| a * b).sum::<f64>() / x.norm();
        prop_assert!(radial.abs() <= 1e-10);
        prop_assert!(n[h] > 0.0);
        let n2 = inward_normal(h, &x.scaled(r), &p).unwrap();
        for (a, b) in n.iter().zip(&n2) {
            prop_assert!((a - b).abs() <= 1e-10);
        }
        let (_, f1) = invert(&x, &p).unwrap();
        let (_, f2) = invert(&x.scaled(r), &p).unwrap();
        prop_assert_eq!(f1.active, f2.active);
    }

    #[test]
    fn least_push_lands_in_cone(p in params(), x in prop::collection::vec(-2.0f64..2.0, 5)) {
        let x = Point(x[..p.d].to_vec());
        let u = least_push(&x.0, &p).unwrap();
        prop_assert!(u.iter().all(|&v| v >= 0.0));
        let y: Vec<f64> = x.0.iter().zip(&u).map(|(a, b)| a + b).collect();
        prop_assert!(contains(&y, &p));
        if contains(&x.0, &p) {
            prop_assert!(u.iter().all(|&v| v == 0.0));
        }
    }
}
