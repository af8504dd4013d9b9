use nalgebra::{Matrix3, Vector3};
use nashflow::geometry::{Ellipsoid, EmbeddedManifold, Sphere};
use nashflow::harness::{coefficients_csv, read_coefficients_csv};
use nashflow::rng::StreamId;
use nashflow::spectral::{n_coeffs, SpectralField, SphericalGrid};
use nashflow::stochastic::{PathState, TensorChoice};
use proptest::prelude::*;

fn unit() -> impl Strategy<Value = Vector3<f64>> {
    (-1.0..1.0f64, -1.0..1.0f64, -1.0..1.0f64)
        .prop_filter("away from the origin", |(a, b, c)| a * a + b * b + c * c > 0.05)
        .prop_map(|(a, b, c)| Vector3::new(a, b, c).normalize())
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 64, failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn projector_is_an_orthogonal_projection(x in unit()) {
        let s = Sphere::<f64, 3>::new();
        let p = s.projector(&x);
        prop_assert!((p * p - p).norm() < 1e-14);
        prop_assert!((p - p.transpose()).norm() < 1e-15);
        prop_assert!((p * s.normal(&x)).norm() < 1e-15);
    }

    #[test]
    fn ellipsoid_projection_lands_on_the_surface(x in unit(), r in 0.7..1.8f64) {
        let e = Ellipsoid::ellipsoid([1.0, 1.5, 2.0]).unwrap();
        let y = e.project_point(&(x * r)).unwrap();
        prop_assert!(e.membership_residual(&y).abs() < 1e-10);
        let n = e.normal(&y);
        prop_assert!((n.norm() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn shape_operator_is_self_adjoint_on_the_ellipsoid(x in unit(), a in unit(), b in unit()) {
        let e = Ellipsoid::ellipsoid([1.0, 1.0, 2.0]).unwrap();
        let y = e.project_point(&x).unwrap();
        let p = e.projector(&y);
        let (u, v) = (p * a, p * b);
        let n = e.normal(&y);
        let lhs = e.shape_raw(&y, &u, &n).dot(&v);
        let rhs = e.shape_raw(&y, &v, &n).dot(&u);
        prop_assert!((lhs - rhs).abs() < 1e-6);
    }

    #[test]
    fn spectral_round_trip(coeffs in proptest::collection::vec(-1.0..1.0f64, n_coeffs(5))) {
        let grid = SphericalGrid::<f64>::new(5, 8, 16).unwrap();
        let mut f = SpectralField::zeros(5);
        for (i, c) in coeffs.iter().enumerate().skip(1) {
            f.curl[i] = *c;
        }
        let back = grid.analyze(&grid.synthesize(&f).unwrap()).unwrap();
        prop_assert!(back.distance(&f) < 1e-12);
    }

    #[test]
    fn generator_is_similarity_invariant(x0 in unit(), c in 0.1..10.0f64, seed in 0u64..1000) {
        let mut p = PathState::new(x0, 1.0, StreamId::new(seed, 0, 0, 0));
        let k = p.generator(&TensorChoice::TwoT1).unwrap();
        p.j *= c;
        let kc = p.generator(&TensorChoice::TwoT1).unwrap();
        prop_assert!((k - kc).norm() < 1e-12 * k.norm().max(1.0));
        let lam = Matrix3::identity() - x0 * x0.transpose();
        prop_assert!((p.tangent_inverse().unwrap() * p.j - lam).norm() < 1e-12);
    }

    #[test]
    fn coefficient_csv_round_trips(coeffs in proptest::collection::vec(-1e3..1e3f64, n_coeffs(4))) {
        let mut f = SpectralField::zeros(4);
        for (i, c) in coeffs.iter().enumerate().skip(1) {
            f.curl[i] = *c;
        }
        let text = coefficients_csv("id", &f, None);
        let (_, rows) = read_coefficients_csv(&text).unwrap();
        prop_assert_eq!(rows.len(), n_coeffs(4) - 1);
        let again = coefficients_csv("id", &f, None);
        prop_assert_eq!(text, again);
    }
}
