//! Sampled invariants of the product metric and the distance-softmax classifier.

use geocl::geometry::Curvature;
use geocl::model::class_probs;
use geocl::product::{self, FactorSpec, MixedSpace};
use proptest::prelude::*;

fn space(curvatures: &[f64], dims: &[usize]) -> MixedSpace {
    let mut start = 1;
    let factors = curvatures
        .iter()
        .zip(dims)
        .enumerate()
        .map(|(i, (&k, &d))| {
            let f = FactorSpec {
                pool_index: i,
                slice_start: start,
                slice_end: start + d - 1,
                curvature: Curvature::new(k).unwrap(),
                weight: 1.0,
            };
            start += d;
            f
        })
        .collect();
    MixedSpace::new(factors).unwrap()
}

fn curvature() -> impl Strategy<Value = f64> {
    prop_oneof![(-2.0..-0.1f64), (0.1..2.0f64)]
}

/// Features small enough to stay inside every factor's injectivity radius.
fn feature(dim: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-0.3..0.3f64, dim)
}

proptest! {
    #[test]
    fn product_distance_is_sum_of_factor_distances(
        k1 in curvature(), k2 in curvature(), x in feature(5), y in feature(5)
    ) {
        let whole = space(&[k1, k2], &[2, 3]);
        let (a, b) = (space(&[k1], &[2]), space(&[k2], &[3]));
        let d = product::product_sq_distance(&product::lift(&x, &whole).unwrap(), &product::lift(&y, &whole).unwrap()).unwrap();
        let da = product::product_sq_distance(&product::lift(&x[..2], &a).unwrap(), &product::lift(&y[..2], &a).unwrap()).unwrap();
        let db = product::product_sq_distance(&product::lift(&x[2..], &b).unwrap(), &product::lift(&y[2..], &b).unwrap()).unwrap();
        prop_assert!((d - da - db).abs() <= 1e-12 * (1.0 + d));
    }

    #[test]
    fn product_metric_is_symmetric_and_satisfies_triangle(
        k1 in curvature(), k2 in curvature(), x in feature(4), y in feature(4), z in feature(4)
    ) {
        let s = space(&[k1, k2], &[1, 3]);
        let (px, py, pz) = (product::lift(&x, &s).unwrap(), product::lift(&y, &s).unwrap(), product::lift(&z, &s).unwrap());
        let d = |a, b| product::product_sq_distance(a, b).unwrap().sqrt();
        prop_assert!((d(&px, &py) - d(&py, &px)).abs() <= 1e-12);
        prop_assert!(d(&px, &pz) <= d(&px, &py) + d(&py, &pz) + 1e-9);
        prop_assert_eq!(d(&px, &px), 0.0);
    }

    #[test]
    fn tangent_angle_ignores_curvature(
        k in curvature(), scale in 1.5..10.0f64, x in feature(3), y in feature(3)
    ) {
        prop_assume!(x.iter().any(|v| v.abs() > 1e-3) && y.iter().any(|v| v.abs() > 1e-3));
        let k2 = (k * scale).clamp(-20.0, 20.0);
        let norm = |v: &[f64]| v.iter().map(|c| c * c).sum::<f64>().sqrt();
        // Spheres are only injective below s‖v‖ = π/2.
        prop_assume!(k2.abs().sqrt() * norm(&x).max(norm(&y)) < 1.5);
        let angle = |k: f64| {
            let s = space(&[k], &[3]);
            let qx = product::product_log0(&product::lift(&x, &s).unwrap()).unwrap();
            let qy = product::product_log0(&product::lift(&y, &s).unwrap()).unwrap();
            product::product_angle(&qx, &qy).unwrap()
        };
        prop_assert!((angle(k) - angle(k2)).abs() <= 1e-9);
    }

    #[test]
    fn class_probabilities_lie_on_the_simplex(
        k1 in curvature(), k2 in curvature(), x in feature(4),
        ws in prop::collection::vec(feature(4), 1..6)
    ) {
        let s = space(&[k1, k2], &[2, 2]);
        let p = product::lift(&x, &s).unwrap();
        let w: Vec<_> = ws.iter().map(|w| product::lift(w, &s).unwrap()).collect();
        let probs = class_probs(&p, &w).unwrap();
        prop_assert!(probs.iter().all(|&v| v >= 0.0));
        prop_assert!((probs.iter().sum::<f64>() - 1.0).abs() <= 1e-9);
        // The nearest prototype is the most probable class.
        let d: Vec<f64> = w.iter().map(|wl| product::product_sq_distance(&p, wl).unwrap()).collect();
        let nearest = (0..d.len()).min_by(|&a, &b| d[a].total_cmp(&d[b])).unwrap();
        let top = probs.iter().cloned().fold(0.0, f64::max);
        prop_assert!((probs[nearest] - top).abs() <= 1e-12);
    }
}
