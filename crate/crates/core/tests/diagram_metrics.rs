use proptest::prelude::*;

use ppmreg::geometry::{PointCloud, RngStream};
use ppmreg::ppm::{compute_ppm_from_subsamples, draw_subsamples, OmegaPoint, PersistenceMeasure};
use ppmreg::transport::{omega_distance, wasserstein2_diagrams, wasserstein2_ppm};
use ppmreg::verify::brute_force_diagram_distance;
use ppmreg::vr::PersistenceDiagram;

fn point_strategy() -> impl Strategy<Value = OmegaPoint> {
    prop_oneof![
        1 => Just(OmegaPoint::Trivial),
        5 => (-2.0f64..2.0, 0.001f64..2.0).prop_map(|(b, l)| OmegaPoint::feature(b, l)),
    ]
}

fn pairs_strategy(max: usize) -> impl Strategy<Value = Vec<(f64, f64)>> {
    prop::collection::vec((0.0f64..1.0, 0.01f64..1.0), 0..=max)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(500))]

    #[test]
    fn omega_distance_is_a_metric(x in point_strategy(), y in point_strategy(), z in point_strategy()) {
        let xy = omega_distance(&x, &y);
        prop_assert!((xy - omega_distance(&y, &x)).abs() <= 1e-12);
        prop_assert!(omega_distance(&x, &x) <= 1e-12);
        prop_assert!(xy <= omega_distance(&x, &z) + omega_distance(&z, &y) + 1e-12);
        prop_assert!(xy >= 0.0);
    }

    #[test]
    fn diagram_distance_matches_brute_force(a in pairs_strategy(5), b in pairs_strategy(5)) {
        let (da, db) = (PersistenceDiagram::from_pairs(1, &a), PersistenceDiagram::from_pairs(1, &b));
        let w = wasserstein2_diagrams(&da, &db).unwrap();
        prop_assert!((w - brute_force_diagram_distance(&a, &b)).abs() <= 1e-10);
        let empty = PersistenceDiagram::empty(1);
        let via_empty = wasserstein2_diagrams(&da, &empty).unwrap() + wasserstein2_diagrams(&empty, &db).unwrap();
        prop_assert!(w <= via_empty + 1e-12);
        prop_assert!((w - wasserstein2_diagrams(&db, &da).unwrap()).abs() <= 1e-12);
    }
}

#[test]
fn worked_examples() {
    let d = |p: &[(f64, f64)]| PersistenceDiagram::from_pairs(1, p);
    assert_eq!(
        wasserstein2_diagrams(&d(&[(0.0, 1.0), (0.2, 0.4)]), &d(&[(0.0, 1.0), (0.2, 0.4)]))
            .unwrap(),
        0.0
    );
    assert!((wasserstein2_diagrams(&d(&[(0.0, 2.0)]), &d(&[])).unwrap() - 2.0).abs() < 1e-15);
    assert!(
        (wasserstein2_diagrams(&d(&[(0.0, 1.0)]), &d(&[(0.3, 1.0)])).unwrap() - 0.3).abs() < 1e-12
    );
    let m1 = PersistenceMeasure::from_entries(
        1,
        vec![OmegaPoint::feature(0.0, 1.0), OmegaPoint::Trivial],
    );
    let m2 = PersistenceMeasure::from_entries(1, vec![OmegaPoint::Trivial; 2]);
    assert!((wasserstein2_ppm(&m1, &m2).unwrap() - 0.5f64.sqrt()).abs() < 1e-15);
}

/// With the subsample indices held fixed, moving every point by at most
/// `δ` moves each birth by at most `2δ` and each lifetime by at most `4δ`,
/// so the identity coupling bounds the distance by `√20·δ`. Across
/// perturbation sizes the distance per unit of `ε` also stays level.
#[test]
fn ppm_distance_grows_at_most_linearly_in_the_perturbation() {
    let mut rng = RngStream::new(17);
    for seed in 0..8u64 {
        let coords: Vec<f64> = (0..120)
            .map(|_| rand::Rng::random::<f64>(&mut rng) * 2.0 - 1.0)
            .collect();
        let cloud = PointCloud::from_flat(2, coords).unwrap();
        let noise: Vec<f64> = (0..120)
            .map(|_| rand::Rng::random::<f64>(&mut rng) * 2.0 - 1.0)
            .collect();
        let mut slopes = Vec::new();
        for q in 0..2 {
            let set =
                draw_subsamples(cloud.len(), q, 400, false, &mut RngStream::new(seed)).unwrap();
            let base = compute_ppm_from_subsamples(&cloud, &set).unwrap();
            for eps in [0.01, 0.02, 0.05] {
                let delta: Vec<f64> = noise.iter().map(|v| eps * v).collect();
                let moved = cloud.displaced(&delta).unwrap();
                let max_shift = (0..cloud.len())
                    .map(|i| ppmreg::geometry::euclidean(cloud.point(i), moved.point(i)))
                    .fold(0.0, f64::max);
                let w =
                    wasserstein2_ppm(&base, &compute_ppm_from_subsamples(&moved, &set).unwrap())
                        .unwrap();
                assert!(
                    w <= 20f64.sqrt() * max_shift + 1e-12,
                    "q={q} eps={eps}: {w} vs shift {max_shift}"
                );
                slopes.push((q, w / eps));
            }
        }
        for q in 0..2 {
            let s: Vec<f64> = slopes
                .iter()
                .filter(|(d, _)| *d == q)
                .map(|(_, v)| *v)
                .collect();
            let smallest = s.iter().copied().fold(f64::INFINITY, f64::min);
            let largest = s.iter().copied().fold(0.0, f64::max);
            assert!(largest <= 3.0 * smallest + 1e-9, "q={q}: slopes {s:?}");
        }
    }
}
