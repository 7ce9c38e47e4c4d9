use proptest::prelude::*;

use ppmreg::geometry::{
    generate_shape, pairwise_distances, CircleSampling, PointCloud, RngStream, ShapeSpec,
};
use ppmreg::vr::{vr_persistence, vr_persistence_capped};

fn cloud_strategy(max: usize) -> impl Strategy<Value = PointCloud> {
    (3..=max)
        .prop_flat_map(|n| prop::collection::vec(-1.0f64..1.0, 2 * n))
        .prop_map(|c| PointCloud::from_flat(2, c).unwrap())
}

fn sorted(mut v: Vec<(f64, f64)>) -> Vec<(f64, f64)> {
    v.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)));
    v
}

fn is_distance(d: f64, cloud: &PointCloud) -> bool {
    let n = cloud.len();
    (0..n).any(|i| (i + 1..n).any(|j| (cloud.dist(i, j) - d).abs() <= 1e-12))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn dim0_pairs_count_n_minus_one(cloud in cloud_strategy(20)) {
        let r = vr_persistence_capped(&cloud, 0, 1024).unwrap();
        prop_assert_eq!(r.diagrams[0].len() + r.dropped[0], cloud.len() - 1);
    }

    #[test]
    fn filtration_values_are_distances(cloud in cloud_strategy(14)) {
        let diagrams = vr_persistence(&cloud, 1).unwrap();
        for p in &diagrams[1].points {
            prop_assert!(is_distance(p.birth, &cloud));
            prop_assert!(is_distance(p.birth + p.lifetime, &cloud));
            let (i, j) = p.birth_edge.unwrap();
            prop_assert!((cloud.dist(i, j) - p.birth).abs() <= 1e-12);
            let (k, h) = p.death_edge;
            prop_assert!((cloud.dist(k, h) - (p.birth + p.lifetime)).abs() <= 1e-12);
        }
        for p in &diagrams[0].points {
            prop_assert_eq!(p.birth, 0.0);
            prop_assert!(is_distance(p.lifetime, &cloud));
        }
    }

    #[test]
    fn permuting_points_leaves_diagrams_unchanged(cloud in cloud_strategy(14), seed in any::<u64>()) {
        let mut order: Vec<usize> = (0..cloud.len()).collect();
        rand::seq::SliceRandom::shuffle(order.as_mut_slice(), &mut RngStream::new(seed));
        let shuffled = cloud.select(&order);
        let (a, b) = (vr_persistence(&cloud, 1).unwrap(), vr_persistence(&shuffled, 1).unwrap());
        for q in 0..2 {
            let (pa, pb) = (sorted(a[q].pairs()), sorted(b[q].pairs()));
            prop_assert_eq!(pa.len(), pb.len());
            for (x, y) in pa.iter().zip(&pb) {
                prop_assert!((x.0 - y.0).abs() < 1e-12 && (x.1 - y.1).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn square_diagrams() {
    let square = PointCloud::new(vec![
        vec![0.0, 0.0],
        vec![1.0, 0.0],
        vec![1.0, 1.0],
        vec![0.0, 1.0],
    ])
    .unwrap();
    let d = vr_persistence(&square, 1).unwrap();
    assert_eq!(d[0].sorted_pairs(), vec![(0.0, 1.0); 3]);
    let dim1 = d[1].pairs();
    assert_eq!(dim1.len(), 1);
    assert!((dim1[0].0 - 1.0).abs() < 1e-15 && (dim1[0].1 - (2f64.sqrt() - 1.0)).abs() < 1e-15);
}

#[test]
fn circle_of_256_points_is_fast_and_has_one_dominant_cycle() {
    let spec = ShapeSpec::Circle {
        count: 256,
        radius: 1.0,
        center: vec![0.0, 0.0],
        sampling: CircleSampling::Random,
    };
    let cloud = generate_shape(&spec, &mut RngStream::new(3)).unwrap();
    let start = std::time::Instant::now();
    let d = vr_persistence(&cloud, 1).unwrap();
    assert!(start.elapsed().as_secs_f64() < 10.0);
    assert_eq!(d[1].points.iter().filter(|p| p.lifetime > 0.5).count(), 1);
    assert_eq!(pairwise_distances(&cloud).unwrap().size(), 256);
}
