use proptest::prelude::*;

use qoverlay::apps::{
    parallel_las_vegas_search, probe_order, probe_sets, split_circular, split_unfolded, to_fraction, Partition,
    SharedRandom, UnitPoint,
};

fn exactly_one(p: &Partition, x: &UnitPoint) -> bool {
    let hits: Vec<usize> = p
        .regions()
        .iter()
        .filter(|r| r.contains(x).unwrap())
        .map(|r| r.index())
        .collect();
    hits.len() == 1 && hits[0] == p.locate(x).unwrap()
}

proptest! {
    #[test]
    fn circular_regions_cover_once(r in 0.0..1.0f64, parts in 2usize..9, u in 0.0..1.0f64) {
        let p = split_circular(r, parts).unwrap();
        prop_assert!(exactly_one(&p, &UnitPoint::new(vec![u]).unwrap()));
    }

    #[test]
    fn arc_starts_belong_to_their_region(r in 0.0..1.0f64, parts in 2usize..9) {
        let p = split_circular(r, parts).unwrap();
        for region in p.regions() {
            let x = UnitPoint::new(vec![region.start()]).unwrap();
            prop_assert_eq!(p.locate(&x).unwrap(), region.index());
        }
    }

    #[test]
    fn unfolded_measures_sum_to_one(r in 0.0..1.0f64, parts in 2usize..7, d in 1usize..4, res in 8u64..40) {
        let p = split_unfolded(r, parts, d, res).unwrap();
        let total: f64 = p.regions().iter().map(|g| g.measure()).sum();
        prop_assert!((total - 1.0).abs() < 1e-12);
        for g in p.regions() {
            prop_assert!((g.measure() - 1.0 / parts as f64).abs() <= p.quantization() + 1e-12);
        }
    }

    #[test]
    fn unfolded_points_land_once(
        r in 0.0..1.0f64,
        parts in 2usize..6,
        x in proptest::collection::vec(0.0..1.0f64, 3),
    ) {
        let p = split_unfolded(r, parts, 3, 16).unwrap();
        prop_assert!(exactly_one(&p, &UnitPoint::new(x).unwrap()));
    }

    #[test]
    fn fractions_stay_below_one(k in 1u32..=64, v in any::<u64>()) {
        let v = if k == 64 { v } else { v & ((1 << k) - 1) };
        let f = to_fraction(SharedRandom::new(v, k).unwrap());
        prop_assert!((0.0..1.0).contains(&f));
    }

    #[test]
    fn probe_sets_are_a_disjoint_cover(v in any::<u32>(), n in 1usize..300, nodes in 1usize..8) {
        let shared = SharedRandom::new(v as u64, 32).unwrap();
        let sets = probe_sets(n, shared, nodes).unwrap();
        let mut all: Vec<usize> = sets.concat();
        all.sort();
        prop_assert_eq!(all, (0..n).collect::<Vec<_>>());
        let order = probe_order(n, shared);
        prop_assert_eq!(order, probe_order(n, shared));
    }

    #[test]
    fn search_finds_the_target(v in any::<u32>(), n in 1usize..500, t in any::<prop::sample::Index>(), nodes in 1usize..6) {
        let target = t.index(n);
        let shared = SharedRandom::new(v as u64, 32).unwrap();
        let out = parallel_las_vegas_search(n, &|i| i == target, shared, nodes).unwrap();
        prop_assert_eq!(out.index, target);
        let single = parallel_las_vegas_search(n, &|i| i == target, shared, 1).unwrap();
        prop_assert!(out.rounds <= single.rounds);
    }
}

#[test]
fn search_without_a_match_is_an_error() {
    let shared = SharedRandom::new(5, 8).unwrap();
    assert!(parallel_las_vegas_search(100, &|_| false, shared, 3).is_err());
}
