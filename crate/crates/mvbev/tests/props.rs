//! Property tests over the crate's structural invariants.

use mvbev::geometry::{warp_backward, warp_to_bev, BevGrid, ProjectionTable};
use mvbev::pseudolabel::{local_max, vanilla_nms};
use mvbev::tensor::Tensor;
use mvbev::tinynet::loss::gaussian_soft_target;
use mvbev::tinynet::optim::one_cycle_lr;
use mvbev::tinynet::OccupancyMap;
use proptest::prelude::*;

fn table_strategy(
    h_g: usize,
    w_g: usize,
    h_f: usize,
    w_f: usize,
) -> impl Strategy<Value = ProjectionTable> {
    proptest::collection::vec(
        proptest::option::weighted(
            0.7,
            (0..h_f as u32, 0..w_f as u32).prop_map(|(r, c)| (r, c)),
        ),
        h_g * w_g,
    )
    .prop_map(move |entries| ProjectionTable::from_entries(h_g, w_g, h_f, w_f, entries))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    /// Dyadic-valued tensors make the warp adjoint identity exact in f32.
    #[test]
    fn warp_adjoint_identity(
        (h_g, w_g, h_f, w_f, c) in (1usize..8, 1usize..8, 1usize..6, 1usize..6, 1usize..3),
        seed in any::<u64>(),
    ) {
        let mut rng = {
            use rand_chacha::rand_core::SeedableRng;
            rand_chacha::ChaCha8Rng::seed_from_u64(seed)
        };
        use rand::RngExt;
        let table = {
            let entries = (0..h_g * w_g)
                .map(|_| {
                    if rng.random_bool(0.3) {
                        None
                    } else {
                        Some((rng.random_range(0..h_f as u32), rng.random_range(0..w_f as u32)))
                    }
                })
                .collect();
            ProjectionTable::from_entries(h_g, w_g, h_f, w_f, entries)
        };
        let mut dyadic = |n: usize| -> Vec<f32> {
            (0..n).map(|_| rng.random_range(-16i32..=16) as f32 / 16.0).collect()
        };
        let x = Tensor::from_vec(&[c, h_f, w_f], dyadic(c * h_f * w_f));
        let y = Tensor::from_vec(&[c, h_g, w_g], dyadic(c * h_g * w_g));
        let wx = warp_to_bev(&x, &table).unwrap();
        let wty = warp_backward(&y, &table).unwrap();
        let lhs: f64 = wx.data().iter().zip(y.data()).map(|(a, b)| (*a as f64) * (*b as f64)).sum();
        let rhs: f64 = x.data().iter().zip(wty.data()).map(|(a, b)| (*a as f64) * (*b as f64)).sum();
        prop_assert_eq!(lhs, rhs);
    }

    /// Warp output is zero wherever the table is out of view and a gather
    /// elsewhere.
    #[test]
    fn warp_gathers_or_zeroes(table in table_strategy(6, 5, 4, 4), seed in any::<u64>()) {
        let mut rng = {
            use rand_chacha::rand_core::SeedableRng;
            rand_chacha::ChaCha8Rng::seed_from_u64(seed)
        };
        use rand::RngExt;
        let feat = Tensor::from_vec(&[2, 4, 4], (0..32).map(|_| rng.random_range(-1.0f32..1.0)).collect());
        let out = warp_to_bev(&feat, &table).unwrap();
        for c in 0..2 {
            for i in 0..6 {
                for j in 0..5 {
                    match table.entry(i, j) {
                        Some((r, col)) => prop_assert_eq!(out.at3(c, i, j), feat.at3(c, r as usize, col as usize)),
                        None => prop_assert_eq!(out.at3(c, i, j), 0.0),
                    }
                }
            }
        }
    }

    /// Both extraction methods respect their minimum-distance guarantees and
    /// the strict threshold.
    #[test]
    fn extraction_min_distances(
        values in proptest::collection::vec(0.0f32..1.0, 144),
        tau in 0.05f64..0.6,
        k_d in 1usize..4,
    ) {
        let map = OccupancyMap { h: 12, w: 12, data: values };
        let d = k_d as f64;
        let v = vanilla_nms(&map, tau, d);
        for a in 0..v.len() {
            prop_assert!(v[a].score as f64 > tau);
            for b in a + 1..v.len() {
                let di = v[a].cell.0 as f64 - v[b].cell.0 as f64;
                let dj = v[a].cell.1 as f64 - v[b].cell.1 as f64;
                prop_assert!((di * di + dj * dj).sqrt() > d);
            }
        }
        let l = local_max(&map, tau, k_d);
        for a in 0..l.len() {
            prop_assert!(l[a].score as f64 > tau);
            for b in a + 1..l.len() {
                let di = l[a].cell.0.abs_diff(l[b].cell.0);
                let dj = l[a].cell.1.abs_diff(l[b].cell.1);
                prop_assert!(di.max(dj) > k_d);
            }
        }
    }

    /// Soft targets stay in [0, 1] with peak exactly 1 at each position.
    #[test]
    fn soft_target_bounds(
        positions in proptest::collection::vec((0usize..20, 0usize..20), 0..6),
        sigma in 0.5f64..4.0,
    ) {
        let grid = BevGrid::new(0.0, 0.0, 0.1, 20, 20).unwrap();
        let map = gaussian_soft_target(&positions, sigma, &grid).unwrap();
        prop_assert!(map.data.iter().all(|&v| (0.0..=1.0).contains(&v)));
        for &(i, j) in &positions {
            prop_assert_eq!(map.at(i, j), 1.0);
        }
    }

    /// The schedule peaks exactly once: increasing to the 30% boundary and
    /// decreasing after.
    #[test]
    fn one_cycle_shape(total in 2usize..400, max_lr in 1e-4f64..1.0) {
        let peak = (0.3 * total as f64).floor() as usize;
        let mut prev = f64::NEG_INFINITY;
        for s in 0..total {
            let lr = one_cycle_lr(s, total, max_lr).unwrap();
            prop_assert!(lr > 0.0 && lr <= max_lr);
            if s <= peak {
                prop_assert!(lr > prev);
            } else {
                prop_assert!(lr < prev);
            }
            prev = lr;
        }
        prop_assert!((one_cycle_lr(peak, total, max_lr).unwrap() - max_lr).abs() < 1e-15);
    }
}
