use std::collections::HashSet;

use proptest::prelude::*;

use hdg_core::coupling::{couple_fields, CouplingContext};
use hdg_core::extremes::{centering, select_subsequence, tail_slope};
use hdg_core::harness::seed::{depth_tag, derive_seed, seed_stream, TAG_SAMPLE};
use hdg_core::model::{embed_index, green_matrix, index_distance, ModelParams};
use hdg_core::rg::{ratio_envelope_excess, PotentialTable};
use hdg_core::sampler::{sample_dg, sample_gff, KernelContext};

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn distance_is_an_ultrametric(b in 2usize..5, n in 1usize..5, raw in prop::array::uniform3(0usize..1024)) {
        let size = b.pow(n as u32);
        let [x, y, z] = raw.map(|i| i % size);
        let d = |i, j| index_distance(b, i, j, n);
        prop_assert_eq!(d(x, y), d(y, x));
        prop_assert_eq!(d(x, y) == 0, x == y);
        prop_assert!(d(x, y) <= n);
        prop_assert!(d(x, z) <= d(x, y).max(d(y, z)));
    }

    #[test]
    fn embedding_preserves_order(b in 2usize..5, n in 1usize..5) {
        let size = b.pow(n as u32);
        let pos: Vec<f64> = (0..size).map(|i| embed_index(b, n, i)).collect();
        prop_assert!(pos.windows(2).all(|w| w[0] < w[1]));
        prop_assert!(pos[0] >= 0.0 && pos[size - 1] < 1.0);
    }

    #[test]
    fn green_function_is_depth_minus_distance(b in 2usize..4, n in 1usize..4) {
        let p = ModelParams::new(b, 1.0).unwrap();
        let g = green_matrix(&p, n).unwrap();
        for i in 0..g.nrows() {
            for j in 0..g.ncols() {
                let want = (n + 1 - index_distance(b, i, j, n)) as f64;
                prop_assert!((g[(i, j)] - want).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn subcritical_flow_contracts(ratio in 0.2f64..0.85) {
        let table = PotentialTable::dg(&ModelParams::from_ratio(2, ratio).unwrap(), 24).unwrap();
        prop_assert!(table.r[2..].windows(2).all(|w| w[1] < w[0]));
        let (r, e) = ratio_envelope_excess(&table);
        prop_assert!(r <= 1e-9 && e <= 1e-9);
    }

    #[test]
    fn subsequence_entries_match_centering(beta in 0.5f64..20.0, s in 0.0f64..1.0, tol in 0.01f64..0.2) {
        let p = ModelParams::new(2, beta).unwrap();
        for e in select_subsequence(&p, s, tol, 1, 80).unwrap() {
            let c = centering(&p, e.n).unwrap();
            prop_assert_eq!(e.frac, c.frac_s);
            prop_assert!(e.offset.abs() <= tol);
            let d = (e.frac - s).rem_euclid(1.0);
            prop_assert!((d.min(1.0 - d) - e.offset.abs()).abs() < 1e-12);
        }
    }

    #[test]
    fn gff_leaves_are_path_sums(seed in any::<u64>(), n in 1usize..7) {
        let p = ModelParams::new(3, 2.0).unwrap();
        let s = sample_gff(&p, n, &mut seed_stream(seed, 0, TAG_SAMPLE), true);
        let again = sample_gff(&p, n, &mut seed_stream(seed, 0, TAG_SAMPLE), false);
        prop_assert_eq!(&s.values, &again.values);
        let rebuilt = s.reconstruct().unwrap();
        for (a, b) in rebuilt.iter().zip(&s.values) {
            prop_assert!((a - b).abs() < 1e-12);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn dg_leaves_are_integer_path_sums(seed in any::<u64>(), beta in 3.0f64..20.0) {
        let p = ModelParams::new(2, beta).unwrap();
        let table = PotentialTable::dg(&p, 6).unwrap();
        let mut ctx = KernelContext::new(&table);
        let s = sample_dg(&mut ctx, 6, &mut seed_stream(seed, 0, TAG_SAMPLE), true).unwrap();
        prop_assert!(s.values.iter().all(|v| v.fract() == 0.0));
        for (a, b) in s.reconstruct().unwrap().iter().zip(&s.values) {
            prop_assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn coupled_leaves_stay_within_path_bound(seed in any::<u64>(), ratio in 0.2f64..0.8) {
        let p = ModelParams::from_ratio(2, ratio).unwrap();
        let table = PotentialTable::dg(&p, 5).unwrap();
        let ctx = CouplingContext::new(&table).unwrap();
        let s = couple_fields(&ctx, 5, &mut seed_stream(seed, 0, 2)).unwrap();
        for x in 0..s.dg.len() {
            let slack = ctx.bound() * (1 + s.failures(x)) as f64 + 1e-9;
            prop_assert!((s.dg[x] - s.gff[x]).abs() <= slack);
            if s.tau[x] == 0 {
                prop_assert!(s.failures(x) == 0);
            }
        }
    }

    #[test]
    fn tail_slope_ignores_shifts(seed in any::<u64>(), shift in -5.0f64..5.0) {
        use rand::Rng;
        let mut rng = seed_stream(seed, 0, 9);
        let xs: Vec<f64> = (0..10_000).map(|_| -f64::ln(-f64::ln(rng.random::<f64>()))).collect();
        let shifted: Vec<f64> = xs.iter().map(|x| x + shift).collect();
        let a = tail_slope(&xs, None, 0.25, 20, 1).unwrap();
        let b = tail_slope(&shifted, None, 0.25, 20, 1).unwrap();
        prop_assert!((a.slope - b.slope).abs() < 1e-9);
    }
}

#[test]
fn seed_streams_do_not_collide() {
    let mut seen = HashSet::with_capacity(1 << 21);
    for r in 0..1_000_000u64 {
        assert!(seen.insert(derive_seed(7, r, TAG_SAMPLE)));
        assert!(seen.insert(derive_seed(7, r, depth_tag(TAG_SAMPLE, 10))));
    }
}
