use dsgate::dso::{channel_stats, classify_regions, dso_apply, dso_apply_factored, Region, RegionConfig};
use dsgate::tensor::Dims;
use dsgate::Tensor64;
use proptest::prelude::*;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn increasing_in_both_arguments(mu in 0.0f64..10.0, d in 0.0f64..10.0, delta in 1e-6f64..5.0) {
        prop_assert!(dso_apply(mu + delta, d) > dso_apply(mu, d));
        prop_assert!(dso_apply(mu, d + delta) > dso_apply(mu, d));
    }

    #[test]
    fn mixed_difference_grows_with_the_other_argument(
        mu in 0.0f64..10.0,
        d1 in 0.0f64..10.0,
        gap in 1e-3f64..5.0,
        delta in 1e-3f64..5.0,
    ) {
        let d2 = d1 + gap;
        prop_assert!(dso_apply(mu + delta, d2) - dso_apply(mu, d2) > dso_apply(mu + delta, d1) - dso_apply(mu, d1));
        let (m1, m2) = (d1, d2);
        prop_assert!(dso_apply(m2, mu + delta) - dso_apply(m2, mu) > dso_apply(m1, mu + delta) - dso_apply(m1, mu));
    }

    #[test]
    fn superadditive_on_the_quadrant(mu in 0.0f64..10.0, d in 0.0f64..10.0) {
        let excess = dso_apply(mu, d) - mu - d;
        prop_assert!(excess >= -1e-12);
        prop_assert!((excess - mu * d).abs() <= 1e-12 * (1.0 + mu * d));
    }

    #[test]
    fn factored_matches_expanded(mu in -0.9f64..3.0, d in 0.0f64..3.0) {
        prop_assert!((dso_apply(mu, d) - dso_apply_factored(mu, d)).abs() <= 1e-12);
    }

    #[test]
    fn spread_is_non_negative(v in prop::collection::vec(-3.0f64..3.0, 1..64)) {
        let n = v.len();
        let x = Tensor64::new(Dims::new(1, 1, 1, n), v).unwrap();
        prop_assert!(channel_stats(&x).d.data()[0] >= 0.0);
    }

    #[test]
    fn shift_moves_mean_and_keeps_spread(
        ks in prop::collection::vec(-128i32..=128, 16),
        shift in -16i32..=16,
        side in 0usize..3,
    ) {
        // dyadic values on a power-of-two plane make every sum exact
        let (h, w) = [(1, 4), (2, 4), (4, 4)][side];
        let x = Tensor64::new(Dims::new(1, 1, h, w), ks[..h * w].iter().map(|&k| k as f64 / 64.0).collect()).unwrap();
        let c = shift as f64 / 8.0;
        let (a, b) = (channel_stats(&x), channel_stats(&x.map(|v| v + c)));
        prop_assert!(a.d.bit_eq(&b.d));
        prop_assert_eq!(a.mu.data()[0] + c, b.mu.data()[0]);
    }
}

#[test]
fn equality_cases_of_superadditivity() {
    assert_eq!(dso_apply(0.0, 2.5), 2.5);
    assert_eq!(dso_apply(1.25, 0.0), 1.25);
}

#[test]
fn region_labels_follow_channel_stats() {
    // channels: one hot pixel; bright flat plane; bright checkerboard; dim checkerboard
    let x = Tensor64::from_fn(Dims::new(1, 4, 4, 4), |_, c, h, w| {
        let odd = (h + w) % 2 == 1;
        match c {
            0 => if (h, w) == (1, 1) { 4.0 } else { 0.0 },
            1 => if (h, w) == (0, 0) { 1.1 } else { 1.0 },
            2 => if odd { 2.0 } else { 0.0 },
            _ => if odd { 0.1 } else { 0.0 },
        }
    });
    let labels = classify_regions(&channel_stats(&x), &RegionConfig::default());
    assert_eq!(labels, vec![Region::Small, Region::Large, Region::Mixed, Region::Background]);
}
