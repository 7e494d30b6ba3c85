use farc_core::conversion::{sample_to_quantile, type1_rank};
use farc_core::model::SampleElement;
use farc_core::scoring::kernels::{brier, crps_bins, crps_sample, interval_score, pit_sample};
use farc_core::Value;
use proptest::prelude::*;

/// Direct O(n²) evaluation of the sample CRPS.
fn crps_naive(sample: &[f64], y: f64) -> f64 {
    let n = sample.len() as f64;
    let a: f64 = sample.iter().map(|x| (x - y).abs()).sum::<f64>() / n;
    let b: f64 = sample
        .iter()
        .flat_map(|x| sample.iter().map(move |z| (x - z).abs()))
        .sum::<f64>()
        / (2.0 * n * n);
    a - b
}

/// Smallest k in 1..=n with k/n >= num/den, by integer arithmetic.
fn rank_oracle(num: u64, den: u64, n: usize) -> usize {
    (1..=n).find(|&k| k as u64 * den >= num * n as u64).unwrap_or(n)
}

proptest! {
    #[test]
    fn sample_crps_matches_pairwise_sum(
        sample in prop::collection::vec(-1e3f64..1e3, 1..60),
        y in -1.5e3f64..1.5e3,
    ) {
        let fast = crps_sample(&sample, y);
        let slow = crps_naive(&sample, y);
        prop_assert!(fast >= 0.0);
        prop_assert!((fast - slow).abs() <= 1e-9 * (1.0 + slow.abs()), "{fast} vs {slow}");
    }

    #[test]
    fn single_precision_crps_tracks_double(
        sample in prop::collection::vec(-100f64..100.0, 1..40),
        y in -100f64..100.0,
    ) {
        let single: Vec<f32> = sample.iter().map(|&x| x as f32).collect();
        let d = crps_sample(&sample, y);
        let s = crps_sample(&single, y as f32) as f64;
        prop_assert!((d - s).abs() <= 1e-3 * (1.0 + d.abs()));
    }

    #[test]
    fn interval_score_is_width_inside_and_more_outside(
        lower in -100f64..100.0,
        width in 0f64..50.0,
        y in -200f64..200.0,
        alpha in 0.01f64..0.99,
    ) {
        let upper = lower + width;
        let s = interval_score(lower, upper, y, alpha);
        if (lower..=upper).contains(&y) {
            prop_assert!((s - width).abs() < 1e-12);
        } else {
            prop_assert!(s > width);
        }
    }

    #[test]
    fn brier_is_bounded(raw in prop::collection::vec(0.0f64..1.0, 1..10), pick in 0usize..10) {
        let total: f64 = raw.iter().sum::<f64>().max(1e-12);
        let probs: Vec<f64> = raw.iter().map(|p| p / total).collect();
        let k = pick % probs.len();
        let b = brier(&probs, k);
        prop_assert!((0.0..=2.0 + 1e-12).contains(&b));
    }

    #[test]
    fn binned_crps_is_non_negative(
        raw in prop::collection::vec(0.0f64..1.0, 1..8),
        y in -5f64..15.0,
    ) {
        let total: f64 = raw.iter().sum::<f64>().max(1e-12);
        let probs: Vec<f64> = raw.iter().map(|p| p / total).collect();
        let reps: Vec<f64> = (0..probs.len()).map(|k| k as f64).collect();
        let widths = vec![1.0; probs.len()];
        prop_assert!(crps_bins(&probs, &reps, &widths, y) >= 0.0);
    }

    #[test]
    fn pit_is_a_fraction(sample in prop::collection::vec(-10f64..10.0, 1..30), y in -12f64..12.0) {
        let p = pit_sample(&sample, y);
        prop_assert!((0.0..=1.0).contains(&p));
    }

    #[test]
    fn type1_rank_matches_integer_oracle(num in 1u64..1000, n in 1usize..500) {
        let level = num as f64 / 1000.0;
        prop_assert_eq!(type1_rank(level, n), rank_oracle(num, 1000, n));
    }

    #[test]
    fn empirical_quantiles_are_order_statistics(
        sample in prop::collection::vec(-50i64..50, 1..40),
        num in 1u64..100,
    ) {
        let level = num as f64 / 100.0;
        let element = SampleElement::new(sample.iter().map(|&x| Value::Int(x)).collect()).unwrap();
        let q = sample_to_quantile(&element, &[level]).unwrap();
        let mut sorted = sample.clone();
        sorted.sort();
        let expected = sorted[rank_oracle(num, 100, sorted.len()) - 1];
        prop_assert_eq!(&q.entries()[0].1, &Value::Int(expected));
    }
}
