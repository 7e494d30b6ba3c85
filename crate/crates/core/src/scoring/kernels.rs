//! Score formulas, generic over the scalar type.

use crate::scalar::Scalar;

/// Smallest probability fed to a logarithm.
pub const PROBABILITY_FLOOR: f64 = 1e-9;

/// `ln(max(p, 1e-9))`, and whether the floor was applied.
pub fn clamped_ln<T: Scalar>(p: T) -> (T, bool) {
    let floor = T::lit(PROBABILITY_FLOOR);
    if p < floor || p.is_nan() {
        (floor.ln(), true)
    } else {
        (p.ln(), false)
    }
}

/// Sample CRPS, `(1/n) Σ|x_i - y| - (1/2n²) ΣΣ|x_i - x_j|`, in O(n log n).
///
/// The double sum over a sorted sample equals `2 Σ_i (2i - n - 1) x_(i)`
/// with 1-based ranks.
pub fn crps_sample<T: Scalar>(sample: &[T], y: T) -> T {
    let n = sample.len();
    if n == 0 {
        return T::nan();
    }
    let mut sorted = sample.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("finite sample"));
    let nf = T::from_count(n);
    let abs_dev = sorted.iter().fold(T::zero(), |acc, &x| acc + (x - y).abs()) / nf;
    let spread = sorted.iter().enumerate().fold(T::zero(), |acc, (i, &x)| {
        let weight = T::from_count(2 * (i + 1)) - nf - T::one();
        acc + weight * x
    }) / (nf * nf);
    (abs_dev - spread).max(T::zero())
}

/// Interval score of the central `(1 - alpha)` interval `[lower, upper]`.
pub fn interval_score<T: Scalar>(lower: T, upper: T, y: T, alpha: T) -> T {
    let penalty = T::lit(2.0) / alpha;
    let mut score = upper - lower;
    if y < lower {
        score = score + penalty * (lower - y);
    }
    if y > upper {
        score = score + penalty * (y - upper);
    }
    score
}

/// Multicategory Brier score `Σ_k (p_k - o_k)²`, with `o` one-hot at
/// `observed`.
pub fn brier<T: Scalar>(probs: &[T], observed: usize) -> T {
    probs.iter().enumerate().fold(T::zero(), |acc, (k, &p)| {
        let o = if k == observed { T::one() } else { T::zero() };
        acc + (p - o) * (p - o)
    })
}

/// Binary Brier score `(p_true - o)²`.
pub fn brier_binary<T: Scalar>(p_true: T, observed: bool) -> T {
    let o = if observed { T::one() } else { T::zero() };
    (p_true - o) * (p_true - o)
}

/// Binned CRPS `Σ_k (F_k - 1{y <= b_k})² w_k`, with `F_k` the inclusive
/// cumulative probability through bin `k`, `b_k` its representative value
/// and `w_k` its width.
pub fn crps_bins<T: Scalar>(probs: &[T], reps: &[T], widths: &[T], y: T) -> T {
    let mut cum = T::zero();
    let mut total = T::zero();
    for ((&p, &b), &w) in probs.iter().zip(reps).zip(widths) {
        cum = cum + p;
        let step = if y <= b { T::one() } else { T::zero() };
        total = total + (cum - step) * (cum - step) * w;
    }
    total
}

/// Fraction of the sample at or below `y`.
pub fn pit_sample<T: Scalar>(sample: &[T], y: T) -> T {
    let below = sample.iter().filter(|&&x| x <= y).count();
    T::from_count(below) / T::from_count(sample.len())
}
