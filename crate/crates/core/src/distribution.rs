//! Distribution functions of the named families.

use crate::model::{Family, NamedDistribution};
use crate::rng::SplitMix64;
use crate::scalar::Scalar;
use crate::special::{beta_i, gamma_p, gamma_q, ln_gamma, std_normal_cdf, std_normal_quantile};

/// Largest CDF table built for discrete sampling before falling back to
/// per-draw search.
const MAX_DISCRETE_TABLE: usize = 1 << 22;

impl<T: Scalar> NamedDistribution<T> {
    /// `P(X <= x)`.
    pub fn cdf(&self, x: T) -> T {
        let zero = T::zero();
        let one = T::one();
        if x.is_nan() {
            return T::nan();
        }
        let (a, b) = (self.param1(), self.p2());
        match self.family() {
            Family::Norm => std_normal_cdf((x - a) / b),
            Family::Lnorm => {
                if x <= zero {
                    zero
                } else {
                    std_normal_cdf((x.ln() - a) / b)
                }
            }
            Family::Gamma => gamma_p(a, b * x),
            Family::Pois => {
                if x < zero {
                    return zero;
                }
                gamma_q(x.floor() + one, a)
            }
            Family::Negbin => {
                if x < zero {
                    return zero;
                }
                if b >= one {
                    return one;
                }
                beta_i(a, x.floor() + one, b)
            }
            Family::Binom => {
                if x < zero {
                    return zero;
                }
                let k = x.floor();
                if k >= a {
                    return one;
                }
                if b <= zero {
                    return one;
                }
                if b >= one {
                    return zero;
                }
                beta_i(a - k, k + one, one - b)
            }
        }
    }

    /// Log density (continuous families) or log mass (discrete families).
    pub fn ln_density(&self, x: T) -> T {
        let zero = T::zero();
        let one = T::one();
        let half = T::lit(0.5);
        let ln_2pi = (T::lit(2.0) * T::PI()).ln();
        let (a, b) = (self.param1(), self.p2());
        let neg_inf = T::neg_infinity();
        if self.family().is_discrete() && (x < zero || x.fract() != zero) {
            return neg_inf;
        }
        let xlogy = |k: T, p: T| if k == zero { zero } else { k * p.ln() };
        match self.family() {
            Family::Norm => {
                let z = (x - a) / b;
                -b.ln() - half * ln_2pi - half * z * z
            }
            Family::Lnorm => {
                if x <= zero {
                    return neg_inf;
                }
                let z = (x.ln() - a) / b;
                -x.ln() - b.ln() - half * ln_2pi - half * z * z
            }
            Family::Gamma => {
                if x < zero {
                    return neg_inf;
                }
                if x == zero {
                    return if a == one { b.ln() } else if a < one { T::infinity() } else { neg_inf };
                }
                a * b.ln() + (a - one) * x.ln() - b * x - ln_gamma(a)
            }
            Family::Pois => xlogy(x, a) - a - ln_gamma(x + one),
            Family::Negbin => {
                ln_gamma(x + a) - ln_gamma(a) - ln_gamma(x + one) + a * b.ln()
                    + xlogy(x, one - b)
            }
            Family::Binom => {
                if x > a {
                    return neg_inf;
                }
                ln_gamma(a + one) - ln_gamma(x + one) - ln_gamma(a - x + one)
                    + xlogy(x, b)
                    + xlogy(a - x, one - b)
            }
        }
    }

    pub fn mean(&self) -> T {
        let (a, b) = (self.param1(), self.p2());
        match self.family() {
            Family::Norm => a,
            Family::Lnorm => (a + b * b / T::lit(2.0)).exp(),
            Family::Gamma => a / b,
            Family::Pois => a,
            Family::Negbin => a * (T::one() - b) / b,
            Family::Binom => a * b,
        }
    }

    fn variance(&self) -> T {
        let (a, b) = (self.param1(), self.p2());
        let one = T::one();
        match self.family() {
            Family::Norm => b * b,
            Family::Lnorm => ((b * b).exp() - one) * (a + a + b * b).exp(),
            Family::Gamma => a / (b * b),
            Family::Pois => a,
            Family::Negbin => a * (one - b) / (b * b),
            Family::Binom => a * b * (one - b),
        }
    }

    /// Inverse CDF at `level`. For discrete families this is the smallest
    /// support point `k` with `cdf(k) >= level`.
    pub fn quantile(&self, level: T) -> T {
        let (a, b) = (self.param1(), self.p2());
        if self.family().is_discrete() {
            return self.discrete_quantile(level);
        }
        if level <= T::zero() {
            return match self.family() {
                Family::Norm => T::neg_infinity(),
                _ => T::zero(),
            };
        }
        if level >= T::one() {
            return T::infinity();
        }
        match self.family() {
            Family::Norm => a + b * std_normal_quantile(level),
            Family::Lnorm => (a + b * std_normal_quantile(level)).exp(),
            Family::Gamma => gamma_quantile(a, level) / b,
            _ => unreachable!("discrete families handled above"),
        }
    }

    fn discrete_quantile(&self, level: T) -> T {
        let zero = T::zero();
        let one = T::one();
        if level <= zero || self.cdf(zero) >= level {
            return zero;
        }
        let cap = match self.family() {
            Family::Binom => Some(self.param1()),
            _ => None,
        };
        if level >= one {
            return cap.unwrap_or_else(T::infinity);
        }
        // Bracket: cdf(lo) < level <= cdf(hi).
        let mut lo = zero;
        let spread = self.variance().sqrt().max(one);
        let mut hi = (self.mean() + spread).ceil().max(one);
        if let Some(n) = cap {
            hi = hi.min(n);
        }
        while self.cdf(hi) < level {
            lo = hi;
            let next = hi + hi;
            if cap.is_some_and(|n| next >= n) {
                hi = cap.unwrap();
                break;
            }
            if !next.is_finite() {
                return T::infinity();
            }
            hi = next;
        }
        while hi - lo > one {
            let mid = ((lo + hi) / T::lit(2.0)).floor();
            if self.cdf(mid) >= level {
                hi = mid;
            } else {
                lo = mid;
            }
        }
        hi
    }

    /// `n` draws by inverse-CDF transform of the seeded uniform stream.
    pub fn draw(&self, n: usize, seed: u64) -> Vec<T> {
        let uniforms = SplitMix64::new(seed).take(n).map(T::lit);
        if !self.family().is_discrete() {
            return uniforms.map(|u| self.quantile(u)).collect();
        }
        let table = self.cdf_table();
        uniforms
            .map(|u| {
                let k = table.partition_point(|c| *c < u);
                if k < table.len() {
                    T::from_count(k)
                } else {
                    self.discrete_quantile(u)
                }
            })
            .collect()
    }

    /// `cdf(k)` for `k = 0, 1, ...` until the remaining mass is below machine
    /// precision or the table cap is reached.
    fn cdf_table(&self) -> Vec<T> {
        let stop = T::one() - T::epsilon();
        let mut table = Vec::new();
        for k in 0..MAX_DISCRETE_TABLE {
            let c = self.cdf(T::from_count(k));
            table.push(c);
            if c >= stop {
                break;
            }
        }
        table
    }
}

/// Solves `P(shape, x) = level` for `x` (unit rate) by safeguarded Newton.
fn gamma_quantile<T: Scalar>(shape: T, level: T) -> T {
    let one = T::one();
    let nine = T::lit(9.0);
    let z = std_normal_quantile(level);
    // Wilson-Hilferty start, or the small-x series inverse for small shapes.
    let wh = shape * (one - one / (nine * shape) + z / (T::lit(3.0) * shape.sqrt())).powi(3);
    let mut x = if wh > T::zero() && shape >= one {
        wh
    } else {
        (level * (ln_gamma(shape + one)).exp()).powf(one / shape)
    };
    if !(x > T::zero()) || !x.is_finite() {
        x = shape;
    }
    let mut lo = T::zero();
    let mut hi = T::infinity();
    let ln_norm = ln_gamma(shape);
    for _ in 0..300 {
        let f = gamma_p(shape, x) - level;
        if f == T::zero() {
            return x;
        }
        if f < T::zero() {
            lo = x;
        } else {
            hi = x;
        }
        let dens = ((shape - one) * x.ln() - x - ln_norm).exp();
        let mut next = x - f / dens;
        if !(next > lo && next < hi) || !next.is_finite() {
            next = if hi.is_finite() {
                (lo + hi) / T::lit(2.0)
            } else {
                x * T::lit(2.0)
            };
        }
        if (next - x).abs() <= T::lit(4.0) * T::epsilon() * x {
            return next;
        }
        x = next;
    }
    x
}

#[cfg(test)]
mod tests {
    use super::*;

    type Named = NamedDistribution<f64>;

    #[test]
    fn reference_cdf_values() {
        assert_eq!(Named::norm(0.0, 1.0).unwrap().cdf(0.0), 0.5);
        let pois = Named::pois(2.0).unwrap();
        assert!((pois.cdf(0.0) - (-2.0f64).exp()).abs() < 1e-15);
        assert!((pois.cdf(1.5) - 3.0 * (-2.0f64).exp()).abs() < 1e-15);
        let gamma = Named::gamma(2.0, 1.0).unwrap();
        assert!((gamma.cdf(1.0) - (1.0 - 2.0 * (-1.0f64).exp())).abs() < 1e-14);
        let binom = Named::binom(3.0, 0.5).unwrap();
        assert!((binom.cdf(0.0) - 0.125).abs() < 1e-15);
        assert!((binom.cdf(1.0) - 0.5).abs() < 1e-15);
        assert_eq!(binom.cdf(3.0), 1.0);
        // negbin(1, p) is geometric: P(X <= k) = 1 - (1 - p)^(k + 1).
        let geom = Named::negbin(1.0, 0.3).unwrap();
        assert!((geom.cdf(4.0) - (1.0 - 0.7f64.powi(5))).abs() < 1e-14);
    }

    #[test]
    fn discrete_cdf_equals_summed_mass() {
        for named in [
            Named::pois(7.5).unwrap(),
            Named::negbin(4.5, 0.35).unwrap(),
            Named::binom(25.0, 0.3).unwrap(),
        ] {
            let mut acc = 0.0;
            for k in 0..40 {
                acc += named.ln_density(k as f64).exp();
                assert!((named.cdf(k as f64) - acc).abs() < 1e-13, "{named:?} k={k}");
            }
        }
    }

    #[test]
    fn quantiles() {
        let norm = Named::norm(0.0, 1.0).unwrap();
        assert_eq!(norm.quantile(0.5), 0.0);
        assert!((norm.quantile(0.975) - 1.959_963_984_540_054).abs() < 1e-12);
        assert_eq!(Named::pois(2.0).unwrap().quantile(0.5), 2.0);
        assert_eq!(Named::binom(1.0, 1.0).unwrap().quantile(0.3), 1.0);
        let gamma = Named::gamma(0.3, 2.0).unwrap();
        for &p in &[1e-6, 0.01, 0.5, 0.99] {
            assert!((gamma.cdf(gamma.quantile(p)) - p).abs() < 1e-12, "p={p}");
        }
    }

    #[test]
    fn degenerate_binomial_draws_are_constant() {
        let b = Named::binom(1.0, 1.0).unwrap();
        assert!(b.draw(500, 9).iter().all(|&x| x == 1.0));
    }

    #[test]
    fn draws_are_reproducible() {
        for named in [Named::gamma(3.0, 0.5).unwrap(), Named::negbin(2.0, 0.4).unwrap()] {
            assert_eq!(named.draw(200, 17), named.draw(200, 17));
            assert_ne!(named.draw(200, 17), named.draw(200, 18));
        }
    }

    #[test]
    fn single_precision_kernel() {
        let n = NamedDistribution::<f32>::norm(1.0, 2.0).unwrap();
        assert!((n.cdf(1.0) - 0.5).abs() < 1e-6);
        assert!((n.quantile(0.5) - 1.0).abs() < 1e-5);
    }
}
