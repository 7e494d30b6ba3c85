//! Special functions backing the named distributions.
//!
//! Regularised incomplete gamma and beta functions use the classical
//! series / continued-fraction split with modified Lentz evaluation. The
//! standard normal CDF is expressed through the incomplete gamma function,
//! `erf(x) = P(1/2, x^2)`, so a single kernel serves norm, lnorm, gamma and
//! pois.

use crate::scalar::Scalar;

const MAX_ITER: usize = 100_000;

fn tiny<T: Scalar>() -> T {
    T::min_positive_value() / T::epsilon()
}

/// `ln Γ(x)` for `x > 0` (Lanczos, g = 7, nine terms).
pub fn ln_gamma<T: Scalar>(x: T) -> T {
    const COEF: [f64; 9] = [
        0.999_999_999_999_809_9,
        676.520_368_121_885_1,
        -1_259.139_216_722_402_8,
        771.323_428_777_653_1,
        -176.615_029_162_140_6,
        12.507_343_278_686_905,
        -0.138_571_095_265_720_12,
        9.984_369_578_019_572e-6,
        1.505_632_735_149_311_6e-7,
    ];
    let half = T::lit(0.5);
    if x < half {
        // Reflection: Γ(x)Γ(1-x) = π / sin(πx).
        let pi = T::PI();
        return (pi / (pi * x).sin().abs()).ln() - ln_gamma(T::one() - x);
    }
    let x = x - T::one();
    let mut acc = T::lit(COEF[0]);
    for (i, c) in COEF.iter().enumerate().skip(1) {
        acc = acc + T::lit(*c) / (x + T::from_count(i));
    }
    let t = x + T::lit(7.5);
    half * (T::lit(2.0) * T::PI()).ln() + (x + half) * t.ln() - t + acc.ln()
}

/// Regularised lower incomplete gamma `P(a, x)`.
pub fn gamma_p<T: Scalar>(a: T, x: T) -> T {
    if x <= T::zero() {
        return T::zero();
    }
    if x.is_infinite() {
        return T::one();
    }
    if x < a + T::one() {
        gamma_series(a, x)
    } else {
        T::one() - gamma_continued_fraction(a, x)
    }
}

/// Regularised upper incomplete gamma `Q(a, x) = 1 - P(a, x)`.
pub fn gamma_q<T: Scalar>(a: T, x: T) -> T {
    if x <= T::zero() {
        return T::one();
    }
    if x.is_infinite() {
        return T::zero();
    }
    if x < a + T::one() {
        T::one() - gamma_series(a, x)
    } else {
        gamma_continued_fraction(a, x)
    }
}

fn gamma_prefactor<T: Scalar>(a: T, x: T) -> T {
    (a * x.ln() - x - ln_gamma(a)).exp()
}

fn gamma_series<T: Scalar>(a: T, x: T) -> T {
    let mut ap = a;
    let mut del = T::one() / a;
    let mut sum = del;
    for _ in 0..MAX_ITER {
        ap = ap + T::one();
        del = del * x / ap;
        sum = sum + del;
        if del.abs() < sum.abs() * T::epsilon() {
            break;
        }
    }
    sum * gamma_prefactor(a, x)
}

fn gamma_continued_fraction<T: Scalar>(a: T, x: T) -> T {
    let fpmin = tiny::<T>();
    let two = T::lit(2.0);
    let mut b = x + T::one() - a;
    let mut c = T::one() / fpmin;
    let mut d = T::one() / b;
    let mut h = d;
    for i in 1..MAX_ITER {
        let i = T::from_count(i);
        let an = -i * (i - a);
        b = b + two;
        d = an * d + b;
        if d.abs() < fpmin {
            d = fpmin;
        }
        c = b + an / c;
        if c.abs() < fpmin {
            c = fpmin;
        }
        d = T::one() / d;
        let del = d * c;
        h = h * del;
        if (del - T::one()).abs() < T::epsilon() {
            break;
        }
    }
    gamma_prefactor(a, x) * h
}

/// Regularised incomplete beta `I_x(a, b)`.
pub fn beta_i<T: Scalar>(a: T, b: T, x: T) -> T {
    if x <= T::zero() {
        return T::zero();
    }
    if x >= T::one() {
        return T::one();
    }
    let ln_front = ln_gamma(a + b) - ln_gamma(a) - ln_gamma(b) + a * x.ln() + b * (T::one() - x).ln();
    let front = ln_front.exp();
    if x < (a + T::one()) / (a + b + T::lit(2.0)) {
        front * beta_continued_fraction(a, b, x) / a
    } else {
        T::one() - front * beta_continued_fraction(b, a, T::one() - x) / b
    }
}

fn beta_continued_fraction<T: Scalar>(a: T, b: T, x: T) -> T {
    let fpmin = tiny::<T>();
    let one = T::one();
    let qab = a + b;
    let qap = a + one;
    let qam = a - one;
    let clamp = |v: T| if v.abs() < fpmin { fpmin } else { v };
    let mut c = one;
    let mut d = one / clamp(one - qab * x / qap);
    let mut h = d;
    for m in 1..MAX_ITER {
        let m = T::from_count(m);
        let m2 = m + m;
        let aa = m * (b - m) * x / ((qam + m2) * (a + m2));
        d = one / clamp(one + aa * d);
        c = clamp(one + aa / c);
        h = h * d * c;
        let aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
        d = one / clamp(one + aa * d);
        c = clamp(one + aa / c);
        let del = d * c;
        h = h * del;
        if (del - one).abs() < T::epsilon() {
            break;
        }
    }
    h
}

/// Standard normal CDF.
pub fn std_normal_cdf<T: Scalar>(z: T) -> T {
    let half = T::lit(0.5);
    let p = half * z * z;
    if z >= T::zero() {
        half + half * gamma_p(half, p)
    } else {
        half * gamma_q(half, p)
    }
}

/// Standard normal density.
pub fn std_normal_pdf<T: Scalar>(z: T) -> T {
    (-T::lit(0.5) * z * z).exp() / (T::lit(2.0) * T::PI()).sqrt()
}

/// Standard normal quantile: rational initial approximation followed by a
/// Halley correction against [`std_normal_cdf`].
pub fn std_normal_quantile<T: Scalar>(p: T) -> T {
    if p <= T::zero() {
        return T::neg_infinity();
    }
    if p >= T::one() {
        return T::infinity();
    }
    const A: [f64; 6] = [
        -3.969_683_028_665_376e1,
        2.209_460_984_245_205e2,
        -2.759_285_104_469_687e2,
        1.383_577_518_672_69e2,
        -3.066_479_806_614_716e1,
        2.506_628_277_459_239,
    ];
    const B: [f64; 5] = [
        -5.447_609_879_822_406e1,
        1.615_858_368_580_409e2,
        -1.556_989_798_598_866e2,
        6.680_131_188_771_972e1,
        -1.328_068_155_288_572e1,
    ];
    const C: [f64; 6] = [
        -7.784_894_002_430_293e-3,
        -3.223_964_580_411_365e-1,
        -2.400_758_277_161_838,
        -2.549_732_539_343_734,
        4.374_664_141_464_968,
        2.938_163_982_698_783,
    ];
    const D: [f64; 4] = [
        7.784_695_709_041_462e-3,
        3.224_671_290_700_398e-1,
        2.445_134_137_142_996,
        3.754_408_661_907_416,
    ];
    let horner = |coef: &[f64], x: T| coef.iter().fold(T::zero(), |acc, c| acc * x + T::lit(*c));
    let p_low = T::lit(0.02425);
    let one = T::one();
    let two = T::lit(2.0);
    let mut x = if p < p_low {
        let q = (-two * p.ln()).sqrt();
        horner(&C, q) / (horner(&D, q) * q + one)
    } else if p <= one - p_low {
        let q = p - T::lit(0.5);
        let r = q * q;
        horner(&A, r) * q / (horner(&B, r) * r + one)
    } else {
        let q = (-two * (one - p).ln()).sqrt();
        -horner(&C, q) / (horner(&D, q) * q + one)
    };
    for _ in 0..2 {
        let e = std_normal_cdf(x) - p;
        let u = e * (two * T::PI()).sqrt() * (x * x / two).exp();
        let step = u / (one + x * u / two);
        if !step.is_finite() {
            break;
        }
        x = x - step;
    }
    x
}
