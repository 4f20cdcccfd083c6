use libm::erfc;

/// Standard normal CDF, `0.5 * erfc(-x / sqrt 2)`. The erfc form keeps full
/// relative precision deep in the lower tail.
pub fn norm_cdf(x: f64) -> f64 {
    0.5 * erfc(-x / std::f64::consts::SQRT_2)
}

fn norm_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

/// Standard normal quantile: bisection on `norm_cdf` to a tight bracket,
/// then Newton polish. Returns `-inf` / `+inf` at 0 / 1 and NaN outside `[0, 1]`.
pub fn norm_quantile(p: f64) -> f64 {
    if !(0.0..=1.0).contains(&p) {
        return f64::NAN;
    }
    if p == 0.0 {
        return f64::NEG_INFINITY;
    }
    if p == 1.0 {
        return f64::INFINITY;
    }
    // Symmetry keeps the search in the lower tail, where norm_cdf is exact.
    if p > 0.5 {
        return -norm_quantile(1.0 - p);
    }
    let (mut lo, mut hi) = (-40.0_f64, 0.0_f64);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if norm_cdf(mid) < p {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo < 1e-9 * (1.0 + mid.abs()) {
            break;
        }
    }
    let mut x = 0.5 * (lo + hi);
    for _ in 0..3 {
        let f = norm_pdf(x);
        if f == 0.0 {
            break;
        }
        x -= (norm_cdf(x) - p) / f;
    }
    x
}
