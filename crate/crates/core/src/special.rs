//! Special functions used by the closed-form expectations.

use std::f64::consts::PI;

/// Digamma function ψ(x) for x > 0.
pub fn digamma(x: f64) -> f64 {
    debug_assert!(x > 0.0, "digamma argument must be positive, got {x}");
    statrs::function::gamma::digamma(x)
}

/// Natural log of the gamma function for x > 0.
pub fn ln_gamma(x: f64) -> f64 {
    debug_assert!(x > 0.0, "ln_gamma argument must be positive, got {x}");
    statrs::function::gamma::ln_gamma(x)
}

/// ln(y!) for a count y.
pub fn ln_factorial(y: u32) -> f64 {
    if y < 2 {
        0.0
    } else {
        ln_gamma(f64::from(y) + 1.0)
    }
}

pub(crate) fn std_normal_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * PI).sqrt()
}

/// Upper tail 1 - Φ(x).
fn std_normal_sf(x: f64) -> f64 {
    0.5 * statrs::function::erf::erfc(x / std::f64::consts::SQRT_2)
}

/// Φ(x).
pub(crate) fn std_normal_cdf(x: f64) -> f64 {
    std_normal_sf(-x)
}

/// Mass of N(0,1) on [a, b], computed on whichever tail keeps precision.
pub(crate) fn std_normal_mass(a: f64, b: f64) -> f64 {
    if a > 0.0 {
        std_normal_sf(a) - std_normal_sf(b)
    } else if b < 0.0 {
        std_normal_cdf(b) - std_normal_cdf(a)
    } else {
        1.0 - std_normal_sf(b) - std_normal_cdf(a)
    }
}

/// Moments and entropy of N(loc, var) truncated to [lo, hi].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TruncatedMoments {
    pub mean: f64,
    pub second: f64,
    pub entropy: f64,
    /// log of the normalising mass of the underlying normal on [lo, hi].
    pub log_mass: f64,
}

pub fn truncated_normal(loc: f64, var: f64, lo: f64, hi: f64) -> TruncatedMoments {
    let sd = var.sqrt();
    let a = (lo - loc) / sd;
    let b = (hi - loc) / sd;
    let mass = std_normal_mass(a, b);
    let ra = std_normal_pdf(a) / mass;
    let rb = std_normal_pdf(b) / mass;
    let mean = loc + sd * (ra - rb);
    let tail = a * ra - b * rb;
    let variance = var * (1.0 + tail - (ra - rb).powi(2));
    let entropy = (sd * mass).ln() + 0.5 * (2.0 * PI * std::f64::consts::E).ln() + 0.5 * tail;
    TruncatedMoments {
        mean,
        second: variance + mean * mean,
        entropy,
        log_mass: mass.ln(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    // Reference values from a 40-digit multiprecision evaluation.
    const REFERENCE: &[(f64, f64, f64)] = &[
        (1e-8, -100000000.57721564845, 18.420680738180208905),
        (0.001, -1000.5755719318103005, 6.9071788853838536825),
        (0.1, -10.423754940411076795, 2.2527126517342059599),
        (0.3, -3.502524222200132989, 1.0957979948180755217),
        (0.5, -1.9635100260214234794, 0.57236494292470008707),
        (1.0, -0.57721566490153286061, 0.0),
        (1.5, 0.036489973978576520559, -0.12078223763524522235),
        (2.5, 0.70315664064524318723, 0.28468287047291915963),
        (7.8, 1.9886536906953097182, 8.1247197235495250792),
        (9.3, 2.1752885647186924856, 11.252022385979146717),
        (10.0, 2.2517525890667211076, 12.801827480081469611),
        (33.3, 3.4904672385202428639, 82.603723581654952928),
        (1000.5, 6.9077553206487964271, 5908.6741758486774887),
        (123456.7, 11.723641716277190562, 1323900.9753909182949),
        (999999.0, 13.81550905796319077, 12815490.753638053696),
    ];

    fn close(got: f64, want: f64, rel: f64, abs: f64) -> bool {
        (got - want).abs() <= rel * want.abs() + abs
    }

    #[test]
    fn digamma_matches_reference() {
        for &(x, psi, _) in REFERENCE {
            // ψ has a root near 1.4616; there only absolute accuracy is meaningful.
            assert!(close(digamma(x), psi, 1e-12, 1e-15), "x={x}: {} vs {psi}", digamma(x));
        }
    }

    #[test]
    fn ln_gamma_matches_reference() {
        for &(x, _, lg) in REFERENCE {
            assert!(close(ln_gamma(x), lg, 1e-12, 1e-14), "x={x}: {} vs {lg}", ln_gamma(x));
        }
    }

    #[test]
    fn factorials() {
        assert_eq!(ln_factorial(0), 0.0);
        assert_eq!(ln_factorial(1), 0.0);
        assert!(close(ln_factorial(2), 2f64.ln(), 1e-14, 0.0));
        assert!(close(ln_factorial(10), 3628800f64.ln(), 1e-14, 0.0));
    }

    #[test]
    fn truncation_of_wide_normal_is_uniform_like() {
        // A very wide normal truncated to [-1, 1] is close to uniform.
        let m = truncated_normal(0.0, 1e4, -1.0, 1.0);
        assert!(m.mean.abs() < 1e-12);
        assert!((m.second - 1.0 / 3.0).abs() < 1e-4);
        assert!((m.entropy - 2f64.ln()).abs() < 1e-4);
    }

    #[test]
    fn truncated_moments_match_quadrature() {
        let (loc, var) = (0.7, 0.3);
        let n = 200_000;
        let h = 2.0 / n as f64;
        let (mut z, mut m1, mut m2, mut ent) = (0.0, 0.0, 0.0, 0.0);
        let dens = |x: f64| (-(x - loc) * (x - loc) / (2.0 * var)).exp() / (2.0 * PI * var).sqrt();
        for i in 0..n {
            let x = -1.0 + (i as f64 + 0.5) * h;
            let p = dens(x) * h;
            z += p;
            m1 += p * x;
            m2 += p * x * x;
        }
        for i in 0..n {
            let x = -1.0 + (i as f64 + 0.5) * h;
            let p = dens(x) / z;
            ent -= p * p.ln() * h;
        }
        let t = truncated_normal(loc, var, -1.0, 1.0);
        assert!((t.mean - m1 / z).abs() < 1e-8);
        assert!((t.second - m2 / z).abs() < 1e-8);
        assert!((t.log_mass - z.ln()).abs() < 1e-8);
        assert!((t.entropy - ent).abs() < 1e-7);
    }
}
