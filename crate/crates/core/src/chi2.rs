//! Chi-square distribution: CDF and quantiles for gating and consistency bounds.

use num_traits::Float;

const EPS: f64 = 1e-15;
const MAX_ITER: usize = 500;

/// Regularized lower incomplete gamma function `P(a, x)`.
pub fn regularized_gamma_p(a: f64, x: f64) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    let ln_prefix = a * x.ln() - x - libm::lgamma(a);
    if x < a + 1.0 {
        // series
        let mut term = 1.0 / a;
        let mut sum = term;
        let mut ap = a;
        for _ in 0..MAX_ITER {
            ap += 1.0;
            term *= x / ap;
            sum += term;
            if term.abs() < sum.abs() * EPS {
                break;
            }
        }
        (sum.ln() + ln_prefix).exp().min(1.0)
    } else {
        // Lentz continued fraction for Q(a, x)
        let tiny = 1e-300;
        let mut b = x + 1.0 - a;
        let mut c = 1.0 / tiny;
        let mut d = 1.0 / b;
        let mut h = d;
        for i in 1..MAX_ITER {
            let an = -(i as f64) * (i as f64 - a);
            b += 2.0;
            d = an * d + b;
            if d.abs() < tiny {
                d = tiny;
            }
            c = b + an / c;
            if c.abs() < tiny {
                c = tiny;
            }
            d = 1.0 / d;
            let delta = d * c;
            h *= delta;
            if (delta - 1.0).abs() < EPS {
                break;
            }
        }
        (1.0 - (ln_prefix.exp() * h)).max(0.0)
    }
}

pub fn cdf(x: f64, dof: usize) -> f64 {
    regularized_gamma_p(dof as f64 * 0.5, x * 0.5)
}

/// Quantile of the chi-square distribution with `dof` degrees of freedom.
pub fn quantile(p: f64, dof: usize) -> f64 {
    assert!(dof > 0 && p > 0.0 && p < 1.0);
    let k = dof as f64;
    // Wilson-Hilferty start, then bracketed bisection refined by Newton steps
    let z = normal_quantile(p);
    let c = 2.0 / (9.0 * k);
    let mut x = (k * (1.0 - c + z * c.sqrt()).powi(3)).max(1e-8);
    let (mut lo, mut hi) = (0.0, x.max(1.0));
    while cdf(hi, dof) < p {
        hi *= 2.0;
    }
    for _ in 0..200 {
        let f = cdf(x, dof) - p;
        if f.abs() < 1e-14 {
            break;
        }
        if f < 0.0 {
            lo = x;
        } else {
            hi = x;
        }
        let pdf = ((k * 0.5 - 1.0) * x.ln() - x * 0.5 - k * 0.5 * 2.0.ln() - libm::lgamma(k * 0.5)).exp();
        let newton = x - f / pdf;
        x = if pdf > 0.0 && newton > lo && newton < hi { newton } else { 0.5 * (lo + hi) };
        if hi - lo < 1e-13 * hi {
            break;
        }
    }
    x
}

/// 95% gate used by the measurement updates.
pub fn gate_95(dof: usize) -> f64 {
    quantile(0.95, dof)
}

/// Acklam's rational approximation, only used to seed the root finder.
#[allow(clippy::excessive_precision)] // published coefficients, kept verbatim
fn normal_quantile(p: f64) -> f64 {
    let a = [-3.969683028665376e1, 2.209460984245205e2, -2.759285104469687e2, 1.383577518672690e2, -3.066479806614716e1, 2.506628277459239];
    let b = [-5.447609879822406e1, 1.615858368580409e2, -1.556989798598866e2, 6.680131188771972e1, -1.328068155288572e1];
    let c = [-7.784894002430293e-3, -3.223964580411365e-1, -2.400758277161838, -2.549732539343734, 4.374664141464968, 2.938163982698783];
    let d = [7.784695709041462e-3, 3.224671290700398e-1, 2.445134137142996, 3.754408661907416];
    let pl = 0.02425;
    if p < pl {
        let q = (-2.0 * p.ln()).sqrt();
        (((((c[0] * q + c[1]) * q + c[2]) * q + c[3]) * q + c[4]) * q + c[5]) / ((((d[0] * q + d[1]) * q + d[2]) * q + d[3]) * q + 1.0)
    } else if p > 1.0 - pl {
        -normal_quantile(1.0 - p)
    } else {
        let q = p - 0.5;
        let r = q * q;
        (((((a[0] * r + a[1]) * r + a[2]) * r + a[3]) * r + a[4]) * r + a[5]) * q
            / (((((b[0] * r + b[1]) * r + b[2]) * r + b[3]) * r + b[4]) * r + 1.0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    // reference values tabulated with scipy.stats.chi2
    const TABLE: &[(usize, f64, f64, f64, f64)] = &[
        (1, 3.841458820694124, 0.0009820691171752555, 5.023886187314888, 0.7057338956950373),
        (2, 5.991464547107979, 0.05063561596857975, 7.377758908227871, 0.6671289163019205),
        (3, 7.814727903251179, 0.21579528262389785, 9.348403604496148, 0.652357355267726),
        (4, 9.487729036781154, 0.4844185570879299, 11.143286781877796, 0.6454298932405317),
        (5, 11.070497693516351, 0.8312116134866625, 12.832501994030027, 0.642054119149042),
        (10, 18.307038053275146, 3.2469727802368413, 20.483177350807388, 0.6424819975720746),
        (15, 24.995790139728616, 6.262137795043253, 27.488392863442975, 0.6503785880702843),
        (37, 52.192319730102895, 22.105627161169515, 55.6679732642611, 0.6891827147156876),
        (100, 124.34211340400407, 74.22192747492373, 129.5611971858366, 0.7677952194991439),
        (750, 814.8215106565133, 676.0026142707586, 827.7852704009148, 0.9707904127859472),
    ];

    #[test]
    fn quantiles_match_reference() {
        for &(d, q95, q025, q975, c) in TABLE {
            assert!((quantile(0.95, d) - q95).abs() < 1e-9 * q95, "dof {d}");
            assert!((quantile(0.025, d) - q025).abs() < 1e-8 * q025.max(1e-3), "dof {d}");
            assert!((quantile(0.975, d) - q975).abs() < 1e-9 * q975, "dof {d}");
            assert!((cdf(d as f64 * 1.1, d) - c).abs() < 1e-12, "dof {d}");
        }
    }
}
