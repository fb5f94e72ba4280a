//! Statistical helpers shared by the estimators, the variance reports and
//! the test oracles.

use crate::math::Rgb;

/// Streaming mean/variance (Welford).
#[derive(Clone, Debug, Default)]
pub struct Welford {
    n: u64,
    mean: f64,
    m2: f64,
}

impl Welford {
    pub fn new() -> Self {
        Welford::default()
    }

    pub fn push(&mut self, x: f64) {
        self.n += 1;
        let d = x - self.mean;
        self.mean += d / self.n as f64;
        self.m2 += d * (x - self.mean);
    }

    pub fn count(&self) -> u64 {
        self.n
    }

    pub fn mean(&self) -> f64 {
        self.mean
    }

    /// Unbiased sample variance.
    pub fn variance(&self) -> f64 {
        if self.n < 2 {
            0.0
        } else {
            self.m2 / (self.n - 1) as f64
        }
    }

    pub fn std_error(&self) -> f64 {
        if self.n < 2 {
            0.0
        } else {
            (self.variance() / self.n as f64).sqrt()
        }
    }
}

/// Per-channel Welford tallies for radiance estimates.
#[derive(Clone, Debug, Default)]
pub struct WelfordRgb {
    pub r: Welford,
    pub g: Welford,
    pub b: Welford,
}

impl WelfordRgb {
    pub fn new() -> Self {
        WelfordRgb::default()
    }

    pub fn push(&mut self, v: Rgb) {
        self.r.push(v.x);
        self.g.push(v.y);
        self.b.push(v.z);
    }

    pub fn mean(&self) -> Rgb {
        Rgb::new(self.r.mean(), self.g.mean(), self.b.mean())
    }

    pub fn variance(&self) -> Rgb {
        Rgb::new(self.r.variance(), self.g.variance(), self.b.variance())
    }

    pub fn std_error(&self) -> Rgb {
        Rgb::new(self.r.std_error(), self.g.std_error(), self.b.std_error())
    }

    pub fn count(&self) -> u64 {
        self.r.count()
    }
}

/// Regularized lower incomplete gamma P(a, x), series + continued fraction.
pub fn gamma_p(a: f64, x: f64) -> f64 {
    assert!(a > 0.0 && x >= 0.0);
    if x == 0.0 {
        return 0.0;
    }
    if x < a + 1.0 {
        // series representation
        let mut term = 1.0 / a;
        let mut sum = term;
        let mut n = a;
        for _ in 0..500 {
            n += 1.0;
            term *= x / n;
            sum += term;
            if term.abs() < sum.abs() * 1e-15 {
                break;
            }
        }
        sum * (-x + a * x.ln() - ln_gamma(a)).exp()
    } else {
        // continued fraction for Q(a, x) = 1 - P(a, x)
        let tiny = 1e-300;
        let mut b = x + 1.0 - a;
        let mut c = 1.0 / tiny;
        let mut d = 1.0 / b;
        let mut h = d;
        for i in 1..500 {
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
            if (delta - 1.0).abs() < 1e-15 {
                break;
            }
        }
        let q = (-x + a * x.ln() - ln_gamma(a)).exp() * h;
        1.0 - q
    }
}

/// Lanczos approximation of ln Gamma.
pub fn ln_gamma(x: f64) -> f64 {
    const COEF: [f64; 6] = [
        76.18009172947146,
        -86.50532032941677,
        24.01409824083091,
        -1.231739572450155,
        0.1208650973866179e-2,
        -0.5395239384953e-5,
    ];
    let mut y = x;
    let tmp = x + 5.5;
    let tmp = tmp - (x + 0.5) * tmp.ln();
    let mut ser = 1.000000000190015;
    for c in COEF {
        y += 1.0;
        ser += c / y;
    }
    -tmp + (2.5066282746310005 * ser / x).ln()
}

/// Upper-tail p-value of a chi-square statistic.
pub fn chi2_pvalue(stat: f64, dof: usize) -> f64 {
    (1.0 - gamma_p(dof as f64 / 2.0, stat / 2.0)).clamp(0.0, 1.0)
}

/// Pearson chi-square test of observed counts against expected counts.
/// Bins with expected count below 5 are pooled into one.
pub fn chi2_test(observed: &[f64], expected: &[f64]) -> f64 {
    assert_eq!(observed.len(), expected.len());
    let mut stat = 0.0;
    let mut pooled_obs = 0.0;
    let mut pooled_exp = 0.0;
    let mut bins = 0usize;
    for (&o, &e) in observed.iter().zip(expected) {
        if e < 5.0 {
            pooled_obs += o;
            pooled_exp += e;
        } else {
            stat += (o - e) * (o - e) / e;
            bins += 1;
        }
    }
    if pooled_exp > 0.0 {
        stat += (pooled_obs - pooled_exp) * (pooled_obs - pooled_exp) / pooled_exp;
        bins += 1;
    }
    if bins < 2 {
        return 1.0;
    }
    chi2_pvalue(stat, bins - 1)
}

/// Index of the equal-solid-angle (cos theta, phi) bin containing `dir`.
pub fn sphere_bin(dir: crate::math::Vec3, n_cos: usize, n_phi: usize) -> usize {
    let c = ((dir.z.clamp(-1.0, 1.0) + 1.0) / 2.0 * n_cos as f64) as usize;
    let c = c.min(n_cos - 1);
    let phi = dir.y.atan2(dir.x) + std::f64::consts::PI;
    let p = (phi / (2.0 * std::f64::consts::PI) * n_phi as f64) as usize;
    let p = p.min(n_phi - 1);
    c * n_phi + p
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn welford_matches_two_pass() {
        let xs = [1.0, 2.5, -0.5, 4.0, 0.0, 3.25];
        let mut w = Welford::new();
        for &x in &xs {
            w.push(x);
        }
        let mean: f64 = xs.iter().sum::<f64>() / xs.len() as f64;
        let var: f64 =
            xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (xs.len() - 1) as f64;
        assert!((w.mean() - mean).abs() < 1e-12);
        assert!((w.variance() - var).abs() < 1e-12);
    }

    #[test]
    fn chi2_cdf_known_values() {
        // chi2(2) CDF is 1 - exp(-x/2)
        for x in [0.5, 1.0, 3.0, 8.0] {
            let p = chi2_pvalue(x, 2);
            assert!((p - (-x / 2.0f64).exp()).abs() < 1e-10, "x={x}");
        }
        // chi2(1) at 1.0: 1 - 0.6827
        assert!((chi2_pvalue(1.0, 1) - (1.0 - 0.6826894921)).abs() < 1e-6);
        // chi2(10) at 10: ~0.4405
        assert!((chi2_pvalue(10.0, 10) - 0.4405).abs() < 1e-3);
    }

    #[test]
    fn chi2_accepts_exact_multinomial() {
        // counts exactly equal to expectation give p = 1
        let e = vec![100.0; 16];
        let p = chi2_test(&e, &e);
        assert!((p - 1.0).abs() < 1e-12);
    }
}
