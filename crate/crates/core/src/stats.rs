//! Running moments and z-scores for Monte Carlo comparisons.

use crate::math::sqrt;

/// A point estimate with its standard error. `exact` marks a deterministic value (se = 0).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Estimate {
    pub value: f64,
    pub se: f64,
    pub exact: bool,
}

impl Estimate {
    pub fn exact(value: f64) -> Self {
        Estimate { value, se: 0.0, exact: true }
    }

    pub fn sampled(value: f64, se: f64) -> Self {
        Estimate { value, se, exact: false }
    }

    /// Delta-method product of two independent estimates.
    pub fn product(self, other: Estimate) -> Estimate {
        let (x, y) = (other.value * self.se, self.value * other.se);
        let se = sqrt(x * x + y * y);
        Estimate { value: self.value * other.value, se, exact: self.exact && other.exact }
    }
}

/// Welford accumulator with third and fourth central moments (Terriberry's update).
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Moments {
    n: u64,
    mean: f64,
    m2: f64,
    m3: f64,
    m4: f64,
}

impl Moments {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, x: f64) {
        let n1 = self.n as f64;
        self.n += 1;
        let n = self.n as f64;
        let delta = x - self.mean;
        let dn = delta / n;
        let dn2 = dn * dn;
        let term1 = delta * dn * n1;
        self.mean += dn;
        self.m4 += term1 * dn2 * (n * n - 3.0 * n + 3.0) + 6.0 * dn2 * self.m2 - 4.0 * dn * self.m3;
        self.m3 += term1 * dn * (n - 2.0) - 3.0 * dn * self.m2;
        self.m2 += term1;
    }

    pub fn merge(&mut self, o: &Moments) {
        if o.n == 0 {
            return;
        }
        if self.n == 0 {
            *self = *o;
            return;
        }
        let (na, nb) = (self.n as f64, o.n as f64);
        let n = na + nb;
        let d = o.mean - self.mean;
        let d2 = d * d;
        let d3 = d2 * d;
        let d4 = d2 * d2;
        let m2 = self.m2 + o.m2 + d2 * na * nb / n;
        let m3 = self.m3 + o.m3 + d3 * na * nb * (na - nb) / (n * n) + 3.0 * d * (na * o.m2 - nb * self.m2) / n;
        let m4 = self.m4
            + o.m4
            + d4 * na * nb * (na * na - na * nb + nb * nb) / (n * n * n)
            + 6.0 * d2 * (na * na * o.m2 + nb * nb * self.m2) / (n * n)
            + 4.0 * d * (na * o.m3 - nb * self.m3) / n;
        self.mean += d * nb / n;
        self.m2 = m2;
        self.m3 = m3;
        self.m4 = m4;
        self.n += o.n;
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

    pub fn se(&self) -> f64 {
        if self.n < 2 {
            0.0
        } else {
            sqrt(self.variance() / self.n as f64)
        }
    }

    pub fn mean_estimate(&self) -> Estimate {
        Estimate::sampled(self.mean, self.se())
    }

    /// Sample variance with its asymptotic standard error `sqrt((mu4 - s^4) / n)`.
    pub fn variance_estimate(&self) -> Estimate {
        let n = self.n as f64;
        let s2 = self.variance();
        let mu4 = self.m4 / n;
        let mu2 = self.m2 / n;
        Estimate::sampled(s2, sqrt(((mu4 - mu2 * mu2) / n).max(0.0)))
    }
}

/// z-score of the difference of two independent estimates; 0 when both are exact and equal.
pub fn z_score(a: Estimate, b: Estimate) -> f64 {
    let d = a.value - b.value;
    let se = sqrt(a.se * a.se + b.se * b.se);
    if se == 0.0 {
        if d == 0.0 {
            0.0
        } else {
            f64::INFINITY * d.signum()
        }
    } else {
        d / se
    }
}

/// Weighted-sample effective size `(sum w)^2 / sum w^2`.
pub fn effective_sample_size(sum_w: f64, sum_w2: f64) -> f64 {
    if sum_w2 == 0.0 {
        0.0
    } else {
        sum_w * sum_w / sum_w2
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn moments_match_direct() {
        let xs = [1.0, 4.0, 2.5, -3.0, 7.0, 0.5];
        let mut m = Moments::new();
        xs.iter().for_each(|&x| m.push(x));
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
        let mu4 = xs.iter().map(|x| (x - mean).powi(4)).sum::<f64>() / n;
        assert!((m.mean() - mean).abs() < 1e-12);
        assert!((m.variance() - var).abs() < 1e-12);
        assert!((m.m4 / n - mu4).abs() < 1e-9);
    }

    #[test]
    fn merge_equals_sequential() {
        let xs: [f64; 7] = [0.3, 1.7, -2.0, 4.4, 0.0, 9.1, 2.2];
        let mut all = Moments::new();
        xs.iter().for_each(|&x| all.push(x));
        let mut a = Moments::new();
        let mut b = Moments::new();
        xs[..3].iter().for_each(|&x| a.push(x));
        xs[3..].iter().for_each(|&x| b.push(x));
        a.merge(&b);
        assert!((a.mean() - all.mean()).abs() < 1e-12);
        assert!((a.m2 - all.m2).abs() < 1e-9);
        assert!((a.m3 - all.m3).abs() < 1e-8);
        assert!((a.m4 - all.m4).abs() < 1e-7);
    }

    #[test]
    fn z_exact() {
        assert_eq!(z_score(Estimate::exact(1.0), Estimate::exact(1.0)), 0.0);
        assert!(z_score(Estimate::exact(1.0), Estimate::exact(2.0)).is_infinite());
    }
}
