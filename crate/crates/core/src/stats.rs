//! Small statistics toolkit: streaming moments, regressions, normality and
//! two-sample tests.

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal, StudentsT};

use crate::error::{LabError, Result};

/// Streaming mean and variance (Welford) with an exact pairwise merge.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Moments {
    pub count: u64,
    pub mean: f64,
    m2: f64,
}

impl Moments {
    pub fn push(&mut self, x: f64) {
        self.count += 1;
        let d = x - self.mean;
        self.mean += d / self.count as f64;
        self.m2 += d * (x - self.mean);
    }

    pub fn merge(&mut self, other: &Moments) {
        if other.count == 0 {
            return;
        }
        let n = self.count + other.count;
        let d = other.mean - self.mean;
        let (na, nb) = (self.count as f64, other.count as f64);
        self.mean += d * nb / n as f64;
        self.m2 += other.m2 + d * d * na * nb / n as f64;
        self.count = n;
    }

    pub fn from_slice(xs: &[f64]) -> Self {
        // pairwise reduction keeps rounding error logarithmic in the length
        if xs.len() <= 64 {
            let mut m = Moments::default();
            xs.iter().for_each(|&x| m.push(x));
            return m;
        }
        let (a, b) = xs.split_at(xs.len() / 2);
        let mut m = Self::from_slice(a);
        m.merge(&Self::from_slice(b));
        m
    }

    /// Unbiased sample variance.
    pub fn variance(&self) -> f64 {
        if self.count < 2 {
            return 0.0;
        }
        self.m2 / (self.count - 1) as f64
    }

    pub fn sd(&self) -> f64 {
        self.variance().sqrt()
    }

    /// Standard error of the mean.
    pub fn se(&self) -> f64 {
        if self.count < 2 {
            return f64::INFINITY;
        }
        (self.variance() / self.count as f64).sqrt()
    }
}

pub fn mean_se(xs: &[f64]) -> (f64, f64) {
    let m = Moments::from_slice(xs);
    (m.mean, m.se())
}

/// Jackknife estimate and standard error of an arbitrary statistic.
pub fn jackknife(xs: &[f64], stat: impl Fn(&[f64]) -> f64) -> (f64, f64) {
    let n = xs.len();
    let full = stat(xs);
    if n < 2 {
        return (full, f64::INFINITY);
    }
    let mut buf = Vec::with_capacity(n - 1);
    let loo: Vec<f64> = (0..n)
        .map(|i| {
            buf.clear();
            buf.extend(xs[..i].iter().chain(&xs[i + 1..]).copied());
            stat(&buf)
        })
        .collect();
    let m = loo.iter().sum::<f64>() / n as f64;
    let var = (n - 1) as f64 / n as f64 * loo.iter().map(|v| (v - m).powi(2)).sum::<f64>();
    (full, var.sqrt())
}

/// Jackknife of a sample mean, in linear time.
pub fn jackknife_mean(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let total: f64 = xs.iter().sum();
    let loo: Vec<f64> = xs.iter().map(|x| (total - x) / (n - 1.0)).collect();
    let m = loo.iter().sum::<f64>() / n;
    let var = (n - 1.0) / n * loo.iter().map(|v| (v - m).powi(2)).sum::<f64>();
    (total / n, var.sqrt())
}

/// Ordinary least squares with a two-sided 95% interval on the slope.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LineFit {
    pub slope: f64,
    pub intercept: f64,
    pub slope_se: f64,
    pub ci_lo: f64,
    pub ci_hi: f64,
}

pub fn ols(x: &[f64], y: &[f64]) -> Result<LineFit> {
    let n = x.len();
    if n != y.len() || n < 2 {
        return Err(LabError::Refused(format!("regression needs >= 2 paired points, got {n}")));
    }
    let mx = x.iter().sum::<f64>() / n as f64;
    let my = y.iter().sum::<f64>() / n as f64;
    let sxx: f64 = x.iter().map(|v| (v - mx).powi(2)).sum();
    if sxx == 0.0 {
        return Err(LabError::Refused("regressor has zero spread".into()));
    }
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let (slope_se, half) = if n > 2 {
        let rss: f64 = x.iter().zip(y).map(|(a, b)| (b - intercept - slope * a).powi(2)).sum();
        let se = (rss / (n - 2) as f64 / sxx).sqrt();
        let t = StudentsT::new(0.0, 1.0, (n - 2) as f64).map_err(|e| LabError::Domain(e.to_string()))?;
        (se, se * t.inverse_cdf(0.975))
    } else {
        (f64::INFINITY, f64::INFINITY)
    };
    Ok(LineFit { slope, intercept, slope_se, ci_lo: slope - half, ci_hi: slope + half })
}

/// OLS of `ln y` on `ln x`.
pub fn loglog_fit(x: &[f64], y: &[f64]) -> Result<LineFit> {
    if x.iter().chain(y).any(|v| !(*v > 0.0)) {
        return Err(LabError::Domain("log-log fit needs positive data".into()));
    }
    let lx: Vec<f64> = x.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = y.iter().map(|v| v.ln()).collect();
    ols(&lx, &ly)
}

/// Pearson correlation.
pub fn correlation(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx).powi(2);
        syy += (b - my).powi(2);
    }
    sxy / (sxx * syy).sqrt()
}

/// Asymptotic Kolmogorov survival function `Q(lambda)`.
pub fn kolmogorov_q(lambda: f64) -> f64 {
    if lambda < 0.2 {
        return 1.0;
    }
    let mut s = 0.0;
    for k in 1..200 {
        let term = (-2.0 * (k * k) as f64 * lambda * lambda).exp();
        s += if k % 2 == 1 { term } else { -term };
        if term < 1e-16 {
            break;
        }
    }
    (2.0 * s).clamp(0.0, 1.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KsResult {
    pub statistic: f64,
    pub p_value: f64,
}

/// Two-sample Kolmogorov-Smirnov test with Stephens' small-sample correction.
pub fn ks_two_sample(a: &[f64], b: &[f64]) -> Result<KsResult> {
    if a.is_empty() || b.is_empty() {
        return Err(LabError::Refused("KS test needs non-empty samples".into()));
    }
    let mut a = a.to_vec();
    let mut b = b.to_vec();
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    let (na, nb) = (a.len(), b.len());
    let (mut i, mut j, mut d) = (0usize, 0usize, 0.0f64);
    while i < na && j < nb {
        let x = a[i].min(b[j]);
        while i < na && a[i] <= x {
            i += 1;
        }
        while j < nb && b[j] <= x {
            j += 1;
        }
        d = d.max((i as f64 / na as f64 - j as f64 / nb as f64).abs());
    }
    let ne = (na * nb) as f64 / (na + nb) as f64;
    let sq = ne.sqrt();
    let p = kolmogorov_q((sq + 0.12 + 0.11 / sq) * d);
    Ok(KsResult { statistic: d, p_value: p })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormalityStats {
    pub n: usize,
    pub mean: f64,
    pub sd: f64,
    pub skewness: f64,
    pub skewness_se: f64,
    pub excess_kurtosis: f64,
    pub kurtosis_se: f64,
    /// Anderson-Darling statistic with the estimated-parameter correction.
    pub anderson_darling: f64,
    pub ad_p_value: f64,
}

impl NormalityStats {
    /// Both moment statistics within `k` standard errors of zero.
    pub fn moments_pass(&self, k: f64) -> bool {
        self.skewness.abs() < k * self.skewness_se && self.excess_kurtosis.abs() < k * self.kurtosis_se
    }
}

/// Sample skewness and excess kurtosis with their standard errors, and an
/// Anderson-Darling test against the fitted normal.
pub fn normality(xs: &[f64]) -> Result<NormalityStats> {
    let n = xs.len();
    if n < 8 {
        return Err(LabError::Refused(format!("normality statistics need >= 8 samples, got {n}")));
    }
    let nf = n as f64;
    let m = Moments::from_slice(xs);
    let sd = m.sd();
    if !(sd > 0.0) {
        return Err(LabError::Refused("sample has zero variance".into()));
    }
    let (mut m2, mut m3, mut m4) = (0.0, 0.0, 0.0);
    for &x in xs {
        let d = x - m.mean;
        m2 += d * d;
        m3 += d * d * d;
        m4 += d * d * d * d;
    }
    m2 /= nf;
    m3 /= nf;
    m4 /= nf;
    let g1 = m3 / m2.powf(1.5);
    let g2 = m4 / (m2 * m2) - 3.0;
    // bias-adjusted versions (as in common statistics packages)
    let skew = (nf * (nf - 1.0)).sqrt() / (nf - 2.0) * g1;
    let kurt = (nf - 1.0) / ((nf - 2.0) * (nf - 3.0)) * ((nf + 1.0) * g2 + 6.0);
    let ses = (6.0 * nf * (nf - 1.0) / ((nf - 2.0) * (nf + 1.0) * (nf + 3.0))).sqrt();
    let sek = 2.0 * ses * ((nf * nf - 1.0) / ((nf - 3.0) * (nf + 5.0))).sqrt();

    let norm = Normal::new(0.0, 1.0).expect("standard normal");
    let mut z: Vec<f64> = xs.iter().map(|x| (x - m.mean) / sd).collect();
    z.sort_by(f64::total_cmp);
    let mut a2 = 0.0;
    for (i, zi) in z.iter().enumerate() {
        let f = norm.cdf(*zi).clamp(1e-300, 1.0 - 1e-16);
        let g = norm.cdf(z[n - 1 - i]).clamp(1e-300, 1.0 - 1e-16);
        a2 += (2 * i + 1) as f64 * (f.ln() + (1.0 - g).ln());
    }
    let a2 = -nf - a2 / nf;
    let astar = a2 * (1.0 + 0.75 / nf + 2.25 / (nf * nf));
    let p = if astar >= 0.6 {
        (1.2937 - 5.709 * astar + 0.0186 * astar * astar).exp()
    } else if astar >= 0.34 {
        (0.9177 - 4.279 * astar - 1.38 * astar * astar).exp()
    } else if astar >= 0.2 {
        1.0 - (-8.318 + 42.796 * astar - 59.938 * astar * astar).exp()
    } else {
        1.0 - (-13.436 + 101.14 * astar - 223.73 * astar * astar).exp()
    };
    Ok(NormalityStats {
        n,
        mean: m.mean,
        sd,
        skewness: skew,
        skewness_se: ses,
        excess_kurtosis: kurt,
        kurtosis_se: sek,
        anderson_darling: astar,
        ad_p_value: p.clamp(0.0, 1.0),
    })
}
