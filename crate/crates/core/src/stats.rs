//! One-dimensional goodness-of-fit helpers: normal and mixture CDFs,
//! Kolmogorov–Smirnov statistics and quantile-coupled W2.

use statrs::function::erf::erfc;

use crate::error::{Error, Result};
use crate::gmm::GaussianMixture;

/// Asymptotic Kolmogorov distribution quantile at the 1% level.
pub const KS_1PCT: f64 = 1.6276;

pub fn normal_cdf(z: f64) -> f64 {
    0.5 * erfc(-z / std::f64::consts::SQRT_2)
}

fn require_1d(g: &GaussianMixture) -> Result<()> {
    if g.dim() != 1 {
        return Err(Error::DimensionMismatch { expected: 1, got: g.dim() });
    }
    Ok(())
}

/// CDF of a one-dimensional mixture.
pub fn gmm_cdf_1d(g: &GaussianMixture, x: f64) -> Result<f64> {
    require_1d(g)?;
    Ok(g.components()
        .iter()
        .map(|c| c.weight() * normal_cdf((x - c.mean()[0]) / c.cov()[(0, 0)].sqrt()))
        .sum::<f64>()
        .clamp(0.0, 1.0))
}

/// Quantile of a one-dimensional mixture by bisection.
pub fn gmm_quantile_1d(g: &GaussianMixture, u: f64) -> Result<f64> {
    require_1d(g)?;
    if !(u > 0.0 && u < 1.0) {
        return Err(Error::Input(format!("quantile level must lie in (0, 1), got {u}")));
    }
    let sd_max = g.components().iter().map(|c| c.cov()[(0, 0)].sqrt()).fold(0.0, f64::max);
    let (mut lo, mut hi) = g.components().iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), c| {
        (l.min(c.mean()[0]), h.max(c.mean()[0]))
    });
    lo -= 40.0 * sd_max;
    hi += 40.0 * sd_max;
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if gmm_cdf_1d(g, mid)? < u {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(0.5 * (lo + hi))
}

fn sorted(xs: &[f64]) -> Vec<f64> {
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    v
}

/// `sup_x |F_n(x) − F(x)|` for the empirical CDF of `samples`.
pub fn ks_one_sample<F: Fn(f64) -> f64>(samples: &[f64], cdf: F) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::Input("KS test needs samples".into()));
    }
    let xs = sorted(samples);
    let n = xs.len() as f64;
    Ok(xs
        .iter()
        .enumerate()
        .map(|(i, &x)| {
            let f = cdf(x);
            (f - i as f64 / n).max((i + 1) as f64 / n - f)
        })
        .fold(0.0, f64::max))
}

/// `sup_x |F_a(x) − F_b(x)|` for two empirical CDFs.
pub fn ks_two_sample(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::Input("KS test needs samples on both sides".into()));
    }
    let (xa, xb) = (sorted(a), sorted(b));
    let (na, nb) = (xa.len() as f64, xb.len() as f64);
    let (mut i, mut j) = (0, 0);
    let mut d: f64 = 0.0;
    while i < xa.len() && j < xb.len() {
        let x = xa[i].min(xb[j]);
        while i < xa.len() && xa[i] <= x {
            i += 1;
        }
        while j < xb.len() && xb[j] <= x {
            j += 1;
        }
        d = d.max((i as f64 / na - j as f64 / nb).abs());
    }
    Ok(d)
}

/// One-sample KS critical value at the 1% level.
pub fn ks_critical_1pct(n: usize) -> f64 {
    KS_1PCT / (n as f64).sqrt()
}

/// Two-sample KS critical value at the 1% level.
pub fn ks_critical_two_sample_1pct(n: usize, m: usize) -> f64 {
    let (n, m) = (n as f64, m as f64);
    KS_1PCT * ((n + m) / (n * m)).sqrt()
}

/// W2 between the empirical law of `samples` and a law given by its quantile
/// function: `∫₀¹ (F_n⁻¹(u) − Q(u))² du`, each empirical cell integrated with a
/// midpoint rule on `sub` points.
pub fn w2_to_quantile<Q: Fn(f64) -> Result<f64>>(samples: &[f64], quantile: Q, sub: usize) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::Input("W2 needs samples".into()));
    }
    let xs = sorted(samples);
    let n = xs.len() as f64;
    let sub = sub.max(1);
    let h = 1.0 / (n * sub as f64);
    let mut acc = 0.0;
    for (i, &x) in xs.iter().enumerate() {
        for k in 0..sub {
            let u = (i as f64 + (k as f64 + 0.5) / sub as f64) / n;
            let q = quantile(u)?;
            acc += (x - q) * (x - q) * h;
        }
    }
    Ok(acc.sqrt())
}

/// [`w2_to_quantile`] against a one-dimensional mixture.
pub fn w2_to_gmm_1d(samples: &[f64], g: &GaussianMixture) -> Result<f64> {
    require_1d(g)?;
    w2_to_quantile(samples, |u| gmm_quantile_1d(g, u), 4)
}
