//! Order-independent reductions and the goodness-of-fit statistics used by
//! the ensemble tests.

use statrs::distribution::{ChiSquared, ContinuousCDF};

use crate::error::{Error, Result};

/// Pairwise summation; the result depends only on the order of `xs`, not on
/// how the values were produced.
pub fn pairwise_sum(xs: &[f64]) -> f64 {
    const LEAF: usize = 32;
    if xs.len() <= LEAF {
        return xs.iter().sum();
    }
    let mid = xs.len() / 2;
    pairwise_sum(&xs[..mid]) + pairwise_sum(&xs[mid..])
}

pub fn mean(xs: &[f64]) -> f64 {
    pairwise_sum(xs) / xs.len() as f64
}

/// Sample mean and standard error of the mean (`n - 1` in the variance).
pub fn mean_and_se(xs: &[f64]) -> (f64, f64) {
    let n = xs.len();
    let m = mean(xs);
    if n < 2 {
        return (m, 0.0);
    }
    let dev: Vec<f64> = xs.iter().map(|x| (x - m) * (x - m)).collect();
    let var = pairwise_sum(&dev) / (n - 1) as f64;
    (m, (var / n as f64).sqrt())
}

/// `ln sum exp(x)`, with `-inf` entries contributing zero.
pub fn logsumexp(xs: &[f64]) -> f64 {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Least-squares line through `(x, y)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LineFit {
    pub slope: f64,
    pub intercept: f64,
    /// Standard error of the slope (`NaN` with fewer than three points).
    pub slope_se: f64,
}

pub fn ols(x: &[f64], y: &[f64]) -> Result<LineFit> {
    if x.len() != y.len() {
        return Err(Error::DimensionMismatch {
            expected: x.len(),
            found: y.len(),
        });
    }
    let n = x.len();
    if n < 2 {
        return Err(Error::InsufficientWindow { points: n, required: 2 });
    }
    let mx = mean(x);
    let my = mean(y);
    let sxx: Vec<f64> = x.iter().map(|a| (a - mx) * (a - mx)).collect();
    let sxy: Vec<f64> = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).collect();
    let sxx = pairwise_sum(&sxx);
    if !(sxx > 0.0) {
        return Err(Error::Domain("abscissae are all equal".into()));
    }
    let slope = pairwise_sum(&sxy) / sxx;
    let intercept = my - slope * mx;
    let slope_se = if n > 2 {
        let res: Vec<f64> = x
            .iter()
            .zip(y)
            .map(|(a, b)| {
                let e = b - intercept - slope * a;
                e * e
            })
            .collect();
        (pairwise_sum(&res) / (n - 2) as f64 / sxx).sqrt()
    } else {
        f64::NAN
    };
    Ok(LineFit {
        slope,
        intercept,
        slope_se,
    })
}

/// Kolmogorov survival function `Q(lambda) = 2 sum (-1)^{k-1} exp(-2 k^2 lambda^2)`.
pub fn kolmogorov_sf(lambda: f64) -> f64 {
    if !(lambda > 0.0) {
        return 1.0;
    }
    if lambda < 1.18 {
        // Jacobi theta form, converges fast for small arguments
        let pi = std::f64::consts::PI;
        let y = -pi * pi / (8.0 * lambda * lambda);
        let s: f64 = [1.0f64, 3.0, 5.0, 7.0, 9.0, 11.0]
            .iter()
            .map(|k| (k * k * y).exp())
            .sum();
        return (1.0 - (2.0 * pi).sqrt() / lambda * s).clamp(0.0, 1.0);
    }
    let mut sum = 0.0;
    for k in 1..=100 {
        let kf = k as f64;
        let term = (-2.0 * kf * kf * lambda * lambda).exp();
        sum += if k % 2 == 1 { term } else { -term };
        if term < 1e-17 {
            break;
        }
    }
    (2.0 * sum).clamp(0.0, 1.0)
}

/// Asymptotic KS p-value with the small-sample correction `sqrt(n) + 0.12 + 0.11/sqrt(n)`.
pub fn ks_p_value(d: f64, n_effective: f64) -> f64 {
    let s = n_effective.sqrt();
    kolmogorov_sf((s + 0.12 + 0.11 / s) * d)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KsResult {
    pub statistic: f64,
    pub p_value: f64,
    pub n: usize,
}

/// One-sample KS test of `samples` against a continuous `cdf`.
pub fn ks_one_sample(samples: &[f64], cdf: impl Fn(f64) -> f64) -> KsResult {
    let mut xs = samples.to_vec();
    xs.sort_by(f64::total_cmp);
    let n = xs.len() as f64;
    let mut d: f64 = 0.0;
    for (i, &x) in xs.iter().enumerate() {
        let f = cdf(x);
        d = d.max((i as f64 + 1.0) / n - f).max(f - i as f64 / n);
    }
    KsResult {
        statistic: d,
        p_value: ks_p_value(d, n),
        n: xs.len(),
    }
}

/// KS distance between the empirical law of `events` (finite times in
/// `[0, horizon]`, out of `total` draws) and `cdf`, evaluated on `[0, horizon]`.
/// Draws without an event by `horizon` are censored.
pub fn ks_censored(events: &[f64], total: usize, horizon: f64, cdf: impl Fn(f64) -> f64) -> KsResult {
    let mut xs: Vec<f64> = events.iter().copied().filter(|&t| t <= horizon).collect();
    xs.sort_by(f64::total_cmp);
    let n = total as f64;
    let mut d: f64 = 0.0;
    for (i, &x) in xs.iter().enumerate() {
        let f = cdf(x);
        d = d.max((i as f64 + 1.0) / n - f).max(f - i as f64 / n);
    }
    d = d.max((cdf(horizon) - xs.len() as f64 / n).abs());
    KsResult {
        statistic: d,
        p_value: ks_p_value(d, n),
        n: total,
    }
}

/// Two-sample KS test.
pub fn ks_two_sample(a: &[f64], b: &[f64]) -> KsResult {
    let mut xa = a.to_vec();
    let mut xb = b.to_vec();
    xa.sort_by(f64::total_cmp);
    xb.sort_by(f64::total_cmp);
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
    KsResult {
        statistic: d,
        p_value: ks_p_value(d, na * nb / (na + nb)),
        n: xa.len() + xb.len(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ChiSquareResult {
    pub statistic: f64,
    pub dof: usize,
    pub p_value: f64,
}

/// Pearson chi-square of observed counts against expected counts. Cells with
/// expected count below 5 are pooled; a pooled cell that is still too small
/// is merged into the smallest remaining cell.
pub fn chi_square(observed: &[usize], expected: &[f64]) -> Result<ChiSquareResult> {
    if observed.len() != expected.len() {
        return Err(Error::DimensionMismatch {
            expected: expected.len(),
            found: observed.len(),
        });
    }
    let mut cells: Vec<(f64, f64)> = Vec::new();
    let (mut pooled_o, mut pooled_e) = (0.0, 0.0);
    for (&o, &e) in observed.iter().zip(expected) {
        if e < 5.0 {
            pooled_o += o as f64;
            pooled_e += e;
        } else {
            cells.push((o as f64, e));
        }
    }
    if pooled_e >= 5.0 {
        cells.push((pooled_o, pooled_e));
    } else if pooled_e > 0.0 || pooled_o > 0.0 {
        if let Some(smallest) = cells.iter_mut().min_by(|a, b| a.1.total_cmp(&b.1)) {
            smallest.0 += pooled_o;
            smallest.1 += pooled_e;
        } else {
            cells.push((pooled_o, pooled_e));
        }
    }
    let statistic: f64 = cells
        .iter()
        .map(|&(o, e)| if e > 0.0 { (o - e) * (o - e) / e } else if o > 0.0 { f64::INFINITY } else { 0.0 })
        .sum();
    if cells.len() < 2 {
        let p_value = if statistic == 0.0 { 1.0 } else { 0.0 };
        return Ok(ChiSquareResult {
            statistic,
            dof: 0,
            p_value,
        });
    }
    let dof = cells.len() - 1;
    let dist = ChiSquared::new(dof as f64).map_err(|e| Error::Domain(e.to_string()))?;
    let p_value = if statistic.is_finite() { dist.sf(statistic) } else { 0.0 };
    Ok(ChiSquareResult {
        statistic,
        dof,
        p_value,
    })
}
