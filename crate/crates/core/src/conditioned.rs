//! Paths conditioned on the collapse outcome, and exact log-space evaluation
//! of the population exponentials.
//!
//! Under the tilted measure `Q_gamma` the drivers `X_i` are standard Brownian
//! motions and the counts are homogeneous Poisson processes of rate
//! `theta(i|gamma)`, so `ln(q_a / q_gamma)` is an explicit function of
//! `(X(t), N(t), t)`; no time stepping is involved.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{rate_table, QndModel};
use crate::qdyn::{grid_steps, validate_simplex, DrivingNoise, SimOptions};
use crate::rng::ChannelStreams;
use crate::stats::{logsumexp, ols};

/// Minimum number of grid points in a slope-fit window.
pub const MIN_WINDOW_POINTS: usize = 10;
/// Default share of the horizon discarded before slope fitting.
pub const DEFAULT_BURN_IN: f64 = 0.1;

/// Drivers of a conditioned path.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionedNoise {
    pub gamma: usize,
    pub dt: f64,
    pub steps: usize,
    /// `x[i][k]`: Brownian path of diffusive channel `i` at `t_k`, `k = 0..=steps`.
    pub x: Vec<Vec<f64>>,
    /// Exact jump times per counting channel.
    pub jump_times: Vec<Vec<f64>>,
    /// Jump times snapped up to the grid (`ceil(t / dt)`); repeated indices are possible.
    pub jump_steps: Vec<Vec<usize>>,
}

/// `ln q_a(t_k)` on a (possibly strided) grid. `-inf` encodes `q_a = 0`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogPopulations {
    pub dt: f64,
    pub indices: Vec<usize>,
    pub logq: Vec<Vec<f64>>,
}

impl LogPopulations {
    pub fn times(&self) -> Vec<f64> {
        self.indices.iter().map(|&k| k as f64 * self.dt).collect()
    }

    pub fn final_logq(&self) -> &[f64] {
        self.logq.last().expect("at least one row")
    }

    /// Populations at the stored row closest to `t`.
    pub fn q_at(&self, t: f64) -> Vec<f64> {
        let k = (t / self.dt).round() as usize;
        let row = self.indices.partition_point(|&i| i < k).min(self.indices.len() - 1);
        self.logq[row].iter().map(|l| l.exp()).collect()
    }

    pub fn final_q(&self) -> Vec<f64> {
        self.final_logq().iter().map(|l| l.exp()).collect()
    }
}

fn normalize(logq: &mut [f64]) {
    let z = logsumexp(logq);
    for l in logq.iter_mut() {
        *l -= z;
    }
}

fn ln_positive(x: f64) -> f64 {
    if x > 0.0 {
        x.ln()
    } else {
        f64::NEG_INFINITY
    }
}

/// Samples drivers under `Q_gamma` and evaluates the populations on the grid.
#[allow(clippy::needless_range_loop)]
pub fn simulate_under_q_gamma(
    model: &QndModel,
    gamma: usize,
    q0: &[f64],
    t_final: f64,
    dt: f64,
    seed: u64,
    opts: &SimOptions,
) -> Result<(ConditionedNoise, LogPopulations)> {
    let d = model.dim();
    if q0.len() != d {
        return Err(Error::DimensionMismatch {
            expected: d,
            found: q0.len(),
        });
    }
    validate_simplex(q0)?;
    if gamma >= d {
        return Err(Error::Domain(format!("conditioning pointer {gamma} out of range 0..{d}")));
    }
    if !(q0[gamma] > 0.0) {
        return Err(Error::DegenerateConditioning {
            gamma,
            reason: "initial population is zero".into(),
        });
    }
    for (i, ch) in model.counting().iter().enumerate() {
        if ch.theta()[gamma] == 0.0 {
            return Err(Error::DegenerateConditioning {
                gamma,
                reason: format!("counting channel {} has zero intensity", model.n_diffusive() + i),
            });
        }
    }
    let steps = grid_steps(t_final, dt)?;
    let stride = opts.stride.max(1);
    let p = model.n_diffusive();
    let m = model.n_counting();
    let sqrt_dt = dt.sqrt();
    let mut streams = ChannelStreams::new(seed, p + m);

    let mut x = vec![Vec::with_capacity(steps + 1); p];
    for (i, xi) in x.iter_mut().enumerate() {
        let mut acc = 0.0;
        xi.push(acc);
        for _ in 0..steps {
            acc += streams.wiener(i, sqrt_dt);
            xi.push(acc);
        }
    }
    let horizon = steps as f64 * dt;
    let mut jump_times = vec![Vec::new(); m];
    let mut jump_steps = vec![Vec::new(); m];
    for (i, ch) in model.counting().iter().enumerate() {
        let rate = ch.theta()[gamma];
        let mut t = 0.0;
        loop {
            t += streams.exponential(p + i, rate);
            if t > horizon {
                break;
            }
            jump_times[i].push(t);
            jump_steps[i].push(((t / dt).ceil() as usize).clamp(1, steps));
        }
    }

    // per-channel coefficients of the log ratio against gamma
    let diff_coef: Vec<Vec<f64>> = model
        .diffusive()
        .iter()
        .map(|ch| (0..d).map(|a| ch.r()[a] - ch.r()[gamma]).collect())
        .collect();
    let log_theta: Vec<Vec<f64>> = model
        .counting()
        .iter()
        .map(|ch| (0..d).map(|a| ln_positive(ch.theta()[a] / ch.theta()[gamma])).collect())
        .collect();
    let log_q0: Vec<f64> = q0.iter().map(|&q| ln_positive(q)).collect();

    let mut indices = Vec::new();
    let mut rows = Vec::new();
    let mut counts = vec![0usize; m];
    for k in 0..=steps {
        for i in 0..m {
            while counts[i] < jump_steps[i].len() && jump_steps[i][counts[i]] <= k {
                counts[i] += 1;
            }
        }
        if !(k % stride == 0 || k == steps) {
            continue;
        }
        let t = k as f64 * dt;
        let mut row: Vec<f64> = (0..d)
            .map(|a| {
                let mut l = log_q0[a];
                for i in 0..p {
                    let c = diff_coef[i][a];
                    l += c * x[i][k] - 0.5 * c * c * t;
                }
                for (i, ch) in model.counting().iter().enumerate() {
                    if counts[i] > 0 {
                        l += log_theta[i][a] * counts[i] as f64;
                    }
                    l -= (ch.theta()[a] - ch.theta()[gamma]) * t;
                }
                l
            })
            .collect();
        normalize(&mut row);
        indices.push(k);
        rows.push(row);
    }
    Ok((
        ConditionedNoise {
            gamma,
            dt,
            steps,
            x,
            jump_times,
            jump_steps,
        },
        LogPopulations {
            dt,
            indices,
            logq: rows,
        },
    ))
}

/// Left-point evaluation of the stochastic-exponential solution driven by
/// recorded Wiener increments and grid jumps.
pub fn doleans_log_q(model: &QndModel, q0: &[f64], noise: &DrivingNoise) -> Result<LogPopulations> {
    let d = model.dim();
    if q0.len() != d {
        return Err(Error::DimensionMismatch {
            expected: d,
            found: q0.len(),
        });
    }
    validate_simplex(q0)?;
    let p = model.n_diffusive();
    let m = model.n_counting();
    let steps = noise.steps;
    let dt = noise.dt;
    if !(dt > 0.0) {
        return Err(Error::GridMismatch(format!("noise step {dt} is not positive")));
    }
    if noise.dw.len() != p || noise.jumps.len() != m {
        return Err(Error::GridMismatch(format!(
            "noise has {} diffusive and {} counting channels, model has {p} and {m}",
            noise.dw.len(),
            noise.jumps.len()
        )));
    }
    if noise.dw.iter().any(|w| w.len() != steps) {
        return Err(Error::GridMismatch(format!("Wiener increments do not cover {steps} steps")));
    }
    if noise
        .jumps
        .iter()
        .any(|js| js.windows(2).any(|w| w[0] > w[1]) || js.iter().any(|&j| j == 0 || j > steps))
    {
        return Err(Error::GridMismatch("jump indices outside 1..=steps or unsorted".into()));
    }

    let mut logq: Vec<f64> = q0.iter().map(|&q| ln_positive(q)).collect();
    normalize(&mut logq);
    let mut rows = Vec::with_capacity(steps + 1);
    rows.push(logq.clone());
    let mut cursor = vec![0usize; m];
    let mut q = vec![0.0; d];
    for k in 0..steps {
        for (qa, l) in q.iter_mut().zip(&logq) {
            *qa = l.exp();
        }
        let mut incr = vec![0.0; d];
        for (i, ch) in model.diffusive().iter().enumerate() {
            let r = ch.r();
            let mean: f64 = r.iter().zip(&q).map(|(r, q)| r * q).sum();
            let dw = noise.dw[i][k];
            for a in 0..d {
                let c = r[a] - mean;
                incr[a] += c * dw - 0.5 * c * c * dt;
            }
        }
        for (i, ch) in model.counting().iter().enumerate() {
            let th = ch.theta();
            let mean: f64 = th.iter().zip(&q).map(|(t, q)| t * q).sum();
            let mut dn = 0usize;
            while cursor[i] < noise.jumps[i].len() && noise.jumps[i][cursor[i]] == k + 1 {
                cursor[i] += 1;
                dn += 1;
            }
            for a in 0..d {
                if dn > 0 {
                    incr[a] += ln_positive(th[a] / mean) * dn as f64;
                }
                incr[a] -= (th[a] - mean) * dt;
            }
        }
        for (l, x) in logq.iter_mut().zip(&incr) {
            *l += x;
        }
        normalize(&mut logq);
        rows.push(logq.clone());
    }
    Ok(LogPopulations {
        dt,
        indices: (0..=steps).collect(),
        logq: rows,
    })
}

/// Ordinary least-squares slope of `ln q_alpha - ln q_gamma` over `window = (t0, t1)`.
/// Returns `-inf` when `q_alpha` vanishes inside the window.
pub fn log_ratio_slope(logq: &LogPopulations, alpha: usize, gamma: usize, window: (f64, f64)) -> Result<f64> {
    let (t0, t1) = window;
    let tol = 1e-9 * logq.dt;
    let mut ts = Vec::new();
    let mut ys = Vec::new();
    for (&k, row) in logq.indices.iter().zip(&logq.logq) {
        let t = k as f64 * logq.dt;
        if t + tol < t0 || t > t1 + tol {
            continue;
        }
        ts.push(t);
        ys.push(row[alpha] - row[gamma]);
    }
    if ts.len() < MIN_WINDOW_POINTS {
        return Err(Error::InsufficientWindow {
            points: ts.len(),
            required: MIN_WINDOW_POINTS,
        });
    }
    if alpha == gamma {
        return Ok(0.0);
    }
    if ys.iter().any(|y| y.is_nan() || *y == f64::INFINITY) {
        return Err(Error::Domain(format!("population {gamma} vanishes inside the fit window")));
    }
    if ys.contains(&f64::NEG_INFINITY) {
        return Ok(f64::NEG_INFINITY);
    }
    Ok(ols(&ts, &ys)?.slope)
}

/// Default fit window `(burn_in * T, T)`.
pub fn default_window(t_final: f64) -> (f64, f64) {
    (DEFAULT_BURN_IN * t_final, t_final)
}

/// `P(T(alpha) <= t) = 1 - sum_beta q_beta(0) exp(-lambda_hit(alpha|beta) t)`;
/// zero when `alpha` has no extinction channel.
pub fn hitting_time_cdf(model: &QndModel, q0: &[f64], alpha: usize, t: f64) -> f64 {
    if model.extinction_channels(alpha).is_empty() || !(t > 0.0) {
        return 0.0;
    }
    let table = rate_table(model);
    let survive: f64 = (0..model.dim())
        .map(|beta| {
            let lam = table.lambda_hit[alpha][beta];
            let decay = if lam == 0.0 { 1.0 } else { (-lam * t).exp() };
            q0[beta] * decay
        })
        .sum();
    (1.0 - survive).clamp(0.0, 1.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Channel, ChannelKind};
    use crate::qdyn::{simulate_q_diag, SimOptions};
    use approx::assert_abs_diff_eq;

    fn diffusive_qubit() -> QndModel {
        QndModel::with_channels(2, vec![Channel::real(ChannelKind::Diffusive, &[1.0, -1.0])]).unwrap()
    }

    fn counting_qubit(theta: [f64; 2]) -> QndModel {
        QndModel::with_channels(
            2,
            vec![Channel::real(ChannelKind::Counting, &[theta[0].sqrt(), theta[1].sqrt()])],
        )
        .unwrap()
    }

    #[test]
    fn pointer_start_stays_put() {
        let (_, lp) = simulate_under_q_gamma(&diffusive_qubit(), 1, &[0.0, 1.0], 2.0, 1e-3, 1, &SimOptions::default())
            .unwrap();
        assert!(lp.logq.iter().all(|r| r[1] == 0.0 && r[0] == f64::NEG_INFINITY));
    }

    #[test]
    fn rows_are_normalized() {
        let m = QndModel::with_channels(
            3,
            vec![
                Channel::real(ChannelKind::Diffusive, &[1.0, 0.0, -1.0]),
                Channel::real(ChannelKind::Counting, &[1.0, 2.0, 0.5]),
            ],
        )
        .unwrap();
        let (noise, lp) = simulate_under_q_gamma(&m, 2, &[0.2, 0.3, 0.5], 3.0, 1e-3, 4, &SimOptions::light(10)).unwrap();
        for r in &lp.logq {
            assert_abs_diff_eq!(logsumexp(r), 0.0, epsilon = 1e-12);
        }
        assert_eq!(noise.x[0].len(), 3001);
        assert!(noise.jump_steps[0].iter().all(|&k| (1..=3000).contains(&k)));
    }

    #[test]
    fn degenerate_conditioning_rejected() {
        let m = counting_qubit([0.0, 2.0]);
        let err = simulate_under_q_gamma(&m, 0, &[0.5, 0.5], 1.0, 1e-3, 0, &SimOptions::default()).unwrap_err();
        assert!(matches!(err, Error::DegenerateConditioning { gamma: 0, .. }));
        let err = simulate_under_q_gamma(&diffusive_qubit(), 0, &[0.0, 1.0], 1.0, 1e-3, 0, &SimOptions::default())
            .unwrap_err();
        assert!(matches!(err, Error::DegenerateConditioning { .. }));
    }

    #[test]
    fn conditioned_paths_collapse_to_gamma() {
        let m = diffusive_qubit();
        let mut hits = 0;
        for seed in 0..200 {
            let (_, lp) = simulate_under_q_gamma(&m, 0, &[0.5, 0.5], 5.0, 1e-3, seed, &SimOptions::light(5000)).unwrap();
            if lp.final_q()[0] > 0.99 {
                hits += 1;
            }
        }
        assert_eq!(hits, 200);
    }

    #[test]
    fn doleans_symmetric_quiet_path() {
        let noise = DrivingNoise {
            dt: 1e-3,
            steps: 1000,
            dw: vec![vec![0.0; 1000]],
            jumps: vec![],
        };
        let lp = doleans_log_q(&diffusive_qubit(), &[0.5, 0.5], &noise).unwrap();
        for r in &lp.logq {
            assert_abs_diff_eq!(r[0], 0.5f64.ln(), epsilon = 1e-14);
            assert_abs_diff_eq!(r[1], 0.5f64.ln(), epsilon = 1e-14);
        }
    }

    #[test]
    fn doleans_extinction_is_permanent() {
        let m = counting_qubit([0.0, 2.0]);
        let noise = DrivingNoise {
            dt: 1e-3,
            steps: 100,
            dw: vec![],
            jumps: vec![vec![40]],
        };
        let lp = doleans_log_q(&m, &[0.5, 0.5], &noise).unwrap();
        for (k, r) in lp.logq.iter().enumerate() {
            if k >= 40 {
                assert_eq!(r[0], f64::NEG_INFINITY);
                assert_eq!(r[1], 0.0);
            } else {
                assert!(r[0].is_finite());
            }
        }
    }

    #[test]
    fn doleans_rejects_bad_grid() {
        let noise = DrivingNoise {
            dt: 1e-3,
            steps: 10,
            dw: vec![vec![0.0; 9]],
            jumps: vec![],
        };
        assert!(matches!(
            doleans_log_q(&diffusive_qubit(), &[0.5, 0.5], &noise),
            Err(Error::GridMismatch(_))
        ));
    }

    fn mean_discrepancy(m: &QndModel, q0: &[f64], dt: f64) -> f64 {
        let opts = SimOptions {
            keep_noise: true,
            ..SimOptions::default()
        };
        let total: f64 = (0..10)
            .map(|seed| {
                let t = simulate_q_diag(m, q0, 2.0, dt, seed, &opts).unwrap();
                let lp = doleans_log_q(m, q0, t.noise.as_ref().unwrap()).unwrap();
                t.q.iter()
                    .zip(&lp.logq)
                    .flat_map(|(a, b)| a.iter().zip(b).map(|(x, l)| (x - l.exp()).abs()))
                    .fold(0.0, f64::max)
            })
            .sum();
        total / 10.0
    }

    #[test]
    fn doleans_and_euler_converge_together() {
        let m = QndModel::with_channels(
            2,
            vec![
                Channel::real(ChannelKind::Diffusive, &[0.5, -0.5]),
                Channel::real(ChannelKind::Counting, &[1.5, 1.0]),
            ],
        )
        .unwrap();
        let coarse = mean_discrepancy(&m, &[0.4, 0.6], 4e-3);
        let fine = mean_discrepancy(&m, &[0.4, 0.6], 2.5e-4);
        assert!(fine < 0.5 * coarse, "{fine} vs {coarse}");
    }

    #[test]
    fn slope_of_exact_line() {
        let lp = LogPopulations {
            dt: 0.1,
            indices: (0..=100).collect(),
            logq: (0..=100).map(|k| vec![-8.0 * k as f64 * 0.1, 0.0]).collect(),
        };
        assert_abs_diff_eq!(log_ratio_slope(&lp, 0, 1, (1.0, 10.0)).unwrap(), -8.0, epsilon = 1e-10);
        assert_eq!(log_ratio_slope(&lp, 1, 1, (1.0, 10.0)).unwrap(), 0.0);
        assert!(matches!(
            log_ratio_slope(&lp, 0, 1, (1.0, 1.5)),
            Err(Error::InsufficientWindow { points: 6, .. })
        ));
    }

    #[test]
    fn hitting_cdf_values() {
        let m = counting_qubit([0.0, 2.0]);
        assert_eq!(hitting_time_cdf(&m, &[0.0, 1.0], 0, 0.0), 0.0);
        assert_abs_diff_eq!(hitting_time_cdf(&m, &[0.0, 1.0], 0, 1.0), 1.0 - (-2f64).exp(), epsilon = 1e-15);
        assert_abs_diff_eq!(hitting_time_cdf(&m, &[0.0, 1.0], 0, 1.0), 0.8647, epsilon = 1e-4);
        assert_abs_diff_eq!(hitting_time_cdf(&m, &[0.3, 0.7], 0, f64::INFINITY), 0.7, epsilon = 1e-15);
        assert_eq!(hitting_time_cdf(&m, &[0.3, 0.7], 1, 5.0), 0.0);
    }
}
