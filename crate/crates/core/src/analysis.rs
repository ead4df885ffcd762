//! Ensemble statistics turned into pass/fail hypothesis tests.

use serde::{Deserialize, Serialize};

use crate::conditioned::{hitting_time_cdf, log_ratio_slope, simulate_under_q_gamma, LogPopulations};
use crate::ensemble::run_ensemble;
use crate::error::{Error, Result};
use crate::model::{rate_table, QndModel};
use crate::qdyn::{RepairCounters, SimOptions, Trajectory};
use crate::stats::{chi_square, ks_censored, mean_and_se, ChiSquareResult, KsResult};

/// Default population threshold for declaring a path collapsed.
pub const COLLAPSE_THRESHOLD: f64 = 1.0 - 1e-6;
/// Significance level of the goodness-of-fit tests.
pub const SIGNIFICANCE: f64 = 0.01;
/// Relative tolerance of fitted rates against the closed form.
pub const RATE_TOLERANCE: f64 = 0.10;
/// Largest accepted `|z|` in the martingale test.
pub const Z_LIMIT: f64 = 3.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Collapse {
    Pointer(usize),
    Unresolved,
}

/// Names the pointer whose final population reaches `threshold`.
pub fn detect_collapse(q_final: &[f64], threshold: f64) -> Collapse {
    match q_final.iter().position(|&q| q >= threshold) {
        Some(a) => Collapse::Pointer(a),
        None => Collapse::Unresolved,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointStats {
    pub t: f64,
    pub mean: Vec<f64>,
    pub se: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnsembleSummary {
    pub n: usize,
    pub collapse_counts: Vec<usize>,
    pub unresolved: usize,
    pub checkpoints: Vec<CheckpointStats>,
    pub repairs: RepairCounters,
}

impl EnsembleSummary {
    pub fn dim(&self) -> usize {
        self.collapse_counts.len()
    }

    pub fn collapse_frequency(&self) -> Vec<f64> {
        self.collapse_counts.iter().map(|&c| c as f64 / self.n as f64).collect()
    }

    /// Summarizes trajectories; every checkpoint must be a stored grid point.
    pub fn from_trajectories(trajs: &[Trajectory], checkpoints: &[f64], threshold: f64) -> Result<Self> {
        let first = trajs
            .first()
            .ok_or_else(|| Error::Domain("empty ensemble".into()))?;
        let d = first.q[0].len();
        let mut collapse_counts = vec![0; d];
        let mut unresolved = 0;
        let mut repairs = RepairCounters::default();
        for t in trajs {
            match detect_collapse(t.final_q(), threshold) {
                Collapse::Pointer(a) => collapse_counts[a] += 1,
                Collapse::Unresolved => unresolved += 1,
            }
            repairs = repairs.merge(t.repairs);
        }
        let mut stats = Vec::with_capacity(checkpoints.len());
        for &tc in checkpoints {
            let mut cols = vec![Vec::with_capacity(trajs.len()); d];
            for t in trajs {
                let row = stored_row(t, tc)?;
                for (a, col) in cols.iter_mut().enumerate() {
                    col.push(t.q[row][a]);
                }
            }
            let (mean, se) = cols.iter().map(|c| mean_and_se(c)).unzip();
            stats.push(CheckpointStats { t: tc, mean, se });
        }
        Ok(Self {
            n: trajs.len(),
            collapse_counts,
            unresolved,
            checkpoints: stats,
            repairs,
        })
    }
}

fn stored_row(t: &Trajectory, time: f64) -> Result<usize> {
    let k = (time / t.dt).round() as usize;
    if (k as f64 * t.dt - time).abs() > 1e-9 * time.max(1.0) {
        return Err(Error::GridMismatch(format!("checkpoint {time} is not on the grid")));
    }
    t.indices
        .binary_search(&k)
        .map_err(|_| Error::GridMismatch(format!("checkpoint {time} is not a stored point (stride {})", t.stride)))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BornTest {
    pub n: usize,
    pub unresolved: usize,
    pub observed: Vec<usize>,
    pub expected: Vec<f64>,
    pub statistic: f64,
    pub dof: usize,
    pub p_value: f64,
    pub passed: bool,
}

/// Chi-square of collapse counts against `n_resolved * q0`.
pub fn born_test(summary: &EnsembleSummary, q0: &[f64]) -> Result<BornTest> {
    if q0.len() != summary.dim() {
        return Err(Error::DimensionMismatch {
            expected: summary.dim(),
            found: q0.len(),
        });
    }
    if summary.unresolved * 100 >= summary.n {
        return Err(Error::TooManyUnresolved {
            unresolved: summary.unresolved,
            total: summary.n,
        });
    }
    let resolved = (summary.n - summary.unresolved) as f64;
    let expected: Vec<f64> = q0.iter().map(|q| q * resolved).collect();
    let ChiSquareResult {
        statistic,
        dof,
        p_value,
    } = chi_square(&summary.collapse_counts, &expected)?;
    Ok(BornTest {
        n: summary.n,
        unresolved: summary.unresolved,
        observed: summary.collapse_counts.clone(),
        expected,
        statistic,
        dof,
        p_value,
        passed: p_value > SIGNIFICANCE,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MartingaleEntry {
    pub t: f64,
    pub alpha: usize,
    pub mean: f64,
    pub se: f64,
    pub z: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MartingaleTest {
    pub entries: Vec<MartingaleEntry>,
    pub max_abs_z: f64,
    pub passed: bool,
}

/// `z = (mean q_alpha(t) - q_alpha(0)) / SE` at each checkpoint.
pub fn martingale_test(summary: &EnsembleSummary, q0: &[f64]) -> Result<MartingaleTest> {
    if summary.n < 100 {
        return Err(Error::Domain(format!("martingale test needs N >= 100, got {}", summary.n)));
    }
    let mut entries = Vec::new();
    for cp in &summary.checkpoints {
        for (alpha, &q) in q0.iter().enumerate() {
            let diff = cp.mean[alpha] - q;
            let z = if cp.se[alpha] > 0.0 {
                diff / cp.se[alpha]
            } else if diff.abs() <= 1e-15 {
                0.0
            } else {
                diff.signum() * f64::INFINITY
            };
            entries.push(MartingaleEntry {
                t: cp.t,
                alpha,
                mean: cp.mean[alpha],
                se: cp.se[alpha],
                z,
            });
        }
    }
    let max_abs_z = entries.iter().map(|e| e.z.abs()).fold(0.0, f64::max);
    Ok(MartingaleTest {
        entries,
        max_abs_z,
        passed: max_abs_z <= Z_LIMIT,
    })
}

/// First time a jump fires on a channel that extinguishes `alpha`.
pub fn extinction_time(model: &QndModel, traj: &Trajectory, alpha: usize) -> Option<f64> {
    model
        .extinction_channels(alpha)
        .iter()
        .filter_map(|&i| traj.first_jump[i])
        .min()
        .map(|k| k as f64 * traj.dt)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HittingTimeTest {
    pub alpha: usize,
    pub n: usize,
    pub horizon: f64,
    pub statistic: f64,
    pub p_value: f64,
    pub never_extinct_fraction: f64,
    /// `1 - CDF(horizon)`; equals `1 - CDF(inf)` up to `exp(-lambda_hit * horizon)`.
    pub expected_never_extinct: f64,
    pub sigma: f64,
    pub fraction_ok: bool,
    pub passed: bool,
}

/// Censored one-sample KS of extinction times against the exponential mixture,
/// plus a binomial check of the fraction never extinct by `horizon`.
pub fn hitting_time_test(
    model: &QndModel,
    q0: &[f64],
    alpha: usize,
    extinction_times: &[Option<f64>],
    horizon: f64,
) -> Result<HittingTimeTest> {
    if model.extinction_channels(alpha).is_empty() {
        return Err(Error::NoExtinctionChannels { alpha });
    }
    let n = extinction_times.len();
    if n == 0 {
        return Err(Error::Domain("empty ensemble".into()));
    }
    let events: Vec<f64> = extinction_times.iter().flatten().copied().collect();
    let KsResult {
        statistic, p_value, ..
    } = ks_censored(&events, n, horizon, |t| hitting_time_cdf(model, q0, alpha, t));
    let never = extinction_times.iter().filter(|t| t.is_none_or(|t| t > horizon)).count() as f64 / n as f64;
    let expected = 1.0 - hitting_time_cdf(model, q0, alpha, horizon);
    let sigma = (expected * (1.0 - expected) / n as f64).sqrt();
    let fraction_ok = (never - expected).abs() <= 3.0 * sigma.max(0.5 / n as f64);
    Ok(HittingTimeTest {
        alpha,
        n,
        horizon,
        statistic,
        p_value,
        never_extinct_fraction: never,
        expected_never_extinct: expected,
        sigma,
        fraction_ok,
        passed: p_value > SIGNIFICANCE && fraction_ok,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Conditioning {
    /// Physical-measure paths grouped by their detected collapse pointer.
    UpsilonDetected,
    /// Paths simulated directly under the conditioned measure.
    QGammaDirect,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SlopeSample {
    pub alpha: usize,
    pub gamma: usize,
    pub slope: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RateCell {
    pub alpha: usize,
    pub gamma: usize,
    pub n: usize,
    pub mean_slope: f64,
    pub se: f64,
    /// `-Lambda[alpha][gamma]`.
    pub target: f64,
    pub rel_error: f64,
    pub flagged: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RateReport {
    pub conditioning: Conditioning,
    pub cells: Vec<RateCell>,
    pub passed: bool,
}

impl RateReport {
    pub fn cell(&self, alpha: usize, gamma: usize) -> Option<&RateCell> {
        self.cells.iter().find(|c| c.alpha == alpha && c.gamma == gamma)
    }
}

/// Log populations of a physical-measure trajectory.
pub fn log_populations(traj: &Trajectory) -> LogPopulations {
    LogPopulations {
        dt: traj.dt,
        indices: traj.indices.clone(),
        logq: traj.q.iter().map(|r| r.iter().map(|q| q.ln()).collect()).collect(),
    }
}

/// Slopes of every resolved trajectory against its detected pointer.
pub fn detected_slopes(trajs: &[Trajectory], window: (f64, f64), threshold: f64) -> Result<Vec<SlopeSample>> {
    let mut out = Vec::new();
    for t in trajs {
        let Collapse::Pointer(gamma) = detect_collapse(t.final_q(), threshold) else {
            continue;
        };
        let lp = log_populations(t);
        for alpha in (0..t.final_q().len()).filter(|&a| a != gamma) {
            out.push(SlopeSample {
                alpha,
                gamma,
                slope: log_ratio_slope(&lp, alpha, gamma, window)?,
            });
        }
    }
    Ok(out)
}

/// Slopes of `n` paths simulated under the measure conditioned on `gamma`.
#[allow(clippy::too_many_arguments)]
pub fn conditioned_slopes(
    model: &QndModel,
    gamma: usize,
    q0: &[f64],
    t_final: f64,
    dt: f64,
    base_seed: u64,
    n: usize,
    stride: usize,
    window: (f64, f64),
) -> Result<Vec<SlopeSample>> {
    let opts = SimOptions::light(stride);
    let per_path = run_ensemble(base_seed, n, |_, seed| {
        let (_, lp) = simulate_under_q_gamma(model, gamma, q0, t_final, dt, seed, &opts)?;
        (0..model.dim())
            .filter(|&a| a != gamma)
            .map(|alpha| {
                Ok(SlopeSample {
                    alpha,
                    gamma,
                    slope: log_ratio_slope(&lp, alpha, gamma, window)?,
                })
            })
            .collect::<Result<Vec<_>>>()
    })?;
    Ok(per_path.into_iter().flatten().collect())
}

/// Aggregates slope samples per `(alpha, gamma)` cell against `-Lambda`.
/// In detected mode an ensemble of at least 500 paths must reach every
/// pointer with positive initial weight.
pub fn rate_report(
    model: &QndModel,
    conditioning: Conditioning,
    samples: &[SlopeSample],
    n_paths: usize,
    q0: &[f64],
) -> Result<RateReport> {
    let table = rate_table(model);
    let d = model.dim();
    if conditioning == Conditioning::UpsilonDetected && n_paths >= 500 {
        for (gamma, &q) in q0.iter().enumerate() {
            if q > 0.0 && !samples.iter().any(|s| s.gamma == gamma) && d > 1 {
                return Err(Error::EmptyCell {
                    gamma,
                    q0: q,
                    total: n_paths,
                });
            }
        }
    }
    let mut cells = Vec::new();
    for gamma in 0..d {
        for alpha in 0..d {
            let slopes: Vec<f64> = samples
                .iter()
                .filter(|s| s.alpha == alpha && s.gamma == gamma)
                .map(|s| s.slope)
                .collect();
            if slopes.is_empty() {
                continue;
            }
            let target = -table.lambda[alpha][gamma];
            let (mean_slope, se) = if slopes.iter().any(|s| s.is_infinite()) {
                let all_neg_inf = slopes.iter().all(|&s| s == f64::NEG_INFINITY);
                (if all_neg_inf { f64::NEG_INFINITY } else { f64::NAN }, f64::NAN)
            } else {
                mean_and_se(&slopes)
            };
            let rel_error = if target == mean_slope {
                0.0
            } else if target == 0.0 || target.is_infinite() {
                (mean_slope - target).abs()
            } else {
                ((mean_slope - target) / target).abs()
            };
            let flagged = !(rel_error <= RATE_TOLERANCE);
            cells.push(RateCell {
                alpha,
                gamma,
                n: slopes.len(),
                mean_slope,
                se,
                target,
                rel_error,
                flagged,
            });
        }
    }
    let passed = cells.iter().all(|c| !c.flagged);
    Ok(RateReport {
        conditioning,
        cells,
        passed,
    })
}

/// Whether two reports agree on every shared cell within three combined standard errors.
pub fn reports_agree(a: &RateReport, b: &RateReport) -> bool {
    a.cells.iter().all(|ca| match b.cell(ca.alpha, ca.gamma) {
        Some(cb) if ca.mean_slope.is_finite() && cb.mean_slope.is_finite() => {
            let se = (ca.se * ca.se + cb.se * cb.se).sqrt();
            (ca.mean_slope - cb.mean_slope).abs() <= 3.0 * se
        }
        Some(cb) => ca.mean_slope == cb.mean_slope,
        None => true,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Channel, ChannelKind};
    use crate::qdyn::simulate_q_diag;

    fn diffusive_qubit() -> QndModel {
        QndModel::with_channels(2, vec![Channel::real(ChannelKind::Diffusive, &[1.0, -1.0])]).unwrap()
    }

    #[test]
    fn collapse_detection() {
        assert_eq!(detect_collapse(&[0.0, 1.0], COLLAPSE_THRESHOLD), Collapse::Pointer(1));
        assert_eq!(detect_collapse(&[0.4, 0.6], COLLAPSE_THRESHOLD), Collapse::Unresolved);
    }

    fn pointer_ensemble(n: usize) -> Vec<Trajectory> {
        (0..n as u64)
            .map(|s| simulate_q_diag(&diffusive_qubit(), &[1.0, 0.0], 1.0, 1e-2, s, &SimOptions::light(10)).unwrap())
            .collect()
    }

    #[test]
    fn pointer_start_statistics_are_trivial() {
        let trajs = pointer_ensemble(120);
        let s = EnsembleSummary::from_trajectories(&trajs, &[0.5, 1.0], COLLAPSE_THRESHOLD).unwrap();
        assert_eq!(s.collapse_counts, vec![120, 0]);
        let born = born_test(&s, &[1.0, 0.0]).unwrap();
        assert_eq!(born.statistic, 0.0);
        let mart = martingale_test(&s, &[1.0, 0.0]).unwrap();
        assert!(mart.entries.iter().all(|e| e.z == 0.0));
        assert!(mart.passed);
    }

    #[test]
    fn checkpoint_must_be_stored() {
        let trajs = pointer_ensemble(2);
        assert!(matches!(
            EnsembleSummary::from_trajectories(&trajs, &[0.25], COLLAPSE_THRESHOLD),
            Err(Error::GridMismatch(_))
        ));
    }

    #[test]
    fn too_many_unresolved() {
        let s = EnsembleSummary {
            n: 100,
            collapse_counts: vec![49, 50],
            unresolved: 1,
            checkpoints: vec![],
            repairs: RepairCounters::default(),
        };
        assert!(matches!(born_test(&s, &[0.5, 0.5]), Err(Error::TooManyUnresolved { .. })));
    }

    #[test]
    fn no_extinction_channels() {
        let m = QndModel::with_channels(2, vec![Channel::real(ChannelKind::Counting, &[1.0, 2.0])]).unwrap();
        assert_eq!(
            hitting_time_test(&m, &[0.5, 0.5], 0, &[None], 1.0).unwrap_err(),
            Error::NoExtinctionChannels { alpha: 0 }
        );
    }

    #[test]
    fn rate_report_cells() {
        let m = diffusive_qubit();
        let samples = vec![
            SlopeSample { alpha: 0, gamma: 1, slope: -7.9 },
            SlopeSample { alpha: 0, gamma: 1, slope: -8.3 },
            SlopeSample { alpha: 1, gamma: 0, slope: -6.0 },
        ];
        let r = rate_report(&m, Conditioning::QGammaDirect, &samples, 3, &[0.5, 0.5]).unwrap();
        let c = r.cell(0, 1).unwrap();
        assert!((c.mean_slope + 8.1).abs() < 1e-12);
        assert!(!c.flagged);
        assert!(r.cell(1, 0).unwrap().flagged);
        assert!(!r.passed);
    }

    #[test]
    fn empty_cell_in_large_detected_ensemble() {
        let m = diffusive_qubit();
        let samples = vec![SlopeSample { alpha: 0, gamma: 1, slope: -8.0 }];
        assert!(matches!(
            rate_report(&m, Conditioning::UpsilonDetected, &samples, 500, &[0.5, 0.5]),
            Err(Error::EmptyCell { gamma: 0, .. })
        ));
        assert!(rate_report(&m, Conditioning::UpsilonDetected, &samples, 499, &[0.5, 0.5]).is_ok());
    }
}
