//! Population filter driven only by a measurement record, started from an
//! estimate of the initial state.

use serde::{Deserialize, Serialize};

use crate::conditioned::MIN_WINDOW_POINTS;
use crate::error::{Error, Result};
use crate::model::QndModel;
use crate::qdyn::{validate_simplex, MeasurementRecord, Mutation, PopulationStepper, Trajectory, INTENSITY_FLOOR};
use crate::stats::ols;

/// Threshold on the filter's final population used to name the detected pointer.
pub const DETECTION_THRESHOLD: f64 = 1.0 - 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilterRun {
    pub dt: f64,
    pub q_tilde0: Vec<f64>,
    /// Filter populations at every grid point `t_k`, `k = 0..=steps`.
    pub q_tilde: Vec<Vec<f64>>,
}

impl FilterRun {
    pub fn steps(&self) -> usize {
        self.q_tilde.len() - 1
    }

    pub fn final_q(&self) -> &[f64] {
        self.q_tilde.last().expect("at least one row")
    }

    /// Pointer the filter has collapsed onto, if any population exceeds [`DETECTION_THRESHOLD`].
    pub fn detected(&self) -> Option<usize> {
        self.final_q().iter().position(|&q| q >= DETECTION_THRESHOLD)
    }

    /// `(grid index, trace distance)` at every stored point of `truth`.
    pub fn trace_distances(&self, truth: &Trajectory) -> Result<Vec<(usize, f64)>> {
        if truth.steps != self.steps() || truth.dt != self.dt {
            return Err(Error::GridMismatch(format!(
                "filter covers {} steps of {}, trajectory {} steps of {}",
                self.steps(),
                self.dt,
                truth.steps,
                truth.dt
            )));
        }
        Ok(truth
            .indices
            .iter()
            .zip(&truth.q)
            .map(|(&k, q)| (k, trace_distance(q, &self.q_tilde[k])))
            .collect())
    }
}

/// `(1/2) sum |p_a - q_a|`.
pub fn trace_distance(p: &[f64], q: &[f64]) -> f64 {
    0.5 * p.iter().zip(q).map(|(a, b)| (a - b).abs()).sum::<f64>()
}

/// Message for an estimate that assigns zero weight to a pointer the true
/// state occupies; stability is not guaranteed in that case.
pub fn support_warning(q0: &[f64], q_tilde0: &[f64]) -> Option<String> {
    let missing: Vec<usize> = q0
        .iter()
        .zip(q_tilde0)
        .enumerate()
        .filter(|(_, (&q, &qt))| q > 0.0 && qt == 0.0)
        .map(|(a, _)| a)
        .collect();
    (!missing.is_empty()).then(|| {
        format!("filter estimate gives zero weight to occupied pointers {missing:?}; stability is not guaranteed")
    })
}

/// Runs the filter over `record`. With `q_tilde0` equal to the true initial
/// populations and a record produced by [`crate::qdyn::simulate_q_diag`] on the
/// same grid, the output equals the true populations bit for bit.
pub fn filter_q_diag(model: &QndModel, record: &MeasurementRecord, q_tilde0: &[f64], dt: f64) -> Result<FilterRun> {
    let d = model.dim();
    if q_tilde0.len() != d {
        return Err(Error::DimensionMismatch {
            expected: d,
            found: q_tilde0.len(),
        });
    }
    validate_simplex(q_tilde0)?;
    record.validate()?;
    if record.dt != dt {
        return Err(Error::GridMismatch(format!("record step {} differs from {dt}", record.dt)));
    }
    let p = model.n_diffusive();
    let m = model.n_counting();
    if record.y.len() != p || record.jumps.len() != m {
        return Err(Error::GridMismatch(format!(
            "record has {} diffusive and {} counting channels, model has {p} and {m}",
            record.y.len(),
            record.jumps.len()
        )));
    }
    let stepper = PopulationStepper {
        model,
        dt,
        mutation: Mutation::None,
    };
    let flags = record.jump_flags();
    let mut q = q_tilde0.to_vec();
    let mut rows = Vec::with_capacity(record.steps + 1);
    rows.push(q.clone());
    let mut dy = vec![0.0; p];
    let mut mean_r = vec![0.0; p];
    let mut mean_theta = vec![0.0; m];
    for k in 0..record.steps {
        stepper.mean_r(&q, &mut mean_r);
        stepper.mean_theta(&q, &mut mean_theta);
        for (i, yi) in record.y.iter().enumerate() {
            dy[i] = yi[k + 1] - yi[k];
        }
        stepper.continuous(&mut q, &dy, &mean_r, &mean_theta);
        for i in 0..m {
            if flags[i][k]
                && (!(mean_theta[i] > INTENSITY_FLOOR) || !stepper.jump(&mut q, i)) {
                    return Err(Error::DegenerateFilter { channel: p + i, step: k });
                }
        }
        stepper.repair(&mut q);
        rows.push(q.clone());
    }
    Ok(FilterRun {
        dt,
        q_tilde0: q_tilde0.to_vec(),
        q_tilde: rows,
    })
}

/// OLS slope of `ln(q~_alpha / q~_detected)` over `window`, where the
/// detected pointer comes from the filter's own final state.
pub fn filter_log_ratio_slope(run: &FilterRun, alpha: usize, window: (f64, f64)) -> Result<f64> {
    let gamma = run
        .detected()
        .ok_or_else(|| Error::Domain("filter did not collapse onto a pointer".into()))?;
    let (t0, t1) = window;
    let tol = 1e-9 * run.dt;
    let mut ts = Vec::new();
    let mut ys = Vec::new();
    for (k, q) in run.q_tilde.iter().enumerate() {
        let t = k as f64 * run.dt;
        if t + tol < t0 || t > t1 + tol {
            continue;
        }
        ts.push(t);
        ys.push(q[alpha].ln() - q[gamma].ln());
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
    if ys.contains(&f64::NEG_INFINITY) {
        return Ok(f64::NEG_INFINITY);
    }
    Ok(ols(&ts, &ys)?.slope)
}
