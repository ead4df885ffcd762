//! Re-filters a stored trajectory CSV from its measurement columns alone.

use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;

use qndsim::filter::{filter_q_diag, support_warning, trace_distance};
use qndsim::io::{parse_model, read_trajectory_csv, write_filter_csv};
use qndsim::Error;

use crate::error::CliError;

#[derive(Debug, Clone)]
pub struct ReplayArgs {
    pub trajectory: PathBuf,
    pub model: PathBuf,
    /// Defaults to the uniform distribution.
    pub q_tilde0: Option<Vec<f64>>,
    pub out: PathBuf,
    pub stride: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReplayInputs {
    pub trajectory: PathBuf,
    pub model: PathBuf,
    pub q_tilde0: Vec<f64>,
    pub stride: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReplaySummary {
    pub model_hash: String,
    pub config: ReplayInputs,
    pub dt: f64,
    pub steps: usize,
    pub final_q_tilde: Vec<f64>,
    pub final_trace_distance: f64,
    pub max_trace_distance: f64,
    /// Filter populations equal the stored populations at every row.
    pub identical_to_stored: bool,
    pub detected: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub warning: Option<String>,
}

fn sidecar_stride(csv: &Path) -> Result<Option<u64>, CliError> {
    let side = csv.with_extension("json");
    let Ok(text) = fs::read_to_string(&side) else {
        return Ok(None);
    };
    let v: serde_json::Value = serde_json::from_str(&text)
        .map_err(|e| CliError::Core(Error::Schema(format!("{}: {e}", side.display()))))?;
    Ok(v.get("stride").and_then(serde_json::Value::as_u64))
}

/// Writes `filter.csv` and `summary.json` under `args.out`.
pub fn replay(args: &ReplayArgs) -> Result<ReplaySummary, CliError> {
    if args.stride == 0 {
        return Err(CliError::config("stride must be at least 1"));
    }
    let model_text = fs::read_to_string(&args.model)
        .map_err(|e| CliError::Io(format!("reading model {}: {e}", args.model.display())))?;
    let file = parse_model(&model_text).map_err(|e| CliError::Model {
        path: args.model.clone(),
        source: e,
    })?;
    let m = file.qnd()?;
    if let Some(s) = sidecar_stride(&args.trajectory)? {
        if s != 1 {
            return Err(Error::Schema(format!(
                "trajectory was stored with stride {s}; replay needs every grid point (stride 1)"
            ))
            .into());
        }
    }
    let input = fs::File::open(&args.trajectory)
        .map_err(|e| CliError::Io(format!("reading {}: {e}", args.trajectory.display())))?;
    let table = read_trajectory_csv(input)?;
    let (d, p, n) = (m.dim(), m.n_diffusive(), m.n_counting());
    if table.dim() != d
        || table.diffusive_channels != (0..p).collect::<Vec<_>>()
        || table.counting_channels != (p..p + n).collect::<Vec<_>>()
    {
        return Err(Error::Schema(format!(
            "columns do not match the model: {d} populations, y_0..y_{p} and N_{p}..N_{} expected",
            p + n
        ))
        .into());
    }
    let record = table.to_record()?;
    let q_tilde0 = args.q_tilde0.clone().unwrap_or_else(|| vec![1.0 / d as f64; d]);
    if q_tilde0.len() != d {
        return Err(CliError::config(format!(
            "q_tilde0 has {} entries, model dimension is {d}",
            q_tilde0.len()
        )));
    }
    let run = filter_q_diag(&m, &record, &q_tilde0, record.dt)?;
    let distances: Vec<f64> = table
        .q
        .iter()
        .zip(&run.q_tilde)
        .map(|(q, qt)| trace_distance(q, qt))
        .collect();
    fs::create_dir_all(&args.out).map_err(|e| CliError::Io(format!("creating {}: {e}", args.out.display())))?;
    let mut buf = Vec::new();
    write_filter_csv(&mut buf, &run, Some(&table.q), args.stride)?;
    fs::write(args.out.join("filter.csv"), buf)?;
    let summary = ReplaySummary {
        model_hash: file.hash(),
        config: ReplayInputs {
            trajectory: args.trajectory.clone(),
            model: args.model.clone(),
            q_tilde0: q_tilde0.clone(),
            stride: args.stride,
        },
        dt: record.dt,
        steps: record.steps,
        final_q_tilde: run.final_q().to_vec(),
        final_trace_distance: *distances.last().expect("at least one row"),
        max_trace_distance: distances.iter().copied().fold(0.0, f64::max),
        identical_to_stored: run.q_tilde == table.q,
        detected: run.detected(),
        warning: support_warning(table.q.first().expect("at least one row"), &q_tilde0),
    };
    let mut text = serde_json::to_string_pretty(&summary)?;
    text.push('\n');
    fs::write(args.out.join("summary.json"), text)?;
    Ok(summary)
}
