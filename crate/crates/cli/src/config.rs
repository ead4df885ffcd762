//! Run files: a `[run]` section plus the model, either inline (`[system]`,
//! `[channel]`) or referenced with `model = path`.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::Serialize;

use qndsim::io::{model_from_sections, parse_f64, parse_real_list, parse_sections, parse_usize, ModelFile, Section};
use qndsim::model::rate_table;
use qndsim::qdyn::STEP_GUARD;
use qndsim::Error;

use crate::error::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Experiment {
    Simulate,
    Conditioned,
    Filter,
    Hitting,
    VerifyAll,
}

impl FromStr for Experiment {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "simulate" => Ok(Self::Simulate),
            "conditioned" => Ok(Self::Conditioned),
            "filter" => Ok(Self::Filter),
            "hitting" => Ok(Self::Hitting),
            "verify_all" | "verifyall" => Ok(Self::VerifyAll),
            _ => Err(format!(
                "unknown experiment `{s}` (simulate, conditioned, filter, hitting, verify_all)"
            )),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum ModelSource {
    Inline(Box<ModelFile>),
    Path(PathBuf),
}

/// The `[run]` section as written, before defaults are applied.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct RunSection {
    pub experiment: Option<Experiment>,
    pub q0: Option<Vec<f64>>,
    pub q_tilde0: Option<Vec<f64>>,
    pub t_final: Option<f64>,
    pub dt: Option<f64>,
    pub n: Option<usize>,
    pub seed: Option<u64>,
    pub stride: Option<usize>,
    pub out: Option<PathBuf>,
    pub gamma: Option<usize>,
    pub alpha: Option<usize>,
    pub checkpoints: Option<Vec<f64>>,
    pub save_trajectories: Option<usize>,
    /// Line of each key, and of the section header under `"[run]"`.
    pub lines: BTreeMap<String, usize>,
}

impl RunSection {
    fn line(&self, key: &str) -> Option<usize> {
        self.lines.get(key).copied()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConfigFile {
    pub run: RunSection,
    pub model: ModelSource,
}

const RUN_KEYS: &[&str] = &[
    "model",
    "experiment",
    "q0",
    "q_tilde0",
    "T",
    "dt",
    "N",
    "seed",
    "stride",
    "out",
    "gamma",
    "alpha",
    "checkpoints",
    "save_trajectories",
];

fn run_section(section: &Section) -> Result<(RunSection, Option<PathBuf>), Error> {
    section.check_keys(RUN_KEYS)?;
    let mut run = RunSection::default();
    run.lines.insert("[run]".into(), section.line);
    let mut model = None;
    for e in &section.entries {
        run.lines.insert(e.key.clone(), e.line);
        match e.key.as_str() {
            "model" => model = Some(PathBuf::from(&e.value)),
            "experiment" => {
                run.experiment = Some(e.value.parse().map_err(|m: String| Error::Parse { line: e.line, message: m })?)
            }
            "q0" => run.q0 = Some(parse_real_list(e)?),
            "q_tilde0" => run.q_tilde0 = Some(parse_real_list(e)?),
            "T" => run.t_final = Some(parse_f64(e)?),
            "dt" => run.dt = Some(parse_f64(e)?),
            "N" => run.n = Some(parse_usize(e)?),
            "seed" => {
                run.seed = Some(e.value.parse().map_err(|_| Error::Parse {
                    line: e.line,
                    message: "seed must be an unsigned 64-bit integer".into(),
                })?)
            }
            "stride" => run.stride = Some(parse_usize(e)?),
            "out" => run.out = Some(PathBuf::from(&e.value)),
            "gamma" => run.gamma = Some(parse_usize(e)?),
            "alpha" => run.alpha = Some(parse_usize(e)?),
            "checkpoints" => run.checkpoints = Some(parse_real_list(e)?),
            "save_trajectories" => run.save_trajectories = Some(parse_usize(e)?),
            _ => unreachable!("keys checked above"),
        }
    }
    Ok((run, model))
}

/// Parses a run file without touching the file system.
pub fn parse_config(text: &str) -> Result<ConfigFile, Error> {
    let sections = parse_sections(text)?;
    let runs: Vec<&Section> = sections.iter().filter(|s| s.name == "run").collect();
    let run_sec = match runs.as_slice() {
        [one] => *one,
        [] => {
            return Err(Error::Parse {
                line: 1,
                message: "missing [run] section".into(),
            })
        }
        [_, second, ..] => {
            return Err(Error::Parse {
                line: second.line,
                message: "more than one [run] section".into(),
            })
        }
    };
    let (run, path) = run_section(run_sec)?;
    let has_inline = sections.iter().any(|s| s.name == "system" || s.name == "channel");
    let model = match (path, has_inline) {
        (Some(_), true) => {
            return Err(Error::Parse {
                line: run.line("model").unwrap_or(run_sec.line),
                message: "give either `model = path` or inline [system]/[channel] sections, not both".into(),
            })
        }
        (Some(p), false) => ModelSource::Path(p),
        (None, true) => ModelSource::Inline(Box::new(model_from_sections(&sections)?)),
        (None, false) => {
            return Err(Error::Parse {
                line: run_sec.line,
                message: "no model: add `model = path` or [system]/[channel] sections".into(),
            })
        }
    };
    Ok(ConfigFile { run, model })
}

/// Command-line values that take precedence over the run file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub experiment: Option<Experiment>,
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub stride: Option<usize>,
}

/// Fully resolved, validated run parameters. Serializes to the config echo
/// embedded in artifacts; the output directory is left out so that equal runs
/// written to different places produce equal files.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunConfig {
    pub experiment: Experiment,
    pub model_path: Option<PathBuf>,
    pub q0: Vec<f64>,
    pub q_tilde0: Vec<f64>,
    #[serde(rename = "T")]
    pub t_final: f64,
    pub dt: f64,
    #[serde(rename = "N")]
    pub n: usize,
    pub seed: u64,
    pub stride: usize,
    #[serde(skip)]
    pub out: PathBuf,
    pub gamma: Option<usize>,
    pub alpha: Option<usize>,
    pub checkpoints: Vec<f64>,
    pub save_trajectories: usize,
}

impl RunConfig {
    pub fn steps(&self) -> usize {
        (self.t_final / self.dt).round() as usize
    }
}

fn check_simplex(name: &str, q: &[f64], d: usize, line: Option<usize>) -> Result<(), CliError> {
    if q.len() != d {
        return Err(CliError::config_at(
            line,
            format!("{name} has {} entries, model dimension is {d}", q.len()),
        ));
    }
    let s: f64 = q.iter().sum();
    if q.iter().any(|x| *x < 0.0) || (s - 1.0).abs() > 1e-10 {
        return Err(CliError::config_at(line, format!("{name} = {q:?} is not a probability vector")));
    }
    Ok(())
}

/// Upper bound on any counting intensity: the largest `||C_i||^2`.
pub fn max_intensity(model: &ModelFile) -> f64 {
    let g = model.general();
    g.counting()
        .iter()
        .map(|ch| {
            let cc = ch.op.adjoint() * &ch.op;
            cc.symmetric_eigenvalues().iter().copied().fold(0.0, f64::max)
        })
        .fold(0.0, f64::max)
}

/// Loads the model (when referenced by path, relative to `base_dir`) and applies defaults and checks.
pub fn resolve(file: ConfigFile, base_dir: &Path, overrides: &Overrides) -> Result<(RunConfig, ModelFile), CliError> {
    let (model, model_path) = match file.model {
        ModelSource::Inline(m) => (*m, None),
        ModelSource::Path(p) => {
            let full = if p.is_absolute() { p.clone() } else { base_dir.join(&p) };
            let text = std::fs::read_to_string(&full)
                .map_err(|e| CliError::Io(format!("reading model {}: {e}", full.display())))?;
            let m = qndsim::io::parse_model(&text).map_err(|e| CliError::Model {
                path: full.clone(),
                source: e,
            })?;
            (m, Some(p))
        }
    };
    let run = file.run;
    let d = model.dim();
    let experiment = overrides.experiment.or(run.experiment).unwrap_or(Experiment::VerifyAll);
    let q0 = run.q0.clone().unwrap_or_else(|| vec![1.0 / d as f64; d]);
    check_simplex("q0", &q0, d, run.line("q0"))?;
    let q_tilde0 = run.q_tilde0.clone().unwrap_or_else(|| vec![1.0 / d as f64; d]);
    check_simplex("q_tilde0", &q_tilde0, d, run.line("q_tilde0"))?;
    let dt = run.dt.unwrap_or(1e-3);
    if !(dt > 0.0) {
        return Err(CliError::config_at(run.line("dt"), format!("dt must be positive, got {dt}")));
    }
    let vmax = max_intensity(&model);
    if vmax * dt > STEP_GUARD {
        return Err(CliError::config_at(
            run.line("dt"),
            format!(
                "step-size guard: max counting intensity {vmax} times dt {dt} = {} exceeds {STEP_GUARD}; reduce dt",
                vmax * dt
            ),
        ));
    }
    let t_final = match run.t_final {
        Some(t) => t,
        None => {
            let rate = model
                .qnd()
                .ok()
                .and_then(|m| rate_table(&m).min_positive_rate())
                .ok_or_else(|| {
                    CliError::config_at(
                        run.line("[run]"),
                        "T is required: the model has no finite positive convergence rate",
                    )
                })?;
            (40.0 / rate / dt).ceil() * dt
        }
    };
    if !(t_final > 0.0) || !t_final.is_finite() {
        return Err(CliError::config_at(run.line("T"), format!("T must be positive, got {t_final}")));
    }
    let k = (t_final / dt).round();
    if (k * dt - t_final).abs() > 1e-9 * t_final.max(1.0) {
        return Err(CliError::config_at(
            run.line("T").or(run.line("dt")),
            format!("T = {t_final} is not an integer multiple of dt = {dt}"),
        ));
    }
    let steps = k as usize;
    let n = run.n.unwrap_or(1000);
    if n == 0 {
        return Err(CliError::config_at(run.line("N"), "N must be at least 1"));
    }
    let stride = overrides.stride.or(run.stride).unwrap_or(10);
    if stride == 0 {
        return Err(CliError::config_at(run.line("stride"), "stride must be at least 1"));
    }
    if let Some(g) = run.gamma {
        if g >= d {
            return Err(CliError::config_at(
                run.line("gamma"),
                format!("gamma = {g} is not a pointer index (dimension {d})"),
            ));
        }
    }
    if experiment == Experiment::Conditioned && run.gamma.is_none() {
        return Err(CliError::config_at(
            run.line("[run]"),
            "the conditioned experiment needs `gamma`",
        ));
    }
    if let Some(a) = run.alpha {
        if a >= d {
            return Err(CliError::config_at(
                run.line("alpha"),
                format!("alpha = {a} is not a pointer index (dimension {d})"),
            ));
        }
    }
    let checkpoints = run
        .checkpoints
        .clone()
        .unwrap_or_else(|| vec![0.25 * t_final, 0.5 * t_final, t_final]);
    let mut snapped = Vec::with_capacity(checkpoints.len());
    for c in checkpoints {
        if !(0.0..=t_final).contains(&c) {
            return Err(CliError::config_at(
                run.line("checkpoints"),
                format!("checkpoint {c} outside [0, T]"),
            ));
        }
        // nearest stored row
        let idx = (((c / dt) / stride as f64).round() as usize * stride).min(steps);
        snapped.push(idx as f64 * dt);
    }
    Ok((
        RunConfig {
            experiment,
            model_path,
            q0,
            q_tilde0,
            t_final,
            dt,
            n,
            seed: overrides.seed.or(run.seed).unwrap_or(0),
            stride,
            out: overrides
                .out
                .clone()
                .or(run.out)
                .unwrap_or_else(|| PathBuf::from("qndsim-out")),
            gamma: run.gamma,
            alpha: run.alpha,
            checkpoints: snapped,
            save_trajectories: run.save_trajectories.unwrap_or(0),
        },
        model,
    ))
}

/// Reads and resolves a run file; a relative `out` is taken relative to the working directory.
pub fn load(path: &Path, overrides: &Overrides) -> Result<(RunConfig, ModelFile), CliError> {
    let text =
        std::fs::read_to_string(path).map_err(|e| CliError::Io(format!("reading config {}: {e}", path.display())))?;
    let file = parse_config(&text).map_err(|e| match e {
        Error::Parse { line, message } => CliError::config_at(Some(line), message),
        other => CliError::Core(other),
    })?;
    let base = path.parent().unwrap_or(Path::new("."));
    resolve(file, base, overrides)
}

#[cfg(test)]
mod tests {
    use super::*;

    const INLINE: &str = "\
[run]
experiment = simulate
q0 = 0.3, 0.7
T = 1
dt = 0.001
N = 10

[system]
dim = 2
[channel]
kind = diffusive
c = 1, -1
";

    fn resolve_text(text: &str) -> Result<(RunConfig, ModelFile), CliError> {
        resolve(parse_config(text).unwrap(), Path::new("."), &Overrides::default())
    }

    #[test]
    fn inline_model() {
        let cfg = parse_config(INLINE).unwrap();
        assert!(matches!(cfg.model, ModelSource::Inline(_)));
        let (run, _) = resolve_text(INLINE).unwrap();
        assert_eq!(run.experiment, Experiment::Simulate);
        assert_eq!(run.q_tilde0, vec![0.5, 0.5]);
        assert_eq!(run.checkpoints, vec![0.25, 0.5, 1.0]);
        assert_eq!(run.steps(), 1000);
    }

    #[test]
    fn overrides_win() {
        let cfg = parse_config(INLINE).unwrap();
        let o = Overrides {
            experiment: Some(Experiment::Filter),
            seed: Some(9),
            ..Overrides::default()
        };
        let (run, _) = resolve(cfg, Path::new("."), &o).unwrap();
        assert_eq!(run.experiment, Experiment::Filter);
        assert_eq!(run.seed, 9);
    }

    #[test]
    fn default_horizon_from_rate() {
        let text = INLINE.replace("T = 1\n", "");
        let (run, _) = resolve_text(&text).unwrap();
        assert!((run.t_final - 5.0).abs() < 1e-12);
    }

    #[test]
    fn parse_errors_carry_lines() {
        let text = INLINE.replace("N = 10", "N = ten");
        assert!(matches!(parse_config(&text), Err(Error::Parse { line: 6, .. })));
        let text = INLINE.replace("experiment = simulate", "experiment = dance");
        assert!(matches!(parse_config(&text), Err(Error::Parse { line: 2, .. })));
        assert!(matches!(parse_config("[system]\ndim=2\n"), Err(Error::Parse { line: 1, .. })));
        let text = format!("{INLINE}\n[run]\nN = 3\n");
        assert!(matches!(parse_config(&text), Err(Error::Parse { .. })));
        let text = INLINE.replace("N = 10", "N = 10\nmodel = other.model");
        assert!(matches!(parse_config(&text), Err(Error::Parse { line: 7, .. })));
    }

    #[test]
    fn step_guard_is_a_config_error() {
        let text = INLINE.replace("kind = diffusive\nc = 1, -1", "kind = counting\nc = 20, 1");
        let err = resolve_text(&text).unwrap_err();
        assert!(err.to_string().contains("step-size guard"), "{err}");
        assert!(err.to_string().contains("line 5"), "{err}");
        assert_eq!(err.exit_code(), 2);
    }

    #[test]
    fn validation_failures_name_lines() {
        for (from, to, line) in [
            ("q0 = 0.3, 0.7", "q0 = 0.3, 0.6", 3),
            ("q0 = 0.3, 0.7", "q0 = 1", 3),
            ("T = 1", "T = 1.0005", 4),
            ("N = 10", "N = 0", 6),
            ("experiment = simulate", "experiment = conditioned", 1),
            ("N = 10", "N = 10\ngamma = 2", 7),
        ] {
            let text = INLINE.replace(from, to);
            match resolve_text(&text) {
                Err(CliError::Config { line: Some(l), .. }) => assert_eq!(l, line, "{to}"),
                other => panic!("{to}: {other:?}"),
            }
        }
    }

    #[test]
    fn checkpoints_snap_to_stored_rows() {
        let text = INLINE.replace("N = 10", "N = 10\nstride = 100\ncheckpoints = 0.33, 1");
        let (run, _) = resolve_text(&text).unwrap();
        assert_eq!(run.checkpoints, vec![0.3, 1.0]);
    }
}
