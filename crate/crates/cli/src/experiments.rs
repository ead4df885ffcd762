//! Experiment runners. Workers only compute; every file is written here, after
//! the parallel work has finished.

use std::fs;
use std::path::Path;

use serde_json::{json, Map, Value};

use qndsim::analysis::{
    born_test, conditioned_slopes, detect_collapse, detected_slopes, extinction_time, hitting_time_test,
    martingale_test, rate_report, reports_agree, Collapse, Conditioning, EnsembleSummary, RateReport, SlopeSample,
    COLLAPSE_THRESHOLD,
};
use qndsim::conditioned::{default_window, simulate_under_q_gamma};
use qndsim::ensemble::run_ensemble;
use qndsim::filter::{filter_q_diag, support_warning, trace_distance};
use qndsim::io::{write_filter_csv, write_log_populations_csv, write_trajectory_csv, ModelFile};
use qndsim::model::{check_nd_assumption, check_nondemolition, QndModel, ND_TOL};
use qndsim::qdyn::{simulate_q_diag, simulate_trajectory, DensityMatrix, SimOptions, Trajectory};
use qndsim::rng::trajectory_seed;
use qndsim::Error;

use crate::config::{Experiment, RunConfig};
use crate::error::CliError;
use crate::report::{to_value, Report, TestEntry};

/// Seed for an auxiliary ensemble, disjoint from the main trajectory seeds.
fn stage_seed(base: u64, stage: u64) -> u64 {
    trajectory_seed(trajectory_seed(base, u64::MAX - stage), 0)
}

const STAGE_CONDITIONED: u64 = 1;
const STAGE_FILTER: u64 = 1000;

struct Ctx<'a> {
    cfg: &'a RunConfig,
    model: &'a ModelFile,
    hash: String,
    summary: Map<String, Value>,
    tests: Vec<TestEntry>,
    files: Vec<(String, Vec<u8>)>,
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).map_err(|e| CliError::Io(format!("writing {}: {e}", path.display())))
}

fn statistical(e: &Error) -> bool {
    matches!(e, Error::TooManyUnresolved { .. } | Error::EmptyCell { .. })
}

impl<'a> Ctx<'a> {
    fn new(cfg: &'a RunConfig, model: &'a ModelFile) -> Self {
        Self {
            cfg,
            model,
            hash: model.hash(),
            summary: Map::new(),
            tests: Vec::new(),
            files: Vec::new(),
        }
    }

    fn put(&mut self, key: &str, value: impl serde::Serialize) {
        self.summary.insert(key.into(), to_value(value));
    }

    fn csv(&mut self, name: String, write: impl FnOnce(&mut Vec<u8>) -> qndsim::Result<()>) -> Result<(), CliError> {
        let mut buf = Vec::new();
        write(&mut buf)?;
        self.files.push((name, buf));
        Ok(())
    }

    fn sidecar(&mut self, name: String, traj: &Trajectory, index: usize) -> Result<(), CliError> {
        let meta = json!({
            "model_hash": self.hash,
            "config": self.cfg,
            "index": index,
            "seed": traj.seed,
            "dt": traj.dt,
            "T": traj.steps as f64 * traj.dt,
            "stride": traj.stride,
            "repairs": traj.repairs,
            "jump_counts": traj.jump_counts,
        });
        let mut text = serde_json::to_string_pretty(&meta)?;
        text.push('\n');
        self.files.push((name, text.into_bytes()));
        Ok(())
    }

    fn save_trajectories(&mut self, trajs: &[Trajectory]) -> Result<(), CliError> {
        for (i, t) in trajs.iter().enumerate().take(self.cfg.save_trajectories) {
            self.csv(format!("trajectories/traj_{i:05}.csv"), |w| write_trajectory_csv(w, t))?;
            self.sidecar(format!("trajectories/traj_{i:05}.json"), t, i)?;
        }
        Ok(())
    }

    fn finish(self) -> Result<Report, CliError> {
        let out = &self.cfg.out;
        fs::create_dir_all(out).map_err(|e| CliError::Io(format!("creating {}: {e}", out.display())))?;
        for (name, bytes) in &self.files {
            let path = out.join(name);
            if let Some(dir) = path.parent() {
                fs::create_dir_all(dir)?;
            }
            fs::write(&path, bytes).map_err(|e| CliError::Io(format!("writing {}: {e}", path.display())))?;
        }
        let report = Report::new(self.hash.clone(), self.cfg.clone(), self.tests);
        let mut summary = Map::new();
        summary.insert("model_hash".into(), Value::String(self.hash));
        summary.insert("config".into(), to_value(self.cfg));
        summary.extend(self.summary);
        write_json(&out.join("summary.json"), &summary)?;
        write_json(&out.join("report.json"), &report)?;
        Ok(report)
    }
}

/// Runs the configured experiment and writes its artifacts under `cfg.out`.
pub fn run_experiment(cfg: &RunConfig, model: &ModelFile) -> Result<Report, CliError> {
    let mut ctx = Ctx::new(cfg, model);
    match cfg.experiment {
        Experiment::Simulate => simulate(&mut ctx)?,
        Experiment::Conditioned => conditioned(&mut ctx)?,
        Experiment::Filter => {
            let m = model.qnd()?;
            filter(&mut ctx, &m)?
        }
        Experiment::Hitting => {
            let m = model.qnd()?;
            let base = qnd_ensemble(cfg, &m)?;
            let alphas = match cfg.alpha {
                Some(a) => vec![a],
                None => extinction_pointers(&m),
            };
            if alphas.is_empty() {
                return Err(Error::NoExtinctionChannels { alpha: 0 }.into());
            }
            hitting(&mut ctx, &m, &base, &alphas)?;
            ctx.save_trajectories(&base)?
        }
        Experiment::VerifyAll => verify_all(&mut ctx)?,
    }
    ctx.finish()
}

fn qnd_ensemble(cfg: &RunConfig, m: &QndModel) -> qndsim::Result<Vec<Trajectory>> {
    run_ensemble(cfg.seed, cfg.n, |i, seed| {
        let mut opts = SimOptions::light(cfg.stride);
        opts.keep_record = i < cfg.save_trajectories;
        simulate_q_diag(m, &cfg.q0, cfg.t_final, cfg.dt, seed, &opts)
    })
}

fn extinction_pointers(m: &QndModel) -> Vec<usize> {
    (0..m.dim()).filter(|&a| !m.extinction_channels(a).is_empty()).collect()
}

fn ensemble_tests(ctx: &mut Ctx, trajs: &[Trajectory], born_applies: Option<&str>) -> Result<(), CliError> {
    let cfg = ctx.cfg;
    let summary = EnsembleSummary::from_trajectories(trajs, &cfg.checkpoints, COLLAPSE_THRESHOLD)?;
    ctx.put("ensemble", &summary);
    ctx.put("collapse_frequency", summary.collapse_frequency());
    ctx.put("unresolved_fraction", summary.unresolved as f64 / summary.n as f64);
    let entry = match martingale_test(&summary, &cfg.q0) {
        Ok(t) => TestEntry::new("martingale", t.passed)
            .z(t.max_abs_z)
            .param("checkpoints", &cfg.checkpoints)
            .param("N", summary.n)
            .param("z_limit", qndsim::analysis::Z_LIMIT)
            .param("entries", &t.entries),
        Err(Error::Domain(msg)) => TestEntry::not_applicable("martingale", msg),
        Err(e) => return Err(e.into()),
    };
    ctx.tests.push(entry);
    let entry = match born_applies {
        Some(reason) => TestEntry::not_applicable("born", reason),
        None => match born_test(&summary, &cfg.q0) {
            Ok(b) => TestEntry::new("born", b.passed)
                .statistic(b.statistic)
                .p_value(b.p_value)
                .param("N", b.n)
                .param("unresolved", b.unresolved)
                .param("observed", &b.observed)
                .param("expected", &b.expected)
                .param("dof", b.dof)
                .param("significance", qndsim::analysis::SIGNIFICANCE),
            Err(e) if statistical(&e) => TestEntry::failed_with("born", &e),
            Err(e) => return Err(e.into()),
        },
    };
    ctx.tests.push(entry);
    Ok(())
}

fn simulate(ctx: &mut Ctx) -> Result<(), CliError> {
    let cfg = ctx.cfg;
    match ctx.model.qnd() {
        Ok(m) => {
            let trajs = qnd_ensemble(cfg, &m)?;
            ctx.put("integrator", "populations");
            ensemble_tests(ctx, &trajs, None)?;
            ctx.save_trajectories(&trajs)?;
        }
        Err(Error::Diagonality(_)) => {
            let general = ctx.model.general();
            let rho0 = DensityMatrix::from_populations(&cfg.q0)?;
            let trajs = run_ensemble(cfg.seed, cfg.n, |i, seed| {
                let mut opts = SimOptions::light(cfg.stride);
                opts.keep_record = i < cfg.save_trajectories;
                simulate_trajectory(&general, &rho0, cfg.t_final, cfg.dt, seed, &opts)
            })?;
            ctx.put("integrator", "full_sme");
            let summary = EnsembleSummary::from_trajectories(&trajs, &cfg.checkpoints, COLLAPSE_THRESHOLD)?;
            ctx.put("ensemble", &summary);
            ctx.tests.push(nondemolition_entry(ctx.model)?.0);
            for name in ["martingale", "born"] {
                ctx.tests
                    .push(TestEntry::not_applicable(name, "model is not diagonal in the pointer basis"));
            }
            ctx.save_trajectories(&trajs)?;
        }
        Err(e) => return Err(e.into()),
    }
    Ok(())
}

fn nondemolition_entry(model: &ModelFile) -> Result<(TestEntry, bool), CliError> {
    let r = check_nondemolition(&model.general(), model.basis())?;
    let entry = TestEntry::new("nondemolition", r.holds)
        .param("off_diagonal", &r.violations)
        .param("probe_violations", &r.probes);
    Ok((entry, r.holds))
}

fn rate_entry(name: &str, report: &RateReport, window: (f64, f64)) -> TestEntry {
    let worst = report
        .cells
        .iter()
        .map(|c| c.rel_error)
        .fold(0.0, |a: f64, b| if b.is_nan() { f64::INFINITY } else { a.max(b) });
    TestEntry::new(name, report.passed)
        .statistic(worst)
        .param("window", [window.0, window.1])
        .param("tolerance", qndsim::analysis::RATE_TOLERANCE)
        .param("cells", &report.cells)
}

/// Conditioned slopes for every pointer that can be conditioned on.
fn conditioned_samples(ctx: &mut Ctx, m: &QndModel) -> Result<(Vec<SlopeSample>, Vec<usize>), CliError> {
    let cfg = ctx.cfg;
    let window = default_window(cfg.t_final);
    let gammas: Vec<usize> = match cfg.gamma {
        Some(g) => vec![g],
        None => (0..m.dim()).filter(|&g| cfg.q0[g] > 0.0).collect(),
    };
    let mut samples = Vec::new();
    let mut used = Vec::new();
    let mut skipped = Map::new();
    for g in gammas {
        let seed = stage_seed(cfg.seed, STAGE_CONDITIONED + g as u64);
        match conditioned_slopes(m, g, &cfg.q0, cfg.t_final, cfg.dt, seed, cfg.n, cfg.stride, window) {
            Ok(s) => {
                samples.extend(s);
                used.push(g);
            }
            Err(e @ Error::DegenerateConditioning { .. }) if cfg.gamma.is_none() => {
                skipped.insert(g.to_string(), Value::String(e.to_string()));
            }
            Err(e) => return Err(e.into()),
        }
    }
    if !skipped.is_empty() {
        ctx.put("conditioning_skipped", skipped);
    }
    if let Some(&g) = used.first() {
        let seed = trajectory_seed(stage_seed(cfg.seed, STAGE_CONDITIONED + g as u64), 0);
        let (_, lp) = simulate_under_q_gamma(m, g, &cfg.q0, cfg.t_final, cfg.dt, seed, &SimOptions::light(cfg.stride))?;
        ctx.csv("conditioned.csv".into(), |w| write_log_populations_csv(w, &lp))?;
    }
    Ok((samples, used))
}

fn conditioned(ctx: &mut Ctx) -> Result<(), CliError> {
    let m = ctx.model.qnd()?;
    let cfg = ctx.cfg;
    let window = default_window(cfg.t_final);
    let (samples, gammas) = conditioned_samples(ctx, &m)?;
    let report = rate_report(&m, Conditioning::QGammaDirect, &samples, cfg.n, &cfg.q0)?;
    ctx.put("gamma", gammas);
    ctx.put("rates", &report);
    ctx.tests.push(rate_entry("rate_conditioned", &report, window));
    Ok(())
}

struct FilterPath {
    distance: f64,
    agrees: bool,
}

fn filter(ctx: &mut Ctx, m: &QndModel) -> Result<(), CliError> {
    let cfg = ctx.cfg;
    let seed = stage_seed(cfg.seed, STAGE_FILTER);
    if let Some(w) = support_warning(&cfg.q0, &cfg.q_tilde0) {
        ctx.put("filter_warning", w);
    }
    let paths = run_ensemble(seed, cfg.n, |_, s| {
        let t = simulate_q_diag(m, &cfg.q0, cfg.t_final, cfg.dt, s, &SimOptions {
                keep_record: true,
                ..SimOptions::light(cfg.stride)
            })?;
        let run = filter_q_diag(m, t.record.as_ref().expect("record kept"), &cfg.q_tilde0, cfg.dt)?;
        let truth = detect_collapse(t.final_q(), COLLAPSE_THRESHOLD);
        Ok(FilterPath {
            distance: trace_distance(t.final_q(), run.final_q()),
            agrees: matches!(truth, Collapse::Pointer(a) if run.detected() == Some(a)),
        })
    })?;
    let mut d: Vec<f64> = paths.iter().map(|p| p.distance).collect();
    d.sort_by(f64::total_cmp);
    let median = if d.len() % 2 == 1 {
        d[d.len() / 2]
    } else {
        0.5 * (d[d.len() / 2 - 1] + d[d.len() / 2])
    };
    let agree = paths.iter().filter(|p| p.agrees).count();
    ctx.put(
        "filter",
        json!({
            "N": d.len(),
            "q_tilde0": cfg.q_tilde0,
            "median_final_trace_distance": median,
            "max_final_trace_distance": d.last(),
            "min_final_trace_distance": d.first(),
            "detected_agreement": agree,
        }),
    );
    ctx.tests.push(
        TestEntry::new("filter_stability", median <= 0.01)
            .statistic(median)
            .param("limit", 0.01)
            .param("N", d.len())
            .param("q_tilde0", &cfg.q_tilde0),
    );
    // path 0 on the full grid: exact replay and the filter series
    let s0 = trajectory_seed(seed, 0);
    let t0 = simulate_q_diag(m, &cfg.q0, cfg.t_final, cfg.dt, s0, &SimOptions::default())?;
    let record = t0.record.as_ref().expect("record kept");
    let exact = filter_q_diag(m, record, &cfg.q0, cfg.dt)?;
    ctx.tests.push(
        TestEntry::new("filter_replay_identity", exact.q_tilde == t0.q)
            .param("seed", s0)
            .param("steps", exact.steps()),
    );
    let run = filter_q_diag(m, record, &cfg.q_tilde0, cfg.dt)?;
    ctx.csv("filter.csv".into(), |w| write_filter_csv(w, &run, Some(&t0.q), cfg.stride))?;
    Ok(())
}

fn hitting(ctx: &mut Ctx, m: &QndModel, trajs: &[Trajectory], alphas: &[usize]) -> Result<(), CliError> {
    let cfg = ctx.cfg;
    let mut results = Vec::new();
    for &alpha in alphas {
        let times: Vec<Option<f64>> = trajs.iter().map(|t| extinction_time(m, t, alpha)).collect();
        let h = hitting_time_test(m, &cfg.q0, alpha, &times, cfg.t_final)?;
        ctx.tests.push(
            TestEntry::new(&format!("hitting_time_{alpha}"), h.passed)
                .statistic(h.statistic)
                .p_value(h.p_value)
                .param("alpha", alpha)
                .param("N", h.n)
                .param("horizon", h.horizon)
                .param("never_extinct_fraction", h.never_extinct_fraction)
                .param("expected_never_extinct", h.expected_never_extinct)
                .param("sigma", h.sigma)
                .param("fraction_ok", h.fraction_ok),
        );
        results.push(h);
    }
    ctx.put("hitting", results);
    Ok(())
}

fn verify_all(ctx: &mut Ctx) -> Result<(), CliError> {
    let cfg = ctx.cfg;
    let (entry, holds) = nondemolition_entry(ctx.model)?;
    ctx.tests.push(entry);
    if !holds {
        for name in [
            "nd_assumption",
            "martingale",
            "born",
            "rate_detected",
            "rate_conditioned",
            "rate_modes_agree",
            "filter_stability",
            "filter_replay_identity",
            "hitting_time",
        ] {
            ctx.tests
                .push(TestEntry::not_applicable(name, "model is not diagonal in the pointer basis"));
        }
        return Ok(());
    }
    let m = ctx.model.qnd()?;
    let nd = check_nd_assumption(&m, ND_TOL);
    ctx.tests
        .push(TestEntry::new("nd_assumption", nd.holds).param("unseparated_pairs", &nd.pairs));
    let nd_reason = (!nd.holds).then_some("some pointer pair is not separated by any channel");

    let trajs = qnd_ensemble(cfg, &m)?;
    ensemble_tests(ctx, &trajs, nd_reason)?;
    ctx.save_trajectories(&trajs)?;

    let window = default_window(cfg.t_final);
    let detected = match nd_reason {
        Some(reason) => {
            ctx.tests.push(TestEntry::not_applicable("rate_detected", reason));
            None
        }
        None => {
            let samples = detected_slopes(&trajs, window, COLLAPSE_THRESHOLD)?;
            match rate_report(&m, Conditioning::UpsilonDetected, &samples, cfg.n, &cfg.q0) {
                Ok(r) => {
                    ctx.tests.push(rate_entry("rate_detected", &r, window));
                    Some(r)
                }
                Err(e) if statistical(&e) => {
                    ctx.tests.push(TestEntry::failed_with("rate_detected", &e));
                    None
                }
                Err(e) => return Err(e.into()),
            }
        }
    };
    let conditioned = match nd_reason {
        Some(reason) => {
            ctx.tests.push(TestEntry::not_applicable("rate_conditioned", reason));
            None
        }
        None => {
            let (samples, gammas) = conditioned_samples(ctx, &m)?;
            if gammas.is_empty() {
                ctx.tests.push(TestEntry::not_applicable(
                    "rate_conditioned",
                    "no pointer can be conditioned on",
                ));
                None
            } else {
                let r = rate_report(&m, Conditioning::QGammaDirect, &samples, cfg.n, &cfg.q0)?;
                ctx.tests
                    .push(rate_entry("rate_conditioned", &r, window).param("gamma", &gammas));
                Some(r)
            }
        }
    };
    match (&detected, &conditioned) {
        (Some(a), Some(b)) => {
            let shared: Vec<_> = a
                .cells
                .iter()
                .filter(|c| b.cell(c.alpha, c.gamma).is_some())
                .map(|c| (c.alpha, c.gamma))
                .collect();
            let restrict = |r: &RateReport| RateReport {
                cells: r
                    .cells
                    .iter()
                    .filter(|c| shared.contains(&(c.alpha, c.gamma)))
                    .cloned()
                    .collect(),
                ..r.clone()
            };
            let (a, b) = (restrict(a), restrict(b));
            ctx.tests
                .push(TestEntry::new("rate_modes_agree", reports_agree(&a, &b)).param("cells", shared));
        }
        _ => ctx.tests.push(TestEntry::not_applicable(
            "rate_modes_agree",
            "needs both rate reports",
        )),
    }
    let mut rates = Map::new();
    rates.insert("detected".into(), to_value(&detected));
    rates.insert("conditioned".into(), to_value(&conditioned));
    ctx.put("rates", rates);

    match nd_reason {
        Some(reason) => {
            ctx.tests.push(TestEntry::not_applicable("filter_stability", reason));
            ctx.tests.push(TestEntry::not_applicable("filter_replay_identity", reason));
        }
        None => filter(ctx, &m)?,
    }

    let alphas = match cfg.alpha {
        Some(a) if !m.extinction_channels(a).is_empty() => vec![a],
        Some(_) => Vec::new(),
        None => extinction_pointers(&m),
    };
    if alphas.is_empty() {
        ctx.tests.push(TestEntry::not_applicable(
            "hitting_time",
            "no counting channel vanishes on the tested pointer",
        ));
    } else {
        hitting(ctx, &m, &trajs, &alphas)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stage_seeds_are_distinct() {
        let seeds: std::collections::BTreeSet<u64> = (0..100).map(|s| stage_seed(7, s)).collect();
        assert_eq!(seeds.len(), 100);
        assert!((0..1000).all(|i| trajectory_seed(7, i) != stage_seed(7, 1)));
    }
}
