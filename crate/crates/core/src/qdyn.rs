//! Density-matrix arithmetic, the measurement generators and the
//! Euler–Maruyama integration of the stochastic master equation under the
//! physical measure, both as full matrices and in the closed population form
//! available for QND models.

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{GeneralModel, QndModel};
use crate::rng::ChannelStreams;

/// Intensities at or below this value are treated as zero (no jump possible).
pub const INTENSITY_FLOOR: f64 = 1e-12;
/// Upper bound on `v_i(rho) * dt` for the one-jump-per-step thinning.
pub const STEP_GUARD: f64 = 0.1;

const HERMITIAN_TOL: f64 = 1e-10;
const TRACE_TOL: f64 = 1e-10;
const SIMPLEX_TOL: f64 = 1e-10;

fn cplx(x: f64) -> Complex64 {
    Complex64::new(x, 0.0)
}

fn trace_re(m: &DMatrix<Complex64>) -> f64 {
    (0..m.nrows()).map(|i| m[(i, i)].re).sum()
}

fn hermitian_part(m: &DMatrix<Complex64>) -> DMatrix<Complex64> {
    (m + m.adjoint()) * cplx(0.5)
}

fn min_eigenvalue(m: &DMatrix<Complex64>) -> f64 {
    m.clone()
        .symmetric_eigenvalues()
        .iter()
        .copied()
        .fold(f64::INFINITY, f64::min)
}

/// A `d x d` Hermitian, unit-trace, positive semidefinite matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct DensityMatrix(DMatrix<Complex64>);

impl DensityMatrix {
    pub fn new(m: DMatrix<Complex64>) -> Result<Self> {
        if m.nrows() != m.ncols() || m.nrows() == 0 {
            return Err(Error::InvalidState(format!("matrix is {}x{}", m.nrows(), m.ncols())));
        }
        let asym = (&m - m.adjoint()).iter().map(|z| z.norm()).fold(0.0, f64::max);
        if !(asym <= HERMITIAN_TOL) {
            return Err(Error::InvalidState(format!("not Hermitian (max |rho - rho*| = {asym:e})")));
        }
        let tr = trace_re(&m);
        if !((tr - 1.0).abs() <= TRACE_TOL) {
            return Err(Error::InvalidState(format!("trace {tr} != 1")));
        }
        let lmin = min_eigenvalue(&hermitian_part(&m));
        if !(lmin >= -1e-8) {
            return Err(Error::InvalidState(format!("negative eigenvalue {lmin:e}")));
        }
        Ok(Self(m))
    }

    /// The pointer state `|alpha><alpha|`.
    pub fn pointer(dim: usize, alpha: usize) -> Self {
        let mut m = DMatrix::zeros(dim, dim);
        m[(alpha, alpha)] = cplx(1.0);
        Self(m)
    }

    pub fn from_populations(q: &[f64]) -> Result<Self> {
        validate_simplex(q)?;
        Ok(Self(DMatrix::from_diagonal(&DVector::from_iterator(
            q.len(),
            q.iter().map(|&x| cplx(x)),
        ))))
    }

    /// Pure state `|psi><psi|` of a (not necessarily normalized) vector.
    pub fn pure(psi: &[Complex64]) -> Result<Self> {
        let v = DVector::from_column_slice(psi);
        let n = v.norm();
        if !(n > 0.0) {
            return Err(Error::InvalidState("zero state vector".into()));
        }
        let v = v / cplx(n);
        Ok(Self(&v * v.adjoint()))
    }

    pub fn dim(&self) -> usize {
        self.0.nrows()
    }

    pub fn matrix(&self) -> &DMatrix<Complex64> {
        &self.0
    }

    pub fn into_matrix(self) -> DMatrix<Complex64> {
        self.0
    }

    pub fn populations(&self) -> Vec<f64> {
        (0..self.dim()).map(|a| self.0[(a, a)].re).collect()
    }

    pub fn trace(&self) -> f64 {
        trace_re(&self.0)
    }

    pub fn min_eigenvalue(&self) -> f64 {
        min_eigenvalue(&hermitian_part(&self.0))
    }
}

pub(crate) fn validate_simplex(q: &[f64]) -> Result<()> {
    if q.iter().any(|x| !x.is_finite() || *x < -SIMPLEX_TOL) {
        return Err(Error::InvalidState(format!("populations {q:?} outside the simplex")));
    }
    let s: f64 = q.iter().sum();
    if !((s - 1.0).abs() <= SIMPLEX_TOL) {
        return Err(Error::InvalidState(format!("populations sum to {s}, expected 1")));
    }
    Ok(())
}

fn check_dim(model_dim: usize, rho_dim: usize) -> Result<()> {
    if model_dim != rho_dim {
        return Err(Error::DimensionMismatch {
            expected: model_dim,
            found: rho_dim,
        });
    }
    Ok(())
}

/// `L(rho) = -i[H, rho] + sum_i (C_i rho C_i* - {C_i* C_i, rho}/2)` without shape checks.
pub(crate) fn lindblad_matrix(model: &GeneralModel, rho: &DMatrix<Complex64>) -> DMatrix<Complex64> {
    let h = model.hamiltonian();
    let mut out = (h * rho - rho * h) * Complex64::new(0.0, -1.0);
    for ch in model.channels() {
        let c = &ch.op;
        let cd = c.adjoint();
        let cdc = &cd * c;
        out += c * rho * &cd - (&cdc * rho + rho * &cdc) * cplx(0.5);
    }
    out
}

pub fn lindblad(model: &GeneralModel, rho: &DensityMatrix) -> Result<DMatrix<Complex64>> {
    check_dim(model.dim(), rho.dim())?;
    Ok(lindblad_matrix(model, rho.matrix()))
}

/// `J_i(rho)`, `v_i(rho)` and `H_i(rho)` for every channel, in model channel order.
#[derive(Debug, Clone, PartialEq)]
pub struct Generators {
    pub jump: Vec<DMatrix<Complex64>>,
    pub intensity: Vec<f64>,
    pub innovation: Vec<DMatrix<Complex64>>,
}

fn generators_matrix(model: &GeneralModel, rho: &DMatrix<Complex64>) -> Generators {
    let n = model.channels().len();
    let mut jump = Vec::with_capacity(n);
    let mut intensity = Vec::with_capacity(n);
    let mut innovation = Vec::with_capacity(n);
    for ch in model.channels() {
        let c = &ch.op;
        let cd = c.adjoint();
        let j = c * rho * &cd;
        intensity.push(trace_re(&j));
        jump.push(j);
        let c_rho = c * rho;
        let rho_cd = rho * &cd;
        let mean = trace_re(&c_rho) + trace_re(&rho_cd);
        innovation.push(c_rho + rho_cd - rho * cplx(mean));
    }
    Generators {
        jump,
        intensity,
        innovation,
    }
}

pub fn generators(model: &GeneralModel, rho: &DensityMatrix) -> Result<Generators> {
    check_dim(model.dim(), rho.dim())?;
    Ok(generators_matrix(model, rho.matrix()))
}

/// Driving noise for one step: a Wiener increment per diffusive channel and a
/// uniform thinning draw per counting channel.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseIncrements {
    pub dw: Vec<f64>,
    pub u: Vec<f64>,
}

impl NoiseIncrements {
    /// Reads one step of noise. Stream `i` belongs to channel `i` in model order.
    pub fn draw(streams: &mut ChannelStreams, n_diffusive: usize, n_counting: usize, sqrt_dt: f64) -> Self {
        let dw = (0..n_diffusive).map(|i| streams.wiener(i, sqrt_dt)).collect();
        let u = (0..n_counting).map(|i| streams.uniform(n_diffusive + i)).collect();
        Self { dw, u }
    }

    pub fn quiet(n_diffusive: usize, n_counting: usize) -> Self {
        Self {
            dw: vec![0.0; n_diffusive],
            u: vec![1.0; n_counting],
        }
    }
}

/// Thresholds of the post-step state repair.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RepairPolicy {
    /// Eigenvalues below `-clip_below` are set to zero.
    pub clip_below: f64,
    /// Eigenvalues below `-invalid_below` abort the integration.
    pub invalid_below: f64,
}

impl Default for RepairPolicy {
    fn default() -> Self {
        Self {
            clip_below: 1e-8,
            invalid_below: 1e-6,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct RepairCounters {
    /// Steps where eigenvalues (full SME) or populations (QND form) had to be clipped.
    pub clipped_steps: usize,
    /// Most negative eigenvalue or population seen before clipping.
    pub most_negative: f64,
}

impl RepairCounters {
    pub(crate) fn note(&mut self, value: f64, clipped: bool) {
        if clipped {
            self.clipped_steps += 1;
        }
        if value < self.most_negative {
            self.most_negative = value;
        }
    }

    pub fn merge(self, other: Self) -> Self {
        Self {
            clipped_steps: self.clipped_steps + other.clipped_steps,
            most_negative: self.most_negative.min(other.most_negative),
        }
    }
}

/// Symmetrize, clip negative eigenvalues, renormalize. Returns the repaired
/// matrix, the minimum eigenvalue before clipping and whether clipping happened.
fn repair(
    m: &DMatrix<Complex64>,
    policy: &RepairPolicy,
    step: usize,
) -> Result<(DMatrix<Complex64>, f64, bool)> {
    let d = m.nrows();
    let mut h = hermitian_part(m);
    let tr = trace_re(&h);
    if !(tr.is_finite() && tr > 0.0) {
        return Err(Error::StateInvalid {
            step,
            min_eigenvalue: f64::NAN,
        });
    }
    h /= cplx(tr);
    let shifted = &h + DMatrix::<Complex64>::identity(d, d) * cplx(policy.clip_below);
    // complex square roots never fail, so a negative pivot shows up as an imaginary diagonal
    if let Some(ch) = shifted.cholesky() {
        if ch.l_dirty().diagonal().iter().all(|z| z.re > 0.0 && z.im.abs() <= 1e-12 * z.re) {
            return Ok((h, 0.0, false));
        }
    }
    let eig = h.clone().symmetric_eigen();
    let lmin = eig.eigenvalues.iter().copied().fold(f64::INFINITY, f64::min);
    if lmin < -policy.invalid_below || !lmin.is_finite() {
        return Err(Error::StateInvalid {
            step,
            min_eigenvalue: lmin,
        });
    }
    if lmin >= -policy.clip_below {
        return Ok((h, lmin, false));
    }
    let clipped = eig.eigenvalues.map(|x| if x < -policy.clip_below { 0.0 } else { x });
    let v = &eig.eigenvectors;
    let diag = DMatrix::from_diagonal(&clipped.map(cplx));
    let mut out = hermitian_part(&(v * diag * v.adjoint()));
    let tr = trace_re(&out);
    out /= cplx(tr);
    Ok((out, lmin, true))
}

#[derive(Debug, Clone, PartialEq)]
pub struct SmeStep {
    pub rho: DensityMatrix,
    /// Per counting channel: did a jump fire in this step.
    pub jumps: Vec<bool>,
    pub clipped: bool,
    /// Minimum eigenvalue before clipping (0 when no eigen-decomposition was needed).
    pub min_eigenvalue: f64,
}

fn guard_intensities(model_n_diffusive: usize, intensity: &[f64], dt: f64) -> Result<()> {
    for (i, &v) in intensity.iter().enumerate() {
        if v * dt > STEP_GUARD {
            return Err(Error::StepTooLarge {
                channel: model_n_diffusive + i,
                intensity: v,
                product: v * dt,
                bound: STEP_GUARD,
            });
        }
    }
    Ok(())
}

fn sme_step_inner(
    model: &GeneralModel,
    rho: &DMatrix<Complex64>,
    dt: f64,
    noise: &NoiseIncrements,
    policy: &RepairPolicy,
    step: usize,
) -> Result<(DMatrix<Complex64>, Vec<bool>, bool, f64)> {
    let p = model.n_diffusive();
    let gens = generators_matrix(model, rho);
    guard_intensities(p, &gens.intensity[p..], dt)?;

    let mut next = rho + lindblad_matrix(model, rho) * cplx(dt);
    for (i, &dw) in noise.dw.iter().enumerate() {
        next += &gens.innovation[i] * cplx(dw);
    }
    let mut jumps = vec![false; noise.u.len()];
    for (k, &u) in noise.u.iter().enumerate() {
        let i = p + k;
        let v = gens.intensity[i];
        if v > INTENSITY_FLOOR {
            // (J/v - rho) v dt
            next -= (&gens.jump[i] - rho * cplx(v)) * cplx(dt);
            jumps[k] = u < v * dt;
        }
    }
    if jumps.iter().any(|&j| j) {
        let tr = trace_re(&next);
        next /= cplx(tr);
        for (k, _) in jumps.iter().enumerate().filter(|(_, &j)| j) {
            let c = &model.counting()[k].op;
            let j = c * &next * c.adjoint();
            let v = trace_re(&j);
            if v > INTENSITY_FLOOR {
                next = j / cplx(v);
            }
        }
    }
    let (out, lmin, clipped) = repair(&next, policy, step)?;
    Ok((out, jumps, clipped, lmin))
}

/// One Euler–Maruyama step of the SME with per-step jump thinning.
pub fn step_sme(model: &GeneralModel, rho: &DensityMatrix, dt: f64, noise: &NoiseIncrements) -> Result<SmeStep> {
    step_sme_with(model, rho, dt, noise, &RepairPolicy::default())
}

pub fn step_sme_with(
    model: &GeneralModel,
    rho: &DensityMatrix,
    dt: f64,
    noise: &NoiseIncrements,
    policy: &RepairPolicy,
) -> Result<SmeStep> {
    check_dim(model.dim(), rho.dim())?;
    if !(dt > 0.0) {
        return Err(Error::Domain(format!("dt must be positive, got {dt}")));
    }
    if noise.dw.len() != model.n_diffusive() || noise.u.len() != model.counting().len() {
        return Err(Error::DimensionMismatch {
            expected: model.channels().len(),
            found: noise.dw.len() + noise.u.len(),
        });
    }
    let (m, jumps, clipped, min_eigenvalue) = sme_step_inner(model, rho.matrix(), dt, noise, policy, 0)?;
    Ok(SmeStep {
        rho: DensityMatrix(m),
        jumps,
        clipped,
        min_eigenvalue,
    })
}

/// What an experimenter sees: cumulative diffusive outputs on the grid and
/// the jump grid indices of each counting channel. A jump during step `k`
/// (from `t_k` to `t_{k+1}`) is stored as grid index `k + 1`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeasurementRecord {
    pub dt: f64,
    pub steps: usize,
    /// `y[i][k]` = cumulative output of diffusive channel `i` at `t_k`, `k = 0..=steps`.
    pub y: Vec<Vec<f64>>,
    /// Strictly increasing grid indices in `1..=steps`, per counting channel.
    pub jumps: Vec<Vec<usize>>,
}

impl MeasurementRecord {
    pub fn new(dt: f64, steps: usize, n_diffusive: usize, n_counting: usize) -> Self {
        let mut y = vec![Vec::with_capacity(steps + 1); n_diffusive];
        for yi in &mut y {
            yi.push(0.0);
        }
        Self {
            dt,
            steps,
            y,
            jumps: vec![Vec::new(); n_counting],
        }
    }

    pub fn final_time(&self) -> f64 {
        self.steps as f64 * self.dt
    }

    /// Cumulative count of channel `i` at grid index `k`.
    pub fn count_at(&self, i: usize, k: usize) -> usize {
        self.jumps[i].partition_point(|&j| j <= k)
    }

    /// Per-step jump flags for each counting channel (`flags[i][k]` for step `k`).
    pub fn jump_flags(&self) -> Vec<Vec<bool>> {
        self.jumps
            .iter()
            .map(|js| {
                let mut f = vec![false; self.steps];
                for &j in js {
                    f[j - 1] = true;
                }
                f
            })
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.dt > 0.0) {
            return Err(Error::GridMismatch(format!("record step {} is not positive", self.dt)));
        }
        for yi in &self.y {
            if yi.len() != self.steps + 1 {
                return Err(Error::GridMismatch(format!(
                    "output series has {} points, expected {}",
                    yi.len(),
                    self.steps + 1
                )));
            }
            if yi[0] != 0.0 {
                return Err(Error::GridMismatch("output series does not start at 0".into()));
            }
        }
        for js in &self.jumps {
            if js.windows(2).any(|w| w[0] >= w[1]) || js.iter().any(|&j| j == 0 || j > self.steps) {
                return Err(Error::GridMismatch("jump indices not strictly increasing in 1..=steps".into()));
            }
        }
        Ok(())
    }
}

/// The hidden Wiener increments and realized jumps that drove a trajectory.
#[derive(Debug, Clone, PartialEq)]
pub struct DrivingNoise {
    pub dt: f64,
    pub steps: usize,
    /// `dw[i][k]`: increment of diffusive channel `i` over step `k`.
    pub dw: Vec<Vec<f64>>,
    /// Jump grid indices per counting channel, same convention as the record.
    pub jumps: Vec<Vec<usize>>,
}

/// Storage switches for simulated paths.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimOptions {
    /// Keep every `stride`-th grid point (the final point is always kept).
    pub stride: usize,
    pub keep_record: bool,
    pub keep_noise: bool,
    /// Full SME only: keep the matrices at stored grid points.
    pub keep_states: bool,
    pub repair: RepairPolicy,
}

impl Default for SimOptions {
    fn default() -> Self {
        Self {
            stride: 1,
            keep_record: true,
            keep_noise: false,
            keep_states: false,
            repair: RepairPolicy::default(),
        }
    }
}

impl SimOptions {
    pub fn light(stride: usize) -> Self {
        Self {
            stride: stride.max(1),
            keep_record: false,
            ..Self::default()
        }
    }
}

/// Deliberate defects for negative-control runs of the population integrator.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum Mutation {
    #[default]
    None,
    /// Jump update uses `theta^2` instead of `theta`.
    SquaredJumpFactor,
    /// Drops the counting compensator `-q (theta - <theta>) dt`.
    DroppedCompensator,
}

/// A simulated path on the grid `t_k = k dt`, `k = 0..=steps`.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub dt: f64,
    pub steps: usize,
    pub stride: usize,
    pub seed: u64,
    /// Grid indices of the stored rows.
    pub indices: Vec<usize>,
    /// Populations at the stored rows.
    pub q: Vec<Vec<f64>>,
    pub states: Option<Vec<DMatrix<Complex64>>>,
    pub record: Option<MeasurementRecord>,
    pub noise: Option<DrivingNoise>,
    pub repairs: RepairCounters,
    /// Number of jumps per counting channel.
    pub jump_counts: Vec<usize>,
    /// Trapezoidal integral of the intensity `v_i` per counting channel.
    pub integrated_intensity: Vec<f64>,
    /// Grid index of the first jump per counting channel.
    pub first_jump: Vec<Option<usize>>,
}

impl Trajectory {
    pub fn times(&self) -> Vec<f64> {
        self.indices.iter().map(|&k| k as f64 * self.dt).collect()
    }

    pub fn final_q(&self) -> &[f64] {
        self.q.last().expect("trajectory has at least one row")
    }

    /// Populations at the stored row closest to time `t`.
    pub fn q_at(&self, t: f64) -> &[f64] {
        let k = (t / self.dt).round() as usize;
        let row = self.indices.partition_point(|&i| i < k).min(self.indices.len() - 1);
        &self.q[row]
    }
}

pub(crate) fn grid_steps(t_final: f64, dt: f64) -> Result<usize> {
    if !(dt > 0.0) || !dt.is_finite() {
        return Err(Error::GridMismatch(format!("dt must be positive, got {dt}")));
    }
    if !(t_final >= 0.0) || !t_final.is_finite() {
        return Err(Error::GridMismatch(format!("final time must be nonnegative, got {t_final}")));
    }
    let k = (t_final / dt).round();
    if (k * dt - t_final).abs() > 1e-9 * t_final.max(1.0) {
        return Err(Error::GridMismatch(format!("T = {t_final} is not a multiple of dt = {dt}")));
    }
    Ok(k as usize)
}

fn is_stored(k: usize, steps: usize, stride: usize) -> bool {
    k.is_multiple_of(stride) || k == steps
}

/// Integrates the full SME from `rho0` over `[0, t_final]`.
pub fn simulate_trajectory(
    model: &GeneralModel,
    rho0: &DensityMatrix,
    t_final: f64,
    dt: f64,
    seed: u64,
    opts: &SimOptions,
) -> Result<Trajectory> {
    check_dim(model.dim(), rho0.dim())?;
    let steps = grid_steps(t_final, dt)?;
    let stride = opts.stride.max(1);
    let p = model.n_diffusive();
    let m = model.counting().len();
    let sqrt_dt = dt.sqrt();
    let mut streams = ChannelStreams::new(seed, p + m);
    let mut record = opts.keep_record.then(|| MeasurementRecord::new(dt, steps, p, m));
    let mut noise_log = opts.keep_noise.then(|| DrivingNoise {
        dt,
        steps,
        dw: vec![Vec::with_capacity(steps); p],
        jumps: vec![Vec::new(); m],
    });

    let mut rho = rho0.matrix().clone();
    let mut indices = vec![0];
    let mut q = vec![rho0.populations()];
    let mut states = opts.keep_states.then(|| vec![rho.clone()]);
    let mut repairs = RepairCounters::default();
    let mut jump_counts = vec![0; m];
    let mut integrated = vec![0.0; m];
    let mut first_jump = vec![None; m];
    let mut y = vec![0.0; p];

    let mut v_prev: Vec<f64> = generators_matrix(model, &rho).intensity[p..].to_vec();
    for k in 0..steps {
        let noise = NoiseIncrements::draw(&mut streams, p, m, sqrt_dt);
        for (i, ch) in model.diffusive().iter().enumerate() {
            let c_rho = &ch.op * &rho;
            let mean = 2.0 * trace_re(&c_rho);
            y[i] += noise.dw[i] + mean * dt;
        }
        let (next, jumps, clipped, lmin) = sme_step_inner(model, &rho, dt, &noise, &opts.repair, k)?;
        repairs.note(lmin, clipped);
        rho = next;
        for (i, &jumped) in jumps.iter().enumerate() {
            if jumped {
                jump_counts[i] += 1;
                first_jump[i].get_or_insert(k + 1);
            }
        }
        let v_next: Vec<f64> = model.counting().iter().map(|ch| {
            let cr = &ch.op * &rho;
            (cr.adjoint() * cr).trace().re
        }).collect();
        for i in 0..m {
            integrated[i] += 0.5 * (v_prev[i] + v_next[i]) * dt;
        }
        v_prev = v_next;
        if let Some(rec) = record.as_mut() {
            for (i, yi) in rec.y.iter_mut().enumerate() {
                yi.push(y[i]);
            }
            for (i, &jumped) in jumps.iter().enumerate() {
                if jumped {
                    rec.jumps[i].push(k + 1);
                }
            }
        }
        if let Some(log) = noise_log.as_mut() {
            for (i, dwi) in log.dw.iter_mut().enumerate() {
                dwi.push(noise.dw[i]);
            }
            for (i, &jumped) in jumps.iter().enumerate() {
                if jumped {
                    log.jumps[i].push(k + 1);
                }
            }
        }
        if is_stored(k + 1, steps, stride) {
            indices.push(k + 1);
            q.push((0..model.dim()).map(|a| rho[(a, a)].re).collect());
            if let Some(s) = states.as_mut() {
                s.push(rho.clone());
            }
        }
    }
    Ok(Trajectory {
        dt,
        steps,
        stride,
        seed,
        indices,
        q,
        states,
        record,
        noise: noise_log,
        repairs,
        jump_counts,
        integrated_intensity: integrated,
        first_jump,
    })
}

/// The population update shared by the QND integrator and the filter. It is
/// written against the recorded output increments so that a filter started
/// from the true populations reproduces the true path exactly.
#[derive(Debug, Clone, Copy)]
pub(crate) struct PopulationStepper<'a> {
    pub model: &'a QndModel,
    pub dt: f64,
    pub mutation: Mutation,
}

impl PopulationStepper<'_> {
    pub fn mean_r(&self, q: &[f64], out: &mut [f64]) {
        for (o, ch) in out.iter_mut().zip(self.model.diffusive()) {
            *o = ch.r().iter().zip(q).map(|(r, q)| r * q).sum();
        }
    }

    pub fn mean_theta(&self, q: &[f64], out: &mut [f64]) {
        for (o, ch) in out.iter_mut().zip(self.model.counting()) {
            *o = ch.theta().iter().zip(q).map(|(t, q)| t * q).sum();
        }
    }

    /// Continuous part: `q += q [sum (r - <r>)(dy - <r> dt) - sum (theta - <theta>) dt]`.
    pub fn continuous(&self, q: &mut [f64], dy: &[f64], mean_r: &[f64], mean_theta: &[f64]) {
        let dt = self.dt;
        let innovations: Vec<f64> = dy.iter().zip(mean_r).map(|(dy, m)| dy - m * dt).collect();
        let drop_compensator = self.mutation == Mutation::DroppedCompensator;
        for (a, qa) in q.iter_mut().enumerate() {
            let mut factor = 0.0;
            for (i, ch) in self.model.diffusive().iter().enumerate() {
                factor += (ch.r()[a] - mean_r[i]) * innovations[i];
            }
            if !drop_compensator {
                for (i, ch) in self.model.counting().iter().enumerate() {
                    if mean_theta[i] > INTENSITY_FLOOR {
                        factor -= (ch.theta()[a] - mean_theta[i]) * dt;
                    }
                }
            }
            *qa += *qa * factor;
        }
    }

    /// Jump on counting channel `i`: `q_a <- theta(i|a) q_a / <theta_i>`.
    /// Returns false when the post-update intensity vanishes.
    pub fn jump(&self, q: &mut [f64], i: usize) -> bool {
        let theta = self.model.counting()[i].theta();
        let weight = |t: f64| match self.mutation {
            Mutation::SquaredJumpFactor => t * t,
            _ => t,
        };
        let norm: f64 = theta.iter().zip(q.iter()).map(|(&t, &qa)| weight(t) * qa).sum();
        if !(norm > INTENSITY_FLOOR) {
            return false;
        }
        for (qa, &t) in q.iter_mut().zip(theta) {
            *qa = if t == 0.0 { 0.0 } else { weight(t) * *qa / norm };
        }
        true
    }

    /// Clip into `[0, 1]` and renormalize. Returns the smallest entry seen and whether clipping happened.
    pub fn repair(&self, q: &mut [f64]) -> (f64, bool) {
        let lowest = q.iter().copied().fold(f64::INFINITY, f64::min);
        let mut clipped = false;
        for qa in q.iter_mut() {
            if *qa < 0.0 {
                *qa = 0.0;
                clipped = true;
            } else if *qa > 1.0 {
                *qa = 1.0;
                clipped = true;
            }
        }
        let s: f64 = q.iter().sum();
        for qa in q.iter_mut() {
            *qa /= s;
        }
        (lowest.min(0.0), clipped)
    }
}

/// Integrates the closed population system of a QND model.
pub fn simulate_q_diag(
    model: &QndModel,
    q0: &[f64],
    t_final: f64,
    dt: f64,
    seed: u64,
    opts: &SimOptions,
) -> Result<Trajectory> {
    simulate_q_diag_mutated(model, q0, t_final, dt, seed, opts, Mutation::None)
}

/// [`simulate_q_diag`] with a deliberate defect, for negative controls.
pub fn simulate_q_diag_mutated(
    model: &QndModel,
    q0: &[f64],
    t_final: f64,
    dt: f64,
    seed: u64,
    opts: &SimOptions,
    mutation: Mutation,
) -> Result<Trajectory> {
    check_dim(model.dim(), q0.len())?;
    validate_simplex(q0)?;
    let steps = grid_steps(t_final, dt)?;
    let stride = opts.stride.max(1);
    let p = model.n_diffusive();
    let m = model.n_counting();
    let d = model.dim();
    let sqrt_dt = dt.sqrt();
    let stepper = PopulationStepper { model, dt, mutation };
    let mut streams = ChannelStreams::new(seed, p + m);
    let mut record = opts.keep_record.then(|| MeasurementRecord::new(dt, steps, p, m));
    let mut noise_log = opts.keep_noise.then(|| DrivingNoise {
        dt,
        steps,
        dw: vec![Vec::with_capacity(steps); p],
        jumps: vec![Vec::new(); m],
    });

    let mut q = q0.to_vec();
    let mut rows = vec![q.clone()];
    let mut indices = vec![0];
    let mut repairs = RepairCounters::default();
    let mut jump_counts = vec![0; m];
    let mut integrated = vec![0.0; m];
    let mut first_jump = vec![None; m];
    let mut y = vec![0.0; p];
    let mut dy = vec![0.0; p];
    let mut mean_r = vec![0.0; p];
    let mut mean_theta = vec![0.0; m];
    let mut fired = vec![false; m];
    stepper.mean_theta(&q, &mut mean_theta);

    for k in 0..steps {
        stepper.mean_r(&q, &mut mean_r);
        let theta_prev = mean_theta.clone();
        for (i, &v) in mean_theta.iter().enumerate() {
            if v * dt > STEP_GUARD {
                return Err(Error::StepTooLarge {
                    channel: p + i,
                    intensity: v,
                    product: v * dt,
                    bound: STEP_GUARD,
                });
            }
        }
        for i in 0..p {
            let dw = streams.wiener(i, sqrt_dt);
            let y_next = y[i] + (dw + mean_r[i] * dt);
            dy[i] = y_next - y[i];
            y[i] = y_next;
            if let Some(log) = noise_log.as_mut() {
                log.dw[i].push(dw);
            }
        }
        for i in 0..m {
            let u = streams.uniform(p + i);
            fired[i] = mean_theta[i] > INTENSITY_FLOOR && u < mean_theta[i] * dt;
        }
        stepper.continuous(&mut q, &dy, &mean_r, &mean_theta);
        for i in 0..m {
            if fired[i] {
                stepper.jump(&mut q, i);
                jump_counts[i] += 1;
                first_jump[i].get_or_insert(k + 1);
                if let Some(rec) = record.as_mut() {
                    rec.jumps[i].push(k + 1);
                }
                if let Some(log) = noise_log.as_mut() {
                    log.jumps[i].push(k + 1);
                }
            }
        }
        let (lowest, clipped) = stepper.repair(&mut q);
        repairs.note(lowest, clipped);
        stepper.mean_theta(&q, &mut mean_theta);
        for i in 0..m {
            integrated[i] += 0.5 * (theta_prev[i] + mean_theta[i]) * dt;
        }
        if let Some(rec) = record.as_mut() {
            for (i, yi) in rec.y.iter_mut().enumerate() {
                yi.push(y[i]);
            }
        }
        if is_stored(k + 1, steps, stride) {
            indices.push(k + 1);
            rows.push(q.clone());
        }
    }
    debug_assert!(rows.iter().all(|r| r.len() == d));
    Ok(Trajectory {
        dt,
        steps,
        stride,
        seed,
        indices,
        q: rows,
        states: None,
        record,
        noise: noise_log,
        repairs,
        jump_counts,
        integrated_intensity: integrated,
        first_jump,
    })
}
