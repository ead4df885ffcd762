//! System models: the general (possibly non-diagonal) generator data, the
//! diagonal QND decomposition in a pointer basis, structural checks and the
//! closed-form convergence and hitting rates.

use std::fmt;

use nalgebra::DMatrix;
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Per-entry modulus below which an off-diagonal operator entry counts as zero.
pub const DIAGONAL_TOL: f64 = 1e-12;
/// Default tolerance for the non-degeneracy comparison of channel eigenvalues.
pub const ND_TOL: f64 = 1e-10;
/// Hermiticity tolerance for the Hamiltonian (max-norm of H - H†).
pub const HERMITIAN_TOL: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PointerBasis {
    labels: Vec<String>,
}

impl PointerBasis {
    pub fn new(labels: Vec<String>) -> Result<Self> {
        if labels.len() < 2 {
            return Err(Error::InvalidModel(format!(
                "pointer basis needs at least 2 states, got {}",
                labels.len()
            )));
        }
        for (i, a) in labels.iter().enumerate() {
            if labels[..i].contains(a) {
                return Err(Error::InvalidModel(format!("duplicate pointer label {a:?}")));
            }
        }
        Ok(Self { labels })
    }

    /// Basis labelled `0..dim`.
    pub fn indexed(dim: usize) -> Result<Self> {
        Self::new((0..dim).map(|i| i.to_string()).collect())
    }

    pub fn dim(&self) -> usize {
        self.labels.len()
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ChannelKind {
    Diffusive,
    Counting,
}

impl fmt::Display for ChannelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ChannelKind::Diffusive => f.write_str("diffusive"),
            ChannelKind::Counting => f.write_str("counting"),
        }
    }
}

/// A measurement channel diagonal in the pointer basis, with eigenvalues
/// `c` and the derived `r = 2 Re c` and `theta = |c|^2`.
#[derive(Debug, Clone, PartialEq)]
pub struct Channel {
    kind: ChannelKind,
    c: Vec<Complex64>,
    r: Vec<f64>,
    theta: Vec<f64>,
}

impl Channel {
    pub fn new(kind: ChannelKind, c: Vec<Complex64>) -> Self {
        let r = c.iter().map(|z| z.re + z.re).collect();
        let theta = c.iter().map(|z| z.norm_sqr()).collect();
        Self { kind, c, r, theta }
    }

    pub fn diffusive(c: Vec<Complex64>) -> Self {
        Self::new(ChannelKind::Diffusive, c)
    }

    pub fn counting(c: Vec<Complex64>) -> Self {
        Self::new(ChannelKind::Counting, c)
    }

    /// Convenience constructor from real eigenvalues.
    pub fn real(kind: ChannelKind, c: &[f64]) -> Self {
        Self::new(kind, c.iter().map(|&x| Complex64::new(x, 0.0)).collect())
    }

    pub fn kind(&self) -> ChannelKind {
        self.kind
    }

    pub fn c(&self) -> &[Complex64] {
        &self.c
    }

    pub fn r(&self) -> &[f64] {
        &self.r
    }

    pub fn theta(&self) -> &[f64] {
        &self.theta
    }
}

/// Diagonal QND model. Channels are kept with the diffusive block first.
#[derive(Debug, Clone, PartialEq)]
pub struct QndModel {
    basis: PointerBasis,
    epsilon: Vec<f64>,
    channels: Vec<Channel>,
    n_diffusive: usize,
}

impl QndModel {
    pub fn new(basis: PointerBasis, epsilon: Vec<f64>, channels: Vec<Channel>) -> Result<Self> {
        let d = basis.dim();
        if epsilon.len() != d {
            return Err(Error::DimensionMismatch {
                expected: d,
                found: epsilon.len(),
            });
        }
        if let Some(ch) = channels.iter().find(|ch| ch.c.len() != d) {
            return Err(Error::DimensionMismatch {
                expected: d,
                found: ch.c.len(),
            });
        }
        if epsilon.iter().any(|e| !e.is_finite())
            || channels
                .iter()
                .any(|ch| ch.c.iter().any(|z| !z.re.is_finite() || !z.im.is_finite()))
        {
            return Err(Error::InvalidModel("non-finite coefficient".into()));
        }
        let (mut ordered, counting): (Vec<_>, Vec<_>) = channels
            .into_iter()
            .partition(|ch| ch.kind == ChannelKind::Diffusive);
        let n_diffusive = ordered.len();
        ordered.extend(counting);
        Ok(Self {
            basis,
            epsilon,
            channels: ordered,
            n_diffusive,
        })
    }

    /// Model with an indexed basis and zero Hamiltonian.
    pub fn with_channels(dim: usize, channels: Vec<Channel>) -> Result<Self> {
        Self::new(PointerBasis::indexed(dim)?, vec![0.0; dim], channels)
    }

    pub fn dim(&self) -> usize {
        self.basis.dim()
    }

    pub fn basis(&self) -> &PointerBasis {
        &self.basis
    }

    pub fn epsilon(&self) -> &[f64] {
        &self.epsilon
    }

    pub fn channels(&self) -> &[Channel] {
        &self.channels
    }

    pub fn diffusive(&self) -> &[Channel] {
        &self.channels[..self.n_diffusive]
    }

    pub fn counting(&self) -> &[Channel] {
        &self.channels[self.n_diffusive..]
    }

    pub fn n_diffusive(&self) -> usize {
        self.n_diffusive
    }

    pub fn n_counting(&self) -> usize {
        self.channels.len() - self.n_diffusive
    }

    /// Largest counting intensity over all pointers; bounds `v_i(rho)` for any state.
    pub fn max_theta(&self) -> f64 {
        self.counting()
            .iter()
            .flat_map(|ch| ch.theta.iter().copied())
            .fold(0.0, f64::max)
    }

    /// Counting channels (indices into [`QndModel::counting`]) on which pointer `alpha` has zero intensity.
    pub fn extinction_channels(&self, alpha: usize) -> Vec<usize> {
        self.counting()
            .iter()
            .enumerate()
            .filter(|(_, ch)| ch.theta[alpha] == 0.0)
            .map(|(i, _)| i)
            .collect()
    }

    /// The same system written as full matrices in the pointer basis.
    pub fn embed(&self) -> GeneralModel {
        let d = self.dim();
        let h = DMatrix::from_diagonal(&nalgebra::DVector::from_iterator(
            d,
            self.epsilon.iter().map(|&e| Complex64::new(e, 0.0)),
        ));
        let channels = self
            .channels
            .iter()
            .map(|ch| GeneralChannel {
                kind: ch.kind,
                op: DMatrix::from_diagonal(&nalgebra::DVector::from_column_slice(&ch.c)),
            })
            .collect();
        GeneralModel {
            h,
            channels,
            n_diffusive: self.n_diffusive,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GeneralChannel {
    pub kind: ChannelKind,
    pub op: DMatrix<Complex64>,
}

/// Arbitrary Hamiltonian and channel operators; channels are stored diffusive block first.
#[derive(Debug, Clone, PartialEq)]
pub struct GeneralModel {
    h: DMatrix<Complex64>,
    channels: Vec<GeneralChannel>,
    n_diffusive: usize,
}

impl GeneralModel {
    pub fn new(h: DMatrix<Complex64>, channels: Vec<GeneralChannel>) -> Result<Self> {
        let d = h.nrows();
        if h.ncols() != d {
            return Err(Error::InvalidModel(format!(
                "Hamiltonian is {}x{}, expected square",
                h.nrows(),
                h.ncols()
            )));
        }
        if d < 2 {
            return Err(Error::InvalidModel("dimension must be at least 2".into()));
        }
        let asym = (&h - h.adjoint()).iter().map(|z| z.norm()).fold(0.0, f64::max);
        if !(asym <= HERMITIAN_TOL) {
            return Err(Error::InvalidModel(format!(
                "Hamiltonian is not Hermitian (max |H - H*| = {asym:e})"
            )));
        }
        for ch in &channels {
            if ch.op.nrows() != d || ch.op.ncols() != d {
                return Err(Error::DimensionMismatch {
                    expected: d,
                    found: ch.op.nrows().max(ch.op.ncols()),
                });
            }
            if ch.op.iter().any(|z| !z.re.is_finite() || !z.im.is_finite()) {
                return Err(Error::InvalidModel("non-finite channel entry".into()));
            }
        }
        let (mut ordered, counting): (Vec<_>, Vec<_>) = channels
            .into_iter()
            .partition(|ch| ch.kind == ChannelKind::Diffusive);
        let n_diffusive = ordered.len();
        ordered.extend(counting);
        Ok(Self {
            h,
            channels: ordered,
            n_diffusive,
        })
    }

    pub fn dim(&self) -> usize {
        self.h.nrows()
    }

    pub fn hamiltonian(&self) -> &DMatrix<Complex64> {
        &self.h
    }

    pub fn channels(&self) -> &[GeneralChannel] {
        &self.channels
    }

    pub fn n_diffusive(&self) -> usize {
        self.n_diffusive
    }

    pub fn diffusive(&self) -> &[GeneralChannel] {
        &self.channels[..self.n_diffusive]
    }

    pub fn counting(&self) -> &[GeneralChannel] {
        &self.channels[self.n_diffusive..]
    }
}

/// Which operator an off-diagonal entry belongs to. Channel indices follow
/// the normalized ordering (diffusive block first).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Operator {
    Hamiltonian,
    Channel(usize),
}

impl fmt::Display for Operator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Operator::Hamiltonian => f.write_str("H"),
            Operator::Channel(i) => write!(f, "C_{i}"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OffDiagonal {
    pub operator: Operator,
    pub row: usize,
    pub col: usize,
    pub modulus: f64,
}

fn off_diagonal_entries(op: Operator, m: &DMatrix<Complex64>, out: &mut Vec<OffDiagonal>) {
    for row in 0..m.nrows() {
        for col in 0..m.ncols() {
            if row != col {
                let modulus = m[(row, col)].norm();
                if !(modulus <= DIAGONAL_TOL) {
                    out.push(OffDiagonal {
                        operator: op,
                        row,
                        col,
                        modulus,
                    });
                }
            }
        }
    }
}

/// Reads off the diagonal decomposition, or lists every offending entry.
pub fn diagonalize(model: &GeneralModel, basis: &PointerBasis) -> Result<QndModel> {
    if model.dim() != basis.dim() {
        return Err(Error::DimensionMismatch {
            expected: basis.dim(),
            found: model.dim(),
        });
    }
    let mut offending = Vec::new();
    off_diagonal_entries(Operator::Hamiltonian, &model.h, &mut offending);
    for (i, ch) in model.channels.iter().enumerate() {
        off_diagonal_entries(Operator::Channel(i), &ch.op, &mut offending);
    }
    if !offending.is_empty() {
        return Err(Error::Diagonality(offending));
    }
    let epsilon = (0..model.dim()).map(|a| model.h[(a, a)].re).collect();
    let channels = model
        .channels
        .iter()
        .map(|ch| Channel::new(ch.kind, ch.op.diagonal().iter().copied().collect()))
        .collect();
    QndModel::new(basis.clone(), epsilon, channels)
}

/// The probe state used to evaluate a diagonal entry of the Lindblad generator.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Probe {
    /// `L(|alpha><alpha|)_{beta beta}`
    Pointer,
    /// `L(|alpha+beta><alpha+beta|)_{alpha alpha}`
    Plus,
    /// `L(|alpha+i beta><alpha+i beta|)_{alpha alpha}`
    PlusI,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProbeViolation {
    pub probe: Probe,
    pub alpha: usize,
    pub beta: usize,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NondemolitionReport {
    pub holds: bool,
    pub violations: Vec<OffDiagonal>,
    /// Nonzero population drifts out of pointer states or superposition probes.
    pub probes: Vec<ProbeViolation>,
}

pub fn check_nondemolition(model: &GeneralModel, basis: &PointerBasis) -> Result<NondemolitionReport> {
    let violations = match diagonalize(model, basis) {
        Ok(_) => Vec::new(),
        Err(Error::Diagonality(v)) => v,
        Err(e) => return Err(e),
    };
    let d = model.dim();
    let mut probes = Vec::new();
    let mut record = |probe, alpha, beta, value: f64| {
        if value.abs() > DIAGONAL_TOL {
            probes.push(ProbeViolation {
                probe,
                alpha,
                beta,
                value,
            });
        }
    };
    let s = std::f64::consts::FRAC_1_SQRT_2;
    for alpha in 0..d {
        let mut rho = DMatrix::zeros(d, d);
        rho[(alpha, alpha)] = Complex64::new(1.0, 0.0);
        let l = crate::qdyn::lindblad_matrix(model, &rho);
        for beta in (0..d).filter(|&b| b != alpha) {
            record(Probe::Pointer, alpha, beta, l[(beta, beta)].re);
        }
    }
    for alpha in 0..d {
        for beta in (0..d).filter(|&b| b != alpha) {
            for (probe, phase) in [(Probe::Plus, Complex64::new(1.0, 0.0)), (Probe::PlusI, Complex64::i())] {
                let mut psi = nalgebra::DVector::<Complex64>::zeros(d);
                psi[alpha] = Complex64::new(s, 0.0);
                psi[beta] = phase * s;
                let rho = &psi * psi.adjoint();
                let l = crate::qdyn::lindblad_matrix(model, &rho);
                record(probe, alpha, beta, l[(alpha, alpha)].re);
            }
        }
    }
    Ok(NondemolitionReport {
        holds: violations.is_empty(),
        violations,
        probes,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NdReport {
    pub holds: bool,
    /// Pairs `(alpha, beta)`, `alpha < beta`, that no channel separates.
    pub pairs: Vec<(usize, usize)>,
}

pub fn check_nd_assumption(model: &QndModel, tol: f64) -> NdReport {
    let d = model.dim();
    let mut pairs = Vec::new();
    for a in 0..d {
        for b in a + 1..d {
            let separated = model.diffusive().iter().any(|ch| (ch.r[a] - ch.r[b]).abs() > tol)
                || model
                    .counting()
                    .iter()
                    .any(|ch| (ch.theta[a] - ch.theta[b]).abs() > tol);
            if !separated {
                pairs.push((a, b));
            }
        }
    }
    NdReport {
        holds: pairs.is_empty(),
        pairs,
    }
}

/// `theta_gamma * (x - 1 - ln x)` with `x = theta_alpha / theta_gamma`, i.e.
/// one counting summand of the convergence rate. Handles the zero cases:
/// `theta_alpha = 0 < theta_gamma` is infinite; `theta_gamma = 0` takes the
/// continuous limit `theta_alpha`.
pub fn counting_rate_term(theta_alpha: f64, theta_gamma: f64) -> f64 {
    if theta_alpha == theta_gamma {
        0.0
    } else if theta_gamma == 0.0 {
        theta_alpha
    } else if theta_alpha == 0.0 {
        f64::INFINITY
    } else {
        let u = theta_alpha / theta_gamma - 1.0;
        theta_gamma * (u - u.ln_1p())
    }
}

pub fn diffusive_rate_term(r_alpha: f64, r_gamma: f64) -> f64 {
    let dr = r_alpha - r_gamma;
    0.5 * dr * dr
}

/// Closed-form convergence rates `lambda[alpha][gamma]` and extinction
/// (hitting) rates `lambda_hit[alpha][gamma]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RateTable {
    pub lambda: Vec<Vec<f64>>,
    pub lambda_hit: Vec<Vec<f64>>,
    /// For each pointer gamma, the first counting channel (absolute index) with theta(i|gamma) = 0.
    pub degenerate: Vec<Option<usize>>,
}

impl RateTable {
    /// Rate of `q_alpha / q_gamma` under conditioning on `gamma`; errors when
    /// the conditioned counting intensity of `gamma` vanishes.
    pub fn rate(&self, alpha: usize, gamma: usize) -> Result<f64> {
        match self.degenerate[gamma] {
            Some(channel) => Err(Error::DegenerateRate { gamma, channel }),
            None => Ok(self.lambda[alpha][gamma]),
        }
    }

    /// Smallest finite, strictly positive off-diagonal rate.
    pub fn min_positive_rate(&self) -> Option<f64> {
        let d = self.lambda.len();
        (0..d)
            .flat_map(|a| (0..d).map(move |g| (a, g)))
            .filter(|(a, g)| a != g)
            .map(|(a, g)| self.lambda[a][g])
            .filter(|x| x.is_finite() && *x > 0.0)
            .min_by(f64::total_cmp)
    }
}

pub fn rate_table(model: &QndModel) -> RateTable {
    let d = model.dim();
    let mut lambda = vec![vec![0.0; d]; d];
    let mut lambda_hit = vec![vec![0.0; d]; d];
    for a in 0..d {
        for g in 0..d {
            if a != g {
                let diff: f64 = model
                    .diffusive()
                    .iter()
                    .map(|ch| diffusive_rate_term(ch.r[a], ch.r[g]))
                    .sum();
                let count: f64 = model
                    .counting()
                    .iter()
                    .map(|ch| counting_rate_term(ch.theta[a], ch.theta[g]))
                    .sum();
                lambda[a][g] = diff + count;
            }
            lambda_hit[a][g] = model
                .counting()
                .iter()
                .filter(|ch| ch.theta[a] == 0.0)
                .map(|ch| ch.theta[g])
                .sum();
        }
    }
    let degenerate = (0..d)
        .map(|g| {
            model
                .counting()
                .iter()
                .position(|ch| ch.theta[g] == 0.0)
                .map(|i| i + model.n_diffusive())
        })
        .collect();
    RateTable {
        lambda,
        lambda_hit,
        degenerate,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RateComparison {
    pub diffusive: f64,
    pub counting: f64,
    pub inequality_holds: bool,
}

/// Single hermitian channel read either as a homodyne current or as a photon
/// counter: rates `(c_a - c_u)^2` and `-c_u^2 [ln(c_a^2/c_u^2) + 1 - c_a^2/c_u^2]`.
pub fn compare_diffusive_counting_rates(c_alpha: f64, c_upsilon: f64) -> Result<RateComparison> {
    if c_alpha == 0.0 || c_upsilon == 0.0 || !c_alpha.is_finite() || !c_upsilon.is_finite() {
        return Err(Error::Domain(format!(
            "eigenvalues must be finite and nonzero, got ({c_alpha}, {c_upsilon})"
        )));
    }
    let d = c_alpha - c_upsilon;
    let diffusive = d * d;
    let counting = counting_rate_term(c_alpha * c_alpha, c_upsilon * c_upsilon);
    Ok(RateComparison {
        diffusive,
        counting,
        inequality_holds: diffusive <= counting + 1e-12,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn c(re: f64, im: f64) -> Complex64 {
        Complex64::new(re, im)
    }

    fn mat(rows: &[&[Complex64]]) -> DMatrix<Complex64> {
        let d = rows.len();
        DMatrix::from_fn(d, d, |i, j| rows[i][j])
    }

    fn general(h: DMatrix<Complex64>, ops: Vec<(ChannelKind, DMatrix<Complex64>)>) -> GeneralModel {
        GeneralModel::new(
            h,
            ops.into_iter().map(|(kind, op)| GeneralChannel { kind, op }).collect(),
        )
        .unwrap()
    }

    fn sigma_minus() -> DMatrix<Complex64> {
        mat(&[&[c(0., 0.), c(1., 0.)], &[c(0., 0.), c(0., 0.)]])
    }

    #[test]
    fn basis_rejects_duplicates_and_small_dims() {
        assert!(PointerBasis::new(vec!["a".into()]).is_err());
        assert!(PointerBasis::new(vec!["a".into(), "a".into()]).is_err());
        assert_eq!(PointerBasis::indexed(3).unwrap().dim(), 3);
    }

    #[test]
    fn channel_ordering_is_normalized() {
        let m = QndModel::with_channels(
            2,
            vec![
                Channel::real(ChannelKind::Counting, &[1.0, 2.0]),
                Channel::real(ChannelKind::Diffusive, &[3.0, 4.0]),
            ],
        )
        .unwrap();
        assert_eq!(m.channels()[0].kind(), ChannelKind::Diffusive);
        assert_eq!(m.n_diffusive(), 1);
        assert_eq!(m.counting()[0].theta(), &[1.0, 4.0]);
    }

    #[test]
    fn diagonalize_reads_off_diagonal_input() {
        let h = mat(&[&[c(1., 0.), c(0., 0.)], &[c(0., 0.), c(-1., 0.)]]);
        let c0 = mat(&[&[c(2., 0.), c(0., 0.)], &[c(0., 0.), c(0., 0.)]]);
        let g = general(h, vec![(ChannelKind::Diffusive, c0)]);
        let q = diagonalize(&g, &PointerBasis::indexed(2).unwrap()).unwrap();
        assert_eq!(q.epsilon(), &[1.0, -1.0]);
        let ch = &q.channels()[0];
        assert_eq!(ch.c(), &[c(2., 0.), c(0., 0.)]);
        assert_eq!(ch.r(), &[4.0, 0.0]);
        assert_eq!(ch.theta(), &[4.0, 0.0]);
    }

    #[test]
    fn diagonalize_rejects_raising_operator() {
        let g = general(DMatrix::zeros(2, 2), vec![(ChannelKind::Diffusive, sigma_minus())]);
        match diagonalize(&g, &PointerBasis::indexed(2).unwrap()) {
            Err(Error::Diagonality(v)) => {
                assert_eq!(v.len(), 1);
                assert_eq!((v[0].operator, v[0].row, v[0].col), (Operator::Channel(0), 0, 1));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn diagonalize_rejects_offdiagonal_hamiltonian() {
        let h = mat(&[&[c(0., 0.), c(0.5, 0.)], &[c(0.5, 0.), c(0., 0.)]]);
        let c0 = mat(&[&[c(1., 0.), c(0., 0.)], &[c(0., 0.), c(-1., 0.)]]);
        let g = general(h, vec![(ChannelKind::Diffusive, c0)]);
        match diagonalize(&g, &PointerBasis::indexed(2).unwrap()) {
            Err(Error::Diagonality(v)) => {
                assert_eq!((v[0].operator, v[0].row, v[0].col), (Operator::Hamiltonian, 0, 1));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn diagonalize_checks_dimension() {
        let g = general(DMatrix::zeros(2, 2), vec![]);
        assert!(matches!(
            diagonalize(&g, &PointerBasis::indexed(3).unwrap()),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn non_hermitian_hamiltonian_rejected() {
        let h = mat(&[&[c(0., 0.), c(1., 0.)], &[c(0., 0.), c(0., 0.)]]);
        assert!(GeneralModel::new(h, vec![]).is_err());
    }

    #[test]
    fn nondemolition_diagonal_model_holds() {
        let q = QndModel::with_channels(2, vec![Channel::real(ChannelKind::Diffusive, &[1.0, -1.0])]).unwrap();
        let rep = check_nondemolition(&q.embed(), q.basis()).unwrap();
        assert!(rep.holds);
        assert!(rep.violations.is_empty());
        assert!(rep.probes.is_empty());
    }

    #[test]
    fn nondemolition_sigma_minus_fails_with_population_leak() {
        let g = general(DMatrix::zeros(2, 2), vec![(ChannelKind::Diffusive, sigma_minus())]);
        let rep = check_nondemolition(&g, &PointerBasis::indexed(2).unwrap()).unwrap();
        assert!(!rep.holds);
        assert_eq!(rep.violations.len(), 1);
        let leak = rep
            .probes
            .iter()
            .find(|p| p.probe == Probe::Pointer && p.alpha == 1 && p.beta == 0)
            .expect("leak from |1><1| into |0><0|");
        assert_abs_diff_eq!(leak.value, 1.0, epsilon = 1e-14);
    }

    #[test]
    fn nondemolition_offdiagonal_hamiltonian_detected_by_superposition_probe() {
        // Real symmetric coupling: L(|a+b><a+b|)_aa vanishes (H_ab - H_ba = 0)
        // while the |a+ib> probe sees H_ab + H_ba = 1.
        let h = mat(&[&[c(0., 0.), c(0.5, 0.)], &[c(0.5, 0.), c(0., 0.)]]);
        let c0 = mat(&[&[c(1., 0.), c(0., 0.)], &[c(0., 0.), c(-1., 0.)]]);
        let g = general(h, vec![(ChannelKind::Diffusive, c0)]);
        let rep = check_nondemolition(&g, &PointerBasis::indexed(2).unwrap()).unwrap();
        assert!(!rep.holds);
        assert_eq!(rep.violations[0].operator, Operator::Hamiltonian);
        assert!(!rep.probes.iter().any(|p| p.probe == Probe::Plus));
        let p = rep
            .probes
            .iter()
            .find(|p| p.probe == Probe::PlusI && p.alpha == 0)
            .unwrap();
        assert_abs_diff_eq!(p.value.abs(), 0.5, epsilon = 1e-14);
    }

    #[test]
    fn nd_assumption_examples() {
        let diff = QndModel::with_channels(2, vec![Channel::real(ChannelKind::Diffusive, &[1.0, -1.0])]).unwrap();
        assert_eq!(check_nd_assumption(&diff, ND_TOL), NdReport { holds: true, pairs: vec![] });
        let count = QndModel::with_channels(2, vec![Channel::real(ChannelKind::Counting, &[1.0, -1.0])]).unwrap();
        assert_eq!(
            check_nd_assumption(&count, ND_TOL),
            NdReport {
                holds: false,
                pairs: vec![(0, 1)]
            }
        );
        let three = QndModel::with_channels(
            3,
            vec![
                Channel::real(ChannelKind::Diffusive, &[1.0, 1.0, -1.0]),
                Channel::real(ChannelKind::Counting, &[1.0, 2.0, 2.0]),
            ],
        )
        .unwrap();
        assert!(check_nd_assumption(&three, ND_TOL).holds);
    }

    #[test]
    fn rate_table_examples() {
        let diff = QndModel::with_channels(2, vec![Channel::real(ChannelKind::Diffusive, &[1.0, -1.0])]).unwrap();
        let t = rate_table(&diff);
        assert_eq!(t.lambda[0][0], 0.0);
        assert_abs_diff_eq!(t.lambda[0][1], 8.0, epsilon = 1e-15);
        assert_abs_diff_eq!(t.lambda[1][0], 8.0, epsilon = 1e-15);

        let count = QndModel::with_channels(2, vec![Channel::real(ChannelKind::Counting, &[2.0, 1.0])]).unwrap();
        let t = rate_table(&count);
        // -1 * (1 - 4 + ln 4)
        assert_abs_diff_eq!(t.lambda[0][1], 3.0 - 4f64.ln(), epsilon = 1e-14);
        assert_abs_diff_eq!(t.lambda[0][1], 1.6137, epsilon = 1e-4);
        // -4 * (1 - 1/4 + ln(1/4))
        assert_abs_diff_eq!(t.lambda[1][0], -4.0 * (0.75 - 4f64.ln()), epsilon = 1e-14);
        assert_eq!(t.rate(0, 1).unwrap(), t.lambda[0][1]);
    }

    #[test]
    fn rate_table_extinction_regime() {
        let m = QndModel::with_channels(2, vec![Channel::real(ChannelKind::Counting, &[0.0, 2f64.sqrt()])]).unwrap();
        let t = rate_table(&m);
        assert_eq!(t.lambda[0][1], f64::INFINITY);
        assert_abs_diff_eq!(t.lambda_hit[0][1], 2.0, epsilon = 1e-14);
        assert_eq!(t.lambda_hit[0][0], 0.0);
        assert_eq!(t.lambda_hit[1][0], 0.0);
        assert_eq!(t.rate(1, 0), Err(Error::DegenerateRate { gamma: 0, channel: 0 }));
        assert!(t.rate(0, 1).is_ok());
    }

    #[test]
    fn rate_comparison_examples() {
        let eq = compare_diffusive_counting_rates(1.0, 1.0).unwrap();
        assert_eq!((eq.diffusive, eq.counting, eq.inequality_holds), (0.0, 0.0, true));
        let two = compare_diffusive_counting_rates(2.0, 1.0).unwrap();
        assert_eq!(two.diffusive, 1.0);
        assert_abs_diff_eq!(two.counting, -(4f64.ln() + 1.0 - 4.0), epsilon = 1e-14);
        assert!(two.inequality_holds);
        let flip = compare_diffusive_counting_rates(-1.0, 1.0).unwrap();
        assert_eq!((flip.diffusive, flip.counting, flip.inequality_holds), (4.0, 0.0, false));
        assert!(compare_diffusive_counting_rates(0.0, 1.0).is_err());
        assert!(compare_diffusive_counting_rates(1.0, 0.0).is_err());
    }

    #[test]
    fn embed_roundtrip() {
        let q = QndModel::new(
            PointerBasis::new(vec!["g".into(), "e".into(), "f".into()]).unwrap(),
            vec![0.5, -1.0, 2.0],
            vec![
                Channel::new(ChannelKind::Counting, vec![c(1., 2.), c(0., 0.), c(-0.5, 0.1)]),
                Channel::new(ChannelKind::Diffusive, vec![c(0.3, -0.2), c(1., 1.), c(2., 0.)]),
            ],
        )
        .unwrap();
        assert_eq!(diagonalize(&q.embed(), q.basis()).unwrap(), q);
    }
}
