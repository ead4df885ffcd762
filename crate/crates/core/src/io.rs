//! Text formats: complex literals, the sectioned `key = value` grammar shared
//! by model and run files, model files, and the CSV series written by runs.

use std::fmt::Write as _;
use std::io::{Read, Write};

use nalgebra::DMatrix;
use num_complex::Complex64;
use sha2::{Digest, Sha256};

use crate::conditioned::LogPopulations;
use crate::error::{Error, Result};
use crate::filter::{trace_distance, FilterRun};
use crate::model::{diagonalize, Channel, ChannelKind, GeneralChannel, GeneralModel, PointerBasis, QndModel};
use crate::qdyn::{MeasurementRecord, Trajectory};

/// Parses `1`, `-2.5e-3`, `2j`, `-j`, `1+2j`, `0.5-1e-3j` (`i` is accepted for `j`).
pub fn parse_complex(s: &str) -> std::result::Result<Complex64, String> {
    let t = s.trim();
    if t.is_empty() {
        return Err("empty number".into());
    }
    let finite = |x: f64, part: &str| {
        if x.is_finite() {
            Ok(x)
        } else {
            Err(format!("non-finite {part} part in `{t}`"))
        }
    };
    let real = |p: &str| -> std::result::Result<f64, String> {
        let p = p.trim();
        if p.is_empty() || p.chars().any(|c| c.is_alphabetic() && c != 'e' && c != 'E') {
            return Err(format!("invalid number `{t}`"));
        }
        p.parse::<f64>().map_err(|_| format!("invalid number `{t}`"))
    };
    let Some(body) = t.strip_suffix(['j', 'i']) else {
        return Ok(Complex64::new(finite(real(t)?, "real")?, 0.0));
    };
    let bytes = body.as_bytes();
    let split = (1..bytes.len())
        .rev()
        .find(|&k| (bytes[k] == b'+' || bytes[k] == b'-') && !matches!(bytes[k - 1], b'e' | b'E'));
    let (re_str, im_str) = match split {
        Some(k) => (Some(&body[..k]), &body[k..]),
        None => (None, body),
    };
    let im = match im_str.trim() {
        "" | "+" => 1.0,
        "-" => -1.0,
        other => real(other)?,
    };
    let re = match re_str {
        Some(r) => real(r)?,
        None => 0.0,
    };
    Ok(Complex64::new(finite(re, "real")?, finite(im, "imaginary")?))
}

/// Formats a complex number so that [`parse_complex`] reads it back exactly.
pub fn format_complex(z: Complex64) -> String {
    if z.im == 0.0 {
        format!("{}", z.re)
    } else if z.im < 0.0 {
        format!("{}{}j", z.re, z.im)
    } else {
        format!("{}+{}j", z.re, z.im)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Entry {
    pub key: String,
    pub value: String,
    pub line: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Section {
    pub name: String,
    pub line: usize,
    pub entries: Vec<Entry>,
}

impl Section {
    pub fn get(&self, key: &str) -> Option<&Entry> {
        self.entries.iter().find(|e| e.key == key)
    }

    /// Errors on keys outside `allowed`.
    pub fn check_keys(&self, allowed: &[&str]) -> Result<()> {
        for e in &self.entries {
            if !allowed.contains(&e.key.as_str()) {
                return Err(Error::parse(
                    e.line,
                    format!("unknown key `{}` in [{}] (expected one of {})", e.key, self.name, allowed.join(", ")),
                ));
            }
        }
        Ok(())
    }
}

/// Splits text into `[section]` blocks of `key = value` lines. `#` starts a comment.
pub fn parse_sections(text: &str) -> Result<Vec<Section>> {
    let mut sections: Vec<Section> = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        let content = raw.split('#').next().unwrap_or("").trim();
        if content.is_empty() {
            continue;
        }
        if let Some(rest) = content.strip_prefix('[') {
            let name = rest
                .strip_suffix(']')
                .ok_or_else(|| Error::parse(line, "unterminated section header"))?
                .trim();
            if name.is_empty() || !name.chars().all(|c| c.is_ascii_alphanumeric() || c == '_') {
                return Err(Error::parse(line, format!("invalid section name `{name}`")));
            }
            sections.push(Section {
                name: name.to_string(),
                line,
                entries: Vec::new(),
            });
            continue;
        }
        let (key, value) = content
            .split_once('=')
            .ok_or_else(|| Error::parse(line, "expected `key = value`"))?;
        let key = key.trim();
        if key.is_empty() || !key.chars().all(|c| c.is_ascii_alphanumeric() || c == '_') {
            return Err(Error::parse(line, format!("invalid key `{key}`")));
        }
        let section = sections
            .last_mut()
            .ok_or_else(|| Error::parse(line, "entry before the first section header"))?;
        if section.get(key).is_some() {
            return Err(Error::parse(line, format!("duplicate key `{key}` in [{}]", section.name)));
        }
        section.entries.push(Entry {
            key: key.to_string(),
            value: value.trim().to_string(),
            line,
        });
    }
    Ok(sections)
}

/// Comma-separated list of items.
pub fn split_list(value: &str) -> Vec<&str> {
    if value.trim().is_empty() {
        return Vec::new();
    }
    value.split(',').map(str::trim).collect()
}

pub fn parse_complex_list(entry: &Entry) -> Result<Vec<Complex64>> {
    split_list(&entry.value)
        .into_iter()
        .map(|s| parse_complex(s).map_err(|m| Error::parse(entry.line, m)))
        .collect()
}

pub fn parse_real_list(entry: &Entry) -> Result<Vec<f64>> {
    parse_complex_list(entry)?
        .into_iter()
        .map(|z| {
            if z.im == 0.0 {
                Ok(z.re)
            } else {
                Err(Error::parse(entry.line, format!("expected a real number, got {}", format_complex(z))))
            }
        })
        .collect()
}

pub fn parse_usize(entry: &Entry) -> Result<usize> {
    entry
        .value
        .parse()
        .map_err(|_| Error::parse(entry.line, format!("expected a nonnegative integer for `{}`", entry.key)))
}

pub fn parse_f64(entry: &Entry) -> Result<f64> {
    let x: f64 = entry
        .value
        .parse()
        .map_err(|_| Error::parse(entry.line, format!("expected a number for `{}`", entry.key)))?;
    if !x.is_finite() {
        return Err(Error::parse(entry.line, format!("`{}` must be finite", entry.key)));
    }
    Ok(x)
}

/// A parsed model file: diagonal models come straight from `epsilon`/`c`,
/// full-matrix models from `H`/`C`.
#[derive(Debug, Clone, PartialEq)]
pub enum ModelFile {
    Diagonal(QndModel),
    General { basis: PointerBasis, model: GeneralModel },
}

impl ModelFile {
    pub fn basis(&self) -> &PointerBasis {
        match self {
            ModelFile::Diagonal(m) => m.basis(),
            ModelFile::General { basis, .. } => basis,
        }
    }

    pub fn dim(&self) -> usize {
        self.basis().dim()
    }

    pub fn general(&self) -> GeneralModel {
        match self {
            ModelFile::Diagonal(m) => m.embed(),
            ModelFile::General { model, .. } => model.clone(),
        }
    }

    /// The diagonal form, when the operators are diagonal in the pointer basis.
    pub fn qnd(&self) -> Result<QndModel> {
        match self {
            ModelFile::Diagonal(m) => Ok(m.clone()),
            ModelFile::General { basis, model } => diagonalize(model, basis),
        }
    }

    /// Unambiguous text form; equal models give equal text.
    pub fn canonical_text(&self) -> String {
        let g = self.general();
        let mut out = String::new();
        let _ = writeln!(out, "dim={}", self.dim());
        let _ = writeln!(out, "labels={}", self.basis().labels().join(","));
        let matrix = |m: &DMatrix<Complex64>| {
            let mut s = Vec::new();
            for r in 0..m.nrows() {
                for c in 0..m.ncols() {
                    let z = m[(r, c)];
                    s.push(format!("{:?},{:?}", z.re, z.im));
                }
            }
            s.join(";")
        };
        let _ = writeln!(out, "H={}", matrix(g.hamiltonian()));
        for ch in g.channels() {
            let _ = writeln!(out, "{}:C={}", ch.kind, matrix(&ch.op));
        }
        out
    }

    /// Hex SHA-256 of [`ModelFile::canonical_text`].
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.canonical_text().as_bytes());
        digest.iter().fold(String::with_capacity(64), |mut s, b| {
            let _ = write!(s, "{b:02x}");
            s
        })
    }
}

fn parse_kind(entry: &Entry) -> Result<ChannelKind> {
    match entry.value.as_str() {
        "diffusive" => Ok(ChannelKind::Diffusive),
        "counting" => Ok(ChannelKind::Counting),
        other => Err(Error::parse(
            entry.line,
            format!("channel kind must be `diffusive` or `counting`, got `{other}`"),
        )),
    }
}

fn required<'a>(section: &'a Section, key: &str) -> Result<&'a Entry> {
    section
        .get(key)
        .ok_or_else(|| Error::parse(section.line, format!("[{}] is missing `{key}`", section.name)))
}

fn square(entry: &Entry, d: usize) -> Result<DMatrix<Complex64>> {
    let v = parse_complex_list(entry)?;
    if v.len() != d * d {
        return Err(Error::parse(
            entry.line,
            format!("`{}` has {} entries, expected {} (row-major {d}x{d})", entry.key, v.len(), d * d),
        ));
    }
    Ok(DMatrix::from_row_slice(d, d, &v))
}

/// Parses model sections out of an already split document. Sections other
/// than `[system]` and `[channel]` are left to the caller.
pub fn model_from_sections(sections: &[Section]) -> Result<ModelFile> {
    let systems: Vec<&Section> = sections.iter().filter(|s| s.name == "system").collect();
    let system = match systems.as_slice() {
        [one] => *one,
        [] => return Err(Error::parse(1, "missing [system] section")),
        [_, second, ..] => return Err(Error::parse(second.line, "more than one [system] section")),
    };
    system.check_keys(&["dim", "labels", "epsilon", "H"])?;
    let dim_entry = required(system, "dim")?;
    let d = parse_usize(dim_entry)?;
    if d < 2 {
        return Err(Error::parse(dim_entry.line, "dim must be at least 2"));
    }
    let basis = match system.get("labels") {
        Some(e) => {
            let labels: Vec<String> = split_list(&e.value).into_iter().map(String::from).collect();
            if labels.len() != d {
                return Err(Error::parse(e.line, format!("{} labels for dim {d}", labels.len())));
            }
            PointerBasis::new(labels).map_err(|err| Error::parse(e.line, err.to_string()))?
        }
        None => PointerBasis::indexed(d)?,
    };
    let epsilon = system.get("epsilon");
    let h = system.get("H");
    if let (Some(_), Some(he)) = (epsilon, h) {
        return Err(Error::parse(he.line, "give either `epsilon` or `H`, not both"));
    }

    struct Raw<'a> {
        kind: ChannelKind,
        vector: Option<&'a Entry>,
        matrix: Option<&'a Entry>,
        line: usize,
    }
    let mut raws = Vec::new();
    for s in sections.iter().filter(|s| s.name == "channel") {
        s.check_keys(&["kind", "c", "C"])?;
        let kind = parse_kind(required(s, "kind")?)?;
        let (vector, matrix) = (s.get("c"), s.get("C"));
        match (vector, matrix) {
            (Some(_), Some(m)) => return Err(Error::parse(m.line, "give either `c` or `C`, not both")),
            (None, None) => return Err(Error::parse(s.line, "[channel] needs `c` or `C`")),
            _ => {}
        }
        raws.push(Raw {
            kind,
            vector,
            matrix,
            line: s.line,
        });
    }
    if let Some(s) = sections.iter().find(|s| s.name != "system" && s.name != "channel" && s.name != "run") {
        return Err(Error::parse(s.line, format!("unknown section [{}]", s.name)));
    }

    let full = h.is_some() || raws.iter().any(|r| r.matrix.is_some());
    if !full {
        let eps = match epsilon {
            Some(e) => {
                let v = parse_real_list(e)?;
                if v.len() != d {
                    return Err(Error::parse(e.line, format!("epsilon has {} entries, expected {d}", v.len())));
                }
                v
            }
            None => vec![0.0; d],
        };
        let mut channels = Vec::new();
        for r in &raws {
            let e = r.vector.expect("vector form");
            let c = parse_complex_list(e)?;
            if c.len() != d {
                return Err(Error::parse(e.line, format!("c has {} entries, expected {d}", c.len())));
            }
            channels.push(Channel::new(r.kind, c));
        }
        let m = QndModel::new(basis, eps, channels).map_err(|err| Error::parse(system.line, err.to_string()))?;
        return Ok(ModelFile::Diagonal(m));
    }

    let hm = match (h, epsilon) {
        (Some(e), _) => square(e, d)?,
        (None, Some(e)) => {
            let v = parse_real_list(e)?;
            if v.len() != d {
                return Err(Error::parse(e.line, format!("epsilon has {} entries, expected {d}", v.len())));
            }
            DMatrix::from_diagonal(&nalgebra::DVector::from_iterator(d, v.into_iter().map(|x| Complex64::new(x, 0.0))))
        }
        (None, None) => DMatrix::zeros(d, d),
    };
    let mut channels = Vec::new();
    for r in &raws {
        let op = match (r.matrix, r.vector) {
            (Some(e), _) => square(e, d)?,
            (None, Some(e)) => {
                let c = parse_complex_list(e)?;
                if c.len() != d {
                    return Err(Error::parse(e.line, format!("c has {} entries, expected {d}", c.len())));
                }
                DMatrix::from_diagonal(&nalgebra::DVector::from_vec(c))
            }
            (None, None) => return Err(Error::parse(r.line, "[channel] needs `c` or `C`")),
        };
        channels.push(GeneralChannel { kind: r.kind, op });
    }
    let line = h.map_or(system.line, |e| e.line);
    let model = GeneralModel::new(hm, channels).map_err(|err| Error::parse(line, err.to_string()))?;
    Ok(ModelFile::General { basis, model })
}

pub fn parse_model(text: &str) -> Result<ModelFile> {
    let sections = parse_sections(text)?;
    if let Some(s) = sections.iter().find(|s| s.name == "run") {
        return Err(Error::parse(s.line, "unknown section [run] in a model file"));
    }
    model_from_sections(&sections)
}

/// Writes a model file that [`parse_model`] reads back to an equal model.
pub fn write_model(model: &QndModel) -> String {
    let mut out = String::from("[system]\n");
    let _ = writeln!(out, "dim = {}", model.dim());
    let _ = writeln!(out, "labels = {}", model.basis().labels().join(", "));
    let eps: Vec<String> = model.epsilon().iter().map(|e| format!("{e}")).collect();
    let _ = writeln!(out, "epsilon = {}", eps.join(", "));
    for ch in model.channels() {
        let c: Vec<String> = ch.c().iter().map(|&z| format_complex(z)).collect();
        let _ = write!(out, "\n[channel]\nkind = {}\nc = {}\n", ch.kind(), c.join(", "));
    }
    out
}

fn csv_err(e: csv::Error) -> Error {
    match e.kind() {
        csv::ErrorKind::Io(_) => Error::Io(e.to_string()),
        _ => Error::Schema(e.to_string()),
    }
}

/// Header of the trajectory CSV: `t, q_*, y_<channel>, N_<channel>`.
pub fn trajectory_header(d: usize, n_diffusive: usize, n_counting: usize) -> Vec<String> {
    let mut h = vec!["t".to_string()];
    h.extend((0..d).map(|a| format!("q_{a}")));
    h.extend((0..n_diffusive).map(|i| format!("y_{i}")));
    h.extend((n_diffusive..n_diffusive + n_counting).map(|i| format!("N_{i}")));
    h
}

/// Writes the stored rows of a trajectory with its record. Requires the record.
pub fn write_trajectory_csv<W: Write>(out: W, traj: &Trajectory) -> Result<()> {
    let record = traj
        .record
        .as_ref()
        .ok_or_else(|| Error::Schema("trajectory was simulated without a record".into()))?;
    let d = traj.q[0].len();
    let (p, m) = (record.y.len(), record.jumps.len());
    let mut w = csv::Writer::from_writer(out);
    w.write_record(trajectory_header(d, p, m)).map_err(csv_err)?;
    let mut row = Vec::with_capacity(1 + d + p + m);
    for (&k, q) in traj.indices.iter().zip(&traj.q) {
        row.clear();
        row.push(format!("{}", k as f64 * traj.dt));
        row.extend(q.iter().map(|x| format!("{x}")));
        row.extend(record.y.iter().map(|y| format!("{}", y[k])));
        row.extend((0..m).map(|i| format!("{}", record.count_at(i, k))));
        w.write_record(&row).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

/// Columns of a trajectory CSV.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryTable {
    pub t: Vec<f64>,
    pub q: Vec<Vec<f64>>,
    /// Absolute channel indices of the `y_*` columns.
    pub diffusive_channels: Vec<usize>,
    /// `y[i][row]`.
    pub y: Vec<Vec<f64>>,
    pub counting_channels: Vec<usize>,
    /// `counts[i][row]`.
    pub counts: Vec<Vec<u64>>,
}

impl TrajectoryTable {
    pub fn dim(&self) -> usize {
        self.q.first().map_or(0, Vec::len)
    }

    /// Grid step, taken from the second time stamp.
    pub fn dt(&self) -> Result<f64> {
        match self.t.get(1) {
            Some(&dt) if dt > 0.0 => Ok(dt),
            _ => Err(Error::Schema("need at least two rows with increasing time".into())),
        }
    }

    /// Rebuilds the measurement record, treating rows as consecutive grid points.
    pub fn to_record(&self) -> Result<MeasurementRecord> {
        let dt = self.dt()?;
        let steps = self.t.len() - 1;
        for (k, &t) in self.t.iter().enumerate() {
            if (t - k as f64 * dt).abs() > 1e-9 * t.abs().max(1.0) {
                return Err(Error::Schema(format!("row {} has t = {t}, expected {} on a uniform grid", k + 2, k as f64 * dt)));
            }
        }
        let mut jumps = Vec::with_capacity(self.counts.len());
        for (i, col) in self.counts.iter().enumerate() {
            if col[0] != 0 {
                return Err(Error::Schema(format!("N_{} does not start at 0", self.counting_channels[i])));
            }
            let mut js = Vec::new();
            for k in 1..=steps {
                match col[k].checked_sub(col[k - 1]) {
                    Some(0) => {}
                    Some(1) => js.push(k),
                    _ => {
                        return Err(Error::Schema(format!(
                            "N_{} changes by other than 0 or 1 at row {}",
                            self.counting_channels[i],
                            k + 2
                        )))
                    }
                }
            }
            jumps.push(js);
        }
        for (i, col) in self.y.iter().enumerate() {
            if col[0] != 0.0 {
                return Err(Error::Schema(format!("y_{} does not start at 0", self.diffusive_channels[i])));
            }
        }
        let record = MeasurementRecord {
            dt,
            steps,
            y: self.y.clone(),
            jumps,
        };
        record.validate().map_err(|e| Error::Schema(e.to_string()))?;
        Ok(record)
    }
}

fn column_index(name: &str, prefix: &str) -> Option<usize> {
    name.strip_prefix(prefix)?.parse().ok()
}

/// Reads a trajectory CSV written by [`write_trajectory_csv`].
pub fn read_trajectory_csv<R: Read>(input: R) -> Result<TrajectoryTable> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(input);
    let headers = rdr.headers().map_err(csv_err)?.clone();
    if headers.get(0) != Some("t") {
        return Err(Error::Schema("first column must be `t`".into()));
    }
    let mut d = 0;
    let mut diffusive = Vec::new();
    let mut counting = Vec::new();
    for (col, name) in headers.iter().enumerate().skip(1) {
        if let Some(a) = column_index(name, "q_") {
            if a != d || !diffusive.is_empty() || !counting.is_empty() {
                return Err(Error::Schema(format!("column {} `{name}` out of order", col + 1)));
            }
            d += 1;
        } else if let Some(i) = column_index(name, "y_") {
            if !counting.is_empty() || diffusive.last().is_some_and(|&l| i <= l) {
                return Err(Error::Schema(format!("column {} `{name}` out of order", col + 1)));
            }
            diffusive.push(i);
        } else if let Some(i) = column_index(name, "N_") {
            if counting.last().is_some_and(|&l| i <= l) || diffusive.last().is_some_and(|&l| i <= l) {
                return Err(Error::Schema(format!("column {} `{name}` out of order", col + 1)));
            }
            counting.push(i);
        } else {
            return Err(Error::Schema(format!("unexpected column `{name}`")));
        }
    }
    if d < 2 {
        return Err(Error::Schema("need at least two population columns q_0, q_1".into()));
    }
    let mut table = TrajectoryTable {
        t: Vec::new(),
        q: Vec::new(),
        diffusive_channels: diffusive.clone(),
        y: vec![Vec::new(); diffusive.len()],
        counting_channels: counting.clone(),
        counts: vec![Vec::new(); counting.len()],
    };
    for (row_idx, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(csv_err)?;
        let row = row_idx + 2;
        if rec.len() != headers.len() {
            return Err(Error::Schema(format!("row {row} has {} fields, expected {}", rec.len(), headers.len())));
        }
        let num = |col: usize| -> Result<f64> {
            let s = &rec[col];
            s.parse::<f64>()
                .ok()
                .filter(|x| x.is_finite())
                .ok_or_else(|| Error::Schema(format!("row {row}, column `{}`: invalid number `{s}`", &headers[col])))
        };
        table.t.push(num(0)?);
        table.q.push((1..=d).map(&num).collect::<Result<_>>()?);
        for (i, y) in table.y.iter_mut().enumerate() {
            y.push(num(1 + d + i)?);
        }
        for (i, n) in table.counts.iter_mut().enumerate() {
            let col = 1 + d + diffusive.len() + i;
            let s = &rec[col];
            n.push(
                s.parse::<u64>()
                    .map_err(|_| Error::Schema(format!("row {row}, column `{}`: invalid count `{s}`", &headers[col])))?,
            );
        }
    }
    if table.t.is_empty() {
        return Err(Error::Schema("no data rows".into()));
    }
    Ok(table)
}

/// `t, logq_*` rows.
pub fn write_log_populations_csv<W: Write>(out: W, lp: &LogPopulations) -> Result<()> {
    let d = lp.logq.first().map_or(0, Vec::len);
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["t".to_string()];
    header.extend((0..d).map(|a| format!("logq_{a}")));
    w.write_record(&header).map_err(csv_err)?;
    for (&k, row) in lp.indices.iter().zip(&lp.logq) {
        let mut r = vec![format!("{}", k as f64 * lp.dt)];
        r.extend(row.iter().map(|x| format!("{x}")));
        w.write_record(&r).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

/// `t, qtilde_*, trace_distance` rows every `stride` steps (and at the end).
/// The distance column is empty without reference populations.
pub fn write_filter_csv<W: Write>(out: W, run: &FilterRun, truth: Option<&[Vec<f64>]>, stride: usize) -> Result<()> {
    let d = run.q_tilde0.len();
    let stride = stride.max(1);
    let steps = run.steps();
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["t".to_string()];
    header.extend((0..d).map(|a| format!("qtilde_{a}")));
    header.push("trace_distance".into());
    w.write_record(&header).map_err(csv_err)?;
    for (k, q) in run.q_tilde.iter().enumerate() {
        if !(k % stride == 0 || k == steps) {
            continue;
        }
        let mut r = vec![format!("{}", k as f64 * run.dt)];
        r.extend(q.iter().map(|x| format!("{x}")));
        r.push(truth.map_or(String::new(), |tq| format!("{}", trace_distance(&tq[k], q))));
        w.write_record(&r).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::qdyn::{simulate_q_diag, SimOptions};

    fn c(re: f64, im: f64) -> Complex64 {
        Complex64::new(re, im)
    }

    #[test]
    fn complex_literals() {
        assert_eq!(parse_complex("1").unwrap(), c(1.0, 0.0));
        assert_eq!(parse_complex(" -2.5e-3 ").unwrap(), c(-2.5e-3, 0.0));
        assert_eq!(parse_complex("2j").unwrap(), c(0.0, 2.0));
        assert_eq!(parse_complex("-j").unwrap(), c(0.0, -1.0));
        assert_eq!(parse_complex("1+2j").unwrap(), c(1.0, 2.0));
        assert_eq!(parse_complex("0.5-1e-3j").unwrap(), c(0.5, -1e-3));
        assert_eq!(parse_complex("1e-3+1e+2i").unwrap(), c(1e-3, 100.0));
        assert_eq!(parse_complex("-1-j").unwrap(), c(-1.0, -1.0));
        for bad in ["", "j j", "1+", "abc", "1+2", "inf", "nan", "1++2j", "e5", "1e999"] {
            assert!(parse_complex(bad).is_err(), "{bad}");
        }
    }

    #[test]
    fn complex_round_trip() {
        for z in [c(1.0, 0.0), c(-0.1, 2.5), c(3.0, -1e-17), c(0.0, 1.0)] {
            assert_eq!(parse_complex(&format_complex(z)).unwrap(), z);
        }
    }

    const QUBIT: &str = "\
# diffusive qubit
[system]
dim = 2
epsilon = 0, 0

[channel]
kind = diffusive
c = 1, -1
";

    #[test]
    fn diagonal_model_file() {
        let m = parse_model(QUBIT).unwrap();
        let ModelFile::Diagonal(q) = &m else { panic!() };
        assert_eq!(q.channels()[0].r(), &[2.0, -2.0]);
        assert_eq!(m.hash().len(), 64);
        assert_eq!(parse_model(&write_model(q)).unwrap().hash(), m.hash());
    }

    #[test]
    fn hash_depends_on_content_not_layout() {
        let a = parse_model(QUBIT).unwrap().hash();
        let b = parse_model("[system]\ndim=2\n[channel]\nc=1,-1 # same\nkind=diffusive\n").unwrap().hash();
        assert_eq!(a, b);
        let c2 = parse_model("[system]\ndim=2\n[channel]\nkind=diffusive\nc=1,-0.5\n").unwrap().hash();
        assert_ne!(a, c2);
    }

    #[test]
    fn general_model_file() {
        let text = "[system]\ndim = 2\nH = 0, 0.5, 0.5, 0\n[channel]\nkind = counting\nC = 0, 1, 0, 0\n";
        let m = parse_model(text).unwrap();
        assert!(matches!(m, ModelFile::General { .. }));
        assert!(m.qnd().is_err());
    }

    #[test]
    fn line_numbered_errors() {
        let cases = [
            ("[system]\ndim = 2\nepsilon = 0, 0, 0\n", 3),
            ("[system]\ndim = 2\n[channel]\nkind = diffusive\nc = 1, 2, 3\n", 5),
            ("[system]\ndim = 2\n[channel]\nkind = sideways\nc = 1, 2\n", 4),
            ("dim = 2\n", 1),
            ("[system]\ndim = 2\nfoo = 1\n", 3),
            ("[system]\ndim = 2\ndim = 3\n", 3),
            ("[system]\ndim = 2\nH = 0, 1, 0, 0\n", 3),
            ("[system]\ndim = 2\n[channel]\nkind = diffusive\nc = 1, 1+\n", 5),
            ("[system\n", 1),
        ];
        for (text, line) in cases {
            match parse_model(text) {
                Err(Error::Parse { line: l, .. }) => assert_eq!(l, line, "{text}"),
                other => panic!("{text}: {other:?}"),
            }
        }
    }

    #[test]
    fn trajectory_csv_round_trip() {
        let m = match parse_model("[system]\ndim=2\n[channel]\nkind=diffusive\nc=1,-1\n[channel]\nkind=counting\nc=2,1\n")
            .unwrap()
        {
            ModelFile::Diagonal(m) => m,
            _ => unreachable!(),
        };
        let t = simulate_q_diag(&m, &[0.3, 0.7], 0.5, 1e-3, 2, &SimOptions::default()).unwrap();
        let mut buf = Vec::new();
        write_trajectory_csv(&mut buf, &t).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("t,q_0,q_1,y_0,N_1\n"));
        let table = read_trajectory_csv(text.as_bytes()).unwrap();
        assert_eq!(table.q, t.q);
        assert_eq!(&table.to_record().unwrap(), t.record.as_ref().unwrap());
    }

    #[test]
    fn trajectory_csv_schema_errors() {
        for bad in [
            "x,q_0,q_1\n0,1,0\n",
            "t,q_0\n0,1\n",
            "t,q_0,q_1,z\n0,1,0,1\n",
            "t,q_0,q_1\n0,1\n",
            "t,q_0,q_1\n0,1,abc\n",
            "t,q_0,q_1,N_0\n0,1,0,x\n",
            "t,q_1,q_0\n0,1,0\n",
        ] {
            assert!(matches!(read_trajectory_csv(bad.as_bytes()), Err(Error::Schema(_))), "{bad}");
        }
        let table = read_trajectory_csv("t,q_0,q_1,N_0\n0,1,0,0\n0.1,1,0,2\n".as_bytes()).unwrap();
        assert!(matches!(table.to_record(), Err(Error::Schema(_))));
    }
}
