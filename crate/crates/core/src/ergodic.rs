//! Normalized backward compositions of finite killed kernels.
//!
//! `Q_l` maps `E_l` to `E_{l−1}`: rows are indexed by `E_l`, columns by
//! `E_{l−1}`. For `f` on `E_0` and a distribution `ν_n` on `E_n` the quantity
//! of interest is
//!
//! ```text
//! ν_nᵀ Q_n ⋯ Q_1 f / ν_nᵀ Q_n ⋯ Q_1 𝟙.
//! ```
//!
//! Both vectors `Q_n ⋯ Q_1 f` and `Q_n ⋯ Q_1 𝟙` are built incrementally and
//! divided by a shared factor after every step, so the ratio is unaffected and
//! nothing underflows.

use std::fmt::Write as _;
use std::io::{BufRead, BufReader, Read};

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

#[derive(Error, Debug, Clone, PartialEq)]
pub enum ErgodicError {
    #[error("invalid kernel {index}: {reason}")]
    InvalidKernel { index: usize, reason: String },
    #[error("kernel dimensions do not chain at level {level}")]
    Dimension { level: usize },
    #[error("all mass was killed by level {level}")]
    MassExtinction { level: usize },
    #[error("no convergence within the horizon of {horizon} steps")]
    HorizonExceeded {
        horizon: usize,
        diagnostics: Box<ErgodicDiagnostics>,
    },
    #[error("kernel file: {0}")]
    Parse(String),
}

const ROW_SUM_TOL: f64 = 1e-12;

/// Sub-probability kernels `Q_1, …, Q_n`.
#[derive(Debug, Clone, PartialEq)]
pub struct KernelSequence {
    kernels: Vec<DMatrix<f64>>,
}

impl KernelSequence {
    /// Rejects negative or non-finite entries, rows with mass above one, all-zero
    /// kernels, and dimensions that do not chain.
    pub fn new(kernels: Vec<DMatrix<f64>>) -> Result<Self, ErgodicError> {
        for (i, q) in kernels.iter().enumerate() {
            let index = i + 1;
            if q.iter().any(|v| !v.is_finite() || *v < 0.0) {
                return Err(ErgodicError::InvalidKernel {
                    index,
                    reason: "entries must be finite and nonnegative".into(),
                });
            }
            let mut max_row: f64 = 0.0;
            for r in q.row_iter() {
                let s = r.sum();
                if s > 1.0 + ROW_SUM_TOL {
                    return Err(ErgodicError::InvalidKernel {
                        index,
                        reason: format!("row mass {s} exceeds 1"),
                    });
                }
                max_row = max_row.max(s);
            }
            if !(max_row > 0.0) {
                return Err(ErgodicError::InvalidKernel {
                    index,
                    reason: "kernel has no mass".into(),
                });
            }
            if i > 0 && kernels[i - 1].nrows() != q.ncols() {
                return Err(ErgodicError::Dimension { level: index });
            }
        }
        Ok(KernelSequence { kernels })
    }

    /// `n` copies of `q`.
    pub fn constant(q: DMatrix<f64>, n: usize) -> Result<Self, ErgodicError> {
        Self::new(vec![q; n])
    }

    pub fn len(&self) -> usize {
        self.kernels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.kernels.is_empty()
    }

    /// `Q_l`, 1-based.
    pub fn kernel(&self, l: usize) -> &DMatrix<f64> {
        &self.kernels[l - 1]
    }

    pub fn kernels(&self) -> &[DMatrix<f64>] {
        &self.kernels
    }

    /// Size of `E_l`.
    pub fn space_size(&self, l: usize) -> usize {
        if l == 0 {
            self.kernels.first().map(|q| q.ncols()).unwrap_or(0)
        } else {
            self.kernels[l - 1].nrows()
        }
    }

    /// Reads kernels `Q_1, …, Q_n` from the CSV format written by
    /// [`write_kernel_csv`]: an optional `#` metadata line, a header, then
    /// one row per source state with columns `c0..c{k−1}`; other columns
    /// are ignored.
    pub fn from_csv<R: Read>(readers: Vec<R>) -> Result<Self, ErgodicError> {
        let mut ks = Vec::new();
        for r in readers {
            ks.push(read_kernel_csv(r)?.matrix);
        }
        Self::new(ks)
    }
}

/// A kernel matrix plus whatever `key=value` metadata its file carried.
#[derive(Debug, Clone, PartialEq)]
pub struct KernelFile {
    pub matrix: DMatrix<f64>,
    pub metadata: Vec<(String, String)>,
}

pub fn read_kernel_csv<R: Read>(r: R) -> Result<KernelFile, ErgodicError> {
    let mut br = BufReader::new(r);
    let mut first = String::new();
    br.read_line(&mut first).map_err(|e| ErgodicError::Parse(e.to_string()))?;
    let mut metadata = Vec::new();
    let rest: Box<dyn Read> = if let Some(meta) = first.trim_end().strip_prefix('#') {
        for kv in meta.split_whitespace() {
            if let Some((k, v)) = kv.split_once('=') {
                metadata.push((k.to_string(), v.to_string()));
            }
        }
        Box::new(br)
    } else {
        Box::new(std::io::Cursor::new(first.into_bytes()).chain(br))
    };
    let mut rd = csv::Reader::from_reader(rest);
    let headers = rd.headers().map_err(|e| ErgodicError::Parse(e.to_string()))?.clone();
    let cols: Vec<usize> = headers
        .iter()
        .enumerate()
        .filter(|(_, h)| h.starts_with('c') && h[1..].parse::<usize>().is_ok())
        .map(|(i, _)| i)
        .collect();
    if cols.is_empty() {
        return Err(ErgodicError::Parse("no c<j> columns".into()));
    }
    let mut data = Vec::new();
    let mut nrows = 0;
    for rec in rd.records() {
        let rec = rec.map_err(|e| ErgodicError::Parse(e.to_string()))?;
        for &c in &cols {
            let v: f64 = rec
                .get(c)
                .ok_or_else(|| ErgodicError::Parse(format!("short row {nrows}")))?
                .trim()
                .parse()
                .map_err(|e| ErgodicError::Parse(format!("row {nrows}: {e}")))?;
            data.push(v);
        }
        nrows += 1;
    }
    Ok(KernelFile {
        matrix: DMatrix::from_row_slice(nrows, cols.len(), &data),
        metadata,
    })
}

/// Writes `q` with a `# key=value …` line, header `row,c0..,kill` and
/// optional extra columns (same length as the row count).
pub fn write_kernel_csv<W: std::io::Write>(
    mut w: W,
    q: &DMatrix<f64>,
    metadata: &[(String, String)],
    extra: &[(&str, Vec<String>)],
) -> std::io::Result<()> {
    let mut line = String::from("#");
    for (k, v) in metadata {
        let _ = write!(line, " {k}={v}");
    }
    writeln!(w, "{line}")?;
    let mut wr = csv::Writer::from_writer(w);
    let mut header = vec!["row".to_string()];
    header.extend((0..q.ncols()).map(|j| format!("c{j}")));
    header.push("kill".into());
    header.extend(extra.iter().map(|(n, _)| n.to_string()));
    wr.write_record(&header)?;
    for i in 0..q.nrows() {
        let mut rec = vec![i.to_string()];
        rec.extend(q.row(i).iter().map(|v| v.to_string()));
        rec.push((1.0 - q.row(i).sum()).max(0.0).to_string());
        rec.extend(extra.iter().map(|(_, v)| v[i].clone()));
        wr.write_record(&rec)?;
    }
    wr.flush()?;
    Ok(())
}

/// `Σ_y min(Q(x,y), Q(x̃,y))`.
pub fn overlap(q: &DMatrix<f64>, x: usize, x_tilde: usize) -> f64 {
    q.row(x).iter().zip(q.row(x_tilde).iter()).map(|(a, b)| a.min(*b)).sum()
}

/// The same quantity evaluated through densities against `Q(x,·) + Q(x̃,·)`.
pub fn overlap_density_form(q: &DMatrix<f64>, x: usize, x_tilde: usize) -> f64 {
    let mut total = 0.0;
    for y in 0..q.ncols() {
        let a = q[(x, y)];
        let b = q[(x_tilde, y)];
        let m = a + b;
        if m > 0.0 {
            let f_x = a / m;
            let f_xt = b / m;
            total += f_x.min(f_xt) * m;
        }
    }
    total
}

#[derive(Debug, Clone, PartialEq)]
pub enum Violation {
    /// Survival ratio below the floor at step `n`: `x_min` survives least,
    /// `x_max` most.
    SurvivalRatio { n: usize, x_min: usize, x_max: usize, ratio: f64 },
    /// Overlap below the floor for the pair `(x, x_tilde)` of `E_level`.
    Overlap { level: usize, x: usize, x_tilde: usize, eps: f64 },
}

impl Violation {
    /// `"i"` or `"ii"` after the assumption that fails.
    pub fn label(&self) -> &'static str {
        match self {
            Violation::SurvivalRatio { .. } => "i",
            Violation::Overlap { .. } => "ii",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AssumptionReport {
    pub c0: f64,
    pub eps0: f64,
    /// `inf/sup` of `Q_n ⋯ Q_1 𝟙`, per `n`.
    pub c0_trace: Vec<f64>,
    /// Minimal pairwise overlap of `Q_l`, per `l`.
    pub eps_trace: Vec<f64>,
    pub violation: Option<Violation>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Floors {
    pub c0: f64,
    pub eps: f64,
}

impl Default for Floors {
    fn default() -> Self {
        Floors { c0: 1e-6, eps: 1e-6 }
    }
}

fn min_max_idx(v: &DVector<f64>) -> (usize, usize) {
    let mut lo = 0;
    let mut hi = 0;
    for i in 0..v.len() {
        if v[i] < v[lo] {
            lo = i;
        }
        if v[i] > v[hi] {
            hi = i;
        }
    }
    (lo, hi)
}

/// Observed `c₀` and `ε₀`. A survival ratio below `floors.c0` is reported
/// before an overlap below `floors.eps`.
pub fn check_assumptions(seq: &KernelSequence, floors: Floors) -> Result<AssumptionReport, ErgodicError> {
    let mut s = DVector::from_element(seq.space_size(0), 1.0);
    let mut c0_trace = Vec::with_capacity(seq.len());
    let mut eps_trace = Vec::with_capacity(seq.len());
    let mut ratio_v = None;
    let mut overlap_v = None;
    for (i, q) in seq.kernels().iter().enumerate() {
        let level = i + 1;
        s = q * s;
        let (lo, hi) = min_max_idx(&s);
        let max = s[hi];
        if !(max > 0.0) {
            return Err(ErgodicError::MassExtinction { level });
        }
        s /= max;
        let ratio = s[lo];
        c0_trace.push(ratio);
        if ratio < floors.c0 && ratio_v.is_none() {
            ratio_v = Some(Violation::SurvivalRatio {
                n: level,
                x_min: lo,
                x_max: hi,
                ratio,
            });
        }
        let mut eps = f64::INFINITY;
        let mut witness = (0, 0);
        for x in 0..q.nrows() {
            for xt in x..q.nrows() {
                let e = overlap(q, x, xt);
                if e < eps {
                    eps = e;
                    witness = (x, xt);
                }
            }
        }
        eps_trace.push(eps);
        if eps < floors.eps && overlap_v.is_none() {
            overlap_v = Some(Violation::Overlap {
                level,
                x: witness.0,
                x_tilde: witness.1,
                eps,
            });
        }
    }
    let c0 = c0_trace.iter().cloned().fold(f64::INFINITY, f64::min);
    let eps0 = eps_trace.iter().cloned().fold(f64::INFINITY, f64::min);
    Ok(AssumptionReport {
        c0,
        eps0,
        c0_trace,
        eps_trace,
        violation: ratio_v.or(overlap_v),
    })
}

/// The distributions `ν_n`, one per step.
#[derive(Debug, Clone, PartialEq)]
pub enum NuSequence {
    Constant(Vec<f64>),
    /// `ν_n = list[(n − 1) mod len]`.
    Cycle(Vec<Vec<f64>>),
    /// Independent uniformly random probability vectors.
    Random { seed: u64 },
}

impl NuSequence {
    fn materialize(&self, seq: &KernelSequence, horizon: usize) -> Vec<DVector<f64>> {
        let mut rng = match self {
            NuSequence::Random { seed } => Some(ChaCha8Rng::seed_from_u64(*seed)),
            _ => None,
        };
        (1..=horizon)
            .map(|n| {
                let k = seq.space_size(n);
                let v: Vec<f64> = match self {
                    NuSequence::Constant(v) => v.clone(),
                    NuSequence::Cycle(l) => l[(n - 1) % l.len()].clone(),
                    NuSequence::Random { .. } => {
                        let r = rng.as_mut().unwrap();
                        (0..k).map(|_| -(1.0 - r.gen::<f64>()).ln()).collect()
                    }
                };
                let mut v = DVector::from_vec(v);
                if v.len() != k {
                    v = DVector::from_element(k, f64::NAN);
                }
                let t = v.sum();
                v / t
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ErgodicDiagnostics {
    pub c0_trace: Vec<f64>,
    pub eps_trace: Vec<f64>,
    /// `ratio_trace[n−1][fi][ni]` for test function `fi` and sequence `ni`.
    pub ratio_trace: Vec<Vec<Vec<f64>>>,
    pub converged: bool,
    /// First `n` from which both the step change and the spread stay below `tol`.
    pub converged_at: Option<usize>,
    /// Final values, averaged over the `ν` sequences.
    pub c_f: Vec<f64>,
    /// Final spread across `ν` sequences, per test function.
    pub spread: Vec<f64>,
    pub assumptions: Option<Violation>,
}

impl ErgodicDiagnostics {
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "steps: {}", self.ratio_trace.len());
        let _ = writeln!(out, "converged: {}", self.converged);
        if let Some(n) = self.converged_at {
            let _ = writeln!(out, "converged_at: {n}");
        }
        let c0 = self.c0_trace.iter().cloned().fold(f64::INFINITY, f64::min);
        let e0 = self.eps_trace.iter().cloned().fold(f64::INFINITY, f64::min);
        let _ = writeln!(out, "c0: {c0}");
        let _ = writeln!(out, "eps0: {e0}");
        for (i, (c, s)) in self.c_f.iter().zip(&self.spread).enumerate() {
            let _ = writeln!(out, "C(f{i}): {c} spread={s:e}");
        }
        if let Some(v) = &self.assumptions {
            let _ = writeln!(out, "violation({}): {v:?}", v.label());
        }
        out
    }

    /// CSV with columns `n, c0, eps, f, nu, ratio`.
    pub fn write_trace_csv<W: std::io::Write>(&self, w: W) -> csv::Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        wr.write_record(["n", "c0", "eps", "f", "nu", "ratio"])?;
        for (i, per_f) in self.ratio_trace.iter().enumerate() {
            for (fi, per_nu) in per_f.iter().enumerate() {
                for (ni, r) in per_nu.iter().enumerate() {
                    wr.write_record([
                        (i + 1).to_string(),
                        self.c0_trace[i].to_string(),
                        self.eps_trace[i].to_string(),
                        fi.to_string(),
                        ni.to_string(),
                        r.to_string(),
                    ])?;
                }
            }
        }
        wr.flush()?;
        Ok(())
    }
}

/// Runs the normalized backward compositions for `n = 1..=min(horizon, len)`.
///
/// Converged means the last step changed every ratio by less than `tol` and
/// the spread across `ν` sequences is below `tol` for every `f`. Otherwise
/// `HorizonExceeded` carries the diagnostics.
pub fn normalized_limit(
    seq: &KernelSequence,
    fs: &[Vec<f64>],
    nus: &[NuSequence],
    tol: f64,
    horizon: usize,
) -> Result<ErgodicDiagnostics, ErgodicError> {
    let steps = horizon.min(seq.len());
    let k0 = seq.space_size(0);
    if fs.iter().any(|f| f.len() != k0) {
        return Err(ErgodicError::Dimension { level: 0 });
    }
    let assumptions = check_assumptions(seq, Floors::default())?;
    let nu_vecs: Vec<Vec<DVector<f64>>> = nus.iter().map(|n| n.materialize(seq, steps)).collect();
    let mut gs: Vec<DVector<f64>> = fs.iter().map(|f| DVector::from_column_slice(f)).collect();
    let mut s = DVector::from_element(k0, 1.0);
    let mut ratio_trace: Vec<Vec<Vec<f64>>> = Vec::with_capacity(steps);
    let mut converged_at = None;
    for n in 1..=steps {
        let q = seq.kernel(n);
        s = q * s;
        for g in gs.iter_mut() {
            *g = q * &*g;
        }
        let scale = s.max();
        if !(scale > 0.0) {
            return Err(ErgodicError::MassExtinction { level: n });
        }
        s /= scale;
        for g in gs.iter_mut() {
            *g /= scale;
        }
        let mut row = Vec::with_capacity(gs.len());
        for g in &gs {
            let mut per_nu = Vec::with_capacity(nus.len());
            for nv in &nu_vecs {
                let nu = &nv[n - 1];
                if nu.len() != s.len() || nu.iter().any(|v| !v.is_finite()) {
                    return Err(ErgodicError::Dimension { level: n });
                }
                let den = nu.dot(&s);
                if !(den > 0.0) {
                    return Err(ErgodicError::MassExtinction { level: n });
                }
                per_nu.push(nu.dot(g) / den);
            }
            row.push(per_nu);
        }
        let ok = ratio_trace.last().map_or(false, |prev: &Vec<Vec<f64>>| {
            row.iter().zip(prev).all(|(a, b)| {
                let step = a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
                step < tol && spread(a) < tol
            })
        });
        if ok {
            converged_at.get_or_insert(n);
        } else {
            converged_at = None;
        }
        ratio_trace.push(row);
    }
    let last = ratio_trace.last().cloned().unwrap_or_default();
    let diag = ErgodicDiagnostics {
        c0_trace: assumptions.c0_trace[..steps].to_vec(),
        eps_trace: assumptions.eps_trace[..steps].to_vec(),
        converged: converged_at.is_some(),
        converged_at,
        c_f: last.iter().map(|v| v.iter().sum::<f64>() / v.len() as f64).collect(),
        spread: last.iter().map(|v| spread(v)).collect(),
        ratio_trace,
        assumptions: assumptions.violation,
    };
    if diag.converged {
        Ok(diag)
    } else {
        Err(ErgodicError::HorizonExceeded {
            horizon: steps,
            diagnostics: Box::new(diag),
        })
    }
}

fn spread(v: &[f64]) -> f64 {
    let (lo, hi) = v
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &x| (a.min(x), b.max(x)));
    hi - lo
}

/// `ν_nᵀ Q_n ⋯ Q_1 f / ν_nᵀ Q_n ⋯ Q_1 𝟙` for one fixed `ν_n`.
pub fn backward_composition(kernels: &[DMatrix<f64>], nu: &[f64], f: &[f64]) -> Result<f64, ErgodicError> {
    let (num, den) = composed_pair(kernels, f)?;
    if num.len() != nu.len() {
        return Err(ErgodicError::Dimension { level: kernels.len() });
    }
    let nu = DVector::from_column_slice(nu);
    let d = nu.dot(&den);
    if !(d > 0.0) {
        return Err(ErgodicError::MassExtinction { level: kernels.len() });
    }
    Ok(nu.dot(&num) / d)
}

/// `(Q_n ⋯ Q_1 f, Q_n ⋯ Q_1 𝟙)` up to a common positive factor.
pub fn composed_pair(kernels: &[DMatrix<f64>], f: &[f64]) -> Result<(DVector<f64>, DVector<f64>), ErgodicError> {
    let mut g = DVector::from_column_slice(f);
    let mut s = DVector::from_element(f.len(), 1.0);
    for (i, q) in kernels.iter().enumerate() {
        if q.ncols() != s.len() {
            return Err(ErgodicError::Dimension { level: i + 1 });
        }
        g = q * g;
        s = q * s;
        let m = s.max();
        if !(m > 0.0) {
            return Err(ErgodicError::MassExtinction { level: i + 1 });
        }
        g /= m;
        s /= m;
    }
    Ok((g, s))
}

/// Law of the `E_0` state reached from `ν_n`, conditioned on survival.
pub fn hitting_distribution(kernels: &[DMatrix<f64>], nu: &[f64]) -> Result<Vec<f64>, ErgodicError> {
    let mut w = DVector::from_column_slice(nu).transpose();
    for l in (1..=kernels.len()).rev() {
        let q = &kernels[l - 1];
        if q.nrows() != w.len() {
            return Err(ErgodicError::Dimension { level: l });
        }
        w = w * q;
        let m = w.sum();
        if !(m > 0.0) {
            return Err(ErgodicError::MassExtinction { level: l });
        }
        w /= m;
    }
    Ok(w.iter().cloned().collect())
}

/// Total variation `½ Σ |a − b|`.
pub fn total_variation(a: &[f64], b: &[f64]) -> f64 {
    0.5 * a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>()
}
