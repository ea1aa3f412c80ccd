//! Samplewise evidence for the cone and Lyapunov conditions.

use std::fmt::Write as _;
use std::io;

use crate::cone::Point;

/// One evaluated margin. Nonnegative margins are satisfied.
#[derive(Debug, Clone, PartialEq)]
pub struct ReportSample {
    pub sample_id: usize,
    pub point: Point,
    pub condition: String,
    pub margin: f64,
}

impl ReportSample {
    pub fn new(sample_id: usize, point: Point, condition: &str, margin: f64) -> Self {
        ReportSample {
            sample_id,
            point,
            condition: condition.to_string(),
            margin,
        }
    }
}

/// Pass/fail evidence for one condition over a set of sampled points.
///
/// `pass` holds iff there is at least one sample, no sample errored, and
/// `worst_margin ≥ −report_tol`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditionReport {
    pub condition: String,
    pub dim: usize,
    pub samples: Vec<ReportSample>,
    pub pass: bool,
    pub worst_margin: f64,
    pub report_tol: f64,
    pub seed: u64,
    /// Largest spectral radius seen (reflection-geometry check only).
    pub max_spectral_radius: f64,
    pub warnings: Vec<String>,
    pub diagnostics: Vec<String>,
    pub metadata: Vec<(String, String)>,
}

impl ConditionReport {
    pub fn new(condition: &str, dim: usize, report_tol: f64, seed: u64) -> Self {
        ConditionReport {
            condition: condition.to_string(),
            dim,
            samples: Vec::new(),
            pass: false,
            worst_margin: f64::INFINITY,
            report_tol,
            seed,
            max_spectral_radius: 0.0,
            warnings: Vec::new(),
            diagnostics: Vec::new(),
            metadata: Vec::new(),
        }
    }

    pub fn push(&mut self, s: ReportSample) {
        self.samples.push(s);
    }

    pub fn warn(&mut self, msg: String) {
        self.warnings.push(msg);
    }

    pub fn diagnose(&mut self, msg: String) {
        self.diagnostics.push(msg);
    }

    pub fn meta(&mut self, key: &str, value: impl ToString) {
        self.metadata.push((key.to_string(), value.to_string()));
    }

    /// Recomputes `worst_margin` and `pass`.
    pub fn finish(&mut self) {
        self.worst_margin = self
            .samples
            .iter()
            .map(|s| if s.margin.is_nan() { f64::NEG_INFINITY } else { s.margin })
            .fold(f64::INFINITY, f64::min);
        if self.samples.is_empty() {
            self.diagnostics
                .push("no samples were evaluated: vacuous evidence is rejected".to_string());
        }
        self.pass = !self.samples.is_empty() && self.worst_margin >= -self.report_tol;
    }

    /// Worst margin among samples whose condition id starts with `prefix`.
    pub fn worst_for(&self, prefix: &str) -> Option<f64> {
        self.samples
            .iter()
            .filter(|s| s.condition.starts_with(prefix))
            .map(|s| s.margin)
            .reduce(f64::min)
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "condition: {}", self.condition);
        let _ = writeln!(out, "pass: {}", self.pass);
        let _ = writeln!(out, "samples: {}", self.samples.len());
        let _ = writeln!(out, "worst_margin: {:e}", self.worst_margin);
        let _ = writeln!(out, "report_tol: {:e}", self.report_tol);
        let _ = writeln!(out, "seed: {}", self.seed);
        if self.condition == "G" {
            let _ = writeln!(out, "max_spectral_radius: {:e}", self.max_spectral_radius);
        }
        let mut ids: Vec<&str> = self.samples.iter().map(|s| s.condition.as_str()).collect();
        ids.sort_unstable();
        ids.dedup();
        for id in ids {
            let w = self.worst_for(id).unwrap_or(f64::NAN);
            let n = self.samples.iter().filter(|s| s.condition == id).count();
            let _ = writeln!(out, "  {id}: n={n} worst={w:e}");
        }
        for (k, v) in &self.metadata {
            let _ = writeln!(out, "{k}: {v}");
        }
        for w in &self.warnings {
            let _ = writeln!(out, "warning: {w}");
        }
        for d in &self.diagnostics {
            let _ = writeln!(out, "diagnostic: {d}");
        }
        out
    }

    /// CSV with columns `sample_id, x1..xd, condition, margin`.
    pub fn write_csv<W: io::Write>(&self, w: W) -> csv::Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        let mut header = vec!["sample_id".to_string()];
        header.extend((1..=self.dim).map(|j| format!("x{j}")));
        header.push("condition".into());
        header.push("margin".into());
        wr.write_record(&header)?;
        for s in &self.samples {
            let mut rec = vec![s.sample_id.to_string()];
            rec.extend(s.point.0.iter().map(|v| v.to_string()));
            rec.push(s.condition.clone());
            rec.push(s.margin.to_string());
            wr.write_record(&rec)?;
        }
        wr.flush()?;
        Ok(())
    }
}
