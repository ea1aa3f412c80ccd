//! Flow-level bandwidth-sharing network under weighted α-fair allocation.
//!
//! Document sizes are exponential, so the count vector `N` is a continuous-time
//! Markov chain: route `i` sees arrivals at rate `ν_i` and departures at rate
//! `μ_i Λ_i(N)`.

use std::fmt::Write as _;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::Exp1;
use rayon::prelude::*;
use thiserror::Error;

use crate::cone::{dual_scale, ConeParams, Point};
use crate::generator::{sigma_from_rates, DiffusionParams, GeneratorError};
use crate::sim::{path_rng, simulate_path, SimConfig, SimError, StopSpec};

#[derive(Error, Debug, Clone, PartialEq)]
pub enum PrelimitError {
    #[error("capacities must be positive")]
    Infeasible,
    #[error("allocation solver did not converge (residual {residual:e})")]
    NonConvergence { residual: f64 },
    #[error("limiting rates violate A rho = C (max residual {residual:e})")]
    InconsistentLimit { residual: f64 },
    #[error("invalid topology: {0}")]
    Invalid(String),
    #[error(transparent)]
    Generator(#[from] GeneratorError),
    #[error(transparent)]
    Sim(#[from] SimError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct NetworkTopology {
    /// `d × m`, entries 0 or 1; the first `d` routes are the single-resource ones.
    pub incidence: DMatrix<f64>,
    pub capacities: Vec<f64>,
    pub weights: Vec<f64>,
    pub arrival: Vec<f64>,
    pub size_rates: Vec<f64>,
    pub alpha: f64,
}

impl NetworkTopology {
    /// `d` single-resource routes plus one route through every resource;
    /// `ν = k = 1`, unit sizes on the short routes, rate `μ` on the long one,
    /// and the critical capacities `C_j = 1 + 1/μ`.
    pub fn example(d: usize, mu: f64, alpha: f64) -> Self {
        let m = d + 1;
        let incidence = DMatrix::from_fn(d, m, |j, i| if i == j || i == d { 1.0 } else { 0.0 });
        let mut size_rates = vec![1.0; m];
        size_rates[d] = mu;
        NetworkTopology {
            incidence,
            capacities: vec![1.0 + 1.0 / mu; d],
            weights: vec![1.0; m],
            arrival: vec![1.0; m],
            size_rates,
            alpha,
        }
    }

    pub fn resources(&self) -> usize {
        self.incidence.nrows()
    }

    pub fn routes(&self) -> usize {
        self.incidence.ncols()
    }

    pub fn validate(&self) -> Result<(), PrelimitError> {
        let (d, m) = self.incidence.shape();
        if d == 0 || m < d {
            return Err(PrelimitError::Invalid("need at least as many routes as resources".into()));
        }
        if self.capacities.len() != d
            || self.weights.len() != m
            || self.arrival.len() != m
            || self.size_rates.len() != m
        {
            return Err(PrelimitError::Invalid("vector lengths do not match the incidence matrix".into()));
        }
        if self.incidence.iter().any(|&a| a != 0.0 && a != 1.0) {
            return Err(PrelimitError::Invalid("incidence entries must be 0 or 1".into()));
        }
        for j in 0..d {
            for i in 0..d {
                let want = if i == j { 1.0 } else { 0.0 };
                if self.incidence[(j, i)] != want {
                    return Err(PrelimitError::Invalid(format!(
                        "route {i} must be the dedicated route of resource {i}"
                    )));
                }
            }
        }
        if self.capacities.iter().any(|&c| !(c > 0.0)) {
            return Err(PrelimitError::Infeasible);
        }
        if self.weights.iter().chain(&self.size_rates).any(|&v| !(v > 0.0 && v.is_finite())) {
            return Err(PrelimitError::Invalid("weights and size rates must be positive".into()));
        }
        if self.arrival.iter().any(|&v| !(v >= 0.0 && v.is_finite())) {
            return Err(PrelimitError::Invalid("arrival rates must be nonnegative".into()));
        }
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return Err(PrelimitError::Invalid("alpha must be positive".into()));
        }
        Ok(())
    }

    /// `ρ_i = ν_i/μ_i`.
    pub fn load(&self) -> Vec<f64> {
        self.arrival.iter().zip(&self.size_rates).map(|(n, u)| n / u).collect()
    }

    /// `Aρ − C`.
    pub fn heavy_traffic_gap(&self) -> Vec<f64> {
        let rho = DVector::from_vec(self.load());
        let ar = &self.incidence * rho;
        ar.iter().zip(&self.capacities).map(|(a, c)| a - c).collect()
    }

    /// `d` single-resource routes plus a single route through all of them.
    pub fn is_example_shape(&self) -> bool {
        let (d, m) = self.incidence.shape();
        m == d + 1 && (0..d).all(|j| self.incidence[(j, d)] == 1.0)
    }

    /// Dispersion of the limiting diffusion.
    pub fn sigma(&self) -> Result<DMatrix<f64>, PrelimitError> {
        Ok(sigma_from_rates(&self.incidence, &self.arrival, &self.size_rates)?)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Allocation {
    pub lambda: Vec<f64>,
    /// Resource prices (Lagrange multipliers of the capacity constraints).
    pub prices: Vec<f64>,
    pub kkt_residual: f64,
}

const KKT_TOL: f64 = 1e-8;

/// Maximizer of `Σ_{i: n_i>0} k_i n_i^α Λ_i^{1−α}/(1−α)` (log reward at
/// `α = 1`) subject to `AΛ ≤ C`; idle routes get `Λ_i = 0`.
///
/// The example shape reduces to one equation in the long route's share, solved
/// by bisection. Other topologies use coordinate descent on the dual prices.
pub fn fair_allocation(n: &[f64], topo: &NetworkTopology) -> Result<Allocation, PrelimitError> {
    if topo.capacities.iter().any(|&c| !(c > 0.0)) {
        return Err(PrelimitError::Infeasible);
    }
    if n.len() != topo.routes() || n.iter().any(|&v| !(v >= 0.0)) {
        return Err(PrelimitError::Invalid("counts must be nonnegative, one per route".into()));
    }
    let (lambda, prices) = if topo.is_example_shape() {
        example_allocation(n, topo)
    } else {
        general_allocation(n, topo)?
    };
    let kkt_residual = kkt_residual(n, topo, &lambda, &prices);
    if !(kkt_residual <= KKT_TOL) {
        return Err(PrelimitError::NonConvergence { residual: kkt_residual });
    }
    Ok(Allocation {
        lambda,
        prices,
        kkt_residual,
    })
}

/// Marginal reward `k_i n_i^α Λ^{−α}`.
fn marginal(k: f64, n: f64, lambda: f64, alpha: f64) -> f64 {
    k * (n / lambda).powf(alpha)
}

fn example_allocation(n: &[f64], topo: &NetworkTopology) -> (Vec<f64>, Vec<f64>) {
    let d = topo.resources();
    let a = topo.alpha;
    let c = &topo.capacities;
    let k = &topo.weights;
    let mut lambda = vec![0.0; d + 1];
    let mut prices = vec![0.0; d];
    let nl = n[d];
    if nl == 0.0 {
        for j in 0..d {
            if n[j] > 0.0 {
                lambda[j] = c[j];
                prices[j] = marginal(k[j], n[j], c[j], a);
            }
        }
        return (lambda, prices);
    }
    let busy: Vec<usize> = (0..d).filter(|&j| n[j] > 0.0).collect();
    let idle_cap = (0..d)
        .filter(|&j| n[j] == 0.0)
        .map(|j| c[j])
        .fold(f64::INFINITY, f64::min);
    let busy_cap = busy.iter().map(|&j| c[j]).fold(f64::INFINITY, f64::min);
    let h = |l: f64| -> f64 {
        marginal(k[d], nl, l, a) - busy.iter().map(|&j| marginal(k[j], n[j], c[j] - l, a)).sum::<f64>()
    };
    let share = if busy.is_empty() {
        idle_cap
    } else {
        let (mut lo, mut hi) = (0.0, busy_cap);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if mid <= lo || mid >= hi {
                break;
            }
            if h(mid) > 0.0 {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        (0.5 * (lo + hi)).min(idle_cap)
    };
    lambda[d] = share;
    for &j in &busy {
        lambda[j] = c[j] - share;
        prices[j] = marginal(k[j], n[j], lambda[j], a);
    }
    let gap = marginal(k[d], nl, share, a) - busy.iter().map(|&j| prices[j]).sum::<f64>();
    if gap > 0.0 {
        // the long route is capped by an idle resource, which takes the remaining price
        if let Some(j0) = (0..d).filter(|&j| n[j] == 0.0).find(|&j| c[j] == idle_cap) {
            prices[j0] = gap;
        }
    }
    (lambda, prices)
}

fn lambda_from_prices(n: &[f64], topo: &NetworkTopology, p: &[f64]) -> Vec<f64> {
    let a = topo.alpha;
    (0..topo.routes())
        .map(|i| {
            if n[i] == 0.0 {
                return 0.0;
            }
            let y: f64 = (0..topo.resources()).map(|j| topo.incidence[(j, i)] * p[j]).sum();
            if y > 0.0 {
                n[i] * (topo.weights[i] / y).powf(1.0 / a)
            } else {
                f64::INFINITY
            }
        })
        .collect()
}

fn load_on(j: usize, topo: &NetworkTopology, lambda: &[f64]) -> f64 {
    (0..topo.routes())
        .filter(|&i| topo.incidence[(j, i)] > 0.0 && lambda[i] > 0.0)
        .map(|i| lambda[i])
        .sum()
}

/// Dual coordinate descent for an arbitrary topology, returning `(Λ, p)`.
/// `fair_allocation` uses it for everything but the example shape.
pub fn general_allocation(n: &[f64], topo: &NetworkTopology) -> Result<(Vec<f64>, Vec<f64>), PrelimitError> {
    let d = topo.resources();
    let m = topo.routes();
    let used: Vec<usize> = (0..d)
        .filter(|&j| (0..m).any(|i| n[i] > 0.0 && topo.incidence[(j, i)] > 0.0))
        .collect();
    let mut p = vec![0.0; d];
    for &j in &used {
        p[j] = 1.0;
    }
    if used.is_empty() {
        return Ok((vec![0.0; m], p));
    }
    let excess = |j: usize, pj: f64, p: &mut Vec<f64>| -> f64 {
        p[j] = pj;
        let l = lambda_from_prices(n, topo, p);
        load_on(j, topo, &l) - topo.capacities[j]
    };
    const SWEEPS: usize = 20_000;
    let mut residual = f64::INFINITY;
    for _ in 0..SWEEPS {
        for &j in &used {
            let mut q = p.clone();
            if excess(j, 0.0, &mut q) <= 0.0 {
                p[j] = 0.0;
                continue;
            }
            let mut hi = p[j].max(f64::MIN_POSITIVE * 1e10);
            while excess(j, hi, &mut q) > 0.0 {
                hi *= 2.0;
            }
            let mut lo = hi;
            while lo > 1e-300 && excess(j, lo, &mut q) <= 0.0 {
                lo *= 0.5;
            }
            if lo <= 1e-300 {
                lo = 0.0;
            }
            for _ in 0..200 {
                let mid = 0.5 * (lo + hi);
                if mid <= lo || mid >= hi {
                    break;
                }
                if excess(j, mid, &mut q) > 0.0 {
                    lo = mid;
                } else {
                    hi = mid;
                }
            }
            p[j] = hi;
        }
        let l = lambda_from_prices(n, topo, &p);
        residual = kkt_residual(n, topo, &l, &p);
        if residual <= 1e-12 {
            break;
        }
    }
    if !(residual <= KKT_TOL) {
        return Err(PrelimitError::NonConvergence { residual });
    }
    Ok((lambda_from_prices(n, topo, &p), p))
}

/// Largest relative violation among stationarity, primal feasibility,
/// nonnegativity and complementary slackness.
pub fn kkt_residual(n: &[f64], topo: &NetworkTopology, lambda: &[f64], prices: &[f64]) -> f64 {
    let d = topo.resources();
    let m = topo.routes();
    let mut r: f64 = 0.0;
    for i in 0..m {
        if n[i] == 0.0 {
            if lambda[i] != 0.0 {
                r = r.max(1.0);
            }
            continue;
        }
        if !(lambda[i] > 0.0 && lambda[i].is_finite()) {
            return f64::INFINITY;
        }
        let u = marginal(topo.weights[i], n[i], lambda[i], topo.alpha);
        let y: f64 = (0..d).map(|j| topo.incidence[(j, i)] * prices[j]).sum();
        r = r.max((u - y).abs() / u);
    }
    let pmax = prices.iter().cloned().fold(0.0, f64::max);
    for j in 0..d {
        if prices[j] < 0.0 {
            return f64::INFINITY;
        }
        let slack = (topo.capacities[j] - load_on(j, topo, lambda)) / topo.capacities[j];
        r = r.max((-slack).max(0.0));
        if pmax > 0.0 {
            r = r.max((prices[j] / pmax).min(slack.abs()));
        }
    }
    r
}

/// Rates at scaling parameter `r` with `r(Aρ^r − C) = b`: the short routes
/// get `ν_j + μ_j b_j / r`, everything else is unchanged.
pub fn heavy_traffic_config(topo: &NetworkTopology, r: f64, b: &[f64], htol: f64) -> Result<NetworkTopology, PrelimitError> {
    topo.validate()?;
    let gap = topo.heavy_traffic_gap();
    let residual = gap.iter().fold(0.0f64, |m, g| m.max(g.abs()));
    if residual > htol {
        return Err(PrelimitError::InconsistentLimit { residual });
    }
    if b.len() != topo.resources() || !(r > 0.0) {
        return Err(PrelimitError::Invalid("need r > 0 and one drift entry per resource".into()));
    }
    let mut out = topo.clone();
    for j in 0..topo.resources() {
        out.arrival[j] = topo.arrival[j] + topo.size_rates[j] * b[j] / r;
        if !(out.arrival[j] > 0.0) {
            return Err(PrelimitError::Invalid(format!(
                "drift makes the arrival rate of route {j} nonpositive at r = {r}"
            )));
        }
    }
    Ok(out)
}

/// `r(Aρ^r − C)`, computed from the rates as stored.
pub fn scaled_gap(topo_r: &NetworkTopology, limit: &NetworkTopology, r: f64) -> Vec<f64> {
    let d = topo_r.resources();
    (0..d)
        .map(|j| {
            // difference of loads first, so the identity survives cancellation
            let dl: f64 = (0..topo_r.routes())
                .map(|i| topo_r.incidence[(j, i)] * (topo_r.arrival[i] - limit.arrival[i]) / topo_r.size_rates[i])
                .sum();
            r * (dl + (limit.heavy_traffic_gap()[j]))
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct CtmcPath {
    /// Jump times, when kept.
    pub jump_times: Vec<f64>,
    /// `N` at each grid time.
    pub samples: Vec<Vec<u64>>,
    pub grid: Vec<f64>,
    /// `(1/T) ∫ N_i dt`.
    pub time_average: Vec<f64>,
    pub arrivals: Vec<u64>,
    pub departures: Vec<u64>,
    pub events: usize,
    pub end_time: f64,
    pub end_state: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CtmcSettings {
    pub t_end: f64,
    pub max_events: usize,
    /// Sample times, increasing.
    pub grid: Vec<f64>,
    pub keep_jumps: bool,
}

/// Event-driven simulation of the count process from `n0`.
pub fn ctmc_simulate<R: Rng + ?Sized>(
    topo: &NetworkTopology,
    n0: &[u64],
    s: &CtmcSettings,
    rng: &mut R,
) -> Result<CtmcPath, PrelimitError> {
    topo.validate()?;
    let m = topo.routes();
    if n0.len() != m {
        return Err(PrelimitError::Invalid("initial state has the wrong length".into()));
    }
    let mut n = n0.to_vec();
    let mut t = 0.0;
    let mut out = CtmcPath {
        jump_times: Vec::new(),
        samples: Vec::with_capacity(s.grid.len()),
        grid: s.grid.clone(),
        time_average: vec![0.0; m],
        arrivals: vec![0; m],
        departures: vec![0; m],
        events: 0,
        end_time: 0.0,
        end_state: Vec::new(),
    };
    let mut next_sample = 0;
    let mut rates = vec![0.0; 2 * m];
    loop {
        let nf: Vec<f64> = n.iter().map(|&v| v as f64).collect();
        let alloc = fair_allocation(&nf, topo)?;
        for i in 0..m {
            rates[i] = topo.arrival[i];
            rates[m + i] = if n[i] > 0 { topo.size_rates[i] * alloc.lambda[i] } else { 0.0 };
        }
        let total: f64 = rates.iter().sum();
        let hold = if total > 0.0 {
            rng.sample::<f64, _>(Exp1) / total
        } else {
            f64::INFINITY
        };
        let t_next = t + hold;
        let capped = out.events >= s.max_events;
        let horizon_hit = t_next >= s.t_end || capped;
        // an event cap ends the run at the last jump
        let seg_end = if capped { t } else { t_next.min(s.t_end) };
        while next_sample < s.grid.len() && s.grid[next_sample] <= seg_end {
            out.samples.push(n.clone());
            next_sample += 1;
        }
        for i in 0..m {
            out.time_average[i] += nf[i] * (seg_end - t);
        }
        if horizon_hit {
            t = seg_end;
            break;
        }
        t = t_next;
        let mut u = rng.gen::<f64>() * total;
        let mut ev = 2 * m - 1;
        for (e, &r) in rates.iter().enumerate() {
            if u < r {
                ev = e;
                break;
            }
            u -= r;
        }
        while rates[ev] == 0.0 {
            ev -= 1;
        }
        if ev < m {
            n[ev] += 1;
            out.arrivals[ev] += 1;
        } else {
            n[ev - m] -= 1;
            out.departures[ev - m] += 1;
        }
        out.events += 1;
        if s.keep_jumps {
            out.jump_times.push(t);
        }
    }
    if t > 0.0 {
        for v in out.time_average.iter_mut() {
            *v /= t;
        }
    }
    out.end_time = t;
    out.end_state = n;
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScaledWorkloadPath {
    pub r: f64,
    pub times: Vec<f64>,
    pub values: Vec<Vec<f64>>,
}

/// `X^r(t) = r⁻¹ A (M^r)⁻¹ N^r(r²t)` for counts sampled at `r²t`.
pub fn scaled_workload(topo: &NetworkTopology, r: f64, times: &[f64], counts: &[Vec<u64>]) -> ScaledWorkloadPath {
    let d = topo.resources();
    let values = counts
        .iter()
        .map(|n| {
            (0..d)
                .map(|j| {
                    (0..topo.routes())
                        .map(|i| topo.incidence[(j, i)] * n[i] as f64 / topo.size_rates[i])
                        .sum::<f64>()
                        / r
                })
                .collect()
        })
        .collect();
    ScaledWorkloadPath {
        r,
        times: times[..counts.len()].to_vec(),
        values,
    }
}

/// Signed cone margin `min_j(x_j − s/μ²)/|x|∞`; negative outside.
pub fn cone_margin(x: &[f64], p: &ConeParams) -> f64 {
    let scale = x.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if scale == 0.0 {
        return 0.0;
    }
    match dual_scale(x, p) {
        Ok(s) => x.iter().map(|v| v - s / p.mu2()).fold(f64::INFINITY, f64::min) / scale,
        Err(_) => f64::NAN,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CompareSettings {
    pub r_list: Vec<f64>,
    pub drift: Vec<f64>,
    pub t_end: f64,
    pub grid_points: usize,
    pub replications: usize,
    pub seed: u64,
    /// Radius for the first-hit statistic.
    pub delta: f64,
    /// Width of the boundary collar, on the scale of [`cone_margin`].
    pub collar: f64,
    pub max_events: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StatRow {
    pub source: String,
    pub statistic: String,
    pub value: f64,
    pub stderr: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CompareReport {
    pub rows: Vec<StatRow>,
    /// Statistic name and whether its prelimit values move monotonically in `r`.
    pub trends: Vec<(String, bool)>,
    /// Worst cone margin seen for each `r`.
    pub membership: Vec<(f64, f64)>,
}

impl CompareReport {
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "comparison of prelimit statistics with the reflected diffusion (not asserted)");
        for r in &self.rows {
            let _ = writeln!(out, "{} {}: {} +- {}", r.source, r.statistic, r.value, r.stderr);
        }
        for (s, m) in &self.trends {
            let _ = writeln!(out, "trend {s}: monotone={m}");
        }
        for (r, m) in &self.membership {
            let _ = writeln!(out, "worst cone margin r={r}: {m}");
        }
        out
    }

    /// CSV with columns `source, statistic, value, stderr`.
    pub fn write_csv<W: std::io::Write>(&self, w: W) -> csv::Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        wr.write_record(["source", "statistic", "value", "stderr"])?;
        for r in &self.rows {
            wr.write_record([r.source.clone(), r.statistic.clone(), r.value.to_string(), r.stderr.to_string()])?;
        }
        wr.flush()?;
        Ok(())
    }
}

struct PathStats {
    final_x: Vec<f64>,
    hit: bool,
    collar: f64,
    worst_margin: f64,
}

fn stats_of(values: &[Vec<f64>], delta: f64, collar: f64, p: &ConeParams) -> PathStats {
    let mut hit = false;
    let mut near = 0usize;
    let mut worst = f64::INFINITY;
    for x in values {
        let r: f64 = x.iter().map(|v| v * v).sum::<f64>().sqrt();
        if r >= delta {
            hit = true;
        }
        let m = cone_margin(x, p);
        if r > 0.0 {
            worst = worst.min(m);
            if m < collar {
                near += 1;
            }
        }
    }
    PathStats {
        final_x: values.last().cloned().unwrap_or_default(),
        hit,
        collar: near as f64 / values.len().max(1) as f64,
        worst_margin: worst,
    }
}

fn mean_se(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    let v = xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0).max(1.0);
    (m, (v / n).sqrt())
}

fn summarize(source: &str, stats: &[PathStats], d: usize, rows: &mut Vec<StatRow>) {
    for j in 0..d {
        let xs: Vec<f64> = stats.iter().map(|s| s.final_x.get(j).copied().unwrap_or(f64::NAN)).collect();
        let (m, se) = mean_se(&xs);
        rows.push(StatRow {
            source: source.into(),
            statistic: format!("mean_x{}_at_T", j + 1),
            value: m,
            stderr: se,
        });
    }
    let hits: Vec<f64> = stats.iter().map(|s| if s.hit { 1.0 } else { 0.0 }).collect();
    let (m, se) = mean_se(&hits);
    rows.push(StatRow {
        source: source.into(),
        statistic: "hit_fraction".into(),
        value: m,
        stderr: se,
    });
    let coll: Vec<f64> = stats.iter().map(|s| s.collar).collect();
    let (m, se) = mean_se(&coll);
    rows.push(StatRow {
        source: source.into(),
        statistic: "collar_occupation".into(),
        value: m,
        stderr: se,
    });
}

/// Tabulates prelimit statistics for each `r` next to the same statistics of
/// the reflected diffusion started at the vertex. Nothing is asserted.
pub fn scaled_workload_compare(
    topo: &NetworkTopology,
    cs: &CompareSettings,
    cfg: &SimConfig,
) -> Result<CompareReport, PrelimitError> {
    topo.validate()?;
    if !topo.is_example_shape() {
        return Err(PrelimitError::Invalid("comparison needs the single long-route topology".into()));
    }
    if cs.replications < 2 || cs.grid_points < 2 || !(cs.t_end > 0.0) {
        return Err(PrelimitError::Invalid("need >= 2 replications, >= 2 grid points, T > 0".into()));
    }
    let d = topo.resources();
    let mu_long = topo.size_rates[d];
    let p = ConeParams::new(d, topo.alpha.max(1.0), mu_long).map_err(|e| PrelimitError::Invalid(e.to_string()))?;
    let grid: Vec<f64> = (0..cs.grid_points)
        .map(|k| cs.t_end * k as f64 / (cs.grid_points - 1) as f64)
        .collect();
    let mut rows = Vec::new();
    let mut membership = Vec::new();
    for (ri, &r) in cs.r_list.iter().enumerate() {
        let tr = heavy_traffic_config(topo, r, &cs.drift, 1e-9)?;
        let settings = CtmcSettings {
            t_end: r * r * cs.t_end,
            max_events: cs.max_events,
            grid: grid.iter().map(|t| r * r * t).collect(),
            keep_jumps: false,
        };
        let stats = (0..cs.replications)
            .into_par_iter()
            .map(|k| {
                let mut rng = path_rng(cs.seed, ((ri as u64) << 32) | k as u64);
                let path = ctmc_simulate(&tr, &vec![0; tr.routes()], &settings, &mut rng)?;
                let x = scaled_workload(&tr, r, &grid, &path.samples);
                Ok(stats_of(&x.values, cs.delta, cs.collar, &p))
            })
            .collect::<Result<Vec<_>, PrelimitError>>()?;
        summarize(&format!("prelimit_r{r}"), &stats, d, &mut rows);
        membership.push((r, stats.iter().map(|s| s.worst_margin).fold(f64::INFINITY, f64::min)));
    }
    let dp = DiffusionParams::new(cs.drift.clone(), topo.sigma()?)?;
    let dt = cs.t_end / (cs.grid_points - 1) as f64;
    let sim_cfg = SimConfig {
        record_path: true,
        dt_max: cfg.dt_max.min(dt),
        dt_rule: crate::sim::DtRule::Fixed,
        ..cfg.clone()
    };
    let stop = StopSpec {
        radii: Vec::new(),
        kill_at_origin: false,
        t_max: cs.t_end,
        occupation_radii: Vec::new(),
    };
    let stats = (0..cs.replications)
        .into_par_iter()
        .map(|k| {
            let mut rng = path_rng(cs.seed ^ 0x0E8B, k as u64);
            let rec = simulate_path(&Point::zeros(d), &stop, &sim_cfg, &p, &dp, &mut rng)?;
            // sample the recorded path on the grid
            let mut vals = Vec::with_capacity(grid.len());
            let mut idx = 0;
            for &t in &grid {
                while idx + 1 < rec.times.len() && rec.times[idx + 1] <= t + 1e-12 * cs.t_end {
                    idx += 1;
                }
                vals.push(rec.states[idx].0.clone());
            }
            Ok(stats_of(&vals, cs.delta, cs.collar, &p))
        })
        .collect::<Result<Vec<_>, PrelimitError>>()?;
    summarize("orbm", &stats, d, &mut rows);
    let mut trends = Vec::new();
    let names: Vec<String> = rows
        .iter()
        .filter(|r| r.source == "orbm")
        .map(|r| r.statistic.clone())
        .collect();
    for name in names {
        let seq: Vec<f64> = cs
            .r_list
            .iter()
            .filter_map(|r| {
                rows.iter()
                    .find(|x| x.source == format!("prelimit_r{r}") && x.statistic == name)
                    .map(|x| x.value)
            })
            .collect();
        let up = seq.windows(2).all(|w| w[1] >= w[0]);
        let down = seq.windows(2).all(|w| w[1] <= w[0]);
        trends.push((name, up || down));
    }
    Ok(CompareReport {
        rows,
        trends,
        membership,
    })
}

/// One resource with one route: an `M/M/1` queue in the count.
pub fn single_route_topology(arrival: f64, size_rate: f64, capacity: f64) -> NetworkTopology {
    NetworkTopology {
        incidence: DMatrix::from_element(1, 1, 1.0),
        capacities: vec![capacity],
        weights: vec![1.0],
        arrival: vec![arrival],
        size_rates: vec![size_rate],
        alpha: 2.0,
    }
}
