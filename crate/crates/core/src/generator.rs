//! The diffusion generator, the covariance data of the bandwidth-sharing
//! example, and samplewise checks of the Lyapunov conditions.
//!
//! For the example network with `d` resources, `σ = 2(I + μ⁻² 𝟙𝟙ᵀ)`. Its top
//! eigenvalue is `2K` with `K = 1 + d/μ²` (eigenvector `𝟙`), the other `d − 1`
//! eigenvalues are `2`, so
//!
//! ```text
//! tr(σσᵀ) = 4((d − 1) + K²),   |σᵀx|² ≤ 4K²|x|²,
//! c_V = 2(d − 1) + 2(β − 1)K²,   β_min = 1 − (d − 1)/K².
//! ```
//!
//! With `d = 3` these are the familiar `4(2 + (1 + 3/μ²)²)`,
//! `4 + 2(β − 1)(1 + 3/μ²)²` and `1 − 2/(1 + 3/μ²)²`.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::cone::{dot, embed, face_combinations, norm, ConeParams, Point, QCoords};
use crate::report::{ConditionReport, ReportSample};

#[derive(Error, Debug, Clone, PartialEq)]
pub enum GeneratorError {
    #[error("incidence matrix has rank {rank}, expected {expected}")]
    RankDeficient { rank: usize, expected: usize },
    #[error("beta = {beta} lies outside the admissible window ({beta_min}, 0)")]
    BetaOutOfWindow { beta: f64, beta_min: f64 },
    #[error("invalid diffusion data: {0}")]
    Invalid(String),
}

/// Drift and dispersion of the reflected diffusion.
#[derive(Debug, Clone, PartialEq)]
pub struct DiffusionParams {
    pub drift: Vec<f64>,
    pub sigma: DMatrix<f64>,
}

impl DiffusionParams {
    pub fn new(drift: Vec<f64>, sigma: DMatrix<f64>) -> Result<Self, GeneratorError> {
        if !sigma.is_square() || sigma.nrows() != drift.len() {
            return Err(GeneratorError::Invalid(format!(
                "sigma is {}x{}, drift has length {}",
                sigma.nrows(),
                sigma.ncols(),
                drift.len()
            )));
        }
        if sigma.iter().chain(drift.iter()).any(|v| !v.is_finite()) {
            return Err(GeneratorError::Invalid("non-finite entries".into()));
        }
        if sigma.clone().try_inverse().is_none() {
            return Err(GeneratorError::Invalid("sigma is singular".into()));
        }
        Ok(DiffusionParams { drift, sigma })
    }

    /// Example network, drift `b`.
    pub fn example(d: usize, mu: f64, drift: Vec<f64>) -> Result<Self, GeneratorError> {
        if drift.len() != d {
            return Err(GeneratorError::Invalid(format!("drift must have length {d}")));
        }
        Self::new(drift, example_sigma(d, mu))
    }

    pub fn dim(&self) -> usize {
        self.drift.len()
    }

    /// `σσᵀ`.
    pub fn covariance(&self) -> DMatrix<f64> {
        &self.sigma * self.sigma.transpose()
    }

    pub fn drift_norm(&self) -> f64 {
        norm(&self.drift)
    }

    pub fn has_zero_drift(&self) -> bool {
        self.drift.iter().all(|&b| b == 0.0)
    }

    /// 2-norm condition number of `σ`.
    pub fn condition_number(&self) -> f64 {
        let sv = self.sigma.singular_values();
        let max = sv.iter().cloned().fold(0.0, f64::max);
        let min = sv.iter().cloned().fold(f64::INFINITY, f64::min);
        max / min
    }

    /// `|σᵀv|²`.
    pub fn sigma_t_norm2(&self, v: &[f64]) -> f64 {
        let v = DVector::from_column_slice(v);
        (self.sigma.transpose() * v).norm_squared()
    }
}

/// `σ = 2 A M⁻¹ diag(ν) M⁻¹ Aᵀ` for incidence `A` (d×m), arrival rates `ν`
/// and size rates `μ`.
pub fn sigma_from_rates(
    incidence: &DMatrix<f64>,
    arrival: &[f64],
    size_rates: &[f64],
) -> Result<DMatrix<f64>, GeneratorError> {
    let (d, m) = incidence.shape();
    if arrival.len() != m || size_rates.len() != m {
        return Err(GeneratorError::Invalid(format!(
            "expected {m} route rates, got {} arrival and {} size rates",
            arrival.len(),
            size_rates.len()
        )));
    }
    if arrival.iter().chain(size_rates).any(|&v| !(v > 0.0)) {
        return Err(GeneratorError::Invalid("rates must be positive".into()));
    }
    let rank = incidence.rank(1e-10);
    if rank < d {
        return Err(GeneratorError::RankDeficient { rank, expected: d });
    }
    let w = DMatrix::from_diagonal(&DVector::from_iterator(
        m,
        arrival.iter().zip(size_rates).map(|(n, u)| n / (u * u)),
    ));
    Ok(incidence * w * incidence.transpose() * 2.0)
}

/// `σ` of the example: diagonal `2(1 + μ⁻²)`, off-diagonal `2μ⁻²`.
pub fn example_sigma(d: usize, mu: f64) -> DMatrix<f64> {
    let c = 1.0 / (mu * mu);
    DMatrix::from_fn(d, d, |i, j| 2.0 * (c + if i == j { 1.0 } else { 0.0 }))
}

/// `K = 1 + d/μ²`.
pub fn top_eigen_factor(d: usize, mu: f64) -> f64 {
    1.0 + d as f64 / (mu * mu)
}

/// Closed form `tr(σσᵀ) = 4((d − 1) + K²)` of the example.
pub fn example_trace(d: usize, mu: f64) -> f64 {
    let k = top_eigen_factor(d, mu);
    4.0 * ((d as f64 - 1.0) + k * k)
}

/// A twice-differentiable scalar field. Gradient and Hessian default to
/// central differences.
pub trait ScalarField: Send + Sync {
    fn value(&self, x: &[f64]) -> f64;

    fn gradient(&self, x: &[f64]) -> Vec<f64> {
        fd_gradient(self, x)
    }

    fn hessian(&self, x: &[f64]) -> DMatrix<f64> {
        fd_hessian(self, x)
    }

    /// True when gradient and Hessian are exact formulas.
    fn is_analytic(&self) -> bool {
        false
    }
}

fn fd_scale(x: &[f64]) -> f64 {
    let n = norm(x);
    if n > 0.0 {
        n
    } else {
        1.0
    }
}

/// Central-difference gradient, step `ε^{1/3}·|x|`.
pub fn fd_gradient<F: ScalarField + ?Sized>(f: &F, x: &[f64]) -> Vec<f64> {
    let h = f64::EPSILON.cbrt() * fd_scale(x);
    let mut y = x.to_vec();
    (0..x.len())
        .map(|i| {
            y[i] = x[i] + h;
            let fp = f.value(&y);
            y[i] = x[i] - h;
            let fm = f.value(&y);
            y[i] = x[i];
            (fp - fm) / (2.0 * h)
        })
        .collect()
}

/// Central-difference Hessian, step `ε^{1/4}·|x|`.
pub fn fd_hessian<F: ScalarField + ?Sized>(f: &F, x: &[f64]) -> DMatrix<f64> {
    let d = x.len();
    let h = f64::EPSILON.powf(0.25) * fd_scale(x);
    let mut y = x.to_vec();
    let mut eval = |di: (usize, f64), dj: (usize, f64)| {
        y.copy_from_slice(x);
        y[di.0] += di.1;
        y[dj.0] += dj.1;
        f.value(&y)
    };
    let mut hm = DMatrix::zeros(d, d);
    for i in 0..d {
        for j in i..d {
            let v = (eval((i, h), (j, h)) - eval((i, h), (j, -h)) - eval((i, -h), (j, h)) + eval((i, -h), (j, -h)))
                / (4.0 * h * h);
            hm[(i, j)] = v;
            hm[(j, i)] = v;
        }
    }
    hm
}

/// `V(x) = |x|^β`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PowerLaw {
    pub beta: f64,
}

impl ScalarField for PowerLaw {
    fn value(&self, x: &[f64]) -> f64 {
        norm(x).powf(self.beta)
    }

    fn gradient(&self, x: &[f64]) -> Vec<f64> {
        let r = norm(x);
        let c = self.beta * r.powf(self.beta - 2.0);
        x.iter().map(|v| c * v).collect()
    }

    fn hessian(&self, x: &[f64]) -> DMatrix<f64> {
        let d = x.len();
        let r2: f64 = x.iter().map(|v| v * v).sum();
        let c = self.beta * r2.powf(0.5 * self.beta - 1.0);
        DMatrix::from_fn(d, d, |i, j| {
            c * ((if i == j { 1.0 } else { 0.0 }) + (self.beta - 2.0) * x[i] * x[j] / r2)
        })
    }

    fn is_analytic(&self) -> bool {
        true
    }
}

/// `f(x) = ½(e·x)²`.
#[derive(Debug, Clone, PartialEq)]
pub struct QuadraticProjection {
    pub e: Vec<f64>,
}

impl QuadraticProjection {
    /// `e = (1,…,1)/√d`.
    pub fn diagonal(d: usize) -> Self {
        QuadraticProjection {
            e: vec![1.0 / (d as f64).sqrt(); d],
        }
    }
}

impl ScalarField for QuadraticProjection {
    fn value(&self, x: &[f64]) -> f64 {
        0.5 * dot(&self.e, x).powi(2)
    }

    fn gradient(&self, x: &[f64]) -> Vec<f64> {
        let s = dot(&self.e, x);
        self.e.iter().map(|v| s * v).collect()
    }

    fn hessian(&self, _x: &[f64]) -> DMatrix<f64> {
        let d = self.e.len();
        DMatrix::from_fn(d, d, |i, j| self.e[i] * self.e[j])
    }

    fn is_analytic(&self) -> bool {
        true
    }
}

/// `f(x) = c·x + c₀`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub coef: Vec<f64>,
    pub offset: f64,
}

impl ScalarField for Linear {
    fn value(&self, x: &[f64]) -> f64 {
        dot(&self.coef, x) + self.offset
    }

    fn gradient(&self, _x: &[f64]) -> Vec<f64> {
        self.coef.clone()
    }

    fn hessian(&self, x: &[f64]) -> DMatrix<f64> {
        DMatrix::zeros(x.len(), x.len())
    }

    fn is_analytic(&self) -> bool {
        true
    }
}

/// Scalar field from a closure; derivatives by finite differences.
pub struct FnField<F>(pub F);

impl<F: Fn(&[f64]) -> f64 + Send + Sync> ScalarField for FnField<F> {
    fn value(&self, x: &[f64]) -> f64 {
        (self.0)(x)
    }
}

/// `𝔸f(x) = b·∇f(x) + ½ tr(σσᵀ D²f(x))`.
pub fn apply_generator<F: ScalarField + ?Sized>(f: &F, x: &[f64], dp: &DiffusionParams) -> f64 {
    let grad = f.gradient(x);
    let hess = f.hessian(x);
    let cov = dp.covariance();
    dot(&dp.drift, &grad) + 0.5 * cov.component_mul(&hess).sum()
}

/// `𝔸|x|^β = β|x|^{β−2}{b·x + ½tr(σσᵀ) + ½(β−2)|σᵀx|²/|x|²}`.
pub fn power_law_generator(beta: f64, x: &[f64], dp: &DiffusionParams) -> f64 {
    let r2: f64 = x.iter().map(|v| v * v).sum();
    let tr = dp.covariance().trace();
    beta * r2.powf(0.5 * beta - 1.0)
        * (dot(&dp.drift, x) + 0.5 * tr + 0.5 * (beta - 2.0) * dp.sigma_t_norm2(x) / r2)
}

/// Admissible exponents of `V = |x|^β`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum BetaWindow {
    /// `(beta_min, 0)` with `beta_min < 0`.
    Open { beta_min: f64 },
    /// `beta_min ≥ 0`: no admissible exponent.
    Empty { beta_min: f64 },
}

impl BetaWindow {
    pub fn beta_min(&self) -> f64 {
        match *self {
            BetaWindow::Open { beta_min } | BetaWindow::Empty { beta_min } => beta_min,
        }
    }

    pub fn is_empty(&self) -> bool {
        matches!(self, BetaWindow::Empty { .. })
    }

    pub fn contains(&self, beta: f64) -> bool {
        match *self {
            BetaWindow::Open { beta_min } => beta > beta_min && beta < 0.0,
            BetaWindow::Empty { .. } => false,
        }
    }
}

/// `β_min = 1 − (d − 1)/K²`.
pub fn beta_min(d: usize, mu: f64) -> f64 {
    let k = top_eigen_factor(d, mu);
    1.0 - (d as f64 - 1.0) / (k * k)
}

pub fn beta_window(d: usize, mu: f64) -> BetaWindow {
    let beta_min = beta_min(d, mu);
    if beta_min < 0.0 {
        BetaWindow::Open { beta_min }
    } else {
        BetaWindow::Empty { beta_min }
    }
}

/// The rate above which the window is nonempty: `√(d/(√(d−1) − 1))`.
/// For `d = 2` the window is always empty.
pub fn mu_threshold(d: usize) -> Option<f64> {
    let r = (d as f64 - 1.0).sqrt() - 1.0;
    (r > 0.0).then(|| (d as f64 / r).sqrt())
}

/// `c_V = 2(d − 1) + 2(β − 1)K²`, without window checks.
pub fn c_v(d: usize, mu: f64, beta: f64) -> f64 {
    let k = top_eigen_factor(d, mu);
    2.0 * (d as f64 - 1.0) + 2.0 * (beta - 1.0) * k * k
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LyapunovConstants {
    pub beta: f64,
    pub c_v: f64,
}

impl LyapunovConstants {
    /// `𝔸V ≤ 0` holds on `𝒲̄ − {0}` for `|x| ≤ c_V/(|b| + 1)`.
    pub fn validity_radius(&self, drift_norm: f64) -> f64 {
        self.c_v / (drift_norm + 1.0)
    }
}

pub fn lyapunov_constants(d: usize, mu: f64, beta: f64) -> Result<LyapunovConstants, GeneratorError> {
    let w = beta_window(d, mu);
    if !w.contains(beta) {
        return Err(GeneratorError::BetaOutOfWindow {
            beta,
            beta_min: w.beta_min(),
        });
    }
    Ok(LyapunovConstants {
        beta,
        c_v: c_v(d, mu, beta),
    })
}

/// Candidate Lyapunov data.
#[derive(Clone)]
pub enum LyapunovKind {
    /// `V = |x|^β`, the blow-up case.
    PowerLaw { beta: f64 },
    /// A pair `V₊, V₋` vanishing at the vertex.
    UserPair {
        v_plus: Arc<dyn ScalarField>,
        v_minus: Arc<dyn ScalarField>,
    },
}

#[derive(Clone)]
pub struct LyapunovSpec {
    pub kind: LyapunovKind,
    /// Radius of validity `δ_𝒲`.
    pub delta_w: f64,
}

/// Points used by [`check_auxfunc`]: a log-uniform radial grid on
/// `[δ_𝒲·min_radius_ratio, δ_𝒲]` times random cone directions, plus every face
/// combination at every radius.
#[derive(Debug, Clone)]
pub struct AuxSampler {
    pub radial_points: usize,
    pub directions_per_radius: usize,
    pub boundary_per_combination: usize,
    pub min_radius_ratio: f64,
    /// Radius slices for the uniform ratio infima of the pair case.
    pub radius_slices: usize,
    pub seed: u64,
}

impl Default for AuxSampler {
    fn default() -> Self {
        AuxSampler {
            radial_points: 16,
            directions_per_radius: 16,
            boundary_per_combination: 4,
            min_radius_ratio: 1e-4,
            radius_slices: 32,
            seed: 0,
        }
    }
}

struct AuxPoint {
    x: Vec<f64>,
    faces: Vec<usize>,
}

fn random_direction_q(rng: &mut ChaCha8Rng, d: usize, zero: &[usize]) -> Vec<f64> {
    (0..d)
        .map(|j| {
            if zero.contains(&j) {
                0.0
            } else {
                -(1.0 - rng.gen::<f64>()).ln()
            }
        })
        .collect()
}

fn at_radius(q: Vec<f64>, r: f64, p: &ConeParams) -> Vec<f64> {
    let x = embed(&QCoords(q), p);
    let n = x.norm();
    x.0.iter().map(|v| v * r / n).collect()
}

impl AuxSampler {
    fn radii(&self, lo: f64, hi: f64, n: usize) -> Vec<f64> {
        if n == 0 {
            return Vec::new();
        }
        if n == 1 {
            return vec![hi];
        }
        (0..n)
            .map(|i| lo * (hi / lo).powf(i as f64 / (n - 1) as f64))
            .collect()
    }

    fn points_at(&self, rng: &mut ChaCha8Rng, r: f64, p: &ConeParams) -> Vec<AuxPoint> {
        let mut out = Vec::new();
        for _ in 0..self.directions_per_radius {
            out.push(AuxPoint {
                x: at_radius(random_direction_q(rng, p.d, &[]), r, p),
                faces: Vec::new(),
            });
        }
        for faces in face_combinations(p.d) {
            for _ in 0..self.boundary_per_combination {
                out.push(AuxPoint {
                    x: at_radius(random_direction_q(rng, p.d, &faces), r, p),
                    faces: faces.clone(),
                });
            }
        }
        out
    }
}

fn strict(v: f64) -> f64 {
    if v > 0.0 {
        v
    } else {
        f64::NEG_INFINITY
    }
}

/// Samplewise check of the Lyapunov condition.
///
/// Blow-up case: margins `−∇V·g` over the active reflection directions at
/// boundary points, `−𝔸V` everywhere, and growth of `V` toward the vertex.
/// Pair case: positivity of `V±`, the boundary signs `∇V₊·g ≥ 0 ≥ ∇V₋·g`, the
/// generator signs `𝔸V₊ ≥ 0 ≥ 𝔸V₋`, decay toward the vertex, and the two
/// uniform ratio infima over radius slices.
pub fn check_auxfunc(
    spec: &LyapunovSpec,
    p: &ConeParams,
    dp: &DiffusionParams,
    sampler: &AuxSampler,
    report_tol: f64,
) -> Result<ConditionReport, GeneratorError> {
    if !(spec.delta_w > 0.0) {
        return Err(GeneratorError::Invalid("delta_w must be positive".into()));
    }
    if dp.dim() != p.d {
        return Err(GeneratorError::Invalid("diffusion and cone dimensions differ".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(sampler.seed);
    let lo = spec.delta_w * sampler.min_radius_ratio;
    let radii = sampler.radii(lo, spec.delta_w, sampler.radial_points);
    let mut rep;
    let mut id = 0usize;
    match &spec.kind {
        LyapunovKind::PowerLaw { beta } => {
            let w = beta_window(p.d, p.mu);
            if !w.contains(*beta) {
                return Err(GeneratorError::BetaOutOfWindow {
                    beta: *beta,
                    beta_min: w.beta_min(),
                });
            }
            rep = ConditionReport::new("auxfunc.i", p.d, report_tol, sampler.seed);
            rep.meta("beta", beta);
            rep.meta("beta_min", w.beta_min());
            rep.meta("c_v", c_v(p.d, p.mu, *beta));
            rep.meta("delta_w", spec.delta_w);
            let v = PowerLaw { beta: *beta };
            for &r in &radii {
                for pt in sampler.points_at(&mut rng, r, p) {
                    let grad = v.gradient(&pt.x);
                    for &h in &pt.faces {
                        rep.push(ReportSample::new(id, Point(pt.x.clone()), "aux.i.boundary", -grad[h]));
                    }
                    let av = apply_generator(&v, &pt.x, dp);
                    rep.push(ReportSample::new(id, Point(pt.x.clone()), "aux.i.generator", -av));
                    id += 1;
                }
            }
            if radii.len() >= 2 {
                let inner = sampler.points_at(&mut rng, radii[0], p);
                let outer = sampler.points_at(&mut rng, spec.delta_w, p);
                let vin = inner.iter().map(|a| v.value(&a.x)).fold(f64::INFINITY, f64::min);
                let vout = outer.iter().map(|a| v.value(&a.x)).fold(f64::NEG_INFINITY, f64::max);
                rep.push(ReportSample::new(id, Point::zeros(p.d), "aux.i.blowup", strict(vin - vout)));
            }
        }
        LyapunovKind::UserPair { v_plus, v_minus } => {
            rep = ConditionReport::new("auxfunc.ii", p.d, report_tol, sampler.seed);
            rep.meta("delta_w", spec.delta_w);
            for &r in &radii {
                for pt in sampler.points_at(&mut rng, r, p) {
                    let x = Point(pt.x.clone());
                    rep.push(ReportSample::new(id, x.clone(), "aux.ii.pos+", strict(v_plus.value(&pt.x))));
                    rep.push(ReportSample::new(id, x.clone(), "aux.ii.pos-", strict(v_minus.value(&pt.x))));
                    let gp = v_plus.gradient(&pt.x);
                    let gm = v_minus.gradient(&pt.x);
                    for &h in &pt.faces {
                        rep.push(ReportSample::new(id, x.clone(), "aux.ii.boundary+", gp[h]));
                        rep.push(ReportSample::new(id, x.clone(), "aux.ii.boundary-", -gm[h]));
                    }
                    rep.push(ReportSample::new(
                        id,
                        x.clone(),
                        "aux.ii.generator+",
                        apply_generator(v_plus.as_ref(), &pt.x, dp),
                    ));
                    rep.push(ReportSample::new(
                        id,
                        x,
                        "aux.ii.generator-",
                        -apply_generator(v_minus.as_ref(), &pt.x, dp),
                    ));
                    id += 1;
                }
            }
            let slices = sampler.radii(lo, spec.delta_w, sampler.radius_slices);
            let mut ratio_pm = f64::INFINITY;
            let mut ratio_mp = f64::INFINITY;
            let mut inner = None;
            let mut outer = None;
            for &r in &slices {
                let pts = sampler.points_at(&mut rng, r, p);
                if pts.is_empty() {
                    continue;
                }
                let vp: Vec<f64> = pts.iter().map(|a| v_plus.value(&a.x)).collect();
                let vm: Vec<f64> = pts.iter().map(|a| v_minus.value(&a.x)).collect();
                let (pmin, pmax) = min_max(&vp);
                let (mmin, mmax) = min_max(&vm);
                ratio_pm = ratio_pm.min(pmin / mmax);
                ratio_mp = ratio_mp.min(mmin / pmax);
                if inner.is_none() {
                    inner = Some((pmax, mmax));
                }
                outer = Some((pmin, mmin));
            }
            if !slices.is_empty() && ratio_pm.is_finite() {
                rep.meta("ratio_plus_minus", ratio_pm);
                rep.meta("ratio_minus_plus", ratio_mp);
                rep.push(ReportSample::new(id, Point::zeros(p.d), "aux.ii.ratio+-", strict(ratio_pm)));
                rep.push(ReportSample::new(id + 1, Point::zeros(p.d), "aux.ii.ratio-+", strict(ratio_mp)));
                id += 2;
            }
            if let (Some((pin, min_)), Some((pout, mout)), true) = (inner, outer, slices.len() >= 2) {
                rep.push(ReportSample::new(id, Point::zeros(p.d), "aux.ii.limit+", strict(pout - pin)));
                rep.push(ReportSample::new(id + 1, Point::zeros(p.d), "aux.ii.limit-", strict(mout - min_)));
            }
        }
    }
    rep.meta("min_radius", lo);
    if rep.samples.is_empty() {
        rep.diagnose("sampler produced no points".into());
    }
    rep.finish();
    Ok(rep)
}

fn min_max(v: &[f64]) -> (f64, f64) {
    v.iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &x| (a.min(x), b.max(x)))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dp(mu: f64) -> DiffusionParams {
        DiffusionParams::example(3, mu, vec![0.0; 3]).unwrap()
    }

    #[test]
    fn sigma_example_mu_one() {
        let s = example_sigma(3, 1.0);
        let expect = DMatrix::from_row_slice(3, 3, &[4.0, 2.0, 2.0, 2.0, 4.0, 2.0, 2.0, 2.0, 4.0]);
        assert_eq!(s, expect);
        // matrix-arithmetic oracle for the trace identity
        let cov = &s * s.transpose();
        assert!((cov.trace() - 72.0).abs() < 1e-12);
        assert!((example_trace(3, 1.0) - 72.0).abs() < 1e-12);
    }

    #[test]
    fn sigma_decouples_for_large_mu() {
        let s = example_sigma(3, 1e6);
        assert!((s - DMatrix::identity(3, 3) * 2.0).abs().max() < 1e-10);
    }

    #[test]
    fn sigma_from_rates_matches_example() {
        let mu = 3.0;
        let mut a = DMatrix::zeros(3, 4);
        for j in 0..3 {
            a[(j, j)] = 1.0;
            a[(j, 3)] = 1.0;
        }
        let s = sigma_from_rates(&a, &[1.0; 4], &[1.0, 1.0, 1.0, mu]).unwrap();
        assert!((s - example_sigma(3, mu)).abs().max() < 1e-14);
        let mut bad = a.clone();
        bad.set_row(2, &bad.row(1).clone_owned());
        assert!(matches!(
            sigma_from_rates(&bad, &[1.0; 4], &[1.0; 4]),
            Err(GeneratorError::RankDeficient { rank: 2, expected: 3 })
        ));
    }

    #[test]
    fn generator_quadratic_projection() {
        let f = QuadraticProjection::diagonal(3);
        let d = dp(1.0);
        let e = &f.e;
        assert!((d.sigma_t_norm2(e) - 64.0).abs() < 1e-12);
        for x in [[0.1, 0.2, 0.3], [5.0, 1.0, 2.0]] {
            assert!((apply_generator(&f, &x, &d) - 32.0).abs() < 1e-12);
        }
    }

    #[test]
    fn generator_linear_is_drift_term() {
        let f = Linear {
            coef: vec![1.0, -2.0, 0.5],
            offset: 3.0,
        };
        let d = DiffusionParams::example(3, 2.0, vec![0.3, 0.1, -1.0]).unwrap();
        let x = [1.0, 2.0, 3.0];
        assert_eq!(apply_generator(&f, &x, &d), dot(&d.drift, &f.coef));
    }

    #[test]
    fn generator_power_law_closed_form() {
        let d = DiffusionParams::example(3, 10.0, vec![0.2, -0.1, 0.4]).unwrap();
        let v = PowerLaw { beta: -0.8 };
        for x in [[0.1, 0.2, 0.3], [1.0, 1.0, 1.0], [0.01, 0.5, 0.02]] {
            let a = apply_generator(&v, &x, &d);
            let b = power_law_generator(-0.8, &x, &d);
            assert!((a - b).abs() <= 1e-9 * b.abs().max(1.0), "{a} {b}");
        }
    }

    #[test]
    fn beta_window_examples() {
        let w = beta_window(3, 10.0);
        assert!(!w.is_empty());
        assert!((w.beta_min() + 0.885192).abs() < 1e-6);
        let w = beta_window(3, 1.0);
        assert!(w.is_empty());
        assert!((w.beta_min() - 0.875).abs() < 1e-15);
        let t = mu_threshold(3).unwrap();
        assert!((t - 2.6912154665).abs() < 1e-9);
        assert!(beta_window(3, t * (1.0 - 1e-6)).is_empty());
        let w = beta_window(3, t * (1.0 + 1e-6));
        assert!(!w.is_empty() && w.beta_min() > -1e-5);
        assert!(mu_threshold(2).is_none());
    }

    #[test]
    fn lyapunov_constant_examples() {
        let c = lyapunov_constants(3, 10.0, -0.8).unwrap();
        assert!((c.c_v - 0.180760).abs() < 1e-6);
        assert!(c.c_v > 0.0);
        assert!((c.validity_radius(1.0) - 0.090380).abs() < 1e-6);
        let bm = beta_min(3, 10.0);
        assert!(c_v(3, 10.0, bm).abs() < 1e-12);
        assert!(matches!(
            lyapunov_constants(3, 10.0, 0.1),
            Err(GeneratorError::BetaOutOfWindow { .. })
        ));
    }

    #[test]
    fn auxfunc_power_law_passes_for_large_mu() {
        let p = ConeParams::example(10.0).unwrap();
        let c = lyapunov_constants(3, 10.0, -0.8).unwrap();
        let spec = LyapunovSpec {
            kind: LyapunovKind::PowerLaw { beta: -0.8 },
            delta_w: c.c_v,
        };
        let rep = check_auxfunc(&spec, &p, &dp(10.0), &AuxSampler::default(), 1e-10).unwrap();
        assert!(rep.pass, "{}", rep.to_text());
        assert!(rep.worst_for("aux.i.boundary").unwrap() >= 0.0);
    }

    #[test]
    fn auxfunc_refuses_empty_window() {
        let p = ConeParams::example(1.0).unwrap();
        let spec = LyapunovSpec {
            kind: LyapunovKind::PowerLaw { beta: -0.5 },
            delta_w: 1.0,
        };
        assert!(matches!(
            check_auxfunc(&spec, &p, &dp(1.0), &AuxSampler::default(), 1e-10),
            Err(GeneratorError::BetaOutOfWindow { .. })
        ));
    }

    #[test]
    fn auxfunc_degenerate_sampler_fails() {
        let p = ConeParams::example(10.0).unwrap();
        let spec = LyapunovSpec {
            kind: LyapunovKind::PowerLaw { beta: -0.8 },
            delta_w: 0.1,
        };
        let s = AuxSampler {
            radial_points: 0,
            ..Default::default()
        };
        let rep = check_auxfunc(&spec, &p, &dp(10.0), &s, 1e-10).unwrap();
        assert!(!rep.pass);
        assert!(!rep.diagnostics.is_empty());
    }

    #[test]
    fn auxfunc_pair_flags_wrong_boundary_sign() {
        let p = ConeParams::example(10.0).unwrap();
        let spec = LyapunovSpec {
            kind: LyapunovKind::UserPair {
                v_plus: Arc::new(PowerLaw { beta: 2.0 }),
                v_minus: Arc::new(FnField(|x: &[f64]| norm(x).sqrt())),
            },
            delta_w: 0.5,
        };
        let s = AuxSampler {
            radial_points: 4,
            directions_per_radius: 4,
            boundary_per_combination: 2,
            radius_slices: 4,
            ..Default::default()
        };
        let rep = check_auxfunc(&spec, &p, &dp(10.0), &s, 1e-6).unwrap();
        assert!(!rep.pass);
        assert!(rep.worst_for("aux.ii.boundary+").unwrap() >= 0.0);
        assert!(rep.worst_for("aux.ii.generator+").unwrap() >= 0.0);
        assert!(rep.worst_for("aux.ii.boundary-").unwrap() < 0.0);
        assert!(rep.worst_for("aux.ii.ratio+-").unwrap() > 0.0);
    }
}
