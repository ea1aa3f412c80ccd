//! Geometry of the α-fair example cone.
//!
//! The cone is parametrized by dual coordinates `q ∈ ℝ₊^d`:
//!
//! ```text
//! x_j = q_j^{1/α} + μ⁻² (q_1 + … + q_d)^{1/α}
//! ```
//!
//! Face `h` is the image of `{q_h = 0}`, the reflection direction on it is the
//! coordinate vector `e_h`, and the closed cone minus the vertex sits inside the
//! open positive orthant. The map `q ↦ x` is homogeneous: scaling `q` by `t^α`
//! scales `x` by `t`, so normals and face sets are radially constant.
//!
//! Faces are indexed from 0.

use nalgebra::DMatrix;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;
use thiserror::Error;

use crate::report::{ConditionReport, ReportSample};

/// Errors raised by the cone geometry.
#[derive(Error, Debug, Clone, PartialEq)]
pub enum GeometryError {
    #[error("invalid cone parameters: {0}")]
    InvalidParams(String),
    #[error("point lies outside the closed cone (worst coordinate margin {margin:e})")]
    OutsideCone { margin: f64 },
    #[error("inversion did not converge after {iterations} iterations")]
    NonConvergence { iterations: usize },
    #[error("point has non-finite coordinates")]
    NonFinite,
    #[error("point is not on face {face} (q_{face} = {q:e})")]
    NotOnFace { face: usize, q: f64 },
    #[error("point is interior: no reflection direction is active")]
    InteriorPoint,
    #[error("the vertex has no well-defined face normal")]
    AtVertex,
    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },
}

/// Parameters of the example cone.
#[derive(Debug, Clone, PartialEq)]
pub struct ConeParams {
    /// Number of resources.
    pub d: usize,
    pub alpha: f64,
    /// Rate of the long route.
    pub mu: f64,
    /// Relative face-activity threshold on `q_h / |q|₁`.
    pub face_tol: f64,
    /// Relative tolerance of the inversion root-find.
    pub invert_tol: f64,
    /// Points with `|x|∞ ≤ vertex_tol` are the vertex.
    pub vertex_tol: f64,
}

impl ConeParams {
    pub const DEFAULT_FACE_TOL: f64 = 1e-9;
    pub const DEFAULT_INVERT_TOL: f64 = 1e-14;
    pub const DEFAULT_VERTEX_TOL: f64 = 1e-12;

    pub fn new(d: usize, alpha: f64, mu: f64) -> Result<Self, GeometryError> {
        let p = ConeParams {
            d,
            alpha,
            mu,
            face_tol: Self::DEFAULT_FACE_TOL,
            invert_tol: Self::DEFAULT_INVERT_TOL,
            vertex_tol: Self::DEFAULT_VERTEX_TOL,
        };
        p.validate()?;
        Ok(p)
    }

    /// The three-resource cone with `α = 2`.
    pub fn example(mu: f64) -> Result<Self, GeometryError> {
        Self::new(3, 2.0, mu)
    }

    pub fn validate(&self) -> Result<(), GeometryError> {
        let bad = |m: &str| Err(GeometryError::InvalidParams(m.to_string()));
        if self.d < 2 {
            return bad("d must be at least 2");
        }
        if !(self.alpha > 1.0) || !self.alpha.is_finite() {
            return bad("alpha must be a finite number > 1");
        }
        if !(self.mu > 0.0) || !self.mu.is_finite() {
            return bad("mu must be a finite number > 0");
        }
        if !(self.face_tol > 0.0) || !(self.invert_tol > 0.0) || !(self.vertex_tol > 0.0) {
            return bad("face_tol, invert_tol and vertex_tol must be > 0");
        }
        Ok(())
    }

    /// Faces are C² exactly when `α ≥ 2`.
    pub fn is_c2_certified(&self) -> bool {
        self.alpha >= 2.0
    }

    /// `μ²`.
    pub fn mu2(&self) -> f64 {
        self.mu * self.mu
    }
}

/// Dual coordinates of a cone point.
#[derive(Debug, Clone, PartialEq)]
pub struct QCoords(pub Vec<f64>);

impl QCoords {
    pub fn l1(&self) -> f64 {
        self.0.iter().sum()
    }
}

/// A point of ℝ^d.
#[derive(Debug, Clone, PartialEq)]
pub struct Point(pub Vec<f64>);

impl Point {
    pub fn zeros(d: usize) -> Self {
        Point(vec![0.0; d])
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn norm(&self) -> f64 {
        norm(&self.0)
    }

    pub fn scaled(&self, r: f64) -> Point {
        Point(self.0.iter().map(|v| v * r).collect())
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

impl From<Vec<f64>> for Point {
    fn from(v: Vec<f64>) -> Self {
        Point(v)
    }
}

/// Faces active at a point.
#[derive(Debug, Clone, PartialEq)]
pub struct FaceSet {
    pub active: Vec<usize>,
    pub at_vertex: bool,
    /// `|x|` at classification time.
    pub classification_radius: f64,
}

impl FaceSet {
    pub fn is_interior(&self) -> bool {
        !self.at_vertex && self.active.is_empty()
    }
}

pub(crate) fn norm(v: &[f64]) -> f64 {
    v.iter().map(|a| a * a).sum::<f64>().sqrt()
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `v^a` for `v ≥ 0`, with the common exponents special-cased.
#[inline]
pub(crate) fn pow_pos(v: f64, a: f64) -> f64 {
    if a == 2.0 {
        v * v
    } else if a == 1.0 {
        v
    } else if a == 0.5 {
        v.sqrt()
    } else if v == 0.0 {
        if a > 0.0 {
            0.0
        } else {
            f64::INFINITY
        }
    } else {
        v.powf(a)
    }
}

/// `x_j = q_j^{1/α} + μ⁻² (Σ q)^{1/α}`.
pub fn embed(q: &QCoords, p: &ConeParams) -> Point {
    let inv = 1.0 / p.alpha;
    let common = pow_pos(q.l1().max(0.0), inv) / p.mu2();
    Point(q.0.iter().map(|&qj| pow_pos(qj.max(0.0), inv) + common).collect())
}

/// Root `s` of `s^α = Σ_j (x_j − s/μ²)₊^α`.
///
/// The left side increases and the right side decreases in `s`, so the root is
/// unique; it lies in `[0, μ² max_j x_j]`. Safeguarded Newton inside a shrinking
/// bracket.
pub fn dual_scale(x: &[f64], p: &ConeParams) -> Result<f64, GeometryError> {
    let mu2 = p.mu2();
    let a = p.alpha;
    let xmax = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !(xmax > 0.0) {
        return Ok(0.0);
    }
    let residual = |s: f64| -> (f64, f64) {
        let mut sum = 0.0;
        let mut dsum = 0.0;
        for &xj in x {
            let m = xj - s / mu2;
            if m > 0.0 {
                sum += pow_pos(m, a);
                dsum += pow_pos(m, a - 1.0);
            }
        }
        let f = pow_pos(s, a) - sum;
        let df = a * pow_pos(s, a - 1.0) + a * dsum / mu2;
        (f, df)
    };
    let mut lo = 0.0;
    let mut hi = mu2 * xmax;
    let mut s = 0.5 * hi;
    const MAX_ITER: usize = 200;
    for _ in 0..MAX_ITER {
        let (f, df) = residual(s);
        if f == 0.0 {
            return Ok(s);
        }
        if f < 0.0 {
            lo = s;
        } else {
            hi = s;
        }
        if hi - lo <= p.invert_tol * hi {
            return Ok(0.5 * (lo + hi));
        }
        let newton = s - f / df;
        s = if df > 0.0 && newton > lo && newton < hi {
            newton
        } else {
            0.5 * (lo + hi)
        };
        // Newton can stall at a bracket end; the width test above never fires then.
        if (s - lo).abs() <= p.invert_tol * hi || (hi - s).abs() <= p.invert_tol * hi {
            let (fs, _) = residual(s);
            if fs.abs() <= f64::EPSILON * pow_pos(s, a).max(f64::MIN_POSITIVE) * 8.0 {
                return Ok(s);
            }
        }
    }
    Err(GeometryError::NonConvergence { iterations: MAX_ITER })
}

/// Cheap closed-form membership test: `x ∈ 𝒲̄` iff the root of
/// [`dual_scale`] is at most `μ² min_j x_j`. A relative slack of `1e−12`
/// absorbs rounding on points produced by [`least_push`].
pub fn contains(x: &[f64], p: &ConeParams) -> bool {
    const SLACK: f64 = 1e-12;
    let xmin = x.iter().cloned().fold(f64::INFINITY, f64::min);
    if !(xmin >= 0.0) {
        return x.iter().all(|v| v.abs() <= p.vertex_tol) && xmin.is_finite();
    }
    let s = p.mu2() * xmin;
    let sum: f64 = x.iter().map(|&xj| pow_pos(xj - xmin, p.alpha)).sum();
    pow_pos(s, p.alpha) >= sum * (1.0 - SLACK)
}

/// Inverse of [`embed`] with face classification.
pub fn invert(x: &Point, p: &ConeParams) -> Result<(QCoords, FaceSet), GeometryError> {
    if x.dim() != p.d {
        return Err(GeometryError::Dimension {
            expected: p.d,
            got: x.dim(),
        });
    }
    if x.0.iter().any(|v| !v.is_finite()) {
        return Err(GeometryError::NonFinite);
    }
    let scale = x.0.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let radius = x.norm();
    if scale <= p.vertex_tol {
        return Ok((
            QCoords(vec![0.0; p.d]),
            FaceSet {
                active: Vec::new(),
                at_vertex: true,
                classification_radius: radius,
            },
        ));
    }
    let s = dual_scale(&x.0, p)?;
    let shift = s / p.mu2();
    let worst = x.0.iter().map(|&xj| xj - shift).fold(f64::INFINITY, f64::min);
    if worst < -p.face_tol * scale {
        return Err(GeometryError::OutsideCone { margin: worst });
    }
    let q: Vec<f64> = x.0.iter().map(|&xj| pow_pos((xj - shift).max(0.0), p.alpha)).collect();
    let l1: f64 = q.iter().sum();
    let active = (0..p.d).filter(|&h| q[h] <= p.face_tol * l1).collect();
    Ok((
        QCoords(q),
        FaceSet {
            active,
            at_vertex: false,
            classification_radius: radius,
        },
    ))
}

/// Least coordinatewise push `u ≥ 0` with `x + u ∈ 𝒲̄`.
///
/// With `s` the root of [`dual_scale`] for `x`, `u_j = (s/μ² − x_j)₊`. Any
/// admissible push dominates this one, so it is also the minimal-norm
/// nonnegative combination of the active reflection directions, and `u_h > 0`
/// only on faces the corrected point lies on.
pub fn least_push(x: &[f64], p: &ConeParams) -> Result<Vec<f64>, GeometryError> {
    if x.iter().any(|v| !v.is_finite()) {
        return Err(GeometryError::NonFinite);
    }
    let s = dual_scale(x, p)?;
    let shift = s / p.mu2();
    Ok(x.iter().map(|&xj| (shift - xj).max(0.0)).collect())
}

/// Unit inward normal of face `h`, evaluated from dual coordinates.
///
/// `q_h` is ignored (treated as zero).
pub fn inward_normal_q(h: usize, q: &QCoords, p: &ConeParams) -> Result<Vec<f64>, GeometryError> {
    let a = p.alpha;
    let rest: f64 = q.0.iter().enumerate().filter(|&(l, _)| l != h).map(|(_, v)| *v).sum();
    if !(rest > 0.0) {
        return Err(GeometryError::AtVertex);
    }
    let coef = pow_pos(rest, (1.0 - a) / a) / p.mu2();
    let e = (a - 1.0) / a;
    let mut n = vec![0.0; q.0.len()];
    let mut acc = 0.0;
    for (j, &qj) in q.0.iter().enumerate() {
        if j != h {
            let t = pow_pos(qj.max(0.0), e);
            n[j] = -coef * t;
            acc += t;
        }
    }
    n[h] = 1.0 + coef * acc;
    let c = 1.0 / norm(&n);
    n.iter_mut().for_each(|v| *v *= c);
    Ok(n)
}

/// Unit inward normal `nʰ(x)` of face `h` at a boundary point.
pub fn inward_normal(h: usize, x: &Point, p: &ConeParams) -> Result<Vec<f64>, GeometryError> {
    let (q, faces) = invert(x, p)?;
    if faces.at_vertex {
        return Err(GeometryError::AtVertex);
    }
    if h >= p.d {
        return Err(GeometryError::Dimension {
            expected: p.d,
            got: h,
        });
    }
    if !faces.active.contains(&h) {
        return Err(GeometryError::NotOnFace { face: h, q: q.0[h] });
    }
    inward_normal_q(h, &q, p)
}

fn unit(d: usize, h: usize) -> Vec<f64> {
    let mut e = vec![0.0; d];
    e[h] = 1.0;
    e
}

/// Generators of the reflection cone `G(x)`; at the vertex, all coordinate
/// directions.
pub fn reflection_cone(x: &Point, p: &ConeParams) -> Result<Vec<Vec<f64>>, GeometryError> {
    let (_, faces) = invert(x, p)?;
    if faces.at_vertex {
        return Ok((0..p.d).map(|h| unit(p.d, h)).collect());
    }
    if faces.active.is_empty() {
        return Err(GeometryError::InteriorPoint);
    }
    Ok(faces.active.iter().map(|&h| unit(p.d, h)).collect())
}

/// A sampled boundary point with the faces it was constructed on.
#[derive(Debug, Clone)]
pub struct BoundarySample {
    pub x: Point,
    pub q: QCoords,
    pub faces: Vec<usize>,
}

/// Draws boundary points over every face combination of size `1..=d−1`, at
/// each requested radius, with the free dual coordinates log-uniform.
#[derive(Debug, Clone)]
pub struct BoundarySampler {
    pub radii: Vec<f64>,
    pub per_combination: usize,
    /// Free `q_j` are `10^U(−span, span)` before rescaling.
    pub log10_span: f64,
    pub seed: u64,
}

impl Default for BoundarySampler {
    fn default() -> Self {
        BoundarySampler {
            radii: vec![1e-3, 1e-1, 1.0, 10.0],
            per_combination: 16,
            log10_span: 3.0,
            seed: 0,
        }
    }
}

/// Nonempty proper subsets of `0..d`, ordered by size then lexicographically.
pub fn face_combinations(d: usize) -> Vec<Vec<usize>> {
    let mut out: Vec<Vec<usize>> = (1u64..(1u64 << d) - 1)
        .map(|mask| (0..d).filter(|&j| mask & (1 << j) != 0).collect())
        .collect();
    out.sort_by(|a: &Vec<usize>, b| a.len().cmp(&b.len()).then_with(|| a.cmp(b)));
    out
}

impl BoundarySampler {
    pub fn samples(&self, p: &ConeParams) -> Vec<BoundarySample> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let mut out = Vec::new();
        for faces in face_combinations(p.d) {
            for &r in &self.radii {
                for _ in 0..self.per_combination {
                    let mut q: Vec<f64> = (0..p.d)
                        .map(|j| {
                            if faces.contains(&j) {
                                0.0
                            } else {
                                10f64.powf(rng.gen_range(-self.log10_span..=self.log10_span))
                            }
                        })
                        .collect();
                    let x0 = embed(&QCoords(q.clone()), p);
                    let t = r / x0.norm();
                    let qs = pow_pos(t, p.alpha);
                    q.iter_mut().for_each(|v| *v *= qs);
                    let q = QCoords(q);
                    let x = embed(&q, p);
                    out.push(BoundarySample {
                        x,
                        q,
                        faces: faces.clone(),
                    });
                }
            }
        }
        out
    }
}

/// Largest modulus among the eigenvalues of a small square matrix.
pub(crate) fn spectral_radius(m: &DMatrix<f64>) -> f64 {
    if m.nrows() == 0 {
        return 0.0;
    }
    m.complex_eigenvalues()
        .iter()
        .map(|z| z.norm())
        .fold(0.0, f64::max)
}

/// Samplewise check of the reflection-geometry condition: positivity of
/// `gʰ·nʰ`, linear independence of active normals, the spectral radius of
/// `|g^{h_i}·n^{h_j}| / (g^{h_i}·n^{h_i}) − δ_ij`, and the margin of
/// `e = (1,…,1)/√d` over the vertex reflection cone.
pub fn check_condition_g(p: &ConeParams, sampler: &BoundarySampler, report_tol: f64) -> ConditionReport {
    let mut report = ConditionReport::new("G", p.d, report_tol, sampler.seed);
    if !p.is_c2_certified() {
        report.warn(format!(
            "alpha = {} < 2: faces are C1 but not C2; the curvature-dependent results are not certified",
            p.alpha
        ));
    }
    let samples = sampler.samples(p);
    let mut id = 0usize;
    for s in &samples {
        let (q, faces) = match invert(&s.x, p) {
            Ok(v) => v,
            Err(e) => {
                report.diagnose(format!("sample {id}: inversion failed: {e}"));
                report.push(ReportSample::new(id, s.x.clone(), "G.membership", f64::NEG_INFINITY));
                id += 1;
                continue;
            }
        };
        let active = faces.active.clone();
        if active != s.faces {
            report.diagnose(format!(
                "sample {id}: classified faces {:?} differ from construction {:?}",
                active, s.faces
            ));
        }
        let normals: Vec<Vec<f64>> = match active.iter().map(|&h| inward_normal_q(h, &q, p)).collect() {
            Ok(n) => n,
            Err(e) => {
                report.diagnose(format!("sample {id}: normal failed: {e}"));
                id += 1;
                continue;
            }
        };
        // (i) g^h · n^h = n^h_h
        let gn = active
            .iter()
            .zip(&normals)
            .map(|(&h, n)| n[h])
            .fold(f64::INFINITY, f64::min);
        report.push(ReportSample::new(id, s.x.clone(), "G.i", gn));
        // (ii) smallest singular value of the stacked normals
        let k = active.len();
        let nm = DMatrix::from_fn(k, p.d, |i, j| normals[i][j]);
        let sv = nm.singular_values();
        let smin = sv.iter().cloned().fold(f64::INFINITY, f64::min);
        report.push(ReportSample::new(id, s.x.clone(), "G.ii", smin));
        // (iii) spectral radius
        let mat = DMatrix::from_fn(k, k, |i, j| {
            let hi = active[i];
            let gi_nj = normals[j][hi];
            let gi_ni = normals[i][hi];
            gi_nj.abs() / gi_ni - if i == j { 1.0 } else { 0.0 }
        });
        let rho = spectral_radius(&mat);
        report.push(ReportSample::new(id, s.x.clone(), "G.iii", 1.0 - rho));
        report.max_spectral_radius = report.max_spectral_radius.max(rho);
        id += 1;
    }
    // (iv) vertex: e·g over the generators of G(0), and e·x ≥ 0 over the cone
    let e = vec![1.0 / (p.d as f64).sqrt(); p.d];
    let vertex = Point::zeros(p.d);
    let margin = reflection_cone(&vertex, p)
        .map(|gens| gens.iter().map(|g| dot(&e, g)).fold(f64::INFINITY, f64::min))
        .unwrap_or(f64::NEG_INFINITY);
    report.push(ReportSample::new(id, vertex, "G.iv", margin));
    id += 1;
    let en = samples
        .iter()
        .map(|s| dot(&e, &s.x.0) / s.x.norm())
        .fold(f64::INFINITY, f64::min);
    report.push(ReportSample::new(id, Point(e.clone()), "G.iv.N0", en));
    report.finish();
    report
}
