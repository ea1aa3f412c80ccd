//! Euler–Maruyama simulation of the reflected diffusion in the cone.
//!
//! Each step takes a free Gaussian step and then applies the least
//! coordinatewise push back into the cone (see [`least_push`]). The push on
//! coordinate `h` is the local-time increment along `e_h`.
//!
//! Random streams: path `i` of an ensemble with master seed `s` draws from
//! `ChaCha8Rng::seed_from_u64(s)` with stream number `i` (see [`path_rng`]),
//! so results do not depend on how paths are scheduled across threads.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use thiserror::Error;

use crate::cone::{contains, least_push, norm, ConeParams, GeometryError, Point};
use crate::generator::DiffusionParams;

#[derive(Error, Debug, Clone, PartialEq)]
pub enum SimError {
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error("reflection did not converge after {iterations} corrections")]
    ReflectionDiverged { iterations: usize },
    #[error("no stopping event within {steps} steps")]
    MaxSteps { steps: usize },
    #[error("path rescaling requires zero drift")]
    DriftNotZero,
    #[error("starting point is outside the cone")]
    StartOutside,
    #[error("invalid simulation settings: {0}")]
    Invalid(String),
}

/// How the step size depends on the current state.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum DtRule {
    /// `dt = dt_max`.
    Fixed,
    /// `dt = clamp(κ|x|², dt_min, dt_max)`.
    RadiusScaled { kappa: f64, dt_min: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimConfig {
    pub dt_max: f64,
    pub dt_rule: DtRule,
    /// Radius of the ball whose entry stands in for hitting the vertex.
    pub origin_eps: f64,
    pub seed: u64,
    pub max_steps: usize,
    pub interpolate_crossings: bool,
    /// Keep every state. Off for large ensembles.
    pub record_path: bool,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            dt_max: 1e-4,
            dt_rule: DtRule::Fixed,
            origin_eps: 1e-5,
            seed: 0,
            max_steps: 10_000_000,
            interpolate_crossings: true,
            record_path: false,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<(), SimError> {
        if !(self.dt_max > 0.0) || !self.dt_max.is_finite() {
            return Err(SimError::Invalid("dt_max must be positive".into()));
        }
        if !(self.origin_eps > 0.0) {
            return Err(SimError::Invalid("origin_eps must be positive".into()));
        }
        if let DtRule::RadiusScaled { kappa, dt_min } = self.dt_rule {
            if !(kappa > 0.0) || !(dt_min > 0.0) || dt_min > self.dt_max {
                return Err(SimError::Invalid("need kappa > 0 and 0 < dt_min <= dt_max".into()));
            }
        }
        if self.max_steps == 0 {
            return Err(SimError::Invalid("max_steps must be positive".into()));
        }
        Ok(())
    }

    pub fn dt_at(&self, radius: f64) -> f64 {
        match self.dt_rule {
            DtRule::Fixed => self.dt_max,
            DtRule::RadiusScaled { kappa, dt_min } => (kappa * radius * radius).clamp(dt_min, self.dt_max),
        }
    }
}

/// When a path stops.
#[derive(Debug, Clone, PartialEq)]
pub struct StopSpec {
    /// Spheres whose first passage is recorded; the path stops once all are hit.
    pub radii: Vec<f64>,
    /// Stop on first entry into `B(origin_eps)`.
    pub kill_at_origin: bool,
    pub t_max: f64,
    /// Radii for occupation-time bookkeeping (time spent with `|x| ≤ r`).
    pub occupation_radii: Vec<f64>,
}

impl StopSpec {
    pub fn sphere(radius: f64) -> Self {
        StopSpec {
            radii: vec![radius],
            kill_at_origin: false,
            t_max: f64::INFINITY,
            occupation_radii: Vec::new(),
        }
    }

    pub fn killed_sphere(radius: f64) -> Self {
        StopSpec {
            kill_at_origin: true,
            ..Self::sphere(radius)
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SphereHit {
    pub radius: f64,
    pub time: f64,
    pub point: Point,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PathRecord {
    /// Recorded times; only the start and end unless `record_path`.
    pub times: Vec<f64>,
    pub states: Vec<Point>,
    /// Cumulative push per face at each recorded time.
    pub local_time: Vec<Vec<f64>>,
    /// First passages, in the order the spheres were hit.
    pub tau_hits: Vec<SphereHit>,
    /// First entry into `B(origin_eps)` after having been outside it.
    pub theta_proxy: Option<f64>,
    /// `(radius, time spent with |x| ≤ radius)`.
    pub occupation: Vec<(f64, f64)>,
    pub steps: usize,
    pub pushed_steps: usize,
}

impl PathRecord {
    pub fn hit(&self, radius: f64) -> Option<&SphereHit> {
        self.tau_hits.iter().find(|h| h.radius == radius)
    }

    pub fn end_time(&self) -> f64 {
        *self.times.last().unwrap_or(&0.0)
    }

    pub fn end_state(&self) -> &Point {
        self.states.last().expect("path has a start state")
    }

    pub fn total_local_time(&self) -> &[f64] {
        self.local_time.last().map(|v| v.as_slice()).unwrap_or(&[])
    }

    /// Killed before reaching `radius`.
    pub fn killed_before(&self, radius: f64) -> bool {
        match (self.theta_proxy, self.hit(radius)) {
            (Some(k), Some(h)) => k < h.time,
            (Some(_), None) => true,
            _ => false,
        }
    }

    /// CSV with columns `t, x1..xd, lt1..ltd`.
    pub fn write_csv<W: std::io::Write>(&self, w: W) -> csv::Result<()> {
        let d = self.states.first().map(|s| s.dim()).unwrap_or(0);
        let mut wr = csv::Writer::from_writer(w);
        let mut header = vec!["t".to_string()];
        header.extend((1..=d).map(|j| format!("x{j}")));
        header.extend((1..=d).map(|j| format!("lt{j}")));
        wr.write_record(&header)?;
        for ((t, x), lt) in self.times.iter().zip(&self.states).zip(&self.local_time) {
            let mut rec = vec![t.to_string()];
            rec.extend(x.0.iter().map(|v| v.to_string()));
            rec.extend(lt.iter().map(|v| v.to_string()));
            wr.write_record(&rec)?;
        }
        wr.flush()?;
        Ok(())
    }
}

const MAX_CORRECTIONS: usize = 20;

/// One reflected Euler step from `x` with standard normal vector `xi`.
///
/// Returns the new state and the push applied along each `e_h`. The least push
/// lands in the cone in one correction; further corrections only absorb
/// rounding. Non-finite states (for instance from an infinite `dt`) end in
/// `ReflectionDiverged`.
pub fn reflect_step(
    x: &[f64],
    dt: f64,
    xi: &[f64],
    p: &ConeParams,
    dp: &DiffusionParams,
) -> Result<(Vec<f64>, Vec<f64>), SimError> {
    let d = x.len();
    let sdt = dt.sqrt();
    let mut y: Vec<f64> = (0..d)
        .map(|i| {
            let noise: f64 = (0..d).map(|k| dp.sigma[(i, k)] * xi[k]).sum();
            x[i] + dp.drift[i] * dt + sdt * noise
        })
        .collect();
    let mut push = vec![0.0; d];
    if y.iter().any(|v| !v.is_finite()) {
        return Err(SimError::ReflectionDiverged { iterations: 0 });
    }
    let mut it = 0;
    while !contains(&y, p) {
        if it == MAX_CORRECTIONS {
            return Err(SimError::ReflectionDiverged { iterations: it });
        }
        let u = least_push(&y, p).map_err(|_| SimError::ReflectionDiverged { iterations: it })?;
        let mut moved = false;
        for j in 0..d {
            if u[j] > 0.0 {
                y[j] += u[j];
                push[j] += u[j];
                moved = true;
            }
        }
        if !moved {
            // numerically on the boundary: nudge along the diagonal
            let bump = f64::EPSILON * norm(&y).max(f64::MIN_POSITIVE);
            for j in 0..d {
                y[j] += bump;
                push[j] += bump;
            }
        }
        it += 1;
    }
    Ok((y, push))
}

/// Independent random stream for path `stream` under `master` seed.
pub fn path_rng(master: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(master);
    rng.set_stream(stream);
    rng
}

/// Runs `f(i, rng_i)` for `i in 0..n` in parallel; results in index order.
pub fn run_ensemble<T, F>(n: usize, master: u64, stream_offset: u64, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize, &mut ChaCha8Rng) -> T + Sync,
{
    (0..n)
        .into_par_iter()
        .map(|i| {
            let mut rng = path_rng(master, stream_offset + i as u64);
            f(i, &mut rng)
        })
        .collect()
}

fn interpolate_hit(x: &[f64], y: &[f64], rx: f64, ry: f64, radius: f64, interp: bool) -> (f64, Vec<f64>) {
    if !interp || ry == rx {
        return (1.0, y.to_vec());
    }
    let theta = ((radius - rx) / (ry - rx)).clamp(0.0, 1.0);
    let z: Vec<f64> = x.iter().zip(y).map(|(a, b)| a + theta * (b - a)).collect();
    let nz = norm(&z);
    let z = if nz > 0.0 {
        z.iter().map(|v| v * radius / nz).collect()
    } else {
        z
    };
    (theta, z)
}

/// Simulates one path from `x0` until `stop` is met.
pub fn simulate_path<R: Rng + ?Sized>(
    x0: &Point,
    stop: &StopSpec,
    cfg: &SimConfig,
    p: &ConeParams,
    dp: &DiffusionParams,
    rng: &mut R,
) -> Result<PathRecord, SimError> {
    let d = p.d;
    if x0.dim() != d || dp.dim() != d {
        return Err(SimError::Invalid("dimension mismatch".into()));
    }
    if !contains(&x0.0, p) {
        return Err(SimError::StartOutside);
    }
    let mut x = x0.0.clone();
    let mut t = 0.0;
    let mut lt = vec![0.0; d];
    let mut rx = norm(&x);
    let mut rec = PathRecord {
        times: vec![0.0],
        states: vec![x0.clone()],
        local_time: vec![lt.clone()],
        tau_hits: Vec::new(),
        theta_proxy: None,
        occupation: stop.occupation_radii.iter().map(|&r| (r, 0.0)).collect(),
        steps: 0,
        pushed_steps: 0,
    };
    let mut pending: Vec<f64> = Vec::new();
    for &r in &stop.radii {
        if rx == r {
            rec.tau_hits.push(SphereHit {
                radius: r,
                time: 0.0,
                point: x0.clone(),
            });
        } else {
            pending.push(r);
        }
    }
    let mut armed = rx > cfg.origin_eps;
    let mut xi = vec![0.0; d];
    let mut killed = false;
    while !(pending.is_empty() && !stop.radii.is_empty()) && !(killed && stop.kill_at_origin) && t < stop.t_max {
        if rec.steps >= cfg.max_steps {
            return Err(SimError::MaxSteps { steps: rec.steps });
        }
        let dt = cfg.dt_at(rx).min(stop.t_max - t);
        for v in xi.iter_mut() {
            *v = rng.sample(StandardNormal);
        }
        let (y, u) = reflect_step(&x, dt, &xi, p, dp)?;
        let ry = norm(&y);
        for (r, occ) in rec.occupation.iter_mut() {
            if rx <= *r {
                *occ += dt;
            }
        }
        pending.retain(|&r| {
            if (rx - r) * (ry - r) <= 0.0 {
                let (theta, z) = interpolate_hit(&x, &y, rx, ry, r, cfg.interpolate_crossings);
                rec.tau_hits.push(SphereHit {
                    radius: r,
                    time: t + theta * dt,
                    point: Point(z),
                });
                false
            } else {
                true
            }
        });
        if armed && ry <= cfg.origin_eps && rec.theta_proxy.is_none() {
            let (theta, _) = interpolate_hit(&x, &y, rx, ry, cfg.origin_eps, cfg.interpolate_crossings);
            rec.theta_proxy = Some(t + theta * dt);
            killed = true;
        }
        if ry > cfg.origin_eps {
            armed = true;
        }
        if u.iter().any(|&v| v > 0.0) {
            rec.pushed_steps += 1;
            for (a, b) in lt.iter_mut().zip(&u) {
                *a += b;
            }
        }
        x = y;
        rx = ry;
        t += dt;
        rec.steps += 1;
        if cfg.record_path {
            rec.times.push(t);
            rec.states.push(Point(x.clone()));
            rec.local_time.push(lt.clone());
        }
    }
    if !cfg.record_path {
        rec.times.push(t);
        rec.states.push(Point(x));
        rec.local_time.push(lt);
    }
    Ok(rec)
}

/// The path `t ↦ c·X(t/c²)` with `c = 2^{2n}`. Local time scales like the
/// state, times and occupation times by `c²`.
pub fn rescale_path(rec: &PathRecord, n: i32, dp: &DiffusionParams) -> Result<PathRecord, SimError> {
    if !dp.has_zero_drift() {
        return Err(SimError::DriftNotZero);
    }
    let c = 2f64.powi(2 * n);
    let c2 = c * c;
    Ok(PathRecord {
        times: rec.times.iter().map(|t| t * c2).collect(),
        states: rec.states.iter().map(|s| s.scaled(c)).collect(),
        local_time: rec
            .local_time
            .iter()
            .map(|v| v.iter().map(|a| a * c).collect())
            .collect(),
        tau_hits: rec
            .tau_hits
            .iter()
            .map(|h| SphereHit {
                radius: h.radius * c,
                time: h.time * c2,
                point: h.point.scaled(c),
            })
            .collect(),
        theta_proxy: rec.theta_proxy.map(|t| t * c2),
        occupation: rec.occupation.iter().map(|&(r, o)| (r * c, o * c2)).collect(),
        steps: rec.steps,
        pushed_steps: rec.pushed_steps,
    })
}

/// Monte Carlo mean with standard error.
#[derive(Debug, Clone, PartialEq)]
pub struct Estimate {
    pub mean: f64,
    pub stderr: f64,
    pub n_ok: usize,
    pub n_failed: usize,
    /// The analytic bound it is compared against.
    pub bound: f64,
}

impl Estimate {
    fn from_samples(xs: &[f64], n_failed: usize, bound: f64) -> Self {
        let n = xs.len();
        let mean = if n > 0 { xs.iter().sum::<f64>() / n as f64 } else { f64::NAN };
        let var = if n > 1 {
            xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64
        } else {
            f64::NAN
        };
        Estimate {
            mean,
            stderr: (var / n as f64).sqrt(),
            n_ok: n,
            n_failed,
            bound,
        }
    }

    pub fn relative_stderr(&self) -> f64 {
        self.stderr / self.mean
    }
}

/// `e = (1,…,1)/√d`.
pub fn diagonal_unit(d: usize) -> Vec<f64> {
    vec![1.0 / (d as f64).sqrt(); d]
}

/// Mean first passage time to `∂B_δ` from the vertex, with the bound
/// `2δ²/|σᵀe|²` attached.
pub fn mean_exit_from_origin(
    delta: f64,
    n_paths: usize,
    cfg: &SimConfig,
    p: &ConeParams,
    dp: &DiffusionParams,
) -> Result<Estimate, SimError> {
    if !(delta > 0.0) || n_paths == 0 {
        return Err(SimError::Invalid("need delta > 0 and at least one path".into()));
    }
    cfg.validate()?;
    let stop = StopSpec::sphere(delta);
    let x0 = Point::zeros(p.d);
    let times = run_ensemble(n_paths, cfg.seed, 0, |_, rng| {
        simulate_path(&x0, &stop, cfg, p, dp, rng).map(|r| r.hit(delta).map(|h| h.time))
    });
    let mut xs = Vec::with_capacity(n_paths);
    let mut failed = 0;
    for t in times {
        match t {
            Ok(Some(t)) => xs.push(t),
            Ok(None) => failed += 1,
            Err(SimError::ReflectionDiverged { .. }) | Err(SimError::MaxSteps { .. }) => failed += 1,
            Err(e) => return Err(e),
        }
    }
    let bound = exit_time_bound(delta, dp);
    Ok(Estimate::from_samples(&xs, failed, bound))
}

/// `2δ²/|σᵀe|²` with `e` the diagonal unit vector.
pub fn exit_time_bound(delta: f64, dp: &DiffusionParams) -> f64 {
    2.0 * delta * delta / dp.sigma_t_norm2(&diagonal_unit(dp.dim()))
}

/// Fraction of paths from `x0` that enter `B(ε)` before reaching `∂B_δ`,
/// with the bound `(ε/|x0|)^{−β}` attached.
pub fn survival_estimate(
    x0: &Point,
    delta: f64,
    eps: f64,
    beta: f64,
    n_paths: usize,
    cfg: &SimConfig,
    p: &ConeParams,
    dp: &DiffusionParams,
) -> Result<Estimate, SimError> {
    let r0 = x0.norm();
    if !(eps > 0.0 && eps < r0 && r0 < delta) || n_paths == 0 {
        return Err(SimError::Invalid("need 0 < eps < |x0| < delta".into()));
    }
    let cfg = SimConfig {
        origin_eps: eps,
        ..cfg.clone()
    };
    cfg.validate()?;
    let stop = StopSpec::killed_sphere(delta);
    let out = run_ensemble(n_paths, cfg.seed, 0, |_, rng| {
        simulate_path(x0, &stop, &cfg, p, dp, rng).map(|r| r.killed_before(delta))
    });
    let mut xs = Vec::with_capacity(n_paths);
    let mut failed = 0;
    for o in out {
        match o {
            Ok(k) => xs.push(if k { 1.0 } else { 0.0 }),
            Err(SimError::ReflectionDiverged { .. }) | Err(SimError::MaxSteps { .. }) => failed += 1,
            Err(e) => return Err(e),
        }
    }
    let mut est = Estimate::from_samples(&xs, failed, (eps / r0).powf(-beta));
    // binomial standard error
    est.stderr = (est.mean * (1.0 - est.mean) / est.n_ok as f64).sqrt();
    Ok(est)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cone::{embed, invert, QCoords};

    fn setup(mu: f64) -> (ConeParams, DiffusionParams) {
        (
            ConeParams::example(mu).unwrap(),
            DiffusionParams::example(3, mu, vec![0.0; 3]).unwrap(),
        )
    }

    #[test]
    fn interior_step_has_no_push() {
        let (p, dp) = setup(3.0);
        let x = embed(&QCoords(vec![1.0, 1.0, 1.0]), &p);
        let (y, u) = reflect_step(&x.0, 1e-6, &[0.3, -0.2, 0.1], &p, &dp).unwrap();
        assert_eq!(u, vec![0.0; 3]);
        assert!(invert(&Point(y), &p).is_ok());
    }

    #[test]
    fn single_face_exit_pushes_one_coordinate() {
        let (p, dp) = setup(3.0);
        let x = embed(&QCoords(vec![1e-6, 1.0, 1.0]), &p);
        let (y, u) = reflect_step(&x.0, 1e-4, &[-3.0, 0.0, 0.0], &p, &dp).unwrap();
        assert!(u[0] > 0.0);
        assert_eq!(u[1], 0.0);
        assert_eq!(u[2], 0.0);
        let (q, faces) = invert(&Point(y), &p).unwrap();
        assert_eq!(faces.active, vec![0]);
        assert!(q.0[1] > 0.5 && q.0[2] > 0.5);
    }

    #[test]
    fn infinite_step_diverges() {
        let (p, dp) = setup(3.0);
        let r = reflect_step(&[1.0, 1.0, 1.0], f64::INFINITY, &[-1.0, -1.0, -1.0], &p, &dp);
        assert!(matches!(r, Err(SimError::ReflectionDiverged { .. })));
    }

    #[test]
    fn path_from_vertex_reaches_sphere() {
        let (p, dp) = setup(10.0);
        let cfg = SimConfig {
            dt_max: 1e-4,
            dt_rule: DtRule::RadiusScaled {
                kappa: 1e-3,
                dt_min: 1e-12,
            },
            ..Default::default()
        };
        let rec = simulate_path(&Point::zeros(3), &StopSpec::sphere(0.5), &cfg, &p, &dp, &mut path_rng(1, 0)).unwrap();
        let h = rec.hit(0.5).unwrap();
        assert!(h.time.is_finite() && h.time > 0.0);
        assert!((h.point.norm() - 0.5).abs() < 1e-12);
    }

    #[test]
    fn deterministic_given_seed() {
        let (p, dp) = setup(2.0);
        let cfg = SimConfig {
            record_path: true,
            dt_max: 1e-3,
            ..Default::default()
        };
        let x0 = embed(&QCoords(vec![0.1, 0.2, 0.3]), &p);
        let stop = StopSpec::sphere(2.0);
        let a = simulate_path(&x0, &stop, &cfg, &p, &dp, &mut path_rng(5, 3)).unwrap();
        let b = simulate_path(&x0, &stop, &cfg, &p, &dp, &mut path_rng(5, 3)).unwrap();
        assert_eq!(a, b);
        let c = simulate_path(&x0, &stop, &cfg, &p, &dp, &mut path_rng(5, 4)).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn local_time_only_moves_on_pushed_steps() {
        let (p, dp) = setup(2.0);
        let cfg = SimConfig {
            record_path: true,
            dt_max: 1e-3,
            ..Default::default()
        };
        let x0 = embed(&QCoords(vec![0.0, 0.01, 0.02]), &p);
        let rec = simulate_path(&x0, &StopSpec::sphere(1.0), &cfg, &p, &dp, &mut path_rng(2, 0)).unwrap();
        assert!(rec.pushed_steps > 0);
        for w in rec.local_time.windows(2).zip(rec.states.windows(2)) {
            let (lt, st) = w;
            let inc: Vec<f64> = lt[1].iter().zip(&lt[0]).map(|(a, b)| a - b).collect();
            assert!(inc.iter().all(|&v| v >= 0.0));
            let both_interior = [&st[0], &st[1]]
                .iter()
                .all(|s| invert(s, &p).map(|(_, f)| f.is_interior()).unwrap_or(false));
            if both_interior {
                // an interior end state means no push was applied
                assert!(inc.iter().all(|&v| v == 0.0));
            }
        }
    }

    #[test]
    fn quadratic_variation_matches_covariance() {
        let (p, dp) = setup(3.0);
        let x = embed(&QCoords(vec![1.0, 1.0, 1.0]), &p);
        let dt = 1e-8;
        let mut rng = path_rng(9, 0);
        let n = 100_000;
        let mut acc = nalgebra::DMatrix::<f64>::zeros(3, 3);
        let mut xi = [0.0; 3];
        for _ in 0..n {
            for v in xi.iter_mut() {
                *v = rng.sample(StandardNormal);
            }
            let (y, u) = reflect_step(&x.0, dt, &xi, &p, &dp).unwrap();
            assert_eq!(u, vec![0.0; 3]);
            let dx = nalgebra::DVector::from_iterator(3, y.iter().zip(&x.0).map(|(a, b)| a - b));
            acc += &dx * dx.transpose();
        }
        let emp = acc / (n as f64 * dt);
        let cov = dp.covariance();
        for i in 0..3 {
            assert!((emp[(i, i)] / cov[(i, i)] - 1.0).abs() < 0.05);
        }
        assert!(((emp.clone() - &cov).norm() / cov.norm()) < 0.05);
    }

    #[test]
    fn rescale_bookkeeping() {
        let (p, dp) = setup(3.0);
        let cfg = SimConfig {
            record_path: true,
            dt_max: 1e-3,
            ..Default::default()
        };
        let x0 = embed(&QCoords(vec![0.01, 0.02, 0.03]), &p);
        let rec = simulate_path(&x0, &StopSpec::sphere(1.0), &cfg, &p, &dp, &mut path_rng(0, 0)).unwrap();
        assert_eq!(rescale_path(&rec, 0, &dp).unwrap(), rec);
        let s = rescale_path(&rec, 1, &dp).unwrap();
        let h = s.hit(4.0).unwrap();
        assert_eq!(h.time, rec.hit(1.0).unwrap().time * 16.0);
        let dpb = DiffusionParams::example(3, 3.0, vec![0.1, 0.0, 0.0]).unwrap();
        assert_eq!(rescale_path(&rec, 1, &dpb), Err(SimError::DriftNotZero));
    }

    #[test]
    fn occupation_is_nested() {
        let (p, dp) = setup(10.0);
        let cfg = SimConfig {
            dt_rule: DtRule::RadiusScaled {
                kappa: 1e-3,
                dt_min: 1e-14,
            },
            ..Default::default()
        };
        let delta = 0.1;
        let stop = StopSpec {
            occupation_radii: vec![1e-2 * delta, 1e-3 * delta, 1e-4 * delta],
            ..StopSpec::sphere(delta)
        };
        let recs = run_ensemble(50, 4, 0, |_, rng| {
            simulate_path(&Point::zeros(3), &stop, &cfg, &p, &dp, rng).unwrap()
        });
        let mut tot = [0.0; 3];
        for r in &recs {
            for (k, (_, o)) in r.occupation.iter().enumerate() {
                tot[k] += o / r.end_time();
            }
        }
        assert!(tot[0] >= tot[1] && tot[1] >= tot[2]);
    }

    #[test]
    fn ensemble_is_schedule_independent() {
        let a = run_ensemble(64, 3, 0, |i, rng| (i, rng.gen::<u64>()));
        let pool = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
        let b = pool.install(|| run_ensemble(64, 3, 0, |i, rng| (i, rng.gen::<u64>())));
        assert_eq!(a, b);
    }
}
