//! Killed kernels between the spheres `|x| = 2^{−2l}δ` and the
//! hitting-distribution experiments built on them.
//!
//! Level `l` moves from radius `2^{−2l}δ` out to `2^{−2(l−1)}δ`; reaching the
//! origin proxy `B(origin_eps)` first kills the path. Each row of a kernel is
//! estimated by launching paths from the representative point of one cell.
//!
//! Random streams: path `j` from cell `i` at level `l` uses stream
//! `(l << 48) | (i << 24) | j` under the simulation seed.

use std::f64::consts::PI;
use std::fmt::Write as _;

use nalgebra::DMatrix;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Binomial, Distribution};
use rayon::prelude::*;
use thiserror::Error;

use crate::cone::{dot, embed, norm, ConeParams, Point, QCoords};
use crate::ergodic::{check_assumptions, hitting_distribution, total_variation, write_kernel_csv, ErgodicError, Floors};
use crate::generator::DiffusionParams;
use crate::sim::{path_rng, rescale_path, simulate_path, SimConfig, SimError, StopSpec};

#[derive(Error, Debug, Clone, PartialEq)]
pub enum HittingError {
    #[error("no mesh direction lies in the cone")]
    EmptyCone,
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Ergodic(#[from] ErgodicError),
    #[error("invalid experiment settings: {0}")]
    Invalid(String),
}

/// Cells on `𝒲̄ ∩ ∂B_radius`: the spherical Voronoi cells of a fixed set of
/// unit directions inside the cone.
///
/// The directions are images of points of the simplex `{q ≥ 0, Σq = 1}`:
/// centroids of the `m²` triangles of an `m`-fold subdivision when `d = 3` and
/// `K = m²`, midpoints of `K` equal pieces when `d = 2`, and otherwise the
/// centroid followed by a deterministic low-discrepancy sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct SphereMesh {
    pub radius: f64,
    pub directions: Vec<Vec<f64>>,
    /// Largest angle (radians) between a cell's direction and any sampled
    /// direction assigned to it.
    pub cap_radius: Vec<f64>,
    pub warnings: Vec<String>,
}

impl SphereMesh {
    pub fn len(&self) -> usize {
        self.directions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.directions.is_empty()
    }

    pub fn representative(&self, i: usize) -> Point {
        Point(self.directions[i].iter().map(|v| v * self.radius).collect())
    }

    /// Cell whose direction is closest in angle to `x`.
    pub fn assign(&self, x: &[f64]) -> usize {
        let mut best = 0;
        let mut best_dot = f64::NEG_INFINITY;
        for (i, d) in self.directions.iter().enumerate() {
            let c = dot(d, x);
            if c > best_dot {
                best_dot = c;
                best = i;
            }
        }
        best
    }

    /// The same cells at another radius.
    pub fn at_radius(&self, radius: f64) -> SphereMesh {
        SphereMesh {
            radius,
            ..self.clone()
        }
    }

    pub fn max_cap_radius(&self) -> f64 {
        self.cap_radius.iter().cloned().fold(0.0, f64::max)
    }

    /// Normalized histogram of directions over the cells.
    pub fn histogram<'a>(&self, points: impl IntoIterator<Item = &'a [f64]>) -> Vec<f64> {
        let mut h = vec![0.0; self.len()];
        let mut n = 0usize;
        for x in points {
            h[self.assign(x)] += 1.0;
            n += 1;
        }
        if n > 0 {
            for v in h.iter_mut() {
                *v /= n as f64;
            }
        }
        h
    }
}

/// Additive recurrence with the generalized golden ratio; returns points of
/// `[0,1)^{dim}`.
fn r_sequence(dim: usize, n: usize, skip: usize) -> Vec<Vec<f64>> {
    let mut phi = 2.0f64;
    for _ in 0..64 {
        phi = (1.0 + phi).powf(1.0 / (dim as f64 + 1.0));
    }
    let alpha: Vec<f64> = (1..=dim).map(|j| (1.0 / phi.powi(j as i32)).fract()).collect();
    (skip..skip + n)
        .map(|i| alpha.iter().map(|a| (0.5 + a * (i + 1) as f64).fract()).collect())
        .collect()
}

/// Point of the simplex in `ℝ^d` from `u ∈ [0,1)^{d−1}` via sorted spacings.
fn simplex_from_cube(u: &[f64]) -> Vec<f64> {
    let mut cuts: Vec<f64> = u.to_vec();
    cuts.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let mut out = Vec::with_capacity(u.len() + 1);
    let mut prev = 0.0;
    for c in cuts {
        out.push(c - prev);
        prev = c;
    }
    out.push(1.0 - prev);
    out
}

fn simplex_points(d: usize, k: usize) -> Vec<Vec<f64>> {
    if d == 2 {
        return (0..k)
            .map(|i| {
                let t = (i as f64 + 0.5) / k as f64;
                vec![t, 1.0 - t]
            })
            .collect();
    }
    let m = (k as f64).sqrt().round() as usize;
    if d == 3 && m * m == k {
        let mf = m as f64;
        let mut pts = Vec::with_capacity(k);
        for i in 0..m {
            for j in 0..m - i {
                let l = m - 1 - i - j;
                pts.push(vec![
                    (i as f64 + 1.0 / 3.0) / mf,
                    (j as f64 + 1.0 / 3.0) / mf,
                    (l as f64 + 1.0 / 3.0) / mf,
                ]);
                if i + j + 2 <= m {
                    let l = m - 2 - i - j;
                    pts.push(vec![
                        (i as f64 + 2.0 / 3.0) / mf,
                        (j as f64 + 2.0 / 3.0) / mf,
                        (l as f64 + 2.0 / 3.0) / mf,
                    ]);
                }
            }
        }
        return pts;
    }
    let mut pts = vec![vec![1.0 / d as f64; d]];
    pts.extend(r_sequence(d - 1, k - 1, 0).iter().map(|u| simplex_from_cube(u)));
    pts
}

fn unit(v: &[f64]) -> Vec<f64> {
    let n = norm(v);
    v.iter().map(|x| x / n).collect()
}

pub fn sphere_mesh(radius: f64, k: usize, p: &ConeParams) -> Result<SphereMesh, HittingError> {
    if !(radius > 0.0) {
        return Err(HittingError::Invalid("mesh radius must be positive".into()));
    }
    if k == 0 {
        return Err(HittingError::EmptyCone);
    }
    let directions: Vec<Vec<f64>> = simplex_points(p.d, k)
        .into_iter()
        .map(|q| unit(&embed(&QCoords(q), p).0))
        .filter(|u| u.iter().all(|v| v.is_finite()))
        .collect();
    if directions.is_empty() {
        return Err(HittingError::EmptyCone);
    }
    let mut mesh = SphereMesh {
        radius,
        cap_radius: vec![0.0; directions.len()],
        directions,
        warnings: Vec::new(),
    };
    let probes = r_sequence(p.d - 1, 4096, 7919)
        .into_iter()
        .map(|u| simplex_from_cube(&u))
        .chain((0..p.d).map(|h| {
            let mut q = vec![0.0; p.d];
            q[h] = 1.0;
            q
        }));
    for q in probes {
        let u = unit(&embed(&QCoords(q), p).0);
        let i = mesh.assign(&u);
        let ang = dot(&u, &mesh.directions[i]).clamp(-1.0, 1.0).acos();
        if ang > mesh.cap_radius[i] {
            mesh.cap_radius[i] = ang;
        }
    }
    if k < 4 {
        mesh.warnings
            .push(format!("coarse mesh: K = {k} < 4 cells, hitting distributions are poorly resolved"));
    }
    if mesh.max_cap_radius() > PI / 8.0 {
        mesh.warnings.push(format!(
            "coarse mesh: largest cell cap radius {:.3} rad",
            mesh.max_cap_radius()
        ));
    }
    Ok(mesh)
}

/// Radius of the level-`l` sphere, `2^{−2l}δ`.
pub fn level_radius(delta: f64, l: usize) -> f64 {
    delta * 2f64.powi(-2 * l as i32)
}

#[derive(Debug, Clone, PartialEq)]
pub struct KilledKernel {
    pub level: usize,
    pub source_radius: f64,
    pub target_radius: f64,
    /// Rows are source cells, columns target cells.
    pub matrix: DMatrix<f64>,
    /// Binomial standard error of each entry.
    pub stderr: DMatrix<f64>,
    pub kill: Vec<f64>,
    /// Paths that finished, per row.
    pub n_paths: Vec<usize>,
    /// Paths that ended in a simulator failure, per row; excluded above.
    pub failed: Vec<usize>,
}

impl KilledKernel {
    pub fn max_row_sum(&self) -> f64 {
        self.matrix.row_iter().map(|r| r.sum()).fold(0.0, f64::max)
    }

    pub fn total_failed(&self) -> usize {
        self.failed.iter().sum()
    }

    pub fn write_csv<W: std::io::Write>(&self, w: W) -> std::io::Result<()> {
        let meta = vec![
            ("level".to_string(), self.level.to_string()),
            ("source_radius".to_string(), self.source_radius.to_string()),
            ("target_radius".to_string(), self.target_radius.to_string()),
            ("rows".to_string(), self.matrix.nrows().to_string()),
            ("cols".to_string(), self.matrix.ncols().to_string()),
        ];
        let extra = [
            ("n_paths", self.n_paths.iter().map(|v| v.to_string()).collect()),
            ("failed", self.failed.iter().map(|v| v.to_string()).collect()),
        ];
        write_kernel_csv(w, &self.matrix, &meta, &extra)
    }

    /// One multinomial resample of every row, keeping the row counts.
    pub fn resample<R: Rng + ?Sized>(&self, rng: &mut R) -> DMatrix<f64> {
        let (rows, cols) = self.matrix.shape();
        let mut out = DMatrix::zeros(rows, cols);
        for i in 0..rows {
            let n = self.n_paths[i] as u64;
            if n == 0 {
                continue;
            }
            let mut left = n;
            let mut mass = 1.0;
            for j in 0..cols {
                if left == 0 || mass <= 0.0 {
                    break;
                }
                let pj = (self.matrix[(i, j)] / mass).clamp(0.0, 1.0);
                let c = Binomial::new(left, pj).map(|b| b.sample(rng)).unwrap_or(0);
                out[(i, j)] = c as f64 / n as f64;
                left -= c;
                mass -= self.matrix[(i, j)];
            }
        }
        out
    }
}

fn stream_id(tag: u64, cell: usize, path: usize) -> u64 {
    (tag << 48) | ((cell as u64) << 24) | path as u64
}

enum Outcome {
    Hit(usize),
    Killed,
    Failed,
}

/// Kernel from the cells of `source` to the cells of `target`
/// (`target.radius > source.radius`). `tag` selects the random streams.
pub fn estimate_kernel_between(
    source: &SphereMesh,
    target: &SphereMesh,
    n_paths: usize,
    tag: u64,
    cfg: &SimConfig,
    p: &ConeParams,
    dp: &DiffusionParams,
) -> Result<KilledKernel, HittingError> {
    if n_paths == 0 || n_paths >= 1 << 24 || source.len() >= 1 << 24 {
        return Err(HittingError::Invalid("path count per cell out of range".into()));
    }
    if !(target.radius > source.radius) {
        return Err(HittingError::Invalid("target sphere must lie outside the source".into()));
    }
    if source.radius <= cfg.origin_eps {
        return Err(HittingError::Invalid("source sphere inside the origin proxy".into()));
    }
    cfg.validate()?;
    let stop = StopSpec::killed_sphere(target.radius);
    let k = source.len();
    let outcomes: Vec<Result<Outcome, SimError>> = (0..k * n_paths)
        .into_par_iter()
        .map(|idx| {
            let (cell, path) = (idx / n_paths, idx % n_paths);
            let mut rng = path_rng(cfg.seed, stream_id(tag, cell, path));
            match simulate_path(&source.representative(cell), &stop, cfg, p, dp, &mut rng) {
                Ok(rec) => Ok(if rec.killed_before(target.radius) {
                    Outcome::Killed
                } else {
                    match rec.hit(target.radius) {
                        Some(h) => Outcome::Hit(target.assign(&h.point.0)),
                        None => Outcome::Failed,
                    }
                }),
                Err(SimError::MaxSteps { .. }) | Err(SimError::ReflectionDiverged { .. }) => Ok(Outcome::Failed),
                Err(e) => Err(e),
            }
        })
        .collect();
    let kt = target.len();
    let mut counts = DMatrix::<f64>::zeros(k, kt);
    let mut kills = vec![0usize; k];
    let mut ok = vec![0usize; k];
    let mut failed = vec![0usize; k];
    for (idx, o) in outcomes.into_iter().enumerate() {
        let cell = idx / n_paths;
        match o? {
            Outcome::Hit(j) => {
                counts[(cell, j)] += 1.0;
                ok[cell] += 1;
            }
            Outcome::Killed => {
                kills[cell] += 1;
                ok[cell] += 1;
            }
            Outcome::Failed => failed[cell] += 1,
        }
    }
    let mut matrix = DMatrix::zeros(k, kt);
    let mut stderr = DMatrix::zeros(k, kt);
    let mut kill = vec![0.0; k];
    for i in 0..k {
        if ok[i] == 0 {
            continue;
        }
        let n = ok[i] as f64;
        for j in 0..kt {
            let f = counts[(i, j)] / n;
            matrix[(i, j)] = f;
            stderr[(i, j)] = (f * (1.0 - f) / n).sqrt();
        }
        kill[i] = kills[i] as f64 / n;
    }
    Ok(KilledKernel {
        level: tag as usize,
        source_radius: source.radius,
        target_radius: target.radius,
        matrix,
        stderr,
        kill,
        n_paths: ok,
        failed,
    })
}

/// `Q_l`: from `|x| = 2^{−2l}δ` to `|x| = 2^{−2(l−1)}δ`, on the cells of `mesh`.
pub fn estimate_kernel(
    level: usize,
    delta: f64,
    mesh: &SphereMesh,
    n_paths: usize,
    cfg: &SimConfig,
    p: &ConeParams,
    dp: &DiffusionParams,
) -> Result<KilledKernel, HittingError> {
    if level == 0 {
        return Err(HittingError::Invalid("levels start at 1".into()));
    }
    let source = mesh.at_radius(level_radius(delta, level));
    let target = mesh.at_radius(level_radius(delta, level - 1));
    estimate_kernel_between(&source, &target, n_paths, level as u64, cfg, p, dp)
}

/// `Q_l ⋯ Q_1` evaluated on `𝟙`: min/max survival ratio after each level.
#[derive(Debug, Clone, PartialEq)]
pub struct RatioBound {
    pub per_level: Vec<f64>,
    pub overall: f64,
}

/// `kernels` in level order `Q_1, …, Q_n`.
pub fn ratio_bound_estimate(kernels: &[DMatrix<f64>]) -> Result<RatioBound, HittingError> {
    let seq = crate::ergodic::KernelSequence::new(kernels.to_vec())?;
    let a = check_assumptions(&seq, Floors { c0: 0.0, eps: 0.0 })?;
    Ok(RatioBound {
        overall: a.c0,
        per_level: a.c0_trace,
    })
}

pub fn point_mass(k: usize, i: usize) -> Vec<f64> {
    let mut v = vec![0.0; k];
    v[i] = 1.0;
    v
}

#[derive(Debug, Clone, PartialEq)]
pub struct UniquenessConfig {
    pub delta: f64,
    pub levels: usize,
    pub cells: usize,
    pub n_paths: usize,
    /// Initial distributions on the innermost mesh.
    pub nus: Vec<Vec<f64>>,
    pub bootstrap: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TvEntry {
    pub a: usize,
    pub b: usize,
    pub tv: f64,
    pub boot_mean: f64,
    pub boot_sd: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct UniquenessReport {
    pub mesh: SphereMesh,
    /// `Q_1, …, Q_n`.
    pub kernels: Vec<KilledKernel>,
    /// Normalized hitting distribution on `∂B_δ`, one per initial distribution.
    pub hitting: Vec<Vec<f64>>,
    pub tv: Vec<TvEntry>,
    pub max_tv: f64,
    pub ratio: RatioBound,
    pub eps0: f64,
    pub warnings: Vec<String>,
}

impl UniquenessReport {
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "levels: {}", self.kernels.len());
        let _ = writeln!(out, "cells: {}", self.mesh.len());
        let _ = writeln!(out, "max_cap_radius: {}", self.mesh.max_cap_radius());
        for k in &self.kernels {
            let kill = k.kill.iter().cloned().fold(0.0, f64::max);
            let _ = writeln!(
                out,
                "level {}: radius {} -> {}, max kill {}, failed paths {}",
                k.level,
                k.source_radius,
                k.target_radius,
                kill,
                k.total_failed()
            );
        }
        let _ = writeln!(out, "c0: {}", self.ratio.overall);
        let _ = writeln!(out, "eps0: {}", self.eps0);
        for t in &self.tv {
            let _ = writeln!(
                out,
                "tv({},{}): {} bootstrap mean {} sd {}",
                t.a, t.b, t.tv, t.boot_mean, t.boot_sd
            );
        }
        let _ = writeln!(out, "max_tv: {}", self.max_tv);
        for w in &self.warnings {
            let _ = writeln!(out, "warning: {w}");
        }
        out
    }

    /// CSV with columns `a, b, tv, boot_mean, boot_sd`.
    pub fn write_tv_csv<W: std::io::Write>(&self, w: W) -> csv::Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        wr.write_record(["a", "b", "tv", "boot_mean", "boot_sd"])?;
        for t in &self.tv {
            wr.write_record([
                t.a.to_string(),
                t.b.to_string(),
                t.tv.to_string(),
                t.boot_mean.to_string(),
                t.boot_sd.to_string(),
            ])?;
        }
        wr.flush()?;
        Ok(())
    }
}

fn pairwise_tv(h: &[Vec<f64>]) -> Vec<(usize, usize, f64)> {
    let mut out = Vec::new();
    for a in 0..h.len() {
        for b in a + 1..h.len() {
            out.push((a, b, total_variation(&h[a], &h[b])));
        }
    }
    out
}

/// Estimates `Q_1, …, Q_n` once and compares the hitting distributions on
/// `∂B_δ` reached from each initial distribution. Error bars come from a
/// parametric bootstrap of the kernel rows.
pub fn uniqueness_experiment(
    ucfg: &UniquenessConfig,
    cfg: &SimConfig,
    p: &ConeParams,
    dp: &DiffusionParams,
) -> Result<UniquenessReport, HittingError> {
    let n = ucfg.levels;
    if n == 0 || n > 5 {
        return Err(HittingError::Invalid(format!("levels must be in 1..=5, got {n}")));
    }
    if level_radius(ucfg.delta, n) < 100.0 * cfg.origin_eps {
        return Err(HittingError::Invalid(format!(
            "innermost radius {} is below 100 * origin_eps",
            level_radius(ucfg.delta, n)
        )));
    }
    if ucfg.nus.is_empty() {
        return Err(HittingError::Invalid("no initial distributions".into()));
    }
    let mesh = sphere_mesh(ucfg.delta, ucfg.cells, p)?;
    for nu in &ucfg.nus {
        if nu.len() != mesh.len() || nu.iter().any(|v| !(*v >= 0.0)) || !(nu.iter().sum::<f64>() > 0.0) {
            return Err(HittingError::Invalid("initial distributions must be nonnegative weights on the mesh".into()));
        }
    }
    let kernels = (1..=n)
        .map(|l| estimate_kernel(l, ucfg.delta, &mesh, ucfg.n_paths, cfg, p, dp))
        .collect::<Result<Vec<_>, _>>()?;
    let mats: Vec<DMatrix<f64>> = kernels.iter().map(|k| k.matrix.clone()).collect();
    let hitting = ucfg
        .nus
        .iter()
        .map(|nu| hitting_distribution(&mats, nu))
        .collect::<Result<Vec<_>, _>>()?;
    let tv0 = pairwise_tv(&hitting);
    let boots: Vec<Option<Vec<f64>>> = (0..ucfg.bootstrap)
        .into_par_iter()
        .map(|b| {
            let mut rng: ChaCha8Rng = path_rng(cfg.seed ^ 0xB0075, b as u64);
            let ms: Vec<DMatrix<f64>> = kernels.iter().map(|k| k.resample(&mut rng)).collect();
            let h: Option<Vec<Vec<f64>>> = ucfg.nus.iter().map(|nu| hitting_distribution(&ms, nu).ok()).collect();
            h.map(|h| pairwise_tv(&h).into_iter().map(|t| t.2).collect())
        })
        .collect();
    let boots: Vec<Vec<f64>> = boots.into_iter().flatten().collect();
    let tv: Vec<TvEntry> = tv0
        .iter()
        .enumerate()
        .map(|(i, &(a, b, t))| {
            let xs: Vec<f64> = boots.iter().map(|v| v[i]).collect();
            let m = xs.len() as f64;
            let mean = xs.iter().sum::<f64>() / m;
            let sd = if xs.len() > 1 {
                (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (m - 1.0)).sqrt()
            } else {
                f64::NAN
            };
            TvEntry {
                a,
                b,
                tv: t,
                boot_mean: mean,
                boot_sd: sd,
            }
        })
        .collect();
    let max_tv = tv.iter().map(|t| t.tv).fold(0.0, f64::max);
    let ratio = ratio_bound_estimate(&mats)?;
    let seq = crate::ergodic::KernelSequence::new(mats)?;
    let eps0 = check_assumptions(&seq, Floors::default())?.eps0;
    let mut warnings = mesh.warnings.clone();
    let failed: usize = kernels.iter().map(|k| k.total_failed()).sum();
    if failed > 0 {
        warnings.push(format!("{failed} paths failed and were excluded"));
    }
    Ok(UniquenessReport {
        mesh,
        kernels,
        hitting,
        tv,
        max_tv,
        ratio,
        eps0,
        warnings,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct SelfSimilarityReport {
    pub hist_outer: Vec<f64>,
    pub hist_inner_rescaled: Vec<f64>,
    pub tv: f64,
    pub failed: usize,
}

/// Hitting directions on `∂B_{2|x0|}` from `x0`, against those on
/// `∂B_{|x0|/2}` from `x0/4` after rescaling by four. The two ensembles use
/// streams `[0, n)` under `seeds.0` and `seeds.1`.
pub fn self_similarity_experiment(
    x0: &Point,
    n_paths: usize,
    cells: usize,
    seeds: (u64, u64),
    cfg: &SimConfig,
    p: &ConeParams,
    dp: &DiffusionParams,
) -> Result<SelfSimilarityReport, HittingError> {
    if !dp.has_zero_drift() {
        return Err(SimError::DriftNotZero.into());
    }
    let r = x0.norm();
    if !(r > 0.0) {
        return Err(HittingError::Invalid("start point must differ from the vertex".into()));
    }
    let mesh = sphere_mesh(2.0 * r, cells, p)?;
    let run = |start: &Point, radius: f64, seed: u64, rescale: bool| -> Result<(Vec<Vec<f64>>, usize), HittingError> {
        let stop = StopSpec::sphere(radius);
        let res: Vec<Result<Option<Vec<f64>>, SimError>> = (0..n_paths)
            .into_par_iter()
            .map(|i| {
                let mut rng = path_rng(seed, i as u64);
                match simulate_path(start, &stop, cfg, p, dp, &mut rng) {
                    Ok(rec) => {
                        let rec = if rescale { rescale_path(&rec, 1, dp)? } else { rec };
                        Ok(rec.tau_hits.first().map(|h| h.point.0.clone()))
                    }
                    Err(SimError::MaxSteps { .. }) | Err(SimError::ReflectionDiverged { .. }) => Ok(None),
                    Err(e) => Err(e),
                }
            })
            .collect();
        let mut pts = Vec::with_capacity(n_paths);
        let mut failed = 0;
        for r in res {
            match r? {
                Some(x) => pts.push(x),
                None => failed += 1,
            }
        }
        Ok((pts, failed))
    };
    let (outer, f1) = run(x0, 2.0 * r, seeds.0, false)?;
    let (inner, f2) = run(&x0.scaled(0.25), 0.5 * r, seeds.1, true)?;
    let hist_outer = mesh.histogram(outer.iter().map(|v| v.as_slice()));
    let hist_inner_rescaled = mesh.histogram(inner.iter().map(|v| v.as_slice()));
    Ok(SelfSimilarityReport {
        tv: total_variation(&hist_outer, &hist_inner_rescaled),
        hist_outer,
        hist_inner_rescaled,
        failed: f1 + f2,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cone::contains;
    use crate::sim::DtRule;

    fn setup(mu: f64) -> (ConeParams, DiffusionParams) {
        (
            ConeParams::example(mu).unwrap(),
            DiffusionParams::example(3, mu, vec![0.0; 3]).unwrap(),
        )
    }

    #[test]
    fn mesh_examples() {
        let (p, _) = setup(10.0);
        let m = sphere_mesh(1.0, 1, &p).unwrap();
        let s = 1.0 / 3f64.sqrt();
        for v in &m.directions[0] {
            assert!((v - s).abs() < 1e-15);
        }
        assert!(!m.warnings.is_empty());
        for k in [4, 9, 16, 64, 10] {
            let m = sphere_mesh(0.5, k, &p).unwrap();
            assert_eq!(m.len(), k);
            for i in 0..k {
                assert!(contains(&m.representative(i).0, &p));
                assert!((m.representative(i).norm() - 0.5).abs() < 1e-14);
            }
            let m4 = m.at_radius(0.125);
            assert_eq!(m4.directions, m.directions);
            assert_eq!(m4.cap_radius, m.cap_radius);
        }
        let m = sphere_mesh(1.0, 64, &p).unwrap();
        assert!(m.warnings.is_empty(), "{:?}", m.warnings);
    }

    #[test]
    fn resample_keeps_row_mass_bounded() {
        let k = KilledKernel {
            level: 1,
            source_radius: 0.1,
            target_radius: 0.4,
            matrix: DMatrix::from_row_slice(2, 3, &[0.2, 0.3, 0.4, 0.0, 0.5, 0.5]),
            stderr: DMatrix::zeros(2, 3),
            kill: vec![0.1, 0.0],
            n_paths: vec![1000, 1000],
            failed: vec![0, 0],
        };
        let mut rng = path_rng(1, 1);
        let r = k.resample(&mut rng);
        assert!(r.row(0).sum() <= 1.0 + 1e-12);
        assert!((r.row(1).sum() - 1.0).abs() < 1e-12);
        assert_eq!(r[(1, 0)], 0.0);
    }

    #[test]
    fn small_kernel_is_substochastic() {
        let (p, dp) = setup(10.0);
        let cfg = SimConfig {
            dt_max: 1e-3,
            dt_rule: DtRule::RadiusScaled {
                kappa: 2e-3,
                dt_min: 1e-14,
            },
            origin_eps: 1e-4,
            ..Default::default()
        };
        let mesh = sphere_mesh(0.5, 4, &p).unwrap();
        let k = estimate_kernel(1, 0.5, &mesh, 200, &cfg, &p, &dp).unwrap();
        assert!(k.max_row_sum() <= 1.0 + 1e-12);
        for i in 0..4 {
            assert!((k.matrix.row(i).sum() + k.kill[i] - 1.0).abs() < 1e-12);
        }
        let again = estimate_kernel(1, 0.5, &mesh, 200, &cfg, &p, &dp).unwrap();
        assert_eq!(k, again);
    }

    #[test]
    fn ratio_bound_no_kill() {
        let q = DMatrix::from_row_slice(2, 2, &[0.5, 0.5, 0.1, 0.9]);
        let r = ratio_bound_estimate(&[q.clone(), q]).unwrap();
        assert!((r.overall - 1.0).abs() < 1e-15);
    }

    #[test]
    fn repeated_nu_gives_zero_tv() {
        let (p, dp) = setup(10.0);
        let cfg = SimConfig {
            dt_max: 1e-3,
            dt_rule: DtRule::RadiusScaled {
                kappa: 4e-3,
                dt_min: 1e-14,
            },
            origin_eps: 1e-5,
            ..Default::default()
        };
        let u = UniquenessConfig {
            delta: 0.5,
            levels: 1,
            cells: 2,
            n_paths: 50,
            nus: vec![point_mass(2, 0), point_mass(2, 0)],
            bootstrap: 5,
        };
        let rep = uniqueness_experiment(&u, &cfg, &p, &dp).unwrap();
        assert_eq!(rep.max_tv, 0.0);
        assert!(rep.warnings.iter().any(|w| w.contains("coarse")));
    }
}
