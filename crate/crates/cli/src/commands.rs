//! One function per subcommand. Each returns the files to write and whether
//! the checked conditions held.

use std::fmt::Write as _;
use std::path::Path;

use nalgebra::DMatrix;
use orbm_core::cone::{check_condition_g, embed, BoundarySampler, ConeParams, Point, QCoords};
use orbm_core::ergodic::{normalized_limit, read_kernel_csv, ErgodicError, KernelSequence, NuSequence};
use orbm_core::generator::{beta_window, check_auxfunc, c_v, AuxSampler, BetaWindow, LyapunovKind, LyapunovSpec};
use orbm_core::hitting::{point_mass, uniqueness_experiment, UniquenessConfig};
use orbm_core::prelimit::{
    ctmc_simulate, fair_allocation, heavy_traffic_config, scaled_gap, scaled_workload, scaled_workload_compare,
    CompareSettings, CtmcSettings,
};
use orbm_core::sim::{mean_exit_from_origin, run_ensemble, simulate_path, survival_estimate, StopSpec};

use crate::config::{req, ExperimentConfig};
use crate::CliError;

pub struct Outcome {
    pub files: Vec<(String, Vec<u8>)>,
    pub conditions_hold: bool,
    /// Set when the run finished but did not converge; outputs are still written.
    pub numerical_failure: Option<String>,
    pub summary: String,
}

impl Outcome {
    fn new() -> Self {
        Outcome {
            files: Vec::new(),
            conditions_hold: true,
            numerical_failure: None,
            summary: String::new(),
        }
    }

    fn add(&mut self, name: &str, bytes: Vec<u8>) {
        self.files.push((name.to_string(), bytes));
    }

    fn text(&mut self, name: &str, s: &str) {
        self.summary.push_str(s);
        self.add(name, s.as_bytes().to_vec());
    }
}

fn csv_bytes(f: impl FnOnce(&mut Vec<u8>) -> csv::Result<()>) -> Result<Vec<u8>, CliError> {
    let mut buf = Vec::new();
    f(&mut buf).map_err(|e| CliError::Io(e.to_string()))?;
    Ok(buf)
}

fn numerical<E: std::fmt::Display>(e: E) -> CliError {
    CliError::Numerical(e.to_string())
}

fn start_point(cfg: &ExperimentConfig, p: &ConeParams, radius: f64) -> Result<Point, CliError> {
    let ex = cfg.experiment();
    if let Some(x) = ex.start {
        if x.len() != p.d {
            return Err(CliError::Config(format!("experiment.start must have {} entries", p.d)));
        }
        return Ok(Point(x));
    }
    let q = ex.direction.unwrap_or_else(|| vec![1.0; p.d]);
    if q.len() != p.d || q.iter().any(|v| !(*v >= 0.0)) || !(q.iter().sum::<f64>() > 0.0) {
        return Err(CliError::Config("experiment.direction must be nonnegative with one entry per resource".into()));
    }
    let x = embed(&QCoords(q), p);
    Ok(x.scaled(radius / x.norm()))
}

pub fn check_conditions(cfg: &ExperimentConfig, seed: u64) -> Result<Outcome, CliError> {
    let p = cfg.cone()?;
    let dp = cfg.diffusion()?;
    let ex = cfg.experiment();
    let mut out = Outcome::new();
    let mut text = String::new();
    let sampler = BoundarySampler {
        per_combination: ex.samples_per_face.unwrap_or(16),
        seed,
        radii: ex.radii.clone().unwrap_or_else(|| BoundarySampler::default().radii),
        ..Default::default()
    };
    let g = check_condition_g(&p, &sampler, ex.report_tol.unwrap_or(1e-10));
    text.push_str(&g.to_text());
    out.add("condition_g.csv", csv_bytes(|w| g.write_csv(w))?);
    out.conditions_hold &= g.pass;
    let w = beta_window(p.d, p.mu);
    match w {
        BetaWindow::Empty { beta_min } => {
            let _ = writeln!(text, "beta_window: empty (beta_min = {beta_min} >= 0)");
            let _ = writeln!(text, "auxfunc: no power-law Lyapunov function for this mu");
            out.conditions_hold = false;
        }
        BetaWindow::Open { beta_min } => {
            let _ = writeln!(text, "beta_window: ({beta_min}, 0)");
            let beta = ex.beta.unwrap_or(0.5 * beta_min);
            let cv = c_v(p.d, p.mu, beta);
            let spec = LyapunovSpec {
                kind: LyapunovKind::PowerLaw { beta },
                delta_w: ex.delta.unwrap_or(cv / (dp.drift_norm() + 1.0)),
            };
            let aux = AuxSampler {
                seed,
                ..Default::default()
            };
            match check_auxfunc(&spec, &p, &dp, &aux, ex.report_tol.unwrap_or(1e-10)) {
                Ok(r) => {
                    text.push_str(&r.to_text());
                    out.add("auxfunc.csv", csv_bytes(|w| r.write_csv(w))?);
                    out.conditions_hold &= r.pass;
                }
                Err(e) => {
                    let _ = writeln!(text, "auxfunc: {e}");
                    out.conditions_hold = false;
                }
            }
        }
    }
    out.text("conditions.txt", &text);
    Ok(out)
}

pub fn simulate_orbm(cfg: &ExperimentConfig, seed: u64) -> Result<Outcome, CliError> {
    let p = cfg.cone()?;
    let dp = cfg.diffusion()?;
    let ex = cfg.experiment();
    let delta = req(&ex.delta, "experiment.delta")?;
    let n = ex.paths.unwrap_or(1);
    let mut sim = cfg.sim(seed)?;
    let x0 = match (&ex.start, &ex.direction) {
        (None, None) => Point::zeros(p.d),
        _ => start_point(cfg, &p, 0.5 * delta)?,
    };
    let stop = match ex.eps {
        Some(e) if x0.norm() > e => {
            sim.origin_eps = e;
            StopSpec::killed_sphere(delta)
        }
        Some(_) => return Err(CliError::Config("experiment.eps must be below the starting radius".into())),
        None => StopSpec::sphere(delta),
    };
    let dump = cfg.output.as_ref().map(|o| o.path_csv).unwrap_or(false);
    let recs = run_ensemble(n, seed, 0, |i, rng| {
        let mut c = sim.clone();
        c.record_path = dump && i == 0;
        simulate_path(&x0, &stop, &c, &p, &dp, rng)
    });
    let mut out = Outcome::new();
    let mut rows = Vec::new();
    let mut failed = 0;
    for (i, r) in recs.iter().enumerate() {
        match r {
            Ok(rec) => {
                let killed = rec.killed_before(delta);
                let t = if killed {
                    rec.theta_proxy.unwrap_or(f64::NAN)
                } else {
                    rec.hit(delta).map(|h| h.time).unwrap_or(f64::NAN)
                };
                rows.push((i, t, killed));
                if i == 0 && dump {
                    out.add("path_0.csv", csv_bytes(|w| rec.write_csv(w))?);
                }
            }
            Err(_) => failed += 1,
        }
    }
    let fp = csv_bytes(|w| {
        let mut wr = csv::Writer::from_writer(w);
        wr.write_record(["seed", "path", "radius", "time", "killed_flag"])?;
        for (i, t, k) in &rows {
            wr.write_record([
                seed.to_string(),
                i.to_string(),
                delta.to_string(),
                t.to_string(),
                (*k as u8).to_string(),
            ])?;
        }
        wr.flush()?;
        Ok(())
    })?;
    out.add("first_passage.csv", fp);
    let mut text = String::new();
    let _ = writeln!(text, "paths: {n}");
    let _ = writeln!(text, "failed: {failed}");
    let _ = writeln!(text, "killed: {}", rows.iter().filter(|r| r.2).count());
    out.text("simulate.txt", &text);
    Ok(out)
}

pub fn exit_time(cfg: &ExperimentConfig, seed: u64) -> Result<Outcome, CliError> {
    let p = cfg.cone()?;
    let dp = cfg.diffusion()?;
    let ex = cfg.experiment();
    let delta = req(&ex.delta, "experiment.delta")?;
    let n = req(&ex.paths, "experiment.paths")?;
    let sim = cfg.sim(seed)?;
    let e = mean_exit_from_origin(delta, n, &sim, &p, &dp).map_err(numerical)?;
    let respected = e.mean <= e.bound * (1.0 + 3.0 * e.relative_stderr());
    let mut out = Outcome::new();
    out.add(
        "exit_time.csv",
        csv_bytes(|w| {
            let mut wr = csv::Writer::from_writer(w);
            wr.write_record(["delta", "mean", "stderr", "bound", "n_ok", "n_failed", "bound_respected"])?;
            wr.write_record([
                delta.to_string(),
                e.mean.to_string(),
                e.stderr.to_string(),
                e.bound.to_string(),
                e.n_ok.to_string(),
                e.n_failed.to_string(),
                respected.to_string(),
            ])?;
            wr.flush()?;
            Ok(())
        })?,
    );
    let mut text = String::new();
    let _ = writeln!(text, "mean exit time: {} +- {}", e.mean, e.stderr);
    let _ = writeln!(text, "bound 2 delta^2 / |sigma^T e|^2: {}", e.bound);
    let _ = writeln!(text, "bound respected: {respected}");
    out.text("exit_time.txt", &text);
    Ok(out)
}

pub fn survival_bound(cfg: &ExperimentConfig, seed: u64) -> Result<Outcome, CliError> {
    let p = cfg.cone()?;
    let dp = cfg.diffusion()?;
    let ex = cfg.experiment();
    let delta = req(&ex.delta, "experiment.delta")?;
    let beta = req(&ex.beta, "experiment.beta")?;
    let n = req(&ex.paths, "experiment.paths")?;
    let x0 = start_point(cfg, &p, 0.5 * delta)?;
    let eps = ex.eps.unwrap_or(x0.norm() / 100.0);
    let w = beta_window(p.d, p.mu);
    let mut out = Outcome::new();
    let mut text = String::new();
    if !w.contains(beta) {
        let _ = writeln!(text, "beta = {beta} is outside the window {w:?}; the bound does not apply");
        out.conditions_hold = false;
    }
    let sim = cfg.sim(seed)?;
    let e = survival_estimate(&x0, delta, eps, beta, n, &sim, &p, &dp).map_err(numerical)?;
    let respected = e.mean <= e.bound + 3.0 * e.stderr;
    out.add(
        "survival.csv",
        csv_bytes(|w| {
            let mut wr = csv::Writer::from_writer(w);
            wr.write_record(["delta", "x0_radius", "eps", "fraction", "stderr", "bound", "n_ok", "n_failed", "bound_respected"])?;
            wr.write_record([
                delta.to_string(),
                x0.norm().to_string(),
                eps.to_string(),
                e.mean.to_string(),
                e.stderr.to_string(),
                e.bound.to_string(),
                e.n_ok.to_string(),
                e.n_failed.to_string(),
                respected.to_string(),
            ])?;
            wr.flush()?;
            Ok(())
        })?,
    );
    let _ = writeln!(text, "P(hit eps-ball before sphere): {} +- {}", e.mean, e.stderr);
    let _ = writeln!(text, "bound (eps/|x0|)^(-beta): {}", e.bound);
    let _ = writeln!(text, "bound respected: {respected}");
    out.text("survival.txt", &text);
    Ok(out)
}

pub fn hitting_uniqueness(cfg: &ExperimentConfig, seed: u64) -> Result<Outcome, CliError> {
    let p = cfg.cone()?;
    let dp = cfg.diffusion()?;
    let ex = cfg.experiment();
    let delta = req(&ex.delta, "experiment.delta")?;
    let levels = req(&ex.levels, "experiment.levels")?;
    let cells = ex.cells.unwrap_or(64);
    let n_paths = req(&ex.paths, "experiment.paths")?;
    let nu_cells = ex.nu_cells.clone().unwrap_or_else(|| vec![0, cells / 2, cells.saturating_sub(1)]);
    if nu_cells.iter().any(|&c| c >= cells) {
        return Err(CliError::Config("experiment.nu_cells must index mesh cells".into()));
    }
    let u = UniquenessConfig {
        delta,
        levels,
        cells,
        n_paths,
        nus: nu_cells.iter().map(|&c| point_mass(cells, c)).collect(),
        bootstrap: ex.bootstrap.unwrap_or(200),
    };
    let mut sim = cfg.sim(seed)?;
    sim.record_path = false;
    let rep = uniqueness_experiment(&u, &sim, &p, &dp).map_err(numerical)?;
    let mut out = Outcome::new();
    for k in &rep.kernels {
        let mut buf = Vec::new();
        k.write_csv(&mut buf).map_err(|e| CliError::Io(e.to_string()))?;
        out.add(&format!("kernel_l{}.csv", k.level), buf);
    }
    out.add("tv.csv", csv_bytes(|w| rep.write_tv_csv(w))?);
    out.add(
        "hitting.csv",
        csv_bytes(|w| {
            let mut wr = csv::Writer::from_writer(w);
            let mut header = vec!["nu".to_string()];
            header.extend((0..rep.mesh.len()).map(|j| format!("c{j}")));
            wr.write_record(&header)?;
            for (i, h) in rep.hitting.iter().enumerate() {
                let mut row = vec![i.to_string()];
                row.extend(h.iter().map(|v| v.to_string()));
                wr.write_record(&row)?;
            }
            wr.flush()?;
            Ok(())
        })?,
    );
    out.text("uniqueness.txt", &rep.to_text());
    Ok(out)
}

fn builtin_sequence(name: &str, n: usize) -> Result<KernelSequence, CliError> {
    let q = match name {
        "two_state" => DMatrix::from_row_slice(2, 2, &[0.5, 0.3, 0.2, 0.4]),
        "identity" => DMatrix::identity(2, 2),
        other => return Err(CliError::Config(format!("unknown experiment.demo {other:?}"))),
    };
    KernelSequence::constant(q, n).map_err(numerical)
}

pub fn ergodic_demo(cfg: &ExperimentConfig, base: &Path) -> Result<Outcome, CliError> {
    let ex = cfg.experiment();
    let seq = match (&ex.kernel_files, &ex.demo) {
        (Some(files), _) => {
            let mut ks = Vec::new();
            for f in files {
                let path = base.join(f);
                let file = std::fs::File::open(&path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
                ks.push(read_kernel_csv(file).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?.matrix);
            }
            KernelSequence::new(ks).map_err(|e| CliError::Config(e.to_string()))?
        }
        (None, Some(name)) => builtin_sequence(name, ex.steps.unwrap_or(200))?,
        (None, None) => return Err(CliError::Config("set experiment.kernel_files or experiment.demo".into())),
    };
    let k0 = seq.space_size(0);
    let fs: Vec<Vec<f64>> = (0..k0).map(|j| point_mass(k0, j)).collect();
    let nus: Vec<NuSequence> = match ex.demo.as_deref() {
        Some("identity") if ex.kernel_files.is_none() => {
            vec![NuSequence::Cycle(vec![vec![1.0, 0.0], vec![0.0, 1.0]])]
        }
        _ => (0..3).map(|s| NuSequence::Random { seed: s }).collect(),
    };
    let tol = ex.tol.unwrap_or(1e-10);
    let horizon = ex.horizon.unwrap_or(500);
    let mut out = Outcome::new();
    let (diag, failure) = match normalized_limit(&seq, &fs, &nus, tol, horizon) {
        Ok(d) => (d, None),
        Err(ErgodicError::HorizonExceeded { diagnostics, horizon }) => {
            (*diagnostics, Some(format!("no convergence within {horizon} steps")))
        }
        Err(e) => return Err(numerical(e)),
    };
    out.add("ergodic_trace.csv", csv_bytes(|w| diag.write_trace_csv(w))?);
    let mut text = diag.to_text();
    if let Some(f) = &failure {
        let _ = writeln!(text, "failure: {f}");
    }
    out.text("ergodic.txt", &text);
    out.numerical_failure = failure;
    Ok(out)
}

pub fn prelimit(cfg: &ExperimentConfig, seed: u64) -> Result<Outcome, CliError> {
    let topo = cfg.topology()?;
    let ex = cfg.experiment();
    let b = cfg.drift()?;
    let r_list = req(&ex.r_list, "experiment.r_list")?;
    let t_end = req(&ex.t_end, "experiment.t_end")?;
    let reps = ex.replications.unwrap_or(1);
    let grid_points = ex.grid_points.unwrap_or(1000).max(2);
    let grid: Vec<f64> = (0..grid_points).map(|k| t_end * k as f64 / (grid_points - 1) as f64).collect();
    let mut out = Outcome::new();
    let mut text = String::new();
    let n0 = vec![1.0; topo.routes()];
    let a = fair_allocation(&n0, &topo).map_err(numerical)?;
    let _ = writeln!(text, "allocation at n = 1: {:?} (kkt residual {:e})", a.lambda, a.kkt_residual);
    for (ri, &r) in r_list.iter().enumerate() {
        let tr = heavy_traffic_config(&topo, r, &b, 1e-9).map_err(|e| CliError::Config(e.to_string()))?;
        let gap = scaled_gap(&tr, &topo, r);
        let _ = writeln!(text, "r = {r}: r(A rho^r - C) = {gap:?}");
        let settings = CtmcSettings {
            t_end: r * r * t_end,
            max_events: ex.max_events.unwrap_or(100_000_000),
            grid: grid.iter().map(|t| r * r * t).collect(),
            keep_jumps: false,
        };
        let paths = run_ensemble(reps, seed, (ri as u64) << 32, |_, rng| ctmc_simulate(&tr, &vec![0; tr.routes()], &settings, rng));
        let mut rows: Vec<Vec<String>> = Vec::new();
        for (k, pth) in paths.into_iter().enumerate() {
            let pth = pth.map_err(numerical)?;
            let x = scaled_workload(&tr, r, &grid, &pth.samples);
            for (t, v) in x.times.iter().zip(&x.values) {
                let mut row = vec![k.to_string(), t.to_string()];
                row.extend(v.iter().map(|z| z.to_string()));
                rows.push(row);
            }
            let _ = writeln!(text, "  replication {k}: {} events", pth.events);
        }
        let d = topo.resources();
        out.add(
            &format!("xr_r{r}.csv"),
            csv_bytes(|w| {
                let mut wr = csv::Writer::from_writer(w);
                let mut header = vec!["replication".to_string(), "t".to_string()];
                header.extend((1..=d).map(|j| format!("x{j}")));
                wr.write_record(&header)?;
                for row in &rows {
                    wr.write_record(row)?;
                }
                wr.flush()?;
                Ok(())
            })?,
        );
    }
    out.text("prelimit.txt", &text);
    Ok(out)
}

pub fn compare(cfg: &ExperimentConfig, seed: u64) -> Result<Outcome, CliError> {
    let topo = cfg.topology()?;
    let ex = cfg.experiment();
    let cs = CompareSettings {
        r_list: req(&ex.r_list, "experiment.r_list")?,
        drift: cfg.drift()?,
        t_end: req(&ex.t_end, "experiment.t_end")?,
        grid_points: ex.grid_points.unwrap_or(1000),
        replications: ex.replications.unwrap_or(100),
        seed,
        delta: req(&ex.delta, "experiment.delta")?,
        collar: ex.collar.unwrap_or(0.05),
        max_events: ex.max_events.unwrap_or(100_000_000),
    };
    let sim = cfg.sim(seed)?;
    let rep = scaled_workload_compare(&topo, &cs, &sim).map_err(numerical)?;
    let mut out = Outcome::new();
    out.add("compare.csv", csv_bytes(|w| rep.write_csv(w))?);
    out.text("compare.txt", &rep.to_text());
    Ok(out)
}
