//! Small Monte Carlo checks on estimated kernels: substochastic rows,
//! Chapman–Kolmogorov nesting, and scale invariance at zero drift.

use nalgebra::DMatrix;
use orbm_core::cone::ConeParams;
use orbm_core::generator::DiffusionParams;
use orbm_core::hitting::{estimate_kernel_between, sphere_mesh, KilledKernel};
use orbm_core::sim::{DtRule, SimConfig};

const PATHS: usize = 2000;

fn setup() -> (ConeParams, DiffusionParams, SimConfig) {
    let p = ConeParams::example(10.0).unwrap();
    let dp = DiffusionParams::example(3, 10.0, vec![0.0; 3]).unwrap();
    let cfg = SimConfig {
        dt_max: 1e-3,
        dt_rule: DtRule::RadiusScaled {
            kappa: 1e-3,
            dt_min: 1e-14,
        },
        origin_eps: 1e-6,
        seed: 17,
        ..Default::default()
    };
    (p, dp, cfg)
}

fn kernel(r0: f64, r1: f64, tag: u64) -> KilledKernel {
    let (p, dp, cfg) = setup();
    let mesh = sphere_mesh(1.0, 9, &p).unwrap();
    estimate_kernel_between(&mesh.at_radius(r0), &mesh.at_radius(r1), PATHS, tag, &cfg, &p, &dp).unwrap()
}

fn within_three_sd(a: &DMatrix<f64>, sa: &DMatrix<f64>, b: &DMatrix<f64>, sb: &DMatrix<f64>) -> Result<(), String> {
    for i in 0..a.nrows() {
        for j in 0..a.ncols() {
            let sd = (sa[(i, j)].powi(2) + sb[(i, j)].powi(2)).sqrt();
            // a cell with no hits in either estimate has zero stderr
            let sd = sd.max(1.0 / PATHS as f64);
            if (a[(i, j)] - b[(i, j)]).abs() > 3.0 * sd {
                return Err(format!("cell ({i},{j}): {} vs {} (sd {sd})", a[(i, j)], b[(i, j)]));
            }
        }
    }
    Ok(())
}

#[test]
fn chapman_kolmogorov() {
    let k01 = kernel(0.01, 0.04, 1);
    let k12 = kernel(0.04, 0.16, 2);
    let k02 = kernel(0.01, 0.16, 3);
    for k in [&k01, &k12, &k02] {
        assert!(k.max_row_sum() <= 1.0 + 1e-12);
        for (i, kill) in k.kill.iter().enumerate() {
            assert!((kill - (1.0 - k.matrix.row(i).sum())).abs() < 1e-12);
        }
    }
    let prod = &k01.matrix * &k12.matrix;
    let mut var = DMatrix::zeros(prod.nrows(), prod.ncols());
    for i in 0..prod.nrows() {
        for j in 0..prod.ncols() {
            for m in 0..k01.matrix.ncols() {
                var[(i, j)] += (k12.matrix[(m, j)] * k01.stderr[(i, m)]).powi(2)
                    + (k01.matrix[(i, m)] * k12.stderr[(m, j)]).powi(2);
            }
        }
    }
    let sd = var.map(f64::sqrt);
    within_three_sd(&prod, &sd, &k02.matrix, &k02.stderr).unwrap();
}

#[test]
fn scale_invariance() {
    let outer = kernel(0.04, 0.16, 4);
    let inner = kernel(0.01, 0.04, 5);
    within_three_sd(&outer.matrix, &outer.stderr, &inner.matrix, &inner.stderr).unwrap();
}
