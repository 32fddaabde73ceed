//! Shared helpers for the integration and acceptance suites: random scene
//! builders and the central-finite-difference oracle every analytic gradient
//! is checked against.

#![allow(dead_code)]

use ctsplat::types::{Aabb, GaussianCloud, GaussianKernel, GeometryMode, ScanGeometry};
use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn random_unit_quat(rng: &mut impl Rng) -> [f64; 4] {
    loop {
        let q: [f64; 4] = [
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
        ];
        let n: f64 = q.iter().map(|v| v * v).sum::<f64>().sqrt();
        if n > 0.2 {
            return [q[0] / n, q[1] / n, q[2] / n, q[3] / n];
        }
    }
}

pub fn random_cloud(rng: &mut impl Rng, n: usize) -> GaussianCloud {
    let kernels = (0..n)
        .map(|_| {
            GaussianKernel::new(
                rng.gen_range(0.2..1.5),
                Vector3::new(
                    rng.gen_range(-0.5..0.5),
                    rng.gen_range(-0.5..0.5),
                    rng.gen_range(-0.5..0.5),
                ),
                Vector3::new(
                    rng.gen_range(0.06..0.3),
                    rng.gen_range(0.06..0.3),
                    rng.gen_range(0.06..0.3),
                ),
                random_unit_quat(rng),
            )
            .unwrap()
        })
        .collect();
    GaussianCloud::new(kernels, Aabb::centered_cube(1.0)).unwrap()
}

pub fn scene_geometry(mode: GeometryMode, rows: usize, cols: usize, views: usize) -> ScanGeometry {
    ScanGeometry {
        mode,
        source_to_axis: if mode == GeometryMode::Cone { 4.0 } else { 0.0 },
        axis_to_detector: if mode == GeometryMode::Cone { 4.0 } else { 0.0 },
        detector_rows: rows,
        detector_cols: cols,
        pixel_pitch: 3.0 / cols as f64,
        angles: ScanGeometry::uniform_angles(views),
    }
}

/// Central finite differences of a scalar function of the cloud, w.r.t.
/// every kernel parameter. Step is relative with a small absolute floor.
pub struct FdGradients {
    pub d_rho: Vec<f64>,
    pub d_position: Vec<Vector3<f64>>,
    pub d_scale: Vec<Vector3<f64>>,
    pub d_rotation: Vec<[f64; 4]>,
}

pub fn fd_cloud_gradients(
    cloud: &GaussianCloud,
    f: &mut dyn FnMut(&GaussianCloud) -> f64,
) -> FdGradients {
    let n = cloud.len();
    let mut out = FdGradients {
        d_rho: vec![0.0; n],
        d_position: vec![Vector3::zeros(); n],
        d_scale: vec![Vector3::zeros(); n],
        d_rotation: vec![[0.0; 4]; n],
    };
    let step = |x: f64| 1e-4 * x.abs().max(0.05);
    for i in 0..n {
        {
            let h = step(cloud.kernels[i].rho);
            let mut plus = cloud.clone();
            plus.kernels[i].rho += h;
            let mut minus = cloud.clone();
            minus.kernels[i].rho -= h;
            out.d_rho[i] = (f(&plus) - f(&minus)) / (2.0 * h);
        }
        for a in 0..3 {
            let h = step(cloud.kernels[i].position[a]);
            let mut plus = cloud.clone();
            plus.kernels[i].position[a] += h;
            let mut minus = cloud.clone();
            minus.kernels[i].position[a] -= h;
            out.d_position[i][a] = (f(&plus) - f(&minus)) / (2.0 * h);
        }
        for a in 0..3 {
            let h = step(cloud.kernels[i].scale[a]);
            let mut plus = cloud.clone();
            plus.kernels[i].scale[a] += h;
            let mut minus = cloud.clone();
            minus.kernels[i].scale[a] -= h;
            out.d_scale[i][a] = (f(&plus) - f(&minus)) / (2.0 * h);
        }
        for m in 0..4 {
            let h = 1e-4;
            let mut plus = cloud.clone();
            plus.kernels[i].rotation[m] += h;
            let mut minus = cloud.clone();
            minus.kernels[i].rotation[m] -= h;
            out.d_rotation[i][m] = (f(&plus) - f(&minus)) / (2.0 * h);
        }
    }
    out
}

/// Relative-error comparison with an absolute floor, reporting the worst
/// offender. Returns the max relative error observed.
pub fn compare(analytic: f64, fd: f64, rel_tol: f64, abs_floor: f64, what: &str) -> f64 {
    let denom = fd.abs().max(abs_floor);
    let err = (analytic - fd).abs() / denom;
    assert!(
        err < rel_tol,
        "{what}: analytic {analytic} vs fd {fd} (rel err {err:.3e})"
    );
    err
}

/// Check a full gradient set against its finite-difference oracle.
/// Returns the worst relative error across all components.
pub fn check_against_fd(
    analytic: &ctsplat::render::KernelGradients,
    fd: &FdGradients,
    rel_tol: f64,
    abs_floor: f64,
    label: &str,
) -> f64 {
    let mut worst: f64 = 0.0;
    for i in 0..fd.d_rho.len() {
        worst = worst.max(compare(
            analytic.d_rho[i],
            fd.d_rho[i],
            rel_tol,
            abs_floor,
            &format!("{label}: kernel {i} rho"),
        ));
        for a in 0..3 {
            worst = worst.max(compare(
                analytic.d_position[i][a],
                fd.d_position[i][a],
                rel_tol,
                abs_floor,
                &format!("{label}: kernel {i} position[{a}]"),
            ));
            worst = worst.max(compare(
                analytic.d_scale[i][a],
                fd.d_scale[i][a],
                rel_tol,
                abs_floor,
                &format!("{label}: kernel {i} scale[{a}]"),
            ));
        }
        for m in 0..4 {
            worst = worst.max(compare(
                analytic.d_rotation[i][m],
                fd.d_rotation[i][m],
                rel_tol,
                abs_floor,
                &format!("{label}: kernel {i} rotation[{m}]"),
            ));
        }
    }
    worst
}

pub fn seeded(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
