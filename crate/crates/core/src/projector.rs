//! Voxel-grid forward projector and measurement noise.
//!
//! This is the simulation oracle: line integrals of the trilinearly
//! interpolated volume along detector rays, computed by fixed-step sampling.
//! The splat renderer never calls into this path, so the two sides stay
//! independent.

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::{DenseVolume, DetectorImage, GeometryMode, ProjectionStack, ScanGeometry};

/// Per-view ray basis for one angle of a circular trajectory.
///
/// The source side lies along `axis_dir = (cos t, sin t, 0)`; detector u runs
/// along `(-sin t, cos t, 0)` and detector v along +z.
#[derive(Debug, Clone, Copy)]
pub struct ViewBasis {
    pub axis_dir: Vector3<f64>,
    pub e_u: Vector3<f64>,
    pub e_v: Vector3<f64>,
}

impl ViewBasis {
    pub fn at_angle(theta: f64) -> Self {
        Self {
            axis_dir: Vector3::new(theta.cos(), theta.sin(), 0.0),
            e_u: Vector3::new(-theta.sin(), theta.cos(), 0.0),
            e_v: Vector3::new(0.0, 0.0, 1.0),
        }
    }
}

/// Detector-plane coordinates of a pixel center, in world units.
#[inline]
pub fn pixel_uv(geometry: &ScanGeometry, row: usize, col: usize) -> (f64, f64) {
    let u = (col as f64 + 0.5 - 0.5 * geometry.detector_cols as f64) * geometry.pixel_pitch;
    let v = (row as f64 + 0.5 - 0.5 * geometry.detector_rows as f64) * geometry.pixel_pitch;
    (u, v)
}

/// Ray (origin, unit direction) through one detector pixel at one view.
pub fn pixel_ray(
    geometry: &ScanGeometry,
    basis: &ViewBasis,
    row: usize,
    col: usize,
) -> (Vector3<f64>, Vector3<f64>) {
    let (u, v) = pixel_uv(geometry, row, col);
    match geometry.mode {
        GeometryMode::Parallel => {
            // Ray passes through the in-plane point (u, v); any origin along
            // the ray works, the volume clip picks the active segment.
            let origin = basis.e_u * u + basis.e_v * v;
            (origin, -basis.axis_dir)
        }
        GeometryMode::Cone => {
            let source = basis.axis_dir * geometry.source_to_axis;
            let pixel = basis.axis_dir * (-geometry.axis_to_detector) + basis.e_u * u + basis.e_v * v;
            ((source), (pixel - source).normalize())
        }
    }
}

/// Slab clip of a ray against an axis-aligned box; returns the [t0, t1]
/// parameter interval or None when the ray misses.
pub fn clip_to_box(
    origin: &Vector3<f64>,
    dir: &Vector3<f64>,
    min: &[f64; 3],
    max: &[f64; 3],
) -> Option<(f64, f64)> {
    let mut t0 = f64::NEG_INFINITY;
    let mut t1 = f64::INFINITY;
    for a in 0..3 {
        if dir[a].abs() < 1e-300 {
            if origin[a] < min[a] || origin[a] > max[a] {
                return None;
            }
            continue;
        }
        let inv = 1.0 / dir[a];
        let (mut ta, mut tb) = ((min[a] - origin[a]) * inv, (max[a] - origin[a]) * inv);
        if ta > tb {
            std::mem::swap(&mut ta, &mut tb);
        }
        t0 = t0.max(ta);
        t1 = t1.min(tb);
        if t0 >= t1 {
            return None;
        }
    }
    Some((t0, t1))
}

/// Counters reported alongside a projection run.
#[derive(Debug, Clone, Copy, Default)]
pub struct ProjectionReport {
    pub total_rays: usize,
    pub rays_hit_volume: usize,
}

/// Line integrals of the volume along every detector ray, at the default
/// step of half the smallest voxel spacing.
pub fn project_volume(volume: &DenseVolume, geometry: &ScanGeometry) -> Result<ProjectionStack> {
    let (stack, report) = project_volume_detailed(volume, geometry, None)?;
    if report.rays_hit_volume == 0 {
        log::warn!(
            "projection geometry misses the volume entirely ({} rays)",
            report.total_rays
        );
    }
    Ok(stack)
}

/// Same as `project_volume` with an explicit sampling step (world units) and
/// diagnostic counters.
pub fn project_volume_detailed(
    volume: &DenseVolume,
    geometry: &ScanGeometry,
    step: Option<f64>,
) -> Result<(ProjectionStack, ProjectionReport)> {
    geometry.validate()?;
    let min_spacing = volume.spacing.x.min(volume.spacing.y).min(volume.spacing.z);
    let step = step.unwrap_or(0.5 * min_spacing);
    if !(step > 0.0 && step <= 0.5 * min_spacing + 1e-12) {
        return Err(Error::invalid(format!(
            "step {step} must be in (0, min(spacing)/2]"
        )));
    }
    let bounds = volume.bounds();

    let mut views = Vec::with_capacity(geometry.n_views());
    let mut hit = 0usize;
    for &theta in &geometry.angles {
        let basis = ViewBasis::at_angle(theta);
        let rows = geometry.detector_rows;
        let cols = geometry.detector_cols;
        let results: Vec<(f64, bool)> = (0..rows * cols)
            .into_par_iter()
            .map(|idx| {
                let (r, c) = (idx / cols, idx % cols);
                let (origin, dir) = pixel_ray(geometry, &basis, r, c);
                match clip_to_box(&origin, &dir, &bounds.min, &bounds.max) {
                    None => (0.0, false),
                    Some((t0, t1)) => {
                        let span = t1 - t0;
                        let n = (span / step).ceil() as usize;
                        if n == 0 {
                            return (0.0, false);
                        }
                        let dt = span / n as f64;
                        let mut acc = 0.0;
                        for i in 0..n {
                            let t = t0 + (i as f64 + 0.5) * dt;
                            let p = origin + dir * t;
                            acc += volume.sample_trilinear(&p);
                        }
                        (acc * dt, true)
                    }
                }
            })
            .collect();
        hit += results.iter().filter(|(_, h)| *h).count();
        views.push(DetectorImage {
            rows,
            cols,
            data: results.into_iter().map(|(v, _)| v).collect(),
        });
    }
    let report = ProjectionReport {
        total_rays: geometry.n_views() * geometry.pixels_per_view(),
        rays_hit_volume: hit,
    };
    Ok((ProjectionStack::new(geometry.clone(), views)?, report))
}

/// Photon-counting noise model on line integrals.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseSpec {
    /// Expected photons per detector pixel at zero attenuation.
    pub photon_count_i0: f64,
    /// Additive Gaussian std in line-integral units.
    pub electronic_sigma: f64,
    pub seed: u64,
}

impl NoiseSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.photon_count_i0 > 0.0) {
            return Err(Error::invalid("photon_count_i0 must be positive"));
        }
        if self.electronic_sigma < 0.0 {
            return Err(Error::invalid("electronic_sigma must be >= 0"));
        }
        Ok(())
    }
}

/// Per pixel with line integral l: sample N ~ Poisson(I0 exp(-l)), output
/// -ln(max(N, 1) / I0) plus additive Gaussian noise. Deterministic for a
/// fixed seed.
pub fn add_noise(stack: &ProjectionStack, noise: &NoiseSpec) -> Result<ProjectionStack> {
    noise.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(noise.seed);
    let i0 = noise.photon_count_i0;
    let mut views = Vec::with_capacity(stack.views.len());
    for view in &stack.views {
        let data = view
            .data
            .iter()
            .map(|&l| {
                let lambda = i0 * (-l).exp();
                let n = if lambda > 0.0 {
                    Poisson::new(lambda).map(|d| d.sample(&mut rng)).unwrap_or(0.0)
                } else {
                    0.0
                };
                let mut out = -(n.max(1.0) / i0).ln();
                if noise.electronic_sigma > 0.0 {
                    let g: f64 = rng.sample(rand_distr::StandardNormal);
                    out += noise.electronic_sigma * g;
                }
                out
            })
            .collect();
        views.push(DetectorImage {
            rows: view.rows,
            cols: view.cols,
            data,
        });
    }
    ProjectionStack::new(stack.geometry.clone(), views)
}
