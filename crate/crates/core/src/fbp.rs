//! Analytic reconstruction: ramp-filtered backprojection for parallel beams
//! and the cosine-weighted, distance-weighted cone-beam variant.
//!
//! Used only to seed the kernel cloud, so quality targets are modest; the
//! filter is the classic bandlimited ramp with an optional Hann window.

use nalgebra::Vector3;
use rayon::prelude::*;
use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::projector::ViewBasis;
use crate::types::{DenseVolume, DetectorImage, GeometryMode, ProjectionStack};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FilterWindow {
    /// Plain bandlimited ramp.
    RamLak,
    /// Ramp times a Hann taper, trading resolution for noise suppression.
    Hann,
}

impl Default for FilterWindow {
    fn default() -> Self {
        FilterWindow::Hann
    }
}

/// Ramp-filtered backprojection onto the requested grid.
pub fn fdk_reconstruct(
    stack: &ProjectionStack,
    dims: (usize, usize, usize),
    spacing: Vector3<f64>,
    origin: Vector3<f64>,
) -> Result<DenseVolume> {
    fdk_reconstruct_with(stack, dims, spacing, origin, FilterWindow::default())
}

pub fn fdk_reconstruct_with(
    stack: &ProjectionStack,
    dims: (usize, usize, usize),
    spacing: Vector3<f64>,
    origin: Vector3<f64>,
    window: FilterWindow,
) -> Result<DenseVolume> {
    let n_views = stack.views.len();
    if n_views < 2 {
        return Err(Error::InsufficientViews { got: n_views });
    }
    let geom = &stack.geometry;
    let mut out = DenseVolume::zeros(dims, spacing, origin)?;

    // Virtual-detector pitch: cone rows are filtered on the detector plane
    // rescaled through the rotation axis, which also feeds the depth weight.
    let (pitch_eff, magnification) = match geom.mode {
        GeometryMode::Parallel => (geom.pixel_pitch, 1.0),
        GeometryMode::Cone => {
            let m = geom.source_to_axis / (geom.source_to_axis + geom.axis_to_detector);
            (geom.pixel_pitch * m, m)
        }
    };

    let filtered: Vec<DetectorImage> = stack
        .views
        .iter()
        .map(|view| filter_view(view, geom, pitch_eff, window))
        .collect();

    // f = (pi / N) * sum over views of the (weighted) filtered sample.
    let scale = std::f64::consts::PI / n_views as f64;
    let rows = geom.detector_rows as isize;
    let cols = geom.detector_cols as isize;
    let (nx, ny, nz) = dims;

    let slices: Vec<Vec<f64>> = (0..nz)
        .into_par_iter()
        .map(|z| {
            let mut slice = vec![0.0; nx * ny];
            for (vi, view) in filtered.iter().enumerate() {
                let basis = ViewBasis::at_angle(geom.angles[vi]);
                for y in 0..ny {
                    for x in 0..nx {
                        let p = Vector3::new(
                            origin.x + x as f64 * spacing.x,
                            origin.y + y as f64 * spacing.y,
                            origin.z + z as f64 * spacing.z,
                        );
                        let (u, v, weight) = match geom.mode {
                            GeometryMode::Parallel => (p.dot(&basis.e_u), p.z, 1.0),
                            GeometryMode::Cone => {
                                let depth = geom.source_to_axis - p.dot(&basis.axis_dir);
                                if depth <= 1e-9 {
                                    continue;
                                }
                                let s = geom.source_to_axis / depth;
                                (
                                    s * p.dot(&basis.e_u),
                                    s * p.z,
                                    s * s,
                                )
                            }
                        };
                        let col_f = u / pitch_eff + 0.5 * cols as f64 - 0.5;
                        let row_f = v / pitch_eff + 0.5 * rows as f64 - 0.5;
                        let c0 = col_f.floor();
                        let r0 = row_f.floor();
                        let (tc, tr) = (col_f - c0, row_f - r0);
                        let (c0, r0) = (c0 as isize, r0 as isize);
                        let mut acc = 0.0;
                        for dr in 0..2isize {
                            for dc in 0..2isize {
                                let (r, c) = (r0 + dr, c0 + dc);
                                if r < 0 || c < 0 || r >= rows || c >= cols {
                                    continue;
                                }
                                let wr = if dr == 0 { 1.0 - tr } else { tr };
                                let wc = if dc == 0 { 1.0 - tc } else { tc };
                                acc += wr * wc * view.at(r as usize, c as usize);
                            }
                        }
                        slice[x + nx * y] += weight * acc;
                    }
                }
            }
            for v in &mut slice {
                *v = (*v * scale).max(0.0);
            }
            slice
        })
        .collect();

    for (z, slice) in slices.into_iter().enumerate() {
        let base = nx * ny * z;
        out.data[base..base + nx * ny].copy_from_slice(&slice);
    }
    let _ = magnification;
    Ok(out)
}

/// Cosine pre-weighting (cone only) plus row-wise ramp filtering.
fn filter_view(
    view: &DetectorImage,
    geom: &crate::types::ScanGeometry,
    pitch_eff: f64,
    window: FilterWindow,
) -> DetectorImage {
    let cols = view.cols;
    let len = (2 * cols).next_power_of_two();
    let gains = ramp_gains(len, pitch_eff, window);

    let mut planner = FftPlanner::<f64>::new();
    let fwd = planner.plan_fft_forward(len);
    let inv = planner.plan_fft_inverse(len);

    let dist = geom.source_to_axis + geom.axis_to_detector;
    let mut out = DetectorImage::zeros(view.rows, view.cols);
    let mut buf = vec![Complex64::default(); len];
    for r in 0..view.rows {
        for slot in buf.iter_mut() {
            *slot = Complex64::default();
        }
        for c in 0..cols {
            let mut value = view.at(r, c);
            if geom.mode == GeometryMode::Cone {
                let (u, v) = crate::projector::pixel_uv(geom, r, c);
                value *= dist / (dist * dist + u * u + v * v).sqrt();
            }
            buf[c] = Complex64::new(value, 0.0);
        }
        fwd.process(&mut buf);
        for (b, g) in buf.iter_mut().zip(&gains) {
            *b *= *g;
        }
        inv.process(&mut buf);
        for c in 0..cols {
            *out.at_mut(r, c) = buf[c].re / len as f64;
        }
    }
    out
}

/// Per-bin real gains of the bandlimited ramp, built from its spatial
/// impulse response so the DC term is handled correctly.
fn ramp_gains(len: usize, pitch: f64, window: FilterWindow) -> Vec<f64> {
    let t2 = pitch * pitch;
    let mut h = vec![Complex64::default(); len];
    h[0] = Complex64::new(1.0 / (4.0 * t2), 0.0);
    let mut n = 1usize;
    while n <= len / 2 {
        let v = -1.0 / (std::f64::consts::PI * std::f64::consts::PI * (n * n) as f64 * t2);
        h[n] = Complex64::new(v, 0.0);
        h[len - n] = Complex64::new(v, 0.0);
        n += 2;
    }
    let mut planner = FftPlanner::<f64>::new();
    planner.plan_fft_forward(len).process(&mut h);

    h.iter()
        .enumerate()
        .map(|(k, c)| {
            // Convolution discretization carries a factor of the pitch.
            let mut g = c.re * pitch;
            if window == FilterWindow::Hann {
                let frac = (k.min(len - k)) as f64 / (len / 2) as f64;
                g *= 0.5 * (1.0 + (std::f64::consts::PI * frac).cos());
            }
            g
        })
        .collect()
}
