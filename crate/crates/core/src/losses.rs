//! Photometric and regularization losses with analytic gradients.
//!
//! D-SSIM uses the standard 11x11 Gaussian window (sigma 1.5) over valid
//! window positions; its gradient is the exact adjoint of the windowed
//! statistics. TV is the isotropic forward-difference variant with a small
//! smoothing epsilon so it stays differentiable at flat regions.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::laplacian_energy;
use crate::types::{DenseVolume, DetectorImage, GaussianCloud, KernelGraph};

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
const TV_EPS: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda_ssim: f64,
    pub lambda_tv: f64,
    pub lambda_lap: f64,
    /// Edge length (voxels) of the random sub-volume the TV term sees.
    pub tv_crop_d: usize,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_ssim: 0.25,
            lambda_tv: 0.05,
            lambda_lap: 8e-4,
            tv_crop_d: 32,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if self.lambda_ssim < 0.0 || self.lambda_tv < 0.0 || self.lambda_lap < 0.0 {
            return Err(Error::invalid("loss weights must be >= 0"));
        }
        if self.tv_crop_d < 2 {
            return Err(Error::invalid("tv_crop_d must be >= 2"));
        }
        Ok(())
    }
}

/// Mean absolute error and its gradient w.r.t. the rendered image.
pub fn l1_loss(rendered: &DetectorImage, measured: &DetectorImage) -> Result<(f64, DetectorImage)> {
    if !rendered.same_shape(measured) {
        return Err(Error::invalid("l1_loss: image shapes differ"));
    }
    let n = rendered.data.len() as f64;
    let mut grad = DetectorImage::zeros(rendered.rows, rendered.cols);
    let mut total = 0.0;
    for i in 0..rendered.data.len() {
        let d = rendered.data[i] - measured.data[i];
        total += d.abs();
        grad.data[i] = if d > 0.0 {
            1.0 / n
        } else if d < 0.0 {
            -1.0 / n
        } else {
            0.0
        };
    }
    Ok((total / n, grad))
}

/// 1D Gaussian window taps, normalized to sum 1.
fn ssim_window() -> [f64; SSIM_WINDOW] {
    let mut g = [0.0; SSIM_WINDOW];
    let c = (SSIM_WINDOW / 2) as f64;
    let mut sum = 0.0;
    for (i, v) in g.iter_mut().enumerate() {
        *v = (-((i as f64 - c) * (i as f64 - c)) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
        sum += *v;
    }
    for v in g.iter_mut() {
        *v /= sum;
    }
    g
}

/// Valid-mode separable windowing: output is (rows-10) x (cols-10).
fn window_valid(img: &[f64], rows: usize, cols: usize, g: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let wr = rows - SSIM_WINDOW + 1;
    let wc = cols - SSIM_WINDOW + 1;
    // horizontal pass
    let mut tmp = vec![0.0; rows * wc];
    for r in 0..rows {
        for c in 0..wc {
            let mut acc = 0.0;
            for (o, gv) in g.iter().enumerate() {
                acc += gv * img[r * cols + c + o];
            }
            tmp[r * wc + c] = acc;
        }
    }
    // vertical pass
    let mut out = vec![0.0; wr * wc];
    for r in 0..wr {
        for c in 0..wc {
            let mut acc = 0.0;
            for (o, gv) in g.iter().enumerate() {
                acc += gv * tmp[(r + o) * wc + c];
            }
            out[r * wc + c] = acc;
        }
    }
    out
}

/// Adjoint of `window_valid`: spread center maps back over their windows.
fn window_adjoint(map: &[f64], rows: usize, cols: usize, g: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let wr = rows - SSIM_WINDOW + 1;
    let wc = cols - SSIM_WINDOW + 1;
    // vertical spread
    let mut tmp = vec![0.0; rows * wc];
    for r in 0..wr {
        for c in 0..wc {
            let m = map[r * wc + c];
            if m != 0.0 {
                for (o, gv) in g.iter().enumerate() {
                    tmp[(r + o) * wc + c] += gv * m;
                }
            }
        }
    }
    // horizontal spread
    let mut out = vec![0.0; rows * cols];
    for r in 0..rows {
        for c in 0..wc {
            let m = tmp[r * wc + c];
            if m != 0.0 {
                for (o, gv) in g.iter().enumerate() {
                    out[r * cols + c + o] += gv * m;
                }
            }
        }
    }
    out
}

/// Mean SSIM over valid window positions plus its gradient w.r.t. `x`.
/// `dynamic_range` sets the stabilization constants C1, C2.
pub fn ssim_mean_and_grad(
    x: &DetectorImage,
    y: &DetectorImage,
    dynamic_range: f64,
) -> Result<(f64, DetectorImage)> {
    if !x.same_shape(y) {
        return Err(Error::invalid("ssim: image shapes differ"));
    }
    if x.rows < SSIM_WINDOW || x.cols < SSIM_WINDOW {
        return Err(Error::invalid(format!(
            "ssim needs at least {SSIM_WINDOW}x{SSIM_WINDOW} images, got {}x{}",
            x.rows, x.cols
        )));
    }
    let l = dynamic_range.max(1e-12);
    let c1 = (0.01 * l) * (0.01 * l);
    let c2 = (0.03 * l) * (0.03 * l);
    let g = ssim_window();
    let (rows, cols) = (x.rows, x.cols);

    let xx: Vec<f64> = x.data.iter().map(|v| v * v).collect();
    let yy: Vec<f64> = y.data.iter().map(|v| v * v).collect();
    let xy: Vec<f64> = x.data.iter().zip(&y.data).map(|(a, b)| a * b).collect();

    let mu_x = window_valid(&x.data, rows, cols, &g);
    let mu_y = window_valid(&y.data, rows, cols, &g);
    let m_xx = window_valid(&xx, rows, cols, &g);
    let m_yy = window_valid(&yy, rows, cols, &g);
    let m_xy = window_valid(&xy, rows, cols, &g);

    let n_centers = mu_x.len();
    let mut mean = 0.0;
    // Per-center coefficient maps of the gradient: T + Q*y_q + R*x_q under
    // the window adjoint.
    let mut t_map = vec![0.0; n_centers];
    let mut q_map = vec![0.0; n_centers];
    let mut r_map = vec![0.0; n_centers];
    for i in 0..n_centers {
        let (mx, my) = (mu_x[i], mu_y[i]);
        let vx = m_xx[i] - mx * mx;
        let vy = m_yy[i] - my * my;
        let cxy = m_xy[i] - mx * my;
        let a1 = 2.0 * mx * my + c1;
        let a2 = 2.0 * cxy + c2;
        let b1 = mx * mx + my * my + c1;
        let b2 = vx + vy + c2;
        let s = (a1 * a2) / (b1 * b2);
        mean += s;

        let p = 2.0 * my * a2 / (b1 * b2) - 2.0 * s * mx / b1;
        let q = 2.0 * a1 / (b1 * b2);
        let r = -2.0 * s / b2;
        t_map[i] = p - q * my - r * mx;
        q_map[i] = q;
        r_map[i] = r;
    }
    mean /= n_centers as f64;

    let spread_t = window_adjoint(&t_map, rows, cols, &g);
    let spread_q = window_adjoint(&q_map, rows, cols, &g);
    let spread_r = window_adjoint(&r_map, rows, cols, &g);
    let mut grad = DetectorImage::zeros(rows, cols);
    for i in 0..grad.data.len() {
        grad.data[i] =
            (spread_t[i] + y.data[i] * spread_q[i] + x.data[i] * spread_r[i]) / n_centers as f64;
    }
    Ok((mean, grad))
}

/// D-SSIM = (1 - mean SSIM) / 2 and its gradient w.r.t. the rendered image.
pub fn dssim_loss(
    rendered: &DetectorImage,
    measured: &DetectorImage,
    dynamic_range: f64,
) -> Result<(f64, DetectorImage)> {
    let (mean, ssim_grad) = ssim_mean_and_grad(rendered, measured, dynamic_range)?;
    let mut grad = ssim_grad;
    for v in grad.data.iter_mut() {
        *v *= -0.5;
    }
    Ok(((1.0 - mean) / 2.0, grad))
}

/// Isotropic total variation over forward differences, averaged across
/// interior voxels, with eps smoothing. Returns the loss and its gradient
/// w.r.t. the voxel values.
pub fn tv_loss(crop: &DenseVolume) -> Result<(f64, DenseVolume)> {
    let (nx, ny, nz) = crop.dims;
    if nx < 2 || ny < 2 || nz < 2 {
        return Err(Error::invalid("tv_loss needs dims >= 2 per axis"));
    }
    let count = ((nx - 1) * (ny - 1) * (nz - 1)) as f64;
    let mut grad = DenseVolume::zeros(crop.dims, crop.spacing, crop.origin)?;
    let mut total = 0.0;
    for z in 0..nz - 1 {
        for y in 0..ny - 1 {
            for x in 0..nx - 1 {
                let v = crop.at(x, y, z);
                let dx = crop.at(x + 1, y, z) - v;
                let dy = crop.at(x, y + 1, z) - v;
                let dz = crop.at(x, y, z + 1) - v;
                let t = (dx * dx + dy * dy + dz * dz + TV_EPS * TV_EPS).sqrt();
                total += t;
                let inv = 1.0 / (t * count);
                *grad.at_mut(x, y, z) += -(dx + dy + dz) * inv;
                *grad.at_mut(x + 1, y, z) += dx * inv;
                *grad.at_mut(x, y + 1, z) += dy * inv;
                *grad.at_mut(x, y, z + 1) += dz * inv;
            }
        }
    }
    Ok((total / count, grad))
}

/// Per-term values of an assembled loss.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossParts {
    pub l1: f64,
    pub dssim: f64,
    pub tv: f64,
    pub lap: f64,
    pub total: f64,
}

/// Downstream gradients of the total loss, ready to chain through the
/// renderer (image path), the voxelizer (volume path), and directly into
/// kernel densities (Laplacian path).
#[derive(Debug, Clone)]
pub struct TotalLossGrads {
    pub d_rendered: DetectorImage,
    pub d_tv_voxels: Option<DenseVolume>,
    pub d_rho_lap: Vec<f64>,
    pub parts: LossParts,
}

/// L_total = L1 + lambda_ssim L_ssim + lambda_lap L_lap + lambda_tv L_tv.
pub fn total_loss(
    rendered: &DetectorImage,
    measured: &DetectorImage,
    tv_crop: Option<&DenseVolume>,
    cloud: &GaussianCloud,
    graph: &KernelGraph,
    weights: &LossWeights,
    dynamic_range: f64,
) -> Result<(f64, TotalLossGrads)> {
    weights.validate()?;
    let (l1, l1_grad) = l1_loss(rendered, measured)?;
    let (dssim, dssim_grad) = if weights.lambda_ssim > 0.0 {
        dssim_loss(rendered, measured, dynamic_range)?
    } else {
        (0.0, DetectorImage::zeros(rendered.rows, rendered.cols))
    };
    let (tv, tv_grad) = match (tv_crop, weights.lambda_tv > 0.0) {
        (Some(crop), true) => {
            let (v, g) = tv_loss(crop)?;
            (v, Some(g))
        }
        _ => (0.0, None),
    };
    let (lap, lap_grad) = if weights.lambda_lap > 0.0 {
        laplacian_energy(cloud, graph)?
    } else {
        (0.0, vec![0.0; cloud.len()])
    };

    let total = l1 + weights.lambda_ssim * dssim + weights.lambda_tv * tv + weights.lambda_lap * lap;
    if !total.is_finite() {
        return Err(Error::invalid(format!(
            "non-finite loss: l1={l1} dssim={dssim} tv={tv} lap={lap}"
        )));
    }

    let mut d_rendered = l1_grad;
    for (d, s) in d_rendered.data.iter_mut().zip(&dssim_grad.data) {
        *d += weights.lambda_ssim * s;
    }
    let d_tv_voxels = tv_grad.map(|mut g| {
        for v in g.data.iter_mut() {
            *v *= weights.lambda_tv;
        }
        g
    });
    let d_rho_lap = lap_grad
        .into_iter()
        .map(|g| weights.lambda_lap * g)
        .collect();

    Ok((
        total,
        TotalLossGrads {
            d_rendered,
            d_tv_voxels,
            d_rho_lap,
            parts: LossParts {
                l1,
                dssim,
                tv,
                lap,
                total,
            },
        },
    ))
}
