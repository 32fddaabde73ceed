//! Differentiable X-ray forward projection of a kernel cloud.
//!
//! X-ray formation is purely additive, so instead of a compositing
//! rasterizer each kernel contributes a closed-form line integral per pixel:
//! with A = Sigma^{-1}, q = o - p,
//!
//!   I = rho * sqrt(2 pi / (d'Ad)) * exp(-1/2 [q'Aq - (q'Ad)^2 / (d'Ad)])
//!
//! The backward pass is the exact chain rule through this expression. Per
//! kernel we accumulate the pixel-weighted gradient w.r.t. A as a symmetric
//! 3x3 and unchain it into scale and rotation once per view, which keeps the
//! inner loop cheap.

use nalgebra::{Matrix3, Vector2, Vector3};
use rayon::prelude::*;

use crate::density::{graph_boost, KernelFrame};
use crate::error::{Error, Result};
use crate::types::{
    DetectorImage, GaussianCloud, GaussianKernel, GeometryMode, KernelGraph, ScanGeometry,
};

/// Rendering knobs. `truncation_sigmas` bounds each kernel's footprint in
/// Mahalanobis units; the default sits well beyond the 99% ellipsoid so the
/// per-pixel culling error stays far below 1e-3 of the peak value.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RenderConfig {
    pub truncation_sigmas: f64,
    /// Evaluate every kernel at every pixel; used by gradient tests where
    /// footprint boundaries would otherwise perturb finite differences.
    pub disable_culling: bool,
}

impl Default for RenderConfig {
    fn default() -> Self {
        Self {
            truncation_sigmas: 4.5,
            disable_culling: false,
        }
    }
}

/// Per-pixel ray access plus the detector-to-NDC affine map for one view.
#[derive(Debug, Clone)]
pub struct ViewRays {
    pub mode: GeometryMode,
    pub basis: crate::projector::ViewBasis,
    pub source_to_axis: f64,
    pub axis_to_detector: f64,
    pub rows: usize,
    pub cols: usize,
    pub pixel_pitch: f64,
    /// NDC half-extents: detector half-width/-height in world units.
    pub half_u: f64,
    pub half_v: f64,
}

impl ViewRays {
    pub fn new(geometry: &ScanGeometry, view_index: usize) -> Result<Self> {
        geometry.validate()?;
        let theta = *geometry
            .angles
            .get(view_index)
            .ok_or_else(|| Error::invalid(format!("view {view_index} out of range")))?;
        Ok(Self {
            mode: geometry.mode,
            basis: crate::projector::ViewBasis::at_angle(theta),
            source_to_axis: geometry.source_to_axis,
            axis_to_detector: geometry.axis_to_detector,
            rows: geometry.detector_rows,
            cols: geometry.detector_cols,
            pixel_pitch: geometry.pixel_pitch,
            half_u: geometry.half_width_u(),
            half_v: geometry.half_width_v(),
        })
    }

    /// Ray origin and unit direction through pixel (row, col).
    #[inline]
    pub fn ray(&self, row: usize, col: usize) -> (Vector3<f64>, Vector3<f64>) {
        let u = (col as f64 + 0.5 - 0.5 * self.cols as f64) * self.pixel_pitch;
        let v = (row as f64 + 0.5 - 0.5 * self.rows as f64) * self.pixel_pitch;
        match self.mode {
            GeometryMode::Parallel => (
                self.basis.e_u * u + self.basis.e_v * v,
                -self.basis.axis_dir,
            ),
            GeometryMode::Cone => {
                let source = self.basis.axis_dir * self.source_to_axis;
                let pixel =
                    self.basis.axis_dir * (-self.axis_to_detector) + self.basis.e_u * u + self.basis.e_v * v;
                (source, (pixel - source).normalize())
            }
        }
    }

    /// Depth of a world point along the central beam, measured from the
    /// source plane (cone mode).
    #[inline]
    fn depth(&self, p: &Vector3<f64>) -> f64 {
        self.source_to_axis - p.dot(&self.basis.axis_dir)
    }

    /// NDC coordinates of a world point's center projection.
    pub fn center_ndc(&self, p: &Vector3<f64>) -> Vector2<f64> {
        let (u, v) = self.center_uv(p);
        Vector2::new(u / self.half_u, v / self.half_v)
    }

    fn center_uv(&self, p: &Vector3<f64>) -> (f64, f64) {
        match self.mode {
            GeometryMode::Parallel => (p.dot(&self.basis.e_u), p.dot(&self.basis.e_v)),
            GeometryMode::Cone => {
                let dist = self.source_to_axis + self.axis_to_detector;
                let mut t = self.depth(p);
                if t <= 1e-9 * self.source_to_axis {
                    log::warn!("point at/behind source plane; clamping projection depth");
                    t = 1e-9 * self.source_to_axis;
                }
                let rel = p - self.basis.axis_dir * self.source_to_axis;
                (
                    dist * rel.dot(&self.basis.e_u) / t,
                    dist * rel.dot(&self.basis.e_v) / t,
                )
            }
        }
    }

    /// Jacobian of the world-to-NDC center projection, rows (du, dv).
    pub fn ndc_jacobian(&self, p: &Vector3<f64>) -> [Vector3<f64>; 2] {
        match self.mode {
            GeometryMode::Parallel => [
                self.basis.e_u / self.half_u,
                self.basis.e_v / self.half_v,
            ],
            GeometryMode::Cone => {
                let dist = self.source_to_axis + self.axis_to_detector;
                let t = self.depth(p).max(1e-9 * self.source_to_axis);
                let rel = p - self.basis.axis_dir * self.source_to_axis;
                let gu = rel.dot(&self.basis.e_u);
                let gv = rel.dot(&self.basis.e_v);
                // d(g/t)/dp = e/t + g * axis_dir / t^2
                [
                    (self.basis.e_u / t + self.basis.axis_dir * (gu / (t * t))) * (dist / self.half_u),
                    (self.basis.e_v / t + self.basis.axis_dir * (gv / (t * t))) * (dist / self.half_v),
                ]
            }
        }
    }

    /// Conservative pixel bounding box of a kernel footprint with the given
    /// world-space radius. None when the footprint misses the detector.
    fn footprint(&self, p: &Vector3<f64>, radius_world: f64) -> Option<(usize, usize, usize, usize)> {
        let (u, v) = self.center_uv(p);
        let radius_px = match self.mode {
            GeometryMode::Parallel => radius_world / self.pixel_pitch + 1.5,
            GeometryMode::Cone => {
                let dist = self.source_to_axis + self.axis_to_detector;
                let t_near = (self.depth(p) - radius_world).max(0.05 * self.source_to_axis);
                radius_world * dist / t_near / self.pixel_pitch + 2.0
            }
        };
        let col_c = u / self.pixel_pitch + 0.5 * self.cols as f64 - 0.5;
        let row_c = v / self.pixel_pitch + 0.5 * self.rows as f64 - 0.5;
        let c0 = (col_c - radius_px).floor().max(0.0) as isize;
        let c1 = (col_c + radius_px).ceil().min(self.cols as f64 - 1.0) as isize;
        let r0 = (row_c - radius_px).floor().max(0.0) as isize;
        let r1 = (row_c + radius_px).ceil().min(self.rows as f64 - 1.0) as isize;
        if c0 > c1 || r0 > r1 || c1 < 0 || r1 < 0 {
            return None;
        }
        Some((r0.max(0) as usize, r1 as usize, c0.max(0) as usize, c1 as usize))
    }
}

/// NDC coordinates of a world point's projection for one view.
pub fn project_center_ndc(
    p: &Vector3<f64>,
    geometry: &ScanGeometry,
    view_index: usize,
) -> Result<Vector2<f64>> {
    Ok(ViewRays::new(geometry, view_index)?.center_ndc(p))
}

/// Closed-form line integral of a kernel density along a ray.
pub fn ray_integral(kernel: &GaussianKernel, o: &Vector3<f64>, d: &Vector3<f64>) -> Result<f64> {
    let frame = KernelFrame::new(kernel)?;
    let q = o - kernel.position;
    let ad = frame.inv_cov * d;
    let a = ad.dot(d);
    let b = ad.dot(&q);
    let c = (frame.inv_cov * q).dot(&q);
    let m2 = c - b * b / a;
    Ok(kernel.rho * (std::f64::consts::TAU / a).sqrt() * (-0.5 * m2).exp())
}

/// Per-kernel parameter gradients of a pixel-weighted rendering loss, plus
/// the detector-plane (NDC) positional gradient driving densification.
#[derive(Debug, Clone)]
pub struct KernelGradients {
    pub d_rho: Vec<f64>,
    pub d_position: Vec<Vector3<f64>>,
    pub d_scale: Vec<Vector3<f64>>,
    pub d_rotation: Vec<[f64; 4]>,
    pub d_ndc: Vec<Vector2<f64>>,
    /// Kernel touched at least one detector pixel this view.
    pub contributed: Vec<bool>,
}

impl KernelGradients {
    pub fn zeros(n: usize) -> Self {
        Self {
            d_rho: vec![0.0; n],
            d_position: vec![Vector3::zeros(); n],
            d_scale: vec![Vector3::zeros(); n],
            d_rotation: vec![[0.0; 4]; n],
            d_ndc: vec![Vector2::zeros(); n],
            contributed: vec![false; n],
        }
    }

    pub fn len(&self) -> usize {
        self.d_rho.len()
    }

    pub fn is_empty(&self) -> bool {
        self.d_rho.is_empty()
    }

    /// Component-wise sum of parameter gradients (d_ndc is per-view state
    /// and is not merged).
    pub fn accumulate(&mut self, other: &KernelGradients) {
        assert_eq!(self.len(), other.len());
        for i in 0..self.len() {
            self.d_rho[i] += other.d_rho[i];
            self.d_position[i] += other.d_position[i];
            self.d_scale[i] += other.d_scale[i];
            for m in 0..4 {
                self.d_rotation[i][m] += other.d_rotation[i][m];
            }
        }
    }

    pub fn all_finite(&self, i: usize) -> bool {
        self.d_rho[i].is_finite()
            && self.d_position[i].iter().all(|v| v.is_finite())
            && self.d_scale[i].iter().all(|v| v.is_finite())
            && self.d_rotation[i].iter().all(|v| v.is_finite())
    }
}

/// Forward projection of the plain mixture for one view.
pub fn render_view(
    cloud: &GaussianCloud,
    geometry: &ScanGeometry,
    view_index: usize,
    cfg: &RenderConfig,
) -> Result<DetectorImage> {
    render_core(cloud, None, geometry, view_index, cfg)
}

/// Forward projection with graph-augmented densities.
pub fn render_view_with_graph(
    cloud: &GaussianCloud,
    graph: &KernelGraph,
    geometry: &ScanGeometry,
    view_index: usize,
    cfg: &RenderConfig,
) -> Result<DetectorImage> {
    let boost = graph_boost(cloud, graph)?;
    render_core(cloud, Some(&boost), geometry, view_index, cfg)
}

fn render_core(
    cloud: &GaussianCloud,
    boost: Option<&[f64]>,
    geometry: &ScanGeometry,
    view_index: usize,
    cfg: &RenderConfig,
) -> Result<DetectorImage> {
    let view = ViewRays::new(geometry, view_index)?;
    let trunc2 = cfg.truncation_sigmas * cfg.truncation_sigmas;
    let mut image = DetectorImage::zeros(view.rows, view.cols);
    for (i, kernel) in cloud.kernels.iter().enumerate() {
        let frame = KernelFrame::new(kernel)?;
        let weight = kernel.rho * boost.map_or(1.0, |b| b[i]);
        let bounds = if cfg.disable_culling {
            Some((0, view.rows - 1, 0, view.cols - 1))
        } else {
            view.footprint(&kernel.position, cfg.truncation_sigmas * frame.s_max)
        };
        let Some((r0, r1, c0, c1)) = bounds else {
            continue;
        };
        for r in r0..=r1 {
            for c in c0..=c1 {
                let (o, d) = view.ray(r, c);
                let q = o - kernel.position;
                let ad = frame.inv_cov * d;
                let a = ad.dot(&d);
                let b = ad.dot(&q);
                let m2 = (frame.inv_cov * q).dot(&q) - b * b / a;
                if !cfg.disable_culling && m2 > trunc2 {
                    continue;
                }
                *image.at_mut(r, c) +=
                    weight * (std::f64::consts::TAU / a).sqrt() * (-0.5 * m2).exp();
            }
        }
    }
    Ok(image)
}

/// Exact gradients of `L = sum_px dL_dimage * pixel` for one view.
pub fn render_backward(
    cloud: &GaussianCloud,
    geometry: &ScanGeometry,
    view_index: usize,
    dl_dimage: &DetectorImage,
    cfg: &RenderConfig,
) -> Result<KernelGradients> {
    backward_core(cloud, None, geometry, view_index, dl_dimage, cfg)
}

/// Backward pass with graph-augmented densities, including the edge-weight
/// dependence on positions.
pub fn render_backward_with_graph(
    cloud: &GaussianCloud,
    graph: &KernelGraph,
    geometry: &ScanGeometry,
    view_index: usize,
    dl_dimage: &DetectorImage,
    cfg: &RenderConfig,
) -> Result<KernelGradients> {
    backward_core(cloud, Some(graph), geometry, view_index, dl_dimage, cfg)
}

/// Raw per-kernel pixel sums: everything except the rho/boost factors.
struct KernelSums {
    /// sum of w_px * I0 (I0 = the integral at unit rho).
    t0: f64,
    /// sum of w_px * I0 * (Aq - (b/a) Ad).
    gq: Vector3<f64>,
    /// sum of w_px * I0 * G_A, symmetric, packed (xx, yy, zz, xy, xz, yz).
    wa: [f64; 6],
    contributed: bool,
}

fn backward_core(
    cloud: &GaussianCloud,
    graph: Option<&KernelGraph>,
    geometry: &ScanGeometry,
    view_index: usize,
    dl_dimage: &DetectorImage,
    cfg: &RenderConfig,
) -> Result<KernelGradients> {
    let view = ViewRays::new(geometry, view_index)?;
    if dl_dimage.rows != view.rows || dl_dimage.cols != view.cols {
        return Err(Error::invalid("dL/dimage shape does not match detector"));
    }
    let boost = match graph {
        Some(g) => Some(graph_boost(cloud, g)?),
        None => None,
    };
    let trunc2 = cfg.truncation_sigmas * cfg.truncation_sigmas;

    let frames: Vec<KernelFrame> = cloud
        .kernels
        .iter()
        .map(KernelFrame::new)
        .collect::<Result<_>>()?;

    let sums: Vec<KernelSums> = cloud
        .kernels
        .par_iter()
        .enumerate()
        .map(|(i, kernel)| {
            let frame = &frames[i];
            let mut acc = KernelSums {
                t0: 0.0,
                gq: Vector3::zeros(),
                wa: [0.0; 6],
                contributed: false,
            };
            let bounds = if cfg.disable_culling {
                Some((0, view.rows - 1, 0, view.cols - 1))
            } else {
                view.footprint(&kernel.position, cfg.truncation_sigmas * frame.s_max)
            };
            let Some((r0, r1, c0, c1)) = bounds else {
                return acc;
            };
            for r in r0..=r1 {
                for c in c0..=c1 {
                    let (o, d) = view.ray(r, c);
                    let q = o - kernel.position;
                    let ad = frame.inv_cov * d;
                    let a = ad.dot(&d);
                    let b = ad.dot(&q);
                    let aq = frame.inv_cov * q;
                    let m2 = aq.dot(&q) - b * b / a;
                    if !cfg.disable_culling && m2 > trunc2 {
                        continue;
                    }
                    acc.contributed = true;
                    let w_px = dl_dimage.at(r, c);
                    if w_px == 0.0 {
                        continue;
                    }
                    let i0 = (std::f64::consts::TAU / a).sqrt() * (-0.5 * m2).exp();
                    let wi = w_px * i0;
                    acc.t0 += wi;
                    // dI/dp = I * (Aq - (b/a) Ad)
                    acc.gq += wi * (aq - ad * (b / a));
                    // dI/dA = I * (alpha dd' + beta qq' + gamma (qd'+dq'))
                    let alpha = -0.5 / a - 0.5 * b * b / (a * a);
                    let beta = -0.5;
                    let gamma = 0.5 * b / a;
                    let sym = |u: &Vector3<f64>, v: &Vector3<f64>, idx: (usize, usize)| {
                        u[idx.0] * v[idx.1]
                    };
                    let pairs = [(0, 0), (1, 1), (2, 2), (0, 1), (0, 2), (1, 2)];
                    for (slot, &(x, y)) in pairs.iter().enumerate() {
                        let val = alpha * sym(&d, &d, (x, y))
                            + beta * sym(&q, &q, (x, y))
                            + gamma * (sym(&q, &d, (x, y)) + sym(&d, &q, (x, y)));
                        acc.wa[slot] += wi * val;
                    }
                }
            }
            acc
        })
        .collect();

    let mut grads = KernelGradients::zeros(cloud.len());
    let mut b_terms = vec![0.0; cloud.len()];
    for (i, kernel) in cloud.kernels.iter().enumerate() {
        let s = &sums[i];
        grads.contributed[i] = s.contributed;
        let c_i = boost.as_ref().map_or(1.0, |b| b[i]);
        grads.d_rho[i] = c_i * s.t0;
        b_terms[i] = kernel.rho * s.t0;
        let factor = c_i * kernel.rho;
        grads.d_position[i] = factor * s.gq;

        let wa = Matrix3::new(
            s.wa[0], s.wa[3], s.wa[4], s.wa[3], s.wa[1], s.wa[5], s.wa[4], s.wa[5], s.wa[2],
        ) * factor;
        let (d_scale, d_rot) = chain_shape_gradients(kernel, &frames[i], &wa);
        grads.d_scale[i] = d_scale;
        grads.d_rotation[i] = d_rot;
    }

    // Edge weights depend on positions: c_j = 1 + sum w(p_j, p_i).
    if let Some(g) = graph {
        add_boost_position_terms(cloud, g, &b_terms, &mut grads.d_position);
    }

    for i in 0..cloud.len() {
        if grads.contributed[i] {
            let j = view.ndc_jacobian(&cloud.kernels[i].position);
            grads.d_ndc[i] = Vector2::new(
                j[0].dot(&grads.d_position[i]),
                j[1].dot(&grads.d_position[i]),
            );
        }
    }
    Ok(grads)
}

/// Chain an accumulated dL/dA (A = Sigma^{-1}) into scale and raw-quaternion
/// gradients. Shared by the renderer and the voxelizer backward passes.
pub(crate) fn chain_shape_gradients(
    kernel: &GaussianKernel,
    frame: &KernelFrame,
    wa: &Matrix3<f64>,
) -> (Vector3<f64>, [f64; 4]) {
    // dA/ds_k = -2/s_k^3 u_k u_k', with u_k the k-th rotation column.
    let mut d_scale = Vector3::zeros();
    for k in 0..3 {
        let u = frame.rot.column(k);
        let s = kernel.scale[k];
        d_scale[k] = (-2.0 / (s * s * s)) * (wa * u).dot(&u);
    }

    // dA/dq_m = sum_k lambda_k (dU_k U_k' + U_k dU_k'), contracted with the
    // symmetric wa: 2 lambda_k dU_k' (wa U_k).
    let q = kernel.unit_rotation();
    let dr = rotation_derivatives(&q);
    let mut grad_n = [0.0; 4];
    for m in 0..4 {
        let mut g = 0.0;
        for k in 0..3 {
            let u = frame.rot.column(k);
            let du = dr[m].column(k);
            g += 2.0 * frame.inv_s2[k] * du.dot(&(wa * u));
        }
        grad_n[m] = g;
    }

    // Forward renormalizes the quaternion, so project onto the tangent of
    // the unit sphere and divide by the raw norm.
    let raw_norm = kernel.rotation.iter().map(|v| v * v).sum::<f64>().sqrt();
    let dot: f64 = (0..4).map(|m| grad_n[m] * q[m]).sum();
    let mut d_rot = [0.0; 4];
    for m in 0..4 {
        d_rot[m] = (grad_n[m] - dot * q[m]) / raw_norm;
    }
    (d_scale, d_rot)
}

/// Derivatives of the quaternion-to-matrix polynomial w.r.t. (w, x, y, z).
pub(crate) fn rotation_derivatives(q: &[f64; 4]) -> [Matrix3<f64>; 4] {
    let (w, x, y, z) = (q[0], q[1], q[2], q[3]);
    [
        Matrix3::new(0.0, -z, y, z, 0.0, -x, -y, x, 0.0) * 2.0,
        Matrix3::new(0.0, y, z, y, -2.0 * x, -w, z, w, -2.0 * x) * 2.0,
        Matrix3::new(-2.0 * y, x, w, x, 0.0, z, -w, z, -2.0 * y) * 2.0,
        Matrix3::new(-2.0 * z, -w, x, w, -2.0 * z, y, x, y, 0.0) * 2.0,
    ]
}

/// Positional gradient terms of the graph boost factors: for every edge
/// (m, j), c-terms contribute (2/k) w_mj (p_j - p_m) (B_m + B_j).
pub(crate) fn add_boost_position_terms(
    cloud: &GaussianCloud,
    graph: &KernelGraph,
    b_terms: &[f64],
    d_position: &mut [Vector3<f64>],
) {
    let k = graph.scaling_k;
    for m in 0..cloud.len() {
        let p_m = cloud.kernels[m].position;
        for &j in &graph.neighbors[m] {
            let j = j as usize;
            let diff = cloud.kernels[j].position - p_m;
            let w = (-diff.norm_squared() / k).exp();
            d_position[m] += diff * ((2.0 / k) * w * (b_terms[m] + b_terms[j]));
        }
    }
}
