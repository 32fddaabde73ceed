//! Domain types shared by every stage of the pipeline.
//!
//! All types here are plain value objects: construction validates invariants,
//! evaluation never mutates. Mutation happens by building new values (the
//! trainer owns the only mutable cloud and re-validates after each step).

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Floor for scale components, in world units.
pub const SCALE_FLOOR: f64 = 1e-6;

/// Axis-aligned box in world coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Aabb {
    pub min: [f64; 3],
    pub max: [f64; 3],
}

impl Aabb {
    pub fn new(min: [f64; 3], max: [f64; 3]) -> Result<Self> {
        for k in 0..3 {
            if !(min[k].is_finite() && max[k].is_finite() && min[k] < max[k]) {
                return Err(Error::invalid(format!(
                    "degenerate bbox on axis {k}: [{}, {}]",
                    min[k], max[k]
                )));
            }
        }
        Ok(Self { min, max })
    }

    /// Symmetric cube [-h, h]^3.
    pub fn centered_cube(half_extent: f64) -> Self {
        Self {
            min: [-half_extent; 3],
            max: [half_extent; 3],
        }
    }

    pub fn contains(&self, p: &Vector3<f64>) -> bool {
        (0..3).all(|k| p[k] >= self.min[k] && p[k] <= self.max[k])
    }

    pub fn clamp(&self, p: &Vector3<f64>) -> Vector3<f64> {
        Vector3::new(
            p.x.clamp(self.min[0], self.max[0]),
            p.y.clamp(self.min[1], self.max[1]),
            p.z.clamp(self.min[2], self.max[2]),
        )
    }

    pub fn extent(&self) -> Vector3<f64> {
        Vector3::new(
            self.max[0] - self.min[0],
            self.max[1] - self.min[1],
            self.max[2] - self.min[2],
        )
    }

    pub fn max_extent(&self) -> f64 {
        let e = self.extent();
        e.x.max(e.y).max(e.z)
    }
}

/// One radiative kernel: a Gaussian-shaped local density field.
///
/// `rho` is the central density, `scale` the positive axis lengths (diagonal
/// of S), `rotation` a quaternion (w, x, y, z) renormalized on every read.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianKernel {
    pub rho: f64,
    pub position: Vector3<f64>,
    pub scale: Vector3<f64>,
    pub rotation: [f64; 4],
}

impl GaussianKernel {
    pub fn new(
        rho: f64,
        position: Vector3<f64>,
        scale: Vector3<f64>,
        rotation: [f64; 4],
    ) -> Result<Self> {
        let k = Self {
            rho,
            position,
            scale,
            rotation,
        };
        k.validate()?;
        Ok(k)
    }

    /// Isotropic kernel with identity rotation.
    pub fn isotropic(rho: f64, position: Vector3<f64>, sigma: f64) -> Result<Self> {
        Self::new(rho, position, Vector3::repeat(sigma), [1.0, 0.0, 0.0, 0.0])
    }

    pub fn validate(&self) -> Result<()> {
        if !self.rho.is_finite() || self.rho < 0.0 {
            return Err(Error::invalid(format!("rho must be finite and >= 0, got {}", self.rho)));
        }
        if !self.position.iter().all(|v| v.is_finite()) {
            return Err(Error::invalid("non-finite position"));
        }
        if !self.scale.iter().all(|v| v.is_finite() && *v > 0.0) {
            return Err(Error::invalid(format!("scale must be strictly positive, got {:?}", self.scale)));
        }
        let n2: f64 = self.rotation.iter().map(|v| v * v).sum();
        if !n2.is_finite() || n2 < 1e-12 {
            return Err(Error::invalid("degenerate rotation quaternion"));
        }
        Ok(())
    }

    /// Quaternion renormalized to unit length.
    pub fn unit_rotation(&self) -> [f64; 4] {
        let n = self.rotation.iter().map(|v| v * v).sum::<f64>().sqrt();
        let mut q = self.rotation;
        for v in &mut q {
            *v /= n;
        }
        q
    }

    /// Rotation matrix R, from the renormalized quaternion.
    pub fn rotation_matrix(&self) -> Matrix3<f64> {
        rotation_matrix_from_quat(&self.unit_rotation())
    }
}

/// Rotation matrix from a quaternion (w, x, y, z). The formula is the usual
/// polynomial map; it is a rotation only for unit quaternions, so callers
/// normalize first.
pub fn rotation_matrix_from_quat(q: &[f64; 4]) -> Matrix3<f64> {
    let (w, x, y, z) = (q[0], q[1], q[2], q[3]);
    Matrix3::new(
        1.0 - 2.0 * (y * y + z * z),
        2.0 * (x * y - w * z),
        2.0 * (x * z + w * y),
        2.0 * (x * y + w * z),
        1.0 - 2.0 * (x * x + z * z),
        2.0 * (y * z - w * x),
        2.0 * (x * z - w * y),
        2.0 * (y * z + w * x),
        1.0 - 2.0 * (x * x + y * y),
    )
}

/// The full kernel set plus the reconstruction domain.
#[derive(Debug, Clone)]
pub struct GaussianCloud {
    pub kernels: Vec<GaussianKernel>,
    pub bbox: Aabb,
}

impl GaussianCloud {
    pub fn new(kernels: Vec<GaussianKernel>, bbox: Aabb) -> Result<Self> {
        if kernels.is_empty() {
            return Err(Error::invalid("cloud must contain at least one kernel"));
        }
        for (i, k) in kernels.iter().enumerate() {
            k.validate()
                .map_err(|e| Error::invalid(format!("kernel {i}: {e}")))?;
            if !bbox.contains(&k.position) {
                return Err(Error::invalid(format!(
                    "kernel {i} position {:?} outside bbox",
                    k.position
                )));
            }
        }
        Ok(Self { kernels, bbox })
    }

    pub fn len(&self) -> usize {
        self.kernels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.kernels.is_empty()
    }

    pub fn positions(&self) -> Vec<Vector3<f64>> {
        self.kernels.iter().map(|k| k.position).collect()
    }
}

/// Mutual-KNN adjacency over kernel positions with per-edge weights.
///
/// Symmetric by construction: `j in neighbors[i]` iff `i in neighbors[j]`,
/// with `weights[i][a]` the weight of edge (i, neighbors[i][a]).
#[derive(Debug, Clone, PartialEq)]
pub struct KernelGraph {
    pub neighbors: Vec<Vec<u32>>,
    pub weights: Vec<Vec<f64>>,
    pub scaling_k: f64,
}

impl KernelGraph {
    /// Graph over `n` kernels with no edges.
    pub fn edgeless(n: usize, scaling_k: f64) -> Self {
        Self {
            neighbors: vec![Vec::new(); n],
            weights: vec![Vec::new(); n],
            scaling_k,
        }
    }

    pub fn len(&self) -> usize {
        self.neighbors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.neighbors.is_empty()
    }

    pub fn edge_count(&self) -> usize {
        self.neighbors.iter().map(|n| n.len()).sum::<usize>() / 2
    }

    pub fn check_matches(&self, cloud: &GaussianCloud) -> Result<()> {
        if self.len() != cloud.len() {
            return Err(Error::inconsistent(format!(
                "graph has {} vertices but cloud has {} kernels",
                self.len(),
                cloud.len()
            )));
        }
        Ok(())
    }

    /// Full symmetry/weight/self-loop validation. Used by tests and after
    /// deserialization; construction via `build_mutual_knn` guarantees it.
    pub fn validate(&self) -> Result<()> {
        if self.scaling_k <= 0.0 || !self.scaling_k.is_finite() {
            return Err(Error::invalid("scaling_k must be positive"));
        }
        if self.weights.len() != self.neighbors.len() {
            return Err(Error::inconsistent("neighbors/weights length mismatch"));
        }
        let n = self.neighbors.len();
        for i in 0..n {
            if self.weights[i].len() != self.neighbors[i].len() {
                return Err(Error::inconsistent(format!("vertex {i}: ragged weights")));
            }
            for (a, &j) in self.neighbors[i].iter().enumerate() {
                let j = j as usize;
                if j >= n {
                    return Err(Error::inconsistent(format!("vertex {i}: neighbor {j} out of range")));
                }
                if j == i {
                    return Err(Error::inconsistent(format!("vertex {i}: self-loop")));
                }
                let w = self.weights[i][a];
                if !(w > 0.0 && w <= 1.0) {
                    return Err(Error::inconsistent(format!("edge ({i},{j}): weight {w} outside (0,1]")));
                }
                let back = self.neighbors[j]
                    .iter()
                    .position(|&b| b as usize == i)
                    .ok_or_else(|| Error::inconsistent(format!("edge ({i},{j}) not mirrored")))?;
                if (self.weights[j][back] - w).abs() > 0.0 {
                    return Err(Error::inconsistent(format!("edge ({i},{j}): asymmetric weight")));
                }
            }
        }
        Ok(())
    }
}

/// Acquisition mode of the scanner.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GeometryMode {
    Parallel,
    Cone,
}

/// Circular-trajectory acquisition description.
///
/// The rotation axis is world +z. At view angle theta the source side lies
/// along (cos t, sin t, 0); detector u runs along (-sin t, cos t, 0) and
/// detector v along +z. `source_to_axis`/`axis_to_detector` only apply in
/// cone mode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScanGeometry {
    pub mode: GeometryMode,
    pub source_to_axis: f64,
    pub axis_to_detector: f64,
    pub detector_rows: usize,
    pub detector_cols: usize,
    pub pixel_pitch: f64,
    pub angles: Vec<f64>,
}

impl ScanGeometry {
    pub fn validate(&self) -> Result<()> {
        if self.detector_rows < 2 || self.detector_cols < 2 {
            return Err(Error::invalid("detector counts must be >= 2"));
        }
        if !(self.pixel_pitch.is_finite() && self.pixel_pitch > 0.0) {
            return Err(Error::invalid("pixel_pitch must be positive"));
        }
        if self.angles.is_empty() {
            return Err(Error::invalid("at least one view angle required"));
        }
        for (i, &a) in self.angles.iter().enumerate() {
            if !(0.0..std::f64::consts::TAU).contains(&a) {
                return Err(Error::invalid(format!("angle {i} = {a} outside [0, 2pi)")));
            }
            if i > 0 && a <= self.angles[i - 1] {
                return Err(Error::invalid("angles must be strictly increasing"));
            }
        }
        if self.mode == GeometryMode::Cone {
            if !(self.source_to_axis > 0.0 && self.axis_to_detector > 0.0) {
                return Err(Error::invalid("cone mode needs positive source/detector distances"));
            }
        }
        Ok(())
    }

    /// Uniformly spaced angles over [0, 2pi), starting at 0.
    pub fn uniform_angles(n_views: usize) -> Vec<f64> {
        (0..n_views)
            .map(|i| i as f64 * std::f64::consts::TAU / n_views as f64)
            .collect()
    }

    pub fn n_views(&self) -> usize {
        self.angles.len()
    }

    pub fn pixels_per_view(&self) -> usize {
        self.detector_rows * self.detector_cols
    }

    /// Detector half-width along u in world units.
    pub fn half_width_u(&self) -> f64 {
        0.5 * self.detector_cols as f64 * self.pixel_pitch
    }

    /// Detector half-height along v in world units.
    pub fn half_width_v(&self) -> f64 {
        0.5 * self.detector_rows as f64 * self.pixel_pitch
    }
}

/// A single detector image, row-major (row r, column c) -> r * cols + c.
#[derive(Debug, Clone, PartialEq)]
pub struct DetectorImage {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl DetectorImage {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_data(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::invalid(format!(
                "image data length {} != {rows}x{cols}",
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    #[inline]
    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn at_mut(&mut self, r: usize, c: usize) -> &mut f64 {
        &mut self.data[r * self.cols + c]
    }

    pub fn max_value(&self) -> f64 {
        self.data.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn same_shape(&self, other: &Self) -> bool {
        self.rows == other.rows && self.cols == other.cols
    }
}

/// Acquisition description plus one measured/rendered image per angle.
#[derive(Debug, Clone)]
pub struct ProjectionStack {
    pub geometry: ScanGeometry,
    pub views: Vec<DetectorImage>,
}

impl ProjectionStack {
    pub fn new(geometry: ScanGeometry, views: Vec<DetectorImage>) -> Result<Self> {
        geometry.validate()?;
        if views.len() != geometry.angles.len() {
            return Err(Error::invalid(format!(
                "{} views for {} angles",
                views.len(),
                geometry.angles.len()
            )));
        }
        for (i, v) in views.iter().enumerate() {
            if v.rows != geometry.detector_rows || v.cols != geometry.detector_cols {
                return Err(Error::invalid(format!("view {i} shape mismatch")));
            }
            if !v.data.iter().all(|x| x.is_finite()) {
                return Err(Error::invalid(format!("view {i} contains non-finite pixels")));
            }
        }
        Ok(Self { geometry, views })
    }

    pub fn angle(&self, view: usize) -> f64 {
        self.geometry.angles[view]
    }

    /// Largest pixel value across every view.
    pub fn max_value(&self) -> f64 {
        self.views
            .iter()
            .map(|v| v.max_value())
            .fold(f64::NEG_INFINITY, f64::max)
    }
}

/// Axis-aligned voxel grid of densities, x-fastest ordering.
///
/// `origin` is the world position of the center of voxel (0, 0, 0).
#[derive(Debug, Clone, PartialEq)]
pub struct DenseVolume {
    pub dims: (usize, usize, usize),
    pub spacing: Vector3<f64>,
    pub origin: Vector3<f64>,
    pub data: Vec<f64>,
}

impl DenseVolume {
    pub fn zeros(dims: (usize, usize, usize), spacing: Vector3<f64>, origin: Vector3<f64>) -> Result<Self> {
        if !spacing.iter().all(|s| s.is_finite() && *s > 0.0) {
            return Err(Error::invalid("spacing must be strictly positive"));
        }
        let n = dims.0 * dims.1 * dims.2;
        Ok(Self {
            dims,
            spacing,
            origin,
            data: vec![0.0; n],
        })
    }

    /// Cube grid spanning [-1, 1]^3 with voxel centers strictly inside.
    pub fn unit_cube(dims: (usize, usize, usize)) -> Self {
        let spacing = Vector3::new(2.0 / dims.0 as f64, 2.0 / dims.1 as f64, 2.0 / dims.2 as f64);
        let origin = Vector3::new(
            -1.0 + 0.5 * spacing.x,
            -1.0 + 0.5 * spacing.y,
            -1.0 + 0.5 * spacing.z,
        );
        Self::zeros(dims, spacing, origin).expect("positive spacing")
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        x + self.dims.0 * (y + self.dims.1 * z)
    }

    #[inline]
    pub fn at(&self, x: usize, y: usize, z: usize) -> f64 {
        self.data[self.index(x, y, z)]
    }

    #[inline]
    pub fn at_mut(&mut self, x: usize, y: usize, z: usize) -> &mut f64 {
        let i = self.index(x, y, z);
        &mut self.data[i]
    }

    /// World position of a voxel center.
    pub fn voxel_center(&self, x: usize, y: usize, z: usize) -> Vector3<f64> {
        Vector3::new(
            self.origin.x + x as f64 * self.spacing.x,
            self.origin.y + y as f64 * self.spacing.y,
            self.origin.z + z as f64 * self.spacing.z,
        )
    }

    /// World-space box covering all voxel cells (half a voxel beyond the
    /// outermost centers).
    pub fn bounds(&self) -> Aabb {
        let min = [
            self.origin.x - 0.5 * self.spacing.x,
            self.origin.y - 0.5 * self.spacing.y,
            self.origin.z - 0.5 * self.spacing.z,
        ];
        let max = [
            self.origin.x + (self.dims.0 as f64 - 0.5) * self.spacing.x,
            self.origin.y + (self.dims.1 as f64 - 0.5) * self.spacing.y,
            self.origin.z + (self.dims.2 as f64 - 0.5) * self.spacing.z,
        ];
        Aabb::new(min, max).expect("valid volume bounds")
    }

    /// Trilinear interpolation at a world position, zero outside the grid.
    pub fn sample_trilinear(&self, p: &Vector3<f64>) -> f64 {
        let fx = (p.x - self.origin.x) / self.spacing.x;
        let fy = (p.y - self.origin.y) / self.spacing.y;
        let fz = (p.z - self.origin.z) / self.spacing.z;
        let x0 = fx.floor();
        let y0 = fy.floor();
        let z0 = fz.floor();
        let (tx, ty, tz) = (fx - x0, fy - y0, fz - z0);
        let (x0, y0, z0) = (x0 as i64, y0 as i64, z0 as i64);

        let mut acc = 0.0;
        for dz in 0..2i64 {
            for dy in 0..2i64 {
                for dx in 0..2i64 {
                    let (xi, yi, zi) = (x0 + dx, y0 + dy, z0 + dz);
                    if xi < 0
                        || yi < 0
                        || zi < 0
                        || xi >= self.dims.0 as i64
                        || yi >= self.dims.1 as i64
                        || zi >= self.dims.2 as i64
                    {
                        continue;
                    }
                    let wx = if dx == 0 { 1.0 - tx } else { tx };
                    let wy = if dy == 0 { 1.0 - ty } else { ty };
                    let wz = if dz == 0 { 1.0 - tz } else { tz };
                    acc += wx * wy * wz * self.at(xi as usize, yi as usize, zi as usize);
                }
            }
        }
        acc
    }

    pub fn max_value(&self) -> f64 {
        self.data.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
    }

    /// Mean squared difference against another volume of identical dims.
    pub fn mse(&self, other: &Self) -> Result<f64> {
        if self.dims != other.dims {
            return Err(Error::invalid("volume dims mismatch"));
        }
        let n = self.data.len() as f64;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            / n)
    }
}
