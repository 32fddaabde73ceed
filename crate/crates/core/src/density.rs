//! Closed-form density evaluation of single kernels, plain mixtures, and
//! graph-augmented mixtures.
//!
//! Sigma never goes through a generic matrix inverse: we keep the
//! decomposition Sigma = R S S^T R^T and build Sigma^{-1} = R diag(1/s^2) R^T
//! directly, which is exact and keeps the gradient math conditioned.

use nalgebra::{Matrix3, Vector3};

use crate::error::{Error, Result};
use crate::types::{GaussianCloud, GaussianKernel, KernelGraph};

/// Sigma = R diag(s)^2 R^T for a scale vector and (near-)unit quaternion.
pub fn covariance_from(scale: &Vector3<f64>, rotation: &[f64; 4]) -> Result<Matrix3<f64>> {
    let frame = KernelFrame::from_parts(scale, rotation)?;
    let s2 = Matrix3::from_diagonal(&Vector3::new(
        scale.x * scale.x,
        scale.y * scale.y,
        scale.z * scale.z,
    ));
    Ok(frame.rot * s2 * frame.rot.transpose())
}

/// rho * exp(-1/2 (x-p)^T Sigma^{-1} (x-p)).
pub fn eval_density(kernel: &GaussianKernel, x: &Vector3<f64>) -> Result<f64> {
    let frame = KernelFrame::new(kernel)?;
    Ok(kernel.rho * frame.gaussian_about(&kernel.position, x))
}

/// Plain mixture: sum of every kernel's contribution at x.
pub fn eval_mixture(cloud: &GaussianCloud, x: &Vector3<f64>) -> Result<f64> {
    let mut total = 0.0;
    for k in &cloud.kernels {
        total += eval_density(k, x)?;
    }
    Ok(total)
}

/// Graph-augmented density: every kernel contributes once as itself and once
/// more inside each neighbor's local field, scaled by the stored edge weight.
///
/// Reduces to `eval_mixture` on an edgeless graph. On connected graphs the
/// neighbor terms deliberately double-count, so values exceed the plain
/// mixture; the formula is implemented as written.
pub fn eval_graph_density(
    cloud: &GaussianCloud,
    graph: &KernelGraph,
    x: &Vector3<f64>,
) -> Result<f64> {
    graph.check_matches(cloud)?;
    // sum_i [rho_i G_i + sum_{j in N(i)} w_ij rho_j G_j]
    //   == sum_j (1 + sum_{i in N(j)} w_ji) rho_j G_j   by edge symmetry.
    let mut total = 0.0;
    for (j, k) in cloud.kernels.iter().enumerate() {
        let boost = 1.0 + graph.weights[j].iter().sum::<f64>();
        total += boost * eval_density(k, x)?;
    }
    Ok(total)
}

/// Per-kernel multiplier turning a plain mixture into the graph-augmented
/// density: c_j = 1 + sum of edge weights at j. Weights are recomputed from
/// the cloud's current positions so the factor stays differentiable in them;
/// it matches the stored graph weights whenever the graph was built from the
/// same positions.
pub fn graph_boost(cloud: &GaussianCloud, graph: &KernelGraph) -> Result<Vec<f64>> {
    graph.check_matches(cloud)?;
    let k = graph.scaling_k;
    let mut boost = vec![1.0; cloud.len()];
    for (j, neigh) in graph.neighbors.iter().enumerate() {
        for &i in neigh {
            let d2 =
                (cloud.kernels[j].position - cloud.kernels[i as usize].position).norm_squared();
            boost[j] += (-d2 / k).exp();
        }
    }
    Ok(boost)
}

/// Precomputed per-kernel quantities shared by density evaluation, the ray
/// integral, and both backward passes.
#[derive(Debug, Clone)]
pub struct KernelFrame {
    /// Rotation matrix of the renormalized quaternion.
    pub rot: Matrix3<f64>,
    /// Sigma^{-1} = R diag(1/s^2) R^T.
    pub inv_cov: Matrix3<f64>,
    /// 1/s_k^2 per axis.
    pub inv_s2: Vector3<f64>,
    /// Largest scale component, for footprint bounds.
    pub s_max: f64,
}

impl KernelFrame {
    pub fn new(kernel: &GaussianKernel) -> Result<Self> {
        Self::from_parts(&kernel.scale, &kernel.rotation)
    }

    pub fn from_parts(scale: &Vector3<f64>, rotation: &[f64; 4]) -> Result<Self> {
        if !scale.iter().all(|s| s.is_finite()) || !rotation.iter().all(|v| v.is_finite()) {
            return Err(Error::invalid("non-finite scale or rotation"));
        }
        if !scale.iter().all(|s| *s > 0.0) {
            return Err(Error::invalid(format!("degenerate scale {:?}", scale)));
        }
        let n = rotation.iter().map(|v| v * v).sum::<f64>().sqrt();
        if n < 1e-12 {
            return Err(Error::invalid("degenerate rotation quaternion"));
        }
        let q = [
            rotation[0] / n,
            rotation[1] / n,
            rotation[2] / n,
            rotation[3] / n,
        ];
        let rot = crate::types::rotation_matrix_from_quat(&q);
        let inv_s2 = Vector3::new(
            1.0 / (scale.x * scale.x),
            1.0 / (scale.y * scale.y),
            1.0 / (scale.z * scale.z),
        );
        let inv_cov = rot * Matrix3::from_diagonal(&inv_s2) * rot.transpose();
        Ok(Self {
            rot,
            inv_cov,
            inv_s2,
            s_max: scale.x.max(scale.y).max(scale.z),
        })
    }

    /// Unnormalized Gaussian exp(-1/2 (x-p)^T Sigma^{-1} (x-p)) about `p`.
    #[inline]
    pub fn gaussian_about(&self, p: &Vector3<f64>, x: &Vector3<f64>) -> f64 {
        let r = x - p;
        (-0.5 * (self.inv_cov * r).dot(&r)).exp()
    }

    /// Squared Mahalanobis distance of x from `p` under this kernel.
    #[inline]
    pub fn mahalanobis_sq(&self, p: &Vector3<f64>, x: &Vector3<f64>) -> f64 {
        let r = x - p;
        (self.inv_cov * r).dot(&r)
    }
}
