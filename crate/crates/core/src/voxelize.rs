//! Tiled extraction of a dense density volume from the kernel graph, with
//! confidence culling and the backward path that chains volume losses into
//! kernel parameters.
//!
//! Kernels are evaluated inside their own confidence ellipsoid (padded by one
//! extra Mahalanobis unit) and treated as zero outside. Tile culling is a
//! conservative bounding-sphere test against the same padded radius, so the
//! output is exactly independent of the tile size.

use nalgebra::{Matrix3, Vector3};
use rayon::prelude::*;
use statrs::distribution::{ChiSquared, ContinuousCDF};

use crate::density::{graph_boost, KernelFrame};
use crate::error::{Error, Result};
use crate::render::KernelGradients;
use crate::types::{Aabb, DenseVolume, GaussianCloud, KernelGraph};

/// Extra Mahalanobis margin applied on top of the confidence radius when
/// evaluating, keeping truncation tails orders of magnitude below the
/// culling error budget.
const EVAL_PAD_SIGMA: f64 = 1.0;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VoxelizeConfig {
    /// Voxels per tile edge.
    pub tile_edge: usize,
    /// Culling confidence: kernels whose confidence ellipsoid misses a tile
    /// are skipped for that tile.
    pub confidence: f64,
    pub use_graph_density: bool,
}

impl Default for VoxelizeConfig {
    fn default() -> Self {
        Self {
            tile_edge: 8,
            confidence: 0.99,
            use_graph_density: true,
        }
    }
}

impl VoxelizeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.tile_edge < 1 {
            return Err(Error::invalid("tile_edge must be >= 1"));
        }
        if !(self.confidence > 0.0 && self.confidence < 1.0) {
            return Err(Error::invalid("confidence must be in (0, 1)"));
        }
        Ok(())
    }
}

/// Chi-square quantile with 3 degrees of freedom: the squared Mahalanobis
/// radius containing `confidence` of a 3D Gaussian's mass.
pub fn chi2_quantile_3(confidence: f64) -> Result<f64> {
    if !(confidence > 0.0 && confidence < 1.0) {
        return Err(Error::invalid("confidence must be in (0, 1)"));
    }
    let dist = ChiSquared::new(3.0).expect("valid dof");
    Ok(dist.inverse_cdf(confidence))
}

/// Distance from a point to an axis-aligned box (zero inside).
fn aabb_distance(b: &Aabb, p: &Vector3<f64>) -> f64 {
    let mut d2 = 0.0;
    for a in 0..3 {
        let d = (b.min[a] - p[a]).max(0.0).max(p[a] - b.max[a]);
        d2 += d * d;
    }
    d2.sqrt()
}

/// Indices of kernels whose confidence ellipsoid can intersect the tile box.
/// Conservative bounding-sphere test: no truly intersecting kernel is ever
/// rejected.
pub fn cull_for_tile(cloud: &GaussianCloud, tile: &Aabb, confidence: f64) -> Result<Vec<usize>> {
    let radius_scale = chi2_quantile_3(confidence)?.sqrt();
    let mut kept = Vec::new();
    for (i, k) in cloud.kernels.iter().enumerate() {
        let s_max = k.scale.x.max(k.scale.y).max(k.scale.z);
        if aabb_distance(tile, &k.position) <= radius_scale * s_max {
            kept.push(i);
        }
    }
    Ok(kept)
}

/// Dense density volume sampled at voxel centers, tile-parallel.
pub fn voxelize(
    cloud: &GaussianCloud,
    graph: Option<&KernelGraph>,
    dims: (usize, usize, usize),
    spacing: Vector3<f64>,
    origin: Vector3<f64>,
    cfg: &VoxelizeConfig,
) -> Result<DenseVolume> {
    cfg.validate()?;
    let boost = effective_boost(cloud, graph, cfg)?;
    let radius_scale = chi2_quantile_3(cfg.confidence)?.sqrt() + EVAL_PAD_SIGMA;
    let trunc2 = radius_scale * radius_scale;

    let frames: Vec<KernelFrame> = cloud
        .kernels
        .iter()
        .map(KernelFrame::new)
        .collect::<Result<_>>()?;

    let mut out = DenseVolume::zeros(dims, spacing, origin)?;
    let (nx, ny, nz) = dims;
    let te = cfg.tile_edge;
    let tiles: Vec<(usize, usize, usize)> = {
        let count = |n: usize| n.div_ceil(te);
        let mut tiles = Vec::new();
        for tz in 0..count(nz) {
            for ty in 0..count(ny) {
                for tx in 0..count(nx) {
                    tiles.push((tx, ty, tz));
                }
            }
        }
        tiles
    };

    let tile_results: Vec<((usize, usize, usize), Vec<f64>)> = tiles
        .par_iter()
        .map(|&(tx, ty, tz)| {
            let x0 = tx * te;
            let y0 = ty * te;
            let z0 = tz * te;
            let x1 = (x0 + te).min(nx);
            let y1 = (y0 + te).min(ny);
            let z1 = (z0 + te).min(nz);
            let tile_box = Aabb {
                min: [
                    origin.x + (x0 as f64 - 0.5) * spacing.x,
                    origin.y + (y0 as f64 - 0.5) * spacing.y,
                    origin.z + (z0 as f64 - 0.5) * spacing.z,
                ],
                max: [
                    origin.x + (x1 as f64 - 0.5) * spacing.x,
                    origin.y + (y1 as f64 - 0.5) * spacing.y,
                    origin.z + (z1 as f64 - 0.5) * spacing.z,
                ],
            };
            // Padded cull so the per-kernel truncation radius is fully
            // covered in whichever tile a voxel lands.
            let kept: Vec<usize> = cloud
                .kernels
                .iter()
                .enumerate()
                .filter(|(_, k)| {
                    let s_max = k.scale.x.max(k.scale.y).max(k.scale.z);
                    aabb_distance(&tile_box, &k.position) <= radius_scale * s_max
                })
                .map(|(i, _)| i)
                .collect();

            let mut values = vec![0.0; (x1 - x0) * (y1 - y0) * (z1 - z0)];
            let mut slot = 0;
            for z in z0..z1 {
                for y in y0..y1 {
                    for x in x0..x1 {
                        let p = Vector3::new(
                            origin.x + x as f64 * spacing.x,
                            origin.y + y as f64 * spacing.y,
                            origin.z + z as f64 * spacing.z,
                        );
                        let mut acc = 0.0;
                        for &i in &kept {
                            let m2 = frames[i].mahalanobis_sq(&cloud.kernels[i].position, &p);
                            if m2 <= trunc2 {
                                acc += boost[i] * cloud.kernels[i].rho * (-0.5 * m2).exp();
                            }
                        }
                        values[slot] = acc;
                        slot += 1;
                    }
                }
            }
            ((tx, ty, tz), values)
        })
        .collect();

    for ((tx, ty, tz), values) in tile_results {
        let x0 = tx * te;
        let y0 = ty * te;
        let z0 = tz * te;
        let x1 = (x0 + te).min(nx);
        let y1 = (y0 + te).min(ny);
        let z1 = (z0 + te).min(nz);
        let mut slot = 0;
        for z in z0..z1 {
            for y in y0..y1 {
                for x in x0..x1 {
                    *out.at_mut(x, y, z) = values[slot];
                    slot += 1;
                }
            }
        }
    }
    Ok(out)
}

/// Exact gradients of `sum_v dL_dvoxels[v] * voxel[v]` w.r.t. every kernel
/// parameter, including the edge-weight dependence on positions when the
/// graph density is on.
pub fn voxelize_backward(
    cloud: &GaussianCloud,
    graph: Option<&KernelGraph>,
    dims: (usize, usize, usize),
    spacing: Vector3<f64>,
    origin: Vector3<f64>,
    dl_dvoxels: &DenseVolume,
    cfg: &VoxelizeConfig,
) -> Result<KernelGradients> {
    cfg.validate()?;
    if dl_dvoxels.dims != dims {
        return Err(Error::invalid("dL/dvoxels shape does not match dims"));
    }
    let boost = effective_boost(cloud, graph, cfg)?;
    let radius_scale = chi2_quantile_3(cfg.confidence)?.sqrt() + EVAL_PAD_SIGMA;
    let trunc2 = radius_scale * radius_scale;
    let (nx, ny, nz) = dims;

    let frames: Vec<KernelFrame> = cloud
        .kernels
        .iter()
        .map(KernelFrame::new)
        .collect::<Result<_>>()?;

    struct Sums {
        t0: f64,
        gp: Vector3<f64>,
        wa: [f64; 6],
    }

    let sums: Vec<Sums> = cloud
        .kernels
        .par_iter()
        .enumerate()
        .map(|(i, kernel)| {
            let frame = &frames[i];
            let mut acc = Sums {
                t0: 0.0,
                gp: Vector3::zeros(),
                wa: [0.0; 6],
            };
            let radius = radius_scale * frame.s_max;
            let lo = |v: f64, o: f64, s: f64| (((v - radius) - o) / s).floor().max(0.0) as usize;
            let hi = |v: f64, o: f64, s: f64, n: usize| {
                ((((v + radius) - o) / s).ceil() as usize).min(n - 1)
            };
            let p0 = kernel.position;
            let (xa, xb) = (lo(p0.x, origin.x, spacing.x), hi(p0.x, origin.x, spacing.x, nx));
            let (ya, yb) = (lo(p0.y, origin.y, spacing.y), hi(p0.y, origin.y, spacing.y, ny));
            let (za, zb) = (lo(p0.z, origin.z, spacing.z), hi(p0.z, origin.z, spacing.z, nz));
            if xa > xb || ya > yb || za > zb {
                return acc;
            }
            for z in za..=zb {
                for y in ya..=yb {
                    for x in xa..=xb {
                        let v = Vector3::new(
                            origin.x + x as f64 * spacing.x,
                            origin.y + y as f64 * spacing.y,
                            origin.z + z as f64 * spacing.z,
                        );
                        let r = v - p0;
                        let ar = frame.inv_cov * r;
                        let m2 = ar.dot(&r);
                        if m2 > trunc2 {
                            continue;
                        }
                        let w_v = dl_dvoxels.at(x, y, z);
                        if w_v == 0.0 {
                            continue;
                        }
                        let g = (-0.5 * m2).exp();
                        let wg = w_v * g;
                        acc.t0 += wg;
                        // dG/dp = G * A r
                        acc.gp += wg * ar;
                        // dG/dA = -1/2 G r r'
                        acc.wa[0] += -0.5 * wg * r.x * r.x;
                        acc.wa[1] += -0.5 * wg * r.y * r.y;
                        acc.wa[2] += -0.5 * wg * r.z * r.z;
                        acc.wa[3] += -0.5 * wg * r.x * r.y;
                        acc.wa[4] += -0.5 * wg * r.x * r.z;
                        acc.wa[5] += -0.5 * wg * r.y * r.z;
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
        grads.contributed[i] = s.t0 != 0.0;
        grads.d_rho[i] = boost[i] * s.t0;
        b_terms[i] = kernel.rho * s.t0;
        let factor = boost[i] * kernel.rho;
        grads.d_position[i] = factor * s.gp;
        let wa = Matrix3::new(
            s.wa[0], s.wa[3], s.wa[4], s.wa[3], s.wa[1], s.wa[5], s.wa[4], s.wa[5], s.wa[2],
        ) * factor;
        let (d_scale, d_rot) = crate::render::chain_shape_gradients(kernel, &frames[i], &wa);
        grads.d_scale[i] = d_scale;
        grads.d_rotation[i] = d_rot;
    }

    if cfg.use_graph_density {
        if let Some(g) = graph {
            crate::render::add_boost_position_terms(cloud, g, &b_terms, &mut grads.d_position);
        }
    }
    Ok(grads)
}

fn effective_boost(
    cloud: &GaussianCloud,
    graph: Option<&KernelGraph>,
    cfg: &VoxelizeConfig,
) -> Result<Vec<f64>> {
    if cfg.use_graph_density {
        let g = graph.ok_or_else(|| {
            Error::inconsistent("use_graph_density requires a kernel graph")
        })?;
        graph_boost(cloud, g)
    } else {
        Ok(vec![1.0; cloud.len()])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{build_mutual_knn, GraphConfig};
    use crate::types::GaussianKernel;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_cloud(seed: u64, n: usize) -> GaussianCloud {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let kernels = (0..n)
            .map(|_| {
                GaussianKernel::new(
                    rng.gen_range(0.3..2.0),
                    Vector3::new(
                        rng.gen_range(-0.7..0.7),
                        rng.gen_range(-0.7..0.7),
                        rng.gen_range(-0.7..0.7),
                    ),
                    Vector3::new(
                        rng.gen_range(0.05..0.2),
                        rng.gen_range(0.05..0.2),
                        rng.gen_range(0.05..0.2),
                    ),
                    [1.0, rng.gen_range(-0.3..0.3), rng.gen_range(-0.3..0.3), 0.0],
                )
                .unwrap()
            })
            .collect();
        GaussianCloud::new(kernels, Aabb::centered_cube(1.0)).unwrap()
    }

    fn grid32() -> ((usize, usize, usize), Vector3<f64>, Vector3<f64>) {
        let v = DenseVolume::unit_cube((32, 32, 32));
        ((32, 32, 32), v.spacing, v.origin)
    }

    #[test]
    fn chi2_fixed_points() {
        // Oracle values from the chi-square inverse CDF at 3 dof.
        assert!((chi2_quantile_3(0.99).unwrap() - 11.345).abs() < 1e-2);
        assert!((chi2_quantile_3(0.99).unwrap().sqrt() - 3.368).abs() < 2e-3);
        assert!(chi2_quantile_3(0.0).is_err());
        assert!(chi2_quantile_3(1.0).is_err());
    }

    #[test]
    fn cull_keeps_kernel_inside_tile() {
        let cloud = GaussianCloud::new(
            vec![GaussianKernel::isotropic(1.0, Vector3::new(0.1, 0.1, 0.1), 0.05).unwrap()],
            Aabb::centered_cube(1.0),
        )
        .unwrap();
        let tile = Aabb::new([0.0; 3], [0.25; 3]).unwrap();
        assert_eq!(cull_for_tile(&cloud, &tile, 0.99).unwrap(), vec![0]);
    }

    #[test]
    fn cull_rejects_beyond_bounding_sphere() {
        let sigma = 0.05;
        let tile = Aabb::new([-0.1; 3], [0.1; 3]).unwrap();
        let half_diag = (3f64).sqrt() * 0.1;
        let cutoff = 3.368 * sigma + half_diag;
        let center = Vector3::new(1.0, 1.0, 1.0).normalize() * (cutoff + 0.01);
        let cloud = GaussianCloud::new(
            vec![GaussianKernel::isotropic(1.0, center, sigma).unwrap()],
            Aabb::centered_cube(2.0),
        )
        .unwrap();
        assert!(cull_for_tile(&cloud, &tile, 0.99).unwrap().is_empty());
    }

    #[test]
    fn cull_is_conservative_vs_sampling_oracle() {
        let cloud = random_cloud(5, 40);
        let tile = Aabb::new([-0.3, -0.2, -0.25], [0.1, 0.3, 0.15]).unwrap();
        let kept = cull_for_tile(&cloud, &tile, 0.99).unwrap();
        let kept_set: std::collections::HashSet<_> = kept.into_iter().collect();
        let chi2 = chi2_quantile_3(0.99).unwrap();
        // Dense sampling: any kernel with a sampled tile point inside its
        // confidence ellipsoid must have been retained.
        for (i, k) in cloud.kernels.iter().enumerate() {
            let frame = KernelFrame::new(k).unwrap();
            let mut intersects = false;
            let steps = 12;
            'outer: for a in 0..=steps {
                for b in 0..=steps {
                    for c in 0..=steps {
                        let p = Vector3::new(
                            tile.min[0] + (tile.max[0] - tile.min[0]) * a as f64 / steps as f64,
                            tile.min[1] + (tile.max[1] - tile.min[1]) * b as f64 / steps as f64,
                            tile.min[2] + (tile.max[2] - tile.min[2]) * c as f64 / steps as f64,
                        );
                        if frame.mahalanobis_sq(&k.position, &p) <= chi2 {
                            intersects = true;
                            break 'outer;
                        }
                    }
                }
            }
            if intersects {
                assert!(kept_set.contains(&i), "kernel {i} wrongly culled");
            }
        }
    }

    #[test]
    fn monotone_culling_in_confidence() {
        let cloud = random_cloud(6, 30);
        let tile = Aabb::new([0.0; 3], [0.3; 3]).unwrap();
        let mut prev: Option<std::collections::HashSet<usize>> = None;
        for conf in [0.5, 0.9, 0.99, 0.999, 0.99999] {
            let kept: std::collections::HashSet<_> =
                cull_for_tile(&cloud, &tile, conf).unwrap().into_iter().collect();
            if let Some(p) = &prev {
                assert!(p.is_subset(&kept), "confidence {conf} dropped kernels");
            }
            prev = Some(kept);
        }
    }

    #[test]
    fn empty_like_cloud_gives_zero_volume() {
        // One negligible kernel far in a corner: the rest of the grid is 0.
        let k = GaussianKernel::isotropic(0.0, Vector3::new(0.9, 0.9, 0.9), 0.01).unwrap();
        let cloud = GaussianCloud::new(vec![k], Aabb::centered_cube(1.0)).unwrap();
        let (dims, sp, or) = grid32();
        let cfg = VoxelizeConfig {
            use_graph_density: false,
            ..Default::default()
        };
        let vol = voxelize(&cloud, None, dims, sp, or, &cfg).unwrap();
        assert!(vol.data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn voxel_center_on_kernel_center_equals_rho() {
        let (dims, sp, or) = grid32();
        // voxel (16,16,16) center
        let center = Vector3::new(
            or.x + 16.0 * sp.x,
            or.y + 16.0 * sp.y,
            or.z + 16.0 * sp.z,
        );
        let k = GaussianKernel::isotropic(1.4, center, 0.1).unwrap();
        let cloud = GaussianCloud::new(vec![k], Aabb::centered_cube(1.0)).unwrap();
        let cfg = VoxelizeConfig {
            use_graph_density: false,
            ..Default::default()
        };
        let vol = voxelize(&cloud, None, dims, sp, or, &cfg).unwrap();
        assert_relative_eq!(vol.at(16, 16, 16), 1.4, epsilon = 1e-12);
    }

    #[test]
    fn matches_brute_force_with_and_without_graph() {
        let cloud = random_cloud(9, 50);
        let graph = build_mutual_knn(&cloud.positions(), &GraphConfig::default()).unwrap();
        let (dims, sp, or) = grid32();
        for use_graph in [false, true] {
            let cfg = VoxelizeConfig {
                use_graph_density: use_graph,
                ..Default::default()
            };
            let vol = voxelize(&cloud, Some(&graph), dims, sp, or, &cfg).unwrap();
            let mut max_err: f64 = 0.0;
            let mut max_val: f64 = 0.0;
            for z in 0..32 {
                for y in 0..32 {
                    for x in 0..32 {
                        let p = vol.voxel_center(x, y, z);
                        let oracle = if use_graph {
                            crate::density::eval_graph_density(&cloud, &graph, &p).unwrap()
                        } else {
                            crate::density::eval_mixture(&cloud, &p).unwrap()
                        };
                        max_val = max_val.max(oracle);
                        max_err = max_err.max((vol.at(x, y, z) - oracle).abs());
                    }
                }
            }
            assert!(
                max_err < 1e-3 * max_val,
                "graph={use_graph}: culling error {max_err} vs max {max_val}"
            );
        }
    }

    #[test]
    fn tiling_invariance() {
        let cloud = random_cloud(10, 30);
        let graph = build_mutual_knn(&cloud.positions(), &GraphConfig::default()).unwrap();
        let (dims, sp, or) = grid32();
        let base = voxelize(
            &cloud,
            Some(&graph),
            dims,
            sp,
            or,
            &VoxelizeConfig {
                tile_edge: 8,
                ..Default::default()
            },
        )
        .unwrap();
        for te in [4usize, 16] {
            let other = voxelize(
                &cloud,
                Some(&graph),
                dims,
                sp,
                or,
                &VoxelizeConfig {
                    tile_edge: te,
                    ..Default::default()
                },
            )
            .unwrap();
            for i in 0..base.data.len() {
                assert!(
                    (base.data[i] - other.data[i]).abs() < 1e-9,
                    "tile_edge {te} changed voxel {i}"
                );
            }
        }
    }

    #[test]
    fn graph_off_requires_no_graph_and_matches_mixture() {
        let cloud = random_cloud(11, 10);
        let (dims, sp, or) = grid32();
        let cfg = VoxelizeConfig {
            use_graph_density: false,
            ..Default::default()
        };
        let vol = voxelize(&cloud, None, dims, sp, or, &cfg).unwrap();
        assert!(vol.max_value() > 0.0);
        // graph on without a graph is an inconsistent call
        let cfg_on = VoxelizeConfig::default();
        assert!(voxelize(&cloud, None, dims, sp, or, &cfg_on).is_err());
    }

    #[test]
    fn backward_zero_weights_zero_gradients() {
        let cloud = random_cloud(12, 6);
        let (dims, sp, or) = grid32();
        let zeros = DenseVolume::zeros(dims, sp, or).unwrap();
        let cfg = VoxelizeConfig {
            use_graph_density: false,
            ..Default::default()
        };
        let g = voxelize_backward(&cloud, None, dims, sp, or, &zeros, &cfg).unwrap();
        for i in 0..cloud.len() {
            assert_eq!(g.d_rho[i], 0.0);
            assert_eq!(g.d_position[i], Vector3::zeros());
        }
    }

    #[test]
    fn backward_rho_gradient_is_weighted_gaussian_sum() {
        // Single kernel, graph off: d_rho = sum_v w_v G(v).
        let cloud = random_cloud(13, 1);
        let (dims, sp, or) = grid32();
        let mut w = DenseVolume::zeros(dims, sp, or).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        for v in w.data.iter_mut() {
            *v = rng.gen_range(-1.0..1.0);
        }
        let cfg = VoxelizeConfig {
            use_graph_density: false,
            ..Default::default()
        };
        let g = voxelize_backward(&cloud, None, dims, sp, or, &w, &cfg).unwrap();
        let frame = KernelFrame::new(&cloud.kernels[0]).unwrap();
        let trunc2 = (chi2_quantile_3(cfg.confidence).unwrap().sqrt() + EVAL_PAD_SIGMA).powi(2);
        let mut oracle = 0.0;
        for z in 0..32 {
            for y in 0..32 {
                for x in 0..32 {
                    let p = w.voxel_center(x, y, z);
                    let m2 = frame.mahalanobis_sq(&cloud.kernels[0].position, &p);
                    if m2 <= trunc2 {
                        oracle += w.at(x, y, z) * (-0.5 * m2).exp();
                    }
                }
            }
        }
        assert_relative_eq!(g.d_rho[0], oracle, epsilon = 1e-10);
    }
}
