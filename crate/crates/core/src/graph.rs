//! Mutual-KNN graph construction over kernel positions, edge weights, graph
//! Laplacian energy, and per-kernel density-difference sums.

use nalgebra::Vector3;

use crate::error::{Error, Result};
use crate::types::{GaussianCloud, KernelGraph};

/// Point count above which neighbor search switches from exhaustive O(n^2)
/// to spatial-grid bucketing. The exhaustive path doubles as the oracle the
/// grid path is validated against.
const GRID_THRESHOLD: usize = 2_000;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GraphConfig {
    /// Neighbor count K of the KNN rule.
    pub knn_k: usize,
    /// Scaling factor in the edge-weight exponential.
    pub scaling_k: f64,
}

impl Default for GraphConfig {
    fn default() -> Self {
        Self {
            knn_k: 6,
            scaling_k: 6.0,
        }
    }
}

impl GraphConfig {
    pub fn validate(&self) -> Result<()> {
        if self.knn_k < 1 {
            return Err(Error::invalid("knn_k must be >= 1"));
        }
        if !(self.scaling_k.is_finite() && self.scaling_k > 0.0) {
            return Err(Error::invalid("scaling_k must be positive"));
        }
        Ok(())
    }
}

/// w = exp(-|p_i - p_j|^2 / k). Equals 1 only for coincident positions.
pub fn edge_weight(p_i: &Vector3<f64>, p_j: &Vector3<f64>, scaling_k: f64) -> f64 {
    (-(p_i - p_j).norm_squared() / scaling_k).exp()
}

/// Mutual-KNN graph: edge (i, j) exists iff j is among the K nearest
/// neighbors of i and i among the K nearest of j. Ties break by smaller
/// index so results are identical across runs and search paths.
pub fn build_mutual_knn(positions: &[Vector3<f64>], cfg: &GraphConfig) -> Result<KernelGraph> {
    cfg.validate()?;
    if positions.len() < 2 {
        return Err(Error::invalid("mutual KNN needs at least 2 positions"));
    }
    let knn = if positions.len() <= GRID_THRESHOLD {
        knn_exhaustive(positions, cfg.knn_k)
    } else {
        knn_grid(positions, cfg.knn_k)
    };
    mutualize(positions, &knn, cfg.scaling_k)
}

/// Exhaustive K-nearest lists; the correctness oracle for the grid path.
pub fn knn_exhaustive(positions: &[Vector3<f64>], k: usize) -> Vec<Vec<u32>> {
    let n = positions.len();
    let k = k.min(n - 1);
    let mut out = Vec::with_capacity(n);
    let mut cand: Vec<(f64, u32)> = Vec::with_capacity(n - 1);
    for i in 0..n {
        cand.clear();
        for j in 0..n {
            if j == i {
                continue;
            }
            cand.push(((positions[i] - positions[j]).norm_squared(), j as u32));
        }
        cand.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        out.push(cand[..k].iter().map(|&(_, j)| j).collect());
    }
    out
}

/// Grid-bucketed K-nearest lists; expands shells of cells until the K-th
/// best distance is closed out. Same (distance, index) tie rule as the
/// exhaustive path.
fn knn_grid(positions: &[Vector3<f64>], k: usize) -> Vec<Vec<u32>> {
    let n = positions.len();
    let k = k.min(n - 1);

    let mut lo = positions[0];
    let mut hi = positions[0];
    for p in positions {
        for a in 0..3 {
            lo[a] = lo[a].min(p[a]);
            hi[a] = hi[a].max(p[a]);
        }
    }
    // Aim for a few points per cell.
    let target_cells = (n as f64 / 4.0).max(1.0);
    let cells_per_axis = (target_cells.powf(1.0 / 3.0).ceil() as usize).max(1);
    let mut cell_size = 0.0f64;
    for a in 0..3 {
        cell_size = cell_size.max((hi[a] - lo[a]) / cells_per_axis as f64);
    }
    if cell_size <= 0.0 {
        // all points coincide; grid degenerates, use the oracle path
        return knn_exhaustive(positions, k);
    }
    let dims = |a: usize| (((hi[a] - lo[a]) / cell_size).floor() as usize + 1).max(1);
    let (nx, ny, nz) = (dims(0), dims(1), dims(2));
    let cell_of = |p: &Vector3<f64>| {
        let c = |a: usize, v: f64| {
            (((v - lo[a]) / cell_size).floor() as usize).min([nx, ny, nz][a] - 1)
        };
        (c(0, p.x), c(1, p.y), c(2, p.z))
    };
    let mut buckets: Vec<Vec<u32>> = vec![Vec::new(); nx * ny * nz];
    for (i, p) in positions.iter().enumerate() {
        let (cx, cy, cz) = cell_of(p);
        buckets[cx + nx * (cy + ny * cz)].push(i as u32);
    }

    let mut out = Vec::with_capacity(n);
    let mut cand: Vec<(f64, u32)> = Vec::new();
    for i in 0..n {
        let p = &positions[i];
        let (cx, cy, cz) = cell_of(p);
        cand.clear();
        let mut ring = 0usize;
        loop {
            // visit cells whose Chebyshev distance from the home cell is `ring`
            let x0 = cx.saturating_sub(ring);
            let x1 = (cx + ring).min(nx - 1);
            let y0 = cy.saturating_sub(ring);
            let y1 = (cy + ring).min(ny - 1);
            let z0 = cz.saturating_sub(ring);
            let z1 = (cz + ring).min(nz - 1);
            for z in z0..=z1 {
                for y in y0..=y1 {
                    for x in x0..=x1 {
                        let on_shell = x == x0 || x == x1 || y == y0 || y == y1 || z == z0 || z == z1;
                        let is_ring = x.abs_diff(cx).max(y.abs_diff(cy)).max(z.abs_diff(cz)) == ring;
                        if !(on_shell && is_ring) {
                            continue;
                        }
                        for &j in &buckets[x + nx * (y + ny * z)] {
                            if j as usize == i {
                                continue;
                            }
                            cand.push(((p - positions[j as usize]).norm_squared(), j));
                        }
                    }
                }
            }
            // Points further than `ring` cells away are at least this far:
            let safe = ring as f64 * cell_size;
            if cand.len() >= k {
                cand.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
                cand.dedup_by_key(|c| c.1);
                if cand.len() >= k && cand[k - 1].0.sqrt() <= safe {
                    break;
                }
            }
            let exhausted = x0 == 0 && y0 == 0 && z0 == 0 && x1 == nx - 1 && y1 == ny - 1 && z1 == nz - 1;
            if exhausted {
                cand.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
                cand.dedup_by_key(|c| c.1);
                break;
            }
            ring += 1;
        }
        out.push(cand[..k.min(cand.len())].iter().map(|&(_, j)| j).collect());
    }
    out
}

/// Keep only reciprocated edges, attach weights, sort neighbor lists.
fn mutualize(positions: &[Vector3<f64>], knn: &[Vec<u32>], scaling_k: f64) -> Result<KernelGraph> {
    let n = positions.len();
    let mut sets: Vec<std::collections::HashSet<u32>> = Vec::with_capacity(n);
    for list in knn {
        sets.push(list.iter().cloned().collect());
    }
    let mut neighbors: Vec<Vec<u32>> = vec![Vec::new(); n];
    for i in 0..n {
        for &j in &knn[i] {
            if (j as usize) > i && sets[j as usize].contains(&(i as u32)) {
                neighbors[i].push(j);
                neighbors[j as usize].push(i as u32);
            }
        }
    }
    let mut weights: Vec<Vec<f64>> = Vec::with_capacity(n);
    for i in 0..n {
        neighbors[i].sort_unstable();
        weights.push(
            neighbors[i]
                .iter()
                .map(|&j| edge_weight(&positions[i], &positions[j as usize], scaling_k))
                .collect(),
        );
    }
    Ok(KernelGraph {
        neighbors,
        weights,
        scaling_k,
    })
}

/// Graph Laplacian energy over stored weights, plus its gradient w.r.t. the
/// per-kernel densities. The double sum counts each undirected edge twice,
/// as written; the loss weight absorbs the factor.
pub fn laplacian_energy(cloud: &GaussianCloud, graph: &KernelGraph) -> Result<(f64, Vec<f64>)> {
    graph.check_matches(cloud)?;
    let n = cloud.len();
    let mut energy = 0.0;
    let mut grad = vec![0.0; n];
    for i in 0..n {
        let rho_i = cloud.kernels[i].rho;
        for (a, &j) in graph.neighbors[i].iter().enumerate() {
            let w = graph.weights[i][a];
            let diff = rho_i - cloud.kernels[j as usize].rho;
            energy += w * diff * diff;
            // d/d rho_i of w_ij (rho_i - rho_j)^2 appearing in both i- and
            // j-rooted terms: 4 w_ij (rho_i - rho_j) total.
            grad[i] += 4.0 * w * diff;
        }
    }
    Ok((energy, grad))
}

/// Sum of |rho_i - rho_j| over the neighbors of kernel `i`.
pub fn density_difference_sum(cloud: &GaussianCloud, graph: &KernelGraph, i: usize) -> f64 {
    let rho_i = cloud.kernels[i].rho;
    graph.neighbors[i]
        .iter()
        .map(|&j| (rho_i - cloud.kernels[j as usize].rho).abs())
        .sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::{Aabb, GaussianKernel};
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_positions(n: usize, seed: u64) -> Vec<Vector3<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| {
                Vector3::new(
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(-1.0..1.0),
                )
            })
            .collect()
    }

    fn cloud_with_rhos(positions: &[Vector3<f64>], rhos: &[f64]) -> GaussianCloud {
        let kernels = positions
            .iter()
            .zip(rhos)
            .map(|(p, &r)| GaussianKernel::isotropic(r, *p, 0.1).unwrap())
            .collect();
        GaussianCloud::new(kernels, Aabb::centered_cube(2.0)).unwrap()
    }

    /// O(n^2) mutual-KNN edge set straight from the definition.
    fn brute_edge_set(positions: &[Vector3<f64>], k: usize) -> std::collections::BTreeSet<(u32, u32)> {
        let lists = knn_exhaustive(positions, k);
        let mut edges = std::collections::BTreeSet::new();
        for (i, list) in lists.iter().enumerate() {
            for &j in list {
                if lists[j as usize].contains(&(i as u32)) {
                    let (a, b) = if (i as u32) < j { (i as u32, j) } else { (j, i as u32) };
                    edges.insert((a, b));
                }
            }
        }
        edges
    }

    fn edge_set(graph: &KernelGraph) -> std::collections::BTreeSet<(u32, u32)> {
        let mut edges = std::collections::BTreeSet::new();
        for (i, neigh) in graph.neighbors.iter().enumerate() {
            for &j in neigh {
                let (a, b) = if (i as u32) < j { (i as u32, j) } else { (j, i as u32) };
                edges.insert((a, b));
            }
        }
        edges
    }

    #[test]
    fn collinear_points_single_reciprocated_edge() {
        let positions = vec![
            Vector3::new(0.0, 0.0, 0.0),
            Vector3::new(1.0, 0.0, 0.0),
            Vector3::new(3.0, 0.0, 0.0),
        ];
        let g = build_mutual_knn(&positions, &GraphConfig { knn_k: 1, scaling_k: 6.0 }).unwrap();
        assert_eq!(edge_set(&g).into_iter().collect::<Vec<_>>(), vec![(0, 1)]);
        assert!(g.neighbors[2].is_empty(), "stranded vertex stays edgeless");
    }

    #[test]
    fn equilateral_triangle_fully_connected() {
        let positions = vec![
            Vector3::new(0.0, 0.0, 0.0),
            Vector3::new(1.0, 0.0, 0.0),
            Vector3::new(0.5, 3f64.sqrt() / 2.0, 0.0),
        ];
        let g = build_mutual_knn(&positions, &GraphConfig { knn_k: 2, scaling_k: 6.0 }).unwrap();
        assert_eq!(g.edge_count(), 3);
        g.validate().unwrap();
    }

    #[test]
    fn random_points_match_brute_force_oracle() {
        let positions = random_positions(500, 7);
        for k in [1usize, 4, 6, 8] {
            let g = build_mutual_knn(&positions, &GraphConfig { knn_k: k, scaling_k: 6.0 }).unwrap();
            assert_eq!(edge_set(&g), brute_edge_set(&positions, k), "K={k}");
            g.validate().unwrap();
        }
    }

    #[test]
    fn grid_path_matches_exhaustive_oracle() {
        // Above GRID_THRESHOLD the builder switches to the bucketed search.
        let positions = random_positions(2_500, 13);
        let cfg = GraphConfig { knn_k: 6, scaling_k: 6.0 };
        let grid = build_mutual_knn(&positions, &cfg).unwrap();
        assert_eq!(edge_set(&grid), brute_edge_set(&positions, 6));
    }

    #[test]
    fn duplicate_positions_allowed_weight_one() {
        let positions = vec![
            Vector3::new(0.2, 0.0, 0.0),
            Vector3::new(0.2, 0.0, 0.0),
            Vector3::new(0.9, 0.0, 0.0),
        ];
        let g = build_mutual_knn(&positions, &GraphConfig { knn_k: 1, scaling_k: 6.0 }).unwrap();
        let edges = edge_set(&g);
        assert!(edges.contains(&(0, 1)));
        assert_relative_eq!(g.weights[0][0], 1.0, epsilon = 1e-15);
    }

    #[test]
    fn fewer_than_k_plus_one_points_uses_all_others() {
        let positions = vec![Vector3::zeros(), Vector3::new(0.5, 0.0, 0.0)];
        let g = build_mutual_knn(&positions, &GraphConfig { knn_k: 6, scaling_k: 6.0 }).unwrap();
        assert_eq!(g.edge_count(), 1);
    }

    #[test]
    fn symmetry_randomized() {
        for seed in 0..20 {
            let positions = random_positions(50, 1000 + seed);
            let g = build_mutual_knn(&positions, &GraphConfig { knn_k: 4, scaling_k: 6.0 }).unwrap();
            g.validate().unwrap();
        }
    }

    #[test]
    fn edge_weight_analytic_values() {
        let o = Vector3::zeros();
        assert_relative_eq!(edge_weight(&o, &o, 6.0), 1.0, epsilon = 1e-15);
        let p = Vector3::new(6f64.sqrt(), 0.0, 0.0);
        assert_relative_eq!(edge_weight(&o, &p, 6.0), (-1f64).exp(), epsilon = 1e-12);
        let q = Vector3::new(3f64.sqrt(), 0.0, 0.0);
        assert_relative_eq!(edge_weight(&o, &q, 6.0), (-0.5f64).exp(), epsilon = 1e-12);
    }

    #[test]
    fn laplacian_zero_for_constant_rho() {
        let positions = random_positions(20, 3);
        let cloud = cloud_with_rhos(&positions, &vec![0.7; 20]);
        let g = build_mutual_knn(&positions, &GraphConfig::default()).unwrap();
        let (e, grad) = laplacian_energy(&cloud, &g).unwrap();
        assert_eq!(e, 0.0);
        assert!(grad.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn laplacian_two_kernel_hand_value() {
        let positions = vec![Vector3::zeros(), Vector3::new(0.1, 0.0, 0.0)];
        let cloud = cloud_with_rhos(&positions, &[1.0, 3.0]);
        let graph = KernelGraph {
            neighbors: vec![vec![1], vec![0]],
            weights: vec![vec![0.5], vec![0.5]],
            scaling_k: 6.0,
        };
        let (e, grad) = laplacian_energy(&cloud, &graph).unwrap();
        assert_relative_eq!(e, 4.0, epsilon = 1e-14);
        assert_relative_eq!(grad[0], 4.0 * 0.5 * (1.0 - 3.0), epsilon = 1e-14);
        assert_relative_eq!(grad[1], 4.0 * 0.5 * (3.0 - 1.0), epsilon = 1e-14);
    }

    #[test]
    fn laplacian_gradient_matches_finite_differences() {
        let positions = random_positions(20, 17);
        let mut rng = ChaCha8Rng::seed_from_u64(18);
        let rhos: Vec<f64> = (0..20).map(|_| rng.gen_range(0.1..2.0)).collect();
        let cloud = cloud_with_rhos(&positions, &rhos);
        let g = build_mutual_knn(&positions, &GraphConfig::default()).unwrap();
        let (_, grad) = laplacian_energy(&cloud, &g).unwrap();

        let h = 1e-6;
        for i in 0..20 {
            let mut plus = cloud.clone();
            plus.kernels[i].rho += h;
            let mut minus = cloud.clone();
            minus.kernels[i].rho -= h;
            let fd = (laplacian_energy(&plus, &g).unwrap().0
                - laplacian_energy(&minus, &g).unwrap().0)
                / (2.0 * h);
            let denom = fd.abs().max(1e-8);
            assert!(
                (grad[i] - fd).abs() / denom < 1e-6,
                "kernel {i}: analytic {} vs fd {fd}",
                grad[i]
            );
        }
    }

    #[test]
    fn laplacian_invariant_under_constant_shift_and_nonnegative() {
        let positions = random_positions(30, 23);
        let mut rng = ChaCha8Rng::seed_from_u64(24);
        let rhos: Vec<f64> = (0..30).map(|_| rng.gen_range(0.1..2.0)).collect();
        let g = build_mutual_knn(&positions, &GraphConfig::default()).unwrap();
        let (e0, _) = laplacian_energy(&cloud_with_rhos(&positions, &rhos), &g).unwrap();
        let shifted: Vec<f64> = rhos.iter().map(|r| r + 0.37).collect();
        let (e1, _) = laplacian_energy(&cloud_with_rhos(&positions, &shifted), &g).unwrap();
        assert!(e0 >= 0.0);
        assert!((e0 - e1).abs() < 1e-10);
    }

    #[test]
    fn gradient_descent_on_laplacian_shrinks_max_edge_gap() {
        let positions = random_positions(25, 31);
        let mut rng = ChaCha8Rng::seed_from_u64(32);
        let mut rhos: Vec<f64> = (0..25).map(|_| rng.gen_range(0.0..2.0)).collect();
        let g = build_mutual_knn(&positions, &GraphConfig::default()).unwrap();

        let max_gap = |rhos: &[f64]| {
            let mut m: f64 = 0.0;
            for (i, neigh) in g.neighbors.iter().enumerate() {
                for &j in neigh {
                    m = m.max((rhos[i] - rhos[j as usize]).abs());
                }
            }
            m
        };
        let gap0 = max_gap(&rhos);
        assert!(gap0 > 0.0);
        for _ in 0..1000 {
            let cloud = cloud_with_rhos(&positions, &rhos);
            let (_, grad) = laplacian_energy(&cloud, &g).unwrap();
            for (r, gr) in rhos.iter_mut().zip(&grad) {
                *r -= 0.01 * gr;
            }
        }
        assert!(max_gap(&rhos) < gap0);
    }

    #[test]
    fn density_difference_sum_cases() {
        let positions = vec![
            Vector3::zeros(),
            Vector3::new(0.1, 0.0, 0.0),
            Vector3::new(0.0, 0.1, 0.0),
            Vector3::new(0.0, 0.0, 0.1),
        ];
        let cloud = cloud_with_rhos(&positions, &[0.8, 0.5, 0.2, 0.8]);
        let graph = KernelGraph {
            neighbors: vec![vec![1, 2, 3], vec![0], vec![0], vec![0]],
            weights: vec![vec![0.9, 0.9, 0.9], vec![0.9], vec![0.9], vec![0.9]],
            scaling_k: 6.0,
        };
        assert_relative_eq!(density_difference_sum(&cloud, &graph, 0), 0.9, epsilon = 1e-14);

        // isolated kernel
        let lone = KernelGraph::edgeless(4, 6.0);
        assert_eq!(density_difference_sum(&cloud, &lone, 2), 0.0);

        // brute-force loop oracle on a random instance
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let pts = random_positions(40, 78);
        let rhos: Vec<f64> = (0..40).map(|_| rng.gen_range(0.0..1.0)).collect();
        let c = cloud_with_rhos(&pts, &rhos);
        let g = build_mutual_knn(&pts, &GraphConfig::default()).unwrap();
        for i in 0..40 {
            let oracle: f64 = g.neighbors[i]
                .iter()
                .map(|&j| (rhos[i] - rhos[j as usize]).abs())
                .sum();
            assert_eq!(density_difference_sum(&c, &g, i), oracle);
        }
    }
}
