//! Sparse depth maps: random sampling from dense ground truth, exact
//! nearest-valid-neighbor search, content-weighted pooling across scales,
//! and the periodic shuffle that brings coarse weight features back to
//! full resolution.

use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::parallel::par_map;
use crate::{BpError, Result};

pub const POOL_EPS: f64 = 1e-12;

/// Dense grid of depths in meters with 0 marking unknown pixels.
#[derive(Clone, Debug)]
pub struct SparseDepthMap {
    pub depth: Vec<f64>,
    pub valid: Vec<bool>,
    pub height: usize,
    pub width: usize,
    pub count: usize,
}

impl SparseDepthMap {
    /// Build from a depth grid; strictly positive entries are valid.
    pub fn from_depth(depth: Vec<f64>, height: usize, width: usize) -> Result<Self> {
        if depth.len() != height * width {
            return Err(BpError::InvalidArgument {
                op: "sparse_map",
                msg: format!("{}x{} grid needs {} values, got {}", height, width, height * width, depth.len()),
            });
        }
        let valid: Vec<bool> = depth.iter().map(|&d| d > 0.0).collect();
        let count = valid.iter().filter(|&&v| v).count();
        Ok(Self {
            depth,
            valid,
            height,
            width,
            count,
        })
    }
}

/// Per-pixel nearest valid neighbors, flattened in row-major target order.
/// Group `i` spans `group_offsets[i]..group_offsets[i+1]` in the flat
/// arrays. Neighbors are sorted by ascending squared Euclidean distance,
/// ties broken by row-major source index.
#[derive(Clone, Debug)]
pub struct NeighborIndex {
    pub sources: Vec<usize>,
    /// Target-to-source pixel offsets `[dx, dy]`.
    pub offsets: Vec<[f64; 2]>,
    pub group_offsets: Arc<Vec<usize>>,
    pub height: usize,
    pub width: usize,
}

impl NeighborIndex {
    pub fn pair_count(&self) -> usize {
        self.sources.len()
    }

    /// Flat list of target pixel ids, one per pair.
    pub fn targets(&self) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.sources.len());
        for i in 0..self.height * self.width {
            for _ in self.group_offsets[i]..self.group_offsets[i + 1] {
                out.push(i);
            }
        }
        out
    }
}

/// Uniform sample of `n_points` valid pixels from a dense positive grid,
/// deterministic per seed.
pub fn sample_sparse(
    dense_gt: &[f64],
    height: usize,
    width: usize,
    n_points: usize,
    seed: u64,
) -> Result<SparseDepthMap> {
    let positives: Vec<usize> = (0..height * width).filter(|&i| dense_gt[i] > 0.0).collect();
    if positives.len() < n_points {
        return Err(BpError::InsufficientPoints {
            requested: n_points,
            available: positives.len(),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let chosen = rand::seq::index::sample(&mut rng, positives.len(), n_points);
    let mut depth = vec![0.0; height * width];
    for j in chosen.iter() {
        depth[positives[j]] = dense_gt[positives[j]];
    }
    SparseDepthMap::from_depth(depth, height, width)
}

/// Exact N nearest valid pixels per target, by expanding Chebyshev rings
/// until no closer candidate can remain outside the scanned area.
pub fn knn(map: &SparseDepthMap, n: usize) -> Result<NeighborIndex> {
    if map.count == 0 {
        return Err(BpError::EmptySparseMap);
    }
    let (h, w) = (map.height, map.width);
    let want = n.min(map.count);
    let max_r = h.max(w);
    let per_pixel: Vec<Vec<(usize, usize)>> = par_map(h * w, |i| {
        let (ty, tx) = (i / w, i % w);
        // (dist2, source id), kept sorted
        let mut best: Vec<(usize, usize)> = Vec::with_capacity(want + 4);
        for r in 0..=max_r {
            if best.len() >= want && r * r > best[want - 1].0 {
                break;
            }
            let y0 = ty as isize - r as isize;
            let y1 = ty as isize + r as isize;
            let x0 = tx as isize - r as isize;
            let x1 = tx as isize + r as isize;
            let mut visit = |y: isize, x: isize| {
                if y < 0 || y >= h as isize || x < 0 || x >= w as isize {
                    return;
                }
                let j = (y as usize) * w + x as usize;
                if !map.valid[j] {
                    return;
                }
                let dy = y - ty as isize;
                let dx = x - tx as isize;
                let d2 = (dy * dy + dx * dx) as usize;
                let entry = (d2, j);
                let pos = best.partition_point(|&e| e < entry);
                best.insert(pos, entry);
            };
            if r == 0 {
                visit(ty as isize, tx as isize);
            } else {
                for x in x0..=x1 {
                    visit(y0, x);
                    visit(y1, x);
                }
                for y in y0 + 1..y1 {
                    visit(y, x0);
                    visit(y, x1);
                }
            }
            best.truncate(want);
        }
        best
    });
    let mut group_offsets = Vec::with_capacity(h * w + 1);
    group_offsets.push(0);
    let mut sources = Vec::new();
    let mut offsets = Vec::new();
    for (i, list) in per_pixel.iter().enumerate() {
        let (ty, tx) = (i / w, i % w);
        for &(_, j) in list {
            let (sy, sx) = (j / w, j % w);
            sources.push(j);
            offsets.push([sx as f64 - tx as f64, sy as f64 - ty as f64]);
        }
        group_offsets.push(sources.len());
    }
    Ok(NeighborIndex {
        sources,
        offsets,
        group_offsets: Arc::new(group_offsets),
        height: h,
        width: w,
    })
}

/// Content-weighted pooling over disjoint `2^s x 2^s` windows. Weights are
/// `exp` of the logits after per-window max subtraction; only valid pixels
/// enter the denominator, so a window's output is a weighted average of its
/// valid depths (up to the stabilizing epsilon).
pub fn weighted_pool(
    map: &SparseDepthMap,
    weight_logits: &[f64],
    scale: usize,
) -> Result<SparseDepthMap> {
    if scale == 0 {
        return Err(BpError::InvalidArgument {
            op: "weighted_pool",
            msg: "scale must be >= 1".into(),
        });
    }
    let (h, w) = (map.height, map.width);
    let win = 1usize << scale;
    if h % win != 0 || w % win != 0 {
        return Err(BpError::Indivisible { h, w, m: win });
    }
    if weight_logits.len() != h * w {
        return Err(BpError::ShapeMismatch {
            op: "weighted_pool",
            lhs: vec![h, w],
            rhs: vec![weight_logits.len()],
        });
    }
    let (oh, ow) = (h / win, w / win);
    let out: Vec<f64> = par_map(oh * ow, |o| {
        let (oy, ox) = (o / ow, o % ow);
        let mut mx = f64::NEG_INFINITY;
        for dy in 0..win {
            for dx in 0..win {
                mx = mx.max(weight_logits[(oy * win + dy) * w + ox * win + dx]);
            }
        }
        let mut num = 0.0;
        let mut den = POOL_EPS;
        for dy in 0..win {
            for dx in 0..win {
                let j = (oy * win + dy) * w + ox * win + dx;
                let e = (weight_logits[j] - mx).exp();
                if map.valid[j] {
                    num += e * map.depth[j];
                    den += e;
                }
            }
        }
        num / den
    });
    SparseDepthMap::from_depth(out, oh, ow)
}

/// Periodic shuffle of a `[4^s, h, w]` feature map into a full-resolution
/// `[h*2^s, w*2^s]` grid; each coarse cell's channels fill its `2^s x 2^s`
/// block in row-major order. `s = 0` is the identity.
pub fn shuffle_weights(
    feature: &[f64],
    channels: usize,
    h: usize,
    w: usize,
    scale: usize,
) -> Result<Vec<f64>> {
    let win = 1usize << scale;
    if channels != win * win {
        return Err(BpError::InvalidArgument {
            op: "shuffle_weights",
            msg: format!("expected {} channels for scale {}, got {}", win * win, scale, channels),
        });
    }
    if feature.len() != channels * h * w {
        return Err(BpError::ShapeMismatch {
            op: "shuffle_weights",
            lhs: vec![channels, h, w],
            rhs: vec![feature.len()],
        });
    }
    let (oh, ow) = (h * win, w * win);
    let mut out = vec![0.0; oh * ow];
    for yc in 0..h {
        for xc in 0..w {
            for by in 0..win {
                for bx in 0..win {
                    let c = by * win + bx;
                    out[(yc * win + by) * ow + xc * win + bx] = feature[(c * h + yc) * w + xc];
                }
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;

    fn map_from(depth: Vec<f64>, h: usize, w: usize) -> SparseDepthMap {
        SparseDepthMap::from_depth(depth, h, w).unwrap()
    }

    /// Brute-force nearest neighbors: all-pairs distances, sorted by
    /// squared distance then source index.
    fn knn_oracle(map: &SparseDepthMap, n: usize) -> Vec<Vec<usize>> {
        let (h, w) = (map.height, map.width);
        let valid: Vec<usize> = (0..h * w).filter(|&j| map.valid[j]).collect();
        (0..h * w)
            .map(|i| {
                let (ty, tx) = ((i / w) as isize, (i % w) as isize);
                let mut cand: Vec<(usize, usize)> = valid
                    .iter()
                    .map(|&j| {
                        let (sy, sx) = ((j / w) as isize, (j % w) as isize);
                        (((sy - ty).pow(2) + (sx - tx).pow(2)) as usize, j)
                    })
                    .collect();
                cand.sort_unstable();
                cand.truncate(n.min(valid.len()));
                cand.into_iter().map(|(_, j)| j).collect()
            })
            .collect()
    }

    #[test]
    fn knn_matches_oracle_on_fixed_grid() {
        let mut depth = vec![0.0; 7 * 9];
        for &j in &[3, 10, 17, 30, 44, 58, 62] {
            depth[j] = 1.0 + j as f64;
        }
        let map = map_from(depth, 7, 9);
        for n in 1..=5 {
            let idx = knn(&map, n).unwrap();
            let oracle = knn_oracle(&map, n);
            for (i, expect) in oracle.iter().enumerate() {
                let got =
                    &idx.sources[idx.group_offsets[i]..idx.group_offsets[i + 1]];
                assert_eq!(got, &expect[..], "target {i}, n {n}");
            }
        }
    }

    #[test]
    fn knn_offsets_point_from_target_to_source() {
        let mut depth = vec![0.0; 4 * 4];
        depth[1] = 2.0; // (y 0, x 1)
        let map = map_from(depth, 4, 4);
        let idx = knn(&map, 1).unwrap();
        // target at (y 2, x 3) -> offset [dx, dy] = [1-3, 0-2]
        let t = 2 * 4 + 3;
        assert_eq!(idx.offsets[idx.group_offsets[t]], [-2.0, -2.0]);
        assert_eq!(idx.sources[idx.group_offsets[t]], 1);
    }

    #[test]
    fn knn_ties_break_by_row_major_source() {
        // two valid pixels equidistant from the target between them
        let mut depth = vec![0.0; 1 * 5];
        depth[0] = 1.0;
        depth[4] = 2.0;
        let map = map_from(depth, 1, 5);
        let idx = knn(&map, 1).unwrap();
        assert_eq!(idx.sources[idx.group_offsets[2]], 0);
    }

    #[test]
    fn knn_empty_map_errors() {
        let map = SparseDepthMap::from_depth(vec![0.0; 4], 2, 2).unwrap();
        assert_eq!(map.count, 0);
        assert!(matches!(knn(&map, 1), Err(BpError::EmptySparseMap)));
    }

    #[test]
    fn sample_sparse_is_deterministic_and_exact() {
        let gt: Vec<f64> = (0..64).map(|i| 1.0 + (i % 7) as f64).collect();
        let a = sample_sparse(&gt, 8, 8, 10, 42).unwrap();
        let b = sample_sparse(&gt, 8, 8, 10, 42).unwrap();
        assert_eq!(a.depth, b.depth);
        assert_eq!(a.count, 10);
        let c = sample_sparse(&gt, 8, 8, 10, 43).unwrap();
        assert_ne!(a.depth, c.depth);
        assert!(matches!(
            sample_sparse(&gt, 8, 8, 100, 0),
            Err(BpError::InsufficientPoints { .. })
        ));
    }

    #[test]
    fn pooling_shift_invariance_and_single_window() {
        let mut depth = vec![0.0; 4 * 4];
        depth[0] = 2.0;
        depth[5] = 3.0;
        depth[10] = 7.5;
        let map = map_from(depth, 4, 4);
        let logits: Vec<f64> = (0..16).map(|i| (i as f64 * 0.37).sin()).collect();
        let a = weighted_pool(&map, &logits, 1).unwrap();
        let shifted: Vec<f64> = logits.iter().map(|&v| v + 123.456).collect();
        let b = weighted_pool(&map, &shifted, 1).unwrap();
        for (x, y) in a.depth.iter().zip(&b.depth) {
            assert!((x - y).abs() < 1e-9, "{x} vs {y}");
        }
        // window with exactly one valid pixel reproduces its depth
        assert!((a.depth[3] - 7.5).abs() < 1e-6);
        // windows with no valid pixels stay invalid
        assert!(!a.valid[1] && !a.valid[2]);
        // validity OR: every output window with >= 1 valid input is valid
        assert!(a.valid[0] && a.valid[3]);
        assert_eq!(a.count, 2);
        // weighted average stays inside the window's depth range
        assert!(a.depth[0] > 2.0 - 1e-9 && a.depth[0] < 3.0 + 1e-9);
    }

    #[test]
    fn pooling_output_within_window_depth_range() {
        let mut depth = vec![0.0; 4];
        depth[0] = 2.0;
        depth[3] = 6.0;
        let map = map_from(depth, 2, 2);
        let out = weighted_pool(&map, &[0.3, -0.8, 0.1, 0.9], 1).unwrap();
        assert!(out.depth[0] > 2.0 - 1e-9 && out.depth[0] < 6.0 + 1e-9);
    }

    #[test]
    fn pooling_rejects_bad_arguments() {
        let map = map_from(vec![1.0, 0.0, 0.0, 0.0], 2, 2);
        assert!(weighted_pool(&map, &[0.0; 4], 0).is_err());
        assert!(weighted_pool(&map, &[0.0; 3], 1).is_err());
        let odd = map_from(vec![1.0; 6], 2, 3);
        assert!(matches!(
            weighted_pool(&odd, &[0.0; 6], 1),
            Err(BpError::Indivisible { .. })
        ));
    }

    #[test]
    fn shuffle_round_trip_and_identity() {
        // scale 1: channels fill 2x2 blocks row-major
        let feat: Vec<f64> = (0..4 * 2 * 2).map(f64::from).collect();
        let full = shuffle_weights(&feat, 4, 2, 2, 1).unwrap();
        assert_eq!(full.len(), 16);
        // coarse cell (0,0): channels 0..4 at positions (0,0),(0,1),(1,0),(1,1)
        assert_eq!(full[0], feat[0]);
        assert_eq!(full[1], feat[4]);
        assert_eq!(full[4], feat[8]);
        assert_eq!(full[5], feat[12]);
        // inverse gather reproduces the feature exactly
        for c in 0..4 {
            for cy in 0..2 {
                for cx in 0..2 {
                    let (dy, dx) = (c / 2, c % 2);
                    assert_eq!(
                        full[(cy * 2 + dy) * 4 + cx * 2 + dx],
                        feat[c * 4 + cy * 2 + cx]
                    );
                }
            }
        }
        let id = shuffle_weights(&[5.0, 6.0], 1, 1, 2, 0).unwrap();
        assert_eq!(id, vec![5.0, 6.0]);
        assert!(shuffle_weights(&feat, 4, 2, 2, 2).is_err());
    }

    proptest! {
        #[test]
        fn prop_knn_matches_brute_force(
            seed in 0u64..1000,
            h in 2usize..8,
            w in 2usize..8,
            n in 1usize..5,
            density in 0.1f64..0.9,
        ) {
            use rand::Rng;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let depth: Vec<f64> = (0..h * w)
                .map(|_| if rng.gen_bool(density) { rng.gen_range(0.5..9.0) } else { 0.0 })
                .collect();
            prop_assume!(depth.iter().any(|&d| d > 0.0));
            let map = map_from(depth, h, w);
            let idx = knn(&map, n).unwrap();
            let oracle = knn_oracle(&map, n);
            for (i, expect) in oracle.iter().enumerate() {
                let got = &idx.sources[idx.group_offsets[i]..idx.group_offsets[i + 1]];
                prop_assert_eq!(got, &expect[..]);
            }
        }

        #[test]
        fn prop_pooling_shift_invariant(seed in 0u64..500, shift in -50.0f64..50.0) {
            use rand::Rng;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let depth: Vec<f64> = (0..16)
                .map(|_| if rng.gen_bool(0.5) { rng.gen_range(0.5..9.0) } else { 0.0 })
                .collect();
            prop_assume!(depth.iter().any(|&d| d > 0.0));
            let map = map_from(depth, 4, 4);
            let logits: Vec<f64> = (0..16).map(|_| rng.gen_range(-3.0..3.0)).collect();
            let a = weighted_pool(&map, &logits, 1).unwrap();
            let shifted: Vec<f64> = logits.iter().map(|&v| v + shift).collect();
            let b = weighted_pool(&map, &shifted, 1).unwrap();
            for (x, y) in a.depth.iter().zip(&b.depth) {
                prop_assert!((x - y).abs() < 1e-9);
            }
        }
    }
}
