//! Bilateral propagation: a dense initial depth map is predicted per scale
//! as a convex combination of affine-transformed nearby valid depths, with
//! coefficients regressed by a shared MLP from image content, camera-space
//! depth and pixel offset.

use std::sync::Arc;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::params::{Ctx, ParamSet};
use crate::autodiff::{BnLayout, Var};
use crate::geometry::{inverse_project, CameraIntrinsics};
use crate::nn::{BatchNormLayer, Conv2dLayer, Deconv2dLayer, LinearLayer};
use crate::sparse::{knn, NeighborIndex, SparseDepthMap};
use crate::{BpError, Result};

/// Which coefficient-generation inputs are active.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationMode {
    #[default]
    Full,
    /// Offsets zeroed: coefficients depend only on content.
    ContentOnly,
    /// Content inputs zeroed: coefficients depend only on offsets.
    SpatialOnly,
}

/// Per-scale inputs to coefficient generation.
pub struct PriorEncodings {
    pub image_encoding: Var,
    pub depth_encoding: Var,
    pub neighbor_index: NeighborIndex,
}

/// Shared four-layer MLP with BN + GeLU after each layer, a skip adding the
/// second and fourth layer outputs, and a 3-column head for alpha, beta and
/// the omega logit.
pub struct CoefficientMlp {
    layers: Vec<(LinearLayer, BatchNormLayer)>,
    head: LinearLayer,
    pub in_dim: usize,
    pub hidden: usize,
}

impl CoefficientMlp {
    pub fn new(
        ps: &mut ParamSet,
        rng: &mut ChaCha8Rng,
        name: &str,
        channels: usize,
        hidden: usize,
    ) -> Self {
        let in_dim = 2 * channels + 3 + 2;
        let mut layers = Vec::with_capacity(4);
        for l in 0..4 {
            let din = if l == 0 { in_dim } else { hidden };
            layers.push((
                LinearLayer::new(ps, rng, &format!("{name}.fc{l}"), din, hidden),
                BatchNormLayer::new(ps, &format!("{name}.bn{l}"), hidden, BnLayout::Features),
            ));
        }
        let head = LinearLayer::new(ps, rng, &format!("{name}.head"), hidden, 3);
        Self {
            layers,
            head,
            in_dim,
            hidden,
        }
    }
}

/// Pairwise coefficients aligned with a [`NeighborIndex`].
pub struct BilateralCoefficients {
    pub alpha: Var,
    pub beta: Var,
    pub omega: Var,
    pub targets: Arc<Vec<usize>>,
    pub sources: Vec<usize>,
}

/// Run the coefficient MLP over every (target, neighbor) pair.
/// Offsets are divided by `max(h, w)` when `normalize_offsets` is set so
/// the MLP inputs stay O(1).
pub fn generate_coefficients(
    ctx: &Ctx,
    enc: &PriorEncodings,
    mlp: &CoefficientMlp,
    mode: AblationMode,
    normalize_offsets: bool,
) -> Result<BilateralCoefficients> {
    let n = &enc.neighbor_index;
    if n.pair_count() == 0 {
        return Err(BpError::EmptySparseMap);
    }
    let ishape = enc.image_encoding.shape();
    if ishape.len() != 3 || ishape[1] != n.height || ishape[2] != n.width {
        return Err(BpError::ShapeMismatch {
            op: "generate_coefficients",
            lhs: ishape,
            rhs: vec![n.height, n.width],
        });
    }
    let p = n.pair_count();
    let targets = Arc::new(n.targets());
    let idx_i = targets.clone();
    let idx_j = Arc::new(n.sources.clone());

    let gi = enc.image_encoding.gather_pixels(idx_i)?;
    let gj = enc.image_encoding.gather_pixels(idx_j.clone())?;
    let sj = enc.depth_encoding.gather_pixels(idx_j)?;
    let scale = if normalize_offsets {
        1.0 / n.height.max(n.width) as f64
    } else {
        1.0
    };
    let mut offs = vec![0.0; p * 2];
    for (r, o) in n.offsets.iter().enumerate() {
        offs[r * 2] = o[0] * scale;
        offs[r * 2 + 1] = o[1] * scale;
    }
    let offs = ctx.tape.constant(offs, vec![p, 2])?;

    let (gi, gj, sj, offs) = match mode {
        AblationMode::Full => (gi, gj, sj, offs),
        AblationMode::ContentOnly => (gi, gj, sj, offs.mul_scalar(0.0)),
        AblationMode::SpatialOnly => (
            gi.mul_scalar(0.0),
            gj.mul_scalar(0.0),
            sj.mul_scalar(0.0),
            offs,
        ),
    };
    let mut x = ctx.tape.concat(&[&gi, &gj, &sj, &offs], 1)?;
    let mut second = None;
    for (l, (fc, bn)) in mlp.layers.iter().enumerate() {
        x = bn.forward(ctx, &fc.forward(ctx, &x)?)?.gelu();
        if l == 1 {
            second = Some(x.clone());
        }
    }
    let y = x.add(second.as_ref().expect("four layers"))?;
    let heads = mlp.head.forward(ctx, &y)?;
    let alpha = heads.slice(1, 0, 1)?.reshape(vec![p])?;
    let beta = heads.slice(1, 1, 1)?.reshape(vec![p])?;
    let wlogit = heads.slice(1, 2, 1)?.reshape(vec![p])?;
    let omega = wlogit.softmax_groups(n.group_offsets.clone())?;
    Ok(BilateralCoefficients {
        alpha,
        beta,
        omega,
        targets,
        sources: n.sources.clone(),
    })
}

/// Dense propagated depth: `D'_i = sum_j omega_ij (alpha_ij S_j + beta_ij)`.
pub fn propagate(
    map: &SparseDepthMap,
    coeffs: &BilateralCoefficients,
    enc: &PriorEncodings,
) -> Result<Var> {
    let n = &enc.neighbor_index;
    let p = n.pair_count();
    if coeffs.alpha.numel() != p || coeffs.sources != n.sources {
        return Err(BpError::InvalidArgument {
            op: "propagate",
            msg: "coefficients not aligned with neighbor index".into(),
        });
    }
    let tape = coeffs.alpha.tape_handle();
    let sj: Vec<f64> = n.sources.iter().map(|&j| map.depth[j]).collect();
    let sj = tape.constant(sj, vec![p])?;
    let cand = coeffs.alpha.mul(&sj)?.add(&coeffs.beta)?;
    let contrib = coeffs.omega.mul(&cand)?;
    contrib
        .scatter_add(coeffs.targets.clone(), n.height * n.width)?
        .reshape(vec![n.height, n.width])
}

/// Deconv-and-conv combiner that folds the coarser scale's fused feature
/// and estimated depth into the image encoding.
pub struct EncodingCombiner {
    pub deconv: Deconv2dLayer,
    pub conv: Conv2dLayer,
}

impl EncodingCombiner {
    /// `c_prev` is the coarser fused-feature width, `c_img` this scale's
    /// image feature width (also the output width).
    pub fn new(
        ps: &mut ParamSet,
        rng: &mut ChaCha8Rng,
        name: &str,
        c_prev: usize,
        c_img: usize,
    ) -> Self {
        Self {
            deconv: Deconv2dLayer::new(ps, rng, &format!("{name}.deconv"), c_prev + 3, c_img, 2, 2),
            conv: Conv2dLayer::new(ps, rng, &format!("{name}.conv"), 2 * c_img, c_img, 3, 1, 1),
        }
    }
}

/// Assemble the per-scale prior encodings. At the coarsest scale the image
/// feature is adopted directly; otherwise the coarser fused feature and
/// inverse-projected depth are upsampled and merged through the combiner.
#[allow(clippy::too_many_arguments)]
pub fn build_prior_encodings(
    ctx: &Ctx,
    image_feat: &Var,
    prev: Option<(&Var, &Var, &CameraIntrinsics)>,
    combiner: Option<&EncodingCombiner>,
    intr: &CameraIntrinsics,
    map: &SparseDepthMap,
    n_neighbors: usize,
) -> Result<PriorEncodings> {
    let image_encoding = match (prev, combiner) {
        (None, None) => image_feat.clone(),
        (Some((fused_prev, depth_prev, intr_prev)), Some(comb)) => {
            let dfeat = inverse_project(depth_prev, intr_prev)?;
            let stacked = ctx.tape.concat(&[fused_prev, &dfeat], 0)?;
            let up = comb.deconv.forward(ctx, &stacked)?;
            let merged = ctx.tape.concat(&[image_feat, &up], 0)?;
            comb.conv.forward(ctx, &merged)?
        }
        _ => {
            return Err(BpError::InvalidArgument {
                op: "build_prior_encodings",
                msg: "coarser fused feature and depth required at non-coarsest scales".into(),
            })
        }
    };
    let depth_leaf = ctx
        .tape
        .constant(map.depth.clone(), vec![map.height, map.width])?;
    let depth_encoding = inverse_project(&depth_leaf, intr)?;
    let neighbor_index = knn(map, n_neighbors)?;
    Ok(PriorEncodings {
        image_encoding,
        depth_encoding,
        neighbor_index,
    })
}

#[cfg(test)]
mod tests {
    use rand::Rng;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use crate::autodiff::Tape;
    use crate::sparse::sample_sparse;

    use super::*;

    const INTR: CameraIntrinsics = CameraIntrinsics {
        fx: 8.0,
        fy: 8.0,
        cx: 3.5,
        cy: 3.5,
    };

    fn dummy_encodings(tape: &Tape, map: &SparseDepthMap, n: usize) -> PriorEncodings {
        let hw = map.height * map.width;
        PriorEncodings {
            image_encoding: tape
                .constant(vec![0.0; hw], vec![1, map.height, map.width])
                .unwrap(),
            depth_encoding: tape
                .constant(vec![0.0; 3 * hw], vec![3, map.height, map.width])
                .unwrap(),
            neighbor_index: knn(map, n).unwrap(),
        }
    }

    /// Scalar double-loop evaluation of the propagation equation.
    fn propagate_oracle(
        map: &SparseDepthMap,
        n: &NeighborIndex,
        alpha: &[f64],
        beta: &[f64],
        omega: &[f64],
    ) -> Vec<f64> {
        let mut out = vec![0.0; map.height * map.width];
        for i in 0..out.len() {
            for r in n.group_offsets[i]..n.group_offsets[i + 1] {
                let s_j = map.depth[n.sources[r]];
                out[i] += omega[r] * (alpha[r] * s_j + beta[r]);
            }
        }
        out
    }

    #[test]
    fn propagate_matches_scalar_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for inst in 0..50 {
            let h = rng.gen_range(2..=16);
            let w = rng.gen_range(2..=16);
            let n_neighbors = rng.gen_range(1..=4);
            let depth: Vec<f64> = (0..h * w)
                .map(|_| {
                    if rng.gen_bool(0.3) {
                        rng.gen_range(0.5..9.0)
                    } else {
                        0.0
                    }
                })
                .collect();
            if !depth.iter().any(|&d| d > 0.0) {
                continue;
            }
            let map = SparseDepthMap::from_depth(depth, h, w).unwrap();
            let tape = Tape::new();
            let enc = dummy_encodings(&tape, &map, n_neighbors);
            let p = enc.neighbor_index.pair_count();
            let alpha: Vec<f64> = (0..p).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let beta: Vec<f64> = (0..p).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let logits: Vec<f64> = (0..p).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let omega = tape
                .leaf(logits, vec![p], false)
                .unwrap()
                .softmax_groups(enc.neighbor_index.group_offsets.clone())
                .unwrap();
            let coeffs = BilateralCoefficients {
                alpha: tape.leaf(alpha.clone(), vec![p], false).unwrap(),
                beta: tape.leaf(beta.clone(), vec![p], false).unwrap(),
                omega: omega.clone(),
                targets: std::sync::Arc::new(enc.neighbor_index.targets()),
                sources: enc.neighbor_index.sources.clone(),
            };
            let got = propagate(&map, &coeffs, &enc).unwrap().value();
            let want =
                propagate_oracle(&map, &enc.neighbor_index, &alpha, &beta, &omega.value());
            for (a, b) in got.iter().zip(&want) {
                assert!((a - b).abs() < 1e-12, "instance {inst}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn unit_coefficients_give_nearest_interpolation() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let gt: Vec<f64> = (0..64).map(|_| rng.gen_range(1.0..9.0)).collect();
        let map = sample_sparse(&gt, 8, 8, 12, 5).unwrap();
        let tape = Tape::new();
        let enc = dummy_encodings(&tape, &map, 1);
        let p = enc.neighbor_index.pair_count();
        let coeffs = BilateralCoefficients {
            alpha: tape.leaf(vec![1.0; p], vec![p], false).unwrap(),
            beta: tape.leaf(vec![0.0; p], vec![p], false).unwrap(),
            omega: tape.leaf(vec![1.0; p], vec![p], false).unwrap(),
            targets: std::sync::Arc::new(enc.neighbor_index.targets()),
            sources: enc.neighbor_index.sources.clone(),
        };
        let got = propagate(&map, &coeffs, &enc).unwrap().value();
        for i in 0..64 {
            // brute-force nearest valid pixel, ties by row-major index
            let (ty, tx) = ((i / 8) as isize, (i % 8) as isize);
            let nearest = (0..64)
                .filter(|&j| map.valid[j])
                .min_by_key(|&j| {
                    let (sy, sx) = ((j / 8) as isize, (j % 8) as isize);
                    ((sy - ty).pow(2) + (sx - tx).pow(2), j)
                })
                .unwrap();
            assert_eq!(got[i], map.depth[nearest], "pixel {i}");
        }
    }

    fn mlp_fixture(
        seed: u64,
    ) -> (crate::autodiff::params::ParamSet, CoefficientMlp) {
        let mut ps = crate::autodiff::params::ParamSet::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mlp = CoefficientMlp::new(&mut ps, &mut rng, "mlp", 2, 8);
        (ps, mlp)
    }

    fn encodings_with_features(
        ctx: &crate::autodiff::params::Ctx,
        map: &SparseDepthMap,
        image_seed: u64,
    ) -> PriorEncodings {
        let (h, w) = (map.height, map.width);
        let mut rng = ChaCha8Rng::seed_from_u64(image_seed);
        let img: Vec<f64> = (0..2 * h * w).map(|_| rng.gen_range(-1.0..1.0)).collect();
        PriorEncodings {
            image_encoding: ctx.tape.constant(img, vec![2, h, w]).unwrap(),
            depth_encoding: ctx
                .tape
                .constant(
                    crate::geometry::inverse_project_data(&map.depth, h, w, &INTR),
                    vec![3, h, w],
                )
                .unwrap(),
            neighbor_index: knn(map, 3).unwrap(),
        }
    }

    #[test]
    fn omega_groups_sum_to_one() {
        let gt: Vec<f64> = (0..64).map(|i| 1.0 + (i % 5) as f64).collect();
        let map = sample_sparse(&gt, 8, 8, 10, 1).unwrap();
        let (ps, mlp) = mlp_fixture(4);
        let ctx = crate::autodiff::params::Ctx::new(&ps, true);
        let enc = encodings_with_features(&ctx, &map, 11);
        let coeffs =
            generate_coefficients(&ctx, &enc, &mlp, AblationMode::Full, true).unwrap();
        let omega = coeffs.omega.value();
        let go = &enc.neighbor_index.group_offsets;
        for i in 0..64 {
            if go[i] == go[i + 1] {
                continue;
            }
            let s: f64 = omega[go[i]..go[i + 1]].iter().sum();
            assert!((s - 1.0).abs() < 1e-12, "group {i} sums to {s}");
            assert!(omega[go[i]..go[i + 1]].iter().all(|&v| v > 0.0));
        }
    }

    #[test]
    fn ablations_mask_the_right_inputs() {
        let gt: Vec<f64> = (0..64).map(|i| 1.0 + (i % 5) as f64).collect();
        let map = sample_sparse(&gt, 8, 8, 10, 1).unwrap();
        let (ps, mlp) = mlp_fixture(4);
        let run = |mode: AblationMode, image_seed: u64| -> Vec<f64> {
            let ctx = crate::autodiff::params::Ctx::new(&ps, false);
            let enc = encodings_with_features(&ctx, &map, image_seed);
            let coeffs = generate_coefficients(&ctx, &enc, &mlp, mode, true).unwrap();
            propagate(&map, &coeffs, &enc).unwrap().value()
        };
        // spatial-only ignores image content entirely
        assert_eq!(run(AblationMode::SpatialOnly, 11), run(AblationMode::SpatialOnly, 99));
        // the full model does not
        assert_ne!(run(AblationMode::Full, 11), run(AblationMode::Full, 99));
        // content-only differs from full (offsets zeroed) but still sees content
        assert_ne!(run(AblationMode::ContentOnly, 11), run(AblationMode::Full, 11));
        assert_ne!(run(AblationMode::ContentOnly, 11), run(AblationMode::ContentOnly, 99));
    }

    #[test]
    fn propagate_rejects_misaligned_coefficients() {
        let gt: Vec<f64> = (0..16).map(|i| 1.0 + i as f64).collect();
        let map = sample_sparse(&gt, 4, 4, 5, 0).unwrap();
        let tape = Tape::new();
        let enc = dummy_encodings(&tape, &map, 2);
        let coeffs = BilateralCoefficients {
            alpha: tape.leaf(vec![1.0; 3], vec![3], false).unwrap(),
            beta: tape.leaf(vec![0.0; 3], vec![3], false).unwrap(),
            omega: tape.leaf(vec![1.0; 3], vec![3], false).unwrap(),
            targets: std::sync::Arc::new(vec![0, 1, 2]),
            sources: vec![0, 1, 2],
        };
        assert!(propagate(&map, &coeffs, &enc).is_err());
    }
}
