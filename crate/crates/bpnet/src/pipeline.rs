//! The full multi-scale model: image backbone, content-weighted sparse-depth
//! pooling, per-scale bilateral propagation, multi-modal fusion, iterative
//! refinement, the multi-scale training loss, and the training loop.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::optim::{clip_grad_norm, AdamW};
use crate::autodiff::params::{Ctx, ParamSet};
use crate::autodiff::Var;
use crate::bp::{
    build_prior_encodings, generate_coefficients, propagate, AblationMode, CoefficientMlp,
    EncodingCombiner,
};
use crate::fusion::{fuse, FusionUNet};
use crate::geometry::CameraIntrinsics;
use crate::nn::{Basic2d, Conv2dLayer, ResBlock};
use crate::refine::{refine, step_schedule, RefinementGenerators};
use crate::sparse::{sample_sparse, shuffle_weights, weighted_pool, SparseDepthMap};
use crate::synthetic::Scene;
use crate::{BpError, Result};

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    /// Number of pyramid levels; scale 0 is full resolution.
    pub scales: usize,
    /// Valid neighbors per target pixel.
    pub n_neighbors: usize,
    /// Feature width per scale, finest first; length must equal `scales`.
    pub widths: Vec<usize>,
    pub mlp_hidden: usize,
    pub unet_depth: usize,
    /// Refinement kernel sizes.
    pub kernels: Vec<usize>,
    /// Stage toggles: propagation, fusion, refinement.
    pub pre: bool,
    pub mf: bool,
    pub post: bool,
    pub ablation: AblationMode,
    /// Per-scale loss weights; default `4^{-s}`.
    pub lambda: Option<Vec<f64>>,
    pub lr: f64,
    pub weight_decay: f64,
    pub clip_norm: f64,
    pub steps: usize,
    /// Sparse points sampled from the dense ground truth each step.
    pub n_points: usize,
    pub seed: u64,
    /// Divide neighbor offsets by `max(h, w)` before the coefficient MLP.
    pub normalize_offsets: bool,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            scales: 3,
            n_neighbors: 4,
            widths: vec![8, 16, 32],
            mlp_hidden: 32,
            unet_depth: 2,
            kernels: vec![3, 5, 7],
            pre: true,
            mf: true,
            post: true,
            ablation: AblationMode::Full,
            lambda: None,
            lr: 1e-3,
            weight_decay: 0.05,
            clip_norm: 0.1,
            steps: 100,
            n_points: 500,
            seed: 0,
            normalize_offsets: true,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| BpError::InvalidArgument {
            op: "config",
            msg,
        };
        if self.scales == 0 {
            return Err(bad("scales must be >= 1".into()));
        }
        if self.widths.len() != self.scales {
            return Err(bad(format!(
                "widths has {} entries for {} scales",
                self.widths.len(),
                self.scales
            )));
        }
        if self.n_neighbors == 0 {
            return Err(bad("n_neighbors must be >= 1".into()));
        }
        if self.kernels.is_empty() || self.kernels.iter().any(|&k| k < 3 || k % 2 == 0) {
            return Err(bad("kernels must be odd and >= 3".into()));
        }
        if let Some(l) = &self.lambda {
            if l.len() != self.scales {
                return Err(bad("lambda length must equal scales".into()));
            }
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(bad("lr must be positive".into()));
        }
        Ok(())
    }

    /// Image extents must divide this for every scale's U-Net to close.
    pub fn required_multiple(&self) -> usize {
        1 << (self.scales - 1 + self.unet_depth)
    }

    /// Loss weight for scale `s`.
    pub fn lambda_at(&self, s: usize) -> f64 {
        match &self.lambda {
            Some(l) => l[s],
            None => 0.25f64.powi(s as i32),
        }
    }
}

/// How to set the heads that make each stage the identity at init.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum InitMode {
    /// Zero heads: fusion and refinement start as the identity on depth.
    Identity,
    /// Small random values everywhere, for gradient checking; keeps
    /// activations away from non-smooth points.
    Random,
}

pub struct BpNet {
    pub cfg: PipelineConfig,
    pub params: ParamSet,
    stem: Basic2d,
    blocks: Vec<ResBlock>,
    pool_convs: Vec<Conv2dLayer>,
    combiners: Vec<EncodingCombiner>,
    mlps: Option<Vec<CoefficientMlp>>,
    unets: Option<Vec<FusionUNet>>,
    gens: Option<Vec<RefinementGenerators>>,
}

/// Per-scale outputs of one pass; index 0 is the finest scale.
pub struct ForwardOutput {
    pub depths: Vec<Var>,
    pub d_prime: Vec<Var>,
    pub d_fused: Vec<Var>,
    pub pooled: Vec<SparseDepthMap>,
}

impl BpNet {
    pub fn new(cfg: PipelineConfig, init: InitMode) -> Result<Self> {
        cfg.validate()?;
        let mut ps = ParamSet::new();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0xB1A7E5A1);
        let s_max = cfg.scales;
        let stem = Basic2d::new(&mut ps, &mut rng, "backbone.stem", 3, cfg.widths[0]);
        let mut blocks = Vec::with_capacity(s_max);
        blocks.push(ResBlock::new(
            &mut ps,
            &mut rng,
            "backbone.block0",
            cfg.widths[0],
            cfg.widths[0],
            1,
        ));
        for s in 1..s_max {
            blocks.push(ResBlock::new(
                &mut ps,
                &mut rng,
                &format!("backbone.block{s}"),
                cfg.widths[s - 1],
                cfg.widths[s],
                2,
            ));
        }
        let mut pool_convs = Vec::new();
        for s in 1..s_max {
            let win = 1usize << s;
            pool_convs.push(Conv2dLayer::new(
                &mut ps,
                &mut rng,
                &format!("pool.conv{s}"),
                cfg.widths[s],
                win * win,
                3,
                1,
                1,
            ));
        }
        let mut combiners = Vec::new();
        for s in 0..s_max.saturating_sub(1) {
            combiners.push(EncodingCombiner::new(
                &mut ps,
                &mut rng,
                &format!("combine{s}"),
                cfg.widths[s + 1],
                cfg.widths[s],
            ));
        }
        let mlps = cfg.pre.then(|| {
            (0..s_max)
                .map(|s| {
                    CoefficientMlp::new(
                        &mut ps,
                        &mut rng,
                        &format!("coeff{s}"),
                        cfg.widths[s],
                        cfg.mlp_hidden,
                    )
                })
                .collect()
        });
        let unets = cfg.mf.then(|| {
            (0..s_max)
                .map(|s| {
                    FusionUNet::new(
                        &mut ps,
                        &mut rng,
                        &format!("fuse{s}"),
                        cfg.widths[s],
                        cfg.widths[s],
                        cfg.unet_depth,
                    )
                })
                .collect()
        });
        let gens = cfg.post.then(|| {
            (0..s_max)
                .map(|s| {
                    RefinementGenerators::new(
                        &mut ps,
                        &mut rng,
                        &format!("refine{s}"),
                        cfg.widths[s],
                        &cfg.kernels,
                    )
                })
                .collect()
        });
        if init == InitMode::Random {
            let mut jrng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5EED_F00D);
            for p in ps.entries_mut() {
                if !p.trainable {
                    continue;
                }
                if p.name.contains(".gate") {
                    p.data.fill(0.5);
                } else {
                    for v in &mut p.data {
                        *v += jrng.gen_range(-0.05..0.05);
                    }
                }
            }
        }
        Ok(Self {
            cfg,
            params: ps,
            stem,
            blocks,
            pool_convs,
            combiners,
            mlps,
            unets,
            gens,
        })
    }

    /// One coarse-to-fine pass. `image` is `[3, h, w]`; extents must divide
    /// [`PipelineConfig::required_multiple`].
    pub fn forward(
        &self,
        ctx: &Ctx,
        image: &[f64],
        map: &SparseDepthMap,
        intr: &CameraIntrinsics,
    ) -> Result<ForwardOutput> {
        let cfg = &self.cfg;
        let (h, w) = (map.height, map.width);
        if image.len() != 3 * h * w {
            return Err(BpError::ShapeMismatch {
                op: "forward",
                lhs: vec![3, h, w],
                rhs: vec![image.len()],
            });
        }
        let m = cfg.required_multiple();
        if h % m != 0 || w % m != 0 {
            return Err(BpError::Indivisible { h, w, m });
        }

        // Image feature pyramid.
        let x = ctx.tape.constant(image.to_vec(), vec![3, h, w])?;
        let mut feats = Vec::with_capacity(cfg.scales);
        let mut f = self.blocks[0].forward(ctx, &self.stem.forward(ctx, &x)?)?;
        feats.push(f.clone());
        for s in 1..cfg.scales {
            f = self.blocks[s].forward(ctx, &f)?;
            feats.push(f.clone());
        }

        // Sparse pyramid via content-weighted pooling; the weights come from
        // the image features but are used as plain values.
        let mut pooled = Vec::with_capacity(cfg.scales);
        pooled.push(map.clone());
        for s in 1..cfg.scales {
            let logits = self.pool_convs[s - 1].forward(ctx, &feats[s])?;
            let ls = logits.shape();
            let full = shuffle_weights(&logits.value(), ls[0], ls[1], ls[2], s)?;
            pooled.push(weighted_pool(map, &full, s)?);
        }

        let mut depths: Vec<Option<Var>> = vec![None; cfg.scales];
        let mut d_primes: Vec<Option<Var>> = vec![None; cfg.scales];
        let mut d_fuseds: Vec<Option<Var>> = vec![None; cfg.scales];
        let mut prev_fused: Option<Var> = None;
        for s in (0..cfg.scales).rev() {
            let intr_s = intr.at_scale(s);
            let prev = if s + 1 < cfg.scales {
                Some((
                    prev_fused.as_ref().expect("coarser pass ran"),
                    depths[s + 1].as_ref().expect("coarser pass ran"),
                    intr.at_scale(s + 1),
                ))
            } else {
                None
            };
            let enc = build_prior_encodings(
                ctx,
                &feats[s],
                prev.as_ref().map(|(f, d, i)| (*f, *d, i)),
                (s + 1 < cfg.scales).then(|| &self.combiners[s]),
                &intr_s,
                &pooled[s],
                cfg.n_neighbors,
            )?;

            let d_prime = if let Some(mlps) = &self.mlps {
                let coeffs =
                    generate_coefficients(ctx, &enc, &mlps[s], cfg.ablation, cfg.normalize_offsets)?;
                propagate(&pooled[s], &coeffs, &enc)?
            } else {
                ctx.tape.constant(
                    pooled[s].depth.clone(),
                    vec![pooled[s].height, pooled[s].width],
                )?
            };

            let (fused, d_fused) = if let Some(unets) = &self.unets {
                fuse(ctx, &enc.image_encoding, &d_prime, &intr_s, &unets[s])?
            } else {
                (enc.image_encoding.clone(), d_prime.clone())
            };

            let d_out = if let Some(gens) = &self.gens {
                refine(
                    ctx,
                    &fused,
                    &d_fused,
                    &pooled[s],
                    &gens[s],
                    step_schedule(s, cfg.scales),
                )?
            } else {
                d_fused.clone()
            };

            d_primes[s] = Some(d_prime);
            d_fuseds[s] = Some(d_fused);
            depths[s] = Some(d_out);
            prev_fused = Some(fused);
        }
        Ok(ForwardOutput {
            depths: depths.into_iter().map(|d| d.unwrap()).collect(),
            d_prime: d_primes.into_iter().map(|d| d.unwrap()).collect(),
            d_fused: d_fuseds.into_iter().map(|d| d.unwrap()).collect(),
            pooled,
        })
    }

    /// Weighted squared error against the dense ground truth, each scale's
    /// prediction bilinearly upsampled to full resolution and evaluated on
    /// the valid (positive) pixels.
    pub fn multiscale_loss(
        &self,
        ctx: &Ctx,
        out: &ForwardOutput,
        gt: &[f64],
    ) -> Result<Var> {
        let shape = out.depths[0].shape();
        let (h, w) = (shape[0], shape[1]);
        if gt.len() != h * w {
            return Err(BpError::ShapeMismatch {
                op: "multiscale_loss",
                lhs: vec![h, w],
                rhs: vec![gt.len()],
            });
        }
        let mask: Vec<f64> = gt.iter().map(|&g| if g > 0.0 { 1.0 } else { 0.0 }).collect();
        let gt_v = ctx.tape.constant(gt.to_vec(), vec![h, w])?;
        let mask_v = ctx.tape.constant(mask, vec![h, w])?;
        let mut total: Option<Var> = None;
        for (s, d) in out.depths.iter().enumerate() {
            let up = if s == 0 {
                d.clone()
            } else {
                d.bilinear_upsample(1 << s)?
            };
            let term = up
                .sub(&gt_v)?
                .mul(&mask_v)?
                .square()
                .sum()
                .mul_scalar(self.cfg.lambda_at(s));
            total = Some(match total {
                Some(t) => t.add(&term)?,
                None => term,
            });
        }
        Ok(total.expect("at least one scale"))
    }

    /// Run inference (eval mode, running BN statistics) and return the
    /// finest-scale depth.
    pub fn infer(
        &self,
        image: &[f64],
        map: &SparseDepthMap,
        intr: &CameraIntrinsics,
    ) -> Result<Vec<f64>> {
        let ctx = Ctx::new(&self.params, false);
        let out = self.forward(&ctx, image, map, intr)?;
        Ok(out.depths[0].value())
    }

    /// Train against one scene, resampling the sparse input each step.
    /// Returns the per-step loss history; aborts with the offending step on
    /// any non-finite loss or gradient.
    pub fn train(&mut self, scene: &Scene) -> Result<Vec<(usize, f64)>> {
        let cfg = self.cfg.clone();
        let mut opt = AdamW::new(&self.params, cfg.lr, cfg.weight_decay);
        let mut history = Vec::with_capacity(cfg.steps);
        for step in 0..cfg.steps {
            let map = sample_sparse(
                &scene.depth,
                scene.height,
                scene.width,
                cfg.n_points,
                step_seed(cfg.seed, step),
            )?;
            let (loss_val, mut grads, stats) = {
                let ctx = Ctx::new(&self.params, true);
                let out = self.forward(&ctx, &scene.image, &map, &scene.intrinsics)?;
                let loss = self.multiscale_loss(&ctx, &out, &scene.depth)?;
                ctx.tape.backward(&loss)?;
                (loss.value()[0], ctx.collect_grads(), ctx.take_stat_updates())
            };
            if !loss_val.is_finite() {
                return Err(BpError::NonFinite {
                    what: "loss".into(),
                    step,
                });
            }
            clip_grad_norm(&mut grads, cfg.clip_norm);
            self.params.apply_updates(stats);
            opt.step(&mut self.params, &grads).map_err(|e| match e {
                BpError::NonFinite { what, .. } => BpError::NonFinite { what, step },
                other => other,
            })?;
            history.push((step, loss_val));
        }
        Ok(history)
    }
}

#[derive(Clone, Debug)]
pub struct GradcheckFailure {
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Clone, Debug)]
pub struct GradcheckOutcome {
    pub checked: usize,
    pub failures: Vec<GradcheckFailure>,
}

/// Compare analytic gradients of the full multi-scale loss against central
/// finite differences on a randomly initialized model. Requires a
/// single-scale configuration: with more scales the pooling weights feed a
/// value-only path that finite differences would see but the tape does not.
pub fn gradcheck(
    cfg: &PipelineConfig,
    height: usize,
    width: usize,
    checks_per_param: usize,
    fd_step: f64,
    rtol: f64,
) -> Result<GradcheckOutcome> {
    if cfg.scales != 1 {
        return Err(BpError::InvalidArgument {
            op: "gradcheck",
            msg: "use a single-scale configuration".into(),
        });
    }
    let mut model = BpNet::new(cfg.clone(), InitMode::Random)?;
    let scene = crate::synthetic::generate_scene(height, width, cfg.seed);
    let map = sample_sparse(
        &scene.depth,
        height,
        width,
        cfg.n_points.min(height * width / 4),
        cfg.seed,
    )?;
    let loss_of = |m: &BpNet| -> Result<f64> {
        let ctx = Ctx::new(&m.params, true);
        let out = m.forward(&ctx, &scene.image, &map, &scene.intrinsics)?;
        Ok(m.multiscale_loss(&ctx, &out, &scene.depth)?.value()[0])
    };
    let grads = {
        let ctx = Ctx::new(&model.params, true);
        let out = model.forward(&ctx, &scene.image, &map, &scene.intrinsics)?;
        let loss = model.multiscale_loss(&ctx, &out, &scene.depth)?;
        ctx.tape.backward(&loss)?;
        ctx.collect_grads()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x6_2AD);
    let targets: Vec<(usize, usize)> = (0..model.params.len())
        .filter(|&id| model.params.get(id).trainable)
        .flat_map(|id| {
            let n = model.params.get(id).data.len();
            let mut picks: Vec<usize> = (0..checks_per_param.min(n))
                .map(|_| rng.gen_range(0..n))
                .collect();
            picks.sort_unstable();
            picks.dedup();
            picks.into_iter().map(move |i| (id, i)).collect::<Vec<_>>()
        })
        .collect();
    let mut failures = Vec::new();
    for &(id, i) in &targets {
        let orig = model.params.get(id).data[i];
        model.params.get_mut(id).data[i] = orig + fd_step;
        let up = loss_of(&model)?;
        model.params.get_mut(id).data[i] = orig - fd_step;
        let down = loss_of(&model)?;
        model.params.get_mut(id).data[i] = orig;
        let numeric = (up - down) / (2.0 * fd_step);
        let analytic = grads[id].get(i).copied().unwrap_or(0.0);
        let denom = 1.0f64.max(analytic.abs()).max(numeric.abs());
        if (analytic - numeric).abs() / denom > rtol {
            failures.push(GradcheckFailure {
                param: model.params.get(id).name.clone(),
                index: i,
                analytic,
                numeric,
            });
        }
    }
    Ok(GradcheckOutcome {
        checked: targets.len(),
        failures,
    })
}

fn step_seed(seed: u64, step: usize) -> u64 {
    seed ^ (step as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

/// Zero-pad `[channels, h, w]` data on the bottom and right so both extents
/// divide `m`; returns the padded buffer and extents.
pub fn pad_to_multiple(
    data: &[f64],
    channels: usize,
    h: usize,
    w: usize,
    m: usize,
) -> (Vec<f64>, usize, usize) {
    let ph = h.div_ceil(m) * m;
    let pw = w.div_ceil(m) * m;
    if ph == h && pw == w {
        return (data.to_vec(), h, w);
    }
    let mut out = vec![0.0; channels * ph * pw];
    for c in 0..channels {
        for y in 0..h {
            let src = c * h * w + y * w;
            let dst = c * ph * pw + y * pw;
            out[dst..dst + w].copy_from_slice(&data[src..src + w]);
        }
    }
    (out, ph, pw)
}

/// Undo [`pad_to_multiple`] for a single-channel `[ph, pw]` grid.
pub fn crop(data: &[f64], ph: usize, pw: usize, h: usize, w: usize) -> Vec<f64> {
    assert_eq!(data.len(), ph * pw);
    let mut out = Vec::with_capacity(h * w);
    for y in 0..h {
        out.extend_from_slice(&data[y * pw..y * pw + w]);
    }
    out
}

#[cfg(test)]
mod tests {
    use crate::synthetic::generate_scene;

    use super::*;

    fn small_cfg() -> PipelineConfig {
        PipelineConfig {
            scales: 2,
            widths: vec![4, 8],
            mlp_hidden: 8,
            unet_depth: 1,
            kernels: vec![3],
            steps: 2,
            n_points: 20,
            ..PipelineConfig::default()
        }
    }

    #[test]
    fn defaults_match_documented_constants() {
        let cfg = PipelineConfig::default();
        assert_eq!(cfg.scales, 3);
        assert_eq!(cfg.n_neighbors, 4);
        assert_eq!(cfg.kernels, vec![3, 5, 7]);
        assert_eq!(cfg.clip_norm, 0.1);
        assert_eq!(cfg.weight_decay, 0.05);
        assert_eq!(cfg.n_points, 500);
        assert_eq!(cfg.lambda_at(0), 1.0);
        assert_eq!(cfg.lambda_at(2), 1.0 / 16.0);
        cfg.validate().unwrap();
    }

    #[test]
    fn validation_rejects_bad_configs() {
        for break_it in [
            |c: &mut PipelineConfig| c.scales = 0,
            |c: &mut PipelineConfig| c.widths = vec![4],
            |c: &mut PipelineConfig| c.kernels = vec![4],
            |c: &mut PipelineConfig| c.kernels.clear(),
            |c: &mut PipelineConfig| c.n_neighbors = 0,
            |c: &mut PipelineConfig| c.lambda = Some(vec![1.0]),
            |c: &mut PipelineConfig| c.lr = -1.0,
        ] {
            let mut cfg = PipelineConfig::default();
            break_it(&mut cfg);
            assert!(cfg.validate().is_err());
        }
    }

    #[test]
    fn identity_init_pipeline_returns_propagated_depth_exactly() {
        let cfg = small_cfg();
        let model = BpNet::new(cfg.clone(), InitMode::Identity).unwrap();
        let scene = generate_scene(16, 16, 3);
        let map = sample_sparse(&scene.depth, 16, 16, cfg.n_points, 1).unwrap();
        let ctx = Ctx::new(&model.params, false);
        let out = model
            .forward(&ctx, &scene.image, &map, &scene.intrinsics)
            .unwrap();
        for s in 0..cfg.scales {
            assert_eq!(
                out.depths[s].value(),
                out.d_prime[s].value(),
                "scale {s} not an exact identity"
            );
            assert_eq!(out.d_fused[s].value(), out.d_prime[s].value());
        }
    }

    #[test]
    fn stage_toggles_compose_documented_fallbacks() {
        let scene = generate_scene(16, 16, 3);
        let map = sample_sparse(&scene.depth, 16, 16, 20, 1).unwrap();
        let run = |pre: bool, mf: bool, post: bool| {
            let cfg = PipelineConfig {
                pre,
                mf,
                post,
                ..small_cfg()
            };
            let model = BpNet::new(cfg, InitMode::Identity).unwrap();
            let ctx = Ctx::new(&model.params, false);
            let out = model
                .forward(&ctx, &scene.image, &map, &scene.intrinsics)
                .unwrap();
            (
                out.depths.iter().map(|d| d.value()).collect::<Vec<_>>(),
                out.d_prime.iter().map(|d| d.value()).collect::<Vec<_>>(),
                out.pooled,
            )
        };
        // pre off: the dense prior is the zero-filled sparse grid
        let (_, d_prime, pooled) = run(false, true, true);
        for s in 0..2 {
            assert_eq!(d_prime[s], pooled[s].depth);
        }
        // mf and post off run and keep the identity to the prior
        let (depths, d_prime, _) = run(true, false, false);
        assert_eq!(depths, d_prime);
    }

    #[test]
    fn forward_rejects_indivisible_extents() {
        let cfg = small_cfg(); // multiple 4
        let model = BpNet::new(cfg, InitMode::Identity).unwrap();
        let scene = generate_scene(18, 16, 3);
        let map = sample_sparse(&scene.depth, 18, 16, 20, 1).unwrap();
        let ctx = Ctx::new(&model.params, false);
        assert!(matches!(
            model.forward(&ctx, &scene.image, &map, &scene.intrinsics),
            Err(BpError::Indivisible { .. })
        ));
    }

    #[test]
    fn training_is_deterministic_per_seed() {
        let scene = generate_scene(16, 16, 7);
        let run = |seed: u64| {
            let mut model = BpNet::new(
                PipelineConfig {
                    seed,
                    ..small_cfg()
                },
                InitMode::Identity,
            )
            .unwrap();
            model.train(&scene).unwrap()
        };
        let a = run(0);
        let b = run(0);
        assert_eq!(a.len(), 2);
        for ((s1, l1), (s2, l2)) in a.iter().zip(&b) {
            assert_eq!(s1, s2);
            assert_eq!(l1.to_bits(), l2.to_bits(), "losses diverge at step {s1}");
        }
        let c = run(1);
        assert_ne!(a[0].1.to_bits(), c[0].1.to_bits());
    }

    #[test]
    fn checkpoint_round_trip_preserves_inference() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.bin");
        let scene = generate_scene(16, 16, 5);
        let mut model = BpNet::new(small_cfg(), InitMode::Identity).unwrap();
        model.train(&scene).unwrap();
        model.params.save(&path).unwrap();
        let map = sample_sparse(&scene.depth, 16, 16, 20, 9).unwrap();
        let a = model.infer(&scene.image, &map, &scene.intrinsics).unwrap();
        let mut fresh = BpNet::new(small_cfg(), InitMode::Identity).unwrap();
        fresh.params.load(&path).unwrap();
        let b = fresh.infer(&scene.image, &map, &scene.intrinsics).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn pad_and_crop_round_trip() {
        let data: Vec<f64> = (0..2 * 3 * 5).map(f64::from).collect();
        let (padded, ph, pw) = pad_to_multiple(&data, 2, 3, 5, 4);
        assert_eq!((ph, pw), (4, 8));
        assert_eq!(padded.len(), 2 * 4 * 8);
        // original values in place, zero fill elsewhere
        assert_eq!(padded[0], data[0]);
        assert_eq!(padded[4 * 8 + 1 * 8 + 4], data[3 * 5 + 1 * 5 + 4]);
        assert_eq!(padded[3 * 8], 0.0);
        assert_eq!(padded[5], 0.0);
        let chan0 = crop(&padded[..4 * 8], 4, 8, 3, 5);
        assert_eq!(chan0, data[..15]);
        // already divisible: untouched
        let (same, h, w) = pad_to_multiple(&data, 2, 3, 5, 1);
        assert_eq!((h, w), (3, 5));
        assert_eq!(same, data);
    }

    #[test]
    fn random_init_differs_but_keeps_gates_in_range() {
        let a = BpNet::new(small_cfg(), InitMode::Identity).unwrap();
        let b = BpNet::new(small_cfg(), InitMode::Random).unwrap();
        assert_eq!(a.params.len(), b.params.len());
        let mut saw_gate = false;
        for (pa, pb) in a.params.entries().zip(b.params.entries()) {
            assert_eq!(pa.name, pb.name);
            if pa.name.contains(".gate") {
                saw_gate = true;
                assert_eq!(pb.data, vec![0.5]);
            }
        }
        assert!(saw_gate);
    }
}
