//! Early-fusion multi-modal stage: image encoding concatenated with the
//! inverse-projected propagated depth, run through a small U-Net, emitting
//! fused features and a residual added back onto the depth.

use rand_chacha::ChaCha8Rng;

use crate::autodiff::params::{Ctx, ParamSet};
use crate::autodiff::Var;
use crate::geometry::{inverse_project, CameraIntrinsics};
use crate::nn::{Basic2d, Conv2dLayer, Deconv2dLayer, ResBlock};
use crate::{BpError, Result};

pub struct FusionUNet {
    stem: Basic2d,
    enc_blocks: Vec<[ResBlock; 2]>,
    downs: Vec<Conv2dLayer>,
    bottom: [ResBlock; 2],
    ups: Vec<Deconv2dLayer>,
    merges: Vec<Basic2d>,
    residual_head: Conv2dLayer,
    pub depth: usize,
    pub width: usize,
}

impl FusionUNet {
    /// `cin` is the image-encoding width (the depth feature's 3 channels are
    /// added internally); `width` is the fused-feature width; `depth` the
    /// number of stride-2 levels. The residual head starts at zero so the
    /// stage is the identity on depth at init.
    pub fn new(
        ps: &mut ParamSet,
        rng: &mut ChaCha8Rng,
        name: &str,
        cin: usize,
        width: usize,
        depth: usize,
    ) -> Self {
        let level_w = |l: usize| width << l;
        let stem = Basic2d::new(ps, rng, &format!("{name}.stem"), cin + 3, width);
        let mut enc_blocks = Vec::new();
        let mut downs = Vec::new();
        for l in 0..depth {
            let w = level_w(l);
            enc_blocks.push([
                ResBlock::new(ps, rng, &format!("{name}.enc{l}a"), w, w, 1),
                ResBlock::new(ps, rng, &format!("{name}.enc{l}b"), w, w, 1),
            ]);
            downs.push(Conv2dLayer::new(
                ps,
                rng,
                &format!("{name}.down{l}"),
                w,
                level_w(l + 1),
                3,
                2,
                1,
            ));
        }
        let wb = level_w(depth);
        let bottom = [
            ResBlock::new(ps, rng, &format!("{name}.bottoma"), wb, wb, 1),
            ResBlock::new(ps, rng, &format!("{name}.bottomb"), wb, wb, 1),
        ];
        let mut ups = Vec::new();
        let mut merges = Vec::new();
        for l in (0..depth).rev() {
            let w = level_w(l);
            ups.push(Deconv2dLayer::new(
                ps,
                rng,
                &format!("{name}.up{l}"),
                level_w(l + 1),
                w,
                2,
                2,
            ));
            merges.push(Basic2d::new(ps, rng, &format!("{name}.merge{l}"), 2 * w, w));
        }
        let residual_head = Conv2dLayer::zeros(ps, &format!("{name}.res"), width, 1, 3, 1);
        Self {
            stem,
            enc_blocks,
            downs,
            bottom,
            ups,
            merges,
            residual_head,
            depth,
            width,
        }
    }
}

/// Fuse an image encoding with a dense depth map. Returns the fused feature
/// and `D'' = D' + residual`.
pub fn fuse(
    ctx: &Ctx,
    image_enc: &Var,
    d_prime: &Var,
    intr: &CameraIntrinsics,
    net: &FusionUNet,
) -> Result<(Var, Var)> {
    let ds = d_prime.shape();
    let is = image_enc.shape();
    if ds.len() != 2 || is.len() != 3 || is[1] != ds[0] || is[2] != ds[1] {
        return Err(BpError::ShapeMismatch {
            op: "fuse",
            lhs: is,
            rhs: ds,
        });
    }
    let m = 1usize << net.depth;
    if ds[0] % m != 0 || ds[1] % m != 0 {
        return Err(BpError::Indivisible {
            h: ds[0],
            w: ds[1],
            m,
        });
    }
    // Batch-norm statistics over fewer than ~16 positions make eval mode
    // (running statistics) diverge from train mode, so stop descending once
    // the next level would shrink below 4x4. The clamped form reuses the
    // deepest reachable encoder pair as the bottom; layers below it simply
    // don't participate for inputs this small.
    let mut eff = net.depth;
    while eff > 0 && ((ds[0] >> eff) < 4 || (ds[1] >> eff) < 4) {
        eff -= 1;
    }
    let dfeat = inverse_project(d_prime, intr)?;
    let x = ctx.tape.concat(&[image_enc, &dfeat], 0)?;
    let mut h = net.stem.forward(ctx, &x)?;
    let mut skips = Vec::with_capacity(eff);
    for l in 0..eff {
        for block in &net.enc_blocks[l] {
            h = block.forward(ctx, &h)?;
        }
        skips.push(h.clone());
        h = net.downs[l].forward(ctx, &h)?;
    }
    if eff == net.depth {
        for block in &net.bottom {
            h = block.forward(ctx, &h)?;
        }
    } else {
        for block in &net.enc_blocks[eff] {
            h = block.forward(ctx, &h)?;
        }
    }
    for l in (0..eff).rev() {
        let i = net.depth - 1 - l;
        h = net.ups[i].forward(ctx, &h)?;
        let merged = ctx.tape.concat(&[&skips[l], &h], 0)?;
        h = net.merges[i].forward(ctx, &merged)?;
    }
    let residual = net
        .residual_head
        .forward(ctx, &h)?
        .reshape(vec![ds[0], ds[1]])?;
    let d_out = d_prime.add(&residual)?;
    Ok((h, d_out))
}
