//! Layer building blocks over the tape: convolutions, linear layers,
//! batch normalization with running statistics, and residual blocks.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::params::{Ctx, ParamId, ParamSet};
use crate::autodiff::{BnLayout, BnStats, Var};
use crate::Result;

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// Kaiming-style uniform fan-in init.
pub fn kaiming(rng: &mut ChaCha8Rng, fan_in: usize, n: usize) -> Vec<f64> {
    let bound = (6.0 / fan_in as f64).sqrt();
    (0..n).map(|_| rng.gen_range(-bound..bound)).collect()
}

#[derive(Clone)]
pub struct Conv2dLayer {
    pub w: ParamId,
    pub b: ParamId,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2dLayer {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        ps: &mut ParamSet,
        rng: &mut ChaCha8Rng,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        pad: usize,
    ) -> Self {
        let fan_in = cin * k * k;
        let w = ps.register(
            format!("{name}.w"),
            kaiming(rng, fan_in, cout * cin * k * k),
            vec![cout, cin, k, k],
            true,
        );
        let b = ps.register(format!("{name}.b"), vec![0.0; cout], vec![cout], true);
        Self { w, b, stride, pad }
    }

    /// Zero-initialized head so identity fallbacks hold at init.
    pub fn zeros(
        ps: &mut ParamSet,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        pad: usize,
    ) -> Self {
        let w = ps.register(
            format!("{name}.w"),
            vec![0.0; cout * cin * k * k],
            vec![cout, cin, k, k],
            true,
        );
        let b = ps.register(format!("{name}.b"), vec![0.0; cout], vec![cout], true);
        Self {
            w,
            b,
            stride: 1,
            pad,
        }
    }

    pub fn forward(&self, ctx: &Ctx, x: &Var) -> Result<Var> {
        x.conv2d(&ctx.var(self.w), &ctx.var(self.b), self.stride, self.pad)
    }
}

#[derive(Clone)]
pub struct Deconv2dLayer {
    pub w: ParamId,
    pub b: ParamId,
    pub stride: usize,
}

impl Deconv2dLayer {
    pub fn new(
        ps: &mut ParamSet,
        rng: &mut ChaCha8Rng,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
    ) -> Self {
        let w = ps.register(
            format!("{name}.w"),
            kaiming(rng, cin * k * k, cin * cout * k * k),
            vec![cin, cout, k, k],
            true,
        );
        let b = ps.register(format!("{name}.b"), vec![0.0; cout], vec![cout], true);
        Self { w, b, stride }
    }

    pub fn forward(&self, ctx: &Ctx, x: &Var) -> Result<Var> {
        x.deconv2d(&ctx.var(self.w), &ctx.var(self.b), self.stride)
    }
}

#[derive(Clone)]
pub struct LinearLayer {
    pub w: ParamId,
    pub b: ParamId,
}

impl LinearLayer {
    pub fn new(
        ps: &mut ParamSet,
        rng: &mut ChaCha8Rng,
        name: &str,
        din: usize,
        dout: usize,
    ) -> Self {
        let w = ps.register(
            format!("{name}.w"),
            kaiming(rng, din, din * dout),
            vec![din, dout],
            true,
        );
        let b = ps.register(format!("{name}.b"), vec![0.0; dout], vec![dout], true);
        Self { w, b }
    }

    pub fn forward(&self, ctx: &Ctx, x: &Var) -> Result<Var> {
        x.linear(&ctx.var(self.w), &ctx.var(self.b))
    }
}

/// Batch normalization with running statistics. Train mode normalizes by
/// per-batch statistics and queues a running update; eval mode uses the
/// stored running statistics.
#[derive(Clone)]
pub struct BatchNormLayer {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub layout: BnLayout,
}

impl BatchNormLayer {
    pub fn new(ps: &mut ParamSet, name: &str, channels: usize, layout: BnLayout) -> Self {
        let gamma = ps.register(format!("{name}.gamma"), vec![1.0; channels], vec![channels], true);
        let beta = ps.register(format!("{name}.beta"), vec![0.0; channels], vec![channels], true);
        let running_mean =
            ps.register(format!("{name}.rmean"), vec![0.0; channels], vec![channels], false);
        let running_var =
            ps.register(format!("{name}.rvar"), vec![1.0; channels], vec![channels], false);
        Self {
            gamma,
            beta,
            running_mean,
            running_var,
            layout,
        }
    }

    pub fn forward(&self, ctx: &Ctx, x: &Var) -> Result<Var> {
        let stats = if ctx.train {
            BnStats::Batch
        } else {
            BnStats::Running {
                mean: ctx.params.get(self.running_mean).data.clone(),
                var: ctx.params.get(self.running_var).data.clone(),
            }
        };
        let (out, batch) =
            x.batch_norm(&ctx.var(self.gamma), &ctx.var(self.beta), self.layout, stats, BN_EPS)?;
        if let Some((mean, var)) = batch {
            let rm = &ctx.params.get(self.running_mean).data;
            let rv = &ctx.params.get(self.running_var).data;
            let new_m: Vec<f64> = rm
                .iter()
                .zip(&mean)
                .map(|(r, b)| (1.0 - BN_MOMENTUM) * r + BN_MOMENTUM * b)
                .collect();
            let new_v: Vec<f64> = rv
                .iter()
                .zip(&var)
                .map(|(r, b)| (1.0 - BN_MOMENTUM) * r + BN_MOMENTUM * b)
                .collect();
            ctx.push_stat_update(self.running_mean, new_m);
            ctx.push_stat_update(self.running_var, new_v);
        }
        Ok(out)
    }
}

/// Conv + BN + GeLU.
#[derive(Clone)]
pub struct Basic2d {
    pub conv: Conv2dLayer,
    pub bn: BatchNormLayer,
}

impl Basic2d {
    pub fn new(
        ps: &mut ParamSet,
        rng: &mut ChaCha8Rng,
        name: &str,
        cin: usize,
        cout: usize,
    ) -> Self {
        Self {
            conv: Conv2dLayer::new(ps, rng, &format!("{name}.conv"), cin, cout, 3, 1, 1),
            bn: BatchNormLayer::new(ps, &format!("{name}.bn"), cout, BnLayout::Channels),
        }
    }

    pub fn forward(&self, ctx: &Ctx, x: &Var) -> Result<Var> {
        Ok(self.bn.forward(ctx, &self.conv.forward(ctx, x)?)?.gelu())
    }
}

/// Two 3x3 convs with BN, GeLU between, skip connection, GeLU after add.
/// A 1x1 projection matches the skip when stride or width changes.
#[derive(Clone)]
pub struct ResBlock {
    conv1: Conv2dLayer,
    bn1: BatchNormLayer,
    conv2: Conv2dLayer,
    bn2: BatchNormLayer,
    proj: Option<(Conv2dLayer, BatchNormLayer)>,
}

impl ResBlock {
    pub fn new(
        ps: &mut ParamSet,
        rng: &mut ChaCha8Rng,
        name: &str,
        cin: usize,
        cout: usize,
        stride: usize,
    ) -> Self {
        let conv1 = Conv2dLayer::new(ps, rng, &format!("{name}.conv1"), cin, cout, 3, stride, 1);
        let bn1 = BatchNormLayer::new(ps, &format!("{name}.bn1"), cout, BnLayout::Channels);
        let conv2 = Conv2dLayer::new(ps, rng, &format!("{name}.conv2"), cout, cout, 3, 1, 1);
        let bn2 = BatchNormLayer::new(ps, &format!("{name}.bn2"), cout, BnLayout::Channels);
        let proj = if cin != cout || stride != 1 {
            Some((
                Conv2dLayer::new(ps, rng, &format!("{name}.proj"), cin, cout, 1, stride, 0),
                BatchNormLayer::new(ps, &format!("{name}.projbn"), cout, BnLayout::Channels),
            ))
        } else {
            None
        };
        Self {
            conv1,
            bn1,
            conv2,
            bn2,
            proj,
        }
    }

    pub fn forward(&self, ctx: &Ctx, x: &Var) -> Result<Var> {
        let h = self.bn1.forward(ctx, &self.conv1.forward(ctx, x)?)?.gelu();
        let h = self.bn2.forward(ctx, &self.conv2.forward(ctx, &h)?)?;
        let skip = match &self.proj {
            Some((conv, bn)) => bn.forward(ctx, &conv.forward(ctx, x)?)?,
            None => x.clone(),
        };
        Ok(h.add(&skip)?.gelu())
    }
}
