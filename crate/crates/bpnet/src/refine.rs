//! Iterative depth refinement: convolutional spatial propagation with
//! l1-normalized affinities, per-step sparse-depth embedding, and a
//! confidence-weighted combination across kernel sizes and iteration steps.

use rand_chacha::ChaCha8Rng;

use crate::autodiff::params::{Ctx, ParamId, ParamSet};
use crate::autodiff::Var;
use crate::nn::Conv2dLayer;
use crate::sparse::SparseDepthMap;
use crate::{BpError, Result};

pub const DEFAULT_KERNELS: [usize; 3] = [3, 5, 7];

/// `T` for scale `s` of `total` scales: `2 * (total - s)`, so six scales
/// run 12 steps at the finest resolution down to 2 at the coarsest.
pub fn step_schedule(scale: usize, total_scales: usize) -> usize {
    assert!(scale < total_scales);
    2 * (total_scales - scale)
}

/// Snapshot steps `{0, floor(T/2), T}`.
pub fn snapshot_steps(t: usize) -> [usize; 3] {
    [0, t / 2, t]
}

/// l1-normalize raw affinities and append the center weight; pixels whose
/// raw weights vanish fall back to identity propagation.
pub fn normalize_affinity(raw: &Var) -> Result<Var> {
    raw.normalize_affinity()
}

/// One synchronous propagation sweep with a `k x k` window.
pub fn cspn_step(state: &Var, kappa: &Var, k: usize) -> Result<Var> {
    state.cspn_step(kappa, k)
}

/// Blend valid pixels toward the measured depth:
/// `D <- (1 - g I(S)) D + g I(S) S` with per-pixel confidence `g`.
pub fn embed_sparse(state: &Var, map: &SparseDepthMap, gamma: &Var) -> Result<Var> {
    let ss = state.shape();
    if ss != vec![map.height, map.width] || gamma.shape() != ss {
        return Err(BpError::ShapeMismatch {
            op: "embed_sparse",
            lhs: ss,
            rhs: vec![map.height, map.width],
        });
    }
    let tape = state.tape_handle();
    let mask: Vec<f64> = map.valid.iter().map(|&v| if v { 1.0 } else { 0.0 }).collect();
    let mask = tape.constant(mask, ss.clone())?;
    let s_const = tape.constant(map.depth.clone(), ss)?;
    let g = gamma.mul(&mask)?;
    let delta = g.mul(&s_const.sub(state)?)?;
    state.add(&delta)
}

/// Confidence-weighted combination over snapshots: `snapshots[k][t]` per
/// kernel and snapshot step, `tau` `[steps, h, w]`, `sigma` `[kernels, h, w]`,
/// both softmax-normalized per pixel. Evaluated as
/// `base + sum tau*sigma*(snapshot - base)`, which is the same convex
/// combination (the weights sum to one) but collapses exactly to `base`
/// when every snapshot equals it, keeping the zero-init pipeline an exact
/// identity.
pub fn combine(base: &Var, snapshots: &[Vec<Var>], tau: &Var, sigma: &Var) -> Result<Var> {
    let nk = snapshots.len();
    let nt = snapshots.first().map(|s| s.len()).unwrap_or(0);
    if nk == 0 || nt == 0 || snapshots.iter().any(|s| s.len() != nt) {
        return Err(BpError::InvalidArgument {
            op: "combine",
            msg: "missing snapshots".into(),
        });
    }
    let ts = tau.shape();
    let ss = sigma.shape();
    if ts.len() != 3 || ts[0] != nt || ss.len() != 3 || ss[0] != nk {
        return Err(BpError::ShapeMismatch {
            op: "combine",
            lhs: ts,
            rhs: ss,
        });
    }
    let (h, w) = (ts[1], ts[2]);
    let mut acc = base.clone();
    for (ki, per_kernel) in snapshots.iter().enumerate() {
        let sig = sigma.slice(0, ki, 1)?.reshape(vec![h, w])?;
        for (ti, snap) in per_kernel.iter().enumerate() {
            let ta = tau.slice(0, ti, 1)?.reshape(vec![h, w])?;
            let term = ta.mul(&sig)?.mul(&snap.sub(base)?)?;
            acc = acc.add(&term)?;
        }
    }
    Ok(acc)
}

/// Learned generators for one scale: raw affinities and embedding
/// confidence per kernel, plus step and kernel confidences. Everything is
/// zero-initialized, which composes to the identity: zero affinities fall
/// back to identity propagation, the zero embed gate disables embedding,
/// and uniform step/kernel confidences average identical snapshots.
pub struct RefinementGenerators {
    kappa_convs: Vec<Conv2dLayer>,
    gamma_convs: Vec<Conv2dLayer>,
    embed_gates: Vec<ParamId>,
    tau_conv: Conv2dLayer,
    sigma_conv: Conv2dLayer,
    pub kernels: Vec<usize>,
}

impl RefinementGenerators {
    pub fn new(
        ps: &mut ParamSet,
        _rng: &mut ChaCha8Rng,
        name: &str,
        channels: usize,
        kernels: &[usize],
    ) -> Self {
        let mut kappa_convs = Vec::new();
        let mut gamma_convs = Vec::new();
        let mut embed_gates = Vec::new();
        for &k in kernels {
            kappa_convs.push(Conv2dLayer::zeros(
                ps,
                &format!("{name}.kappa{k}"),
                channels,
                k * k - 1,
                3,
                1,
            ));
            gamma_convs.push(Conv2dLayer::zeros(
                ps,
                &format!("{name}.gamma{k}"),
                channels,
                1,
                3,
                1,
            ));
            embed_gates.push(ps.register(format!("{name}.gate{k}"), vec![0.0], vec![1], true));
        }
        let tau_conv = Conv2dLayer::zeros(ps, &format!("{name}.tau"), channels, 3, 3, 1);
        let sigma_conv =
            Conv2dLayer::zeros(ps, &format!("{name}.sigma"), channels, kernels.len(), 3, 1);
        Self {
            kappa_convs,
            gamma_convs,
            embed_gates,
            tau_conv,
            sigma_conv,
            kernels: kernels.to_vec(),
        }
    }
}

/// Full refinement of `d: D''` guided by the fused feature, running `t_max`
/// propagation sweeps per kernel with sparse embedding after each, then
/// combining the snapshot set.
pub fn refine(
    ctx: &Ctx,
    fused: &Var,
    d: &Var,
    map: &SparseDepthMap,
    gens: &RefinementGenerators,
    t_max: usize,
) -> Result<Var> {
    let ds = d.shape();
    let (h, w) = (ds[0], ds[1]);
    let steps = snapshot_steps(t_max);
    let mut snapshots: Vec<Vec<Var>> = Vec::with_capacity(gens.kernels.len());
    for (ki, &k) in gens.kernels.iter().enumerate() {
        let raw = gens.kappa_convs[ki].forward(ctx, fused)?;
        let kappa = normalize_affinity(&raw)?;
        let gamma_map = gens.gamma_convs[ki]
            .forward(ctx, fused)?
            .reshape(vec![h, w])?
            .sigmoid();
        let gate = ctx.var(gens.embed_gates[ki]).clamp01();
        let gamma = gamma_map.mul_var_scalar(&gate)?;
        let mut state = d.clone();
        let mut per_kernel = Vec::with_capacity(steps.len());
        if steps.contains(&0) {
            per_kernel.push(state.clone());
        }
        for t in 1..=t_max {
            state = cspn_step(&state, &kappa, k)?;
            state = embed_sparse(&state, map, &gamma)?;
            if steps[1..].contains(&t) {
                per_kernel.push(state.clone());
            }
        }
        snapshots.push(per_kernel);
    }
    let tau = gens.tau_conv.forward(ctx, fused)?.softmax(0)?;
    let sigma = gens.sigma_conv.forward(ctx, fused)?.softmax(0)?;
    combine(d, &snapshots, &tau, &sigma)
}
