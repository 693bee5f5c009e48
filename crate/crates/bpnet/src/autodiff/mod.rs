//! Tape-based reverse-mode differentiation over dense f64 tensors.
//!
//! A [`Tape`] records every op eagerly; [`Var`] is a handle to a node.
//! `backward` walks the tape in reverse and accumulates gradients into
//! per-node buffers, read back through [`Var::grad`]. Double precision
//! throughout so analytic gradients can be held to finite-difference
//! tolerances of 1e-4 with h = 1e-5.

pub mod kernels;
pub mod optim;
pub mod params;


use std::cell::RefCell;
use std::rc::Rc;
use std::sync::Arc;

use crate::parallel::{par_fill_chunks, par_map};
use crate::{BpError, Result};

/// Where batch-norm statistics come from.
pub enum BnStats {
    /// Per-batch statistics (train mode).
    Batch,
    /// Frozen running statistics (eval mode).
    Running { mean: Vec<f64>, var: Vec<f64> },
}

/// Which axis of the input indexes batch-norm channels.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BnLayout {
    /// `[rows, features]`, one channel per column.
    Features,
    /// `[channels, h, w]`, one channel per leading index.
    Channels,
}

enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Neg(usize),
    AddScalar(usize),
    MulScalar(usize, f64),
    MulVarScalar(usize, usize),
    Matmul {
        a: usize,
        b: usize,
        m: usize,
        k: usize,
        n: usize,
    },
    Linear {
        x: usize,
        w: usize,
        b: usize,
        rows: usize,
        din: usize,
        dout: usize,
    },
    Conv2d {
        x: usize,
        w: usize,
        b: usize,
        cin: usize,
        h: usize,
        wid: usize,
        cout: usize,
        k: usize,
        stride: usize,
        pad: usize,
    },
    Deconv2d {
        x: usize,
        w: usize,
        b: usize,
        cin: usize,
        h: usize,
        wid: usize,
        cout: usize,
        k: usize,
        stride: usize,
    },
    BatchNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        layout: BnLayout,
        channels: usize,
        per_channel: usize,
        xhat: Vec<f64>,
        invstd: Vec<f64>,
        train: bool,
    },
    Gelu(usize),
    Sigmoid(usize),
    Exp(usize),
    Abs(usize),
    Square(usize),
    Clamp01(usize),
    Softmax {
        x: usize,
        axis: usize,
    },
    SoftmaxGroups {
        x: usize,
        offsets: Arc<Vec<usize>>,
    },
    Concat {
        axis: usize,
        inputs: Vec<usize>,
    },
    Slice {
        x: usize,
        axis: usize,
        start: usize,
        len: usize,
    },
    Reshape(usize),
    Sum(usize),
    Mean(usize),
    BilinearUpsample {
        x: usize,
        ch: usize,
        h: usize,
        w: usize,
        factor: usize,
    },
    GatherPixels {
        x: usize,
        idx: Arc<Vec<usize>>,
        ch: usize,
    },
    ScatterAdd {
        x: usize,
        idx: Arc<Vec<usize>>,
    },
    NormalizeAffinity {
        x: usize,
        m: usize,
        hw: usize,
    },
    CspnStep {
        state: usize,
        kappa: usize,
        k: usize,
        h: usize,
        w: usize,
    },
}

struct Node {
    op: Op,
    shape: Vec<usize>,
    data: Vec<f64>,
    requires_grad: bool,
}

#[derive(Default)]
struct TapeInner {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
}

/// Recording tape. Cloning shares the underlying graph.
#[derive(Clone, Default)]
pub struct Tape {
    inner: Rc<RefCell<TapeInner>>,
}

/// Handle to a tensor recorded on a tape.
#[derive(Clone)]
pub struct Var {
    tape: Tape,
    id: usize,
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.inner.borrow().nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, op: Op, shape: Vec<usize>, data: Vec<f64>, requires_grad: bool) -> Var {
        let mut inner = self.inner.borrow_mut();
        inner.nodes.push(Node {
            op,
            shape,
            data,
            requires_grad,
        });
        inner.grads.push(None);
        Var {
            tape: self.clone(),
            id: inner.nodes.len() - 1,
        }
    }

    pub fn leaf(&self, data: Vec<f64>, shape: Vec<usize>, requires_grad: bool) -> Result<Var> {
        if numel(&shape) != data.len() {
            return Err(BpError::InvalidArgument {
                op: "leaf",
                msg: format!("shape {:?} does not match {} elements", shape, data.len()),
            });
        }
        Ok(self.push(Op::Leaf, shape, data, requires_grad))
    }

    pub fn constant(&self, data: Vec<f64>, shape: Vec<usize>) -> Result<Var> {
        self.leaf(data, shape, false)
    }

    pub fn scalar(&self, v: f64) -> Var {
        self.push(Op::Leaf, vec![1], vec![v], false)
    }

    /// Concatenate along `axis`; all other extents must agree.
    pub fn concat(&self, parts: &[&Var], axis: usize) -> Result<Var> {
        assert!(!parts.is_empty());
        let base = parts[0].shape();
        if axis >= base.len() {
            return Err(BpError::InvalidArgument {
                op: "concat",
                msg: format!("axis {} out of range for rank {}", axis, base.len()),
            });
        }
        let mut axis_total = 0;
        for p in parts {
            let s = p.shape();
            if s.len() != base.len()
                || s.iter()
                    .zip(&base)
                    .enumerate()
                    .any(|(i, (a, b))| i != axis && a != b)
            {
                return Err(BpError::ShapeMismatch {
                    op: "concat",
                    lhs: base.clone(),
                    rhs: s,
                });
            }
            axis_total += s[axis];
        }
        let mut shape = base.clone();
        shape[axis] = axis_total;
        let stride: usize = base[axis + 1..].iter().product();
        let outer: usize = base[..axis].iter().product();
        let mut data = vec![0.0; numel(&shape)];
        let out_row = axis_total * stride;
        let mut col_off = 0;
        for p in parts {
            let s = p.shape();
            let len = s[axis] * stride;
            let pd = p.value();
            for o in 0..outer {
                data[o * out_row + col_off..o * out_row + col_off + len]
                    .copy_from_slice(&pd[o * len..(o + 1) * len]);
            }
            col_off += len;
        }
        let req = parts.iter().any(|p| p.requires_grad());
        Ok(self.push(
            Op::Concat {
                axis,
                inputs: parts.iter().map(|p| p.id).collect(),
            },
            shape,
            data,
            req,
        ))
    }

    pub fn clear_grads(&self) {
        let mut inner = self.inner.borrow_mut();
        for g in inner.grads.iter_mut() {
            *g = None;
        }
    }

    /// Reverse sweep from a scalar loss. Grads accumulate; call
    /// [`Tape::clear_grads`] between passes for fresh gradients.
    pub fn backward(&self, loss: &Var) -> Result<()> {
        if loss.numel() != 1 {
            return Err(BpError::InvalidArgument {
                op: "backward",
                msg: format!("loss must be scalar, got shape {:?}", loss.shape()),
            });
        }
        let mut inner = self.inner.borrow_mut();
        let inner = &mut *inner;
        let nodes = &inner.nodes;
        let grads = &mut inner.grads;
        let acc = |grads: &mut Vec<Option<Vec<f64>>>, id: usize, contrib: &[f64]| {
            let slot = grads[id].get_or_insert_with(|| vec![0.0; nodes[id].data.len()]);
            for (g, c) in slot.iter_mut().zip(contrib) {
                *g += c;
            }
        };
        {
            let slot = grads[loss.id].get_or_insert_with(|| vec![0.0; 1]);
            slot[0] += 1.0;
        }
        for id in (0..=loss.id).rev() {
            if !nodes[id].requires_grad {
                continue;
            }
            let g = match &grads[id] {
                Some(g) => g.clone(),
                None => continue,
            };
            let node = &nodes[id];
            match &node.op {
                Op::Leaf => {}
                Op::Add(a, b) => {
                    acc(grads, *a, &g);
                    acc(grads, *b, &g);
                }
                Op::Sub(a, b) => {
                    acc(grads, *a, &g);
                    let neg: Vec<f64> = g.iter().map(|v| -v).collect();
                    acc(grads, *b, &neg);
                }
                Op::Mul(a, b) => {
                    let da: Vec<f64> = g
                        .iter()
                        .zip(&nodes[*b].data)
                        .map(|(g, b)| g * b)
                        .collect();
                    let db: Vec<f64> = g
                        .iter()
                        .zip(&nodes[*a].data)
                        .map(|(g, a)| g * a)
                        .collect();
                    acc(grads, *a, &da);
                    acc(grads, *b, &db);
                }
                Op::Neg(a) => {
                    let da: Vec<f64> = g.iter().map(|v| -v).collect();
                    acc(grads, *a, &da);
                }
                Op::AddScalar(a) => acc(grads, *a, &g),
                Op::MulScalar(a, c) => {
                    let da: Vec<f64> = g.iter().map(|v| v * c).collect();
                    acc(grads, *a, &da);
                }
                Op::MulVarScalar(a, s) => {
                    let sv = nodes[*s].data[0];
                    let da: Vec<f64> = g.iter().map(|v| v * sv).collect();
                    let ds: f64 = g.iter().zip(&nodes[*a].data).map(|(g, a)| g * a).sum();
                    acc(grads, *a, &da);
                    acc(grads, *s, &[ds]);
                }
                Op::Matmul { a, b, m, k, n } => {
                    let (m, kk, n) = (*m, *k, *n);
                    let ad = &nodes[*a].data;
                    let bd = &nodes[*b].data;
                    let mut da = vec![0.0; m * kk];
                    for i in 0..m {
                        for p in 0..kk {
                            let mut s = 0.0;
                            for j in 0..n {
                                s += g[i * n + j] * bd[p * n + j];
                            }
                            da[i * kk + p] = s;
                        }
                    }
                    let mut db = vec![0.0; kk * n];
                    for p in 0..kk {
                        for j in 0..n {
                            let mut s = 0.0;
                            for i in 0..m {
                                s += ad[i * kk + p] * g[i * n + j];
                            }
                            db[p * n + j] = s;
                        }
                    }
                    acc(grads, *a, &da);
                    acc(grads, *b, &db);
                }
                Op::Linear {
                    x,
                    w,
                    b,
                    rows,
                    din,
                    dout,
                } => {
                    let (rows, din, dout) = (*rows, *din, *dout);
                    let xd = &nodes[*x].data;
                    let wd = &nodes[*w].data;
                    let dx = {
                        let mut dx = vec![0.0; rows * din];
                        par_fill_chunks(&mut dx, din, |r, row| {
                            for i in 0..din {
                                let mut s = 0.0;
                                for o in 0..dout {
                                    s += g[r * dout + o] * wd[i * dout + o];
                                }
                                row[i] = s;
                            }
                        });
                        dx
                    };
                    let dw = {
                        let mut dw = vec![0.0; din * dout];
                        par_fill_chunks(&mut dw, dout, |i, row| {
                            for o in 0..dout {
                                let mut s = 0.0;
                                for r in 0..rows {
                                    s += xd[r * din + i] * g[r * dout + o];
                                }
                                row[o] = s;
                            }
                        });
                        dw
                    };
                    let db: Vec<f64> = (0..dout)
                        .map(|o| (0..rows).map(|r| g[r * dout + o]).sum())
                        .collect();
                    acc(grads, *x, &dx);
                    acc(grads, *w, &dw);
                    acc(grads, *b, &db);
                }
                Op::Conv2d {
                    x,
                    w,
                    b,
                    cin,
                    h,
                    wid,
                    cout,
                    k,
                    stride,
                    pad,
                } => {
                    let (gx, gw, gb) = kernels::conv2d_backward(
                        &g,
                        &nodes[*x].data,
                        &nodes[*w].data,
                        *cin,
                        *h,
                        *wid,
                        *cout,
                        *k,
                        *stride,
                        *pad,
                    );
                    acc(grads, *x, &gx);
                    acc(grads, *w, &gw);
                    acc(grads, *b, &gb);
                }
                Op::Deconv2d {
                    x,
                    w,
                    b,
                    cin,
                    h,
                    wid,
                    cout,
                    k,
                    stride,
                } => {
                    let (gx, gw, gb) = kernels::deconv2d_backward(
                        &g,
                        &nodes[*x].data,
                        &nodes[*w].data,
                        *cin,
                        *h,
                        *wid,
                        *cout,
                        *k,
                        *stride,
                    );
                    acc(grads, *x, &gx);
                    acc(grads, *w, &gw);
                    acc(grads, *b, &gb);
                }
                Op::BatchNorm {
                    x,
                    gamma,
                    beta,
                    layout,
                    channels,
                    per_channel,
                    xhat,
                    invstd,
                    train,
                } => {
                    let (ch, n) = (*channels, *per_channel);
                    let gammad = &nodes[*gamma].data;
                    let index = |el: usize, c: usize| -> usize {
                        match layout {
                            BnLayout::Features => el * ch + c,
                            BnLayout::Channels => c * n + el,
                        }
                    };
                    let mut gx = vec![0.0; xhat.len()];
                    let mut ggamma = vec![0.0; ch];
                    let mut gbeta = vec![0.0; ch];
                    for c in 0..ch {
                        let mut sg = 0.0;
                        let mut sgx = 0.0;
                        for el in 0..n {
                            let i = index(el, c);
                            sg += g[i];
                            sgx += g[i] * xhat[i];
                        }
                        ggamma[c] = sgx;
                        gbeta[c] = sg;
                        if *train {
                            let coef = gammad[c] * invstd[c] / n as f64;
                            for el in 0..n {
                                let i = index(el, c);
                                gx[i] = coef * (n as f64 * g[i] - sg - xhat[i] * sgx);
                            }
                        } else {
                            let coef = gammad[c] * invstd[c];
                            for el in 0..n {
                                let i = index(el, c);
                                gx[i] = coef * g[i];
                            }
                        }
                    }
                    acc(grads, *x, &gx);
                    acc(grads, *gamma, &ggamma);
                    acc(grads, *beta, &gbeta);
                }
                Op::Gelu(a) => {
                    let da: Vec<f64> = g
                        .iter()
                        .zip(&nodes[*a].data)
                        .map(|(g, x)| g * kernels::gelu(*x).1)
                        .collect();
                    acc(grads, *a, &da);
                }
                Op::Sigmoid(a) => {
                    let da: Vec<f64> = g
                        .iter()
                        .zip(&node.data)
                        .map(|(g, y)| g * y * (1.0 - y))
                        .collect();
                    acc(grads, *a, &da);
                }
                Op::Exp(a) => {
                    let da: Vec<f64> = g.iter().zip(&node.data).map(|(g, y)| g * y).collect();
                    acc(grads, *a, &da);
                }
                Op::Abs(a) => {
                    let da: Vec<f64> = g
                        .iter()
                        .zip(&nodes[*a].data)
                        .map(|(g, x)| g * x.signum() * if *x == 0.0 { 0.0 } else { 1.0 })
                        .collect();
                    acc(grads, *a, &da);
                }
                Op::Square(a) => {
                    let da: Vec<f64> = g
                        .iter()
                        .zip(&nodes[*a].data)
                        .map(|(g, x)| g * 2.0 * x)
                        .collect();
                    acc(grads, *a, &da);
                }
                Op::Clamp01(a) => {
                    // closed-interval pass-through so a gate pinned at 0 can
                    // still receive gradient and move inward
                    let da: Vec<f64> = g
                        .iter()
                        .zip(&nodes[*a].data)
                        .map(|(g, x)| if (0.0..=1.0).contains(x) { *g } else { 0.0 })
                        .collect();
                    acc(grads, *a, &da);
                }
                Op::Softmax { x, axis } => {
                    let shape = &node.shape;
                    let len = shape[*axis];
                    let stride: usize = shape[*axis + 1..].iter().product();
                    let outer: usize = shape[..*axis].iter().product();
                    let y = &node.data;
                    let mut dx = vec![0.0; y.len()];
                    for o in 0..outer {
                        for s in 0..stride {
                            let at = |i: usize| (o * len + i) * stride + s;
                            let dot: f64 = (0..len).map(|i| g[at(i)] * y[at(i)]).sum();
                            for i in 0..len {
                                dx[at(i)] = y[at(i)] * (g[at(i)] - dot);
                            }
                        }
                    }
                    acc(grads, *x, &dx);
                }
                Op::SoftmaxGroups { x, offsets } => {
                    let y = &node.data;
                    let mut dx = vec![0.0; y.len()];
                    for w in offsets.windows(2) {
                        let (a, b) = (w[0], w[1]);
                        let dot: f64 = (a..b).map(|i| g[i] * y[i]).sum();
                        for i in a..b {
                            dx[i] = y[i] * (g[i] - dot);
                        }
                    }
                    acc(grads, *x, &dx);
                }
                Op::Concat { axis, inputs } => {
                    let shape = &node.shape;
                    let stride: usize = shape[*axis + 1..].iter().product();
                    let outer: usize = shape[..*axis].iter().product();
                    let out_row = shape[*axis] * stride;
                    let mut col_off = 0;
                    for inp in inputs {
                        let s = &nodes[*inp].shape;
                        let len = s[*axis] * stride;
                        let mut di = vec![0.0; nodes[*inp].data.len()];
                        for o in 0..outer {
                            di[o * len..(o + 1) * len].copy_from_slice(
                                &g[o * out_row + col_off..o * out_row + col_off + len],
                            );
                        }
                        acc(grads, *inp, &di);
                        col_off += len;
                    }
                }
                Op::Slice {
                    x,
                    axis,
                    start,
                    len,
                } => {
                    let in_shape = &nodes[*x].shape;
                    let stride: usize = in_shape[*axis + 1..].iter().product();
                    let outer: usize = in_shape[..*axis].iter().product();
                    let in_row = in_shape[*axis] * stride;
                    let out_row = len * stride;
                    let mut dx = vec![0.0; nodes[*x].data.len()];
                    for o in 0..outer {
                        dx[o * in_row + start * stride..o * in_row + (start + len) * stride]
                            .copy_from_slice(&g[o * out_row..(o + 1) * out_row]);
                    }
                    acc(grads, *x, &dx);
                }
                Op::Reshape(x) => acc(grads, *x, &g),
                Op::Sum(x) => {
                    let dx = vec![g[0]; nodes[*x].data.len()];
                    acc(grads, *x, &dx);
                }
                Op::Mean(x) => {
                    let n = nodes[*x].data.len();
                    let dx = vec![g[0] / n as f64; n];
                    acc(grads, *x, &dx);
                }
                Op::BilinearUpsample {
                    x,
                    ch,
                    h,
                    w,
                    factor,
                } => {
                    let dx = kernels::bilinear_upsample_backward(&g, *ch, *h, *w, *factor);
                    acc(grads, *x, &dx);
                }
                Op::GatherPixels { x, idx, ch } => {
                    let mut dx = vec![0.0; nodes[*x].data.len()];
                    let npix = dx.len() / ch;
                    for (p, &pix) in idx.iter().enumerate() {
                        for c in 0..*ch {
                            dx[c * npix + pix] += g[p * ch + c];
                        }
                    }
                    acc(grads, *x, &dx);
                }
                Op::ScatterAdd { x, idx } => {
                    let dx: Vec<f64> = idx.iter().map(|&j| g[j]).collect();
                    acc(grads, *x, &dx);
                }
                Op::NormalizeAffinity { x, m, hw } => {
                    let raw = &nodes[*x].data;
                    let (m, hw) = (*m, *hw);
                    let mut dx = vec![0.0; m * hw];
                    for p in 0..hw {
                        let s: f64 = (0..m).map(|c| raw[c * hw + p].abs()).sum();
                        if s < 1e-12 {
                            continue; // identity fallback is locally constant
                        }
                        let gi = g[m * hw + p];
                        let sum_r: f64 = (0..m).map(|c| raw[c * hw + p]).sum();
                        let dot_gr: f64 = (0..m).map(|c| g[c * hw + p] * raw[c * hw + p]).sum();
                        for d in 0..m {
                            let sgn = raw[d * hw + p].signum();
                            dx[d * hw + p] = g[d * hw + p] / s - sgn * dot_gr / (s * s)
                                - gi / s
                                + gi * sum_r * sgn / (s * s);
                        }
                    }
                    acc(grads, *x, &dx);
                }
                Op::CspnStep {
                    state,
                    kappa,
                    k,
                    h,
                    w,
                } => {
                    let (gs, gk) = kernels::cspn_backward(
                        &g,
                        &nodes[*state].data,
                        &nodes[*kappa].data,
                        *k,
                        *h,
                        *w,
                    );
                    acc(grads, *state, &gs);
                    acc(grads, *kappa, &gk);
                }
            }
        }
        Ok(())
    }
}

impl Var {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.inner.borrow().nodes[self.id].shape.clone()
    }

    pub fn tape_handle(&self) -> Tape {
        self.tape.clone()
    }

    pub fn numel(&self) -> usize {
        self.tape.inner.borrow().nodes[self.id].data.len()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.inner.borrow().nodes[self.id].requires_grad
    }

    /// Clone of the forward value.
    pub fn value(&self) -> Vec<f64> {
        self.tape.inner.borrow().nodes[self.id].data.clone()
    }

    pub fn scalar_value(&self) -> f64 {
        self.tape.inner.borrow().nodes[self.id].data[0]
    }

    pub fn grad(&self) -> Option<Vec<f64>> {
        self.tape.inner.borrow().grads[self.id].clone()
    }

    fn same_tape(&self, other: &Var) -> (Tape, bool) {
        (self.tape.clone(), Rc::ptr_eq(&self.tape.inner, &other.tape.inner))
    }

    fn binary_elementwise(
        &self,
        other: &Var,
        opname: &'static str,
        make: impl Fn(usize, usize) -> Op,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Var> {
        let (tape, same) = self.same_tape(other);
        debug_assert!(same);
        let (sa, sb) = (self.shape(), other.shape());
        if sa != sb {
            return Err(BpError::ShapeMismatch {
                op: opname,
                lhs: sa,
                rhs: sb,
            });
        }
        let data: Vec<f64> = {
            let inner = tape.inner.borrow();
            inner.nodes[self.id]
                .data
                .iter()
                .zip(&inner.nodes[other.id].data)
                .map(|(a, b)| f(*a, *b))
                .collect()
        };
        let req = self.requires_grad() || other.requires_grad();
        Ok(tape.push(make(self.id, other.id), sa, data, req))
    }

    pub fn add(&self, other: &Var) -> Result<Var> {
        self.binary_elementwise(other, "add", Op::Add, |a, b| a + b)
    }

    pub fn sub(&self, other: &Var) -> Result<Var> {
        self.binary_elementwise(other, "sub", Op::Sub, |a, b| a - b)
    }

    pub fn mul(&self, other: &Var) -> Result<Var> {
        self.binary_elementwise(other, "mul", Op::Mul, |a, b| a * b)
    }

    fn unary(&self, make: impl Fn(usize) -> Op, f: impl Fn(f64) -> f64) -> Var {
        let data: Vec<f64> = self.tape.inner.borrow().nodes[self.id]
            .data
            .iter()
            .map(|x| f(*x))
            .collect();
        let shape = self.shape();
        let req = self.requires_grad();
        self.tape.push(make(self.id), shape, data, req)
    }

    pub fn neg(&self) -> Var {
        self.unary(Op::Neg, |x| -x)
    }

    pub fn add_scalar(&self, c: f64) -> Var {
        self.unary(|id| Op::AddScalar(id), |x| x + c)
    }

    pub fn mul_scalar(&self, c: f64) -> Var {
        self.unary(|id| Op::MulScalar(id, c), |x| x * c)
    }

    pub fn gelu(&self) -> Var {
        self.unary(Op::Gelu, |x| kernels::gelu(x).0)
    }

    pub fn sigmoid(&self) -> Var {
        self.unary(Op::Sigmoid, |x| 1.0 / (1.0 + (-x).exp()))
    }

    pub fn exp(&self) -> Var {
        self.unary(Op::Exp, f64::exp)
    }

    pub fn abs(&self) -> Var {
        self.unary(Op::Abs, f64::abs)
    }

    pub fn square(&self) -> Var {
        self.unary(Op::Square, |x| x * x)
    }

    pub fn clamp01(&self) -> Var {
        self.unary(Op::Clamp01, |x| x.clamp(0.0, 1.0))
    }

    /// Multiply by a one-element tensor, broadcast over all elements.
    pub fn mul_var_scalar(&self, s: &Var) -> Result<Var> {
        if s.numel() != 1 {
            return Err(BpError::InvalidArgument {
                op: "mul_var_scalar",
                msg: format!("scale must be scalar, got {:?}", s.shape()),
            });
        }
        let sv = s.scalar_value();
        let data: Vec<f64> = self.tape.inner.borrow().nodes[self.id]
            .data
            .iter()
            .map(|x| x * sv)
            .collect();
        let shape = self.shape();
        let req = self.requires_grad() || s.requires_grad();
        Ok(self
            .tape
            .push(Op::MulVarScalar(self.id, s.id), shape, data, req))
    }

    pub fn matmul(&self, other: &Var) -> Result<Var> {
        let (sa, sb) = (self.shape(), other.shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(BpError::ShapeMismatch {
                op: "matmul",
                lhs: sa,
                rhs: sb,
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let data = {
            let inner = self.tape.inner.borrow();
            let a = &inner.nodes[self.id].data;
            let b = &inner.nodes[other.id].data;
            let mut out = vec![0.0; m * n];
            par_fill_chunks(&mut out, n, |i, row| {
                for j in 0..n {
                    let mut s = 0.0;
                    for p in 0..k {
                        s += a[i * k + p] * b[p * n + j];
                    }
                    row[j] = s;
                }
            });
            out
        };
        let req = self.requires_grad() || other.requires_grad();
        Ok(self.tape.push(
            Op::Matmul {
                a: self.id,
                b: other.id,
                m,
                k,
                n,
            },
            vec![m, n],
            data,
            req,
        ))
    }

    /// `x [rows, din] @ w [din, dout] + b [dout]`.
    pub fn linear(&self, w: &Var, b: &Var) -> Result<Var> {
        let (sx, sw, sb) = (self.shape(), w.shape(), b.shape());
        if sx.len() != 2 || sw.len() != 2 || sx[1] != sw[0] || sb != vec![sw[1]] {
            return Err(BpError::ShapeMismatch {
                op: "linear",
                lhs: sx,
                rhs: sw,
            });
        }
        let (rows, din, dout) = (sx[0], sx[1], sw[1]);
        let data = {
            let inner = self.tape.inner.borrow();
            let xd = &inner.nodes[self.id].data;
            let wd = &inner.nodes[w.id].data;
            let bd = &inner.nodes[b.id].data;
            let mut out = vec![0.0; rows * dout];
            par_fill_chunks(&mut out, dout, |r, row| {
                for o in 0..dout {
                    let mut s = bd[o];
                    for i in 0..din {
                        s += xd[r * din + i] * wd[i * dout + o];
                    }
                    row[o] = s;
                }
            });
            out
        };
        let req = self.requires_grad() || w.requires_grad() || b.requires_grad();
        Ok(self.tape.push(
            Op::Linear {
                x: self.id,
                w: w.id,
                b: b.id,
                rows,
                din,
                dout,
            },
            vec![rows, dout],
            data,
            req,
        ))
    }

    /// 2-D convolution on `[cin, h, w]` with odd square kernels.
    pub fn conv2d(&self, w: &Var, b: &Var, stride: usize, pad: usize) -> Result<Var> {
        let (sx, sw) = (self.shape(), w.shape());
        if sx.len() != 3 || sw.len() != 4 || sw[1] != sx[0] || sw[2] != sw[3] {
            return Err(BpError::ShapeMismatch {
                op: "conv2d",
                lhs: sx,
                rhs: sw,
            });
        }
        let k = sw[2];
        if k % 2 == 0 {
            return Err(BpError::InvalidArgument {
                op: "conv2d",
                msg: format!("kernel size {k} must be odd"),
            });
        }
        let (cin, h, wid, cout) = (sx[0], sx[1], sx[2], sw[0]);
        if b.shape() != vec![cout] {
            return Err(BpError::ShapeMismatch {
                op: "conv2d",
                lhs: b.shape(),
                rhs: vec![cout],
            });
        }
        let data = {
            let inner = self.tape.inner.borrow();
            kernels::conv2d_forward(
                &inner.nodes[self.id].data,
                &inner.nodes[w.id].data,
                &inner.nodes[b.id].data,
                cin,
                h,
                wid,
                cout,
                k,
                stride,
                pad,
            )
        };
        let oh = kernels::conv2d_out_dim(h, k, stride, pad);
        let ow = kernels::conv2d_out_dim(wid, k, stride, pad);
        let req = self.requires_grad() || w.requires_grad() || b.requires_grad();
        Ok(self.tape.push(
            Op::Conv2d {
                x: self.id,
                w: w.id,
                b: b.id,
                cin,
                h,
                wid,
                cout,
                k,
                stride,
                pad,
            },
            vec![cout, oh, ow],
            data,
            req,
        ))
    }

    /// Transposed convolution on `[cin, h, w]`; weight is `[cin, cout, k, k]`.
    pub fn deconv2d(&self, w: &Var, b: &Var, stride: usize) -> Result<Var> {
        let (sx, sw) = (self.shape(), w.shape());
        if sx.len() != 3 || sw.len() != 4 || sw[0] != sx[0] || sw[2] != sw[3] {
            return Err(BpError::ShapeMismatch {
                op: "deconv2d",
                lhs: sx,
                rhs: sw,
            });
        }
        let (cin, h, wid, cout, k) = (sx[0], sx[1], sx[2], sw[1], sw[2]);
        let data = {
            let inner = self.tape.inner.borrow();
            kernels::deconv2d_forward(
                &inner.nodes[self.id].data,
                &inner.nodes[w.id].data,
                &inner.nodes[b.id].data,
                cin,
                h,
                wid,
                cout,
                k,
                stride,
            )
        };
        let oh = (h - 1) * stride + k;
        let ow = (wid - 1) * stride + k;
        let req = self.requires_grad() || w.requires_grad() || b.requires_grad();
        Ok(self.tape.push(
            Op::Deconv2d {
                x: self.id,
                w: w.id,
                b: b.id,
                cin,
                h,
                wid,
                cout,
                k,
                stride,
            },
            vec![cout, oh, ow],
            data,
            req,
        ))
    }

    /// Per-channel batch normalization. Returns the normalized tensor and,
    /// in train mode, the batch mean/variance so callers can update running
    /// statistics.
    pub fn batch_norm(
        &self,
        gamma: &Var,
        beta: &Var,
        layout: BnLayout,
        stats: BnStats,
        eps: f64,
    ) -> Result<(Var, Option<(Vec<f64>, Vec<f64>)>)> {
        let sx = self.shape();
        let (channels, per_channel) = match layout {
            BnLayout::Features => {
                if sx.len() != 2 {
                    return Err(BpError::InvalidArgument {
                        op: "batch_norm",
                        msg: format!("Features layout expects rank 2, got {sx:?}"),
                    });
                }
                (sx[1], sx[0])
            }
            BnLayout::Channels => {
                if sx.len() != 3 {
                    return Err(BpError::InvalidArgument {
                        op: "batch_norm",
                        msg: format!("Channels layout expects rank 3, got {sx:?}"),
                    });
                }
                (sx[0], sx[1] * sx[2])
            }
        };
        if gamma.shape() != vec![channels] || beta.shape() != vec![channels] {
            return Err(BpError::ShapeMismatch {
                op: "batch_norm",
                lhs: gamma.shape(),
                rhs: vec![channels],
            });
        }
        let index = |el: usize, c: usize| -> usize {
            match layout {
                BnLayout::Features => el * channels + c,
                BnLayout::Channels => c * per_channel + el,
            }
        };
        let (mean, var, train) = match stats {
            BnStats::Batch => {
                let inner = self.tape.inner.borrow();
                let xd = &inner.nodes[self.id].data;
                let mut mean = vec![0.0; channels];
                let mut var = vec![0.0; channels];
                for c in 0..channels {
                    let m: f64 =
                        (0..per_channel).map(|e| xd[index(e, c)]).sum::<f64>() / per_channel as f64;
                    let v: f64 = (0..per_channel)
                        .map(|e| (xd[index(e, c)] - m).powi(2))
                        .sum::<f64>()
                        / per_channel as f64;
                    mean[c] = m;
                    var[c] = v;
                }
                (mean, var, true)
            }
            BnStats::Running { mean, var } => (mean, var, false),
        };
        let invstd: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let (xhat, data) = {
            let inner = self.tape.inner.borrow();
            let xd = &inner.nodes[self.id].data;
            let gd = &inner.nodes[gamma.id].data;
            let bd = &inner.nodes[beta.id].data;
            let mut xhat = vec![0.0; xd.len()];
            let mut out = vec![0.0; xd.len()];
            for c in 0..channels {
                for e in 0..per_channel {
                    let i = index(e, c);
                    xhat[i] = (xd[i] - mean[c]) * invstd[c];
                    out[i] = gd[c] * xhat[i] + bd[c];
                }
            }
            (xhat, out)
        };
        let req = self.requires_grad() || gamma.requires_grad() || beta.requires_grad();
        let out = self.tape.push(
            Op::BatchNorm {
                x: self.id,
                gamma: gamma.id,
                beta: beta.id,
                layout,
                channels,
                per_channel,
                xhat,
                invstd,
                train,
            },
            sx,
            data,
            req,
        );
        Ok((out, if train { Some((mean, var)) } else { None }))
    }

    /// Softmax along `axis`.
    pub fn softmax(&self, axis: usize) -> Result<Var> {
        let shape = self.shape();
        if axis >= shape.len() {
            return Err(BpError::InvalidArgument {
                op: "softmax",
                msg: format!("axis {} out of range for shape {:?}", axis, shape),
            });
        }
        let len = shape[axis];
        let stride: usize = shape[axis + 1..].iter().product();
        let outer: usize = shape[..axis].iter().product();
        let data = {
            let inner = self.tape.inner.borrow();
            let xd = &inner.nodes[self.id].data;
            let mut out = vec![0.0; xd.len()];
            for o in 0..outer {
                for s in 0..stride {
                    let at = |i: usize| (o * len + i) * stride + s;
                    let mx = (0..len).map(|i| xd[at(i)]).fold(f64::NEG_INFINITY, f64::max);
                    let mut z = 0.0;
                    for i in 0..len {
                        let e = (xd[at(i)] - mx).exp();
                        out[at(i)] = e;
                        z += e;
                    }
                    for i in 0..len {
                        out[at(i)] /= z;
                    }
                }
            }
            out
        };
        let req = self.requires_grad();
        Ok(self
            .tape
            .push(Op::Softmax { x: self.id, axis }, shape, data, req))
    }

    /// Softmax over contiguous groups of a flat vector; `offsets` has one
    /// more entry than there are groups and must cover the whole vector.
    pub fn softmax_groups(&self, offsets: Arc<Vec<usize>>) -> Result<Var> {
        let shape = self.shape();
        if shape.len() != 1 || offsets.last().copied() != Some(shape[0]) || offsets[0] != 0 {
            return Err(BpError::InvalidArgument {
                op: "softmax_groups",
                msg: format!("offsets must span a flat vector of {:?} elements", shape),
            });
        }
        let data = {
            let inner = self.tape.inner.borrow();
            let xd = &inner.nodes[self.id].data;
            let mut out = vec![0.0; xd.len()];
            for w in offsets.windows(2) {
                let (a, b) = (w[0], w[1]);
                let mx = xd[a..b].iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for i in a..b {
                    let e = (xd[i] - mx).exp();
                    out[i] = e;
                    z += e;
                }
                for i in a..b {
                    out[i] /= z;
                }
            }
            out
        };
        let req = self.requires_grad();
        Ok(self
            .tape
            .push(Op::SoftmaxGroups { x: self.id, offsets }, shape, data, req))
    }

    /// Contiguous slab `[start, start+len)` along `axis`.
    pub fn slice(&self, axis: usize, start: usize, len: usize) -> Result<Var> {
        let in_shape = self.shape();
        if axis >= in_shape.len() || start + len > in_shape[axis] {
            return Err(BpError::InvalidArgument {
                op: "slice",
                msg: format!(
                    "range {}..{} on axis {} out of bounds for {:?}",
                    start,
                    start + len,
                    axis,
                    in_shape
                ),
            });
        }
        let stride: usize = in_shape[axis + 1..].iter().product();
        let outer: usize = in_shape[..axis].iter().product();
        let in_row = in_shape[axis] * stride;
        let out_row = len * stride;
        let data = {
            let inner = self.tape.inner.borrow();
            let xd = &inner.nodes[self.id].data;
            let mut out = vec![0.0; outer * out_row];
            for o in 0..outer {
                out[o * out_row..(o + 1) * out_row].copy_from_slice(
                    &xd[o * in_row + start * stride..o * in_row + (start + len) * stride],
                );
            }
            out
        };
        let mut shape = in_shape;
        shape[axis] = len;
        let req = self.requires_grad();
        Ok(self.tape.push(
            Op::Slice {
                x: self.id,
                axis,
                start,
                len,
            },
            shape,
            data,
            req,
        ))
    }

    pub fn reshape(&self, shape: Vec<usize>) -> Result<Var> {
        if numel(&shape) != self.numel() {
            return Err(BpError::InvalidArgument {
                op: "reshape",
                msg: format!("cannot reshape {:?} to {:?}", self.shape(), shape),
            });
        }
        let data = self.value();
        let req = self.requires_grad();
        Ok(self.tape.push(Op::Reshape(self.id), shape, data, req))
    }

    pub fn sum(&self) -> Var {
        let s: f64 = self.tape.inner.borrow().nodes[self.id].data.iter().sum();
        let req = self.requires_grad();
        self.tape.push(Op::Sum(self.id), vec![1], vec![s], req)
    }

    pub fn mean(&self) -> Var {
        let inner = self.tape.inner.borrow();
        let d = &inner.nodes[self.id].data;
        let m = d.iter().sum::<f64>() / d.len() as f64;
        drop(inner);
        let req = self.requires_grad();
        self.tape.push(Op::Mean(self.id), vec![1], vec![m], req)
    }

    /// Bilinear upsampling of `[c, h, w]` (or `[h, w]`) by an integer factor.
    pub fn bilinear_upsample(&self, factor: usize) -> Result<Var> {
        let in_shape = self.shape();
        let (ch, h, w, rank2) = match in_shape.len() {
            2 => (1, in_shape[0], in_shape[1], true),
            3 => (in_shape[0], in_shape[1], in_shape[2], false),
            _ => {
                return Err(BpError::InvalidArgument {
                    op: "bilinear_upsample",
                    msg: format!("expected rank 2 or 3, got {in_shape:?}"),
                })
            }
        };
        let data = {
            let inner = self.tape.inner.borrow();
            kernels::bilinear_upsample_forward(&inner.nodes[self.id].data, ch, h, w, factor)
        };
        let shape = if rank2 {
            vec![h * factor, w * factor]
        } else {
            vec![ch, h * factor, w * factor]
        };
        let req = self.requires_grad();
        Ok(self.tape.push(
            Op::BilinearUpsample {
                x: self.id,
                ch,
                h,
                w,
                factor,
            },
            shape,
            data,
            req,
        ))
    }

    /// Gather pixel columns: `[c, h, w]` (or `[h, w]`) indexed by flat pixel
    /// ids, producing one row of `c` features per index.
    pub fn gather_pixels(&self, idx: Arc<Vec<usize>>) -> Result<Var> {
        let in_shape = self.shape();
        let (ch, npix) = match in_shape.len() {
            2 => (1, in_shape[0] * in_shape[1]),
            3 => (in_shape[0], in_shape[1] * in_shape[2]),
            _ => {
                return Err(BpError::InvalidArgument {
                    op: "gather",
                    msg: format!("expected rank 2 or 3, got {in_shape:?}"),
                })
            }
        };
        if let Some(&bad) = idx.iter().find(|&&i| i >= npix) {
            return Err(BpError::InvalidArgument {
                op: "gather",
                msg: format!("index {bad} out of range for {npix} pixels"),
            });
        }
        let p = idx.len();
        let data = {
            let inner = self.tape.inner.borrow();
            let xd = &inner.nodes[self.id].data;
            let idx = &idx;
            par_map(p, |r| {
                let mut row = vec![0.0; ch];
                for (c, slot) in row.iter_mut().enumerate() {
                    *slot = xd[c * npix + idx[r]];
                }
                row
            })
            .into_iter()
            .flatten()
            .collect()
        };
        let req = self.requires_grad();
        Ok(self.tape.push(
            Op::GatherPixels {
                x: self.id,
                idx,
                ch,
            },
            vec![p, ch],
            data,
            req,
        ))
    }

    /// Scatter-add a flat vector into `out_len` slots by index.
    pub fn scatter_add(&self, idx: Arc<Vec<usize>>, out_len: usize) -> Result<Var> {
        let in_shape = self.shape();
        if in_shape.len() != 1 || in_shape[0] != idx.len() {
            return Err(BpError::InvalidArgument {
                op: "scatter_add",
                msg: format!("expected flat vector of {} values, got {:?}", idx.len(), in_shape),
            });
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= out_len) {
            return Err(BpError::InvalidArgument {
                op: "scatter_add",
                msg: format!("index {bad} out of range for {out_len} slots"),
            });
        }
        let data = {
            let inner = self.tape.inner.borrow();
            let xd = &inner.nodes[self.id].data;
            let mut out = vec![0.0; out_len];
            for (p, &j) in idx.iter().enumerate() {
                out[j] += xd[p];
            }
            out
        };
        let req = self.requires_grad();
        Ok(self
            .tape
            .push(Op::ScatterAdd { x: self.id, idx }, vec![out_len], data, req))
    }

    /// l1-normalize raw affinities `[k*k-1, h, w]` and append the center
    /// weight as the last channel. A pixel whose raw weights sum below 1e-12
    /// falls back to identity propagation (center 1, neighbors 0).
    pub fn normalize_affinity(&self) -> Result<Var> {
        let in_shape = self.shape();
        if in_shape.len() != 3 {
            return Err(BpError::InvalidArgument {
                op: "normalize_affinity",
                msg: format!("expected rank 3, got {in_shape:?}"),
            });
        }
        let (m, h, w) = (in_shape[0], in_shape[1], in_shape[2]);
        let hw = h * w;
        let data = {
            let inner = self.tape.inner.borrow();
            let xd = &inner.nodes[self.id].data;
            let mut out = vec![0.0; (m + 1) * hw];
            for p in 0..hw {
                let s: f64 = (0..m).map(|c| xd[c * hw + p].abs()).sum();
                if s < 1e-12 {
                    out[m * hw + p] = 1.0;
                } else {
                    let mut total = 0.0;
                    for c in 0..m {
                        let v = xd[c * hw + p] / s;
                        out[c * hw + p] = v;
                        total += v;
                    }
                    out[m * hw + p] = 1.0 - total;
                }
            }
            out
        };
        let req = self.requires_grad();
        Ok(self.tape.push(
            Op::NormalizeAffinity {
                x: self.id,
                m,
                hw,
            },
            vec![m + 1, h, w],
            data,
            req,
        ))
    }

    /// One convolutional spatial propagation sweep over `[h, w]` with
    /// normalized affinities `[k*k, h, w]` (center last).
    pub fn cspn_step(&self, kappa: &Var, k: usize) -> Result<Var> {
        if k % 2 == 0 {
            return Err(BpError::InvalidArgument {
                op: "cspn_step",
                msg: format!("kernel size {k} must be odd"),
            });
        }
        let ss = self.shape();
        let sk = kappa.shape();
        if ss.len() != 2 || sk != vec![k * k, ss[0], ss[1]] {
            return Err(BpError::ShapeMismatch {
                op: "cspn_step",
                lhs: ss,
                rhs: sk,
            });
        }
        let (h, w) = (ss[0], ss[1]);
        let data = {
            let inner = self.tape.inner.borrow();
            kernels::cspn_forward(
                &inner.nodes[self.id].data,
                &inner.nodes[kappa.id].data,
                k,
                h,
                w,
            )
        };
        let req = self.requires_grad() || kappa.requires_grad();
        Ok(self.tape.push(
            Op::CspnStep {
                state: self.id,
                kappa: kappa.id,
                k,
                h,
                w,
            },
            vec![h, w],
            data,
            req,
        ))
    }
}
