//! Plain numeric kernels shared by the tape ops. Each output element is
//! computed by an independent summation loop so the parallel and sequential
//! builds produce bitwise-identical results.

use crate::parallel::{par_fill_chunks, par_map};

pub fn conv2d_out_dim(n: usize, k: usize, stride: usize, pad: usize) -> usize {
    (n + 2 * pad - k) / stride + 1
}

#[allow(clippy::too_many_arguments)]
pub fn conv2d_forward(
    x: &[f64],
    w: &[f64],
    b: &[f64],
    cin: usize,
    h: usize,
    wid: usize,
    cout: usize,
    k: usize,
    stride: usize,
    pad: usize,
) -> Vec<f64> {
    let oh = conv2d_out_dim(h, k, stride, pad);
    let ow = conv2d_out_dim(wid, k, stride, pad);
    let mut out = vec![0.0; cout * oh * ow];
    par_fill_chunks(&mut out, oh * ow, |co, plane| {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = b[co];
                for ci in 0..cin {
                    for ky in 0..k {
                        let iy = (oy * stride + ky) as isize - pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..k {
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if ix < 0 || ix >= wid as isize {
                                continue;
                            }
                            acc += w[((co * cin + ci) * k + ky) * k + kx]
                                * x[(ci * h + iy as usize) * wid + ix as usize];
                        }
                    }
                }
                plane[oy * ow + ox] = acc;
            }
        }
    });
    out
}

/// Returns (grad_x, grad_w, grad_b).
#[allow(clippy::too_many_arguments)]
pub fn conv2d_backward(
    gout: &[f64],
    x: &[f64],
    w: &[f64],
    cin: usize,
    h: usize,
    wid: usize,
    cout: usize,
    k: usize,
    stride: usize,
    pad: usize,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let oh = conv2d_out_dim(h, k, stride, pad);
    let ow = conv2d_out_dim(wid, k, stride, pad);
    let mut gx = vec![0.0; cin * h * wid];
    par_fill_chunks(&mut gx, h * wid, |ci, plane| {
        for iy in 0..h {
            for ix in 0..wid {
                let mut acc = 0.0;
                for co in 0..cout {
                    for ky in 0..k {
                        let num_y = iy as isize + pad as isize - ky as isize;
                        if num_y < 0 || num_y % stride as isize != 0 {
                            continue;
                        }
                        let oy = (num_y / stride as isize) as usize;
                        if oy >= oh {
                            continue;
                        }
                        for kx in 0..k {
                            let num_x = ix as isize + pad as isize - kx as isize;
                            if num_x < 0 || num_x % stride as isize != 0 {
                                continue;
                            }
                            let ox = (num_x / stride as isize) as usize;
                            if ox >= ow {
                                continue;
                            }
                            acc += gout[(co * oh + oy) * ow + ox]
                                * w[((co * cin + ci) * k + ky) * k + kx];
                        }
                    }
                }
                plane[iy * wid + ix] = acc;
            }
        }
    });
    let mut gw = vec![0.0; cout * cin * k * k];
    par_fill_chunks(&mut gw, cin * k * k, |co, chunk| {
        for ci in 0..cin {
            for ky in 0..k {
                for kx in 0..k {
                    let mut acc = 0.0;
                    for oy in 0..oh {
                        let iy = (oy * stride + ky) as isize - pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for ox in 0..ow {
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if ix < 0 || ix >= wid as isize {
                                continue;
                            }
                            acc += gout[(co * oh + oy) * ow + ox]
                                * x[(ci * h + iy as usize) * wid + ix as usize];
                        }
                    }
                    chunk[(ci * k + ky) * k + kx] = acc;
                }
            }
        }
    });
    let gb = par_map(cout, |co| gout[co * oh * ow..(co + 1) * oh * ow].iter().sum());
    (gx, gw, gb)
}

#[allow(clippy::too_many_arguments)]
pub fn deconv2d_forward(
    x: &[f64],
    w: &[f64],
    b: &[f64],
    cin: usize,
    h: usize,
    wid: usize,
    cout: usize,
    k: usize,
    stride: usize,
) -> Vec<f64> {
    let oh = (h - 1) * stride + k;
    let ow = (wid - 1) * stride + k;
    let mut out = vec![0.0; cout * oh * ow];
    par_fill_chunks(&mut out, oh * ow, |co, plane| {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = b[co];
                for ky in 0..k {
                    if oy < ky || (oy - ky) % stride != 0 {
                        continue;
                    }
                    let iy = (oy - ky) / stride;
                    if iy >= h {
                        continue;
                    }
                    for kx in 0..k {
                        if ox < kx || (ox - kx) % stride != 0 {
                            continue;
                        }
                        let ix = (ox - kx) / stride;
                        if ix >= wid {
                            continue;
                        }
                        for ci in 0..cin {
                            acc += w[((ci * cout + co) * k + ky) * k + kx]
                                * x[(ci * h + iy) * wid + ix];
                        }
                    }
                }
                plane[oy * ow + ox] = acc;
            }
        }
    });
    out
}

#[allow(clippy::too_many_arguments)]
pub fn deconv2d_backward(
    gout: &[f64],
    x: &[f64],
    w: &[f64],
    cin: usize,
    h: usize,
    wid: usize,
    cout: usize,
    k: usize,
    stride: usize,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let oh = (h - 1) * stride + k;
    let ow = (wid - 1) * stride + k;
    let mut gx = vec![0.0; cin * h * wid];
    par_fill_chunks(&mut gx, h * wid, |ci, plane| {
        for iy in 0..h {
            for ix in 0..wid {
                let mut acc = 0.0;
                for co in 0..cout {
                    for ky in 0..k {
                        for kx in 0..k {
                            let oy = iy * stride + ky;
                            let ox = ix * stride + kx;
                            acc += gout[(co * oh + oy) * ow + ox]
                                * w[((ci * cout + co) * k + ky) * k + kx];
                        }
                    }
                }
                plane[iy * wid + ix] = acc;
            }
        }
    });
    let mut gw = vec![0.0; cin * cout * k * k];
    par_fill_chunks(&mut gw, cout * k * k, |ci, chunk| {
        for co in 0..cout {
            for ky in 0..k {
                for kx in 0..k {
                    let mut acc = 0.0;
                    for iy in 0..h {
                        for ix in 0..wid {
                            acc += x[(ci * h + iy) * wid + ix]
                                * gout[(co * oh + iy * stride + ky) * ow + ix * stride + kx];
                        }
                    }
                    chunk[(co * k + ky) * k + kx] = acc;
                }
            }
        }
    });
    let gb = par_map(cout, |co| gout[co * oh * ow..(co + 1) * oh * ow].iter().sum());
    (gx, gw, gb)
}

/// Clamped source coordinate and lerp weight for one upsampled index.
fn bilinear_src(o: usize, factor: usize, n: usize) -> (usize, usize, f64) {
    let s = (o as f64 + 0.5) / factor as f64 - 0.5;
    let s = s.clamp(0.0, (n - 1) as f64);
    let i0 = s.floor() as usize;
    let i1 = (i0 + 1).min(n - 1);
    (i0, i1, s - i0 as f64)
}

pub fn bilinear_upsample_forward(
    x: &[f64],
    ch: usize,
    h: usize,
    w: usize,
    factor: usize,
) -> Vec<f64> {
    let oh = h * factor;
    let ow = w * factor;
    let mut out = vec![0.0; ch * oh * ow];
    par_fill_chunks(&mut out, oh * ow, |c, plane| {
        for oy in 0..oh {
            let (y0, y1, fy) = bilinear_src(oy, factor, h);
            for ox in 0..ow {
                let (x0, x1, fx) = bilinear_src(ox, factor, w);
                let v00 = x[(c * h + y0) * w + x0];
                let v01 = x[(c * h + y0) * w + x1];
                let v10 = x[(c * h + y1) * w + x0];
                let v11 = x[(c * h + y1) * w + x1];
                plane[oy * ow + ox] = v00 * (1.0 - fy) * (1.0 - fx)
                    + v01 * (1.0 - fy) * fx
                    + v10 * fy * (1.0 - fx)
                    + v11 * fy * fx;
            }
        }
    });
    out
}

pub fn bilinear_upsample_backward(
    gout: &[f64],
    ch: usize,
    h: usize,
    w: usize,
    factor: usize,
) -> Vec<f64> {
    let oh = h * factor;
    let ow = w * factor;
    let mut gx = vec![0.0; ch * h * w];
    for c in 0..ch {
        for oy in 0..oh {
            let (y0, y1, fy) = bilinear_src(oy, factor, h);
            for ox in 0..ow {
                let (x0, x1, fx) = bilinear_src(ox, factor, w);
                let g = gout[(c * oh + oy) * ow + ox];
                gx[(c * h + y0) * w + x0] += g * (1.0 - fy) * (1.0 - fx);
                gx[(c * h + y0) * w + x1] += g * (1.0 - fy) * fx;
                gx[(c * h + y1) * w + x0] += g * fy * (1.0 - fx);
                gx[(c * h + y1) * w + x1] += g * fy * fx;
            }
        }
    }
    gx
}

/// One synchronous propagation sweep. `kappa` has `k*k` channels per pixel:
/// the k*k-1 neighbor weights in row-major window order followed by the
/// center weight. Out-of-image neighbors contribute the center value, which
/// keeps constant fields exact at borders.
pub fn cspn_forward(state: &[f64], kappa: &[f64], k: usize, h: usize, w: usize) -> Vec<f64> {
    let hw = h * w;
    let r = (k / 2) as isize;
    let mut out = vec![0.0; hw];
    par_fill_chunks(&mut out, w, |y, row| {
        for x in 0..w {
            let i = y * w + x;
            let center = state[i];
            let mut acc = kappa[(k * k - 1) * hw + i] * center;
            let mut c = 0;
            for dy in -r..=r {
                for dx in -r..=r {
                    if dy == 0 && dx == 0 {
                        continue;
                    }
                    let ny = y as isize + dy;
                    let nx = x as isize + dx;
                    let kap = kappa[c * hw + i];
                    if ny >= 0 && ny < h as isize && nx >= 0 && nx < w as isize {
                        acc += kap * state[(ny as usize) * w + nx as usize];
                    } else {
                        acc += kap * center;
                    }
                    c += 1;
                }
            }
            row[x] = acc;
        }
    });
    out
}

/// Returns (grad_state, grad_kappa).
pub fn cspn_backward(
    gout: &[f64],
    state: &[f64],
    kappa: &[f64],
    k: usize,
    h: usize,
    w: usize,
) -> (Vec<f64>, Vec<f64>) {
    let hw = h * w;
    let r = (k / 2) as isize;
    // grad wrt state: gather over the pixels whose window covers this one.
    let mut gstate = vec![0.0; hw];
    par_fill_chunks(&mut gstate, w, |y, row| {
        for x in 0..w {
            let i = y * w + x;
            let mut acc = gout[i] * kappa[(k * k - 1) * hw + i];
            // contributions where i is an in-bounds neighbor of pixel p
            let mut c = 0;
            for dy in -r..=r {
                for dx in -r..=r {
                    if dy == 0 && dx == 0 {
                        continue;
                    }
                    let py = y as isize - dy;
                    let px = x as isize - dx;
                    if py >= 0 && py < h as isize && px >= 0 && px < w as isize {
                        let p = (py as usize) * w + px as usize;
                        acc += gout[p] * kappa[c * hw + p];
                    }
                    c += 1;
                }
            }
            // out-of-image neighbors of i fall back to the center value
            let mut c2 = 0;
            for dy in -r..=r {
                for dx in -r..=r {
                    if dy == 0 && dx == 0 {
                        continue;
                    }
                    let ny = y as isize + dy;
                    let nx = x as isize + dx;
                    if ny < 0 || ny >= h as isize || nx < 0 || nx >= w as isize {
                        acc += gout[i] * kappa[c2 * hw + i];
                    }
                    c2 += 1;
                }
            }
            row[x] = acc;
        }
    });
    let mut gkappa = vec![0.0; k * k * hw];
    par_fill_chunks(&mut gkappa, hw, |c, plane| {
        if c == k * k - 1 {
            for i in 0..hw {
                plane[i] = gout[i] * state[i];
            }
            return;
        }
        // channel -> offset (row-major excluding center)
        let idx = c;
        let mut cc = 0;
        let mut offy = 0isize;
        let mut offx = 0isize;
        'outer: for dy in -r..=r {
            for dx in -r..=r {
                if dy == 0 && dx == 0 {
                    continue;
                }
                if cc == idx {
                    offy = dy;
                    offx = dx;
                    break 'outer;
                }
                cc += 1;
            }
        }
        for y in 0..h {
            for x in 0..w {
                let i = y * w + x;
                let ny = y as isize + offy;
                let nx = x as isize + offx;
                let v = if ny >= 0 && ny < h as isize && nx >= 0 && nx < w as isize {
                    state[(ny as usize) * w + nx as usize]
                } else {
                    state[i]
                };
                plane[i] = gout[i] * v;
            }
        }
    });
    (gstate, gkappa)
}

/// GeLU (tanh approximation) value and derivative.
pub fn gelu(x: f64) -> (f64, f64) {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    let x3 = x * x * x;
    let inner = C * (x + 0.044715 * x3);
    let t = inner.tanh();
    let sech2 = 1.0 - t * t;
    let d_inner = C * (1.0 + 3.0 * 0.044715 * x * x);
    let val = 0.5 * x * (1.0 + t);
    let der = 0.5 * (1.0 + t) + 0.5 * x * sech2 * d_inner;
    (val, der)
}
