//! Camera intrinsics and inverse projection of depth maps into camera
//! space. Pixel coordinates are integer pixel centers, x along width.

use serde::{Deserialize, Serialize};

use crate::autodiff::Var;
use crate::Result;

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
}

impl CameraIntrinsics {
    /// Intrinsics for scale `s`: all four parameters divided by `2^s`.
    pub fn at_scale(&self, s: usize) -> CameraIntrinsics {
        let f = (1u64 << s) as f64;
        CameraIntrinsics {
            fx: self.fx / f,
            fy: self.fy / f,
            cx: self.cx / f,
            cy: self.cy / f,
        }
    }
}

/// Inverse-project a depth grid `[h, w]` to a `[3, h, w]` camera-space
/// feature: `X = (x-cx)/fx * D`, `Y = (y-cy)/fy * D`, `Z = D`. Zero depth
/// maps to the origin. Differentiable with respect to the depth.
pub fn inverse_project(depth: &Var, intr: &CameraIntrinsics) -> Result<Var> {
    let shape = depth.shape();
    assert_eq!(shape.len(), 2, "inverse_project expects a [h, w] depth grid");
    let (h, w) = (shape[0], shape[1]);
    let tape = depth.clone();
    let mut xcoef = vec![0.0; h * w];
    let mut ycoef = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            xcoef[y * w + x] = (x as f64 - intr.cx) / intr.fx;
            ycoef[y * w + x] = (y as f64 - intr.cy) / intr.fy;
        }
    }
    let d3 = depth.reshape(vec![1, h, w])?;
    let cx = tape_of(&tape).constant(xcoef, vec![1, h, w])?;
    let cy = tape_of(&tape).constant(ycoef, vec![1, h, w])?;
    let xs = d3.mul(&cx)?;
    let ys = d3.mul(&cy)?;
    tape_of(depth).concat(&[&xs, &ys, &d3], 0)
}

/// Plain-data variant for code outside the tape.
pub fn inverse_project_data(
    depth: &[f64],
    h: usize,
    w: usize,
    intr: &CameraIntrinsics,
) -> Vec<f64> {
    let mut out = vec![0.0; 3 * h * w];
    for y in 0..h {
        for x in 0..w {
            let d = depth[y * w + x];
            out[y * w + x] = (x as f64 - intr.cx) / intr.fx * d;
            out[h * w + y * w + x] = (y as f64 - intr.cy) / intr.fy * d;
            out[2 * h * w + y * w + x] = d;
        }
    }
    out
}

fn tape_of(v: &Var) -> crate::autodiff::Tape {
    v.tape_handle()
}

#[cfg(test)]
mod tests {
    use crate::autodiff::Tape;

    use super::*;

    const INTR: CameraIntrinsics = CameraIntrinsics {
        fx: 10.0,
        fy: 20.0,
        cx: 1.5,
        cy: 0.5,
    };

    #[test]
    fn at_scale_halves_all_parameters() {
        let s1 = INTR.at_scale(1);
        assert_eq!((s1.fx, s1.fy, s1.cx, s1.cy), (5.0, 10.0, 0.75, 0.25));
        let s0 = INTR.at_scale(0);
        assert_eq!((s0.fx, s0.cx), (10.0, 1.5));
    }

    #[test]
    fn inverse_project_known_values() {
        let tape = Tape::new();
        let depth = tape
            .leaf(vec![2.0, 0.0, 4.0, 1.0, 3.0, 5.0], vec![2, 3], false)
            .unwrap();
        let out = inverse_project(&depth, &INTR).unwrap();
        assert_eq!(out.shape(), vec![3, 2, 3]);
        let v = out.value();
        // pixel (y 0, x 0), depth 2: X = (0-1.5)/10*2, Y = (0-0.5)/20*2
        assert!((v[0] - (-0.3)).abs() < 1e-12);
        assert!((v[6] - (-0.05)).abs() < 1e-12);
        assert_eq!(v[12], 2.0);
        // zero depth maps to the origin
        assert_eq!((v[1], v[7], v[13]), (0.0, 0.0, 0.0));
    }

    #[test]
    fn var_and_data_variants_agree() {
        let tape = Tape::new();
        let data: Vec<f64> = (0..12).map(|i| 0.5 + i as f64 * 0.3).collect();
        let depth = tape.leaf(data.clone(), vec![3, 4], false).unwrap();
        let a = inverse_project(&depth, &INTR).unwrap().value();
        let b = inverse_project_data(&data, 3, 4, &INTR);
        assert_eq!(a, b);
    }
}
