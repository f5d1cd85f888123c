//! Trilinear 2x upsampling (and its adjoint) for the decoder path.
//!
//! Uses the half-pixel-center convention: output coordinate `i` samples
//! source coordinate `(i + 0.5) / 2 - 0.5`, clamped to the grid.

use ndarray::{ArrayD, IxDyn};

/// Per-axis interpolation table: left index, right index, right weight.
fn axis_table(n_out: usize, n_in: usize) -> Vec<(usize, usize, f64)> {
    (0..n_out)
        .map(|i| {
            let src = ((i as f64 + 0.5) / 2.0 - 0.5).clamp(0.0, (n_in - 1) as f64);
            let i0 = src.floor() as usize;
            let i1 = (i0 + 1).min(n_in - 1);
            (i0, i1, src - i0 as f64)
        })
        .collect()
}

pub fn upsample2x_forward(x: &ArrayD<f64>) -> ArrayD<f64> {
    let s = x.shape();
    assert_eq!(s.len(), 4, "upsample input must be (C, D, H, W)");
    let (c, d, h, w) = (s[0], s[1], s[2], s[3]);
    let (od, oh, ow) = (2 * d, 2 * h, 2 * w);
    let tz = axis_table(od, d);
    let ty = axis_table(oh, h);
    let tx = axis_table(ow, w);
    let xs = x.as_slice().unwrap();
    let mut out = vec![0.0; c * od * oh * ow];
    for ci in 0..c {
        let base_in = ci * d * h * w;
        for (zo, &(z0, z1, wz)) in tz.iter().enumerate() {
            for (yo, &(y0, y1, wy)) in ty.iter().enumerate() {
                let dst = ((ci * od + zo) * oh + yo) * ow;
                for (xo, &(x0, x1, wx)) in tx.iter().enumerate() {
                    let f = |z: usize, y: usize, xx: usize| xs[base_in + (z * h + y) * w + xx];
                    let c00 = f(z0, y0, x0) * (1.0 - wx) + f(z0, y0, x1) * wx;
                    let c01 = f(z0, y1, x0) * (1.0 - wx) + f(z0, y1, x1) * wx;
                    let c10 = f(z1, y0, x0) * (1.0 - wx) + f(z1, y0, x1) * wx;
                    let c11 = f(z1, y1, x0) * (1.0 - wx) + f(z1, y1, x1) * wx;
                    let c0 = c00 * (1.0 - wy) + c01 * wy;
                    let c1 = c10 * (1.0 - wy) + c11 * wy;
                    out[dst + xo] = c0 * (1.0 - wz) + c1 * wz;
                }
            }
        }
    }
    ArrayD::from_shape_vec(IxDyn(&[c, od, oh, ow]), out).unwrap()
}

pub fn upsample2x_backward(in_shape: &[usize], gout: &ArrayD<f64>) -> ArrayD<f64> {
    let (c, d, h, w) = (in_shape[0], in_shape[1], in_shape[2], in_shape[3]);
    let (od, oh, ow) = (2 * d, 2 * h, 2 * w);
    assert_eq!(gout.shape(), &[c, od, oh, ow], "upsample gout shape");
    let tz = axis_table(od, d);
    let ty = axis_table(oh, h);
    let tx = axis_table(ow, w);
    let gs = gout.as_slice().unwrap();
    let mut gx = vec![0.0; c * d * h * w];
    for ci in 0..c {
        let base_in = ci * d * h * w;
        for (zo, &(z0, z1, wz)) in tz.iter().enumerate() {
            for (yo, &(y0, y1, wy)) in ty.iter().enumerate() {
                let src = ((ci * od + zo) * oh + yo) * ow;
                for (xo, &(x0, x1, wx)) in tx.iter().enumerate() {
                    let g = gs[src + xo];
                    let mut add = |z: usize, y: usize, xx: usize, wgt: f64| {
                        gx[base_in + (z * h + y) * w + xx] += g * wgt;
                    };
                    add(z0, y0, x0, (1.0 - wz) * (1.0 - wy) * (1.0 - wx));
                    add(z0, y0, x1, (1.0 - wz) * (1.0 - wy) * wx);
                    add(z0, y1, x0, (1.0 - wz) * wy * (1.0 - wx));
                    add(z0, y1, x1, (1.0 - wz) * wy * wx);
                    add(z1, y0, x0, wz * (1.0 - wy) * (1.0 - wx));
                    add(z1, y0, x1, wz * (1.0 - wy) * wx);
                    add(z1, y1, x0, wz * wy * (1.0 - wx));
                    add(z1, y1, x1, wz * wy * wx);
                }
            }
        }
    }
    ArrayD::from_shape_vec(IxDyn(&[c, d, h, w]), gx).unwrap()
}
