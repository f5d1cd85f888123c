//! Direct 3D convolution kernels (forward and backward) used by the tape.
//!
//! Layout conventions: inputs are `(C_in, D, H, W)`, weights
//! `(C_out, C_in, K, K, K)`, outputs `(C_out, D', H', W')`, all owned
//! standard-layout arrays. Each depth slab is lowered to a column matrix and
//! multiplied with the flattened weights; reduction order is fixed, so
//! results are reproducible run to run.

use ndarray::linalg::general_mat_mul;
use ndarray::{ArrayD, ArrayView2, ArrayViewMut2, IxDyn};

/// Output spatial extent of a convolution along one axis.
pub fn conv_out_len(input: usize, k: usize, stride: usize, pad: usize) -> usize {
    let span = input + 2 * pad;
    assert!(
        span >= k,
        "convolution kernel {k} larger than padded input {span}"
    );
    (span - k) / stride + 1
}

struct Geom {
    ci: usize,
    co: usize,
    k: usize,
    stride: usize,
    pad: usize,
    din: [usize; 3],
    dout: [usize; 3],
    dpad: [usize; 3],
}

impl Geom {
    fn resolve(x: &ArrayD<f64>, w: &ArrayD<f64>, stride: usize, pad: usize) -> Geom {
        let xs = x.shape();
        let ws = w.shape();
        assert_eq!(xs.len(), 4, "conv input must be (C, D, H, W)");
        assert_eq!(ws.len(), 5, "conv weight must be (Co, Ci, K, K, K)");
        assert_eq!(ws[1], xs[0], "conv channel mismatch");
        assert!(ws[2] == ws[3] && ws[3] == ws[4], "conv kernels are cubic");
        let k = ws[2];
        let din = [xs[1], xs[2], xs[3]];
        let dout = [
            conv_out_len(din[0], k, stride, pad),
            conv_out_len(din[1], k, stride, pad),
            conv_out_len(din[2], k, stride, pad),
        ];
        Geom {
            ci: xs[0],
            co: ws[0],
            k,
            stride,
            pad,
            din,
            dout,
            dpad: [din[0] + 2 * pad, din[1] + 2 * pad, din[2] + 2 * pad],
        }
    }

    fn ick(&self) -> usize {
        self.ci * self.k * self.k * self.k
    }
}

/// Copies the input into a zero-padded buffer.
fn pad_input(x: &ArrayD<f64>, g: &Geom) -> Vec<f64> {
    let [d, h, w] = g.din;
    let [pd, ph, pw] = g.dpad;
    let xs = x.as_slice().expect("conv input is standard layout");
    let mut xp = vec![0.0; g.ci * pd * ph * pw];
    for c in 0..g.ci {
        for z in 0..d {
            for y in 0..h {
                let dst = ((c * pd + z + g.pad) * ph + y + g.pad) * pw + g.pad;
                let src = ((c * d + z) * h + y) * w;
                xp[dst..dst + w].copy_from_slice(&xs[src..src + w]);
            }
        }
    }
    xp
}

/// Lowers one output-depth slab of the padded input into `col`
/// (rows = (ci, kd, kh, kw), cols = (oh, ow)).
fn im2col_slab(xp: &[f64], g: &Geom, od: usize, col: &mut [f64]) {
    let [_, ph, pw] = g.dpad;
    let pd = g.dpad[0];
    let [_, oh, ow] = g.dout;
    let s = g.stride;
    let mut row = 0;
    for c in 0..g.ci {
        for kd in 0..g.k {
            let z = od * s + kd;
            for kh in 0..g.k {
                for kw in 0..g.k {
                    let dst_row = row * oh * ow;
                    for yo in 0..oh {
                        let y = yo * s + kh;
                        let src = ((c * pd + z) * ph + y) * pw + kw;
                        let dst = dst_row + yo * ow;
                        if s == 1 {
                            col[dst..dst + ow].copy_from_slice(&xp[src..src + ow]);
                        } else {
                            for xo in 0..ow {
                                col[dst + xo] = xp[src + xo * s];
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }
}

/// Scatter-adds one column slab back into the padded gradient buffer;
/// exact adjoint of `im2col_slab`.
fn col2im_add_slab(gcol: &[f64], g: &Geom, od: usize, gxp: &mut [f64]) {
    let [pd, ph, pw] = g.dpad;
    let [_, oh, ow] = g.dout;
    let s = g.stride;
    let mut row = 0;
    for c in 0..g.ci {
        for kd in 0..g.k {
            let z = od * s + kd;
            for kh in 0..g.k {
                for kw in 0..g.k {
                    let src_row = row * oh * ow;
                    for yo in 0..oh {
                        let y = yo * s + kh;
                        let dst = ((c * pd + z) * ph + y) * pw + kw;
                        let src = src_row + yo * ow;
                        if s == 1 {
                            for (o, v) in gxp[dst..dst + ow].iter_mut().zip(&gcol[src..src + ow]) {
                                *o += v;
                            }
                        } else {
                            for xo in 0..ow {
                                gxp[dst + xo * s] += gcol[src + xo];
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }
}

pub fn conv3d_forward(
    x: &ArrayD<f64>,
    w: &ArrayD<f64>,
    bias: Option<&ArrayD<f64>>,
    stride: usize,
    pad: usize,
) -> ArrayD<f64> {
    let g = Geom::resolve(x, w, stride, pad);
    let [od, oh, ow] = g.dout;
    let (ick, ohw) = (g.ick(), oh * ow);
    let xp = pad_input(x, &g);
    let w2 = ArrayView2::from_shape((g.co, ick), w.as_slice().unwrap()).unwrap();
    let bs = bias.map(|b| b.as_slice().unwrap());

    let mut out = vec![0.0; g.co * od * ohw];
    let mut col = vec![0.0; ick * ohw];
    let mut slab = vec![0.0; g.co * ohw];
    for odi in 0..od {
        im2col_slab(&xp, &g, odi, &mut col);
        let colv = ArrayView2::from_shape((ick, ohw), &col[..]).unwrap();
        let mut slabv = ArrayViewMut2::from_shape((g.co, ohw), &mut slab[..]).unwrap();
        general_mat_mul(1.0, &w2, &colv, 0.0, &mut slabv);
        for c in 0..g.co {
            let b = bs.map_or(0.0, |bb| bb[c]);
            let dst = (c * od + odi) * ohw;
            for (o, v) in out[dst..dst + ohw].iter_mut().zip(&slab[c * ohw..(c + 1) * ohw]) {
                *o = v + b;
            }
        }
    }
    ArrayD::from_shape_vec(IxDyn(&[g.co, od, oh, ow]), out).unwrap()
}

pub struct ConvGrads {
    pub gx: Option<ArrayD<f64>>,
    pub gw: Option<ArrayD<f64>>,
    pub gb: Option<ArrayD<f64>>,
}

pub fn conv3d_backward(
    x: &ArrayD<f64>,
    w: &ArrayD<f64>,
    gout: &ArrayD<f64>,
    stride: usize,
    pad: usize,
    need_gx: bool,
    need_gw: bool,
    need_gb: bool,
) -> ConvGrads {
    let g = Geom::resolve(x, w, stride, pad);
    let [od, oh, ow] = g.dout;
    let (ick, ohw) = (g.ick(), oh * ow);
    assert_eq!(gout.shape(), &[g.co, od, oh, ow], "conv gout shape");
    let gs = gout.as_slice().unwrap();

    let gb = need_gb.then(|| {
        let per: Vec<f64> = (0..g.co)
            .map(|c| gs[c * od * ohw..(c + 1) * od * ohw].iter().sum())
            .collect();
        ArrayD::from_shape_vec(IxDyn(&[g.co]), per).unwrap()
    });

    if !need_gx && !need_gw {
        return ConvGrads { gx: None, gw: None, gb };
    }

    let xp = pad_input(x, &g);
    let w2 = ArrayView2::from_shape((g.co, ick), w.as_slice().unwrap()).unwrap();
    let mut gw2 = need_gw.then(|| vec![0.0; g.co * ick]);
    let mut gxp = need_gx.then(|| vec![0.0; xp.len()]);

    let mut col = vec![0.0; ick * ohw];
    let mut gcol = vec![0.0; ick * ohw];
    let mut gout_slab = vec![0.0; g.co * ohw];
    for odi in 0..od {
        for c in 0..g.co {
            let src = (c * od + odi) * ohw;
            gout_slab[c * ohw..(c + 1) * ohw].copy_from_slice(&gs[src..src + ohw]);
        }
        let gsl = ArrayView2::from_shape((g.co, ohw), &gout_slab[..]).unwrap();
        if let Some(gw2) = gw2.as_deref_mut() {
            im2col_slab(&xp, &g, odi, &mut col);
            let colv = ArrayView2::from_shape((ick, ohw), &col[..]).unwrap();
            let mut gw2v = ArrayViewMut2::from_shape((g.co, ick), gw2).unwrap();
            general_mat_mul(1.0, &gsl, &colv.t(), 1.0, &mut gw2v);
        }
        if let Some(gxp) = gxp.as_deref_mut() {
            let mut gcolv = ArrayViewMut2::from_shape((ick, ohw), &mut gcol[..]).unwrap();
            general_mat_mul(1.0, &w2.t(), &gsl, 0.0, &mut gcolv);
            col2im_add_slab(&gcol, &g, odi, gxp);
        }
    }

    let gx = gxp.map(|gxp| {
        let [d, h, wd] = g.din;
        let [pd, ph, pw] = g.dpad;
        let mut out = vec![0.0; g.ci * d * h * wd];
        for c in 0..g.ci {
            for z in 0..d {
                for y in 0..h {
                    let src = ((c * pd + z + g.pad) * ph + y + g.pad) * pw + g.pad;
                    let dst = ((c * d + z) * h + y) * wd;
                    out[dst..dst + wd].copy_from_slice(&gxp[src..src + wd]);
                }
            }
        }
        ArrayD::from_shape_vec(IxDyn(&[g.ci, d, h, wd]), out).unwrap()
    });
    let gw = gw2.map(|v| ArrayD::from_shape_vec(IxDyn(w.shape()), v).unwrap());

    ConvGrads { gx, gw, gb }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::IxDyn;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn randn(rng: &mut ChaCha8Rng, shape: &[usize]) -> ArrayD<f64> {
        let n: usize = shape.iter().product();
        let v: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        ArrayD::from_shape_vec(IxDyn(shape), v).unwrap()
    }

    /// Reference convolution: direct six-deep loop, no lowering.
    fn conv_naive(
        x: &ArrayD<f64>,
        w: &ArrayD<f64>,
        b: Option<&ArrayD<f64>>,
        stride: usize,
        pad: usize,
    ) -> ArrayD<f64> {
        let (ci, d, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
        let (co, k) = (w.shape()[0], w.shape()[2]);
        let od = conv_out_len(d, k, stride, pad);
        let oh = conv_out_len(h, k, stride, pad);
        let ow = conv_out_len(wd, k, stride, pad);
        let mut out = ArrayD::zeros(IxDyn(&[co, od, oh, ow]));
        for c in 0..co {
            for zo in 0..od {
                for yo in 0..oh {
                    for xo in 0..ow {
                        let mut acc = b.map_or(0.0, |bb| bb[[c]]);
                        for ic in 0..ci {
                            for kd in 0..k {
                                for kh in 0..k {
                                    for kw in 0..k {
                                        let z = (zo * stride + kd) as isize - pad as isize;
                                        let y = (yo * stride + kh) as isize - pad as isize;
                                        let xx = (xo * stride + kw) as isize - pad as isize;
                                        if z >= 0
                                            && y >= 0
                                            && xx >= 0
                                            && (z as usize) < d
                                            && (y as usize) < h
                                            && (xx as usize) < wd
                                        {
                                            acc += x[[ic, z as usize, y as usize, xx as usize]]
                                                * w[[c, ic, kd, kh, kw]];
                                        }
                                    }
                                }
                            }
                        }
                        out[[c, zo, yo, xo]] = acc;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn forward_matches_naive_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for &(k, s, p) in &[(3usize, 1usize, 1usize), (4, 2, 1), (1, 1, 0), (3, 2, 1)] {
            let x = randn(&mut rng, &[3, 8, 6, 10]);
            let w = randn(&mut rng, &[4, 3, k, k, k]);
            let b = randn(&mut rng, &[4]);
            let fast = conv3d_forward(&x, &w, Some(&b), s, p);
            let slow = conv_naive(&x, &w, Some(&b), s, p);
            let diff = (&fast - &slow).iter().fold(0.0f64, |m, v| m.max(v.abs()));
            assert!(diff < 1e-12, "k={k} s={s} p={p}: max diff {diff}");
        }
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = randn(&mut rng, &[2, 5, 4, 6]);
        let w = randn(&mut rng, &[3, 2, 3, 3, 3]);
        let b = randn(&mut rng, &[3]);
        let (s, p) = (1, 1);
        // Scalar objective: weighted sum of outputs with fixed random weights.
        let proj = randn(&mut rng, conv3d_forward(&x, &w, Some(&b), s, p).shape());
        let loss = |x: &ArrayD<f64>, w: &ArrayD<f64>, b: &ArrayD<f64>| -> f64 {
            (&conv3d_forward(x, w, Some(b), s, p) * &proj).sum()
        };
        let grads = conv3d_backward(&x, &w, &proj, s, p, true, true, true);
        let (gx, gw, gb) = (grads.gx.unwrap(), grads.gw.unwrap(), grads.gb.unwrap());

        let h = 1e-6;
        let mut check = |analytic: f64, num: f64| {
            let denom = analytic.abs().max(num.abs()).max(1e-8);
            assert!(
                ((analytic - num) / denom).abs() < 1e-5,
                "analytic {analytic} vs numeric {num}"
            );
        };
        for _ in 0..20 {
            let i = rng.gen_range(0..x.len());
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp.as_slice_mut().unwrap()[i] += h;
            xm.as_slice_mut().unwrap()[i] -= h;
            check(
                gx.as_slice().unwrap()[i],
                (loss(&xp, &w, &b) - loss(&xm, &w, &b)) / (2.0 * h),
            );
        }
        for _ in 0..20 {
            let i = rng.gen_range(0..w.len());
            let mut wp = w.clone();
            let mut wm = w.clone();
            wp.as_slice_mut().unwrap()[i] += h;
            wm.as_slice_mut().unwrap()[i] -= h;
            check(
                gw.as_slice().unwrap()[i],
                (loss(&x, &wp, &b) - loss(&x, &wm, &b)) / (2.0 * h),
            );
        }
        for i in 0..b.len() {
            let mut bp = b.clone();
            let mut bm = b.clone();
            bp.as_slice_mut().unwrap()[i] += h;
            bm.as_slice_mut().unwrap()[i] -= h;
            check(
                gb.as_slice().unwrap()[i],
                (loss(&x, &w, &bp) - loss(&x, &w, &bm)) / (2.0 * h),
            );
        }
    }
}
