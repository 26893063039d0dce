//! Per-image compute kernels, directly evaluated. Inputs are HWC slices.

use super::{pad_before, Padding, Shape3};

struct Geometry {
    in_shape: Shape3,
    out_shape: Shape3,
    kh: usize,
    kw: usize,
    stride: usize,
    pad_top: usize,
    pad_left: usize,
}

impl Geometry {
    fn new(in_shape: Shape3, out_shape: Shape3, kh: usize, kw: usize, stride: usize, padding: Padding) -> Self {
        Geometry {
            in_shape,
            out_shape,
            kh,
            kw,
            stride,
            pad_top: pad_before(in_shape[0], out_shape[0], kh, stride, padding),
            pad_left: pad_before(in_shape[1], out_shape[1], kw, stride, padding),
        }
    }

    /// Calls `f(out_pixel, in_pixel, ky, kx)` for every in-bounds tap.
    #[inline]
    fn taps(&self, mut f: impl FnMut(usize, usize, usize, usize)) {
        let [h, w, _] = self.in_shape;
        let [oh, ow, _] = self.out_shape;
        for oy in 0..oh {
            for ox in 0..ow {
                let op = oy * ow + ox;
                for ky in 0..self.kh {
                    let iy = (oy * self.stride + ky) as isize - self.pad_top as isize;
                    if iy < 0 || iy as usize >= h {
                        continue;
                    }
                    for kx in 0..self.kw {
                        let ix = (ox * self.stride + kx) as isize - self.pad_left as isize;
                        if ix < 0 || ix as usize >= w {
                            continue;
                        }
                        f(op, iy as usize * w + ix as usize, ky, kx);
                    }
                }
            }
        }
    }
}

pub(super) fn conv2d(
    x: &[f64],
    in_shape: Shape3,
    kernel: &[f64],
    kshape: &[usize],
    stride: usize,
    padding: Padding,
    out_shape: Shape3,
) -> Vec<f64> {
    let (kh, kw, cin, cout) = (kshape[0], kshape[1], kshape[2], kshape[3]);
    let geo = Geometry::new(in_shape, out_shape, kh, kw, stride, padding);
    let mut out = vec![0.0; out_shape.iter().product()];
    geo.taps(|op, ip, ky, kx| {
        let acc = &mut out[op * cout..(op + 1) * cout];
        for ci in 0..cin {
            let xv = x[ip * cin + ci];
            let row = ((ky * kw + kx) * cin + ci) * cout;
            for (a, wv) in acc.iter_mut().zip(&kernel[row..row + cout]) {
                *a += xv * wv;
            }
        }
    });
    out
}

pub(super) fn conv2d_input_grad(
    g: &[f64],
    in_shape: Shape3,
    kernel: &[f64],
    kshape: &[usize],
    stride: usize,
    padding: Padding,
    out_shape: Shape3,
    gx: &mut [f64],
) {
    let (kh, kw, cin, cout) = (kshape[0], kshape[1], kshape[2], kshape[3]);
    let geo = Geometry::new(in_shape, out_shape, kh, kw, stride, padding);
    geo.taps(|op, ip, ky, kx| {
        let go = &g[op * cout..(op + 1) * cout];
        for ci in 0..cin {
            let row = ((ky * kw + kx) * cin + ci) * cout;
            let s: f64 = go.iter().zip(&kernel[row..row + cout]).map(|(a, b)| a * b).sum();
            gx[ip * cin + ci] += s;
        }
    });
}

pub(super) fn depthwise(
    x: &[f64],
    in_shape: Shape3,
    kernel: &[f64],
    kshape: &[usize],
    stride: usize,
    padding: Padding,
    out_shape: Shape3,
) -> Vec<f64> {
    let (kh, kw, c) = (kshape[0], kshape[1], kshape[2]);
    let geo = Geometry::new(in_shape, out_shape, kh, kw, stride, padding);
    let mut out = vec![0.0; out_shape.iter().product()];
    geo.taps(|op, ip, ky, kx| {
        let row = (ky * kw + kx) * c;
        for ch in 0..c {
            out[op * c + ch] += x[ip * c + ch] * kernel[row + ch];
        }
    });
    out
}

pub(super) fn depthwise_input_grad(
    g: &[f64],
    in_shape: Shape3,
    kernel: &[f64],
    kshape: &[usize],
    stride: usize,
    padding: Padding,
    out_shape: Shape3,
    gx: &mut [f64],
) {
    let (kh, kw, c) = (kshape[0], kshape[1], kshape[2]);
    let geo = Geometry::new(in_shape, out_shape, kh, kw, stride, padding);
    geo.taps(|op, ip, ky, kx| {
        let row = (ky * kw + kx) * c;
        for ch in 0..c {
            gx[ip * c + ch] += g[op * c + ch] * kernel[row + ch];
        }
    });
}

pub(super) fn dense(x: &[f64], kernel: &[f64], fout: usize) -> Vec<f64> {
    let mut out = vec![0.0; fout];
    for (i, xv) in x.iter().enumerate() {
        for (a, wv) in out.iter_mut().zip(&kernel[i * fout..(i + 1) * fout]) {
            *a += xv * wv;
        }
    }
    out
}

pub(super) fn dense_input_grad(g: &[f64], kernel: &[f64], gx: &mut [f64]) {
    let fout = g.len();
    for (i, gi) in gx.iter_mut().enumerate() {
        *gi += g.iter().zip(&kernel[i * fout..(i + 1) * fout]).map(|(a, b)| a * b).sum::<f64>();
    }
}

fn pool_geometry(in_shape: Shape3, out_shape: Shape3, window: Option<[usize; 2]>, stride: usize) -> Geometry {
    let [ph, pw] = window.unwrap_or([in_shape[0], in_shape[1]]);
    Geometry::new(in_shape, out_shape, ph, pw, stride, Padding::Valid)
}

pub(super) fn avg_pool(
    x: &[f64],
    in_shape: Shape3,
    window: Option<[usize; 2]>,
    stride: usize,
    out_shape: Shape3,
) -> Vec<f64> {
    let c = in_shape[2];
    let geo = pool_geometry(in_shape, out_shape, window, stride);
    let norm = 1.0 / (geo.kh * geo.kw) as f64;
    let mut out = vec![0.0; out_shape.iter().product()];
    geo.taps(|op, ip, _, _| {
        for ch in 0..c {
            out[op * c + ch] += x[ip * c + ch];
        }
    });
    out.iter_mut().for_each(|v| *v *= norm);
    out
}

pub(super) fn avg_pool_input_grad(
    g: &[f64],
    in_shape: Shape3,
    window: Option<[usize; 2]>,
    stride: usize,
    out_shape: Shape3,
    gx: &mut [f64],
) {
    let c = in_shape[2];
    let geo = pool_geometry(in_shape, out_shape, window, stride);
    let norm = 1.0 / (geo.kh * geo.kw) as f64;
    geo.taps(|op, ip, _, _| {
        for ch in 0..c {
            gx[ip * c + ch] += g[op * c + ch] * norm;
        }
    });
}

/// Channel-axis concatenation of HWC slices with equal spatial extents.
pub(super) fn concat(parts: &[(&[f64], usize)], pixels: usize) -> Vec<f64> {
    let total: usize = parts.iter().map(|p| p.1).sum();
    let mut out = Vec::with_capacity(pixels * total);
    for p in 0..pixels {
        for (x, c) in parts {
            out.extend_from_slice(&x[p * c..(p + 1) * c]);
        }
    }
    out
}
