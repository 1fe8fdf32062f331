//! Spatial kernels: im2col convolution, pooling, upsampling, bilinear resize.
//!
//! All functions take NCHW `f32` tensors in standard layout. The convolution
//! lowers each image to a `(C*kh*kw, P)` column matrix and runs one matrix
//! product per image, which keeps the hot loop inside `matrixmultiply`.

use ndarray::{Array1, Array2, Array4, ArrayView2, ArrayView4, ArrayViewMut4, Axis};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvSpec {
    pub stride: usize,
    pub pad: usize,
}

pub fn conv_out_side(input: usize, k: usize, spec: ConvSpec) -> usize {
    (input + 2 * spec.pad - k) / spec.stride + 1
}

/// Lower one image (C,H,W) into columns (C*kh*kw, P) for the given geometry.
fn im2col(
    x: &[f32],
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    spec: ConvSpec,
    col: &mut [f32],
) {
    let oh = (h + 2 * spec.pad - kh) / spec.stride + 1;
    let ow = (w + 2 * spec.pad - kw) / spec.stride + 1;
    let p = oh * ow;
    let mut row = 0usize;
    for ci in 0..c {
        let plane = &x[ci * h * w..(ci + 1) * h * w];
        for ky in 0..kh {
            for kx in 0..kw {
                let dst = &mut col[row * p..(row + 1) * p];
                let mut i = 0usize;
                for oy in 0..oh {
                    let sy = (oy * spec.stride + ky) as isize - spec.pad as isize;
                    if sy < 0 || sy >= h as isize {
                        for _ in 0..ow {
                            dst[i] = 0.0;
                            i += 1;
                        }
                        continue;
                    }
                    let src_row = &plane[sy as usize * w..(sy as usize + 1) * w];
                    for ox in 0..ow {
                        let sx = (ox * spec.stride + kx) as isize - spec.pad as isize;
                        dst[i] = if sx < 0 || sx >= w as isize {
                            0.0
                        } else {
                            src_row[sx as usize]
                        };
                        i += 1;
                    }
                }
                row += 1;
            }
        }
    }
}

/// Scatter columns (C*kh*kw, P) back into an image gradient (C,H,W).
fn col2im(
    col: &[f32],
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    spec: ConvSpec,
    x: &mut [f32],
) {
    let oh = (h + 2 * spec.pad - kh) / spec.stride + 1;
    let ow = (w + 2 * spec.pad - kw) / spec.stride + 1;
    let p = oh * ow;
    let mut row = 0usize;
    for ci in 0..c {
        let plane = &mut x[ci * h * w..(ci + 1) * h * w];
        for ky in 0..kh {
            for kx in 0..kw {
                let src = &col[row * p..(row + 1) * p];
                let mut i = 0usize;
                for oy in 0..oh {
                    let sy = (oy * spec.stride + ky) as isize - spec.pad as isize;
                    if sy < 0 || sy >= h as isize {
                        i += ow;
                        continue;
                    }
                    let dst_row = &mut plane[sy as usize * w..(sy as usize + 1) * w];
                    for ox in 0..ow {
                        let sx = (ox * spec.stride + kx) as isize - spec.pad as isize;
                        if sx >= 0 && sx < w as isize {
                            dst_row[sx as usize] += src[i];
                        }
                        i += 1;
                    }
                }
                row += 1;
            }
        }
    }
}

/// Convolution forward. `x`: (N,C,H,W), `w`: (Cout,C,kh,kw), bias: (Cout).
pub fn conv2d(
    x: &ArrayView4<f32>,
    w: &ArrayView4<f32>,
    bias: Option<&Array1<f32>>,
    spec: ConvSpec,
) -> Array4<f32> {
    let (n, c, h, wd) = x.dim();
    let (cout, cin, kh, kw) = w.dim();
    assert_eq!(c, cin, "conv2d channel mismatch");
    let oh = conv_out_side(h, kh, spec);
    let ow = conv_out_side(wd, kw, spec);
    let k = cin * kh * kw;
    let p = oh * ow;

    let w2 = w.to_shape((cout, k)).unwrap();
    let xs = x.as_slice().expect("conv2d input must be standard layout");
    let mut out = Array4::<f32>::zeros((n, cout, oh, ow));
    let mut col = vec![0.0f32; k * p];
    for i in 0..n {
        im2col(&xs[i * c * h * wd..(i + 1) * c * h * wd], c, h, wd, kh, kw, spec, &mut col);
        let colm = ArrayView2::from_shape((k, p), &col).unwrap();
        let prod = w2.dot(&colm); // (Cout, P)
        let mut oi = out.index_axis_mut(Axis(0), i);
        let os = oi.as_slice_mut().unwrap();
        os.copy_from_slice(prod.as_slice().unwrap());
    }
    if let Some(b) = bias {
        for i in 0..n {
            for co in 0..cout {
                let bv = b[co];
                out.index_axis_mut(Axis(0), i)
                    .index_axis_mut(Axis(0), co)
                    .mapv_inplace(|v| v + bv);
            }
        }
    }
    out
}

/// Convolution backward: gradients w.r.t. input, weight, and bias.
pub fn conv2d_backward(
    x: &ArrayView4<f32>,
    w: &ArrayView4<f32>,
    grad_out: &ArrayView4<f32>,
    spec: ConvSpec,
    need_dx: bool,
) -> (Option<Array4<f32>>, Array4<f32>, Array1<f32>) {
    let (n, c, h, wd) = x.dim();
    let (cout, cin, kh, kw) = w.dim();
    let (_, _, oh, ow) = grad_out.dim();
    let k = cin * kh * kw;
    let p = oh * ow;

    let w2 = w.to_shape((cout, k)).unwrap();
    let xs = x.as_slice().unwrap();
    let gs = grad_out.as_slice().unwrap();

    let mut dw = Array2::<f32>::zeros((cout, k));
    let mut db = Array1::<f32>::zeros(cout);
    let mut dx = if need_dx {
        Some(Array4::<f32>::zeros((n, c, h, wd)))
    } else {
        None
    };
    let mut col = vec![0.0f32; k * p];
    for i in 0..n {
        let g_i = ArrayView2::from_shape((cout, p), &gs[i * cout * p..(i + 1) * cout * p]).unwrap();
        // weight gradient needs the forward columns again
        im2col(&xs[i * c * h * wd..(i + 1) * c * h * wd], c, h, wd, kh, kw, spec, &mut col);
        let colm = ArrayView2::from_shape((k, p), &col).unwrap();
        dw += &g_i.dot(&colm.t());
        db += &g_i.sum_axis(Axis(1));
        if let Some(dx) = dx.as_mut() {
            let dcol = w2.t().dot(&g_i); // (K, P)
            let mut dxi = dx.index_axis_mut(Axis(0), i);
            col2im(
                dcol.as_slice().unwrap(),
                c,
                h,
                wd,
                kh,
                kw,
                spec,
                dxi.as_slice_mut().unwrap(),
            );
        }
    }
    let dw4 = dw.into_shape_with_order((cout, cin, kh, kw)).unwrap();
    (dx, dw4, db)
}

/// Max pooling forward; returns output and flat argmax indices into each
/// input image plane (for the backward scatter).
pub fn maxpool2d(
    x: &ArrayView4<f32>,
    k: usize,
    spec: ConvSpec,
) -> (Array4<f32>, Vec<u32>) {
    let (n, c, h, w) = x.dim();
    let oh = conv_out_side(h, k, spec);
    let ow = conv_out_side(w, k, spec);
    let xs = x.as_slice().unwrap();
    let mut out = Array4::<f32>::zeros((n, c, oh, ow));
    let os = out.as_slice_mut().unwrap();
    let mut arg = vec![0u32; n * c * oh * ow];
    let mut oi = 0usize;
    for i in 0..n {
        for ci in 0..c {
            let plane = &xs[(i * c + ci) * h * w..(i * c + ci + 1) * h * w];
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = f32::NEG_INFINITY;
                    let mut best_idx = 0usize;
                    for ky in 0..k {
                        let sy = (oy * spec.stride + ky) as isize - spec.pad as isize;
                        if sy < 0 || sy >= h as isize {
                            continue;
                        }
                        for kx in 0..k {
                            let sx = (ox * spec.stride + kx) as isize - spec.pad as isize;
                            if sx < 0 || sx >= w as isize {
                                continue;
                            }
                            let v = plane[sy as usize * w + sx as usize];
                            if v > best {
                                best = v;
                                best_idx = sy as usize * w + sx as usize;
                            }
                        }
                    }
                    os[oi] = best;
                    arg[oi] = best_idx as u32;
                    oi += 1;
                }
            }
        }
    }
    (out, arg)
}

pub fn maxpool2d_backward(
    grad_out: &ArrayView4<f32>,
    arg: &[u32],
    in_dim: (usize, usize, usize, usize),
) -> Array4<f32> {
    let (n, c, h, w) = in_dim;
    let mut dx = Array4::<f32>::zeros((n, c, h, w));
    let dxs = dx.as_slice_mut().unwrap();
    let gs = grad_out.as_slice().unwrap();
    let per_plane_out = gs.len() / (n * c);
    for pi in 0..n * c {
        let base = pi * h * w;
        for j in 0..per_plane_out {
            let gi = pi * per_plane_out + j;
            dxs[base + arg[gi] as usize] += gs[gi];
        }
    }
    dx
}

/// Global average pool (N,C,H,W) -> (N,C).
pub fn global_avgpool(x: &ArrayView4<f32>) -> Array2<f32> {
    let (n, c, h, w) = x.dim();
    let scale = 1.0 / (h * w) as f32;
    let mut out = Array2::<f32>::zeros((n, c));
    for i in 0..n {
        for ci in 0..c {
            out[[i, ci]] = x
                .index_axis(Axis(0), i)
                .index_axis(Axis(0), ci)
                .sum()
                * scale;
        }
    }
    out
}

pub fn global_avgpool_backward(
    grad_out: &ArrayView2<f32>,
    in_dim: (usize, usize, usize, usize),
) -> Array4<f32> {
    let (n, c, h, w) = in_dim;
    let scale = 1.0 / (h * w) as f32;
    let mut dx = Array4::<f32>::zeros((n, c, h, w));
    for i in 0..n {
        for ci in 0..c {
            let g = grad_out[[i, ci]] * scale;
            dx.index_axis_mut(Axis(0), i)
                .index_axis_mut(Axis(0), ci)
                .fill(g);
        }
    }
    dx
}

/// Nearest-neighbour 2x upsample.
pub fn upsample_nearest2(x: &ArrayView4<f32>) -> Array4<f32> {
    let (n, c, h, w) = x.dim();
    let mut out = Array4::<f32>::zeros((n, c, h * 2, w * 2));
    for i in 0..n {
        for ci in 0..c {
            let src = x.index_axis(Axis(0), i);
            let src = src.index_axis(Axis(0), ci);
            let mut dst = out.index_axis_mut(Axis(0), i);
            let mut dst = dst.index_axis_mut(Axis(0), ci);
            for y in 0..h * 2 {
                for xx in 0..w * 2 {
                    dst[[y, xx]] = src[[y / 2, xx / 2]];
                }
            }
        }
    }
    out
}

pub fn upsample_nearest2_backward(grad_out: &ArrayView4<f32>) -> Array4<f32> {
    let (n, c, oh, ow) = grad_out.dim();
    let (h, w) = (oh / 2, ow / 2);
    let mut dx = Array4::<f32>::zeros((n, c, h, w));
    for i in 0..n {
        for ci in 0..c {
            let src = grad_out.index_axis(Axis(0), i);
            let src = src.index_axis(Axis(0), ci);
            let mut dst = dx.index_axis_mut(Axis(0), i);
            let mut dst = dst.index_axis_mut(Axis(0), ci);
            for y in 0..oh {
                for xx in 0..ow {
                    dst[[y / 2, xx / 2]] += src[[y, xx]];
                }
            }
        }
    }
    dx
}

/// Per-output-pixel source taps for a bilinear resize (half-pixel centers).
pub struct BilinearTaps {
    pub lo: Vec<usize>,
    pub hi: Vec<usize>,
    pub frac: Vec<f32>,
}

pub fn bilinear_taps(in_len: usize, out_len: usize) -> BilinearTaps {
    let scale = in_len as f32 / out_len as f32;
    let mut lo = Vec::with_capacity(out_len);
    let mut hi = Vec::with_capacity(out_len);
    let mut frac = Vec::with_capacity(out_len);
    for o in 0..out_len {
        let src = ((o as f32 + 0.5) * scale - 0.5).max(0.0);
        let l = (src.floor() as usize).min(in_len - 1);
        let h = (l + 1).min(in_len - 1);
        lo.push(l);
        hi.push(h);
        frac.push(src - l as f32);
    }
    BilinearTaps { lo, hi, frac }
}

/// Bilinear resize to (oh, ow).
pub fn resize_bilinear(x: &ArrayView4<f32>, oh: usize, ow: usize) -> Array4<f32> {
    let (n, c, h, w) = x.dim();
    let ty = bilinear_taps(h, oh);
    let tx = bilinear_taps(w, ow);
    let mut out = Array4::<f32>::zeros((n, c, oh, ow));
    for i in 0..n {
        for ci in 0..c {
            let src = x.index_axis(Axis(0), i);
            let src = src.index_axis(Axis(0), ci);
            let mut dst = out.index_axis_mut(Axis(0), i);
            let mut dst = dst.index_axis_mut(Axis(0), ci);
            for y in 0..oh {
                let (y0, y1, fy) = (ty.lo[y], ty.hi[y], ty.frac[y]);
                for xx in 0..ow {
                    let (x0, x1, fx) = (tx.lo[xx], tx.hi[xx], tx.frac[xx]);
                    let v00 = src[[y0, x0]];
                    let v01 = src[[y0, x1]];
                    let v10 = src[[y1, x0]];
                    let v11 = src[[y1, x1]];
                    let top = v00 + (v01 - v00) * fx;
                    let bot = v10 + (v11 - v10) * fx;
                    dst[[y, xx]] = top + (bot - top) * fy;
                }
            }
        }
    }
    out
}

pub fn resize_bilinear_backward(
    grad_out: &ArrayView4<f32>,
    in_dim: (usize, usize, usize, usize),
) -> Array4<f32> {
    let (n, c, h, w) = in_dim;
    let (_, _, oh, ow) = grad_out.dim();
    let ty = bilinear_taps(h, oh);
    let tx = bilinear_taps(w, ow);
    let mut dx = Array4::<f32>::zeros((n, c, h, w));
    for i in 0..n {
        for ci in 0..c {
            let src = grad_out.index_axis(Axis(0), i);
            let src = src.index_axis(Axis(0), ci);
            let mut dst = dx.index_axis_mut(Axis(0), i);
            let mut dst = dst.index_axis_mut(Axis(0), ci);
            for y in 0..oh {
                let (y0, y1, fy) = (ty.lo[y], ty.hi[y], ty.frac[y]);
                for xx in 0..ow {
                    let (x0, x1, fx) = (tx.lo[xx], tx.hi[xx], tx.frac[xx]);
                    let g = src[[y, xx]];
                    dst[[y0, x0]] += g * (1.0 - fy) * (1.0 - fx);
                    dst[[y0, x1]] += g * (1.0 - fy) * fx;
                    dst[[y1, x0]] += g * fy * (1.0 - fx);
                    dst[[y1, x1]] += g * fy * fx;
                }
            }
        }
    }
    dx
}

/// Pooled mutable view helper for tests.
pub fn as_view4(a: &super::Arr) -> ArrayView4<f32> {
    a.view().into_dimensionality().expect("expected 4-d tensor")
}

#[allow(dead_code)]
pub fn as_view_mut4(a: &mut super::Arr) -> ArrayViewMut4<f32> {
    a.view_mut()
        .into_dimensionality()
        .expect("expected 4-d tensor")
}
