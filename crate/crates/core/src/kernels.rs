//! Raw numerical kernels on `[N, C, H, W]` buffers: convolution through
//! im2col + GEMM, pooling, and the adjoints of each.

use crate::tensor::{bilinear_taps, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_len(&self, len: usize) -> usize {
        (len + 2 * self.pad - self.kernel) / self.stride + 1
    }
}

/// `c = a · b + beta · c` for logical shapes `a: m×k`, `b: k×n`, `c: m×n`
/// (all row-major unless the matching `*_t` flag says the buffer holds the transpose).
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_t: bool,
    b: &[f64],
    b_t: bool,
    beta: f64,
    c: &mut [f64],
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the strides above describe exactly the buffers whose lengths are checked.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Patch matrix `[C·k·k, N·OH·OW]`.
fn im2col(x: &Tensor, g: ConvGeom) -> (Vec<f64>, usize, usize) {
    let (n, c, h, w) = x.dims4();
    let (oh, ow) = (g.out_len(h), g.out_len(w));
    let k = g.kernel;
    let cols_n = n * oh * ow;
    let mut cols = vec![0.0; c * k * k * cols_n];
    let src = x.data();
    for ci in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let dst = &mut cols[row * cols_n..(row + 1) * cols_n];
                for b in 0..n {
                    let plane = &src[(b * c + ci) * h * w..(b * c + ci + 1) * h * w];
                    for oy in 0..oh {
                        let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                        let base = (b * oh + oy) * ow;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let line = &plane[iy as usize * w..(iy as usize + 1) * w];
                        for ox in 0..ow {
                            let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                            if ix >= 0 && ix < w as isize {
                                dst[base + ox] = line[ix as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    (cols, oh, ow)
}

fn col2im(cols: &[f64], shape: (usize, usize, usize, usize), g: ConvGeom) -> Tensor {
    let (n, c, h, w) = shape;
    let (oh, ow) = (g.out_len(h), g.out_len(w));
    let k = g.kernel;
    let cols_n = n * oh * ow;
    let mut dx = Tensor::zeros(&[n, c, h, w]);
    let dst = dx.data_mut();
    for ci in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let src = &cols[row * cols_n..(row + 1) * cols_n];
                for b in 0..n {
                    let plane = &mut dst[(b * c + ci) * h * w..(b * c + ci + 1) * h * w];
                    for oy in 0..oh {
                        let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let base = (b * oh + oy) * ow;
                        for ox in 0..ow {
                            let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                            if ix >= 0 && ix < w as isize {
                                plane[iy as usize * w + ix as usize] += src[base + ox];
                            }
                        }
                    }
                }
            }
        }
    }
    dx
}

/// `[N, O, H, W]` <-> `[O, N·H·W]`.
fn nchw_to_cmajor(t: &Tensor) -> Vec<f64> {
    let (n, c, h, w) = t.dims4();
    let hw = h * w;
    let mut out = vec![0.0; t.len()];
    let src = t.data();
    for b in 0..n {
        for ci in 0..c {
            out[ci * n * hw + b * hw..ci * n * hw + (b + 1) * hw]
                .copy_from_slice(&src[(b * c + ci) * hw..(b * c + ci + 1) * hw]);
        }
    }
    out
}

fn cmajor_to_nchw(m: &[f64], shape: (usize, usize, usize, usize)) -> Tensor {
    let (n, c, h, w) = shape;
    let hw = h * w;
    let mut out = Tensor::zeros(&[n, c, h, w]);
    let dst = out.data_mut();
    for b in 0..n {
        for ci in 0..c {
            dst[(b * c + ci) * hw..(b * c + ci + 1) * hw]
                .copy_from_slice(&m[ci * n * hw + b * hw..ci * n * hw + (b + 1) * hw]);
        }
    }
    out
}

pub fn conv2d_forward(x: &Tensor, w: &Tensor, bias: Option<&Tensor>, g: ConvGeom) -> Tensor {
    let (n, _, _, _) = x.dims4();
    let (o, ci, kh, kw) = w.dims4();
    debug_assert_eq!((kh, kw), (g.kernel, g.kernel));
    let (cols, oh, ow) = im2col(x, g);
    let p = n * oh * ow;
    let mut ym = vec![0.0; o * p];
    gemm(o, ci * kh * kw, p, w.data(), false, &cols, false, 0.0, &mut ym);
    if let Some(b) = bias {
        for (oc, &bv) in b.data().iter().enumerate() {
            for v in &mut ym[oc * p..(oc + 1) * p] {
                *v += bv;
            }
        }
    }
    cmajor_to_nchw(&ym, (n, o, oh, ow))
}

pub struct ConvGrads {
    pub dx: Tensor,
    pub dw: Tensor,
    pub db: Tensor,
}

pub fn conv2d_backward(x: &Tensor, w: &Tensor, dy: &Tensor, g: ConvGeom, need_dx: bool) -> ConvGrads {
    let (o, ci, kh, kw) = w.dims4();
    let kk = ci * kh * kw;
    let dym = nchw_to_cmajor(dy);
    let p = dym.len() / o;
    let db: Vec<f64> = (0..o).map(|oc| dym[oc * p..(oc + 1) * p].iter().sum()).collect();
    let (cols, _, _) = im2col(x, g);
    let mut dw = vec![0.0; o * kk];
    gemm(o, p, kk, &dym, false, &cols, true, 0.0, &mut dw);
    let dx = if need_dx {
        drop(cols);
        let mut dcols = vec![0.0; kk * p];
        gemm(kk, o, p, w.data(), true, &dym, false, 0.0, &mut dcols);
        col2im(&dcols, x.dims4(), g)
    } else {
        Tensor::zeros(&[0])
    };
    ConvGrads {
        dx,
        dw: Tensor::from_vec(&[o, ci, kh, kw], dw).expect("dw shape"),
        db: Tensor::from_vec(&[o], db).expect("db shape"),
    }
}

/// Max pooling; returns the output and the flat argmax index into `x` per output.
pub fn max_pool_forward(x: &Tensor, g: ConvGeom) -> (Tensor, Vec<usize>) {
    let (n, c, h, w) = x.dims4();
    let (oh, ow) = (g.out_len(h), g.out_len(w));
    let mut out = Tensor::zeros(&[n, c, oh, ow]);
    let mut arg = vec![0; n * c * oh * ow];
    let src = x.data();
    let dst = out.data_mut();
    for p in 0..n * c {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = f64::NEG_INFINITY;
                let mut best_i = 0;
                for ky in 0..g.kernel {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kx in 0..g.kernel {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        let i = p * h * w + iy as usize * w + ix as usize;
                        if src[i] > best {
                            best = src[i];
                            best_i = i;
                        }
                    }
                }
                let o = p * oh * ow + oy * ow + ox;
                dst[o] = best;
                arg[o] = best_i;
            }
        }
    }
    (out, arg)
}

/// Average pooling counting zero padding in the divisor.
pub fn avg_pool_forward(x: &Tensor, g: ConvGeom) -> Tensor {
    let (n, c, h, w) = x.dims4();
    let (oh, ow) = (g.out_len(h), g.out_len(w));
    let norm = 1.0 / (g.kernel * g.kernel) as f64;
    let mut out = Tensor::zeros(&[n, c, oh, ow]);
    let src = x.data();
    let dst = out.data_mut();
    for p in 0..n * c {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = 0.0;
                for ky in 0..g.kernel {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kx in 0..g.kernel {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < w as isize {
                            acc += src[p * h * w + iy as usize * w + ix as usize];
                        }
                    }
                }
                dst[p * oh * ow + oy * ow + ox] = acc * norm;
            }
        }
    }
    out
}

pub fn avg_pool_backward(shape: (usize, usize, usize, usize), dy: &Tensor, g: ConvGeom) -> Tensor {
    let (n, c, h, w) = shape;
    let (_, _, oh, ow) = dy.dims4();
    let norm = 1.0 / (g.kernel * g.kernel) as f64;
    let mut dx = Tensor::zeros(&[n, c, h, w]);
    let src = dy.data();
    let dst = dx.data_mut();
    for p in 0..n * c {
        for oy in 0..oh {
            for ox in 0..ow {
                let gv = src[p * oh * ow + oy * ow + ox] * norm;
                for ky in 0..g.kernel {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kx in 0..g.kernel {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < w as isize {
                            dst[p * h * w + iy as usize * w + ix as usize] += gv;
                        }
                    }
                }
            }
        }
    }
    dx
}

/// Adjoint of [`crate::tensor::resize_bilinear`].
pub fn resize_bilinear_backward(dy: &Tensor, in_h: usize, in_w: usize) -> Tensor {
    let (n, c, oh, ow) = dy.dims4();
    if oh == in_h && ow == in_w {
        return dy.clone();
    }
    let ty = bilinear_taps(in_h, oh);
    let tx = bilinear_taps(in_w, ow);
    let mut dx = Tensor::zeros(&[n, c, in_h, in_w]);
    let src = dy.data();
    let dst = dx.data_mut();
    for p in 0..n * c {
        let gplane = &src[p * oh * ow..(p + 1) * oh * ow];
        let plane = &mut dst[p * in_h * in_w..(p + 1) * in_h * in_w];
        for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
            for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                let gv = gplane[oy * ow + ox];
                plane[y0 * in_w + x0] += gv * (1.0 - fy) * (1.0 - fx);
                plane[y0 * in_w + x1] += gv * (1.0 - fy) * fx;
                plane[y1 * in_w + x0] += gv * fy * (1.0 - fx);
                plane[y1 * in_w + x1] += gv * fy * fx;
            }
        }
    }
    dx
}
