//! Deliberately naive reference implementations used as test oracles.
//! Feature maps are nested `[c][y][x]` vectors; nothing here calls into the
//! crate's kernels.

#![allow(dead_code)]

pub mod checks;

use fapnet::nn::{Conv2d, ParamStore};
use fapnet::Tensor;

pub type Fm = Vec<Vec<Vec<f64>>>;

pub fn to_fm(t: &Tensor) -> Fm {
    let (n, c, h, w) = t.dims4();
    assert_eq!(n, 1);
    let d = t.data();
    (0..c)
        .map(|ci| (0..h).map(|y| (0..w).map(|x| d[(ci * h + y) * w + x]).collect()).collect())
        .collect()
}

pub fn from_fm(f: &Fm) -> Tensor {
    let (c, h, w) = (f.len(), f[0].len(), f[0][0].len());
    let mut v = Vec::with_capacity(c * h * w);
    for ch in f {
        for row in ch {
            v.extend_from_slice(row);
        }
    }
    Tensor::from_vec(&[1, c, h, w], v).unwrap()
}

pub fn max_diff(a: &Fm, b: &Fm) -> f64 {
    let mut m: f64 = 0.0;
    for (ca, cb) in a.iter().zip(b) {
        for (ra, rb) in ca.iter().zip(cb) {
            for (x, y) in ra.iter().zip(rb) {
                m = m.max((x - y).abs());
            }
        }
    }
    m
}

/// Stride-1 "same" convolution with zero padding, read straight from the store.
pub fn conv(store: &ParamStore, layer: &Conv2d, x: &Fm) -> Fm {
    let w = store.get(layer.weight);
    let (co, ci, k, _) = w.dims4();
    assert_eq!(ci, x.len());
    let wd = w.data();
    let bias = layer.bias.map(|b| store.get(b).data().to_vec());
    let (h, wd_) = (x[0].len(), x[0][0].len());
    let pad = (k / 2) as isize;
    let mut out = vec![vec![vec![0.0; wd_]; h]; co];
    for o in 0..co {
        for y in 0..h {
            for xx in 0..wd_ {
                let mut acc = bias.as_ref().map_or(0.0, |b| b[o]);
                for i in 0..ci {
                    for ky in 0..k {
                        for kx in 0..k {
                            let sy = y as isize + ky as isize - pad;
                            let sx = xx as isize + kx as isize - pad;
                            if sy < 0 || sx < 0 || sy >= h as isize || sx >= wd_ as isize {
                                continue;
                            }
                            acc += wd[((o * ci + i) * k + ky) * k + kx] * x[i][sy as usize][sx as usize];
                        }
                    }
                }
                out[o][y][xx] = acc;
            }
        }
    }
    out
}

pub fn relu(x: &Fm) -> Fm {
    x.iter().map(|c| c.iter().map(|r| r.iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect()).collect()).collect()
}

pub fn zip(a: &Fm, b: &Fm, f: impl Fn(f64, f64) -> f64) -> Fm {
    a.iter()
        .zip(b)
        .map(|(ca, cb)| ca.iter().zip(cb).map(|(ra, rb)| ra.iter().zip(rb).map(|(&x, &y)| f(x, y)).collect()).collect())
        .collect()
}

pub fn add(a: &Fm, b: &Fm) -> Fm {
    zip(a, b, |x, y| x + y)
}

pub fn sig(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

/// Bilinear resize with half-pixel sample positions, edges clamped.
pub fn upsample(x: &Fm, oh: usize, ow: usize) -> Fm {
    let (h, w) = (x[0].len(), x[0][0].len());
    let pos = |o: usize, out: usize, inp: usize| -> (usize, usize, f64) {
        let s = ((o as f64 + 0.5) * inp as f64 / out as f64 - 0.5).max(0.0);
        let i0 = (s.floor() as usize).min(inp - 1);
        let i1 = (i0 + 1).min(inp - 1);
        (i0, i1, s - i0 as f64)
    };
    x.iter()
        .map(|ch| {
            (0..oh)
                .map(|y| {
                    let (y0, y1, fy) = pos(y, oh, h);
                    (0..ow)
                        .map(|xx| {
                            let (x0, x1, fx) = pos(xx, ow, w);
                            let top = ch[y0][x0] * (1.0 - fx) + ch[y0][x1] * fx;
                            let bot = ch[y1][x0] * (1.0 - fx) + ch[y1][x1] * fx;
                            top * (1.0 - fy) + bot * fy
                        })
                        .collect()
                })
                .collect()
        })
        .collect()
}

/// Multi-scale aggregation written out line by line (no normalization).
pub fn mfam(store: &ParamStore, m: &fapnet::mfam::Mfam, f: &Fm) -> Fm {
    let f1 = conv(store, &m.proj[0], f);
    let f2 = conv(store, &m.proj[1], f);
    let f3 = conv(store, &m.proj[2], f);
    let a = relu(&conv(store, &m.stream3.conv, &f1));
    let b = relu(&conv(store, &m.stream5.conv, &f2));
    let ab = add(&a, &b);
    let t3 = relu(&conv(store, &m.mix3.conv, &ab));
    let t5 = relu(&conv(store, &m.mix5.conv, &ab));
    let fused = add(&add(&zip(&t3, &t5, |x, y| x * y), &a), &b);
    add(&relu(&conv(store, &m.out.conv, &fused)), &f3)
}

pub fn cfpm_fuse(store: &ParamStore, c: &fapnet::cfpm::CfpmFuse, hi: &Fm, lo: &Fm) -> Fm {
    let up = upsample(hi, lo[0].len(), lo[0][0].len());
    let att: Fm = conv(store, &c.attention, &add(&up, lo))
        .iter()
        .map(|ch| ch.iter().map(|r| r.iter().map(|&v| sig(v)).collect()).collect())
        .collect();
    let en_hi = add(&up, &zip(&att, &up, |a, x| a * x));
    let en_lo = add(lo, &zip(&att, lo, |a, x| a * x));
    conv(store, &c.out, &add(&conv(store, &c.smooth_hi, &en_hi), &conv(store, &c.smooth_lo, &en_lo)))
}

/// Returns `(output, w1, w2, p1, p2)`; the gates are `[y][x]` planes.
pub fn cfpm_propagate(
    store: &ParamStore,
    c: &fapnet::cfpm::CfpmPropagate,
    fused: &Fm,
    prev: &Fm,
) -> (Fm, Vec<Vec<f64>>, Vec<Vec<f64>>, Fm, Fm) {
    let (h, w) = (fused[0].len(), fused[0][0].len());
    let p1 = conv(store, &c.from_fused, fused);
    let p2 = conv(store, &c.from_prev, &upsample(prev, h, w));
    let mut cat = p1.clone();
    cat.extend(p2.iter().cloned());
    let g = conv(store, &c.gate, &cat);
    let mut w1 = vec![vec![0.0; w]; h];
    let mut w2 = vec![vec![0.0; w]; h];
    for y in 0..h {
        for x in 0..w {
            let (e1, e2) = (g[0][y][x].exp(), g[1][y][x].exp());
            w1[y][x] = e1 / (e1 + e2);
            w2[y][x] = e2 / (e1 + e2);
        }
    }
    let out = (0..p1.len())
        .map(|ci| (0..h).map(|y| (0..w).map(|x| w1[y][x] * p1[ci][y][x] + w2[y][x] * p2[ci][y][x]).collect()).collect())
        .collect();
    (out, w1, w2, p1, p2)
}

/// Hard-pixel weight by direct window scan over in-frame pixels.
pub fn omega(t: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let (h, w) = (t.len(), t[0].len());
    let mut out = vec![vec![0.0; w]; h];
    for y in 0..h {
        for x in 0..w {
            let (mut s, mut n) = (0.0, 0.0);
            for dy in -15isize..=15 {
                for dx in -15isize..=15 {
                    let (yy, xx) = (y as isize + dy, x as isize + dx);
                    if yy >= 0 && xx >= 0 && (yy as usize) < h && (xx as usize) < w {
                        s += t[yy as usize][xx as usize];
                        n += 1.0;
                    }
                }
            }
            out[y][x] = 1.0 + 5.0 * (s / n - t[y][x]).abs();
        }
    }
    out
}

pub fn grid(t: &Tensor) -> Vec<Vec<f64>> {
    let s = t.shape();
    let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
    (0..h).map(|y| t.data()[y * w..(y + 1) * w].to_vec()).collect()
}

pub fn wbce_loop(logit: &Tensor, target: &Tensor) -> f64 {
    let (x, t) = (grid(logit), grid(target));
    let om = omega(&t);
    let (mut num, mut den) = (0.0, 0.0);
    for y in 0..x.len() {
        for i in 0..x[0].len() {
            let p = sig(x[y][i]);
            let bce = -(t[y][i] * p.ln() + (1.0 - t[y][i]) * (1.0 - p).ln());
            num += om[y][i] * bce;
            den += om[y][i];
        }
    }
    num / den
}

pub fn wiou_loop(logit: &Tensor, target: &Tensor) -> f64 {
    let (x, t) = (grid(logit), grid(target));
    let om = omega(&t);
    let (mut inter, mut union) = (0.0, 0.0);
    for y in 0..x.len() {
        for i in 0..x[0].len() {
            let p = sig(x[y][i]);
            inter += om[y][i] * p * t[y][i];
            union += om[y][i] * (p + t[y][i] - p * t[y][i]);
        }
    }
    1.0 - (inter + 1.0) / (union + 1.0)
}

pub fn edge_bce_loop(pred: &Tensor, target: &Tensor) -> f64 {
    let mut s = 0.0;
    for (&p, &t) in pred.data().iter().zip(target.data()) {
        let p = p.clamp(1e-7, 1.0 - 1e-7);
        s += -(t * p.ln() + (1.0 - t) * (1.0 - p).ln());
    }
    s / pred.len() as f64
}

/// Threshold `k / 255` for `k = 0..=255`.
pub fn tau(k: usize) -> f64 {
    k as f64 / 255.0
}

/// `(precision, recall)` for each threshold by brute-force pixel counting.
pub fn pr_loop(pred: &[f64], gt: &[f64]) -> Vec<(f64, f64)> {
    (0..256)
        .map(|k| {
            let (mut m, mut tp, mut g) = (0.0, 0.0, 0.0);
            for (&p, &t) in pred.iter().zip(gt) {
                let sel = p >= tau(k);
                if sel {
                    m += 1.0;
                }
                if t == 1.0 {
                    g += 1.0;
                    if sel {
                        tp += 1.0;
                    }
                }
            }
            let precision = if m == 0.0 { 1.0 } else { tp / m };
            let recall = if g == 0.0 { 0.0 } else { tp / g };
            (precision, recall)
        })
        .collect()
}

pub fn f_loop(pred: &[f64], gt: &[f64], beta2: f64) -> Vec<f64> {
    pr_loop(pred, gt)
        .into_iter()
        .map(|(p, r)| if beta2 * p + r == 0.0 { 0.0 } else { (1.0 + beta2) * p * r / (beta2 * p + r) })
        .collect()
}

pub fn mae_loop(pred: &[f64], gt: &[f64]) -> f64 {
    let mut s = 0.0;
    for i in 0..pred.len() {
        s += (pred[i] - gt[i]).abs();
    }
    s / pred.len() as f64
}

const EPS: f64 = 2.220446049250313e-16;

/// Structure measure, second implementation: quadrants are copied out as
/// separate matrices and statistics use two-pass sums.
pub fn s_measure_ref(pred: &[Vec<f64>], gt: &[Vec<f64>], alpha: f64) -> f64 {
    let h = gt.len();
    let w = gt[0].len();
    let n = (h * w) as f64;
    let gt_mean: f64 = gt.iter().flatten().sum::<f64>() / n;
    let pred_mean: f64 = pred.iter().flatten().sum::<f64>() / n;
    if gt_mean == 0.0 {
        return 1.0 - pred_mean;
    }
    if gt_mean == 1.0 {
        return pred_mean;
    }

    let score_of = |vals: &[f64]| -> f64 {
        let k = vals.len() as f64;
        let m = vals.iter().sum::<f64>() / k;
        let sd = if vals.len() < 2 {
            0.0
        } else {
            (vals.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (k - 1.0)).sqrt()
        };
        2.0 * m / (m * m + 1.0 + sd + EPS)
    };
    let mut fg = Vec::new();
    let mut bg = Vec::new();
    for y in 0..h {
        for x in 0..w {
            if gt[y][x] == 1.0 {
                fg.push(pred[y][x]);
            } else {
                bg.push(1.0 - pred[y][x]);
            }
        }
    }
    let object = gt_mean * score_of(&fg) + (1.0 - gt_mean) * score_of(&bg);

    // centroid split, 1-based index after rounding half to even
    let mut cnt = 0.0;
    let (mut ys, mut xs) = (0.0, 0.0);
    for y in 0..h {
        for x in 0..w {
            if gt[y][x] == 1.0 {
                cnt += 1.0;
                ys += y as f64;
                xs += x as f64;
            }
        }
    }
    let round_even = |v: f64| -> f64 {
        let f = v.floor();
        let d = v - f;
        if d > 0.5 || (d == 0.5 && (f as i64) % 2 != 0) {
            f + 1.0
        } else {
            f
        }
    };
    let cy = (round_even(ys / cnt) as usize + 1).min(h);
    let cx = (round_even(xs / cnt) as usize + 1).min(w);
    let quad = |r0: usize, r1: usize, c0: usize, c1: usize| -> (Vec<f64>, Vec<f64>) {
        let mut p = Vec::new();
        let mut g = Vec::new();
        for y in r0..r1 {
            for x in c0..c1 {
                p.push(pred[y][x]);
                g.push(gt[y][x]);
            }
        }
        (p, g)
    };
    let ssim = |p: &[f64], g: &[f64]| -> f64 {
        let k = p.len() as f64;
        let mx = p.iter().sum::<f64>() / k;
        let my = g.iter().sum::<f64>() / k;
        let (mut vx, mut vy, mut cxy) = (0.0, 0.0, 0.0);
        if p.len() > 1 {
            for i in 0..p.len() {
                vx += (p[i] - mx).powi(2);
                vy += (g[i] - my).powi(2);
                cxy += (p[i] - mx) * (g[i] - my);
            }
            vx /= k - 1.0;
            vy /= k - 1.0;
            cxy /= k - 1.0;
        }
        let a = 4.0 * mx * my * cxy;
        let b = (mx * mx + my * my) * (vx + vy);
        if a != 0.0 {
            a / (b + EPS)
        } else if b == 0.0 {
            1.0
        } else {
            0.0
        }
    };
    let blocks = [(0, cy, 0, cx), (0, cy, cx, w), (cy, h, 0, cx), (cy, h, cx, w)];
    let mut region = 0.0;
    for (r0, r1, c0, c1) in blocks {
        let area = ((r1 - r0) * (c1 - c0)) as f64;
        if area == 0.0 {
            continue;
        }
        let (p, g) = quad(r0, r1, c0, c1);
        region += area / n * ssim(&p, &g);
    }
    let s = alpha * object + (1.0 - alpha) * region;
    if s < 0.0 {
        0.0
    } else {
        s
    }
}

/// Enhanced-alignment curve, second implementation: per-pixel alignment matrix.
pub fn e_curve_ref(pred: &[f64], gt: &[f64]) -> Vec<f64> {
    let n = pred.len() as f64;
    let gsum: f64 = gt.iter().sum();
    (0..256)
        .map(|k| {
            let bin: Vec<f64> = pred.iter().map(|&p| if p >= tau(k) { 1.0 } else { 0.0 }).collect();
            let enhanced: Vec<f64> = if gsum == 0.0 {
                bin.iter().map(|b| 1.0 - b).collect()
            } else if gsum == n {
                bin.clone()
            } else {
                let mb = bin.iter().sum::<f64>() / n;
                let mg = gsum / n;
                bin.iter()
                    .zip(gt)
                    .map(|(&b, &g)| {
                        let (a, c) = (b - mb, g - mg);
                        let align = 2.0 * a * c / (a * a + c * c + EPS);
                        (align + 1.0).powi(2) / 4.0
                    })
                    .collect()
            };
            enhanced.iter().sum::<f64>() / n
        })
        .collect()
}
