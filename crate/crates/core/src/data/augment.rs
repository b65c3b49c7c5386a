//! Joint geometric augmentation: horizontal flip, scale from a fixed set,
//! small rotation and a random crop/translation, applied identically to the
//! image and mask through one inverse mapping.

use rand::Rng;

use super::{extract_edge_gt, Sample};
use crate::tensor::Tensor;

pub const SCALE_CHOICES: [f64; 3] = [0.75, 1.0, 1.25];
const MAX_ROTATION_DEG: f64 = 15.0;
const MAX_REDRAWS: usize = 8;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AugmentParams {
    pub flip: bool,
    pub scale: f64,
    pub angle_deg: f64,
    /// Translation of the output window in pixels (the crop position).
    pub shift: (f64, f64),
}

impl AugmentParams {
    pub const IDENTITY: AugmentParams = AugmentParams {
        flip: false,
        scale: 1.0,
        angle_deg: 0.0,
        shift: (0.0, 0.0),
    };

    pub fn flip_only() -> Self {
        AugmentParams {
            flip: true,
            ..Self::IDENTITY
        }
    }

    pub fn sample<R: Rng + ?Sized>(rng: &mut R, size: usize) -> Self {
        let flip = rng.gen_bool(0.5);
        let scale = SCALE_CHOICES[rng.gen_range(0..SCALE_CHOICES.len())];
        let angle_deg = rng.gen_range(-MAX_ROTATION_DEG..=MAX_ROTATION_DEG);
        let slack = (scale - 1.0).abs() * size as f64 / 2.0;
        let shift = if slack > 0.0 {
            (rng.gen_range(-slack..=slack), rng.gen_range(-slack..=slack))
        } else {
            (0.0, 0.0)
        };
        AugmentParams {
            flip,
            scale,
            angle_deg,
            shift,
        }
    }

    /// Output pixel (x, y) -> fractional source pixel coordinates.
    fn source(&self, x: usize, y: usize, w: usize, h: usize) -> (f64, f64) {
        let (cx, cy) = (w as f64 / 2.0, h as f64 / 2.0);
        let (ux, uy) = (x as f64 + 0.5 - cx - self.shift.0, y as f64 + 0.5 - cy - self.shift.1);
        let (s, c) = self.angle_deg.to_radians().sin_cos();
        // inverse rotation, then inverse scale, then flip
        let (mut rx, ry) = ((c * ux + s * uy) / self.scale, (-s * ux + c * uy) / self.scale);
        if self.flip {
            rx = -rx;
        }
        (rx + cx - 0.5, ry + cy - 0.5)
    }

    /// Applies the transform to one sample. The edge map is re-derived from
    /// the transformed mask so it stays one pixel wide.
    pub fn apply(&self, sample: &Sample) -> Sample {
        let image = warp(&sample.image, self, false);
        let mask = warp(&sample.mask, self, true);
        let edge = extract_edge_gt(&mask).expect("warped mask is binary");
        Sample {
            image,
            mask,
            edge,
            id: sample.id.clone(),
        }
    }
}

/// Bilinear sample of a `[C, H, W]` tensor with zeros outside the frame.
fn warp(t: &Tensor, p: &AugmentParams, binarize: bool) -> Tensor {
    let (c, h, w) = match t.shape() {
        [c, h, w] => (*c, *h, *w),
        s => panic!("warp expects [C, H, W], got {s:?}"),
    };
    let src = t.data();
    let mut out = Tensor::zeros(t.shape());
    let at = |ci: usize, y: isize, x: isize| -> f64 {
        if y < 0 || x < 0 || y >= h as isize || x >= w as isize {
            0.0
        } else {
            src[ci * h * w + y as usize * w + x as usize]
        }
    };
    for y in 0..h {
        for x in 0..w {
            let (sx, sy) = p.source(x, y, w, h);
            let (x0, y0) = (sx.floor(), sy.floor());
            let (fx, fy) = (sx - x0, sy - y0);
            let (x0, y0) = (x0 as isize, y0 as isize);
            for ci in 0..c {
                let mut v = (at(ci, y0, x0) * (1.0 - fx) + at(ci, y0, x0 + 1) * fx) * (1.0 - fy);
                if fy != 0.0 {
                    v += (at(ci, y0 + 1, x0) * (1.0 - fx) + at(ci, y0 + 1, x0 + 1) * fx) * fy;
                }
                out.data_mut()[ci * h * w + y * w + x] = if binarize {
                    if v >= 0.5 {
                        1.0
                    } else {
                        0.0
                    }
                } else {
                    v.clamp(0.0, 1.0)
                };
            }
        }
    }
    out
}

/// Draws a random transform and applies it. Draws that would wipe out all
/// foreground of a non-empty mask are redrawn; after repeated failures the
/// sample is returned unchanged.
pub fn augment<R: Rng + ?Sized>(sample: &Sample, rng: &mut R) -> Sample {
    let size = sample.mask.shape()[2];
    let had_fg = sample.mask.sum() > 0.0;
    for _ in 0..MAX_REDRAWS {
        let out = AugmentParams::sample(rng, size).apply(sample);
        if !had_fg || out.mask.sum() > 0.0 {
            return out;
        }
    }
    sample.clone()
}
